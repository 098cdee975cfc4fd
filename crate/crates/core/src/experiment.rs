//! Held-out evaluation runs and the ablation grid.
//!
//! The training split is the retrieval database; held-out bags are the
//! queries.

use serde::Serialize;

use crate::data::{generate_synthetic, inject_label_noise, split, BagDataset, SyntheticSpec};
use crate::error::{Error, Result};
use crate::net::{ModelParams, PoolMode};
use crate::numeric::{median, Rng};
use crate::retrieval::{build_index, embed_bags, encode_bags, evaluate, evaluate_embeddings, EvalReport, IndexMode};
use crate::train::{train, Robust, TrainConfig, TrainLog, Tradeoff};

/// Rows of the ablation table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum Variant {
    /// L2, equal weights.
    A,
    /// L2, decaying SI weight.
    B,
    /// Huber, equal weights.
    C,
    /// L2, no SI arm.
    D,
    /// Huber, no SI arm.
    E,
    RmihMean,
    RmihMax,
    /// Full model trained without the quantization term.
    RmihNoQuant,
    /// Full model retrieved with relaxed codes under Euclidean distance.
    RmihNb,
}

impl Variant {
    pub const ALL: [Variant; 9] = [
        Variant::A,
        Variant::B,
        Variant::C,
        Variant::D,
        Variant::E,
        Variant::RmihMean,
        Variant::RmihMax,
        Variant::RmihNoQuant,
        Variant::RmihNb,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::A => "A",
            Variant::B => "B",
            Variant::C => "C",
            Variant::D => "D",
            Variant::E => "E",
            Variant::RmihMean => "RMIH-mean",
            Variant::RmihMax => "RMIH-max",
            Variant::RmihNoQuant => "RMIH(lq=0)",
            Variant::RmihNb => "RMIH-NB",
        }
    }

    pub fn robust(self) -> Robust {
        match self {
            Variant::A | Variant::B | Variant::D => Robust::L2,
            _ => Robust::Huber,
        }
    }

    pub fn tradeoff(self) -> Tradeoff {
        match self {
            Variant::A | Variant::C => Tradeoff::Equal,
            Variant::D | Variant::E => Tradeoff::NoSi,
            _ => Tradeoff::Decay,
        }
    }

    pub fn non_binarized(self) -> bool {
        self == Variant::RmihNb
    }

    /// `base` with this row's robustness, trade-off, pooling and `λ_q`.
    /// Rows A–E and the λ_q/NB rows keep the base pooling mode.
    pub fn configure(self, base: &TrainConfig) -> TrainConfig {
        let mut cfg = base.clone();
        cfg.robust = self.robust();
        cfg.tradeoff = self.tradeoff();
        match self {
            Variant::RmihMean => cfg.pool = PoolMode::Mean,
            Variant::RmihMax => cfg.pool = PoolMode::Max,
            Variant::RmihNoQuant => cfg.lambda_q = 0.0,
            _ => {}
        }
        cfg
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::invalid(format!("unknown variant '{s}'")))
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// One synthetic train/test split.
#[derive(Debug, Clone)]
pub struct Holdout {
    /// Bags and labels the model is trained on (possibly noisy).
    pub train: BagDataset,
    /// The same bags under their true labels; the retrieval database.
    pub database: BagDataset,
    /// Held-out query bags.
    pub queries: BagDataset,
}

/// Generates, splits and optionally corrupts a synthetic dataset. Every step
/// draws from its own stream of `seed`.
pub fn synthetic_holdout(spec: &SyntheticSpec, seed: u64, train_fraction: f64, label_noise: f64) -> Result<Holdout> {
    let ds = generate_synthetic(&mut Rng::with_stream(seed, 1), spec)?;
    let (database, queries) = split(&ds, &mut Rng::with_stream(seed, 2), train_fraction)?;
    let train = inject_label_noise(&database, &mut Rng::with_stream(seed, 3), label_noise)?;
    Ok(Holdout {
        train,
        database,
        queries,
    })
}

/// Retrieval quality of a trained model on held-out queries.
pub fn evaluate_model(
    params: &ModelParams,
    db: &BagDataset,
    queries: &BagDataset,
    pool: PoolMode,
    mode: IndexMode,
    non_binarized: bool,
) -> Result<EvalReport> {
    if non_binarized {
        let db = embed_bags(params, db.bags(), pool)?;
        let q = embed_bags(params, queries.bags(), pool)?;
        return evaluate_embeddings(&db, &q);
    }
    let with_instances = mode == IndexMode::InstanceCodes;
    let index = build_index(encode_bags(params, db.bags(), pool, with_instances)?, mode)?;
    evaluate(&index, &encode_bags(params, queries.bags(), pool, with_instances)?)
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub variant: Variant,
    pub seed: u64,
    pub report: EvalReport,
    pub log: TrainLog,
    pub params: ModelParams,
}

/// Trains one variant with `seed` and evaluates it on `test`, using the
/// training bags as the database.
pub fn run_variant(
    train_ds: &BagDataset,
    test_ds: &BagDataset,
    base: &TrainConfig,
    variant: Variant,
    seed: u64,
) -> Result<RunResult> {
    run_variant_with_db(train_ds, train_ds, test_ds, base, variant, seed)
}

/// As [`run_variant`], with a separate database. `db_ds` holds the training
/// bags under the labels used for scoring (e.g. before label noise).
pub fn run_variant_with_db(
    train_ds: &BagDataset,
    db_ds: &BagDataset,
    test_ds: &BagDataset,
    base: &TrainConfig,
    variant: Variant,
    seed: u64,
) -> Result<RunResult> {
    let cfg = TrainConfig {
        seed,
        ..variant.configure(base)
    };
    let (params, log) = train(train_ds, &cfg)?;
    let report = evaluate_model(&params, db_ds, test_ds, cfg.pool, IndexMode::BagCode, variant.non_binarized())?;
    Ok(RunResult {
        variant,
        seed,
        report,
        log,
        params,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct AblationCell {
    pub variant: Variant,
    pub seeds: Vec<u64>,
    pub nnca: Vec<f64>,
    pub map: Vec<f64>,
}

impl AblationCell {
    pub fn median_nnca(&self) -> f64 {
        median(&self.nnca).unwrap_or(f64::NAN)
    }

    pub fn median_map(&self) -> f64 {
        median(&self.map).unwrap_or(f64::NAN)
    }
}

/// Every variant × seed; `on_run` sees each finished run (for progress and
/// manifests).
pub fn ablate<F>(
    train_ds: &BagDataset,
    test_ds: &BagDataset,
    base: &TrainConfig,
    variants: &[Variant],
    seeds: &[u64],
    mut on_run: F,
) -> Result<Vec<AblationCell>>
where
    F: FnMut(&RunResult),
{
    if variants.is_empty() || seeds.is_empty() {
        return Err(Error::invalid("ablation needs at least one variant and one seed"));
    }
    let mut cells = Vec::with_capacity(variants.len());
    for &variant in variants {
        let mut cell = AblationCell {
            variant,
            seeds: seeds.to_vec(),
            nnca: Vec::with_capacity(seeds.len()),
            map: Vec::with_capacity(seeds.len()),
        };
        for &seed in seeds {
            let run = run_variant(train_ds, test_ds, base, variant, seed)?;
            cell.nnca.push(run.report.nnca);
            cell.map.push(run.report.map);
            on_run(&run);
        }
        cells.push(cell);
    }
    Ok(cells)
}

/// Delimited ablation table with one row per cell.
pub fn write_ablation_csv<W: std::io::Write>(cells: &[AblationCell], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["variant", "robust", "tradeoff", "seeds", "median_nnca", "median_map"])?;
    for c in cells {
        out.write_record([
            c.variant.name().to_string(),
            c.variant.robust().to_string(),
            c.variant.tradeoff().to_string(),
            c.seeds.len().to_string(),
            format!("{:.6}", c.median_nnca()),
            format!("{:.6}", c.median_map()),
        ])?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, split, SyntheticSpec};
    use crate::numeric::Rng;

    #[test]
    fn variant_table() {
        let base = TrainConfig::default();
        let a = Variant::A.configure(&base);
        assert_eq!((a.robust, a.tradeoff), (Robust::L2, Tradeoff::Equal));
        let e = Variant::E.configure(&base);
        assert_eq!((e.robust, e.tradeoff), (Robust::Huber, Tradeoff::NoSi));
        assert_eq!(Variant::RmihMean.configure(&base).pool, PoolMode::Mean);
        assert_eq!(Variant::RmihNoQuant.configure(&base).lambda_q, 0.0);
        assert!(Variant::RmihNb.non_binarized());
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
        }
    }

    #[test]
    fn grid_runs_every_cell() {
        let spec = SyntheticSpec {
            classes: 2,
            bags_per_class: 6,
            dim: 4,
            ..SyntheticSpec::default()
        };
        let ds = generate_synthetic(&mut Rng::new(0), &spec).unwrap();
        let (tr, te) = split(&ds, &mut Rng::new(1), 0.5).unwrap();
        let base = TrainConfig {
            t_max: 2,
            batch_size: 4,
            hidden_dims: vec![4],
            dz: 4,
            bits: 8,
            ..TrainConfig::default()
        };
        let mut runs = 0;
        let cells = ablate(&tr, &te, &base, &[Variant::B, Variant::RmihNb], &[1, 2], |_| runs += 1).unwrap();
        assert_eq!(runs, 4);
        assert_eq!(cells.len(), 2);
        let mut buf = Vec::new();
        write_ablation_csv(&cells, &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 3);
    }
}
