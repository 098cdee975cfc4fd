//! `rmih`: generate data, train, check gradients, index, query, evaluate and
//! run the ablation grid.
//!
//! Exit codes: 0 success, 1 verification failure, 2 usage or input error.

mod config;
mod manifest;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rmih_core::data::{generate_synthetic, load_bags, save_bags, split, SyntheticSpec};
use rmih_core::experiment::{run_variant, write_ablation_csv, AblationCell, RunResult, Variant};
use rmih_core::net::init_params;
use rmih_core::retrieval::{build_index, encode_bags, evaluate};
use rmih_core::train::{checkpoint_path, composite_gradcheck, train_from, Robust, TrainState};
use rmih_core::{Bag, BagDataset, Checkpoint, IndexMode, Matrix, PoolMode, RetrievalIndex, Rng};

use config::ConfigArgs;
use manifest::RunManifest;

#[derive(Debug, Parser)]
#[command(name = "rmih", version, about = "Robust multiple-instance hashing")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic bag dataset.
    GenData(GenDataArgs),
    /// Train a model and write checkpoints, the epoch log and a manifest.
    Train(TrainArgs),
    /// Finite-difference check of the full objective on a generated batch.
    Gradcheck(GradcheckArgs),
    /// Encode a dataset into a retrieval index.
    Index(IndexArgs),
    /// Print the nearest database bags for one bag.
    Query(QueryArgs),
    /// Score held-out queries against an index.
    Eval(EvalArgs),
    /// Median nnCA and mAP over seeds for each ablation variant.
    Ablate(AblateArgs),
}

#[derive(Debug, Args)]
struct GenDataArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    bags_per_class: Option<usize>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    min_bag: Option<usize>,
    #[arg(long)]
    max_bag: Option<usize>,
    #[arg(long)]
    witness_rate: Option<f64>,
    #[arg(long)]
    concept_scale: Option<f64>,
    /// Manifest path; defaults to `<out>.manifest.json`.
    #[arg(long)]
    manifest: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    /// Continue from this checkpoint instead of a fresh initialisation.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[command(flatten)]
    cfg: ConfigArgs,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = PoolMode::Max)]
    pool: PoolMode,
    #[arg(long, default_value_t = Robust::Huber)]
    robust: Robust,
    /// Epoch whose loss weights and threshold warm-up are used.
    #[arg(long, default_value_t = 2)]
    epoch: usize,
    #[arg(long, default_value_t = 1e-4)]
    eps: f64,
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
    /// Perturb one analytic gradient entry; the check must then fail.
    #[arg(long)]
    corrupt: bool,
}

#[derive(Debug, Args)]
struct IndexArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// bag_code | instance_codes
    #[arg(long, default_value_t = IndexMode::BagCode)]
    mode: IndexMode,
}

#[derive(Debug, Args)]
struct QueryArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    index: PathBuf,
    /// Dataset containing the query bag.
    #[arg(long)]
    data: PathBuf,
    /// Id of the query bag within `--data`.
    #[arg(long)]
    id: String,
    #[arg(short, long, default_value_t = 10)]
    k: usize,
    /// Keep a database entry with the query's own id in the results.
    #[arg(long)]
    include_self: bool,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    index: PathBuf,
    #[arg(long)]
    queries: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Debug, Args)]
struct AblateArgs {
    /// Training bags; also the retrieval database.
    #[arg(long)]
    data: PathBuf,
    /// Held-out queries. Without it `--data` is split by `--train-fraction`.
    #[arg(long)]
    test: Option<PathBuf>,
    #[arg(long, default_value_t = 0.7)]
    train_fraction: f64,
    #[arg(long, default_value_t = 0)]
    split_seed: u64,
    /// Comma-separated variant names; all nine by default.
    #[arg(long, value_delimiter = ',')]
    variants: Option<Vec<Variant>>,
    #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
    seeds: Vec<u64>,
    /// Worker threads; each training run is sequential.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    #[arg(long)]
    out_dir: PathBuf,
    #[command(flatten)]
    cfg: ConfigArgs,
}

/// A check ran and did not pass; maps to exit code 1.
#[derive(Debug)]
struct VerificationFailed(String);

impl std::fmt::Display for VerificationFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for VerificationFailed {}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train_cmd(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::Index(a) => index_cmd(a),
        Command::Query(a) => query_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Ablate(a) => ablate_cmd(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.is::<VerificationFailed>() => {
            eprintln!("verification failed: {e}");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn load_dataset(path: &Path) -> Result<BagDataset> {
    load_bags(path).with_context(|| format!("loading dataset {}", path.display()))
}

fn load_model(path: &Path) -> Result<(Checkpoint, rmih_core::ModelParams)> {
    let ckpt = Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    let params = ckpt.params()?;
    Ok((ckpt, params))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn gen_data(a: GenDataArgs) -> Result<()> {
    let started = Instant::now();
    let mut spec = SyntheticSpec::default();
    macro_rules! apply {
        ($($f:ident),*) => { $(if let Some(v) = a.$f { spec.$f = v; })* };
    }
    apply!(classes, bags_per_class, dim, min_bag, max_bag, witness_rate, concept_scale);
    let ds = generate_synthetic(&mut Rng::new(a.seed), &spec)?;
    save_bags(&ds, &a.out).with_context(|| format!("writing {}", a.out.display()))?;

    let mut m = RunManifest::new("gen-data");
    m.seed = Some(a.seed);
    m.config(&spec)?;
    m.dataset("output", &ds)?;
    m.artifact(&a.out);
    m.timing("total", started.elapsed());
    let manifest = a.manifest.unwrap_or_else(|| sibling(&a.out, "manifest.json"));
    m.save(&manifest)?;
    println!("wrote {} bags ({} instances) to {}", ds.len(), ds.num_instances(), a.out.display());
    Ok(())
}

/// `<path>.<suffix>`, keeping the original extension.
fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_os_string();
    s.push(".");
    s.push(suffix);
    PathBuf::from(s)
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let started = Instant::now();
    let cfg = a.cfg.resolve()?;
    let ds = load_dataset(&a.data)?;
    let state = match &a.resume {
        Some(path) => {
            let ckpt = Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
            if ckpt.bits != cfg.bits || ckpt.pool_mode != cfg.pool {
                bail!("checkpoint has K={} pool={}, config asks for K={} pool={}", ckpt.bits, ckpt.pool_mode, cfg.bits, cfg.pool);
            }
            ckpt.state()?
        }
        None => TrainState::init(ds.dim(), &cfg)?,
    };
    create_dir(&a.out_dir)?;
    let first_epoch = state.epoch + 1;
    let fit_started = Instant::now();
    let (state, log) = train_from(&ds, &cfg, state, Some(&a.out_dir))?;
    let fit_elapsed = fit_started.elapsed();

    let model = a.out_dir.join("model.json");
    Checkpoint::from_state(&state, &cfg).save(&model)?;
    let log_path = a.out_dir.join("train_log.csv");
    log.save_csv(&log_path)?;

    let mut m = RunManifest::new("train");
    m.seed = Some(cfg.seed);
    m.config(&cfg)?;
    m.dataset("train", &ds)?;
    for t in first_epoch..=cfg.t_max {
        let p = checkpoint_path(&a.out_dir, t);
        if p.exists() {
            m.artifact(p);
        }
    }
    m.artifact(&model);
    m.artifact(&log_path);
    m.timing("train", fit_elapsed);
    m.timing("total", started.elapsed());
    m.save(&a.out_dir.join("manifest.json"))?;

    if let Some(last) = log.last() {
        println!(
            "epoch {} loss {:.6} quant_error {:.4} -> {}",
            last.epoch,
            last.j_total,
            last.quant_error,
            model.display()
        );
    } else {
        println!("checkpoint already at epoch {}; nothing to train", state.epoch);
    }
    Ok(())
}

fn gradcheck(a: GradcheckArgs) -> Result<()> {
    if a.epoch == 0 {
        bail!("--epoch must be at least 1");
    }
    let mut rng = Rng::new(a.seed);
    let (d, bits) = (5, 8);
    let params = init_params(&mut rng, d, &[8], 6, bits)?;
    let bags = (0..6)
        .map(|b| {
            let n = rng.range_inclusive(1, 4);
            let data = (0..n * d).map(|_| rng.normal()).collect();
            Bag::new(format!("g{b}"), format!("c{}", b % 3), Matrix::from_vec(n, d, data)?)
        })
        .collect::<rmih_core::Result<Vec<_>>>()?;
    let cfg = rmih_core::TrainConfig {
        pool: a.pool,
        robust: a.robust,
        hidden_dims: vec![8],
        dz: 6,
        bits,
        t_max: a.epoch.max(2),
        ..Default::default()
    };
    let report = composite_gradcheck(&params, &bags, &cfg, a.epoch, a.eps, a.tolerance, a.corrupt)?;
    println!("block,checked,max_rel_error");
    for b in &report.blocks {
        println!("{},{},{:.3e}", b.name, b.checked, b.max_rel_error);
    }
    println!("max_rel_error {:.3e} tolerance {:.1e}", report.max_rel_error, report.tolerance);
    if report.passed() {
        println!("PASS");
        return Ok(());
    }
    let detail = match &report.worst {
        Some(w) => format!(
            "worst coordinate {}[{}]: analytic {:.6e} numeric {:.6e} rel {:.3e}",
            w.block, w.index, w.analytic, w.numeric, w.rel_error
        ),
        None => "non-finite error".to_string(),
    };
    println!("FAIL {detail}");
    Err(VerificationFailed(detail).into())
}

fn index_cmd(a: IndexArgs) -> Result<()> {
    let (ckpt, params) = load_model(&a.model)?;
    let ds = load_dataset(&a.data)?;
    let entries = encode_bags(&params, ds.bags(), ckpt.pool_mode, a.mode == IndexMode::InstanceCodes)?;
    let index = build_index(entries, a.mode)?;
    index.save(&a.out).with_context(|| format!("writing index {}", a.out.display()))?;
    println!("indexed {} bags at K={} ({}) -> {}", index.len(), index.bits(), index.mode(), a.out.display());
    Ok(())
}

fn open_index(path: &Path, ckpt: &Checkpoint) -> Result<RetrievalIndex> {
    let index = RetrievalIndex::load(path).with_context(|| format!("loading index {}", path.display()))?;
    if index.bits() != ckpt.bits {
        bail!("index has K={} but the checkpoint produces K={}", index.bits(), ckpt.bits);
    }
    Ok(index)
}

fn query_cmd(a: QueryArgs) -> Result<()> {
    let (ckpt, params) = load_model(&a.model)?;
    let index = open_index(&a.index, &ckpt)?;
    let ds = load_dataset(&a.data)?;
    let bag = ds
        .bags()
        .iter()
        .find(|b| b.id == a.id)
        .ok_or_else(|| anyhow!("no bag with id '{}' in {}", a.id, a.data.display()))?;
    let with_instances = index.mode() == IndexMode::InstanceCodes;
    let query = encode_bags(&params, std::slice::from_ref(bag), ckpt.pool_mode, with_instances)?
        .pop()
        .expect("one bag in, one code out");
    let exclude = (!a.include_self).then_some(a.id.as_str());
    let hits = index.query_topk(&query, a.k, exclude)?;
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    writeln!(out, "rank,id,label,distance")?;
    for (rank, h) in hits.iter().enumerate() {
        writeln!(out, "{},{},{},{}", rank + 1, h.id, h.label, h.distance)?;
    }
    Ok(())
}

fn eval_cmd(a: EvalArgs) -> Result<()> {
    let started = Instant::now();
    let (ckpt, params) = load_model(&a.model)?;
    let index = open_index(&a.index, &ckpt)?;
    let queries = load_dataset(&a.queries)?;
    let with_instances = index.mode() == IndexMode::InstanceCodes;
    let encoded = encode_bags(&params, queries.bags(), ckpt.pool_mode, with_instances)?;
    let report = evaluate(&index, &encoded)?;

    create_dir(&a.out_dir)?;
    let metrics = a.out_dir.join("metrics.csv");
    let pr = a.out_dir.join("pr.csv");
    fs::write(
        &metrics,
        format!(
            "nnca,map,queries,skipped,latency_mean_us,latency_p99_us\n{:.6},{:.6},{},{},{:.3},{:.3}\n",
            report.nnca, report.map, report.queries, report.skipped, report.latency.mean_us, report.latency.p99_us
        ),
    )?;
    report.write_pr_csv(fs::File::create(&pr)?)?;

    let mut m = RunManifest::new("eval");
    m.seed = Some(ckpt.config.seed);
    m.config(&ckpt.config)?;
    m.dataset("queries", &queries)?;
    m.artifact(&metrics);
    m.artifact(&pr);
    m.timing("total", started.elapsed());
    m.save(&a.out_dir.join("manifest.json"))?;
    println!("nnCA {:.4} mAP {:.4} over {} queries", report.nnca, report.map, report.queries);
    Ok(())
}

fn ablate_cmd(a: AblateArgs) -> Result<()> {
    let started = Instant::now();
    let base = a.cfg.resolve()?;
    let variants = a.variants.clone().unwrap_or_else(|| Variant::ALL.to_vec());
    if variants.is_empty() || a.seeds.is_empty() {
        bail!("ablation needs at least one variant and one seed");
    }
    let data = load_dataset(&a.data)?;
    let (train_ds, test_ds) = match &a.test {
        Some(p) => (data, load_dataset(p)?),
        None => split(&data, &mut Rng::new(a.split_seed), a.train_fraction)?,
    };

    let jobs: Vec<(Variant, u64)> = variants.iter().flat_map(|&v| a.seeds.iter().map(move |&s| (v, s))).collect();
    let results: Vec<Mutex<Option<Result<RunResult>>>> = jobs.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    std::thread::scope(|scope| {
        for _ in 0..a.jobs.clamp(1, jobs.len()) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(&(variant, seed)) = jobs.get(i) else { break };
                let run = run_variant(&train_ds, &test_ds, &base, variant, seed).map_err(anyhow::Error::from);
                if let Ok(r) = &run {
                    eprintln!("{} seed {}: nnCA {:.4} mAP {:.4}", variant, seed, r.report.nnca, r.report.map);
                }
                *results[i].lock().expect("worker panicked") = Some(run);
            });
        }
    });

    let mut runs = Vec::with_capacity(jobs.len());
    for slot in results {
        runs.push(slot.into_inner().expect("worker panicked").expect("every job ran")?);
    }
    let cells: Vec<AblationCell> = variants
        .iter()
        .map(|&variant| {
            let mine: Vec<&RunResult> = runs.iter().filter(|r| r.variant == variant).collect();
            AblationCell {
                variant,
                seeds: mine.iter().map(|r| r.seed).collect(),
                nnca: mine.iter().map(|r| r.report.nnca).collect(),
                map: mine.iter().map(|r| r.report.map).collect(),
            }
        })
        .collect();

    create_dir(&a.out_dir)?;
    let table = a.out_dir.join("ablation.csv");
    write_ablation_csv(&cells, fs::File::create(&table)?)?;
    let runs_path = a.out_dir.join("runs.csv");
    let mut text = String::from("variant,seed,nnca,map,final_loss,final_quant_error\n");
    for r in &runs {
        let last = r.log.last();
        text.push_str(&format!(
            "{},{},{:.6},{:.6},{:.6},{:.6}\n",
            r.variant,
            r.seed,
            r.report.nnca,
            r.report.map,
            last.map_or(f64::NAN, |e| e.j_total),
            last.map_or(f64::NAN, |e| e.quant_error)
        ));
    }
    fs::write(&runs_path, text)?;

    #[derive(serde::Serialize)]
    struct AblationConfig<'a> {
        base: &'a rmih_core::TrainConfig,
        variants: Vec<&'static str>,
        seeds: &'a [u64],
        train_fraction: Option<f64>,
        split_seed: Option<u64>,
        runs: Vec<String>,
    }
    let mut m = RunManifest::new("ablate");
    m.config(&AblationConfig {
        base: &base,
        variants: variants.iter().map(|v| v.name()).collect(),
        seeds: &a.seeds,
        train_fraction: a.test.is_none().then_some(a.train_fraction),
        split_seed: a.test.is_none().then_some(a.split_seed),
        runs: runs.iter().map(|r| format!("{}/seed-{}", r.variant, r.seed)).collect(),
    })?;
    m.dataset("train", &train_ds)?;
    m.dataset("queries", &test_ds)?;
    m.artifact(&table);
    m.artifact(&runs_path);
    m.timing("total", started.elapsed());
    m.save(&a.out_dir.join("manifest.json"))?;

    println!("variant,median_nnca,median_map");
    for c in &cells {
        println!("{},{:.4},{:.4}", c.variant, c.median_nnca(), c.median_map());
    }
    Ok(())
}

