//! Mini-batch SGD with classical momentum and per-epoch learning-rate decay.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{similarity_from_labels, Bag, BagDataset};
use crate::error::{Error, Result};
use crate::loss::{composite_loss, estimate_scale, quantization_error, tradeoff_schedule, CompositeLoss, LossWeights, Penalty};
use crate::net::{
    backward, finite_diff_check, forward_refs, init_params, Activation, Dense, ForwardTrace, GradCheckReport, Gradients,
    ModelParams, PoolMode,
};
use crate::numeric::{Matrix, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Robust {
    #[default]
    Huber,
    L2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tradeoff {
    /// Scheduled shift from the SI arm to the MI arm.
    #[default]
    Decay,
    /// `λ_MI = λ_SI = ½` throughout.
    Equal,
    /// SI arm disabled: `λ_MI = 1`, `λ_SI = 0`.
    NoSi,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScaleRefresh {
    /// Huber thresholds re-estimated from every mini-batch.
    #[default]
    Batch,
    /// Thresholds estimated once per epoch from the whole training set.
    Epoch,
}

/// How `λ_q` is scaled against a batch of `M` bags.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuantScale {
    /// `λ_q / M²`, the same per-pair normalisation the NCA terms carry.
    #[default]
    Pairs,
    /// `λ_q` applied to the raw sum.
    Sum,
}

macro_rules! parse_enum {
    ($ty:ty, $what:literal, { $($text:literal => $variant:expr),+ $(,)? }) => {
        impl std::str::FromStr for $ty {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($text => Ok($variant),)+
                    other => Err(Error::invalid(format!(concat!("unknown ", $what, " '{}'"), other))),
                }
            }
        }
        impl std::fmt::Display for $ty {
            fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
                $(if *self == $variant { return f.write_str($text); })+
                unreachable!()
            }
        }
    };
}

parse_enum!(Robust, "robust mode", { "huber" => Robust::Huber, "l2" => Robust::L2 });
parse_enum!(Tradeoff, "trade-off", { "decay" => Tradeoff::Decay, "equal" => Tradeoff::Equal, "no_si" => Tradeoff::NoSi });
parse_enum!(QuantScale, "quantization scale", { "pairs" => QuantScale::Pairs, "sum" => QuantScale::Sum });
parse_enum!(ScaleRefresh, "scale refresh", { "batch" => ScaleRefresh::Batch, "epoch" => ScaleRefresh::Epoch });

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub t_max: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub lr_decay: f64,
    pub momentum: f64,
    pub lambda_q: f64,
    pub lambda_w: f64,
    pub quant_scale: QuantScale,
    pub pool: PoolMode,
    pub robust: Robust,
    pub tradeoff: Tradeoff,
    pub scale_refresh: ScaleRefresh,
    pub seed: u64,
    pub hidden_dims: Vec<usize>,
    pub dz: usize,
    pub bits: usize,
    /// Save a checkpoint every this many epochs; 0 saves only the final one.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            t_max: 150,
            batch_size: 32,
            lr0: 0.01,
            lr_decay: 0.98,
            momentum: 0.9,
            lambda_q: 0.05,
            lambda_w: 0.001,
            quant_scale: QuantScale::Pairs,
            pool: PoolMode::Max,
            robust: Robust::Huber,
            tradeoff: Tradeoff::Decay,
            scale_refresh: ScaleRefresh::Batch,
            seed: 0,
            hidden_dims: vec![64],
            dz: 32,
            bits: 16,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: &str| Err(Error::invalid(msg));
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return fail("lr0 must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return fail("momentum must lie in [0, 1)");
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return fail("lr_decay must lie in (0, 1]");
        }
        if self.batch_size < 2 {
            return fail("batch_size must be >= 2");
        }
        if !(self.lambda_q >= 0.0 && self.lambda_w >= 0.0) || !self.lambda_q.is_finite() || !self.lambda_w.is_finite() {
            return fail("lambda_q and lambda_w must be finite and non-negative");
        }
        if self.bits == 0 || self.dz == 0 || self.hidden_dims.contains(&0) {
            return fail("layer widths and code length must be >= 1");
        }
        Ok(())
    }

    /// `(λ_MI, λ_SI)` used throughout epoch `t`.
    pub fn tradeoff_at(&self, t: usize) -> (f64, f64) {
        match self.tradeoff {
            Tradeoff::Decay => tradeoff_schedule(t as f64, self.t_max.max(1) as f64),
            Tradeoff::Equal => (0.5, 0.5),
            Tradeoff::NoSi => (1.0, 0.0),
        }
    }

    /// Loss weights for epoch `t` and a batch of `bags` bags.
    pub fn loss_weights(&self, t: usize, bags: usize) -> LossWeights {
        let (mi, si) = self.tradeoff_at(t);
        let quant = match self.quant_scale {
            QuantScale::Pairs => self.lambda_q / (bags * bags).max(1) as f64,
            QuantScale::Sum => self.lambda_q,
        };
        LossWeights {
            mi,
            si,
            quant,
            decay: self.lambda_w,
        }
    }
}

/// `lr0 · lr_decay^(t−1)`.
pub fn lr_at(t: usize, cfg: &TrainConfig) -> f64 {
    debug_assert!(t >= 1);
    cfg.lr0 * cfg.lr_decay.powi(t.saturating_sub(1) as i32)
}

/// Momentum buffers, zero-initialised.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub velocity: Gradients,
}

impl OptimizerState {
    pub fn new(params: &ModelParams) -> Self {
        OptimizerState {
            velocity: params.zero_grads(),
        }
    }
}

/// `v ← m·v − lr·g; θ ← θ + v`.
pub fn sgd_step(
    params: &mut ModelParams,
    grads: &Gradients,
    state: &mut OptimizerState,
    lr: f64,
    momentum: f64,
) -> Result<()> {
    let grad_blocks = grads.blocks();
    let param_sizes: Vec<usize> = params.blocks().iter().map(|(_, b)| b.len()).collect();
    let grad_sizes: Vec<usize> = grad_blocks.iter().map(|(_, b)| b.len()).collect();
    if param_sizes != grad_sizes {
        return Err(Error::shape("sgd_step", "gradients are not congruent with parameters"));
    }
    for (name, block) in &grad_blocks {
        if let Some(i) = block.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("gradient {name}[{i}] = {}", block[i])));
        }
    }
    for ((p, v), (_, g)) in params
        .blocks_mut()
        .into_iter()
        .zip(state.velocity.blocks_mut())
        .zip(&grad_blocks)
    {
        for ((pv, vv), gv) in p.iter_mut().zip(v.iter_mut()).zip(g.iter()) {
            *vv = momentum * *vv - lr * gv;
            *pv += *vv;
        }
    }
    Ok(())
}

/// One row of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub lambda_mi: f64,
    pub lambda_si: f64,
    /// Batch means of the composite objective and its parts.
    pub j_total: f64,
    pub j_mi: f64,
    pub j_si: f64,
    pub j_q: f64,
    pub r_w: f64,
    /// Mean `| |h^MI| − 1 |` over every bag seen this epoch.
    pub quant_error: f64,
    pub batches: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
}

impl TrainLog {
    pub fn len(&self) -> usize {
        self.epochs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.epochs.is_empty()
    }

    pub fn first(&self) -> Option<&EpochRecord> {
        self.epochs.first()
    }

    pub fn last(&self) -> Option<&EpochRecord> {
        self.epochs.last()
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        if self.epochs.is_empty() {
            out.write_record([
                "epoch", "lr", "lambda_mi", "lambda_si", "j_total", "j_mi", "j_si", "j_q", "r_w", "quant_error", "batches",
            ])?;
        }
        for rec in &self.epochs {
            out.serialize(rec)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_csv(BufWriter::new(File::create(path)?))
    }
}

/// Frozen Huber thresholds (or plain L2) for the two heads.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadPenalties {
    pub mi: Penalty,
    pub si: Penalty,
}

impl HeadPenalties {
    pub fn estimate(trace: &ForwardTrace, robust: Robust, epoch: usize) -> Result<Self> {
        Ok(match robust {
            Robust::L2 => HeadPenalties {
                mi: Penalty::L2,
                si: Penalty::L2,
            },
            Robust::Huber => HeadPenalties {
                mi: Penalty::Huber(estimate_scale(&trace.h_mi, epoch)?),
                si: Penalty::Huber(estimate_scale(&trace.h_si, epoch)?),
            },
        })
    }
}

/// Composite objective on one batch with the given thresholds.
pub fn batch_objective(
    params: &ModelParams,
    bags: &[&Bag],
    pool: PoolMode,
    penalties: &HeadPenalties,
    weights: &LossWeights,
) -> Result<(CompositeLoss, ForwardTrace)> {
    let trace = forward_refs(params, bags, pool)?;
    let loss = objective_from_trace(params, &trace, bags, penalties, weights)?;
    Ok((loss, trace))
}

fn objective_from_trace(
    params: &ModelParams,
    trace: &ForwardTrace,
    bags: &[&Bag],
    penalties: &HeadPenalties,
    weights: &LossWeights,
) -> Result<CompositeLoss> {
    let labels: Vec<&str> = bags.iter().map(|b| b.label.as_str()).collect();
    composite_loss(
        &trace.h_mi,
        &trace.h_si,
        &similarity_from_labels(&labels),
        &instance_similarity_refs(bags),
        &penalties.mi,
        &penalties.si,
        weights,
        params.weight_norm_sq(),
    )
}

fn instance_similarity_refs(bags: &[&Bag]) -> crate::data::SimilarityMatrix {
    let labels: Vec<&str> = bags
        .iter()
        .flat_map(|b| std::iter::repeat_n(b.label.as_str(), b.len()))
        .collect();
    similarity_from_labels(&labels)
}

/// Parameters plus optimizer state after `epoch` completed epochs.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub params: ModelParams,
    pub optimizer: OptimizerState,
    pub epoch: usize,
}

impl TrainState {
    pub fn init(dim: usize, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = Rng::with_stream(cfg.seed, 0);
        let params = init_params(&mut rng, dim, &cfg.hidden_dims, cfg.dz, cfg.bits)?;
        let optimizer = OptimizerState::new(&params);
        Ok(TrainState {
            params,
            optimizer,
            epoch: 0,
        })
    }
}

/// Runs epoch `t` in place and returns its log record.
pub fn train_epoch(
    params: &mut ModelParams,
    state: &mut OptimizerState,
    ds: &BagDataset,
    cfg: &TrainConfig,
    t: usize,
) -> Result<EpochRecord> {
    if ds.len() < 2 {
        return Err(Error::Empty("training needs at least two bags".into()));
    }
    if t == 0 {
        return Err(Error::invalid("epochs are numbered from 1"));
    }
    let bags = ds.bags();
    let mut order: Vec<usize> = (0..bags.len()).collect();
    Rng::with_stream(cfg.seed, t as u64).shuffle(&mut order);

    let (lambda_mi, lambda_si) = cfg.tradeoff_at(t);
    let lr = lr_at(t, cfg);
    let epoch_penalties = match cfg.scale_refresh {
        ScaleRefresh::Epoch => {
            let all: Vec<&Bag> = bags.iter().collect();
            let trace = forward_refs(params, &all, cfg.pool)?;
            Some(HeadPenalties::estimate(&trace, cfg.robust, t)?)
        }
        ScaleRefresh::Batch => None,
    };

    let mut sums = [0.0f64; 5];
    let mut quant_sum = 0.0;
    let mut quant_count = 0usize;
    let mut batches = 0usize;
    for chunk in order.chunks(cfg.batch_size) {
        if chunk.len() < 2 {
            continue;
        }
        let batch: Vec<&Bag> = chunk.iter().map(|&i| &bags[i]).collect();
        let trace = forward_refs(params, &batch, cfg.pool)?;
        let penalties = match &epoch_penalties {
            Some(p) => p.clone(),
            None => HeadPenalties::estimate(&trace, cfg.robust, t)?,
        };
        let weights = cfg.loss_weights(t, batch.len());
        let loss = objective_from_trace(params, &trace, &batch, &penalties, &weights)?;
        let grads = backward(params, &trace, &loss.d_h_mi, &loss.d_h_si, cfg.lambda_w)?;
        sgd_step(params, &grads, state, lr, cfg.momentum)
            .map_err(|e| Error::NonFinite(format!("epoch {t}, batch {batches}: {e}")))?;

        for (s, v) in sums.iter_mut().zip([loss.total, loss.j_mi, loss.j_si, loss.j_q, loss.r_w]) {
            *s += v;
        }
        let entries = trace.h_mi.as_slice().len();
        quant_sum += quantization_error(&trace.h_mi) * entries as f64;
        quant_count += entries;
        batches += 1;
    }
    if batches == 0 {
        return Err(Error::invalid("no batch of at least two bags in the dataset"));
    }
    let mean = |v: f64| v / batches as f64;
    Ok(EpochRecord {
        epoch: t,
        lr,
        lambda_mi,
        lambda_si,
        j_total: mean(sums[0]),
        j_mi: mean(sums[1]),
        j_si: mean(sums[2]),
        j_q: mean(sums[3]),
        r_w: mean(sums[4]),
        quant_error: quant_sum / quant_count as f64,
        batches,
    })
}

/// Trains from scratch for `cfg.t_max` epochs.
pub fn train(ds: &BagDataset, cfg: &TrainConfig) -> Result<(ModelParams, TrainLog)> {
    let state = TrainState::init(ds.dim(), cfg)?;
    let (state, log) = train_from(ds, cfg, state, None)?;
    Ok((state.params, log))
}

/// Continues training from `state` up to `cfg.t_max`, writing checkpoints
/// into `checkpoint_dir` when one is given.
pub fn train_from(
    ds: &BagDataset,
    cfg: &TrainConfig,
    mut state: TrainState,
    checkpoint_dir: Option<&Path>,
) -> Result<(TrainState, TrainLog)> {
    cfg.validate()?;
    if state.params.input_dim() != ds.dim() {
        return Err(Error::shape(
            "train",
            format!("model expects dimension {}, dataset has {}", state.params.input_dim(), ds.dim()),
        ));
    }
    let mut log = TrainLog::default();
    for t in state.epoch + 1..=cfg.t_max {
        let rec = train_epoch(&mut state.params, &mut state.optimizer, ds, cfg, t)?;
        log.epochs.push(rec);
        state.epoch = t;
        if let Some(dir) = checkpoint_dir {
            let periodic = cfg.checkpoint_every > 0 && t % cfg.checkpoint_every == 0;
            if periodic || t == cfg.t_max {
                Checkpoint::from_state(&state, cfg).save(checkpoint_path(dir, t))?;
            }
        }
    }
    Ok((state, log))
}

pub fn checkpoint_path(dir: &Path, epoch: usize) -> PathBuf {
    dir.join(format!("ckpt-epoch-{epoch}.json"))
}

/// Finite-difference check of the full composite objective at epoch `t`.
///
/// Huber thresholds are estimated once at the unperturbed parameters and then
/// held fixed, matching how training treats them.
pub fn composite_gradcheck(
    params: &ModelParams,
    bags: &[Bag],
    cfg: &TrainConfig,
    t: usize,
    eps: f64,
    tolerance: f64,
    corrupt: bool,
) -> Result<GradCheckReport> {
    let batch: Vec<&Bag> = bags.iter().collect();
    let trace = forward_refs(params, &batch, cfg.pool)?;
    let penalties = HeadPenalties::estimate(&trace, cfg.robust, t)?;
    let weights = cfg.loss_weights(t, batch.len());
    let (loss, trace) = batch_objective(params, &batch, cfg.pool, &penalties, &weights)?;
    let mut grads = backward(params, &trace, &loss.d_h_mi, &loss.d_h_si, cfg.lambda_w)?;
    if corrupt {
        grads.blocks_mut()[0][0] += 1.0;
    }
    let objective = |p: &ModelParams| {
        batch_objective(p, &batch, cfg.pool, &penalties, &weights)
            .map(|(l, _)| l.total)
            .unwrap_or(f64::NAN)
    };
    Ok(finite_diff_check(params, &grads, objective, eps, tolerance, None))
}

const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerRecord {
    pub rows: usize,
    pub cols: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl LayerRecord {
    fn from_dense(d: &Dense) -> Self {
        LayerRecord {
            rows: d.weight.rows(),
            cols: d.weight.cols(),
            weights: d.weight.as_slice().to_vec(),
            bias: d.bias.clone(),
            activation: d.activation,
        }
    }

    fn to_dense(&self) -> Result<Dense> {
        Ok(Dense {
            weight: Matrix::from_vec(self.rows, self.cols, self.weights.clone())?,
            bias: self.bias.clone(),
            activation: self.activation,
        })
    }
}

/// Serialised model, configuration and (optionally) optimizer state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    #[serde(rename = "K")]
    pub bits: usize,
    pub pool_mode: PoolMode,
    pub epoch: usize,
    pub layers: Vec<LayerRecord>,
    pub mi_head: LayerRecord,
    pub si_head: LayerRecord,
    pub config: TrainConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub velocity: Option<Vec<Vec<f64>>>,
}

impl Checkpoint {
    pub fn from_params(params: &ModelParams, cfg: &TrainConfig, epoch: usize) -> Self {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            bits: params.code_bits(),
            pool_mode: cfg.pool,
            epoch,
            layers: params.layers.iter().map(LayerRecord::from_dense).collect(),
            mi_head: LayerRecord::from_dense(&params.mi_head),
            si_head: LayerRecord::from_dense(&params.si_head),
            config: cfg.clone(),
            velocity: None,
        }
    }

    pub fn from_state(state: &TrainState, cfg: &TrainConfig) -> Self {
        let mut ckpt = Checkpoint::from_params(&state.params, cfg, state.epoch);
        ckpt.velocity = Some(
            state
                .optimizer
                .velocity
                .blocks()
                .into_iter()
                .map(|(_, b)| b.to_vec())
                .collect(),
        );
        ckpt
    }

    pub fn params(&self) -> Result<ModelParams> {
        if self.version != CHECKPOINT_VERSION {
            return Err(Error::invalid(format!("unsupported checkpoint version {}", self.version)));
        }
        let layers = self.layers.iter().map(LayerRecord::to_dense).collect::<Result<Vec<_>>>()?;
        let params = ModelParams::new(layers, self.mi_head.to_dense()?, self.si_head.to_dense()?)?;
        if params.code_bits() != self.bits {
            return Err(Error::shape(
                "checkpoint",
                format!("declares K = {} but heads produce {} bits", self.bits, params.code_bits()),
            ));
        }
        Ok(params)
    }

    /// Rebuilds the full training state; velocity defaults to zero when absent.
    pub fn state(&self) -> Result<TrainState> {
        let params = self.params()?;
        let mut optimizer = OptimizerState::new(&params);
        if let Some(saved) = &self.velocity {
            let mut blocks = optimizer.velocity.blocks_mut();
            if saved.len() != blocks.len() || saved.iter().zip(&blocks).any(|(s, b)| s.len() != b.len()) {
                return Err(Error::shape("checkpoint", "optimizer state does not match the model"));
            }
            for (dst, src) in blocks.iter_mut().zip(saved) {
                dst.copy_from_slice(src);
            }
        }
        Ok(TrainState {
            params,
            optimizer,
            epoch: self.epoch,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        serde_json::to_writer_pretty(&mut w, self)?;
        w.write_all(b"\n")?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_reader(BufReader::new(File::open(path)?))?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SyntheticSpec};

    fn tiny_dataset(seed: u64) -> BagDataset {
        let spec = SyntheticSpec {
            classes: 3,
            bags_per_class: 8,
            dim: 5,
            ..SyntheticSpec::default()
        };
        generate_synthetic(&mut Rng::new(seed), &spec).unwrap()
    }

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            t_max: 4,
            batch_size: 8,
            hidden_dims: vec![8],
            dz: 6,
            bits: 8,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn lr_examples() {
        let cfg = TrainConfig::default();
        assert_eq!(lr_at(1, &cfg), 0.01);
        assert!((lr_at(3, &cfg) - 0.009604).abs() < 1e-15);
        let flat = TrainConfig {
            lr_decay: 1.0,
            ..cfg
        };
        assert_eq!(lr_at(40, &flat), 0.01);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        for bad in [
            TrainConfig { lr0: 0.0, ..TrainConfig::default() },
            TrainConfig { momentum: 1.0, ..TrainConfig::default() },
            TrainConfig { lr_decay: 0.0, ..TrainConfig::default() },
            TrainConfig { lr_decay: 1.5, ..TrainConfig::default() },
            TrainConfig { batch_size: 1, ..TrainConfig::default() },
        ] {
            assert!(bad.validate().is_err(), "{bad:?}");
        }
    }

    fn one_param_model(theta: f64) -> ModelParams {
        let layer = Dense {
            weight: Matrix::from_rows(&[[theta]]).unwrap(),
            bias: vec![0.0],
            activation: Activation::Linear,
        };
        let head = Dense {
            weight: Matrix::zeros(1, 1),
            bias: vec![0.0],
            activation: Activation::Tanh,
        };
        ModelParams::new(vec![layer], head.clone(), head).unwrap()
    }

    #[test]
    fn momentum_recurrence() {
        let mut p = one_param_model(0.0);
        let mut state = OptimizerState::new(&p);
        let mut g = p.zero_grads();
        g.blocks_mut().into_iter().for_each(|b| b.fill(1.0));
        sgd_step(&mut p, &g, &mut state, 0.1, 0.9).unwrap();
        let after_one = p.layers[0].weight[(0, 0)];
        assert!((after_one + 0.1).abs() < 1e-15);
        sgd_step(&mut p, &g, &mut state, 0.1, 0.9).unwrap();
        assert!((p.layers[0].weight[(0, 0)] - after_one + 0.19).abs() < 1e-15);
    }

    #[test]
    fn plain_sgd_and_zero_gradients() {
        let mut p = one_param_model(2.0);
        let mut state = OptimizerState::new(&p);
        let mut g = p.zero_grads();
        g.blocks_mut()[0][0] = 3.0;
        sgd_step(&mut p, &g, &mut state, 0.5, 0.0).unwrap();
        assert_eq!(p.layers[0].weight[(0, 0)], 0.5);

        let mut q = one_param_model(2.0);
        let before = q.clone();
        let mut fresh = OptimizerState::new(&q);
        for _ in 0..10 {
            let zero = q.zero_grads();
            sgd_step(&mut q, &zero, &mut fresh, 0.5, 0.9).unwrap();
        }
        assert_eq!(q, before);
    }

    #[test]
    fn non_finite_gradient_aborts() {
        let mut p = one_param_model(1.0);
        let mut state = OptimizerState::new(&p);
        let mut g = p.zero_grads();
        g.blocks_mut()[0][0] = f64::NAN;
        let err = sgd_step(&mut p, &g, &mut state, 0.1, 0.9).unwrap_err();
        assert!(err.to_string().contains("encoder.0.weight"), "{err}");
    }

    #[test]
    fn zero_epochs_returns_initial_params() {
        let ds = tiny_dataset(1);
        let cfg = TrainConfig { t_max: 0, ..tiny_config() };
        let (params, log) = train(&ds, &cfg).unwrap();
        assert!(log.is_empty());
        assert_eq!(params, TrainState::init(ds.dim(), &cfg).unwrap().params);
    }

    #[test]
    fn training_is_deterministic() {
        let ds = tiny_dataset(2);
        let cfg = tiny_config();
        let a = train(&ds, &cfg).unwrap();
        let b = train(&ds, &cfg).unwrap();
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
        let other = train(&ds, &TrainConfig { seed: 9, ..cfg }).unwrap();
        assert_ne!(a.0, other.0);
    }

    #[test]
    fn tradeoff_modes_are_logged() {
        let ds = tiny_dataset(3);
        let cfg = tiny_config();
        let (_, log) = train(&ds, &cfg).unwrap();
        let first = tradeoff_schedule(1.0, 4.0);
        let last = tradeoff_schedule(4.0, 4.0);
        assert_eq!((log.epochs[0].lambda_mi, log.epochs[0].lambda_si), first);
        assert_eq!((log.epochs[3].lambda_mi, log.epochs[3].lambda_si), last);

        let (_, log) = train(&ds, &TrainConfig { tradeoff: Tradeoff::Equal, ..cfg.clone() }).unwrap();
        assert!(log.epochs.iter().all(|r| r.lambda_mi == 0.5 && r.lambda_si == 0.5));
    }

    #[test]
    fn no_si_leaves_si_head_to_weight_decay() {
        let ds = tiny_dataset(4);
        let cfg = TrainConfig {
            tradeoff: Tradeoff::NoSi,
            momentum: 0.0,
            lr_decay: 1.0,
            ..tiny_config()
        };
        let state = TrainState::init(ds.dim(), &cfg).unwrap();
        let w0 = state.params.si_head.weight.clone();
        let (_, log) = train(&ds, &cfg).unwrap();
        let (params, _) = train(&ds, &cfg).unwrap();
        // pure decay: each step multiplies by (1 − 2·lr·λ_w)
        let steps: usize = log.epochs.iter().map(|r| r.batches).sum();
        let factor = (1.0 - 2.0 * cfg.lr0 * cfg.lambda_w).powi(steps as i32);
        for (a, b) in params.si_head.weight.as_slice().iter().zip(w0.as_slice()) {
            assert!((a - b * factor).abs() < 1e-12);
        }
    }

    #[test]
    fn last_singleton_batch_is_dropped() {
        let ds = tiny_dataset(5); // 24 bags
        let cfg = TrainConfig { batch_size: 23, t_max: 1, ..tiny_config() };
        let (_, log) = train(&ds, &cfg).unwrap();
        assert_eq!(log.epochs[0].batches, 1);
    }

    #[test]
    fn epoch_refresh_runs() {
        let ds = tiny_dataset(6);
        let cfg = TrainConfig { scale_refresh: ScaleRefresh::Epoch, ..tiny_config() };
        let (_, log) = train(&ds, &cfg).unwrap();
        assert_eq!(log.len(), 4);
        assert!(log.epochs.iter().all(|r| r.j_total.is_finite()));
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let ds = tiny_dataset(7);
        let cfg = tiny_config();
        let dir = tempfile::tempdir().unwrap();
        let state = TrainState::init(ds.dim(), &cfg).unwrap();
        let (state, _) = train_from(&ds, &TrainConfig { t_max: 2, ..cfg.clone() }, state, None).unwrap();
        let path = dir.path().join("c.json");
        Checkpoint::from_state(&state, &cfg).save(&path).unwrap();
        let loaded = Checkpoint::load(&path).unwrap();
        assert_eq!(loaded.state().unwrap(), state);
        assert_eq!(loaded.config, cfg);
        assert_eq!(loaded.bits, 8);
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let ds = tiny_dataset(8);
        let cfg = TrainConfig { checkpoint_every: 2, ..tiny_config() };
        let dir = tempfile::tempdir().unwrap();
        let init = TrainState::init(ds.dim(), &cfg).unwrap();
        let (full, full_log) = train_from(&ds, &cfg, init, Some(dir.path())).unwrap();
        assert!(checkpoint_path(dir.path(), 2).exists());
        assert!(checkpoint_path(dir.path(), 4).exists());
        assert!(!checkpoint_path(dir.path(), 3).exists());

        let mid = Checkpoint::load(checkpoint_path(dir.path(), 2)).unwrap().state().unwrap();
        let (resumed, tail_log) = train_from(&ds, &cfg, mid, None).unwrap();
        assert_eq!(resumed, full);
        assert_eq!(tail_log.epochs[..], full_log.epochs[2..]);
    }

    #[test]
    fn log_csv_has_header_and_rows() {
        let ds = tiny_dataset(9);
        let (_, log) = train(&ds, &TrainConfig { t_max: 2, ..tiny_config() }).unwrap();
        let mut buf = Vec::new();
        log.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 3);
        assert!(lines[0].starts_with("epoch,lr,lambda_mi,lambda_si,j_total"));
    }

    #[test]
    fn composite_gradcheck_small() {
        let mut rng = Rng::new(21);
        let bags = tiny_dataset(21).bags()[..6].to_vec();
        let params = init_params(&mut rng, 5, &[8], 6, 8).unwrap();
        for robust in [Robust::Huber, Robust::L2] {
            for pool in [PoolMode::Max, PoolMode::Mean] {
                let cfg = TrainConfig { robust, pool, ..tiny_config() };
                let report = composite_gradcheck(&params, &bags, &cfg, 2, 1e-4, 1e-4, false).unwrap();
                assert!(report.passed(), "{robust}/{pool}: {:?}", report.worst);
                let broken = composite_gradcheck(&params, &bags, &cfg, 2, 1e-4, 1e-4, true).unwrap();
                assert!(!broken.passed());
                assert_eq!(broken.worst.unwrap().block, "encoder.0.weight");
            }
        }
    }
}
