//! The hashing network.
//!
//! Instances go through a small MLP encoder whose last (linear) layer is the
//! feature layer `z`. Per bag, the `z` rows are pooled dimension-wise into one
//! bag embedding, which feeds the MI hashing head. The auxiliary SI head taps
//! `z` directly and produces one relaxed code per instance. Both heads are
//! `tanh` layers; binary codes are `sgn` of their outputs.

use serde::{Deserialize, Serialize};

use crate::data::Bag;
use crate::error::{Error, Result};
use crate::numeric::{sgn, Matrix, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Linear,
    Tanh,
}

impl Activation {
    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Linear => x,
            Activation::Tanh => x.tanh(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolMode {
    #[default]
    Max,
    Mean,
}

impl std::str::FromStr for PoolMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "max" => Ok(PoolMode::Max),
            "mean" => Ok(PoolMode::Mean),
            other => Err(Error::invalid(format!("unknown pool mode '{other}'"))),
        }
    }
}

impl std::fmt::Display for PoolMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            PoolMode::Max => "max",
            PoolMode::Mean => "mean",
        })
    }
}

/// Fully connected layer with weights stored `(out, in)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Matrix,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl Dense {
    fn glorot(rng: &mut Rng, fan_in: usize, fan_out: usize, activation: Activation) -> Self {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data = (0..fan_in * fan_out).map(|_| rng.uniform(-bound, bound)).collect();
        Dense {
            weight: Matrix::from_vec(fan_out, fan_in, data).expect("sized by construction"),
            bias: vec![0.0; fan_out],
            activation,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }

    /// Pre-activation for a batch of row inputs.
    fn pre(&self, x: &Matrix) -> Result<Matrix> {
        let mut a = x.matmul_t(&self.weight)?;
        a.add_row_vector(&self.bias);
        Ok(a)
    }

    fn zeros_like(&self) -> DenseGrad {
        DenseGrad {
            weight: Matrix::zeros(self.weight.rows(), self.weight.cols()),
            bias: vec![0.0; self.bias.len()],
        }
    }
}

/// Everything the optimizer updates.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub layers: Vec<Dense>,
    pub mi_head: Dense,
    pub si_head: Dense,
}

impl ModelParams {
    pub fn new(layers: Vec<Dense>, mi_head: Dense, si_head: Dense) -> Result<Self> {
        let params = ModelParams {
            layers,
            mi_head,
            si_head,
        };
        params.validate()?;
        Ok(params)
    }

    fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::invalid("encoder needs at least one layer"));
        }
        for (i, pair) in self.layers.windows(2).enumerate() {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(Error::shape(
                    "ModelParams",
                    format!(
                        "layer {i} outputs {} but layer {} expects {}",
                        pair[0].out_dim(),
                        i + 1,
                        pair[1].in_dim()
                    ),
                ));
            }
        }
        let dz = self.feature_dim();
        for (name, head) in [("mi_head", &self.mi_head), ("si_head", &self.si_head)] {
            if head.in_dim() != dz {
                return Err(Error::shape(
                    "ModelParams",
                    format!("{name} expects {} inputs, feature layer has {dz}", head.in_dim()),
                ));
            }
            if head.activation != Activation::Tanh {
                return Err(Error::invalid(format!("{name} must use tanh")));
            }
        }
        if self.mi_head.out_dim() != self.si_head.out_dim() || self.code_bits() == 0 {
            return Err(Error::invalid("heads must agree on a positive code length"));
        }
        for layer in self.all_layers() {
            if layer.bias.len() != layer.out_dim() {
                return Err(Error::shape("ModelParams", "bias length differs from layer width"));
            }
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn feature_dim(&self) -> usize {
        self.layers.last().map(Dense::out_dim).unwrap_or(0)
    }

    pub fn code_bits(&self) -> usize {
        self.mi_head.out_dim()
    }

    fn all_layers(&self) -> impl Iterator<Item = &Dense> {
        self.layers.iter().chain([&self.mi_head, &self.si_head])
    }

    fn all_layers_mut(&mut self) -> impl Iterator<Item = &mut Dense> {
        self.layers
            .iter_mut()
            .chain([&mut self.mi_head, &mut self.si_head])
    }

    /// `R_W`: sum of squared weights and biases.
    pub fn weight_norm_sq(&self) -> f64 {
        self.all_layers()
            .map(|l| l.weight.sum_squares() + l.bias.iter().map(|b| b * b).sum::<f64>())
            .sum()
    }

    pub fn num_params(&self) -> usize {
        self.all_layers().map(|l| l.weight.as_slice().len() + l.bias.len()).sum()
    }

    /// Parameter blocks in canonical order, paired with their names.
    pub fn blocks(&self) -> Vec<(String, &[f64])> {
        let names = block_names(self.layers.len());
        let mut slices = Vec::with_capacity(names.len());
        for l in self.all_layers() {
            slices.push(l.weight.as_slice());
            slices.push(l.bias.as_slice());
        }
        names.into_iter().zip(slices).collect()
    }

    pub fn blocks_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::new();
        for l in self.all_layers_mut() {
            out.push(l.weight.as_mut_slice());
            out.push(l.bias.as_mut_slice());
        }
        out
    }

    pub fn zero_grads(&self) -> Gradients {
        Gradients {
            layers: self.layers.iter().map(Dense::zeros_like).collect(),
            mi_head: self.mi_head.zeros_like(),
            si_head: self.si_head.zeros_like(),
        }
    }
}

fn block_names(encoder_layers: usize) -> Vec<String> {
    let mut names = Vec::new();
    for i in 0..encoder_layers {
        names.push(format!("encoder.{i}.weight"));
        names.push(format!("encoder.{i}.bias"));
    }
    for head in ["mi_head", "si_head"] {
        names.push(format!("{head}.weight"));
        names.push(format!("{head}.bias"));
    }
    names
}

/// Glorot-uniform weights, zero biases. The encoder is `d → hidden… → dz`
/// with ReLU hidden layers and a linear feature layer.
pub fn init_params(rng: &mut Rng, d: usize, hidden_dims: &[usize], dz: usize, bits: usize) -> Result<ModelParams> {
    if d == 0 || dz == 0 || bits == 0 || hidden_dims.contains(&0) {
        return Err(Error::invalid("all layer dimensions must be >= 1"));
    }
    let mut layers = Vec::with_capacity(hidden_dims.len() + 1);
    let mut prev = d;
    for &h in hidden_dims {
        layers.push(Dense::glorot(rng, prev, h, Activation::Relu));
        prev = h;
    }
    layers.push(Dense::glorot(rng, prev, dz, Activation::Linear));
    let mi_head = Dense::glorot(rng, dz, bits, Activation::Tanh);
    let si_head = Dense::glorot(rng, dz, bits, Activation::Tanh);
    ModelParams::new(layers, mi_head, si_head)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseGrad {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

/// Gradient carrier, shape-congruent with [`ModelParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<DenseGrad>,
    pub mi_head: DenseGrad,
    pub si_head: DenseGrad,
}

impl Gradients {
    fn all_layers(&self) -> impl Iterator<Item = &DenseGrad> {
        self.layers.iter().chain([&self.mi_head, &self.si_head])
    }

    fn all_layers_mut(&mut self) -> impl Iterator<Item = &mut DenseGrad> {
        self.layers
            .iter_mut()
            .chain([&mut self.mi_head, &mut self.si_head])
    }

    pub fn blocks(&self) -> Vec<(String, &[f64])> {
        let names = block_names(self.layers.len());
        let mut slices = Vec::with_capacity(names.len());
        for l in self.all_layers() {
            slices.push(l.weight.as_slice());
            slices.push(l.bias.as_slice());
        }
        names.into_iter().zip(slices).collect()
    }

    pub fn blocks_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::new();
        for l in self.all_layers_mut() {
            out.push(l.weight.as_mut_slice());
            out.push(l.bias.as_mut_slice());
        }
        out
    }

    pub fn all_finite(&self) -> bool {
        self.all_layers()
            .all(|l| l.weight.all_finite() && l.bias.iter().all(|v| v.is_finite()))
    }

    pub fn max_abs(&self) -> f64 {
        self.all_layers()
            .map(|l| l.weight.max_abs().max(l.bias.iter().fold(0.0, |m, v| m.max(v.abs()))))
            .fold(0.0, f64::max)
    }
}

/// Cached activations of one forward pass over a batch of bags.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub pool: PoolMode,
    /// Instance rows of bag `b` are `offsets[b]..offsets[b + 1]`.
    pub offsets: Vec<usize>,
    /// Stacked instance features.
    pub inputs: Matrix,
    /// Per encoder layer: pre-activation and activation.
    pub pre: Vec<Matrix>,
    pub act: Vec<Matrix>,
    /// Pooled bag embeddings, one row per bag.
    pub pooled: Matrix,
    /// Max pooling only: for each bag and feature dimension, the winning
    /// instance index within the bag.
    pub routing: Option<Vec<Vec<usize>>>,
    pub h_mi: Matrix,
    pub h_si: Matrix,
}

impl ForwardTrace {
    pub fn num_bags(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn num_instances(&self) -> usize {
        self.inputs.rows()
    }

    /// Feature-layer outputs `z`, one row per instance.
    pub fn features(&self) -> &Matrix {
        self.act.last().expect("encoder has at least one layer")
    }

    pub fn bag_codes(&self) -> Vec<HashCode> {
        self.h_mi.iter_rows().map(quantize).collect()
    }

    /// Binary SI codes grouped per bag.
    pub fn instance_codes(&self) -> Vec<Vec<HashCode>> {
        self.offsets
            .windows(2)
            .map(|w| (w[0]..w[1]).map(|r| quantize(self.h_si.row(r))).collect())
            .collect()
    }
}

pub fn forward(params: &ModelParams, bags: &[Bag], pool: PoolMode) -> Result<ForwardTrace> {
    let refs: Vec<&Bag> = bags.iter().collect();
    forward_refs(params, &refs, pool)
}

pub fn forward_refs(params: &ModelParams, bags: &[&Bag], pool: PoolMode) -> Result<ForwardTrace> {
    let d = params.input_dim();
    let mut offsets = Vec::with_capacity(bags.len() + 1);
    offsets.push(0);
    let mut stacked = Vec::new();
    for bag in bags {
        if bag.is_empty() {
            return Err(Error::Empty(format!("bag '{}' has no instances", bag.id)));
        }
        if bag.dim() != d {
            return Err(Error::shape(
                "forward",
                format!("bag '{}' has dimension {}, network expects {d}", bag.id, bag.dim()),
            ));
        }
        stacked.extend_from_slice(bag.instances.as_slice());
        offsets.push(offsets.last().unwrap() + bag.len());
    }
    let n = *offsets.last().unwrap();
    let inputs = Matrix::from_vec(n, d, stacked)?;

    let mut pre = Vec::with_capacity(params.layers.len());
    let mut act = Vec::with_capacity(params.layers.len());
    for layer in &params.layers {
        let x = act.last().unwrap_or(&inputs);
        let a = layer.pre(x)?;
        let h = a.map(|v| layer.activation.apply(v));
        pre.push(a);
        act.push(h);
    }
    let z = act.last().unwrap();
    let dz = z.cols();

    let mut pooled = Matrix::zeros(bags.len(), dz);
    let mut routing = match pool {
        PoolMode::Max => Some(Vec::with_capacity(bags.len())),
        PoolMode::Mean => None,
    };
    for (b, w) in offsets.windows(2).enumerate() {
        let out = pooled.row_mut(b);
        match pool {
            PoolMode::Max => {
                out.copy_from_slice(z.row(w[0]));
                let mut arg = vec![0usize; dz];
                for r in w[0] + 1..w[1] {
                    for (c, &v) in z.row(r).iter().enumerate() {
                        if v > out[c] {
                            out[c] = v;
                            arg[c] = r - w[0];
                        }
                    }
                }
                routing.as_mut().unwrap().push(arg);
            }
            PoolMode::Mean => {
                for r in w[0]..w[1] {
                    for (o, &v) in out.iter_mut().zip(z.row(r)) {
                        *o += v;
                    }
                }
                let inv = 1.0 / (w[1] - w[0]) as f64;
                out.iter_mut().for_each(|v| *v *= inv);
            }
        }
    }

    let h_mi = params.mi_head.pre(&pooled)?.map(f64::tanh);
    let h_si = params.si_head.pre(z)?.map(f64::tanh);

    Ok(ForwardTrace {
        pool,
        offsets,
        inputs,
        pre,
        act,
        pooled,
        routing,
        h_mi,
        h_si,
    })
}

/// K-bit code over `{−1, +1}`, bit-packed into 64-bit words (bit set = `+1`).
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct HashCode {
    words: Vec<u64>,
    len: usize,
}

impl HashCode {
    pub fn from_words(words: Vec<u64>, len: usize) -> Result<Self> {
        if words.len() != len.div_ceil(64) {
            return Err(Error::shape(
                "HashCode::from_words",
                format!("{} words for {len} bits", words.len()),
            ));
        }
        let mut code = HashCode { words, len };
        code.mask_tail();
        Ok(code)
    }

    /// Panics if any entry is not ±1.
    pub fn from_signs(signs: &[i8]) -> Self {
        let mut words = vec![0u64; signs.len().div_ceil(64)];
        for (i, &s) in signs.iter().enumerate() {
            assert!(s == 1 || s == -1, "code entries must be ±1, got {s}");
            if s == 1 {
                words[i / 64] |= 1 << (i % 64);
            }
        }
        HashCode {
            words,
            len: signs.len(),
        }
    }

    fn mask_tail(&mut self) {
        let rem = self.len % 64;
        if rem != 0 {
            if let Some(last) = self.words.last_mut() {
                *last &= (1u64 << rem) - 1;
            }
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn words(&self) -> &[u64] {
        &self.words
    }

    pub fn bit(&self, i: usize) -> i8 {
        if self.words[i / 64] >> (i % 64) & 1 == 1 {
            1
        } else {
            -1
        }
    }

    pub fn signs(&self) -> Vec<i8> {
        (0..self.len).map(|i| self.bit(i)).collect()
    }

    pub fn to_hex(&self) -> String {
        self.words.iter().map(|w| format!("{w:016x}")).collect()
    }

    pub fn from_hex(hex: &str, len: usize) -> Result<Self> {
        if !hex.len().is_multiple_of(16) {
            return Err(Error::invalid(format!("hex code '{hex}' is not a whole number of words")));
        }
        let words = hex
            .as_bytes()
            .chunks(16)
            .map(|chunk| {
                let s = std::str::from_utf8(chunk).map_err(|e| Error::invalid(e.to_string()))?;
                u64::from_str_radix(s, 16).map_err(|e| Error::invalid(format!("bad hex '{s}': {e}")))
            })
            .collect::<Result<Vec<_>>>()?;
        HashCode::from_words(words, len)
    }
}

/// `sgn` of each entry, with `sgn(0) = +1`.
pub fn quantize(h: &[f64]) -> HashCode {
    let signs: Vec<i8> = h.iter().map(|&v| sgn(v) as i8).collect();
    HashCode::from_signs(&signs)
}

/// Backpropagates head gradients to every parameter and adds the weight-decay
/// term `2·λ_w·θ`.
pub fn backward(
    params: &ModelParams,
    trace: &ForwardTrace,
    d_h_mi: &Matrix,
    d_h_si: &Matrix,
    weight_decay: f64,
) -> Result<Gradients> {
    let bits = params.code_bits();
    if d_h_mi.shape() != (trace.num_bags(), bits) || d_h_si.shape() != (trace.num_instances(), bits) {
        return Err(Error::shape(
            "backward",
            format!(
                "upstream gradients {:?}/{:?}, trace has {} bags, {} instances, {bits} bits",
                d_h_mi.shape(),
                d_h_si.shape(),
                trace.num_bags(),
                trace.num_instances()
            ),
        ));
    }
    let mut grads = params.zero_grads();
    let tanh_back = |dh: &Matrix, h: &Matrix| -> Matrix {
        let mut da = dh.clone();
        for (g, &hv) in da.as_mut_slice().iter_mut().zip(h.as_slice()) {
            *g *= 1.0 - hv * hv;
        }
        da
    };

    // MI head
    let da_mi = tanh_back(d_h_mi, &trace.h_mi);
    grads.mi_head.weight = da_mi.t_matmul(&trace.pooled)?;
    grads.mi_head.bias = column_sums(&da_mi);
    let d_pooled = da_mi.matmul(&params.mi_head.weight)?;

    // SI head
    let z = trace.features();
    let da_si = tanh_back(d_h_si, &trace.h_si);
    grads.si_head.weight = da_si.t_matmul(z)?;
    grads.si_head.bias = column_sums(&da_si);
    let mut d_z = da_si.matmul(&params.si_head.weight)?;

    // MIPool
    for (b, w) in trace.offsets.windows(2).enumerate() {
        let g = d_pooled.row(b);
        match &trace.routing {
            Some(routing) => {
                for (c, &j) in routing[b].iter().enumerate() {
                    d_z[(w[0] + j, c)] += g[c];
                }
            }
            None => {
                let inv = 1.0 / (w[1] - w[0]) as f64;
                for r in w[0]..w[1] {
                    for (o, &gv) in d_z.row_mut(r).iter_mut().zip(g) {
                        *o += gv * inv;
                    }
                }
            }
        }
    }

    // encoder
    let mut upstream = d_z;
    for (i, layer) in params.layers.iter().enumerate().rev() {
        let mut d_pre = upstream;
        match layer.activation {
            Activation::Relu => {
                for (g, &a) in d_pre.as_mut_slice().iter_mut().zip(trace.pre[i].as_slice()) {
                    if a <= 0.0 {
                        *g = 0.0;
                    }
                }
            }
            Activation::Linear => {}
            Activation::Tanh => {
                for (g, &h) in d_pre.as_mut_slice().iter_mut().zip(trace.act[i].as_slice()) {
                    *g *= 1.0 - h * h;
                }
            }
        }
        let input = if i == 0 { &trace.inputs } else { &trace.act[i - 1] };
        grads.layers[i].weight = d_pre.t_matmul(input)?;
        grads.layers[i].bias = column_sums(&d_pre);
        upstream = if i > 0 {
            d_pre.matmul(&layer.weight)?
        } else {
            Matrix::zeros(0, 0)
        };
    }

    if weight_decay != 0.0 {
        let param_blocks = params.blocks();
        for (g, (_, p)) in grads.blocks_mut().into_iter().zip(param_blocks) {
            for (gv, pv) in g.iter_mut().zip(p) {
                *gv += 2.0 * weight_decay * pv;
            }
        }
    }
    Ok(grads)
}

fn column_sums(m: &Matrix) -> Vec<f64> {
    let mut out = vec![0.0; m.cols()];
    for row in m.iter_rows() {
        for (o, v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoordError {
    pub block: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockReport {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub max_rel_error: f64,
    pub worst: Option<CoordError>,
    pub blocks: Vec<BlockReport>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= self.tolerance
    }
}

/// Compares `analytic` against central differences of `loss`.
///
/// Relative error is `|a − f| / max(|a|, |f|, 1e-8)`. When `sample` is given
/// and the model has more than `sample.0` parameters, a seeded random subset of
/// that many coordinates is checked instead of all of them.
pub fn finite_diff_check<F>(
    params: &ModelParams,
    analytic: &Gradients,
    loss: F,
    eps: f64,
    tolerance: f64,
    sample: Option<(usize, &mut Rng)>,
) -> GradCheckReport
where
    F: Fn(&ModelParams) -> f64,
{
    assert!(eps > 0.0, "finite-difference step must be positive");
    let analytic_blocks = analytic.blocks();
    let sizes: Vec<usize> = analytic_blocks.iter().map(|(_, s)| s.len()).collect();
    let total: usize = sizes.iter().sum();

    let coords: Vec<(usize, usize)> = {
        let all = sizes
            .iter()
            .enumerate()
            .flat_map(|(b, &n)| (0..n).map(move |i| (b, i)));
        match sample {
            Some((limit, rng)) if total > limit => {
                let all: Vec<_> = all.collect();
                let mut picks = rng.sample_indices(total, limit);
                picks.sort_unstable();
                picks.into_iter().map(|i| all[i]).collect()
            }
            _ => all.collect(),
        }
    };

    let mut blocks: Vec<BlockReport> = analytic_blocks
        .iter()
        .map(|(name, _)| BlockReport {
            name: name.clone(),
            checked: 0,
            max_rel_error: 0.0,
        })
        .collect();
    let mut worst: Option<CoordError> = None;
    let mut probe = params.clone();
    for (b, i) in coords {
        let original = probe.blocks_mut()[b][i];
        probe.blocks_mut()[b][i] = original + eps;
        let plus = loss(&probe);
        probe.blocks_mut()[b][i] = original - eps;
        let minus = loss(&probe);
        probe.blocks_mut()[b][i] = original;

        let numeric = (plus - minus) / (2.0 * eps);
        let a = analytic_blocks[b].1[i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
        let report = &mut blocks[b];
        report.checked += 1;
        report.max_rel_error = report.max_rel_error.max(rel);
        if worst.as_ref().is_none_or(|w| rel > w.rel_error) {
            worst = Some(CoordError {
                block: report.name.clone(),
                index: i,
                analytic: a,
                numeric,
                rel_error: rel,
            });
        }
    }
    GradCheckReport {
        tolerance,
        max_rel_error: worst.as_ref().map_or(0.0, |w| w.rel_error),
        worst,
        blocks,
    }
}
