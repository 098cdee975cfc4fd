//! Loss mathematics: the Huber residual norm with a data-driven threshold,
//! the robust NCA retrieval loss and its gradient, the log-cosh quantization
//! penalty, the MI/SI trade-off schedule and the composite objective.
//!
//! All losses take relaxed codes `H` as an `N × K` matrix, one row per bag (or
//! instance). Self-pairs never count as neighbours: `p_ii = 0` and `i = j` is
//! excluded from the similarity sum.

use serde::{Deserialize, Serialize};

use crate::data::SimilarityMatrix;
use crate::error::{Error, Result};
use crate::numeric::{median_in_place, sgn, Matrix};

/// Threshold multiplier giving ~95% asymptotic efficiency under Gaussian noise.
pub const HUBER_EFFICIENCY: f64 = 1.345;
/// MAD-to-sigma factor.
pub const MAD_SCALE: f64 = 1.485;
/// Lower bound on sigma so the threshold never collapses to zero.
pub const MAD_FLOOR: f64 = 1e-6;
/// First-epoch threshold inflation.
pub const WARMUP_FACTOR: f64 = 7.0;

pub fn huber_rho(r: f64, c: f64) -> f64 {
    let a = r.abs();
    if a <= c {
        0.5 * r * r
    } else {
        c * a - 0.5 * c * c
    }
}

pub fn huber_rho_grad(r: f64, c: f64) -> f64 {
    if r.abs() <= c {
        r
    } else {
        c * sgn(r)
    }
}

/// Per-bit Huber thresholds `c_k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HuberScale {
    c: Vec<f64>,
    sigma: Vec<f64>,
}

impl HuberScale {
    pub fn new(c: Vec<f64>) -> Result<Self> {
        if c.iter().any(|&v| !(v.is_finite() && v > 0.0)) {
            return Err(Error::invalid("Huber thresholds must be finite and positive"));
        }
        let sigma = c.iter().map(|v| v / HUBER_EFFICIENCY).collect();
        Ok(HuberScale { c, sigma })
    }

    /// Thresholds from per-bit residual populations: `σ_k = 1.485·MAD_k`,
    /// `c_k = 1.345·max(σ_k, 1e-6)`, multiplied by 7 when `epoch == 1`.
    pub fn from_residuals(per_bit: &mut [Vec<f64>], epoch: usize) -> Result<Self> {
        let mut c = Vec::with_capacity(per_bit.len());
        let mut sigma = Vec::with_capacity(per_bit.len());
        for residuals in per_bit.iter_mut() {
            if residuals.is_empty() {
                return Err(Error::Empty("no residuals for a code bit".into()));
            }
            let med = median_in_place(residuals);
            for r in residuals.iter_mut() {
                *r = (*r - med).abs();
            }
            let mad = median_in_place(residuals);
            let s = MAD_SCALE * mad;
            let mut ck = HUBER_EFFICIENCY * s.max(MAD_FLOOR);
            if epoch == 1 {
                ck *= WARMUP_FACTOR;
            }
            sigma.push(s);
            c.push(ck);
        }
        Ok(HuberScale { c, sigma })
    }

    pub fn c(&self) -> &[f64] {
        &self.c
    }

    pub fn sigma(&self) -> &[f64] {
        &self.sigma
    }

    pub fn len(&self) -> usize {
        self.c.len()
    }

    pub fn is_empty(&self) -> bool {
        self.c.is_empty()
    }
}

/// Estimates per-bit thresholds from all unordered pairs `i < j` of rows of `h`.
pub fn estimate_scale(h: &Matrix, epoch: usize) -> Result<HuberScale> {
    let (n, k) = h.shape();
    if n < 2 {
        return Err(Error::invalid(format!("scale estimation needs >= 2 codes, got {n}")));
    }
    let pairs = n * (n - 1) / 2;
    let mut per_bit = vec![Vec::with_capacity(pairs); k];
    for i in 0..n {
        let hi = h.row(i);
        for j in i + 1..n {
            let hj = h.row(j);
            for (bit, buf) in per_bit.iter_mut().enumerate() {
                buf.push(hi[bit] - hj[bit]);
            }
        }
    }
    HuberScale::from_residuals(&mut per_bit, epoch)
}

/// Residual penalty applied bitwise inside the pairwise distance.
#[derive(Debug, Clone, PartialEq)]
pub enum Penalty {
    Huber(HuberScale),
    /// `½r²` with no clipping (plain NCA).
    L2,
}

impl Penalty {
    #[inline]
    fn rho(&self, r: f64, bit: usize) -> f64 {
        match self {
            Penalty::Huber(s) => huber_rho(r, s.c[bit]),
            Penalty::L2 => 0.5 * r * r,
        }
    }

    #[inline]
    fn grad(&self, r: f64, bit: usize) -> f64 {
        match self {
            Penalty::Huber(s) => huber_rho_grad(r, s.c[bit]),
            Penalty::L2 => r,
        }
    }

    fn check_bits(&self, k: usize) -> Result<()> {
        match self {
            Penalty::Huber(s) if s.len() != k => Err(Error::shape(
                "penalty",
                format!("{} thresholds for {k}-bit codes", s.len()),
            )),
            _ => Ok(()),
        }
    }
}

/// `L_ij = Σ_k ρ_k(h_i^k − h_j^k)`, symmetric with zero diagonal.
pub fn pairwise_distance(h: &Matrix, penalty: &Penalty) -> Result<Matrix> {
    let (n, k) = h.shape();
    penalty.check_bits(k)?;
    let mut l = Matrix::zeros(n, n);
    for i in 0..n {
        for j in i + 1..n {
            let v: f64 = h
                .row(i)
                .iter()
                .zip(h.row(j))
                .enumerate()
                .map(|(bit, (a, b))| penalty.rho(a - b, bit))
                .sum();
            l[(i, j)] = v;
            l[(j, i)] = v;
        }
    }
    Ok(l)
}

pub fn pairwise_huber(h: &Matrix, scale: &HuberScale) -> Result<Matrix> {
    pairwise_distance(h, &Penalty::Huber(scale.clone()))
}

/// Row-wise softmax of `−L` over `l ≠ i`, with `p_ii = 0`.
pub fn neighbor_probs(l: &Matrix) -> Result<Matrix> {
    let n = l.rows();
    if l.cols() != n {
        return Err(Error::shape("neighbor_probs", format!("{:?} is not square", l.shape())));
    }
    if n < 2 {
        return Err(Error::invalid("neighbour probabilities need at least 2 items"));
    }
    let mut p = Matrix::zeros(n, n);
    for i in 0..n {
        let row = l.row(i);
        let min = row
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != i)
            .map(|(_, &v)| v)
            .fold(f64::INFINITY, f64::min);
        let mut total = 0.0;
        let out = p.row_mut(i);
        for j in 0..n {
            if j != i {
                let e = (min - row[j]).exp();
                out[j] = e;
                total += e;
            }
        }
        for v in out.iter_mut() {
            *v /= total;
        }
    }
    Ok(p)
}

/// `J = 1 − (1/N²) Σ_{i≠j} s_ij p_ij`.
pub fn nca_loss(p: &Matrix, s: &SimilarityMatrix) -> Result<f64> {
    let n = p.rows();
    if s.len() != n || p.cols() != n {
        return Err(Error::shape(
            "nca_loss",
            format!("p is {:?}, similarity is {n}x{n}", p.shape()),
        ));
    }
    let mut mass = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j && s.similar(i, j) {
                mass += p[(i, j)];
            }
        }
    }
    Ok(1.0 - mass / (n * n) as f64)
}

/// `∂J/∂h_i` for the robust NCA loss, `N × K`.
///
/// With `P_l = Σ_{q≠l} s_lq p_lq` and `ρ'` applied bitwise,
///
/// ```text
/// G_i = Σ_{l: s_li>0} p_li ρ'(h_l−h_i) − Σ_{l≠i} P_l p_li ρ'(h_l−h_i)
///     − Σ_{j: s_ij>0} p_ij ρ'(h_i−h_j) + P_i Σ_{z≠i} p_iz ρ'(h_i−h_z)
/// ```
///
/// is the gradient of the similar-pair mass `Σ s_ij p_ij`, so
/// `∂J/∂h_i = −G_i / N²`. The thresholds are treated as constants.
pub fn nca_grad(h: &Matrix, s: &SimilarityMatrix, p: &Matrix, penalty: &Penalty) -> Result<Matrix> {
    let (n, k) = h.shape();
    penalty.check_bits(k)?;
    if s.len() != n || p.shape() != (n, n) {
        return Err(Error::shape(
            "nca_grad",
            format!("H is {n}x{k}, p is {:?}, similarity is {}x{}", p.shape(), s.len(), s.len()),
        ));
    }
    let mass: Vec<f64> = (0..n)
        .map(|l| (0..n).filter(|&q| q != l && s.similar(l, q)).map(|q| p[(l, q)]).sum())
        .collect();

    let norm = -1.0 / (n * n) as f64;
    let mut grad = Matrix::zeros(n, k);
    let mut d = vec![0.0; k];
    for i in 0..n {
        let hi = h.row(i);
        let out = grad.row_mut(i);
        for l in 0..n {
            if l == i {
                continue;
            }
            let hl = h.row(l);
            for (bit, dv) in d.iter_mut().enumerate() {
                // ρ' is odd, so ρ'(h_l − h_i) = −ρ'(h_i − h_l)
                *dv = penalty.grad(hi[bit] - hl[bit], bit);
            }
            // incoming terms: l treats i as a neighbour
            let w_in = p[(l, i)] * (s.get(l, i) - mass[l]);
            // outgoing terms: i treats l as a neighbour
            let w_out = p[(i, l)] * (s.get(i, l) - mass[i]);
            let coeff = norm * (-w_in - w_out);
            for (o, dv) in out.iter_mut().zip(&d) {
                *o += coeff * dv;
            }
        }
    }
    Ok(grad)
}

#[inline]
fn log_cosh(x: f64) -> f64 {
    let a = x.abs();
    a + (-2.0 * a).exp().ln_1p() - std::f64::consts::LN_2
}

/// `Σ log cosh(|h| − 1)` over every entry.
pub fn quant_loss(h: &Matrix) -> f64 {
    h.as_slice().iter().map(|&v| log_cosh(v.abs() - 1.0)).sum()
}

/// Entrywise `tanh(|h| − 1)·sgn(h)`.
pub fn quant_grad(h: &Matrix) -> Matrix {
    h.map(|v| (v.abs() - 1.0).tanh() * sgn(v))
}

/// Mean of `| |h| − 1 |` over all entries.
pub fn quantization_error(h: &Matrix) -> f64 {
    if h.is_empty() {
        return 0.0;
    }
    h.as_slice().iter().map(|v| (v.abs() - 1.0).abs()).sum::<f64>() / h.as_slice().len() as f64
}

/// `(λ_MI, λ_SI)` at epoch `t`: `λ_MI = 1 − ½(1 − t/t_max)²`, `λ_SI = 1 − λ_MI`.
/// `t` is clamped to `[0, t_max]`.
pub fn tradeoff_schedule(t: f64, t_max: f64) -> (f64, f64) {
    debug_assert!(t_max >= 1.0);
    let t = t.clamp(0.0, t_max);
    let rest = 1.0 - t / t_max;
    let mi = 1.0 - 0.5 * rest * rest;
    (mi, 1.0 - mi)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub mi: f64,
    pub si: f64,
    pub quant: f64,
    pub decay: f64,
}

#[derive(Debug, Clone)]
pub struct CompositeLoss {
    pub total: f64,
    pub j_mi: f64,
    pub j_si: f64,
    pub j_q: f64,
    pub r_w: f64,
    /// `∂J/∂h^MI`, one row per bag.
    pub d_h_mi: Matrix,
    /// `∂J/∂h^SI`, one row per instance.
    pub d_h_si: Matrix,
}

/// Robust NCA value and gradient for one head.
pub fn nca_value_and_grad(h: &Matrix, s: &SimilarityMatrix, penalty: &Penalty) -> Result<(f64, Matrix)> {
    let l = pairwise_distance(h, penalty)?;
    let p = neighbor_probs(&l)?;
    let j = nca_loss(&p, s)?;
    let g = nca_grad(h, s, &p, penalty)?;
    Ok((j, g))
}

/// `J = λ_MI J^MI + λ_SI J^SI + λ_q J_Q(h^MI) + λ_w R_W`.
///
/// `r_w` is the current weight-decay value; its gradient is added during
/// backpropagation. Heads with zero weight get an all-zero gradient.
#[allow(clippy::too_many_arguments)]
pub fn composite_loss(
    h_mi: &Matrix,
    h_si: &Matrix,
    s_mi: &SimilarityMatrix,
    s_si: &SimilarityMatrix,
    pen_mi: &Penalty,
    pen_si: &Penalty,
    weights: &LossWeights,
    r_w: f64,
) -> Result<CompositeLoss> {
    let (j_mi, mut d_h_mi) = nca_value_and_grad(h_mi, s_mi, pen_mi)?;
    d_h_mi.scale(weights.mi);

    let (j_si, d_h_si) = if weights.si != 0.0 {
        let (j, mut g) = nca_value_and_grad(h_si, s_si, pen_si)?;
        g.scale(weights.si);
        (j, g)
    } else {
        let l = pairwise_distance(h_si, pen_si)?;
        let j = nca_loss(&neighbor_probs(&l)?, s_si)?;
        (j, Matrix::zeros(h_si.rows(), h_si.cols()))
    };

    let j_q = quant_loss(h_mi);
    if weights.quant != 0.0 {
        let mut qg = quant_grad(h_mi);
        qg.scale(weights.quant);
        d_h_mi.add_assign(&qg)?;
    }

    let total = weights.mi * j_mi + weights.si * j_si + weights.quant * j_q + weights.decay * r_w;
    Ok(CompositeLoss {
        total,
        j_mi,
        j_si,
        j_q,
        r_w,
        d_h_mi,
        d_h_si,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::similarity_from_labels;
    use crate::numeric::Rng;

    fn random_codes(rng: &mut Rng, n: usize, k: usize) -> Matrix {
        Matrix::from_vec(n, k, (0..n * k).map(|_| rng.uniform(-1.0, 1.0)).collect()).unwrap()
    }

    fn central_diff<F: Fn(f64) -> f64>(f: F, x: f64, eps: f64) -> f64 {
        (f(x + eps) - f(x - eps)) / (2.0 * eps)
    }

    #[test]
    fn huber_values() {
        assert_eq!(huber_rho(1.0, 1.345), 0.5);
        // 1.345·2 − ½·1.345² = 2.69 − 0.9045125
        assert!((huber_rho(2.0, 1.345) - 1.7854875).abs() < 1e-12);
        for c in [0.1, 1.0, 1.345, 3.0] {
            assert!((huber_rho(c, c) - 0.5 * c * c).abs() < 1e-15);
            assert!((huber_rho(-c, c) - 0.5 * c * c).abs() < 1e-15);
        }
    }

    #[test]
    fn huber_grad_values() {
        assert_eq!(huber_rho_grad(0.5, 1.345), 0.5);
        assert_eq!(huber_rho_grad(-3.0, 1.345), -1.345);
        for r in [0.7, 2.0] {
            let fd = central_diff(|x| huber_rho(x, 1.345), r, 1e-6);
            assert!((fd - huber_rho_grad(r, 1.345)).abs() < 1e-8, "r={r}: {fd}");
        }
    }

    #[test]
    fn scale_from_hand_residuals() {
        let mut per_bit = vec![vec![1.0, 2.0, 3.0, 4.0, 100.0]; 2];
        let s = HuberScale::from_residuals(&mut per_bit, 2).unwrap();
        assert_eq!(s.sigma()[0], 1.485);
        assert_eq!(s.c()[0], 1.345 * 1.485);
        assert!((s.c()[1] - 1.997325).abs() < 1e-15);
    }

    #[test]
    fn scale_floor_and_warmup() {
        // identical codes: every residual is zero
        let h = Matrix::from_rows(&[[0.5, -0.2], [0.5, -0.2], [0.5, -0.2]]).unwrap();
        let s = estimate_scale(&h, 3).unwrap();
        assert!(s.c().iter().all(|&c| c == 1.345 * 1e-6));

        let mut rng = Rng::new(11);
        let h = random_codes(&mut rng, 9, 5);
        let first = estimate_scale(&h, 1).unwrap();
        let second = estimate_scale(&h, 2).unwrap();
        for (a, b) in first.c().iter().zip(second.c()) {
            assert_eq!(*a, 7.0 * b);
        }
        assert!(estimate_scale(&Matrix::zeros(1, 4), 2).is_err());
    }

    #[test]
    fn pairwise_examples() {
        let h = Matrix::from_rows(&[[1.0, 1.0], [-1.0, 1.0]]).unwrap();
        let scale = HuberScale::new(vec![1.0, 1.0]).unwrap();
        let l = pairwise_huber(&h, &scale).unwrap();
        assert_eq!(l[(0, 1)], 1.5);
        assert_eq!(l[(1, 0)], 1.5);
        assert_eq!(l[(0, 0)], 0.0);

        let same = Matrix::from_rows(&[[0.3, -0.1], [0.3, -0.1]]).unwrap();
        assert_eq!(pairwise_huber(&same, &scale).unwrap()[(0, 1)], 0.0);
    }

    #[test]
    fn neighbor_prob_examples() {
        let l = Matrix::from_rows(&[[0.0, 3.0], [3.0, 0.0]]).unwrap();
        let p = neighbor_probs(&l).unwrap();
        assert_eq!(p.as_slice(), &[0.0, 1.0, 1.0, 0.0]);

        let l = Matrix::from_rows(&[[0.0, 2.0, 2.0], [2.0, 0.0, 2.0], [2.0, 2.0, 0.0]]).unwrap();
        let p = neighbor_probs(&l).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(p[(i, j)], if i == j { 0.0 } else { 0.5 });
            }
        }
        assert!(neighbor_probs(&Matrix::zeros(1, 1)).is_err());
    }

    #[test]
    fn neighbor_probs_survive_huge_distances() {
        let l = Matrix::from_rows(&[[0.0, 1e4, 2e4], [1e4, 0.0, 5e3], [2e4, 5e3, 0.0]]).unwrap();
        let p = neighbor_probs(&l).unwrap();
        assert!(p.all_finite());
        assert_eq!(p[(0, 1)], 1.0);
    }

    #[test]
    fn nca_loss_examples() {
        let mut rng = Rng::new(2);
        let h = random_codes(&mut rng, 4, 3);
        let p = neighbor_probs(&pairwise_distance(&h, &Penalty::L2).unwrap()).unwrap();
        let dissimilar = similarity_from_labels(&[0, 1, 2, 3]);
        assert_eq!(nca_loss(&p, &dissimilar).unwrap(), 1.0);

        let h2 = random_codes(&mut rng, 2, 3);
        let p2 = neighbor_probs(&pairwise_distance(&h2, &Penalty::L2).unwrap()).unwrap();
        let j = nca_loss(&p2, &similarity_from_labels(&[5, 5])).unwrap();
        assert_eq!(j, 0.5);

        let all_same = similarity_from_labels(&[0, 0, 0, 0]);
        let j = nca_loss(&p, &all_same).unwrap();
        assert!((j - (1.0 - 4.0 / 16.0)).abs() < 1e-12);
    }

    #[test]
    fn nca_grad_zero_for_identical_similar_codes() {
        let h = Matrix::from_rows(&[[0.2, -0.4, 0.9]; 4]).unwrap();
        let s = similarity_from_labels(&[1, 1, 1, 1]);
        let pen = Penalty::Huber(HuberScale::new(vec![0.5; 3]).unwrap());
        let (_, g) = nca_value_and_grad(&h, &s, &pen).unwrap();
        assert!(g.as_slice().iter().all(|&v| v == 0.0));
    }

    fn nca_fd_check(penalty: Penalty, seed: u64) {
        let mut rng = Rng::new(seed);
        let (n, k) = (5, 4);
        let h = random_codes(&mut rng, n, k);
        let s = similarity_from_labels(&[0, 1, 0, 1, 1]);
        let (_, g) = nca_value_and_grad(&h, &s, &penalty).unwrap();
        let eps = 1e-6;
        for i in 0..n {
            for bit in 0..k {
                let f = |x: f64| {
                    let mut hh = h.clone();
                    hh[(i, bit)] = x;
                    let p = neighbor_probs(&pairwise_distance(&hh, &penalty).unwrap()).unwrap();
                    nca_loss(&p, &s).unwrap()
                };
                let fd = central_diff(f, h[(i, bit)], eps);
                let a = g[(i, bit)];
                let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-8);
                assert!(rel < 1e-5, "({i},{bit}): analytic {a} vs fd {fd}");
            }
        }
    }

    #[test]
    fn nca_grad_matches_finite_differences() {
        for seed in 0..5 {
            nca_fd_check(Penalty::L2, seed);
            // thresholds small enough that both branches are exercised
            nca_fd_check(Penalty::Huber(HuberScale::new(vec![0.4, 0.7, 1.0, 0.25]).unwrap()), seed);
        }
    }

    #[test]
    fn nca_grad_bounded_by_thresholds() {
        // Σ_l p_il = 1 and p_li ≤ 1, so |∂J/∂h_i^k| ≤ (c_k + (N−1)c_k)/N² = c_k/N
        let mut rng = Rng::new(8);
        let mut h = random_codes(&mut rng, 8, 4);
        h.row_mut(0).iter_mut().for_each(|v| *v *= 50.0); // planted outlier
        let c = vec![0.3, 0.5, 0.2, 0.4];
        let pen = Penalty::Huber(HuberScale::new(c.clone()).unwrap());
        let s = similarity_from_labels(&[0, 0, 1, 1, 0, 1, 0, 1]);
        let (_, g) = nca_value_and_grad(&h, &s, &pen).unwrap();
        let n = 8.0;
        for i in 0..8 {
            for (bit, ck) in c.iter().enumerate() {
                assert!(g[(i, bit)].abs() <= ck / n, "{} > {}", g[(i, bit)], ck / n);
            }
        }
        // per-pair pulls: Huber clips at c_k, L2 grows with the outlier's residual
        let huber_pull = (0..8)
            .flat_map(|l| (0..4).map(move |k| (l, k)))
            .map(|(l, k)| pen.grad(h[(0, k)] - h[(l, k)], k).abs() / c[k])
            .fold(0.0, f64::max);
        let l2_pull = (0..8)
            .flat_map(|l| (0..4).map(move |k| (l, k)))
            .map(|(l, k)| Penalty::L2.grad(h[(0, k)] - h[(l, k)], k).abs() / c[k])
            .fold(0.0, f64::max);
        assert!(huber_pull <= 1.0);
        assert!(l2_pull > 10.0, "{l2_pull}");
    }

    #[test]
    fn quant_examples() {
        let h = Matrix::from_rows(&[[1.0, -1.0], [-1.0, 1.0]]).unwrap();
        assert_eq!(quant_loss(&h), 0.0);
        let z = Matrix::zeros(1, 2);
        // 2·log cosh(1)
        assert!((quant_loss(&z) - 0.8675616609660398).abs() < 1e-12);
        let g = quant_grad(&Matrix::from_rows(&[[1.0, 0.5, 0.0]]).unwrap());
        assert_eq!(g[(0, 0)], 0.0);
        assert!((g[(0, 1)] - (-0.46211715726000974)).abs() < 1e-12);
        assert!((g[(0, 2)] - (-1.0f64).tanh()).abs() < 1e-15);
        for x in [-0.8, 0.3, 1.7] {
            let fd = central_diff(|v| quant_loss(&Matrix::from_vec(1, 1, vec![v]).unwrap()), x, 1e-6);
            let a = quant_grad(&Matrix::from_vec(1, 1, vec![x]).unwrap())[(0, 0)];
            assert!((fd - a).abs() < 1e-8, "x={x}");
        }
    }

    #[test]
    fn schedule_values() {
        assert_eq!(tradeoff_schedule(0.0, 150.0), (0.5, 0.5));
        assert_eq!(tradeoff_schedule(150.0, 150.0), (1.0, 0.0));
        assert_eq!(tradeoff_schedule(400.0, 150.0), (1.0, 0.0));
        let (mi, _) = tradeoff_schedule(1.00671140939597, 150.0);
        assert!((mi - 0.506688887887933).abs() < 1e-12);
    }

    #[test]
    fn composite_degenerate_weights() {
        let mut rng = Rng::new(4);
        let h_mi = random_codes(&mut rng, 4, 3);
        let h_si = random_codes(&mut rng, 7, 3);
        let s_mi = similarity_from_labels(&[0, 1, 0, 1]);
        let s_si = similarity_from_labels(&[0, 0, 1, 0, 0, 1, 1]);
        let only_mi = LossWeights { mi: 1.0, si: 0.0, quant: 0.0, decay: 0.0 };
        let out = composite_loss(&h_mi, &h_si, &s_mi, &s_si, &Penalty::L2, &Penalty::L2, &only_mi, 3.0).unwrap();
        let p = neighbor_probs(&pairwise_distance(&h_mi, &Penalty::L2).unwrap()).unwrap();
        assert_eq!(out.total, nca_loss(&p, &s_mi).unwrap());
        assert!(out.d_h_si.as_slice().iter().all(|&v| v == 0.0));

        let none = LossWeights { mi: 0.0, si: 0.0, quant: 0.0, decay: 0.0 };
        let out = composite_loss(&h_mi, &h_si, &s_mi, &s_si, &Penalty::L2, &Penalty::L2, &none, 3.0).unwrap();
        assert_eq!(out.total, 0.0);
        assert_eq!(out.d_h_mi.max_abs(), 0.0);
        assert_eq!(out.d_h_si.max_abs(), 0.0);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;
        use crate::numeric::Rng;

        proptest! {
            #[test]
            fn huber_continuous_at_threshold(c in 1e-3f64..10.0) {
                prop_assert!((huber_rho(c, c) - 0.5 * c * c).abs() <= 1e-12 * c * c.max(1.0));
                let inner = c; // quadratic branch slope at r = c
                let outer = c * sgn(c);
                prop_assert_eq!(huber_rho_grad(c, c), inner);
                prop_assert_eq!(outer, c);
                prop_assert!((huber_rho_grad(c * (1.0 + 1e-12), c) - c).abs() <= 1e-12 * c.max(1.0));
            }

            #[test]
            fn huber_grad_is_clipped(r in -1e3f64..1e3, c in 1e-3f64..10.0) {
                prop_assert!(huber_rho_grad(r, c).abs() <= c);
            }

            #[test]
            fn probs_rows_sum_to_one_and_shift_invariant(seed in any::<u64>(), n in 2usize..10, shift in -50.0f64..50.0) {
                let mut rng = Rng::new(seed);
                let mut l = Matrix::zeros(n, n);
                for i in 0..n {
                    for j in i + 1..n {
                        let v = rng.uniform(0.0, 20.0);
                        l[(i, j)] = v;
                        l[(j, i)] = v;
                    }
                }
                let p = neighbor_probs(&l).unwrap();
                for i in 0..n {
                    prop_assert_eq!(p[(i, i)], 0.0);
                    let s: f64 = p.row(i).iter().sum();
                    prop_assert!((s - 1.0).abs() < 1e-12);
                }
                let mut shifted = l.clone();
                shifted.row_mut(0).iter_mut().for_each(|v| *v += shift);
                let q = neighbor_probs(&shifted).unwrap();
                for j in 0..n {
                    prop_assert!((p[(0, j)] - q[(0, j)]).abs() < 1e-12);
                }
            }

            #[test]
            fn large_threshold_is_half_squared_euclidean(seed in any::<u64>(), n in 2usize..=8, k in 1usize..=8) {
                let mut rng = Rng::new(seed);
                let h = random_codes(&mut rng, n, k);
                let scale = HuberScale::new(vec![10.0; k]).unwrap();
                let l = pairwise_huber(&h, &scale).unwrap();
                for i in 0..n {
                    for j in 0..n {
                        let e: f64 = h.row(i).iter().zip(h.row(j)).map(|(a, b)| 0.5 * (a - b) * (a - b)).sum();
                        prop_assert!((l[(i, j)] - e).abs() <= 1e-12);
                    }
                }
            }

            #[test]
            fn schedule_sums_to_one_and_is_monotone(a in 0.0f64..200.0, b in 0.0f64..200.0, t_max in 1.0f64..200.0) {
                let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
                let (m1, s1) = tradeoff_schedule(lo, t_max);
                let (m2, _) = tradeoff_schedule(hi, t_max);
                prop_assert!((m1 + s1 - 1.0).abs() < 1e-15);
                prop_assert!(m1 <= m2);
                prop_assert!(s1 >= 0.0);
            }

            #[test]
            fn nca_loss_bounds_and_monotonicity(seed in any::<u64>(), n in 2usize..8) {
                let mut rng = Rng::new(seed);
                let h = random_codes(&mut rng, n, 4);
                let labels: Vec<usize> = (0..n).map(|_| rng.below(3)).collect();
                let s = similarity_from_labels(&labels);
                let p = neighbor_probs(&pairwise_distance(&h, &Penalty::L2).unwrap()).unwrap();
                let j = nca_loss(&p, &s).unwrap();
                let nn = (n * n) as f64;
                prop_assert!(j <= 1.0 && j >= 1.0 - (nn - n as f64) / nn);
                if let Some((i, jj)) = (0..n).flat_map(|i| (0..n).map(move |j| (i, j))).find(|&(i, j)| i != j && s.similar(i, j)) {
                    let mut bumped = p.clone();
                    bumped[(i, jj)] += 0.01;
                    prop_assert!(nca_loss(&bumped, &s).unwrap() < j);
                }
            }

            #[test]
            fn quant_loss_nonnegative(seed in any::<u64>()) {
                let mut rng = Rng::new(seed);
                let h = Matrix::from_vec(3, 3, (0..9).map(|_| rng.uniform(-3.0, 3.0)).collect()).unwrap();
                prop_assert!(quant_loss(&h) >= 0.0);
            }
        }
    }
}
