//! Monotonic chunkwise attention.
//!
//! Training marginalizes the hard monotonic boundary over all selection paths
//! (expected alignments `alpha`), spreads each expected boundary over a window
//! of `w` frames ending at it (`beta`), and reads the context from `beta`. At
//! test time the boundary is chosen by thresholding the selection probability.
//!
//! Frame indices are 0-based inside this module except where a function says
//! it returns 1-based positions.

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{
    clamp_prob, cumsum, exclusive_cumprod, CustomOp, Graph, Tensor, Var, PROB_FLOOR,
};
use crate::params::{Bound, ParamId, ParamStore};

pub const DEFAULT_CHUNK_WIDTH: usize = 4;
pub const ENERGY_OFFSET_INIT: f64 = -4.0;
/// Selection threshold for hard decisions at test time.
pub const SELECTION_THRESHOLD: f64 = 0.5;

/// `e = g * (v / |v|) . relu(W_h h + W_s s + b) + r`
#[derive(Clone, Copy, Debug)]
pub struct MonotonicEnergy {
    pub w_h: ParamId,
    pub w_s: ParamId,
    pub b: ParamId,
    pub v: ParamId,
    pub g: ParamId,
    pub r: ParamId,
}

/// `u = v . relu(W_h h + W_s s + b)`, no weight normalization and no offset.
#[derive(Clone, Copy, Debug)]
pub struct ChunkEnergy {
    pub w_h: ParamId,
    pub w_s: ParamId,
    pub b: ParamId,
    pub v: ParamId,
}

impl MonotonicEnergy {
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        enc_dim: usize,
        dec_dim: usize,
        attn_dim: usize,
        offset: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let scale_h = 1.0 / (enc_dim as f64).sqrt();
        let scale_s = 1.0 / (dec_dim as f64).sqrt();
        let scale_v = 1.0 / (attn_dim as f64).sqrt();
        MonotonicEnergy {
            w_h: store.add_uniform(&format!("{prefix}.w_h"), &[enc_dim, attn_dim], scale_h, rng),
            w_s: store.add_uniform(&format!("{prefix}.w_s"), &[dec_dim, attn_dim], scale_s, rng),
            b: store.add(format!("{prefix}.b"), Tensor::zeros(&[attn_dim])),
            v: store.add_uniform(&format!("{prefix}.v"), &[attn_dim], scale_v, rng),
            g: store.add(format!("{prefix}.g"), Tensor::scalar(scale_v)),
            r: store.add(format!("{prefix}.r"), Tensor::scalar(offset)),
        }
    }

    /// `h W_h` for every memory row.
    pub fn project(&self, g: &mut Graph, p: &Bound, h: Var) -> Var {
        g.matmul(h, p[self.w_h])
    }

    /// Energies for each row of `proj` (`[n, A]`) against decoder state `s` (`[1, D]`).
    pub fn energies(&self, g: &mut Graph, p: &Bound, proj: Var, s: Var) -> Result<Var> {
        let v_norm: f64 = g.data(p[self.v]).iter().map(|x| x * x).sum::<f64>().sqrt();
        if v_norm == 0.0 {
            return Err(Error::InvalidArgument("monotonic energy direction v has zero norm".into()));
        }
        let n = g.value(proj).rows();
        let attn = g.value(proj).cols();
        let sw = g.matmul(s, p[self.w_s]);
        let bias = g.add(sw, p[self.b]);
        let pre = g.add_row(proj, bias);
        let act = g.relu(pre);
        let vhat = g.normalize(p[self.v]);
        let vcol = g.reshape(vhat, &[attn, 1]);
        let dots = g.matmul(act, vcol);
        let scaled = g.mul_scalar(dots, p[self.g]);
        let shifted = g.add_row(scaled, p[self.r]);
        Ok(g.reshape(shifted, &[n]))
    }
}

impl ChunkEnergy {
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        enc_dim: usize,
        dec_dim: usize,
        attn_dim: usize,
        rng: &mut impl Rng,
    ) -> Self {
        ChunkEnergy {
            w_h: store.add_uniform(&format!("{prefix}.w_h"), &[enc_dim, attn_dim], 1.0 / (enc_dim as f64).sqrt(), rng),
            w_s: store.add_uniform(&format!("{prefix}.w_s"), &[dec_dim, attn_dim], 1.0 / (dec_dim as f64).sqrt(), rng),
            b: store.add(format!("{prefix}.b"), Tensor::zeros(&[attn_dim])),
            v: store.add_uniform(&format!("{prefix}.v"), &[attn_dim], 1.0 / (attn_dim as f64).sqrt(), rng),
        }
    }

    pub fn project(&self, g: &mut Graph, p: &Bound, h: Var) -> Var {
        g.matmul(h, p[self.w_h])
    }

    pub fn energies(&self, g: &mut Graph, p: &Bound, proj: Var, s: Var) -> Var {
        let n = g.value(proj).rows();
        let attn = g.value(proj).cols();
        let sw = g.matmul(s, p[self.w_s]);
        let bias = g.add(sw, p[self.b]);
        let pre = g.add_row(proj, bias);
        let act = g.relu(pre);
        let vcol = g.reshape(p[self.v], &[attn, 1]);
        let dots = g.matmul(act, vcol);
        g.reshape(dots, &[n])
    }
}

/// Monotonic energies and selection probabilities of one decoder state against
/// memories `h` (`[T, d]`), evaluated outside any training graph.
pub fn monotonic_energy(
    store: &ParamStore,
    energy: &MonotonicEnergy,
    h: &Tensor,
    s: &[f64],
) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut g = Graph::new();
    let bound = store.bind(&mut g);
    let hv = g.leaf(h.clone());
    let sv = g.leaf(Tensor::new(vec![1, s.len()], s.to_vec())?);
    let proj = energy.project(&mut g, &bound, hv);
    let e = energy.energies(&mut g, &bound, proj, sv)?;
    let e = g.data(e).to_vec();
    let p = e.iter().map(|&x| crate::numerics::sigmoid(x)).collect();
    Ok((e, p))
}

/// One row of the alignment recurrence in scan form:
/// `q[0] = prev[0]`, `q[j] = (1 - p[j-1]) q[j-1] + prev[j]`, `alpha[j] = p[j] q[j]`.
///
/// This is the same sum over `k <= j` of `prev[k] * prod_{l=k}^{j-1} (1 - p[l])`
/// without ever dividing by `p`.
fn align_row_forward(prev: &[f64], p: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let t = p.len();
    let mut q = vec![0.0; t];
    let mut alpha = vec![0.0; t];
    for j in 0..t {
        let pj = clamp_prob(p[j]);
        q[j] = if j == 0 { prev[0] } else { (1.0 - clamp_prob(p[j - 1])) * q[j - 1] + prev[j] };
        alpha[j] = pj * q[j];
    }
    (alpha, q)
}

struct AlignRowOp;

impl CustomOp for AlignRowOp {
    fn backward(&self, grad: &[f64], inputs: &[&Tensor], _output: &Tensor) -> Vec<Vec<f64>> {
        let (prev, p) = (inputs[0].data(), inputs[1].data());
        let t = p.len();
        let (_, q) = align_row_forward(prev, p);
        let mut d_prev = vec![0.0; t];
        let mut d_p = vec![0.0; t];
        let mut d_q_next = 0.0;
        for j in (0..t).rev() {
            let pj = clamp_prob(p[j]);
            let d_q = grad[j] * pj + if j + 1 < t { d_q_next * (1.0 - pj) } else { 0.0 };
            let mut dp = grad[j] * q[j];
            if j + 1 < t {
                dp -= d_q_next * q[j];
            }
            // The clamp is flat outside its range.
            d_p[j] = if p[j] > PROB_FLOOR && p[j] < 1.0 - PROB_FLOOR { dp } else { 0.0 };
            d_prev[j] = d_q;
            d_q_next = d_q;
        }
        vec![d_prev, d_p]
    }
}

/// Records one row of expected alignments on `g`.
pub fn align_row(g: &mut Graph, prev: Var, p: Var) -> Var {
    let (alpha, _) = align_row_forward(g.data(prev), g.data(p));
    let shape = g.value(p).shape().to_vec();
    g.custom(Box::new(AlignRowOp), &[prev, p], Tensor::new(shape, alpha).unwrap())
}

/// Initial alignment: all mass on the first frame.
pub fn initial_alignment(t: usize) -> Vec<f64> {
    let mut a = vec![0.0; t];
    if t > 0 {
        a[0] = 1.0;
    }
    a
}

/// Expected alignments `[U, T]` for selection probabilities `p` (`[U, T]`).
pub fn expected_alignment(p: &Tensor) -> Tensor {
    let (u, t) = (p.rows(), p.cols());
    let mut prev = initial_alignment(t);
    let mut data = Vec::with_capacity(u * t);
    for i in 0..u {
        let (alpha, _) = align_row_forward(&prev, p.row(i));
        data.extend_from_slice(&alpha);
        prev = alpha;
    }
    Tensor::new(vec![u, t], data).unwrap()
}

/// Same quantity as [`expected_alignment`] via the parallel cumulative form
/// `alpha_i = p_i * c_i * cumsum(alpha_{i-1} / c_i)` with
/// `c_i = exclusive_cumprod(1 - p_i)` and the denominator clamped.
///
/// Exact for short sequences; loses accuracy once `c_i` underflows the clamp,
/// which the scan form does not.
pub fn expected_alignment_parallel(p: &Tensor) -> Tensor {
    let (u, t) = (p.rows(), p.cols());
    let mut prev = initial_alignment(t);
    let mut data = Vec::with_capacity(u * t);
    for i in 0..u {
        let pr: Vec<f64> = p.row(i).iter().map(|&x| clamp_prob(x)).collect();
        let one_minus: Vec<f64> = pr.iter().map(|x| 1.0 - x).collect();
        let c = exclusive_cumprod(&one_minus);
        let ratio: Vec<f64> = prev.iter().zip(&c).map(|(a, ci)| a / ci.clamp(PROB_FLOOR, 1.0)).collect();
        let acc = cumsum(&ratio);
        let alpha: Vec<f64> = (0..t).map(|j| pr[j] * c[j] * acc[j]).collect();
        data.extend_from_slice(&alpha);
        prev = alpha;
    }
    Tensor::new(vec![u, t], data).unwrap()
}

/// `beta[j] = sum_{k=j}^{j+w-1} alpha[k] exp(u[j]) / sum_{l=k-w+1}^{k} exp(u[l])`,
/// windows truncated at the edges, each denominator shifted by its window max.
fn chunk_forward(alpha: &[f64], u: &[f64], w: usize) -> Vec<f64> {
    let t = alpha.len();
    let mut beta = vec![0.0; t];
    for k in 0..t {
        if alpha[k] == 0.0 {
            continue;
        }
        let lo = (k + 1).saturating_sub(w);
        let m = u[lo..=k].iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = u[lo..=k].iter().map(|x| (x - m).exp()).sum();
        for j in lo..=k {
            beta[j] += alpha[k] * (u[j] - m).exp() / denom;
        }
    }
    beta
}

struct ChunkAttentionOp {
    width: usize,
}

impl CustomOp for ChunkAttentionOp {
    fn backward(&self, grad: &[f64], inputs: &[&Tensor], _output: &Tensor) -> Vec<Vec<f64>> {
        let (alpha, u) = (inputs[0].data(), inputs[1].data());
        let t = alpha.len();
        let w = self.width;
        let mut d_alpha = vec![0.0; t];
        let mut d_u = vec![0.0; t];
        let mut weights = Vec::with_capacity(w);
        for k in 0..t {
            let lo = (k + 1).saturating_sub(w);
            let m = u[lo..=k].iter().copied().fold(f64::NEG_INFINITY, f64::max);
            weights.clear();
            weights.extend(u[lo..=k].iter().map(|x| (x - m).exp()));
            let denom: f64 = weights.iter().sum();
            weights.iter_mut().for_each(|c| *c /= denom);
            let mean: f64 = weights.iter().zip(&grad[lo..=k]).map(|(c, g)| c * g).sum();
            d_alpha[k] = mean;
            if alpha[k] != 0.0 {
                for (off, c) in weights.iter().enumerate() {
                    d_u[lo + off] += alpha[k] * c * (grad[lo + off] - mean);
                }
            }
        }
        vec![d_alpha, d_u]
    }
}

/// Records chunkwise attention weights for one row on `g`.
pub fn chunk_attend(g: &mut Graph, alpha: Var, u: Var, width: usize) -> Var {
    assert!(width >= 1, "chunk width must be positive");
    let beta = chunk_forward(g.data(alpha), g.data(u), width);
    let shape = g.value(alpha).shape().to_vec();
    g.custom(Box::new(ChunkAttentionOp { width }), &[alpha, u], Tensor::new(shape, beta).unwrap())
}

/// Chunkwise attention weights `[U, T]` from expected alignments and chunk energies.
pub fn chunkwise_attention(alpha: &Tensor, u: &Tensor, w: usize) -> Result<Tensor> {
    if w == 0 {
        return Err(Error::InvalidArgument("chunk width must be at least 1".into()));
    }
    if alpha.shape() != u.shape() {
        return Err(Error::Shape(format!("alpha {:?} vs u {:?}", alpha.shape(), u.shape())));
    }
    let mut data = Vec::with_capacity(alpha.len());
    for i in 0..alpha.rows() {
        data.extend(chunk_forward(alpha.row(i), u.row(i), w));
    }
    Tensor::new(alpha.shape().to_vec(), data)
}

/// `b_i = sum_j j * alpha[i, j]` with 1-based `j`, not renormalized.
pub fn expected_boundary(alpha: &Tensor) -> Vec<f64> {
    (0..alpha.rows())
        .map(|i| alpha.row(i).iter().enumerate().map(|(j, a)| (j + 1) as f64 * a).sum())
        .collect()
}

/// 1-based frame positions `[1, 2, ..., t]`.
pub fn frame_positions(t: usize) -> Vec<f64> {
    (1..=t).map(|j| j as f64).collect()
}

/// Per-utterance attention quantities from a teacher-forced pass.
#[derive(Clone, Debug)]
pub struct AlignmentState {
    pub p: Tensor,
    pub alpha: Tensor,
    pub beta: Tensor,
    /// Expected boundaries, 1-based.
    pub b_mocha: Vec<f64>,
}

/// Result of a hard boundary search for one output token.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StepOutcome {
    /// 1-based frame index whose selection probability crossed the threshold.
    Boundary(usize),
    NoEmission,
}

/// Resumable left-to-right threshold scan for one output token.
///
/// Each frame is examined at most once, so feeding memories in several pieces
/// evaluates the same frames as scanning them all at once.
#[derive(Clone, Debug)]
pub struct BoundaryScanner {
    next: usize,
    evaluations: usize,
}

impl BoundaryScanner {
    /// Starts at `prev_boundary` (1-based); the first token starts at 1.
    pub fn new(prev_boundary: usize) -> Self {
        BoundaryScanner { next: prev_boundary.max(1) - 1, evaluations: 0 }
    }

    /// Scans frames up to `available` (exclusive, 0-based count). Returns the
    /// 1-based boundary on the first `p > 0.5`, or `None` if the available
    /// frames are exhausted.
    pub fn advance(&mut self, available: usize, mut prob_at: impl FnMut(usize) -> f64) -> Option<usize> {
        while self.next < available {
            let j = self.next;
            self.evaluations += 1;
            if prob_at(j) > SELECTION_THRESHOLD {
                return Some(j + 1);
            }
            self.next += 1;
        }
        None
    }

    pub fn evaluations(&self) -> usize {
        self.evaluations
    }
}

/// Hard boundary decision over selection probabilities of the frames seen so far.
pub fn streaming_decode_step(p_prefix: &[f64], prev_boundary: usize) -> StepOutcome {
    let mut scanner = BoundaryScanner::new(prev_boundary);
    match scanner.advance(p_prefix.len(), |j| p_prefix[j]) {
        Some(b) => StepOutcome::Boundary(b),
        None => StepOutcome::NoEmission,
    }
}

/// 0-based frame range `[boundary - w, boundary)` used for chunk attention at
/// a 1-based boundary, truncated at the first frame.
pub fn hard_chunk_window(boundary: usize, width: usize) -> std::ops::Range<usize> {
    boundary.saturating_sub(width)..boundary
}
