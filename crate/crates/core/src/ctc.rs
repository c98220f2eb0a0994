//! Connectionist temporal classification: loss by forward-backward over the
//! blank-interleaved label sequence, most-probable-path forced alignment, and
//! reference boundary extraction.
//!
//! Class 0 is the blank. Frame positions handed out of this module are 1-based.

use crate::error::{Error, Result};
use crate::numerics::{log_add, CustomOp, Graph, Tensor, Var};

pub const BLANK: usize = 0;

/// Forward and backward log-domain trellises for one utterance.
#[derive(Clone, Debug)]
pub struct CtcLattice {
    /// `[T, 2U+1]`, emission at `t` included.
    pub log_alpha: Tensor,
    /// `[T, 2U+1]`, emission at `t` included.
    pub log_beta: Tensor,
    pub extended_labels: Vec<usize>,
    pub log_likelihood: f64,
}

impl CtcLattice {
    /// Total log-likelihood read off the final states of the forward trellis.
    pub fn forward_log_likelihood(&self) -> f64 {
        let t = self.log_alpha.rows();
        let s = self.extended_labels.len();
        let row = self.log_alpha.row(t - 1);
        if s >= 2 {
            log_add(row[s - 1], row[s - 2])
        } else {
            row[s - 1]
        }
    }

    /// Total log-likelihood read off the initial states of the backward trellis.
    pub fn backward_log_likelihood(&self) -> f64 {
        let row = self.log_beta.row(0);
        if row.len() >= 2 {
            log_add(row[0], row[1])
        } else {
            row[0]
        }
    }

    /// Posterior state occupancy summed per class: `[T, V]`, each row sums to 1.
    pub fn class_occupancy(&self, log_posteriors: &Tensor) -> Tensor {
        let (t_len, v) = (log_posteriors.rows(), log_posteriors.cols());
        let mut occ = vec![0.0; t_len * v];
        for t in 0..t_len {
            let (a, b) = (self.log_alpha.row(t), self.log_beta.row(t));
            for (s, &k) in self.extended_labels.iter().enumerate() {
                let lg = a[s] + b[s] - log_posteriors.get2(t, k) - self.log_likelihood;
                if lg > f64::NEG_INFINITY {
                    occ[t * v + k] += lg.exp();
                }
            }
        }
        Tensor::new(vec![t_len, v], occ).unwrap()
    }
}

/// Blank-interleaved labels `[_, l1, _, l2, ..., _]`.
pub fn extend_labels(labels: &[usize]) -> Vec<usize> {
    let mut ext = Vec::with_capacity(2 * labels.len() + 1);
    ext.push(BLANK);
    for &l in labels {
        ext.push(l);
        ext.push(BLANK);
    }
    ext
}

/// Minimum number of frames a path for `labels` needs.
pub fn min_frames(labels: &[usize]) -> usize {
    labels.len() + labels.windows(2).filter(|w| w[0] == w[1]).count()
}

fn check_inputs(log_posteriors: &Tensor, labels: &[usize]) -> Result<()> {
    let (t, v) = (log_posteriors.rows(), log_posteriors.cols());
    if t == 0 || log_posteriors.is_empty() {
        return Err(Error::Empty("CTC needs at least one frame"));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l == BLANK || l >= v) {
        return Err(Error::InvalidArgument(format!("label {bad} outside 1..{v}")));
    }
    let required = min_frames(labels);
    if required > t {
        return Err(Error::InfeasibleAlignment { labels: labels.len(), required, frames: t });
    }
    Ok(())
}

/// How predecessor scores are merged in the trellis recursion.
trait Reducer {
    /// Combines candidate predecessor scores (ordered stay, advance, skip) and
    /// reports which candidate was chosen, if the reducer chooses one.
    fn reduce(candidates: &[f64]) -> (f64, usize);
}

struct SumReducer;
struct MaxReducer;

impl Reducer for SumReducer {
    fn reduce(c: &[f64]) -> (f64, usize) {
        (c.iter().copied().fold(f64::NEG_INFINITY, log_add), 0)
    }
}

impl Reducer for MaxReducer {
    /// Ties go to the earliest candidate: staying keeps the current state's
    /// entry frame earliest, so emissions land as far left as possible.
    fn reduce(c: &[f64]) -> (f64, usize) {
        let mut best = (c[0], 0);
        for (i, &x) in c.iter().enumerate().skip(1) {
            if x > best.0 {
                best = (x, i);
            }
        }
        best
    }
}

fn skip_allowed(ext: &[usize], s: usize) -> bool {
    s >= 2 && ext[s] != BLANK && ext[s] != ext[s - 2]
}

/// Forward recursion; returns the trellis and, per cell, the chosen predecessor offset.
fn forward<R: Reducer>(lp: &Tensor, ext: &[usize]) -> (Tensor, Vec<u8>) {
    let (t_len, n) = (lp.rows(), ext.len());
    let mut alpha = vec![f64::NEG_INFINITY; t_len * n];
    let mut back = vec![0u8; t_len * n];
    alpha[0] = lp.get2(0, ext[0]);
    if n > 1 {
        alpha[1] = lp.get2(0, ext[1]);
    }
    let mut cand = Vec::with_capacity(3);
    for t in 1..t_len {
        for s in 0..n {
            let prev = &alpha[(t - 1) * n..t * n];
            cand.clear();
            cand.push(prev[s]);
            if s >= 1 {
                cand.push(prev[s - 1]);
            }
            if skip_allowed(ext, s) {
                cand.push(prev[s - 2]);
            }
            let (score, pick) = R::reduce(&cand);
            alpha[t * n + s] = score + lp.get2(t, ext[s]);
            back[t * n + s] = pick as u8;
        }
    }
    (Tensor::new(vec![t_len, n], alpha).unwrap(), back)
}

fn backward_trellis(lp: &Tensor, ext: &[usize]) -> Tensor {
    let (t_len, n) = (lp.rows(), ext.len());
    let mut beta = vec![f64::NEG_INFINITY; t_len * n];
    let last = t_len - 1;
    beta[last * n + n - 1] = lp.get2(last, ext[n - 1]);
    if n > 1 {
        beta[last * n + n - 2] = lp.get2(last, ext[n - 2]);
    }
    for t in (0..last).rev() {
        for s in 0..n {
            let next = &beta[(t + 1) * n..(t + 2) * n];
            let mut acc = next[s];
            if s + 1 < n {
                acc = log_add(acc, next[s + 1]);
            }
            if s + 2 < n && skip_allowed(ext, s + 2) {
                acc = log_add(acc, next[s + 2]);
            }
            beta[t * n + s] = acc + lp.get2(t, ext[s]);
        }
    }
    Tensor::new(vec![t_len, n], beta).unwrap()
}

/// Negative log-likelihood of `labels` under per-frame log posteriors `[T, V]`.
pub fn ctc_loss(log_posteriors: &Tensor, labels: &[usize]) -> Result<(f64, CtcLattice)> {
    check_inputs(log_posteriors, labels)?;
    let ext = extend_labels(labels);
    let (log_alpha, _) = forward::<SumReducer>(log_posteriors, &ext);
    let log_beta = backward_trellis(log_posteriors, &ext);
    let mut lattice = CtcLattice { log_alpha, log_beta, extended_labels: ext, log_likelihood: 0.0 };
    lattice.log_likelihood = lattice.forward_log_likelihood();
    if !lattice.log_likelihood.is_finite() {
        return Err(Error::NonFinite(format!("CTC log-likelihood {}", lattice.log_likelihood)));
    }
    Ok((-lattice.log_likelihood, lattice))
}

struct CtcLossOp {
    /// d(loss)/d(log posteriors), `[T * V]`.
    grad: Vec<f64>,
}

impl CustomOp for CtcLossOp {
    fn backward(&self, grad: &[f64], _inputs: &[&Tensor], _output: &Tensor) -> Vec<Vec<f64>> {
        vec![self.grad.iter().map(|x| x * grad[0]).collect()]
    }
}

/// Records the CTC loss of `log_posteriors` (`[T, V]` node) on `g`.
pub fn ctc_loss_graph(g: &mut Graph, log_posteriors: Var, labels: &[usize]) -> Result<(Var, CtcLattice)> {
    let lp = g.value(log_posteriors);
    let (loss, lattice) = ctc_loss(lp, labels)?;
    let grad = lattice.class_occupancy(lp).into_data().into_iter().map(|x| -x).collect();
    let node = g.custom(Box::new(CtcLossOp { grad }), &[log_posteriors], Tensor::scalar(loss));
    Ok((node, lattice))
}

/// Most probable path (length `T`, class ids) that collapses to `labels`.
pub fn ctc_forced_align(log_posteriors: &Tensor, labels: &[usize]) -> Result<Vec<usize>> {
    check_inputs(log_posteriors, labels)?;
    let ext = extend_labels(labels);
    let (t_len, n) = (log_posteriors.rows(), ext.len());
    let (score, back) = forward::<MaxReducer>(log_posteriors, &ext);
    let last = score.row(t_len - 1);
    // Final blank first so a tie keeps the last label's emission earlier.
    let mut s = if n >= 2 && last[n - 2] > last[n - 1] { n - 2 } else { n - 1 };
    let mut path = vec![0usize; t_len];
    for t in (0..t_len).rev() {
        path[t] = ext[s];
        if t > 0 {
            s -= back[t * n + s] as usize;
        }
    }
    Ok(path)
}

/// 1-based frame positions per output token, ending with the end-of-sentence
/// position `T`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BoundarySeq {
    pub positions: Vec<usize>,
}

impl BoundarySeq {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn as_f64(&self) -> Vec<f64> {
        self.positions.iter().map(|&p| p as f64).collect()
    }
}

/// First frame of each non-blank run of `path`, plus `T` for end-of-sentence.
pub fn extract_boundaries(path: &[usize], frames: usize) -> BoundarySeq {
    let mut positions = token_boundaries(path);
    positions.push(frames);
    BoundarySeq { positions }
}

/// First frame (1-based) of each non-blank run of `path`.
pub fn token_boundaries(path: &[usize]) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = BLANK;
    for (t, &s) in path.iter().enumerate() {
        if s != BLANK && s != prev {
            out.push(t + 1);
        }
        prev = s;
    }
    out
}

/// Frames (1-based) whose argmax class is not blank, with that class.
pub fn ctc_greedy_spikes(log_posteriors: &Tensor) -> Vec<(usize, usize)> {
    (0..log_posteriors.rows())
        .filter_map(|t| {
            let row = log_posteriors.row(t);
            let (k, _) = row
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (k, &x)| if x > best.1 { (k, x) } else { best });
            (k != BLANK).then_some((t + 1, k))
        })
        .collect()
}
