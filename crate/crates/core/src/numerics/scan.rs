//! Scan and reduction primitives shared by the attention and CTC code.

use crate::error::{Error, Result};

/// Lower clamp applied to probabilities before they enter products or divisions.
pub const PROB_FLOOR: f64 = 1e-10;

pub fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_FLOOR, 1.0 - PROB_FLOOR)
}

/// `out[j] = x[0] * ... * x[j-1]`, with `out[0] = 1`.
pub fn exclusive_cumprod(x: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.len());
    let mut acc = 1.0;
    for &v in x {
        out.push(acc);
        acc *= v;
    }
    out
}

/// Inclusive prefix sum.
pub fn cumsum(x: &[f64]) -> Vec<f64> {
    let mut acc = 0.0;
    x.iter()
        .map(|&v| {
            acc += v;
            acc
        })
        .collect()
}

/// `out[j] = sum(x[j - back ..= j + forward])`, out-of-range terms contribute 0.
pub fn moving_sum(x: &[f64], back: usize, forward: usize) -> Vec<f64> {
    let n = x.len();
    // prefix[k] = sum(x[..k])
    let mut prefix = Vec::with_capacity(n + 1);
    prefix.push(0.0);
    for &v in x {
        prefix.push(prefix.last().unwrap() + v);
    }
    (0..n)
        .map(|j| {
            let lo = j.saturating_sub(back);
            let hi = (j + forward + 1).min(n);
            // Summing directly keeps results exact for short windows; the prefix
            // difference is only used when the window is wide.
            if hi - lo <= 32 {
                x[lo..hi].iter().sum()
            } else {
                prefix[hi] - prefix[lo]
            }
        })
        .collect()
}

/// Natural-log probability. `-inf` is the additive identity under [`logsumexp`].
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd)]
pub struct LogProb(pub f64);

impl LogProb {
    pub const ZERO: LogProb = LogProb(f64::NEG_INFINITY);
    pub const ONE: LogProb = LogProb(0.0);

    pub fn from_prob(p: f64) -> Self {
        LogProb(p.ln())
    }

    pub fn prob(self) -> f64 {
        self.0.exp()
    }
}

/// Max-shifted log-sum-exp. Errors on empty input.
pub fn logsumexp(x: &[f64]) -> Result<f64> {
    if x.is_empty() {
        return Err(Error::Empty("logsumexp of an empty slice"));
    }
    Ok(logsumexp_nonempty(x))
}

pub(crate) fn logsumexp_nonempty(x: &[f64]) -> f64 {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    if m == f64::INFINITY {
        return m;
    }
    m + x.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

pub(crate) fn log_add(a: f64, b: f64) -> f64 {
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    if lo == f64::NEG_INFINITY {
        return hi;
    }
    hi + (lo - hi).exp().ln_1p()
}

pub fn logsumexp_logprob(x: &[LogProb]) -> Result<LogProb> {
    let raw: Vec<f64> = x.iter().map(|l| l.0).collect();
    logsumexp(&raw).map(LogProb)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
