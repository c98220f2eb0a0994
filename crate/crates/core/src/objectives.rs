//! Training objectives: label-smoothed attention NLL, CTC, quantity
//! regularization, boundary synchronization, and their weighted total.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::ctc::BoundarySeq;
use crate::error::{Error, Result};
use crate::numerics::{Graph, Tensor, Var};

pub const DEFAULT_LABEL_SMOOTHING: f64 = 0.1;

/// Interpolation weights of the total objective.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_ctc: f64,
    pub lambda_qua: f64,
    pub lambda_sync: f64,
}

impl LossWeights {
    /// Joint CTC/attention training with quantity regularization.
    pub const STAGE1: LossWeights = LossWeights { lambda_ctc: 0.3, lambda_qua: 2.0, lambda_sync: 0.0 };
    /// CTC-synchronous training; quantity regularization off.
    pub const STAGE2: LossWeights = LossWeights { lambda_ctc: 0.3, lambda_qua: 0.0, lambda_sync: 1.0 };

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda_ctc) {
            return Err(Error::Config(format!("lambda_ctc {} outside [0, 1]", self.lambda_ctc)));
        }
        if !(self.lambda_qua >= 0.0) || !(self.lambda_sync >= 0.0) {
            return Err(Error::Config("lambda_qua and lambda_sync must be non-negative".into()));
        }
        Ok(())
    }
}

/// Per-term values of one step (already averaged over utterances).
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub mocha_nll: f64,
    pub ctc: f64,
    pub quantity: f64,
    pub sync: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn from_parts(mocha_nll: f64, ctc: f64, quantity: f64, sync: f64, w: &LossWeights) -> Self {
        let mut b = LossBreakdown { mocha_nll, ctc, quantity, sync, total: 0.0 };
        b.total = total_loss(&b, w);
        b
    }
}

/// `(1 - l_ctc) L_mocha + l_ctc L_ctc + l_qua L_qua + l_sync L_sync`
pub fn total_loss(parts: &LossBreakdown, w: &LossWeights) -> f64 {
    (1.0 - w.lambda_ctc) * parts.mocha_nll
        + w.lambda_ctc * parts.ctc
        + w.lambda_qua * parts.quantity
        + w.lambda_sync * parts.sync
}

/// Graph nodes of the individual terms.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub mocha_nll: Var,
    pub ctc: Var,
    pub quantity: Var,
    pub sync: Var,
}

impl LossTerms {
    pub fn breakdown(&self, g: &Graph, w: &LossWeights) -> LossBreakdown {
        LossBreakdown::from_parts(g.item(self.mocha_nll), g.item(self.ctc), g.item(self.quantity), g.item(self.sync), w)
    }
}

/// Records the weighted total of `terms`.
pub fn total_loss_graph(g: &mut Graph, terms: &LossTerms, w: &LossWeights) -> Var {
    let parts = [
        (terms.mocha_nll, 1.0 - w.lambda_ctc),
        (terms.ctc, w.lambda_ctc),
        (terms.quantity, w.lambda_qua),
        (terms.sync, w.lambda_sync),
    ];
    let mut acc: Option<Var> = None;
    for (v, c) in parts {
        let scaled = g.scale(v, c);
        acc = Some(match acc {
            Some(a) => g.add(a, scaled),
            None => scaled,
        });
    }
    acc.unwrap()
}

/// `|U - sum_ij alpha_ij|`
pub fn quantity_loss(alpha: &Tensor, tokens: usize) -> f64 {
    (tokens as f64 - alpha.data().iter().sum::<f64>()).abs()
}

pub fn quantity_loss_graph(g: &mut Graph, alpha_rows: &[Var], tokens: usize) -> Var {
    let stacked = g.stack_rows(alpha_rows);
    let mass = g.sum(stacked);
    let target = g.constant_scalar(tokens as f64);
    let diff = g.sub(target, mass);
    g.abs(diff)
}

/// `(1/U) sum_i |b_ctc_i - b_mocha_i|`
pub fn sync_loss(b_ctc: &BoundarySeq, b_mocha: &[f64]) -> Result<f64> {
    if b_ctc.len() != b_mocha.len() {
        return Err(Error::LengthMismatch { what: "sync boundaries", left: b_ctc.len(), right: b_mocha.len() });
    }
    if b_mocha.is_empty() {
        return Ok(0.0);
    }
    let s: f64 = b_ctc.positions.iter().zip(b_mocha).map(|(&c, m)| (c as f64 - m).abs()).sum();
    Ok(s / b_mocha.len() as f64)
}

/// Sync loss on the graph; `b_ctc` enters as a constant.
pub fn sync_loss_graph(g: &mut Graph, b_ctc: &BoundarySeq, b_mocha: &[Var]) -> Result<Var> {
    if b_ctc.len() != b_mocha.len() {
        return Err(Error::LengthMismatch { what: "sync boundaries", left: b_ctc.len(), right: b_mocha.len() });
    }
    if b_mocha.is_empty() {
        return Ok(g.constant_scalar(0.0));
    }
    let stacked = g.stack_rows(b_mocha);
    let flat = g.reshape(stacked, &[b_mocha.len()]);
    let reference = g.leaf(Tensor::vector(b_ctc.as_f64()));
    let diff = g.sub(reference, flat);
    let abs = g.abs(diff);
    let total = g.sum(abs);
    Ok(g.scale(total, 1.0 / b_mocha.len() as f64))
}

/// Target distribution `(1 - eps) onehot(target) + eps / V`.
pub fn smoothed_target(classes: usize, target: usize, smoothing: f64) -> Vec<f64> {
    let mut q = vec![smoothing / classes as f64; classes];
    q[target] += 1.0 - smoothing;
    q
}

/// Label-smoothed cross-entropy of one log-probability row.
pub fn smoothed_cross_entropy(log_probs: &[f64], target: usize, smoothing: f64) -> f64 {
    -smoothed_target(log_probs.len(), target, smoothing)
        .iter()
        .zip(log_probs)
        .filter(|(q, _)| **q != 0.0)
        .map(|(q, l)| q * l)
        .sum::<f64>()
}

/// Mean label-smoothed cross-entropy over teacher-forced decoder outputs.
pub fn mocha_nll(log_probs: &Tensor, targets: &[usize], smoothing: f64) -> Result<f64> {
    if log_probs.rows() != targets.len() {
        return Err(Error::LengthMismatch { what: "decoder outputs vs targets", left: log_probs.rows(), right: targets.len() });
    }
    if targets.is_empty() {
        return Ok(0.0);
    }
    let s: f64 = targets.iter().enumerate().map(|(i, &y)| smoothed_cross_entropy(log_probs.row(i), y, smoothing)).sum();
    Ok(s / targets.len() as f64)
}

/// Graph version of [`mocha_nll`] for `[U, V]` log-probabilities.
pub fn mocha_nll_graph(g: &mut Graph, log_probs: Var, targets: &[usize], smoothing: f64) -> Var {
    let v = g.value(log_probs).cols();
    let mut weights = Vec::with_capacity(targets.len() * v);
    for &y in targets {
        weights.extend(smoothed_target(v, y, smoothing));
    }
    let dot = g.dot_const(log_probs, &weights);
    g.scale(dot, -1.0 / targets.len().max(1) as f64)
}

/// Per-step CSV metrics: `step,mocha_nll,ctc,quantity,sync,total`.
pub struct MetricsLog<W: Write> {
    out: W,
}

impl<W: Write> MetricsLog<W> {
    pub const HEADER: &'static str = "step,mocha_nll,ctc,quantity,sync,total";

    pub fn new(mut out: W) -> Result<Self> {
        writeln!(out, "{}", Self::HEADER)?;
        Ok(MetricsLog { out })
    }

    pub fn record(&mut self, step: usize, b: &LossBreakdown) -> Result<()> {
        writeln!(self.out, "{step},{},{},{},{},{}", b.mocha_nll, b.ctc, b.quantity, b.sync, b.total)?;
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        self.out.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{grad_check, DEFAULT_EPS};

    #[test]
    fn quantity_examples() {
        let rows = Tensor::new(vec![3, 2], vec![0.5, 0.5, 1.0, 0.0, 0.25, 0.75]).unwrap();
        assert_eq!(quantity_loss(&rows, 3), 0.0);
        let partial = Tensor::new(vec![3, 2], vec![0.5, 0.5, 0.5, 0.5, 0.25, 0.25]).unwrap();
        assert!((quantity_loss(&partial, 3) - 0.5).abs() < 1e-15);
        assert_eq!(quantity_loss(&Tensor::zeros(&[3, 4]), 3), 3.0);
    }

    #[test]
    fn quantity_ignores_redistribution() {
        let a = Tensor::new(vec![2, 3], vec![0.2, 0.3, 0.1, 0.4, 0.0, 0.5]).unwrap();
        let b = Tensor::new(vec![2, 3], vec![0.0, 0.0, 0.6, 0.1, 0.8, 0.0]).unwrap();
        assert!((quantity_loss(&a, 2) - quantity_loss(&b, 2)).abs() < 1e-15);
    }

    #[test]
    fn sync_examples() {
        let same = BoundarySeq { positions: vec![2, 5] };
        assert_eq!(sync_loss(&same, &[2.0, 5.0]).unwrap(), 0.0);
        assert_eq!(sync_loss(&same, &[3.0, 5.0]).unwrap(), 0.5);
        let eos = BoundarySeq { positions: vec![7] };
        assert_eq!(sync_loss(&eos, &[7.0]).unwrap(), 0.0);
        assert!(matches!(sync_loss(&same, &[1.0]), Err(Error::LengthMismatch { .. })));
    }

    #[test]
    fn sync_is_symmetric_in_value() {
        let a = BoundarySeq { positions: vec![1, 4, 6] };
        let b = [2.0, 3.0, 6.0];
        let swapped = BoundarySeq { positions: vec![2, 3, 6] };
        let a_f = [1.0, 4.0, 6.0];
        assert_eq!(sync_loss(&a, &b).unwrap(), sync_loss(&swapped, &a_f).unwrap());
    }

    #[test]
    fn nll_examples() {
        let v = 5usize;
        let uniform = Tensor::full(&[2, v], -(v as f64).ln());
        assert!((mocha_nll(&uniform, &[1, 3], 0.0).unwrap() - (v as f64).ln()).abs() < 1e-15);
        let mut onehot = Tensor::full(&[1, 3], f64::NEG_INFINITY);
        onehot.data_mut()[2] = 0.0;
        assert_eq!(mocha_nll(&onehot, &[2], 0.0).unwrap(), 0.0);
    }

    #[test]
    fn smoothed_nll_matches_expanded_formula() {
        let rows = [[0.7f64, 0.2, 0.1], [0.25, 0.5, 0.25]];
        let lp: Vec<f64> = rows.iter().flatten().map(|p| p.ln()).collect();
        let lp = Tensor::new(vec![2, 3], lp).unwrap();
        let targets = [0usize, 1];
        let eps = 0.1;
        // (1 - eps + eps/3) * -ln p[target] + eps/3 * -ln p[others]
        let mut expect = 0.0;
        for (row, &y) in rows.iter().zip(&targets) {
            for (k, p) in row.iter().enumerate() {
                let q = if k == y { 1.0 - eps + eps / 3.0 } else { eps / 3.0 };
                expect -= q * p.ln();
            }
        }
        expect /= 2.0;
        assert!((mocha_nll(&lp, &targets, eps).unwrap() - expect).abs() < 1e-12);
        let mut g = Graph::new();
        let v = g.leaf(lp);
        let n = mocha_nll_graph(&mut g, v, &targets, eps);
        assert!((g.item(n) - expect).abs() < 1e-12);
    }

    #[test]
    fn total_reduces_to_joint_objective() {
        let w = LossWeights { lambda_ctc: 0.3, lambda_qua: 0.0, lambda_sync: 0.0 };
        let b = LossBreakdown::from_parts(2.0, 4.0, 9.0, 7.0, &w);
        assert!((b.total - (0.7 * 2.0 + 0.3 * 4.0)).abs() < 1e-15);
        let only = LossWeights { lambda_ctc: 0.0, lambda_qua: 0.0, lambda_sync: 0.0 };
        assert_eq!(LossBreakdown::from_parts(2.5, 4.0, 9.0, 7.0, &only).total, 2.5);
        let full = LossBreakdown::from_parts(2.0, 4.0, 0.5, 1.5, &LossWeights::STAGE2);
        assert!((full.total - (0.7 * 2.0 + 0.3 * 4.0 + 1.5)).abs() < 1e-12);
    }

    #[test]
    fn weight_validation() {
        assert!(LossWeights::STAGE1.validate().is_ok());
        assert!(LossWeights::STAGE2.validate().is_ok());
        assert!(LossWeights { lambda_ctc: 1.5, ..LossWeights::STAGE1 }.validate().is_err());
        assert!(LossWeights { lambda_sync: -1.0, ..LossWeights::STAGE1 }.validate().is_err());
    }

    #[test]
    fn graph_terms_pass_grad_check() {
        let alpha = Tensor::new(vec![2, 3], vec![0.1, 0.5, 0.2, 0.05, 0.3, 0.4]).unwrap();
        let b_ctc = BoundarySeq { positions: vec![3, 3] };
        let report = grad_check(
            |g, v| {
                let rows = [g.row(v[0], 0), g.row(v[0], 1)];
                let q = quantity_loss_graph(g, &rows, 2);
                let pos = [1.0, 2.0, 3.0];
                let b: Vec<Var> = rows.iter().map(|r| g.dot_const(*r, &pos)).collect();
                let s = sync_loss_graph(g, &b_ctc, &b)?;
                Ok(g.add(q, s))
            },
            &[alpha],
            DEFAULT_EPS,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-6, "{report:?}");
    }

    #[test]
    fn metrics_csv_layout() {
        let mut buf = Vec::new();
        {
            let mut log = MetricsLog::new(&mut buf).unwrap();
            log.record(3, &LossBreakdown { mocha_nll: 1.0, ctc: 2.0, quantity: 0.5, sync: 0.25, total: 3.0 }).unwrap();
        }
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text, "step,mocha_nll,ctc,quantity,sync,total\n3,1,2,0.5,0.25,3\n");
    }
}
