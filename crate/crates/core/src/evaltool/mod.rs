//! Decoding, error rates, length-bucketed reports and alignment traces.

mod decode;
mod report;
mod trace;
mod wer;

pub use decode::{beam_decode, beam_search, greedy_decode, greedy_decode_full, DecodeStats, Hypothesis};
pub use report::{bucketed_report, decile_edges, format_report, parse_results, write_results, Bucket, UttResult};
pub use trace::{export_alignment_trace, parse_traces, write_traces, AlignmentTrace, TraceRecord};
pub use wer::{word_error_rate, ErrorCounts};

use crate::error::{Error, Result};
use crate::model::{EncoderMode, MochaModel, Utterance};

pub const DEFAULT_BEAM: usize = 10;

/// Held-out statistics of a model under one encoder mode.
#[derive(Clone, Debug)]
pub struct EvalSummary {
    /// Teacher-forced argmax accuracy over labels and end-of-sentence.
    pub token_accuracy: f64,
    /// Fraction of utterances decoded exactly.
    pub sequence_accuracy: f64,
    pub wer: f64,
    /// Mean `|b_ctc - b_mocha|` per output, averaged over utterances.
    pub boundary_gap: f64,
    /// Mean `|sum_j alpha_ij - 1|` per output, averaged over utterances.
    pub mass_deviation: f64,
    pub results: Vec<UttResult>,
}

/// Longest hypothesis the decoders may produce for `frames` raw frames.
pub fn max_decode_len(model: &MochaModel, frames: usize) -> usize {
    2 * frames.div_ceil(model.config.subsample) + 1
}

/// Per-utterance statistics gathered by [`evaluate`].
struct UttEval {
    correct: usize,
    outputs: usize,
    gap: f64,
    mass: f64,
    result: UttResult,
}

fn evaluate_one(model: &MochaModel, u: &Utterance, mode: EncoderMode, beam: usize) -> Result<UttEval> {
    let a = model.analyze(u, mode)?;
    let max_len = max_decode_len(model, u.features.rows());
    let (hyp, _) = beam_decode(model, &u.features, mode, beam, max_len)?;
    let counts = word_error_rate(&hyp.tokens, &u.labels)?;
    Ok(UttEval {
        correct: a.correct,
        outputs: a.tokens,
        gap: a.boundary_gap(),
        mass: a.mass_deviation(),
        result: UttResult {
            id: u.id.clone(),
            frames: u.features.rows(),
            errors: counts.errors(),
            reference_len: counts.reference_len,
            hypothesis: hyp.tokens,
            reference: u.labels.clone(),
        },
    })
}

/// Scores `utts` in parallel across the available cores. Aggregation runs in
/// utterance order, so the summary does not depend on the thread count.
pub fn evaluate(model: &MochaModel, utts: &[Utterance], mode: EncoderMode, beam: usize) -> Result<EvalSummary> {
    if utts.is_empty() {
        return Err(Error::Empty("no utterances to evaluate"));
    }
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get()).min(utts.len());
    let per_thread = utts.len().div_ceil(threads);
    let evals: Vec<UttEval> = std::thread::scope(|scope| {
        let handles: Vec<_> = utts
            .chunks(per_thread)
            .map(|part| scope.spawn(move || part.iter().map(|u| evaluate_one(model, u, mode, beam)).collect::<Result<Vec<_>>>()))
            .collect();
        handles.into_iter().map(|h| h.join().expect("evaluation thread panicked")).collect::<Result<Vec<_>>>()
    })?
    .into_iter()
    .flatten()
    .collect();
    let (mut correct, mut outputs, mut exact, mut gap, mut mass) = (0, 0, 0, 0.0, 0.0);
    let (mut errors, mut ref_tokens) = (0, 0);
    let mut results = Vec::with_capacity(utts.len());
    for e in evals {
        correct += e.correct;
        outputs += e.outputs;
        gap += e.gap;
        mass += e.mass;
        exact += usize::from(e.result.hypothesis == e.result.reference);
        errors += e.result.errors;
        ref_tokens += e.result.reference_len;
        results.push(e.result);
    }
    let n = utts.len() as f64;
    Ok(EvalSummary {
        token_accuracy: correct as f64 / outputs as f64,
        sequence_accuracy: exact as f64 / n,
        wer: errors as f64 / ref_tokens as f64,
        boundary_gap: gap / n,
        mass_deviation: mass / n,
        results,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::pipeline::{generate_toy_batch, ToyTaskSpec};

    #[test]
    fn summary_aggregates_in_utterance_order() {
        let cfg = ModelConfig { vocab: 4, feat_dim: 3, enc_hidden: 6, dec_hidden: 6, emb_dim: 3, attn_dim: 4, energy_offset: 1.0, ..ModelConfig::default() };
        let m = MochaModel::new(cfg, 2).unwrap();
        let utts = generate_toy_batch(&ToyTaskSpec { vocab: 4, feat_dim: 3, ..Default::default() }, 9, 3).unwrap();
        let s = evaluate(&m, &utts, EncoderMode::OFFLINE, 2).unwrap();
        assert_eq!(s.results.iter().map(|r| r.id.as_str()).collect::<Vec<_>>(), utts.iter().map(|u| u.id.as_str()).collect::<Vec<_>>());
        let errors: usize = s.results.iter().map(|r| r.errors).sum();
        let reference: usize = utts.iter().map(|u| u.labels.len()).sum();
        assert_eq!(s.wer, errors as f64 / reference as f64);
        let again = evaluate(&m, &utts, EncoderMode::OFFLINE, 2).unwrap();
        assert_eq!(again.results, s.results);
        assert_eq!(again.boundary_gap.to_bits(), s.boundary_gap.to_bits());
        assert!(evaluate(&m, &[], EncoderMode::OFFLINE, 2).is_err());
    }
}
