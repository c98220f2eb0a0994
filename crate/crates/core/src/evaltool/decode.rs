//! Hard monotonic decoding. Encoder memories are pulled one chunk at a time,
//! only when the boundary scan runs out of frames, so the decoder never reads
//! past the lookahead of the chunk it is waiting on.

use crate::attention::BoundaryScanner;
use crate::encoder::{subsample, ChunkStream};
use crate::error::{Error, Result};
use crate::model::{DecoderState, EncoderMode, MemoryBank, MochaModel, EOS};
use crate::numerics::{Graph, Tensor};
use crate::params::Bound;

/// A decoded token sequence with its MoChA boundaries.
#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    pub tokens: Vec<usize>,
    /// Sum of output log-probabilities, end-of-sentence included when emitted.
    pub score: f64,
    /// 1-based boundary of every emitted token, end-of-sentence included.
    pub boundaries: Vec<usize>,
    pub ended_with_eos: bool,
}

impl Hypothesis {
    /// Outputs that contributed to `score`.
    pub fn scored_outputs(&self) -> usize {
        self.tokens.len() + usize::from(self.ended_with_eos)
    }

    /// Score divided by the number of scored outputs (at least one).
    pub fn normalized_score(&self) -> f64 {
        self.score / self.scored_outputs().max(1) as f64
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct DecodeStats {
    /// Monotonic energies evaluated across the whole decode.
    pub energy_evaluations: usize,
    /// Encoder frames `T`.
    pub frames: usize,
    /// Chunks pulled from the encoder.
    pub chunks_read: usize,
}

struct Session<'m> {
    model: &'m MochaModel,
    g: Graph,
    p: Bound,
    stream: ChunkStream<'m>,
    bank: MemoryBank,
    stats: DecodeStats,
}

impl<'m> Session<'m> {
    fn new(model: &'m MochaModel, features: &Tensor, mode: EncoderMode) -> Result<Self> {
        if features.cols() != model.config.feat_dim || features.rows() == 0 {
            return Err(Error::Shape(format!("features {:?} do not match feat_dim {}", features.shape(), model.config.feat_dim)));
        }
        let mut g = Graph::new();
        let p = model.store.bind(&mut g);
        let x = g.leaf(subsample(features, model.config.subsample)?);
        let frames = g.value(x).rows();
        let stream = model.encoder().stream(&mut g, &p, x, mode.kind, mode.chunk);
        Ok(Session { model, g, p, stream, bank: MemoryBank::default(), stats: DecodeStats { frames, ..Default::default() } })
    }

    fn pull_chunk(&mut self) -> bool {
        match self.stream.next_chunk(&mut self.g, &self.p) {
            Some(rows) => {
                self.model.extend_memories(&mut self.g, &self.p, &mut self.bank, &rows);
                self.stats.chunks_read += 1;
                true
            }
            None => false,
        }
    }

    /// Boundary for decoder output `s`, reading more chunks as needed.
    fn find_boundary(&mut self, prev_boundary: usize, s: crate::numerics::Var) -> Result<Option<usize>> {
        let mut scanner = BoundaryScanner::new(prev_boundary);
        let mut failure = None;
        let found = loop {
            let (model, g, p, bank) = (self.model, &mut self.g, &self.p, &self.bank);
            let hit = scanner.advance(bank.len(), |j| match model.selection_prob(g, p, bank, j, s) {
                Ok(x) => x,
                Err(e) => {
                    failure.get_or_insert(e);
                    0.0
                }
            });
            if hit.is_some() || !self.pull_chunk() {
                break hit;
            }
        };
        self.stats.energy_evaluations += scanner.evaluations();
        match failure {
            Some(e) => Err(e),
            None => Ok(found),
        }
    }
}

#[derive(Clone)]
struct Live {
    state: DecoderState,
    hyp: Hypothesis,
}

/// Expanded continuation of one live hypothesis.
enum Step {
    /// No frame crossed the threshold: the hypothesis stops as it is.
    NoEmission,
    Emit { state_h: DecoderState, log_probs: Vec<f64>, boundary: usize },
}

fn expand(session: &mut Session<'_>, live: &Live) -> Result<Step> {
    let model = session.model;
    let lstm = model.advance_decoder(&mut session.g, &session.p, &live.state);
    let Some(boundary) = session.find_boundary(live.state.boundary, lstm.h)? else {
        return Ok(Step::NoEmission);
    };
    let ctx = model.hard_context(&mut session.g, &session.p, &session.bank, boundary, lstm.h);
    let lp = model.output_log_probs(&mut session.g, &session.p, lstm.h, ctx);
    let log_probs = session.g.data(lp).to_vec();
    Ok(Step::Emit { state_h: DecoderState { lstm, context: ctx, prev_token: EOS, boundary }, log_probs, boundary })
}

/// All hypotheses that finished during a beam search, in the order they
/// finished, plus decode statistics.
pub fn beam_search(
    model: &MochaModel,
    features: &Tensor,
    mode: EncoderMode,
    beam: usize,
    max_len: usize,
) -> Result<(Vec<Hypothesis>, DecodeStats)> {
    if beam == 0 {
        return Err(Error::InvalidArgument("beam width must be at least 1".into()));
    }
    let mut session = Session::new(model, features, mode)?;
    let start = Live {
        state: model.initial_state(&mut session.g),
        hyp: Hypothesis { tokens: vec![], score: 0.0, boundaries: vec![], ended_with_eos: false },
    };
    let mut live = vec![start];
    let mut finished = Vec::new();
    while !live.is_empty() {
        // (score, live index, token, expanded state)
        let mut candidates: Vec<(f64, usize, usize, DecoderState)> = Vec::new();
        for (li, l) in live.iter().enumerate() {
            match expand(&mut session, l)? {
                Step::NoEmission => finished.push(l.hyp.clone()),
                Step::Emit { state_h, log_probs, .. } => {
                    let mut order: Vec<usize> = (0..log_probs.len()).collect();
                    // Stable sort keeps the lowest class first among ties, matching argmax.
                    order.sort_by(|&a, &b| log_probs[b].total_cmp(&log_probs[a]));
                    for &k in order.iter().take(beam) {
                        candidates.push((l.hyp.score + log_probs[k], li, k, state_h));
                    }
                }
            }
        }
        candidates.sort_by(|a, b| b.0.total_cmp(&a.0));
        candidates.truncate(beam);
        let mut next = Vec::with_capacity(candidates.len());
        for (score, li, token, mut state) in candidates {
            let mut hyp = live[li].hyp.clone();
            hyp.score = score;
            hyp.boundaries.push(state.boundary);
            if token == EOS {
                hyp.ended_with_eos = true;
                finished.push(hyp);
            } else {
                hyp.tokens.push(token);
                state.prev_token = token;
                if hyp.tokens.len() >= max_len {
                    finished.push(hyp);
                } else {
                    next.push(Live { state, hyp });
                }
            }
        }
        live = next;
    }
    Ok((finished, session.stats))
}

/// Best finished hypothesis by per-output normalized score. Earlier
/// finishers win ties.
pub fn beam_decode(model: &MochaModel, features: &Tensor, mode: EncoderMode, beam: usize, max_len: usize) -> Result<(Hypothesis, DecodeStats)> {
    let (finished, stats) = beam_search(model, features, mode, beam, max_len)?;
    let best = finished
        .into_iter()
        .reduce(|best, h| if h.normalized_score() > best.normalized_score() { h } else { best })
        .expect("beam search always finishes at least one hypothesis");
    Ok((best, stats))
}

/// Greedy hard-monotonic decoding.
pub fn greedy_decode(model: &MochaModel, features: &Tensor, mode: EncoderMode, max_len: usize) -> Result<(Hypothesis, DecodeStats)> {
    greedy(Session::new(model, features, mode)?, max_len)
}

/// Greedy decoding with the whole utterance encoded before the first step.
/// Reference for [`greedy_decode`], which must agree with it.
pub fn greedy_decode_full(model: &MochaModel, features: &Tensor, mode: EncoderMode, max_len: usize) -> Result<(Hypothesis, DecodeStats)> {
    let mut session = Session::new(model, features, mode)?;
    while session.pull_chunk() {}
    greedy(session, max_len)
}

fn greedy(mut session: Session<'_>, max_len: usize) -> Result<(Hypothesis, DecodeStats)> {
    let model = session.model;
    let mut live = Live {
        state: model.initial_state(&mut session.g),
        hyp: Hypothesis { tokens: vec![], score: 0.0, boundaries: vec![], ended_with_eos: false },
    };
    loop {
        match expand(&mut session, &live)? {
            Step::NoEmission => break,
            Step::Emit { mut state_h, log_probs, boundary } => {
                let token = crate::model::argmax(&log_probs);
                live.hyp.score += log_probs[token];
                live.hyp.boundaries.push(boundary);
                if token == EOS {
                    live.hyp.ended_with_eos = true;
                    break;
                }
                live.hyp.tokens.push(token);
                if live.hyp.tokens.len() >= max_len {
                    break;
                }
                state_h.prev_token = token;
                live.state = state_h;
            }
        }
    }
    Ok((live.hyp, session.stats))
}
