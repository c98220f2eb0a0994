//! The joint model: shared encoder, CTC output layer, and an LSTM decoder
//! reading encoder memories through monotonic chunkwise attention.
//!
//! Decoder class 0 is end-of-sentence (also used as the start symbol); CTC
//! class 0 is blank. Real tokens are `1..=vocab` in both.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{self, ChunkEnergy, MonotonicEnergy};
use crate::ctc::{self, BoundarySeq};
use crate::encoder::{subsample, ChunkConfig, Encoder, EncoderKind, Lstm, LstmState};
use crate::error::{Error, Result};
use crate::numerics::{Graph, Tensor, Var};
use crate::objectives::{self, LossTerms};
use crate::params::{Bound, ParamId, ParamStore};

pub const EOS: usize = 0;

/// Architecture hyperparameters. Everything here fixes parameter shapes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Number of real tokens.
    pub vocab: usize,
    pub feat_dim: usize,
    pub subsample: usize,
    pub enc_hidden: usize,
    pub enc_layers: usize,
    pub dec_hidden: usize,
    pub emb_dim: usize,
    pub attn_dim: usize,
    /// MoChA chunk width `w`.
    pub chunk_width: usize,
    pub energy_offset: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab: 6,
            feat_dim: 8,
            subsample: 2,
            enc_hidden: 24,
            enc_layers: 1,
            dec_hidden: 24,
            emb_dim: 8,
            attn_dim: 16,
            chunk_width: attention::DEFAULT_CHUNK_WIDTH,
            energy_offset: attention::ENERGY_OFFSET_INIT,
        }
    }
}

impl ModelConfig {
    pub fn classes(&self) -> usize {
        self.vocab + 1
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab", self.vocab),
            ("feat_dim", self.feat_dim),
            ("subsample", self.subsample),
            ("enc_hidden", self.enc_hidden),
            ("enc_layers", self.enc_layers),
            ("dec_hidden", self.dec_hidden),
            ("emb_dim", self.emb_dim),
            ("attn_dim", self.attn_dim),
            ("chunk_width", self.chunk_width),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        Ok(())
    }
}

/// How the encoder runs for a given pass.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EncoderMode {
    pub kind: EncoderKind,
    pub chunk: ChunkConfig,
}

impl EncoderMode {
    pub const OFFLINE: EncoderMode = EncoderMode { kind: EncoderKind::Blstm, chunk: ChunkConfig::OFFLINE };
}

#[derive(Clone, Debug)]
struct Decoder {
    embedding: ParamId,
    lstm: Lstm,
    w_ctx: ParamId,
    out_s: ParamId,
    out_c: ParamId,
    out_b: ParamId,
}

#[derive(Clone, Debug)]
pub struct MochaModel {
    pub config: ModelConfig,
    pub store: ParamStore,
    encoder: Encoder,
    ctc_w: ParamId,
    ctc_b: ParamId,
    mono: MonotonicEnergy,
    chunk: ChunkEnergy,
    decoder: Decoder,
}

/// One labelled utterance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Utterance {
    pub id: String,
    /// Raw feature frames `[T0, feat_dim]`.
    pub features: Tensor,
    /// Tokens in `1..=vocab`, no end-of-sentence.
    pub labels: Vec<usize>,
    /// Ground-truth first raw frame of each token (0-based), when known.
    #[serde(default)]
    pub true_starts: Vec<usize>,
}

/// Graph nodes and diagnostics of one teacher-forced pass.
pub struct UtteranceForward {
    pub terms: LossTerms,
    pub alpha_rows: Vec<Var>,
    pub b_mocha: Vec<Var>,
    pub b_ctc: BoundarySeq,
    pub decoder_log_probs: Var,
    pub ctc_log_probs: Var,
    pub memories: Var,
    pub frames: usize,
}

/// Per-forward knobs that do not change parameter shapes.
#[derive(Clone, Copy, Debug)]
pub struct ForwardOptions {
    pub mode: EncoderMode,
    pub smoothing: f64,
    pub dropout: f64,
}

/// Decoder recurrence state for one hypothesis.
#[derive(Clone, Copy, Debug)]
pub struct DecoderState {
    pub lstm: LstmState,
    pub context: Var,
    pub prev_token: usize,
    /// 1-based boundary of the previous token (1 before the first token).
    pub boundary: usize,
}

/// Memories made available to a decoder so far, with their attention projections.
#[derive(Default)]
pub struct MemoryBank {
    pub rows: Vec<Var>,
    mono: Vec<Var>,
    chunk: Vec<Var>,
}

impl MemoryBank {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

impl MochaModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let c = &config;
        let encoder = Encoder::init(&mut store, c.feat_dim, c.subsample, c.enc_hidden, c.enc_layers, &mut rng);
        let h = c.enc_hidden;
        let ctc_w = store.add_uniform("ctc.w", &[h, c.classes()], 1.0 / (h as f64).sqrt(), &mut rng);
        let ctc_b = store.add("ctc.b", Tensor::zeros(&[c.classes()]));
        let mono = MonotonicEnergy::init(&mut store, "mono", h, c.dec_hidden, c.attn_dim, c.energy_offset, &mut rng);
        let chunk = ChunkEnergy::init(&mut store, "chunk", h, c.dec_hidden, c.attn_dim, &mut rng);
        let embedding = store.add_uniform("dec.embedding", &[c.classes(), c.emb_dim], 0.5, &mut rng);
        let lstm = Lstm::init(&mut store, "dec.lstm", c.emb_dim, c.dec_hidden, &mut rng);
        let w_ctx = store.add_uniform("dec.lstm.w_ctx", &[h, 4 * c.dec_hidden], 1.0 / (c.dec_hidden as f64).sqrt(), &mut rng);
        let out_s = store.add_uniform("dec.out.w_s", &[c.dec_hidden, c.classes()], 1.0 / (c.dec_hidden as f64).sqrt(), &mut rng);
        let out_c = store.add_uniform("dec.out.w_c", &[h, c.classes()], 1.0 / (h as f64).sqrt(), &mut rng);
        let out_b = store.add("dec.out.b", Tensor::zeros(&[c.classes()]));
        Ok(MochaModel {
            config,
            store,
            encoder,
            ctc_w,
            ctc_b,
            mono,
            chunk,
            decoder: Decoder { embedding, lstm, w_ctx, out_s, out_c, out_b },
        })
    }

    /// Rebuilds a model of this architecture around stored parameters.
    pub fn with_params(config: ModelConfig, store: ParamStore) -> Result<Self> {
        let mut model = MochaModel::new(config, 0)?;
        if model.store.names() != store.names() {
            return Err(Error::Checkpoint { field: "params".into(), reason: "parameter names do not match the architecture".into() });
        }
        for (name, (want, got)) in model.store.names().iter().zip(model.store.tensors().iter().zip(store.tensors())) {
            if want.shape() != got.shape() {
                return Err(Error::Checkpoint {
                    field: name.clone(),
                    reason: format!("shape {:?} does not match expected {:?}", got.shape(), want.shape()),
                });
            }
        }
        model.store = store;
        Ok(model)
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    pub fn monotonic_energy(&self) -> &MonotonicEnergy {
        &self.mono
    }

    fn check_utterance(&self, utt: &Utterance) -> Result<()> {
        if utt.features.cols() != self.config.feat_dim || utt.features.rows() == 0 {
            return Err(Error::Shape(format!(
                "utterance {} has features {:?}, expected [T, {}]",
                utt.id,
                utt.features.shape(),
                self.config.feat_dim
            )));
        }
        if let Some(&bad) = utt.labels.iter().find(|&&l| l == 0 || l > self.config.vocab) {
            return Err(Error::InvalidArgument(format!("utterance {} has label {bad} outside 1..={}", utt.id, self.config.vocab)));
        }
        Ok(())
    }

    /// Encoder memories `[T, H]` on `g`.
    pub fn encode(&self, g: &mut Graph, p: &Bound, features: &Tensor, mode: EncoderMode) -> Result<Var> {
        let x = g.leaf(subsample(features, self.config.subsample)?);
        Ok(self.encoder.encode(g, p, x, mode.kind, mode.chunk))
    }

    /// Per-frame CTC log-posteriors `[T, K+1]`.
    pub fn ctc_log_probs(&self, g: &mut Graph, p: &Bound, memories: Var) -> Var {
        let logits = g.matmul(memories, p[self.ctc_w]);
        let logits = g.add_row(logits, p[self.ctc_b]);
        g.log_softmax_rows(logits)
    }

    pub fn initial_state(&self, g: &mut Graph) -> DecoderState {
        DecoderState {
            lstm: LstmState::zeros(g, self.config.dec_hidden),
            context: g.leaf(Tensor::zeros(&[1, self.config.enc_hidden])),
            prev_token: EOS,
            boundary: 1,
        }
    }

    /// Decoder LSTM update from the previous token and context.
    pub fn advance_decoder(&self, g: &mut Graph, p: &Bound, state: &DecoderState) -> LstmState {
        let d = &self.decoder;
        let emb = g.row(p[d.embedding], state.prev_token);
        let xproj = d.lstm.project_inputs(g, p, emb);
        let cproj = g.matmul(state.context, p[d.w_ctx]);
        let xproj = g.add(xproj, cproj);
        d.lstm.cell(g, p, xproj, state.lstm)
    }

    /// Output log-probabilities `[1, K+1]` from decoder state and context.
    pub fn output_log_probs(&self, g: &mut Graph, p: &Bound, s: Var, context: Var) -> Var {
        let d = &self.decoder;
        let a = g.matmul(s, p[d.out_s]);
        let b = g.matmul(context, p[d.out_c]);
        let logits = g.add(a, b);
        let logits = g.add(logits, p[d.out_b]);
        g.log_softmax_rows(logits)
    }

    /// Teacher-forced pass over one utterance with all four loss terms.
    pub fn forward(
        &self,
        g: &mut Graph,
        p: &Bound,
        utt: &Utterance,
        opts: &ForwardOptions,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<UtteranceForward> {
        self.check_utterance(utt)?;
        let mut memories = self.encode(g, p, &utt.features, opts.mode)?;
        let frames = g.value(memories).rows();
        if let (Some(rng), true) = (rng, opts.dropout > 0.0) {
            let keep = 1.0 - opts.dropout;
            let mask: Vec<f64> = (0..g.value(memories).len())
                .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
                .collect();
            let m = g.leaf(Tensor::new(g.value(memories).shape().to_vec(), mask)?);
            memories = g.mul(memories, m);
        }

        let ctc_lp = self.ctc_log_probs(g, p, memories);
        let (ctc_loss, _) = ctc::ctc_loss_graph(g, ctc_lp, &utt.labels)?;
        // Reference boundaries are regenerated from the current parameters and
        // enter the sync loss as constants.
        let path = ctc::ctc_forced_align(g.value(ctc_lp), &utt.labels)?;
        let b_ctc = ctc::extract_boundaries(&path, frames);

        let mono_proj = self.mono.project(g, p, memories);
        let chunk_proj = self.chunk.project(g, p, memories);
        let positions = attention::frame_positions(frames);
        let mut targets = utt.labels.clone();
        targets.push(EOS);

        let mut state = self.initial_state(g);
        let mut alpha_prev = g.leaf(Tensor::vector(attention::initial_alignment(frames)));
        let mut alpha_rows = Vec::with_capacity(targets.len());
        let mut b_mocha = Vec::with_capacity(targets.len());
        let mut outputs = Vec::with_capacity(targets.len());
        for &target in &targets {
            let lstm = self.advance_decoder(g, p, &state);
            let e = self.mono.energies(g, p, mono_proj, lstm.h)?;
            let prob = g.sigmoid(e);
            let alpha = attention::align_row(g, alpha_prev, prob);
            let u = self.chunk.energies(g, p, chunk_proj, lstm.h);
            let beta = attention::chunk_attend(g, alpha, u, self.config.chunk_width);
            let beta_row = g.reshape(beta, &[1, frames]);
            let context = g.matmul(beta_row, memories);
            outputs.push(self.output_log_probs(g, p, lstm.h, context));
            b_mocha.push(g.dot_const(alpha, &positions));
            alpha_rows.push(alpha);
            alpha_prev = alpha;
            state = DecoderState { lstm, context, prev_token: target, boundary: 1 };
        }
        let decoder_log_probs = g.stack_rows(&outputs);
        let mocha_nll = objectives::mocha_nll_graph(g, decoder_log_probs, &targets, opts.smoothing);
        let quantity = objectives::quantity_loss_graph(g, &alpha_rows, targets.len());
        let sync = objectives::sync_loss_graph(g, &b_ctc, &b_mocha)?;
        Ok(UtteranceForward {
            terms: LossTerms { mocha_nll, ctc: ctc_loss, quantity, sync },
            alpha_rows,
            b_mocha,
            b_ctc,
            decoder_log_probs,
            ctc_log_probs: ctc_lp,
            memories,
            frames,
        })
    }

    /// Averages each term over a batch of utterances.
    pub fn forward_batch(
        &self,
        g: &mut Graph,
        p: &Bound,
        batch: &[&Utterance],
        opts: &ForwardOptions,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(LossTerms, Vec<UtteranceForward>)> {
        if batch.is_empty() {
            return Err(Error::Empty("empty batch"));
        }
        let mut outs = Vec::with_capacity(batch.len());
        for utt in batch {
            outs.push(self.forward(g, p, utt, opts, rng.as_deref_mut())?);
        }
        let n = batch.len() as f64;
        let mut mean = |pick: fn(&LossTerms) -> Var| {
            let vars: Vec<Var> = outs.iter().map(|o| pick(&o.terms)).collect();
            let stacked = g.stack_rows(&vars);
            let s = g.sum(stacked);
            g.scale(s, 1.0 / n)
        };
        let terms = LossTerms {
            mocha_nll: mean(|t| t.mocha_nll),
            ctc: mean(|t| t.ctc),
            quantity: mean(|t| t.quantity),
            sync: mean(|t| t.sync),
        };
        Ok((terms, outs))
    }

    /// Teacher-forced diagnostics for one utterance.
    pub fn analyze(&self, utt: &Utterance, mode: EncoderMode) -> Result<Analysis> {
        let mut g = Graph::new();
        let p = self.store.bind(&mut g);
        let opts = ForwardOptions { mode, smoothing: 0.0, dropout: 0.0 };
        let f = self.forward(&mut g, &p, utt, &opts, None)?;
        let frames = f.frames;
        let mut alpha = Vec::with_capacity(f.alpha_rows.len() * frames);
        for r in &f.alpha_rows {
            alpha.extend_from_slice(g.data(*r));
        }
        let lp = g.value(f.decoder_log_probs);
        let mut targets = utt.labels.clone();
        targets.push(EOS);
        let correct = targets
            .iter()
            .enumerate()
            .filter(|(i, &y)| argmax(lp.row(*i)) == y)
            .count();
        Ok(Analysis {
            alpha: Tensor::new(vec![targets.len(), frames], alpha)?,
            b_mocha: f.b_mocha.iter().map(|v| g.item(*v)).collect(),
            b_ctc: f.b_ctc,
            ctc_log_probs: g.value(f.ctc_log_probs).clone(),
            tokens: targets.len(),
            correct,
            breakdown: f.terms.breakdown(&g, &crate::objectives::LossWeights::STAGE2),
        })
    }

    /// Appends memory rows and their attention projections.
    pub fn extend_memories(&self, g: &mut Graph, p: &Bound, bank: &mut MemoryBank, rows: &[Var]) {
        for &r in rows {
            bank.mono.push(self.mono.project(g, p, r));
            bank.chunk.push(self.chunk.project(g, p, r));
            bank.rows.push(r);
        }
    }

    /// Selection probability of memory `j` (0-based) for decoder output `s`.
    pub fn selection_prob(&self, g: &mut Graph, p: &Bound, bank: &MemoryBank, j: usize, s: Var) -> Result<f64> {
        let e = self.mono.energies(g, p, bank.mono[j], s)?;
        Ok(crate::numerics::sigmoid(g.item(e)))
    }

    /// Context from soft attention over the `w` memories ending at the 1-based `boundary`.
    pub fn hard_context(&self, g: &mut Graph, p: &Bound, bank: &MemoryBank, boundary: usize, s: Var) -> Var {
        let window = attention::hard_chunk_window(boundary, self.config.chunk_width);
        let proj = g.stack_rows(&bank.chunk[window.clone()]);
        let u = self.chunk.energies(g, p, proj, s);
        let n = window.len();
        let u_row = g.reshape(u, &[1, n]);
        let log_w = g.log_softmax_rows(u_row);
        let weights: Vec<f64> = g.data(log_w).iter().map(|x| x.exp()).collect();
        let w = g.leaf(Tensor::new(vec![1, n], weights).unwrap());
        let mem = g.stack_rows(&bank.rows[window]);
        g.matmul(w, mem)
    }
}

/// Teacher-forced statistics of one utterance.
#[derive(Clone, Debug)]
pub struct Analysis {
    /// `[U+1, T]`, end-of-sentence row last.
    pub alpha: Tensor,
    pub b_mocha: Vec<f64>,
    pub b_ctc: BoundarySeq,
    pub ctc_log_probs: Tensor,
    pub tokens: usize,
    pub correct: usize,
    pub breakdown: crate::objectives::LossBreakdown,
}

impl Analysis {
    /// Mean `|b_ctc - b_mocha|` over all outputs including end-of-sentence.
    pub fn boundary_gap(&self) -> f64 {
        objectives::sync_loss(&self.b_ctc, &self.b_mocha).unwrap_or(f64::NAN)
    }

    /// Mean `|sum_j alpha_ij - 1|` over outputs.
    pub fn mass_deviation(&self) -> f64 {
        let rows = self.alpha.rows();
        (0..rows).map(|i| (self.alpha.row(i).iter().sum::<f64>() - 1.0).abs()).sum::<f64>() / rows as f64
    }
}

/// Compares analytic gradients of the weighted total loss over `batch` with
/// central finite differences, for every parameter element.
pub fn check_model_gradients(
    model: &MochaModel,
    batch: &[&Utterance],
    opts: &ForwardOptions,
    weights: &crate::objectives::LossWeights,
    eps: f64,
) -> Result<crate::numerics::GradCheckReport> {
    let opts = ForwardOptions { dropout: 0.0, ..*opts };
    crate::numerics::grad_check(
        |g, vars| {
            let p = Bound::from_vars(vars.to_vec());
            let (terms, _) = model.forward_batch(g, &p, batch, &opts, None)?;
            Ok(objectives::total_loss_graph(g, &terms, weights))
        },
        model.store.tensors(),
        eps,
    )
}

pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (k, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = k;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig { vocab: 3, feat_dim: 2, subsample: 1, enc_hidden: 3, enc_layers: 1, dec_hidden: 3, emb_dim: 2, attn_dim: 3, chunk_width: 2, energy_offset: -4.0 }
    }

    fn utt(rng: &mut ChaCha8Rng, frames: usize, labels: Vec<usize>) -> Utterance {
        let data = (0..frames * 2).map(|_| rng.random_range(-1.0..1.0)).collect();
        Utterance { id: "u".into(), features: Tensor::new(vec![frames, 2], data).unwrap(), labels, true_starts: vec![] }
    }

    #[test]
    fn forward_produces_finite_terms() {
        let m = MochaModel::new(tiny(), 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let u = utt(&mut rng, 5, vec![1, 2]);
        let a = m.analyze(&u, EncoderMode::OFFLINE).unwrap();
        assert_eq!(a.alpha.shape(), &[3, 5]);
        assert_eq!(a.b_ctc.positions.len(), 3);
        assert_eq!(*a.b_ctc.positions.last().unwrap(), 5);
        for x in [a.breakdown.mocha_nll, a.breakdown.ctc, a.breakdown.quantity, a.breakdown.sync] {
            assert!(x.is_finite());
        }
        // Initial offset keeps selection probabilities small, so little mass survives.
        assert!(a.alpha.data().iter().sum::<f64>() < 1.5);
    }

    #[test]
    fn rejects_bad_inputs() {
        let m = MochaModel::new(tiny(), 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let bad_label = utt(&mut rng, 4, vec![4]);
        assert!(m.analyze(&bad_label, EncoderMode::OFFLINE).is_err());
        let too_long = utt(&mut rng, 2, vec![1, 2, 3]);
        assert!(matches!(m.analyze(&too_long, EncoderMode::OFFLINE), Err(Error::InfeasibleAlignment { .. })));
        assert!(MochaModel::new(ModelConfig { attn_dim: 0, ..tiny() }, 0).is_err());
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = MochaModel::new(tiny(), 7).unwrap();
        let b = MochaModel::new(tiny(), 7).unwrap();
        let c = MochaModel::new(tiny(), 8).unwrap();
        assert_eq!(a.store, b.store);
        assert_ne!(a.store, c.store);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = utt(&mut rng, 6, vec![1, 3]);
        let b = utt(&mut rng, 5, vec![2]);
        let weights = crate::objectives::LossWeights { lambda_ctc: 0.3, lambda_qua: 2.0, lambda_sync: 1.0 };
        // With the default offset of -4 the chunk-energy gradients are ~1e-10,
        // below what central differences resolve on an O(1) loss.
        let m = MochaModel::new(ModelConfig { energy_offset: 0.0, ..tiny() }, 3).unwrap();
        for mode in [
            EncoderMode::OFFLINE,
            EncoderMode { kind: EncoderKind::LcBlstm, chunk: ChunkConfig::new(2, 1).unwrap() },
            EncoderMode { kind: EncoderKind::Lstm, chunk: ChunkConfig::OFFLINE },
        ] {
            let opts = ForwardOptions { mode, smoothing: 0.1, dropout: 0.0 };
            let r = check_model_gradients(&m, &[&a, &b], &opts, &weights, crate::numerics::DEFAULT_EPS).unwrap();
            assert!(r.max_rel_error < 1e-4, "{mode:?}: {r:?} {}", m.store.names()[r.worst.unwrap()]);
            assert!(r.max_abs_error < 1e-9, "{r:?}");
        }
    }

    #[test]
    fn with_params_checks_shapes() {
        let a = MochaModel::new(tiny(), 7).unwrap();
        let other = MochaModel::new(ModelConfig { attn_dim: 4, ..tiny() }, 7).unwrap();
        assert!(MochaModel::with_params(tiny(), other.store).is_err());
        assert!(MochaModel::with_params(tiny(), a.store.clone()).is_ok());
    }
}
