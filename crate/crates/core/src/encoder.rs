//! Encoders producing memories `h_1..h_T` from feature frames.
//!
//! Frames are first reduced by stacking `factor` adjacent frames. The LSTM
//! layers then run either unidirectionally, fully bidirectionally, or in
//! latency-controlled chunks: the forward direction carries its state from
//! chunk to chunk, the backward direction restarts from zeros on every chunk
//! and sees at most `n_r` frames past the chunk end. Directions are summed.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Graph, Tensor, Var};
use crate::params::{Bound, ParamId, ParamStore};

/// Chunk sizes in raw (pre-subsampling) frames.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChunkConfig {
    /// Frames per chunk; `None` means the whole utterance is one chunk.
    pub n_c: Option<usize>,
    /// Lookahead frames past the chunk end.
    pub n_r: usize,
}

impl ChunkConfig {
    pub const OFFLINE: ChunkConfig = ChunkConfig { n_c: None, n_r: 0 };

    pub fn new(n_c: usize, n_r: usize) -> Result<Self> {
        if n_c == 0 {
            return Err(Error::InvalidArgument("chunk size n_c must be at least 1".into()));
        }
        Ok(ChunkConfig { n_c: Some(n_c), n_r })
    }

    /// Chunk and lookahead sizes on the subsampled frame grid. A chunk covers
    /// every encoder frame its raw frames touch; lookahead never exceeds `n_r`.
    pub fn to_encoder_frames(self, factor: usize) -> (Option<usize>, usize) {
        let factor = factor.max(1);
        (self.n_c.map(|c| c.div_ceil(factor)), self.n_r / factor)
    }

    /// Latency budget in raw frames: chunk plus lookahead.
    pub fn latency_frames(self) -> Option<usize> {
        self.n_c.map(|c| c + self.n_r)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderKind {
    /// Forward LSTM only.
    Lstm,
    /// Full-utterance bidirectional LSTM.
    Blstm,
    /// Latency-controlled bidirectional LSTM.
    LcBlstm,
}

impl std::str::FromStr for EncoderKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lstm" => Ok(EncoderKind::Lstm),
            "blstm" => Ok(EncoderKind::Blstm),
            "lcblstm" => Ok(EncoderKind::LcBlstm),
            other => Err(Error::Config(format!("unknown encoder kind {other:?}"))),
        }
    }
}

impl std::fmt::Display for EncoderKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            EncoderKind::Lstm => "lstm",
            EncoderKind::Blstm => "blstm",
            EncoderKind::LcBlstm => "lcblstm",
        })
    }
}

/// Stack-and-skip frame-rate reduction: output frame `t` is the concatenation
/// of input frames `t*factor .. t*factor + factor`, zero-padded at the end.
pub fn subsample(features: &Tensor, factor: usize) -> Result<Tensor> {
    if factor == 0 {
        return Err(Error::InvalidArgument("subsampling factor must be at least 1".into()));
    }
    let (t0, f) = (features.rows(), features.cols());
    if factor == 1 {
        return Ok(features.clone());
    }
    let t = t0.div_ceil(factor);
    let mut data = vec![0.0; t * f * factor];
    for src in 0..t0 {
        let (dst, slot) = (src / factor, src % factor);
        let off = dst * f * factor + slot * f;
        data[off..off + f].copy_from_slice(features.row(src));
    }
    Tensor::new(vec![t, f * factor], data)
}

/// One chunk of the latency-controlled schedule, 0-based half-open ranges.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Chunk {
    pub start: usize,
    pub end: usize,
    /// End of the frames visible to this chunk (`end + n_r`, clamped to `T`).
    pub visible_end: usize,
}

/// Non-overlapping chunks of `n_c` frames covering `0..t`.
pub fn chunk_schedule(t: usize, n_c: Option<usize>, n_r: usize) -> Vec<Chunk> {
    let step = n_c.unwrap_or(t).max(1);
    (0..t)
        .step_by(step)
        .map(|start| {
            let end = (start + step).min(t);
            Chunk { start, end, visible_end: (end + n_r).min(t) }
        })
        .collect()
}

#[derive(Clone, Copy, Debug)]
pub struct Lstm {
    pub w_x: ParamId,
    pub w_h: ParamId,
    pub b: ParamId,
    pub input: usize,
    pub hidden: usize,
}

/// Hidden and cell state, each `[1, H]`.
#[derive(Clone, Copy, Debug)]
pub struct LstmState {
    pub h: Var,
    pub c: Var,
}

impl LstmState {
    pub fn zeros(g: &mut Graph, hidden: usize) -> Self {
        LstmState { h: g.leaf(Tensor::zeros(&[1, hidden])), c: g.leaf(Tensor::zeros(&[1, hidden])) }
    }
}

impl Lstm {
    /// Gate layout `[input, forget, cell, output]`; forget bias starts at 1.
    pub fn init(store: &mut ParamStore, prefix: &str, input: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        let scale = 1.0 / (hidden as f64).sqrt();
        let mut bias = vec![0.0; 4 * hidden];
        bias[hidden..2 * hidden].fill(1.0);
        Lstm {
            w_x: store.add_uniform(&format!("{prefix}.w_x"), &[input, 4 * hidden], scale, rng),
            w_h: store.add_uniform(&format!("{prefix}.w_h"), &[hidden, 4 * hidden], scale, rng),
            b: store.add(format!("{prefix}.b"), Tensor::vector(bias)),
            input,
            hidden,
        }
    }

    /// `x W_x + b` for every row of `x`.
    pub fn project_inputs(&self, g: &mut Graph, p: &Bound, x: Var) -> Var {
        let xw = g.matmul(x, p[self.w_x]);
        g.add_row(xw, p[self.b])
    }

    /// One step from a precomputed input projection `[1, 4H]` (bias included).
    pub fn cell(&self, g: &mut Graph, p: &Bound, xproj: Var, state: LstmState) -> LstmState {
        let hh = self.hidden;
        let rec = g.matmul(state.h, p[self.w_h]);
        let gates = g.add(xproj, rec);
        let i = g.slice(gates, 0, hh);
        let f = g.slice(gates, hh, hh);
        let c_in = g.slice(gates, 2 * hh, hh);
        let o = g.slice(gates, 3 * hh, hh);
        let i = g.sigmoid(i);
        let f = g.sigmoid(f);
        let c_in = g.tanh(c_in);
        let o = g.sigmoid(o);
        let keep = g.mul(f, state.c);
        let write = g.mul(i, c_in);
        let c = g.add(keep, write);
        let tc = g.tanh(c);
        let h = g.mul(o, tc);
        LstmState { h, c }
    }

    /// Runs over `x` (`[T, input]`) from `state` (zeros when `None`), returning
    /// the output rows `[T, H]` and the final state.
    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var, state: Option<LstmState>) -> Result<(Var, LstmState)> {
        if g.value(x).cols() != self.input {
            return Err(Error::Shape(format!("LSTM expects {} inputs, got {:?}", self.input, g.value(x).shape())));
        }
        let mut state = match state {
            Some(s) => {
                if g.value(s.h).len() != self.hidden || g.value(s.c).len() != self.hidden {
                    return Err(Error::Shape(format!("LSTM state must have width {}", self.hidden)));
                }
                s
            }
            None => LstmState::zeros(g, self.hidden),
        };
        let proj = self.project_inputs(g, p, x);
        let mut outs = Vec::with_capacity(g.value(x).rows());
        for t in 0..g.value(x).rows() {
            let row = g.row(proj, t);
            state = self.cell(g, p, row, state);
            outs.push(state.h);
        }
        Ok((g.stack_rows(&outs), state))
    }
}

/// Encoder weights: one forward and one backward LSTM per layer.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub layers: Vec<(Lstm, Lstm)>,
    pub input_dim: usize,
    pub hidden: usize,
    pub factor: usize,
}

/// Memories and valid length of one utterance.
#[derive(Clone, Debug)]
pub struct EncoderOutput {
    pub memories: Tensor,
    pub length: usize,
}

impl Encoder {
    pub fn init(
        store: &mut ParamStore,
        feat_dim: usize,
        factor: usize,
        hidden: usize,
        layers: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let input_dim = feat_dim * factor;
        let layers = (0..layers)
            .map(|l| {
                let inp = if l == 0 { input_dim } else { hidden };
                let fwd = Lstm::init(store, &format!("enc.{l}.fwd"), inp, hidden, rng);
                let bwd = Lstm::init(store, &format!("enc.{l}.bwd"), inp, hidden, rng);
                (fwd, bwd)
            })
            .collect();
        Encoder { layers, input_dim, hidden, factor }
    }

    /// Incremental encoder over already subsampled frames `x` (`[T, input_dim]`).
    pub fn stream<'a>(&'a self, g: &mut Graph, p: &Bound, x: Var, kind: EncoderKind, chunk: ChunkConfig) -> ChunkStream<'a> {
        let t = g.value(x).rows();
        let schedule = match kind {
            EncoderKind::LcBlstm => {
                let (n_c, n_r) = chunk.to_encoder_frames(self.factor);
                chunk_schedule(t, n_c, n_r)
            }
            EncoderKind::Blstm | EncoderKind::Lstm => chunk_schedule(t, None, 0),
        };
        // Layer-0 projections are per frame, so computing them once up front
        // does not leak future frames into earlier chunks.
        let first = self.layers.first().map(|(f, b)| (f.project_inputs(g, p, x), b.project_inputs(g, p, x)));
        ChunkStream {
            encoder: self,
            kind,
            schedule,
            next: 0,
            fwd_states: vec![None; self.layers.len()],
            first_proj: first,
        }
    }

    /// Memories `[T, H]` for subsampled frames `x`.
    pub fn encode(&self, g: &mut Graph, p: &Bound, x: Var, kind: EncoderKind, chunk: ChunkConfig) -> Var {
        let mut stream = self.stream(g, p, x, kind, chunk);
        let mut rows = Vec::new();
        while let Some(chunk_rows) = stream.next_chunk(g, p) {
            rows.extend(chunk_rows);
        }
        g.stack_rows(&rows)
    }

    /// Subsamples raw features and encodes them outside any training graph.
    pub fn forward_features(
        &self,
        store: &ParamStore,
        features: &Tensor,
        kind: EncoderKind,
        chunk: ChunkConfig,
    ) -> Result<EncoderOutput> {
        if features.rows() == 0 {
            return Err(Error::Empty("encoder input has no frames"));
        }
        let x = subsample(features, self.factor)?;
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let xv = g.leaf(x);
        let h = self.encode(&mut g, &p, xv, kind, chunk);
        let memories = g.value(h).clone();
        Ok(EncoderOutput { length: memories.rows(), memories })
    }
}

/// Latency-controlled BLSTM over raw features with the given chunking.
pub fn lc_blstm_forward(store: &ParamStore, encoder: &Encoder, frames: &Tensor, cfg: ChunkConfig) -> Result<EncoderOutput> {
    encoder.forward_features(store, frames, EncoderKind::LcBlstm, cfg)
}

/// Yields encoder memories chunk by chunk.
pub struct ChunkStream<'a> {
    encoder: &'a Encoder,
    kind: EncoderKind,
    schedule: Vec<Chunk>,
    next: usize,
    fwd_states: Vec<Option<LstmState>>,
    first_proj: Option<(Var, Var)>,
}

impl ChunkStream<'_> {
    pub fn chunks(&self) -> &[Chunk] {
        &self.schedule
    }

    pub fn is_done(&self) -> bool {
        self.next >= self.schedule.len()
    }

    /// Memories `[1, H]` for the next chunk's central frames, or `None` at the end.
    pub fn next_chunk(&mut self, g: &mut Graph, p: &Bound) -> Option<Vec<Var>> {
        let chunk = *self.schedule.get(self.next)?;
        self.next += 1;
        let central = chunk.end - chunk.start;
        let bidirectional = self.kind != EncoderKind::Lstm;
        let mut window_proj: Option<(Var, Var)> = None;
        let mut outputs: Vec<Var> = Vec::new();
        for (layer, (fwd, bwd)) in self.encoder.layers.iter().enumerate() {
            let (fproj_rows, bproj_rows): (Vec<Var>, Vec<Var>) = match (layer, self.first_proj, window_proj) {
                (0, Some((fp, bp)), _) => {
                    let f = (chunk.start..chunk.visible_end).map(|t| g.row(fp, t)).collect();
                    let b = (chunk.start..chunk.visible_end).map(|t| g.row(bp, t)).collect();
                    (f, b)
                }
                (_, _, Some((fp, bp))) => {
                    let n = g.value(fp).rows();
                    let f = (0..n).map(|t| g.row(fp, t)).collect();
                    let b = (0..n).map(|t| g.row(bp, t)).collect();
                    (f, b)
                }
                _ => unreachable!("layer input missing"),
            };
            let n = fproj_rows.len();
            let mut state = self.fwd_states[layer].unwrap_or_else(|| LstmState::zeros(g, fwd.hidden));
            let mut fwd_out = Vec::with_capacity(n);
            for (k, row) in fproj_rows.iter().enumerate() {
                state = fwd.cell(g, p, *row, state);
                fwd_out.push(state.h);
                if k + 1 == central {
                    // Carry the state after the last central frame only.
                    self.fwd_states[layer] = Some(state);
                }
            }
            let merged: Vec<Var> = if bidirectional {
                let mut bstate = LstmState::zeros(g, bwd.hidden);
                let mut bwd_out = vec![bstate.h; n];
                for k in (0..n).rev() {
                    bstate = bwd.cell(g, p, bproj_rows[k], bstate);
                    bwd_out[k] = bstate.h;
                }
                fwd_out.iter().zip(&bwd_out).map(|(a, b)| g.add(*a, *b)).collect()
            } else {
                fwd_out
            };
            if layer + 1 < self.encoder.layers.len() {
                let (nf, nb) = &self.encoder.layers[layer + 1];
                let m = g.stack_rows(&merged);
                window_proj = Some((nf.project_inputs(g, p, m), nb.project_inputs(g, p, m)));
            }
            outputs = merged;
        }
        outputs.truncate(central);
        Some(outputs)
    }
}
