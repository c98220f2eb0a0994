//! Built-in numerical self-checks against brute-force oracles and finite
//! differences. Each suite runs in seconds and needs no data.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{self, expected_alignment};
use crate::ctc::{self, BLANK};
use crate::encoder::{chunk_schedule, lc_blstm_forward, ChunkConfig, Encoder, EncoderKind};
use crate::model::{check_model_gradients, EncoderMode, ForwardOptions, MochaModel, ModelConfig, Utterance};
use crate::numerics::{clamp_prob, Tensor, DEFAULT_EPS};
use crate::objectives::LossWeights;
use crate::oracle;
use crate::params::ParamStore;

pub const CTC_INSTANCES: usize = 200;
pub const ALIGNMENT_INSTANCES: usize = 200;
pub const CTC_LOSS_TOL: f64 = 1e-9;
pub const CTC_ALIGN_TOL: f64 = 1e-12;
pub const ALIGNMENT_TOL: f64 = 1e-10;
pub const GRADIENT_TOL: f64 = 1e-4;
pub const CHUNK_TOL: f64 = 1e-12;

/// Outcome of one check.
#[derive(Clone, Debug)]
pub struct CheckResult {
    pub suite: &'static str,
    pub name: String,
    pub passed: bool,
    pub detail: String,
    pub elapsed: Duration,
}

impl CheckResult {
    pub fn line(&self) -> String {
        let status = if self.passed { "PASS" } else { "FAIL" };
        format!("{status} {}/{} ({:.2}s): {}", self.suite, self.name, self.elapsed.as_secs_f64(), self.detail)
    }
}

#[derive(Clone, Debug, Default)]
pub struct SelfTestReport {
    pub results: Vec<CheckResult>,
}

impl SelfTestReport {
    pub fn passed(&self) -> bool {
        self.results.iter().all(|r| r.passed)
    }

    pub fn failures(&self) -> usize {
        self.results.iter().filter(|r| !r.passed).count()
    }
}

type SuiteFn = fn() -> Vec<CheckResult>;

pub const SUITES: &[(&str, SuiteFn)] = &[
    ("attention", attention_suite),
    ("ctc", ctc_suite),
    ("gradient", gradient_suite),
    ("encoder", encoder_suite),
];

/// Runs every suite whose name contains `filter` (all suites for `None`).
pub fn run_selftest(filter: Option<&str>) -> SelfTestReport {
    let results = SUITES
        .iter()
        .filter(|(name, _)| filter.is_none_or(|f| name.contains(f)))
        .flat_map(|(_, run)| run())
        .collect();
    SelfTestReport { results }
}

fn timed(suite: &'static str, name: &str, check: impl FnOnce() -> (bool, String)) -> CheckResult {
    let start = Instant::now();
    let (passed, detail) = check();
    CheckResult { suite, name: name.to_string(), passed, detail, elapsed: start.elapsed() }
}

fn random_probs(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols).map(|_| clamp_prob(rng.random_range(0.0..1.0))).collect();
    Tensor::new(vec![rows, cols], data).unwrap()
}

pub fn attention_suite() -> Vec<CheckResult> {
    vec![
        timed("attention", "alignment_oracle", || check_alignment_oracle(expected_alignment, ALIGNMENT_INSTANCES, 11)),
        timed("attention", "chunkwise_oracle", check_chunkwise_oracle),
    ]
}

/// Compares `align` against exhaustive enumeration of Bernoulli selection
/// paths on random instances with `U <= 4`, `T <= 8`.
pub fn check_alignment_oracle(align: impl Fn(&Tensor) -> Tensor, instances: usize, seed: u64) -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let (u, t) = (rng.random_range(1..=4), rng.random_range(1..=8));
        let p = random_probs(&mut rng, u, t);
        let rows: Vec<Vec<f64>> = (0..u).map(|i| p.row(i).to_vec()).collect();
        let expect = oracle::expected_alignment_paths(&rows);
        let got = align(&p);
        for (i, row) in expect.iter().enumerate() {
            for (j, &e) in row.iter().enumerate() {
                let err = (got.get2(i, j) - e).abs();
                // NaN must fail too.
                worst = if err.is_nan() { f64::INFINITY } else { worst.max(err) };
            }
        }
    }
    (worst <= ALIGNMENT_TOL, format!("{instances} instances, max |alpha - oracle| = {worst:.3e} (tol {ALIGNMENT_TOL:e})"))
}

fn check_chunkwise_oracle() -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let (u, t, w) = (rng.random_range(1..=4), rng.random_range(1..=10), rng.random_range(1..=5));
        let alpha = expected_alignment(&random_probs(&mut rng, u, t));
        let energies = Tensor::new(vec![u, t], (0..u * t).map(|_| rng.random_range(-3.0..3.0)).collect()).unwrap();
        let Ok(beta) = attention::chunkwise_attention(&alpha, &energies, w) else {
            return (false, "chunkwise_attention rejected a valid input".into());
        };
        for i in 0..u {
            let expect = oracle::chunkwise_attention_loops(alpha.row(i), energies.row(i), w);
            for (x, y) in beta.row(i).iter().zip(&expect) {
                worst = worst.max((x - y).abs());
            }
        }
    }
    (worst <= 1e-12, format!("100 instances, max |beta - oracle| = {worst:.3e}"))
}

pub fn ctc_suite() -> Vec<CheckResult> {
    vec![timed("ctc", "path_enumeration", || check_ctc_oracle(CTC_INSTANCES, 21))]
}

/// `ctc_loss` against the summed probability of every collapsing path and
/// `ctc_forced_align` against the best such path, for `T <= 6`, `U <= 3`,
/// `V <= 4` including blank.
pub fn check_ctc_oracle(instances: usize, seed: u64) -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut loss_err, mut align_err): (f64, f64) = (0.0, 0.0);
    for n in 0..instances {
        let v = rng.random_range(2..=4);
        let u = rng.random_range(0..=3);
        let labels: Vec<usize> = (0..u).map(|_| rng.random_range(1..v)).collect();
        let lo = ctc::min_frames(&labels).max(1);
        if lo > 6 {
            continue;
        }
        let t = rng.random_range(lo..=6);
        let probs: Vec<Vec<f64>> = (0..t)
            .map(|_| {
                let raw: Vec<f64> = (0..v).map(|_| rng.random_range(0.05..1.0)).collect();
                let z: f64 = raw.iter().sum();
                raw.iter().map(|x| x / z).collect()
            })
            .collect();
        let logp = Tensor::from_rows(&probs.iter().map(|r| r.iter().map(|x| x.ln()).collect()).collect::<Vec<_>>()).unwrap();
        let total = oracle::ctc_total_prob(&probs, &labels, BLANK);
        let (best_path, best) = oracle::ctc_best_path(&probs, &labels, BLANK).expect("feasible instance");
        let (loss, _) = match ctc::ctc_loss(&logp, &labels) {
            Ok(x) => x,
            Err(e) => return (false, format!("instance {n}: ctc_loss failed: {e}")),
        };
        loss_err = loss_err.max((loss + total.ln()).abs());
        let path = match ctc::ctc_forced_align(&logp, &labels) {
            Ok(p) => p,
            Err(e) => return (false, format!("instance {n}: forced alignment failed: {e}")),
        };
        if oracle::collapse(&path, BLANK) != labels {
            return (false, format!("instance {n}: forced path {path:?} does not collapse to {labels:?} (best {best_path:?})"));
        }
        let pr: f64 = path.iter().enumerate().map(|(t, &s)| probs[t][s]).product();
        align_err = align_err.max((pr - best).abs());
    }
    (
        loss_err <= CTC_LOSS_TOL && align_err <= CTC_ALIGN_TOL,
        format!(
            "{instances} instances, loss error {loss_err:.3e} (tol {CTC_LOSS_TOL:e}), best-path probability error {align_err:.3e} (tol {CTC_ALIGN_TOL:e})"
        ),
    )
}

pub fn gradient_suite() -> Vec<CheckResult> {
    let modes = [
        ("offline", EncoderMode::OFFLINE),
        ("lc_blstm", EncoderMode { kind: EncoderKind::LcBlstm, chunk: ChunkConfig { n_c: Some(2), n_r: 1 } }),
    ];
    modes.into_iter().map(|(name, mode)| timed("gradient", name, || check_total_loss_gradients(mode))).collect()
}

/// Finite-difference check of the full weighted loss with all four terms on
/// a two-utterance batch. Energy offset 0 keeps every gradient above the
/// central-difference noise floor.
pub fn check_total_loss_gradients(mode: EncoderMode) -> (bool, String) {
    let cfg = ModelConfig {
        vocab: 3,
        feat_dim: 2,
        subsample: 1,
        enc_hidden: 3,
        enc_layers: 1,
        dec_hidden: 3,
        emb_dim: 2,
        attn_dim: 3,
        chunk_width: 2,
        energy_offset: 0.0,
    };
    let model = match MochaModel::new(cfg, 3) {
        Ok(m) => m,
        Err(e) => return (false, e.to_string()),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut utt = |frames: usize, labels: Vec<usize>| {
        let data = (0..frames * 2).map(|_| rng.random_range(-1.0..1.0)).collect();
        Utterance { id: "g".into(), features: Tensor::new(vec![frames, 2], data).unwrap(), labels, true_starts: vec![] }
    };
    let (a, b) = (utt(6, vec![1, 3]), utt(5, vec![2]));
    let weights = LossWeights { lambda_ctc: 0.3, lambda_qua: 2.0, lambda_sync: 1.0 };
    let opts = ForwardOptions { mode, smoothing: 0.1, dropout: 0.0 };
    match check_model_gradients(&model, &[&a, &b], &opts, &weights, DEFAULT_EPS) {
        Ok(r) => {
            let worst = r.worst.map_or("-", |i| model.store.names()[i].as_str());
            (
                r.max_rel_error < GRADIENT_TOL,
                format!(
                    "{} values, max relative error {:.3e} at {worst} (tol {GRADIENT_TOL:e}), max abs error {:.3e}",
                    r.checked, r.max_rel_error, r.max_abs_error
                ),
            )
        }
        Err(e) => (false, e.to_string()),
    }
}

pub fn encoder_suite() -> Vec<CheckResult> {
    vec![
        timed("encoder", "single_chunk_equals_blstm", check_single_chunk_equivalence),
        timed("encoder", "lookahead_isolation", check_lookahead_isolation),
    ]
}

fn random_encoder(seed: u64, factor: usize, layers: usize) -> (ParamStore, Encoder, ChaCha8Rng) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let enc = Encoder::init(&mut store, 3, factor, 4, layers, &mut rng);
    (store, enc, rng)
}

fn random_features(rng: &mut ChaCha8Rng, frames: usize) -> Tensor {
    Tensor::new(vec![frames, 3], (0..frames * 3).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn check_single_chunk_equivalence() -> (bool, String) {
    let mut worst: f64 = 0.0;
    for seed in 0..10 {
        let (store, enc, mut rng) = random_encoder(seed, 1 + seed as usize % 3, 1 + seed as usize % 2);
        let t0 = rng.random_range(1..=20);
        let feats = random_features(&mut rng, t0);
        let full = enc.forward_features(&store, &feats, EncoderKind::Blstm, ChunkConfig::OFFLINE);
        let lc = lc_blstm_forward(&store, &enc, &feats, ChunkConfig { n_c: Some(t0), n_r: 0 });
        let (Ok(full), Ok(lc)) = (full, lc) else {
            return (false, "encoder failed".into());
        };
        for (x, y) in full.memories.data().iter().zip(lc.memories.data()) {
            worst = worst.max((x - y).abs());
        }
    }
    (worst <= CHUNK_TOL, format!("10 encoders, N_c = T, N_r = 0: max difference {worst:.3e} (tol {CHUNK_TOL:e})"))
}

fn check_lookahead_isolation() -> (bool, String) {
    let mut checked = 0;
    for seed in 0..8 {
        let factor = 1 + seed as usize % 2;
        let (store, enc, mut rng) = random_encoder(100 + seed, factor, 1 + seed as usize % 2);
        let t0 = rng.random_range(6..=24);
        let cfg = ChunkConfig { n_c: Some(rng.random_range(1..=8)), n_r: rng.random_range(0..=6) };
        let feats = random_features(&mut rng, t0);
        let Ok(base) = lc_blstm_forward(&store, &enc, &feats, cfg) else {
            return (false, "encoder failed".into());
        };
        let (n_c, n_r) = cfg.to_encoder_frames(factor);
        for chunk in chunk_schedule(base.length, n_c, n_r) {
            let mut perturbed = feats.clone();
            for row in (chunk.visible_end * factor).min(t0)..t0 {
                perturbed.data_mut()[row * 3..(row + 1) * 3].iter_mut().for_each(|v| *v += rng.random_range(1.0..5.0));
            }
            let Ok(out) = lc_blstm_forward(&store, &enc, &perturbed, cfg) else {
                return (false, "encoder failed".into());
            };
            for t in chunk.start..chunk.end {
                if out.memories.row(t) != base.memories.row(t) {
                    return (false, format!("seed {seed} {cfg:?}: frame {t} changed when perturbing past frame {}", chunk.visible_end));
                }
            }
            checked += 1;
        }
    }
    (true, format!("{checked} chunks unchanged (exact) under perturbation beyond the lookahead"))
}
