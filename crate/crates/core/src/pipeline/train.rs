use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use log::{debug, info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::augment::{spec_augment, MaskParams};
use super::checkpoint::Checkpoint;
use super::config::{DataSource, TrainConfig};
use super::toy::generate_toy_batch;
use crate::error::{Error, Result};
use crate::model::{EncoderMode, ForwardOptions, MochaModel, Utterance};
use crate::numerics::Graph;
use crate::objectives::{total_loss_graph, LossBreakdown, LossWeights, MetricsLog};
use crate::params::ParamStore;

/// Adaptive-moment optimizer with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u32,
}

impl Adam {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = store.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
        Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8, m: zeros.clone(), v: zeros, t: 0 }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &[Vec<f64>], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, tensor) in store.tensors_mut().iter_mut().enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (k, x) in tensor.data_mut().iter_mut().enumerate() {
                let g = grads[i][k];
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g;
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g * g;
                *x -= lr * (m[k] / c1) / ((v[k] / c2).sqrt() + self.eps);
            }
        }
    }
}

/// Rescales `grads` in place so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let norm = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().flatten().for_each(|g| *g *= s);
    }
    norm
}

#[derive(Clone, Debug)]
pub struct EpochStats {
    pub epoch: usize,
    pub learning_rate: f64,
    pub train: LossBreakdown,
    pub dev: LossBreakdown,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters with the best held-out total loss (the seed when no epoch ran).
    pub checkpoint: Checkpoint,
    pub history: Vec<EpochStats>,
    /// Total training loss of every optimizer step, in order.
    pub trajectory: Vec<f64>,
    pub best_epoch: Option<usize>,
}

/// Training and held-out utterances.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub train: Vec<Utterance>,
    pub dev: Vec<Utterance>,
}

impl Dataset {
    pub fn from_source(source: &DataSource) -> Result<Self> {
        match source {
            DataSource::Toy { spec, train, dev, seed } => Ok(Dataset {
                train: generate_toy_batch(spec, *train, *seed)?,
                dev: generate_toy_batch(spec, *dev, seed.wrapping_add(1))?,
            }),
            DataSource::Files { train, dev } => Ok(Dataset { train: load_utterances(train)?, dev: load_utterances(dev)? }),
        }
    }
}

pub fn load_utterances(path: &Path) -> Result<Vec<Utterance>> {
    let utts: Vec<Utterance> = serde_json::from_str(&fs::read_to_string(path)?)?;
    for u in &utts {
        if u.features.len() != u.features.shape().iter().product::<usize>() {
            return Err(Error::Shape(format!("utterance {} has inconsistent feature shape", u.id)));
        }
    }
    Ok(utts)
}

pub fn save_utterances(path: &Path, utts: &[Utterance]) -> Result<()> {
    fs::write(path, serde_json::to_string(utts)?)?;
    Ok(())
}

/// Mean loss terms over `utts` without augmentation or dropout.
pub fn evaluate_loss(model: &MochaModel, utts: &[Utterance], mode: EncoderMode, weights: &LossWeights, smoothing: f64) -> Result<LossBreakdown> {
    if utts.is_empty() {
        return Err(Error::Empty("no utterances to evaluate"));
    }
    let opts = ForwardOptions { mode, smoothing, dropout: 0.0 };
    let mut sum = [0.0; 4];
    for u in utts {
        let mut g = Graph::new();
        let p = model.store.bind(&mut g);
        let f = model.forward(&mut g, &p, u, &opts, None)?;
        let b = f.terms.breakdown(&g, weights);
        for (s, x) in sum.iter_mut().zip([b.mocha_nll, b.ctc, b.quantity, b.sync]) {
            *s += x;
        }
    }
    let n = utts.len() as f64;
    Ok(LossBreakdown::from_parts(sum[0] / n, sum[1] / n, sum[2] / n, sum[3] / n, weights))
}

fn dump_batch(dir: Option<&Path>, step: usize, batch: &[Utterance]) -> Option<PathBuf> {
    let dir = dir.map(Path::to_path_buf).unwrap_or_else(std::env::temp_dir);
    let path = dir.join(format!("diverged-step{step}.json"));
    match fs::create_dir_all(&dir).map_err(Error::from).and_then(|_| save_utterances(&path, batch)) {
        Ok(()) => Some(path),
        Err(e) => {
            warn!("could not write divergence dump: {e}");
            None
        }
    }
}

fn mean_breakdown(parts: &[LossBreakdown], w: &LossWeights) -> LossBreakdown {
    let n = parts.len().max(1) as f64;
    let s = |f: fn(&LossBreakdown) -> f64| parts.iter().map(f).sum::<f64>() / n;
    LossBreakdown::from_parts(s(|b| b.mocha_nll), s(|b| b.ctc), s(|b| b.quantity), s(|b| b.sync), w)
}

/// Runs one curriculum stage. Stage 2 starts from `seed`, whose weights are
/// reused unchanged even though the encoder switches to chunked processing.
pub fn train_stage(
    cfg: &TrainConfig,
    data: &Dataset,
    seed: Option<Checkpoint>,
    mut metrics: Option<&mut MetricsLog<Box<dyn Write>>>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    cfg.require_seed_checkpoint(seed.is_some())?;
    if data.train.is_empty() || data.dev.is_empty() {
        return Err(Error::Empty("training and held-out sets must be non-empty"));
    }
    let mut model = match seed {
        Some(ckpt) => {
            if ckpt.config != cfg.model {
                warn!("seed checkpoint architecture differs from the config; using the checkpoint's");
            }
            let mut m = ckpt.into_model()?;
            // Chunk width does not change parameter shapes, so the run config may set it.
            m.config.chunk_width = cfg.model.chunk_width;
            m
        }
        None => MochaModel::new(cfg.model.clone(), cfg.seed)?,
    };
    let mode = cfg.encoder_mode();
    let w = cfg.weights;
    let opts = ForwardOptions { mode, smoothing: cfg.label_smoothing, dropout: cfg.dropout };
    let masks = MaskParams {
        freq_width: cfg.spec_augment.freq_width,
        time_width: cfg.spec_augment.time_width,
        freq_masks: cfg.spec_augment.freq_masks,
        time_masks: cfg.spec_augment.time_masks,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut adam = Adam::new(&model.store);
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    let mut history = Vec::new();
    let mut trajectory = Vec::new();
    let mut best: Option<(f64, usize, ParamStore)> = None;
    let mut since_best = 0;
    let mut step = 0;

    for epoch in 0..cfg.epochs {
        let lr = cfg.learning_rate * cfg.decay.powi(epoch.saturating_sub(cfg.decay_start) as i32);
        order.shuffle(&mut rng);
        let mut epoch_parts = Vec::new();
        for idx in order.chunks(cfg.batch_size) {
            let batch: Vec<Utterance> = idx
                .iter()
                .map(|&i| {
                    let u = &data.train[i];
                    if cfg.spec_augment.enabled {
                        Ok(Utterance { features: spec_augment(&u.features, &masks, &mut rng)?, ..u.clone() })
                    } else {
                        Ok(u.clone())
                    }
                })
                .collect::<Result<_>>()?;
            let refs: Vec<&Utterance> = batch.iter().collect();
            let mut g = Graph::new();
            let p = model.store.bind(&mut g);
            let (terms, _) = match model.forward_batch(&mut g, &p, &refs, &opts, Some(&mut rng)) {
                Err(Error::NonFinite(reason)) => {
                    let dump = dump_batch(cfg.output_dir.as_deref(), step, &batch);
                    return Err(Error::Diverged { step, reason, dump });
                }
                other => other?,
            };
            let total = total_loss_graph(&mut g, &terms, &w);
            let parts = terms.breakdown(&g, &w);
            if !parts.total.is_finite() {
                let dump = dump_batch(cfg.output_dir.as_deref(), step, &batch);
                return Err(Error::Diverged { step, reason: format!("non-finite loss {parts:?}"), dump });
            }
            let grads = g.backward(total);
            let mut flat: Vec<Vec<f64>> = p
                .vars()
                .iter()
                .zip(model.store.tensors())
                .map(|(v, t)| grads.get(*v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.len()]))
                .collect();
            let norm = clip_global_norm(&mut flat, cfg.clip_norm);
            if !norm.is_finite() {
                let dump = dump_batch(cfg.output_dir.as_deref(), step, &batch);
                return Err(Error::Diverged { step, reason: "non-finite gradient".into(), dump });
            }
            adam.step(&mut model.store, &flat, lr);
            if let Some(log) = metrics.as_deref_mut() {
                log.record(step, &parts)?;
            }
            trajectory.push(parts.total);
            epoch_parts.push(parts);
            step += 1;
        }
        let train = mean_breakdown(&epoch_parts, &w);
        let dev = evaluate_loss(&model, &data.dev, mode, &w, cfg.label_smoothing)?;
        info!(
            "{} epoch {epoch}: lr {lr:.2e} train {:.4} dev {:.4} (nll {:.4} ctc {:.4} qua {:.4} sync {:.4})",
            cfg.stage, train.total, dev.total, dev.mocha_nll, dev.ctc, dev.quantity, dev.sync
        );
        history.push(EpochStats { epoch, learning_rate: lr, train, dev });
        if best.as_ref().is_none_or(|(b, _, _)| dev.total < *b) {
            best = Some((dev.total, epoch, model.store.clone()));
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                debug!("early stop after epoch {epoch}");
                break;
            }
        }
    }
    if let Some(log) = metrics {
        log.flush()?;
    }
    let best_epoch = best.as_ref().map(|(_, e, _)| *e);
    if let Some((_, _, params)) = best {
        model.store = params;
    }
    Ok(TrainOutcome { checkpoint: Checkpoint::from_model(&model, cfg.stage), history, trajectory, best_epoch })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::pipeline::config::Stage;
    use crate::pipeline::toy::ToyTaskSpec;

    fn small_cfg() -> TrainConfig {
        let mut cfg = TrainConfig::preset(Stage::Stage1);
        let spec = ToyTaskSpec { vocab: 3, feat_dim: 3, min_tokens: 1, max_tokens: 3, ..Default::default() };
        cfg.model = ModelConfig { vocab: 3, feat_dim: 3, enc_hidden: 6, dec_hidden: 6, emb_dim: 3, attn_dim: 4, ..ModelConfig::default() };
        cfg.data = DataSource::Toy { spec, train: 12, dev: 4, seed: 3 };
        cfg.epochs = 2;
        cfg.batch_size = 4;
        cfg
    }

    #[test]
    fn adam_minimises_a_quadratic() {
        let mut store = ParamStore::new();
        store.add("x", crate::numerics::Tensor::vector(vec![3.0, -2.0]));
        let mut adam = Adam::new(&store);
        for _ in 0..2000 {
            let g: Vec<Vec<f64>> = vec![store.tensors()[0].data().iter().map(|x| 2.0 * x).collect()];
            adam.step(&mut store, &g, 0.05);
        }
        assert!(store.tensors()[0].data().iter().all(|x| x.abs() < 1e-3));
    }

    #[test]
    fn clipping_bounds_norm() {
        let mut g = vec![vec![3.0, 4.0], vec![0.0]];
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        assert!((g[0][0] - 0.6).abs() < 1e-15 && (g[0][1] - 0.8).abs() < 1e-15);
        let mut h = vec![vec![0.3]];
        clip_global_norm(&mut h, 1.0);
        assert_eq!(h[0][0], 0.3);
    }

    #[test]
    fn deterministic_trajectory() {
        let cfg = small_cfg();
        let data = Dataset::from_source(&cfg.data).unwrap();
        let a = train_stage(&cfg, &data, None, None).unwrap();
        let b = train_stage(&cfg, &data, None, None).unwrap();
        assert_eq!(a.trajectory, b.trajectory);
        assert_eq!(a.checkpoint, b.checkpoint);
        assert_eq!(a.trajectory.len(), 6);
    }

    #[test]
    fn zero_epochs_returns_seed() {
        let mut cfg = small_cfg();
        let data = Dataset::from_source(&cfg.data).unwrap();
        let seed = Checkpoint::from_model(&MochaModel::new(cfg.model.clone(), 9).unwrap(), Stage::Stage1);
        cfg.epochs = 0;
        let out = train_stage(&cfg, &data, Some(seed.clone()), None).unwrap();
        assert_eq!(out.checkpoint.params, seed.params);
        assert!(out.trajectory.is_empty());
    }

    #[test]
    fn stage2_requires_seed_and_accepts_new_chunking() {
        let mut cfg = small_cfg();
        let data = Dataset::from_source(&cfg.data).unwrap();
        let s1 = train_stage(&cfg, &data, None, None).unwrap();
        cfg.stage = Stage::Stage2;
        cfg.weights = LossWeights::STAGE2;
        cfg.encoder = crate::encoder::EncoderKind::LcBlstm;
        cfg.chunk = crate::encoder::ChunkConfig::new(4, 2).unwrap();
        cfg.spec_augment.enabled = true;
        assert!(train_stage(&cfg, &data, None, None).is_err());
        let s2 = train_stage(&cfg, &data, Some(s1.checkpoint), None).unwrap();
        assert_eq!(s2.checkpoint.stage, Stage::Stage2);
        assert!(s2.trajectory.iter().all(|x| x.is_finite()));
    }

    #[test]
    fn stage2_objective_reduces_to_stage1_weights() {
        let cfg = small_cfg();
        let data = Dataset::from_source(&cfg.data).unwrap();
        let model = MochaModel::new(cfg.model.clone(), 2).unwrap();
        let restored = LossWeights { lambda_sync: 0.0, lambda_qua: LossWeights::STAGE1.lambda_qua, ..LossWeights::STAGE2 };
        let a = evaluate_loss(&model, &data.dev, EncoderMode::OFFLINE, &LossWeights::STAGE1, 0.1).unwrap();
        let b = evaluate_loss(&model, &data.dev, EncoderMode::OFFLINE, &restored, 0.1).unwrap();
        assert_eq!(a.total, b.total);
    }

    #[test]
    fn divergence_dumps_batch() {
        let mut cfg = small_cfg();
        let dir = tempfile::tempdir().unwrap();
        cfg.output_dir = Some(dir.path().to_path_buf());
        let data = Dataset::from_source(&cfg.data).unwrap();
        let mut model = MochaModel::new(cfg.model.clone(), 1).unwrap();
        model.store.tensors_mut()[0].data_mut()[0] = f64::NAN;
        let seed = Checkpoint::from_model(&model, Stage::Stage1);
        match train_stage(&cfg, &data, Some(seed), None) {
            Err(Error::Diverged { step: 0, dump: Some(path), .. }) => {
                let dumped = load_utterances(&path).unwrap();
                assert_eq!(dumped.len(), cfg.batch_size);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn metrics_rows_per_step() {
        let cfg = small_cfg();
        let data = Dataset::from_source(&cfg.data).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        let file: Box<dyn Write> = Box::new(fs::File::create(&path).unwrap());
        let mut log = MetricsLog::new(file).unwrap();
        let out = train_stage(&cfg, &data, None, Some(&mut log)).unwrap();
        drop(log);
        let text = fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], MetricsLog::<Vec<u8>>::HEADER);
        assert_eq!(lines.len(), out.trajectory.len() + 1);
    }

    #[test]
    fn utterances_round_trip_through_json() {
        let cfg = small_cfg();
        let data = Dataset::from_source(&cfg.data).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.json");
        save_utterances(&path, &data.train).unwrap();
        assert_eq!(load_utterances(&path).unwrap(), data.train);
    }
}
