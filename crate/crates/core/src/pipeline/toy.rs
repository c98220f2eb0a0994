use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Utterance;
use crate::numerics::Tensor;

/// Synthetic monotonic task: every token is a fixed noisy feature template
/// held for a random number of raw frames.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyTaskSpec {
    pub vocab: usize,
    pub feat_dim: usize,
    /// Raw frames per token, inclusive range.
    pub min_duration: usize,
    pub max_duration: usize,
    /// Tokens per utterance, inclusive range.
    pub min_tokens: usize,
    pub max_tokens: usize,
    /// Standard deviation of additive Gaussian noise.
    pub noise: f64,
    /// Seeds the token templates, which are shared by every batch.
    pub template_seed: u64,
}

impl Default for ToyTaskSpec {
    fn default() -> Self {
        ToyTaskSpec {
            vocab: 6,
            feat_dim: 8,
            min_duration: 3,
            max_duration: 8,
            min_tokens: 4,
            max_tokens: 10,
            noise: 0.3,
            template_seed: 7,
        }
    }
}

impl ToyTaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.vocab < 2 {
            return Err(Error::Config("toy vocab must be at least 2 so labels can avoid repeats".into()));
        }
        if self.feat_dim == 0 || self.min_duration == 0 || self.min_tokens == 0 {
            return Err(Error::Config("toy feat_dim, min_duration and min_tokens must be positive".into()));
        }
        if self.min_duration > self.max_duration || self.min_tokens > self.max_tokens {
            return Err(Error::Config("toy ranges must have min <= max".into()));
        }
        if !(self.noise >= 0.0) {
            return Err(Error::Config("toy noise must be non-negative".into()));
        }
        Ok(())
    }

    /// Token templates `[vocab + 1, feat_dim]`; row 0 is unused.
    pub fn templates(&self) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(self.template_seed);
        let mut data = vec![0.0; (self.vocab + 1) * self.feat_dim];
        for x in &mut data[self.feat_dim..] {
            *x = StandardNormal.sample(&mut rng);
        }
        Tensor::new(vec![self.vocab + 1, self.feat_dim], data).expect("template shape")
    }

    pub fn mean_duration(&self) -> f64 {
        (self.min_duration + self.max_duration) as f64 / 2.0
    }
}

/// Renders `n` utterances. Labels never repeat a token back to back, so any
/// utterance with at least `U` encoder frames admits a CTC path.
pub fn generate_toy_batch(spec: &ToyTaskSpec, n: usize, seed: u64) -> Result<Vec<Utterance>> {
    spec.validate()?;
    let templates = spec.templates();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let f = spec.feat_dim;
    let mut out = Vec::with_capacity(n);
    for k in 0..n {
        let u = rng.random_range(spec.min_tokens..=spec.max_tokens);
        let mut labels = Vec::with_capacity(u);
        for _ in 0..u {
            let prev = labels.last().copied().unwrap_or(0);
            let mut y = rng.random_range(1..=spec.vocab - usize::from(prev != 0));
            if prev != 0 && y >= prev {
                y += 1;
            }
            labels.push(y);
        }
        let mut data = Vec::new();
        let mut starts = Vec::with_capacity(u);
        for &y in &labels {
            starts.push(data.len() / f);
            let dur = rng.random_range(spec.min_duration..=spec.max_duration);
            for _ in 0..dur {
                for &c in templates.row(y) {
                    let eps: f64 = StandardNormal.sample(&mut rng);
                    data.push(c + spec.noise * eps);
                }
            }
        }
        let frames = data.len() / f;
        out.push(Utterance {
            id: format!("toy-{seed}-{k}"),
            features: Tensor::new(vec![frames, f], data)?,
            labels,
            true_starts: starts,
        });
    }
    Ok(out)
}
