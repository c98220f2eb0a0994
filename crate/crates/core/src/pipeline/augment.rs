use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MaskParams {
    /// Maximum frequency-mask width `F`.
    pub freq_width: usize,
    /// Maximum time-mask width `T`.
    pub time_width: usize,
    pub freq_masks: usize,
    pub time_masks: usize,
}

/// Samples a `[T0, f]` mask, `true` where a cell is zeroed. Widths are drawn
/// from `0..=param` and clipped to the axis length; starts are uniform over
/// the positions where the band fits.
pub fn sample_mask(frames: usize, feat_dim: usize, params: &MaskParams, rng: &mut impl Rng) -> Result<Vec<bool>> {
    if params.freq_width > feat_dim {
        return Err(Error::InvalidArgument(format!(
            "frequency mask width {} exceeds feature dimension {feat_dim}",
            params.freq_width
        )));
    }
    let mut mask = vec![false; frames * feat_dim];
    for _ in 0..params.freq_masks {
        let w = rng.random_range(0..=params.freq_width);
        let start = rng.random_range(0..=feat_dim - w);
        for t in 0..frames {
            mask[t * feat_dim + start..t * feat_dim + start + w].fill(true);
        }
    }
    for _ in 0..params.time_masks {
        let w = rng.random_range(0..=params.time_width).min(frames);
        let start = rng.random_range(0..=frames - w);
        mask[start * feat_dim..(start + w) * feat_dim].fill(true);
    }
    Ok(mask)
}

/// Returns a masked copy of `features`.
pub fn spec_augment(features: &Tensor, params: &MaskParams, rng: &mut impl Rng) -> Result<Tensor> {
    let mask = sample_mask(features.rows(), features.cols(), params, rng)?;
    let data = features.data().iter().zip(&mask).map(|(&x, &m)| if m { 0.0 } else { x }).collect();
    Tensor::new(features.shape().to_vec(), data)
}
