use rand::Rng;

use super::{resample_to_n, VideoFeatureSequence};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A class-balanced MIL batch; every sequence has exactly `n` snippets.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub normal: Vec<Tensor>,
    pub abnormal: Vec<Tensor>,
    /// Pool indices drawn for each half, in draw order.
    pub normal_idx: Vec<usize>,
    pub abnormal_idx: Vec<usize>,
}

impl Batch {
    pub fn pairs(&self) -> usize {
        self.normal.len()
    }
}

/// Draws `b/2` normal then `b/2` abnormal videos with replacement and resamples each to `n` snippets.
pub fn sample_batch<R: Rng + ?Sized>(
    normal_pool: &[VideoFeatureSequence],
    abnormal_pool: &[VideoFeatureSequence],
    b: usize,
    n: usize,
    rng: &mut R,
) -> Result<Batch> {
    if b == 0 || b % 2 != 0 {
        return Err(Error::contract("sample_batch", format!("batch size must be even and > 0, got {b}")));
    }
    if normal_pool.is_empty() || abnormal_pool.is_empty() {
        return Err(Error::contract("sample_batch", "both pools must be nonempty"));
    }
    let half = b / 2;
    let normal_idx: Vec<usize> = (0..half).map(|_| rng.random_range(0..normal_pool.len())).collect();
    let abnormal_idx: Vec<usize> = (0..half).map(|_| rng.random_range(0..abnormal_pool.len())).collect();
    let normal = normal_idx
        .iter()
        .map(|&i| resample_to_n(&normal_pool[i], n))
        .collect::<Result<_>>()?;
    let abnormal = abnormal_idx
        .iter()
        .map(|&i| resample_to_n(&abnormal_pool[i], n))
        .collect::<Result<_>>()?;
    Ok(Batch {
        normal,
        abnormal,
        normal_idx,
        abnormal_idx,
    })
}
