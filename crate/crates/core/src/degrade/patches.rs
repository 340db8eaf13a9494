use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{DegradationSpec, DegradeError, Result};
use crate::image::Image;
use crate::tensor::Tensor;

/// Top-left offsets `0, stride, 2 * stride, ...` with `offset + patch <= extent`.
pub fn grid_positions(extent: usize, patch: usize, stride: usize) -> Vec<usize> {
    if patch > extent || stride == 0 {
        return Vec::new();
    }
    (0..=extent - patch).step_by(stride).collect()
}

/// Aligned (input, target) patch pairs. Targets are `patch x patch`; inputs
/// are `patch / s` square for a degradation that downsamples by `s`.
#[derive(Clone, Debug)]
pub struct PatchSet {
    inputs: Vec<Image>,
    targets: Vec<Image>,
    patch: usize,
    stride: usize,
    source_ids: Vec<usize>,
}

/// Cuts every image into a regular grid of clean patches. The pair inputs
/// start equal to the targets; see [`PatchSet::degraded`]. With
/// `shuffle_seed` the order is permuted deterministically.
pub fn extract_patches(images: &[Image], patch: usize, stride: usize, shuffle_seed: Option<u64>) -> Result<PatchSet> {
    if patch == 0 || stride == 0 {
        return Err(DegradeError::InvalidGrid(format!("patch {patch}, stride {stride}")));
    }
    let mut targets = Vec::new();
    let mut source_ids = Vec::new();
    for (id, img) in images.iter().enumerate() {
        if patch > img.height().min(img.width()) {
            return Err(DegradeError::PatchTooLarge {
                patch,
                detail: format!("image {id} is {}x{}", img.height(), img.width()),
            });
        }
        for top in grid_positions(img.height(), patch, stride) {
            for left in grid_positions(img.width(), patch, stride) {
                targets.push(img.crop(top, left, patch, patch)?);
                source_ids.push(id);
            }
        }
    }
    if let Some(seed) = shuffle_seed {
        let mut order: Vec<usize> = (0..targets.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        targets = order.iter().map(|&i| targets[i].clone()).collect();
        source_ids = order.iter().map(|&i| source_ids[i]).collect();
    }
    Ok(PatchSet { inputs: targets.clone(), targets, patch, stride, source_ids })
}

impl PatchSet {
    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn patch(&self) -> usize {
        self.patch
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn inputs(&self) -> &[Image] {
        &self.inputs
    }

    pub fn targets(&self) -> &[Image] {
        &self.targets
    }

    pub fn source_ids(&self) -> &[usize] {
        &self.source_ids
    }

    /// Keeps the first `n` pairs.
    pub fn truncated(mut self, n: usize) -> PatchSet {
        self.inputs.truncate(n);
        self.targets.truncate(n);
        self.source_ids.truncate(n);
        self
    }

    /// Same targets with inputs replaced by `spec` applied to each target,
    /// patch `i` using noise stream `i`.
    pub fn degraded(&self, spec: &DegradationSpec) -> Result<PatchSet> {
        spec.validate()?;
        let s = spec.downscale();
        if !self.patch.is_multiple_of(s) {
            return Err(DegradeError::InvalidScale(format!("patch {} is not a multiple of scale {s}", self.patch)));
        }
        let inputs =
            self.targets.iter().enumerate().map(|(i, t)| spec.apply(t, i as u64)).collect::<Result<Vec<_>>>()?;
        Ok(PatchSet { inputs, ..self.clone() })
    }

    /// `[B, C, h, w]` input and `[B, C, H, W]` target tensors in model scale.
    pub fn batch(&self, indices: &[usize]) -> (Tensor<f32>, Tensor<f32>) {
        let stack = |items: &[Image]| {
            let tensors: Vec<Tensor<f32>> = indices.iter().map(|&i| items[i].to_tensor()).collect();
            let refs: Vec<&Tensor<f32>> = tensors.iter().collect();
            Tensor::stack(&refs).expect("patches share a shape")
        };
        (stack(&self.inputs), stack(&self.targets))
    }
}
