//! Sliced MIC: per-patch statistical dependency between reference and
//! distorted deep features, Monte-Carlo averaged over seeded Gaussian
//! channel projections, and the derived attention map (1 - dependency).

use ndarray::{Array2, Array3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use thiserror::Error;

use crate::maps::extract_patch_grid;
use crate::mic::{approx_mic, MicOptions, SamplePairs};

#[derive(Debug, Error)]
pub enum SmicError {
    #[error("projection vector has length {actual}, patch has {expected} channels")]
    VectorLengthMismatch { expected: usize, actual: usize },
    #[error("patch pair shapes differ ({a:?} vs {b:?})")]
    PatchShapeMismatch {
        a: (usize, usize, usize),
        b: (usize, usize, usize),
    },
    #[error("patch spatial area {area} is below the 4-sample MIC minimum")]
    PatchTooSmall { area: usize },
    #[error("patch values must be finite")]
    NonFinitePatch,
    #[error("projection bank has {bank} channels, features have {features}")]
    ChannelMismatch { bank: usize, features: usize },
    #[error("stage {stage} feature map {h}x{w} is too small for a {patch}x{patch} patch")]
    StageTooSmall {
        stage: usize,
        h: usize,
        w: usize,
        patch: usize,
    },
}

/// Whether the reference and distorted stacks share projection vectors.
/// Shared mode mirrors a single depth-wise convolution applied to both
/// feature stacks and makes SMIC of identical inputs exactly one.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProjectionMode {
    Shared,
    Independent,
}

/// K pairs of Gaussian channel-projection vectors drawn from a seeded
/// generator. Immutable once built; safe to share across threads.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionBank {
    k: usize,
    channels: usize,
    seed: u64,
    mode: ProjectionMode,
    theta: Vec<Vec<f64>>,
    phi: Vec<Vec<f64>>,
}

/// Draw a projection bank. Deterministic for fixed (channels, k, seed,
/// mode); shared mode copies theta into phi.
pub fn sample_projection_bank(
    channels: usize,
    k: usize,
    seed: u64,
    mode: ProjectionMode,
) -> ProjectionBank {
    assert!(channels >= 1 && k >= 1, "channels and k must be >= 1");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let draw = |rng: &mut ChaCha8Rng| -> Vec<Vec<f64>> {
        (0..k)
            .map(|_| {
                (0..channels)
                    .map(|_| StandardNormal.sample(rng))
                    .collect()
            })
            .collect()
    };
    let theta = draw(&mut rng);
    let phi = match mode {
        ProjectionMode::Shared => theta.clone(),
        ProjectionMode::Independent => draw(&mut rng),
    };
    ProjectionBank {
        k,
        channels,
        seed,
        mode,
        theta,
        phi,
    }
}

impl ProjectionBank {
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn mode(&self) -> ProjectionMode {
        self.mode
    }

    pub fn theta(&self, i: usize) -> &[f64] {
        &self.theta[i]
    }

    pub fn phi(&self, i: usize) -> &[f64] {
        &self.phi[i]
    }
}

/// Same-stage patches cut from the reference and distorted feature maps.
#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePatchPair {
    pub ref_patch: Array3<f64>,
    pub dist_patch: Array3<f64>,
    pub stage: usize,
}

impl FeaturePatchPair {
    pub fn new(
        ref_patch: Array3<f64>,
        dist_patch: Array3<f64>,
        stage: usize,
    ) -> Result<Self, SmicError> {
        if ref_patch.dim() != dist_patch.dim() {
            return Err(SmicError::PatchShapeMismatch {
                a: ref_patch.dim(),
                b: dist_patch.dim(),
            });
        }
        let (h, w, _) = ref_patch.dim();
        if h * w < 4 {
            return Err(SmicError::PatchTooSmall { area: h * w });
        }
        if ref_patch.iter().chain(dist_patch.iter()).any(|v| !v.is_finite()) {
            return Err(SmicError::NonFinitePatch);
        }
        Ok(Self {
            ref_patch,
            dist_patch,
            stage,
        })
    }

    pub fn channels(&self) -> usize {
        self.ref_patch.dim().2
    }
}

/// Project a patch onto one channel vector: one scalar per spatial site,
/// row-major. Equivalent to a 1x1 depth-wise projection.
pub fn project_patch(patch: &Array3<f64>, vector: &[f64]) -> Result<Vec<f64>, SmicError> {
    let (h, w, c) = patch.dim();
    if vector.len() != c {
        return Err(SmicError::VectorLengthMismatch {
            expected: c,
            actual: vector.len(),
        });
    }
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (ch, &v) in vector.iter().enumerate() {
                acc += patch[(y, x, ch)] * v;
            }
            out.push(acc);
        }
    }
    Ok(out)
}

/// Monte-Carlo sliced MIC of a patch pair: the mean over the bank's K
/// slices of the heuristic MIC between projected sequences. Constant
/// projections contribute zero, not an error.
pub fn smic_patch(
    pair: &FeaturePatchPair,
    bank: &ProjectionBank,
    mic: &MicOptions,
) -> Result<f64, SmicError> {
    if bank.channels != pair.channels() {
        return Err(SmicError::ChannelMismatch {
            bank: bank.channels,
            features: pair.channels(),
        });
    }
    let mut acc = 0.0;
    for i in 0..bank.k {
        let xs = project_patch(&pair.ref_patch, bank.theta(i))?;
        let ys = project_patch(&pair.dist_patch, bank.phi(i))?;
        let samples = SamplePairs::new(xs, ys).expect("validated patch projections");
        acc += approx_mic(&samples, mic).value;
    }
    Ok(acc / bank.k as f64)
}

/// Per-stage attention: 1 - SMIC for every patch tile. High where the
/// feature dependency is low.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap {
    pub stage: usize,
    pub values: Array2<f64>,
}

/// Tile the stage's feature maps, compute SMIC per tile and store
/// `1 - value`. Incomplete border tiles are dropped. Tiles are evaluated in
/// parallel but reduced in deterministic row-major order.
pub fn attention_map_for_stage(
    ref_features: &Array3<f64>,
    dist_features: &Array3<f64>,
    bank: &ProjectionBank,
    stage: usize,
    patch: usize,
    stride: usize,
    mic: &MicOptions,
) -> Result<AttentionMap, SmicError> {
    if ref_features.dim() != dist_features.dim() {
        return Err(SmicError::PatchShapeMismatch {
            a: ref_features.dim(),
            b: dist_features.dim(),
        });
    }
    let (h, w, c) = ref_features.dim();
    if bank.channels != c {
        return Err(SmicError::ChannelMismatch {
            bank: bank.channels,
            features: c,
        });
    }
    if h < patch || w < patch {
        return Err(SmicError::StageTooSmall {
            stage,
            h,
            w,
            patch,
        });
    }
    let tiles = extract_patch_grid(h, w, patch, stride).expect("dims checked above");
    let rows = (h - patch) / stride + 1;
    let cols = (w - patch) / stride + 1;

    // project the full maps once per slice; per-tile gathers then reproduce
    // project_patch bit for bit
    let project_full = |features: &Array3<f64>, vector: &[f64]| -> Array2<f64> {
        Array2::from_shape_fn((h, w), |(y, x)| {
            let mut acc = 0.0;
            for (ch, &v) in vector.iter().enumerate() {
                acc += features[(y, x, ch)] * v;
            }
            acc
        })
    };
    let ref_slices: Vec<Array2<f64>> = (0..bank.k)
        .map(|i| project_full(ref_features, bank.theta(i)))
        .collect();
    let dist_slices: Vec<Array2<f64>> = (0..bank.k)
        .map(|i| project_full(dist_features, bank.phi(i)))
        .collect();

    let attention: Vec<f64> = tiles
        .par_iter()
        .map(|&(y0, x0)| {
            let mut acc = 0.0;
            for i in 0..bank.k {
                let gather = |plane: &Array2<f64>| -> Vec<f64> {
                    let mut out = Vec::with_capacity(patch * patch);
                    for y in y0..y0 + patch {
                        for x in x0..x0 + patch {
                            out.push(plane[(y, x)]);
                        }
                    }
                    out
                };
                let samples =
                    SamplePairs::new(gather(&ref_slices[i]), gather(&dist_slices[i]))
                        .expect("patch area >= 4 and finite features");
                acc += approx_mic(&samples, mic).value;
            }
            1.0 - acc / bank.k as f64
        })
        .collect();

    Ok(AttentionMap {
        stage,
        values: Array2::from_shape_vec((rows, cols), attention)
            .expect("tile count matches grid dims"),
    })
}

/// Seed for a per-patch bank when resampling per patch is requested.
/// SplitMix-style mixing keeps stages and tiles decorrelated.
pub fn per_patch_seed(seed: u64, stage: usize, tile_index: usize) -> u64 {
    let mut z = seed
        .wrapping_add((stage as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15))
        .wrapping_add((tile_index as u64 + 1).wrapping_mul(0xbf58_476d_1ce4_e5b9));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
