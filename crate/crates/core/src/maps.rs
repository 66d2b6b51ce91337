//! Local distortion maps: per-pixel squared error (PSNR), the SSIM index map
//! and patch-wise squared feature distance for the deep metric.

use ndarray::{Array2, Array3};
use thiserror::Error;

use crate::image::ImagePlane;

pub const DEFAULT_PATCH: usize = 7;
/// SSIM window defaults from the original index definition.
const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;
/// Guard for unit-normalizing zero feature vectors (LPIPS convention).
const NORM_EPS: f64 = 1e-10;

#[derive(Debug, Error)]
pub enum MapError {
    #[error("{context}: inputs have different shapes ({a:?} vs {b:?})")]
    ShapeMismatch {
        context: &'static str,
        a: (usize, usize, usize),
        b: (usize, usize, usize),
    },
    #[error("{context}: spatial dims {h}x{w} are smaller than required {min}")]
    TooSmall {
        context: &'static str,
        h: usize,
        w: usize,
        min: usize,
    },
}

/// Which metric a distortion map belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MapKind {
    Psnr,
    Ssim,
    Deep,
}

/// A spatial grid of local distortion values. Units depend on the kind:
/// squared intensity for PSNR, the SSIM index for SSIM, mean squared feature
/// distance for the deep metric.
#[derive(Debug, Clone, PartialEq)]
pub struct DistortionMap {
    pub kind: MapKind,
    pub stage: Option<usize>,
    pub values: Array2<f64>,
}

impl DistortionMap {
    pub fn mean(&self) -> f64 {
        self.values.mean().unwrap_or(0.0)
    }
}

/// Top-left corners of the patch tiling, row-major. Incomplete border tiles
/// are dropped: the grid is `floor((dim - patch) / stride) + 1` per axis.
pub fn extract_patch_grid(
    height: usize,
    width: usize,
    patch: usize,
    stride: usize,
) -> Result<Vec<(usize, usize)>, MapError> {
    assert!(patch >= 1 && stride >= 1, "patch and stride must be >= 1");
    if height < patch || width < patch {
        return Err(MapError::TooSmall {
            context: "extract_patch_grid",
            h: height,
            w: width,
            min: patch,
        });
    }
    let rows = (height - patch) / stride + 1;
    let cols = (width - patch) / stride + 1;
    let mut tiles = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            tiles.push((r * stride, c * stride));
        }
    }
    Ok(tiles)
}

/// Grid dimensions matching `extract_patch_grid`.
pub fn patch_grid_dims(
    height: usize,
    width: usize,
    patch: usize,
    stride: usize,
) -> Result<(usize, usize), MapError> {
    if height < patch || width < patch {
        return Err(MapError::TooSmall {
            context: "extract_patch_grid",
            h: height,
            w: width,
            min: patch,
        });
    }
    Ok(((height - patch) / stride + 1, (width - patch) / stride + 1))
}

/// Per-pixel squared difference averaged across channels. The map mean is
/// exactly the MSE of the pair.
pub fn psnr_error_map(reference: &ImagePlane, distorted: &ImagePlane) -> Result<DistortionMap, MapError> {
    let a = reference.values();
    let b = distorted.values();
    if a.dim() != b.dim() {
        return Err(MapError::ShapeMismatch {
            context: "psnr_error_map",
            a: a.dim(),
            b: b.dim(),
        });
    }
    let (h, w, c) = a.dim();
    let values = Array2::from_shape_fn((h, w), |(y, x)| {
        let mut acc = 0.0;
        for ch in 0..c {
            let d = a[(y, x, ch)] - b[(y, x, ch)];
            acc += d * d;
        }
        acc / c as f64
    });
    Ok(DistortionMap {
        kind: MapKind::Psnr,
        stage: None,
        values,
    })
}

fn gaussian_window(len: usize, sigma: f64) -> Vec<f64> {
    let half = (len - 1) as f64 / 2.0;
    let mut w: Vec<f64> = (0..len)
        .map(|i| {
            let d = i as f64 - half;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let sum: f64 = w.iter().sum();
    for v in &mut w {
        *v /= sum;
    }
    w
}

/// Separable valid-mode convolution with a symmetric window.
fn filter_valid(src: &Array2<f64>, window: &[f64]) -> Array2<f64> {
    let (h, w) = src.dim();
    let k = window.len();
    let mut rows = Array2::zeros((h, w - k + 1));
    for y in 0..h {
        for x in 0..w - k + 1 {
            let mut acc = 0.0;
            for (i, &wi) in window.iter().enumerate() {
                acc += wi * src[(y, x + i)];
            }
            rows[(y, x)] = acc;
        }
    }
    let mut out = Array2::zeros((h - k + 1, w - k + 1));
    for y in 0..h - k + 1 {
        for x in 0..w - k + 1 {
            let mut acc = 0.0;
            for (i, &wi) in window.iter().enumerate() {
                acc += wi * rows[(y + i, x)];
            }
            out[(y, x)] = acc;
        }
    }
    out
}

/// Local SSIM index map on the luminance channel: 11x11 Gaussian window with
/// sigma 1.5, C1 = 0.01^2, C2 = 0.03^2 on the [0, 1] range. Valid windows
/// only, so the map is `(H-10) x (W-10)` and its mean equals scalar SSIM.
pub fn ssim_local_map(reference: &ImagePlane, distorted: &ImagePlane) -> Result<DistortionMap, MapError> {
    if reference.values().dim() != distorted.values().dim() {
        return Err(MapError::ShapeMismatch {
            context: "ssim_local_map",
            a: reference.values().dim(),
            b: distorted.values().dim(),
        });
    }
    let (h, w) = (reference.height(), reference.width());
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(MapError::TooSmall {
            context: "ssim_local_map",
            h,
            w,
            min: SSIM_WINDOW,
        });
    }
    let x = reference.luminance();
    let y = distorted.luminance();
    let window = gaussian_window(SSIM_WINDOW, SSIM_SIGMA);

    let mu_x = filter_valid(&x, &window);
    let mu_y = filter_valid(&y, &window);
    let xx = filter_valid(&(&x * &x), &window);
    let yy = filter_valid(&(&y * &y), &window);
    let xy = filter_valid(&(&x * &y), &window);

    let mut values = Array2::zeros(mu_x.dim());
    for ((r, c), out) in values.indexed_iter_mut() {
        let (mx, my) = (mu_x[(r, c)], mu_y[(r, c)]);
        let var_x = xx[(r, c)] - mx * mx;
        let var_y = yy[(r, c)] - my * my;
        let cov = xy[(r, c)] - mx * my;
        *out = ((2.0 * mx * my + SSIM_C1) * (2.0 * cov + SSIM_C2))
            / ((mx * mx + my * my + SSIM_C1) * (var_x + var_y + SSIM_C2));
    }
    Ok(DistortionMap {
        kind: MapKind::Ssim,
        stage: None,
        values,
    })
}

/// Scale every spatial site's channel vector to unit L2 norm.
pub fn unit_normalize_channels(features: &Array3<f64>) -> Array3<f64> {
    let (h, w, c) = features.dim();
    let mut out = features.clone();
    for y in 0..h {
        for x in 0..w {
            let mut norm = 0.0;
            for ch in 0..c {
                norm += features[(y, x, ch)] * features[(y, x, ch)];
            }
            let norm = norm.sqrt() + NORM_EPS;
            for ch in 0..c {
                out[(y, x, ch)] /= norm;
            }
        }
    }
    out
}

/// Patch-wise squared feature distance: for each tile, the squared L2 norm
/// of the feature difference divided by the patch area. With `normalize`
/// set, channel vectors are unit-normalized per spatial site first.
pub fn deep_distortion_map(
    ref_features: &Array3<f64>,
    dist_features: &Array3<f64>,
    stage: usize,
    patch: usize,
    stride: usize,
    normalize: bool,
) -> Result<DistortionMap, MapError> {
    if ref_features.dim() != dist_features.dim() {
        return Err(MapError::ShapeMismatch {
            context: "deep_distortion_map",
            a: ref_features.dim(),
            b: dist_features.dim(),
        });
    }
    let (h, w, c) = ref_features.dim();
    let (rows, cols) = patch_grid_dims(h, w, patch, stride)?;
    let normalized;
    let (fr, fd) = if normalize {
        normalized = (
            unit_normalize_channels(ref_features),
            unit_normalize_channels(dist_features),
        );
        (&normalized.0, &normalized.1)
    } else {
        (ref_features, dist_features)
    };
    let area = (patch * patch) as f64;
    let mut values = Array2::zeros((rows, cols));
    for r in 0..rows {
        for col in 0..cols {
            let (y0, x0) = (r * stride, col * stride);
            let mut acc = 0.0;
            for y in y0..y0 + patch {
                for x in x0..x0 + patch {
                    for ch in 0..c {
                        let d = fr[(y, x, ch)] - fd[(y, x, ch)];
                        acc += d * d;
                    }
                }
            }
            values[(r, col)] = acc / area;
        }
    }
    Ok(DistortionMap {
        kind: MapKind::Deep,
        stage: Some(stage),
        values,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn plane(values: Array3<f64>) -> ImagePlane {
        ImagePlane::new(values).unwrap()
    }

    fn noise_pair(h: usize, w: usize, c: usize, seed: u64) -> (ImagePlane, ImagePlane) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = Array3::from_shape_fn((h, w, c), |_| rng.random::<f64>());
        let b = Array3::from_shape_fn((h, w, c), |_| rng.random::<f64>());
        (plane(a), plane(b))
    }

    /// Test pattern shared with the scikit-image run that produced the
    /// golden SSIM value below.
    fn pattern_pair(h: usize, w: usize) -> (ImagePlane, ImagePlane) {
        let reference = Array3::from_shape_fn((h, w, 1), |(i, j, _)| {
            0.5 + 0.3 * (0.37 * i as f64).sin() * (0.23 * j as f64).cos()
        });
        let distorted = Array3::from_shape_fn((h, w, 1), |(i, j, _)| {
            (reference[(i, j, 0)] + 0.08 * (1.7 * i as f64 + 0.9 * j as f64).sin())
                .clamp(0.0, 1.0)
        });
        (plane(reference), plane(distorted))
    }

    #[test]
    fn psnr_map_zero_for_identical_images() {
        let (a, _) = noise_pair(8, 8, 3, 1);
        let map = psnr_error_map(&a, &a).unwrap();
        assert!(map.values.iter().all(|&v| v == 0.0));
        assert_eq!(map.kind, MapKind::Psnr);
    }

    #[test]
    fn psnr_map_uniform_single_channel_difference() {
        let a = plane(Array3::from_elem((4, 4, 3), 0.5));
        let mut shifted = a.values().clone();
        shifted.slice_mut(ndarray::s![.., .., 0]).fill(0.5 + 1.0 / 255.0);
        let b = plane(shifted);
        let map = psnr_error_map(&a, &b).unwrap();
        let expected = (1.0 / 255.0f64).powi(2) / 3.0;
        for &v in map.values.iter() {
            assert!((v - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn psnr_map_mean_is_mse() {
        let (a, b) = noise_pair(13, 9, 3, 2);
        let map = psnr_error_map(&a, &b).unwrap();
        // independent scalar MSE
        let mut acc = 0.0;
        for ((y, x, c), &v) in a.values().indexed_iter() {
            let d = v - b.values()[(y, x, c)];
            acc += d * d;
        }
        let mse = acc / (13.0 * 9.0 * 3.0);
        assert!((map.mean() - mse).abs() < 1e-15);
    }

    #[test]
    fn psnr_map_rejects_shape_mismatch() {
        let (a, _) = noise_pair(8, 8, 3, 3);
        let (b, _) = noise_pair(8, 9, 3, 3);
        assert!(matches!(
            psnr_error_map(&a, &b),
            Err(MapError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn ssim_map_ones_for_identical_images() {
        let (a, _) = noise_pair(16, 16, 1, 4);
        let map = ssim_local_map(&a, &a).unwrap();
        assert_eq!(map.values.dim(), (6, 6));
        for &v in map.values.iter() {
            assert!((v - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn ssim_constant_images_follow_closed_form() {
        let a = plane(Array3::from_elem((12, 12, 1), 0.25));
        let b = plane(Array3::from_elem((12, 12, 1), 0.75));
        let map = ssim_local_map(&a, &b).unwrap();
        let expected = (2.0 * 0.25 * 0.75 + SSIM_C1) / (0.25f64.powi(2) + 0.75f64.powi(2) + SSIM_C1);
        for &v in map.values.iter() {
            assert!((v - expected).abs() < 1e-12, "{v} vs {expected}");
        }
    }

    #[test]
    fn ssim_mean_matches_skimage_golden_value() {
        // golden value from scikit-image structural_similarity with
        // gaussian_weights=True, sigma=1.5, use_sample_covariance=False,
        // data_range=1.0 on the same pattern
        let (a, b) = pattern_pair(48, 64);
        let map = ssim_local_map(&a, &b).unwrap();
        assert!((map.mean() - 0.8159368484774653).abs() < 1e-6);
    }

    #[test]
    fn ssim_rejects_small_images() {
        let (a, _) = noise_pair(10, 32, 1, 5);
        assert!(matches!(
            ssim_local_map(&a, &a),
            Err(MapError::TooSmall { .. })
        ));
    }

    #[test]
    fn deep_map_zero_for_identical_features() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let f = Array3::from_shape_fn((14, 14, 8), |_| rng.random::<f64>());
        let map = deep_distortion_map(&f, &f, 3, 7, 7, true).unwrap();
        assert!(map.values.iter().all(|&v| v == 0.0));
        assert_eq!(map.stage, Some(3));
    }

    #[test]
    fn deep_map_single_site_example() {
        let r = Array3::zeros((1, 1, 2));
        let mut d = Array3::zeros((1, 1, 2));
        d[(0, 0, 0)] = 1.0;
        d[(0, 0, 1)] = 1.0;
        let map = deep_distortion_map(&r, &d, 1, 1, 1, false).unwrap();
        assert_eq!(map.values[(0, 0)], 2.0);
    }

    #[test]
    fn deep_map_matches_triple_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let r = Array3::from_shape_fn((14, 14, 8), |_| rng.random::<f64>());
        let d = Array3::from_shape_fn((14, 14, 8), |_| rng.random::<f64>());
        let map = deep_distortion_map(&r, &d, 2, 7, 7, false).unwrap();
        assert_eq!(map.values.dim(), (2, 2));
        for tr in 0..2 {
            for tc in 0..2 {
                let mut acc = 0.0;
                for y in 0..7 {
                    for x in 0..7 {
                        for c in 0..8 {
                            let dv = r[(tr * 7 + y, tc * 7 + x, c)] - d[(tr * 7 + y, tc * 7 + x, c)];
                            acc += dv * dv;
                        }
                    }
                }
                assert!((map.values[(tr, tc)] - acc / 49.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn deep_map_is_symmetric_in_its_arguments() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let r = Array3::from_shape_fn((9, 9, 4), |_| rng.random::<f64>());
        let d = Array3::from_shape_fn((9, 9, 4), |_| rng.random::<f64>());
        for normalize in [false, true] {
            let ab = deep_distortion_map(&r, &d, 1, 7, 1, normalize).unwrap();
            let ba = deep_distortion_map(&d, &r, 1, 7, 1, normalize).unwrap();
            assert_eq!(ab.values, ba.values);
        }
    }

    #[test]
    fn unit_normalization_produces_unit_vectors() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let f = Array3::from_shape_fn((5, 5, 6), |_| rng.random::<f64>() - 0.5);
        let n = unit_normalize_channels(&f);
        for y in 0..5 {
            for x in 0..5 {
                let norm: f64 = (0..6).map(|c| n[(y, x, c)] * n[(y, x, c)]).sum();
                assert!((norm.sqrt() - 1.0).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn patch_grid_examples() {
        assert_eq!(
            extract_patch_grid(14, 14, 7, 7).unwrap(),
            vec![(0, 0), (0, 7), (7, 0), (7, 7)]
        );
        assert_eq!(extract_patch_grid(7, 7, 7, 1).unwrap(), vec![(0, 0)]);
        let tiles = extract_patch_grid(20, 13, 7, 7).unwrap();
        assert_eq!(tiles, vec![(0, 0), (7, 0)]);
        assert_eq!(patch_grid_dims(20, 13, 7, 7).unwrap(), (2, 1));
        assert!(extract_patch_grid(6, 20, 7, 7).is_err());
    }

    #[test]
    fn maps_shift_by_one_tile_under_whole_stride_translation() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let base_r = Array3::from_shape_fn((21, 21, 4), |_| rng.random::<f64>());
        let base_d = Array3::from_shape_fn((21, 21, 4), |_| rng.random::<f64>());
        let shift = |t: &Array3<f64>| t.slice(ndarray::s![7.., 7.., ..]).to_owned();
        let full = deep_distortion_map(&base_r, &base_d, 1, 7, 7, false).unwrap();
        let moved =
            deep_distortion_map(&shift(&base_r), &shift(&base_d), 1, 7, 7, false).unwrap();
        for r in 0..2 {
            for c in 0..2 {
                assert!((full.values[(r + 1, c + 1)] - moved.values[(r, c)]).abs() < 1e-15);
            }
        }
    }
}
