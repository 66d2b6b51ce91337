//! Quality score aggregation: attention-weighted pooling of distortion maps
//! for the traditional metrics and the per-stage deep metric, plus the
//! end-to-end pair scorer.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backbone::{Backbone, BackboneError, FeatureStack, STAGES};
use crate::image::ImagePlane;
use crate::maps::{
    deep_distortion_map, extract_patch_grid, psnr_error_map, ssim_local_map, DistortionMap,
    MapError,
};
use crate::mic::MicOptions;
use crate::smic::{
    attention_map_for_stage, per_patch_seed, sample_projection_bank, smic_patch, AttentionMap,
    FeaturePatchPair, ProjectionMode, SmicError,
};

/// dB ceiling reported when the weighted MSE underflows.
const PSNR_DB_CAP: f64 = 100.0;
const PSNR_MSE_FLOOR: f64 = 1e-10;

#[derive(Debug, Error)]
pub enum ScoreError {
    #[error("reference and distorted images differ in shape")]
    ImageShapeMismatch,
    #[error("stage range must satisfy 1 <= m <= n <= 5, got m={m}, n={n}")]
    InvalidStageRange { m: usize, n: usize },
    #[error("attention maps must cover exactly stages {m}..={n}")]
    AttentionCoverage { m: usize, n: usize },
    #[error("missing distortion map for stage {stage}")]
    MissingStage { stage: usize },
    #[error("attention and distortion grids disagree at stage {stage} ({a:?} vs {b:?})")]
    GridMismatch {
        stage: usize,
        a: (usize, usize),
        b: (usize, usize),
    },
    #[error("resize target must be at least 1x1")]
    EmptyResizeTarget,
    #[error("backbone: {0}")]
    Backbone(#[from] BackboneError),
    #[error("distortion map: {0}")]
    Map(#[from] MapError),
    #[error("attention: {0}")]
    Smic(#[from] SmicError),
}

/// Contiguous range of backbone stages used for attention, 1-based.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageRange {
    m: usize,
    n: usize,
}

impl StageRange {
    pub fn new(m: usize, n: usize) -> Result<Self, ScoreError> {
        if m < 1 || n > STAGES || m > n {
            return Err(ScoreError::InvalidStageRange { m, n });
        }
        Ok(Self { m, n })
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn len(&self) -> usize {
        self.n - self.m + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn contains(&self, stage: usize) -> bool {
        (self.m..=self.n).contains(&stage)
    }

    pub fn iter(&self) -> impl Iterator<Item = usize> {
        self.m..=self.n
    }
}

impl Default for StageRange {
    fn default() -> Self {
        Self { m: 3, n: 4 }
    }
}

impl FromStr for StageRange {
    type Err = String;

    /// Parses "m:n", e.g. "3:4".
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (m, n) = s
            .split_once(':')
            .ok_or_else(|| format!("expected m:n, got `{s}`"))?;
        let m = m.trim().parse::<usize>().map_err(|e| e.to_string())?;
        let n = n.trim().parse::<usize>().map_err(|e| e.to_string())?;
        StageRange::new(m, n).map_err(|e| e.to_string())
    }
}

impl fmt::Display for StageRange {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.m, self.n)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetricKind {
    Psnr,
    Ssim,
    #[serde(rename = "lpips")]
    LpipsStyle,
}

impl MetricKind {
    pub fn is_traditional(&self) -> bool {
        matches!(self, MetricKind::Psnr | MetricKind::Ssim)
    }

    /// Whether larger raw scores mean better quality (the PSNR score value
    /// is a weighted MSE; the paired dB transform flips it).
    pub fn higher_is_better(&self) -> bool {
        matches!(self, MetricKind::Ssim)
    }
}

impl MetricKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            MetricKind::Psnr => "psnr",
            MetricKind::Ssim => "ssim",
            MetricKind::LpipsStyle => "lpips",
        }
    }
}

impl fmt::Display for MetricKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MetricKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "psnr" => Ok(MetricKind::Psnr),
            "ssim" => Ok(MetricKind::Ssim),
            "lpips" | "lpips_style" => Ok(MetricKind::LpipsStyle),
            other => Err(format!("unknown metric `{other}` (psnr, ssim, lpips)")),
        }
    }
}

/// Scorer configuration. Defaults follow the reference operating point:
/// 7x7 patches, K=32 slices, stages 3:4, shared projections, attention
/// stride 1 for the traditional metrics and 7 for the deep one.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreConfig {
    pub metric: MetricKind,
    pub smic: bool,
    pub seed: u64,
    pub k: usize,
    pub stages: StageRange,
    pub projection: ProjectionMode,
    pub mic: MicOptions,
    pub patch: usize,
    pub traditional_attention_stride: usize,
    pub deep_stride: usize,
    pub normalize_deep_features: bool,
    /// Debug switch: replace every attention value with exactly 1.
    pub force_uniform_attention: bool,
    /// Draw a fresh projection bank per patch instead of one per stage.
    pub resample_bank_per_patch: bool,
}

impl Default for ScoreConfig {
    fn default() -> Self {
        Self {
            metric: MetricKind::Psnr,
            smic: true,
            seed: 0,
            k: 32,
            stages: StageRange::default(),
            projection: ProjectionMode::Shared,
            mic: MicOptions::default(),
            patch: 7,
            traditional_attention_stride: 1,
            deep_stride: 7,
            normalize_deep_features: true,
            force_uniform_attention: false,
            resample_bank_per_patch: false,
        }
    }
}

/// A scored pair. For PSNR `value` is the (attention-weighted) MSE and `db`
/// carries the matching dB transform; for SSIM and the deep metric `value`
/// is the score itself.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QualityScore {
    pub metric: MetricKind,
    pub value: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub db: Option<f64>,
    pub smic: bool,
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub per_stage_terms: Option<BTreeMap<usize, f64>>,
}

impl QualityScore {
    /// The orientation-normalized prediction used for rank correlation:
    /// dB for PSNR, the raw value for everything else.
    pub fn prediction(&self) -> f64 {
        match self.metric {
            MetricKind::Psnr => self.db.expect("psnr scores always carry db"),
            _ => self.value,
        }
    }
}

fn psnr_db(mse: f64) -> f64 {
    if mse < PSNR_MSE_FLOOR {
        PSNR_DB_CAP
    } else {
        10.0 * (1.0 / mse).log10()
    }
}

/// Corner-aligned bilinear resize. Exactly preserves constants and the
/// identity target size.
pub fn resize_bilinear(
    map: &Array2<f64>,
    target_h: usize,
    target_w: usize,
) -> Result<Array2<f64>, ScoreError> {
    let (h, w) = map.dim();
    if target_h == 0 || target_w == 0 {
        return Err(ScoreError::EmptyResizeTarget);
    }
    let coord = |t: usize, target: usize, source: usize| -> f64 {
        if target == 1 {
            0.0
        } else {
            t as f64 * (source - 1) as f64 / (target - 1) as f64
        }
    };
    let lerp = |a: f64, b: f64, t: f64| a + t * (b - a);
    let out = Array2::from_shape_fn((target_h, target_w), |(ty, tx)| {
        let sy = coord(ty, target_h, h);
        let sx = coord(tx, target_w, w);
        let y0 = sy.floor() as usize;
        let x0 = sx.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let x1 = (x0 + 1).min(w - 1);
        let (fy, fx) = (sy - y0 as f64, sx - x0 as f64);
        lerp(
            lerp(map[(y0, x0)], map[(y0, x1)], fx),
            lerp(map[(y1, x0)], map[(y1, x1)], fx),
            fy,
        )
    });
    Ok(out)
}

fn check_attention_coverage(
    attentions: &[AttentionMap],
    range: StageRange,
) -> Result<(), ScoreError> {
    let expected: Vec<usize> = range.iter().collect();
    let actual: Vec<usize> = attentions.iter().map(|a| a.stage).collect();
    if expected != actual {
        return Err(ScoreError::AttentionCoverage {
            m: range.m(),
            n: range.n(),
        });
    }
    Ok(())
}

/// Aggregate a traditional metric: resize each stage attention map to the
/// distortion map's dims, average them, multiply element-wise and take the
/// plain mean. The attention average is deliberately not re-normalized by
/// the weight sum.
pub fn score_traditional(
    metric: MetricKind,
    distortion: &DistortionMap,
    attentions: &[AttentionMap],
    range: StageRange,
) -> Result<QualityScore, ScoreError> {
    assert!(
        metric.is_traditional(),
        "score_traditional takes psnr or ssim"
    );
    check_attention_coverage(attentions, range)?;
    let (h, w) = distortion.values.dim();
    let mut averaged = Array2::<f64>::zeros((h, w));
    for attention in attentions {
        let resized = resize_bilinear(&attention.values, h, w)?;
        averaged += &resized;
    }
    averaged /= range.len() as f64;

    let weighted = &averaged * &distortion.values;
    let value = weighted.mean().unwrap_or(0.0);
    let per_stage_terms = Some(
        attentions
            .iter()
            .map(|a| (a.stage, a.values.mean().unwrap_or(0.0)))
            .collect(),
    );
    Ok(QualityScore {
        metric,
        value,
        db: (metric == MetricKind::Psnr).then(|| psnr_db(value)),
        smic: true,
        seed: 0,
        per_stage_terms,
    })
}

/// Aggregate the deep metric: attention-weighted map means averaged over
/// the stage range, plus the plain map means of the remaining stages.
pub fn score_deep(
    metric: MetricKind,
    per_stage_distortion: &[DistortionMap],
    attentions: &[AttentionMap],
    range: StageRange,
) -> Result<QualityScore, ScoreError> {
    assert!(
        metric == MetricKind::LpipsStyle,
        "score_deep takes the deep metric"
    );
    check_attention_coverage(attentions, range)?;
    let mut by_stage = BTreeMap::new();
    for map in per_stage_distortion {
        if let Some(stage) = map.stage {
            by_stage.insert(stage, map);
        }
    }
    for stage in 1..=STAGES {
        if !by_stage.contains_key(&stage) {
            return Err(ScoreError::MissingStage { stage });
        }
    }

    let mut terms = BTreeMap::new();
    let mut weighted_sum = 0.0;
    for attention in attentions {
        let map = by_stage[&attention.stage];
        if attention.values.dim() != map.values.dim() {
            return Err(ScoreError::GridMismatch {
                stage: attention.stage,
                a: attention.values.dim(),
                b: map.values.dim(),
            });
        }
        let term = (&attention.values * &map.values).mean().unwrap_or(0.0);
        terms.insert(attention.stage, term);
        weighted_sum += term;
    }
    let mut total = weighted_sum / range.len() as f64;
    for (&stage, map) in &by_stage {
        if !range.contains(stage) {
            let mean = map.mean();
            terms.insert(stage, mean);
            total += mean;
        }
    }
    Ok(QualityScore {
        metric,
        value: total,
        db: None,
        smic: true,
        seed: 0,
        per_stage_terms: Some(terms),
    })
}

/// Attention maps for the configured stage range, one seeded bank per
/// stage (or per patch when resampling is enabled).
pub fn attention_maps(
    backbone_ref: &FeatureStack,
    backbone_dist: &FeatureStack,
    config: &ScoreConfig,
    stride: usize,
) -> Result<Vec<AttentionMap>, ScoreError> {
    let mut maps = Vec::with_capacity(config.stages.len());
    for stage in config.stages.iter() {
        let fr = backbone_ref.stage(stage);
        let fd = backbone_dist.stage(stage);
        let channels = fr.dim().2;
        if config.force_uniform_attention {
            let (h, w, _) = fr.dim();
            if h < config.patch || w < config.patch {
                return Err(ScoreError::Smic(SmicError::StageTooSmall {
                    stage,
                    h,
                    w,
                    patch: config.patch,
                }));
            }
            let rows = (h - config.patch) / stride + 1;
            let cols = (w - config.patch) / stride + 1;
            maps.push(AttentionMap {
                stage,
                values: Array2::from_elem((rows, cols), 1.0),
            });
            continue;
        }
        if config.resample_bank_per_patch {
            maps.push(resampled_attention(fr, fd, stage, config, stride)?);
        } else {
            let bank =
                sample_projection_bank(channels, config.k, config.seed, config.projection);
            maps.push(attention_map_for_stage(
                fr,
                fd,
                &bank,
                stage,
                config.patch,
                stride,
                &config.mic,
            )?);
        }
    }
    Ok(maps)
}

/// Per-patch bank variant: one fresh bank per tile, seeded from the global
/// seed, the stage and the tile index.
fn resampled_attention(
    fr: &ndarray::Array3<f64>,
    fd: &ndarray::Array3<f64>,
    stage: usize,
    config: &ScoreConfig,
    stride: usize,
) -> Result<AttentionMap, ScoreError> {
    let (h, w, channels) = fr.dim();
    if h < config.patch || w < config.patch {
        return Err(ScoreError::Smic(SmicError::StageTooSmall {
            stage,
            h,
            w,
            patch: config.patch,
        }));
    }
    let tiles = extract_patch_grid(h, w, config.patch, stride)?;
    let rows = (h - config.patch) / stride + 1;
    let cols = (w - config.patch) / stride + 1;
    let mut values = Vec::with_capacity(tiles.len());
    for (index, &(y0, x0)) in tiles.iter().enumerate() {
        let slice = |t: &ndarray::Array3<f64>| {
            t.slice(ndarray::s![
                y0..y0 + config.patch,
                x0..x0 + config.patch,
                ..
            ])
            .to_owned()
        };
        let pair = FeaturePatchPair::new(slice(fr), slice(fd), stage)?;
        let bank = sample_projection_bank(
            channels,
            config.k,
            per_patch_seed(config.seed, stage, index),
            config.projection,
        );
        values.push(1.0 - smic_patch(&pair, &bank, &config.mic)?);
    }
    Ok(AttentionMap {
        stage,
        values: Array2::from_shape_vec((rows, cols), values).expect("tile grid dims"),
    })
}

fn deep_stage_maps(
    features_ref: &FeatureStack,
    features_dist: &FeatureStack,
    config: &ScoreConfig,
) -> Result<Vec<DistortionMap>, ScoreError> {
    let mut maps = Vec::with_capacity(STAGES);
    for stage in 1..=STAGES {
        maps.push(deep_distortion_map(
            features_ref.stage(stage),
            features_dist.stage(stage),
            stage,
            config.patch,
            config.deep_stride,
            config.normalize_deep_features,
        )?);
    }
    Ok(maps)
}

/// Score one image pair end to end: extract features when needed, build
/// distortion and attention maps, aggregate. With `smic` off this returns
/// the plain baseline metric.
pub fn score_pair(
    backbone: &Backbone,
    config: &ScoreConfig,
    reference: &ImagePlane,
    distorted: &ImagePlane,
) -> Result<QualityScore, ScoreError> {
    if reference.values().dim() != distorted.values().dim() {
        return Err(ScoreError::ImageShapeMismatch);
    }

    let score = match (config.metric, config.smic) {
        (MetricKind::Psnr, false) => {
            let value = psnr_error_map(reference, distorted)?.mean();
            QualityScore {
                metric: MetricKind::Psnr,
                value,
                db: Some(psnr_db(value)),
                smic: false,
                seed: config.seed,
                per_stage_terms: None,
            }
        }
        (MetricKind::Ssim, false) => QualityScore {
            metric: MetricKind::Ssim,
            value: ssim_local_map(reference, distorted)?.mean(),
            db: None,
            smic: false,
            seed: config.seed,
            per_stage_terms: None,
        },
        (MetricKind::LpipsStyle, false) => {
            let fr = backbone.extract(reference)?;
            let fd = backbone.extract(distorted)?;
            let maps = deep_stage_maps(&fr, &fd, config)?;
            let mut terms = BTreeMap::new();
            let mut in_range = 0.0;
            let mut out_of_range = 0.0;
            for map in &maps {
                let stage = map.stage.expect("deep maps carry stages");
                let mean = map.mean();
                terms.insert(stage, mean);
                if config.stages.contains(stage) {
                    in_range += mean;
                } else {
                    out_of_range += mean;
                }
            }
            QualityScore {
                metric: MetricKind::LpipsStyle,
                value: in_range / config.stages.len() as f64 + out_of_range,
                db: None,
                smic: false,
                seed: config.seed,
                per_stage_terms: Some(terms),
            }
        }
        (metric, true) => {
            let fr = backbone.extract(reference)?;
            let fd = backbone.extract(distorted)?;
            if metric.is_traditional() {
                let stride = config.traditional_attention_stride;
                let attentions = attention_maps(&fr, &fd, config, stride)?;
                let distortion = match metric {
                    MetricKind::Psnr => psnr_error_map(reference, distorted)?,
                    _ => ssim_local_map(reference, distorted)?,
                };
                let mut score =
                    score_traditional(metric, &distortion, &attentions, config.stages)?;
                score.seed = config.seed;
                score
            } else {
                let attentions = attention_maps(&fr, &fd, config, config.deep_stride)?;
                let maps = deep_stage_maps(&fr, &fd, config)?;
                let mut score = score_deep(metric, &maps, &attentions, config.stages)?;
                score.seed = config.seed;
                score
            }
        }
    };
    Ok(score)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::synthetic_backbone;
    use crate::maps::MapKind;
    use ndarray::{array, Array2, Array3};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn test_image(h: usize, w: usize, seed: u64) -> ImagePlane {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ImagePlane::new(Array3::from_shape_fn((h, w, 3), |_| rng.random::<f64>())).unwrap()
    }

    fn small_config(metric: MetricKind) -> ScoreConfig {
        ScoreConfig {
            metric,
            k: 4,
            traditional_attention_stride: 7,
            ..ScoreConfig::default()
        }
    }

    fn plan() -> [usize; 5] {
        [4, 8, 16, 32, 32]
    }

    #[test]
    fn resize_identity_returns_input() {
        let m = array![[0.0, 1.0], [2.0, 3.0]];
        let out = resize_bilinear(&m, 2, 2).unwrap();
        assert_eq!(out, m);
    }

    #[test]
    fn resize_preserves_constants_exactly() {
        let m = Array2::from_elem((3, 5), 0.7);
        let out = resize_bilinear(&m, 9, 2).unwrap();
        assert!(out.iter().all(|&v| v == 0.7));
    }

    #[test]
    fn resize_interpolates_midpoints() {
        let m = array![[0.0, 1.0], [0.0, 1.0]];
        let out = resize_bilinear(&m, 2, 3).unwrap();
        assert_eq!(out.column(1).to_vec(), vec![0.5, 0.5]);
    }

    #[test]
    fn resize_rejects_empty_target() {
        let m = Array2::zeros((2, 2));
        assert!(matches!(
            resize_bilinear(&m, 0, 3),
            Err(ScoreError::EmptyResizeTarget)
        ));
    }

    #[test]
    fn traditional_uniform_attention_recovers_plain_mean() {
        let distortion = DistortionMap {
            kind: MapKind::Psnr,
            stage: None,
            values: array![[0.1, 0.4], [0.2, 0.3]],
        };
        let attentions = vec![
            AttentionMap {
                stage: 3,
                values: Array2::from_elem((2, 2), 1.0),
            },
            AttentionMap {
                stage: 4,
                values: Array2::from_elem((1, 1), 1.0),
            },
        ];
        let score = score_traditional(
            MetricKind::Psnr,
            &distortion,
            &attentions,
            StageRange::new(3, 4).unwrap(),
        )
        .unwrap();
        assert_eq!(score.value, distortion.mean());
    }

    #[test]
    fn traditional_zero_attention_caps_db() {
        let distortion = DistortionMap {
            kind: MapKind::Psnr,
            stage: None,
            values: array![[0.1, 0.4]],
        };
        let attentions = vec![AttentionMap {
            stage: 3,
            values: Array2::zeros((1, 2)),
        }];
        let score = score_traditional(
            MetricKind::Psnr,
            &distortion,
            &attentions,
            StageRange::new(3, 3).unwrap(),
        )
        .unwrap();
        assert_eq!(score.value, 0.0);
        assert_eq!(score.db, Some(100.0));
    }

    #[test]
    fn traditional_weighted_mean_example() {
        let distortion = DistortionMap {
            kind: MapKind::Psnr,
            stage: None,
            values: array![[1.0, 3.0]],
        };
        let attentions = vec![AttentionMap {
            stage: 3,
            values: array![[1.0, 0.5]],
        }];
        let score = score_traditional(
            MetricKind::Psnr,
            &distortion,
            &attentions,
            StageRange::new(3, 3).unwrap(),
        )
        .unwrap();
        assert_eq!(score.value, 1.25);
    }

    #[test]
    fn traditional_rejects_wrong_coverage() {
        let distortion = DistortionMap {
            kind: MapKind::Ssim,
            stage: None,
            values: array![[1.0]],
        };
        let attentions = vec![AttentionMap {
            stage: 2,
            values: array![[1.0]],
        }];
        assert!(matches!(
            score_traditional(
                MetricKind::Ssim,
                &distortion,
                &attentions,
                StageRange::new(3, 3).unwrap()
            ),
            Err(ScoreError::AttentionCoverage { m: 3, n: 3 })
        ));
    }

    fn deep_maps_from(values: [f64; 5], dims: (usize, usize)) -> Vec<DistortionMap> {
        values
            .iter()
            .enumerate()
            .map(|(i, &v)| DistortionMap {
                kind: MapKind::Deep,
                stage: Some(i + 1),
                values: Array2::from_elem(dims, v),
            })
            .collect()
    }

    #[test]
    fn deep_score_zero_for_zero_maps() {
        let maps = deep_maps_from([0.0; 5], (2, 2));
        let attentions: Vec<AttentionMap> = [3, 4]
            .iter()
            .map(|&stage| AttentionMap {
                stage,
                values: Array2::from_elem((2, 2), 0.7),
            })
            .collect();
        let score = score_deep(
            MetricKind::LpipsStyle,
            &maps,
            &attentions,
            StageRange::default(),
        )
        .unwrap();
        assert_eq!(score.value, 0.0);
    }

    #[test]
    fn deep_score_uniform_attention_degenerates() {
        let maps = deep_maps_from([0.1, 0.2, 0.3, 0.4, 0.5], (2, 2));
        let attentions: Vec<AttentionMap> = [3, 4]
            .iter()
            .map(|&stage| AttentionMap {
                stage,
                values: Array2::from_elem((2, 2), 1.0),
            })
            .collect();
        let score = score_deep(
            MetricKind::LpipsStyle,
            &maps,
            &attentions,
            StageRange::default(),
        )
        .unwrap();
        let expected = (0.3 + 0.4) / 2.0 + 0.1 + 0.2 + 0.5;
        assert!((score.value - expected).abs() < 1e-15);
    }

    #[test]
    fn deep_score_single_stage_recomposition() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let backbone = synthetic_backbone(0, plan());
        let fr = backbone.extract(&test_image(112, 112, 10)).unwrap();
        let fd = backbone.extract(&test_image(112, 112, 11)).unwrap();
        let _ = &mut rng;
        let config = ScoreConfig {
            stages: StageRange::new(3, 3).unwrap(),
            ..small_config(MetricKind::LpipsStyle)
        };
        let maps = deep_stage_maps(&fr, &fd, &config).unwrap();
        let attentions = attention_maps(&fr, &fd, &config, config.deep_stride).unwrap();
        let score = score_deep(MetricKind::LpipsStyle, &maps, &attentions, config.stages).unwrap();
        let hand = (&attentions[0].values * &maps[2].values).mean().unwrap()
            + maps[0].mean()
            + maps[1].mean()
            + maps[3].mean()
            + maps[4].mean();
        assert!((score.value - hand).abs() < 1e-12);
    }

    #[test]
    fn deep_score_reports_missing_stage() {
        let maps = deep_maps_from([0.1, 0.2, 0.3, 0.4, 0.5], (1, 1));
        let partial: Vec<DistortionMap> =
            maps.into_iter().filter(|m| m.stage != Some(2)).collect();
        let attentions: Vec<AttentionMap> = [3, 4]
            .iter()
            .map(|&stage| AttentionMap {
                stage,
                values: Array2::from_elem((1, 1), 1.0),
            })
            .collect();
        assert!(matches!(
            score_deep(
                MetricKind::LpipsStyle,
                &partial,
                &attentions,
                StageRange::default()
            ),
            Err(ScoreError::MissingStage { stage: 2 })
        ));
    }

    #[test]
    fn identical_pair_scores() {
        let backbone = synthetic_backbone(0, plan());
        let img = test_image(112, 112, 20);
        let ssim_off = score_pair(
            &backbone,
            &ScoreConfig {
                smic: false,
                ..small_config(MetricKind::Ssim)
            },
            &img,
            &img,
        )
        .unwrap();
        assert_eq!(ssim_off.value, 1.0);

        let lpips_on = score_pair(&backbone, &small_config(MetricKind::LpipsStyle), &img, &img)
            .unwrap();
        assert_eq!(lpips_on.value, 0.0);

        let psnr_off = score_pair(
            &backbone,
            &ScoreConfig {
                smic: false,
                ..small_config(MetricKind::Psnr)
            },
            &img,
            &img,
        )
        .unwrap();
        assert_eq!(psnr_off.value, 0.0);
        assert_eq!(psnr_off.db, Some(100.0));
    }

    #[test]
    fn forced_uniform_attention_recovers_baselines_exactly() {
        let backbone = synthetic_backbone(1, plan());
        let (a, b) = (test_image(112, 112, 21), test_image(112, 112, 22));
        for metric in [MetricKind::Psnr, MetricKind::Ssim, MetricKind::LpipsStyle] {
            let baseline = score_pair(
                &backbone,
                &ScoreConfig {
                    smic: false,
                    ..small_config(metric)
                },
                &a,
                &b,
            )
            .unwrap();
            let forced = score_pair(
                &backbone,
                &ScoreConfig {
                    force_uniform_attention: true,
                    ..small_config(metric)
                },
                &a,
                &b,
            )
            .unwrap();
            assert_eq!(
                baseline.value, forced.value,
                "baseline recovery failed for {metric}"
            );
            assert_eq!(baseline.db, forced.db);
        }
    }

    #[test]
    fn score_pair_is_symmetric_for_symmetric_metrics() {
        let backbone = synthetic_backbone(2, plan());
        let (a, b) = (test_image(112, 112, 23), test_image(112, 112, 24));
        for metric in [MetricKind::Psnr, MetricKind::LpipsStyle] {
            let config = small_config(metric);
            let ab = score_pair(&backbone, &config, &a, &b).unwrap();
            let ba = score_pair(&backbone, &config, &b, &a).unwrap();
            assert_eq!(ab.value, ba.value, "asymmetry for {metric}");
        }
    }

    #[test]
    fn db_ranking_reverses_mse_ranking() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mses: Vec<f64> = (0..32).map(|_| rng.random::<f64>() * 0.2 + 1e-6).collect();
        let dbs: Vec<f64> = mses.iter().map(|&m| psnr_db(m)).collect();
        for i in 0..mses.len() {
            for j in 0..mses.len() {
                if mses[i] < mses[j] {
                    assert!(dbs[i] > dbs[j]);
                }
            }
        }
    }

    #[test]
    fn score_pair_rejects_shape_mismatch() {
        let backbone = synthetic_backbone(0, plan());
        let a = test_image(112, 112, 25);
        let b = test_image(112, 96, 26);
        assert!(matches!(
            score_pair(&backbone, &small_config(MetricKind::Psnr), &a, &b),
            Err(ScoreError::ImageShapeMismatch)
        ));
    }

    #[test]
    fn stage_range_parsing() {
        let r: StageRange = "3:4".parse().unwrap();
        assert_eq!((r.m(), r.n()), (3, 4));
        assert!("4:3".parse::<StageRange>().is_err());
        assert!("0:2".parse::<StageRange>().is_err());
        assert!("3".parse::<StageRange>().is_err());
        assert_eq!(r.to_string(), "3:4");
    }

    #[test]
    fn metric_kind_round_trips() {
        for (s, m) in [
            ("psnr", MetricKind::Psnr),
            ("ssim", MetricKind::Ssim),
            ("lpips", MetricKind::LpipsStyle),
        ] {
            assert_eq!(s.parse::<MetricKind>().unwrap(), m);
            assert_eq!(m.to_string(), s);
        }
        assert!("vmaf".parse::<MetricKind>().is_err());
    }

    #[test]
    fn resampled_banks_change_the_attention_map() {
        let backbone = synthetic_backbone(3, plan());
        let (a, b) = (test_image(64, 64, 27), test_image(64, 64, 28));
        let base = ScoreConfig {
            metric: MetricKind::Psnr,
            k: 2,
            traditional_attention_stride: 7,
            ..ScoreConfig::default()
        };
        let fr = backbone.extract(&a).unwrap();
        let fd = backbone.extract(&b).unwrap();
        let shared = attention_maps(&fr, &fd, &base, 7).unwrap();
        let resampled = attention_maps(
            &fr,
            &fd,
            &ScoreConfig {
                resample_bank_per_patch: true,
                ..base
            },
            7,
        )
        .unwrap();
        assert_eq!(shared[0].values.dim(), resampled[0].values.dim());
        assert_ne!(shared[0].values, resampled[0].values);
    }
}
