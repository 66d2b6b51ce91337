//! Multi-scale feature extraction: a pretrained convolutional backbone
//! loaded from an ONNX file with five named tap nodes, plus a seeded
//! synthetic backbone with the same tap contract for tests and CI.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use ndarray::Array3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Deserialize;
use thiserror::Error;
use tract_onnx::prelude::*;

use crate::image::ImagePlane;

pub const STAGES: usize = 5;
/// Full-pipeline floor on input dimensions.
pub const MIN_IMAGE_DIM: usize = 32;
/// Environment variable overriding the configured model path.
pub const MODEL_PATH_ENV: &str = "SMICQA_MODEL_PATH";

#[derive(Debug, Error)]
pub enum BackboneError {
    #[error("model file {path} not found")]
    MissingModelFile { path: PathBuf },
    #[error("failed to load model {path}: {message}")]
    Load { path: PathBuf, message: String },
    #[error("model has no tap node `{name}`")]
    MissingTap { name: String },
    #[error("shape probe failed at tap `{name}`: {message}")]
    ShapeProbe { name: String, message: String },
    #[error("inference failed at stage {stage}: {message}")]
    Inference { stage: usize, message: String },
    #[error("backbone config: {message}")]
    Config { message: String },
    #[error("image {h}x{w} is below the {min}x{min} extraction minimum")]
    ImageTooSmall { h: usize, w: usize, min: usize },
}

/// Per-channel input normalization applied before inference.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Preprocessing {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Preprocessing {
    pub fn identity() -> Self {
        Self {
            mean: [0.0; 3],
            std: [1.0; 3],
        }
    }
}

fn default_mean() -> [f64; 3] {
    [0.485, 0.456, 0.406]
}

fn default_std() -> [f64; 3] {
    [0.229, 0.224, 0.225]
}

/// Loader configuration: the ONNX file and the five tap node names, ordered
/// by depth. Defaults for mean/std follow the usual large-scale
/// classification preprocessing.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub model_path: PathBuf,
    pub stage_taps: [String; STAGES],
    #[serde(default = "default_mean")]
    pub input_mean: [f64; 3],
    #[serde(default = "default_std")]
    pub input_std: [f64; 3],
}

impl BackboneConfig {
    /// Parse a TOML config file. `SMICQA_MODEL_PATH`, when set, overrides
    /// the configured model path.
    pub fn from_toml_file(path: impl AsRef<Path>) -> Result<Self, BackboneError> {
        let text = std::fs::read_to_string(path.as_ref()).map_err(|e| BackboneError::Config {
            message: format!("cannot read {}: {e}", path.as_ref().display()),
        })?;
        let mut config: Self = toml::from_str(&text).map_err(|e| BackboneError::Config {
            message: e.to_string(),
        })?;
        config.apply_env_override();
        Ok(config)
    }

    pub fn apply_env_override(&mut self) {
        if let Ok(path) = std::env::var(MODEL_PATH_ENV) {
            if !path.is_empty() {
                self.model_path = PathBuf::from(path);
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BackboneSource {
    Pretrained,
    Synthetic,
}

/// Features at the five taps, each `(H_s, W_s, C_s)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStack {
    stages: Vec<Array3<f64>>,
    pub source: BackboneSource,
    pub preprocessing: Preprocessing,
}

impl FeatureStack {
    /// Stage tensor by 1-based stage index.
    pub fn stage(&self, s: usize) -> &Array3<f64> {
        assert!((1..=STAGES).contains(&s), "stage index {s} out of range");
        &self.stages[s - 1]
    }

    pub fn stages(&self) -> &[Array3<f64>] {
        &self.stages
    }
}

type Plan = TypedSimplePlan;

/// Inference handle over an ONNX graph with the five taps selected as
/// outputs. Plans are compiled per input size and cached; the handle is
/// immutable after load and safe to share across threads.
pub struct OnnxBackbone {
    base: InferenceModel,
    preprocessing: Preprocessing,
    tap_names: [String; STAGES],
    probe_channels: [usize; STAGES],
    cumulative_strides: [usize; STAGES],
    plans: Mutex<HashMap<(usize, usize), Arc<Plan>>>,
}

impl std::fmt::Debug for OnnxBackbone {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("OnnxBackbone")
            .field("taps", &self.tap_names)
            .field("channels", &self.probe_channels)
            .field("strides", &self.cumulative_strides)
            .finish()
    }
}

impl OnnxBackbone {
    /// Channel counts observed at the 224x224 probe.
    pub fn probe_channels(&self) -> [usize; STAGES] {
        self.probe_channels
    }

    /// Cumulative downsampling factor of each tap.
    pub fn cumulative_strides(&self) -> [usize; STAGES] {
        self.cumulative_strides
    }

    fn plan_for(&self, h: usize, w: usize) -> Result<Arc<Plan>, BackboneError> {
        let mut cache = self.plans.lock().expect("plan cache poisoned");
        if let Some(plan) = cache.get(&(h, w)) {
            return Ok(plan.clone());
        }
        let build = || -> TractResult<Arc<Plan>> {
            self.base
                .clone()
                .with_input_fact(
                    0,
                    InferenceFact::dt_shape(
                        f32::datum_type(),
                        tvec![1, 3, h, w],
                    ),
                )?
                .into_optimized()?
                .into_runnable()
        };
        let plan = build().map_err(|e| BackboneError::Inference {
            stage: 0,
            message: format!("planning {h}x{w}: {e}"),
        })?;
        cache.insert((h, w), plan.clone());
        Ok(plan)
    }

    fn run(&self, input: Tensor) -> Result<Vec<Array3<f64>>, BackboneError> {
        let shape = input.shape().to_vec();
        let plan = self.plan_for(shape[2], shape[3])?;
        let outputs = plan
            .run(tvec!(input.into()))
            .map_err(|e| BackboneError::Inference {
                stage: 0,
                message: e.to_string(),
            })?;
        let mut stages = Vec::with_capacity(STAGES);
        for (i, out) in outputs.iter().enumerate() {
            let view = out
                .to_plain_array_view::<f32>()
                .map_err(|e| BackboneError::Inference {
                    stage: i + 1,
                    message: e.to_string(),
                })?;
            let dims = view.shape().to_vec();
            if dims.len() != 4 || dims[0] != 1 {
                return Err(BackboneError::Inference {
                    stage: i + 1,
                    message: format!("unexpected output shape {dims:?}"),
                });
            }
            let (c, h, w) = (dims[1], dims[2], dims[3]);
            let mut tensor = Array3::zeros((h, w, c));
            for ch in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        let v = f64::from(view[[0, ch, y, x]]);
                        if !v.is_finite() {
                            return Err(BackboneError::Inference {
                                stage: i + 1,
                                message: "non-finite activation".into(),
                            });
                        }
                        tensor[(y, x, ch)] = v;
                    }
                }
            }
            stages.push(tensor);
        }
        Ok(stages)
    }
}

/// Load an ONNX backbone, resolve the five taps and validate them against a
/// 224x224 zero probe: channel counts must be non-decreasing through stage 4
/// and spatial dims must halve stage to stage.
pub fn load_backbone(config: &BackboneConfig) -> Result<Backbone, BackboneError> {
    let path = &config.model_path;
    if !path.exists() {
        return Err(BackboneError::MissingModelFile { path: path.clone() });
    }
    let mut model = tract_onnx::onnx()
        .model_for_path(path)
        .map_err(|e| BackboneError::Load {
            path: path.clone(),
            message: e.to_string(),
        })?;
    let mut outlets = Vec::with_capacity(STAGES);
    for name in &config.stage_taps {
        // resolve by node name first, then by outlet label
        let outlet = match model.node_by_name(name) {
            Ok(node) => OutletId::new(node.id, 0),
            Err(_) => *model
                .outlet_labels
                .iter()
                .find(|(_, label)| label.as_str() == name)
                .map(|(outlet, _)| outlet)
                .ok_or_else(|| BackboneError::MissingTap { name: name.clone() })?,
        };
        outlets.push(outlet);
    }
    model
        .select_output_outlets(&outlets)
        .map_err(|e| BackboneError::Load {
            path: path.clone(),
            message: e.to_string(),
        })?;

    let backbone = OnnxBackbone {
        base: model,
        preprocessing: Preprocessing {
            mean: config.input_mean,
            std: config.input_std,
        },
        tap_names: config.stage_taps.clone(),
        probe_channels: [0; STAGES],
        cumulative_strides: [0; STAGES],
        plans: Mutex::new(HashMap::new()),
    };

    const PROBE: usize = 224;
    let probe_input = Tensor::zero::<f32>(&[1, 3, PROBE, PROBE]).expect("probe tensor");
    let stages = backbone.run(probe_input).map_err(|e| match e {
        BackboneError::Inference { stage, message } => BackboneError::ShapeProbe {
            name: config
                .stage_taps
                .get(stage.saturating_sub(1))
                .cloned()
                .unwrap_or_default(),
            message,
        },
        other => other,
    })?;

    let mut probe_channels = [0usize; STAGES];
    let mut cumulative_strides = [0usize; STAGES];
    for (i, stage) in stages.iter().enumerate() {
        let (h, w, c) = stage.dim();
        let name = &config.stage_taps[i];
        if h == 0 || w == 0 || PROBE % h != 0 || PROBE % w != 0 || PROBE / h != PROBE / w {
            return Err(BackboneError::ShapeProbe {
                name: name.clone(),
                message: format!("probe output {h}x{w} is not an integer downsampling of {PROBE}"),
            });
        }
        probe_channels[i] = c;
        cumulative_strides[i] = PROBE / h;
        if i > 0 {
            if i < 4 && c < probe_channels[i - 1] {
                return Err(BackboneError::ShapeProbe {
                    name: name.clone(),
                    message: format!(
                        "channel count decreases ({} -> {c}) before stage 5",
                        probe_channels[i - 1]
                    ),
                });
            }
            if cumulative_strides[i] != 2 * cumulative_strides[i - 1] {
                return Err(BackboneError::ShapeProbe {
                    name: name.clone(),
                    message: format!(
                        "spatial dims do not halve: stride {} after {}",
                        cumulative_strides[i],
                        cumulative_strides[i - 1]
                    ),
                });
            }
        }
    }

    Ok(Backbone::Onnx(OnnxBackbone {
        probe_channels,
        cumulative_strides,
        ..backbone
    }))
}

struct ConvLayer {
    cin: usize,
    cout: usize,
    /// weights, [cout][cin][3][3] row-major
    w: Vec<f64>,
    b: Vec<f64>,
}

/// Seeded random conv+downsample stack with the pretrained tap contract:
/// stage s has `channel_plan[s-1]` channels at 1/2^(s-1) resolution.
#[derive(Debug)]
pub struct SyntheticBackbone {
    seed: u64,
    channel_plan: [usize; STAGES],
    layers: Vec<ConvLayer>,
}

impl std::fmt::Debug for ConvLayer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "ConvLayer({} -> {})", self.cin, self.cout)
    }
}

pub fn synthetic_backbone(seed: u64, channel_plan: [usize; STAGES]) -> Backbone {
    assert!(
        channel_plan.iter().all(|&c| c >= 1),
        "channel plan entries must be >= 1"
    );
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layers = Vec::with_capacity(STAGES);
    let mut cin = 3;
    for &cout in &channel_plan {
        let scale = 1.0 / ((9 * cin) as f64).sqrt();
        let w: Vec<f64> = (0..cout * cin * 9)
            .map(|_| {
                let g: f64 = StandardNormal.sample(&mut rng);
                g * scale
            })
            .collect();
        let b: Vec<f64> = (0..cout)
            .map(|_| {
                let g: f64 = StandardNormal.sample(&mut rng);
                g * 0.1
            })
            .collect();
        layers.push(ConvLayer { cin, cout, w, b });
        cin = cout;
    }
    Backbone::Synthetic(SyntheticBackbone {
        seed,
        channel_plan,
        layers,
    })
}

impl SyntheticBackbone {
    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn channel_plan(&self) -> [usize; STAGES] {
        self.channel_plan
    }
}

/// 3x3 convolution with zero padding, then ReLU.
fn conv3x3_relu(input: &Array3<f64>, layer: &ConvLayer) -> Array3<f64> {
    let (h, w, cin) = input.dim();
    debug_assert_eq!(cin, layer.cin);
    let mut out = Array3::zeros((h, w, layer.cout));
    for y in 0..h {
        for x in 0..w {
            for co in 0..layer.cout {
                let mut acc = layer.b[co];
                for dy in 0..3usize {
                    let sy = y as isize + dy as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for dx in 0..3usize {
                        let sx = x as isize + dx as isize - 1;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        for ci in 0..cin {
                            acc += input[(sy as usize, sx as usize, ci)]
                                * layer.w[((co * cin + ci) * 3 + dy) * 3 + dx];
                        }
                    }
                }
                out[(y, x, co)] = acc.max(0.0);
            }
        }
    }
    out
}

/// 2x2 max pooling, stride 2, floor dims.
fn max_pool2(input: &Array3<f64>) -> Array3<f64> {
    let (h, w, c) = input.dim();
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Array3::zeros((oh, ow, c));
    for y in 0..oh {
        for x in 0..ow {
            for ch in 0..c {
                let m = input[(2 * y, 2 * x, ch)]
                    .max(input[(2 * y + 1, 2 * x, ch)])
                    .max(input[(2 * y, 2 * x + 1, ch)])
                    .max(input[(2 * y + 1, 2 * x + 1, ch)]);
                out[(y, x, ch)] = m;
            }
        }
    }
    out
}

/// A feature extractor: pretrained ONNX graph or the synthetic stack. Both
/// expose the same extraction contract and are interchangeable in the
/// scoring pipeline.
#[derive(Debug)]
pub enum Backbone {
    Onnx(OnnxBackbone),
    Synthetic(SyntheticBackbone),
}

impl Backbone {
    pub fn source(&self) -> BackboneSource {
        match self {
            Backbone::Onnx(_) => BackboneSource::Pretrained,
            Backbone::Synthetic(_) => BackboneSource::Synthetic,
        }
    }

    pub fn preprocessing(&self) -> Preprocessing {
        match self {
            Backbone::Onnx(b) => b.preprocessing,
            Backbone::Synthetic(_) => Preprocessing::identity(),
        }
    }

    /// Extract the five stage features. Deterministic for a fixed input.
    pub fn extract(&self, image: &ImagePlane) -> Result<FeatureStack, BackboneError> {
        let (h, w) = (image.height(), image.width());
        if h < MIN_IMAGE_DIM || w < MIN_IMAGE_DIM {
            return Err(BackboneError::ImageTooSmall {
                h,
                w,
                min: MIN_IMAGE_DIM,
            });
        }
        let rgb = image.to_rgb();
        let stages = match self {
            Backbone::Onnx(b) => {
                let mut data = Vec::with_capacity(3 * h * w);
                for c in 0..3 {
                    for y in 0..h {
                        for x in 0..w {
                            data.push(
                                ((rgb[(y, x, c)] - b.preprocessing.mean[c])
                                    / b.preprocessing.std[c]) as f32,
                            );
                        }
                    }
                }
                let input = Tensor::from_shape(&[1, 3, h, w], &data).map_err(|e| {
                    BackboneError::Inference {
                        stage: 0,
                        message: e.to_string(),
                    }
                })?;
                b.run(input)?
            }
            Backbone::Synthetic(b) => {
                let mut stages = Vec::with_capacity(STAGES);
                let mut current = rgb;
                for (i, layer) in b.layers.iter().enumerate() {
                    if i > 0 {
                        current = max_pool2(&current);
                    }
                    current = conv3x3_relu(&current, layer);
                    stages.push(current.clone());
                }
                stages
            }
        };
        Ok(FeatureStack {
            stages,
            source: self.source(),
            preprocessing: self.preprocessing(),
        })
    }
}
