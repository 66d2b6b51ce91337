//! Command-line interface: score single pairs, run dataset benchmarks and
//! export attention maps.

use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use smicqa::backbone::{load_backbone, synthetic_backbone, Backbone, BackboneConfig};
use smicqa::eval::{load_manifest, run_benchmark};
use smicqa::scoring::{attention_maps, score_pair, MetricKind, ScoreConfig, StageRange};
use smicqa::smic::ProjectionMode;
use smicqa::ImagePlane;

#[derive(Parser)]
#[command(
    name = "smicqa",
    about = "Full-reference image quality scoring with statistical-dependency attention",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Score one reference/distorted pair and emit JSON
    Score(ScoreArgs),
    /// Score a manifest of pairs and report SRCC/PLCC per metric
    Evaluate(EvaluateArgs),
    /// Export per-stage attention maps as 8-bit grayscale images
    AttentionDump(AttentionDumpArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Projection {
    Shared,
    Independent,
}

impl From<Projection> for ProjectionMode {
    fn from(p: Projection) -> Self {
        match p {
            Projection::Shared => ProjectionMode::Shared,
            Projection::Independent => ProjectionMode::Independent,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Switch {
    On,
    Off,
}

impl From<Switch> for bool {
    fn from(s: Switch) -> bool {
        matches!(s, Switch::On)
    }
}

#[derive(Args)]
struct BackboneArgs {
    /// `synthetic`, a TOML backbone config, or an ONNX file (requires
    /// --taps with five node names)
    #[arg(long, default_value = "synthetic")]
    backbone: String,
    /// Tap node names when --backbone points directly at an ONNX file
    #[arg(long, value_delimiter = ',')]
    taps: Vec<String>,
    /// Seed for the synthetic backbone weights
    #[arg(long, default_value_t = 0)]
    backbone_seed: u64,
}

impl BackboneArgs {
    fn load(&self) -> Result<Backbone> {
        if self.backbone == "synthetic" {
            return Ok(synthetic_backbone(self.backbone_seed, [4, 8, 16, 32, 32]));
        }
        let path = PathBuf::from(&self.backbone);
        let config = if path.extension().is_some_and(|e| e == "toml") {
            BackboneConfig::from_toml_file(&path)?
        } else {
            if self.taps.len() != 5 {
                bail!("--backbone with an ONNX file needs --taps with exactly 5 names");
            }
            let mut config = BackboneConfig {
                model_path: path,
                stage_taps: self
                    .taps
                    .clone()
                    .try_into()
                    .expect("length checked above"),
                input_mean: [0.485, 0.456, 0.406],
                input_std: [0.229, 0.224, 0.225],
            };
            config.apply_env_override();
            config
        };
        Ok(load_backbone(&config)?)
    }
}

#[derive(Args)]
struct CommonScoreArgs {
    /// Attention on or off
    #[arg(long, value_enum, default_value = "on")]
    smic: Switch,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Monte-Carlo slices per patch
    #[arg(long, default_value_t = 32)]
    k: usize,
    /// Attention stage range, e.g. 3:4
    #[arg(long, default_value = "3:4")]
    stages: StageRange,
    #[arg(long, value_enum, default_value = "shared")]
    proj: Projection,
    /// Attention-patch stride for the traditional metrics (the deep metric
    /// always uses stride 7)
    #[arg(long, default_value_t = 1)]
    trad_stride: usize,
    /// Debug switch: force every attention value to 1
    #[arg(long, default_value_t = false)]
    uniform_attention: bool,
}

impl CommonScoreArgs {
    fn config(&self, metric: MetricKind) -> ScoreConfig {
        ScoreConfig {
            metric,
            smic: self.smic.into(),
            seed: self.seed,
            k: self.k,
            stages: self.stages,
            projection: self.proj.into(),
            traditional_attention_stride: self.trad_stride,
            force_uniform_attention: self.uniform_attention,
            ..ScoreConfig::default()
        }
    }
}

#[derive(Args)]
struct ScoreArgs {
    #[arg(long, value_parser = parse_metric)]
    metric: MetricKind,
    #[arg(long)]
    r#ref: PathBuf,
    #[arg(long)]
    dist: PathBuf,
    #[command(flatten)]
    common: CommonScoreArgs,
    #[command(flatten)]
    backbone: BackboneArgs,
    /// `json` for stdout or a path ending in .json
    #[arg(long, default_value = "json")]
    out: String,
}

#[derive(Args)]
struct EvaluateArgs {
    /// CSV manifest with header ref,dist,mos[,split][,polarity]
    #[arg(long)]
    manifest: PathBuf,
    /// Directory the manifest paths resolve against
    #[arg(long)]
    root: PathBuf,
    /// Comma-separated metrics
    #[arg(long, value_delimiter = ',', value_parser = parse_metric,
          default_value = "psnr,ssim,lpips")]
    metrics: Vec<MetricKind>,
    /// Comma-separated attention modes to evaluate
    #[arg(long, value_delimiter = ',', value_enum, default_value = "on,off")]
    smic: Vec<Switch>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 32)]
    k: usize,
    #[arg(long, default_value = "3:4")]
    stages: StageRange,
    #[arg(long, value_enum, default_value = "shared")]
    proj: Projection,
    #[arg(long, default_value_t = 1)]
    trad_stride: usize,
    #[arg(long, default_value_t = false)]
    uniform_attention: bool,
    #[command(flatten)]
    backbone: BackboneArgs,
    /// report.json or report.csv
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AttentionDumpArgs {
    #[arg(long)]
    r#ref: PathBuf,
    #[arg(long)]
    dist: PathBuf,
    #[command(flatten)]
    common: CommonScoreArgs,
    #[command(flatten)]
    backbone: BackboneArgs,
    /// Attention-patch stride (1 gives the densest maps)
    #[arg(long, default_value_t = 7)]
    stride: usize,
    /// Output directory for attention_stage<N>.png files
    #[arg(long)]
    out: PathBuf,
}

fn parse_metric(s: &str) -> Result<MetricKind, String> {
    s.parse()
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Score(args) => score(args),
        Command::Evaluate(args) => evaluate(args),
        Command::AttentionDump(args) => attention_dump(args),
    }
}

fn score(args: ScoreArgs) -> Result<()> {
    let backbone = args.backbone.load()?;
    let reference = ImagePlane::from_path(&args.r#ref)?;
    let distorted = ImagePlane::from_path(&args.dist)?;
    let config = args.common.config(args.metric);
    let score = score_pair(&backbone, &config, &reference, &distorted)?;
    let json = serde_json::to_string_pretty(&score)?;
    if args.out == "json" {
        println!("{json}");
    } else {
        std::fs::write(&args.out, json).with_context(|| format!("writing {}", args.out))?;
    }
    Ok(())
}

fn evaluate(args: EvaluateArgs) -> Result<()> {
    let backbone = args.backbone.load()?;
    let manifest = load_manifest(&args.manifest, &args.root)?;
    let base = ScoreConfig {
        seed: args.seed,
        k: args.k,
        stages: args.stages,
        projection: args.proj.into(),
        traditional_attention_stride: args.trad_stride,
        force_uniform_attention: args.uniform_attention,
        ..ScoreConfig::default()
    };
    let smic_modes: Vec<bool> = args.smic.iter().map(|&s| s.into()).collect();
    let report = run_benchmark(&manifest, &backbone, &base, &args.metrics, &smic_modes);
    let rendered = match args.out.extension().and_then(|e| e.to_str()) {
        Some("csv") => report.to_csv(),
        _ => report.to_json(),
    };
    std::fs::write(&args.out, rendered)
        .with_context(|| format!("writing {}", args.out.display()))?;
    eprintln!("wrote {}", args.out.display());
    if report.any_cell_aborted() {
        bail!("one or more evaluation cells aborted; see the report for details");
    }
    Ok(())
}

fn attention_dump(args: AttentionDumpArgs) -> Result<()> {
    let backbone = args.backbone.load()?;
    let reference = ImagePlane::from_path(&args.r#ref)?;
    let distorted = ImagePlane::from_path(&args.dist)?;
    let mut config = args.common.config(MetricKind::LpipsStyle);
    config.smic = true;
    let fr = backbone.extract(&reference)?;
    let fd = backbone.extract(&distorted)?;
    let maps = attention_maps(&fr, &fd, &config, args.stride)?;
    std::fs::create_dir_all(&args.out)?;
    for map in &maps {
        let (h, w) = map.values.dim();
        let mut img = image::GrayImage::new(w as u32, h as u32);
        for ((y, x), &v) in map.values.indexed_iter() {
            // round half up into 8 bits
            img.put_pixel(x as u32, y as u32, image::Luma([(v * 255.0).round() as u8]));
        }
        let path = args.out.join(format!("attention_stage{}.png", map.stage));
        img.save(&path).with_context(|| format!("writing {}", path.display()))?;
        println!("{}", path.display());
    }
    Ok(())
}
