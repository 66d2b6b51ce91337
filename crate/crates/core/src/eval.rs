//! Benchmark harness: manifest ingestion, rank correlations with
//! five-parameter logistic alignment, and the metric-by-metric evaluation
//! protocol with relative-improvement reporting.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backbone::Backbone;
use crate::image::ImagePlane;
use crate::scoring::{score_pair, MetricKind, ScoreConfig};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("manifest {path}: {message}")]
    Manifest { path: PathBuf, message: String },
    #[error("manifest line {line}: {message}")]
    Row { line: u64, message: String },
    #[error("duplicate pair at line {line}: {reference} / {distorted}")]
    DuplicatePair {
        line: u64,
        reference: String,
        distorted: String,
    },
    #[error("unresolvable path at line {line}: {path}")]
    UnresolvablePath { line: u64, path: PathBuf },
    #[error("prediction and MOS sequences differ in length ({a} vs {b})")]
    LengthMismatch { a: usize, b: usize },
    #[error("need at least {min} samples, got {n}")]
    TooFewSamples { n: usize, min: usize },
    #[error("degenerate ranks: {side} values have zero rank variance")]
    DegenerateRanks { side: &'static str },
}

/// Whether larger subjective scores mean better quality. LIVE and CSIQ ship
/// DMOS (higher is worse); most others ship MOS.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Polarity {
    Mos,
    Dmos,
}

impl Polarity {
    fn parse(s: &str) -> Option<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "mos" | "higher_better" => Some(Polarity::Mos),
            "dmos" | "higher_worse" => Some(Polarity::Dmos),
            _ => None,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Polarity::Mos => "mos",
            Polarity::Dmos => "dmos",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestRow {
    pub reference: PathBuf,
    pub distorted: PathBuf,
    pub mos: f64,
    pub split: Option<String>,
}

/// Dataset rows plus the subjective-score polarity.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkManifest {
    pub name: String,
    pub rows: Vec<ManifestRow>,
    pub polarity: Polarity,
}

/// Load a `ref,dist,mos[,split][,polarity]` CSV; relative paths are joined
/// against `root` and must resolve at load time. Duplicate pairs are
/// rejected, and the polarity column (when present) must be uniform.
pub fn load_manifest(path: impl AsRef<Path>, root: impl AsRef<Path>) -> Result<BenchmarkManifest, EvalError> {
    let path = path.as_ref();
    let root = root.as_ref();
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| EvalError::Manifest {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
    let headers = reader
        .headers()
        .map_err(|e| EvalError::Manifest {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?
        .clone();
    let column = |name: &str| headers.iter().position(|h| h == name);
    let (ref_col, dist_col, mos_col) = match (column("ref"), column("dist"), column("mos")) {
        (Some(r), Some(d), Some(m)) => (r, d, m),
        _ => {
            return Err(EvalError::Manifest {
                path: path.to_path_buf(),
                message: "header must contain ref,dist,mos".into(),
            })
        }
    };
    let split_col = column("split");
    let polarity_col = column("polarity");

    let mut rows = Vec::new();
    let mut seen = BTreeSet::new();
    let mut polarity: Option<Polarity> = None;
    for record in reader.records() {
        let record = record.map_err(|e| EvalError::Manifest {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        let line = record
            .position()
            .map(|p| p.line())
            .unwrap_or(rows.len() as u64 + 2);
        let field = |col: usize| -> Result<&str, EvalError> {
            record.get(col).ok_or(EvalError::Row {
                line,
                message: format!("missing column {col}"),
            })
        };
        let reference = field(ref_col)?.to_string();
        let distorted = field(dist_col)?.to_string();
        let mos: f64 = field(mos_col)?.parse().map_err(|_| EvalError::Row {
            line,
            message: format!("non-numeric MOS `{}`", record.get(mos_col).unwrap_or("")),
        })?;
        if !mos.is_finite() {
            return Err(EvalError::Row {
                line,
                message: "MOS must be finite".into(),
            });
        }
        if !seen.insert((reference.clone(), distorted.clone())) {
            return Err(EvalError::DuplicatePair {
                line,
                reference,
                distorted,
            });
        }
        if let Some(col) = polarity_col {
            let text = field(col)?;
            let parsed = Polarity::parse(text).ok_or(EvalError::Row {
                line,
                message: format!("unknown polarity `{text}`"),
            })?;
            if *polarity.get_or_insert(parsed) != parsed {
                return Err(EvalError::Row {
                    line,
                    message: "polarity column must be uniform".into(),
                });
            }
        }
        let resolve = |p: &str| -> Result<PathBuf, EvalError> {
            let joined = root.join(p);
            if !joined.exists() {
                return Err(EvalError::UnresolvablePath { line, path: joined });
            }
            Ok(joined)
        };
        rows.push(ManifestRow {
            reference: resolve(&reference)?,
            distorted: resolve(&distorted)?,
            mos,
            split: split_col
                .map(|c| field(c).map(str::to_string))
                .transpose()?
                .filter(|s| !s.is_empty()),
        });
    }
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".into());
    Ok(BenchmarkManifest {
        name,
        rows,
        polarity: polarity.unwrap_or(Polarity::Mos),
    })
}

/// Average ranks with ties sharing their mean rank.
fn average_ranks(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = rank;
        }
        i = j + 1;
    }
    ranks
}

/// Pearson correlation coefficient.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64, EvalError> {
    if xs.len() != ys.len() {
        return Err(EvalError::LengthMismatch {
            a: xs.len(),
            b: ys.len(),
        });
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for (&x, &y) in xs.iter().zip(ys) {
        cov += (x - mx) * (y - my);
        vx += (x - mx) * (x - mx);
        vy += (y - my) * (y - my);
    }
    if vx == 0.0 {
        return Err(EvalError::DegenerateRanks { side: "prediction" });
    }
    if vy == 0.0 {
        return Err(EvalError::DegenerateRanks { side: "MOS" });
    }
    // sqrt of the product keeps perfectly correlated inputs at exactly 1
    Ok(cov / (vx * vy).sqrt())
}

/// Spearman rank correlation with average-rank tie handling: the Pearson
/// correlation of the two rank vectors.
pub fn srcc(pred: &[f64], mos: &[f64]) -> Result<f64, EvalError> {
    if pred.len() != mos.len() {
        return Err(EvalError::LengthMismatch {
            a: pred.len(),
            b: mos.len(),
        });
    }
    if pred.len() < 3 {
        return Err(EvalError::TooFewSamples {
            n: pred.len(),
            min: 3,
        });
    }
    pearson(&average_ranks(pred), &average_ranks(mos))
}

/// Five-parameter logistic used to align predictions with MOS:
/// `q(s) = b1*(1/2 - 1/(1 + exp(b2*(s - b3)))) + b4*s + b5`.
pub fn logistic5(params: &[f64; 5], s: f64) -> f64 {
    let [b1, b2, b3, b4, b5] = *params;
    let u = b2 * (s - b3);
    // numerically stable 1/(1+exp(u))
    let sig = if u >= 0.0 {
        let e = (-u).exp();
        e / (1.0 + e)
    } else {
        1.0 / (1.0 + u.exp())
    };
    b1 * (0.5 - sig) + b4 * s + b5
}

fn sse(params: &[f64; 5], pred: &[f64], mos: &[f64]) -> f64 {
    pred.iter()
        .zip(mos)
        .map(|(&s, &m)| {
            let d = logistic5(params, s) - m;
            d * d
        })
        .sum()
}

/// Derivative-free simplex minimizer (reflection 1, expansion 2,
/// contraction 0.5, shrink 0.5). Returns the best point, its value and
/// whether the relative spread tolerance was reached.
fn nelder_mead(
    f: &dyn Fn(&[f64; 5]) -> f64,
    start: [f64; 5],
    max_iter: usize,
    rel_tol: f64,
) -> ([f64; 5], f64, bool) {
    const DIM: usize = 5;
    let mut simplex: Vec<[f64; 5]> = vec![start];
    for i in 0..DIM {
        let mut v = start;
        let step = 0.1 * v[i].abs().max(0.1);
        v[i] += step;
        simplex.push(v);
    }
    let mut values: Vec<f64> = simplex.iter().map(|p| f(p)).collect();

    let mut converged = false;
    for _ in 0..max_iter {
        let mut order: Vec<usize> = (0..=DIM).collect();
        order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
        let (best, worst, second_worst) = (order[0], order[DIM], order[DIM - 1]);
        if (values[worst] - values[best]).abs()
            <= rel_tol * (values[best].abs() + rel_tol)
        {
            converged = true;
            break;
        }
        let mut centroid = [0.0; DIM];
        for &i in order.iter().take(DIM) {
            for d in 0..DIM {
                centroid[d] += simplex[i][d] / DIM as f64;
            }
        }
        let blend = |a: f64, b: f64, t: f64| a + t * (b - a);
        let point_at = |t: f64| -> [f64; 5] {
            let mut p = [0.0; DIM];
            for d in 0..DIM {
                p[d] = blend(centroid[d], simplex[worst][d], t);
            }
            p
        };
        let reflected = point_at(-1.0);
        let fr = f(&reflected);
        if fr < values[best] {
            let expanded = point_at(-2.0);
            let fe = f(&expanded);
            if fe < fr {
                simplex[worst] = expanded;
                values[worst] = fe;
            } else {
                simplex[worst] = reflected;
                values[worst] = fr;
            }
        } else if fr < values[second_worst] {
            simplex[worst] = reflected;
            values[worst] = fr;
        } else {
            let (contracted, fc) = if fr < values[worst] {
                let p = point_at(-0.5);
                let v = f(&p);
                (p, v)
            } else {
                let p = point_at(0.5);
                let v = f(&p);
                (p, v)
            };
            if fc < values[worst].min(fr) {
                simplex[worst] = contracted;
                values[worst] = fc;
            } else {
                // shrink toward the best vertex
                let anchor = simplex[best];
                for i in 0..=DIM {
                    if i == best {
                        continue;
                    }
                    for d in 0..DIM {
                        simplex[i][d] = blend(anchor[d], simplex[i][d], 0.5);
                    }
                    values[i] = f(&simplex[i]);
                }
            }
        }
    }
    let mut best = 0;
    for i in 1..=DIM {
        if values[i] < values[best] {
            best = i;
        }
    }
    (simplex[best], values[best], converged)
}

/// Result of the logistic alignment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogisticFit {
    pub params: [f64; 5],
    pub plcc: f64,
    pub converged: bool,
}

fn affine_ols(pred: &[f64], mos: &[f64]) -> [f64; 5] {
    let n = pred.len() as f64;
    let mx = pred.iter().sum::<f64>() / n;
    let my = mos.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut var = 0.0;
    for (&x, &y) in pred.iter().zip(mos) {
        cov += (x - mx) * (y - my);
        var += (x - mx) * (x - mx);
    }
    let slope = if var > 0.0 { cov / var } else { 0.0 };
    let std = (var / n).sqrt().max(1e-12);
    [0.0, 1.0 / std, mx, slope, my - slope * mx]
}

/// Fit the five-parameter logistic by least squares with multi-start
/// Nelder-Mead and report the Pearson correlation of the aligned
/// predictions. The affine sub-family is always among the candidates, so
/// the fitted PLCC can never fall below |raw Pearson|.
pub fn fit_logistic_and_plcc(pred: &[f64], mos: &[f64]) -> Result<LogisticFit, EvalError> {
    if pred.len() != mos.len() {
        return Err(EvalError::LengthMismatch {
            a: pred.len(),
            b: mos.len(),
        });
    }
    if pred.len() < 10 {
        return Err(EvalError::TooFewSamples {
            n: pred.len(),
            min: 10,
        });
    }
    // degenerate inputs cannot be aligned
    pearson(pred, mos)?;

    let objective = |p: &[f64; 5]| sse(p, pred, mos);
    let affine = affine_ols(pred, mos);
    let range = mos.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
        - mos.iter().cloned().fold(f64::INFINITY, f64::min);
    let sign = if affine[3] < 0.0 { -1.0 } else { 1.0 };
    let starts: [[f64; 5]; 5] = [
        affine,
        [sign * range, affine[1], affine[2], affine[3], affine[4]],
        [-sign * range, affine[1], affine[2], affine[3], affine[4]],
        [sign * range, affine[1] * 10.0, affine[2], 0.0, mos.iter().sum::<f64>() / mos.len() as f64],
        [sign * range, affine[1] * 0.1, affine[2], affine[3], affine[4]],
    ];

    struct Candidate {
        params: [f64; 5],
        sse: f64,
        plcc: f64,
    }
    let evaluate = |params: [f64; 5]| -> Option<Candidate> {
        let aligned: Vec<f64> = pred.iter().map(|&s| logistic5(&params, s)).collect();
        let plcc = pearson(&aligned, mos).ok()?;
        Some(Candidate {
            params,
            sse: sse(&params, pred, mos),
            plcc,
        })
    };

    let mut any_converged = false;
    let mut candidates: Vec<Candidate> = Vec::new();
    if let Some(c) = evaluate(affine) {
        candidates.push(c);
    }
    for start in starts {
        let (params, _, converged) = nelder_mead(&objective, start, 2000, 1e-9);
        any_converged |= converged;
        if let Some(c) = evaluate(params) {
            candidates.push(c);
        }
    }

    // best aligned correlation wins; ties prefer the smaller residual
    let best = candidates
        .into_iter()
        .max_by(|a, b| {
            a.plcc
                .total_cmp(&b.plcc)
                .then(b.sse.total_cmp(&a.sse))
        })
        .expect("affine candidate always evaluates");
    if !any_converged {
        return Ok(LogisticFit {
            params: affine,
            plcc: evaluate(affine).expect("affine evaluates").plcc,
            converged: false,
        });
    }
    Ok(LogisticFit {
        params: best.params,
        plcc: best.plcc,
        converged: true,
    })
}

/// One (metric, smic) evaluation cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationReport {
    pub metric: MetricKind,
    pub smic: bool,
    pub srcc: f64,
    pub plcc: f64,
    pub logistic_params: [f64; 5],
    pub logistic_converged: bool,
    pub n: usize,
}

/// Cell failure, identified by the offending manifest row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellError {
    pub row: usize,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "lowercase")]
pub enum CellOutcome {
    Ok(CorrelationReport),
    Error {
        metric: MetricKind,
        smic: bool,
        #[serde(flatten)]
        error: CellError,
    },
}

/// Relative improvement of the SMIC cell over its baseline, in percent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Improvement {
    pub metric: MetricKind,
    pub srcc_pct: f64,
    pub plcc_pct: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub dataset: String,
    pub polarity: Polarity,
    pub seed: u64,
    pub n_pairs: usize,
    pub cells: Vec<CellOutcome>,
    pub improvements: Vec<Improvement>,
}

impl BenchmarkReport {
    pub fn any_cell_aborted(&self) -> bool {
        self.cells
            .iter()
            .any(|c| matches!(c, CellOutcome::Error { .. }))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Flat CSV: one row per cell, improvements inlined on SMIC rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "dataset,polarity,seed,metric,smic,status,n,srcc,plcc,logistic_converged,srcc_improvement_pct,plcc_improvement_pct,error_row,error_message\n",
        );
        for cell in &self.cells {
            match cell {
                CellOutcome::Ok(r) => {
                    let improvement = self
                        .improvements
                        .iter()
                        .find(|i| i.metric == r.metric && r.smic);
                    out.push_str(&format!(
                        "{},{},{},{},{},ok,{},{},{},{},{},{},,\n",
                        self.dataset,
                        self.polarity.as_str(),
                        self.seed,
                        r.metric,
                        r.smic,
                        r.n,
                        r.srcc,
                        r.plcc,
                        r.logistic_converged,
                        improvement.map(|i| i.srcc_pct.to_string()).unwrap_or_default(),
                        improvement.map(|i| i.plcc_pct.to_string()).unwrap_or_default(),
                    ));
                }
                CellOutcome::Error {
                    metric,
                    smic,
                    error,
                } => {
                    out.push_str(&format!(
                        "{},{},{},{},{},error,,,,,,,{},{}\n",
                        self.dataset,
                        self.polarity.as_str(),
                        self.seed,
                        metric,
                        smic,
                        error.row,
                        error.message.replace(',', ";"),
                    ));
                }
            }
        }
        out
    }
}

/// Orient predictions and MOS so that higher is better on both sides.
fn orient(
    metric: MetricKind,
    polarity: Polarity,
    pred: &[f64],
    mos: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let pred_higher_better = match metric {
        MetricKind::Psnr => true, // predictions are dB
        MetricKind::Ssim => true,
        MetricKind::LpipsStyle => false,
    };
    let p: Vec<f64> = if pred_higher_better {
        pred.to_vec()
    } else {
        pred.iter().map(|v| -v).collect()
    };
    let m: Vec<f64> = match polarity {
        Polarity::Mos => mos.to_vec(),
        Polarity::Dmos => mos.iter().map(|v| -v).collect(),
    };
    (p, m)
}

/// Score every manifest pair for each (metric, smic) cell and report SRCC
/// and logistic-aligned PLCC per cell. Pairs are evaluated in parallel;
/// features are extracted once per pair and shared across cells. A pair
/// failure aborts only the cells that needed it.
pub fn run_benchmark(
    manifest: &BenchmarkManifest,
    backbone: &Backbone,
    base: &ScoreConfig,
    metrics: &[MetricKind],
    smic_modes: &[bool],
) -> BenchmarkReport {
    let cells: Vec<(MetricKind, bool)> = metrics
        .iter()
        .flat_map(|&m| smic_modes.iter().map(move |&s| (m, s)))
        .collect();

    // per pair, per cell: score or row-identified error
    let per_pair: Vec<Vec<Result<f64, CellError>>> = manifest
        .rows
        .par_iter()
        .enumerate()
        .map(|(row, entry)| {
            let images = ImagePlane::from_path(&entry.reference).and_then(|r| {
                ImagePlane::from_path(&entry.distorted).map(|d| (r, d))
            });
            let (reference, distorted) = match images {
                Ok(pair) => pair,
                Err(e) => {
                    let err = CellError {
                        row,
                        message: e.to_string(),
                    };
                    return vec![Err(err); cells.len()];
                }
            };
            cells
                .iter()
                .map(|&(metric, smic)| {
                    let config = ScoreConfig {
                        metric,
                        smic,
                        ..base.clone()
                    };
                    score_pair(backbone, &config, &reference, &distorted)
                        .map(|score| score.prediction())
                        .map_err(|e| CellError {
                            row,
                            message: e.to_string(),
                        })
                })
                .collect()
        })
        .collect();

    let mos: Vec<f64> = manifest.rows.iter().map(|r| r.mos).collect();
    let mut outcomes = Vec::with_capacity(cells.len());
    for (ci, &(metric, smic)) in cells.iter().enumerate() {
        let mut preds = Vec::with_capacity(manifest.rows.len());
        let mut failure: Option<CellError> = None;
        for row_scores in &per_pair {
            match &row_scores[ci] {
                Ok(v) => preds.push(*v),
                Err(e) => {
                    failure = Some(e.clone());
                    break;
                }
            }
        }
        if let Some(error) = failure {
            outcomes.push(CellOutcome::Error {
                metric,
                smic,
                error,
            });
            continue;
        }
        if preds.len() < 10 {
            outcomes.push(CellOutcome::Error {
                metric,
                smic,
                error: CellError {
                    row: 0,
                    message: format!(
                        "correlation reporting needs at least 10 rows, got {}",
                        preds.len()
                    ),
                },
            });
            continue;
        }
        let (op, om) = orient(metric, manifest.polarity, &preds, &mos);
        let cell = srcc(&op, &om).and_then(|s| {
            fit_logistic_and_plcc(&op, &om).map(|fit| CorrelationReport {
                metric,
                smic,
                srcc: s,
                plcc: fit.plcc,
                logistic_params: fit.params,
                logistic_converged: fit.converged,
                n: preds.len(),
            })
        });
        match cell {
            Ok(report) => outcomes.push(CellOutcome::Ok(report)),
            Err(e) => outcomes.push(CellOutcome::Error {
                metric,
                smic,
                error: CellError {
                    row: 0,
                    message: e.to_string(),
                },
            }),
        }
    }

    let find = |metric: MetricKind, smic: bool| -> Option<&CorrelationReport> {
        outcomes.iter().find_map(|c| match c {
            CellOutcome::Ok(r) if r.metric == metric && r.smic == smic => Some(r),
            _ => None,
        })
    };
    let mut improvements = Vec::new();
    for &metric in metrics {
        if let (Some(off), Some(on)) = (find(metric, false), find(metric, true)) {
            if off.srcc != 0.0 && off.plcc != 0.0 {
                improvements.push(Improvement {
                    metric,
                    srcc_pct: (on.srcc - off.srcc) / off.srcc * 100.0,
                    plcc_pct: (on.plcc - off.plcc) / off.plcc * 100.0,
                });
            }
        }
    }

    BenchmarkReport {
        dataset: manifest.name.clone(),
        polarity: manifest.polarity,
        seed: base.seed,
        n_pairs: manifest.rows.len(),
        cells: outcomes,
        improvements,
    }
}
