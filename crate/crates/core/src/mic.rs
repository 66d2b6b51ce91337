//! Maximal Information Coefficient over grid partitions of a 2D scatterplot.
//!
//! Two estimators share one search space: `exact_mic` enumerates every
//! admissible grid shape and every cut placement, `approx_mic` equipartitions
//! one axis by ranks and optimizes the other with dynamic programming. All
//! candidate cuts sit at midpoints between consecutive distinct sorted values,
//! so both estimators are invariant under strictly increasing maps of either
//! axis and `approx_mic` can never exceed `exact_mic`.

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MicError {
    #[error("sample sequences differ in length ({xs} vs {ys})")]
    LengthMismatch { xs: usize, ys: usize },
    #[error("need at least 4 paired samples, got {n}")]
    TooFewSamples { n: usize },
    #[error("samples must be finite (NaN/Inf at index {index})")]
    NonFiniteSample { index: usize },
    #[error("axis {axis} needs {expected} cuts for {bins} bins, got {actual}")]
    CutCountMismatch {
        axis: char,
        bins: usize,
        expected: usize,
        actual: usize,
    },
    #[error("axis {axis} cuts must be strictly increasing and finite")]
    InvalidCuts { axis: char },
    #[error("grid must have at least 2 bins per axis")]
    TooFewBins,
    #[error(
        "exhaustive MIC search is limited to {limit} samples, got {n}; use approx_mic instead"
    )]
    ExhaustiveSearchTooLarge { n: usize, limit: usize },
}

/// Paired scalar observations of two variables.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplePairs {
    xs: Vec<f64>,
    ys: Vec<f64>,
}

impl SamplePairs {
    pub fn new(xs: Vec<f64>, ys: Vec<f64>) -> Result<Self, MicError> {
        if xs.len() != ys.len() {
            return Err(MicError::LengthMismatch {
                xs: xs.len(),
                ys: ys.len(),
            });
        }
        if xs.len() < 4 {
            return Err(MicError::TooFewSamples { n: xs.len() });
        }
        for (i, v) in xs.iter().chain(ys.iter()).enumerate() {
            if !v.is_finite() {
                return Err(MicError::NonFiniteSample {
                    index: i % xs.len(),
                });
            }
        }
        Ok(Self { xs, ys })
    }

    pub fn len(&self) -> usize {
        self.xs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.xs.is_empty()
    }

    pub fn xs(&self) -> &[f64] {
        &self.xs
    }

    pub fn ys(&self) -> &[f64] {
        &self.ys
    }
}

/// An `n_x` by `n_y` grid; cuts are interior bin boundaries. Cells are
/// half-open, left-closed at each cut, with the outermost cells unbounded.
#[derive(Debug, Clone, PartialEq)]
pub struct GridPartition {
    n_x: usize,
    n_y: usize,
    x_cuts: Vec<f64>,
    y_cuts: Vec<f64>,
}

impl GridPartition {
    pub fn new(
        n_x: usize,
        n_y: usize,
        x_cuts: Vec<f64>,
        y_cuts: Vec<f64>,
    ) -> Result<Self, MicError> {
        if n_x < 2 || n_y < 2 {
            return Err(MicError::TooFewBins);
        }
        for (axis, bins, cuts) in [('x', n_x, &x_cuts), ('y', n_y, &y_cuts)] {
            if cuts.len() != bins - 1 {
                return Err(MicError::CutCountMismatch {
                    axis,
                    bins,
                    expected: bins - 1,
                    actual: cuts.len(),
                });
            }
            if cuts.iter().any(|c| !c.is_finite())
                || cuts.windows(2).any(|w| w[0] >= w[1])
            {
                return Err(MicError::InvalidCuts { axis });
            }
        }
        Ok(Self {
            n_x,
            n_y,
            x_cuts,
            y_cuts,
        })
    }

    pub fn n_x(&self) -> usize {
        self.n_x
    }

    pub fn n_y(&self) -> usize {
        self.n_y
    }

    pub fn x_cuts(&self) -> &[f64] {
        &self.x_cuts
    }

    pub fn y_cuts(&self) -> &[f64] {
        &self.y_cuts
    }

    /// Bin index of `v` along an axis: the number of cuts at or below it.
    fn bin_of(cuts: &[f64], v: f64) -> usize {
        cuts.partition_point(|&c| c <= v)
    }
}

/// Outcome of a MIC search: the normalized value, the maximizing grid and the
/// raw mutual information (nats) under it.
#[derive(Debug, Clone, PartialEq)]
pub struct MicResult {
    pub value: f64,
    pub best_grid: GridPartition,
    pub best_mi: f64,
}

/// Search-space knobs shared by both estimators.
#[derive(Debug, Clone, PartialEq)]
pub struct MicOptions {
    /// Grid shapes satisfy `n_x * n_y < n^bound_exponent` (plus the 2x2
    /// fallback that keeps the estimator total for small n).
    pub bound_exponent: f64,
    /// `exact_mic` refuses inputs larger than this.
    pub exact_search_limit: usize,
}

impl Default for MicOptions {
    fn default() -> Self {
        Self {
            bound_exponent: 0.5,
            exact_search_limit: 64,
        }
    }
}

/// Grid shapes admissible for `n` samples: all `(n_x, n_y)` with both at
/// least 2 and product below `n^bound_exponent`, plus `(2, 2)` so the set is
/// never empty. Sorted lexicographically.
pub fn admissible_grid_shapes(n: usize, bound_exponent: f64) -> Vec<(usize, usize)> {
    let threshold = if bound_exponent == 0.5 {
        (n as f64).sqrt()
    } else {
        (n as f64).powf(bound_exponent)
    };
    let mut shapes = vec![(2usize, 2usize)];
    let mut nx = 2;
    while ((nx * 2) as f64) < threshold {
        let mut ny = 2;
        while ((nx * ny) as f64) < threshold {
            shapes.push((nx, ny));
            ny += 1;
        }
        nx += 1;
    }
    shapes.sort_unstable();
    shapes.dedup();
    shapes
}

/// Empirical mutual information (nats) of the samples under a fixed grid.
/// Empty cells contribute zero.
pub fn mi_under_grid(samples: &SamplePairs, grid: &GridPartition) -> f64 {
    let n = samples.len();
    let (nx, ny) = (grid.n_x, grid.n_y);
    let mut counts = vec![0u64; nx * ny];
    for (&x, &y) in samples.xs.iter().zip(&samples.ys) {
        let u = GridPartition::bin_of(&grid.x_cuts, x);
        let v = GridPartition::bin_of(&grid.y_cuts, y);
        counts[u * ny + v] += 1;
    }
    let mut scratch = Vec::with_capacity(nx * ny);
    mi_from_counts(&counts, nx, ny, n as u64, &mut scratch)
}

/// MI from a cell count table. Terms are sorted before summation so the
/// result is bit-identical under transposition and cell reordering.
fn mi_from_counts(
    counts: &[u64],
    nx: usize,
    ny: usize,
    total: u64,
    scratch: &mut Vec<f64>,
) -> f64 {
    debug_assert_eq!(counts.len(), nx * ny);
    let mut row = vec![0u64; nx];
    let mut col = vec![0u64; ny];
    for u in 0..nx {
        for v in 0..ny {
            let c = counts[u * ny + v];
            row[u] += c;
            col[v] += c;
        }
    }
    let nf = total as f64;
    scratch.clear();
    for u in 0..nx {
        for v in 0..ny {
            let c = counts[u * ny + v];
            if c == 0 {
                continue;
            }
            let cf = c as f64;
            let term = (cf / nf) * ((cf * nf) / (row[u] as f64 * col[v] as f64)).ln();
            scratch.push(term);
        }
    }
    scratch.sort_unstable_by(f64::total_cmp);
    let mi: f64 = scratch.iter().sum();
    // MI is non-negative; only rounding noise can dip below zero.
    if mi < 0.0 {
        debug_assert!(mi > -1e-9, "mi_from_counts produced {mi}");
        0.0
    } else {
        mi
    }
}

/// Per-axis sample ordering with distinct-value runs. Candidate cuts live at
/// run boundaries, identified by the prefix count of samples below the cut.
struct AxisOrder {
    /// sample indices sorted ascending by this axis's value
    order: Vec<usize>,
    /// pos[sample] = position of the sample in `order`
    pos: Vec<usize>,
    /// cumulative sample count at the end of each distinct-value run
    run_ends: Vec<usize>,
}

impl AxisOrder {
    fn new(values: &[f64]) -> Self {
        let n = values.len();
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_unstable_by(|&a, &b| values[a].total_cmp(&values[b]));
        let mut pos = vec![0usize; n];
        for (p, &i) in order.iter().enumerate() {
            pos[i] = p;
        }
        let mut run_ends = Vec::new();
        for p in 1..=n {
            if p == n || values[order[p]] != values[order[p - 1]] {
                run_ends.push(p);
            }
        }
        Self {
            order,
            pos,
            run_ends,
        }
    }

    fn is_degenerate(&self) -> bool {
        self.run_ends.len() == 1
    }

    /// Candidate cut positions as prefix counts (every run end but the last).
    fn boundaries(&self) -> &[usize] {
        &self.run_ends[..self.run_ends.len() - 1]
    }

    /// Value-space cut for a prefix-count boundary: midpoint of the gap.
    fn cut_value(&self, values: &[f64], boundary: usize) -> f64 {
        let lo = values[self.order[boundary - 1]];
        let hi = values[self.order[boundary]];
        lo + (hi - lo) / 2.0
    }

    fn max_value(&self, values: &[f64]) -> f64 {
        values[*self.order.last().unwrap()]
    }
}

/// Visit k-combinations of `0..n` in lexicographic order.
fn for_each_combination(n: usize, k: usize, mut f: impl FnMut(&[usize])) {
    if k > n {
        return;
    }
    let mut idx: Vec<usize> = (0..k).collect();
    loop {
        f(&idx);
        // advance to the next combination
        let mut i = k;
        while i > 0 && idx[i - 1] == n - k + (i - 1) {
            i -= 1;
        }
        if i == 0 {
            return;
        }
        idx[i - 1] += 1;
        for j in i..k {
            idx[j] = idx[j - 1] + 1;
        }
    }
}

/// Reconstruct value-space cuts for chosen prefix-count boundaries, padding
/// with cuts beyond the data maximum when collapsed tie runs left too few
/// real boundaries for the requested bin count.
fn cuts_from_boundaries(
    axis: &AxisOrder,
    values: &[f64],
    boundaries: &[usize],
    bins: usize,
) -> Vec<f64> {
    let mut cuts: Vec<f64> = boundaries
        .iter()
        .map(|&b| axis.cut_value(values, b))
        .collect();
    let max = axis.max_value(values);
    let mut pad = 1.0;
    while cuts.len() < bins - 1 {
        cuts.push(max + pad);
        pad += 1.0;
    }
    cuts
}

fn fallback_result(samples: &SamplePairs, x_axis: &AxisOrder, y_axis: &AxisOrder) -> MicResult {
    let x_cut = if x_axis.is_degenerate() {
        x_axis.max_value(samples.xs()) + 1.0
    } else {
        x_axis.cut_value(samples.xs(), x_axis.boundaries()[0])
    };
    let y_cut = if y_axis.is_degenerate() {
        y_axis.max_value(samples.ys()) + 1.0
    } else {
        y_axis.cut_value(samples.ys(), y_axis.boundaries()[0])
    };
    MicResult {
        value: 0.0,
        best_grid: GridPartition::new(2, 2, vec![x_cut], vec![y_cut])
            .expect("fallback grid is always valid"),
        best_mi: 0.0,
    }
}

fn clamp_unit(value: f64) -> f64 {
    debug_assert!(value <= 1.0 + 1e-12, "MIC normalization overshoot: {value}");
    value.clamp(0.0, 1.0)
}

/// Exhaustive MIC: maximize normalized MI over every admissible shape and
/// every placement of rank-boundary cuts. Ties keep the first grid in
/// lexicographic (n_x, n_y, x-cuts, y-cuts) order.
pub fn exact_mic(samples: &SamplePairs, opts: &MicOptions) -> Result<MicResult, MicError> {
    let n = samples.len();
    if n > opts.exact_search_limit {
        return Err(MicError::ExhaustiveSearchTooLarge {
            n,
            limit: opts.exact_search_limit,
        });
    }
    let x_axis = AxisOrder::new(samples.xs());
    let y_axis = AxisOrder::new(samples.ys());
    if x_axis.is_degenerate() || y_axis.is_degenerate() {
        return Ok(fallback_result(samples, &x_axis, &y_axis));
    }

    struct Best {
        value: f64,
        mi: f64,
        nx: usize,
        ny: usize,
        x_bounds: Vec<usize>,
        y_bounds: Vec<usize>,
    }
    let mut best: Option<Best> = None;

    let xb = x_axis.boundaries();
    let yb = y_axis.boundaries();
    let y_runs = y_axis.run_ends.len();
    let mut scratch = Vec::new();

    for (nx, ny) in admissible_grid_shapes(n, opts.bound_exponent) {
        if xb.len() < nx - 1 || yb.len() < ny - 1 {
            continue;
        }
        let norm = (nx.min(ny) as f64).ln();
        for_each_combination(xb.len(), nx - 1, |xc| {
            // x-bin of each x-sorted position under the chosen cuts
            let mut xbin_of_pos = vec![0usize; n];
            let mut bin = 0;
            let mut next = 0;
            for (p, slot) in xbin_of_pos.iter_mut().enumerate() {
                while next < xc.len() && xb[xc[next]] <= p {
                    bin += 1;
                    next += 1;
                }
                *slot = bin;
            }
            // cumulative x-bin counts per y run
            let mut cum = vec![0u64; (y_runs + 1) * nx];
            let mut start = 0;
            for (r, &end) in y_axis.run_ends.iter().enumerate() {
                let (prev, cur) = cum.split_at_mut((r + 1) * nx);
                cur[..nx].copy_from_slice(&prev[r * nx..]);
                for &sample in &y_axis.order[start..end] {
                    cur[xbin_of_pos[x_axis.pos[sample]]] += 1;
                }
                start = end;
            }
            let mut counts = vec![0u64; nx * ny];
            for_each_combination(yb.len(), ny - 1, |yc| {
                // group rows are run ranges split after the chosen run indices
                let mut from = 0usize; // run index of the group start
                for v in 0..ny {
                    let to = if v < ny - 1 { yc[v] + 1 } else { y_runs };
                    for u in 0..nx {
                        counts[u * ny + v] = cum[to * nx + u] - cum[from * nx + u];
                    }
                    from = to;
                }
                let mi = mi_from_counts(&counts, nx, ny, n as u64, &mut scratch);
                let value = mi / norm;
                if best.as_ref().is_none_or(|b| value > b.value) {
                    best = Some(Best {
                        value,
                        mi,
                        nx,
                        ny,
                        x_bounds: xc.iter().map(|&i| xb[i]).collect(),
                        y_bounds: yc.iter().map(|&i| yb[i]).collect(),
                    });
                }
            });
        });
    }

    let best = best.expect("a 2x2 grid always exists for non-degenerate axes");
    let x_cuts = cuts_from_boundaries(&x_axis, samples.xs(), &best.x_bounds, best.nx);
    let y_cuts = cuts_from_boundaries(&y_axis, samples.ys(), &best.y_bounds, best.ny);
    Ok(MicResult {
        value: clamp_unit(best.value),
        best_grid: GridPartition::new(best.nx, best.ny, x_cuts, y_cuts)
            .expect("search boundaries are strictly increasing"),
        best_mi: best.mi,
    })
}

/// Rank equipartition of an axis into `bins` groups. Boundaries are run
/// aligned; a tie run straddling a target is assigned wholly to the lower
/// bin. Returns strictly increasing prefix-count boundaries, possibly fewer
/// than `bins - 1` when tie runs swallow targets.
fn equipartition(axis: &AxisOrder, bins: usize, n: usize) -> Vec<usize> {
    let mut bounds = Vec::with_capacity(bins - 1);
    for v in 1..bins {
        let target = v * n / bins;
        if target == 0 {
            continue;
        }
        let idx = axis.run_ends.partition_point(|&e| e < target);
        let b = axis.run_ends[idx];
        if b >= n {
            break;
        }
        if bounds.last() != Some(&b) {
            bounds.push(b);
        }
    }
    bounds
}

struct DpOutcome {
    /// chosen group boundaries on the optimized axis (prefix counts)
    bounds: Vec<usize>,
    /// cell count table, optimized-axis-major, (effective fixed bins) wide
    counts: Vec<u64>,
    fixed_bins_effective: usize,
    groups: usize,
}

/// Optimal contiguous grouping of the free axis's distinct-value runs into
/// `target_groups` bins, given a fixed binning of the other axis. Classic
/// MIC axis optimization: the fixed marginal entropy is constant, so the
/// objective decomposes additively over groups.
fn optimize_axis(
    free: &AxisOrder,
    fixed_bin_of_sample: &[usize],
    fixed_bins_effective: usize,
    target_groups: usize,
    n: usize,
) -> DpOutcome {
    let m = free.run_ends.len();
    let vdim = fixed_bins_effective;
    // prefix[r][v]: samples in the first r runs falling in fixed bin v
    let mut prefix = vec![0u64; (m + 1) * vdim];
    let mut start = 0;
    for (r, &end) in free.run_ends.iter().enumerate() {
        let (prev, cur) = prefix.split_at_mut((r + 1) * vdim);
        cur[..vdim].copy_from_slice(&prev[r * vdim..]);
        for &sample in &free.order[start..end] {
            cur[fixed_bin_of_sample[sample]] += 1;
        }
        start = end;
    }
    let nf = n as f64;
    let contribution = |from: usize, to: usize| -> f64 {
        let mut acc = 0.0;
        let mut row = 0u64;
        for v in 0..vdim {
            let c = prefix[to * vdim + v] - prefix[from * vdim + v];
            row += c;
            if c > 0 {
                let p = c as f64 / nf;
                acc += p * p.ln();
            }
        }
        if row > 0 {
            let p = row as f64 / nf;
            acc -= p * p.ln();
        }
        acc
    };

    let k = target_groups.min(m);
    // dp[t -1][i]: best objective splitting the first i runs into t groups
    let mut dp = vec![f64::NEG_INFINITY; k * (m + 1)];
    let mut parent = vec![0usize; k * (m + 1)];
    for i in 1..=m {
        dp[i] = contribution(0, i);
    }
    for t in 2..=k {
        for i in t..=m {
            let mut bv = f64::NEG_INFINITY;
            let mut bj = t - 1;
            for j in (t - 1)..i {
                let cand = dp[(t - 2) * (m + 1) + j] + contribution(j, i);
                if cand > bv {
                    bv = cand;
                    bj = j;
                }
            }
            dp[(t - 1) * (m + 1) + i] = bv;
            parent[(t - 1) * (m + 1) + i] = bj;
        }
    }

    // walk parents back to recover run-index group boundaries
    let mut cut_runs = Vec::with_capacity(k - 1);
    let mut i = m;
    for t in (2..=k).rev() {
        let j = parent[(t - 1) * (m + 1) + i];
        cut_runs.push(j);
        i = j;
    }
    cut_runs.reverse();

    let mut counts = vec![0u64; k * vdim];
    let mut from = 0usize;
    for g in 0..k {
        let to = if g < k - 1 { cut_runs[g] } else { m };
        for v in 0..vdim {
            counts[g * vdim + v] = prefix[to * vdim + v] - prefix[from * vdim + v];
        }
        from = to;
    }
    DpOutcome {
        bounds: cut_runs.iter().map(|&r| free.run_ends[r - 1]).collect(),
        counts,
        fixed_bins_effective: vdim,
        groups: k,
    }
}

/// Heuristic MIC: for each admissible shape, equipartition one axis by ranks
/// and optimize the other by dynamic programming; both orientations are
/// tried. The returned value is re-derived from the winning grid's count
/// table, so it is always one of `exact_mic`'s candidates and can never
/// exceed it.
pub fn approx_mic(samples: &SamplePairs, opts: &MicOptions) -> MicResult {
    let n = samples.len();
    let x_axis = AxisOrder::new(samples.xs());
    let y_axis = AxisOrder::new(samples.ys());
    if x_axis.is_degenerate() || y_axis.is_degenerate() {
        return fallback_result(samples, &x_axis, &y_axis);
    }

    struct Best {
        value: f64,
        mi: f64,
        nx: usize,
        ny: usize,
        x_bounds: Vec<usize>,
        y_bounds: Vec<usize>,
    }
    let mut best: Option<Best> = None;
    let mut scratch = Vec::new();

    let consider = |nx: usize,
                        ny: usize,
                        x_bounds: Vec<usize>,
                        y_bounds: Vec<usize>,
                        counts: &[u64],
                        rows: usize,
                        cols: usize,
                        best: &mut Option<Best>,
                        scratch: &mut Vec<f64>| {
        let mi = mi_from_counts(counts, rows, cols, n as u64, scratch);
        let value = mi / (nx.min(ny) as f64).ln();
        if best.as_ref().is_none_or(|b| value > b.value) {
            *best = Some(Best {
                value,
                mi,
                nx,
                ny,
                x_bounds,
                y_bounds,
            });
        }
    };

    for (nx, ny) in admissible_grid_shapes(n, opts.bound_exponent) {
        // orientation A: equipartition y, optimize x
        let y_bounds = equipartition(&y_axis, ny, n);
        let y_bin: Vec<usize> = y_axis
            .pos
            .iter()
            .map(|&p| y_bounds.iter().filter(|&&b| b <= p).count())
            .collect();
        let out = optimize_axis(&x_axis, &y_bin, y_bounds.len() + 1, nx, n);
        consider(
            nx,
            ny,
            out.bounds.clone(),
            y_bounds,
            &out.counts,
            out.groups,
            out.fixed_bins_effective,
            &mut best,
            &mut scratch,
        );

        // orientation B: equipartition x, optimize y
        let x_bounds = equipartition(&x_axis, nx, n);
        let x_bin: Vec<usize> = x_axis
            .pos
            .iter()
            .map(|&p| x_bounds.iter().filter(|&&b| b <= p).count())
            .collect();
        let out = optimize_axis(&y_axis, &x_bin, x_bounds.len() + 1, ny, n);
        consider(
            nx,
            ny,
            x_bounds,
            out.bounds.clone(),
            &out.counts,
            out.groups,
            out.fixed_bins_effective,
            &mut best,
            &mut scratch,
        );
    }

    let best = best.expect("shape set is never empty");
    let x_cuts = cuts_from_boundaries(&x_axis, samples.xs(), &best.x_bounds, best.nx);
    let y_cuts = cuts_from_boundaries(&y_axis, samples.ys(), &best.y_bounds, best.ny);
    MicResult {
        value: clamp_unit(best.value),
        best_grid: GridPartition::new(best.nx, best.ny, x_cuts, y_cuts)
            .expect("equipartition and DP boundaries are strictly increasing"),
        best_mi: best.mi,
    }
}
