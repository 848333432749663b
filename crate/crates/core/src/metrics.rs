//! Segmentation metrics (Dice, IoU, HD95, NSD), the quality-efficiency
//! polygon, and paired Wilcoxon signed-rank testing with Holm correction.
//!
//! Distance conventions: surfaces are foreground voxels with at least one
//! background 6-neighbor (out-of-grid counts as background); distances are
//! Euclidean between voxel centers in voxel units; percentiles use the
//! nearest-rank rule on the pooled symmetric distance list.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Binary 3D mask with explicit extents.
#[derive(Clone, Debug)]
pub struct Mask {
    pub extents: [usize; 3],
    bits: Vec<bool>,
}

impl Mask {
    pub fn new(extents: [usize; 3], bits: Vec<bool>) -> Result<Self> {
        if bits.len() != extents.iter().product::<usize>() {
            return Err(Error::ShapeMismatch {
                op: "mask",
                left: extents.to_vec(),
                right: vec![bits.len()],
            });
        }
        Ok(Mask { extents, bits })
    }

    pub fn from_labels(extents: [usize; 3], labels: &[usize], class: usize) -> Result<Self> {
        Mask::new(extents, labels.iter().map(|&l| l == class).collect())
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> bool {
        self.bits[(x * self.extents[1] + y) * self.extents[2] + z]
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty_mask(&self) -> bool {
        self.count() == 0
    }

    /// Foreground voxels with at least one background 6-neighbor; voxels on
    /// the grid boundary count (outside is background).
    pub fn surface_voxels(&self) -> Vec<[usize; 3]> {
        let [h, w, d] = self.extents;
        let mut out = Vec::new();
        for x in 0..h {
            for y in 0..w {
                for z in 0..d {
                    if !self.get(x, y, z) {
                        continue;
                    }
                    let boundary = x == 0
                        || y == 0
                        || z == 0
                        || x == h - 1
                        || y == w - 1
                        || z == d - 1
                        || !self.get(x - 1, y, z)
                        || !self.get(x + 1, y, z)
                        || !self.get(x, y - 1, z)
                        || !self.get(x, y + 1, z)
                        || !self.get(x, y, z - 1)
                        || !self.get(x, y, z + 1);
                    if boundary {
                        out.push([x, y, z]);
                    }
                }
            }
        }
        out
    }
}

/// Per-class overlap and boundary metrics.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: usize,
    pub dice: f64,
    pub iou: f64,
    pub hd95: f64,
    pub nsd: f64,
}

/// Per-case report: per-class values plus unweighted means.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MetricReport {
    pub per_class: Vec<ClassMetrics>,
    pub mean_dice: f64,
    pub mean_iou: f64,
    pub mean_hd95: f64,
    pub mean_nsd: f64,
}

/// Dice and IoU of two same-extent masks. Both-empty is defined as perfect
/// agreement (1.0).
pub fn overlap_metrics(pred: &Mask, truth: &Mask) -> Result<(f64, f64)> {
    if pred.extents != truth.extents {
        return Err(Error::ShapeMismatch {
            op: "overlap_metrics",
            left: pred.extents.to_vec(),
            right: truth.extents.to_vec(),
        });
    }
    let mut inter = 0usize;
    let mut a = 0usize;
    let mut b = 0usize;
    for (pa, pb) in pred.bits.iter().zip(&truth.bits) {
        a += usize::from(*pa);
        b += usize::from(*pb);
        inter += usize::from(*pa && *pb);
    }
    if a + b == 0 {
        return Ok((1.0, 1.0));
    }
    let union = a + b - inter;
    let dice = 2.0 * inter as f64 / (a + b) as f64;
    let iou = inter as f64 / union as f64;
    Ok((dice, iou))
}

fn euclid(a: [usize; 3], b: [usize; 3]) -> f64 {
    let dx = a[0] as f64 - b[0] as f64;
    let dy = a[1] as f64 - b[1] as f64;
    let dz = a[2] as f64 - b[2] as f64;
    (dx * dx + dy * dy + dz * dz).sqrt()
}

fn min_distances(from: &[[usize; 3]], to: &[[usize; 3]]) -> Vec<f64> {
    from.iter()
        .map(|&a| {
            to.iter()
                .map(|&b| euclid(a, b))
                .fold(f64::INFINITY, f64::min)
        })
        .collect()
}

/// Nearest-rank percentile of an unsorted sample.
fn percentile(values: &mut [f64], p: f64) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    let rank = ((p / 100.0 * n as f64).ceil() as usize).clamp(1, n);
    values[rank - 1]
}

/// HD95 and NSD of two nonempty masks.
///
/// HD95: 95th percentile of the pooled symmetric surface distances.
/// NSD: per-mask fraction of surface voxels within `nsd_tolerance` of the
/// other surface, averaged over the two masks.
pub fn surface_metrics(pred: &Mask, truth: &Mask, nsd_tolerance: f64) -> Result<(f64, f64)> {
    if pred.extents != truth.extents {
        return Err(Error::ShapeMismatch {
            op: "surface_metrics",
            left: pred.extents.to_vec(),
            right: truth.extents.to_vec(),
        });
    }
    if pred.is_empty_mask() || truth.is_empty_mask() {
        return Err(Error::EmptyMask);
    }
    let sp = pred.surface_voxels();
    let st = truth.surface_voxels();
    let d_pt = min_distances(&sp, &st);
    let d_tp = min_distances(&st, &sp);
    let mut pooled: Vec<f64> = d_pt.iter().chain(d_tp.iter()).cloned().collect();
    let hd95 = percentile(&mut pooled, 95.0);
    let frac = |d: &[f64]| d.iter().filter(|&&v| v <= nsd_tolerance).count() as f64 / d.len() as f64;
    let nsd = 0.5 * (frac(&d_pt) + frac(&d_tp));
    Ok((hd95, nsd))
}

/// Full per-class report over integer label volumes.
pub fn metric_report(
    extents: [usize; 3],
    pred: &[usize],
    truth: &[usize],
    classes: usize,
    nsd_tolerance: f64,
) -> Result<MetricReport> {
    let mut per_class = Vec::with_capacity(classes.saturating_sub(1));
    // Foreground classes only; class 0 is background.
    for class in 1..classes {
        let mp = Mask::from_labels(extents, pred, class)?;
        let mt = Mask::from_labels(extents, truth, class)?;
        let (dice, iou) = overlap_metrics(&mp, &mt)?;
        let (hd95, nsd) = if mp.is_empty_mask() && mt.is_empty_mask() {
            (0.0, 1.0)
        } else if mp.is_empty_mask() || mt.is_empty_mask() {
            // One-sided absence: worst-case boundary scores at grid scale.
            let diag = euclid([0, 0, 0], [
                extents[0] - 1,
                extents[1] - 1,
                extents[2] - 1,
            ]);
            (diag, 0.0)
        } else {
            surface_metrics(&mp, &mt, nsd_tolerance)?
        };
        per_class.push(ClassMetrics {
            class,
            dice,
            iou,
            hd95,
            nsd,
        });
    }
    let k = per_class.len().max(1) as f64;
    Ok(MetricReport {
        mean_dice: per_class.iter().map(|c| c.dice).sum::<f64>() / k,
        mean_iou: per_class.iter().map(|c| c.iou).sum::<f64>() / k,
        mean_hd95: per_class.iter().map(|c| c.hd95).sum::<f64>() / k,
        mean_nsd: per_class.iter().map(|c| c.nsd).sum::<f64>() / k,
        per_class,
    })
}

// ── Quality-efficiency polygon ───────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AxisDirection {
    HigherBetter,
    LowerBetter,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PolygonAxis {
    pub name: String,
    pub direction: AxisDirection,
}

/// Axes in fixed order plus one raw value per method per axis. Polygon area
/// depends on the declared axis order.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PolygonSpec {
    pub axes: Vec<PolygonAxis>,
    pub methods: Vec<String>,
    /// `values[m][a]`: raw value of method m on axis a.
    pub values: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, Serialize)]
pub struct QeaResult {
    pub method: String,
    /// Normalized radius per axis, in axis order, each in [0, 1].
    pub radii: Vec<f64>,
    pub area: f64,
}

/// Normalize every axis to [0, 1] (inverting lower-better axes) and compute
/// the enclosed polygon area with vertices at equal angles:
/// `area = 1/2 sin(2π/K) Σ r_i r_{i+1}` over the closed fan.
pub fn qea(spec: &PolygonSpec) -> Result<Vec<QeaResult>> {
    let k = spec.axes.len();
    if k < 3 {
        return Err(Error::InvalidConfig(format!(
            "polygon needs >= 3 axes, got {k}"
        )));
    }
    if spec.values.len() != spec.methods.len()
        || spec.values.iter().any(|row| row.len() != k)
    {
        return Err(Error::InvalidConfig(
            "every method needs a value on every axis".into(),
        ));
    }
    let mut radii = vec![vec![0.0; k]; spec.methods.len()];
    for (a, axis) in spec.axes.iter().enumerate() {
        let column: Vec<f64> = spec.values.iter().map(|row| row[a]).collect();
        let min = column.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = column.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if !(max > min) {
            return Err(Error::DegenerateAxis {
                name: axis.name.clone(),
            });
        }
        for (m, &v) in column.iter().enumerate() {
            radii[m][a] = match axis.direction {
                AxisDirection::HigherBetter => (v - min) / (max - min),
                AxisDirection::LowerBetter => (max - v) / (max - min),
            };
        }
    }
    let wedge = 0.5 * (2.0 * std::f64::consts::PI / k as f64).sin();
    Ok(spec
        .methods
        .iter()
        .zip(radii)
        .map(|(method, r)| {
            let mut area = 0.0;
            for i in 0..k {
                area += r[i] * r[(i + 1) % k];
            }
            QeaResult {
                method: method.clone(),
                radii: r,
                area: area * wedge,
            }
        })
        .collect())
}

// ── Wilcoxon signed-rank with Holm correction ────────────────────────

/// Largest n for which the exact null distribution is enumerated; the
/// normal approximation with tie correction takes over above it.
pub const WILCOXON_EXACT_LIMIT: usize = 12;

/// Minimum number of nonzero paired differences for a conclusive test.
pub const WILCOXON_MIN_N: usize = 5;

#[derive(Clone, Debug, Serialize)]
pub struct WilcoxonOutcome {
    pub name: String,
    pub n_nonzero: usize,
    pub statistic: f64,
    /// Two-sided p-value; `None` when the comparison is inconclusive.
    pub p_value: Option<f64>,
}

#[derive(Clone, Debug, Serialize)]
pub struct HolmOutcome {
    pub name: String,
    pub n_nonzero: usize,
    pub statistic: f64,
    pub raw_p: Option<f64>,
    pub adjusted_p: Option<f64>,
    pub significant: bool,
}

/// Signed ranks of the nonzero differences, average ranks on ties.
/// Returns (w_plus, ranks of |d|, n).
fn signed_ranks(diffs: &[f64]) -> (f64, Vec<f64>, Vec<f64>) {
    let nonzero: Vec<f64> = diffs.iter().cloned().filter(|&d| d != 0.0).collect();
    let mut order: Vec<usize> = (0..nonzero.len()).collect();
    order.sort_by(|&i, &j| nonzero[i].abs().total_cmp(&nonzero[j].abs()));
    let mut ranks = vec![0.0; nonzero.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len()
            && nonzero[order[j + 1]].abs() == nonzero[order[i]].abs()
        {
            j += 1;
        }
        // Average rank across the tie group (ranks are 1-based).
        let avg = (i + j + 2) as f64 / 2.0;
        for &idx in &order[i..=j] {
            ranks[idx] = avg;
        }
        i = j + 1;
    }
    let w_plus: f64 = nonzero
        .iter()
        .zip(&ranks)
        .filter(|(&d, _)| d > 0.0)
        .map(|(_, &r)| r)
        .sum();
    (w_plus, ranks, nonzero)
}

/// Exact two-sided p by enumerating all 2^n sign assignments over the
/// observed ranks (conditional on ties).
fn exact_two_sided_p(w_obs: f64, ranks: &[f64]) -> f64 {
    let n = ranks.len();
    let total = 1u64 << n;
    let mut le = 0u64;
    let mut ge = 0u64;
    const EPS: f64 = 1e-9;
    for mask in 0..total {
        let mut w = 0.0;
        for (bit, &r) in ranks.iter().enumerate() {
            if mask >> bit & 1 == 1 {
                w += r;
            }
        }
        if w <= w_obs + EPS {
            le += 1;
        }
        if w >= w_obs - EPS {
            ge += 1;
        }
    }
    let p = 2.0 * (le.min(ge) as f64) / total as f64;
    p.min(1.0)
}

/// Complementary error function (Abramowitz & Stegun 7.1.26 on the
/// exponential scale); ~1e-7 absolute accuracy, plenty for p-values.
fn erfc(x: f64) -> f64 {
    let z = x.abs();
    let t = 1.0 / (1.0 + 0.5 * z);
    let tau = t
        * (-z * z - 1.26551223
            + t * (1.00002368
                + t * (0.37409196
                    + t * (0.09678418
                        + t * (-0.18628806
                            + t * (0.27886807
                                + t * (-1.13520398
                                    + t * (1.48851587
                                        + t * (-0.82215223 + t * 0.17087277)))))))))
        .exp();
    if x >= 0.0 {
        tau
    } else {
        2.0 - tau
    }
}

fn normal_sf(z: f64) -> f64 {
    0.5 * erfc(z / std::f64::consts::SQRT_2)
}

/// Normal approximation with tie correction for n beyond the exact limit.
fn approx_two_sided_p(w_plus: f64, ranks: &[f64]) -> f64 {
    let n = ranks.len() as f64;
    let mean = n * (n + 1.0) / 4.0;
    // Tie correction: subtract sum(t^3 - t)/48 over tie groups.
    let mut sorted = ranks.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut tie_term = 0.0;
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j + 1 < sorted.len() && sorted[j + 1] == sorted[i] {
            j += 1;
        }
        let t = (j - i + 1) as f64;
        tie_term += t * t * t - t;
        i = j + 1;
    }
    let var = n * (n + 1.0) * (2.0 * n + 1.0) / 24.0 - tie_term / 48.0;
    if var <= 0.0 {
        return 1.0;
    }
    let z = (w_plus - mean) / var.sqrt();
    (2.0 * normal_sf(z.abs())).min(1.0)
}

/// Paired two-sided Wilcoxon signed-rank test on per-case differences.
///
/// Zero differences are dropped; fewer than [`WILCOXON_MIN_N`] nonzero
/// differences (or none at all) yields an inconclusive outcome instead of a
/// p-value. Exact enumeration for n ≤ [`WILCOXON_EXACT_LIMIT`], normal
/// approximation with tie correction above.
pub fn wilcoxon_signed_rank(name: &str, a: &[f64], b: &[f64]) -> Result<WilcoxonOutcome> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch {
            op: "wilcoxon_signed_rank",
            left: vec![a.len()],
            right: vec![b.len()],
        });
    }
    let diffs: Vec<f64> = a.iter().zip(b).map(|(&x, &y)| x - y).collect();
    let (w_plus, ranks, nonzero) = signed_ranks(&diffs);
    let n = nonzero.len();
    if n < WILCOXON_MIN_N {
        return Ok(WilcoxonOutcome {
            name: name.to_string(),
            n_nonzero: n,
            statistic: w_plus,
            p_value: None,
        });
    }
    let p = if n <= WILCOXON_EXACT_LIMIT {
        exact_two_sided_p(w_plus, &ranks)
    } else {
        approx_two_sided_p(w_plus, &ranks)
    };
    Ok(WilcoxonOutcome {
        name: name.to_string(),
        n_nonzero: n,
        statistic: w_plus,
        p_value: Some(p),
    })
}

/// Holm step-down adjustment over a family of raw p-values:
/// adjusted p_(i) = max_{j<=i} min(1, (m-j+1) p_(j)) in ascending raw order.
pub fn holm_adjust(raw: &[f64]) -> Vec<f64> {
    let m = raw.len();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&i, &j| raw[i].total_cmp(&raw[j]));
    let mut adjusted = vec![0.0; m];
    let mut running = 0.0f64;
    for (pos, &idx) in order.iter().enumerate() {
        let scaled = ((m - pos) as f64 * raw[idx]).min(1.0);
        running = running.max(scaled);
        adjusted[idx] = running;
    }
    adjusted
}

/// Run every comparison, Holm-correct the conclusive ones, and flag
/// significance at 0.05. Inconclusive comparisons carry no p-values and are
/// never significant; they do not enter the Holm family.
pub fn wilcoxon_holm(
    comparisons: &[(String, Vec<f64>, Vec<f64>)],
    alpha: f64,
) -> Result<Vec<HolmOutcome>> {
    let outcomes: Vec<WilcoxonOutcome> = comparisons
        .iter()
        .map(|(name, a, b)| wilcoxon_signed_rank(name, a, b))
        .collect::<Result<_>>()?;
    let conclusive: Vec<usize> = outcomes
        .iter()
        .enumerate()
        .filter(|(_, o)| o.p_value.is_some())
        .map(|(i, _)| i)
        .collect();
    let raw: Vec<f64> = conclusive
        .iter()
        .map(|&i| outcomes[i].p_value.unwrap())
        .collect();
    let adjusted = holm_adjust(&raw);
    let mut results: Vec<HolmOutcome> = outcomes
        .iter()
        .map(|o| HolmOutcome {
            name: o.name.clone(),
            n_nonzero: o.n_nonzero,
            statistic: o.statistic,
            raw_p: o.p_value,
            adjusted_p: None,
            significant: false,
        })
        .collect();
    for (slot, &i) in conclusive.iter().enumerate() {
        results[i].adjusted_p = Some(adjusted[slot]);
        results[i].significant = adjusted[slot] < alpha;
    }
    Ok(results)
}
