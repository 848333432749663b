//! Nonvoid voxelization: bias-free patch embedding, occupancy detection,
//! sparse extraction, the soft differentiable occupancy ratio, and sparsity
//! statistics.
//!
//! The load-bearing property: a bias-free convolution maps an identically
//! zero input patch to a bit-exact zero feature vector, for any weights. So
//! after subtracting the background constant, "all-background" patches are
//! separable from signal by thresholding the feature norm against a tiny ε.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::defaults;
use crate::error::{Error, Result};
use crate::tensor::{NormOrder, Tape, Tensor};
use crate::volume::DenseVolume;

/// Configuration of the embedding layer and occupancy machinery.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EmbedConfig {
    /// Embedding kernel extent (cubic).
    pub kernel: usize,
    /// Embedding stride.
    pub stride: usize,
    /// Output channels.
    pub channels: usize,
    /// Occupancy threshold.
    pub epsilon: f64,
    /// Norm order p for the per-voxel feature norm.
    pub p: u32,
    /// Temperature of the soft occupancy sigmoid.
    pub tau_soft: f64,
    /// Weight of the soft nonvoid ratio in the total loss.
    pub lambda_nv: f64,
}

impl Default for EmbedConfig {
    fn default() -> Self {
        EmbedConfig {
            kernel: defaults::EMBED_KERNEL,
            stride: defaults::EMBED_STRIDE,
            channels: defaults::TOY_CHANNELS[0],
            epsilon: defaults::EPSILON,
            p: 2,
            tau_soft: defaults::TAU_SOFT,
            lambda_nv: defaults::LAMBDA_NV,
        }
    }
}

impl EmbedConfig {
    pub fn validate(&self) -> Result<()> {
        if self.kernel == 0 || self.stride == 0 {
            return Err(Error::InvalidConfig(
                "kernel and stride must be >= 1".into(),
            ));
        }
        if self.epsilon <= 0.0 || self.tau_soft <= 0.0 || self.lambda_nv < 0.0 {
            return Err(Error::InvalidConfig(
                "epsilon > 0, tau_soft > 0, lambda_nv >= 0 required".into(),
            ));
        }
        NormOrder::from_p(self.p).map(|_| ())
    }

    pub fn norm_order(&self) -> NormOrder {
        NormOrder::from_p(self.p).expect("validated")
    }

    /// Embedding weight count: kernel^3 * modalities * channels.
    pub fn weight_len(&self, modalities: usize) -> usize {
        self.kernel.pow(3) * modalities * self.channels
    }

    /// Initialize embedding weights uniform in ±1/sqrt(k^3 M) with a fixed
    /// seed, keeping feature norms O(1) so ε sits deep in its plateau.
    pub fn init_weights(&self, modalities: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = 1.0 / ((self.kernel.pow(3) * modalities) as f64).sqrt();
        let data = (0..self.weight_len(modalities))
            .map(|_| rng.gen_range(-bound..bound))
            .collect();
        Tensor::from_vec(
            vec![
                self.kernel,
                self.kernel,
                self.kernel,
                modalities,
                self.channels,
            ],
            data,
        )
        .expect("finite init")
    }
}

/// Binary occupancy grid over the embedded voxel lattice.
#[derive(Clone, Debug, PartialEq)]
pub struct OccupancyMap {
    pub extents: [usize; 3],
    bits: Vec<bool>,
}

impl OccupancyMap {
    pub fn all_ones(extents: [usize; 3]) -> Self {
        OccupancyMap {
            extents,
            bits: vec![true; extents.iter().product()],
        }
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> bool {
        self.bits[(x * self.extents[1] + y) * self.extents[2] + z]
    }

    pub fn popcount(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }
}

/// Sparse set of nonvoid voxels: coordinates, feature rows, stable ids.
///
/// Ids are assigned once, in lexicographic (x, y, z) scan order at
/// extraction, and are never reassigned downstream.
#[derive(Clone, Debug)]
pub struct SparseVoxelSet {
    pub extents: [usize; 3],
    pub coords: Vec<[usize; 3]>,
    pub ids: Vec<u64>,
    /// `[phi, C]` feature matrix, row i belonging to coords\[i\]/ids\[i\].
    pub features: Tensor,
}

impl SparseVoxelSet {
    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.features.shape()[1]
    }

    /// Replace the feature matrix, keeping coords and ids.
    pub fn with_features(&self, features: Tensor) -> Result<Self> {
        if features.shape() != self.features.shape() {
            return Err(Error::ShapeMismatch {
                op: "with_features",
                left: features.shape().to_vec(),
                right: self.features.shape().to_vec(),
            });
        }
        Ok(SparseVoxelSet {
            extents: self.extents,
            coords: self.coords.clone(),
            ids: self.ids.clone(),
            features,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let phi = self.coords.len();
        if self.ids.len() != phi || self.features.shape()[0] != phi {
            return Err(Error::ShapeMismatch {
                op: "sparse_voxel_set",
                left: vec![phi, self.ids.len()],
                right: self.features.shape().to_vec(),
            });
        }
        let mut seen_coords: Vec<[usize; 3]> = self.coords.clone();
        seen_coords.sort_unstable();
        seen_coords.dedup();
        let mut seen_ids: Vec<u64> = self.ids.clone();
        seen_ids.sort_unstable();
        seen_ids.dedup();
        if seen_coords.len() != phi || seen_ids.len() != phi {
            return Err(Error::InvalidConfig(
                "duplicate coords or ids in sparse voxel set".into(),
            ));
        }
        for c in &self.coords {
            if c.iter().zip(&self.extents).any(|(&v, &e)| v >= e) {
                return Err(Error::InvalidConfig(format!(
                    "coordinate {c:?} outside extents {:?}",
                    self.extents
                )));
            }
        }
        Ok(())
    }
}

/// Embed a centered volume: `F = Conv3D(X - b)`, bias-free.
///
/// Returns the `[H',W',D',C]` feature map. Patches whose centered input is
/// identically zero come out as bit-exact zero feature vectors.
pub fn embed_volume(
    tape: &Tape,
    volume: &DenseVolume,
    background: &[f64],
    weights: &Tensor,
    cfg: &EmbedConfig,
) -> Result<Tensor> {
    cfg.validate()?;
    let m = volume.modalities();
    if background.len() != m {
        return Err(Error::ShapeMismatch {
            op: "embed_volume",
            left: vec![background.len()],
            right: vec![m],
        });
    }
    let extents = volume.extents();
    if extents.iter().any(|&e| e < cfg.kernel) {
        return Err(Error::ExtentsTooSmall {
            extents,
            kernel: [cfg.kernel; 3],
        });
    }
    // Centering happens outside the tape: the volume is data, not a
    // parameter. x - b == +0.0 exactly wherever x == b.
    let centered: Vec<f64> = volume
        .intensities()
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| v - background[i % m])
        .collect();
    let x = Tensor::from_vec(
        vec![extents[0], extents[1], extents[2], m],
        centered,
    )?;
    tape.conv3d(&x, weights, cfg.stride, 0)
}

/// Hard occupancy: bit set iff the feature norm exceeds ε.
pub fn compute_occupancy(features: &Tensor, cfg: &EmbedConfig) -> Result<OccupancyMap> {
    let sh = features.shape();
    if sh.len() != 4 {
        return Err(Error::ShapeMismatch {
            op: "compute_occupancy",
            left: sh.to_vec(),
            right: vec![],
        });
    }
    let extents = [sh[0], sh[1], sh[2]];
    let c = sh[3];
    let order = cfg.norm_order();
    let mut bits = Vec::with_capacity(extents.iter().product());
    for chunk in features.data().chunks_exact(c) {
        let norm = match order {
            NormOrder::L1 => chunk.iter().map(|v| v.abs()).sum::<f64>(),
            NormOrder::L2 => chunk.iter().map(|v| v * v).sum::<f64>().sqrt(),
        };
        bits.push(norm > cfg.epsilon);
    }
    Ok(OccupancyMap { extents, bits })
}

/// Gather the features of occupied cells into a [`SparseVoxelSet`].
pub fn voxelize(tape: &Tape, features: &Tensor, occupancy: &OccupancyMap) -> Result<SparseVoxelSet> {
    let sh = features.shape();
    if sh.len() != 4 || [sh[0], sh[1], sh[2]] != occupancy.extents {
        return Err(Error::ShapeMismatch {
            op: "voxelize",
            left: sh.to_vec(),
            right: occupancy.extents.to_vec(),
        });
    }
    let c = sh[3];
    let mut coords = Vec::new();
    let mut rows = Vec::new();
    // Lexicographic (x, y, z) scan; ids are the scan positions.
    for x in 0..occupancy.extents[0] {
        for y in 0..occupancy.extents[1] {
            for z in 0..occupancy.extents[2] {
                if occupancy.get(x, y, z) {
                    coords.push([x, y, z]);
                    rows.push((x * occupancy.extents[1] + y) * occupancy.extents[2] + z);
                }
            }
        }
    }
    let phi = coords.len();
    let flat = tape.reshape(features, vec![occupancy.len(), c])?;
    let features = if phi == 0 {
        Tensor::zeros(vec![0, c])
    } else {
        tape.gather_rows(&flat, &rows)?
    };
    let set = SparseVoxelSet {
        extents: occupancy.extents,
        coords,
        ids: (0..phi as u64).collect(),
        features,
    };
    set.validate()?;
    Ok(set)
}

/// Differentiable fraction of nonvoid voxels:
/// `r_nv = mean_i sigmoid((‖F(i)‖_p − ε)/τ)`.
pub fn soft_nonvoid_ratio(tape: &Tape, features: &Tensor, cfg: &EmbedConfig) -> Result<Tensor> {
    let sh = features.shape();
    let c = *sh.last().ok_or_else(|| Error::InvalidConfig("empty feature map".into()))?;
    let n: usize = sh.iter().product::<usize>() / c;
    if n == 0 {
        return Err(Error::InvalidConfig("no embedded voxels".into()));
    }
    let flat = tape.reshape(features, vec![n, c])?;
    let norms = tape.lp_norm_last(&flat, cfg.norm_order())?;
    let shifted = tape.mul_scalar(&tape.add_scalar(&norms, -cfg.epsilon)?, 1.0 / cfg.tau_soft)?;
    tape.mean_all(&tape.sigmoid(&shifted)?)
}

/// `L_total = L_seg + λ_nv · r_nv`.
pub fn total_loss(tape: &Tape, seg_loss: &Tensor, r_nv: &Tensor, lambda_nv: f64) -> Result<Tensor> {
    tape.add(seg_loss, &tape.mul_scalar(r_nv, lambda_nv)?)
}

// ── Sparsity statistics ──────────────────────────────────────────────

/// One row of the voxel-saving table.
#[derive(Clone, Debug, Serialize)]
pub struct SavingRow {
    pub name: String,
    pub non_zero_ratio_pct: f64,
    pub cropped_ratio_pct: f64,
    pub nonvoid_voxels_k: f64,
    pub traditional_voxels_k: f64,
    pub saving_pct: f64,
}

/// `1 - nonvoid / traditional`, in percent.
pub fn saving_percent(nonvoid: f64, traditional: f64) -> f64 {
    (1.0 - nonvoid / traditional) * 100.0
}

/// Fraction of voxels whose intensity differs from the background value, in
/// percent (any channel counts).
pub fn non_zero_ratio_pct(volume: &DenseVolume, background: &[f64]) -> f64 {
    let m = volume.modalities();
    let data = volume.intensities().data();
    let n = data.len() / m;
    let mut nz = 0usize;
    for v in 0..n {
        let row = &data[v * m..(v + 1) * m];
        if row.iter().enumerate().any(|(c, &val)| val != background[c]) {
            nz += 1;
        }
    }
    nz as f64 / n as f64 * 100.0
}

/// Fraction of voxels inside the minimum bounding box of all non-background
/// voxels, in percent. A fully background volume crops to nothing.
pub fn cropped_ratio_pct(volume: &DenseVolume, background: &[f64]) -> f64 {
    let m = volume.modalities();
    let [h, w, d] = volume.extents();
    let data = volume.intensities().data();
    let mut lo = [usize::MAX; 3];
    let mut hi = [0usize; 3];
    let mut any = false;
    for x in 0..h {
        for y in 0..w {
            for z in 0..d {
                let base = ((x * w + y) * d + z) * m;
                if (0..m).any(|c| data[base + c] != background[c]) {
                    any = true;
                    lo = [lo[0].min(x), lo[1].min(y), lo[2].min(z)];
                    hi = [hi[0].max(x), hi[1].max(y), hi[2].max(z)];
                }
            }
        }
    }
    if !any {
        return 0.0;
    }
    let bb = (hi[0] - lo[0] + 1) * (hi[1] - lo[1] + 1) * (hi[2] - lo[2] + 1);
    bb as f64 / (h * w * d) as f64 * 100.0
}

/// Per-volume statistics row: embeds, thresholds, and counts.
pub fn voxel_saving_row(
    name: &str,
    volume: &DenseVolume,
    weights: &Tensor,
    cfg: &EmbedConfig,
) -> Result<SavingRow> {
    let b = volume.derive_background_constant()?;
    let tape = Tape::new();
    let feats = embed_volume(&tape, volume, &b, weights, cfg)?;
    let occ = compute_occupancy(&feats, cfg)?;
    let traditional = occ.len();
    let nonvoid = occ.popcount();
    Ok(SavingRow {
        name: name.to_string(),
        non_zero_ratio_pct: non_zero_ratio_pct(volume, &b),
        cropped_ratio_pct: cropped_ratio_pct(volume, &b),
        nonvoid_voxels_k: nonvoid as f64 / 1000.0,
        traditional_voxels_k: traditional as f64 / 1000.0,
        saving_pct: saving_percent(nonvoid as f64, traditional as f64),
    })
}

/// Statistics over a set of volumes plus an unweighted aggregate row.
pub fn voxel_saving_stats(
    volumes: &[(String, DenseVolume)],
    weights: &Tensor,
    cfg: &EmbedConfig,
) -> Result<Vec<SavingRow>> {
    if volumes.is_empty() {
        return Err(Error::EmptyVolumeSet);
    }
    let mut rows = Vec::with_capacity(volumes.len() + 1);
    for (name, vol) in volumes {
        rows.push(voxel_saving_row(name, vol, weights, cfg)?);
    }
    let k = rows.len() as f64;
    let mean = |f: fn(&SavingRow) -> f64| rows.iter().map(f).sum::<f64>() / k;
    rows.push(SavingRow {
        name: "aggregate".into(),
        non_zero_ratio_pct: mean(|r| r.non_zero_ratio_pct),
        cropped_ratio_pct: mean(|r| r.cropped_ratio_pct),
        nonvoid_voxels_k: mean(|r| r.nonvoid_voxels_k),
        traditional_voxels_k: mean(|r| r.traditional_voxels_k),
        saving_pct: mean(|r| r.saving_pct),
    });
    Ok(rows)
}

/// Table-1-style CSV: one row per volume plus the aggregate.
pub fn stats_to_csv(rows: &[SavingRow]) -> String {
    let mut out = String::from(
        "Dataset,Non-zero Ratio (%),Cropped Ratio (%),Nonvoid Voxels (k),Traditional Voxels (k),Embedded Voxel Saving (%)\n",
    );
    for r in rows {
        out.push_str(&format!(
            "{},{:.2},{:.2},{:.4},{:.4},{:.2}\n",
            r.name,
            r.non_zero_ratio_pct,
            r.cropped_ratio_pct,
            r.nonvoid_voxels_k,
            r.traditional_voxels_k,
            r.saving_pct
        ));
    }
    out
}

/// Saving as a function of ε over a strictly increasing grid.
pub fn epsilon_sweep(
    volume: &DenseVolume,
    weights: &Tensor,
    cfg: &EmbedConfig,
    grid: &[f64],
) -> Result<Vec<(f64, f64)>> {
    if grid.windows(2).any(|w| w[1] <= w[0]) || grid.iter().any(|&e| e <= 0.0) {
        return Err(Error::InvalidConfig(
            "epsilon grid must be strictly increasing and positive".into(),
        ));
    }
    let b = volume.derive_background_constant()?;
    let tape = Tape::new();
    let feats = embed_volume(&tape, volume, &b, weights, cfg)?;
    let mut curve = Vec::with_capacity(grid.len());
    for &eps in grid {
        let cfg_eps = EmbedConfig {
            epsilon: eps,
            ..cfg.clone()
        };
        let occ = compute_occupancy(&feats, &cfg_eps)?;
        curve.push((
            eps,
            saving_percent(occ.popcount() as f64, occ.len() as f64),
        ));
    }
    Ok(curve)
}
