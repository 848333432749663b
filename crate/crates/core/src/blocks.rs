//! Neural building blocks over sparse voxel sets: sinusoidal positional
//! embedding, multi-head attention, MLPs, the tri-directional window
//! transformer block, submanifold residual convolution, and the geometric
//! cross-attention down/up modules.
//!
//! All blocks are pure functions of (parameters, inputs) and differentiate
//! end to end through the tape. Per-voxel outputs depend only on voxel ids
//! and coordinates, never on storage order.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::defaults;
use crate::error::{Error, Result};
use crate::nonvoid::SparseVoxelSet;
use crate::partition::{axis_partition, partition_windows, Direction, WindowPartition};
use crate::tensor::{Tape, Tensor};

// ── Parameter plumbing ───────────────────────────────────────────────

/// How a parameter tensor is initialized.
#[derive(Clone, Copy, Debug)]
pub enum ParamInit {
    /// Uniform in ±1/sqrt(fan_in), fan_in = product of all but the last dim.
    UniformFanIn,
    Zero,
    One,
}

/// Shape + initializer of one parameter tensor.
#[derive(Clone, Debug)]
pub struct ParamDef {
    pub shape: Vec<usize>,
    pub init: ParamInit,
}

impl ParamDef {
    pub fn uniform(shape: Vec<usize>) -> Self {
        ParamDef {
            shape,
            init: ParamInit::UniformFanIn,
        }
    }

    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub fn total_len(defs: &[ParamDef]) -> usize {
    defs.iter().map(|d| d.len()).sum()
}

/// Fill a flat parameter vector according to `defs`, deterministically.
pub fn init_flat(defs: &[ParamDef], seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(total_len(defs));
    for def in defs {
        match def.init {
            ParamInit::UniformFanIn => {
                let fan_in: usize = def.shape[..def.shape.len() - 1].iter().product();
                let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
                out.extend((0..def.len()).map(|_| rng.gen_range(-bound..bound)));
            }
            ParamInit::Zero => out.extend(std::iter::repeat(0.0).take(def.len())),
            ParamInit::One => out.extend(std::iter::repeat(1.0).take(def.len())),
        }
    }
    out
}

/// Walks a flat parameter tensor, handing out reshaped slices in layout
/// order. Binding must consume defs in exactly the order they were declared.
pub struct ParamCursor<'a> {
    tape: &'a Tape,
    flat: &'a Tensor,
    offset: usize,
}

impl<'a> ParamCursor<'a> {
    pub fn new(tape: &'a Tape, flat: &'a Tensor) -> Self {
        ParamCursor {
            tape,
            flat,
            offset: 0,
        }
    }

    pub fn take(&mut self, shape: &[usize]) -> Result<Tensor> {
        let len: usize = shape.iter().product();
        let slice = self.tape.slice1d(self.flat, self.offset, len)?;
        self.offset += len;
        self.tape.reshape(&slice, shape.to_vec())
    }

    pub fn consumed(&self) -> usize {
        self.offset
    }
}

// ── Positional embedding ─────────────────────────────────────────────

/// Fixed 3D sinusoidal positional embedding: C/3 dims per axis, alternating
/// sin/cos at geometric frequencies 10000^(-6m/C). Deterministic and
/// parameter-free.
pub fn positional_embedding(coord: [usize; 3], channels: usize) -> Result<Vec<f64>> {
    if channels == 0 || channels % 6 != 0 {
        return Err(Error::InvalidConfig(format!(
            "positional embedding needs channels divisible by 6, got {channels}"
        )));
    }
    let per_axis = channels / 3;
    let pairs = channels / 6;
    let mut pe = vec![0.0; channels];
    for (axis, &x) in coord.iter().enumerate() {
        for m in 0..pairs {
            let freq = 10000f64.powf(-6.0 * m as f64 / channels as f64);
            let angle = x as f64 * freq;
            pe[axis * per_axis + 2 * m] = angle.sin();
            pe[axis * per_axis + 2 * m + 1] = angle.cos();
        }
    }
    Ok(pe)
}

/// Positional embeddings for a coordinate list as an untracked `[n, C]`
/// tensor.
pub fn pe_matrix(coords: &[[usize; 3]], channels: usize) -> Result<Tensor> {
    let mut data = Vec::with_capacity(coords.len() * channels);
    for &c in coords {
        data.extend(positional_embedding(c, channels)?);
    }
    Tensor::from_vec(vec![coords.len(), channels], data)
}

// ── Attention ────────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct AttentionConfig {
    pub channels: usize,
    pub heads: usize,
}

impl AttentionConfig {
    pub fn new(channels: usize, heads: usize) -> Result<Self> {
        if heads == 0 || channels % heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "heads {heads} must divide channels {channels}"
            )));
        }
        Ok(AttentionConfig { channels, heads })
    }

    pub fn head_dim(&self) -> usize {
        self.channels / self.heads
    }
}

/// Projection weights for Q, K, V and the output, all `[C, C]`, bias-free.
#[derive(Clone, Debug)]
pub struct AttentionParams {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
}

impl AttentionParams {
    pub fn defs(c: usize) -> Vec<ParamDef> {
        (0..4).map(|_| ParamDef::uniform(vec![c, c])).collect()
    }

    pub fn bind(cursor: &mut ParamCursor, c: usize) -> Result<Self> {
        Ok(AttentionParams {
            wq: cursor.take(&[c, c])?,
            wk: cursor.take(&[c, c])?,
            wv: cursor.take(&[c, c])?,
            wo: cursor.take(&[c, c])?,
        })
    }
}

/// Columns `start..start+len` of a 2D tensor.
fn slice_cols(tape: &Tape, x: &Tensor, start: usize, len: usize) -> Result<Tensor> {
    let xt = tape.transpose2(x)?;
    let rows: Vec<usize> = (start..start + len).collect();
    tape.transpose2(&tape.gather_rows(&xt, &rows)?)
}

/// Standard scaled dot-product multi-head attention with softmax over keys.
///
/// `q_in: [n_q, C]`, `k_in`/`v_in: [n_kv, C]`; output `[n_q, C]`.
pub fn multi_head_attention(
    tape: &Tape,
    q_in: &Tensor,
    k_in: &Tensor,
    v_in: &Tensor,
    params: &AttentionParams,
    cfg: &AttentionConfig,
) -> Result<Tensor> {
    let c = cfg.channels;
    if q_in.shape().len() != 2 || q_in.shape()[1] != c || k_in.shape() != v_in.shape() {
        return Err(Error::ShapeMismatch {
            op: "multi_head_attention",
            left: q_in.shape().to_vec(),
            right: k_in.shape().to_vec(),
        });
    }
    let n_q = q_in.shape()[0];
    let n_kv = k_in.shape()[0];
    if n_kv == 0 {
        return Err(Error::InvalidConfig("attention needs n_kv >= 1".into()));
    }
    let q = tape.matmul(q_in, &params.wq)?;
    let k = tape.matmul(k_in, &params.wk)?;
    let v = tape.matmul(v_in, &params.wv)?;
    let d = cfg.head_dim();
    let scale = 1.0 / (d as f64).sqrt();
    let mut ctx_t: Option<Tensor> = None;
    for h in 0..cfg.heads {
        let qh = slice_cols(tape, &q, h * d, d)?; // [n_q, d]
        let kh = slice_cols(tape, &k, h * d, d)?; // [n_kv, d]
        let vh = slice_cols(tape, &v, h * d, d)?; // [n_kv, d]
        let logits = tape.mul_scalar(&tape.matmul(&qh, &tape.transpose2(&kh)?)?, scale)?;
        let weights = tape.softmax(&logits)?; // [n_q, n_kv]
        let ctx_h = tape.matmul(&weights, &vh)?; // [n_q, d]
        // Write this head's columns into the [C, n_q] accumulator.
        let rows: Vec<usize> = (h * d..(h + 1) * d).collect();
        let placed = tape.scatter_rows(&tape.transpose2(&ctx_h)?, &rows, c)?;
        ctx_t = Some(match ctx_t {
            Some(acc) => tape.add(&acc, &placed)?,
            None => placed,
        });
    }
    let ctx = tape.transpose2(&ctx_t.expect("heads >= 1"))?;
    debug_assert_eq!(ctx.shape(), &[n_q, c]);
    tape.matmul(&ctx, &params.wo)
}

// ── MLP and layer norm ───────────────────────────────────────────────

/// Two-layer MLP with GELU, bias-free: `[n, in] -> [n, out]`.
#[derive(Clone, Debug)]
pub struct MlpParams {
    pub w1: Tensor,
    pub w2: Tensor,
}

impl MlpParams {
    pub fn defs(c_in: usize, hidden: usize, c_out: usize) -> Vec<ParamDef> {
        vec![
            ParamDef::uniform(vec![c_in, hidden]),
            ParamDef::uniform(vec![hidden, c_out]),
        ]
    }

    pub fn bind(cursor: &mut ParamCursor, c_in: usize, hidden: usize, c_out: usize) -> Result<Self> {
        Ok(MlpParams {
            w1: cursor.take(&[c_in, hidden])?,
            w2: cursor.take(&[hidden, c_out])?,
        })
    }

    pub fn apply(&self, tape: &Tape, x: &Tensor) -> Result<Tensor> {
        tape.matmul(&tape.gelu(&tape.matmul(x, &self.w1)?)?, &self.w2)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNormParams {
    pub gamma: Tensor,
    pub beta: Tensor,
}

impl LayerNormParams {
    pub fn defs(c: usize) -> Vec<ParamDef> {
        vec![
            ParamDef {
                shape: vec![c],
                init: ParamInit::One,
            },
            ParamDef {
                shape: vec![c],
                init: ParamInit::Zero,
            },
        ]
    }

    pub fn bind(cursor: &mut ParamCursor, c: usize) -> Result<Self> {
        Ok(LayerNormParams {
            gamma: cursor.take(&[c])?,
            beta: cursor.take(&[c])?,
        })
    }

    pub fn apply(&self, tape: &Tape, x: &Tensor) -> Result<Tensor> {
        tape.layer_norm(x, &self.gamma, &self.beta, defaults::LAYER_NORM_EPS)
    }
}

// ── Tri-directional window transformer block ─────────────────────────

/// One directional sublayer: pre-norm attention + pre-norm MLP.
#[derive(Clone, Debug)]
pub struct TdnvtDirectionParams {
    pub ln_attn: LayerNormParams,
    pub attn: AttentionParams,
    pub ln_mlp: LayerNormParams,
    pub mlp: MlpParams,
}

/// Parameters of a full tri-directional block, one sublayer per direction in
/// fixed XY -> XZ -> YZ order.
#[derive(Clone, Debug)]
pub struct TdnvtParams {
    pub directions: Vec<TdnvtDirectionParams>,
}

impl TdnvtParams {
    pub fn defs(c: usize) -> Vec<ParamDef> {
        let hidden = c * defaults::MLP_EXPANSION;
        let mut defs = Vec::new();
        for _ in 0..3 {
            defs.extend(LayerNormParams::defs(c));
            defs.extend(AttentionParams::defs(c));
            defs.extend(LayerNormParams::defs(c));
            defs.extend(MlpParams::defs(c, hidden, c));
        }
        defs
    }

    pub fn bind(cursor: &mut ParamCursor, c: usize) -> Result<Self> {
        let hidden = c * defaults::MLP_EXPANSION;
        let mut directions = Vec::with_capacity(3);
        for _ in 0..3 {
            directions.push(TdnvtDirectionParams {
                ln_attn: LayerNormParams::bind(cursor, c)?,
                attn: AttentionParams::bind(cursor, c)?,
                ln_mlp: LayerNormParams::bind(cursor, c)?,
                mlp: MlpParams::bind(cursor, c, hidden, c)?,
            });
        }
        Ok(TdnvtParams { directions })
    }
}

/// Tri-directional dynamic window attention over a whole level.
///
/// For each direction in fixed order: sort every window's voxels along the
/// direction axis, chunk into subsets of at most `tau_cap`, and run
/// pre-norm self-attention (queries, keys and values all carry positional
/// embeddings) plus a pre-norm MLP on each subset. Features are written back
/// by voxel id; storage order never matters.
pub fn tdnvt_block(
    tape: &Tape,
    voxels: &SparseVoxelSet,
    partition: &WindowPartition,
    params: &TdnvtParams,
    cfg: &AttentionConfig,
    tau_cap: usize,
) -> Result<SparseVoxelSet> {
    let phi = voxels.len();
    if phi == 0 {
        return Ok(voxels.clone());
    }
    let mut features = voxels.features.clone();
    for (direction, dparams) in Direction::ALL.iter().zip(&params.directions) {
        let mut updated: Option<Tensor> = None;
        for window in partition.iter() {
            let subsets = axis_partition(voxels, &window, *direction, tau_cap)?;
            for rows in &subsets.subsets {
                let x_s = tape.gather_rows(&features, rows)?;
                let coords: Vec<[usize; 3]> = rows.iter().map(|&r| voxels.coords[r]).collect();
                let pe = pe_matrix(&coords, cfg.channels)?;
                let qkv = tape.add(&dparams.ln_attn.apply(tape, &x_s)?, &pe)?;
                let attn = multi_head_attention(tape, &qkv, &qkv, &qkv, &dparams.attn, cfg)?;
                let y = tape.add(&x_s, &attn)?;
                let z = tape.add(&y, &dparams.mlp.apply(tape, &dparams.ln_mlp.apply(tape, &y)?)?)?;
                let placed = tape.scatter_rows(&z, rows, phi)?;
                updated = Some(match updated {
                    Some(acc) => tape.add(&acc, &placed)?,
                    None => placed,
                });
            }
        }
        // Subsets are disjoint and cover every voxel, so the scatter sum is
        // a complete in-place update.
        features = updated.expect("nonempty voxel set");
    }
    voxels.with_features(features)
}

// ── Residual submanifold convolution ─────────────────────────────────

#[derive(Clone, Debug)]
pub struct SparseConvParams {
    pub kernel: usize,
    pub w1: Tensor,
    pub ln1: LayerNormParams,
    pub w2: Tensor,
    pub ln2: LayerNormParams,
}

impl SparseConvParams {
    pub fn defs(c: usize, kernel: usize) -> Vec<ParamDef> {
        let k3 = kernel * kernel * kernel;
        let mut defs = vec![ParamDef::uniform(vec![k3 * c, c])];
        defs.extend(LayerNormParams::defs(c));
        defs.push(ParamDef::uniform(vec![k3 * c, c]));
        defs.extend(LayerNormParams::defs(c));
        defs
    }

    pub fn bind(cursor: &mut ParamCursor, c: usize, kernel: usize) -> Result<Self> {
        let k3 = kernel * kernel * kernel;
        Ok(SparseConvParams {
            kernel,
            w1: cursor.take(&[k3 * c, c])?,
            ln1: LayerNormParams::bind(cursor, c)?,
            w2: cursor.take(&[k3 * c, c])?,
            ln2: LayerNormParams::bind(cursor, c)?,
        })
    }
}

/// One submanifold convolution: outputs exist only at input sites; absent
/// neighbors contribute nothing (they are zero).
fn submanifold_conv(
    tape: &Tape,
    voxels: &SparseVoxelSet,
    features: &Tensor,
    weights: &Tensor,
    kernel: usize,
) -> Result<Tensor> {
    let phi = voxels.len();
    let c = voxels.channels();
    let half = (kernel / 2) as isize;
    let lookup: HashMap<[usize; 3], usize> = voxels
        .coords
        .iter()
        .enumerate()
        .map(|(row, &coord)| (coord, row))
        .collect();
    let mut out: Option<Tensor> = None;
    let mut offset_index = 0usize;
    for dx in -half..=half {
        for dy in -half..=half {
            for dz in -half..=half {
                let mut dst = Vec::new();
                let mut src = Vec::new();
                for (row, &coord) in voxels.coords.iter().enumerate() {
                    let n = [
                        coord[0] as isize + dx,
                        coord[1] as isize + dy,
                        coord[2] as isize + dz,
                    ];
                    if n.iter().any(|&v| v < 0)
                        || n.iter()
                            .zip(&voxels.extents)
                            .any(|(&v, &e)| v as usize >= e)
                    {
                        continue;
                    }
                    if let Some(&nrow) = lookup.get(&[n[0] as usize, n[1] as usize, n[2] as usize])
                    {
                        dst.push(row);
                        src.push(nrow);
                    }
                }
                if !dst.is_empty() {
                    // Weight block of this offset: rows [o*C, (o+1)*C).
                    let wrows: Vec<usize> = (offset_index * c..(offset_index + 1) * c).collect();
                    let w_o = tape.gather_rows(weights, &wrows)?;
                    let contrib = tape.matmul(&tape.gather_rows(features, &src)?, &w_o)?;
                    let placed = tape.scatter_rows(&contrib, &dst, phi)?;
                    out = Some(match out {
                        Some(acc) => tape.add(&acc, &placed)?,
                        None => placed,
                    });
                }
                offset_index += 1;
            }
        }
    }
    match out {
        Some(t) => Ok(t),
        None => Ok(Tensor::zeros(vec![phi, c])),
    }
}

/// Residual block of two (conv, norm, activation) stages plus an identity
/// skip. Zeroed convolution kernels make it an exact identity on features.
pub fn residual_sparse_conv(
    tape: &Tape,
    voxels: &SparseVoxelSet,
    params: &SparseConvParams,
) -> Result<SparseVoxelSet> {
    if voxels.is_empty() {
        return Ok(voxels.clone());
    }
    let x = &voxels.features;
    let c1 = submanifold_conv(tape, voxels, x, &params.w1, params.kernel)?;
    let a1 = tape.gelu(&params.ln1.apply(tape, &c1)?)?;
    let c2 = submanifold_conv(tape, voxels, &a1, &params.w2, params.kernel)?;
    let n2 = params.ln2.apply(tape, &c2)?;
    voxels.with_features(tape.add(x, &n2)?)
}

// ── Geometric cross-attention ────────────────────────────────────────

#[derive(Clone, Debug)]
pub struct GcaDownParams {
    pub kv_mlp: MlpParams,
    pub attn: AttentionParams,
}

impl GcaDownParams {
    pub fn defs(c: usize) -> Vec<ParamDef> {
        let hidden = c * defaults::MLP_EXPANSION;
        let mut defs = MlpParams::defs(c, hidden, c);
        defs.extend(AttentionParams::defs(c));
        defs
    }

    pub fn bind(cursor: &mut ParamCursor, c: usize) -> Result<Self> {
        let hidden = c * defaults::MLP_EXPANSION;
        Ok(GcaDownParams {
            kv_mlp: MlpParams::bind(cursor, c, hidden, c)?,
            attn: AttentionParams::bind(cursor, c)?,
        })
    }
}

/// Ceil division of extents by the pooling stride.
fn coarse_extents(extents: [usize; 3], s_pool: usize) -> [usize; 3] {
    [
        extents[0].div_ceil(s_pool),
        extents[1].div_ceil(s_pool),
        extents[2].div_ceil(s_pool),
    ]
}

/// Geometry-aware downsampling: one coarse voxel per nonempty pooling
/// window.
///
/// Per window: elementwise max over member features gives the pooled vector;
/// cross-attention then refines it with the pooled vector (plus coarse-grid
/// positional embedding) as the query and the members' embedded features as
/// keys/values. The coarse voxel sits at the window index and inherits the
/// smallest member id.
pub fn gca_down(
    tape: &Tape,
    voxels: &SparseVoxelSet,
    s_pool: usize,
    params: &GcaDownParams,
    cfg: &AttentionConfig,
) -> Result<SparseVoxelSet> {
    let partition = partition_windows(voxels, s_pool)?;
    let n_windows = partition.window_count();
    let c = cfg.channels;
    let mut coords = Vec::with_capacity(n_windows);
    let mut ids = Vec::with_capacity(n_windows);
    let mut pooled_rows: Option<Tensor> = None;
    for (w_idx, window) in partition.iter().enumerate() {
        let members = tape.gather_rows(&voxels.features, &window.rows)?; // [P, C]
        // Eq-style max pool: elementwise max over the P member vectors.
        let pooled = tape.reshape(&tape.max_last(&tape.transpose2(&members)?)?, vec![1, c])?;
        let coarse_coord = window.index;
        let q = tape.add(&pooled, &pe_matrix(&[coarse_coord], c)?)?;
        let member_coords: Vec<[usize; 3]> =
            window.rows.iter().map(|&r| voxels.coords[r]).collect();
        let kv_in = tape.add(&members, &pe_matrix(&member_coords, c)?)?;
        let kv = params.kv_mlp.apply(tape, &kv_in)?;
        let out = multi_head_attention(tape, &q, &kv, &kv, &params.attn, cfg)?; // [1, C]
        let placed = tape.scatter_rows(&out, &[w_idx], n_windows)?;
        pooled_rows = Some(match pooled_rows {
            Some(acc) => tape.add(&acc, &placed)?,
            None => placed,
        });
        coords.push(coarse_coord);
        ids.push(
            window
                .rows
                .iter()
                .map(|&r| voxels.ids[r])
                .min()
                .expect("window nonempty"),
        );
    }
    let features = match pooled_rows {
        Some(t) => t,
        None => Tensor::zeros(vec![0, c]),
    };
    let set = SparseVoxelSet {
        extents: coarse_extents(voxels.extents, s_pool),
        coords,
        ids,
        features,
    };
    set.validate()?;
    Ok(set)
}

#[derive(Clone, Debug)]
pub struct GcaUpParams {
    pub q_mlp: MlpParams,
    pub attn: AttentionParams,
    pub out_mlp: MlpParams,
}

impl GcaUpParams {
    /// `c_fine` is the encoder level's width, `c_coarse` the decoder's; the
    /// query MLP aligns fine features to the coarse width and the output MLP
    /// maps the fused context back.
    pub fn defs(c_fine: usize, c_coarse: usize) -> Vec<ParamDef> {
        let mut defs = MlpParams::defs(c_fine, c_fine * defaults::MLP_EXPANSION, c_coarse);
        defs.extend(AttentionParams::defs(c_coarse));
        defs.extend(MlpParams::defs(
            c_coarse,
            c_coarse * defaults::MLP_EXPANSION,
            c_fine,
        ));
        defs
    }

    pub fn bind(cursor: &mut ParamCursor, c_fine: usize, c_coarse: usize) -> Result<Self> {
        Ok(GcaUpParams {
            q_mlp: MlpParams::bind(cursor, c_fine, c_fine * defaults::MLP_EXPANSION, c_coarse)?,
            attn: AttentionParams::bind(cursor, c_coarse)?,
            out_mlp: MlpParams::bind(
                cursor,
                c_coarse,
                c_coarse * defaults::MLP_EXPANSION,
                c_fine,
            )?,
        })
    }
}

/// Geometry-aware upsampling: every fine encoder voxel queries the coarse
/// decoder voxel of its pooling window; coords and ids are preserved.
pub fn gca_up(
    tape: &Tape,
    fine: &SparseVoxelSet,
    coarse: &SparseVoxelSet,
    s_pool: usize,
    params: &GcaUpParams,
    cfg_coarse: &AttentionConfig,
) -> Result<SparseVoxelSet> {
    let phi = fine.len();
    if phi == 0 {
        return Ok(fine.clone());
    }
    let c_fine = fine.channels();
    let coarse_lookup: HashMap<[usize; 3], usize> = coarse
        .coords
        .iter()
        .enumerate()
        .map(|(row, &coord)| (coord, row))
        .collect();
    // Group fine rows by their pooling window, in deterministic order.
    let partition = partition_windows(fine, s_pool)?;
    let mut updated: Option<Tensor> = None;
    for window in partition.iter() {
        let coarse_row = *coarse_lookup.get(&window.index).ok_or(
            Error::MissingCoarseCounterpart {
                window: window.index,
            },
        )?;
        let member_coords: Vec<[usize; 3]> =
            window.rows.iter().map(|&r| fine.coords[r]).collect();
        let fine_feats = tape.gather_rows(&fine.features, &window.rows)?;
        let q_in = tape.add(&fine_feats, &pe_matrix(&member_coords, c_fine)?)?;
        let q = params.q_mlp.apply(tape, &q_in)?; // [P, C_coarse]
        let coarse_feat = tape.gather_rows(&coarse.features, &[coarse_row])?;
        let kv = tape.add(
            &coarse_feat,
            &pe_matrix(&[coarse.coords[coarse_row]], cfg_coarse.channels)?,
        )?;
        let fused = multi_head_attention(tape, &q, &kv, &kv, &params.attn, cfg_coarse)?;
        let out = params.out_mlp.apply(tape, &fused)?; // [P, C_fine]
        let placed = tape.scatter_rows(&out, &window.rows, phi)?;
        updated = Some(match updated {
            Some(acc) => tape.add(&acc, &placed)?,
            None => placed,
        });
    }
    fine.with_features(updated.expect("nonempty fine set"))
}
