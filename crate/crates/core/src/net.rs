//! Full network assembly: bias-free embedding, occupancy extraction, a
//! hierarchical encoder (feature blocks + geometric cross-attention
//! downsampling), a decoder fusing skip levels, and the dense segmentation
//! head. Plus the combined Dice + cross-entropy loss, a plain
//! gradient-descent toy training loop, and exact FLOP accounting.
//!
//! FLOP convention: one multiply-accumulate = 2 FLOPs; only MAC-bearing ops
//! are counted (matmuls, convolutions at occupied sites, attention scores
//! and value mixing). Normalizations, softmax and activations carry no MACs
//! and are excluded. Attention cost derives from exact query-key pair
//! counts; convolution cost from occupied-site counts with the full kernel.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::blocks::{
    init_flat, total_len, AttentionConfig, GcaDownParams, GcaUpParams, ParamCursor, ParamDef,
    SparseConvParams, TdnvtParams,
};
use crate::defaults;
use crate::error::{Error, Result};
use crate::nonvoid::{
    compute_occupancy, embed_volume, soft_nonvoid_ratio, total_loss, voxelize, EmbedConfig,
    OccupancyMap, SparseVoxelSet,
};
use crate::partition::{partition_windows, subset_count, WindowPartition};
use crate::tensor::{Tape, Tensor};
use crate::volume::{DenseVolume, Phantom};

/// Architecture description. `stages` counts resolution levels; pooling
/// happens between consecutive levels, so there are `stages - 1` GCA-Down /
/// GCA-Up pairs.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModelConfig {
    pub stages: usize,
    /// Channels per level; length == stages.
    pub channels: Vec<usize>,
    /// Attention window size per level.
    pub window: Vec<usize>,
    /// Subset capacity per level.
    pub tau_cap: Vec<usize>,
    pub s_pool: usize,
    pub classes: usize,
    pub heads: usize,
    /// Levels below this index use residual sparse convolution; the rest use
    /// tri-directional window attention.
    pub conv_levels: usize,
    pub sparse_conv_kernel: usize,
    pub embed: EmbedConfig,
    pub seed: u64,
}

impl ModelConfig {
    /// Two levels, small channels; every acceptance run finishes in minutes
    /// on one core.
    pub fn toy(seed: u64) -> Self {
        ModelConfig {
            stages: defaults::TOY_STAGES,
            channels: defaults::TOY_CHANNELS.to_vec(),
            window: defaults::TOY_WINDOW.to_vec(),
            tau_cap: defaults::TOY_SUBSET_CAPACITY.to_vec(),
            s_pool: defaults::S_POOL,
            classes: defaults::TOY_CLASSES,
            heads: defaults::HEADS,
            conv_levels: 1,
            sparse_conv_kernel: defaults::SPARSE_CONV_KERNEL,
            embed: EmbedConfig::default(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.embed.validate()?;
        if self.stages == 0
            || self.channels.len() != self.stages
            || self.window.len() != self.stages
            || self.tau_cap.len() != self.stages
        {
            return Err(Error::InvalidConfig(format!(
                "channels/window/tau_cap must each have one entry per stage ({})",
                self.stages
            )));
        }
        if self.channels[0] != self.embed.channels {
            return Err(Error::InvalidConfig(
                "embed.channels must equal channels[0]".into(),
            ));
        }
        for &c in &self.channels {
            if c % 6 != 0 {
                return Err(Error::InvalidConfig(format!(
                    "channels must be divisible by 6 (positional embedding), got {c}"
                )));
            }
            if c % self.heads != 0 {
                return Err(Error::InvalidConfig(format!(
                    "channels {c} must be divisible by heads {}",
                    self.heads
                )));
            }
        }
        if self.window.iter().any(|&t| t == 0) || self.tau_cap.iter().any(|&t| t == 0) {
            return Err(Error::InvalidConfig("window and tau_cap must be >= 1".into()));
        }
        if self.s_pool < 2 {
            return Err(Error::InvalidConfig("s_pool must be >= 2".into()));
        }
        if self.classes < 2 {
            return Err(Error::InvalidConfig("need at least 2 classes".into()));
        }
        if self.sparse_conv_kernel % 2 == 0 {
            return Err(Error::InvalidConfig(
                "sparse_conv_kernel must be odd".into(),
            ));
        }
        Ok(())
    }

    /// Embedded grid extents, checking kernel/stride/pool divisibility.
    pub fn grid_extents(&self, volume_extents: [usize; 3]) -> Result<[usize; 3]> {
        let (k, s) = (self.embed.kernel, self.embed.stride);
        let mut grid = [0usize; 3];
        for (g, &e) in grid.iter_mut().zip(&volume_extents) {
            if e < k || (e - k) % s != 0 {
                return Err(Error::ExtentsTooSmall {
                    extents: volume_extents,
                    kernel: [k; 3],
                });
            }
            *g = (e - k) / s + 1;
        }
        let pool_factor = self.s_pool.pow(self.stages as u32 - 1);
        if grid.iter().any(|&g| g % pool_factor != 0) {
            return Err(Error::IndivisibleExtents {
                extents: grid,
                required: pool_factor,
            });
        }
        Ok(grid)
    }

    fn attention_cfg(&self, level: usize) -> Result<AttentionConfig> {
        AttentionConfig::new(self.channels[level], self.heads)
    }

    /// Full parameter layout in binding order.
    pub fn param_defs(&self, modalities: usize) -> Vec<ParamDef> {
        let mut defs = Vec::new();
        // Embedding kernel: uniform fan-in is exactly ±1/sqrt(k^3 M).
        defs.push(ParamDef::uniform(vec![
            self.embed.kernel,
            self.embed.kernel,
            self.embed.kernel,
            modalities,
            self.channels[0],
        ]));
        // Learned fill logits for void grid cells.
        defs.push(ParamDef {
            shape: vec![self.classes],
            init: crate::blocks::ParamInit::Zero,
        });
        // Encoder blocks per level.
        for level in 0..self.stages {
            defs.extend(self.block_defs(level));
        }
        // Downsampling transitions.
        for level in 0..self.stages - 1 {
            defs.extend(GcaDownParams::defs(self.channels[level]));
            defs.push(ParamDef::uniform(vec![
                self.channels[level],
                self.channels[level + 1],
            ]));
        }
        // Decoder: fusion + block per level, deepest first.
        for level in (0..self.stages - 1).rev() {
            defs.extend(GcaUpParams::defs(
                self.channels[level],
                self.channels[level + 1],
            ));
            defs.extend(self.block_defs(level));
        }
        // Segmentation head.
        defs.push(ParamDef::uniform(vec![self.channels[0], self.classes]));
        defs
    }

    fn block_defs(&self, level: usize) -> Vec<ParamDef> {
        if level < self.conv_levels {
            SparseConvParams::defs(self.channels[level], self.sparse_conv_kernel)
        } else {
            TdnvtParams::defs(self.channels[level])
        }
    }

    pub fn param_len(&self, modalities: usize) -> usize {
        total_len(&self.param_defs(modalities))
    }

    pub fn init_params(&self, modalities: usize) -> Vec<f64> {
        init_flat(&self.param_defs(modalities), self.seed)
    }
}

/// Either of the two per-level feature blocks.
enum BlockParams {
    Conv(SparseConvParams),
    Tdnvt(TdnvtParams),
}

struct BoundParams {
    embed_kernel: Tensor,
    fill_logits: Tensor,
    encoder_blocks: Vec<BlockParams>,
    downs: Vec<(GcaDownParams, Tensor)>,
    ups: Vec<(GcaUpParams, BlockParams)>,
    head: Tensor,
}

fn bind_block(
    cursor: &mut ParamCursor,
    cfg: &ModelConfig,
    level: usize,
) -> Result<BlockParams> {
    Ok(if level < cfg.conv_levels {
        BlockParams::Conv(SparseConvParams::bind(
            cursor,
            cfg.channels[level],
            cfg.sparse_conv_kernel,
        )?)
    } else {
        BlockParams::Tdnvt(TdnvtParams::bind(cursor, cfg.channels[level])?)
    })
}

fn bind_params(
    tape: &Tape,
    theta: &Tensor,
    cfg: &ModelConfig,
    modalities: usize,
) -> Result<BoundParams> {
    let mut cursor = ParamCursor::new(tape, theta);
    let embed_kernel = cursor.take(&[
        cfg.embed.kernel,
        cfg.embed.kernel,
        cfg.embed.kernel,
        modalities,
        cfg.channels[0],
    ])?;
    let fill_logits = cursor.take(&[cfg.classes])?;
    let mut encoder_blocks = Vec::with_capacity(cfg.stages);
    for level in 0..cfg.stages {
        encoder_blocks.push(bind_block(&mut cursor, cfg, level)?);
    }
    let mut downs = Vec::with_capacity(cfg.stages - 1);
    for level in 0..cfg.stages - 1 {
        let gca = GcaDownParams::bind(&mut cursor, cfg.channels[level])?;
        let expand = cursor.take(&[cfg.channels[level], cfg.channels[level + 1]])?;
        downs.push((gca, expand));
    }
    let mut ups = Vec::with_capacity(cfg.stages - 1);
    for level in (0..cfg.stages - 1).rev() {
        let gca = GcaUpParams::bind(&mut cursor, cfg.channels[level], cfg.channels[level + 1])?;
        let block = bind_block(&mut cursor, cfg, level)?;
        ups.push((gca, block));
    }
    let head = cursor.take(&[cfg.channels[0], cfg.classes])?;
    debug_assert_eq!(cursor.consumed(), theta.numel());
    Ok(BoundParams {
        embed_kernel,
        fill_logits,
        encoder_blocks,
        downs,
        ups,
        head,
    })
}

// ── Cost accounting ──────────────────────────────────────────────────

pub fn matmul_flops(m: usize, k: usize, n: usize) -> u64 {
    2 * (m as u64) * (k as u64) * (n as u64)
}

fn mlp_flops(rows: usize, c_in: usize, hidden: usize, c_out: usize) -> u64 {
    matmul_flops(rows, c_in, hidden) + matmul_flops(rows, hidden, c_out)
}

/// Projections for Q and output on `n_q` rows, K and V on `n_kv` rows, plus
/// 4C FLOPs per query-key pair (score dot product and value mixing).
fn attention_flops(n_q: usize, n_kv: usize, c: usize) -> u64 {
    matmul_flops(n_q, c, c) * 2
        + matmul_flops(n_kv, c, c) * 2
        + 4 * (c as u64) * (n_q as u64) * (n_kv as u64)
}

#[derive(Clone, Debug, Serialize)]
pub struct LayerCost {
    pub layer: String,
    pub flops: u64,
}

/// Exact cost counters of one forward pass.
#[derive(Clone, Debug, Default, Serialize)]
pub struct CostCounters {
    pub layers: Vec<LayerCost>,
    pub attention_pairs: u64,
    pub total_flops: u64,
}

impl CostCounters {
    fn add(&mut self, layer: impl Into<String>, flops: u64) {
        self.layers.push(LayerCost {
            layer: layer.into(),
            flops,
        });
        self.total_flops += flops;
    }
}

/// Occupancy selection: the nonvoid path keeps cells whose feature norm
/// clears ε; the dense-forced path keeps every cell (classical
/// voxelization).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OccupancyMode {
    Nonvoid,
    DenseForced,
}

// ── Forward pass ─────────────────────────────────────────────────────

/// Dense per-voxel class scores.
#[derive(Clone, Debug)]
pub struct Prediction {
    /// `[H, W, D, classes]`, tape-tracked.
    pub logits: Tensor,
    /// Softmax of the logits, same shape.
    pub probabilities: Tensor,
}

pub struct ForwardOutput {
    pub prediction: Prediction,
    /// Encoder sparse sets, one per level (level 0 first).
    pub levels: Vec<SparseVoxelSet>,
    /// Soft nonvoid ratio of the embedding feature map (tape-tracked).
    pub soft_ratio: Tensor,
    pub occupancy: OccupancyMap,
    pub counters: CostCounters,
}

fn apply_block(
    tape: &Tape,
    voxels: &SparseVoxelSet,
    block: &BlockParams,
    cfg: &ModelConfig,
    level: usize,
    counters: &mut CostCounters,
    label: &str,
) -> Result<SparseVoxelSet> {
    let phi = voxels.len();
    let c = cfg.channels[level];
    match block {
        BlockParams::Conv(params) => {
            let out = crate::blocks::residual_sparse_conv(tape, voxels, params)?;
            let k3 = cfg.sparse_conv_kernel.pow(3);
            counters.add(
                format!("{label}/residual_sparse_conv"),
                2 * (phi as u64) * 2 * (k3 as u64) * (c as u64) * (c as u64),
            );
            Ok(out)
        }
        BlockParams::Tdnvt(params) => {
            let partition = partition_windows(voxels, cfg.window[level])?;
            let acfg = cfg.attention_cfg(level)?;
            let out = crate::blocks::tdnvt_block(
                tape,
                voxels,
                &partition,
                params,
                &acfg,
                cfg.tau_cap[level],
            )?;
            let mut flops = 0u64;
            let mut pairs = 0u64;
            for phi_j in partition.occupancies() {
                for _dir in 0..3 {
                    let s_j = subset_count(phi_j, cfg.tau_cap[level]);
                    for s in 0..s_j {
                        let len = if s + 1 < s_j {
                            cfg.tau_cap[level]
                        } else {
                            phi_j - (s_j - 1) * cfg.tau_cap[level]
                        };
                        pairs += (len as u64).pow(2);
                        flops += attention_flops(len, len, c);
                        flops += mlp_flops(len, c, c * defaults::MLP_EXPANSION, c);
                    }
                }
            }
            counters.attention_pairs += pairs;
            counters.add(format!("{label}/tdnvt"), flops);
            Ok(out)
        }
    }
}

fn pooling_costs(
    partition: &WindowPartition,
    c: usize,
    counters: &mut CostCounters,
    label: &str,
) {
    let mut flops = 0u64;
    let mut pairs = 0u64;
    for p in partition.occupancies() {
        flops += mlp_flops(p, c, c * defaults::MLP_EXPANSION, c);
        flops += attention_flops(1, p, c);
        pairs += p as u64;
    }
    counters.attention_pairs += pairs;
    counters.add(format!("{label}/gca_down"), flops);
}

/// Run the network. Deterministic given (volume, cfg, theta, mode); the
/// sparse sets it returns are ordered by the extraction scan, independent of
/// any intermediate storage order.
pub fn forward(
    tape: &Tape,
    volume: &DenseVolume,
    cfg: &ModelConfig,
    theta: &Tensor,
    mode: OccupancyMode,
) -> Result<ForwardOutput> {
    cfg.validate()?;
    let grid = cfg.grid_extents(volume.extents())?;
    let params = bind_params(tape, theta, cfg, volume.modalities())?;
    let mut counters = CostCounters::default();

    // Embedding runs densely in both modes: occupancy is decided after it.
    let background = volume.derive_background_constant()?;
    let feats = embed_volume(tape, volume, &background, &params.embed_kernel, &cfg.embed)?;
    let n_grid: usize = grid.iter().product();
    counters.add(
        "embed_conv",
        (n_grid as u64)
            * 2
            * (cfg.embed.kernel.pow(3) as u64)
            * (volume.modalities() as u64)
            * (cfg.channels[0] as u64),
    );

    let soft_ratio = soft_nonvoid_ratio(tape, &feats, &cfg.embed)?;
    let occupancy = match mode {
        OccupancyMode::Nonvoid => compute_occupancy(&feats, &cfg.embed)?,
        OccupancyMode::DenseForced => OccupancyMap::all_ones(grid),
    };
    let level0 = voxelize(tape, &feats, &occupancy)?;

    // Encoder.
    let mut levels: Vec<SparseVoxelSet> = Vec::with_capacity(cfg.stages);
    let mut current = level0;
    for level in 0..cfg.stages {
        current = apply_block(
            tape,
            &current,
            &params.encoder_blocks[level],
            cfg,
            level,
            &mut counters,
            &format!("encoder{level}"),
        )?;
        levels.push(current.clone());
        if level + 1 < cfg.stages {
            let (gca, expand) = &params.downs[level];
            let acfg = cfg.attention_cfg(level)?;
            let pool_partition = partition_windows(&current, cfg.s_pool)?;
            pooling_costs(
                &pool_partition,
                cfg.channels[level],
                &mut counters,
                &format!("down{level}"),
            );
            let coarse = crate::blocks::gca_down(tape, &current, cfg.s_pool, gca, &acfg)?;
            // Channel expansion to the next level's width.
            counters.add(
                format!("down{level}/expand"),
                matmul_flops(coarse.len(), cfg.channels[level], cfg.channels[level + 1]),
            );
            current = SparseVoxelSet {
                extents: coarse.extents,
                coords: coarse.coords.clone(),
                ids: coarse.ids.clone(),
                features: tape.matmul(&coarse.features, expand)?,
            };
        }
    }

    // Decoder: walk back up, fusing each encoder skip with the coarser
    // decoder state.
    let mut decoder = levels[cfg.stages - 1].clone();
    for (slot, level) in (0..cfg.stages - 1).rev().enumerate() {
        let (gca, block) = &params.ups[slot];
        let acfg_coarse = cfg.attention_cfg(level + 1)?;
        let fine = &levels[level];
        let phi = fine.len();
        let fused = crate::blocks::gca_up(tape, fine, &decoder, cfg.s_pool, gca, &acfg_coarse)?;
        let (cf, cc) = (cfg.channels[level], cfg.channels[level + 1]);
        counters.attention_pairs += phi as u64;
        let up_flops = if phi == 0 {
            0
        } else {
            mlp_flops(phi, cf, cf * defaults::MLP_EXPANSION, cc)
                + attention_flops(phi, 1, cc)
                + mlp_flops(phi, cc, cc * defaults::MLP_EXPANSION, cf)
        };
        counters.add(format!("up{level}/gca_up"), up_flops);
        decoder = apply_block(
            tape,
            &fused,
            block,
            cfg,
            level,
            &mut counters,
            &format!("decoder{level}"),
        )?;
    }

    // Head: per-voxel class scores at occupied sites, learned fill logits
    // elsewhere, then nearest-neighbor upsampling to input resolution.
    let phi0 = decoder.len();
    let sparse_logits = tape.matmul(&decoder.features, &params.head)?;
    counters.add(
        "head",
        matmul_flops(phi0, cfg.channels[0], cfg.classes),
    );
    let occupied_rows: Vec<usize> = decoder
        .coords
        .iter()
        .map(|c| (c[0] * grid[1] + c[1]) * grid[2] + c[2])
        .collect();
    let scattered = if phi0 > 0 {
        tape.scatter_rows(&sparse_logits, &occupied_rows, n_grid)?
    } else {
        Tensor::zeros(vec![n_grid, cfg.classes])
    };
    // Fill logits go to void cells only.
    let void_rows: Vec<usize> = (0..n_grid)
        .filter(|i| !occupied_rows.contains(i))
        .collect();
    let grid_logits = if void_rows.is_empty() {
        scattered
    } else {
        let fill = tape.repeat_row(&params.fill_logits, void_rows.len())?;
        let fill_scattered = tape.scatter_rows(&fill, &void_rows, n_grid)?;
        tape.add(&scattered, &fill_scattered)?
    };
    let grid4 = tape.reshape(&grid_logits, vec![grid[0], grid[1], grid[2], cfg.classes])?;
    let logits = tape.upsample3(&grid4, cfg.embed.stride)?;
    let probabilities = tape.softmax(&logits)?;

    Ok(ForwardOutput {
        prediction: Prediction {
            logits,
            probabilities,
        },
        levels,
        soft_ratio,
        occupancy,
        counters,
    })
}

// ── Segmentation loss ────────────────────────────────────────────────

/// Soft Dice loss (all classes, smoothed so a perfect prediction scores
/// exactly zero) plus cross-entropy, equally weighted.
pub fn seg_loss(
    tape: &Tape,
    logits: &Tensor,
    labels: &[usize],
    classes: usize,
) -> Result<Tensor> {
    let sh = logits.shape().to_vec();
    if sh.last() != Some(&classes) {
        return Err(Error::ShapeMismatch {
            op: "seg_loss",
            left: sh,
            right: vec![classes],
        });
    }
    let n: usize = sh.iter().product::<usize>() / classes;
    if labels.len() != n {
        return Err(Error::ShapeMismatch {
            op: "seg_loss",
            left: vec![labels.len()],
            right: vec![n],
        });
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::LabelOutOfRange {
            label: bad,
            classes,
        });
    }
    let flat = tape.reshape(logits, vec![n, classes])?;

    // Cross-entropy via log-sum-exp, averaged over voxels.
    let lse = tape.logsumexp_last(&flat)?;
    let taken = tape.take_per_row(&flat, labels)?;
    let ce = tape.mean_all(&tape.sub(&lse, &taken)?)?;

    // Soft Dice per class on probabilities, then averaged.
    let probs = tape.softmax(&flat)?;
    let probs_t = tape.transpose2(&probs)?; // [classes, n]
    let smooth = defaults::DICE_SMOOTH;
    let mut dice_sum: Option<Tensor> = None;
    for class in 0..classes {
        let p_c = tape.gather_rows(&probs_t, &[class])?; // [1, n]
        let t_c = Tensor::from_vec(
            vec![1, n],
            labels
                .iter()
                .map(|&l| if l == class { 1.0 } else { 0.0 })
                .collect(),
        )?;
        let inter = tape.sum_all(&tape.mul(&p_c, &t_c)?)?;
        let denom = tape.add(&tape.sum_all(&p_c)?, &tape.sum_all(&t_c)?)?;
        let dice = tape.div(
            &tape.add_scalar(&tape.mul_scalar(&inter, 2.0)?, smooth)?,
            &tape.add_scalar(&denom, smooth)?,
        )?;
        dice_sum = Some(match dice_sum {
            Some(acc) => tape.add(&acc, &dice)?,
            None => dice,
        });
    }
    let mean_dice = tape.mul_scalar(&dice_sum.expect("classes >= 2"), 1.0 / classes as f64)?;
    let dice_loss = tape.add_scalar(&tape.mul_scalar(&mean_dice, -1.0)?, 1.0)?;
    tape.add(&dice_loss, &ce)
}

// ── Toy training loop ────────────────────────────────────────────────

#[derive(Clone, Debug, Serialize)]
pub struct StepRecord {
    pub step: usize,
    pub seg_loss: f64,
    pub soft_ratio: f64,
    pub total_loss: f64,
}

pub struct TrainResult {
    pub trajectory: Vec<StepRecord>,
    pub theta: Vec<f64>,
}

/// Plain gradient descent on the total loss over a fixed phantom.
///
/// Records (L_seg, r_nv, L_total) per step. With `lambda_nv == 0` the
/// regularizer path is never added to the loss, so its gradient is never
/// applied. Errors out if the loss exceeds the divergence guard or turns
/// non-finite.
pub fn train_toy(
    phantom: &Phantom,
    cfg: &ModelConfig,
    steps: usize,
    learning_rate: f64,
) -> Result<TrainResult> {
    if steps == 0 {
        return Err(Error::InvalidConfig("steps must be >= 1".into()));
    }
    let modalities = phantom.volume.modalities();
    let mut theta = cfg.init_params(modalities);
    let mut trajectory = Vec::with_capacity(steps);
    for step in 0..steps {
        let tape = Tape::new();
        let theta_t = tape.leaf(&Tensor::from_vec(vec![theta.len()], theta.clone())?);
        let out = forward(&tape, &phantom.volume, cfg, &theta_t, OccupancyMode::Nonvoid)?;
        let l_seg = seg_loss(
            &tape,
            &out.prediction.logits,
            &phantom.labels,
            cfg.classes,
        )?;
        let lambda = cfg.embed.lambda_nv;
        let l_total = if lambda == 0.0 {
            l_seg.clone()
        } else {
            total_loss(&tape, &l_seg, &out.soft_ratio, lambda)?
        };
        let loss_value = l_total.item();
        if !loss_value.is_finite() || loss_value > defaults::DIVERGENCE_LIMIT {
            return Err(Error::Diverged {
                step,
                loss: loss_value,
            });
        }
        trajectory.push(StepRecord {
            step,
            seg_loss: l_seg.item(),
            soft_ratio: out.soft_ratio.item(),
            total_loss: loss_value,
        });
        let grads = tape.backward(&l_total)?;
        let g = grads.wrt(&theta_t).expect("theta is tracked");
        for (w, gi) in theta.iter_mut().zip(&g) {
            *w -= learning_rate * gi;
        }
    }
    Ok(TrainResult { trajectory, theta })
}

pub fn trajectory_to_csv(trajectory: &[StepRecord]) -> String {
    let mut out = String::from("step,seg_loss,soft_ratio,total_loss\n");
    for r in trajectory {
        out.push_str(&format!(
            "{},{},{},{}\n",
            r.step, r.seg_loss, r.soft_ratio, r.total_loss
        ));
    }
    out
}

// ── FLOP reports ─────────────────────────────────────────────────────

#[derive(Clone, Debug, Serialize)]
pub struct FlopReport {
    pub mode: OccupancyMode,
    pub layers: Vec<LayerCost>,
    pub attention_pairs: u64,
    pub total_flops: u64,
}

/// Account a full forward pass in the given occupancy mode.
pub fn count_flops(
    volume: &DenseVolume,
    cfg: &ModelConfig,
    mode: OccupancyMode,
) -> Result<FlopReport> {
    let tape = Tape::new();
    let theta = Tensor::from_vec(
        vec![cfg.param_len(volume.modalities())],
        cfg.init_params(volume.modalities()),
    )?;
    let out = forward(&tape, volume, cfg, &theta, mode)?;
    Ok(FlopReport {
        mode,
        layers: out.counters.layers,
        attention_pairs: out.counters.attention_pairs,
        total_flops: out.counters.total_flops,
    })
}

// ── Weight container ─────────────────────────────────────────────────

#[derive(Serialize, Deserialize)]
struct WeightHeader {
    len: usize,
    config: ModelConfig,
}

/// Weights in the same raw little-endian f32 + JSON sidecar container the
/// volume files use.
pub fn write_weights(path: &Path, theta: &[f64], cfg: &ModelConfig) -> Result<()> {
    let mut bytes = Vec::with_capacity(theta.len() * 4);
    for &v in theta {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    std::fs::write(path, bytes)?;
    let header = WeightHeader {
        len: theta.len(),
        config: cfg.clone(),
    };
    let mut sidecar = path.as_os_str().to_owned();
    sidecar.push(".json");
    std::fs::write(sidecar, serde_json::to_vec_pretty(&header)?)?;
    Ok(())
}

pub fn read_weights(path: &Path) -> Result<(Vec<f64>, ModelConfig)> {
    let mut sidecar = path.as_os_str().to_owned();
    sidecar.push(".json");
    let header: WeightHeader = serde_json::from_slice(&std::fs::read(sidecar)?)?;
    let bytes = std::fs::read(path)?;
    if bytes.len() != header.len * 4 {
        return Err(Error::PayloadSizeMismatch {
            expected: header.len,
            actual: bytes.len() / 4,
        });
    }
    let theta = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Ok((theta, header.config))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::{generate_phantom, NormScheme, PhantomSpec};
    use approx::assert_abs_diff_eq;

    fn toy_cfg() -> ModelConfig {
        let mut cfg = ModelConfig::toy(42);
        cfg.channels = vec![6, 12];
        cfg.embed.channels = 6;
        cfg.heads = 2;
        cfg.window = vec![2, 2];
        cfg.tau_cap = vec![4, 4];
        cfg
    }

    fn toy_forward(
        phantom: &Phantom,
        cfg: &ModelConfig,
        mode: OccupancyMode,
    ) -> (Tape, ForwardOutput) {
        let tape = Tape::new();
        let theta = Tensor::from_vec(
            vec![cfg.param_len(1)],
            cfg.init_params(1),
        )
        .unwrap();
        let out = forward(&tape, &phantom.volume, cfg, &theta, mode).unwrap();
        (tape, out)
    }

    #[test]
    fn param_layout_and_binding_agree() {
        let cfg = toy_cfg();
        let tape = Tape::new();
        let theta = Tensor::from_vec(vec![cfg.param_len(1)], cfg.init_params(1)).unwrap();
        // bind_params debug-asserts that it consumes exactly theta.numel().
        bind_params(&tape, &theta, &cfg, 1).unwrap();
    }

    #[test]
    fn forward_output_has_dense_shape_and_unit_probabilities() {
        let cfg = toy_cfg();
        let phantom = generate_phantom(&PhantomSpec::simple(3, [8, 8, 8], 0.5)).unwrap();
        let (_tape, out) = toy_forward(&phantom, &cfg, OccupancyMode::Nonvoid);
        assert_eq!(out.prediction.logits.shape(), &[8, 8, 8, 2]);
        let probs = out.prediction.probabilities.data();
        for voxel in probs.chunks_exact(2) {
            let s: f64 = voxel.iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn all_background_input_gets_fill_logits_everywhere() {
        let cfg = toy_cfg();
        let volume = crate::volume::DenseVolume::new(
            [8, 8, 8],
            1,
            vec![0.0; 512],
            NormScheme::MriMasked,
        )
        .unwrap();
        let tape = Tape::new();
        let mut theta = cfg.init_params(1);
        // Make the fill logits distinctive; they sit right after the kernel.
        let kernel_len = cfg.embed.weight_len(1);
        theta[kernel_len] = 3.0;
        theta[kernel_len + 1] = -1.0;
        let theta = Tensor::from_vec(vec![theta.len()], theta).unwrap();
        let out = forward(&tape, &volume, &cfg, &theta, OccupancyMode::Nonvoid).unwrap();
        assert_eq!(out.occupancy.popcount(), 0);
        assert!(out.levels.iter().all(|l| l.is_empty()));
        for voxel in out.prediction.logits.data().chunks_exact(2) {
            assert_eq!(voxel, &[3.0, -1.0]);
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let cfg = toy_cfg();
        let phantom = generate_phantom(&PhantomSpec::simple(5, [8, 8, 8], 0.5)).unwrap();
        let (_t1, a) = toy_forward(&phantom, &cfg, OccupancyMode::Nonvoid);
        let (_t2, b) = toy_forward(&phantom, &cfg, OccupancyMode::Nonvoid);
        let bits = |t: &Tensor| -> Vec<u64> { t.data().iter().map(|v| v.to_bits()).collect() };
        assert_eq!(bits(&a.prediction.logits), bits(&b.prediction.logits));
        assert_eq!(a.counters.total_flops, b.counters.total_flops);
        assert_eq!(a.counters.attention_pairs, b.counters.attention_pairs);
    }

    #[test]
    fn incompatible_extents_error_names_divisibility() {
        let cfg = toy_cfg();
        // 10 -> grid 5, not divisible by s_pool = 2.
        let err = cfg.grid_extents([10, 10, 10]).unwrap_err();
        match err {
            Error::IndivisibleExtents { required, .. } => assert_eq!(required, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn perfect_one_hot_prediction_has_near_zero_loss() {
        // Logits with margin >= 20 of the true class.
        let labels = vec![0usize, 1, 1, 0];
        let mut data = Vec::new();
        for &l in &labels {
            let mut row = vec![-10.0; 2];
            row[l] = 10.0;
            data.extend(row);
        }
        let tape = Tape::new();
        let logits = Tensor::from_vec(vec![4, 2], data).unwrap();
        let loss = seg_loss(&tape, &logits, &labels, 2).unwrap().item();
        assert!(loss < 1e-6, "loss {loss}");
    }

    #[test]
    fn uniform_prediction_cross_entropy_is_ln_two() {
        let labels = vec![0usize, 1, 0, 1];
        let tape = Tape::new();
        let logits = Tensor::zeros(vec![4, 2]);
        let loss = seg_loss(&tape, &logits, &labels, 2).unwrap().item();
        // Dice part: uniform probabilities over balanced labels give
        // per-class dice = (2 * n/2 * 1/2 + s)/(n/2 + n/2 + s) ~ 1/2,
        // so dice loss ~ 1/2; CE part = ln 2.
        let expected = 0.5 + (2f64).ln();
        assert_abs_diff_eq!(loss, expected, epsilon = 1e-5);
    }

    #[test]
    fn dice_term_matches_direct_formula_oracle() {
        let mut rng = {
            use rand::SeedableRng;
            rand_chacha::ChaCha8Rng::seed_from_u64(9)
        };
        use rand::Rng;
        let n = 12;
        let classes = 3;
        let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..classes)).collect();
        let data: Vec<f64> = (0..n * classes).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let tape = Tape::new();
        let logits = Tensor::from_vec(vec![n, classes], data.clone()).unwrap();
        let loss = seg_loss(&tape, &logits, &labels, classes).unwrap().item();

        // Direct transcription with plain loops.
        let mut probs = vec![0.0; n * classes];
        for i in 0..n {
            let row = &data[i * classes..(i + 1) * classes];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = row.iter().map(|&v| (v - m).exp()).collect();
            let z: f64 = exps.iter().sum();
            for c in 0..classes {
                probs[i * classes + c] = exps[c] / z;
            }
        }
        let mut ce = 0.0;
        for i in 0..n {
            ce -= probs[i * classes + labels[i]].ln();
        }
        ce /= n as f64;
        let smooth = defaults::DICE_SMOOTH;
        let mut dice_mean = 0.0;
        for c in 0..classes {
            let mut inter = 0.0;
            let mut psum = 0.0;
            let mut tsum = 0.0;
            for i in 0..n {
                let t = f64::from(labels[i] == c);
                inter += probs[i * classes + c] * t;
                psum += probs[i * classes + c];
                tsum += t;
            }
            dice_mean += (2.0 * inter + smooth) / (psum + tsum + smooth);
        }
        dice_mean /= classes as f64;
        let expected = (1.0 - dice_mean) + ce;
        assert_abs_diff_eq!(loss, expected, epsilon = 1e-9);
    }

    #[test]
    fn label_out_of_range_is_rejected() {
        let tape = Tape::new();
        let logits = Tensor::zeros(vec![2, 2]);
        assert!(matches!(
            seg_loss(&tape, &logits, &[0, 2], 2),
            Err(Error::LabelOutOfRange { label: 2, .. })
        ));
    }

    #[test]
    fn matmul_flops_match_mac_convention() {
        assert_eq!(matmul_flops(2, 3, 4), 48);
    }

    #[test]
    fn empty_sparse_set_costs_nothing_in_sparse_stages() {
        let cfg = toy_cfg();
        let volume = crate::volume::DenseVolume::new(
            [8, 8, 8],
            1,
            vec![0.0; 512],
            NormScheme::MriMasked,
        )
        .unwrap();
        let report = count_flops(&volume, &cfg, OccupancyMode::Nonvoid).unwrap();
        for layer in &report.layers {
            if layer.layer != "embed_conv" {
                assert_eq!(layer.flops, 0, "{} must be free", layer.layer);
            }
        }
        assert_eq!(report.attention_pairs, 0);
    }

    #[test]
    fn halving_occupancy_halves_sparse_conv_flops() {
        let cfg = toy_cfg();
        let a = generate_phantom(&PhantomSpec::simple(7, [16, 16, 16], 0.3)).unwrap();
        let b = generate_phantom(&PhantomSpec::simple(7, [16, 16, 16], 0.65)).unwrap();
        let fa = count_flops(&a.volume, &cfg, OccupancyMode::Nonvoid).unwrap();
        let fb = count_flops(&b.volume, &cfg, OccupancyMode::Nonvoid).unwrap();
        let conv = |r: &FlopReport| -> u64 {
            r.layers
                .iter()
                .filter(|l| l.layer.contains("residual_sparse_conv"))
                .map(|l| l.flops)
                .sum()
        };
        let phi = |p: &Phantom| -> usize {
            let tape = Tape::new();
            let theta =
                Tensor::from_vec(vec![cfg.param_len(1)], cfg.init_params(1)).unwrap();
            forward(&tape, &p.volume, &cfg, &theta, OccupancyMode::Nonvoid)
                .unwrap()
                .levels[0]
                .len()
        };
        // Conv cost is exactly linear in occupied sites.
        let ratio = conv(&fa) as f64 / conv(&fb) as f64;
        let phi_ratio = phi(&a) as f64 / phi(&b) as f64;
        assert!((ratio - phi_ratio).abs() / phi_ratio < 0.01);
    }

    #[test]
    fn dense_forced_never_costs_less() {
        let cfg = toy_cfg();
        for bf in [0.0, 0.4, 0.7] {
            let phantom = generate_phantom(&PhantomSpec::simple(11, [8, 8, 8], bf)).unwrap();
            let nv = count_flops(&phantom.volume, &cfg, OccupancyMode::Nonvoid).unwrap();
            let dense = count_flops(&phantom.volume, &cfg, OccupancyMode::DenseForced).unwrap();
            if bf == 0.0 {
                assert_eq!(nv.total_flops, dense.total_flops);
            } else {
                assert!(nv.total_flops < dense.total_flops);
            }
        }
    }

    #[test]
    fn lambda_zero_training_never_applies_regularizer_gradient() {
        let mut cfg = toy_cfg();
        cfg.embed.lambda_nv = 0.0;
        let phantom = generate_phantom(&PhantomSpec::simple(13, [8, 8, 8], 0.5)).unwrap();
        let run = train_toy(&phantom, &cfg, 3, 0.05).unwrap();
        // L_total must equal L_seg bit for bit when lambda is zero.
        for r in &run.trajectory {
            assert_eq!(r.total_loss.to_bits(), r.seg_loss.to_bits());
        }
    }

    #[test]
    fn training_is_deterministic_for_a_fixed_seed() {
        let cfg = toy_cfg();
        let phantom = generate_phantom(&PhantomSpec::simple(17, [8, 8, 8], 0.5)).unwrap();
        let a = train_toy(&phantom, &cfg, 3, 0.05).unwrap();
        let b = train_toy(&phantom, &cfg, 3, 0.05).unwrap();
        for (ra, rb) in a.trajectory.iter().zip(&b.trajectory) {
            assert_eq!(ra.total_loss.to_bits(), rb.total_loss.to_bits());
        }
        for (wa, wb) in a.theta.iter().zip(&b.theta) {
            assert_eq!(wa.to_bits(), wb.to_bits());
        }
    }

    #[test]
    fn weights_roundtrip_through_the_container() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("weights.raw");
        let cfg = toy_cfg();
        // f32-representable values round-trip exactly.
        let theta: Vec<f64> = (0..cfg.param_len(1))
            .map(|i| (i as f32 * 0.25) as f64)
            .collect();
        write_weights(&path, &theta, &cfg).unwrap();
        let (back, cfg2) = read_weights(&path).unwrap();
        assert_eq!(back, theta);
        assert_eq!(cfg2.channels, cfg.channels);
    }
}
