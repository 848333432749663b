//! `nvseg`: reproducible experiments over the sparse voxel segmentation
//! engine. Every subcommand resolves its configuration, runs
//! deterministically for a fixed seed, writes its outputs under `--out`,
//! and drops a `manifest.json` (resolved config, seed, sha256 of every
//! artifact) beside them. Reruns with the same manifest reproduce
//! byte-identical primary outputs.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use nvseg_core::defaults;
use nvseg_core::metrics::{metric_report, qea, wilcoxon_holm, PolygonSpec};
use nvseg_core::net::{
    count_flops, forward, seg_loss, train_toy, trajectory_to_csv, write_weights, ModelConfig,
    OccupancyMode,
};
use nvseg_core::nonvoid::{epsilon_sweep, saving_percent, stats_to_csv, voxel_saving_stats};
use nvseg_core::tensor::{finite_diff_check, Tape, Tensor, DEFAULT_FD_STEP};
use nvseg_core::volume::{generate_phantom, read_volume, DenseVolume, PhantomSpec};

#[derive(Parser)]
#[command(name = "nvseg", version, about, disable_help_subcommand = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonOut {
    /// Output directory; created if absent.
    #[arg(long)]
    out: PathBuf,
    /// Seed for any randomized default (phantom generation, weight init).
    #[arg(long, default_value_t = 42)]
    seed: u64,
}

#[derive(Args)]
struct InputVolumes {
    /// Directory of raw+JSON volumes (every `*.raw` with a `.raw.json`
    /// sidecar is read).
    #[arg(long)]
    volumes: Option<PathBuf>,
    /// Phantom specification JSON (one spec object or an array of them).
    #[arg(long)]
    phantom: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Sparsity statistics table (one row per volume plus an aggregate).
    VoxelizeStats {
        #[command(flatten)]
        io: CommonOut,
        #[command(flatten)]
        input: InputVolumes,
        /// Check mode: "NONVOID,TRADITIONAL" counts (in thousands); prints
        /// the saving percentage and exits without reading volumes.
        #[arg(long)]
        check_counts: Option<String>,
    },
    /// Run the network on a volume or phantom and write dense predictions.
    Forward {
        #[command(flatten)]
        io: CommonOut,
        #[command(flatten)]
        input: InputVolumes,
        /// Model configuration JSON; defaults to the toy architecture.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Weight container from a previous `train-toy`; fresh seeded
        /// initialization when absent.
        #[arg(long)]
        weights: Option<PathBuf>,
    },
    /// Plain gradient-descent training on one phantom.
    TrainToy {
        #[command(flatten)]
        io: CommonOut,
        #[command(flatten)]
        input: InputVolumes,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = defaults::TOY_STEPS)]
        steps: usize,
        #[arg(long, default_value_t = defaults::TOY_LEARNING_RATE)]
        lr: f64,
    },
    /// Finite-difference gradient verification of the building blocks and
    /// the end-to-end toy network.
    Gradcheck {
        #[command(flatten)]
        io: CommonOut,
        /// "blocks" checks the individual blocks only; "full" adds the
        /// end-to-end network sweep (minutes of runtime).
        #[arg(long, default_value = "full")]
        scope: String,
    },
    /// Exact FLOP accounting: nonvoid vs dense-forced occupancy.
    Flops {
        #[command(flatten)]
        io: CommonOut,
        #[command(flatten)]
        input: InputVolumes,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Quality-efficiency polygon areas from a methods-by-axes fixture.
    Qea {
        #[command(flatten)]
        io: CommonOut,
        /// Polygon fixture JSON: axes (name + direction), methods, values.
        #[arg(long)]
        input: PathBuf,
    },
    /// Embedded-voxel saving as a function of the occupancy threshold.
    EpsSweep {
        #[command(flatten)]
        io: CommonOut,
        #[command(flatten)]
        input: InputVolumes,
        /// Comma-separated thresholds; defaults to decades 1e-11..=10.
        #[arg(long)]
        grid: Option<String>,
    },
    /// Paired Wilcoxon signed-rank tests with Holm correction.
    Significance {
        #[command(flatten)]
        io: CommonOut,
        /// Comparisons JSON: {"comparisons": [{"name", "a": [..], "b": [..]}]}.
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value_t = 0.05)]
        alpha: f64,
    },
}

fn main() -> ExitCode {
    // Behave like a normal Unix tool when stdout is closed early (| head).
    unsafe {
        libc::signal(libc::SIGPIPE, libc::SIG_DFL);
    }
    match run() {
        Ok(code) => code,
        Err(err) => {
            // Single-line machine-parsable failure.
            eprintln!("error: {err:#}");
            ExitCode::FAILURE
        }
    }
}

fn run() -> Result<ExitCode> {
    match Cli::parse().command {
        Command::VoxelizeStats {
            io,
            input,
            check_counts,
        } => cmd_voxelize_stats(io, input, check_counts),
        Command::Forward {
            io,
            input,
            config,
            weights,
        } => cmd_forward(io, input, config, weights),
        Command::TrainToy {
            io,
            input,
            config,
            steps,
            lr,
        } => cmd_train_toy(io, input, config, steps, lr),
        Command::Gradcheck { io, scope } => cmd_gradcheck(io, &scope),
        Command::Flops { io, input, config } => cmd_flops(io, input, config),
        Command::Qea { io, input } => cmd_qea(io, input),
        Command::EpsSweep { io, input, grid } => cmd_eps_sweep(io, input, grid),
        Command::Significance { io, input, alpha } => cmd_significance(io, input, alpha),
    }
}

// ── Manifest plumbing ────────────────────────────────────────────────

#[derive(Serialize)]
struct ManifestEntry {
    file: String,
    sha256: String,
}

struct Manifest {
    subcommand: &'static str,
    seed: u64,
    config: serde_json::Value,
    out: PathBuf,
    entries: Vec<ManifestEntry>,
}

impl Manifest {
    fn new(subcommand: &'static str, io: &CommonOut, config: serde_json::Value) -> Result<Self> {
        fs::create_dir_all(&io.out)
            .with_context(|| format!("creating output directory {}", io.out.display()))?;
        Ok(Manifest {
            subcommand,
            seed: io.seed,
            config,
            out: io.out.clone(),
            entries: Vec::new(),
        })
    }

    fn write(&mut self, name: &str, bytes: &[u8]) -> Result<PathBuf> {
        let path = self.out.join(name);
        fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))?;
        self.entries.push(ManifestEntry {
            file: name.to_string(),
            sha256: hex::encode(Sha256::digest(bytes)),
        });
        Ok(path)
    }

    fn finish(self) -> Result<()> {
        #[derive(Serialize)]
        struct ManifestFile<'a> {
            subcommand: &'a str,
            seed: u64,
            config: &'a serde_json::Value,
            outputs: &'a [ManifestEntry],
        }
        let body = serde_json::to_vec_pretty(&ManifestFile {
            subcommand: self.subcommand,
            seed: self.seed,
            config: &self.config,
            outputs: &self.entries,
        })?;
        fs::write(self.out.join("manifest.json"), body)?;
        Ok(())
    }
}

// ── Input resolution ─────────────────────────────────────────────────

struct NamedVolume {
    name: String,
    volume: DenseVolume,
    labels: Option<std::sync::Arc<Vec<usize>>>,
}

fn load_phantom_specs(path: &Path, default_seed: u64) -> Result<Vec<PhantomSpec>> {
    let raw = fs::read_to_string(path)
        .with_context(|| format!("reading phantom spec {}", path.display()))?;
    let mut specs: Vec<PhantomSpec> = match serde_json::from_str::<Vec<PhantomSpec>>(&raw) {
        Ok(list) => list,
        Err(_) => vec![serde_json::from_str::<PhantomSpec>(&raw)
            .with_context(|| format!("parsing phantom spec {}", path.display()))?],
    };
    for (i, spec) in specs.iter_mut().enumerate() {
        if spec.seed == 0 {
            spec.seed = default_seed + i as u64;
        }
    }
    Ok(specs)
}

/// Load inputs; unreadable volume files are reported and skipped so one bad
/// file does not kill a batch run.
fn resolve_inputs(input: &InputVolumes, seed: u64) -> Result<Vec<NamedVolume>> {
    match (&input.volumes, &input.phantom) {
        (Some(dir), None) => {
            let mut out = Vec::new();
            let mut paths: Vec<PathBuf> = fs::read_dir(dir)
                .with_context(|| format!("reading volume directory {}", dir.display()))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|e| e == "raw"))
                .collect();
            paths.sort();
            for path in paths {
                match read_volume(&path) {
                    Ok(volume) => out.push(NamedVolume {
                        name: path
                            .file_stem()
                            .map(|s| s.to_string_lossy().into_owned())
                            .unwrap_or_default(),
                        volume,
                        labels: None,
                    }),
                    Err(err) => eprintln!("error: skipping {}: {err}", path.display()),
                }
            }
            if out.is_empty() {
                bail!("no readable volumes in {}", dir.display());
            }
            Ok(out)
        }
        (None, Some(spec_path)) => {
            let specs = load_phantom_specs(spec_path, seed)?;
            specs
                .into_iter()
                .enumerate()
                .map(|(i, spec)| {
                    let phantom = generate_phantom(&spec)?;
                    Ok(NamedVolume {
                        name: format!("phantom{:02}", i),
                        volume: phantom.volume,
                        labels: Some(phantom.labels),
                    })
                })
                .collect()
        }
        _ => bail!("exactly one of --volumes or --phantom is required"),
    }
}

fn load_model_config(path: Option<&Path>, seed: u64) -> Result<ModelConfig> {
    let cfg = match path {
        Some(p) => serde_json::from_str(
            &fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?,
        )
        .with_context(|| format!("parsing config {}", p.display()))?,
        None => ModelConfig::toy(seed),
    };
    Ok(cfg)
}

// ── Subcommands ──────────────────────────────────────────────────────

fn cmd_voxelize_stats(
    io: CommonOut,
    input: InputVolumes,
    check_counts: Option<String>,
) -> Result<ExitCode> {
    if let Some(counts) = check_counts {
        let parts: Vec<&str> = counts.split(',').collect();
        if parts.len() != 2 {
            bail!("--check-counts expects \"NONVOID,TRADITIONAL\"");
        }
        let nonvoid: f64 = parts[0].trim().parse()?;
        let traditional: f64 = parts[1].trim().parse()?;
        let saving = saving_percent(nonvoid, traditional);
        let mut manifest = Manifest::new(
            "voxelize-stats",
            &io,
            serde_json::json!({"check_counts": {"nonvoid_k": nonvoid, "traditional_k": traditional}}),
        )?;
        manifest.write("saving.txt", format!("{saving:.2}%\n").as_bytes())?;
        manifest.finish()?;
        println!("{saving:.2}%");
        return Ok(ExitCode::SUCCESS);
    }
    let cfg = nvseg_core::nonvoid::EmbedConfig::default();
    let volumes = resolve_inputs(&input, io.seed)?;
    let weights = cfg.init_weights(volumes[0].volume.modalities(), io.seed);
    let named: Vec<(String, DenseVolume)> = volumes
        .into_iter()
        .map(|v| (v.name, v.volume))
        .collect();
    let rows = voxel_saving_stats(&named, &weights, &cfg)?;
    let mut manifest = Manifest::new("voxelize-stats", &io, serde_json::to_value(&cfg)?)?;
    manifest.write("stats.csv", stats_to_csv(&rows).as_bytes())?;
    manifest.write("stats.json", &serde_json::to_vec_pretty(&rows)?)?;
    manifest.finish()?;
    for row in &rows {
        println!(
            "{}: nonvoid {:.2}k / traditional {:.2}k -> saving {:.2}%",
            row.name, row.nonvoid_voxels_k, row.traditional_voxels_k, row.saving_pct
        );
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_forward(
    io: CommonOut,
    input: InputVolumes,
    config: Option<PathBuf>,
    weights_path: Option<PathBuf>,
) -> Result<ExitCode> {
    let volumes = resolve_inputs(&input, io.seed)?;
    let first = &volumes[0];
    let (theta, cfg) = match &weights_path {
        Some(p) => nvseg_core::net::read_weights(p)?,
        None => {
            let cfg = load_model_config(config.as_deref(), io.seed)?;
            (cfg.init_params(first.volume.modalities()), cfg)
        }
    };
    let tape = Tape::new();
    let theta_t = Tensor::from_vec(vec![theta.len()], theta)?;
    let out = forward(&tape, &first.volume, &cfg, &theta_t, OccupancyMode::Nonvoid)?;
    let mut manifest = Manifest::new("forward", &io, serde_json::to_value(&cfg)?)?;

    // Dense logits: little-endian f32 payload + shape sidecar.
    let mut payload = Vec::with_capacity(out.prediction.logits.numel() * 4);
    for &v in out.prediction.logits.data() {
        payload.extend_from_slice(&(v as f32).to_le_bytes());
    }
    manifest.write("logits.raw", &payload)?;
    manifest.write(
        "logits.raw.json",
        &serde_json::to_vec_pretty(&serde_json::json!({
            "shape": out.prediction.logits.shape(),
        }))?,
    )?;
    manifest.write("counters.json", &serde_json::to_vec_pretty(&out.counters)?)?;

    // Per-level sparsity summary.
    let levels: Vec<serde_json::Value> = out
        .levels
        .iter()
        .enumerate()
        .map(|(i, l)| {
            serde_json::json!({
                "level": i,
                "voxels": l.len(),
                "extents": l.extents,
            })
        })
        .collect();
    manifest.write("levels.json", &serde_json::to_vec_pretty(&levels)?)?;

    if let Some(labels) = &first.labels {
        let argmax: Vec<usize> = out
            .prediction
            .probabilities
            .data()
            .chunks_exact(cfg.classes)
            .map(|row| {
                row.iter()
                    .enumerate()
                    .max_by(|a, b| a.1.total_cmp(b.1))
                    .map(|(i, _)| i)
                    .unwrap_or(0)
            })
            .collect();
        let report = metric_report(
            first.volume.extents(),
            &argmax,
            labels,
            cfg.classes,
            defaults::NSD_TOLERANCE,
        )?;
        manifest.write("metrics.json", &serde_json::to_vec_pretty(&report)?)?;
        println!(
            "mean dice {:.4}, mean iou {:.4} over {} foreground classes",
            report.mean_dice,
            report.mean_iou,
            report.per_class.len()
        );
    }
    println!(
        "forward done: {} nonvoid voxels at level 0, {} total flops",
        out.levels[0].len(),
        out.counters.total_flops
    );
    manifest.finish()?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_train_toy(
    io: CommonOut,
    input: InputVolumes,
    config: Option<PathBuf>,
    steps: usize,
    lr: f64,
) -> Result<ExitCode> {
    let Some(phantom_path) = &input.phantom else {
        bail!("train-toy requires --phantom (labels are needed)");
    };
    let spec = load_phantom_specs(phantom_path, io.seed)?
        .into_iter()
        .next()
        .context("empty phantom spec")?;
    let phantom = generate_phantom(&spec)?;
    let cfg = load_model_config(config.as_deref(), io.seed)?;
    let run = train_toy(&phantom, &cfg, steps, lr)?;
    let mut manifest = Manifest::new(
        "train-toy",
        &io,
        serde_json::json!({"model": cfg, "steps": steps, "lr": lr, "phantom": spec}),
    )?;
    manifest.write("trajectory.csv", trajectory_to_csv(&run.trajectory).as_bytes())?;
    let weights_path = io.out.join("weights.raw");
    write_weights(&weights_path, &run.theta, &cfg)?;
    // Register the weight container (payload + sidecar) in the manifest.
    for name in ["weights.raw", "weights.raw.json"] {
        let bytes = fs::read(io.out.join(name))?;
        manifest.entries.push(ManifestEntry {
            file: name.to_string(),
            sha256: hex::encode(Sha256::digest(&bytes)),
        });
    }
    let first = run.trajectory.first().expect("steps >= 1");
    let last = run.trajectory.last().expect("steps >= 1");
    println!(
        "step 0: L_total {:.6}; step {}: L_total {:.6} (drop {:.1}%), r_nv {:.6} -> {:.6}",
        first.total_loss,
        last.step,
        last.total_loss,
        (1.0 - last.total_loss / first.total_loss) * 100.0,
        first.soft_ratio,
        last.soft_ratio
    );
    manifest.finish()?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_gradcheck(io: CommonOut, scope: &str) -> Result<ExitCode> {
    if !matches!(scope, "blocks" | "full") {
        bail!("--scope must be \"blocks\" or \"full\"");
    }
    let mut results: Vec<(String, f64, f64)> = Vec::new();
    let mut worst_blocks: f64 = 0.0;
    for (name, rel) in gradcheck_blocks(io.seed)? {
        worst_blocks = worst_blocks.max(rel);
        results.push((name, rel, defaults::FD_TOLERANCE_BLOCK));
    }
    let mut pass = worst_blocks <= defaults::FD_TOLERANCE_BLOCK;
    if scope == "full" {
        let rel = gradcheck_end_to_end(io.seed)?;
        pass &= rel <= defaults::FD_TOLERANCE_NET;
        results.push(("end_to_end".into(), rel, defaults::FD_TOLERANCE_NET));
    }
    let worst = results.iter().map(|r| r.1).fold(0.0f64, f64::max);
    let mut manifest = Manifest::new(
        "gradcheck",
        &io,
        serde_json::json!({"scope": scope, "fd_step": DEFAULT_FD_STEP}),
    )?;
    let rows: Vec<serde_json::Value> = results
        .iter()
        .map(|(name, rel, tol)| {
            serde_json::json!({"check": name, "worst_rel_error": rel, "tolerance": tol})
        })
        .collect();
    manifest.write("gradcheck.json", &serde_json::to_vec_pretty(&rows)?)?;
    manifest.finish()?;
    println!(
        "worst relative error {worst:.3e}: {}",
        if pass { "PASS" } else { "FAIL" }
    );
    Ok(if pass {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(2)
    })
}

/// Finite-difference checks of each block, mirroring the acceptance suite
/// but sized for an interactive run.
fn gradcheck_blocks(seed: u64) -> Result<Vec<(String, f64)>> {
    use nvseg_core::blocks::*;
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut draw = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.gen_range(-0.5..0.5)).collect() };
    let c = 6usize;
    let acfg = AttentionConfig::new(c, 2)?;
    let mut out = Vec::new();

    let attn_len = total_len(&AttentionParams::defs(c));
    let point = Tensor::from_vec(vec![8 * c + attn_len], draw(8 * c + attn_len))?;
    let rep = finite_diff_check(
        |tape, p| {
            let q = tape.reshape(&tape.slice1d(p, 0, 2 * c)?, vec![2, c])?;
            let k = tape.reshape(&tape.slice1d(p, 2 * c, 3 * c)?, vec![3, c])?;
            let v = tape.reshape(&tape.slice1d(p, 5 * c, 3 * c)?, vec![3, c])?;
            let w = tape.slice1d(p, 8 * c, attn_len)?;
            let params = AttentionParams::bind(&mut ParamCursor::new(tape, &w), c)?;
            let y = multi_head_attention(tape, &q, &k, &v, &params, &acfg)?;
            tape.sum_all(&tape.mul(&y, &y)?)
        },
        &point,
        defaults::FD_TOLERANCE_BLOCK,
        DEFAULT_FD_STEP,
    )?;
    out.push(("multi_head_attention".to_string(), rep.worst.rel_error));

    let block_len = total_len(&TdnvtParams::defs(c));
    let coords = vec![[0, 1, 2], [1, 0, 0], [2, 2, 1], [3, 1, 3], [0, 3, 1], [2, 0, 3]];
    let point = Tensor::from_vec(vec![6 * c + block_len], draw(6 * c + block_len))?;
    let rep = finite_diff_check(
        |tape, p| {
            let feats = tape.reshape(&tape.slice1d(p, 0, 6 * c)?, vec![6, c])?;
            let w = tape.slice1d(p, 6 * c, block_len)?;
            let params = TdnvtParams::bind(&mut ParamCursor::new(tape, &w), c)?;
            let set = nvseg_core::nonvoid::SparseVoxelSet {
                extents: [8, 8, 8],
                coords: coords.clone(),
                ids: (0..6).collect(),
                features: feats,
            };
            let partition = nvseg_core::partition::partition_windows(&set, 4)?;
            let y = tdnvt_block(tape, &set, &partition, &params, &acfg, 4)?;
            tape.sum_all(&tape.mul(&y.features, &y.features)?)
        },
        &point,
        defaults::FD_TOLERANCE_BLOCK,
        DEFAULT_FD_STEP,
    )?;
    out.push(("tdnvt_block".to_string(), rep.worst.rel_error));
    Ok(out)
}

fn gradcheck_end_to_end(seed: u64) -> Result<f64> {
    let mut cfg = ModelConfig::toy(seed);
    cfg.channels = vec![12, 12];
    cfg.embed.channels = 12;
    cfg.window = vec![2, 2];
    cfg.tau_cap = vec![4, 4];
    let phantom = generate_phantom(&PhantomSpec::simple(seed, [8, 8, 8], 0.75))?;
    let theta = Tensor::from_vec(vec![cfg.param_len(1)], cfg.init_params(1))?;
    let labels = phantom.labels.clone();
    let volume = phantom.volume.clone();
    let rep = finite_diff_check(
        |tape, p| {
            let out = forward(tape, &volume, &cfg, p, OccupancyMode::Nonvoid)?;
            let l_seg = seg_loss(tape, &out.prediction.logits, &labels, cfg.classes)?;
            nvseg_core::nonvoid::total_loss(tape, &l_seg, &out.soft_ratio, cfg.embed.lambda_nv)
        },
        &theta,
        defaults::FD_TOLERANCE_NET,
        DEFAULT_FD_STEP,
    )?;
    Ok(rep.worst.rel_error)
}

fn cmd_flops(io: CommonOut, input: InputVolumes, config: Option<PathBuf>) -> Result<ExitCode> {
    let volumes = resolve_inputs(&input, io.seed)?;
    let cfg = load_model_config(config.as_deref(), io.seed)?;
    let first = &volumes[0];
    let nonvoid = count_flops(&first.volume, &cfg, OccupancyMode::Nonvoid)?;
    let dense = count_flops(&first.volume, &cfg, OccupancyMode::DenseForced)?;
    let saving = (1.0 - nonvoid.total_flops as f64 / dense.total_flops as f64) * 100.0;
    let mut manifest = Manifest::new("flops", &io, serde_json::to_value(&cfg)?)?;
    manifest.write(
        "flops.json",
        &serde_json::to_vec_pretty(&serde_json::json!({
            "nonvoid": nonvoid,
            "dense_forced": dense,
            "flop_saving_pct": saving,
        }))?,
    )?;
    manifest.finish()?;
    println!(
        "nonvoid: {} flops; dense-forced: {} flops; saving {saving:.2}%",
        nonvoid.total_flops, dense.total_flops
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_qea(io: CommonOut, input: PathBuf) -> Result<ExitCode> {
    let spec: PolygonSpec = serde_json::from_str(
        &fs::read_to_string(&input)
            .with_context(|| format!("reading polygon fixture {}", input.display()))?,
    )?;
    let results = qea(&spec)?;
    let mut manifest = Manifest::new("qea", &io, serde_json::to_value(&spec)?)?;
    // Radar-chart data: axis names plus per-method radii.
    let radar = serde_json::json!({
        "axes": spec.axes.iter().map(|a| a.name.clone()).collect::<Vec<_>>(),
        "methods": results,
    });
    manifest.write("qea.json", &serde_json::to_vec_pretty(&radar)?)?;
    let mut csv = String::from("method,area\n");
    for r in &results {
        csv.push_str(&format!("{},{}\n", r.method, r.area));
    }
    manifest.write("qea.csv", csv.as_bytes())?;
    manifest.finish()?;
    let mut ranked: Vec<_> = results.iter().collect();
    ranked.sort_by(|a, b| b.area.total_cmp(&a.area));
    for (rank, r) in ranked.iter().enumerate() {
        println!("{}. {} area {:.6}", rank + 1, r.method, r.area);
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_eps_sweep(io: CommonOut, input: InputVolumes, grid: Option<String>) -> Result<ExitCode> {
    let volumes = resolve_inputs(&input, io.seed)?;
    let cfg = nvseg_core::nonvoid::EmbedConfig::default();
    let grid: Vec<f64> = match grid {
        Some(g) => g
            .split(',')
            .map(|s| s.trim().parse::<f64>().map_err(Into::into))
            .collect::<Result<_>>()?,
        None => defaults::epsilon_sweep_grid(),
    };
    let first = &volumes[0];
    let weights = cfg.init_weights(first.volume.modalities(), io.seed);
    let curve = epsilon_sweep(&first.volume, &weights, &cfg, &grid)?;
    let mut manifest = Manifest::new("eps-sweep", &io, serde_json::to_value(&cfg)?)?;
    let mut csv = String::from("epsilon,saving_pct\n");
    for (eps, saving) in &curve {
        csv.push_str(&format!("{eps},{saving}\n"));
    }
    manifest.write("sweep.csv", csv.as_bytes())?;
    manifest.write("sweep.json", &serde_json::to_vec_pretty(&curve)?)?;
    manifest.finish()?;
    for (eps, saving) in &curve {
        println!("eps {eps:.0e}: saving {saving:.4}%");
    }
    Ok(ExitCode::SUCCESS)
}

#[derive(Deserialize, Serialize)]
struct ComparisonsFile {
    comparisons: Vec<ComparisonEntry>,
}

#[derive(Deserialize, Serialize)]
struct ComparisonEntry {
    name: String,
    a: Vec<f64>,
    b: Vec<f64>,
}

fn cmd_significance(io: CommonOut, input: PathBuf, alpha: f64) -> Result<ExitCode> {
    let file: ComparisonsFile = serde_json::from_str(
        &fs::read_to_string(&input)
            .with_context(|| format!("reading comparisons {}", input.display()))?,
    )?;
    let comparisons: Vec<(String, Vec<f64>, Vec<f64>)> = file
        .comparisons
        .into_iter()
        .map(|c| (c.name, c.a, c.b))
        .collect();
    let results = wilcoxon_holm(&comparisons, alpha)?;
    let mut manifest = Manifest::new(
        "significance",
        &io,
        serde_json::json!({"alpha": alpha}),
    )?;
    manifest.write("significance.json", &serde_json::to_vec_pretty(&results)?)?;
    let mut csv = String::from("name,n_nonzero,statistic,raw_p,adjusted_p,significant\n");
    for r in &results {
        csv.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.name,
            r.n_nonzero,
            r.statistic,
            r.raw_p.map_or(String::from(""), |p| p.to_string()),
            r.adjusted_p.map_or(String::from(""), |p| p.to_string()),
            r.significant
        ));
    }
    manifest.write("significance.csv", csv.as_bytes())?;
    manifest.finish()?;
    for r in &results {
        match (r.raw_p, r.adjusted_p) {
            (Some(raw), Some(adj)) => println!(
                "{}: raw p {raw:.6}, holm-adjusted {adj:.6}{}",
                r.name,
                if r.significant { " (significant)" } else { "" }
            ),
            _ => println!("{}: inconclusive ({} nonzero differences)", r.name, r.n_nonzero),
        }
    }
    Ok(ExitCode::SUCCESS)
}
