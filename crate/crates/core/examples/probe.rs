// Scratch probe for runtime budgets; not part of the deliverable surface.
use std::time::Instant;

use nvseg_core::net::{forward, seg_loss, train_toy, ModelConfig, OccupancyMode};
use nvseg_core::tensor::{Tape, Tensor};
use nvseg_core::volume::{generate_phantom, PhantomSpec};

fn main() {
    // End-to-end gradient-check instance: 8^3 volume, 2 stages, C = 12.
    let mut cfg = ModelConfig::toy(42);
    cfg.channels = vec![12, 12];
    cfg.embed.channels = 12;
    cfg.window = vec![2, 2];
    cfg.tau_cap = vec![4, 4];
    let phantom = generate_phantom(&PhantomSpec::simple(7, [8, 8, 8], 0.75)).unwrap();
    let n_params = cfg.param_len(1);
    println!("e2e params: {n_params}");

    let theta = Tensor::from_vec(vec![n_params], cfg.init_params(1)).unwrap();
    let t0 = Instant::now();
    let reps = 20;
    for _ in 0..reps {
        let tape = Tape::new();
        let out = forward(&tape, &phantom.volume, &cfg, &theta, OccupancyMode::Nonvoid).unwrap();
        let _ = seg_loss(&tape, &out.prediction.logits, &phantom.labels, cfg.classes).unwrap();
    }
    let per = t0.elapsed().as_secs_f64() / reps as f64;
    println!(
        "forward+loss: {:.1} ms -> full fd (2 eval/param): ~{:.0} s",
        per * 1e3,
        per * 2.0 * n_params as f64
    );

    // Training probe: toy default on a 16^3 two-class phantom.
    let phantom16 = generate_phantom(&PhantomSpec::simple(11, [16, 16, 16], 0.6)).unwrap();
    for (lambda, lr) in [(0.0, 0.2), (0.1, 0.2)] {
        let mut tcfg = ModelConfig::toy(42);
        tcfg.embed.lambda_nv = lambda;
        let t0 = Instant::now();
        match train_toy(&phantom16, &tcfg, 50, lr) {
            Ok(run) => {
                let first = &run.trajectory[0];
                let last = run.trajectory.last().unwrap();
                println!(
                    "lambda={lambda} lr={lr}: L0={:.4} L50={:.4} drop={:.1}% r_nv0={:.4} r_nv50={:.4} ({:.1}s)",
                    first.total_loss,
                    last.total_loss,
                    (1.0 - last.total_loss / first.total_loss) * 100.0,
                    first.soft_ratio,
                    last.soft_ratio,
                    t0.elapsed().as_secs_f64()
                );
            }
            Err(e) => println!("lambda={lambda} lr={lr}: DIVERGED: {e}"),
        }
    }
}
