//! Every differentiable primitive is checked against central finite
//! differences on random inputs in [-2, 2].

use nvseg_core::tensor::{finite_diff_check, NormOrder, Tape, Tensor, DEFAULT_FD_STEP};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-4;

fn random_point(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
    let numel: usize = shape.iter().product();
    let data = (0..numel).map(|_| rng.gen_range(-2.0..2.0)).collect();
    Tensor::from_vec(shape, data).unwrap()
}

fn check<F>(name: &str, point: &Tensor, f: F)
where
    F: Fn(&Tape, &Tensor) -> nvseg_core::Result<Tensor>,
{
    let report = finite_diff_check(f, point, TOL, DEFAULT_FD_STEP).unwrap();
    assert!(
        report.pass(),
        "{name}: worst rel error {:.3e} at coord {} (analytic {:.6e}, numeric {:.6e})",
        report.worst.rel_error,
        report.worst.coord,
        report.worst.analytic,
        report.worst.numeric
    );
}

#[test]
fn elementwise_binary_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let p = random_point(&mut rng, vec![6]);
    // Both operands derive from the probe point so each op's two VJPs get hit.
    check("add", &p, |t, x| {
        let y = t.mul_scalar(x, 0.5)?;
        t.sum_all(&t.add(x, &y)?)
    });
    check("sub", &p, |t, x| {
        let y = t.gelu(x)?;
        t.sum_all(&t.sub(x, &y)?)
    });
    check("mul", &p, |t, x| {
        let y = t.add_scalar(x, 1.5)?;
        t.sum_all(&t.mul(x, &y)?)
    });
    check("div", &p, |t, x| {
        // Keep the denominator away from zero.
        let denom = t.add_scalar(&t.sigmoid(x)?, 1.0)?;
        t.sum_all(&t.div(x, &denom)?)
    });
}

#[test]
fn scalar_and_unary_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let p = random_point(&mut rng, vec![7]);
    check("add_scalar", &p, |t, x| t.sum_all(&t.add_scalar(x, -0.7)?));
    check("mul_scalar", &p, |t, x| t.sum_all(&t.mul_scalar(x, 2.3)?));
    check("sigmoid", &p, |t, x| t.sum_all(&t.sigmoid(x)?));
    check("gelu", &p, |t, x| t.sum_all(&t.gelu(x)?));
    check("exp", &p, |t, x| t.sum_all(&t.exp(x)?));
    check("ln", &p, |t, x| {
        // Shift into the positive domain.
        t.sum_all(&t.ln(&t.add_scalar(&t.sigmoid(x)?, 0.5)?)?)
    });
}

#[test]
fn matmul_and_transpose() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let p = random_point(&mut rng, vec![2 * 3 + 3 * 2]);
    check("matmul", &p, |t, x| {
        let a = t.reshape(&t.slice1d(x, 0, 6)?, vec![2, 3])?;
        let b = t.reshape(&t.slice1d(x, 6, 6)?, vec![3, 2])?;
        t.sum_all(&t.gelu(&t.matmul(&a, &b)?)?)
    });
    let q = random_point(&mut rng, vec![3 * 4]);
    check("transpose2", &q, |t, x| {
        let a = t.reshape(x, vec![3, 4])?;
        let at = t.transpose2(&a)?;
        // Break symmetry so the transpose must be correct, not just a copy.
        let w = Tensor::from_vec(vec![3], vec![0.3, -1.1, 0.9]).unwrap();
        let m = t.matmul(&at, &t.reshape(&w, vec![3, 1])?)?;
        t.sum_all(&t.mul(&m, &m)?)
    });
}

#[test]
fn conv3d_wrt_weights_and_input() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let (k, ci, co) = (2usize, 2usize, 3usize);
    let x_len = 3 * 3 * 3 * ci;
    let w_len = k * k * k * ci * co;
    let p = random_point(&mut rng, vec![x_len + w_len]);
    check("conv3d", &p, |t, probe| {
        let x = t.reshape(&t.slice1d(probe, 0, x_len)?, vec![3, 3, 3, ci])?;
        let w = t.reshape(&t.slice1d(probe, x_len, w_len)?, vec![k, k, k, ci, co])?;
        let y = t.conv3d(&x, &w, 1, 1)?;
        t.sum_all(&t.mul(&y, &y)?)
    });
}

#[test]
fn softmax_and_layer_norm() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let p = random_point(&mut rng, vec![2 * 4]);
    check("softmax", &p, |t, x| {
        let a = t.reshape(x, vec![2, 4])?;
        let s = t.softmax(&a)?;
        let w = Tensor::from_vec(vec![2, 4], (0..8).map(|i| 0.25 * i as f64 - 1.0).collect())
            .unwrap();
        t.sum_all(&t.mul(&s, &w)?)
    });
    let q = random_point(&mut rng, vec![2 * 4 + 4 + 4]);
    check("layer_norm", &q, |t, x| {
        let a = t.reshape(&t.slice1d(x, 0, 8)?, vec![2, 4])?;
        let gamma = t.slice1d(x, 8, 4)?;
        let beta = t.slice1d(x, 12, 4)?;
        let y = t.layer_norm(&a, &gamma, &beta, 1e-5)?;
        t.sum_all(&t.mul(&y, &y)?)
    });
}

#[test]
fn reductions() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let p = random_point(&mut rng, vec![3 * 4]);
    let weighted = |t: &Tape, v: &Tensor| -> nvseg_core::Result<Tensor> {
        let w = Tensor::from_vec(vec![3], vec![0.7, -0.2, 1.3]).unwrap();
        t.sum_all(&t.mul(v, &w)?)
    };
    check("sum_all", &p, |t, x| t.sum_all(x));
    check("mean_all", &p, |t, x| t.mean_all(x));
    check("sum_last", &p, |t, x| {
        let a = t.reshape(x, vec![3, 4])?;
        weighted(t, &t.sum_last(&a)?)
    });
    check("max_last", &p, |t, x| {
        let a = t.reshape(x, vec![3, 4])?;
        weighted(t, &t.max_last(&a)?)
    });
    check("lp_norm_last_l2", &p, |t, x| {
        let a = t.reshape(x, vec![3, 4])?;
        weighted(t, &t.lp_norm_last(&a, NormOrder::L2)?)
    });
    check("lp_norm_last_l1", &p, |t, x| {
        let a = t.reshape(x, vec![3, 4])?;
        weighted(t, &t.lp_norm_last(&a, NormOrder::L1)?)
    });
}

#[test]
fn data_movement_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let p = random_point(&mut rng, vec![4 * 2]);
    let quadratic = |t: &Tape, v: &Tensor| -> nvseg_core::Result<Tensor> {
        t.sum_all(&t.mul(v, v)?)
    };
    check("gather_rows", &p, |t, x| {
        let a = t.reshape(x, vec![4, 2])?;
        quadratic(t, &t.gather_rows(&a, &[3, 1, 1, 0])?)
    });
    check("scatter_rows", &p, |t, x| {
        let a = t.reshape(x, vec![4, 2])?;
        quadratic(t, &t.scatter_rows(&a, &[5, 0, 2, 0], 6)?)
    });
    check("take_per_row", &p, |t, x| {
        let a = t.reshape(x, vec![4, 2])?;
        quadratic(t, &t.take_per_row(&a, &[1, 0, 0, 1])?)
    });
    check("slice1d", &p, |t, x| quadratic(t, &t.slice1d(x, 2, 5)?));
    check("reshape", &p, |t, x| {
        quadratic(t, &t.reshape(x, vec![2, 4])?)
    });
}

#[test]
fn broadcast_and_upsample_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    let p = random_point(&mut rng, vec![3]);
    let quadratic = |t: &Tape, v: &Tensor| -> nvseg_core::Result<Tensor> {
        t.sum_all(&t.mul(v, v)?)
    };
    check("repeat_row", &p, |t, x| quadratic(t, &t.repeat_row(x, 4)?));
    check("repeat_col", &p, |t, x| quadratic(t, &t.repeat_col(x, 5)?));
    let q = random_point(&mut rng, vec![2 * 2 * 2 * 3]);
    check("upsample3", &q, |t, x| {
        let a = t.reshape(x, vec![2, 2, 2, 3])?;
        quadratic(t, &t.upsample3(&a, 2)?)
    });
    let r = random_point(&mut rng, vec![2 * 3 + 3]);
    check("add_row_broadcast", &r, |t, x| {
        let a = t.reshape(&t.slice1d(x, 0, 6)?, vec![2, 3])?;
        let v = t.slice1d(x, 6, 3)?;
        quadratic(t, &t.add_row_broadcast(&a, &v)?)
    });
    let s = random_point(&mut rng, vec![2 * 3]);
    check("logsumexp_last", &s, |t, x| {
        let a = t.reshape(x, vec![2, 3])?;
        t.sum_all(&t.logsumexp_last(&a)?)
    });
}
