//! Central finite-difference gradient checking.
//!
//! The checker evaluates a scalar-valued function twice: once on a tape to
//! obtain the analytic gradient, then coordinate-by-coordinate with untracked
//! perturbed inputs to obtain the numeric one. It is the independent oracle
//! behind every gradient assertion in this crate.

use crate::error::{Error, Result};

use super::tape::Tape;
use super::Tensor;

/// Default central-difference step.
pub const DEFAULT_FD_STEP: f64 = 1e-5;

/// Per-coordinate comparison of analytic and numeric derivatives.
#[derive(Clone, Debug)]
pub struct FdEntry {
    pub coord: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug)]
pub struct FdReport {
    pub entries: Vec<FdEntry>,
    pub worst: FdEntry,
    pub tolerance: f64,
}

impl FdReport {
    pub fn pass(&self) -> bool {
        self.worst.rel_error <= self.tolerance
    }
}

fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Check the gradient of `f` at `point` against central differences with
/// step `h` (use [`DEFAULT_FD_STEP`] unless the function is very nonlinear).
///
/// `f` must treat its tensor argument as the only differentiable input and
/// return a scalar. It is called once with a tracked leaf and `2 * numel`
/// times with untracked perturbed points.
pub fn finite_diff_check<F>(f: F, point: &Tensor, tolerance: f64, h: f64) -> Result<FdReport>
where
    F: Fn(&Tape, &Tensor) -> Result<Tensor>,
{
    let tape = Tape::new();
    let x = tape.leaf(point);
    let y = f(&tape, &x)?;
    if y.numel() != 1 {
        return Err(Error::NonScalarBackward {
            shape: y.shape().to_vec(),
        });
    }
    let analytic = tape
        .backward(&y)?
        .wrt(&x)
        .expect("leaf is tracked by construction");

    let probe = |data: Vec<f64>| -> Result<f64> {
        let t = Tape::new();
        let p = Tensor::from_vec(point.shape().to_vec(), data)?;
        let out = f(&t, &p)?;
        Ok(out.item())
    };

    let mut entries = Vec::with_capacity(point.numel());
    for coord in 0..point.numel() {
        let mut plus = point.data().to_vec();
        let mut minus = point.data().to_vec();
        plus[coord] += h;
        minus[coord] -= h;
        let (fp, fm) = match (probe(plus), probe(minus)) {
            (Ok(a), Ok(b)) => (a, b),
            _ => return Err(Error::NonFiniteProbe { coord }),
        };
        let numeric = (fp - fm) / (2.0 * h);
        entries.push(FdEntry {
            coord,
            analytic: analytic[coord],
            numeric,
            rel_error: rel_error(analytic[coord], numeric),
        });
    }
    let worst = entries
        .iter()
        .cloned()
        .max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
        .expect("point has at least one coordinate");
    Ok(FdReport {
        entries,
        worst,
        tolerance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_function_agrees_to_machine_noise() {
        let point = Tensor::from_vec(vec![3], vec![0.4, -1.1, 2.0]).unwrap();
        let report = finite_diff_check(
            |tape, x| tape.sum_all(&tape.mul_scalar(x, 3.0)?),
            &point,
            1e-10,
            DEFAULT_FD_STEP,
        )
        .unwrap();
        assert!(report.pass(), "worst {:?}", report.worst);
    }

    #[test]
    fn cubic_truncation_error_shrinks_four_fold_when_h_halves() {
        // Central differences have O(h^2) truncation error; for x^3 at x=1
        // the error is exactly h^2, so halving h shrinks it ~4x. A large h
        // keeps rounding noise far below the truncation term.
        let point = Tensor::scalar(1.0).unwrap();
        let cube = |tape: &Tape, x: &Tensor| {
            let sq = tape.mul(x, x)?;
            tape.sum_all(&tape.mul(&sq, x)?)
        };
        let r1 = finite_diff_check(cube, &point, 1.0, 1e-3).unwrap();
        let r2 = finite_diff_check(cube, &point, 1.0, 5e-4).unwrap();
        let e1 = (r1.worst.analytic - r1.worst.numeric).abs();
        let e2 = (r2.worst.analytic - r2.worst.numeric).abs();
        let ratio = e1 / e2;
        assert!((3.5..=4.5).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn two_layer_mlp_gradient_matches_finite_differences() {
        // Random 2-layer MLP on a 4-vector; weights folded into the probe
        // point so every parameter coordinate gets checked.
        let mut state = 0x9e37_79b9_7f4a_7c15u64;
        let mut next = || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((state >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        };
        let n_in = 4;
        let n_hidden = 3;
        // Layout: [x(4) | w1(4x3) | w2(3x1)]
        let total = n_in + n_in * n_hidden + n_hidden;
        let point =
            Tensor::from_vec(vec![total], (0..total).map(|_| next()).collect()).unwrap();
        let report = finite_diff_check(
            |tape, p| {
                let x = tape.reshape(&tape.slice1d(p, 0, n_in)?, vec![1, n_in])?;
                let w1 = tape.reshape(&tape.slice1d(p, n_in, n_in * n_hidden)?, vec![n_in, n_hidden])?;
                let w2 = tape.reshape(
                    &tape.slice1d(p, n_in + n_in * n_hidden, n_hidden)?,
                    vec![n_hidden, 1],
                )?;
                let h = tape.gelu(&tape.matmul(&x, &w1)?)?;
                tape.sum_all(&tape.matmul(&h, &w2)?)
            },
            &point,
            1e-4,
            DEFAULT_FD_STEP,
        )
        .unwrap();
        assert!(report.pass(), "worst {:?}", report.worst);
    }

    #[test]
    fn probe_failure_identifies_coordinate() {
        // ln crosses zero when coordinate 1 is perturbed downward.
        let point = Tensor::from_vec(vec![2], vec![1.0, 5e-6]).unwrap();
        let err = finite_diff_check(
            |tape, x| tape.sum_all(&tape.ln(x)?),
            &point,
            1e-4,
            DEFAULT_FD_STEP,
        )
        .unwrap_err();
        match err {
            Error::NonFiniteProbe { coord } => assert_eq!(coord, 1),
            other => panic!("unexpected error {other:?}"),
        }
    }
}
