//! Primitive operations: forward evaluation and vector-Jacobian products.
//!
//! Every primitive validates shapes, computes sequentially (left-to-right by
//! flat index, so results are bit-stable), checks the output for non-finite
//! values, and records itself on the tape when any input is tracked.

use std::sync::Arc;

use crate::error::{Error, Result};

use super::tape::{accumulate, NodeId, NodeInput, Tape};
use super::{idx4, Tensor};

/// Order of the per-voxel feature norm.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum NormOrder {
    L1,
    L2,
}

impl NormOrder {
    pub fn from_p(p: u32) -> Result<Self> {
        match p {
            1 => Ok(NormOrder::L1),
            2 => Ok(NormOrder::L2),
            other => Err(Error::InvalidConfig(format!(
                "norm order p must be 1 or 2, got {other}"
            ))),
        }
    }
}

#[derive(Clone, Debug)]
pub(crate) enum Op {
    Leaf,
    Add,
    Sub,
    Mul,
    Div,
    // The added constant is saved as part of the op record (Debug output)
    // even though its pullback never needs it.
    AddScalar(#[allow(dead_code)] f64),
    MulScalar(f64),
    Sigmoid,
    Gelu,
    Exp,
    Ln,
    Matmul {
        m: usize,
        k: usize,
        n: usize,
    },
    Transpose {
        rows: usize,
        cols: usize,
    },
    Conv3d {
        in_dims: [usize; 4],
        kernel: [usize; 3],
        out_channels: usize,
        stride: usize,
        pad: usize,
    },
    Softmax {
        cols: usize,
    },
    LayerNorm {
        cols: usize,
        eps: f64,
    },
    SumAll,
    MeanAll,
    SumLast {
        cols: usize,
    },
    MaxLast {
        cols: usize,
    },
    LpNormLast {
        cols: usize,
        order: NormOrder,
    },
    GatherRows {
        idx: Arc<Vec<usize>>,
        src_rows: usize,
        cols: usize,
    },
    ScatterRows {
        idx: Arc<Vec<usize>>,
        out_rows: usize,
        cols: usize,
    },
    TakePerRow {
        idx: Arc<Vec<usize>>,
        cols: usize,
    },
    Slice1d {
        start: usize,
        len: usize,
        total: usize,
    },
    Reshape,
    RepeatRow {
        times: usize,
        cols: usize,
    },
    RepeatCol {
        rows: usize,
        times: usize,
    },
    Upsample3 {
        in_dims: [usize; 4],
        factor: usize,
    },
}

/// Split a shape into (rows, cols) where cols is the last extent.
fn rows_cols(shape: &[usize]) -> (usize, usize) {
    let cols = *shape.last().unwrap_or(&1);
    let rows = shape.iter().product::<usize>() / cols.max(1);
    (rows, cols)
}

fn conv_out_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    if padded < kernel {
        None
    } else {
        Some((padded - kernel) / stride + 1)
    }
}

impl Tape {
    fn emit(
        &self,
        op: Op,
        inputs: &[&Tensor],
        data: Vec<f64>,
        shape: Vec<usize>,
    ) -> Result<Tensor> {
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                op: op.name(),
                index,
            });
        }
        let out = Arc::new(data);
        let node = if inputs.iter().any(|t| t.is_tracked()) {
            let node_inputs = inputs
                .iter()
                .map(|t| NodeInput {
                    node: t.node_id(),
                    value: t.arc_data(),
                })
                .collect();
            Some(self.push(op, node_inputs, Arc::clone(&out)))
        } else {
            None
        };
        Ok(Tensor::with_node(shape, out, node))
    }

    fn binary_same_shape(
        &self,
        op: Op,
        a: &Tensor,
        b: &Tensor,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        if a.shape() != b.shape() {
            return Err(Error::ShapeMismatch {
                op: op.name(),
                left: a.shape().to_vec(),
                right: b.shape().to_vec(),
            });
        }
        let data = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        self.emit(op, &[a, b], data, a.shape().to_vec())
    }

    pub fn add(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.binary_same_shape(Op::Add, a, b, |x, y| x + y)
    }

    pub fn sub(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.binary_same_shape(Op::Sub, a, b, |x, y| x - y)
    }

    pub fn mul(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.binary_same_shape(Op::Mul, a, b, |x, y| x * y)
    }

    pub fn div(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.binary_same_shape(Op::Div, a, b, |x, y| x / y)
    }

    pub fn add_scalar(&self, a: &Tensor, c: f64) -> Result<Tensor> {
        let data = a.data().iter().map(|&x| x + c).collect();
        self.emit(
            Op::AddScalar(c),
            &[a],
            data,
            a.shape().to_vec(),
        )
    }

    pub fn mul_scalar(&self, a: &Tensor, c: f64) -> Result<Tensor> {
        let data = a.data().iter().map(|&x| x * c).collect();
        self.emit(
            Op::MulScalar(c),
            &[a],
            data,
            a.shape().to_vec(),
        )
    }

    pub fn sigmoid(&self, a: &Tensor) -> Result<Tensor> {
        let data = a.data().iter().map(|&x| sigmoid(x)).collect();
        self.emit(Op::Sigmoid, &[a], data, a.shape().to_vec())
    }

    pub fn gelu(&self, a: &Tensor) -> Result<Tensor> {
        let data = a.data().iter().map(|&x| gelu(x)).collect();
        self.emit(Op::Gelu, &[a], data, a.shape().to_vec())
    }

    pub fn exp(&self, a: &Tensor) -> Result<Tensor> {
        let data = a.data().iter().map(|&x| x.exp()).collect();
        self.emit(Op::Exp, &[a], data, a.shape().to_vec())
    }

    pub fn ln(&self, a: &Tensor) -> Result<Tensor> {
        let data = a.data().iter().map(|&x| x.ln()).collect();
        self.emit(Op::Ln, &[a], data, a.shape().to_vec())
    }

    /// `a: [m,k] @ b: [k,n] -> [m,n]`.
    pub fn matmul(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (ash, bsh) = (a.shape(), b.shape());
        if ash.len() != 2 || bsh.len() != 2 || ash[1] != bsh[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                left: ash.to_vec(),
                right: bsh.to_vec(),
            });
        }
        let (m, k, n) = (ash[0], ash[1], bsh[1]);
        let data = matmul_raw(a.data(), b.data(), m, k, n);
        self.emit(Op::Matmul { m, k, n }, &[a, b], data, vec![m, n])
    }

    pub fn transpose2(&self, a: &Tensor) -> Result<Tensor> {
        let sh = a.shape();
        if sh.len() != 2 {
            return Err(Error::ShapeMismatch {
                op: "transpose2",
                left: sh.to_vec(),
                right: vec![],
            });
        }
        let (rows, cols) = (sh[0], sh[1]);
        let mut data = vec![0.0; rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                data[c * rows + r] = a.data()[r * cols + c];
            }
        }
        self.emit(
            Op::Transpose { rows, cols },
            &[a],
            data,
            vec![cols, rows],
        )
    }

    /// 3D convolution, channels-last, zero padding, no bias.
    ///
    /// `x: [H,W,D,Ci]`, `w: [kx,ky,kz,Ci,Co]`. The accumulator starts at 0.0
    /// so an identically-zero patch yields bit-exact zero outputs for any
    /// weights.
    pub fn conv3d(&self, x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
        let xs = x.shape();
        let ws = w.shape();
        if xs.len() != 4 || ws.len() != 5 || ws[3] != xs[3] || stride == 0 {
            return Err(Error::ShapeMismatch {
                op: "conv3d",
                left: xs.to_vec(),
                right: ws.to_vec(),
            });
        }
        let in_dims = [xs[0], xs[1], xs[2], xs[3]];
        let kernel = [ws[0], ws[1], ws[2]];
        let out_channels = ws[4];
        let (ho, wo, do_) = match (
            conv_out_extent(xs[0], ws[0], stride, pad),
            conv_out_extent(xs[1], ws[1], stride, pad),
            conv_out_extent(xs[2], ws[2], stride, pad),
        ) {
            (Some(a), Some(b), Some(c)) => (a, b, c),
            _ => {
                return Err(Error::ExtentsTooSmall {
                    extents: [xs[0], xs[1], xs[2]],
                    kernel,
                })
            }
        };
        let data = conv3d_raw(
            x.data(),
            w.data(),
            in_dims,
            kernel,
            out_channels,
            stride,
            pad,
            [ho, wo, do_],
        );
        self.emit(
            Op::Conv3d {
                in_dims,
                kernel,
                out_channels,
                stride,
                pad,
            },
            &[x, w],
            data,
            vec![ho, wo, do_, out_channels],
        )
    }

    /// Softmax over the last axis, computed with max subtraction.
    pub fn softmax(&self, a: &Tensor) -> Result<Tensor> {
        let (rows, cols) = rows_cols(a.shape());
        let mut data = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = &a.data()[r * cols..(r + 1) * cols];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for c in 0..cols {
                let e = (row[c] - m).exp();
                data[r * cols + c] = e;
                sum += e;
            }
            for c in 0..cols {
                data[r * cols + c] /= sum;
            }
        }
        self.emit(Op::Softmax { cols }, &[a], data, a.shape().to_vec())
    }

    /// Layer normalization over the last axis with learnable gain and bias.
    pub fn layer_norm(&self, x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
        let (rows, cols) = rows_cols(x.shape());
        if gamma.shape() != [cols] || beta.shape() != [cols] {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                left: x.shape().to_vec(),
                right: gamma.shape().to_vec(),
            });
        }
        let mut data = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = &x.data()[r * cols..(r + 1) * cols];
            let (mean, sd) = row_mean_sd(row, eps);
            for c in 0..cols {
                data[r * cols + c] = (row[c] - mean) / sd * gamma.data()[c] + beta.data()[c];
            }
        }
        self.emit(
            Op::LayerNorm { cols, eps },
            &[x, gamma, beta],
            data,
            x.shape().to_vec(),
        )
    }

    pub fn sum_all(&self, a: &Tensor) -> Result<Tensor> {
        let mut s = 0.0;
        for &v in a.data() {
            s += v;
        }
        self.emit(Op::SumAll, &[a], vec![s], vec![1])
    }

    pub fn mean_all(&self, a: &Tensor) -> Result<Tensor> {
        let mut s = 0.0;
        for &v in a.data() {
            s += v;
        }
        let n = a.numel() as f64;
        self.emit(Op::MeanAll, &[a], vec![s / n], vec![1])
    }

    /// Sum over the last axis: `[..., K] -> [...]`.
    pub fn sum_last(&self, a: &Tensor) -> Result<Tensor> {
        let (rows, cols) = rows_cols(a.shape());
        let mut data = vec![0.0; rows];
        for r in 0..rows {
            for c in 0..cols {
                data[r] += a.data()[r * cols + c];
            }
        }
        let shape = reduce_last_shape(a.shape());
        self.emit(Op::SumLast { cols }, &[a], data, shape)
    }

    /// Max over the last axis; gradient routes to the first maximizer.
    pub fn max_last(&self, a: &Tensor) -> Result<Tensor> {
        let (rows, cols) = rows_cols(a.shape());
        let mut data = vec![0.0; rows];
        for r in 0..rows {
            let row = &a.data()[r * cols..(r + 1) * cols];
            data[r] = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        }
        let shape = reduce_last_shape(a.shape());
        self.emit(Op::MaxLast { cols }, &[a], data, shape)
    }

    /// ℓp norm over the last axis, p ∈ {1, 2}.
    pub fn lp_norm_last(&self, a: &Tensor, order: NormOrder) -> Result<Tensor> {
        let (rows, cols) = rows_cols(a.shape());
        let mut data = vec![0.0; rows];
        for r in 0..rows {
            let row = &a.data()[r * cols..(r + 1) * cols];
            data[r] = match order {
                NormOrder::L1 => {
                    let mut s = 0.0;
                    for &v in row {
                        s += v.abs();
                    }
                    s
                }
                NormOrder::L2 => {
                    let mut s = 0.0;
                    for &v in row {
                        s += v * v;
                    }
                    s.sqrt()
                }
            };
        }
        let shape = reduce_last_shape(a.shape());
        self.emit(
            Op::LpNormLast { cols, order },
            &[a],
            data,
            shape,
        )
    }

    /// Select rows of a `[N,C]` matrix: result row i is `a[idx[i], :]`.
    pub fn gather_rows(&self, a: &Tensor, idx: &[usize]) -> Result<Tensor> {
        let (src_rows, cols) = rows_cols(a.shape());
        if let Some(&bad) = idx.iter().find(|&&i| i >= src_rows) {
            return Err(Error::InvalidConfig(format!(
                "gather_rows: index {bad} out of {src_rows} rows"
            )));
        }
        let mut data = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            data.extend_from_slice(&a.data()[i * cols..(i + 1) * cols]);
        }
        self.emit(
            Op::GatherRows {
                idx: Arc::new(idx.to_vec()),
                src_rows,
                cols,
            },
            &[a],
            data,
            vec![idx.len(), cols],
        )
    }

    /// Scatter-add rows of a `[M,C]` matrix into a zero `[out_rows,C]`
    /// matrix: row `idx[i]` of the output accumulates row i of the input.
    pub fn scatter_rows(&self, a: &Tensor, idx: &[usize], out_rows: usize) -> Result<Tensor> {
        let (in_rows, cols) = rows_cols(a.shape());
        if idx.len() != in_rows {
            return Err(Error::ShapeMismatch {
                op: "scatter_rows",
                left: vec![in_rows, cols],
                right: vec![idx.len()],
            });
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= out_rows) {
            return Err(Error::InvalidConfig(format!(
                "scatter_rows: index {bad} out of {out_rows} rows"
            )));
        }
        let mut data = vec![0.0; out_rows * cols];
        for (i, &dst) in idx.iter().enumerate() {
            for c in 0..cols {
                data[dst * cols + c] += a.data()[i * cols + c];
            }
        }
        self.emit(
            Op::ScatterRows {
                idx: Arc::new(idx.to_vec()),
                out_rows,
                cols,
            },
            &[a],
            data,
            vec![out_rows, cols],
        )
    }

    /// Pick one element per row of a `[N,K]` matrix: result[i] = a[i, idx[i]].
    pub fn take_per_row(&self, a: &Tensor, idx: &[usize]) -> Result<Tensor> {
        let (rows, cols) = rows_cols(a.shape());
        if idx.len() != rows || idx.iter().any(|&i| i >= cols) {
            return Err(Error::ShapeMismatch {
                op: "take_per_row",
                left: vec![rows, cols],
                right: vec![idx.len()],
            });
        }
        let data = idx
            .iter()
            .enumerate()
            .map(|(r, &c)| a.data()[r * cols + c])
            .collect();
        self.emit(
            Op::TakePerRow {
                idx: Arc::new(idx.to_vec()),
                cols,
            },
            &[a],
            data,
            vec![rows],
        )
    }

    /// Contiguous slice of a rank-1 tensor.
    pub fn slice1d(&self, a: &Tensor, start: usize, len: usize) -> Result<Tensor> {
        let total = a.numel();
        if a.shape().len() != 1 || start + len > total {
            return Err(Error::ShapeMismatch {
                op: "slice1d",
                left: a.shape().to_vec(),
                right: vec![start, len],
            });
        }
        let data = a.data()[start..start + len].to_vec();
        self.emit(
            Op::Slice1d { start, len, total },
            &[a],
            data,
            vec![len],
        )
    }

    pub fn reshape(&self, a: &Tensor, shape: Vec<usize>) -> Result<Tensor> {
        if shape.iter().product::<usize>() != a.numel() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                left: a.shape().to_vec(),
                right: shape,
            });
        }
        let data = a.data().to_vec();
        self.emit(Op::Reshape, &[a], data, shape)
    }

    /// Tile a `[C]` vector into a `[times, C]` matrix.
    pub fn repeat_row(&self, v: &Tensor, times: usize) -> Result<Tensor> {
        if v.shape().len() != 1 || times == 0 {
            return Err(Error::ShapeMismatch {
                op: "repeat_row",
                left: v.shape().to_vec(),
                right: vec![times],
            });
        }
        let cols = v.numel();
        let mut data = Vec::with_capacity(times * cols);
        for _ in 0..times {
            data.extend_from_slice(v.data());
        }
        self.emit(
            Op::RepeatRow { times, cols },
            &[v],
            data,
            vec![times, cols],
        )
    }

    /// Tile a `[N]` vector into a `[N, times]` matrix (one value per row).
    pub fn repeat_col(&self, v: &Tensor, times: usize) -> Result<Tensor> {
        if v.shape().len() != 1 || times == 0 {
            return Err(Error::ShapeMismatch {
                op: "repeat_col",
                left: v.shape().to_vec(),
                right: vec![times],
            });
        }
        let rows = v.numel();
        let mut data = Vec::with_capacity(rows * times);
        for r in 0..rows {
            for _ in 0..times {
                data.push(v.data()[r]);
            }
        }
        self.emit(
            Op::RepeatCol { rows, times },
            &[v],
            data,
            vec![rows, times],
        )
    }

    /// Nearest-neighbor upsample of a `[H,W,D,C]` tensor by an integer factor.
    pub fn upsample3(&self, a: &Tensor, factor: usize) -> Result<Tensor> {
        let sh = a.shape();
        if sh.len() != 4 || factor == 0 {
            return Err(Error::ShapeMismatch {
                op: "upsample3",
                left: sh.to_vec(),
                right: vec![factor],
            });
        }
        let in_dims = [sh[0], sh[1], sh[2], sh[3]];
        let out_dims = [sh[0] * factor, sh[1] * factor, sh[2] * factor, sh[3]];
        let mut data = vec![0.0; out_dims.iter().product()];
        for x in 0..out_dims[0] {
            for y in 0..out_dims[1] {
                for z in 0..out_dims[2] {
                    for c in 0..sh[3] {
                        data[idx4(out_dims, x, y, z, c)] =
                            a.data()[idx4(in_dims, x / factor, y / factor, z / factor, c)];
                    }
                }
            }
        }
        self.emit(
            Op::Upsample3 { in_dims, factor },
            &[a],
            data,
            out_dims.to_vec(),
        )
    }

    // ── Composites (no dedicated node kind; differentiate through parts) ──

    /// `x + v` where `v: [C]` broadcasts over the rows of `x: [N,C]`.
    pub fn add_row_broadcast(&self, x: &Tensor, v: &Tensor) -> Result<Tensor> {
        let (rows, _) = rows_cols(x.shape());
        let tiled = self.repeat_row(v, rows)?;
        let tiled = self.reshape(&tiled, x.shape().to_vec())?;
        self.add(x, &tiled)
    }

    /// Row-wise log-sum-exp of a `[N,K]` matrix, max-shifted for stability.
    pub fn logsumexp_last(&self, x: &Tensor) -> Result<Tensor> {
        let (_, cols) = rows_cols(x.shape());
        let m = self.max_last(x)?;
        let shifted = self.sub(x, &self.repeat_col(&m, cols)?)?;
        let s = self.sum_last(&self.exp(&shifted)?)?;
        self.add(&self.ln(&s)?, &m)
    }
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const GELU_A: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_B: f64 = 0.044715;

#[inline]
fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_A * (x + GELU_B * x * x * x)).tanh())
}

#[inline]
fn gelu_grad(x: f64) -> f64 {
    let u = GELU_A * (x + GELU_B * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_A * (1.0 + 3.0 * GELU_B * x * x)
}

fn row_mean_sd(row: &[f64], eps: f64) -> (f64, f64) {
    let n = row.len() as f64;
    let mut mean = 0.0;
    for &v in row {
        mean += v;
    }
    mean /= n;
    let mut var = 0.0;
    for &v in row {
        var += (v - mean) * (v - mean);
    }
    var /= n;
    (mean, (var + eps).sqrt())
}

fn reduce_last_shape(shape: &[usize]) -> Vec<usize> {
    if shape.len() <= 1 {
        vec![1]
    } else {
        shape[..shape.len() - 1].to_vec()
    }
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            for j in 0..n {
                out[i * n + j] += av * b[p * n + j];
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn conv3d_raw(
    x: &[f64],
    w: &[f64],
    in_dims: [usize; 4],
    kernel: [usize; 3],
    co: usize,
    stride: usize,
    pad: usize,
    out_sp: [usize; 3],
) -> Vec<f64> {
    let ci = in_dims[3];
    let out_dims = [out_sp[0], out_sp[1], out_sp[2], co];
    let mut out = vec![0.0; out_sp[0] * out_sp[1] * out_sp[2] * co];
    let widx = |kx: usize, ky: usize, kz: usize, i: usize, o: usize| {
        (((kx * kernel[1] + ky) * kernel[2] + kz) * ci + i) * co + o
    };
    for ox in 0..out_sp[0] {
        for oy in 0..out_sp[1] {
            for oz in 0..out_sp[2] {
                for kx in 0..kernel[0] {
                    let ix = (ox * stride + kx) as isize - pad as isize;
                    if ix < 0 || ix as usize >= in_dims[0] {
                        continue;
                    }
                    for ky in 0..kernel[1] {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy as usize >= in_dims[1] {
                            continue;
                        }
                        for kz in 0..kernel[2] {
                            let iz = (oz * stride + kz) as isize - pad as isize;
                            if iz < 0 || iz as usize >= in_dims[2] {
                                continue;
                            }
                            let xb = idx4(in_dims, ix as usize, iy as usize, iz as usize, 0);
                            for i in 0..ci {
                                let xv = x[xb + i];
                                if xv == 0.0 {
                                    // Skipping exact zeros keeps the all-zero
                                    // patch output bit-exactly zero.
                                    continue;
                                }
                                for o in 0..co {
                                    out[idx4(out_dims, ox, oy, oz, o)] +=
                                        xv * w[widx(kx, ky, kz, i, o)];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

impl Op {
    pub(crate) fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Div => "div",
            Op::AddScalar(_) => "add_scalar",
            Op::MulScalar(_) => "mul_scalar",
            Op::Sigmoid => "sigmoid",
            Op::Gelu => "gelu",
            Op::Exp => "exp",
            Op::Ln => "ln",
            Op::Matmul { .. } => "matmul",
            Op::Transpose { .. } => "transpose2",
            Op::Conv3d { .. } => "conv3d",
            Op::Softmax { .. } => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::SumAll => "sum_all",
            Op::MeanAll => "mean_all",
            Op::SumLast { .. } => "sum_last",
            Op::MaxLast { .. } => "max_last",
            Op::LpNormLast { .. } => "lp_norm_last",
            Op::GatherRows { .. } => "gather_rows",
            Op::ScatterRows { .. } => "scatter_rows",
            Op::TakePerRow { .. } => "take_per_row",
            Op::Slice1d { .. } => "slice1d",
            Op::Reshape => "reshape",
            Op::RepeatRow { .. } => "repeat_row",
            Op::RepeatCol { .. } => "repeat_col",
            Op::Upsample3 { .. } => "upsample3",
        }
    }

    /// Accumulate input gradients given the output gradient `g`.
    pub(crate) fn vjp(
        &self,
        inputs: &[NodeInput],
        out: &Arc<Vec<f64>>,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let tracked = |i: usize| -> Option<NodeId> { inputs.get(i).and_then(|inp| inp.node) };
        match self {
            Op::Leaf => {}
            Op::Add => {
                accumulate(grads, tracked(0), g);
                accumulate(grads, tracked(1), g);
            }
            Op::Sub => {
                accumulate(grads, tracked(0), g);
                if tracked(1).is_some() {
                    let neg: Vec<f64> = g.iter().map(|&v| -v).collect();
                    accumulate(grads, tracked(1), &neg);
                }
            }
            Op::Mul => {
                if tracked(0).is_some() {
                    let da: Vec<f64> =
                        g.iter().zip(inputs[1].value.iter()).map(|(&gv, &b)| gv * b).collect();
                    accumulate(grads, tracked(0), &da);
                }
                if tracked(1).is_some() {
                    let db: Vec<f64> =
                        g.iter().zip(inputs[0].value.iter()).map(|(&gv, &a)| gv * a).collect();
                    accumulate(grads, tracked(1), &db);
                }
            }
            Op::Div => {
                let a = &inputs[0].value;
                let b = &inputs[1].value;
                if tracked(0).is_some() {
                    let da: Vec<f64> = g.iter().zip(b.iter()).map(|(&gv, &bv)| gv / bv).collect();
                    accumulate(grads, tracked(0), &da);
                }
                if tracked(1).is_some() {
                    let db: Vec<f64> = g
                        .iter()
                        .zip(a.iter().zip(b.iter()))
                        .map(|(&gv, (&av, &bv))| -gv * av / (bv * bv))
                        .collect();
                    accumulate(grads, tracked(1), &db);
                }
            }
            Op::AddScalar(_) => accumulate(grads, tracked(0), g),
            Op::MulScalar(c) => {
                let da: Vec<f64> = g.iter().map(|&v| v * c).collect();
                accumulate(grads, tracked(0), &da);
            }
            Op::Sigmoid => {
                let da: Vec<f64> = g
                    .iter()
                    .zip(out.iter())
                    .map(|(&gv, &y)| gv * y * (1.0 - y))
                    .collect();
                accumulate(grads, tracked(0), &da);
            }
            Op::Gelu => {
                let da: Vec<f64> = g
                    .iter()
                    .zip(inputs[0].value.iter())
                    .map(|(&gv, &x)| gv * gelu_grad(x))
                    .collect();
                accumulate(grads, tracked(0), &da);
            }
            Op::Exp => {
                let da: Vec<f64> = g.iter().zip(out.iter()).map(|(&gv, &y)| gv * y).collect();
                accumulate(grads, tracked(0), &da);
            }
            Op::Ln => {
                let da: Vec<f64> = g
                    .iter()
                    .zip(inputs[0].value.iter())
                    .map(|(&gv, &x)| gv / x)
                    .collect();
                accumulate(grads, tracked(0), &da);
            }
            Op::Matmul { m, k, n } => {
                let a = &inputs[0].value;
                let b = &inputs[1].value;
                if tracked(0).is_some() {
                    // dA = g @ B^T
                    let mut da = vec![0.0; m * k];
                    for i in 0..*m {
                        for j in 0..*n {
                            let gv = g[i * n + j];
                            for p in 0..*k {
                                da[i * k + p] += gv * b[p * n + j];
                            }
                        }
                    }
                    accumulate(grads, tracked(0), &da);
                }
                if tracked(1).is_some() {
                    // dB = A^T @ g
                    let mut db = vec![0.0; k * n];
                    for i in 0..*m {
                        for p in 0..*k {
                            let av = a[i * k + p];
                            for j in 0..*n {
                                db[p * n + j] += av * g[i * n + j];
                            }
                        }
                    }
                    accumulate(grads, tracked(1), &db);
                }
            }
            Op::Transpose { rows, cols } => {
                // g has shape [cols, rows]; transpose back.
                let mut da = vec![0.0; rows * cols];
                for r in 0..*rows {
                    for c in 0..*cols {
                        da[r * cols + c] = g[c * rows + r];
                    }
                }
                accumulate(grads, tracked(0), &da);
            }
            Op::Conv3d {
                in_dims,
                kernel,
                out_channels,
                stride,
                pad,
            } => {
                conv3d_vjp(
                    inputs, g, grads, *in_dims, *kernel, *out_channels, *stride, *pad,
                );
            }
            Op::Softmax { cols } => {
                let rows = out.len() / cols;
                let mut da = vec![0.0; out.len()];
                for r in 0..rows {
                    let y = &out[r * cols..(r + 1) * cols];
                    let gr = &g[r * cols..(r + 1) * cols];
                    let mut dot = 0.0;
                    for c in 0..*cols {
                        dot += gr[c] * y[c];
                    }
                    for c in 0..*cols {
                        da[r * cols + c] = y[c] * (gr[c] - dot);
                    }
                }
                accumulate(grads, tracked(0), &da);
            }
            Op::LayerNorm { cols, eps } => {
                layer_norm_vjp(inputs, g, grads, *cols, *eps);
            }
            Op::SumAll => {
                let da = vec![g[0]; inputs[0].value.len()];
                accumulate(grads, tracked(0), &da);
            }
            Op::MeanAll => {
                let n = inputs[0].value.len();
                let da = vec![g[0] / n as f64; n];
                accumulate(grads, tracked(0), &da);
            }
            Op::SumLast { cols } => {
                let rows = g.len();
                let mut da = vec![0.0; rows * cols];
                for r in 0..rows {
                    for c in 0..*cols {
                        da[r * cols + c] = g[r];
                    }
                }
                accumulate(grads, tracked(0), &da);
            }
            Op::MaxLast { cols } => {
                let x = &inputs[0].value;
                let rows = g.len();
                let mut da = vec![0.0; rows * cols];
                for r in 0..rows {
                    let row = &x[r * cols..(r + 1) * cols];
                    let mut arg = 0;
                    for c in 1..*cols {
                        if row[c] > row[arg] {
                            arg = c;
                        }
                    }
                    da[r * cols + arg] = g[r];
                }
                accumulate(grads, tracked(0), &da);
            }
            Op::LpNormLast { cols, order } => {
                let x = &inputs[0].value;
                let rows = g.len();
                let mut da = vec![0.0; rows * cols];
                for r in 0..rows {
                    let row = &x[r * cols..(r + 1) * cols];
                    match order {
                        NormOrder::L1 => {
                            for c in 0..*cols {
                                da[r * cols + c] = g[r] * row[c].signum() * f64::from(row[c] != 0.0);
                            }
                        }
                        NormOrder::L2 => {
                            let norm = out[r];
                            if norm > 0.0 {
                                for c in 0..*cols {
                                    da[r * cols + c] = g[r] * row[c] / norm;
                                }
                            }
                            // Zero vector: subgradient 0 (energy cannot drop
                            // below zero, so this is the sensible choice).
                        }
                    }
                }
                accumulate(grads, tracked(0), &da);
            }
            Op::GatherRows { idx, src_rows, cols } => {
                let mut da = vec![0.0; src_rows * cols];
                for (i, &src) in idx.iter().enumerate() {
                    for c in 0..*cols {
                        da[src * cols + c] += g[i * cols + c];
                    }
                }
                accumulate(grads, tracked(0), &da);
            }
            Op::ScatterRows {
                idx,
                out_rows,
                cols,
            } => {
                debug_assert_eq!(g.len(), out_rows * cols);
                let mut da = vec![0.0; idx.len() * cols];
                for (i, &dst) in idx.iter().enumerate() {
                    for c in 0..*cols {
                        da[i * cols + c] = g[dst * cols + c];
                    }
                }
                accumulate(grads, tracked(0), &da);
            }
            Op::TakePerRow { idx, cols } => {
                let mut da = vec![0.0; idx.len() * cols];
                for (r, &c) in idx.iter().enumerate() {
                    da[r * cols + c] = g[r];
                }
                accumulate(grads, tracked(0), &da);
            }
            Op::Slice1d { start, len, total } => {
                let mut da = vec![0.0; *total];
                da[*start..start + len].copy_from_slice(g);
                accumulate(grads, tracked(0), &da);
            }
            Op::Reshape => accumulate(grads, tracked(0), g),
            Op::RepeatRow { times, cols } => {
                let mut da = vec![0.0; *cols];
                for t in 0..*times {
                    for c in 0..*cols {
                        da[c] += g[t * cols + c];
                    }
                }
                accumulate(grads, tracked(0), &da);
            }
            Op::RepeatCol { rows, times } => {
                let mut da = vec![0.0; *rows];
                for r in 0..*rows {
                    for t in 0..*times {
                        da[r] += g[r * times + t];
                    }
                }
                accumulate(grads, tracked(0), &da);
            }
            Op::Upsample3 { in_dims, factor } => {
                let out_dims = [
                    in_dims[0] * factor,
                    in_dims[1] * factor,
                    in_dims[2] * factor,
                    in_dims[3],
                ];
                let mut da = vec![0.0; in_dims.iter().product()];
                for x in 0..out_dims[0] {
                    for y in 0..out_dims[1] {
                        for z in 0..out_dims[2] {
                            for c in 0..in_dims[3] {
                                da[idx4(*in_dims, x / factor, y / factor, z / factor, c)] +=
                                    g[idx4(out_dims, x, y, z, c)];
                            }
                        }
                    }
                }
                accumulate(grads, tracked(0), &da);
            }
        }
    }
}

fn layer_norm_vjp(
    inputs: &[NodeInput],
    g: &[f64],
    grads: &mut [Option<Vec<f64>>],
    cols: usize,
    eps: f64,
) {
    let x = &inputs[0].value;
    let gamma = &inputs[1].value;
    let rows = x.len() / cols;
    let want_dx = inputs[0].node.is_some();
    let want_dgamma = inputs[1].node.is_some();
    let want_dbeta = inputs[2].node.is_some();
    let mut dx = if want_dx { vec![0.0; x.len()] } else { Vec::new() };
    let mut dgamma = if want_dgamma { vec![0.0; cols] } else { Vec::new() };
    let mut dbeta = if want_dbeta { vec![0.0; cols] } else { Vec::new() };
    let mut xhat = vec![0.0; cols];
    let mut dxh = vec![0.0; cols];
    for r in 0..rows {
        let row = &x[r * cols..(r + 1) * cols];
        let gr = &g[r * cols..(r + 1) * cols];
        let (mean, sd) = row_mean_sd(row, eps);
        for c in 0..cols {
            xhat[c] = (row[c] - mean) / sd;
        }
        if want_dbeta {
            for c in 0..cols {
                dbeta[c] += gr[c];
            }
        }
        if want_dgamma {
            for c in 0..cols {
                dgamma[c] += gr[c] * xhat[c];
            }
        }
        if want_dx {
            let n = cols as f64;
            let mut m1 = 0.0;
            let mut m2 = 0.0;
            for c in 0..cols {
                dxh[c] = gr[c] * gamma[c];
                m1 += dxh[c];
                m2 += dxh[c] * xhat[c];
            }
            m1 /= n;
            m2 /= n;
            for c in 0..cols {
                dx[r * cols + c] = (dxh[c] - m1 - xhat[c] * m2) / sd;
            }
        }
    }
    if want_dx {
        accumulate(grads, inputs[0].node, &dx);
    }
    if want_dgamma {
        accumulate(grads, inputs[1].node, &dgamma);
    }
    if want_dbeta {
        accumulate(grads, inputs[2].node, &dbeta);
    }
}

#[allow(clippy::too_many_arguments)]
fn conv3d_vjp(
    inputs: &[NodeInput],
    g: &[f64],
    grads: &mut [Option<Vec<f64>>],
    in_dims: [usize; 4],
    kernel: [usize; 3],
    co: usize,
    stride: usize,
    pad: usize,
) {
    let x = &inputs[0].value;
    let w = &inputs[1].value;
    let ci = in_dims[3];
    let out_sp = [
        (in_dims[0] + 2 * pad - kernel[0]) / stride + 1,
        (in_dims[1] + 2 * pad - kernel[1]) / stride + 1,
        (in_dims[2] + 2 * pad - kernel[2]) / stride + 1,
    ];
    let out_dims = [out_sp[0], out_sp[1], out_sp[2], co];
    let widx = |kx: usize, ky: usize, kz: usize, i: usize, o: usize| {
        (((kx * kernel[1] + ky) * kernel[2] + kz) * ci + i) * co + o
    };
    let want_dx = inputs[0].node.is_some();
    let want_dw = inputs[1].node.is_some();
    let mut dx = if want_dx {
        vec![0.0; x.len()]
    } else {
        Vec::new()
    };
    let mut dw = if want_dw {
        vec![0.0; w.len()]
    } else {
        Vec::new()
    };
    for ox in 0..out_sp[0] {
        for oy in 0..out_sp[1] {
            for oz in 0..out_sp[2] {
                for kx in 0..kernel[0] {
                    let ix = (ox * stride + kx) as isize - pad as isize;
                    if ix < 0 || ix as usize >= in_dims[0] {
                        continue;
                    }
                    for ky in 0..kernel[1] {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy as usize >= in_dims[1] {
                            continue;
                        }
                        for kz in 0..kernel[2] {
                            let iz = (oz * stride + kz) as isize - pad as isize;
                            if iz < 0 || iz as usize >= in_dims[2] {
                                continue;
                            }
                            let xb = idx4(in_dims, ix as usize, iy as usize, iz as usize, 0);
                            let gb = idx4(out_dims, ox, oy, oz, 0);
                            for i in 0..ci {
                                for o in 0..co {
                                    let gv = g[gb + o];
                                    if want_dx {
                                        dx[xb + i] += gv * w[widx(kx, ky, kz, i, o)];
                                    }
                                    if want_dw {
                                        dw[widx(kx, ky, kz, i, o)] += gv * x[xb + i];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    if want_dx {
        accumulate(grads, inputs[0].node, &dx);
    }
    if want_dw {
        accumulate(grads, inputs[1].node, &dw);
    }
}
