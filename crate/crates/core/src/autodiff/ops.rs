//! Primitive kernels: pure forward evaluation plus the vector-Jacobian
//! product each one contributes to reverse-mode differentiation.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{split_axis, Tensor};

/// Every differentiable operation the tape can record.
#[derive(Debug, Clone, PartialEq)]
pub enum Primitive {
    Add,
    Sub,
    Mul,
    Div,
    /// `[m, k] x [k, n]`.
    MatMul,
    /// Cross-correlation over `[batch, c_in, len]` with kernel `[c_out, c_in, k]`
    /// and an optional bias `[c_out]`.
    Conv1d { stride: usize, pad: usize },
    /// Square-kernel cross-correlation over `[batch, c_in, h, w]`.
    Conv2d { stride: usize, pad: usize },
    Sum { axis: usize },
    Mean { axis: usize },
    Max { axis: usize },
    SumAll,
    MeanAll,
    Relu,
    Sigmoid,
    Tanh,
    Exp,
    Log,
    Abs,
    Neg,
    Sqrt,
    Powf(f64),
    Scale(f64),
    AddScalar(f64),
    Huber(f64),
    Softmax { axis: usize },
    LogSumExp { axis: usize },
    L2Normalize { axis: usize, eps: f64 },
    Concat { axis: usize },
    Reshape(Vec<usize>),
    Transpose(usize, usize),
    Slice { axis: usize, start: usize, end: usize },
    /// Repeats size-1 axes up to the target shape (same rank).
    Expand(Vec<usize>),
    /// Identity forward, blocks gradient flow.
    Detach,
}

impl Primitive {
    pub fn name(&self) -> &'static str {
        use Primitive::*;
        match self {
            Add => "add",
            Sub => "sub",
            Mul => "mul",
            Div => "div",
            MatMul => "matmul",
            Conv1d { .. } => "conv1d",
            Conv2d { .. } => "conv2d",
            Sum { .. } => "sum",
            Mean { .. } => "mean",
            Max { .. } => "max",
            SumAll => "sum_all",
            MeanAll => "mean_all",
            Relu => "relu",
            Sigmoid => "sigmoid",
            Tanh => "tanh",
            Exp => "exp",
            Log => "log",
            Abs => "abs",
            Neg => "neg",
            Sqrt => "sqrt",
            Powf(_) => "power",
            Scale(_) => "scale",
            AddScalar(_) => "add_scalar",
            Huber(_) => "huber",
            Softmax { .. } => "softmax",
            LogSumExp { .. } => "log_sum_exp",
            L2Normalize { .. } => "l2_normalize",
            Concat { .. } => "concat",
            Reshape(_) => "reshape",
            Transpose(..) => "transpose",
            Slice { .. } => "slice",
            Expand(_) => "expand",
            Detach => "detach",
        }
    }
}

fn shapes_of<T: Scalar>(inputs: &[&Tensor<T>]) -> String {
    inputs
        .iter()
        .map(|t| format!("{:?}", t.shape()))
        .collect::<Vec<_>>()
        .join(" vs ")
}

fn arity<T: Scalar>(p: &Primitive, inputs: &[&Tensor<T>], n: usize) -> Result<()> {
    if inputs.len() != n {
        return Err(Error::Invalid(format!(
            "{} expects {n} inputs, got {}",
            p.name(),
            inputs.len()
        )));
    }
    Ok(())
}

fn check_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return Err(Error::shape(op, format!("axis {axis} out of range for {shape:?}")));
    }
    Ok(())
}

fn without_axis(shape: &[usize], axis: usize) -> Vec<usize> {
    let mut s = shape.to_vec();
    s.remove(axis);
    s
}

/// Output shape of an elementwise binary op under the supported broadcasts:
/// equal shapes, a one-element operand, or one shape being a trailing suffix
/// of the other.
fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let na: usize = a.iter().product();
    let nb: usize = b.iter().product();
    if a == b {
        return Ok(a.to_vec());
    }
    if nb == 1 {
        return Ok(a.to_vec());
    }
    if na == 1 {
        return Ok(b.to_vec());
    }
    if b.len() < a.len() && a.ends_with(b) {
        return Ok(a.to_vec());
    }
    if a.len() < b.len() && b.ends_with(a) {
        return Ok(b.to_vec());
    }
    Err(Error::shape(op, format!("{a:?} vs {b:?}")))
}

fn binary_forward<T: Scalar>(
    op: &'static str,
    a: &Tensor<T>,
    b: &Tensor<T>,
    f: impl Fn(T, T) -> T,
) -> Result<Tensor<T>> {
    let shape = broadcast_shape(op, a.shape(), b.shape())?;
    let n: usize = shape.iter().product();
    let (ad, bd) = (a.data(), b.data());
    let data = if ad.len() == n && bd.len() == n {
        ad.iter().zip(bd).map(|(&x, &y)| f(x, y)).collect()
    } else {
        let (na, nb) = (ad.len(), bd.len());
        (0..n).map(|i| f(ad[i % na], bd[i % nb])).collect()
    };
    Ok(Tensor::from_parts(shape, data))
}

/// Sums a full-size gradient down to an operand that was broadcast by
/// repetition (suffix or scalar).
fn reduce_to(g: &[f64], n: usize) -> Vec<f64> {
    if g.len() == n {
        return g.to_vec();
    }
    let mut out = vec![0.0; n];
    for (i, v) in g.iter().enumerate() {
        out[i % n] += v;
    }
    out
}

// --- dense kernels -------------------------------------------------------

/// `c[m,n] = a[m,k] * b[k,n]`
pub(crate) fn mm<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); m * n];
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
    c
}

/// `c[m,k] = g[m,n] * b[k,n]^T`
fn mm_bt<T: Scalar>(g: &[T], b: &[T], m: usize, n: usize, k: usize) -> Vec<T> {
    let mut c = vec![T::zero(); m * k];
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            c[i * k + p] = grow.iter().zip(brow).map(|(&x, &y)| x * y).sum();
        }
    }
    c
}

/// `c[k,n] = a[m,k]^T * g[m,n]`
fn mm_at<T: Scalar>(a: &[T], g: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); k * n];
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let crow = &mut c[p * n..(p + 1) * n];
            for (cv, &gv) in crow.iter_mut().zip(grow) {
                *cv += av * gv;
            }
        }
    }
    c
}

/// Output positions `o` whose input index `o*stride + tap - pad` falls inside
/// `[0, len)`.
#[inline]
fn valid_range(len: usize, out_len: usize, stride: usize, pad: usize, tap: usize) -> (usize, usize) {
    let lo = if pad > tap {
        (pad - tap).div_ceil(stride)
    } else {
        0
    };
    if len + pad <= tap {
        return (0, 0);
    }
    let hi = ((len - 1 + pad - tap) / stride + 1).min(out_len);
    (lo.min(hi), hi)
}

fn conv_out_len(op: &'static str, len: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    if stride == 0 || len + 2 * pad < k {
        return Err(Error::shape(
            op,
            format!("length {len} with kernel {k}, stride {stride}, pad {pad}"),
        ));
    }
    Ok((len + 2 * pad - k) / stride + 1)
}

struct Conv1dDims {
    batch: usize,
    cin: usize,
    len: usize,
    cout: usize,
    k: usize,
    out_len: usize,
}

fn conv1d_dims<T: Scalar>(inputs: &[&Tensor<T>], stride: usize, pad: usize) -> Result<Conv1dDims> {
    let (x, w) = (inputs[0], inputs[1]);
    if x.rank() != 3 || w.rank() != 3 || x.dim(1) != w.dim(1) {
        return Err(Error::shape("conv1d", shapes_of(inputs)));
    }
    if let Some(b) = inputs.get(2) {
        if b.shape() != [w.dim(0)] {
            return Err(Error::shape("conv1d", shapes_of(inputs)));
        }
    }
    let out_len = conv_out_len("conv1d", x.dim(2), w.dim(2), stride, pad)?;
    Ok(Conv1dDims {
        batch: x.dim(0),
        cin: x.dim(1),
        len: x.dim(2),
        cout: w.dim(0),
        k: w.dim(2),
        out_len,
    })
}

/// Column matrix `[cin * k, batch * out_len]` of the padded input windows.
fn im2col_1d<T: Scalar>(x: &[T], d: &Conv1dDims, stride: usize, pad: usize) -> Vec<T> {
    let cols = d.batch * d.out_len;
    let mut col = vec![T::zero(); d.cin * d.k * cols];
    for ci in 0..d.cin {
        for tap in 0..d.k {
            let crow = &mut col[(ci * d.k + tap) * cols..][..cols];
            let (lo, hi) = valid_range(d.len, d.out_len, stride, pad, tap);
            for bi in 0..d.batch {
                let xrow = &x[(bi * d.cin + ci) * d.len..][..d.len];
                for o in lo..hi {
                    crow[bi * d.out_len + o] = xrow[o * stride + tap - pad];
                }
            }
        }
    }
    col
}

/// `[batch, c, n]` to `[c, batch * n]` and back.
fn batch_to_rows<T: Scalar>(g: &[T], batch: usize, c: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); g.len()];
    for bi in 0..batch {
        for ci in 0..c {
            out[ci * batch * n + bi * n..][..n].copy_from_slice(&g[(bi * c + ci) * n..][..n]);
        }
    }
    out
}

fn rows_to_batch<T: Scalar>(r: &[T], batch: usize, c: usize, n: usize, bias: Option<&[T]>) -> Vec<T> {
    let mut out = vec![T::zero(); r.len()];
    for bi in 0..batch {
        for ci in 0..c {
            let dst = &mut out[(bi * c + ci) * n..][..n];
            dst.copy_from_slice(&r[ci * batch * n + bi * n..][..n]);
            if let Some(b) = bias {
                dst.iter_mut().for_each(|v| *v += b[ci]);
            }
        }
    }
    out
}

fn transpose2<T: Scalar>(a: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); a.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

fn conv1d_forward<T: Scalar>(inputs: &[&Tensor<T>], stride: usize, pad: usize) -> Result<Tensor<T>> {
    let d = conv1d_dims(inputs, stride, pad)?;
    let col = im2col_1d(inputs[0].data(), &d, stride, pad);
    let rows = mm(inputs[1].data(), &col, d.cout, d.cin * d.k, d.batch * d.out_len);
    let out = rows_to_batch(&rows, d.batch, d.cout, d.out_len, inputs.get(2).map(|b| b.data()));
    Ok(Tensor::from_parts(vec![d.batch, d.cout, d.out_len], out))
}

fn conv1d_backward<T: Scalar>(
    inputs: &[&Tensor<T>],
    g: &[T],
    stride: usize,
    pad: usize,
) -> Vec<Option<Tensor<T>>> {
    let d = conv1d_dims(inputs, stride, pad).expect("validated in forward");
    let cols = d.batch * d.out_len;
    let ck = d.cin * d.k;
    let g_rows = batch_to_rows(g, d.batch, d.cout, d.out_len);
    let col = im2col_1d(inputs[0].data(), &d, stride, pad);
    let gw = mm(&g_rows, &transpose2(&col, ck, cols), d.cout, cols, ck);
    let gcol = mm_at(inputs[1].data(), &g_rows, d.cout, ck, cols);
    let mut gx = vec![T::zero(); inputs[0].numel()];
    for ci in 0..d.cin {
        for tap in 0..d.k {
            let grow = &gcol[(ci * d.k + tap) * cols..][..cols];
            let (lo, hi) = valid_range(d.len, d.out_len, stride, pad, tap);
            for bi in 0..d.batch {
                let xrow = &mut gx[(bi * d.cin + ci) * d.len..][..d.len];
                for o in lo..hi {
                    xrow[o * stride + tap - pad] += grow[bi * d.out_len + o];
                }
            }
        }
    }
    let mut out = vec![
        Some(Tensor::from_parts(inputs[0].shape().to_vec(), gx)),
        Some(Tensor::from_parts(inputs[1].shape().to_vec(), gw)),
    ];
    if inputs.len() == 3 {
        let gb = g_rows.chunks(cols).map(|r| r.iter().copied().sum()).collect();
        out.push(Some(Tensor::from_parts(vec![d.cout], gb)));
    }
    out
}

struct Conv2dDims {
    batch: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    k: usize,
    oh: usize,
    ow: usize,
}

fn conv2d_dims<T: Scalar>(inputs: &[&Tensor<T>], stride: usize, pad: usize) -> Result<Conv2dDims> {
    let (x, w) = (inputs[0], inputs[1]);
    if x.rank() != 4 || w.rank() != 4 || x.dim(1) != w.dim(1) || w.dim(2) != w.dim(3) {
        return Err(Error::shape("conv2d", shapes_of(inputs)));
    }
    if let Some(b) = inputs.get(2) {
        if b.shape() != [w.dim(0)] {
            return Err(Error::shape("conv2d", shapes_of(inputs)));
        }
    }
    let k = w.dim(2);
    Ok(Conv2dDims {
        batch: x.dim(0),
        cin: x.dim(1),
        h: x.dim(2),
        w: x.dim(3),
        cout: w.dim(0),
        k,
        oh: conv_out_len("conv2d", x.dim(2), k, stride, pad)?,
        ow: conv_out_len("conv2d", x.dim(3), k, stride, pad)?,
    })
}

/// Column matrix `[cin * k * k, batch * oh * ow]`.
fn im2col_2d<T: Scalar>(x: &[T], d: &Conv2dDims, stride: usize, pad: usize) -> Vec<T> {
    let plane = d.oh * d.ow;
    let cols = d.batch * plane;
    let mut col = vec![T::zero(); d.cin * d.k * d.k * cols];
    for ci in 0..d.cin {
        for ky in 0..d.k {
            let (ylo, yhi) = valid_range(d.h, d.oh, stride, pad, ky);
            for kx in 0..d.k {
                let (xlo, xhi) = valid_range(d.w, d.ow, stride, pad, kx);
                let crow = &mut col[((ci * d.k + ky) * d.k + kx) * cols..][..cols];
                for bi in 0..d.batch {
                    let xplane = &x[(bi * d.cin + ci) * d.h * d.w..][..d.h * d.w];
                    for oy in ylo..yhi {
                        let iy = oy * stride + ky - pad;
                        for ox in xlo..xhi {
                            crow[bi * plane + oy * d.ow + ox] = xplane[iy * d.w + ox * stride + kx - pad];
                        }
                    }
                }
            }
        }
    }
    col
}

fn conv2d_forward<T: Scalar>(inputs: &[&Tensor<T>], stride: usize, pad: usize) -> Result<Tensor<T>> {
    let d = conv2d_dims(inputs, stride, pad)?;
    let plane = d.oh * d.ow;
    let col = im2col_2d(inputs[0].data(), &d, stride, pad);
    let rows = mm(inputs[1].data(), &col, d.cout, d.cin * d.k * d.k, d.batch * plane);
    let out = rows_to_batch(&rows, d.batch, d.cout, plane, inputs.get(2).map(|b| b.data()));
    Ok(Tensor::from_parts(vec![d.batch, d.cout, d.oh, d.ow], out))
}

fn conv2d_backward<T: Scalar>(
    inputs: &[&Tensor<T>],
    g: &[T],
    stride: usize,
    pad: usize,
) -> Vec<Option<Tensor<T>>> {
    let d = conv2d_dims(inputs, stride, pad).expect("validated in forward");
    let plane = d.oh * d.ow;
    let cols = d.batch * plane;
    let ck = d.cin * d.k * d.k;
    let g_rows = batch_to_rows(g, d.batch, d.cout, plane);
    let col = im2col_2d(inputs[0].data(), &d, stride, pad);
    let gw = mm(&g_rows, &transpose2(&col, ck, cols), d.cout, cols, ck);
    let gcol = mm_at(inputs[1].data(), &g_rows, d.cout, ck, cols);
    let mut gx = vec![T::zero(); inputs[0].numel()];
    for ci in 0..d.cin {
        for ky in 0..d.k {
            let (ylo, yhi) = valid_range(d.h, d.oh, stride, pad, ky);
            for kx in 0..d.k {
                let (xlo, xhi) = valid_range(d.w, d.ow, stride, pad, kx);
                let grow = &gcol[((ci * d.k + ky) * d.k + kx) * cols..][..cols];
                for bi in 0..d.batch {
                    let xplane = &mut gx[(bi * d.cin + ci) * d.h * d.w..][..d.h * d.w];
                    for oy in ylo..yhi {
                        let iy = oy * stride + ky - pad;
                        for ox in xlo..xhi {
                            xplane[iy * d.w + ox * stride + kx - pad] += grow[bi * plane + oy * d.ow + ox];
                        }
                    }
                }
            }
        }
    }
    let mut out = vec![
        Some(Tensor::from_parts(inputs[0].shape().to_vec(), gx)),
        Some(Tensor::from_parts(inputs[1].shape().to_vec(), gw)),
    ];
    if inputs.len() == 3 {
        let gb = g_rows.chunks(cols).map(|r| r.iter().copied().sum()).collect();
        out.push(Some(Tensor::from_parts(vec![d.cout], gb)));
    }
    out
}

// --- layout helpers ------------------------------------------------------

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for d in (0..shape.len().saturating_sub(1)).rev() {
        s[d] = s[d + 1] * shape[d + 1];
    }
    s
}

/// For each position of `out_shape` (row-major), the linear offset into a
/// source laid out with `src_strides` (already permuted/zeroed per axis).
fn gather_offsets(out_shape: &[usize], src_strides: &[usize]) -> Vec<usize> {
    let n: usize = out_shape.iter().product();
    let rank = out_shape.len();
    if rank == 0 {
        return vec![0; n];
    }
    let (inner, inner_st) = (out_shape[rank - 1], src_strides[rank - 1]);
    let mut offsets = Vec::with_capacity(n);
    if inner == 0 {
        return offsets;
    }
    let mut idx = vec![0usize; rank - 1];
    let mut base = 0usize;
    for _ in 0..n / inner {
        offsets.extend((0..inner).map(|i| base + i * inner_st));
        for d in (0..rank - 1).rev() {
            idx[d] += 1;
            base += src_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            base -= src_strides[d] * idx[d];
            idx[d] = 0;
        }
    }
    offsets
}

fn transpose_offsets(shape: &[usize], a0: usize, a1: usize) -> (Vec<usize>, Vec<usize>) {
    let mut out_shape = shape.to_vec();
    out_shape.swap(a0, a1);
    let mut st = strides(shape);
    st.swap(a0, a1);
    (out_shape.clone(), gather_offsets(&out_shape, &st))
}

fn expand_offsets(in_shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let mut st = strides(in_shape);
    for (d, s) in st.iter_mut().enumerate() {
        if in_shape[d] == 1 {
            *s = 0;
        }
    }
    gather_offsets(out_shape, &st)
}

// --- forward -------------------------------------------------------------

fn unary<T: Scalar>(x: &Tensor<T>, f: impl Fn(T) -> T) -> Tensor<T> {
    x.map(f)
}

/// Evaluates a primitive on concrete inputs. Pure: identical inputs give
/// bit-identical outputs. Any NaN/Inf in the result is reported as an error
/// naming the primitive.
pub fn apply_primitive<T: Scalar>(p: &Primitive, inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let out = forward(p, inputs)?;
    if !out.is_finite() {
        return Err(Error::NonFinite { op: p.name() });
    }
    Ok(out)
}

fn forward<T: Scalar>(p: &Primitive, inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
    use Primitive::*;
    match p {
        Add | Sub | Mul | Div => {
            arity(p, inputs, 2)?;
            let (a, b) = (inputs[0], inputs[1]);
            match p {
                Add => binary_forward("add", a, b, |x, y| x + y),
                Sub => binary_forward("sub", a, b, |x, y| x - y),
                Mul => binary_forward("mul", a, b, |x, y| x * y),
                _ => binary_forward("div", a, b, |x, y| x / y),
            }
        }
        MatMul => {
            arity(p, inputs, 2)?;
            let (a, b) = (inputs[0], inputs[1]);
            if a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0) {
                return Err(Error::shape("matmul", shapes_of(inputs)));
            }
            let (m, k, n) = (a.dim(0), a.dim(1), b.dim(1));
            Ok(Tensor::from_parts(vec![m, n], mm(a.data(), b.data(), m, k, n)))
        }
        Conv1d { stride, pad } => {
            if !(2..=3).contains(&inputs.len()) {
                return Err(Error::Invalid("conv1d expects 2 or 3 inputs".into()));
            }
            conv1d_forward(inputs, *stride, *pad)
        }
        Conv2d { stride, pad } => {
            if !(2..=3).contains(&inputs.len()) {
                return Err(Error::Invalid("conv2d expects 2 or 3 inputs".into()));
            }
            conv2d_forward(inputs, *stride, *pad)
        }
        Sum { axis } | Mean { axis } | Max { axis } => {
            arity(p, inputs, 1)?;
            let x = inputs[0];
            check_axis(p.name(), x.shape(), *axis)?;
            let (outer, n, inner) = split_axis(x.shape(), *axis);
            let xd = x.data();
            let mut out = vec![T::zero(); outer * inner];
            for o in 0..outer {
                for i in 0..inner {
                    let base = o * n * inner + i;
                    let v = match p {
                        Max { .. } => (1..n).fold(xd[base], |m, j| m.max(xd[base + j * inner])),
                        _ => {
                            let s: T = (0..n).map(|j| xd[base + j * inner]).sum();
                            if matches!(p, Mean { .. }) {
                                s / T::from_f64(n as f64)
                            } else {
                                s
                            }
                        }
                    };
                    out[o * inner + i] = v;
                }
            }
            Ok(Tensor::from_parts(without_axis(x.shape(), *axis), out))
        }
        SumAll | MeanAll => {
            arity(p, inputs, 1)?;
            let x = inputs[0];
            let s: T = x.data().iter().copied().sum();
            let v = if matches!(p, MeanAll) {
                s / T::from_f64(x.numel() as f64)
            } else {
                s
            };
            Ok(Tensor::scalar(v))
        }
        Relu => Ok(unary(inputs[0], |v| v.max(T::zero()))),
        Sigmoid => Ok(unary(inputs[0], |v| {
            if v >= T::zero() {
                T::one() / (T::one() + (-v).exp())
            } else {
                let e = v.exp();
                e / (T::one() + e)
            }
        })),
        Tanh => Ok(unary(inputs[0], |v| v.tanh())),
        Exp => Ok(unary(inputs[0], |v| v.exp())),
        Log => {
            if inputs[0].data().iter().any(|&v| v < T::zero()) {
                return Err(Error::Domain {
                    op: "log",
                    detail: "negative input".into(),
                });
            }
            Ok(unary(inputs[0], |v| v.ln()))
        }
        Abs => Ok(unary(inputs[0], |v| v.abs())),
        Neg => Ok(unary(inputs[0], |v| -v)),
        Sqrt => {
            if inputs[0].data().iter().any(|&v| v < T::zero()) {
                return Err(Error::Domain {
                    op: "sqrt",
                    detail: "negative input".into(),
                });
            }
            Ok(unary(inputs[0], |v| v.sqrt()))
        }
        Powf(e) => {
            if e.fract() != 0.0 && inputs[0].data().iter().any(|&v| v < T::zero()) {
                return Err(Error::Domain {
                    op: "power",
                    detail: format!("negative base with exponent {e}"),
                });
            }
            let e = T::from_f64(*e);
            Ok(unary(inputs[0], |v| v.powf(e)))
        }
        Scale(c) => {
            let c = T::from_f64(*c);
            Ok(unary(inputs[0], |v| v * c))
        }
        AddScalar(c) => {
            let c = T::from_f64(*c);
            Ok(unary(inputs[0], |v| v + c))
        }
        Huber(delta) => {
            let d = T::from_f64(*delta);
            Ok(unary(inputs[0], |v| {
                let a = v.abs();
                if a <= d {
                    T::half() * v * v
                } else {
                    d * (a - T::half() * d)
                }
            }))
        }
        Softmax { axis } | LogSumExp { axis } => {
            arity(p, inputs, 1)?;
            let x = inputs[0];
            check_axis(p.name(), x.shape(), *axis)?;
            let (outer, n, inner) = split_axis(x.shape(), *axis);
            let xd = x.data();
            let soft = matches!(p, Softmax { .. });
            let mut out = vec![T::zero(); if soft { x.numel() } else { outer * inner }];
            for o in 0..outer {
                for i in 0..inner {
                    let base = o * n * inner + i;
                    let m = (1..n).fold(xd[base], |m, j| m.max(xd[base + j * inner]));
                    let s: T = (0..n).map(|j| (xd[base + j * inner] - m).exp()).sum();
                    if soft {
                        for j in 0..n {
                            out[base + j * inner] = (xd[base + j * inner] - m).exp() / s;
                        }
                    } else {
                        out[o * inner + i] = m + s.ln();
                    }
                }
            }
            let shape = if soft {
                x.shape().to_vec()
            } else {
                without_axis(x.shape(), *axis)
            };
            Ok(Tensor::from_parts(shape, out))
        }
        L2Normalize { axis, eps } => {
            arity(p, inputs, 1)?;
            let x = inputs[0];
            check_axis("l2_normalize", x.shape(), *axis)?;
            let (outer, n, inner) = split_axis(x.shape(), *axis);
            let xd = x.data();
            let eps = T::from_f64(*eps);
            let mut out = vec![T::zero(); x.numel()];
            for o in 0..outer {
                for i in 0..inner {
                    let base = o * n * inner + i;
                    let norm = (0..n)
                        .map(|j| xd[base + j * inner] * xd[base + j * inner])
                        .sum::<T>()
                        .sqrt()
                        .max(eps);
                    for j in 0..n {
                        out[base + j * inner] = xd[base + j * inner] / norm;
                    }
                }
            }
            Ok(Tensor::from_parts(x.shape().to_vec(), out))
        }
        Concat { axis } => {
            let first = inputs
                .first()
                .ok_or_else(|| Error::Invalid("concat of zero tensors".into()))?;
            check_axis("concat", first.shape(), *axis)?;
            for t in inputs {
                let ok = t.rank() == first.rank()
                    && (0..t.rank()).all(|d| d == *axis || t.dim(d) == first.dim(d));
                if !ok {
                    return Err(Error::shape("concat", shapes_of(inputs)));
                }
            }
            let outer: usize = first.shape()[..*axis].iter().product();
            let inner: usize = first.shape()[*axis + 1..].iter().product();
            let total: usize = inputs.iter().map(|t| t.dim(*axis)).sum();
            let mut out = Vec::with_capacity(outer * total * inner);
            for o in 0..outer {
                for t in inputs {
                    let chunk = t.dim(*axis) * inner;
                    out.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
                }
            }
            let mut shape = first.shape().to_vec();
            shape[*axis] = total;
            Ok(Tensor::from_parts(shape, out))
        }
        Reshape(shape) => inputs[0].reshape(shape.clone()),
        Transpose(a0, a1) => {
            let x = inputs[0];
            check_axis("transpose", x.shape(), *a0)?;
            check_axis("transpose", x.shape(), *a1)?;
            let (shape, offs) = transpose_offsets(x.shape(), *a0, *a1);
            let xd = x.data();
            Ok(Tensor::from_parts(shape, offs.iter().map(|&o| xd[o]).collect()))
        }
        Slice { axis, start, end } => {
            let x = inputs[0];
            check_axis("slice", x.shape(), *axis)?;
            if start >= end || *end > x.dim(*axis) {
                return Err(Error::shape(
                    "slice",
                    format!("{start}..{end} on {:?} axis {axis}", x.shape()),
                ));
            }
            let (outer, n, inner) = split_axis(x.shape(), *axis);
            let mut out = Vec::with_capacity(outer * (end - start) * inner);
            for o in 0..outer {
                out.extend_from_slice(&x.data()[(o * n + start) * inner..(o * n + end) * inner]);
            }
            let mut shape = x.shape().to_vec();
            shape[*axis] = end - start;
            Ok(Tensor::from_parts(shape, out))
        }
        Expand(shape) => {
            let x = inputs[0];
            let ok = x.rank() == shape.len()
                && x.shape().iter().zip(shape).all(|(&a, &b)| a == b || a == 1);
            if !ok {
                return Err(Error::shape("expand", format!("{:?} -> {shape:?}", x.shape())));
            }
            let offs = expand_offsets(x.shape(), shape);
            let xd = x.data();
            Ok(Tensor::from_parts(shape.clone(), offs.iter().map(|&o| xd[o]).collect()))
        }
        Detach => Ok(inputs[0].clone()),
    }
}

// --- backward ------------------------------------------------------------

fn from_f64<T: Scalar>(shape: &[usize], v: Vec<f64>) -> Tensor<T> {
    Tensor::from_parts(shape.to_vec(), v.into_iter().map(T::from_f64).collect())
}

fn elementwise<T: Scalar>(x: &Tensor<T>, g: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    Tensor::from_parts(
        x.shape().to_vec(),
        x.data().iter().zip(g.data()).map(|(&a, &b)| f(a, b)).collect(),
    )
}

/// Gradients of a primitive's inputs given the gradient of its output.
/// `None` marks an input that receives no gradient.
pub fn vjp<T: Scalar>(
    p: &Primitive,
    inputs: &[&Tensor<T>],
    out: &Tensor<T>,
    g: &Tensor<T>,
) -> Vec<Option<Tensor<T>>> {
    use Primitive::*;
    match p {
        Add | Sub | Mul | Div => {
            let (a, b) = (inputs[0], inputs[1]);
            let n = out.numel();
            let (na, nb) = (a.numel(), b.numel());
            let (ad, bd, gd) = (a.data(), b.data(), g.data());
            if na == n && nb == n {
                let zip = |f: fn(T, T, T) -> T| -> Vec<T> {
                    ad.iter().zip(bd).zip(gd).map(|((&x, &y), &gv)| f(x, y, gv)).collect()
                };
                let (ga, gb) = match p {
                    Add => (gd.to_vec(), gd.to_vec()),
                    Sub => (gd.to_vec(), gd.iter().map(|&v| -v).collect()),
                    Mul => (zip(|_, y, gv| gv * y), zip(|x, _, gv| gv * x)),
                    _ => (zip(|_, y, gv| gv / y), zip(|x, y, gv| -gv * x / (y * y))),
                };
                return vec![
                    Some(Tensor::from_parts(a.shape().to_vec(), ga)),
                    Some(Tensor::from_parts(b.shape().to_vec(), gb)),
                ];
            }
            let mut ga = vec![0.0; n];
            let mut gb = vec![0.0; n];
            for i in 0..n {
                let (x, y, gv) = (ad[i % na].as_f64(), bd[i % nb].as_f64(), gd[i].as_f64());
                let (da, db) = match p {
                    Add => (gv, gv),
                    Sub => (gv, -gv),
                    Mul => (gv * y, gv * x),
                    _ => (gv / y, -gv * x / (y * y)),
                };
                ga[i] = da;
                gb[i] = db;
            }
            vec![
                Some(from_f64(a.shape(), reduce_to(&ga, na))),
                Some(from_f64(b.shape(), reduce_to(&gb, nb))),
            ]
        }
        MatMul => {
            let (a, b) = (inputs[0], inputs[1]);
            let (m, k, n) = (a.dim(0), a.dim(1), b.dim(1));
            vec![
                Some(Tensor::from_parts(vec![m, k], mm_bt(g.data(), b.data(), m, n, k))),
                Some(Tensor::from_parts(vec![k, n], mm_at(a.data(), g.data(), m, k, n))),
            ]
        }
        Conv1d { stride, pad } => conv1d_backward(inputs, g.data(), *stride, *pad),
        Conv2d { stride, pad } => conv2d_backward(inputs, g.data(), *stride, *pad),
        Sum { axis } | Mean { axis } | Max { axis } => {
            let x = inputs[0];
            let (outer, n, inner) = split_axis(x.shape(), *axis);
            let (xd, gd, od) = (x.data(), g.data(), out.data());
            let mut gx = vec![T::zero(); x.numel()];
            let inv_n = T::one() / T::from_f64(n as f64);
            for o in 0..outer {
                for i in 0..inner {
                    let base = o * n * inner + i;
                    let gv = gd[o * inner + i];
                    match p {
                        Max { .. } => {
                            // First maximal element takes the gradient.
                            let m = od[o * inner + i];
                            if let Some(j) = (0..n).find(|&j| xd[base + j * inner] == m) {
                                gx[base + j * inner] = gv;
                            }
                        }
                        Mean { .. } => (0..n).for_each(|j| gx[base + j * inner] = gv * inv_n),
                        _ => (0..n).for_each(|j| gx[base + j * inner] = gv),
                    }
                }
            }
            vec![Some(Tensor::from_parts(x.shape().to_vec(), gx))]
        }
        SumAll | MeanAll => {
            let x = inputs[0];
            let mut gv = g.data()[0];
            if matches!(p, MeanAll) {
                gv /= T::from_f64(x.numel() as f64);
            }
            vec![Some(Tensor::full(x.shape().to_vec(), gv))]
        }
        Relu => vec![Some(elementwise(inputs[0], g, |x, gv| {
            if x > T::zero() {
                gv
            } else {
                T::zero()
            }
        }))],
        Sigmoid => vec![Some(elementwise(out, g, |y, gv| gv * y * (T::one() - y)))],
        Tanh => vec![Some(elementwise(out, g, |y, gv| gv * (T::one() - y * y)))],
        Exp => vec![Some(elementwise(out, g, |y, gv| gv * y))],
        Log => vec![Some(elementwise(inputs[0], g, |x, gv| gv / x))],
        Abs => vec![Some(elementwise(inputs[0], g, |x, gv| {
            if x > T::zero() {
                gv
            } else if x < T::zero() {
                -gv
            } else {
                T::zero()
            }
        }))],
        Neg => vec![Some(g.map(|v| -v))],
        Sqrt => vec![Some(elementwise(out, g, |y, gv| gv / (y + y)))],
        Powf(e) => {
            let e = T::from_f64(*e);
            vec![Some(elementwise(inputs[0], g, |x, gv| {
                gv * e * x.powf(e - T::one())
            }))]
        }
        Scale(c) => {
            let c = T::from_f64(*c);
            vec![Some(g.map(|v| v * c))]
        }
        AddScalar(_) => vec![Some(g.clone())],
        Detach => vec![None],
        Huber(delta) => {
            let d = T::from_f64(*delta);
            vec![Some(elementwise(inputs[0], g, |x, gv| {
                if x.abs() <= d {
                    gv * x
                } else {
                    gv * d * x.signum()
                }
            }))]
        }
        Softmax { axis } => {
            let (outer, n, inner) = split_axis(out.shape(), *axis);
            let (yd, gd) = (out.data(), g.data());
            let mut gx = vec![T::zero(); out.numel()];
            for o in 0..outer {
                for i in 0..inner {
                    let base = o * n * inner + i;
                    let dot: T = (0..n).map(|j| yd[base + j * inner] * gd[base + j * inner]).sum();
                    for j in 0..n {
                        let k = base + j * inner;
                        gx[k] = yd[k] * (gd[k] - dot);
                    }
                }
            }
            vec![Some(Tensor::from_parts(out.shape().to_vec(), gx))]
        }
        LogSumExp { axis } => {
            let x = inputs[0];
            let (outer, n, inner) = split_axis(x.shape(), *axis);
            let (xd, od, gd) = (x.data(), out.data(), g.data());
            let mut gx = vec![T::zero(); x.numel()];
            for o in 0..outer {
                for i in 0..inner {
                    let base = o * n * inner + i;
                    let lse = od[o * inner + i];
                    let gv = gd[o * inner + i];
                    for j in 0..n {
                        let k = base + j * inner;
                        gx[k] = gv * (xd[k] - lse).exp();
                    }
                }
            }
            vec![Some(Tensor::from_parts(x.shape().to_vec(), gx))]
        }
        L2Normalize { axis, eps } => {
            let x = inputs[0];
            let (outer, n, inner) = split_axis(x.shape(), *axis);
            let (xd, yd, gd) = (x.data(), out.data(), g.data());
            let eps = T::from_f64(*eps);
            let mut gx = vec![T::zero(); x.numel()];
            for o in 0..outer {
                for i in 0..inner {
                    let base = o * n * inner + i;
                    let norm = (0..n)
                        .map(|j| xd[base + j * inner] * xd[base + j * inner])
                        .sum::<T>()
                        .sqrt();
                    if norm > eps {
                        let dot: T =
                            (0..n).map(|j| yd[base + j * inner] * gd[base + j * inner]).sum();
                        for j in 0..n {
                            let k = base + j * inner;
                            gx[k] = (gd[k] - yd[k] * dot) / norm;
                        }
                    } else {
                        for j in 0..n {
                            let k = base + j * inner;
                            gx[k] = gd[k] / eps;
                        }
                    }
                }
            }
            vec![Some(Tensor::from_parts(x.shape().to_vec(), gx))]
        }
        Concat { axis } => {
            let outer: usize = out.shape()[..*axis].iter().product();
            let inner: usize = out.shape()[*axis + 1..].iter().product();
            let total = out.dim(*axis);
            let mut start = 0;
            inputs
                .iter()
                .map(|t| {
                    let len = t.dim(*axis);
                    let mut gx = Vec::with_capacity(t.numel());
                    for o in 0..outer {
                        let base = (o * total + start) * inner;
                        gx.extend_from_slice(&g.data()[base..base + len * inner]);
                    }
                    start += len;
                    Some(Tensor::from_parts(t.shape().to_vec(), gx))
                })
                .collect()
        }
        Reshape(_) => vec![Some(
            g.reshape(inputs[0].shape().to_vec())
                .expect("reshape preserves numel"),
        )],
        Transpose(a0, a1) => {
            // Swapping the same pair of axes again inverts the permutation.
            let (shape, offs) = transpose_offsets(g.shape(), *a0, *a1);
            let gd = g.data();
            vec![Some(Tensor::from_parts(
                shape,
                offs.iter().map(|&o| gd[o]).collect(),
            ))]
        }
        Slice { axis, start, end } => {
            let x = inputs[0];
            let (outer, n, inner) = split_axis(x.shape(), *axis);
            let width = (end - start) * inner;
            let mut gx = vec![T::zero(); x.numel()];
            for o in 0..outer {
                let dst = (o * n + start) * inner;
                gx[dst..dst + width].copy_from_slice(&g.data()[o * width..(o + 1) * width]);
            }
            vec![Some(Tensor::from_parts(x.shape().to_vec(), gx))]
        }
        Expand(shape) => {
            let x = inputs[0];
            let offs = expand_offsets(x.shape(), shape);
            let mut gx = vec![0.0; x.numel()];
            for (&o, gv) in offs.iter().zip(g.data()) {
                gx[o] += gv.as_f64();
            }
            vec![Some(from_f64(x.shape(), gx))]
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape.to_vec(), v).unwrap()
    }

    #[test]
    fn sigmoid_of_zero_is_half() {
        let y = apply_primitive(&Primitive::Sigmoid, &[&t(&[1], &[0.0])]).unwrap();
        assert_eq!(y.data(), &[0.5]);
    }

    #[test]
    fn identity_matmul() {
        let a = t(&[3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let y = apply_primitive(&Primitive::MatMul, &[&Tensor::eye(3), &a]).unwrap();
        assert_eq!(y, a);
    }

    fn brute_conv1d(x: &[f64], k: &[f64], pad: usize, stride: usize) -> Vec<f64> {
        let padded: Vec<f64> = std::iter::repeat(0.0)
            .take(pad)
            .chain(x.iter().copied())
            .chain(std::iter::repeat(0.0).take(pad))
            .collect();
        padded
            .windows(k.len())
            .step_by(stride)
            .map(|w| w.iter().zip(k).map(|(a, b)| a * b).sum())
            .collect()
    }

    #[test]
    fn conv1d_hand_example() {
        let x = t(&[1, 1, 4], &[1.0, 2.0, 3.0, 4.0]);
        let k = t(&[1, 1, 3], &[1.0, 0.0, -1.0]);
        let y = apply_primitive(&Primitive::Conv1d { stride: 1, pad: 1 }, &[&x, &k]).unwrap();
        let expected = brute_conv1d(&[1.0, 2.0, 3.0, 4.0], &[1.0, 0.0, -1.0], 1, 1);
        assert_eq!(expected, vec![-2.0, -2.0, -2.0, 3.0]);
        assert_eq!(y.data(), expected.as_slice());
    }

    #[test]
    fn conv1d_matches_sliding_window_with_stride() {
        let xs: Vec<f64> = (0..9).map(|i| (i as f64 * 0.7).sin()).collect();
        let ks = [0.3, -1.1, 0.5];
        for (stride, pad) in [(1, 0), (2, 1), (2, 0), (3, 2)] {
            let y = apply_primitive(
                &Primitive::Conv1d { stride, pad },
                &[&t(&[1, 1, 9], &xs), &t(&[1, 1, 3], &ks)],
            )
            .unwrap();
            let want = brute_conv1d(&xs, &ks, pad, stride);
            assert_eq!(y.shape(), &[1, 1, want.len()]);
            for (a, b) in y.data().iter().zip(&want) {
                assert!((a - b).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn domain_and_nan_errors_name_the_op() {
        let neg = t(&[2], &[1.0, -1.0]);
        let err = apply_primitive(&Primitive::Log, &[&neg]).unwrap_err();
        assert!(err.to_string().contains("log"));
        assert!(matches!(
            apply_primitive(&Primitive::Sqrt, &[&neg]),
            Err(Error::Domain { op: "sqrt", .. })
        ));
        let zero = t(&[1], &[0.0]);
        assert!(matches!(
            apply_primitive(&Primitive::Log, &[&zero]),
            Err(Error::NonFinite { op: "log" })
        ));
    }

    #[test]
    fn shape_errors_are_descriptive() {
        let a = t(&[2, 3], &[0.0; 6]);
        let b = t(&[2, 3], &[0.0; 6]);
        let err = apply_primitive(&Primitive::MatMul, &[&a, &b]).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("matmul") && msg.contains("[2, 3]"), "{msg}");
        let c = t(&[2], &[0.0; 2]);
        assert!(apply_primitive(&Primitive::Add, &[&a, &c]).is_err());
    }

    #[test]
    fn leading_dim_broadcast() {
        let a = t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = t(&[3], &[10.0, 20.0, 30.0]);
        let y = apply_primitive(&Primitive::Add, &[&a, &b]).unwrap();
        assert_eq!(y.data(), &[11.0, 22.0, 33.0, 14.0, 25.0, 36.0]);
        let s = Tensor::scalar(2.0);
        let y = apply_primitive(&Primitive::Mul, &[&s, &a]).unwrap();
        assert_eq!(y.data(), &[2.0, 4.0, 6.0, 8.0, 10.0, 12.0]);
    }

    #[test]
    fn transpose_and_reshape_round_trip() {
        let x = t(&[2, 3, 4], &(0..24).map(f64::from).collect::<Vec<_>>());
        let y = apply_primitive(&Primitive::Transpose(0, 2), &[&x]).unwrap();
        assert_eq!(y.shape(), &[4, 3, 2]);
        assert_eq!(y.data()[1], 12.0);
        let back = apply_primitive(&Primitive::Transpose(0, 2), &[&y]).unwrap();
        assert_eq!(back, x);
        let r = apply_primitive(&Primitive::Reshape(vec![6, 4]), &[&x]).unwrap();
        let r = apply_primitive(&Primitive::Reshape(vec![2, 3, 4]), &[&r]).unwrap();
        assert_eq!(r, x);
    }

    #[test]
    fn log_sum_exp_is_stable() {
        let x = t(&[1, 2], &[1000.0, 1000.0]);
        let y = apply_primitive(&Primitive::LogSumExp { axis: 1 }, &[&x]).unwrap();
        assert!((y.data()[0] - (1000.0 + 2f64.ln())).abs() < 1e-9);
    }
}
