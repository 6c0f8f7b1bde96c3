//! Differentiable operations over [`Tensor`].
//!
//! Each op validates shapes, computes the forward value, and registers a
//! backward closure that adds its contribution into the parents' gradient
//! accumulators. Hot kernels (matrix products, convolution) parallelize over
//! independent output rows, which keeps results bit-identical regardless of
//! thread count.

use rayon::prelude::*;

use super::{cf, Rng64, Scalar, Tensor};
use crate::error::{Error, Result};
use rand::Rng;

/// Below this many multiply-accumulates a kernel stays single-threaded.
const PAR_MIN_WORK: usize = 1 << 17;

fn dim_err<T: Scalar>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Error {
    Error::Dim {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

// ---------------------------------------------------------------------------
// matrix-product kernels (accumulating: out += a · b)
// ---------------------------------------------------------------------------

/// out[m×n] += a[m×k] · b[k×n]
pub(crate) fn matmul_nn_acc<T: Scalar>(
    a: &[T],
    b: &[T],
    m: usize,
    k: usize,
    n: usize,
    out: &mut [T],
) {
    let row = |i: usize, orow: &mut [T]| {
        let arow = &a[i * k..i * k + k];
        for (l, &ail) in arow.iter().enumerate() {
            if ail != T::zero() {
                let brow = &b[l * n..l * n + n];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o = *o + ail * bv;
                }
            }
        }
    };
    if m * k * n >= PAR_MIN_WORK {
        out.par_chunks_mut(n)
            .enumerate()
            .for_each(|(i, orow)| row(i, orow));
    } else {
        for (i, orow) in out.chunks_mut(n).enumerate() {
            row(i, orow);
        }
    }
}

/// out[m×n] += a[m×k] · b[n×k]ᵀ (row-row dot products)
pub(crate) fn matmul_nt_acc<T: Scalar>(
    a: &[T],
    b: &[T],
    m: usize,
    k: usize,
    n: usize,
    out: &mut [T],
) {
    let row = |i: usize, orow: &mut [T]| {
        let arow = &a[i * k..i * k + k];
        for (j, o) in orow.iter_mut().enumerate() {
            let brow = &b[j * k..j * k + k];
            let mut acc = T::zero();
            for (&av, &bv) in arow.iter().zip(brow) {
                acc = acc + av * bv;
            }
            *o = *o + acc;
        }
    };
    if m * k * n >= PAR_MIN_WORK {
        out.par_chunks_mut(n)
            .enumerate()
            .for_each(|(i, orow)| row(i, orow));
    } else {
        for (i, orow) in out.chunks_mut(n).enumerate() {
            row(i, orow);
        }
    }
}

/// out[k×n] += a[m×k]ᵀ · b[m×n]
pub(crate) fn matmul_tn_acc<T: Scalar>(
    a: &[T],
    b: &[T],
    m: usize,
    k: usize,
    n: usize,
    out: &mut [T],
) {
    let row = |l: usize, orow: &mut [T]| {
        for i in 0..m {
            let ail = a[i * k + l];
            if ail != T::zero() {
                let brow = &b[i * n..i * n + n];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o = *o + ail * bv;
                }
            }
        }
    };
    if m * k * n >= PAR_MIN_WORK {
        out.par_chunks_mut(n)
            .enumerate()
            .for_each(|(l, orow)| row(l, orow));
    } else {
        for (l, orow) in out.chunks_mut(n).enumerate() {
            row(l, orow);
        }
    }
}

// ---------------------------------------------------------------------------
// elementwise and broadcast ops
// ---------------------------------------------------------------------------

pub fn add<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.shape() != b.shape() {
        return Err(dim_err("add", a, b));
    }
    let data: Vec<T> = a
        .data()
        .iter()
        .zip(b.data().iter())
        .map(|(&x, &y)| x + y)
        .collect();
    let (pa, pb) = (a.clone(), b.clone());
    Ok(Tensor::from_op(
        a.shape().to_vec(),
        data,
        vec![a.clone(), b.clone()],
        move || {
            Box::new(move |gout: &[T]| {
                if pa.requires_grad() {
                    pa.accumulate_grad(gout);
                }
                if pb.requires_grad() {
                    pb.accumulate_grad(gout);
                }
            })
        },
    ))
}

pub fn sub<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.shape() != b.shape() {
        return Err(dim_err("sub", a, b));
    }
    let data: Vec<T> = a
        .data()
        .iter()
        .zip(b.data().iter())
        .map(|(&x, &y)| x - y)
        .collect();
    let (pa, pb) = (a.clone(), b.clone());
    Ok(Tensor::from_op(
        a.shape().to_vec(),
        data,
        vec![a.clone(), b.clone()],
        move || {
            Box::new(move |gout: &[T]| {
                if pa.requires_grad() {
                    pa.accumulate_grad(gout);
                }
                if pb.requires_grad() {
                    pb.with_grad_mut(|g| {
                        for (gi, &d) in g.iter_mut().zip(gout) {
                            *gi = *gi - d;
                        }
                    });
                }
            })
        },
    ))
}

pub fn mul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.shape() != b.shape() {
        return Err(dim_err("mul", a, b));
    }
    let data: Vec<T> = a
        .data()
        .iter()
        .zip(b.data().iter())
        .map(|(&x, &y)| x * y)
        .collect();
    let (pa, pb) = (a.clone(), b.clone());
    Ok(Tensor::from_op(
        a.shape().to_vec(),
        data,
        vec![a.clone(), b.clone()],
        move || {
            Box::new(move |gout: &[T]| {
                if pa.requires_grad() {
                    let bd = pb.data();
                    pa.with_grad_mut(|g| {
                        for ((gi, &d), &bv) in g.iter_mut().zip(gout).zip(bd.iter()) {
                            *gi = *gi + d * bv;
                        }
                    });
                }
                if pb.requires_grad() {
                    let ad = pa.data();
                    pb.with_grad_mut(|g| {
                        for ((gi, &d), &av) in g.iter_mut().zip(gout).zip(ad.iter()) {
                            *gi = *gi + d * av;
                        }
                    });
                }
            })
        },
    ))
}

pub fn scale<T: Scalar>(x: &Tensor<T>, c: f64) -> Tensor<T> {
    let cv = cf::<T>(c);
    let data: Vec<T> = x.data().iter().map(|&v| v * cv).collect();
    let px = x.clone();
    Tensor::from_op(x.shape().to_vec(), data, vec![x.clone()], move || {
        Box::new(move |gout: &[T]| {
            px.with_grad_mut(|g| {
                for (gi, &d) in g.iter_mut().zip(gout) {
                    *gi = *gi + d * cv;
                }
            });
        })
    })
}

/// x[R×C] + b[C] broadcast over rows.
pub fn add_bias<T: Scalar>(x: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if x.rank() != 2 || b.rank() != 1 || x.shape()[1] != b.shape()[0] {
        return Err(dim_err("add_bias", x, b));
    }
    let c = x.shape()[1];
    let bd = b.to_vec();
    let data: Vec<T> = x
        .data()
        .chunks(c)
        .flat_map(|row| row.iter().zip(&bd).map(|(&v, &bv)| v + bv).collect::<Vec<_>>())
        .collect();
    let (px, pb) = (x.clone(), b.clone());
    Ok(Tensor::from_op(
        x.shape().to_vec(),
        data,
        vec![x.clone(), b.clone()],
        move || {
            Box::new(move |gout: &[T]| {
                if px.requires_grad() {
                    px.accumulate_grad(gout);
                }
                if pb.requires_grad() {
                    pb.with_grad_mut(|g| {
                        for grow in gout.chunks(c) {
                            for (gi, &d) in g.iter_mut().zip(grow) {
                                *gi = *gi + d;
                            }
                        }
                    });
                }
            })
        },
    ))
}

pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let data: Vec<T> = x
        .data()
        .iter()
        .map(|&v| if v > T::zero() { v } else { T::zero() })
        .collect();
    let px = x.clone();
    Tensor::from_op(x.shape().to_vec(), data, vec![x.clone()], move || {
        Box::new(move |gout: &[T]| {
            let xd = px.data();
            px.with_grad_mut(|g| {
                for ((gi, &d), &xv) in g.iter_mut().zip(gout).zip(xd.iter()) {
                    if xv > T::zero() {
                        *gi = *gi + d;
                    }
                }
            });
        })
    })
}

// ---------------------------------------------------------------------------
// matrix products
// ---------------------------------------------------------------------------

pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
        return Err(dim_err("matmul", a, b));
    }
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let n = b.shape()[1];
    let mut data = vec![T::zero(); m * n];
    matmul_nn_acc(&a.data(), &b.data(), m, k, n, &mut data);
    let (pa, pb) = (a.clone(), b.clone());
    Ok(Tensor::from_op(
        vec![m, n],
        data,
        vec![a.clone(), b.clone()],
        move || {
            Box::new(move |gout: &[T]| {
                if pa.requires_grad() {
                    let bd = pb.data();
                    pa.with_grad_mut(|g| matmul_nt_acc(gout, &bd, m, n, k, g));
                }
                if pb.requires_grad() {
                    let ad = pa.data();
                    pb.with_grad_mut(|g| matmul_tn_acc(&ad, gout, m, k, n, g));
                }
            })
        },
    ))
}

/// a[M×K] · b[N×K]ᵀ → [M×N]; the covariance product xc·xcᵀ uses this form.
pub fn matmul_nt<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[1] {
        return Err(dim_err("matmul_nt", a, b));
    }
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let n = b.shape()[0];
    let mut data = vec![T::zero(); m * n];
    matmul_nt_acc(&a.data(), &b.data(), m, k, n, &mut data);
    let (pa, pb) = (a.clone(), b.clone());
    Ok(Tensor::from_op(
        vec![m, n],
        data,
        vec![a.clone(), b.clone()],
        move || {
            Box::new(move |gout: &[T]| {
                if pa.requires_grad() {
                    let bd = pb.data();
                    pa.with_grad_mut(|g| matmul_nn_acc(gout, &bd, m, n, k, g));
                }
                if pb.requires_grad() {
                    let ad = pa.data();
                    pb.with_grad_mut(|g| matmul_tn_acc(gout, &ad, m, n, k, g));
                }
            })
        },
    ))
}

/// Shared per-point linear map (the 1×1 convolution of the MLP stages).
pub fn pointwise_linear<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
) -> Result<Tensor<T>> {
    if x.rank() != 2 || w.rank() != 2 || x.shape()[1] != w.shape()[0] {
        return Err(dim_err("pointwise_linear", x, w));
    }
    if b.rank() != 1 || b.shape()[0] != w.shape()[1] {
        return Err(dim_err("pointwise_linear", w, b));
    }
    add_bias(&matmul(x, w)?, b)
}

// ---------------------------------------------------------------------------
// shape ops
// ---------------------------------------------------------------------------

/// Reinterprets the row-major buffer under a new shape (no copy).
pub fn reshape<T: Scalar>(x: &Tensor<T>, shape: Vec<usize>) -> Result<Tensor<T>> {
    let numel: usize = shape.iter().product();
    if numel != x.len() {
        return Err(Error::Dim {
            op: "reshape",
            lhs: x.shape().to_vec(),
            rhs: shape,
        });
    }
    let px = x.clone();
    Ok(Tensor::from_op_shared(
        shape,
        x.shared_data(),
        vec![x.clone()],
        move || Box::new(move |gout: &[T]| px.accumulate_grad(gout)),
    ))
}

/// Replicates a trailing unit axis: [..., 1] → [..., len].
pub fn broadcast_last<T: Scalar>(x: &Tensor<T>, len: usize) -> Result<Tensor<T>> {
    if x.rank() == 0 || *x.shape().last().expect("rank checked") != 1 {
        return Err(Error::Dim {
            op: "broadcast_last",
            lhs: x.shape().to_vec(),
            rhs: vec![len],
        });
    }
    let rows = x.len();
    let mut shape = x.shape().to_vec();
    *shape.last_mut().expect("rank checked") = len;
    let xd = x.data();
    let mut data = Vec::with_capacity(rows * len);
    for &v in xd.iter() {
        data.extend(std::iter::repeat(v).take(len));
    }
    drop(xd);
    let px = x.clone();
    Ok(Tensor::from_op(shape, data, vec![x.clone()], move || {
        Box::new(move |gout: &[T]| {
            px.with_grad_mut(|g| {
                for (gi, chunk) in g.iter_mut().zip(gout.chunks(len)) {
                    for &d in chunk {
                        *gi = *gi + d;
                    }
                }
            });
        })
    }))
}

/// Concatenation along the last axis; all leading extents must agree.
pub fn concat_last<T: Scalar>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    if parts.is_empty() {
        return Err(Error::config("concat_last needs at least one tensor"));
    }
    let lead = &parts[0].shape()[..parts[0].rank() - 1];
    for p in parts {
        if p.rank() == 0 || &p.shape()[..p.rank() - 1] != lead {
            return Err(dim_err("concat_last", parts[0], p));
        }
    }
    let rows: usize = lead.iter().product();
    let widths: Vec<usize> = parts.iter().map(|p| *p.shape().last().expect("rank ≥ 1")).collect();
    let total: usize = widths.iter().sum();
    let mut data = vec![T::zero(); rows * total];
    {
        let datas: Vec<_> = parts.iter().map(|p| p.data()).collect();
        let mut off = 0;
        for (pd, &w) in datas.iter().zip(&widths) {
            for r in 0..rows {
                data[r * total + off..r * total + off + w].copy_from_slice(&pd[r * w..(r + 1) * w]);
            }
            off += w;
        }
    }
    let mut shape = lead.to_vec();
    shape.push(total);
    let handles: Vec<Tensor<T>> = parts.iter().map(|p| (*p).clone()).collect();
    let bh = handles.clone();
    Ok(Tensor::from_op(shape, data, handles, move || {
        Box::new(move |gout: &[T]| {
            let mut off = 0;
            for p in &bh {
                let w = *p.shape().last().expect("rank ≥ 1");
                if p.requires_grad() {
                    p.with_grad_mut(|g| {
                        for r in 0..rows {
                            let src = &gout[r * total + off..r * total + off + w];
                            for (gi, &d) in g[r * w..(r + 1) * w].iter_mut().zip(src) {
                                *gi = *gi + d;
                            }
                        }
                    });
                }
                off += w;
            }
        })
    }))
}

/// Concatenation along axis 0; all trailing extents must agree.
pub fn concat_rows<T: Scalar>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    if parts.is_empty() {
        return Err(Error::config("concat_rows needs at least one tensor"));
    }
    let tail = &parts[0].shape()[1..];
    for p in parts {
        if p.rank() == 0 || &p.shape()[1..] != tail {
            return Err(dim_err("concat_rows", parts[0], p));
        }
    }
    let mut data = Vec::with_capacity(parts.iter().map(|p| p.len()).sum());
    for p in parts {
        data.extend_from_slice(&p.data());
    }
    let rows: usize = parts.iter().map(|p| p.shape()[0]).sum();
    let mut shape = vec![rows];
    shape.extend_from_slice(tail);
    let handles: Vec<Tensor<T>> = parts.iter().map(|p| (*p).clone()).collect();
    let bh = handles.clone();
    Ok(Tensor::from_op(shape, data, handles, move || {
        Box::new(move |gout: &[T]| {
            let mut off = 0;
            for p in &bh {
                let n = p.len();
                if p.requires_grad() {
                    p.accumulate_grad(&gout[off..off + n]);
                }
                off += n;
            }
        })
    }))
}

/// Rows [start, start+len) along axis 0.
pub fn slice_rows<T: Scalar>(x: &Tensor<T>, start: usize, len: usize) -> Result<Tensor<T>> {
    if x.rank() == 0 || start + len > x.shape()[0] {
        return Err(Error::Dim {
            op: "slice_rows",
            lhs: x.shape().to_vec(),
            rhs: vec![start, len],
        });
    }
    let width: usize = x.shape()[1..].iter().product();
    let data = x.data()[start * width..(start + len) * width].to_vec();
    let mut shape = x.shape().to_vec();
    shape[0] = len;
    let px = x.clone();
    Ok(Tensor::from_op(shape, data, vec![x.clone()], move || {
        Box::new(move |gout: &[T]| {
            px.with_grad_mut(|g| {
                for (gi, &d) in g[start * width..(start + len) * width]
                    .iter_mut()
                    .zip(gout)
                {
                    *gi = *gi + d;
                }
            });
        })
    }))
}

// ---------------------------------------------------------------------------
// reductions
// ---------------------------------------------------------------------------

pub fn sum_all<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let total = x.data().iter().fold(T::zero(), |acc, &v| acc + v);
    let px = x.clone();
    Tensor::from_op(vec![], vec![total], vec![x.clone()], move || {
        Box::new(move |gout: &[T]| {
            let d = gout[0];
            px.with_grad_mut(|g| {
                for gi in g.iter_mut() {
                    *gi = *gi + d;
                }
            });
        })
    })
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, len, inner)
}

fn reduced_shape(shape: &[usize], axis: usize, keepdim: bool) -> Vec<usize> {
    let mut s = shape.to_vec();
    if keepdim {
        s[axis] = 1;
    } else {
        s.remove(axis);
    }
    s
}

/// Mean over one axis (the global average pooling of the dataflow).
pub fn mean_axis<T: Scalar>(x: &Tensor<T>, axis: usize, keepdim: bool) -> Result<Tensor<T>> {
    if axis >= x.rank() {
        return Err(Error::config(format!(
            "mean_axis: axis {} out of range for shape {:?}",
            axis,
            x.shape()
        )));
    }
    let (outer, len, inner) = axis_split(x.shape(), axis);
    if len == 0 {
        return Err(Error::config("mean_axis over empty axis"));
    }
    let inv = cf::<T>(1.0 / len as f64);
    let xd = x.data();
    let mut data = vec![T::zero(); outer * inner];
    for o in 0..outer {
        for a in 0..len {
            let base = (o * len + a) * inner;
            let orow = &mut data[o * inner..(o + 1) * inner];
            for (ov, &xv) in orow.iter_mut().zip(&xd[base..base + inner]) {
                *ov = *ov + xv;
            }
        }
    }
    for v in data.iter_mut() {
        *v = *v * inv;
    }
    drop(xd);
    let px = x.clone();
    Ok(Tensor::from_op(
        reduced_shape(x.shape(), axis, keepdim),
        data,
        vec![x.clone()],
        move || {
            Box::new(move |gout: &[T]| {
                px.with_grad_mut(|g| {
                    for o in 0..outer {
                        let grow = &gout[o * inner..(o + 1) * inner];
                        for a in 0..len {
                            let base = (o * len + a) * inner;
                            for (gi, &d) in g[base..base + inner].iter_mut().zip(grow) {
                                *gi = *gi + d * inv;
                            }
                        }
                    }
                });
            })
        },
    ))
}

/// Max over one axis; gradient routes to the first maximal element.
pub fn max_axis<T: Scalar>(x: &Tensor<T>, axis: usize, keepdim: bool) -> Result<Tensor<T>> {
    if axis >= x.rank() {
        return Err(Error::config(format!(
            "max_axis: axis {} out of range for shape {:?}",
            axis,
            x.shape()
        )));
    }
    let (outer, len, inner) = axis_split(x.shape(), axis);
    if len == 0 {
        return Err(Error::config("max_axis over empty axis"));
    }
    let xd = x.data();
    let mut data = vec![T::zero(); outer * inner];
    let mut argmax = vec![0usize; outer * inner];
    for o in 0..outer {
        for i in 0..inner {
            let mut best = xd[o * len * inner + i];
            let mut best_a = 0usize;
            for a in 1..len {
                let v = xd[(o * len + a) * inner + i];
                if v > best {
                    best = v;
                    best_a = a;
                }
            }
            data[o * inner + i] = best;
            argmax[o * inner + i] = best_a;
        }
    }
    drop(xd);
    let px = x.clone();
    Ok(Tensor::from_op(
        reduced_shape(x.shape(), axis, keepdim),
        data,
        vec![x.clone()],
        move || {
            Box::new(move |gout: &[T]| {
                px.with_grad_mut(|g| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let a = argmax[o * inner + i];
                            let idx = (o * len + a) * inner + i;
                            g[idx] = g[idx] + gout[o * inner + i];
                        }
                    }
                });
            })
        },
    ))
}

/// Max over the point axis of a [B, N, C] map, keeping a unit axis.
pub fn max_pool_over_points<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    if x.rank() != 3 {
        return Err(Error::config(format!(
            "max_pool_over_points expects [B, N, C], got {:?}",
            x.shape()
        )));
    }
    max_axis(x, 1, true)
}

/// Mean over one named axis, keeping it as a unit axis.
pub fn global_avg_pool<T: Scalar>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    mean_axis(x, axis, true)
}

// ---------------------------------------------------------------------------
// gather
// ---------------------------------------------------------------------------

/// Mean of `k` gathered feature rows per point: conceptually the N×k×F stack
/// of selected peers followed by average pooling over k, fused so the stack
/// is never materialized. Selection indices are constants of the forward
/// pass; gradients flow to the gathered rows only.
pub fn gather_mean<T: Scalar>(x: &Tensor<T>, indices: &[usize], k: usize) -> Result<Tensor<T>> {
    if x.rank() != 2 {
        return Err(Error::config(format!(
            "gather_mean expects a 2-D tensor, got {:?}",
            x.shape()
        )));
    }
    let (n, f) = (x.shape()[0], x.shape()[1]);
    if k == 0 || indices.len() != n * k {
        return Err(Error::config(format!(
            "gather_mean: {} indices for n={} k={}",
            indices.len(),
            n,
            k
        )));
    }
    if let Some(&bad) = indices.iter().find(|&&j| j >= n) {
        return Err(Error::internal(format!(
            "gather_mean index {} out of range for {} rows",
            bad, n
        )));
    }
    let inv = cf::<T>(1.0 / k as f64);
    let xd = x.data();
    let mut data = vec![T::zero(); n * f];
    for i in 0..n {
        let orow = &mut data[i * f..(i + 1) * f];
        for &j in &indices[i * k..(i + 1) * k] {
            for (ov, &xv) in orow.iter_mut().zip(&xd[j * f..(j + 1) * f]) {
                *ov = *ov + xv;
            }
        }
        for ov in orow.iter_mut() {
            *ov = *ov * inv;
        }
    }
    drop(xd);
    let px = x.clone();
    let idx: Vec<usize> = indices.to_vec();
    Ok(Tensor::from_op(
        vec![n, f],
        data,
        vec![x.clone()],
        move || {
            Box::new(move |gout: &[T]| {
                px.with_grad_mut(|g| {
                    for i in 0..n {
                        let grow = &gout[i * f..(i + 1) * f];
                        for &j in &idx[i * k..(i + 1) * k] {
                            for (gi, &d) in g[j * f..(j + 1) * f].iter_mut().zip(grow) {
                                *gi = *gi + d * inv;
                            }
                        }
                    }
                });
            })
        },
    ))
}

// ---------------------------------------------------------------------------
// convolution and resize
// ---------------------------------------------------------------------------

fn same_padding(extent: usize, kernel: usize, stride: usize) -> (usize, usize) {
    let out = extent.div_ceil(stride);
    let total = ((out - 1) * stride + kernel).saturating_sub(extent);
    (out, total / 2)
}

/// Cross-correlation of x[H,W,Cin] with kernel[kh,kw,Cin,Cout] under "same"
/// zero padding: the unstrided output extent equals the input extent, strided
/// extents are ceiling divisions.
pub fn conv2d<T: Scalar>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    stride: (usize, usize),
) -> Result<Tensor<T>> {
    if x.rank() != 3 || kernel.rank() != 4 {
        return Err(dim_err("conv2d", x, kernel));
    }
    let (h, w, cin) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (kh, kw, kcin, cout) = (
        kernel.shape()[0],
        kernel.shape()[1],
        kernel.shape()[2],
        kernel.shape()[3],
    );
    if kh % 2 == 0 || kw % 2 == 0 {
        return Err(Error::config(format!(
            "conv2d kernel extents must be odd, got {}x{}",
            kh, kw
        )));
    }
    if kcin != cin {
        return Err(dim_err("conv2d", x, kernel));
    }
    let (sh, sw) = stride;
    if sh == 0 || sw == 0 {
        return Err(Error::config("conv2d stride must be >= 1"));
    }
    if sh > h || sw > w {
        return Err(Error::config(format!(
            "conv2d stride ({}, {}) exceeds grid extent ({}, {})",
            sh, sw, h, w
        )));
    }
    let (ho, pad_t) = same_padding(h, kh, sh);
    let (wo, pad_l) = same_padding(w, kw, sw);

    let xd_ref = x.data();
    let kd_ref = kernel.data();
    let xd: &[T] = &xd_ref;
    let kd: &[T] = &kd_ref;
    let mut data = vec![T::zero(); ho * wo * cout];
    let forward_row = |oy: usize, orow: &mut [T]| {
        for ox in 0..wo {
            let opos = &mut orow[ox * cout..(ox + 1) * cout];
            for ky in 0..kh {
                let iy = (oy * sh + ky) as isize - pad_t as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..kw {
                    let ix = (ox * sw + kx) as isize - pad_l as isize;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let xoff = (iy as usize * w + ix as usize) * cin;
                    let koff = (ky * kw + kx) * cin * cout;
                    for ci in 0..cin {
                        let xv = xd[xoff + ci];
                        if xv != T::zero() {
                            let krow = &kd[koff + ci * cout..koff + (ci + 1) * cout];
                            for (ov, &kv) in opos.iter_mut().zip(krow) {
                                *ov = *ov + xv * kv;
                            }
                        }
                    }
                }
            }
        }
    };
    if ho * wo * kh * kw * cin * cout >= PAR_MIN_WORK {
        data.par_chunks_mut(wo * cout)
            .enumerate()
            .for_each(|(oy, orow)| forward_row(oy, orow));
    } else {
        for (oy, orow) in data.chunks_mut(wo * cout).enumerate() {
            forward_row(oy, orow);
        }
    }
    drop(xd_ref);
    drop(kd_ref);

    let (px, pk) = (x.clone(), kernel.clone());
    Ok(Tensor::from_op(
        vec![ho, wo, cout],
        data,
        vec![x.clone(), kernel.clone()],
        move || {
            Box::new(move |gout: &[T]| {
                let need_x = px.requires_grad();
                let need_k = pk.requires_grad();
                let xd = px.data();
                let kd = pk.data();
                let mut dk = if need_k {
                    vec![T::zero(); kh * kw * cin * cout]
                } else {
                    Vec::new()
                };
                if need_x {
                    px.with_grad_mut(|gx| {
                        for oy in 0..ho {
                            for ox in 0..wo {
                                let grow = &gout[(oy * wo + ox) * cout..(oy * wo + ox + 1) * cout];
                                for ky in 0..kh {
                                    let iy = (oy * sh + ky) as isize - pad_t as isize;
                                    if iy < 0 || iy >= h as isize {
                                        continue;
                                    }
                                    for kx in 0..kw {
                                        let ix = (ox * sw + kx) as isize - pad_l as isize;
                                        if ix < 0 || ix >= w as isize {
                                            continue;
                                        }
                                        let xoff = (iy as usize * w + ix as usize) * cin;
                                        let koff = (ky * kw + kx) * cin * cout;
                                        for ci in 0..cin {
                                            let mut acc = T::zero();
                                            let krow =
                                                &kd[koff + ci * cout..koff + (ci + 1) * cout];
                                            for (&d, &kv) in grow.iter().zip(krow) {
                                                acc = acc + d * kv;
                                            }
                                            gx[xoff + ci] = gx[xoff + ci] + acc;
                                            if need_k {
                                                let xv = xd[xoff + ci];
                                                let kslot = &mut dk
                                                    [koff + ci * cout..koff + (ci + 1) * cout];
                                                for (kvs, &d) in kslot.iter_mut().zip(grow) {
                                                    *kvs = *kvs + d * xv;
                                                }
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    });
                } else if need_k {
                    for oy in 0..ho {
                        for ox in 0..wo {
                            let grow = &gout[(oy * wo + ox) * cout..(oy * wo + ox + 1) * cout];
                            for ky in 0..kh {
                                let iy = (oy * sh + ky) as isize - pad_t as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                for kx in 0..kw {
                                    let ix = (ox * sw + kx) as isize - pad_l as isize;
                                    if ix < 0 || ix >= w as isize {
                                        continue;
                                    }
                                    let xoff = (iy as usize * w + ix as usize) * cin;
                                    let koff = (ky * kw + kx) * cin * cout;
                                    for ci in 0..cin {
                                        let xv = xd[xoff + ci];
                                        let kslot =
                                            &mut dk[koff + ci * cout..koff + (ci + 1) * cout];
                                        for (kvs, &d) in kslot.iter_mut().zip(grow) {
                                            *kvs = *kvs + d * xv;
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                if need_k {
                    pk.accumulate_grad(&dk);
                }
            })
        },
    ))
}

/// Align-corners bilinear interpolation to a target grid; identity when the
/// target equals the source extents.
pub fn bilinear_resize<T: Scalar>(x: &Tensor<T>, target: (usize, usize)) -> Result<Tensor<T>> {
    if x.rank() != 3 {
        return Err(Error::config(format!(
            "bilinear_resize expects [h, w, C], got {:?}",
            x.shape()
        )));
    }
    let (h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (th, tw) = target;
    if th == 0 || tw == 0 {
        return Err(Error::config(format!(
            "bilinear_resize target must be positive, got ({}, {})",
            th, tw
        )));
    }
    let scale_y = if th > 1 { (h - 1) as f64 / (th - 1) as f64 } else { 0.0 };
    let scale_x = if tw > 1 { (w - 1) as f64 / (tw - 1) as f64 } else { 0.0 };

    // (y0, y1, weight of y1) per output coordinate, computed once at f64.
    let taps = |n_out: usize, n_in: usize, scale: f64| -> Vec<(usize, usize, f64)> {
        (0..n_out)
            .map(|o| {
                let s = o as f64 * scale;
                let lo = (s.floor() as usize).min(n_in - 1);
                let hi = (lo + 1).min(n_in - 1);
                (lo, hi, s - lo as f64)
            })
            .collect()
    };
    let ty = taps(th, h, scale_y);
    let tx = taps(tw, w, scale_x);

    let xd = x.data();
    let mut data = vec![T::zero(); th * tw * c];
    for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
        for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
            let opos = &mut data[(oy * tw + ox) * c..(oy * tw + ox + 1) * c];
            let w00 = cf::<T>((1.0 - fy) * (1.0 - fx));
            let w01 = cf::<T>((1.0 - fy) * fx);
            let w10 = cf::<T>(fy * (1.0 - fx));
            let w11 = cf::<T>(fy * fx);
            let p00 = &xd[(y0 * w + x0) * c..(y0 * w + x0 + 1) * c];
            let p01 = &xd[(y0 * w + x1) * c..(y0 * w + x1 + 1) * c];
            let p10 = &xd[(y1 * w + x0) * c..(y1 * w + x0 + 1) * c];
            let p11 = &xd[(y1 * w + x1) * c..(y1 * w + x1 + 1) * c];
            for i in 0..c {
                opos[i] = w00 * p00[i] + w01 * p01[i] + w10 * p10[i] + w11 * p11[i];
            }
        }
    }
    drop(xd);

    let px = x.clone();
    Ok(Tensor::from_op(
        vec![th, tw, c],
        data,
        vec![x.clone()],
        move || {
            Box::new(move |gout: &[T]| {
                px.with_grad_mut(|g| {
                    for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                        for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                            let grow = &gout[(oy * tw + ox) * c..(oy * tw + ox + 1) * c];
                            let w00 = cf::<T>((1.0 - fy) * (1.0 - fx));
                            let w01 = cf::<T>((1.0 - fy) * fx);
                            let w10 = cf::<T>(fy * (1.0 - fx));
                            let w11 = cf::<T>(fy * fx);
                            for i in 0..c {
                                let d = grow[i];
                                g[(y0 * w + x0) * c + i] = g[(y0 * w + x0) * c + i] + d * w00;
                                g[(y0 * w + x1) * c + i] = g[(y0 * w + x1) * c + i] + d * w01;
                                g[(y1 * w + x0) * c + i] = g[(y1 * w + x0) * c + i] + d * w10;
                                g[(y1 * w + x1) * c + i] = g[(y1 * w + x1) * c + i] + d * w11;
                            }
                        }
                    }
                });
            })
        },
    ))
}

// ---------------------------------------------------------------------------
// regularization and loss
// ---------------------------------------------------------------------------

/// Training mode zeroes each element with probability 1−keep and scales
/// survivors by 1/keep; inference mode (or keep == 1) is the identity.
pub fn dropout<T: Scalar>(
    x: &Tensor<T>,
    keep_prob: f64,
    training: bool,
    rng: &mut Rng64,
) -> Result<Tensor<T>> {
    if !(0.0..=1.0).contains(&keep_prob) || keep_prob == 0.0 {
        return Err(Error::config(format!(
            "dropout keep probability must lie in (0, 1], got {}",
            keep_prob
        )));
    }
    if !training || keep_prob == 1.0 {
        return Ok(x.clone());
    }
    let inv = cf::<T>(1.0 / keep_prob);
    let mask: Vec<bool> = (0..x.len()).map(|_| rng.gen::<f64>() < keep_prob).collect();
    let data: Vec<T> = x
        .data()
        .iter()
        .zip(&mask)
        .map(|(&v, &m)| if m { v * inv } else { T::zero() })
        .collect();
    let px = x.clone();
    Ok(Tensor::from_op(
        x.shape().to_vec(),
        data,
        vec![x.clone()],
        move || {
            Box::new(move |gout: &[T]| {
                px.with_grad_mut(|g| {
                    for ((gi, &d), &m) in g.iter_mut().zip(gout).zip(&mask) {
                        if m {
                            *gi = *gi + d * inv;
                        }
                    }
                });
            })
        },
    ))
}

/// Mean over rows of −log softmax(logits)[label].
pub fn softmax_cross_entropy<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<Tensor<T>> {
    if logits.rank() != 2 {
        return Err(Error::config(format!(
            "softmax_cross_entropy expects [rows, classes], got {:?}",
            logits.shape()
        )));
    }
    let (r, p) = (logits.shape()[0], logits.shape()[1]);
    if labels.len() != r {
        return Err(Error::data(format!(
            "{} labels for {} rows",
            labels.len(),
            r
        )));
    }
    if let Some(bad) = labels.iter().position(|&y| y >= p) {
        return Err(Error::data(format!(
            "label {} out of range [0, {}) at sample {}",
            labels[bad], p, bad
        )));
    }
    let ld = logits.data();
    let mut probs = vec![T::zero(); r * p];
    let mut total = T::zero();
    for i in 0..r {
        let row = &ld[i * p..(i + 1) * p];
        let m = row.iter().fold(T::neg_infinity(), |a, &v| a.max(v));
        let mut sum = T::zero();
        for (pr, &v) in probs[i * p..(i + 1) * p].iter_mut().zip(row) {
            let e = (v - m).exp();
            *pr = e;
            sum = sum + e;
        }
        let lse = sum.ln();
        for pr in probs[i * p..(i + 1) * p].iter_mut() {
            *pr = *pr / sum;
        }
        total = total + lse - (row[labels[i]] - m);
    }
    drop(ld);
    let inv_r = cf::<T>(1.0 / r as f64);
    let loss = total * inv_r;
    let plogits = logits.clone();
    let labels_owned: Vec<usize> = labels.to_vec();
    Ok(Tensor::from_op(
        vec![],
        vec![loss],
        vec![logits.clone()],
        move || {
            Box::new(move |gout: &[T]| {
                let d = gout[0] * inv_r;
                plogits.with_grad_mut(|g| {
                    for i in 0..r {
                        let y = labels_owned[i];
                        for j in 0..p {
                            let onehot = if j == y { T::one() } else { T::zero() };
                            g[i * p + j] = g[i * p + j] + d * (probs[i * p + j] - onehot);
                        }
                    }
                });
            })
        },
    ))
}

/// Row-wise softmax on raw data (no graph); used for prediction confidences.
pub fn softmax_rows_data<T: Scalar>(logits: &[T], rows: usize, classes: usize) -> Vec<T> {
    let mut out = vec![T::zero(); rows * classes];
    for i in 0..rows {
        let row = &logits[i * classes..(i + 1) * classes];
        let m = row.iter().fold(T::neg_infinity(), |a, &v| a.max(v));
        let mut sum = T::zero();
        for (o, &v) in out[i * classes..(i + 1) * classes].iter_mut().zip(row) {
            *o = (v - m).exp();
            sum = sum + *o;
        }
        for o in out[i * classes..(i + 1) * classes].iter_mut() {
            *o = *o / sum;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::backward;
    use rand::SeedableRng;

    fn t64(shape: Vec<usize>, data: Vec<f64>) -> Tensor<f64> {
        Tensor::from_vec(shape, data).unwrap()
    }

    #[test]
    fn pointwise_linear_identity() {
        let x = t64(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]);
        let w = t64(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]);
        let b = t64(vec![2], vec![0.0, 0.0]);
        let y = pointwise_linear(&x, &w, &b).unwrap();
        assert_eq!(y.to_vec(), vec![1.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn pointwise_linear_ones() {
        let x = t64(vec![3, 2], vec![1.0; 6]);
        let w = t64(vec![2, 4], vec![1.0; 8]);
        let b = t64(vec![4], vec![0.0; 4]);
        let y = pointwise_linear(&x, &w, &b).unwrap();
        assert!(y.to_vec().iter().all(|&v| v == 2.0));
    }

    #[test]
    fn pointwise_linear_shape_error_names_both_shapes() {
        let x = t64(vec![2, 3], vec![0.0; 6]);
        let w = t64(vec![4, 2], vec![0.0; 8]);
        let b = t64(vec![2], vec![0.0; 2]);
        let err = pointwise_linear(&x, &w, &b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{}", msg);
    }

    #[test]
    fn conv_1x1_stride_1_equals_pointwise_linear() {
        let xv: Vec<f64> = (0..24).map(|i| (i as f64) * 0.3 - 3.0).collect();
        let kv: Vec<f64> = (0..8).map(|i| (i as f64) * 0.1 - 0.4).collect();
        let x = t64(vec![3, 4, 2], xv.clone());
        let k = t64(vec![1, 1, 2, 4], kv.clone());
        let conv = conv2d(&x, &k, (1, 1)).unwrap();

        let flat = t64(vec![12, 2], xv);
        let w = t64(vec![2, 4], kv);
        let b = t64(vec![4], vec![0.0; 4]);
        let lin = pointwise_linear(&flat, &w, &b).unwrap();
        for (a, e) in conv.to_vec().iter().zip(lin.to_vec()) {
            assert!((a - e).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_3x3_average_keeps_constant_interior() {
        let c = 2.5;
        let x = t64(vec![5, 6, 1], vec![c; 30]);
        let k = t64(vec![3, 3, 1, 1], vec![1.0 / 9.0; 9]);
        let y = conv2d(&x, &k, (1, 1)).unwrap();
        let yd = y.to_vec();
        for iy in 1..4 {
            for ix in 1..5 {
                assert!((yd[iy * 6 + ix] - c).abs() < 1e-12);
            }
        }
        // Border sums shrink under zero padding.
        assert!(yd[0] < c);
    }

    #[test]
    fn conv_even_kernel_is_config_error() {
        let x = t64(vec![4, 4, 1], vec![0.0; 16]);
        let k = t64(vec![2, 2, 1, 1], vec![0.0; 4]);
        assert!(matches!(
            conv2d(&x, &k, (1, 1)),
            Err(crate::error::Error::Config(_))
        ));
    }

    #[test]
    fn bilinear_identity_is_bit_exact() {
        let data: Vec<f64> = (0..32).map(|i| (i as f64).sin()).collect();
        let x = t64(vec![4, 4, 2], data.clone());
        let y = bilinear_resize(&x, (4, 4)).unwrap();
        assert_eq!(y.to_vec(), data);
    }

    #[test]
    fn bilinear_from_single_cell_is_constant() {
        let x = t64(vec![1, 1, 1], vec![7.25]);
        let y = bilinear_resize(&x, (3, 5)).unwrap();
        assert!(y.to_vec().iter().all(|&v| v == 7.25));
    }

    #[test]
    fn bilinear_2x2_to_3x3_hand_values() {
        let x = t64(vec![2, 2, 1], vec![0.0, 1.0, 2.0, 3.0]);
        let y = bilinear_resize(&x, (3, 3)).unwrap();
        let expect = [0.0, 0.5, 1.0, 1.0, 1.5, 2.0, 2.0, 2.5, 3.0];
        for (a, e) in y.to_vec().iter().zip(expect) {
            assert!((a - e).abs() < 1e-12, "{} vs {}", a, e);
        }
    }

    #[test]
    fn bilinear_zero_target_is_config_error() {
        let x = t64(vec![2, 2, 1], vec![0.0; 4]);
        assert!(matches!(
            bilinear_resize(&x, (0, 3)),
            Err(crate::error::Error::Config(_))
        ));
    }

    #[test]
    fn uniform_logits_loss_is_ln_p() {
        for p in [2usize, 4, 13, 50] {
            let logits = t64(vec![3, p], vec![0.7; 3 * p]);
            let labels = vec![0usize, p / 2, p - 1];
            let l = softmax_cross_entropy(&logits, &labels).unwrap();
            assert!((l.item() - (p as f64).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn cross_entropy_label_out_of_range_names_sample() {
        let logits = t64(vec![3, 4], vec![0.0; 12]);
        let err = softmax_cross_entropy(&logits, &[0, 9, 1]).unwrap_err();
        let msg = err.to_string();
        assert!(matches!(err, crate::error::Error::Data(_)));
        assert!(msg.contains("sample 1"), "{}", msg);
    }

    #[test]
    fn max_pool_is_permutation_invariant() {
        let mut rng = Rng64::seed_from_u64(11);
        let data: Vec<f64> = (0..30).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let x = t64(vec![1, 10, 3], data.clone());
        let base = max_pool_over_points(&x).unwrap().to_vec();

        let perm: Vec<usize> = {
            let mut p: Vec<usize> = (0..10).collect();
            p.reverse();
            p.swap(2, 5);
            p
        };
        let mut permuted = vec![0.0; 30];
        for (to, &from) in perm.iter().enumerate() {
            permuted[to * 3..to * 3 + 3].copy_from_slice(&data[from * 3..from * 3 + 3]);
        }
        let y = max_pool_over_points(&t64(vec![1, 10, 3], permuted)).unwrap();
        assert_eq!(y.to_vec(), base);
    }

    #[test]
    fn dropout_keep_one_is_identity() {
        let mut rng = Rng64::seed_from_u64(3);
        let data: Vec<f64> = (0..12).map(|i| i as f64).collect();
        let x = t64(vec![3, 4], data.clone());
        let y = dropout(&x, 1.0, true, &mut rng).unwrap();
        assert_eq!(y.to_vec(), data);
    }

    #[test]
    fn dropout_zero_keep_is_config_error() {
        let mut rng = Rng64::seed_from_u64(3);
        let x = t64(vec![2, 2], vec![1.0; 4]);
        assert!(dropout(&x, 0.0, true, &mut rng).is_err());
    }

    #[test]
    fn dropout_mean_approaches_identity() {
        // Expectation over masks: mean of dropout(x) -> x within 3 standard
        // errors, elementwise, over 10^4 masks.
        let keep = 0.65;
        let x_val = 2.0f64;
        let x = t64(vec![1, 1], vec![x_val]);
        let trials = 10_000usize;
        let mut rng = Rng64::seed_from_u64(1234);
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        for _ in 0..trials {
            let v = dropout(&x, keep, true, &mut rng).unwrap().item();
            sum += v;
            sum_sq += v * v;
        }
        let mean = sum / trials as f64;
        let var = sum_sq / trials as f64 - mean * mean;
        let se = (var / trials as f64).sqrt();
        assert!(
            (mean - x_val).abs() <= 3.0 * se,
            "mean {} vs {} (se {})",
            mean,
            x_val,
            se
        );
    }

    #[test]
    fn backward_sum_gives_ones() {
        let x = Tensor::param(vec![2, 3], vec![1.0, -2.0, 3.0, 0.5, 0.0, -1.0]).unwrap();
        let l = sum_all(&x);
        backward(&l).unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0; 6]);
    }

    #[test]
    fn backward_sum_of_squares_gives_2x() {
        let data: Vec<f64> = vec![1.0, -2.0, 3.0, 0.5];
        let x = Tensor::param(vec![4], data.clone()).unwrap();
        let l = sum_all(&mul(&x, &x).unwrap());
        backward(&l).unwrap();
        let g = x.grad().unwrap();
        for (&gi, &xi) in g.iter().zip(&data) {
            assert!((gi - 2.0 * xi).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_accumulation_is_order_independent() {
        // The same expression recorded in two different construction orders
        // must produce identical gradients at 64-bit.
        let data: Vec<f64> = vec![0.3, -0.7, 1.1];
        let w: Vec<f64> = vec![2.0, -1.0, 0.5];

        let grads = |swap: bool| {
            let x = Tensor::param(vec![3], data.clone()).unwrap();
            let c = Tensor::from_vec(vec![3], w.clone()).unwrap();
            let a = mul(&x, &c).unwrap();
            let b = mul(&x, &x).unwrap();
            let s = if swap {
                add(&b, &a).unwrap()
            } else {
                add(&a, &b).unwrap()
            };
            let l = sum_all(&s);
            backward(&l).unwrap();
            x.grad().unwrap()
        };
        let g1 = grads(false);
        let g2 = grads(true);
        for (&a, &b) in g1.iter().zip(&g2) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn gap_then_broadcast_preserves_channel_sums() {
        let mut rng = Rng64::seed_from_u64(5);
        let data: Vec<f64> = (0..24).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let x = t64(vec![2, 4, 3], data.clone());
        let pooled = global_avg_pool(&x, 1).unwrap();
        let pd = pooled.to_vec();
        for o in 0..2 {
            for c in 0..3 {
                let direct: f64 = (0..4).map(|a| data[(o * 4 + a) * 3 + c]).sum();
                assert!((4.0 * pd[o * 3 + c] - direct).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn max_axis_routes_gradient_to_first_maximum() {
        let x = Tensor::param(vec![1, 3, 1], vec![2.0, 5.0, 5.0]).unwrap();
        let l = sum_all(&max_axis(&x, 1, false).unwrap());
        backward(&l).unwrap();
        assert_eq!(x.grad().unwrap(), vec![0.0, 1.0, 0.0]);
    }
}
