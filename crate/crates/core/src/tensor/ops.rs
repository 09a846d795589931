//! Forward and backward rules for every differentiable primitive.
//!
//! Elementwise and reduction ops are methods on [`Tensor`]; the layer
//! primitives (`conv1d`, `batch_norm1d`, `linear`, `softmax_cross_entropy`)
//! are free functions. Broadcasting is supported only between a scalar
//! (any one-element tensor) and a tensor; every other shape mismatch is an
//! error naming the offending dimensions.
//!
//! Subgradient conventions: `relu`, `l1_norm` and `sqrt` use 0 at 0;
//! `clamp` passes gradient only strictly inside `(lo, hi)`; `sign` is
//! treated as piecewise constant (zero gradient everywhere).

use super::{attach, debug_check_finite, out_grad, Tensor};
use crate::error::{Error, Result};

enum Broadcast {
    Same,
    LeftScalar,
    RightScalar,
}

fn broadcast_kind(op: &'static str, a: &Tensor, b: &Tensor) -> Result<Broadcast> {
    if a.shape() == b.shape() {
        Ok(Broadcast::Same)
    } else if a.numel() == 1 {
        Ok(Broadcast::LeftScalar)
    } else if b.numel() == 1 {
        Ok(Broadcast::RightScalar)
    } else {
        Err(Error::ShapeMismatch {
            op,
            detail: format!("left {:?} vs right {:?}", a.shape(), b.shape()),
        })
    }
}

impl Tensor {
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        let kind = broadcast_kind("add", self, other)?;
        let (a, b) = (self.data(), other.data());
        let out = match kind {
            Broadcast::Same => {
                Tensor::from_vec(a.iter().zip(b.iter()).map(|(x, y)| x + y).collect(), self.shape())?
            }
            Broadcast::LeftScalar => {
                let s = a[0];
                Tensor::from_vec(b.iter().map(|y| s + y).collect(), other.shape())?
            }
            Broadcast::RightScalar => {
                let s = b[0];
                Tensor::from_vec(a.iter().map(|x| x + s).collect(), self.shape())?
            }
        };
        drop(a);
        drop(b);
        debug_check_finite("add", &out);
        let (ta, tb, to) = (self.clone(), other.clone(), out.clone());
        attach(&out, move || {
            let Some(g) = out_grad(&to) else { return };
            match (ta.numel() == g.len(), tb.numel() == g.len()) {
                (true, true) => {
                    ta.accumulate_grad(&g);
                    tb.accumulate_grad(&g);
                }
                (false, true) => {
                    ta.accumulate_grad(&[g.iter().sum()]);
                    tb.accumulate_grad(&g);
                }
                (true, false) => {
                    ta.accumulate_grad(&g);
                    tb.accumulate_grad(&[g.iter().sum()]);
                }
                (false, false) => {
                    ta.accumulate_grad(&g);
                    tb.accumulate_grad(&g);
                }
            }
        });
        Ok(out)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        let kind = broadcast_kind("sub", self, other)?;
        let (a, b) = (self.data(), other.data());
        let out = match kind {
            Broadcast::Same => {
                Tensor::from_vec(a.iter().zip(b.iter()).map(|(x, y)| x - y).collect(), self.shape())?
            }
            Broadcast::LeftScalar => {
                let s = a[0];
                Tensor::from_vec(b.iter().map(|y| s - y).collect(), other.shape())?
            }
            Broadcast::RightScalar => {
                let s = b[0];
                Tensor::from_vec(a.iter().map(|x| x - s).collect(), self.shape())?
            }
        };
        drop(a);
        drop(b);
        debug_check_finite("sub", &out);
        let (ta, tb, to) = (self.clone(), other.clone(), out.clone());
        attach(&out, move || {
            let Some(g) = out_grad(&to) else { return };
            let neg: Vec<f64> = g.iter().map(|v| -v).collect();
            if ta.numel() == g.len() {
                ta.accumulate_grad(&g);
            } else {
                ta.accumulate_grad(&[g.iter().sum()]);
            }
            if tb.numel() == g.len() {
                tb.accumulate_grad(&neg);
            } else {
                tb.accumulate_grad(&[neg.iter().sum()]);
            }
        });
        Ok(out)
    }

    /// Elementwise (Hadamard) product, scalar broadcast allowed.
    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        let kind = broadcast_kind("mul", self, other)?;
        let (a, b) = (self.data(), other.data());
        let out = match kind {
            Broadcast::Same => {
                Tensor::from_vec(a.iter().zip(b.iter()).map(|(x, y)| x * y).collect(), self.shape())?
            }
            Broadcast::LeftScalar => {
                let s = a[0];
                Tensor::from_vec(b.iter().map(|y| s * y).collect(), other.shape())?
            }
            Broadcast::RightScalar => {
                let s = b[0];
                Tensor::from_vec(a.iter().map(|x| x * s).collect(), self.shape())?
            }
        };
        drop(a);
        drop(b);
        debug_check_finite("mul", &out);
        let (ta, tb, to) = (self.clone(), other.clone(), out.clone());
        attach(&out, move || {
            let Some(g) = out_grad(&to) else { return };
            let (av, bv) = (ta.data().clone(), tb.data().clone());
            // d/da (a*b) = b, d/db (a*b) = a, with scalar sides summed
            if ta.numel() == g.len() {
                let da: Vec<f64> = if bv.len() == g.len() {
                    g.iter().zip(&bv).map(|(gv, y)| gv * y).collect()
                } else {
                    g.iter().map(|gv| gv * bv[0]).collect()
                };
                ta.accumulate_grad(&da);
            } else {
                let da: f64 = g.iter().zip(&bv).map(|(gv, y)| gv * y).sum();
                ta.accumulate_grad(&[da]);
            }
            if tb.numel() == g.len() {
                let db: Vec<f64> = if av.len() == g.len() {
                    g.iter().zip(&av).map(|(gv, x)| gv * x).collect()
                } else {
                    g.iter().map(|gv| gv * av[0]).collect()
                };
                tb.accumulate_grad(&db);
            } else {
                let db: f64 = g.iter().zip(&av).map(|(gv, x)| gv * x).sum();
                tb.accumulate_grad(&[db]);
            }
        });
        Ok(out)
    }

    pub fn scalar_mul(&self, c: f64) -> Tensor {
        let out = Tensor::from_vec(self.data().iter().map(|x| x * c).collect(), self.shape())
            .expect("same shape");
        debug_check_finite("scalar_mul", &out);
        let (ta, to) = (self.clone(), out.clone());
        attach(&out, move || {
            let Some(g) = out_grad(&to) else { return };
            let da: Vec<f64> = g.iter().map(|gv| gv * c).collect();
            ta.accumulate_grad(&da);
        });
        out
    }

    pub fn relu(&self) -> Tensor {
        let out = Tensor::from_vec(
            self.data().iter().map(|x| x.max(0.0)).collect(),
            self.shape(),
        )
        .expect("same shape");
        debug_check_finite("relu", &out);
        let (ta, to) = (self.clone(), out.clone());
        attach(&out, move || {
            let Some(g) = out_grad(&to) else { return };
            let av = ta.data().clone();
            let da: Vec<f64> = g
                .iter()
                .zip(&av)
                .map(|(gv, x)| if *x > 0.0 { *gv } else { 0.0 })
                .collect();
            ta.accumulate_grad(&da);
        });
        out
    }

    /// Elementwise sign with `sign(0) = 0`. Piecewise constant: no gradient
    /// flows through it.
    pub fn sign(&self) -> Tensor {
        let out = Tensor::from_vec(
            self.data()
                .iter()
                .map(|x| {
                    if *x > 0.0 {
                        1.0
                    } else if *x < 0.0 {
                        -1.0
                    } else {
                        0.0
                    }
                })
                .collect(),
            self.shape(),
        )
        .expect("same shape");
        out
    }

    /// Elementwise clamp into `[lo, hi]`. Gradient passes only strictly
    /// inside the interval.
    pub fn clamp(&self, lo: f64, hi: f64) -> Tensor {
        debug_assert!(lo <= hi);
        let out = Tensor::from_vec(
            self.data().iter().map(|x| x.clamp(lo, hi)).collect(),
            self.shape(),
        )
        .expect("same shape");
        debug_check_finite("clamp", &out);
        let (ta, to) = (self.clone(), out.clone());
        attach(&out, move || {
            let Some(g) = out_grad(&to) else { return };
            let av = ta.data().clone();
            let da: Vec<f64> = g
                .iter()
                .zip(&av)
                .map(|(gv, x)| if *x > lo && *x < hi { *gv } else { 0.0 })
                .collect();
            ta.accumulate_grad(&da);
        });
        out
    }

    /// Elementwise square root; subgradient 0 at 0. Inputs must be >= 0.
    pub fn sqrt(&self) -> Tensor {
        let out = Tensor::from_vec(self.data().iter().map(|x| x.sqrt()).collect(), self.shape())
            .expect("same shape");
        debug_check_finite("sqrt", &out);
        let (ta, to) = (self.clone(), out.clone());
        attach(&out, move || {
            let Some(g) = out_grad(&to) else { return };
            let ov = to.data().clone();
            let da: Vec<f64> = g
                .iter()
                .zip(&ov)
                .map(|(gv, s)| if *s > 0.0 { gv * 0.5 / s } else { 0.0 })
                .collect();
            ta.accumulate_grad(&da);
        });
        out
    }

    /// Same data, new shape (element counts must agree).
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != self.numel() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                detail: format!(
                    "cannot reshape {:?} ({} elements) to {:?} ({} elements)",
                    self.shape(),
                    self.numel(),
                    shape,
                    numel
                ),
            });
        }
        let out = Tensor::from_vec(self.to_vec(), shape)?;
        let (ta, to) = (self.clone(), out.clone());
        attach(&out, move || {
            let Some(g) = out_grad(&to) else { return };
            ta.accumulate_grad(&g);
        });
        Ok(out)
    }

    /// 2-D transpose.
    pub fn transpose2d(&self) -> Result<Tensor> {
        let s = self.shape();
        if s.len() != 2 {
            return Err(Error::ShapeMismatch {
                op: "transpose2d",
                detail: format!("expected rank 2, got {s:?}"),
            });
        }
        let (r, c) = (s[0], s[1]);
        let a = self.data();
        let mut v = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                v[j * r + i] = a[i * c + j];
            }
        }
        drop(a);
        let out = Tensor::from_vec(v, &[c, r])?;
        let (ta, to) = (self.clone(), out.clone());
        attach(&out, move || {
            let Some(g) = out_grad(&to) else { return };
            // transpose the gradient back
            let mut da = vec![0.0; r * c];
            for j in 0..c {
                for i in 0..r {
                    da[i * c + j] = g[j * r + i];
                }
            }
            ta.accumulate_grad(&da);
        });
        Ok(out)
    }

    /// 2-D matrix product `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul2d(&self, other: &Tensor) -> Result<Tensor> {
        let (sa, sb) = (self.shape(), other.shape());
        if sa.len() != 2 || sb.len() != 2 {
            return Err(Error::ShapeMismatch {
                op: "matmul2d",
                detail: format!("expected rank 2 operands, got {sa:?} and {sb:?}"),
            });
        }
        if sa[1] != sb[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul2d",
                detail: format!("inner dimensions differ: {} vs {}", sa[1], sb[0]),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let (a, b) = (self.data(), other.data());
        let mut v = vec![0.0; m * n];
        for i in 0..m {
            let arow = &a[i * k..(i + 1) * k];
            let orow = &mut v[i * n..(i + 1) * n];
            for (kk, &av) in arow.iter().enumerate() {
                let brow = &b[kk * n..(kk + 1) * n];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
        drop(a);
        drop(b);
        let out = Tensor::from_vec(v, &[m, n])?;
        debug_check_finite("matmul2d", &out);
        let (ta, tb, to) = (self.clone(), other.clone(), out.clone());
        attach(&out, move || {
            let Some(g) = out_grad(&to) else { return };
            let (av, bv) = (ta.data().clone(), tb.data().clone());
            if ta.needs_grad() {
                // dA = G * B^T
                let mut da = vec![0.0; m * k];
                for i in 0..m {
                    let grow = &g[i * n..(i + 1) * n];
                    let darow = &mut da[i * k..(i + 1) * k];
                    for (kk, d) in darow.iter_mut().enumerate() {
                        let brow = &bv[kk * n..(kk + 1) * n];
                        *d = grow.iter().zip(brow).map(|(gv, b)| gv * b).sum();
                    }
                }
                ta.accumulate_grad(&da);
            }
            if tb.needs_grad() {
                // dB = A^T * G
                let mut db = vec![0.0; k * n];
                for i in 0..m {
                    let arow = &av[i * k..(i + 1) * k];
                    let grow = &g[i * n..(i + 1) * n];
                    for (kk, &avv) in arow.iter().enumerate() {
                        let dbrow = &mut db[kk * n..(kk + 1) * n];
                        for (d, &gv) in dbrow.iter_mut().zip(grow) {
                            *d += avv * gv;
                        }
                    }
                }
                tb.accumulate_grad(&db);
            }
        });
        Ok(out)
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&self) -> Tensor {
        let total: f64 = self.data().iter().sum();
        let out = Tensor::scalar(total);
        debug_check_finite("sum", &out);
        let (ta, to) = (self.clone(), out.clone());
        let n = self.numel();
        attach(&out, move || {
            let Some(g) = out_grad(&to) else { return };
            ta.accumulate_grad(&vec![g[0]; n]);
        });
        out
    }

    /// Mean of all elements, as a scalar.
    pub fn mean(&self) -> Tensor {
        let n = self.numel();
        debug_assert!(n > 0, "mean of empty tensor");
        let total: f64 = self.data().iter().sum();
        let out = Tensor::scalar(total / n as f64);
        debug_check_finite("mean", &out);
        let (ta, to) = (self.clone(), out.clone());
        attach(&out, move || {
            let Some(g) = out_grad(&to) else { return };
            ta.accumulate_grad(&vec![g[0] / n as f64; n]);
        });
        out
    }

    /// Sum of absolute values, as a scalar. Subgradient 0 at 0.
    pub fn l1_norm(&self) -> Tensor {
        let total: f64 = self.data().iter().map(|x| x.abs()).sum();
        let out = Tensor::scalar(total);
        debug_check_finite("l1_norm", &out);
        let (ta, to) = (self.clone(), out.clone());
        attach(&out, move || {
            let Some(g) = out_grad(&to) else { return };
            let av = ta.data().clone();
            let da: Vec<f64> = av
                .iter()
                .map(|x| {
                    if *x > 0.0 {
                        g[0]
                    } else if *x < 0.0 {
                        -g[0]
                    } else {
                        0.0
                    }
                })
                .collect();
            ta.accumulate_grad(&da);
        });
        out
    }

    /// Squared Frobenius norm (sum of squared elements), as a scalar.
    pub fn frobenius_sq(&self) -> Tensor {
        let total: f64 = self.data().iter().map(|x| x * x).sum();
        let out = Tensor::scalar(total);
        debug_check_finite("frobenius_sq", &out);
        let (ta, to) = (self.clone(), out.clone());
        attach(&out, move || {
            let Some(g) = out_grad(&to) else { return };
            let av = ta.data().clone();
            let da: Vec<f64> = av.iter().map(|x| 2.0 * x * g[0]).collect();
            ta.accumulate_grad(&da);
        });
        out
    }
}

/// Valid (unpadded) 1-D cross-correlation.
///
/// `input [B, K_in, L]`, `weight [K_out, K_in, K_l]`, `bias [K_out]`,
/// output `[B, K_out, L_out]` with `L_out = (L - K_l)/stride + 1`.
pub fn conv1d(input: &Tensor, weight: &Tensor, bias: &Tensor, stride: usize) -> Result<Tensor> {
    let (si, sw, sb) = (input.shape(), weight.shape(), bias.shape());
    if si.len() != 3 {
        return Err(Error::ShapeMismatch {
            op: "conv1d",
            detail: format!("input must be rank 3 [B, K_in, L], got {si:?}"),
        });
    }
    if sw.len() != 3 {
        return Err(Error::ShapeMismatch {
            op: "conv1d",
            detail: format!("weight must be rank 3 [K_out, K_in, K_l], got {sw:?}"),
        });
    }
    let (bsz, cin, len) = (si[0], si[1], si[2]);
    let (cout, wcin, k) = (sw[0], sw[1], sw[2]);
    if wcin != cin {
        return Err(Error::ShapeMismatch {
            op: "conv1d",
            detail: format!("input channels {cin} != weight K_in {wcin}"),
        });
    }
    if sb != [cout] {
        return Err(Error::ShapeMismatch {
            op: "conv1d",
            detail: format!("bias shape {sb:?} != [K_out = {cout}]"),
        });
    }
    if stride == 0 {
        return Err(Error::ShapeMismatch {
            op: "conv1d",
            detail: "stride must be >= 1".into(),
        });
    }
    if len < k {
        return Err(Error::ShapeMismatch {
            op: "conv1d",
            detail: format!("signal length {len} shorter than kernel {k}"),
        });
    }
    let l_out = (len - k) / stride + 1;

    let mut v = vec![0.0; bsz * cout * l_out];
    {
        let x = input.data();
        let w = weight.data();
        let bi = bias.data();
        for b in 0..bsz {
            let xoff = b * cin * len;
            let ooff = b * cout * l_out;
            for co in 0..cout {
                let orow = &mut v[ooff + co * l_out..ooff + (co + 1) * l_out];
                let woff = co * cin * k;
                for ci in 0..cin {
                    let xrow = &x[xoff + ci * len..xoff + (ci + 1) * len];
                    let wk = &w[woff + ci * k..woff + ci * k + k];
                    for (lo, o) in orow.iter_mut().enumerate() {
                        let base = lo * stride;
                        let mut acc = 0.0;
                        for (kk, wv) in wk.iter().enumerate() {
                            acc += xrow[base + kk] * wv;
                        }
                        *o += acc;
                    }
                }
                let bv = bi[co];
                for o in orow.iter_mut() {
                    *o += bv;
                }
            }
        }
    }
    let out = Tensor::from_vec(v, &[bsz, cout, l_out])?;
    debug_check_finite("conv1d", &out);

    let (ti, tw, tb, to) = (input.clone(), weight.clone(), bias.clone(), out.clone());
    attach(&out, move || {
        let Some(g) = out_grad(&to) else { return };
        let x = ti.data().clone();
        let w = tw.data().clone();
        if tb.needs_grad() {
            let mut db = vec![0.0; cout];
            for b in 0..bsz {
                for co in 0..cout {
                    let grow = &g[(b * cout + co) * l_out..(b * cout + co + 1) * l_out];
                    db[co] += grow.iter().sum::<f64>();
                }
            }
            tb.accumulate_grad(&db);
        }
        if tw.needs_grad() {
            let mut dw = vec![0.0; cout * cin * k];
            for b in 0..bsz {
                let xoff = b * cin * len;
                for co in 0..cout {
                    let grow = &g[(b * cout + co) * l_out..(b * cout + co + 1) * l_out];
                    let woff = co * cin * k;
                    for ci in 0..cin {
                        let xrow = &x[xoff + ci * len..xoff + (ci + 1) * len];
                        let dwk = &mut dw[woff + ci * k..woff + ci * k + k];
                        for (lo, gv) in grow.iter().enumerate() {
                            let base = lo * stride;
                            for (kk, d) in dwk.iter_mut().enumerate() {
                                *d += gv * xrow[base + kk];
                            }
                        }
                    }
                }
            }
            tw.accumulate_grad(&dw);
        }
        if ti.needs_grad() {
            let mut dx = vec![0.0; bsz * cin * len];
            for b in 0..bsz {
                let xoff = b * cin * len;
                for co in 0..cout {
                    let grow = &g[(b * cout + co) * l_out..(b * cout + co + 1) * l_out];
                    let woff = co * cin * k;
                    for ci in 0..cin {
                        let wk = &w[woff + ci * k..woff + ci * k + k];
                        let dxrow = &mut dx[xoff + ci * len..xoff + (ci + 1) * len];
                        for (lo, gv) in grow.iter().enumerate() {
                            let base = lo * stride;
                            for (kk, wv) in wk.iter().enumerate() {
                                dxrow[base + kk] += gv * wv;
                            }
                        }
                    }
                }
            }
            ti.accumulate_grad(&dx);
        }
    });
    Ok(out)
}

/// Batch-normalization statistics source.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BatchNormMode {
    /// Minibatch statistics; running statistics updated.
    Train,
    /// Minibatch statistics; running statistics left untouched. Used while
    /// generating adversarial examples so the model stays unmodified.
    TrainFrozen,
    /// Running statistics.
    Eval,
}

/// Per-channel batch normalization over `[B, C, L]` (or `[B, C]`) input:
/// `y = gamma * (x - mu) / sqrt(var + eps) + beta` with population variance.
pub fn batch_norm1d(
    input: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    running_mean: &Tensor,
    running_var: &Tensor,
    mode: BatchNormMode,
    momentum: f64,
    eps: f64,
) -> Result<Tensor> {
    let si = input.shape().to_vec();
    let (bsz, ch, len) = match si.len() {
        3 => (si[0], si[1], si[2]),
        2 => (si[0], si[1], 1),
        _ => {
            return Err(Error::ShapeMismatch {
                op: "batch_norm1d",
                detail: format!("input must be rank 2 or 3, got {si:?}"),
            })
        }
    };
    for (name, t) in [
        ("gamma", gamma),
        ("beta", beta),
        ("running_mean", running_mean),
        ("running_var", running_var),
    ] {
        if t.shape() != [ch] {
            return Err(Error::ShapeMismatch {
                op: "batch_norm1d",
                detail: format!("{name} shape {:?} != [C = {ch}]", t.shape()),
            });
        }
    }
    let n = bsz * len;
    let use_batch_stats = matches!(mode, BatchNormMode::Train | BatchNormMode::TrainFrozen);
    if use_batch_stats && n < 2 {
        return Err(Error::DegenerateBatch {
            elements_per_channel: n,
        });
    }

    let channel_iter = |c: usize| {
        (0..bsz).flat_map(move |b| {
            let off = (b * ch + c) * len;
            off..off + len
        })
    };

    let (mean, inv_std) = {
        let x = input.data();
        if use_batch_stats {
            let mut mean = vec![0.0; ch];
            let mut inv_std = vec![0.0; ch];
            for c in 0..ch {
                let mu: f64 = channel_iter(c).map(|i| x[i]).sum::<f64>() / n as f64;
                let var: f64 =
                    channel_iter(c).map(|i| (x[i] - mu) * (x[i] - mu)).sum::<f64>() / n as f64;
                mean[c] = mu;
                inv_std[c] = 1.0 / (var + eps).sqrt();
            }
            (mean, inv_std)
        } else {
            let rm = running_mean.data();
            let rv = running_var.data();
            let inv_std: Vec<f64> = rv.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
            (rm.clone(), inv_std)
        }
    };

    if mode == BatchNormMode::Train {
        // Population variance feeds the running estimate as well.
        let x = input.data();
        let mut rm = running_mean.data_mut();
        let mut rv = running_var.data_mut();
        for c in 0..ch {
            let var = 1.0 / (inv_std[c] * inv_std[c]) - eps;
            rm[c] = (1.0 - momentum) * rm[c] + momentum * mean[c];
            rv[c] = (1.0 - momentum) * rv[c] + momentum * var;
        }
        drop(x);
    }

    let mut xhat = vec![0.0; bsz * ch * len];
    let mut v = vec![0.0; bsz * ch * len];
    {
        let x = input.data();
        let ga = gamma.data();
        let be = beta.data();
        for c in 0..ch {
            let (mu, is) = (mean[c], inv_std[c]);
            let (gv, bv) = (ga[c], be[c]);
            for i in channel_iter(c) {
                let h = (x[i] - mu) * is;
                xhat[i] = h;
                v[i] = gv * h + bv;
            }
        }
    }
    let out = Tensor::from_vec(v, &si)?;
    debug_check_finite("batch_norm1d", &out);

    let (ti, tg, tb, to) = (input.clone(), gamma.clone(), beta.clone(), out.clone());
    attach(&out, move || {
        let Some(g) = out_grad(&to) else { return };
        let ga = tg.data().clone();
        let mut dgamma = vec![0.0; ch];
        let mut dbeta = vec![0.0; ch];
        for c in 0..ch {
            for i in channel_iter(c) {
                dbeta[c] += g[i];
                dgamma[c] += g[i] * xhat[i];
            }
        }
        if ti.needs_grad() {
            let mut dx = vec![0.0; bsz * ch * len];
            for c in 0..ch {
                let scale = ga[c] * inv_std[c];
                if use_batch_stats {
                    let mean_g = dbeta[c] / n as f64;
                    let mean_gx = dgamma[c] / n as f64;
                    for i in channel_iter(c) {
                        dx[i] = scale * (g[i] - mean_g - xhat[i] * mean_gx);
                    }
                } else {
                    for i in channel_iter(c) {
                        dx[i] = scale * g[i];
                    }
                }
            }
            ti.accumulate_grad(&dx);
        }
        tg.accumulate_grad(&dgamma);
        tb.accumulate_grad(&dbeta);
    });
    Ok(out)
}

/// Affine map `y = x W^T + b` with `input [B, K_in]`, `weight [K_out, K_in]`,
/// `bias [K_out]`.
pub fn linear(input: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (si, sw, sb) = (input.shape(), weight.shape(), bias.shape());
    if si.len() != 2 || sw.len() != 2 {
        return Err(Error::ShapeMismatch {
            op: "linear",
            detail: format!("expected rank-2 input and weight, got {si:?} and {sw:?}"),
        });
    }
    let (bsz, kin) = (si[0], si[1]);
    let (kout, wkin) = (sw[0], sw[1]);
    if wkin != kin {
        return Err(Error::ShapeMismatch {
            op: "linear",
            detail: format!("input features {kin} != weight K_in {wkin}"),
        });
    }
    if sb != [kout] {
        return Err(Error::ShapeMismatch {
            op: "linear",
            detail: format!("bias shape {sb:?} != [K_out = {kout}]"),
        });
    }
    let mut v = vec![0.0; bsz * kout];
    {
        let x = input.data();
        let w = weight.data();
        let bi = bias.data();
        for b in 0..bsz {
            let xrow = &x[b * kin..(b + 1) * kin];
            let orow = &mut v[b * kout..(b + 1) * kout];
            for (o, out_v) in orow.iter_mut().enumerate() {
                let wrow = &w[o * kin..(o + 1) * kin];
                let mut acc = bi[o];
                for (xv, wv) in xrow.iter().zip(wrow) {
                    acc += xv * wv;
                }
                *out_v = acc;
            }
        }
    }
    let out = Tensor::from_vec(v, &[bsz, kout])?;
    debug_check_finite("linear", &out);

    let (ti, tw, tb, to) = (input.clone(), weight.clone(), bias.clone(), out.clone());
    attach(&out, move || {
        let Some(g) = out_grad(&to) else { return };
        let x = ti.data().clone();
        let w = tw.data().clone();
        if tb.needs_grad() {
            let mut db = vec![0.0; kout];
            for b in 0..bsz {
                for (o, d) in db.iter_mut().enumerate() {
                    *d += g[b * kout + o];
                }
            }
            tb.accumulate_grad(&db);
        }
        if tw.needs_grad() {
            let mut dw = vec![0.0; kout * kin];
            for b in 0..bsz {
                let xrow = &x[b * kin..(b + 1) * kin];
                let grow = &g[b * kout..(b + 1) * kout];
                for (o, gv) in grow.iter().enumerate() {
                    let dwrow = &mut dw[o * kin..(o + 1) * kin];
                    for (d, xv) in dwrow.iter_mut().zip(xrow) {
                        *d += gv * xv;
                    }
                }
            }
            tw.accumulate_grad(&dw);
        }
        if ti.needs_grad() {
            let mut dx = vec![0.0; bsz * kin];
            for b in 0..bsz {
                let grow = &g[b * kout..(b + 1) * kout];
                let dxrow = &mut dx[b * kin..(b + 1) * kin];
                for (o, gv) in grow.iter().enumerate() {
                    let wrow = &w[o * kin..(o + 1) * kin];
                    for (d, wv) in dxrow.iter_mut().zip(wrow) {
                        *d += gv * wv;
                    }
                }
            }
            ti.accumulate_grad(&dx);
        }
    });
    Ok(out)
}

/// Mean over the batch of `-log softmax(logits)[label]`, stabilized by
/// max-subtraction.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let s = logits.shape();
    if s.len() != 2 {
        return Err(Error::ShapeMismatch {
            op: "softmax_cross_entropy",
            detail: format!("logits must be rank 2 [B, C], got {s:?}"),
        });
    }
    let (bsz, classes) = (s[0], s[1]);
    if bsz == 0 {
        return Err(Error::EmptyInput("softmax_cross_entropy batch"));
    }
    if labels.len() != bsz {
        return Err(Error::ShapeMismatch {
            op: "softmax_cross_entropy",
            detail: format!("batch {bsz} != labels {}", labels.len()),
        });
    }
    for &label in labels {
        if label >= classes {
            return Err(Error::LabelOutOfRange { label, classes });
        }
    }

    let mut probs = vec![0.0; bsz * classes];
    let mut total = 0.0;
    {
        let z = logits.data();
        for b in 0..bsz {
            let row = &z[b * classes..(b + 1) * classes];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let sum_exp: f64 = row.iter().map(|v| (v - m).exp()).sum();
            let lse = m + sum_exp.ln();
            total += lse - row[labels[b]];
            let prow = &mut probs[b * classes..(b + 1) * classes];
            for (p, v) in prow.iter_mut().zip(row) {
                *p = (v - lse).exp();
            }
        }
    }
    let out = Tensor::scalar(total / bsz as f64);
    debug_check_finite("softmax_cross_entropy", &out);

    let (ti, to) = (logits.clone(), out.clone());
    let labels = labels.to_vec();
    attach(&out, move || {
        let Some(g) = out_grad(&to) else { return };
        let scale = g[0] / bsz as f64;
        let mut dz = probs.clone();
        for (b, &label) in labels.iter().enumerate() {
            dz[b * classes + label] -= 1.0;
        }
        for d in dz.iter_mut() {
            *d *= scale;
        }
        ti.accumulate_grad(&dz);
    });
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;

    fn t(data: &[f64], shape: &[usize]) -> Tensor {
        Tensor::from_vec(data.to_vec(), shape).unwrap()
    }

    #[test]
    fn conv1d_identity_kernel() {
        let x = t(&[1.0, 2.0, 3.0, 4.0], &[1, 1, 4]);
        let w = t(&[1.0], &[1, 1, 1]);
        let b = t(&[0.0], &[1]);
        let y = conv1d(&x, &w, &b, 1).unwrap();
        assert_eq!(y.shape(), &[1, 1, 4]);
        assert_eq!(y.to_vec(), vec![1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn conv1d_sliding_window() {
        let x = t(&[1.0, 2.0, 3.0, 4.0], &[1, 1, 4]);
        let w = t(&[1.0, 1.0], &[1, 1, 2]);
        let b = t(&[0.0], &[1]);
        let y = conv1d(&x, &w, &b, 1).unwrap();
        assert_eq!(y.to_vec(), vec![3.0, 5.0, 7.0]);
    }

    #[test]
    fn conv1d_stride_and_bias() {
        let x = t(&[1.0, 2.0, 3.0, 4.0, 5.0], &[1, 1, 5]);
        let w = t(&[1.0, 1.0], &[1, 1, 2]);
        let b = t(&[1.0], &[1]);
        let y = conv1d(&x, &w, &b, 2).unwrap();
        assert_eq!(y.to_vec(), vec![4.0, 8.0]);
    }

    #[test]
    fn conv1d_shape_errors_name_dimension() {
        let x = t(&[1.0, 2.0], &[1, 1, 2]);
        let w = t(&[1.0, 1.0], &[1, 2, 1]);
        let b = t(&[0.0], &[1]);
        let err = conv1d(&x, &w, &b, 1).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("channels 1") && msg.contains("K_in 2"), "{msg}");

        let x = t(&[1.0], &[1, 1, 1]);
        let w = t(&[1.0, 1.0], &[1, 1, 2]);
        let err = conv1d(&x, &w, &b, 1).unwrap_err();
        assert!(err.to_string().contains("shorter than kernel"), "{err}");
    }

    #[test]
    fn batch_norm_identity_on_standardized_input() {
        // zero-mean unit-variance per channel stays (nearly) put
        let vals = [-1.2247448713915892, 0.0, 1.2247448713915892]; // std = 1
        let x = t(&vals, &[1, 1, 3]);
        let gamma = t(&[1.0], &[1]);
        let beta = t(&[0.0], &[1]);
        let rm = Tensor::zeros(&[1]);
        let rv = Tensor::full(&[1], 1.0);
        let y = batch_norm1d(&x, &gamma, &beta, &rm, &rv, BatchNormMode::Train, 0.1, 1e-5).unwrap();
        for (yo, xo) in y.to_vec().iter().zip(&vals) {
            assert!((yo - xo).abs() < 1e-5, "{yo} vs {xo}");
        }
    }

    #[test]
    fn batch_norm_zero_gamma_gives_beta() {
        let x = t(&[5.0, -2.0, 0.5, 9.0], &[2, 1, 2]);
        let gamma = t(&[0.0], &[1]);
        let beta = t(&[3.5], &[1]);
        let rm = Tensor::zeros(&[1]);
        let rv = Tensor::full(&[1], 1.0);
        let y = batch_norm1d(&x, &gamma, &beta, &rm, &rv, BatchNormMode::Train, 0.1, 1e-5).unwrap();
        for v in y.to_vec() {
            assert_eq!(v, 3.5);
        }
    }

    #[test]
    fn batch_norm_hand_computed() {
        let eps = 1e-5;
        let x = t(&[1.0, 2.0, 3.0], &[1, 1, 3]);
        let gamma = t(&[2.0], &[1]);
        let beta = t(&[1.0], &[1]);
        let rm = Tensor::zeros(&[1]);
        let rv = Tensor::full(&[1], 1.0);
        let y = batch_norm1d(&x, &gamma, &beta, &rm, &rv, BatchNormMode::Train, 0.1, eps).unwrap();
        let std = (2.0f64 / 3.0 + eps).sqrt(); // population std of (1,2,3)
        for (yo, xo) in y.to_vec().iter().zip([1.0, 2.0, 3.0]) {
            let expect = 2.0 * (xo - 2.0) / std + 1.0;
            assert!((yo - expect).abs() < 1e-12);
        }
        // running stats moved toward the minibatch stats
        assert!((rm.to_vec()[0] - 0.2).abs() < 1e-12);
        assert!((rv.to_vec()[0] - (0.9 + 0.1 * (2.0 / 3.0))).abs() < 1e-12);
    }

    #[test]
    fn batch_norm_frozen_leaves_running_stats() {
        let x = t(&[1.0, 2.0, 3.0], &[1, 1, 3]);
        let gamma = t(&[1.0], &[1]);
        let beta = t(&[0.0], &[1]);
        let rm = Tensor::zeros(&[1]);
        let rv = Tensor::full(&[1], 1.0);
        batch_norm1d(&x, &gamma, &beta, &rm, &rv, BatchNormMode::TrainFrozen, 0.1, 1e-5).unwrap();
        assert_eq!(rm.to_vec(), vec![0.0]);
        assert_eq!(rv.to_vec(), vec![1.0]);
    }

    #[test]
    fn batch_norm_degenerate_batch() {
        let x = t(&[1.0], &[1, 1, 1]);
        let gamma = t(&[1.0], &[1]);
        let beta = t(&[0.0], &[1]);
        let rm = Tensor::zeros(&[1]);
        let rv = Tensor::full(&[1], 1.0);
        let err =
            batch_norm1d(&x, &gamma, &beta, &rm, &rv, BatchNormMode::Train, 0.1, 1e-5).unwrap_err();
        assert!(matches!(err, Error::DegenerateBatch { elements_per_channel: 1 }));
    }

    #[test]
    fn linear_identity() {
        let x = t(&[3.0, -1.0], &[1, 2]);
        let w = t(&[1.0, 0.0, 0.0, 1.0], &[2, 2]);
        let b = t(&[0.0, 0.0], &[2]);
        let y = linear(&x, &w, &b).unwrap();
        assert_eq!(y.to_vec(), vec![3.0, -1.0]);
    }

    #[test]
    fn linear_hand_computed() {
        let x = t(&[1.0, 2.0], &[1, 2]);
        let w = t(&[1.0, 1.0, 0.0, 1.0], &[2, 2]);
        let b = t(&[1.0, 0.0], &[2]);
        let y = linear(&x, &w, &b).unwrap();
        assert_eq!(y.to_vec(), vec![4.0, 2.0]);
    }

    #[test]
    fn linear_empty_batch_passthrough() {
        let x = Tensor::zeros(&[0, 3]);
        let w = Tensor::zeros(&[5, 3]);
        let b = Tensor::zeros(&[5]);
        let y = linear(&x, &w, &b).unwrap();
        assert_eq!(y.shape(), &[0, 5]);
        assert_eq!(y.numel(), 0);
    }

    #[test]
    fn linear_inner_dim_mismatch() {
        let x = Tensor::zeros(&[1, 3]);
        let w = Tensor::zeros(&[5, 4]);
        let b = Tensor::zeros(&[5]);
        assert!(linear(&x, &w, &b).is_err());
    }

    #[test]
    fn cross_entropy_uniform_is_ln_c() {
        let z = Tensor::zeros(&[2, 5]);
        let loss = softmax_cross_entropy(&z, &[0, 3]).unwrap();
        assert!((loss.item() - 5.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_large_logit_no_overflow() {
        let z = t(&[1000.0, 0.0], &[1, 2]);
        let loss = softmax_cross_entropy(&z, &[0]).unwrap();
        assert!(loss.item().is_finite());
        assert!(loss.item() < 1e-12);
    }

    #[test]
    fn cross_entropy_hand_computed() {
        // -log softmax((1,2))[1] = ln(1 + e^{-1}) ~ 0.3133
        let z = t(&[1.0, 2.0], &[1, 2]);
        let loss = softmax_cross_entropy(&z, &[1]).unwrap();
        assert!((loss.item() - (1.0 + (-1.0f64).exp()).ln()).abs() < 1e-12);
        // and [0] pays the full gap: ln(1 + e)
        let loss0 = softmax_cross_entropy(&z, &[0]).unwrap();
        assert!((loss0.item() - (1.0 + 1.0f64.exp()).ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_label_out_of_range() {
        let z = Tensor::zeros(&[1, 3]);
        assert!(matches!(
            softmax_cross_entropy(&z, &[3]),
            Err(Error::LabelOutOfRange { label: 3, classes: 3 })
        ));
    }

    #[test]
    fn relu_and_sign_conventions() {
        let x = t(&[-1.0, 0.0, 2.0], &[3]);
        assert_eq!(x.relu().to_vec(), vec![0.0, 0.0, 2.0]);
        let y = t(&[-3.0, 0.0, 5.0], &[3]);
        assert_eq!(y.sign().to_vec(), vec![-1.0, 0.0, 1.0]);
    }

    #[test]
    fn frobenius_sq_hand_computed() {
        let m = t(&[1.0, 2.0, 3.0, 4.0], &[2, 2]);
        assert_eq!(m.frobenius_sq().item(), 30.0);
    }

    #[test]
    fn clamp_boundary_gradient_is_zero() {
        let x = t(&[-2.0, 0.5, 1.0, 3.0], &[4]).tracked();
        let loss = Tape::scope(|| x.clamp(0.0, 1.0).sum());
        loss.backward().unwrap();
        // -2 clamped, 0.5 inside, 1.0 exactly at boundary, 3 clamped
        assert_eq!(x.grad().unwrap(), vec![0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn broadcast_scalar_only() {
        let a = t(&[1.0, 2.0], &[2]);
        let s = Tensor::scalar(3.0);
        assert_eq!(a.add(&s).unwrap().to_vec(), vec![4.0, 5.0]);
        assert_eq!(s.sub(&a).unwrap().to_vec(), vec![2.0, 1.0]);
        let b = t(&[1.0, 2.0, 3.0], &[3]);
        assert!(a.add(&b).is_err());
    }

    #[test]
    fn matmul_and_transpose() {
        let a = t(&[1.0, 2.0, 3.0, 4.0], &[2, 2]);
        let b = t(&[0.0, 1.0, 1.0, 0.0], &[2, 2]);
        assert_eq!(a.matmul2d(&b).unwrap().to_vec(), vec![2.0, 1.0, 4.0, 3.0]);
        assert_eq!(a.transpose2d().unwrap().to_vec(), vec![1.0, 3.0, 2.0, 4.0]);
    }

    #[test]
    fn running_stats_not_recorded_on_tape() {
        // an eval forward inside a tape scope must not leak gradients into
        // running statistics
        let x = t(&[1.0, 2.0, 3.0, 4.0], &[2, 1, 2]).tracked();
        let gamma = t(&[1.5], &[1]).tracked();
        let beta = t(&[0.5], &[1]).tracked();
        let rm = t(&[1.0], &[1]);
        let rv = t(&[2.0], &[1]);
        let loss = Tape::scope(|| {
            batch_norm1d(&x, &gamma, &beta, &rm, &rv, BatchNormMode::Eval, 0.1, 1e-5)
                .unwrap()
                .sum()
        });
        loss.backward().unwrap();
        assert!(rm.grad().is_none());
        assert!(rv.grad().is_none());
        assert!(gamma.grad().is_some());
        assert!(x.grad().is_some());
    }
}
