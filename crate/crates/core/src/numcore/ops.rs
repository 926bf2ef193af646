//! Layer primitives over `[H, W, C]` tensors and their adjoints.

use crate::error::{Error, Result};
use crate::numcore::{Rng, Scalar, Tensor};

fn kernel_dims<T: Scalar>(kernels: &Tensor<T>) -> Result<(usize, usize, usize)> {
    match *kernels.shape() {
        [k, k2, cin, cout] if k == k2 => Ok((k, cin, cout)),
        ref s => Err(Error::dim(format!(
            "kernels must be [k, k, Cin, Cout], got {s:?}"
        ))),
    }
}

/// Valid (unpadded) 2-D cross-correlation: `[H, W, Cin] * [k, k, Cin, Cout] -> [H-k+1, W-k+1, Cout]`.
///
/// Sums are accumulated in `f64`.
pub fn conv2d_valid<T: Scalar>(
    input: &Tensor<T>,
    kernels: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (h, w, cin) = input.hwc()?;
    let (k, kcin, cout) = kernel_dims(kernels)?;
    if kcin != cin {
        return Err(Error::dim(format!(
            "input has {cin} channels, kernels expect {kcin}"
        )));
    }
    bias.expect_shape(&[cout])?;
    if h < k || w < k {
        return Err(Error::dim(format!("input {h}x{w} smaller than kernel {k}")));
    }
    let (oh, ow) = (h - k + 1, w - k + 1);
    let x = input.data();
    let kd: Vec<f64> = kernels.data().iter().map(|v| v.f64()).collect();
    let bd: Vec<f64> = bias.data().iter().map(|v| v.f64()).collect();
    let mut out = Vec::with_capacity(oh * ow * cout);
    let mut acc = vec![0f64; cout];
    for i in 0..oh {
        for j in 0..ow {
            acc.copy_from_slice(&bd);
            for a in 0..k {
                for b in 0..k {
                    let xb = ((i + a) * w + j + b) * cin;
                    let kb = (a * k + b) * cin * cout;
                    for c in 0..cin {
                        let v = x[xb + c].f64();
                        if v == 0.0 {
                            continue;
                        }
                        let row = &kd[kb + c * cout..kb + (c + 1) * cout];
                        for (s, &kv) in acc.iter_mut().zip(row) {
                            *s += v * kv;
                        }
                    }
                }
            }
            out.extend(acc.iter().map(|&s| T::of(s)));
        }
    }
    Tensor::new(vec![oh, ow, cout], out)
}

/// Transposed convolution, the adjoint of [`conv2d_valid`] (without bias):
/// `[H, W, Cout] -> [H+k-1, W+k-1, Cin]`.
pub fn deconv2d<T: Scalar>(input: &Tensor<T>, kernels: &Tensor<T>) -> Result<Tensor<T>> {
    let (h, w, cout) = input.hwc()?;
    let (k, cin, kcout) = kernel_dims(kernels)?;
    if kcout != cout {
        return Err(Error::dim(format!(
            "input has {cout} channels, kernels expect {kcout}"
        )));
    }
    let (oh, ow) = (h + k - 1, w + k - 1);
    let x = input.data();
    let kd: Vec<f64> = kernels.data().iter().map(|v| v.f64()).collect();
    let mut acc = vec![0f64; oh * ow * cin];
    let mut xv = vec![0f64; cout];
    for i in 0..h {
        for j in 0..w {
            let xb = (i * w + j) * cout;
            let mut any = false;
            for (d, s) in xv.iter_mut().zip(&x[xb..xb + cout]) {
                *d = s.f64();
                any |= *d != 0.0;
            }
            if !any {
                continue;
            }
            for a in 0..k {
                for b in 0..k {
                    let ob = ((i + a) * ow + j + b) * cin;
                    let kb = (a * k + b) * cin * cout;
                    for c in 0..cin {
                        let row = &kd[kb + c * cout..kb + (c + 1) * cout];
                        let s: f64 = row.iter().zip(&xv).map(|(p, q)| p * q).sum();
                        acc[ob + c] += s;
                    }
                }
            }
        }
    }
    Tensor::new(vec![oh, ow, cin], acc.into_iter().map(T::of).collect())
}

/// Kernel gradient of `conv2d_valid(input, K)` given the output gradient.
/// Accumulates into `dk` (`f64`, same layout as the kernels).
pub(crate) fn conv2d_kernel_grad<T: Scalar>(
    input: &Tensor<T>,
    grad_out: &Tensor<T>,
    k: usize,
    dk: &mut [f64],
    db: &mut [f64],
) -> Result<()> {
    let (h, w, cin) = input.hwc()?;
    let (oh, ow, cout) = grad_out.hwc()?;
    if oh + k - 1 != h || ow + k - 1 != w || dk.len() != k * k * cin * cout || db.len() != cout {
        return Err(Error::dim("conv2d gradient geometry mismatch"));
    }
    let x = input.data();
    let g = grad_out.data();
    let mut gv = vec![0f64; cout];
    for i in 0..oh {
        for j in 0..ow {
            let gb = (i * ow + j) * cout;
            for (d, s) in gv.iter_mut().zip(&g[gb..gb + cout]) {
                *d = s.f64();
            }
            for (d, s) in db.iter_mut().zip(&gv) {
                *d += s;
            }
            for a in 0..k {
                for b in 0..k {
                    let xb = ((i + a) * w + j + b) * cin;
                    let kb = (a * k + b) * cin * cout;
                    for c in 0..cin {
                        let v = x[xb + c].f64();
                        if v == 0.0 {
                            continue;
                        }
                        let row = &mut dk[kb + c * cout..kb + (c + 1) * cout];
                        for (r, &s) in row.iter_mut().zip(&gv) {
                            *r += v * s;
                        }
                    }
                }
            }
        }
    }
    Ok(())
}

/// Kernel gradient of `deconv2d(input, K)` given the output gradient.
pub(crate) fn deconv2d_kernel_grad<T: Scalar>(
    input: &Tensor<T>,
    grad_out: &Tensor<T>,
    k: usize,
    dk: &mut [f64],
) -> Result<()> {
    let (h, w, cout) = input.hwc()?;
    let (oh, ow, cin) = grad_out.hwc()?;
    if h + k - 1 != oh || w + k - 1 != ow || dk.len() != k * k * cin * cout {
        return Err(Error::dim("deconv2d gradient geometry mismatch"));
    }
    let x = input.data();
    let g = grad_out.data();
    let mut xv = vec![0f64; cout];
    for i in 0..h {
        for j in 0..w {
            let xb = (i * w + j) * cout;
            let mut any = false;
            for (d, s) in xv.iter_mut().zip(&x[xb..xb + cout]) {
                *d = s.f64();
                any |= *d != 0.0;
            }
            if !any {
                continue;
            }
            for a in 0..k {
                for b in 0..k {
                    let gb = ((i + a) * ow + j + b) * cin;
                    let kb = (a * k + b) * cin * cout;
                    for c in 0..cin {
                        let gval = g[gb + c].f64();
                        let row = &mut dk[kb + c * cout..kb + (c + 1) * cout];
                        for (r, &v) in row.iter_mut().zip(&xv) {
                            *r += gval * v;
                        }
                    }
                }
            }
        }
    }
    Ok(())
}

/// Argmax positions recorded by [`maxpool`], one window-local index
/// (`row * p + col`) per pooled element.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Switches {
    pub in_shape: [usize; 3],
    pub pool: usize,
    pub index: Vec<u32>,
}

impl Switches {
    fn out_shape(&self) -> [usize; 3] {
        let [h, w, c] = self.in_shape;
        [h / self.pool, w / self.pool, c]
    }

    /// Flat input offset of the recorded maximum for pooled element `(i, j, c)`.
    #[inline]
    fn source(&self, i: usize, j: usize, c: usize) -> usize {
        let [_, w, ch] = self.in_shape;
        let [_, ow, _] = self.out_shape();
        let s = self.index[(i * ow + j) * ch + c] as usize;
        let (a, b) = (s / self.pool, s % self.pool);
        ((i * self.pool + a) * w + j * self.pool + b) * ch + c
    }
}

/// Non-overlapping `p x p` max pooling. Trailing rows/columns that do not fill a
/// window are dropped; ties go to the lowest window-local index.
pub fn maxpool<T: Scalar>(input: &Tensor<T>, p: usize) -> Result<(Tensor<T>, Switches)> {
    if p < 1 {
        return Err(Error::param("pool size must be >= 1"));
    }
    let (h, w, c) = input.hwc()?;
    if h < p || w < p {
        return Err(Error::dim(format!("input {h}x{w} smaller than pool {p}")));
    }
    let (oh, ow) = (h / p, w / p);
    let x = input.data();
    let mut out = Vec::with_capacity(oh * ow * c);
    let mut index = Vec::with_capacity(oh * ow * c);
    for i in 0..oh {
        for j in 0..ow {
            for ch in 0..c {
                let mut best = x[((i * p) * w + j * p) * c + ch];
                let mut arg = 0u32;
                for a in 0..p {
                    for b in 0..p {
                        let v = x[((i * p + a) * w + j * p + b) * c + ch];
                        if v > best {
                            best = v;
                            arg = (a * p + b) as u32;
                        }
                    }
                }
                out.push(best);
                index.push(arg);
            }
        }
    }
    Ok((
        Tensor::new(vec![oh, ow, c], out)?,
        Switches {
            in_shape: [h, w, c],
            pool: p,
            index,
        },
    ))
}

/// Places each pooled value back at its recorded argmax; every other element is zero.
pub fn unpool<T: Scalar>(
    input: &Tensor<T>,
    switches: &Switches,
    out_shape: &[usize],
) -> Result<Tensor<T>> {
    if out_shape != switches.in_shape {
        return Err(Error::dim(format!(
            "unpool target {out_shape:?} does not match pooled geometry {:?}",
            switches.in_shape
        )));
    }
    input.expect_shape(&switches.out_shape())?;
    let [oh, ow, c] = switches.out_shape();
    let mut out = Tensor::zeros(out_shape);
    let x = input.data();
    let y = out.data_mut();
    for i in 0..oh {
        for j in 0..ow {
            for ch in 0..c {
                y[switches.source(i, j, ch)] = x[(i * ow + j) * c + ch];
            }
        }
    }
    Ok(out)
}

/// Adjoint of [`unpool`]: reads the gradient at each recorded argmax.
pub(crate) fn unpool_backward<T: Scalar>(grad_out: &Tensor<T>, switches: &Switches) -> Result<Tensor<T>> {
    grad_out.expect_shape(&switches.in_shape)?;
    let [oh, ow, c] = switches.out_shape();
    let g = grad_out.data();
    let mut out = Vec::with_capacity(oh * ow * c);
    for i in 0..oh {
        for j in 0..ow {
            for ch in 0..c {
                out.push(g[switches.source(i, j, ch)]);
            }
        }
    }
    Tensor::new(vec![oh, ow, c], out)
}

#[inline]
pub fn elu_scalar<T: Scalar>(v: T, alpha: T) -> T {
    if v > T::zero() {
        v
    } else {
        alpha * (v.exp() - T::one())
    }
}

#[inline]
pub fn elu_derivative<T: Scalar>(v: T, alpha: T) -> T {
    if v > T::zero() {
        T::one()
    } else {
        alpha * v.exp()
    }
}

/// Exponential linear unit, elementwise.
pub fn elu<T: Scalar>(x: &Tensor<T>, alpha: T) -> Tensor<T> {
    x.map(|v| elu_scalar(v, alpha))
}

/// Inverted dropout. Returns the per-element scale mask (`0` or `1/(1-rate)`)
/// when training; inference is the identity and returns no mask.
pub fn dropout<T: Scalar>(
    x: &Tensor<T>,
    rate: f64,
    rng: &mut Rng,
    training: bool,
) -> Result<(Tensor<T>, Option<Vec<T>>)> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::param(format!("dropout rate {rate} outside [0, 1)")));
    }
    if !training || rate == 0.0 {
        return Ok((x.clone(), None));
    }
    let keep = T::of(1.0 / (1.0 - rate));
    let mask: Vec<T> = (0..x.len())
        .map(|_| if rng.bernoulli(rate) { T::zero() } else { keep })
        .collect();
    let mut y = x.clone();
    for (v, &m) in y.data_mut().iter_mut().zip(&mask) {
        *v *= m;
    }
    Ok((y, Some(mask)))
}

/// Mean squared error `(1/N) sum (x - xhat)^2`.
pub fn mse<T: Scalar>(x: &Tensor<T>, xhat: &Tensor<T>) -> Result<f64> {
    xhat.expect_shape(x.shape())?;
    let n = x.len() as f64;
    Ok(x
        .data()
        .iter()
        .zip(xhat.data())
        .map(|(a, b)| {
            let d = a.f64() - b.f64();
            d * d
        })
        .sum::<f64>()
        / n)
}

/// Gradient of [`mse`] with respect to `xhat`: `2 (xhat - x) / N`.
pub fn mse_grad<T: Scalar>(x: &Tensor<T>, xhat: &Tensor<T>) -> Result<Tensor<T>> {
    xhat.expect_shape(x.shape())?;
    let s = T::of(2.0 / x.len() as f64);
    let data = x
        .data()
        .iter()
        .zip(xhat.data())
        .map(|(&a, &b)| s * (b - a))
        .collect();
    Tensor::new(x.shape().to_vec(), data)
}
