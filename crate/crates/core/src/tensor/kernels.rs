//! Forward and backward kernels on NHWC tensors.
//!
//! These are plain functions over [`Tensor`]s; the graph in `graph.rs` records
//! which of them ran and calls the matching backward kernel.

use crate::error::{Error, Result};

use super::{gemm, parallel, Scalar, Tensor};

pub const BN_EPSILON: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    /// Zero padding of `k / 2` on every side (odd kernels only).
    Same,
    Valid,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    n: usize,
    h: usize,
    w: usize,
    cin: usize,
    k: usize,
    cout: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    pub(crate) fn new<T: Scalar>(
        input: &Tensor<T>,
        kernel: &Tensor<T>,
        stride: usize,
        padding: Padding,
    ) -> Result<Self> {
        let [n, h, w, cin] = input.nhwc("conv2d")?;
        let [kh, kw, kcin, cout] = match *kernel.shape() {
            [a, b, c, d] => [a, b, c, d],
            _ => {
                return Err(Error::shape(
                    "conv2d",
                    format!(
                        "kernel must be k x k x Cin x Cout, got {:?}",
                        kernel.shape()
                    ),
                ))
            }
        };
        if kh != kw || kh == 0 {
            return Err(Error::shape(
                "conv2d",
                "kernel must be square and non-empty",
            ));
        }
        if kcin != cin {
            return Err(Error::shape(
                "conv2d",
                format!("input has {cin} channels but kernel expects {kcin}"),
            ));
        }
        if stride == 0 {
            return Err(Error::shape("conv2d", "stride must be at least 1"));
        }
        let k = kh;
        let pad = match padding {
            Padding::Valid => 0,
            Padding::Same => {
                if k % 2 == 0 {
                    return Err(Error::shape("conv2d", "same padding needs an odd kernel"));
                }
                k / 2
            }
        };
        if h + 2 * pad < k || w + 2 * pad < k {
            return Err(Error::shape(
                "conv2d",
                format!("input {h}x{w} smaller than kernel {k}x{k} after padding"),
            ));
        }
        Ok(ConvGeom {
            n,
            h,
            w,
            cin,
            k,
            cout,
            stride,
            pad,
            ho: (h + 2 * pad - k) / stride + 1,
            wo: (w + 2 * pad - k) / stride + 1,
        })
    }

    fn pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    fn rows(&self) -> usize {
        self.ho * self.wo
    }

    fn patch(&self) -> usize {
        self.k * self.k * self.cin
    }

    fn in_image(&self) -> usize {
        self.h * self.w * self.cin
    }

    fn out_image(&self) -> usize {
        self.rows() * self.cout
    }

    /// Output pixels per lowered tile, sized so one tile of the patch matrix
    /// stays around a megabyte.
    fn tile_rows(&self) -> usize {
        (TILE_ELEMS / self.patch())
            .max(MIN_TILE_ROWS)
            .min(self.rows())
            .max(1)
    }

    /// Lowers output pixels `p0..p1` of one HWC image into a
    /// `(p1 - p0) x patch` matrix.
    fn im2col<T: Scalar>(&self, img: &[T], p0: usize, p1: usize, col: &mut [T]) {
        let (k, cin, patch) = (self.k, self.cin, self.patch());
        for p in p0..p1 {
            let (oy, ox) = (p / self.wo, p % self.wo);
            let row = &mut col[(p - p0) * patch..][..patch];
            for ky in 0..k {
                let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                if iy < 0 || iy >= self.h as isize {
                    row[ky * k * cin..(ky + 1) * k * cin].fill(T::zero());
                    continue;
                }
                let ix0 = (ox * self.stride) as isize - self.pad as isize;
                if ix0 >= 0 && ix0 + k as isize <= self.w as isize {
                    // the whole kernel row is inside: one contiguous copy
                    let src = (iy as usize * self.w + ix0 as usize) * cin;
                    row[ky * k * cin..(ky + 1) * k * cin].copy_from_slice(&img[src..src + k * cin]);
                    continue;
                }
                for kx in 0..k {
                    let ix = ix0 + kx as isize;
                    let dst = &mut row[(ky * k + kx) * cin..][..cin];
                    if ix < 0 || ix >= self.w as isize {
                        dst.fill(T::zero());
                    } else {
                        let src = (iy as usize * self.w + ix as usize) * cin;
                        dst.copy_from_slice(&img[src..src + cin]);
                    }
                }
            }
        }
    }

    /// Scatter-adds the patch rows of output pixels `p0..p1` back onto one
    /// HWC image.
    fn col2im<T: Scalar>(&self, col: &[T], p0: usize, p1: usize, img: &mut [T]) {
        let (k, cin, patch) = (self.k, self.cin, self.patch());
        for p in p0..p1 {
            let (oy, ox) = (p / self.wo, p % self.wo);
            let row = &col[(p - p0) * patch..][..patch];
            for ky in 0..k {
                let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                if iy < 0 || iy >= self.h as isize {
                    continue;
                }
                for kx in 0..k {
                    let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                    if ix < 0 || ix >= self.w as isize {
                        continue;
                    }
                    let dst = (iy as usize * self.w + ix as usize) * cin;
                    let src = &row[(ky * k + kx) * cin..][..cin];
                    for (d, &s) in img[dst..dst + cin].iter_mut().zip(src) {
                        *d = *d + s;
                    }
                }
            }
        }
    }
}

const TILE_ELEMS: usize = 1 << 18;
const MIN_TILE_ROWS: usize = 512;

/// Cross-correlation of an NHWC batch with a `k x k x Cin x Cout` kernel.
pub fn conv2d<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    padding: Padding,
) -> Result<Tensor<T>> {
    let g = ConvGeom::new(input, kernel, stride, padding)?;
    if let Some(b) = bias {
        if b.len() != g.cout {
            return Err(Error::shape(
                "conv2d",
                format!("bias has {} values, expected {}", b.len(), g.cout),
            ));
        }
    }
    let mut out = Tensor::zeros(&[g.n, g.ho, g.wo, g.cout]);
    let src = input.data();
    let kdata = kernel.data();
    parallel::for_each_chunk(out.data_mut(), g.out_image(), |i, dst| {
        let img = &src[i * g.in_image()..][..g.in_image()];
        if g.pointwise() {
            gemm(
                g.rows(),
                g.patch(),
                g.cout,
                img,
                false,
                kdata,
                false,
                dst,
                T::zero(),
            );
        } else {
            let tile = g.tile_rows();
            let mut col = vec![T::zero(); tile * g.patch()];
            for p0 in (0..g.rows()).step_by(tile) {
                let p1 = (p0 + tile).min(g.rows());
                let col = &mut col[..(p1 - p0) * g.patch()];
                g.im2col(img, p0, p1, col);
                let out = &mut dst[p0 * g.cout..p1 * g.cout];
                gemm(
                    p1 - p0,
                    g.patch(),
                    g.cout,
                    col,
                    false,
                    kdata,
                    false,
                    out,
                    T::zero(),
                );
            }
        }
        if let Some(b) = bias {
            for row in dst.chunks_mut(g.cout) {
                for (v, &bv) in row.iter_mut().zip(b.data()) {
                    *v = *v + bv;
                }
            }
        }
    });
    Ok(out)
}

pub(crate) struct ConvGrads<T> {
    pub input: Option<Tensor<T>>,
    pub kernel: Option<Tensor<T>>,
    pub bias: Option<Tensor<T>>,
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    grad_out: &Tensor<T>,
    stride: usize,
    padding: Padding,
    want_input: bool,
    want_kernel: bool,
    want_bias: bool,
) -> Result<ConvGrads<T>> {
    let g = ConvGeom::new(input, kernel, stride, padding)?;
    let src = input.data();
    let kdata = kernel.data();
    let dy = grad_out.data();

    let mut dx = want_input.then(|| Tensor::zeros(input.shape()));
    if let Some(dx) = dx.as_mut() {
        parallel::for_each_chunk(dx.data_mut(), g.in_image(), |i, dst| {
            let dyi = &dy[i * g.out_image()..][..g.out_image()];
            if g.pointwise() {
                gemm(
                    g.rows(),
                    g.cout,
                    g.patch(),
                    dyi,
                    false,
                    kdata,
                    true,
                    dst,
                    T::zero(),
                );
            } else {
                let tile = g.tile_rows();
                let mut dcol = vec![T::zero(); tile * g.patch()];
                for p0 in (0..g.rows()).step_by(tile) {
                    let p1 = (p0 + tile).min(g.rows());
                    let dcol = &mut dcol[..(p1 - p0) * g.patch()];
                    let dyt = &dyi[p0 * g.cout..p1 * g.cout];
                    gemm(
                        p1 - p0,
                        g.cout,
                        g.patch(),
                        dyt,
                        false,
                        kdata,
                        true,
                        dcol,
                        T::zero(),
                    );
                    g.col2im(dcol, p0, p1, dst);
                }
            }
        });
    }

    let dk = if want_kernel {
        let kernel_grad = |i: usize, part: &mut [T]| {
            let img = &src[i * g.in_image()..][..g.in_image()];
            let dyi = &dy[i * g.out_image()..][..g.out_image()];
            if g.pointwise() {
                gemm(
                    g.patch(),
                    g.rows(),
                    g.cout,
                    img,
                    true,
                    dyi,
                    false,
                    part,
                    T::one(),
                );
            } else {
                let tile = g.tile_rows();
                let mut col = vec![T::zero(); tile * g.patch()];
                for p0 in (0..g.rows()).step_by(tile) {
                    let p1 = (p0 + tile).min(g.rows());
                    let col = &mut col[..(p1 - p0) * g.patch()];
                    g.im2col(img, p0, p1, col);
                    let dyt = dy_rows(dyi, p0, p1, g.cout);
                    gemm(
                        g.patch(),
                        p1 - p0,
                        g.cout,
                        col,
                        true,
                        dyt,
                        false,
                        part,
                        T::one(),
                    );
                }
            }
        };
        let mut acc = vec![T::zero(); g.patch() * g.cout];
        if parallel::threads() > 1 && g.n > 1 {
            // Per-image partials folded in image order.
            let partials = parallel::map_range(g.n, |i| {
                let mut part = vec![T::zero(); g.patch() * g.cout];
                kernel_grad(i, &mut part);
                part
            });
            for part in partials {
                for (a, p) in acc.iter_mut().zip(part) {
                    *a = *a + p;
                }
            }
        } else {
            for i in 0..g.n {
                kernel_grad(i, &mut acc);
            }
        }
        Some(Tensor::new(kernel.shape(), acc)?)
    } else {
        None
    };

    let db = want_bias.then(|| {
        let mut acc = vec![T::zero(); g.cout];
        for row in dy.chunks(g.cout) {
            for (a, &v) in acc.iter_mut().zip(row) {
                *a = *a + v;
            }
        }
        Tensor::new(&[g.cout], acc).expect("bias shape")
    });

    Ok(ConvGrads {
        input: dx,
        kernel: dk,
        bias: db,
    })
}

fn dy_rows<T>(dy: &[T], p0: usize, p1: usize, cout: usize) -> &[T] {
    &dy[p0 * cout..p1 * cout]
}

/// 2x2 window, stride 2. Returns the pooled tensor and, per output element,
/// the position (0..4, row-major) of the winning input inside its window.
pub fn maxpool2<T: Scalar>(input: &Tensor<T>) -> Result<(Tensor<T>, Vec<u8>)> {
    let [n, h, w, c] = input.nhwc("maxpool2")?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::shape(
            "maxpool2",
            format!("spatial extents must be even, got {h}x{w}"),
        ));
    }
    let (ho, wo) = (h / 2, w / 2);
    let src = input.data();
    let mut out = Vec::with_capacity(n * ho * wo * c);
    let mut arg = Vec::with_capacity(n * ho * wo * c);
    for b in 0..n {
        for oy in 0..ho {
            for ox in 0..wo {
                let base = |dy: usize, dx: usize| ((b * h + 2 * oy + dy) * w + 2 * ox + dx) * c;
                let offs = [base(0, 0), base(0, 1), base(1, 0), base(1, 1)];
                for ch in 0..c {
                    let mut best = src[offs[0] + ch];
                    let mut at = 0u8;
                    for (j, &o) in offs.iter().enumerate().skip(1) {
                        let v = src[o + ch];
                        if v > best {
                            best = v;
                            at = j as u8;
                        }
                    }
                    out.push(best);
                    arg.push(at);
                }
            }
        }
    }
    Ok((Tensor::new(&[n, ho, wo, c], out)?, arg))
}

pub(crate) fn maxpool2_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    argmax: &[u8],
    in_shape: &[usize],
) -> Tensor<T> {
    let (h, w, c) = (in_shape[1], in_shape[2], in_shape[3]);
    let [n, ho, wo, _] = grad_out.nhwc("maxpool2").expect("pooled grad is NHWC");
    let mut dx = Tensor::zeros(in_shape);
    let dxd = dx.data_mut();
    let dy = grad_out.data();
    let mut idx = 0;
    for b in 0..n {
        for oy in 0..ho {
            for ox in 0..wo {
                for ch in 0..c {
                    let a = argmax[idx] as usize;
                    let (dy_, dx_) = (a / 2, a % 2);
                    let pos = ((b * h + 2 * oy + dy_) * w + 2 * ox + dx_) * c + ch;
                    dxd[pos] = dxd[pos] + dy[idx];
                    idx += 1;
                }
            }
        }
    }
    dx
}

pub fn leaky_relu<T: Scalar>(input: &Tensor<T>, slope: T) -> Tensor<T> {
    input.map(|x| if x >= T::zero() { x } else { slope * x })
}

pub(crate) struct BnStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
    pub inv_std: Vec<T>,
}

fn channel_moments<T: Scalar>(input: &Tensor<T>, c: usize) -> (Vec<f64>, Vec<f64>) {
    let m = (input.len() / c.max(1)) as f64;
    let mut mean = vec![0.0f64; c];
    for row in input.data().chunks(c) {
        for (a, &v) in mean.iter_mut().zip(row) {
            *a += v.as_f64();
        }
    }
    mean.iter_mut().for_each(|v| *v /= m);
    let mut var = vec![0.0f64; c];
    for row in input.data().chunks(c) {
        for ((a, &v), &mu) in var.iter_mut().zip(row).zip(&mean) {
            let d = v.as_f64() - mu;
            *a += d * d;
        }
    }
    var.iter_mut().for_each(|v| *v /= m);
    (mean, var)
}

/// Training-mode batch norm over every axis except the last (channel) one.
/// Returns the output and the batch statistics (biased variance).
pub(crate) fn batch_norm_train<T: Scalar>(
    input: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
) -> Result<(Tensor<T>, BnStats<T>)> {
    let c = *input.shape().last().unwrap_or(&0);
    check_bn_params(c, gamma, beta)?;
    let (mean, var) = channel_moments(input, c);
    let inv_std: Vec<T> = var
        .iter()
        .map(|&v| T::lit(1.0 / (v + BN_EPSILON).sqrt()))
        .collect();
    let mean: Vec<T> = mean.into_iter().map(T::lit).collect();
    let var: Vec<T> = var.into_iter().map(T::lit).collect();
    let mut out = input.clone();
    for row in out.data_mut().chunks_mut(c) {
        for (ch, v) in row.iter_mut().enumerate() {
            *v = (*v - mean[ch]) * inv_std[ch] * gamma.data()[ch] + beta.data()[ch];
        }
    }
    Ok((out, BnStats { mean, var, inv_std }))
}

pub(crate) fn batch_norm_infer<T: Scalar>(
    input: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    running_mean: &Tensor<T>,
    running_var: &Tensor<T>,
) -> Result<(Tensor<T>, Vec<T>)> {
    let c = *input.shape().last().unwrap_or(&0);
    check_bn_params(c, gamma, beta)?;
    if running_mean.len() != c || running_var.len() != c {
        return Err(Error::shape(
            "batch_norm",
            "running statistics do not match channels",
        ));
    }
    let inv_std: Vec<T> = running_var
        .data()
        .iter()
        .map(|&v| T::one() / (v + T::lit(BN_EPSILON)).sqrt())
        .collect();
    let mut out = input.clone();
    for row in out.data_mut().chunks_mut(c) {
        for (ch, v) in row.iter_mut().enumerate() {
            *v = (*v - running_mean.data()[ch]) * inv_std[ch] * gamma.data()[ch] + beta.data()[ch];
        }
    }
    Ok((out, inv_std))
}

fn check_bn_params<T: Scalar>(c: usize, gamma: &Tensor<T>, beta: &Tensor<T>) -> Result<()> {
    if gamma.len() != c || beta.len() != c {
        return Err(Error::shape(
            "batch_norm",
            format!(
                "input has {c} channels, gamma/beta have {}/{}",
                gamma.len(),
                beta.len()
            ),
        ));
    }
    Ok(())
}

/// Returns (d input, d gamma, d beta) for training-mode batch norm.
pub(crate) fn batch_norm_train_backward<T: Scalar>(
    input: &Tensor<T>,
    grad_out: &Tensor<T>,
    gamma: &Tensor<T>,
    mean: &[T],
    inv_std: &[T],
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let c = gamma.len();
    let m = T::lit((input.len() / c) as f64);
    let mut sum_dy = vec![T::zero(); c];
    let mut sum_dy_xhat = vec![T::zero(); c];
    for (xr, dr) in input.data().chunks(c).zip(grad_out.data().chunks(c)) {
        for ch in 0..c {
            let xhat = (xr[ch] - mean[ch]) * inv_std[ch];
            sum_dy[ch] = sum_dy[ch] + dr[ch];
            sum_dy_xhat[ch] = sum_dy_xhat[ch] + dr[ch] * xhat;
        }
    }
    let mut dx = Tensor::zeros(input.shape());
    for ((xr, dr), out) in input
        .data()
        .chunks(c)
        .zip(grad_out.data().chunks(c))
        .zip(dx.data_mut().chunks_mut(c))
    {
        for ch in 0..c {
            let xhat = (xr[ch] - mean[ch]) * inv_std[ch];
            out[ch] = gamma.data()[ch] * inv_std[ch] / m
                * (m * dr[ch] - sum_dy[ch] - xhat * sum_dy_xhat[ch]);
        }
    }
    (
        dx,
        Tensor::new(&[c], sum_dy_xhat).expect("gamma grad"),
        Tensor::new(&[c], sum_dy).expect("beta grad"),
    )
}

pub fn concat_channels<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, h, w, ca] = a.nhwc("concat_channels")?;
    let [nb, hb, wb, cb] = b.nhwc("concat_channels")?;
    if (n, h, w) != (nb, hb, wb) {
        return Err(Error::shape(
            "concat_channels",
            format!("spatial mismatch {:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    let mut out = Vec::with_capacity(n * h * w * (ca + cb));
    if ca == 0 {
        out.extend_from_slice(b.data());
    } else if cb == 0 {
        out.extend_from_slice(a.data());
    } else {
        for (ra, rb) in a.data().chunks(ca).zip(b.data().chunks(cb)) {
            out.extend_from_slice(ra);
            out.extend_from_slice(rb);
        }
    }
    Tensor::new(&[n, h, w, ca + cb], out)
}

/// Splits a channel-concatenated gradient back into its two parts.
pub(crate) fn split_channels<T: Scalar>(grad: &Tensor<T>, ca: usize) -> (Tensor<T>, Tensor<T>) {
    let [n, h, w, c] = grad.nhwc("concat_channels").expect("NHWC");
    let cb = c - ca;
    let mut ga = Vec::with_capacity(n * h * w * ca);
    let mut gb = Vec::with_capacity(n * h * w * cb);
    for row in grad.data().chunks(c.max(1)) {
        ga.extend_from_slice(&row[..ca]);
        gb.extend_from_slice(&row[ca..]);
    }
    (
        Tensor::new(&[n, h, w, ca], ga).expect("split"),
        Tensor::new(&[n, h, w, cb], gb).expect("split"),
    )
}

/// Moves each `block x block` spatial patch into channels. Output channel
/// `(dy * block + dx) * C + c` holds input pixel `(by + dy, bx + dx)`, channel `c`.
pub fn space_to_depth<T: Scalar>(input: &Tensor<T>, block: usize) -> Result<Tensor<T>> {
    let [n, h, w, c] = input.nhwc("space_to_depth")?;
    if block == 0 || h % block != 0 || w % block != 0 {
        return Err(Error::shape(
            "space_to_depth",
            format!("{h}x{w} is not divisible by block {block}"),
        ));
    }
    let (ho, wo, co) = (h / block, w / block, c * block * block);
    let src = input.data();
    let mut out = Vec::with_capacity(src.len());
    for b in 0..n {
        for oy in 0..ho {
            for ox in 0..wo {
                for dy in 0..block {
                    for dx in 0..block {
                        let at = ((b * h + oy * block + dy) * w + ox * block + dx) * c;
                        out.extend_from_slice(&src[at..at + c]);
                    }
                }
            }
        }
    }
    Tensor::new(&[n, ho, wo, co], out)
}

/// Exact inverse of [`space_to_depth`].
pub fn depth_to_space<T: Scalar>(input: &Tensor<T>, block: usize) -> Result<Tensor<T>> {
    let [n, ho, wo, co] = input.nhwc("depth_to_space")?;
    if block == 0 || co % (block * block) != 0 {
        return Err(Error::shape(
            "depth_to_space",
            format!("{co} channels not divisible by {}", block * block),
        ));
    }
    let (h, w, c) = (ho * block, wo * block, co / (block * block));
    let src = input.data();
    let mut out = vec![T::zero(); src.len()];
    let mut at = 0;
    for b in 0..n {
        for oy in 0..ho {
            for ox in 0..wo {
                for dy in 0..block {
                    for dx in 0..block {
                        let dst = ((b * h + oy * block + dy) * w + ox * block + dx) * c;
                        out[dst..dst + c].copy_from_slice(&src[at..at + c]);
                        at += c;
                    }
                }
            }
        }
    }
    Tensor::new(&[n, h, w, c], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn identity_kernel_passes_value_through() {
        let x = t(&[1, 1, 1, 1], &[3.25]);
        let k = t(&[1, 1, 1, 1], &[1.0]);
        let b = t(&[1], &[0.0]);
        let y = conv2d(&x, &k, Some(&b), 1, Padding::Same).unwrap();
        assert_eq!(y.data(), &[3.25]);
    }

    #[test]
    fn ones_valid_convolution_sums_window() {
        let x = Tensor::<f64>::full(&[1, 3, 3, 1], 1.0);
        let k = Tensor::<f64>::full(&[3, 3, 1, 1], 1.0);
        let y = conv2d(&x, &k, None, 1, Padding::Valid).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.data(), &[9.0]);
    }

    #[test]
    fn conv_channel_mismatch_is_shape_error() {
        let x = Tensor::<f32>::zeros(&[1, 4, 4, 3]);
        let k = Tensor::<f32>::zeros(&[3, 3, 2, 8]);
        assert!(matches!(
            conv2d(&x, &k, None, 1, Padding::Same),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn conv_strided_valid_extent() {
        let x = Tensor::<f32>::zeros(&[2, 9, 7, 2]);
        let k = Tensor::<f32>::zeros(&[3, 3, 2, 4]);
        let y = conv2d(&x, &k, None, 2, Padding::Valid).unwrap();
        assert_eq!(y.shape(), &[2, 4, 3, 4]);
    }

    #[test]
    fn maxpool_picks_window_max() {
        let x = t(&[1, 2, 2, 1], &[1.0, 2.0, 3.0, 4.0]);
        let (y, arg) = maxpool2(&x).unwrap();
        assert_eq!(y.data(), &[4.0]);
        assert_eq!(arg, vec![3]);
        let g = maxpool2_backward(&t(&[1, 1, 1, 1], &[1.0]), &arg, x.shape());
        assert_eq!(g.data(), &[0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn maxpool_constant_and_odd() {
        let x = Tensor::<f32>::full(&[1, 4, 6, 2], 0.5);
        let (y, _) = maxpool2(&x).unwrap();
        assert_eq!(y.shape(), &[1, 2, 3, 2]);
        assert!(y.data().iter().all(|&v| v == 0.5));
        assert!(maxpool2(&Tensor::<f32>::zeros(&[1, 3, 4, 1])).is_err());
    }

    #[test]
    fn leaky_relu_definition() {
        let x = t(&[3], &[0.0, -1.0, 2.0]);
        assert_eq!(leaky_relu(&x, 0.1).data(), &[0.0, -0.1, 2.0]);
    }

    #[test]
    fn batch_norm_cases() {
        let ones = t(&[1], &[1.0]);
        let zero = t(&[1], &[0.0]);
        let (y, _) = batch_norm_train(&t(&[1, 2, 2, 1], &[3.0; 4]), &ones, &zero).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));

        let (y, _) = batch_norm_train(&t(&[1, 1, 2, 1], &[0.0, 2.0]), &ones, &zero).unwrap();
        let expect = 1.0 / (1.0 + BN_EPSILON).sqrt();
        assert!((y.data()[0] + expect).abs() < 1e-12);
        assert!((y.data()[1] - expect).abs() < 1e-12);

        let x = t(&[1, 1, 3, 1], &[-1.5, 0.0, 7.0]);
        let (y, _) = batch_norm_infer(&x, &ones, &zero, &zero, &ones).unwrap();
        for (a, b) in y.data().iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-4);
        }
    }

    #[test]
    fn concat_and_reorg_shapes() {
        let a = Tensor::<f32>::zeros(&[1, 13, 13, 1024]);
        let b = Tensor::<f32>::zeros(&[1, 13, 13, 256]);
        assert_eq!(concat_channels(&a, &b).unwrap().shape(), &[1, 13, 13, 1280]);
        let e = Tensor::<f32>::zeros(&[1, 13, 13, 0]);
        assert_eq!(concat_channels(&a, &e).unwrap(), a);
        let s = Tensor::<f32>::zeros(&[1, 26, 26, 64]);
        assert_eq!(space_to_depth(&s, 2).unwrap().shape(), &[1, 13, 13, 256]);
        assert!(concat_channels(&a, &s).is_err());
        assert!(space_to_depth(&Tensor::<f32>::zeros(&[1, 5, 4, 1]), 2).is_err());
    }

    #[test]
    fn concat_places_second_operand_after_first() {
        let a = Tensor::<f64>::from_fn(&[1, 2, 2, 3], |i| i as f64);
        let b = Tensor::<f64>::from_fn(&[1, 2, 2, 2], |i| 100.0 + i as f64);
        let y = concat_channels(&a, &b).unwrap();
        for p in 0..4 {
            for k in 0..2 {
                assert_eq!(y.data()[p * 5 + 3 + k], b.data()[p * 2 + k]);
            }
            for k in 0..3 {
                assert_eq!(y.data()[p * 5 + k], a.data()[p * 3 + k]);
            }
        }
        let (ga, gb) = split_channels(&y, 3);
        assert_eq!((ga, gb), (a, b));
    }

    #[test]
    fn space_to_depth_block_one_is_identity() {
        let x = Tensor::<f32>::from_fn(&[2, 3, 5, 4], |i| i as f32);
        assert_eq!(space_to_depth(&x, 1).unwrap(), x);
    }
}
