//! Raw numeric kernels on [`Tensor`] values. Nothing in here records graph
//! history; the differentiable wrappers live in `ops`.

use crate::error::{Error, Result};
use crate::exec;
use crate::tensor::{Shape, Tensor};

/// Geometry of a 2D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn new(stride: usize, pad: usize) -> Self {
        ConvGeom { stride, pad }
    }

    pub fn out_size(&self, input: usize, kernel: usize) -> Result<usize> {
        let padded = input + 2 * self.pad;
        if padded < kernel || self.stride == 0 {
            return Err(Error::Shape(format!("kernel {kernel} does not fit input {input} with padding {}", self.pad)));
        }
        Ok((padded - kernel) / self.stride + 1)
    }

    fn is_pointwise(&self, w: &Shape) -> bool {
        w.h() == 1 && w.w() == 1 && self.stride == 1 && self.pad == 0
    }
}

/// C[m×n] = alpha·A·B + beta·C with explicit row/column strides.
#[allow(clippy::too_many_arguments)]
fn sgemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    (rsa, csa): (isize, isize),
    b: &[f32],
    (rsb, csb): (isize, isize),
    beta: f32,
    c: &mut [f32],
) {
    debug_assert!(c.len() >= m * n);
    // SAFETY: callers pass buffers sized for the stated dimensions and strides.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Output positions `ox` in `0..wo` whose input column `ox*s + k - p` lies in `0..w`.
fn valid_range(k: usize, s: usize, p: usize, w: usize, wo: usize) -> (usize, usize) {
    let lo = if k >= p { 0 } else { (p - k).div_ceil(s) };
    let hi = if w + p > k { ((w + p - k - 1) / s + 1).min(wo) } else { 0 };
    (lo.min(hi), hi)
}

/// Writes row `r` of the patch matrix to `col[r * ld..r * ld + ho * wo]`.
#[allow(clippy::too_many_arguments)]
fn im2col(
    x: &[f32],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    g: ConvGeom,
    ho: usize,
    wo: usize,
    col: &mut [f32],
    ld: usize,
) {
    let (s, p) = (g.stride, g.pad);
    let hw_out = ho * wo;
    for ci in 0..c {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ki in 0..kh {
            let (ylo, yhi) = valid_range(ki, s, p, h, ho);
            for kj in 0..kw {
                let (xlo, xhi) = valid_range(kj, s, p, w, wo);
                let row = (ci * kh + ki) * kw + kj;
                let dst = &mut col[row * ld..row * ld + hw_out];
                dst[..ylo * wo].fill(0.0);
                dst[yhi * wo..].fill(0.0);
                for oy in ylo..yhi {
                    let iy = oy * s + ki - p;
                    let line = &mut dst[oy * wo..(oy + 1) * wo];
                    line[..xlo].fill(0.0);
                    line[xhi..].fill(0.0);
                    let src = &plane[iy * w..(iy + 1) * w];
                    let x0 = xlo * s + kj - p;
                    let len = xhi - xlo;
                    if s == 1 {
                        line[xlo..xhi].copy_from_slice(&src[x0..x0 + len]);
                    } else if len > 0 {
                        let src = &src[x0..x0 + (len - 1) * s + 1];
                        for (j, v) in line[xlo..xhi].iter_mut().enumerate() {
                            *v = src[j * s];
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im(
    col: &[f32],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    g: ConvGeom,
    ho: usize,
    wo: usize,
    x: &mut [f32],
) {
    let (s, p) = (g.stride, g.pad);
    let hw_out = ho * wo;
    x.fill(0.0);
    for ci in 0..c {
        let plane = &mut x[ci * h * w..(ci + 1) * h * w];
        for ki in 0..kh {
            let (ylo, yhi) = valid_range(ki, s, p, h, ho);
            for kj in 0..kw {
                let (xlo, xhi) = valid_range(kj, s, p, w, wo);
                let row = (ci * kh + ki) * kw + kj;
                let src = &col[row * hw_out..(row + 1) * hw_out];
                for oy in ylo..yhi {
                    let iy = oy * s + ki - p;
                    let dst = &mut plane[iy * w..(iy + 1) * w];
                    let x0 = xlo * s + kj - p;
                    let line = &src[oy * wo + xlo..oy * wo + xhi];
                    if s == 1 {
                        for (d, &v) in dst[x0..x0 + line.len()].iter_mut().zip(line) {
                            *d += v;
                        }
                    } else if !line.is_empty() {
                        let dst = &mut dst[x0..x0 + (line.len() - 1) * s + 1];
                        for (j, &v) in line.iter().enumerate() {
                            dst[j * s] += v;
                        }
                    }
                }
            }
        }
    }
}

thread_local! {
    static SCRATCH: std::cell::RefCell<Vec<f32>> = const { std::cell::RefCell::new(Vec::new()) };
}

/// Runs `f` with a per-thread buffer of `len` floats. Contents are unspecified.
fn with_scratch<R>(len: usize, f: impl FnOnce(&mut [f32]) -> R) -> R {
    SCRATCH.with(|cell| {
        let mut buf = cell.take();
        if buf.len() < len {
            buf.resize(len, 0.0);
        }
        let r = f(&mut buf[..len]);
        cell.replace(buf);
        r
    })
}

fn conv_dims(x: Shape, w: Shape, g: ConvGeom) -> Result<(usize, usize)> {
    if x.c() != w.c() {
        return Err(Error::Shape(format!("conv input {x} does not match weight {w}")));
    }
    Ok((g.out_size(x.h(), w.h())?, g.out_size(x.w(), w.w())?))
}

/// Cross-correlation without bias. `x: [N, Cin, H, W]`, `w: [Cout, Cin, kh, kw]`.
pub fn conv2d(x: &Tensor, w: &Tensor, g: ConvGeom) -> Result<Tensor> {
    let (xs, ws) = (x.shape(), w.shape());
    let (ho, wo) = conv_dims(xs, ws, g)?;
    let [n, cin, h, wd] = xs.0;
    let [cout, _, kh, kw] = ws.0;
    let k = cin * kh * kw;
    let out_shape = Shape::new(n, cout, ho, wo);
    let mut out = vec![0.0f32; out_shape.numel()];
    let sample_in = cin * h * wd;
    let pointwise = g.is_pointwise(&ws);
    let (xd, wdat) = (x.data(), w.data());
    exec::for_each_chunk_mut(&mut out, cout * ho * wo, |i, y| {
        let xi = &xd[i * sample_in..(i + 1) * sample_in];
        if pointwise {
            sgemm(cout, k, ho * wo, wdat, (k as isize, 1), xi, ((ho * wo) as isize, 1), 0.0, y);
        } else {
            with_scratch(k * ho * wo, |col| {
                im2col(xi, cin, h, wd, kh, kw, g, ho, wo, col, ho * wo);
                sgemm(cout, k, ho * wo, wdat, (k as isize, 1), col, ((ho * wo) as isize, 1), 0.0, y);
            });
        }
    });
    Ok(Tensor::new_unchecked(out_shape, out))
}

/// Gradient of `<grad, conv2d(x, w)>` with respect to `x`; a transposed convolution.
pub fn conv2d_input_grad(grad: &Tensor, w: &Tensor, x_shape: Shape, g: ConvGeom) -> Result<Tensor> {
    let ws = w.shape();
    let (ho, wo) = conv_dims(x_shape, ws, g)?;
    let [n, cin, h, wd] = x_shape.0;
    let [cout, _, kh, kw] = ws.0;
    if grad.shape() != Shape::new(n, cout, ho, wo) {
        return Err(Error::Shape(format!(
            "conv input-grad: upstream {} but expected {}",
            grad.shape(),
            Shape::new(n, cout, ho, wo)
        )));
    }
    let k = cin * kh * kw;
    let mut out = vec![0.0f32; x_shape.numel()];
    let sample_g = cout * ho * wo;
    let pointwise = g.is_pointwise(&ws);
    let (gd, wdat) = (grad.data(), w.data());
    exec::for_each_chunk_mut(&mut out, cin * h * wd, |i, dx| {
        let gi = &gd[i * sample_g..(i + 1) * sample_g];
        // W^T: [k × cout] read through strides of the [cout × k] buffer.
        if pointwise {
            sgemm(k, cout, ho * wo, wdat, (1, k as isize), gi, ((ho * wo) as isize, 1), 0.0, dx);
        } else {
            with_scratch(k * ho * wo, |col| {
                sgemm(k, cout, ho * wo, wdat, (1, k as isize), gi, ((ho * wo) as isize, 1), 0.0, col);
                col2im(col, cin, h, wd, kh, kw, g, ho, wo, dx);
            });
        }
    });
    Ok(Tensor::new_unchecked(x_shape, out))
}

/// Minimum GEMM width for weight gradients: small feature maps are batched
/// until a product spans this many columns. Depends only on shapes.
const WGRAD_COLUMNS: usize = 1024;

/// Gradient of `<grad, conv2d(x, w)>` with respect to `w`.
pub fn conv2d_weight_grad(x: &Tensor, grad: &Tensor, w_shape: Shape, g: ConvGeom) -> Result<Tensor> {
    let xs = x.shape();
    let (ho, wo) = conv_dims(xs, w_shape, g)?;
    let [n, cin, h, wd] = xs.0;
    let [cout, _, kh, kw] = w_shape.0;
    if grad.shape() != Shape::new(n, cout, ho, wo) {
        return Err(Error::Shape(format!(
            "conv weight-grad: upstream {} but expected {}",
            grad.shape(),
            Shape::new(n, cout, ho, wo)
        )));
    }
    let k = cin * kh * kw;
    let sample_in = cin * h * wd;
    let sample_g = cout * ho * wo;
    let pointwise = g.is_pointwise(&w_shape);
    let (xd, gd) = (x.data(), grad.data());
    let hw = ho * wo;
    let group = (WGRAD_COLUMNS / hw).clamp(1, n.max(1));
    let partials = exec::map_collect(n.div_ceil(group), |gidx| {
        let (i0, i1) = (gidx * group, ((gidx + 1) * group).min(n));
        let mut dw = vec![0.0f32; cout * k];
        if i1 - i0 == 1 {
            let xi = &xd[i0 * sample_in..(i0 + 1) * sample_in];
            let gi = &gd[i0 * sample_g..(i0 + 1) * sample_g];
            // col^T: [hw × k] read through strides of the [k × hw] buffer.
            if pointwise {
                sgemm(cout, hw, k, gi, (hw as isize, 1), xi, (1, hw as isize), 0.0, &mut dw);
            } else {
                with_scratch(k * hw, |col| {
                    im2col(xi, cin, h, wd, kh, kw, g, ho, wo, col, hw);
                    sgemm(cout, hw, k, gi, (hw as isize, 1), col, (1, hw as isize), 0.0, &mut dw);
                });
            }
            return dw;
        }
        // Lay the group's patches side by side: [k × cols] and [cout × cols].
        let cols = (i1 - i0) * hw;
        with_scratch((k + cout) * cols, |buf| {
            let (col, gg) = buf.split_at_mut(k * cols);
            for (j, i) in (i0..i1).enumerate() {
                let xi = &xd[i * sample_in..(i + 1) * sample_in];
                if pointwise {
                    for (r, src) in xi.chunks_exact(hw).enumerate() {
                        col[r * cols + j * hw..r * cols + (j + 1) * hw].copy_from_slice(src);
                    }
                } else {
                    im2col(xi, cin, h, wd, kh, kw, g, ho, wo, &mut col[j * hw..], cols);
                }
                for (co, src) in gd[i * sample_g..(i + 1) * sample_g].chunks_exact(hw).enumerate() {
                    gg[co * cols + j * hw..co * cols + (j + 1) * hw].copy_from_slice(src);
                }
            }
            sgemm(cout, cols, k, gg, (cols as isize, 1), col, (1, cols as isize), 0.0, &mut dw);
        });
        dw
    });
    let mut iter = partials.into_iter();
    let mut acc = iter.next().unwrap_or_else(|| vec![0.0; w_shape.numel()]);
    for p in iter {
        acc.iter_mut().zip(p).for_each(|(a, b)| *a += b);
    }
    Ok(Tensor::new_unchecked(w_shape, acc))
}

/// 2×2 max-pooling with stride 2. Returns pooled values and, for each output
/// element, the flat index of the winning input element.
pub fn max_pool2(x: &Tensor) -> Result<(Tensor, Vec<u32>)> {
    let [n, c, h, w] = x.shape().0;
    if h < 2 || w < 2 {
        return Err(Error::Shape(format!("max-pool of {}", x.shape())));
    }
    let (ho, wo) = (h / 2, w / 2);
    let out_shape = Shape::new(n, c, ho, wo);
    let mut out = Vec::with_capacity(out_shape.numel());
    let mut idx = Vec::with_capacity(out_shape.numel());
    let xd = x.data();
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = base + 2 * oy * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let j = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if xd[j] > xd[best] {
                        best = j;
                    }
                }
                out.push(xd[best]);
                idx.push(best as u32);
            }
        }
    }
    Ok((Tensor::new_unchecked(out_shape, out), idx))
}

/// `out[idx[i]] += src[i]` into a zero tensor of `shape`.
pub fn scatter_add(src: &Tensor, idx: &[u32], shape: Shape) -> Tensor {
    let mut out = vec![0.0f32; shape.numel()];
    for (&i, &v) in idx.iter().zip(src.data()) {
        out[i as usize] += v;
    }
    Tensor::new_unchecked(shape, out)
}

/// `out[i] = src[idx[i]]`.
pub fn gather(src: &Tensor, idx: &[u32], shape: Shape) -> Tensor {
    let d = src.data();
    Tensor::new_unchecked(shape, idx.iter().map(|&i| d[i as usize]).collect())
}

/// Nearest-neighbour ×2 upsampling.
pub fn upsample2(x: &Tensor) -> Tensor {
    let [n, c, h, w] = x.shape().0;
    let out_shape = Shape::new(n, c, 2 * h, 2 * w);
    let mut out = vec![0.0f32; out_shape.numel()];
    let xd = x.data();
    for plane in 0..n * c {
        let src = &xd[plane * h * w..(plane + 1) * h * w];
        let dst = &mut out[plane * 4 * h * w..(plane + 1) * 4 * h * w];
        for y in 0..h {
            for xx in 0..w {
                let v = src[y * w + xx];
                let o = 2 * y * 2 * w + 2 * xx;
                dst[o] = v;
                dst[o + 1] = v;
                dst[o + 2 * w] = v;
                dst[o + 2 * w + 1] = v;
            }
        }
    }
    Tensor::new_unchecked(out_shape, out)
}

/// Sum over non-overlapping 2×2 windows; the adjoint of [`upsample2`].
pub fn sum_pool2(x: &Tensor) -> Result<Tensor> {
    let [n, c, h, w] = x.shape().0;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Shape(format!("sum-pool of odd-sized {}", x.shape())));
    }
    let (ho, wo) = (h / 2, w / 2);
    let out_shape = Shape::new(n, c, ho, wo);
    let mut out = vec![0.0f32; out_shape.numel()];
    let xd = x.data();
    for plane in 0..n * c {
        let src = &xd[plane * h * w..(plane + 1) * h * w];
        for y in 0..ho {
            for xx in 0..wo {
                let o = 2 * y * w + 2 * xx;
                out[plane * ho * wo + y * wo + xx] = src[o] + src[o + 1] + src[o + w] + src[o + w + 1];
            }
        }
    }
    Ok(Tensor::new_unchecked(out_shape, out))
}

fn bstrides(s: Shape, out: Shape) -> [usize; 4] {
    let st = s.strides();
    let mut r = [0; 4];
    for d in 0..4 {
        r[d] = if s.0[d] == 1 && out.0[d] != 1 { 0 } else { st[d] };
    }
    r
}

/// Elementwise binary op with NCHW broadcasting.
pub fn broadcast_binary(a: &Tensor, b: &Tensor, f: impl Fn(f32, f32) -> f32) -> Result<Tensor> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa == sb {
        return a.zip_map(b, f);
    }
    let out_shape = sa.broadcast(&sb).ok_or_else(|| Error::Shape(format!("cannot broadcast {sa} with {sb}")))?;
    let (ta, tb) = (bstrides(sa, out_shape), bstrides(sb, out_shape));
    let (ad, bd) = (a.data(), b.data());
    let [n, c, h, w] = out_shape.0;
    let mut out = Vec::with_capacity(out_shape.numel());
    for i in 0..n {
        for j in 0..c {
            for k in 0..h {
                let oa = i * ta[0] + j * ta[1] + k * ta[2];
                let ob = i * tb[0] + j * tb[1] + k * tb[2];
                match (ta[3], tb[3]) {
                    (1, 1) => out.extend(ad[oa..oa + w].iter().zip(&bd[ob..ob + w]).map(|(&x, &y)| f(x, y))),
                    (1, 0) => {
                        let y = bd[ob];
                        out.extend(ad[oa..oa + w].iter().map(|&x| f(x, y)))
                    }
                    (0, 1) => {
                        let x = ad[oa];
                        out.extend(bd[ob..ob + w].iter().map(|&y| f(x, y)))
                    }
                    _ => {
                        let v = f(ad[oa], bd[ob]);
                        out.extend(std::iter::repeat_n(v, w))
                    }
                }
            }
        }
    }
    Ok(Tensor::new_unchecked(out_shape, out))
}

/// Expands `x` to `shape` by repeating along unit dimensions.
pub fn expand(x: &Tensor, shape: Shape) -> Result<Tensor> {
    if !x.shape().expands_to(&shape) {
        return Err(Error::Shape(format!("cannot expand {} to {shape}", x.shape())));
    }
    if x.shape() == shape {
        return Ok(x.clone());
    }
    broadcast_binary(x, &Tensor::zeros(shape), |a, _| a)
}

/// Sums `x` down to `shape` over the dimensions where `shape` is 1.
pub fn sum_to(x: &Tensor, shape: Shape) -> Result<Tensor> {
    let xs = x.shape();
    if !shape.expands_to(&xs) {
        return Err(Error::Shape(format!("cannot sum {xs} to {shape}")));
    }
    if xs == shape {
        return Ok(x.clone());
    }
    let ts = bstrides(shape, xs);
    let mut acc = vec![0.0f64; shape.numel()];
    let [n, c, h, w] = xs.0;
    let xd = x.data();
    let mut p = 0;
    for i in 0..n {
        for j in 0..c {
            for k in 0..h {
                let o = i * ts[0] + j * ts[1] + k * ts[2];
                let row = &xd[p..p + w];
                p += w;
                if ts[3] == 0 {
                    acc[o] += row.iter().map(|&v| v as f64).sum::<f64>();
                } else {
                    for (a, &v) in acc[o..o + w].iter_mut().zip(row) {
                        *a += v as f64;
                    }
                }
            }
        }
    }
    Ok(Tensor::new_unchecked(shape, acc.into_iter().map(|v| v as f32).collect()))
}

/// Concatenates along the channel axis.
pub fn concat_channels(parts: &[&Tensor]) -> Result<Tensor> {
    let first = parts.first().ok_or_else(|| Error::Shape("concat of zero tensors".into()))?.shape();
    let [n, _, h, w] = first.0;
    let mut c_total = 0;
    for p in parts {
        let s = p.shape();
        if s.n() != n || s.h() != h || s.w() != w {
            return Err(Error::Shape(format!("channel concat of {first} and {s}")));
        }
        c_total += s.c();
    }
    let out_shape = Shape::new(n, c_total, h, w);
    let mut out = Vec::with_capacity(out_shape.numel());
    for i in 0..n {
        for p in parts {
            let len = p.shape().c() * h * w;
            out.extend_from_slice(&p.data()[i * len..(i + 1) * len]);
        }
    }
    Ok(Tensor::new_unchecked(out_shape, out))
}

/// Channels `start..start + len`.
pub fn narrow_channels(x: &Tensor, start: usize, len: usize) -> Result<Tensor> {
    let [n, c, h, w] = x.shape().0;
    if start + len > c {
        return Err(Error::Shape(format!("channels {start}..{} of {}", start + len, x.shape())));
    }
    let mut out = Vec::with_capacity(n * len * h * w);
    for i in 0..n {
        let base = (i * c + start) * h * w;
        out.extend_from_slice(&x.data()[base..base + len * h * w]);
    }
    Ok(Tensor::new_unchecked(Shape::new(n, len, h, w), out))
}

/// Places `x` at channel offset `start` inside a zero tensor with `total` channels.
pub fn pad_channels(x: &Tensor, start: usize, total: usize) -> Result<Tensor> {
    let [n, c, h, w] = x.shape().0;
    if start + c > total {
        return Err(Error::Shape(format!("pad {} to {total} channels at {start}", x.shape())));
    }
    let mut out = vec![0.0f32; n * total * h * w];
    for i in 0..n {
        let dst = (i * total + start) * h * w;
        out[dst..dst + c * h * w].copy_from_slice(&x.data()[i * c * h * w..(i + 1) * c * h * w]);
    }
    Ok(Tensor::new_unchecked(Shape::new(n, total, h, w), out))
}

/// Per-(sample, channel) normalization followed by a per-channel affine map.
/// Returns the output, the normalized input and `1/std` per plane.
pub fn instance_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f32) -> Result<(Tensor, Tensor, Vec<f32>)> {
    let [n, c, h, w] = x.shape().0;
    let affine = Shape::new(1, c, 1, 1);
    if gamma.shape() != affine || beta.shape() != affine {
        return Err(Error::Shape(format!("instance norm of {} with affine {}", x.shape(), gamma.shape())));
    }
    let hw = h * w;
    let mut xhat = vec![0.0f32; x.numel()];
    let mut out = vec![0.0f32; x.numel()];
    let mut inv_std = vec![0.0f32; n * c];
    for plane in 0..n * c {
        let ch = plane % c;
        let src = &x.data()[plane * hw..(plane + 1) * hw];
        let mean = src.iter().map(|&v| v as f64).sum::<f64>() / hw as f64;
        let var = src.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / hw as f64;
        let is = (1.0 / (var + eps as f64).sqrt()) as f32;
        inv_std[plane] = is;
        let (g, b) = (gamma.data()[ch], beta.data()[ch]);
        let m = mean as f32;
        for ((&v, xh), o) in src.iter().zip(&mut xhat[plane * hw..]).zip(&mut out[plane * hw..]) {
            *xh = (v - m) * is;
            *o = g * *xh + b;
        }
    }
    Ok((Tensor::new_unchecked(x.shape(), out), Tensor::new_unchecked(x.shape(), xhat), inv_std))
}

/// Backward of [`instance_norm`]: gradients for `(x, gamma, beta)`.
pub fn instance_norm_backward(
    grad: &Tensor,
    xhat: &Tensor,
    inv_std: &[f32],
    gamma: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let [n, c, h, w] = xhat.shape().0;
    let hw = h * w;
    let mut dx = vec![0.0f32; xhat.numel()];
    let mut dgamma = vec![0.0f64; c];
    let mut dbeta = vec![0.0f64; c];
    for plane in 0..n * c {
        let ch = plane % c;
        let g = &grad.data()[plane * hw..(plane + 1) * hw];
        let xh = &xhat.data()[plane * hw..(plane + 1) * hw];
        let (mut sg, mut sgx) = (0.0f64, 0.0f64);
        for (&gi, &xi) in g.iter().zip(xh) {
            sg += gi as f64;
            sgx += gi as f64 * xi as f64;
        }
        dbeta[ch] += sg;
        dgamma[ch] += sgx;
        let scale = gamma.data()[ch] * inv_std[plane];
        let (mg, mgx) = ((sg / hw as f64) as f32, (sgx / hw as f64) as f32);
        for ((d, &gi), &xi) in dx[plane * hw..(plane + 1) * hw].iter_mut().zip(g).zip(xh) {
            *d = scale * (gi - mg - xi * mgx);
        }
    }
    let affine = Shape::new(1, c, 1, 1);
    (
        Tensor::new_unchecked(xhat.shape(), dx),
        Tensor::new_unchecked(affine, dgamma.into_iter().map(|v| v as f32).collect()),
        Tensor::new_unchecked(affine, dbeta.into_iter().map(|v| v as f32).collect()),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(shape: Shape, rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::from_vec(shape, (0..shape.numel()).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Direct nested-loop convolution used as the reference.
    fn conv_naive(x: &Tensor, w: &Tensor, g: ConvGeom) -> Tensor {
        let [n, cin, h, wd] = x.shape().0;
        let [cout, _, kh, kw] = w.shape().0;
        let ho = (h + 2 * g.pad - kh) / g.stride + 1;
        let wo = (wd + 2 * g.pad - kw) / g.stride + 1;
        let mut out = vec![0.0f32; n * cout * ho * wo];
        for b in 0..n {
            for co in 0..cout {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut s = 0.0;
                        for ci in 0..cin {
                            for ki in 0..kh {
                                for kj in 0..kw {
                                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                                    let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                        s += x.data()[((b * cin + ci) * h + iy as usize) * wd + ix as usize]
                                            * w.data()[((co * cin + ci) * kh + ki) * kw + kj];
                                    }
                                }
                            }
                        }
                        out[((b * cout + co) * ho + oy) * wo + ox] = s;
                    }
                }
            }
        }
        Tensor::from_vec(Shape::new(n, cout, ho, wo), out).unwrap()
    }

    fn dot(a: &Tensor, b: &Tensor) -> f64 {
        a.data().iter().zip(b.data()).map(|(&x, &y)| x as f64 * y as f64).sum()
    }

    #[test]
    fn conv_matches_naive_for_several_geometries() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for (k, s, p) in [(3, 1, 1), (1, 1, 0), (4, 2, 1), (3, 2, 0)] {
            let x = rand_tensor(Shape::new(2, 3, 8, 8), &mut rng);
            let w = rand_tensor(Shape::new(5, 3, k, k), &mut rng);
            let g = ConvGeom::new(s, p);
            let fast = conv2d(&x, &w, g).unwrap();
            let slow = conv_naive(&x, &w, g);
            assert_eq!(fast.shape(), slow.shape());
            assert!(fast.max_abs_diff(&slow) < 1e-5, "k={k} s={s} p={p}");
        }
    }

    #[test]
    fn conv_grads_are_adjoints() {
        // <g, conv(x, w)> = <input_grad(g, w), x> = <weight_grad(x, g), w>
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for (k, s, p) in [(3, 1, 1), (1, 1, 0), (4, 2, 1)] {
            let g = ConvGeom::new(s, p);
            let x = rand_tensor(Shape::new(2, 3, 8, 8), &mut rng);
            let w = rand_tensor(Shape::new(4, 3, k, k), &mut rng);
            let y = conv2d(&x, &w, g).unwrap();
            let up = rand_tensor(y.shape(), &mut rng);
            let lhs = dot(&up, &y);
            let dx = conv2d_input_grad(&up, &w, x.shape(), g).unwrap();
            let dw = conv2d_weight_grad(&x, &up, w.shape(), g).unwrap();
            assert!((lhs - dot(&dx, &x)).abs() < 1e-3);
            assert!((lhs - dot(&dw, &w)).abs() < 1e-3);
        }
    }

    #[test]
    fn batched_weight_grad_sums_per_sample_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        // 16×16 outputs put 4 samples in a group, so 5 samples leave a lone one.
        for (k, s, p) in [(3, 1, 1), (1, 1, 0), (4, 2, 1)] {
            let g = ConvGeom::new(s, p);
            let size = 16 * s;
            let x = rand_tensor(Shape::new(5, 2, size, size), &mut rng);
            let w = rand_tensor(Shape::new(3, 2, k, k), &mut rng);
            let up = rand_tensor(conv2d(&x, &w, g).unwrap().shape(), &mut rng);
            let dw = conv2d_weight_grad(&x, &up, w.shape(), g).unwrap();
            let sample = |t: &Tensor, i: usize| {
                let [_, c, h, wd] = t.shape().0;
                let len = c * h * wd;
                Tensor::from_vec(Shape::new(1, c, h, wd), t.data()[i * len..(i + 1) * len].to_vec()).unwrap()
            };
            let mut sum = vec![0.0f32; w.shape().numel()];
            for i in 0..5 {
                let d = conv2d_weight_grad(&sample(&x, i), &sample(&up, i), w.shape(), g).unwrap();
                sum.iter_mut().zip(d.data()).for_each(|(a, b)| *a += b);
            }
            let expected = Tensor::from_vec(w.shape(), sum).unwrap();
            assert!(dw.max_abs_diff(&expected) < 1e-3, "k={k} s={s} p={p}");
        }
    }

    #[test]
    fn pool_and_upsample_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = rand_tensor(Shape::new(1, 2, 4, 4), &mut rng);
        let up = upsample2(&x);
        let y = rand_tensor(up.shape(), &mut rng);
        let down = sum_pool2(&y).unwrap();
        assert!((dot(&up, &y) - dot(&x, &down)).abs() < 1e-4);

        let (p, idx) = max_pool2(&x).unwrap();
        assert_eq!(p.shape(), Shape::new(1, 2, 2, 2));
        assert_eq!(gather(&x, &idx, p.shape()), p);
        let back = scatter_add(&p, &idx, x.shape());
        assert!((back.sum() - p.sum()).abs() < 1e-5);
    }

    #[test]
    fn broadcast_and_sum_to_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let a = rand_tensor(Shape::new(2, 3, 4, 5), &mut rng);
        for s in [Shape::new(1, 3, 1, 1), Shape::new(2, 1, 4, 5), Shape::new(1, 1, 1, 5), Shape::SCALAR] {
            let b = rand_tensor(s, &mut rng);
            let sum = broadcast_binary(&a, &b, |x, y| x * y).unwrap();
            // <a ⊙ expand(b), 1> = <sum_to(a), b>
            let reduced = sum_to(&a, s).unwrap();
            assert!((sum.sum() - dot(&reduced, &b)).abs() < 1e-4, "{s}");
            let e = expand(&b, a.shape()).unwrap();
            assert!((sum.sum() - dot(&a, &e)).abs() < 1e-4);
        }
    }

    #[test]
    fn channel_concat_roundtrip() {
        let a = Tensor::full(Shape::new(2, 1, 2, 2), 1.0);
        let b = Tensor::full(Shape::new(2, 2, 2, 2), 2.0);
        let c = concat_channels(&[&a, &b]).unwrap();
        assert_eq!(narrow_channels(&c, 0, 1).unwrap(), a);
        assert_eq!(narrow_channels(&c, 1, 2).unwrap(), b);
        let padded = pad_channels(&b, 1, 3).unwrap();
        assert_eq!(narrow_channels(&padded, 0, 1).unwrap(), Tensor::zeros(a.shape()));
    }
}
