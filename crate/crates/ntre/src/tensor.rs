//! Dense H×W×C value grids and the numeric kernels the pipeline is built from.
//!
//! Layout is row-major HWC: `data[(y * w + x) * c + ch]`. Feature maps,
//! probability maps, prototype vectors (1×1×C) and scalars (1×1×1) all share
//! this storage. Convolution weights are stored as `kh*kw` rows of `cin`
//! columns with `cout` channels, i.e. `data[((k * cin) + ci) * cout + co]`
//! with `k = ky * kw + kx`.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub data: Vec<f64>,
}

/// Alias used at module boundaries: an H×W×C activation grid.
pub type FeatureMap = Tensor;

impl Tensor {
    pub fn zeros(h: usize, w: usize, c: usize) -> Self {
        Tensor {
            h,
            w,
            c,
            data: vec![0.0; h * w * c],
        }
    }

    pub fn filled(h: usize, w: usize, c: usize, value: f64) -> Self {
        Tensor {
            h,
            w,
            c,
            data: vec![value; h * w * c],
        }
    }

    pub fn from_vec(h: usize, w: usize, c: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), h * w * c, "data length must match h*w*c");
        Tensor { h, w, c, data }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor::from_vec(1, 1, 1, vec![value])
    }

    pub fn vector(values: &[f64]) -> Self {
        Tensor::from_vec(1, 1, values.len(), values.to_vec())
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize, ch: usize) -> f64 {
        self.data[(y * self.w + x) * self.c + ch]
    }

    #[inline]
    pub fn at_mut(&mut self, y: usize, x: usize, ch: usize) -> &mut f64 {
        &mut self.data[(y * self.w + x) * self.c + ch]
    }

    pub fn scalar_value(&self) -> f64 {
        debug_assert_eq!(self.len(), 1);
        self.data[0]
    }

    pub fn same_shape(&self, other: &Tensor) -> bool {
        self.h == other.h && self.w == other.w && self.c == other.c
    }

    pub fn shape_str(&self) -> String {
        format!("{}x{}x{}", self.h, self.w, self.c)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            h: self.h,
            w: self.w,
            c: self.c,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Cosine similarity with the zero-vector convention: if either argument has
/// zero norm the similarity is defined as 0 (dead activations must not NaN).
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for (x, y) in a.iter().zip(b.iter()) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    dot / (na.sqrt() * nb.sqrt())
}

/// Stride-1 2D convolution with zero padding ("same" output size).
///
/// `weights` rows index the kernel tap `k = ky*kw + kx`, columns index the
/// input channel, channels index the output channel. `bias` is a 1×1×cout
/// vector.
pub fn conv2d_same(x: &Tensor, weights: &Tensor, bias: &Tensor, kh: usize, kw: usize) -> Tensor {
    let cin = weights.w;
    let cout = weights.c;
    assert_eq!(x.c, cin, "conv input channels {} != weight cin {}", x.c, cin);
    assert_eq!(weights.h, kh * kw, "weight rows must equal kh*kw");
    assert_eq!(bias.len(), cout);
    let (h, w) = (x.h, x.w);
    let mut out = Tensor::zeros(h, w, cout);
    let mut acc = vec![0.0f64; cout];
    let oy = (kh / 2) as isize;
    let ox = (kw / 2) as isize;
    for y in 0..h {
        for xx in 0..w {
            acc.copy_from_slice(&bias.data);
            for ky in 0..kh {
                let sy = y as isize + ky as isize - oy;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                for kx in 0..kw {
                    let sx = xx as isize + kx as isize - ox;
                    if sx < 0 || sx >= w as isize {
                        continue;
                    }
                    let k = ky * kw + kx;
                    let xbase = ((sy as usize) * w + sx as usize) * cin;
                    let wbase = k * cin * cout;
                    for ci in 0..cin {
                        let xv = x.data[xbase + ci];
                        if xv == 0.0 {
                            continue;
                        }
                        let wrow = &weights.data[wbase + ci * cout..wbase + (ci + 1) * cout];
                        for (a, wv) in acc.iter_mut().zip(wrow.iter()) {
                            *a += xv * wv;
                        }
                    }
                }
            }
            out.data[(y * w + xx) * cout..(y * w + xx + 1) * cout].copy_from_slice(&acc);
        }
    }
    out
}

/// Concatenate along the channel axis. All inputs must share H×W.
pub fn concat_channels(parts: &[&Tensor]) -> Tensor {
    assert!(!parts.is_empty());
    let (h, w) = (parts[0].h, parts[0].w);
    let c_total: usize = parts.iter().map(|p| p.c).sum();
    for p in parts {
        assert_eq!((p.h, p.w), (h, w), "concat spatial dims must agree");
    }
    let mut out = Tensor::zeros(h, w, c_total);
    for y in 0..h {
        for x in 0..w {
            let mut off = 0;
            for p in parts {
                let src = &p.data[(y * w + x) * p.c..(y * w + x + 1) * p.c];
                out.data[(y * w + x) * c_total + off..(y * w + x) * c_total + off + p.c]
                    .copy_from_slice(src);
                off += p.c;
            }
        }
    }
    out
}

/// Broadcast a 1×1×C vector to an H×W×C map (prototype expansion).
pub fn broadcast_vector(v: &Tensor, h: usize, w: usize) -> Tensor {
    assert_eq!(v.h * v.w, 1, "broadcast source must be 1x1xC");
    let mut out = Tensor::zeros(h, w, v.c);
    for i in 0..h * w {
        out.data[i * v.c..(i + 1) * v.c].copy_from_slice(&v.data);
    }
    out
}

/// Adaptive average pooling to an `oh`×`ow` grid. Output cell (i, j) averages
/// the input rows [floor(i*h/oh), ceil((i+1)*h/oh)) and likewise for columns.
pub fn adaptive_avg_pool(x: &Tensor, oh: usize, ow: usize) -> Tensor {
    let mut out = Tensor::zeros(oh, ow, x.c);
    for oy in 0..oh {
        let y0 = oy * x.h / oh;
        let y1 = ((oy + 1) * x.h).div_ceil(oh);
        for oxx in 0..ow {
            let x0 = oxx * x.w / ow;
            let x1 = ((oxx + 1) * x.w).div_ceil(ow);
            let count = ((y1 - y0) * (x1 - x0)) as f64;
            for ch in 0..x.c {
                let mut s = 0.0;
                for y in y0..y1 {
                    for xx in x0..x1 {
                        s += x.at(y, xx, ch);
                    }
                }
                *out.at_mut(oy, oxx, ch) = s / count;
            }
        }
    }
    out
}

/// Source coordinate and lerp weights for bilinear sampling without corner
/// alignment: src = (dst + 0.5) * in/out - 0.5, clamped to the valid range.
#[inline]
pub(crate) fn bilinear_coeffs(dst: usize, out_len: usize, in_len: usize) -> (usize, usize, f64) {
    let src = (dst as f64 + 0.5) * in_len as f64 / out_len as f64 - 0.5;
    let src = src.clamp(0.0, (in_len - 1) as f64);
    let lo = src.floor() as usize;
    let hi = (lo + 1).min(in_len - 1);
    (lo, hi, src - lo as f64)
}

/// Bilinear resize to `oh`×`ow`.
pub fn bilinear_resize(x: &Tensor, oh: usize, ow: usize) -> Tensor {
    let mut out = Tensor::zeros(oh, ow, x.c);
    for oy in 0..oh {
        let (y0, y1, fy) = bilinear_coeffs(oy, oh, x.h);
        for oxx in 0..ow {
            let (x0, x1, fx) = bilinear_coeffs(oxx, ow, x.w);
            for ch in 0..x.c {
                let v00 = x.at(y0, x0, ch);
                let v01 = x.at(y0, x1, ch);
                let v10 = x.at(y1, x0, ch);
                let v11 = x.at(y1, x1, ch);
                let top = v00 + (v01 - v00) * fx;
                let bot = v10 + (v11 - v10) * fx;
                *out.at_mut(oy, oxx, ch) = top + (bot - top) * fy;
            }
        }
    }
    out
}

/// Min-max normalize to [0, 1]; a constant map becomes all ones (a constant
/// prior carries no information, and 1.0 is the non-suppressive choice).
/// "Constant" is judged with a relative tolerance so that maps that are
/// constant up to floating-point rounding (self-cosine is not exactly 1.0)
/// do not have their rounding noise stretched across [0, 1].
pub fn min_max_normalize(x: &Tensor) -> Tensor {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &v in &x.data {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if hi - lo <= 1e-12 * hi.abs().max(lo.abs()).max(1.0) {
        return Tensor::filled(x.h, x.w, x.c, 1.0);
    }
    x.map(|v| (v - lo) / (hi - lo))
}

pub(crate) fn check_same_spatial(a: &Tensor, b_h: usize, b_w: usize, what: &str) -> Result<()> {
    if a.h != b_h || a.w != b_w {
        return Err(Error::Shape(format!(
            "{what}: {}x{} vs {}x{}",
            a.h, a.w, b_h, b_w
        )));
    }
    Ok(())
}
