//! Reverse-mode autodiff over [`Tensor`] values.
//!
//! A [`Graph`] is built per forward pass: parameters and constants enter as
//! leaves, ops append nodes, and [`Graph::backward`] walks the tape in
//! reverse. Values are f64 throughout so central finite differences at step
//! 1e-5 resolve gradients to the tolerances the tests assert.
//!
//! Masks never carry gradients; they enter ops as plain [`BinaryMask`] data.

use crate::error::{Error, Result};
use crate::tensor::{self, Tensor};
use crate::types::BinaryMask;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

enum Op {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        kh: usize,
        kw: usize,
    },
    Relu {
        x: Var,
    },
    Sigmoid {
        x: Var,
    },
    ConcatC {
        parts: Vec<Var>,
    },
    Broadcast {
        v: Var,
    },
    MaskedAvgPool {
        x: Var,
        mask: BinaryMask,
    },
    AdaptiveAvgPool {
        x: Var,
    },
    BilinearResize {
        x: Var,
    },
    SumAll {
        x: Var,
    },
    /// Elementwise weighted sum of same-shaped tensors.
    WeightedSum {
        terms: Vec<(f64, Var)>,
    },
    BgMiningLoss {
        y: Var,
        mask: BinaryMask,
        alpha: f64,
        eps: f64,
    },
    BceLoss {
        y: Var,
        mask: BinaryMask,
        eps: f64,
    },
    PclLoss {
        pq: Var,
        ps: Var,
        negatives: Vec<Var>,
        temperature: f64,
        include_positive: bool,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        label: usize,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Grads {
    by_var: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.by_var[v.0].as_ref()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.scalar_value()
    }

    /// Insert a node that gradients do not flow into.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Insert a trainable leaf.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn conv2d_same(&mut self, x: Var, w: Var, b: Var, kh: usize, kw: usize) -> Var {
        let value = tensor::conv2d_same(self.value(x), self.value(w), self.value(b), kh, kw);
        let rg = self.needs(x) || self.needs(w) || self.needs(b);
        self.push(value, Op::Conv2d { x, w, b, kh, kw }, rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.max(0.0));
        let rg = self.needs(x);
        self.push(value, Op::Relu { x }, rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).map(tensor::sigmoid);
        let rg = self.needs(x);
        self.push(value, Op::Sigmoid { x }, rg)
    }

    pub fn concat_channels(&mut self, parts: &[Var]) -> Var {
        let tensors: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let value = tensor::concat_channels(&tensors);
        let rg = parts.iter().any(|&p| self.needs(p));
        self.push(
            value,
            Op::ConcatC {
                parts: parts.to_vec(),
            },
            rg,
        )
    }

    /// Expand a 1×1×C vector to H×W×C.
    pub fn broadcast(&mut self, v: Var, h: usize, w: usize) -> Var {
        let value = tensor::broadcast_vector(self.value(v), h, w);
        let rg = self.needs(v);
        self.push(value, Op::Broadcast { v }, rg)
    }

    /// Masked average pooling: prototype(c) = Σ_i x(i,c)·m(i) / Σ_i m(i).
    /// Fails on an empty mask; callers that tolerate absent regions must
    /// handle the degenerate case themselves.
    pub fn masked_avg_pool(&mut self, x: Var, mask: &BinaryMask) -> Result<Var> {
        let xv = self.value(x);
        tensor::check_same_spatial(xv, mask.h, mask.w, "masked_avg_pool")?;
        let count = mask.count_ones();
        if count == 0 {
            return Err(Error::EmptyMask("masked average pooling"));
        }
        let mut acc = vec![0.0; xv.c];
        for i in 0..mask.h * mask.w {
            if mask.data[i] == 1 {
                for (a, v) in acc.iter_mut().zip(&xv.data[i * xv.c..(i + 1) * xv.c]) {
                    *a += v;
                }
            }
        }
        for a in acc.iter_mut() {
            *a /= count as f64;
        }
        let rg = self.needs(x);
        Ok(self.push(
            Tensor::vector(&acc),
            Op::MaskedAvgPool {
                x,
                mask: mask.clone(),
            },
            rg,
        ))
    }

    pub fn adaptive_avg_pool(&mut self, x: Var, oh: usize, ow: usize) -> Var {
        let value = tensor::adaptive_avg_pool(self.value(x), oh, ow);
        let rg = self.needs(x);
        self.push(value, Op::AdaptiveAvgPool { x }, rg)
    }

    pub fn bilinear_resize(&mut self, x: Var, oh: usize, ow: usize) -> Var {
        let value = tensor::bilinear_resize(self.value(x), oh, ow);
        let rg = self.needs(x);
        self.push(value, Op::BilinearResize { x }, rg)
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).data.iter().sum());
        let rg = self.needs(x);
        self.push(value, Op::SumAll { x }, rg)
    }

    /// out = Σ coef_i · t_i, elementwise over same-shaped tensors.
    pub fn weighted_sum(&mut self, terms: &[(f64, Var)]) -> Var {
        assert!(!terms.is_empty());
        let first = self.value(terms[0].1);
        let mut out = Tensor::zeros(first.h, first.w, first.c);
        for &(coef, v) in terms {
            let t = self.value(v);
            assert!(t.same_shape(&out), "weighted_sum shape mismatch");
            for (o, x) in out.data.iter_mut().zip(&t.data) {
                *o += coef * x;
            }
        }
        let rg = terms.iter().any(|&(_, v)| self.needs(v));
        self.push(
            out,
            Op::WeightedSum {
                terms: terms.to_vec(),
            },
            rg,
        )
    }

    /// Background mining loss on a probability map `y` with target mask `m`:
    ///
    ///   L = −(1/N)·Σ_i log(1−ŷ(i))·m(i) − α·(1/Z)·Σ_j log(ŷ(j))
    ///
    /// with ŷ = y clamped to [ε, 1−ε], N the number of target pixels (term
    /// defined as 0 when N = 0) and Z = H·W.
    pub fn bg_mining_loss(&mut self, y: Var, mask: &BinaryMask, alpha: f64, eps: f64) -> Result<Var> {
        let yv = self.value(y);
        if yv.c != 1 {
            return Err(Error::Shape("bg loss expects a 1-channel map".into()));
        }
        tensor::check_same_spatial(yv, mask.h, mask.w, "bg_mining_loss")?;
        let n = mask.count_ones();
        let z = (mask.h * mask.w) as f64;
        let mut target_term = 0.0;
        let mut reg_term = 0.0;
        for i in 0..mask.h * mask.w {
            let p = yv.data[i].clamp(eps, 1.0 - eps);
            if mask.data[i] == 1 {
                target_term -= (1.0 - p).ln();
            }
            reg_term -= p.ln();
        }
        let first = if n > 0 { target_term / n as f64 } else { 0.0 };
        let loss = first + alpha * reg_term / z;
        let rg = self.needs(y);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::BgMiningLoss {
                y,
                mask: mask.clone(),
                alpha,
                eps,
            },
            rg,
        ))
    }

    /// Per-pixel mean binary cross-entropy of a probability map against a
    /// binary mask, with the same ε clamp as the BG loss.
    pub fn bce_loss(&mut self, y: Var, mask: &BinaryMask, eps: f64) -> Result<Var> {
        let yv = self.value(y);
        if yv.c != 1 {
            return Err(Error::Shape("bce expects a 1-channel map".into()));
        }
        tensor::check_same_spatial(yv, mask.h, mask.w, "bce_loss")?;
        let z = (mask.h * mask.w) as f64;
        let mut total = 0.0;
        for i in 0..mask.h * mask.w {
            let p = yv.data[i].clamp(eps, 1.0 - eps);
            total -= if mask.data[i] == 1 {
                p.ln()
            } else {
                (1.0 - p).ln()
            };
        }
        let rg = self.needs(y);
        Ok(self.push(
            Tensor::scalar(total / z),
            Op::BceLoss {
                y,
                mask: mask.clone(),
                eps,
            },
            rg,
        ))
    }

    /// Prototypical contrastive loss:
    ///
    ///   L = −log( e^{cos(pq,ps)/T} / Σ_n e^{cos(pq,n)/T} )
    ///
    /// The denominator sums over `negatives` only unless `include_positive`
    /// is set. Cosine of a zero-norm vector is 0 with zero gradient.
    pub fn pcl_loss(
        &mut self,
        pq: Var,
        ps: Var,
        negatives: &[Var],
        temperature: f64,
        include_positive: bool,
    ) -> Var {
        assert!(!negatives.is_empty(), "pcl_loss requires negatives");
        assert!(temperature > 0.0);
        let t = temperature;
        let pos = tensor::cosine(&self.value(pq).data, &self.value(ps).data);
        let mut denom = if include_positive { (pos / t).exp() } else { 0.0 };
        for &n in negatives {
            let c = tensor::cosine(&self.value(pq).data, &self.value(n).data);
            denom += (c / t).exp();
        }
        let loss = -(pos / t) + denom.ln();
        let rg = self.needs(pq) || self.needs(ps) || negatives.iter().any(|&n| self.needs(n));
        self.push(
            Tensor::scalar(loss),
            Op::PclLoss {
                pq,
                ps,
                negatives: negatives.to_vec(),
                temperature,
                include_positive,
            },
            rg,
        )
    }

    /// Multi-class cross-entropy of a 1×1×K logit vector against an integer
    /// label, via a numerically shifted softmax.
    pub fn softmax_cross_entropy(&mut self, logits: Var, label: usize) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.h * lv.w, 1, "logits must be a vector");
        assert!(label < lv.c);
        let max = lv.data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let log_sum: f64 = lv.data.iter().map(|&v| (v - max).exp()).sum::<f64>().ln() + max;
        let loss = log_sum - lv.data[label];
        let rg = self.needs(logits);
        self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy { logits, label },
            rg,
        )
    }

    /// Reverse pass from a scalar `root`; returns per-var gradients for every
    /// node on a path from a trainable leaf to the root.
    pub fn backward(&self, root: Var) -> Grads {
        assert_eq!(self.value(root).len(), 1, "backward root must be scalar");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::scalar(1.0));
        for i in (0..=root.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Grads { by_var: grads }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, delta: &Tensor) {
        if !self.needs(v) {
            return;
        }
        let slot = &mut grads[v.0];
        match slot {
            Some(t) => {
                for (a, b) in t.data.iter_mut().zip(&delta.data) {
                    *a += b;
                }
            }
            None => *slot = Some(delta.clone()),
        }
    }

    #[allow(clippy::too_many_lines)]
    fn propagate(&self, node: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        match &self.nodes[node].op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, kh, kw } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let (cin, cout) = (wv.w, wv.c);
                let (h, wid) = (xv.h, xv.w);
                let oy = (*kh / 2) as isize;
                let ox = (*kw / 2) as isize;
                let need_x = self.needs(*x);
                let need_w = self.needs(*w);
                let need_b = self.needs(*b);
                let mut gx = Tensor::zeros(h, wid, cin);
                let mut gw = Tensor::zeros(wv.h, wv.w, wv.c);
                let mut gb = Tensor::zeros(1, 1, cout);
                for y in 0..h {
                    for xx in 0..wid {
                        let gbase = (y * wid + xx) * cout;
                        let gout = &g.data[gbase..gbase + cout];
                        if need_b {
                            for (a, gv) in gb.data.iter_mut().zip(gout) {
                                *a += gv;
                            }
                        }
                        for ky in 0..*kh {
                            let sy = y as isize + ky as isize - oy;
                            if sy < 0 || sy >= h as isize {
                                continue;
                            }
                            for kx in 0..*kw {
                                let sx = xx as isize + kx as isize - ox;
                                if sx < 0 || sx >= wid as isize {
                                    continue;
                                }
                                let k = ky * kw + kx;
                                let xbase = ((sy as usize) * wid + sx as usize) * cin;
                                for ci in 0..cin {
                                    let wrow = k * cin * cout + ci * cout;
                                    if need_x {
                                        let mut acc = 0.0;
                                        for co in 0..cout {
                                            acc += wv.data[wrow + co] * gout[co];
                                        }
                                        gx.data[xbase + ci] += acc;
                                    }
                                    if need_w {
                                        let xval = xv.data[xbase + ci];
                                        if xval != 0.0 {
                                            for co in 0..cout {
                                                gw.data[wrow + co] += xval * gout[co];
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                if need_x {
                    self.accumulate(grads, *x, &gx);
                }
                if need_w {
                    self.accumulate(grads, *w, &gw);
                }
                if need_b {
                    self.accumulate(grads, *b, &gb);
                }
            }
            Op::Relu { x } => {
                let xv = self.value(*x);
                let mut gx = g.clone();
                for (gv, xval) in gx.data.iter_mut().zip(&xv.data) {
                    if *xval <= 0.0 {
                        *gv = 0.0;
                    }
                }
                self.accumulate(grads, *x, &gx);
            }
            Op::Sigmoid { x } => {
                let out = &self.nodes[node].value;
                let mut gx = g.clone();
                for (gv, s) in gx.data.iter_mut().zip(&out.data) {
                    *gv *= s * (1.0 - s);
                }
                self.accumulate(grads, *x, &gx);
            }
            Op::ConcatC { parts } => {
                let (h, w) = (self.nodes[node].value.h, self.nodes[node].value.w);
                let c_total = self.nodes[node].value.c;
                let mut off = 0;
                for &p in parts {
                    let pc = self.value(p).c;
                    if self.needs(p) {
                        let mut gp = Tensor::zeros(h, w, pc);
                        for i in 0..h * w {
                            gp.data[i * pc..(i + 1) * pc]
                                .copy_from_slice(&g.data[i * c_total + off..i * c_total + off + pc]);
                        }
                        self.accumulate(grads, p, &gp);
                    }
                    off += pc;
                }
            }
            Op::Broadcast { v } => {
                let c = self.value(*v).c;
                let mut gv = Tensor::zeros(1, 1, c);
                for i in 0..g.h * g.w {
                    for ch in 0..c {
                        gv.data[ch] += g.data[i * c + ch];
                    }
                }
                self.accumulate(grads, *v, &gv);
            }
            Op::MaskedAvgPool { x, mask } => {
                let xv = self.value(*x);
                let count = mask.count_ones() as f64;
                let mut gx = Tensor::zeros(xv.h, xv.w, xv.c);
                for i in 0..mask.h * mask.w {
                    if mask.data[i] == 1 {
                        for ch in 0..xv.c {
                            gx.data[i * xv.c + ch] = g.data[ch] / count;
                        }
                    }
                }
                self.accumulate(grads, *x, &gx);
            }
            Op::AdaptiveAvgPool { x } => {
                let xv = self.value(*x);
                let out = &self.nodes[node].value;
                let mut gx = Tensor::zeros(xv.h, xv.w, xv.c);
                for oy in 0..out.h {
                    let y0 = oy * xv.h / out.h;
                    let y1 = ((oy + 1) * xv.h).div_ceil(out.h);
                    for oxx in 0..out.w {
                        let x0 = oxx * xv.w / out.w;
                        let x1 = ((oxx + 1) * xv.w).div_ceil(out.w);
                        let inv = 1.0 / ((y1 - y0) * (x1 - x0)) as f64;
                        for y in y0..y1 {
                            for xx in x0..x1 {
                                for ch in 0..xv.c {
                                    gx.data[(y * xv.w + xx) * xv.c + ch] +=
                                        g.data[(oy * out.w + oxx) * out.c + ch] * inv;
                                }
                            }
                        }
                    }
                }
                self.accumulate(grads, *x, &gx);
            }
            Op::BilinearResize { x } => {
                let xv = self.value(*x);
                let out = &self.nodes[node].value;
                let mut gx = Tensor::zeros(xv.h, xv.w, xv.c);
                for oy in 0..out.h {
                    let (y0, y1, fy) = tensor::bilinear_coeffs(oy, out.h, xv.h);
                    for oxx in 0..out.w {
                        let (x0, x1, fx) = tensor::bilinear_coeffs(oxx, out.w, xv.w);
                        let w00 = (1.0 - fy) * (1.0 - fx);
                        let w01 = (1.0 - fy) * fx;
                        let w10 = fy * (1.0 - fx);
                        let w11 = fy * fx;
                        for ch in 0..xv.c {
                            let gv = g.data[(oy * out.w + oxx) * out.c + ch];
                            gx.data[(y0 * xv.w + x0) * xv.c + ch] += w00 * gv;
                            gx.data[(y0 * xv.w + x1) * xv.c + ch] += w01 * gv;
                            gx.data[(y1 * xv.w + x0) * xv.c + ch] += w10 * gv;
                            gx.data[(y1 * xv.w + x1) * xv.c + ch] += w11 * gv;
                        }
                    }
                }
                self.accumulate(grads, *x, &gx);
            }
            Op::SumAll { x } => {
                let xv = self.value(*x);
                let gx = Tensor::filled(xv.h, xv.w, xv.c, g.data[0]);
                self.accumulate(grads, *x, &gx);
            }
            Op::WeightedSum { terms } => {
                for &(coef, v) in terms {
                    if self.needs(v) {
                        let gv = g.map(|val| coef * val);
                        self.accumulate(grads, v, &gv);
                    }
                }
            }
            Op::BgMiningLoss {
                y,
                mask,
                alpha,
                eps,
            } => {
                let yv = self.value(*y);
                let n = mask.count_ones() as f64;
                let z = (mask.h * mask.w) as f64;
                let g0 = g.data[0];
                let mut gy = Tensor::zeros(yv.h, yv.w, 1);
                for i in 0..mask.h * mask.w {
                    let p = yv.data[i];
                    // Clamp has zero derivative outside (ε, 1−ε).
                    if p <= *eps || p >= 1.0 - *eps {
                        continue;
                    }
                    let mut d = -alpha / (z * p);
                    if mask.data[i] == 1 && n > 0.0 {
                        d += 1.0 / (n * (1.0 - p));
                    }
                    gy.data[i] = g0 * d;
                }
                self.accumulate(grads, *y, &gy);
            }
            Op::BceLoss { y, mask, eps } => {
                let yv = self.value(*y);
                let z = (mask.h * mask.w) as f64;
                let g0 = g.data[0];
                let mut gy = Tensor::zeros(yv.h, yv.w, 1);
                for i in 0..mask.h * mask.w {
                    let p = yv.data[i];
                    if p <= *eps || p >= 1.0 - *eps {
                        continue;
                    }
                    let d = if mask.data[i] == 1 {
                        -1.0 / p
                    } else {
                        1.0 / (1.0 - p)
                    };
                    gy.data[i] = g0 * d / z;
                }
                self.accumulate(grads, *y, &gy);
            }
            Op::PclLoss {
                pq,
                ps,
                negatives,
                temperature,
                include_positive,
            } => {
                let t = *temperature;
                let pqv = &self.value(*pq).data;
                let psv = &self.value(*ps).data;
                let g0 = g.data[0];
                let pos = tensor::cosine(pqv, psv);
                let neg_cos: Vec<f64> = negatives
                    .iter()
                    .map(|&n| tensor::cosine(pqv, &self.value(n).data))
                    .collect();
                let mut denom = if *include_positive {
                    (pos / t).exp()
                } else {
                    0.0
                };
                for &c in &neg_cos {
                    denom += (c / t).exp();
                }
                // dL/dcos_pos and dL/dcos_k.
                let mut d_pos = -1.0 / t;
                if *include_positive {
                    d_pos += (pos / t).exp() / (denom * t);
                }
                let mut gpq = vec![0.0; pqv.len()];
                let chain = |other: &[f64], cos_val: f64, dcos: f64, gpq: &mut [f64]| -> Vec<f64> {
                    // d cos(a,b)/da = b/(|a||b|) − cos·a/|a|²  (zero-norm ⇒ 0)
                    let na2: f64 = pqv.iter().map(|v| v * v).sum();
                    let nb2: f64 = other.iter().map(|v| v * v).sum();
                    let mut gother = vec![0.0; other.len()];
                    if na2 == 0.0 || nb2 == 0.0 {
                        return gother;
                    }
                    let (na, nb) = (na2.sqrt(), nb2.sqrt());
                    for i in 0..pqv.len() {
                        gpq[i] += g0 * dcos * (other[i] / (na * nb) - cos_val * pqv[i] / na2);
                        gother[i] = g0 * dcos * (pqv[i] / (na * nb) - cos_val * other[i] / nb2);
                    }
                    gother
                };
                let gps = chain(psv, pos, d_pos, &mut gpq);
                if self.needs(*ps) {
                    self.accumulate(grads, *ps, &Tensor::vector(&gps));
                }
                for (idx, &n) in negatives.iter().enumerate() {
                    let d_k = (neg_cos[idx] / t).exp() / (denom * t);
                    let gn = chain(&self.value(n).data, neg_cos[idx], d_k, &mut gpq);
                    if self.needs(n) {
                        self.accumulate(grads, n, &Tensor::vector(&gn));
                    }
                }
                if self.needs(*pq) {
                    self.accumulate(grads, *pq, &Tensor::vector(&gpq));
                }
            }
            Op::SoftmaxCrossEntropy { logits, label } => {
                let lv = self.value(*logits);
                let g0 = g.data[0];
                let max = lv.data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = lv.data.iter().map(|&v| (v - max).exp()).collect();
                let sum: f64 = exps.iter().sum();
                let mut gl = Tensor::zeros(1, 1, lv.c);
                for (i, e) in exps.iter().enumerate() {
                    gl.data[i] = g0 * (e / sum - f64::from(u8::from(i == *label)));
                }
                self.accumulate(grads, *logits, &gl);
            }
        }
    }
}

/// Central finite difference of a scalar function at `x0`.
pub fn central_difference(mut f: impl FnMut(f64) -> f64, x0: f64, step: f64) -> f64 {
    (f(x0 + step) - f(x0 - step)) / (2.0 * step)
}

/// Relative error between an analytic and a numerical derivative, with an
/// absolute floor so near-zero pairs compare sanely.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-8);
    (analytic - numeric).abs() / denom
}
