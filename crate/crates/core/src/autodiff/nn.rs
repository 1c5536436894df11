//! Network layers with fused backward passes.

use rand::Rng;

use super::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{axis_extents, gemm, Element, Tensor, Transpose};

/// Which statistics [`Graph::batchnorm2d`] normalizes with.
#[derive(Debug, Clone, Copy)]
pub enum BatchStats<'a, E> {
    /// Statistics of the current input; gradients flow through them.
    Batch,
    /// Fixed running statistics.
    Running { mean: &'a [E], var: &'a [E] },
}

fn rows_softmax<E: Element>(x: &[E], outer: usize, len: usize, inner: usize, log: bool) -> Vec<E> {
    let mut out = vec![E::zero(); x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |l: usize| (o * len + l) * inner + i;
            let max = (0..len).map(|l| x[idx(l)]).fold(E::neg_infinity(), E::max);
            let mut denom = E::zero();
            for l in 0..len {
                let e = (x[idx(l)] - max).exp();
                out[idx(l)] = e;
                denom += e;
            }
            if log {
                let lse = denom.ln();
                for l in 0..len {
                    out[idx(l)] = x[idx(l)] - max - lse;
                }
            } else {
                for l in 0..len {
                    out[idx(l)] /= denom;
                }
            }
        }
    }
    out
}

/// Source indices and weights for align-corners=false linear resampling.
fn linear_taps(in_len: usize, out_len: usize) -> Vec<(usize, usize, f64)> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(in_len - 1);
            let i1 = (i0 + 1).min(in_len - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

struct ConvGeom {
    cin: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeom {
    fn im2col<E: Element>(&self, x: &[E], col: &mut [E]) {
        let (k, s, p) = (self.k, self.stride, self.pad);
        let plane = self.oh * self.ow;
        for ci in 0..self.cin {
            let xc = &x[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ki in 0..k {
                for kj in 0..k {
                    let row = &mut col[((ci * k + ki) * k + kj) * plane..][..plane];
                    for oy in 0..self.oh {
                        let iy = (oy * s + ki) as isize - p as isize;
                        let dst = &mut row[oy * self.ow..(oy + 1) * self.ow];
                        if iy < 0 || iy >= self.h as isize {
                            dst.fill(E::zero());
                            continue;
                        }
                        let src = &xc[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * s + kj) as isize - p as isize;
                            *d = if ix < 0 || ix >= self.w as isize {
                                E::zero()
                            } else {
                                src[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im<E: Element>(&self, col: &[E], dx: &mut [E]) {
        let (k, s, p) = (self.k, self.stride, self.pad);
        let plane = self.oh * self.ow;
        for ci in 0..self.cin {
            let xc = &mut dx[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ki in 0..k {
                for kj in 0..k {
                    let row = &col[((ci * k + ki) * k + kj) * plane..][..plane];
                    for oy in 0..self.oh {
                        let iy = (oy * s + ki) as isize - p as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let dst = &mut xc[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for ox in 0..self.ow {
                            let ix = (ox * s + kj) as isize - p as isize;
                            if ix >= 0 && ix < self.w as isize {
                                dst[ix as usize] += row[oy * self.ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

impl<E: Element> Graph<E> {
    /// `[m×k] · [k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![E::zero(); m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            Transpose::No,
            self.value(b).data(),
            Transpose::No,
            E::zero(),
            &mut out,
        );
        let out = Tensor::new([m, n], out)?;
        Ok(self.push(
            "matmul",
            out,
            &[a, b],
            Box::new(move |c| {
                let (x, y) = (c.inputs[0].data(), c.inputs[1].data());
                let da = c.needs[0].then(|| {
                    let mut g = vec![E::zero(); m * k];
                    gemm(m, n, k, c.grad, Transpose::No, y, Transpose::Yes, E::zero(), &mut g);
                    g
                });
                let db = c.needs[1].then(|| {
                    let mut g = vec![E::zero(); k * n];
                    gemm(k, m, n, x, Transpose::Yes, c.grad, Transpose::No, E::zero(), &mut g);
                    g
                });
                vec![da, db]
            }),
        ))
    }

    /// Cross-correlation of `x: [B, Cin, H, W]` with `w: [Cout, Cin, k, k]`
    /// and optional `bias: [Cout]`.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 4 || sw[2] != sw[3] {
            return Err(Error::shape("conv2d", &sx, &sw));
        }
        if sx[1] != sw[1] {
            return Err(Error::dim(
                "conv2d",
                format!("input has {} channels but kernel expects {} ({sx:?} vs {sw:?})", sx[1], sw[1]),
            ));
        }
        let (batch, cin, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
        let (cout, k) = (sw[0], sw[2]);
        if stride == 0 || h + 2 * pad < k || wd + 2 * pad < k {
            return Err(Error::dim("conv2d", format!("kernel {k} stride {stride} pad {pad} on {h}x{wd}")));
        }
        if let Some(b) = bias {
            if self.shape(b) != [cout] {
                return Err(Error::shape("conv2d bias", self.shape(b), &[cout]));
            }
        }
        let geom = ConvGeom {
            cin,
            h,
            w: wd,
            k,
            stride,
            pad,
            oh: (h + 2 * pad - k) / stride + 1,
            ow: (wd + 2 * pad - k) / stride + 1,
        };
        let plane = geom.oh * geom.ow;
        let kk = cin * k * k;
        let in_plane = cin * h * wd;
        let mut cols = vec![E::zero(); batch * kk * plane];
        let mut out = vec![E::zero(); batch * cout * plane];
        {
            let xd = self.value(x).data();
            let wdta = self.value(w).data();
            for b in 0..batch {
                let col = &mut cols[b * kk * plane..(b + 1) * kk * plane];
                geom.im2col(&xd[b * in_plane..(b + 1) * in_plane], col);
                let o = &mut out[b * cout * plane..(b + 1) * cout * plane];
                gemm(cout, kk, plane, wdta, Transpose::No, col, Transpose::No, E::zero(), o);
            }
            if let Some(bv) = bias {
                let bd = self.value(bv).data();
                for b in 0..batch {
                    for co in 0..cout {
                        let o = &mut out[(b * cout + co) * plane..(b * cout + co + 1) * plane];
                        o.iter_mut().for_each(|v| *v += bd[co]);
                    }
                }
            }
        }
        let out = Tensor::new([batch, cout, geom.oh, geom.ow], out)?;
        let mut parents = vec![x, w];
        parents.extend(bias);
        Ok(self.push(
            "conv2d",
            out,
            &parents,
            Box::new(move |c| {
                let wdta = c.inputs[1].data();
                let mut dx = c.needs[0].then(|| vec![E::zero(); batch * in_plane]);
                let mut dw = c.needs[1].then(|| vec![E::zero(); cout * kk]);
                let mut dcol = vec![E::zero(); kk * plane];
                for b in 0..batch {
                    let go = &c.grad[b * cout * plane..(b + 1) * cout * plane];
                    let col = &cols[b * kk * plane..(b + 1) * kk * plane];
                    if let Some(dw) = dw.as_mut() {
                        gemm(cout, plane, kk, go, Transpose::No, col, Transpose::Yes, E::one(), dw);
                    }
                    if let Some(dx) = dx.as_mut() {
                        gemm(kk, cout, plane, wdta, Transpose::Yes, go, Transpose::No, E::zero(), &mut dcol);
                        geom.col2im(&dcol, &mut dx[b * in_plane..(b + 1) * in_plane]);
                    }
                }
                let mut grads = vec![dx, dw];
                if c.inputs.len() == 3 {
                    grads.push(c.needs[2].then(|| {
                        let mut db = vec![E::zero(); cout];
                        for b in 0..batch {
                            for (co, d) in db.iter_mut().enumerate() {
                                *d += c.grad[(b * cout + co) * plane..(b * cout + co + 1) * plane]
                                    .iter()
                                    .copied()
                                    .sum::<E>();
                            }
                        }
                        db
                    }));
                }
                grads
            }),
        ))
    }

    fn softmax_impl(&mut self, x: Var, axis: usize, log: bool) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::dim("softmax", format!("axis {axis} for {shape:?}")));
        }
        let (outer, len, inner) = axis_extents(&shape, axis);
        let out = rows_softmax(self.value(x).data(), outer, len, inner, log);
        let out = Tensor::new(shape, out)?;
        Ok(self.push(
            if log { "log_softmax" } else { "softmax" },
            out,
            &[x],
            Box::new(move |c| {
                let y = c.output.data();
                let g = c.grad;
                let mut dx = vec![E::zero(); y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |l: usize| (o * len + l) * inner + i;
                        if log {
                            let gs: E = (0..len).map(|l| g[idx(l)]).sum();
                            for l in 0..len {
                                dx[idx(l)] = g[idx(l)] - y[idx(l)].exp() * gs;
                            }
                        } else {
                            let dot: E = (0..len).map(|l| g[idx(l)] * y[idx(l)]).sum();
                            for l in 0..len {
                                dx[idx(l)] = y[idx(l)] * (g[idx(l)] - dot);
                            }
                        }
                    }
                }
                vec![Some(dx)]
            }),
        ))
    }

    /// Max-stabilized softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.softmax_impl(x, axis, false)
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.softmax_impl(x, axis, true)
    }

    /// Layer normalization over the last axis.
    pub fn layernorm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().expect("rank >= 1");
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::shape("layernorm", self.shape(gamma), &[d]));
        }
        let rows = self.value(x).numel() / d;
        let eps = E::of(eps);
        let dn = E::of(d as f64);
        let xd = self.value(x).data();
        let (gd, bd) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![E::zero(); rows * d];
        let mut inv = vec![E::zero(); rows];
        let mut out = vec![E::zero(); rows * d];
        for r in 0..rows {
            let row = &xd[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<E>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<E>() / dn;
            let is = (var + eps).sqrt().recip();
            inv[r] = is;
            for j in 0..d {
                let xh = (row[j] - mean) * is;
                xhat[r * d + j] = xh;
                out[r * d + j] = gd[j] * xh + bd[j];
            }
        }
        let out = Tensor::new(shape, out)?;
        Ok(self.push(
            "layernorm",
            out,
            &[x, gamma, beta],
            Box::new(move |c| {
                let gd = c.inputs[1].data();
                let g = c.grad;
                let dx = c.needs[0].then(|| {
                    let mut dx = vec![E::zero(); rows * d];
                    for r in 0..rows {
                        let mut s1 = E::zero();
                        let mut s2 = E::zero();
                        for j in 0..d {
                            let dxh = g[r * d + j] * gd[j];
                            s1 += dxh;
                            s2 += dxh * xhat[r * d + j];
                        }
                        for j in 0..d {
                            let dxh = g[r * d + j] * gd[j];
                            dx[r * d + j] = inv[r] / dn * (dn * dxh - s1 - xhat[r * d + j] * s2);
                        }
                    }
                    dx
                });
                let dgamma = c.needs[1].then(|| {
                    let mut dg = vec![E::zero(); d];
                    for r in 0..rows {
                        for j in 0..d {
                            dg[j] += g[r * d + j] * xhat[r * d + j];
                        }
                    }
                    dg
                });
                let dbeta = c.needs[2].then(|| {
                    let mut db = vec![E::zero(); d];
                    for r in 0..rows {
                        for j in 0..d {
                            db[j] += g[r * d + j];
                        }
                    }
                    db
                });
                vec![dx, dgamma, dbeta]
            }),
        ))
    }

    /// Per-channel normalization of `x: [B, C, H, W]`. With
    /// [`BatchStats::Batch`] also returns the batch mean and unbiased variance
    /// for running-statistics tracking.
    #[allow(clippy::type_complexity)]
    pub fn batchnorm2d(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: BatchStats<'_, E>,
        eps: f64,
    ) -> Result<(Var, Option<(Vec<E>, Vec<E>)>)> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 4 {
            return Err(Error::dim("batchnorm2d", format!("expected [B,C,H,W], got {shape:?}")));
        }
        let (batch, ch, plane) = (shape[0], shape[1], shape[2] * shape[3]);
        if self.shape(gamma) != [ch] || self.shape(beta) != [ch] {
            return Err(Error::shape("batchnorm2d", self.shape(gamma), &[ch]));
        }
        let n = batch * plane;
        let nn = E::of(n as f64);
        let eps = E::of(eps);
        let xd = self.value(x).data();
        let (gd, bd) = (self.value(gamma).data(), self.value(beta).data());
        let at = move |b: usize, c: usize| (b * ch + c) * plane;
        let (mean, var, batch_stats) = match stats {
            BatchStats::Batch => {
                let mut mean = vec![E::zero(); ch];
                let mut var = vec![E::zero(); ch];
                for c in 0..ch {
                    let mut s = E::zero();
                    for b in 0..batch {
                        s += xd[at(b, c)..at(b, c) + plane].iter().copied().sum::<E>();
                    }
                    let m = s / nn;
                    let mut v = E::zero();
                    for b in 0..batch {
                        v += xd[at(b, c)..at(b, c) + plane]
                            .iter()
                            .map(|&q| (q - m) * (q - m))
                            .sum::<E>();
                    }
                    mean[c] = m;
                    var[c] = v / nn;
                }
                (mean, var, true)
            }
            BatchStats::Running { mean, var } => {
                if mean.len() != ch || var.len() != ch {
                    return Err(Error::dim("batchnorm2d", "running statistics length"));
                }
                (mean.to_vec(), var.to_vec(), false)
            }
        };
        let inv: Vec<E> = var.iter().map(|&v| (v + eps).sqrt().recip()).collect();
        let mut xhat = vec![E::zero(); xd.len()];
        let mut out = vec![E::zero(); xd.len()];
        for b in 0..batch {
            for c in 0..ch {
                for i in at(b, c)..at(b, c) + plane {
                    let xh = (xd[i] - mean[c]) * inv[c];
                    xhat[i] = xh;
                    out[i] = gd[c] * xh + bd[c];
                }
            }
        }
        let out = Tensor::new(shape, out)?;
        let reported = batch_stats.then(|| {
            let unbiased = if n > 1 { nn / E::of((n - 1) as f64) } else { E::one() };
            (mean.clone(), var.iter().map(|&v| v * unbiased).collect())
        });
        let var_out = self.push(
            "batchnorm2d",
            out,
            &[x, gamma, beta],
            Box::new(move |c| {
                let gd = c.inputs[1].data();
                let g = c.grad;
                let mut dgamma = vec![E::zero(); ch];
                let mut dbeta = vec![E::zero(); ch];
                for b in 0..batch {
                    for cc in 0..ch {
                        for i in at(b, cc)..at(b, cc) + plane {
                            dgamma[cc] += g[i] * xhat[i];
                            dbeta[cc] += g[i];
                        }
                    }
                }
                let dx = c.needs[0].then(|| {
                    let mut dx = vec![E::zero(); g.len()];
                    for cc in 0..ch {
                        // dxhat = g * gamma; sums over the channel reuse dbeta/dgamma.
                        let s1 = dbeta[cc] * gd[cc];
                        let s2 = dgamma[cc] * gd[cc];
                        for b in 0..batch {
                            for i in at(b, cc)..at(b, cc) + plane {
                                let dxh = g[i] * gd[cc];
                                dx[i] = if batch_stats {
                                    inv[cc] / nn * (nn * dxh - s1 - xhat[i] * s2)
                                } else {
                                    dxh * inv[cc]
                                };
                            }
                        }
                    }
                    dx
                });
                vec![dx, c.needs[1].then_some(dgamma), c.needs[2].then_some(dbeta)]
            }),
        );
        Ok((var_out, reported))
    }

    /// Inverted dropout: active when `rng` is given, identity otherwise.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, rate: f64, rng: Option<&mut R>) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::config(format!("dropout rate {rate} outside [0, 1)")));
        }
        let Some(rng) = rng.filter(|_| rate > 0.0) else {
            return Ok(x);
        };
        let keep = E::of(1.0 / (1.0 - rate));
        let mask: Vec<E> = (0..self.value(x).numel())
            .map(|_| if rng.random::<f64>() >= rate { keep } else { E::zero() })
            .collect();
        let out = Tensor::new(
            self.shape(x).to_vec(),
            self.value(x).data().iter().zip(&mask).map(|(&v, &m)| v * m).collect(),
        )?;
        Ok(self.push(
            "dropout",
            out,
            &[x],
            Box::new(move |c| vec![Some(c.grad.iter().zip(&mask).map(|(&g, &m)| g * m).collect())]),
        ))
    }

    /// Bilinear resize of the trailing two axes (half-pixel centers, edge clamped).
    pub fn upsample_bilinear(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let t = self.value(x);
        let (h, w) = t.spatial()?;
        let planes = t.planes();
        let ty = linear_taps(h, out_h);
        let tx = linear_taps(w, out_w);
        let xd = t.data();
        let mut out = vec![E::zero(); planes * out_h * out_w];
        for p in 0..planes {
            let src = &xd[p * h * w..(p + 1) * h * w];
            let dst = &mut out[p * out_h * out_w..(p + 1) * out_h * out_w];
            for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
                let (ly, hy) = (E::of(ly), E::of(1.0 - ly));
                for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                    let (lx, hx) = (E::of(lx), E::of(1.0 - lx));
                    dst[oy * out_w + ox] = hy * (hx * src[y0 * w + x0] + lx * src[y0 * w + x1])
                        + ly * (hx * src[y1 * w + x0] + lx * src[y1 * w + x1]);
                }
            }
        }
        let mut shape = t.shape().to_vec();
        let r = shape.len();
        shape[r - 2] = out_h;
        shape[r - 1] = out_w;
        let out = Tensor::new(shape, out)?;
        Ok(self.push(
            "upsample_bilinear",
            out,
            &[x],
            Box::new(move |c| {
                let mut dx = vec![E::zero(); planes * h * w];
                for p in 0..planes {
                    let g = &c.grad[p * out_h * out_w..(p + 1) * out_h * out_w];
                    let d = &mut dx[p * h * w..(p + 1) * h * w];
                    for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
                        let (ly, hy) = (E::of(ly), E::of(1.0 - ly));
                        for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                            let (lx, hx) = (E::of(lx), E::of(1.0 - lx));
                            let v = g[oy * out_w + ox];
                            d[y0 * w + x0] += v * hy * hx;
                            d[y0 * w + x1] += v * hy * lx;
                            d[y1 * w + x0] += v * ly * hx;
                            d[y1 * w + x1] += v * ly * lx;
                        }
                    }
                }
                vec![Some(dx)]
            }),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rnd(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
    }

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_zero() {
        let mut g = Graph::<f64>::new();
        let i = g.constant(Tensor::eye(2));
        let m = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let p = g.matmul(i, m).unwrap();
        assert_eq!(g.value(p).data(), &[1.0, 2.0, 3.0, 4.0]);
        let a = g.constant(t(&[1, 2], &[1.0, 0.0]));
        let b = g.constant(t(&[2, 1], &[0.0, 5.0]));
        let z = g.matmul(a, b).unwrap();
        assert_eq!(g.value(z).data(), &[0.0]);
        match g.matmul(a, a) {
            Err(Error::Shape { lhs, rhs, .. }) => {
                assert_eq!(lhs, vec![1, 2]);
                assert_eq!(rhs, vec![1, 2]);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn matmul_gradcheck() {
        let rep = gradcheck(
            |g, v| {
                let y = g.matmul(v[0], v[1])?;
                Ok(g.sum(y))
            },
            &[rnd(&[3, 4], 1), rnd(&[4, 2], 2)],
        )
        .unwrap();
        assert!(rep.max_rel_error < 1e-4, "{rep:?}");
    }

    #[test]
    fn conv_identity_and_zero() {
        let mut g = Graph::<f64>::new();
        let x = rnd(&[1, 1, 4, 5], 3);
        let xv = g.constant(x.clone());
        let w = g.constant(Tensor::ones([1, 1, 1, 1]));
        let y = g.conv2d(xv, w, None, 1, 0).unwrap();
        assert_eq!(g.value(y), &x);
        let z = g.constant(Tensor::zeros([1, 2, 5, 5]));
        let w3 = g.constant(rnd(&[3, 2, 3, 3], 4));
        let y = g.conv2d(z, w3, None, 1, 1).unwrap();
        assert_eq!(g.shape(y), &[1, 3, 5, 5]);
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
        let wrong = g.constant(rnd(&[3, 3, 3, 3], 5));
        assert!(matches!(g.conv2d(z, wrong, None, 1, 1), Err(Error::Dim { .. })));
    }

    #[test]
    fn conv_matches_direct_loops() {
        let x = rnd(&[2, 2, 5, 6], 6);
        let w = rnd(&[3, 2, 3, 3], 7);
        let bias = rnd(&[3], 8);
        let mut g = Graph::<f64>::new();
        let (xv, wv, bv) = (g.constant(x.clone()), g.constant(w.clone()), g.constant(bias.clone()));
        let y = g.conv2d(xv, wv, Some(bv), 2, 1).unwrap();
        assert_eq!(g.shape(y), &[2, 3, 3, 3]);
        let (xd, wd) = (x.data(), w.data());
        for b in 0..2 {
            for co in 0..3 {
                for oy in 0..3 {
                    for ox in 0..3 {
                        let mut s = bias.data()[co];
                        for ci in 0..2 {
                            for ki in 0..3 {
                                for kj in 0..3 {
                                    let iy = (oy * 2 + ki) as isize - 1;
                                    let ix = (ox * 2 + kj) as isize - 1;
                                    if (0..5).contains(&iy) && (0..6).contains(&ix) {
                                        s += xd[((b * 2 + ci) * 5 + iy as usize) * 6 + ix as usize]
                                            * wd[((co * 2 + ci) * 3 + ki) * 3 + kj];
                                    }
                                }
                            }
                        }
                        let got = g.value(y).data()[((b * 3 + co) * 3 + oy) * 3 + ox];
                        assert!((got - s).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn conv_gradcheck() {
        let rep = gradcheck(
            |g, v| {
                let y = g.conv2d(v[0], v[1], Some(v[2]), 1, 1)?;
                let y = g.square(y);
                Ok(g.mean(y))
            },
            &[rnd(&[1, 2, 5, 5], 9), rnd(&[2, 2, 3, 3], 10), rnd(&[2], 11)],
        )
        .unwrap();
        assert!(rep.max_rel_error < 1e-4, "{rep:?}");
        let strided = gradcheck(
            |g, v| {
                let y = g.conv2d(v[0], v[1], None, 2, 1)?;
                let w = g.constant(rnd(&[2, 3, 3, 3], 14));
                let y = g.mul(y, w)?;
                Ok(g.sum(y))
            },
            &[rnd(&[2, 2, 6, 6], 12), rnd(&[3, 2, 3, 3], 13)],
        )
        .unwrap();
        assert!(strided.max_rel_error < 1e-4, "{strided:?}");
    }

    #[test]
    fn softmax_values() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[4], &[0.0; 4]));
        let y = g.softmax(x, 0).unwrap();
        assert_eq!(g.value(y).data(), &[0.25; 4]);
        let x = g.constant(t(&[2], &[1000.0, 0.0]));
        let y = g.softmax(x, 0).unwrap();
        let v = g.value(y).data();
        assert!((v[0] - 1.0).abs() < 1e-12 && v[1].abs() < 1e-12);
        let ls = g.log_softmax(x, 0).unwrap();
        assert_eq!(g.value(ls).data()[0], 0.0);
        assert!(g.softmax(x, 1).is_err());
    }

    #[test]
    fn softmax_gradchecks() {
        for log in [false, true] {
            let rep = gradcheck(
                |g, v| {
                    let y = if log { g.log_softmax(v[0], 0)? } else { g.softmax(v[0], 0)? };
                    let w = g.constant(rnd(&[5], 21));
                    let y = g.mul(y, w)?;
                    Ok(g.sum(y))
                },
                &[rnd(&[5], 20)],
            )
            .unwrap();
            assert!(rep.max_rel_error < 1e-4, "log={log} {rep:?}");
        }
        let rep = gradcheck(
            |g, v| {
                let y = g.softmax(v[0], 1)?;
                let y = g.square(y);
                Ok(g.sum(y))
            },
            &[rnd(&[2, 3, 4], 22)],
        )
        .unwrap();
        assert!(rep.max_rel_error < 1e-4, "{rep:?}");
    }

    #[test]
    fn layernorm_values_and_gradients() {
        let mut g = Graph::<f64>::new();
        let gamma = g.constant(Tensor::ones([2]));
        let beta = g.constant(Tensor::zeros([2]));
        let c = g.constant(t(&[1, 2], &[3.0, 3.0]));
        let y = g.layernorm(c, gamma, beta, 1e-5).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 0.0]);
        let r = g.constant(t(&[1, 2], &[-1.0, 1.0]));
        let y = g.layernorm(r, gamma, beta, 1e-12).unwrap();
        let v = g.value(y).data();
        assert!((v[0] + 1.0).abs() < 1e-9 && (v[1] - 1.0).abs() < 1e-9);

        let rep = gradcheck(
            |g, v| {
                let y = g.layernorm(v[0], v[1], v[2], 1e-5)?;
                let w = g.constant(rnd(&[3, 4], 31));
                let y = g.mul(y, w)?;
                Ok(g.sum(y))
            },
            &[rnd(&[3, 4], 30), rnd(&[4], 32), rnd(&[4], 33)],
        )
        .unwrap();
        assert!(rep.max_rel_error < 1e-4, "{rep:?}");
    }

    #[test]
    fn batchnorm_values() {
        let mut g = Graph::<f64>::new();
        // channel already zero-mean unit-variance
        let x = g.constant(t(&[2, 1, 1, 2], &[1.0, -1.0, -1.0, 1.0]));
        let one = g.constant(Tensor::ones([1]));
        let zero = g.constant(Tensor::zeros([1]));
        let (y, stats) = g.batchnorm2d(x, one, zero, BatchStats::Batch, 1e-5).unwrap();
        for (a, b) in g.value(y).data().iter().zip([1.0, -1.0, -1.0, 1.0]) {
            assert!((a - b).abs() < 1e-5);
        }
        let (mean, var) = stats.unwrap();
        assert_eq!(mean, vec![0.0]);
        assert!((var[0] - 4.0 / 3.0).abs() < 1e-12);
        let five = g.constant(Tensor::full([1], 5.0));
        let (y, _) = g.batchnorm2d(x, zero, five, BatchStats::Batch, 1e-5).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 5.0));
    }

    #[test]
    fn batchnorm_gradchecks() {
        for running in [false, true] {
            let rm = [0.1, -0.2];
            let rv = [0.5, 1.5];
            let rep = gradcheck(
                |g, v| {
                    let stats = if running {
                        BatchStats::Running { mean: &rm, var: &rv }
                    } else {
                        BatchStats::Batch
                    };
                    let (y, _) = g.batchnorm2d(v[0], v[1], v[2], stats, 1e-5)?;
                    let w = g.constant(rnd(&[2, 2, 3, 3], 41));
                    let y = g.mul(y, w)?;
                    Ok(g.sum(y))
                },
                &[rnd(&[2, 2, 3, 3], 40), rnd(&[2], 42), rnd(&[2], 43)],
            )
            .unwrap();
            assert!(rep.max_rel_error < 1e-4, "running={running} {rep:?}");
        }
    }

    #[test]
    fn dropout_behaviour() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::ones([100_000]));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(g.dropout(x, 0.0, Some(&mut rng)).unwrap(), x);
        assert_eq!(g.dropout(x, 0.9, None::<&mut ChaCha8Rng>).unwrap(), x);
        let y = g.dropout(x, 0.5, Some(&mut rng)).unwrap();
        let mean = g.value(y).data().iter().map(|&v| v as f64).sum::<f64>() / 100_000.0;
        assert!((0.98..=1.02).contains(&mean), "{mean}");
        assert!(g.dropout(x, 1.0, Some(&mut rng)).is_err());
    }

    #[test]
    fn upsample_constant_and_gradcheck() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::full([1, 2, 3, 3], 2.5));
        let y = g.upsample_bilinear(x, 12, 12).unwrap();
        assert!(g.value(y).data().iter().all(|&v| (v - 2.5).abs() < 1e-12));
        let rep = gradcheck(
            |g, v| {
                let y = g.upsample_bilinear(v[0], 8, 6)?;
                let w = g.constant(rnd(&[1, 2, 8, 6], 51));
                let y = g.mul(y, w)?;
                Ok(g.sum(y))
            },
            &[rnd(&[1, 2, 4, 3], 50)],
        )
        .unwrap();
        assert!(rep.max_rel_error < 1e-4, "{rep:?}");
    }
}
