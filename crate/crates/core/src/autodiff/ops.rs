//! Elementwise, reduction and shape operations.

use std::sync::Arc;

use super::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{axis_extents, strides, Element, Tensor};

impl<E: Element> Graph<E> {
    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(E, E) -> E) -> Tensor<E> {
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        Tensor::new(x.shape().to_vec(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.zip_map(a, b, |x, y| x + y);
        Ok(self.push(
            "add",
            out,
            &[a, b],
            Box::new(|c| {
                vec![
                    c.needs[0].then(|| c.grad.to_vec()),
                    c.needs[1].then(|| c.grad.to_vec()),
                ]
            }),
        ))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.zip_map(a, b, |x, y| x - y);
        Ok(self.push(
            "sub",
            out,
            &[a, b],
            Box::new(|c| {
                vec![
                    c.needs[0].then(|| c.grad.to_vec()),
                    c.needs[1].then(|| c.grad.iter().map(|&g| -g).collect()),
                ]
            }),
        ))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.zip_map(a, b, |x, y| x * y);
        Ok(self.push(
            "mul",
            out,
            &[a, b],
            Box::new(|c| {
                let (x, y) = (c.inputs[0].data(), c.inputs[1].data());
                vec![
                    c.needs[0].then(|| c.grad.iter().zip(y).map(|(&g, &v)| g * v).collect()),
                    c.needs[1].then(|| c.grad.iter().zip(x).map(|(&g, &v)| g * v).collect()),
                ]
            }),
        ))
    }

    fn unary(
        &mut self,
        op: &'static str,
        a: Var,
        f: impl Fn(E) -> E,
        df: impl Fn(E, E) -> E + 'static,
    ) -> Var {
        let out = self.value(a).map(f);
        self.push(
            op,
            out,
            &[a],
            Box::new(move |c| {
                let (x, y) = (c.inputs[0].data(), c.output.data());
                vec![Some(
                    c.grad
                        .iter()
                        .zip(x.iter().zip(y))
                        .map(|(&g, (&xi, &yi))| g * df(xi, yi))
                        .collect(),
                )]
            }),
        )
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let s = E::of(s);
        self.unary("scale", a, move |x| x * s, move |_, _| s)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let s = E::of(s);
        self.unary("add_scalar", a, move |x| x + s, |_, _| E::one())
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(
            "relu",
            a,
            |x| if x > E::zero() { x } else { E::zero() },
            |x, _| if x > E::zero() { E::one() } else { E::zero() },
        )
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary("exp", a, |x| x.exp(), |_, y| y)
    }

    /// Natural log. Inputs must be positive.
    pub fn log(&mut self, a: Var) -> Var {
        self.unary("log", a, |x| x.ln(), |x, _| x.recip())
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary("square", a, |x| x * x, |x, _| x + x)
    }

    /// |x|, with subgradient 0 at the origin.
    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(
            "abs",
            a,
            |x| x.abs(),
            |x, _| {
                if x > E::zero() {
                    E::one()
                } else if x < E::zero() {
                    -E::one()
                } else {
                    E::zero()
                }
            },
        )
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let total: E = self.value(a).data().iter().copied().sum();
        let n = self.value(a).numel();
        self.push(
            "sum",
            Tensor::scalar(total),
            &[a],
            Box::new(move |c| vec![Some(vec![c.grad[0]; n])]),
        )
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).numel();
        let s = self.sum(a);
        self.scale(s, 1.0 / n as f64)
    }

    /// Sums over `axis`, removing it (a rank-1 input reduces to shape `[1]`).
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::dim("sum_axis", format!("axis {axis} for shape {shape:?}")));
        }
        let (outer, len, inner) = axis_extents(&shape, axis);
        let x = self.value(a).data();
        let mut out = vec![E::zero(); outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let src = &x[(o * len + l) * inner..(o * len + l + 1) * inner];
                let dst = &mut out[o * inner..(o + 1) * inner];
                dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s);
            }
        }
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let out = Tensor::new(out_shape, out)?;
        Ok(self.push(
            "sum_axis",
            out,
            &[a],
            Box::new(move |c| {
                let mut g = vec![E::zero(); outer * len * inner];
                for o in 0..outer {
                    let src = &c.grad[o * inner..(o + 1) * inner];
                    for l in 0..len {
                        g[(o * len + l) * inner..(o * len + l + 1) * inner].copy_from_slice(src);
                    }
                }
                vec![Some(g)]
            }),
        ))
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let len = *self
            .shape(a)
            .get(axis)
            .ok_or_else(|| Error::dim("mean_axis", format!("axis {axis} out of range")))?;
        let s = self.sum_axis(a, axis)?;
        Ok(self.scale(s, 1.0 / len as f64))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape.to_vec())?;
        Ok(self.push(
            "reshape",
            out,
            &[a],
            Box::new(|c| vec![Some(c.grad.to_vec())]),
        ))
    }

    /// General axis permutation: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::dim("permute", format!("bad permutation {perm:?} for {shape:?}")));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let in_strides = strides(&shape);
        let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
        let n = self.value(a).numel();
        // gather index for every output element
        let mut index = Vec::with_capacity(n);
        let mut counter = vec![0usize; out_shape.len()];
        for _ in 0..n {
            index.push(counter.iter().zip(&src_strides).map(|(c, s)| c * s).sum::<usize>());
            for d in (0..counter.len()).rev() {
                counter[d] += 1;
                if counter[d] < out_shape[d] {
                    break;
                }
                counter[d] = 0;
            }
        }
        let x = self.value(a).data();
        let out = Tensor::new(out_shape, index.iter().map(|&i| x[i]).collect())?;
        Ok(self.push(
            "permute",
            out,
            &[a],
            Box::new(move |c| {
                let mut g = vec![E::zero(); n];
                for (o, &i) in index.iter().enumerate() {
                    g[i] = c.grad[o];
                }
                vec![Some(g)]
            }),
        ))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        if self.shape(a).len() != 2 {
            return Err(Error::dim("transpose", format!("expected a matrix, got {:?}", self.shape(a))));
        }
        self.permute(a, &[1, 0])
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::dim(
                "narrow",
                format!("range {start}..{} on axis {axis} of {shape:?}", start + len),
            ));
        }
        let (outer, full, inner) = axis_extents(&shape, axis);
        let x = self.value(a).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            out.extend_from_slice(&x[(o * full + start) * inner..(o * full + start + len) * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let out = Tensor::new(out_shape, out)?;
        Ok(self.push(
            "narrow",
            out,
            &[a],
            Box::new(move |c| {
                let mut g = vec![E::zero(); outer * full * inner];
                for o in 0..outer {
                    g[(o * full + start) * inner..(o * full + start + len) * inner]
                        .copy_from_slice(&c.grad[o * len * inner..(o + 1) * len * inner]);
                }
                vec![Some(g)]
            }),
        ))
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::dim("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::dim("concat", format!("axis {axis} for {base:?}")));
        }
        let mut lens = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != base.len()
                || s.iter().zip(&base).enumerate().any(|(i, (x, y))| i != axis && x != y)
            {
                return Err(Error::shape("concat", &base, s));
            }
            lens.push(s[axis]);
        }
        let (outer, _, inner) = axis_extents(&base, axis);
        let total: usize = lens.iter().sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&p, &l) in parts.iter().zip(&lens) {
                let x = self.value(p).data();
                out.extend_from_slice(&x[o * l * inner..(o + 1) * l * inner]);
            }
        }
        let mut out_shape = base;
        out_shape[axis] = total;
        let out = Tensor::new(out_shape, out)?;
        Ok(self.push(
            "concat",
            out,
            parts,
            Box::new(move |c| {
                let mut grads: Vec<Vec<E>> = lens.iter().map(|&l| Vec::with_capacity(outer * l * inner)).collect();
                let mut off = 0;
                for _ in 0..outer {
                    for (g, &l) in grads.iter_mut().zip(&lens) {
                        g.extend_from_slice(&c.grad[off..off + l * inner]);
                        off += l * inner;
                    }
                }
                grads.into_iter().zip(&c.needs).map(|(g, &n)| n.then_some(g)).collect()
            }),
        ))
    }

    /// Picks one entry along `axis` per remaining position; `indices` is laid
    /// out in the row-major order of the output (input shape without `axis`).
    pub fn pick(&mut self, a: Var, axis: usize, indices: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::dim("pick", format!("axis {axis} for {shape:?}")));
        }
        let (outer, len, inner) = axis_extents(&shape, axis);
        if indices.len() != outer * inner {
            return Err(Error::dim(
                "pick",
                format!("{} indices for {} positions", indices.len(), outer * inner),
            ));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= len) {
            return Err(Error::Label { label: bad, classes: len });
        }
        let x = self.value(a).data();
        let src: Arc<Vec<usize>> = Arc::new(
            indices
                .iter()
                .enumerate()
                .map(|(pos, &k)| {
                    let (o, i) = (pos / inner, pos % inner);
                    (o * len + k) * inner + i
                })
                .collect(),
        );
        let out: Vec<E> = src.iter().map(|&s| x[s]).collect();
        let mut out_shape = shape;
        out_shape.remove(axis);
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let n = outer * len * inner;
        let out = Tensor::new(out_shape, out)?;
        Ok(self.push(
            "pick",
            out,
            &[a],
            Box::new(move |c| {
                let mut g = vec![E::zero(); n];
                for (o, &s) in src.iter().enumerate() {
                    g[s] += c.grad[o];
                }
                vec![Some(g)]
            }),
        ))
    }

    /// Remaps the trailing two (spatial) axes: output pixel `j` of every plane
    /// reads input pixel `map[j]`. Crops, quarter turns and patch shuffles are
    /// all instances of this.
    pub fn spatial_remap(
        &mut self,
        a: Var,
        out_hw: (usize, usize),
        map: Arc<Vec<usize>>,
    ) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let x = self.value(a);
        let (h, w) = x.spatial()?;
        if map.len() != out_hw.0 * out_hw.1 || map.iter().any(|&m| m >= h * w) {
            return Err(Error::dim(
                "spatial_remap",
                format!("map of {} entries for {h}x{w} -> {out_hw:?}", map.len()),
            ));
        }
        let planes = x.planes();
        let plane_in = h * w;
        let plane_out = map.len();
        let xd = x.data();
        let mut out = Vec::with_capacity(planes * plane_out);
        for p in 0..planes {
            let base = p * plane_in;
            out.extend(map.iter().map(|&m| xd[base + m]));
        }
        let mut out_shape = shape;
        let r = out_shape.len();
        out_shape[r - 2] = out_hw.0;
        out_shape[r - 1] = out_hw.1;
        let out = Tensor::new(out_shape, out)?;
        Ok(self.push(
            "spatial_remap",
            out,
            &[a],
            Box::new(move |c| {
                let mut g = vec![E::zero(); planes * plane_in];
                for p in 0..planes {
                    let gi = &mut g[p * plane_in..(p + 1) * plane_in];
                    let go = &c.grad[p * plane_out..(p + 1) * plane_out];
                    for (&m, &v) in map.iter().zip(go) {
                        gi[m] += v;
                    }
                }
                vec![Some(g)]
            }),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    fn ramp(shape: &[usize]) -> Tensor<f64> {
        Tensor::from_fn(shape.to_vec(), |i| ((i as f64) * 0.731).sin() + 0.1)
    }

    #[test]
    fn elementwise_values() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(t(&[3], &[1.0, -2.0, 3.0]));
        let b = g.constant(t(&[3], &[4.0, 5.0, -6.0]));
        let s = g.sub(a, b).unwrap();
        assert_eq!(g.value(s).data(), &[-3.0, -7.0, 9.0]);
        let r = g.relu(a);
        assert_eq!(g.value(r).data(), &[1.0, 0.0, 3.0]);
        let ab = g.abs(b);
        assert_eq!(g.value(ab).data(), &[4.0, 5.0, 6.0]);
        let bad = g.constant(t(&[2], &[0.0, 0.0]));
        assert!(g.add(a, bad).is_err());
    }

    #[test]
    fn sum_axis_and_permute_values() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let s0 = g.sum_axis(x, 0).unwrap();
        let s1 = g.sum_axis(x, 1).unwrap();
        assert_eq!(g.value(s0).data(), &[5.0, 7.0, 9.0]);
        assert_eq!(g.value(s1).data(), &[6.0, 15.0]);
        let tr = g.transpose(x).unwrap();
        assert_eq!(g.shape(tr), &[3, 2]);
        assert_eq!(g.value(tr).data(), &[1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
    }

    #[test]
    fn narrow_concat_inverse() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(ramp(&[2, 5, 3]));
        let a = g.narrow(x, 1, 0, 2).unwrap();
        let b = g.narrow(x, 1, 2, 3).unwrap();
        let y = g.concat(&[a, b], 1).unwrap();
        assert_eq!(g.value(y), g.value(x));
        assert!(g.narrow(x, 1, 4, 2).is_err());
    }

    #[test]
    fn pick_rejects_out_of_range() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(ramp(&[1, 3, 2]));
        assert!(matches!(g.pick(x, 1, &[0, 3]), Err(Error::Label { label: 3, .. })));
        let p = g.pick(x, 1, &[2, 0]).unwrap();
        let xv = g.value(x).data().to_vec();
        assert_eq!(g.value(p).data(), &[xv[4], xv[1]]);
    }

    #[test]
    fn gradients_of_primitives() {
        type F = fn(&mut Graph<f64>, &[Var]) -> Result<Var>;
        let cases: Vec<(&str, Vec<Tensor<f64>>, F)> = vec![
            ("add", vec![ramp(&[2, 3]), ramp(&[2, 3]).map(|v| v * 0.3)], |g, v| {
                let y = g.add(v[0], v[1])?;
                let y = g.square(y);
                Ok(g.sum(y))
            }),
            ("sub_mul", vec![ramp(&[4]), ramp(&[4]).map(|v| v - 0.5)], |g, v| {
                let y = g.sub(v[0], v[1])?;
                let y = g.mul(y, v[0])?;
                Ok(g.sum(y))
            }),
            ("exp_log", vec![ramp(&[5]).map(|v| v.abs() + 0.5)], |g, v| {
                let y = g.log(v[0]);
                let y = g.exp(y);
                let y = g.square(y);
                Ok(g.mean(y))
            }),
            ("relu_abs", vec![ramp(&[6]).map(|v| v + 0.05)], |g, v| {
                let y = g.relu(v[0]);
                let z = g.abs(v[0]);
                let w = g.mul(y, z)?;
                Ok(g.sum(w))
            }),
            ("sum_axis", vec![ramp(&[2, 3, 4])], |g, v| {
                let y = g.mean_axis(v[0], 1)?;
                let y = g.square(y);
                Ok(g.sum(y))
            }),
            ("permute", vec![ramp(&[2, 3, 4])], |g, v| {
                let y = g.permute(v[0], &[2, 0, 1])?;
                let w = g.constant(ramp(&[4, 2, 3]));
                let y = g.mul(y, w)?;
                Ok(g.sum(y))
            }),
            ("narrow_concat", vec![ramp(&[3, 4])], |g, v| {
                let a = g.narrow(v[0], 1, 1, 2)?;
                let b = g.narrow(v[0], 1, 0, 3)?;
                let y = g.concat(&[a, b, a], 1)?;
                let y = g.square(y);
                Ok(g.sum(y))
            }),
            ("pick", vec![ramp(&[2, 3, 2])], |g, v| {
                let y = g.pick(v[0], 1, &[0, 2, 1, 1])?;
                let y = g.square(y);
                Ok(g.sum(y))
            }),
            ("remap", vec![ramp(&[2, 3, 3])], |g, v| {
                let map = Arc::new(vec![8, 0, 4, 4]);
                let y = g.spatial_remap(v[0], (2, 2), map)?;
                let y = g.square(y);
                Ok(g.sum(y))
            }),
        ];
        for (name, inputs, f) in cases {
            let rep = gradcheck(f, &inputs).unwrap();
            assert!(rep.max_rel_error < 1e-4, "{name}: {rep:?}");
        }
    }
}
