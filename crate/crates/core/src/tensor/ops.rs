//! Element-wise, shape and reduction ops.

use super::kernels;
use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::par::Exec;

/// `(outer, len, inner)` sizes around `axis`.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_parts(a.shape().to_vec(), data)
}

impl Tape {
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("add", self.value(a), self.value(b))?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x + y);
        Ok(self.push(out, &[a, b], |g, _, _| vec![Some(g.clone()), Some(g.clone())]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("sub", self.value(a), self.value(b))?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x - y);
        Ok(self.push(out, &[a, b], |g, _, _| vec![Some(g.clone()), Some(g.map(|v| -v))]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("mul", self.value(a), self.value(b))?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x * y);
        Ok(self.push(out, &[a, b], |g, inp, _| {
            vec![Some(zip_map(g, inp[1], |g, y| g * y)), Some(zip_map(g, inp[0], |g, x| g * x))]
        }))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("div", self.value(a), self.value(b))?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x / y);
        Ok(self.push(out, &[a, b], |g, inp, out| {
            let da = zip_map(g, inp[1], |g, y| g / y);
            let q = zip_map(out, inp[1], |q, y| q / y);
            let db = zip_map(g, &q, |g, q| -g * q);
            vec![Some(da), Some(db)]
        }))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|v| v * s);
        self.push(out, &[a], move |g, _, _| vec![Some(g.map(|v| v * s))])
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|v| v + s);
        self.push(out, &[a], |g, _, _| vec![Some(g.clone())])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| v.max(0.0));
        self.push(out, &[a], |g, inp, _| {
            vec![Some(zip_map(g, inp[0], |g, x| if x > 0.0 { g } else { 0.0 }))]
        })
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        self.push(out, &[a], |g, _, out| vec![Some(zip_map(g, out, |g, s| g * s * (1.0 - s)))])
    }

    /// Clamps into `[lo, hi]`; zero gradient where clamped.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let out = self.value(a).map(|v| v.clamp(lo, hi));
        self.push(out, &[a], move |g, inp, _| {
            vec![Some(zip_map(g, inp[0], |g, x| if x > lo && x < hi { g } else { 0.0 }))]
        })
    }

    /// `max(a, floor)` element-wise; used as a division guard.
    pub fn max_scalar(&mut self, a: Var, floor: f64) -> Var {
        let out = self.value(a).map(|v| v.max(floor));
        self.push(out, &[a], move |g, inp, _| {
            vec![Some(zip_map(g, inp[0], |g, x| if x > floor { g } else { 0.0 }))]
        })
    }

    /// `ln(p / (1 - p))` for `p` in `(0, 1)`.
    pub fn logit(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|p| (p / (1.0 - p)).ln());
        self.push(out, &[a], |g, inp, _| {
            vec![Some(zip_map(g, inp[0], |g, p| g / (p * (1.0 - p))))]
        })
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        self.push(out, &[a], |g, inp, _| vec![Some(Tensor::full(inp[0].shape().to_vec(), g.item()))])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).numel().max(1) as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Weighted sum of scalar vars, `sum_i w_i * x_i`.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        for &(v, _) in terms {
            if self.value(v).numel() != 1 {
                return Err(Error::shape("weighted_sum", "terms must be scalars"));
            }
        }
        let weights: Vec<f64> = terms.iter().map(|t| t.1).collect();
        let vars: Vec<Var> = terms.iter().map(|t| t.0).collect();
        let mut total = 0.0;
        for (v, w) in vars.iter().zip(&weights) {
            total += w * self.value(*v).item();
        }
        Ok(self.push(Tensor::scalar(total), &vars, move |g, _, _| {
            weights.iter().map(|w| Some(Tensor::scalar(g.item() * w))).collect()
        }))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape.to_vec())?;
        Ok(self.push(out, &[a], |g, inp, _| {
            vec![Some(Tensor::from_parts(inp[0].shape().to_vec(), g.data().to_vec()))]
        }))
    }

    /// General axis permutation: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let x = self.value(a);
        let rank = x.rank();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::shape("permute", format!("bad permutation {perm:?} for rank {rank}")));
        }
        let out = permute_tensor(x, perm);
        let mut inv = vec![0; rank];
        for (i, &p) in perm.iter().enumerate() {
            inv[p] = i;
        }
        Ok(self.push(out, &[a], move |g, _, _| vec![Some(permute_tensor(g, &inv))]))
    }

    /// Concatenation along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self.value(*parts.first().ok_or_else(|| Error::shape("concat", "no inputs"))?).shape().to_vec();
        if axis >= first.len() {
            return Err(Error::shape("concat", format!("axis {axis} out of range for {first:?}")));
        }
        let mut lens = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.value(p).shape();
            let compatible = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::shape("concat", format!("{s:?} vs {first:?} along axis {axis}")));
            }
            lens.push(s[axis]);
        }
        let (outer, _, inner) = axis_split(&first, axis);
        let total: usize = lens.iter().sum();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&p, &len) in parts.iter().zip(&lens) {
                data.extend_from_slice(&self.value(p).data()[o * len * inner..][..len * inner]);
            }
        }
        let mut shape = first.clone();
        shape[axis] = total;
        let out = Tensor::from_parts(shape, data);
        Ok(self.push(out, parts, move |g, inp, _| {
            let mut grads: Vec<Vec<f64>> = lens.iter().map(|&l| Vec::with_capacity(outer * l * inner)).collect();
            for o in 0..outer {
                let mut off = o * total * inner;
                for (gr, &len) in grads.iter_mut().zip(&lens) {
                    gr.extend_from_slice(&g.data()[off..off + len * inner]);
                    off += len * inner;
                }
            }
            grads
                .into_iter()
                .zip(inp)
                .map(|(d, x)| Some(Tensor::from_parts(x.shape().to_vec(), d)))
                .collect()
        }))
    }

    /// `len` entries of `axis` starting at `start`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.value(a).shape().to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(Error::shape("slice", format!("[{start}, {}) of axis {axis} in {shape:?}", start + len)));
        }
        let (outer, n, inner) = axis_split(&shape, axis);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            data.extend_from_slice(&self.value(a).data()[(o * n + start) * inner..][..len * inner]);
        }
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        let out = Tensor::from_parts(out_shape, data);
        Ok(self.push(out, &[a], move |g, _, _| {
            let mut d = vec![0.0; outer * n * inner];
            for o in 0..outer {
                d[(o * n + start) * inner..][..len * inner].copy_from_slice(&g.data()[o * len * inner..][..len * inner]);
            }
            vec![Some(Tensor::from_parts(shape.clone(), d))]
        }))
    }

    /// Numerically stable softmax along `axis` (max subtracted first).
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let x = self.value(a);
        if axis >= x.rank() {
            return Err(Error::shape("softmax", format!("axis {axis} for {:?}", x.shape())));
        }
        let (outer, n, inner) = axis_split(x.shape(), axis);
        let mut y = vec![0.0; x.numel()];
        let xd = x.data();
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| (o * n + k) * inner + i;
                let m = (0..n).map(|k| xd[at(k)]).fold(f64::NEG_INFINITY, f64::max);
                let mut s = 0.0;
                for k in 0..n {
                    let e = (xd[at(k)] - m).exp();
                    y[at(k)] = e;
                    s += e;
                }
                for k in 0..n {
                    y[at(k)] /= s;
                }
            }
        }
        let out = Tensor::from_parts(x.shape().to_vec(), y);
        Ok(self.push(out, &[a], move |g, _, y| {
            let (gd, yd) = (g.data(), y.data());
            let mut dx = vec![0.0; yd.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |k: usize| (o * n + k) * inner + i;
                    let dot: f64 = (0..n).map(|k| gd[at(k)] * yd[at(k)]).sum();
                    for k in 0..n {
                        dx[at(k)] = yd[at(k)] * (gd[at(k)] - dot);
                    }
                }
            }
            vec![Some(Tensor::from_parts(y.shape().to_vec(), dx))]
        }))
    }

    /// Matrix product of rank-2 `[m,k] x [k,n]` or batched rank-3 `[b,m,k] x [b,k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape().to_vec(), self.value(b).shape().to_vec());
        let (batch, m, k, n) = match (sa.as_slice(), sb.as_slice()) {
            ([m, k], [k2, n]) if k == k2 => (1, *m, *k, *n),
            ([b1, m, k], [b2, k2, n]) if k == k2 && b1 == b2 => (*b1, *m, *k, *n),
            _ => return Err(Error::shape("matmul", format!("{sa:?} x {sb:?}"))),
        };
        let exec = Exec::default();
        let c = kernels::matmul(exec, batch, m, k, n, self.value(a).data(), self.value(b).data());
        let mut shape = sa[..sa.len() - 1].to_vec();
        shape.push(n);
        let out = Tensor::from_parts(shape, c);
        Ok(self.push(out, &[a, b], move |g, inp, _| {
            let bt = kernels::transpose(batch, k, n, inp[1].data());
            let da = kernels::matmul(exec, batch, m, n, k, g.data(), &bt);
            let at = kernels::transpose(batch, m, k, inp[0].data());
            let db = kernels::matmul(exec, batch, k, m, n, &at, g.data());
            vec![
                Some(Tensor::from_parts(inp[0].shape().to_vec(), da)),
                Some(Tensor::from_parts(inp[1].shape().to_vec(), db)),
            ]
        }))
    }

    /// Adds `v[i]` to every element whose index along `axis` is `i`.
    pub fn add_along(&mut self, x: Var, v: Var, axis: usize) -> Result<Var> {
        let (outer, n, inner) = self.check_along("add_along", x, v, axis)?;
        let vd = self.value(v).data().to_vec();
        let mut y = self.value(x).data().to_vec();
        for o in 0..outer {
            for k in 0..n {
                for e in &mut y[(o * n + k) * inner..][..inner] {
                    *e += vd[k];
                }
            }
        }
        let out = Tensor::from_parts(self.value(x).shape().to_vec(), y);
        Ok(self.push(out, &[x, v], move |g, inp, _| {
            let mut dv = vec![0.0; n];
            for o in 0..outer {
                for (k, d) in dv.iter_mut().enumerate() {
                    *d += g.data()[(o * n + k) * inner..][..inner].iter().sum::<f64>();
                }
            }
            vec![Some(g.clone()), Some(Tensor::from_parts(inp[1].shape().to_vec(), dv))]
        }))
    }

    /// Multiplies every element whose index along `axis` is `i` by `v[i]`.
    pub fn mul_along(&mut self, x: Var, v: Var, axis: usize) -> Result<Var> {
        let (outer, n, inner) = self.check_along("mul_along", x, v, axis)?;
        let vd = self.value(v).data().to_vec();
        let mut y = self.value(x).data().to_vec();
        for o in 0..outer {
            for k in 0..n {
                for e in &mut y[(o * n + k) * inner..][..inner] {
                    *e *= vd[k];
                }
            }
        }
        let out = Tensor::from_parts(self.value(x).shape().to_vec(), y);
        Ok(self.push(out, &[x, v], move |g, inp, _| {
            let (xd, vd) = (inp[0].data(), inp[1].data());
            let mut dx = vec![0.0; xd.len()];
            let mut dv = vec![0.0; n];
            for o in 0..outer {
                for k in 0..n {
                    let r = (o * n + k) * inner;
                    for i in r..r + inner {
                        dx[i] = g.data()[i] * vd[k];
                        dv[k] += g.data()[i] * xd[i];
                    }
                }
            }
            vec![
                Some(Tensor::from_parts(inp[0].shape().to_vec(), dx)),
                Some(Tensor::from_parts(inp[1].shape().to_vec(), dv)),
            ]
        }))
    }

    fn check_along(&self, op: &'static str, x: Var, v: Var, axis: usize) -> Result<(usize, usize, usize)> {
        let sx = self.value(x).shape();
        if axis >= sx.len() || self.value(v).numel() != sx[axis] {
            return Err(Error::shape(op, format!("{:?} along axis {axis} of {sx:?}", self.value(v).shape())));
        }
        Ok(axis_split(sx, axis))
    }

    /// Scales each fibre along `axis` to unit L2 norm: `x / max(|x|, eps)`.
    pub fn l2_normalize(&mut self, a: Var, axis: usize, eps: f64) -> Result<Var> {
        let x = self.value(a);
        if axis >= x.rank() {
            return Err(Error::shape("l2_normalize", format!("axis {axis} for {:?}", x.shape())));
        }
        let (outer, n, inner) = axis_split(x.shape(), axis);
        let xd = x.data();
        let mut norms = vec![0.0; outer * inner];
        let mut y = vec![0.0; xd.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| (o * n + k) * inner + i;
                let nr = (0..n).map(|k| xd[at(k)] * xd[at(k)]).sum::<f64>().sqrt();
                norms[o * inner + i] = nr;
                let d = nr.max(eps);
                for k in 0..n {
                    y[at(k)] = xd[at(k)] / d;
                }
            }
        }
        let out = Tensor::from_parts(x.shape().to_vec(), y);
        Ok(self.push(out, &[a], move |g, inp, y| {
            let (gd, yd) = (g.data(), y.data());
            let mut dx = vec![0.0; yd.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |k: usize| (o * n + k) * inner + i;
                    let nr = norms[o * inner + i];
                    if nr > eps {
                        let dot: f64 = (0..n).map(|k| gd[at(k)] * yd[at(k)]).sum();
                        for k in 0..n {
                            dx[at(k)] = (gd[at(k)] - yd[at(k)] * dot) / nr;
                        }
                    } else {
                        for k in 0..n {
                            dx[at(k)] = gd[at(k)] / eps;
                        }
                    }
                }
            }
            vec![Some(Tensor::from_parts(inp[0].shape().to_vec(), dx))]
        }))
    }
}

pub(crate) fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn permute_tensor(x: &Tensor, perm: &[usize]) -> Tensor {
    let shape = x.shape();
    let rank = shape.len();
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let mut in_strides = vec![1; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(x.numel());
    let mut idx = vec![0usize; rank];
    let xd = x.data();
    for _ in 0..x.numel() {
        let off: usize = idx.iter().zip(&strides).map(|(i, s)| i * s).sum();
        out.push(xd[off]);
        for d in (0..rank).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    Tensor::from_parts(out_shape, out)
}
