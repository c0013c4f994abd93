//! Convolutions, batch normalization and nearest upsampling on `[B, C, H, W]`.

use super::kernels::{self, ConvGeom};
use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::par::Exec;

/// Per-channel statistics observed by a training-mode batch norm.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased variance, the quantity tracked by running estimates.
    pub var: Vec<f64>,
}

/// Which statistics a batch norm normalizes with.
#[derive(Clone, Copy, Debug)]
pub enum NormStats<'a> {
    Batch,
    Running { mean: &'a [f64], var: &'a [f64] },
}

fn dims4(op: &'static str, t: &Tensor) -> Result<[usize; 4]> {
    match *t.shape() {
        [a, b, c, d] => Ok([a, b, c, d]),
        _ => Err(Error::shape(op, format!("expected rank-4 tensor, got {:?}", t.shape()))),
    }
}

impl Tape {
    /// Cross-correlation with optional per-output-channel bias.
    pub fn conv2d(&mut self, x: Var, w: Var, bias: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        self.conv2d_grouped(x, w, bias, stride, pad, 1)
    }

    /// Grouped convolution; `groups == channels` gives a depth-wise conv.
    pub fn conv2d_grouped(
        &mut self,
        x: Var,
        w: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
        groups: usize,
    ) -> Result<Var> {
        let [b, c, h, wd] = dims4("conv2d", self.value(x))?;
        let [o, cg, k, k2] = dims4("conv2d", self.value(w))?;
        if stride == 0 || groups == 0 {
            return Err(Error::shape("conv2d", "stride and groups must be >= 1"));
        }
        if k != k2 {
            return Err(Error::shape("conv2d", format!("kernel must be square, got {k}x{k2}")));
        }
        if c % groups != 0 || o % groups != 0 || cg != c / groups {
            return Err(Error::shape(
                "conv2d",
                format!("input has {c} channels but kernel {:?} expects {} (groups {groups})", self.value(w).shape(), cg * groups),
            ));
        }
        if k > h + 2 * pad || k > wd + 2 * pad {
            return Err(Error::shape("conv2d", format!("kernel {k} larger than padded input {h}x{wd} (pad {pad})")));
        }
        let g = ConvGeom {
            batch: b,
            in_ch: c,
            out_ch: o,
            groups,
            k,
            stride,
            pad,
            in_h: h,
            in_w: wd,
            out_h: (h + 2 * pad - k) / stride + 1,
            out_w: (wd + 2 * pad - k) / stride + 1,
        };
        let exec = Exec::default();
        let y = kernels::conv_forward(exec, &g, self.value(x).data(), self.value(w).data());
        let out = Tensor::from_parts(vec![b, o, g.out_h, g.out_w], y);
        let v = self.push(out, &[x, w], move |gy, inp, _| {
            let dx = kernels::conv_backward_input(exec, &g, gy.data(), inp[1].data());
            let dw = kernels::conv_backward_weight(exec, &g, inp[0].data(), gy.data());
            vec![
                Some(Tensor::from_parts(inp[0].shape().to_vec(), dx)),
                Some(Tensor::from_parts(inp[1].shape().to_vec(), dw)),
            ]
        });
        match bias {
            Some(bv) => self.add_along(v, bv, 1),
            None => Ok(v),
        }
    }

    /// Transposed convolution with weight layout `[C_in, C_out, k, k]`;
    /// output side `(H - 1) * stride - 2 * pad + k`. Adjoint of [`Tape::conv2d`].
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, bias: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let [b, ci, h, wd] = dims4("conv_transpose2d", self.value(x))?;
        let [wi, co, k, k2] = dims4("conv_transpose2d", self.value(w))?;
        if stride == 0 {
            return Err(Error::shape("conv_transpose2d", "stride must be >= 1"));
        }
        if wi != ci || k != k2 {
            return Err(Error::shape(
                "conv_transpose2d",
                format!("input has {ci} channels, kernel is {:?}", self.value(w).shape()),
            ));
        }
        let oh = ((h - 1) * stride + k).checked_sub(2 * pad).filter(|&v| v > 0);
        let ow = ((wd - 1) * stride + k).checked_sub(2 * pad).filter(|&v| v > 0);
        let (Some(oh), Some(ow)) = (oh, ow) else {
            return Err(Error::shape("conv_transpose2d", "padding leaves an empty output"));
        };
        // Same geometry as the conv whose input gradient this computes.
        let g = ConvGeom {
            batch: b,
            in_ch: co,
            out_ch: ci,
            groups: 1,
            k,
            stride,
            pad,
            in_h: oh,
            in_w: ow,
            out_h: h,
            out_w: wd,
        };
        let exec = Exec::default();
        let y = kernels::conv_backward_input(exec, &g, self.value(x).data(), self.value(w).data());
        let out = Tensor::from_parts(vec![b, co, oh, ow], y);
        let v = self.push(out, &[x, w], move |gy, inp, _| {
            let dx = kernels::conv_forward(exec, &g, gy.data(), inp[1].data());
            let dw = kernels::conv_backward_weight(exec, &g, gy.data(), inp[0].data());
            vec![
                Some(Tensor::from_parts(inp[0].shape().to_vec(), dx)),
                Some(Tensor::from_parts(inp[1].shape().to_vec(), dw)),
            ]
        });
        match bias {
            Some(bv) => self.add_along(v, bv, 1),
            None => Ok(v),
        }
    }

    /// Per-channel batch normalization over `(B, H, W)`.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: NormStats<'_>,
        eps: f64,
    ) -> Result<(Var, Option<BatchStats>)> {
        let [b, c, h, w] = dims4("batch_norm", self.value(x))?;
        if self.value(gamma).numel() != c || self.value(beta).numel() != c {
            return Err(Error::shape("batch_norm", format!("{c} channels but scale/shift of length {}", self.value(gamma).numel())));
        }
        let plane = h * w;
        let count = (b * plane) as f64;
        let xd = self.value(x).data();
        let (mean, var_biased, observed) = match stats {
            NormStats::Batch => {
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for ch in 0..c {
                    let mut s = 0.0;
                    for bi in 0..b {
                        s += xd[(bi * c + ch) * plane..][..plane].iter().sum::<f64>();
                    }
                    let m = s / count;
                    let mut q = 0.0;
                    for bi in 0..b {
                        q += xd[(bi * c + ch) * plane..][..plane].iter().map(|v| (v - m) * (v - m)).sum::<f64>();
                    }
                    mean[ch] = m;
                    var[ch] = q / count;
                }
                let unbiased = var.iter().map(|v| v * count / (count - 1.0).max(1.0)).collect();
                let obs = BatchStats { mean: mean.clone(), var: unbiased };
                (mean, var, Some(obs))
            }
            NormStats::Running { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return Err(Error::shape("batch_norm", "running statistics length mismatch"));
                }
                (mean.to_vec(), var.to_vec(), None)
            }
        };
        let inv_std: Vec<f64> = var_biased.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (gd, bd) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; xd.len()];
        let mut y = vec![0.0; xd.len()];
        for bi in 0..b {
            for ch in 0..c {
                let r = (bi * c + ch) * plane;
                for i in r..r + plane {
                    xhat[i] = (xd[i] - mean[ch]) * inv_std[ch];
                    y[i] = gd[ch] * xhat[i] + bd[ch];
                }
            }
        }
        let batch_mode = observed.is_some();
        let out = Tensor::from_parts(vec![b, c, h, w], y);
        let v = self.push(out, &[x, gamma, beta], move |gy, inp, _| {
            let (g, gam) = (gy.data(), inp[1].data());
            let mut dgamma = vec![0.0; c];
            let mut dbeta = vec![0.0; c];
            let mut dx = vec![0.0; g.len()];
            for ch in 0..c {
                let (mut sg, mut sgx) = (0.0, 0.0);
                for bi in 0..b {
                    let r = (bi * c + ch) * plane;
                    for i in r..r + plane {
                        sg += g[i];
                        sgx += g[i] * xhat[i];
                    }
                }
                dgamma[ch] = sgx;
                dbeta[ch] = sg;
                let k = gam[ch] * inv_std[ch];
                for bi in 0..b {
                    let r = (bi * c + ch) * plane;
                    for i in r..r + plane {
                        dx[i] = if batch_mode {
                            k * (g[i] - sg / count - xhat[i] * sgx / count)
                        } else {
                            k * g[i]
                        };
                    }
                }
            }
            vec![
                Some(Tensor::from_parts(inp[0].shape().to_vec(), dx)),
                Some(Tensor::from_parts(inp[1].shape().to_vec(), dgamma)),
                Some(Tensor::from_parts(inp[2].shape().to_vec(), dbeta)),
            ]
        });
        Ok((v, observed))
    }

    /// Repeats every pixel `factor x factor` times.
    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Result<Var> {
        let [b, c, h, w] = dims4("upsample_nearest", self.value(x))?;
        if factor == 0 {
            return Err(Error::shape("upsample_nearest", "factor must be >= 1"));
        }
        let (oh, ow) = (h * factor, w * factor);
        let xd = self.value(x).data();
        let mut y = vec![0.0; b * c * oh * ow];
        for p in 0..b * c {
            for oy in 0..oh {
                for ox in 0..ow {
                    y[(p * oh + oy) * ow + ox] = xd[(p * h + oy / factor) * w + ox / factor];
                }
            }
        }
        let out = Tensor::from_parts(vec![b, c, oh, ow], y);
        Ok(self.push(out, &[x], move |g, inp, _| {
            let mut dx = vec![0.0; b * c * h * w];
            for p in 0..b * c {
                for oy in 0..oh {
                    for ox in 0..ow {
                        dx[(p * h + oy / factor) * w + ox / factor] += g.data()[(p * oh + oy) * ow + ox];
                    }
                }
            }
            vec![Some(Tensor::from_parts(inp[0].shape().to_vec(), dx))]
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::finite_diff_check_params;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
    }

    /// Direct nested-loop cross-correlation, independent of the kernels module.
    fn conv_reference(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Tensor {
        let [b, c, h, wd] = dims4("ref", x).unwrap();
        let [o, _, k, _] = dims4("ref", w).unwrap();
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (wd + 2 * pad - k) / stride + 1;
        let mut y = Tensor::zeros([b, o, oh, ow]);
        for bi in 0..b {
            for oc in 0..o {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut s = 0.0;
                        for ci in 0..c {
                            for ki in 0..k {
                                for kj in 0..k {
                                    let iy = (oy * stride + ki) as isize - pad as isize;
                                    let ix = (ox * stride + kj) as isize - pad as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                        continue;
                                    }
                                    s += x.data()[((bi * c + ci) * h + iy as usize) * wd + ix as usize]
                                        * w.data()[((oc * c + ci) * k + ki) * k + kj];
                                }
                            }
                        }
                        y.data_mut()[((bi * o + oc) * oh + oy) * ow + ox] = s;
                    }
                }
            }
        }
        y
    }

    #[test]
    fn ones_kernel_sums_ones() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::ones([1, 1, 3, 3]));
        let w = t.constant(Tensor::ones([1, 1, 3, 3]));
        let y = t.conv2d(x, w, None, 1, 0).unwrap();
        assert_eq!(t.shape(y), &[1, 1, 1, 1]);
        assert_eq!(t.value(y).item(), 9.0);
    }

    #[test]
    fn identity_kernel_reproduces_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let xin = random(&[2, 1, 4, 5], &mut rng);
        let mut t = Tape::new();
        let x = t.constant(xin.clone());
        let w = t.constant(Tensor::ones([1, 1, 1, 1]));
        let y = t.conv2d(x, w, None, 1, 0).unwrap();
        assert_eq!(t.value(y), &xin);
        let yt = t.conv_transpose2d(x, w, None, 1, 0).unwrap();
        assert_eq!(t.value(yt), &xin);
    }

    #[test]
    fn conv_matches_nested_loop_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let xin = random(&[1, 2, 5, 5], &mut rng);
        let win = random(&[3, 2, 3, 3], &mut rng);
        for (stride, pad) in [(1, 0), (1, 1), (2, 1), (2, 0), (3, 2)] {
            let mut t = Tape::new();
            let x = t.constant(xin.clone());
            let w = t.constant(win.clone());
            let y = t.conv2d(x, w, None, stride, pad).unwrap();
            let r = conv_reference(&xin, &win, stride, pad);
            assert_eq!(t.shape(y), r.shape());
            assert!(t.value(y).max_abs_diff(&r) < 1e-12, "stride {stride} pad {pad}");
        }
    }

    #[test]
    fn conv_rejects_channel_mismatch_and_oversized_kernel() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::zeros([1, 2, 4, 4]));
        let w = t.constant(Tensor::zeros([3, 3, 3, 3]));
        let err = t.conv2d(x, w, None, 1, 1).unwrap_err();
        assert!(err.to_string().contains("channels"), "{err}");
        let big = t.constant(Tensor::zeros([1, 2, 7, 7]));
        assert!(t.conv2d(x, big, None, 1, 1).is_err());
        let ok = t.constant(Tensor::zeros([1, 2, 3, 3]));
        assert!(t.conv2d(x, ok, None, 0, 1).is_err());
    }

    #[test]
    fn transposed_single_pixel_broadcast() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::full([1, 1, 1, 1], 2.5));
        let w = t.constant(Tensor::ones([1, 1, 2, 2]));
        let y = t.conv_transpose2d(x, w, None, 2, 0).unwrap();
        assert_eq!(t.shape(y), &[1, 1, 2, 2]);
        assert_eq!(t.value(y).data(), &[2.5; 4]);
    }

    #[test]
    fn transposed_is_adjoint_of_conv() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for (stride, pad, k, h, w) in [(1, 0, 3, 6, 7), (2, 1, 3, 7, 9), (2, 0, 2, 8, 6), (3, 1, 3, 10, 7)] {
            let xin = random(&[2, 3, h, w], &mut rng);
            let win = random(&[4, 3, k, k], &mut rng);
            let mut t = Tape::new();
            let x = t.constant(xin.clone());
            let w = t.constant(win.clone());
            let y = t.conv2d(x, w, None, stride, pad).unwrap();
            let yin = random(t.shape(y), &mut rng);
            let yv = t.constant(yin.clone());
            let xt = t.conv_transpose2d(yv, w, None, stride, pad).unwrap();
            assert_eq!(t.shape(xt), xin.shape());
            let lhs = t.value(y).dot(&yin);
            let rhs = xin.dot(t.value(xt));
            assert!((lhs - rhs).abs() < 1e-10, "stride {stride}: {lhs} vs {rhs}");
        }
    }

    #[test]
    fn conv_family_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let inputs = vec![
            random(&[2, 4, 5, 6], &mut rng),
            random(&[6, 4, 3, 3], &mut rng),
            random(&[6], &mut rng),
            random(&[4, 1, 3, 3], &mut rng),
            random(&[6, 3, 2, 2], &mut rng),
        ];
        let err = finite_diff_check_params(
            &|t: &mut Tape, v: &[Var]| {
                let y = t.conv2d(v[0], v[1], Some(v[2]), 2, 1)?;
                let dw = t.conv2d_grouped(v[0], v[3], None, 1, 1, 4)?;
                let up = t.conv_transpose2d(y, v[4], None, 2, 0)?;
                let a = t.mul(up, up)?;
                let b = t.mul(dw, dw)?;
                let sa = t.sum(a);
                let sb = t.sum(b);
                t.weighted_sum(&[(sa, 1.0), (sb, 0.5)])
            },
            &inputs,
            1e-5,
            None,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn depthwise_matches_per_channel_conv() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let xin = random(&[1, 3, 5, 5], &mut rng);
        let win = random(&[3, 1, 3, 3], &mut rng);
        let mut t = Tape::new();
        let x = t.constant(xin.clone());
        let w = t.constant(win.clone());
        let y = t.conv2d_grouped(x, w, None, 1, 1, 3).unwrap();
        for c in 0..3 {
            let xc = Tensor::new([1, 1, 5, 5], xin.data()[c * 25..(c + 1) * 25].to_vec()).unwrap();
            let wc = Tensor::new([1, 1, 3, 3], win.data()[c * 9..(c + 1) * 9].to_vec()).unwrap();
            let r = conv_reference(&xc, &wc, 1, 1);
            let got = &t.value(y).data()[c * 25..(c + 1) * 25];
            for (a, b) in got.iter().zip(r.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn batch_norm_gradients_and_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let inputs = vec![random(&[2, 3, 4, 4], &mut rng), random(&[3], &mut rng), random(&[3], &mut rng)];
        let weights = random(&[2, 3, 4, 4], &mut rng);
        let err = finite_diff_check_params(
            &|t: &mut Tape, v: &[Var]| {
                let (y, _) = t.batch_norm(v[0], v[1], v[2], NormStats::Batch, 1e-5)?;
                let w = t.constant(weights.clone());
                let p = t.mul(y, w)?;
                let q = t.mul(p, p)?;
                Ok(t.sum(q))
            },
            &inputs,
            1e-5,
            None,
        )
        .unwrap();
        assert!(err < 1e-5, "{err}");

        // frozen (0, 1) statistics with unit scale and zero shift: identity up to eps
        let mut t = Tape::new();
        let x = t.constant(inputs[0].clone());
        let g = t.constant(Tensor::ones([3]));
        let b = t.constant(Tensor::zeros([3]));
        let (y, obs) =
            t.batch_norm(x, g, b, NormStats::Running { mean: &[0.0; 3], var: &[1.0; 3] }, 0.0).unwrap();
        assert!(obs.is_none());
        assert_eq!(t.value(y), &inputs[0]);
    }

    #[test]
    fn nearest_upsample() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::from_fn([1, 1, 2, 2], |i| i as f64));
        let y = t.upsample_nearest(x, 2).unwrap();
        assert_eq!(t.value(y).data(), &[0., 0., 1., 1., 0., 0., 1., 1., 2., 2., 3., 3., 2., 2., 3., 3.]);
    }
}
