//! Gather/scatter ops: bilinear sampling, index scatter and the depth
//! outer product used by lift-splat.

use std::sync::Arc;

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

#[inline]
fn corners(y: f64, x: f64) -> (isize, isize, f64, f64) {
    let (y0, x0) = (y.floor(), x.floor());
    (y0 as isize, x0 as isize, y - y0, x - x0)
}

impl Tape {
    /// Bilinear interpolation of `feature [B, C, H, W]` at `coords [B, N, 2]`
    /// given as `(row, col)` in pixel units. Taps outside the grid read zero.
    /// Output `[B, C, N]`; differentiable in both inputs.
    pub fn bilinear_sample(&mut self, feature: Var, coords: Var) -> Result<Var> {
        let (b, c, h, w) = match *self.value(feature).shape() {
            [b, c, h, w] => (b, c, h, w),
            ref s => return Err(Error::shape("bilinear_sample", format!("feature must be rank 4, got {s:?}"))),
        };
        let n = match *self.value(coords).shape() {
            [cb, n, 2] if cb == b => n,
            ref s => return Err(Error::shape("bilinear_sample", format!("coords {s:?} for batch {b}"))),
        };
        let fd = self.value(feature).data();
        let cd = self.value(coords).data();
        let at = |bi: usize, ch: usize, y: isize, x: isize| -> f64 {
            if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
                0.0
            } else {
                fd[((bi * c + ch) * h + y as usize) * w + x as usize]
            }
        };
        let mut out = vec![0.0; b * c * n];
        for bi in 0..b {
            for p in 0..n {
                let (y0, x0, wy, wx) = corners(cd[(bi * n + p) * 2], cd[(bi * n + p) * 2 + 1]);
                for ch in 0..c {
                    out[(bi * c + ch) * n + p] = (1.0 - wy) * (1.0 - wx) * at(bi, ch, y0, x0)
                        + (1.0 - wy) * wx * at(bi, ch, y0, x0 + 1)
                        + wy * (1.0 - wx) * at(bi, ch, y0 + 1, x0)
                        + wy * wx * at(bi, ch, y0 + 1, x0 + 1);
                }
            }
        }
        let out = Tensor::from_parts(vec![b, c, n], out);
        Ok(self.push(out, &[feature, coords], move |g, inp, _| {
            let (fd, cd, gd) = (inp[0].data(), inp[1].data(), g.data());
            let inside = |y: isize, x: isize| y >= 0 && x >= 0 && y < h as isize && x < w as isize;
            let at = |bi: usize, ch: usize, y: isize, x: isize| -> f64 {
                if inside(y, x) {
                    fd[((bi * c + ch) * h + y as usize) * w + x as usize]
                } else {
                    0.0
                }
            };
            let mut dfeat = vec![0.0; fd.len()];
            let mut dcoords = vec![0.0; cd.len()];
            for bi in 0..b {
                for p in 0..n {
                    let (y0, x0, wy, wx) = corners(cd[(bi * n + p) * 2], cd[(bi * n + p) * 2 + 1]);
                    let taps = [
                        (y0, x0, (1.0 - wy) * (1.0 - wx)),
                        (y0, x0 + 1, (1.0 - wy) * wx),
                        (y0 + 1, x0, wy * (1.0 - wx)),
                        (y0 + 1, x0 + 1, wy * wx),
                    ];
                    let (mut dy, mut dx) = (0.0, 0.0);
                    for ch in 0..c {
                        let gv = gd[(bi * c + ch) * n + p];
                        if gv == 0.0 {
                            continue;
                        }
                        for &(ty, tx, tw) in &taps {
                            if inside(ty, tx) {
                                dfeat[((bi * c + ch) * h + ty as usize) * w + tx as usize] += gv * tw;
                            }
                        }
                        let (v00, v01) = (at(bi, ch, y0, x0), at(bi, ch, y0, x0 + 1));
                        let (v10, v11) = (at(bi, ch, y0 + 1, x0), at(bi, ch, y0 + 1, x0 + 1));
                        dy += gv * ((1.0 - wx) * (v10 - v00) + wx * (v11 - v01));
                        dx += gv * ((1.0 - wy) * (v01 - v00) + wy * (v11 - v10));
                    }
                    dcoords[(bi * n + p) * 2] = dy;
                    dcoords[(bi * n + p) * 2 + 1] = dx;
                }
            }
            vec![
                Some(Tensor::from_parts(inp[0].shape().to_vec(), dfeat)),
                Some(Tensor::from_parts(inp[1].shape().to_vec(), dcoords)),
            ]
        }))
    }

    /// Bilinear resize of `[B, C, H, W]` to `[B, C, H2, W2]` with aligned corners.
    pub fn grid_resample(&mut self, x: Var, target: (usize, usize)) -> Result<Var> {
        let (b, c, h, w) = match *self.value(x).shape() {
            [b, c, h, w] => (b, c, h, w),
            ref s => return Err(Error::shape("grid_resample", format!("expected rank 4, got {s:?}"))),
        };
        let (th, tw) = target;
        if th == 0 || tw == 0 {
            return Err(Error::shape("grid_resample", "target size must be >= 1"));
        }
        let map = |dst: usize, n_src: usize, n_dst: usize| -> f64 {
            if n_dst == 1 {
                0.0
            } else {
                dst as f64 * (n_src - 1) as f64 / (n_dst - 1) as f64
            }
        };
        let mut coords = Vec::with_capacity(b * th * tw * 2);
        for _ in 0..b {
            for i in 0..th {
                for j in 0..tw {
                    coords.push(map(i, h, th));
                    coords.push(map(j, w, tw));
                }
            }
        }
        let coords = self.constant(Tensor::from_parts(vec![b, th * tw, 2], coords));
        let s = self.bilinear_sample(x, coords)?;
        self.reshape(s, &[b, c, th, tw])
    }

    /// `out[i] = sum of values[n] over n with indices[n] == i`, accumulated in
    /// ascending `n`. `values` is `[N, C]`, output `[out_cells, C]`.
    pub fn scatter_add(&mut self, values: Var, indices: Arc<[usize]>, out_cells: usize) -> Result<Var> {
        let (n, c) = match *self.value(values).shape() {
            [n, c] => (n, c),
            ref s => return Err(Error::shape("scatter_add", format!("values must be [N, C], got {s:?}"))),
        };
        if indices.len() != n {
            return Err(Error::shape("scatter_add", format!("{} indices for {n} rows", indices.len())));
        }
        if let Some(bad) = indices.iter().find(|&&i| i >= out_cells) {
            return Err(Error::Invalid(format!("scatter index {bad} out of range for {out_cells} cells")));
        }
        let vd = self.value(values).data();
        let mut out = vec![0.0; out_cells * c];
        for (row, &cell) in indices.iter().enumerate() {
            for (o, v) in out[cell * c..][..c].iter_mut().zip(&vd[row * c..][..c]) {
                *o += v;
            }
        }
        let out = Tensor::from_parts(vec![out_cells, c], out);
        Ok(self.push(out, &[values], move |g, _, _| {
            let mut dv = Vec::with_capacity(n * c);
            for &cell in indices.iter() {
                dv.extend_from_slice(&g.data()[cell * c..][..c]);
            }
            vec![Some(Tensor::from_parts(vec![n, c], dv))]
        }))
    }

    /// For each listed point id `p = ((cam * D + d) * H + i) * W + j`, emits the
    /// row `feat[cam, :, i, j] * weight[cam, d, i, j]`. `feat` is
    /// `[N, C, H, W]`, `weight` is `[N, D, H, W]`; output `[points, C]`.
    pub fn depth_outer(&mut self, feat: Var, weight: Var, points: Arc<[usize]>) -> Result<Var> {
        let (nc, c, h, w) = match *self.value(feat).shape() {
            [n, c, h, w] => (n, c, h, w),
            ref s => return Err(Error::shape("depth_outer", format!("feat must be rank 4, got {s:?}"))),
        };
        let d = match *self.value(weight).shape() {
            [n2, d, h2, w2] if n2 == nc && h2 == h && w2 == w => d,
            ref s => return Err(Error::shape("depth_outer", format!("weight {s:?} vs feat {:?}", self.value(feat).shape()))),
        };
        let total = nc * d * h * w;
        if let Some(bad) = points.iter().find(|&&p| p >= total) {
            return Err(Error::Invalid(format!("point id {bad} out of range for {total} frustum points")));
        }
        let plane = h * w;
        let feat_at = move |p: usize| -> (usize, usize) {
            let cam = p / (d * plane);
            (cam, p % plane)
        };
        let (fd, wd) = (self.value(feat).data(), self.value(weight).data());
        let mut out = Vec::with_capacity(points.len() * c);
        for &p in points.iter() {
            let (cam, pix) = feat_at(p);
            let wv = wd[p];
            for ch in 0..c {
                out.push(fd[(cam * c + ch) * plane + pix] * wv);
            }
        }
        let out = Tensor::from_parts(vec![points.len(), c], out);
        Ok(self.push(out, &[feat, weight], move |g, inp, _| {
            let (fd, wd, gd) = (inp[0].data(), inp[1].data(), g.data());
            let mut dfeat = vec![0.0; fd.len()];
            let mut dw = vec![0.0; wd.len()];
            for (row, &p) in points.iter().enumerate() {
                let (cam, pix) = feat_at(p);
                let wv = wd[p];
                let mut acc = 0.0;
                for ch in 0..c {
                    let gv = gd[row * c + ch];
                    let fi = (cam * c + ch) * plane + pix;
                    dfeat[fi] += gv * wv;
                    acc += gv * fd[fi];
                }
                dw[p] += acc;
            }
            vec![
                Some(Tensor::from_parts(inp[0].shape().to_vec(), dfeat)),
                Some(Tensor::from_parts(inp[1].shape().to_vec(), dw)),
            ]
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{finite_diff_check, finite_diff_check_params};
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn lattice_points_and_midpoints() {
        let feat = Tensor::from_fn([1, 2, 3, 4], |i| i as f64 * 1.5 - 3.0);
        let mut t = Tape::new();
        let f = t.constant(feat.clone());
        let c = t.constant(Tensor::new([1, 2, 2], vec![2.0, 1.0, 0.5, 0.5]).unwrap());
        let s = t.bilinear_sample(f, c).unwrap();
        let v = t.value(s).data();
        for ch in 0..2 {
            assert_eq!(v[ch * 2], feat.data()[(ch * 3 + 2) * 4 + 1]);
            let blk = [0, 1, 4, 5].map(|k| feat.data()[ch * 12 + k]);
            assert!((v[ch * 2 + 1] - blk.iter().sum::<f64>() / 4.0).abs() < 1e-15);
        }
    }

    #[test]
    fn outside_taps_are_zero() {
        let mut t = Tape::new();
        let f = t.constant(Tensor::ones([1, 1, 2, 2]));
        let c = t.constant(Tensor::new([1, 3, 2], vec![-5.0, 0.0, 1.5, 0.0, -0.5, 0.0]).unwrap());
        let s = t.bilinear_sample(f, c).unwrap();
        assert_eq!(t.value(s).data(), &[0.0, 0.5, 0.5]);
    }

    #[test]
    fn bilinear_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let feat = Tensor::from_fn([2, 3, 4, 5], |_| rng.random_range(-1.0..1.0));
        // keep probes away from integer kinks
        let coords = Tensor::from_fn([2, 6, 2], |_| rng.random_range(-0.8..4.8f64).floor() + rng.random_range(0.1..0.9));
        let weights = Tensor::from_fn([2, 3, 6], |_| rng.random_range(-1.0..1.0));
        let f = |t: &mut Tape, v: &[Var]| {
            let s = t.bilinear_sample(v[0], v[1])?;
            let w = t.constant(weights.clone());
            let p = t.mul(s, w)?;
            let q = t.mul(p, p)?;
            Ok(t.sum(q))
        };
        let err = finite_diff_check_params(&f, &[feat, coords], 1e-5, None).unwrap();
        assert!(err <= 1e-5, "{err}");
    }

    #[test]
    fn resample_identity_constant_and_ramp() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x = Tensor::from_fn([1, 2, 4, 6], |_| rng.random_range(-1.0..1.0));
        let mut t = Tape::new();
        let v = t.constant(x.clone());
        let same = t.grid_resample(v, (4, 6)).unwrap();
        assert!(t.value(same).max_abs_diff(&x) < 1e-12);

        let c = t.constant(Tensor::full([1, 1, 3, 3], 0.7));
        let up = t.grid_resample(c, (7, 5)).unwrap();
        assert!(t.value(up).data().iter().all(|v| (v - 0.7).abs() < 1e-15));

        let ramp = t.constant(Tensor::from_fn([1, 1, 4, 4], |i| 0.25 * (i / 4) as f64 + 2.0 * (i % 4) as f64));
        let up = t.grid_resample(ramp, (8, 8)).unwrap();
        for i in 0..8 {
            for j in 0..8 {
                let expect = 0.25 * (i as f64 * 3.0 / 7.0) + 2.0 * (j as f64 * 3.0 / 7.0);
                assert!((t.value(up).data()[i * 8 + j] - expect).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn scatter_add_properties() {
        let mut t = Tape::new();
        let v = t.constant(Tensor::new([2, 1], vec![3.0, 4.0]).unwrap());
        let s = t.scatter_add(v, Arc::from(vec![1, 1]), 3).unwrap();
        assert_eq!(t.value(s).data(), &[0.0, 7.0, 0.0]);
        assert!(t.scatter_add(v, Arc::from(vec![0, 3]), 3).is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let n = 40;
        let vals: Vec<f64> = (0..n * 2).map(|_| rng.random_range(0..8) as f64).collect();
        let idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..7)).collect();
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let pvals: Vec<f64> = order.iter().flat_map(|&i| [vals[2 * i], vals[2 * i + 1]]).collect();
        let pidx: Vec<usize> = order.iter().map(|&i| idx[i]).collect();
        let a = t.constant(Tensor::new([n, 2], vals.clone()).unwrap());
        let b = t.constant(Tensor::new([n, 2], pvals).unwrap());
        let sa = t.scatter_add(a, Arc::from(idx), 7).unwrap();
        let sb = t.scatter_add(b, Arc::from(pidx), 7).unwrap();
        // integer-valued inputs make the permuted sums exact
        assert_eq!(t.value(sa), t.value(sb));
        assert!((t.value(sa).sum() - vals.iter().sum::<f64>()).abs() < 1e-12);
    }

    #[test]
    fn depth_outer_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let feat = Tensor::from_fn([2, 3, 2, 2], |_| rng.random_range(-1.0..1.0));
        let weight = Tensor::from_fn([2, 4, 2, 2], |_| rng.random_range(0.0..1.0));
        let points: Arc<[usize]> = Arc::from((0..32).filter(|p| p % 3 != 0).collect::<Vec<_>>());
        let idx: Arc<[usize]> = Arc::from(points.iter().map(|p| p % 5).collect::<Vec<_>>());
        let err = finite_diff_check_params(
            &|t: &mut Tape, v: &[Var]| {
                let o = t.depth_outer(v[0], v[1], points.clone())?;
                let s = t.scatter_add(o, idx.clone(), 5)?;
                let q = t.mul(s, s)?;
                Ok(t.sum(q))
            },
            &[feat, weight],
            1e-5,
            None,
        )
        .unwrap();
        assert!(err < 1e-7, "{err}");
        let x = Tensor::from_fn([1, 1, 3, 3], |i| i as f64 * 0.1);
        let err = finite_diff_check(
            &|t: &mut Tape, v: Var| {
                let r = t.grid_resample(v, (5, 4))?;
                let q = t.mul(r, r)?;
                Ok(t.sum(q))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-7);
    }
}
