//! Training objectives: focal BEV loss, cross-modal cosine alignment,
//! perspective-view supervision, its BEV projection and the weighted total.

use crate::error::{Error, Result};
use crate::geometry::{lift_splat, BevSpec, Frustum, SplatIndex};
use crate::tensor::{sigmoid, softplus, Tape, Tensor, Var};

/// Weights of the four loss terms and the focal parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct LossWeights {
    pub bev: f64,
    /// Non-positive: the alignment term is a similarity to maximize.
    pub xfa: f64,
    pub pv: f64,
    pub pv2bev: f64,
    pub gamma: f64,
    pub alpha: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { bev: 1.0, xfa: -0.002, pv: 0.1, pv2bev: 0.1, gamma: 2.0, alpha: 0.25 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let cfg = |key: &str, msg: &str| Err(Error::Config { key: format!("losses.{key}"), msg: msg.into() });
        if !(self.bev > 0.0) {
            return cfg("bev", "must be > 0");
        }
        if !(self.xfa <= 0.0) {
            return cfg("xfa", "must be <= 0 (the alignment term is maximized)");
        }
        if !(self.pv >= 0.0) || !(self.pv2bev >= 0.0) {
            return cfg("pv", "perspective-view weights must be >= 0");
        }
        if !(self.gamma >= 0.0) || !(0.0..=1.0).contains(&self.alpha) {
            return cfg("alpha", "need gamma >= 0 and alpha in [0, 1]");
        }
        Ok(())
    }
}

/// Per-element focal term and its derivative w.r.t. the logit.
fn focal_elem(z: f64, positive: bool, gamma: f64, alpha: f64) -> (f64, f64) {
    let p = sigmoid(z);
    let q = sigmoid(-z);
    if positive {
        let sp = softplus(-z);
        let m = q.powf(gamma);
        (alpha * m * sp, -alpha * m * (gamma * p * sp + q))
    } else {
        let sp = softplus(z);
        let m = p.powf(gamma);
        ((1.0 - alpha) * m * sp, (1.0 - alpha) * m * (gamma * q * sp + p))
    }
}

/// Sigmoid focal cross-entropy averaged over every (class, pixel) element,
/// or over the elements where `mask` is nonzero. An all-zero mask gives 0.
/// Each class plane is an independent binary problem.
pub fn focal_ce(tape: &mut Tape, logits: Var, target: &Tensor, mask: Option<&Tensor>, gamma: f64, alpha: f64) -> Result<Var> {
    if tape.shape(logits) != target.shape() {
        return Err(Error::shape("focal_ce", format!("logits {:?} vs target {:?}", tape.shape(logits), target.shape())));
    }
    if let Some(bad) = target.data().iter().find(|&&v| v != 0.0 && v != 1.0) {
        return Err(Error::Invalid(format!("focal_ce target must be binary, found {bad}")));
    }
    if let Some(m) = mask {
        if m.shape() != target.shape() {
            return Err(Error::shape("focal_ce", format!("mask {:?} vs target {:?}", m.shape(), target.shape())));
        }
    }
    let keep = |i: usize| mask.is_none_or(|m| m.data()[i] != 0.0);
    let count = (0..target.numel()).filter(|&i| keep(i)).count();
    let zd = tape.value(logits).data();
    let mut total = 0.0;
    let mut grad = vec![0.0; zd.len()];
    if count > 0 {
        let inv = 1.0 / count as f64;
        for (i, (&z, &y)) in zd.iter().zip(target.data()).enumerate() {
            if keep(i) {
                let (l, d) = focal_elem(z, y == 1.0, gamma, alpha);
                total += l;
                grad[i] = d * inv;
            }
        }
        total *= inv;
    }
    let shape = target.shape().to_vec();
    Ok(tape.push(Tensor::scalar(total), &[logits], move |g, _, _| {
        let s = g.item();
        vec![Some(Tensor::from_fn(shape.clone(), |i| grad[i] * s))]
    }))
}

/// Shape `(C, H, W)` of a `[C, H, W]` or `[1, C, H, W]` feature.
fn chw(tape: &Tape, x: Var, op: &'static str) -> Result<(usize, usize, usize)> {
    match *tape.shape(x) {
        [c, h, w] | [1, c, h, w] => Ok((c, h, w)),
        ref s => Err(Error::shape(op, format!("expected [C, H, W], got {s:?}"))),
    }
}

const COS_EPS: f64 = 1e-8;

/// Mean cosine similarity between the narrower feature and each
/// contiguous, equally wide channel group of the wider one (leftover
/// channels of the wider feature are ignored), over all groups and
/// locations. Inputs are `[C, H, W]` or `[1, C, H, W]` with equal `H, W`.
pub fn xfa_loss(tape: &mut Tape, cam: Var, lidar: Var) -> Result<Var> {
    let (ca, h, w) = chw(tape, cam, "xfa_loss")?;
    let (cb, h2, w2) = chw(tape, lidar, "xfa_loss")?;
    if (h, w) != (h2, w2) {
        return Err(Error::shape("xfa_loss", format!("spatial {h}x{w} vs {h2}x{w2}; resample first")));
    }
    // `lo` is the narrower branch
    let swap = cb < ca;
    let (lo_var, hi_var) = if swap { (lidar, cam) } else { (cam, lidar) };
    let (c_lo, c_hi) = (ca.min(cb), ca.max(cb));
    let groups = c_hi / c_lo;
    let hw = h * w;
    let (lo, hi) = (tape.value(lo_var).data(), tape.value(hi_var).data());
    let n = (groups * hw) as f64;
    let mut total = 0.0;
    let mut d_lo = vec![0.0; lo.len()];
    let mut d_hi = vec![0.0; hi.len()];
    for g in 0..groups {
        for p in 0..hw {
            let a = |c: usize| lo[c * hw + p];
            let b = |c: usize| hi[(g * c_lo + c) * hw + p];
            let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
            for c in 0..c_lo {
                dot += a(c) * b(c);
                na += a(c) * a(c);
                nb += b(c) * b(c);
            }
            let (na, nb) = (na.sqrt(), nb.sqrt());
            let denom = na * nb;
            if denom > COS_EPS {
                let cos = dot / denom;
                total += cos;
                for c in 0..c_lo {
                    d_lo[c * hw + p] += (b(c) / denom - cos * a(c) / (na * na)) / n;
                    d_hi[(g * c_lo + c) * hw + p] += (a(c) / denom - cos * b(c) / (nb * nb)) / n;
                }
            } else {
                total += dot / COS_EPS;
                for c in 0..c_lo {
                    d_lo[c * hw + p] += b(c) / COS_EPS / n;
                    d_hi[(g * c_lo + c) * hw + p] += a(c) / COS_EPS / n;
                }
            }
        }
    }
    let (s_lo, s_hi) = (tape.shape(lo_var).to_vec(), tape.shape(hi_var).to_vec());
    let value = Tensor::scalar(total / n);
    Ok(tape.push(value, &[lo_var, hi_var], move |g, _, _| {
        let s = g.item();
        vec![
            Some(Tensor::from_fn(s_lo.clone(), |i| d_lo[i] * s)),
            Some(Tensor::from_fn(s_hi.clone(), |i| d_hi[i] * s)),
        ]
    }))
}

/// [`xfa_loss`] after bilinearly resampling the LiDAR feature to the
/// camera feature's grid when the two differ.
pub fn xfa_loss_aligned(tape: &mut Tape, cam: Var, lidar: Var) -> Result<Var> {
    let (_, h, w) = chw(tape, cam, "xfa_loss")?;
    let (cb, h2, w2) = chw(tape, lidar, "xfa_loss")?;
    if (h, w) == (h2, w2) {
        return xfa_loss(tape, cam, lidar);
    }
    let l = tape.reshape(lidar, &[1, cb, h2, w2])?;
    let l = tape.grid_resample(l, (h, w))?;
    xfa_loss(tape, cam, l)
}

/// Denominator guard of the projection renormalization.
const MASS_EPS: f64 = 1e-12;

pub struct Projection {
    /// Probability-like map `[S, H_bev, W_bev]`.
    pub probs: Var,
    /// `[H_bev, W_bev]`, 1 where any splat mass landed.
    pub covered: Tensor,
    /// Splat weight per latent cell, `[1, H_lat, W_lat]`.
    pub mass: Var,
    /// The index the projection splatted through.
    pub index: SplatIndex,
}

/// Splats perspective-view class probabilities `[N, S, H', W']` with the
/// feature path's depth distribution and index, divides each cell by the
/// splat weight it received and upsamples to the output grid.
pub fn project_pv_to_bev(
    tape: &mut Tape,
    pv_probs: Var,
    depth_logits: Var,
    frustum: &Frustum,
    index: &SplatIndex,
    spec: &BevSpec,
) -> Result<Projection> {
    let (n, s) = match *tape.shape(pv_probs) {
        [n, s, _, _] => (n, s),
        ref sh => return Err(Error::shape("project_pv_to_bev", format!("expected [N, S, H, W], got {sh:?}"))),
    };
    let (fh, fw) = frustum.pv_shape();
    let num = lift_splat(tape, pv_probs, depth_logits, frustum, index, spec)?;
    let ones = tape.constant(Tensor::ones([n, 1, fh, fw]));
    let mass = lift_splat(tape, ones, depth_logits, frustum, index, spec)?;
    let (lh, lw) = spec.latent;
    let guarded = tape.max_scalar(mass, MASS_EPS);
    let den = tape.concat(&vec![guarded; s], 0)?;
    let ratio = tape.div(num, den)?;
    let ratio = tape.reshape(ratio, &[1, s, lh, lw])?;
    let f = spec.upsample_factor();
    let up = tape.upsample_nearest(ratio, f)?;
    let (oh, ow) = spec.output;
    let probs = tape.reshape(up, &[s, oh, ow])?;
    let m = tape.value(mass).data();
    let covered = Tensor::from_fn([oh, ow], |i| {
        let (r, c) = (i / ow / f, i % ow / f);
        if m[r * lw + c] > 0.0 {
            1.0
        } else {
            0.0
        }
    });
    Ok(Projection { probs, covered, mass, index: index.clone() })
}

/// Clamp bounds applied before converting projected probabilities to logits.
const PROB_CLAMP: f64 = 1e-6;

/// Focal loss of the projected perspective-view prediction against the
/// BEV ground truth `[S, H_bev, W_bev]`, restricted to covered cells.
/// `pv_logits` are at feature resolution.
#[allow(clippy::too_many_arguments)]
pub fn pv2bev_loss(
    tape: &mut Tape,
    pv_logits: Var,
    depth_logits: Var,
    frustum: &Frustum,
    index: &SplatIndex,
    spec: &BevSpec,
    y_bev: &Tensor,
    weights: &LossWeights,
) -> Result<(Var, Projection)> {
    let probs = tape.sigmoid(pv_logits);
    let proj = project_pv_to_bev(tape, probs, depth_logits, frustum, index, spec)?;
    let clamped = tape.clamp(proj.probs, PROB_CLAMP, 1.0 - PROB_CLAMP);
    let z = tape.logit(clamped);
    let s = y_bev.shape().first().copied().unwrap_or(0);
    let plane = proj.covered.numel();
    let mask = Tensor::from_fn(y_bev.shape().to_vec(), |i| proj.covered.data()[i % plane]);
    if s * plane != y_bev.numel() {
        return Err(Error::shape("pv2bev_loss", format!("ground truth {:?} vs output grid", y_bev.shape())));
    }
    let loss = focal_ce(tape, z, y_bev, Some(&mask), weights.gamma, weights.alpha)?;
    Ok((loss, proj))
}

/// Focal loss of full-resolution perspective-view logits `[N, S, H, W]`.
pub fn pv_loss(tape: &mut Tape, pv_logits: Var, y_pv: &Tensor, weights: &LossWeights) -> Result<Var> {
    focal_ce(tape, pv_logits, y_pv, None, weights.gamma, weights.alpha)
}

/// Unweighted values of each term and the weighted total.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossReport {
    pub bev: f64,
    pub xfa: f64,
    pub pv: f64,
    pub pv2bev: f64,
    pub total: f64,
}

impl LossReport {
    pub fn recombine(&self, w: &LossWeights) -> f64 {
        w.bev * self.bev + w.xfa * self.xfa + w.pv * self.pv + w.pv2bev * self.pv2bev
    }

    pub fn is_finite(&self) -> bool {
        [self.bev, self.xfa, self.pv, self.pv2bev, self.total].iter().all(|v| v.is_finite())
    }

    pub fn csv_header() -> &'static str {
        "step,bev,xfa,pv,pv2bev,total"
    }

    pub fn csv_row(&self, step: u64) -> String {
        format!("{step},{:?},{:?},{:?},{:?},{:?}", self.bev, self.xfa, self.pv, self.pv2bev, self.total)
    }
}

/// Loss terms of one forward pass; absent terms contribute nothing.
#[derive(Clone, Copy, Debug, Default)]
pub struct LossTerms {
    pub bev: Option<Var>,
    pub xfa: Option<Var>,
    pub pv: Option<Var>,
    pub pv2bev: Option<Var>,
}

/// Weighted sum of the present terms.
pub fn total_loss(tape: &mut Tape, terms: &LossTerms, w: &LossWeights) -> Result<(Var, LossReport)> {
    let bev = terms.bev.ok_or_else(|| Error::Invalid("the BEV loss term is required".into()))?;
    let mut parts = vec![(bev, w.bev)];
    let mut report = LossReport { bev: tape.value(bev).item(), ..LossReport::default() };
    for (term, weight, slot) in [
        (terms.xfa, w.xfa, &mut report.xfa),
        (terms.pv, w.pv, &mut report.pv),
        (terms.pv2bev, w.pv2bev, &mut report.pv2bev),
    ] {
        if let Some(v) = term {
            *slot = tape.value(v).item();
            parts.push((v, weight));
        }
    }
    let total = tape.weighted_sum(&parts)?;
    report.total = tape.value(total).item();
    Ok((total, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::depth_bins;
    use crate::blocks::ModelConfig;
    use crate::tensor::{finite_diff_check, finite_diff_check_params};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], seed: u64, lo: f64, hi: f64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape.to_vec(), |_| rng.random_range(lo..hi))
    }

    fn binary(shape: &[usize], seed: u64) -> Tensor {
        random(shape, seed, 0.0, 1.0).map(|v| if v < 0.4 { 1.0 } else { 0.0 })
    }

    fn focal_value(z: &Tensor, y: &Tensor, gamma: f64, alpha: f64) -> f64 {
        let mut t = Tape::no_grad();
        let v = t.constant(z.clone());
        let l = focal_ce(&mut t, v, y, None, gamma, alpha).unwrap();
        t.value(l).item()
    }

    #[test]
    fn focal_reduces_to_half_bce() {
        let z = random(&[2, 4, 4], 1, -4.0, 4.0);
        let y = binary(&[2, 4, 4], 2);
        let bce: f64 = z
            .data()
            .iter()
            .zip(y.data())
            .map(|(&z, &y)| {
                let p = 1.0 / (1.0 + (-z).exp());
                -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
            })
            .sum::<f64>()
            / 32.0;
        assert!((focal_value(&z, &y, 0.0, 0.5) - 0.5 * bce).abs() < 1e-12);
    }

    #[test]
    fn focal_matches_direct_formula_and_saturates() {
        let z = random(&[2, 4, 4], 3, -3.0, 3.0);
        let y = binary(&[2, 4, 4], 4);
        let direct: f64 = z
            .data()
            .iter()
            .zip(y.data())
            .map(|(&z, &y)| {
                let p = 1.0 / (1.0 + (-z).exp());
                let (pt, at) = if y == 1.0 { (p, 0.25) } else { (1.0 - p, 0.75) };
                -at * (1.0 - pt).powi(2) * pt.ln()
            })
            .sum::<f64>()
            / 32.0;
        assert!((focal_value(&z, &y, 2.0, 0.25) - direct).abs() < 1e-12);
        let perfect = y.map(|v| if v == 1.0 { 30.0 } else { -30.0 });
        assert!(focal_value(&perfect, &y, 2.0, 0.25) < 1e-9);
        assert!(focal_value(&z, &y, 2.0, 0.25) > 0.0);

        let mut t = Tape::no_grad();
        let v = t.constant(z.clone());
        assert!(focal_ce(&mut t, v, &y.map(|x| x * 0.5), None, 2.0, 0.25).is_err());
        let none = Tensor::zeros([2, 4, 4]);
        let l = focal_ce(&mut t, v, &y, Some(&none), 2.0, 0.25).unwrap();
        assert_eq!(t.value(l).item(), 0.0);
    }

    #[test]
    fn focal_gradient() {
        let z = random(&[2, 3, 3], 5, -5.0, 5.0);
        let y = binary(&[2, 3, 3], 6);
        let mask = binary(&[2, 3, 3], 7);
        for (gamma, m) in [(2.0, None), (1.5, Some(&mask)), (0.0, None)] {
            let err = finite_diff_check(&|t: &mut Tape, v: Var| focal_ce(t, v, &y, m, gamma, 0.25), &z, 1e-5).unwrap();
            assert!(err < 1e-8, "{err}");
        }
    }

    #[test]
    fn xfa_special_cases_and_oracle() {
        let a = random(&[3, 2, 2], 8, -1.0, 1.0);
        let junk = random(&[1, 2, 2], 9, -1.0, 1.0);
        let mut t = Tape::no_grad();
        let av = t.constant(a.clone());
        let (j, neg) = (t.constant(junk), t.scale(av, -2.0));
        let b = t.concat(&[av, av, j], 0).unwrap();
        let l = xfa_loss(&mut t, av, b).unwrap();
        assert!((t.value(l).item() - 1.0).abs() < 1e-12);
        let l = xfa_loss(&mut t, neg, av).unwrap();
        assert!((t.value(l).item() + 1.0).abs() < 1e-12);

        let cam = random(&[16, 3, 4], 10, -1.0, 1.0);
        let lidar = random(&[24, 3, 4], 11, -1.0, 1.0);
        let (c, l) = (t.constant(cam.clone()), t.constant(lidar.clone()));
        let got = xfa_loss(&mut t, c, l).unwrap();
        let mut sum = 0.0;
        for p in 0..12 {
            let x: Vec<f64> = (0..16).map(|k| cam.data()[k * 12 + p]).collect();
            let y: Vec<f64> = (0..16).map(|k| lidar.data()[k * 12 + p]).collect();
            let dot: f64 = x.iter().zip(&y).map(|(a, b)| a * b).sum();
            let n = x.iter().map(|v| v * v).sum::<f64>().sqrt() * y.iter().map(|v| v * v).sum::<f64>().sqrt();
            sum += dot / n;
        }
        assert!((t.value(got).item() - sum / 12.0).abs() < 1e-12);
        let bad = t.constant(Tensor::zeros([24, 3, 3]));
        assert!(xfa_loss(&mut t, c, bad).is_err());
        let l = xfa_loss_aligned(&mut t, c, bad).unwrap();
        assert_eq!(t.value(l).item(), 0.0);
    }

    #[test]
    fn xfa_gradient_both_orders() {
        let inputs = vec![random(&[4, 2, 3], 12, -1.0, 1.0), random(&[9, 2, 3], 13, -1.0, 1.0)];
        for swap in [false, true] {
            let err = finite_diff_check_params(
                &|t: &mut Tape, v: &[Var]| if swap { xfa_loss(t, v[1], v[0]) } else { xfa_loss(t, v[0], v[1]) },
                &inputs,
                1e-5,
                None,
            )
            .unwrap();
            assert!(err < 1e-8, "{err}");
        }
    }

    fn geometry() -> (Frustum, SplatIndex, BevSpec) {
        let cfg = ModelConfig::default();
        let rig = cfg.rig().unwrap();
        let fr = Frustum::build(&rig, (2, 4), &depth_bins(3, 1.0, 7.0)).unwrap();
        let spec = BevSpec { latent: (8, 8), output: (16, 16), ..BevSpec::default() };
        let index = SplatIndex::new(&fr, &spec);
        (fr, index, spec)
    }

    #[test]
    fn projection_of_constant_map() {
        let (fr, index, spec) = geometry();
        let mut t = Tape::no_grad();
        let probs = Tensor::from_fn([4, 2, 2, 4], |i| if (i / 8) % 2 == 0 { 1.0 } else { 0.0 });
        let pv = t.constant(probs);
        let dl = t.constant(random(&[4, 3, 2, 4], 14, -2.0, 2.0));
        let proj = project_pv_to_bev(&mut t, pv, dl, &fr, &index, &spec).unwrap();
        assert!(proj.index.shares_storage(&index));
        let v = t.value(proj.probs).data();
        let cov = proj.covered.data();
        assert!(cov.iter().any(|c| *c == 1.0) && cov.iter().any(|c| *c == 0.0));
        for (i, &c) in cov.iter().enumerate() {
            if c == 1.0 {
                assert!((v[i] - 1.0).abs() < 1e-12);
            } else {
                assert_eq!(v[i], 0.0);
            }
            assert_eq!(v[256 + i], 0.0);
        }
    }

    #[test]
    fn pv2bev_behaviour_and_gradients() {
        let (fr, index, spec) = geometry();
        let w = LossWeights::default();
        let dl = random(&[4, 3, 2, 4], 15, -1.0, 1.0);
        let pv = random(&[4, 2, 2, 4], 16, -2.0, 2.0);
        let y = binary(&[2, 16, 16], 17);

        // masked cells contribute nothing: changing their labels leaves the loss unchanged
        let mut t = Tape::no_grad();
        let (a, b) = (t.constant(pv.clone()), t.constant(dl.clone()));
        let (l1, proj) = pv2bev_loss(&mut t, a, b, &fr, &index, &spec, &y, &w).unwrap();
        let flipped = Tensor::from_fn([2, 16, 16], |i| {
            if proj.covered.data()[i % 256] == 0.0 {
                1.0 - y.data()[i]
            } else {
                y.data()[i]
            }
        });
        let (l2, _) = pv2bev_loss(&mut t, a, b, &fr, &index, &spec, &flipped, &w).unwrap();
        assert_eq!(t.value(l1).item(), t.value(l2).item());

        // projected prediction equal to the truth on covered cells
        let truth = Tensor::from_fn([4, 2, 2, 4], |i| if (i / 8) % 2 == 0 { 40.0 } else { -40.0 });
        let y_all0 = Tensor::from_fn([2, 16, 16], |i| if i < 256 { 1.0 } else { 0.0 });
        let c = t.constant(truth);
        let (l, _) = pv2bev_loss(&mut t, c, b, &fr, &index, &spec, &y_all0, &w).unwrap();
        assert!(t.value(l).item() < 1e-6);

        // gradient reaches both the PV logits and the depth logits
        let mut t = Tape::new();
        let (a, b) = (t.param(pv.clone()), t.param(dl.clone()));
        let (l, _) = pv2bev_loss(&mut t, a, b, &fr, &index, &spec, &y, &w).unwrap();
        t.backward(l).unwrap();
        assert!(t.grad(a).unwrap().data().iter().any(|g| *g != 0.0));
        assert!(t.grad(b).unwrap().data().iter().any(|g| *g != 0.0));

        let err = finite_diff_check_params(
            &|t: &mut Tape, v: &[Var]| Ok(pv2bev_loss(t, v[0], v[1], &fr, &index, &spec, &y, &w)?.0),
            &[pv, dl],
            1e-5,
            None,
        )
        .unwrap();
        assert!(err <= 1e-6, "{err}");
    }

    #[test]
    fn total_and_report() {
        let mut t = Tape::no_grad();
        let (a, b, c, d) = (
            t.constant(Tensor::scalar(0.7)),
            t.constant(Tensor::scalar(1.0)),
            t.constant(Tensor::scalar(0.3)),
            t.constant(Tensor::scalar(0.2)),
        );
        let only = LossWeights { xfa: 0.0, pv: 0.0, pv2bev: 0.0, ..LossWeights::default() };
        let terms = LossTerms { bev: Some(a), xfa: Some(b), pv: Some(c), pv2bev: Some(d) };
        let (v, _) = total_loss(&mut t, &terms, &only).unwrap();
        assert_eq!(t.value(v).item(), 0.7);
        let w = LossWeights::default();
        let (v, r) = total_loss(&mut t, &terms, &w).unwrap();
        assert!((r.total - r.recombine(&w)).abs() < 1e-12);
        let xfa_only = LossTerms { bev: Some(a), xfa: Some(b), ..LossTerms::default() };
        let (v2, _) = total_loss(&mut t, &xfa_only, &w).unwrap();
        assert!((t.value(v2).item() - 0.7 + 0.002).abs() < 1e-15);
        assert!((t.value(v).item() - (0.7 - 0.002 + 0.03 + 0.02)).abs() < 1e-12);
        assert!(LossWeights { xfa: 0.1, ..w.clone() }.validate().is_err());
        assert!(total_loss(&mut t, &LossTerms::default(), &w).is_err());
    }
}
