//! Named gradient checks: tape gradients of each loss, fuser, the lift-splat
//! transform and the whole training objective against central differences.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::blocks::{param_gradcheck, sample_probes, Ctx, Init, ModelConfig, ParamStore};
use crate::error::{Error, Result};
use crate::fusion::{fuse, FusionConfig, FusionKind, PoseInput};
use crate::geometry::{depth_bins, lift_splat, BevSpec, Frustum, SplatIndex};
use crate::losses::{focal_ce, pv2bev_loss, pv_loss, xfa_loss, LossWeights};
use crate::scene::{generate_scene, SceneConfig};
use crate::tensor::{finite_diff_check_params, Tape, Tensor, Var};
use crate::train::{Model, RunState, TrainConfig, Variant};

pub const GRADCHECK_EPS: f64 = 1e-5;
pub const GRADCHECK_TOL: f64 = 1e-4;

pub struct GradCheck {
    pub name: &'static str,
    run: fn(u64) -> Result<f64>,
}

#[derive(Clone, Debug)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub max_rel_error: f64,
    pub elapsed: Duration,
}

impl CheckOutcome {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= GRADCHECK_TOL
    }
}

impl std::fmt::Debug for GradCheck {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name)
    }
}

impl GradCheck {
    pub fn run(&self, seed: u64) -> Result<CheckOutcome> {
        let t = Instant::now();
        let max_rel_error = (self.run)(seed)?;
        Ok(CheckOutcome { name: self.name, max_rel_error, elapsed: t.elapsed() })
    }
}

pub fn registry() -> Vec<GradCheck> {
    vec![
        GradCheck { name: "focal_ce", run: focal },
        GradCheck { name: "xfa_loss", run: xfa },
        GradCheck { name: "pv_loss", run: pv },
        GradCheck { name: "pv2bev_loss", run: pv2bev },
        GradCheck { name: "fuse_concat", run: |s| fuser(FusionKind::Concat, s) },
        GradCheck { name: "fuse_self_attention", run: |s| fuser(FusionKind::SelfAttention, s) },
        GradCheck { name: "fuse_sdta", run: |s| fuser(FusionKind::Sdta, s) },
        GradCheck { name: "fuse_pose_dcn", run: |s| fuser(FusionKind::PoseDcn, s) },
        GradCheck { name: "lift_splat", run: splat },
        GradCheck { name: "pipeline", run: pipeline },
    ]
}

/// Checks whose name equals `module`, or all of them for `"all"`.
pub fn select(module: &str) -> Result<Vec<GradCheck>> {
    let all = registry();
    if module == "all" {
        return Ok(all);
    }
    let names: Vec<&str> = all.iter().map(|c| c.name).collect();
    let picked: Vec<GradCheck> = all.into_iter().filter(|c| c.name == module).collect();
    if picked.is_empty() {
        return Err(Error::Invalid(format!("unknown gradcheck module `{module}` (expected all, {})", names.join(", "))));
    }
    Ok(picked)
}

fn uniform(shape: &[usize], rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(lo..hi))
}

fn binary(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| if rng.random_bool(0.5) { 1.0 } else { 0.0 })
}

/// Weighted square of `y`, so every output element gets a distinct gradient.
fn probe_energy(tape: &mut Tape, y: Var, probe: &Tensor) -> Result<Var> {
    let p = tape.constant(probe.clone());
    let q = tape.mul(y, p)?;
    let q = tape.mul(q, y)?;
    Ok(tape.sum(q))
}

fn focal(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z = uniform(&[3, 4, 5], &mut rng, -4.0, 4.0);
    let y = binary(&[3, 4, 5], &mut rng);
    let mask = binary(&[3, 4, 5], &mut rng);
    let w = LossWeights::default();
    let plain = finite_diff_check_params(&|t: &mut Tape, v: &[Var]| focal_ce(t, v[0], &y, None, w.gamma, w.alpha), &[z.clone()], GRADCHECK_EPS, None)?;
    let masked =
        finite_diff_check_params(&|t: &mut Tape, v: &[Var]| focal_ce(t, v[0], &y, Some(&mask), w.gamma, w.alpha), &[z], GRADCHECK_EPS, None)?;
    Ok(plain.max(masked))
}

fn xfa(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs = [uniform(&[4, 3, 3], &mut rng, -1.0, 1.0), uniform(&[8, 3, 3], &mut rng, -1.0, 1.0)];
    finite_diff_check_params(&|t: &mut Tape, v: &[Var]| xfa_loss(t, v[0], v[1]), &inputs, GRADCHECK_EPS, None)
}

fn pv(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z = uniform(&[2, 3, 4, 4], &mut rng, -4.0, 4.0);
    let y = binary(&[2, 3, 4, 4], &mut rng);
    let w = LossWeights::default();
    finite_diff_check_params(&|t: &mut Tape, v: &[Var]| pv_loss(t, v[0], &y, &w), &[z], GRADCHECK_EPS, None)
}

/// A small frustum over the default rig and an 8x8 latent grid.
fn small_geometry() -> Result<(Frustum, SplatIndex, BevSpec)> {
    let rig = ModelConfig::default().rig()?;
    let fr = Frustum::build(&rig, (2, 4), &depth_bins(3, 1.0, 7.0))?;
    let spec = BevSpec { latent: (8, 8), output: (16, 16), ..BevSpec::default() };
    let index = SplatIndex::new(&fr, &spec);
    Ok((fr, index, spec))
}

fn pv2bev(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (fr, index, spec) = small_geometry()?;
    let inputs = [uniform(&[4, 2, 2, 4], &mut rng, -2.0, 2.0), uniform(&[4, 3, 2, 4], &mut rng, -1.0, 1.0)];
    let y = binary(&[2, 16, 16], &mut rng);
    let w = LossWeights::default();
    finite_diff_check_params(
        &|t: &mut Tape, v: &[Var]| Ok(pv2bev_loss(t, v[0], v[1], &fr, &index, &spec, &y, &w)?.0),
        &inputs,
        GRADCHECK_EPS,
        None,
    )
}

fn splat(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (fr, index, spec) = small_geometry()?;
    let inputs = [uniform(&[4, 2, 2, 4], &mut rng, -1.0, 1.0), uniform(&[4, 3, 2, 4], &mut rng, -1.0, 1.0)];
    let probe = uniform(&[2, 8, 8], &mut rng, -1.0, 1.0);
    finite_diff_check_params(
        &|t: &mut Tape, v: &[Var]| {
            let b = lift_splat(t, v[0], v[1], &fr, &index, &spec)?;
            probe_energy(t, b, &probe)
        },
        &inputs,
        GRADCHECK_EPS,
        None,
    )
}

/// Fuser parameters plus both input maps, on a 4x4 latent grid.
fn fuser(kind: FusionKind, seed: u64) -> Result<f64> {
    let mcfg = ModelConfig { cam_channels: 3, lidar_channels: 5, fused_channels: 4, ..ModelConfig::default() };
    let fcfg = FusionConfig { kind, stride: 2, embed: 8, heads: 2, pose_channels: 3, pose_hidden: 4, ..FusionConfig::default() };
    let pose = PoseInput::from_rig(&mcfg.rig()?);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cam = uniform(&[1, 3, 4, 4], &mut rng, -1.0, 1.0);
    let lidar = uniform(&[1, 5, 4, 4], &mut rng, -1.0, 1.0);
    let probe = uniform(&[1, 4, 4, 4], &mut rng, -1.0, 1.0);

    let empty = ParamStore::new();
    let mut c = Ctx::for_init(&empty, seed);
    let (a, b) = (c.tape.constant(cam.clone()), c.tape.constant(lidar.clone()));
    fuse(&mut c, &mcfg, &fcfg, a, b, &pose)?;
    let mut store = c.into_created();
    if let Some(ob) = store.params_mut().get_mut("fuse.dcn.offset.b") {
        // zero offsets put every tap on the integer lattice where bilinear
        // sampling has a kink; move them off it
        *ob = uniform(ob.shape(), &mut rng, -0.25, 0.35);
    }
    if let Some(rw) = store.params_mut().get_mut("fuse.sa.restore.w") {
        // zero at init, which would hide every gradient behind it
        *rw = uniform(rw.shape(), &mut rng, -0.5, 0.5);
    }

    // the inputs ride along as parameters so one check covers both
    store.insert_param("input.cam", cam);
    store.insert_param("input.lidar", lidar);
    let mut probes = sample_probes(&store, 32, seed);
    probes.extend((0..8).map(|i| ("input.cam".to_string(), 5 * i)));
    probes.extend((0..8).map(|i| ("input.lidar".to_string(), 9 * i + 1)));
    param_gradcheck(
        &store,
        &|c: &mut Ctx| {
            let a = c.param("input.cam", &[1, 3, 4, 4], Init::Zeros)?;
            let b = c.param("input.lidar", &[1, 5, 4, 4], Init::Zeros)?;
            let y = fuse(c, &mcfg, &fcfg, a, b, &pose)?;
            probe_energy(&mut c.tape, y, &probe)
        },
        &probes,
        GRADCHECK_EPS,
    )
}

/// Every loss term of the full default model with the self-attention
/// fuser, differentiated with respect to sampled parameters.
fn pipeline(seed: u64) -> Result<f64> {
    let mut cfg = TrainConfig::for_variant(Variant::XalignAll);
    cfg.seed = seed;
    let model = Model::from_train(&cfg)?;
    let state = RunState::new(&model, &cfg)?;
    let scene = generate_scene(seed, &SceneConfig::from_model(&cfg.model)?)?;
    let w = cfg.effective_weights();
    let probes = sample_probes(&state.params, 16, seed);
    param_gradcheck(
        &state.params,
        &|ctx: &mut Ctx| {
            let f = model.forward_scene(ctx, &scene, true)?;
            Ok(model.losses(ctx, &f, &scene, &w)?.0)
        },
        &probes,
        GRADCHECK_EPS,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn registry_names_are_unique_and_selectable() {
        let names: Vec<&str> = registry().iter().map(|c| c.name).collect();
        let mut dedup = names.clone();
        dedup.sort_unstable();
        dedup.dedup();
        assert_eq!(dedup.len(), names.len());
        assert_eq!(select("all").unwrap().len(), 10);
        assert_eq!(select("lift_splat").unwrap().len(), 1);
        assert!(select("conv").unwrap_err().to_string().contains("fuse_sdta"));
    }

    #[test]
    fn small_checks_pass() {
        for c in select("all").unwrap().into_iter().filter(|c| c.name != "pipeline") {
            let out = c.run(1).unwrap();
            assert!(out.passed(), "{}: {}", out.name, out.max_rel_error);
        }
    }
}
