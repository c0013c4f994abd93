//! Camera/LiDAR BEV feature fusion: channel concatenation, patch
//! self-attention, split-depth transposed attention and pose-driven
//! deformable convolution. All four take `[1, C_cam, H, W]` and
//! `[1, C_lidar, H, W]` and return `[1, C_fused, H, W]`.

mod attention;
mod deform;

pub use attention::{attention_core, canonical_token_order, channel_attention, sdta_fuse, self_attention_fuse};
pub use deform::{deformable_conv, pose_dcn_fuse, pose_embed};

use std::fmt;
use std::str::FromStr;

use crate::blocks::{Ctx, ModelConfig};
use crate::error::{Error, Result};
use crate::geometry::{identity4, CameraRig, Mat4};
use crate::tensor::Var;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum FusionKind {
    Concat,
    SelfAttention,
    Sdta,
    PoseDcn,
}

impl FusionKind {
    pub const ALL: [FusionKind; 4] = [FusionKind::Concat, FusionKind::SelfAttention, FusionKind::Sdta, FusionKind::PoseDcn];

    pub fn name(self) -> &'static str {
        match self {
            FusionKind::Concat => "concat",
            FusionKind::SelfAttention => "self_attention",
            FusionKind::Sdta => "sdta",
            FusionKind::PoseDcn => "pose_dcn",
        }
    }
}

impl fmt::Display for FusionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FusionKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        FusionKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Invalid(format!("unknown fusion `{s}` (expected concat, self_attention, sdta or pose_dcn)")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusionConfig {
    pub kind: FusionKind,
    /// Patch size of the attention embeddings and kernel size of the deformable conv.
    pub patch: usize,
    /// Patch stride of the attention embeddings.
    pub stride: usize,
    pub embed: usize,
    pub heads: usize,
    pub pose_channels: usize,
    pub pose_hidden: usize,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig { kind: FusionKind::Concat, patch: 3, stride: 4, embed: 32, heads: 4, pose_channels: 8, pose_hidden: 16 }
    }
}

impl FusionConfig {
    pub fn with_kind(kind: FusionKind) -> Self {
        FusionConfig { kind, ..Self::default() }
    }

    /// Offset channels predicted for the deformable conv: one (row, col) pair per tap.
    pub fn offset_channels(&self) -> usize {
        2 * self.patch * self.patch
    }

    pub fn validate(&self, latent: (usize, usize)) -> Result<()> {
        let cfg = |key: &str, msg: String| Err(Error::Config { key: format!("fusion.{key}"), msg });
        if self.patch == 0 || self.patch % 2 == 0 {
            return cfg("patch", format!("must be odd and >= 1, got {}", self.patch));
        }
        if self.stride == 0 || latent.0 % self.stride != 0 || latent.1 % self.stride != 0 {
            return cfg("stride", format!("must divide the latent grid {}x{}, got {}", latent.0, latent.1, self.stride));
        }
        if self.heads == 0 || self.embed == 0 || self.embed % self.heads != 0 {
            return cfg("embed", format!("{} is not divisible by {} heads", self.embed, self.heads));
        }
        if self.kind == FusionKind::Sdta && self.embed < 2 {
            return cfg("embed", "sdta needs at least 2 embedding channels".into());
        }
        if self.pose_channels == 0 || self.pose_hidden == 0 {
            return cfg("pose_channels", "pose widths must be >= 1".into());
        }
        Ok(())
    }
}

/// Sensor poses fed to the pose embedding.
#[derive(Clone, Debug, PartialEq)]
pub struct PoseInput {
    pub cameras: Vec<Mat4>,
    pub lidar: Mat4,
}

impl PoseInput {
    /// Camera extrinsics of `rig`; the LiDAR sits at the ego origin.
    pub fn from_rig(rig: &CameraRig) -> Self {
        PoseInput { cameras: rig.extrinsics().to_vec(), lidar: identity4() }
    }

    /// Row-major concatenation of every matrix, cameras first.
    pub fn flatten(&self) -> Vec<f64> {
        self.cameras.iter().chain(std::iter::once(&self.lidar)).flat_map(|m| m.iter().flatten().copied()).collect()
    }
}

/// Channel concatenation followed by a 3x3 conv.
pub fn concat_fuse(ctx: &mut Ctx, mcfg: &ModelConfig, cam: Var, lidar: Var) -> Result<Var> {
    let cin = stacked_channels(ctx, cam, lidar)?;
    let x = ctx.tape.concat(&[cam, lidar], 1)?;
    ctx.conv("fuse.concat", x, cin, mcfg.fused_channels, 3, 1, 1, true)
}

/// Validates matching `[1, C, H, W]` inputs and returns the stacked width.
fn stacked_channels(ctx: &Ctx, cam: Var, lidar: Var) -> Result<usize> {
    match (ctx.tape.shape(cam), ctx.tape.shape(lidar)) {
        ([1, a, h, w], [1, b, h2, w2]) if h == h2 && w == w2 => Ok(a + b),
        (a, b) => Err(Error::shape("fuse", format!("camera {a:?} and LiDAR {b:?} must be [1, C, H, W] with equal H, W"))),
    }
}

/// Dispatches on `fcfg.kind`.
pub fn fuse(ctx: &mut Ctx, mcfg: &ModelConfig, fcfg: &FusionConfig, cam: Var, lidar: Var, pose: &PoseInput) -> Result<Var> {
    match fcfg.kind {
        FusionKind::Concat => concat_fuse(ctx, mcfg, cam, lidar),
        FusionKind::SelfAttention => self_attention_fuse(ctx, mcfg, fcfg, cam, lidar),
        FusionKind::Sdta => sdta_fuse(ctx, mcfg, fcfg, cam, lidar),
        FusionKind::PoseDcn => pose_dcn_fuse(ctx, mcfg, fcfg, cam, lidar, pose),
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::blocks::{param_gradcheck, sample_probes, Mode, ParamStore};
    use crate::tensor::{Tape, Tensor};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn small_model() -> ModelConfig {
        ModelConfig { cam_channels: 3, lidar_channels: 5, fused_channels: 4, ..ModelConfig::default() }
    }

    pub(crate) fn small_fusion(kind: FusionKind) -> FusionConfig {
        FusionConfig { kind, stride: 2, embed: 8, heads: 2, pose_channels: 3, pose_hidden: 4, ..FusionConfig::default() }
    }

    pub(crate) fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
    }

    pub(crate) fn pose() -> PoseInput {
        PoseInput::from_rig(&ModelConfig::default().rig().unwrap())
    }

    /// Initializes a fuser on `[1, 3, 4, 4]` / `[1, 5, 4, 4]` inputs.
    pub(crate) fn init(kind: FusionKind, seed: u64) -> ParamStore {
        let (m, f) = (small_model(), small_fusion(kind));
        let empty = ParamStore::new();
        let mut c = Ctx::for_init(&empty, seed);
        let a = c.tape.constant(Tensor::zeros([1, 3, 4, 4]));
        let b = c.tape.constant(Tensor::zeros([1, 5, 4, 4]));
        fuse(&mut c, &m, &f, a, b, &pose()).unwrap();
        c.into_created()
    }

    pub(crate) fn fuser_gradcheck(kind: FusionKind, store: &ParamStore) -> f64 {
        let (m, f) = (small_model(), small_fusion(kind));
        let (cam, lidar, probe) = (random(&[1, 3, 4, 4], 1), random(&[1, 5, 4, 4], 2), random(&[1, 4, 4, 4], 3));
        let p = pose();
        let probes = sample_probes(store, 24, 4);
        param_gradcheck(
            store,
            &|c: &mut Ctx| {
                let a = c.tape.param(cam.clone());
                let b = c.tape.param(lidar.clone());
                let y = fuse(c, &m, &f, a, b, &p)?;
                let w = c.tape.constant(probe.clone());
                let q = c.tape.mul(y, w)?;
                let q = c.tape.mul(q, y)?;
                Ok(c.tape.sum(q))
            },
            &probes,
            1e-5,
        )
        .unwrap()
    }

    #[test]
    fn kinds_round_trip_through_names() {
        for k in FusionKind::ALL {
            assert_eq!(k.name().parse::<FusionKind>().unwrap(), k);
        }
        assert!("cross".parse::<FusionKind>().is_err());
    }

    #[test]
    fn config_validation() {
        FusionConfig::default().validate((32, 32)).unwrap();
        assert_eq!(FusionConfig::default().offset_channels(), 18);
        let bad = FusionConfig { embed: 50, ..FusionConfig::default() };
        assert!(bad.validate((32, 32)).unwrap_err().to_string().contains("fusion.embed"));
        let bad = FusionConfig { stride: 3, ..FusionConfig::default() };
        assert!(bad.validate((32, 32)).is_err());
    }

    #[test]
    fn concat_with_selector_kernels() {
        let m = ModelConfig { cam_channels: 3, lidar_channels: 5, fused_channels: 8, ..ModelConfig::default() };
        let mut store = ParamStore::new();
        let mut w = Tensor::zeros([8, 8, 3, 3]);
        for k in 0..8 {
            w.data_mut()[((k * 8 + k) * 3 + 1) * 3 + 1] = 1.0;
        }
        store.insert_param("fuse.concat.w", w);
        store.insert_param("fuse.concat.b", Tensor::zeros([8]));
        let cam = random(&[1, 3, 4, 4], 5);
        let lidar = random(&[1, 5, 4, 4], 6);
        let mut c = Ctx::new(Tape::no_grad(), &store, Mode::Eval);
        let (a, b) = (c.tape.constant(cam.clone()), c.tape.constant(lidar.clone()));
        let y = concat_fuse(&mut c, &m, a, b).unwrap();
        let y = c.tape.value(y).data().to_vec();
        assert_eq!(&y[..48], cam.data());
        assert_eq!(&y[48..], lidar.data());

        let z = c.tape.constant(Tensor::zeros([1, 5, 4, 4]));
        let y0 = concat_fuse(&mut c, &m, a, z).unwrap();
        assert_eq!(&c.tape.value(y0).data()[..48], cam.data());
        assert!(c.tape.value(y0).data()[48..].iter().all(|v| *v == 0.0));

        let bad = c.tape.constant(Tensor::zeros([1, 5, 4, 3]));
        assert!(concat_fuse(&mut c, &m, a, bad).is_err());
    }

    #[test]
    fn untrained_self_attention_is_the_concat_fuser() {
        let store = init(FusionKind::SelfAttention, 3);
        let (cam, lidar) = (random(&[1, 3, 4, 4], 1), random(&[1, 5, 4, 4], 2));
        let mut c = Ctx::new(Tape::no_grad(), &store, Mode::Eval);
        let (a, b) = (c.tape.constant(cam), c.tape.constant(lidar));
        let y = fuse(&mut c, &small_model(), &small_fusion(FusionKind::SelfAttention), a, b, &pose()).unwrap();
        let x = c.tape.concat(&[a, b], 1).unwrap();
        let w = c.tape.constant(store.params()["fuse.concat.w"].clone());
        let bias = c.tape.constant(store.params()["fuse.concat.b"].clone());
        let direct = c.tape.conv2d(x, w, Some(bias), 1, 1).unwrap();
        assert_eq!(c.tape.value(y), c.tape.value(direct));
    }

    #[test]
    fn every_fuser_has_the_same_signature_and_checks_gradients() {
        for kind in FusionKind::ALL {
            let store = init(kind, 7);
            let mut c = Ctx::new(Tape::no_grad(), &store, Mode::Train);
            let a = c.tape.constant(random(&[1, 3, 4, 4], 1));
            let b = c.tape.constant(random(&[1, 5, 4, 4], 2));
            let y = fuse(&mut c, &small_model(), &small_fusion(kind), a, b, &pose()).unwrap();
            assert_eq!(c.tape.shape(y), &[1, 4, 4, 4], "{kind}");
            let mut store = store;
            if kind == FusionKind::PoseDcn {
                // move off the zero-offset lattice so bilinear kinks are not probed
                let w = store.params_mut().get_mut("fuse.dcn.offset.b").unwrap();
                *w = random(w.shape(), 8).map(|v| 0.3 * v + 0.05);
            }
            if let Some(w) = store.params_mut().get_mut("fuse.sa.restore.w") {
                *w = random(w.shape(), 9);
            }
            let err = fuser_gradcheck(kind, &store);
            assert!(err <= 1e-4, "{kind}: {err}");
        }
    }
}
