//! Model assembly, loss selection per variant, optimization, evaluation
//! and the ablation driver.

mod run;

pub use run::{
    ablation_csv, ablation_summary_csv, evaluate, run_ablation, scene_order, train, train_step, AblationRow, RunState,
};

use std::fmt;
use std::str::FromStr;

use crate::blocks::{bev_encoder, camera_encoder, lidar_encoder, pv_decoder, seg_head, Ctx, ModelConfig, ParamStore};
use crate::error::{Error, Result};
use crate::fusion::{fuse, FusionConfig, FusionKind, PoseInput};
use crate::geometry::{lift_splat, voxelize_points, CameraRig, Frustum, SplatIndex};
use crate::losses::{focal_ce, pv2bev_loss, pv_loss, total_loss, xfa_loss_aligned, LossReport, LossTerms, LossWeights};
use crate::scene::SceneSample;
use crate::tensor::{Tensor, Var};

/// Which training additions are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    /// BEV loss only, concat fuser.
    Baseline,
    /// Adds the perspective-view and projected perspective-view losses.
    XalignView,
    /// All three auxiliary losses with the concat fuser.
    XalignLosses,
    /// All auxiliary losses and a learned fuser.
    XalignAll,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Baseline, Variant::XalignView, Variant::XalignLosses, Variant::XalignAll];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::XalignView => "xalign_view",
            Variant::XalignLosses => "xalign_losses",
            Variant::XalignAll => "xalign_all",
        }
    }

    /// Perspective-view decoder and its two losses.
    pub fn uses_pv(self) -> bool {
        self != Variant::Baseline
    }

    pub fn uses_xfa(self) -> bool {
        matches!(self, Variant::XalignLosses | Variant::XalignAll)
    }

    /// Whether the fuser may differ from plain concatenation.
    pub fn learned_fuser(self) -> bool {
        self == Variant::XalignAll
    }

    pub fn default_fusion(self) -> FusionKind {
        if self.learned_fuser() {
            FusionKind::SelfAttention
        } else {
            FusionKind::Concat
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL.into_iter().find(|v| v.name() == s).ok_or_else(|| Error::Config {
            key: "train.variant".into(),
            msg: format!("unknown variant `{s}` (expected baseline, xalign_view, xalign_losses or xalign_all)"),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub variant: Variant,
    pub model: ModelConfig,
    pub fusion: FusionConfig,
    pub weights: LossWeights,
    pub lr: f64,
    pub momentum: f64,
    pub steps: u64,
    pub seed: u64,
    /// Validation evaluation period in steps; 0 disables it.
    pub eval_every: u64,
}

impl TrainConfig {
    pub fn for_variant(variant: Variant) -> Self {
        TrainConfig {
            variant,
            model: ModelConfig::default(),
            fusion: FusionConfig::with_kind(variant.default_fusion()),
            weights: LossWeights::default(),
            lr: 0.15,
            momentum: 0.9,
            steps: 300,
            seed: 0,
            eval_every: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.fusion.validate(self.model.bev.latent)?;
        self.weights.validate()?;
        if !self.variant.learned_fuser() && self.fusion.kind != FusionKind::Concat {
            return Err(Error::Config {
                key: "fusion.kind".into(),
                msg: format!("variant {} adds no inference cost and needs the concat fuser, got {}", self.variant, self.fusion.kind),
            });
        }
        if !(self.lr >= 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config { key: "train.lr".into(), msg: "need lr >= 0 and momentum in [0, 1)".into() });
        }
        Ok(())
    }

    /// Loss weights with the terms the variant leaves out set to zero.
    pub fn effective_weights(&self) -> LossWeights {
        let mut w = self.weights.clone();
        if !self.variant.uses_xfa() {
            w.xfa = 0.0;
        }
        if !self.variant.uses_pv() {
            w.pv = 0.0;
            w.pv2bev = 0.0;
        }
        w
    }
}

/// Fixed geometry shared by every forward pass.
#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub fusion: FusionConfig,
    pub rig: CameraRig,
    pub frustum: Frustum,
    pub index: SplatIndex,
    pub pose: PoseInput,
}

/// Intermediates of one forward pass.
pub struct Forward {
    /// `[S, H_bev, W_bev]`.
    pub bev_logits: Var,
    /// Perspective-view logits at feature and image resolution, when the decoder ran.
    pub pv_logits: Option<(Var, Var)>,
    /// `[1, C_cam, H_lat, W_lat]`.
    pub cam_bev: Var,
    /// `[1, C_lidar, H_lat, W_lat]`.
    pub lidar_bev: Var,
    pub depth_logits: Var,
}

impl Model {
    pub fn new(cfg: &ModelConfig, fusion: &FusionConfig) -> Result<Self> {
        cfg.validate()?;
        fusion.validate(cfg.bev.latent)?;
        let rig = cfg.rig()?;
        let frustum = cfg.frustum(&rig)?;
        let index = SplatIndex::new(&frustum, &cfg.bev);
        let pose = PoseInput::from_rig(&rig);
        Ok(Model { cfg: cfg.clone(), fusion: fusion.clone(), rig, frustum, index, pose })
    }

    pub fn from_train(cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        Model::new(&cfg.model, &cfg.fusion)
    }

    /// Seeded parameters, including the perspective-view decoder when `with_pv`.
    pub fn init_params(&self, seed: u64, with_pv: bool) -> Result<ParamStore> {
        let empty = ParamStore::new();
        let mut ctx = Ctx::for_init(&empty, seed);
        let (h, w) = self.cfg.image;
        let images = Tensor::zeros([self.cfg.n_cam, 3, h, w]);
        self.forward(&mut ctx, &images, &Tensor::zeros([0, 5]), with_pv)?;
        Ok(ctx.into_created())
    }

    fn check_sample(&self, s: &SceneSample) -> Result<()> {
        if s.rig != self.rig {
            return Err(Error::Invalid(format!("scene {} was rendered with a different camera rig", s.seed)));
        }
        if s.bev_shape != self.cfg.bev.output {
            return Err(Error::shape("forward", format!("scene {} BEV labels {:?} vs output grid {:?}", s.seed, s.bev_shape, self.cfg.bev.output)));
        }
        Ok(())
    }

    /// Full pipeline from images `[N, 3, H, W]` and a `[P, 5]` cloud.
    pub fn forward(&self, ctx: &mut Ctx, images: &Tensor, cloud: &Tensor, with_pv: bool) -> Result<Forward> {
        let cfg = &self.cfg;
        let (lh, lw) = cfg.bev.latent;
        let x = ctx.tape.constant(images.clone());
        let cam = camera_encoder(ctx, cfg, x)?;
        let lifted = lift_splat(&mut ctx.tape, cam.features, cam.depth_logits, &self.frustum, &self.index, &cfg.bev)?;
        let cam_bev = ctx.tape.reshape(lifted, &[1, cfg.cam_channels, lh, lw])?;
        let pillars = voxelize_points(cloud, &cfg.bev)?.reshape([1, cfg.lidar_in, lh, lw])?;
        let pillars = ctx.tape.constant(pillars);
        let lidar_bev = lidar_encoder(ctx, cfg, pillars)?;
        let fused = fuse(ctx, cfg, &self.fusion, cam_bev, lidar_bev, &self.pose)?;
        let head = bev_encoder(ctx, cfg, fused)?;
        let logits = seg_head(ctx, cfg, head)?;
        let (oh, ow) = cfg.bev.output;
        let bev_logits = ctx.tape.reshape(logits, &[cfg.classes, oh, ow])?;
        let pv_logits = if with_pv { Some(pv_decoder(ctx, cfg, cam.pv_feat)?) } else { None };
        Ok(Forward { bev_logits, pv_logits, cam_bev, lidar_bev, depth_logits: cam.depth_logits })
    }

    /// Forward pass on a scene sample.
    pub fn forward_scene(&self, ctx: &mut Ctx, sample: &SceneSample, with_pv: bool) -> Result<Forward> {
        self.check_sample(sample)?;
        self.forward(ctx, &sample.images, &sample.lidar, with_pv)
    }

    /// Loss terms active under `w` (zero-weight terms are skipped) and the
    /// weighted total.
    pub fn losses(&self, ctx: &mut Ctx, f: &Forward, sample: &SceneSample, w: &LossWeights) -> Result<(Var, LossReport)> {
        let classes = self.cfg.classes;
        let bev = focal_ce(&mut ctx.tape, f.bev_logits, &sample.bev_target(classes), None, w.gamma, w.alpha)?;
        let mut terms = LossTerms { bev: Some(bev), ..LossTerms::default() };
        if w.xfa != 0.0 {
            terms.xfa = Some(xfa_loss_aligned(&mut ctx.tape, f.cam_bev, f.lidar_bev)?);
        }
        if w.pv != 0.0 || w.pv2bev != 0.0 {
            let (low, full) = f.pv_logits.ok_or_else(|| Error::Invalid("perspective-view losses need the decoder output".into()))?;
            if w.pv != 0.0 {
                terms.pv = Some(pv_loss(&mut ctx.tape, full, &sample.pv_target(classes), w)?);
            }
            if w.pv2bev != 0.0 {
                let target = sample.bev_target(classes);
                let (l, _) = pv2bev_loss(&mut ctx.tape, low, f.depth_logits, &self.frustum, &self.index, &self.cfg.bev, &target, w)?;
                terms.pv2bev = Some(l);
            }
        }
        total_loss(&mut ctx.tape, &terms, w)
    }
}
