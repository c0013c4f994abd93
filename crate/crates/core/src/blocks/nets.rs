use super::Ctx;
use crate::error::{Error, Result};
use crate::geometry::{depth_bins, BevSpec, CameraRig, Frustum};
use crate::tensor::Var;

/// Widths and geometry of the whole network.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub n_cam: usize,
    /// `(rows, cols)` of every camera image.
    pub image: (usize, usize),
    pub feature_stride: usize,
    pub focal: f64,
    pub cam_height: f64,
    pub cam_pitch_deg: f64,
    pub depth_bins: usize,
    pub depth_range: (f64, f64),
    pub bev: BevSpec,
    pub cam_stem: usize,
    /// Width of the perspective-view feature map.
    pub pv_channels: usize,
    /// Width of the lifted camera BEV feature.
    pub cam_channels: usize,
    pub lidar_in: usize,
    pub lidar_channels: usize,
    pub fused_channels: usize,
    pub head_channels: usize,
    pub pv_hidden: usize,
    pub classes: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            n_cam: 4,
            image: (32, 64),
            feature_stride: 4,
            focal: 32.0,
            cam_height: 1.5,
            cam_pitch_deg: 15.0,
            depth_bins: 8,
            depth_range: (1.0, 8.0),
            bev: BevSpec::default(),
            cam_stem: 8,
            pv_channels: 16,
            cam_channels: 16,
            lidar_in: 5,
            lidar_channels: 24,
            fused_channels: 32,
            head_channels: 16,
            pv_hidden: 32,
            classes: 4,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Invalid(m));
        self.bev.validate()?;
        if self.feature_stride != 4 {
            return bad(format!("feature_stride must be 4 (two stride-2 stages), got {}", self.feature_stride));
        }
        let (h, w) = self.image;
        // the FPN's coarse level halves the feature map once more
        if h % 8 != 0 || w % 8 != 0 || h == 0 || w == 0 {
            return bad(format!("image size {h}x{w} must be a non-zero multiple of 8"));
        }
        if self.classes == 0 || self.n_cam == 0 || self.depth_bins == 0 {
            return bad("classes, cameras and depth bins must all be >= 1".into());
        }
        let widths = [
            self.cam_stem,
            self.pv_channels,
            self.cam_channels,
            self.lidar_channels,
            self.fused_channels,
            self.head_channels,
            self.pv_hidden,
        ];
        if widths.contains(&0) {
            return bad("channel widths must be >= 1".into());
        }
        if self.lidar_in != 5 {
            return bad(format!("the pillar grid has 5 channels, lidar_in is {}", self.lidar_in));
        }
        if !(self.depth_range.0 > 0.0 && self.depth_range.1 > self.depth_range.0) {
            return bad("depth range must satisfy 0 < near < far".into());
        }
        Ok(())
    }

    /// Perspective-view feature resolution.
    pub fn feature_shape(&self) -> (usize, usize) {
        (self.image.0 / self.feature_stride, self.image.1 / self.feature_stride)
    }

    pub fn depth_centers(&self) -> Vec<f64> {
        depth_bins(self.depth_bins, self.depth_range.0, self.depth_range.1)
    }

    pub fn rig(&self) -> Result<CameraRig> {
        CameraRig::ring(self.n_cam, self.image, self.focal, self.cam_height, self.cam_pitch_deg)
    }

    pub fn frustum(&self, rig: &CameraRig) -> Result<Frustum> {
        Frustum::build(rig, self.feature_shape(), &self.depth_centers())
    }
}

pub struct CameraOutput {
    /// Last perspective-view feature before the FPN, `[N, pv, H', W']`.
    pub pv_feat: Var,
    pub depth_logits: Var,
    /// Per-pixel features to lift, `[N, cam, H', W']`.
    pub features: Var,
}

fn expect_shape(ctx: &Ctx, op: &'static str, x: Var, want: &[usize]) -> Result<()> {
    if ctx.tape.shape(x) != want {
        return Err(Error::shape(op, format!("expected {want:?}, got {:?}", ctx.tape.shape(x))));
    }
    Ok(())
}

/// Images `[N, 3, H, W]` in `[0, 1]` to depth logits and liftable features.
pub fn camera_encoder(ctx: &mut Ctx, cfg: &ModelConfig, images: Var) -> Result<CameraOutput> {
    expect_shape(ctx, "camera_encoder", images, &[cfg.n_cam, 3, cfg.image.0, cfg.image.1])?;
    let pv = cfg.pv_channels;
    let x = ctx.conv_bn_relu("cam.s1", images, 3, cfg.cam_stem, 3, 2)?;
    let x = ctx.conv_bn_relu("cam.s2", x, cfg.cam_stem, pv, 3, 2)?;
    let pv_feat = ctx.conv_bn_relu("cam.s3", x, pv, pv, 3, 1)?;
    let coarse = ctx.conv_bn_relu("cam.down", pv_feat, pv, pv, 3, 2)?;
    let f = fpn(ctx, "cam.fpn", &[pv_feat, coarse], pv)?;
    let d = cfg.depth_bins;
    let head = ctx.conv("cam.lift", f, pv, d + cfg.cam_channels, 1, 1, 0, true)?;
    let depth_logits = ctx.tape.slice(head, 1, 0, d)?;
    let features = ctx.tape.slice(head, 1, d, cfg.cam_channels)?;
    Ok(CameraOutput { pv_feat, depth_logits, features })
}

/// Top-down feature pyramid over `levels` (finest first, each half the
/// resolution of the previous): 1x1 laterals to `width`, nearest 2x
/// upsampling and addition. Returns the finest merged level.
pub fn fpn(ctx: &mut Ctx, key: &str, levels: &[Var], width: usize) -> Result<Var> {
    if levels.len() < 2 {
        return Err(Error::shape("fpn", format!("needs at least 2 levels, got {}", levels.len())));
    }
    for pair in levels.windows(2) {
        let (a, b) = (ctx.tape.shape(pair[0]), ctx.tape.shape(pair[1]));
        if a.len() != 4 || b.len() != 4 || a[0] != b[0] || a[2] != 2 * b[2] || a[3] != 2 * b[3] {
            return Err(Error::shape("fpn", format!("level {b:?} is not half of {a:?}")));
        }
    }
    let mut top: Option<Var> = None;
    for (i, &lvl) in levels.iter().enumerate().rev() {
        let c = ctx.tape.shape(lvl)[1];
        let lat = ctx.conv(&format!("{key}.lat{i}"), lvl, c, width, 1, 1, 0, true)?;
        top = Some(match top {
            None => lat,
            Some(t) => {
                let up = ctx.tape.upsample_nearest(t, 2)?;
                ctx.tape.add(lat, up)?
            }
        });
    }
    Ok(top.expect("at least two levels"))
}

/// Pillar grid `[1, 5, H_lat, W_lat]` to LiDAR BEV features.
pub fn lidar_encoder(ctx: &mut Ctx, cfg: &ModelConfig, pillars: Var) -> Result<Var> {
    let (h, w) = cfg.bev.latent;
    expect_shape(ctx, "lidar_encoder", pillars, &[1, cfg.lidar_in, h, w])?;
    let x = ctx.conv_bn_relu("lidar.s1", pillars, cfg.lidar_in, cfg.lidar_channels, 3, 1)?;
    ctx.conv_bn_relu("lidar.s2", x, cfg.lidar_channels, cfg.lidar_channels, 3, 1)
}

/// Fused latent features to output-resolution head features.
pub fn bev_encoder(ctx: &mut Ctx, cfg: &ModelConfig, fused: Var) -> Result<Var> {
    let (h, w) = cfg.bev.latent;
    let c = cfg.fused_channels;
    expect_shape(ctx, "bev_encoder", fused, &[1, c, h, w])?;
    let x = ctx.conv_bn_relu("bev.s1", fused, c, c, 3, 1)?;
    let x = ctx.conv_bn_relu("bev.s2", x, c, c, 3, 1)?;
    let f = cfg.bev.upsample_factor();
    let x = ctx.deconv("bev.up", x, c, cfg.head_channels, f, f, false)?;
    let x = ctx.batch_norm("bev.up.bn", x, cfg.head_channels)?;
    Ok(ctx.tape.relu(x))
}

/// Head features to raw class logits `[1, S, H_bev, W_bev]`.
pub fn seg_head(ctx: &mut Ctx, cfg: &ModelConfig, feat: Var) -> Result<Var> {
    let c = cfg.head_channels;
    let x = ctx.conv_bn_relu("head.s1", feat, c, c, 3, 1)?;
    let x = ctx.conv_bn_relu("head.s2", x, c, c, 3, 1)?;
    ctx.conv("head.out", x, c, cfg.classes, 1, 1, 0, true)
}

/// Perspective-view segmentation logits, returned at feature resolution
/// and bilinearly upsampled to image resolution.
pub fn pv_decoder(ctx: &mut Ctx, cfg: &ModelConfig, pv_feat: Var) -> Result<(Var, Var)> {
    let (fh, fw) = cfg.feature_shape();
    expect_shape(ctx, "pv_decoder", pv_feat, &[cfg.n_cam, cfg.pv_channels, fh, fw])?;
    let x = ctx.conv_bn_relu("pv.s1", pv_feat, cfg.pv_channels, cfg.pv_hidden, 3, 1)?;
    let x = ctx.conv_bn_relu("pv.s2", x, cfg.pv_hidden, cfg.pv_hidden, 3, 1)?;
    let low = ctx.conv("pv.out", x, cfg.pv_hidden, cfg.classes, 1, 1, 0, true)?;
    let full = ctx.tape.grid_resample(low, cfg.image)?;
    Ok((low, full))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blocks::{param_gradcheck, sample_probes, Mode, ParamStore};
    use crate::tensor::{Tape, Tensor};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small() -> ModelConfig {
        ModelConfig {
            n_cam: 2,
            image: (8, 16),
            bev: BevSpec { latent: (4, 4), output: (8, 8), ..BevSpec::default() },
            cam_stem: 3,
            pv_channels: 4,
            cam_channels: 3,
            lidar_channels: 4,
            fused_channels: 4,
            head_channels: 3,
            pv_hidden: 4,
            depth_bins: 3,
            classes: 2,
            ..ModelConfig::default()
        }
    }

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape.to_vec(), |_| rng.random_range(0.0..1.0))
    }

    /// Builds the block, then checks zero-input, shape and parameter gradients.
    fn exercise(input_shape: &[usize], out_shape: &[usize], block: impl Fn(&mut Ctx, Var) -> Result<Var>) {
        let empty = ParamStore::new();
        let store = {
            let mut c = Ctx::for_init(&empty, 0);
            let x = c.tape.constant(Tensor::zeros(input_shape.to_vec()));
            block(&mut c, x).unwrap();
            c.into_created()
        };
        for mode in [Mode::Train, Mode::Eval] {
            let mut c = Ctx::new(Tape::no_grad(), &store, mode);
            let x = c.tape.constant(Tensor::zeros(input_shape.to_vec()));
            let y = block(&mut c, x).unwrap();
            assert_eq!(c.tape.shape(y), out_shape);
            assert!(c.tape.value(y).data().iter().all(|v| *v == 0.0));
        }
        let x = random(input_shape, 9);
        let probes = sample_probes(&store, 12, 1);
        let err = param_gradcheck(
            &store,
            &|c: &mut Ctx| {
                let xv = c.tape.constant(x.clone());
                let y = block(c, xv)?;
                let probe = c.tape.constant(random(c.tape.shape(y), 10));
                let q = c.tape.mul(y, probe)?;
                let q = c.tape.mul(q, y)?;
                Ok(c.tape.sum(q))
            },
            &probes,
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-4, "{err}");
    }

    #[test]
    fn camera_encoder_block() {
        let cfg = small();
        exercise(&[2, 3, 8, 16], &[2, 3, 2, 4], |c, x| Ok(camera_encoder(c, &cfg, x)?.features));
        exercise(&[2, 3, 8, 16], &[2, 3, 2, 4], |c, x| Ok(camera_encoder(c, &cfg, x)?.depth_logits));
        let empty = ParamStore::new();
        let mut c = Ctx::for_init(&empty, 0);
        let bad = c.tape.constant(Tensor::zeros([2, 3, 8, 8]));
        assert!(camera_encoder(&mut c, &cfg, bad).is_err());
    }

    #[test]
    fn other_blocks() {
        let cfg = small();
        exercise(&[1, 5, 4, 4], &[1, 4, 4, 4], |c, x| lidar_encoder(c, &cfg, x));
        exercise(&[1, 4, 4, 4], &[1, 3, 8, 8], |c, x| bev_encoder(c, &cfg, x));
        exercise(&[1, 3, 8, 8], &[1, 2, 8, 8], |c, x| seg_head(c, &cfg, x));
        exercise(&[2, 4, 2, 4], &[2, 2, 8, 16], |c, x| Ok(pv_decoder(c, &cfg, x)?.1));
    }

    #[test]
    fn fpn_contract_and_reference() {
        let empty = ParamStore::new();
        let mut c = Ctx::for_init(&empty, 4);
        let one = c.tape.constant(Tensor::zeros([1, 2, 4, 4]));
        assert!(fpn(&mut c, "f", &[one], 2).is_err());
        let odd = c.tape.constant(Tensor::zeros([1, 2, 3, 3]));
        assert!(fpn(&mut c, "f", &[one, odd], 2).is_err());

        let fine = random(&[1, 2, 4, 6], 1);
        let coarse = random(&[1, 3, 2, 3], 2);
        let (f, k) = (c.tape.constant(fine.clone()), c.tape.constant(coarse.clone()));
        fpn(&mut c, "f", &[f, k], 5).unwrap();
        let mut store = c.into_created();
        // nonzero biases so the reference exercises them
        for (name, p) in store.params_mut().iter_mut() {
            if name.ends_with(".b") {
                *p = random(p.shape(), 3);
            }
        }
        let mut c = Ctx::new(Tape::no_grad(), &store, Mode::Eval);
        let (fv, kv) = (c.tape.constant(fine.clone()), c.tape.constant(coarse.clone()));
        let out = fpn(&mut c, "f", &[fv, kv], 5).unwrap();
        let out = c.tape.value(out).clone();

        let lateral = |x: &Tensor, w: &Tensor, b: &Tensor, i: usize, j: usize, o: usize| -> f64 {
            let (cin, h, wd) = (x.shape()[1], x.shape()[2], x.shape()[3]);
            b.data()[o] + (0..cin).map(|ci| w.data()[o * cin + ci] * x.data()[(ci * h + i) * wd + j]).sum::<f64>()
        };
        let p = store.params();
        for o in 0..5 {
            for i in 0..4 {
                for j in 0..6 {
                    let want = lateral(&fine, &p["f.lat0.w"], &p["f.lat0.b"], i, j, o)
                        + lateral(&coarse, &p["f.lat1.w"], &p["f.lat1.b"], i / 2, j / 2, o);
                    assert!((out.data()[(o * 4 + i) * 6 + j] - want).abs() < 1e-12);
                }
            }
        }

        // zero coarse level with zero biases: only the fine lateral remains
        let store = {
            let mut c = Ctx::for_init(&empty, 4);
            let (f, k) = (c.tape.constant(fine.clone()), c.tape.constant(coarse.clone()));
            fpn(&mut c, "f", &[f, k], 5).unwrap();
            c.into_created()
        };
        let mut c = Ctx::new(Tape::no_grad(), &store, Mode::Eval);
        let fv = c.tape.constant(fine.clone());
        let kv = c.tape.constant(Tensor::zeros([1, 3, 2, 3]));
        let out = fpn(&mut c, "f", &[fv, kv], 5).unwrap();
        let lat = c.conv("f.lat0", fv, 2, 5, 1, 1, 0, true).unwrap();
        assert_eq!(c.tape.value(out), c.tape.value(lat));
    }

    #[test]
    fn default_config_is_valid() {
        let cfg = ModelConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.feature_shape(), (8, 16));
        assert_eq!(cfg.depth_centers(), (1..=8).map(f64::from).collect::<Vec<_>>());
        let bad = ModelConfig { image: (30, 64), ..ModelConfig::default() };
        assert!(bad.validate().is_err());
    }
}
