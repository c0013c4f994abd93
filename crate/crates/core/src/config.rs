//! Plain-text run configuration: `[section]` headers and `key = value`
//! lines, `#` comments. Every key has a default; unknown sections, unknown
//! keys and repeated keys are rejected by name.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::fusion::FusionKind;
use crate::scene::{LidarConfig, SceneConfig, CLASS_NAMES};
use crate::train::{TrainConfig, Variant};

/// Dataset generation settings.
#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub scenes: usize,
    pub val: usize,
    pub seed: u64,
    pub noise_sigma: f64,
    pub label_flip: f64,
    pub lidar: LidarConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig { scenes: 80, val: 16, seed: 0, noise_sigma: 0.0, label_flip: 0.0, lidar: LidarConfig::default() }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub data: DataConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig { train: TrainConfig::for_variant(Variant::Baseline), data: DataConfig::default() }
    }
}

enum Slot<'a> {
    Usize(&'a mut usize),
    U64(&'a mut u64),
    F64(&'a mut f64),
    Kind(&'a mut FusionKind),
    Variant(&'a mut Variant),
}

impl Slot<'_> {
    fn show(&self) -> String {
        match self {
            Slot::Usize(v) => v.to_string(),
            Slot::U64(v) => v.to_string(),
            Slot::F64(v) => format!("{v:?}"),
            Slot::Kind(v) => v.to_string(),
            Slot::Variant(v) => v.to_string(),
        }
    }

    fn set(self, text: &str, key: &str) -> Result<()> {
        let bad = |what: &str| Error::Config { key: key.into(), msg: format!("`{text}` is not {what}") };
        match self {
            Slot::Usize(v) => *v = text.parse().map_err(|_| bad("a non-negative integer"))?,
            Slot::U64(v) => *v = text.parse().map_err(|_| bad("a non-negative integer"))?,
            Slot::F64(v) => {
                let x: f64 = text.parse().map_err(|_| bad("a number"))?;
                if !x.is_finite() {
                    return Err(bad("a finite number"));
                }
                *v = x;
            }
            Slot::Kind(v) => *v = text.parse().map_err(|_| bad("a fusion kind (concat, self_attention, sdta, pose_dcn)"))?,
            Slot::Variant(v) => *v = text.parse().map_err(|_| bad("a variant (baseline, xalign_view, xalign_losses, xalign_all)"))?,
        }
        Ok(())
    }
}

struct Field {
    section: &'static str,
    key: &'static str,
    doc: &'static str,
    slot: fn(&mut RunConfig) -> Slot<'_>,
}

macro_rules! field {
    ($sec:literal, $key:literal, $doc:literal, $kind:ident, |$c:ident| $place:expr) => {
        Field { section: $sec, key: $key, doc: $doc, slot: |$c: &mut RunConfig| Slot::$kind(&mut $place) }
    };
}

fn fields() -> Vec<Field> {
    vec![
        field!("geometry", "n_cam", "cameras on the ring", Usize, |c| c.train.model.n_cam),
        field!("geometry", "image_rows", "camera image height in pixels", Usize, |c| c.train.model.image.0),
        field!("geometry", "image_cols", "camera image width in pixels", Usize, |c| c.train.model.image.1),
        field!("geometry", "feature_stride", "image-to-feature downsampling", Usize, |c| c.train.model.feature_stride),
        field!("geometry", "focal", "focal length in pixels", F64, |c| c.train.model.focal),
        field!("geometry", "cam_height", "camera height above ground, m", F64, |c| c.train.model.cam_height),
        field!("geometry", "cam_pitch_deg", "downward camera pitch, degrees", F64, |c| c.train.model.cam_pitch_deg),
        field!("geometry", "depth_bins", "depth bins per pixel", Usize, |c| c.train.model.depth_bins),
        field!("geometry", "depth_near", "first depth bin center, m", F64, |c| c.train.model.depth_range.0),
        field!("geometry", "depth_far", "last depth bin center, m", F64, |c| c.train.model.depth_range.1),
        field!("geometry", "x_min", "BEV extent behind the ego, m", F64, |c| c.train.model.bev.x_range.0),
        field!("geometry", "x_max", "BEV extent ahead of the ego, m", F64, |c| c.train.model.bev.x_range.1),
        field!("geometry", "y_min", "BEV extent to the right, m", F64, |c| c.train.model.bev.y_range.0),
        field!("geometry", "y_max", "BEV extent to the left, m", F64, |c| c.train.model.bev.y_range.1),
        field!("geometry", "z_min", "lowest height kept when lifting, m", F64, |c| c.train.model.bev.z_range.0),
        field!("geometry", "z_max", "highest height kept when lifting, m", F64, |c| c.train.model.bev.z_range.1),
        field!("geometry", "latent_rows", "BEV feature grid rows", Usize, |c| c.train.model.bev.latent.0),
        field!("geometry", "latent_cols", "BEV feature grid columns", Usize, |c| c.train.model.bev.latent.1),
        field!("geometry", "output_rows", "BEV output grid rows", Usize, |c| c.train.model.bev.output.0),
        field!("geometry", "output_cols", "BEV output grid columns", Usize, |c| c.train.model.bev.output.1),
        field!("model", "cam_stem", "first camera stage width", Usize, |c| c.train.model.cam_stem),
        field!("model", "pv_channels", "perspective-view feature width", Usize, |c| c.train.model.pv_channels),
        field!("model", "cam_channels", "lifted camera BEV feature width", Usize, |c| c.train.model.cam_channels),
        field!("model", "lidar_in", "pillar channels (fixed at 5)", Usize, |c| c.train.model.lidar_in),
        field!("model", "lidar_channels", "LiDAR BEV feature width", Usize, |c| c.train.model.lidar_channels),
        field!("model", "fused_channels", "fused BEV feature width", Usize, |c| c.train.model.fused_channels),
        field!("model", "head_channels", "segmentation head width", Usize, |c| c.train.model.head_channels),
        field!("model", "pv_hidden", "perspective-view decoder width", Usize, |c| c.train.model.pv_hidden),
        field!("model", "classes", "segmentation classes", Usize, |c| c.train.model.classes),
        field!("fusion", "kind", "concat, self_attention, sdta or pose_dcn", Kind, |c| c.train.fusion.kind),
        field!("fusion", "patch", "patch size of attention embeddings and deformable kernel size", Usize, |c| c.train.fusion.patch),
        field!("fusion", "stride", "patch stride of attention embeddings", Usize, |c| c.train.fusion.stride),
        field!("fusion", "embed", "attention embedding width", Usize, |c| c.train.fusion.embed),
        field!("fusion", "heads", "attention heads", Usize, |c| c.train.fusion.heads),
        field!("fusion", "pose_channels", "pose embedding channels", Usize, |c| c.train.fusion.pose_channels),
        field!("fusion", "pose_hidden", "pose MLP hidden width", Usize, |c| c.train.fusion.pose_hidden),
        field!("losses", "bev", "weight of the BEV focal loss", F64, |c| c.train.weights.bev),
        field!("losses", "xfa", "weight of the cross-modal cosine term (<= 0)", F64, |c| c.train.weights.xfa),
        field!("losses", "pv", "weight of the perspective-view loss", F64, |c| c.train.weights.pv),
        field!("losses", "pv2bev", "weight of the projected perspective-view loss", F64, |c| c.train.weights.pv2bev),
        field!("losses", "gamma", "focal exponent", F64, |c| c.train.weights.gamma),
        field!("losses", "alpha", "focal positive-class weight", F64, |c| c.train.weights.alpha),
        field!("train", "variant", "baseline, xalign_view, xalign_losses or xalign_all", Variant, |c| c.train.variant),
        field!("train", "lr", "learning rate", F64, |c| c.train.lr),
        field!("train", "momentum", "SGD momentum", F64, |c| c.train.momentum),
        field!("train", "steps", "optimization steps, one scene each", U64, |c| c.train.steps),
        field!("train", "seed", "initialization and scene-order seed", U64, |c| c.train.seed),
        field!("train", "eval_every", "validation period in steps, 0 for none", U64, |c| c.train.eval_every),
        field!("data", "scenes", "scenes generated", Usize, |c| c.data.scenes),
        field!("data", "val", "trailing scenes held out for validation", Usize, |c| c.data.val),
        field!("data", "seed", "seed of the first scene", U64, |c| c.data.seed),
        field!("data", "noise_sigma", "image noise baked into the dataset", F64, |c| c.data.noise_sigma),
        field!("data", "label_flip", "probability of corrupting a perspective-view label", F64, |c| c.data.label_flip),
        field!("data", "lidar_rings", "LiDAR rings", Usize, |c| c.data.lidar.rings),
        field!("data", "lidar_points_per_ring", "LiDAR azimuth samples per ring", Usize, |c| c.data.lidar.points_per_ring),
    ]
}

const SECTIONS: [&str; 6] = ["geometry", "model", "fusion", "losses", "train", "data"];

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let table = fields();
        let mut cfg = RunConfig::default();
        let mut section: Option<String> = None;
        let mut seen = BTreeSet::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                let name = name.trim();
                if !SECTIONS.contains(&name) {
                    return Err(Error::Config { key: name.into(), msg: format!("unknown section on line {}", n + 1) });
                }
                section = Some(name.to_string());
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Config {
                key: line.into(),
                msg: format!("line {} is neither `[section]` nor `key = value`", n + 1),
            })?;
            let sec = section.as_deref().ok_or_else(|| Error::Config { key: k.trim().into(), msg: "key outside any section".into() })?;
            let full = format!("{sec}.{}", k.trim());
            let f = table
                .iter()
                .find(|f| f.section == sec && f.key == k.trim())
                .ok_or_else(|| Error::Config { key: full.clone(), msg: "unknown key".into() })?;
            if !seen.insert(full.clone()) {
                return Err(Error::Config { key: full, msg: "given twice".into() });
            }
            (f.slot)(&mut cfg).set(v.trim(), &full)?;
        }
        if !seen.contains("fusion.kind") {
            cfg.train.fusion.kind = cfg.train.variant.default_fusion();
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Every key with its current value, documented.
    pub fn serialize(&self) -> String {
        let defaults = RunConfig::default();
        let mut out = String::new();
        let mut me = self.clone();
        let mut d = defaults;
        let mut current = "";
        for f in fields() {
            if f.section != current {
                let _ = writeln!(out, "{}[{}]", if current.is_empty() { "" } else { "\n" }, f.section);
                current = f.section;
            }
            let _ = writeln!(out, "# {} (default {})", f.doc, (f.slot)(&mut d).show());
            let _ = writeln!(out, "{} = {}", f.key, (f.slot)(&mut me).show());
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        let cfg = |key: &str, msg: String| Err(Error::Config { key: key.into(), msg });
        if self.train.model.classes != CLASS_NAMES.len() {
            return cfg("model.classes", format!("the scene generator labels {} classes", CLASS_NAMES.len()));
        }
        if self.data.val > self.data.scenes {
            return cfg("data.val", format!("{} validation scenes out of {}", self.data.val, self.data.scenes));
        }
        if !(self.data.noise_sigma >= 0.0) {
            return cfg("data.noise_sigma", "must be >= 0".into());
        }
        if !(0.0..=1.0).contains(&self.data.label_flip) {
            return cfg("data.label_flip", "must be in [0, 1]".into());
        }
        if self.data.lidar.rings == 0 {
            return cfg("data.lidar_rings", "must be >= 1".into());
        }
        Ok(())
    }

    pub fn scene_config(&self) -> Result<SceneConfig> {
        let mut s = SceneConfig::from_model(&self.train.model)?;
        s.lidar = self.data.lidar.clone();
        s.label_flip = self.data.label_flip;
        s.noise_sigma = self.data.noise_sigma;
        Ok(s)
    }
}
