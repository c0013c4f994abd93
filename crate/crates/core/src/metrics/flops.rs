//! Analytic multiply-add (MAC) counts of the inference path. Norms,
//! activations, softmax, voxelization and elementwise adds are not counted.

use std::fmt::Write as _;
use std::ops::Add;

use crate::blocks::ModelConfig;
use crate::error::{Error, Result};
use crate::fusion::{FusionConfig, FusionKind};

/// A layer's shape, enough to count its MACs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Layer {
    /// Output resolution `out`, `batch` images.
    Conv { batch: u64, cin: u64, cout: u64, k: u64, groups: u64, out: (u64, u64) },
    /// Transposed conv with kernel `k` over an input of resolution `input`.
    Deconv { batch: u64, cin: u64, cout: u64, k: u64, input: (u64, u64) },
    /// `[m, n] x [n, p]`.
    Matmul { m: u64, n: u64, p: u64 },
    /// Token attention: scores and weighted values for every head.
    Attention { tokens: u64, dim: u64, heads: u64 },
    /// Channel (transposed) attention over `tokens` positions.
    ChannelAttention { channels: u64, tokens: u64, heads: u64 },
    /// Deformable conv at stride 1; every bilinear tap costs 4 MACs.
    Deformable { cin: u64, cout: u64, k: u64, out: (u64, u64) },
    /// Bilinear resampling to `points` locations.
    Resample { channels: u64, points: u64 },
    /// Depth-weighted lifting of `points` frustum points.
    Lift { points: u64, channels: u64 },
}

impl Layer {
    pub fn macs(&self) -> u64 {
        match *self {
            Layer::Conv { batch, cin, cout, k, groups, out } => batch * cout * (cin / groups) * k * k * out.0 * out.1,
            Layer::Deconv { batch, cin, cout, k, input } => batch * cin * cout * k * k * input.0 * input.1,
            Layer::Matmul { m, n, p } => m * n * p,
            Layer::Attention { tokens, dim, .. } => 2 * tokens * tokens * dim,
            Layer::ChannelAttention { channels, tokens, heads } => 2 * channels * (channels / heads) * tokens,
            Layer::Deformable { cin, cout, k, out } => {
                let taps = cin * k * k * out.0 * out.1;
                taps * cout + 4 * taps
            }
            Layer::Resample { channels, points } => 4 * channels * points,
            Layer::Lift { points, channels } => points * channels,
        }
    }

    /// Parses `kind n1 n2 ...`, the field order of each variant.
    pub fn parse(line: &str) -> Result<Layer> {
        let mut it = line.split_whitespace();
        let kind = it.next().ok_or_else(|| Error::Invalid("empty layer line".into()))?;
        let nums: Vec<u64> = it
            .map(|t| t.parse().map_err(|_| Error::Invalid(format!("layer `{line}`: `{t}` is not a count"))))
            .collect::<Result<_>>()?;
        let want = match kind {
            "conv" => 7,
            "deconv" => 6,
            "matmul" | "attention" | "channel_attention" => 3,
            "deformable" => 5,
            "resample" | "lift" => 2,
            other => {
                return Err(Error::Invalid(format!(
                    "unknown layer kind `{other}` (expected conv, deconv, matmul, attention, channel_attention, deformable, resample, lift)"
                )))
            }
        };
        if nums.len() != want {
            return Err(Error::Invalid(format!("layer `{line}`: {kind} takes {want} counts, got {}", nums.len())));
        }
        let n = &nums;
        let layer = match kind {
            "conv" => Layer::Conv { batch: n[0], cin: n[1], cout: n[2], k: n[3], groups: n[4], out: (n[5], n[6]) },
            "deconv" => Layer::Deconv { batch: n[0], cin: n[1], cout: n[2], k: n[3], input: (n[4], n[5]) },
            "matmul" => Layer::Matmul { m: n[0], n: n[1], p: n[2] },
            "attention" => Layer::Attention { tokens: n[0], dim: n[1], heads: n[2] },
            "channel_attention" => Layer::ChannelAttention { channels: n[0], tokens: n[1], heads: n[2] },
            "deformable" => Layer::Deformable { cin: n[0], cout: n[1], k: n[2], out: (n[3], n[4]) },
            "resample" => Layer::Resample { channels: n[0], points: n[1] },
            _ => Layer::Lift { points: n[0], channels: n[1] },
        };
        let divides = match layer {
            Layer::Conv { cin, cout, groups, .. } => groups > 0 && cin % groups == 0 && cout % groups == 0,
            Layer::Attention { dim, heads, .. } => heads > 0 && dim % heads == 0,
            Layer::ChannelAttention { channels, heads, .. } => heads > 0 && channels % heads == 0,
            _ => true,
        };
        if !divides {
            return Err(Error::Invalid(format!("layer `{line}`: group/head count does not divide its width")));
        }
        Ok(layer)
    }
}

/// Layers of a plain-text listing, one per non-empty, non-`#` line.
pub fn parse_layers(text: &str) -> Result<Vec<Layer>> {
    text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')).map(Layer::parse).collect()
}

pub fn count_layers(layers: &[Layer]) -> u64 {
    layers.iter().map(Layer::macs).sum()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StageFlops {
    pub name: String,
    pub macs: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FlopBudget {
    pub stages: Vec<StageFlops>,
    pub total: u64,
    /// Extra MACs of the configured fuser over the concat fuser, relative
    /// to the concat-fuser total.
    pub fuser_overhead: f64,
}

impl Add for FlopBudget {
    type Output = FlopBudget;

    /// Budget of running `self` then `rhs`.
    fn add(mut self, rhs: FlopBudget) -> FlopBudget {
        let base = |b: &FlopBudget| b.total as f64 / (1.0 + b.fuser_overhead);
        let (b1, b2) = (base(&self), base(&rhs));
        self.stages.extend(rhs.stages);
        self.total += rhs.total;
        self.fuser_overhead = if b1 + b2 > 0.0 { self.total as f64 / (b1 + b2) - 1.0 } else { 0.0 };
        self
    }
}

impl FlopBudget {
    pub fn stage(&self, name: &str) -> Option<u64> {
        self.stages.iter().find(|s| s.name == name).map(|s| s.macs)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("stage,macs\n");
        for st in &self.stages {
            let _ = writeln!(s, "{},{}", st.name, st.macs);
        }
        let _ = writeln!(s, "total,{}", self.total);
        let _ = writeln!(s, "fuser_overhead,{}", self.fuser_overhead);
        s
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        for st in &self.stages {
            let _ = writeln!(s, "{:<16}{:>14} MACs", st.name, st.macs);
        }
        let _ = writeln!(s, "{:<16}{:>14} MACs", "total", self.total);
        let _ = writeln!(s, "fuser overhead  {:>13.3}%", 100.0 * self.fuser_overhead);
        s
    }
}

fn conv(batch: usize, cin: usize, cout: usize, k: usize, out: (usize, usize)) -> Layer {
    Layer::Conv { batch: batch as u64, cin: cin as u64, cout: cout as u64, k: k as u64, groups: 1, out: (out.0 as u64, out.1 as u64) }
}

fn matmul(m: usize, n: usize, p: usize) -> Layer {
    Layer::Matmul { m: m as u64, n: n as u64, p: p as u64 }
}

/// Inference stages other than the fuser, in execution order.
fn backbone_stages(cfg: &ModelConfig) -> Vec<(&'static str, Vec<Layer>)> {
    let n = cfg.n_cam;
    let (ih, iw) = cfg.image;
    let (fh, fw) = cfg.feature_shape();
    let pv = cfg.pv_channels;
    let latent = cfg.bev.latent;
    let out = cfg.bev.output;
    let f = cfg.bev.upsample_factor();
    let camera = vec![
        conv(n, 3, cfg.cam_stem, 3, (ih / 2, iw / 2)),
        conv(n, cfg.cam_stem, pv, 3, (fh, fw)),
        conv(n, pv, pv, 3, (fh, fw)),
        conv(n, pv, pv, 3, (fh / 2, fw / 2)),
        conv(n, pv, pv, 1, (fh / 2, fw / 2)),
        conv(n, pv, pv, 1, (fh, fw)),
        conv(n, pv, cfg.depth_bins + cfg.cam_channels, 1, (fh, fw)),
    ];
    let lift = vec![Layer::Lift { points: (n * cfg.depth_bins * fh * fw) as u64, channels: cfg.cam_channels as u64 }];
    let lidar = vec![conv(1, cfg.lidar_in, cfg.lidar_channels, 3, latent), conv(1, cfg.lidar_channels, cfg.lidar_channels, 3, latent)];
    let c = cfg.fused_channels;
    let bev = vec![
        conv(1, c, c, 3, latent),
        conv(1, c, c, 3, latent),
        Layer::Deconv { batch: 1, cin: c as u64, cout: cfg.head_channels as u64, k: f as u64, input: (latent.0 as u64, latent.1 as u64) },
    ];
    let h = cfg.head_channels;
    let head = vec![conv(1, h, h, 3, out), conv(1, h, h, 3, out), conv(1, h, cfg.classes, 1, out)];
    vec![("camera", camera), ("view_transform", lift), ("lidar", lidar), ("bev_encoder", bev), ("head", head)]
}

/// Layers of the fuser selected by `fcfg.kind`.
pub fn fuser_layers(cfg: &ModelConfig, fcfg: &FusionConfig) -> Vec<Layer> {
    let cin = cfg.cam_channels + cfg.lidar_channels;
    let latent = cfg.bev.latent;
    let (lh, lw) = latent;
    let (h, w) = (lh / fcfg.stride, lw / fcfg.stride);
    let t = h * w;
    let l = fcfg.embed;
    let embed = conv(1, cin, l, fcfg.patch, (h, w));
    let restore = Layer::Deconv { batch: 1, cin: l as u64, cout: cfg.fused_channels as u64, k: fcfg.stride as u64, input: (h as u64, w as u64) };
    match fcfg.kind {
        FusionKind::Concat => vec![conv(1, cin, cfg.fused_channels, 3, latent)],
        FusionKind::SelfAttention => vec![
            embed,
            matmul(t, l, l),
            matmul(t, l, l),
            matmul(t, l, l),
            Layer::Attention { tokens: t as u64, dim: l as u64, heads: fcfg.heads as u64 },
            matmul(t, l, l),
            restore,
            conv(1, cin, cfg.fused_channels, 3, latent),
        ],
        FusionKind::Sdta => {
            let half = l / 2;
            let dw = |c: usize| Layer::Conv { batch: 1, cin: c as u64, cout: c as u64, k: 3, groups: c as u64, out: (h as u64, w as u64) };
            vec![
                embed,
                dw(half),
                dw(l - half),
                dw(l - half),
                matmul(l, l, t),
                matmul(l, l, t),
                matmul(l, l, t),
                Layer::ChannelAttention { channels: l as u64, tokens: t as u64, heads: fcfg.heads as u64 },
                matmul(l, l, t),
                matmul(2 * l, l, t),
                matmul(l, 2 * l, t),
                restore,
            ]
        }
        FusionKind::PoseDcn => {
            let poses = 16 * (cfg.n_cam + 1);
            vec![
                matmul(1, poses, fcfg.pose_hidden),
                matmul(1, fcfg.pose_hidden, fcfg.pose_channels),
                Layer::Resample { channels: fcfg.pose_channels as u64, points: (lh * lw) as u64 },
                conv(1, cin + fcfg.pose_channels, fcfg.offset_channels(), 3, latent),
                Layer::Deformable {
                    cin: cin as u64,
                    cout: cfg.fused_channels as u64,
                    k: fcfg.patch as u64,
                    out: (lh as u64, lw as u64),
                },
            ]
        }
    }
}

/// Inference budget of the whole network with the configured fuser. The
/// perspective-view decoder only runs in training and is not counted.
pub fn count_flops(cfg: &ModelConfig, fcfg: &FusionConfig) -> Result<FlopBudget> {
    cfg.validate()?;
    fcfg.validate(cfg.bev.latent)?;
    let mut stages: Vec<StageFlops> = Vec::new();
    let mut backbone = 0;
    for (name, layers) in backbone_stages(cfg) {
        let macs = count_layers(&layers);
        backbone += macs;
        stages.push(StageFlops { name: name.into(), macs });
        if name == "lidar" {
            stages.push(StageFlops { name: "fuser".into(), macs: count_layers(&fuser_layers(cfg, fcfg)) });
        }
    }
    let fuser = stages.iter().find(|s| s.name == "fuser").map_or(0, |s| s.macs);
    let concat = count_layers(&fuser_layers(cfg, &FusionConfig { kind: FusionKind::Concat, ..fcfg.clone() }));
    let total = backbone + fuser;
    let base = backbone + concat;
    Ok(FlopBudget { stages, total, fuser_overhead: (total as f64 - base as f64) / base as f64 })
}
