use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{World, BACKGROUND, OBSTACLE, PALETTE, SKY};
use crate::error::{Error, Result};
use crate::geometry::CameraRig;
use crate::tensor::Tensor;

/// Nearest surface along a ray.
#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) struct Hit {
    pub t: f64,
    pub point: [f64; 3],
    pub class: u8,
    /// Axis of the box face that was hit, `None` for the ground.
    pub face: Option<usize>,
}

pub(crate) fn trace(world: &World, o: [f64; 3], d: [f64; 3]) -> Option<Hit> {
    let at = |t: f64| [o[0] + t * d[0], o[1] + t * d[1], o[2] + t * d[2]];
    let mut best: Option<Hit> = None;
    if d[2] < -1e-12 {
        let t = -o[2] / d[2];
        let mut p = at(t);
        p[2] = 0.0;
        best = Some(Hit { t, point: p, class: world.class_at(p[0], p[1]), face: None });
    }
    for b in &world.boxes {
        if let Some(t) = b.intersect(o, d) {
            if best.is_none_or(|h| t < h.t) {
                let p = at(t);
                let face = (0..3)
                    .min_by(|&a, &c| {
                        let da = (p[a] - b.min[a]).abs().min((p[a] - b.max[a]).abs());
                        let dc = (p[c] - b.min[c]).abs().min((p[c] - b.max[c]).abs());
                        da.total_cmp(&dc)
                    })
                    .expect("three axes");
                best = Some(Hit { t, point: p, class: OBSTACLE, face: Some(face) });
            }
        }
    }
    best
}

/// Uniform value in `[0, 1)` from integer coordinates.
fn hash01(class: u8, a: i64, b: i64) -> f64 {
    let mut z = (u64::from(class) << 56) ^ (a as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (b as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^= z >> 31;
    (z >> 11) as f64 / (1u64 << 53) as f64
}

fn shade(hit: &Hit) -> [f64; 3] {
    let base = PALETTE[hit.class as usize].color;
    let texture = 0.88 + 0.24 * hash01(hit.class, (hit.point[0] * 2.0).floor() as i64, (hit.point[1] * 2.0).floor() as i64);
    let light = match hit.face {
        None | Some(2) => 1.0,
        Some(0) => 0.8,
        Some(_) => 0.65,
    };
    base.map(|c| (c * texture * light).clamp(0.0, 1.0))
}

/// Images `[N, 3, H, W]` and per-pixel labels in `[N, H, W]` order. Each
/// pixel casts one ray through its center; sky is labeled background.
pub fn render_cameras(world: &World, rig: &CameraRig) -> (Tensor, Vec<u8>) {
    let (h, w) = rig.image();
    let n = rig.len();
    let plane = h * w;
    let mut img = vec![0.0; n * 3 * plane];
    let mut labels = vec![BACKGROUND; n * plane];
    for cam in 0..n {
        for i in 0..h {
            for j in 0..w {
                let (o, d) = rig.ray(cam, j as f64 + 0.5, i as f64 + 0.5);
                let p = i * w + j;
                let (color, label) = match trace(world, o, d) {
                    Some(hit) => (shade(&hit), hit.class),
                    None => (SKY, BACKGROUND),
                };
                for (ch, v) in color.iter().enumerate() {
                    img[(cam * 3 + ch) * plane + p] = *v;
                }
                labels[cam * plane + p] = label;
            }
        }
    }
    (Tensor::new([n, 3, h, w], img).expect("sized above"), labels)
}

/// Spinning LiDAR with evenly spaced ring elevations.
#[derive(Clone, Debug, PartialEq)]
pub struct LidarConfig {
    /// Sensor height above the ground.
    pub height: f64,
    pub rings: usize,
    pub points_per_ring: usize,
    /// Elevation of the lowest and highest ring, degrees.
    pub elevation_deg: (f64, f64),
    /// Returns outside this range are dropped.
    pub range: (f64, f64),
    pub reflectivity_jitter: f64,
}

impl Default for LidarConfig {
    fn default() -> Self {
        LidarConfig {
            height: 1.8,
            rings: 32,
            points_per_ring: 360,
            elevation_deg: (-40.0, 4.0),
            range: (1.0, 40.0),
            reflectivity_jitter: 0.02,
        }
    }
}

impl LidarConfig {
    pub fn ring_elevation(&self, ring: usize) -> f64 {
        let (lo, hi) = self.elevation_deg;
        let e = if self.rings > 1 { lo + (hi - lo) * ring as f64 / (self.rings - 1) as f64 } else { lo };
        e.to_radians()
    }
}

/// `[P, 5]` returns `(x, y, z, reflectivity, ring)` of the rays that hit
/// something within range, ring-major then by azimuth.
pub fn simulate_lidar(world: &World, cfg: &LidarConfig, seed: u64) -> Result<Tensor> {
    if cfg.rings == 0 {
        return Err(Error::Invalid("LiDAR needs at least one ring".into()));
    }
    let normal = Normal::new(0.0, cfg.reflectivity_jitter).map_err(|e| Error::Invalid(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6c69_6461_72);
    let o = [0.0, 0.0, cfg.height];
    let mut rows = Vec::new();
    for ring in 0..cfg.rings {
        let el = cfg.ring_elevation(ring);
        for k in 0..cfg.points_per_ring {
            let az = std::f64::consts::TAU * k as f64 / cfg.points_per_ring as f64;
            let d = [el.cos() * az.cos(), el.cos() * az.sin(), el.sin()];
            let Some(hit) = trace(world, o, d) else { continue };
            if hit.t < cfg.range.0 || hit.t > cfg.range.1 {
                continue;
            }
            let refl = (PALETTE[hit.class as usize].reflectivity + normal.sample(&mut rng)).clamp(0.0, 1.0);
            rows.extend_from_slice(&[hit.point[0], hit.point[1], hit.point[2], refl, ring as f64]);
        }
    }
    let p = rows.len() / 5;
    Tensor::new([p, 5], rows)
}
