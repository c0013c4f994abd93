//! Procedural driving scenes: a semantic ground layout with box obstacles,
//! ray-cast camera images with pixel-exact labels, a ring LiDAR, image
//! noise, and an on-disk dataset format.

mod dataset;
mod render;

pub use dataset::{read_dataset, write_dataset, Dataset, Split, MANIFEST, DATASET_VERSION};
pub use render::{render_cameras, simulate_lidar, LidarConfig};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::blocks::ModelConfig;
use crate::error::{Error, Result};
use crate::geometry::{BevSpec, CameraRig};
use crate::par::{map_indexed, Exec};
use crate::tensor::Tensor;

pub const CLASS_NAMES: [&str; 4] = ["drivable", "walkway", "divider", "obstacle"];
pub const DRIVABLE: u8 = 0;
pub const WALKWAY: u8 = 1;
pub const DIVIDER: u8 = 2;
pub const OBSTACLE: u8 = 3;
/// Label of ground outside every class, and of sky.
pub const BACKGROUND: u8 = 4;

/// Render color and LiDAR reflectivity of a surface class.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Style {
    pub color: [f64; 3],
    pub reflectivity: f64,
}

/// Indexed by class, background last.
pub const PALETTE: [Style; 5] = [
    Style { color: [0.32, 0.32, 0.36], reflectivity: 0.1 },
    Style { color: [0.78, 0.62, 0.46], reflectivity: 0.5 },
    Style { color: [0.96, 0.94, 0.82], reflectivity: 0.9 },
    Style { color: [0.16, 0.28, 0.78], reflectivity: 0.7 },
    Style { color: [0.28, 0.52, 0.24], reflectivity: 0.3 },
];
pub const SKY: [f64; 3] = [0.62, 0.78, 0.96];

/// Half side of the square world raster, meters.
pub const WORLD_HALF_EXTENT: f64 = 16.0;
/// World raster cells per side.
pub const WORLD_CELLS: usize = 128;

/// Axis-aligned box standing on the ground.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Box3 {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Box3 {
    /// Entry distance of the ray `o + t d`, if it hits at `t > 0`.
    pub fn intersect(&self, o: [f64; 3], d: [f64; 3]) -> Option<f64> {
        let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
        for a in 0..3 {
            if d[a].abs() < 1e-300 {
                if o[a] < self.min[a] || o[a] > self.max[a] {
                    return None;
                }
                continue;
            }
            let (mut lo, mut hi) = ((self.min[a] - o[a]) / d[a], (self.max[a] - o[a]) / d[a]);
            if lo > hi {
                std::mem::swap(&mut lo, &mut hi);
            }
            t0 = t0.max(lo);
            t1 = t1.min(hi);
        }
        (t0 <= t1 && t0 > 0.0).then_some(t0)
    }

    pub fn contains_xy(&self, x: f64, y: f64) -> bool {
        x >= self.min[0] && x <= self.max[0] && y >= self.min[1] && y <= self.max[1]
    }
}

/// Ground layout raster plus obstacle boxes.
#[derive(Clone, Debug, PartialEq)]
pub struct World {
    /// Class per cell of the `WORLD_CELLS`² raster, rows from +x to -x and
    /// columns from +y to -y like the BEV grids.
    raster: Vec<u8>,
    pub boxes: Vec<Box3>,
}

fn world_grid() -> BevSpec {
    let e = WORLD_HALF_EXTENT;
    BevSpec { x_range: (-e, e), y_range: (-e, e), latent: (WORLD_CELLS, WORLD_CELLS), output: (WORLD_CELLS, WORLD_CELLS), ..BevSpec::default() }
}

impl World {
    pub fn raster(&self) -> &[u8] {
        &self.raster
    }

    /// Ground class at `(x, y)`; background outside the raster.
    pub fn class_at(&self, x: f64, y: f64) -> u8 {
        let g = world_grid();
        match g.cell_of(x, y, g.latent) {
            Some((r, c)) => self.raster[r * WORLD_CELLS + c],
            None => BACKGROUND,
        }
    }

    /// Class indices sampled at the centers of `grid` cells of `spec`.
    pub fn rasterize(&self, spec: &BevSpec, grid: (usize, usize)) -> Vec<u8> {
        let mut out = Vec::with_capacity(grid.0 * grid.1);
        for r in 0..grid.0 {
            for c in 0..grid.1 {
                let (x, y) = spec.cell_center(r, c, grid);
                out.push(self.class_at(x, y));
            }
        }
        out
    }
}

/// Signed distance from a road centerline, straight or circular.
#[derive(Clone, Copy, Debug)]
enum Centerline {
    Line { point: [f64; 2], normal: [f64; 2] },
    Arc { center: [f64; 2], radius: f64 },
}

impl Centerline {
    fn distance(&self, p: [f64; 2]) -> f64 {
        match *self {
            Centerline::Line { point, normal } => (p[0] - point[0]) * normal[0] + (p[1] - point[1]) * normal[1],
            Centerline::Arc { center, radius } => (p[0] - center[0]).hypot(p[1] - center[1]) - radius,
        }
    }
}

struct Road {
    line: Centerline,
    half_width: f64,
    divider_half: Option<f64>,
    walkway: f64,
}

impl Road {
    /// Class rank (higher wins) at distance `d` from the centerline.
    fn class(&self, d: f64) -> Option<u8> {
        let a = d.abs();
        match self.divider_half {
            Some(h) if a < h => Some(DIVIDER),
            _ if a < self.half_width => Some(DRIVABLE),
            _ if a < self.half_width + self.walkway => Some(WALKWAY),
            _ => None,
        }
    }
}

fn rank(class: u8) -> u8 {
    match class {
        DIVIDER => 3,
        DRIVABLE => 2,
        WALKWAY => 1,
        _ => 0,
    }
}

fn random_road(rng: &mut ChaCha8Rng, near_ego: bool) -> Road {
    let heading = rng.random_range(0.0..std::f64::consts::PI);
    let normal = [-heading.sin(), heading.cos()];
    let offset = if near_ego { rng.random_range(-2.0..2.0) } else { rng.random_range(-8.0..8.0) };
    let point = [offset * normal[0], offset * normal[1]];
    let line = if rng.random_bool(0.5) {
        Centerline::Line { point, normal }
    } else {
        let radius = rng.random_range(12.0..30.0);
        let side = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        Centerline::Arc { center: [point[0] + side * radius * normal[0], point[1] + side * radius * normal[1]], radius }
    };
    Road {
        line,
        half_width: rng.random_range(2.5..4.0),
        divider_half: rng.random_bool(0.7).then_some(0.2),
        walkway: rng.random_range(1.5..2.5),
    }
}

/// Deterministic world for `seed`: one or two roads (the first passing
/// within 2 m of the ego origin) with walkways and optional center
/// dividers, and up to four boxes inside the BEV extent clear of the ego.
pub fn generate_world(seed: u64) -> World {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_roads = rng.random_range(1..=2);
    let roads: Vec<Road> = (0..n_roads).map(|i| random_road(&mut rng, i == 0)).collect();
    let g = world_grid();
    let mut raster = vec![BACKGROUND; WORLD_CELLS * WORLD_CELLS];
    for r in 0..WORLD_CELLS {
        for c in 0..WORLD_CELLS {
            let (x, y) = g.cell_center(r, c, g.latent);
            let best = roads.iter().filter_map(|rd| rd.class(rd.line.distance([x, y]))).max_by_key(|&k| rank(k));
            raster[r * WORLD_CELLS + c] = best.unwrap_or(BACKGROUND);
        }
    }
    let n_boxes = rng.random_range(0..=4);
    let snap = |v: f64| (v * 4.0).round() / 4.0;
    let mut boxes = Vec::new();
    while boxes.len() < n_boxes {
        let (sx, sy) = (snap(rng.random_range(1.0..4.0)), snap(rng.random_range(1.0..2.5)));
        let (sx, sy) = if rng.random_bool(0.5) { (sx, sy) } else { (sy, sx) };
        let x0 = snap(rng.random_range(-7.5..7.5 - sx));
        let y0 = snap(rng.random_range(-7.5..7.5 - sy));
        let b = Box3 { min: [x0, y0, 0.0], max: [x0 + sx, y0 + sy, snap(rng.random_range(1.0..2.0))] };
        // keep the sensors outside every box
        if b.min[0] < 2.5 && b.max[0] > -2.5 && b.min[1] < 2.5 && b.max[1] > -2.5 {
            continue;
        }
        boxes.push(b);
    }
    for b in &boxes {
        for r in 0..WORLD_CELLS {
            for c in 0..WORLD_CELLS {
                let (x, y) = g.cell_center(r, c, g.latent);
                if b.contains_xy(x, y) {
                    raster[r * WORLD_CELLS + c] = OBSTACLE;
                }
            }
        }
    }
    World { raster, boxes }
}

/// Zero-mean Gaussian image noise.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoiseConfig {
    pub sigma: f64,
    pub seed: u64,
}

/// Adds seeded `N(0, sigma²)` noise per element and clamps to `[0, 1]`.
pub fn add_gaussian_noise(images: &Tensor, cfg: &NoiseConfig) -> Result<Tensor> {
    if !(cfg.sigma >= 0.0) || !cfg.sigma.is_finite() {
        return Err(Error::Invalid(format!("noise sigma must be finite and >= 0, got {}", cfg.sigma)));
    }
    if cfg.sigma == 0.0 {
        return Ok(images.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let normal = Normal::new(0.0, cfg.sigma).map_err(|e| Error::Invalid(e.to_string()))?;
    let data = images.data().iter().map(|&v| (v + normal.sample(&mut rng)).clamp(0.0, 1.0)).collect();
    Tensor::new(images.shape().to_vec(), data)
}

/// Everything needed to turn a seed into a sample.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneConfig {
    pub rig: CameraRig,
    pub bev: BevSpec,
    pub lidar: LidarConfig,
    /// Probability of replacing a perspective-view label with a random one.
    pub label_flip: f64,
    /// Noise baked into the stored images.
    pub noise_sigma: f64,
}

impl SceneConfig {
    pub fn from_model(cfg: &ModelConfig) -> Result<Self> {
        Ok(SceneConfig { rig: cfg.rig()?, bev: cfg.bev.clone(), lidar: LidarConfig::default(), label_flip: 0.0, noise_sigma: 0.0 })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSample {
    pub seed: u64,
    /// `[N, 3, H, W]` in `[0, 1]`, multiples of 1/255.
    pub images: Tensor,
    /// `[P, 5]` rows `(x, y, z, reflectivity, ring)`, all exactly representable in `f32`.
    pub lidar: Tensor,
    /// Class index per BEV output cell (`BACKGROUND` for none).
    pub bev_labels: Vec<u8>,
    pub bev_shape: (usize, usize),
    /// Class index per camera pixel, `[N, H, W]` order.
    pub pv_labels: Vec<u8>,
    pub rig: CameraRig,
}

/// One binary plane per class for indices laid out as `[lead.., plane]`.
fn one_hot(labels: &[u8], lead: usize, plane: usize, classes: usize) -> Tensor {
    Tensor::from_fn([lead, classes, plane], |i| {
        let (n, rest) = (i / (classes * plane), i % (classes * plane));
        let (c, p) = (rest / plane, rest % plane);
        f64::from(u8::from(usize::from(labels[n * plane + p]) == c))
    })
}

impl SceneSample {
    /// `[S, H_bev, W_bev]` binary targets.
    pub fn bev_target(&self, classes: usize) -> Tensor {
        let (h, w) = self.bev_shape;
        one_hot(&self.bev_labels, 1, h * w, classes).reshape([classes, h, w]).expect("sizes agree")
    }

    /// `[N, S, H, W]` binary targets.
    pub fn pv_target(&self, classes: usize) -> Tensor {
        let (n, h, w) = (self.rig.len(), self.rig.image().0, self.rig.image().1);
        one_hot(&self.pv_labels, n, h * w, classes).reshape([n, classes, h, w]).expect("sizes agree")
    }
}

/// Rounds to the stored 8-bit levels.
fn quantize_images(t: &Tensor) -> Tensor {
    t.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() / 255.0)
}

pub fn generate_scene(seed: u64, cfg: &SceneConfig) -> Result<SceneSample> {
    if !(0.0..=1.0).contains(&cfg.label_flip) {
        return Err(Error::Invalid(format!("label flip probability {} outside [0, 1]", cfg.label_flip)));
    }
    let world = generate_world(seed);
    let (images, mut pv_labels) = render_cameras(&world, &cfg.rig);
    let images = add_gaussian_noise(&images, &NoiseConfig { sigma: cfg.noise_sigma, seed: seed ^ 0x6e6f_6973_65 })?;
    if cfg.label_flip > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x666c_6970);
        for l in &mut pv_labels {
            if rng.random_bool(cfg.label_flip) {
                *l = rng.random_range(0..=BACKGROUND);
            }
        }
    }
    let cloud = simulate_lidar(&world, &cfg.lidar, seed)?.map(|v| v as f32 as f64);
    Ok(SceneSample {
        seed,
        images: quantize_images(&images),
        lidar: cloud,
        bev_labels: world.rasterize(&cfg.bev, cfg.bev.output),
        bev_shape: cfg.bev.output,
        pv_labels,
        rig: cfg.rig.clone(),
    })
}

/// Scenes for consecutive seeds, generated in parallel.
pub fn generate_scenes(first_seed: u64, count: usize, cfg: &SceneConfig, exec: Exec) -> Result<Vec<SceneSample>> {
    map_indexed(exec, count, |i| generate_scene(first_seed + i as u64, cfg)).into_iter().collect()
}
