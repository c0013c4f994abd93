//! Camera model, BEV grid, frustum lifting and LiDAR rasterization.
//!
//! Frames: the ego frame is x forward, y left, z up. Camera frames are
//! optical (x right, y down, z along the viewing axis). BEV grids put row 0
//! at the far-forward edge and column 0 at the far-left edge, so an image of
//! the grid reads like a map with the vehicle heading up.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

pub type Mat3 = [[f64; 3]; 3];
pub type Mat4 = [[f64; 4]; 4];

pub fn identity4() -> Mat4 {
    let mut m = [[0.0; 4]; 4];
    for (i, row) in m.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    m
}

pub fn transform_point(m: &Mat4, p: [f64; 3]) -> [f64; 3] {
    let mut out = [0.0; 3];
    for (i, o) in out.iter_mut().enumerate() {
        *o = m[i][0] * p[0] + m[i][1] * p[1] + m[i][2] * p[2] + m[i][3];
    }
    out
}

/// Inverse of a rigid transform `[R t; 0 1]`.
pub fn invert_rigid(m: &Mat4) -> Mat4 {
    let mut inv = identity4();
    for i in 0..3 {
        for j in 0..3 {
            inv[i][j] = m[j][i];
        }
    }
    for i in 0..3 {
        inv[i][3] = -(0..3).map(|j| m[j][i] * m[j][3]).sum::<f64>();
    }
    inv
}

fn det3(m: &Mat3) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

/// Pinhole cameras with their poses in the ego frame.
#[derive(Clone, Debug, PartialEq)]
pub struct CameraRig {
    intrinsics: Vec<Mat3>,
    extrinsics: Vec<Mat4>,
    image: (usize, usize),
}

impl CameraRig {
    /// `extrinsics` map camera coordinates to ego coordinates; `image` is `(rows, cols)`.
    pub fn new(intrinsics: Vec<Mat3>, extrinsics: Vec<Mat4>, image: (usize, usize)) -> Result<Self> {
        if intrinsics.is_empty() || intrinsics.len() != extrinsics.len() {
            return Err(Error::Invalid(format!(
                "rig needs matching non-empty camera lists, got {} intrinsics and {} extrinsics",
                intrinsics.len(),
                extrinsics.len()
            )));
        }
        for (i, k) in intrinsics.iter().enumerate() {
            if !(k[0][0] > 0.0 && k[1][1] > 0.0) || k[2] != [0.0, 0.0, 1.0] || k[1][0] != 0.0 {
                return Err(Error::Invalid(format!("camera {i}: intrinsics must be upper triangular with positive focal lengths")));
            }
        }
        for (i, e) in extrinsics.iter().enumerate() {
            let r: Mat3 = std::array::from_fn(|a| std::array::from_fn(|b| e[a][b]));
            for a in 0..3 {
                for b in 0..3 {
                    let dot: f64 = (0..3).map(|k| r[k][a] * r[k][b]).sum();
                    let want = if a == b { 1.0 } else { 0.0 };
                    if (dot - want).abs() > 1e-9 {
                        return Err(Error::Invalid(format!("camera {i}: extrinsic rotation is not orthonormal")));
                    }
                }
            }
            if (det3(&r) - 1.0).abs() > 1e-9 || e[3] != [0.0, 0.0, 0.0, 1.0] {
                return Err(Error::Invalid(format!("camera {i}: extrinsic is not a proper rigid transform")));
            }
        }
        if image.0 == 0 || image.1 == 0 {
            return Err(Error::Invalid("image size must be non-zero".into()));
        }
        Ok(CameraRig { intrinsics, extrinsics, image })
    }

    /// `n` cameras spaced evenly in yaw starting forward, each pitched down by
    /// `pitch_deg`, mounted at `height` above the ego origin.
    pub fn ring(n: usize, image: (usize, usize), focal: f64, height: f64, pitch_deg: f64) -> Result<Self> {
        let (h, w) = image;
        let k = [[focal, 0.0, w as f64 / 2.0], [0.0, focal, h as f64 / 2.0], [0.0, 0.0, 1.0]];
        let pitch = pitch_deg.to_radians();
        let extrinsics = (0..n)
            .map(|i| {
                let yaw = i as f64 * std::f64::consts::TAU / n as f64;
                let fwd = [pitch.cos() * yaw.cos(), pitch.cos() * yaw.sin(), -pitch.sin()];
                let right = [yaw.sin(), -yaw.cos(), 0.0];
                let down = [
                    fwd[1] * right[2] - fwd[2] * right[1],
                    fwd[2] * right[0] - fwd[0] * right[2],
                    fwd[0] * right[1] - fwd[1] * right[0],
                ];
                let mut m = identity4();
                for a in 0..3 {
                    m[a][0] = right[a];
                    m[a][1] = down[a];
                    m[a][2] = fwd[a];
                }
                m[2][3] = height;
                m
            })
            .collect();
        CameraRig::new(vec![k; n], extrinsics, image)
    }

    pub fn len(&self) -> usize {
        self.intrinsics.len()
    }

    pub fn is_empty(&self) -> bool {
        self.intrinsics.is_empty()
    }

    pub fn intrinsics(&self) -> &[Mat3] {
        &self.intrinsics
    }

    pub fn extrinsics(&self) -> &[Mat4] {
        &self.extrinsics
    }

    pub fn image(&self) -> (usize, usize) {
        self.image
    }

    /// Ego-frame point at optical depth `depth` along the ray through image pixel `(u, v)`.
    pub fn unproject(&self, cam: usize, u: f64, v: f64, depth: f64) -> [f64; 3] {
        let k = &self.intrinsics[cam];
        let y = (v - k[1][2]) / k[1][1];
        let x = (u - k[0][2] - k[0][1] * y) / k[0][0];
        transform_point(&self.extrinsics[cam], [x * depth, y * depth, depth])
    }

    /// Image coordinates `(u, v)` and optical depth of an ego-frame point.
    pub fn project(&self, cam: usize, p: [f64; 3]) -> (f64, f64, f64) {
        let c = transform_point(&invert_rigid(&self.extrinsics[cam]), p);
        let k = &self.intrinsics[cam];
        let (x, y) = (c[0] / c[2], c[1] / c[2]);
        (k[0][0] * x + k[0][1] * y + k[0][2], k[1][1] * y + k[1][2], c[2])
    }

    /// Ray origin and unit direction in the ego frame for image pixel `(u, v)`.
    pub fn ray(&self, cam: usize, u: f64, v: f64) -> ([f64; 3], [f64; 3]) {
        let e = &self.extrinsics[cam];
        let o = [e[0][3], e[1][3], e[2][3]];
        let p = self.unproject(cam, u, v, 1.0);
        let d = [p[0] - o[0], p[1] - o[1], p[2] - o[2]];
        let n = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
        (o, [d[0] / n, d[1] / n, d[2] / n])
    }
}

/// Metric BEV extent with a latent (feature) grid and a finer output grid.
#[derive(Clone, Debug, PartialEq)]
pub struct BevSpec {
    pub x_range: (f64, f64),
    pub y_range: (f64, f64),
    pub z_range: (f64, f64),
    pub latent: (usize, usize),
    pub output: (usize, usize),
}

impl Default for BevSpec {
    fn default() -> Self {
        BevSpec { x_range: (-8.0, 8.0), y_range: (-8.0, 8.0), z_range: (-2.0, 4.0), latent: (32, 32), output: (64, 64) }
    }
}

impl BevSpec {
    pub fn validate(&self) -> Result<()> {
        let ok_range = |r: (f64, f64)| r.0.is_finite() && r.1.is_finite() && r.1 > r.0;
        if !ok_range(self.x_range) || !ok_range(self.y_range) || !ok_range(self.z_range) {
            return Err(Error::Invalid("BEV ranges must be finite and increasing".into()));
        }
        let (lh, lw) = self.latent;
        let (oh, ow) = self.output;
        if lh == 0 || lw == 0 || oh % lh != 0 || ow % lw != 0 || oh / lh != ow / lw {
            return Err(Error::Invalid(format!(
                "output grid {oh}x{ow} must be the same integer multiple of latent grid {lh}x{lw}"
            )));
        }
        Ok(())
    }

    /// Integer factor from latent to output resolution.
    pub fn upsample_factor(&self) -> usize {
        self.output.0 / self.latent.0
    }

    /// `(meters per row, meters per column)` for a grid of the given size.
    pub fn cell_size(&self, grid: (usize, usize)) -> (f64, f64) {
        ((self.x_range.1 - self.x_range.0) / grid.0 as f64, (self.y_range.1 - self.y_range.0) / grid.1 as f64)
    }

    /// Grid cell containing ego-frame `(x, y)`, or `None` outside the extent.
    pub fn cell_of(&self, x: f64, y: f64, grid: (usize, usize)) -> Option<(usize, usize)> {
        let (cx, cy) = self.cell_size(grid);
        let r = ((self.x_range.1 - x) / cx).floor();
        let c = ((self.y_range.1 - y) / cy).floor();
        if r >= 0.0 && c >= 0.0 && (r as usize) < grid.0 && (c as usize) < grid.1 {
            Some((r as usize, c as usize))
        } else {
            None
        }
    }

    /// Ego-frame `(x, y)` of the center of cell `(row, col)`.
    pub fn cell_center(&self, row: usize, col: usize, grid: (usize, usize)) -> (f64, f64) {
        let (cx, cy) = self.cell_size(grid);
        (self.x_range.1 - (row as f64 + 0.5) * cx, self.y_range.1 - (col as f64 + 0.5) * cy)
    }

    pub fn z_contains(&self, z: f64) -> bool {
        z >= self.z_range.0 && z < self.z_range.1
    }
}

/// Ego-frame points for every (camera, depth bin, feature pixel), laid out
/// as `((cam * D + d) * H + i) * W + j`.
#[derive(Clone, Debug)]
pub struct Frustum {
    points: Vec<[f64; 3]>,
    depths: Vec<f64>,
    n_cam: usize,
    pv_shape: (usize, usize),
    stride: (f64, f64),
}

/// `D` bin centers evenly spaced on `[near, far]` in metric depth.
pub fn depth_bins(d: usize, near: f64, far: f64) -> Vec<f64> {
    if d == 1 {
        return vec![near];
    }
    (0..d).map(|i| near + (far - near) * i as f64 / (d - 1) as f64).collect()
}

impl Frustum {
    /// Feature pixel `(i, j)` is centered on image pixel coordinates
    /// `((j + 0.5) * stride_w, (i + 0.5) * stride_h)`.
    pub fn build(rig: &CameraRig, pv_shape: (usize, usize), depths: &[f64]) -> Result<Self> {
        let (h, w) = pv_shape;
        if h == 0 || w == 0 || depths.is_empty() {
            return Err(Error::Invalid("frustum needs a non-empty feature grid and depth bins".into()));
        }
        if depths.windows(2).any(|p| p[1] <= p[0]) || depths[0] <= 0.0 {
            return Err(Error::Invalid("depth bin centers must be positive and strictly increasing".into()));
        }
        for (c, k) in rig.intrinsics().iter().enumerate() {
            if det3(k).abs() < 1e-12 {
                return Err(Error::Invalid(format!("camera {c}: singular intrinsics")));
            }
        }
        let (ih, iw) = rig.image();
        let stride = (ih as f64 / h as f64, iw as f64 / w as f64);
        let mut points = Vec::with_capacity(rig.len() * depths.len() * h * w);
        for cam in 0..rig.len() {
            for &z in depths {
                for i in 0..h {
                    for j in 0..w {
                        let (u, v) = ((j as f64 + 0.5) * stride.1, (i as f64 + 0.5) * stride.0);
                        points.push(rig.unproject(cam, u, v, z));
                    }
                }
            }
        }
        Ok(Frustum { points, depths: depths.to_vec(), n_cam: rig.len(), pv_shape, stride })
    }

    pub fn points(&self) -> &[[f64; 3]] {
        &self.points
    }

    pub fn depths(&self) -> &[f64] {
        &self.depths
    }

    pub fn n_cam(&self) -> usize {
        self.n_cam
    }

    pub fn pv_shape(&self) -> (usize, usize) {
        self.pv_shape
    }

    /// Image pixel coordinates `(u, v)` of feature pixel `(i, j)`.
    pub fn pixel(&self, i: usize, j: usize) -> (f64, f64) {
        ((j as f64 + 0.5) * self.stride.1, (i as f64 + 0.5) * self.stride.0)
    }
}

/// In-bounds frustum points and the latent BEV cell each one lands in.
#[derive(Clone, Debug, PartialEq)]
pub struct SplatIndex {
    points: Arc<[usize]>,
    cells: Arc<[usize]>,
    n_points: usize,
    n_cells: usize,
}

impl SplatIndex {
    pub fn new(frustum: &Frustum, spec: &BevSpec) -> Self {
        let mut points = Vec::new();
        let mut cells = Vec::new();
        for (p, q) in frustum.points().iter().enumerate() {
            if !spec.z_contains(q[2]) {
                continue;
            }
            if let Some((r, c)) = spec.cell_of(q[0], q[1], spec.latent) {
                points.push(p);
                cells.push(r * spec.latent.1 + c);
            }
        }
        SplatIndex {
            points: points.into(),
            cells: cells.into(),
            n_points: frustum.points().len(),
            n_cells: spec.latent.0 * spec.latent.1,
        }
    }

    /// Ids of in-bounds frustum points, ascending.
    pub fn points(&self) -> &Arc<[usize]> {
        &self.points
    }

    /// Latent cell for each entry of [`Self::points`].
    pub fn cells(&self) -> &Arc<[usize]> {
        &self.cells
    }

    /// Validity of every frustum point.
    pub fn valid_mask(&self) -> Vec<bool> {
        let mut m = vec![false; self.n_points];
        for &p in self.points.iter() {
            m[p] = true;
        }
        m
    }

    pub fn n_cells(&self) -> usize {
        self.n_cells
    }

    /// True when both indices are the same allocation, not merely equal.
    pub fn shares_storage(&self, other: &SplatIndex) -> bool {
        Arc::ptr_eq(&self.points, &other.points) && Arc::ptr_eq(&self.cells, &other.cells)
    }
}

/// Lift features into depth bins by the softmax depth distribution and
/// sum-pool them into latent BEV cells. Returns `[C, H_lat, W_lat]`.
pub fn lift_splat(
    tape: &mut Tape,
    pv_feat: Var,
    depth_logits: Var,
    frustum: &Frustum,
    index: &SplatIndex,
    spec: &BevSpec,
) -> Result<Var> {
    let (h, w) = frustum.pv_shape();
    let d = frustum.depths().len();
    let c = match *tape.shape(pv_feat) {
        [n, c, fh, fw] if n == frustum.n_cam() && fh == h && fw == w => c,
        ref s => {
            return Err(Error::shape(
                "lift_splat",
                format!("features {s:?} do not match a frustum of {} cameras at {h}x{w}", frustum.n_cam()),
            ))
        }
    };
    if tape.shape(depth_logits) != [frustum.n_cam(), d, h, w] {
        return Err(Error::shape(
            "lift_splat",
            format!("depth logits {:?}, frustum expects {:?}", tape.shape(depth_logits), [frustum.n_cam(), d, h, w]),
        ));
    }
    if index.n_cells() != spec.latent.0 * spec.latent.1 {
        return Err(Error::shape("lift_splat", "splat index was built for a different BEV grid"));
    }
    let weights = tape.softmax(depth_logits, 1)?;
    let rows = tape.depth_outer(pv_feat, weights, index.points().clone())?;
    let pooled = tape.scatter_add(rows, index.cells().clone(), index.n_cells())?;
    let t = tape.permute(pooled, &[1, 0])?;
    tape.reshape(t, &[c, spec.latent.0, spec.latent.1])
}

/// Pillar rasterization of a `[P, 5]` cloud `(x, y, z, reflectivity, ring)`
/// into `[5, H_lat, W_lat]` channels: point count scaled by the busiest
/// cell, mean z, mean reflectivity, max z and occupancy.
pub fn voxelize_points(cloud: &Tensor, spec: &BevSpec) -> Result<Tensor> {
    let n = match *cloud.shape() {
        [n, 5] => n,
        [0] => 0,
        ref s => return Err(Error::shape("voxelize_points", format!("cloud must be [P, 5], got {s:?}"))),
    };
    let (gh, gw) = spec.latent;
    let cells = gh * gw;
    let mut per_cell: Vec<Vec<(f64, f64)>> = vec![Vec::new(); cells];
    for p in 0..n {
        let r = &cloud.data()[p * 5..p * 5 + 5];
        if !spec.z_contains(r[2]) {
            continue;
        }
        if let Some((i, j)) = spec.cell_of(r[0], r[1], spec.latent) {
            per_cell[i * gw + j].push((r[2], r[3]));
        }
    }
    let max_count = per_cell.iter().map(Vec::len).max().unwrap_or(0);
    let mut out = vec![0.0; 5 * cells];
    for (k, pts) in per_cell.iter_mut().enumerate() {
        if pts.is_empty() {
            continue;
        }
        // sorted so the sums do not depend on input order
        pts.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
        let cnt = pts.len() as f64;
        out[k] = cnt / max_count as f64;
        out[cells + k] = pts.iter().map(|p| p.0).sum::<f64>() / cnt;
        out[2 * cells + k] = pts.iter().map(|p| p.1).sum::<f64>() / cnt;
        out[3 * cells + k] = pts.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max);
        out[4 * cells + k] = 1.0;
    }
    Tensor::new([5, gh, gw], out)
}

/// Pillars are already flat in BEV, so flattening is the identity.
pub fn flatten_voxels(_tape: &mut Tape, voxels: Var) -> Var {
    voxels
}

/// Aligned-corner bilinear resize of `[C, H, W]` or `[B, C, H, W]`.
pub fn grid_resample(tape: &mut Tape, feat: Var, target: (usize, usize)) -> Result<Var> {
    match *tape.shape(feat) {
        [c, h, w] => {
            let x = tape.reshape(feat, &[1, c, h, w])?;
            let y = tape.grid_resample(x, target)?;
            tape.reshape(y, &[c, target.0, target.1])
        }
        _ => tape.grid_resample(feat, target),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::finite_diff_check_params;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn desk() -> (CameraRig, BevSpec, Frustum) {
        let rig = CameraRig::ring(4, (32, 64), 32.0, 1.5, 15.0).unwrap();
        let spec = BevSpec::default();
        let fr = Frustum::build(&rig, (8, 16), &depth_bins(8, 1.0, 8.0)).unwrap();
        (rig, spec, fr)
    }

    #[test]
    fn optical_axis_point() {
        let rig = CameraRig::ring(1, (32, 64), 32.0, 1.5, 0.0).unwrap();
        let p = rig.unproject(0, 32.0, 16.0, 5.0);
        for (a, b) in p.iter().zip([5.0, 0.0, 1.5]) {
            assert!((a - b).abs() < 1e-12, "{p:?}");
        }
    }

    #[test]
    fn rig_rejects_bad_poses() {
        let k = [[10.0, 0.0, 1.0], [0.0, 10.0, 1.0], [0.0, 0.0, 1.0]];
        let mut e = identity4();
        e[0][0] = -1.0; // reflection
        assert!(CameraRig::new(vec![k], vec![e], (4, 4)).is_err());
        let mut k0 = k;
        k0[0][0] = 0.0;
        assert!(CameraRig::new(vec![k0], vec![identity4()], (4, 4)).is_err());
    }

    #[test]
    fn frustum_reprojects_and_scales_with_depth() {
        let (rig, _, fr) = desk();
        let (h, w) = fr.pv_shape();
        let d = fr.depths().len();
        for cam in 0..4 {
            for di in 0..d {
                for i in 0..h {
                    for j in 0..w {
                        let p = fr.points()[((cam * d + di) * h + i) * w + j];
                        let (u, v, z) = rig.project(cam, p);
                        let (u0, v0) = fr.pixel(i, j);
                        assert!((u - u0).abs() < 1e-9 && (v - v0).abs() < 1e-9);
                        assert!((z - fr.depths()[di]).abs() < 1e-9);
                    }
                }
            }
        }
        let inv = invert_rigid(&rig.extrinsics()[1]);
        let a = transform_point(&inv, rig.unproject(1, 3.0, 7.0, 2.0));
        let b = transform_point(&inv, rig.unproject(1, 3.0, 7.0, 4.0));
        for k in 0..3 {
            assert!((2.0 * a[k] - b[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn rigid_round_trip() {
        let (rig, _, _) = desk();
        for e in rig.extrinsics() {
            let p = [1.25, -3.5, 0.75];
            let q = transform_point(&invert_rigid(e), transform_point(e, p));
            assert!(p.iter().zip(q).all(|(a, b)| (a - b).abs() < 1e-9));
        }
    }

    #[test]
    fn bev_cells_tile_the_extent() {
        let spec = BevSpec::default();
        spec.validate().unwrap();
        let (cx, cy) = spec.cell_size(spec.output);
        assert_eq!(cx * 64.0, 16.0);
        assert_eq!(cy * 64.0, 16.0);
        assert_eq!(spec.cell_of(7.9, 7.9, spec.latent), Some((0, 0)));
        assert_eq!(spec.cell_of(-7.9, -7.9, spec.latent), Some((31, 31)));
        assert_eq!(spec.cell_of(8.1, 0.0, spec.latent), None);
        let (x, y) = spec.cell_center(3, 17, spec.output);
        assert_eq!(spec.cell_of(x, y, spec.output), Some((3, 17)));
        let bad = BevSpec { output: (48, 64), ..BevSpec::default() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn point_mass_lands_in_one_cell() {
        let (rig, spec, _) = desk();
        let fr = Frustum::build(&rig, (1, 1), &depth_bins(3, 2.0, 6.0)).unwrap();
        let fr = Frustum { n_cam: 1, points: fr.points[..3].to_vec(), ..fr };
        let index = SplatIndex::new(&fr, &spec);
        let mut t = Tape::new();
        let feat = t.constant(Tensor::new([1, 2, 1, 1], vec![0.7, -1.3]).unwrap());
        let logits = t.constant(Tensor::new([1, 3, 1, 1], vec![-500.0, 500.0, -500.0]).unwrap());
        let bev = lift_splat(&mut t, feat, logits, &fr, &index, &spec).unwrap();
        let p = fr.points()[1];
        let (r, c) = spec.cell_of(p[0], p[1], spec.latent).unwrap();
        let v = t.value(bev).data();
        let k = r * 32 + c;
        assert_eq!((v[k], v[1024 + k]), (0.7, -1.3));
        let nonzero = v.iter().filter(|x| **x != 0.0).count();
        assert_eq!(nonzero, 2);
    }

    #[test]
    fn lift_splat_conserves_in_bounds_mass() {
        let (_, spec, fr) = desk();
        let index = SplatIndex::new(&fr, &spec);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let feat = Tensor::from_fn([4, 3, 8, 16], |_| rng.random_range(-1.0..1.0));
        let logits = Tensor::from_fn([4, 8, 8, 16], |_| rng.random_range(-2.0..2.0));
        let mut t = Tape::new();
        let (f, l) = (t.constant(feat.clone()), t.constant(logits.clone()));
        let bev = lift_splat(&mut t, f, l, &fr, &index, &spec).unwrap();
        let sm = t.softmax(l, 1).unwrap();
        let sm = t.value(sm).data();
        let mut expect = 0.0;
        for &p in index.points().iter() {
            let (cam, pix) = (p / (8 * 128), p % 128);
            let fsum: f64 = (0..3).map(|ch| feat.data()[(cam * 3 + ch) * 128 + pix]).sum();
            expect += sm[p] * fsum;
        }
        let got = t.value(bev).sum();
        assert!(((got - expect) / expect.abs()).abs() < 1e-9);
        assert!(!index.points().is_empty() && index.points().len() < fr.points().len());
        assert!(index.cells().iter().all(|&c| c < 1024));
    }

    #[test]
    fn lift_splat_gradients() {
        let (rig, spec, _) = desk();
        let fr = Frustum::build(&rig, (2, 4), &depth_bins(3, 1.0, 5.0)).unwrap();
        let index = SplatIndex::new(&fr, &spec);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let feat = Tensor::from_fn([4, 2, 2, 4], |_| rng.random_range(-1.0..1.0));
        let logits = Tensor::from_fn([4, 3, 2, 4], |_| rng.random_range(-1.0..1.0));
        let probe = Tensor::from_fn([2, 32, 32], |_| rng.random_range(-1.0..1.0));
        let err = finite_diff_check_params(
            &|t: &mut Tape, v: &[Var]| {
                let b = lift_splat(t, v[0], v[1], &fr, &index, &spec)?;
                let p = t.constant(probe.clone());
                let q = t.mul(b, p)?;
                let q = t.mul(q, b)?;
                Ok(t.sum(q))
            },
            &[feat, logits],
            1e-5,
            None,
        )
        .unwrap();
        assert!(err <= 1e-7, "{err}");
    }

    #[test]
    fn lift_splat_rejects_mismatched_frustum() {
        let (_, spec, fr) = desk();
        let index = SplatIndex::new(&fr, &spec);
        let mut t = Tape::new();
        let f = t.constant(Tensor::zeros([4, 3, 8, 8]));
        let l = t.constant(Tensor::zeros([4, 8, 8, 8]));
        assert!(lift_splat(&mut t, f, l, &fr, &index, &spec).is_err());
    }

    fn reference_voxels(cloud: &[[f64; 5]], spec: &BevSpec) -> Vec<f64> {
        let mut out = vec![0.0; 5 * 1024];
        let mut max_count = 0usize;
        let mut counts = vec![0usize; 1024];
        for p in cloud {
            if p[2] >= spec.z_range.0 && p[2] < spec.z_range.1 {
                if let Some((r, c)) = spec.cell_of(p[0], p[1], spec.latent) {
                    counts[r * 32 + c] += 1;
                }
            }
        }
        for &c in &counts {
            max_count = max_count.max(c);
        }
        for k in 0..1024 {
            let (r, c) = (k / 32, k % 32);
            let mut zs: Vec<(f64, f64)> = cloud
                .iter()
                .filter(|p| p[2] >= spec.z_range.0 && p[2] < spec.z_range.1)
                .filter(|p| spec.cell_of(p[0], p[1], spec.latent) == Some((r, c)))
                .map(|p| (p[2], p[3]))
                .collect();
            if zs.is_empty() {
                continue;
            }
            zs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
            let n = zs.len() as f64;
            out[k] = n / max_count as f64;
            out[1024 + k] = zs.iter().map(|z| z.0).sum::<f64>() / n;
            out[2048 + k] = zs.iter().map(|z| z.1).sum::<f64>() / n;
            out[3072 + k] = zs.iter().map(|z| z.0).fold(f64::MIN, f64::max);
            out[4096 + k] = 1.0;
        }
        out
    }

    #[test]
    fn voxelization_cases() {
        let spec = BevSpec::default();
        let empty = voxelize_points(&Tensor::zeros([0, 5]), &spec).unwrap();
        assert!(empty.data().iter().all(|v| *v == 0.0));
        let (x, y) = spec.cell_center(5, 9, spec.latent);
        let one = voxelize_points(&Tensor::new([1, 5], vec![x, y, 0.3, 0.5, 2.0]).unwrap(), &spec).unwrap();
        let occ = &one.data()[4 * 1024..];
        assert_eq!(occ[5 * 32 + 9], 1.0);
        assert_eq!(occ.iter().sum::<f64>(), 1.0);

        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let cloud: Vec<[f64; 5]> = (0..100)
            .map(|_| {
                [
                    rng.random_range(-9.0..9.0),
                    rng.random_range(-3.0..3.0),
                    rng.random_range(-2.5..4.5),
                    rng.random_range(0.0..1.0),
                    rng.random_range(0..8) as f64,
                ]
            })
            .collect();
        let t = Tensor::new([100, 5], cloud.iter().flatten().copied().collect()).unwrap();
        let got = voxelize_points(&t, &spec).unwrap();
        let want = reference_voxels(&cloud, &spec);
        let diff = got.data().iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(diff <= 1e-12, "{diff}");
    }

    #[test]
    fn flatten_and_resample_wrappers() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::from_fn([2, 3, 3], |i| i as f64));
        assert_eq!(flatten_voxels(&mut t, x), x);
        let y = grid_resample(&mut t, x, (5, 2)).unwrap();
        assert_eq!(t.shape(y), &[2, 5, 2]);
        let same = grid_resample(&mut t, x, (3, 3)).unwrap();
        assert!(t.value(same).max_abs_diff(t.value(x)) < 1e-12);
    }
}
