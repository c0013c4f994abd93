//! On-disk layout: `manifest.txt` at the root and one directory per scene
//! holding `cam_<i>.ppm`, `pv_label_<i>.pgm`, `lidar.bin` (little-endian
//! `f32` records of 5), `bev_gt.pgm` (class indices) and `rig.txt`. The
//! manifest records shapes, the split of each scene and a SHA-256 of every
//! file.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use super::SceneSample;
use crate::error::{Error, Result};
use crate::geometry::{CameraRig, Mat3, Mat4};
use crate::netpbm::Image8;
use crate::tensor::Tensor;

pub const MANIFEST: &str = "manifest.txt";
pub const DATASET_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub scenes: Vec<SceneSample>,
    pub splits: Vec<Split>,
    /// Noise baked into the stored images.
    pub noise_sigma: f64,
}

impl Dataset {
    /// The last `val` scenes form the validation split.
    pub fn new(scenes: Vec<SceneSample>, val: usize, noise_sigma: f64) -> Result<Self> {
        if val > scenes.len() {
            return Err(Error::Invalid(format!("{val} validation scenes out of {}", scenes.len())));
        }
        let n = scenes.len();
        let splits = (0..n).map(|i| if i + val >= n { Split::Val } else { Split::Train }).collect();
        Ok(Dataset { scenes, splits, noise_sigma })
    }

    pub fn split(&self, which: Split) -> Vec<&SceneSample> {
        self.scenes.iter().zip(&self.splits).filter(|(_, s)| **s == which).map(|(x, _)| x).collect()
    }
}

fn scene_dir(i: usize) -> String {
    format!("scene_{i:04}")
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().fold(String::with_capacity(64), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

fn to_u8(v: f64, path: &Path) -> Result<u8> {
    let q = v * 255.0;
    if q.round() != q || !(0.0..=255.0).contains(&q) {
        return Err(Error::format(path, format!("image value {v} is not an 8-bit level")));
    }
    Ok(q as u8)
}

fn encode_rig(rig: &CameraRig) -> String {
    let (h, w) = rig.image();
    let mut s = format!("image {h} {w}\ncameras {}\n", rig.len());
    for (k, e) in rig.intrinsics().iter().zip(rig.extrinsics()) {
        for row in k {
            let _ = writeln!(s, "K {:?} {:?} {:?}", row[0], row[1], row[2]);
        }
        for row in e {
            let _ = writeln!(s, "T {:?} {:?} {:?} {:?}", row[0], row[1], row[2], row[3]);
        }
    }
    s
}

fn decode_rig(text: &str, path: &Path) -> Result<CameraRig> {
    let bad = |msg: String| Error::format(path, msg);
    let mut lines = text.lines();
    let mut header = |key: &str| -> Result<Vec<usize>> {
        let line = lines.next().ok_or_else(|| bad(format!("missing `{key}` line")))?;
        let mut it = line.split_whitespace();
        if it.next() != Some(key) {
            return Err(bad(format!("expected `{key}`, found `{line}`")));
        }
        it.map(|t| t.parse().map_err(|_| bad(format!("bad number `{t}`")))).collect()
    };
    let image = header("image")?;
    let n = header("cameras")?;
    let (&[h, w], &[n]) = (image.as_slice(), n.as_slice()) else {
        return Err(bad("malformed header".into()));
    };
    let mut rows = |key: &str, count: usize, width: usize| -> Result<Vec<Vec<f64>>> {
        (0..count)
            .map(|_| {
                let line = lines.next().ok_or_else(|| bad("truncated matrix".into()))?;
                let mut it = line.split_whitespace();
                if it.next() != Some(key) {
                    return Err(bad(format!("expected a `{key}` row, found `{line}`")));
                }
                let v: Vec<f64> = it.map(|t| t.parse().map_err(|_| bad(format!("bad number `{t}`")))).collect::<Result<_>>()?;
                if v.len() != width {
                    return Err(bad(format!("`{key}` row needs {width} values")));
                }
                Ok(v)
            })
            .collect()
    };
    let (mut ks, mut ts) = (Vec::new(), Vec::new());
    for _ in 0..n {
        let k = rows("K", 3, 3)?;
        let t = rows("T", 4, 4)?;
        let mut km: Mat3 = [[0.0; 3]; 3];
        let mut tm: Mat4 = [[0.0; 4]; 4];
        for i in 0..3 {
            km[i].copy_from_slice(&k[i]);
        }
        for i in 0..4 {
            tm[i].copy_from_slice(&t[i]);
        }
        ks.push(km);
        ts.push(tm);
    }
    CameraRig::new(ks, ts, (h, w)).map_err(|e| bad(e.to_string()))
}

/// Named file contents of one scene.
fn encode_scene(s: &SceneSample) -> Result<Vec<(String, Vec<u8>)>> {
    let (h, w) = s.rig.image();
    let n = s.rig.len();
    let plane = h * w;
    if s.images.shape() != [n, 3, h, w] {
        return Err(Error::shape("write_dataset", format!("images {:?} for a {n}-camera {h}x{w} rig", s.images.shape())));
    }
    let mut files = Vec::new();
    let d = s.images.data();
    for cam in 0..n {
        let name = format!("cam_{cam}.ppm");
        let mut rgb = Vec::with_capacity(plane * 3);
        for p in 0..plane {
            for ch in 0..3 {
                rgb.push(to_u8(d[(cam * 3 + ch) * plane + p], Path::new(&name))?);
            }
        }
        files.push((name, Image8::new(w, h, 3, rgb)?.encode()));
        let labels = s.pv_labels[cam * plane..(cam + 1) * plane].to_vec();
        files.push((format!("pv_label_{cam}.pgm"), Image8::new(w, h, 1, labels)?.encode()));
    }
    let mut lidar = Vec::with_capacity(s.lidar.numel() * 4);
    for &v in s.lidar.data() {
        let f = v as f32;
        if f64::from(f) != v {
            return Err(Error::Invalid(format!("LiDAR value {v} is not representable in 32 bits")));
        }
        lidar.extend_from_slice(&f.to_le_bytes());
    }
    files.push(("lidar.bin".into(), lidar));
    let (bh, bw) = s.bev_shape;
    files.push(("bev_gt.pgm".into(), Image8::new(bw, bh, 1, s.bev_labels.clone())?.encode()));
    files.push(("rig.txt".into(), encode_rig(&s.rig).into_bytes()));
    Ok(files)
}

/// Writes `data` under `dir`, creating it if needed.
pub fn write_dataset(data: &Dataset, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let first = data.scenes.first();
    let mut manifest = format!("xalign-dataset {DATASET_VERSION}\nscenes {}\n", data.scenes.len());
    let _ = writeln!(manifest, "val {}", data.splits.iter().filter(|s| **s == Split::Val).count());
    let _ = writeln!(manifest, "noise_sigma {:?}", data.noise_sigma);
    if let Some(s) = first {
        let (h, w) = s.rig.image();
        let _ = writeln!(manifest, "images {} 3 {h} {w}", s.rig.len());
        let _ = writeln!(manifest, "bev {} {}", s.bev_shape.0, s.bev_shape.1);
    }
    let _ = writeln!(manifest, "lidar_fields 5");
    for (i, (s, split)) in data.scenes.iter().zip(&data.splits).enumerate() {
        let sub = scene_dir(i);
        let path = dir.join(&sub);
        std::fs::create_dir_all(&path).map_err(|e| Error::io(&path, e))?;
        let _ = writeln!(manifest, "scene {sub} {} {}", s.seed, split.name());
        for (name, bytes) in encode_scene(s)? {
            let file = path.join(&name);
            std::fs::write(&file, &bytes).map_err(|e| Error::io(&file, e))?;
            let _ = writeln!(manifest, "file {sub}/{name} {}", hex(&Sha256::digest(&bytes)));
        }
    }
    let m = dir.join(MANIFEST);
    std::fs::write(&m, manifest).map_err(|e| Error::io(&m, e))
}

struct SceneEntry {
    dir: String,
    seed: u64,
    split: Split,
    files: Vec<(String, String)>,
}

/// Reads and verifies a dataset; any missing, corrupt or unlisted-checksum
/// file is reported by path.
pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let mpath = dir.join(MANIFEST);
    let text = std::fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let bad = |msg: String| Error::format(&mpath, msg);
    let mut lines = text.lines();
    match lines.next().map(str::split_whitespace).map(Iterator::collect::<Vec<_>>).as_deref() {
        Some(["xalign-dataset", v]) if *v == DATASET_VERSION.to_string() => {}
        other => return Err(bad(format!("unsupported header {other:?}"))),
    }
    let mut count = None;
    let mut sigma = 0.0;
    let mut entries: Vec<SceneEntry> = Vec::new();
    for line in lines {
        let f: Vec<&str> = line.split_whitespace().collect();
        match f.as_slice() {
            [] => {}
            ["scenes", n] => count = Some(n.parse::<usize>().map_err(|_| bad(format!("bad scene count `{n}`")))?),
            ["noise_sigma", s] => sigma = s.parse().map_err(|_| bad(format!("bad noise sigma `{s}`")))?,
            ["val", _] | ["images", ..] | ["bev", ..] | ["lidar_fields", _] => {}
            ["scene", d, seed, split] => entries.push(SceneEntry {
                dir: d.to_string(),
                seed: seed.parse().map_err(|_| bad(format!("bad seed `{seed}`")))?,
                split: match *split {
                    "train" => Split::Train,
                    "val" => Split::Val,
                    s => return Err(bad(format!("unknown split `{s}`"))),
                },
                files: Vec::new(),
            }),
            ["file", name, digest] => {
                let e = entries.last_mut().ok_or_else(|| bad("file listed before any scene".into()))?;
                e.files.push((name.to_string(), digest.to_string()));
            }
            _ => return Err(bad(format!("unrecognized line `{line}`"))),
        }
    }
    let count = count.ok_or_else(|| bad("missing scene count".into()))?;
    if count != entries.len() {
        return Err(bad(format!("manifest declares {count} scenes but lists {}", entries.len())));
    }
    let mut scenes = Vec::with_capacity(count);
    let mut splits = Vec::with_capacity(count);
    for e in &entries {
        let get = |name: &str| -> Result<(Vec<u8>, PathBuf)> {
            let rel = format!("{}/{name}", e.dir);
            let digest = e.files.iter().find(|(n, _)| *n == rel).map(|(_, d)| d.clone());
            let path = dir.join(&rel);
            let digest = digest.ok_or_else(|| Error::format(&path, "no checksum in the manifest"))?;
            let bytes = std::fs::read(&path).map_err(|err| Error::io(&path, err))?;
            if hex(&Sha256::digest(&bytes)) != digest {
                return Err(Error::format(&path, "checksum mismatch"));
            }
            Ok((bytes, path))
        };
        let (rig_bytes, rig_path) = get("rig.txt")?;
        let rig = decode_rig(&String::from_utf8_lossy(&rig_bytes), &rig_path)?;
        let (h, w) = rig.image();
        let n = rig.len();
        let plane = h * w;
        let mut images = vec![0.0; n * 3 * plane];
        let mut pv_labels = Vec::with_capacity(n * plane);
        for cam in 0..n {
            let (bytes, path) = get(&format!("cam_{cam}.ppm"))?;
            let img = Image8::decode(&bytes, &path)?;
            if (img.height, img.width, img.channels) != (h, w, 3) {
                return Err(Error::format(&path, format!("expected a {h}x{w} color image")));
            }
            for p in 0..plane {
                for ch in 0..3 {
                    images[(cam * 3 + ch) * plane + p] = f64::from(img.data[p * 3 + ch]) / 255.0;
                }
            }
            let (bytes, path) = get(&format!("pv_label_{cam}.pgm"))?;
            let lab = Image8::decode(&bytes, &path)?;
            if (lab.height, lab.width, lab.channels) != (h, w, 1) {
                return Err(Error::format(&path, format!("expected a {h}x{w} label image")));
            }
            pv_labels.extend_from_slice(&lab.data);
        }
        let (bytes, path) = get("lidar.bin")?;
        if bytes.len() % 20 != 0 {
            return Err(Error::format(&path, format!("{} bytes is not a whole number of 5-float records", bytes.len())));
        }
        let vals: Vec<f64> = bytes.chunks_exact(4).map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]]))).collect();
        let lidar = Tensor::new([vals.len() / 5, 5], vals)?;
        let (bytes, path) = get("bev_gt.pgm")?;
        let bev = Image8::decode(&bytes, &path)?;
        if bev.channels != 1 {
            return Err(Error::format(&path, "expected a graymap"));
        }
        scenes.push(SceneSample {
            seed: e.seed,
            images: Tensor::new([n, 3, h, w], images)?,
            lidar,
            bev_labels: bev.data,
            bev_shape: (bev.height, bev.width),
            pv_labels,
            rig,
        });
        splits.push(e.split);
    }
    Ok(Dataset { scenes, splits, noise_sigma: sigma })
}

#[cfg(test)]
mod tests {
    use super::super::{generate_scenes, SceneConfig};
    use super::*;
    use crate::blocks::ModelConfig;
    use crate::par::Exec;

    fn small() -> Dataset {
        let cfg = SceneConfig::from_model(&ModelConfig::default()).unwrap();
        Dataset::new(generate_scenes(0, 3, &cfg, Exec::Parallel).unwrap(), 1, 0.0).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let data = small();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&data, dir.path()).unwrap();
        let back = read_dataset(dir.path()).unwrap();
        assert_eq!(back, data);
        assert_eq!(back.split(Split::Val).len(), 1);
        assert_eq!(back.split(Split::Val)[0].seed, 2);
        let manifest = std::fs::read_to_string(dir.path().join(MANIFEST)).unwrap();
        let dirs = std::fs::read_dir(dir.path()).unwrap().filter(|e| e.as_ref().unwrap().path().is_dir()).count();
        assert_eq!(manifest.lines().filter(|l| l.starts_with("scene ")).count(), dirs);
    }

    #[test]
    fn checksum_of_a_fixture() {
        // digest of the exact bytes of a 2x1 graymap holding [1, 2]
        let img = Image8::new(2, 1, 1, vec![1, 2]).unwrap().encode();
        assert_eq!(img, b"P5\n2 1\n255\n\x01\x02");
        assert_eq!(hex(&Sha256::digest(b"abc")), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
    }

    #[test]
    fn corruption_names_the_file() {
        let data = small();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&data, dir.path()).unwrap();
        let victim = dir.path().join("scene_0001/lidar.bin");
        let mut bytes = std::fs::read(&victim).unwrap();
        bytes[7] ^= 1;
        std::fs::write(&victim, &bytes).unwrap();
        let err = read_dataset(dir.path()).unwrap_err().to_string();
        assert!(err.contains("scene_0001/lidar.bin") && err.contains("checksum"), "{err}");
        std::fs::remove_file(dir.path().join("scene_0000/cam_2.ppm")).unwrap();
        let err = read_dataset(dir.path()).unwrap_err().to_string();
        assert!(err.contains("scene_0000/cam_2.ppm"), "{err}");
        assert!(read_dataset(&dir.path().join("nowhere")).unwrap_err().to_string().contains(MANIFEST));
    }
}
