//! Synthetic stick-figure scenes and the top-down crop transform.
//!
//! Pixel `(i, j)` covers `[j, j + 1) x [i, i + 1)`; its centre is at
//! `(j + 0.5, i + 0.5)`. Keypoint coordinates use the same continuous frame.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{config, contract, Error, Result};
use crate::eval::PoseInstance;
use crate::numerics::NdArray;
use crate::rng::{self, SplitMix64};

pub const DATASET_FORMAT_VERSION: u32 = 1;

/// Joint names of the fixed skeleton, in keypoint order.
pub const JOINTS: [&str; 8] = ["head", "neck", "pelvis", "l_elbow", "l_hand", "r_elbow", "r_hand", "feet"];

/// Limbs as joint index pairs.
pub const LIMBS: [(usize, usize); 7] = [(0, 1), (1, 2), (1, 3), (3, 4), (1, 5), (5, 6), (2, 7)];

/// Disc colour of each joint.
pub const JOINT_COLORS: [[f32; 3]; 8] = [
    [1.0, 0.2, 0.2],
    [1.0, 0.85, 0.1],
    [0.2, 0.9, 0.2],
    [0.1, 0.9, 0.95],
    [0.2, 0.35, 1.0],
    [1.0, 0.3, 1.0],
    [1.0, 0.55, 0.1],
    [0.97, 0.97, 0.97],
];

const LIMB_COLOR: [f32; 3] = [0.6, 0.6, 0.6];
const LIMB_HALF_WIDTH: f64 = 0.9;
pub const DISC_RADIUS: f64 = 2.2;
const MIN_JOINT_SPACING: f64 = 6.0;
const EDGE_MARGIN: f64 = 5.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub keypoints: usize,
    /// `(H, W)` in pixels.
    pub image_size: (usize, usize),
    pub figures: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self { keypoints: JOINTS.len(), image_size: (64, 64), figures: 1 }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.keypoints != JOINTS.len() {
            return config(format!("the synthetic skeleton has {} joints, not {}", JOINTS.len(), self.keypoints));
        }
        let (h, w) = self.image_size;
        if self.figures == 0 {
            return config("at least one figure per image");
        }
        let col = w as f64 / self.figures as f64;
        if (h as f64) < 32.0 || col < 32.0 {
            return config(format!("{h}x{w} leaves less than 32 px per figure"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    /// `[3, H, W]`, values exactly representable as `f32`.
    pub image: NdArray,
    pub instances: Vec<PoseInstance>,
    pub seed: u64,
    pub index: u64,
}

/// Joint positions of a random pose in a unit frame (torso length 1, y down).
fn sample_pose(r: &mut SplitMix64) -> [[f64; 2]; 8] {
    let dir = |a: f64| [a.cos(), a.sin()];
    let add = |p: [f64; 2], d: [f64; 2], len: f64| [p[0] + len * d[0], p[1] + len * d[1]];
    let deg = |r: &mut SplitMix64, lo: f64, hi: f64| rng::uniform(r, lo, hi).to_radians();
    let up = -90f64.to_radians();
    let pelvis = [0.0, 0.0];
    let torso = up + deg(r, -17.0, 17.0);
    let neck = add(pelvis, dir(torso), 1.0);
    let head = add(neck, dir(torso + deg(r, -23.0, 23.0)), rng::uniform(r, 0.35, 0.45));
    let l1 = deg(r, 100.0, 260.0);
    let l_elbow = add(neck, dir(l1), rng::uniform(r, 0.45, 0.65));
    let l_hand = add(l_elbow, dir(l1 + deg(r, -80.0, 80.0)), rng::uniform(r, 0.4, 0.6));
    let r1 = deg(r, -80.0, 80.0);
    let r_elbow = add(neck, dir(r1), rng::uniform(r, 0.45, 0.65));
    let r_hand = add(r_elbow, dir(r1 + deg(r, -80.0, 80.0)), rng::uniform(r, 0.4, 0.6));
    let feet = add(pelvis, dir(90f64.to_radians() + deg(r, -25.0, 25.0)), rng::uniform(r, 0.8, 1.1));
    [head, neck, pelvis, l_elbow, l_hand, r_elbow, r_hand, feet]
}

/// Fits a pose into `[x0, x1] x [y0, y1]` at a random scale and offset.
fn place(pose: &[[f64; 2]; 8], (x0, x1, y0, y1): (f64, f64, f64, f64), r: &mut SplitMix64) -> [[f64; 2]; 8] {
    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    for p in pose {
        for a in 0..2 {
            lo[a] = lo[a].min(p[a]);
            hi[a] = hi[a].max(p[a]);
        }
    }
    let fit = ((x1 - x0) / (hi[0] - lo[0])).min((y1 - y0) / (hi[1] - lo[1]));
    let s = fit * rng::uniform(r, 0.6, 1.0);
    let ox = x0 + rng::uniform(r, 0.0, 1.0) * ((x1 - x0) - s * (hi[0] - lo[0]));
    let oy = y0 + rng::uniform(r, 0.0, 1.0) * ((y1 - y0) - s * (hi[1] - lo[1]));
    pose.map(|p| [ox + s * (p[0] - lo[0]), oy + s * (p[1] - lo[1])])
}

fn min_spacing(joints: &[[f64; 2]]) -> f64 {
    let mut m = f64::INFINITY;
    for i in 0..joints.len() {
        for j in i + 1..joints.len() {
            m = m.min((joints[i][0] - joints[j][0]).hypot(joints[i][1] - joints[j][1]));
        }
    }
    m
}

fn segment_distance(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 { (((p[0] - a[0]) * dx + (p[1] - a[1]) * dy) / len2).clamp(0.0, 1.0) } else { 0.0 };
    (p[0] - a[0] - t * dx).hypot(p[1] - a[1] - t * dy)
}

fn blend(px: &mut [f32; 3], color: [f32; 3], coverage: f64) {
    if coverage >= 1.0 {
        *px = color;
    } else if coverage > 0.0 {
        for c in 0..3 {
            px[c] = (px[c] as f64 * (1.0 - coverage) + color[c] as f64 * coverage) as f32;
        }
    }
}

/// Bounding box of the joints grown by the disc radius, clipped to the image.
fn joint_box(joints: &[[f64; 2]], (h, w): (usize, usize)) -> [f64; 4] {
    let pad = DISC_RADIUS + 1.0;
    let x0 = joints.iter().map(|p| p[0]).fold(f64::INFINITY, f64::min) - pad;
    let x1 = joints.iter().map(|p| p[0]).fold(f64::NEG_INFINITY, f64::max) + pad;
    let y0 = joints.iter().map(|p| p[1]).fold(f64::INFINITY, f64::min) - pad;
    let y1 = joints.iter().map(|p| p[1]).fold(f64::NEG_INFINITY, f64::max) + pad;
    let (x0, y0) = (x0.max(0.0), y0.max(0.0));
    let (x1, y1) = (x1.min(w as f64), y1.min(h as f64));
    [x0, y0, x1 - x0, y1 - y0]
}

/// Renders scene `index` of the dataset seeded by `seed`.
pub fn render_scene(seed: u64, index: u64, cfg: &SynthConfig) -> Result<SyntheticScene> {
    cfg.validate()?;
    let (h, w) = cfg.image_size;
    let mut r = rng::stream(seed, index);

    let base: [f64; 3] = std::array::from_fn(|_| rng::uniform(&mut r, 0.12, 0.32));
    let waves: Vec<(f64, f64, f64, f64, usize)> = (0..3)
        .map(|_| {
            let a = rng::uniform(&mut r, 0.0, std::f64::consts::TAU);
            let f = rng::uniform(&mut r, 0.1, 0.6);
            (a.cos() * f, a.sin() * f, rng::uniform(&mut r, 0.0, std::f64::consts::TAU), rng::uniform(&mut r, 0.03, 0.07), (index as usize + 1) % 3)
        })
        .collect();
    let mut pixels = vec![[0f32; 3]; h * w];
    for i in 0..h {
        for j in 0..w {
            let (x, y) = (j as f64 + 0.5, i as f64 + 0.5);
            let mut c = base;
            for (k, &(fx, fy, ph, amp, _)) in waves.iter().enumerate() {
                let v = amp * (fx * x + fy * y + ph).sin();
                c[k % 3] += v;
                c[(k + 1) % 3] += 0.5 * v;
            }
            pixels[i * w + j] = c.map(|v| v.clamp(0.0, 1.0) as f32);
        }
    }

    let col = w as f64 / cfg.figures as f64;
    let mut instances = Vec::with_capacity(cfg.figures);
    let mut figures = Vec::with_capacity(cfg.figures);
    for f in 0..cfg.figures {
        let region = (f as f64 * col + EDGE_MARGIN, (f + 1) as f64 * col - EDGE_MARGIN, EDGE_MARGIN, h as f64 - EDGE_MARGIN);
        let mut best: Option<([[f64; 2]; 8], f64)> = None;
        for _ in 0..64 {
            let joints = place(&sample_pose(&mut r), region, &mut r);
            let spacing = min_spacing(&joints);
            if best.is_none_or(|b| spacing > b.1) {
                best = Some((joints, spacing));
            }
            if spacing >= MIN_JOINT_SPACING {
                break;
            }
        }
        let joints = best.expect("at least one attempt").0;
        let bbox = joint_box(&joints, (h, w));
        instances.push(PoseInstance {
            image_id: index,
            keypoints: joints.iter().flat_map(|p| [p[0], p[1], 2.0]).collect(),
            bbox,
            bbox_score: 1.0,
            kp_scores: vec![1.0; joints.len()],
            area: bbox[2] * bbox[3],
        });
        figures.push(joints);
    }

    for joints in &figures {
        for i in 0..h {
            for j in 0..w {
                let p = [j as f64 + 0.5, i as f64 + 0.5];
                let d = LIMBS.iter().map(|&(a, b)| segment_distance(p, joints[a], joints[b])).fold(f64::INFINITY, f64::min);
                blend(&mut pixels[i * w + j], LIMB_COLOR, LIMB_HALF_WIDTH + 0.5 - d);
            }
        }
    }
    for joints in &figures {
        for (k, q) in joints.iter().enumerate() {
            let (i0, i1) = ((q[1] - 4.0).floor().max(0.0) as usize, ((q[1] + 4.0).ceil() as usize).min(h));
            let (j0, j1) = ((q[0] - 4.0).floor().max(0.0) as usize, ((q[0] + 4.0).ceil() as usize).min(w));
            for i in i0..i1 {
                for j in j0..j1 {
                    let d = (j as f64 + 0.5 - q[0]).hypot(i as f64 + 0.5 - q[1]);
                    blend(&mut pixels[i * w + j], JOINT_COLORS[k], DISC_RADIUS + 0.5 - d);
                }
            }
        }
    }

    let image = NdArray::from_fn([3, h, w], |n| pixels[n % (h * w)][n / (h * w)] as f64);
    Ok(SyntheticScene { image, instances, seed, index })
}

/// `n` scenes rendered in parallel; scene `i` depends only on `(seed, i)`.
pub fn synth_generate(seed: u64, n: usize, cfg: &SynthConfig) -> Result<Vec<SyntheticScene>> {
    if n == 0 {
        return contract("synthetic dataset needs at least one scene");
    }
    cfg.validate()?;
    (0..n as u64).into_par_iter().map(|i| render_scene(seed, i, cfg)).collect()
}

/// Affine map between an image-space box and a fixed-size patch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CropTransform {
    /// `(x, y, w, h)` in image pixels.
    pub bbox: [f64; 4],
    /// `(H, W)` of the patch.
    pub out_size: (usize, usize),
}

impl CropTransform {
    pub fn new(bbox: [f64; 4], out_size: (usize, usize)) -> Result<Self> {
        if !(bbox[2] > 0.0 && bbox[3] > 0.0) || bbox.iter().any(|v| !v.is_finite()) {
            return contract(format!("degenerate crop box {bbox:?}"));
        }
        if out_size.0 == 0 || out_size.1 == 0 {
            return contract("empty crop output");
        }
        Ok(Self { bbox, out_size })
    }

    /// Image point to `[0, 1]^2` box coordinates.
    pub fn to_normalized(&self, p: [f64; 2]) -> [f64; 2] {
        [(p[0] - self.bbox[0]) / self.bbox[2], (p[1] - self.bbox[1]) / self.bbox[3]]
    }

    pub fn from_normalized(&self, u: [f64; 2]) -> [f64; 2] {
        [self.bbox[0] + u[0] * self.bbox[2], self.bbox[1] + u[1] * self.bbox[3]]
    }

    /// Image point to patch pixel coordinates.
    pub fn to_patch(&self, p: [f64; 2]) -> [f64; 2] {
        let u = self.to_normalized(p);
        [u[0] * self.out_size.1 as f64, u[1] * self.out_size.0 as f64]
    }

    pub fn from_patch(&self, q: [f64; 2]) -> [f64; 2] {
        self.from_normalized([q[0] / self.out_size.1 as f64, q[1] / self.out_size.0 as f64])
    }
}

/// Bilinear value of one channel at continuous image point `(x, y)`, zero outside.
fn sample_plane(plane: &[f64], (h, w): (usize, usize), x: f64, y: f64) -> f64 {
    let (u, v) = (x - 0.5, y - 0.5);
    let (u0, v0) = (u.floor(), v.floor());
    let (fu, fv) = (u - u0, v - v0);
    let mut acc = 0.0;
    for (dv, wv) in [(0.0, 1.0 - fv), (1.0, fv)] {
        for (du, wu) in [(0.0, 1.0 - fu), (1.0, fu)] {
            let (ui, vi) = (u0 + du, v0 + dv);
            if ui >= 0.0 && vi >= 0.0 && ui < w as f64 && vi < h as f64 && wu * wv != 0.0 {
                acc += wu * wv * plane[vi as usize * w + ui as usize];
            }
        }
    }
    acc
}

/// Crops `bbox` out of a `[3, H, W]` image and resamples it to `out_size`.
/// Returns the patch, the ground truth normalized to the box, and the transform.
pub fn crop_resize(
    image: &NdArray,
    gt: &[[f64; 2]],
    bbox: [f64; 4],
    out_size: (usize, usize),
) -> Result<(NdArray, Vec<[f64; 2]>, CropTransform)> {
    let t = CropTransform::new(bbox, out_size)?;
    let &[c, h, w] = image.shape() else { return contract(format!("image must be [C, H, W], got {:?}", image.shape())) };
    let (oh, ow) = out_size;
    let patch = NdArray::from_fn([c, oh, ow], |n| {
        let (ch, i, j) = (n / (oh * ow), (n / ow) % oh, n % ow);
        let p = t.from_patch([j as f64 + 0.5, i as f64 + 0.5]);
        sample_plane(&image.data()[ch * h * w..(ch + 1) * h * w], (h, w), p[0], p[1])
    });
    Ok((patch, gt.iter().map(|&p| t.to_normalized(p)).collect(), t))
}

/// Square crop box around an instance box, grown by `padding`.
pub fn person_box(bbox: [f64; 4], padding: f64) -> [f64; 4] {
    let (cx, cy) = (bbox[0] + 0.5 * bbox[2], bbox[1] + 0.5 * bbox[3]);
    let side = bbox[2].max(bbox[3]) * padding;
    [cx - 0.5 * side, cy - 0.5 * side, side, side]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub count: usize,
    pub keypoints: usize,
    pub image_size: (usize, usize),
    pub seed: u64,
    #[serde(default = "one")]
    pub figures: usize,
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Sidecar {
    shape: [usize; 3],
    seed: u64,
    index: u64,
    instances: Vec<PoseInstance>,
}

fn format_err(path: &Path, msg: impl Into<String>) -> Error {
    Error::Format { path: path.to_path_buf(), msg: msg.into() }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp)?;
    f.write_all(bytes)?;
    f.sync_all()?;
    fs::rename(tmp, path)?;
    Ok(())
}

/// Writes `manifest.json`, `NNNNNN.raw` planes, `NNNNNN.json` sidecars and `annotations.jsonl`.
pub fn write_dataset(dir: &Path, scenes: &[SyntheticScene], cfg: &SynthConfig, seed: u64) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut annotations = Vec::new();
    for s in scenes {
        let stem = format!("{:06}", s.index);
        let raw: Vec<u8> = s.image.data().iter().flat_map(|&v| (v as f32).to_le_bytes()).collect();
        write_atomic(&dir.join(format!("{stem}.raw")), &raw)?;
        let shape = [s.image.shape()[0], s.image.shape()[1], s.image.shape()[2]];
        let side = Sidecar { shape, seed: s.seed, index: s.index, instances: s.instances.clone() };
        write_atomic(&dir.join(format!("{stem}.json")), &serde_json::to_vec_pretty(&side)?)?;
        annotations.extend(s.instances.iter().cloned());
    }
    let mut buf = Vec::new();
    crate::eval::write_instances(&mut buf, &annotations)?;
    write_atomic(&dir.join("annotations.jsonl"), &buf)?;
    let manifest = Manifest {
        format_version: DATASET_FORMAT_VERSION,
        count: scenes.len(),
        keypoints: cfg.keypoints,
        image_size: cfg.image_size,
        seed,
        figures: cfg.figures,
    };
    write_atomic(&dir.join("manifest.json"), &serde_json::to_vec_pretty(&manifest)?)
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub dir: PathBuf,
    pub manifest: Manifest,
    pub scenes: Vec<SyntheticScene>,
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join("manifest.json");
    let manifest: Manifest =
        serde_json::from_slice(&fs::read(&path)?).map_err(|e| format_err(&path, e.to_string()))?;
    if manifest.format_version != DATASET_FORMAT_VERSION {
        return Err(format_err(&path, format!("unsupported dataset version {}", manifest.format_version)));
    }
    Ok(manifest)
}

/// Loads every scene listed by the manifest.
pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let manifest = read_manifest(dir)?;
    let (h, w) = manifest.image_size;
    let scenes = (0..manifest.count)
        .map(|i| {
            let stem = format!("{i:06}");
            let jpath = dir.join(format!("{stem}.json"));
            let side: Sidecar =
                serde_json::from_slice(&fs::read(&jpath)?).map_err(|e| format_err(&jpath, e.to_string()))?;
            if side.shape != [3, h, w] {
                return Err(format_err(&jpath, format!("shape {:?} does not match manifest {h}x{w}", side.shape)));
            }
            let rpath = dir.join(format!("{stem}.raw"));
            let raw = fs::read(&rpath)?;
            if raw.len() != 3 * h * w * 4 {
                return Err(format_err(&rpath, format!("{} bytes, expected {}", raw.len(), 3 * h * w * 4)));
            }
            let data = raw.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64).collect();
            Ok(SyntheticScene { image: NdArray::new([3, h, w], data)?, instances: side.instances, seed: side.seed, index: side.index })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset { dir: dir.to_path_buf(), manifest, scenes })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scenes_are_deterministic() {
        let cfg = SynthConfig::default();
        let a = render_scene(5, 3, &cfg).unwrap();
        assert_eq!(a, render_scene(5, 3, &cfg).unwrap());
        assert_ne!(a.image, render_scene(5, 4, &cfg).unwrap().image);
        let batch = synth_generate(5, 6, &cfg).unwrap();
        assert_eq!(batch[3], a);
    }

    #[test]
    fn joint_centre_shows_joint_colour() {
        let cfg = SynthConfig::default();
        for idx in 0..20 {
            let s = render_scene(1, idx, &cfg).unwrap();
            let inst = &s.instances[0];
            for k in 0..8 {
                let [x, y] = inst.xy(k);
                let (i, j) = (y.floor() as usize, x.floor() as usize);
                for c in 0..3 {
                    assert_eq!(s.image.data()[c * 64 * 64 + i * 64 + j] as f32, JOINT_COLORS[k][c], "scene {idx} joint {k}");
                }
            }
        }
    }

    #[test]
    fn multi_figure_scenes() {
        let cfg = SynthConfig { figures: 2, image_size: (64, 96), ..Default::default() };
        let s = render_scene(2, 0, &cfg).unwrap();
        assert_eq!(s.instances.len(), 2);
        assert!(s.instances[0].keypoints.chunks(3).all(|p| p[0] < 48.0));
        assert!(s.instances[1].keypoints.chunks(3).all(|p| p[0] >= 48.0));
    }

    #[test]
    fn crop_identity_and_round_trip() {
        let s = render_scene(0, 0, &SynthConfig::default()).unwrap();
        let gt: Vec<[f64; 2]> = (0..8).map(|k| s.instances[0].xy(k)).collect();
        let (patch, norm, t) = crop_resize(&s.image, &gt, [0.0, 0.0, 64.0, 64.0], (64, 64)).unwrap();
        assert_eq!(patch, s.image);
        for (n, g) in norm.iter().zip(&gt) {
            assert_eq!(t.from_normalized(*n), *g);
        }
        let t = CropTransform::new([3.5, -2.0, 40.0, 17.0], (32, 48)).unwrap();
        assert_eq!(t.to_normalized([23.5, 6.5]), [0.5, 0.5]);
        for g in &gt {
            let back = t.from_patch(t.to_patch(*g));
            assert!((back[0] - g[0]).abs() < 1e-9 && (back[1] - g[1]).abs() < 1e-9);
        }
        assert!(crop_resize(&s.image, &gt, [0.0, 0.0, 0.0, 4.0], (8, 8)).is_err());
    }

    #[test]
    fn dataset_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SynthConfig::default();
        let scenes = synth_generate(9, 3, &cfg).unwrap();
        write_dataset(dir.path(), &scenes, &cfg, 9).unwrap();
        let ds = read_dataset(dir.path()).unwrap();
        assert_eq!(ds.scenes, scenes);
        assert_eq!(ds.manifest.count, 3);
    }
}
