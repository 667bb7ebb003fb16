//! Dataset model and I/O for posed RGB(-D)+mask sequences, plus a synthetic
//! scene generator with exact ground truth for desk-scale benchmarks.
//!
//! On-disk layout:
//! ```text
//! scene/poses.json          intrinsics, prompt, per-frame camera_to_world
//! scene/images/{i:04}.png   8-bit color
//! scene/masks/{i:04}.png    0/255, 255 = region to remove/inpaint
//! scene/depth/{i:04}.pfm    optional range depth, 32-bit LE floats
//! scene/gt/...              mirror for held-out object-free frames
//! ```

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::img::{
    read_png_mask, read_png_rgb, read_pfm, write_pfm, write_png_mask, write_png_rgb, Image, Mask,
};
use crate::math::{cross3, dot3, normalize3, sub3, V3};
use crate::render::Camera;

#[derive(Debug, Clone)]
pub struct SceneFrame {
    /// H x W x 3 color in [0,1].
    pub image: Image<f32>,
    /// true = region to remove/inpaint.
    pub mask: Mask,
    /// Optional range depth (distance along the unit ray), positive where valid.
    pub depth: Option<Image<f32>>,
    pub camera: Camera,
}

#[derive(Debug, Clone)]
pub struct SceneDataset {
    pub frames: Vec<SceneFrame>,
    pub prompt: String,
    /// Held-out object-free frames for evaluation; may be empty.
    pub gt_frames: Vec<SceneFrame>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Intrinsics {
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    width: usize,
    height: usize,
    near: f64,
    far: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct PoseEntry {
    camera_to_world: [[f64; 4]; 4],
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct PosesFile {
    prompt: String,
    intrinsics: Intrinsics,
    frames: Vec<PoseEntry>,
    #[serde(default)]
    gt_frames: Vec<PoseEntry>,
}

fn load_err(path: &Path, message: impl std::fmt::Display) -> Error {
    Error::Load {
        path: path.display().to_string(),
        message: message.to_string(),
    }
}

fn camera_from(intr: &Intrinsics, pose: &PoseEntry) -> Camera {
    Camera {
        fx: intr.fx,
        fy: intr.fy,
        cx: intr.cx,
        cy: intr.cy,
        width: intr.width,
        height: intr.height,
        camera_to_world: pose.camera_to_world,
        near: intr.near,
        far: intr.far,
    }
}

fn intrinsics_of(cam: &Camera) -> Intrinsics {
    Intrinsics {
        fx: cam.fx,
        fy: cam.fy,
        cx: cam.cx,
        cy: cam.cy,
        width: cam.width,
        height: cam.height,
        near: cam.near,
        far: cam.far,
    }
}

fn load_frames(
    dir: &Path,
    intr: &Intrinsics,
    poses: &[PoseEntry],
    require_mask: bool,
) -> Result<Vec<SceneFrame>> {
    let mut frames = Vec::with_capacity(poses.len());
    for (i, pose) in poses.iter().enumerate() {
        let img_path = dir.join(format!("images/{i:04}.png"));
        let image = read_png_rgb(&img_path)?;
        if image.height != intr.height || image.width != intr.width {
            return Err(load_err(
                &img_path,
                format!(
                    "image is {}x{}, intrinsics say {}x{}",
                    image.width, image.height, intr.width, intr.height
                ),
            ));
        }
        let mask_path = dir.join(format!("masks/{i:04}.png"));
        let mask = if mask_path.exists() || require_mask {
            let m = read_png_mask(&mask_path)?;
            if m.height != intr.height || m.width != intr.width {
                return Err(load_err(&mask_path, "mask dimensions mismatch"));
            }
            m
        } else {
            Mask::new_false(intr.height, intr.width)
        };
        let depth_path = dir.join(format!("depth/{i:04}.pfm"));
        let depth = if depth_path.exists() {
            let d = read_pfm(&depth_path)?;
            if d.height != intr.height || d.width != intr.width || d.channels != 1 {
                return Err(load_err(&depth_path, "depth dimensions mismatch"));
            }
            for y in 0..d.height {
                for x in 0..d.width {
                    if !mask.at(y, x) && !(d.at(y, x, 0) > 0.0) {
                        return Err(load_err(
                            &depth_path,
                            format!("non-positive depth at unmasked pixel ({y},{x})"),
                        ));
                    }
                }
            }
            Some(d)
        } else {
            None
        };
        let camera = camera_from(intr, pose);
        camera
            .validate()
            .map_err(|e| load_err(&dir.join("poses.json"), format!("frame {i}: {e}")))?;
        frames.push(SceneFrame {
            image,
            mask,
            depth,
            camera,
        });
    }
    Ok(frames)
}

pub fn load_dataset(dir: &Path) -> Result<SceneDataset> {
    let poses_path = dir.join("poses.json");
    let text =
        std::fs::read_to_string(&poses_path).map_err(|e| load_err(&poses_path, e))?;
    let poses: PosesFile =
        serde_json::from_str(&text).map_err(|e| load_err(&poses_path, e))?;
    if poses.frames.len() < 2 {
        return Err(load_err(&poses_path, "a dataset needs at least 2 frames"));
    }
    let frames = load_frames(dir, &poses.intrinsics, &poses.frames, true)?;
    let gt_frames = if poses.gt_frames.is_empty() {
        Vec::new()
    } else {
        load_frames(&dir.join("gt"), &poses.intrinsics, &poses.gt_frames, false)?
    };
    Ok(SceneDataset {
        frames,
        prompt: poses.prompt,
        gt_frames,
    })
}

fn save_frames(dir: &Path, frames: &[SceneFrame]) -> Result<()> {
    std::fs::create_dir_all(dir.join("images"))?;
    std::fs::create_dir_all(dir.join("masks"))?;
    if frames.iter().any(|f| f.depth.is_some()) {
        std::fs::create_dir_all(dir.join("depth"))?;
    }
    for (i, f) in frames.iter().enumerate() {
        write_png_rgb(&dir.join(format!("images/{i:04}.png")), &f.image)?;
        write_png_mask(&dir.join(format!("masks/{i:04}.png")), &f.mask)?;
        if let Some(d) = &f.depth {
            write_pfm(&dir.join(format!("depth/{i:04}.pfm")), d)?;
        }
    }
    Ok(())
}

pub fn save_dataset(dir: &Path, dataset: &SceneDataset) -> Result<()> {
    if dataset.frames.is_empty() {
        return Err(Error::InvalidInput("dataset has no frames".into()));
    }
    std::fs::create_dir_all(dir)?;
    let poses = PosesFile {
        prompt: dataset.prompt.clone(),
        intrinsics: intrinsics_of(&dataset.frames[0].camera),
        frames: dataset
            .frames
            .iter()
            .map(|f| PoseEntry {
                camera_to_world: f.camera.camera_to_world,
            })
            .collect(),
        gt_frames: dataset
            .gt_frames
            .iter()
            .map(|f| PoseEntry {
                camera_to_world: f.camera.camera_to_world,
            })
            .collect(),
    };
    let text = serde_json::to_string_pretty(&poses)
        .map_err(|e| Error::Config(format!("pose serialization failed: {e}")))?;
    std::fs::write(dir.join("poses.json"), text)?;
    save_frames(dir, &dataset.frames)?;
    if !dataset.gt_frames.is_empty() {
        save_frames(&dir.join("gt"), &dataset.gt_frames)?;
    }
    Ok(())
}

/// Descriptor for the synthetic benchmark: a textured background planeseen
/// past an optional sphere occluder, cameras on an arc.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub width: usize,
    pub height: usize,
    pub frames: usize,
    /// Mask dilation radius in pixels over the exact silhouette.
    pub dilate: usize,
    pub object: bool,
    pub with_depth: bool,
    pub prompt: String,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            width: 32,
            height: 32,
            frames: 8,
            dilate: 1,
            object: true,
            with_depth: true,
            prompt: "a clean wooden desk surface".into(),
        }
    }
}

/// World model behind the generator (fixed; the spec only varies layout).
const PLANE_Z: f64 = 3.0;
const SPHERE_CENTER: V3<f64> = [0.0, 0.0, 2.4];
const SPHERE_RADIUS: f64 = 0.45;
const SPHERE_COLOR: [f64; 3] = [0.75, 0.22, 0.2];
const CAMERA_ARC_RADIUS: f64 = 3.0;

/// Smooth background texture in [0.05, 0.95], function of the plane hit point.
pub fn background_texture(x: f64, y: f64) -> [f64; 3] {
    let c = [
        0.5 + 0.3 * (3.0 * x).sin(),
        0.5 + 0.3 * (3.0 * y).cos(),
        0.5 + 0.2 * (2.0 * x + 2.0 * y).sin(),
    ];
    c.map(|v| v.clamp(0.05, 0.95))
}

fn look_at_camera(intr: &Intrinsics, center: V3<f64>, target: V3<f64>) -> Camera {
    let z = normalize3(sub3(target, center));
    // y-down convention: world up-approx is +y (down); x = y_approx x z
    let y_approx = [0.0, 1.0, 0.0];
    let x = normalize3(cross3(y_approx, z));
    let y = cross3(z, x);
    let mut m = [[0.0; 4]; 4];
    for i in 0..3 {
        m[i][0] = x[i];
        m[i][1] = y[i];
        m[i][2] = z[i];
        m[i][3] = center[i];
    }
    m[3][3] = 1.0;
    Camera {
        fx: intr.fx,
        fy: intr.fy,
        cx: intr.cx,
        cy: intr.cy,
        width: intr.width,
        height: intr.height,
        camera_to_world: m,
        near: intr.near,
        far: intr.far,
    }
}

/// Distance along the unit ray to the sphere, if hit in front of the origin.
fn sphere_hit(origin: V3<f64>, dir: V3<f64>) -> Option<f64> {
    let oc = sub3(origin, SPHERE_CENTER);
    let b = dot3(oc, dir);
    let c = dot3(oc, oc) - SPHERE_RADIUS * SPHERE_RADIUS;
    let disc = b * b - c;
    if disc < 0.0 {
        return None;
    }
    let t = -b - disc.sqrt();
    (t > 0.0).then_some(t)
}

fn quantize_8bit(v: f64) -> f32 {
    ((v.clamp(0.0, 1.0) * 255.0).round() / 255.0) as f32
}

/// Analytic render of one view: color (8-bit quantized), range depth, and
/// the exact object silhouette.
pub fn render_analytic(camera: &Camera, with_object: bool) -> (Image<f32>, Image<f32>, Mask) {
    let mut color = Image::zeros(camera.height, camera.width, 3);
    let mut depth = Image::zeros(camera.height, camera.width, 1);
    let mut silhouette = Mask::new_false(camera.height, camera.width);
    for v in 0..camera.height {
        for u in 0..camera.width {
            let (o, d) = camera.generate_ray(u, v).unwrap();
            let t_plane = (PLANE_Z - o[2]) / d[2];
            let t_obj = if with_object { sphere_hit(o, d) } else { None };
            match t_obj {
                Some(t) if t < t_plane => {
                    silhouette.set(v, u, true);
                    depth.set(v, u, 0, t as f32);
                    for c in 0..3 {
                        color.set(v, u, c, quantize_8bit(SPHERE_COLOR[c]));
                    }
                }
                _ => {
                    let p = [o[0] + t_plane * d[0], o[1] + t_plane * d[1]];
                    let tex = background_texture(p[0], p[1]);
                    depth.set(v, u, 0, t_plane as f32);
                    for c in 0..3 {
                        color.set(v, u, c, quantize_8bit(tex[c]));
                    }
                }
            }
        }
    }
    (color, depth, silhouette)
}

/// Cameras on an arc looking at the plane center.
pub fn arc_cameras(spec: &SyntheticSpec) -> Vec<Camera> {
    let intr = Intrinsics {
        fx: spec.width as f64,
        fy: spec.width as f64,
        cx: spec.width as f64 / 2.0,
        cy: spec.height as f64 / 2.0,
        width: spec.width,
        height: spec.height,
        near: 1.0,
        far: 6.0,
    };
    let target = [0.0, 0.0, PLANE_Z];
    (0..spec.frames)
        .map(|i| {
            let frac = if spec.frames > 1 {
                i as f64 / (spec.frames - 1) as f64
            } else {
                0.5
            };
            let phi = -0.45 + 0.9 * frac;
            let center = [
                target[0] + CAMERA_ARC_RADIUS * phi.sin(),
                target[1] + 0.25 * (2.5 * phi).sin(),
                target[2] - CAMERA_ARC_RADIUS * phi.cos(),
            ];
            look_at_camera(&intr, center, target)
        })
        .collect()
}

pub fn generate_synthetic_scene(spec: &SyntheticSpec) -> Result<SceneDataset> {
    if spec.width == 0 || spec.height == 0 || spec.frames < 2 {
        return Err(Error::InvalidInput(
            "synthetic scene needs nonzero size and at least 2 frames".into(),
        ));
    }
    let cameras = arc_cameras(spec);
    let mut frames = Vec::with_capacity(spec.frames);
    let mut gt_frames = Vec::with_capacity(spec.frames);
    for camera in cameras {
        let (image, depth, silhouette) = render_analytic(&camera, spec.object);
        let (gt_image, gt_depth, _) = render_analytic(&camera, false);
        let mask = silhouette.dilate(spec.dilate);
        frames.push(SceneFrame {
            image,
            mask: mask.clone(),
            depth: spec.with_depth.then_some(depth),
            camera: camera.clone(),
        });
        gt_frames.push(SceneFrame {
            image: gt_image,
            mask,
            depth: spec.with_depth.then_some(gt_depth),
            camera,
        });
    }
    Ok(SceneDataset {
        frames,
        prompt: spec.prompt.clone(),
        gt_frames,
    })
}

/// Uniformly sample `count` unmasked pixel rays across all frames.
pub fn sample_unmasked_rays(
    dataset: &SceneDataset,
    count: usize,
    rng: &mut impl Rng,
) -> Vec<(usize, usize, usize)> {
    let mut out = Vec::with_capacity(count);
    let n = dataset.frames.len();
    while out.len() < count {
        let f = rng.gen_range(0..n);
        let frame = &dataset.frames[f];
        let y = rng.gen_range(0..frame.camera.height);
        let x = rng.gen_range(0..frame.camera.width);
        if !frame.mask.at(y, x) {
            out.push((f, y, x));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::{norm3, scale3};

    fn small_spec() -> SyntheticSpec {
        SyntheticSpec {
            width: 16,
            height: 16,
            frames: 4,
            dilate: 1,
            ..SyntheticSpec::default()
        }
    }

    #[test]
    fn save_load_round_trip_is_exact() {
        let ds = generate_synthetic_scene(&small_spec()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(dir.path(), &ds).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(back.prompt, ds.prompt);
        assert_eq!(back.frames.len(), ds.frames.len());
        assert_eq!(back.gt_frames.len(), ds.gt_frames.len());
        for (a, b) in ds.frames.iter().zip(back.frames.iter()) {
            assert_eq!(a.image.data, b.image.data);
            assert_eq!(a.mask.data, b.mask.data);
            let (da, db) = (a.depth.as_ref().unwrap(), b.depth.as_ref().unwrap());
            for (x, y) in da.data.iter().zip(db.data.iter()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
            assert_eq!(a.camera.camera_to_world, b.camera.camera_to_world);
        }
    }

    #[test]
    fn missing_mask_names_the_file() {
        let ds = generate_synthetic_scene(&small_spec()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(dir.path(), &ds).unwrap();
        std::fs::remove_file(dir.path().join("masks/0002.png")).unwrap();
        match load_dataset(dir.path()) {
            Err(Error::Load { path, .. }) => assert!(path.contains("0002.png"), "{path}"),
            other => panic!("expected load error, got {other:?}"),
        }
    }

    #[test]
    fn mask_png_count_oracle() {
        let ds = generate_synthetic_scene(&small_spec()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(dir.path(), &ds).unwrap();
        // count 255-valued pixels in the stored PNG by re-reading raw
        let decoded = image::open(dir.path().join("masks/0001.png")).unwrap().to_luma8();
        let count_255 = decoded.pixels().filter(|p| p.0[0] == 255).count();
        assert_eq!(count_255, ds.frames[1].mask.count_true());
        assert!(count_255 > 0);
    }

    #[test]
    fn no_object_matches_ground_truth() {
        let spec = SyntheticSpec {
            object: false,
            ..small_spec()
        };
        let ds = generate_synthetic_scene(&spec).unwrap();
        for (f, g) in ds.frames.iter().zip(ds.gt_frames.iter()) {
            assert_eq!(f.image.data, g.image.data);
            assert_eq!(f.mask.count_true(), 0);
        }
    }

    #[test]
    fn depth_matches_ray_plane_distance() {
        let ds = generate_synthetic_scene(&small_spec()).unwrap();
        for g in &ds.gt_frames {
            let d = g.depth.as_ref().unwrap();
            for v in 0..g.camera.height {
                for u in 0..g.camera.width {
                    let (o, dir) = g.camera.generate_ray(u, v).unwrap();
                    let t = (PLANE_Z - o[2]) / dir[2];
                    assert!((d.at(v, u, 0) as f64 - t).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn zero_dilation_mask_equals_silhouette_oracle() {
        let spec = SyntheticSpec {
            dilate: 0,
            ..small_spec()
        };
        let ds = generate_synthetic_scene(&spec).unwrap();
        for f in &ds.frames {
            for v in 0..f.camera.height {
                for u in 0..f.camera.width {
                    // independent silhouette: sphere hit closer than plane
                    let (o, dir) = f.camera.generate_ray(u, v).unwrap();
                    let t_plane = (PLANE_Z - o[2]) / dir[2];
                    let hit = sphere_hit(o, dir).map_or(false, |t| t < t_plane);
                    assert_eq!(f.mask.at(v, u), hit, "pixel ({v},{u})");
                }
            }
        }
    }

    #[test]
    fn dilated_mask_is_superset_of_silhouette() {
        for dilate in [0usize, 1, 3] {
            let spec = SyntheticSpec {
                dilate,
                ..small_spec()
            };
            let ds = generate_synthetic_scene(&spec).unwrap();
            let exact = generate_synthetic_scene(&SyntheticSpec { dilate: 0, ..spec }).unwrap();
            for (f, e) in ds.frames.iter().zip(exact.frames.iter()) {
                assert!(f.mask.is_superset_of(&e.mask));
            }
        }
    }

    #[test]
    fn pose_consistency_reprojection() {
        // resolution high enough that the depth of the nearest pixel's own
        // ray stays within the 1% agreement band
        let ds = generate_synthetic_scene(&SyntheticSpec {
            width: 96,
            height: 96,
            frames: 5,
            ..SyntheticSpec::default()
        })
        .unwrap();
        let a = &ds.frames[1];
        let b = &ds.frames[3];
        let db = b.depth.as_ref().unwrap();
        let mut checked = 0;
        for v in 0..a.camera.height {
            for u in 0..a.camera.width {
                if a.mask.at(v, u) {
                    continue;
                }
                let range = a.depth.as_ref().unwrap().at(v, u, 0) as f64;
                let dir = a.camera.pixel_direction(u, v);
                let z = range / norm3(dir);
                let p_cam = scale3(dir, z);
                let world = a.camera.to_world(p_cam);
                let q = b.camera.to_camera(world);
                if q[2] <= 0.0 {
                    continue;
                }
                let uf = b.camera.fx * q[0] / q[2] + b.camera.cx;
                let vf = b.camera.fy * q[1] / q[2] + b.camera.cy;
                let (ui, vi) = ((uf - 0.5).round(), (vf - 0.5).round());
                if ui < 0.0
                    || vi < 0.0
                    || ui as usize >= b.camera.width
                    || vi as usize >= b.camera.height
                {
                    continue;
                }
                let (ui, vi) = (ui as usize, vi as usize);
                if b.mask.at(vi, ui) {
                    continue;
                }
                assert!((uf - 0.5 - ui as f64).abs() <= 0.5 + 1e-9);
                assert!((vf - 0.5 - vi as f64).abs() <= 0.5 + 1e-9);
                // depth agreement within 1% (range depth in frame B)
                let range_b = norm3(sub3(world, b.camera.center()));
                let stored = db.at(vi, ui, 0) as f64;
                assert!(
                    (stored - range_b).abs() / range_b < 0.01,
                    "pixel ({v},{u}): {stored} vs {range_b}"
                );
                checked += 1;
            }
        }
        assert!(checked > 100, "only {checked} pixels checked");
    }

    #[test]
    fn too_few_frames_rejected() {
        let spec = SyntheticSpec {
            frames: 1,
            ..SyntheticSpec::default()
        };
        assert!(generate_synthetic_scene(&spec).is_err());
    }
}
