//! Evaluation metrics: PSNR and depth L2 restricted to mask bounding boxes,
//! plus report emission as JSON and a stdout table.

use serde::{Serialize, Serializer};

use crate::error::{Error, Result};
use crate::img::{Image, Mask};
use crate::math::Real;

/// Tight axis-aligned bounding box over mask pixels; all bounds inclusive.
/// `u` is the column (x), `v` the row (y).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct BBox {
    pub u_min: usize,
    pub v_min: usize,
    pub u_max: usize,
    pub v_max: usize,
}

impl BBox {
    /// Row-major pixel list (y, x) covering the box.
    pub fn pixels(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::with_capacity((self.v_max - self.v_min + 1) * (self.u_max - self.u_min + 1));
        for v in self.v_min..=self.v_max {
            for u in self.u_min..=self.u_max {
                out.push((v, u));
            }
        }
        out
    }
}

/// Tight bounding box of the true pixels of a mask.
pub fn mask_bbox(mask: &Mask) -> Result<BBox> {
    let mut bbox: Option<BBox> = None;
    for y in 0..mask.height {
        for x in 0..mask.width {
            if mask.at(y, x) {
                let b = bbox.get_or_insert(BBox {
                    u_min: x,
                    v_min: y,
                    u_max: x,
                    v_max: y,
                });
                b.u_min = b.u_min.min(x);
                b.u_max = b.u_max.max(x);
                b.v_min = b.v_min.min(y);
                b.v_max = b.v_max.max(y);
            }
        }
    }
    bbox.ok_or(Error::EmptyMask)
}

fn check_region<T: Real>(a: &Image<T>, b: &Image<T>, region: &[(usize, usize)]) -> Result<()> {
    if !a.same_shape(b) {
        return Err(Error::ShapeMismatch(format!(
            "{}x{}x{} vs {}x{}x{}",
            a.height, a.width, a.channels, b.height, b.width, b.channels
        )));
    }
    if region.is_empty() {
        return Err(Error::InvalidInput("empty evaluation region".into()));
    }
    for &(y, x) in region {
        if y >= a.height || x >= a.width {
            return Err(Error::InvalidInput(format!(
                "region pixel ({y}, {x}) outside {}x{}",
                a.height, a.width
            )));
        }
    }
    Ok(())
}

fn region_mse<T: Real>(a: &Image<T>, b: &Image<T>, region: &[(usize, usize)]) -> f64 {
    let mut sum = 0.0;
    for &(y, x) in region {
        for c in 0..a.channels {
            let d = a.at(y, x, c).to_f64_() - b.at(y, x, c).to_f64_();
            sum += d * d;
        }
    }
    sum / (region.len() * a.channels) as f64
}

/// Peak signal-to-noise ratio in dB over the listed pixels, MAX = 1 on
/// normalized images. Identical inputs give the +infinity sentinel.
pub fn psnr<T: Real>(a: &Image<T>, b: &Image<T>, region: &[(usize, usize)]) -> Result<f64> {
    check_region(a, b, region)?;
    let mse = region_mse(a, b, region);
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (1.0 / mse).log10())
}

/// Mean squared depth difference over the listed pixels (scene units squared).
pub fn depth_l2<T: Real>(a: &Image<T>, b: &Image<T>, region: &[(usize, usize)]) -> Result<f64> {
    check_region(a, b, region)?;
    Ok(region_mse(a, b, region))
}

/// Infinite PSNR cannot be represented in JSON numbers; emit null and leave
/// the table output to spell "inf".
fn serialize_db<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if v.is_finite() {
        s.serialize_f64(*v)
    } else {
        s.serialize_none()
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct FrameEval {
    pub frame: usize,
    pub bbox: BBox,
    /// PSNR inside the mask bounding box.
    #[serde(serialize_with = "serialize_db")]
    pub psnr_bbox: f64,
    /// Depth L2 inside the mask bounding box; absent without depth.
    pub depth_l2_bbox: Option<f64>,
    /// Depth L2 over the exact mask pixels; absent without depth.
    pub depth_l2_mask: Option<f64>,
}

/// Aggregates are unweighted means over frames; depth aggregates skip frames
/// without depth. `lpips` and `fid` are reserved for external tools.
#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub config: String,
    pub frames: Vec<FrameEval>,
    #[serde(serialize_with = "serialize_db")]
    pub psnr_bbox_mean: f64,
    pub depth_l2_bbox_mean: Option<f64>,
    pub depth_l2_mask_mean: Option<f64>,
    pub lpips: Option<f64>,
    pub fid: Option<f64>,
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let v: Vec<f64> = values.collect();
    if v.is_empty() {
        None
    } else {
        Some(v.iter().sum::<f64>() / v.len() as f64)
    }
}

/// One rendered/reference pair plus the removal mask defining the region.
pub struct EvalFrame<'a> {
    pub rendered: &'a Image<f32>,
    pub reference: &'a Image<f32>,
    pub mask: &'a Mask,
    pub rendered_depth: Option<&'a Image<f32>>,
    pub reference_depth: Option<&'a Image<f32>>,
}

pub fn evaluate(frames: &[EvalFrame], config: &str) -> Result<EvalReport> {
    if frames.is_empty() {
        return Err(Error::InvalidInput("nothing to evaluate".into()));
    }
    let mut rows = Vec::with_capacity(frames.len());
    for (i, f) in frames.iter().enumerate() {
        let bbox = mask_bbox(f.mask)?;
        let box_pixels = bbox.pixels();
        let psnr_bbox = psnr(f.rendered, f.reference, &box_pixels)?;
        let (depth_l2_bbox, depth_l2_mask) = match (f.rendered_depth, f.reference_depth) {
            (Some(d), Some(g)) => (
                Some(depth_l2(d, g, &box_pixels)?),
                Some(depth_l2(d, g, &f.mask.true_pixels())?),
            ),
            _ => (None, None),
        };
        rows.push(FrameEval {
            frame: i,
            bbox,
            psnr_bbox,
            depth_l2_bbox,
            depth_l2_mask,
        });
    }
    Ok(EvalReport {
        config: config.to_string(),
        psnr_bbox_mean: rows.iter().map(|r| r.psnr_bbox).sum::<f64>() / rows.len() as f64,
        depth_l2_bbox_mean: mean(rows.iter().filter_map(|r| r.depth_l2_bbox)),
        depth_l2_mask_mean: mean(rows.iter().filter_map(|r| r.depth_l2_mask)),
        frames: rows,
        lpips: None,
        fid: None,
    })
}

fn fmt_db(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.3}")
    } else {
        "inf".to_string()
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    match v {
        Some(v) => format!("{v:.6}"),
        None => "-".to_string(),
    }
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self)
            .map_err(|e| Error::InvalidInput(format!("report serialization: {e}")))
    }

    /// Human-readable table, one row per frame plus the aggregate line.
    pub fn to_table(&self) -> String {
        let mut s = String::from("frame  bbox(u0,v0,u1,v1)      psnr_bbox  depth_l2_bbox  depth_l2_mask\n");
        for r in &self.frames {
            s.push_str(&format!(
                "{:>5}  ({:>3},{:>3},{:>3},{:>3})      {:>9}  {:>13}  {:>13}\n",
                r.frame,
                r.bbox.u_min,
                r.bbox.v_min,
                r.bbox.u_max,
                r.bbox.v_max,
                fmt_db(r.psnr_bbox),
                fmt_opt(r.depth_l2_bbox),
                fmt_opt(r.depth_l2_mask),
            ));
        }
        s.push_str(&format!(
            " mean  {:>21}  {:>9}  {:>13}  {:>13}\n",
            "",
            fmt_db(self.psnr_bbox_mean),
            fmt_opt(self.depth_l2_bbox_mean),
            fmt_opt(self.depth_l2_mask_mean),
        ));
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(rng: &mut ChaCha8Rng, h: usize, w: usize, c: usize) -> Image<f64> {
        let mut img = Image::zeros(h, w, c);
        for v in img.data.iter_mut() {
            *v = rng.gen_range(0.0..1.0);
        }
        img
    }

    #[test]
    fn bbox_single_pixel() {
        let mut m = Mask::new_false(10, 10);
        m.set(3, 7, true);
        assert_eq!(
            mask_bbox(&m).unwrap(),
            BBox {
                u_min: 7,
                v_min: 3,
                u_max: 7,
                v_max: 3
            }
        );
    }

    #[test]
    fn bbox_full_mask() {
        let m = Mask::new_true(5, 9);
        assert_eq!(
            mask_bbox(&m).unwrap(),
            BBox {
                u_min: 0,
                v_min: 0,
                u_max: 8,
                v_max: 4
            }
        );
    }

    #[test]
    fn bbox_empty_mask_errors() {
        assert!(matches!(
            mask_bbox(&Mask::new_false(4, 4)).unwrap_err(),
            Error::EmptyMask
        ));
    }

    #[test]
    fn bbox_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let mut m = Mask::new_false(12, 17);
            for i in 0..m.data.len() {
                m.data[i] = rng.gen_bool(0.15);
            }
            if m.count_true() == 0 {
                continue;
            }
            let got = mask_bbox(&m).unwrap();
            let px = m.true_pixels();
            let want = BBox {
                u_min: px.iter().map(|p| p.1).min().unwrap(),
                v_min: px.iter().map(|p| p.0).min().unwrap(),
                u_max: px.iter().map(|p| p.1).max().unwrap(),
                v_max: px.iter().map(|p| p.0).max().unwrap(),
            };
            assert_eq!(got, want);
        }
    }

    #[test]
    fn psnr_identical_is_infinite() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = random_image(&mut rng, 6, 6, 3);
        let region: Vec<(usize, usize)> = vec![(0, 0), (5, 5), (2, 3)];
        assert!(psnr(&a, &a, &region).unwrap().is_infinite());
    }

    #[test]
    fn psnr_uniform_difference_is_20db() {
        let a = Image::<f64>::filled(4, 4, 3, 0.5);
        let b = Image::<f64>::filled(4, 4, 3, 0.6);
        let region: Vec<(usize, usize)> = (0..4).flat_map(|y| (0..4).map(move |x| (y, x))).collect();
        let p = psnr(&a, &b, &region).unwrap();
        assert!((p - 20.0).abs() < 1e-9, "psnr {p}");
    }

    #[test]
    fn psnr_matches_scalar_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = random_image(&mut rng, 7, 5, 3);
        let b = random_image(&mut rng, 7, 5, 3);
        let region: Vec<(usize, usize)> = vec![(1, 1), (6, 4), (3, 2), (0, 0)];
        let mut sum = 0.0;
        let mut n = 0;
        for &(y, x) in &region {
            for c in 0..3 {
                let d = a.at(y, x, c) - b.at(y, x, c);
                sum += d * d;
                n += 1;
            }
        }
        let want = 10.0 * (1.0 / (sum / n as f64)).log10();
        assert!((psnr(&a, &b, &region).unwrap() - want).abs() < 1e-9);
    }

    #[test]
    fn psnr_region_restriction() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = random_image(&mut rng, 6, 6, 3);
        let b = random_image(&mut rng, 6, 6, 3);
        let region: Vec<(usize, usize)> = vec![(1, 1), (2, 2)];
        let p1 = psnr(&a, &b, &region).unwrap();
        let mut b2 = b.clone();
        b2.set_pixel3(5, 5, [0.0, 1.0, 0.0]);
        assert_eq!(p1, psnr(&a, &b2, &region).unwrap());
    }

    #[test]
    fn psnr_shape_mismatch() {
        let a = Image::<f64>::zeros(4, 4, 3);
        let b = Image::<f64>::zeros(4, 5, 3);
        assert!(matches!(
            psnr(&a, &b, &[(0, 0)]).unwrap_err(),
            Error::ShapeMismatch(_)
        ));
    }

    #[test]
    fn depth_l2_constant_offset() {
        let a = Image::<f64>::filled(3, 3, 1, 2.0);
        let b = Image::<f64>::filled(3, 3, 1, 2.5);
        let region: Vec<(usize, usize)> = (0..3).flat_map(|y| (0..3).map(move |x| (y, x))).collect();
        assert!((depth_l2(&a, &b, &region).unwrap() - 0.25).abs() < 1e-12);
        assert_eq!(depth_l2(&a, &a, &region).unwrap(), 0.0);
    }

    #[test]
    fn depth_l2_matches_scalar_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let a = random_image(&mut rng, 5, 5, 1);
        let b = random_image(&mut rng, 5, 5, 1);
        let region: Vec<(usize, usize)> = vec![(0, 1), (4, 4), (2, 0)];
        let want: f64 = region
            .iter()
            .map(|&(y, x)| (a.at(y, x, 0) - b.at(y, x, 0)).powi(2))
            .sum::<f64>()
            / region.len() as f64;
        assert!((depth_l2(&a, &b, &region).unwrap() - want).abs() < 1e-9);
    }

    #[test]
    fn report_aggregates_are_means_and_json_serializes_infinity() {
        let img = Image::<f32>::filled(6, 6, 3, 0.5);
        let off = Image::<f32>::filled(6, 6, 3, 0.6);
        let depth = Image::<f32>::filled(6, 6, 1, 2.0);
        let depth_off = Image::<f32>::filled(6, 6, 1, 2.5);
        let mut mask = Mask::new_false(6, 6);
        mask.set(2, 2, true);
        mask.set(3, 4, true);
        let frames = vec![
            EvalFrame {
                rendered: &img,
                reference: &img,
                mask: &mask,
                rendered_depth: Some(&depth),
                reference_depth: Some(&depth),
            },
            EvalFrame {
                rendered: &img,
                reference: &off,
                mask: &mask,
                rendered_depth: Some(&depth),
                reference_depth: Some(&depth_off),
            },
        ];
        let report = evaluate(&frames, "test-config").unwrap();
        assert!(report.frames[0].psnr_bbox.is_infinite());
        assert!(report.psnr_bbox_mean.is_infinite());
        let d = (report.frames[0].depth_l2_bbox.unwrap()
            + report.frames[1].depth_l2_bbox.unwrap())
            / 2.0;
        assert_eq!(report.depth_l2_bbox_mean.unwrap(), d);
        let json = report.to_json().unwrap();
        let parsed: serde_json::Value = serde_json::from_str(&json).unwrap();
        assert!(parsed["frames"][0]["psnr_bbox"].is_null());
        // the 0.1 offset is stored at f32, so 20 dB only holds approximately
        assert!((parsed["frames"][1]["psnr_bbox"].as_f64().unwrap() - 20.0).abs() < 1e-4);
        assert!(parsed["lpips"].is_null() && parsed["fid"].is_null());
        let table = report.to_table();
        assert!(table.contains("inf"));
        assert!(table.lines().count() == 4);
    }
}
