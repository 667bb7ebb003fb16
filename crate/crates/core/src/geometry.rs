//! Depth back-projection and smoothed surface normals via differentiable
//! least-squares plane fitting over K nearest neighbours, plus the normal
//! image encoding consumed by the diffusion prior.

use crate::error::{Error, Result};
use crate::img::{Image, Mask};
use crate::math::{
    dot3, mat3_inverse, mat3_mul_v3, normalize3, scale3, sub3, sym3_eigenvalues,
    sym3_eigenvector, Real, M3, V3,
};
use crate::render::Camera;

/// Neighbour search window half-size (5x5 window).
const WINDOW_RADIUS: isize = 2;
/// Condition-number cutoff for A^T A.
const CONDITION_LIMIT: f64 = 1e8;

/// Back-project pixel (u, v) with depth z into the camera frame.
pub fn backproject<T: Real>(camera: &Camera, u: usize, v: usize, z: T) -> Result<V3<T>> {
    if z <= T::zero() {
        return Err(Error::InvalidDepth(format!(
            "depth must be positive, got {z:?}"
        )));
    }
    let d = camera.pixel_direction(u, v);
    Ok([T::fr(d[0]) * z, T::fr(d[1]) * z, z])
}

/// Local neighbourhood of back-projected points around a centre pixel.
#[derive(Debug, Clone)]
pub struct PointCloudPatch<T> {
    pub center: (usize, usize),
    pub points: Vec<V3<T>>,
}

/// Per-pixel unit normals with a validity mask.
#[derive(Debug, Clone)]
pub struct NormalMap<T> {
    pub normals: Image<T>,
    pub valid: Mask,
}

enum FitPath<T> {
    /// Normal-equations solution; differentiable with respect to depth.
    NormalEquations {
        m_inv: M3<T>,
        n_raw: V3<T>,
        raw_norm: T,
        sign: T,
    },
    /// Smallest-singular-vector fallback for planes near the origin.
    CenteredSvd,
}

struct PlaneFit<T> {
    normal: V3<T>,
    path: FitPath<T>,
}

fn fit_plane_impl<T: Real>(points: &[V3<T>], view_dir: V3<T>) -> Result<PlaneFit<T>> {
    let k = points.len();
    if k < 3 {
        return Err(Error::DegeneratePatch(format!(
            "plane fit needs at least 3 points, got {k}"
        )));
    }
    if points.iter().any(|p| p.iter().any(|v| !v.is_finite())) {
        return Err(Error::DegeneratePatch("non-finite patch point".into()));
    }
    // M = A^T A, a = A^T b with b = 1
    let mut m = [[T::zero(); 3]; 3];
    let mut a = [T::zero(); 3];
    for p in points {
        for i in 0..3 {
            a[i] = a[i] + p[i];
            for j in 0..3 {
                m[i][j] = m[i][j] + p[i] * p[j];
            }
        }
    }
    // fallback for patches where b = 1 is infeasible (plane through the
    // origin) or the normal equations are ill-conditioned: smallest
    // eigenvector of the centred covariance
    let fallback = || -> Result<PlaneFit<T>> {
        let mean = scale3(a, T::one() / T::fr(k as f64));
        let mut cov = [[T::zero(); 3]; 3];
        for p in points {
            let d = sub3(*p, mean);
            for i in 0..3 {
                for j in 0..3 {
                    cov[i][j] = cov[i][j] + d[i] * d[j];
                }
            }
        }
        let ce = sym3_eigenvalues(&cov);
        // points must span a plane: two clearly nonzero eigenvalues
        let l1 = ce[1].to_f64_();
        let l2 = ce[2].to_f64_();
        if l1 <= 0.0 || l2 / l1 > CONDITION_LIMIT {
            return Err(Error::DegeneratePatch(
                "points do not span a plane".into(),
            ));
        }
        let v = sym3_eigenvector(&cov, ce[0])
            .ok_or_else(|| Error::DegeneratePatch("degenerate covariance".into()))?;
        let sign = if dot3(v, view_dir) > T::zero() {
            -T::one()
        } else {
            T::one()
        };
        Ok(PlaneFit {
            normal: scale3(v, sign),
            path: FitPath::CenteredSvd,
        })
    };

    let eigs = sym3_eigenvalues(&m);
    let lmin = eigs[0].to_f64_();
    let lmax = eigs[2].to_f64_();
    if lmin <= 0.0 || lmax / lmin > CONDITION_LIMIT {
        return fallback();
    }
    let m_inv = match mat3_inverse(&m) {
        Some(inv) => inv,
        None => return fallback(),
    };
    let n_raw = mat3_mul_v3(&m_inv, a);

    // residual ||A n - b|| against ||b|| = sqrt(K): a large residual means the
    // plane passes near the origin and b = 1 is infeasible
    let mut res2 = T::zero();
    for p in points {
        let r = dot3(*p, n_raw) - T::one();
        res2 = res2 + r * r;
    }
    let b_norm2 = T::fr(k as f64);
    if res2 > T::fr(0.25) * b_norm2 {
        return fallback();
    }

    let raw_norm = crate::math::norm3(n_raw);
    if raw_norm.to_f64_() < 1e-12 {
        return Err(Error::DegeneratePatch("zero-length fitted normal".into()));
    }
    let unit = scale3(n_raw, T::one() / raw_norm);
    let sign = if dot3(unit, view_dir) > T::zero() {
        -T::one()
    } else {
        T::one()
    };
    Ok(PlaneFit {
        normal: scale3(unit, sign),
        path: FitPath::NormalEquations {
            m_inv,
            n_raw,
            raw_norm,
            sign,
        },
    })
}

/// Least-squares plane normal over a patch, camera-facing (n . view_dir < 0).
pub fn fit_plane_normal<T: Real>(patch: &PointCloudPatch<T>, view_dir: V3<T>) -> Result<V3<T>> {
    Ok(fit_plane_impl(&patch.points, view_dir)?.normal)
}

struct PixelFit<T> {
    /// Linear pixel indices of the selected neighbours.
    neighbor_idx: Vec<usize>,
    /// Camera-frame z=1 ray directions of the neighbours.
    dirs: Vec<V3<T>>,
    points: Vec<V3<T>>,
    fit: FitPath<T>,
}

/// Cache allowing [`normal_map_backprop`] to chain gradients back to depth.
pub struct NormalMapCache<T> {
    height: usize,
    width: usize,
    fits: Vec<Option<PixelFit<T>>>,
}

/// Per-pixel plane-fit normals from a depth image; `k` nearest neighbours in
/// 3D within a 5x5 pixel window.
pub fn normal_map_from_depth<T: Real>(
    depth: &Image<T>,
    camera: &Camera,
    k: usize,
) -> Result<NormalMap<T>> {
    Ok(normal_map_from_depth_cached(depth, camera, k)?.0)
}

pub fn normal_map_from_depth_cached<T: Real>(
    depth: &Image<T>,
    camera: &Camera,
    k: usize,
) -> Result<(NormalMap<T>, NormalMapCache<T>)> {
    if depth.channels != 1 {
        return Err(Error::ShapeMismatch(
            "depth image must have one channel".into(),
        ));
    }
    let (h, w) = (depth.height, depth.width);
    let mut normals = Image::zeros(h, w, 3);
    let mut valid = Mask::new_false(h, w);
    let mut fits: Vec<Option<PixelFit<T>>> = Vec::with_capacity(h * w);
    let depth_ok = |y: usize, x: usize| -> bool {
        let z = depth.at(y, x, 0);
        z > T::zero() && z.is_finite()
    };
    for y in 0..h {
        for x in 0..w {
            // default: flagged invalid, camera-facing placeholder
            normals.set_pixel3(y, x, [T::zero(), T::zero(), -T::one()]);
            if !depth_ok(y, x) {
                fits.push(None);
                continue;
            }
            let zc = depth.at(y, x, 0);
            let center = backproject(camera, x, y, zc)?;
            // candidate neighbours in the window (centre included)
            let mut cand: Vec<(T, usize, usize)> = Vec::new();
            for dy in -WINDOW_RADIUS..=WINDOW_RADIUS {
                for dx in -WINDOW_RADIUS..=WINDOW_RADIUS {
                    let (ny, nx) = (y as isize + dy, x as isize + dx);
                    if ny < 0 || nx < 0 || ny as usize >= h || nx as usize >= w {
                        continue;
                    }
                    let (ny, nx) = (ny as usize, nx as usize);
                    if !depth_ok(ny, nx) {
                        continue;
                    }
                    let p = backproject(camera, nx, ny, depth.at(ny, nx, 0))?;
                    let d = sub3(p, center);
                    cand.push((dot3(d, d), ny, nx));
                }
            }
            if cand.len() < 3 {
                fits.push(None);
                continue;
            }
            cand.sort_by(|a, b| {
                a.0.partial_cmp(&b.0)
                    .unwrap()
                    .then((a.1, a.2).cmp(&(b.1, b.2)))
            });
            cand.truncate(k);
            let mut dirs = Vec::with_capacity(cand.len());
            let mut points = Vec::with_capacity(cand.len());
            let mut neighbor_idx = Vec::with_capacity(cand.len());
            for &(_, ny, nx) in &cand {
                let d = camera.pixel_direction(nx, ny);
                let dir = [T::fr(d[0]), T::fr(d[1]), T::fr(d[2])];
                dirs.push(dir);
                points.push(scale3(dir, depth.at(ny, nx, 0)));
                neighbor_idx.push(ny * w + nx);
            }
            let vd = camera.pixel_direction(x, y);
            let view_dir = normalize3([T::fr(vd[0]), T::fr(vd[1]), T::fr(vd[2])]);
            match fit_plane_impl(&points, view_dir) {
                Ok(fit) => {
                    normals.set_pixel3(y, x, fit.normal);
                    valid.set(y, x, true);
                    fits.push(Some(PixelFit {
                        neighbor_idx,
                        dirs,
                        points,
                        fit: fit.path,
                    }));
                }
                Err(_) => fits.push(None),
            }
        }
    }
    Ok((
        NormalMap { normals, valid },
        NormalMapCache {
            height: h,
            width: w,
            fits,
        },
    ))
}

/// Reverse pass of [`normal_map_from_depth`]: scatters an upstream gradient
/// on the unit-normal image back onto the input depth. Invalid pixels and
/// fallback fits contribute zero (the neighbour selection pattern is fixed).
pub fn normal_map_backprop<T: Real>(
    cache: &NormalMapCache<T>,
    upstream: &Image<T>,
) -> Image<T> {
    let mut grad_depth = Image::zeros(cache.height, cache.width, 1);
    for (pix, fit) in cache.fits.iter().enumerate() {
        let Some(fit) = fit else { continue };
        let FitPath::NormalEquations {
            m_inv,
            n_raw,
            raw_norm,
            sign,
        } = &fit.fit
        else {
            continue;
        };
        let (y, x) = (pix / cache.width, pix % cache.width);
        let g = [
            upstream.at(y, x, 0),
            upstream.at(y, x, 1),
            upstream.at(y, x, 2),
        ];
        if g == [T::zero(); 3] {
            continue;
        }
        // through sign and normalization: g_raw = s (I - u u^T) g / |n_raw|
        let u = scale3(*n_raw, T::one() / *raw_norm);
        let gu = dot3(g, u);
        let g_proj = sub3(g, scale3(u, gu));
        let g_raw = scale3(g_proj, *sign / *raw_norm);
        let lhs = mat3_mul_v3(m_inv, g_raw); // M^{-1} g_raw (M symmetric)
        for j in 0..fit.points.len() {
            let r_j = T::one() - dot3(fit.points[j], *n_raw);
            let dn = sub3(
                scale3(fit.dirs[j], r_j),
                scale3(fit.points[j], dot3(fit.dirs[j], *n_raw)),
            );
            let idx = fit.neighbor_idx[j];
            grad_depth.data[idx] = grad_depth.data[idx] + dot3(lhs, dn);
        }
    }
    grad_depth
}

/// n -> (n+1)/2 per channel; invalid pixels map to (0.5, 0.5, 1.0).
pub fn encode_normal_image<T: Real>(map: &NormalMap<T>) -> Image<T> {
    let (h, w) = (map.normals.height, map.normals.width);
    let half = T::fr(0.5);
    let mut out = Image::zeros(h, w, 3);
    for y in 0..h {
        for x in 0..w {
            if map.valid.at(y, x) {
                let n = map.normals.pixel3(y, x);
                out.set_pixel3(
                    y,
                    x,
                    [
                        (n[0] + T::one()) * half,
                        (n[1] + T::one()) * half,
                        (n[2] + T::one()) * half,
                    ],
                );
            } else {
                out.set_pixel3(y, x, [half, half, T::one()]);
            }
        }
    }
    out
}

/// Inverse of [`encode_normal_image`] on valid pixels: c -> 2c - 1.
pub fn decode_normal_image<T: Real>(img: &Image<T>) -> Image<T> {
    let mut out = img.clone();
    let two = T::fr(2.0);
    for v in out.data.iter_mut() {
        *v = two * *v - T::one();
    }
    out
}

/// Gradient of [`encode_normal_image`]: upstream on the encoded image mapped
/// back to the unit normals; invalid pixels are constants and contribute zero.
pub fn encode_normal_backprop<T: Real>(map: &NormalMap<T>, upstream: &Image<T>) -> Image<T> {
    let mut out = Image::zeros(upstream.height, upstream.width, 3);
    let half = T::fr(0.5);
    for y in 0..upstream.height {
        for x in 0..upstream.width {
            if map.valid.at(y, x) {
                for c in 0..3 {
                    out.set(y, x, c, upstream.at(y, x, c) * half);
                }
            }
        }
    }
    out
}

/// Per-pixel finite-difference (cross-product) normals; the rough baseline
/// the plane fit is compared against.
pub fn cross_product_normals<T: Real>(depth: &Image<T>, camera: &Camera) -> NormalMap<T> {
    let (h, w) = (depth.height, depth.width);
    let mut normals = Image::zeros(h, w, 3);
    let mut valid = Mask::new_false(h, w);
    for y in 0..h {
        for x in 0..w {
            normals.set_pixel3(y, x, [T::zero(), T::zero(), -T::one()]);
            if x + 1 >= w || y + 1 >= h {
                continue;
            }
            let z = depth.at(y, x, 0);
            let zr = depth.at(y, x + 1, 0);
            let zd = depth.at(y + 1, x, 0);
            if z <= T::zero() || zr <= T::zero() || zd <= T::zero() {
                continue;
            }
            let p = backproject(camera, x, y, z).unwrap();
            let pr = backproject(camera, x + 1, y, zr).unwrap();
            let pd = backproject(camera, x, y + 1, zd).unwrap();
            let n = crate::math::cross3(sub3(pr, p), sub3(pd, p));
            let len = crate::math::norm3(n);
            if len.to_f64_() < 1e-12 {
                continue;
            }
            let mut n = scale3(n, T::one() / len);
            let vd = camera.pixel_direction(x, y);
            let view = normalize3([T::fr(vd[0]), T::fr(vd[1]), T::fr(vd[2])]);
            if dot3(n, view) > T::zero() {
                n = scale3(n, -T::one());
            }
            normals.set_pixel3(y, x, n);
            valid.set(y, x, true);
        }
    }
    NormalMap { normals, valid }
}

/// Mean angular error in radians over pixels valid in both maps.
pub fn mean_angular_error<T: Real>(a: &NormalMap<T>, reference: &Image<T>) -> f64 {
    let mut sum = 0.0;
    let mut count = 0usize;
    for y in 0..a.normals.height {
        for x in 0..a.normals.width {
            if !a.valid.at(y, x) {
                continue;
            }
            let na = a.normals.pixel3(y, x);
            let nr = reference.pixel3(y, x);
            let cos = dot3(na, nr).to_f64_().clamp(-1.0, 1.0);
            sum += cos.acos();
            count += 1;
        }
    }
    if count == 0 {
        0.0
    } else {
        sum / count as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::v3;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn test_camera(w: usize, h: usize) -> Camera {
        Camera {
            fx: 12.0,
            fy: 12.0,
            cx: w as f64 / 2.0,
            cy: h as f64 / 2.0,
            width: w,
            height: h,
            camera_to_world: [
                [1.0, 0.0, 0.0, 0.0],
                [0.0, 1.0, 0.0, 0.0],
                [0.0, 0.0, 1.0, 0.0],
                [0.0, 0.0, 0.0, 1.0],
            ],
            near: 0.1,
            far: 10.0,
        }
    }

    #[test]
    fn backproject_principal_point() {
        let cam = test_camera(8, 8);
        // pixel centre at the principal point: u + 0.5 = cx
        let p: V3<f64> = backproject(&cam, 3, 3, 2.0).unwrap();
        // (3 + 0.5 - 4) * 2 / 12
        assert!((p[0] + 1.0 / 12.0).abs() < 1e-12);
        assert!((p[2] - 2.0).abs() < 1e-12);
        let cam2 = Camera {
            cx: 3.5,
            cy: 3.5,
            ..cam
        };
        let p: V3<f64> = backproject(&cam2, 3, 3, 2.0).unwrap();
        assert_eq!(p, [0.0, 0.0, 2.0]);
    }

    #[test]
    fn backproject_unit_tangent() {
        let mut cam = test_camera(64, 64);
        cam.cx = 32.5;
        // u + 0.5 - cx = fx at z = 1 gives x = 1
        let u = (cam.cx + cam.fx - 0.5) as usize;
        let p: V3<f64> = backproject(&cam, u, 5, 1.0).unwrap();
        assert!((p[0] - 1.0).abs() < 1e-12);
        assert!((p[2] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn backproject_matches_intrinsics_matrix_oracle() {
        let cam = test_camera(20, 15);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let u = rng.gen_range(0..cam.width);
            let v = rng.gen_range(0..cam.height);
            let z = rng.gen_range(0.5..4.0);
            let p: V3<f64> = backproject(&cam, u, v, z).unwrap();
            // oracle: z * K^{-1} (u+0.5, v+0.5, 1)
            let kinv = [
                [1.0 / cam.fx, 0.0, -cam.cx / cam.fx],
                [0.0, 1.0 / cam.fy, -cam.cy / cam.fy],
                [0.0, 0.0, 1.0],
            ];
            let hom = [u as f64 + 0.5, v as f64 + 0.5, 1.0];
            for i in 0..3 {
                let e = z * (kinv[i][0] * hom[0] + kinv[i][1] * hom[1] + kinv[i][2] * hom[2]);
                assert!((p[i] - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn backproject_rejects_nonpositive_depth() {
        let cam = test_camera(8, 8);
        assert!(matches!(
            backproject(&cam, 1, 1, 0.0f64),
            Err(Error::InvalidDepth(_))
        ));
    }

    fn grid_patch_on_plane(f: impl Fn(f64, f64) -> f64) -> PointCloudPatch<f64> {
        let mut points = Vec::new();
        for i in 0..3 {
            for j in 0..3 {
                let x = (i as f64 - 1.0) * 0.1;
                let y = (j as f64 - 1.0) * 0.1;
                points.push([x, y, f(x, y)]);
            }
        }
        PointCloudPatch {
            center: (1, 1),
            points,
        }
    }

    #[test]
    fn frontoparallel_plane_normal() {
        let patch = grid_patch_on_plane(|_, _| 2.0);
        let n = fit_plane_normal(&patch, v3(0.0, 0.0, 1.0)).unwrap();
        assert!((n[0]).abs() < 1e-12 && (n[1]).abs() < 1e-12);
        assert!((n[2] + 1.0).abs() < 1e-12);
    }

    #[test]
    fn oblique_plane_matches_svd_oracle() {
        // plane x + y + z = 3
        let patch = grid_patch_on_plane(|x, y| 3.0 - x - y);
        let n = fit_plane_normal(&patch, v3(0.0, 0.0, 1.0)).unwrap();
        // oracle: smallest singular vector of mean-centred points
        let mean = patch
            .points
            .iter()
            .fold([0.0; 3], |acc, p| crate::math::add3(acc, *p))
            .map(|v| v / 9.0);
        let mut cov = [[0.0; 3]; 3];
        for p in &patch.points {
            let d = sub3(*p, mean);
            for i in 0..3 {
                for j in 0..3 {
                    cov[i][j] += d[i] * d[j];
                }
            }
        }
        let eigs = sym3_eigenvalues(&cov);
        let v = sym3_eigenvector(&cov, eigs[0]).unwrap();
        let align = dot3(n, v).abs();
        assert!((align - 1.0).abs() < 1e-10);
        let s = 1.0 / 3.0f64.sqrt();
        assert!((n[0].abs() - s).abs() < 1e-10);
        // faces the camera
        assert!(n[2] < 0.0);
    }

    #[test]
    fn collinear_points_are_degenerate() {
        let points: Vec<V3<f64>> = (0..9).map(|i| [i as f64 * 0.1, 0.0, 1.0]).collect();
        let patch = PointCloudPatch {
            center: (0, 0),
            points,
        };
        assert!(matches!(
            fit_plane_normal(&patch, v3(0.0, 0.0, 1.0)),
            Err(Error::DegeneratePatch(_))
        ));
    }

    #[test]
    fn plane_through_origin_uses_fallback() {
        // plane z = x: passes through the origin, b = 1 infeasible
        let patch = grid_patch_on_plane(|x, _| x);
        let n = fit_plane_normal(&patch, v3(0.0, 0.0, 1.0)).unwrap();
        let expected = normalize3(v3(1.0, 0.0, -1.0));
        let align = dot3(n, expected).abs();
        assert!((align - 1.0).abs() < 1e-9, "normal {n:?}");
    }

    #[test]
    fn rotation_equivariance() {
        let patch = grid_patch_on_plane(|x, y| 2.0 - 0.3 * x + 0.2 * y);
        let n0 = fit_plane_normal(&patch, v3(0.0, 0.0, 1.0)).unwrap();
        // rotate points about z by 30 degrees
        let (c, s) = (30.0f64.to_radians().cos(), 30.0f64.to_radians().sin());
        let rot = |p: V3<f64>| -> V3<f64> { [c * p[0] - s * p[1], s * p[0] + c * p[1], p[2]] };
        let rotated = PointCloudPatch {
            center: patch.center,
            points: patch.points.iter().map(|&p| rot(p)).collect(),
        };
        let n1 = fit_plane_normal(&rotated, v3(0.0, 0.0, 1.0)).unwrap();
        let expect = rot(n0);
        for k in 0..3 {
            assert!((n1[k] - expect[k]).abs() < 1e-6);
        }
    }

    #[test]
    fn exactness_on_random_planes() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..100 {
            let a = rng.gen_range(-0.5..0.5);
            let b = rng.gen_range(-0.5..0.5);
            let d = rng.gen_range(1.0..3.0f64); // plane z = a x + b y + d, misses origin
            let patch = grid_patch_on_plane(|x, y| a * x + b * y + d);
            let n = fit_plane_normal(&patch, v3(0.0, 0.0, 1.0)).unwrap();
            let truth: V3<f64> = normalize3(v3(a, b, -1.0));
            for k in 0..3 {
                assert!((n[k] - truth[k]).abs() < 1e-6, "plane ({a},{b},{d}): {n:?}");
            }
        }
    }

    fn constant_depth(h: usize, w: usize, z: f64) -> Image<f64> {
        Image::filled(h, w, 1, z)
    }

    #[test]
    fn constant_depth_gives_frontoparallel_normals() {
        let cam = test_camera(8, 8);
        let depth = constant_depth(8, 8, 2.0);
        let map = normal_map_from_depth(&depth, &cam, 9).unwrap();
        for y in 0..8 {
            for x in 0..8 {
                assert!(map.valid.at(y, x));
                let n = map.normals.pixel3(y, x);
                assert!((n[2] + 1.0).abs() < 1e-9, "pixel ({y},{x}): {n:?}");
            }
        }
    }

    /// Depth of the plane n . p = dist seen through the camera at pixel (u,v).
    fn plane_depth(cam: &Camera, n: V3<f64>, dist: f64) -> Image<f64> {
        let mut img = Image::zeros(cam.height, cam.width, 1);
        for v in 0..cam.height {
            for u in 0..cam.width {
                let d = cam.pixel_direction(u, v);
                img.set(v, u, 0, dist / dot3(n, d));
            }
        }
        img
    }

    #[test]
    fn ramp_depth_matches_analytic_plane_normal() {
        let cam = test_camera(10, 10);
        let n_plane = normalize3(v3(0.25, -0.1, 1.0));
        let depth = plane_depth(&cam, n_plane, 2.0);
        let map = normal_map_from_depth(&depth, &cam, 9).unwrap();
        // camera-facing version of the plane normal
        let expect = scale3(n_plane, -1.0);
        for y in 0..10 {
            for x in 0..10 {
                assert!(map.valid.at(y, x));
                let n = map.normals.pixel3(y, x);
                for k in 0..3 {
                    assert!((n[k] - expect[k]).abs() < 1e-4, "({y},{x}): {n:?}");
                }
            }
        }
    }

    #[test]
    fn plane_fit_beats_cross_product_under_noise() {
        let cam = test_camera(24, 24);
        let n_plane = normalize3(v3(0.2, 0.15, 1.0));
        let clean = plane_depth(&cam, n_plane, 2.0);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut noisy = clean.clone();
        for v in noisy.data.iter_mut() {
            *v *= 1.0 + rng.gen_range(-0.01..0.01);
        }
        let truth_map = normal_map_from_depth(&clean, &cam, 9).unwrap();
        let fit = normal_map_from_depth(&noisy, &cam, 9).unwrap();
        let fd = cross_product_normals(&noisy, &cam);
        let err_fit = mean_angular_error(&fit, &truth_map.normals);
        let err_fd = mean_angular_error(&fd, &truth_map.normals);
        assert!(
            err_fit < err_fd,
            "plane fit {err_fit} should beat cross product {err_fd}"
        );
    }

    #[test]
    fn normal_map_gradient_matches_finite_differences() {
        let cam = test_camera(8, 8);
        let mut depth = Image::zeros(8, 8, 1);
        for y in 0..8 {
            for x in 0..8 {
                // smooth, well-separated depth surface
                depth.set(
                    y,
                    x,
                    0,
                    2.0 + 0.08 * (x as f64 * 0.7).sin() + 0.06 * (y as f64 * 0.9).cos(),
                );
            }
        }
        // scalar function: weighted sum of all normal components
        let mut weights = Image::zeros(8, 8, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for v in weights.data.iter_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
        let scalar = |d: &Image<f64>| -> f64 {
            let m = normal_map_from_depth(d, &cam, 9).unwrap();
            m.normals
                .data
                .iter()
                .zip(weights.data.iter())
                .map(|(a, b)| a * b)
                .sum()
        };
        let (_, cache) = normal_map_from_depth_cached(&depth, &cam, 9).unwrap();
        let grad = normal_map_backprop(&cache, &weights);
        let mut checked = 0;
        for _ in 0..30 {
            let y = rng.gen_range(0..8);
            let x = rng.gen_range(0..8);
            let h = 1e-6;
            let mut dp = depth.clone();
            dp.set(y, x, 0, depth.at(y, x, 0) + h);
            let mut dm = depth.clone();
            dm.set(y, x, 0, depth.at(y, x, 0) - h);
            let fd = (scalar(&dp) - scalar(&dm)) / (2.0 * h);
            let g = grad.at(y, x, 0);
            let denom = fd.abs().max(g.abs()).max(1e-6);
            assert!(
                (fd - g).abs() / denom < 1e-3,
                "pixel ({y},{x}): analytic {g} vs fd {fd}"
            );
            checked += 1;
        }
        assert!(checked > 0);
    }

    #[test]
    fn encode_decode_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut map = NormalMap {
            normals: Image::<f64>::zeros(10, 100, 3),
            valid: Mask::new_true(10, 100),
        };
        for y in 0..10 {
            for x in 0..100 {
                let n = normalize3(v3(
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0f64) + 1e-3,
                ));
                map.normals.set_pixel3(y, x, n);
            }
        }
        let enc = encode_normal_image(&map);
        let dec = decode_normal_image(&enc);
        for (a, b) in map.normals.data.iter().zip(dec.data.iter()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn encode_known_values() {
        let mut map = NormalMap {
            normals: Image::zeros(1, 3, 3),
            valid: Mask::new_true(1, 3),
        };
        map.normals.set_pixel3(0, 0, [0.0, 0.0, -1.0]);
        map.normals.set_pixel3(0, 1, [1.0, 0.0, 0.0]);
        map.valid.set(0, 2, false);
        let enc = encode_normal_image(&map);
        assert_eq!(enc.pixel3(0, 0), [0.5, 0.5, 0.0]);
        assert_eq!(enc.pixel3(0, 1), [1.0, 0.5, 0.5]);
        assert_eq!(enc.pixel3(0, 2), [0.5, 0.5, 1.0]);
    }
}
