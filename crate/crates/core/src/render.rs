//! Ray generation, stratified sampling, and differentiable volumetric
//! integration (color, expected depth, opacity per pixel).

use crate::error::{Error, Result};
use crate::field::{EvalCache, RadianceField};
use crate::img::Image;
use crate::math::{mix_seed, normalize3, Real, V3};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Pinhole camera, x right / y down / z forward, looking along +z.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    /// Row-major rigid transform from camera frame to world frame.
    pub camera_to_world: [[f64; 4]; 4],
    pub near: f64,
    pub far: f64,
}

impl Camera {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.near && self.near < self.far) {
            return Err(Error::InvalidInput(format!(
                "camera bounds must satisfy 0 < near < far, got {} .. {}",
                self.near, self.far
            )));
        }
        let m = &self.camera_to_world;
        for i in 0..3 {
            for j in 0..3 {
                let mut dot = 0.0;
                for k in 0..3 {
                    dot += m[k][i] * m[k][j];
                }
                let expect = if i == j { 1.0 } else { 0.0 };
                if (dot - expect).abs() > 1e-5 {
                    return Err(Error::InvalidInput(
                        "camera rotation block is not orthonormal".into(),
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn center(&self) -> V3<f64> {
        [
            self.camera_to_world[0][3],
            self.camera_to_world[1][3],
            self.camera_to_world[2][3],
        ]
    }

    /// World-space ray through the centre of pixel (u, v).
    pub fn generate_ray(&self, u: usize, v: usize) -> Result<(V3<f64>, V3<f64>)> {
        if u >= self.width || v >= self.height {
            return Err(Error::InvalidInput(format!(
                "pixel ({u}, {v}) outside {}x{} image",
                self.width, self.height
            )));
        }
        let dir_cam = [
            (u as f64 + 0.5 - self.cx) / self.fx,
            (v as f64 + 0.5 - self.cy) / self.fy,
            1.0,
        ];
        let m = &self.camera_to_world;
        let mut dir_world = [0.0; 3];
        for i in 0..3 {
            dir_world[i] =
                m[i][0] * dir_cam[0] + m[i][1] * dir_cam[1] + m[i][2] * dir_cam[2];
        }
        Ok((self.center(), normalize3(dir_world)))
    }

    /// Camera-frame direction through pixel (u, v), unnormalized z = 1 form.
    pub fn pixel_direction(&self, u: usize, v: usize) -> V3<f64> {
        [
            (u as f64 + 0.5 - self.cx) / self.fx,
            (v as f64 + 0.5 - self.cy) / self.fy,
            1.0,
        ]
    }

    /// Transform a camera-frame point to world.
    pub fn to_world(&self, p: V3<f64>) -> V3<f64> {
        let m = &self.camera_to_world;
        let mut out = [0.0; 3];
        for i in 0..3 {
            out[i] = m[i][0] * p[0] + m[i][1] * p[1] + m[i][2] * p[2] + m[i][3];
        }
        out
    }

    /// Transform a world point to the camera frame (inverse rigid transform).
    pub fn to_camera(&self, p: V3<f64>) -> V3<f64> {
        let m = &self.camera_to_world;
        let t = [p[0] - m[0][3], p[1] - m[1][3], p[2] - m[2][3]];
        let mut out = [0.0; 3];
        for i in 0..3 {
            // rotation transpose
            out[i] = m[0][i] * t[0] + m[1][i] * t[1] + m[2][i] * t[2];
        }
        out
    }
}

/// Sample depths along [t_n, t_f]: stratified draws one uniform sample per
/// equal-width bin, otherwise bin midpoints.
pub fn sample_ray<T: Real>(
    t_near: f64,
    t_far: f64,
    n: usize,
    stratified: bool,
    rng: &mut impl Rng,
) -> Vec<T> {
    debug_assert!(n >= 1);
    let bin = (t_far - t_near) / n as f64;
    (0..n)
        .map(|i| {
            let u = if stratified { rng.gen_range(0.0..1.0) } else { 0.5 };
            T::fr(t_near + (i as f64 + u) * bin)
        })
        .collect()
}

/// Per-ray sample set carrying everything the integrator and its reverse
/// pass need.
#[derive(Debug, Clone)]
pub struct RaySamples<T> {
    pub t: Vec<T>,
    pub deltas: Vec<T>,
    pub colors: Vec<V3<T>>,
    pub sigmas: Vec<T>,
    pub t_near: T,
    pub t_far: T,
}

impl<T: Real> RaySamples<T> {
    pub fn new(
        t: Vec<T>,
        colors: Vec<V3<T>>,
        sigmas: Vec<T>,
        t_near: T,
        t_far: T,
    ) -> Self {
        let mut deltas = Vec::with_capacity(t.len());
        let mut prev = t_near;
        for &ti in &t {
            deltas.push(ti - prev);
            prev = ti;
        }
        RaySamples {
            t,
            deltas,
            colors,
            sigmas,
            t_near,
            t_far,
        }
    }
}

/// Forward integration result plus cached weights for the reverse pass.
#[derive(Debug, Clone)]
pub struct RayRadiance<T> {
    pub color: V3<T>,
    pub depth: T,
    pub opacity: T,
    pub weights: Vec<T>,
    /// Transmittance T_i before each sample; trailing entry is T_{N+1}.
    pub transmittance: Vec<T>,
}

/// w_i = T_i (1 - exp(-sigma_i delta_i)); color/depth/opacity composited over
/// the samples, background (color `bg`, depth t_f) with weight T_{N+1}.
pub fn integrate_ray<T: Real>(samples: &RaySamples<T>, background: V3<T>) -> RayRadiance<T> {
    let n = samples.t.len();
    let mut weights = Vec::with_capacity(n);
    let mut transmittance = Vec::with_capacity(n + 1);
    let mut trans = T::one();
    let mut color = [T::zero(); 3];
    let mut depth = T::zero();
    let mut opacity = T::zero();
    for i in 0..n {
        transmittance.push(trans);
        let alpha = T::one() - (-samples.sigmas[i] * samples.deltas[i]).exp();
        let w = trans * alpha;
        weights.push(w);
        for k in 0..3 {
            color[k] = color[k] + samples.colors[i][k] * w;
        }
        depth = depth + samples.t[i] * w;
        opacity = opacity + w;
        trans = trans * (T::one() - alpha);
    }
    transmittance.push(trans);
    for k in 0..3 {
        color[k] = color[k] + background[k] * trans;
    }
    depth = depth + samples.t_far * trans;
    RayRadiance {
        color,
        depth,
        opacity,
        weights,
        transmittance,
    }
}

/// Upstream gradient with respect to the integrator outputs.
#[derive(Debug, Clone, Copy)]
pub struct RayUpstream<T> {
    pub color: V3<T>,
    pub depth: T,
    pub opacity: T,
}

impl<T: Real> RayUpstream<T> {
    pub fn zero() -> Self {
        RayUpstream {
            color: [T::zero(); 3],
            depth: T::zero(),
            opacity: T::zero(),
        }
    }

    pub fn color_only(c: V3<T>) -> Self {
        RayUpstream {
            color: c,
            depth: T::zero(),
            opacity: T::zero(),
        }
    }

    pub fn depth_only(d: T) -> Self {
        RayUpstream {
            color: [T::zero(); 3],
            depth: d,
            opacity: T::zero(),
        }
    }
}

/// Exact reverse-mode derivatives of [`integrate_ray`], returning gradients
/// with respect to every per-sample color and density.
pub fn backprop_ray<T: Real>(
    samples: &RaySamples<T>,
    radiance: &RayRadiance<T>,
    upstream: &RayUpstream<T>,
    background: V3<T>,
) -> (Vec<V3<T>>, Vec<T>) {
    let n = samples.t.len();
    let mut dcolors = Vec::with_capacity(n);
    // u_i = d(outputs)/d(w_i) contracted with the upstream
    let mut u = Vec::with_capacity(n);
    for i in 0..n {
        let w = radiance.weights[i];
        dcolors.push([
            upstream.color[0] * w,
            upstream.color[1] * w,
            upstream.color[2] * w,
        ]);
        let mut ui = upstream.depth * samples.t[i] + upstream.opacity;
        for k in 0..3 {
            ui = ui + upstream.color[k] * samples.colors[i][k];
        }
        u.push(ui);
    }
    // background term contracted with the upstream
    let mut v = upstream.depth * samples.t_far;
    for k in 0..3 {
        v = v + upstream.color[k] * background[k];
    }
    let t_rem = radiance.transmittance[n];
    // suffix sums of u_i w_i for the transmittance chain
    let mut dsigmas = vec![T::zero(); n];
    let mut suffix = T::zero();
    for k in (0..n).rev() {
        let t_next = radiance.transmittance[k + 1];
        dsigmas[k] = samples.deltas[k] * (u[k] * t_next - suffix - v * t_rem);
        suffix = suffix + u[k] * radiance.weights[k];
    }
    (dcolors, dsigmas)
}

/// Per-pixel outputs of a full view render.
#[derive(Debug, Clone)]
pub struct RenderedView<T> {
    pub color: Image<T>,
    pub depth: Image<T>,
    pub opacity: Image<T>,
    pub normals: Option<Image<T>>,
}

/// Cached per-pixel state retained when the render will be backpropagated.
pub struct PixelCache<T> {
    pub samples: RaySamples<T>,
    pub radiance: RayRadiance<T>,
    pub field_caches: Vec<EvalCache<T>>,
}

#[derive(Debug, Clone, Copy)]
pub struct RenderOptions<T> {
    pub samples_per_ray: usize,
    pub stratified: bool,
    pub seed: u64,
    pub background: V3<T>,
}

impl<T: Real> Default for RenderOptions<T> {
    fn default() -> Self {
        RenderOptions {
            samples_per_ray: 64,
            stratified: true,
            seed: 0,
            background: [T::zero(); 3],
        }
    }
}

/// Renders the listed pixels, returning per-pixel radiance and caches.
/// RNG streams are keyed by (seed, pixel index) so the result is independent
/// of any parallel partitioning.
pub fn render_pixels<T: Real>(
    field: &RadianceField<T>,
    camera: &Camera,
    pixels: &[(usize, usize)],
    opts: &RenderOptions<T>,
) -> Result<Vec<PixelCache<T>>> {
    pixels
        .par_iter()
        .map(|&(y, x)| render_one_pixel(field, camera, y, x, opts))
        .collect()
}

fn render_one_pixel<T: Real>(
    field: &RadianceField<T>,
    camera: &Camera,
    y: usize,
    x: usize,
    opts: &RenderOptions<T>,
) -> Result<PixelCache<T>> {
    let (origin, dir) = camera.generate_ray(x, y)?;
    let pixel_index = (y * camera.width + x) as u64;
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[opts.seed, pixel_index]));
    let ts: Vec<T> = sample_ray(
        camera.near,
        camera.far,
        opts.samples_per_ray,
        opts.stratified,
        &mut rng,
    );
    let origin_t: V3<T> = [T::fr(origin[0]), T::fr(origin[1]), T::fr(origin[2])];
    let dir_t: V3<T> = [T::fr(dir[0]), T::fr(dir[1]), T::fr(dir[2])];
    let mut colors = Vec::with_capacity(ts.len());
    let mut sigmas = Vec::with_capacity(ts.len());
    let mut field_caches = Vec::with_capacity(ts.len());
    for &t in &ts {
        let p = [
            origin_t[0] + dir_t[0] * t,
            origin_t[1] + dir_t[1] * t,
            origin_t[2] + dir_t[2] * t,
        ];
        let (sample, cache) = field.eval_cached(p, dir_t)?;
        colors.push(sample.color);
        sigmas.push(sample.density);
        field_caches.push(cache);
    }
    let samples = RaySamples::new(ts, colors, sigmas, T::fr(camera.near), T::fr(camera.far));
    let radiance = integrate_ray(&samples, opts.background);
    Ok(PixelCache {
        samples,
        radiance,
        field_caches,
    })
}

/// Rendered depth is distance along the unit ray direction; plane fitting
/// consumes camera-frame z. The factor 1/|K^{-1}(u+0.5, v+0.5, 1)| is a
/// per-pixel constant, so its gradient is the same scale.
pub fn range_to_zdepth<T: Real>(depth: &Image<T>, camera: &Camera) -> Image<T> {
    let mut out = depth.clone();
    for y in 0..depth.height {
        for x in 0..depth.width {
            let d = camera.pixel_direction(x, y);
            let norm = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
            out.set(y, x, 0, depth.at(y, x, 0) / T::fr(norm));
        }
    }
    out
}

/// Gradient companion of [`range_to_zdepth`]: maps an upstream gradient on
/// z-depth back to range depth.
pub fn range_to_zdepth_backprop<T: Real>(upstream: &Image<T>, camera: &Camera) -> Image<T> {
    range_to_zdepth(upstream, camera)
}

/// Full-view render. Rows are processed in parallel; output is deterministic
/// given the seed.
pub fn render_view<T: Real>(
    field: &RadianceField<T>,
    camera: &Camera,
    opts: &RenderOptions<T>,
    with_normals: bool,
) -> Result<RenderedView<T>> {
    camera.validate()?;
    let rows: Vec<Result<Vec<PixelCache<T>>>> = (0..camera.height)
        .into_par_iter()
        .map(|y| {
            (0..camera.width)
                .map(|x| render_one_pixel(field, camera, y, x, opts))
                .collect()
        })
        .collect();
    let mut color = Image::zeros(camera.height, camera.width, 3);
    let mut depth = Image::zeros(camera.height, camera.width, 1);
    let mut opacity = Image::zeros(camera.height, camera.width, 1);
    for (y, row) in rows.into_iter().enumerate() {
        for (x, px) in row?.into_iter().enumerate() {
            color.set_pixel3(y, x, px.radiance.color);
            depth.set(y, x, 0, px.radiance.depth);
            opacity.set(y, x, 0, px.radiance.opacity);
        }
    }
    let normals = if with_normals {
        let z = range_to_zdepth(&depth, camera);
        let map = crate::geometry::normal_map_from_depth(&z, camera, 9)?;
        Some(map.normals.clone())
    } else {
        None
    };
    Ok(RenderedView {
        color,
        depth,
        opacity,
        normals,
    })
}

/// As [`render_view`] but retains per-pixel caches for backprop.
pub fn render_view_cached<T: Real>(
    field: &RadianceField<T>,
    camera: &Camera,
    opts: &RenderOptions<T>,
) -> Result<(RenderedView<T>, Vec<PixelCache<T>>)> {
    camera.validate()?;
    let pixels: Vec<(usize, usize)> = (0..camera.height)
        .flat_map(|y| (0..camera.width).map(move |x| (y, x)))
        .collect();
    let caches = render_pixels(field, camera, &pixels, opts)?;
    let mut color = Image::zeros(camera.height, camera.width, 3);
    let mut depth = Image::zeros(camera.height, camera.width, 1);
    let mut opacity = Image::zeros(camera.height, camera.width, 1);
    for (&(y, x), px) in pixels.iter().zip(caches.iter()) {
        color.set_pixel3(y, x, px.radiance.color);
        depth.set(y, x, 0, px.radiance.depth);
        opacity.set(y, x, 0, px.radiance.opacity);
    }
    Ok((
        RenderedView {
            color,
            depth,
            opacity,
            normals: None,
        },
        caches,
    ))
}

/// Chains a per-pixel upstream through the integrator and the field,
/// accumulating into `grad_theta`.
pub fn backprop_pixel<T: Real>(
    field: &RadianceField<T>,
    cache: &PixelCache<T>,
    upstream: &RayUpstream<T>,
    background: V3<T>,
    grad_theta: &mut [T],
) {
    let (dcolors, dsigmas) = backprop_ray(&cache.samples, &cache.radiance, upstream, background);
    for i in 0..cache.field_caches.len() {
        field.backprop(&cache.field_caches[i], dcolors[i], dsigmas[i], grad_theta);
    }
}
