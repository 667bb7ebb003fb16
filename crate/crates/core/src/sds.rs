//! Score-distillation gradient estimators: single-view appearance SDS,
//! geometry SDS on plane-fit normal images, the depth-SDS ablation path, and
//! multi-view SDS with a shared timestep. Gradients never flow through the
//! noise predictor; reverse mode runs only through rendering and geometry.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::field::RadianceField;
use crate::geometry::{
    encode_normal_backprop, encode_normal_image, normal_map_backprop, normal_map_from_depth_cached,
    NormalMap, NormalMapCache,
};
use crate::img::{resample_bilinear, resample_bilinear_backprop, resample_mask, Image, Mask};
use crate::math::{mix_seed, Real};
use crate::prior::{add_noise, predict_noise_cfg, DiffusionSchedule, NoisePredictor, PriorRequest};
use crate::render::{
    backprop_pixel, range_to_zdepth, range_to_zdepth_backprop, render_pixels, render_view_cached,
    Camera, PixelCache, RayUpstream, RenderOptions,
};
use crate::scene::SceneFrame;

/// Purpose tag separating render-RNG streams from noise-RNG streams.
const RENDER_STREAM: u64 = 0x52454e44;

/// Pixel-space SDS gradient together with the sampling state that produced it.
#[derive(Debug, Clone)]
pub struct SdsGradient<T> {
    /// d(SDS objective)/dx, zero at every pixel where the mask is false.
    pub grad: Image<T>,
    pub t: f64,
    pub noise_seed: u64,
}

/// Standard-normal image drawn from a dedicated seeded stream.
pub fn draw_noise<T: Real>(height: usize, width: usize, channels: usize, seed: u64) -> Image<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut eps = Image::zeros(height, width, channels);
    for v in eps.data.iter_mut() {
        let s: f64 = StandardNormal.sample(&mut rng);
        *v = T::fr(s);
    }
    eps
}

/// Core SDS estimator: g = w(t) (eps_hat^omega(z_t) - eps), gated to the mask.
#[allow(clippy::too_many_arguments)]
pub fn sds_pixel_gradient<T: Real>(
    x: &Image<T>,
    mask: &Mask,
    prompt: &str,
    predictor: &dyn NoisePredictor<T>,
    schedule: &DiffusionSchedule,
    t: f64,
    guidance: f64,
    noise_seed: u64,
    view: Option<usize>,
) -> Result<SdsGradient<T>> {
    if mask.height != x.height || mask.width != x.width {
        return Err(Error::ShapeMismatch("mask does not match image".into()));
    }
    let eps = draw_noise(x.height, x.width, x.channels, noise_seed);
    let z_t = add_noise(x, t, &eps, schedule)?;
    let request = PriorRequest {
        z_t,
        mask: mask.clone(),
        prompt: prompt.to_string(),
        t,
        guidance,
        view,
    };
    let prediction = predict_noise_cfg(predictor, &request)?;
    let w = T::fr(schedule.weight(t)?);
    let mut grad = Image::zeros(x.height, x.width, x.channels);
    for y in 0..x.height {
        for xx in 0..x.width {
            if !mask.at(y, xx) {
                continue;
            }
            for c in 0..x.channels {
                let i = x.idx(y, xx, c);
                grad.data[i] = w * (prediction.eps_hat.data[i] - eps.data[i]);
            }
        }
    }
    Ok(SdsGradient {
        grad,
        t,
        noise_seed,
    })
}

/// One view of a multi-view batch.
pub struct MultiViewEntry<'a> {
    pub frame: &'a SceneFrame,
    /// Index of this view in the dataset; forwarded to per-view priors.
    pub view_index: usize,
    pub noise_seed: u64,
}

/// N views sharing one timestep and one predictor instance.
pub struct MultiViewBatch<'a> {
    pub entries: Vec<MultiViewEntry<'a>>,
    pub t: f64,
}

/// Common knobs for the theta-level SDS operations.
#[derive(Debug, Clone)]
pub struct SdsOptions<T> {
    pub render: RenderOptions<T>,
    /// Resolution fed to the prior; None renders at dataset resolution.
    pub prior_size: Option<(usize, usize)>,
    pub guidance: f64,
}

/// Downsample a pixel gradient computed at prior resolution back to full
/// resolution via the transpose of the bilinear kernel, then gate by the
/// full-resolution mask.
fn lift_prior_gradient<T: Real>(
    grad_prior: &Image<T>,
    full_h: usize,
    full_w: usize,
    mask: &Mask,
) -> Image<T> {
    let mut g = if grad_prior.height == full_h && grad_prior.width == full_w {
        grad_prior.clone()
    } else {
        resample_bilinear_backprop(grad_prior, full_h, full_w)
    };
    for y in 0..full_h {
        for x in 0..full_w {
            if !mask.at(y, x) {
                for c in 0..g.channels {
                    let i = g.idx(y, x, c);
                    g.data[i] = T::zero();
                }
            }
        }
    }
    g
}

fn to_prior_res<T: Real>(
    x: &Image<T>,
    mask: &Mask,
    prior_size: Option<(usize, usize)>,
) -> (Image<T>, Mask) {
    match prior_size {
        Some((ph, pw)) if ph != x.height || pw != x.width => {
            (resample_bilinear(x, ph, pw), resample_mask(mask, ph, pw))
        }
        _ => (x.clone(), mask.clone()),
    }
}

/// Theta-gradient of one SDS term plus the first-order surrogate value
/// sum(g . x) whose exact theta-gradient is the returned vector (g treated
/// as constant, per the SDS construction). The surrogate is what the
/// training loop logs as this term's "loss".
pub struct SdsTheta<T> {
    pub grad_theta: Vec<T>,
    pub surrogate: f64,
}

/// Multi-view appearance SDS (one shared t, independent noise per view,
/// summed theta-gradients).
pub fn sds_multiview<T: Real>(
    field: &RadianceField<T>,
    batch: &MultiViewBatch,
    prompt: &str,
    predictor: &dyn NoisePredictor<T>,
    schedule: &DiffusionSchedule,
    opts: &SdsOptions<T>,
) -> Result<SdsTheta<T>> {
    if batch.entries.is_empty() {
        return Err(Error::InvalidInput("multi-view batch is empty".into()));
    }
    let mut out = SdsTheta {
        grad_theta: vec![T::zero(); field.theta.len()],
        surrogate: 0.0,
    };
    for entry in &batch.entries {
        accumulate_appearance_view(
            field,
            entry,
            batch.t,
            prompt,
            predictor,
            schedule,
            opts,
            &mut out,
        )?;
    }
    Ok(out)
}

/// Single-view appearance SDS: the N = 1 case of [`sds_multiview`].
#[allow(clippy::too_many_arguments)]
pub fn sds_appearance<T: Real>(
    field: &RadianceField<T>,
    frame: &SceneFrame,
    view_index: usize,
    prompt: &str,
    predictor: &dyn NoisePredictor<T>,
    schedule: &DiffusionSchedule,
    t: f64,
    noise_seed: u64,
    opts: &SdsOptions<T>,
) -> Result<SdsTheta<T>> {
    let batch = MultiViewBatch {
        entries: vec![MultiViewEntry {
            frame,
            view_index,
            noise_seed,
        }],
        t,
    };
    sds_multiview(field, &batch, prompt, predictor, schedule, opts)
}

#[allow(clippy::too_many_arguments)]
fn accumulate_appearance_view<T: Real>(
    field: &RadianceField<T>,
    entry: &MultiViewEntry,
    t: f64,
    prompt: &str,
    predictor: &dyn NoisePredictor<T>,
    schedule: &DiffusionSchedule,
    opts: &SdsOptions<T>,
    out: &mut SdsTheta<T>,
) -> Result<()> {
    let frame = entry.frame;
    let camera = &frame.camera;
    let pixels = frame.mask.true_pixels();
    if pixels.is_empty() {
        return Ok(());
    }
    let mut render_opts = opts.render.clone();
    render_opts.seed = mix_seed(&[opts.render.seed, entry.view_index as u64, RENDER_STREAM]);
    let caches = render_pixels(field, camera, &pixels, &render_opts)?;
    // composite: ground truth outside the mask, rendered colors inside
    let mut x = frame.image.cast::<T>();
    for (&(y, xx), cache) in pixels.iter().zip(caches.iter()) {
        x.set_pixel3(y, xx, cache.radiance.color);
    }
    let (xp, maskp) = to_prior_res(&x, &frame.mask, opts.prior_size);
    let g = sds_pixel_gradient(
        &xp,
        &maskp,
        prompt,
        predictor,
        schedule,
        t,
        opts.guidance,
        entry.noise_seed,
        Some(entry.view_index),
    )?;
    let g_full = lift_prior_gradient(&g.grad, x.height, x.width, &frame.mask);
    for (gv, xv) in g_full.data.iter().zip(x.data.iter()) {
        out.surrogate += gv.to_f64_() * xv.to_f64_();
    }
    for (&(y, xx), cache) in pixels.iter().zip(caches.iter()) {
        let upstream = RayUpstream::color_only(g_full.pixel3(y, xx));
        backprop_pixel(
            field,
            cache,
            &upstream,
            render_opts.background,
            &mut out.grad_theta,
        );
    }
    Ok(())
}

/// Forward state of the geometry path, exposed so the deterministic chain
/// (with the pixel gradient held fixed) can be finite-difference checked.
pub struct GeometryForward<T> {
    pub caches: Vec<PixelCache<T>>,
    pub map: NormalMap<T>,
    pub nm_cache: NormalMapCache<T>,
    /// Encoded normal image in [0,1], the prior's input before resampling.
    pub encoded: Image<T>,
}

pub fn geometry_forward<T: Real>(
    field: &RadianceField<T>,
    camera: &Camera,
    render_opts: &RenderOptions<T>,
) -> Result<GeometryForward<T>> {
    let (view, caches) = render_view_cached(field, camera, render_opts)?;
    let z = range_to_zdepth(&view.depth, camera);
    let (map, nm_cache) = normal_map_from_depth_cached(&z, camera, 9)?;
    let encoded = encode_normal_image(&map);
    Ok(GeometryForward {
        caches,
        map,
        nm_cache,
        encoded,
    })
}

/// Reverse pass of the geometry path: a fixed gradient on the encoded normal
/// image chained to theta through encoding, plane fit, the depth convention,
/// and the volume integrator. Degenerate (fallback) pixels contribute zero.
pub fn geometry_chain_backprop<T: Real>(
    field: &RadianceField<T>,
    forward: &GeometryForward<T>,
    camera: &Camera,
    g_encoded: &Image<T>,
    background: crate::math::V3<T>,
) -> Vec<T> {
    let g_normals = encode_normal_backprop(&forward.map, g_encoded);
    let g_z = normal_map_backprop(&forward.nm_cache, &g_normals);
    let g_range = range_to_zdepth_backprop(&g_z, camera);
    let mut grad_theta = vec![T::zero(); field.theta.len()];
    for y in 0..camera.height {
        for x in 0..camera.width {
            let g = g_range.at(y, x, 0);
            if g == T::zero() {
                continue;
            }
            let cache = &forward.caches[y * camera.width + x];
            let upstream = RayUpstream::depth_only(g);
            backprop_pixel(field, cache, &upstream, background, &mut grad_theta);
        }
    }
    grad_theta
}

/// Geometry SDS (normal-image distillation).
#[allow(clippy::too_many_arguments)]
pub fn sds_geometry<T: Real>(
    field: &RadianceField<T>,
    frame: &SceneFrame,
    view_index: usize,
    prompt: &str,
    predictor: &dyn NoisePredictor<T>,
    schedule: &DiffusionSchedule,
    t: f64,
    noise_seed: u64,
    opts: &SdsOptions<T>,
) -> Result<SdsTheta<T>> {
    let camera = &frame.camera;
    if frame.mask.count_true() == 0 {
        return Ok(SdsTheta {
            grad_theta: vec![T::zero(); field.theta.len()],
            surrogate: 0.0,
        });
    }
    let mut render_opts = opts.render.clone();
    render_opts.seed = mix_seed(&[opts.render.seed, view_index as u64, RENDER_STREAM]);
    let forward = geometry_forward(field, camera, &render_opts)?;
    let (xp, maskp) = to_prior_res(&forward.encoded, &frame.mask, opts.prior_size);
    let g = sds_pixel_gradient(
        &xp,
        &maskp,
        prompt,
        predictor,
        schedule,
        t,
        opts.guidance,
        noise_seed,
        Some(view_index),
    )?;
    let g_full = lift_prior_gradient(&g.grad, camera.height, camera.width, &frame.mask);
    let surrogate = g_full
        .data
        .iter()
        .zip(forward.encoded.data.iter())
        .map(|(a, b)| a.to_f64_() * b.to_f64_())
        .sum();
    Ok(SdsTheta {
        grad_theta: geometry_chain_backprop(
            field,
            &forward,
            camera,
            &g_full,
            render_opts.background,
        ),
        surrogate,
    })
}

/// Min-max normalization state for the depth-SDS path.
pub struct MinMaxCache<T> {
    pub argmin: usize,
    pub argmax: usize,
    pub min: T,
    pub max: T,
}

/// Per-view min-max normalization of depth to [0,1]. Constant depth maps to
/// all zeros. Ties broken by first occurrence in row-major order.
pub fn normalize_depth_minmax<T: Real>(depth: &Image<T>) -> (Image<T>, MinMaxCache<T>) {
    let mut argmin = 0;
    let mut argmax = 0;
    for (i, &v) in depth.data.iter().enumerate() {
        if v < depth.data[argmin] {
            argmin = i;
        }
        if v > depth.data[argmax] {
            argmax = i;
        }
    }
    let (min, max) = (depth.data[argmin], depth.data[argmax]);
    let mut out = Image::zeros(depth.height, depth.width, 1);
    if max > min {
        let r = max - min;
        for (o, &v) in out.data.iter_mut().zip(depth.data.iter()) {
            *o = (v - min) / r;
        }
    }
    (
        out,
        MinMaxCache {
            argmin,
            argmax,
            min,
            max,
        },
    )
}

/// Reverse pass of [`normalize_depth_minmax`], including the argmin/argmax
/// subgradient terms from the normalization bounds.
pub fn normalize_depth_minmax_backprop<T: Real>(
    cache: &MinMaxCache<T>,
    depth: &Image<T>,
    upstream: &Image<T>,
) -> Image<T> {
    let mut grad = Image::zeros(depth.height, depth.width, 1);
    let r = cache.max - cache.min;
    if !(r > T::zero()) {
        return grad;
    }
    let sum_u: T = upstream.data.iter().cloned().sum();
    let sum_u_dnorm: T = upstream
        .data
        .iter()
        .zip(depth.data.iter())
        .map(|(&u, &d)| u * (d - cache.min) / r)
        .sum();
    for (i, g) in grad.data.iter_mut().enumerate() {
        *g = upstream.data[i] / r;
    }
    // d/d(min): -1/r per pixel plus range shrinkage; d/d(max): range growth
    grad.data[cache.argmin] = grad.data[cache.argmin] - sum_u / r + sum_u_dnorm / r;
    grad.data[cache.argmax] = grad.data[cache.argmax] - sum_u_dnorm / r;
    grad
}

/// Forward state of the depth-SDS path.
pub struct DepthForward<T> {
    pub caches: Vec<PixelCache<T>>,
    pub depth: Image<T>,
    pub minmax: MinMaxCache<T>,
    /// Normalized depth replicated to 3 channels, the prior's input.
    pub encoded: Image<T>,
}

pub fn depth_forward<T: Real>(
    field: &RadianceField<T>,
    camera: &Camera,
    render_opts: &RenderOptions<T>,
) -> Result<DepthForward<T>> {
    let (view, caches) = render_view_cached(field, camera, render_opts)?;
    let (norm, minmax) = normalize_depth_minmax(&view.depth);
    let mut encoded = Image::zeros(camera.height, camera.width, 3);
    for y in 0..camera.height {
        for x in 0..camera.width {
            let v = norm.at(y, x, 0);
            encoded.set_pixel3(y, x, [v, v, v]);
        }
    }
    Ok(DepthForward {
        caches,
        depth: view.depth,
        minmax,
        encoded,
    })
}

pub fn depth_chain_backprop<T: Real>(
    field: &RadianceField<T>,
    forward: &DepthForward<T>,
    camera: &Camera,
    g_encoded: &Image<T>,
    background: crate::math::V3<T>,
) -> Vec<T> {
    // replication transpose: sum the three channels
    let mut g_norm = Image::zeros(camera.height, camera.width, 1);
    for y in 0..camera.height {
        for x in 0..camera.width {
            let p = g_encoded.pixel3(y, x);
            g_norm.set(y, x, 0, p[0] + p[1] + p[2]);
        }
    }
    let g_depth = normalize_depth_minmax_backprop(&forward.minmax, &forward.depth, &g_norm);
    let mut grad_theta = vec![T::zero(); field.theta.len()];
    for y in 0..camera.height {
        for x in 0..camera.width {
            let g = g_depth.at(y, x, 0);
            if g == T::zero() {
                continue;
            }
            let cache = &forward.caches[y * camera.width + x];
            let upstream = RayUpstream::depth_only(g);
            backprop_pixel(field, cache, &upstream, background, &mut grad_theta);
        }
    }
    grad_theta
}

/// Depth SDS (Eq.-11 ablation path): the prior consumes per-view min-max
/// normalized depth replicated to 3 channels.
#[allow(clippy::too_many_arguments)]
pub fn sds_depth<T: Real>(
    field: &RadianceField<T>,
    frame: &SceneFrame,
    view_index: usize,
    prompt: &str,
    predictor: &dyn NoisePredictor<T>,
    schedule: &DiffusionSchedule,
    t: f64,
    noise_seed: u64,
    opts: &SdsOptions<T>,
) -> Result<SdsTheta<T>> {
    let camera = &frame.camera;
    if frame.mask.count_true() == 0 {
        return Ok(SdsTheta {
            grad_theta: vec![T::zero(); field.theta.len()],
            surrogate: 0.0,
        });
    }
    let mut render_opts = opts.render.clone();
    render_opts.seed = mix_seed(&[opts.render.seed, view_index as u64, RENDER_STREAM]);
    let forward = depth_forward(field, camera, &render_opts)?;
    let (xp, maskp) = to_prior_res(&forward.encoded, &frame.mask, opts.prior_size);
    let g = sds_pixel_gradient(
        &xp,
        &maskp,
        prompt,
        predictor,
        schedule,
        t,
        opts.guidance,
        noise_seed,
        Some(view_index),
    )?;
    let g_full = lift_prior_gradient(&g.grad, camera.height, camera.width, &frame.mask);
    let surrogate = g_full
        .data
        .iter()
        .zip(forward.encoded.data.iter())
        .map(|(a, b)| a.to_f64_() * b.to_f64_())
        .sum();
    Ok(SdsTheta {
        grad_theta: depth_chain_backprop(
            field,
            &forward,
            camera,
            &g_full,
            render_opts.background,
        ),
        surrogate,
    })
}
