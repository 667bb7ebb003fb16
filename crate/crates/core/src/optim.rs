//! Training loop: Adam updates combining masked/unmasked reconstruction
//! losses with multi-view appearance and geometry score distillation.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{FieldArch, RadianceField};
use crate::img::{read_pfm, Image};
use crate::math::{mix_seed, sub3, Real};
use crate::prior::{DiffusionSchedule, NoisePredictor, TimestepSampler};
use crate::render::{backprop_pixel, render_pixels, Camera, RayUpstream, RenderOptions};
use crate::scene::{sample_unmasked_rays, SceneDataset, SceneFrame};
use crate::sds::{
    sds_depth, sds_geometry, sds_multiview, MultiViewBatch, MultiViewEntry, SdsOptions, SdsTheta,
};

// Purpose tags for per-iteration RNG streams; skipping a disabled term never
// perturbs the streams of the others.
const RAY_STREAM: u64 = 0x52415953;
const RECON_RENDER_STREAM: u64 = 0x5245434e;
const ANCHOR_STREAM: u64 = 0x414e4348;
const TIME_STREAM: u64 = 0x54494d45;
const NOISE_STREAM: u64 = 0x4e4f4953;
const SDS_RENDER_STREAM: u64 = 0x53445352;
const GUIDANCE_STREAM: u64 = 0x47554944;
const MASKED_DEPTH_STREAM: u64 = 0x4d444550;

/// Weights of the composite loss: total = color + lambda1 * depth
/// + lambda2 * appearance SDS + lambda3 * geometry SDS.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda1: 0.1,
            lambda2: 1e-4,
            lambda3: 1e-4,
        }
    }
}

/// Full run configuration; round-trips through TOML with every field
/// defaulted so partial files are valid.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub iterations: usize,
    /// Unmasked rays per step for the reconstruction terms.
    pub rays_per_step: usize,
    pub samples_per_ray: usize,
    /// Views per multi-view SDS batch (anchor + nearest neighbors).
    pub n_views: usize,
    pub learning_rate: f64,
    /// Final learning rate as a fraction of `learning_rate`; the rate decays
    /// linearly to this over the run. 1.0 keeps it constant.
    pub lr_final_factor: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    pub weights: LossWeights,
    /// Classifier-free guidance scale range for the appearance prior; one
    /// value is drawn per run and logged.
    pub guidance_appearance: [f64; 2],
    /// Guidance scale range for the geometry/depth prior.
    pub guidance_geometry: [f64; 2],
    /// Image resolution fed to the prior (height, width).
    pub prior_resolution: [usize; 2],
    /// Save a checkpoint every this many iterations; 0 disables.
    pub checkpoint_interval: usize,
    pub appearance_sds: bool,
    pub geometry_sds: bool,
    /// Replaces the normal-map geometry term with the normalized-depth
    /// variant when set.
    pub depth_sds: bool,
    /// When false the appearance batch contains the anchor view only.
    pub multiview: bool,
    /// "default", "small", or "tiny".
    pub arch: String,
    /// Stratified jitter for ray sampling.
    pub stratified: bool,
    /// Directory of precomputed inpainted depth maps ({index:04}.pfm, range
    /// depth, one per frame); when set, masked pixels get direct depth
    /// supervision against these maps (weighted by lambda1).
    pub inpainted_depth_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 2000,
            rays_per_step: 1024,
            samples_per_ray: 64,
            n_views: 5,
            learning_rate: 1e-4,
            lr_final_factor: 1.0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
            weights: LossWeights::default(),
            guidance_appearance: [7.5, 25.0],
            guidance_geometry: [2.5, 7.5],
            prior_resolution: [64, 64],
            checkpoint_interval: 0,
            appearance_sds: true,
            geometry_sds: true,
            depth_sds: false,
            multiview: true,
            arch: "default".into(),
            stratified: true,
            inpainted_depth_dir: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0
            || self.rays_per_step == 0
            || self.samples_per_ray == 0
            || self.n_views == 0
        {
            return Err(Error::Config("counts must be positive".into()));
        }
        if self.weights.lambda1 < 0.0 || self.weights.lambda2 < 0.0 || self.weights.lambda3 < 0.0
        {
            return Err(Error::Config("loss weights must be nonnegative".into()));
        }
        for r in [self.guidance_appearance, self.guidance_geometry] {
            if !(r[0].is_finite() && r[1].is_finite()) || r[0] > r[1] || r[0] < 0.0 {
                return Err(Error::Config(format!(
                    "invalid guidance range [{}, {}]",
                    r[0], r[1]
                )));
            }
        }
        if self.prior_resolution[0] == 0 || self.prior_resolution[1] == 0 {
            return Err(Error::Config("prior resolution must be positive".into()));
        }
        if self.arch != "default" && self.arch != "small" && self.arch != "tiny" {
            return Err(Error::Config(format!(
                "unknown arch {:?} (expected \"default\", \"small\", or \"tiny\")",
                self.arch
            )));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if !(self.lr_final_factor.is_finite()
            && self.lr_final_factor > 0.0
            && self.lr_final_factor <= 1.0)
        {
            return Err(Error::Config("lr_final_factor must be in (0, 1]".into()));
        }
        Ok(())
    }

    pub fn field_arch(&self) -> FieldArch {
        if self.arch == "tiny" {
            FieldArch::tiny()
        } else if self.arch == "small" {
            FieldArch::small()
        } else {
            FieldArch::default()
        }
    }
}

/// Adam first/second moment state aligned with theta.
#[derive(Debug, Clone)]
pub struct AdamState<T> {
    pub m: Vec<T>,
    pub v: Vec<T>,
    pub step: usize,
}

impl<T: Real> AdamState<T> {
    pub fn new(n: usize) -> Self {
        AdamState {
            m: vec![T::zero(); n],
            v: vec![T::zero(); n],
            step: 0,
        }
    }
}

/// One bias-corrected Adam update in place. `iteration` only labels the
/// diagnostic on a non-finite gradient.
#[allow(clippy::too_many_arguments)]
pub fn adam_step<T: Real>(
    state: &mut AdamState<T>,
    theta: &mut [T],
    grad: &[T],
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    iteration: usize,
) -> Result<()> {
    if theta.len() != grad.len() || state.m.len() != theta.len() {
        return Err(Error::ShapeMismatch(format!(
            "adam: theta {} grad {} state {}",
            theta.len(),
            grad.len(),
            state.m.len()
        )));
    }
    if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFiniteGradient {
            iteration,
            detail: format!("component {} of the combined gradient is {}", i, grad[i]),
        });
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - beta1.powi(t);
    let bc2 = 1.0 - beta2.powi(t);
    let (b1, b2) = (T::fr(beta1), T::fr(beta2));
    for i in 0..theta.len() {
        state.m[i] = b1 * state.m[i] + (T::one() - b1) * grad[i];
        state.v[i] = b2 * state.v[i] + (T::one() - b2) * grad[i] * grad[i];
        let mhat = state.m[i] / T::fr(bc1);
        let vhat = state.v[i] / T::fr(bc2);
        theta[i] = theta[i] - T::fr(lr) * mhat / (vhat.sqrt() + T::fr(eps));
    }
    Ok(())
}

fn group_by_frame(batch: &[(usize, usize, usize)]) -> Vec<(usize, Vec<(usize, usize)>)> {
    let mut groups: Vec<(usize, Vec<(usize, usize)>)> = Vec::new();
    for &(f, y, x) in batch {
        match groups.iter_mut().find(|(g, _)| *g == f) {
            Some((_, v)) => v.push((y, x)),
            None => groups.push((f, vec![(y, x)])),
        }
    }
    groups
}

/// Mean over rays of the channel-summed squared color error, with its exact
/// theta-gradient. Batch entries are (frame index, y, x).
pub fn recon_color_loss<T: Real>(
    field: &RadianceField<T>,
    frames: &[SceneFrame],
    batch: &[(usize, usize, usize)],
    opts: &RenderOptions<T>,
) -> Result<(f64, Vec<T>)> {
    if batch.is_empty() {
        return Err(Error::InvalidInput("empty ray batch".into()));
    }
    let mut loss = 0.0;
    let mut grad = vec![T::zero(); field.theta.len()];
    let inv_n = 1.0 / batch.len() as f64;
    for (f, pixels) in group_by_frame(batch) {
        let frame = &frames[f];
        let caches = render_pixels(field, &frame.camera, &pixels, opts)?;
        for (&(y, x), cache) in pixels.iter().zip(caches.iter()) {
            let target = frame.image.pixel3(y, x);
            let rendered = cache.radiance.color;
            let diff = sub3(rendered, [
                T::fr(target[0] as f64),
                T::fr(target[1] as f64),
                T::fr(target[2] as f64),
            ]);
            for c in 0..3 {
                loss += diff[c].to_f64_() * diff[c].to_f64_() * inv_n;
            }
            let upstream = RayUpstream::color_only([
                T::fr(2.0 * inv_n) * diff[0],
                T::fr(2.0 * inv_n) * diff[1],
                T::fr(2.0 * inv_n) * diff[2],
            ]);
            backprop_pixel(field, cache, &upstream, opts.background, &mut grad);
        }
    }
    Ok((loss, grad))
}

fn depth_loss_impl<T: Real>(
    field: &RadianceField<T>,
    frames: &[SceneFrame],
    batch: &[(usize, usize, usize)],
    opts: &RenderOptions<T>,
    target_for: impl Fn(usize) -> Option<*const Image<f32>>,
) -> Result<(f64, Vec<T>)> {
    let mut grad = vec![T::zero(); field.theta.len()];
    let with_depth: Vec<(usize, usize, usize)> = batch
        .iter()
        .copied()
        .filter(|&(f, _, _)| target_for(f).is_some())
        .collect();
    if with_depth.is_empty() {
        return Ok((0.0, grad));
    }
    let mut loss = 0.0;
    let inv_n = 1.0 / with_depth.len() as f64;
    for (f, pixels) in group_by_frame(&with_depth) {
        let frame = &frames[f];
        // The pointer indirection lets one implementation serve both the
        // frame's own depth and externally supplied maps without cloning.
        let target = unsafe { &*target_for(f).unwrap() };
        let caches = render_pixels(field, &frame.camera, &pixels, opts)?;
        for (&(y, x), cache) in pixels.iter().zip(caches.iter()) {
            let d = cache.radiance.depth - T::fr(target.at(y, x, 0) as f64);
            loss += d.to_f64_() * d.to_f64_() * inv_n;
            let upstream = RayUpstream::depth_only(T::fr(2.0 * inv_n) * d);
            backprop_pixel(field, cache, &upstream, opts.background, &mut grad);
        }
    }
    Ok((loss, grad))
}

/// Mean squared range-depth error over the rays whose frame carries depth;
/// contributes exactly zero (loss and gradient) when none do.
pub fn recon_depth_loss<T: Real>(
    field: &RadianceField<T>,
    frames: &[SceneFrame],
    batch: &[(usize, usize, usize)],
    opts: &RenderOptions<T>,
) -> Result<(f64, Vec<T>)> {
    if batch.is_empty() {
        return Err(Error::InvalidInput("empty ray batch".into()));
    }
    depth_loss_impl(field, frames, batch, opts, |f| {
        frames[f].depth.as_ref().map(|d| d as *const _)
    })
}

/// The anchor plus its N-1 nearest neighbors by camera-center Euclidean
/// distance, anchor first, ties broken by view index.
pub fn select_nearby_views(cameras: &[Camera], anchor: usize, n: usize) -> Vec<usize> {
    let ac = cameras[anchor].center();
    let mut others: Vec<usize> = (0..cameras.len()).filter(|&i| i != anchor).collect();
    others.sort_by(|&a, &b| {
        let da = sub3(cameras[a].center(), ac);
        let db = sub3(cameras[b].center(), ac);
        let da = da[0] * da[0] + da[1] * da[1] + da[2] * da[2];
        let db = db[0] * db[0] + db[1] * db[1] + db[2] * db[2];
        da.partial_cmp(&db).unwrap().then(a.cmp(&b))
    });
    let mut out = vec![anchor];
    out.extend(others.into_iter().take(n.saturating_sub(1).min(cameras.len() - 1)));
    out
}

/// One CSV row of the loss log. `t` and the guidance scales are zero on
/// iterations where the corresponding term was skipped.
#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    pub iteration: usize,
    pub recon_color: f64,
    pub recon_depth: f64,
    pub sds_appearance: f64,
    pub sds_geometry: f64,
    pub total: f64,
    pub t: f64,
    pub omega_appearance: f64,
    pub omega_geometry: f64,
}

pub fn write_log_csv(path: &Path, rows: &[LogRow]) -> Result<()> {
    let mut s =
        String::from("iteration,recon_color,recon_depth,sds_appearance,sds_geometry,total,t,omega_appearance,omega_geometry\n");
    for r in rows {
        s.push_str(&format!(
            "{},{:?},{:?},{:?},{:?},{:?},{:?},{:?},{:?}\n",
            r.iteration,
            r.recon_color,
            r.recon_depth,
            r.sds_appearance,
            r.sds_geometry,
            r.total,
            r.t,
            r.omega_appearance,
            r.omega_geometry
        ));
    }
    std::fs::write(path, s)?;
    Ok(())
}

#[derive(Debug)]
pub struct TrainOutput {
    pub field: RadianceField<f32>,
    pub log: Vec<LogRow>,
    pub omega_appearance: f64,
    pub omega_geometry: f64,
}

fn sample_masked_rays(
    dataset: &SceneDataset,
    count: usize,
    rng: &mut impl Rng,
) -> Vec<(usize, usize, usize)> {
    if dataset.frames.iter().all(|f| f.mask.count_true() == 0) {
        return Vec::new();
    }
    let mut out = Vec::with_capacity(count);
    let n = dataset.frames.len();
    while out.len() < count {
        let f = rng.gen_range(0..n);
        let frame = &dataset.frames[f];
        let y = rng.gen_range(0..frame.camera.height);
        let x = rng.gen_range(0..frame.camera.width);
        if frame.mask.at(y, x) {
            out.push((f, y, x));
        }
    }
    out
}

fn load_inpainted_depth(dir: &Path, dataset: &SceneDataset) -> Result<Vec<Image<f32>>> {
    let mut maps = Vec::with_capacity(dataset.frames.len());
    for (i, frame) in dataset.frames.iter().enumerate() {
        let path = dir.join(format!("{:04}.pfm", i));
        let img = read_pfm(&path)?;
        if img.height != frame.camera.height || img.width != frame.camera.width || img.channels != 1
        {
            return Err(Error::ShapeMismatch(format!(
                "inpainted depth {} is {}x{}x{}, expected {}x{}x1",
                path.display(),
                img.height,
                img.width,
                img.channels,
                frame.camera.height,
                frame.camera.width
            )));
        }
        maps.push(img);
    }
    Ok(maps)
}

fn draw_guidance(range: [f64; 2], seed: u64, tag: u64) -> f64 {
    if range[0] == range[1] {
        return range[0];
    }
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, GUIDANCE_STREAM, tag]));
    rng.gen_range(range[0]..range[1])
}

/// Runs the full optimization. `predictor` may be None when all SDS terms
/// are disabled (flags off or zero weights); `geometry_predictor` overrides
/// the prior used by the geometry/depth SDS term, falling back to
/// `predictor` when None. On prior failure a resumable checkpoint is written
/// to `checkpoint_dir` (when set) before the error propagates.
pub fn train(
    config: &TrainConfig,
    dataset: &SceneDataset,
    predictor: Option<&dyn NoisePredictor<f32>>,
    geometry_predictor: Option<&dyn NoisePredictor<f32>>,
    checkpoint_dir: Option<&Path>,
) -> Result<TrainOutput> {
    config.validate()?;
    if dataset.frames.is_empty() {
        return Err(Error::InvalidInput("dataset has no frames".into()));
    }
    let w = config.weights;
    let appearance_on = config.appearance_sds && w.lambda2 > 0.0;
    let geometry_on = (config.geometry_sds || config.depth_sds) && w.lambda3 > 0.0;
    if (appearance_on && predictor.is_none())
        || (geometry_on && predictor.is_none() && geometry_predictor.is_none())
    {
        return Err(Error::Config(
            "SDS terms enabled but no prior configured".into(),
        ));
    }
    let inpainted = match &config.inpainted_depth_dir {
        Some(dir) => Some(load_inpainted_depth(dir, dataset)?),
        None => None,
    };
    let mut field = RadianceField::<f32>::init(config.field_arch(), config.seed);
    let mut adam = AdamState::<f32>::new(field.theta.len());
    let sampler = TimestepSampler::new(config.iterations);
    let schedule = DiffusionSchedule;
    let omega_appearance = if appearance_on {
        draw_guidance(config.guidance_appearance, config.seed, 0)
    } else {
        0.0
    };
    let omega_geometry = if geometry_on {
        draw_guidance(config.guidance_geometry, config.seed, 1)
    } else {
        0.0
    };
    let cameras: Vec<Camera> = dataset.frames.iter().map(|f| f.camera.clone()).collect();
    let mut log = Vec::with_capacity(config.iterations);

    for iter in 0..config.iterations {
        let recon_opts = RenderOptions::<f32> {
            samples_per_ray: config.samples_per_ray,
            stratified: config.stratified,
            seed: mix_seed(&[config.seed, iter as u64, RECON_RENDER_STREAM]),
            background: [0.0; 3],
        };
        let mut ray_rng =
            ChaCha8Rng::seed_from_u64(mix_seed(&[config.seed, iter as u64, RAY_STREAM]));
        let batch = sample_unmasked_rays(dataset, config.rays_per_step, &mut ray_rng);
        let (color_loss, color_grad) =
            recon_color_loss(&field, &dataset.frames, &batch, &recon_opts)?;
        let (mut depth_loss, mut depth_grad) =
            recon_depth_loss(&field, &dataset.frames, &batch, &recon_opts)?;
        if let Some(maps) = &inpainted {
            let mut mrng = ChaCha8Rng::seed_from_u64(mix_seed(&[
                config.seed,
                iter as u64,
                MASKED_DEPTH_STREAM,
            ]));
            let mbatch = sample_masked_rays(dataset, config.rays_per_step, &mut mrng);
            if !mbatch.is_empty() {
                let (ml, mg) =
                    depth_loss_impl(&field, &dataset.frames, &mbatch, &recon_opts, |f| {
                        Some(&maps[f] as *const _)
                    })?;
                depth_loss += ml;
                for (d, g) in depth_grad.iter_mut().zip(mg.iter()) {
                    *d += *g;
                }
            }
        }

        let mut t_drawn = 0.0;
        let mut app = SdsTheta {
            grad_theta: Vec::new(),
            surrogate: 0.0,
        };
        let mut geo = SdsTheta {
            grad_theta: Vec::new(),
            surrogate: 0.0,
        };
        if appearance_on || geometry_on {
            let mut t_rng =
                ChaCha8Rng::seed_from_u64(mix_seed(&[config.seed, iter as u64, TIME_STREAM]));
            t_drawn = sampler.sample(iter, &mut t_rng);
            let mut anchor_rng =
                ChaCha8Rng::seed_from_u64(mix_seed(&[config.seed, iter as u64, ANCHOR_STREAM]));
            let anchor = anchor_rng.gen_range(0..dataset.frames.len());
            let sds_opts = |guidance: f64| SdsOptions::<f32> {
                render: RenderOptions {
                    samples_per_ray: config.samples_per_ray,
                    stratified: config.stratified,
                    seed: mix_seed(&[config.seed, iter as u64, SDS_RENDER_STREAM]),
                    background: [0.0; 3],
                },
                prior_size: Some((config.prior_resolution[0], config.prior_resolution[1])),
                guidance,
            };
            let geo_predictor = geometry_predictor.or(predictor).unwrap();
            let persist = |e: Error| {
                if matches!(e, Error::PriorUnavailable(_)) {
                    if let Some(dir) = checkpoint_dir {
                        let _ = std::fs::create_dir_all(dir);
                        let _ = field.save_checkpoint(&dir.join("resume.ckpt"));
                    }
                }
                e
            };
            if appearance_on {
                let n = if config.multiview { config.n_views } else { 1 };
                let views = select_nearby_views(&cameras, anchor, n.min(cameras.len()));
                let batch = MultiViewBatch {
                    entries: views
                        .iter()
                        .map(|&v| MultiViewEntry {
                            frame: &dataset.frames[v],
                            view_index: v,
                            noise_seed: mix_seed(&[
                                config.seed,
                                iter as u64,
                                NOISE_STREAM,
                                v as u64,
                            ]),
                        })
                        .collect(),
                    t: t_drawn,
                };
                app = sds_multiview(
                    &field,
                    &batch,
                    &dataset.prompt,
                    predictor.unwrap(),
                    &schedule,
                    &sds_opts(omega_appearance),
                )
                .map_err(persist)?;
            }
            if geometry_on {
                let noise_seed =
                    mix_seed(&[config.seed, iter as u64, NOISE_STREAM, u64::MAX]);
                let run = if config.depth_sds {
                    sds_depth
                } else {
                    sds_geometry
                };
                geo = run(
                    &field,
                    &dataset.frames[anchor],
                    anchor,
                    &dataset.prompt,
                    geo_predictor,
                    &schedule,
                    t_drawn,
                    noise_seed,
                    &sds_opts(omega_geometry),
                )
                .map_err(persist)?;
            }
        }

        let mut grad = color_grad;
        for i in 0..grad.len() {
            grad[i] += w.lambda1 as f32 * depth_grad[i];
            if !app.grad_theta.is_empty() {
                grad[i] += w.lambda2 as f32 * app.grad_theta[i];
            }
            if !geo.grad_theta.is_empty() {
                grad[i] += w.lambda3 as f32 * geo.grad_theta[i];
            }
        }
        let total = color_loss
            + w.lambda1 * depth_loss
            + w.lambda2 * app.surrogate
            + w.lambda3 * geo.surrogate;
        let progress = if config.iterations > 1 {
            iter as f64 / (config.iterations - 1) as f64
        } else {
            0.0
        };
        let lr = config.learning_rate * (1.0 - (1.0 - config.lr_final_factor) * progress);
        adam_step(
            &mut adam,
            &mut field.theta,
            &grad,
            lr,
            config.beta1,
            config.beta2,
            config.eps,
            iter,
        )?;
        log.push(LogRow {
            iteration: iter,
            recon_color: color_loss,
            recon_depth: depth_loss,
            sds_appearance: app.surrogate,
            sds_geometry: geo.surrogate,
            total,
            t: t_drawn,
            omega_appearance: if appearance_on { omega_appearance } else { 0.0 },
            omega_geometry: if geometry_on { omega_geometry } else { 0.0 },
        });
        if config.checkpoint_interval > 0 && (iter + 1) % config.checkpoint_interval == 0 {
            if let Some(dir) = checkpoint_dir {
                std::fs::create_dir_all(dir)?;
                field.save_checkpoint(&dir.join(format!("ckpt_{:05}.ckpt", iter + 1)))?;
            }
        }
    }
    Ok(TrainOutput {
        field,
        log,
        omega_appearance,
        omega_geometry,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::norm3;
    use crate::prior::{GaussianPredictor, MuSource};
    use crate::scene::{generate_synthetic_scene, SyntheticSpec};

    fn tiny_dataset() -> SceneDataset {
        generate_synthetic_scene(&SyntheticSpec {
            width: 12,
            height: 12,
            frames: 4,
            dilate: 1,
            ..SyntheticSpec::default()
        })
        .unwrap()
    }

    fn fast_config() -> TrainConfig {
        TrainConfig {
            iterations: 4,
            rays_per_step: 24,
            samples_per_ray: 6,
            n_views: 3,
            arch: "tiny".into(),
            prior_resolution: [12, 12],
            guidance_appearance: [7.5, 7.5],
            guidance_geometry: [2.5, 2.5],
            ..TrainConfig::default()
        }
    }

    #[test]
    fn adam_zero_gradient_leaves_theta() {
        let mut theta = vec![0.3_f64, -1.2, 4.0];
        let mut st = AdamState::new(3);
        adam_step(&mut st, &mut theta, &[0.0; 3], 1e-2, 0.9, 0.999, 1e-8, 0).unwrap();
        assert_eq!(theta, vec![0.3, -1.2, 4.0]);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn adam_first_step_magnitude_is_lr() {
        // bias correction makes the first update lr * g / (|g| + eps)
        let mut theta = vec![1.0_f64];
        let mut st = AdamState::new(1);
        adam_step(&mut st, &mut theta, &[0.37], 1e-2, 0.9, 0.999, 1e-8, 0).unwrap();
        assert!((theta[0] - (1.0 - 1e-2)).abs() < 1e-6);
    }

    #[test]
    fn adam_matches_scalar_oracle_on_quadratic() {
        // minimize 0.5 * (x - 3)^2 from x = 0 with an independent scalar
        // implementation running alongside
        let (lr, b1, b2, eps) = (0.1, 0.9, 0.999, 1e-8);
        let mut theta = vec![0.0_f64];
        let mut st = AdamState::new(1);
        let (mut x, mut m, mut v) = (0.0_f64, 0.0_f64, 0.0_f64);
        for k in 1..=10 {
            let g = theta[0] - 3.0;
            adam_step(&mut st, &mut theta, &[g], lr, b1, b2, eps, k).unwrap();
            let gs = x - 3.0;
            m = b1 * m + (1.0 - b1) * gs;
            v = b2 * v + (1.0 - b2) * gs * gs;
            let mh = m / (1.0 - b1.powi(k as i32));
            let vh = v / (1.0 - b2.powi(k as i32));
            x -= lr * mh / (vh.sqrt() + eps);
            assert!((theta[0] - x).abs() < 1e-12, "step {}: {} vs {}", k, theta[0], x);
        }
    }

    #[test]
    fn adam_rejects_nonfinite_gradient() {
        let mut theta = vec![0.0_f64; 2];
        let mut st = AdamState::new(2);
        let err = adam_step(&mut st, &mut theta, &[0.0, f64::NAN], 0.1, 0.9, 0.999, 1e-8, 7)
            .unwrap_err();
        match err {
            Error::NonFiniteGradient { iteration, .. } => assert_eq!(iteration, 7),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn recon_color_zero_when_target_matches_render() {
        let dataset = tiny_dataset();
        let field = RadianceField::<f64>::init(FieldArch::tiny(), 3);
        let opts = RenderOptions {
            samples_per_ray: 6,
            stratified: false,
            seed: 0,
            background: [0.0; 3],
        };
        let mut frames = dataset.frames.clone();
        let batch = vec![(0, 2, 3), (0, 5, 5), (1, 1, 9)];
        // overwrite the targets with the field's own output
        for &(f, y, x) in &batch {
            let caches = render_pixels(&field, &frames[f].camera, &[(y, x)], &opts).unwrap();
            let c = caches[0].radiance.color;
            frames[f]
                .image
                .set_pixel3(y, x, [c[0] as f32, c[1] as f32, c[2] as f32]);
        }
        let (loss, grad) = recon_color_loss(&field, &frames, &batch, &opts).unwrap();
        assert!(loss < 1e-12, "loss {loss}");
        assert!(grad.iter().all(|g| g.abs() < 1e-6));
    }

    #[test]
    fn recon_color_sum_of_squares_convention() {
        // one ray with a target offset of exactly 0.5 per channel gives 0.75
        let dataset = tiny_dataset();
        let field = RadianceField::<f64>::init(FieldArch::tiny(), 3);
        let opts = RenderOptions {
            samples_per_ray: 6,
            stratified: false,
            seed: 0,
            background: [0.0; 3],
        };
        let mut frames = dataset.frames.clone();
        let caches = render_pixels(&field, &frames[0].camera, &[(4, 4)], &opts).unwrap();
        let c = caches[0].radiance.color;
        frames[0].image.set_pixel3(
            4,
            4,
            [c[0] as f32 - 0.5, c[1] as f32 - 0.5, c[2] as f32 - 0.5],
        );
        let (loss, _) = recon_color_loss(&field, &frames, &[(0, 4, 4)], &opts).unwrap();
        // target pixels are stored at f32, so the offset is exact
        assert!((loss - 0.75).abs() < 1e-6, "loss {loss}");
    }

    #[test]
    fn recon_color_rejects_empty_batch() {
        let dataset = tiny_dataset();
        let field = RadianceField::<f64>::init(FieldArch::tiny(), 3);
        let err = recon_color_loss(&field, &dataset.frames, &[], &RenderOptions::default())
            .unwrap_err();
        assert!(matches!(err, Error::InvalidInput(_)));
    }

    #[test]
    fn recon_gradients_match_finite_differences() {
        let dataset = tiny_dataset();
        let mut field = RadianceField::<f64>::init(FieldArch::tiny(), 11);
        for v in field.theta.iter_mut() {
            *v *= 3.0; // move away from the near-linear init regime
        }
        let opts = RenderOptions {
            samples_per_ray: 5,
            stratified: false,
            seed: 0,
            background: [0.0; 3],
        };
        let batch = vec![(0, 1, 1), (1, 6, 6), (2, 9, 3)];
        let (_, gc) = recon_color_loss(&field, &dataset.frames, &batch, &opts).unwrap();
        let (_, gd) = recon_depth_loss(&field, &dataset.frames, &batch, &opts).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let h = 1e-5;
        for _ in 0..24 {
            let i = rng.gen_range(0..field.theta.len());
            let orig = field.theta[i];
            field.theta[i] = orig + h;
            let (cp, _) = recon_color_loss(&field, &dataset.frames, &batch, &opts).unwrap();
            let (dp, _) = recon_depth_loss(&field, &dataset.frames, &batch, &opts).unwrap();
            field.theta[i] = orig - h;
            let (cm, _) = recon_color_loss(&field, &dataset.frames, &batch, &opts).unwrap();
            let (dm, _) = recon_depth_loss(&field, &dataset.frames, &batch, &opts).unwrap();
            field.theta[i] = orig;
            for (num, ana) in [((cp - cm) / (2.0 * h), gc[i]), ((dp - dm) / (2.0 * h), gd[i])] {
                let denom = ana.abs().max(num.abs());
                if denom > 1e-7 {
                    assert!(
                        (num - ana).abs() / denom < 1e-3,
                        "param {i}: numeric {num} vs analytic {ana}"
                    );
                }
            }
        }
    }

    #[test]
    fn recon_depth_zero_without_depth() {
        let mut dataset = tiny_dataset();
        for f in &mut dataset.frames {
            f.depth = None;
        }
        let field = RadianceField::<f64>::init(FieldArch::tiny(), 3);
        let (loss, grad) = recon_depth_loss(
            &field,
            &dataset.frames,
            &[(0, 1, 1)],
            &RenderOptions {
                samples_per_ray: 4,
                stratified: false,
                seed: 0,
                background: [0.0; 3],
            },
        )
        .unwrap();
        assert_eq!(loss, 0.0);
        assert!(grad.iter().all(|&g| g == 0.0));
    }

    fn test_camera() -> Camera {
        Camera {
            fx: 10.0,
            fy: 10.0,
            cx: 2.0,
            cy: 2.0,
            width: 4,
            height: 4,
            camera_to_world: [
                [1.0, 0.0, 0.0, 0.0],
                [0.0, 1.0, 0.0, 0.0],
                [0.0, 0.0, 1.0, 0.0],
                [0.0, 0.0, 0.0, 1.0],
            ],
            near: 0.1,
            far: 4.0,
        }
    }

    fn line_camera(x: f64) -> Camera {
        let mut c = test_camera();
        c.camera_to_world[0][3] = x;
        c
    }

    #[test]
    fn nearby_views_single() {
        let cams: Vec<Camera> = (0..4).map(|i| line_camera(i as f64)).collect();
        assert_eq!(select_nearby_views(&cams, 2, 1), vec![2]);
    }

    #[test]
    fn nearby_views_collinear() {
        let cams: Vec<Camera> = (0..5).map(|i| line_camera(i as f64)).collect();
        assert_eq!(select_nearby_views(&cams, 2, 3), vec![2, 1, 3]);
    }

    #[test]
    fn nearby_views_match_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        for _ in 0..20 {
            let cams: Vec<Camera> = (0..7)
                .map(|_| {
                    let mut c = test_camera();
                    for r in 0..3 {
                        c.camera_to_world[r][3] = rng.gen_range(-2.0..2.0);
                    }
                    c
                })
                .collect();
            let anchor = rng.gen_range(0..7);
            let n = rng.gen_range(1..=7);
            let got = select_nearby_views(&cams, anchor, n);
            let mut expect: Vec<(f64, usize)> = (0..7)
                .filter(|&i| i != anchor)
                .map(|i| (norm3(sub3(cams[i].center(), cams[anchor].center())), i))
                .collect();
            expect.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let mut want = vec![anchor];
            want.extend(expect.into_iter().take(n - 1).map(|(_, i)| i));
            assert_eq!(got, want);
        }
    }

    #[test]
    fn zero_weight_sds_matches_flags_off_bitwise() {
        let dataset = tiny_dataset();
        let off = TrainConfig {
            appearance_sds: false,
            geometry_sds: false,
            ..fast_config()
        };
        let mut zero_w = fast_config();
        zero_w.weights.lambda2 = 0.0;
        zero_w.weights.lambda3 = 0.0;
        let predictor = GaussianPredictor::<f32>::new(MuSource::Constant(0.5), 0.2).unwrap();
        let a = train(&off, &dataset, None, None, None).unwrap();
        let b = train(&zero_w, &dataset, Some(&predictor), None, None).unwrap();
        for (x, y) in a.field.theta.iter().zip(b.field.theta.iter()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
        assert_eq!(a.log, b.log);
    }

    #[test]
    fn loss_decomposition_is_exact() {
        let dataset = tiny_dataset();
        let config = fast_config();
        let predictor = GaussianPredictor::<f32>::new(MuSource::Constant(0.5), 0.2).unwrap();
        let out = train(&config, &dataset, Some(&predictor), None, None).unwrap();
        let w = config.weights;
        for row in &out.log {
            let expect = row.recon_color
                + w.lambda1 * row.recon_depth
                + w.lambda2 * row.sds_appearance
                + w.lambda3 * row.sds_geometry;
            assert_eq!(row.total.to_bits(), expect.to_bits());
        }
    }

    #[test]
    fn identical_config_and_seed_give_identical_runs() {
        let dataset = tiny_dataset();
        let config = fast_config();
        let predictor = GaussianPredictor::<f32>::new(MuSource::Constant(0.5), 0.2).unwrap();
        let a = train(&config, &dataset, Some(&predictor), None, None).unwrap();
        let b = train(&config, &dataset, Some(&predictor), None, None).unwrap();
        assert_eq!(a.log, b.log);
        for (x, y) in a.field.theta.iter().zip(b.field.theta.iter()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn sds_enabled_without_predictor_is_config_error() {
        let dataset = tiny_dataset();
        let err = train(&fast_config(), &dataset, None, None, None).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn unmasked_loss_decreases_without_sds() {
        let dataset = tiny_dataset();
        let config = TrainConfig {
            iterations: 250,
            rays_per_step: 48,
            samples_per_ray: 8,
            learning_rate: 3e-3,
            appearance_sds: false,
            geometry_sds: false,
            arch: "tiny".into(),
            ..TrainConfig::default()
        };
        let out = train(&config, &dataset, None, None, None).unwrap();
        let head: f64 = out.log[..10].iter().map(|r| r.recon_color).sum::<f64>() / 10.0;
        let tail: f64 = out.log[out.log.len() - 10..]
            .iter()
            .map(|r| r.recon_color)
            .sum::<f64>()
            / 10.0;
        assert!(tail < 0.5 * head, "head {head} tail {tail}");
    }

    #[test]
    fn config_round_trips_through_toml_and_validates() {
        let config = fast_config();
        let text = toml::to_string(&config).unwrap();
        let back: TrainConfig = toml::from_str(&text).unwrap();
        assert_eq!(config.iterations, back.iterations);
        assert_eq!(config.weights.lambda2, back.weights.lambda2);
        // a partial file fills everything else from defaults
        let partial: TrainConfig = toml::from_str("iterations = 7\narch = \"tiny\"").unwrap();
        assert_eq!(partial.iterations, 7);
        assert_eq!(partial.rays_per_step, 1024);
        partial.validate().unwrap();
        let bad: TrainConfig = toml::from_str("arch = \"huge\"").unwrap();
        assert!(matches!(bad.validate().unwrap_err(), Error::Config(_)));
    }
}
