//! Diffusion-prior abstraction: noise schedule, annealed timestep sampling,
//! classifier-free guidance composition, and interchangeable noise
//! predictors (analytic Gaussian oracle, Gaussian mixture, remote HTTP).

pub mod remote;
pub mod server;

pub use remote::RemotePredictor;
pub use server::MockPriorServer;

use crate::error::{Error, Result};
use crate::img::{Image, Mask, resample_bilinear};
use crate::math::Real;
use base64::Engine;
use rand::Rng;

/// Cosine noise schedule: alpha_bar(t) = cos^2(pi t / 2) on t in (0,1),
/// with SDS weighting w(t) = 1 - alpha_bar(t).
#[derive(Debug, Clone, Copy, Default)]
pub struct DiffusionSchedule;

impl DiffusionSchedule {
    pub fn alpha_bar(&self, t: f64) -> Result<f64> {
        if !(t > 0.0 && t < 1.0) {
            return Err(Error::InvalidTimestep(t));
        }
        let c = (std::f64::consts::FRAC_PI_2 * t).cos();
        Ok(c * c)
    }

    pub fn weight(&self, t: f64) -> Result<f64> {
        Ok(1.0 - self.alpha_bar(t)?)
    }
}

/// Draws training timesteps uniformly in [t_min, t_hi(i)] where the upper
/// bound anneals from t_max down to t_min over the run.
#[derive(Debug, Clone, Copy)]
pub struct TimestepSampler {
    pub t_min: f64,
    pub t_max: f64,
    pub total_iterations: usize,
    pub anneal_exponent: f64,
}

impl TimestepSampler {
    pub fn new(total_iterations: usize) -> Self {
        TimestepSampler {
            t_min: 0.02,
            t_max: 0.98,
            total_iterations,
            anneal_exponent: 0.5,
        }
    }

    /// Upper bound of the sampling band at iteration i.
    pub fn upper_bound(&self, iteration: usize) -> f64 {
        let frac = iteration as f64 / self.total_iterations as f64;
        self.t_max - (self.t_max - self.t_min) * frac.powf(self.anneal_exponent)
    }

    pub fn sample(&self, iteration: usize, rng: &mut impl Rng) -> f64 {
        let hi = self.upper_bound(iteration);
        rng.gen_range(self.t_min..=hi.max(self.t_min))
    }
}

/// Forward diffusion: z_t = sqrt(alpha_bar) x + sqrt(1 - alpha_bar) eps.
pub fn add_noise<T: Real>(
    x: &Image<T>,
    t: f64,
    eps: &Image<T>,
    schedule: &DiffusionSchedule,
) -> Result<Image<T>> {
    if !x.same_shape(eps) {
        return Err(Error::ShapeMismatch(
            "noise shape does not match image".into(),
        ));
    }
    let ab = schedule.alpha_bar(t)?;
    let (sa, sb) = (T::fr(ab.sqrt()), T::fr((1.0 - ab).sqrt()));
    let mut out = x.clone();
    for (o, e) in out.data.iter_mut().zip(eps.data.iter()) {
        *o = sa * *o + sb * *e;
    }
    Ok(out)
}

/// Inputs to a denoiser call.
#[derive(Debug, Clone)]
pub struct PriorRequest<T> {
    pub z_t: Image<T>,
    /// true = to-inpaint
    pub mask: Mask,
    pub prompt: String,
    pub t: f64,
    pub guidance: f64,
    /// Which view of a multi-view batch this request renders. Never sent on
    /// the wire; lets in-process per-view oracles pick their mode.
    pub view: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct NoisePrediction<T> {
    pub eps_hat: Image<T>,
}

/// A denoiser: maps a noisy image at timestep t to predicted noise.
/// Implementations must be pure or internally synchronized; they are called
/// concurrently from view workers.
pub trait NoisePredictor<T: Real>: Send + Sync {
    fn predict(&self, request: &PriorRequest<T>) -> Result<NoisePrediction<T>>;

    /// True if the predictor applies classifier-free guidance itself (the
    /// remote protocol carries the guidance scale; in-process predictors
    /// leave composition to [`predict_noise_cfg`]).
    fn applies_guidance(&self) -> bool {
        false
    }
}

fn check_prediction<T: Real>(
    request: &PriorRequest<T>,
    prediction: NoisePrediction<T>,
) -> Result<NoisePrediction<T>> {
    if !prediction.eps_hat.same_shape(&request.z_t) {
        return Err(Error::ShapeMismatch(
            "noise prediction shape does not match request".into(),
        ));
    }
    if !prediction.eps_hat.all_finite() {
        return Err(Error::Protocol("non-finite noise prediction".into()));
    }
    Ok(prediction)
}

/// Classifier-free guidance: eps_u + omega * (eps_c - eps_u), where the
/// unconditional branch uses an empty prompt. omega = 1 returns exactly the
/// conditional prediction and omega = 0 exactly the unconditional one.
pub fn predict_noise_cfg<T: Real>(
    predictor: &dyn NoisePredictor<T>,
    request: &PriorRequest<T>,
) -> Result<NoisePrediction<T>> {
    if !request.z_t.all_finite() {
        return Err(Error::InvalidInput("non-finite image in request".into()));
    }
    if !(request.t > 0.0 && request.t < 1.0) {
        return Err(Error::InvalidTimestep(request.t));
    }
    if request.guidance < 0.0 || !request.guidance.is_finite() {
        return Err(Error::InvalidInput(format!(
            "guidance must be finite and nonnegative, got {}",
            request.guidance
        )));
    }
    if predictor.applies_guidance() {
        return check_prediction(request, predictor.predict(request)?);
    }
    if request.guidance == 1.0 {
        return check_prediction(request, predictor.predict(request)?);
    }
    let uncond_req = PriorRequest {
        prompt: String::new(),
        ..request.clone()
    };
    let uncond = check_prediction(request, predictor.predict(&uncond_req)?)?;
    if request.guidance == 0.0 {
        return Ok(uncond);
    }
    let cond = check_prediction(request, predictor.predict(request)?)?;
    let w = T::fr(request.guidance);
    let mut eps_hat = uncond.eps_hat;
    for (u, c) in eps_hat.data.iter_mut().zip(cond.eps_hat.data.iter()) {
        *u = *u + w * (*c - *u);
    }
    Ok(NoisePrediction { eps_hat })
}

/// Where a Gaussian predictor's mode comes from.
#[derive(Debug, Clone)]
pub enum MuSource<T> {
    /// Single gray level replicated over all pixels and channels.
    Constant(f64),
    /// One mode image shared by every request (resampled to fit).
    Single(Image<T>),
    /// One mode image per view; requests must carry a view index.
    PerView(Vec<Image<T>>),
}

/// Exact optimal denoiser for the prior N(mu, s^2 I):
/// eps_hat = sqrt(1-ab) (z_t - sqrt(ab) mu) / (ab s^2 + 1 - ab).
/// Pure; ignores prompt and mask.
#[derive(Debug, Clone)]
pub struct GaussianPredictor<T> {
    pub mu: MuSource<T>,
    pub s2: f64,
    pub schedule: DiffusionSchedule,
}

impl<T: Real> GaussianPredictor<T> {
    pub fn new(mu: MuSource<T>, s2: f64) -> Result<Self> {
        if s2 < 0.0 {
            return Err(Error::InvalidInput(format!(
                "variance must be nonnegative, got {s2}"
            )));
        }
        Ok(GaussianPredictor {
            mu,
            s2,
            schedule: DiffusionSchedule,
        })
    }

    fn mode_for(&self, request: &PriorRequest<T>) -> Result<Image<T>> {
        let fit = |img: &Image<T>| -> Result<Image<T>> {
            if img.channels != request.z_t.channels {
                return Err(Error::ShapeMismatch(format!(
                    "mode image has {} channels, request has {}",
                    img.channels, request.z_t.channels
                )));
            }
            if img.height == request.z_t.height && img.width == request.z_t.width {
                Ok(img.clone())
            } else {
                Ok(resample_bilinear(img, request.z_t.height, request.z_t.width))
            }
        };
        match &self.mu {
            MuSource::Constant(v) => Ok(Image::filled(
                request.z_t.height,
                request.z_t.width,
                request.z_t.channels,
                T::fr(*v),
            )),
            MuSource::Single(img) => fit(img),
            MuSource::PerView(views) => {
                let i = request.view.ok_or_else(|| {
                    Error::InvalidInput("per-view prior requires a view index".into())
                })?;
                let img = views.get(i).ok_or_else(|| {
                    Error::InvalidInput(format!("view index {i} out of range"))
                })?;
                fit(img)
            }
        }
    }
}

impl<T: Real> NoisePredictor<T> for GaussianPredictor<T> {
    fn predict(&self, request: &PriorRequest<T>) -> Result<NoisePrediction<T>> {
        let ab = self.schedule.alpha_bar(request.t)?;
        let mu = self.mode_for(request)?;
        let sa = T::fr(ab.sqrt());
        let num = T::fr((1.0 - ab).sqrt());
        let den = T::fr(ab * self.s2 + 1.0 - ab);
        let mut eps_hat = request.z_t.clone();
        for (z, m) in eps_hat.data.iter_mut().zip(mu.data.iter()) {
            *z = num * (*z - sa * *m) / den;
        }
        Ok(NoisePrediction { eps_hat })
    }
}

/// Scalar mixture component N(mu, s^2) with weight pi, applied per pixel.
#[derive(Debug, Clone, Copy)]
pub struct MixtureComponent {
    pub weight: f64,
    pub mu: f64,
    pub s2: f64,
}

/// Optimal denoiser for a per-pixel finite Gaussian mixture prior:
/// responsibility-weighted combination of per-component Gaussian predictions.
#[derive(Debug, Clone)]
pub struct MixtureGaussianPredictor {
    pub components: Vec<MixtureComponent>,
    pub schedule: DiffusionSchedule,
}

impl MixtureGaussianPredictor {
    pub fn new(components: Vec<MixtureComponent>) -> Result<Self> {
        if components.is_empty() {
            return Err(Error::InvalidInput("mixture needs components".into()));
        }
        if components
            .iter()
            .any(|c| c.weight <= 0.0 || c.s2 < 0.0)
        {
            return Err(Error::InvalidInput(
                "mixture weights must be positive and variances nonnegative".into(),
            ));
        }
        Ok(MixtureGaussianPredictor {
            components,
            schedule: DiffusionSchedule,
        })
    }

    /// Scalar noise prediction at one pixel value.
    pub fn predict_scalar(&self, z: f64, t: f64) -> Result<f64> {
        let ab = self.schedule.alpha_bar(t)?;
        let sa = ab.sqrt();
        // z_t ~ sum_k pi_k N(sqrt(ab) mu_k, ab s_k^2 + 1 - ab)
        let mut log_liks = Vec::with_capacity(self.components.len());
        for c in &self.components {
            let var = ab * c.s2 + 1.0 - ab;
            let d = z - sa * c.mu;
            log_liks.push(c.weight.ln() - 0.5 * (d * d / var + var.ln()));
        }
        let max = log_liks.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        let mut eps = 0.0;
        for (c, &ll) in self.components.iter().zip(log_liks.iter()) {
            let r = (ll - max).exp();
            let var = ab * c.s2 + 1.0 - ab;
            total += r;
            eps += r * (1.0 - ab).sqrt() * (z - sa * c.mu) / var;
        }
        Ok(eps / total)
    }
}

impl<T: Real> NoisePredictor<T> for MixtureGaussianPredictor {
    fn predict(&self, request: &PriorRequest<T>) -> Result<NoisePrediction<T>> {
        let mut eps_hat = request.z_t.clone();
        for v in eps_hat.data.iter_mut() {
            *v = T::fr(self.predict_scalar(v.to_f64_(), request.t)?);
        }
        Ok(NoisePrediction { eps_hat })
    }
}

// -- wire helpers (base64 of little-endian f32, row-major H,W,C) --

pub(crate) fn b64_encode_f32(data: &[f32]) -> String {
    let mut bytes = Vec::with_capacity(data.len() * 4);
    for v in data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    base64::engine::general_purpose::STANDARD.encode(bytes)
}

pub(crate) fn b64_decode_f32(s: &str, expected: usize) -> Result<Vec<f32>> {
    let bytes = base64::engine::general_purpose::STANDARD
        .decode(s)
        .map_err(|e| Error::Protocol(format!("invalid base64: {e}")))?;
    if bytes.len() != expected * 4 {
        return Err(Error::Protocol(format!(
            "expected {} float bytes, got {}",
            expected * 4,
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

pub(crate) fn b64_encode_mask(mask: &Mask) -> String {
    let bytes: Vec<u8> = mask.data.iter().map(|&b| b as u8).collect();
    base64::engine::general_purpose::STANDARD.encode(bytes)
}

pub(crate) fn b64_decode_mask(s: &str, height: usize, width: usize) -> Result<Mask> {
    let bytes = base64::engine::general_purpose::STANDARD
        .decode(s)
        .map_err(|e| Error::Protocol(format!("invalid base64: {e}")))?;
    if bytes.len() != height * width {
        return Err(Error::Protocol(format!(
            "expected {} mask bytes, got {}",
            height * width,
            bytes.len()
        )));
    }
    let mut mask = Mask::new_false(height, width);
    for (m, &b) in mask.data.iter_mut().zip(bytes.iter()) {
        *m = b != 0;
    }
    Ok(mask)
}

/// JSON body of POST {endpoint}/v1/denoise.
#[derive(Debug, serde::Serialize, serde::Deserialize)]
pub struct WireRequest {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub z_t: String,
    pub mask: String,
    pub prompt: String,
    pub t: f64,
    pub guidance: f64,
}

#[derive(Debug, serde::Serialize, serde::Deserialize)]
pub struct WireResponse {
    pub eps_hat: String,
}
