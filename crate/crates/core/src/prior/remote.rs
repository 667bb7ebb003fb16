//! HTTP client for a remote denoiser speaking the /v1/denoise wire protocol.

use std::time::Duration;

use crate::error::{Error, Result};
use crate::img::Image;
use crate::math::Real;

use super::{
    b64_decode_f32, b64_encode_f32, b64_encode_mask, NoisePrediction, NoisePredictor,
    PriorRequest, WireRequest, WireResponse,
};

/// Remote noise predictor. Guidance is carried on the wire and applied by the
/// server, so [`super::predict_noise_cfg`] issues exactly one call.
pub struct RemotePredictor {
    endpoint: String,
    agent: ureq::Agent,
    retries: usize,
}

impl RemotePredictor {
    pub fn new(endpoint: &str, timeout: Duration, retries: usize) -> Self {
        let agent = ureq::AgentBuilder::new()
            .timeout_connect(timeout)
            .timeout(timeout)
            .build();
        RemotePredictor {
            endpoint: endpoint.trim_end_matches('/').to_string(),
            agent,
            retries,
        }
    }

    fn call(&self, body: &str) -> Result<String> {
        let url = format!("{}/v1/denoise", self.endpoint);
        let mut last_err = String::new();
        for _ in 0..=self.retries {
            match self
                .agent
                .post(&url)
                .set("content-type", "application/json")
                .send_string(body)
            {
                Ok(resp) => {
                    return resp
                        .into_string()
                        .map_err(|e| Error::Protocol(format!("unreadable response body: {e}")));
                }
                Err(ureq::Error::Status(code, resp)) if (400..500).contains(&code) => {
                    // malformed request per the protocol; retrying cannot help
                    let detail = resp.into_string().unwrap_or_default();
                    return Err(Error::Protocol(format!(
                        "server rejected request with status {code}: {detail}"
                    )));
                }
                Err(ureq::Error::Status(code, _)) => {
                    last_err = format!("server returned status {code}");
                }
                Err(ureq::Error::Transport(t)) => {
                    last_err = format!("transport error: {t}");
                }
            }
        }
        Err(Error::PriorUnavailable(format!(
            "{url} failed after {} attempts: {last_err}",
            self.retries + 1
        )))
    }
}

impl<T: Real> NoisePredictor<T> for RemotePredictor {
    fn predict(&self, request: &PriorRequest<T>) -> Result<NoisePrediction<T>> {
        let z_t: Vec<f32> = request.z_t.data.iter().map(|v| v.to_f64_() as f32).collect();
        let wire = WireRequest {
            height: request.z_t.height,
            width: request.z_t.width,
            channels: request.z_t.channels,
            z_t: b64_encode_f32(&z_t),
            mask: b64_encode_mask(&request.mask),
            prompt: request.prompt.clone(),
            t: request.t,
            guidance: request.guidance,
        };
        let body = serde_json::to_string(&wire)
            .map_err(|e| Error::Protocol(format!("request serialization failed: {e}")))?;
        let resp = self.call(&body)?;
        let parsed: WireResponse = serde_json::from_str(&resp)
            .map_err(|e| Error::Protocol(format!("malformed response JSON: {e}")))?;
        let n = request.z_t.data.len();
        let floats = b64_decode_f32(&parsed.eps_hat, n)?;
        let mut eps_hat = Image::zeros(
            request.z_t.height,
            request.z_t.width,
            request.z_t.channels,
        );
        for (o, v) in eps_hat.data.iter_mut().zip(floats.iter()) {
            *o = T::fr(*v as f64);
        }
        if !eps_hat.all_finite() {
            return Err(Error::Protocol("non-finite values in response".into()));
        }
        Ok(NoisePrediction { eps_hat })
    }

    fn applies_guidance(&self) -> bool {
        true
    }
}
