//! Mock denoiser HTTP server for loopback testing: serves the /v1/denoise
//! wire protocol backed by an in-process predictor at 32-bit precision.

use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

use crate::error::{Error, Result};
use crate::img::Image;

use super::{
    b64_decode_f32, b64_decode_mask, b64_encode_f32, predict_noise_cfg, NoisePredictor,
    PriorRequest, WireRequest, WireResponse,
};

pub struct MockPriorServer {
    addr: std::net::SocketAddr,
    shutdown: Arc<AtomicBool>,
    handle: Option<JoinHandle<()>>,
}

fn handle_body(
    predictor: &dyn NoisePredictor<f32>,
    body: &str,
) -> std::result::Result<String, String> {
    let wire: WireRequest =
        serde_json::from_str(body).map_err(|e| format!("malformed JSON: {e}"))?;
    if wire.height == 0 || wire.width == 0 || wire.channels == 0 {
        return Err("zero-sized image".into());
    }
    let n = wire.height * wire.width * wire.channels;
    let floats = b64_decode_f32(&wire.z_t, n).map_err(|e| e.to_string())?;
    let mask =
        b64_decode_mask(&wire.mask, wire.height, wire.width).map_err(|e| e.to_string())?;
    let mut z_t = Image::<f32>::zeros(wire.height, wire.width, wire.channels);
    z_t.data.copy_from_slice(&floats);
    let request = PriorRequest {
        z_t,
        mask,
        prompt: wire.prompt,
        t: wire.t,
        guidance: wire.guidance,
        view: None,
    };
    // guidance composition happens here so remote and in-process paths share
    // the exact same arithmetic
    let prediction = predict_noise_cfg(predictor, &request).map_err(|e| e.to_string())?;
    let resp = WireResponse {
        eps_hat: b64_encode_f32(&prediction.eps_hat.data),
    };
    serde_json::to_string(&resp).map_err(|e| e.to_string())
}

fn serve(
    server: tiny_http::Server,
    predictor: Arc<dyn NoisePredictor<f32>>,
    shutdown: Arc<AtomicBool>,
) {
    while !shutdown.load(Ordering::Relaxed) {
        let Ok(Some(mut request)) = server.recv_timeout(Duration::from_millis(50)) else {
            continue;
        };
        let ok_route = request.method() == &tiny_http::Method::Post
            && request.url() == "/v1/denoise";
        let response = if !ok_route {
            tiny_http::Response::from_string("not found").with_status_code(404)
        } else {
            let mut body = String::new();
            if request.as_reader().read_to_string(&mut body).is_err() {
                tiny_http::Response::from_string("unreadable body").with_status_code(400)
            } else {
                match handle_body(predictor.as_ref(), &body) {
                    Ok(json) => tiny_http::Response::from_string(json).with_header(
                        tiny_http::Header::from_bytes(
                            &b"Content-Type"[..],
                            &b"application/json"[..],
                        )
                        .unwrap(),
                    ),
                    Err(msg) => tiny_http::Response::from_string(msg).with_status_code(400),
                }
            }
        };
        let _ = request.respond(response);
    }
}

impl MockPriorServer {
    /// Bind and serve on a background thread. Use port 0 for an ephemeral
    /// port; the actual address is available via [`Self::endpoint`].
    pub fn start(bind: &str, predictor: Arc<dyn NoisePredictor<f32>>) -> Result<Self> {
        let server = tiny_http::Server::http(bind)
            .map_err(|e| Error::PriorUnavailable(format!("bind {bind} failed: {e}")))?;
        let addr = match server.server_addr() {
            tiny_http::ListenAddr::IP(a) => a,
            other => {
                return Err(Error::PriorUnavailable(format!(
                    "unsupported listen address {other:?}"
                )))
            }
        };
        let shutdown = Arc::new(AtomicBool::new(false));
        let flag = shutdown.clone();
        let handle = std::thread::spawn(move || serve(server, predictor, flag));
        Ok(MockPriorServer {
            addr,
            shutdown,
            handle: Some(handle),
        })
    }

    pub fn endpoint(&self) -> String {
        format!("http://{}", self.addr)
    }

    /// Block the calling thread until the process exits (CLI mode).
    pub fn join(mut self) {
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

impl Drop for MockPriorServer {
    fn drop(&mut self) {
        self.shutdown.store(true, Ordering::Relaxed);
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}
