//! The trainable radiance field: positional encodings, a small MLP mapping
//! (encoded position, encoded direction) to (color, density), reverse-mode
//! parameter gradients, and checkpoint persistence.

use crate::error::{Error, Result};
use crate::math::{norm3, normalize3, scale3, Real, V3};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::io::{Read, Write};
use std::path::Path;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SDSF";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Sinusoidal positional encoding: [x?, sin(2^0 pi x), cos(2^0 pi x), ...,
/// sin(2^{L-1} pi x), cos(2^{L-1} pi x)], interleaved per frequency.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PositionalEncoding {
    pub num_frequencies: usize,
    pub include_input: bool,
}

impl PositionalEncoding {
    pub fn output_dim(&self, input_dim: usize) -> usize {
        input_dim * (2 * self.num_frequencies + usize::from(self.include_input))
    }

    pub fn encode<T: Real>(&self, x: &[T]) -> Result<Vec<T>> {
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(
                "non-finite input to positional encoding".into(),
            ));
        }
        let mut out = Vec::with_capacity(self.output_dim(x.len()));
        if self.include_input {
            out.extend_from_slice(x);
        }
        let pi = T::fr(std::f64::consts::PI);
        for l in 0..self.num_frequencies {
            let freq = T::fr((1u64 << l) as f64) * pi;
            for &v in x {
                out.push((freq * v).sin());
            }
            for &v in x {
                out.push((freq * v).cos());
            }
        }
        Ok(out)
    }

    /// Accumulates d(upstream . encode(x))/dx into `grad_x`.
    pub fn backprop<T: Real>(&self, x: &[T], upstream: &[T], grad_x: &mut [T]) {
        debug_assert_eq!(upstream.len(), self.output_dim(x.len()));
        let n = x.len();
        let mut off = 0;
        if self.include_input {
            for i in 0..n {
                grad_x[i] = grad_x[i] + upstream[i];
            }
            off = n;
        }
        let pi = T::fr(std::f64::consts::PI);
        for l in 0..self.num_frequencies {
            let freq = T::fr((1u64 << l) as f64) * pi;
            for i in 0..n {
                grad_x[i] = grad_x[i] + upstream[off + i] * freq * (freq * x[i]).cos();
            }
            for i in 0..n {
                grad_x[i] = grad_x[i] - upstream[off + n + i] * freq * (freq * x[i]).sin();
            }
            off += 2 * n;
        }
    }
}

/// Architecture descriptor: an MLP trunk on encoded positions feeding a
/// density head and, joined with the encoded direction, a color head.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FieldArch {
    pub position_frequencies: usize,
    pub direction_frequencies: usize,
    pub include_input: bool,
    pub trunk_depth: usize,
    pub trunk_width: usize,
    pub color_width: usize,
}

impl Default for FieldArch {
    fn default() -> Self {
        FieldArch {
            position_frequencies: 8,
            direction_frequencies: 4,
            include_input: true,
            trunk_depth: 4,
            trunk_width: 128,
            color_width: 64,
        }
    }
}

impl FieldArch {
    /// A small architecture for tests and fast desk-scale runs.
    pub fn tiny() -> Self {
        FieldArch {
            position_frequencies: 4,
            direction_frequencies: 2,
            include_input: true,
            trunk_depth: 2,
            trunk_width: 32,
            color_width: 16,
        }
    }

    /// Between [`FieldArch::default`] and [`FieldArch::tiny`]: full-resolution
    /// positional encoding on a narrow trunk.
    pub fn small() -> Self {
        FieldArch {
            position_frequencies: 8,
            direction_frequencies: 2,
            include_input: true,
            trunk_depth: 2,
            trunk_width: 48,
            color_width: 16,
        }
    }

    pub fn position_encoding(&self) -> PositionalEncoding {
        PositionalEncoding {
            num_frequencies: self.position_frequencies,
            include_input: self.include_input,
        }
    }

    pub fn direction_encoding(&self) -> PositionalEncoding {
        PositionalEncoding {
            num_frequencies: self.direction_frequencies,
            include_input: self.include_input,
        }
    }

    pub fn pos_dim(&self) -> usize {
        self.position_encoding().output_dim(3)
    }

    pub fn dir_dim(&self) -> usize {
        self.direction_encoding().output_dim(3)
    }

    /// Linear layers as (in, out) pairs, in parameter order: trunk layers,
    /// density head, color hidden, color output.
    pub fn layers(&self) -> Vec<(usize, usize)> {
        let mut l = Vec::new();
        let mut prev = self.pos_dim();
        for _ in 0..self.trunk_depth {
            l.push((prev, self.trunk_width));
            prev = self.trunk_width;
        }
        l.push((self.trunk_width, 1)); // density head
        l.push((self.trunk_width + self.dir_dim(), self.color_width));
        l.push((self.color_width, 3));
        l
    }

    pub fn num_params(&self) -> usize {
        self.layers().iter().map(|&(i, o)| o * (i + 1)).sum()
    }

    /// Flat u32 descriptor used in the checkpoint format.
    pub fn descriptor(&self) -> Vec<u32> {
        vec![
            self.position_frequencies as u32,
            self.direction_frequencies as u32,
            u32::from(self.include_input),
            self.trunk_depth as u32,
            self.trunk_width as u32,
            self.color_width as u32,
        ]
    }

    pub fn from_descriptor(d: &[u32]) -> Result<Self> {
        if d.len() != 6 {
            return Err(Error::InvalidInput(format!(
                "architecture descriptor must have 6 entries, got {}",
                d.len()
            )));
        }
        Ok(FieldArch {
            position_frequencies: d[0] as usize,
            direction_frequencies: d[1] as usize,
            include_input: d[2] != 0,
            trunk_depth: d[3] as usize,
            trunk_width: d[4] as usize,
            color_width: d[5] as usize,
        })
    }
}

/// One field evaluation: color in [0,1]^3 and nonnegative density.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FieldSample<T> {
    pub color: V3<T>,
    pub density: T,
}

/// Intermediate activations retained for reverse-mode backprop.
#[derive(Debug, Clone)]
pub struct EvalCache<T> {
    position: V3<T>,
    enc_pos: Vec<T>,
    enc_dir: Vec<T>,
    /// Post-ReLU activations of each trunk layer.
    trunk: Vec<Vec<T>>,
    sigma_pre: T,
    color_hidden: Vec<T>,
    color: V3<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RadianceField<T> {
    pub arch: FieldArch,
    pub theta: Vec<T>,
}

fn softplus<T: Real>(x: T) -> T {
    x.max(T::zero()) + (T::one() + (-x.abs()).exp()).ln()
}

fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

impl<T: Real> RadianceField<T> {
    /// Seeded initialization, uniform in +-1/sqrt(fan_in) per layer.
    pub fn init(arch: FieldArch, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut theta = Vec::with_capacity(arch.num_params());
        for (fan_in, fan_out) in arch.layers() {
            let bound = 1.0 / (fan_in as f64).sqrt();
            for _ in 0..fan_out * (fan_in + 1) {
                theta.push(T::fr(rng.gen_range(-bound..bound)));
            }
        }
        RadianceField { arch, theta }
    }

    pub fn zeros(arch: FieldArch) -> Self {
        let n = arch.num_params();
        RadianceField {
            arch,
            theta: vec![T::zero(); n],
        }
    }

    fn layer_offsets(&self) -> Vec<usize> {
        let mut offs = Vec::new();
        let mut off = 0;
        for (fan_in, fan_out) in self.arch.layers() {
            offs.push(off);
            off += fan_out * (fan_in + 1);
        }
        offs
    }

    /// y = W x + b for the layer starting at `off` with the given shape.
    fn linear(&self, off: usize, fan_in: usize, fan_out: usize, x: &[T]) -> Vec<T> {
        let w = &self.theta[off..off + fan_out * fan_in];
        let b = &self.theta[off + fan_out * fan_in..off + fan_out * (fan_in + 1)];
        let mut y = Vec::with_capacity(fan_out);
        for o in 0..fan_out {
            let row = &w[o * fan_in..(o + 1) * fan_in];
            let mut acc = b[o];
            for i in 0..fan_in {
                acc = acc + row[i] * x[i];
            }
            y.push(acc);
        }
        y
    }

    /// Accumulates layer gradients and returns the input gradient.
    fn linear_backprop(
        &self,
        off: usize,
        fan_in: usize,
        fan_out: usize,
        x: &[T],
        dy: &[T],
        grad_theta: &mut [T],
    ) -> Vec<T> {
        let w = &self.theta[off..off + fan_out * fan_in];
        let mut dx = vec![T::zero(); fan_in];
        for o in 0..fan_out {
            let g = dy[o];
            if g == T::zero() {
                continue;
            }
            let row_off = off + o * fan_in;
            for i in 0..fan_in {
                grad_theta[row_off + i] = grad_theta[row_off + i] + g * x[i];
                dx[i] = dx[i] + g * w[o * fan_in + i];
            }
            let b_idx = off + fan_out * fan_in + o;
            grad_theta[b_idx] = grad_theta[b_idx] + g;
        }
        dx
    }

    fn validate_direction(d: V3<T>) -> Result<()> {
        let n = norm3(d).to_f64_();
        if (n - 1.0).abs() > 1e-3 {
            return Err(Error::InvalidInput(format!(
                "direction must be unit length, |d| = {n}"
            )));
        }
        Ok(())
    }

    /// Forward evaluation retaining the cache needed by [`Self::backprop`].
    pub fn eval_cached(&self, p: V3<T>, d: V3<T>) -> Result<(FieldSample<T>, EvalCache<T>)> {
        Self::validate_direction(d)?;
        let enc_pos = self.arch.position_encoding().encode(&p)?;
        let enc_dir = self.arch.direction_encoding().encode(&d)?;
        let offs = self.layer_offsets();
        let layers = self.arch.layers();

        let mut trunk = Vec::with_capacity(self.arch.trunk_depth);
        let mut cur = enc_pos.clone();
        for l in 0..self.arch.trunk_depth {
            let (fi, fo) = layers[l];
            let mut h = self.linear(offs[l], fi, fo, &cur);
            for v in h.iter_mut() {
                *v = v.max(T::zero());
            }
            trunk.push(h.clone());
            cur = h;
        }
        let sigma_idx = self.arch.trunk_depth;
        let (fi, fo) = layers[sigma_idx];
        let sigma_pre = self.linear(offs[sigma_idx], fi, fo, &cur)[0];
        let density = softplus(sigma_pre);

        let mut color_in = cur.clone();
        color_in.extend_from_slice(&enc_dir);
        let ch_idx = sigma_idx + 1;
        let (fi, fo) = layers[ch_idx];
        let mut color_hidden = self.linear(offs[ch_idx], fi, fo, &color_in);
        for v in color_hidden.iter_mut() {
            *v = v.max(T::zero());
        }
        let co_idx = ch_idx + 1;
        let (fi, fo) = layers[co_idx];
        let pre = self.linear(offs[co_idx], fi, fo, &color_hidden);
        let color = [sigmoid(pre[0]), sigmoid(pre[1]), sigmoid(pre[2])];

        Ok((
            FieldSample { color, density },
            EvalCache {
                position: p,
                enc_pos,
                enc_dir,
                trunk,
                sigma_pre,
                color_hidden,
                color,
            },
        ))
    }

    pub fn eval(&self, p: V3<T>, d: V3<T>) -> Result<FieldSample<T>> {
        Ok(self.eval_cached(p, d)?.0)
    }

    /// Accumulates d(upstream_color . c + upstream_density * sigma)/d theta
    /// into `grad_theta` (flat, aligned with `self.theta`).
    pub fn backprop(
        &self,
        cache: &EvalCache<T>,
        upstream_color: V3<T>,
        upstream_density: T,
        grad_theta: &mut [T],
    ) {
        self.backprop_impl(cache, upstream_color, upstream_density, grad_theta, None);
    }

    /// As [`Self::backprop`], additionally accumulating the gradient with
    /// respect to the input position (density path and color path).
    pub fn backprop_with_position_grad(
        &self,
        cache: &EvalCache<T>,
        upstream_color: V3<T>,
        upstream_density: T,
        grad_theta: &mut [T],
        grad_p: &mut V3<T>,
    ) {
        self.backprop_impl(
            cache,
            upstream_color,
            upstream_density,
            grad_theta,
            Some(grad_p),
        );
    }

    fn backprop_impl(
        &self,
        cache: &EvalCache<T>,
        upstream_color: V3<T>,
        upstream_density: T,
        grad_theta: &mut [T],
        grad_p: Option<&mut V3<T>>,
    ) {
        let offs = self.layer_offsets();
        let layers = self.arch.layers();
        let depth = self.arch.trunk_depth;
        let last_hidden = &cache.trunk[depth - 1];

        // color output layer (sigmoid)
        let co_idx = depth + 2;
        let dpre_out: Vec<T> = (0..3)
            .map(|k| {
                let c = cache.color[k];
                upstream_color[k] * c * (T::one() - c)
            })
            .collect();
        let (fi, fo) = layers[co_idx];
        let dch = self.linear_backprop(
            offs[co_idx],
            fi,
            fo,
            &cache.color_hidden,
            &dpre_out,
            grad_theta,
        );

        // color hidden layer (ReLU); input = last trunk activation ++ enc_dir
        let ch_idx = depth + 1;
        let dch_pre: Vec<T> = dch
            .iter()
            .zip(cache.color_hidden.iter())
            .map(|(&g, &a)| if a > T::zero() { g } else { T::zero() })
            .collect();
        let mut color_in = last_hidden.clone();
        color_in.extend_from_slice(&cache.enc_dir);
        let (fi, fo) = layers[ch_idx];
        let dcolor_in = self.linear_backprop(offs[ch_idx], fi, fo, &color_in, &dch_pre, grad_theta);
        let mut dh_last: Vec<T> = dcolor_in[..self.arch.trunk_width].to_vec();

        // density head (softplus)
        let sigma_idx = depth;
        let dsig_pre = upstream_density * sigmoid(cache.sigma_pre);
        let (fi, fo) = layers[sigma_idx];
        let dh_sigma = self.linear_backprop(
            offs[sigma_idx],
            fi,
            fo,
            last_hidden,
            &[dsig_pre],
            grad_theta,
        );
        for (a, b) in dh_last.iter_mut().zip(dh_sigma.iter()) {
            *a = *a + *b;
        }

        // trunk, backwards
        let mut dh = dh_last;
        for l in (0..depth).rev() {
            let act = &cache.trunk[l];
            let dpre: Vec<T> = dh
                .iter()
                .zip(act.iter())
                .map(|(&g, &a)| if a > T::zero() { g } else { T::zero() })
                .collect();
            let input: &[T] = if l == 0 {
                &cache.enc_pos
            } else {
                &cache.trunk[l - 1]
            };
            let (fi, fo) = layers[l];
            dh = self.linear_backprop(offs[l], fi, fo, input, &dpre, grad_theta);
        }

        if let Some(gp) = grad_p {
            self.arch
                .position_encoding()
                .backprop(&cache.position, &dh, gp);
        }
    }

    /// Spatial gradient of the density with respect to the position.
    pub fn density_position_gradient(&self, p: V3<T>) -> Result<V3<T>> {
        // density does not depend on direction; any unit vector works
        let d = [T::zero(), T::zero(), T::one()];
        let (_, cache) = self.eval_cached(p, d)?;
        let mut grad_theta = vec![T::zero(); self.theta.len()];
        let mut grad_p = [T::zero(); 3];
        self.backprop_with_position_grad(
            &cache,
            [T::zero(); 3],
            T::one(),
            &mut grad_theta,
            &mut grad_p,
        );
        Ok(grad_p)
    }

    /// Unit normal -grad sigma / |grad sigma| from the density field.
    pub fn density_gradient_normal(&self, p: V3<T>) -> Result<V3<T>> {
        normal_from_density_gradient(self.density_position_gradient(p)?)
    }
}

/// Maps a density spatial gradient to the surface normal -g/|g|.
pub fn normal_from_density_gradient<T: Real>(g: V3<T>) -> Result<V3<T>> {
    let n = norm3(g);
    if n.to_f64_() < 1e-12 {
        return Err(Error::DegenerateNormal);
    }
    Ok(normalize3(scale3(g, -T::one())))
}

// ---------------------------------------------------------------------------
// Checkpoint I/O ("SDSF", version, arch descriptor, theta as f32 LE)
// ---------------------------------------------------------------------------

impl RadianceField<f32> {
    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        f.write_all(CHECKPOINT_MAGIC)?;
        f.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        let desc = self.arch.descriptor();
        f.write_all(&(desc.len() as u32).to_le_bytes())?;
        for v in &desc {
            f.write_all(&v.to_le_bytes())?;
        }
        f.write_all(&(self.theta.len() as u32).to_le_bytes())?;
        for v in &self.theta {
            f.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn load_checkpoint(path: &Path) -> Result<Self> {
        let mut raw = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut raw)?;
        let err = |offset: usize, message: &str| Error::Format {
            offset: offset as u64,
            message: message.to_string(),
        };
        let take4 = |off: usize| -> Result<[u8; 4]> {
            raw.get(off..off + 4)
                .map(|s| s.try_into().unwrap())
                .ok_or_else(|| err(off, "unexpected end of file"))
        };
        if raw.len() < 4 || &raw[0..4] != CHECKPOINT_MAGIC {
            return Err(err(0, "bad magic, expected \"SDSF\""));
        }
        let version = u32::from_le_bytes(take4(4)?);
        if version != CHECKPOINT_VERSION {
            return Err(err(4, &format!("unsupported version {version}")));
        }
        let ndesc = u32::from_le_bytes(take4(8)?) as usize;
        let mut off = 12;
        let mut desc = Vec::with_capacity(ndesc);
        for _ in 0..ndesc {
            desc.push(u32::from_le_bytes(take4(off)?));
            off += 4;
        }
        let arch = FieldArch::from_descriptor(&desc)
            .map_err(|e| err(12, &format!("bad architecture descriptor: {e}")))?;
        let nparams = u32::from_le_bytes(take4(off)?) as usize;
        if nparams != arch.num_params() {
            return Err(err(
                off,
                &format!(
                    "parameter count {nparams} does not match architecture ({})",
                    arch.num_params()
                ),
            ));
        }
        off += 4;
        let mut theta = Vec::with_capacity(nparams);
        for _ in 0..nparams {
            theta.push(f32::from_le_bytes(take4(off)?));
            off += 4;
        }
        if off != raw.len() {
            return Err(err(off, "trailing bytes after parameters"));
        }
        Ok(RadianceField { arch, theta })
    }
}
