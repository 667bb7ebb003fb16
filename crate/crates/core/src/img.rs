//! Planar image buffers, bilinear resampling with its transpose, and
//! PNG / PFM persistence.

use crate::error::{Error, Result};
use crate::math::Real;
use std::io::{Read, Write};
use std::path::Path;

/// Row-major H x W x C buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Image<T> {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<T>,
}

impl<T: Real> Image<T> {
    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Image {
            height,
            width,
            channels,
            data: vec![T::zero(); height * width * channels],
        }
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: T) -> Self {
        Image {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
        }
    }

    #[inline]
    pub fn idx(&self, y: usize, x: usize, c: usize) -> usize {
        (y * self.width + x) * self.channels + c
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize, c: usize) -> T {
        self.data[self.idx(y, x, c)]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: T) {
        let i = self.idx(y, x, c);
        self.data[i] = v;
    }

    pub fn pixel3(&self, y: usize, x: usize) -> [T; 3] {
        debug_assert!(self.channels == 3);
        let i = self.idx(y, x, 0);
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel3(&mut self, y: usize, x: usize, v: [T; 3]) {
        debug_assert!(self.channels == 3);
        let i = self.idx(y, x, 0);
        self.data[i] = v[0];
        self.data[i + 1] = v[1];
        self.data[i + 2] = v[2];
    }

    pub fn same_shape(&self, other: &Image<T>) -> bool {
        self.height == other.height && self.width == other.width && self.channels == other.channels
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Real>(&self) -> Image<U> {
        Image {
            height: self.height,
            width: self.width,
            channels: self.channels,
            data: self.data.iter().map(|v| U::fr(v.to_f64_())).collect(),
        }
    }
}

/// Boolean per-pixel mask, true = pixel belongs to the region.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<bool>,
}

impl Mask {
    pub fn new_false(height: usize, width: usize) -> Self {
        Mask {
            height,
            width,
            data: vec![false; height * width],
        }
    }

    pub fn new_true(height: usize, width: usize) -> Self {
        Mask {
            height,
            width,
            data: vec![true; height * width],
        }
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: bool) {
        self.data[y * self.width + x] = v;
    }

    pub fn count_true(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    /// Pixel coordinates (y, x) of all true pixels, row-major order.
    pub fn true_pixels(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for y in 0..self.height {
            for x in 0..self.width {
                if self.at(y, x) {
                    out.push((y, x));
                }
            }
        }
        out
    }

    /// Binary dilation with a Euclidean disk of the given radius (pixels).
    pub fn dilate(&self, radius: usize) -> Mask {
        if radius == 0 {
            return self.clone();
        }
        let r = radius as isize;
        let r2 = (radius * radius) as isize;
        let mut out = Mask::new_false(self.height, self.width);
        for y in 0..self.height as isize {
            for x in 0..self.width as isize {
                'search: for dy in -r..=r {
                    for dx in -r..=r {
                        if dy * dy + dx * dx > r2 {
                            continue;
                        }
                        let (sy, sx) = (y + dy, x + dx);
                        if sy >= 0
                            && sx >= 0
                            && (sy as usize) < self.height
                            && (sx as usize) < self.width
                            && self.at(sy as usize, sx as usize)
                        {
                            out.set(y as usize, x as usize, true);
                            break 'search;
                        }
                    }
                }
            }
        }
        out
    }

    /// True iff every true pixel of `other` is also true here.
    pub fn is_superset_of(&self, other: &Mask) -> bool {
        self.data
            .iter()
            .zip(other.data.iter())
            .all(|(a, b)| *a || !*b)
    }
}

/// Bilinear resample with half-pixel-centre alignment.
pub fn resample_bilinear<T: Real>(src: &Image<T>, dst_h: usize, dst_w: usize) -> Image<T> {
    let mut out = Image::zeros(dst_h, dst_w, src.channels);
    for_each_bilinear_tap(src.height, src.width, dst_h, dst_w, |dy, dx, sy, sx, w| {
        for c in 0..src.channels {
            let v = out.at(dy, dx, c) + src.at(sy, sx, c) * w;
            out.set(dy, dx, c, v);
        }
    });
    out
}

/// Transpose of [`resample_bilinear`]: scatters an upstream gradient on the
/// destination grid back onto the source grid.
pub fn resample_bilinear_backprop<T: Real>(
    upstream: &Image<T>,
    src_h: usize,
    src_w: usize,
) -> Image<T> {
    let mut out = Image::zeros(src_h, src_w, upstream.channels);
    for_each_bilinear_tap(
        src_h,
        src_w,
        upstream.height,
        upstream.width,
        |dy, dx, sy, sx, w| {
            for c in 0..upstream.channels {
                let v = out.at(sy, sx, c) + upstream.at(dy, dx, c) * w;
                out.set(sy, sx, c, v);
            }
        },
    );
    out
}

fn for_each_bilinear_tap<T: Real>(
    src_h: usize,
    src_w: usize,
    dst_h: usize,
    dst_w: usize,
    mut tap: impl FnMut(usize, usize, usize, usize, T),
) {
    let sy_scale = src_h as f64 / dst_h as f64;
    let sx_scale = src_w as f64 / dst_w as f64;
    for dy in 0..dst_h {
        let fy = ((dy as f64 + 0.5) * sy_scale - 0.5).clamp(0.0, (src_h - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(src_h - 1);
        let wy1 = fy - y0 as f64;
        for dx in 0..dst_w {
            let fx = ((dx as f64 + 0.5) * sx_scale - 0.5).clamp(0.0, (src_w - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(src_w - 1);
            let wx1 = fx - x0 as f64;
            tap(dy, dx, y0, x0, T::fr((1.0 - wy1) * (1.0 - wx1)));
            tap(dy, dx, y0, x1, T::fr((1.0 - wy1) * wx1));
            tap(dy, dx, y1, x0, T::fr(wy1 * (1.0 - wx1)));
            tap(dy, dx, y1, x1, T::fr(wy1 * wx1));
        }
    }
}

/// Downsample a mask: a destination pixel is true when any contributing
/// bilinear tap touches a true source pixel.
pub fn resample_mask(src: &Mask, dst_h: usize, dst_w: usize) -> Mask {
    let mut out = Mask::new_false(dst_h, dst_w);
    let src_f: Image<f32> = Image {
        height: src.height,
        width: src.width,
        channels: 1,
        data: src.data.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
    };
    for_each_bilinear_tap::<f32>(src.height, src.width, dst_h, dst_w, |dy, dx, sy, sx, w| {
        if w > 0.0 && src_f.at(sy, sx, 0) > 0.0 {
            out.set(dy, dx, true);
        }
    });
    out
}

// ---------------------------------------------------------------------------
// PNG
// ---------------------------------------------------------------------------

/// Load an 8-bit PNG as floats in [0,1] (3 channels).
pub fn read_png_rgb(path: &Path) -> Result<Image<f32>> {
    let img = image::open(path).map_err(|e| Error::Load {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    let rgb = img.to_rgb8();
    let (w, h) = rgb.dimensions();
    let data = rgb.as_raw().iter().map(|&b| b as f32 / 255.0).collect();
    Ok(Image {
        height: h as usize,
        width: w as usize,
        channels: 3,
        data,
    })
}

/// Write floats in [0,1] as an 8-bit PNG, rounding to nearest.
pub fn write_png_rgb(path: &Path, img: &Image<f32>) -> Result<()> {
    if img.channels != 3 {
        return Err(Error::ShapeMismatch(format!(
            "write_png_rgb expects 3 channels, got {}",
            img.channels
        )));
    }
    let bytes: Vec<u8> = img
        .data
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let buf = image::RgbImage::from_raw(img.width as u32, img.height as u32, bytes)
        .ok_or_else(|| Error::ShapeMismatch("png buffer size".into()))?;
    buf.save(path).map_err(|e| Error::Load {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

/// Load an 8-bit grayscale PNG as a boolean mask, threshold 128.
pub fn read_png_mask(path: &Path) -> Result<Mask> {
    let img = image::open(path).map_err(|e| Error::Load {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    let gray = img.to_luma8();
    let (w, h) = gray.dimensions();
    Ok(Mask {
        height: h as usize,
        width: w as usize,
        data: gray.as_raw().iter().map(|&b| b >= 128).collect(),
    })
}

pub fn write_png_mask(path: &Path, mask: &Mask) -> Result<()> {
    let bytes: Vec<u8> = mask.data.iter().map(|&b| if b { 255 } else { 0 }).collect();
    let buf = image::GrayImage::from_raw(mask.width as u32, mask.height as u32, bytes)
        .ok_or_else(|| Error::ShapeMismatch("mask buffer size".into()))?;
    buf.save(path).map_err(|e| Error::Load {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

// ---------------------------------------------------------------------------
// PFM (32-bit little-endian floats, bottom-up rows, scale -1.0)
// ---------------------------------------------------------------------------

pub fn write_pfm(path: &Path, img: &Image<f32>) -> Result<()> {
    let header = match img.channels {
        1 => "Pf",
        3 => "PF",
        n => {
            return Err(Error::ShapeMismatch(format!(
                "PFM supports 1 or 3 channels, got {n}"
            )))
        }
    };
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write!(f, "{header}\n{} {}\n-1.0\n", img.width, img.height)?;
    // bottom-up row order
    for y in (0..img.height).rev() {
        for x in 0..img.width {
            for c in 0..img.channels {
                f.write_all(&img.at(y, x, c).to_le_bytes())?;
            }
        }
    }
    Ok(())
}

pub fn read_pfm(path: &Path) -> Result<Image<f32>> {
    let mut raw = Vec::new();
    std::fs::File::open(path)
        .map_err(|e| Error::Load {
            path: path.display().to_string(),
            message: e.to_string(),
        })?
        .read_to_end(&mut raw)?;
    let load_err = |m: String| Error::Load {
        path: path.display().to_string(),
        message: m,
    };
    let mut pos = 0usize;
    let mut token = || -> Result<String> {
        while pos < raw.len() && raw[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < raw.len() && !raw[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(load_err("truncated PFM header".into()));
        }
        let s = String::from_utf8_lossy(&raw[start..pos]).to_string();
        pos += 1; // single whitespace after token
        Ok(s)
    };
    let magic = token()?;
    let channels = match magic.as_str() {
        "Pf" => 1,
        "PF" => 3,
        other => return Err(load_err(format!("bad PFM magic {other:?}"))),
    };
    let width: usize = token()?
        .parse()
        .map_err(|_| load_err("bad PFM width".into()))?;
    let height: usize = token()?
        .parse()
        .map_err(|_| load_err("bad PFM height".into()))?;
    let scale: f32 = token()?
        .parse()
        .map_err(|_| load_err("bad PFM scale".into()))?;
    let little_endian = scale < 0.0;
    let need = width * height * channels * 4;
    if raw.len() < pos + need {
        return Err(load_err(format!(
            "PFM payload too short: need {need} bytes, have {}",
            raw.len() - pos
        )));
    }
    let mut img = Image::zeros(height, width, channels);
    let mut off = pos;
    for y in (0..height).rev() {
        for x in 0..width {
            for c in 0..channels {
                let b: [u8; 4] = raw[off..off + 4].try_into().unwrap();
                let v = if little_endian {
                    f32::from_le_bytes(b)
                } else {
                    f32::from_be_bytes(b)
                };
                img.set(y, x, c, v);
                off += 4;
            }
        }
    }
    Ok(img)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pfm_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let mut img = Image::<f32>::zeros(5, 7, 1);
        for (i, v) in img.data.iter_mut().enumerate() {
            *v = (i as f32).sin() * 1e3;
        }
        let path = dir.path().join("d.pfm");
        write_pfm(&path, &img).unwrap();
        let back = read_pfm(&path).unwrap();
        assert_eq!(img.data, back.data);
        assert_eq!((back.height, back.width, back.channels), (5, 7, 1));
    }

    #[test]
    fn png_round_trip_is_exact_on_quantized_values() {
        let dir = tempfile::tempdir().unwrap();
        let mut img = Image::<f32>::zeros(4, 4, 3);
        for (i, v) in img.data.iter_mut().enumerate() {
            *v = ((i * 17) % 256) as f32 / 255.0;
        }
        let path = dir.path().join("c.png");
        write_png_rgb(&path, &img).unwrap();
        let back = read_png_rgb(&path).unwrap();
        for (a, b) in img.data.iter().zip(back.data.iter()) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn mask_round_trip_and_dilate_superset() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = Mask::new_false(9, 9);
        m.set(4, 4, true);
        let path = dir.path().join("m.png");
        write_png_mask(&path, &m).unwrap();
        let back = read_png_mask(&path).unwrap();
        assert_eq!(m, back);
        let d = m.dilate(2);
        assert!(d.is_superset_of(&m));
        assert!(d.at(4, 6) && d.at(6, 4) && !d.at(6, 6));
        assert_eq!(d.count_true(), 13);
    }

    #[test]
    fn bilinear_identity_when_same_size() {
        let mut img = Image::<f64>::zeros(3, 5, 2);
        for (i, v) in img.data.iter_mut().enumerate() {
            *v = i as f64 * 0.1;
        }
        let out = resample_bilinear(&img, 3, 5);
        for (a, b) in img.data.iter().zip(out.data.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn resample_transpose_matches_dot_product_identity() {
        // <R x, u> == <x, R^T u> for random-ish x, u.
        let mut x = Image::<f64>::zeros(6, 6, 1);
        let mut u = Image::<f64>::zeros(3, 3, 1);
        for (i, v) in x.data.iter_mut().enumerate() {
            *v = ((i * 37 % 11) as f64) / 11.0;
        }
        for (i, v) in u.data.iter_mut().enumerate() {
            *v = ((i * 13 % 7) as f64) / 7.0;
        }
        let rx = resample_bilinear(&x, 3, 3);
        let rtu = resample_bilinear_backprop(&u, 6, 6);
        let lhs: f64 = rx.data.iter().zip(u.data.iter()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data.iter().zip(rtu.data.iter()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
