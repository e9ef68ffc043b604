//! Single-channel intensity images and separable Gaussian filtering.

use std::io::Cursor;
use std::path::Path;

use image::{ImageFormat, Luma};

use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::tensor::Tensor;

/// Smallest accepted height or width.
pub const MIN_SIDE: usize = 16;

/// Row-major intensity grid with pixels in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct GrayImage {
    height: usize,
    width: usize,
    pixels: Vec<f64>,
    resolution_m_per_px: f64,
}

impl GrayImage {
    pub fn new(height: usize, width: usize, pixels: Vec<f64>, resolution_m_per_px: f64) -> Result<Self> {
        if height < MIN_SIDE || width < MIN_SIDE {
            return Err(Error::arg(format!("image {height}x{width} is smaller than {MIN_SIDE}x{MIN_SIDE}")));
        }
        if pixels.len() != height * width {
            return Err(Error::arg(format!("{} pixels for a {height}x{width} image", pixels.len())));
        }
        if let Some(p) = pixels.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::arg(format!("pixel value {p} outside [0, 1]")));
        }
        if !(resolution_m_per_px > 0.0 && resolution_m_per_px.is_finite()) {
            return Err(Error::arg(format!("resolution must be positive, got {resolution_m_per_px}")));
        }
        Ok(GrayImage { height, width, pixels, resolution_m_per_px })
    }

    /// Builds an image from arbitrary values, clamping them into `[0, 1]`.
    pub fn from_clamped(height: usize, width: usize, mut pixels: Vec<f64>, resolution_m_per_px: f64) -> Result<Self> {
        pixels.iter_mut().for_each(|p| *p = if p.is_nan() { 0.0 } else { p.clamp(0.0, 1.0) });
        Self::new(height, width, pixels, resolution_m_per_px)
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Result<Self> {
        Self::new(height, width, vec![value; height * width], 1.0)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn resolution(&self) -> f64 {
        self.resolution_m_per_px
    }

    pub fn with_resolution(mut self, resolution_m_per_px: f64) -> Result<Self> {
        if !(resolution_m_per_px > 0.0 && resolution_m_per_px.is_finite()) {
            return Err(Error::arg(format!("resolution must be positive, got {resolution_m_per_px}")));
        }
        self.resolution_m_per_px = resolution_m_per_px;
        Ok(self)
    }

    /// Pixel at row `y`, column `x`.
    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.pixels[y * self.width + x]
    }

    /// `[1, 1, H, W]` tensor view for the encoder.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new([1, 1, self.height, self.width], self.pixels.clone()).expect("valid image shape")
    }

    pub fn to_u8(&self) -> Vec<u8> {
        self.pixels.iter().map(|p| (p * 255.0).round() as u8).collect()
    }

    pub fn from_u8(height: usize, width: usize, bytes: &[u8], resolution_m_per_px: f64) -> Result<Self> {
        Self::new(height, width, bytes.iter().map(|&b| b as f64 / 255.0).collect(), resolution_m_per_px)
    }

    /// Reads an 8-bit single-channel PGM or PNG (multi-channel input is converted to luma).
    pub fn load(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|e| Error::Data(format!("cannot read image {}: {e}", path.display())))?;
        let luma = img.to_luma8();
        let (w, h) = luma.dimensions();
        Self::from_u8(h as usize, w as usize, luma.as_raw(), 1.0)
            .map_err(|e| Error::Data(format!("{}: {e}", path.display())))
    }

    /// Writes 8-bit PGM (`.pgm`) or PNG (`.png`), atomically.
    pub fn save(&self, path: &Path) -> Result<()> {
        let format = match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
            Some("pgm") => ImageFormat::Pnm,
            Some("png") => ImageFormat::Png,
            _ => return Err(Error::arg(format!("unsupported image extension: {}", path.display()))),
        };
        let buf = image::ImageBuffer::<Luma<u8>, _>::from_raw(self.width as u32, self.height as u32, self.to_u8())
            .expect("buffer matches dimensions");
        let mut bytes = Cursor::new(Vec::new());
        buf.write_to(&mut bytes, format)
            .map_err(|e| Error::Data(format!("cannot encode {}: {e}", path.display())))?;
        write_atomic(path, bytes.get_ref())
    }

    /// Sub-rectangle starting at row `y0`, column `x0`.
    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<Self> {
        if y0 + h > self.height || x0 + w > self.width {
            return Err(Error::arg(format!(
                "crop {h}x{w} at ({y0},{x0}) exceeds {}x{}",
                self.height, self.width
            )));
        }
        let mut px = Vec::with_capacity(h * w);
        for y in y0..y0 + h {
            px.extend_from_slice(&self.pixels[y * self.width + x0..y * self.width + x0 + w]);
        }
        Self::new(h, w, px, self.resolution_m_per_px)
    }

    /// Bilinear resampling to `h×w` (pixel-center aligned). Resolution scales accordingly.
    pub fn resize(&self, h: usize, w: usize) -> Result<Self> {
        if h == self.height && w == self.width {
            return Ok(self.clone());
        }
        let px = resize_plane(&self.pixels, self.height, self.width, h, w);
        let res = self.resolution_m_per_px * self.width as f64 / w as f64;
        Self::from_clamped(h, w, px, res)
    }

    pub fn flip_horizontal(&self) -> Self {
        let mut px = self.pixels.clone();
        px.chunks_mut(self.width).for_each(<[f64]>::reverse);
        GrayImage { pixels: px, ..self.clone() }
    }

    /// Quarter turn counter-clockwise: pixel `(y, x)` moves to `(W-1-x, y)`.
    pub fn rotate90(&self) -> Self {
        let (h, w) = (self.height, self.width);
        let mut px = vec![0.0; h * w];
        for y in 0..h {
            for x in 0..w {
                px[(w - 1 - x) * h + y] = self.pixels[y * w + x];
            }
        }
        GrayImage { height: w, width: h, pixels: px, resolution_m_per_px: self.resolution_m_per_px }
    }

    /// Rotation about the image center by `angle` radians with bilinear sampling;
    /// samples falling outside the source read as zero.
    pub fn rotate(&self, angle: f64) -> Self {
        let (h, w) = (self.height, self.width);
        let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
        let (s, c) = angle.sin_cos();
        let mut px = vec![0.0; h * w];
        for y in 0..h {
            for x in 0..w {
                let (dx, dy) = (x as f64 - cx, y as f64 - cy);
                let sx = c * dx + s * dy + cx;
                let sy = -s * dx + c * dy + cy;
                px[y * w + x] = bilinear_zero(&self.pixels, h, w, sy, sx);
            }
        }
        GrayImage { pixels: px, ..self.clone() }
    }

    /// Gaussian blur with edge-reflecting borders; constant images are unchanged.
    pub fn blur(&self, sigma: f64) -> Self {
        if sigma <= 0.0 {
            return self.clone();
        }
        let k = gaussian_kernel(sigma, 0);
        let mut px = correlate_separable(&self.pixels, self.height, self.width, &k, &k);
        px.iter_mut().for_each(|p| *p = p.clamp(0.0, 1.0));
        GrayImage { pixels: px, ..self.clone() }
    }
}

fn bilinear_zero(px: &[f64], h: usize, w: usize, y: f64, x: f64) -> f64 {
    let (y0, x0) = (y.floor(), x.floor());
    let (fy, fx) = (y - y0, x - x0);
    let at = |yy: f64, xx: f64| {
        if yy < 0.0 || xx < 0.0 || yy >= h as f64 || xx >= w as f64 {
            0.0
        } else {
            px[yy as usize * w + xx as usize]
        }
    };
    (1.0 - fy) * ((1.0 - fx) * at(y0, x0) + fx * at(y0, x0 + 1.0)) + fy * ((1.0 - fx) * at(y0 + 1.0, x0) + fx * at(y0 + 1.0, x0 + 1.0))
}

/// Bilinear resize of a plane with edge clamping and pixel-center alignment.
pub fn resize_plane(px: &[f64], h: usize, w: usize, nh: usize, nw: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(nh * nw);
    let (sy, sx) = (h as f64 / nh as f64, w as f64 / nw as f64);
    for y in 0..nh {
        let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let ty = fy - y0 as f64;
        for x in 0..nw {
            let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let tx = fx - x0 as f64;
            let top = (1.0 - tx) * px[y0 * w + x0] + tx * px[y0 * w + x1];
            let bot = (1.0 - tx) * px[y1 * w + x0] + tx * px[y1 * w + x1];
            out.push((1.0 - ty) * top + ty * bot);
        }
    }
    out
}

/// Sampled Gaussian of standard deviation `sigma` truncated at 4σ (`order` 0), or a
/// kernel whose correlation with a signal yields its smoothed first or second
/// derivative (`order` 1 or 2). The base weights sum to 1.
pub fn gaussian_kernel(sigma: f64, order: u8) -> Vec<f64> {
    let radius = (4.0 * sigma + 0.5).floor() as isize;
    let base: Vec<f64> = (-radius..=radius).map(|x| (-(x * x) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = base.iter().sum();
    let s2 = sigma * sigma;
    (-radius..=radius)
        .zip(base)
        .map(|(x, g)| {
            let g = g / total;
            let x = x as f64;
            match order {
                0 => g,
                1 => x / s2 * g,
                _ => (x * x / (s2 * s2) - 1.0 / s2) * g,
            }
        })
        .collect()
}

/// Reflects an index into `[0, n)` with the edge sample repeated (`d c b a | a b c d | d c b a`).
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let period = 2 * n;
    let mut m = i.rem_euclid(period);
    if m >= n {
        m = period - 1 - m;
    }
    m as usize
}

/// Correlates rows with `kx` and columns with `ky`; kernels are centered.
pub fn correlate_separable(px: &[f64], h: usize, w: usize, kx: &[f64], ky: &[f64]) -> Vec<f64> {
    let (rx, ry) = ((kx.len() / 2) as isize, (ky.len() / 2) as isize);
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        let row = &px[y * w..(y + 1) * w];
        for x in 0..w {
            tmp[y * w + x] = kx.iter().enumerate().map(|(t, k)| k * row[reflect(x as isize + t as isize - rx, w)]).sum();
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for (t, k) in ky.iter().enumerate() {
            let sy = reflect(y as isize + t as isize - ry, h);
            let src = &tmp[sy * w..(sy + 1) * w];
            for (o, s) in out[y * w..(y + 1) * w].iter_mut().zip(src) {
                *o += k * s;
            }
        }
    }
    out
}
