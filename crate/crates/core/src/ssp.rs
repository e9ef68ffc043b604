//! Strong-scattering-point extraction and aircraft size measurement.
//!
//! Bright scatterers are found with a Harris-Laplace detector, the fuselage axis is
//! fitted to them by ordinary least squares, and the fuselage length and wingspan are
//! the extents of the points projected onto the axis and its perpendicular.

use std::f64::consts::FRAC_PI_2;

use crate::error::{Error, Result};
use crate::image::{correlate_separable, gaussian_kernel, GrayImage};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KeyPoint {
    /// Column coordinate, sub-pixel.
    pub x: f64,
    /// Row coordinate, sub-pixel.
    pub y: f64,
    pub scale: f64,
    pub response: f64,
    /// Integer `(row, col)` where the response maximum was found.
    pub peak: (usize, usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct DetectorParams {
    pub scales: Vec<f64>,
    pub kappa: f64,
    /// Fraction of the strongest response below which maxima are discarded.
    pub response_threshold: f64,
    /// Minimum smoothed, normalized intensity at the peak.
    pub intensity_threshold: f64,
    /// Gaussian pre-smoothing applied before everything else (0 disables it).
    pub presmooth_sigma: f64,
}

impl Default for DetectorParams {
    fn default() -> Self {
        DetectorParams {
            scales: vec![1.2, 1.7, 2.4, 3.4, 4.8],
            kappa: 0.04,
            response_threshold: 1e-4,
            intensity_threshold: 0.3,
            presmooth_sigma: 1.0,
        }
    }
}

impl DetectorParams {
    pub fn validate(&self) -> Result<()> {
        if self.scales.len() < 3 {
            return Err(Error::arg(format!("harris_laplace needs at least 3 scales, got {}", self.scales.len())));
        }
        if self.scales.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
            return Err(Error::arg("scales must be positive"));
        }
        let ratios: Vec<f64> = self.scales.windows(2).map(|w| w[1] / w[0]).collect();
        let r0 = ratios[0];
        if r0 <= 1.0 || ratios.iter().any(|r| (r / r0 - 1.0).abs() > 0.1) {
            return Err(Error::arg(format!("scales {:?} are not geometrically increasing", self.scales)));
        }
        if !(0.04..=0.06).contains(&self.kappa) {
            return Err(Error::arg(format!("kappa {} outside [0.04, 0.06]", self.kappa)));
        }
        Ok(())
    }
}

/// Planes shared by detection and by external re-checks of the gating condition.
pub struct DetectorMaps {
    pub height: usize,
    pub width: usize,
    /// Pre-smoothed image rescaled to `[0, 1]`.
    pub work: Vec<f64>,
    /// `work` smoothed once more; the intensity gate reads this plane.
    pub gate: Vec<f64>,
    /// Harris response per scale.
    pub harris: Vec<Vec<f64>>,
    /// Scale-normalized |Laplacian of Gaussian| per scale.
    pub laplacian: Vec<Vec<f64>>,
}

/// Harris response `det(M) − κ·tr(M)²` with derivative scale `0.7σ` and integration scale `σ`.
pub fn harris_response(px: &[f64], h: usize, w: usize, sigma: f64, kappa: f64) -> Vec<f64> {
    let sd = 0.7 * sigma;
    let (g0, g1) = (gaussian_kernel(sd, 0), gaussian_kernel(sd, 1));
    let lx = correlate_separable(px, h, w, &g1, &g0);
    let ly = correlate_separable(px, h, w, &g0, &g1);
    let gi = gaussian_kernel(sigma, 0);
    let norm = sd * sd;
    let smooth = |f: &dyn Fn(usize) -> f64| {
        let p: Vec<f64> = (0..h * w).map(f).collect();
        correlate_separable(&p, h, w, &gi, &gi)
    };
    let a = smooth(&|i| lx[i] * lx[i]);
    let b = smooth(&|i| ly[i] * ly[i]);
    let c = smooth(&|i| lx[i] * ly[i]);
    (0..h * w)
        .map(|i| {
            let (a, b, c) = (a[i] * norm, b[i] * norm, c[i] * norm);
            a * b - c * c - kappa * (a + b) * (a + b)
        })
        .collect()
}

fn scale_normalized_log(px: &[f64], h: usize, w: usize, sigma: f64) -> Vec<f64> {
    let (g0, g2) = (gaussian_kernel(sigma, 0), gaussian_kernel(sigma, 2));
    let xx = correlate_separable(px, h, w, &g2, &g0);
    let yy = correlate_separable(px, h, w, &g0, &g2);
    xx.iter().zip(&yy).map(|(a, b)| (sigma * sigma * (a + b)).abs()).collect()
}

/// 3×3 maximum filter; out-of-image neighbors are ignored.
fn max3(px: &[f64], h: usize, w: usize) -> Vec<f64> {
    let mut out = vec![f64::NEG_INFINITY; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut m = f64::NEG_INFINITY;
            for ny in y.saturating_sub(1)..=(y + 1).min(h - 1) {
                for nx in x.saturating_sub(1)..=(x + 1).min(w - 1) {
                    m = m.max(px[ny * w + nx]);
                }
            }
            out[y * w + x] = m;
        }
    }
    out
}

/// Computes the detector planes, or `None` for a constant image.
pub fn detector_maps(image: &GrayImage, params: &DetectorParams) -> Result<Option<DetectorMaps>> {
    params.validate()?;
    let (h, w) = (image.height(), image.width());
    let mut work = if params.presmooth_sigma > 0.0 {
        let k = gaussian_kernel(params.presmooth_sigma, 0);
        correlate_separable(image.pixels(), h, w, &k, &k)
    } else {
        image.pixels().to_vec()
    };
    let lo = work.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = work.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi - lo <= 1e-12 {
        return Ok(None);
    }
    work.iter_mut().for_each(|v| *v = (*v - lo) / (hi - lo));
    let k1 = gaussian_kernel(1.0, 0);
    let gate = correlate_separable(&work, h, w, &k1, &k1);
    let harris = params.scales.iter().map(|&s| harris_response(&work, h, w, s, params.kappa)).collect();
    let laplacian = params.scales.iter().map(|&s| max3(&scale_normalized_log(&work, h, w, s), h, w)).collect();
    Ok(Some(DetectorMaps { height: h, width: w, work, gate, harris, laplacian }))
}

/// Harris-Laplace detection of bright scattering points, strongest first.
///
/// A point is kept when its Harris response is a 3×3 maximum above
/// `response_threshold × max response`, the neighborhood maximum of the
/// scale-normalized Laplacian peaks at its scale across adjacent scales, and the
/// smoothed intensity there is at least `intensity_threshold`. Positions are refined
/// to the intensity centroid within radius `⌈σ⌉`, and detections closer than the
/// larger of two scales to a stronger one are dropped.
pub fn harris_laplace(image: &GrayImage, params: &DetectorParams) -> Result<Vec<KeyPoint>> {
    let Some(maps) = detector_maps(image, params)? else {
        return Ok(Vec::new());
    };
    let (h, w) = (maps.height, maps.width);
    let global_max = maps.harris.iter().flatten().copied().fold(f64::NEG_INFINITY, f64::max);
    if global_max <= 0.0 {
        return Ok(Vec::new());
    }
    let threshold = params.response_threshold * global_max;
    let n = params.scales.len();
    let mut candidates = Vec::new();
    for (si, &sigma) in params.scales.iter().enumerate() {
        let r = &maps.harris[si];
        let rmax = max3(r, h, w);
        let lap = &maps.laplacian;
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                if r[i] <= threshold || r[i] < rmax[i] {
                    continue;
                }
                if (si > 0 && lap[si][i] <= lap[si - 1][i]) || (si + 1 < n && lap[si][i] <= lap[si + 1][i]) {
                    continue;
                }
                if maps.gate[i] < params.intensity_threshold {
                    continue;
                }
                let (cx, cy) = refine(&maps.work, h, w, y, x, sigma.ceil() as usize);
                candidates.push(KeyPoint { x: cx, y: cy, scale: sigma, response: r[i], peak: (y, x) });
            }
        }
    }
    candidates.sort_by(|a, b| b.response.total_cmp(&a.response));
    let mut kept: Vec<KeyPoint> = Vec::new();
    for c in candidates {
        let far = kept.iter().all(|k| {
            let d2 = (c.x - k.x).powi(2) + (c.y - k.y).powi(2);
            d2 > c.scale.max(k.scale).powi(2)
        });
        if far {
            kept.push(c);
        }
    }
    Ok(kept)
}

/// Centroid of `(window − window minimum)` around `(y, x)`, returned as `(col, row)`.
fn refine(px: &[f64], h: usize, w: usize, y: usize, x: usize, r: usize) -> (f64, f64) {
    let (y0, y1) = (y.saturating_sub(r), (y + r).min(h - 1));
    let (x0, x1) = (x.saturating_sub(r), (x + r).min(w - 1));
    let mut lo = f64::INFINITY;
    for yy in y0..=y1 {
        for xx in x0..=x1 {
            lo = lo.min(px[yy * w + xx]);
        }
    }
    let (mut sw, mut sx, mut sy) = (0.0, 0.0, 0.0);
    for yy in y0..=y1 {
        for xx in x0..=x1 {
            let v = px[yy * w + xx] - lo;
            sw += v;
            sx += v * xx as f64;
            sy += v * yy as f64;
        }
    }
    if sw > 0.0 {
        (sx / sw, sy / sw)
    } else {
        (x as f64, y as f64)
    }
}

/// Least-squares line `y = slope·x + intercept` through a point set.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AxisFit {
    pub slope: f64,
    /// For a vertical fit this holds the line's x coordinate.
    pub intercept: f64,
    pub centroid: (f64, f64),
    /// All x equal: the regression slope is undefined and the axis is taken as vertical.
    pub vertical: bool,
}

impl AxisFit {
    /// Axis direction in `(−π/2, π/2]`.
    pub fn angle(&self) -> f64 {
        if self.vertical {
            FRAC_PI_2
        } else {
            self.slope.atan()
        }
    }
}

/// Ordinary least squares of y on x: centroid, `b = (Σxy − n·x̄ȳ)/(Σx² − n·x̄²)`, `k = ȳ − b·x̄`.
pub fn fit_axis(points: &[(f64, f64)]) -> Result<AxisFit> {
    if points.len() < 2 {
        return Err(Error::arg(format!("fit_axis needs at least 2 points, got {}", points.len())));
    }
    if points.iter().any(|(x, y)| !x.is_finite() || !y.is_finite()) {
        return Err(Error::arg("fit_axis received a non-finite coordinate"));
    }
    let n = points.len() as f64;
    let xbar = points.iter().map(|p| p.0).sum::<f64>() / n;
    let ybar = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = points.iter().map(|p| p.0 * p.1).sum();
    let sxx: f64 = points.iter().map(|p| p.0 * p.0).sum();
    let den = sxx - n * xbar * xbar;
    let all_same_x = points.iter().all(|p| p.0 == points[0].0);
    if all_same_x || den <= 0.0 {
        return Ok(AxisFit { slope: f64::INFINITY, intercept: xbar, centroid: (xbar, ybar), vertical: true });
    }
    let slope = (sxy - n * xbar * ybar) / den;
    Ok(AxisFit { slope, intercept: ybar - slope * xbar, centroid: (xbar, ybar), vertical: false })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SizeEstimate {
    pub length_m: f64,
    pub width_m: f64,
    pub axis_angle_rad: f64,
}

/// Extents of the points along the fitted axis (length) and across it (width), in meters.
pub fn measure_size(points: &[(f64, f64)], fit: &AxisFit, image: &GrayImage) -> Result<SizeEstimate> {
    if points.len() < 2 {
        return Err(Error::DegenerateSize(format!("{} point(s) cannot span a size", points.len())));
    }
    let angle = fit.angle();
    let (s, c) = angle.sin_cos();
    let extent = |f: &dyn Fn(&(f64, f64)) -> f64| {
        let (lo, hi) = points.iter().map(f).fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
        hi - lo
    };
    let along = extent(&|p| p.0 * c + p.1 * s);
    let across = extent(&|p| -p.0 * s + p.1 * c);
    if along <= 1e-12 || across <= 1e-12 {
        return Err(Error::DegenerateSize(format!(
            "points collapse to a single coordinate (extents {along:.3e} x {across:.3e} px)"
        )));
    }
    let res = image.resolution();
    let cap = res * image.height().max(image.width()) as f64;
    Ok(SizeEstimate { length_m: (res * along).min(cap), width_m: (res * across).min(cap), axis_angle_rad: angle })
}

/// Maps sizes affinely from `range` onto `[−1, 1]`, clamping.
pub fn normalize_size(length_m: f64, width_m: f64, range: (f64, f64)) -> Result<(f64, f64)> {
    let (lo, hi) = range;
    if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
        return Err(Error::arg(format!("size range ({lo}, {hi}) is empty")));
    }
    for v in [length_m, width_m] {
        if !(v > 0.0 && v.is_finite()) {
            return Err(Error::arg(format!("sizes must be positive, got {v}")));
        }
    }
    let map = |v: f64| (2.0 * (v - lo) / (hi - lo) - 1.0).clamp(-1.0, 1.0);
    Ok((map(length_m), map(width_m)))
}

/// Full pipeline: detection, axis fit, measurement. Also returns the keypoint count.
pub fn estimate_size(image: &GrayImage, params: &DetectorParams) -> Result<(SizeEstimate, usize)> {
    let kps = harris_laplace(image, params)?;
    let pts: Vec<(f64, f64)> = kps.iter().map(|k| (k.x, k.y)).collect();
    if pts.len() < 2 {
        return Err(Error::DegenerateSize(format!("only {} scattering point(s) detected", pts.len())));
    }
    let fit = fit_axis(&pts)?;
    Ok((measure_size(&pts, &fit, image)?, kps.len()))
}
