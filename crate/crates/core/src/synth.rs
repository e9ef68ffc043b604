//! Synthetic SAR-like aircraft slices with known geometry.

use std::f64::consts::{FRAC_PI_2, PI};
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1};

use crate::error::{Error, Result};
use crate::image::GrayImage;
use crate::io::create_dir_all;
use crate::manifest::{write_manifest, Manifest, Record};
use crate::rng::stream_rng;
use crate::ssp::SizeEstimate;

const BACKGROUND: f64 = 0.03;
const CLUTTER: f64 = 0.02;
const SILHOUETTE: f64 = 0.15;
const FUSELAGE_HALF_WIDTH_PX: f64 = 1.5;
const WING_HALF_CHORD_PX: f64 = 2.0;
const SCATTERER_SIGMA_PX: f64 = 1.5;
/// Margin in pixels kept between the aircraft extent and the image border.
const BORDER_PX: f64 = 4.0;

#[derive(Clone, Debug, PartialEq)]
pub struct ClassSpec {
    pub name: String,
    pub length_m: f64,
    pub wingspan_m: f64,
    /// 0, 2 or 4 wing-mounted engines.
    pub n_engines: u8,
    pub scatter_brightness: f64,
    /// Fuselage orientation is drawn uniformly from this range (radians), then
    /// turned by π with probability one half.
    pub orientation: (f64, f64),
}

impl ClassSpec {
    pub fn new(name: &str, length_m: f64, wingspan_m: f64, n_engines: u8) -> Self {
        ClassSpec {
            name: name.to_string(),
            length_m,
            wingspan_m,
            n_engines,
            scatter_brightness: 1.0,
            orientation: (-0.35, 0.35),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() || self.name.contains(['/', '\\', ',']) {
            return Err(Error::arg(format!("invalid class name {:?}", self.name)));
        }
        if !(self.length_m > 0.0 && self.wingspan_m > 0.0) {
            return Err(Error::arg(format!("{}: sizes must be positive", self.name)));
        }
        if !matches!(self.n_engines, 0 | 2 | 4) {
            return Err(Error::arg(format!("{}: engine count must be 0, 2 or 4", self.name)));
        }
        if !(self.scatter_brightness > 0.0 && self.scatter_brightness <= 1.0) {
            return Err(Error::arg(format!("{}: scatter brightness must be in (0, 1]", self.name)));
        }
        if self.orientation.0 > self.orientation.1 {
            return Err(Error::arg(format!("{}: empty orientation range", self.name)));
        }
        Ok(())
    }

    /// Engine offsets along the wing as fractions of the half-span.
    fn engine_fractions(&self) -> &'static [f64] {
        match self.n_engines {
            2 => &[0.25],
            4 => &[0.25, 0.45],
            _ => &[],
        }
    }
}

/// Four well-separated classes used by the demo and acceptance runs.
pub fn default_class_specs() -> Vec<ClassSpec> {
    vec![
        ClassSpec::new("narrowbody", 38.0, 34.0, 2),
        ClassSpec::new("quadjet", 48.0, 44.0, 4),
        ClassSpec::new("regional", 26.0, 27.0, 2),
        ClassSpec::new("widebody", 58.0, 56.0, 2),
    ]
}

#[derive(Clone, Debug, PartialEq)]
pub struct SliceOptions {
    pub image_size: usize,
    pub resolution_m_per_px: f64,
    pub speckle: bool,
    pub clutter: bool,
}

impl Default for SliceOptions {
    fn default() -> Self {
        SliceOptions { image_size: 64, resolution_m_per_px: 1.0, speckle: true, clutter: true }
    }
}

#[derive(Clone, Debug)]
pub struct Slice {
    pub image: GrayImage,
    pub truth: SizeEstimate,
    pub label: String,
}

/// Wraps an axis direction into `(−π/2, π/2]`.
fn wrap_axis(a: f64) -> f64 {
    let mut a = a.rem_euclid(PI);
    if a > FRAC_PI_2 {
        a -= PI;
    }
    a
}

/// Renders one aircraft slice: dim fuselage and wing silhouette, bright Gaussian
/// scatterers at nose, tail, wingtips and engines, background clutter, and unit-mean
/// exponential speckle, clamped to `[0, 1]`.
pub fn gen_slice(spec: &ClassSpec, opts: &SliceOptions, rng: &mut ChaCha8Rng) -> Result<Slice> {
    spec.validate()?;
    let s = opts.image_size;
    let res = opts.resolution_m_per_px;
    if !(res > 0.0) {
        return Err(Error::arg("resolution must be positive"));
    }
    let (len_px, span_px) = (spec.length_m / res, spec.wingspan_m / res);
    if len_px.max(span_px) > s as f64 - BORDER_PX {
        return Err(Error::arg(format!(
            "{} ({} m x {} m) does not fit a {s} px slice at {res} m/px",
            spec.name, spec.length_m, spec.wingspan_m
        )));
    }
    let (lo, hi) = spec.orientation;
    let mut angle = if hi > lo { rng.random_range(lo..=hi) } else { lo };
    if rng.random_bool(0.5) {
        angle += PI;
    }
    let center = (s as f64 / 2.0 - 0.5, s as f64 / 2.0 - 0.5);
    let u = (angle.cos(), angle.sin());
    let v = (-u.1, u.0);
    let at = |a: f64, b: f64| (center.0 + a * u.0 + b * v.0, center.1 + a * u.1 + b * v.1);

    let mut scatterers = vec![at(len_px / 2.0, 0.0), at(-len_px / 2.0, 0.0), at(0.0, span_px / 2.0), at(0.0, -span_px / 2.0)];
    for f in spec.engine_fractions() {
        scatterers.push(at(0.0, f * span_px / 2.0));
        scatterers.push(at(0.0, -f * span_px / 2.0));
    }

    let mut px = vec![0.0; s * s];
    for y in 0..s {
        for x in 0..s {
            let (dx, dy) = (x as f64 - center.0, y as f64 - center.1);
            let (a, b) = (dx * u.0 + dy * u.1, dx * v.0 + dy * v.1);
            let fuselage = a.abs() <= len_px / 2.0 && b.abs() <= FUSELAGE_HALF_WIDTH_PX;
            let wing = b.abs() <= span_px / 2.0 && a.abs() <= WING_HALF_CHORD_PX;
            let mut val = if fuselage || wing { SILHOUETTE } else { BACKGROUND };
            if opts.clutter {
                val += rng.random_range(0.0..CLUTTER);
            }
            for &(sx, sy) in &scatterers {
                let d2 = (x as f64 - sx).powi(2) + (y as f64 - sy).powi(2);
                val = val.max(spec.scatter_brightness * (-d2 / (2.0 * SCATTERER_SIGMA_PX * SCATTERER_SIGMA_PX)).exp());
            }
            px[y * s + x] = val;
        }
    }
    if opts.speckle {
        for p in &mut px {
            let e: f64 = Exp1.sample(rng);
            *p *= e;
        }
    }
    let image = GrayImage::from_clamped(s, s, px, res)?;
    let truth = SizeEstimate { length_m: spec.length_m, width_m: spec.wingspan_m, axis_angle_rad: wrap_axis(angle) };
    Ok(Slice { image, truth, label: spec.name.clone() })
}

/// Per-class counts summing exactly to `total`, decaying geometrically so that the
/// largest class is about `ratio` times the smallest.
pub fn long_tail_counts(total: usize, classes: usize, ratio: f64) -> Result<Vec<usize>> {
    if classes == 0 || total < classes {
        return Err(Error::arg(format!("cannot spread {total} samples over {classes} classes")));
    }
    if classes == 1 {
        return Ok(vec![total]);
    }
    let weights: Vec<f64> = (0..classes).map(|i| ratio.powf(-(i as f64) / (classes - 1) as f64)).collect();
    let wsum: f64 = weights.iter().sum();
    let mut counts: Vec<usize> = weights.iter().map(|w| ((w / wsum * total as f64).floor() as usize).max(1)).collect();
    let assigned: usize = counts.iter().sum();
    if assigned <= total {
        counts[0] += total - assigned;
    } else {
        counts[0] -= assigned - total;
    }
    Ok(counts)
}

pub enum Counts {
    PerClass(Vec<usize>),
    LongTail { total: usize, ratio: f64 },
}

/// Writes `<class>/<class>_<nnnn>.pgm` images plus `manifest.csv` under `root`.
/// Sample `i` (global index) draws from its own stream of `seed`.
pub fn gen_dataset(specs: &[ClassSpec], counts: &Counts, opts: &SliceOptions, seed: u64, root: &Path) -> Result<Manifest> {
    if specs.is_empty() {
        return Err(Error::arg("no class specs"));
    }
    let counts = match counts {
        Counts::PerClass(c) => c.clone(),
        Counts::LongTail { total, ratio } => long_tail_counts(*total, specs.len(), *ratio)?,
    };
    if counts.len() != specs.len() || counts.contains(&0) {
        return Err(Error::arg("every class needs a positive count"));
    }
    create_dir_all(root)?;
    let mut records = Vec::new();
    let mut index = 0u64;
    for (spec, &n) in specs.iter().zip(&counts) {
        create_dir_all(&root.join(&spec.name))?;
        for k in 0..n {
            let mut rng = stream_rng(seed, index);
            index += 1;
            let slice = gen_slice(spec, opts, &mut rng)?;
            let rel = format!("{0}/{0}_{k:04}.pgm", spec.name);
            slice.image.save(&root.join(&rel))?;
            records.push(Record { path: rel, label: spec.name.clone(), size: Some((spec.length_m, spec.wingspan_m)) });
        }
    }
    let manifest = Manifest::new(root, records)?;
    write_manifest(&manifest, &root.join("manifest.csv"))?;
    Ok(manifest)
}
