//! Two-sided feature extraction network: residual CNN with SAEM bottlenecks, global
//! average pooling, and the size-information branch on the pooled feature.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::GrayImage;
use crate::nn::{Affine, Conv};
use crate::saem::{Bottleneck, BottleneckSpec};
use crate::sieb::{Sieb, SiebConfig};
use crate::ssp::{estimate_size, normalize_size, DetectorParams};
use crate::tensor::{ParamStore, Tape, Tensor, Var};

/// What to do for samples whose size metadata is missing.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SizeFallback {
    /// Try the scattering-point estimate, skip the size branch if it fails.
    Estimate,
    Skip,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub stem_channels: usize,
    pub stage_channels: Vec<usize>,
    pub blocks_per_stage: Vec<usize>,
    pub saem_enabled: Vec<bool>,
    pub input_size: usize,
    pub norm_groups: usize,
    pub heads: usize,
    pub kernel: usize,
    /// `None` disables the size branch.
    pub sieb: Option<SiebConfig>,
    pub size_fallback: SizeFallback,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            stem_channels: 16,
            stage_channels: vec![16, 32, 64],
            blocks_per_stage: vec![2, 2, 2],
            saem_enabled: vec![true, true, true],
            input_size: 64,
            norm_groups: 4,
            heads: 4,
            kernel: 3,
            sieb: Some(SiebConfig::default()),
            size_fallback: SizeFallback::Estimate,
        }
    }
}

impl EncoderConfig {
    pub fn embedding_dim(&self) -> usize {
        self.stage_channels.last().copied().unwrap_or(0)
    }

    /// Stem stride times one stride-2 step per stage after the first.
    pub fn downsampling(&self) -> usize {
        1 << self.stage_channels.len()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        let n = self.stage_channels.len();
        if n == 0 {
            return bad("stage_channels must not be empty".into());
        }
        if self.blocks_per_stage.len() != n || self.saem_enabled.len() != n {
            return bad(format!(
                "stage_channels, blocks_per_stage and saem_enabled must have equal lengths ({n}, {}, {})",
                self.blocks_per_stage.len(),
                self.saem_enabled.len()
            ));
        }
        if self.blocks_per_stage.contains(&0) {
            return bad("every stage needs at least one block".into());
        }
        if self.norm_groups == 0 || !self.stem_channels.is_multiple_of(self.norm_groups) {
            return bad(format!("norm_groups {} must divide stem_channels {}", self.norm_groups, self.stem_channels));
        }
        for (s, &c) in self.stage_channels.iter().enumerate() {
            let mid = c / 2;
            if c % 2 != 0 || mid % self.norm_groups != 0 {
                return bad(format!("stage {} width {c}: half-width must be divisible by norm_groups {}", s + 1, self.norm_groups));
            }
            if self.saem_enabled[s] && (self.heads == 0 || mid % self.heads != 0) {
                return bad(format!("stage {} width {c}: heads {} must divide the bottleneck width {mid}", s + 1, self.heads));
            }
        }
        if self.kernel.is_multiple_of(2) {
            return bad(format!("SAEM kernel must be odd, got {}", self.kernel));
        }
        let f = self.downsampling();
        if self.input_size == 0 || !self.input_size.is_multiple_of(f) {
            return bad(format!("input_size {} must be divisible by the downsampling factor {f}", self.input_size));
        }
        if let Some(s) = &self.sieb {
            if s.d_i != self.embedding_dim() {
                return bad(format!("embedding_dim {} must equal the last stage width {}", s.d_i, self.embedding_dim()));
            }
        }
        Ok(())
    }
}

/// How a sample's size input was obtained.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SizeSource {
    Given,
    Estimated,
    Skipped,
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub stem: Conv,
    pub stem_norm: Affine,
    pub blocks: Vec<Bottleneck>,
    pub sieb: Option<Sieb>,
}

impl Encoder {
    /// Registers every parameter under `prefix` in `store`. Construction order is fixed,
    /// so the same seed yields the same values.
    pub fn new(store: &mut ParamStore, prefix: &str, config: EncoderConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let stem = Conv::new(store, &format!("{prefix}.stem"), 1, config.stem_channels, 3, 2, rng)?;
        let stem_norm = Affine::new(store, &format!("{prefix}.stem_norm"), config.stem_channels, rng)?;
        let mut blocks = Vec::new();
        let mut c_in = config.stem_channels;
        for (s, (&c_out, &n)) in config.stage_channels.iter().zip(&config.blocks_per_stage).enumerate() {
            for b in 0..n {
                let spec = BottleneckSpec {
                    c_in,
                    c_out,
                    stride: if s > 0 && b == 0 { 2 } else { 1 },
                    use_saem: config.saem_enabled[s],
                    heads: config.heads,
                    kernel: config.kernel,
                    groups: config.norm_groups,
                };
                blocks.push(Bottleneck::new(store, &format!("{prefix}.stage{}.block{b}", s + 1), spec, rng)?);
                c_in = c_out;
            }
        }
        let sieb = match &config.sieb {
            Some(c) => Some(Sieb::new(store, &format!("{prefix}.sieb"), c.clone(), rng)?),
            None => None,
        };
        Ok(Encoder { config, stem, stem_norm, blocks, sieb })
    }

    pub fn embedding_dim(&self) -> usize {
        self.config.embedding_dim()
    }

    /// Stacks images into a `[B, 1, S, S]` batch, checking the configured size.
    pub fn batch(&self, images: &[&GrayImage]) -> Result<Tensor> {
        let s = self.config.input_size;
        if images.is_empty() {
            return Err(Error::arg("empty image batch"));
        }
        let mut data = Vec::with_capacity(images.len() * s * s);
        for img in images {
            if img.height() != s || img.width() != s {
                return Err(Error::arg(format!("image is {}x{}, encoder expects {s}x{s}", img.height(), img.width())));
            }
            data.extend_from_slice(img.pixels());
        }
        Tensor::new(vec![images.len(), 1, s, s], data)
    }

    /// Final feature map `[B, C, S/8, S/8]` and its pooled vector `z⁰` `[B, C]`.
    pub fn forward_features(&self, t: &Tape, store: &ParamStore, x: Var) -> Result<(Var, Var)> {
        let g = self.config.norm_groups;
        let h = self.stem.forward(t, store, x)?;
        let mut h = t.relu(self.stem_norm.group_norm(t, store, h, g)?)?;
        for block in &self.blocks {
            h = block.forward(t, store, h)?;
        }
        let z0 = t.global_avg_pool(h)?;
        Ok((h, z0))
    }

    /// Embedding for a batch. `sizes[i]` is the physical `(length, width)` of sample `i`;
    /// rows without a size bypass the size branch and keep `z⁰`.
    pub fn forward(&self, t: &Tape, store: &ParamStore, x: Var, sizes: &[Option<(f64, f64)>]) -> Result<Var> {
        let b = t.shape(x)[0];
        if sizes.len() != b {
            return Err(Error::dim("encoder", format!("{} sizes for a batch of {b}", sizes.len())));
        }
        let (_, z0) = self.forward_features(t, store, x)?;
        let Some(sieb) = &self.sieb else { return Ok(z0) };
        let with: Vec<usize> = (0..b).filter(|&i| sizes[i].is_some()).collect();
        if with.is_empty() {
            return Ok(z0);
        }
        let mut xs = Vec::with_capacity(2 * with.len());
        for &i in &with {
            let (l, w) = sizes[i].expect("filtered");
            let (nl, nw) = normalize_size(l, w, sieb.config.size_range)?;
            xs.extend([nl, nw]);
        }
        let x_hat = t.constant(Tensor::new(vec![with.len(), 2], xs)?);
        if with.len() == b {
            return sieb.forward(t, store, z0, x_hat);
        }
        let without: Vec<usize> = (0..b).filter(|&i| sizes[i].is_none()).collect();
        let fused = sieb.forward(t, store, t.index_rows(z0, &with)?, x_hat)?;
        let stacked = t.concat(&[fused, t.index_rows(z0, &without)?], 0)?;
        let mut order = vec![0; b];
        for (pos, &i) in with.iter().chain(&without).enumerate() {
            order[i] = pos;
        }
        t.index_rows(stacked, &order)
    }

    /// Fills missing sizes according to the configured fallback.
    pub fn resolve_sizes(&self, images: &[&GrayImage], sizes: &[Option<(f64, f64)>]) -> Vec<(Option<(f64, f64)>, SizeSource)> {
        let params = DetectorParams::default();
        images
            .iter()
            .zip(sizes)
            .map(|(img, s)| match (s, self.config.size_fallback) {
                (Some(s), _) => (Some(*s), SizeSource::Given),
                (None, SizeFallback::Skip) => (None, SizeSource::Skipped),
                (None, SizeFallback::Estimate) => match estimate_size(img, &params) {
                    Ok((e, _)) => (Some((e.length_m, e.width_m)), SizeSource::Estimated),
                    Err(e) => {
                        log::debug!("size estimate failed ({e}); skipping size branch");
                        (None, SizeSource::Skipped)
                    }
                },
            })
            .collect()
    }

    /// Gradient-free embeddings, one row per image.
    pub fn encode(&self, store: &ParamStore, images: &[&GrayImage], sizes: &[Option<(f64, f64)>]) -> Result<Vec<Vec<f64>>> {
        if images.len() != sizes.len() {
            return Err(Error::arg(format!("{} images but {} sizes", images.len(), sizes.len())));
        }
        let resolved: Vec<_> = self.resolve_sizes(images, sizes).into_iter().map(|(s, _)| s).collect();
        let t = Tape::no_grad();
        let x = t.constant(self.batch(images)?);
        let z = self.forward(&t, store, x, &resolved)?;
        let d = self.embedding_dim();
        let rows = t.values(z).chunks(d).map(<[f64]>::to_vec).collect();
        Ok(rows)
    }
}
