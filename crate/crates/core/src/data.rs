//! Manifest samples decoded into memory.

use crate::error::{Error, Result};
use crate::image::GrayImage;
use crate::manifest::Manifest;

/// Decoded images with their labels and optional physical sizes, in manifest order.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub paths: Vec<String>,
    pub images: Vec<GrayImage>,
    pub sizes: Vec<Option<(f64, f64)>>,
    /// Index into `class_names`.
    pub labels: Vec<usize>,
    pub class_names: Vec<String>,
}

impl Dataset {
    /// Loads every record, resizing to `input_size` when needed. Class indices follow
    /// `class_names`, or the manifest's sorted labels when `None`.
    pub fn load(manifest: &Manifest, class_names: Option<&[String]>, input_size: usize) -> Result<Self> {
        let class_names = match class_names {
            Some(c) => c.to_vec(),
            None => manifest.labels(),
        };
        let labels = manifest.class_indices(&class_names)?;
        let mut images = Vec::with_capacity(manifest.len());
        for r in &manifest.records {
            let path = manifest.resolve(r);
            let img = GrayImage::load(&path)?;
            let img = img.resize(input_size, input_size).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
            images.push(img);
        }
        Ok(Dataset {
            paths: manifest.records.iter().map(|r| r.path.clone()).collect(),
            images,
            sizes: manifest.records.iter().map(|r| r.size).collect(),
            labels,
            class_names,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Samples at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            paths: indices.iter().map(|&i| self.paths[i].clone()).collect(),
            images: indices.iter().map(|&i| self.images[i].clone()).collect(),
            sizes: indices.iter().map(|&i| self.sizes[i]).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            class_names: self.class_names.clone(),
        }
    }
}
