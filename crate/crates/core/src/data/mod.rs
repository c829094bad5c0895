//! Datasets, image files, synthetic data, checkpoints and configuration.
//!
//! A dataset directory holds `images/<id>.ppm`, `gts/<id>.pgm` and, for
//! RGB-D data, `depths/<id>.pgm`.

pub mod checkpoint;
pub mod config;
pub mod pnm;
pub mod resize;
pub mod synthetic;

use std::path::Path;

use crate::error::{Error, Result};
use crate::map::Map;
use crate::tensor::Tensor;

pub use checkpoint::Checkpoint;
pub use synthetic::{generate, write_synthetic, SyntheticConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    /// `(3, H, W)` in `[0, 1]`.
    pub image: Tensor,
    /// Binary.
    pub gt: Map,
    pub depth: Option<Map>,
}

impl Sample {
    pub fn height(&self) -> usize {
        self.gt.height()
    }

    pub fn width(&self) -> usize {
        self.gt.width()
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w) = (self.height(), self.width());
        if self.image.shape() != [3, h, w] {
            return Err(Error::Dataset(format!(
                "{}: image {:?} does not match ground truth {h}x{w}",
                self.id,
                self.image.shape()
            )));
        }
        if !self.gt.is_binary() {
            return Err(Error::Dataset(format!("{}: ground truth is not binary", self.id)));
        }
        if let Some(d) = &self.depth {
            if !d.same_size(&self.gt) {
                return Err(Error::Dataset(format!("{}: depth size does not match", self.id)));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn has_depth(&self) -> bool {
        !self.samples.is_empty() && self.samples.iter().all(|s| s.depth.is_some())
    }

    /// Loads `images/` and `gts/`, plus `depths/` when `with_depth`. Ids
    /// present in one directory but not another are an error.
    pub fn load(dir: &Path, with_depth: bool) -> Result<Self> {
        let images = pnm::list_images(&dir.join("images"), "ppm")?;
        let gts = pnm::list_images(&dir.join("gts"), "pgm")?;
        let depths = if with_depth {
            Some(pnm::list_images(&dir.join("depths"), "pgm")?)
        } else {
            None
        };
        let mut unmatched: Vec<String> = images.keys().filter(|k| !gts.contains_key(*k)).cloned().collect();
        unmatched.extend(gts.keys().filter(|k| !images.contains_key(*k)).cloned());
        if let Some(d) = &depths {
            unmatched.extend(images.keys().filter(|k| !d.contains_key(*k)).cloned());
        }
        if !unmatched.is_empty() {
            unmatched.sort();
            unmatched.dedup();
            return Err(Error::Dataset(format!(
                "unmatched ids in {}: {}",
                dir.display(),
                unmatched.join(", ")
            )));
        }
        if images.is_empty() {
            return Err(Error::Dataset(format!("no images in {}", dir.join("images").display())));
        }
        let mut samples = Vec::with_capacity(images.len());
        for (id, path) in &images {
            let sample = Sample {
                id: id.clone(),
                image: pnm::read_rgb(path)?,
                gt: pnm::read_gray(&gts[id])?.binarized(),
                depth: depths.as_ref().map(|d| pnm::read_gray(&d[id])).transpose()?,
            };
            sample.validate()?;
            samples.push(sample);
        }
        Ok(Self { samples })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        for s in &self.samples {
            pnm::write_rgb(&dir.join("images").join(format!("{}.ppm", s.id)), &s.image)?;
            pnm::write_gray(&dir.join("gts").join(format!("{}.pgm", s.id)), &s.gt)?;
            if let Some(d) = &s.depth {
                pnm::write_gray(&dir.join("depths").join(format!("{}.pgm", s.id)), d)?;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn save_load_round_trip() {
        let cfg = SyntheticConfig {
            with_depth: true,
            ..SyntheticConfig::new(3, 32, 1)
        };
        let dir = tempfile::tempdir().unwrap();
        let written = write_synthetic(dir.path(), &cfg).unwrap();
        let loaded = Dataset::load(dir.path(), true).unwrap();
        assert_eq!(loaded.samples, written);
    }

    #[test]
    fn unmatched_ids_are_listed() {
        let dir = tempfile::tempdir().unwrap();
        write_synthetic(dir.path(), &SyntheticConfig::new(2, 16, 1)).unwrap();
        std::fs::remove_file(dir.path().join("gts/0001.pgm")).unwrap();
        let err = Dataset::load(dir.path(), false).unwrap_err();
        assert!(err.to_string().contains("0001"), "{err}");
    }
}
