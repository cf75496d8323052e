//! Samples, synthetic generation, image files and checkpoints.

pub mod checkpoint;
pub mod netpbm;
mod synth;

use std::path::{Path, PathBuf};

pub use checkpoint::Checkpoint;
pub use netpbm::{load_image, load_mask, save_image, save_mask};
pub use synth::{synth_generate, Difficulty, MASK_FRACTION, NOISE_SIGMA};

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

/// Image `[3,h,w]` in [0,1] with its binary mask `[1,h,w]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SegSample {
    pub image: Tensor<f64>,
    pub mask: Tensor<f64>,
    /// Seed description or source path.
    pub meta: String,
    pub difficulty: Option<Difficulty>,
}

impl SegSample {
    pub fn new(image: Tensor<f64>, mask: Tensor<f64>, meta: impl Into<String>) -> Result<Self> {
        let (is, ms) = (image.shape(), mask.shape());
        if is.len() != 3 || is[0] != 3 || ms.len() != 3 || ms[0] != 1 || is[1..] != ms[1..] {
            return Err(Error::shape(format!("image {is:?} and mask {ms:?} do not pair up")));
        }
        if mask.data().iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::Domain("mask is not binary".into()));
        }
        Ok(SegSample {
            image,
            mask,
            meta: meta.into(),
            difficulty: None,
        })
    }

    pub fn extent(&self) -> (usize, usize) {
        (self.image.shape()[1], self.image.shape()[2])
    }
}

/// Stacks the chosen samples into `[b,3,h,w]` images and `[b,1,h,w]` masks.
pub fn stack_batch<T: Real>(samples: &[SegSample], indices: &[usize]) -> Result<(Tensor<T>, Tensor<T>)> {
    let first = indices.first().ok_or_else(|| Error::shape("empty batch"))?;
    let (h, w) = samples.get(*first).ok_or_else(|| Error::shape("batch index out of range"))?.extent();
    let (mut img, mut mask) = (Vec::new(), Vec::new());
    for &i in indices {
        let s = samples.get(i).ok_or_else(|| Error::shape(format!("batch index {i} out of range")))?;
        if s.extent() != (h, w) {
            return Err(Error::shape(format!("sample {} is {:?}, batch is {h}×{w}", s.meta, s.extent())));
        }
        img.extend(s.image.data().iter().map(|&v| T::lit(v)));
        mask.extend(s.mask.data().iter().map(|&v| T::lit(v)));
    }
    let b = indices.len();
    Ok((Tensor::new(vec![b, 3, h, w], img)?, Tensor::new(vec![b, 1, h, w], mask)?))
}

/// Image and mask paths of sample `id` in a dataset directory.
pub fn sample_paths(dir: &Path, id: &str) -> (PathBuf, PathBuf) {
    (dir.join(format!("{id}.ppm")), dir.join(format!("{id}_mask.pgm")))
}

/// Writes `{id}.ppm` and `{id}_mask.pgm` per sample, ids `0000`, `0001`, …
pub fn save_dataset(dir: &Path, samples: &[SegSample]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (i, s) in samples.iter().enumerate() {
        let (ip, mp) = sample_paths(dir, &format!("{i:04}"));
        save_image(&s.image, ip)?;
        save_mask(&s.mask, mp)?;
    }
    Ok(())
}

/// Every `{id}.ppm` with a matching `{id}_mask.pgm`, sorted by id.
pub fn load_dataset(dir: &Path) -> Result<Vec<(String, SegSample)>> {
    let mut ids = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().is_some_and(|e| e == "ppm") {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                ids.push(stem.to_string());
            }
        }
    }
    ids.sort();
    let mut out = Vec::with_capacity(ids.len());
    for id in ids {
        let (ip, mp) = sample_paths(dir, &id);
        if !mp.exists() {
            return Err(Error::config(format!("{} has no mask {}", ip.display(), mp.display())));
        }
        let image = load_image(&ip)?;
        if image.shape()[0] != 3 {
            return Err(Error::shape(format!("{} is not an RGB image", ip.display())));
        }
        let sample = SegSample::new(image, load_mask(&mp)?, ip.display().to_string())?;
        out.push((id, sample));
    }
    Ok(out)
}

#[cfg(test)]
mod tests;
