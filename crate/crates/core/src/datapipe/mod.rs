//! Ingestion, preprocessing, augmentation and stratified splitting.
//!
//! Preprocessing writes every original once, rescaled, and a manifest of
//! `path,grade,split,aug_tag` rows. Augmented rows point at their original's
//! file and are materialised when loaded.

mod imageops;
mod manifest;
pub mod synthetic;

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use image::RgbImage;

pub use imageops::{augment, images_to_tensor, load_rgb, rescale_image, save_png, AugTag};
pub use manifest::{
    allocate_split, class_distribution, expand_dataset, scan_input_dir, split_dataset,
    ClassDistribution, DRGrade, ExpandPolicy, Manifest, Sample, Split, GRADES,
};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Images held in memory as one `(n, 3, s, s)` tensor with their grades.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageSet {
    pub images: Tensor,
    pub labels: Vec<usize>,
}

impl ImageSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// FNV-1a hash of the labels and pixel values.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let words = self.labels.iter().map(|&l| l as u64);
        for word in words.chain(self.images.values().iter().map(|v| v.to_bits())) {
            for b in word.to_le_bytes() {
                h ^= u64::from(b);
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        }
        h
    }

    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let images = self.images.gather_batch(indices)?;
        Ok((images, indices.iter().map(|&i| self.labels[i]).collect()))
    }
}

/// Loads, rescales to `size x size` and augments each sample. Files shared
/// by several samples are decoded once.
pub fn load_samples<'a>(samples: impl IntoIterator<Item = &'a Sample>, size: u32) -> Result<ImageSet> {
    let mut cache: HashMap<PathBuf, RgbImage> = HashMap::new();
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for s in samples {
        if !cache.contains_key(&s.path) {
            let img = rescale_image(&load_rgb(&s.path)?, size, size)?;
            cache.insert(s.path.clone(), img);
        }
        images.push(augment(&cache[&s.path], s.aug));
        labels.push(s.grade.index());
    }
    if images.is_empty() {
        return Err(Error::Validation("no samples to load".into()));
    }
    Ok(ImageSet {
        images: images_to_tensor(&images)?,
        labels,
    })
}

pub fn load_split(manifest: &Manifest, split: Split, size: u32) -> Result<ImageSet> {
    if manifest.in_split(split).next().is_none() {
        return Err(Error::Validation(format!("manifest has no {split} samples")));
    }
    load_samples(manifest.in_split(split), size)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PreprocessOptions {
    pub resize: u32,
    pub policy: ExpandPolicy,
    pub fractions: [f64; 3],
    pub seed: u64,
}

impl Default for PreprocessOptions {
    fn default() -> Self {
        PreprocessOptions {
            resize: 512,
            policy: ExpandPolicy::OneRandom,
            fractions: [0.5, 0.3, 0.2],
            seed: 0,
        }
    }
}

/// Full preprocessing run: scan `input_dir`, write rescaled PNGs to an
/// `images/` directory beside `out_manifest`, split, expand and save the
/// manifest. Returns the manifest with paths relative to its directory.
pub fn preprocess(input_dir: &Path, out_manifest: &Path, opts: &PreprocessOptions) -> Result<Manifest> {
    if opts.resize == 0 {
        return Err(Error::Config("resize must be positive".into()));
    }
    let scanned = scan_input_dir(input_dir)?;
    let root = out_manifest.parent().unwrap_or(Path::new(""));
    let images_dir = root.join("images");
    std::fs::create_dir_all(&images_dir).map_err(|e| Error::io(&images_dir, e))?;
    let mut originals = Vec::with_capacity(scanned.len());
    for (i, s) in scanned.samples.iter().enumerate() {
        let img = rescale_image(&load_rgb(&s.path)?, opts.resize, opts.resize)?;
        let stem = s.path.file_stem().unwrap_or_default().to_string_lossy();
        let rel = PathBuf::from("images").join(format!("{i:05}_{stem}.png"));
        save_png(&img, &root.join(&rel))?;
        originals.push(Sample::original(rel, s.grade));
    }
    let manifest = Manifest::new(scanned.source, originals);
    let manifest = split_dataset(&manifest, opts.fractions, opts.seed)?;
    let manifest = expand_dataset(&manifest, opts.policy, opts.seed);
    manifest.save(out_manifest)?;
    log::info!(
        "preprocessed {} images into {} manifest rows",
        scanned.samples.len(),
        manifest.len()
    );
    Ok(manifest)
}
