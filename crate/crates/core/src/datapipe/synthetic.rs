//! Generated stand-in dataset: a noisy grey field with one coloured disc
//! whose colour identifies the grade.

use std::path::Path;

use image::{Rgb, RgbImage};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::imageops::{images_to_tensor, save_png};
use super::manifest::{split_dataset, DRGrade, Manifest, Sample, Split, GRADES};
use super::ImageSet;
use crate::error::{Error, Result};
use crate::rng::{stream_rng, Stream};

const PALETTE: [[f64; 3]; GRADES] = [
    [230.0, 60.0, 60.0],
    [60.0, 200.0, 60.0],
    [60.0, 90.0, 230.0],
    [230.0, 220.0, 60.0],
    [200.0, 60.0, 220.0],
];

/// One image of `grade`, deterministic in `(seed, index)`.
pub fn synthetic_image(grade: DRGrade, size: u32, seed: u64, index: u64) -> RgbImage {
    let mut rng = stream_rng(seed, Stream::Synthetic, index);
    let noise = Normal::new(0.0, 18.0).expect("valid std");
    let s = size as f64;
    let radius = rng.random_range(s / 7.0..s / 4.5);
    let cx = rng.random_range(radius..s - radius);
    let cy = rng.random_range(radius..s - radius);
    let colour = PALETTE[grade.index()];
    RgbImage::from_fn(size, size, |x, y| {
        let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
        let base = if dx * dx + dy * dy <= radius * radius {
            colour
        } else {
            [100.0, 100.0, 100.0]
        };
        Rgb(base.map(|v| (v + noise.sample(&mut rng)).round().clamp(0.0, 255.0) as u8))
    })
}

/// `counts[g]` images of each grade, grades in order.
pub fn synthetic_images(counts: [usize; GRADES], size: u32, seed: u64) -> Vec<(RgbImage, DRGrade)> {
    let mut out = Vec::new();
    let mut index = 0u64;
    for (g, &n) in counts.iter().enumerate() {
        let grade = DRGrade::new(g as u8).expect("grade in range");
        for _ in 0..n {
            out.push((synthetic_image(grade, size, seed, index), grade));
            index += 1;
        }
    }
    out
}

/// Writes `<dir>/<grade>/img_<i>.png`, the layout read by
/// [`scan_input_dir`](super::scan_input_dir).
pub fn write_synthetic_tree(dir: &Path, counts: [usize; GRADES], size: u32, seed: u64) -> Result<()> {
    for (i, (img, grade)) in synthetic_images(counts, size, seed).into_iter().enumerate() {
        let sub = dir.join(grade.value().to_string());
        std::fs::create_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
        save_png(&img, &sub.join(format!("img_{i:05}.png")))?;
    }
    Ok(())
}

/// In-memory train/val/test sets of `per_class` images per grade, split with
/// the same stratified rule as on-disk manifests.
pub fn synthetic_splits(
    per_class: usize,
    size: u32,
    seed: u64,
    fractions: [f64; 3],
) -> Result<[ImageSet; 3]> {
    let generated = synthetic_images([per_class; GRADES], size, seed);
    let manifest = Manifest::new(
        "synthetic",
        generated
            .iter()
            .enumerate()
            .map(|(i, (_, g))| Sample::original(format!("{i:05}"), *g))
            .collect(),
    );
    let manifest = split_dataset(&manifest, fractions, seed)?;
    let pick = |split: Split| -> Result<ImageSet> {
        let (images, labels): (Vec<RgbImage>, Vec<usize>) = manifest
            .samples
            .iter()
            .enumerate()
            .filter(|(_, s)| s.split == Some(split))
            .map(|(i, s)| (generated[i].0.clone(), s.grade.index()))
            .unzip();
        Ok(ImageSet {
            images: images_to_tensor(&images)?,
            labels,
        })
    };
    Ok([pick(Split::Train)?, pick(Split::Val)?, pick(Split::Test)?])
}
