//! Pixel-level preprocessing: decoding, bilinear rescaling, the lossless
//! augmentation group and conversion to normalised tensors.

use std::path::Path;

use image::{imageops, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

/// Lossless orientation changes. `Orig` is the identity.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugTag {
    Orig,
    Rot90,
    Rot180,
    Rot270,
    Hflip,
}

impl AugTag {
    /// The four non-identity transforms.
    pub const TRANSFORMS: [AugTag; 4] = [AugTag::Rot90, AugTag::Rot180, AugTag::Rot270, AugTag::Hflip];

    pub fn as_str(self) -> &'static str {
        match self {
            AugTag::Orig => "orig",
            AugTag::Rot90 => "rot90",
            AugTag::Rot180 => "rot180",
            AugTag::Rot270 => "rot270",
            AugTag::Hflip => "hflip",
        }
    }
}

impl std::str::FromStr for AugTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [AugTag::Orig, AugTag::Rot90, AugTag::Rot180, AugTag::Rot270, AugTag::Hflip]
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| Error::Validation(format!("unknown augmentation tag {s:?}")))
    }
}

/// Decodes a PNG or JPEG file to 8-bit RGB.
pub fn load_rgb(path: &Path) -> Result<RgbImage> {
    let img = image::open(path).map_err(|e| Error::Ingestion {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    Ok(img.to_rgb8())
}

pub fn save_png(img: &RgbImage, path: &Path) -> Result<()> {
    img.save_with_format(path, image::ImageFormat::Png).map_err(|e| Error::Ingestion {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// Bilinear resize with corner alignment: output corners sample the input
/// corners exactly. Same-size input is returned unchanged.
pub fn rescale_image(img: &RgbImage, width: u32, height: u32) -> Result<RgbImage> {
    let (w_in, h_in) = img.dimensions();
    if w_in == 0 || h_in == 0 || width == 0 || height == 0 {
        return Err(Error::Validation(format!(
            "cannot rescale {w_in}x{h_in} image to {width}x{height}"
        )));
    }
    if (w_in, h_in) == (width, height) {
        return Ok(img.clone());
    }
    let scale = |n_in: u32, n_out: u32| {
        if n_out > 1 {
            (n_in - 1) as f64 / (n_out - 1) as f64
        } else {
            0.0
        }
    };
    let (sx, sy) = (scale(w_in, width), scale(h_in, height));
    let mut out = RgbImage::new(width, height);
    for y in 0..height {
        let fy = y as f64 * sy;
        let y0 = (fy.floor() as u32).min(h_in - 1);
        let y1 = (y0 + 1).min(h_in - 1);
        let ty = fy - y0 as f64;
        for x in 0..width {
            let fx = x as f64 * sx;
            let x0 = (fx.floor() as u32).min(w_in - 1);
            let x1 = (x0 + 1).min(w_in - 1);
            let tx = fx - x0 as f64;
            let (p00, p01) = (img.get_pixel(x0, y0), img.get_pixel(x1, y0));
            let (p10, p11) = (img.get_pixel(x0, y1), img.get_pixel(x1, y1));
            let px = out.get_pixel_mut(x, y);
            for c in 0..3 {
                let top = p00[c] as f64 * (1.0 - tx) + p01[c] as f64 * tx;
                let bottom = p10[c] as f64 * (1.0 - tx) + p11[c] as f64 * tx;
                px[c] = (top * (1.0 - ty) + bottom * ty).round().clamp(0.0, 255.0) as u8;
            }
        }
    }
    Ok(out)
}

/// Applies one orientation change. Rotations are clockwise.
pub fn augment(img: &RgbImage, tag: AugTag) -> RgbImage {
    match tag {
        AugTag::Orig => img.clone(),
        AugTag::Rot90 => imageops::rotate90(img),
        AugTag::Rot180 => imageops::rotate180(img),
        AugTag::Rot270 => imageops::rotate270(img),
        AugTag::Hflip => imageops::flip_horizontal(img),
    }
}

/// Stacks equally sized images into an `(n, 3, h, w)` tensor scaled to [0, 1].
pub fn images_to_tensor(images: &[RgbImage]) -> Result<Tensor> {
    let first = images
        .first()
        .ok_or_else(|| Error::Validation("no images to convert".into()))?;
    let (w, h) = first.dimensions();
    let (w, h) = (w as usize, h as usize);
    let shape = Shape::new(images.len(), 3, h, w)?;
    let mut values = vec![0.0; shape.numel()];
    for (n, img) in images.iter().enumerate() {
        if img.dimensions() != (w as u32, h as u32) {
            return Err(Error::Shape(format!(
                "image {n} is {:?}, expected {w}x{h}",
                img.dimensions()
            )));
        }
        for (x, y, px) in img.enumerate_pixels() {
            for c in 0..3 {
                values[shape.index(n, c, y as usize, x as usize)] = px[c] as f64 / 255.0;
            }
        }
    }
    Tensor::from_vec(shape, values)
}
