//! Grad-CAM heatmaps at the three attention taps and colour overlays.
//!
//! A heatmap is `relu(sum_c w_c * A_c)` where `A` is the tapped activation
//! and `w_c` the spatial mean of the target logit's gradient with respect
//! to channel `c`, rescaled to `[0, 1]`.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use image::{Rgb, RgbImage};

use crate::autograd::Tape;
use crate::backbone::{model_forward, predict, ModelAssembly};
use crate::datapipe::{images_to_tensor, rescale_image, save_png};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Activation a heatmap is computed from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Stage {
    /// Reduced backbone features, before any attention.
    PreAttention,
    /// Output of the global attention block.
    Gab,
    /// Output of the category attention block.
    Cab,
}

impl Stage {
    pub const ALL: [Stage; 3] = [Stage::PreAttention, Stage::Gab, Stage::Cab];

    /// Short tag used in file names and on the command line.
    pub fn tag(self) -> &'static str {
        match self {
            Stage::PreAttention => "noattn",
            Stage::Gab => "gab",
            Stage::Cab => "cab",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "noattn" | "pre_attention" => Ok(Stage::PreAttention),
            "gab" => Ok(Stage::Gab),
            "cab" => Ok(Stage::Cab),
            other => Err(Error::Config(format!(
                "unknown stage {other:?}, expected noattn, gab or cab"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap {
    /// Row-major `height x width` values in `[0, 1]`.
    pub values: Vec<f64>,
    pub height: usize,
    pub width: usize,
    pub stage: Stage,
    pub grade: usize,
    /// Set when the raw map was constant; `values` are then all zero.
    pub flat: bool,
}

impl Heatmap {
    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.values[y * self.width + x]
    }

    /// Bilinear resample to `width x height`, pixel centres aligned.
    pub fn resample(&self, width: usize, height: usize) -> Vec<f64> {
        let coord = |i: usize, n_out: usize, n_in: usize| {
            let f = ((i as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
            let i0 = f.floor() as usize;
            (i0, (i0 + 1).min(n_in - 1), f - i0 as f64)
        };
        let mut out = Vec::with_capacity(width * height);
        for y in 0..height {
            let (y0, y1, ty) = coord(y, height, self.height);
            for x in 0..width {
                let (x0, x1, tx) = coord(x, width, self.width);
                let top = self.get(y0, x0) * (1.0 - tx) + self.get(y0, x1) * tx;
                let bottom = self.get(y1, x0) * (1.0 - tx) + self.get(y1, x1) * tx;
                out.push(top * (1.0 - ty) + bottom * ty);
            }
        }
        out
    }
}

/// Un-normalised Grad-CAM map of one image: `activation` is `(1, C, h, w)`
/// and `gradient` holds the matching `C*h*w` gradient values.
pub fn cam_map(activation: &Tensor, gradient: &[f64]) -> Result<Vec<f64>> {
    let s = activation.shape();
    if s.n() != 1 || gradient.len() != activation.numel() {
        return Err(Error::Shape(format!(
            "Grad-CAM needs one image and a matching gradient, got {s:?} and {} values",
            gradient.len()
        )));
    }
    let plane = s.plane();
    let mut map = vec![0.0; plane];
    for (a, g) in activation.values().chunks(plane).zip(gradient.chunks(plane)) {
        let w = g.iter().sum::<f64>() / plane as f64;
        map.iter_mut().zip(a).for_each(|(m, &v)| *m += w * v);
    }
    map.iter_mut().for_each(|m| *m = m.max(0.0));
    Ok(map)
}

/// Min-max normalisation; returns zeros and `true` for a constant map.
pub fn normalize(map: &[f64]) -> (Vec<f64>, bool) {
    let lo = map.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = map.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return (vec![0.0; map.len()], true);
    }
    (map.iter().map(|v| (v - lo) / (hi - lo)).collect(), false)
}

/// Grad-CAM of `grade`'s logit at `stage` for a single `(1, 3, s, s)` image,
/// with the model in inference mode.
pub fn grad_cam(model: &ModelAssembly, image: &Tensor, grade: usize, stage: Stage) -> Result<Heatmap> {
    if image.shape().n() != 1 {
        return Err(Error::Shape(format!("Grad-CAM takes one image, got {:?}", image.shape())));
    }
    let classes = model.config.classes;
    if grade >= classes {
        return Err(Error::Validation(format!("grade {grade} outside 0..{classes}")));
    }
    let present = match stage {
        Stage::PreAttention => true,
        Stage::Gab => model.gab.is_some(),
        Stage::Cab => model.cab.is_some(),
    };
    if !present {
        return Err(Error::Config(format!("model has no {stage} stage")));
    }
    let mut tape = Tape::tracking_frozen();
    let pass = model_forward(&mut tape, image, model, false, 0)?;
    let tapped = match stage {
        Stage::PreAttention => pass.pre_attention,
        Stage::Gab => pass.gab_out,
        Stage::Cab => pass.cab_out,
    };
    let mut seed = vec![0.0; classes];
    seed[grade] = 1.0;
    tape.backward_with(pass.logits, seed)?;
    let activation = tape.value(tapped).clone();
    let zeros;
    let gradient = match tape.grad(tapped) {
        Some(g) => g,
        None => {
            zeros = vec![0.0; activation.numel()];
            &zeros
        }
    };
    let (values, flat) = normalize(&cam_map(&activation, gradient)?);
    let s = activation.shape();
    Ok(Heatmap {
        values,
        height: s.h(),
        width: s.w(),
        stage,
        grade,
        flat,
    })
}

/// Perceptual colour scale from dark purple through teal to yellow.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Colormap {
    #[default]
    Viridis,
    Gray,
}

const VIRIDIS: [[f64; 3]; 9] = [
    [68.0, 1.0, 84.0],
    [71.0, 44.0, 122.0],
    [59.0, 81.0, 139.0],
    [44.0, 113.0, 142.0],
    [33.0, 144.0, 141.0],
    [39.0, 173.0, 129.0],
    [92.0, 200.0, 99.0],
    [170.0, 220.0, 50.0],
    [253.0, 231.0, 37.0],
];

impl Colormap {
    /// Colour of `t` in `[0, 1]` (clamped), as unrounded RGB.
    pub fn color(self, t: f64) -> [f64; 3] {
        let t = if t.is_nan() { 0.0 } else { t.clamp(0.0, 1.0) };
        match self {
            Colormap::Gray => [255.0 * t; 3],
            Colormap::Viridis => {
                let f = t * (VIRIDIS.len() - 1) as f64;
                let i = (f.floor() as usize).min(VIRIDIS.len() - 2);
                let u = f - i as f64;
                let (a, b) = (VIRIDIS[i], VIRIDIS[i + 1]);
                [0, 1, 2].map(|c| a[c] + (b[c] - a[c]) * u)
            }
        }
    }
}

pub const DEFAULT_ALPHA: f64 = 0.4;

/// `(1 - alpha) * image + alpha * colormap(heatmap)`, heatmap resampled to
/// the image size.
pub fn render_overlay(heatmap: &Heatmap, image: &RgbImage, colormap: Colormap, alpha: f64) -> RgbImage {
    let (w, h) = image.dimensions();
    let up = heatmap.resample(w as usize, h as usize);
    let mut out = image.clone();
    for (i, px) in out.pixels_mut().enumerate() {
        let c = colormap.color(up[i]);
        *px = Rgb([0, 1, 2].map(|k| {
            ((1.0 - alpha) * px[k] as f64 + alpha * c[k]).round().clamp(0.0, 255.0) as u8
        }));
    }
    out
}

/// Writes `<stem>.orig.png` and one `<stem>.<tag>.png` overlay per stage
/// into `out_dir`. `grade = None` explains the predicted grade. Returns the
/// written paths, original first.
pub fn write_panel(
    model: &ModelAssembly,
    image: &RgbImage,
    grade: Option<usize>,
    stages: &[Stage],
    out_dir: &Path,
    stem: &str,
) -> Result<Vec<PathBuf>> {
    let size = model.config.input_size as u32;
    let resized = rescale_image(image, size, size)?;
    let tensor = images_to_tensor(std::slice::from_ref(&resized))?;
    let grade = match grade {
        Some(g) => g,
        None => {
            let mut tape = Tape::new();
            let pass = model_forward(&mut tape, &tensor, model, false, 0)?;
            predict(tape.value(pass.logits))[0]
        }
    };
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let orig = out_dir.join(format!("{stem}.orig.png"));
    save_png(&resized, &orig)?;
    let mut written = vec![orig];
    for &stage in stages {
        let heatmap = grad_cam(model, &tensor, grade, stage)?;
        if heatmap.flat {
            log::warn!("{stem}: {stage} heatmap for grade {grade} is flat");
        }
        let path = out_dir.join(format!("{stem}.{}.png", stage.tag()));
        save_png(&render_overlay(&heatmap, &resized, Colormap::Viridis, DEFAULT_ALPHA), &path)?;
        written.push(path);
    }
    Ok(written)
}
