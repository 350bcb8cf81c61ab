//! Feature extractor, model assembly and classifier head.
//!
//! The assembly wires `backbone -> 1x1 reduce -> GAB -> CAB -> GAP -> FC`.
//! Either attention block can be switched off, which is how the ablation
//! variants are produced.

use std::fmt;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{cab_forward, gab_forward, CabForwardArtifacts, CabState, Conv1x1, GabState};
use crate::autograd::{Tape, Var};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::param::Parameter;
use crate::rng::{stream_rng, Stream};
use crate::tensor::{Shape, Tensor};

/// Which attention blocks an assembly carries.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionMode {
    Baseline,
    GabOnly,
    CabOnly,
    GabCab,
}

impl AttentionMode {
    pub const ALL: [AttentionMode; 4] = [
        AttentionMode::Baseline,
        AttentionMode::GabOnly,
        AttentionMode::CabOnly,
        AttentionMode::GabCab,
    ];

    pub fn has_gab(self) -> bool {
        matches!(self, AttentionMode::GabOnly | AttentionMode::GabCab)
    }

    pub fn has_cab(self) -> bool {
        matches!(self, AttentionMode::CabOnly | AttentionMode::GabCab)
    }

    /// Row label used in ablation tables.
    pub fn label(self) -> &'static str {
        match self {
            AttentionMode::Baseline => "Baseline",
            AttentionMode::GabOnly => "+ GAB only",
            AttentionMode::CabOnly => "+ CAB only",
            AttentionMode::GabCab => "+ GAB + CAB",
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            AttentionMode::Baseline => "baseline",
            AttentionMode::GabOnly => "gab_only",
            AttentionMode::CabOnly => "cab_only",
            AttentionMode::GabCab => "gab_cab",
        }
    }
}

impl std::str::FromStr for AttentionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AttentionMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown attention mode {s:?}")))
    }
}

impl fmt::Display for AttentionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Architecture description, stored as `model.toml` next to checkpoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub stage_widths: Vec<usize>,
    pub reduced_channels: usize,
    pub reduction_ratio: usize,
    pub k: usize,
    pub classes: usize,
    pub input_size: usize,
    pub dropout_rate: f64,
    pub cab_sigmoid: bool,
    pub attention: AttentionMode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            stage_widths: vec![16, 32, 64, 128],
            reduced_channels: 128,
            reduction_ratio: 8,
            k: 5,
            classes: 5,
            input_size: 512,
            dropout_rate: 0.5,
            cab_sigmoid: false,
            attention: AttentionMode::GabCab,
        }
    }
}

impl ModelConfig {
    pub fn backbone_spec(&self) -> BackboneSpec {
        BackboneSpec {
            in_channels: 3,
            stage_widths: self.stage_widths.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone_spec().validate(self.input_size)?;
        if self.reduced_channels == 0 || self.classes == 0 || self.k == 0 {
            return Err(Error::Config("reduced_channels, classes and k must be >= 1".into()));
        }
        if self.reduction_ratio == 0 || !self.reduced_channels.is_multiple_of(self.reduction_ratio) {
            return Err(Error::Config(format!(
                "reduced_channels {} not divisible by reduction_ratio {}",
                self.reduced_channels, self.reduction_ratio
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!("dropout_rate {} outside [0, 1)", self.dropout_rate)));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("model config serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ModelConfig =
            toml::from_str(text).map_err(|e| Error::Config(format!("model config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        ModelConfig::from_toml(&text)
    }
}

/// Reference CNN: each stage is `3x3 conv -> relu -> 2x2 average pool`.
#[derive(Clone, Debug, PartialEq)]
pub struct BackboneSpec {
    pub in_channels: usize,
    pub stage_widths: Vec<usize>,
}

impl BackboneSpec {
    pub fn downsample_factor(&self) -> usize {
        1 << self.stage_widths.len()
    }

    pub fn out_channels(&self) -> usize {
        self.stage_widths.last().copied().unwrap_or(self.in_channels)
    }

    pub fn validate(&self, input_size: usize) -> Result<()> {
        if self.stage_widths.is_empty() || self.stage_widths.contains(&0) {
            return Err(Error::Config("backbone needs at least one stage of positive width".into()));
        }
        let f = self.downsample_factor();
        if input_size == 0 || !input_size.is_multiple_of(f) {
            return Err(Error::Config(format!(
                "input size {input_size} not divisible by backbone downsample factor {f}"
            )));
        }
        Ok(())
    }
}

/// One backbone stage's convolution.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvStage {
    pub weight: Parameter,
    pub bias: Parameter,
}

/// Final `GAP -> FC` classifier.
#[derive(Clone, Debug, PartialEq)]
pub struct Head {
    pub weight: Parameter,
    pub bias: Parameter,
}

/// A complete, consistently wired model.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelAssembly {
    pub config: ModelConfig,
    pub backbone: Vec<ConvStage>,
    pub reduce: Conv1x1,
    pub gab: Option<GabState>,
    pub cab: Option<CabState>,
    pub head: Head,
}

/// Tensors produced by [`model_forward`].
#[derive(Clone, Copy, Debug)]
pub struct ForwardPass {
    pub logits: Var,
    /// Backbone output before the 1x1 reduction.
    pub features: Var,
    /// `F_reduce`, the attention stack's input.
    pub pre_attention: Var,
    /// GAB output (equals `pre_attention` when the GAB is absent).
    pub gab_out: Var,
    /// CAB output (equals `gab_out` when the CAB is absent).
    pub cab_out: Var,
    pub cab: Option<CabForwardArtifacts>,
}

impl ModelAssembly {
    /// Randomly initialised assembly. All blocks are always drawn from the
    /// init stream in the same order, so assemblies that differ only in
    /// `attention` share every common weight.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = stream_rng(seed, Stream::Init, 0);
        ModelAssembly::init_with(config, &mut rng)
    }

    fn init_with<R: Rng>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        let spec = config.backbone_spec();
        let mut backbone = Vec::new();
        let mut c_in = spec.in_channels;
        for (i, &w) in spec.stage_widths.iter().enumerate() {
            backbone.push(ConvStage {
                weight: Parameter::he_normal(
                    format!("backbone.stage{i}.weight"),
                    Shape::new(w, c_in, 3, 3)?,
                    c_in * 9,
                    rng,
                ),
                bias: Parameter::zeros(format!("backbone.stage{i}.bias"), Shape::new(1, w, 1, 1)?),
            });
            c_in = w;
        }
        let c_red = config.reduced_channels;
        let reduce = Conv1x1::init("reduce", spec.out_channels(), c_red, rng)?;
        let gab = GabState::init(c_red, config.reduction_ratio, rng)?;
        let mut cab = CabState::init(c_red, config.k, config.classes, config.dropout_rate, rng)?;
        cab.sigmoid = config.cab_sigmoid;
        let head = Head {
            weight: Parameter::normal("head.weight", Shape::new(config.classes, c_red, 1, 1)?, 0.01, rng),
            bias: Parameter::zeros("head.bias", Shape::new(1, config.classes, 1, 1)?),
        };
        let mode = config.attention;
        Ok(ModelAssembly {
            config,
            backbone,
            reduce,
            gab: mode.has_gab().then_some(gab),
            cab: mode.has_cab().then_some(cab),
            head,
        })
    }

    pub fn mode(&self) -> AttentionMode {
        self.config.attention
    }

    pub fn params(&self) -> Vec<&Parameter> {
        let mut out: Vec<&Parameter> = Vec::new();
        for s in &self.backbone {
            out.push(&s.weight);
            out.push(&s.bias);
        }
        out.extend(self.reduce.params());
        if let Some(g) = &self.gab {
            out.extend(g.params());
        }
        if let Some(c) = &self.cab {
            out.extend(c.params());
        }
        out.push(&self.head.weight);
        out.push(&self.head.bias);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut out: Vec<&mut Parameter> = Vec::new();
        for s in &mut self.backbone {
            out.push(&mut s.weight);
            out.push(&mut s.bias);
        }
        out.extend(self.reduce.params_mut());
        if let Some(g) = &mut self.gab {
            out.extend(g.params_mut());
        }
        if let Some(c) = &mut self.cab {
            out.extend(c.params_mut());
        }
        out.push(&mut self.head.weight);
        out.push(&mut self.head.bias);
        out
    }

    /// Exact number of scalar weights.
    pub fn parameter_count(&self) -> usize {
        self.params().iter().map(|p| p.numel()).sum()
    }

    pub fn set_backbone_frozen(&mut self, frozen: bool) {
        for s in &mut self.backbone {
            s.weight.trainable = !frozen;
            s.bias.trainable = !frozen;
        }
    }

    pub fn backbone_frozen(&self) -> bool {
        self.backbone.iter().all(|s| !s.weight.trainable && !s.bias.trainable)
    }

    /// Copies gradients recorded on `tape` into each parameter's grad slot.
    pub fn collect_grads(&mut self, tape: &Tape) {
        for p in self.params_mut() {
            p.tensor.grad = tape.param_grad(&p.name).map(<[f64]>::to_vec);
        }
    }

    pub fn clear_grads(&mut self) {
        for p in self.params_mut() {
            p.tensor.grad = None;
        }
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::from_params(self.params());
        let c = &self.config;
        ck.header = vec![
            ("reduction_ratio".into(), c.reduction_ratio as f64),
            ("k".into(), c.k as f64),
            ("classes".into(), c.classes as f64),
            ("dropout_rate".into(), c.dropout_rate),
            ("cab_sigmoid".into(), if c.cab_sigmoid { 1.0 } else { 0.0 }),
        ];
        ck
    }

    /// Rebuilds an assembly described by `config` from `ck`, checking that
    /// the header scalars and every parameter name and shape agree.
    pub fn from_checkpoint(config: ModelConfig, ck: &Checkpoint) -> Result<Self> {
        config.validate()?;
        let mut model = ModelAssembly::new(config.clone(), 0)?;
        let expect = [
            ("reduction_ratio", config.reduction_ratio as f64),
            ("k", config.k as f64),
            ("classes", config.classes as f64),
            ("dropout_rate", config.dropout_rate),
            ("cab_sigmoid", if config.cab_sigmoid { 1.0 } else { 0.0 }),
        ];
        for (name, want) in expect {
            match ck.header_value(name) {
                Some(v) if v == want => {}
                other => {
                    return Err(Error::Checkpoint(format!(
                        "header {name} is {other:?}, model config says {want}"
                    )))
                }
            }
        }
        let names: Vec<String> = model.params().iter().map(|p| p.name.clone()).collect();
        if ck.records.len() != names.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} tensors, model expects {}",
                ck.records.len(),
                names.len()
            )));
        }
        for p in model.params_mut() {
            let t = ck
                .record(&p.name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {}", p.name)))?;
            if t.shape() != p.tensor.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor {} has shape {:?}, expected {:?}",
                    p.name,
                    t.shape(),
                    p.tensor.shape()
                )));
            }
            p.tensor = t.clone();
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(config: ModelConfig, path: &Path) -> Result<Self> {
        ModelAssembly::from_checkpoint(config, &Checkpoint::load(path)?)
    }
}

/// Runs the backbone stages on `image`.
pub fn backbone_forward(tape: &mut Tape, image: Var, stages: &[ConvStage]) -> Result<Var> {
    let s = tape.shape(image);
    let factor = 1usize << stages.len();
    if !s.h().is_multiple_of(factor) || !s.w().is_multiple_of(factor) {
        return Err(Error::Config(format!(
            "image {}x{} not divisible by downsample factor {factor}",
            s.h(),
            s.w()
        )));
    }
    let mut x = image;
    for stage in stages {
        let w = tape.param(&stage.weight);
        let b = tape.param(&stage.bias);
        let y = tape.conv3x3(x, w, b)?;
        let y = tape.relu(y);
        x = tape.avg_pool2(y)?;
    }
    Ok(x)
}

/// The "Add Conv 1x1 Layer" step: backbone channels -> `c'`.
pub fn reduce_features(tape: &mut Tape, features: Var, reduce: &Conv1x1) -> Result<Var> {
    reduce.apply(tape, features)
}

/// `GAP -> flatten -> FC`, logits `(n, L, 1, 1)`.
pub fn classify_head(tape: &mut Tape, f_cab_out: Var, head: &Head) -> Result<Var> {
    let pooled = tape.global_avg_pool(f_cab_out)?;
    let w = tape.param(&head.weight);
    let b = tape.param(&head.bias);
    tape.fully_connected(pooled, w, b)
}

/// Row-wise argmax; ties go to the lowest index.
pub fn predict(logits: &Tensor) -> Vec<usize> {
    let l = logits.shape().c() * logits.shape().plane();
    logits
        .values()
        .chunks(l)
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

pub fn model_forward(
    tape: &mut Tape,
    image: &Tensor,
    model: &ModelAssembly,
    training: bool,
    seed: u64,
) -> Result<ForwardPass> {
    if image.shape().c() != 3 {
        return Err(Error::Shape(format!("expected RGB input, got {:?}", image.shape())));
    }
    let x = tape.constant(image.clone());
    let features = backbone_forward(tape, x, &model.backbone)?;
    let pre_attention = reduce_features(tape, features, &model.reduce)?;
    let gab_out = match &model.gab {
        Some(g) => gab_forward(tape, pre_attention, g)?,
        None => pre_attention,
    };
    let (cab_out, cab) = match &model.cab {
        Some(c) => {
            let (out, art) = cab_forward(tape, gab_out, c, training, seed)?;
            (out, Some(art))
        }
        None => (gab_out, None),
    };
    let logits = classify_head(tape, cab_out, &model.head)?;
    Ok(ForwardPass {
        logits,
        features,
        pre_attention,
        gab_out,
        cab_out,
        cab,
    })
}

/// Same weights, with the attention blocks outside `mode` removed.
/// Blocks that `mode` requires but `model` lacks are added zero-initialised.
pub fn ablation_variant(model: &ModelAssembly, mode: AttentionMode) -> Result<ModelAssembly> {
    let mut out = model.clone();
    out.config.attention = mode;
    let c = out.config.reduced_channels;
    out.gab = if mode.has_gab() {
        match &model.gab {
            Some(g) => Some(g.clone()),
            None => Some(GabState::zeros(c, out.config.reduction_ratio)?),
        }
    } else {
        None
    };
    out.cab = if mode.has_cab() {
        match &model.cab {
            Some(cab) => Some(cab.clone()),
            None => {
                let conv = Conv1x1::zeros("cab.conv_k", c, out.config.k * out.config.classes)?;
                let mut cab = CabState::with_conv(conv, out.config.k, out.config.classes, out.config.dropout_rate)?;
                cab.sigmoid = out.config.cab_sigmoid;
                Some(cab)
            }
        }
    } else {
        None
    };
    Ok(out)
}

/// Mean cross-entropy of the logits, plus `aux_weight` times the
/// cross-entropy of the CAB class scores when the CAB is present.
pub fn model_loss(
    tape: &mut Tape,
    images: &Tensor,
    labels: &[usize],
    model: &ModelAssembly,
    training: bool,
    seed: u64,
    aux_weight: f64,
) -> Result<(Var, ForwardPass)> {
    let pass = model_forward(tape, images, model, training, seed)?;
    let mut loss = tape.softmax_cross_entropy(pass.logits, labels)?;
    if aux_weight != 0.0 {
        if let Some(art) = pass.cab {
            let aux = tape.softmax_cross_entropy(art.scores, labels)?;
            let aux = tape.scale(aux, aux_weight);
            loss = tape.add(loss, aux)?;
        }
    }
    Ok((loss, pass))
}
