//! Global Attention Block (channel then spatial attention) and Category
//! Attention Block (k channels per class, pooled into one spatial map).

use rand::Rng;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::param::Parameter;
use crate::tensor::{Shape, Tensor};

/// Weight and bias of a 1x1 convolution.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv1x1 {
    pub weight: Parameter,
    pub bias: Parameter,
}

impl Conv1x1 {
    /// He-normal weights, zero bias.
    pub fn init<R: Rng>(prefix: &str, c_in: usize, c_out: usize, rng: &mut R) -> Result<Self> {
        Ok(Conv1x1 {
            weight: Parameter::he_normal(
                format!("{prefix}.weight"),
                Shape::new(c_out, c_in, 1, 1)?,
                c_in,
                rng,
            ),
            bias: Parameter::zeros(format!("{prefix}.bias"), Shape::new(1, c_out, 1, 1)?),
        })
    }

    pub fn zeros(prefix: &str, c_in: usize, c_out: usize) -> Result<Self> {
        Ok(Conv1x1 {
            weight: Parameter::zeros(format!("{prefix}.weight"), Shape::new(c_out, c_in, 1, 1)?),
            bias: Parameter::zeros(format!("{prefix}.bias"), Shape::new(1, c_out, 1, 1)?),
        })
    }

    /// Square identity map with zero bias.
    pub fn identity(prefix: &str, channels: usize) -> Result<Self> {
        let mut conv = Conv1x1::zeros(prefix, channels, channels)?;
        let w = conv.weight.tensor.values_mut();
        for i in 0..channels {
            w[i * channels + i] = 1.0;
        }
        Ok(conv)
    }

    pub fn c_in(&self) -> usize {
        self.weight.tensor.shape().c()
    }

    pub fn c_out(&self) -> usize {
        self.weight.tensor.shape().n()
    }

    pub fn apply(&self, tape: &mut Tape, input: Var) -> Result<Var> {
        let w = tape.param(&self.weight);
        let b = tape.param(&self.bias);
        tape.conv1x1(input, w, b)
    }

    pub fn params(&self) -> [&Parameter; 2] {
        [&self.weight, &self.bias]
    }

    pub fn params_mut(&mut self) -> [&mut Parameter; 2] {
        [&mut self.weight, &mut self.bias]
    }
}

/// Parameters of the global attention block: a bottleneck `c' -> c'/r -> c'`
/// of two 1x1 convolutions feeding the channel attention.
#[derive(Clone, Debug, PartialEq)]
pub struct GabState {
    pub conv_a: Conv1x1,
    pub conv_b: Conv1x1,
    pub reduction_ratio: usize,
}

impl GabState {
    fn check(channels: usize, reduction_ratio: usize) -> Result<usize> {
        if reduction_ratio == 0 || !channels.is_multiple_of(reduction_ratio) {
            return Err(Error::Config(format!(
                "GAB channels {channels} not divisible by reduction ratio {reduction_ratio}"
            )));
        }
        Ok(channels / reduction_ratio)
    }

    pub fn init<R: Rng>(channels: usize, reduction_ratio: usize, rng: &mut R) -> Result<Self> {
        let hidden = GabState::check(channels, reduction_ratio)?;
        Ok(GabState {
            conv_a: Conv1x1::init("gab.conv_a", channels, hidden, rng)?,
            conv_b: Conv1x1::init("gab.conv_b", hidden, channels, rng)?,
            reduction_ratio,
        })
    }

    /// All weights and biases zero; channel attention is then exactly 0.5.
    pub fn zeros(channels: usize, reduction_ratio: usize) -> Result<Self> {
        let hidden = GabState::check(channels, reduction_ratio)?;
        Ok(GabState {
            conv_a: Conv1x1::zeros("gab.conv_a", channels, hidden)?,
            conv_b: Conv1x1::zeros("gab.conv_b", hidden, channels)?,
            reduction_ratio,
        })
    }

    pub fn channels(&self) -> usize {
        self.conv_a.c_in()
    }

    pub fn params(&self) -> Vec<&Parameter> {
        self.conv_a.params().into_iter().chain(self.conv_b.params()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        let (a, b) = (&mut self.conv_a, &mut self.conv_b);
        a.params_mut().into_iter().chain(b.params_mut()).collect()
    }
}

/// Parameters and hyperparameters of the category attention block.
#[derive(Clone, Debug, PartialEq)]
pub struct CabState {
    pub conv_k: Conv1x1,
    pub k: usize,
    pub classes: usize,
    pub dropout_rate: f64,
    /// Squash the attention map through a sigmoid. Off by default.
    pub sigmoid: bool,
}

impl CabState {
    fn check(k: usize, classes: usize, dropout_rate: f64) -> Result<()> {
        if k == 0 || classes == 0 {
            return Err(Error::Config("CAB needs k >= 1 and at least one class".into()));
        }
        if !(0.0..1.0).contains(&dropout_rate) {
            return Err(Error::Config(format!("CAB dropout rate {dropout_rate} outside [0, 1)")));
        }
        Ok(())
    }

    pub fn init<R: Rng>(
        channels: usize,
        k: usize,
        classes: usize,
        dropout_rate: f64,
        rng: &mut R,
    ) -> Result<Self> {
        CabState::check(k, classes, dropout_rate)?;
        Ok(CabState {
            conv_k: Conv1x1::init("cab.conv_k", channels, k * classes, rng)?,
            k,
            classes,
            dropout_rate,
            sigmoid: false,
        })
    }

    pub fn with_conv(conv_k: Conv1x1, k: usize, classes: usize, dropout_rate: f64) -> Result<Self> {
        CabState::check(k, classes, dropout_rate)?;
        if conv_k.c_out() != k * classes {
            return Err(Error::Config(format!(
                "CAB projection has {} channels, expected k*L = {}",
                conv_k.c_out(),
                k * classes
            )));
        }
        Ok(CabState {
            conv_k,
            k,
            classes,
            dropout_rate,
            sigmoid: false,
        })
    }

    /// Channel range owned by `class` in the projected features.
    pub fn class_channels(&self, class: usize) -> std::ops::Range<usize> {
        class * self.k..(class + 1) * self.k
    }

    pub fn params(&self) -> Vec<&Parameter> {
        self.conv_k.params().to_vec()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        self.conv_k.params_mut().into_iter().collect()
    }
}

/// Intermediate CAB tensors, kept on the tape for inspection.
#[derive(Clone, Copy, Debug)]
pub struct CabForwardArtifacts {
    /// Per-class scores `S`, shape `(n, L, 1, 1)`.
    pub scores: Var,
    /// Per-class spatial maps, shape `(n, L, h, w)`.
    pub class_maps: Var,
    /// Category attention map, shape `(n, 1, h, w)`.
    pub attention_map: Var,
}

/// `sigmoid(conv_b(relu(conv_a(GAP(x))))) * x`.
pub fn gab_channel_attention(tape: &mut Tape, f_in: Var, state: &GabState) -> Result<Var> {
    if tape.shape(f_in).c() != state.channels() {
        return Err(Error::Shape(format!(
            "GAB expects {} channels, got {}",
            state.channels(),
            tape.shape(f_in).c()
        )));
    }
    let pooled = tape.global_avg_pool(f_in)?;
    let hidden = state.conv_a.apply(tape, pooled)?;
    let hidden = tape.relu(hidden);
    let logits = state.conv_b.apply(tape, hidden)?;
    let weights = tape.sigmoid(logits);
    tape.broadcast_mul(f_in, weights)
}

/// `x * sigmoid(channel_mean(x))`, no parameters.
pub fn gab_spatial_attention(tape: &mut Tape, f_ch: Var) -> Result<Var> {
    let pooled = tape.cross_channel_avg_pool(f_ch)?;
    let map = tape.sigmoid(pooled);
    tape.broadcast_mul(f_ch, map)
}

pub fn gab_forward(tape: &mut Tape, f_reduce: Var, state: &GabState) -> Result<Var> {
    let ch = gab_channel_attention(tape, f_reduce, state)?;
    gab_spatial_attention(tape, ch)
}

/// 1x1 projection to `k*L` channels, followed by dropout while training.
pub fn cab_project(
    tape: &mut Tape,
    f_cab_in: Var,
    state: &CabState,
    training: bool,
    seed: u64,
) -> Result<Var> {
    if tape.shape(f_cab_in).c() != state.conv_k.c_in() {
        return Err(Error::Shape(format!(
            "CAB expects {} channels, got {}",
            state.conv_k.c_in(),
            tape.shape(f_cab_in).c()
        )));
    }
    let projected = state.conv_k.apply(tape, f_cab_in)?;
    tape.dropout(projected, state.dropout_rate, training, seed)
}

fn check_grouping(tape: &Tape, f_prime: Var, k: usize, classes: usize) -> Result<()> {
    let c = tape.shape(f_prime).c();
    if k == 0 || classes == 0 || c != k * classes {
        return Err(Error::Config(format!(
            "{c} channels cannot be split as k = {k} per class over {classes} classes"
        )));
    }
    Ok(())
}

/// `S_i = mean_j max_{x,y} f'_ij`, one score per class: `(n, L, 1, 1)`.
pub fn cab_scores(tape: &mut Tape, f_prime: Var, k: usize, classes: usize) -> Result<Var> {
    check_grouping(tape, f_prime, k, classes)?;
    let maxima = tape.global_max_pool(f_prime)?;
    tape.group_channel_mean(maxima, k)
}

/// Category-wise cross-channel mean: `(n, kL, h, w) -> (n, L, h, w)`.
pub fn cab_class_maps(tape: &mut Tape, f_prime: Var, k: usize, classes: usize) -> Result<Var> {
    check_grouping(tape, f_prime, k, classes)?;
    tape.group_channel_mean(f_prime, k)
}

/// Mean of the class maps at each pixel: `(n, L, h, w) -> (n, 1, h, w)`.
pub fn cab_attention_map(tape: &mut Tape, class_maps: Var) -> Result<Var> {
    tape.cross_channel_avg_pool(class_maps)
}

pub fn cab_forward(
    tape: &mut Tape,
    f_cab_in: Var,
    state: &CabState,
    training: bool,
    seed: u64,
) -> Result<(Var, CabForwardArtifacts)> {
    let f_prime = cab_project(tape, f_cab_in, state, training, seed)?;
    let scores = cab_scores(tape, f_prime, state.k, state.classes)?;
    let class_maps = cab_class_maps(tape, f_prime, state.k, state.classes)?;
    let mut attention_map = cab_attention_map(tape, class_maps)?;
    if state.sigmoid {
        attention_map = tape.sigmoid(attention_map);
    }
    let out = tape.broadcast_mul(f_cab_in, attention_map)?;
    Ok((
        out,
        CabForwardArtifacts {
            scores,
            class_maps,
            attention_map,
        },
    ))
}

/// Convenience for callers holding plain tensors: runs `f` on a fresh tape
/// with `input` as a constant and returns the output value.
pub fn eval_on_tape(
    input: &Tensor,
    f: impl FnOnce(&mut Tape, Var) -> Result<Var>,
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let x = tape.constant(input.clone());
    let y = f(&mut tape, x)?;
    Ok(tape.value(y).clone())
}
