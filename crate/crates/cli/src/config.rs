//! Layered run configuration: defaults, then a TOML file, then flags.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use clap::Args;
use drgrade_core::backbone::AttentionMode;
use drgrade_core::trainer::TrainConfig;
use drgrade_core::{Error, Result};
use serde::Serialize;
use toml::Table;

/// Where a resolved value came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Source {
    Default,
    File,
    Flag,
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Source::Default => "default",
            Source::File => "file",
            Source::Flag => "flag",
        })
    }
}

/// Training flags shared by `train` and `ablate`. Field names are config keys.
#[derive(Args, Clone, Debug, Default, Serialize)]
pub struct TrainFlags {
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epochs: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lr_phase1: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lr_phase2: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub phase1_epochs: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub plateau_patience: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub plateau_factor: Option<f64>,
    /// Channels per class in the category attention block.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stage_widths: Option<Vec<usize>>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reduced_channels: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub input_size: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dropout_rate: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub aux_score_loss_weight: Option<f64>,
    /// baseline, gab_only, cab_only or gab_cab.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub attention: Option<AttentionMode>,
}

impl TrainFlags {
    /// The flags that were given, as config keys, plus `seed` if set.
    pub fn to_table(&self, seed: Option<u64>) -> Table {
        let mut t = Table::try_from(self).expect("flags serialize");
        if let Some(s) = seed {
            t.insert("seed".into(), toml::Value::Integer(s as i64));
        }
        t
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub provenance: BTreeMap<String, Source>,
}

impl RunConfig {
    /// One `key = value  # source` line per key. Parses back as a config file.
    pub fn render(&self) -> String {
        let table = Table::try_from(&self.train).expect("config serializes");
        let mut out = String::from("# resolved configuration (source: flag, file or default)\n");
        for (key, value) in &table {
            out.push_str(&format!("{key} = {value}  # {}\n", self.provenance[key]));
        }
        out
    }
}

fn read_table(path: &Path) -> Result<Table> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
    text.parse()
        .map_err(|e| Error::Config(format!("cannot parse config {}: {e}", path.display())))
}

/// Merges defaults, `file` and `flags`, later layers winning.
pub fn resolve_config(flags: &Table, file: Option<&Path>) -> Result<RunConfig> {
    let mut merged = Table::try_from(TrainConfig::default()).expect("defaults serialize");
    let mut provenance: BTreeMap<String, Source> =
        merged.keys().map(|k| (k.clone(), Source::Default)).collect();
    let file_table = match file {
        Some(p) => read_table(p)?,
        None => Table::new(),
    };
    for (layer, source) in [(&file_table, Source::File), (flags, Source::Flag)] {
        let unknown: Vec<&str> = layer
            .keys()
            .filter(|k| !provenance.contains_key(*k))
            .map(String::as_str)
            .collect();
        if !unknown.is_empty() {
            return Err(Error::Config(format!("unknown config key(s): {}", unknown.join(", "))));
        }
        for (k, v) in layer {
            merged.insert(k.clone(), v.clone());
            provenance.insert(k.clone(), source);
        }
    }
    let train: TrainConfig = merged
        .try_into()
        .map_err(|e| Error::Config(format!("invalid config: {e}")))?;
    train.validate()?;
    Ok(RunConfig { train, provenance })
}
