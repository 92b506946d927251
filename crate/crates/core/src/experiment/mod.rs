//! Experiment orchestration: configuration, seeded runs over
//! (architecture, seed) pairs, dictionary-size sweeps, aggregation and
//! plot-data emission.
//!
//! Every run derives all of its randomness from one master seed: the
//! concept bank, model initialization, training stream, held-out stream
//! and stitch stream use distinct substreams (see [`crate::rng`]). Runs
//! with the same seed therefore share the concept bank across
//! architectures.

mod plot;
mod runner;

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::crosscoder::{Architecture, CrosscoderModel, PartitionLayout, DEFAULT_DSF_MULTIPLIER};
use crate::error::{Error, Result};
use crate::evaluation::EvalConfig;
use crate::synthdata::ToyConfig;
use crate::training::TrainConfig;
use crate::transfer::StitchConfig;

pub use plot::{emit_plot_data, PlotDataSummary};
pub use runner::{
    aggregate, aggregate_csv, curve_from_checkpoints, evaluate_model, fit_run_stitch,
    run_experiment, run_single, sweep_csv, sweep_dictionary, AggregateRow, ExperimentOutcome,
    MeanSe, RunConfig, RunResult,
};

/// Fractions of the dictionary assigned to each partition.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayoutFractions {
    pub a_exclusive: f64,
    pub b_exclusive: f64,
    pub shared: f64,
}

impl LayoutFractions {
    pub fn all_shared() -> Self {
        Self {
            a_exclusive: 0.0,
            b_exclusive: 0.0,
            shared: 1.0,
        }
    }

    /// `exclusive` of the dictionary per model, the rest shared.
    pub fn dedicated(exclusive: f64) -> Self {
        Self {
            a_exclusive: exclusive,
            b_exclusive: exclusive,
            shared: 1.0 - 2.0 * exclusive,
        }
    }
}

/// One architecture entry of an experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchSpec {
    pub arch: Architecture,
    pub dict_size: usize,
    /// Directory name under `runs/`; the architecture name when unset.
    #[serde(default)]
    pub name: Option<String>,
    /// Partition fractions; all shared for standard/DSF and 5% exclusive
    /// per model for DFC when unset.
    #[serde(default)]
    pub layout: Option<LayoutFractions>,
    /// DSF: fraction of the dictionary in the designated shared pool.
    #[serde(default = "default_designated_fraction")]
    pub designated_fraction: f64,
    /// DSF: TopK budget multiplier of the designated pool.
    #[serde(default = "default_dsf_multiplier")]
    pub dsf_multiplier: f64,
}

fn default_designated_fraction() -> f64 {
    0.1
}

fn default_dsf_multiplier() -> f64 {
    DEFAULT_DSF_MULTIPLIER
}

pub const DEFAULT_DFC_EXCLUSIVE_FRACTION: f64 = 0.05;

impl ArchSpec {
    pub fn new(arch: Architecture, dict_size: usize) -> Self {
        Self {
            arch,
            dict_size,
            name: None,
            layout: None,
            designated_fraction: default_designated_fraction(),
            dsf_multiplier: default_dsf_multiplier(),
        }
    }

    /// Entry describing an existing model's architecture and partition.
    pub fn of_model<S: crate::Scalar>(model: &CrosscoderModel<S>) -> Self {
        let m = model.dict_size() as f64;
        let l = model.layout;
        let mut spec = Self::new(model.arch, model.dict_size());
        match model.arch {
            Architecture::Dfc => {
                let a = l.a_exclusive().len() as f64 / m;
                let b = l.b_exclusive().len() as f64 / m;
                spec.layout = Some(LayoutFractions {
                    a_exclusive: a,
                    b_exclusive: b,
                    shared: 1.0 - a - b,
                });
            }
            Architecture::Dsf => {
                spec.designated_fraction = l.designated_range().len() as f64 / m;
                spec.dsf_multiplier = model.dsf_multiplier;
            }
            Architecture::Standard => {}
        }
        spec
    }

    pub fn name(&self) -> String {
        self.name
            .clone()
            .unwrap_or_else(|| self.arch.name().to_string())
    }

    pub fn fractions(&self) -> LayoutFractions {
        self.layout.unwrap_or(match self.arch {
            Architecture::Dfc => LayoutFractions::dedicated(DEFAULT_DFC_EXCLUSIVE_FRACTION),
            _ => LayoutFractions::all_shared(),
        })
    }

    pub fn partition_layout(&self) -> PartitionLayout {
        let m = self.dict_size;
        let count = |f: f64| (m as f64 * f).round() as usize;
        match self.arch {
            Architecture::Standard => PartitionLayout::standard(m),
            Architecture::Dfc => {
                let f = self.fractions();
                PartitionLayout::dedicated(m, count(f.a_exclusive), count(f.b_exclusive))
            }
            Architecture::Dsf => {
                PartitionLayout::designated(m, count(self.designated_fraction).max(1))
            }
        }
    }

    /// Copy with every optional field resolved.
    pub fn effective(&self) -> Self {
        Self {
            name: Some(self.name()),
            layout: Some(self.fractions()),
            ..self.clone()
        }
    }

    pub fn validate(&self, index: usize) -> Result<()> {
        let field = |f: &str| format!("archs[{index}].{f}");
        if self.dict_size == 0 {
            return Err(Error::config(field("dict_size"), "must be positive"));
        }
        let f = self.fractions();
        let parts = [f.a_exclusive, f.b_exclusive, f.shared];
        if parts.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::config(
                field("layout"),
                "fractions must lie in [0, 1]",
            ));
        }
        if (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::config(field("layout"), "fractions must sum to 1"));
        }
        match self.arch {
            Architecture::Dfc => {
                let l = self.partition_layout();
                if l.a_end == 0 || l.b_end == l.a_end {
                    return Err(Error::config(
                        field("layout"),
                        "DFC exclusive partitions round to zero features",
                    ));
                }
            }
            _ if f.shared != 1.0 => {
                return Err(Error::config(
                    field("layout"),
                    format!("{} crosscoders have no exclusive partitions", self.arch),
                ));
            }
            _ => {}
        }
        if self.arch == Architecture::Dsf {
            if !(self.designated_fraction > 0.0 && self.designated_fraction < 1.0) {
                return Err(Error::config(
                    field("designated_fraction"),
                    "must lie in (0, 1)",
                ));
            }
            if !(self.dsf_multiplier >= 1.0) {
                return Err(Error::config(field("dsf_multiplier"), "must be at least 1"));
            }
        }
        let name = self.name();
        if name.is_empty() || name.contains(['/', '\\']) || name == "." || name == ".." {
            return Err(Error::config(
                field("name"),
                "must be a plain directory name",
            ));
        }
        self.partition_layout().validate(self.arch)
    }
}

/// Stitch fit used for the exclusivity proxy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProxySettings {
    pub stitch: StitchConfig,
    /// Paired rows used to fit the stitch.
    pub rows: usize,
}

impl Default for ProxySettings {
    fn default() -> Self {
        Self {
            stitch: StitchConfig::default(),
            rows: 20_000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    Desk,
    Paper,
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Preset::Desk),
            "paper" => Ok(Preset::Paper),
            other => Err(Error::config("preset", format!("unknown preset `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub toy: ToyConfig,
    pub archs: Vec<ArchSpec>,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    /// Record a recovery-curve point every this many steps.
    pub curve_every: Option<usize>,
    /// Save an intermediate checkpoint every this many steps.
    pub checkpoint_every: Option<usize>,
    /// Fit a stitch and attach exclusivity-proxy scores to each report.
    pub proxy: Option<ProxySettings>,
    /// Worker threads; all available cores when unset.
    pub threads: Option<usize>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::paper()
    }
}

impl ExperimentConfig {
    /// Full toy setup: 2048 concepts in 256 dimensions, a dictionary matching
    /// the concept count, 800M training pairs.
    pub fn paper() -> Self {
        let m = 2048;
        Self {
            toy: ToyConfig::paper(),
            archs: vec![
                ArchSpec::new(Architecture::Standard, m),
                ArchSpec::new(Architecture::Dfc, m),
                ArchSpec::new(Architecture::Dsf, m),
            ],
            train: TrainConfig {
                steps: 390_625,
                k_final: 20,
                k_initial: 100,
                k_aux: 256,
                ..TrainConfig::default()
            },
            eval: EvalConfig::default(),
            seeds: vec![0, 1, 2, 3, 4],
            output_dir: PathBuf::from("out"),
            curve_every: Some(10_000),
            checkpoint_every: Some(50_000),
            proxy: None,
            threads: None,
        }
    }

    /// Minutes-scale setup: 256 concepts in 64 dimensions.
    pub fn desk() -> Self {
        let m = 256;
        Self {
            toy: ToyConfig::desk(),
            archs: vec![
                ArchSpec::new(Architecture::Standard, m),
                ArchSpec::new(Architecture::Dfc, m),
            ],
            train: desk_train(),
            eval: EvalConfig::default(),
            seeds: vec![0, 1, 2, 3, 4],
            output_dir: PathBuf::from("out"),
            curve_every: Some(100),
            checkpoint_every: None,
            proxy: None,
            threads: None,
        }
    }

    pub fn preset(p: Preset) -> Self {
        match p {
            Preset::Desk => Self::desk(),
            Preset::Paper => Self::paper(),
        }
    }

    /// Copy with every optional field resolved, as written next to each run.
    pub fn effective(&self) -> Self {
        Self {
            toy: self.toy.effective(),
            archs: self.archs.iter().map(ArchSpec::effective).collect(),
            train: self.train.effective(),
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.toy.validate()?;
        self.train.validate()?;
        self.eval.validate()?;
        if self.seeds.is_empty() {
            return Err(Error::config("seeds", "must not be empty"));
        }
        let unique: BTreeSet<_> = self.seeds.iter().collect();
        if unique.len() != self.seeds.len() {
            return Err(Error::config("seeds", "must not repeat"));
        }
        if self.archs.is_empty() {
            return Err(Error::config("archs", "must not be empty"));
        }
        let mut names = BTreeSet::new();
        for (i, a) in self.archs.iter().enumerate() {
            a.validate(i)?;
            if a.dict_size < self.train.k_final {
                return Err(Error::config(
                    format!("archs[{i}].dict_size"),
                    format!("must be at least train.k_final = {}", self.train.k_final),
                ));
            }
            if a.arch == Architecture::Dsf && self.toy.d_act == 0 {
                return Err(Error::config("toy.d_act", "must be positive"));
            }
            if !names.insert(a.name()) {
                return Err(Error::config(
                    format!("archs[{i}].name"),
                    format!("duplicate run name `{}`", a.name()),
                ));
            }
        }
        if self.curve_every == Some(0) {
            return Err(Error::config("curve_every", "must be positive"));
        }
        if self.checkpoint_every == Some(0) {
            return Err(Error::config("checkpoint_every", "must be positive"));
        }
        if self.threads == Some(0) {
            return Err(Error::config("threads", "must be positive"));
        }
        if let Some(p) = &self.proxy {
            if p.rows <= self.toy.d_act {
                return Err(Error::config("proxy.rows", "must exceed toy.d_act"));
            }
        }
        Ok(())
    }

    /// Parses a JSON document layered over `base`: keys present in the
    /// document replace the preset's values, nested objects merge.
    pub fn from_json_over(base: &Self, text: &str) -> Result<Self> {
        let overlay: Value = serde_json::from_str(text)?;
        let mut merged = serde_json::to_value(base)?;
        merge(&mut merged, overlay);
        let cfg: Self =
            serde_json::from_value(merged).map_err(|e| Error::config("config", e.to_string()))?;
        Ok(cfg)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::config("config", e.to_string()))
    }

    pub fn load(path: &Path, base: &Self) -> Result<Self> {
        let bytes = crate::io::read_file(path)?;
        let text = String::from_utf8(bytes)
            .map_err(|_| Error::config("config", format!("{} is not UTF-8", path.display())))?;
        Self::from_json_over(base, &text)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }
}

fn merge(base: &mut Value, overlay: Value) {
    match (base, overlay) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Desk-scale training schedule.
pub fn desk_train() -> TrainConfig {
    TrainConfig {
        lr: 1e-3,
        steps: 20_000,
        warmup_steps: 500,
        batch: 256,
        k_final: 4,
        k_initial: 16,
        anneal_steps: 500,
        alpha_aux: 0.03,
        k_aux: 64,
        calibration_batches: 10,
        ..TrainConfig::default()
    }
}
