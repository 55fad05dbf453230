//! Flat key=value run configuration.
//!
//! One key per line, `#` starts a comment, unknown keys are rejected so a
//! typo cannot silently fall back to a default. A `preset` picks the desk-
//! or full-scale base values; every explicit key overrides its preset value.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ran_core::align::{AlignmentConfig, DiscrepancyKind, StrategyKind};
use ran_core::encoder::Aggregation;
use ran_core::ingest::SynthDomainConfig;
use ran_core::train::{desk_train_config, TrainConfig};
use ran_core::{Error, Result};

/// Floating-point width the whole pipeline runs in.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

/// One domain's data source: a trajectory file or a simulator spec.
#[derive(Clone, Debug)]
pub enum DomainSpec {
    File { path: PathBuf, unit_scale: f64 },
    Synth(SynthDomainConfig),
}

/// Everything a command needs: data specs, model and training settings, and
/// where outputs go.
#[derive(Clone, Debug)]
pub struct RunConfig {
    pub precision: Precision,
    pub out: PathBuf,
    pub sources: Vec<DomainSpec>,
    pub test: Option<DomainSpec>,
    pub train: TrainConfig,
    /// Window start spacing when slicing trajectories.
    pub stride: usize,
}

/// Key=value map with position info for error messages, consumed key by key
/// so leftovers can be reported as unknown.
struct KeyMap {
    entries: BTreeMap<String, String>,
}

impl KeyMap {
    fn parse(text: &str) -> Result<KeyMap> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(pos) => &raw[..pos],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config(format!(
                    "config line {}: expected key = value, got '{line}'",
                    i + 1
                )));
            };
            let key = key.trim().to_string();
            let value = value.trim().to_string();
            if entries.insert(key.clone(), value).is_some() {
                return Err(Error::Config(format!("duplicate config key '{key}'")));
            }
        }
        Ok(KeyMap { entries })
    }

    fn take(&mut self, key: &str) -> Option<String> {
        self.entries.remove(key)
    }

    fn take_parsed<T: std::str::FromStr>(&mut self, key: &str, what: &str) -> Result<Option<T>> {
        match self.take(key) {
            None => Ok(None),
            Some(v) => v.parse::<T>().map(Some).map_err(|_| {
                Error::Config(format!("config key {key}: cannot parse '{v}' as {what}"))
            }),
        }
    }

    fn has_prefix(&self, prefix: &str) -> bool {
        self.entries.range(prefix.to_string()..).next().is_some_and(|(k, _)| k.starts_with(prefix))
    }

    fn finish(self) -> Result<()> {
        if let Some((key, _)) = self.entries.into_iter().next() {
            return Err(Error::Config(format!("unknown config key '{key}'")));
        }
        Ok(())
    }
}

fn take_f64(map: &mut KeyMap, key: &str, into: &mut f64) -> Result<()> {
    if let Some(v) = map.take_parsed::<f64>(key, "a number")? {
        *into = v;
    }
    Ok(())
}

fn take_usize(map: &mut KeyMap, key: &str, into: &mut usize) -> Result<()> {
    if let Some(v) = map.take_parsed::<usize>(key, "a non-negative integer")? {
        *into = v;
    }
    Ok(())
}

/// Reads one domain spec under `prefix` (e.g. "source.0" or "test").
/// Returns None when no key carries the prefix.
fn take_domain(map: &mut KeyMap, prefix: &str) -> Result<Option<DomainSpec>> {
    let file_key = format!("{prefix}.file");
    let scale_key = format!("{prefix}.unit_scale");
    let synth_prefix = format!("{prefix}.synth.");
    if let Some(path) = map.take(&file_key) {
        if map.has_prefix(&synth_prefix) {
            return Err(Error::Config(format!(
                "{prefix} mixes a file with synth keys; pick one"
            )));
        }
        let unit_scale = map.take_parsed::<f64>(&scale_key, "a number")?.unwrap_or(1.0);
        return Ok(Some(DomainSpec::File {
            path: PathBuf::from(path),
            unit_scale,
        }));
    }
    if !map.has_prefix(&synth_prefix) {
        return Ok(None);
    }
    // Defaults describe a small, gently noisy crowd; every field can be set.
    let mut synth = SynthDomainConfig {
        n_agents: 6,
        n_frames: 60,
        speed_mean: 1.2,
        speed_std: 0.1,
        turn_rate_std: 0.1,
        repulsion_radius: 1.0,
        noise_std: 0.01,
        seed: 1,
    };
    take_usize(map, &format!("{prefix}.synth.n_agents"), &mut synth.n_agents)?;
    take_usize(map, &format!("{prefix}.synth.n_frames"), &mut synth.n_frames)?;
    take_f64(map, &format!("{prefix}.synth.speed_mean"), &mut synth.speed_mean)?;
    take_f64(map, &format!("{prefix}.synth.speed_std"), &mut synth.speed_std)?;
    take_f64(map, &format!("{prefix}.synth.turn_rate_std"), &mut synth.turn_rate_std)?;
    take_f64(map, &format!("{prefix}.synth.repulsion_radius"), &mut synth.repulsion_radius)?;
    take_f64(map, &format!("{prefix}.synth.noise_std"), &mut synth.noise_std)?;
    if let Some(seed) = map.take_parsed::<u64>(&format!("{prefix}.synth.seed"), "an integer")? {
        synth.seed = seed;
    }
    synth.validate()?;
    Ok(Some(DomainSpec::Synth(synth)))
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::Config(format!("cannot read config {}: {e}", path.display()))
        })?;
        RunConfig::from_str(&text)
    }

    pub fn from_str(text: &str) -> Result<RunConfig> {
        let mut map = KeyMap::parse(text)?;

        let mut train = match map.take("preset") {
            None => desk_train_config(),
            Some(p) if p == "desk" => desk_train_config(),
            Some(p) if p == "paper" => TrainConfig::default(),
            Some(p) => {
                return Err(Error::Config(format!(
                    "config key preset: '{p}' is not desk or paper"
                )))
            }
        };

        let precision = match map.take("precision") {
            None => Precision::F64,
            Some(p) if p == "f32" => Precision::F32,
            Some(p) if p == "f64" => Precision::F64,
            Some(p) => {
                return Err(Error::Config(format!(
                    "config key precision: '{p}' is not f32 or f64"
                )))
            }
        };

        if let Some(seed) = map.take_parsed::<u64>("seed", "an integer")? {
            train.seed = seed;
        }
        let out = PathBuf::from(map.take("out").unwrap_or_else(|| "out".into()));

        let mut dims = train.dims;
        take_usize(&mut map, "model.mlp_h1", &mut dims.mlp_h1)?;
        take_usize(&mut map, "model.mlp_h2", &mut dims.mlp_h2)?;
        take_usize(&mut map, "model.d", &mut dims.d)?;
        take_usize(&mut map, "model.hidden", &mut dims.hidden)?;
        take_usize(&mut map, "model.k", &mut dims.k)?;
        take_usize(&mut map, "model.t_obs", &mut dims.t_obs)?;
        take_usize(&mut map, "model.t_pred", &mut dims.t_pred)?;
        take_usize(&mut map, "model.a_max", &mut dims.a_max)?;
        take_usize(&mut map, "model.gru_layers", &mut dims.gru_layers)?;
        take_usize(&mut map, "model.heads", &mut dims.heads)?;
        take_usize(&mut map, "model.dec_hidden", &mut dims.dec_hidden)?;
        train.dims = dims;

        let mut align = AlignmentConfig::default();
        if let Some(m) = map.take("align.measure") {
            align.measure = DiscrepancyKind::parse(&m)?;
        }
        if let Some(s) = map.take("align.strategy") {
            align.strategy = StrategyKind::parse(&s)?;
        }
        take_f64(&mut map, "align.lambda1", &mut align.lambda1)?;
        take_f64(&mut map, "align.lambda2", &mut align.lambda2)?;
        train.align = align;

        if let Some(a) = map.take("train.aggregation") {
            train.aggregation = Aggregation::parse(&a)?;
        }
        take_f64(&mut map, "train.lr", &mut train.lr)?;
        take_usize(&mut map, "train.batch", &mut train.batch_size)?;
        take_usize(&mut map, "train.epochs", &mut train.epochs)?;
        take_f64(&mut map, "train.decay", &mut train.decay)?;
        take_usize(&mut map, "train.interval", &mut train.decay_interval)?;

        let mut stride = 1usize;
        take_usize(&mut map, "windows.stride", &mut stride)?;
        if stride == 0 {
            return Err(Error::Config("windows.stride must be ≥ 1".into()));
        }

        let mut sources = Vec::new();
        loop {
            match take_domain(&mut map, &format!("source.{}", sources.len()))? {
                Some(spec) => sources.push(spec),
                None => break,
            }
        }
        let test = take_domain(&mut map, "test")?;

        map.finish()?;
        align_m_to_sources(&mut train, sources.len());
        train.validate()?;
        Ok(RunConfig {
            precision,
            out,
            sources,
            test,
            train,
            stride,
        })
    }
}

/// The multi-source count follows the configured sources (minimum 2 so a
/// config parsed for non-training commands still validates).
fn align_m_to_sources(train: &mut TrainConfig, n_sources: usize) {
    train.align.m = n_sources.max(2);
}
