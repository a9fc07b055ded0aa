//! Run configuration: `key = value` files with `[section]` headers, overridden
//! by command-line flags. Every key is checked against a fixed table so a
//! typo is an error instead of a silently ignored setting.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};
use ekgnet::densenet::ArchConfig;
use ekgnet::experiment::RunSpec;
use ekgnet::hsi::{SplitRatios, SynthParams};
use ekgnet::mapping::MappingConfig;
use ekgnet::optim::AdamConfig;
use ekgnet::rng::derive_seed;
use ekgnet::train::TrainConfig;
use ekgnet::verify::Suite;

/// Recognized keys per section.
pub const SECTIONS: &[(&str, &[&str])] = &[
    (
        "data",
        &[
            "cube",
            "synthetic",
            "synth_classes",
            "synth_height",
            "synth_width",
            "synth_bands",
            "synth_noise",
            "block_size",
            "ratios",
        ],
    ),
    (
        "model",
        &[
            "stages",
            "k0",
            "growth_rates",
            "groups",
            "experts",
            "expert_bias",
            "mapping_blocks",
            "reduction",
            "gate_init",
            "tau_start",
            "tau_end",
            "anneal_epochs",
            "cross_links",
        ],
    ),
    (
        "train",
        &[
            "epochs",
            "batch_size",
            "lr",
            "beta1",
            "beta2",
            "eps",
            "patience",
        ],
    ),
    ("run", &["seed", "out", "precision", "suites"]),
];

fn section_of(key: &str) -> Option<&'static str> {
    SECTIONS
        .iter()
        .find(|(_, keys)| keys.contains(&key))
        .map(|(s, _)| *s)
}

pub fn is_known_key(key: &str) -> bool {
    section_of(key).is_some()
}

/// Raw settings: key → value, checked against the key table.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Settings(pub BTreeMap<String, String>);

impl Settings {
    /// Parses a configuration file. Keys before the first section header
    /// may belong to any section.
    pub fn parse(text: &str) -> Result<Settings> {
        let mut out = Settings::default();
        let mut section: Option<String> = None;
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                let name = name.trim();
                if !SECTIONS.iter().any(|(s, _)| *s == name) {
                    bail!("line {}: unknown section `[{name}]`", n + 1);
                }
                section = Some(name.to_string());
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| anyhow!("line {}: expected `key = value`, found `{line}`", n + 1))?;
            let (key, value) = (key.trim(), value.trim());
            match (section_of(key), &section) {
                (None, _) => bail!("line {}: unknown config key `{key}`", n + 1),
                (Some(home), Some(s)) if home != s => {
                    bail!(
                        "line {}: config key `{key}` belongs in [{home}], not [{s}]",
                        n + 1
                    )
                }
                _ => {}
            }
            if out.0.insert(key.to_string(), value.to_string()).is_some() {
                bail!("line {}: config key `{key}` set twice", n + 1);
            }
        }
        Ok(out)
    }

    pub fn load(path: &Path) -> Result<Settings> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("cannot read config file {}", path.display()))?;
        Settings::parse(&text).with_context(|| format!("in config file {}", path.display()))
    }

    /// Keeps the recognized keys of a recorded configuration (such as a
    /// checkpoint's), dropping derived entries.
    pub fn from_recorded(map: &BTreeMap<String, String>) -> Settings {
        Settings(
            map.iter()
                .filter(|(k, _)| is_known_key(k))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        )
    }

    pub fn set(&mut self, key: &str, value: impl ToString) -> Result<()> {
        if !is_known_key(key) {
            bail!("unknown config key `{key}`");
        }
        self.0.insert(key.to_string(), value.to_string());
        Ok(())
    }

    /// Entries of `other` replace those of `self`.
    pub fn overlay(&mut self, other: &Settings) {
        self.0
            .extend(other.0.iter().map(|(k, v)| (k.clone(), v.clone())));
    }

    pub fn has_any(&self, keys: &[&str]) -> bool {
        keys.iter().any(|k| self.0.contains_key(*k))
    }

    fn get<V: FromStr>(&self, key: &str, default: V) -> Result<V> {
        match self.0.get(key) {
            None => Ok(default),
            Some(s) => s.parse().map_err(|_| {
                anyhow!(
                    "config key `{key}`: cannot parse `{s}` as {}",
                    type_name::<V>()
                )
            }),
        }
    }

    fn list(&self, key: &str, default: Vec<usize>) -> Result<Vec<usize>> {
        match self.0.get(key) {
            None => Ok(default),
            Some(s) => s
                .split(',')
                .map(|p| {
                    p.trim().parse().map_err(|_| {
                        anyhow!("config key `{key}`: cannot parse `{s}` as a list of integers")
                    })
                })
                .collect(),
        }
    }

    /// Renders the settings as a configuration file.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for (section, keys) in SECTIONS {
            let present: Vec<_> = keys
                .iter()
                .filter_map(|k| self.0.get(*k).map(|v| (k, v)))
                .collect();
            if present.is_empty() {
                continue;
            }
            if !out.is_empty() {
                out.push('\n');
            }
            let _ = writeln!(out, "[{section}]");
            for (k, v) in present {
                let _ = writeln!(out, "{k} = {v}");
            }
        }
        out
    }
}

fn type_name<V>() -> &'static str {
    let full = std::any::type_name::<V>();
    match full {
        "bool" => "a boolean",
        "f64" => "a number",
        "u64" | "usize" => "a non-negative integer",
        _ => full.rsplit("::").next().unwrap_or(full),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

impl FromStr for Precision {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            _ => Err(format!("expected f32 or f64, found `{s}`")),
        }
    }
}

impl Precision {
    pub fn name(self) -> &'static str {
        match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Cube(PathBuf),
    Synthetic(SynthParams),
}

/// Fully resolved settings of one command.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub data: Option<DataSource>,
    /// Model and training settings; `bands` and `num_classes` are filled in
    /// from the data.
    pub spec: RunSpec,
    pub out: PathBuf,
    pub precision: Precision,
    pub suites: Vec<Suite>,
    /// The settings this configuration was resolved from.
    pub settings: Settings,
}

impl RunConfig {
    pub fn resolve(settings: Settings) -> Result<RunConfig> {
        let s = &settings;
        let seed: u64 = s.get("seed", 0)?;

        let synthetic: bool = s.get("synthetic", false)?;
        let synth_keys = [
            "synth_classes",
            "synth_height",
            "synth_width",
            "synth_bands",
            "synth_noise",
        ];
        let data = match (s.0.get("cube"), synthetic) {
            (Some(_), true) => bail!("config key `cube` conflicts with `synthetic = true`"),
            (Some(path), false) => {
                if let Some(k) = synth_keys.iter().find(|k| s.0.contains_key(**k)) {
                    bail!("config key `{k}` only applies to synthetic data");
                }
                let path = PathBuf::from(path);
                if !path.is_file() {
                    bail!("config key `cube`: file {} does not exist", path.display());
                }
                Some(DataSource::Cube(path))
            }
            (None, true) => {
                let d = SynthParams::default();
                let p = SynthParams {
                    classes: s.get("synth_classes", d.classes)?,
                    height: s.get("synth_height", d.height)?,
                    width: s.get("synth_width", d.width)?,
                    bands: s.get("synth_bands", d.bands)?,
                    noise: s.get("synth_noise", d.noise)?,
                    seed: derive_seed(seed, "generator"),
                    prototypes: None,
                };
                p.validate().map_err(|e| anyhow!("synthetic data: {e}"))?;
                Some(DataSource::Synthetic(p))
            }
            (None, false) => None,
        };

        let base = ArchConfig::base(1, 1);
        let stages = s.list("stages", base.stages.clone())?;
        let k0 = s.get("k0", base.k0)?;
        let mut arch = ArchConfig::new(stages, k0, 0, s.get("block_size", base.block_size)?, 0);
        if s.0.contains_key("growth_rates") {
            arch.growth_rates = s.list("growth_rates", Vec::new())?;
        }
        let dm = MappingConfig::default();
        arch.groups = s.get("groups", arch.groups)?;
        arch.experts = s.get("experts", arch.experts)?;
        arch.expert_bias = s.get("expert_bias", arch.expert_bias)?;
        arch.cross_links = s.get("cross_links", arch.cross_links)?;
        arch.mapping.blocks = s.get("mapping_blocks", dm.blocks)?;
        arch.mapping.reduction = s.get("reduction", dm.reduction)?;
        arch.mapping.gate_init = s.get("gate_init", dm.gate_init)?;
        arch.mapping.schedule.start = s.get("tau_start", dm.schedule.start)?;
        arch.mapping.schedule.end = s.get("tau_end", dm.schedule.end)?;
        arch.mapping.schedule.anneal_epochs = s.get("anneal_epochs", dm.schedule.anneal_epochs)?;
        if arch.block_size % 2 == 0 {
            bail!(
                "config key `block_size`: must be odd, found {}",
                arch.block_size
            );
        }

        let dt = TrainConfig::default();
        let da = AdamConfig::default();
        let patience = match s.0.get("patience").map(String::as_str) {
            None | Some("none") => None,
            Some(_) => Some(s.get("patience", 0usize)?),
        };
        let train = TrainConfig {
            epochs: s.get("epochs", dt.epochs)?,
            batch_size: s.get("batch_size", dt.batch_size)?,
            adam: AdamConfig {
                lr: s.get("lr", da.lr)?,
                beta1: s.get("beta1", da.beta1)?,
                beta2: s.get("beta2", da.beta2)?,
                eps: s.get("eps", da.eps)?,
            },
            seed,
            patience,
        };
        train.validate()?;

        let ratios = match s.0.get("ratios") {
            None => SplitRatios([6, 1, 3]),
            Some(r) => SplitRatios::parse(r).map_err(|e| anyhow!("config key `ratios`: {e}"))?,
        };
        let suites = match s.0.get("suites").map(String::as_str) {
            None | Some("all") => Suite::ALL.to_vec(),
            Some(list) => list
                .split(',')
                .map(|n| Suite::parse(n.trim()).map_err(|e| anyhow!("config key `suites`: {e}")))
                .collect::<Result<_>>()?,
        };
        Ok(RunConfig {
            data,
            spec: RunSpec {
                arch,
                train,
                ratios,
                seed,
            },
            out: PathBuf::from(s.0.get("out").map_or("ekgnet-out", String::as_str)),
            precision: s.get("precision", Precision::F32)?,
            suites,
            settings,
        })
    }

    /// Data-source entries to record next to the model configuration.
    pub fn data_entries(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        match &self.data {
            Some(DataSource::Cube(p)) => {
                m.insert("cube".into(), p.display().to_string());
            }
            Some(DataSource::Synthetic(p)) => {
                m.insert("synthetic".into(), "true".into());
                m.insert("synth_classes".into(), p.classes.to_string());
                m.insert("synth_height".into(), p.height.to_string());
                m.insert("synth_width".into(), p.width.to_string());
                m.insert("synth_bands".into(), p.bands.to_string());
                m.insert("synth_noise".into(), p.noise.to_string());
            }
            None => {}
        }
        m
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_applies_defaults() {
        let cfg = RunConfig::resolve(Settings::parse("").unwrap()).unwrap();
        assert_eq!(cfg.data, None);
        assert_eq!(cfg.spec.seed, 0);
        assert_eq!(cfg.spec.ratios, SplitRatios([6, 1, 3]));
        assert_eq!(cfg.spec.arch.stages, vec![4, 6, 8]);
        assert_eq!(cfg.spec.arch.growth_rates, vec![8, 16, 32]);
        assert_eq!(cfg.spec.arch.block_size, 15);
        assert_eq!(cfg.spec.train.epochs, 80);
        assert_eq!(cfg.spec.train.batch_size, 16);
        assert_eq!(cfg.spec.train.adam.lr, 1e-3);
        assert_eq!(cfg.precision, Precision::F32);
        assert_eq!(cfg.suites, Suite::ALL.to_vec());
    }

    #[test]
    fn unknown_key_is_named() {
        let err = Settings::parse("[model]\ngrowht_rate = 8\n").unwrap_err();
        assert!(err.to_string().contains("`growht_rate`"), "{err}");
        let err = Settings::parse("[train]\nk0 = 8\n").unwrap_err();
        assert!(err.to_string().contains("belongs in [model]"), "{err}");
    }

    #[test]
    fn type_mismatch_is_named() {
        let s = Settings::parse("epochs = many").unwrap();
        let err = RunConfig::resolve(s).unwrap_err();
        assert!(err.to_string().contains("`epochs`"), "{err}");
    }

    #[test]
    fn ratios_parse() {
        let s = Settings::parse("[data]\nratios = 6:1:3\n").unwrap();
        assert_eq!(
            RunConfig::resolve(s).unwrap().spec.ratios,
            SplitRatios([6, 1, 3])
        );
    }

    #[test]
    fn sections_and_comments() {
        let text = "seed = 7 # root\n\n[model]\nstages = 2,2\nk0 = 4\n[train]\nepochs = 3\n";
        let s = Settings::parse(text).unwrap();
        let cfg = RunConfig::resolve(s.clone()).unwrap();
        assert_eq!(cfg.spec.seed, 7);
        assert_eq!(cfg.spec.arch.growth_rates, vec![4, 8]);
        assert_eq!(cfg.spec.train.epochs, 3);
        assert_eq!(Settings::parse(&s.render()).unwrap(), s);
    }

    #[test]
    fn missing_cube_file_is_an_error() {
        let s = Settings::parse("cube = /definitely/not/here.ekgh").unwrap();
        let err = RunConfig::resolve(s).unwrap_err();
        assert!(err.to_string().contains("`cube`"), "{err}");
    }
}
