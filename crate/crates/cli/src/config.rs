use std::collections::BTreeSet;
use std::path::PathBuf;

use anyhow::{Context, Result};
use chrono::{DateTime, Duration, Utc};
use rnnsm_core::data::WindowConfig;
use rnnsm_core::experiment::{ExperimentConfig, MODEL_NAMES};
use rnnsm_core::generator::GeneratorConfig;
use rnnsm_core::ingest::parse_instant;
use rnnsm_core::Error;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Window boundaries as ISO-8601 dates or timestamps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WindowDates {
    pub activity_start: String,
    pub prediction_start: String,
    pub horizon_end: String,
}

impl WindowDates {
    pub fn resolve(&self, epoch: DateTime<Utc>) -> rnnsm_core::Result<WindowConfig> {
        let parse = |s: &str| parse_instant(s).map_err(|e| Error::Config(e.to_string()));
        WindowConfig::from_instants(
            epoch,
            parse(&self.activity_start)?,
            parse(&self.prediction_start)?,
            parse(&self.horizon_end)?,
        )
    }

    /// The generator's windows written as calendar instants.
    pub fn from_generator(g: &GeneratorConfig) -> rnnsm_core::Result<Self> {
        let epoch = g.epoch()?;
        let w = g.window()?;
        let at = |days: f64| {
            (epoch + Duration::milliseconds((days * 86_400_000.0).round() as i64)).to_rfc3339()
        };
        Ok(WindowDates {
            activity_start: at(w.activity_start),
            prediction_start: at(w.prediction_start),
            horizon_end: at(w.horizon_end),
        })
    }
}

/// One run, read from a TOML file. Command-line flags override its keys.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Overrides the generator and experiment seeds when set.
    pub seed: Option<u64>,
    pub out: PathBuf,
    pub models: Vec<String>,
    pub threads: Option<usize>,
    /// JSON-lines sessions; when absent the synthetic generator supplies the data.
    pub data: Option<PathBuf>,
    /// Defaults to the generator's windows.
    pub windows: Option<WindowDates>,
    pub generator: GeneratorConfig,
    pub experiment: ExperimentConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: None,
            out: PathBuf::from("rnnsm-out"),
            models: vec!["all".into()],
            threads: None,
            data: None,
            windows: None,
            generator: GeneratorConfig::default(),
            experiment: ExperimentConfig::default(),
        }
    }
}

/// The keys that determine results, hashed into the manifest.
#[derive(Serialize)]
struct Hashed<'a> {
    models: &'a [String],
    data: &'a Option<PathBuf>,
    windows: &'a Option<WindowDates>,
    generator: &'a GeneratorConfig,
    experiment: &'a ExperimentConfig,
}

impl RunConfig {
    pub fn load(path: Option<&PathBuf>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(RunConfig::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        toml::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))
            .context("loading run configuration")
    }

    /// Applies the run seed to every component.
    pub fn apply_seed(&mut self) {
        if let Some(seed) = self.seed {
            self.generator.seed = seed;
            self.experiment = self.experiment.clone().with_seed(seed);
        }
    }

    /// Selected model names in canonical order; `all` selects every model.
    pub fn model_names(&self) -> rnnsm_core::Result<Vec<&'static str>> {
        let mut wanted = BTreeSet::new();
        for m in &self.models {
            let m = m.trim().to_ascii_lowercase();
            if m == "all" {
                wanted.extend(MODEL_NAMES);
            } else if let Some(known) = MODEL_NAMES.iter().find(|k| **k == m) {
                wanted.insert(*known);
            } else {
                return Err(Error::Config(format!(
                    "unknown model {m:?}; expected one of {} or all",
                    MODEL_NAMES.join(", ")
                )));
            }
        }
        if wanted.is_empty() {
            return Err(Error::Config("no models selected".into()));
        }
        Ok(MODEL_NAMES.iter().copied().filter(|m| wanted.contains(m)).collect())
    }

    pub fn hash(&self) -> String {
        let hashed = Hashed {
            models: &self.models,
            data: &self.data,
            windows: &self.windows,
            generator: &self.generator,
            experiment: &self.experiment,
        };
        let bytes = serde_json::to_vec(&hashed).expect("configuration serializes");
        format!("{:x}", Sha256::digest(bytes))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_toml_keeps_defaults() {
        let cfg: RunConfig = toml::from_str(
            "seed = 3\n[generator]\nuser_count = 50\n[experiment.rnnsm.train]\nepochs = 2\n",
        )
        .unwrap();
        assert_eq!(cfg.generator.user_count, 50);
        assert_eq!(cfg.generator.horizon_days, 540.0);
        assert_eq!(cfg.experiment.rnnsm.train.epochs, 2);
        assert_eq!(cfg.experiment.rnnsm.train.batch_size, 32);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(toml::from_str::<RunConfig>("sed = 3\n").is_err());
    }

    #[test]
    fn model_selection() {
        let mut cfg = RunConfig::default();
        assert_eq!(cfg.model_names().unwrap().len(), 6);
        cfg.models = vec!["rnnsma".into(), "CPH".into()];
        assert_eq!(cfg.model_names().unwrap(), vec!["cph", "rnnsma"]);
        cfg.models = vec!["lstm".into()];
        assert!(matches!(cfg.model_names(), Err(Error::Config(_))));
    }

    #[test]
    fn seed_reaches_every_component() {
        let mut cfg = RunConfig {
            seed: Some(11),
            ..RunConfig::default()
        };
        let before = cfg.hash();
        cfg.apply_seed();
        assert_eq!(cfg.generator.seed, 11);
        assert_eq!(cfg.experiment.seed, 11);
        assert_eq!(cfg.experiment.rnnsm.train.seed, 11);
        assert_ne!(cfg.hash(), before);
    }

    #[test]
    fn generator_windows_round_trip_through_dates() {
        let g = GeneratorConfig::default();
        let dates = WindowDates::from_generator(&g).unwrap();
        assert_eq!(dates.resolve(g.epoch().unwrap()).unwrap(), g.window().unwrap());
    }
}
