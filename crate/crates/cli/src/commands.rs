use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use chrono::{DateTime, Utc};
use rnnsm_core::baselines::{baseline_predict, SimpleRnn};
use rnnsm_core::checkpoint::{load_network, save_network, TrainedNetwork};
use rnnsm_core::cox::CoxModel;
use rnnsm_core::data::{assign_windows, stratified_split, Dataset};
use rnnsm_core::evaluation::{
    read_predictions_csv, write_predictions_csv, EvaluationReport, PredictionRecord,
};
use rnnsm_core::experiment::select_rnnsm_hyperparameters;
use rnnsm_core::generator::{generate, write_ground_truth_csv};
use rnnsm_core::ingest::{read_sessions_jsonl, write_sessions_jsonl};
use rnnsm_core::rnnsm::{EmbeddingWidths, RnnsmModel};
use rnnsm_core::Error;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::{RunConfig, WindowDates};

const MODELS_DIR: &str = "models";
const PREDICTIONS_DIR: &str = "predictions";
const PLOTS_DIR: &str = "plots";

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    config_sha256: String,
    generator_seed: u64,
    experiment_seed: u64,
    models: Vec<&'a str>,
    versions: BTreeMap<&'static str, &'static str>,
    /// SHA-256 of every file written, keyed by path relative to the output directory.
    outputs: BTreeMap<String, String>,
}

/// Tracks the files a command writes so the manifest can list them.
struct Outputs {
    root: PathBuf,
    written: Vec<PathBuf>,
}

impl Outputs {
    fn new(root: &Path) -> Result<Self> {
        fs::create_dir_all(root).with_context(|| format!("creating {}", root.display()))?;
        Ok(Outputs {
            root: root.to_path_buf(),
            written: Vec::new(),
        })
    }

    fn path(&mut self, rel: &str) -> Result<PathBuf> {
        let p = self.root.join(rel);
        if let Some(parent) = p.parent() {
            fs::create_dir_all(parent)?;
        }
        self.written.push(PathBuf::from(rel));
        Ok(p)
    }

    fn write_with(
        &mut self,
        rel: &str,
        f: impl FnOnce(&mut BufWriter<File>) -> rnnsm_core::Result<()>,
    ) -> Result<()> {
        let p = self.path(rel)?;
        let mut out = BufWriter::new(File::create(&p).with_context(|| format!("creating {}", p.display()))?);
        f(&mut out)?;
        out.flush()?;
        Ok(())
    }

    fn write_str(&mut self, rel: &str, text: &str) -> Result<()> {
        let p = self.path(rel)?;
        fs::write(&p, text).with_context(|| format!("writing {}", p.display()))?;
        Ok(())
    }

    fn write_manifest(&self, command: &str, cfg: &RunConfig, models: Vec<&str>) -> Result<()> {
        let mut outputs = BTreeMap::new();
        for rel in &self.written {
            let bytes = fs::read(self.root.join(rel))?;
            outputs.insert(
                rel.to_string_lossy().replace('\\', "/"),
                format!("{:x}", Sha256::digest(&bytes)),
            );
        }
        let manifest = Manifest {
            command,
            config_sha256: cfg.hash(),
            generator_seed: cfg.generator.seed,
            experiment_seed: cfg.experiment.seed,
            models,
            versions: BTreeMap::from([
                ("rnnsm-core", rnnsm_core::VERSION),
                ("rnnsm-cli", env!("CARGO_PKG_VERSION")),
            ]),
            outputs,
        };
        let text = serde_json::to_string_pretty(&manifest)? + "\n";
        fs::write(self.root.join(format!("manifest.{command}.json")), text)?;
        Ok(())
    }
}

pub fn cmd_generate(cfg: &RunConfig) -> Result<()> {
    let generated = generate(&cfg.generator)?;
    let mut out = Outputs::new(&cfg.out)?;
    out.write_with("sessions.jsonl", |w| {
        write_sessions_jsonl(w, &generated.sessions, &generated.schema, generated.epoch)
    })?;
    out.write_with("ground_truth.csv", |w| write_ground_truth_csv(w, &generated.truth))?;
    out.write_manifest("generate", cfg, Vec::new())?;
    log::info!(
        "{} sessions for {} users written to {}",
        generated.sessions.len(),
        cfg.generator.user_count,
        cfg.out.display()
    );
    Ok(())
}

/// The dataset named by the configuration and the instant of day 0.
fn load_dataset(cfg: &RunConfig) -> Result<(Dataset, DateTime<Utc>)> {
    let dates = match &cfg.windows {
        Some(d) => d.clone(),
        None => WindowDates::from_generator(&cfg.generator)?,
    };
    match &cfg.data {
        Some(path) => {
            let file = File::open(path).map_err(|e| {
                Error::InvalidInput(format!("cannot open {}: {e}", path.display()))
            })?;
            let ingested = read_sessions_jsonl(BufReader::new(file))?;
            let window = dates.resolve(ingested.epoch)?;
            let ds = assign_windows(&ingested.sessions, &window, &ingested.schema, ingested.epoch)?;
            Ok((ds, ingested.epoch))
        }
        None => {
            let generated = generate(&cfg.generator)?;
            let window = dates.resolve(generated.epoch)?;
            let ds = assign_windows(&generated.sessions, &window, &generated.schema, generated.epoch)?;
            Ok((ds, generated.epoch))
        }
    }
}

fn split(cfg: &RunConfig, ds: &Dataset) -> Result<(Dataset, Dataset)> {
    Ok(stratified_split(ds, cfg.experiment.test_fraction, cfg.experiment.seed)?)
}

pub fn cmd_train(cfg: &RunConfig) -> Result<()> {
    let models = cfg.model_names()?;
    let (ds, _) = load_dataset(cfg)?;
    let (train, _) = split(cfg, &ds)?;
    log::info!("training on {} users", train.len());
    let mut out = Outputs::new(&cfg.out)?;
    let mut traces = BTreeMap::new();
    let dir = cfg.out.join(MODELS_DIR);
    fs::create_dir_all(&dir)?;
    let wants = |name: &str| models.contains(&name);

    if wants("rnn") {
        let (rnn, trace) = SimpleRnn::fit(&train, &cfg.experiment.rnn)?;
        save_network(&dir, "rnn", &TrainedNetwork::Rnn(rnn), &train.window, &train.schema)?;
        out.path(&format!("{MODELS_DIR}/rnn.checkpoint.json"))?;
        out.path(&format!("{MODELS_DIR}/rnn.meta.json"))?;
        traces.insert("rnn", trace);
    }
    if wants("cph") || wants("cpha") {
        let cox = CoxModel::fit_dataset(&train, &cfg.experiment.cox)?;
        out.write_with(&format!("{MODELS_DIR}/cox.json"), |w| cox.save_json(w))?;
    }
    if wants("rnnsm") || wants("rnnsma") {
        let selection = select_rnnsm_hyperparameters(&train, &cfg.experiment)?;
        let mut config = cfg.experiment.rnnsm.clone();
        config.w = selection.chosen;
        config.embeddings = EmbeddingWidths::Fixed(selection.embedding_dims.clone());
        let (model, trace) = RnnsmModel::fit(&train, &config)?;
        save_network(&dir, "rnnsm", &TrainedNetwork::Rnnsm(model), &train.window, &train.schema)?;
        out.path(&format!("{MODELS_DIR}/rnnsm.checkpoint.json"))?;
        out.path(&format!("{MODELS_DIR}/rnnsm.meta.json"))?;
        out.write_str(
            &format!("{MODELS_DIR}/w_selection.json"),
            &(serde_json::to_string_pretty(&selection)? + "\n"),
        )?;
        traces.insert("rnnsm", trace);
    }
    out.write_str(
        &format!("{MODELS_DIR}/loss_traces.json"),
        &(serde_json::to_string_pretty(&traces)? + "\n"),
    )?;
    out.write_manifest("train", cfg, models)?;
    Ok(())
}

fn load_recurrent(dir: &Path, stem: &str, ds: &Dataset) -> Result<TrainedNetwork> {
    let (model, sidecar) = load_network(dir, stem).map_err(|e| match e {
        Error::Io(io) => Error::Mismatch(format!("no {stem} checkpoint in {}: {io}", dir.display())),
        other => other,
    })?;
    sidecar.check_schema(&ds.schema)?;
    Ok(model)
}

fn predict_model(name: &str, dir: &Path, test: &Dataset) -> Result<Vec<PredictionRecord>> {
    let wrong_kind = || Error::Mismatch(format!("the {name} checkpoint holds a different model kind"));
    Ok(match name {
        "baseline" => baseline_predict(test),
        "rnn" => match load_recurrent(dir, "rnn", test)? {
            TrainedNetwork::Rnn(m) => m.predict(test)?,
            _ => return Err(wrong_kind().into()),
        },
        "cph" | "cpha" => {
            let path = dir.join("cox.json");
            let file = File::open(&path).map_err(|e| {
                Error::Mismatch(format!("no Cox model at {}: {e}", path.display()))
            })?;
            CoxModel::load_json(BufReader::new(file))?.predict(test, name == "cpha")?
        }
        "rnnsm" | "rnnsma" => match load_recurrent(dir, "rnnsm", test)? {
            TrainedNetwork::Rnnsm(m) => m.predict(test, name == "rnnsma")?,
            _ => return Err(wrong_kind().into()),
        },
        other => return Err(Error::Config(format!("unknown model {other}")).into()),
    })
}

pub fn cmd_predict(cfg: &RunConfig) -> Result<()> {
    let models = cfg.model_names()?;
    let (ds, epoch) = load_dataset(cfg)?;
    let (_, test) = split(cfg, &ds)?;
    let dir = cfg.out.join(MODELS_DIR);
    let mut out = Outputs::new(&cfg.out)?;
    for name in &models {
        let records = predict_model(name, &dir, &test)?;
        out.write_with(&format!("{PREDICTIONS_DIR}/{name}.csv"), |w| {
            write_predictions_csv(w, &records, epoch)
        })?;
        log::info!("{name}: {} predictions", records.len());
    }
    out.write_manifest("predict", cfg, models)?;
    Ok(())
}

/// Scores prediction files. With no explicit files, reads the selected
/// models' predictions from the output directory.
pub fn cmd_evaluate(cfg: &RunConfig, files: &[PathBuf]) -> Result<String> {
    let (inputs, models): (Vec<(String, PathBuf)>, Vec<&str>) = if files.is_empty() {
        let models = cfg.model_names()?;
        let inputs = models
            .iter()
            .map(|m| (m.to_string(), cfg.out.join(PREDICTIONS_DIR).join(format!("{m}.csv"))))
            .collect();
        (inputs, models)
    } else {
        let inputs = files
            .iter()
            .map(|p| {
                let stem = p.file_stem().map(|s| s.to_string_lossy().into_owned());
                (stem.unwrap_or_else(|| p.display().to_string()), p.clone())
            })
            .collect();
        (inputs, Vec::new())
    };
    let mut report = EvaluationReport::default();
    for (name, path) in &inputs {
        let file = File::open(path).map_err(|e| {
            Error::Mismatch(format!("no predictions at {}: {e}", path.display()))
        })?;
        let records = read_predictions_csv(BufReader::new(file))?;
        report.add(name, &records)?;
    }
    let mut out = Outputs::new(&cfg.out)?;
    out.write_str("report.json", &(report.to_json()? + "\n"))?;
    let table = report.summary_table();
    out.write_str("summary.txt", &table)?;
    for (file, contents) in report.plot_csvs() {
        out.write_str(&format!("{PLOTS_DIR}/{file}"), &contents)?;
    }
    out.write_manifest("evaluate", cfg, models)?;
    Ok(table)
}
