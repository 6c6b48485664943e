//! Versioned JSON checkpoints for the recurrent models.
//!
//! A checkpoint holds named column-major tensors, the Adam moments and the
//! frozen normalization statistics. A sidecar file records what is needed to
//! rebuild the model around them: the model kind and configuration, the
//! windows and the marker schema of the training data.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::baselines::{SimpleRnn, SimpleRnnConfig};
use crate::data::{MarkerSchema, WindowConfig};
use crate::error::{Error, Result};
use crate::features::NormStats;
use crate::network::{AdamState, NetworkParams, NetworkShape};
use crate::rnnsm::{RnnsmConfig, RnnsmModel};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: [usize; 2],
    /// Column-major.
    pub data: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerCheckpoint {
    pub step: u64,
    pub first_moment: Vec<NamedTensor>,
    pub second_moment: Vec<NamedTensor>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub shape: NetworkShape,
    pub tensors: Vec<NamedTensor>,
    pub optimizer: OptimizerCheckpoint,
    pub norm: NormStats,
}

fn named_tensors(params: &NetworkParams) -> Vec<NamedTensor> {
    params
        .tensor_names()
        .into_iter()
        .zip(params.tensor_shapes())
        .zip(params.tensors())
        .map(|((name, (r, c)), data)| NamedTensor {
            name,
            shape: [r, c],
            data: data.to_vec(),
        })
        .collect()
}

fn restore_params(shape: &NetworkShape, tensors: &[NamedTensor]) -> Result<NetworkParams> {
    shape.validate()?;
    let mut params = NetworkParams::zeros(shape);
    let expected: Vec<(String, (usize, usize))> =
        params.tensor_names().into_iter().zip(params.tensor_shapes()).collect();
    if expected.len() != tensors.len() {
        return Err(Error::Mismatch(format!(
            "checkpoint has {} tensors, the network needs {}",
            tensors.len(),
            expected.len()
        )));
    }
    for ((slot, (name, (r, c))), t) in params.tensors_mut().into_iter().zip(&expected).zip(tensors) {
        if &t.name != name || t.shape != [*r, *c] || t.data.len() != slot.len() {
            return Err(Error::Mismatch(format!(
                "tensor {} {:?} does not fit {} [{}, {}]",
                t.name, t.shape, name, r, c
            )));
        }
        slot.copy_from_slice(&t.data);
    }
    Ok(params)
}

impl Checkpoint {
    pub fn new(params: &NetworkParams, optimizer: &AdamState, norm: &NormStats) -> Self {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            shape: params.shape.clone(),
            tensors: named_tensors(params),
            optimizer: OptimizerCheckpoint {
                step: optimizer.step,
                first_moment: named_tensors(&optimizer.first_moment),
                second_moment: named_tensors(&optimizer.second_moment),
            },
            norm: norm.clone(),
        }
    }

    pub fn into_parts(self) -> Result<(NetworkParams, AdamState, NormStats)> {
        if self.version != CHECKPOINT_VERSION {
            return Err(Error::Mismatch(format!(
                "checkpoint version {} is not supported (expected {CHECKPOINT_VERSION})",
                self.version
            )));
        }
        let params = restore_params(&self.shape, &self.tensors)?;
        let optimizer = AdamState {
            step: self.optimizer.step,
            first_moment: restore_params(&self.shape, &self.optimizer.first_moment)?,
            second_moment: restore_params(&self.shape, &self.optimizer.second_moment)?,
        };
        if self.norm.cardinalities != self.shape.cardinalities {
            return Err(Error::Mismatch(
                "normalization statistics disagree with the embedding tables".into(),
            ));
        }
        Ok((params, optimizer, self.norm))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SidecarModel {
    Rnnsm { config: RnnsmConfig },
    Rnn { config: SimpleRnnConfig, target_scale: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub version: u32,
    pub model: SidecarModel,
    pub window: WindowConfig,
    pub schema: MarkerSchema,
}

impl Sidecar {
    /// Fails unless `schema` is the schema the model was trained on.
    pub fn check_schema(&self, schema: &MarkerSchema) -> Result<()> {
        if &self.schema == schema {
            Ok(())
        } else {
            Err(Error::Mismatch(format!(
                "dataset markers {:?} differ from the model's {:?}",
                describe(schema),
                describe(&self.schema)
            )))
        }
    }
}

fn describe(schema: &MarkerSchema) -> Vec<String> {
    schema
        .discrete
        .iter()
        .map(|m| format!("{}:{}", m.name, m.labels.join("|")))
        .chain(schema.continuous.iter().cloned())
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub enum TrainedNetwork {
    Rnnsm(RnnsmModel),
    Rnn(SimpleRnn),
}

/// `(checkpoint, sidecar)` file paths for a model stored under `stem` in `dir`.
pub fn artifact_paths(dir: &Path, stem: &str) -> (PathBuf, PathBuf) {
    (
        dir.join(format!("{stem}.checkpoint.json")),
        dir.join(format!("{stem}.meta.json")),
    )
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut out, value)?;
    out.write_all(b"\n")?;
    out.flush()?;
    Ok(())
}

pub fn save_network(
    dir: &Path,
    stem: &str,
    model: &TrainedNetwork,
    window: &WindowConfig,
    schema: &MarkerSchema,
) -> Result<()> {
    let (checkpoint, sidecar_model) = match model {
        TrainedNetwork::Rnnsm(m) => (
            Checkpoint::new(&m.params, &m.optimizer, &m.norm),
            SidecarModel::Rnnsm {
                config: m.config.clone(),
            },
        ),
        TrainedNetwork::Rnn(m) => (
            Checkpoint::new(&m.params, &m.optimizer, &m.norm),
            SidecarModel::Rnn {
                config: m.config.clone(),
                target_scale: m.target_scale,
            },
        ),
    };
    let sidecar = Sidecar {
        version: CHECKPOINT_VERSION,
        model: sidecar_model,
        window: *window,
        schema: schema.clone(),
    };
    let (cp, meta) = artifact_paths(dir, stem);
    write_json(&cp, &checkpoint)?;
    write_json(&meta, &sidecar)
}

pub fn load_network(dir: &Path, stem: &str) -> Result<(TrainedNetwork, Sidecar)> {
    let (cp, meta) = artifact_paths(dir, stem);
    let sidecar: Sidecar = serde_json::from_reader(BufReader::new(File::open(&meta)?))?;
    if sidecar.version != CHECKPOINT_VERSION {
        return Err(Error::Mismatch(format!(
            "sidecar version {} is not supported",
            sidecar.version
        )));
    }
    let checkpoint: Checkpoint = serde_json::from_reader(BufReader::new(File::open(&cp)?))?;
    let (params, optimizer, norm) = checkpoint.into_parts()?;
    let model = match &sidecar.model {
        SidecarModel::Rnnsm { config } => TrainedNetwork::Rnnsm(RnnsmModel {
            config: config.clone(),
            params,
            optimizer,
            norm,
        }),
        SidecarModel::Rnn {
            config,
            target_scale,
        } => TrainedNetwork::Rnn(SimpleRnn {
            config: config.clone(),
            target_scale: *target_scale,
            params,
            optimizer,
            norm,
        }),
    };
    Ok((model, sidecar))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{assign_windows, Session};
    use crate::features::{build_sequences, SequenceConfig};
    use crate::training::TrainConfig;
    use chrono::DateTime;
    use nalgebra::{DMatrix, DVector};

    fn tensor_matrix(t: &NamedTensor) -> DMatrix<f64> {
        DMatrix::from_column_slice(t.shape[0], t.shape[1], &t.data)
    }

    fn tensor_vector(t: &NamedTensor) -> DVector<f64> {
        assert_eq!(t.shape[1], 1);
        DVector::from_column_slice(&t.data)
    }

    fn tiny() -> crate::data::Dataset {
        let schema = MarkerSchema::web_sessions(&["app", "desktop"]);
        let window = WindowConfig::new(20.0, 30.0, 50.0).unwrap();
        let mut sessions = Vec::new();
        for u in 0..6 {
            for k in 0..4 {
                sessions.push(
                    Session::new(format!("u{u}"), 3.0 + 7.0 * k as f64 + u as f64 * 0.3, 0.02)
                        .with_discrete(crate::data::DEVICE, (u % 2) as u32),
                );
            }
            if u % 2 == 0 {
                sessions.push(Session::new(format!("u{u}"), 35.0 + u as f64, 0.01));
            }
        }
        assign_windows(&sessions, &window, &schema, DateTime::UNIX_EPOCH).unwrap()
    }

    #[test]
    fn rnnsm_checkpoint_restores_predictions() {
        let ds = tiny();
        let config = RnnsmConfig {
            hidden: 3,
            fused: 3,
            embeddings: crate::rnnsm::EmbeddingWidths::Fixed(vec![2; 4]),
            train: TrainConfig {
                epochs: 2,
                batch_size: 2,
                ..TrainConfig::default()
            },
            ..RnnsmConfig::default()
        };
        let (model, _) = RnnsmModel::fit(&ds, &config).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_network(
            dir.path(),
            "rnnsm",
            &TrainedNetwork::Rnnsm(model.clone()),
            &ds.window,
            &ds.schema,
        )
        .unwrap();
        let (loaded, sidecar) = load_network(dir.path(), "rnnsm").unwrap();
        assert_eq!(loaded, TrainedNetwork::Rnnsm(model.clone()));
        sidecar.check_schema(&ds.schema).unwrap();
        let TrainedNetwork::Rnnsm(loaded) = loaded else {
            unreachable!()
        };
        assert_eq!(
            loaded.predict(&ds, true).unwrap(),
            model.predict(&ds, true).unwrap()
        );
    }

    #[test]
    fn tensors_are_column_major_with_shapes() {
        let ds = tiny();
        let (_, norm) = build_sequences(&ds, &SequenceConfig::default(), None).unwrap();
        let params =
            crate::rnnsm::init_network(&norm, vec![2; norm.cardinalities.len()], 3, 2, 5).unwrap();
        let cp = Checkpoint::new(&params, &AdamState::new(&params), &norm);
        let dense = cp.tensors.iter().find(|t| t.name == "dense.w").unwrap();
        assert_eq!(tensor_matrix(dense), params.dense_w);
        let head = cp.tensors.iter().find(|t| t.name == "head.v").unwrap();
        assert_eq!(tensor_vector(head), params.head_v);
    }

    #[test]
    fn wrong_version_and_shapes_are_rejected() {
        let ds = tiny();
        let (_, norm) = build_sequences(&ds, &SequenceConfig::default(), None).unwrap();
        let params =
            crate::rnnsm::init_network(&norm, vec![2; norm.cardinalities.len()], 3, 2, 5).unwrap();
        let mut cp = Checkpoint::new(&params, &AdamState::new(&params), &norm);
        cp.version = 99;
        assert!(matches!(cp.clone().into_parts(), Err(Error::Mismatch(_))));
        cp.version = CHECKPOINT_VERSION;
        cp.tensors[0].data.pop();
        assert!(matches!(cp.into_parts(), Err(Error::Mismatch(_))));
    }

    #[test]
    fn missing_files_are_io_errors() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_network(dir.path(), "rnn"), Err(Error::Io(_))));
    }

    #[test]
    fn schema_check_names_the_difference() {
        let ds = tiny();
        let sidecar = Sidecar {
            version: CHECKPOINT_VERSION,
            model: SidecarModel::Rnn {
                config: SimpleRnnConfig::default(),
                target_scale: 1.0,
            },
            window: ds.window,
            schema: MarkerSchema::web_sessions(&["app"]),
        };
        let err = sidecar.check_schema(&ds.schema).unwrap_err();
        assert!(matches!(err, Error::Mismatch(ref m) if m.contains("desktop")));
    }
}
