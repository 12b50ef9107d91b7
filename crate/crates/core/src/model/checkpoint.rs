//! Versioned JSON checkpoints with explicit tensor shapes.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::network::{ModelParams, SegModel};
use super::{ModelConfig, ModelError, Vocab};

pub const CHECKPOINT_FORMAT: &str = "pathsegkit-model";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("malformed checkpoint: {0}")]
    Malformed(#[from] serde_json::Error),
    #[error("unsupported checkpoint {format:?} version {version}")]
    Unsupported { format: String, version: u32 },
    #[error("tensor {name} declared {declared:?} but holds {actual:?}")]
    ShapeHeader {
        name: String,
        declared: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    version: u32,
    config: ModelConfig,
    vocab: Vocab,
    shapes: BTreeMap<String, Vec<usize>>,
    params: ModelParams,
}

fn shapes(params: &ModelParams) -> BTreeMap<String, Vec<usize>> {
    params
        .tensors()
        .into_iter()
        .map(|(n, t)| (n, t.shape().to_vec()))
        .collect()
}

pub fn to_json(model: &SegModel) -> String {
    let ck = Checkpoint {
        format: CHECKPOINT_FORMAT.into(),
        version: CHECKPOINT_VERSION,
        config: model.config,
        vocab: model.vocab.clone(),
        shapes: shapes(&model.params),
        params: model.params.clone(),
    };
    serde_json::to_string(&ck).expect("checkpoint serializes")
}

pub fn from_json(text: &str) -> Result<SegModel, CheckpointError> {
    let ck: Checkpoint = serde_json::from_str(text)?;
    if ck.format != CHECKPOINT_FORMAT || ck.version != CHECKPOINT_VERSION {
        return Err(CheckpointError::Unsupported {
            format: ck.format,
            version: ck.version,
        });
    }
    let actual = shapes(&ck.params);
    for (name, actual) in &actual {
        let declared = ck.shapes.get(name).cloned().unwrap_or_default();
        if &declared != actual {
            return Err(CheckpointError::ShapeHeader {
                name: name.clone(),
                declared,
                actual: actual.clone(),
            });
        }
    }
    Ok(SegModel::from_parts(ck.config, ck.vocab, ck.params)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model() -> SegModel {
        SegModel::new(ModelConfig::default(), Vocab::from_prompts(["tissue-level gland in colon pathology."]), 5).unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        let m = model();
        let back = from_json(&to_json(&m)).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn rejects_wrong_version_and_shapes() {
        let json = to_json(&model());
        let bumped = json.replace("\"version\":1", "\"version\":99");
        assert!(matches!(from_json(&bumped), Err(CheckpointError::Unsupported { version: 99, .. })));

        let mut value: serde_json::Value = serde_json::from_str(&json).unwrap();
        value["shapes"]["queries"] = serde_json::json!([3, 3]);
        assert!(matches!(from_json(&value.to_string()), Err(CheckpointError::ShapeHeader { .. })));

        let mut value: serde_json::Value = serde_json::from_str(&json).unwrap();
        value["config"]["dim"] = serde_json::json!(12);
        assert!(matches!(from_json(&value.to_string()), Err(CheckpointError::Model(ModelError::ShapeMismatch(_)))));
    }
}
