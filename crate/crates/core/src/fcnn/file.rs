//! Versioned JSON model file.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{FcnnConfig, FcnnModel, Layer, Normalization, TrainingMeta, INPUT_LAYOUT};
use crate::error::{Error, Result};
use crate::io::{read_file, to_json_17, write_file};

pub const MODEL_FORMAT: &str = "hybrid-enkf/fcnn-model";
pub const MODEL_VERSION: u64 = 1;

#[derive(Serialize, Deserialize)]
struct LayerDoc {
    /// `outputs` rows of `inputs` values.
    weights: Vec<Vec<f64>>,
    biases: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct NormDoc {
    mean: Vec<f64>,
    std: Vec<f64>,
    zero_variance: Vec<bool>,
}

#[derive(Serialize, Deserialize)]
struct NormalizationDoc {
    input: NormDoc,
    output: NormDoc,
}

#[derive(Serialize, Deserialize)]
struct ModelDoc {
    format: String,
    version: u64,
    input_layout: String,
    config: FcnnConfig,
    layers: Vec<LayerDoc>,
    normalization: Option<NormalizationDoc>,
    training: Option<TrainingMeta>,
}

#[derive(Deserialize)]
struct Header {
    format: Option<String>,
    version: Option<u64>,
}

impl From<&Normalization> for NormDoc {
    fn from(n: &Normalization) -> Self {
        Self {
            mean: n.mean.clone(),
            std: n.std.clone(),
            zero_variance: n.zero_variance.clone(),
        }
    }
}

fn norm_from_doc(doc: NormDoc, n: usize, which: &str) -> Result<Normalization> {
    if doc.mean.len() != n || doc.std.len() != n || doc.zero_variance.len() != n {
        return Err(Error::ShapeMismatch(format!(
            "{which} normalization must have {n} entries"
        )));
    }
    if doc.std.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
        return Err(Error::Corrupt(format!("{which} normalization has a non-positive std")));
    }
    Ok(Normalization {
        mean: doc.mean,
        std: doc.std,
        zero_variance: doc.zero_variance,
    })
}

pub fn model_to_bytes(model: &FcnnModel) -> Result<Vec<u8>> {
    let doc = ModelDoc {
        format: MODEL_FORMAT.into(),
        version: MODEL_VERSION,
        input_layout: INPUT_LAYOUT.into(),
        config: model.config.clone(),
        layers: model
            .layers
            .iter()
            .map(|l| LayerDoc {
                weights: l.weights.chunks(l.inputs).map(<[f64]>::to_vec).collect(),
                biases: l.biases.clone(),
            })
            .collect(),
        normalization: Some(NormalizationDoc {
            input: (&model.input_norm).into(),
            output: (&model.output_norm).into(),
        }),
        training: model.training.clone(),
    };
    to_json_17(&doc)
}

pub fn model_from_bytes(bytes: &[u8]) -> Result<FcnnModel> {
    let header: Header = serde_json::from_slice(bytes).map_err(|e| Error::Corrupt(e.to_string()))?;
    if header.format.as_deref() != Some(MODEL_FORMAT) {
        return Err(Error::Corrupt(format!("not a {MODEL_FORMAT} document")));
    }
    let version = header.version.ok_or_else(|| Error::Corrupt("missing version".into()))?;
    if version != MODEL_VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            expected: MODEL_VERSION,
        });
    }
    let doc: ModelDoc = serde_json::from_slice(bytes).map_err(|e| Error::Corrupt(e.to_string()))?;
    if doc.input_layout != INPUT_LAYOUT {
        return Err(Error::Corrupt(format!("unknown input layout `{}`", doc.input_layout)));
    }
    doc.config.validate()?;
    let sizes = &doc.config.layer_sizes;
    if doc.layers.len() != sizes.len() - 1 {
        return Err(Error::ShapeMismatch(format!(
            "config declares {} layers, file has {}",
            sizes.len() - 1,
            doc.layers.len()
        )));
    }
    let mut layers = Vec::with_capacity(doc.layers.len());
    for (k, (l, w)) in doc.layers.into_iter().zip(sizes.windows(2)).enumerate() {
        let (inputs, outputs) = (w[0], w[1]);
        if l.weights.len() != outputs || l.weights.iter().any(|r| r.len() != inputs) || l.biases.len() != outputs {
            return Err(Error::ShapeMismatch(format!("layer {k} must be {outputs}x{inputs}")));
        }
        layers.push(Layer {
            inputs,
            outputs,
            weights: l.weights.into_iter().flatten().collect(),
            biases: l.biases,
        });
    }
    let norm = doc
        .normalization
        .ok_or_else(|| Error::Corrupt("missing normalization block".into()))?;
    Ok(FcnnModel {
        input_norm: norm_from_doc(norm.input, doc.config.input_size(), "input")?,
        output_norm: norm_from_doc(norm.output, doc.config.output_size(), "output")?,
        layers,
        config: doc.config,
        training: doc.training,
    })
}

pub fn save_model(model: &FcnnModel, path: &Path) -> Result<()> {
    write_file(path, &model_to_bytes(model)?)
}

pub fn load_model(path: &Path) -> Result<FcnnModel> {
    model_from_bytes(&read_file(path)?)
}
