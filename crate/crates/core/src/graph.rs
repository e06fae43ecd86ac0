//! Graph view of a dense network.
//!
//! Neurons are nodes. Each hidden neuron carries a node feature (its activation
//! over the probe set) and every non-input neuron carries a weight feature (its
//! incoming weight row). The layered adjacency is implied by `layer_sizes` and
//! never stored.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::nn::{MlpModel, MODEL_FORMAT_VERSION};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelGraph {
    pub layer_sizes: Vec<usize>,
    /// Hidden layer `h` (1-based layer index) lives at `node_features[h - 1]`,
    /// shape `width × probe_count`.
    pub node_features: Vec<Matrix>,
    /// Layer `p >= 1` lives at `weight_features[p - 1]`, shape
    /// `layer_sizes[p] × layer_sizes[p-1]`.
    pub weight_features: Vec<Matrix>,
    /// `(w_min, w_max)` per entry of `weight_features`.
    pub weight_range: Vec<(f64, f64)>,
}

impl ModelGraph {
    pub fn hidden_count(&self) -> usize {
        self.layer_sizes.len() - 2
    }

    pub fn probe_count(&self) -> usize {
        self.node_features.first().map_or(0, Matrix::cols)
    }

    /// Snapshot in the same versioned JSON layout as model files.
    pub fn to_document(&self) -> String {
        #[derive(Serialize)]
        struct Doc<'a> {
            format_version: u32,
            graph: &'a ModelGraph,
        }
        serde_json::to_string(&Doc {
            format_version: MODEL_FORMAT_VERSION,
            graph: self,
        })
        .expect("graph serializes")
    }

    pub fn from_document(text: &str) -> Result<Self> {
        #[derive(Deserialize)]
        struct Doc {
            format_version: u32,
            graph: ModelGraph,
        }
        let doc: Doc = serde_json::from_str(text).map_err(|e| Error::Malformed {
            what: "graph document",
            detail: e.to_string(),
        })?;
        if doc.format_version != MODEL_FORMAT_VERSION {
            return Err(Error::Version {
                found: doc.format_version,
                expected: MODEL_FORMAT_VERSION,
            });
        }
        Ok(doc.graph)
    }
}

/// Records activations over `probe` and collects the weight features.
///
/// The probe should be stratified across classes; both parties must use the
/// same probe rows for activation affinities to be comparable.
pub fn build_graph(model: &MlpModel, probe: &Matrix) -> Result<ModelGraph> {
    if probe.rows() == 0 {
        return Err(Error::EmptyDataset);
    }
    let trace = model.record_activations(probe)?;
    let node_features = trace.layers.iter().map(Matrix::transpose).collect();
    let weight_features: Vec<Matrix> = model.weights.clone();
    let weight_range = weight_features.iter().map(|w| (w.min(), w.max())).collect();
    Ok(ModelGraph {
        layer_sizes: model.spec.layer_sizes.clone(),
        node_features,
        weight_features,
        weight_range,
    })
}
