//! Dense feed-forward networks: definition, inference, SGD training and the
//! versioned model file.
//!
//! Weights for layer transition `p` have shape `layer_sizes[p+1] × layer_sizes[p]`
//! (one row per output neuron). Hidden layers apply the configured activation;
//! the output layer returns raw logits.

use std::path::Path;

use rand::distributions::{Distribution, Uniform};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::rng::substream;

pub const MODEL_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative expressed through the activation output `y`.
    #[inline]
    fn grad_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - y * y,
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Activation::Relu),
            "tanh" => Ok(Activation::Tanh),
            other => Err(Error::invalid(format!("unknown activation '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub layer_sizes: Vec<usize>,
    pub activation: Activation,
    pub use_bias: bool,
}

impl MlpSpec {
    pub fn new(layer_sizes: Vec<usize>, activation: Activation, use_bias: bool) -> Result<Self> {
        let spec = Self {
            layer_sizes,
            activation,
            use_bias,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_sizes.len() < 3 {
            return Err(Error::invalid(format!(
                "need at least one hidden layer, got layer_sizes {:?}",
                self.layer_sizes
            )));
        }
        if self.layer_sizes.contains(&0) {
            return Err(Error::invalid("layer sizes must be positive"));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_sizes.last().expect("validated")
    }

    /// Number of weight matrices.
    pub fn transitions(&self) -> usize {
        self.layer_sizes.len() - 1
    }

    /// Layer indices that carry permutable neurons.
    pub fn hidden_layers(&self) -> std::ops::Range<usize> {
        1..self.layer_sizes.len() - 1
    }

    /// Total neuron count over all layers.
    pub fn total_neurons(&self) -> usize {
        self.layer_sizes.iter().sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpModel {
    pub spec: MlpSpec,
    pub weights: Vec<Matrix>,
    pub biases: Option<Vec<Vec<f64>>>,
}

/// Post-activation values of every hidden layer, one `probe × width` matrix per layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationTrace {
    pub layers: Vec<Matrix>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 32,
            learning_rate: 0.05,
            seed: 0,
        }
    }
}

impl MlpModel {
    /// Builds a model and checks every shape against the spec.
    pub fn new(spec: MlpSpec, weights: Vec<Matrix>, biases: Option<Vec<Vec<f64>>>) -> Result<Self> {
        let m = Self {
            spec,
            weights,
            biases,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn zeros(spec: MlpSpec) -> Result<Self> {
        spec.validate()?;
        let weights = spec
            .layer_sizes
            .windows(2)
            .map(|w| Matrix::zeros(w[1], w[0]))
            .collect();
        let biases = spec
            .use_bias
            .then(|| spec.layer_sizes[1..].iter().map(|&n| vec![0.0; n]).collect());
        Self::new(spec, weights, biases)
    }

    /// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) initialization from the `init`
    /// substream of `seed`, one stream per layer.
    pub fn init_uniform(spec: MlpSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut weights = Vec::with_capacity(spec.transitions());
        let mut biases = Vec::new();
        for (p, w) in spec.layer_sizes.windows(2).enumerate() {
            let (fan_in, fan_out) = (w[0], w[1]);
            let bound = 1.0 / (fan_in as f64).sqrt();
            let dist = Uniform::new_inclusive(-bound, bound);
            let mut rng = substream(seed, "init", p as u64);
            let data = (0..fan_in * fan_out).map(|_| dist.sample(&mut rng)).collect();
            weights.push(Matrix::from_vec(fan_out, fan_in, data)?);
            if spec.use_bias {
                biases.push((0..fan_out).map(|_| dist.sample(&mut rng)).collect());
            }
        }
        let biases = spec.use_bias.then_some(biases);
        Self::new(spec, weights, biases)
    }

    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        let t = self.spec.transitions();
        if self.weights.len() != t {
            return Err(Error::dim("weight matrix count", t, self.weights.len()));
        }
        for (p, w) in self.weights.iter().enumerate() {
            let (out, inp) = (self.spec.layer_sizes[p + 1], self.spec.layer_sizes[p]);
            if w.rows() != out {
                return Err(Error::dim(format!("layer {p} weight rows"), out, w.rows()));
            }
            if w.cols() != inp {
                return Err(Error::dim(format!("layer {p} weight cols"), inp, w.cols()));
            }
            if !w.is_finite() {
                return Err(Error::invalid(format!("layer {p} weights are not finite")));
            }
        }
        match (&self.biases, self.spec.use_bias) {
            (None, false) => {}
            (Some(bs), true) => {
                if bs.len() != t {
                    return Err(Error::dim("bias vector count", t, bs.len()));
                }
                for (p, b) in bs.iter().enumerate() {
                    let out = self.spec.layer_sizes[p + 1];
                    if b.len() != out {
                        return Err(Error::dim(format!("layer {p} bias"), out, b.len()));
                    }
                    if b.iter().any(|x| !x.is_finite()) {
                        return Err(Error::invalid(format!("layer {p} biases are not finite")));
                    }
                }
            }
            (Some(_), false) => return Err(Error::invalid("biases present but use_bias=false")),
            (None, true) => return Err(Error::invalid("use_bias=true but biases missing")),
        }
        Ok(())
    }

    fn bias(&self, p: usize) -> Option<&[f64]> {
        self.biases.as_ref().map(|b| b[p].as_slice())
    }

    /// Affine map of transition `p` followed by the hidden activation when `p`
    /// is not the last transition.
    fn layer_forward(&self, p: usize, input: &Matrix) -> Result<Matrix> {
        let w = &self.weights[p];
        if input.cols() != w.cols() {
            return Err(Error::dim(format!("layer {p} input"), w.cols(), input.cols()));
        }
        let mut z = input.matmul_t(w)?;
        if let Some(b) = self.bias(p) {
            for i in 0..z.rows() {
                for (v, bb) in z.row_mut(i).iter_mut().zip(b) {
                    *v += bb;
                }
            }
        }
        if p + 1 < self.spec.transitions() {
            let act = self.spec.activation;
            for v in z.as_mut_slice() {
                *v = act.apply(*v);
            }
        }
        Ok(z)
    }

    /// Logits for every row of `batch`.
    pub fn forward(&self, batch: &Matrix) -> Result<Matrix> {
        let mut x = self.layer_forward(0, batch)?;
        for p in 1..self.spec.transitions() {
            x = self.layer_forward(p, &x)?;
        }
        Ok(x)
    }

    pub fn record_activations(&self, probe: &Matrix) -> Result<ActivationTrace> {
        if probe.rows() == 0 {
            return Err(Error::EmptyDataset);
        }
        let mut layers = Vec::with_capacity(self.spec.transitions() - 1);
        let mut x = self.layer_forward(0, probe)?;
        for p in 1..self.spec.transitions() {
            let next = self.layer_forward(p, &x)?;
            layers.push(x);
            x = next;
        }
        Ok(ActivationTrace { layers })
    }

    /// Argmax of logits per row; ties go to the lowest class index.
    pub fn predict(&self, batch: &Matrix) -> Result<Vec<usize>> {
        let logits = self.forward(batch)?;
        Ok((0..logits.rows()).map(|i| argmax(logits.row(i))).collect())
    }

    /// Canonical text document of this model (see [`save_model`]).
    pub fn to_document(&self) -> String {
        serde_json::to_string(&ModelDocument::from(self)).expect("model serializes")
    }

    pub fn from_document(text: &str) -> Result<Self> {
        let doc: ModelDocument = serde_json::from_str(text).map_err(|e| Error::Malformed {
            what: "model document",
            detail: e.to_string(),
        })?;
        doc.into_model()
    }

    /// SHA-256 of the canonical document, hex encoded.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.to_document().as_bytes()))
    }

    /// Digest over the architecture only; used to check that two parties hold
    /// compatible models.
    pub fn arch_digest(&self) -> String {
        let text = serde_json::to_string(&self.spec).expect("spec serializes");
        hex::encode(Sha256::digest(text.as_bytes()))
    }

    /// Multiplies every parameter by `c`.
    pub fn scaled(&self, c: f64) -> MlpModel {
        MlpModel {
            spec: self.spec.clone(),
            weights: self.weights.iter().map(|w| w.scale(c)).collect(),
            biases: self
                .biases
                .as_ref()
                .map(|bs| bs.iter().map(|b| b.iter().map(|x| x * c).collect()).collect()),
        }
    }
}

pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

pub fn softmax_row(row: &[f64]) -> Vec<f64> {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|&x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

/// Minibatch SGD on softmax cross-entropy.
///
/// Initialization uses the `init` substream of `cfg.seed`; epoch `e` shuffles with
/// the `shuffle` substream at index `e`.
pub fn train_sgd(spec: &MlpSpec, data: &LabeledDataset, cfg: &TrainConfig) -> Result<MlpModel> {
    spec.validate()?;
    if cfg.epochs == 0 {
        return Err(Error::invalid("epochs must be at least 1"));
    }
    let n = data.len();
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    if cfg.batch_size == 0 || cfg.batch_size > n {
        return Err(Error::invalid(format!(
            "batch_size {} outside 1..={n}",
            cfg.batch_size
        )));
    }
    if !(cfg.learning_rate > 0.0 && cfg.learning_rate.is_finite()) {
        return Err(Error::invalid("learning_rate must be positive"));
    }
    if data.inputs.cols() != spec.input_dim() {
        return Err(Error::dim("training inputs", spec.input_dim(), data.inputs.cols()));
    }
    if let Some(&bad) = data.labels.iter().find(|&&l| l >= spec.output_dim()) {
        return Err(Error::invalid(format!(
            "label {bad} outside output dimension {}",
            spec.output_dim()
        )));
    }

    let mut model = MlpModel::init_uniform(spec.clone(), cfg.seed)?;
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 0..cfg.epochs {
        let mut rng = substream(cfg.seed, "shuffle", epoch as u64);
        order.shuffle(&mut rng);
        for (batch, idx) in order.chunks(cfg.batch_size).enumerate() {
            let x = data.inputs.select_rows(idx);
            let y: Vec<usize> = idx.iter().map(|&i| data.labels[i]).collect();
            let loss = sgd_step(&mut model, &x, &y, cfg.learning_rate)?;
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch, batch });
            }
        }
    }
    if model.validate().is_err() {
        return Err(Error::Diverged {
            epoch: cfg.epochs - 1,
            batch: n.div_ceil(cfg.batch_size) - 1,
        });
    }
    Ok(model)
}

/// One gradient step; returns the mean batch loss before the update.
fn sgd_step(model: &mut MlpModel, x: &Matrix, labels: &[usize], lr: f64) -> Result<f64> {
    let t = model.spec.transitions();
    let bs = x.rows() as f64;
    let act = model.spec.activation;

    // acts[0] = input, acts[p+1] = output of transition p
    let mut acts = Vec::with_capacity(t + 1);
    acts.push(x.clone());
    for p in 0..t {
        let next = model.layer_forward(p, &acts[p])?;
        acts.push(next);
    }

    let logits = &acts[t];
    let mut delta = Matrix::zeros(logits.rows(), logits.cols());
    let mut loss = 0.0;
    for (i, &label) in labels.iter().enumerate() {
        let probs = softmax_row(logits.row(i));
        loss -= probs[label].max(f64::MIN_POSITIVE).ln();
        for (d, (k, p)) in delta.row_mut(i).iter_mut().zip(probs.iter().enumerate()) {
            *d = (p - if k == label { 1.0 } else { 0.0 }) / bs;
        }
    }
    loss /= bs;

    for p in (0..t).rev() {
        let input = &acts[p];
        // delta for the previous layer, computed before W_p changes
        let prev_delta = if p > 0 {
            let mut d = delta.matmul(&model.weights[p])?;
            for (v, &y) in d.as_mut_slice().iter_mut().zip(input.as_slice()) {
                *v *= act.grad_from_output(y);
            }
            Some(d)
        } else {
            None
        };

        let w = &mut model.weights[p];
        for i in 0..delta.rows() {
            let drow = delta.row(i);
            let xrow = input.row(i);
            for (o, &g) in drow.iter().enumerate() {
                if g == 0.0 {
                    continue;
                }
                let step = lr * g;
                for (wv, &xv) in w.row_mut(o).iter_mut().zip(xrow) {
                    *wv -= step * xv;
                }
            }
        }
        if let Some(bs) = model.biases.as_mut() {
            for i in 0..delta.rows() {
                for (b, &g) in bs[p].iter_mut().zip(delta.row(i)) {
                    *b -= lr * g;
                }
            }
        }
        if let Some(d) = prev_delta {
            delta = d;
        }
    }
    Ok(loss)
}

#[derive(Serialize, Deserialize)]
struct ModelDocument {
    format_version: u32,
    spec: MlpSpec,
    weights: Vec<Matrix>,
    biases: Option<Vec<Vec<f64>>>,
}

impl From<&MlpModel> for ModelDocument {
    fn from(m: &MlpModel) -> Self {
        Self {
            format_version: MODEL_FORMAT_VERSION,
            spec: m.spec.clone(),
            weights: m.weights.clone(),
            biases: m.biases.clone(),
        }
    }
}

impl ModelDocument {
    fn into_model(self) -> Result<MlpModel> {
        if self.format_version != MODEL_FORMAT_VERSION {
            return Err(Error::Version {
                found: self.format_version,
                expected: MODEL_FORMAT_VERSION,
            });
        }
        MlpModel::new(self.spec, self.weights, self.biases)
    }
}

/// Writes the model as a JSON document.
///
/// Floats use the shortest decimal that parses back to the same `f64`, so a
/// save/load cycle is bit-exact.
pub fn save_model(model: &MlpModel, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, model.to_document())?;
    Ok(())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<MlpModel> {
    MlpModel::from_document(&std::fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(sizes: &[usize]) -> MlpSpec {
        MlpSpec::new(sizes.to_vec(), Activation::Relu, false).unwrap()
    }

    #[test]
    fn spec_needs_hidden_layer() {
        assert!(MlpSpec::new(vec![3, 2], Activation::Relu, false).is_err());
        assert!(MlpSpec::new(vec![3, 0, 2], Activation::Relu, false).is_err());
    }

    #[test]
    fn zero_weights_give_zero_logits() {
        let m = MlpModel::zeros(spec(&[4, 3, 2])).unwrap();
        let x = Matrix::from_rows(&[vec![1.0, -2.0, 3.0, 0.5]]).unwrap();
        assert_eq!(m.forward(&x).unwrap().as_slice(), &[0.0, 0.0]);
        let tr = m.record_activations(&x).unwrap();
        assert_eq!(tr.layers.len(), 1);
        assert!(tr.layers[0].as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_relu_net_clamps_negative() {
        let s = spec(&[2, 2, 2]);
        let m = MlpModel::new(s, vec![Matrix::identity(2), Matrix::identity(2)], None).unwrap();
        let x = Matrix::from_rows(&[vec![1.0, -1.0]]).unwrap();
        let tr = m.record_activations(&x).unwrap();
        assert_eq!(tr.layers[0].as_slice(), &[1.0, 0.0]);
        assert_eq!(m.forward(&x).unwrap().as_slice(), &[1.0, 0.0]);
    }

    #[test]
    fn seeded_net_matches_hand_chain() {
        let m = MlpModel::init_uniform(spec(&[4, 3, 2]), 11).unwrap();
        let x = [0.3, -0.7, 1.1, 0.25];
        let w0 = &m.weights[0];
        let w1 = &m.weights[1];
        let mut h = [0.0; 3];
        for k in 0..3 {
            let mut s = 0.0;
            for j in 0..4 {
                s += w0[(k, j)] * x[j];
            }
            h[k] = if s > 0.0 { s } else { 0.0 };
        }
        let mut out = [0.0; 2];
        for o in 0..2 {
            for k in 0..3 {
                out[o] += w1[(o, k)] * h[k];
            }
        }
        let got = m.forward(&Matrix::from_rows(&[x.to_vec()]).unwrap()).unwrap();
        for o in 0..2 {
            assert!((got[(0, o)] - out[o]).abs() < 1e-15);
        }
    }

    #[test]
    fn shape_mismatch_names_layer() {
        let m = MlpModel::zeros(spec(&[4, 3, 2])).unwrap();
        let err = m.forward(&Matrix::zeros(1, 5)).unwrap_err();
        assert!(err.to_string().contains("layer 0"), "{err}");
    }

    #[test]
    fn trace_matches_single_forwards() {
        let m = MlpModel::init_uniform(spec(&[3, 4, 5, 2]), 3).unwrap();
        let probe = Matrix::from_fn(5, 3, |i, j| (i as f64 - 2.0) * 0.3 + j as f64 * 0.1);
        let tr = m.record_activations(&probe).unwrap();
        assert_eq!(tr.layers[0].shape(), (5, 4));
        assert_eq!(tr.layers[1].shape(), (5, 5));
        for s in 0..5 {
            let single = m.record_activations(&probe.select_rows(&[s])).unwrap();
            assert_eq!(single.layers[0].row(0), tr.layers[0].row(s));
            assert_eq!(single.layers[1].row(0), tr.layers[1].row(s));
        }
        let one = m.record_activations(&probe.select_rows(&[0])).unwrap();
        assert_eq!(one.layers[0].rows(), 1);
        assert!(m.record_activations(&Matrix::zeros(0, 3)).is_err());
    }

    #[test]
    fn output_scaling_scales_logits() {
        let m = MlpModel::init_uniform(spec(&[3, 4, 2]), 5).unwrap();
        let mut scaled = m.clone();
        scaled.weights[1] = scaled.weights[1].scale(3.0);
        let x = Matrix::from_fn(6, 3, |i, j| ((i * 3 + j) as f64).sin());
        let a = m.forward(&x).unwrap();
        let b = scaled.forward(&x).unwrap();
        assert!(a.scale(3.0).max_abs_diff(&b) < 1e-12);
        assert_eq!(m.predict(&x).unwrap(), scaled.predict(&x).unwrap());
    }

    #[test]
    fn document_round_trip_and_errors() {
        let m = MlpModel::init_uniform(
            MlpSpec::new(vec![5, 4, 3], Activation::Tanh, true).unwrap(),
            9,
        )
        .unwrap();
        let back = MlpModel::from_document(&m.to_document()).unwrap();
        assert_eq!(m, back);
        for (a, b) in m.weights.iter().zip(&back.weights) {
            for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
        let doc = m.to_document();
        assert!(matches!(
            MlpModel::from_document(&doc[..doc.len() / 2]),
            Err(Error::Malformed { .. })
        ));
        let wrong = doc.replacen("\"format_version\":1", "\"format_version\":2", 1);
        assert!(matches!(MlpModel::from_document(&wrong), Err(Error::Version { .. })));
        let bad_shape = doc.replacen("\"rows\":4", "\"rows\":3", 1);
        assert!(MlpModel::from_document(&bad_shape).is_err());
    }

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax(&[0.0, 0.0]), 0);
    }
}
