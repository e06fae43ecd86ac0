//! Local randomizers and the privacy accountant.
//!
//! * node features: additive Laplace noise, scale `sensitivity / eps_a`;
//! * weight features: multi-bit encoding into `{-1, 0, +1}` symbols, rectified
//!   on the receiving side into unbiased real-valued estimates;
//! * exchanged weights: Gaussian perturbation (RPU) followed by the erf
//!   smoothing filter (SFU).
//!
//! Every mechanism is a pure function of its input, parameters and
//! [`NoiseSpec`]. Each (mechanism, layer) pair reads its own substream.

use std::collections::BTreeMap;

use rand::seq::index;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::ModelGraph;
use crate::linalg::Matrix;
use crate::rng::{substream, StreamRng};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrivacyBudget {
    /// Node-feature (activation) budget.
    pub eps_a: f64,
    /// Weight-feature budget.
    pub eps_w: f64,
    /// Budget of the perturbation-filter adapter on exchanged weights.
    pub eps_f: f64,
    pub delta: f64,
}

impl PrivacyBudget {
    pub const DEFAULT_DELTA: f64 = 1e-5;

    pub fn new(eps_a: f64, eps_w: f64, eps_f: f64) -> Self {
        Self {
            eps_a,
            eps_w,
            eps_f,
            delta: Self::DEFAULT_DELTA,
        }
    }

    pub fn total(&self) -> f64 {
        self.eps_a + self.eps_w + self.eps_f
    }

    /// All components must be positive and finite, `delta` in `(0, 1)`.
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("eps_a", self.eps_a), ("eps_w", self.eps_w), ("eps_f", self.eps_f)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::invalid(format!("delta must lie in (0,1), got {}", self.delta)));
        }
        Ok(())
    }

    /// True when every component of `self` is at most the matching ceiling.
    pub fn within(&self, ceiling: &PrivacyBudget) -> bool {
        self.eps_a <= ceiling.eps_a && self.eps_w <= ceiling.eps_w && self.eps_f <= ceiling.eps_f
    }
}

/// Sequential composition: the budgets of the three mechanisms add up.
pub fn compose_budget(b: &PrivacyBudget) -> f64 {
    b.total()
}

/// Privacy setting of a run. `Disabled` turns every mechanism into the identity
/// and exists for oracle tests only.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum Privacy {
    Private(PrivacyBudget),
    Disabled,
}

impl Privacy {
    pub fn budget(&self) -> Option<&PrivacyBudget> {
        match self {
            Privacy::Private(b) => Some(b),
            Privacy::Disabled => None,
        }
    }

    pub fn is_disabled(&self) -> bool {
        matches!(self, Privacy::Disabled)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mechanism {
    Laplace,
    MultiBit,
    Rpu,
}

impl Mechanism {
    pub fn stream_name(self) -> &'static str {
        match self {
            Mechanism::Laplace => "laplace",
            Mechanism::MultiBit => "multibit",
            Mechanism::Rpu => "rpu",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub seed: u64,
}

impl NoiseSpec {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    pub fn stream(&self, mechanism: Mechanism, layer: usize) -> StreamRng {
        substream(self.seed, mechanism.stream_name(), layer as u64)
    }
}

/// Draws a uniform in the open interval (0, 1).
fn open_uniform(rng: &mut StreamRng) -> f64 {
    loop {
        let u: f64 = rng.gen();
        if u > 0.0 {
            return u;
        }
    }
}

/// Inverse CDF of the zero-mean Laplace distribution with the given scale.
pub fn laplace_inverse_cdf(u: f64, scale: f64) -> f64 {
    let c = u - 0.5;
    -scale * c.signum() * (1.0 - 2.0 * c.abs()).ln()
}

pub fn laplace_density(x: f64, location: f64, scale: f64) -> f64 {
    (-(x - location).abs() / scale).exp() / (2.0 * scale)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SensitivityMode {
    /// Spread of all entries (max − min).
    Range,
    Fixed(f64),
}

pub fn feature_sensitivity(features: &Matrix, mode: SensitivityMode) -> f64 {
    match mode {
        SensitivityMode::Range if features.as_slice().is_empty() => 0.0,
        SensitivityMode::Range => features.max() - features.min(),
        SensitivityMode::Fixed(c) => c,
    }
}

/// Adds i.i.d. Laplace(`sensitivity / eps_a`) noise, one inverse-CDF draw per
/// entry in row-major order from the `laplace` substream of `layer`.
pub fn laplace_perturb(
    features: &Matrix,
    eps_a: f64,
    sensitivity: f64,
    noise: &NoiseSpec,
    layer: usize,
) -> Result<Matrix> {
    if !(eps_a > 0.0 && eps_a.is_finite()) {
        return Err(Error::invalid(format!("eps_a must be positive, got {eps_a}")));
    }
    if !(sensitivity >= 0.0 && sensitivity.is_finite()) {
        return Err(Error::invalid("sensitivity must be finite and non-negative"));
    }
    if sensitivity == 0.0 {
        return Ok(features.clone());
    }
    let scale = sensitivity / eps_a;
    let mut rng = noise.stream(Mechanism::Laplace, layer);
    Ok(features.map(|x| x + laplace_inverse_cdf(open_uniform(&mut rng), scale)))
}

/// Multi-bit encoded weight features of one layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiBitEncoding {
    pub rows: usize,
    /// Feature dimension (fan-in).
    pub d: usize,
    /// Sampled dimensions per row.
    pub m: usize,
    pub w_min: f64,
    pub w_max: f64,
    pub eps_w: f64,
    /// Set when `w_min == w_max`; every input is then treated as the midpoint.
    pub degenerate: bool,
    /// Row-major `rows × d` symbols in `{-1, 0, +1}`.
    pub symbols: Vec<i8>,
}

/// Default sampled-dimension count: `max(1, round(0.3·d))`.
pub fn default_sample_count(d: usize) -> usize {
    ((d as f64 * 0.3).round() as usize).clamp(1, d.max(1))
}

/// Probability of emitting `+1` for a sampled feature with value `w`.
pub fn multibit_plus_probability(w: f64, eps_w: f64, m: usize, w_min: f64, w_max: f64) -> f64 {
    let e = (eps_w / m as f64).exp();
    let t = if w_max > w_min {
        ((w - w_min) / (w_max - w_min)).clamp(0.0, 1.0)
    } else {
        0.5
    };
    1.0 / (e + 1.0) + t * (e - 1.0) / (e + 1.0)
}

/// Per row: sample `m` of `d` indices without replacement, then for each sampled
/// index in ascending order draw one Bernoulli and emit `+1`/`-1`. Unsampled
/// indices emit `0`. Row `r` uses the `multibit` substream of `layer` in row order.
pub fn multibit_encode(
    weight_features: &Matrix,
    eps_w: f64,
    m: usize,
    w_min: f64,
    w_max: f64,
    noise: &NoiseSpec,
    layer: usize,
) -> Result<MultiBitEncoding> {
    let (rows, d) = weight_features.shape();
    if m == 0 || m > d {
        return Err(Error::invalid(format!("sample count m={m} outside 1..={d}")));
    }
    if !(eps_w > 0.0 && eps_w.is_finite()) {
        return Err(Error::invalid(format!("eps_w must be positive, got {eps_w}")));
    }
    if !(w_min <= w_max) {
        return Err(Error::invalid("w_min must not exceed w_max"));
    }
    let degenerate = w_min == w_max;
    let mut rng = noise.stream(Mechanism::MultiBit, layer);
    let mut symbols = vec![0i8; rows * d];
    for r in 0..rows {
        let mut picked = index::sample(&mut rng, d, m).into_vec();
        picked.sort_unstable();
        let row = weight_features.row(r);
        for q in picked {
            let p = multibit_plus_probability(row[q], eps_w, m, w_min, w_max);
            let u: f64 = rng.gen();
            symbols[r * d + q] = if u < p { 1 } else { -1 };
        }
    }
    Ok(MultiBitEncoding {
        rows,
        d,
        m,
        w_min,
        w_max,
        eps_w,
        degenerate,
        symbols,
    })
}

impl MultiBitEncoding {
    pub fn validate(&self) -> Result<()> {
        if self.symbols.len() != self.rows * self.d {
            return Err(Error::dim("multibit symbols", self.rows * self.d, self.symbols.len()));
        }
        if self.m == 0 || self.m > self.d {
            return Err(Error::invalid("multibit m outside 1..=d"));
        }
        if self.symbols.iter().any(|s| !(-1..=1).contains(s)) {
            return Err(Error::invalid("multibit symbol outside {-1,0,1}"));
        }
        for r in 0..self.rows {
            let nz = self.symbols[r * self.d..(r + 1) * self.d].iter().filter(|&&s| s != 0).count();
            if nz != self.m {
                return Err(Error::invalid(format!("row {r} has {nz} sampled symbols, expected {}", self.m)));
            }
        }
        if self.degenerate != (self.w_min == self.w_max) || self.w_min > self.w_max {
            return Err(Error::invalid("inconsistent multibit range"));
        }
        Ok(())
    }

    /// Value a single symbol rectifies to.
    pub fn rectify_symbol(&self, s: i8) -> f64 {
        if self.degenerate {
            return self.w_min;
        }
        let e = (self.eps_w / self.m as f64).exp();
        let mid = 0.5 * (self.w_max + self.w_min);
        let gain = self.d as f64 * (self.w_max - self.w_min) / (2.0 * self.m as f64) * (e + 1.0) / (e - 1.0);
        mid + s as f64 * gain
    }
}

/// Unbiased estimates of the encoded weights.
pub fn multibit_rectify(enc: &MultiBitEncoding) -> Matrix {
    let data = enc.symbols.iter().map(|&s| enc.rectify_symbol(s)).collect();
    Matrix::from_vec(enc.rows, enc.d, data).expect("encoding shape")
}

/// Gaussian-mechanism calibration `sqrt(2 ln(1.25/δ)) · sensitivity / ε`.
pub fn gaussian_sigma(eps_f: f64, delta: f64, sensitivity: f64) -> Result<f64> {
    if !(eps_f > 0.0 && eps_f.is_finite()) {
        return Err(Error::invalid(format!("eps_f must be positive, got {eps_f}")));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::invalid(format!("delta must lie in (0,1), got {delta}")));
    }
    Ok((2.0 * (1.25 / delta).ln()).sqrt() * sensitivity / eps_f)
}

/// Randomized perturbation unit: adds N(0, sigma²) per entry from the `rpu`
/// substream of `layer`.
pub fn rpu(weights: &Matrix, sigma: f64, noise: &NoiseSpec, layer: usize) -> Matrix {
    if sigma == 0.0 {
        return weights.clone();
    }
    let mut rng = noise.stream(Mechanism::Rpu, layer);
    weights.map(|x| {
        let z: f64 = rng.sample(StandardNormal);
        x + sigma * z
    })
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[inline]
pub fn sfu_value(x: f64, mu: f64, sigma_stat: f64) -> f64 {
    libm::erf((x - mu) / (sigma_stat * std::f64::consts::SQRT_2)).max(0.0)
}

/// Smoothing filter unit: `max(0, erf((x − mu) / (sigma_stat·√2)))` per entry.
pub fn sfu(noisy: &Matrix, mu: f64, sigma_stat: f64) -> Result<Matrix> {
    if !(sigma_stat > 0.0 && sigma_stat.is_finite()) {
        return Err(Error::invalid(format!("sigma_stat must be positive, got {sigma_stat}")));
    }
    Ok(noisy.map(|x| sfu_value(x, mu, sigma_stat)))
}

/// Maps filter output in `[0, 1)` linearly onto `[w_min, w_max]`.
pub fn sfu_rescale(filtered: &Matrix, w_min: f64, w_max: f64) -> Matrix {
    filtered.map(|v| w_min + v * (w_max - w_min))
}

/// Per-session privacy ledger. Each mechanism may be charged once; a second
/// charge means the same private material would be released twice.
#[derive(Debug, Clone, Default)]
pub struct Accountant {
    charged: BTreeMap<Mechanism, f64>,
    invocations: BTreeMap<Mechanism, u32>,
}

impl Accountant {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn charge(&mut self, mechanism: Mechanism, eps: f64) -> Result<()> {
        if self.charged.contains_key(&mechanism) {
            return Err(Error::BudgetExhausted(mechanism.stream_name().into()));
        }
        self.charged.insert(mechanism, eps);
        *self.invocations.entry(mechanism).or_default() += 1;
        Ok(())
    }

    pub fn is_charged(&self, mechanism: Mechanism) -> bool {
        self.charged.contains_key(&mechanism)
    }

    pub fn invocations(&self, mechanism: Mechanism) -> u32 {
        self.invocations.get(&mechanism).copied().unwrap_or(0)
    }

    /// Sum of all charged budgets.
    pub fn spent(&self) -> f64 {
        self.charged.values().sum()
    }
}

/// What the owner of a graph releases about its weight features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightShare {
    Encoded(MultiBitEncoding),
    /// Only produced with privacy disabled.
    Clear(Matrix),
}

impl WeightShare {
    pub fn estimate(&self) -> Matrix {
        match self {
            WeightShare::Encoded(enc) => multibit_rectify(enc),
            WeightShare::Clear(m) => m.clone(),
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        match self {
            WeightShare::Encoded(enc) => (enc.rows, enc.d),
            WeightShare::Clear(m) => m.shape(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbedGraph {
    pub layer_sizes: Vec<usize>,
    pub node_features: Vec<Matrix>,
    pub weights: Vec<WeightShare>,
    /// `None` when privacy was disabled.
    pub budget: Option<PrivacyBudget>,
}

impl PerturbedGraph {
    pub fn weight_estimates(&self) -> Vec<Matrix> {
        self.weights.iter().map(WeightShare::estimate).collect()
    }

    /// Checks that every block has the shape implied by `layer_sizes`.
    pub fn validate(&self) -> Result<()> {
        let l = self.layer_sizes.len();
        if l < 3 {
            return Err(Error::Architecture("perturbed graph has no hidden layer".into()));
        }
        if self.node_features.len() != l - 2 {
            return Err(Error::dim("node feature layers", l - 2, self.node_features.len()));
        }
        let probes = self.node_features[0].cols();
        for (i, nf) in self.node_features.iter().enumerate() {
            if nf.shape() != (self.layer_sizes[i + 1], probes) {
                return Err(Error::dim(format!("node features of layer {}", i + 1), self.layer_sizes[i + 1], nf.rows()));
            }
        }
        if self.weights.len() != l - 1 {
            return Err(Error::dim("weight feature layers", l - 1, self.weights.len()));
        }
        for (p, w) in self.weights.iter().enumerate() {
            if w.shape() != (self.layer_sizes[p + 1], self.layer_sizes[p]) {
                return Err(Error::dim(format!("weight features of layer {}", p + 1), self.layer_sizes[p + 1], w.shape().0));
            }
            if let WeightShare::Encoded(enc) = w {
                enc.validate()?;
            }
        }
        match (&self.budget, self.weights.iter().any(|w| matches!(w, WeightShare::Clear(_)))) {
            (Some(_), true) => Err(Error::invalid("clear weight features in a private share")),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerturbConfig {
    pub privacy: Privacy,
    pub sensitivity: SensitivityMode,
    /// Sampled fraction of the fan-in for multi-bit encoding.
    pub sample_fraction: f64,
}

impl PerturbConfig {
    pub fn private(budget: PrivacyBudget) -> Self {
        Self {
            privacy: Privacy::Private(budget),
            sensitivity: SensitivityMode::Range,
            sample_fraction: 0.3,
        }
    }

    pub fn disabled() -> Self {
        Self {
            privacy: Privacy::Disabled,
            sensitivity: SensitivityMode::Range,
            sample_fraction: 0.3,
        }
    }

    pub fn sample_count(&self, d: usize) -> usize {
        ((d as f64 * self.sample_fraction).round() as usize).clamp(1, d.max(1))
    }
}

/// Produces the shareable variant of `graph`.
///
/// Hidden layer `h` uses Laplace layer index `h`; weight layer `p` uses
/// multi-bit layer index `p`.
pub fn perturb_graph(graph: &ModelGraph, cfg: &PerturbConfig, noise: &NoiseSpec) -> Result<PerturbedGraph> {
    match cfg.privacy {
        Privacy::Disabled => Ok(PerturbedGraph {
            layer_sizes: graph.layer_sizes.clone(),
            node_features: graph.node_features.clone(),
            weights: graph.weight_features.iter().cloned().map(WeightShare::Clear).collect(),
            budget: None,
        }),
        Privacy::Private(budget) => {
            budget.validate()?;
            let node_features = graph
                .node_features
                .iter()
                .enumerate()
                .map(|(i, nf)| {
                    let sens = feature_sensitivity(nf, cfg.sensitivity);
                    laplace_perturb(nf, budget.eps_a, sens, noise, i + 1)
                })
                .collect::<Result<Vec<_>>>()?;
            let weights = graph
                .weight_features
                .iter()
                .zip(&graph.weight_range)
                .enumerate()
                .map(|(i, (w, &(lo, hi)))| {
                    let m = cfg.sample_count(w.cols());
                    multibit_encode(w, budget.eps_w, m, lo, hi, noise, i + 1).map(WeightShare::Encoded)
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(PerturbedGraph {
                layer_sizes: graph.layer_sizes.clone(),
                node_features,
                weights,
                budget: Some(budget),
            })
        }
    }
}
