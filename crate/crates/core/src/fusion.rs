//! Neuron alignment, the perturbation-filter adapter, and weight-space fusion.

use serde::{Deserialize, Serialize};

use crate::data::{evaluate, metrics_from_predictions, LabeledDataset, MetricReport};
use crate::error::{Error, Result};
use crate::ldp::{gaussian_sigma, mean_std, rpu, sfu, sfu_rescale, NoiseSpec, Privacy};
use crate::linalg::Matrix;
use crate::matching::PermutationSet;
use crate::nn::{argmax, softmax_row, MlpModel};

/// Moves the neurons of `model` so that new neuron `a` of hidden layer `h` is
/// old neuron `perms[h-1][a]`. Incoming rows, outgoing columns and biases move
/// together, so the network function is unchanged.
pub fn apply_permutations(model: &MlpModel, perms: &PermutationSet) -> Result<MlpModel> {
    perms.validate()?;
    if perms.layer_sizes != model.spec.layer_sizes {
        return Err(Error::Architecture(format!(
            "permutations for {:?} applied to {:?}",
            perms.layer_sizes, model.spec.layer_sizes
        )));
    }
    let mut out = model.clone();
    for (i, p) in perms.perms.iter().enumerate() {
        let h = i + 1;
        // W_{h-1}: rows are neurons of layer h; W_h: columns are neurons of layer h
        out.weights[h - 1] = out.weights[h - 1].select_rows(p);
        out.weights[h] = out.weights[h].select_cols(p);
        if let Some(bs) = out.biases.as_mut() {
            bs[h - 1] = p.iter().map(|&j| bs[h - 1][j]).collect();
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PfaOptions {
    /// Apply the erf smoothing filter after the Gaussian perturbation.
    pub sfu: bool,
    /// Map filter output back onto each layer's original `[w_min, w_max]`.
    pub sfu_rescale: bool,
}

impl Default for PfaOptions {
    fn default() -> Self {
        Self {
            sfu: true,
            sfu_rescale: true,
        }
    }
}

/// Perturbation-filter adapter applied to every layer of `model`.
///
/// Per transition `p` the weights (and bias, as an extra column) are perturbed
/// with `N(0, σ²)`, `σ = gaussian_sigma(eps_f, delta, w_max − w_min)`, then
/// filtered with mean and standard deviation taken over the perturbed layer.
/// Disabled privacy returns the model unchanged.
pub fn pfa_transform(model: &MlpModel, privacy: &Privacy, noise: &NoiseSpec, opts: PfaOptions) -> Result<MlpModel> {
    let budget = match privacy {
        Privacy::Disabled => return Ok(model.clone()),
        Privacy::Private(b) => b,
    };
    budget.validate()?;
    let mut out = model.clone();
    for p in 0..model.spec.transitions() {
        let params = layer_params(model, p);
        let (lo, hi) = (params.min(), params.max());
        let sigma = gaussian_sigma(budget.eps_f, budget.delta, hi - lo)?;
        let noisy = rpu(&params, sigma, noise, p);
        let transformed = if opts.sfu {
            let (mu, sd) = mean_std(noisy.as_slice());
            if sd > 0.0 {
                let filtered = sfu(&noisy, mu, sd)?;
                if opts.sfu_rescale {
                    sfu_rescale(&filtered, lo, hi)
                } else {
                    filtered
                }
            } else {
                noisy
            }
        } else {
            noisy
        };
        set_layer_params(&mut out, p, &transformed);
    }
    out.validate()?;
    Ok(out)
}

/// Weights of transition `p`, with the bias appended as the last column when present.
fn layer_params(model: &MlpModel, p: usize) -> Matrix {
    let w = &model.weights[p];
    match &model.biases {
        None => w.clone(),
        Some(bs) => Matrix::from_fn(w.rows(), w.cols() + 1, |i, j| {
            if j < w.cols() {
                w[(i, j)]
            } else {
                bs[p][i]
            }
        }),
    }
}

fn set_layer_params(model: &mut MlpModel, p: usize, params: &Matrix) {
    let cols = model.weights[p].cols();
    model.weights[p] = Matrix::from_fn(params.rows(), cols, |i, j| params[(i, j)]);
    if let Some(bs) = model.biases.as_mut() {
        bs[p] = (0..params.rows()).map(|i| params[(i, cols)]).collect();
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionRule {
    /// `α·W_a + (1−α)·W_b`
    Convex,
    /// `½(α·W_a + (1−α)·W_b)`, kept for literal reproductions.
    Halved,
}

impl std::str::FromStr for FusionRule {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "convex" => Ok(FusionRule::Convex),
            "halved" | "half" => Ok(FusionRule::Halved),
            other => Err(Error::invalid(format!("unknown fusion rule '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionConfig {
    pub alphas: Vec<f64>,
    pub rule: FusionRule,
    pub pfa_enabled: bool,
    pub pfa: PfaOptions,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            alphas: default_alphas(),
            rule: FusionRule::Convex,
            pfa_enabled: true,
            pfa: PfaOptions::default(),
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.alphas.is_empty() {
            return Err(Error::invalid("alpha sweep is empty"));
        }
        if let Some(a) = self.alphas.iter().find(|a| !(0.0..=1.0).contains(*a)) {
            return Err(Error::invalid(format!("alpha {a} outside [0,1]")));
        }
        Ok(())
    }
}

/// `{0.0, 0.1, …, 1.0}`.
pub fn default_alphas() -> Vec<f64> {
    (0..=10).map(|i| i as f64 / 10.0).collect()
}

fn check_same_arch(a: &MlpModel, b: &MlpModel) -> Result<()> {
    if a.spec != b.spec {
        return Err(Error::Architecture(format!(
            "{:?} vs {:?}",
            a.spec.layer_sizes, b.spec.layer_sizes
        )));
    }
    Ok(())
}

pub fn fuse_weights(model_a: &MlpModel, model_b: &MlpModel, alpha: f64, rule: FusionRule) -> Result<MlpModel> {
    check_same_arch(model_a, model_b)?;
    let scale = match rule {
        FusionRule::Convex => 1.0,
        FusionRule::Halved => 0.5,
    };
    let mix = |x: f64, y: f64| scale * (alpha * x + (1.0 - alpha) * y);
    let weights = model_a
        .weights
        .iter()
        .zip(&model_b.weights)
        .map(|(wa, wb)| wa.zip_with(wb, mix))
        .collect::<Result<Vec<_>>>()?;
    let biases = match (&model_a.biases, &model_b.biases) {
        (Some(ba), Some(bb)) => Some(
            ba.iter()
                .zip(bb)
                .map(|(x, y)| x.iter().zip(y).map(|(&p, &q)| mix(p, q)).collect())
                .collect(),
        ),
        _ => None,
    };
    MlpModel::new(model_a.spec.clone(), weights, biases)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlphaPoint {
    pub alpha: f64,
    pub metrics: MetricReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionReport {
    /// In sweep order.
    pub points: Vec<AlphaPoint>,
    pub best: AlphaPoint,
    /// Mean accuracy of the three most accurate points.
    pub top3_avg: f64,
}

impl FusionReport {
    /// Points ranked by accuracy, ties broken by sweep order.
    pub fn from_points(points: Vec<AlphaPoint>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::invalid("fusion report needs at least one point"));
        }
        let ranked = ranked(&points);
        let top: Vec<&AlphaPoint> = ranked.iter().take(3).map(|&i| &points[i]).collect();
        let top3_avg = top.iter().map(|p| p.metrics.acc).sum::<f64>() / top.len() as f64;
        Ok(Self {
            best: points[ranked[0]].clone(),
            top3_avg,
            points,
        })
    }

    pub fn best_acc(&self) -> f64 {
        self.best.metrics.acc
    }

    /// CSV with one row per alpha, then a `best` row and a `top3_avg` row
    /// (mean of every metric over the three best points).
    pub fn to_csv(&self) -> String {
        let mut out = format!("alpha,{}\n", MetricReport::csv_header());
        for p in &self.points {
            out.push_str(&format!("{},{}\n", p.alpha, p.metrics.csv_row()));
        }
        out.push_str(&format!("best@{},{}\n", self.best.alpha, self.best.metrics.csv_row()));
        let ranked = ranked(&self.points);
        let top: Vec<[f64; 7]> = ranked.iter().take(3).map(|&i| self.points[i].metrics.values()).collect();
        let means: Vec<String> = (0..7)
            .map(|k| (top.iter().map(|v| v[k]).sum::<f64>() / top.len() as f64).to_string())
            .collect();
        out.push_str(&format!("top3_avg,{}\n", means.join(",")));
        out
    }
}

fn ranked(points: &[AlphaPoint]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..points.len()).collect();
    idx.sort_by(|&a, &b| points[b].metrics.acc.total_cmp(&points[a].metrics.acc).then(a.cmp(&b)));
    idx
}

/// Evaluates `fuse_weights(model_a, model_b, α)` for every α of the sweep.
pub fn alpha_sweep(
    model_a: &MlpModel,
    model_b_aligned: &MlpModel,
    test_data: &LabeledDataset,
    alphas: &[f64],
    rule: FusionRule,
) -> Result<FusionReport> {
    if alphas.is_empty() {
        return Err(Error::invalid("alpha sweep is empty"));
    }
    let points = alphas
        .iter()
        .map(|&alpha| {
            let fused = fuse_weights(model_a, model_b_aligned, alpha, rule)?;
            Ok(AlphaPoint {
                alpha,
                metrics: evaluate(&fused, test_data)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    FusionReport::from_points(points)
}

/// Direct parameter averaging without any alignment.
pub fn vanilla_average_baseline(
    model_a: &MlpModel,
    model_b: &MlpModel,
    alphas: &[f64],
    test_data: &LabeledDataset,
) -> Result<FusionReport> {
    alpha_sweep(model_a, model_b, test_data, alphas, FusionRule::Convex)
}

/// Averages softmax outputs of all models and takes the argmax.
pub fn prediction_ensemble_baseline(models: &[MlpModel], test_data: &LabeledDataset) -> Result<MetricReport> {
    if models.is_empty() {
        return Err(Error::invalid("ensemble needs at least one model"));
    }
    let n = test_data.len();
    let k = models[0].spec.output_dim();
    let mut acc = Matrix::zeros(n, k);
    for m in models {
        let logits = m.forward(&test_data.inputs)?;
        if logits.cols() != k {
            return Err(Error::dim("ensemble output dimension", k, logits.cols()));
        }
        for i in 0..n {
            for (a, p) in acc.row_mut(i).iter_mut().zip(softmax_row(logits.row(i))) {
                *a += p;
            }
        }
    }
    let pred: Vec<usize> = (0..n).map(|i| argmax(acc.row(i))).collect();
    Ok(metrics_from_predictions(&pred, &test_data.labels, test_data.class_count))
}

/// Mean and population standard deviation of best / top-3 accuracy across runs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub runs: usize,
    pub best_mean: f64,
    pub best_std: f64,
    pub top3_mean: f64,
    pub top3_std: f64,
}

pub fn summarize(reports: &[FusionReport]) -> SweepSummary {
    let best: Vec<f64> = reports.iter().map(FusionReport::best_acc).collect();
    let top: Vec<f64> = reports.iter().map(|r| r.top3_avg).collect();
    let (best_mean, best_std) = mean_std(&best);
    let (top3_mean, top3_std) = mean_std(&top);
    SweepSummary {
        runs: reports.len(),
        best_mean,
        best_std,
        top3_mean,
        top3_std,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ldp::PrivacyBudget;
    use crate::nn::{Activation, MlpSpec};

    fn tiny(seed: u64, bias: bool) -> MlpModel {
        MlpModel::init_uniform(MlpSpec::new(vec![3, 4, 5, 2], Activation::Relu, bias).unwrap(), seed).unwrap()
    }

    #[test]
    fn identity_permutation_is_noop() {
        let m = tiny(1, true);
        let id = PermutationSet::identity(&m.spec.layer_sizes);
        assert_eq!(apply_permutations(&m, &id).unwrap(), m);
    }

    #[test]
    fn permutation_then_inverse_restores() {
        let m = tiny(2, true);
        let p = PermutationSet::new(&m.spec.layer_sizes, vec![vec![3, 1, 0, 2], vec![4, 0, 3, 1, 2]]).unwrap();
        let back = apply_permutations(&apply_permutations(&m, &p).unwrap(), &p.inverse()).unwrap();
        assert_eq!(back, m);
        let x = Matrix::from_fn(7, 3, |i, j| ((i * 3 + j) as f64 * 0.37).cos());
        let permuted = apply_permutations(&m, &p).unwrap();
        assert!(m.forward(&x).unwrap().max_abs_diff(&permuted.forward(&x).unwrap()) <= 1e-12);
    }

    #[test]
    fn fuse_arithmetic() {
        let spec = MlpSpec::new(vec![1, 1, 1], Activation::Relu, false).unwrap();
        let mk = |v: f64| MlpModel::new(spec.clone(), vec![Matrix::filled(1, 1, v), Matrix::filled(1, 1, v)], None).unwrap();
        let (a, b) = (mk(2.0), mk(4.0));
        assert_eq!(fuse_weights(&a, &b, 0.5, FusionRule::Convex).unwrap().weights[0][(0, 0)], 3.0);
        assert_eq!(fuse_weights(&a, &b, 0.5, FusionRule::Halved).unwrap().weights[0][(0, 0)], 1.5);
        assert_eq!(fuse_weights(&a, &b, 1.0, FusionRule::Convex).unwrap(), a);
        assert_eq!(fuse_weights(&a, &b, 0.0, FusionRule::Convex).unwrap(), b);
        assert!(fuse_weights(&a, &tiny(0, false), 0.5, FusionRule::Convex).is_err());
    }

    #[test]
    fn pfa_modes() {
        let m = tiny(3, false);
        let noise = NoiseSpec::new(9);
        assert_eq!(pfa_transform(&m, &Privacy::Disabled, &noise, PfaOptions::default()).unwrap(), m);
        let private = Privacy::Private(PrivacyBudget::new(1.0, 1.0, 1.0));
        let raw = pfa_transform(&m, &private, &noise, PfaOptions { sfu: true, sfu_rescale: false }).unwrap();
        for w in &raw.weights {
            assert!(w.as_slice().iter().all(|&v| (0.0..1.0).contains(&v)));
        }
        let rescaled = pfa_transform(&m, &private, &noise, PfaOptions::default()).unwrap();
        for (w, orig) in rescaled.weights.iter().zip(&m.weights) {
            assert!(w.min() >= orig.min() && w.max() <= orig.max());
        }
        assert_eq!(rescaled, pfa_transform(&m, &private, &noise, PfaOptions::default()).unwrap());
    }

    #[test]
    fn pfa_handles_biases() {
        let m = tiny(4, true);
        let private = Privacy::Private(PrivacyBudget::new(1.0, 1.0, 1.0));
        let out = pfa_transform(&m, &private, &NoiseSpec::new(1), PfaOptions::default()).unwrap();
        assert!(out.biases.is_some());
        assert_ne!(out.biases, m.biases);
    }

    #[test]
    fn report_ranking() {
        let mk = |alpha: f64, acc: f64| AlphaPoint {
            alpha,
            metrics: MetricReport {
                acc,
                ma_f1: acc,
                w_f1: acc,
                ma_rec: acc,
                w_rec: acc,
                ma_prec: acc,
                w_prec: acc,
            },
        };
        let r = FusionReport::from_points(vec![mk(0.0, 0.5), mk(0.5, 0.9), mk(1.0, 0.7), mk(0.2, 0.9)]).unwrap();
        assert_eq!(r.best.alpha, 0.5);
        assert!((r.top3_avg - (0.9 + 0.9 + 0.7) / 3.0).abs() < 1e-15);
        assert!(r.best_acc() >= r.top3_avg);
        let csv = r.to_csv();
        assert!(csv.starts_with("alpha,acc,ma_f1,w_f1,ma_rec,w_rec,ma_prec,w_prec\n"));
        assert_eq!(csv.lines().count(), 1 + 4 + 2);
        assert!(FusionReport::from_points(vec![]).is_err());
    }
}
