//! Resolved settings. Flags win over the config file, which wins over
//! built-in defaults.

use std::path::{Path, PathBuf};

use fusekit::fusion::default_alphas;
use fusekit::PrivacyBudget;
use serde::{Deserialize, Serialize};

use crate::CliError;

/// Every tunable the commands read. The config file and the `config` block of
/// a run manifest use this same JSON layout.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,

    pub mnist_dir: Option<PathBuf>,
    pub train_samples: Option<usize>,
    pub test_samples: Option<usize>,
    pub classes: Option<usize>,
    pub input_dim: Option<usize>,
    pub spread: Option<f64>,
    pub probe_size: Option<usize>,

    pub partition: Option<String>,
    pub personalized_label: Option<usize>,
    pub layers: Option<Vec<usize>>,
    pub activation: Option<String>,
    pub bias: Option<bool>,
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub lr: Option<f64>,

    pub model_a: Option<PathBuf>,
    pub model_b: Option<PathBuf>,
    pub model: Option<PathBuf>,

    pub eps_a: Option<f64>,
    pub eps_w: Option<f64>,
    pub eps_f: Option<f64>,
    pub test_mode: Option<bool>,
    pub insecure: Option<bool>,

    pub rule: Option<String>,
    pub alphas: Option<Vec<f64>>,
    pub pfa: Option<bool>,
    pub sfu: Option<bool>,
    pub sfu_rescale: Option<bool>,
    pub outer_rounds: Option<usize>,
    pub sinkhorn_iters: Option<usize>,

    pub loopback: Option<bool>,
    pub listen: Option<String>,
    pub connect: Option<String>,
    pub role: Option<String>,
    pub alpha: Option<f64>,
    pub alpha_sweep: Option<bool>,
    pub ceiling: Option<Vec<f64>>,
    pub session_id: Option<String>,

    pub grid_a: Option<Vec<f64>>,
    pub grid_w: Option<Vec<f64>>,
    pub grid_f: Option<Vec<f64>>,
    pub repetitions: Option<usize>,
    pub threads: Option<usize>,

    pub mechanism: Option<String>,
    pub trials: Option<usize>,
    pub audit_eps: Option<f64>,
    pub w_min: Option<f64>,
    pub w_max: Option<f64>,
    pub scale: Option<f64>,
}

macro_rules! fields {
    ($m:ident) => {
        $m!(
            seed, out, mnist_dir, train_samples, test_samples, classes, input_dim, spread, probe_size, partition,
            personalized_label, layers, activation, bias, epochs, batch_size, lr, model_a, model_b, model, eps_a,
            eps_w, eps_f, test_mode, insecure, rule, alphas, pfa, sfu, sfu_rescale, outer_rounds, sinkhorn_iters,
            loopback, listen, connect, role, alpha, alpha_sweep, ceiling, session_id, grid_a, grid_w, grid_f,
            repetitions, threads, mechanism, trials, audit_eps, w_min, w_max, scale
        )
    };
}

impl Config {
    /// Fills every unset field from `lower`.
    pub fn or(mut self, lower: Config) -> Config {
        macro_rules! merge {
            ($($f:ident),*) => { $( if self.$f.is_none() { self.$f = lower.$f; } )* };
        }
        fields!(merge);
        self
    }

    pub fn defaults() -> Config {
        Config {
            seed: Some(0),
            out: Some(PathBuf::from("out")),
            train_samples: Some(10_000),
            test_samples: Some(2_000),
            classes: Some(10),
            input_dim: Some(784),
            spread: Some(1.4),
            probe_size: Some(200),
            partition: Some("homogeneous".into()),
            personalized_label: Some(4),
            layers: Some(vec![784, 32, 32, 10]),
            activation: Some("relu".into()),
            bias: Some(false),
            epochs: Some(10),
            batch_size: Some(32),
            lr: Some(0.02),
            eps_a: Some(1.0),
            eps_w: Some(1.0),
            eps_f: Some(1.0),
            test_mode: Some(false),
            insecure: Some(false),
            rule: Some("convex".into()),
            alphas: Some(default_alphas()),
            pfa: Some(true),
            sfu: Some(true),
            sfu_rescale: Some(true),
            outer_rounds: Some(10),
            sinkhorn_iters: Some(50),
            loopback: Some(false),
            alpha: Some(0.5),
            alpha_sweep: Some(false),
            ceiling: Some(vec![1.0, 1.0, 1.0]),
            grid_a: Some(vec![0.01, 0.1, 1.0]),
            grid_w: Some(vec![0.01, 0.1, 1.0]),
            grid_f: Some(vec![0.01, 0.1, 1.0]),
            repetitions: Some(5),
            threads: Some(std::thread::available_parallelism().map_or(1, |n| n.get())),
            trials: Some(1_000_000),
            audit_eps: Some(3f64.ln()),
            w_min: Some(0.0),
            w_max: Some(1.0),
            scale: Some(1.0),
            ..Config::default()
        }
    }

    /// Reads a config file, or the `config` block of a run manifest.
    pub fn load(path: &Path) -> Result<Config, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::usage(format!("cannot read config {}: {e}", path.display())))?;
        let value: serde_json::Value = serde_json::from_str(&text)
            .map_err(|e| CliError::usage(format!("config {} is not JSON: {e}", path.display())))?;
        let value = match value.get("config") {
            Some(inner) if value.get("command").is_some() => inner.clone(),
            _ => value,
        };
        serde_json::from_value(value).map_err(|e| CliError::usage(format!("config {}: {e}", path.display())))
    }

    pub fn budget(&self) -> Result<PrivacyBudget, CliError> {
        let b = PrivacyBudget::new(get(self.eps_a, "eps_a")?, get(self.eps_w, "eps_w")?, get(self.eps_f, "eps_f")?);
        b.validate().map_err(|e| CliError::usage(e.to_string()))?;
        Ok(b)
    }
}

/// A resolved value; only missing when neither flags, file nor defaults set it.
pub fn get<T: Clone>(v: Option<T>, name: &str) -> Result<T, CliError> {
    v.ok_or_else(|| CliError::usage(format!("missing required setting --{}", name.replace('_', "-"))))
}

pub fn get_ref<'a, T>(v: &'a Option<T>, name: &str) -> Result<&'a T, CliError> {
    v.as_ref()
        .ok_or_else(|| CliError::usage(format!("missing required setting --{}", name.replace('_', "-"))))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_override_file_override_defaults() {
        let flags = Config {
            seed: Some(7),
            ..Config::default()
        };
        let file = Config {
            seed: Some(3),
            epochs: Some(2),
            ..Config::default()
        };
        let c = flags.or(file).or(Config::defaults());
        assert_eq!(c.seed, Some(7));
        assert_eq!(c.epochs, Some(2));
        assert_eq!(c.batch_size, Some(32));
    }

    #[test]
    fn manifest_config_block_is_accepted() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.json");
        std::fs::write(&p, r#"{"command":"fuse","config":{"seed":5}}"#).unwrap();
        assert_eq!(Config::load(&p).unwrap().seed, Some(5));
        std::fs::write(&p, r#"{"sed":5}"#).unwrap();
        assert!(Config::load(&p).is_err());
    }
}
