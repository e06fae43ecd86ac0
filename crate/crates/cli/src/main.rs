//! Command-line front end: fixture training, offline fusion, protocol
//! sessions, budget sweeps and mechanism audits.

mod commands;
mod config;
mod manifest;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::Config;

pub const EXIT_OTHER: u8 = 1;
pub const EXIT_USAGE: u8 = 2;
pub const EXIT_PROTOCOL: u8 = 3;
pub const EXIT_DIVERGED: u8 = 4;

#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_USAGE,
            message: message.into(),
        }
    }

    pub fn other(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_OTHER,
            message: message.into(),
        }
    }

    pub fn protocol(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_PROTOCOL,
            message: message.into(),
        }
    }
}

impl From<fusekit::Error> for CliError {
    fn from(e: fusekit::Error) -> Self {
        use fusekit::Error as E;
        let code = match &e {
            E::InvalidArgument(_) => EXIT_USAGE,
            E::Diverged { .. } => EXIT_DIVERGED,
            E::Sequence(_) | E::Protocol(_) | E::Transport(_) | E::BudgetRefused(_) | E::BudgetExhausted(_) => {
                EXIT_PROTOCOL
            }
            _ => EXIT_OTHER,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

#[derive(Parser, Debug)]
#[command(name = "fusekit", version, about = "Private neuron alignment and fusion of dense networks")]
struct Cli {
    /// JSON config file, or a run manifest to replay.
    #[arg(long, global = true, env = "PRIVFUSION_CONFIG")]
    config: Option<PathBuf>,

    /// Root seed; every random component draws from a named substream of it.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train two fixture models on complementary shards.
    Train {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Run the offline pipeline on two models and sweep the mixing ratio.
    Fuse {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        models: ModelArgs,
        #[command(flatten)]
        privacy: PrivacyArgs,
        #[command(flatten)]
        fusion: FusionArgs,
    },
    /// Run one protocol session, in-process or over TCP.
    Protocol {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        models: ModelArgs,
        #[command(flatten)]
        privacy: PrivacyArgs,
        #[command(flatten)]
        fusion: FusionArgs,
        #[command(flatten)]
        session: SessionArgs,
    },
    /// Run the fuse pipeline over a grid of budgets and repetitions.
    Sweep {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        models: ModelArgs,
        #[command(flatten)]
        fusion: FusionArgs,
        #[command(flatten)]
        grid: GridArgs,
    },
    /// Monte Carlo audit of a perturbation mechanism.
    Audit(AuditArgs),
}

#[derive(Args, Debug)]
struct DataArgs {
    /// Directory with MNIST IDX files; synthetic blobs are used when absent.
    #[arg(long)]
    mnist_dir: Option<PathBuf>,
    #[arg(long)]
    train_samples: Option<usize>,
    #[arg(long)]
    test_samples: Option<usize>,
    /// Synthetic data only.
    #[arg(long)]
    classes: Option<usize>,
    /// Synthetic data only.
    #[arg(long)]
    input_dim: Option<usize>,
    /// Synthetic data only: standard deviation around each class center.
    #[arg(long)]
    spread: Option<f64>,
    /// Rows of the shared probe set.
    #[arg(long)]
    probe_size: Option<usize>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// homogeneous or heterogeneous.
    #[arg(long)]
    partition: Option<String>,
    #[arg(long)]
    personalized_label: Option<usize>,
    /// Layer sizes, input first.
    #[arg(long, value_delimiter = ',')]
    layers: Option<Vec<usize>>,
    /// relu or tanh.
    #[arg(long)]
    activation: Option<String>,
    #[arg(long)]
    bias: bool,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
}

#[derive(Args, Debug)]
struct ModelArgs {
    /// Initiator's model in `fuse`, `sweep` and loopback sessions.
    #[arg(long)]
    model_a: Option<PathBuf>,
    #[arg(long)]
    model_b: Option<PathBuf>,
    /// This party's model in a networked session.
    #[arg(long)]
    model: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct PrivacyArgs {
    #[arg(long)]
    eps_a: Option<f64>,
    #[arg(long)]
    eps_w: Option<f64>,
    #[arg(long)]
    eps_f: Option<f64>,
    /// Disable every privacy mechanism. Requires --insecure.
    #[arg(long)]
    test_mode: bool,
    #[arg(long)]
    insecure: bool,
}

#[derive(Args, Debug)]
struct FusionArgs {
    /// convex or halved.
    #[arg(long)]
    rule: Option<String>,
    #[arg(long, value_delimiter = ',')]
    alphas: Option<Vec<f64>>,
    #[arg(long)]
    no_pfa: bool,
    #[arg(long)]
    no_sfu: bool,
    #[arg(long)]
    no_sfu_rescale: bool,
    #[arg(long)]
    outer_rounds: Option<usize>,
    #[arg(long)]
    sinkhorn_iters: Option<usize>,
}

#[derive(Args, Debug)]
struct SessionArgs {
    /// Run both parties in-process.
    #[arg(long, conflicts_with_all = ["listen", "connect"])]
    loopback: bool,
    /// Accept one connection on this address.
    #[arg(long, conflicts_with = "connect")]
    listen: Option<String>,
    #[arg(long)]
    connect: Option<String>,
    /// initiator or responder; defaults to initiator when connecting.
    #[arg(long)]
    role: Option<String>,
    /// Fixed mixing ratio for the final fusion.
    #[arg(long)]
    alpha: Option<f64>,
    /// Pick the ratio by a sweep on the local test split instead.
    #[arg(long)]
    alpha_sweep: bool,
    /// Largest accepted peer budget as eps_a,eps_w,eps_f.
    #[arg(long, value_delimiter = ',')]
    ceiling: Option<Vec<f64>>,
    #[arg(long)]
    session_id: Option<String>,
}

#[derive(Args, Debug)]
struct GridArgs {
    #[arg(long, value_delimiter = ',')]
    grid_a: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    grid_w: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    grid_f: Option<Vec<f64>>,
    #[arg(long)]
    repetitions: Option<usize>,
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Args, Debug)]
struct AuditArgs {
    /// multibit or laplace.
    mechanism: Option<String>,
    #[arg(long)]
    trials: Option<usize>,
    /// Budget of the multibit audit.
    #[arg(long = "eps")]
    audit_eps: Option<f64>,
    #[arg(long)]
    w_min: Option<f64>,
    #[arg(long)]
    w_max: Option<f64>,
    /// Laplace scale λ of the laplace audit.
    #[arg(long)]
    scale: Option<f64>,
}

fn flag(set: bool) -> Option<bool> {
    set.then_some(true)
}

fn off(set: bool) -> Option<bool> {
    set.then_some(false)
}

impl DataArgs {
    fn apply(self, c: &mut Config) {
        c.mnist_dir = self.mnist_dir;
        c.train_samples = self.train_samples;
        c.test_samples = self.test_samples;
        c.classes = self.classes;
        c.input_dim = self.input_dim;
        c.spread = self.spread;
        c.probe_size = self.probe_size;
    }
}

impl TrainArgs {
    fn apply(self, c: &mut Config) {
        c.partition = self.partition;
        c.personalized_label = self.personalized_label;
        c.layers = self.layers;
        c.activation = self.activation;
        c.bias = flag(self.bias);
        c.epochs = self.epochs;
        c.batch_size = self.batch_size;
        c.lr = self.lr;
    }
}

impl ModelArgs {
    fn apply(self, c: &mut Config) {
        c.model_a = self.model_a;
        c.model_b = self.model_b;
        c.model = self.model;
    }
}

impl PrivacyArgs {
    fn apply(self, c: &mut Config) {
        c.eps_a = self.eps_a;
        c.eps_w = self.eps_w;
        c.eps_f = self.eps_f;
        c.test_mode = flag(self.test_mode);
        c.insecure = flag(self.insecure);
    }
}

impl FusionArgs {
    fn apply(self, c: &mut Config) {
        c.rule = self.rule;
        c.alphas = self.alphas;
        c.pfa = off(self.no_pfa);
        c.sfu = off(self.no_sfu);
        c.sfu_rescale = off(self.no_sfu_rescale);
        c.outer_rounds = self.outer_rounds;
        c.sinkhorn_iters = self.sinkhorn_iters;
    }
}

impl SessionArgs {
    fn apply(self, c: &mut Config) {
        c.loopback = flag(self.loopback);
        c.listen = self.listen;
        c.connect = self.connect;
        c.role = self.role;
        c.alpha = self.alpha;
        c.alpha_sweep = flag(self.alpha_sweep);
        c.ceiling = self.ceiling;
        c.session_id = self.session_id;
    }
}

impl GridArgs {
    fn apply(self, c: &mut Config) {
        c.grid_a = self.grid_a;
        c.grid_w = self.grid_w;
        c.grid_f = self.grid_f;
        c.repetitions = self.repetitions;
        c.threads = self.threads;
    }
}

impl AuditArgs {
    fn apply(self, c: &mut Config) {
        c.mechanism = self.mechanism;
        c.trials = self.trials;
        c.audit_eps = self.audit_eps;
        c.w_min = self.w_min;
        c.w_max = self.w_max;
        c.scale = self.scale;
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut flags = Config {
        seed: cli.seed,
        out: cli.out,
        ..Config::default()
    };
    let name = match cli.command {
        Command::Train { data, train } => {
            data.apply(&mut flags);
            train.apply(&mut flags);
            "train"
        }
        Command::Fuse {
            data,
            models,
            privacy,
            fusion,
        } => {
            data.apply(&mut flags);
            models.apply(&mut flags);
            privacy.apply(&mut flags);
            fusion.apply(&mut flags);
            "fuse"
        }
        Command::Protocol {
            data,
            models,
            privacy,
            fusion,
            session,
        } => {
            data.apply(&mut flags);
            models.apply(&mut flags);
            privacy.apply(&mut flags);
            fusion.apply(&mut flags);
            session.apply(&mut flags);
            "protocol"
        }
        Command::Sweep {
            data,
            models,
            fusion,
            grid,
        } => {
            data.apply(&mut flags);
            models.apply(&mut flags);
            fusion.apply(&mut flags);
            grid.apply(&mut flags);
            "sweep"
        }
        Command::Audit(args) => {
            args.apply(&mut flags);
            "audit"
        }
    };
    let file = match &cli.config {
        Some(path) => Config::load(path)?,
        None => Config::default(),
    };
    let cfg = flags.or(file).or(Config::defaults());
    let out = config::get_ref(&cfg.out, "out")?.clone();
    std::fs::create_dir_all(&out).map_err(|e| CliError::other(format!("{}: {e}", out.display())))?;
    match name {
        "train" => commands::train(&cfg, &out),
        "fuse" => commands::fuse(&cfg, &out),
        "protocol" => commands::protocol(&cfg, &out),
        "sweep" => commands::sweep(&cfg, &out),
        _ => commands::audit(&cfg, &out),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_USAGE } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code)
        }
    }
}
