use std::net::{TcpListener, TcpStream};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use fusekit::data::{evaluate, load_idx, partition, synth_blobs};
use fusekit::fusion::{vanilla_average_baseline, FusionConfig, FusionRule, PfaOptions};
use fusekit::ldp::{laplace_perturb, mean_std, multibit_encode, multibit_plus_probability, NoiseSpec, PerturbConfig, Privacy};
use fusekit::nn::{load_model, train_sgd};
use fusekit::pipeline::{run_offline, PipelineConfig};
use fusekit::protocol::{run_loopback, run_session, AlphaChoice, PartyConfig, Role, SessionFailure, SessionOutcome, StreamTransport};
use fusekit::rng::derive_seed;
use fusekit::{
    Activation, LabeledDataset, Matrix, MetricReport, MlpModel, MlpSpec, PartitionPlan, PrivacyBudget, SolverConfig,
    TrainConfig,
};

use crate::config::{get, get_ref, Config};
use crate::manifest::ManifestBuilder;
use crate::CliError;

struct Data {
    train: LabeledDataset,
    test: LabeledDataset,
}

fn load_data(cfg: &Config, m: &mut ManifestBuilder) -> Result<Data, CliError> {
    let seed = m.seed("data", derive_seed(get(cfg.seed, "seed")?, "data"));
    let n_train = get(cfg.train_samples, "train_samples")?;
    let n_test = get(cfg.test_samples, "test_samples")?;
    if let Some(dir) = &cfg.mnist_dir {
        let files = [
            "train-images-idx3-ubyte",
            "train-labels-idx1-ubyte",
            "t10k-images-idx3-ubyte",
            "t10k-labels-idx1-ubyte",
        ]
        .map(|f| dir.join(f));
        for f in &files {
            m.input(f)?;
        }
        let train = load_idx(&files[0], &files[1])?.sample(n_train, seed);
        let test = load_idx(&files[2], &files[3])?.sample(n_test, derive_seed(seed, "test"));
        return Ok(Data { train, test });
    }
    let classes = get(cfg.classes, "classes")?;
    if classes == 0 || n_train < classes || n_test < classes {
        return Err(CliError::usage("need at least one training and one test sample per class"));
    }
    let (tr, te) = (n_train / classes, n_test / classes);
    let all = synth_blobs(classes, tr + te, get(cfg.input_dim, "input_dim")?, get(cfg.spread, "spread")?, seed)?;
    let per = tr + te;
    let train: Vec<usize> = (0..all.len()).filter(|i| i % per < tr).collect();
    let test: Vec<usize> = (0..all.len()).filter(|i| i % per >= tr).collect();
    Ok(Data {
        train: all.subset(&train),
        test: all.subset(&test),
    })
}

fn probe(cfg: &Config, data: &Data, m: &mut ManifestBuilder) -> Result<Matrix, CliError> {
    let seed = m.seed("probe", derive_seed(get(cfg.seed, "seed")?, "probe"));
    Ok(data.train.stratified_probe(get(cfg.probe_size, "probe_size")?, seed)?)
}

fn read_model(path: &Path, m: &mut ManifestBuilder) -> Result<MlpModel, CliError> {
    m.input(path)?;
    load_model(path).map_err(|e| CliError::other(format!("{}: {e}", path.display())))
}

fn metrics_csv(rows: &[(&str, MetricReport)]) -> String {
    let mut out = format!("model,{}\n", MetricReport::csv_header());
    for (name, r) in rows {
        out.push_str(&format!("{name},{}\n", r.csv_row()));
    }
    out
}

pub fn train(cfg: &Config, out: &Path) -> Result<(), CliError> {
    let mut m = ManifestBuilder::new("train", cfg);
    let seed = get(cfg.seed, "seed")?;
    let epochs = get(cfg.epochs, "epochs")?;
    let batch_size = get(cfg.batch_size, "batch_size")?;
    let lr = get(cfg.lr, "lr")?;
    if epochs == 0 || batch_size == 0 || !(lr > 0.0 && lr.is_finite()) {
        return Err(CliError::usage("epochs, batch size and learning rate must be positive"));
    }
    let activation = match get_ref(&cfg.activation, "activation")?.as_str() {
        "relu" => Activation::Relu,
        "tanh" => Activation::Tanh,
        other => return Err(CliError::usage(format!("unknown activation '{other}'"))),
    };
    let plan = match get_ref(&cfg.partition, "partition")?.as_str() {
        "homogeneous" => PartitionPlan::homogeneous(),
        "heterogeneous" => PartitionPlan::heterogeneous(get(cfg.personalized_label, "personalized_label")?),
        other => return Err(CliError::usage(format!("unknown partition '{other}'"))),
    };
    let spec = MlpSpec::new(get_ref(&cfg.layers, "layers")?.clone(), activation, get(cfg.bias, "bias")?)
        .map_err(|e| CliError::usage(e.to_string()))?;
    let data = load_data(cfg, &mut m)?;
    if spec.input_dim() != data.train.input_dim() || spec.output_dim() != data.train.class_count {
        return Err(CliError::usage(format!(
            "layers {:?} do not fit data with {} inputs and {} classes",
            spec.layer_sizes,
            data.train.input_dim(),
            data.train.class_count
        )));
    }
    let (shard_a, shard_b) = partition(&data.train, &plan, m.seed("partition", derive_seed(seed, "partition")))?;
    let tc = |s: u64| TrainConfig {
        epochs,
        batch_size,
        learning_rate: lr,
        seed: s,
    };
    let a = train_sgd(&spec, &shard_a, &tc(m.seed("train-a", derive_seed(seed, "train-a"))))?;
    let b = train_sgd(&spec, &shard_b, &tc(m.seed("train-b", derive_seed(seed, "train-b"))))?;

    let mut shards = String::from("shard,label,count\n");
    for (name, shard) in [("a", &shard_a), ("b", &shard_b)] {
        for (label, count) in shard.class_counts().iter().enumerate() {
            shards.push_str(&format!("{name},{label},{count}\n"));
        }
    }
    let report = metrics_csv(&[("a", evaluate(&a, &data.test)?), ("b", evaluate(&b, &data.test)?)]);
    for (name, model) in [("model_a.json", &a), ("model_b.json", &b)] {
        let path = out.join(name);
        m.write(path, model.to_document())?;
    }
    m.write(out.join("shards.csv"), shards)?;
    m.write(out.join("train_report.csv"), &report)?;
    print!("{report}");
    m.finish(out)?;
    Ok(())
}

fn privacy(cfg: &Config) -> Result<Privacy, CliError> {
    if get(cfg.test_mode, "test_mode")? {
        if !get(cfg.insecure, "insecure")? {
            return Err(CliError::usage("--test-mode disables all privacy and requires --insecure"));
        }
        return Ok(Privacy::Disabled);
    }
    Ok(Privacy::Private(cfg.budget()?))
}

fn fusion_config(cfg: &Config) -> Result<FusionConfig, CliError> {
    let fc = FusionConfig {
        alphas: get_ref(&cfg.alphas, "alphas")?.clone(),
        rule: get_ref(&cfg.rule, "rule")?.parse::<FusionRule>()?,
        pfa_enabled: get(cfg.pfa, "pfa")?,
        pfa: PfaOptions {
            sfu: get(cfg.sfu, "sfu")?,
            sfu_rescale: get(cfg.sfu_rescale, "sfu_rescale")?,
        },
    };
    fc.validate()?;
    Ok(fc)
}

fn pipeline(cfg: &Config, privacy: Privacy) -> Result<PipelineConfig, CliError> {
    let solver = SolverConfig {
        outer_rounds: get(cfg.outer_rounds, "outer_rounds")?,
        sinkhorn_iters: get(cfg.sinkhorn_iters, "sinkhorn_iters")?,
        ..SolverConfig::default()
    };
    solver.validate()?;
    Ok(PipelineConfig {
        perturb: match privacy {
            Privacy::Private(b) => PerturbConfig::private(b),
            Privacy::Disabled => PerturbConfig::disabled(),
        },
        solver,
        fusion: fusion_config(cfg)?,
    })
}

pub fn fuse(cfg: &Config, out: &Path) -> Result<(), CliError> {
    let mut m = ManifestBuilder::new("fuse", cfg);
    let seed = get(cfg.seed, "seed")?;
    let pc = pipeline(cfg, privacy(cfg)?)?;
    let a = read_model(get_ref(&cfg.model_a, "model_a")?, &mut m)?;
    let b = read_model(get_ref(&cfg.model_b, "model_b")?, &mut m)?;
    let data = load_data(cfg, &mut m)?;
    let probe = probe(cfg, &data, &mut m)?;
    let ni = NoiseSpec::new(m.seed("noise-initiator", derive_seed(seed, "noise-initiator")));
    let nr = NoiseSpec::new(m.seed("noise-responder", derive_seed(seed, "noise-responder")));
    let outcome = run_offline(&a, &b, &probe, &pc, &ni, &nr)?;
    let report = outcome.sweep(&data.test, &pc.fusion)?;
    let vanilla = vanilla_average_baseline(&a, &b, &pc.fusion.alphas, &data.test)?;
    let fused = outcome.fuse(report.best.alpha, &pc.fusion)?;

    m.write(out.join("report.csv"), report.to_csv())?;
    m.write(out.join("vanilla.csv"), vanilla.to_csv())?;
    m.write(out.join("matching.csv"), outcome.matching.diagnostics_csv())?;
    let path = out.join("fused.json");
    m.write(path, fused.to_document())?;
    println!(
        "best alpha {} acc {:.4} top3_avg {:.4} (vanilla best {:.4}); fused digest {}",
        report.best.alpha,
        report.best_acc(),
        report.top3_avg,
        vanilla.best_acc(),
        fused.digest()
    );
    m.finish(out)?;
    Ok(())
}

fn party(cfg: &Config, role: Role, privacy: Privacy, noise: u64, test: &LabeledDataset) -> Result<PartyConfig, CliError> {
    let mut p = PartyConfig::new(role, privacy, NoiseSpec::new(noise));
    p.pipeline = pipeline(cfg, privacy)?;
    p.insecure = get(cfg.insecure, "insecure")?;
    let ceiling = get_ref(&cfg.ceiling, "ceiling")?;
    if ceiling.len() != 3 {
        return Err(CliError::usage("--ceiling takes eps_a,eps_w,eps_f"));
    }
    p.ceiling = PrivacyBudget::new(ceiling[0], ceiling[1], ceiling[2]);
    if get(cfg.alpha_sweep, "alpha_sweep")? {
        p.alpha = AlphaChoice::Sweep;
        p.eval = Some(test.clone());
    } else {
        let alpha = get(cfg.alpha, "alpha")?;
        if !(0.0..=1.0).contains(&alpha) {
            return Err(CliError::usage(format!("alpha {alpha} outside [0,1]")));
        }
        p.alpha = AlphaChoice::Fixed(alpha);
    }
    if let Some(id) = &cfg.session_id {
        p.session_id = id.clone();
    }
    Ok(p)
}

fn role_name(role: Role) -> &'static str {
    match role {
        Role::Initiator => "initiator",
        Role::Responder => "responder",
    }
}

/// Writes what one side produced and turns a failure into the protocol exit code.
fn record_side(
    m: &mut ManifestBuilder,
    out: &Path,
    role: Role,
    result: &Result<SessionOutcome, SessionFailure>,
) -> Result<Option<String>, CliError> {
    let name = role_name(role);
    let transcript = match result {
        Ok(o) => &o.transcript,
        Err(f) => &f.transcript,
    };
    m.write(out.join(format!("transcript_{name}.jsonl")), transcript.to_jsonl())?;
    match result {
        Ok(o) => {
            let path = out.join(format!("fused_{name}.json"));
            m.write(path, o.fused.to_document())?;
            println!("{name}: fused at alpha {} digest {} spent eps {}", o.alpha, o.fused_digest, o.spent_eps);
            Ok(None)
        }
        Err(f) => Ok(Some(format!("{name} failed in phase {:?}: {}", f.phase, f.error))),
    }
}

pub fn protocol(cfg: &Config, out: &Path) -> Result<(), CliError> {
    let mut m = ManifestBuilder::new("protocol", cfg);
    let seed = get(cfg.seed, "seed")?;
    let privacy = privacy(cfg)?;
    let data = load_data(cfg, &mut m)?;
    let probe = probe(cfg, &data, &mut m)?;
    let ni = m.seed("noise-initiator", derive_seed(seed, "noise-initiator"));
    let nr = m.seed("noise-responder", derive_seed(seed, "noise-responder"));
    let mut failures = Vec::new();

    if get(cfg.loopback, "loopback")? {
        let a = read_model(get_ref(&cfg.model_a, "model_a")?, &mut m)?;
        let b = read_model(get_ref(&cfg.model_b, "model_b")?, &mut m)?;
        let pi = party(cfg, Role::Initiator, privacy, ni, &data.test)?;
        let pr = party(cfg, Role::Responder, privacy, nr, &data.test)?;
        let (ri, rr) = run_loopback(&pi, &a, &pr, &b, &probe);
        failures.extend(record_side(&mut m, out, Role::Initiator, &ri)?);
        failures.extend(record_side(&mut m, out, Role::Responder, &rr)?);
        if let (Ok(i), Ok(r)) = (&ri, &rr) {
            println!("digests match: {}", i.fused_digest == r.fused_digest);
        }
    } else {
        let model = read_model(get_ref(&cfg.model, "model")?, &mut m)?;
        let (stream, default_role) = match (&cfg.listen, &cfg.connect) {
            (Some(addr), None) => {
                let listener = TcpListener::bind(addr).map_err(|e| CliError::protocol(format!("bind {addr}: {e}")))?;
                eprintln!("listening on {}", listener.local_addr().map_err(|e| CliError::protocol(e.to_string()))?);
                let (s, _) = listener.accept().map_err(|e| CliError::protocol(format!("accept: {e}")))?;
                (s, Role::Responder)
            }
            (None, Some(addr)) => (
                TcpStream::connect(addr).map_err(|e| CliError::protocol(format!("connect {addr}: {e}")))?,
                Role::Initiator,
            ),
            _ => return Err(CliError::usage("protocol needs exactly one of --loopback, --listen or --connect")),
        };
        let role = match cfg.role.as_deref() {
            None => default_role,
            Some("initiator") => Role::Initiator,
            Some("responder") => Role::Responder,
            Some(other) => return Err(CliError::usage(format!("unknown role '{other}'"))),
        };
        let noise = if role == Role::Initiator { ni } else { nr };
        let p = party(cfg, role, privacy, noise, &data.test)?;
        let mut transport = StreamTransport::new(stream).insecure(p.insecure);
        let result = run_session(&p, &model, &probe, &mut transport);
        failures.extend(record_side(&mut m, out, role, &result)?);
    }
    m.finish(out)?;
    if failures.is_empty() {
        Ok(())
    } else {
        Err(CliError::protocol(failures.join("; ")))
    }
}

fn nonempty(v: &Option<Vec<f64>>, name: &str) -> Result<Vec<f64>, CliError> {
    let v = get_ref(v, name)?;
    if v.is_empty() {
        return Err(CliError::usage(format!("--{} is empty", name.replace('_', "-"))));
    }
    Ok(v.clone())
}

pub fn sweep(cfg: &Config, out: &Path) -> Result<(), CliError> {
    let mut m = ManifestBuilder::new("sweep", cfg);
    let seed = get(cfg.seed, "seed")?;
    let (ga, gw, gf) = (nonempty(&cfg.grid_a, "grid_a")?, nonempty(&cfg.grid_w, "grid_w")?, nonempty(&cfg.grid_f, "grid_f")?);
    let reps = get(cfg.repetitions, "repetitions")?;
    if reps == 0 {
        return Err(CliError::usage("--repetitions must be at least 1"));
    }
    let a = read_model(get_ref(&cfg.model_a, "model_a")?, &mut m)?;
    let b = read_model(get_ref(&cfg.model_b, "model_b")?, &mut m)?;
    let data = load_data(cfg, &mut m)?;
    let probe = probe(cfg, &data, &mut m)?;

    let mut jobs = Vec::new();
    for &ea in &ga {
        for &ew in &gw {
            for &ef in &gf {
                let budget = PrivacyBudget::new(ea, ew, ef);
                budget.validate().map_err(|e| CliError::usage(e.to_string()))?;
                for rep in 0..reps {
                    jobs.push((budget, rep, derive_seed(seed, &format!("sweep/{rep}"))));
                }
            }
        }
    }
    let configs: Vec<PipelineConfig> =
        jobs.iter().map(|(b, _, _)| pipeline(cfg, Privacy::Private(*b))).collect::<Result<_, _>>()?;

    let rows: Mutex<Vec<Option<Result<String, CliError>>>> = Mutex::new((0..jobs.len()).map(|_| None).collect());
    let next = AtomicUsize::new(0);
    let threads = get(cfg.threads, "threads")?.clamp(1, jobs.len());
    std::thread::scope(|s| {
        for _ in 0..threads {
            s.spawn(|| loop {
                let k = next.fetch_add(1, Ordering::Relaxed);
                if k >= jobs.len() {
                    break;
                }
                let (budget, rep, rs) = jobs[k];
                let pc = &configs[k];
                let row = (|| -> Result<String, CliError> {
                    let ni = NoiseSpec::new(derive_seed(rs, "initiator"));
                    let nr = NoiseSpec::new(derive_seed(rs, "responder"));
                    let report = run_offline(&a, &b, &probe, pc, &ni, &nr)?.sweep(&data.test, &pc.fusion)?;
                    Ok(format!(
                        "{},{},{},{rep},{rs},{},{},{}\n",
                        budget.eps_a,
                        budget.eps_w,
                        budget.eps_f,
                        report.best.alpha,
                        report.best_acc(),
                        report.top3_avg
                    ))
                })();
                rows.lock().expect("row lock")[k] = Some(row);
            });
        }
    });
    let mut csv = String::from("eps_a,eps_w,eps_f,rep,seed,best_alpha,best_acc,top3_avg\n");
    for row in rows.into_inner().expect("row lock") {
        csv.push_str(&row.expect("every job ran")?);
    }
    m.write(out.join("sweep.csv"), &csv)?;
    println!("{} rows written to {}", jobs.len(), out.join("sweep.csv").display());
    m.finish(out)?;
    Ok(())
}

pub fn audit(cfg: &Config, out: &Path) -> Result<(), CliError> {
    let mut m = ManifestBuilder::new("audit", cfg);
    let seed = get(cfg.seed, "seed")?;
    let trials = get(cfg.trials, "trials")?;
    if trials == 0 {
        return Err(CliError::usage("--trials must be at least 1"));
    }
    let mut rows: Vec<(&str, f64, f64)> = Vec::new();
    match get_ref(&cfg.mechanism, "mechanism")?.as_str() {
        "multibit" => {
            let eps = get(cfg.audit_eps, "eps")?;
            let (lo, hi) = (get(cfg.w_min, "w_min")?, get(cfg.w_max, "w_max")?);
            if !(lo < hi) {
                return Err(CliError::usage("--w-min must be below --w-max"));
            }
            let mut freq = Vec::new();
            for (name, w) in [("p_plus_at_w_min", lo), ("p_plus_at_w_max", hi)] {
                let noise = NoiseSpec::new(m.seed(name, derive_seed(seed, name)));
                let enc = multibit_encode(&Matrix::filled(trials, 1, w), eps, 1, lo, hi, &noise, 0)
                    .map_err(|e| CliError::usage(e.to_string()))?;
                let p = enc.symbols.iter().filter(|&&s| s == 1).count() as f64 / trials as f64;
                rows.push((name, multibit_plus_probability(w, eps, 1, lo, hi), p));
                freq.push(p);
            }
            let ratio = (freq[1] / freq[0]).ln().max(((1.0 - freq[0]) / (1.0 - freq[1])).ln());
            rows.push(("max_log_ratio", eps, ratio));
        }
        "laplace" => {
            let scale = get(cfg.scale, "scale")?;
            if !(scale > 0.0 && scale.is_finite()) {
                return Err(CliError::usage("--scale must be positive"));
            }
            // neighbouring inputs 0 and 1 at sensitivity 1, so eps = 1/λ
            let eps = 1.0 / scale;
            let draw = |x: f64, name: &str, m: &mut ManifestBuilder| -> Result<Vec<f64>, CliError> {
                let noise = NoiseSpec::new(m.seed(name, derive_seed(seed, name)));
                Ok(laplace_perturb(&Matrix::filled(trials, 1, x), eps, 1.0, &noise, 0)?.as_slice().to_vec())
            };
            let at0 = draw(0.0, "laplace-at-0", &mut m)?;
            let at1 = draw(1.0, "laplace-at-1", &mut m)?;
            let (mean, sd) = mean_std(&at0);
            rows.push(("mean", 0.0, mean));
            rows.push(("variance", 2.0 * scale * scale, sd * sd));
            rows.push(("max_log_ratio", eps, histogram_log_ratio(&at0, &at1, scale)));
        }
        other => return Err(CliError::usage(format!("unknown mechanism '{other}' (multibit or laplace)"))),
    }
    let mut csv = String::from("quantity,closed_form,empirical\n");
    for (q, c, e) in &rows {
        csv.push_str(&format!("{q},{c},{e}\n"));
    }
    print!("{csv}");
    m.write(out.join("audit.csv"), csv)?;
    m.finish(out)?;
    Ok(())
}

/// Largest |log(p0/p1)| over histogram bins well populated in both samples.
fn histogram_log_ratio(a: &[f64], b: &[f64], scale: f64) -> f64 {
    let width = scale / 4.0;
    let (lo, bins) = (-4.0 * scale, 36usize);
    let hist = |xs: &[f64]| {
        let mut h = vec![0u64; bins];
        for &x in xs {
            let k = ((x - lo) / width).floor();
            if k >= 0.0 && (k as usize) < bins {
                h[k as usize] += 1;
            }
        }
        h
    };
    let (ha, hb) = (hist(a), hist(b));
    let min_count = (a.len() as u64 / 1000).max(1);
    ha.iter()
        .zip(&hb)
        .filter(|(&x, &y)| x >= min_count && y >= min_count)
        .map(|(&x, &y)| (x as f64 / y as f64).ln().abs())
        .fold(0.0, f64::max)
}
