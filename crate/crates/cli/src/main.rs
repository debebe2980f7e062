//! Command-line front end for the biophysical model, the macro-model fit and
//! the network training / fault / repair pipeline.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use astro_repair::astrocyte::{BioFaultSpec, BioSimConfig, DisableSpec};
use astro_repair::harness::{self, ExperimentConfig};
use astro_repair::hardware::DriftSpec;
use astro_repair::repair::{self, RepairRule, RepairTarget, RetrainOptions};
use astro_repair::snn::{self, DatasetKind, NetworkState, SnnConfig};
use astro_repair::{dataset, macro_model, Error, Result};
use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "astro-repair", version, about, args_override_self = true)]
struct Cli {
    /// `key = value` file supplying defaults for any flag of the subcommand.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate the two-neuron, one-astrocyte model and write its traces.
    BioSim(BioSimArgs),
    /// Fit the repair-ratio macro-model to biophysical runs.
    MacroFit(MacroFitArgs),
    /// Train a baseline network and save a checkpoint.
    Train(TrainArgs),
    /// Report the accuracy of a checkpoint.
    Eval(EvalArgs),
    /// Apply stuck-at faults (and optional drift) to a checkpoint.
    Inject(InjectArgs),
    /// Retrain a faulted checkpoint and report its accuracy trace.
    Repair(RepairArgs),
    /// Run the fault-level × run grid and write the summary tables.
    Experiment(GridArgs),
    /// Sweep the repair time constant of the local rule.
    Ablation(GridArgs),
}

#[derive(Args, Debug, Clone)]
struct DriftArgs {
    /// Apply conductance drift with this normalized elapsed time (> 1).
    #[arg(long, visible_alias = "drift-tnorm", value_name = "T_NORM")]
    drift: Option<f64>,
    #[arg(long, default_value_t = DriftSpec::default().mu_v)]
    drift_mu: f64,
    #[arg(long, default_value_t = DriftSpec::default().sigma_v)]
    drift_sigma: f64,
}

impl DriftArgs {
    fn spec(&self) -> Option<DriftSpec> {
        self.drift.map(|t_norm| DriftSpec {
            t_norm,
            mu_v: self.drift_mu,
            sigma_v: self.drift_sigma,
        })
    }
}

#[derive(Args, Debug)]
struct BioSimArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Total simulated time (s).
    #[arg(long, visible_alias = "duration-s", default_value_t = 400.0)]
    duration: f64,
    /// Fault time (s).
    #[arg(long, visible_alias = "t-fault-s", default_value_t = 200.0)]
    t_fault: f64,
    /// Step (ms).
    #[arg(long, visible_alias = "dt-ms", default_value_t = 1.0)]
    dt: f64,
    /// Length of the before-fault and after-stabilization windows (s).
    #[arg(long, default_value_t = 50.0)]
    window: f64,
    #[arg(long, default_value_t = 10)]
    synapses: usize,
    /// Input rate per synapse (Hz).
    #[arg(long, default_value_t = 10.0)]
    rate: f64,
    /// Fraction of N2's synapses to disable.
    #[arg(long, conflicts_with_all = ["disable_count", "disable"])]
    disable_fraction: Option<f64>,
    /// Number of N2's synapses to disable, chosen at random.
    #[arg(long, conflicts_with = "disable")]
    disable_count: Option<usize>,
    /// Comma-separated indices of N2's synapses to disable.
    #[arg(long, value_delimiter = ',')]
    disable: Option<Vec<usize>>,
    #[command(flatten)]
    drift: DriftArgs,
    /// Keep every n-th step in the trace files.
    #[arg(long, default_value_t = 10)]
    every: usize,
}

#[derive(Args, Debug)]
struct MacroFitArgs {
    /// Directories written by `bio-sim`.
    #[arg(long, num_args = 1.., conflicts_with = "runs")]
    traces: Vec<PathBuf>,
    /// Simulate this many randomized runs instead of reading traces.
    #[arg(long)]
    runs: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Upper bound of the disabled-synapse count drawn per run.
    #[arg(long, default_value_t = 7)]
    max_disabled: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug, Clone)]
struct DataArgs {
    #[arg(long, default_value = "mnist")]
    dataset: DatasetKind,
    /// Directory with the IDX files (default `$ASTRO_DATA_DIR/<dataset>`).
    #[arg(long)]
    data_dir: Option<PathBuf>,
}

impl DataArgs {
    fn dir(&self) -> PathBuf {
        self.data_dir.clone().unwrap_or_else(|| harness::default_data_dir(self.dataset))
    }
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, default_value_t = 100)]
    neurons: usize,
    #[arg(long, default_value_t = 10_000)]
    train_samples: usize,
    #[arg(long, default_value_t = 1)]
    epochs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Checkpoint to write.
    #[arg(long, visible_alias = "checkpoint")]
    out: PathBuf,
    /// 400 neurons on the full training file.
    #[arg(long)]
    full_scale: bool,
}

#[derive(Args, Debug, Clone)]
struct EvalSetArgs {
    /// Training samples used to assign neuron labels.
    #[arg(long, default_value_t = 2_000)]
    label_samples: usize,
    #[arg(long, default_value_t = 2_000)]
    test_samples: usize,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Directory with the IDX files (default from the checkpoint's dataset).
    #[arg(long)]
    data_dir: Option<PathBuf>,
    #[command(flatten)]
    sets: EvalSetArgs,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct InjectArgs {
    #[arg(long, visible_alias = "in")]
    checkpoint: PathBuf,
    /// Probability that a device is stuck at zero.
    #[arg(long)]
    p_fault: f64,
    #[command(flatten)]
    drift: DriftArgs,
    /// Skip the post-fault weight normalization.
    #[arg(long)]
    no_normalize: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct RepairArgs {
    /// Faulted checkpoint (must hold the archived pre-fault weights).
    #[arg(long, visible_alias = "in")]
    checkpoint: PathBuf,
    #[arg(long, default_value = "astdp-local")]
    rule: RepairRule,
    #[arg(long, default_value_t = 2)]
    epochs: usize,
    #[arg(long, default_value_t = 1_000)]
    eval_every: usize,
    /// Repair time constant (default from the checkpoint's config).
    #[arg(long)]
    tau: Option<f64>,
    /// `baseline` or `post-fault` per-synapse targets.
    #[arg(long, default_value = "baseline")]
    target: String,
    #[arg(long)]
    data_dir: Option<PathBuf>,
    #[arg(long, default_value_t = 10_000)]
    train_samples: usize,
    #[command(flatten)]
    sets: EvalSetArgs,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// CSV accuracy trace.
    #[arg(long)]
    report: PathBuf,
    /// Checkpoint of the repaired network.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Grid settings; any omitted value keeps the experiment default.
#[derive(Args, Debug)]
struct GridArgs {
    #[arg(long)]
    dataset: Option<String>,
    #[arg(long)]
    data_dir: Option<String>,
    #[arg(long)]
    neurons: Option<String>,
    #[arg(long)]
    train_samples: Option<String>,
    #[arg(long)]
    label_samples: Option<String>,
    #[arg(long)]
    test_samples: Option<String>,
    #[arg(long)]
    epochs: Option<String>,
    #[arg(long)]
    retrain_epochs: Option<String>,
    #[arg(long)]
    eval_every: Option<String>,
    /// Comma-separated fault probabilities.
    #[arg(long)]
    p_fault: Option<String>,
    #[arg(long)]
    ablation_p_fault: Option<String>,
    /// `true` or `false`.
    #[arg(long)]
    drift: Option<String>,
    #[arg(long)]
    drift_tnorm: Option<String>,
    #[arg(long)]
    drift_mu: Option<String>,
    #[arg(long)]
    drift_sigma: Option<String>,
    /// Comma-separated rules (`stdp`, `astdp-local`).
    #[arg(long)]
    rules: Option<String>,
    #[arg(long)]
    tau: Option<String>,
    /// Comma-separated repair time constants for the ablation.
    #[arg(long)]
    taus: Option<String>,
    #[arg(long)]
    runs: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    #[arg(long)]
    out: Option<String>,
    /// Directory for cached baseline checkpoints.
    #[arg(long)]
    cache_dir: Option<String>,
    #[arg(long)]
    target: Option<String>,
    #[arg(long)]
    full_scale: bool,
}

impl GridArgs {
    fn config(&self) -> Result<ExperimentConfig> {
        let pairs = [
            ("dataset", &self.dataset),
            ("data-dir", &self.data_dir),
            ("neurons", &self.neurons),
            ("train-samples", &self.train_samples),
            ("label-samples", &self.label_samples),
            ("test-samples", &self.test_samples),
            ("epochs", &self.epochs),
            ("retrain-epochs", &self.retrain_epochs),
            ("eval-every", &self.eval_every),
            ("p-fault", &self.p_fault),
            ("ablation-p-fault", &self.ablation_p_fault),
            ("drift", &self.drift),
            ("drift-tnorm", &self.drift_tnorm),
            ("drift-mu", &self.drift_mu),
            ("drift-sigma", &self.drift_sigma),
            ("rules", &self.rules),
            ("tau", &self.tau),
            ("taus", &self.taus),
            ("runs", &self.runs),
            ("seed", &self.seed),
            ("out", &self.out),
            ("cache-dir", &self.cache_dir),
            ("target", &self.target),
        ];
        let mut kv: BTreeMap<String, String> = pairs
            .into_iter()
            .filter_map(|(k, v)| v.clone().map(|v| (k.to_string(), v)))
            .collect();
        if self.full_scale {
            kv.insert("full-scale".into(), "true".into());
        }
        ExperimentConfig::default().apply_kv(&kv)
    }
}

/// Insert the settings of `--config FILE` right after the subcommand name so
/// that flags given on the command line override them.
fn expand_config(args: Vec<OsString>) -> Result<Vec<OsString>> {
    let mut rest = Vec::with_capacity(args.len());
    let mut file = None;
    let mut it = args.into_iter();
    while let Some(a) = it.next() {
        let s = a.to_string_lossy().into_owned();
        if s == "--config" {
            let p = it
                .next()
                .ok_or_else(|| Error::Config("--config needs a file".into()))?;
            file = Some(PathBuf::from(p));
        } else if let Some(p) = s.strip_prefix("--config=") {
            file = Some(PathBuf::from(p));
        } else {
            rest.push(a);
        }
    }
    let Some(file) = file else { return Ok(rest) };
    let kv = harness::load_kv_file(&file)?;
    let Some(sub) = rest.iter().skip(1).position(|a| !a.to_string_lossy().starts_with('-')) else {
        return Ok(rest);
    };
    let mut injected = Vec::new();
    for (k, v) in kv {
        match v.to_ascii_lowercase().as_str() {
            "true" | "yes" | "on" if !is_valued_key(&k) => injected.push(OsString::from(format!("--{k}"))),
            "false" | "no" | "off" if !is_valued_key(&k) => {}
            _ => {
                injected.push(OsString::from(format!("--{k}")));
                injected.push(OsString::from(v));
            }
        }
    }
    let at = sub + 2;
    rest.splice(at..at, injected);
    Ok(rest)
}

/// Keys whose boolean values are passed through as strings.
fn is_valued_key(k: &str) -> bool {
    k == "drift"
}

fn run_bio_sim(a: &BioSimArgs) -> Result<()> {
    let disable = match (&a.disable_fraction, &a.disable_count, &a.disable) {
        (Some(f), _, _) => DisableSpec::Fraction(*f),
        (_, Some(c), _) => DisableSpec::Count(*c),
        (_, _, Some(ix)) => DisableSpec::Indices(ix.clone()),
        _ => DisableSpec::None,
    };
    if let Some(d) = a.drift.spec() {
        d.validate()?;
    }
    let cfg = BioSimConfig {
        duration_s: a.duration,
        t_fault_s: a.t_fault,
        dt_ms: a.dt,
        window_s: a.window,
        n_synapses: a.synapses,
        input_rate: a.rate,
        seed: a.seed,
        fault: BioFaultSpec {
            disable,
            drift: a.drift.spec(),
        },
        ..BioSimConfig::default()
    };
    let s = harness::write_bio_run(&cfg, &a.out, a.every)?;
    println!(
        "z={:.4} q_n1={:.4} q_n2={:.4} rate_bf=[{:.2}, {:.2}] Hz rate_as=[{:.2}, {:.2}] Hz ca_events={}",
        s.z, s.q_n1, s.q_n2, s.rate_bf[0], s.rate_bf[1], s.rate_as[0], s.rate_as[1], s.ca_events
    );
    Ok(())
}

fn run_macro_fit(a: &MacroFitArgs) -> Result<()> {
    let measurements = match a.runs {
        Some(n) => macro_model::qz_sweep(&BioSimConfig::default(), n, a.seed, a.max_disabled)?,
        None if a.traces.is_empty() => return Err(Error::Config("give --traces or --runs".into())),
        None => a
            .traces
            .iter()
            .map(|d| harness::read_bio_run(d))
            .collect::<Result<Vec<_>>>()?,
    };
    let r = harness::fit_and_write(&measurements, &a.out)?;
    println!(
        "runs={} a={:.4} b={:.4} rms={:.4} spearman={:.4}",
        r.n_runs, r.fit.a, r.fit.b, r.fit.rms, r.spearman_qz
    );
    Ok(())
}

fn load_sets(dir: &Path, sets: &EvalSetArgs, train_samples: usize) -> Result<harness::DataSplits> {
    let train_full = dataset::load_split(dir, true)?;
    let test_full = dataset::load_split(dir, false)?;
    let train = train_full.slice(0, train_samples.max(sets.label_samples), dataset::Split::Train);
    Ok(harness::DataSplits {
        label: train.slice(0, sets.label_samples, dataset::Split::Validation),
        train: train.slice(0, train_samples, dataset::Split::Train),
        test: test_full.slice(0, sets.test_samples, dataset::Split::Test),
    })
}

fn run_train(a: &TrainArgs) -> Result<()> {
    let (neurons, samples) = if a.full_scale { (400, 60_000) } else { (a.neurons, a.train_samples) };
    let data = dataset::load_split(&a.data.dir(), true)?.take(samples);
    let mut state = NetworkState::new(SnnConfig::for_dataset(a.data.dataset, neurons), a.seed)?;
    snn::train(&mut state, &data, a.epochs, a.seed)?;
    snn::save_checkpoint(&state, &a.out)?;
    println!("trained {} samples, saved {}", state.samples_trained, a.out.display());
    Ok(())
}

fn run_eval(a: &EvalArgs) -> Result<()> {
    let state = snn::load_checkpoint(&a.checkpoint)?;
    let dir = a.data_dir.clone().unwrap_or_else(|| harness::default_data_dir(state.config.dataset));
    let sets = load_sets(&dir, &a.sets, a.sets.label_samples)?;
    let e = snn::evaluate(&state, &sets.label, &sets.test, a.seed)?;
    println!("accuracy={:.2}% test_samples={}", e.accuracy, sets.test.len());
    Ok(())
}

fn run_inject(a: &InjectArgs) -> Result<()> {
    let mut state = snn::load_checkpoint(&a.checkpoint)?;
    repair::inject_faults(&mut state, a.p_fault, a.drift.spec().as_ref(), a.seed)?;
    if !a.no_normalize {
        repair::normalize_after_fault(&mut state);
    }
    snn::save_checkpoint(&state, &a.out)?;
    println!(
        "faulty fraction={:.4}, saved {}",
        state.fault_mask.fraction(),
        a.out.display()
    );
    Ok(())
}

fn run_repair(a: &RepairArgs) -> Result<()> {
    let mut state = snn::load_checkpoint(&a.checkpoint)?;
    let baseline = state
        .baseline
        .clone()
        .ok_or_else(|| Error::Config("checkpoint has no archived pre-fault weights; run inject first".into()))?;
    if let Some(t) = a.tau {
        state.config.repair_tau = t;
    }
    let target = match a.target.as_str() {
        "baseline" => RepairTarget::Baseline,
        "post-fault" => RepairTarget::PostFault,
        other => return Err(Error::Config(format!("unknown target '{other}' (baseline|post-fault)"))),
    };
    let ctx = repair::snapshot_baseline(&baseline, state.config.repair_tau)?;
    let dir = a.data_dir.clone().unwrap_or_else(|| harness::default_data_dir(state.config.dataset));
    let sets = load_sets(&dir, &a.sets, a.train_samples)?;
    let opts = RetrainOptions {
        rule: a.rule,
        epochs: a.epochs,
        eval_every: a.eval_every,
        seed: a.seed,
        target,
    };
    let report = repair::retrain(&mut state, &ctx, &sets.train, &sets.label, &sets.test, &opts)?;
    report.save(&a.report)?;
    if let Some(out) = &a.out {
        snn::save_checkpoint(&state, out)?;
    }
    println!(
        "rule={} best_acc={:.2}% steps_to_best={} seed={}",
        report.rule, report.best_acc, report.steps_to_best, report.seed
    );
    Ok(())
}

fn run_experiment(a: &GridArgs) -> Result<()> {
    let cfg = a.config()?;
    let r = harness::run_pipeline(&cfg)?;
    for c in &r.cells {
        let reps: Vec<String> = c
            .reports
            .iter()
            .map(|r| format!("{}={:.2}%@{}", r.rule, r.best_acc, r.steps_to_best))
            .collect();
        println!(
            "p={} run={} seed={} baseline={:.2}% norm={:.2}% {}",
            c.p_fault,
            c.run,
            c.seed,
            c.acc_baseline,
            c.acc_norm,
            reps.join(" ")
        );
    }
    println!("wrote {}", cfg.out_dir.join("table1.csv").display());
    Ok(())
}

fn run_ablation(a: &GridArgs) -> Result<()> {
    let cfg = a.config()?;
    for r in harness::run_tau_ablation(&cfg)? {
        println!(
            "tau={} acc={:.2}±{:.2}% steps={:.0}±{:.0}",
            r.tau, r.acc_mean, r.acc_std, r.steps_mean, r.steps_std
        );
    }
    println!("wrote {}", cfg.out_dir.join("ablation.csv").display());
    Ok(())
}

fn dispatch(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::BioSim(a) => run_bio_sim(a),
        Command::MacroFit(a) => run_macro_fit(a),
        Command::Train(a) => run_train(a),
        Command::Eval(a) => run_eval(a),
        Command::Inject(a) => run_inject(a),
        Command::Repair(a) => run_repair(a),
        Command::Experiment(a) => run_experiment(a),
        Command::Ablation(a) => run_ablation(a),
    }
}

fn main() -> ExitCode {
    let args = match expand_config(std::env::args_os().collect()) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
