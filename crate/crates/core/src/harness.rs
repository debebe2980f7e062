//! End-to-end experiments: baseline training (cached), fault injection,
//! normalization, retraining with each rule, and the CSV / PGM reports.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::astrocyte::{self, run_two_neuron_experiment, BioSimConfig};
use crate::dataset::{self, Dataset, Split};
use crate::error::{Error, Result};
use crate::hardware::DriftSpec;
use crate::macro_model::{self, QzFit, RepairMeasurement};
use crate::matrix::Matrix;
use crate::repair::{self, RepairReport, RepairRule, RepairTarget, RetrainOptions};
use crate::seed;
use crate::snn::{self, DatasetKind, NetworkState, SnnConfig};

/// Parse `key = value` lines; `#` starts a comment. Keys are normalized to
/// lowercase with `_` replaced by `-`.
pub fn parse_kv(text: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected 'key = value', got '{raw}'", n + 1)))?;
        let key = normalize_key(k);
        if key.is_empty() {
            return Err(Error::Config(format!("line {}: empty key", n + 1)));
        }
        map.insert(key, v.trim().to_string());
    }
    Ok(map)
}

pub fn normalize_key(k: &str) -> String {
    k.trim().to_ascii_lowercase().replace('_', "-")
}

pub fn load_kv_file(path: &Path) -> Result<BTreeMap<String, String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_kv(&text)
}

fn parse<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.trim()
        .parse()
        .map_err(|_| Error::Config(format!("invalid value '{v}' for '{key}'")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v.trim().to_ascii_lowercase().as_str() {
        "1" | "true" | "yes" | "on" => Ok(true),
        "0" | "false" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!("invalid boolean '{v}' for '{key}'"))),
    }
}

fn parse_list<T: std::str::FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',').filter(|s| !s.trim().is_empty()).map(|s| parse(key, s)).collect()
}

/// Environment variable naming the root that holds `mnist/` and `fmnist/`.
pub const DATA_DIR_ENV: &str = "ASTRO_DATA_DIR";

/// `$ASTRO_DATA_DIR/<dataset>`, or `data/<dataset>` when the variable is unset.
pub fn default_data_dir(kind: DatasetKind) -> PathBuf {
    let root = std::env::var_os(DATA_DIR_ENV).map_or_else(|| PathBuf::from("data"), PathBuf::from);
    root.join(kind.to_string())
}

/// Experiment grid and scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub dataset: DatasetKind,
    /// Directory holding the IDX files; `None` uses [`default_data_dir`].
    pub data_dir: Option<PathBuf>,
    pub n_neuron: usize,
    pub train_samples: usize,
    pub label_samples: usize,
    pub test_samples: usize,
    /// Baseline training epochs.
    pub epochs: usize,
    pub retrain_epochs: usize,
    pub eval_every: usize,
    pub p_faults: Vec<f64>,
    pub drift: Option<DriftSpec>,
    pub rules: Vec<RepairRule>,
    /// Repair time constant for the main grid; `None` uses the dataset preset.
    pub tau: Option<f64>,
    /// Repair time constants swept by the ablation.
    pub taus: Vec<f64>,
    /// Fault level used by the ablation.
    pub ablation_p_fault: f64,
    pub runs: usize,
    pub master_seed: u64,
    pub out_dir: PathBuf,
    pub cache_dir: Option<PathBuf>,
    pub target: RepairTarget,
    pub full_scale: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetKind::Mnist,
            data_dir: None,
            n_neuron: 100,
            train_samples: 10_000,
            label_samples: 2_000,
            test_samples: 2_000,
            epochs: 2,
            retrain_epochs: 2,
            eval_every: 1_000,
            p_faults: vec![0.5, 0.6, 0.7, 0.8, 0.9],
            drift: Some(DriftSpec::default()),
            rules: vec![RepairRule::Stdp, RepairRule::AstdpLocal],
            tau: None,
            taus: vec![0.005, 0.01, 0.02, 0.05],
            ablation_p_fault: 0.8,
            runs: 3,
            master_seed: 0,
            out_dir: PathBuf::from("results"),
            cache_dir: None,
            target: RepairTarget::Baseline,
            full_scale: false,
        }
    }
}

impl ExperimentConfig {
    /// Full-scale profile: 400 neurons, full training and test files, 5 runs.
    pub fn full_scale(mut self) -> Self {
        self.full_scale = true;
        self.n_neuron = 400;
        self.train_samples = 60_000;
        self.test_samples = 10_000;
        self.label_samples = 10_000;
        self.epochs = 1;
        self.retrain_epochs = 2;
        self.runs = 5;
        self
    }

    /// Apply `key = value` settings on top of `self`.
    pub fn apply_kv(mut self, kv: &BTreeMap<String, String>) -> Result<Self> {
        if let Some(v) = kv.get("full-scale") {
            if parse_bool("full-scale", v)? {
                self = self.full_scale();
            }
        }
        for (k, v) in kv {
            let k = k.as_str();
            match k {
                "full-scale" => {}
                "dataset" => self.dataset = v.parse()?,
                "data-dir" => self.data_dir = Some(PathBuf::from(v)),
                "neurons" => self.n_neuron = parse(k, v)?,
                "train-samples" => self.train_samples = parse(k, v)?,
                "label-samples" => self.label_samples = parse(k, v)?,
                "test-samples" => self.test_samples = parse(k, v)?,
                "epochs" => self.epochs = parse(k, v)?,
                "retrain-epochs" => self.retrain_epochs = parse(k, v)?,
                "eval-every" => self.eval_every = parse(k, v)?,
                "p-fault" => self.p_faults = parse_list(k, v)?,
                "ablation-p-fault" => self.ablation_p_fault = parse(k, v)?,
                "drift" => {
                    if !parse_bool(k, v)? {
                        self.drift = None;
                    } else if self.drift.is_none() {
                        self.drift = Some(DriftSpec::default());
                    }
                }
                "drift-tnorm" => self.drift.get_or_insert_with(DriftSpec::default).t_norm = parse(k, v)?,
                "drift-mu" => self.drift.get_or_insert_with(DriftSpec::default).mu_v = parse(k, v)?,
                "drift-sigma" => self.drift.get_or_insert_with(DriftSpec::default).sigma_v = parse(k, v)?,
                "rules" | "rule" => self.rules = parse_list(k, v)?,
                "tau" => self.tau = Some(parse(k, v)?),
                "taus" => self.taus = parse_list(k, v)?,
                "runs" => self.runs = parse(k, v)?,
                "seed" => self.master_seed = parse(k, v)?,
                "out" => self.out_dir = PathBuf::from(v),
                "cache-dir" => self.cache_dir = Some(PathBuf::from(v)),
                "target" => {
                    self.target = match v.as_str() {
                        "baseline" => RepairTarget::Baseline,
                        "post-fault" => RepairTarget::PostFault,
                        other => return Err(Error::Config(format!("unknown target '{other}'"))),
                    }
                }
                other => return Err(Error::Config(format!("unknown setting '{other}'"))),
            }
        }
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.runs == 0 {
            return Err(Error::Config("runs must be at least 1".into()));
        }
        if self.n_neuron == 0 || self.train_samples == 0 || self.test_samples == 0 || self.label_samples == 0 {
            return Err(Error::Config("neurons and sample counts must be positive".into()));
        }
        if self.eval_every == 0 {
            return Err(Error::Config("eval-every must be positive".into()));
        }
        if let Some(p) = self.p_faults.iter().chain([&self.ablation_p_fault]).find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::Config(format!("p_fault {p} outside [0, 1]")));
        }
        if let Some(t) = self.taus.iter().chain(self.tau.iter()).find(|t| !(**t > 0.0)) {
            return Err(Error::Config(format!("tau {t} must be positive")));
        }
        if let Some(d) = &self.drift {
            d.validate()?;
        }
        Ok(())
    }

    pub fn snn_config(&self) -> SnnConfig {
        let mut c = SnnConfig::for_dataset(self.dataset, self.n_neuron);
        if let Some(t) = self.tau {
            c.repair_tau = t;
        }
        c
    }

    pub fn data_dir(&self) -> PathBuf {
        self.data_dir.clone().unwrap_or_else(|| default_data_dir(self.dataset))
    }

    /// Seed of repetition `run`.
    pub fn run_seed(&self, run: usize) -> u64 {
        seed::derive_seed(self.master_seed, run as u64)
    }
}

/// Training subset, labeling subset (drawn from the training subset) and
/// test subset.
#[derive(Debug, Clone)]
pub struct DataSplits {
    pub train: Dataset,
    pub label: Dataset,
    pub test: Dataset,
}

pub fn load_data(cfg: &ExperimentConfig) -> Result<DataSplits> {
    let dir = cfg.data_dir();
    let train_full = dataset::load_split(&dir, true)?;
    let test_full = dataset::load_split(&dir, false)?;
    let train = train_full.slice(0, cfg.train_samples, Split::Train);
    let label = train.slice(0, cfg.label_samples, Split::Validation);
    let test = test_full.slice(0, cfg.test_samples, Split::Test);
    Ok(DataSplits { train, label, test })
}

fn cache_path(dir: &Path, cfg: &ExperimentConfig, run_seed: u64) -> PathBuf {
    let key = format!(
        "{}|{}|{}|{}|{}",
        cfg.dataset, cfg.n_neuron, run_seed, cfg.train_samples, cfg.epochs
    );
    let h = seed::derive_labeled(0, &key);
    dir.join(format!("baseline_{}_{}_{:016x}.ckpt", cfg.dataset, cfg.n_neuron, h))
}

/// Train (or load from the cache) the baseline network for one run seed.
pub fn baseline_network(cfg: &ExperimentConfig, data: &DataSplits, run_seed: u64) -> Result<NetworkState> {
    let path = cfg.cache_dir.as_ref().map(|d| cache_path(d, cfg, run_seed));
    if let Some(p) = path.as_ref().filter(|p| p.exists()) {
        let mut s = snn::load_checkpoint(p)?;
        if let Some(t) = cfg.tau {
            s.config.repair_tau = t;
        }
        return Ok(s);
    }
    let mut s = NetworkState::new(cfg.snn_config(), run_seed)?;
    snn::train(&mut s, &data.train, cfg.epochs, run_seed)?;
    if let Some(p) = path {
        snn::save_checkpoint(&s, &p)?;
    }
    Ok(s)
}

/// Outcome of one (p_fault, run) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub p_fault: f64,
    pub run: usize,
    pub seed: u64,
    pub acc_baseline: f64,
    pub acc_norm: f64,
    pub reports: Vec<RepairReport>,
}

fn fault_seed(run_seed: u64, p_fault: f64) -> u64 {
    seed::derive_seed(seed::derive_labeled(run_seed, "harness/fault"), p_fault.to_bits())
}

/// Fault a copy of `baseline`, normalize it, and retrain it with every rule.
pub fn run_cell(
    cfg: &ExperimentConfig,
    data: &DataSplits,
    baseline: &NetworkState,
    acc_baseline: f64,
    p_fault: f64,
    run: usize,
    tau: f64,
) -> Result<(CellResult, NetworkState, Vec<NetworkState>)> {
    let run_seed = cfg.run_seed(run);
    let ctx = repair::snapshot_baseline(&baseline.weights, tau)?;
    let mut faulted = baseline.clone();
    faulted.config.repair_tau = tau;
    repair::inject_faults(&mut faulted, p_fault, cfg.drift.as_ref(), fault_seed(run_seed, p_fault))?;
    repair::normalize_after_fault(&mut faulted);
    let eval_seed = seed::derive_labeled(run_seed, "harness/eval");
    let acc_norm = snn::evaluate(&faulted, &data.label, &data.test, eval_seed)?.accuracy;
    let mut reports = Vec::new();
    let mut repaired = Vec::new();
    for &rule in &cfg.rules {
        let mut net = faulted.clone();
        let opts = RetrainOptions {
            rule,
            epochs: cfg.retrain_epochs,
            eval_every: cfg.eval_every,
            seed: seed::derive_labeled(run_seed, "harness/retrain"),
            target: cfg.target,
        };
        reports.push(repair::retrain(&mut net, &ctx, &data.train, &data.label, &data.test, &opts)?);
        repaired.push(net);
    }
    Ok((
        CellResult {
            p_fault,
            run,
            seed: run_seed,
            acc_baseline,
            acc_norm,
            reports,
        },
        faulted,
        repaired,
    ))
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn create(path: &Path) -> Result<BufWriter<fs::File>> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    Ok(BufWriter::new(fs::File::create(path).map_err(|e| Error::io(path, e))?))
}

fn write_cell_file(path: &Path, c: &CellResult) -> Result<()> {
    let mut f = create(path)?;
    let io = |e| Error::io(path, e);
    writeln!(f, "p_fault,run,seed,rule,acc_baseline,acc_norm,best_acc,steps_to_best").map_err(io)?;
    for r in &c.reports {
        writeln!(
            f,
            "{},{},{},{},{:.4},{:.4},{:.4},{}",
            c.p_fault, c.run, c.seed, r.rule, c.acc_baseline, c.acc_norm, r.best_acc, r.steps_to_best
        )
        .map_err(io)?;
    }
    f.flush().map_err(io)
}

/// Write the Table-1 layout: one row per fault level with mean/std over runs.
pub fn write_table1(path: &Path, dataset: DatasetKind, rules: &[RepairRule], cells: &[CellResult]) -> Result<()> {
    let mut f = create(path)?;
    let io = |e| Error::io(path, e);
    let mut header = String::from("dataset,p_fault,acc_baseline_mean,acc_baseline_std,acc_norm_mean,acc_norm_std");
    for r in rules {
        let r = r.to_string().replace('-', "_");
        header.push_str(&format!(",{r}_acc_mean,{r}_acc_std,{r}_steps_mean,{r}_steps_std"));
    }
    writeln!(f, "{header}").map_err(io)?;
    let mut levels: Vec<f64> = cells.iter().map(|c| c.p_fault).collect();
    levels.sort_by(f64::total_cmp);
    levels.dedup();
    for p in levels {
        let row: Vec<&CellResult> = cells.iter().filter(|c| c.p_fault == p).collect();
        let (bm, bs) = mean_std(&row.iter().map(|c| c.acc_baseline).collect::<Vec<_>>());
        let (nm, ns) = mean_std(&row.iter().map(|c| c.acc_norm).collect::<Vec<_>>());
        let mut line = format!("{dataset},{p},{bm:.4},{bs:.4},{nm:.4},{ns:.4}");
        for rule in rules {
            let reps: Vec<&RepairReport> = row
                .iter()
                .flat_map(|c| c.reports.iter().filter(|r| r.rule == *rule))
                .collect();
            let (am, as_) = mean_std(&reps.iter().map(|r| r.best_acc).collect::<Vec<_>>());
            let (sm, ss) = mean_std(&reps.iter().map(|r| r.steps_to_best as f64).collect::<Vec<_>>());
            line.push_str(&format!(",{am:.4},{as_:.4},{sm:.1},{ss:.1}"));
        }
        writeln!(f, "{line}").map_err(io)?;
    }
    f.flush().map_err(io)
}

/// Long-format accuracy traces: `run, rule, samples_seen, accuracy`, with the
/// fault level and a 0/1 marker on each run's steps-to-best point.
pub fn export_convergence(path: &Path, cells: &[CellResult]) -> Result<()> {
    if cells.is_empty() {
        return Err(Error::Config("no reports to export".into()));
    }
    let mut f = create(path)?;
    let io = |e| Error::io(path, e);
    writeln!(f, "run,rule,samples_seen,accuracy,p_fault,is_best").map_err(io)?;
    for c in cells {
        for r in &c.reports {
            for &(s, a) in &r.points {
                let best = u8::from(s == r.steps_to_best);
                writeln!(f, "{},{},{s},{a:.4},{},{best}", c.run, r.rule, c.p_fault).map_err(io)?;
            }
        }
    }
    f.flush().map_err(io)
}

/// Tile every neuron's 28×28 receptive field into a square mosaic and write
/// it as a binary PGM. Each tile is min-max normalized on its own; a
/// constant tile maps to 0.
pub fn export_weight_maps(weights: &Matrix, side: usize, path: &Path) -> Result<()> {
    if weights.rows() != side * side {
        return Err(Error::Dimension {
            expected: side * side,
            got: weights.rows(),
        });
    }
    let n = weights.cols();
    let grid = (n as f64).sqrt().ceil() as usize;
    let width = grid * side;
    let mut img = vec![0u8; width * width];
    for j in 0..n {
        let col = weights.column(j);
        let lo = col.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let span = hi - lo;
        let (gy, gx) = (j / grid, j % grid);
        for (i, &w) in col.iter().enumerate() {
            let v = if span > 0.0 { (w - lo) / span } else { 0.0 };
            let (y, x) = (gy * side + i / side, gx * side + i % side);
            img[y * width + x] = (v * 255.0).round() as u8;
        }
    }
    let mut f = create(path)?;
    let io = |e| Error::io(path, e);
    write!(f, "P5\n{width} {width}\n255\n").map_err(io)?;
    f.write_all(&img).map_err(io)?;
    f.flush().map_err(io)
}

/// Full results of a pipeline run.
#[derive(Debug, Clone)]
pub struct PipelineResults {
    pub cells: Vec<CellResult>,
}

/// Run the (p_fault × run) grid and write `table1.csv`, `convergence.csv`,
/// per-cell CSVs under `cells/`, and weight maps for the first run.
pub fn run_pipeline(cfg: &ExperimentConfig) -> Result<PipelineResults> {
    cfg.validate()?;
    let data = load_data(cfg)?;
    let side = (data.train.rows, data.train.cols);
    let eval_baseline = |s: &NetworkState, run_seed: u64| {
        snn::evaluate(s, &data.label, &data.test, seed::derive_labeled(run_seed, "harness/eval")).map(|e| e.accuracy)
    };
    let baselines: Vec<(NetworkState, f64)> = (0..cfg.runs)
        .into_par_iter()
        .map(|run| {
            let s = baseline_network(cfg, &data, cfg.run_seed(run))?;
            let acc = eval_baseline(&s, cfg.run_seed(run))?;
            Ok((s, acc))
        })
        .collect::<Result<_>>()?;
    let tau = cfg.snn_config().repair_tau;
    let grid: Vec<(f64, usize)> = cfg
        .p_faults
        .iter()
        .flat_map(|&p| (0..cfg.runs).map(move |r| (p, r)))
        .collect();
    let mut outputs: Vec<(CellResult, NetworkState, Vec<NetworkState>)> = grid
        .par_iter()
        .map(|&(p, run)| {
            let (base, acc) = &baselines[run];
            let out = run_cell(cfg, &data, base, *acc, p, run, tau)?;
            write_cell_file(&cfg.out_dir.join("cells").join(format!("p{p:.2}_run{run}.csv")), &out.0)?;
            Ok(out)
        })
        .collect::<Result<_>>()?;
    outputs.sort_by(|a, b| a.0.p_fault.total_cmp(&b.0.p_fault).then(a.0.run.cmp(&b.0.run)));

    if side.0 * side.1 == cfg.snn_config().n_input {
        export_weight_maps(&baselines[0].0.weights, side.0, &cfg.out_dir.join("weights_baseline.pgm"))?;
        if let Some((cell, faulted, repaired)) = outputs.iter().find(|o| o.0.run == 0) {
            let tag = format!("p{:.2}", cell.p_fault);
            export_weight_maps(&faulted.weights, side.0, &cfg.out_dir.join(format!("weights_faulted_{tag}.pgm")))?;
            for (net, rule) in repaired.iter().zip(&cfg.rules) {
                let name = format!("weights_repaired_{rule}_{tag}.pgm");
                export_weight_maps(&net.weights, side.0, &cfg.out_dir.join(name))?;
            }
        }
    }
    let cells: Vec<CellResult> = outputs.into_iter().map(|o| o.0).collect();
    write_table1(&cfg.out_dir.join("table1.csv"), cfg.dataset, &cfg.rules, &cells)?;
    export_convergence(&cfg.out_dir.join("convergence.csv"), &cells)?;
    Ok(PipelineResults { cells })
}

/// One row of the repair time-constant sweep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub tau: f64,
    pub acc_mean: f64,
    pub acc_std: f64,
    pub steps_mean: f64,
    pub steps_std: f64,
}

/// Sweep the repair time constant of the local rule at
/// `cfg.ablation_p_fault` (with the configured drift) and write
/// `ablation.csv`.
pub fn run_tau_ablation(cfg: &ExperimentConfig) -> Result<Vec<AblationRow>> {
    cfg.validate()?;
    if cfg.taus.is_empty() {
        return Err(Error::Config("tau sweep list is empty".into()));
    }
    let data = load_data(cfg)?;
    let sweep_cfg = ExperimentConfig {
        rules: vec![RepairRule::AstdpLocal],
        ..cfg.clone()
    };
    let baselines: Vec<(NetworkState, f64)> = (0..cfg.runs)
        .into_par_iter()
        .map(|run| {
            let s = baseline_network(cfg, &data, cfg.run_seed(run))?;
            Ok((s, f64::NAN))
        })
        .collect::<Result<_>>()?;
    let mut rows = Vec::new();
    for &tau in &cfg.taus {
        let cells: Vec<CellResult> = (0..cfg.runs)
            .into_par_iter()
            .map(|run| {
                let (b, acc) = &baselines[run];
                run_cell(&sweep_cfg, &data, b, *acc, cfg.ablation_p_fault, run, tau).map(|o| o.0)
            })
            .collect::<Result<_>>()?;
        let acc: Vec<f64> = cells.iter().map(|c| c.reports[0].best_acc).collect();
        let steps: Vec<f64> = cells.iter().map(|c| c.reports[0].steps_to_best as f64).collect();
        let (acc_mean, acc_std) = mean_std(&acc);
        let (steps_mean, steps_std) = mean_std(&steps);
        rows.push(AblationRow {
            tau,
            acc_mean,
            acc_std,
            steps_mean,
            steps_std,
        });
    }
    let path = cfg.out_dir.join("ablation.csv");
    let mut f = create(&path)?;
    let io = |e| Error::io(&path, e);
    writeln!(f, "tau,p_fault,acc_mean,acc_std,steps_mean,steps_std").map_err(io)?;
    for r in &rows {
        writeln!(
            f,
            "{},{},{:.4},{:.4},{:.1},{:.1}",
            r.tau, cfg.ablation_p_fault, r.acc_mean, r.acc_std, r.steps_mean, r.steps_std
        )
        .map_err(io)?;
    }
    f.flush().map_err(io)?;
    Ok(rows)
}

/// Summary written next to the traces of a biophysical run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BioRunSummary {
    pub config: BioSimConfig,
    /// Fault severity of N2.
    pub z: f64,
    /// Repair ratio of N1 and N2.
    pub q_n1: f64,
    pub q_n2: f64,
    /// Firing rates (Hz) of N1 and N2 in the before-fault window.
    pub rate_bf: [f64; 2],
    /// Firing rates (Hz) of N1 and N2 in the after-stabilization window.
    pub rate_as: [f64; 2],
    pub ca_events: usize,
}

pub const BIO_SUMMARY_FILE: &str = "run.json";

/// Run one biophysical experiment and write `pr_trace.csv`,
/// `astro_trace.csv`, `synapses.csv` and `run.json` into `out_dir`. Traces
/// keep every `every`-th step.
pub fn write_bio_run(cfg: &BioSimConfig, out_dir: &Path, every: usize) -> Result<BioRunSummary> {
    let cfg = BioSimConfig {
        record_traces: true,
        ..cfg.clone()
    };
    let trace = run_two_neuron_experiment(&cfg)?;
    let (bf, as_w) = (trace.bf_window, trace.as_window);
    let summary = BioRunSummary {
        z: macro_model::run_severity(&trace)?,
        q_n1: macro_model::neuron_repair_ratio(&trace, 0)?,
        q_n2: macro_model::neuron_repair_ratio(&trace, 1)?,
        rate_bf: [trace.firing_rate(0, bf), trace.firing_rate(1, bf)],
        rate_as: [trace.firing_rate(0, as_w), trace.firing_rate(1, as_w)],
        ca_events: trace.ca_events.len(),
        config: cfg,
    };
    let pr = out_dir.join("pr_trace.csv");
    astrocyte::write_pr_csv(&trace, create(&pr)?, every).map_err(|e| Error::io(&pr, e))?;
    let astro = out_dir.join("astro_trace.csv");
    astrocyte::write_astro_csv(&trace, create(&astro)?, every).map_err(|e| Error::io(&astro, e))?;
    let syn = out_dir.join("synapses.csv");
    astrocyte::write_synapse_csv(&trace, create(&syn)?).map_err(|e| Error::io(&syn, e))?;
    let meta = out_dir.join(BIO_SUMMARY_FILE);
    let json = serde_json::to_string_pretty(&summary).map_err(|e| Error::Config(e.to_string()))?;
    fs::write(&meta, json).map_err(|e| Error::io(&meta, e))?;
    Ok(summary)
}

/// Read the `(z, q)` of N2 from a directory written by [`write_bio_run`].
pub fn read_bio_run(dir: &Path) -> Result<RepairMeasurement> {
    let path = dir.join(BIO_SUMMARY_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let s: BioRunSummary = serde_json::from_str(&text).map_err(|e| Error::DataFormat {
        path: path.clone(),
        detail: e.to_string(),
    })?;
    Ok(RepairMeasurement {
        z: s.z,
        q: s.q_n2,
        run_seed: s.config.seed,
    })
}

/// Fit `q = a/(z + b)` and the rank correlation over a set of measurements,
/// writing `q_z.csv` and `fit.json` into `out_dir`.
pub fn fit_and_write(measurements: &[RepairMeasurement], out_dir: &Path) -> Result<MacroFitReport> {
    let fit = macro_model::fit_q_z(measurements)?;
    let z: Vec<f64> = measurements.iter().map(|m| m.z).collect();
    let q: Vec<f64> = measurements.iter().map(|m| m.q).collect();
    let report = MacroFitReport {
        n_runs: measurements.len(),
        fit,
        spearman_qz: macro_model::spearman(&z, &q)?,
    };
    let csv = out_dir.join("q_z.csv");
    let mut f = create(&csv)?;
    macro_model::write_qz_csv(measurements, &mut f)
        .and_then(|_| f.flush())
        .map_err(|e| Error::io(&csv, e))?;
    let path = out_dir.join("fit.json");
    let json = serde_json::to_string_pretty(&report).map_err(|e| Error::Config(e.to_string()))?;
    fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MacroFitReport {
    pub n_runs: usize,
    pub fit: QzFit,
    /// Spearman correlation between z and q (expected strongly negative).
    pub spearman_qz: f64,
}
