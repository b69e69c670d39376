//! Mode execution and report emission.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use mvinfo_core::datagen::{gen_continuous, gen_discrete, write_dataset, ContinuousSpec, Dataset};
use mvinfo_core::eval::{binary_symmetric_pair, knn_cosine_eval, linear_eval_split, mi_convergence};
use mvinfo_core::nn::{self, load_checkpoint, save_checkpoint};
use mvinfo_core::train::{input_encoder, train, StepLog};
use mvinfo_core::rng;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::config::{ExperimentConfig, Mode, Protocol};
use crate::suites::{bounds_suite, theorem_suite, SuiteReport, BOUNDS_CSV_HEADER};
use crate::CliError;

/// Environment variable that may set the output directory.
pub const OUT_ENV: &str = "MVINFO_OUT";

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub config: PathBuf,
    pub out: Option<PathBuf>,
    pub seeds: Option<Vec<u64>>,
}

/// One summarized pass/fail line of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckLine {
    pub name: String,
    pub pass: bool,
    /// Worst slack or residual, or the statistic being tested.
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub path: String,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub mode: Mode,
    pub version: String,
    pub config_hash: String,
    pub config: ExperimentConfig,
    pub rng: String,
    pub output_dir: String,
    pub results: Vec<SeedResult>,
    pub tables: Vec<String>,
    pub checks: Vec<CheckLine>,
    /// Mode-specific summary, e.g. realized loss weights.
    pub summary: Value,
    pub wall_clock_secs: f64,
    pub pass: bool,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub manifest: RunManifest,
    pub out_dir: PathBuf,
}

impl RunOutcome {
    pub fn exit_code(&self) -> i32 {
        if self.manifest.pass {
            0
        } else {
            1
        }
    }
}

struct ModeOutput {
    per_seed: Vec<(u64, Value, bool)>,
    tables: Vec<(String, String)>,
    checks: Vec<CheckLine>,
    summary: Value,
}

fn io(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

fn core_err(e: mvinfo_core::Error) -> CliError {
    match e {
        mvinfo_core::Error::Io(_) => CliError::Io(e.to_string()),
        mvinfo_core::Error::InvalidArgument(_) | mvinfo_core::Error::Capacity { .. } => {
            CliError::Config(e.to_string())
        }
        other => CliError::Run(other.to_string()),
    }
}

/// Writes `contents` next to `path` and renames it into place.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<(), CliError> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, contents).map_err(|e| io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| io(path, e))
}

fn pretty(v: &impl Serialize) -> Vec<u8> {
    let mut s = serde_json::to_string_pretty(v).expect("reports serialize");
    s.push('\n');
    s.into_bytes()
}

/// Seed of the dataset used by run seed `run_seed`.
pub fn data_seed(spec_seed: u64, run_seed: u64) -> u64 {
    rng::derived(spec_seed, &[run_seed]).gen()
}

fn dataset(config: &ExperimentConfig, mode: Mode, seed: u64) -> Result<(ContinuousSpec, Dataset), CliError> {
    let block = config.data_block(mode)?;
    let mut spec = block.continuous_spec();
    spec.seed = data_seed(spec.seed, seed);
    let data = gen_continuous(&spec, block.strategy).map_err(core_err)?;
    Ok((spec, data))
}

fn suite_checks(reports: &[&SuiteReport]) -> Vec<CheckLine> {
    let mut lines: BTreeMap<String, CheckLine> = BTreeMap::new();
    for r in reports {
        for g in &r.groups {
            for c in &g.checks {
                let name = format!("{}: {}", g.group, c.name);
                let line = lines.entry(name.clone()).or_insert(CheckLine {
                    name,
                    pass: true,
                    value: c.worst,
                });
                line.pass &= c.pass();
                line.value = match c.kind {
                    mvinfo_core::repr::CheckKind::Equality => line.value.max(c.worst),
                    mvinfo_core::repr::CheckKind::Inequality => line.value.min(c.worst),
                };
            }
        }
    }
    lines.into_values().collect()
}

fn verify_theorems(config: &ExperimentConfig) -> Result<ModeOutput, CliError> {
    let family = config.tables.clone().unwrap_or_default();
    let reports = config
        .seeds
        .iter()
        .map(|&s| theorem_suite(&family, s).map_err(core_err))
        .collect::<Result<Vec<_>, _>>()?;
    let checks = suite_checks(&reports.iter().collect::<Vec<_>>());
    Ok(ModeOutput {
        per_seed: reports
            .iter()
            .map(|r| (r.seed, serde_json::to_value(r).unwrap(), r.pass))
            .collect(),
        tables: Vec::new(),
        checks,
        summary: json!({ "family": family, "skipped_tables": reports.iter().map(|r| r.skipped_tables).sum::<usize>() }),
    })
}

fn bounds(config: &ExperimentConfig) -> Result<ModeOutput, CliError> {
    let family = config.tables.clone().unwrap_or_default();
    let reports = config
        .seeds
        .iter()
        .map(|&s| bounds_suite(&family, s).map_err(core_err))
        .collect::<Result<Vec<_>, _>>()?;
    let checks = suite_checks(&reports.iter().map(|r| &r.suite).collect::<Vec<_>>());
    let mut csv = String::from(BOUNDS_CSV_HEADER);
    csv.push('\n');
    for r in &reports {
        for row in &r.rows {
            csv.push_str(&row.csv());
            csv.push('\n');
        }
    }
    Ok(ModeOutput {
        per_seed: reports
            .iter()
            .map(|r| (r.suite.seed, serde_json::to_value(r).unwrap(), r.suite.pass))
            .collect(),
        tables: vec![("bounds.csv".into(), csv)],
        checks,
        summary: json!({ "family": family }),
    })
}

#[derive(Serialize)]
struct TrainSeedReport<'a> {
    seed: u64,
    data_seed: u64,
    weights: mvinfo_core::objectives::LossWeights,
    ip_auto_tenth: bool,
    initial_eval: &'a mvinfo_core::eval::EvalReport,
    final_eval: &'a mvinfo_core::eval::EvalReport,
    checkpoint: String,
    history: &'a [StepLog],
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn train_mode(config: &ExperimentConfig, out: &Path) -> Result<ModeOutput, CliError> {
    let cfg = config.train_config()?;
    let outcomes = config
        .seeds
        .par_iter()
        .map(|&seed| -> Result<_, CliError> {
            let (spec, data) = dataset(config, Mode::Train, seed)?;
            let outcome = train(&data, &cfg, seed).map_err(core_err)?;
            let rel = format!("checkpoints/seed-{seed}");
            save_checkpoint(&out.join(&rel), &outcome.model.encoder, seed, &outcome.model.params_x)
                .map_err(|e| io(&out.join(&rel), e))?;
            Ok((spec.seed, outcome, rel))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let mut csv = String::from("seed,step,loss_cl,loss_fp,loss_ip,eval_acc\n");
    let mut per_seed = Vec::new();
    let mut realized = BTreeMap::new();
    for (data_seed, o, rel) in &outcomes {
        for h in &o.history {
            csv.push_str(&format!(
                "{},{},{},{},{},{}\n",
                o.seed,
                h.step,
                h.loss_cl,
                h.loss_fp,
                h.loss_ip,
                fmt_opt(h.eval_acc)
            ));
        }
        realized.insert(o.seed.to_string(), json!({ "weights": o.weights, "ip_auto_tenth": o.ip_auto_tenth }));
        let report = TrainSeedReport {
            seed: o.seed,
            data_seed: *data_seed,
            weights: o.weights,
            ip_auto_tenth: o.ip_auto_tenth,
            initial_eval: &o.initial_eval,
            final_eval: &o.final_eval,
            checkpoint: rel.clone(),
            history: &o.history,
        };
        per_seed.push((o.seed, serde_json::to_value(&report).unwrap(), true));
    }
    let n = outcomes.len() as f64;
    let mean = outcomes.iter().map(|o| o.1.final_eval.accuracy).sum::<f64>() / n;
    let chance = outcomes[0].1.final_eval.chance;
    Ok(ModeOutput {
        per_seed,
        tables: vec![("train.csv".into(), csv)],
        checks: Vec::new(),
        summary: json!({
            "realized": realized,
            "mean_final_accuracy": mean,
            "mean_initial_accuracy": outcomes.iter().map(|o| o.1.initial_eval.accuracy).sum::<f64>() / n,
            "chance": chance,
        }),
    })
}

fn eval_mode(config: &ExperimentConfig) -> Result<ModeOutput, CliError> {
    let ev = config.evaluation.clone().unwrap_or_default();
    let model = config.model.clone().unwrap_or_default();
    let labeled = config.labeled_per_class.unwrap_or(5);
    let per_seed = config
        .seeds
        .par_iter()
        .map(|&seed| -> Result<_, CliError> {
            let (spec, data) = dataset(config, Mode::Eval, seed)?;
            let (enc, params, source) = match &ev.checkpoints {
                Some(dir) => {
                    let d = dir.join(format!("seed-{seed}"));
                    let (m, p) = load_checkpoint(&d).map_err(|e| io(&d, e))?;
                    (m.spec, p, d.display().to_string())
                }
                None => {
                    let (s, p) = input_encoder(&model, spec.dim, seed).map_err(core_err)?;
                    (s, p, "untrained".to_string())
                }
            };
            let emb = nn::forward(&enc, &params, &data.test.x).map_err(core_err)?;
            let mut reports = Vec::new();
            if matches!(ev.protocol, Protocol::Knn | Protocol::Both) {
                reports.push(knn_cosine_eval(&emb, &data.test.labels, labeled, seed).map_err(core_err)?);
            }
            if matches!(ev.protocol, Protocol::Linear | Protocol::Both) {
                reports.push(linear_eval_split(&emb, &data.test.labels, seed).map_err(core_err)?);
            }
            let v = json!({ "seed": seed, "data_seed": spec.seed, "encoder": source, "reports": reports });
            Ok((seed, v, true))
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(ModeOutput {
        per_seed,
        tables: Vec::new(),
        checks: Vec::new(),
        summary: json!({ "protocol": ev.protocol }),
    })
}

fn convergence_mode(config: &ExperimentConfig) -> Result<ModeOutput, CliError> {
    let c = config.convergence.clone().unwrap_or_default();
    let table = binary_symmetric_pair(c.flip).map_err(core_err)?;
    let mut per_seed = Vec::new();
    let mut tables = Vec::new();
    let mut checks = Vec::new();
    for &seed in &config.seeds {
        let r = mi_convergence(&table, &c.n_grid, c.repeats, &c.critic, seed).map_err(core_err)?;
        let slope_ok = (c.slope_range[0]..=c.slope_range[1]).contains(&r.slope);
        let mono_ok = r.inversions() <= c.max_inversions;
        checks.push(CheckLine {
            name: format!("seed {seed}: slope in [{}, {}]", c.slope_range[0], c.slope_range[1]),
            pass: slope_ok,
            value: r.slope,
        });
        checks.push(CheckLine {
            name: format!("seed {seed}: inversions <= {}", c.max_inversions),
            pass: mono_ok,
            value: r.inversions() as f64,
        });
        tables.push((format!("convergence-seed-{seed}.csv"), r.to_csv()));
        per_seed.push((seed, serde_json::to_value(&r).unwrap(), slope_ok && mono_ok));
    }
    Ok(ModeOutput {
        per_seed,
        tables,
        checks,
        summary: json!({ "flip": c.flip }),
    })
}

fn gen_data(config: &ExperimentConfig, out: &Path) -> Result<ModeOutput, CliError> {
    let block = config.data_block(Mode::GenData)?;
    let mut per_seed = Vec::new();
    for &seed in &config.seeds {
        let dir = out.join(format!("data/seed-{seed}"));
        let (spec, data) = dataset(config, Mode::GenData, seed)?;
        let manifest = write_dataset(&dir, &spec, &data).map_err(|e| io(&dir, e))?;
        let mut v = json!({ "seed": seed, "dir": format!("data/seed-{seed}"), "continuous": manifest });
        if let Some(d) = &block.discrete {
            let mut spec = d.clone();
            spec.seed = data_seed(spec.seed, seed);
            let table = gen_discrete(&spec).map_err(core_err)?;
            let path = dir.join("table.json");
            write_atomic(&path, table.to_json().map_err(core_err)?.as_bytes())?;
            v["discrete"] = json!({
                "spec": spec,
                "file": "table.json",
                "epsilon_info": mvinfo_core::datagen::measure_epsilon_info(&table).map_err(core_err)?,
            });
        }
        per_seed.push((seed, v, true));
    }
    Ok(ModeOutput {
        per_seed,
        tables: Vec::new(),
        checks: Vec::new(),
        summary: Value::Null,
    })
}

/// Resolves the output directory: flag, then environment, then config, then a default.
pub fn resolve_out(flag: Option<&Path>, config: &ExperimentConfig, mode: Mode) -> PathBuf {
    flag.map(Path::to_path_buf)
        .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
        .or_else(|| config.out.clone())
        .unwrap_or_else(|| PathBuf::from("runs").join(mode.name()))
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    ExperimentConfig::parse(&text, &path.display().to_string())
}

/// Executes `mode` and writes all reports.
pub fn run(mode: Mode, opts: &RunOptions) -> Result<RunOutcome, CliError> {
    let mut config = load_config(&opts.config)?;
    if let Some(seeds) = &opts.seeds {
        config.seeds = seeds.clone();
    }
    config.validate(mode)?;
    let out = resolve_out(opts.out.as_deref(), &config, mode);
    fs::create_dir_all(&out).map_err(|e| io(&out, e))?;
    let hash = config.hash();
    let start = Instant::now();
    let output = match mode {
        Mode::VerifyTheorems => verify_theorems(&config)?,
        Mode::Bounds => bounds(&config)?,
        Mode::Train => train_mode(&config, &out)?,
        Mode::Eval => eval_mode(&config)?,
        Mode::MiConvergence => convergence_mode(&config)?,
        Mode::GenData => gen_data(&config, &out)?,
    };
    let mut results = Vec::new();
    for (seed, value, pass) in &output.per_seed {
        let name = format!("seed-{seed}.json");
        let doc = json!({ "mode": mode, "config_hash": hash, "seed": seed, "result": value });
        write_atomic(&out.join(&name), &pretty(&doc))?;
        results.push(SeedResult {
            seed: *seed,
            path: name,
            pass: *pass,
        });
    }
    for (name, csv) in &output.tables {
        write_atomic(&out.join(name), csv.as_bytes())?;
    }
    let pass = results.iter().all(|r| r.pass) && output.checks.iter().all(|c| c.pass);
    let manifest = RunManifest {
        mode,
        version: env!("CARGO_PKG_VERSION").to_string(),
        config_hash: hash,
        config,
        rng: rng::ALGORITHM.to_string(),
        output_dir: out.display().to_string(),
        results,
        tables: output.tables.iter().map(|t| t.0.clone()).collect(),
        checks: output.checks,
        summary: output.summary,
        wall_clock_secs: start.elapsed().as_secs_f64(),
        pass,
    };
    write_atomic(&out.join("manifest.json"), &pretty(&manifest))?;
    Ok(RunOutcome { manifest, out_dir: out })
}
