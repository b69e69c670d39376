//! Acceptance run: one [PASS]/[FAIL] line per criterion, nonzero exit on any failure.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use mvinfo::suites::{bounds_suite, theorem_suite, Family, GroupReport, TableFamily};
use mvinfo_core::nn::{EncoderSpec, Tensor};
use mvinfo_core::objectives::{
    composite_loss, cpc_loss, fp_loss, ip_loss, js_loss, Components, Decoder, FpFlavor, LossOutput,
    LossWeights, PairBatch, Projection,
};
use mvinfo_core::rng;
use rand::Rng;
use rand_distr::StandardNormal;
use serde_json::Value;

const THEOREM_TABLES: usize = 500;
const BOUNDS_TABLES: usize = 200;
const SUITE_SEED: u64 = 0;
const SUITE_BUDGET_SECS: f64 = 300.0;

const GRAD_STEP: f64 = 1e-6;
const GRAD_REL_TOL: f64 = 1e-4;
const GRAD_FLOOR: f64 = 1e-6;
const GRAD_BATCHES: u64 = 20;
const GRAD_BUDGET_SECS: f64 = 60.0;

const CEILING_BATCHES: u64 = 1000;
const CEILING_SIZES: [usize; 3] = [2, 8, 64];

const CHANCE_SDS: f64 = 3.0;
const SMOKE_FACTOR: f64 = 10.0;
const DIRECTIONAL_MARGIN: f64 = 0.005;
const TRAIN_BUDGET_SECS: f64 = 600.0;
const CONVERGENCE_BUDGET_SECS: f64 = 600.0;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn group_outcome(g: Option<&GroupReport>, secs: Option<(f64, f64)>) -> Outcome {
    let Some(g) = g else {
        return outcome(false, "group missing from report");
    };
    let mut lines = Vec::new();
    for c in &g.checks {
        let mark = if c.pass() { "ok" } else { "VIOLATED" };
        lines.push(format!(
            "{mark}: {} (worst {:.3e}, {}/{} failing)",
            c.name, c.worst, c.failures, c.evaluations
        ));
    }
    let mut pass = g.pass;
    if let Some((elapsed, budget)) = secs {
        pass &= elapsed <= budget;
        lines.push(format!("runtime {elapsed:.1}s (budget {budget:.0}s)"));
    }
    outcome(pass, lines.join("\n      "))
}

fn workspace() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn mvinfo(mode: &str, config: &str, out: &Path) -> (i32, f64) {
    let start = Instant::now();
    let status = Command::new(env!("CARGO_BIN_EXE_mvinfo"))
        .arg(mode)
        .arg("--config")
        .arg(workspace().join("configs").join(config))
        .arg("--out")
        .arg(out)
        .env_remove("MVINFO_OUT")
        .stdout(std::process::Stdio::null())
        .status()
        .expect("mvinfo binary runs");
    (status.code().unwrap_or(-1), start.elapsed().as_secs_f64())
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap_or_default()).unwrap_or(Value::Null)
}

fn seed_results(dir: &Path) -> Vec<Value> {
    let manifest = read_json(&dir.join("manifest.json"));
    manifest["results"]
        .as_array()
        .map(|rs| {
            rs.iter()
                .map(|r| read_json(&dir.join(r["path"].as_str().unwrap_or_default()))["result"].clone())
                .collect()
        })
        .unwrap_or_default()
}

fn final_accuracies(dir: &Path) -> Vec<f64> {
    seed_results(dir)
        .iter()
        .filter_map(|r| r["final_eval"]["accuracy"].as_f64())
        .collect()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

// ---------------------------------------------------------------- gradients

fn gaussian(r: &mut rng::Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| r.sample(StandardNormal)).collect()).unwrap()
}

fn worst_rel_err<F: Fn(&Tensor) -> f64>(x: &Tensor, grad: &Tensor, f: F) -> f64 {
    let mut worst = 0.0f64;
    for k in 0..x.data().len() {
        let mut up = x.clone();
        up.data_mut()[k] += GRAD_STEP;
        let mut dn = x.clone();
        dn.data_mut()[k] -= GRAD_STEP;
        let numeric = (f(&up) - f(&dn)) / (2.0 * GRAD_STEP);
        let analytic = grad.data()[k];
        let e = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_FLOOR);
        worst = worst.max(e);
    }
    worst
}

struct GradCase {
    zx: Tensor,
    zs: Tensor,
    head: Projection,
    target: Tensor,
    decoder: Decoder,
}

fn grad_case(seed: u64, b: u64, bernoulli_target: bool) -> GradCase {
    let mut r = rng::derived(seed, &[b]);
    let n = r.gen_range(2..=8);
    let d = r.gen_range(2..=5);
    let zx = gaussian(&mut r, n, d).scale(0.7);
    let zs = gaussian(&mut r, n, d).scale(0.7);
    let head = if b % 2 == 1 {
        let k = r.gen_range(1..=4);
        Projection::Linear {
            weight: gaussian(&mut r, k, d).scale(0.5),
        }
    } else {
        Projection::Identity
    };
    let m = r.gen_range(1..=4);
    let target = if bernoulli_target {
        Tensor::matrix(n, m, (0..n * m).map(|_| r.gen_range(0.05..0.95)).collect()).unwrap()
    } else {
        gaussian(&mut r, n, m)
    };
    let spec = EncoderSpec::new(vec![d, 6, m], false).unwrap();
    let params = spec.init(r.gen());
    GradCase {
        zx,
        zs,
        head,
        target,
        decoder: Decoder { spec, params },
    }
}

fn pair_objective_error<L>(loss: L, seed: u64) -> f64
where
    L: Fn(&PairBatch, &Projection) -> LossOutput,
{
    let mut worst = 0.0f64;
    for b in 0..GRAD_BATCHES {
        let c = grad_case(seed, b, false);
        let value = |zx: &Tensor, zs: &Tensor, h: &Projection| {
            loss(&PairBatch::new(zx.clone(), zs.clone()).unwrap(), h).value
        };
        let out = loss(&PairBatch::new(c.zx.clone(), c.zs.clone()).unwrap(), &c.head);
        worst = worst.max(worst_rel_err(&c.zx, &out.grad_zx, |t| value(t, &c.zs, &c.head)));
        worst = worst.max(worst_rel_err(&c.zs, &out.grad_zs, |t| value(&c.zx, t, &c.head)));
        if let (Projection::Linear { weight }, Some(g)) = (&c.head, &out.grad_head) {
            worst = worst.max(worst_rel_err(weight, g, |w| {
                value(&c.zx, &c.zs, &Projection::Linear { weight: w.clone() })
            }));
        }
    }
    worst
}

fn fp_error(flavor: FpFlavor, seed: u64) -> f64 {
    let mut worst = 0.0f64;
    for b in 0..GRAD_BATCHES {
        let c = grad_case(seed, b, flavor == FpFlavor::Bce);
        let value = |zx: &Tensor, s: &Tensor, dec: &Decoder| fp_loss(zx, s, dec, flavor).unwrap().value;
        let out = fp_loss(&c.zx, &c.target, &c.decoder, flavor).unwrap();
        worst = worst.max(worst_rel_err(&c.zx, &out.grad_zx, |t| value(t, &c.target, &c.decoder)));
        worst = worst.max(worst_rel_err(&c.target, &out.grad_zs, |t| value(&c.zx, t, &c.decoder)));
        let grads = out.grad_decoder.expect("decoder gradient");
        for (k, p) in c.decoder.params.tensors.iter().enumerate() {
            worst = worst.max(worst_rel_err(p, &grads.tensors[k], |t| {
                let mut params = c.decoder.params.clone();
                params.tensors[k] = t.clone();
                value(
                    &c.zx,
                    &c.target,
                    &Decoder {
                        spec: c.decoder.spec.clone(),
                        params,
                    },
                )
            }));
        }
    }
    worst
}

fn composite_error(seed: u64) -> f64 {
    let mut worst = 0.0f64;
    for b in 0..GRAD_BATCHES {
        let c = grad_case(seed, b, false);
        let mut r = rng::derived(seed, &[b, 1]);
        let weights = LossWeights {
            cl: r.gen_range(0.5..2.0),
            fp: r.gen_range(0.0..10.0),
            ip: r.gen_range(0.0..1.0),
        };
        let total = |zx: &Tensor, zs: &Tensor| {
            let pair = PairBatch::new(zx.clone(), zs.clone()).unwrap();
            let cl = cpc_loss(&pair, &c.head).unwrap();
            let fp = fp_loss(zx, &c.target, &c.decoder, FpFlavor::Mse).unwrap();
            let ip = ip_loss(&pair).unwrap();
            let parts = Components {
                cl: Some(&cl),
                fp: Some(&fp),
                ip: Some(&ip),
            };
            composite_loss(weights, parts).unwrap()
        };
        let out = total(&c.zx, &c.zs);
        worst = worst.max(worst_rel_err(&c.zx, &out.grad_zx, |t| total(t, &c.zs).value));
        worst = worst.max(worst_rel_err(&c.zs, &out.grad_zs, |t| total(&c.zx, t).value));
    }
    worst
}

fn gradient_checks() -> Outcome {
    let start = Instant::now();
    let errors = [
        ("cpc", pair_objective_error(|b, h| cpc_loss(b, h).unwrap(), 1)),
        ("js", pair_objective_error(|b, h| js_loss(b, h).unwrap(), 2)),
        ("ip", pair_objective_error(|b, _| ip_loss(b).unwrap(), 3)),
        ("fp-mse", fp_error(FpFlavor::Mse, 4)),
        ("fp-bce", fp_error(FpFlavor::Bce, 5)),
        ("fp-revbce", fp_error(FpFlavor::Revbce, 6)),
        ("composite", composite_error(7)),
    ];
    let secs = start.elapsed().as_secs_f64();
    let worst = errors.iter().map(|e| e.1).fold(0.0, f64::max);
    let detail = errors
        .iter()
        .map(|(n, e)| format!("{n} {e:.1e}"))
        .collect::<Vec<_>>()
        .join(", ");
    outcome(
        worst <= GRAD_REL_TOL && secs <= GRAD_BUDGET_SECS,
        format!("max rel err per objective: {detail}; runtime {secs:.2}s"),
    )
}

fn infonce_ceiling() -> Outcome {
    let mut detail = Vec::new();
    let mut pass = true;
    for &n in &CEILING_SIZES {
        let ceiling = (n as f64).ln();
        let mut max_gap = f64::NEG_INFINITY;
        for b in 0..CEILING_BATCHES {
            let mut r = rng::derived(9, &[n as u64, b]);
            let d = r.gen_range(1..=8);
            // Scales up to 30 push the diagonal scores toward saturation.
            let scale = r.gen_range(0.1..30.0);
            let zx = gaussian(&mut r, n, d).scale(scale);
            let zs = if b % 2 == 0 { zx.clone() } else { gaussian(&mut r, n, d).scale(scale) };
            let head = if b % 3 == 0 {
                Projection::Linear {
                    weight: gaussian(&mut r, d, d),
                }
            } else {
                Projection::Identity
            };
            let v = cpc_loss(&PairBatch::new(zx, zs).unwrap(), &head).unwrap().value;
            pass &= v <= ceiling;
            max_gap = max_gap.max(v - ceiling);
        }
        detail.push(format!("n={n}: max(cpc - ln n) = {max_gap:.3e}"));
    }
    outcome(pass, detail.join("; "))
}

// ---------------------------------------------------------------- runs

fn chance_band(runs: &Path) -> Outcome {
    let (code, secs) = mvinfo("eval", "eval-untrained.json", &runs.join("eval"));
    let mut pass = code == 0;
    let mut lines = Vec::new();
    for r in seed_results(&runs.join("eval")) {
        let Some(knn) = r["reports"]
            .as_array()
            .and_then(|rs| rs.iter().find(|x| x["protocol"] == "knn_cosine"))
        else {
            pass = false;
            continue;
        };
        let acc = knn["accuracy"].as_f64().unwrap_or(f64::NAN);
        let p = knn["chance"].as_f64().unwrap_or(f64::NAN);
        let q = knn["queries"].as_f64().unwrap_or(f64::NAN);
        let sd = (p * (1.0 - p) / q).sqrt();
        let z = (acc - p) / sd;
        pass &= z.abs() <= CHANCE_SDS;
        lines.push(format!("seed {}: acc {acc:.4} vs 1/C {p:.4} ({z:+.2} sd)", r["seed"]));
    }
    if lines.is_empty() {
        pass = false;
    }
    lines.push(format!("exit {code}, {secs:.1}s"));
    outcome(pass, lines.join("; "))
}

struct TrainRun {
    accuracies: Vec<f64>,
    chance: f64,
    secs: f64,
    code: i32,
    detail: Value,
}

fn train_run(config: &str, out: &Path) -> TrainRun {
    let (code, secs) = mvinfo("train", config, out);
    let manifest = read_json(&out.join("manifest.json"));
    TrainRun {
        accuracies: final_accuracies(out),
        chance: manifest["summary"]["chance"].as_f64().unwrap_or(f64::NAN),
        secs,
        code,
        detail: manifest["summary"]["realized"].clone(),
    }
}

fn training_smoke(cl: &TrainRun) -> Outcome {
    let m = mean(&cl.accuracies);
    let pass = cl.code == 0
        && cl.accuracies.len() == 5
        && m >= SMOKE_FACTOR * cl.chance
        && cl.secs <= TRAIN_BUDGET_SECS;
    outcome(
        pass,
        format!(
            "5-seed mean 1-NN acc {m:.4} vs {SMOKE_FACTOR}x chance {:.4}; per seed {:?}; {:.1}s",
            SMOKE_FACTOR * cl.chance,
            cl.accuracies.iter().map(|a| (a * 1e4).round() / 1e4).collect::<Vec<_>>(),
            cl.secs
        ),
    )
}

fn directional(cl: &TrainRun, ip: &TrainRun) -> Outcome {
    let (a, b) = (mean(&cl.accuracies), mean(&ip.accuracies));
    let lambdas: Vec<String> = ip
        .detail
        .as_object()
        .map(|o| {
            o.iter()
                .map(|(s, v)| format!("{s}:{:.2e}", v["weights"]["ip"].as_f64().unwrap_or(f64::NAN)))
                .collect()
        })
        .unwrap_or_default();
    let pass = ip.code == 0 && ip.accuracies.len() == 5 && b >= a - DIRECTIONAL_MARGIN;
    outcome(
        pass,
        format!(
            "CL+IP mean {b:.4} vs CL-only mean {a:.4} (diff {:+.2} pp, allowed -0.50 pp); realized lambda_IP {}; per seed CL {:?} CL+IP {:?}",
            100.0 * (b - a),
            lambdas.join(" "),
            cl.accuracies.iter().map(|a| (a * 1e4).round() / 1e4).collect::<Vec<_>>(),
            ip.accuracies.iter().map(|a| (a * 1e4).round() / 1e4).collect::<Vec<_>>(),
        ),
    )
}

fn convergence(runs: &Path) -> Outcome {
    let (code, secs) = mvinfo("mi-convergence", "mi-convergence.json", &runs.join("mi"));
    let results = seed_results(&runs.join("mi"));
    let Some(r) = results.first() else {
        return outcome(false, format!("no report (exit {code})"));
    };
    let slope = r["slope"].as_f64().unwrap_or(f64::NAN);
    let errors: Vec<f64> = r["points"]
        .as_array()
        .map(|ps| ps.iter().filter_map(|p| p["mean_error"].as_f64()).collect())
        .unwrap_or_default();
    let inversions = errors.windows(2).filter(|w| w[1] > w[0]).count();
    let pass = (-0.65..=-0.35).contains(&slope)
        && inversions <= 1
        && errors.len() == 4
        && secs <= CONVERGENCE_BUDGET_SECS;
    outcome(
        pass,
        format!(
            "slope {slope:.3} (range [-0.65, -0.35]); mean errors {:?}; {inversions} inversion(s); {secs:.1}s",
            errors.iter().map(|e| (e * 1e5).round() / 1e5).collect::<Vec<_>>()
        ),
    )
}

fn files_under(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        let Ok(entries) = fs::read_dir(&d) else { continue };
        for e in entries.flatten() {
            let p = e.path();
            if p.is_dir() {
                stack.push(p);
            } else if p.file_name().is_some_and(|n| n != "manifest.json" || p.parent() != Some(dir)) {
                out.push(p.strip_prefix(dir).unwrap().to_path_buf());
            }
        }
    }
    out.sort();
    out
}

/// Re-runs each mode into a fresh directory and byte-compares every output
/// except the top-level manifest, which records wall-clock time.
fn determinism(runs: &Path) -> Outcome {
    let cases = [
        ("verify-theorems", "verify-theorems.json", "vt"),
        ("bounds", "bounds.json", "bounds"),
        ("train", "train-cl.json", "train-cl"),
        ("eval", "eval-untrained.json", "eval"),
        ("mi-convergence", "mi-convergence.json", "mi"),
        ("gen-data", "gen-data.json", "gen"),
    ];
    let mut pass = true;
    let mut lines = Vec::new();
    for (mode, config, dir) in cases {
        let first = runs.join(dir);
        if !first.join("manifest.json").exists() {
            mvinfo(mode, config, &first);
        }
        let second = runs.join(format!("{dir}-rerun"));
        mvinfo(mode, config, &second);
        let (a, b) = (files_under(&first), files_under(&second));
        let mut same = !a.is_empty() && a == b;
        for f in &a {
            same &= fs::read(first.join(f)).ok() == fs::read(second.join(f)).ok();
        }
        let m1 = read_json(&first.join("manifest.json"));
        let m2 = read_json(&second.join("manifest.json"));
        same &= m1["config_hash"] == m2["config_hash"] && m1["checks"] == m2["checks"];
        pass &= same;
        lines.push(format!("{mode}: {} files {}", a.len(), if same { "identical" } else { "DIFFER" }));
    }
    outcome(pass, lines.join("; "))
}

fn main() {
    let total = Instant::now();
    let runs_dir = tempfile::TempDir::new().expect("temp dir");
    let runs = runs_dir.path();
    let mut results: Vec<(u32, &str, Outcome)> = Vec::new();
    let mut report = |id: u32, title: &'static str, o: Outcome| {
        println!("[{}] {id:>2}. {title}", if o.pass { "PASS" } else { "FAIL" });
        println!("      {}", o.detail);
        results.push((id, title, o));
    };

    let random = TableFamily {
        tables: THEOREM_TABLES,
        ..TableFamily::default()
    };
    let start = Instant::now();
    let theorems = theorem_suite(&random, SUITE_SEED).expect("theorem suite runs");
    let suite_secs = start.elapsed().as_secs_f64();
    let structured = theorem_suite(
        &TableFamily {
            family: Family::Structured,
            ..random.clone()
        },
        SUITE_SEED,
    )
    .expect("structured suite runs");

    report(
        1,
        "task-relevant information chain on 500 random tables",
        group_outcome(theorems.group("task_relevant_information"), Some((suite_secs, SUITE_BUDGET_SECS))),
    );
    let mut gap = group_outcome(theorems.group("compression_gap"), None);
    gap.detail.push_str(&format!(
        "\n      structured family diagnostic: {}",
        if structured.group("compression_gap").is_some_and(|g| g.pass) { "all checks hold" } else { "violated" }
    ));
    report(2, "compression-gap chain on 500 random tables", gap);
    report(
        3,
        "encoder sees only X: I(Z;T|X), I(Z;S|X) <= 1e-10",
        group_outcome(theorems.group("encoder_sees_only_x"), None),
    );
    report(
        4,
        "H(Z|T) and I(Z;X) minimizers coincide",
        group_outcome(theorems.group("minimality_interchangeable"), None),
    );

    let bounds_family = TableFamily {
        tables: BOUNDS_TABLES,
        ..TableFamily::default()
    };
    let bounds = bounds_suite(&bounds_family, SUITE_SEED).expect("bounds suite runs");
    report(
        5,
        "Fano sandwich over every representation on 200 random tables",
        group_outcome(bounds.suite.group("fano_sandwich"), None),
    );
    report(
        6,
        "arbitrary-representation upper bound on P_e",
        group_outcome(bounds.suite.group("any_representation_upper"), None),
    );
    report(
        7,
        "self-supervised P_e interval, loose and tight",
        group_outcome(bounds.suite.group("ssl_interval"), None),
    );
    report(8, "central-difference gradient checks", gradient_checks());
    report(9, "InfoNCE value never exceeds ln n", infonce_ceiling());
    report(10, "untrained encoder 1-NN accuracy near chance", chance_band(runs));

    let cl = train_run("train-cl.json", &runs.join("train-cl"));
    report(11, "CPC training reaches 10x chance", training_smoke(&cl));
    let ip = train_run("train-cl-ip-auto.json", &runs.join("train-ip"));
    report(12, "auto-tenth IP term keeps accuracy within 0.5 pp", directional(&cl, &ip));
    report(13, "critic MI error decays like n^-1/2", convergence(runs));
    report(14, "identical reruns for every mode", determinism(runs));

    let failed: Vec<u32> = results.iter().filter(|r| !r.2.pass).map(|r| r.0).collect();
    println!(
        "\n{} of {} criteria pass; total {:.1}s",
        results.len() - failed.len(),
        results.len(),
        total.elapsed().as_secs_f64()
    );
    if !failed.is_empty() {
        println!("failing criteria: {failed:?}");
        std::process::exit(1);
    }
}
