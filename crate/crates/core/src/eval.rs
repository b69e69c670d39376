//! Evaluation of frozen embeddings and of the contrastive MI estimator.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::info::{mutual_info, JointTable};
use crate::nn::{self, dot, EncoderSpec, OptimizerState, Tensor};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub protocol: String,
    pub accuracy: f64,
    pub per_class: BTreeMap<usize, f64>,
    pub labeled_per_class: Option<usize>,
    pub seed: Option<u64>,
    pub queries: usize,
    pub classes: usize,
    pub chance: f64,
}

fn check_rows(embeddings: &Tensor, labels: &[usize]) -> Result<()> {
    if embeddings.shape().len() != 2 || embeddings.rows() != labels.len() {
        return invalid("embeddings must be an n×d matrix with one label per row");
    }
    Ok(())
}

fn per_class_accuracy(truth: &[usize], pred: &[usize]) -> BTreeMap<usize, f64> {
    let mut tally: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    for (&t, &p) in truth.iter().zip(pred) {
        let e = tally.entry(t).or_default();
        e.0 += usize::from(t == p);
        e.1 += 1;
    }
    tally
        .into_iter()
        .map(|(c, (hit, all))| (c, hit as f64 / all as f64))
        .collect()
}

fn unit_rows(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows())
        .map(|i| {
            let r = t.row(i);
            let n = dot(r, r).sqrt();
            if n > 0.0 {
                r.iter().map(|v| v / n).collect()
            } else {
                r.to_vec()
            }
        })
        .collect()
}

/// Few-shot 1-nearest-neighbour classification by cosine similarity.
///
/// For every class, `labeled_per_class` examples chosen by a seeded shuffle
/// form the support set; all remaining examples are queries. Ties go to the
/// support example with the lowest row index.
pub fn knn_cosine_eval(
    embeddings: &Tensor,
    labels: &[usize],
    labeled_per_class: usize,
    seed: u64,
) -> Result<EvalReport> {
    check_rows(embeddings, labels)?;
    if labeled_per_class == 0 {
        return invalid("labeled_per_class must be positive");
    }
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        by_class.entry(l).or_default().push(i);
    }
    let mut r = rng::seeded(seed);
    let mut support = Vec::new();
    let mut queries = Vec::new();
    for (class, rows) in &by_class {
        if rows.len() <= labeled_per_class {
            return invalid(format!(
                "class {class} has {} examples; need more than {labeled_per_class}",
                rows.len()
            ));
        }
        let mut rows = rows.clone();
        rows.shuffle(&mut r);
        support.extend_from_slice(&rows[..labeled_per_class]);
        queries.extend_from_slice(&rows[labeled_per_class..]);
    }
    support.sort_unstable();
    queries.sort_unstable();
    let unit = unit_rows(embeddings);
    let pred: Vec<usize> = queries
        .iter()
        .map(|&q| {
            let mut best = (f64::NEG_INFINITY, support[0]);
            for &s in &support {
                let c = dot(&unit[q], &unit[s]);
                if c > best.0 {
                    best = (c, s);
                }
            }
            labels[best.1]
        })
        .collect();
    let truth: Vec<usize> = queries.iter().map(|&q| labels[q]).collect();
    let hits = truth.iter().zip(&pred).filter(|(a, b)| a == b).count();
    Ok(EvalReport {
        protocol: "knn_cosine".into(),
        accuracy: hits as f64 / queries.len() as f64,
        per_class: per_class_accuracy(&truth, &pred),
        labeled_per_class: Some(labeled_per_class),
        seed: Some(seed),
        queries: queries.len(),
        classes: by_class.len(),
        chance: 1.0 / by_class.len() as f64,
    })
}

/// Full-batch gradient descent steps of the linear probe.
pub const LINEAR_STEPS: usize = 2000;
pub const LINEAR_LR: f64 = 0.1;

/// Multinomial logistic regression on frozen features.
pub fn linear_eval(
    train: &Tensor,
    train_labels: &[usize],
    test: &Tensor,
    test_labels: &[usize],
) -> Result<EvalReport> {
    check_rows(train, train_labels)?;
    check_rows(test, test_labels)?;
    if train.cols() != test.cols() {
        return invalid("train and test embeddings differ in width");
    }
    let mut classes: Vec<usize> = train_labels.to_vec();
    classes.sort_unstable();
    classes.dedup();
    if classes.len() < 2 {
        return invalid("linear evaluation needs at least two classes");
    }
    let index: BTreeMap<usize, usize> = classes.iter().enumerate().map(|(k, &c)| (c, k)).collect();
    let (n, d, k) = (train.rows(), train.cols(), classes.len());
    let y: Vec<usize> = train_labels.iter().map(|l| index[l]).collect();
    let mut w = vec![0.0; k * d];
    let mut b = vec![0.0; k];
    let mut logits = vec![0.0; k];
    for _ in 0..LINEAR_STEPS {
        let mut gw = vec![0.0; k * d];
        let mut gb = vec![0.0; k];
        for i in 0..n {
            let x = train.row(i);
            for c in 0..k {
                logits[c] = b[c] + dot(&w[c * d..(c + 1) * d], x);
            }
            let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
            for c in 0..k {
                let p = (logits[c] - m).exp() / z - f64::from(u8::from(c == y[i]));
                gb[c] += p / n as f64;
                for (g, xv) in gw[c * d..(c + 1) * d].iter_mut().zip(x) {
                    *g += p * xv / n as f64;
                }
            }
        }
        w.iter_mut().zip(&gw).for_each(|(a, g)| *a -= LINEAR_LR * g);
        b.iter_mut().zip(&gb).for_each(|(a, g)| *a -= LINEAR_LR * g);
    }
    let pred: Vec<usize> = (0..test.rows())
        .map(|i| {
            let x = test.row(i);
            let mut best = (f64::NEG_INFINITY, 0);
            for c in 0..k {
                let l = b[c] + dot(&w[c * d..(c + 1) * d], x);
                if l > best.0 {
                    best = (l, c);
                }
            }
            classes[best.1]
        })
        .collect();
    let hits = pred.iter().zip(test_labels).filter(|(a, b)| a == b).count();
    let test_classes = {
        let mut t = test_labels.to_vec();
        t.sort_unstable();
        t.dedup();
        t.len()
    };
    Ok(EvalReport {
        protocol: "linear".into(),
        accuracy: hits as f64 / test_labels.len() as f64,
        per_class: per_class_accuracy(test_labels, &pred),
        labeled_per_class: None,
        seed: None,
        queries: test_labels.len(),
        classes: test_classes,
        chance: 1.0 / test_classes as f64,
    })
}

/// Splits rows into probe-train and probe-test halves per class (seeded)
/// and runs [`linear_eval`].
pub fn linear_eval_split(embeddings: &Tensor, labels: &[usize], seed: u64) -> Result<EvalReport> {
    check_rows(embeddings, labels)?;
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        by_class.entry(l).or_default().push(i);
    }
    let mut r = rng::seeded(seed);
    let (mut tr, mut te) = (Vec::new(), Vec::new());
    for (class, mut rows) in by_class {
        if rows.len() < 2 {
            return invalid(format!("class {class} needs at least two examples"));
        }
        rows.shuffle(&mut r);
        let half = rows.len() / 2;
        tr.extend_from_slice(&rows[..half]);
        te.extend_from_slice(&rows[half..]);
    }
    tr.sort_unstable();
    te.sort_unstable();
    let pick = |idx: &[usize]| idx.iter().map(|&i| labels[i]).collect::<Vec<_>>();
    let mut report = linear_eval(
        &embeddings.gather_rows(&tr),
        &pick(&tr),
        &embeddings.gather_rows(&te),
        &pick(&te),
    )?;
    report.seed = Some(seed);
    Ok(report)
}

/// InfoNCE over a full batch of discrete pairs, evaluated by grouping.
///
/// `counts[a][b]` is the number of sample pairs `(a, b)`; `scores[a][b]`
/// the critic value. The result equals InfoNCE on the `n×n` matrix
/// `s_ij = f(a_i, b_j)`. Returns the value and `∂value/∂scores`.
pub fn grouped_info_nce(counts: &[Vec<u64>], scores: &[Vec<f64>]) -> Result<(f64, Vec<Vec<f64>>)> {
    let a_n = counts.len();
    let b_n = counts.first().map_or(0, |r| r.len());
    if a_n == 0 || b_n == 0 || scores.len() != a_n || scores.iter().any(|r| r.len() != b_n) {
        return invalid("counts and scores must be matching non-empty matrices");
    }
    let n: u64 = counts.iter().flatten().sum();
    if n < 2 {
        return invalid("InfoNCE needs at least two samples");
    }
    let nf = n as f64;
    let col: Vec<f64> = (0..b_n)
        .map(|b| counts.iter().map(|r| r[b]).sum::<u64>() as f64)
        .collect();
    let mut value = 0.0;
    let mut grad = vec![vec![0.0; b_n]; a_n];
    for a in 0..a_n {
        let row_n: f64 = counts[a].iter().sum::<u64>() as f64;
        if row_n == 0.0 {
            continue;
        }
        let m = (0..b_n)
            .filter(|&b| col[b] > 0.0)
            .map(|b| scores[a][b])
            .fold(f64::NEG_INFINITY, f64::max);
        let weights: Vec<f64> = (0..b_n).map(|b| col[b] * (scores[a][b] - m).exp()).collect();
        let z: f64 = weights.iter().sum();
        let lse = m + (z / nf).ln();
        for b in 0..b_n {
            let c = counts[a][b] as f64;
            value += c * (scores[a][b] - lse) / nf;
            grad[a][b] = c / nf - row_n / nf * weights[b] / z;
        }
    }
    Ok((value, grad))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriticConfig {
    pub width: usize,
    pub lr: f64,
    pub max_steps: usize,
    /// Stop once the objective improves by less than this over `patience` steps.
    pub tol: f64,
    pub patience: usize,
}

impl Default for CriticConfig {
    fn default() -> Self {
        Self {
            width: 64,
            lr: 0.01,
            max_steps: 3000,
            tol: 1e-9,
            patience: 100,
        }
    }
}

impl CriticConfig {
    /// Two hidden ReLU layers over one-hot `(a, b)`, scalar output.
    pub fn spec(&self, a_n: usize, b_n: usize) -> Result<EncoderSpec> {
        EncoderSpec::new(vec![a_n + b_n, self.width, self.width, 1], false)
    }
}

/// Trains the critic on one sample and returns the InfoNCE estimate.
pub fn critic_estimate(counts: &[Vec<u64>], config: &CriticConfig, seed: u64) -> Result<f64> {
    let (a_n, b_n) = (counts.len(), counts[0].len());
    let spec = config.spec(a_n, b_n)?;
    let mut params = spec.init(seed);
    let mut onehot = vec![0.0; a_n * b_n * (a_n + b_n)];
    for a in 0..a_n {
        for b in 0..b_n {
            let row = (a * b_n + b) * (a_n + b_n);
            onehot[row + a] = 1.0;
            onehot[row + a_n + b] = 1.0;
        }
    }
    let inputs = Tensor::matrix(a_n * b_n, a_n + b_n, onehot)?;
    let mut opt = OptimizerState::adam(config.lr)?;
    let eval = |params: &nn::Params| -> Result<(f64, Tensor, nn::Forward)> {
        let fwd = nn::forward_cached(&spec, params, &inputs)?;
        let scores: Vec<Vec<f64>> = (0..a_n)
            .map(|a| fwd.output.data()[a * b_n..(a + 1) * b_n].to_vec())
            .collect();
        let (v, g) = grouped_info_nce(counts, &scores)?;
        // Descend on the negated objective.
        let up = Tensor::matrix(a_n * b_n, 1, g.concat().iter().map(|x| -x).collect())?;
        Ok((v, up, fwd))
    };
    let mut history = Vec::with_capacity(config.max_steps);
    for step in 0..config.max_steps {
        let (v, up, fwd) = eval(&params)?;
        history.push(v);
        if step >= config.patience && v - history[step - config.patience] < config.tol {
            break;
        }
        let grads = nn::backward_from(&spec, &params, &fwd, &up)?;
        opt.step(&mut params.tensors, &grads.params.tensors)?;
    }
    Ok(eval(&params)?.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergencePoint {
    pub n: usize,
    pub mean_error: f64,
    pub std_error: f64,
    pub mean_estimate: f64,
    pub max_estimate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceReport {
    pub true_mi: f64,
    pub points: Vec<ConvergencePoint>,
    /// Least-squares slope of `ln(mean_error)` against `ln(n)`.
    pub slope: f64,
    /// Critic parameter count `d`.
    pub critic_params: usize,
    pub repeats: usize,
    pub seed: u64,
}

impl ConvergenceReport {
    /// Number of grid steps where the mean error went up.
    pub fn inversions(&self) -> usize {
        self.points
            .windows(2)
            .filter(|w| w[1].mean_error > w[0].mean_error)
            .count()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("n,mean_error,std\n");
        for p in &self.points {
            out.push_str(&format!("{},{},{}\n", p.n, p.mean_error, p.std_error));
        }
        out
    }
}

/// Joint table of two fair bits where the second flips the first with
/// probability `flip`.
pub fn binary_symmetric_pair(flip: f64) -> Result<JointTable> {
    if !(0.0..=1.0).contains(&flip) {
        return invalid("flip probability must lie in [0, 1]");
    }
    JointTable::new(
        vec![
            crate::info::Alphabet::new("A", 2)?,
            crate::info::Alphabet::new("B", 2)?,
        ],
        vec![(1.0 - flip) / 2.0, flip / 2.0, flip / 2.0, (1.0 - flip) / 2.0],
    )
}

fn sample_counts(table: &JointTable, n: usize, r: &mut rng::Rng) -> Vec<Vec<u64>> {
    let (a_n, b_n) = (table.size(0), table.size(1));
    let cdf: Vec<f64> = table
        .probs()
        .iter()
        .scan(0.0, |acc, p| {
            *acc += p;
            Some(*acc)
        })
        .collect();
    let mut counts = vec![vec![0u64; b_n]; a_n];
    for _ in 0..n {
        let u: f64 = r.gen();
        let cell = cdf.iter().position(|&c| u < c).unwrap_or(cdf.len() - 1);
        counts[cell / b_n][cell % b_n] += 1;
    }
    counts
}

fn slope(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    sxy / sxx
}

/// Estimation error of the trained contrastive critic as the sample size grows.
pub fn mi_convergence(
    table: &JointTable,
    n_grid: &[usize],
    repeats: usize,
    critic: &CriticConfig,
    seed: u64,
) -> Result<ConvergenceReport> {
    if table.rank() != 2 {
        return invalid("mi_convergence expects a two-axis table");
    }
    if n_grid.len() < 2 || n_grid.windows(2).any(|w| w[1] <= w[0]) {
        return invalid("n_grid needs at least two strictly increasing sizes");
    }
    if repeats == 0 {
        return invalid("repeats must be positive");
    }
    let true_mi = mutual_info(table, &[0], &[1])?;
    let smallest = n_grid[0];
    if true_mi >= (smallest as f64).ln() {
        return invalid(format!(
            "true MI {true_mi:.4} nats is not below ln n = {:.4} for n = {smallest}; \
             InfoNCE cannot exceed ln n",
            (smallest as f64).ln()
        ));
    }
    let jobs: Vec<(usize, usize)> = n_grid
        .iter()
        .flat_map(|&n| (0..repeats).map(move |k| (n, k)))
        .collect();
    let estimates = jobs
        .par_iter()
        .map(|&(n, k)| {
            let mut r = rng::derived(seed, &[n as u64, k as u64]);
            let counts = sample_counts(table, n, &mut r);
            critic_estimate(&counts, critic, r.gen())
        })
        .collect::<Result<Vec<f64>>>()?;
    let points: Vec<ConvergencePoint> = n_grid
        .iter()
        .enumerate()
        .map(|(g, &n)| {
            let est = &estimates[g * repeats..(g + 1) * repeats];
            let errs: Vec<f64> = est.iter().map(|e| (e - true_mi).abs()).collect();
            let mean = errs.iter().sum::<f64>() / repeats as f64;
            let var = errs.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / repeats as f64;
            ConvergencePoint {
                n,
                mean_error: mean,
                std_error: var.sqrt(),
                mean_estimate: est.iter().sum::<f64>() / repeats as f64,
                max_estimate: est.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            }
        })
        .collect();
    let xs: Vec<f64> = points.iter().map(|p| (p.n as f64).ln()).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.mean_error.max(1e-300).ln()).collect();
    Ok(ConvergenceReport {
        true_mi,
        slope: slope(&xs, &ys),
        points,
        critic_params: critic.spec(table.size(0), table.size(1))?.param_count(),
        repeats,
        seed,
    })
}
