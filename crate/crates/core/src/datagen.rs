//! Synthetic multi-view data.
//!
//! Discrete tables over `(T, X, S)` are built from explicit factors so that
//! the redundancy `ε_info = I(X;T|S)` is controlled by one corruption
//! probability. Continuous datasets put class content and view-private style
//! in orthogonal subspaces of the ambient space.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::info::{conditional_mutual_info, txs_axes, Alphabet, JointTable};
use crate::nn::Tensor;
use crate::rng;

/// Factorized discrete world.
///
/// `X = (T, shared, x_style)` and `S = (C, shared, s_style)` where the
/// content `C` copies `T` with probability `1 - p` and is redrawn uniformly
/// otherwise. The shared style is seen by both views and produces the
/// compression gap `I(X;S|T)`; the private styles are independent noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscreteSpec {
    pub t_size: usize,
    #[serde(default = "one")]
    pub shared_style: usize,
    #[serde(default = "one")]
    pub x_style: usize,
    #[serde(default = "one")]
    pub s_style: usize,
    pub corruption: f64,
    /// Every factor probability is an integer multiple of `1/resolution`.
    #[serde(default = "default_resolution")]
    pub resolution: u64,
    #[serde(default)]
    pub seed: u64,
}

fn one() -> usize {
    1
}

fn default_resolution() -> u64 {
    8
}

impl DiscreteSpec {
    pub fn validate(&self) -> Result<()> {
        if self.t_size < 2 {
            return invalid("|T| must be at least 2");
        }
        if self.x_size() < 2 || self.s_size() < 2 {
            return invalid("|X| and |S| must be at least 2");
        }
        if [self.shared_style, self.x_style, self.s_style].contains(&0) {
            return invalid("style cardinalities must be positive");
        }
        if !(0.0..=1.0).contains(&self.corruption) {
            return invalid(format!("corruption {} outside [0, 1]", self.corruption));
        }
        if self.resolution == 0 {
            return invalid("resolution must be positive");
        }
        Ok(())
    }

    pub fn x_size(&self) -> usize {
        self.t_size * self.shared_style * self.x_style
    }

    pub fn s_size(&self) -> usize {
        self.t_size * self.shared_style * self.s_style
    }

    /// Corruption rounded to the weight grid, as `k / resolution`.
    pub fn corruption_steps(&self) -> u64 {
        (self.corruption * self.resolution as f64).round() as u64
    }
}

fn weights(r: &mut rng::Rng, n: usize, resolution: u64) -> Vec<u64> {
    (0..n).map(|_| r.gen_range(1..=resolution)).collect()
}

/// Integer weights of the `(T, X, S)` table described by `spec`.
pub fn discrete_weights(spec: &DiscreteSpec) -> Result<(Vec<Alphabet>, Vec<u64>)> {
    spec.validate()?;
    let mut r = rng::seeded(spec.seed);
    let (t_n, sh, xs, ss) = (spec.t_size, spec.shared_style, spec.x_style, spec.s_style);
    let pt = weights(&mut r, t_n, spec.resolution);
    let psh = weights(&mut r, sh, spec.resolution);
    let pxs = weights(&mut r, xs, spec.resolution);
    let pss = weights(&mut r, ss, spec.resolution);
    let k = spec.corruption_steps();
    let res = spec.resolution;
    // P(c|t) ∝ (res - k)·|T|·[c = t] + k
    let content = |t: usize, c: usize| (res - k) * t_n as u64 * u64::from(c == t) + k;

    let (x_n, s_n) = (spec.x_size(), spec.s_size());
    let mut w = vec![0u64; t_n * x_n * s_n];
    for t in 0..t_n {
        for b in 0..sh {
            for u in 0..xs {
                let x = (t * sh + b) * xs + u;
                for c in 0..t_n {
                    for v in 0..ss {
                        let s = (c * sh + b) * ss + v;
                        w[(t * x_n + x) * s_n + s] =
                            pt[t] * psh[b] * pxs[u] * pss[v] * content(t, c);
                    }
                }
            }
        }
    }
    let axes = vec![
        Alphabet::new("T", t_n)?,
        Alphabet::new("X", x_n)?,
        Alphabet::new("S", s_n)?,
    ];
    Ok((axes, w))
}

pub fn gen_discrete(spec: &DiscreteSpec) -> Result<JointTable> {
    let (axes, w) = discrete_weights(spec)?;
    JointTable::from_weights(axes, &w)
}

/// Unstructured table with every cell weight uniform in `1..=max_weight`.
pub fn random_table(
    r: &mut rng::Rng,
    t_size: usize,
    x_size: usize,
    s_size: usize,
    max_weight: u64,
) -> Result<(JointTable, Vec<u64>)> {
    if max_weight == 0 {
        return invalid("max_weight must be positive");
    }
    let w: Vec<u64> = (0..t_size * x_size * s_size)
        .map(|_| r.gen_range(1..=max_weight))
        .collect();
    let axes = vec![
        Alphabet::new("T", t_size)?,
        Alphabet::new("X", x_size)?,
        Alphabet::new("S", s_size)?,
    ];
    Ok((JointTable::from_weights(axes, &w)?, w))
}

/// `ε_info = I(X;T|S)`.
pub fn measure_epsilon_info(table: &JointTable) -> Result<f64> {
    let (t, x, s) = txs_axes(table)?;
    conditional_mutual_info(table, &[x], &[t], &[s])
}

/// How the self-supervised signal is paired with an input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairStrategy {
    /// The signal is another example of the same class.
    SameClass,
    /// The signal re-renders the same instance with fresh style and noise.
    SameInstanceAugmented,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ContinuousSpec {
    pub classes: usize,
    pub test_classes: usize,
    pub dim: usize,
    pub style_dim: usize,
    pub mean_scale: f64,
    /// Per-instance content jitter around the class mean.
    pub instance_scale: f64,
    pub style_scale_x: f64,
    pub style_scale_s: f64,
    pub noise_scale: f64,
    pub per_class: usize,
    pub seed: u64,
}

impl Default for ContinuousSpec {
    fn default() -> Self {
        Self {
            classes: 50,
            test_classes: 25,
            dim: 32,
            style_dim: 24,
            mean_scale: 1.0,
            instance_scale: 0.2,
            style_scale_x: 6.0,
            style_scale_s: 6.0,
            noise_scale: 0.1,
            per_class: 40,
            seed: 0,
        }
    }
}

impl ContinuousSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 || self.dim < 2 {
            return invalid("need at least 2 classes and 2 dimensions");
        }
        if self.test_classes == 0 || self.test_classes >= self.classes {
            return invalid("test_classes must be between 1 and classes - 1");
        }
        if self.style_dim >= self.dim {
            return invalid("style_dim must leave at least one content dimension");
        }
        let scales = [
            self.mean_scale,
            self.instance_scale,
            self.style_scale_x,
            self.style_scale_s,
            self.noise_scale,
        ];
        if scales.iter().any(|s| !s.is_finite() || *s < 0.0) {
            return invalid("scales must be finite and nonnegative");
        }
        if self.per_class < 2 {
            return invalid("per_class must be at least 2");
        }
        Ok(())
    }

    pub fn content_dim(&self) -> usize {
        self.dim - self.style_dim
    }
}

/// Inputs `x`, signals `s` and labels of one split.
#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub x: Tensor,
    pub s: Tensor,
    pub labels: Vec<usize>,
}

impl Split {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn class_count(&self) -> usize {
        let mut seen: Vec<usize> = self.labels.clone();
        seen.sort_unstable();
        seen.dedup();
        seen.len()
    }
}

/// Train and test splits over disjoint class sets.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train: Split,
    pub test: Split,
    pub strategy: PairStrategy,
}

/// Orthonormal columns via Gram–Schmidt on a Gaussian matrix.
fn orthonormal_basis(r: &mut rng::Rng, dim: usize) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(dim);
    while basis.len() < dim {
        let mut v: Vec<f64> = (0..dim).map(|_| r.sample(StandardNormal)).collect();
        for b in &basis {
            let p: f64 = v.iter().zip(b).map(|(a, c)| a * c).sum();
            v.iter_mut().zip(b).for_each(|(a, c)| *a -= p * c);
        }
        let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if n > 1e-8 {
            basis.push(v.into_iter().map(|a| a / n).collect());
        }
    }
    basis
}

struct Renderer<'a> {
    spec: &'a ContinuousSpec,
    content: &'a [Vec<f64>],
    style: &'a [Vec<f64>],
}

impl Renderer<'_> {
    fn normal(r: &mut rng::Rng) -> f64 {
        r.sample(StandardNormal)
    }

    /// Content vector in ambient coordinates from content-space coefficients.
    fn lift(&self, coef: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.spec.dim];
        for (c, b) in coef.iter().zip(self.content) {
            out.iter_mut().zip(b).for_each(|(o, v)| *o += c * v);
        }
        out
    }

    fn view(&self, r: &mut rng::Rng, content: &[f64], style_scale: f64) -> Vec<f64> {
        let mut out = content.to_vec();
        for b in self.style {
            let u = style_scale * Self::normal(r);
            out.iter_mut().zip(b).for_each(|(o, v)| *o += u * v);
        }
        for o in out.iter_mut() {
            *o += self.spec.noise_scale * Self::normal(r);
        }
        out
    }
}

/// Samples a dataset; train and test classes are disjoint.
pub fn gen_continuous(spec: &ContinuousSpec, strategy: PairStrategy) -> Result<Dataset> {
    spec.validate()?;
    let mut r = rng::seeded(spec.seed);
    let basis = orthonormal_basis(&mut r, spec.dim);
    let (content, style) = basis.split_at(spec.content_dim());
    let render = Renderer {
        spec,
        content,
        style,
    };
    let means: Vec<Vec<f64>> = (0..spec.classes)
        .map(|_| {
            (0..spec.content_dim())
                .map(|_| spec.mean_scale * Renderer::normal(&mut r))
                .collect()
        })
        .collect();
    let mut order: Vec<usize> = (0..spec.classes).collect();
    order.shuffle(&mut r);
    let (test_cls, train_cls) = order.split_at(spec.test_classes);
    let mut test_cls = test_cls.to_vec();
    let mut train_cls = train_cls.to_vec();
    test_cls.sort_unstable();
    train_cls.sort_unstable();

    let mut build = |classes: &[usize]| -> Result<Split> {
        let mut xs = Vec::new();
        let mut instances = Vec::new();
        let mut labels = Vec::new();
        for &c in classes {
            for _ in 0..spec.per_class {
                let coef: Vec<f64> = means[c]
                    .iter()
                    .map(|m| m + spec.instance_scale * Renderer::normal(&mut r))
                    .collect();
                let inst = render.lift(&coef);
                xs.push(render.view(&mut r, &inst, spec.style_scale_x));
                instances.push(inst);
                labels.push(c);
            }
        }
        let mut ss = Vec::with_capacity(xs.len());
        for (i, &c) in labels.iter().enumerate() {
            let source = match strategy {
                PairStrategy::SameInstanceAugmented => i,
                PairStrategy::SameClass => {
                    // Another instance of the same class; classes are contiguous.
                    let start = i - i % spec.per_class;
                    let mut j = start + r.gen_range(0..spec.per_class - 1);
                    if j >= i {
                        j += 1;
                    }
                    debug_assert_eq!(labels[j], c);
                    j
                }
            };
            ss.push(render.view(&mut r, &instances[source], spec.style_scale_s));
        }
        let n = labels.len();
        Ok(Split {
            x: Tensor::matrix(n, spec.dim, xs.concat())?,
            s: Tensor::matrix(n, spec.dim, ss.concat())?,
            labels,
        })
    };
    let train = build(&train_cls)?;
    let test = build(&test_cls)?;
    Ok(Dataset {
        train,
        test,
        strategy,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitFiles {
    pub rows: usize,
    pub x: String,
    pub s: String,
    pub labels: String,
}

/// Manifest of a dataset on disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub spec: ContinuousSpec,
    pub strategy: PairStrategy,
    pub rng: String,
    pub dim: usize,
    pub float_dtype: String,
    pub label_dtype: String,
    pub train: SplitFiles,
    pub test: SplitFiles,
}

fn f64_bytes(v: &[f64]) -> Vec<u8> {
    v.iter().flat_map(|x| x.to_le_bytes()).collect()
}

/// Writes `dataset.json` plus raw little-endian `f64` matrices and `u32` labels.
pub fn write_dataset(dir: &Path, spec: &ContinuousSpec, data: &Dataset) -> Result<DatasetManifest> {
    fs::create_dir_all(dir)?;
    let write_split = |name: &str, split: &Split| -> Result<SplitFiles> {
        let files = SplitFiles {
            rows: split.len(),
            x: format!("{name}_x.f64"),
            s: format!("{name}_s.f64"),
            labels: format!("{name}_labels.u32"),
        };
        fs::write(dir.join(&files.x), f64_bytes(split.x.data()))?;
        fs::write(dir.join(&files.s), f64_bytes(split.s.data()))?;
        let lb: Vec<u8> = split
            .labels
            .iter()
            .flat_map(|&l| (l as u32).to_le_bytes())
            .collect();
        fs::write(dir.join(&files.labels), lb)?;
        Ok(files)
    };
    let manifest = DatasetManifest {
        spec: spec.clone(),
        strategy: data.strategy,
        rng: rng::ALGORITHM.into(),
        dim: spec.dim,
        float_dtype: "f64le".into(),
        label_dtype: "u32le".into(),
        train: write_split("train", &data.train)?,
        test: write_split("test", &data.test)?,
    };
    fs::write(dir.join("dataset.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

pub fn read_dataset(dir: &Path) -> Result<(DatasetManifest, Dataset)> {
    let manifest: DatasetManifest =
        serde_json::from_str(&fs::read_to_string(dir.join("dataset.json"))?)?;
    let read_f64 = |name: &str| -> Result<Vec<f64>> {
        Ok(fs::read(dir.join(name))?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    };
    let read_split = |f: &SplitFiles| -> Result<Split> {
        let labels = fs::read(dir.join(&f.labels))?
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()) as usize)
            .collect::<Vec<_>>();
        if labels.len() != f.rows {
            return invalid(format!("{} holds {} labels, expected {}", f.labels, labels.len(), f.rows));
        }
        Ok(Split {
            x: Tensor::matrix(f.rows, manifest.dim, read_f64(&f.x)?)?,
            s: Tensor::matrix(f.rows, manifest.dim, read_f64(&f.s)?)?,
            labels,
        })
    };
    let data = Dataset {
        train: read_split(&manifest.train)?,
        test: read_split(&manifest.test)?,
        strategy: manifest.strategy,
    };
    Ok((manifest, data))
}
