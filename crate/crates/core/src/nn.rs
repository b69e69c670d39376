//! Dense tensors, a small MLP with hand-written reverse mode, and
//! first-order optimizers.

use std::fs;
use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::rng;

/// Norms below this are not normalized.
pub const NORM_FLOOR: f64 = 1e-12;

/// Row-major dense array of `f64`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return invalid(format!("tensor dimensions must be positive, got {shape:?}"));
        }
        let len: usize = shape.iter().product();
        if len != data.len() {
            return invalid(format!(
                "shape {shape:?} needs {len} values, got {}",
                data.len()
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Width of a matrix (product of trailing dimensions).
    pub fn cols(&self) -> usize {
        self.shape[1..].iter().product()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn scale(&self, k: f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| v * k).collect(),
        }
    }

    pub fn add_scaled(&mut self, other: &Tensor, k: f64) -> Result<()> {
        if self.shape != other.shape {
            return invalid(format!("shape mismatch {:?} vs {:?}", self.shape, other.shape));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += k * b;
        }
        Ok(())
    }

    /// Frobenius inner product.
    pub fn dot(&self, other: &Tensor) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Selects rows by index.
    pub fn gather_rows(&self, idx: &[usize]) -> Self {
        let c = self.cols();
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        let mut shape = self.shape.clone();
        shape[0] = idx.len();
        Self { shape, data }
    }
}

/// `a · bᵀ` for `a: n×k`, `b: m×k`.
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Tensor {
    let (n, m, k) = (a.rows(), b.rows(), a.cols());
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let ar = a.row(i);
        for j in 0..m {
            out[i * m + j] = dot(ar, b.row(j));
        }
    }
    debug_assert_eq!(k, b.cols());
    Tensor {
        shape: vec![n, m],
        data: out,
    }
}

/// `a · b` for `a: n×k`, `b: k×m`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let (n, k, m) = (a.rows(), a.cols(), b.cols());
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let orow = &mut out[i * m..(i + 1) * m];
        for (p, &av) in a.row(i).iter().enumerate().take(k) {
            if av != 0.0 {
                for (o, bv) in orow.iter_mut().zip(b.row(p)) {
                    *o += av * bv;
                }
            }
        }
    }
    Tensor {
        shape: vec![n, m],
        data: out,
    }
}

/// `aᵀ · b` for `a: n×k`, `b: n×m`.
pub fn matmul_tn(a: &Tensor, b: &Tensor) -> Tensor {
    let (n, k, m) = (a.rows(), a.cols(), b.cols());
    let mut out = vec![0.0; k * m];
    for i in 0..n {
        let br = b.row(i);
        for (p, &av) in a.row(i).iter().enumerate() {
            if av != 0.0 {
                for (o, bv) in out[p * m..(p + 1) * m].iter_mut().zip(br) {
                    *o += av * bv;
                }
            }
        }
    }
    Tensor {
        shape: vec![k, m],
        data: out,
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Layer widths and output normalization of an MLP.
///
/// ReLU sits between consecutive linear layers; the last layer is linear.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderSpec {
    pub widths: Vec<usize>,
    pub normalize: bool,
}

impl EncoderSpec {
    pub fn new(widths: Vec<usize>, normalize: bool) -> Result<Self> {
        let spec = Self { widths, normalize };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.len() < 2 {
            return invalid("an MLP needs at least input and output widths");
        }
        if self.widths.contains(&0) {
            return invalid("layer widths must be positive");
        }
        if self.normalize && *self.widths.last().unwrap() < 2 {
            return invalid("normalized embeddings need dimension at least 2");
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn layers(&self) -> usize {
        self.widths.len() - 1
    }

    /// Glorot-uniform weights, zero biases.
    pub fn init(&self, seed: u64) -> Params {
        let mut r = rng::seeded(seed);
        let mut tensors = Vec::with_capacity(2 * self.layers());
        for w in self.widths.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let data = (0..fan_in * fan_out)
                .map(|_| r.gen_range(-bound..=bound))
                .collect();
            tensors.push(Tensor {
                shape: vec![fan_out, fan_in],
                data,
            });
            tensors.push(Tensor::zeros(&[fan_out]));
        }
        Params { tensors }
    }

    pub fn param_count(&self) -> usize {
        self.widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    fn check(&self, params: &Params, batch: &Tensor) -> Result<()> {
        if params.tensors.len() != 2 * self.layers() {
            return invalid("parameter list does not match the spec");
        }
        for (l, w) in self.widths.windows(2).enumerate() {
            if params.tensors[2 * l].shape != [w[1], w[0]] || params.tensors[2 * l + 1].shape != [w[1]] {
                return invalid(format!("layer {l} parameters have the wrong shape"));
            }
        }
        if batch.shape.len() != 2 || batch.cols() != self.input_dim() {
            return invalid(format!(
                "batch shape {:?} does not match input width {}",
                batch.shape,
                self.input_dim()
            ));
        }
        Ok(())
    }
}

/// Parameters as `[W_0, b_0, W_1, b_1, ...]` with `W_l: out×in`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Params {
    pub tensors: Vec<Tensor>,
}

impl Params {
    pub fn zeros_like(&self) -> Self {
        Self {
            tensors: self.tensors.iter().map(|t| Tensor::zeros(&t.shape)).collect(),
        }
    }

    /// Number of tensors.
    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    pub fn add_scaled(&mut self, other: &Params, k: f64) -> Result<()> {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            a.add_scaled(b, k)?;
        }
        Ok(())
    }
}

/// Intermediate values of one forward pass.
#[derive(Debug, Clone)]
pub struct Forward {
    /// Layer inputs; `inputs[0]` is the batch.
    inputs: Vec<Tensor>,
    /// Pre-activations of each layer.
    pre: Vec<Tensor>,
    /// Row norms before normalization (empty if normalization is off).
    norms: Vec<f64>,
    pub output: Tensor,
    /// Rows whose norm fell below [`NORM_FLOOR`] and were left unscaled.
    pub degenerate_rows: Vec<usize>,
}

fn affine(x: &Tensor, w: &Tensor, b: &Tensor) -> Tensor {
    let mut out = matmul_nt(x, w);
    let m = out.cols();
    for row in out.data.chunks_mut(m) {
        for (o, bv) in row.iter_mut().zip(&b.data) {
            *o += bv;
        }
    }
    out
}

pub fn forward_cached(spec: &EncoderSpec, params: &Params, batch: &Tensor) -> Result<Forward> {
    spec.check(params, batch)?;
    let mut inputs = vec![batch.clone()];
    let mut pre = Vec::with_capacity(spec.layers());
    for l in 0..spec.layers() {
        let z = affine(&inputs[l], &params.tensors[2 * l], &params.tensors[2 * l + 1]);
        if l + 1 < spec.layers() {
            let mut a = z.clone();
            a.data.iter_mut().for_each(|v| *v = v.max(0.0));
            inputs.push(a);
        }
        pre.push(z);
    }
    let mut output = pre.last().unwrap().clone();
    let mut norms = Vec::new();
    let mut degenerate_rows = Vec::new();
    if spec.normalize {
        for i in 0..output.rows() {
            let row = output.row_mut(i);
            let n = dot(row, row).sqrt();
            norms.push(n);
            if n < NORM_FLOOR {
                degenerate_rows.push(i);
            } else {
                row.iter_mut().for_each(|v| *v /= n);
            }
        }
    }
    Ok(Forward {
        inputs,
        pre,
        norms,
        output,
        degenerate_rows,
    })
}

/// Embeddings `F(batch)`, unit-normalized per row when the spec says so.
pub fn forward(spec: &EncoderSpec, params: &Params, batch: &Tensor) -> Result<Tensor> {
    Ok(forward_cached(spec, params, batch)?.output)
}

/// Gradients of `⟨upstream, F(batch)⟩`.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub params: Params,
    pub input: Tensor,
}

pub fn backward(
    spec: &EncoderSpec,
    params: &Params,
    batch: &Tensor,
    upstream: &Tensor,
) -> Result<Gradients> {
    let fwd = forward_cached(spec, params, batch)?;
    backward_from(spec, params, &fwd, upstream)
}

/// Backward pass reusing a cached forward pass.
pub fn backward_from(
    spec: &EncoderSpec,
    params: &Params,
    fwd: &Forward,
    upstream: &Tensor,
) -> Result<Gradients> {
    if upstream.shape != fwd.output.shape {
        return invalid(format!(
            "upstream gradient shape {:?} does not match output {:?}",
            upstream.shape, fwd.output.shape
        ));
    }
    let mut g = upstream.clone();
    if spec.normalize {
        // y = z/|z|  ⇒  dz = (g - (g·y) y) / |z|
        let degenerate = &fwd.degenerate_rows;
        for i in 0..g.rows() {
            if degenerate.contains(&i) {
                continue;
            }
            let y = fwd.output.row(i);
            let n = fwd.norms[i];
            let gy = dot(g.row(i), y);
            for (gv, yv) in g.row_mut(i).iter_mut().zip(y) {
                *gv = (*gv - gy * yv) / n;
            }
        }
    }
    let mut grads = params.zeros_like();
    for l in (0..spec.layers()).rev() {
        if l + 1 < spec.layers() {
            for (gv, z) in g.data.iter_mut().zip(&fwd.pre[l].data) {
                if *z <= 0.0 {
                    *gv = 0.0;
                }
            }
        }
        grads.tensors[2 * l] = matmul_tn(&g, &fwd.inputs[l]);
        let mut gb = vec![0.0; g.cols()];
        for row in g.data.chunks(g.cols()) {
            for (a, b) in gb.iter_mut().zip(row) {
                *a += b;
            }
        }
        grads.tensors[2 * l + 1] = Tensor {
            shape: vec![gb.len()],
            data: gb,
        };
        g = matmul(&g, &params.tensors[2 * l]);
    }
    Ok(Gradients {
        params: grads,
        input: g,
    })
}

/// First-order optimizer state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerState {
    Sgd {
        lr: f64,
        step: usize,
    },
    Adam {
        lr: f64,
        beta1: f64,
        beta2: f64,
        eps: f64,
        step: usize,
        #[serde(skip)]
        m: Vec<Vec<f64>>,
        #[serde(skip)]
        v: Vec<Vec<f64>>,
    },
}

impl OptimizerState {
    pub fn sgd(lr: f64) -> Result<Self> {
        if !(lr > 0.0) {
            return invalid("learning rate must be positive");
        }
        Ok(Self::Sgd { lr, step: 0 })
    }

    pub fn adam(lr: f64) -> Result<Self> {
        if !(lr > 0.0) {
            return invalid("learning rate must be positive");
        }
        Ok(Self::Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        })
    }

    pub fn steps_taken(&self) -> usize {
        match self {
            Self::Sgd { step, .. } | Self::Adam { step, .. } => *step,
        }
    }

    /// Applies one descent step `p ← p - update(g)`.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) -> Result<()> {
        if params.len() != grads.len()
            || params.iter().zip(grads).any(|(p, g)| p.shape != g.shape)
        {
            return invalid("parameter and gradient shapes differ");
        }
        let current = self.steps_taken();
        if let Some(bad) = grads.iter().position(|g| !g.is_finite()) {
            return Err(Error::Training {
                step: current,
                reason: format!("non-finite gradient in parameter tensor {bad}"),
            });
        }
        match self {
            Self::Sgd { lr, step } => {
                for (p, g) in params.iter_mut().zip(grads) {
                    for (pv, gv) in p.data.iter_mut().zip(&g.data) {
                        *pv -= *lr * gv;
                    }
                }
                *step += 1;
            }
            Self::Adam {
                lr,
                beta1,
                beta2,
                eps,
                step,
                m,
                v,
            } => {
                if m.is_empty() {
                    *m = params.iter().map(|p| vec![0.0; p.data.len()]).collect();
                    *v = m.clone();
                }
                *step += 1;
                let c1 = 1.0 - beta1.powi(*step as i32);
                let c2 = 1.0 - beta2.powi(*step as i32);
                for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
                    for (j, (pv, &gv)) in p.data.iter_mut().zip(&g.data).enumerate() {
                        m[k][j] = *beta1 * m[k][j] + (1.0 - *beta1) * gv;
                        v[k][j] = *beta2 * v[k][j] + (1.0 - *beta2) * gv * gv;
                        let mh = m[k][j] / c1;
                        let vh = v[k][j] / c2;
                        *pv -= *lr * mh / (vh.sqrt() + *eps);
                    }
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CheckpointEntry {
    file: String,
    shape: Vec<usize>,
}

/// JSON manifest of a parameter checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub spec: EncoderSpec,
    pub seed: u64,
    pub dtype: String,
    tensors: Vec<CheckpointEntry>,
}

/// Writes `manifest.json` plus one little-endian `f64` file per tensor.
pub fn save_checkpoint(dir: &Path, spec: &EncoderSpec, seed: u64, params: &Params) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut tensors = Vec::new();
    for (k, t) in params.tensors.iter().enumerate() {
        let file = format!("param_{k:03}.f64");
        let bytes: Vec<u8> = t.data.iter().flat_map(|v| v.to_le_bytes()).collect();
        fs::write(dir.join(&file), bytes)?;
        tensors.push(CheckpointEntry {
            file,
            shape: t.shape.clone(),
        });
    }
    let manifest = CheckpointManifest {
        spec: spec.clone(),
        seed,
        dtype: "f64le".into(),
        tensors,
    };
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

pub fn load_checkpoint(dir: &Path) -> Result<(CheckpointManifest, Params)> {
    let manifest: CheckpointManifest =
        serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)?;
    manifest.spec.validate()?;
    let mut tensors = Vec::new();
    for e in &manifest.tensors {
        let bytes = fs::read(dir.join(&e.file))?;
        if bytes.len() % 8 != 0 {
            return invalid(format!("{} is not a whole number of f64 values", e.file));
        }
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.push(Tensor::new(e.shape.clone(), data)?);
    }
    let params = Params { tensors };
    let probe = Tensor::zeros(&[1, manifest.spec.input_dim()]);
    manifest.spec.check(&params, &probe)?;
    Ok((manifest, params))
}
