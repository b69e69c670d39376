//! Minibatch trainer for the composite self-supervised objective.
//!
//! Objectives are maximized; the trainer descends on their negation.

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::datagen::{Dataset, Split};
use crate::error::{invalid, Result};
use crate::eval::{knn_cosine_eval, EvalReport};
use crate::nn::{self, EncoderSpec, OptimizerState, Params, Tensor};
use crate::objectives::{
    auto_tenth_ip_weight, composite_loss, cpc_loss, fp_loss, ip_loss, js_loss, Components, Decoder,
    FpFlavor, LossOutput, LossWeights, PairBatch, Projection,
};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClKind {
    Cpc,
    Js,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClConfig {
    pub weight: f64,
    pub kind: ClKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FpConfig {
    pub weight: f64,
    pub flavor: FpFlavor,
}

/// Either a fixed `weight` or `auto_tenth: true`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IpConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weight: Option<f64>,
    #[serde(default)]
    pub auto_tenth: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cl: Option<ClConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fp: Option<FpConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ip: Option<IpConfig>,
}

impl LossConfig {
    /// Weights with `λ_IP` left at zero when it is to be set automatically.
    fn base_weights(&self) -> Result<(LossWeights, bool)> {
        let cl = self.cl.as_ref().map_or(0.0, |c| c.weight);
        let fp = self.fp.as_ref().map_or(0.0, |c| c.weight);
        let (ip, auto) = match &self.ip {
            None => (0.0, false),
            Some(IpConfig { weight: Some(_), auto_tenth: true }) => {
                return invalid("loss.ip sets both a weight and auto_tenth");
            }
            Some(IpConfig { weight: Some(w), .. }) => (*w, false),
            Some(IpConfig { weight: None, auto_tenth: true }) => (0.0, true),
            Some(IpConfig { weight: None, auto_tenth: false }) => {
                return invalid("loss.ip needs a weight or auto_tenth: true");
            }
        };
        let weights = LossWeights { cl, fp, ip };
        // Validate with a stand-in λ_IP so IP-only auto configs are rejected too.
        LossWeights { ip: if auto { 1.0 } else { ip }, ..weights }.validate()?;
        Ok((weights, auto))
    }

    pub fn validate(&self) -> Result<()> {
        self.base_weights().map(|_| ())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    #[serde(default = "default_optimizer")]
    pub kind: OptimizerKind,
    pub lr: f64,
    pub steps: usize,
    pub batch_size: usize,
}

fn default_optimizer() -> OptimizerKind {
    OptimizerKind::Adam
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    Identity,
    Linear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden: Vec<usize>,
    pub embedding_dim: usize,
    /// One encoder for both views, or one per view.
    pub shared: bool,
    pub head: HeadKind,
    /// Hidden widths of the forward-prediction decoder.
    pub decoder_hidden: Vec<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden: vec![64],
            embedding_dim: 32,
            shared: true,
            head: HeadKind::Identity,
            decoder_hidden: vec![64],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default)]
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub optimizer: OptimizerConfig,
    /// Run the few-shot evaluation every this many steps; 0 evaluates only at the end.
    #[serde(default)]
    pub eval_every: usize,
    #[serde(default = "default_labeled")]
    pub labeled_per_class: usize,
}

fn default_labeled() -> usize {
    5
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        let o = &self.optimizer;
        if !(o.lr > 0.0) || o.steps == 0 || o.batch_size < 2 {
            return invalid("optimizer needs lr > 0, steps > 0 and batch_size >= 2");
        }
        if self.model.embedding_dim == 0 || self.model.hidden.contains(&0) {
            return invalid("model widths must be positive");
        }
        Ok(())
    }
}

/// One logged optimization step; losses carry the maximization sign.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub loss_cl: f64,
    pub loss_fp: f64,
    pub loss_ip: f64,
    pub eval_acc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub encoder: EncoderSpec,
    pub params_x: Params,
    pub params_s: Option<Params>,
    pub head: Projection,
    pub decoder: Option<Decoder>,
}

/// The input-view encoder the trainer starts from for `seed`.
pub fn input_encoder(model: &ModelConfig, input_dim: usize, seed: u64) -> Result<(EncoderSpec, Params)> {
    let mut widths = vec![input_dim];
    widths.extend_from_slice(&model.hidden);
    widths.push(model.embedding_dim);
    let spec = EncoderSpec::new(widths, true)?;
    let params = spec.init(rng::derived(seed, &[0]).gen_seed());
    Ok((spec, params))
}

impl Model {
    pub fn init(config: &TrainConfig, input_dim: usize, seed: u64) -> Result<Self> {
        let m = &config.model;
        let (encoder, params_x) = input_encoder(m, input_dim, seed)?;
        let params_s = (!m.shared).then(|| encoder.init(rng::derived(seed, &[1]).gen_seed()));
        let head = match m.head {
            HeadKind::Identity => Projection::Identity,
            HeadKind::Linear => {
                let spec = EncoderSpec::new(vec![m.embedding_dim, m.embedding_dim], false)?;
                let mut p = spec.init(rng::derived(seed, &[2]).gen_seed());
                Projection::Linear {
                    weight: p.tensors.swap_remove(0),
                }
            }
        };
        let decoder = match &config.loss.fp {
            Some(fp) if fp.weight > 0.0 => {
                let mut widths = vec![m.embedding_dim];
                widths.extend_from_slice(&m.decoder_hidden);
                widths.push(input_dim);
                let spec = EncoderSpec::new(widths, false)?;
                let params = spec.init(rng::derived(seed, &[3]).gen_seed());
                Some(Decoder { spec, params })
            }
            _ => None,
        };
        Ok(Self {
            encoder,
            params_x,
            params_s,
            head,
            decoder,
        })
    }

    /// Embeddings of the input view.
    pub fn embed(&self, x: &Tensor) -> Result<Tensor> {
        nn::forward(&self.encoder, &self.params_x, x)
    }

    fn tensors(&self) -> Vec<Tensor> {
        let mut all = self.params_x.tensors.clone();
        if let Some(p) = &self.params_s {
            all.extend(p.tensors.iter().cloned());
        }
        if let Projection::Linear { weight } = &self.head {
            all.push(weight.clone());
        }
        if let Some(d) = &self.decoder {
            all.extend(d.params.tensors.iter().cloned());
        }
        all
    }

    fn set_tensors(&mut self, mut all: Vec<Tensor>) {
        let mut rest = all.split_off(self.params_x.len());
        self.params_x.tensors = all;
        if let Some(p) = &mut self.params_s {
            let tail = rest.split_off(p.len());
            p.tensors = rest;
            rest = tail;
        }
        if let Projection::Linear { weight } = &mut self.head {
            *weight = rest.remove(0);
        }
        if let Some(d) = &mut self.decoder {
            d.params.tensors = rest;
        }
    }
}

trait GenSeed {
    fn gen_seed(self) -> u64;
}

impl GenSeed for rng::Rng {
    fn gen_seed(mut self) -> u64 {
        rand::Rng::gen(&mut self)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub seed: u64,
    /// Realized weights, including an automatically chosen `λ_IP`.
    pub weights: LossWeights,
    pub ip_auto_tenth: bool,
    pub history: Vec<StepLog>,
    pub initial_eval: EvalReport,
    pub final_eval: EvalReport,
    pub model: Model,
}

fn batch_target(split_s: &Tensor, flavor: FpFlavor) -> Tensor {
    match flavor {
        FpFlavor::Bce => {
            let mut t = split_s.clone();
            t.data_mut()
                .iter_mut()
                .for_each(|v| *v = 1.0 / (1.0 + (-*v).exp()));
            t
        }
        FpFlavor::Mse | FpFlavor::Revbce => split_s.clone(),
    }
}

/// Few-shot evaluation of the input-view encoder on the held-out split.
pub fn evaluate(model: &Model, test: &Split, labeled_per_class: usize, seed: u64) -> Result<EvalReport> {
    knn_cosine_eval(&model.embed(&test.x)?, &test.labels, labeled_per_class, seed)
}

/// Trains on `data.train` and evaluates on `data.test`.
pub fn train(data: &Dataset, config: &TrainConfig, seed: u64) -> Result<TrainOutcome> {
    config.validate()?;
    let (mut weights, auto) = config.loss.base_weights()?;
    let train = &data.train;
    let n = train.len();
    let bs = config.optimizer.batch_size;
    if bs > n {
        return invalid(format!("batch_size {bs} exceeds the {n} training pairs"));
    }
    let mut model = Model::init(config, train.x.cols(), seed)?;
    let eval_seed = seed;
    let initial_eval = evaluate(&model, &data.test, config.labeled_per_class, eval_seed)?;
    let mut opt = match config.optimizer.kind {
        OptimizerKind::Adam => OptimizerState::adam(config.optimizer.lr)?,
        OptimizerKind::Sgd => OptimizerState::sgd(config.optimizer.lr)?,
    };
    let mut batches = rng::derived(seed, &[4]);
    let mut history = Vec::with_capacity(config.optimizer.steps);
    let needs_ip = auto || weights.ip > 0.0;
    for step in 0..config.optimizer.steps {
        let mut idx = sample(&mut batches, n, bs).into_vec();
        idx.sort_unstable();
        let xb = train.x.gather_rows(&idx);
        let sb = train.s.gather_rows(&idx);
        let fx = nn::forward_cached(&model.encoder, &model.params_x, &xb)?;
        let s_params = model.params_s.as_ref().unwrap_or(&model.params_x);
        let fs = nn::forward_cached(&model.encoder, s_params, &sb)?;
        let batch = PairBatch::new(fx.output.clone(), fs.output.clone())?;

        let cl: Option<LossOutput> = match &config.loss.cl {
            Some(c) if c.weight > 0.0 => Some(match c.kind {
                ClKind::Cpc => cpc_loss(&batch, &model.head)?,
                ClKind::Js => js_loss(&batch, &model.head)?,
            }),
            _ => None,
        };
        let fp = match (&config.loss.fp, &model.decoder) {
            (Some(f), Some(dec)) => Some(fp_loss(&batch.zx, &batch_target(&sb, f.flavor), dec, f.flavor)?),
            _ => None,
        };
        let ip = if needs_ip { Some(ip_loss(&batch)?) } else { None };
        if auto && step == 0 {
            let other = weights.cl * cl.as_ref().map_or(0.0, |c| c.value)
                + weights.fp * fp.as_ref().map_or(0.0, |c| c.value);
            weights.ip = auto_tenth_ip_weight(other, ip.as_ref().map_or(0.0, |c| c.value));
        }
        let total = composite_loss(
            weights,
            Components {
                cl: cl.as_ref(),
                fp: fp.as_ref(),
                ip: ip.as_ref(),
            },
        )?;

        let gx = nn::backward_from(&model.encoder, &model.params_x, &fx, &total.grad_zx.scale(-1.0))?;
        let gs = nn::backward_from(&model.encoder, s_params, &fs, &total.grad_zs.scale(-1.0))?;
        let mut grads = gx.params;
        match &model.params_s {
            None => grads.add_scaled(&gs.params, 1.0)?,
            Some(_) => grads.tensors.extend(gs.params.tensors),
        }
        if let Projection::Linear { weight } = &model.head {
            let g = total
                .grad_head
                .as_ref()
                .map_or_else(|| Tensor::zeros(weight.shape()), |g| g.scale(-1.0));
            grads.tensors.push(g);
        }
        if let Some(d) = &model.decoder {
            match &total.grad_decoder {
                Some(g) => grads.tensors.extend(g.tensors.iter().map(|t| t.scale(-1.0))),
                None => grads.tensors.extend(d.params.zeros_like().tensors),
            }
        }
        let mut all = model.tensors();
        opt.step(&mut all, &grads.tensors)?;
        model.set_tensors(all);

        let eval_acc = if config.eval_every > 0 && (step + 1) % config.eval_every == 0 {
            Some(evaluate(&model, &data.test, config.labeled_per_class, eval_seed)?.accuracy)
        } else {
            None
        };
        history.push(StepLog {
            step: step + 1,
            loss_cl: cl.as_ref().map_or(0.0, |c| c.value),
            loss_fp: fp.as_ref().map_or(0.0, |c| c.value),
            loss_ip: ip.as_ref().map_or(0.0, |c| c.value),
            eval_acc,
        });
    }
    let final_eval = evaluate(&model, &data.test, config.labeled_per_class, eval_seed)?;
    if let Some(last) = history.last_mut() {
        last.eval_acc = Some(final_eval.accuracy);
    }
    Ok(TrainOutcome {
        seed,
        weights,
        ip_auto_tenth: auto,
        history,
        initial_eval,
        final_eval,
        model,
    })
}
