//! The variational objective, cyclical β annealing, Adam with plateau decay
//! and the seeded training loop.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{LesionCase, Mask, ANNOTATIONS_PER_CASE};
use crate::error::{Error, Result};
use crate::networks::{mask_tensor, volume_tensor, ParamStore, ProbUNet};
use crate::tensor::{Graph, Tensor, Var};

/// Graph nodes of one evaluation of the objective.
#[derive(Clone, Copy, Debug)]
pub struct ElboParts {
    pub loss: Var,
    /// Voxel-summed binary cross-entropy on logits.
    pub recon: Var,
    /// `log q₀(z₀) − Σ logdet − log p(z_K | x)`; zero for the baseline.
    pub kl_mc: Var,
    pub logdet: Var,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ElboValues {
    pub loss: f64,
    pub recon: f64,
    pub kl_mc: f64,
    pub logdet: f64,
}

impl ElboParts {
    pub fn values(&self, g: &Graph) -> ElboValues {
        ElboValues {
            loss: g.value(self.loss).item(),
            recon: g.value(self.recon).item(),
            kl_mc: g.value(self.kl_mc).item(),
            logdet: g.value(self.logdet).item(),
        }
    }
}

/// `Σ softplus(l) − y·l`, the voxel-summed cross-entropy of logits `l`.
pub fn bce_with_logits(g: &mut Graph, logits: Var, y: Var) -> Result<Var> {
    let sp = g.softplus(logits);
    let yl = g.mul(y, logits)?;
    let ce = g.sub(sp, yl)?;
    Ok(g.sum(ce))
}

/// Build the objective on `g` for input `x` and label `y`, both `[1, D, H, W]`.
pub fn elbo_loss(
    model: &ProbUNet,
    g: &mut Graph,
    p: &[Var],
    x: Var,
    y: Var,
    beta: f64,
    eps: &Tensor,
) -> Result<ElboParts> {
    if !(beta >= 0.0) {
        return Err(Error::usage(format!("beta must be >= 0, got {}", beta)));
    }
    if g.shape(x)[1..] != g.shape(y)[1..] {
        return Err(Error::shape(format!(
            "label grid {:?} differs from input grid {:?}",
            &g.shape(y)[1..],
            &g.shape(x)[1..]
        )));
    }
    let features = model.unet_forward(g, p, x)?;
    let (logits, kl_mc, logdet) = if model.config().variant.is_probabilistic() {
        let prior = model.prior_forward(g, p, x)?;
        let post = model.posterior_forward(g, p, x, y, eps)?;
        let log_p = prior.log_prob(g, post.z_k)?;
        let a = g.sub(post.sample.log_q0, post.sum_logdet)?;
        let kl = g.sub(a, log_p)?;
        let logits = model.fcomb_forward(g, p, features, post.z_k)?;
        (logits, kl, post.sum_logdet)
    } else {
        let z = g.constant(Tensor::vector(Vec::new()));
        let logits = model.fcomb_forward(g, p, features, z)?;
        let zero = g.constant(Tensor::scalar(0.0));
        (logits, zero, zero)
    };
    let recon = bce_with_logits(g, logits, y)?;
    let weighted = g.scale(kl_mc, beta);
    let loss = g.add(recon, weighted)?;
    Ok(ElboParts {
        loss,
        recon,
        kl_mc,
        logdet,
    })
}

/// Evaluate the objective (no gradients) for one volume and label.
pub fn elbo_value(
    model: &ProbUNet,
    case: &LesionCase,
    label: &Mask,
    beta: f64,
    eps: &Tensor,
) -> Result<ElboValues> {
    let mut g = Graph::new();
    let p = model.bind(&mut g, false);
    let x = g.constant(volume_tensor(&case.volume));
    let y = g.constant(mask_tensor(label));
    Ok(elbo_loss(model, &mut g, &p, x, y, beta, eps)?.values(&g))
}

/// Loss and parameter gradients for one example.
pub fn elbo_gradients(
    model: &ProbUNet,
    case: &LesionCase,
    label: &Mask,
    beta: f64,
    eps: &Tensor,
) -> Result<(ElboValues, Vec<Tensor>)> {
    let mut g = Graph::new();
    let p = model.bind(&mut g, true);
    let x = g.constant(volume_tensor(&case.volume));
    let y = g.constant(mask_tensor(label));
    let parts = elbo_loss(model, &mut g, &p, x, y, beta, eps)?;
    let values = parts.values(&g);
    if !values.loss.is_finite() {
        return Err(Error::Numeric(format!(
            "non-finite loss {} on case {}",
            values.loss, case.case_id
        )));
    }
    let grads = g.backward(parts.loss)?;
    let out = p
        .iter()
        .zip(&model.params().tensors)
        .map(|(&v, t)| grads.get_or_zeros(v, t.shape()))
        .collect();
    Ok((values, out))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BetaSchedule {
    pub total_steps: usize,
    pub cycles: usize,
    pub ramp_fraction: f64,
}

impl BetaSchedule {
    pub fn new(total_steps: usize, cycles: usize, ramp_fraction: f64) -> Result<Self> {
        if cycles == 0 || !(ramp_fraction > 0.0 && ramp_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "beta schedule needs cycles >= 1 and ramp fraction in (0, 1], got {} and {}",
                cycles, ramp_fraction
            )));
        }
        Ok(BetaSchedule {
            total_steps,
            cycles,
            ramp_fraction,
        })
    }

    /// Cosine ramp from 0 to 1 over the first `ramp_fraction` of each of
    /// `cycles` equal windows, then held at 1.
    pub fn beta(&self, step: usize) -> Result<f64> {
        if step >= self.total_steps {
            return Err(Error::usage(format!(
                "beta step {} outside [0, {})",
                step, self.total_steps
            )));
        }
        let window = self.total_steps as f64 / self.cycles as f64;
        let tau = (step as f64 % window) / window;
        let r = (tau / self.ramp_fraction).min(1.0);
        Ok(0.5 * (1.0 - (std::f64::consts::PI * r).cos()))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(params: &[Tensor]) -> Self {
        AdamState {
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    /// One bias-corrected update. Weight decay is added to the gradient
    /// unless `decoupled`, in which case it shrinks the parameter directly.
    pub fn step(
        &mut self,
        params: &mut [Tensor],
        grads: &[Tensor],
        lr: f64,
        weight_decay: f64,
        decoupled: bool,
    ) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return Err(Error::shape(format!(
                "adam state has {} slots, got {} params and {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() || p.shape() != self.m[i].shape() {
                return Err(Error::shape(format!(
                    "adam slot {}: param {:?}, grad {:?}, state {:?}",
                    i,
                    p.shape(),
                    g.shape(),
                    self.m[i].shape()
                )));
            }
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            let (pd, m, v) = (p.data_mut(), m.data_mut(), v.data_mut());
            for i in 0..pd.len() {
                let mut gi = g.data()[i];
                if !decoupled {
                    gi += weight_decay * pd[i];
                }
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let mh = m[i] / c1;
                let vh = v[i] / c2;
                if decoupled {
                    pd[i] -= lr * weight_decay * pd[i];
                }
                pd[i] -= lr * mh / (vh.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Reduce-on-plateau learning-rate control.
#[derive(Clone, Debug, PartialEq)]
pub struct PlateauScheduler {
    pub patience: usize,
    pub factor: f64,
    best: f64,
    stale: usize,
}

impl PlateauScheduler {
    pub fn new(patience: usize, factor: f64) -> Result<Self> {
        if patience == 0 || !(factor > 0.0 && factor < 1.0) {
            return Err(Error::Config(format!(
                "plateau scheduler needs patience >= 1 and factor in (0, 1), got {} and {}",
                patience, factor
            )));
        }
        Ok(PlateauScheduler {
            patience,
            factor,
            best: f64::INFINITY,
            stale: 0,
        })
    }

    /// Feed one validation loss; returns the learning rate to use next.
    pub fn observe(&mut self, val_loss: f64, lr: f64) -> f64 {
        if val_loss < self.best {
            self.best = val_loss;
            self.stale = 0;
            return lr;
        }
        self.stale += 1;
        if self.stale >= self.patience {
            self.best = val_loss;
            self.stale = 0;
            lr * self.factor
        } else {
            lr
        }
    }
}

/// Replay a validation history through a fresh scheduler.
pub fn plateau_schedule(history: &[f64], patience: usize, factor: f64, lr: f64) -> Result<f64> {
    let mut s = PlateauScheduler::new(patience, factor)?;
    Ok(history.iter().fold(lr, |lr, &v| s.observe(v, lr)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub plateau_factor: f64,
    pub plateau_patience_epochs: usize,
    pub beta_cycles: usize,
    pub beta_ramp_fraction: f64,
    pub max_epochs: usize,
    pub seed: u64,
    pub decoupled_weight_decay: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-4,
            weight_decay: 1e-5,
            batch_size: 4,
            plateau_factor: 0.2,
            plateau_patience_epochs: 20,
            beta_cycles: 4,
            beta_ramp_fraction: 0.5,
            max_epochs: 100,
            seed: 0,
            decoupled_weight_decay: false,
        }
    }
}

fn parse_value<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("cannot parse {} = '{}'", key, value)))
}

impl TrainConfig {
    /// Set one field from a config entry. Returns false for keys that are
    /// not training fields.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "lr" => self.lr = parse_value(key, value)?,
            "weight_decay" => self.weight_decay = parse_value(key, value)?,
            "batch_size" => self.batch_size = parse_value(key, value)?,
            "plateau_factor" => self.plateau_factor = parse_value(key, value)?,
            "plateau_patience_epochs" => self.plateau_patience_epochs = parse_value(key, value)?,
            "beta_cycles" => self.beta_cycles = parse_value(key, value)?,
            "beta_ramp_fraction" => self.beta_ramp_fraction = parse_value(key, value)?,
            "max_epochs" => self.max_epochs = parse_value(key, value)?,
            "seed" => self.seed = parse_value(key, value)?,
            "decoupled_weight_decay" => self.decoupled_weight_decay = parse_value(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || self.weight_decay < 0.0 || self.batch_size == 0 {
            return Err(Error::Config(format!(
                "need lr > 0, weight_decay >= 0, batch_size >= 1 (got {}, {}, {})",
                self.lr, self.weight_decay, self.batch_size
            )));
        }
        PlateauScheduler::new(self.plateau_patience_epochs, self.plateau_factor)?;
        BetaSchedule::new(1, self.beta_cycles, self.beta_ramp_fraction)?;
        Ok(())
    }
}

/// Parse `key = value` lines; `#` starts a comment.
pub fn parse_kv(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key = value, got '{}'", i + 1, raw)))?;
        let k = k.trim().to_string();
        if out.insert(k.clone(), v.trim().to_string()).is_some() {
            return Err(Error::Config(format!("line {}: duplicate key '{}'", i + 1, k)));
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
    pub beta_mean: f64,
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub history: Vec<EpochRecord>,
    pub initial_val_loss: f64,
    pub best_val_loss: f64,
    /// `None` when no epoch ran.
    pub best_epoch: Option<usize>,
    pub best_params: ParamStore,
}

const VAL_NOISE_SALT: u64 = 0x5eed_0f_7a1;

/// Mean validation objective: annotator 0, β = 1, fixed noise per case.
pub fn validation_loss(model: &ProbUNet, val: &[LesionCase], seed: u64) -> Result<f64> {
    if val.is_empty() {
        return Err(Error::usage("empty validation set"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ VAL_NOISE_SALT);
    let mut total = 0.0;
    for case in val {
        let eps = standard_normal(&mut rng, model.latent_dim());
        let v = elbo_value(model, case, &case.annotations[0], 1.0, &eps)?;
        if !v.loss.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite validation loss on case {}",
                case.case_id
            )));
        }
        total += v.loss;
    }
    Ok(total / val.len() as f64)
}

fn standard_normal(rng: &mut ChaCha8Rng, n: usize) -> Tensor {
    Tensor::vector((0..n).map(|_| StandardNormal.sample(rng)).collect())
}

/// Seeded training. `on_epoch` sees every record together with the current
/// model and whether it is the best so far, e.g. to write a checkpoint.
pub fn fit<F>(
    model: &mut ProbUNet,
    train: &[LesionCase],
    val: &[LesionCase],
    cfg: &TrainConfig,
    mut on_epoch: F,
) -> Result<TrainReport>
where
    F: FnMut(&EpochRecord, &ProbUNet, bool) -> Result<()>,
{
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::usage("empty training set"));
    }
    let initial_val_loss = validation_loss(model, val, cfg.seed)?;
    let mut report = TrainReport {
        history: Vec::new(),
        initial_val_loss,
        best_val_loss: initial_val_loss,
        best_epoch: None,
        best_params: model.params().clone(),
    };
    if cfg.max_epochs == 0 {
        return Ok(report);
    }
    let steps_per_epoch = train.len().div_ceil(cfg.batch_size);
    let schedule = BetaSchedule::new(
        cfg.max_epochs * steps_per_epoch,
        cfg.beta_cycles,
        cfg.beta_ramp_fraction,
    )?;
    let mut plateau = PlateauScheduler::new(cfg.plateau_patience_epochs, cfg.plateau_factor)?;
    let mut adam = AdamState::new(&model.params().tensors);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut lr = cfg.lr;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut step = 0;
    for epoch in 0..cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut beta_sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let beta = schedule.beta(step)?;
            beta_sum += beta;
            let mut acc: Vec<Tensor> = model
                .params()
                .tensors
                .iter()
                .map(|t| Tensor::zeros(t.shape()))
                .collect();
            for &i in batch {
                let case = &train[i];
                let k = rng.random_range(0..ANNOTATIONS_PER_CASE);
                let eps = standard_normal(&mut rng, model.latent_dim());
                let (v, grads) = elbo_gradients(model, case, &case.annotations[k], beta, &eps)?;
                loss_sum += v.loss;
                for (a, g) in acc.iter_mut().zip(&grads) {
                    for (x, y) in a.data_mut().iter_mut().zip(g.data()) {
                        *x += y;
                    }
                }
            }
            let inv = 1.0 / batch.len() as f64;
            for a in &mut acc {
                a.data_mut().iter_mut().for_each(|x| *x *= inv);
            }
            adam.step(
                &mut model.params_mut().tensors,
                &acc,
                lr,
                cfg.weight_decay,
                cfg.decoupled_weight_decay,
            )?;
            step += 1;
        }
        let val_loss = validation_loss(model, val, cfg.seed)?;
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / train.len() as f64,
            val_loss,
            lr,
            beta_mean: beta_sum / steps_per_epoch as f64,
        };
        let is_best = val_loss < report.best_val_loss;
        if is_best {
            report.best_val_loss = val_loss;
            report.best_epoch = Some(epoch);
            report.best_params = model.params().clone();
        }
        on_epoch(&record, model, is_best)?;
        report.history.push(record);
        lr = plateau.observe(val_loss, lr);
    }
    Ok(report)
}
