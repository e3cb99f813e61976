//! Mini-batch training loop.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::batch::Batch;
use super::graph::{BceTerm, Graph};
use super::loss::LossSpec;
use super::model::{forward, ModelArtifact, ModelSpec};
use super::optim::{Optimizer, OptimizerKind};
use super::params::ParamStore;
use crate::error::{Error, Result};
use crate::io::sha256_hex;
use crate::rng::rng_for;
use crate::synthgen::ScenarioDataset;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub optimizer: OptimizerKind,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.001,
            batch_size: 128,
            epochs: 5,
            optimizer: OptimizerKind::Adam,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::Config(format!(
                "learning_rate {} must be finite and non-negative",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        Ok(())
    }

    /// Short content hash recorded in model provenance.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        sha256_hex(json.as_bytes())[..16].to_string()
    }
}

/// Rows to train on, possibly pooled across scenarios, with optional
/// teacher probabilities aligned to the rows.
#[derive(Clone, Debug)]
pub struct TrainingSet<'a> {
    pub items: Vec<(&'a ScenarioDataset, usize)>,
    pub soft_targets: Option<Vec<f64>>,
}

impl<'a> TrainingSet<'a> {
    pub fn from_rows(ds: &'a ScenarioDataset, rows: &[usize]) -> Self {
        Self {
            items: rows.iter().map(|&r| (ds, r)).collect(),
            soft_targets: None,
        }
    }

    pub fn pooled(parts: &[(&'a ScenarioDataset, Vec<usize>)]) -> Self {
        Self {
            items: parts
                .iter()
                .flat_map(|(ds, rows)| rows.iter().map(move |&r| (*ds, r)))
                .collect(),
            soft_targets: None,
        }
    }

    pub fn with_soft_targets(mut self, soft: Vec<f64>) -> Result<Self> {
        if soft.len() != self.items.len() {
            return Err(Error::Shape(format!(
                "{} soft targets for {} rows",
                soft.len(),
                self.items.len()
            )));
        }
        self.soft_targets = Some(soft);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Batch of the given positions into `items`.
    pub fn batch(&self, idx: &[usize]) -> Batch {
        let refs: Vec<_> = idx.iter().map(|&i| self.items[i]).collect();
        let b = Batch::from_refs(&refs);
        match &self.soft_targets {
            Some(s) => b.with_soft_targets(idx.iter().map(|&i| s[i]).collect()),
            None => b,
        }
    }

    pub fn all_batches(&self, batch_size: usize) -> Vec<Batch> {
        let idx: Vec<usize> = (0..self.len()).collect();
        idx.chunks(batch_size.max(1))
            .map(|c| self.batch(c))
            .collect()
    }
}

/// Loss terms for one batch under `loss`.
pub(crate) fn loss_terms(batch: &Batch, loss: LossSpec) -> Result<Vec<BceTerm>> {
    let mut terms = vec![BceTerm {
        targets: batch.labels.clone(),
        weight: 1.0,
    }];
    if let LossSpec::Distill { delta } = loss {
        if delta != 0.0 {
            let soft = batch.soft_targets.as_ref().ok_or_else(|| {
                Error::Data("distillation loss needs teacher probabilities".into())
            })?;
            terms.push(BceTerm {
                targets: soft.clone(),
                weight: delta,
            });
        }
    }
    Ok(terms)
}

/// Loss value and parameter gradients on one batch.
pub fn loss_and_grads(
    spec: &ModelSpec,
    params: &ParamStore,
    batch: &Batch,
    loss: LossSpec,
) -> Result<(f64, ParamStore)> {
    let mut g = Graph::new();
    let p = forward(spec, params, &mut g, batch)?;
    let l = g.bce(p, loss_terms(batch, loss)?);
    let value = g.value(l).scalar_value();
    let grads = g.backward(l);
    Ok((value, ParamStore::from_map(g.param_grads(&grads))))
}

/// Mean loss over a whole set, evaluated in chunks of `batch_size`.
pub fn evaluate_loss(
    spec: &ModelSpec,
    params: &ParamStore,
    data: &TrainingSet,
    loss: LossSpec,
    batch_size: usize,
) -> Result<f64> {
    let mut total = 0.0;
    for b in data.all_batches(batch_size) {
        let mut g = Graph::new();
        let p = forward(spec, params, &mut g, &b)?;
        let l = g.bce(p, loss_terms(&b, loss)?);
        total += g.value(l).scalar_value() * b.size() as f64;
    }
    Ok(total / data.len().max(1) as f64)
}

/// Mean training loss per epoch.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epoch_losses: Vec<f64>,
    pub steps: usize,
}

/// One epoch of shuffled mini-batch updates, in place.
pub(crate) fn run_epoch(
    spec: &ModelSpec,
    params: &mut ParamStore,
    opt: &mut Optimizer,
    data: &TrainingSet,
    loss: LossSpec,
    batch_size: usize,
    order_seed: u64,
    step_offset: usize,
) -> Result<(f64, usize)> {
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut rng_for(order_seed, &[0x7a]));
    let mut total = 0.0;
    let mut steps = 0;
    for chunk in order.chunks(batch_size.max(1)) {
        let batch = data.batch(chunk);
        let (value, grads) = loss_and_grads(spec, params, &batch, loss)?;
        if !value.is_finite() || !grads.is_finite() {
            return Err(Error::NonFiniteLoss {
                batch: step_offset + steps,
                loss: value,
                context: String::new(),
            });
        }
        opt.step(params, &grads)?;
        total += value * chunk.len() as f64;
        steps += 1;
    }
    Ok((total / data.len() as f64, steps))
}

/// Trains a copy of `model`; the input artifact is left untouched.
pub fn train_model(
    model: &ModelArtifact,
    data: &TrainingSet,
    cfg: &TrainConfig,
    loss: LossSpec,
) -> Result<(ModelArtifact, TrainLog)> {
    train_model_with(model, data, cfg, loss, &mut |_, _| Ok(true))
}

/// [`train_model`] with a callback after every epoch; training stops early
/// when it returns false.
pub fn train_model_with(
    model: &ModelArtifact,
    data: &TrainingSet,
    cfg: &TrainConfig,
    loss: LossSpec,
    after_epoch: &mut dyn FnMut(usize, &ModelArtifact) -> Result<bool>,
) -> Result<(ModelArtifact, TrainLog)> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    if let LossSpec::Distill { delta } = loss {
        if delta < 0.0 || !delta.is_finite() {
            return Err(Error::Config(format!(
                "distillation weight {delta} must be >= 0"
            )));
        }
    }
    let mut params = model.params.clone();
    let mut opt = Optimizer::new(cfg.optimizer, cfg.learning_rate);
    let mut log = TrainLog::default();
    for epoch in 0..cfg.epochs {
        let (mean, steps) = run_epoch(
            &model.spec,
            &mut params,
            &mut opt,
            data,
            loss,
            cfg.batch_size,
            crate::rng::derive_seed(cfg.seed, &[epoch as u64]),
            log.steps,
        )?;
        log.steps += steps;
        log::debug!("epoch {epoch}: loss {mean:.5}");
        log.epoch_losses.push(mean);
        if epoch + 1 < cfg.epochs {
            let snapshot = ModelArtifact {
                spec: model.spec.clone(),
                params,
                provenance: model.provenance.clone(),
            };
            let go_on = after_epoch(epoch, &snapshot)?;
            params = snapshot.params;
            if !go_on {
                break;
            }
        }
    }
    let mut provenance = model.provenance.clone();
    provenance.train_config_hash = cfg.hash();
    let out = ModelArtifact {
        spec: model.spec.clone(),
        params,
        provenance,
    };
    if cfg.epochs > 0 && log.epoch_losses.len() == cfg.epochs {
        after_epoch(cfg.epochs - 1, &out)?;
    }
    Ok((out, log))
}
