//! FLOPs-budgeted differentiable architecture search.
//!
//! The search space has `N` layers. Layer `l` picks one input among the
//! original input and the outputs of layers `< l`, one operation from the
//! candidate list, and independently includes or excludes a residual edge
//! from each earlier output. Layer outputs are combined by a learned
//! softmax-weighted sum.
//!
//! During search every decision is sampled with Gumbel-softmax noise and
//! the sampled branch is passed through a straight-through factor, so the
//! forward value is exactly that of the sampled sub-network while the
//! gradient reaches the relaxed probability of the sampled option.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashSet};

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::arch::{Genotype, LayerGene, OpSpec, SeqShape};
use crate::error::{Error, Result};
use crate::flopsmeter::{
    aggregation_flops, genotype_flops, op_flops, residual_flops, space_max_flops, space_min_flops,
    FlopsReport,
};
use crate::nets::batch::Batch;
use crate::nets::graph::{Graph, Var};
use crate::nets::model::{attentive_sum, head, init_op, op_forward, param, trunk};
use crate::nets::optim::Adam;
use crate::nets::train::loss_terms;
use crate::nets::{
    build_model, init_params, predict, train_model, Architecture, InputShape, LossSpec,
    ModelArtifact, ModelSpec, ParamStore, Provenance, SearchedArch, TrainConfig, TrainingSet,
};
use crate::rng::{rng_for, Rng};
use crate::synthgen::{RowSet, ScenarioDataset};
use crate::tensor::Matrix;

/// Joint log-probabilities closer than this are treated as ties.
pub const TIE_TOLERANCE: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpaceSpec {
    pub n_layers: usize,
    pub ops: Vec<OpSpec>,
}

impl SpaceSpec {
    /// Standard and dilated (d=2) convolutions with k in {1,3,5,7},
    /// average/max pooling with k=3, an LSTM cell and multi-head
    /// self-attention, all at width `dim`.
    pub fn default_candidates(dim: usize, heads: usize) -> Vec<OpSpec> {
        let mut ops: Vec<OpSpec> = [1, 3, 5, 7].iter().map(|&k| OpSpec::conv(k, dim)).collect();
        ops.extend(
            [1, 3, 5, 7]
                .iter()
                .map(|&k| OpSpec::dilated_conv(k, 2, dim)),
        );
        ops.push(OpSpec::avg_pool(3, dim));
        ops.push(OpSpec::max_pool(3, dim));
        ops.push(OpSpec::recurrent(dim));
        ops.push(OpSpec::attention(dim, heads));
        ops
    }

    pub fn new(n_layers: usize, ops: Vec<OpSpec>) -> Result<Self> {
        let s = Self { n_layers, ops };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 {
            return Err(Error::Config(
                "search space needs at least one layer".into(),
            ));
        }
        if self.ops.is_empty() {
            return Err(Error::Config(
                "search space has no candidate operations".into(),
            ));
        }
        let dim = self.ops[0].channels_in;
        for op in &self.ops {
            op.validate()?;
            if op.channels_in != dim || op.channels_out != dim {
                return Err(Error::Shape(format!(
                    "{op} is not shape-preserving at width {dim}"
                )));
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.ops[0].channels_in
    }

    /// Option counts of every decision in canonical order: for each layer,
    /// its input, its operation, then one include/exclude pair per earlier
    /// output.
    pub fn decision_sizes(&self) -> Vec<usize> {
        let mut out = Vec::new();
        for l in 1..=self.n_layers {
            out.push(l);
            out.push(self.ops.len());
            out.extend(std::iter::repeat(2).take(l));
        }
        out
    }

    /// Number of genotypes in the space.
    pub fn size(&self) -> u128 {
        self.decision_sizes().iter().map(|&s| s as u128).product()
    }

    /// Genotype for one option index per decision (canonical order).
    pub fn genotype_from_choices(&self, choices: &[usize]) -> Genotype {
        let mut it = choices.iter().copied();
        let layers = (1..=self.n_layers)
            .map(|l| {
                let input = it.next().expect("input choice");
                let op = it.next().expect("op choice");
                let residual = (0..l).filter(|_| it.next().expect("edge") == 1).collect();
                LayerGene {
                    input,
                    op,
                    residual,
                }
            })
            .collect();
        Genotype { layers }
    }

    pub fn choices_of(&self, g: &Genotype) -> Vec<usize> {
        let mut out = Vec::new();
        for (i, gene) in g.layers.iter().enumerate() {
            out.push(gene.input);
            out.push(gene.op);
            out.extend((0..=i).map(|j| gene.residual.contains(&j) as usize));
        }
        out
    }
}

/// Architecture logits for every decision, plus the sampling temperature.
///
/// Keys: `arch.in.{l}` (`[1, l]`), `arch.op.{l}` (`[1, n_ops]`) and
/// `arch.res.{l}.{j}` (`[1, 2]`, exclude then include) for layers
/// `l = 1..=N` and earlier outputs `j < l`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchWeights {
    pub logits: ParamStore,
    pub tau: f64,
    n_layers: usize,
    n_ops: usize,
}

pub fn softmax(v: &[f64]) -> Vec<f64> {
    let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - max).exp()).collect();
    let total: f64 = e.iter().sum();
    e.into_iter().map(|x| x / total).collect()
}

fn log_softmax(v: &[f64]) -> Vec<f64> {
    let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = v.iter().map(|x| (x - max).exp()).sum::<f64>().ln() + max;
    v.iter().map(|x| x - lse).collect()
}

impl ArchWeights {
    pub fn in_key(l: usize) -> String {
        format!("arch.in.{l}")
    }

    pub fn op_key(l: usize) -> String {
        format!("arch.op.{l}")
    }

    pub fn res_key(l: usize, j: usize) -> String {
        format!("arch.res.{l}.{j}")
    }

    /// All-zero logits (uniform distributions) at temperature `tau`.
    pub fn uniform(space: &SpaceSpec, tau: f64) -> Self {
        let mut logits = ParamStore::new();
        for l in 1..=space.n_layers {
            logits.insert(Self::in_key(l), Matrix::zeros(1, l));
            logits.insert(Self::op_key(l), Matrix::zeros(1, space.ops.len()));
            for j in 0..l {
                logits.insert(Self::res_key(l, j), Matrix::zeros(1, 2));
            }
        }
        Self {
            logits,
            tau,
            n_layers: space.n_layers,
            n_ops: space.ops.len(),
        }
    }

    /// Logits whose softmax is one-hot on `g` (a gap of 1000 underflows
    /// every other probability to exactly zero).
    pub fn one_hot(space: &SpaceSpec, g: &Genotype) -> Self {
        let mut aw = Self::uniform(space, 1.0);
        let choices = space.choices_of(g);
        for (key, &c) in aw.decision_keys().iter().zip(&choices) {
            let m = aw.logits.get_mut(key).expect("key");
            for (i, v) in m.data_mut().iter_mut().enumerate() {
                *v = if i == c { 0.0 } else { -1000.0 };
            }
        }
        aw
    }

    pub fn n_layers(&self) -> usize {
        self.n_layers
    }

    pub fn n_ops(&self) -> usize {
        self.n_ops
    }

    /// Keys in canonical decision order (see [`SpaceSpec::decision_sizes`]).
    pub fn decision_keys(&self) -> Vec<String> {
        let mut out = Vec::new();
        for l in 1..=self.n_layers {
            out.push(Self::in_key(l));
            out.push(Self::op_key(l));
            out.extend((0..l).map(|j| Self::res_key(l, j)));
        }
        out
    }

    pub fn logits_of(&self, key: &str) -> &[f64] {
        self.logits.get(key).expect("arch key").data()
    }

    /// Temperature-free selection probabilities `softmax(o)`.
    pub fn probs(&self, key: &str) -> Vec<f64> {
        softmax(self.logits_of(key))
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Config(format!(
                "temperature {} must be > 0",
                self.tau
            )));
        }
        if !self.logits.is_finite() {
            return Err(Error::Data("non-finite architecture logit".into()));
        }
        Ok(())
    }

    /// Compact listing of the current selection probabilities.
    pub fn dump(&self) -> String {
        self.decision_keys()
            .iter()
            .map(|k| {
                let p: Vec<String> = self.probs(k).iter().map(|v| format!("{v:.3}")).collect();
                format!("{k}=[{}]", p.join(","))
            })
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// Standard Gumbel(0, 1) draws.
pub fn gumbel_noise(rng: &mut Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let u: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
            -(-u.ln()).ln()
        })
        .collect()
}

/// `softmax((o + g) / tau)`.
pub fn relaxed_probs(logits: &[f64], noise: &[f64], tau: f64) -> Vec<f64> {
    let z: Vec<f64> = logits
        .iter()
        .zip(noise)
        .map(|(o, g)| (o + g) / tau)
        .collect();
    softmax(&z)
}

fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &x)| {
            if x > bv {
                (i, x)
            } else {
                (bi, bv)
            }
        })
        .0
}

/// One Gumbel-softmax draw: the sampled index and the relaxed probabilities.
pub fn gumbel_sample(logits: &[f64], tau: f64, rng: &mut Rng) -> (usize, Vec<f64>) {
    assert!(tau > 0.0, "temperature must be positive");
    let noise = gumbel_noise(rng, logits.len());
    let p = relaxed_probs(logits, &noise, tau);
    (argmax(&p), p)
}

/// Over-parameterized network holding weights for every candidate op.
#[derive(Clone, Debug)]
pub struct Supernet {
    pub space: SpaceSpec,
    /// Searched-model spec used for the shared trunk and head.
    pub template: ModelSpec,
    /// Trunk, head, aggregation scores and `cell.{l}.op{m}.*` op weights.
    pub weights: ParamStore,
    pub arch: ArchWeights,
}

fn op_prefix(l: usize, m: usize) -> String {
    format!("cell.{l}.op{m}")
}

/// A searched model spec for `genotype` with the trunk/head of `like`.
pub fn searched_spec(
    input: InputShape,
    space: &SpaceSpec,
    genotype: Genotype,
    profile_mlp_dims: Vec<usize>,
    head_mlp_dims: Vec<usize>,
) -> ModelSpec {
    ModelSpec::new(
        input,
        Architecture::Searched(SearchedArch {
            genotype,
            ops: space.ops.clone(),
            embed_dim: space.dim(),
            profile_mlp_dims,
            head_mlp_dims,
        }),
    )
}

impl Supernet {
    pub fn new(
        space: SpaceSpec,
        input: InputShape,
        profile_mlp_dims: Vec<usize>,
        head_mlp_dims: Vec<usize>,
        seed: u64,
    ) -> Result<Self> {
        space.validate()?;
        let placeholder = space.genotype_from_choices(&vec![0; space.decision_sizes().len()]);
        let template = searched_spec(input, &space, placeholder, profile_mlp_dims, head_mlp_dims);
        let base = init_params(&template, seed)?;
        let mut weights = ParamStore::new();
        for (name, v) in base.iter() {
            if !name.starts_with("cell.") {
                weights.insert(name.clone(), v.clone());
            }
        }
        let mut rng = rng_for(seed, &[0x5e]);
        for l in 1..=space.n_layers {
            for (m, op) in space.ops.iter().enumerate() {
                init_op(&mut weights, &mut rng, &op_prefix(l, m), op);
            }
        }
        let arch = ArchWeights::uniform(&space, 1.0);
        Ok(Self {
            space,
            template,
            weights,
            arch,
        })
    }

    pub fn shape(&self) -> SeqShape {
        SeqShape {
            seq_len: self.template.input.seq_len,
            dim: self.space.dim(),
        }
    }

    /// The fixed sub-network for `g`, sharing this supernet's weights.
    pub fn extract(&self, g: &Genotype, provenance: Provenance) -> Result<ModelArtifact> {
        let Architecture::Searched(t) = &self.template.arch else {
            unreachable!("supernet template is a searched spec")
        };
        let spec = searched_spec(
            self.template.input,
            &self.space,
            g.clone(),
            t.profile_mlp_dims.clone(),
            t.head_mlp_dims.clone(),
        );
        spec.validate()?;
        let mut params = ParamStore::new();
        for (name, v) in self.weights.iter() {
            if !name.starts_with("cell.") {
                params.insert(name.clone(), v.clone());
            }
        }
        for (i, gene) in g.layers.iter().enumerate() {
            let l = i + 1;
            let from = format!("{}.", op_prefix(l, gene.op));
            for (name, v) in self.weights.iter() {
                if let Some(rest) = name.strip_prefix(&from) {
                    params.insert(format!("cell.{l}.{rest}"), v.clone());
                }
            }
        }
        // keep the canonical layout of a freshly built model
        let reference = init_params(&spec, 0)?;
        let mut ordered = ParamStore::new();
        for name in reference.names() {
            ordered.insert(name.clone(), params.require(name)?.clone());
        }
        Ok(ModelArtifact {
            spec,
            params: ordered,
            provenance,
        })
    }
}

/// A recorded supernet forward pass.
pub struct SupernetPass {
    pub graph: Graph,
    pub probs: Var,
    /// Sampled option per decision, canonical order.
    pub choices: Vec<usize>,
    /// Relaxed probability of each sampled option (the stop-gradient value
    /// inside the straight-through factor).
    pub detached: Vec<f64>,
}

impl SupernetPass {
    pub fn genotype(&self, space: &SpaceSpec) -> Genotype {
        space.genotype_from_choices(&self.choices)
    }

    pub fn prob_values(&self) -> Vec<f64> {
        self.graph.value(self.probs).data().to_vec()
    }

    /// Choices and stop-gradient values of this pass, for re-evaluating the
    /// same sample at perturbed logits.
    pub fn frozen(&self) -> FrozenSample {
        FrozenSample {
            choices: self.choices.clone(),
            detached: self.detached.clone(),
        }
    }
}

/// A fixed sample: the chosen options and the constants used in place of
/// `detach(p)`.
#[derive(Clone, Debug, PartialEq)]
pub struct FrozenSample {
    pub choices: Vec<usize>,
    pub detached: Vec<f64>,
}

/// Forward pass with caller-supplied Gumbel noise per decision (canonical
/// order).
pub fn supernet_forward_with_noise(
    net: &Supernet,
    batch: &Batch,
    tau: f64,
    noise: &mut dyn FnMut(usize) -> Vec<f64>,
) -> Result<SupernetPass> {
    forward_impl(net, batch, tau, noise, None)
}

/// Re-evaluates a frozen sample: choices are not re-drawn and the
/// straight-through factors use the frozen constants, so the output is a
/// smooth function of the logits whose gradient is the straight-through
/// gradient.
pub fn supernet_forward_frozen(
    net: &Supernet,
    batch: &Batch,
    tau: f64,
    noise: &mut dyn FnMut(usize) -> Vec<f64>,
    frozen: &FrozenSample,
) -> Result<SupernetPass> {
    forward_impl(net, batch, tau, noise, Some(frozen))
}

fn forward_impl(
    net: &Supernet,
    batch: &Batch,
    tau: f64,
    noise: &mut dyn FnMut(usize) -> Vec<f64>,
    frozen: Option<&FrozenSample>,
) -> Result<SupernetPass> {
    let mut g = Graph::new();
    let (profile, x) = trunk(&mut g, &net.weights, &net.template, batch)?;
    let mask = std::rc::Rc::new(batch.mask.clone());
    let geom = batch.geom;
    let mut choices = Vec::new();
    let mut detached = Vec::new();
    // samples one decision and applies the straight-through factor to `x`
    let mut choose = |g: &mut Graph,
                      key: &str,
                      branch: &mut dyn FnMut(&mut Graph, usize) -> Result<Var>|
     -> Result<(usize, Var)> {
        let logits = net.arch.logits.require(key)?;
        let gn = noise(logits.len());
        let o = g.param(key, logits);
        let z = g.add_const(o, &Matrix::row_vector(gn));
        let z = g.scale(z, 1.0 / tau);
        let p = g.softmax_rows(z);
        let d = choices.len();
        let (idx, stop) = match frozen {
            Some(f) => (f.choices[d], f.detached[d]),
            None => {
                let idx = argmax(g.value(p).data());
                (idx, g.value(p).data()[idx])
            }
        };
        choices.push(idx);
        detached.push(stop);
        let x = branch(g, idx)?;
        Ok((idx, g.straight_through_with(x, p, idx, stop)))
    };
    let mut sources = vec![x];
    for l in 1..=net.space.n_layers {
        let (_, input) = choose(&mut g, &ArchWeights::in_key(l), &mut |_, i| Ok(sources[i]))?;
        let (_, mut out) = choose(&mut g, &ArchWeights::op_key(l), &mut |g, m| {
            op_forward(
                g,
                &net.weights,
                &op_prefix(l, m),
                &net.space.ops[m],
                input,
                geom,
                &mask,
            )
        })?;
        for j in 0..l {
            let src = sources[j];
            let (r, edge) = choose(&mut g, &ArchWeights::res_key(l, j), &mut |_, _| Ok(src))?;
            if r == 1 {
                out = g.add(out, edge);
            }
        }
        sources.push(out);
    }
    let seq = attentive_sum(&mut g, &net.weights, &sources[1..])?;
    let probs = head(
        &mut g,
        &net.weights,
        &net.template,
        profile,
        seq,
        geom,
        &mask,
    )?;
    Ok(SupernetPass {
        graph: g,
        probs,
        choices,
        detached,
    })
}

/// Forward pass with fresh Gumbel noise for every decision.
pub fn supernet_forward(
    net: &Supernet,
    batch: &Batch,
    tau: f64,
    rng: &mut Rng,
) -> Result<SupernetPass> {
    supernet_forward_with_noise(net, batch, tau, &mut |n| gumbel_noise(rng, n))
}

/// Normalized expected FLOPs recorded on `g`, differentiable in the logits.
fn flops_penalty(g: &mut Graph, net: &Supernet) -> Result<Var> {
    let shape = net.shape();
    let reference = space_max_flops(net.space.n_layers, &net.space.ops, shape)? as f64;
    let costs: Vec<f64> = net
        .space
        .ops
        .iter()
        .map(|op| op_flops(op, shape.seq_len).map(|c| c as f64 / reference))
        .collect::<Result<_>>()?;
    let res = residual_flops(shape) as f64 / reference;
    let fixed = aggregation_flops(net.space.n_layers, shape) as f64 / reference;
    let mut total: Option<Var> = None;
    let mut push = |g: &mut Graph, v: Var| {
        total = Some(match total {
            Some(t) => g.add(t, v),
            None => v,
        });
    };
    for l in 1..=net.space.n_layers {
        let key = ArchWeights::op_key(l);
        let o = param(g, &net.arch.logits, &key)?;
        let p = g.softmax_rows(o);
        let term = g.dot_const(p, costs.clone());
        push(g, term);
        for j in 0..l {
            let key = ArchWeights::res_key(l, j);
            let o = param(g, &net.arch.logits, &key)?;
            let p = g.softmax_rows(o);
            let term = g.dot_const(p, vec![0.0, res]);
            push(g, term);
        }
    }
    let t = total.expect("at least one layer");
    Ok(g.add_const(t, &Matrix::scalar(fixed)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NasConfig {
    pub n_layers: usize,
    /// FLOPs penalty weight; `None` calibrates it on the first batch.
    pub lambda: Option<f64>,
    /// Target ratio of the initial penalty to the initial loss.
    pub lambda_ratio: f64,
    /// Distillation weight.
    pub delta: f64,
    /// Supernet weight learning rate.
    pub weight_lr: f64,
    pub arch_lr: f64,
    pub tau_start: f64,
    pub tau_end: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Share of the scenario train rows used for architecture updates.
    pub val_frac: f64,
    /// Whole-model FLOPs budget; `None` uses the pre-defined light model.
    pub flops_budget: Option<u64>,
}

impl Default for NasConfig {
    fn default() -> Self {
        Self {
            n_layers: 3,
            lambda: None,
            lambda_ratio: 0.1,
            delta: 1.0,
            weight_lr: 0.003,
            arch_lr: 0.01,
            tau_start: 5.0,
            tau_end: 0.1,
            epochs: 10,
            batch_size: 64,
            val_frac: 0.5,
            flops_budget: None,
        }
    }
}

impl NasConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 || self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config(
                "n_layers, epochs and batch_size must be >= 1".into(),
            ));
        }
        if !(self.tau_end > 0.0 && self.tau_end <= self.tau_start) {
            return Err(Error::Config(format!(
                "temperature schedule must satisfy 0 < tau_end ({}) <= tau_start ({})",
                self.tau_end, self.tau_start
            )));
        }
        if let Some(l) = self.lambda {
            if !(l >= 0.0 && l.is_finite()) {
                return Err(Error::Config(format!("lambda {l} must be >= 0")));
            }
        }
        if !(self.delta >= 0.0 && self.delta.is_finite()) {
            return Err(Error::Config(format!("delta {} must be >= 0", self.delta)));
        }
        if !(self.val_frac > 0.0 && self.val_frac < 1.0) {
            return Err(Error::Config(format!(
                "val_frac {} outside (0, 1)",
                self.val_frac
            )));
        }
        if self.flops_budget == Some(0) {
            return Err(Error::Config("flops_budget must be positive".into()));
        }
        Ok(())
    }

    /// Exponential decay from `tau_start` to `tau_end` across the epochs.
    pub fn tau_at(&self, epoch: usize) -> f64 {
        if self.epochs <= 1 {
            return self.tau_start;
        }
        let frac = epoch as f64 / (self.epochs - 1) as f64;
        self.tau_start * (self.tau_end / self.tau_start).powf(frac)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    pub train_loss: f64,
    pub val_loss: f64,
    pub penalty: f64,
}

/// Bilevel search state: supernet plus both optimizers.
pub struct Searcher {
    pub net: Supernet,
    pub lambda: f64,
    pub delta: f64,
    weight_opt: Adam,
    arch_opt: Adam,
    rng: Rng,
    steps: usize,
}

fn split_grads(all: indexmap::IndexMap<String, Matrix>) -> (ParamStore, ParamStore) {
    let (mut w, mut a) = (ParamStore::new(), ParamStore::new());
    for (k, v) in all {
        if k.starts_with("arch.") {
            a.insert(k, v);
        } else {
            w.insert(k, v);
        }
    }
    (w, a)
}

impl Searcher {
    pub fn new(net: Supernet, cfg: &NasConfig, lambda: f64, seed: u64) -> Self {
        Self {
            net,
            lambda,
            delta: cfg.delta,
            weight_opt: Adam::new(cfg.weight_lr),
            arch_opt: Adam::new(cfg.arch_lr),
            rng: rng_for(seed, &[0x6d]),
            steps: 0,
        }
    }

    fn loss_spec(&self) -> LossSpec {
        LossSpec::Distill { delta: self.delta }
    }

    fn non_finite(&self, loss: f64) -> Error {
        Error::NonFiniteLoss {
            batch: self.steps,
            loss,
            context: format!(
                " during architecture search; decisions: {}",
                self.net.arch.dump()
            ),
        }
    }

    /// Loss on `batch` under a fresh sample, before any update.
    pub fn sampled_loss(&mut self, batch: &Batch, tau: f64) -> Result<f64> {
        let mut pass = supernet_forward(&self.net, batch, tau, &mut self.rng)?;
        let l = pass
            .graph
            .bce(pass.probs, loss_terms(batch, self.loss_spec())?);
        Ok(pass.graph.value(l).scalar_value())
    }

    /// One weight update on `train` and one architecture update on `val`,
    /// each under fresh Gumbel samples.
    pub fn search_step(&mut self, train: &Batch, val: &Batch, tau: f64) -> Result<StepStats> {
        self.net.arch.tau = tau;
        let loss = self.loss_spec();

        let mut pass = supernet_forward(&self.net, train, tau, &mut self.rng)?;
        let l = pass.graph.bce(pass.probs, loss_terms(train, loss)?);
        let train_loss = pass.graph.value(l).scalar_value();
        if !train_loss.is_finite() {
            return Err(self.non_finite(train_loss));
        }
        let grads = pass.graph.backward(l);
        let (wg, _) = split_grads(pass.graph.param_grads(&grads));
        self.weight_opt.step(&mut self.net.weights, &wg)?;

        let mut pass = supernet_forward(&self.net, val, tau, &mut self.rng)?;
        let g = &mut pass.graph;
        let l = g.bce(pass.probs, loss_terms(val, loss)?);
        let val_loss = g.value(l).scalar_value();
        let pen = flops_penalty(g, &self.net)?;
        let penalty = g.value(pen).scalar_value();
        let weighted = g.scale(pen, self.lambda);
        let total = g.add(l, weighted);
        let objective = g.value(total).scalar_value();
        if !objective.is_finite() {
            return Err(self.non_finite(objective));
        }
        let grads = g.backward(total);
        let (_, ag) = split_grads(g.param_grads(&grads));
        self.arch_opt.step(&mut self.net.arch.logits, &ag)?;
        self.steps += 1;
        Ok(StepStats {
            train_loss,
            val_loss,
            penalty,
        })
    }
}

/// Gradient of `lambda * normalized expected FLOPs` with respect to the
/// architecture logits, through the same graph ops the search uses.
pub fn penalty_gradient(net: &Supernet, lambda: f64) -> Result<(f64, ParamStore)> {
    let mut g = Graph::new();
    let pen = flops_penalty(&mut g, net)?;
    let scaled = g.scale(pen, lambda);
    let value = g.value(scaled).scalar_value();
    let grads = g.backward(scaled);
    Ok((value, ParamStore::from_map(g.param_grads(&grads))))
}

/// Picks the genotype of maximum joint probability `prod_d softmax(o_d)`
/// whose FLOPs fit in `budget`. Genotypes are visited lazily in
/// non-increasing probability order; joint probabilities within
/// [`TIE_TOLERANCE`] (in log space) are ties, resolved by lower FLOPs and
/// then by the lexicographically smaller choice vector.
pub fn derive_genotype(
    aw: &ArchWeights,
    space: &SpaceSpec,
    budget: u64,
    shape: SeqShape,
) -> Result<Genotype> {
    space.validate()?;
    if aw.n_layers() != space.n_layers || aw.n_ops() != space.ops.len() {
        return Err(Error::Shape(
            "arch weights do not match the search space".into(),
        ));
    }
    let minimum = space_min_flops(space.n_layers, &space.ops, shape)?;
    if minimum > budget {
        return Err(Error::InfeasibleBudget { budget, minimum });
    }
    let logp: Vec<Vec<f64>> = aw
        .decision_keys()
        .iter()
        .map(|k| log_softmax(aw.logits_of(k)))
        .collect();
    let order: Vec<Vec<usize>> = logp
        .iter()
        .map(|lp| {
            let mut idx: Vec<usize> = (0..lp.len()).collect();
            idx.sort_by(|&a, &b| lp[b].total_cmp(&lp[a]).then(a.cmp(&b)));
            idx
        })
        .collect();
    let choices =
        |ranks: &[usize]| -> Vec<usize> { ranks.iter().zip(&order).map(|(&r, o)| o[r]).collect() };
    let score = |ranks: &[usize]| -> f64 {
        ranks
            .iter()
            .zip(&order)
            .zip(&logp)
            .map(|((&r, o), lp)| lp[o[r]])
            .sum()
    };

    struct Entry(f64, Vec<usize>);
    impl PartialEq for Entry {
        fn eq(&self, other: &Self) -> bool {
            self.cmp(other) == Ordering::Equal
        }
    }
    impl Eq for Entry {}
    impl PartialOrd for Entry {
        fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
            Some(self.cmp(other))
        }
    }
    impl Ord for Entry {
        fn cmp(&self, other: &Self) -> Ordering {
            self.0
                .total_cmp(&other.0)
                .then_with(|| other.1.cmp(&self.1))
        }
    }

    let start = vec![0usize; logp.len()];
    let mut heap = BinaryHeap::new();
    let mut seen = HashSet::new();
    heap.push(Entry(score(&start), start.clone()));
    seen.insert(start);
    let mut best: Option<(f64, u64, Vec<usize>)> = None;
    while let Some(Entry(s, ranks)) = heap.pop() {
        if let Some((bs, _, _)) = &best {
            if s < bs - TIE_TOLERANCE {
                break;
            }
        }
        let c = choices(&ranks);
        let flops = genotype_flops(&space.genotype_from_choices(&c), &space.ops, shape)?.total;
        if flops <= budget {
            let better = match &best {
                None => true,
                Some((_, bf, bc)) => (flops, &c) < (*bf, bc),
            };
            if better {
                let top = best.as_ref().map_or(s, |b| b.0);
                best = Some((top, flops, c));
            }
        }
        for d in 0..ranks.len() {
            if ranks[d] + 1 < order[d].len() {
                let mut next = ranks.clone();
                next[d] += 1;
                if seen.insert(next.clone()) {
                    heap.push(Entry(score(&next), next));
                }
            }
        }
    }
    let (_, _, c) = best.expect("a feasible genotype exists when the minimum fits");
    Ok(space.genotype_from_choices(&c))
}

/// Fresh training of `student` on `rows` of `ds` with hard labels plus
/// `delta` times the cross-entropy against the teacher's probabilities.
pub fn distill(
    student: &ModelArtifact,
    ds: &ScenarioDataset,
    rows: &[usize],
    teacher: &ModelArtifact,
    cfg: &TrainConfig,
    delta: f64,
) -> Result<ModelArtifact> {
    let set = if delta > 0.0 {
        let soft = predict(teacher, ds, rows, 512)?;
        TrainingSet::from_rows(ds, rows).with_soft_targets(soft)?
    } else {
        TrainingSet::from_rows(ds, rows)
    };
    Ok(train_model(student, &set, cfg, LossSpec::Distill { delta })?.0)
}

/// Retrains genotype `spec` from fresh initialization with distillation.
pub fn train_light(
    spec: &ModelSpec,
    ds: &ScenarioDataset,
    teacher: &ModelArtifact,
    cfg: &TrainConfig,
    delta: f64,
    provenance: Provenance,
) -> Result<ModelArtifact> {
    let fresh = build_model(spec, cfg.seed, provenance)?;
    distill(&fresh, ds, &ds.rows(RowSet::Train), teacher, cfg, delta)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SearchHistory {
    pub lambda: f64,
    /// Per epoch: temperature, mean train loss, mean val loss, penalty.
    pub epochs: Vec<(f64, f64, f64, f64)>,
}

/// Runs the bilevel search on the train partition of `ds`.
pub fn run_search(
    net: Supernet,
    ds: &ScenarioDataset,
    teacher: Option<&ModelArtifact>,
    cfg: &NasConfig,
    seed: u64,
) -> Result<(Supernet, SearchHistory)> {
    cfg.validate()?;
    if cfg.delta > 0.0 && teacher.is_none() {
        return Err(Error::Config(
            "distillation weight > 0 needs a teacher".into(),
        ));
    }
    let mut rows = ds.rows(RowSet::Train);
    rows.shuffle(&mut rng_for(seed, &[0x51]));
    let n_val = ((rows.len() as f64) * cfg.val_frac).round() as usize;
    let n_val = n_val.clamp(1, rows.len() - 1);
    let (val_rows, train_rows) = rows.split_at(n_val);
    let soft = |r: &[usize]| -> Result<Option<Vec<f64>>> {
        match teacher {
            Some(t) if cfg.delta > 0.0 => Ok(Some(predict(t, ds, r, 512)?)),
            _ => Ok(None),
        }
    };
    let with = |r: &[usize], s: Option<Vec<f64>>| -> Result<TrainingSet> {
        let set = TrainingSet::from_rows(ds, r);
        match s {
            Some(s) => set.with_soft_targets(s),
            None => Ok(set),
        }
    };
    let train_set = with(train_rows, soft(train_rows)?)?;
    let val_set = with(val_rows, soft(val_rows)?)?;
    search_on(net, &train_set, &val_set, cfg, seed)
}

/// Runs the bilevel search with explicit weight-step and arch-step sets.
/// Soft targets must be attached to both sets when `cfg.delta > 0`.
pub fn search_on(
    mut net: Supernet,
    train_set: &TrainingSet,
    val_set: &TrainingSet,
    cfg: &NasConfig,
    seed: u64,
) -> Result<(Supernet, SearchHistory)> {
    cfg.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::Data(
            "search needs non-empty train and validation sets".into(),
        ));
    }
    net.arch.tau = cfg.tau_start;
    let lambda = match cfg.lambda {
        Some(l) => l,
        None => {
            let mut probe = Searcher::new(net.clone(), cfg, 0.0, seed);
            let first: Vec<usize> = (0..val_set.len().min(cfg.batch_size)).collect();
            let l0 = probe.sampled_loss(&val_set.batch(&first), cfg.tau_start)?;
            let (p0, _) = penalty_gradient(&net, 1.0)?;
            cfg.lambda_ratio * l0 / p0
        }
    };
    log::debug!("search lambda = {lambda:.4}");
    let mut searcher = Searcher::new(net, cfg, lambda, seed);
    let mut history = SearchHistory {
        lambda,
        epochs: Vec::new(),
    };
    let mut order_rng = rng_for(seed, &[0x0e]);
    for epoch in 0..cfg.epochs {
        let tau = cfg.tau_at(epoch);
        let mut tr: Vec<usize> = (0..train_set.len()).collect();
        let mut va: Vec<usize> = (0..val_set.len()).collect();
        tr.shuffle(&mut order_rng);
        va.shuffle(&mut order_rng);
        let val_chunks: Vec<&[usize]> = va.chunks(cfg.batch_size).collect();
        let mut sums = (0.0, 0.0, 0.0);
        let mut n = 0;
        for (i, chunk) in tr.chunks(cfg.batch_size).enumerate() {
            let vb = val_set.batch(val_chunks[i % val_chunks.len()]);
            let s = searcher.search_step(&train_set.batch(chunk), &vb, tau)?;
            sums.0 += s.train_loss;
            sums.1 += s.val_loss;
            sums.2 += s.penalty;
            n += 1;
        }
        let n = n as f64;
        history
            .epochs
            .push((tau, sums.0 / n, sums.1 / n, sums.2 / n));
    }
    Ok((searcher.net, history))
}

#[derive(Clone, Debug)]
pub struct LightSearch {
    pub genotype: Genotype,
    pub arch: ArchWeights,
    pub flops: FlopsReport,
    pub history: SearchHistory,
    pub model: ModelArtifact,
}

/// Search, derive under `genotype_budget` encoder FLOPs, and retrain the
/// result from scratch with distillation from `teacher`.
#[allow(clippy::too_many_arguments)]
pub fn search_light(
    ds: &ScenarioDataset,
    teacher: &ModelArtifact,
    space: &SpaceSpec,
    profile_mlp_dims: Vec<usize>,
    head_mlp_dims: Vec<usize>,
    genotype_budget: u64,
    nas: &NasConfig,
    train: &TrainConfig,
    provenance: Provenance,
) -> Result<LightSearch> {
    let input = InputShape::of(ds);
    let net = Supernet::new(
        space.clone(),
        input,
        profile_mlp_dims.clone(),
        head_mlp_dims.clone(),
        train.seed,
    )?;
    let shape = net.shape();
    let max = space_max_flops(space.n_layers, &space.ops, shape)?;
    if genotype_budget > max {
        log::debug!("budget {genotype_budget} exceeds the space maximum {max}");
    }
    let minimum = space_min_flops(space.n_layers, &space.ops, shape)?;
    if minimum > genotype_budget {
        return Err(Error::InfeasibleBudget {
            budget: genotype_budget,
            minimum,
        });
    }
    let (net, history) = run_search(net, ds, Some(teacher), nas, train.seed)?;
    let genotype = derive_genotype(&net.arch, space, genotype_budget, shape)?;
    let flops = genotype_flops(&genotype, &space.ops, shape)?;
    let spec = searched_spec(
        input,
        space,
        genotype.clone(),
        profile_mlp_dims,
        head_mlp_dims,
    );
    let model = train_light(&spec, ds, teacher, train, nas.delta, provenance)?;
    Ok(LightSearch {
        genotype,
        arch: net.arch,
        flops,
        history,
        model,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_space() -> SpaceSpec {
        SpaceSpec::new(
            2,
            vec![
                OpSpec::conv(1, 2),
                OpSpec::conv(3, 2),
                OpSpec::avg_pool(3, 2),
            ],
        )
        .unwrap()
    }

    #[test]
    fn decision_layout() {
        let s = tiny_space();
        assert_eq!(s.decision_sizes(), vec![1, 3, 2, 2, 3, 2, 2]);
        assert_eq!(s.size(), 3 * 2 * 2 * 3 * 2 * 2);
        let c = vec![0, 2, 1, 1, 0, 0, 1];
        let g = s.genotype_from_choices(&c);
        assert_eq!(g.layers[1].input, 1);
        assert_eq!(g.layers[1].residual, vec![1]);
        assert_eq!(s.choices_of(&g), c);
    }

    #[test]
    fn zero_noise_unit_temperature_is_softmax() {
        let o = [0.3, -1.0, 2.0];
        let p = relaxed_probs(&o, &[0.0; 3], 1.0);
        let q = softmax(&o);
        for (a, b) in p.iter().zip(&q) {
            assert!((a - b).abs() < 1e-15);
        }
        let sharp = relaxed_probs(&[5.0, 0.0, 0.0], &[0.0; 3], 0.01);
        assert!(sharp[0] > 1.0 - 1e-6);
    }

    #[test]
    fn unconstrained_budget_gives_argmax() {
        let s = tiny_space();
        let shape = SeqShape { seq_len: 4, dim: 2 };
        let mut aw = ArchWeights::uniform(&s, 1.0);
        aw.logits
            .get_mut(&ArchWeights::op_key(1))
            .unwrap()
            .data_mut()
            .copy_from_slice(&[0.0, 1.0, 0.5]);
        aw.logits
            .get_mut(&ArchWeights::res_key(2, 0))
            .unwrap()
            .data_mut()
            .copy_from_slice(&[0.0, 1.0]);
        let max = space_max_flops(2, &s.ops, shape).unwrap();
        let g = derive_genotype(&aw, &s, max, shape).unwrap();
        assert_eq!(g.layers[0].op, 1);
        assert_eq!(g.layers[1].residual, vec![0]);
    }

    #[test]
    fn infeasible_budget_reports_minimum() {
        let s = tiny_space();
        let shape = SeqShape { seq_len: 4, dim: 2 };
        let aw = ArchWeights::uniform(&s, 1.0);
        let min = space_min_flops(2, &s.ops, shape).unwrap();
        match derive_genotype(&aw, &s, min - 1, shape) {
            Err(Error::InfeasibleBudget { minimum, .. }) => assert_eq!(minimum, min),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn tau_schedule_endpoints() {
        let cfg = NasConfig {
            epochs: 5,
            ..NasConfig::default()
        };
        assert!((cfg.tau_at(0) - 5.0).abs() < 1e-12);
        assert!((cfg.tau_at(4) - 0.1).abs() < 1e-12);
        assert!(cfg.tau_at(2) < cfg.tau_at(1));
    }
}
