//! Model architectures: a profile MLP and a behavior-sequence encoder whose
//! outputs are concatenated and fed to a prediction MLP with a sigmoid.
//!
//! Parameters are initialized LeCun-uniform, `U(-a, a)` with
//! `a = sqrt(3 / fan_in)`; biases start at zero except the LSTM forget gate
//! (1.0) and layer-norm gains (1.0). Event embeddings are `U(-sqrt 3, sqrt 3)`
//! (unit variance) and aggregation scores start at zero.

use std::rc::Rc;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::batch::Batch;
use super::graph::{Graph, PoolKind, SeqGeom, Var};
use super::params::ParamStore;
use crate::arch::{Genotype, OpKind, OpSpec};
use crate::error::{Error, Result};
use crate::rng::{rng_for, Rng};
use crate::synthgen::ScenarioDataset;
use crate::tensor::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    Recurrent,
    Attention,
}

/// Hand-designed architecture.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchConfig {
    pub encoder_kind: EncoderKind,
    pub n_encoder_layers: usize,
    pub hidden_dim: usize,
    /// Feed-forward width inside attention blocks.
    pub intermediate_dim: usize,
    pub n_heads: usize,
    pub profile_mlp_dims: Vec<usize>,
    pub head_mlp_dims: Vec<usize>,
    pub embed_dim: usize,
}

impl ArchConfig {
    /// Six encoder layers, 15 hidden units, 32 intermediate units.
    pub fn heavy(kind: EncoderKind) -> Self {
        Self {
            encoder_kind: kind,
            n_encoder_layers: 6,
            hidden_dim: 15,
            intermediate_dim: 32,
            n_heads: 3,
            profile_mlp_dims: vec![32, 32],
            head_mlp_dims: vec![32],
            embed_dim: 15,
        }
    }

    /// Same widths as [`ArchConfig::heavy`] with three encoder layers.
    pub fn light(kind: EncoderKind) -> Self {
        Self {
            n_encoder_layers: 3,
            ..Self::heavy(kind)
        }
    }
}

/// Searched encoder: a genotype over a candidate operation list. All
/// operations work at width `embed_dim`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SearchedArch {
    pub genotype: Genotype,
    pub ops: Vec<OpSpec>,
    pub embed_dim: usize,
    pub profile_mlp_dims: Vec<usize>,
    pub head_mlp_dims: Vec<usize>,
}

impl SearchedArch {
    pub fn describe(&self) -> String {
        self.genotype.describe(&self.ops)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Architecture {
    Predesigned(ArchConfig),
    Searched(SearchedArch),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct InputShape {
    pub profile_dim: usize,
    pub vocab_size: usize,
    pub seq_len: usize,
}

impl InputShape {
    pub fn of(ds: &ScenarioDataset) -> Self {
        Self {
            profile_dim: ds.profile_dim(),
            vocab_size: ds.vocab_size,
            seq_len: ds.max_seq_len,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModelSpec {
    pub input: InputShape,
    pub arch: Architecture,
}

impl ModelSpec {
    pub fn new(input: InputShape, arch: Architecture) -> Self {
        Self { input, arch }
    }

    pub fn embed_dim(&self) -> usize {
        match &self.arch {
            Architecture::Predesigned(a) => a.embed_dim,
            Architecture::Searched(s) => s.embed_dim,
        }
    }

    /// Width of the pooled sequence representation.
    pub fn seq_out_dim(&self) -> usize {
        match &self.arch {
            Architecture::Predesigned(a) => a.hidden_dim,
            Architecture::Searched(s) => s.embed_dim,
        }
    }

    pub fn profile_mlp_dims(&self) -> &[usize] {
        match &self.arch {
            Architecture::Predesigned(a) => &a.profile_mlp_dims,
            Architecture::Searched(s) => &s.profile_mlp_dims,
        }
    }

    pub fn head_mlp_dims(&self) -> &[usize] {
        match &self.arch {
            Architecture::Predesigned(a) => &a.head_mlp_dims,
            Architecture::Searched(s) => &s.head_mlp_dims,
        }
    }

    pub fn profile_out_dim(&self) -> usize {
        self.profile_mlp_dims()
            .last()
            .copied()
            .unwrap_or(self.input.profile_dim)
    }

    pub fn head_input_dim(&self) -> usize {
        self.profile_out_dim() + self.seq_out_dim()
    }

    pub fn validate(&self) -> Result<()> {
        let InputShape {
            profile_dim,
            vocab_size,
            seq_len,
        } = self.input;
        for (name, v) in [
            ("profile_dim", profile_dim),
            ("vocab_size", vocab_size),
            ("seq_len", seq_len),
            ("embed_dim", self.embed_dim()),
        ] {
            if v == 0 {
                return Err(Error::Shape(format!("{name} must be >= 1")));
            }
        }
        for (name, dims) in [
            ("profile_mlp_dims", self.profile_mlp_dims()),
            ("head_mlp_dims", self.head_mlp_dims()),
        ] {
            if let Some(i) = dims.iter().position(|&d| d == 0) {
                return Err(Error::Shape(format!("{name}[{i}] must be >= 1")));
            }
        }
        match &self.arch {
            Architecture::Predesigned(a) => {
                if a.n_encoder_layers == 0 || a.hidden_dim == 0 || a.intermediate_dim == 0 {
                    return Err(Error::Shape(format!(
                        "encoder dims must be positive (layers={}, hidden={}, intermediate={})",
                        a.n_encoder_layers, a.hidden_dim, a.intermediate_dim
                    )));
                }
                if a.encoder_kind == EncoderKind::Attention
                    && (a.n_heads == 0 || a.hidden_dim % a.n_heads != 0)
                {
                    return Err(Error::Shape(format!(
                        "hidden_dim {} is not divisible into {} attention heads",
                        a.hidden_dim, a.n_heads
                    )));
                }
            }
            Architecture::Searched(s) => {
                s.genotype.validate(s.ops.len())?;
                for op in &s.ops {
                    op.validate()?;
                    if op.channels_in != s.embed_dim || op.channels_out != s.embed_dim {
                        return Err(Error::Shape(format!(
                            "{op}: channels {}->{} do not match embed_dim {}",
                            op.channels_in, op.channels_out, s.embed_dim
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn describe(&self) -> String {
        match &self.arch {
            Architecture::Predesigned(a) => format!(
                "{:?} encoder x{} (hidden {}, intermediate {}, heads {}), profile mlp {:?}, head mlp {:?}\n",
                a.encoder_kind,
                a.n_encoder_layers,
                a.hidden_dim,
                a.intermediate_dim,
                a.n_heads,
                a.profile_mlp_dims,
                a.head_mlp_dims
            ),
            Architecture::Searched(s) => s.describe(),
        }
    }
}

/// Where a trained model came from.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub strategy: String,
    /// Scenario id, or `"agnostic"` for the shared model.
    pub scenario: String,
    pub seed: u64,
    pub train_config_hash: String,
}

impl Provenance {
    pub fn new(strategy: &str, scenario: impl ToString, seed: u64) -> Self {
        Self {
            strategy: strategy.to_string(),
            scenario: scenario.to_string(),
            seed,
            train_config_hash: String::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelArtifact {
    pub spec: ModelSpec,
    pub params: ParamStore,
    pub provenance: Provenance,
}

impl ModelArtifact {
    pub fn param_count(&self) -> usize {
        self.params.scalar_count()
    }

    /// Checks that every array is finite and matches a freshly built layout.
    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        if !self.params.is_finite() {
            return Err(Error::Data("non-finite parameter value".into()));
        }
        let reference = init_params(&self.spec, 0)?;
        if !reference.same_layout(&self.params) {
            return Err(Error::Shape(
                "parameter arrays do not match the architecture".into(),
            ));
        }
        Ok(())
    }
}

fn lecun(rng: &mut Rng, rows: usize, cols: usize, fan_in: usize) -> Matrix {
    let a = (3.0 / fan_in as f64).sqrt();
    Matrix::from_vec(
        rows,
        cols,
        (0..rows * cols).map(|_| rng.random_range(-a..a)).collect(),
    )
}

fn init_dense(store: &mut ParamStore, rng: &mut Rng, prefix: &str, fan_in: usize, out: usize) {
    store.insert(format!("{prefix}.w"), lecun(rng, fan_in, out, fan_in));
    store.insert(format!("{prefix}.b"), Matrix::zeros(1, out));
}

fn init_lstm(store: &mut ParamStore, rng: &mut Rng, prefix: &str, input: usize, hidden: usize) {
    store.insert(format!("{prefix}.wx"), lecun(rng, input, 4 * hidden, input));
    store.insert(
        format!("{prefix}.wh"),
        lecun(rng, hidden, 4 * hidden, hidden),
    );
    let mut b = Matrix::zeros(1, 4 * hidden);
    for j in hidden..2 * hidden {
        b.data_mut()[j] = 1.0;
    }
    store.insert(format!("{prefix}.b"), b);
}

fn init_mhsa(store: &mut ParamStore, rng: &mut Rng, prefix: &str, dim: usize) {
    for part in ["q", "k", "v", "o"] {
        init_dense(store, rng, &format!("{prefix}.{part}"), dim, dim);
    }
}

fn init_layer_norm(store: &mut ParamStore, prefix: &str, dim: usize) {
    store.insert(format!("{prefix}.g"), Matrix::filled(1, dim, 1.0));
    store.insert(format!("{prefix}.b"), Matrix::zeros(1, dim));
}

/// Parameters for one candidate sequence operation.
pub(crate) fn init_op(store: &mut ParamStore, rng: &mut Rng, prefix: &str, op: &OpSpec) {
    match op.kind {
        OpKind::Conv1d | OpKind::DilatedConv1d => init_dense(
            store,
            rng,
            prefix,
            op.kernel * op.channels_in,
            op.channels_out,
        ),
        OpKind::AvgPool1d | OpKind::MaxPool1d => {}
        OpKind::Recurrent => init_lstm(store, rng, prefix, op.channels_in, op.channels_out),
        OpKind::SelfAttention => init_mhsa(store, rng, prefix, op.channels_in),
    }
}

fn init_trunk(store: &mut ParamStore, rng: &mut Rng, spec: &ModelSpec) {
    let mut width = spec.input.profile_dim;
    for (i, &d) in spec.profile_mlp_dims().iter().enumerate() {
        init_dense(store, rng, &format!("profile.{i}"), width, d);
        width = d;
    }
    let e = spec.embed_dim();
    let a = 3f64.sqrt();
    store.insert(
        "embed",
        Matrix::from_vec(
            spec.input.vocab_size + 1,
            e,
            (0..(spec.input.vocab_size + 1) * e)
                .map(|_| rng.random_range(-a..a))
                .collect(),
        ),
    );
}

fn init_head(store: &mut ParamStore, rng: &mut Rng, spec: &ModelSpec) {
    let mut width = spec.head_input_dim();
    for (i, &d) in spec.head_mlp_dims().iter().enumerate() {
        init_dense(store, rng, &format!("head.{i}"), width, d);
        width = d;
    }
    init_dense(store, rng, "head.out", width, 1);
}

/// Deterministic parameter initialization for `spec`.
pub fn init_params(spec: &ModelSpec, seed: u64) -> Result<ParamStore> {
    spec.validate()?;
    let mut rng = rng_for(seed, &[0x21]);
    let mut store = ParamStore::new();
    init_trunk(&mut store, &mut rng, spec);
    match &spec.arch {
        Architecture::Predesigned(a) => match a.encoder_kind {
            EncoderKind::Recurrent => {
                let mut input = a.embed_dim;
                for l in 0..a.n_encoder_layers {
                    init_lstm(
                        &mut store,
                        &mut rng,
                        &format!("enc.{l}"),
                        input,
                        a.hidden_dim,
                    );
                    input = a.hidden_dim;
                }
            }
            EncoderKind::Attention => {
                if a.embed_dim != a.hidden_dim {
                    init_dense(&mut store, &mut rng, "enc.in", a.embed_dim, a.hidden_dim);
                }
                for l in 0..a.n_encoder_layers {
                    let p = format!("enc.{l}");
                    init_mhsa(&mut store, &mut rng, &format!("{p}.attn"), a.hidden_dim);
                    init_layer_norm(&mut store, &format!("{p}.ln1"), a.hidden_dim);
                    init_dense(
                        &mut store,
                        &mut rng,
                        &format!("{p}.ffn1"),
                        a.hidden_dim,
                        a.intermediate_dim,
                    );
                    init_dense(
                        &mut store,
                        &mut rng,
                        &format!("{p}.ffn2"),
                        a.intermediate_dim,
                        a.hidden_dim,
                    );
                    init_layer_norm(&mut store, &format!("{p}.ln2"), a.hidden_dim);
                }
            }
        },
        Architecture::Searched(s) => {
            for (l, gene) in s.genotype.layers.iter().enumerate() {
                init_op(
                    &mut store,
                    &mut rng,
                    &format!("cell.{}", l + 1),
                    &s.ops[gene.op],
                );
            }
            store.insert("agg.scores", Matrix::zeros(1, s.genotype.layers.len()));
        }
    }
    init_head(&mut store, &mut rng, spec);
    Ok(store)
}

/// Builds a fresh artifact with parameters drawn from `seed`.
pub fn build_model(spec: &ModelSpec, seed: u64, provenance: Provenance) -> Result<ModelArtifact> {
    Ok(ModelArtifact {
        params: init_params(spec, seed)?,
        spec: spec.clone(),
        provenance,
    })
}

pub(crate) fn param(g: &mut Graph, params: &ParamStore, name: &str) -> Result<Var> {
    Ok(g.param(name, params.require(name)?))
}

pub(crate) fn dense(g: &mut Graph, params: &ParamStore, prefix: &str, x: Var) -> Result<Var> {
    let w = param(g, params, &format!("{prefix}.w"))?;
    let b = param(g, params, &format!("{prefix}.b"))?;
    let h = g.matmul(x, w);
    Ok(g.add_bias(h, b))
}

fn lstm_layer(
    g: &mut Graph,
    params: &ParamStore,
    prefix: &str,
    x: Var,
    geom: SeqGeom,
) -> Result<Var> {
    let wx = param(g, params, &format!("{prefix}.wx"))?;
    let wh = param(g, params, &format!("{prefix}.wh"))?;
    let b = param(g, params, &format!("{prefix}.b"))?;
    let xw = g.matmul(x, wx);
    let xw = g.add_bias(xw, b);
    Ok(g.lstm(xw, wh, geom))
}

fn mhsa(
    g: &mut Graph,
    params: &ParamStore,
    prefix: &str,
    x: Var,
    heads: usize,
    geom: SeqGeom,
    mask: &Rc<Vec<f64>>,
) -> Result<Var> {
    let q = dense(g, params, &format!("{prefix}.q"), x)?;
    let k = dense(g, params, &format!("{prefix}.k"), x)?;
    let v = dense(g, params, &format!("{prefix}.v"), x)?;
    let a = g.attention(q, k, v, heads, geom, Rc::clone(mask));
    dense(g, params, &format!("{prefix}.o"), a)
}

fn layer_norm(g: &mut Graph, params: &ParamStore, prefix: &str, x: Var) -> Result<Var> {
    let gamma = param(g, params, &format!("{prefix}.g"))?;
    let beta = param(g, params, &format!("{prefix}.b"))?;
    Ok(g.layer_norm(x, gamma, beta))
}

/// Applies one candidate operation to a `[T*B, C]` sequence.
pub(crate) fn op_forward(
    g: &mut Graph,
    params: &ParamStore,
    prefix: &str,
    op: &OpSpec,
    x: Var,
    geom: SeqGeom,
    mask: &Rc<Vec<f64>>,
) -> Result<Var> {
    match op.kind {
        OpKind::Conv1d | OpKind::DilatedConv1d => {
            let cols = g.im2col(x, op.kernel, op.dilation, geom);
            dense(g, params, prefix, cols)
        }
        OpKind::AvgPool1d => Ok(g.pool(x, PoolKind::Avg, op.kernel, geom)),
        OpKind::MaxPool1d => Ok(g.pool(x, PoolKind::Max, op.kernel, geom)),
        OpKind::Recurrent => lstm_layer(g, params, prefix, x, geom),
        OpKind::SelfAttention => mhsa(g, params, prefix, x, op.heads, geom, mask),
    }
}

fn predesigned_encoder(
    g: &mut Graph,
    params: &ParamStore,
    a: &ArchConfig,
    x: Var,
    geom: SeqGeom,
    mask: &Rc<Vec<f64>>,
) -> Result<Var> {
    let mut h = x;
    match a.encoder_kind {
        EncoderKind::Recurrent => {
            for l in 0..a.n_encoder_layers {
                h = lstm_layer(g, params, &format!("enc.{l}"), h, geom)?;
            }
        }
        EncoderKind::Attention => {
            if a.embed_dim != a.hidden_dim {
                h = dense(g, params, "enc.in", h)?;
            }
            for l in 0..a.n_encoder_layers {
                let p = format!("enc.{l}");
                let att = mhsa(g, params, &format!("{p}.attn"), h, a.n_heads, geom, mask)?;
                let r = g.add(h, att);
                h = layer_norm(g, params, &format!("{p}.ln1"), r)?;
                let f = dense(g, params, &format!("{p}.ffn1"), h)?;
                let f = g.relu(f);
                let f = dense(g, params, &format!("{p}.ffn2"), f)?;
                let r = g.add(h, f);
                h = layer_norm(g, params, &format!("{p}.ln2"), r)?;
            }
        }
    }
    Ok(h)
}

/// Runs a fixed genotype: each layer applies its op to its chosen input and
/// adds its residual sources; the encoder output is the softmax-weighted
/// sum of all layer outputs.
fn searched_encoder(
    g: &mut Graph,
    params: &ParamStore,
    s: &SearchedArch,
    x: Var,
    geom: SeqGeom,
    mask: &Rc<Vec<f64>>,
) -> Result<Var> {
    let mut sources = vec![x];
    for (l, gene) in s.genotype.layers.iter().enumerate() {
        let input = sources[gene.input];
        let mut out = op_forward(
            g,
            params,
            &format!("cell.{}", l + 1),
            &s.ops[gene.op],
            input,
            geom,
            mask,
        )?;
        for &r in &gene.residual {
            out = g.add(out, sources[r]);
        }
        sources.push(out);
    }
    attentive_sum(g, params, &sources[1..])
}

pub(crate) fn attentive_sum(g: &mut Graph, params: &ParamStore, outputs: &[Var]) -> Result<Var> {
    let scores = param(g, params, "agg.scores")?;
    let weights = g.softmax_rows(scores);
    let mut acc: Option<Var> = None;
    for (i, &o) in outputs.iter().enumerate() {
        let term = g.scale_by_entry(o, weights, i);
        acc = Some(match acc {
            Some(a) => g.add(a, term),
            None => term,
        });
    }
    Ok(acc.expect("at least one layer"))
}

fn check_batch(spec: &ModelSpec, batch: &Batch) -> Result<()> {
    if batch.profiles.cols() != spec.input.profile_dim {
        return Err(Error::Shape(format!(
            "batch profile width {} but model expects {}",
            batch.profiles.cols(),
            spec.input.profile_dim
        )));
    }
    if batch.geom.steps != spec.input.seq_len {
        return Err(Error::Shape(format!(
            "batch sequence length {} but model expects {}",
            batch.geom.steps, spec.input.seq_len
        )));
    }
    if let Some(&e) = batch
        .events
        .iter()
        .find(|&&e| e as usize > spec.input.vocab_size)
    {
        return Err(Error::Shape(format!(
            "event id {e} exceeds model vocabulary {}",
            spec.input.vocab_size
        )));
    }
    Ok(())
}

/// The shared parts around an encoder: returns (profile features,
/// embedded sequence).
pub(crate) fn trunk(
    g: &mut Graph,
    params: &ParamStore,
    spec: &ModelSpec,
    batch: &Batch,
) -> Result<(Var, Var)> {
    check_batch(spec, batch)?;
    let mut p = g.input(batch.profiles.clone());
    for i in 0..spec.profile_mlp_dims().len() {
        let h = dense(g, params, &format!("profile.{i}"), p)?;
        p = g.relu(h);
    }
    let table = param(g, params, "embed")?;
    let x = g.gather(table, Rc::new(batch.events.clone()));
    Ok((p, x))
}

/// Masked mean pooling, concatenation and the prediction MLP.
pub(crate) fn head(
    g: &mut Graph,
    params: &ParamStore,
    spec: &ModelSpec,
    profile: Var,
    seq: Var,
    geom: SeqGeom,
    mask: &Rc<Vec<f64>>,
) -> Result<Var> {
    let pooled = g.masked_mean(seq, geom, Rc::clone(mask));
    let mut h = g.concat_cols(&[profile, pooled]);
    for i in 0..spec.head_mlp_dims().len() {
        let z = dense(g, params, &format!("head.{i}"), h)?;
        h = g.relu(z);
    }
    let logit = dense(g, params, "head.out", h)?;
    Ok(g.sigmoid(logit))
}

/// Records a forward pass and returns the `[B, 1]` probability node.
pub fn forward(spec: &ModelSpec, params: &ParamStore, g: &mut Graph, batch: &Batch) -> Result<Var> {
    let (profile, x) = trunk(g, params, spec, batch)?;
    let mask = Rc::new(batch.mask.clone());
    let seq = match &spec.arch {
        Architecture::Predesigned(a) => predesigned_encoder(g, params, a, x, batch.geom, &mask)?,
        Architecture::Searched(s) => searched_encoder(g, params, s, x, batch.geom, &mask)?,
    };
    head(g, params, spec, profile, seq, batch.geom, &mask)
}

/// Probabilities for one batch.
pub fn predict_batch(model: &ModelArtifact, batch: &Batch) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let out = forward(&model.spec, &model.params, &mut g, batch)?;
    Ok(g.value(out).data().to_vec())
}

/// Probabilities for `rows` of `ds`, evaluated in chunks of `chunk` rows.
pub fn predict(
    model: &ModelArtifact,
    ds: &ScenarioDataset,
    rows: &[usize],
    chunk: usize,
) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(rows.len());
    for part in rows.chunks(chunk.max(1)) {
        out.extend(predict_batch(model, &Batch::from_rows(ds, part))?);
    }
    Ok(out)
}
