//! Closed-form FLOPs counts for candidate operations, searched genotypes and
//! whole models. One multiply-accumulate counts as 2 FLOPs; every
//! elementwise add, multiply, activation or exponential counts as 1.
//! Embedding lookups are free; softmax arithmetic is counted. The formulas
//! are listed in `docs/FORMATS.md`.

use serde::{Deserialize, Serialize};

use crate::arch::{Genotype, OpKind, OpSpec, SeqShape};
use crate::budgetnas::ArchWeights;
use crate::error::{Error, Result};
use crate::nets::{Architecture, EncoderKind, ModelSpec, ParamStore};

pub const MAC_FLOPS: u64 = 2;

fn dense_seq(c_in: u64, c_out: u64, t: u64) -> u64 {
    MAC_FLOPS * c_in * c_out * t + c_out * t
}

fn lstm_step(d: u64, h: u64) -> u64 {
    // gate pre-activations, bias adds, 3 sigmoids + 1 tanh, cell update
    // (3 per unit), tanh of the cell, output product
    MAC_FLOPS * 4 * h * (d + h) + 4 * h + 4 * h + 3 * h + h + h
}

fn mhsa(d: u64, heads: u64, t: u64) -> u64 {
    let projections = 4 * dense_seq(d, d, t);
    let scores = MAC_FLOPS * t * t * d;
    let scale = t * t * heads;
    let softmax = 3 * t * t * heads;
    let weighted = MAC_FLOPS * t * t * d;
    projections + scores + scale + softmax + weighted
}

fn layer_norm(d: u64, t: u64) -> u64 {
    7 * d * t + 4 * t
}

/// FLOPs of one candidate operation over a length-`seq_len` sequence.
pub fn op_flops(op: &OpSpec, seq_len: usize) -> Result<u64> {
    op.validate()?;
    let t = seq_len as u64;
    let (ci, co, k) = (
        op.channels_in as u64,
        op.channels_out as u64,
        op.kernel as u64,
    );
    Ok(match op.kind {
        OpKind::Conv1d | OpKind::DilatedConv1d => MAC_FLOPS * k * ci * co * t + co * t,
        OpKind::AvgPool1d | OpKind::MaxPool1d => k * ci * t,
        OpKind::Recurrent => t * lstm_step(ci, co),
        OpKind::SelfAttention => mhsa(ci, op.heads as u64, t),
    })
}

/// One residual addition of a `[T, D]` sequence.
pub fn residual_flops(shape: SeqShape) -> u64 {
    (shape.seq_len * shape.dim) as u64
}

/// Softmax over `n` layer scores plus the weighted sum of `n` outputs.
pub fn aggregation_flops(n_layers: usize, shape: SeqShape) -> u64 {
    let n = n_layers as u64;
    let dt = (shape.seq_len * shape.dim) as u64;
    3 * n + (2 * n - 1) * dt
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerFlops {
    pub op: u64,
    pub residual: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlopsReport {
    pub layers: Vec<LayerFlops>,
    pub aggregation: u64,
    pub total: u64,
    /// FLOPs of the most expensive genotype in the same space.
    pub reference: u64,
    pub normalized: f64,
}

fn check_ops(ops: &[OpSpec], seq_len: usize) -> Result<Vec<u64>> {
    if ops.is_empty() {
        return Err(Error::Config("empty operation candidate list".into()));
    }
    ops.iter().map(|op| op_flops(op, seq_len)).collect()
}

/// Most expensive genotype: the costliest op and every residual edge in
/// each layer.
pub fn space_max_flops(n_layers: usize, ops: &[OpSpec], shape: SeqShape) -> Result<u64> {
    let costs = check_ops(ops, shape.seq_len)?;
    let max = *costs.iter().max().expect("non-empty");
    let res = residual_flops(shape);
    Ok((1..=n_layers as u64).map(|l| max + l * res).sum::<u64>()
        + aggregation_flops(n_layers, shape))
}

/// Cheapest genotype: the cheapest op and no residual edges.
pub fn space_min_flops(n_layers: usize, ops: &[OpSpec], shape: SeqShape) -> Result<u64> {
    let costs = check_ops(ops, shape.seq_len)?;
    let min = *costs.iter().min().expect("non-empty");
    Ok(n_layers as u64 * min + aggregation_flops(n_layers, shape))
}

pub fn genotype_flops(g: &Genotype, ops: &[OpSpec], shape: SeqShape) -> Result<FlopsReport> {
    g.validate(ops.len())?;
    let costs = check_ops(ops, shape.seq_len)?;
    let res = residual_flops(shape);
    let layers: Vec<LayerFlops> = g
        .layers
        .iter()
        .map(|gene| LayerFlops {
            op: costs[gene.op],
            residual: gene.residual.len() as u64 * res,
        })
        .collect();
    let aggregation = aggregation_flops(g.layers.len(), shape);
    let total = layers.iter().map(|l| l.op + l.residual).sum::<u64>() + aggregation;
    let reference = space_max_flops(g.layers.len(), ops, shape)?;
    Ok(FlopsReport {
        layers,
        aggregation,
        total,
        reference,
        normalized: total as f64 / reference as f64,
    })
}

/// Probability-weighted FLOPs under `softmax(o)` for every decision, with
/// its gradient with respect to the logits.
#[derive(Clone, Debug)]
pub struct ExpectedFlops {
    pub value: f64,
    pub normalized: f64,
    /// d value / d logits, keyed like [`ArchWeights::logits`].
    pub grad: ParamStore,
}

pub fn expected_flops(aw: &ArchWeights, ops: &[OpSpec], shape: SeqShape) -> Result<ExpectedFlops> {
    let costs: Vec<f64> = check_ops(ops, shape.seq_len)?
        .into_iter()
        .map(|c| c as f64)
        .collect();
    if aw.n_ops() != ops.len() {
        return Err(Error::Shape(format!(
            "arch weights have {} op logits per layer, space has {} ops",
            aw.n_ops(),
            ops.len()
        )));
    }
    let res = residual_flops(shape) as f64;
    let n = aw.n_layers();
    let mut value = aggregation_flops(n, shape) as f64;
    let mut grad = aw.logits.zeros_like();
    for l in 1..=n {
        let p = aw.probs(&ArchWeights::op_key(l));
        let layer: f64 = p.iter().zip(&costs).map(|(a, c)| a * c).sum();
        value += layer;
        let g = grad.get_mut(&ArchWeights::op_key(l)).expect("op logits");
        for (i, gv) in g.data_mut().iter_mut().enumerate() {
            *gv = p[i] * (costs[i] - layer);
        }
        for j in 0..l {
            let key = ArchWeights::res_key(l, j);
            let p = aw.probs(&key);
            value += p[1] * res;
            let g = grad.get_mut(&key).expect("residual logits");
            let d = p[0] * p[1] * res;
            g.data_mut().copy_from_slice(&[-d, d]);
        }
    }
    let reference = space_max_flops(n, ops, shape)? as f64;
    Ok(ExpectedFlops {
        value,
        normalized: value / reference,
        grad,
    })
}

/// Per-sample FLOPs of a whole model, split by component.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelFlops {
    pub profile: u64,
    pub encoder: u64,
    pub pooling: u64,
    pub head: u64,
    pub total: u64,
}

fn mlp(input: usize, dims: &[usize]) -> (u64, usize) {
    let mut width = input as u64;
    let mut total = 0;
    for &d in dims {
        let d = d as u64;
        total += dense_seq(width, d, 1) + d;
        width = d;
    }
    (total, width as usize)
}

fn predesigned_encoder(spec: &ModelSpec, a: &crate::nets::ArchConfig) -> u64 {
    let t = spec.input.seq_len as u64;
    let h = a.hidden_dim as u64;
    let e = a.embed_dim as u64;
    match a.encoder_kind {
        EncoderKind::Recurrent => (0..a.n_encoder_layers)
            .map(|l| t * lstm_step(if l == 0 { e } else { h }, h))
            .sum(),
        EncoderKind::Attention => {
            let i = a.intermediate_dim as u64;
            let proj = if e != h { dense_seq(e, h, t) } else { 0 };
            let block = mhsa(h, a.n_heads as u64, t)
                + h * t
                + layer_norm(h, t)
                + dense_seq(h, i, t)
                + i * t
                + dense_seq(i, h, t)
                + h * t
                + layer_norm(h, t);
            proj + a.n_encoder_layers as u64 * block
        }
    }
}

pub fn model_flops(spec: &ModelSpec) -> Result<ModelFlops> {
    spec.validate()?;
    let (profile, p_out) = mlp(spec.input.profile_dim, spec.profile_mlp_dims());
    let encoder = match &spec.arch {
        Architecture::Predesigned(a) => predesigned_encoder(spec, a),
        Architecture::Searched(s) => {
            genotype_flops(
                &s.genotype,
                &s.ops,
                SeqShape {
                    seq_len: spec.input.seq_len,
                    dim: s.embed_dim,
                },
            )?
            .total
        }
    };
    let d = spec.seq_out_dim() as u64;
    let pooling = 2 * d * spec.input.seq_len as u64 + d;
    let (hidden, width) = mlp(p_out + spec.seq_out_dim(), spec.head_mlp_dims());
    let head = hidden + dense_seq(width as u64, 1, 1) + 1;
    Ok(ModelFlops {
        profile,
        encoder,
        pooling,
        head,
        total: profile + encoder + pooling + head,
    })
}

/// Encoder budget left for a searched genotype when the whole model must
/// stay within `total_budget`; the rest of `template` is fixed overhead.
pub fn genotype_budget(total_budget: u64, template: &ModelSpec) -> Result<u64> {
    let f = model_flops(template)?;
    let overhead = f.total - f.encoder;
    total_budget.checked_sub(overhead).ok_or_else(|| {
        Error::Config(format!(
            "budget {total_budget} is below the fixed non-encoder cost {overhead}"
        ))
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::LayerGene;

    #[test]
    fn hand_counts() {
        assert_eq!(op_flops(&OpSpec::conv(3, 2), 4).unwrap(), 104);
        assert_eq!(op_flops(&OpSpec::avg_pool(3, 1), 1).unwrap(), 3);
        assert!(op_flops(&OpSpec::conv(2, 2), 4).is_err());
        // k=1 convolution is a dense layer applied per position
        let d = 6;
        assert_eq!(
            op_flops(&OpSpec::conv(1, d), 10).unwrap(),
            10 * (2 * d * d + d) as u64
        );
    }

    #[test]
    fn single_layer_is_op_plus_aggregation() {
        let ops = vec![OpSpec::conv(3, 4), OpSpec::max_pool(3, 4)];
        let shape = SeqShape { seq_len: 5, dim: 4 };
        let g = Genotype {
            layers: vec![LayerGene {
                input: 0,
                op: 0,
                residual: vec![],
            }],
        };
        let r = genotype_flops(&g, &ops, shape).unwrap();
        assert_eq!(
            r.total,
            op_flops(&ops[0], 5).unwrap() + aggregation_flops(1, shape)
        );
        assert!(r.normalized > 0.0 && r.normalized <= 1.0);
    }

    #[test]
    fn attention_and_recurrent_counts() {
        // T=2, D=2, h=1: projections 4*(2*4*2 + 4), scores/weighted 2*4*2 each,
        // scale 4, softmax 12
        assert_eq!(
            op_flops(&OpSpec::attention(2, 1), 2).unwrap(),
            4 * 20 + 16 + 16 + 4 + 12
        );
        // one step, D=H=1: 2*4*2 MACs + 13 elementwise
        assert_eq!(op_flops(&OpSpec::recurrent(1), 1).unwrap(), 16 + 13);
    }
}
