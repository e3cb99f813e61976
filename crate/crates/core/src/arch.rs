//! Architecture vocabulary shared by the FLOPs meter, the model zoo and the
//! architecture search: sequence operation specs and genotypes.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Shape of the behavior-sequence tensor an encoder operates on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeqShape {
    pub seq_len: usize,
    pub dim: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OpKind {
    Conv1d,
    DilatedConv1d,
    AvgPool1d,
    MaxPool1d,
    Recurrent,
    SelfAttention,
}

/// One candidate sequence operation. Convolutions and pools use stride 1
/// with SAME padding, so every operation maps `[T, C_in]` to `[T, C_out]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct OpSpec {
    pub kind: OpKind,
    pub kernel: usize,
    pub dilation: usize,
    pub channels_in: usize,
    pub channels_out: usize,
    pub heads: usize,
}

impl OpSpec {
    pub fn conv(kernel: usize, channels: usize) -> Self {
        Self {
            kind: OpKind::Conv1d,
            kernel,
            dilation: 1,
            channels_in: channels,
            channels_out: channels,
            heads: 1,
        }
    }

    pub fn dilated_conv(kernel: usize, dilation: usize, channels: usize) -> Self {
        Self {
            kind: OpKind::DilatedConv1d,
            kernel,
            dilation,
            channels_in: channels,
            channels_out: channels,
            heads: 1,
        }
    }

    pub fn avg_pool(kernel: usize, channels: usize) -> Self {
        Self {
            kind: OpKind::AvgPool1d,
            kernel,
            dilation: 1,
            channels_in: channels,
            channels_out: channels,
            heads: 1,
        }
    }

    pub fn max_pool(kernel: usize, channels: usize) -> Self {
        Self {
            kind: OpKind::MaxPool1d,
            ..Self::avg_pool(kernel, channels)
        }
    }

    pub fn recurrent(channels: usize) -> Self {
        Self {
            kind: OpKind::Recurrent,
            kernel: 1,
            dilation: 1,
            channels_in: channels,
            channels_out: channels,
            heads: 1,
        }
    }

    pub fn attention(channels: usize, heads: usize) -> Self {
        Self {
            kind: OpKind::SelfAttention,
            kernel: 1,
            dilation: 1,
            channels_in: channels,
            channels_out: channels,
            heads,
        }
    }

    pub fn is_windowed(&self) -> bool {
        matches!(
            self.kind,
            OpKind::Conv1d | OpKind::DilatedConv1d | OpKind::AvgPool1d | OpKind::MaxPool1d
        )
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels_in == 0 || self.channels_out == 0 {
            return Err(Error::Shape(format!(
                "{self}: channels must be positive (in={}, out={})",
                self.channels_in, self.channels_out
            )));
        }
        if self.is_windowed() {
            if self.kernel == 0 || self.kernel % 2 == 0 {
                return Err(Error::Shape(format!(
                    "{self}: kernel must be odd and positive, got {}",
                    self.kernel
                )));
            }
            if self.dilation == 0 {
                return Err(Error::Shape(format!("{self}: dilation must be positive")));
            }
        }
        match self.kind {
            OpKind::AvgPool1d | OpKind::MaxPool1d | OpKind::Recurrent | OpKind::SelfAttention
                if self.channels_in != self.channels_out =>
            {
                Err(Error::Shape(format!(
                    "{self}: channels_in {} must equal channels_out {}",
                    self.channels_in, self.channels_out
                )))
            }
            OpKind::SelfAttention if self.heads == 0 || self.channels_in % self.heads != 0 => {
                Err(Error::Shape(format!(
                    "{self}: {} channels not divisible into {} heads",
                    self.channels_in, self.heads
                )))
            }
            _ => Ok(()),
        }
    }
}

impl fmt::Display for OpSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            OpKind::Conv1d => write!(f, "conv1d(k={})", self.kernel),
            OpKind::DilatedConv1d => {
                write!(f, "dil_conv1d(k={},d={})", self.kernel, self.dilation)
            }
            OpKind::AvgPool1d => write!(f, "avg_pool1d(k={})", self.kernel),
            OpKind::MaxPool1d => write!(f, "max_pool1d(k={})", self.kernel),
            OpKind::Recurrent => write!(f, "lstm"),
            OpKind::SelfAttention => write!(f, "self_attention(h={})", self.heads),
        }
    }
}

/// Choices for one searched layer. Source index 0 is the original input;
/// index `l >= 1` is the output of layer `l`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LayerGene {
    pub input: usize,
    pub op: usize,
    pub residual: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Genotype {
    pub layers: Vec<LayerGene>,
}

impl Genotype {
    pub fn validate(&self, n_ops: usize) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::Shape("genotype has no layers".into()));
        }
        for (i, gene) in self.layers.iter().enumerate() {
            let layer = i + 1;
            if gene.input >= layer {
                return Err(Error::Shape(format!(
                    "layer {layer}: input source {} must be < {layer}",
                    gene.input
                )));
            }
            if gene.op >= n_ops {
                return Err(Error::Shape(format!(
                    "layer {layer}: op index {} out of range ({n_ops} candidates)",
                    gene.op
                )));
            }
            if gene.residual.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::Shape(format!(
                    "layer {layer}: residual sources must be strictly increasing"
                )));
            }
            if let Some(&r) = gene.residual.iter().find(|&&r| r >= layer) {
                return Err(Error::Shape(format!(
                    "layer {layer}: residual source {r} must be < {layer}"
                )));
            }
        }
        Ok(())
    }

    /// Human-readable layer listing: data-flow edges, operations and
    /// residual edges, followed by the attentive output sum.
    pub fn describe(&self, ops: &[OpSpec]) -> String {
        let name = |src: usize| {
            if src == 0 {
                "input".to_string()
            } else {
                format!("layer{src}")
            }
        };
        let mut out = String::new();
        for (i, gene) in self.layers.iter().enumerate() {
            let residual = if gene.residual.is_empty() {
                "-".to_string()
            } else {
                gene.residual
                    .iter()
                    .map(|&r| name(r))
                    .collect::<Vec<_>>()
                    .join(", ")
            };
            let op = ops
                .get(gene.op)
                .map(|o| o.to_string())
                .unwrap_or_else(|| format!("op#{}", gene.op));
            out.push_str(&format!(
                "layer{}: {} -> {}   residual: {}\n",
                i + 1,
                name(gene.input),
                op,
                residual
            ));
        }
        let all = (1..=self.layers.len())
            .map(name)
            .collect::<Vec<_>>()
            .join(" + ");
        out.push_str(&format!("output: attentive sum of [{all}]\n"));
        out
    }
}
