//! Layer-graph description shared by the model builders and the executor.

use serde::{Deserialize, Serialize};

/// A single layer. All convolutions use stride 1 and "same" zero padding.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum Op {
    Input {
        channels: usize,
    },
    Conv {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        bias: bool,
    },
    BatchNorm {
        channels: usize,
    },
    Relu,
    Sigmoid,
    /// 2×2 max pooling, stride 2.
    MaxPool,
    /// 2×2 transposed convolution, stride 2.
    UpConv {
        in_channels: usize,
        out_channels: usize,
    },
    /// 3×3 average pooling, stride 1, padding excluded from the mean.
    AvgPool,
    /// Channel concatenation of all inputs, in order.
    Concat,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Node {
    pub name: String,
    #[serde(flatten)]
    pub op: Op,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub inputs: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamRole {
    Weight,
    Bias,
    Gamma,
    Beta,
    RunningMean,
    RunningVar,
}

impl ParamRole {
    pub fn suffix(self) -> &'static str {
        match self {
            ParamRole::Weight => "weight",
            ParamRole::Bias => "bias",
            ParamRole::Gamma => "gamma",
            ParamRole::Beta => "beta",
            ParamRole::RunningMean => "running_mean",
            ParamRole::RunningVar => "running_var",
        }
    }

    /// Running statistics are buffers: updated by forward passes, never by the optimizer.
    pub fn trainable(self) -> bool {
        !matches!(self, ParamRole::RunningMean | ParamRole::RunningVar)
    }
}

/// One parameter tensor of a graph.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamInfo {
    pub name: String,
    pub shape: Vec<usize>,
    pub role: ParamRole,
    pub node: usize,
}

impl ParamInfo {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl Op {
    /// Parameter tensors owned by this layer, in slot order.
    pub fn params(&self) -> Vec<(ParamRole, Vec<usize>)> {
        match *self {
            Op::Conv {
                in_channels,
                out_channels,
                kernel,
                bias,
            } => {
                let mut p = vec![(
                    ParamRole::Weight,
                    vec![out_channels, in_channels, kernel, kernel],
                )];
                if bias {
                    p.push((ParamRole::Bias, vec![out_channels]));
                }
                p
            }
            Op::UpConv {
                in_channels,
                out_channels,
            } => vec![
                (ParamRole::Weight, vec![in_channels, out_channels, 2, 2]),
                (ParamRole::Bias, vec![out_channels]),
            ],
            Op::BatchNorm { channels } => vec![
                (ParamRole::Gamma, vec![channels]),
                (ParamRole::Beta, vec![channels]),
                (ParamRole::RunningMean, vec![channels]),
                (ParamRole::RunningVar, vec![channels]),
            ],
            _ => Vec::new(),
        }
    }
}

/// Every parameter of `nodes`, in node order.
pub fn param_infos(nodes: &[Node]) -> Vec<ParamInfo> {
    nodes
        .iter()
        .enumerate()
        .flat_map(|(i, node)| {
            node.op
                .params()
                .into_iter()
                .map(move |(role, shape)| ParamInfo {
                    name: format!("{}.{}", node.name, role.suffix()),
                    shape,
                    role,
                    node: i,
                })
        })
        .collect()
}

/// Index of each node's first parameter slot.
pub(crate) fn slot_offsets(nodes: &[Node]) -> Vec<usize> {
    let mut next = 0;
    nodes
        .iter()
        .map(|n| {
            let at = next;
            next += n.op.params().len();
            at
        })
        .collect()
}
