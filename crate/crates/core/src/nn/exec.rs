//! Graph execution: forward pass with cached activations, reverse-mode backward.

use super::graph::{slot_offsets, Node, Op};
use super::kernels::{self, BnStats};
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch norm normalizes with batch statistics.
    Train,
    /// Batch norm uses running statistics; intermediate activations are freed.
    Eval,
}

#[derive(Debug)]
enum Cache<T> {
    None,
    Pool(Vec<u32>),
    Norm(BnStats<T>),
}

/// Activations of one forward pass.
#[derive(Debug)]
pub struct Forward<T> {
    mode: Mode,
    outputs: Vec<Tensor<T>>,
    caches: Vec<Cache<T>>,
}

impl<T: Scalar> Forward<T> {
    pub fn output(&self) -> &Tensor<T> {
        self.outputs.last().expect("graph has at least one node")
    }

    pub fn into_output(mut self) -> Tensor<T> {
        self.outputs.pop().expect("graph has at least one node")
    }

    /// `(node, batch mean, unbiased batch variance)` for every batch-norm
    /// layer of a training pass.
    pub fn batch_statistics(&self) -> impl Iterator<Item = (usize, &[T], &[T])> {
        self.caches.iter().enumerate().filter_map(|(i, c)| match c {
            Cache::Norm(s) if self.mode == Mode::Train => {
                Some((i, s.mean.as_slice(), s.var_unbiased.as_slice()))
            }
            _ => None,
        })
    }
}

fn check_params<T: Scalar>(nodes: &[Node], params: &[Vec<T>]) -> Result<()> {
    let infos = super::graph::param_infos(nodes);
    if infos.len() != params.len() {
        return Err(Error::Shape(format!(
            "graph has {} parameter tensors, got {}",
            infos.len(),
            params.len()
        )));
    }
    for (info, p) in infos.iter().zip(params) {
        if info.len() != p.len() {
            return Err(Error::Shape(format!(
                "{} expects {} values ({:?}), got {}",
                info.name,
                info.len(),
                info.shape,
                p.len()
            )));
        }
    }
    Ok(())
}

/// Runs the graph on `input` (NCHW). The last node is the output.
pub fn forward<T: Scalar>(
    nodes: &[Node],
    params: &[Vec<T>],
    input: Tensor<T>,
    mode: Mode,
) -> Result<Forward<T>> {
    check_params(nodes, params)?;
    let slots = slot_offsets(nodes);
    let mut last_use = vec![0usize; nodes.len()];
    for (i, node) in nodes.iter().enumerate() {
        for &j in &node.inputs {
            if j >= i {
                return Err(Error::Shape(format!(
                    "node {} reads node {j}, which is not earlier in the graph",
                    node.name
                )));
            }
            last_use[j] = i;
        }
    }
    let mut outputs: Vec<Tensor<T>> = Vec::with_capacity(nodes.len());
    let mut caches = Vec::with_capacity(nodes.len());
    for (i, node) in nodes.iter().enumerate() {
        let p = |k: usize| params[slots[i] + k].as_slice();
        let arg = |k: usize| &outputs[node.inputs[k]];
        let (out, cache) = match node.op {
            Op::Input { channels } => {
                if input.channels() != channels {
                    return Err(Error::Shape(format!(
                        "network expects {channels} input channels, got {}",
                        input.channels()
                    )));
                }
                (input.clone(), Cache::None)
            }
            Op::Conv {
                in_channels,
                out_channels,
                kernel,
                bias,
            } => {
                let x = arg(0);
                expect_channels(node, x, in_channels)?;
                let b = bias.then(|| p(1));
                (
                    kernels::conv_forward(x, p(0), b, out_channels, kernel),
                    Cache::None,
                )
            }
            Op::BatchNorm { channels } => {
                let x = arg(0);
                expect_channels(node, x, channels)?;
                let stats = match mode {
                    Mode::Train => kernels::batch_stats(x),
                    Mode::Eval => BnStats {
                        mean: p(2).to_vec(),
                        inv_std: p(3)
                            .iter()
                            .map(|&v| T::one() / (v + T::lit(kernels::BN_EPS)).sqrt())
                            .collect(),
                        var_unbiased: p(3).to_vec(),
                    },
                };
                let y = kernels::bn_apply(x, &stats.mean, &stats.inv_std, p(0), p(1));
                (y, Cache::Norm(stats))
            }
            Op::Relu => (kernels::relu_forward(arg(0)), Cache::None),
            Op::Sigmoid => (kernels::sigmoid_forward(arg(0)), Cache::None),
            Op::MaxPool => {
                let x = arg(0);
                let [_, _, h, w] = x.shape();
                if h % 2 != 0 || w % 2 != 0 {
                    return Err(Error::Shape(format!(
                        "{}: cannot 2x2-pool a {h}x{w} map",
                        node.name
                    )));
                }
                let (y, a) = kernels::maxpool_forward(x);
                (y, Cache::Pool(a))
            }
            Op::UpConv {
                in_channels,
                out_channels,
            } => {
                let x = arg(0);
                expect_channels(node, x, in_channels)?;
                (
                    kernels::upconv_forward(x, p(0), p(1), out_channels),
                    Cache::None,
                )
            }
            Op::AvgPool => (kernels::avgpool_forward(arg(0)), Cache::None),
            Op::Concat => {
                let parts: Vec<&Tensor<T>> = node.inputs.iter().map(|&j| &outputs[j]).collect();
                let [n, _, h, w] = parts[0].shape();
                if parts.iter().any(|t| {
                    let s = t.shape();
                    s[0] != n || s[2] != h || s[3] != w
                }) {
                    return Err(Error::Shape(format!(
                        "{}: concatenated maps differ in batch or spatial size",
                        node.name
                    )));
                }
                (kernels::concat_forward(&parts), Cache::None)
            }
        };
        outputs.push(out);
        caches.push(cache);
        if mode == Mode::Eval {
            for &j in &node.inputs {
                if last_use[j] == i {
                    outputs[j] = Tensor::zeros([0, 0, 0, 0]);
                }
            }
        }
    }
    Ok(Forward {
        mode,
        outputs,
        caches,
    })
}

fn expect_channels<T: Scalar>(node: &Node, x: &Tensor<T>, channels: usize) -> Result<()> {
    if x.channels() != channels {
        return Err(Error::Shape(format!(
            "{} expects {channels} channels, got {}",
            node.name,
            x.channels()
        )));
    }
    Ok(())
}

/// Gradient of a scalar objective with respect to every parameter slot,
/// given its gradient `grad_output` at the network output. Buffer slots
/// receive zeros.
pub fn backward<T: Scalar>(
    nodes: &[Node],
    params: &[Vec<T>],
    fwd: &Forward<T>,
    grad_output: Tensor<T>,
) -> Result<Vec<Vec<T>>> {
    if fwd.mode != Mode::Train {
        return Err(Error::Precondition(
            "backward needs the activations of a training-mode forward pass".into(),
        ));
    }
    if grad_output.shape() != fwd.output().shape() {
        return Err(Error::Shape(format!(
            "output gradient {:?} does not match output {:?}",
            grad_output.shape(),
            fwd.output().shape()
        )));
    }
    let slots = slot_offsets(nodes);
    let mut grads: Vec<Vec<T>> = params.iter().map(|p| vec![T::zero(); p.len()]).collect();
    let mut node_grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
    *node_grads.last_mut().expect("nonempty graph") = Some(grad_output);

    let wants_grad = |j: usize| !matches!(nodes[j].op, Op::Input { .. });

    for i in (0..nodes.len()).rev() {
        let Some(dy) = node_grads[i].take() else {
            continue;
        };
        let node = &nodes[i];
        let x = |k: usize| &fwd.outputs[node.inputs[k]];
        let slot = slots[i];
        let mut input_grads: Vec<(usize, Tensor<T>)> = Vec::new();
        match node.op {
            Op::Input { .. } => {}
            Op::Conv { kernel, bias, .. } => {
                let src = node.inputs[0];
                let mut dx = wants_grad(src).then(|| Tensor::zeros(x(0).shape()));
                let (head, tail) = grads.split_at_mut(slot + 1);
                let dbias = if bias { Some(tail[0].as_mut_slice()) } else { None };
                kernels::conv_backward(
                    x(0),
                    &params[slot],
                    &dy,
                    kernel,
                    &mut head[slot],
                    dbias,
                    dx.as_mut(),
                );
                if let Some(dx) = dx {
                    input_grads.push((src, dx));
                }
            }
            Op::BatchNorm { .. } => {
                let Cache::Norm(stats) = &fwd.caches[i] else {
                    unreachable!("batch norm always caches statistics")
                };
                let (head, tail) = grads.split_at_mut(slot + 1);
                let dx = kernels::bn_backward(
                    x(0),
                    &dy,
                    &stats.mean,
                    &stats.inv_std,
                    &params[slot],
                    true,
                    &mut head[slot],
                    &mut tail[0],
                );
                input_grads.push((node.inputs[0], dx));
            }
            Op::Relu => {
                input_grads.push((node.inputs[0], kernels::relu_backward(&fwd.outputs[i], &dy)))
            }
            Op::Sigmoid => input_grads.push((
                node.inputs[0],
                kernels::sigmoid_backward(&fwd.outputs[i], &dy),
            )),
            Op::MaxPool => {
                let Cache::Pool(arg) = &fwd.caches[i] else {
                    unreachable!("max pool always caches argmax")
                };
                input_grads.push((
                    node.inputs[0],
                    kernels::maxpool_backward(&dy, arg, x(0).shape()),
                ));
            }
            Op::UpConv { .. } => {
                let src = node.inputs[0];
                let mut dx = wants_grad(src).then(|| Tensor::zeros(x(0).shape()));
                let (head, tail) = grads.split_at_mut(slot + 1);
                kernels::upconv_backward(
                    x(0),
                    &params[slot],
                    &dy,
                    &mut head[slot],
                    &mut tail[0],
                    dx.as_mut(),
                );
                if let Some(dx) = dx {
                    input_grads.push((src, dx));
                }
            }
            Op::AvgPool => input_grads.push((node.inputs[0], kernels::avgpool_backward(&dy))),
            Op::Concat => {
                let channels: Vec<usize> = node
                    .inputs
                    .iter()
                    .map(|&j| fwd.outputs[j].channels())
                    .collect();
                for (&src, g) in node
                    .inputs
                    .iter()
                    .zip(kernels::concat_backward(&dy, &channels))
                {
                    input_grads.push((src, g));
                }
            }
        }
        for (src, g) in input_grads {
            if !wants_grad(src) {
                continue;
            }
            match &mut node_grads[src] {
                Some(acc) => acc.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        }
    }
    Ok(grads)
}
