//! Minimal forward-only inference graph with hook points.
//!
//! Layers expose three hook sites: `WeightPre` (the weight tensor about to
//! be used, always a copy), `ActivationPre` (the layer input), and
//! `ActivationPost` (the layer output). Hooks observe or replace the
//! tensor; graph weights are never mutated by a forward pass.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::ops;
use crate::pattern;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LayerKind {
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: (usize, usize),
        stride: usize,
        padding: usize,
    },
    Linear {
        in_features: usize,
        out_features: usize,
    },
    ReLU,
    MaxPool2d {
        kernel: usize,
        stride: usize,
    },
    AvgPool2d {
        kernel: usize,
        stride: usize,
    },
    Flatten,
    /// Adds the output of a named earlier layer (residual connection).
    Add {
        source: String,
    },
    Softmax,
}

impl LayerKind {
    pub fn is_weighted(&self) -> bool {
        matches!(self, LayerKind::Conv2d { .. } | LayerKind::Linear { .. })
    }

    pub fn name(&self) -> &'static str {
        match self {
            LayerKind::Conv2d { .. } => "conv2d",
            LayerKind::Linear { .. } => "linear",
            LayerKind::ReLU => "relu",
            LayerKind::MaxPool2d { .. } => "maxpool2d",
            LayerKind::AvgPool2d { .. } => "avgpool2d",
            LayerKind::Flatten => "flatten",
            LayerKind::Add { .. } => "add",
            LayerKind::Softmax => "softmax",
        }
    }
}

#[derive(Debug, Clone)]
pub struct LayerNode {
    pub path: String,
    pub kind: LayerKind,
    pub weight: Option<Tensor>,
    pub bias: Option<Tensor>,
}

impl LayerNode {
    pub fn new(path: impl Into<String>, kind: LayerKind) -> Self {
        LayerNode { path: path.into(), kind, weight: None, bias: None }
    }

    pub fn with_weight(mut self, weight: Tensor) -> Self {
        self.weight = Some(weight);
        self
    }

    pub fn with_bias(mut self, bias: Tensor) -> Self {
        self.bias = Some(bias);
        self
    }
}

/// Where a hook attaches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum HookSite {
    WeightPre,
    ActivationPre,
    ActivationPost,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct HookPoint {
    pub layer: String,
    pub site: HookSite,
}

impl HookPoint {
    pub fn new(layer: impl Into<String>, site: HookSite) -> Self {
        HookPoint { layer: layer.into(), site }
    }
}

/// Callback signature shared by injectors and observers: tensor in,
/// same-shape tensor out.
pub type HookFn<'a> = Box<dyn FnMut(&Tensor) -> Result<Tensor> + 'a>;

/// A tensor transformer bound to a hook point. Callbacks must return a
/// tensor of the same shape and dtype.
pub struct Hook<'a> {
    pub point: HookPoint,
    pub callback: HookFn<'a>,
}

impl<'a> Hook<'a> {
    pub fn new(
        point: HookPoint,
        callback: impl FnMut(&Tensor) -> Result<Tensor> + 'a,
    ) -> Self {
        Hook { point, callback: Box::new(callback) }
    }
}

/// Ordered inference graph. Validated at construction: shapes propagate,
/// weights match layer parameters, residual sources precede consumers.
#[derive(Debug, Clone)]
pub struct Graph {
    layers: Vec<LayerNode>,
    input_shape: Vec<usize>,
    output_shapes: Vec<Vec<usize>>,
}

impl Graph {
    pub fn new(layers: Vec<LayerNode>, input_shape: Vec<usize>) -> Result<Self> {
        let output_shapes = infer_shapes(&layers, &input_shape)?;
        Ok(Graph { layers, input_shape, output_shapes })
    }

    pub fn layers(&self) -> &[LayerNode] {
        &self.layers
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn layer(&self, path: &str) -> Option<&LayerNode> {
        self.layers.iter().find(|l| l.path == path)
    }

    /// Mutable weight access for permanent-fault experiments.
    pub fn weight_mut(&mut self, path: &str) -> Option<&mut Tensor> {
        self.layers
            .iter_mut()
            .find(|l| l.path == path)
            .and_then(|l| l.weight.as_mut())
    }

    /// Output shape of the named layer.
    pub fn output_shape(&self, path: &str) -> Option<&[usize]> {
        self.layers
            .iter()
            .position(|l| l.path == path)
            .map(|i| self.output_shapes[i].as_slice())
    }

    /// Layer paths matching a glob pattern, in layer order.
    pub fn list_paths(&self, glob: &str) -> Vec<String> {
        self.layers
            .iter()
            .filter(|l| pattern::prefix_match(glob, &l.path))
            .map(|l| l.path.clone())
            .collect()
    }
}

fn infer_shapes(layers: &[LayerNode], input_shape: &[usize]) -> Result<Vec<Vec<usize>>> {
    if layers.is_empty() {
        return Err(Error::Graph("graph has no layers".into()));
    }
    let mut seen: HashMap<&str, usize> = HashMap::new();
    let mut shapes: Vec<Vec<usize>> = Vec::with_capacity(layers.len());
    let mut cur = input_shape.to_vec();
    for (i, layer) in layers.iter().enumerate() {
        if seen.insert(&layer.path, i).is_some() {
            return Err(Error::Graph(format!("duplicate layer path {}", layer.path)));
        }
        let out = match &layer.kind {
            LayerKind::Conv2d { in_channels, out_channels, kernel, stride, padding } => {
                let [c, h, w] = chw(&cur, &layer.path)?;
                if c != *in_channels {
                    return Err(Error::Graph(format!(
                        "{}: expects {in_channels} input channels, got {c}",
                        layer.path
                    )));
                }
                let weight = layer.weight.as_ref().ok_or_else(|| {
                    Error::Graph(format!("{}: conv2d layer has no weight", layer.path))
                })?;
                let expect = [*out_channels, *in_channels, kernel.0, kernel.1];
                if weight.shape() != expect {
                    return Err(Error::Graph(format!(
                        "{}: weight shape {:?} does not match {expect:?}",
                        layer.path,
                        weight.shape()
                    )));
                }
                check_bias(layer, *out_channels)?;
                let oh = ops::out_extent(h, kernel.0, *stride, *padding)?;
                let ow = ops::out_extent(w, kernel.1, *stride, *padding)?;
                vec![*out_channels, oh, ow]
            }
            LayerKind::Linear { in_features, out_features } => {
                if cur != [*in_features] {
                    return Err(Error::Graph(format!(
                        "{}: expects input [{in_features}], got {cur:?}",
                        layer.path
                    )));
                }
                let weight = layer.weight.as_ref().ok_or_else(|| {
                    Error::Graph(format!("{}: linear layer has no weight", layer.path))
                })?;
                if weight.shape() != [*out_features, *in_features] {
                    return Err(Error::Graph(format!(
                        "{}: weight shape {:?} does not match [{out_features}, {in_features}]",
                        layer.path,
                        weight.shape()
                    )));
                }
                check_bias(layer, *out_features)?;
                vec![*out_features]
            }
            LayerKind::ReLU | LayerKind::Softmax => cur.clone(),
            LayerKind::MaxPool2d { kernel, stride }
            | LayerKind::AvgPool2d { kernel, stride } => {
                let [c, h, w] = chw(&cur, &layer.path)?;
                let oh = ops::out_extent(h, *kernel, *stride, 0)?;
                let ow = ops::out_extent(w, *kernel, *stride, 0)?;
                vec![c, oh, ow]
            }
            LayerKind::Flatten => vec![cur.iter().product()],
            LayerKind::Add { source } => {
                let src = seen.get(source.as_str()).copied().ok_or_else(|| {
                    Error::Graph(format!(
                        "{}: add source {source} is not an earlier layer",
                        layer.path
                    ))
                })?;
                if shapes[src] != cur {
                    return Err(Error::Graph(format!(
                        "{}: add source shape {:?} does not match {cur:?}",
                        layer.path, shapes[src]
                    )));
                }
                cur.clone()
            }
        };
        shapes.push(out.clone());
        cur = out;
    }
    Ok(shapes)
}

fn chw(shape: &[usize], path: &str) -> Result<[usize; 3]> {
    match shape {
        [c, h, w] => Ok([*c, *h, *w]),
        _ => Err(Error::Graph(format!("{path}: expects CHW input, got {shape:?}"))),
    }
}

fn check_bias(layer: &LayerNode, features: usize) -> Result<()> {
    if let Some(b) = &layer.bias {
        if b.shape() != [features] {
            return Err(Error::Graph(format!(
                "{}: bias shape {:?} does not match [{features}]",
                layer.path,
                b.shape()
            )));
        }
    }
    Ok(())
}

fn run_hooks(
    hooks: &mut [Hook<'_>],
    path: &str,
    site: HookSite,
    tensor: Tensor,
) -> Result<Tensor> {
    let mut cur = tensor;
    for hook in hooks.iter_mut() {
        if hook.point.site == site && hook.point.layer == path {
            let out = (hook.callback)(&cur)?;
            if out.shape() != cur.shape() || out.dtype() != cur.dtype() {
                return Err(Error::Hook(format!(
                    "hook at {path} ({site:?}) returned shape {:?} dtype {}, expected {:?} dtype {}",
                    out.shape(),
                    out.dtype().name(),
                    cur.shape(),
                    cur.dtype().name()
                )));
            }
            cur = out;
        }
    }
    Ok(cur)
}

/// Forward pass over a single sample. Hooks fire exactly once per matching
/// site, in layer order; with no hooks the output is deterministic for
/// fixed input and weights (the golden run).
pub fn forward(graph: &Graph, input: &Tensor, hooks: &mut [Hook<'_>]) -> Result<Tensor> {
    if input.shape() != graph.input_shape {
        return Err(Error::Graph(format!(
            "input shape {:?} does not match graph input {:?}",
            input.shape(),
            graph.input_shape
        )));
    }
    // keep only outputs that a later Add consumes
    let wanted: Vec<&str> = graph
        .layers
        .iter()
        .filter_map(|l| match &l.kind {
            LayerKind::Add { source } => Some(source.as_str()),
            _ => None,
        })
        .collect();
    let mut saved: HashMap<&str, Tensor> = HashMap::new();

    let mut cur = input.clone();
    for (i, layer) in graph.layers.iter().enumerate() {
        cur = run_hooks(hooks, &layer.path, HookSite::ActivationPre, cur)?;

        // weight hooks operate on a copy; graph weights stay untouched
        let weight = match &layer.weight {
            Some(w) if hooks.iter().any(|h| {
                h.point.site == HookSite::WeightPre && h.point.layer == layer.path
            }) =>
            {
                Some(run_hooks(hooks, &layer.path, HookSite::WeightPre, w.clone())?)
            }
            Some(w) => Some(w.clone()),
            None => None,
        };

        let out_shape = &graph.output_shapes[i];
        let mut out = match &layer.kind {
            LayerKind::Conv2d { in_channels, kernel, stride, padding, out_channels } => {
                let [_, h, w] = chw(cur.shape(), &layer.path)?;
                let mut buf = vec![0.0f32; out_shape.iter().product()];
                ops::conv2d_chw(
                    cur.as_f32()?,
                    (*in_channels, h, w),
                    weight.as_ref().unwrap().as_f32()?,
                    (*out_channels, kernel.0, kernel.1),
                    layer.bias.as_ref().map(|b| b.as_f32()).transpose()?,
                    *stride,
                    *padding,
                    &mut buf,
                    (out_shape[1], out_shape[2]),
                );
                Tensor::from_f32(out_shape.clone(), buf)?
            }
            LayerKind::Linear { out_features, .. } => {
                let buf = ops::linear(
                    cur.as_f32()?,
                    weight.as_ref().unwrap().as_f32()?,
                    layer.bias.as_ref().map(|b| b.as_f32()).transpose()?,
                    *out_features,
                );
                Tensor::from_f32(out_shape.clone(), buf)?
            }
            LayerKind::ReLU => {
                let mut t = cur.clone();
                ops::relu(t.as_f32_mut()?);
                t
            }
            LayerKind::MaxPool2d { kernel, stride } | LayerKind::AvgPool2d { kernel, stride } => {
                let max = matches!(layer.kind, LayerKind::MaxPool2d { .. });
                let [c, h, w] = chw(cur.shape(), &layer.path)?;
                let mut buf = vec![0.0f32; out_shape.iter().product()];
                ops::pool_chw(
                    cur.as_f32()?,
                    (c, h, w),
                    *kernel,
                    *stride,
                    max,
                    &mut buf,
                    (out_shape[1], out_shape[2]),
                );
                Tensor::from_f32(out_shape.clone(), buf)?
            }
            LayerKind::Flatten => {
                Tensor::from_f32(out_shape.clone(), cur.as_f32()?.to_vec())?
            }
            LayerKind::Add { source } => {
                let src = saved.get(source.as_str()).expect("validated source");
                let mut t = cur.clone();
                for (a, b) in t.as_f32_mut()?.iter_mut().zip(src.as_f32()?) {
                    *a += b;
                }
                t
            }
            LayerKind::Softmax => {
                let mut t = cur.clone();
                let last = *t.shape().last().unwrap();
                ops::softmax(t.as_f32_mut()?, last);
                t
            }
        };

        out = run_hooks(hooks, &layer.path, HookSite::ActivationPost, out)?;
        if wanted.iter().any(|w| *w == layer.path) {
            saved.insert(&layer.path, out.clone());
        }
        cur = out;
    }
    Ok(cur)
}

/// Forward pass with no hooks.
pub fn forward_simple(graph: &Graph, input: &Tensor) -> Result<Tensor> {
    forward(graph, input, &mut [])
}
