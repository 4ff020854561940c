//! Deterministic fixture models and datasets for experiments and tests.
//!
//! The main fixture is a LeNet-style classifier (2 conv + 2 pool +
//! 2 linear) over 1x28x28 inputs with 10 classes. Weights come from a
//! seeded uniform(-0.1, 0.1) draw, inputs from a seeded uniform [0, 1)
//! draw, and dataset labels are the model's own golden argmax, so golden
//! accuracy is 100% by construction and any degradation is fault-driven.

use crate::fault::rng::Stream;
use crate::graph::{forward_simple, Graph, LayerKind, LayerNode};
use crate::tensor::Tensor;

fn uniform_tensor(stream: &mut Stream, shape: Vec<usize>, lo: f32, hi: f32) -> Tensor {
    let count: usize = shape.iter().product();
    let data = (0..count)
        .map(|_| lo + (hi - lo) * stream.next_f64() as f32)
        .collect();
    Tensor::from_f32(shape, data).expect("fixture shape is valid")
}

fn conv(
    path: &str,
    stream: &mut Stream,
    (ci, co, k, stride, padding): (usize, usize, usize, usize, usize),
) -> LayerNode {
    LayerNode::new(
        path,
        LayerKind::Conv2d {
            in_channels: ci,
            out_channels: co,
            kernel: (k, k),
            stride,
            padding,
        },
    )
    .with_weight(uniform_tensor(stream, vec![co, ci, k, k], -0.1, 0.1))
    .with_bias(uniform_tensor(stream, vec![co], -0.1, 0.1))
}

fn linear(path: &str, stream: &mut Stream, (fi, fo): (usize, usize)) -> LayerNode {
    LayerNode::new(path, LayerKind::Linear { in_features: fi, out_features: fo })
        .with_weight(uniform_tensor(stream, vec![fo, fi], -0.1, 0.1))
        .with_bias(uniform_tensor(stream, vec![fo], -0.1, 0.1))
}

/// LeNet-style fixture graph for 1x28x28 inputs, 10 classes.
pub fn lenet_graph(seed: u64) -> Graph {
    let mut s = Stream::from_seed(seed);
    let layers = vec![
        conv("model.conv1", &mut s, (1, 6, 5, 1, 2)),
        LayerNode::new("model.relu1", LayerKind::ReLU),
        LayerNode::new("model.pool1", LayerKind::MaxPool2d { kernel: 2, stride: 2 }),
        conv("model.conv2", &mut s, (6, 16, 5, 1, 0)),
        LayerNode::new("model.relu2", LayerKind::ReLU),
        LayerNode::new("model.pool2", LayerKind::AvgPool2d { kernel: 2, stride: 2 }),
        LayerNode::new("model.flatten", LayerKind::Flatten),
        linear("model.fc1", &mut s, (400, 120)),
        LayerNode::new("model.relu3", LayerKind::ReLU),
        linear("model.fc2", &mut s, (120, 10)),
    ];
    Graph::new(layers, vec![1, 28, 28]).expect("fixture graph is valid")
}

/// Two-block residual fixture exercising Add and Softmax layers.
pub fn residual_graph(seed: u64) -> Graph {
    let mut s = Stream::from_seed(seed ^ 0x5EED_B10C);
    let layers = vec![
        conv("model.stem", &mut s, (2, 4, 3, 1, 1)),
        conv("model.block1.conv1", &mut s, (4, 4, 3, 1, 1)),
        LayerNode::new("model.block1.relu", LayerKind::ReLU),
        conv("model.block1.conv2", &mut s, (4, 4, 3, 1, 1)),
        LayerNode::new(
            "model.block1.add",
            LayerKind::Add { source: "model.stem".into() },
        ),
        conv("model.block2.conv1", &mut s, (4, 4, 3, 1, 1)),
        LayerNode::new("model.block2.relu", LayerKind::ReLU),
        conv("model.block2.conv2", &mut s, (4, 4, 3, 1, 1)),
        LayerNode::new(
            "model.block2.add",
            LayerKind::Add { source: "model.block1.add".into() },
        ),
        LayerNode::new("model.flatten", LayerKind::Flatten),
        linear("model.fc", &mut s, (64, 10)),
        LayerNode::new("model.softmax", LayerKind::Softmax),
    ];
    Graph::new(layers, vec![2, 4, 4]).expect("fixture graph is valid")
}

/// Deterministic 1x28x28 inputs with values in [0, 1).
pub fn fixture_inputs(seed: u64, count: usize) -> Vec<Tensor> {
    let mut s = Stream::from_seed(seed ^ 0x0DA7_A5E7);
    (0..count)
        .map(|_| uniform_tensor(&mut s, vec![1, 28, 28], 0.0, 1.0))
        .collect()
}

/// Index of the largest logit; ties resolve to the lowest index.
pub fn argmax(logits: &[f32]) -> usize {
    let mut best = 0usize;
    for (i, &v) in logits.iter().enumerate() {
        if v > logits[best] {
            best = i;
        }
    }
    best
}

/// Label inputs with the graph's own golden predictions.
pub fn self_labeled(graph: &Graph, inputs: Vec<Tensor>) -> Vec<(u16, Tensor)> {
    inputs
        .into_iter()
        .map(|input| {
            let logits = forward_simple(graph, &input).expect("fixture forward");
            (argmax(logits.as_f32().expect("f32 logits")) as u16, input)
        })
        .collect()
}
