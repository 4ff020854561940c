//! Fixture-level checks of the full injection pipeline: quantized bit
//! sensitivity ordering and single-fault error propagation.

use nnfi_core::config::{build_hooks, parse_config, resolve};
use nnfi_core::experiment::{run_bit_sense, ExperimentPlan, PlanKind};
use nnfi_core::fault::rng::RngFactory;
use nnfi_core::fixture::{fixture_inputs, lenet_graph, self_labeled};
use nnfi_core::model_io::Dataset;
use nnfi_core::observe::{dual_forward, ObserverKind, RecordSet};

fn fixture_dataset(count: usize) -> (nnfi_core::graph::Graph, Dataset) {
    let graph = lenet_graph(42);
    let samples = self_labeled(&graph, fixture_inputs(42, count));
    (graph, Dataset { samples })
}

#[test]
fn fixed_point_high_bit_hurts_more_than_low_bit() {
    let (graph, dataset) = fixture_dataset(1);
    let cfg = "\
[injection]
layers=model.conv1
target=activation
mode=ber
ber=1e-3
sampling=poisson
error_model=bitflip_random
[quantize]
method=fixed:3.13
";
    let template = resolve(&parse_config(cfg).unwrap(), &graph).unwrap();
    let plan = ExperimentPlan {
        kind: PlanKind::BitSense { bits: vec![0, 15] },
        trials: 20,
        seed: 31,
        jobs: 2,
    };
    let table = run_bit_sense(&graph, &dataset, &template, &plan).unwrap();
    let low = table.value("0", "rmse").unwrap();
    let high = table.value("15", "rmse").unwrap();
    assert!(
        high >= low,
        "sign-bit flips must hurt at least as much as LSB flips: {high} vs {low}"
    );
    assert!(high > 0.0);
}

#[test]
fn f16_exponent_msb_hurts_more_than_mantissa_lsb() {
    let (graph, dataset) = fixture_dataset(1);
    let cfg = "\
[injection]
layers=model.conv1
target=activation
mode=ber
ber=1e-3
sampling=poisson
error_model=bitflip_random
[quantize]
method=f16
";
    let template = resolve(&parse_config(cfg).unwrap(), &graph).unwrap();
    let plan = ExperimentPlan {
        kind: PlanKind::BitSense { bits: vec![0, 14] },
        trials: 20,
        seed: 33,
        jobs: 2,
    };
    let table = run_bit_sense(&graph, &dataset, &template, &plan).unwrap();
    let mantissa = table.value("0", "rmse").unwrap();
    let exponent = table.value("14", "rmse").unwrap();
    assert!(
        exponent > mantissa,
        "exponent-MSB flips must dominate mantissa-LSB flips: {exponent} vs {mantissa}"
    );
}

#[test]
fn zero_weight_channel_blocks_propagation() {
    // a conv output channel with all-zero weights is untouched by input
    // perturbations: only its bias survives
    let mut graph = lenet_graph(42);
    {
        let w = graph.weight_mut("model.conv1").unwrap();
        let data = w.as_f32_mut().unwrap();
        // channel 0 of conv1: weights [0, 0..25)
        for v in data[..25].iter_mut() {
            *v = 0.0;
        }
    }
    let input = fixture_inputs(42, 1).pop().unwrap();
    let cfg = "\
[injection]
layers=model.conv1
target=activation
site=pre
mode=ber
ber=0.5
sampling=bernoulli
error_model=gauss:1.0
";
    let template = resolve(&parse_config(cfg).unwrap(), &graph).unwrap();
    let factory = RngFactory::new(4, 0);
    let (mut hooks, _) = build_hooks(&template, &graph, None, &factory).unwrap();
    let mut records = RecordSet::new();
    records.add("model.conv1", ObserverKind::AffectedCount);
    dual_forward(&graph, &input, &mut hooks, &mut records).unwrap();
    let rec = records.get("model.conv1", ObserverKind::AffectedCount).unwrap();
    let per_channel = 28 * 28;
    assert!(rec.affected > 0, "other channels must be disturbed");
    assert!(
        (rec.affected as usize) <= 5 * per_channel,
        "channel 0 contributes nothing: affected {} of {}",
        rec.affected,
        6 * per_channel
    );
}

#[test]
fn pixel_sense_matches_independent_reruns() {
    use nnfi_core::experiment::run_pixel_sense;
    use nnfi_core::fixture::residual_graph;
    use nnfi_core::fixture::self_labeled as label;

    // small residual fixture keeps the 4x4 grid cheap
    let graph = residual_graph(6);
    let mut stream = nnfi_core::fault::rng::Stream::from_seed(88);
    let inputs: Vec<_> = (0..3)
        .map(|_| {
            nnfi_core::tensor::Tensor::from_f32(
                vec![2, 4, 4],
                (0..32).map(|_| stream.next_f64() as f32).collect(),
            )
            .unwrap()
        })
        .collect();
    let dataset = Dataset { samples: label(&graph, inputs) };
    let cfg = "\
[injection]
layers=model.stem
target=activation
mode=ber
ber=0.05
sampling=poisson
error_model=bitflip_random
[quantize]
method=fixed:3.13
";
    let template = resolve(&parse_config(cfg).unwrap(), &graph).unwrap();
    let plan = ExperimentPlan { kind: PlanKind::PixelSense, trials: 2, seed: 12, jobs: 2 };
    let grid_a = run_pixel_sense(&graph, &dataset, &template, &plan).unwrap();
    let grid_b = run_pixel_sense(&graph, &dataset, &template, &plan).unwrap();
    assert_eq!(grid_a.len(), 4);
    assert_eq!(grid_a[0].len(), 4);
    assert_eq!(grid_a, grid_b, "independent reruns reproduce every cell exactly");
    assert!(grid_a.iter().flatten().any(|&v| v > 0.0));
}

#[test]
fn single_flip_affected_count_grows_into_fully_connected_layers() {
    let (graph, dataset) = fixture_dataset(8);
    let cfg = "\
[injection]
layers=model.conv1
target=activation
mode=fixed_position
positions=model.conv1:210:15
error_model=bitflip_fixed:15
[quantize]
method=fixed:3.13
";
    let template = resolve(&parse_config(cfg).unwrap(), &graph).unwrap();
    let factory = RngFactory::new(1, 0);
    let (mut hooks, _) = build_hooks(&template, &graph, None, &factory).unwrap();
    let mut records = RecordSet::new();
    for layer in graph.layers() {
        records.add(&layer.path, ObserverKind::AffectedCount);
    }
    for (_, input) in &dataset.samples {
        dual_forward(&graph, input, &mut hooks, &mut records).unwrap();
    }
    let frac = |path: &str| {
        let rec = records.get(path, ObserverKind::AffectedCount).unwrap();
        rec.affected_frac()
    };
    // a single post-conv1 flip touches one of 4704 elements there but
    // nearly everything in the fully connected layers
    let at_conv1 = frac("model.conv1");
    let at_fc2 = frac("model.fc2");
    assert!(at_conv1 > 0.0);
    assert!(
        at_fc2 > at_conv1,
        "affected fraction must grow into the FC layers: conv1 {at_conv1}, fc2 {at_fc2}"
    );
    // and it grows monotonically from the conv stage into the classifier
    let at_fc1 = frac("model.fc1");
    assert!(at_fc1 > at_conv1);
}
