//! Prebuilt experiment runners emitting CSV result tables.
//!
//! Every runner is deterministic for a fixed seed: trials draw from
//! counter-based streams keyed by (seed, trial id, layer), run
//! independently (optionally in parallel), and merge by trial index, so
//! serial and parallel execution produce identical tables.

use std::sync::Mutex;
use std::time::Instant;

use crate::config::{build_hooks, ResolvedConfig};
use crate::error::{Error, Result};
use crate::fault::rng::RngFactory;
use crate::fault::{ErrorModelSpec, Mask, SelectorMode, SelectorSpec};
use crate::fixture::argmax;
use crate::graph::{forward, forward_simple, Graph, LayerKind};
use crate::model_io::Dataset;
use crate::observe::{dual_forward, ObservationRecord, ObserverKind, RecordSet};
use crate::quant::{calibrate, Calibration};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub enum PlanKind {
    GoldenRun,
    SingleInject,
    BerSweep { bers: Vec<f64> },
    BitSense { bits: Vec<u32> },
    ChannelSense,
    PixelSense,
    Propagation,
}

/// A validated experiment request.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentPlan {
    pub kind: PlanKind,
    pub trials: usize,
    pub seed: u64,
    pub jobs: usize,
}

impl ExperimentPlan {
    pub fn validate(&self) -> Result<()> {
        if self.trials < 1 {
            return Err(Error::Argument("trials must be at least 1".into()));
        }
        match &self.kind {
            PlanKind::BerSweep { bers } => {
                if bers.is_empty() {
                    return Err(Error::Argument("ber sweep needs at least one point".into()));
                }
                if bers.windows(2).any(|w| w[0] >= w[1]) {
                    return Err(Error::Argument("ber list must be strictly increasing".into()));
                }
            }
            PlanKind::BitSense { bits } => {
                if bits.is_empty() {
                    return Err(Error::Argument("bit sense needs at least one bit".into()));
                }
            }
            _ => {}
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub key: String,
    pub metric: String,
    pub value: f64,
    pub trials: usize,
    pub stderr: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ResultTable {
    pub rows: Vec<ResultRow>,
}

impl ResultTable {
    pub fn push(&mut self, key: impl Into<String>, metric: impl Into<String>, values: &[f64]) {
        let (value, stderr) = mean_stderr(values);
        self.rows.push(ResultRow {
            key: key.into(),
            metric: metric.into(),
            value,
            trials: values.len(),
            stderr,
        });
    }

    pub fn value(&self, key: &str, metric: &str) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.key == key && r.metric == metric)
            .map(|r| r.value)
    }

    /// Rows of one metric sorted ascending by value (rank export).
    pub fn sorted_by_value(&self, metric: &str) -> ResultTable {
        let mut rows: Vec<ResultRow> = self
            .rows
            .iter()
            .filter(|r| r.metric == metric)
            .cloned()
            .collect();
        rows.sort_by(|a, b| a.value.partial_cmp(&b.value).unwrap_or(std::cmp::Ordering::Equal));
        ResultTable { rows }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("key,metric,value,trials,stderr\n");
        for r in &self.rows {
            let stderr = r.stderr.map(|s| s.to_string()).unwrap_or_default();
            out.push_str(&format!(
                "{},{},{},{},{stderr}\n",
                r.key, r.metric, r.value, r.trials
            ));
        }
        out
    }
}

/// Mean and standard error of per-trial values (stderr only when more than
/// one trial).
pub fn mean_stderr(values: &[f64]) -> (f64, Option<f64>) {
    let n = values.len();
    if n == 0 {
        return (0.0, None);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, None);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
    (mean, Some((var / n as f64).sqrt()))
}

/// Run `trials` independent jobs and collect results by trial index, so
/// output does not depend on the worker count.
fn run_trials<T, F>(trials: usize, jobs: usize, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize) -> Result<T> + Sync,
{
    let jobs = jobs.max(1).min(trials.max(1));
    if jobs <= 1 {
        return (0..trials).map(&f).collect();
    }
    let slots: Mutex<Vec<Option<Result<T>>>> =
        Mutex::new((0..trials).map(|_| None).collect());
    std::thread::scope(|scope| {
        for worker in 0..jobs {
            let f = &f;
            let slots = &slots;
            scope.spawn(move || {
                let mut t = worker;
                while t < trials {
                    let out = f(t);
                    slots.lock().expect("trial mutex")[t] = Some(out);
                    t += jobs;
                }
            });
        }
    });
    let collected = slots.into_inner().expect("trial mutex");
    collected
        .into_iter()
        .map(|slot| slot.expect("every trial index filled"))
        .collect()
}

/// Top-1 accuracy of the dataset under the given hooks.
pub fn dataset_accuracy(graph: &Graph, dataset: &Dataset, hooks: &mut [crate::graph::Hook<'_>]) -> Result<f64> {
    let mut correct = 0usize;
    for (label, input) in &dataset.samples {
        let logits = forward(graph, input, hooks)?;
        if argmax(logits.as_f32()?) as u16 == *label {
            correct += 1;
        }
    }
    Ok(correct as f64 / dataset.samples.len() as f64)
}

fn golden_logits(graph: &Graph, dataset: &Dataset) -> Result<Vec<Tensor>> {
    dataset
        .samples
        .iter()
        .map(|(_, input)| forward_simple(graph, input))
        .collect()
}

fn calibration_if_needed(
    graph: &Graph,
    dataset: &Dataset,
    resolved: &ResolvedConfig,
) -> Result<Option<Calibration>> {
    if resolved.needs_calibration() {
        Ok(Some(calibrate(graph, &dataset.inputs())?))
    } else {
        Ok(None)
    }
}

/// Golden-run accuracy plus per-layer dynamic ranges.
pub fn run_golden(graph: &Graph, dataset: &Dataset) -> Result<(f64, Calibration)> {
    if dataset.samples.is_empty() {
        return Err(Error::Data("dataset is empty".into()));
    }
    let calib = calibrate(graph, &dataset.inputs())?;
    let accuracy = dataset_accuracy(graph, dataset, &mut [])?;
    Ok((accuracy, calib))
}

/// Accuracy (and classification error rate) for each bit error rate in the
/// plan, `trials` fresh streams per point.
pub fn run_ber_sweep(
    graph: &Graph,
    dataset: &Dataset,
    template: &ResolvedConfig,
    plan: &ExperimentPlan,
) -> Result<ResultTable> {
    plan.validate()?;
    let PlanKind::BerSweep { bers } = &plan.kind else {
        return Err(Error::Argument("plan kind must be a ber sweep".into()));
    };
    let calib = calibration_if_needed(graph, dataset, template)?;
    let mut table = ResultTable::default();
    for (pi, &ber) in bers.iter().enumerate() {
        let mut cfg = template.clone();
        cfg.set_ber(ber)?;
        let accs = run_trials(plan.trials, plan.jobs, |t| {
            let trial_id = (pi * plan.trials + t) as u64;
            let factory = RngFactory::new(plan.seed, trial_id);
            let (mut hooks, _) = build_hooks(&cfg, graph, calib.as_ref(), &factory)?;
            dataset_accuracy(graph, dataset, &mut hooks)
        })?;
        let errs: Vec<f64> = accs.iter().map(|a| 1.0 - a).collect();
        let key = ber.to_string();
        table.push(key.clone(), "accuracy", &accs);
        table.push(key, "error_rate", &errs);
    }
    Ok(table)
}

/// One (accuracy, output RMSE) measurement of a configured trial.
fn trial_accuracy_rmse(
    graph: &Graph,
    dataset: &Dataset,
    cfg: &ResolvedConfig,
    calib: Option<&Calibration>,
    seed: u64,
    trial_id: u64,
    golden: &[Tensor],
) -> Result<(f64, f64)> {
    let factory = RngFactory::new(seed, trial_id);
    let (mut hooks, _) = build_hooks(cfg, graph, calib, &factory)?;
    let mut correct = 0usize;
    let mut rec = ObservationRecord::new("output", ObserverKind::Rmse);
    for ((label, input), g) in dataset.samples.iter().zip(golden) {
        let logits = forward(graph, input, &mut hooks)?;
        if argmax(logits.as_f32()?) as u16 == *label {
            correct += 1;
        }
        rec.compare(g, &logits)?;
    }
    Ok((correct as f64 / dataset.samples.len() as f64, rec.finalize()))
}

/// Per-bit sensitivity: inject BitFlipFixed{bit} at the template's rate and
/// report accuracy and output RMSE per bit position.
pub fn run_bit_sense(
    graph: &Graph,
    dataset: &Dataset,
    template: &ResolvedConfig,
    plan: &ExperimentPlan,
) -> Result<ResultTable> {
    plan.validate()?;
    let PlanKind::BitSense { bits } = &plan.kind else {
        return Err(Error::Argument("plan kind must be bit sense".into()));
    };
    // every enabled entry must have the bit in its word
    for (path, entry) in template.enabled_entries() {
        let word_bits = entry
            .quant
            .storage_dtype()
            .map(|d| d.word_bits())
            .unwrap_or(32);
        if let Some(&max) = bits.iter().max() {
            if max >= word_bits {
                return Err(Error::Config(format!(
                    "{path}: bit {max} exceeds the {word_bits}-bit injection word"
                )));
            }
        }
    }
    let calib = calibration_if_needed(graph, dataset, template)?;
    let golden = golden_logits(graph, dataset)?;
    let mut table = ResultTable::default();
    for (pi, &bit) in bits.iter().enumerate() {
        let mut cfg = template.clone();
        cfg.set_error_model(ErrorModelSpec::BitFlipFixed { bit });
        let pairs = run_trials(plan.trials, plan.jobs, |t| {
            let trial_id = (pi * plan.trials + t) as u64;
            trial_accuracy_rmse(graph, dataset, &cfg, calib.as_ref(), plan.seed, trial_id, &golden)
        })?;
        let accs: Vec<f64> = pairs.iter().map(|p| p.0).collect();
        let rmses: Vec<f64> = pairs.iter().map(|p| p.1).collect();
        table.push(bit.to_string(), "accuracy", &accs);
        table.push(bit.to_string(), "rmse", &rmses);
    }
    Ok(table)
}

fn single_conv_target(graph: &Graph, template: &ResolvedConfig) -> Result<(String, Vec<usize>)> {
    let (path, _) = template.single_enabled()?;
    let layer = graph
        .layer(path)
        .ok_or_else(|| Error::Config(format!("unknown layer {path}")))?;
    if !matches!(layer.kind, LayerKind::Conv2d { .. }) {
        return Err(Error::Config(format!(
            "{path}: channel/pixel sensitivity needs a conv2d layer"
        )));
    }
    let shape = graph.output_shape(path).expect("layer exists").to_vec();
    Ok((path.clone(), shape))
}

/// Channel-masked injection, output RMSE per channel of the single enabled
/// conv layer. Rows are in channel order; use `sorted_by_value("rmse")` for
/// the rank export.
pub fn run_channel_sense(
    graph: &Graph,
    dataset: &Dataset,
    template: &ResolvedConfig,
    plan: &ExperimentPlan,
) -> Result<ResultTable> {
    plan.validate()?;
    let (_, shape) = single_conv_target(graph, template)?;
    let channels = shape[0];
    let calib = calibration_if_needed(graph, dataset, template)?;
    let golden = golden_logits(graph, dataset)?;
    let mut table = ResultTable::default();
    for c in 0..channels {
        let mut cfg = template.clone();
        cfg.set_mask(Some(Mask::Channel(c)));
        let pairs = run_trials(plan.trials, plan.jobs, |t| {
            let trial_id = (c * plan.trials + t) as u64;
            trial_accuracy_rmse(graph, dataset, &cfg, calib.as_ref(), plan.seed, trial_id, &golden)
        })?;
        let rmses: Vec<f64> = pairs.iter().map(|p| p.1).collect();
        table.push(c.to_string(), "rmse", &rmses);
    }
    Ok(table)
}

/// Pixel-masked injection over the spatial grid of the single enabled conv
/// layer; returns the H x W mean output-RMSE grid.
pub fn run_pixel_sense(
    graph: &Graph,
    dataset: &Dataset,
    template: &ResolvedConfig,
    plan: &ExperimentPlan,
) -> Result<Vec<Vec<f64>>> {
    plan.validate()?;
    let (_, shape) = single_conv_target(graph, template)?;
    let (height, width) = (shape[1], shape[2]);
    let calib = calibration_if_needed(graph, dataset, template)?;
    let golden = golden_logits(graph, dataset)?;
    let mut grid = vec![vec![0.0f64; width]; height];
    for (h, row) in grid.iter_mut().enumerate() {
        for (w, cell) in row.iter_mut().enumerate() {
            let mut cfg = template.clone();
            cfg.set_mask(Some(Mask::Pixel(h, w)));
            let pi = h * width + w;
            let pairs = run_trials(plan.trials, plan.jobs, |t| {
                let trial_id = (pi * plan.trials + t) as u64;
                trial_accuracy_rmse(
                    graph,
                    dataset,
                    &cfg,
                    calib.as_ref(),
                    plan.seed,
                    trial_id,
                    &golden,
                )
            })?;
            let rmses: Vec<f64> = pairs.iter().map(|p| p.1).collect();
            *cell = mean_stderr(&rmses).0;
        }
    }
    Ok(grid)
}

/// Render a grid as a CSV matrix (one line per row).
pub fn grid_to_csv(grid: &[Vec<f64>]) -> String {
    let mut out = String::new();
    for row in grid {
        let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}

/// Error-propagation study: the template's (typically single-point)
/// injection runs with AffectedCount/MAE/RMSE observers on every layer;
/// rows report per-layer affected counts (mean per image and as a fraction
/// of elements), MAE, and RMSE averaged over the dataset and trials.
pub fn run_propagation(
    graph: &Graph,
    dataset: &Dataset,
    template: &ResolvedConfig,
    plan: &ExperimentPlan,
) -> Result<ResultTable> {
    plan.validate()?;
    for (path, entry) in template.enabled_entries() {
        if !matches!(
            entry.selector,
            Some(SelectorSpec { mode: SelectorMode::FixedPosition { .. }, .. })
                | Some(SelectorSpec { mode: SelectorMode::FixedCount { .. }, .. })
        ) {
            return Err(Error::Config(format!(
                "{path}: propagation needs a fixed-position or fixed-count selector"
            )));
        }
    }
    let mut cfg = template.clone();
    for (_, entry) in cfg.entries.iter_mut() {
        entry.observers = vec![
            ObserverKind::AffectedCount,
            ObserverKind::Mae,
            ObserverKind::Rmse,
        ];
    }
    let calib = calibration_if_needed(graph, dataset, &cfg)?;
    let trial_records = run_trials(plan.trials, plan.jobs, |t| {
        let factory = RngFactory::new(plan.seed, t as u64);
        let (mut hooks, mut records) = build_hooks(&cfg, graph, calib.as_ref(), &factory)?;
        for (_, input) in &dataset.samples {
            dual_forward(graph, input, &mut hooks, &mut records)?;
        }
        Ok(records)
    })?;

    let mut table = ResultTable::default();
    for layer in graph.layers() {
        let count: usize = graph.output_shape(&layer.path).expect("layer exists").iter().product();
        let collect = |kind: ObserverKind, f: &dyn Fn(&ObservationRecord) -> f64| -> Vec<f64> {
            trial_records
                .iter()
                .filter_map(|r| r.get(&layer.path, kind).map(f))
                .collect()
        };
        let affected_mean = collect(ObserverKind::AffectedCount, &|r| r.affected_mean());
        let affected_frac = collect(ObserverKind::AffectedCount, &|r| {
            r.affected_mean() / count as f64
        });
        let mae = collect(ObserverKind::Mae, &|r| r.finalize());
        let rmse = collect(ObserverKind::Rmse, &|r| r.finalize());
        table.push(layer.path.clone(), "affected_mean", &affected_mean);
        table.push(layer.path.clone(), "affected_frac", &affected_frac);
        table.push(layer.path.clone(), "mae", &mae);
        table.push(layer.path.clone(), "rmse", &rmse);
    }
    Ok(table)
}

/// One injected evaluation of the whole dataset with the template's own
/// observers active. Returns (table, merged records).
pub fn run_single_inject(
    graph: &Graph,
    dataset: &Dataset,
    template: &ResolvedConfig,
    plan: &ExperimentPlan,
) -> Result<(ResultTable, RecordSet)> {
    plan.validate()?;
    let calib = calibration_if_needed(graph, dataset, template)?;
    let outcomes = run_trials(plan.trials, plan.jobs, |t| {
        let factory = RngFactory::new(plan.seed, t as u64);
        let (mut hooks, mut records) = build_hooks(template, graph, calib.as_ref(), &factory)?;
        let mut correct = 0usize;
        for (label, input) in &dataset.samples {
            let logits = if records.records.is_empty() {
                forward(graph, input, &mut hooks)?
            } else {
                dual_forward(graph, input, &mut hooks, &mut records)?.1
            };
            if argmax(logits.as_f32()?) as u16 == *label {
                correct += 1;
            }
        }
        Ok((correct as f64 / dataset.samples.len() as f64, records))
    })?;
    let accs: Vec<f64> = outcomes.iter().map(|o| o.0).collect();
    let errs: Vec<f64> = accs.iter().map(|a| 1.0 - a).collect();
    let mut merged = RecordSet::new();
    for (_, records) in &outcomes {
        merged.merge(records)?;
    }
    let mut table = ResultTable::default();
    table.push("all", "accuracy", &accs);
    table.push("all", "error_rate", &errs);
    Ok((table, merged))
}

/// Permanent weight faults: corrupt the stored weights of enabled
/// weight-target layers in place, run `body`, then restore the originals
/// bit-exactly.
pub fn with_permanent_weight_faults<T>(
    graph: &mut Graph,
    template: &ResolvedConfig,
    calib: Option<&Calibration>,
    seed: u64,
    trial: u64,
    body: impl FnOnce(&Graph) -> Result<T>,
) -> Result<T> {
    let factory = RngFactory::new(seed, trial);
    let (mut hooks, _) = build_hooks(template, graph, calib, &factory)?;
    // compute every corrupted tensor before touching the graph, so an
    // error cannot leave it half-mutated
    let mut planned: Vec<(String, Tensor, Tensor)> = Vec::new();
    for hook in hooks.iter_mut() {
        if hook.point.site != crate::graph::HookSite::WeightPre {
            continue;
        }
        let path = hook.point.layer.clone();
        let weight = graph
            .layer(&path)
            .and_then(|l| l.weight.clone())
            .ok_or_else(|| Error::Config(format!("{path}: no weight to corrupt")))?;
        let corrupted = (hook.callback)(&weight)?;
        planned.push((path, weight, corrupted));
    }
    for (path, _, corrupted) in &planned {
        *graph.weight_mut(path).expect("weighted layer") = corrupted.clone();
    }
    let result = body(graph);
    for (path, original, _) in planned {
        *graph.weight_mut(&path).expect("weighted layer") = original;
    }
    result
}

#[derive(Debug, Clone)]
pub struct TimingReport {
    pub golden: Vec<f64>,
    pub injected: Vec<f64>,
}

impl TimingReport {
    pub fn golden_mean(&self) -> f64 {
        mean_stderr(&self.golden).0
    }

    pub fn injected_mean(&self) -> f64 {
        mean_stderr(&self.injected).0
    }

    pub fn ratio(&self) -> f64 {
        self.injected_mean() / self.golden_mean()
    }

    pub fn to_csv(&self) -> String {
        let std_of = |v: &[f64]| {
            let (mean, _) = mean_stderr(v);
            let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>()
                / (v.len().max(2) - 1) as f64;
            var.sqrt()
        };
        format!(
            "phase,seconds_mean,seconds_std\ngolden,{},{}\ninjected,{},{}\n",
            self.golden_mean(),
            std_of(&self.golden),
            self.injected_mean(),
            std_of(&self.injected),
        )
    }
}

/// Wall-clock comparison of golden vs injected full-dataset evaluation.
pub fn timing_report(
    graph: &Graph,
    dataset: &Dataset,
    template: &ResolvedConfig,
    seed: u64,
    reps: usize,
) -> Result<TimingReport> {
    let reps = reps.max(3);
    let calib = calibration_if_needed(graph, dataset, template)?;
    let mut golden = Vec::with_capacity(reps);
    for _ in 0..reps {
        let start = Instant::now();
        dataset_accuracy(graph, dataset, &mut [])?;
        golden.push(start.elapsed().as_secs_f64());
    }
    let mut injected = Vec::with_capacity(reps);
    for rep in 0..reps {
        let factory = RngFactory::new(seed, rep as u64);
        let (mut hooks, _) = build_hooks(template, graph, calib.as_ref(), &factory)?;
        let start = Instant::now();
        dataset_accuracy(graph, dataset, &mut hooks)?;
        injected.push(start.elapsed().as_secs_f64());
    }
    Ok(TimingReport { golden, injected })
}

#[cfg(test)]
mod tests;
