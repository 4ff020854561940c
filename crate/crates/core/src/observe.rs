//! Observers: value statistics and golden-vs-faulty divergence metrics.
//!
//! Observers are passive; attaching them never changes network outputs.
//! Divergence metrics come from a dual pass: a golden run caches the
//! observed layers' activations, then the faulty run is compared against
//! that cache layer by layer.

use std::cell::RefCell;
use std::collections::{BTreeSet, HashMap};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::graph::{forward, Graph, Hook, HookPoint, HookSite};
use crate::tensor::Tensor;

/// Default element cap for value dumps configured without a limit.
pub const DEFAULT_DUMP_MAX: usize = 65536;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ObserverKind {
    MinMax,
    AffectedCount,
    Mae,
    Rmse,
    ValueDump { max_elements: usize },
}

impl ObserverKind {
    pub fn name(&self) -> &'static str {
        match self {
            ObserverKind::MinMax => "minmax",
            ObserverKind::AffectedCount => "affected",
            ObserverKind::Mae => "mae",
            ObserverKind::Rmse => "rmse",
            ObserverKind::ValueDump { .. } => "dump",
        }
    }

    /// Metrics that need the golden activation for comparison.
    pub fn is_comparison(&self) -> bool {
        matches!(
            self,
            ObserverKind::AffectedCount | ObserverKind::Mae | ObserverKind::Rmse
        )
    }
}

/// Accumulated metric state for one (layer, observer kind).
#[derive(Debug, Clone)]
pub struct ObservationRecord {
    pub layer_path: String,
    pub kind: ObserverKind,
    /// update/compare invocations (one per observed forward pass).
    pub passes: u64,
    /// elements accumulated into the metric sums.
    pub elements: u64,
    pub sum_abs: f64,
    pub sum_sq: f64,
    pub min: f32,
    pub max: f32,
    pub affected: u64,
    pub dump: Vec<f32>,
    pub dump_shape: Vec<usize>,
    pub truncated: bool,
}

impl ObservationRecord {
    pub fn new(layer_path: impl Into<String>, kind: ObserverKind) -> Self {
        ObservationRecord {
            layer_path: layer_path.into(),
            kind,
            passes: 0,
            elements: 0,
            sum_abs: 0.0,
            sum_sq: 0.0,
            min: f32::INFINITY,
            max: f32::NEG_INFINITY,
            affected: 0,
            dump: Vec::new(),
            dump_shape: Vec::new(),
            truncated: false,
        }
    }

    /// Fold a tensor into the running min/max.
    pub fn update_minmax(&mut self, tensor: &Tensor) {
        self.passes += 1;
        for i in 0..tensor.element_count() {
            let v = tensor.value_at(i);
            if v < self.min {
                self.min = v;
            }
            if v > self.max {
                self.max = v;
            }
        }
    }

    /// Accumulate golden-vs-faulty divergence. NaN differences propagate
    /// into the metric rather than being skipped; affected counting uses
    /// exact value inequality (NaN differs from everything, including NaN).
    pub fn compare(&mut self, golden: &Tensor, faulty: &Tensor) -> Result<()> {
        if golden.shape() != faulty.shape() {
            return Err(Error::Observer(format!(
                "compare shape mismatch: {:?} vs {:?}",
                golden.shape(),
                faulty.shape()
            )));
        }
        self.passes += 1;
        let n = golden.element_count();
        self.elements += n as u64;
        match self.kind {
            ObserverKind::AffectedCount => {
                for i in 0..n {
                    #[allow(clippy::float_cmp)]
                    if golden.value_at(i) != faulty.value_at(i) {
                        self.affected += 1;
                    }
                }
            }
            ObserverKind::Mae => {
                for i in 0..n {
                    self.sum_abs += (golden.value_at(i) as f64 - faulty.value_at(i) as f64).abs();
                }
            }
            ObserverKind::Rmse => {
                for i in 0..n {
                    let d = golden.value_at(i) as f64 - faulty.value_at(i) as f64;
                    self.sum_sq += d * d;
                }
            }
            _ => {
                return Err(Error::Observer(format!(
                    "compare() needs a comparison observer, got {}",
                    self.kind.name()
                )))
            }
        }
        Ok(())
    }

    /// Store up to max_elements values plus shape metadata.
    pub fn dump_values(&mut self, tensor: &Tensor) {
        let max = match self.kind {
            ObserverKind::ValueDump { max_elements } => max_elements,
            _ => return,
        };
        self.passes += 1;
        if self.dump_shape.is_empty() {
            self.dump_shape = tensor.shape().to_vec();
        }
        for i in 0..tensor.element_count() {
            if self.dump.len() >= max {
                self.truncated = true;
                break;
            }
            self.dump.push(tensor.value_at(i));
        }
    }

    /// Finalized metric value.
    pub fn finalize(&self) -> f64 {
        match self.kind {
            ObserverKind::Mae => {
                if self.elements == 0 {
                    0.0
                } else {
                    self.sum_abs / self.elements as f64
                }
            }
            ObserverKind::Rmse => {
                if self.elements == 0 {
                    0.0
                } else {
                    (self.sum_sq / self.elements as f64).sqrt()
                }
            }
            ObserverKind::AffectedCount => self.affected as f64,
            ObserverKind::MinMax => self.max as f64,
            ObserverKind::ValueDump { .. } => self.dump.len() as f64,
        }
    }

    /// Affected elements per observed pass.
    pub fn affected_mean(&self) -> f64 {
        if self.passes == 0 {
            0.0
        } else {
            self.affected as f64 / self.passes as f64
        }
    }

    /// Affected elements as a fraction of all compared elements.
    pub fn affected_frac(&self) -> f64 {
        if self.elements == 0 {
            0.0
        } else {
            self.affected as f64 / self.elements as f64
        }
    }

    /// Commutative merge of two records of the same (layer, kind).
    pub fn merge(&mut self, other: &ObservationRecord) -> Result<()> {
        if self.layer_path != other.layer_path || self.kind != other.kind {
            return Err(Error::Observer("cannot merge records of different keys".into()));
        }
        self.passes += other.passes;
        self.elements += other.elements;
        self.sum_abs += other.sum_abs;
        self.sum_sq += other.sum_sq;
        self.min = self.min.min(other.min);
        self.max = self.max.max(other.max);
        self.affected += other.affected;
        if self.dump_shape.is_empty() {
            self.dump_shape = other.dump_shape.clone();
        }
        if let ObserverKind::ValueDump { max_elements } = self.kind {
            for &v in &other.dump {
                if self.dump.len() >= max_elements {
                    self.truncated = true;
                    break;
                }
                self.dump.push(v);
            }
            self.truncated |= other.truncated;
        }
        Ok(())
    }
}

/// The observation records of one trial, keyed by (layer, kind).
#[derive(Debug, Clone, Default)]
pub struct RecordSet {
    pub records: Vec<ObservationRecord>,
}

impl RecordSet {
    pub fn new() -> Self {
        RecordSet::default()
    }

    pub fn add(&mut self, path: &str, kind: ObserverKind) {
        if !self
            .records
            .iter()
            .any(|r| r.layer_path == path && r.kind == kind)
        {
            self.records.push(ObservationRecord::new(path, kind));
        }
    }

    pub fn get(&self, path: &str, kind: ObserverKind) -> Option<&ObservationRecord> {
        self.records
            .iter()
            .find(|r| r.layer_path == path && r.kind == kind)
    }

    pub fn observed_paths(&self) -> BTreeSet<String> {
        self.records.iter().map(|r| r.layer_path.clone()).collect()
    }

    /// Merge another trial's records (same layout) into this one.
    pub fn merge(&mut self, other: &RecordSet) -> Result<()> {
        for rec in &other.records {
            match self
                .records
                .iter_mut()
                .find(|r| r.layer_path == rec.layer_path && r.kind == rec.kind)
            {
                Some(mine) => mine.merge(rec)?,
                None => self.records.push(rec.clone()),
            }
        }
        Ok(())
    }

    /// Feed one image's captured activations into every record.
    pub fn apply(
        &mut self,
        golden: &HashMap<String, Tensor>,
        faulty: &HashMap<String, Tensor>,
    ) -> Result<()> {
        for rec in &mut self.records {
            let f = faulty.get(&rec.layer_path).ok_or_else(|| {
                Error::Observer(format!("no captured activation for {}", rec.layer_path))
            })?;
            match rec.kind {
                ObserverKind::MinMax => rec.update_minmax(f),
                ObserverKind::ValueDump { .. } => rec.dump_values(f),
                _ => {
                    let g = golden.get(&rec.layer_path).ok_or_else(|| {
                        Error::Observer(format!(
                            "no golden activation for {}",
                            rec.layer_path
                        ))
                    })?;
                    rec.compare(g, f)?;
                }
            }
        }
        Ok(())
    }

    /// CSV export: `layer,kind,n,value` with one row per finalized metric.
    /// Affected counts export both the accumulated total and the per-pass
    /// mean.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,kind,n,value\n");
        for r in &self.records {
            let n = r.passes;
            let path = &r.layer_path;
            match r.kind {
                ObserverKind::MinMax => {
                    out.push_str(&format!("{path},min,{n},{}\n", r.min));
                    out.push_str(&format!("{path},max,{n},{}\n", r.max));
                }
                ObserverKind::AffectedCount => {
                    out.push_str(&format!("{path},affected,{n},{}\n", r.affected));
                    out.push_str(&format!("{path},affected_mean,{n},{}\n", r.affected_mean()));
                }
                ObserverKind::Mae => {
                    out.push_str(&format!("{path},mae,{n},{}\n", r.finalize()));
                }
                ObserverKind::Rmse => {
                    out.push_str(&format!("{path},rmse,{n},{}\n", r.finalize()));
                }
                ObserverKind::ValueDump { .. } => {
                    out.push_str(&format!("{path},dump,{n},{}\n", r.dump.len()));
                }
            }
        }
        out
    }
}

/// Write one dump record to `<dir>/<layer>.csv`.
pub fn write_dump(record: &ObservationRecord, dir: &Path) -> Result<std::path::PathBuf> {
    let path = dir.join(format!("{}.csv", record.layer_path));
    let mut f = std::fs::File::create(&path)?;
    let shape: Vec<String> = record.dump_shape.iter().map(|d| d.to_string()).collect();
    writeln!(f, "shape,{}", shape.join("x"))?;
    writeln!(f, "truncated,{}", record.truncated as u8)?;
    for v in &record.dump {
        writeln!(f, "{v}")?;
    }
    Ok(path)
}

/// Re-import a dump file: (values, shape, truncated).
pub fn read_dump(path: &Path) -> Result<(Vec<f32>, Vec<usize>, bool)> {
    let f = std::fs::File::open(path)?;
    let mut lines = BufReader::new(f).lines();
    let header = lines
        .next()
        .transpose()?
        .ok_or_else(|| Error::Load("empty dump file".into()))?;
    let shape: Vec<usize> = header
        .strip_prefix("shape,")
        .ok_or_else(|| Error::Load("dump file missing shape header".into()))?
        .split('x')
        .map(|s| s.parse().map_err(|_| Error::Load(format!("bad shape field {s}"))))
        .collect::<Result<_>>()?;
    let trunc_line = lines
        .next()
        .transpose()?
        .ok_or_else(|| Error::Load("dump file missing truncated header".into()))?;
    let truncated = trunc_line
        .strip_prefix("truncated,")
        .map(|s| s == "1")
        .ok_or_else(|| Error::Load("dump file missing truncated header".into()))?;
    let mut values = Vec::new();
    for line in lines {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        values.push(
            line.parse::<f32>()
                .map_err(|_| Error::Load(format!("bad dump value {line}")))?,
        );
    }
    Ok((values, shape, truncated))
}

/// Run a forward pass capturing the post-activation of each observed path,
/// with the caller's hooks applied first at each site.
fn capture_pass(
    graph: &Graph,
    input: &Tensor,
    injection: &mut [Hook<'_>],
    paths: &BTreeSet<String>,
) -> Result<(Tensor, HashMap<String, Tensor>)> {
    let store: RefCell<HashMap<String, Tensor>> = RefCell::new(HashMap::new());
    let mut all: Vec<Hook<'_>> = Vec::with_capacity(injection.len() + paths.len());
    for h in injection.iter_mut() {
        let point = h.point.clone();
        let cb = &mut h.callback;
        all.push(Hook::new(point, move |t| cb(t)));
    }
    for path in paths {
        let store = &store;
        let key = path.clone();
        all.push(Hook::new(
            HookPoint::new(path.clone(), HookSite::ActivationPost),
            move |t| {
                store.borrow_mut().insert(key.clone(), t.clone());
                Ok(t.clone())
            },
        ));
    }
    let logits = forward(graph, input, &mut all)?;
    drop(all);
    Ok((logits, store.into_inner()))
}

/// Golden-then-faulty dual pass for one input.
///
/// The golden pass runs with no injection hooks and caches the observed
/// layers' activations; the faulty pass runs with injection active, then
/// every record is updated. Returns (golden logits, faulty logits).
pub fn dual_forward(
    graph: &Graph,
    input: &Tensor,
    injection: &mut [Hook<'_>],
    records: &mut RecordSet,
) -> Result<(Tensor, Tensor)> {
    let paths = records.observed_paths();
    for path in &paths {
        if graph.layer(path).is_none() {
            return Err(Error::Observer(format!("observer on unknown layer {path}")));
        }
    }
    let (golden_logits, golden_acts) = capture_pass(graph, input, &mut [], &paths)?;
    let (faulty_logits, faulty_acts) = capture_pass(graph, input, injection, &paths)?;
    records.apply(&golden_acts, &faulty_acts)?;
    Ok((golden_logits, faulty_logits))
}
