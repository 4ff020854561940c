//! Injection configuration: flat EasyConfig files for uniform policies and
//! an indentation-based tree file for fine-grained control.
//!
//! Both formats parse into the same node tree. Every field is optional and
//! inherited: resolution walks each layer's matching nodes from the root
//! down, so the deepest node that sets a field wins, with declaration
//! order breaking ties among same-depth overlapping patterns
//! (last match wins).

mod parse;

pub use parse::{parse_config, parse_easyconfig, parse_tree, serialize};

use crate::error::{Error, Result};
use crate::fault::{
    make_injector, ErrorModelSpec, FaultTarget, FixedSite, Sampling, SelectorMode,
    SelectorSpec,
};
use crate::fault::rng::RngFactory;
use crate::graph::{Graph, Hook, HookPoint, HookSite};
use crate::observe::{ObserverKind, RecordSet};
use crate::pattern;
use crate::quant::{Calibration, DynamicRange, QuantMethod, QuantSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TargetSpec {
    Activation,
    Weight,
    Both,
}

/// Which activation hook side injection uses (weights always use the
/// pre-compute weight hook).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SitePref {
    Pre,
    Post,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModeKind {
    Ber,
    FixedCount,
    FixedPosition,
}

/// One node's (all optional) settings. Absent fields inherit.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct NodeFields {
    pub enabled: Option<bool>,
    pub target: Option<TargetSpec>,
    pub site: Option<SitePref>,
    pub mode: Option<ModeKind>,
    pub ber: Option<f64>,
    pub count: Option<u64>,
    pub positions: Option<Vec<FixedSite>>,
    pub sampling: Option<Sampling>,
    pub error_model: Option<ErrorModelSpec>,
    pub method: Option<QuantMethod>,
    pub scale: Option<f64>,
    pub observers: Option<Vec<ObserverKind>>,
}

impl NodeFields {
    fn overlay(&mut self, other: &NodeFields) {
        macro_rules! take {
            ($field:ident) => {
                if other.$field.is_some() {
                    self.$field = other.$field.clone();
                }
            };
        }
        take!(enabled);
        take!(target);
        take!(site);
        take!(mode);
        take!(ber);
        take!(count);
        take!(positions);
        take!(sampling);
        take!(error_model);
        take!(method);
        take!(scale);
        take!(observers);
    }

    pub fn is_empty(&self) -> bool {
        self == &NodeFields::default()
    }
}

/// One node of the configuration tree. The pattern is a dotted glob
/// matched against layer paths (segment-prefix semantics); the root has an
/// empty pattern.
#[derive(Debug, Clone, PartialEq)]
pub struct InjectionConfigNode {
    pub pattern: String,
    pub fields: NodeFields,
    pub children: Vec<InjectionConfigNode>,
}

impl InjectionConfigNode {
    pub fn root() -> Self {
        InjectionConfigNode {
            pattern: String::new(),
            fields: NodeFields::default(),
            children: Vec::new(),
        }
    }
}

/// Fully materialized settings for one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ResolvedEntry {
    pub enabled: bool,
    pub target: TargetSpec,
    pub site: SitePref,
    pub quant: QuantSpec,
    pub selector: Option<SelectorSpec>,
    pub error_model: Option<ErrorModelSpec>,
    pub observers: Vec<ObserverKind>,
}

/// Per-layer resolved configuration, in graph layer order.
#[derive(Debug, Clone, PartialEq)]
pub struct ResolvedConfig {
    pub entries: Vec<(String, ResolvedEntry)>,
}

impl ResolvedConfig {
    pub fn entry(&self, path: &str) -> Option<&ResolvedEntry> {
        self.entries.iter().find(|(p, _)| p == path).map(|(_, e)| e)
    }

    pub fn enabled_entries(&self) -> impl Iterator<Item = (&String, &ResolvedEntry)> {
        self.entries.iter().filter(|(_, e)| e.enabled).map(|(p, e)| (p, e))
    }

    /// The single enabled layer, for experiments that need exactly one.
    pub fn single_enabled(&self) -> Result<(&String, &ResolvedEntry)> {
        let mut it = self.enabled_entries();
        let first = it
            .next()
            .ok_or_else(|| Error::Config("no layer enabled for injection".into()))?;
        if it.next().is_some() {
            return Err(Error::Config(
                "this experiment needs exactly one enabled layer".into(),
            ));
        }
        Ok(first)
    }

    /// True when any enabled entry uses layerwise-range quantization.
    pub fn needs_calibration(&self) -> bool {
        self.enabled_entries()
            .any(|(_, e)| matches!(e.quant.method, QuantMethod::LayerwiseRange { .. }))
    }

    /// Replace the bit error rate of every enabled rate selector.
    pub fn set_ber(&mut self, ber: f64) -> Result<()> {
        for (path, e) in self.entries.iter_mut().filter(|(_, e)| e.enabled) {
            match &mut e.selector {
                Some(SelectorSpec { mode: SelectorMode::Rate { ber: b, .. }, .. }) => {
                    *b = ber;
                }
                _ => {
                    return Err(Error::Config(format!(
                        "{path}: ber sweep needs a rate selector"
                    )))
                }
            }
        }
        Ok(())
    }

    /// Replace the error model of every enabled entry.
    pub fn set_error_model(&mut self, model: ErrorModelSpec) {
        for (_, e) in self.entries.iter_mut().filter(|(_, e)| e.enabled) {
            e.error_model = Some(model);
        }
    }

    /// Set the selection mask of every enabled entry.
    pub fn set_mask(&mut self, mask: Option<crate::fault::Mask>) {
        for (_, e) in self.entries.iter_mut().filter(|(_, e)| e.enabled) {
            if let Some(sel) = &mut e.selector {
                sel.mask = mask.clone();
            }
        }
    }
}

fn compose_entry(path: &str, fields: &NodeFields) -> Result<ResolvedEntry> {
    let quant = QuantSpec {
        method: fields.method.unwrap_or(QuantMethod::None),
        scale_override: fields.scale,
    };
    let selector = match fields.mode {
        None => None,
        Some(ModeKind::Ber) => {
            let ber = fields.ber.ok_or_else(|| {
                Error::Config(format!("{path}: mode=ber requires a ber value"))
            })?;
            Some(SelectorSpec {
                mode: SelectorMode::Rate {
                    ber,
                    sampling: fields.sampling.unwrap_or(Sampling::Poisson),
                },
                mask: None,
            })
        }
        Some(ModeKind::FixedCount) => {
            let count = fields.count.ok_or_else(|| {
                Error::Config(format!("{path}: mode=fixed_count requires a count"))
            })?;
            Some(SelectorSpec { mode: SelectorMode::FixedCount { count }, mask: None })
        }
        Some(ModeKind::FixedPosition) => {
            let sites = fields.positions.clone().ok_or_else(|| {
                Error::Config(format!("{path}: mode=fixed_position requires positions"))
            })?;
            Some(SelectorSpec { mode: SelectorMode::FixedPosition { sites }, mask: None })
        }
    };
    let entry = ResolvedEntry {
        enabled: fields.enabled.unwrap_or(false),
        target: fields.target.unwrap_or(TargetSpec::Activation),
        site: fields.site.unwrap_or(SitePref::Post),
        quant,
        selector,
        error_model: fields.error_model,
        observers: fields.observers.clone().unwrap_or_default(),
    };
    if entry.enabled {
        if entry.selector.is_none() {
            return Err(Error::Config(format!("{path}: enabled without a selector")));
        }
        if entry.error_model.is_none() {
            return Err(Error::Config(format!("{path}: enabled without an error model")));
        }
        entry.quant.validate()?;
        if let Some(sel) = &entry.selector {
            sel.validate()?;
        }
        if let Some(m) = &entry.error_model {
            m.validate()?;
        }
    }
    Ok(entry)
}

/// Flattened view of the tree: cumulative pattern, tree depth, and
/// pre-order declaration index.
struct FlatNode<'a> {
    pattern: String,
    depth: usize,
    order: usize,
    fields: &'a NodeFields,
}

fn flatten<'a>(
    node: &'a InjectionConfigNode,
    prefix: &str,
    depth: usize,
    out: &mut Vec<FlatNode<'a>>,
) {
    let pattern = if prefix.is_empty() {
        node.pattern.clone()
    } else if node.pattern.is_empty() {
        prefix.to_string()
    } else {
        format!("{prefix}.{}", node.pattern)
    };
    let order = out.len();
    out.push(FlatNode { pattern: pattern.clone(), depth, order, fields: &node.fields });
    for child in &node.children {
        flatten(child, &pattern, depth + 1, out);
    }
}

/// Materialize the tree against a graph: for every layer, each field takes
/// the value from the deepest matching node that sets it.
pub fn resolve(tree: &InjectionConfigNode, graph: &Graph) -> Result<ResolvedConfig> {
    let mut flat = Vec::new();
    flatten(tree, "", 0, &mut flat);

    // every non-root pattern must cover at least one layer
    for node in flat.iter().skip(1) {
        if !graph
            .layers()
            .iter()
            .any(|l| pattern::prefix_match(&node.pattern, &l.path))
        {
            return Err(Error::Config(format!(
                "config path {:?} matches no layer",
                node.pattern
            )));
        }
    }

    let mut entries = Vec::with_capacity(graph.layers().len());
    for layer in graph.layers() {
        let mut matching: Vec<&FlatNode> = flat
            .iter()
            .filter(|n| n.depth == 0 || pattern::prefix_match(&n.pattern, &layer.path))
            .collect();
        matching.sort_by_key(|n| (n.depth, n.order));
        let mut merged = NodeFields::default();
        for node in matching {
            merged.overlay(node.fields);
        }
        entries.push((layer.path.clone(), compose_entry(&layer.path, &merged)?));
    }
    Ok(ResolvedConfig { entries })
}

fn range_for(
    calib: Option<&Calibration>,
    graph: &Graph,
    path: &str,
    target: FaultTarget,
    site: SitePref,
) -> Result<DynamicRange> {
    let calib = calib.ok_or_else(|| {
        Error::Config(format!("{path}: layerwise quantization needs calibration data"))
    })?;
    let found = match target {
        FaultTarget::Weight => calib.weights.get(path).copied(),
        FaultTarget::Activation => match site {
            SitePref::Post => calib.activations.get(path).copied(),
            SitePref::Pre => {
                // the input of this layer is the previous layer's output
                let idx = graph
                    .layers()
                    .iter()
                    .position(|l| l.path == path)
                    .expect("resolved path exists");
                if idx == 0 {
                    calib.input
                } else {
                    calib.activations.get(&graph.layers()[idx - 1].path).copied()
                }
            }
        },
    };
    found.ok_or_else(|| {
        Error::Config(format!("{path}: no calibrated range for this injection point"))
    })
}

/// Build the per-trial hook list and observation records.
///
/// One injector callback per enabled (layer, target); layers whose
/// resolved observers are non-empty get records regardless of whether
/// injection is enabled there. Weight injection silently skips
/// parameter-free layers (globs routinely cover them).
pub fn build_hooks(
    resolved: &ResolvedConfig,
    graph: &Graph,
    calib: Option<&Calibration>,
    factory: &RngFactory,
) -> Result<(Vec<Hook<'static>>, RecordSet)> {
    let mut hooks: Vec<Hook<'static>> = Vec::new();
    let mut records = RecordSet::new();
    for (path, entry) in &resolved.entries {
        for kind in &entry.observers {
            records.add(path, *kind);
        }
        if !entry.enabled {
            continue;
        }
        let layer = graph
            .layer(path)
            .ok_or_else(|| Error::Config(format!("config references unknown layer {path}")))?;
        let selector = entry.selector.clone().expect("validated at resolve");
        let model = entry.error_model.expect("validated at resolve");

        let mut targets: Vec<FaultTarget> = Vec::new();
        match entry.target {
            TargetSpec::Activation => targets.push(FaultTarget::Activation),
            TargetSpec::Weight => targets.push(FaultTarget::Weight),
            TargetSpec::Both => {
                targets.push(FaultTarget::Weight);
                targets.push(FaultTarget::Activation);
            }
        }
        for target in targets {
            let (hook_site, salt) = match target {
                FaultTarget::Weight => {
                    if !layer.kind.is_weighted() {
                        continue;
                    }
                    (HookSite::WeightPre, 0u64)
                }
                FaultTarget::Activation => (
                    match entry.site {
                        SitePref::Pre => HookSite::ActivationPre,
                        SitePref::Post => HookSite::ActivationPost,
                    },
                    1u64,
                ),
            };
            let range = if matches!(entry.quant.method, QuantMethod::LayerwiseRange { .. }) {
                Some(range_for(calib, graph, path, target, entry.site)?)
            } else {
                None
            };
            let injector = make_injector(
                entry.quant,
                range,
                selector.clone(),
                model,
                path.clone(),
                target,
                factory.stream(path, salt),
            );
            hooks.push(Hook::new(HookPoint::new(path.clone(), hook_site), injector));
        }
    }
    Ok((hooks, records))
}
