//! Config file grammars.
//!
//! EasyConfig is a flat, section-based format applying one policy
//! uniformly to a set of layer globs:
//!
//! ```text
//! [injection]
//! layers=model.conv*,model.fc1
//! target=activation
//! mode=ber
//! ber=1e-6
//! sampling=poisson
//! error_model=bitflip_random
//! [quantize]
//! method=fixed:3.13
//! [observe]
//! observers=minmax,rmse
//! ```
//!
//! The detailed tree format nests nodes by 2-space indentation with the
//! same keys (plus `enabled`), one `pattern:` header per node:
//!
//! ```text
//! enabled=true
//! model:
//!   ber=1e-6
//!   conv1:
//!     ber=1e-4
//! ```
//!
//! [`serialize`] emits the canonical tree form; parse -> serialize ->
//! parse is the identity on the node tree.

use crate::error::{Error, Result};
use crate::fault::{ErrorModelSpec, FixedSite, Sampling};
use crate::observe::{ObserverKind, DEFAULT_DUMP_MAX};
use crate::quant::QuantMethod;

use super::{InjectionConfigNode, ModeKind, NodeFields, SitePref, TargetSpec};

fn perr(line: usize, msg: impl Into<String>) -> Error {
    Error::Parse { line, msg: msg.into() }
}

fn parse_bool(v: &str, line: usize) -> Result<bool> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(perr(line, format!("expected true|false, got {v:?}"))),
    }
}

fn parse_f64(v: &str, line: usize) -> Result<f64> {
    v.parse::<f64>()
        .map_err(|_| perr(line, format!("malformed number {v:?}")))
}

fn parse_u64(v: &str, line: usize) -> Result<u64> {
    v.parse::<u64>()
        .map_err(|_| perr(line, format!("malformed integer {v:?}")))
}

fn parse_target(v: &str, line: usize) -> Result<TargetSpec> {
    match v {
        "activation" => Ok(TargetSpec::Activation),
        "weight" => Ok(TargetSpec::Weight),
        "both" => Ok(TargetSpec::Both),
        _ => Err(perr(line, format!("unknown target {v:?}"))),
    }
}

fn parse_site(v: &str, line: usize) -> Result<SitePref> {
    match v {
        "pre" => Ok(SitePref::Pre),
        "post" => Ok(SitePref::Post),
        _ => Err(perr(line, format!("unknown site {v:?}"))),
    }
}

fn parse_mode(v: &str, line: usize) -> Result<ModeKind> {
    match v {
        "ber" => Ok(ModeKind::Ber),
        "fixed_count" => Ok(ModeKind::FixedCount),
        "fixed_position" => Ok(ModeKind::FixedPosition),
        _ => Err(perr(line, format!("unknown mode {v:?}"))),
    }
}

fn parse_sampling(v: &str, line: usize) -> Result<Sampling> {
    match v {
        "rounded" => Ok(Sampling::Rounded),
        "poisson" => Ok(Sampling::Poisson),
        "bernoulli" => Ok(Sampling::PerBitBernoulli),
        _ => Err(perr(line, format!("unknown sampling {v:?}"))),
    }
}

fn parse_positions(v: &str, line: usize) -> Result<Vec<FixedSite>> {
    let mut out = Vec::new();
    for item in v.split(';').filter(|s| !s.is_empty()) {
        let parts: Vec<&str> = item.split(':').collect();
        if parts.len() != 3 {
            return Err(perr(line, format!("position {item:?} is not path:offset:bit")));
        }
        out.push(FixedSite {
            path: parts[0].to_string(),
            offset: parts[1]
                .parse()
                .map_err(|_| perr(line, format!("malformed offset {:?}", parts[1])))?,
            bit: parts[2]
                .parse()
                .map_err(|_| perr(line, format!("malformed bit {:?}", parts[2])))?,
        });
    }
    Ok(out)
}

fn parse_error_model(v: &str, line: usize) -> Result<ErrorModelSpec> {
    if v == "bitflip_random" {
        return Ok(ErrorModelSpec::BitFlipRandom);
    }
    if v == "stuck0" {
        return Ok(ErrorModelSpec::StuckAtZero);
    }
    if let Some(rest) = v.strip_prefix("bitflip_fixed:") {
        let bit = rest
            .parse()
            .map_err(|_| perr(line, format!("malformed bit {rest:?}")))?;
        return Ok(ErrorModelSpec::BitFlipFixed { bit });
    }
    if let Some(rest) = v.strip_prefix("value:") {
        return Ok(ErrorModelSpec::FixedValue { value: parse_f64(rest, line)? });
    }
    if let Some(rest) = v.strip_prefix("uniform:") {
        let (lo, hi) = rest
            .split_once(',')
            .ok_or_else(|| perr(line, format!("uniform bounds {rest:?} need lo,hi")))?;
        return Ok(ErrorModelSpec::UniformRandom {
            lo: parse_f64(lo, line)?,
            hi: parse_f64(hi, line)?,
        });
    }
    if let Some(rest) = v.strip_prefix("gauss:") {
        return Ok(ErrorModelSpec::GaussianPerturb { sigma: parse_f64(rest, line)? });
    }
    Err(perr(line, format!("unknown error model {v:?}")))
}

fn parse_method(v: &str, line: usize) -> Result<QuantMethod> {
    if v == "none" {
        return Ok(QuantMethod::None);
    }
    if v == "f16" {
        return Ok(QuantMethod::F16);
    }
    if let Some(rest) = v.strip_prefix("fixed:") {
        let (m, n) = rest
            .split_once('.')
            .ok_or_else(|| perr(line, format!("fixed-point spec {rest:?} is not m.n")))?;
        return Ok(QuantMethod::FixedPoint {
            int_bits: m
                .parse()
                .map_err(|_| perr(line, format!("malformed integer bits {m:?}")))?,
            frac_bits: n
                .parse()
                .map_err(|_| perr(line, format!("malformed fraction bits {n:?}")))?,
        });
    }
    if let Some(rest) = v.strip_prefix("layerwise:") {
        let bits = rest
            .parse()
            .map_err(|_| perr(line, format!("malformed bit count {rest:?}")))?;
        return Ok(QuantMethod::LayerwiseRange { total_bits: bits });
    }
    Err(perr(line, format!("unknown quantization method {v:?}")))
}

fn parse_observers(v: &str, line: usize) -> Result<Vec<ObserverKind>> {
    v.split(',')
        .filter(|s| !s.is_empty())
        .map(|item| match item {
            "minmax" => Ok(ObserverKind::MinMax),
            "affected" => Ok(ObserverKind::AffectedCount),
            "mae" => Ok(ObserverKind::Mae),
            "rmse" => Ok(ObserverKind::Rmse),
            "dump" => Ok(ObserverKind::ValueDump { max_elements: DEFAULT_DUMP_MAX }),
            _ => Err(perr(line, format!("unknown observer {item:?}"))),
        })
        .collect()
}

/// Set one key on a NodeFields; `allow` names the keys valid in this
/// context.
fn set_field(
    fields: &mut NodeFields,
    key: &str,
    value: &str,
    line: usize,
    allow: &[&str],
) -> Result<()> {
    if !allow.contains(&key) {
        return Err(perr(line, format!("unknown key {key:?}")));
    }
    match key {
        "enabled" => fields.enabled = Some(parse_bool(value, line)?),
        "target" => fields.target = Some(parse_target(value, line)?),
        "site" => fields.site = Some(parse_site(value, line)?),
        "mode" => fields.mode = Some(parse_mode(value, line)?),
        "ber" => fields.ber = Some(parse_f64(value, line)?),
        "count" => fields.count = Some(parse_u64(value, line)?),
        "positions" => fields.positions = Some(parse_positions(value, line)?),
        "sampling" => fields.sampling = Some(parse_sampling(value, line)?),
        "error_model" => fields.error_model = Some(parse_error_model(value, line)?),
        "method" => fields.method = Some(parse_method(value, line)?),
        "scale" => fields.scale = Some(parse_f64(value, line)?),
        "observers" => fields.observers = Some(parse_observers(value, line)?),
        _ => unreachable!("allow list covers keys"),
    }
    Ok(())
}

const INJECTION_KEYS: &[&str] = &[
    "layers", "target", "site", "mode", "ber", "count", "positions", "sampling",
    "error_model",
];
const QUANTIZE_KEYS: &[&str] = &["method", "scale"];
const OBSERVE_KEYS: &[&str] = &["observers"];
const TREE_KEYS: &[&str] = &[
    "enabled", "target", "site", "mode", "ber", "count", "positions", "sampling",
    "error_model", "method", "scale", "observers",
];

/// Strip comments and trailing whitespace; returns None for blank lines.
fn significant(line: &str) -> Option<&str> {
    let line = match line.find('#') {
        Some(idx) => &line[..idx],
        None => line,
    };
    let trimmed = line.trim_end();
    if trimmed.trim().is_empty() {
        None
    } else {
        Some(trimmed)
    }
}

/// Parse the flat EasyConfig format into a two-level tree: root defaults
/// (quantization, observers) plus one enabled child per layer glob.
/// Overlapping globs resolve last-match-wins by declaration order.
pub fn parse_easyconfig(text: &str) -> Result<InjectionConfigNode> {
    #[derive(PartialEq, Clone, Copy)]
    enum Section {
        None,
        Injection,
        Quantize,
        Observe,
    }

    fn flush(
        root: &mut InjectionConfigNode,
        fields: &mut NodeFields,
        layers: &mut Option<Vec<String>>,
        line: usize,
    ) -> Result<()> {
        let globs = layers
            .take()
            .ok_or_else(|| perr(line, "[injection] section is missing its layers key"))?;
        let mut f = std::mem::take(fields);
        f.enabled = Some(true);
        for glob in globs {
            root.children.push(InjectionConfigNode {
                pattern: glob,
                fields: f.clone(),
                children: Vec::new(),
            });
        }
        Ok(())
    }

    let mut root = InjectionConfigNode::root();
    let mut section = Section::None;
    let mut sec_fields = NodeFields::default();
    let mut sec_layers: Option<Vec<String>> = None;
    let mut sec_line = 0usize;

    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let Some(line) = significant(raw) else { continue };
        let line = line.trim();
        if let Some(header) = line.strip_prefix('[') {
            let name = header
                .strip_suffix(']')
                .ok_or_else(|| perr(line_no, format!("malformed section header {line:?}")))?;
            if section == Section::Injection {
                flush(&mut root, &mut sec_fields, &mut sec_layers, sec_line)?;
            }
            section = match name {
                "injection" => Section::Injection,
                "quantize" => Section::Quantize,
                "observe" => Section::Observe,
                _ => return Err(perr(line_no, format!("unknown section [{name}]"))),
            };
            sec_line = line_no;
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| perr(line_no, format!("expected key=value, got {line:?}")))?;
        let (key, value) = (key.trim(), value.trim());
        match section {
            Section::None => {
                return Err(perr(line_no, format!("key {key:?} outside any section")))
            }
            Section::Injection => {
                if key == "layers" {
                    sec_layers = Some(
                        value
                            .split(',')
                            .map(|s| s.trim().to_string())
                            .filter(|s| !s.is_empty())
                            .collect(),
                    );
                } else {
                    set_field(&mut sec_fields, key, value, line_no, INJECTION_KEYS)?;
                }
            }
            Section::Quantize => {
                set_field(&mut root.fields, key, value, line_no, QUANTIZE_KEYS)?
            }
            Section::Observe => {
                set_field(&mut root.fields, key, value, line_no, OBSERVE_KEYS)?
            }
        }
    }
    if section == Section::Injection {
        flush(&mut root, &mut sec_fields, &mut sec_layers, sec_line)?;
    }
    Ok(root)
}

/// Parse the indentation-based tree format.
pub fn parse_tree(text: &str) -> Result<InjectionConfigNode> {
    struct Arena {
        pattern: String,
        fields: NodeFields,
        children: Vec<usize>,
    }
    let mut nodes = vec![Arena {
        pattern: String::new(),
        fields: NodeFields::default(),
        children: Vec::new(),
    }];
    // (header indent, arena index); root pretends to sit at indent -2
    let mut stack: Vec<(i64, usize)> = vec![(-2, 0)];

    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let Some(line) = significant(raw) else { continue };
        let indent = (line.len() - line.trim_start().len()) as i64;
        if !indent.unsigned_abs().is_multiple_of(2) {
            return Err(perr(line_no, "indentation must be a multiple of two spaces"));
        }
        let body = line.trim_start();
        while stack.last().map(|(i, _)| *i >= indent).unwrap_or(false) {
            stack.pop();
        }
        let &(parent_indent, parent) = stack
            .last()
            .ok_or_else(|| perr(line_no, "indentation underflow"))?;
        if indent != parent_indent + 2 {
            return Err(perr(line_no, format!("unexpected indentation of {indent} spaces")));
        }
        if let Some(pattern) = body.strip_suffix(':') {
            if pattern.is_empty() || pattern.contains('=') {
                return Err(perr(line_no, format!("malformed node header {body:?}")));
            }
            let id = nodes.len();
            nodes.push(Arena {
                pattern: pattern.to_string(),
                fields: NodeFields::default(),
                children: Vec::new(),
            });
            nodes[parent].children.push(id);
            stack.push((indent, id));
        } else {
            let (key, value) = body
                .split_once('=')
                .ok_or_else(|| perr(line_no, format!("expected key=value or header, got {body:?}")))?;
            set_field(
                &mut nodes[parent].fields,
                key.trim(),
                value.trim(),
                line_no,
                TREE_KEYS,
            )?;
        }
    }

    fn build(nodes: &[Arena], id: usize) -> InjectionConfigNode {
        InjectionConfigNode {
            pattern: nodes[id].pattern.clone(),
            fields: nodes[id].fields.clone(),
            children: nodes[id].children.iter().map(|&c| build(nodes, c)).collect(),
        }
    }
    Ok(build(&nodes, 0))
}

/// Parse either format, sniffing by the first significant line.
pub fn parse_config(text: &str) -> Result<InjectionConfigNode> {
    for raw in text.lines() {
        if let Some(line) = significant(raw) {
            if line.trim_start().starts_with('[') {
                return parse_easyconfig(text);
            }
            return parse_tree(text);
        }
    }
    // an empty config disables injection everywhere
    Ok(InjectionConfigNode::root())
}

fn fmt_error_model(m: &ErrorModelSpec) -> String {
    match m {
        ErrorModelSpec::BitFlipRandom => "bitflip_random".into(),
        ErrorModelSpec::BitFlipFixed { bit } => format!("bitflip_fixed:{bit}"),
        ErrorModelSpec::StuckAtZero => "stuck0".into(),
        ErrorModelSpec::FixedValue { value } => format!("value:{value}"),
        ErrorModelSpec::UniformRandom { lo, hi } => format!("uniform:{lo},{hi}"),
        ErrorModelSpec::GaussianPerturb { sigma } => format!("gauss:{sigma}"),
    }
}

fn fmt_method(m: &QuantMethod) -> String {
    match m {
        QuantMethod::None => "none".into(),
        QuantMethod::F16 => "f16".into(),
        QuantMethod::FixedPoint { int_bits, frac_bits } => format!("fixed:{int_bits}.{frac_bits}"),
        QuantMethod::LayerwiseRange { total_bits } => format!("layerwise:{total_bits}"),
    }
}

fn fmt_fields(fields: &NodeFields, indent: usize, out: &mut String) {
    let pad = " ".repeat(indent);
    let mut push = |key: &str, value: String| {
        out.push_str(&format!("{pad}{key}={value}\n"));
    };
    if let Some(v) = fields.enabled {
        push("enabled", v.to_string());
    }
    if let Some(v) = fields.target {
        push(
            "target",
            match v {
                TargetSpec::Activation => "activation",
                TargetSpec::Weight => "weight",
                TargetSpec::Both => "both",
            }
            .into(),
        );
    }
    if let Some(v) = fields.site {
        push("site", if v == SitePref::Pre { "pre".into() } else { "post".into() });
    }
    if let Some(v) = fields.mode {
        push(
            "mode",
            match v {
                ModeKind::Ber => "ber",
                ModeKind::FixedCount => "fixed_count",
                ModeKind::FixedPosition => "fixed_position",
            }
            .into(),
        );
    }
    if let Some(v) = fields.ber {
        push("ber", v.to_string());
    }
    if let Some(v) = fields.count {
        push("count", v.to_string());
    }
    if let Some(v) = &fields.positions {
        let items: Vec<String> = v
            .iter()
            .map(|s| format!("{}:{}:{}", s.path, s.offset, s.bit))
            .collect();
        push("positions", items.join(";"));
    }
    if let Some(v) = fields.sampling {
        push(
            "sampling",
            match v {
                Sampling::Rounded => "rounded",
                Sampling::Poisson => "poisson",
                Sampling::PerBitBernoulli => "bernoulli",
            }
            .into(),
        );
    }
    if let Some(v) = &fields.error_model {
        push("error_model", fmt_error_model(v));
    }
    if let Some(v) = &fields.method {
        push("method", fmt_method(v));
    }
    if let Some(v) = fields.scale {
        push("scale", v.to_string());
    }
    if let Some(v) = &fields.observers {
        let items: Vec<&str> = v.iter().map(|k| k.name()).collect();
        push("observers", items.join(","));
    }
}

fn serialize_node(node: &InjectionConfigNode, indent: usize, out: &mut String) {
    out.push_str(&format!("{}{}:\n", " ".repeat(indent), node.pattern));
    fmt_fields(&node.fields, indent + 2, out);
    for child in &node.children {
        serialize_node(child, indent + 2, out);
    }
}

/// Canonical serialization in the tree grammar. Parsing the output yields
/// a tree equal to the input.
pub fn serialize(tree: &InjectionConfigNode) -> String {
    let mut out = String::new();
    fmt_fields(&tree.fields, 0, &mut out);
    for child in &tree.children {
        serialize_node(child, 0, &mut out);
    }
    out
}
