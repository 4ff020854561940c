//! Simulated quantization wrapping the fault site.
//!
//! Inference itself stays in f32; quantized execution is modeled by
//! converting a tensor to its integer (or half) representation at the hook
//! point, injecting there, and converting back. Rounding is
//! half-away-from-zero so results are reproducible.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::f16::{f16_to_f32, f32_to_f16};
use crate::graph::{forward, Graph, Hook, HookPoint, HookSite};
use crate::tensor::{DType, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum QuantMethod {
    /// No conversion: faults hit the raw f32 representation.
    None,
    /// Two's-complement fixed point with `int_bits` integer bits (sign
    /// included) and `frac_bits` fractional bits.
    FixedPoint { int_bits: u32, frac_bits: u32 },
    /// Symmetric per-layer scaling from the observed dynamic range.
    LayerwiseRange { total_bits: u32 },
    /// Reinterpret as IEEE binary16 (round-to-nearest-even narrowing).
    F16,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantSpec {
    pub method: QuantMethod,
    /// Multiplies the layerwise scale when present.
    pub scale_override: Option<f64>,
}

impl QuantSpec {
    pub fn none() -> Self {
        QuantSpec { method: QuantMethod::None, scale_override: None }
    }

    pub fn validate(&self) -> Result<()> {
        match self.method {
            QuantMethod::None | QuantMethod::F16 => {}
            QuantMethod::FixedPoint { int_bits, frac_bits } => {
                if int_bits < 1 {
                    return Err(Error::Config(
                        "fixed-point int bits must include the sign bit".into(),
                    ));
                }
                if int_bits + frac_bits > 16 {
                    return Err(Error::Config(format!(
                        "fixed-point {int_bits}.{frac_bits} needs {} bits; storage is limited to i16",
                        int_bits + frac_bits
                    )));
                }
            }
            QuantMethod::LayerwiseRange { total_bits } => {
                if !(2..=16).contains(&total_bits) {
                    return Err(Error::Config(format!(
                        "layerwise quantization bits must be in 2..=16, got {total_bits}"
                    )));
                }
            }
        }
        if let Some(s) = self.scale_override {
            if s.is_nan() || s <= 0.0 {
                return Err(Error::Config(format!("scale override must be positive, got {s}")));
            }
        }
        Ok(())
    }

    /// Dtype a quantized tensor is stored in, or None when no conversion
    /// happens.
    pub fn storage_dtype(&self) -> Option<DType> {
        match self.method {
            QuantMethod::None => None,
            QuantMethod::F16 => Some(DType::F16),
            QuantMethod::FixedPoint { int_bits, frac_bits } => {
                Some(if int_bits + frac_bits <= 8 { DType::I8 } else { DType::I16 })
            }
            QuantMethod::LayerwiseRange { total_bits } => {
                Some(if total_bits <= 8 { DType::I8 } else { DType::I16 })
            }
        }
    }

}

/// Observed value extremes for one layer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DynamicRange {
    pub min_val: f32,
    pub max_val: f32,
}

impl DynamicRange {
    pub fn new(min_val: f32, max_val: f32) -> Self {
        DynamicRange { min_val, max_val }
    }

    pub fn abs_max(&self) -> f64 {
        f64::max(self.min_val.abs() as f64, self.max_val.abs() as f64)
    }
}

/// Effective layerwise scale: range / max code, times the override.
fn layerwise_scale(bits: u32, range: &DynamicRange, spec: &QuantSpec) -> f64 {
    let max_code = ((1u64 << (bits - 1)) - 1) as f64;
    let mut scale = range.abs_max() / max_code;
    if scale == 0.0 {
        // degenerate all-zero range: any scale maps 0 <-> 0
        scale = 1.0;
    }
    scale * spec.scale_override.unwrap_or(1.0)
}

fn quantize_with(
    x: &Tensor,
    bits: u32,
    scale: f64,
) -> Result<Tensor> {
    let qmin = -((1i64 << (bits - 1)) as f64);
    let qmax = ((1i64 << (bits - 1)) - 1) as f64;
    let data = x.as_f32()?;
    if bits <= 8 {
        let out = data
            .iter()
            .map(|&v| (v as f64 / scale).round().clamp(qmin, qmax) as i8)
            .collect();
        Tensor::from_i8(x.shape().to_vec(), out)
    } else {
        let out = data
            .iter()
            .map(|&v| (v as f64 / scale).round().clamp(qmin, qmax) as i16)
            .collect();
        Tensor::from_i16(x.shape().to_vec(), out)
    }
}

/// Convert an f32 tensor to its quantized representation.
pub fn quantize(x: &Tensor, spec: &QuantSpec, range: Option<&DynamicRange>) -> Result<Tensor> {
    spec.validate()?;
    match spec.method {
        QuantMethod::None => {
            Err(Error::Config("quantize called with method none".into()))
        }
        QuantMethod::F16 => {
            let out = x.as_f32()?.iter().map(|&v| f32_to_f16(v)).collect();
            Tensor::from_f16_bits(x.shape().to_vec(), out)
        }
        QuantMethod::FixedPoint { int_bits, frac_bits } => {
            let scale = 2.0f64.powi(-(frac_bits as i32));
            quantize_with(x, int_bits + frac_bits, scale)
        }
        QuantMethod::LayerwiseRange { total_bits } => {
            let range = range.ok_or_else(|| {
                Error::Config("layerwise quantization requires a dynamic range".into())
            })?;
            let scale = layerwise_scale(total_bits, range, spec);
            quantize_with(x, total_bits, scale)
        }
    }
}

/// Convert a quantized tensor back to f32 with the same spec and range.
pub fn dequantize(q: &Tensor, spec: &QuantSpec, range: Option<&DynamicRange>) -> Result<Tensor> {
    spec.validate()?;
    let scale = match spec.method {
        QuantMethod::None => {
            return Err(Error::Config("dequantize called with method none".into()))
        }
        QuantMethod::F16 => {
            let out = (0..q.element_count())
                .map(|i| f16_to_f32(q.get_bits(i).unwrap() as u16))
                .collect();
            return Tensor::from_f32(q.shape().to_vec(), out);
        }
        QuantMethod::FixedPoint { frac_bits, .. } => 2.0f64.powi(-(frac_bits as i32)),
        QuantMethod::LayerwiseRange { total_bits } => {
            let range = range.ok_or_else(|| {
                Error::Config("layerwise dequantization requires a dynamic range".into())
            })?;
            layerwise_scale(total_bits, range, spec)
        }
    };
    let out = (0..q.element_count())
        .map(|i| (q.value_at(i) as f64 * scale) as f32)
        .collect();
    Tensor::from_f32(q.shape().to_vec(), out)
}

/// Per-layer dynamic ranges from a calibration pass, plus weight ranges
/// computed directly from the stored weights.
#[derive(Debug, Clone, Default)]
pub struct Calibration {
    pub input: Option<DynamicRange>,
    pub activations: BTreeMap<String, DynamicRange>,
    pub weights: BTreeMap<String, DynamicRange>,
}

impl Calibration {
    /// CSV rows `path,min,max`; weight entries carry a `.weight` suffix.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("path,min,max\n");
        if let Some(r) = &self.input {
            out.push_str(&format!("input,{},{}\n", r.min_val, r.max_val));
        }
        for (path, r) in &self.activations {
            out.push_str(&format!("{path},{},{}\n", r.min_val, r.max_val));
        }
        for (path, r) in &self.weights {
            out.push_str(&format!("{path}.weight,{},{}\n", r.min_val, r.max_val));
        }
        out
    }
}

fn tensor_range(t: &Tensor) -> DynamicRange {
    let mut min = f32::INFINITY;
    let mut max = f32::NEG_INFINITY;
    for i in 0..t.element_count() {
        let v = t.value_at(i);
        if v < min {
            min = v;
        }
        if v > max {
            max = v;
        }
    }
    DynamicRange { min_val: min, max_val: max }
}

fn widen(a: &mut DynamicRange, b: DynamicRange) {
    if b.min_val < a.min_val {
        a.min_val = b.min_val;
    }
    if b.max_val > a.max_val {
        a.max_val = b.max_val;
    }
}

/// Golden-run min/max of every layer's output over a batch of inputs.
pub fn calibrate(graph: &Graph, inputs: &[Tensor]) -> Result<Calibration> {
    if inputs.is_empty() {
        return Err(Error::Argument("calibration needs a non-empty batch".into()));
    }
    let mut calib = Calibration::default();
    for layer in graph.layers() {
        if let Some(w) = &layer.weight {
            calib.weights.insert(layer.path.clone(), tensor_range(w));
        }
    }
    let acts = std::cell::RefCell::new(BTreeMap::<String, DynamicRange>::new());
    for input in inputs {
        let in_range = tensor_range(input);
        match &mut calib.input {
            Some(r) => widen(r, in_range),
            slot => *slot = Some(in_range),
        }
        let mut hooks: Vec<Hook> = graph
            .layers()
            .iter()
            .map(|l| {
                let path = l.path.clone();
                let acts = &acts;
                Hook::new(HookPoint::new(path.clone(), HookSite::ActivationPost), move |t| {
                    let r = tensor_range(t);
                    let mut map = acts.borrow_mut();
                    match map.get_mut(&path) {
                        Some(cur) => widen(cur, r),
                        None => {
                            map.insert(path.clone(), r);
                        }
                    }
                    Ok(t.clone())
                })
            })
            .collect();
        forward(graph, input, &mut hooks)?;
    }
    calib.activations = acts.into_inner();
    Ok(calib)
}
