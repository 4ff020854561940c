//! Fault selectors, error models, and the injector pipeline.
//!
//! A selector chooses fault sites inside a tensor, an error model corrupts
//! the values at those sites, and [`make_injector`] composes
//! quantizer + selector + error model into a hook callback.

pub mod rng;
pub mod select;

use crate::error::{Error, Result};
use crate::quant::{dequantize, quantize, DynamicRange, QuantSpec};
use crate::tensor::Tensor;
use rng::Stream;

pub use select::{select_sites, Mask, SiteContext};

/// How a rate-driven selector draws the number of injected sites.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sampling {
    /// Deterministic count: round(n_bits * ber), half away from zero.
    Rounded,
    /// Poisson-distributed count with mean n_bits * ber.
    Poisson,
    /// Independent coin per bit slot; the O(n_bits) reference oracle.
    PerBitBernoulli,
}

/// One configured fixed injection position.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FixedSite {
    pub path: String,
    pub offset: usize,
    pub bit: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub enum SelectorMode {
    FixedPosition { sites: Vec<FixedSite> },
    FixedCount { count: u64 },
    Rate { ber: f64, sampling: Sampling },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectorSpec {
    pub mode: SelectorMode,
    pub mask: Option<Mask>,
}

impl SelectorSpec {
    pub fn rate(ber: f64, sampling: Sampling) -> Self {
        SelectorSpec { mode: SelectorMode::Rate { ber, sampling }, mask: None }
    }

    pub fn validate(&self) -> Result<()> {
        match &self.mode {
            SelectorMode::Rate { ber, .. } => {
                if !(0.0..=1.0).contains(ber) {
                    return Err(Error::Config(format!("ber must be in [0,1], got {ber}")));
                }
            }
            SelectorMode::FixedCount { .. } | SelectorMode::FixedPosition { .. } => {}
        }
        Ok(())
    }
}

/// How the value at a selected site is corrupted.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ErrorModelSpec {
    /// XOR one bit: the site's bit when the selector provided one,
    /// otherwise a uniformly drawn bit.
    BitFlipRandom,
    /// XOR a specific bit regardless of the site's bit.
    BitFlipFixed { bit: u32 },
    /// Force the element to integer 0 / float +0.0.
    StuckAtZero,
    FixedValue { value: f64 },
    /// Uniform draw in [lo, hi).
    UniformRandom { lo: f64, hi: f64 },
    /// Add N(0, sigma^2); float targets only.
    GaussianPerturb { sigma: f64 },
}

impl ErrorModelSpec {
    /// Bit-level models operate on the word's bit slots; value-level models
    /// treat each element as a single slot.
    pub fn is_bit_level(&self) -> bool {
        matches!(self, ErrorModelSpec::BitFlipRandom | ErrorModelSpec::BitFlipFixed { .. })
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            ErrorModelSpec::GaussianPerturb { sigma } if sigma.is_nan() || *sigma <= 0.0 => {
                Err(Error::Config(format!("gaussian sigma must be positive, got {sigma}")))
            }
            ErrorModelSpec::UniformRandom { lo, hi }
                if lo.is_nan() || hi.is_nan() || lo >= hi =>
            {
                Err(Error::Config(format!(
                    "uniform bounds must satisfy lo < hi, got {lo}, {hi}"
                )))
            }
            _ => Ok(()),
        }
    }
}

/// What a fault site points at.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FaultTarget {
    Weight,
    Activation,
}

/// One selected injection location.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FaultSite {
    pub layer_path: String,
    pub target: FaultTarget,
    pub element_offset: usize,
    /// Set by bit-slot selection; None for value-level selection, in which
    /// case bit-flip models draw a bit themselves.
    pub bit_index: Option<u32>,
}

/// Deterministic expected injection count: round(n_bits * ber), ties away
/// from zero.
pub fn expected_count(n_bits: u64, ber: f64) -> u64 {
    (n_bits as f64 * ber).round() as u64
}

/// Poisson-distributed injection count with mean n_bits * ber.
pub fn poisson_count(n_bits: u64, ber: f64, stream: &mut Stream) -> u64 {
    stream.poisson(n_bits as f64 * ber)
}

/// Corrupt `tensor` at the given sites. Returns the number of elements
/// whose final bit pattern differs from what they held before the call;
/// untouched elements are bit-identical.
pub fn apply_error(
    model: &ErrorModelSpec,
    tensor: &mut Tensor,
    sites: &[FaultSite],
    stream: &mut Stream,
) -> Result<usize> {
    model.validate()?;
    let dtype = tensor.dtype();
    let word_bits = dtype.word_bits();
    if let ErrorModelSpec::BitFlipFixed { bit } = model {
        if *bit >= word_bits {
            return Err(Error::Config(format!(
                "fixed bit {bit} out of range for {}-bit {}",
                word_bits,
                dtype.name()
            )));
        }
    }
    if matches!(model, ErrorModelSpec::GaussianPerturb { .. }) && !dtype.is_float() {
        return Err(Error::Config(format!(
            "gaussian perturbation needs a float target, got {}",
            dtype.name()
        )));
    }

    let mut before: std::collections::HashMap<usize, u32> =
        std::collections::HashMap::with_capacity(sites.len());
    for site in sites {
        let off = site.element_offset;
        if let std::collections::hash_map::Entry::Vacant(slot) = before.entry(off) {
            slot.insert(tensor.get_bits(off)?);
        }
        match model {
            ErrorModelSpec::BitFlipRandom => {
                let bit = match site.bit_index {
                    Some(b) => b,
                    None => stream.below(word_bits as u64) as u32,
                };
                if bit >= word_bits {
                    return Err(Error::Argument(format!(
                        "site bit {bit} out of range for {}-bit word",
                        word_bits
                    )));
                }
                let bits = tensor.get_bits(off)?;
                tensor.set_bits(off, bits ^ (1 << bit))?;
            }
            ErrorModelSpec::BitFlipFixed { bit } => {
                let bits = tensor.get_bits(off)?;
                tensor.set_bits(off, bits ^ (1 << bit))?;
            }
            ErrorModelSpec::StuckAtZero => tensor.set_bits(off, 0)?,
            ErrorModelSpec::FixedValue { value } => tensor.set_value(off, *value as f32),
            ErrorModelSpec::UniformRandom { lo, hi } => {
                let v = lo + stream.next_f64() * (hi - lo);
                tensor.set_value(off, v as f32);
            }
            ErrorModelSpec::GaussianPerturb { sigma } => {
                let cur = tensor.value_at(off);
                tensor.set_value(off, cur + (stream.gaussian() * sigma) as f32);
            }
        }
    }
    let mut changed = 0usize;
    for (&off, &orig) in &before {
        if tensor.get_bits(off)? != orig {
            changed += 1;
        }
    }
    Ok(changed)
}

/// Build the injection pipeline for one (layer, target) as a hook callback:
/// select sites, then (optionally) quantize, corrupt, and dequantize.
///
/// The quantizer wraps the fault, not the forward pass: only elements with
/// a selected site take the quantize -> corrupt -> dequantize value, so
/// everything else stays bit-identical to the input and a zero-site
/// selection passes the tensor through unchanged.
pub fn make_injector(
    quant: QuantSpec,
    range: Option<DynamicRange>,
    selector: SelectorSpec,
    model: ErrorModelSpec,
    path: String,
    target: FaultTarget,
    mut stream: Stream,
) -> impl FnMut(&Tensor) -> Result<Tensor> {
    move |input: &Tensor| {
        let inject_dtype = quant.storage_dtype().unwrap_or(input.dtype());
        let word_bits = if model.is_bit_level() { inject_dtype.word_bits() } else { 1 };
        let ctx = SiteContext { path: &path, target };
        let sites = select_sites(&selector, &ctx, input.shape(), word_bits, &mut stream)?;
        if sites.is_empty() {
            return Ok(input.clone());
        }
        if quant.storage_dtype().is_none() {
            let mut work = input.clone();
            apply_error(&model, &mut work, &sites, &mut stream)?;
            Ok(work)
        } else {
            let mut work = quantize(input, &quant, range.as_ref())?;
            apply_error(&model, &mut work, &sites, &mut stream)?;
            let deq = dequantize(&work, &quant, range.as_ref())?;
            let mut out = input.clone();
            let out_data = out.as_f32_mut()?;
            let deq_data = deq.as_f32()?;
            let mut seen = std::collections::HashSet::new();
            for site in &sites {
                if seen.insert(site.element_offset) {
                    out_data[site.element_offset] = deq_data[site.element_offset];
                }
            }
            Ok(out)
        }
    }
}
