//! Fault-site selection over a tensor's bit-slot space.
//!
//! The slot space is element_count x word_bits; a mask restricts the
//! candidate elements before any sampling happens. Returned sites are
//! sorted by slot id so downstream use is order-deterministic.

use std::collections::BTreeSet;

use crate::error::{Error, Result};

use super::rng::Stream;
use super::{expected_count, FaultSite, FaultTarget, Sampling, SelectorMode, SelectorSpec};

/// Candidate-element filter applied before sampling.
#[derive(Debug, Clone, PartialEq)]
pub enum Mask {
    /// Elements whose leading coordinate equals the channel index.
    Channel(usize),
    /// Elements at spatial position (h, w) of a CHW tensor, any channel.
    Pixel(usize, usize),
    /// Explicit per-element allow list (length = element count).
    Elements(Vec<bool>),
}

/// The (layer, target) the produced sites belong to.
#[derive(Debug, Clone, Copy)]
pub struct SiteContext<'a> {
    pub path: &'a str,
    pub target: FaultTarget,
}

/// Candidate elements after masking: either the full range or an indexable
/// subset, kept implicit so large unmasked tensors stay O(1).
enum Candidates {
    All(usize),
    Range { start: usize, len: usize },
    Strided { start: usize, stride: usize, count: usize },
    List(Vec<usize>),
}

impl Candidates {
    fn count(&self) -> usize {
        match self {
            Candidates::All(n) => *n,
            Candidates::Range { len, .. } => *len,
            Candidates::Strided { count, .. } => *count,
            Candidates::List(v) => v.len(),
        }
    }

    fn element(&self, idx: usize) -> usize {
        match self {
            Candidates::All(_) => idx,
            Candidates::Range { start, .. } => start + idx,
            Candidates::Strided { start, stride, .. } => start + idx * stride,
            Candidates::List(v) => v[idx],
        }
    }

    fn allows(&self, offset: usize) -> bool {
        match self {
            Candidates::All(n) => offset < *n,
            Candidates::Range { start, len } => (*start..start + len).contains(&offset),
            Candidates::Strided { start, stride, count } => {
                offset >= *start
                    && (offset - start).is_multiple_of(*stride)
                    && (offset - start) / stride < *count
            }
            Candidates::List(v) => v.binary_search(&offset).is_ok(),
        }
    }
}

fn build_candidates(mask: Option<&Mask>, shape: &[usize]) -> Result<Candidates> {
    let element_count: usize = shape.iter().product();
    let Some(mask) = mask else {
        return Ok(Candidates::All(element_count));
    };
    match mask {
        Mask::Channel(c) => {
            let channels = shape[0];
            if *c >= channels {
                return Err(Error::Config(format!(
                    "channel {c} out of range for shape {shape:?}"
                )));
            }
            let per = element_count / channels;
            Ok(Candidates::Range { start: c * per, len: per })
        }
        Mask::Pixel(h, w) => {
            let [channels, height, width] = match shape {
                [c, h, w] => [*c, *h, *w],
                _ => {
                    return Err(Error::Config(format!(
                        "pixel mask needs a CHW tensor, got shape {shape:?}"
                    )))
                }
            };
            if *h >= height || *w >= width {
                return Err(Error::Config(format!(
                    "pixel ({h},{w}) out of range for shape {shape:?}"
                )));
            }
            Ok(Candidates::Strided {
                start: h * width + w,
                stride: height * width,
                count: channels,
            })
        }
        Mask::Elements(allow) => {
            if allow.len() != element_count {
                return Err(Error::Config(format!(
                    "element mask length {} does not match element count {element_count}",
                    allow.len()
                )));
            }
            Ok(Candidates::List(
                allow
                    .iter()
                    .enumerate()
                    .filter_map(|(i, &a)| a.then_some(i))
                    .collect(),
            ))
        }
    }
}

/// Uniform distinct sample of `k` values from [0, n) (Floyd's algorithm),
/// returned in ascending order.
fn sample_distinct(n: u64, k: u64, stream: &mut Stream) -> BTreeSet<u64> {
    let mut chosen = BTreeSet::new();
    for j in (n - k)..n {
        let t = stream.below(j + 1);
        if !chosen.insert(t) {
            chosen.insert(j);
        }
    }
    chosen
}

/// Choose fault sites for one tensor.
///
/// Slot space is candidate_elements x word_bits; pass word_bits = 1 for
/// value-level error models. Sites come back sorted by slot id, and never
/// violate the mask.
pub fn select_sites(
    spec: &SelectorSpec,
    ctx: &SiteContext<'_>,
    shape: &[usize],
    word_bits: u32,
    stream: &mut Stream,
) -> Result<Vec<FaultSite>> {
    spec.validate()?;
    let candidates = build_candidates(spec.mask.as_ref(), shape)?;
    let element_count: usize = shape.iter().product();
    let wb = word_bits.max(1) as u64;
    let space = candidates.count() as u64 * wb;

    let make_site = |slot: u64| -> FaultSite {
        let element = candidates.element((slot / wb) as usize);
        let bit = (slot % wb) as u32;
        FaultSite {
            layer_path: ctx.path.to_string(),
            target: ctx.target,
            element_offset: element,
            bit_index: (word_bits > 1).then_some(bit),
        }
    };

    match &spec.mode {
        SelectorMode::FixedPosition { sites } => {
            let mut out = Vec::new();
            for s in sites {
                if s.path != ctx.path {
                    continue;
                }
                if s.offset >= element_count {
                    return Err(Error::Config(format!(
                        "fixed position offset {} out of range for shape {shape:?}",
                        s.offset
                    )));
                }
                if s.bit >= word_bits {
                    return Err(Error::Config(format!(
                        "fixed position bit {} out of range for {word_bits}-bit slots",
                        s.bit
                    )));
                }
                if !candidates.allows(s.offset) {
                    continue;
                }
                out.push(FaultSite {
                    layer_path: ctx.path.to_string(),
                    target: ctx.target,
                    element_offset: s.offset,
                    bit_index: (word_bits > 1).then_some(s.bit),
                });
            }
            Ok(out)
        }
        SelectorMode::FixedCount { count } => {
            if *count > space {
                return Err(Error::Config(format!(
                    "fixed count {count} exceeds site space {space}"
                )));
            }
            Ok(sample_distinct(space, *count, stream)
                .into_iter()
                .map(make_site)
                .collect())
        }
        SelectorMode::Rate { ber, sampling } => {
            if space == 0 || *ber == 0.0 {
                return Ok(Vec::new());
            }
            match sampling {
                Sampling::Rounded => {
                    let k = expected_count(space, *ber).min(space);
                    Ok(sample_distinct(space, k, stream)
                        .into_iter()
                        .map(make_site)
                        .collect())
                }
                Sampling::Poisson => {
                    let k = stream.poisson(space as f64 * ber);
                    // with replacement, deduplicated by slot
                    let mut slots = BTreeSet::new();
                    for _ in 0..k {
                        slots.insert(stream.below(space));
                    }
                    Ok(slots.into_iter().map(make_site).collect())
                }
                Sampling::PerBitBernoulli => {
                    let mut out = Vec::new();
                    for slot in 0..space {
                        if stream.next_f64() < *ber {
                            out.push(make_site(slot));
                        }
                    }
                    Ok(out)
                }
            }
        }
    }
}
