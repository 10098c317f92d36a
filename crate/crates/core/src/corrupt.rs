//! Scale-aware target masking and γ-controlled input noise.
//!
//! Every random decision draws from its own [`RngStream`] keyed by the run
//! seed, the sequence (vessel id and ordinal), the attribute and a purpose
//! tag, so results do not depend on the order in which sequences or
//! attributes are processed.

use crate::config::CorruptConfig;
use crate::error::{Error, Result};
use crate::geo::{wrap_degrees, wrap_longitude};
use crate::ingest::{Dataset, NormStats};
use crate::numeric::{hash_bytes, stream_id, RngStream};
use crate::types::{attributes_at_scale, segment_voyages, AttributeId, CategoryCounts, RecordSequence, Row};

const POINT: u64 = 0x0070_6f69_6e74;
const BLOCK: u64 = 0x0062_6c6f_636b;
const ENTIRE: u64 = 0x656e_7469_7265;
const NOISE: u64 = 0x006e_6f69_7365;

fn seq_stream(seed: u64, seq: &RecordSequence, ordinal: usize, attr: AttributeId, purpose: u64) -> RngStream {
    let id = stream_id(&[
        hash_bytes(seq.vessel_id.as_bytes()),
        ordinal as u64,
        attr.index() as u64,
        purpose,
    ]);
    RngStream::new(seed, id)
}

fn check_ratio(r: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&r) {
        return Err(Error::invalid(format!("mask ratio {r} outside [0, 1]")));
    }
    Ok(())
}

/// Independently targets each observed scale-1/2 cell with probability `r`.
pub fn point_mask(seq: &mut RecordSequence, ordinal: usize, r: f64, seed: u64) -> Result<()> {
    check_ratio(r)?;
    for attr in attributes_at_scale(1).chain(attributes_at_scale(2)) {
        let mut rng = seq_stream(seed, seq, ordinal, attr, POINT);
        for t in 0..seq.len() {
            // draw for every row so the pattern does not shift with M
            let hit = rng.bernoulli(r);
            if hit && seq.observed(t, attr) {
                seq.targets[t][attr.index()] = true;
            }
        }
    }
    Ok(())
}

/// For each scale-3/4 attribute and voyage segment, targets all observed cells
/// of the segment with probability `r`.
pub fn block_mask(seq: &mut RecordSequence, ordinal: usize, r: f64, seed: u64) -> Result<()> {
    check_ratio(r)?;
    let segments = segment_voyages(seq).segments;
    for attr in attributes_at_scale(3).chain(attributes_at_scale(4)) {
        let mut rng = seq_stream(seed, seq, ordinal, attr, BLOCK);
        for seg in &segments {
            if rng.bernoulli(r) {
                for t in seg.clone() {
                    if seq.observed(t, attr) {
                        seq.targets[t][attr.index()] = true;
                    }
                }
            }
        }
    }
    Ok(())
}

/// Per vessel and scale-5 attribute, targets the whole observed column with
/// probability `r`. All sequences of one vessel share the decision.
pub fn entire_mask(seqs: &mut [RecordSequence], r: f64, seed: u64) -> Result<()> {
    check_ratio(r)?;
    for seq in seqs.iter_mut() {
        for attr in attributes_at_scale(5) {
            let id = stream_id(&[hash_bytes(seq.vessel_id.as_bytes()), attr.index() as u64, ENTIRE]);
            if RngStream::new(seed, id).bernoulli(r) {
                for t in 0..seq.len() {
                    if seq.observed(t, attr) {
                        seq.targets[t][attr.index()] = true;
                    }
                }
            }
        }
    }
    Ok(())
}

/// Applies the enabled masking strategies to every sequence.
pub fn apply_masks(data: &mut Dataset, cfg: &CorruptConfig, seed: u64) -> Result<()> {
    let r = cfg.mask_ratio;
    for (i, seq) in data.sequences.iter_mut().enumerate() {
        if cfg.point {
            point_mask(seq, i, r, seed)?;
        }
        if cfg.block {
            block_mask(seq, i, r, seed)?;
        }
    }
    if cfg.entire {
        entire_mask(&mut data.sequences, r, seed)?;
    }
    Ok(())
}

/// Returns the model-visible grid after noise injection.
///
/// Only visible cells (observed, not targets) are perturbed; all other cells
/// are copied from the ground truth. Timestamps are perturbed through their
/// intervals, each clamped at zero and re-accumulated from the first visible
/// timestamp, so they never decrease.
pub fn inject_noise(
    seq: &RecordSequence,
    ordinal: usize,
    stats: &NormStats,
    gamma: f64,
    categories: CategoryCounts,
    seed: u64,
) -> Result<Vec<Row>> {
    if !(gamma >= 0.0) {
        return Err(Error::invalid(format!("noise intensity {gamma} must be ≥ 0")));
    }
    let mut out = seq.values.clone();
    if gamma == 0.0 {
        return Ok(out);
    }
    for attr in AttributeId::ALL {
        let mut rng = seq_stream(seed, seq, ordinal, attr, NOISE);
        let i = attr.index();
        if attr == AttributeId::Time {
            let sd = gamma * stats.delta_std_of(attr)?;
            let mut prev_true: Option<f64> = None;
            let mut prev_noisy = 0.0;
            for t in 0..seq.len() {
                if !seq.visible(t, attr) {
                    continue;
                }
                let x = seq.values[t][i].unwrap();
                let noisy = match prev_true {
                    None => x,
                    Some(p) => prev_noisy + (x - p + sd * rng.normal()).max(0.0),
                };
                out[t][i] = Some(noisy);
                prev_true = Some(x);
                prev_noisy = noisy;
            }
            continue;
        }
        for t in 0..seq.len() {
            if !seq.visible(t, attr) {
                continue;
            }
            let x = seq.values[t][i].unwrap();
            let y = match attr {
                AttributeId::Lon => wrap_longitude(x + gamma * stats.delta_std_of(attr)? * rng.normal()),
                AttributeId::Lat => (x + gamma * stats.delta_std_of(attr)? * rng.normal()).clamp(-90.0, 90.0),
                a if a.is_cyclical() => wrap_degrees(x + gamma * stats.delta_std_of(a)? * rng.normal()),
                a if a.is_continuous() => x + gamma * x * rng.normal(),
                a => {
                    let c = categories.get(a) as u64;
                    if c >= 2 && rng.bernoulli(gamma) {
                        let k = rng.below(c - 1);
                        let orig = x as u64;
                        (if k >= orig { k + 1 } else { k }) as f64
                    } else {
                        x
                    }
                }
            };
            out[t][i] = Some(y);
        }
    }
    Ok(out)
}

/// Masks, then (for γ > 0) injects noise into every sequence.
pub fn corrupt_dataset(
    data: &mut Dataset,
    cfg: &CorruptConfig,
    stats: &NormStats,
    categories: CategoryCounts,
    seed: u64,
) -> Result<()> {
    apply_masks(data, cfg, seed)?;
    for (i, seq) in data.sequences.iter_mut().enumerate() {
        seq.noisy_inputs = if cfg.noise > 0.0 {
            Some(inject_noise(seq, i, stats, cfg.noise, categories, seed)?)
        } else {
            None
        };
    }
    Ok(())
}
