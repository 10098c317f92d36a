//! Type-specific attribute encoders.
//!
//! * coordinates: harmonic map `[sinλcosφ, cosλcosφ, sinφ, sin2λcosφ, cos2λcosφ]`
//!   followed by `tanh(W·f + b)`, one projection per coordinate
//! * timestamp: sin/cos at periods of 24, 168, 720 and 8760 hours, then `tanh(W·f + b)`
//! * cyclical: `tanh(W·[sin x, cos x] + b)`
//! * continuous: `x̂ = (x − μ)/σ · α + β_norm`, then `ReLU(W·x̂ + b)`
//! * discrete: `tanh(W·onehot(x) + b)`
//!
//! A cell the model may not read is replaced by a learned per-attribute
//! placeholder vector.

use crate::error::{Error, Result};
use crate::ingest::NormStats;
use crate::numeric::{ParamId, ParamStore, Tensor, Var};
use crate::params::{Bound, ParamBuilder};
use crate::types::{AttributeId, CategoryCounts, RecordSequence, TypeClass, N_ATTR};

pub const HOUR: f64 = 3600.0;
pub const PERIODS: [f64; 4] = [24.0 * HOUR, 168.0 * HOUR, 720.0 * HOUR, 8760.0 * HOUR];

/// Harmonic coordinate features; inputs in degrees.
pub fn coordinate_features(lon: f64, lat: f64) -> [f64; 5] {
    let (l, p) = (lon.to_radians(), lat.to_radians());
    let cp = p.cos();
    [
        l.sin() * cp,
        l.cos() * cp,
        p.sin(),
        (2.0 * l).sin() * cp,
        (2.0 * l).cos() * cp,
    ]
}

/// Interleaved `(sin, cos)` pairs of `2πτ/T` for each period `T`.
///
/// `τ` is reduced modulo each period first, so large epoch values keep their
/// precision.
pub fn time_features(tau: f64) -> [f64; 8] {
    let mut out = [0.0; 8];
    for (k, &period) in PERIODS.iter().enumerate() {
        let phase = 2.0 * std::f64::consts::PI * tau.rem_euclid(period) / period;
        out[2 * k] = phase.sin();
        out[2 * k + 1] = phase.cos();
    }
    out
}

/// `[sin x, cos x]` of an angle in degrees.
pub fn cyclical_basis(deg: f64) -> [f64; 2] {
    let r = deg.to_radians();
    [r.sin(), r.cos()]
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum EncoderKind {
    Coordinate {
        w: ParamId,
        b: ParamId,
    },
    Time {
        w: ParamId,
        b: ParamId,
    },
    Cyclical {
        w: ParamId,
        b: ParamId,
    },
    Continuous {
        alpha: ParamId,
        beta: ParamId,
        w: ParamId,
        b: ParamId,
    },
    Discrete {
        w: ParamId,
        b: ParamId,
        classes: usize,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    pub dim: usize,
    pub kinds: [EncoderKind; N_ATTR],
    pub placeholder: [ParamId; N_ATTR],
}

/// Initial value of the normalization shift `β_norm`; keeps the decoder's
/// ReLU output able to reach values below the mean from the start.
pub const BETA_NORM_INIT: f64 = 3.0;

impl EncoderParams {
    pub fn register(pb: &mut ParamBuilder<'_>, dim: usize, categories: CategoryCounts) -> Self {
        let kinds = AttributeId::ALL.map(|a| {
            let n = format!("enc.{a}");
            match a.type_class() {
                TypeClass::SpatioTemporal if a == AttributeId::Time => EncoderKind::Time {
                    w: pb.xavier(&format!("{n}.w"), dim, 8),
                    b: pb.zeros(&format!("{n}.b"), &[dim]),
                },
                TypeClass::SpatioTemporal => EncoderKind::Coordinate {
                    w: pb.xavier(&format!("{n}.w"), dim, 5),
                    b: pb.zeros(&format!("{n}.b"), &[dim]),
                },
                TypeClass::Cyclical => EncoderKind::Cyclical {
                    w: pb.xavier(&format!("{n}.w"), dim, 2),
                    b: pb.zeros(&format!("{n}.b"), &[dim]),
                },
                TypeClass::Continuous => EncoderKind::Continuous {
                    alpha: pb.full(&format!("{n}.alpha"), &[1], 1.0),
                    beta: pb.full(&format!("{n}.beta_norm"), &[1], BETA_NORM_INIT),
                    w: pb.xavier(&format!("{n}.w"), dim, 1),
                    b: pb.zeros(&format!("{n}.b"), &[dim]),
                },
                TypeClass::Discrete => {
                    let classes = categories.get(a);
                    EncoderKind::Discrete {
                        w: pb.xavier(&format!("{n}.w"), dim, classes),
                        b: pb.zeros(&format!("{n}.b"), &[dim]),
                        classes,
                    }
                }
            }
        });
        let placeholder = AttributeId::ALL.map(|a| pb.normal(&format!("enc.{a}.placeholder"), &[dim], 0.1));
        Self {
            dim,
            kinds,
            placeholder,
        }
    }

    /// `(α, β_norm)` parameter ids of a continuous attribute.
    pub fn affine_of(&self, a: AttributeId) -> Option<(ParamId, ParamId)> {
        match self.kinds[a.index()] {
            EncoderKind::Continuous { alpha, beta, .. } => Some((alpha, beta)),
            _ => None,
        }
    }
}

fn affine_act(store: &ParamStore, w: ParamId, b: ParamId, x: &[f64], act: fn(f64) -> f64) -> Vec<f64> {
    let wv = store.get(w).matvec(x);
    wv.iter().zip(store.get(b).data()).map(|(z, b)| act(z + b)).collect()
}

fn check_finite(what: &str, v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("{what} input")))
    }
}

/// `(e_λ, e_φ)` for one position.
pub fn encode_coordinates(lon: f64, lat: f64, p: &EncoderParams, store: &ParamStore) -> Result<(Vec<f64>, Vec<f64>)> {
    check_finite("coordinate", lon)?;
    check_finite("coordinate", lat)?;
    let f = coordinate_features(lon, lat);
    let enc = |a: AttributeId| match p.kinds[a.index()] {
        EncoderKind::Coordinate { w, b } => affine_act(store, w, b, &f, f64::tanh),
        _ => unreachable!(),
    };
    Ok((enc(AttributeId::Lon), enc(AttributeId::Lat)))
}

pub fn encode_timestamp(tau: f64, p: &EncoderParams, store: &ParamStore) -> Result<Vec<f64>> {
    check_finite("timestamp", tau)?;
    let EncoderKind::Time { w, b } = p.kinds[AttributeId::Time.index()] else {
        unreachable!()
    };
    Ok(affine_act(store, w, b, &time_features(tau), f64::tanh))
}

pub fn encode_cyclical(attr: AttributeId, deg: f64, p: &EncoderParams, store: &ParamStore) -> Result<Vec<f64>> {
    if !(0.0..360.0).contains(&deg) {
        return Err(Error::invalid(format!("{attr} = {deg} outside [0, 360)")));
    }
    let EncoderKind::Cyclical { w, b } = p.kinds[attr.index()] else {
        return Err(Error::invalid(format!("{attr} is not cyclical")));
    };
    Ok(affine_act(store, w, b, &cyclical_basis(deg), f64::tanh))
}

/// Normalized value `x̂ = (x − μ)/σ · α + β_norm`.
pub fn normalize(x: f64, mean: f64, std: f64, alpha: f64, beta: f64) -> f64 {
    (x - mean) / std * alpha + beta
}

pub fn encode_continuous(
    attr: AttributeId,
    x: f64,
    stats: &NormStats,
    p: &EncoderParams,
    store: &ParamStore,
) -> Result<Vec<f64>> {
    check_finite("continuous", x)?;
    let EncoderKind::Continuous { alpha, beta, w, b } = p.kinds[attr.index()] else {
        return Err(Error::invalid(format!("{attr} is not continuous")));
    };
    let z = normalize(
        x,
        stats.mean_of(attr)?,
        stats.std_of(attr)?,
        store.get(alpha).item(),
        store.get(beta).item(),
    );
    Ok(affine_act(store, w, b, &[z], |v| v.max(0.0)))
}

pub fn encode_discrete(attr: AttributeId, x: usize, p: &EncoderParams, store: &ParamStore) -> Result<Vec<f64>> {
    let EncoderKind::Discrete { w, b, classes } = p.kinds[attr.index()] else {
        return Err(Error::invalid(format!("{attr} is not discrete")));
    };
    if x >= classes {
        return Err(Error::invalid(format!("{attr} category {x} out of range 0..{classes}")));
    }
    let mut onehot = vec![0.0; classes];
    onehot[x] = 1.0;
    Ok(affine_act(store, w, b, &onehot, f64::tanh))
}

/// Embedding matrix `E_t` (12 × d, taxonomy order) of one record.
///
/// `row` holds model-visible values (`None` where `M_in = 0`); `base` is the
/// position substituted for a missing half of a coordinate pair.
pub fn encode_record(
    row: &[Option<f64>; N_ATTR],
    base: Option<(f64, f64)>,
    stats: &NormStats,
    p: &EncoderParams,
    store: &ParamStore,
) -> Result<Vec<Vec<f64>>> {
    let (lon, lat) = (row[AttributeId::Lon.index()], row[AttributeId::Lat.index()]);
    let pair = match (lon, lat, base) {
        (Some(l), Some(p), _) => Some((l, p)),
        (Some(l), None, Some((_, bp))) => Some((l, bp)),
        (None, Some(p), Some((bl, _))) => Some((bl, p)),
        _ => None,
    };
    let coords = pair.map(|(l, q)| encode_coordinates(l, q, p, store)).transpose()?;
    AttributeId::ALL
        .iter()
        .map(|&a| {
            let Some(x) = row[a.index()] else {
                return Ok(store.get(p.placeholder[a.index()]).data().to_vec());
            };
            match a.type_class() {
                TypeClass::SpatioTemporal if a == AttributeId::Time => encode_timestamp(x, p, store),
                TypeClass::SpatioTemporal => {
                    let (el, ep) = coords.clone().expect("pair present when a coordinate is visible");
                    Ok(if a == AttributeId::Lon { el } else { ep })
                }
                TypeClass::Cyclical => encode_cyclical(a, x, p, store),
                TypeClass::Continuous => encode_continuous(a, x, stats, p, store),
                TypeClass::Discrete => encode_discrete(a, x as usize, p, store),
            }
        })
        .collect()
}

/// Embeddings of a whole sequence on the tape: one `[T, d]` variable per
/// attribute, in taxonomy order.
pub fn encode_sequence<'t>(
    bound: &Bound<'t, '_>,
    p: &EncoderParams,
    seq: &RecordSequence,
    stats: &NormStats,
    bases: &[(f64, f64)],
) -> Result<Vec<Var<'t>>> {
    let n = seq.len();
    let d = p.dim;
    let (lon_i, lat_i) = (AttributeId::Lon, AttributeId::Lat);
    let mut out = Vec::with_capacity(N_ATTR);
    for a in AttributeId::ALL {
        let vis: Vec<Option<f64>> = (0..n).map(|t| seq.visible_value(t, a)).collect();
        let mask: Vec<f64> = vis.iter().map(|v| if v.is_some() { 1.0 } else { 0.0 }).collect();
        let encoded = match p.kinds[a.index()] {
            EncoderKind::Coordinate { w, b } => {
                let mut feats = Vec::with_capacity(n * 5);
                for t in 0..n {
                    let l = seq.visible_value(t, lon_i).unwrap_or(bases[t].0);
                    let q = seq.visible_value(t, lat_i).unwrap_or(bases[t].1);
                    feats.extend(coordinate_features(l, q));
                }
                affine(bound, Tensor::new(&[n, 5], feats)?, w, b)?.tanh()
            }
            EncoderKind::Time { w, b } => {
                let feats = vis.iter().flat_map(|v| time_features(v.unwrap_or(0.0))).collect();
                affine(bound, Tensor::new(&[n, 8], feats)?, w, b)?.tanh()
            }
            EncoderKind::Cyclical { w, b } => {
                let feats = vis.iter().flat_map(|v| cyclical_basis(v.unwrap_or(0.0))).collect();
                affine(bound, Tensor::new(&[n, 2], feats)?, w, b)?.tanh()
            }
            EncoderKind::Continuous { alpha, beta, w, b } => {
                let (mu, sd) = stats.scale_of(a);
                let z = vis.iter().map(|v| v.map_or(0.0, |x| (x - mu) / sd)).collect();
                let z = bound.constant(Tensor::new(&[n, 1], z)?);
                let xhat = z.mul(bound.get(alpha))?.add(bound.get(beta))?;
                xhat.matmul_t(bound.get(w))?.add(bound.get(b))?.relu()
            }
            EncoderKind::Discrete { w, b, classes } => {
                let mut onehot = vec![0.0; n * classes];
                for (t, v) in vis.iter().enumerate() {
                    if let Some(x) = v {
                        let k = *x as usize;
                        if k >= classes {
                            return Err(Error::invalid(format!("{a} category {k} out of range 0..{classes}")));
                        }
                        onehot[t * classes + k] = 1.0;
                    }
                }
                affine(bound, Tensor::new(&[n, classes], onehot)?, w, b)?.tanh()
            }
        };
        let m = bound.constant(Tensor::new(&[n, 1], mask.clone())?);
        let inv = bound.constant(Tensor::new(&[n, 1], mask.iter().map(|m| 1.0 - m).collect())?);
        let ph = bound.get(p.placeholder[a.index()]).reshape(&[1, d])?;
        out.push(encoded.mul(m)?.add(inv.mul(ph)?)?);
    }
    Ok(out)
}

fn affine<'t>(bound: &Bound<'t, '_>, x: Tensor, w: ParamId, b: ParamId) -> Result<Var<'t>> {
    bound.constant(x).matmul_t(bound.get(w))?.add(bound.get(b))
}
