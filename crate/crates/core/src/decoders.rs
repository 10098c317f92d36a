//! Gated multi-scale fusion and type-specific decoders.

use crate::error::{Error, Result};
use crate::geo::{wrap_degrees, wrap_longitude};
use crate::ingest::NormStats;
use crate::numeric::{ParamId, ParamStore, RngStream, Tape, Tensor, Var};
use crate::params::{Bound, ParamBuilder};
use crate::types::{AttributeId, CategoryCounts, TypeClass, N_ATTR, N_SCALES};

use crate::encoders::{EncoderParams, BETA_NORM_INIT};

#[derive(Clone, Debug, PartialEq)]
pub struct FusionParams {
    pub dim: usize,
    /// Gate weights `[5, 15d]` and bias `[5]` per attribute.
    pub gate: [(ParamId, ParamId); N_ATTR],
    /// Per-scale projection `W_e^l`, `[d, 3d]`.
    pub project: [ParamId; N_SCALES],
}

impl FusionParams {
    pub fn register(pb: &mut ParamBuilder<'_>, dim: usize) -> Self {
        let gate = AttributeId::ALL.map(|a| {
            (
                pb.xavier(&format!("fuse.{a}.wg"), N_SCALES, 5 * 3 * dim),
                pb.zeros(&format!("fuse.{a}.bg"), &[N_SCALES]),
            )
        });
        let project = std::array::from_fn(|l| pb.xavier(&format!("fuse.s{}.we", l + 1), dim, 3 * dim));
        Self { dim, gate, project }
    }
}

/// `ẽ = Σ_{l≥k} g_l ⊙ (W_e^l h*^l)` with `g = σ(W_g[h*¹;…;h*⁵] + b_g)`.
///
/// `h_star[j]` is the `[T, 3d]` representation at scale `k + j`; lower
/// scales enter the gate as zero blocks.
pub fn fuse<'t>(bound: &Bound<'t, '_>, p: &FusionParams, attr: AttributeId, h_star: &[Var<'t>]) -> Result<Var<'t>> {
    let k = attr.time_scale();
    if h_star.len() != N_SCALES + 1 - k {
        return Err(Error::invalid(format!(
            "{attr}: {} scale representations, expected {}",
            h_star.len(),
            N_SCALES + 1 - k
        )));
    }
    let steps = h_star[0].shape()[0];
    let mut blocks = Vec::with_capacity(N_SCALES);
    for _ in 1..k {
        blocks.push(bound.constant(Tensor::zeros(&[steps, 3 * p.dim])));
    }
    blocks.extend(h_star.iter().copied());
    let (wg, bg) = p.gate[attr.index()];
    let g = Var::concat(&blocks, 1)?
        .matmul_t(bound.get(wg))?
        .add(bound.get(bg))?
        .sigmoid();
    let mut out: Option<Var<'t>> = None;
    for (j, h) in h_star.iter().enumerate() {
        let l = k + j;
        let term = g.slice(1, l - 1, 1)?.mul(h.matmul_t(bound.get(p.project[l - 1]))?)?;
        out = Some(match out {
            None => term,
            Some(acc) => acc.add(term)?,
        });
    }
    Ok(out.expect("at least one scale"))
}

/// Value-level fusion of a single step; `h_star[l]` is `None` below the
/// attribute's scale.
pub fn gated_fusion(
    attr: AttributeId,
    h_star: &[Option<Vec<f64>>; N_SCALES],
    p: &FusionParams,
    store: &ParamStore,
) -> Result<Vec<f64>> {
    let tape = Tape::new();
    let bound = Bound::new(&tape, store);
    let k = attr.time_scale();
    let mut parts = Vec::new();
    for (l, h) in h_star.iter().enumerate() {
        match (l + 1 >= k, h) {
            (true, Some(h)) => parts.push(tape.constant(Tensor::new(&[1, 3 * p.dim], h.clone())?)),
            (true, None) => {
                return Err(Error::invalid(format!(
                    "{attr}: missing scale-{} representation",
                    l + 1
                )))
            }
            (false, _) => {}
        }
    }
    let out = fuse(&bound, p, attr, &parts)?;
    let v = out.value().data().to_vec();
    Ok(v)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Mlp2 {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderParams {
    pub dim: usize,
    pub window: usize,
    pub w_lon: ParamId,
    pub b_lon: ParamId,
    pub w_lat: ParamId,
    pub b_lat: ParamId,
    pub gamma_lon: ParamId,
    pub gamma_lat: ParamId,
    pub time: Mlp2,
    pub eta0_raw: ParamId,
    /// Heading and course.
    pub cyclical: [Mlp2; 2],
    /// `(W_n, b_n)` of speed, draught, length and width.
    pub continuous: [(ParamId, ParamId); 4],
    /// `(W_d, b_d)` of navigation status, cargo and vessel type.
    pub discrete: [(ParamId, ParamId); 3],
}

/// `x` with `softplus(x) = y`.
pub fn softplus_inverse(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

/// Slot of an attribute within its type group.
pub fn group_slot(attr: AttributeId) -> usize {
    AttributeId::ALL[..attr.index()]
        .iter()
        .filter(|a| a.type_class() == attr.type_class())
        .count()
}

impl DecoderParams {
    pub fn register(
        pb: &mut ParamBuilder<'_>,
        dim: usize,
        window: usize,
        categories: CategoryCounts,
        stats: &NormStats,
    ) -> Self {
        let step = |a: AttributeId| 2.0 * stats.delta_std[a.index()].unwrap_or(1e-3);
        let mean_interval = stats.mean_interval.filter(|m| *m > 0.0).unwrap_or(60.0);
        let eta0 = 1.0 / mean_interval;
        let mlp2 = |pb: &mut ParamBuilder<'_>, name: &str, out: usize, b2: f64| Mlp2 {
            w1: pb.xavier(&format!("{name}.w1"), dim, dim),
            b1: pb.zeros(&format!("{name}.b1"), &[dim]),
            w2: pb.xavier(&format!("{name}.w2"), out, dim),
            b2: pb.full(&format!("{name}.b2"), &[out], b2),
        };
        Self {
            dim,
            window,
            w_lon: pb.xavier("dec.coord.w_lon", 1, 2 * dim),
            b_lon: pb.zeros("dec.coord.b_lon", &[1]),
            w_lat: pb.xavier("dec.coord.w_lat", 1, 2 * dim),
            b_lat: pb.zeros("dec.coord.b_lat", &[1]),
            gamma_lon: pb.full("dec.coord.gamma_lon", &[1], step(AttributeId::Lon)),
            gamma_lat: pb.full("dec.coord.gamma_lat", &[1], step(AttributeId::Lat)),
            time: mlp2(pb, "dec.time", dim, softplus_inverse(0.01 * eta0)),
            eta0_raw: pb.full("dec.time.eta0_raw", &[1], softplus_inverse(eta0)),
            cyclical: [AttributeId::Heading, AttributeId::Course].map(|a| mlp2(pb, &format!("dec.{a}"), 2, 0.0)),
            continuous: [
                AttributeId::Speed,
                AttributeId::Draught,
                AttributeId::Length,
                AttributeId::Width,
            ]
            .map(|a| {
                (
                    pb.xavier(&format!("dec.{a}.w"), 1, dim),
                    pb.full(&format!("dec.{a}.b"), &[1], BETA_NORM_INIT),
                )
            }),
            discrete: [AttributeId::NavStatus, AttributeId::Cargo, AttributeId::VesselType].map(|a| {
                let c = categories.get(a);
                (
                    pb.xavier(&format!("dec.{a}.w"), c, dim),
                    pb.zeros(&format!("dec.{a}.b"), &[c]),
                )
            }),
        }
    }
}

/// Raw coordinate predictions `base + δ` (`[T, 1]` each, before wrap/clamp).
pub fn coordinates_tape<'t>(
    bound: &Bound<'t, '_>,
    p: &DecoderParams,
    e_lon: Var<'t>,
    e_lat: Var<'t>,
    bases: &[(f64, f64)],
) -> Result<(Var<'t>, Var<'t>)> {
    let steps = bases.len();
    let joint = Var::concat(&[e_lon, e_lat], 1)?;
    let delta = |w, b, g| -> Result<Var<'t>> {
        joint
            .matmul_t(bound.get(w))?
            .add(bound.get(b))?
            .tanh()
            .mul(bound.get(g))
    };
    let dl = delta(p.w_lon, p.b_lon, p.gamma_lon)?;
    let dp = delta(p.w_lat, p.b_lat, p.gamma_lat)?;
    let bl = bound.constant(Tensor::new(&[steps, 1], bases.iter().map(|b| b.0).collect())?);
    let bp = bound.constant(Tensor::new(&[steps, 1], bases.iter().map(|b| b.1).collect())?);
    Ok((bl.add(dl)?, bp.add(dp)?))
}

/// Wraps λ into `[-180, 180)` and clamps φ to `[-90, 90]`.
pub fn finish_coordinates(lon: f64, lat: f64) -> (f64, f64) {
    (wrap_longitude(lon), lat.clamp(-90.0, 90.0))
}

/// Intensity `η = η₀ + mean(Softplus(W₂·SiLU(W₁ẽ + b₁) + b₂))`, `[T, 1]`.
pub fn intensity_tape<'t>(bound: &Bound<'t, '_>, p: &DecoderParams, e: Var<'t>) -> Result<Var<'t>> {
    let m = p.time;
    let h = e.matmul_t(bound.get(m.w1))?.add(bound.get(m.b1))?.silu();
    let f = h.matmul_t(bound.get(m.w2))?.add(bound.get(m.b2))?.softplus();
    let d = f.shape()[1];
    let f = f.sum_axis(1)?.scale(1.0 / d as f64).reshape(&[e.shape()[0], 1])?;
    f.add(bound.get(p.eta0_raw).softplus())
}

/// Unit direction `[T, 2]` of a cyclical attribute.
pub fn cyclical_tape<'t>(bound: &Bound<'t, '_>, p: &DecoderParams, attr: AttributeId, e: Var<'t>) -> Result<Var<'t>> {
    let m = p.cyclical[group_slot(attr)];
    let h = e.matmul_t(bound.get(m.w1))?.add(bound.get(m.b1))?.tanh();
    Ok(h.matmul_t(bound.get(m.w2))?.add(bound.get(m.b2))?.l2_normalize(1e-12))
}

/// Continuous prediction in original units, `[T, 1]`.
pub fn continuous_tape<'t>(
    bound: &Bound<'t, '_>,
    p: &DecoderParams,
    enc: &EncoderParams,
    stats: &NormStats,
    attr: AttributeId,
    e: Var<'t>,
) -> Result<Var<'t>> {
    let (w, b) = p.continuous[group_slot(attr)];
    let (alpha, beta) = enc
        .affine_of(attr)
        .ok_or_else(|| Error::invalid(format!("{attr} is not continuous")))?;
    let (mu, sd) = stats.scale_of(attr);
    let h = e.matmul_t(bound.get(w))?.add(bound.get(b))?.relu();
    Ok(h.sub(bound.get(beta))?.div(bound.get(alpha))?.affine(sd, mu))
}

/// Class probabilities `[T, C]`.
pub fn discrete_tape<'t>(bound: &Bound<'t, '_>, p: &DecoderParams, attr: AttributeId, e: Var<'t>) -> Result<Var<'t>> {
    let (w, b) = p.discrete[group_slot(attr)];
    Ok(e.matmul_t(bound.get(w))?.add(bound.get(b))?.softmax())
}

/// Angle in `[0, 360)` of a direction `(sin, cos)`.
pub fn angle_of(h: [f64; 2]) -> Result<f64> {
    let norm = h[0].hypot(h[1]);
    if !(norm >= 1e-12) {
        return Err(Error::invalid("degenerate direction"));
    }
    Ok(wrap_degrees(h[0].atan2(h[1]).to_degrees()))
}

/// Index of the largest entry, lowest index on ties.
pub fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in p.iter().enumerate() {
        if v > p[best] {
            best = i;
        }
    }
    best
}

/// How the timestamp decoder picks `u` in `−log(u)/η`.
pub enum TimeMode<'a> {
    /// `u = e^{-1}`, so the interval is `1/η`.
    Expected,
    Sample(&'a mut RngStream),
}

/// Interval `−log(u)/η`.
pub fn interval(eta: f64, mode: &mut TimeMode<'_>) -> Result<f64> {
    if !(eta > 0.0 && eta.is_finite()) {
        return Err(Error::NonFinite(format!("timestamp intensity {eta}")));
    }
    Ok(match mode {
        TimeMode::Expected => 1.0 / eta,
        TimeMode::Sample(rng) => -rng.uniform_open().ln() / eta,
    })
}

fn row<'t>(tape: &'t Tape, e: &[f64]) -> Result<Var<'t>> {
    Ok(tape.constant(Tensor::new(&[1, e.len()], e.to_vec())?))
}

/// Coordinates for step `i`: window base (from `bases`) plus learned step.
pub fn decode_coordinates(
    base: (f64, f64),
    e_lon: &[f64],
    e_lat: &[f64],
    p: &DecoderParams,
    store: &ParamStore,
) -> Result<(f64, f64)> {
    let tape = Tape::new();
    let bound = Bound::new(&tape, store);
    let (l, q) = coordinates_tape(&bound, p, row(&tape, e_lon)?, row(&tape, e_lat)?, &[base])?;
    Ok(finish_coordinates(l.item(), q.item()))
}

/// `τ̂ = τ_prev − log(u)/η(ẽ)`.
pub fn decode_timestamp(
    prev: f64,
    e: &[f64],
    p: &DecoderParams,
    store: &ParamStore,
    mode: &mut TimeMode<'_>,
) -> Result<f64> {
    let tape = Tape::new();
    let bound = Bound::new(&tape, store);
    let eta = intensity_tape(&bound, p, row(&tape, e)?)?.item();
    Ok(prev + interval(eta, mode)?)
}

pub fn decode_cyclical(attr: AttributeId, e: &[f64], p: &DecoderParams, store: &ParamStore) -> Result<f64> {
    if !attr.is_cyclical() {
        return Err(Error::invalid(format!("{attr} is not cyclical")));
    }
    let tape = Tape::new();
    let bound = Bound::new(&tape, store);
    let m = p.cyclical[group_slot(attr)];
    let h = row(&tape, e)?
        .matmul_t(bound.get(m.w1))?
        .add(bound.get(m.b1))?
        .tanh()
        .matmul_t(bound.get(m.w2))?
        .add(bound.get(m.b2))?;
    let v = h.value();
    angle_of([v.data()[0], v.data()[1]])
}

pub fn decode_continuous(
    attr: AttributeId,
    e: &[f64],
    stats: &NormStats,
    enc: &EncoderParams,
    p: &DecoderParams,
    store: &ParamStore,
) -> Result<f64> {
    let tape = Tape::new();
    let bound = Bound::new(&tape, store);
    Ok(continuous_tape(&bound, p, enc, stats, attr, row(&tape, e)?)?.item())
}

/// Probabilities and predicted category.
pub fn decode_discrete(
    attr: AttributeId,
    e: &[f64],
    p: &DecoderParams,
    store: &ParamStore,
) -> Result<(Vec<f64>, usize)> {
    if attr.type_class() != TypeClass::Discrete {
        return Err(Error::invalid(format!("{attr} is not discrete")));
    }
    let tape = Tape::new();
    let bound = Bound::new(&tape, store);
    let probs = discrete_tape(&bound, p, attr, row(&tape, e)?)?.value().data().to_vec();
    let k = argmax(&probs);
    Ok((probs, k))
}
