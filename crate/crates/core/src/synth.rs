//! Scripted synthetic fleets for experiments and tests.
//!
//! Every vessel sails a loaded leg, waits at anchor, lies moored, then sails
//! a ballast leg. Vessel type fixes the hull dimensions, cruise speed and
//! loaded draught, and its hull class (a contiguous band of types) fixes the
//! cargo carried when loaded. Cargo and draught change at departure from port, which
//! gives two voyage segments per sequence. Reporting intervals are longer at
//! anchor or moored.

use crate::geo::{wrap_degrees, wrap_longitude};
use crate::numeric::{hash_bytes, stream_id, RngStream};
use crate::types::{AttributeId, CategoryCounts, RecordSequence, Row, N_ATTR};

pub const UNDER_WAY: f64 = 0.0;
pub const AT_ANCHOR: f64 = 1.0;
pub const MOORED: f64 = 5.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FleetSpec {
    pub vessels: usize,
    pub steps: usize,
    pub categories: CategoryCounts,
    pub seed: u64,
}

impl Default for FleetSpec {
    fn default() -> Self {
        Self {
            vessels: 30,
            steps: 120,
            categories: CategoryCounts {
                vessel_type: 15,
                ..CategoryCounts::default()
            },
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Phase {
    Loaded,
    Anchor,
    Moored,
    Ballast,
}

fn phase_at(t: usize, n: usize) -> Phase {
    let (a, b, c) = (n * 2 / 5, n / 2, n * 3 / 5);
    match t {
        _ if t < a => Phase::Loaded,
        _ if t < b => Phase::Anchor,
        _ if t < c => Phase::Moored,
        _ => Phase::Ballast,
    }
}

/// One sequence per vessel, ids `2190000xx`.
pub fn synthetic_fleet(spec: &FleetSpec) -> Vec<RecordSequence> {
    (0..spec.vessels).map(|v| vessel(spec, v)).collect()
}

fn vessel(spec: &FleetSpec, v: usize) -> RecordSequence {
    let mut rng = RngStream::new(spec.seed, stream_id(&[hash_bytes(b"fleet"), v as u64]));
    let n = spec.steps;
    let types = spec.categories.vessel_type.max(1);
    let kappa = rng.below(types as u64) as usize;
    let frac = kappa as f64 / types as f64;
    let length = 60.0 + 240.0 * frac + rng.normal() * 2.0;
    let width = length / 6.5 + rng.normal() * 0.4;
    let loaded_draught = ((3.0 + 12.0 * frac + rng.normal() * 0.3) * 10.0).round() / 10.0;
    let ballast_draught = (loaded_draught * 0.6 * 10.0).round() / 10.0;
    let cruise = 10.0 + 8.0 * frac + rng.normal();
    let cargo_classes = spec.categories.cargo.max(2) as u64;
    let cargo = 1 + (kappa as u64 * (cargo_classes - 1)) / types as u64;
    let mut lon = rng.uniform_range(-10.0, 20.0);
    let mut lat = rng.uniform_range(40.0, 60.0);
    let mut heading = rng.uniform_range(0.0, 360.0);
    let mut turn = 0.0;
    let mut speed = cruise;
    let mut tau = 1.7e9 + rng.uniform_range(0.0, 86_400.0);
    let drift = rng.uniform_range(-3.0, 3.0);
    let mut values: Vec<Row> = Vec::with_capacity(n);
    for t in 0..n {
        let phase = phase_at(t, n);
        let interval = match phase {
            Phase::Loaded | Phase::Ballast => 60.0 + rng.uniform_range(-10.0, 10.0),
            Phase::Anchor | Phase::Moored => 180.0 + rng.uniform_range(-10.0, 10.0),
        };
        if t > 0 {
            tau += interval;
        }
        let target_speed = match phase {
            Phase::Loaded => cruise,
            Phase::Ballast => cruise * 1.1,
            Phase::Anchor => 0.3,
            Phase::Moored => 0.0,
        };
        speed += 0.3 * (target_speed - speed) + 0.1 * rng.normal();
        speed = speed.max(0.0);
        if matches!(phase, Phase::Loaded | Phase::Ballast) {
            turn = 0.9 * turn + 0.8 * rng.normal();
            heading = wrap_degrees(heading + turn);
        }
        if t > 0 {
            let nm = speed * interval / 3600.0;
            let h = heading.to_radians();
            lat += nm * h.cos() / 60.0;
            lon = wrap_longitude(lon + nm * h.sin() / (60.0 * lat.to_radians().cos()));
        }
        let nav = match phase {
            Phase::Loaded | Phase::Ballast => UNDER_WAY,
            Phase::Anchor => AT_ANCHOR,
            Phase::Moored => MOORED,
        };
        let (draught, cargo_now) = match phase {
            Phase::Ballast => (ballast_draught, 0.0),
            _ => (loaded_draught, cargo as f64),
        };
        let mut row: Row = [None; N_ATTR];
        let mut set = |a: AttributeId, x: f64| row[a.index()] = Some(x);
        set(AttributeId::Lon, lon);
        set(AttributeId::Lat, lat);
        set(AttributeId::Time, tau.round());
        set(AttributeId::Heading, (heading * 10.0).round().rem_euclid(3600.0) / 10.0);
        set(
            AttributeId::Course,
            (wrap_degrees(heading + drift) * 10.0).round().rem_euclid(3600.0) / 10.0,
        );
        set(AttributeId::Speed, (speed * 10.0).round() / 10.0);
        set(AttributeId::NavStatus, nav);
        set(AttributeId::Cargo, cargo_now);
        set(AttributeId::Draught, draught);
        set(AttributeId::Length, length.round());
        set(AttributeId::Width, (width * 10.0).round() / 10.0);
        set(AttributeId::VesselType, kappa as f64);
        values.push(row);
    }
    RecordSequence::new(format!("2190{v:05}"), values)
}

/// Two short sequences whose targets activate every loss term.
pub fn toy_batch(seed: u64) -> Vec<RecordSequence> {
    let spec = FleetSpec {
        vessels: 2,
        steps: 8,
        seed,
        ..FleetSpec::default()
    };
    let mut seqs = synthetic_fleet(&spec);
    let picks: [&[(usize, AttributeId)]; 2] = [
        &[
            (2, AttributeId::Lon),
            (3, AttributeId::Time),
            (4, AttributeId::Heading),
            (5, AttributeId::Speed),
            (1, AttributeId::NavStatus),
            (6, AttributeId::Draught),
        ],
        &[
            (1, AttributeId::Lat),
            (6, AttributeId::Time),
            (2, AttributeId::Course),
            (3, AttributeId::Length),
            (4, AttributeId::VesselType),
            (7, AttributeId::Cargo),
        ],
    ];
    for (s, list) in seqs.iter_mut().zip(picks) {
        for &(t, a) in list {
            s.targets[t][a.index()] = true;
        }
    }
    seqs
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::{segment_voyages, validate};

    #[test]
    fn fleet_is_valid_and_deterministic() {
        let spec = FleetSpec::default();
        let a = synthetic_fleet(&spec);
        assert_eq!(a.len(), 30);
        assert_eq!(a, synthetic_fleet(&spec));
        for s in &a {
            assert_eq!(s.len(), 120);
            assert!(
                validate(s, spec.categories).is_empty(),
                "{:?}",
                validate(s, spec.categories)
            );
            assert_eq!(segment_voyages(s).segments.len(), 2);
        }
    }

    #[test]
    fn toy_batch_covers_all_terms() {
        let b = toy_batch(3);
        let mut classes = std::collections::BTreeSet::new();
        for s in &b {
            for t in 0..s.len() {
                for a in AttributeId::ALL {
                    if s.is_target(t, a) {
                        classes.insert(format!("{:?}", a.type_class()));
                    }
                }
            }
        }
        assert_eq!(classes.len(), 4);
    }
}
