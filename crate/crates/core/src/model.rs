//! The assembled imputation network and sequence-level imputation.

use crate::config::ModelConfig;
use crate::decoders::{
    angle_of, argmax, continuous_tape, coordinates_tape, cyclical_tape, discrete_tape, finish_coordinates, fuse,
    group_slot, intensity_tape, interval, DecoderParams, FusionParams, TimeMode,
};
use crate::encoders::{encode_sequence, EncoderParams};
use crate::error::{Error, Result};
use crate::geo::coordinate_bases;
use crate::graph::{self, GraphOutput, GraphParams};
use crate::ingest::{rows_to_csv, NormStats};
use crate::numeric::{hash_bytes, stream_id, ParamStore, RngStream, Tape, Var};
use crate::params::{Bound, ParamBuilder};
use crate::reservoir::Reservoir;
use crate::types::{AttributeId, RecordSequence, Row, TypeClass};

pub struct Model {
    pub config: ModelConfig,
    pub stats: NormStats,
    pub seed: u64,
    pub store: ParamStore,
    pub encoders: EncoderParams,
    pub graph: GraphParams,
    pub fusion: FusionParams,
    pub decoders: DecoderParams,
    pub reservoir: Reservoir,
}

/// Decoder outputs for every step of one sequence.
pub struct Outputs<'t> {
    /// `base + δ` for λ and φ, `[T, 1]`, before wrap/clamp.
    pub lon: Var<'t>,
    pub lat: Var<'t>,
    /// Intensity `η`, `[T, 1]`.
    pub eta: Var<'t>,
    /// Unit directions `[T, 2]` of heading and course.
    pub cyclical: [Var<'t>; 2],
    /// Speed, draught, length, width in original units, `[T, 1]`.
    pub continuous: [Var<'t>; 4],
    /// Class probabilities of nav status, cargo, vessel type.
    pub discrete: [Var<'t>; 3],
    pub graph: GraphOutput<'t>,
}

impl<'t> Outputs<'t> {
    pub fn of(&self, a: AttributeId) -> Var<'t> {
        match a.type_class() {
            TypeClass::SpatioTemporal => match a {
                AttributeId::Lon => self.lon,
                AttributeId::Lat => self.lat,
                _ => self.eta,
            },
            TypeClass::Cyclical => self.cyclical[group_slot(a)],
            TypeClass::Continuous => self.continuous[group_slot(a)],
            TypeClass::Discrete => self.discrete[group_slot(a)],
        }
    }
}

impl Model {
    pub fn new(config: ModelConfig, stats: NormStats, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new();
        let mut pb = ParamBuilder::new(&mut store, seed);
        let d = config.dim;
        let encoders = EncoderParams::register(&mut pb, d, config.categories);
        let graph = GraphParams::register(&mut pb, d, config.edge_hidden, config.self_loop);
        let fusion = FusionParams::register(&mut pb, d);
        let decoders = DecoderParams::register(&mut pb, d, config.window, config.categories, &stats);
        let reservoir = Reservoir::new(seed, d, config.spectral_radius, &config.leak, config.bidirectional)?;
        Ok(Self {
            config,
            stats,
            seed,
            store,
            encoders,
            graph,
            fusion,
            decoders,
            reservoir,
        })
    }

    /// Window base estimates; a sequence without any visible position falls
    /// back to the training mean position.
    pub fn bases(&self, seq: &RecordSequence) -> Vec<(f64, f64)> {
        coordinate_bases(seq, self.config.window).unwrap_or_else(|_| {
            let fallback = (
                self.stats.scale_of(AttributeId::Lon).0,
                self.stats.scale_of(AttributeId::Lat).0,
            );
            vec![fallback; seq.len()]
        })
    }

    /// Full forward pass of one sequence on `bound`'s tape.
    pub fn forward<'t>(
        &self,
        bound: &Bound<'t, '_>,
        seq: &RecordSequence,
        bases: &[(f64, f64)],
    ) -> Result<Outputs<'t>> {
        if seq.is_empty() {
            return Err(Error::invalid(format!("empty sequence for vessel {}", seq.vessel_id)));
        }
        let emb = encode_sequence(bound, &self.encoders, seq, &self.stats, bases)?;
        let states = self.reservoir.run_tape(&emb)?;
        let g = graph::forward(bound, &self.graph, &states)?;
        let fused: Vec<Var<'t>> = AttributeId::ALL
            .iter()
            .map(|&a| fuse(bound, &self.fusion, a, &g.h_star[a.index()]))
            .collect::<Result<_>>()?;
        let e = |a: AttributeId| fused[a.index()];
        let dec = &self.decoders;
        let (lon, lat) = coordinates_tape(bound, dec, e(AttributeId::Lon), e(AttributeId::Lat), bases)?;
        let eta = intensity_tape(bound, dec, e(AttributeId::Time))?;
        let cyc = |a| cyclical_tape(bound, dec, a, e(a));
        let cont = |a| continuous_tape(bound, dec, &self.encoders, &self.stats, a, e(a));
        let disc = |a| discrete_tape(bound, dec, a, e(a));
        Ok(Outputs {
            lon,
            lat,
            eta,
            cyclical: [cyc(AttributeId::Heading)?, cyc(AttributeId::Course)?],
            continuous: [
                cont(AttributeId::Speed)?,
                cont(AttributeId::Draught)?,
                cont(AttributeId::Length)?,
                cont(AttributeId::Width)?,
            ],
            discrete: [
                disc(AttributeId::NavStatus)?,
                disc(AttributeId::Cargo)?,
                disc(AttributeId::VesselType)?,
            ],
            graph: g,
        })
    }

    /// Completed grid: visible cells pass through, every other cell is
    /// decoded.
    pub fn impute_sequence(&self, seq: &RecordSequence, ordinal: usize, mode: ImputeMode) -> Result<Vec<Row>> {
        let tape = Tape::new();
        let bound = Bound::new(&tape, &self.store);
        let bases = self.bases(seq);
        let out = self.forward(&bound, seq, &bases)?;
        let n = seq.len();
        let mut grid: Vec<Row> = (0..n)
            .map(|t| std::array::from_fn(|i| seq.visible_value(t, AttributeId::ALL[i])))
            .collect();
        for a in AttributeId::ALL {
            if a == AttributeId::Time {
                continue;
            }
            let v = out.of(a).value().clone();
            for t in 0..n {
                if grid[t][a.index()].is_some() {
                    continue;
                }
                let x = match a.type_class() {
                    TypeClass::SpatioTemporal => {
                        let (l, p) = finish_coordinates(out.lon.value().data()[t], out.lat.value().data()[t]);
                        if a == AttributeId::Lon {
                            l
                        } else {
                            p
                        }
                    }
                    TypeClass::Cyclical => angle_of([v.data()[2 * t], v.data()[2 * t + 1]])?,
                    TypeClass::Continuous => v.data()[t],
                    TypeClass::Discrete => {
                        let c = v.shape()[1];
                        argmax(&v.data()[t * c..(t + 1) * c]) as f64
                    }
                };
                grid[t][a.index()] = Some(x);
            }
        }
        let eta = out.eta.value().data().to_vec();
        let visible: Vec<Option<f64>> = (0..n).map(|t| seq.visible_value(t, AttributeId::Time)).collect();
        let mut rng = RngStream::new(
            self.seed,
            stream_id(&[
                hash_bytes(seq.vessel_id.as_bytes()),
                ordinal as u64,
                hash_bytes(b"time-sample"),
            ]),
        );
        let mut tm = match mode {
            ImputeMode::Expected => TimeMode::Expected,
            ImputeMode::Sample => TimeMode::Sample(&mut rng),
        };
        let anchor = self.stats.scale_of(AttributeId::Time).0;
        let times = impute_timestamps(&visible, &eta, anchor, &mut tm)?;
        for t in 0..n {
            grid[t][AttributeId::Time.index()] = Some(times[t]);
        }
        Ok(grid)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ImputeMode {
    Expected,
    Sample,
}

impl std::str::FromStr for ImputeMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "expected" => Ok(Self::Expected),
            "sample" => Ok(Self::Sample),
            _ => Err(Error::invalid(format!(
                "unknown timestamp mode `{s}` (expected|sample)"
            ))),
        }
    }
}

/// Fills hidden timestamps from the intensities `eta[t]` (which predict the
/// interval ending at `t`).
///
/// Hidden steps after a known timestamp are decoded left to right from their
/// predecessor; a run that would reach the next visible timestamp is shrunk
/// proportionally to fit inside the gap. Hidden steps before the first
/// visible timestamp are decoded backwards. Without any visible timestamp,
/// decoding starts at `anchor`.
pub fn impute_timestamps(
    visible: &[Option<f64>],
    eta: &[f64],
    anchor: f64,
    mode: &mut TimeMode<'_>,
) -> Result<Vec<f64>> {
    let n = visible.len();
    let mut out = vec![0.0; n];
    let first = visible.iter().position(Option::is_some);
    let start = first.unwrap_or(0);
    out[start] = visible[start].unwrap_or(anchor);
    for t in (0..start).rev() {
        out[t] = out[t + 1] - interval(eta[t + 1], mode)?;
    }
    let mut t = start + 1;
    while t < n {
        if let Some(v) = visible[t] {
            out[t] = v;
            t += 1;
            continue;
        }
        let run_start = t;
        while t < n && visible[t].is_none() {
            out[t] = out[t - 1] + interval(eta[t], mode)?;
            t += 1;
        }
        if t < n {
            let next = visible[t].unwrap();
            let base = out[run_start - 1];
            let last = out[t - 1];
            if last >= next {
                let m = (t - run_start) as f64;
                let s = (next - base) / (last - base) * m / (m + 1.0);
                for i in run_start..t {
                    out[i] = base + (out[i] - base) * s;
                }
            }
        }
    }
    if out.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("imputed timestamp".into()));
    }
    Ok(out)
}

/// Imputed rows in the standard schema plus an `imputed` column listing the
/// columns that were filled (`;`-separated).
pub fn imputed_csv(seqs: &[RecordSequence], grids: &[Vec<Row>]) -> Result<String> {
    let mut flags = Vec::new();
    let mut rows = Vec::new();
    for (seq, grid) in seqs.iter().zip(grids) {
        for (t, row) in grid.iter().enumerate() {
            let filled: Vec<&str> = AttributeId::ALL
                .iter()
                .filter(|&&a| !seq.visible(t, a))
                .map(|a| a.column())
                .collect();
            flags.push(filled.join(";"));
            rows.push((seq.vessel_id.as_str(), row));
        }
    }
    rows_to_csv(rows, Some(("imputed", flags)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::compute_norm_stats;

    fn toy_seq(n: usize) -> RecordSequence {
        let values = (0..n)
            .map(|t| {
                let t = t as f64;
                [
                    Some(10.0 + 0.01 * t),
                    Some(55.0 + 0.005 * t),
                    Some(1.6e9 + 60.0 * t),
                    Some((30.0 + 3.0 * t) % 360.0),
                    Some((32.0 + 3.0 * t) % 360.0),
                    Some(12.0 + 0.1 * t),
                    Some(0.0),
                    Some(2.0),
                    Some(7.5),
                    Some(120.0),
                    Some(20.0),
                    Some(7.0),
                ]
            })
            .collect();
        RecordSequence::new("244000001", values)
    }

    fn small_config() -> ModelConfig {
        ModelConfig {
            dim: 4,
            edge_hidden: 6,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn pass_through_without_targets() {
        let seq = toy_seq(6);
        let stats = compute_norm_stats([&seq]).unwrap();
        let model = Model::new(small_config(), stats, 1).unwrap();
        let grid = model.impute_sequence(&seq, 0, ImputeMode::Expected).unwrap();
        assert_eq!(grid, seq.values);
    }

    #[test]
    fn single_target_changes_one_cell() {
        let mut seq = toy_seq(6);
        let stats = compute_norm_stats([&seq]).unwrap();
        let model = Model::new(small_config(), stats, 1).unwrap();
        seq.targets[3][AttributeId::Heading.index()] = true;
        let grid = model.impute_sequence(&seq, 0, ImputeMode::Expected).unwrap();
        for t in 0..6 {
            for a in AttributeId::ALL {
                let same = grid[t][a.index()] == seq.values[t][a.index()];
                assert_eq!(same, !(t == 3 && a == AttributeId::Heading), "{a} {t}");
            }
        }
        let h = grid[3][AttributeId::Heading.index()].unwrap();
        assert!((0.0..360.0).contains(&h));
    }

    #[test]
    fn masked_time_run_is_increasing() {
        let mut seq = toy_seq(8);
        let stats = compute_norm_stats([&seq]).unwrap();
        let model = Model::new(small_config(), stats, 2).unwrap();
        for t in [0, 3, 4, 5, 7] {
            seq.targets[t][AttributeId::Time.index()] = true;
        }
        for mode in [ImputeMode::Expected, ImputeMode::Sample] {
            let grid = model.impute_sequence(&seq, 0, mode).unwrap();
            let times: Vec<f64> = grid.iter().map(|r| r[AttributeId::Time.index()].unwrap()).collect();
            assert!(times.windows(2).all(|w| w[1] > w[0]), "{times:?}");
        }
    }

    #[test]
    fn timestamp_runs_fit_their_gap() {
        let vis = [Some(0.0), None, None, Some(10.0), None];
        let eta = [1.0, 0.1, 0.1, 0.1, 0.5];
        let out = impute_timestamps(&vis, &eta, 0.0, &mut TimeMode::Expected).unwrap();
        assert_eq!(out[0], 0.0);
        assert_eq!(out[3], 10.0);
        assert!(out[1] > 0.0 && out[2] > out[1] && out[2] < 10.0);
        assert!((out[4] - 12.0).abs() < 1e-12);
        let lead = impute_timestamps(&[None, None, Some(5.0)], &[1.0, 1.0, 0.5], 0.0, &mut TimeMode::Expected).unwrap();
        assert_eq!(lead, vec![2.0, 3.0, 5.0]);
        let none = impute_timestamps(&[None, None], &[1.0, 0.25], 7.0, &mut TimeMode::Expected).unwrap();
        assert_eq!(none, vec![7.0, 11.0]);
    }

    #[test]
    fn imputed_csv_flags_columns() {
        let mut seq = toy_seq(2);
        seq.targets[1][AttributeId::Speed.index()] = true;
        seq.values[0][AttributeId::Cargo.index()] = None;
        let csv = imputed_csv(&[seq.clone()], &[seq.values.clone()]).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert!(lines[0].ends_with(",imputed"));
        assert!(lines[1].ends_with(",cargo"));
        assert!(lines[2].ends_with(",sog"));
    }
}
