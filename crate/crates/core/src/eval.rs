//! Target-masked metrics and the MEAN, KNN and Lin-ITP baselines.
//!
//! Grids produced here follow the same convention as model imputation:
//! visible cells pass through and every other cell is filled when the method
//! can, `None` where it declines.

use std::fmt::Write as _;
use std::str::FromStr;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geo::{angular_delta, angular_error, haversine, wrap_degrees, wrap_longitude};
use crate::ingest::NormStats;
use crate::types::{AttributeId, RecordSequence, Row, TypeClass};

fn check(op: &'static str, n_pred: usize, n_truth: usize, mask: &[bool]) -> Result<()> {
    if n_pred != n_truth || mask.len() != n_pred {
        return Err(Error::Shape {
            op,
            lhs: vec![n_pred],
            rhs: vec![n_truth, mask.len()],
        });
    }
    if !mask.iter().any(|&m| m) {
        return Err(Error::invalid(format!("{op}: empty target set")));
    }
    Ok(())
}

fn masked_mean(mask: &[bool], f: impl Fn(usize) -> f64) -> f64 {
    let (mut sum, mut n) = (0.0, 0usize);
    for (i, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
        sum += f(i);
        n += 1;
    }
    sum / n as f64
}

pub fn mae(pred: &[f64], truth: &[f64], mask: &[bool]) -> Result<f64> {
    check("mae", pred.len(), truth.len(), mask)?;
    Ok(masked_mean(mask, |i| (pred[i] - truth[i]).abs()))
}

/// MAE with the wrapped angular error `min(|Δ|, 360 − |Δ|)`.
pub fn mae_wrapped(pred: &[f64], truth: &[f64], mask: &[bool]) -> Result<f64> {
    check("mae", pred.len(), truth.len(), mask)?;
    Ok(masked_mean(mask, |i| angular_error(pred[i], truth[i])))
}

fn smape_term(x: f64, y: f64) -> f64 {
    if x.abs() < 1e-12 && y.abs() < 1e-12 {
        return 0.0;
    }
    (x - y).abs() / ((x.abs() + y.abs()) / 2.0)
}

/// Symmetric MAPE in `[0, 2]`.
pub fn smape(pred: &[f64], truth: &[f64], mask: &[bool]) -> Result<f64> {
    check("smape", pred.len(), truth.len(), mask)?;
    Ok(masked_mean(mask, |i| smape_term(truth[i], pred[i])))
}

pub fn acc(pred: &[f64], truth: &[f64], mask: &[bool]) -> Result<f64> {
    check("acc", pred.len(), truth.len(), mask)?;
    Ok(masked_mean(mask, |i| if pred[i] == truth[i] { 1.0 } else { 0.0 }))
}

/// Mean haversine angle in radians between `(lon, lat)` pairs.
pub fn coord_dist(pred: &[(f64, f64)], truth: &[(f64, f64)], mask: &[bool]) -> Result<f64> {
    check("coord_dist", pred.len(), truth.len(), mask)?;
    Ok(masked_mean(mask, |i| {
        haversine(pred[i].0, pred[i].1, truth[i].0, truth[i].1)
    }))
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub field: String,
    /// Target cells (positions, for coordinates).
    pub targets: usize,
    /// Targets the method filled and that have a defined ground truth.
    pub scored: usize,
    pub metrics: Vec<(String, f64)>,
}

impl MetricRow {
    pub fn metric(&self, name: &str) -> Option<f64> {
        self.metrics.iter().find(|(n, _)| n == name).map(|&(_, v)| v)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub method: String,
    pub rows: Vec<MetricRow>,
}

pub const COORDINATES: &str = "coordinates";

fn fields() -> Vec<&'static str> {
    let mut out = vec![COORDINATES];
    out.extend(AttributeId::ALL[2..].iter().map(|a| a.column()));
    out
}

impl EvalReport {
    pub fn row(&self, field: &str) -> Option<&MetricRow> {
        self.rows.iter().find(|r| r.field == field)
    }

    pub fn metric(&self, field: &str, name: &str) -> Option<f64> {
        self.row(field)?.metric(name)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("method,field,metric,value,targets,scored\n");
        for r in &self.rows {
            if r.metrics.is_empty() {
                let _ = writeln!(s, "{},{},,,{},{}", self.method, r.field, r.targets, r.scored);
            }
            for (name, v) in &r.metrics {
                let _ = writeln!(
                    s,
                    "{},{},{},{},{},{}",
                    self.method, r.field, name, v, r.targets, r.scored
                );
            }
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let bad = |line: usize, msg: &str| Error::Parse {
            path: "<report>".into(),
            line,
            msg: msg.to_string(),
        };
        let mut method = None;
        let mut rows: Vec<MetricRow> = Vec::new();
        for (i, line) in text.lines().enumerate().skip(1) {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 6 {
                return Err(bad(i + 1, "expected 6 fields"));
            }
            method.get_or_insert_with(|| f[0].to_string());
            let targets = f[4].parse().map_err(|_| bad(i + 1, "bad target count"))?;
            let scored = f[5].parse().map_err(|_| bad(i + 1, "bad scored count"))?;
            if rows.last().is_none_or(|r| r.field != f[1]) {
                rows.push(MetricRow {
                    field: f[1].to_string(),
                    targets,
                    scored,
                    metrics: Vec::new(),
                });
            }
            if !f[2].is_empty() {
                let v = f[3].parse().map_err(|_| bad(i + 1, "bad value"))?;
                rows.last_mut().unwrap().metrics.push((f[2].to_string(), v));
            }
        }
        Ok(Self {
            method: method.unwrap_or_default(),
            rows,
        })
    }

    /// Fixed-width table, one line per field.
    pub fn to_text(&self) -> String {
        let mut s = format!("{}\n", self.method);
        let _ = writeln!(s, "  {:<12} {:>8} {:>8}  metrics", "field", "targets", "scored");
        for r in &self.rows {
            let m = if r.metrics.is_empty() {
                "-".to_string()
            } else {
                r.metrics
                    .iter()
                    .map(|(n, v)| format!("{n}={v:.6}"))
                    .collect::<Vec<_>>()
                    .join(" ")
            };
            let _ = writeln!(s, "  {:<12} {:>8} {:>8}  {m}", r.field, r.targets, r.scored);
        }
        s
    }
}

/// Scores filled grids against the ground truth at target cells.
///
/// Timestamps are scored as intervals `τ_t − τ_{t−1}` for targets at `t ≥ 1`
/// whose predecessor is observed; the predicted interval uses the grid's own
/// value at `t − 1`.
pub fn evaluate(method: &str, seqs: &[&RecordSequence], grids: &[Vec<Row>]) -> Result<EvalReport> {
    if seqs.len() != grids.len() {
        return Err(Error::Shape {
            op: "evaluate",
            lhs: vec![seqs.len()],
            rhs: vec![grids.len()],
        });
    }
    for (s, g) in seqs.iter().zip(grids) {
        if s.len() != g.len() {
            return Err(Error::Shape {
                op: "evaluate",
                lhs: vec![s.len()],
                rhs: vec![g.len()],
            });
        }
    }
    let mut rows = Vec::new();
    for field in fields() {
        let mut targets = 0;
        let (mut pred, mut truth) = (Vec::new(), Vec::new());
        let (mut ppos, mut tpos) = (Vec::new(), Vec::new());
        for (s, g) in seqs.iter().zip(grids) {
            for t in 0..s.len() {
                if field == COORDINATES {
                    let (lo, la) = (AttributeId::Lon.index(), AttributeId::Lat.index());
                    if !(s.targets[t][lo] || s.targets[t][la]) {
                        continue;
                    }
                    targets += 1;
                    if let (Some(a), Some(b), Some(c), Some(d)) = (g[t][lo], g[t][la], s.values[t][lo], s.values[t][la])
                    {
                        ppos.push((a, b));
                        tpos.push((c, d));
                    }
                    continue;
                }
                let a = AttributeId::ALL.iter().copied().find(|a| a.column() == field).unwrap();
                if !s.is_target(t, a) {
                    continue;
                }
                targets += 1;
                let i = a.index();
                if a == AttributeId::Time {
                    if t == 0 {
                        continue;
                    }
                    if let (Some(p1), Some(p0), Some(x1), Some(x0)) =
                        (g[t][i], g[t - 1][i], s.values[t][i], s.values[t - 1][i])
                    {
                        pred.push(p1 - p0);
                        truth.push(x1 - x0);
                    }
                } else if let (Some(p), Some(x)) = (g[t][i], s.values[t][i]) {
                    pred.push(p);
                    truth.push(x);
                }
            }
        }
        let scored = if field == COORDINATES { ppos.len() } else { pred.len() };
        let mut metrics = Vec::new();
        if scored > 0 {
            let mask = vec![true; scored];
            let class = if field == COORDINATES {
                TypeClass::SpatioTemporal
            } else {
                AttributeId::ALL
                    .iter()
                    .find(|a| a.column() == field)
                    .unwrap()
                    .type_class()
            };
            match class {
                TypeClass::SpatioTemporal if field == COORDINATES => {
                    metrics.push(("dist".into(), coord_dist(&ppos, &tpos, &mask)?));
                }
                TypeClass::SpatioTemporal | TypeClass::Continuous => {
                    metrics.push(("mae".into(), mae(&pred, &truth, &mask)?));
                    metrics.push(("smape".into(), smape(&pred, &truth, &mask)?));
                }
                TypeClass::Cyclical => {
                    metrics.push(("mae".into(), mae_wrapped(&pred, &truth, &mask)?));
                    metrics.push(("smape".into(), smape(&pred, &truth, &mask)?));
                }
                TypeClass::Discrete => metrics.push(("acc".into(), acc(&pred, &truth, &mask)?)),
            }
        }
        rows.push(MetricRow {
            field: field.to_string(),
            targets,
            scored,
            metrics,
        });
    }
    Ok(EvalReport {
        method: method.to_string(),
        rows,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Baseline {
    Mean,
    Knn(usize),
    LinItp,
}

impl Baseline {
    pub fn name(self) -> &'static str {
        match self {
            Baseline::Mean => "MEAN",
            Baseline::Knn(_) => "KNN",
            Baseline::LinItp => "Lin-ITP",
        }
    }
}

impl FromStr for Baseline {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mean" => Ok(Baseline::Mean),
            "knn" => Ok(Baseline::Knn(20)),
            "linitp" | "lin-itp" => Ok(Baseline::LinItp),
            _ => Err(Error::invalid(format!("unknown baseline `{s}` (mean, knn, linitp)"))),
        }
    }
}

fn visible_grid(seq: &RecordSequence) -> Vec<Row> {
    (0..seq.len())
        .map(|t| std::array::from_fn(|i| seq.visible_value(t, AttributeId::ALL[i])))
        .collect()
}

fn circular_mean(xs: impl Iterator<Item = f64> + Clone) -> Option<f64> {
    let (mut s, mut c, mut n) = (0.0, 0.0, 0usize);
    for x in xs.clone() {
        let r = x.to_radians();
        s += r.sin();
        c += r.cos();
        n += 1;
    }
    if n == 0 {
        return None;
    }
    if s.hypot(c) < 1e-12 * n as f64 {
        return Some(wrap_degrees(xs.sum::<f64>() / n as f64));
    }
    Some(wrap_degrees(s.atan2(c).to_degrees()))
}

fn unwrapped_mean(lons: &[f64]) -> Option<f64> {
    let &first = lons.first()?;
    let m = lons.iter().map(|&l| first + angular_delta(first, l)).sum::<f64>() / lons.len() as f64;
    Some(wrap_longitude(m))
}

fn majority(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let mut counts: Vec<(f64, usize)> = Vec::new();
    for x in xs {
        match counts.iter_mut().find(|(c, _)| *c == x) {
            Some(e) => e.1 += 1,
            None => counts.push((x, 1)),
        }
    }
    counts
        .into_iter()
        .max_by(|a, b| a.1.cmp(&b.1).then(b.0.total_cmp(&a.0)))
        .map(|(c, _)| c)
}

/// Location statistic of `values` appropriate to the attribute's type class.
fn aggregate(a: AttributeId, values: &[f64]) -> Option<f64> {
    match a {
        AttributeId::Lon => unwrapped_mean(values),
        _ => match a.type_class() {
            TypeClass::Cyclical => circular_mean(values.iter().copied()),
            TypeClass::Discrete => majority(values.iter().copied()),
            _ if values.is_empty() => None,
            _ => Some(values.iter().sum::<f64>() / values.len() as f64),
        },
    }
}

/// Intervals between consecutive visible timestamps of one sequence.
fn visible_intervals(seq: &RecordSequence) -> Vec<Option<f64>> {
    (0..seq.len())
        .map(|t| {
            if t == 0 {
                return None;
            }
            Some(seq.visible_value(t, AttributeId::Time)? - seq.visible_value(t - 1, AttributeId::Time)?)
        })
        .collect()
}

/// Fills hidden timestamps by accumulating per-step intervals forward from
/// the previous known value, or backward from the first visible one.
fn fill_timestamps(grid: &mut [Row], interval: &[Option<f64>]) {
    let i = AttributeId::Time.index();
    let Some(first) = grid.iter().position(|r| r[i].is_some()) else {
        return;
    };
    for t in (0..first).rev() {
        grid[t][i] = match (grid[t + 1][i], interval[t + 1]) {
            (Some(next), Some(d)) => Some(next - d),
            _ => None,
        };
    }
    for t in first + 1..grid.len() {
        if grid[t][i].is_none() {
            grid[t][i] = match (grid[t - 1][i], interval[t]) {
                (Some(prev), Some(d)) => Some(prev + d),
                _ => None,
            };
        }
    }
}

/// Per-sequence visible mean (circular for angles, majority for classes,
/// mean interval for timestamps).
pub fn baseline_mean(seq: &RecordSequence) -> Vec<Row> {
    let mut grid = visible_grid(seq);
    for a in AttributeId::ALL {
        if a == AttributeId::Time {
            continue;
        }
        let vis: Vec<f64> = (0..seq.len()).filter_map(|t| seq.visible_value(t, a)).collect();
        if let Some(m) = aggregate(a, &vis) {
            for row in grid.iter_mut() {
                row[a.index()].get_or_insert(m);
            }
        }
    }
    let gaps: Vec<f64> = visible_intervals(seq).into_iter().flatten().collect();
    if let Some(d) = aggregate(AttributeId::Speed, &gaps) {
        fill_timestamps(&mut grid, &vec![Some(d); seq.len()]);
    }
    grid
}

/// Linear interpolation in `t` between the nearest visible values, constant
/// beyond the ends; angles follow the shorter arc and classes copy the
/// nearest visible step (earlier on ties).
pub fn baseline_linitp(seq: &RecordSequence) -> Vec<Row> {
    let mut grid = visible_grid(seq);
    let n = seq.len();
    for a in AttributeId::ALL {
        let i = a.index();
        let known: Vec<usize> = (0..n).filter(|&t| grid[t][i].is_some()).collect();
        if known.is_empty() {
            continue;
        }
        let mut k = 0;
        for t in 0..n {
            while k < known.len() && known[k] < t {
                k += 1;
            }
            if known.get(k) == Some(&t) {
                continue;
            }
            let prev = k.checked_sub(1).map(|j| known[j]);
            let next = known.get(k).copied();
            let v = match (prev, next) {
                (Some(p), Some(q)) => {
                    let (x0, x1) = (grid[p][i].unwrap(), grid[q][i].unwrap());
                    let w = (t - p) as f64 / (q - p) as f64;
                    match (a, a.type_class()) {
                        (AttributeId::Lon, _) => wrap_longitude(x0 + w * angular_delta(x0, x1)),
                        (_, TypeClass::Cyclical) => wrap_degrees(x0 + w * angular_delta(x0, x1)),
                        (_, TypeClass::Discrete) => {
                            if t - p <= q - t {
                                x0
                            } else {
                                x1
                            }
                        }
                        _ => x0 + w * (x1 - x0),
                    }
                }
                (Some(p), None) => grid[p][i].unwrap(),
                (None, Some(q)) => grid[q][i].unwrap(),
                (None, None) => unreachable!(),
            };
            grid[t][i] = Some(v);
        }
    }
    grid
}

const FEATURES: [AttributeId; 8] = [
    AttributeId::Lon,
    AttributeId::Lat,
    AttributeId::Heading,
    AttributeId::Course,
    AttributeId::Speed,
    AttributeId::Draught,
    AttributeId::Length,
    AttributeId::Width,
];

fn feature_vector(seq: &RecordSequence, t: usize, stats: &NormStats) -> [Option<f64>; 10] {
    let mut out = [None; 10];
    let mut j = 0;
    for a in FEATURES {
        let v = seq.visible_value(t, a);
        if a.type_class() == TypeClass::Cyclical {
            let r = v.map(f64::to_radians);
            out[j] = r.map(f64::sin);
            out[j + 1] = r.map(f64::cos);
            j += 2;
        } else {
            let (m, s) = stats.scale_of(a);
            out[j] = v.map(|x| (x - m) / s);
            j += 1;
        }
    }
    out
}

fn feature_distance(a: &[Option<f64>; 10], b: &[Option<f64>; 10]) -> Option<f64> {
    let (mut sum, mut n) = (0.0, 0usize);
    for (x, y) in a.iter().zip(b) {
        if let (Some(x), Some(y)) = (x, y) {
            sum += (x - y) * (x - y);
            n += 1;
        }
    }
    (n > 0).then(|| (sum / n as f64).sqrt())
}

/// K nearest visible records across every sequence in `pool`, by Euclidean
/// distance over the z-scored coordinate, continuous and (sin, cos) angle
/// channels both records share, averaged by the root mean square. Returns the
/// grids of `pool[i]` for each `i` in `queries`.
///
/// Timestamps are filled from the neighbours' mean visible interval.
pub fn baseline_knn(pool: &[&RecordSequence], queries: &[usize], stats: &NormStats, k: usize) -> Result<Vec<Vec<Row>>> {
    if k == 0 {
        return Err(Error::invalid("knn needs k >= 1"));
    }
    if let Some(&q) = queries.iter().find(|&&q| q >= pool.len()) {
        return Err(Error::invalid(format!("query {q} outside pool of {}", pool.len())));
    }
    let feats: Vec<Vec<[Option<f64>; 10]>> = pool
        .iter()
        .map(|s| (0..s.len()).map(|t| feature_vector(s, t, stats)).collect())
        .collect();
    let intervals: Vec<Vec<Option<f64>>> = pool.iter().map(|s| visible_intervals(s)).collect();
    let records: Vec<(usize, usize)> = pool
        .iter()
        .enumerate()
        .flat_map(|(s, seq)| (0..seq.len()).map(move |t| (s, t)))
        .collect();
    Ok(queries
        .par_iter()
        .map(|&qi| {
            let seq = pool[qi];
            let mut grid = visible_grid(seq);
            let mut interval = vec![None; seq.len()];
            for t in 0..seq.len() {
                let missing: Vec<AttributeId> = AttributeId::ALL
                    .into_iter()
                    .filter(|&a| {
                        if a == AttributeId::Time {
                            intervals[qi][t].is_none()
                        } else {
                            !seq.visible(t, a)
                        }
                    })
                    .collect();
                if missing.is_empty() {
                    continue;
                }
                let mut near: Vec<(f64, usize, usize)> = records
                    .iter()
                    .filter(|&&(s, u)| (s, u) != (qi, t))
                    .filter_map(|&(s, u)| feature_distance(&feats[qi][t], &feats[s][u]).map(|d| (d, s, u)))
                    .collect();
                near.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
                for a in missing {
                    let vals: Vec<f64> = if a == AttributeId::Time {
                        near.iter().filter_map(|&(_, s, u)| intervals[s][u]).take(k).collect()
                    } else {
                        near.iter()
                            .filter_map(|&(_, s, u)| pool[s].visible_value(u, a))
                            .take(k)
                            .collect()
                    };
                    if a == AttributeId::Time {
                        interval[t] = aggregate(AttributeId::Speed, &vals);
                    } else {
                        grid[t][a.index()] = aggregate(a, &vals);
                    }
                }
            }
            for (t, slot) in interval.iter_mut().enumerate() {
                if slot.is_none() {
                    *slot = intervals[qi][t];
                }
            }
            fill_timestamps(&mut grid, &interval);
            grid
        })
        .collect())
}

/// Runs one baseline over `pool[i]` for each `i` in `queries`.
pub fn run_baseline(
    b: Baseline,
    pool: &[&RecordSequence],
    queries: &[usize],
    stats: &NormStats,
) -> Result<Vec<Vec<Row>>> {
    match b {
        Baseline::Mean => Ok(queries.iter().map(|&i| baseline_mean(pool[i])).collect()),
        Baseline::LinItp => Ok(queries.iter().map(|&i| baseline_linitp(pool[i])).collect()),
        Baseline::Knn(k) => baseline_knn(pool, queries, stats, k),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::compute_norm_stats;
    use crate::synth::{synthetic_fleet, FleetSpec};
    use crate::types::N_ATTR;
    use std::f64::consts::PI;

    fn all(n: usize) -> Vec<bool> {
        vec![true; n]
    }

    #[test]
    fn scalar_metric_examples() {
        assert_eq!(mae(&[1.0, 2.0], &[1.0, 2.0], &all(2)).unwrap(), 0.0);
        assert_eq!(mae(&[1.0, 3.0], &[0.0, 0.0], &all(2)).unwrap(), 2.0);
        assert_eq!(mae_wrapped(&[359.0], &[1.0], &all(1)).unwrap(), 2.0);
        assert_eq!(smape(&[10.0], &[10.0], &all(1)).unwrap(), 0.0);
        assert_eq!(smape(&[0.0], &[10.0], &all(1)).unwrap(), 2.0);
        assert!((smape(&[5.0], &[10.0], &all(1)).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(smape(&[0.0], &[0.0], &all(1)).unwrap(), 0.0);
        assert_eq!(
            acc(&[1.0, 2.0, 3.0, 4.0], &[1.0, 2.0, 3.0, 0.0], &all(4)).unwrap(),
            0.75
        );
        assert_eq!(acc(&[1.0], &[2.0], &all(1)).unwrap(), 0.0);
        assert_eq!(coord_dist(&[(3.0, 4.0)], &[(3.0, 4.0)], &all(1)).unwrap(), 0.0);
        let d = coord_dist(&[(0.0, 0.0), (0.0, 0.0)], &[(0.0, 0.0), (180.0, 0.0)], &all(2)).unwrap();
        assert!((d - PI / 2.0).abs() < 1e-12);
    }

    #[test]
    fn mask_selects_and_empty_errors() {
        assert_eq!(mae(&[1.0, 100.0], &[0.0, 0.0], &[true, false]).unwrap(), 1.0);
        assert!(matches!(mae(&[1.0], &[1.0], &[false]), Err(Error::Invalid(_))));
        assert!(matches!(acc(&[], &[], &[]), Err(Error::Invalid(_))));
        assert!(matches!(smape(&[1.0], &[1.0, 2.0], &[true]), Err(Error::Shape { .. })));
    }

    fn column(a: AttributeId, xs: &[Option<f64>]) -> RecordSequence {
        let values: Vec<Row> = xs
            .iter()
            .map(|&x| {
                let mut r = [None; N_ATTR];
                r[a.index()] = x;
                r
            })
            .collect();
        RecordSequence::new("1", values)
    }

    #[test]
    fn baseline_examples() {
        let s = column(AttributeId::Speed, &[Some(2.0), None, Some(4.0), Some(6.0)]);
        let i = AttributeId::Speed.index();
        assert_eq!(baseline_mean(&s)[1][i], Some(4.0));
        let mut xs = vec![None; 11];
        xs[0] = Some(0.0);
        xs[10] = Some(10.0);
        let s = column(AttributeId::Draught, &xs);
        let g = baseline_linitp(&s);
        assert!((g[4][AttributeId::Draught.index()].unwrap() - 4.0).abs() < 1e-12);
        let s = column(AttributeId::Heading, &[Some(350.0), None, Some(10.0), None]);
        let g = baseline_linitp(&s);
        let h = AttributeId::Heading.index();
        assert_eq!(g[1][h], Some(0.0));
        assert_eq!(g[3][h], Some(10.0));
        let m = baseline_mean(&s)[1][h].unwrap();
        assert!(angular_error(m, 0.0) < 1e-9);
    }

    #[test]
    fn constant_column_reproduced_by_all_baselines() {
        let mut seqs = synthetic_fleet(&FleetSpec {
            vessels: 3,
            steps: 20,
            ..FleetSpec::default()
        });
        for s in &mut seqs {
            for t in 0..s.len() {
                s.values[t][AttributeId::Width.index()] = Some(7.5);
                s.values[t][AttributeId::Cargo.index()] = Some(2.0);
            }
            for t in [3, 4, 11] {
                s.targets[t][AttributeId::Width.index()] = true;
                s.targets[t][AttributeId::Cargo.index()] = true;
            }
        }
        let stats = compute_norm_stats(&seqs).unwrap();
        let pool: Vec<&RecordSequence> = seqs.iter().collect();
        for b in [Baseline::Mean, Baseline::LinItp, Baseline::Knn(20)] {
            let grids = run_baseline(b, &pool, &[0, 1, 2], &stats).unwrap();
            for g in &grids {
                for t in [3, 4, 11] {
                    assert_eq!(g[t][AttributeId::Width.index()], Some(7.5), "{b:?}");
                    assert_eq!(g[t][AttributeId::Cargo.index()], Some(2.0), "{b:?}");
                }
            }
        }
    }

    #[test]
    fn invisible_attribute_is_declined() {
        let s = column(AttributeId::Speed, &[Some(1.0), Some(2.0)]);
        for g in [baseline_mean(&s), baseline_linitp(&s)] {
            assert!(g.iter().all(|r| r[AttributeId::Length.index()].is_none()));
        }
    }

    #[test]
    fn baselines_fill_timestamps_monotonically() {
        let mut seqs = synthetic_fleet(&FleetSpec {
            vessels: 2,
            steps: 30,
            ..FleetSpec::default()
        });
        for t in [0, 1, 7, 8, 9, 29] {
            seqs[0].targets[t][AttributeId::Time.index()] = true;
        }
        let stats = compute_norm_stats(&seqs).unwrap();
        let pool: Vec<&RecordSequence> = seqs.iter().collect();
        for b in [Baseline::Mean, Baseline::LinItp, Baseline::Knn(5)] {
            let g = &run_baseline(b, &pool, &[0], &stats).unwrap()[0];
            let ts: Vec<f64> = g.iter().map(|r| r[AttributeId::Time.index()].unwrap()).collect();
            let strict = b != Baseline::LinItp;
            assert!(
                ts[..7].windows(2).all(|w| w[1] > w[0] || (!strict && w[1] == w[0])),
                "{b:?} {ts:?}"
            );
        }
    }

    #[test]
    fn report_counts_and_round_trip() {
        let mut seqs = synthetic_fleet(&FleetSpec {
            vessels: 2,
            steps: 12,
            ..FleetSpec::default()
        });
        let pool: Vec<&RecordSequence> = seqs.iter().collect();
        let grids: Vec<Vec<Row>> = pool.iter().map(|s| baseline_mean(s)).collect();
        let empty = evaluate("MEAN", &pool, &grids).unwrap();
        assert!(empty.rows.iter().all(|r| r.targets == 0 && r.metrics.is_empty()));
        seqs[1].targets[5][AttributeId::Speed.index()] = true;
        seqs[1].targets[4][AttributeId::Lat.index()] = true;
        seqs[1].targets[0][AttributeId::Time.index()] = true;
        let pool: Vec<&RecordSequence> = seqs.iter().collect();
        let grids: Vec<Vec<Row>> = pool.iter().map(|s| baseline_mean(s)).collect();
        let r = evaluate("MEAN", &pool, &grids).unwrap();
        let i = AttributeId::Speed.index();
        let want = (grids[1][5][i].unwrap() - seqs[1].values[5][i].unwrap()).abs();
        assert_eq!(r.metric("sog", "mae"), Some(want));
        assert_eq!(r.row(COORDINATES).unwrap().targets, 1);
        let ts = r.row("timestamp").unwrap();
        assert_eq!((ts.targets, ts.scored), (1, 0));
        assert_eq!(EvalReport::from_csv(&r.to_csv()).unwrap(), r);
        assert!(r.to_text().contains("sog"));
    }
}
