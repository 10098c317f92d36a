//! Attribute taxonomy, record sequences, masks and their validation rules.
//!
//! The twelve AIS attributes are kept in *taxonomy order*, which sorts them
//! by time scale. Because of that ordering, the attributes reaching scale `l`
//! (those whose own scale is `≤ l`) always form a prefix of the taxonomy, and
//! an attribute's position inside every scale bucket equals its taxonomy
//! index.

use std::fmt;
use std::ops::Range;

use crate::error::{Error, Result};

pub const N_ATTR: usize = 12;
pub const N_SCALES: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum AttributeId {
    Lon,
    Lat,
    Time,
    Heading,
    Course,
    Speed,
    NavStatus,
    Cargo,
    Draught,
    Length,
    Width,
    VesselType,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TypeClass {
    SpatioTemporal,
    Cyclical,
    Continuous,
    Discrete,
}

impl AttributeId {
    pub const ALL: [AttributeId; N_ATTR] = [
        AttributeId::Lon,
        AttributeId::Lat,
        AttributeId::Time,
        AttributeId::Heading,
        AttributeId::Course,
        AttributeId::Speed,
        AttributeId::NavStatus,
        AttributeId::Cargo,
        AttributeId::Draught,
        AttributeId::Length,
        AttributeId::Width,
        AttributeId::VesselType,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn type_class(self) -> TypeClass {
        use AttributeId::*;
        match self {
            Lon | Lat | Time => TypeClass::SpatioTemporal,
            Heading | Course => TypeClass::Cyclical,
            Speed | Draught | Length | Width => TypeClass::Continuous,
            NavStatus | Cargo | VesselType => TypeClass::Discrete,
        }
    }

    /// Update-rate scale, 1 (fastest) to 5 (static).
    pub fn time_scale(self) -> usize {
        use AttributeId::*;
        match self {
            Lon | Lat | Time => 1,
            Heading | Course | Speed => 2,
            NavStatus => 3,
            Cargo | Draught => 4,
            Length | Width | VesselType => 5,
        }
    }

    /// Column name in the CSV schema.
    pub fn column(self) -> &'static str {
        use AttributeId::*;
        match self {
            Lon => "lon",
            Lat => "lat",
            Time => "timestamp",
            Heading => "heading",
            Course => "cog",
            Speed => "sog",
            NavStatus => "navstatus",
            Cargo => "cargo",
            Draught => "draught",
            Length => "length",
            Width => "width",
            VesselType => "vtype",
        }
    }

    pub fn from_column(name: &str) -> Option<Self> {
        Self::ALL.iter().copied().find(|a| a.column() == name)
    }

    pub fn unit(self) -> &'static str {
        use AttributeId::*;
        match self {
            Lon | Lat | Heading | Course => "deg",
            Time => "s",
            Speed => "kn",
            Draught | Length | Width => "m",
            NavStatus | Cargo | VesselType => "category",
        }
    }

    pub fn is_cyclical(self) -> bool {
        self.type_class() == TypeClass::Cyclical
    }

    pub fn is_discrete(self) -> bool {
        self.type_class() == TypeClass::Discrete
    }

    pub fn is_continuous(self) -> bool {
        self.type_class() == TypeClass::Continuous
    }
}

impl fmt::Display for AttributeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.column())
    }
}

/// Category counts of the three discrete attributes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CategoryCounts {
    pub nav_status: usize,
    pub cargo: usize,
    pub vessel_type: usize,
}

impl Default for CategoryCounts {
    fn default() -> Self {
        Self {
            nav_status: 15,
            cargo: 5,
            vessel_type: 20,
        }
    }
}

impl CategoryCounts {
    pub fn get(&self, attr: AttributeId) -> usize {
        match attr {
            AttributeId::NavStatus => self.nav_status,
            AttributeId::Cargo => self.cargo,
            AttributeId::VesselType => self.vessel_type,
            _ => 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttributeSpec {
    pub id: AttributeId,
    pub type_class: TypeClass,
    pub time_scale: usize,
    /// Non-zero only for discrete attributes.
    pub category_count: usize,
    pub unit: &'static str,
}

/// The fixed taxonomy with default category counts.
pub fn taxonomy() -> [AttributeSpec; N_ATTR] {
    taxonomy_with(CategoryCounts::default())
}

pub fn taxonomy_with(categories: CategoryCounts) -> [AttributeSpec; N_ATTR] {
    AttributeId::ALL.map(|id| AttributeSpec {
        id,
        type_class: id.type_class(),
        time_scale: id.time_scale(),
        category_count: categories.get(id),
        unit: id.unit(),
    })
}

/// Number of feature vectors at scale `l`: attributes whose own scale is `≤ l`.
pub fn feature_count(l: usize) -> Result<usize> {
    if !(1..=N_SCALES).contains(&l) {
        return Err(Error::invalid(format!("time scale {l} outside 1..=5")));
    }
    Ok(AttributeId::ALL.iter().filter(|a| a.time_scale() <= l).count())
}

/// Attributes whose own scale is exactly `k`, in taxonomy order.
pub fn attributes_at_scale(k: usize) -> impl Iterator<Item = AttributeId> {
    AttributeId::ALL.into_iter().filter(move |a| a.time_scale() == k)
}

/// One row of a sequence grid; `None` marks a missing value.
pub type Row = [Option<f64>; N_ATTR];
pub type MaskRow = [bool; N_ATTR];

/// One vessel's record sequence with observation and target masks.
///
/// The observation mask is implied by `values` (`Some` means observed).
/// `noisy_inputs`, when present, replaces the model-visible values after noise
/// injection while `values` keeps the ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct RecordSequence {
    pub vessel_id: String,
    pub values: Vec<Row>,
    pub targets: Vec<MaskRow>,
    pub noisy_inputs: Option<Vec<Row>>,
}

impl RecordSequence {
    pub fn new(vessel_id: impl Into<String>, values: Vec<Row>) -> Self {
        let n = values.len();
        Self {
            vessel_id: vessel_id.into(),
            values,
            targets: vec![[false; N_ATTR]; n],
            noisy_inputs: None,
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn value(&self, t: usize, a: AttributeId) -> Option<f64> {
        self.values[t][a.index()]
    }

    pub fn observed(&self, t: usize, a: AttributeId) -> bool {
        self.values[t][a.index()].is_some()
    }

    pub fn is_target(&self, t: usize, a: AttributeId) -> bool {
        self.targets[t][a.index()]
    }

    /// Model-visible mask: observed and not selected as a target.
    pub fn visible(&self, t: usize, a: AttributeId) -> bool {
        self.observed(t, a) && !self.is_target(t, a)
    }

    /// The value the model may read at `(t, a)`, if visible.
    pub fn visible_value(&self, t: usize, a: AttributeId) -> Option<f64> {
        if !self.visible(t, a) {
            return None;
        }
        match &self.noisy_inputs {
            Some(noisy) => noisy[t][a.index()],
            None => self.values[t][a.index()],
        }
    }

    pub fn target_count(&self) -> usize {
        self.targets.iter().flatten().filter(|&&b| b).count()
    }

    pub fn clear_targets(&mut self) {
        for row in &mut self.targets {
            *row = [false; N_ATTR];
        }
    }
}

/// Disjoint, ordered half-open ranges covering `0..T`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VoyageSegmentation {
    pub segments: Vec<Range<usize>>,
}

/// Splits a sequence wherever an observed draught or cargo value differs from
/// the previous observed value of the same attribute.
pub fn segment_voyages(seq: &RecordSequence) -> VoyageSegmentation {
    let n = seq.len();
    let mut boundaries = Vec::new();
    for attr in [AttributeId::Draught, AttributeId::Cargo] {
        let mut last: Option<f64> = None;
        for t in 0..n {
            if let Some(v) = seq.value(t, attr) {
                if matches!(last, Some(prev) if prev != v) {
                    boundaries.push(t);
                }
                last = Some(v);
            }
        }
    }
    boundaries.sort_unstable();
    boundaries.dedup();
    let mut segments = Vec::with_capacity(boundaries.len() + 1);
    let mut start = 0;
    for b in boundaries {
        segments.push(start..b);
        start = b;
    }
    if n > 0 {
        segments.push(start..n);
    }
    VoyageSegmentation { segments }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Rule {
    TooShort,
    TargetNotObserved,
    TimeNotIncreasing,
    CyclicalRange,
    LatRange,
    LonRange,
    Negative,
    Category,
    NonFinite,
}

impl fmt::Display for Rule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Rule::TooShort => "sequence shorter than 2 records",
            Rule::TargetNotObserved => "target not observed",
            Rule::TimeNotIncreasing => "timestamps not strictly increasing",
            Rule::CyclicalRange => "cyclical out of [0,360)",
            Rule::LatRange => "lat out of range",
            Rule::LonRange => "lon out of [-180,180)",
            Rule::Negative => "continuous value negative",
            Rule::Category => "category index out of range",
            Rule::NonFinite => "non-finite value",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Violation {
    pub t: usize,
    pub attribute: Option<AttributeId>,
    pub rule: Rule,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.attribute {
            Some(a) => write!(f, "t={} {}: {}", self.t, a, self.rule),
            None => write!(f, "t={}: {}", self.t, self.rule),
        }
    }
}

/// Range rule for a single value; `None` when it is acceptable.
pub fn check_value(attr: AttributeId, v: f64, categories: CategoryCounts) -> Option<Rule> {
    if !v.is_finite() {
        return Some(Rule::NonFinite);
    }
    match attr {
        AttributeId::Lat if !(-90.0..=90.0).contains(&v) => Some(Rule::LatRange),
        AttributeId::Lon if !(-180.0..180.0).contains(&v) => Some(Rule::LonRange),
        a if a.is_cyclical() && !(0.0..360.0).contains(&v) => Some(Rule::CyclicalRange),
        a if a.is_continuous() && v < 0.0 => Some(Rule::Negative),
        a if a.is_discrete() && (v < 0.0 || v.fract() != 0.0 || v >= categories.get(a) as f64) => Some(Rule::Category),
        _ => None,
    }
}

/// Every broken sequence invariant, in `(t, attribute)` order.
pub fn validate(seq: &RecordSequence, categories: CategoryCounts) -> Vec<Violation> {
    let mut out = Vec::new();
    if seq.len() < 2 {
        out.push(Violation {
            t: 0,
            attribute: None,
            rule: Rule::TooShort,
        });
    }
    let mut last_time: Option<f64> = None;
    for t in 0..seq.len() {
        for attr in AttributeId::ALL {
            let v = seq.value(t, attr);
            if seq.targets.get(t).is_some_and(|r| r[attr.index()]) && v.is_none() {
                out.push(Violation {
                    t,
                    attribute: Some(attr),
                    rule: Rule::TargetNotObserved,
                });
            }
            let Some(v) = v else { continue };
            if let Some(rule) = check_value(attr, v, categories) {
                out.push(Violation {
                    t,
                    attribute: Some(attr),
                    rule,
                });
            }
            if attr == AttributeId::Time {
                if matches!(last_time, Some(prev) if v <= prev) {
                    out.push(Violation {
                        t,
                        attribute: Some(attr),
                        rule: Rule::TimeNotIncreasing,
                    });
                }
                last_time = Some(v);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use AttributeId::*;

    fn row() -> Row {
        let mut r: Row = [Some(1.0); N_ATTR];
        r[Lon.index()] = Some(10.0);
        r[Lat.index()] = Some(55.0);
        r[Time.index()] = Some(0.0);
        r
    }

    fn seq(n: usize) -> RecordSequence {
        let values = (0..n)
            .map(|t| {
                let mut r = row();
                r[Time.index()] = Some(60.0 * t as f64);
                r
            })
            .collect();
        RecordSequence::new("219000001", values)
    }

    #[test]
    fn taxonomy_lookups() {
        let tax = taxonomy();
        assert_eq!(tax[Speed.index()].time_scale, 2);
        assert_eq!(tax[VesselType.index()].type_class, TypeClass::Discrete);
        assert_eq!(tax.iter().filter(|s| s.time_scale <= 2).count(), 6);
        for s in tax {
            assert_eq!(s.category_count > 0, s.type_class == TypeClass::Discrete);
        }
    }

    #[test]
    fn taxonomy_is_scale_sorted() {
        let scales: Vec<_> = AttributeId::ALL.iter().map(|a| a.time_scale()).collect();
        assert!(scales.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn feature_counts() {
        assert_eq!(feature_count(1).unwrap(), 3);
        assert_eq!(feature_count(5).unwrap(), 12);
        let total: usize = (1..=5).map(|l| feature_count(l).unwrap()).sum();
        // each attribute at scale k contributes 5 + 1 - k features
        let oracle: usize = AttributeId::ALL.iter().map(|a| 6 - a.time_scale()).sum();
        assert_eq!(total, oracle);
        assert_eq!(total, 37);
        assert!(feature_count(0).is_err());
        assert!(feature_count(6).is_err());
    }

    #[test]
    fn constant_voyage_is_one_segment() {
        let s = seq(10);
        assert_eq!(segment_voyages(&s).segments, vec![0..10]);
    }

    #[test]
    fn draught_change_splits() {
        let mut s = seq(10);
        for t in 4..10 {
            s.values[t][Draught.index()] = Some(7.0);
        }
        assert_eq!(segment_voyages(&s).segments, vec![0..4, 4..10]);
    }

    #[test]
    fn two_change_points_brute_force() {
        let mut s = seq(10);
        for t in 3..10 {
            s.values[t][Draught.index()] = Some(7.0);
        }
        for t in 7..10 {
            s.values[t][Cargo.index()] = Some(2.0);
        }
        // oracle: a boundary at t whenever (d, χ) differs from t-1
        let mut oracle = vec![0];
        for t in 1..10 {
            if s.values[t][Draught.index()] != s.values[t - 1][Draught.index()]
                || s.values[t][Cargo.index()] != s.values[t - 1][Cargo.index()]
            {
                oracle.push(t);
            }
        }
        let segs = segment_voyages(&s).segments;
        assert_eq!(segs.len(), 3);
        assert_eq!(segs.iter().map(|r| r.start).collect::<Vec<_>>(), oracle);
    }

    #[test]
    fn unobserved_runs_inherit_segment() {
        let mut s = seq(8);
        for t in 2..6 {
            s.values[t][Draught.index()] = None;
        }
        s.values[6][Draught.index()] = Some(3.0);
        s.values[7][Draught.index()] = Some(3.0);
        assert_eq!(segment_voyages(&s).segments, vec![0..6, 6..8]);
    }

    #[test]
    fn validate_reports_violations() {
        let cats = CategoryCounts::default();
        assert!(validate(&seq(4), cats).is_empty());

        let mut s = seq(4);
        s.values[1][Heading.index()] = Some(360.0);
        let v = validate(&s, cats);
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].rule.to_string(), "cyclical out of [0,360)");

        let mut s = seq(4);
        s.values[2][Speed.index()] = None;
        s.targets[2][Speed.index()] = true;
        let v = validate(&s, cats);
        assert_eq!(v[0].rule.to_string(), "target not observed");
        assert_eq!((v[0].t, v[0].attribute), (2, Some(Speed)));

        let mut s = seq(4);
        s.values[3][Time.index()] = Some(60.0);
        assert_eq!(validate(&s, cats)[0].rule, Rule::TimeNotIncreasing);
    }
}
