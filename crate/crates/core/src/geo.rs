//! Spherical distance and angle helpers.

use crate::error::{Error, Result};
use crate::types::{AttributeId, RecordSequence};

/// Great-circle central angle (radians) between two `(lon°, lat°)` points.
///
/// The square root argument is clamped to `[0, 1]` before `asin`.
pub fn haversine(lon1: f64, lat1: f64, lon2: f64, lat2: f64) -> f64 {
    let (p1, p2) = (lat1.to_radians(), lat2.to_radians());
    let dphi = p2 - p1;
    let dlam = (lon2 - lon1).to_radians();
    let a = (dphi / 2.0).sin().powi(2) + p1.cos() * p2.cos() * (dlam / 2.0).sin().powi(2);
    2.0 * a.clamp(0.0, 1.0).sqrt().asin()
}

/// Wraps degrees into `[0, 360)`.
pub fn wrap_degrees(x: f64) -> f64 {
    let w = x.rem_euclid(360.0);
    // rem_euclid rounds tiny negatives up to exactly 360
    if w >= 360.0 {
        0.0
    } else {
        w
    }
}

/// Wraps a longitude into `[-180, 180)`.
pub fn wrap_longitude(x: f64) -> f64 {
    let w = (x + 180.0).rem_euclid(360.0) - 180.0;
    if w >= 180.0 {
        -180.0
    } else {
        w
    }
}

/// Signed difference `b − a` wrapped into `[-180, 180)`.
pub fn angular_delta(a: f64, b: f64) -> f64 {
    (b - a + 180.0).rem_euclid(360.0) - 180.0
}

/// Absolute wrapped angular error `min(|Δ|, 360 − |Δ|)`.
pub fn angular_error(a: f64, b: f64) -> f64 {
    let d = (a - b).abs().rem_euclid(360.0);
    d.min(360.0 - d)
}

/// Mean of `(lon, lat)` points; longitudes are unwrapped around the first
/// point so that a cluster straddling the antimeridian averages correctly.
/// The result may lie slightly outside `[-180, 180)`.
pub fn mean_position(points: &[(f64, f64)]) -> Option<(f64, f64)> {
    let &(lon0, _) = points.first()?;
    let n = points.len() as f64;
    let lon = points.iter().map(|&(l, _)| lon0 + angular_delta(lon0, l)).sum::<f64>() / n;
    let lat = points.iter().map(|&(_, p)| p).sum::<f64>() / n;
    Some((lon, lat))
}

fn visible_pair(seq: &RecordSequence, t: usize) -> Option<(f64, f64)> {
    Some((
        seq.visible_value(t, AttributeId::Lon)?,
        seq.visible_value(t, AttributeId::Lat)?,
    ))
}

/// Base estimate for every step: the mean of visible positions (both
/// coordinates visible) within `window` steps, falling back to the mean of all
/// visible positions of the sequence.
pub fn coordinate_bases(seq: &RecordSequence, window: usize) -> Result<Vec<(f64, f64)>> {
    let pairs: Vec<Option<(f64, f64)>> = (0..seq.len()).map(|t| visible_pair(seq, t)).collect();
    let all: Vec<(f64, f64)> = pairs.iter().flatten().copied().collect();
    let global = mean_position(&all)
        .ok_or_else(|| Error::invalid(format!("no coordinate anchor in sequence of vessel {}", seq.vessel_id)))?;
    Ok((0..seq.len())
        .map(|i| {
            let lo = i.saturating_sub(window);
            let hi = (i + window + 1).min(seq.len());
            let near: Vec<(f64, f64)> = pairs[lo..hi].iter().flatten().copied().collect();
            mean_position(&near).unwrap_or(global)
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    #[test]
    fn haversine_reference_points() {
        assert_eq!(haversine(10.0, 55.0, 10.0, 55.0), 0.0);
        assert!((haversine(0.0, 0.0, 180.0, 0.0) - PI).abs() < 1e-12);
        assert!((haversine(0.0, 0.0, 0.0, 90.0) - PI / 2.0).abs() < 1e-12);
        assert!((haversine(179.5, 0.0, -179.5, 0.0) - 1f64.to_radians()).abs() < 1e-12);
    }

    #[test]
    fn angular_error_wraps() {
        assert_eq!(angular_error(359.0, 1.0), 2.0);
        assert_eq!(angular_error(1.0, 359.0), 2.0);
        assert_eq!(angular_error(90.0, 270.0), 180.0);
    }

    #[test]
    fn mean_across_antimeridian() {
        let (lon, lat) = mean_position(&[(179.0, 1.0), (-179.0, 3.0)]).unwrap();
        assert!((wrap_longitude(lon) - -180.0).abs() < 1e-12 || (lon - 180.0).abs() < 1e-12);
        assert_eq!(lat, 2.0);
        assert_eq!(mean_position(&[(0.0, 0.0), (2.0, 2.0)]), Some((1.0, 1.0)));
    }
}
