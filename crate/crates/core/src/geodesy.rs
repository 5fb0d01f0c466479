//! Great-circle distance and the accuracy-at-threshold evaluation protocol.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geocell::{LatLon, EARTH_RADIUS_KM};

/// Standard evaluation thresholds in kilometres.
pub const STANDARD_THRESHOLDS_KM: [f64; 5] = [1.0, 25.0, 200.0, 750.0, 2500.0];

/// Haversine distance on a sphere of radius 6371 km.
pub fn haversine_km(a: LatLon, b: LatLon) -> f64 {
    let (lat1, lat2) = (a.lat().to_radians(), b.lat().to_radians());
    let dlat = lat2 - lat1;
    let dlon = (b.lon() - a.lon()).to_radians();
    let h = (dlat / 2.0).sin().powi(2) + lat1.cos() * lat2.cos() * (dlon / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_KM * h.sqrt().min(1.0).asin()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyReport {
    /// (threshold km, fraction of predictions within it), in the order given.
    pub acc_at_km: Vec<(f64, f64)>,
    pub median_error_km: f64,
    pub n: usize,
}

impl AccuracyReport {
    pub fn accuracy_at(&self, threshold_km: f64) -> Option<f64> {
        self.acc_at_km.iter().find(|(t, _)| *t == threshold_km).map(|&(_, a)| a)
    }

    /// Flat CSV: header `metric,value,n`, one row per threshold then the median.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "metric,value,n")?;
        for (t, a) in &self.acc_at_km {
            writeln!(w, "acc@{}km,{:.6},{}", fmt_threshold(*t), a, self.n)?;
        }
        writeln!(w, "median_km,{:.6},{}", self.median_error_km, self.n)?;
        Ok(())
    }
}

fn fmt_threshold(t: f64) -> String {
    if t.fract() == 0.0 {
        format!("{}", t as i64)
    } else {
        format!("{t}")
    }
}

/// Median of a non-empty slice; even lengths average the two central values.
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Accuracy at each threshold (inclusive) and median error over paired lists.
pub fn evaluate(preds: &[LatLon], truths: &[LatLon], thresholds: &[f64]) -> Result<AccuracyReport> {
    if preds.is_empty() {
        return Err(Error::invalid("evaluate needs at least one prediction"));
    }
    if preds.len() != truths.len() {
        return Err(Error::invalid(format!(
            "{} predictions vs {} ground truths",
            preds.len(),
            truths.len()
        )));
    }
    let errors: Vec<f64> = preds.iter().zip(truths).map(|(&p, &t)| haversine_km(p, t)).collect();
    Ok(report_from_errors(&errors, thresholds))
}

/// Same as [`evaluate`] when the per-query errors are already known.
pub fn report_from_errors(errors: &[f64], thresholds: &[f64]) -> AccuracyReport {
    let n = errors.len();
    let acc_at_km = thresholds
        .iter()
        .map(|&t| {
            let hits = errors.iter().filter(|&&e| e <= t).count();
            (t, hits as f64 / n as f64)
        })
        .collect();
    AccuracyReport {
        acc_at_km,
        median_error_km: median(errors),
        n,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ll(lat: f64, lon: f64) -> LatLon {
        LatLon::new(lat, lon).unwrap()
    }

    #[test]
    fn zero_and_antipodal() {
        assert_eq!(haversine_km(ll(12.0, 34.0), ll(12.0, 34.0)), 0.0);
        let d = haversine_km(ll(0.0, 0.0), ll(0.0, 180.0));
        assert!((d - std::f64::consts::PI * 6371.0).abs() < 1e-9);
    }

    #[test]
    fn perfect_predictions() {
        let pts = vec![ll(1.0, 2.0), ll(-40.0, 100.0), ll(70.0, -20.0)];
        let r = evaluate(&pts, &pts, &STANDARD_THRESHOLDS_KM).unwrap();
        assert!(r.acc_at_km.iter().all(|&(_, a)| a == 1.0));
        assert_eq!(r.median_error_km, 0.0);
        assert_eq!(r.n, 3);
    }

    #[test]
    fn threshold_is_inclusive() {
        let truth = ll(0.0, 0.0);
        let pred = ll(0.0, 1.0);
        let d = haversine_km(pred, truth);
        let r = evaluate(&[pred], &[truth], &[d]).unwrap();
        assert_eq!(r.acc_at_km[0].1, 1.0);
    }

    #[test]
    fn manual_four_point_set() {
        // Errors along the equator: 1 degree of longitude = 6371*pi/180 km.
        let km_per_deg = 6371.0 * std::f64::consts::PI / 180.0;
        let truths = vec![ll(0.0, 0.0); 4];
        let preds = vec![ll(0.0, 0.0), ll(0.0, 0.1), ll(0.0, 1.0), ll(0.0, 10.0)];
        let r = evaluate(&preds, &truths, &[1.0, 25.0, 200.0, 750.0, 2500.0]).unwrap();
        // errors: 0, 11.12, 111.19, 1111.95 km
        let acc: Vec<f64> = r.acc_at_km.iter().map(|x| x.1).collect();
        assert_eq!(acc, vec![0.25, 0.5, 0.75, 0.75, 1.0]);
        let expected_median = (0.1 * km_per_deg + 1.0 * km_per_deg) / 2.0;
        assert!((r.median_error_km - expected_median).abs() < 1e-6);
    }

    #[test]
    fn empty_and_mismatched_inputs() {
        assert!(evaluate(&[], &[], &[1.0]).is_err());
        assert!(evaluate(&[ll(0.0, 0.0)], &[], &[1.0]).is_err());
    }

    #[test]
    fn csv_layout() {
        let r = report_from_errors(&[0.5, 30.0], &[1.0, 25.0]);
        let mut buf = Vec::new();
        r.write_csv(&mut buf).unwrap();
        let s = String::from_utf8(buf).unwrap();
        assert_eq!(
            s,
            "metric,value,n\nacc@1km,0.500000,2\nacc@25km,0.500000,2\nmedian_km,15.250000,2\n"
        );
    }

    fn coord() -> impl Strategy<Value = LatLon> {
        (-90.0f64..=90.0, -180.0f64..180.0).prop_map(|(a, b)| LatLon::new(a, b).unwrap())
    }

    proptest! {
        #[test]
        fn symmetric(a in coord(), b in coord()) {
            prop_assert_eq!(haversine_km(a, b), haversine_km(b, a));
        }

        #[test]
        fn triangle_inequality(a in coord(), b in coord(), c in coord()) {
            prop_assert!(haversine_km(a, c) <= haversine_km(a, b) + haversine_km(b, c) + 1e-9);
        }

        #[test]
        fn permutation_invariant_and_monotone(
            pairs in proptest::collection::vec((coord(), coord()), 1..40),
            rot in 0usize..40,
        ) {
            let (p, t): (Vec<_>, Vec<_>) = pairs.iter().cloned().unzip();
            let r1 = evaluate(&p, &t, &STANDARD_THRESHOLDS_KM).unwrap();
            let k = rot % pairs.len();
            let mut rotated = pairs.clone();
            rotated.rotate_left(k);
            let (p2, t2): (Vec<_>, Vec<_>) = rotated.into_iter().unzip();
            let r2 = evaluate(&p2, &t2, &STANDARD_THRESHOLDS_KM).unwrap();
            prop_assert_eq!(&r1, &r2);
            for w in r1.acc_at_km.windows(2) {
                prop_assert!(w[0].1 <= w[1].1);
            }
        }
    }
}
