//! Threshold accuracy on great-circle distance.

use std::collections::{BTreeMap, HashMap};
use std::io::Read;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geodesy::{haversine_km, GeoPoint};

pub const DEFAULT_THRESHOLDS_KM: [f64; 5] = [1.0, 25.0, 200.0, 750.0, 2500.0];
pub const SCALE_LABELS: [&str; 5] = ["Street", "City", "Region", "Country", "Continent"];

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no records to evaluate")]
    Empty,
    #[error("thresholds must be finite, nonnegative and strictly increasing: {0:?}")]
    Thresholds(Vec<f64>),
    #[error("unknown report format {0:?} (expected text, csv or json)")]
    Format(String),
    #[error("{} query ids have no match: {}", .0.len(), .0.join(", "))]
    Unmatched(Vec<String>),
    #[error("duplicate query id {id:?} in {path}")]
    Duplicate { path: String, id: String },
    #[error("{path}: {msg}")]
    Parse { path: String, msg: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRecord {
    pub query_id: String,
    pub predicted: GeoPoint,
    pub truth: GeoPoint,
    pub gcd_km: f64,
}

impl EvalRecord {
    pub fn new(query_id: impl Into<String>, predicted: GeoPoint, truth: GeoPoint) -> Self {
        Self {
            query_id: query_id.into(),
            predicted,
            truth,
            gcd_km: haversine_km(predicted, truth),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ThresholdRow {
    pub label: String,
    pub threshold_km: f64,
    pub within: usize,
    pub fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ThresholdReport {
    pub count: usize,
    pub rows: Vec<ThresholdRow>,
}

impl ThresholdReport {
    pub fn thresholds(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.threshold_km).collect()
    }

    pub fn fractions(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.fraction).collect()
    }

    /// Fraction at the given threshold, if it is part of the report.
    pub fn fraction_at(&self, km: f64) -> Option<f64> {
        self.rows.iter().find(|r| r.threshold_km == km).map(|r| r.fraction)
    }
}

fn label_for(km: f64, thresholds: &[f64]) -> String {
    if thresholds == DEFAULT_THRESHOLDS_KM {
        let i = thresholds.iter().position(|&t| t == km).unwrap_or(0);
        SCALE_LABELS[i].to_string()
    } else {
        format!("{km}km")
    }
}

pub fn check_thresholds(thresholds: &[f64]) -> Result<(), EvalError> {
    let ok = !thresholds.is_empty()
        && thresholds.iter().all(|t| t.is_finite() && *t >= 0.0)
        && thresholds.windows(2).all(|w| w[0] < w[1]);
    if ok {
        Ok(())
    } else {
        Err(EvalError::Thresholds(thresholds.to_vec()))
    }
}

/// Fraction of records with `gcd_km ≤ t` for each threshold `t`.
pub fn gcd_accuracy(records: &[EvalRecord], thresholds: &[f64]) -> Result<ThresholdReport, EvalError> {
    check_thresholds(thresholds)?;
    if records.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut dists: Vec<f64> = records.iter().map(|r| r.gcd_km).collect();
    dists.sort_by(f64::total_cmp);
    let n = dists.len();
    let rows = thresholds
        .iter()
        .map(|&t| {
            let within = dists.partition_point(|&d| d <= t);
            ThresholdRow {
                label: label_for(t, thresholds),
                threshold_km: t,
                within,
                fraction: within as f64 / n as f64,
            }
        })
        .collect();
    Ok(ThresholdReport { count: n, rows })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Text,
    Csv,
    Json,
}

impl FromStr for ReportFormat {
    type Err = EvalError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "text" => Ok(Self::Text),
            "csv" => Ok(Self::Csv),
            "json" => Ok(Self::Json),
            other => Err(EvalError::Format(other.to_string())),
        }
    }
}

/// Percentages are printed with one decimal in text form.
pub fn render_report(report: &ThresholdReport, format: ReportFormat) -> String {
    match format {
        ReportFormat::Text => {
            let head: Vec<String> = report
                .rows
                .iter()
                .map(|r| format!("{} {}km", r.label, r.threshold_km))
                .collect();
            let widths: Vec<usize> = head.iter().map(|h| h.len().max(5)).collect();
            let mut out = String::new();
            let line: Vec<String> = head.iter().zip(&widths).map(|(h, w)| format!("{h:>w$}")).collect();
            out.push_str(&line.join("  "));
            out.push('\n');
            let vals: Vec<String> = report
                .rows
                .iter()
                .zip(&widths)
                .map(|(r, w)| format!("{:>w$.1}", 100.0 * r.fraction))
                .collect();
            out.push_str(&vals.join("  "));
            out.push_str(&format!("\n(n = {})\n", report.count));
            out
        }
        ReportFormat::Csv => {
            let mut out = String::from("label,threshold_km,within,count,fraction\n");
            for r in &report.rows {
                out.push_str(&format!(
                    "{},{},{},{},{}\n",
                    r.label, r.threshold_km, r.within, report.count, r.fraction
                ));
            }
            out
        }
        ReportFormat::Json => {
            let mut s = serde_json::to_string_pretty(report).expect("report serializes");
            s.push('\n');
            s
        }
    }
}

#[derive(Debug, Deserialize)]
struct LocationRow {
    query_id: String,
    lat: f64,
    lon: f64,
}

/// Reads `query_id,lat,lon` rows keyed by id.
pub fn read_locations_csv(reader: impl Read, path: &str) -> Result<BTreeMap<String, GeoPoint>, EvalError> {
    let mut rdr = csv::Reader::from_reader(reader);
    let mut out = BTreeMap::new();
    for (line, row) in rdr.deserialize::<LocationRow>().enumerate() {
        let row = row.map_err(|e| EvalError::Parse {
            path: path.to_string(),
            msg: e.to_string(),
        })?;
        let p = GeoPoint::new(row.lat, row.lon).map_err(|e| EvalError::Parse {
            path: path.to_string(),
            msg: format!("row {}: {e}", line + 2),
        })?;
        if out.insert(row.query_id.clone(), p).is_some() {
            return Err(EvalError::Duplicate {
                path: path.to_string(),
                id: row.query_id,
            });
        }
    }
    Ok(out)
}

pub fn read_locations_file(path: &Path) -> Result<BTreeMap<String, GeoPoint>, EvalError> {
    let name = path.display().to_string();
    let f = std::fs::File::open(path).map_err(|source| EvalError::Io {
        path: name.clone(),
        source,
    })?;
    read_locations_csv(std::io::BufReader::new(f), &name)
}

pub fn write_locations_csv<'a>(rows: impl IntoIterator<Item = (&'a str, GeoPoint)>) -> String {
    let mut out = String::from("query_id,lat,lon\n");
    for (id, p) in rows {
        out.push_str(&format!("{id},{},{}\n", p.lat(), p.lon()));
    }
    out
}

/// Pairs predictions with ground truth. Ids present on only one side are an
/// error listing all of them.
pub fn join_records(
    predictions: &BTreeMap<String, GeoPoint>,
    truth: &BTreeMap<String, GeoPoint>,
) -> Result<Vec<EvalRecord>, EvalError> {
    let unmatched: Vec<String> = predictions
        .keys()
        .filter(|k| !truth.contains_key(*k))
        .chain(truth.keys().filter(|k| !predictions.contains_key(*k)))
        .cloned()
        .collect();
    if !unmatched.is_empty() {
        return Err(EvalError::Unmatched(unmatched));
    }
    let truth: HashMap<_, _> = truth.iter().collect();
    Ok(predictions
        .iter()
        .map(|(id, &p)| EvalRecord::new(id.clone(), p, *truth[id]))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn pt(lat: f64, lon: f64) -> GeoPoint {
        GeoPoint::new(lat, lon).unwrap()
    }

    /// Point `km` east of the origin along the equator.
    fn east_of_origin(km: f64) -> GeoPoint {
        pt(0.0, (km / 6371.0).to_degrees())
    }

    #[test]
    fn exact_predictions_score_everything() {
        let recs: Vec<EvalRecord> = (0..10).map(|i| EvalRecord::new(i.to_string(), pt(i as f64, 5.0), pt(i as f64, 5.0))).collect();
        let r = gcd_accuracy(&recs, &DEFAULT_THRESHOLDS_KM).unwrap();
        assert_eq!(r.fractions(), vec![1.0; 5]);
    }

    #[test]
    fn ten_km_error_profile() {
        let r = gcd_accuracy(&[EvalRecord::new("q", east_of_origin(10.0), pt(0.0, 0.0))], &DEFAULT_THRESHOLDS_KM).unwrap();
        assert_eq!(r.fractions(), vec![0.0, 1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn boundary_is_inclusive() {
        let mut rec = EvalRecord::new("q", pt(0.0, 0.0), pt(0.0, 0.0));
        rec.gcd_km = 25.0;
        let r = gcd_accuracy(&[rec], &DEFAULT_THRESHOLDS_KM).unwrap();
        assert_eq!(r.fractions(), vec![0.0, 1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(matches!(gcd_accuracy(&[], &DEFAULT_THRESHOLDS_KM), Err(EvalError::Empty)));
        let rec = EvalRecord::new("q", pt(0.0, 0.0), pt(0.0, 0.0));
        assert!(matches!(gcd_accuracy(&[rec.clone()], &[5.0, 5.0]), Err(EvalError::Thresholds(_))));
        assert!(matches!(gcd_accuracy(&[rec], &[]), Err(EvalError::Thresholds(_))));
        assert!(matches!("xml".parse::<ReportFormat>(), Err(EvalError::Format(_))));
    }

    fn report_row(fr: [f64; 5]) -> ThresholdReport {
        ThresholdReport {
            count: 1000,
            rows: fr
                .iter()
                .zip(DEFAULT_THRESHOLDS_KM)
                .enumerate()
                .map(|(i, (&f, t))| ThresholdRow {
                    label: SCALE_LABELS[i].into(),
                    threshold_km: t,
                    within: (f * 1000.0).round() as usize,
                    fraction: f,
                })
                .collect(),
        }
    }

    #[test]
    fn text_table_reads_like_published_row() {
        let r = report_row([0.270, 0.544, 0.700, 0.844, 0.932]);
        let text = render_report(&r, ReportFormat::Text);
        let mut lines = text.lines();
        let head = lines.next().unwrap();
        let order: Vec<usize> = SCALE_LABELS.iter().map(|l| head.find(l).unwrap()).collect();
        assert!(order.windows(2).all(|w| w[0] < w[1]));
        let vals: Vec<&str> = lines.next().unwrap().split_whitespace().collect();
        assert_eq!(vals, ["27.0", "54.4", "70.0", "84.4", "93.2"]);
    }

    #[test]
    fn csv_and_json_renderings() {
        let r = report_row([0.1, 0.2, 0.3, 0.4, 0.5]);
        let csv = render_report(&r, ReportFormat::Csv);
        assert_eq!(csv.lines().count(), 6);
        assert!(csv.starts_with("label,threshold_km,within,count,fraction\n"));
        let json = render_report(&r, ReportFormat::Json);
        let back: ThresholdReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, r);
        assert_eq!(render_report(&back, ReportFormat::Json), json);
    }

    #[test]
    fn csv_join() {
        let preds = read_locations_csv("query_id,lat,lon\na,1,2\nb,3,4\n".as_bytes(), "p").unwrap();
        let truth = read_locations_csv("query_id,lat,lon\nb,3,4\na,1,2\n".as_bytes(), "t").unwrap();
        let recs = join_records(&preds, &truth).unwrap();
        assert!(recs.iter().all(|r| r.gcd_km == 0.0));
        let extra = read_locations_csv("query_id,lat,lon\na,1,2\nc,0,0\n".as_bytes(), "t").unwrap();
        match join_records(&preds, &extra) {
            Err(EvalError::Unmatched(ids)) => assert_eq!(ids, vec!["b".to_string(), "c".to_string()]),
            other => panic!("{other:?}"),
        }
        assert!(matches!(
            read_locations_csv("query_id,lat,lon\na,1,2\na,1,2\n".as_bytes(), "d"),
            Err(EvalError::Duplicate { .. })
        ));
        assert!(matches!(read_locations_csv("query_id,lat,lon\na,95,2\n".as_bytes(), "d"), Err(EvalError::Parse { .. })));
        let written = write_locations_csv(preds.iter().map(|(k, v)| (k.as_str(), *v)));
        assert_eq!(read_locations_csv(written.as_bytes(), "w").unwrap(), preds);
    }

    fn random_records(seed: u64, n: usize) -> Vec<EvalRecord> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let t = pt(rng.random_range(-90.0..=90.0), rng.random_range(-180.0..180.0));
                let scale = 10f64.powf(rng.random_range(-1.0..1.5));
                let p = pt(
                    (t.lat() + rng.random_range(-scale..scale)).clamp(-90.0, 90.0),
                    ((t.lon() + rng.random_range(-scale..scale)) + 540.0).rem_euclid(360.0) - 180.0,
                );
                EvalRecord::new(i.to_string(), p, t)
            })
            .collect()
    }

    proptest! {
        #[test]
        fn matches_naive_loop_and_is_monotone(seed in any::<u64>(), n in 1usize..300) {
            let recs = random_records(seed, n);
            let r = gcd_accuracy(&recs, &DEFAULT_THRESHOLDS_KM).unwrap();
            for row in &r.rows {
                let mut c = 0;
                for rec in &recs {
                    if rec.gcd_km <= row.threshold_km {
                        c += 1;
                    }
                }
                prop_assert_eq!(row.within, c);
                prop_assert!((0.0..=1.0).contains(&row.fraction));
            }
            prop_assert!(r.fractions().windows(2).all(|w| w[0] <= w[1]));
            let mut rev = recs.clone();
            rev.reverse();
            prop_assert_eq!(gcd_accuracy(&rev, &DEFAULT_THRESHOLDS_KM).unwrap(), r);
        }
    }
}
