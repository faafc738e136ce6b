//! Per-household monthly aggregation and the naive baselines it feeds:
//! month-by-month median speeds per ISP and the household test-count CCDF.
//!
//! Aggregating to one value per household per month is what gives each
//! house a single vote in the ISP aggregate, regardless of how many tests
//! it ran.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::ingest::{is_peak, OsClass, TestRecord};
use crate::stats;

/// Per-(household, month) aggregate of test records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HouseholdMonth {
    pub client_ip: String,
    pub isp: String,
    pub country: String,
    /// Calendar month key `YYYY-MM` (UTC).
    pub year_month: String,
    pub test_count: u64,
    /// Arithmetic mean of download speeds in the month.
    pub mean_speed_mbps: f64,
    pub off_peak_test_count: u64,
    pub mean_min_rtt_ms: f64,
    pub mean_rwnd_bytes: f64,
    pub mean_mss_bytes: f64,
    /// Most frequent OS class; ties break in declaration order
    /// (modern, then legacy, then other).
    pub modal_os_class: OsClass,
}

impl HouseholdMonth {
    /// Calendar year parsed from the month key.
    pub fn year(&self) -> i32 {
        self.year_month
            .split('-')
            .next()
            .and_then(|y| y.parse().ok())
            .unwrap_or(0)
    }
}

/// Collapse records into one [`HouseholdMonth`] per (ip, month).
///
/// Output is sorted by (ip, month); the sum of `test_count`s equals the
/// number of input records.
pub fn aggregate_monthly(records: &[TestRecord]) -> Vec<HouseholdMonth> {
    let mut groups: BTreeMap<(String, String), Vec<&TestRecord>> = BTreeMap::new();
    for record in records {
        groups
            .entry((record.client_ip.clone(), record.year_month()))
            .or_default()
            .push(record);
    }
    groups
        .into_iter()
        .map(|((client_ip, year_month), tests)| {
            let n = tests.len() as f64;
            let mut os_counts = [0u64; 3];
            for t in &tests {
                os_counts[t.os_class.code() as usize] += 1;
            }
            // max_by_key keeps the last maximum, so listing classes in
            // reverse precedence makes ties resolve to modern, then
            // legacy, then other.
            let modal = [
                OsClass::Other,
                OsClass::LegacyNoAutotuning,
                OsClass::ModernAutotuning,
            ]
            .into_iter()
            .max_by_key(|c| os_counts[c.code() as usize])
            .unwrap();
            HouseholdMonth {
                isp: tests[0].isp.clone(),
                country: tests[0].country.clone(),
                client_ip,
                year_month,
                test_count: tests.len() as u64,
                mean_speed_mbps: tests.iter().map(|t| t.download_mbps).sum::<f64>() / n,
                off_peak_test_count: tests.iter().filter(|t| !is_peak(t.local_hour)).count()
                    as u64,
                mean_min_rtt_ms: tests.iter().map(|t| t.min_rtt_ms).sum::<f64>() / n,
                mean_rwnd_bytes: tests.iter().map(|t| t.rwnd_bytes as f64).sum::<f64>() / n,
                mean_mss_bytes: tests.iter().map(|t| t.mss_bytes as f64).sum::<f64>() / n,
                modal_os_class: modal,
            }
        })
        .collect()
}

/// Month-by-month median of household mean speeds for one ISP.
///
/// The median is across households, not tests; an absent ISP yields an
/// empty series.
pub fn monthly_median_series(
    agg: &[HouseholdMonth],
    isp: &str,
    country: &str,
) -> Vec<(String, f64)> {
    let mut by_month: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for hm in agg {
        if hm.isp == isp && hm.country == country {
            by_month
                .entry(&hm.year_month)
                .or_default()
                .push(hm.mean_speed_mbps);
        }
    }
    by_month
        .into_iter()
        .filter_map(|(month, speeds)| stats::median(&speeds).map(|m| (month.to_string(), m)))
        .collect()
}

/// CCDF of per-household annual test counts: fraction of households whose
/// count strictly exceeds each threshold.
///
/// Thresholds are 0 plus every distinct observed count, so the output is a
/// complete step function: 1 at threshold 0, monotonically non-increasing,
/// 0 at the maximum count.
pub fn test_count_ccdf(agg: &[HouseholdMonth], year: Option<i32>) -> Vec<(u64, f64)> {
    let mut counts: BTreeMap<&str, u64> = BTreeMap::new();
    for hm in agg {
        if year.is_none_or(|y| hm.year() == y) {
            *counts.entry(&hm.client_ip).or_default() += hm.test_count;
        }
    }
    let total = counts.len();
    if total == 0 {
        return Vec::new();
    }
    let mut sorted: Vec<u64> = counts.values().copied().collect();
    sorted.sort_unstable();
    let mut thresholds: Vec<u64> = vec![0];
    thresholds.extend(sorted.iter().copied());
    thresholds.dedup();
    thresholds
        .into_iter()
        .map(|t| {
            let exceeding = sorted.iter().filter(|&&c| c > t).count();
            (t, exceeding as f64 / total as f64)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(ip: &str, ts: i64, hour: u8, speed: f64, os: OsClass) -> TestRecord {
        TestRecord {
            client_ip: ip.to_string(),
            timestamp_utc: ts,
            local_hour: hour,
            isp: "Telstra".into(),
            country: "AU".into(),
            download_mbps: speed,
            min_rtt_ms: 10.0,
            mss_bytes: 1460,
            rwnd_bytes: 65535,
            os_class: os,
            congestion_count: 2,
            client_limited_frac: 0.1,
        }
    }

    const JAN: i64 = 1452340000; // 2016-01
    const FEB: i64 = 1455018400; // 2016-02

    #[test]
    fn mean_of_three_tests() {
        let records = vec![
            record("a", JAN, 10, 10.0, OsClass::Other),
            record("a", JAN + 100, 12, 20.0, OsClass::Other),
            record("a", JAN + 200, 20, 30.0, OsClass::Other),
        ];
        let agg = aggregate_monthly(&records);
        assert_eq!(agg.len(), 1);
        assert_eq!(agg[0].mean_speed_mbps, 20.0);
        assert_eq!(agg[0].test_count, 3);
        assert_eq!(agg[0].off_peak_test_count, 2);
        assert_eq!(agg[0].year_month, "2016-01");
    }

    #[test]
    fn months_partition() {
        let records = vec![
            record("a", JAN, 10, 10.0, OsClass::Other),
            record("a", FEB, 10, 30.0, OsClass::Other),
        ];
        let agg = aggregate_monthly(&records);
        assert_eq!(agg.len(), 2);
        assert_eq!(agg[0].year_month, "2016-01");
        assert_eq!(agg[1].year_month, "2016-02");
    }

    #[test]
    fn heavy_tester_still_one_value_per_month() {
        let mut records = Vec::new();
        for i in 0..1281 {
            records.push(record("heavy", JAN + i, 10, 50.0, OsClass::Other));
        }
        records.push(record("light", JAN, 10, 10.0, OsClass::Other));
        let agg = aggregate_monthly(&records);
        assert_eq!(agg.len(), 2);
        let total: u64 = agg.iter().map(|h| h.test_count).sum();
        assert_eq!(total, 1282);
    }

    #[test]
    fn modal_os_tie_break() {
        let records = vec![
            record("a", JAN, 10, 1.0, OsClass::LegacyNoAutotuning),
            record("a", JAN + 1, 10, 1.0, OsClass::ModernAutotuning),
        ];
        let agg = aggregate_monthly(&records);
        assert_eq!(agg[0].modal_os_class, OsClass::ModernAutotuning);
    }

    #[test]
    fn median_is_per_household() {
        let mut records = vec![
            record("a", JAN, 10, 10.0, OsClass::Other),
            record("b", JAN, 10, 20.0, OsClass::Other),
            record("c", JAN, 10, 90.0, OsClass::Other),
        ];
        let agg = aggregate_monthly(&records);
        let series = monthly_median_series(&agg, "Telstra", "AU");
        assert_eq!(series, vec![("2016-01".to_string(), 20.0)]);

        // Duplicating every test of one household does not move the median.
        for _ in 0..100 {
            records.push(record("c", JAN, 10, 90.0, OsClass::Other));
        }
        let agg = aggregate_monthly(&records);
        let series = monthly_median_series(&agg, "Telstra", "AU");
        assert_eq!(series, vec![("2016-01".to_string(), 20.0)]);
    }

    #[test]
    fn median_absent_isp_empty() {
        let agg = aggregate_monthly(&[record("a", JAN, 10, 10.0, OsClass::Other)]);
        assert!(monthly_median_series(&agg, "Nope", "AU").is_empty());
    }

    #[test]
    fn aggregation_is_idempotent_on_singletons() {
        let records = vec![record("a", JAN, 10, 42.5, OsClass::Other)];
        let agg = aggregate_monthly(&records);
        assert_eq!(agg[0].mean_speed_mbps, 42.5);
        let again = aggregate_monthly(&records);
        assert_eq!(agg, again);
    }

    #[test]
    fn ccdf_counts() {
        let mut records = Vec::new();
        for (ip, n) in [("a", 1), ("b", 1), ("c", 2), ("d", 50)] {
            for i in 0..n {
                records.push(record(ip, JAN + i, 10, 10.0, OsClass::Other));
            }
        }
        let agg = aggregate_monthly(&records);
        let ccdf = test_count_ccdf(&agg, None);
        assert_eq!(ccdf[0], (0, 1.0));
        let at5 = ccdf
            .iter()
            .filter(|(t, _)| *t <= 5)
            .next_back()
            .unwrap()
            .1;
        assert_eq!(at5, 0.25);
        for pair in ccdf.windows(2) {
            assert!(pair[1].1 <= pair[0].1);
        }
        assert_eq!(ccdf.last().unwrap().1, 0.0);
    }

    #[test]
    fn ccdf_all_equal_is_step() {
        let records = vec![
            record("a", JAN, 10, 10.0, OsClass::Other),
            record("b", JAN, 10, 10.0, OsClass::Other),
        ];
        let agg = aggregate_monthly(&records);
        let ccdf = test_count_ccdf(&agg, None);
        assert_eq!(ccdf, vec![(0, 1.0), (1, 0.0)]);
    }
}
