//! Household profiling: speed/congestion correlation, single-household
//! isolation, outlier rejection, and access speed-tier estimation.
//!
//! An IP whose download speeds correlate negatively with its congestion
//! counts behaves like a single household; positive correlation indicates
//! address sharing, and those IPs are excluded before estimating the
//! speed-tier as the maximum outlier-filtered speed.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::{is_peak, TestRecord};
use crate::stats;

#[derive(Debug, Error)]
pub enum TiersError {
    #[error("invalid tier bins: {0}")]
    InvalidBins(String),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("profile file {path}, row {row}: {detail}")]
    BadProfile {
        path: String,
        row: usize,
        detail: String,
    },
}

/// Ordered speed-tier bin edges; bins are the half-open intervals
/// `(edges[i], edges[i+1]]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct TierBins {
    edges: Vec<f64>,
}

impl TierBins {
    pub fn new(edges: Vec<f64>) -> Result<Self, TiersError> {
        if edges.len() < 2 {
            return Err(TiersError::InvalidBins("need at least two edges".into()));
        }
        if edges[0] != 0.0 {
            return Err(TiersError::InvalidBins("first edge must be 0".into()));
        }
        if edges.windows(2).any(|w| w[0] >= w[1]) {
            return Err(TiersError::InvalidBins(
                "edges must be strictly increasing".into(),
            ));
        }
        Ok(Self { edges })
    }

    /// The default bin edges 0, 8, 12, 20, 25, 30, 50, 75, 100, 1000 Mbps.
    pub fn default_bins() -> Self {
        Self::new(vec![
            0.0, 8.0, 12.0, 20.0, 25.0, 30.0, 50.0, 75.0, 100.0, 1000.0,
        ])
        .expect("default edges are valid")
    }

    pub fn edges(&self) -> &[f64] {
        &self.edges
    }

    /// Index of the bin containing `v`, or `None` outside (0, max].
    pub fn index_of(&self, v: f64) -> Option<usize> {
        if v <= self.edges[0] || v > *self.edges.last().unwrap() {
            return None;
        }
        Some(self.edges.windows(2).position(|w| v > w[0] && v <= w[1])?)
    }

    /// Bounds of bin `i` as (low, high].
    pub fn bounds(&self, i: usize) -> Option<(f64, f64)> {
        if i + 1 < self.edges.len() {
            Some((self.edges[i], self.edges[i + 1]))
        } else {
            None
        }
    }

    /// Label of the bin containing `v`, formatted `low-high`.
    pub fn label_of(&self, v: f64) -> Option<String> {
        self.index_of(v).map(|i| self.label(i))
    }

    pub fn label(&self, i: usize) -> String {
        format!("{}-{}", self.edges[i], self.edges[i + 1])
    }

    pub fn num_bins(&self) -> usize {
        self.edges.len() - 1
    }

    /// Parse a `low-high` label back into bounds, validating it against
    /// the configured edges.
    pub fn parse_label(&self, label: &str) -> Option<(f64, f64)> {
        let (low, high) = label.split_once('-')?;
        let low: f64 = low.trim().parse().ok()?;
        let high: f64 = high.trim().parse().ok()?;
        self.edges
            .windows(2)
            .any(|w| w[0] == low && w[1] == high)
            .then_some((low, high))
    }
}

impl TryFrom<Vec<f64>> for TierBins {
    type Error = String;

    fn try_from(edges: Vec<f64>) -> Result<Self, Self::Error> {
        TierBins::new(edges).map_err(|e| e.to_string())
    }
}

impl From<TierBins> for Vec<f64> {
    fn from(bins: TierBins) -> Self {
        bins.edges
    }
}

/// Configuration for profiling and tier estimation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TierConfig {
    /// Minimum annual test count per country.
    pub min_tests: BTreeMap<String, u64>,
    /// Threshold for countries not listed in `min_tests`.
    pub default_min_tests: u64,
    /// Require at least one off-peak test for eligibility.
    pub require_off_peak: bool,
    /// Refined estimation: gate on negative speed/congestion correlation
    /// and reject outliers before taking the maximum. When false the tier
    /// is simply the maximum observed speed of an eligible household.
    pub refined: bool,
    /// Two-sided significance for modified Thompson Tau rejection.
    pub tau_alpha: f64,
    pub bins: TierBins,
}

impl Default for TierConfig {
    fn default() -> Self {
        let mut min_tests = BTreeMap::new();
        min_tests.insert("AU".to_string(), 20);
        min_tests.insert("UK".to_string(), 20);
        min_tests.insert("US".to_string(), 50);
        Self {
            min_tests,
            default_min_tests: 20,
            require_off_peak: true,
            refined: true,
            tau_alpha: 0.05,
            bins: TierBins::default_bins(),
        }
    }
}

impl TierConfig {
    pub fn min_tests_for(&self, country: &str) -> u64 {
        self.min_tests
            .get(country)
            .copied()
            .unwrap_or(self.default_min_tests)
    }
}

/// Which gate blocked the tier estimate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IneligibleReason {
    BelowTestCountThreshold,
    NoOffPeakTest,
    /// Positive speed/congestion correlation: the IP looks shared.
    PositiveCorrelation,
    /// Correlation undefined (zero variance); excluded conservatively.
    UndefinedCorrelation,
}

impl fmt::Display for IneligibleReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            IneligibleReason::BelowTestCountThreshold => "below test-count threshold",
            IneligibleReason::NoOffPeakTest => "no off-peak test",
            IneligibleReason::PositiveCorrelation => "positive speed-congestion correlation",
            IneligibleReason::UndefinedCorrelation => "undefined speed-congestion correlation",
        };
        f.write_str(s)
    }
}

impl FromStr for IneligibleReason {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "below test-count threshold" => Ok(Self::BelowTestCountThreshold),
            "no off-peak test" => Ok(Self::NoOffPeakTest),
            "positive speed-congestion correlation" => Ok(Self::PositiveCorrelation),
            "undefined speed-congestion correlation" => Ok(Self::UndefinedCorrelation),
            _ => Err(format!("unknown ineligibility reason: {s}")),
        }
    }
}

/// Per-IP profile over the analysis window.
#[derive(Debug, Clone, PartialEq)]
pub struct HouseholdProfile {
    pub client_ip: String,
    pub isp: String,
    pub country: String,
    pub annual_test_count: u64,
    /// Pearson correlation between download speed and congestion count
    /// over all of the IP's tests in the window; `None` when undefined.
    pub rho: Option<f64>,
    /// Defined and non-positive correlation.
    pub single_household: bool,
    /// Test-count and off-peak gates both passed.
    pub eligible: bool,
    /// First gate that blocked the tier, if any.
    pub reason: Option<IneligibleReason>,
    pub tier_mbps: Option<f64>,
    pub tier_bin: Option<String>,
}

/// Single-household flag from a correlation value: defined and `<= 0`.
pub fn classify_household(rho: Option<f64>) -> bool {
    matches!(rho, Some(r) if r <= 0.0)
}

/// Speed/congestion correlation over a household's tests.
pub fn household_rho(tests: &[&TestRecord]) -> Option<f64> {
    let speeds: Vec<f64> = tests.iter().map(|t| t.download_mbps).collect();
    let congestion: Vec<f64> = tests.iter().map(|t| t.congestion_count as f64).collect();
    stats::pearson_rho(&speeds, &congestion).expect("equal lengths")
}

/// Estimated tier for one household.
#[derive(Debug, Clone, PartialEq)]
pub struct TierEstimate {
    pub tier_mbps: f64,
    pub tier_bin: Option<String>,
    /// Speeds rejected as outliers on the way to the estimate.
    pub rejected_speeds: Vec<f64>,
}

/// Estimate the access speed-tier for one household's tests.
///
/// Eligibility gates apply in order: annual test count at or above the
/// country threshold, at least one off-peak test, and (refined mode) a
/// defined, non-positive speed/congestion correlation. The tier is the
/// maximum speed surviving modified Thompson Tau rejection; in unrefined
/// mode it is the raw maximum.
pub fn estimate_speed_tier(
    tests: &[&TestRecord],
    cfg: &TierConfig,
) -> Result<TierEstimate, IneligibleReason> {
    assert!(!tests.is_empty(), "estimate_speed_tier needs tests");
    let country = &tests[0].country;
    if (tests.len() as u64) < cfg.min_tests_for(country) {
        return Err(IneligibleReason::BelowTestCountThreshold);
    }
    if cfg.require_off_peak && tests.iter().all(|t| is_peak(t.local_hour)) {
        return Err(IneligibleReason::NoOffPeakTest);
    }
    let speeds: Vec<f64> = tests.iter().map(|t| t.download_mbps).collect();
    let (tier, rejected) = if cfg.refined {
        match household_rho(tests) {
            None => return Err(IneligibleReason::UndefinedCorrelation),
            Some(r) if r > 0.0 => return Err(IneligibleReason::PositiveCorrelation),
            Some(_) => {}
        }
        let tau = stats::reject_outliers_tau(&speeds, cfg.tau_alpha);
        let tier = tau
            .retained
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max);
        (tier, tau.rejected)
    } else {
        (speeds.iter().copied().fold(f64::NEG_INFINITY, f64::max), Vec::new())
    };
    Ok(TierEstimate {
        tier_mbps: tier,
        tier_bin: cfg.bins.label_of(tier),
        rejected_speeds: rejected,
    })
}

/// Build per-IP profiles from records, optionally restricted to one
/// calendar year. Output is sorted by IP.
pub fn build_profiles(
    records: &[TestRecord],
    cfg: &TierConfig,
    year: Option<i32>,
) -> Vec<HouseholdProfile> {
    let mut by_ip: BTreeMap<&str, Vec<&TestRecord>> = BTreeMap::new();
    for record in records {
        if year.is_none_or(|y| record.year() == y) {
            by_ip.entry(&record.client_ip).or_default().push(record);
        }
    }
    by_ip
        .into_iter()
        .map(|(ip, tests)| {
            let rho = household_rho(&tests);
            let single_household = classify_household(rho);
            let count_ok = tests.len() as u64 >= cfg.min_tests_for(&tests[0].country);
            let off_peak_ok =
                !cfg.require_off_peak || tests.iter().any(|t| !is_peak(t.local_hour));
            let eligible = count_ok && off_peak_ok;
            let (tier_mbps, tier_bin, reason) = match estimate_speed_tier(&tests, cfg) {
                Ok(estimate) => (estimate.tier_mbps.into(), estimate.tier_bin, None),
                Err(reason) => (None, None, Some(reason)),
            };
            HouseholdProfile {
                client_ip: ip.to_string(),
                isp: tests[0].isp.clone(),
                country: tests[0].country.clone(),
                annual_test_count: tests.len() as u64,
                rho,
                single_household,
                eligible,
                reason,
                tier_mbps,
                tier_bin,
            }
        })
        .collect()
}

/// One bar of a normalized correlation histogram.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RhoBin {
    pub low: f64,
    pub high: f64,
    pub density: f64,
}

/// Histogram of correlation values over [-1, 1], normalized to unit area.
///
/// The requested bin width is adjusted to tile [-1, 1] exactly; the value
/// 1.0 lands in the last bin.
pub fn rho_histogram(rhos: &[f64], bin_width: f64) -> Vec<RhoBin> {
    assert!(bin_width > 0.0 && bin_width <= 2.0, "bad bin width");
    let n_bins = (2.0 / bin_width).round().max(1.0) as usize;
    let width = 2.0 / n_bins as f64;
    let mut counts = vec![0u64; n_bins];
    let mut total = 0u64;
    for &rho in rhos {
        if !(-1.0..=1.0).contains(&rho) {
            continue;
        }
        let idx = (((rho + 1.0) / width) as usize).min(n_bins - 1);
        counts[idx] += 1;
        total += 1;
    }
    (0..n_bins)
        .map(|i| RhoBin {
            low: -1.0 + i as f64 * width,
            high: -1.0 + (i + 1) as f64 * width,
            density: if total == 0 {
                0.0
            } else {
                counts[i] as f64 / (total as f64 * width)
            },
        })
        .collect()
}

/// Correlation histograms grouped by ISP, for profiles with defined rho.
pub fn rho_distribution(
    profiles: &[HouseholdProfile],
    bin_width: f64,
) -> BTreeMap<String, Vec<RhoBin>> {
    let mut by_isp: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for profile in profiles {
        if let Some(rho) = profile.rho {
            by_isp.entry(profile.isp.clone()).or_default().push(rho);
        }
    }
    by_isp
        .into_iter()
        .map(|(isp, rhos)| (isp, rho_histogram(&rhos, bin_width)))
        .collect()
}

/// Month-by-month correlation for one IP's records.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MonthlyRho {
    pub year_month: String,
    pub tests: u64,
    pub rho: Option<f64>,
}

pub fn monthly_rho(records: &[TestRecord], ip: &str) -> Vec<MonthlyRho> {
    let mut by_month: BTreeMap<String, Vec<&TestRecord>> = BTreeMap::new();
    for record in records {
        if record.client_ip == ip {
            by_month
                .entry(record.year_month())
                .or_default()
                .push(record);
        }
    }
    by_month
        .into_iter()
        .map(|(year_month, tests)| MonthlyRho {
            year_month,
            tests: tests.len() as u64,
            rho: household_rho(&tests),
        })
        .collect()
}

#[derive(Debug, Serialize, Deserialize)]
struct ProfileRow {
    ip: String,
    isp: String,
    tests: u64,
    rho: Option<f64>,
    single_household: bool,
    eligible: bool,
    reason: String,
    tier_mbps: Option<f64>,
    tier_bin: String,
    country: String,
}

/// Write profiles as CSV with columns
/// `ip,isp,tests,rho,single_household,eligible,reason,tier_mbps,tier_bin,country`.
pub fn write_profiles(path: &Path, profiles: &[HouseholdProfile]) -> Result<(), TiersError> {
    let mut writer = csv::Writer::from_path(path)?;
    for p in profiles {
        writer.serialize(ProfileRow {
            ip: p.client_ip.clone(),
            isp: p.isp.clone(),
            tests: p.annual_test_count,
            rho: p.rho,
            single_household: p.single_household,
            eligible: p.eligible,
            reason: p.reason.map(|r| r.to_string()).unwrap_or_default(),
            tier_mbps: p.tier_mbps,
            tier_bin: p.tier_bin.clone().unwrap_or_default(),
            country: p.country.clone(),
        })?;
    }
    writer.flush().map_err(|e| TiersError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    Ok(())
}

pub fn read_profiles(path: &Path) -> Result<Vec<HouseholdProfile>, TiersError> {
    let mut reader = csv::Reader::from_path(path)?;
    let mut profiles = Vec::new();
    for (i, row) in reader.deserialize::<ProfileRow>().enumerate() {
        let row = row.map_err(|e| TiersError::BadProfile {
            path: path.display().to_string(),
            row: i + 1,
            detail: e.to_string(),
        })?;
        let reason = if row.reason.is_empty() {
            None
        } else {
            Some(
                row.reason
                    .parse::<IneligibleReason>()
                    .map_err(|e| TiersError::BadProfile {
                        path: path.display().to_string(),
                        row: i + 1,
                        detail: e,
                    })?,
            )
        };
        profiles.push(HouseholdProfile {
            client_ip: row.ip,
            isp: row.isp,
            country: row.country,
            annual_test_count: row.tests,
            rho: row.rho,
            single_household: row.single_household,
            eligible: row.eligible,
            reason,
            tier_mbps: row.tier_mbps,
            tier_bin: (!row.tier_bin.is_empty()).then_some(row.tier_bin),
        });
    }
    Ok(profiles)
}
