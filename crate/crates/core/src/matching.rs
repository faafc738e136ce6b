//! Multivariate matching of speed-test samples between two ISPs within a
//! speed-tier bin, with average-treatment-effect estimation and balance
//! diagnostics.
//!
//! Greedy nearest-neighbor matching in seeded-shuffled treated order: a
//! control is admissible for a treated sample iff every exact covariate
//! matches and every continuous covariate differs by at most
//! `caliper_sd` standard deviations; among admissible controls the
//! smallest Mahalanobis distance wins, ties broken by control id. Samples
//! without an admissible partner fall outside the common support and are
//! discarded.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::{is_peak, TestRecord};
use crate::seeding;
use crate::stats;

/// RNG stream tags within a match config's seed.
const STREAM_SHUFFLE: u64 = 1;
const STREAM_BOOTSTRAP: u64 = 2;

/// Bootstrap resamples for the 95% confidence interval.
const BOOTSTRAP_RESAMPLES: usize = 1000;

#[derive(Debug, Error)]
pub enum MatchError {
    #[error("invalid match config: {0}")]
    InvalidConfig(String),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Continuous covariates available for distance matching.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContinuousCovariate {
    TierMbps,
    RwndBytes,
    MinRttMs,
    MssBytes,
    ClientLimitedFrac,
}

impl ContinuousCovariate {
    pub fn all() -> [ContinuousCovariate; 5] {
        [
            ContinuousCovariate::TierMbps,
            ContinuousCovariate::RwndBytes,
            ContinuousCovariate::MinRttMs,
            ContinuousCovariate::MssBytes,
            ContinuousCovariate::ClientLimitedFrac,
        ]
    }

    pub fn name(self) -> &'static str {
        match self {
            ContinuousCovariate::TierMbps => "tier_mbps",
            ContinuousCovariate::RwndBytes => "rwnd_bytes",
            ContinuousCovariate::MinRttMs => "min_rtt_ms",
            ContinuousCovariate::MssBytes => "mss_bytes",
            ContinuousCovariate::ClientLimitedFrac => "client_limited_frac",
        }
    }
}

impl fmt::Display for ContinuousCovariate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ContinuousCovariate {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "tier" | "tier_mbps" => Ok(Self::TierMbps),
            "rwnd" | "rwnd_bytes" => Ok(Self::RwndBytes),
            "rtt" | "min_rtt_ms" => Ok(Self::MinRttMs),
            "mss" | "mss_bytes" => Ok(Self::MssBytes),
            "clf" | "client_limited_frac" => Ok(Self::ClientLimitedFrac),
            _ => Err(format!("unknown continuous covariate: {s}")),
        }
    }
}

/// Covariates matched exactly rather than by distance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExactCovariate {
    OsClass,
    PeakFlag,
}

impl ExactCovariate {
    pub fn name(self) -> &'static str {
        match self {
            ExactCovariate::OsClass => "os_class",
            ExactCovariate::PeakFlag => "peak_flag",
        }
    }
}

impl fmt::Display for ExactCovariate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ExactCovariate {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "os" | "os_class" => Ok(Self::OsClass),
            "peak" | "peak_flag" => Ok(Self::PeakFlag),
            _ => Err(format!("unknown exact covariate: {s}")),
        }
    }
}

/// What one matching sample is built from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchUnit {
    /// One sample per test (the default).
    Tests,
    /// One sample per household, covariates averaged.
    Households,
}

/// Parameters of one ISP-pair comparison.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MatchConfig {
    pub treatment_isp: String,
    pub control_isp: String,
    /// Tier bin label `low-high` in Mbps.
    pub tier_bin: String,
    pub year: Option<i32>,
    /// Caliper in units of each covariate's standard deviation.
    pub caliper_sd: f64,
    pub with_replacement: bool,
    pub continuous_covariates: Vec<ContinuousCovariate>,
    pub exact_covariates: Vec<ExactCovariate>,
    pub seed: u64,
}

impl MatchConfig {
    /// Conventional covariate set: tier, Rwnd, distance, MSS by distance;
    /// OS class and peak flag exact.
    pub fn new(treatment_isp: &str, control_isp: &str, tier_bin: &str) -> Self {
        Self {
            treatment_isp: treatment_isp.to_string(),
            control_isp: control_isp.to_string(),
            tier_bin: tier_bin.to_string(),
            year: None,
            caliper_sd: 0.2,
            with_replacement: true,
            continuous_covariates: vec![
                ContinuousCovariate::TierMbps,
                ContinuousCovariate::RwndBytes,
                ContinuousCovariate::MinRttMs,
                ContinuousCovariate::MssBytes,
            ],
            exact_covariates: vec![ExactCovariate::OsClass, ExactCovariate::PeakFlag],
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<(), MatchError> {
        if !(self.caliper_sd > 0.0) {
            return Err(MatchError::InvalidConfig("caliper must be > 0".into()));
        }
        if self.continuous_covariates.is_empty() {
            return Err(MatchError::InvalidConfig(
                "need at least one continuous covariate".into(),
            ));
        }
        if parse_bin_bounds(&self.tier_bin).is_none() {
            return Err(MatchError::InvalidConfig(format!(
                "bad tier bin label {:?}",
                self.tier_bin
            )));
        }
        Ok(())
    }
}

/// Parse a `low-high` tier bin label.
pub fn parse_bin_bounds(label: &str) -> Option<(f64, f64)> {
    let (low, high) = label.split_once('-')?;
    let low: f64 = low.trim().parse().ok()?;
    let high: f64 = high.trim().parse().ok()?;
    (high > low).then_some((low, high))
}

/// One matchable sample: outcome plus covariate vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchSample {
    /// Index within its group (treated or control).
    pub id: usize,
    pub speed_mbps: f64,
    /// Values of the configured continuous covariates, in config order.
    pub continuous: Vec<f64>,
    /// Encoded values of the configured exact covariates.
    pub exact: Vec<u8>,
}

fn record_continuous(record: &TestRecord, tier: f64, which: ContinuousCovariate) -> f64 {
    match which {
        ContinuousCovariate::TierMbps => tier,
        ContinuousCovariate::RwndBytes => record.rwnd_bytes as f64,
        ContinuousCovariate::MinRttMs => record.min_rtt_ms,
        ContinuousCovariate::MssBytes => f64::from(record.mss_bytes),
        ContinuousCovariate::ClientLimitedFrac => record.client_limited_frac,
    }
}

fn record_exact(record: &TestRecord, which: ExactCovariate) -> u8 {
    match which {
        ExactCovariate::OsClass => record.os_class.code(),
        ExactCovariate::PeakFlag => u8::from(is_peak(record.local_hour)),
    }
}

/// Build per-test treated and control samples for a config.
///
/// A record contributes iff its ISP is one of the pair, its household has
/// a tier estimate landing in the config's bin, and its year matches.
pub fn build_samples(
    records: &[TestRecord],
    tier_by_ip: &BTreeMap<String, f64>,
    cfg: &MatchConfig,
) -> (Vec<MatchSample>, Vec<MatchSample>) {
    let (low, high) = parse_bin_bounds(&cfg.tier_bin).expect("validated bin label");
    let mut treated = Vec::new();
    let mut controls = Vec::new();
    for record in records {
        let group = if record.isp == cfg.treatment_isp {
            &mut treated
        } else if record.isp == cfg.control_isp {
            &mut controls
        } else {
            continue;
        };
        if cfg.year.is_some_and(|y| record.year() != y) {
            continue;
        }
        let Some(&tier) = tier_by_ip.get(&record.client_ip) else {
            continue;
        };
        if !(tier > low && tier <= high) {
            continue;
        }
        let id = group.len();
        group.push(MatchSample {
            id,
            speed_mbps: record.download_mbps,
            continuous: cfg
                .continuous_covariates
                .iter()
                .map(|&c| record_continuous(record, tier, c))
                .collect(),
            exact: cfg
                .exact_covariates
                .iter()
                .map(|&e| record_exact(record, e))
                .collect(),
        });
    }
    (treated, controls)
}

/// Build per-household samples: one sample per IP with covariates
/// averaged, modal OS class, and majority peak flag.
pub fn build_household_samples(
    records: &[TestRecord],
    tier_by_ip: &BTreeMap<String, f64>,
    cfg: &MatchConfig,
) -> (Vec<MatchSample>, Vec<MatchSample>) {
    let (low, high) = parse_bin_bounds(&cfg.tier_bin).expect("validated bin label");
    let mut by_ip: BTreeMap<(bool, &str), Vec<&TestRecord>> = BTreeMap::new();
    for record in records {
        let is_treated = if record.isp == cfg.treatment_isp {
            true
        } else if record.isp == cfg.control_isp {
            false
        } else {
            continue;
        };
        if cfg.year.is_some_and(|y| record.year() != y) {
            continue;
        }
        let Some(&tier) = tier_by_ip.get(&record.client_ip) else {
            continue;
        };
        if !(tier > low && tier <= high) {
            continue;
        }
        by_ip
            .entry((is_treated, &record.client_ip))
            .or_default()
            .push(record);
    }
    let mut treated = Vec::new();
    let mut controls = Vec::new();
    for ((is_treated, ip), tests) in by_ip {
        let n = tests.len() as f64;
        let tier = tier_by_ip[ip];
        let continuous = cfg
            .continuous_covariates
            .iter()
            .map(|&c| tests.iter().map(|t| record_continuous(t, tier, c)).sum::<f64>() / n)
            .collect();
        let exact = cfg
            .exact_covariates
            .iter()
            .map(|&e| match e {
                ExactCovariate::OsClass => {
                    let mut counts = [0usize; 3];
                    for t in &tests {
                        counts[t.os_class.code() as usize] += 1;
                    }
                    (0..3).max_by_key(|&i| (counts[i], 3 - i)).unwrap() as u8
                }
                ExactCovariate::PeakFlag => {
                    let peak = tests.iter().filter(|t| is_peak(t.local_hour)).count();
                    u8::from(peak * 2 > tests.len())
                }
            })
            .collect();
        let group = if is_treated { &mut treated } else { &mut controls };
        group.push(MatchSample {
            id: group.len(),
            speed_mbps: tests.iter().map(|t| t.download_mbps).sum::<f64>() / n,
            continuous,
            exact,
        });
    }
    (treated, controls)
}

/// Standardization of the pooled sample: per-covariate SDs, the indices
/// of covariates kept for matching, and the names of constant covariates
/// dropped from the distance.
#[derive(Debug, Clone)]
pub struct Standardization {
    /// Pooled sample SD per configured covariate (0 for constants).
    pub sds: Vec<f64>,
    /// Indices of covariates with positive SD, in config order.
    pub kept: Vec<usize>,
    /// Names of dropped (constant) covariates.
    pub dropped: Vec<String>,
}

/// Compute pooled SDs over treated plus controls and scale each kept
/// column by its SD. Returns the standardization and the scaled matrix
/// (rows follow treated then controls, columns follow `kept`).
pub fn standardize(
    treated: &[MatchSample],
    controls: &[MatchSample],
    names: &[ContinuousCovariate],
) -> (Standardization, Vec<Vec<f64>>) {
    let p = names.len();
    let mut sds = Vec::with_capacity(p);
    let mut kept = Vec::new();
    let mut dropped = Vec::new();
    for j in 0..p {
        let column: Vec<f64> = treated
            .iter()
            .chain(controls)
            .map(|s| s.continuous[j])
            .collect();
        let sd = stats::sample_sd(&column);
        if sd > 0.0 {
            kept.push(j);
        } else {
            dropped.push(names[j].name().to_string());
        }
        sds.push(sd);
    }
    let scaled = treated
        .iter()
        .chain(controls)
        .map(|s| kept.iter().map(|&j| s.continuous[j] / sds[j]).collect())
        .collect();
    (
        Standardization { sds, kept, dropped },
        scaled,
    )
}

/// Mahalanobis distance under the (regularized) inverse of a pooled
/// covariance matrix.
#[derive(Debug, Clone)]
pub struct MahalanobisMetric {
    inv_cov: DMatrix<f64>,
    /// Whether ridge regularization was needed to invert the covariance.
    pub ridged: bool,
}

impl MahalanobisMetric {
    /// Metric from pooled rows (each row one sample's kept covariates).
    ///
    /// A singular covariance gets `1e-8 * trace / p` added to its
    /// diagonal, escalating tenfold until inversion succeeds.
    pub fn from_samples(rows: &[Vec<f64>]) -> Self {
        let p = rows.first().map_or(0, Vec::len);
        if p == 0 || rows.len() < 2 {
            return Self {
                inv_cov: DMatrix::identity(p, p),
                ridged: false,
            };
        }
        let n = rows.len();
        let mut means = vec![0.0; p];
        for row in rows {
            for (m, v) in means.iter_mut().zip(row) {
                *m += v;
            }
        }
        for m in &mut means {
            *m /= n as f64;
        }
        let mut cov = DMatrix::zeros(p, p);
        for row in rows {
            for i in 0..p {
                for j in 0..p {
                    cov[(i, j)] += (row[i] - means[i]) * (row[j] - means[j]);
                }
            }
        }
        cov /= (n - 1) as f64;

        if let Some(inv) = cov.clone().try_inverse() {
            if inv.iter().all(|v| v.is_finite()) {
                return Self {
                    inv_cov: inv,
                    ridged: false,
                };
            }
        }
        let trace: f64 = (0..p).map(|i| cov[(i, i)]).sum();
        let mut epsilon = 1e-8 * trace.max(f64::MIN_POSITIVE) / p as f64;
        loop {
            let mut ridged = cov.clone();
            for i in 0..p {
                ridged[(i, i)] += epsilon;
            }
            if let Some(inv) = ridged.try_inverse() {
                if inv.iter().all(|v| v.is_finite()) {
                    return Self {
                        inv_cov: inv,
                        ridged: true,
                    };
                }
            }
            epsilon *= 10.0;
        }
    }

    /// Metric from an explicit covariance matrix.
    pub fn from_covariance(cov: DMatrix<f64>) -> Option<Self> {
        cov.try_inverse().map(|inv_cov| Self {
            inv_cov,
            ridged: false,
        })
    }

    /// `sqrt((x-y)^T S^{-1} (x-y))`, clamped at zero.
    pub fn distance(&self, x: &[f64], y: &[f64]) -> f64 {
        let p = self.inv_cov.nrows();
        debug_assert_eq!(x.len(), p);
        debug_assert_eq!(y.len(), p);
        let mut quad = 0.0;
        for i in 0..p {
            let zi = x[i] - y[i];
            for j in 0..p {
                quad += zi * self.inv_cov[(i, j)] * (x[j] - y[j]);
            }
        }
        quad.max(0.0).sqrt()
    }
}

/// One matched pair, by sample ids within their groups.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MatchedPair {
    pub treated_id: usize,
    pub control_id: usize,
    pub distance: f64,
}

/// Balance of one covariate before and after matching.
#[derive(Debug, Clone, Serialize)]
pub struct CovariateBalance {
    pub covariate: String,
    /// Standardized mean difference over all samples.
    pub smd_before: Option<f64>,
    /// Standardized mean difference over matched samples.
    pub smd_after: Option<f64>,
    /// Welch two-sample p-value over matched samples.
    pub p_after: Option<f64>,
}

/// Result of matching one config's samples.
#[derive(Debug, Clone)]
pub struct MatchOutcome {
    /// Pairs in match order (seeded-shuffled treated order).
    pub pairs: Vec<MatchedPair>,
    /// Fraction of all samples outside the common support.
    pub discard_rate: f64,
    /// Unadjusted mean speed difference (treatment minus control) over
    /// all samples in the bin; `None` when a group is empty.
    pub naive_diff_mbps: Option<f64>,
    /// Mean paired speed difference; `None` without pairs.
    pub ate_mbps: Option<f64>,
    /// Seeded pair-bootstrap percentile interval; `None` below 2 pairs.
    pub ci95: Option<(f64, f64)>,
    pub balance: Vec<CovariateBalance>,
    pub dropped_covariates: Vec<String>,
    pub n_treated: usize,
    pub n_controls: usize,
}

impl MatchOutcome {
    fn empty(n_treated: usize, n_controls: usize, naive: Option<f64>) -> Self {
        Self {
            pairs: Vec::new(),
            discard_rate: 1.0,
            naive_diff_mbps: naive,
            ate_mbps: None,
            ci95: None,
            balance: Vec::new(),
            dropped_covariates: Vec::new(),
            n_treated,
            n_controls,
        }
    }
}

/// Controls grouped by exact-covariate key and sorted by the first kept
/// covariate, enabling a binary-search caliper window per treated sample.
struct ControlIndex<'a> {
    groups: BTreeMap<&'a [u8], Vec<usize>>,
    sort_covariate: Option<usize>,
}

impl<'a> ControlIndex<'a> {
    fn build(controls: &'a [MatchSample], kept: &[usize]) -> Self {
        let sort_covariate = kept.first().copied();
        let mut groups: BTreeMap<&[u8], Vec<usize>> = BTreeMap::new();
        for (idx, sample) in controls.iter().enumerate() {
            groups.entry(&sample.exact).or_default().push(idx);
        }
        if let Some(j) = sort_covariate {
            for ids in groups.values_mut() {
                ids.sort_by(|&a, &b| {
                    controls[a].continuous[j]
                        .total_cmp(&controls[b].continuous[j])
                        .then(a.cmp(&b))
                });
            }
        }
        Self {
            groups,
            sort_covariate,
        }
    }

    /// Candidate control indices whose first kept covariate lies within
    /// the caliper window of `treated`.
    fn candidates(&self, controls: &[MatchSample], treated: &MatchSample, radius0: f64) -> &[usize] {
        let Some(ids) = self.groups.get(treated.exact.as_slice()) else {
            return &[];
        };
        match self.sort_covariate {
            None => ids,
            Some(j) => {
                let center = treated.continuous[j];
                let lo = ids.partition_point(|&c| controls[c].continuous[j] < center - radius0);
                let hi = ids.partition_point(|&c| controls[c].continuous[j] <= center + radius0);
                &ids[lo..hi]
            }
        }
    }
}

fn admissible(
    treated: &MatchSample,
    control: &MatchSample,
    kept: &[usize],
    sds: &[f64],
    caliper_sd: f64,
) -> bool {
    kept.iter()
        .all(|&j| (treated.continuous[j] - control.continuous[j]).abs() <= caliper_sd * sds[j])
}

fn best_candidate(
    treated: &MatchSample,
    controls: &[MatchSample],
    candidates: &[usize],
    used: Option<&[bool]>,
    kept: &[usize],
    sds: &[f64],
    caliper_sd: f64,
    metric: &MahalanobisMetric,
) -> Option<(usize, f64)> {
    let x: Vec<f64> = kept.iter().map(|&j| treated.continuous[j]).collect();
    let mut best: Option<(f64, usize)> = None;
    for &c in candidates {
        if used.is_some_and(|u| u[c]) {
            continue;
        }
        let control = &controls[c];
        if !admissible(treated, control, kept, sds, caliper_sd) {
            continue;
        }
        let y: Vec<f64> = kept.iter().map(|&j| control.continuous[j]).collect();
        let d = metric.distance(&x, &y);
        let better = match best {
            None => true,
            Some((bd, bc)) => d < bd || (d == bd && c < bc),
        };
        if better {
            best = Some((d, c));
        }
    }
    best.map(|(d, c)| (c, d))
}

/// Match treated samples against controls per the config.
///
/// Treated samples are visited in seeded-shuffled order; with replacement
/// the per-treated searches are independent (and run in parallel),
/// without replacement each matched control leaves the pool. The discard
/// rate counts every sample not participating in any pair:
/// `1 - (matched treated + distinct matched controls) / (n_T + n_C)`.
pub fn match_samples(
    treated: &[MatchSample],
    controls: &[MatchSample],
    cfg: &MatchConfig,
) -> MatchOutcome {
    let naive = naive_diff(treated, controls);
    if treated.is_empty() || controls.is_empty() {
        return MatchOutcome::empty(treated.len(), controls.len(), naive);
    }

    let (standardization, _scaled) = standardize(treated, controls, &cfg.continuous_covariates);
    let kept = standardization.kept.clone();
    // The metric inverts the pooled covariance of the raw kept covariates;
    // the caliper tests raw differences against caliper_sd * sd.
    let raw_rows: Vec<Vec<f64>> = treated
        .iter()
        .chain(controls)
        .map(|s| kept.iter().map(|&j| s.continuous[j]).collect())
        .collect();
    let metric = MahalanobisMetric::from_samples(&raw_rows);
    let index = ControlIndex::build(controls, &kept);
    let radius0 = kept
        .first()
        .map(|&j| cfg.caliper_sd * standardization.sds[j])
        .unwrap_or(0.0);

    let mut order: Vec<usize> = (0..treated.len()).collect();
    {
        use rand::seq::SliceRandom;
        let mut rng = seeding::rng(cfg.seed, STREAM_SHUFFLE);
        order.shuffle(&mut rng);
    }

    let pairs: Vec<MatchedPair> = if cfg.with_replacement {
        order
            .par_iter()
            .filter_map(|&t| {
                let candidates = index.candidates(controls, &treated[t], radius0);
                best_candidate(
                    &treated[t],
                    controls,
                    candidates,
                    None,
                    &kept,
                    &standardization.sds,
                    cfg.caliper_sd,
                    &metric,
                )
                .map(|(c, d)| MatchedPair {
                    treated_id: t,
                    control_id: c,
                    distance: d,
                })
            })
            .collect()
    } else {
        let mut used = vec![false; controls.len()];
        let mut pairs = Vec::new();
        for &t in &order {
            let candidates = index.candidates(controls, &treated[t], radius0);
            if let Some((c, d)) = best_candidate(
                &treated[t],
                controls,
                candidates,
                Some(&used),
                &kept,
                &standardization.sds,
                cfg.caliper_sd,
                &metric,
            ) {
                used[c] = true;
                pairs.push(MatchedPair {
                    treated_id: t,
                    control_id: c,
                    distance: d,
                });
            }
        }
        pairs
    };

    if pairs.is_empty() {
        let mut outcome = MatchOutcome::empty(treated.len(), controls.len(), naive);
        outcome.dropped_covariates = standardization.dropped;
        return outcome;
    }

    let mut distinct_controls: Vec<usize> = pairs.iter().map(|p| p.control_id).collect();
    distinct_controls.sort_unstable();
    distinct_controls.dedup();
    let in_support = pairs.len() + distinct_controls.len();
    let total = treated.len() + controls.len();
    let discard_rate = 1.0 - in_support as f64 / total as f64;

    let diffs: Vec<f64> = pairs
        .iter()
        .map(|p| treated[p.treated_id].speed_mbps - controls[p.control_id].speed_mbps)
        .collect();
    let ate = Some(stats::mean(&diffs));
    let ci95 = stats::bootstrap_mean_ci95(
        &diffs,
        BOOTSTRAP_RESAMPLES,
        seeding::derive(cfg.seed, STREAM_BOOTSTRAP),
    );

    let balance = balance_report(treated, controls, &pairs, &cfg.continuous_covariates);

    MatchOutcome {
        pairs,
        discard_rate,
        naive_diff_mbps: naive,
        ate_mbps: ate,
        ci95,
        balance,
        dropped_covariates: standardization.dropped,
        n_treated: treated.len(),
        n_controls: controls.len(),
    }
}

fn naive_diff(treated: &[MatchSample], controls: &[MatchSample]) -> Option<f64> {
    if treated.is_empty() || controls.is_empty() {
        return None;
    }
    let t: Vec<f64> = treated.iter().map(|s| s.speed_mbps).collect();
    let c: Vec<f64> = controls.iter().map(|s| s.speed_mbps).collect();
    Some(stats::mean(&t) - stats::mean(&c))
}

/// ATE and bootstrap CI from matched pairs (treatment minus control).
pub fn estimate_ate(
    pairs: &[MatchedPair],
    treated: &[MatchSample],
    controls: &[MatchSample],
    seed: u64,
) -> (Option<f64>, Option<(f64, f64)>) {
    if pairs.is_empty() {
        return (None, None);
    }
    let diffs: Vec<f64> = pairs
        .iter()
        .map(|p| treated[p.treated_id].speed_mbps - controls[p.control_id].speed_mbps)
        .collect();
    let ate = stats::mean(&diffs);
    let ci = stats::bootstrap_mean_ci95(
        &diffs,
        BOOTSTRAP_RESAMPLES,
        seeding::derive(seed, STREAM_BOOTSTRAP),
    );
    (Some(ate), ci)
}

fn smd(t: &[f64], c: &[f64]) -> Option<f64> {
    let pooled = ((stats::sample_variance(t) + stats::sample_variance(c)) / 2.0).sqrt();
    let diff = stats::mean(t) - stats::mean(c);
    if pooled == 0.0 {
        if diff == 0.0 {
            Some(0.0)
        } else {
            None
        }
    } else {
        Some(diff / pooled)
    }
}

/// Per-covariate standardized mean differences before and after matching,
/// with Welch p-values on the matched samples.
///
/// The after-matching population is the pair multiset: each matched
/// control counts once per pair it participates in.
pub fn balance_report(
    treated: &[MatchSample],
    controls: &[MatchSample],
    pairs: &[MatchedPair],
    names: &[ContinuousCovariate],
) -> Vec<CovariateBalance> {
    names
        .iter()
        .enumerate()
        .map(|(j, name)| {
            let t_before: Vec<f64> = treated.iter().map(|s| s.continuous[j]).collect();
            let c_before: Vec<f64> = controls.iter().map(|s| s.continuous[j]).collect();
            let t_after: Vec<f64> = pairs
                .iter()
                .map(|p| treated[p.treated_id].continuous[j])
                .collect();
            let c_after: Vec<f64> = pairs
                .iter()
                .map(|p| controls[p.control_id].continuous[j])
                .collect();
            CovariateBalance {
                covariate: name.name().to_string(),
                smd_before: smd(&t_before, &c_before),
                smd_after: smd(&t_after, &c_after),
                p_after: stats::welch_p_value(&t_after, &c_after),
            }
        })
        .collect()
}

/// Serializable summary of one matching run (the `outcome.json` schema).
#[derive(Debug, Clone, Serialize)]
pub struct MatchReport {
    pub config: MatchConfig,
    pub n_treated: usize,
    pub n_controls: usize,
    pub pairs: usize,
    pub discard_rate: f64,
    pub naive_diff_mbps: Option<f64>,
    pub ate_mbps: Option<f64>,
    pub ci95: Option<(f64, f64)>,
    pub dropped_covariates: Vec<String>,
    pub balance: Vec<CovariateBalance>,
}

impl MatchReport {
    pub fn new(config: MatchConfig, outcome: &MatchOutcome) -> Self {
        Self {
            config,
            n_treated: outcome.n_treated,
            n_controls: outcome.n_controls,
            pairs: outcome.pairs.len(),
            discard_rate: outcome.discard_rate,
            naive_diff_mbps: outcome.naive_diff_mbps,
            ate_mbps: outcome.ate_mbps,
            ci95: outcome.ci95,
            dropped_covariates: outcome.dropped_covariates.clone(),
            balance: outcome.balance.clone(),
        }
    }
}

/// Results for one replacement mode within a ranked comparison row.
#[derive(Debug, Clone, Serialize)]
pub struct ModeResult {
    pub ate_mbps: Option<f64>,
    pub ci95: Option<(f64, f64)>,
    pub discard_rate: f64,
    pub pairs: usize,
}

/// One row of the ranked ISP-pair comparison table.
#[derive(Debug, Clone, Serialize)]
pub struct RankRow {
    /// 1-based rank after sorting by naive difference ascending.
    pub pair_id: usize,
    pub treatment_isp: String,
    pub control_isp: String,
    pub tier_bin: String,
    pub year: Option<i32>,
    pub naive_diff_mbps: Option<f64>,
    pub with_replacement: ModeResult,
    pub without_replacement: ModeResult,
}

impl RankRow {
    /// A row has common support when either mode produced pairs.
    pub fn has_support(&self) -> bool {
        self.with_replacement.pairs > 0 || self.without_replacement.pairs > 0
    }
}

/// Run every config in both replacement modes and sort rows by naive
/// difference ascending (undefined naive differences sort last).
pub fn rank_pairs(
    configs: &[MatchConfig],
    records: &[TestRecord],
    tier_by_ip: &BTreeMap<String, f64>,
    unit: MatchUnit,
) -> Vec<RankRow> {
    let mut rows: Vec<RankRow> = configs
        .iter()
        .map(|cfg| {
            let (treated, controls) = match unit {
                MatchUnit::Tests => build_samples(records, tier_by_ip, cfg),
                MatchUnit::Households => build_household_samples(records, tier_by_ip, cfg),
            };
            let run = |with_replacement: bool| {
                let mode_cfg = MatchConfig {
                    with_replacement,
                    ..cfg.clone()
                };
                let outcome = match_samples(&treated, &controls, &mode_cfg);
                ModeResult {
                    ate_mbps: outcome.ate_mbps,
                    ci95: outcome.ci95,
                    discard_rate: outcome.discard_rate,
                    pairs: outcome.pairs.len(),
                }
            };
            RankRow {
                pair_id: 0,
                treatment_isp: cfg.treatment_isp.clone(),
                control_isp: cfg.control_isp.clone(),
                tier_bin: cfg.tier_bin.clone(),
                year: cfg.year,
                naive_diff_mbps: naive_diff_for(records, tier_by_ip, cfg),
                with_replacement: run(true),
                without_replacement: run(false),
            }
        })
        .collect();
    rows.sort_by(|a, b| match (a.naive_diff_mbps, b.naive_diff_mbps) {
        (Some(x), Some(y)) => x.total_cmp(&y),
        (Some(_), None) => std::cmp::Ordering::Less,
        (None, Some(_)) => std::cmp::Ordering::Greater,
        (None, None) => std::cmp::Ordering::Equal,
    });
    for (i, row) in rows.iter_mut().enumerate() {
        row.pair_id = i + 1;
    }
    rows
}

fn naive_diff_for(
    records: &[TestRecord],
    tier_by_ip: &BTreeMap<String, f64>,
    cfg: &MatchConfig,
) -> Option<f64> {
    let (treated, controls) = build_samples(records, tier_by_ip, cfg);
    naive_diff(&treated, &controls)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Write ranked rows as `table.csv`.
pub fn write_rank_table(path: &Path, rows: &[RankRow]) -> Result<(), MatchError> {
    let mut writer = csv::Writer::from_path(path)?;
    writer.write_record([
        "pair_id",
        "isp1",
        "isp2",
        "tier_bin",
        "year",
        "naive_diff_mbps",
        "ate_r",
        "ci95_lo_r",
        "ci95_hi_r",
        "discard_rate_r",
        "pairs_r",
        "ate_nr",
        "ci95_lo_nr",
        "ci95_hi_nr",
        "discard_rate_nr",
        "pairs_nr",
        "support",
    ])?;
    for row in rows {
        writer.write_record([
            row.pair_id.to_string(),
            row.treatment_isp.clone(),
            row.control_isp.clone(),
            row.tier_bin.clone(),
            row.year.map(|y| y.to_string()).unwrap_or_default(),
            fmt_opt(row.naive_diff_mbps),
            fmt_opt(row.with_replacement.ate_mbps),
            fmt_opt(row.with_replacement.ci95.map(|c| c.0)),
            fmt_opt(row.with_replacement.ci95.map(|c| c.1)),
            row.with_replacement.discard_rate.to_string(),
            row.with_replacement.pairs.to_string(),
            fmt_opt(row.without_replacement.ate_mbps),
            fmt_opt(row.without_replacement.ci95.map(|c| c.0)),
            fmt_opt(row.without_replacement.ci95.map(|c| c.1)),
            row.without_replacement.discard_rate.to_string(),
            row.without_replacement.pairs.to_string(),
            if row.has_support() {
                "ok".to_string()
            } else {
                "insufficient common support".to_string()
            },
        ])?;
    }
    writer.flush().map_err(|e| MatchError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use nalgebra::dmatrix;

    fn sample(id: usize, speed: f64, continuous: Vec<f64>, exact: Vec<u8>) -> MatchSample {
        MatchSample {
            id,
            speed_mbps: speed,
            continuous,
            exact,
        }
    }

    fn one_cov_config(caliper: f64, with_replacement: bool) -> MatchConfig {
        MatchConfig {
            caliper_sd: caliper,
            with_replacement,
            continuous_covariates: vec![ContinuousCovariate::TierMbps],
            exact_covariates: vec![],
            seed: 7,
            ..MatchConfig::new("A", "B", "0-8")
        }
    }

    #[test]
    fn standardize_hand_fixture() {
        // Pooled column {1,2,3,4,10}: mean 4, sample variance 12.5.
        let treated = vec![
            sample(0, 0.0, vec![1.0], vec![]),
            sample(1, 0.0, vec![2.0], vec![]),
            sample(2, 0.0, vec![3.0], vec![]),
        ];
        let controls = vec![
            sample(0, 0.0, vec![4.0], vec![]),
            sample(1, 0.0, vec![10.0], vec![]),
        ];
        let (std, scaled) = standardize(&treated, &controls, &[ContinuousCovariate::TierMbps]);
        assert_abs_diff_eq!(std.sds[0], 12.5f64.sqrt(), epsilon = 1e-12);
        assert_eq!(std.kept, vec![0]);
        assert!(std.dropped.is_empty());
        assert_abs_diff_eq!(scaled[0][0], 1.0 / 12.5f64.sqrt(), epsilon = 1e-12);
        assert_abs_diff_eq!(scaled[4][0], 10.0 / 12.5f64.sqrt(), epsilon = 1e-12);
    }

    #[test]
    fn standardize_drops_constant_covariate() {
        let treated = vec![sample(0, 0.0, vec![5.0, 1.0], vec![])];
        let controls = vec![sample(0, 0.0, vec![5.0, 3.0], vec![])];
        let (std, scaled) = standardize(
            &treated,
            &controls,
            &[ContinuousCovariate::TierMbps, ContinuousCovariate::MinRttMs],
        );
        assert_eq!(std.kept, vec![1]);
        assert_eq!(std.dropped, vec!["tier_mbps".to_string()]);
        assert_eq!(scaled[0].len(), 1);
    }

    #[test]
    fn mahalanobis_identity_is_euclidean() {
        let metric = MahalanobisMetric::from_covariance(DMatrix::identity(2, 2)).unwrap();
        let d = metric.distance(&[0.0, 0.0], &[3.0, 4.0]);
        assert_abs_diff_eq!(d, 5.0, epsilon = 1e-12);
        assert_eq!(metric.distance(&[1.0, 2.0], &[1.0, 2.0]), 0.0);
    }

    #[test]
    fn mahalanobis_correlated_hand_inverse() {
        // cov = [[1, .5], [.5, 1]]; inv = [[4/3, -2/3], [-2/3, 4/3]];
        // z = (1,1) gives z' inv z = 4/3, distance sqrt(4/3).
        let metric =
            MahalanobisMetric::from_covariance(dmatrix![1.0, 0.5; 0.5, 1.0]).unwrap();
        let d = metric.distance(&[0.0, 0.0], &[1.0, 1.0]);
        assert_abs_diff_eq!(d, (4.0f64 / 3.0).sqrt(), epsilon = 1e-10);
    }

    #[test]
    fn mahalanobis_symmetry() {
        let rows: Vec<Vec<f64>> = (0..10)
            .map(|i| vec![i as f64, (i * i % 7) as f64])
            .collect();
        let metric = MahalanobisMetric::from_samples(&rows);
        for a in &rows {
            for b in &rows {
                assert_eq!(metric.distance(a, b), metric.distance(b, a));
            }
        }
    }

    #[test]
    fn ridge_handles_singular_covariance() {
        // Two perfectly collinear columns.
        let rows: Vec<Vec<f64>> = (0..8).map(|i| vec![i as f64, 2.0 * i as f64]).collect();
        let metric = MahalanobisMetric::from_samples(&rows);
        assert!(metric.ridged);
        let d = metric.distance(&rows[0], &rows[5]);
        assert!(d.is_finite() && d > 0.0);
    }

    #[test]
    fn identical_pair_matches_at_zero() {
        let treated = vec![sample(0, 20.0, vec![5.0], vec![0])];
        let controls = vec![sample(0, 18.0, vec![5.0], vec![0])];
        let mut cfg = one_cov_config(0.2, true);
        cfg.exact_covariates = vec![ExactCovariate::OsClass];
        let outcome = match_samples(&treated, &controls, &cfg);
        assert_eq!(outcome.pairs.len(), 1);
        assert_eq!(outcome.pairs[0].distance, 0.0);
        assert_eq!(outcome.discard_rate, 0.0);
        assert_eq!(outcome.ate_mbps, Some(2.0));
        assert_eq!(outcome.naive_diff_mbps, Some(2.0));
    }

    #[test]
    fn replacement_reuses_controls() {
        let treated = vec![
            sample(0, 10.0, vec![1.0], vec![]),
            sample(1, 11.0, vec![1.0], vec![]),
        ];
        let controls = vec![sample(0, 9.0, vec![1.0], vec![]), ];
        // Spread covariate so sds are positive.
        let mut treated = treated;
        treated.push(sample(2, 5.0, vec![4.0], vec![]));
        let with = match_samples(&treated, &controls, &one_cov_config(0.2, true));
        assert_eq!(with.pairs.iter().filter(|p| p.control_id == 0).count(), 2);
        let without = match_samples(&treated, &controls, &one_cov_config(0.2, false));
        assert_eq!(without.pairs.len(), 1);
        // Without replacement: control ids are distinct.
        let mut ids: Vec<usize> = without.pairs.iter().map(|p| p.control_id).collect();
        ids.sort_unstable();
        ids.dedup();
        assert_eq!(ids.len(), without.pairs.len());
    }

    #[test]
    fn caliper_blocks_distant_controls() {
        let treated = vec![sample(0, 10.0, vec![0.0], vec![])];
        let controls = vec![
            sample(0, 9.0, vec![3.0], vec![]),
            sample(1, 8.0, vec![0.5], vec![]),
        ];
        let outcome = match_samples(&treated, &controls, &one_cov_config(0.4, true));
        assert_eq!(outcome.pairs.len(), 1);
        assert_eq!(outcome.pairs[0].control_id, 1);
        // Tighter caliper: nothing admissible.
        let outcome = match_samples(&treated, &controls, &one_cov_config(0.05, true));
        assert!(outcome.pairs.is_empty());
        assert_eq!(outcome.discard_rate, 1.0);
        assert_eq!(outcome.ate_mbps, None);
        assert!(outcome.ci95.is_none());
    }

    #[test]
    fn ties_break_by_control_id() {
        let treated = vec![sample(0, 10.0, vec![0.0], vec![])];
        let controls = vec![
            sample(0, 9.0, vec![0.4], vec![]),
            sample(1, 8.0, vec![-0.4], vec![]),
        ];
        let outcome = match_samples(&treated, &controls, &one_cov_config(2.0, true));
        assert_eq!(outcome.pairs[0].control_id, 0);
    }

    #[test]
    fn exact_covariates_must_match() {
        let treated = vec![sample(0, 10.0, vec![1.0], vec![0])];
        let controls = vec![
            sample(0, 9.0, vec![1.0], vec![1]),
            sample(1, 9.5, vec![1.2], vec![0]),
        ];
        let mut cfg = one_cov_config(2.0, true);
        cfg.exact_covariates = vec![ExactCovariate::OsClass];
        let outcome = match_samples(&treated, &controls, &cfg);
        assert_eq!(outcome.pairs.len(), 1);
        assert_eq!(outcome.pairs[0].control_id, 1);
    }

    #[test]
    fn ate_of_balanced_diffs_is_zero() {
        let treated = vec![
            sample(0, 2.0, vec![1.0], vec![]),
            sample(1, 2.0, vec![2.0], vec![]),
        ];
        let controls = vec![
            sample(0, 1.0, vec![1.0], vec![]),
            sample(1, 3.0, vec![2.0], vec![]),
        ];
        let pairs = vec![
            MatchedPair {
                treated_id: 0,
                control_id: 0,
                distance: 0.0,
            },
            MatchedPair {
                treated_id: 1,
                control_id: 1,
                distance: 0.0,
            },
        ];
        let (ate, ci) = estimate_ate(&pairs, &treated, &controls, 3);
        assert_eq!(ate, Some(0.0));
        let ci = ci.unwrap();
        assert!(ci.0 <= 0.0 && 0.0 <= ci.1);
    }

    #[test]
    fn self_copy_is_exact() {
        // Matching a group against a copy of itself: every treated finds
        // its twin at distance zero; ATE and after-matching SMD are
        // exactly zero.
        let group: Vec<MatchSample> = (0..40)
            .map(|i| {
                sample(
                    i,
                    10.0 + (i as f64) * 0.37,
                    vec![(i as f64) * 1.11, 100.0 - (i as f64) * 2.3],
                    vec![(i % 2) as u8],
                )
            })
            .collect();
        for with_replacement in [true, false] {
            let mut cfg = MatchConfig::new("A", "B", "0-8");
            cfg.caliper_sd = 0.01;
            cfg.with_replacement = with_replacement;
            cfg.continuous_covariates =
                vec![ContinuousCovariate::TierMbps, ContinuousCovariate::RwndBytes];
            cfg.exact_covariates = vec![ExactCovariate::OsClass];
            cfg.seed = 11;
            let outcome = match_samples(&group, &group, &cfg);
            assert_eq!(outcome.pairs.len(), group.len());
            assert_eq!(outcome.ate_mbps, Some(0.0));
            assert_eq!(outcome.discard_rate, 0.0);
            for b in &outcome.balance {
                assert_eq!(b.smd_after, Some(0.0));
            }
        }
    }

    #[test]
    fn balance_identical_groups() {
        let group: Vec<MatchSample> = (0..10)
            .map(|i| sample(i, 5.0 + i as f64, vec![i as f64], vec![]))
            .collect();
        let outcome = match_samples(&group, &group, &one_cov_config(0.1, false));
        let b = &outcome.balance[0];
        assert_eq!(b.smd_before, Some(0.0));
        assert_eq!(b.smd_after, Some(0.0));
        assert!(b.p_after.unwrap() > 0.99);
    }

    #[test]
    fn empty_groups_yield_empty_outcome() {
        let outcome = match_samples(&[], &[], &one_cov_config(0.2, true));
        assert!(outcome.pairs.is_empty());
        assert_eq!(outcome.discard_rate, 1.0);
        assert_eq!(outcome.naive_diff_mbps, None);
    }

    #[test]
    fn config_validation() {
        let mut cfg = MatchConfig::new("A", "B", "0-8");
        assert!(cfg.validate().is_ok());
        cfg.caliper_sd = 0.0;
        assert!(cfg.validate().is_err());
        cfg.caliper_sd = 0.2;
        cfg.continuous_covariates.clear();
        assert!(cfg.validate().is_err());
        cfg = MatchConfig::new("A", "B", "garbage");
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn covariate_parsing_aliases() {
        assert_eq!(
            "tier".parse::<ContinuousCovariate>().unwrap(),
            ContinuousCovariate::TierMbps
        );
        assert_eq!(
            "rwnd_bytes".parse::<ContinuousCovariate>().unwrap(),
            ContinuousCovariate::RwndBytes
        );
        assert!("bogus".parse::<ContinuousCovariate>().is_err());
        assert_eq!(
            "peak".parse::<ExactCovariate>().unwrap(),
            ExactCovariate::PeakFlag
        );
    }

    #[test]
    fn bin_label_parsing() {
        assert_eq!(parse_bin_bounds("0-8"), Some((0.0, 8.0)));
        assert_eq!(parse_bin_bounds("30-50"), Some((30.0, 50.0)));
        assert_eq!(parse_bin_bounds("50-30"), None);
        assert_eq!(parse_bin_bounds("oops"), None);
    }

    fn bin_record(ip: &str, isp: &str, tier_bin_speed: f64) -> crate::TestRecord {
        crate::TestRecord {
            client_ip: ip.to_string(),
            timestamp_utc: 1452340000,
            local_hour: 10,
            isp: isp.to_string(),
            country: "AU".into(),
            download_mbps: tier_bin_speed,
            min_rtt_ms: 10.0,
            mss_bytes: 1460,
            rwnd_bytes: 65536,
            os_class: crate::OsClass::ModernAutotuning,
            congestion_count: 1,
            client_limited_frac: 0.1,
        }
    }

    #[test]
    fn rank_rows_sort_by_naive_diff() {
        let mut records = Vec::new();
        let mut tiers = BTreeMap::new();
        // Bin 0-8: A slower by 5. Bin 8-12: A faster by 1.
        for (ip, isp, tier, speed) in [
            ("1.1.1.1", "A", 4.0, 1.0),
            ("1.1.1.2", "A", 4.5, 1.0),
            ("2.2.2.1", "B", 4.0, 6.0),
            ("2.2.2.2", "B", 4.5, 6.0),
            ("3.3.3.1", "A", 9.0, 7.0),
            ("3.3.3.2", "A", 9.5, 7.0),
            ("4.4.4.1", "B", 9.0, 6.0),
            ("4.4.4.2", "B", 9.5, 6.0),
        ] {
            records.push(bin_record(ip, isp, speed));
            records.push(bin_record(ip, isp, speed));
            tiers.insert(ip.to_string(), tier);
        }
        let make = |bin: &str| MatchConfig {
            continuous_covariates: vec![ContinuousCovariate::TierMbps],
            exact_covariates: vec![],
            caliper_sd: 2.0,
            seed: 5,
            ..MatchConfig::new("A", "B", bin)
        };
        let rows = rank_pairs(
            &[make("8-12"), make("0-8")],
            &records,
            &tiers,
            MatchUnit::Tests,
        );
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0].pair_id, 1);
        assert_eq!(rows[0].tier_bin, "0-8");
        assert_abs_diff_eq!(rows[0].naive_diff_mbps.unwrap(), -5.0, epsilon = 1e-12);
        assert_eq!(rows[1].tier_bin, "8-12");
        assert_abs_diff_eq!(rows[1].naive_diff_mbps.unwrap(), 1.0, epsilon = 1e-12);
        assert!(rows[0].has_support());
    }
}
