//! Synthetic speed-test generator with known ground truth.
//!
//! Each household gets a tier drawn from a per-ISP mixture, stable
//! covariates, and a number of tests; each test realizes a speed from the
//! covariates plus the ISP's injected effect and noise, capped at the
//! tier. Congestion counts follow the shared-bottleneck mechanism: the
//! expected count scales with the data pushed (realized speed) times the
//! congestion pressure (slack below tier plus a network epoch term), so a
//! single household shows negative speed/congestion correlation while
//! households of disparate tiers pooled behind one IP show positive
//! correlation.
//!
//! Generation is deterministic: household `h` draws from RNG stream `h`
//! of the master seed, so the same spec and seed give byte-identical
//! output regardless of generation order.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use chrono::{TimeZone, Utc};
use rand::Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::{is_peak, OsClass, TestRecord};
use crate::seeding;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid spec: {0}")]
    InvalidSpec(String),
    #[error("failed to read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("failed to parse spec: {0}")]
    Toml(#[from] toml::de::Error),
}

/// Tests-per-household distribution.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CountDist {
    Fixed { n: u32 },
    Uniform { min: u32, max: u32 },
    /// Discrete Pareto for heavy-tailed test counts.
    Pareto { min: u32, exponent: f64, cap: u32 },
}

impl CountDist {
    fn sample<R: Rng>(&self, rng: &mut R) -> u32 {
        match *self {
            CountDist::Fixed { n } => n,
            CountDist::Uniform { min, max } => rng.random_range(min..=max.max(min)),
            CountDist::Pareto { min, exponent, cap } => {
                let u: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
                let x = f64::from(min) * u.powf(-1.0 / exponent);
                (x.floor() as u32).clamp(min, cap)
            }
        }
    }

    fn validate(&self) -> Result<(), SynthError> {
        match *self {
            CountDist::Fixed { n } if n == 0 => {
                Err(SynthError::InvalidSpec("fixed test count must be > 0".into()))
            }
            CountDist::Uniform { min, max } if min == 0 || max < min => Err(
                SynthError::InvalidSpec("uniform test count needs 0 < min <= max".into()),
            ),
            CountDist::Pareto { min, exponent, cap } if min == 0 || exponent <= 0.0 || cap < min => {
                Err(SynthError::InvalidSpec("bad pareto test count".into()))
            }
            _ => Ok(()),
        }
    }
}

/// Gaussian parameters for a household covariate.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Gauss {
    pub mean: f64,
    pub sd: f64,
}

/// How covariates translate into a base speed, in Mbps.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SpeedModel {
    /// Mean fraction of the tier a test reaches.
    pub utilization_mean: f64,
    pub utilization_sd: f64,
    pub rwnd_mbps_per_kb: f64,
    pub rwnd_ref_kb: f64,
    /// Speed decline per millisecond of distance.
    pub rtt_decline_mbps_per_ms: f64,
    pub rtt_ref_ms: f64,
    pub mss_mbps_per_kb: f64,
    pub mss_ref_bytes: f64,
    pub legacy_os_penalty_mbps: f64,
    pub peak_dip_mbps: f64,
}

impl Default for SpeedModel {
    fn default() -> Self {
        Self {
            utilization_mean: 0.78,
            utilization_sd: 0.06,
            rwnd_mbps_per_kb: 0.0,
            rwnd_ref_kb: 256.0,
            rtt_decline_mbps_per_ms: 0.0,
            rtt_ref_ms: 25.0,
            mss_mbps_per_kb: 0.0,
            mss_ref_bytes: 1460.0,
            legacy_os_penalty_mbps: 0.0,
            peak_dip_mbps: 0.0,
        }
    }
}

/// Congestion-count model: `count ~ Poisson(rate * speed * pressure)`
/// where `pressure = max(0, 1 - speed/tier) + epoch` and `epoch` is an
/// exponential per-test network term. The speed factor models signals
/// accumulating with the data pushed through the shared bottleneck.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct CongestionModel {
    pub rate_per_mbps: f64,
    pub network_epoch_mean: f64,
}

impl Default for CongestionModel {
    fn default() -> Self {
        Self {
            rate_per_mbps: 3.0,
            network_epoch_mean: 0.03,
        }
    }
}

/// One tier band of a per-ISP mixture.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TierBand {
    pub low_mbps: f64,
    pub high_mbps: f64,
    pub weight: f64,
}

/// OS class mixture weights.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct OsMix {
    pub modern: f64,
    pub legacy: f64,
    pub other: f64,
}

impl Default for OsMix {
    fn default() -> Self {
        Self {
            modern: 1.0,
            legacy: 0.0,
            other: 0.0,
        }
    }
}

fn default_rwnd() -> Gauss {
    Gauss {
        mean: 256.0,
        sd: 64.0,
    }
}

fn default_rtt() -> Gauss {
    Gauss { mean: 25.0, sd: 8.0 }
}

fn default_mss() -> Vec<(u32, f64)> {
    vec![(1460, 1.0)]
}

fn default_nat() -> Vec<(u32, f64)> {
    vec![(1, 1.0)]
}

/// Per-ISP generative parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IspSpec {
    pub name: String,
    pub country: String,
    pub households: u32,
    /// Additive ground-truth effect of this ISP on speed, Mbps.
    #[serde(default)]
    pub true_effect_mbps: f64,
    pub tier_mixture: Vec<TierBand>,
    #[serde(default = "default_rwnd")]
    pub rwnd_kb: Gauss,
    #[serde(default = "default_rtt")]
    pub min_rtt_ms: Gauss,
    #[serde(default = "default_mss")]
    pub mss_options: Vec<(u32, f64)>,
    #[serde(default)]
    pub os_mix: OsMix,
    /// Weighted NAT group sizes; size 1 means one household per IP.
    #[serde(default = "default_nat")]
    pub nat_group_sizes: Vec<(u32, f64)>,
}

/// Full generative model with injected ground truth.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthSpec {
    pub seed: u64,
    pub year: i32,
    #[serde(default = "default_noise")]
    pub noise_sd: f64,
    #[serde(default)]
    pub outlier_rate: f64,
    #[serde(default = "default_outlier_mult")]
    pub outlier_multiplier: f64,
    pub tests_per_household: CountDist,
    #[serde(default)]
    pub speed_model: SpeedModel,
    #[serde(default)]
    pub congestion: CongestionModel,
    #[serde(rename = "isp")]
    pub isps: Vec<IspSpec>,
}

fn default_noise() -> f64 {
    1.5
}

fn default_outlier_mult() -> f64 {
    2.0
}

impl SynthSpec {
    pub fn load(path: &Path) -> Result<Self, SynthError> {
        let text = fs::read_to_string(path).map_err(|e| SynthError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        Ok(toml::from_str(&text)?)
    }

    fn validate(&self) -> Result<(), SynthError> {
        if self.isps.is_empty() {
            return Err(SynthError::InvalidSpec("no ISPs".into()));
        }
        for isp in &self.isps {
            if isp.households == 0 {
                return Err(SynthError::InvalidSpec(format!("ISP {} is empty", isp.name)));
            }
            if isp.tier_mixture.is_empty() {
                return Err(SynthError::InvalidSpec(format!(
                    "ISP {} has no tier mixture",
                    isp.name
                )));
            }
            for band in &isp.tier_mixture {
                if !(band.low_mbps >= 0.0 && band.high_mbps > band.low_mbps && band.weight >= 0.0)
                {
                    return Err(SynthError::InvalidSpec(format!(
                        "ISP {} has a bad tier band",
                        isp.name
                    )));
                }
            }
            if isp.tier_mixture.iter().map(|b| b.weight).sum::<f64>() <= 0.0 {
                return Err(SynthError::InvalidSpec(format!(
                    "ISP {} tier mixture has zero weight",
                    isp.name
                )));
            }
            if isp.rwnd_kb.sd < 0.0 || isp.min_rtt_ms.sd < 0.0 {
                return Err(SynthError::InvalidSpec("negative covariate sd".into()));
            }
            let os_total = isp.os_mix.modern + isp.os_mix.legacy + isp.os_mix.other;
            if os_total <= 0.0 {
                return Err(SynthError::InvalidSpec("os mix has zero weight".into()));
            }
            if isp.mss_options.is_empty() || isp.nat_group_sizes.is_empty() {
                return Err(SynthError::InvalidSpec("empty weighted choice".into()));
            }
            if !isp.true_effect_mbps.is_finite() {
                return Err(SynthError::InvalidSpec("non-finite effect".into()));
            }
        }
        if self.noise_sd < 0.0 || !(0.0..=1.0).contains(&self.outlier_rate) {
            return Err(SynthError::InvalidSpec("bad noise or outlier rate".into()));
        }
        self.tests_per_household.validate()
    }
}

/// Ground truth recorded alongside generated records.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GroundTruth {
    pub seed: u64,
    pub isp_effects: BTreeMap<String, f64>,
    pub households: Vec<HouseholdTruth>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HouseholdTruth {
    pub household_id: u32,
    pub client_ip: String,
    pub isp: String,
    pub country: String,
    pub tier_mbps: f64,
    pub nat_group: u32,
    pub tests: u32,
}

impl GroundTruth {
    /// Tier lookup keyed by IP. For shared IPs (NAT groups) the maximum
    /// member tier is reported, mirroring what a max-speed estimator
    /// would see.
    pub fn tier_by_ip(&self) -> BTreeMap<String, f64> {
        let mut map: BTreeMap<String, f64> = BTreeMap::new();
        for h in &self.households {
            map.entry(h.client_ip.clone())
                .and_modify(|t| *t = t.max(h.tier_mbps))
                .or_insert(h.tier_mbps);
        }
        map
    }

    pub fn write(&self, path: &Path) -> Result<(), SynthError> {
        let json = serde_json::to_string_pretty(self).expect("serializable");
        fs::write(path, json).map_err(|e| SynthError::Io {
            path: path.display().to_string(),
            source: e,
        })
    }
}

fn weighted_choice<R: Rng, T: Copy>(rng: &mut R, options: &[(T, f64)]) -> T {
    let total: f64 = options.iter().map(|(_, w)| w.max(0.0)).sum();
    let mut draw = rng.random_range(0.0..1.0) * total;
    for &(value, weight) in options {
        draw -= weight.max(0.0);
        if draw <= 0.0 {
            return value;
        }
    }
    options.last().unwrap().0
}

fn sample_tier<R: Rng>(rng: &mut R, mixture: &[TierBand]) -> f64 {
    let total: f64 = mixture.iter().map(|b| b.weight.max(0.0)).sum();
    let mut draw = rng.random_range(0.0..1.0) * total;
    for band in mixture {
        draw -= band.weight.max(0.0);
        if draw <= 0.0 {
            return rng.random_range(band.low_mbps..band.high_mbps);
        }
    }
    let band = mixture.last().unwrap();
    rng.random_range(band.low_mbps..band.high_mbps)
}

fn sample_os<R: Rng>(rng: &mut R, mix: &OsMix) -> OsClass {
    weighted_choice(
        rng,
        &[
            (OsClass::ModernAutotuning, mix.modern),
            (OsClass::LegacyNoAutotuning, mix.legacy),
            (OsClass::Other, mix.other),
        ],
    )
}

fn group_ip(group_id: u32) -> String {
    format!(
        "10.{}.{}.{}",
        (group_id >> 16) & 0xFF,
        (group_id >> 8) & 0xFF,
        group_id & 0xFF
    )
}

struct HouseholdDraw {
    tier: f64,
    rwnd_kb: f64,
    rtt_ms: f64,
    mss: u32,
    os: OsClass,
    tests: u32,
}

/// Generate records and ground truth from a spec. Deterministic under the
/// spec's seed; records come out grouped by ISP, then household, then test.
pub fn generate(spec: &SynthSpec) -> Result<(Vec<TestRecord>, GroundTruth), SynthError> {
    spec.validate()?;
    let mut records = Vec::new();
    let mut truth = GroundTruth {
        seed: spec.seed,
        isp_effects: BTreeMap::new(),
        households: Vec::new(),
    };
    let mut global_household: u64 = 0;
    let mut global_group: u32 = 0;

    for (isp_index, isp) in spec.isps.iter().enumerate() {
        truth
            .isp_effects
            .insert(isp.name.clone(), isp.true_effect_mbps);
        // NAT grouping draws from a dedicated stream so household streams
        // stay aligned with their global index.
        let mut group_rng = seeding::rng(spec.seed, 0xFFFF_0000 + isp_index as u64);
        let mut remaining_in_group = 0u32;
        let mut current_group = 0u32;

        for _ in 0..isp.households {
            if remaining_in_group == 0 {
                remaining_in_group = weighted_choice(&mut group_rng, &isp.nat_group_sizes).max(1);
                global_group += 1;
                current_group = global_group;
            }
            remaining_in_group -= 1;

            let household_id = global_household as u32;
            let mut rng = seeding::rng(spec.seed, global_household);
            global_household += 1;

            let draw = draw_household(&mut rng, spec, isp);
            let ip = group_ip(current_group);
            truth.households.push(HouseholdTruth {
                household_id,
                client_ip: ip.clone(),
                isp: isp.name.clone(),
                country: isp.country.clone(),
                tier_mbps: draw.tier,
                nat_group: current_group,
                tests: draw.tests,
            });
            generate_tests(&mut rng, spec, isp, &draw, &ip, &mut records);
        }
    }
    Ok((records, truth))
}

fn draw_household<R: Rng>(rng: &mut R, spec: &SynthSpec, isp: &IspSpec) -> HouseholdDraw {
    let tier = sample_tier(rng, &isp.tier_mixture);
    let rwnd_kb = if isp.rwnd_kb.sd > 0.0 {
        Normal::new(isp.rwnd_kb.mean, isp.rwnd_kb.sd)
            .unwrap()
            .sample(rng)
            .max(16.0)
    } else {
        isp.rwnd_kb.mean.max(16.0)
    };
    let rtt_ms = if isp.min_rtt_ms.sd > 0.0 {
        Normal::new(isp.min_rtt_ms.mean, isp.min_rtt_ms.sd)
            .unwrap()
            .sample(rng)
            .max(1.0)
    } else {
        isp.min_rtt_ms.mean.max(1.0)
    };
    let mss = weighted_choice(rng, &isp.mss_options);
    let os = sample_os(rng, &isp.os_mix);
    let tests = spec.tests_per_household.sample(rng);
    HouseholdDraw {
        tier,
        rwnd_kb,
        rtt_ms,
        mss,
        os,
        tests,
    }
}

fn generate_tests<R: Rng>(
    rng: &mut R,
    spec: &SynthSpec,
    isp: &IspSpec,
    draw: &HouseholdDraw,
    ip: &str,
    records: &mut Vec<TestRecord>,
) {
    let model = &spec.speed_model;
    for _ in 0..draw.tests {
        let month = rng.random_range(1..=12u32);
        let day = rng.random_range(1..=28u32);
        let hour = rng.random_range(0..24u32);
        let minute = rng.random_range(0..60u32);
        let second = rng.random_range(0..60u32);
        let timestamp = Utc
            .with_ymd_and_hms(spec.year, month, day, hour, minute, second)
            .single()
            .expect("valid synthetic date")
            .timestamp();

        let utilization = if model.utilization_sd > 0.0 {
            Normal::new(model.utilization_mean, model.utilization_sd)
                .unwrap()
                .sample(rng)
        } else {
            model.utilization_mean
        }
        .clamp(0.05, 1.0);
        let mut base = utilization * draw.tier
            + model.rwnd_mbps_per_kb * (draw.rwnd_kb - model.rwnd_ref_kb)
            - model.rtt_decline_mbps_per_ms * (draw.rtt_ms - model.rtt_ref_ms)
            + model.mss_mbps_per_kb * (f64::from(draw.mss) - model.mss_ref_bytes) / 1000.0;
        if draw.os == OsClass::LegacyNoAutotuning {
            base -= model.legacy_os_penalty_mbps;
        }
        if is_peak(hour as u8) {
            base -= model.peak_dip_mbps;
        }
        let noise = if spec.noise_sd > 0.0 {
            Normal::new(0.0, spec.noise_sd).unwrap().sample(rng)
        } else {
            0.0
        };
        let mut speed = (base + isp.true_effect_mbps + noise).min(draw.tier).max(0.25);
        // The outlier draw happens unconditionally to keep the household's
        // RNG stream aligned across spec variants.
        let outlier_draw: f64 = rng.random_range(0.0..1.0);
        if outlier_draw < spec.outlier_rate {
            speed *= spec.outlier_multiplier;
        }

        let epoch: f64 = if spec.congestion.network_epoch_mean > 0.0 {
            -spec.congestion.network_epoch_mean * (1.0 - rng.random_range(0.0..1.0f64)).ln()
        } else {
            0.0
        };
        let pressure = (1.0 - speed / draw.tier).max(0.0) + epoch;
        let lambda = spec.congestion.rate_per_mbps * speed * pressure;
        let congestion_count = if lambda > 0.0 {
            Poisson::new(lambda.min(1.0e6)).unwrap().sample(rng) as u32
        } else {
            0
        };

        let clf_base = 0.05 + 0.002 * draw.tier;
        let client_limited_frac =
            (clf_base + Normal::new(0.0, 0.03).unwrap().sample(rng)).clamp(0.0, 1.0);

        records.push(TestRecord {
            client_ip: ip.to_string(),
            timestamp_utc: timestamp,
            local_hour: hour as u8,
            isp: isp.name.clone(),
            country: isp.country.clone(),
            download_mbps: speed,
            min_rtt_ms: draw.rtt_ms,
            mss_bytes: draw.mss,
            rwnd_bytes: (draw.rwnd_kb * 1024.0) as u64,
            os_class: draw.os,
            congestion_count,
            client_limited_frac,
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stats;
    use crate::tiers;

    fn one_band(low: f64, high: f64) -> Vec<TierBand> {
        vec![TierBand {
            low_mbps: low,
            high_mbps: high,
            weight: 1.0,
        }]
    }

    fn basic_isp(name: &str, households: u32, effect: f64) -> IspSpec {
        IspSpec {
            name: name.into(),
            country: "AU".into(),
            households,
            true_effect_mbps: effect,
            tier_mixture: one_band(30.0, 50.0),
            rwnd_kb: default_rwnd(),
            min_rtt_ms: default_rtt(),
            mss_options: default_mss(),
            os_mix: OsMix::default(),
            nat_group_sizes: default_nat(),
        }
    }

    fn basic_spec(seed: u64) -> SynthSpec {
        SynthSpec {
            seed,
            year: 2016,
            noise_sd: 1.5,
            outlier_rate: 0.0,
            outlier_multiplier: 2.0,
            tests_per_household: CountDist::Fixed { n: 25 },
            speed_model: SpeedModel::default(),
            congestion: CongestionModel::default(),
            isps: vec![basic_isp("A", 60, 0.0), basic_isp("B", 60, 0.0)],
        }
    }

    #[test]
    fn empty_isp_is_rejected() {
        let mut spec = basic_spec(1);
        spec.isps[0].households = 0;
        assert!(matches!(generate(&spec), Err(SynthError::InvalidSpec(_))));
        let mut spec = basic_spec(1);
        spec.isps.clear();
        assert!(generate(&spec).is_err());
    }

    #[test]
    fn reproducible_under_seed() {
        let spec = basic_spec(42);
        let (r1, t1) = generate(&spec).unwrap();
        let (r2, t2) = generate(&spec).unwrap();
        assert_eq!(r1, r2);
        assert_eq!(t1.households.len(), t2.households.len());
        let (r3, _) = generate(&basic_spec(43)).unwrap();
        assert_ne!(r1, r3);
    }

    /// Mean speed per household: tests within a house are clustered by its
    /// tier, so cross-ISP comparisons go through one value per house.
    fn household_means(records: &[TestRecord], isp: &str) -> Vec<f64> {
        let mut by_ip: BTreeMap<&str, (f64, u32)> = BTreeMap::new();
        for r in records.iter().filter(|r| r.isp == isp) {
            let entry = by_ip.entry(&r.client_ip).or_insert((0.0, 0));
            entry.0 += r.download_mbps;
            entry.1 += 1;
        }
        by_ip
            .values()
            .map(|(sum, n)| sum / f64::from(*n))
            .collect()
    }

    #[test]
    fn null_model_matches_across_isps() {
        let spec = basic_spec(7);
        let (records, truth) = generate(&spec).unwrap();
        assert_eq!(truth.isp_effects["A"], 0.0);
        let a = household_means(&records, "A");
        let b = household_means(&records, "B");
        let diff = stats::mean(&a) - stats::mean(&b);
        let se = (stats::sample_variance(&a) / a.len() as f64
            + stats::sample_variance(&b) / b.len() as f64)
            .sqrt();
        assert!(diff.abs() < 4.0 * se + 1e-9, "diff {diff}, se {se}");
    }

    #[test]
    fn speeds_respect_tier_cap() {
        let spec = basic_spec(3);
        let (records, truth) = generate(&spec).unwrap();
        let tiers = truth.tier_by_ip();
        for r in &records {
            assert!(r.download_mbps > 0.0);
            assert!(r.download_mbps <= tiers[&r.client_ip] + 1e-9);
        }
    }

    #[test]
    fn injected_effect_recoverable_from_naive_diff() {
        let mut spec = basic_spec(11);
        spec.isps[0].true_effect_mbps = 2.0;
        spec.isps[0].households = 150;
        spec.isps[1].households = 150;
        let (records, _) = generate(&spec).unwrap();
        let a = household_means(&records, "A");
        let b = household_means(&records, "B");
        let diff = stats::mean(&a) - stats::mean(&b);
        let se = (stats::sample_variance(&a) / a.len() as f64
            + stats::sample_variance(&b) / b.len() as f64)
            .sqrt();
        assert!((diff - 2.0).abs() < 3.0 * se, "diff {diff}, se {se}");
    }

    #[test]
    fn single_household_mode_gives_negative_rho() {
        let spec = basic_spec(5);
        let (records, _) = generate(&spec).unwrap();
        let profiles = tiers::build_profiles(&records, &tiers::TierConfig::default(), None);
        let negative = profiles
            .iter()
            .filter(|p| matches!(p.rho, Some(r) if r < 0.0))
            .count();
        assert!(
            negative as f64 >= 0.95 * profiles.len() as f64,
            "{negative}/{} negative",
            profiles.len()
        );
    }

    #[test]
    fn nat_mixing_flips_rho_positive() {
        let mut spec = basic_spec(9);
        // Four households per IP with tiers split roughly 4:1.
        for isp in &mut spec.isps {
            isp.nat_group_sizes = vec![(4, 1.0)];
            isp.tier_mixture = vec![
                TierBand {
                    low_mbps: 8.0,
                    high_mbps: 12.0,
                    weight: 0.5,
                },
                TierBand {
                    low_mbps: 38.0,
                    high_mbps: 44.0,
                    weight: 0.5,
                },
            ];
        }
        let (records, _) = generate(&spec).unwrap();
        let profiles = tiers::build_profiles(&records, &tiers::TierConfig::default(), None);
        let rhos: Vec<f64> = profiles.iter().filter_map(|p| p.rho).collect();
        assert!(!rhos.is_empty());
        assert!(stats::mean(&rhos) > 0.0, "mean rho {}", stats::mean(&rhos));
    }

    #[test]
    fn tier_histogram_matches_mixture() {
        let mut spec = basic_spec(13);
        spec.tests_per_household = CountDist::Fixed { n: 1 };
        spec.isps = vec![basic_isp("A", 10_000, 0.0)];
        spec.isps[0].tier_mixture = vec![
            TierBand {
                low_mbps: 0.0,
                high_mbps: 8.0,
                weight: 0.3,
            },
            TierBand {
                low_mbps: 8.0,
                high_mbps: 12.0,
                weight: 0.2,
            },
            TierBand {
                low_mbps: 30.0,
                high_mbps: 50.0,
                weight: 0.5,
            },
        ];
        let (_, truth) = generate(&spec).unwrap();
        let mut observed = [0f64; 3];
        for h in &truth.households {
            let idx = if h.tier_mbps <= 8.0 {
                0
            } else if h.tier_mbps <= 12.0 {
                1
            } else {
                2
            };
            observed[idx] += 1.0;
        }
        let n = truth.households.len() as f64;
        let expected = [0.3, 0.2, 0.5];
        let tv: f64 = observed
            .iter()
            .zip(expected)
            .map(|(o, e)| (o / n - e).abs())
            .sum::<f64>()
            / 2.0;
        assert!(tv < 0.05, "total variation {tv}");
    }

    #[test]
    fn heavy_tail_counts_have_spread() {
        let mut spec = basic_spec(17);
        spec.tests_per_household = CountDist::Pareto {
            min: 2,
            exponent: 1.2,
            cap: 500,
        };
        spec.isps = vec![basic_isp("A", 400, 0.0)];
        let (_, truth) = generate(&spec).unwrap();
        let counts: Vec<u32> = truth.households.iter().map(|h| h.tests).collect();
        let max = *counts.iter().max().unwrap();
        let min = *counts.iter().min().unwrap();
        assert_eq!(min, 2);
        assert!(max > 20, "max {max}");
    }

    #[test]
    fn outliers_exceed_tier() {
        let mut spec = basic_spec(19);
        spec.outlier_rate = 0.1;
        spec.outlier_multiplier = 2.0;
        let (records, truth) = generate(&spec).unwrap();
        let tiers = truth.tier_by_ip();
        let above = records
            .iter()
            .filter(|r| r.download_mbps > tiers[&r.client_ip] * 1.2)
            .count();
        assert!(above > 0);
    }

    #[test]
    fn spec_round_trips_through_toml() {
        let spec = basic_spec(21);
        let text = toml::to_string(&spec).unwrap();
        let back: SynthSpec = toml::from_str(&text).unwrap();
        assert_eq!(back.seed, spec.seed);
        assert_eq!(back.isps.len(), 2);
        let (r1, _) = generate(&spec).unwrap();
        let (r2, _) = generate(&back).unwrap();
        assert_eq!(r1, r2);
    }
}
