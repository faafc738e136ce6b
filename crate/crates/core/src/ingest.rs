//! Parsing of raw speed-test exports into validated, ISP-attributed,
//! time-localized records.
//!
//! Raw input is CSV (header `ip,timestamp_utc,region,isp_hint,download_mbps,
//! min_rtt_ms,mss_bytes,rwnd_bytes,os,congestion_count,client_limited_frac`)
//! or JSON lines with the same keys. Rows that fail validation are rejected
//! with a per-row reason; accepted rows come out as [`TestRecord`]s with the
//! ISP resolved from a static prefix map and the local hour derived from a
//! flat region-to-UTC-offset table.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::net::IpAddr;
use std::path::Path;
use std::str::FromStr;

use chrono::{DateTime, Datelike, Utc};
use ipnet::IpNet;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("failed to write {path}: {source}")]
    Write {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("bad prefix map entry at line {line}: {detail}")]
    BadPrefixEntry { line: usize, detail: String },
    #[error("bad timezone table entry at line {line}: {detail}")]
    BadTzEntry { line: usize, detail: String },
    #[error("bad OS rules entry at line {line}: {detail}")]
    BadOsRule { line: usize, detail: String },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("record file {path}, row {row}: {detail}")]
    BadRecord {
        path: String,
        row: usize,
        detail: String,
    },
}

/// Client operating-system class, keyed on TCP auto-tuning support.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OsClass {
    ModernAutotuning,
    LegacyNoAutotuning,
    Other,
}

impl OsClass {
    /// Ordinal code used by the feature-matrix codebook.
    pub fn code(self) -> u8 {
        match self {
            OsClass::ModernAutotuning => 0,
            OsClass::LegacyNoAutotuning => 1,
            OsClass::Other => 2,
        }
    }
}

impl fmt::Display for OsClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            OsClass::ModernAutotuning => "modern_autotuning",
            OsClass::LegacyNoAutotuning => "legacy_no_autotuning",
            OsClass::Other => "other",
        };
        f.write_str(s)
    }
}

impl FromStr for OsClass {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "modern_autotuning" => Ok(OsClass::ModernAutotuning),
            "legacy_no_autotuning" => Ok(OsClass::LegacyNoAutotuning),
            "other" => Ok(OsClass::Other),
            _ => Err(format!("unknown os class: {s}")),
        }
    }
}

/// One normalized speed-test observation with all covariates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestRecord {
    /// Opaque household key (string form of the client IP).
    pub client_ip: String,
    /// Seconds since the Unix epoch.
    pub timestamp_utc: i64,
    /// Hour 0-23 after shifting by the region's UTC offset.
    pub local_hour: u8,
    pub isp: String,
    pub country: String,
    /// Measured download speed in Mbps, strictly positive.
    pub download_mbps: f64,
    /// Minimum round-trip time over the test (the distance covariate).
    pub min_rtt_ms: f64,
    pub mss_bytes: u32,
    /// Receiver's announced maximum window size.
    pub rwnd_bytes: u64,
    pub os_class: OsClass,
    /// Count of congestion signals recorded during the test.
    pub congestion_count: u32,
    /// Fraction of test time the client itself was the constraint.
    pub client_limited_frac: f64,
}

impl TestRecord {
    /// Calendar month key, UTC, formatted `YYYY-MM`.
    pub fn year_month(&self) -> String {
        utc_year_month(self.timestamp_utc)
    }

    /// Calendar year, UTC.
    pub fn year(&self) -> i32 {
        utc_datetime(self.timestamp_utc)
            .map(|d| d.year())
            .unwrap_or(0)
    }
}

/// True iff `hour` falls in the peak window, the half-open local interval
/// [19:00, 23:00).
pub fn is_peak(hour: u8) -> bool {
    (19..23).contains(&hour)
}

/// Local hour for a UTC timestamp under a fixed offset in minutes.
pub fn local_hour(timestamp_utc: i64, offset_minutes: i32) -> u8 {
    let shifted = timestamp_utc + i64::from(offset_minutes) * 60;
    (shifted.rem_euclid(86_400) / 3_600) as u8
}

fn utc_datetime(timestamp: i64) -> Option<DateTime<Utc>> {
    DateTime::<Utc>::from_timestamp(timestamp, 0)
}

/// UTC calendar month key `YYYY-MM` for an epoch timestamp.
pub fn utc_year_month(timestamp: i64) -> String {
    match utc_datetime(timestamp) {
        Some(d) => format!("{:04}-{:02}", d.year(), d.month()),
        None => "0000-00".to_string(),
    }
}

/// Classify a raw OS string into an [`OsClass`].
///
/// The built-in table: Linux at version 3.4 or newer, Windows Vista or
/// newer, and any macOS map to `ModernAutotuning`; Windows XP or older maps
/// to `LegacyNoAutotuning`; everything else (including versionless Linux
/// and unknown strings) maps to `Other`. Matching is case-insensitive.
pub fn classify_os(os: &str) -> OsClass {
    let s = os.trim().to_ascii_lowercase();
    if s.is_empty() {
        return OsClass::Other;
    }
    if s.contains("mac os") || s.contains("macos") || s.contains("os x") || s.contains("darwin") {
        return OsClass::ModernAutotuning;
    }
    if s.contains("windows") {
        const LEGACY: [&str; 6] = ["xp", "2000", "me", "98", "95", "nt"];
        const MODERN: [&str; 6] = ["vista", "7", "8", "8.1", "10", "11"];
        let tokens: Vec<&str> = s.split_whitespace().collect();
        if tokens.iter().any(|t| LEGACY.contains(t)) {
            return OsClass::LegacyNoAutotuning;
        }
        if tokens.iter().any(|t| MODERN.contains(t)) {
            return OsClass::ModernAutotuning;
        }
        return OsClass::Other;
    }
    if s.contains("linux") {
        if let Some((major, minor)) = first_version(&s) {
            if (major, minor) >= (3, 4) {
                return OsClass::ModernAutotuning;
            }
        }
        return OsClass::Other;
    }
    OsClass::Other
}

fn first_version(s: &str) -> Option<(u32, u32)> {
    let bytes = s.as_bytes();
    let start = bytes.iter().position(|b| b.is_ascii_digit())?;
    let rest = &s[start..];
    let end = rest
        .find(|c: char| !c.is_ascii_digit() && c != '.')
        .unwrap_or(rest.len());
    let mut parts = rest[..end].split('.');
    let major = parts.next()?.parse().ok()?;
    let minor = parts.next().and_then(|m| m.parse().ok()).unwrap_or(0);
    Some((major, minor))
}

/// Override rules for OS classification: substring patterns checked in
/// order before the built-in table.
#[derive(Debug, Clone, Default)]
pub struct OsRules {
    rules: Vec<(String, OsClass)>,
}

impl OsRules {
    pub fn new(rules: Vec<(String, OsClass)>) -> Self {
        let rules = rules
            .into_iter()
            .map(|(p, c)| (p.to_ascii_lowercase(), c))
            .collect();
        Self { rules }
    }

    /// Load rules from a CSV file with rows `pattern,class`.
    pub fn load(path: &Path) -> Result<Self, IngestError> {
        let text = fs::read_to_string(path).map_err(|e| IngestError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        let mut rules = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || (i == 0 && line.starts_with("pattern")) {
                continue;
            }
            let (pattern, class) =
                line.rsplit_once(',')
                    .ok_or_else(|| IngestError::BadOsRule {
                        line: i + 1,
                        detail: "expected pattern,class".to_string(),
                    })?;
            let class = class
                .trim()
                .parse::<OsClass>()
                .map_err(|e| IngestError::BadOsRule {
                    line: i + 1,
                    detail: e,
                })?;
            rules.push((pattern.trim().to_string(), class));
        }
        Ok(Self::new(rules))
    }

    pub fn classify(&self, os: &str) -> OsClass {
        let s = os.trim().to_ascii_lowercase();
        for (pattern, class) in &self.rules {
            if !pattern.is_empty() && s.contains(pattern) {
                return *class;
            }
        }
        classify_os(os)
    }
}

/// Static CIDR prefix to (ISP, country) map; longest prefix wins.
#[derive(Debug, Clone)]
pub struct IspPrefixMap {
    entries: Vec<(IpNet, String, String)>,
}

impl IspPrefixMap {
    pub fn new(mut entries: Vec<(IpNet, String, String)>) -> Self {
        // Longest prefix first so the first containing entry wins.
        entries.sort_by(|a, b| {
            b.0.prefix_len()
                .cmp(&a.0.prefix_len())
                .then_with(|| a.0.cmp(&b.0))
        });
        Self { entries }
    }

    /// Load from a CSV file with rows `cidr,isp,country`.
    pub fn load(path: &Path) -> Result<Self, IngestError> {
        let text = fs::read_to_string(path).map_err(|e| IngestError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || (i == 0 && line.starts_with("cidr")) {
                continue;
            }
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            if fields.len() != 3 {
                return Err(IngestError::BadPrefixEntry {
                    line: i + 1,
                    detail: format!("expected cidr,isp,country, got {line:?}"),
                });
            }
            let net: IpNet = fields[0].parse().map_err(|e| IngestError::BadPrefixEntry {
                line: i + 1,
                detail: format!("bad cidr {:?}: {e}", fields[0]),
            })?;
            entries.push((net, fields[1].to_string(), fields[2].to_string()));
        }
        Ok(Self::new(entries))
    }

    /// Resolve an IP to (isp, country) by longest matching prefix.
    pub fn resolve(&self, ip: &str) -> Option<(&str, &str)> {
        let addr: IpAddr = ip.parse().ok()?;
        self.entries
            .iter()
            .find(|(net, _, _)| net.contains(&addr))
            .map(|(_, isp, country)| (isp.as_str(), country.as_str()))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Flat region to UTC-offset table (minutes, no DST).
#[derive(Debug, Clone, Default)]
pub struct TzTable {
    offsets: BTreeMap<String, i32>,
}

impl TzTable {
    pub fn new(offsets: BTreeMap<String, i32>) -> Self {
        Self { offsets }
    }

    /// Load from a CSV file with rows `region,utc_offset_minutes`.
    pub fn load(path: &Path) -> Result<Self, IngestError> {
        let text = fs::read_to_string(path).map_err(|e| IngestError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        let mut offsets = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || (i == 0 && line.starts_with("region")) {
                continue;
            }
            let (region, offset) = line.split_once(',').ok_or_else(|| IngestError::BadTzEntry {
                line: i + 1,
                detail: format!("expected region,utc_offset_minutes, got {line:?}"),
            })?;
            let offset: i32 = offset.trim().parse().map_err(|_| IngestError::BadTzEntry {
                line: i + 1,
                detail: format!("bad offset {:?}", offset.trim()),
            })?;
            offsets.insert(region.trim().to_string(), offset);
        }
        Ok(Self { offsets })
    }

    pub fn offset_minutes(&self, region: &str) -> Option<i32> {
        self.offsets.get(region).copied()
    }
}

/// Why a raw row was rejected.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum RejectReason {
    /// Row failed to parse at all.
    MalformedRow(String),
    /// A required field was absent (sparsely recorded test).
    SparseRecord(String),
    /// Neither the prefix map nor the hint could attribute an ISP.
    NoIspMatch,
    /// Region missing from the timezone table.
    UnknownRegion(String),
    NonPositiveSpeed,
    NegativeRtt,
    NonPositiveMss,
    NonPositiveRwnd,
    FracOutOfRange,
    BadTimestamp,
}

impl fmt::Display for RejectReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RejectReason::MalformedRow(d) => write!(f, "malformed row: {d}"),
            RejectReason::SparseRecord(field) => write!(f, "sparse record: missing {field}"),
            RejectReason::NoIspMatch => write!(f, "no ISP match"),
            RejectReason::UnknownRegion(r) => write!(f, "unknown region: {r}"),
            RejectReason::NonPositiveSpeed => write!(f, "non-positive speed"),
            RejectReason::NegativeRtt => write!(f, "negative min RTT"),
            RejectReason::NonPositiveMss => write!(f, "non-positive MSS"),
            RejectReason::NonPositiveRwnd => write!(f, "non-positive Rwnd"),
            RejectReason::FracOutOfRange => write!(f, "client limited fraction out of [0,1]"),
            RejectReason::BadTimestamp => write!(f, "timestamp out of range"),
        }
    }
}

/// A rejected input row: 1-based data row number plus the reason.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RejectedRow {
    pub row: usize,
    pub reason: RejectReason,
}

/// Result of parsing a raw record file: accepted records in input order
/// plus the reject log. `records.len() + rejects.len()` equals the number
/// of input data rows.
#[derive(Debug, Clone, Default)]
pub struct ParseOutcome {
    pub records: Vec<TestRecord>,
    pub rejects: Vec<RejectedRow>,
}

/// Raw input row, before validation. All fields optional so that sparse
/// rows deserialize and can be rejected with a field-specific reason.
#[derive(Debug, Default, Deserialize)]
struct RawRow {
    ip: Option<String>,
    timestamp_utc: Option<i64>,
    region: Option<String>,
    #[serde(default)]
    isp_hint: Option<String>,
    download_mbps: Option<f64>,
    min_rtt_ms: Option<f64>,
    mss_bytes: Option<u32>,
    rwnd_bytes: Option<u64>,
    #[serde(default)]
    os: Option<String>,
    congestion_count: Option<u32>,
    client_limited_frac: Option<f64>,
}

fn non_empty(s: &Option<String>) -> Option<&str> {
    s.as_deref().map(str::trim).filter(|s| !s.is_empty())
}

/// Country fallback for hint-attributed rows: the region's leading
/// alphabetic token (before `-` or `_`), uppercased, if it looks like a
/// country code.
fn country_from_region(region: &str) -> Option<String> {
    let head = region.split(['-', '_']).next()?;
    if (2..=3).contains(&head.len()) && head.chars().all(|c| c.is_ascii_alphabetic()) {
        Some(head.to_ascii_uppercase())
    } else {
        None
    }
}

fn validate_row(
    raw: RawRow,
    map: &IspPrefixMap,
    tz: &TzTable,
    os_rules: Option<&OsRules>,
) -> Result<TestRecord, RejectReason> {
    let ip = non_empty(&raw.ip)
        .ok_or_else(|| RejectReason::SparseRecord("ip".into()))?
        .to_string();
    let timestamp_utc = raw
        .timestamp_utc
        .ok_or_else(|| RejectReason::SparseRecord("timestamp_utc".into()))?;
    let region = non_empty(&raw.region)
        .ok_or_else(|| RejectReason::SparseRecord("region".into()))?
        .to_string();
    let download_mbps = raw
        .download_mbps
        .ok_or_else(|| RejectReason::SparseRecord("download_mbps".into()))?;
    let min_rtt_ms = raw
        .min_rtt_ms
        .ok_or_else(|| RejectReason::SparseRecord("min_rtt_ms".into()))?;
    let mss_bytes = raw
        .mss_bytes
        .ok_or_else(|| RejectReason::SparseRecord("mss_bytes".into()))?;
    let rwnd_bytes = raw
        .rwnd_bytes
        .ok_or_else(|| RejectReason::SparseRecord("rwnd_bytes".into()))?;
    let congestion_count = raw
        .congestion_count
        .ok_or_else(|| RejectReason::SparseRecord("congestion_count".into()))?;
    let client_limited_frac = raw
        .client_limited_frac
        .ok_or_else(|| RejectReason::SparseRecord("client_limited_frac".into()))?;

    let offset = tz
        .offset_minutes(&region)
        .ok_or_else(|| RejectReason::UnknownRegion(region.clone()))?;

    let (isp, country) = match map.resolve(&ip) {
        Some((isp, country)) => (isp.to_string(), country.to_string()),
        None => match (non_empty(&raw.isp_hint), country_from_region(&region)) {
            (Some(hint), Some(country)) => (hint.to_string(), country),
            _ => return Err(RejectReason::NoIspMatch),
        },
    };

    if !(download_mbps > 0.0) {
        return Err(RejectReason::NonPositiveSpeed);
    }
    if !(min_rtt_ms >= 0.0) {
        return Err(RejectReason::NegativeRtt);
    }
    if mss_bytes == 0 {
        return Err(RejectReason::NonPositiveMss);
    }
    if rwnd_bytes == 0 {
        return Err(RejectReason::NonPositiveRwnd);
    }
    if !(0.0..=1.0).contains(&client_limited_frac) {
        return Err(RejectReason::FracOutOfRange);
    }
    if utc_datetime(timestamp_utc).is_none() {
        return Err(RejectReason::BadTimestamp);
    }

    let os_str = non_empty(&raw.os).unwrap_or("");
    let os_class = match os_rules {
        Some(rules) => rules.classify(os_str),
        None => classify_os(os_str),
    };

    Ok(TestRecord {
        client_ip: ip,
        timestamp_utc,
        local_hour: local_hour(timestamp_utc, offset),
        isp,
        country,
        download_mbps,
        min_rtt_ms,
        mss_bytes,
        rwnd_bytes,
        os_class,
        congestion_count,
        client_limited_frac,
    })
}

/// Parse raw CSV content (documented header, extra columns ignored).
pub fn parse_records_csv(
    content: &str,
    map: &IspPrefixMap,
    tz: &TzTable,
    os_rules: Option<&OsRules>,
) -> ParseOutcome {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(content.as_bytes());
    let mut outcome = ParseOutcome::default();
    for (i, row) in reader.deserialize::<RawRow>().enumerate() {
        let row_no = i + 1;
        match row {
            Ok(raw) => match validate_row(raw, map, tz, os_rules) {
                Ok(record) => outcome.records.push(record),
                Err(reason) => outcome.rejects.push(RejectedRow { row: row_no, reason }),
            },
            Err(e) => outcome.rejects.push(RejectedRow {
                row: row_no,
                reason: RejectReason::MalformedRow(e.to_string()),
            }),
        }
    }
    outcome
}

/// Parse JSON-lines content; blank lines are skipped.
pub fn parse_records_jsonl(
    content: &str,
    map: &IspPrefixMap,
    tz: &TzTable,
    os_rules: Option<&OsRules>,
) -> ParseOutcome {
    let mut outcome = ParseOutcome::default();
    let mut row_no = 0;
    for line in content.lines() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        row_no += 1;
        match serde_json::from_str::<RawRow>(line) {
            Ok(raw) => match validate_row(raw, map, tz, os_rules) {
                Ok(record) => outcome.records.push(record),
                Err(reason) => outcome.rejects.push(RejectedRow { row: row_no, reason }),
            },
            Err(e) => outcome.rejects.push(RejectedRow {
                row: row_no,
                reason: RejectReason::MalformedRow(e.to_string()),
            }),
        }
    }
    outcome
}

/// Parse a raw record file, sniffing CSV vs JSON lines from the first
/// non-whitespace byte.
pub fn parse_records_path(
    path: &Path,
    map: &IspPrefixMap,
    tz: &TzTable,
    os_rules: Option<&OsRules>,
) -> Result<ParseOutcome, IngestError> {
    let content = fs::read_to_string(path).map_err(|e| IngestError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    let jsonl = content.trim_start().starts_with('{');
    Ok(if jsonl {
        parse_records_jsonl(&content, map, tz, os_rules)
    } else {
        parse_records_csv(&content, map, tz, os_rules)
    })
}

/// Write normalized records as CSV. Field order matches [`TestRecord`]
/// declaration order; floats round-trip bit-exactly.
pub fn write_records(path: &Path, records: &[TestRecord]) -> Result<(), IngestError> {
    let mut writer = csv::Writer::from_path(path).map_err(IngestError::Csv)?;
    for record in records {
        writer.serialize(record)?;
    }
    writer.flush().map_err(|e| IngestError::Write {
        path: path.display().to_string(),
        source: e,
    })?;
    Ok(())
}

/// Read normalized records back. Unlike raw parsing this is strict: any
/// bad row is an error, since normalized files are produced by this crate.
pub fn read_records(path: &Path) -> Result<Vec<TestRecord>, IngestError> {
    let mut reader = csv::Reader::from_path(path).map_err(IngestError::Csv)?;
    let mut records = Vec::new();
    for (i, row) in reader.deserialize::<TestRecord>().enumerate() {
        let record = row.map_err(|e| IngestError::BadRecord {
            path: path.display().to_string(),
            row: i + 1,
            detail: e.to_string(),
        })?;
        records.push(record);
    }
    Ok(records)
}

/// Write the reject log as CSV rows `row,reason`.
pub fn write_rejects(path: &Path, rejects: &[RejectedRow]) -> Result<(), IngestError> {
    let mut writer = csv::Writer::from_path(path).map_err(IngestError::Csv)?;
    writer.write_record(["row", "reason"])?;
    for reject in rejects {
        writer.write_record([reject.row.to_string(), reject.reason.to_string()])?;
    }
    writer.flush().map_err(|e| IngestError::Write {
        path: path.display().to_string(),
        source: e,
    })?;
    Ok(())
}
