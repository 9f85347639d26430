//! Usability, anxiety and session summary statistics.
//!
//! Session records come from a CSV with one row per session:
//! `setup_min,attempts,reg_err_cm,sus1..sus10,stai_pre,stai_post,training_h`.
//! [`summarize`] gives mean and sample SD per metric; [`normalize_for_chart`]
//! maps a summary and a baseline onto 0–100 bars for a grouped bar chart.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::{Config, ConfigError};

#[derive(Debug, thiserror::Error)]
pub enum MetricsError {
    #[error("{0}")]
    Validation(String),
    #[error("record {row}: {message}")]
    Record { row: usize, message: String },
    #[error("need at least 2 records for a standard deviation, got {0}")]
    InsufficientData(usize),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("{0}")]
    Io(#[from] std::io::Error),
}

pub const SUS_ITEMS: usize = 10;
pub const STAI_RANGE: std::ops::RangeInclusive<f64> = 20.0..=80.0;

/// Standard SUS scoring: odd items contribute `r − 1`, even items `5 − r`,
/// and the sum is scaled by 2.5 onto 0–100.
pub fn sus_score(responses: &[u8]) -> Result<f64, MetricsError> {
    if responses.len() != SUS_ITEMS {
        return Err(MetricsError::Validation(format!("SUS needs {SUS_ITEMS} responses, got {}", responses.len())));
    }
    let mut total = 0u32;
    for (i, &r) in responses.iter().enumerate() {
        if !(1..=5).contains(&r) {
            return Err(MetricsError::Validation(format!("SUS item {} is {r}, expected 1-5", i + 1)));
        }
        total += if i % 2 == 0 { u32::from(r) - 1 } else { 5 - u32::from(r) };
    }
    Ok(f64::from(total) * 2.5)
}

/// Signed percent change of the STAI score relative to the pre-session
/// score; negative means anxiety went down.
pub fn anxiety_reduction(pre: f64, post: f64) -> Result<f64, MetricsError> {
    for (name, v) in [("pre", pre), ("post", post)] {
        if !STAI_RANGE.contains(&v) {
            return Err(MetricsError::Validation(format!("STAI {name} score {v} outside 20-80")));
        }
    }
    Ok(100.0 * (post - pre) / pre)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionRecord {
    pub setup_time_min: f64,
    pub calibration_attempts: u32,
    pub registration_error_m: f64,
    pub sus_responses: [u8; SUS_ITEMS],
    pub stai_pre: f64,
    pub stai_post: f64,
    pub training_hours: f64,
}

impl SessionRecord {
    pub fn validate(&self) -> Result<(), MetricsError> {
        if self.calibration_attempts < 1 {
            return Err(MetricsError::Validation("calibration attempts must be at least 1".into()));
        }
        for (name, v) in [
            ("setup time", self.setup_time_min),
            ("registration error", self.registration_error_m),
            ("training hours", self.training_hours),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(MetricsError::Validation(format!("{name} must be a non-negative number, got {v}")));
            }
        }
        sus_score(&self.sus_responses)?;
        anxiety_reduction(self.stai_pre, self.stai_post)?;
        Ok(())
    }

    pub fn sus(&self) -> f64 {
        sus_score(&self.sus_responses).expect("validated record")
    }

    pub fn anxiety_change_percent(&self) -> f64 {
        anxiety_reduction(self.stai_pre, self.stai_post).expect("validated record")
    }
}

/// CSV row layout; registration error is in centimetres on disk.
#[derive(Debug, Serialize, Deserialize)]
struct Row {
    setup_min: f64,
    attempts: u32,
    reg_err_cm: f64,
    sus1: u8,
    sus2: u8,
    sus3: u8,
    sus4: u8,
    sus5: u8,
    sus6: u8,
    sus7: u8,
    sus8: u8,
    sus9: u8,
    sus10: u8,
    stai_pre: f64,
    stai_post: f64,
    training_h: f64,
}

impl From<Row> for SessionRecord {
    fn from(r: Row) -> Self {
        SessionRecord {
            setup_time_min: r.setup_min,
            calibration_attempts: r.attempts,
            registration_error_m: r.reg_err_cm / 100.0,
            sus_responses: [r.sus1, r.sus2, r.sus3, r.sus4, r.sus5, r.sus6, r.sus7, r.sus8, r.sus9, r.sus10],
            stai_pre: r.stai_pre,
            stai_post: r.stai_post,
            training_hours: r.training_h,
        }
    }
}

impl From<&SessionRecord> for Row {
    fn from(r: &SessionRecord) -> Self {
        let s = r.sus_responses;
        Row {
            setup_min: r.setup_time_min,
            attempts: r.calibration_attempts,
            reg_err_cm: r.registration_error_m * 100.0,
            sus1: s[0],
            sus2: s[1],
            sus3: s[2],
            sus4: s[3],
            sus5: s[4],
            sus6: s[5],
            sus7: s[6],
            sus8: s[7],
            sus9: s[8],
            sus10: s[9],
            stai_pre: r.stai_pre,
            stai_post: r.stai_post,
            training_h: r.training_hours,
        }
    }
}

/// Reads and validates session records; rows are numbered from 1.
pub fn read_sessions<R: Read>(input: R) -> Result<Vec<SessionRecord>, MetricsError> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input);
    let mut out = Vec::new();
    for (i, row) in reader.deserialize::<Row>().enumerate() {
        let rec = SessionRecord::from(row?);
        rec.validate().map_err(|e| MetricsError::Record { row: i + 1, message: e.to_string() })?;
        out.push(rec);
    }
    Ok(out)
}

pub fn load_sessions(path: &Path) -> Result<Vec<SessionRecord>, MetricsError> {
    let file = std::fs::File::open(path)
        .map_err(|e| std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))?;
    read_sessions(file)
}

pub fn write_sessions<W: Write>(records: &[SessionRecord], out: W) -> Result<(), MetricsError> {
    let mut w = csv::Writer::from_writer(out);
    for r in records {
        w.serialize(Row::from(r))?;
    }
    w.flush()?;
    Ok(())
}

/// Mean and sample (n − 1) standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub sd: f64,
}

impl Stat {
    pub fn of(values: &[f64]) -> Result<Stat, MetricsError> {
        let n = values.len();
        if n < 2 {
            return Err(MetricsError::InsufficientData(n));
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let ss: f64 = values.iter().map(|v| (v - mean).powi(2)).sum();
        Ok(Stat { mean, sd: (ss / (n - 1) as f64).sqrt() })
    }
}

/// Table of session metrics; field names carry the units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsSummary {
    pub sessions: usize,
    pub setup_time_min: Stat,
    pub calibration_attempts: Stat,
    pub registration_error_cm: Stat,
    pub sus_score: Stat,
    /// Mean of per-session percent changes of the STAI score.
    pub anxiety_change_percent: Stat,
    pub training_hours: Stat,
}

/// Metrics that can be charted, with their config key.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Metric {
    SetupTime,
    CalibrationAttempts,
    RegistrationError,
    Sus,
    AnxietyReduction,
    Training,
}

impl Metric {
    pub const ALL: [Metric; 6] = [
        Metric::SetupTime,
        Metric::CalibrationAttempts,
        Metric::RegistrationError,
        Metric::Sus,
        Metric::AnxietyReduction,
        Metric::Training,
    ];

    /// The bars of the comparison chart, in display order.
    pub const CHARTED: [Metric; 5] =
        [Metric::SetupTime, Metric::CalibrationAttempts, Metric::Sus, Metric::AnxietyReduction, Metric::Training];

    pub fn key(self) -> &'static str {
        match self {
            Metric::SetupTime => "setup_time",
            Metric::CalibrationAttempts => "calibration",
            Metric::RegistrationError => "registration_error",
            Metric::Sus => "usability",
            Metric::AnxietyReduction => "anxiety_reduction",
            Metric::Training => "training",
        }
    }
}

impl MetricsSummary {
    pub fn get(&self, m: Metric) -> Stat {
        match m {
            Metric::SetupTime => self.setup_time_min,
            Metric::CalibrationAttempts => self.calibration_attempts,
            Metric::RegistrationError => self.registration_error_cm,
            Metric::Sus => self.sus_score,
            Metric::AnxietyReduction => self.anxiety_change_percent,
            Metric::Training => self.training_hours,
        }
    }
}

pub fn summarize(records: &[SessionRecord]) -> Result<MetricsSummary, MetricsError> {
    if records.len() < 2 {
        return Err(MetricsError::InsufficientData(records.len()));
    }
    for (i, r) in records.iter().enumerate() {
        r.validate().map_err(|e| MetricsError::Record { row: i + 1, message: e.to_string() })?;
    }
    // Sorting makes the floating-point sums independent of record order.
    let stat = |f: &dyn Fn(&SessionRecord) -> f64| {
        let mut v: Vec<f64> = records.iter().map(f).collect();
        v.sort_by(f64::total_cmp);
        Stat::of(&v)
    };
    Ok(MetricsSummary {
        sessions: records.len(),
        setup_time_min: stat(&|r| r.setup_time_min)?,
        calibration_attempts: stat(&|r| f64::from(r.calibration_attempts))?,
        registration_error_cm: stat(&|r| r.registration_error_m * 100.0)?,
        sus_score: stat(&|r| r.sus())?,
        anxiety_change_percent: stat(&|r| r.anxiety_change_percent())?,
        training_hours: stat(&|r| r.training_hours)?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    HigherBetter,
    LowerBetter,
}

/// How one metric's mean becomes a 0–100 bar: linear between the `worst`
/// and `best` anchors, clamped, rounded to `decimals`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BarMapping {
    pub label: String,
    pub direction: Direction,
    pub best: f64,
    pub worst: f64,
    pub decimals: u32,
}

impl BarMapping {
    pub fn bar(&self, value: f64) -> f64 {
        let span = (self.best - self.worst).abs();
        let score = match self.direction {
            Direction::HigherBetter => (value - self.worst) / span,
            Direction::LowerBetter => (self.worst - value) / span,
        };
        let p = 10f64.powi(self.decimals as i32);
        ((100.0 * score).clamp(0.0, 100.0) * p).round() / p
    }
}

/// Bar mapping shipped with the crate. It reproduces the published
/// comparison chart from the bundled datasets; it is presentation only.
/// Anxiety is mapped so a reduction of x % gives a bar of x.
pub const DEFAULT_CHART_CONFIG: &str = "\
[chart.setup_time]
label = Setup time
direction = lower_better
best = 0
worst = 45
decimals = 1

[chart.calibration]
label = Calibration
direction = lower_better
best = 0
worst = 22
decimals = 1

[chart.usability]
label = Usability
direction = higher_better
best = 100
worst = 0
decimals = 1

[chart.anxiety_reduction]
label = Anxiety reduction
direction = lower_better
best = -100
worst = 0
decimals = 0

[chart.training]
label = Training
direction = lower_better
best = 0
worst = 5
decimals = 1
";

#[derive(Debug, Clone, PartialEq)]
pub struct ChartMapping {
    pub bars: Vec<(Metric, BarMapping)>,
}

impl ChartMapping {
    /// Reads `[chart.<metric>]` sections for every charted metric.
    pub fn from_config(cfg: &Config) -> Result<Self, MetricsError> {
        let mut bars = Vec::new();
        for m in Metric::CHARTED {
            let name = format!("chart.{}", m.key());
            let s = cfg.section(&name).ok_or_else(|| {
                ConfigError::Invalid { section: name.clone(), key: "*".into(), message: "metric missing from chart mapping".into() }
            })?;
            let req = |key: &str| -> Result<f64, ConfigError> {
                s.get::<f64>(key)?.ok_or_else(|| s.invalid(key, "required"))
            };
            let direction = match s.raw("direction") {
                Some("higher_better") => Direction::HigherBetter,
                Some("lower_better") => Direction::LowerBetter,
                other => return Err(s.invalid("direction", format!("expected higher_better or lower_better, got {other:?}")).into()),
            };
            let mapping = BarMapping {
                label: s.raw("label").unwrap_or(m.key()).to_string(),
                direction,
                best: req("best")?,
                worst: req("worst")?,
                decimals: s.get_or("decimals", 1)?,
            };
            if !(mapping.best - mapping.worst).is_normal() {
                return Err(s.invalid("best", "best and worst must differ").into());
            }
            bars.push((m, mapping));
        }
        Ok(ChartMapping { bars })
    }

    pub fn default_mapping() -> Self {
        Self::from_config(&Config::parse(DEFAULT_CHART_CONFIG).expect("built-in chart config parses"))
            .expect("built-in chart config is complete")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChartRow {
    pub metric: String,
    pub system_value: f64,
    pub baseline_value: f64,
}

pub fn normalize_for_chart(summary: &MetricsSummary, baseline: &MetricsSummary, mapping: &ChartMapping) -> Vec<ChartRow> {
    mapping
        .bars
        .iter()
        .map(|(m, b)| ChartRow {
            metric: b.label.clone(),
            system_value: b.bar(summary.get(*m).mean),
            baseline_value: b.bar(baseline.get(*m).mean),
        })
        .collect()
}

pub fn write_chart<W: Write>(rows: &[ChartRow], out: W) -> Result<(), MetricsError> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(sus: [u8; 10], pre: f64, post: f64) -> SessionRecord {
        SessionRecord {
            setup_time_min: 4.0,
            calibration_attempts: 1,
            registration_error_m: 0.012,
            sus_responses: sus,
            stai_pre: pre,
            stai_post: post,
            training_hours: 2.0,
        }
    }

    #[test]
    fn sus_examples() {
        assert_eq!(sus_score(&[5, 1, 5, 1, 5, 1, 5, 1, 5, 1]).unwrap(), 100.0);
        assert_eq!(sus_score(&[3; 10]).unwrap(), 50.0);
        assert_eq!(sus_score(&[5, 2, 4, 2, 5, 1, 4, 2, 5, 1]).unwrap(), 87.5);
        assert_eq!(sus_score(&[1, 5, 1, 5, 1, 5, 1, 5, 1, 5]).unwrap(), 0.0);
    }

    #[test]
    fn sus_rejects_bad_input() {
        assert!(sus_score(&[3; 9]).is_err());
        assert!(sus_score(&[3, 3, 3, 3, 3, 3, 3, 3, 3, 6]).is_err());
        assert!(sus_score(&[0, 3, 3, 3, 3, 3, 3, 3, 3, 3]).is_err());
    }

    #[test]
    fn anxiety_examples() {
        assert_eq!(anxiety_reduction(50.0, 40.0).unwrap(), -20.0);
        assert_eq!(anxiety_reduction(47.0, 47.0).unwrap(), 0.0);
        assert!(anxiety_reduction(19.0, 30.0).is_err());
        assert!(anxiety_reduction(30.0, 81.0).is_err());
    }

    #[test]
    fn identical_records_have_zero_spread() {
        let r = record([4, 2, 4, 2, 4, 2, 4, 2, 4, 2], 50.0, 40.0);
        let s = summarize(&[r.clone(), r]).unwrap();
        for m in Metric::ALL {
            assert_eq!(s.get(m).sd, 0.0, "{m:?}");
        }
        assert_eq!(s.sus_score.mean, 75.0);
        assert!((s.registration_error_cm.mean - 1.2).abs() < 1e-12);
    }

    #[test]
    fn one_record_is_not_enough() {
        let r = record([3; 10], 50.0, 40.0);
        assert!(matches!(summarize(&[r]), Err(MetricsError::InsufficientData(1))));
        assert!(matches!(summarize(&[]), Err(MetricsError::InsufficientData(0))));
    }

    #[test]
    fn sample_sd_uses_n_minus_one() {
        let s = Stat::of(&[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(s.mean, 2.5);
        assert!((s.sd - (5.0f64 / 3.0).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn csv_round_trip() {
        let recs = vec![record([4, 2, 4, 2, 4, 2, 4, 2, 4, 2], 50.0, 40.0), record([3; 10], 60.0, 45.0)];
        let mut buf = Vec::new();
        write_sessions(&recs, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("setup_min,attempts,reg_err_cm,sus1,"));
        let back = read_sessions(&buf[..]).unwrap();
        assert_eq!(back.len(), 2);
        assert!((back[0].registration_error_m - 0.012).abs() < 1e-15);
        assert_eq!(back[1].sus_responses, [3; 10]);
    }

    #[test]
    fn bad_row_is_reported_with_its_number() {
        let csv = "setup_min,attempts,reg_err_cm,sus1,sus2,sus3,sus4,sus5,sus6,sus7,sus8,sus9,sus10,stai_pre,stai_post,training_h\n\
                   4,1,1.2,3,3,3,3,3,3,3,3,3,3,50,40,2\n\
                   4,0,1.2,3,3,3,3,3,3,3,3,3,3,50,40,2\n";
        match read_sessions(csv.as_bytes()) {
            Err(MetricsError::Record { row: 2, .. }) => {}
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn chart_examples() {
        let mapping = ChartMapping::default_mapping();
        let anxiety = &mapping.bars.iter().find(|(m, _)| *m == Metric::AnxietyReduction).unwrap().1;
        assert_eq!(anxiety.bar(-20.2), 20.0);
        assert_eq!(anxiety.bar(0.0), 0.0);
        let s = summarize(&[record([3; 10], 50.0, 40.0), record([4; 10], 60.0, 45.0)]).unwrap();
        let rows = normalize_for_chart(&s, &s, &mapping);
        assert_eq!(rows.len(), 5);
        assert!(rows.iter().all(|r| r.system_value == r.baseline_value));
    }

    #[test]
    fn missing_metric_is_a_config_error() {
        let cfg = Config::parse(&DEFAULT_CHART_CONFIG.replace("[chart.training]", "[chart.other]")).unwrap();
        assert!(matches!(ChartMapping::from_config(&cfg), Err(MetricsError::Config(_))));
    }
}
