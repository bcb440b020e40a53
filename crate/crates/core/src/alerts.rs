//! Threshold evaluation, notification records and emission cadence.

use std::collections::BTreeMap;
use std::fmt;

use serde::Deserialize;
use thiserror::Error;

use crate::blocks::{format_centi, from_centi, to_centi, SensorTable, Variable};
use crate::stats::WindowStats;

/// Cadence while a stream is green.
pub const GREEN_CADENCE_SECS: u64 = 30 * 60;
/// Cadence while a stream is yellow or red.
pub const ALERT_CADENCE_SECS: u64 = 15 * 60;

#[derive(Debug, Error, PartialEq)]
pub enum AlertError {
    #[error("no threshold policy for {0}")]
    MissingPolicy(Variable),
    #[error("{variable}: yellow limit must be below red limit")]
    LimitOrder { variable: Variable },
    #[error("{variable}: limit {limit} outside the sensor operating range")]
    LimitOutOfRange { variable: Variable, limit: i64 },
    #[error("{variable}: policy defines no limit")]
    NoLimits { variable: Variable },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Status {
    Good,
    Moderate,
    Bad,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Color {
    Green,
    Yellow,
    Red,
}

impl Status {
    pub fn color(self) -> Color {
        match self {
            Status::Good => Color::Green,
            Status::Moderate => Color::Yellow,
            Status::Bad => Color::Red,
        }
    }

    pub fn cadence_secs(self) -> u64 {
        match self {
            Status::Good => GREEN_CADENCE_SECS,
            Status::Moderate | Status::Bad => ALERT_CADENCE_SECS,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Status::Good => "good",
            Status::Moderate => "moderate",
            Status::Bad => "bad",
        }
    }
}

impl fmt::Display for Status {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl fmt::Display for Color {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Color::Green => "green",
            Color::Yellow => "yellow",
            Color::Red => "red",
        })
    }
}

/// Upper limits on a variable's rolling average, in hundredths. Either
/// limit may be absent; a missing yellow limit means the stream goes
/// straight from green to red.
#[derive(Debug, Clone, PartialEq)]
pub struct ThresholdPolicy {
    pub variable: Variable,
    pub yellow_limit: Option<i64>,
    pub red_limit: Option<i64>,
    /// Real-world averaging period in seconds; `None` averages the whole
    /// statistics window.
    pub averaging_window_secs: Option<u64>,
}

const HOUR: u64 = 3600;
const DAY: u64 = 24 * HOUR;
const YEAR: u64 = 365 * DAY;

impl ThresholdPolicy {
    pub fn validate(&self, sensors: &SensorTable) -> Result<(), AlertError> {
        let variable = self.variable;
        let spec = sensors.get(variable);
        for limit in [self.yellow_limit, self.red_limit].into_iter().flatten() {
            if !spec.contains(limit) {
                return Err(AlertError::LimitOutOfRange { variable, limit });
            }
        }
        match (self.yellow_limit, self.red_limit) {
            (Some(y), Some(r)) if y >= r => Err(AlertError::LimitOrder { variable }),
            (None, None) => Err(AlertError::NoLimits { variable }),
            _ => Ok(()),
        }
    }

    /// Samples in the averaging window once real time is divided by
    /// `compression` and sampled every `cycle_secs`; at least one, at most
    /// `capacity`.
    pub fn averaging_samples(&self, cycle_secs: u64, compression: u64, capacity: usize) -> usize {
        match self.averaging_window_secs {
            None => capacity,
            Some(secs) => {
                let scaled = secs / compression.max(1);
                let k = scaled.div_ceil(cycle_secs.max(1));
                (k as usize).clamp(1, capacity)
            }
        }
    }
}

/// Default policies.
///
/// CO2 uses the 500 to 1000 ppm band edges as yellow/red. PM2.5 and PM10 use
/// the annual limit as yellow and, for PM10, the daily limit as red; a
/// single published limit becomes the red limit. NO2, SO2 and CO limits are
/// published in µg/m³ at levels below the ppm floor of their sensors and
/// smoke has none, so those variables get no default policy. Temperature
/// and humidity use comfort bands.
pub fn default_policies() -> Vec<ThresholdPolicy> {
    vec![
        ThresholdPolicy {
            variable: Variable::Co2,
            yellow_limit: Some(to_centi(500.0)),
            red_limit: Some(to_centi(1000.0)),
            averaging_window_secs: None,
        },
        ThresholdPolicy {
            variable: Variable::Pm2_5,
            yellow_limit: None,
            red_limit: Some(to_centi(25.0)),
            averaging_window_secs: Some(YEAR),
        },
        ThresholdPolicy {
            variable: Variable::Pm10,
            yellow_limit: Some(to_centi(40.0)),
            red_limit: Some(to_centi(50.0)),
            averaging_window_secs: Some(DAY),
        },
        ThresholdPolicy {
            variable: Variable::T,
            yellow_limit: Some(to_centi(27.0)),
            red_limit: Some(to_centi(30.0)),
            averaging_window_secs: Some(HOUR),
        },
        ThresholdPolicy {
            variable: Variable::H,
            yellow_limit: Some(to_centi(70.0)),
            red_limit: Some(to_centi(80.0)),
            averaging_window_secs: Some(HOUR),
        },
    ]
}

/// Policy override as written in a configuration file (values in the
/// variable's unit).
///
/// ```toml
/// [[policies]]
/// variable = "co"
/// yellow = 35.0
/// red = 100.0
/// averaging_window_secs = 3600
/// ```
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyOverride {
    pub variable: Variable,
    pub yellow: Option<f64>,
    pub red: Option<f64>,
    pub averaging_window_secs: Option<u64>,
}

impl From<&PolicyOverride> for ThresholdPolicy {
    fn from(o: &PolicyOverride) -> Self {
        ThresholdPolicy {
            variable: o.variable,
            yellow_limit: o.yellow.map(to_centi),
            red_limit: o.red.map(to_centi),
            averaging_window_secs: o.averaging_window_secs,
        }
    }
}

/// Policies keyed by variable.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicySet {
    policies: BTreeMap<Variable, ThresholdPolicy>,
}

impl Default for PolicySet {
    fn default() -> Self {
        Self::from_policies(default_policies())
    }
}

impl PolicySet {
    pub fn from_policies(policies: impl IntoIterator<Item = ThresholdPolicy>) -> Self {
        Self {
            policies: policies.into_iter().map(|p| (p.variable, p)).collect(),
        }
    }

    pub fn insert(&mut self, policy: ThresholdPolicy) {
        self.policies.insert(policy.variable, policy);
    }

    pub fn get(&self, variable: Variable) -> Result<&ThresholdPolicy, AlertError> {
        self.policies
            .get(&variable)
            .ok_or(AlertError::MissingPolicy(variable))
    }

    pub fn iter(&self) -> impl Iterator<Item = &ThresholdPolicy> {
        self.policies.values()
    }

    pub fn validate(&self, sensors: &SensorTable) -> Result<(), AlertError> {
        self.policies.values().try_for_each(|p| p.validate(sensors))
    }

    /// Evaluates `stats` against the variable's policy.
    pub fn evaluate(&self, variable: Variable, stats: &WindowStats) -> Result<Status, AlertError> {
        Ok(evaluate(stats, self.get(variable)?))
    }
}

/// Status of a rolling average (in the variable's unit) against a policy.
/// Values on a limit take the worse status.
pub fn evaluate_average(average: f64, policy: &ThresholdPolicy) -> Status {
    let reaches = |limit: Option<i64>| limit.is_some_and(|l| average >= from_centi(l));
    if reaches(policy.red_limit) {
        Status::Bad
    } else if reaches(policy.yellow_limit) {
        Status::Moderate
    } else {
        Status::Good
    }
}

/// Status for statistics computed over the policy's averaging window.
pub fn evaluate(stats: &WindowStats, policy: &ThresholdPolicy) -> Status {
    evaluate_average(stats.mean, policy)
}

/// The six-field status/alert record.
#[derive(Debug, Clone, PartialEq)]
pub struct Notification {
    pub variable: Variable,
    /// Hundredths.
    pub last_value: i64,
    pub state: Status,
    /// Rolling average in the variable's unit.
    pub average: f64,
    pub cv_percent: Option<f64>,
    pub color: Color,
    pub zone_id: String,
    /// Sensor node whose stream produced the record.
    pub device_id: String,
}

impl Notification {
    pub fn cv_text(&self) -> String {
        self.cv_percent
            .map_or_else(|| "n/a".to_string(), |cv| format!("{cv:.2}"))
    }

    /// Stable `key=value` rendering used in transcripts and CLI output.
    pub fn render(&self) -> String {
        format!(
            "zone={} device={} variable={} last={} state={} average={:.2} cv={} color={}",
            self.zone_id,
            self.device_id,
            self.variable,
            format_centi(self.last_value),
            self.state,
            self.average,
            self.cv_text(),
            self.color,
        )
    }
}

/// Builds the notification. `average` is the rolling average that was
/// evaluated; `window` supplies the last value and dispersion.
pub fn build_notification(
    variable: Variable,
    window: &WindowStats,
    average: f64,
    status: Status,
    zone_id: &str,
    device_id: &str,
) -> Notification {
    Notification {
        variable,
        last_value: window.last,
        state: status,
        average,
        cv_percent: window.cv_percent,
        color: status.color(),
        zone_id: zone_id.to_string(),
        device_id: device_id.to_string(),
    }
}

/// One monitored stream.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct StreamKey {
    pub zone_id: String,
    pub device_id: String,
    pub variable: Variable,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Slot {
    next_emission: u64,
    emitted_status: Status,
}

/// Per-stream emission times.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct EmissionSchedule {
    slots: BTreeMap<StreamKey, Slot>,
}

impl EmissionSchedule {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn next_emission(&self, key: &StreamKey) -> Option<u64> {
        self.slots.get(key).map(|s| s.next_emission)
    }

    /// Earliest pending emission across all streams.
    pub fn next_due(&self) -> Option<u64> {
        self.slots.values().map(|s| s.next_emission).min()
    }

    pub fn cadence(&self, key: &StreamKey) -> Option<u64> {
        self.slots.get(key).map(|s| s.emitted_status.cadence_secs())
    }
}

/// Latest evaluation of one stream, ready to be emitted.
#[derive(Debug, Clone, PartialEq)]
pub struct StreamStatus {
    pub key: StreamKey,
    pub notification: Notification,
}

/// Emits every stream whose slot is due at `now`, plus every stream that
/// is new or whose status worsened since its last emission. Each emission
/// reschedules the stream at `now + cadence(status)`.
pub fn due_notifications(
    schedule: &mut EmissionSchedule,
    now: u64,
    latest: &[StreamStatus],
) -> Vec<Notification> {
    let mut out = Vec::new();
    for status in latest {
        let state = status.notification.state;
        let due = match schedule.slots.get(&status.key) {
            None => true,
            Some(slot) => slot.next_emission <= now || state > slot.emitted_status,
        };
        if due {
            schedule.slots.insert(
                status.key.clone(),
                Slot {
                    next_emission: now + state.cadence_secs(),
                    emitted_status: state,
                },
            );
            out.push(status.notification.clone());
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stats::{compute_stats, sturges_scheme, StatsWindow};

    fn co2() -> ThresholdPolicy {
        PolicySet::default().get(Variable::Co2).unwrap().clone()
    }

    fn stats_of(values: &[i64]) -> WindowStats {
        let mut w = StatsWindow::default();
        values.iter().for_each(|&v| w.push(v));
        compute_stats(&w, &sturges_scheme(50, 35000, 1_000_000).unwrap()).unwrap()
    }

    fn status(key: &StreamKey, state: Status) -> StreamStatus {
        StreamStatus {
            key: key.clone(),
            notification: Notification {
                variable: key.variable,
                last_value: 0,
                state,
                average: 0.0,
                cv_percent: None,
                color: state.color(),
                zone_id: key.zone_id.clone(),
                device_id: key.device_id.clone(),
            },
        }
    }

    fn key() -> StreamKey {
        StreamKey {
            zone_id: "z".into(),
            device_id: "d".into(),
            variable: Variable::Co2,
        }
    }

    #[test]
    fn co2_thresholds() {
        let p = co2();
        assert_eq!(evaluate(&stats_of(&[45000; 5]), &p), Status::Good);
        assert_eq!(evaluate(&stats_of(&[120000; 5]), &p), Status::Bad);
        assert_eq!(evaluate(&stats_of(&[100000; 5]), &p), Status::Bad);
        assert_eq!(evaluate(&stats_of(&[50000; 5]), &p), Status::Moderate);
        assert_eq!(evaluate(&stats_of(&[99999; 5]), &p), Status::Moderate);
        assert_eq!(evaluate(&stats_of(&[49999; 5]), &p), Status::Good);
    }

    #[test]
    fn missing_policy_is_a_configuration_error() {
        let set = PolicySet::default();
        assert_eq!(set.get(Variable::Smoke), Err(AlertError::MissingPolicy(Variable::Smoke)));
        assert_eq!(
            set.evaluate(Variable::Smoke, &stats_of(&[30000])),
            Err(AlertError::MissingPolicy(Variable::Smoke))
        );
        assert_eq!(set.evaluate(Variable::Co2, &stats_of(&[45000])), Ok(Status::Good));
    }

    #[test]
    fn default_policies_validate() {
        PolicySet::default().validate(&SensorTable::default()).unwrap();
        let bad = ThresholdPolicy {
            variable: Variable::Co2,
            yellow_limit: Some(100000),
            red_limit: Some(50000),
            averaging_window_secs: None,
        };
        assert!(bad.validate(&SensorTable::default()).is_err());
        let out_of_range = ThresholdPolicy {
            variable: Variable::Co,
            yellow_limit: None,
            red_limit: Some(1),
            averaging_window_secs: None,
        };
        assert!(matches!(
            out_of_range.validate(&SensorTable::default()),
            Err(AlertError::LimitOutOfRange { .. })
        ));
    }

    #[test]
    fn single_limit_policy() {
        let pm = PolicySet::default().get(Variable::Pm2_5).unwrap().clone();
        assert_eq!(evaluate_average(24.99, &pm), Status::Good);
        assert_eq!(evaluate_average(25.0, &pm), Status::Bad);
    }

    #[test]
    fn averaging_window_samples() {
        let set = PolicySet::default();
        let pm10 = set.get(Variable::Pm10).unwrap();
        assert_eq!(pm10.averaging_samples(600, 1, 50), 50);
        assert_eq!(pm10.averaging_samples(600, 144, 50), 1);
        assert_eq!(pm10.averaging_samples(600, 24, 50), 6);
        assert_eq!(co2().averaging_samples(600, 1, 50), 50);
    }

    #[test]
    fn notification_fields() {
        let st = stats_of(&[45000; 3]);
        let n = build_notification(Variable::Co2, &st, st.mean, Status::Good, "gate-a", "s1");
        assert_eq!(n.state, Status::Good);
        assert_eq!(n.color, Color::Green);
        assert_eq!(n.zone_id, "gate-a");
        assert_eq!(n.average, 450.0);
        assert_eq!(n.last_value, 45000);
        assert_eq!(n.cv_text(), "0.00");
        let zero_mean = stats_of(&[-100, 100]);
        let n = build_notification(Variable::T, &zero_mean, 0.0, Status::Bad, "z", "d");
        assert_eq!(n.cv_text(), "n/a");
        assert_eq!(n.color, Color::Red);
        assert!(n.render().contains("cv=n/a color=red"));
    }

    fn count_emissions(states: impl Fn(u64) -> Status, span: u64, tick: u64) -> Vec<u64> {
        let mut schedule = EmissionSchedule::new();
        let mut times = Vec::new();
        let k = key();
        let mut t = 0;
        while t < span {
            if !due_notifications(&mut schedule, t, &[status(&k, states(t))]).is_empty() {
                times.push(t);
            }
            t += tick;
        }
        times
    }

    #[test]
    fn steady_green_ninety_minutes() {
        assert_eq!(count_emissions(|_| Status::Good, 90 * 60, 60), vec![0, 1800, 3600]);
    }

    #[test]
    fn steady_red_sixty_minutes() {
        assert_eq!(count_emissions(|_| Status::Bad, 60 * 60, 60), vec![0, 900, 1800, 2700]);
    }

    #[test]
    fn worsening_emits_immediately() {
        let times = count_emissions(|t| if t < 600 { Status::Good } else { Status::Bad }, 3600, 60);
        assert_eq!(&times[..2], &[0, 600]);
        assert_eq!(times[2], 1500);
    }

    #[test]
    fn improving_waits_for_the_slot() {
        let times = count_emissions(|t| if t < 600 { Status::Bad } else { Status::Good }, 3600, 60);
        assert_eq!(times, vec![0, 900, 2700]);
    }

    #[test]
    fn steady_count_formula() {
        for (state, cadence) in [(Status::Good, 1800u64), (Status::Moderate, 900), (Status::Bad, 900)] {
            for span in (60..=6 * 3600).step_by(60) {
                let n = count_emissions(|_| state, span, 60).len() as u64;
                assert_eq!(n, (span - 1) / cadence + 1, "span={span}");
            }
        }
    }

    #[test]
    fn evaluate_is_monotone() {
        let p = co2();
        let mut prev = Status::Good;
        for avg in (35000..200000).step_by(37) {
            let s = evaluate_average(from_centi(avg), &p);
            assert!(s >= prev);
            prev = s;
        }
    }
}
