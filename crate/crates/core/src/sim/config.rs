//! Simulation configuration file.
//!
//! ```toml
//! seed = 7
//! duration_secs = 6000
//! cycle_period_secs = 600
//! full_scale_volts = 5.0
//! time_compression = 1
//! window = 50
//! server_key = "server-key"
//!
//! [[zones]]
//! zone_id = "zone-a"
//! master_id = "gw-a"
//! slaves = ["s1", "s2"]
//!
//! [[signals]]
//! device = "s1"
//! variable = "co2"
//! kind = "random_walk"
//! base = 450.0
//! step = 5.0
//!
//! [[injections]]
//! at_secs = 1200
//! kind = "tamper_block_field"
//! target = "s1"
//! field = "co2"
//! ```
//!
//! Signals are `constant` (`value`), `random_walk` (`base`, `step`),
//! `script` (`points = [[secs, value], ...]`, linear between points) or
//! `raw` (`raw`, a fixed ADC count for analog channels). Unlisted
//! (device, variable) pairs get a default random walk. Optional
//! `[[sensors]]` and `[[policies]]` tables override the defaults.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::Deserialize;
use thiserror::Error;

use crate::alerts::{AlertError, PolicyOverride, PolicySet, ThresholdPolicy};
use crate::blocks::{is_valid_identifier, to_centi, SensorError, SensorOverride, SensorTable, Variable, ADC_MAX};
use crate::crypto::sha3_256_concat;
use crate::monitor::{Monitor, MonitorSettings};
use crate::stats::DEFAULT_WINDOW;
use crate::verifier::Verifier;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("parse error: {0}")]
    Parse(String),
    #[error("{0}")]
    Invalid(String),
    #[error("sensor: {0}")]
    Sensor(#[from] SensorError),
    #[error("policy: {0}")]
    Policy(#[from] AlertError),
}

fn invalid(msg: impl Into<String>) -> ConfigError {
    ConfigError::Invalid(msg.into())
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    seed: u64,
    duration_secs: u64,
    #[serde(default = "default_cycle")]
    cycle_period_secs: u64,
    #[serde(default = "default_full_scale")]
    full_scale_volts: f64,
    #[serde(default = "default_compression")]
    time_compression: u64,
    #[serde(default = "default_window")]
    window: usize,
    #[serde(default = "default_server_key")]
    server_key: String,
    #[serde(default = "default_battery")]
    battery_cycles_per_percent: u64,
    zones: Vec<ZoneConfig>,
    #[serde(default)]
    signals: Vec<RawSignal>,
    #[serde(default)]
    injections: Vec<RawInjection>,
    #[serde(default)]
    sensors: Vec<SensorOverride>,
    #[serde(default)]
    policies: Vec<PolicyOverride>,
}

fn default_cycle() -> u64 {
    600
}
fn default_full_scale() -> f64 {
    5.0
}
fn default_compression() -> u64 {
    1
}
fn default_window() -> usize {
    DEFAULT_WINDOW
}
fn default_server_key() -> String {
    "aqlog-server".into()
}
fn default_battery() -> u64 {
    12
}

#[derive(Debug, Clone, PartialEq, Eq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ZoneConfig {
    pub zone_id: String,
    pub master_id: String,
    /// Shared secret between master and server; derived from the seed
    /// and master id when omitted.
    pub secret: Option<String>,
    pub slaves: Vec<String>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSignal {
    device: String,
    variable: Variable,
    kind: String,
    value: Option<f64>,
    base: Option<f64>,
    step: Option<f64>,
    points: Option<Vec<(u64, f64)>>,
    raw: Option<u16>,
}

/// Generator for one (slave, variable) channel. Values are hundredths.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SignalSpec {
    Constant { value: i64 },
    RandomWalk { base: i64, step: i64 },
    Script { points: Vec<(u64, i64)> },
    Raw { raw: u16 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum InjectionKind {
    TamperBlockField,
    CorruptPath,
    CorruptRoot,
    WrongDeviceKey,
    DropMessage,
    BatteryDrain,
}

impl InjectionKind {
    pub const ALL: [InjectionKind; 6] = [
        InjectionKind::TamperBlockField,
        InjectionKind::CorruptPath,
        InjectionKind::CorruptRoot,
        InjectionKind::WrongDeviceKey,
        InjectionKind::DropMessage,
        InjectionKind::BatteryDrain,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            InjectionKind::TamperBlockField => "tamper_block_field",
            InjectionKind::CorruptPath => "corrupt_path",
            InjectionKind::CorruptRoot => "corrupt_root",
            InjectionKind::WrongDeviceKey => "wrong_device_key",
            InjectionKind::DropMessage => "drop_message",
            InjectionKind::BatteryDrain => "battery_drain",
        }
    }

    /// Kinds that alter a delivered message.
    pub fn is_tamper(self) -> bool {
        matches!(
            self,
            InjectionKind::TamperBlockField
                | InjectionKind::CorruptPath
                | InjectionKind::CorruptRoot
                | InjectionKind::WrongDeviceKey
        )
    }
}

impl fmt::Display for InjectionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for InjectionKind {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| invalid(format!("unknown injection kind {s:?}")))
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawInjection {
    at_secs: u64,
    kind: String,
    target: Option<String>,
    field: Option<Variable>,
    amount: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Injection {
    pub at_secs: u64,
    pub kind: InjectionKind,
    /// Slave or master id; any device when absent.
    pub target: Option<String>,
    /// Reading altered by `tamper_block_field`.
    pub field: Variable,
    /// Hundredths for `tamper_block_field`, percent for `battery_drain`.
    pub amount: i64,
}

#[derive(Debug, Clone)]
pub struct SimConfig {
    pub seed: u64,
    pub duration_secs: u64,
    pub cycle_period_secs: u64,
    pub full_scale_volts: f64,
    pub time_compression: u64,
    pub window: usize,
    pub server_key: String,
    pub battery_cycles_per_percent: u64,
    pub zones: Vec<ZoneConfig>,
    pub signals: BTreeMap<(String, Variable), SignalSpec>,
    pub injections: Vec<Injection>,
    pub sensors: SensorTable,
    pub policies: PolicySet,
}

/// Default random walk per variable, in the variable's unit: (base, step).
pub fn default_walk(variable: Variable) -> (f64, f64) {
    match variable {
        Variable::Co2 => (450.0, 5.0),
        Variable::Co => (25.0, 0.5),
        Variable::No2 => (1.0, 0.02),
        Variable::So2 => (2.0, 0.05),
        Variable::Smoke => (320.0, 2.0),
        Variable::Pm2_5 => (9.0, 0.3),
        Variable::Pm10 => (14.0, 0.4),
        Variable::T => (22.5, 0.1),
        Variable::H => (56.0, 0.3),
    }
}

impl SimConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        let raw: RawConfig = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        Self::from_raw(raw)
    }

    fn from_raw(raw: RawConfig) -> Result<Self, ConfigError> {
        if raw.cycle_period_secs == 0 {
            return Err(invalid("cycle_period_secs must be positive"));
        }
        if raw.duration_secs == 0 {
            return Err(invalid("duration_secs must be positive"));
        }
        if !(raw.full_scale_volts.is_finite() && raw.full_scale_volts > 0.0) {
            return Err(invalid("full_scale_volts must be positive"));
        }
        if raw.time_compression == 0 {
            return Err(invalid("time_compression must be at least 1"));
        }
        if raw.window < 2 {
            return Err(invalid("window must be at least 2"));
        }
        if raw.battery_cycles_per_percent == 0 {
            return Err(invalid("battery_cycles_per_percent must be positive"));
        }
        if raw.zones.is_empty() {
            return Err(invalid("at least one zone is required"));
        }

        let mut ids = BTreeSet::new();
        let mut zone_ids = BTreeSet::new();
        let mut slaves = BTreeSet::new();
        for z in &raw.zones {
            if !zone_ids.insert(z.zone_id.as_str()) {
                return Err(invalid(format!("duplicate zone {}", z.zone_id)));
            }
            if z.slaves.is_empty() {
                return Err(invalid(format!("zone {} has no slaves", z.zone_id)));
            }
            for id in std::iter::once(&z.zone_id).chain(std::iter::once(&z.master_id)).chain(&z.slaves) {
                if !is_valid_identifier(id) {
                    return Err(invalid(format!("invalid identifier {id:?}")));
                }
            }
            for id in std::iter::once(&z.master_id).chain(&z.slaves) {
                if !ids.insert(id.as_str()) {
                    return Err(invalid(format!("duplicate device id {id}")));
                }
            }
            slaves.extend(z.slaves.iter().map(String::as_str));
        }

        let mut sensors = SensorTable::default();
        for o in &raw.sensors {
            sensors.apply(o)?;
        }
        let mut policies = PolicySet::default();
        for o in &raw.policies {
            let merged = match policies.get(o.variable) {
                Ok(existing) => {
                    let new = ThresholdPolicy::from(o);
                    ThresholdPolicy {
                        variable: o.variable,
                        yellow_limit: new.yellow_limit.or(existing.yellow_limit),
                        red_limit: new.red_limit.or(existing.red_limit),
                        averaging_window_secs: new.averaging_window_secs.or(existing.averaging_window_secs),
                    }
                }
                Err(_) => ThresholdPolicy::from(o),
            };
            policies.insert(merged);
        }
        policies.validate(&sensors)?;

        let mut signals = BTreeMap::new();
        for s in &raw.signals {
            if !slaves.contains(s.device.as_str()) {
                return Err(invalid(format!("signal for unknown slave {}", s.device)));
            }
            let spec = parse_signal(s)?;
            if signals.insert((s.device.clone(), s.variable), spec).is_some() {
                return Err(invalid(format!("duplicate signal {} {}", s.device, s.variable)));
            }
        }

        let mut injections = Vec::new();
        for i in &raw.injections {
            let kind: InjectionKind = i.kind.parse()?;
            if i.at_secs >= raw.duration_secs {
                return Err(invalid(format!("injection at {} outside duration", i.at_secs)));
            }
            if let Some(t) = &i.target {
                if !ids.contains(t.as_str()) {
                    return Err(invalid(format!("injection target {t} is not a device")));
                }
            }
            let amount = match (kind, i.amount) {
                (InjectionKind::BatteryDrain, Some(a)) if a >= 0.0 && a <= 100.0 => a.round() as i64,
                (InjectionKind::BatteryDrain, None) => 10,
                (InjectionKind::BatteryDrain, Some(_)) => return Err(invalid("battery_drain amount must be 0..=100")),
                (_, Some(a)) if a != 0.0 => to_centi(a),
                (_, Some(_)) => return Err(invalid("tamper amount must be non-zero")),
                (_, None) => 1,
            };
            injections.push(Injection {
                at_secs: i.at_secs,
                kind,
                target: i.target.clone(),
                field: i.field.unwrap_or(Variable::Co2),
                amount,
            });
        }
        // stable order: by time, then file order
        injections.sort_by_key(|i| i.at_secs);

        Ok(Self {
            seed: raw.seed,
            duration_secs: raw.duration_secs,
            cycle_period_secs: raw.cycle_period_secs,
            full_scale_volts: raw.full_scale_volts,
            time_compression: raw.time_compression,
            window: raw.window,
            server_key: raw.server_key,
            battery_cycles_per_percent: raw.battery_cycles_per_percent,
            zones: raw.zones,
            signals,
            injections,
            sensors,
            policies,
        })
    }

    /// Generator for a channel, falling back to the default walk.
    pub fn signal(&self, device: &str, variable: Variable) -> SignalSpec {
        self.signals
            .get(&(device.to_string(), variable))
            .cloned()
            .unwrap_or_else(|| {
                let (base, step) = default_walk(variable);
                SignalSpec::RandomWalk {
                    base: to_centi(base),
                    step: to_centi(step),
                }
            })
    }

    pub fn zone_secret(&self, zone: &ZoneConfig) -> Vec<u8> {
        match &zone.secret {
            Some(s) => s.as_bytes().to_vec(),
            None => sha3_256_concat(&[b"aqlog-zone-secret", &self.seed.to_be_bytes(), zone.master_id.as_bytes()])
                .to_hex()
                .into_bytes(),
        }
    }

    pub fn monitor_settings(&self) -> MonitorSettings {
        MonitorSettings {
            window: self.window,
            cycle_secs: self.cycle_period_secs,
            time_compression: self.time_compression,
        }
    }

    /// Server side of the configured topology, with every zone registered.
    pub fn build_verifier(&self) -> Verifier {
        let monitor = Monitor::new(&self.sensors, self.policies.clone(), self.monitor_settings());
        let mut v = Verifier::new(self.server_key.as_bytes(), self.sensors.clone(), monitor);
        for z in &self.zones {
            v.register_gateway(&z.master_id, &self.zone_secret(z), &z.zone_id, z.slaves.iter().cloned())
                .expect("identifiers validated");
        }
        v
    }
}

fn parse_signal(s: &RawSignal) -> Result<SignalSpec, ConfigError> {
    let ctx = |what: &str| invalid(format!("signal {} {}: {what}", s.device, s.variable));
    let allowed: &[&str] = match s.kind.as_str() {
        "constant" => &["value"],
        "random_walk" => &["base", "step"],
        "script" => &["points"],
        "raw" => &["raw"],
        other => return Err(ctx(&format!("unknown kind {other:?}"))),
    };
    let present = [
        ("value", s.value.is_some()),
        ("base", s.base.is_some()),
        ("step", s.step.is_some()),
        ("points", s.points.is_some()),
        ("raw", s.raw.is_some()),
    ];
    for (name, set) in present {
        if set && !allowed.contains(&name) {
            return Err(ctx(&format!("{name} does not apply to {}", s.kind)));
        }
    }
    let finite = |v: Option<f64>, name: &str| -> Result<f64, ConfigError> {
        v.filter(|x| x.is_finite()).ok_or_else(|| ctx(&format!("{name} missing or not finite")))
    };
    match s.kind.as_str() {
        "constant" => Ok(SignalSpec::Constant {
            value: to_centi(finite(s.value, "value")?),
        }),
        "random_walk" => {
            let step = finite(s.step, "step")?;
            if step < 0.0 {
                return Err(ctx("step must be non-negative"));
            }
            Ok(SignalSpec::RandomWalk {
                base: to_centi(finite(s.base, "base")?),
                step: to_centi(step),
            })
        }
        "script" => {
            let points = s.points.as_ref().ok_or_else(|| ctx("points missing"))?;
            if points.is_empty() {
                return Err(ctx("points empty"));
            }
            if points.windows(2).any(|w| w[0].0 >= w[1].0) {
                return Err(ctx("point times must increase"));
            }
            if points.iter().any(|p| !p.1.is_finite()) {
                return Err(ctx("point value not finite"));
            }
            Ok(SignalSpec::Script {
                points: points.iter().map(|&(t, v)| (t, to_centi(v))).collect(),
            })
        }
        _ => {
            if !s.variable.is_analog() {
                return Err(ctx("raw applies to analog channels only"));
            }
            let raw = s.raw.ok_or_else(|| ctx("raw missing"))?;
            if raw > ADC_MAX {
                return Err(ctx("raw above ADC range"));
            }
            Ok(SignalSpec::Raw { raw })
        }
    }
}
