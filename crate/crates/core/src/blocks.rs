//! Air-quality data blocks: readings, the bit-exact canonical encoding that
//! is hashed into the Merkle log, and raw ADC to concentration conversion.
//!
//! Reading values are stored as integers in hundredths of the variable's
//! unit, so `22.50 °C` is `2250`. The canonical encoding is UTF-8 text with
//! one `name=value` line per field:
//!
//! ```text
//! timestamp=1570884025
//! device_id=slave-1
//! zone_id=gate-a
//! co2=43030
//! co=2000
//! no2=50
//! so2=5500
//! smoke=30000
//! pm2_5=900
//! pm10=1420
//! t=2250
//! h=5605
//! battery_percent=95
//! ```

use std::fmt;
use std::str::FromStr;

use serde::Deserialize;
use thiserror::Error;

use crate::crypto::{sha3_256, Digest};

/// Highest value produced by the 10-bit ADC.
pub const ADC_MAX: u16 = 1023;
/// Default full-scale voltage of the analog channels.
pub const DEFAULT_FULL_SCALE_VOLTS: f64 = 5.0;

/// Monitored variables, in canonical block order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Deserialize)]
#[serde(try_from = "String")]
pub enum Variable {
    Co2,
    Co,
    No2,
    So2,
    Smoke,
    Pm2_5,
    Pm10,
    T,
    H,
}

impl Variable {
    pub const ALL: [Variable; 9] = [
        Variable::Co2,
        Variable::Co,
        Variable::No2,
        Variable::So2,
        Variable::Smoke,
        Variable::Pm2_5,
        Variable::Pm10,
        Variable::T,
        Variable::H,
    ];

    /// Field name used in the canonical encoding and all text formats.
    pub fn key(self) -> &'static str {
        match self {
            Variable::Co2 => "co2",
            Variable::Co => "co",
            Variable::No2 => "no2",
            Variable::So2 => "so2",
            Variable::Smoke => "smoke",
            Variable::Pm2_5 => "pm2_5",
            Variable::Pm10 => "pm10",
            Variable::T => "t",
            Variable::H => "h",
        }
    }

    pub fn unit(self) -> &'static str {
        match self {
            Variable::Co2 | Variable::Co | Variable::No2 | Variable::So2 | Variable::Smoke => "ppm",
            Variable::Pm2_5 | Variable::Pm10 => "ug/m3",
            Variable::T => "C",
            Variable::H => "%RH",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    /// Gas channels go through the ADC; particulates, temperature and
    /// humidity arrive as digital values.
    pub fn is_analog(self) -> bool {
        matches!(
            self,
            Variable::Co2 | Variable::Co | Variable::No2 | Variable::So2 | Variable::Smoke
        )
    }
}

impl fmt::Display for Variable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("unknown variable {0:?}")]
pub struct UnknownVariable(pub String);

impl FromStr for Variable {
    type Err = UnknownVariable;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Variable::ALL
            .into_iter()
            .find(|v| v.key() == s)
            .ok_or_else(|| UnknownVariable(s.to_string()))
    }
}

impl TryFrom<String> for Variable {
    type Error = UnknownVariable;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

/// Converts a decimal value in the variable's unit to hundredths,
/// rounding half away from zero.
pub fn to_centi(value: f64) -> i64 {
    (value * 100.0).round() as i64
}

pub fn from_centi(value: i64) -> f64 {
    value as f64 / 100.0
}

/// Renders hundredths as a fixed two-decimal string (`-0.05`, `1000.00`).
pub fn format_centi(value: i64) -> String {
    let sign = if value < 0 { "-" } else { "" };
    let abs = value.unsigned_abs();
    format!("{sign}{}.{:02}", abs / 100, abs % 100)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Reading {
    pub variable: Variable,
    /// Hundredths of the variable's unit.
    pub value: i64,
}

impl Reading {
    pub fn new(variable: Variable, value: i64) -> Self {
        Self { variable, value }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum BlockError {
    #[error("block has {0} readings, expected 9")]
    ReadingCount(usize),
    #[error("reading {position} is {found}, expected {expected}")]
    OutOfOrder {
        position: usize,
        expected: Variable,
        found: Variable,
    },
    #[error("invalid {field} identifier {value:?}")]
    Identifier { field: &'static str, value: String },
    #[error("battery level {0} outside 0..=100")]
    Battery(u8),
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum DecodeError {
    #[error("block bytes are not UTF-8")]
    Utf8,
    #[error("line {line}: expected field `{expected}`")]
    Field { line: usize, expected: &'static str },
    #[error("line {line}: invalid value")]
    Value { line: usize },
    #[error("missing trailing linefeed or truncated block")]
    Truncated,
    #[error("trailing data after battery_percent")]
    Trailing,
    #[error("encoding is not canonical")]
    NonCanonical,
    #[error(transparent)]
    Block(#[from] BlockError),
}

/// One measurement cycle of one sensor node.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct AirQualityBlock {
    /// Seconds since the epoch of the (virtual) clock.
    pub timestamp: u64,
    pub device_id: String,
    pub zone_id: String,
    pub readings: Vec<Reading>,
    pub battery_percent: u8,
}

/// Identifiers are restricted so they can never break a `name=value` line.
pub fn is_valid_identifier(s: &str) -> bool {
    !s.is_empty()
        && s.len() <= 64
        && s
            .bytes()
            .all(|b| b.is_ascii_alphanumeric() || matches!(b, b'-' | b'_' | b'.'))
}

impl AirQualityBlock {
    /// Builds a block from values given in canonical variable order.
    pub fn new(
        timestamp: u64,
        device_id: impl Into<String>,
        zone_id: impl Into<String>,
        values: [i64; 9],
        battery_percent: u8,
    ) -> Self {
        Self {
            timestamp,
            device_id: device_id.into(),
            zone_id: zone_id.into(),
            readings: Variable::ALL
                .iter()
                .zip(values)
                .map(|(&v, x)| Reading::new(v, x))
                .collect(),
            battery_percent,
        }
    }

    /// Structural invariants: nine readings in canonical order, safe
    /// identifiers, battery within 0..=100.
    pub fn validate(&self) -> Result<(), BlockError> {
        if !is_valid_identifier(&self.device_id) {
            return Err(BlockError::Identifier {
                field: "device_id",
                value: self.device_id.clone(),
            });
        }
        if !is_valid_identifier(&self.zone_id) {
            return Err(BlockError::Identifier {
                field: "zone_id",
                value: self.zone_id.clone(),
            });
        }
        for (position, (reading, expected)) in self.readings.iter().zip(Variable::ALL).enumerate() {
            if reading.variable != expected {
                return Err(BlockError::OutOfOrder {
                    position,
                    expected,
                    found: reading.variable,
                });
            }
        }
        if self.readings.len() != Variable::ALL.len() {
            return Err(BlockError::ReadingCount(self.readings.len()));
        }
        if self.battery_percent > 100 {
            return Err(BlockError::Battery(self.battery_percent));
        }
        Ok(())
    }

    pub fn value(&self, variable: Variable) -> Option<i64> {
        self.readings
            .iter()
            .find(|r| r.variable == variable)
            .map(|r| r.value)
    }

    pub fn value_mut(&mut self, variable: Variable) -> Option<&mut i64> {
        self.readings
            .iter_mut()
            .find(|r| r.variable == variable)
            .map(|r| &mut r.value)
    }

    /// Checks every reading against its sensor's operating range.
    pub fn within_ranges(&self, sensors: &SensorTable) -> bool {
        self.readings
            .iter()
            .all(|r| sensors.get(r.variable).contains(r.value))
    }
}

/// Canonical byte encoding of a block; the preimage of [`block_digest`].
pub fn canonical_encode(block: &AirQualityBlock) -> Result<Vec<u8>, BlockError> {
    block.validate()?;
    let mut out = String::with_capacity(192);
    push_line(&mut out, "timestamp", &block.timestamp.to_string());
    push_line(&mut out, "device_id", &block.device_id);
    push_line(&mut out, "zone_id", &block.zone_id);
    for r in &block.readings {
        push_line(&mut out, r.variable.key(), &r.value.to_string());
    }
    push_line(&mut out, "battery_percent", &block.battery_percent.to_string());
    Ok(out.into_bytes())
}

fn push_line(out: &mut String, name: &str, value: &str) {
    out.push_str(name);
    out.push('=');
    out.push_str(value);
    out.push('\n');
}

/// Strict inverse of [`canonical_encode`]: anything that would not
/// re-encode to the same bytes is rejected.
pub fn canonical_decode(bytes: &[u8]) -> Result<AirQualityBlock, DecodeError> {
    let text = std::str::from_utf8(bytes).map_err(|_| DecodeError::Utf8)?;
    let body = text.strip_suffix('\n').ok_or(DecodeError::Truncated)?;
    let mut lines = body.split('\n').enumerate();

    let mut field = |expected: &'static str| -> Result<(usize, &str), DecodeError> {
        let (line, raw) = lines.next().ok_or(DecodeError::Truncated)?;
        let value = raw
            .strip_prefix(expected)
            .and_then(|rest| rest.strip_prefix('='))
            .ok_or(DecodeError::Field { line, expected })?;
        Ok((line, value))
    };

    let (line, ts) = field("timestamp")?;
    let timestamp = ts.parse().map_err(|_| DecodeError::Value { line })?;
    let device_id = field("device_id")?.1.to_string();
    let zone_id = field("zone_id")?.1.to_string();
    let mut readings = Vec::with_capacity(9);
    for variable in Variable::ALL {
        let (line, v) = field(variable.key())?;
        let value = v.parse().map_err(|_| DecodeError::Value { line })?;
        readings.push(Reading::new(variable, value));
    }
    let (line, b) = field("battery_percent")?;
    let battery_percent = b.parse().map_err(|_| DecodeError::Value { line })?;
    if lines.next().is_some() {
        return Err(DecodeError::Trailing);
    }

    let block = AirQualityBlock {
        timestamp,
        device_id,
        zone_id,
        readings,
        battery_percent,
    };
    if canonical_encode(&block)? != bytes {
        return Err(DecodeError::NonCanonical);
    }
    Ok(block)
}

/// SHA3-256 of the canonical encoding.
pub fn block_digest(block: &AirQualityBlock) -> Result<Digest, BlockError> {
    Ok(sha3_256(&canonical_encode(block)?))
}

#[derive(Debug, Error, PartialEq)]
pub enum SensorError {
    #[error("raw ADC value {0} outside 0..=1023")]
    RawOutOfRange(u32),
    #[error("{variable}: calibration needs at least two points")]
    TooFewPoints { variable: Variable },
    #[error("{variable}: calibration volts must be strictly increasing")]
    VoltsNotIncreasing { variable: Variable },
    #[error("{variable}: calibration concentrations must be non-decreasing")]
    NotMonotone { variable: Variable },
    #[error("{variable}: calibration concentration {value} outside operating range")]
    PointOutOfRange { variable: Variable, value: i64 },
    #[error("{variable}: operating_min must be below operating_max")]
    EmptyRange { variable: Variable },
    #[error("sensor table: {0}")]
    Parse(String),
}

/// Converts a raw 10-bit ADC count to volts: `raw * full_scale / 1023`.
pub fn normalize_voltage(raw: u32, full_scale_volts: f64) -> Result<f64, SensorError> {
    if raw > ADC_MAX as u32 {
        return Err(SensorError::RawOutOfRange(raw));
    }
    Ok(raw as f64 * (full_scale_volts / ADC_MAX as f64))
}

/// Nearest ADC count for a voltage, clamped to `0..=1023`.
pub fn quantize_voltage(volts: f64, full_scale_volts: f64) -> u16 {
    let raw = (volts * ADC_MAX as f64 / full_scale_volts).round();
    raw.clamp(0.0, ADC_MAX as f64) as u16
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CalibrationPoint {
    pub volts: f64,
    /// Hundredths of the variable's unit.
    pub concentration: i64,
}

/// Temperature/humidity envelope in which a sensor's readings are valid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Conditions {
    pub t_min: i64,
    pub t_max: i64,
    pub h_min: i64,
    pub h_max: i64,
}

impl Conditions {
    fn new(t_min: f64, t_max: f64, h_min: f64, h_max: f64) -> Self {
        Self {
            t_min: to_centi(t_min),
            t_max: to_centi(t_max),
            h_min: to_centi(h_min),
            h_max: to_centi(h_max),
        }
    }

    pub fn hold(&self, t: i64, h: i64) -> bool {
        (self.t_min..=self.t_max).contains(&t) && (self.h_min..=self.h_max).contains(&h)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SensorSpec {
    pub variable: Variable,
    pub operating_min: i64,
    pub operating_max: i64,
    /// Piecewise-linear volts to concentration table.
    pub calibration: Vec<CalibrationPoint>,
    pub conditions: Option<Conditions>,
}

impl SensorSpec {
    pub fn validate(&self) -> Result<(), SensorError> {
        let variable = self.variable;
        if self.operating_min >= self.operating_max {
            return Err(SensorError::EmptyRange { variable });
        }
        if self.calibration.len() < 2 {
            return Err(SensorError::TooFewPoints { variable });
        }
        for pair in self.calibration.windows(2) {
            if !(pair[1].volts > pair[0].volts) {
                return Err(SensorError::VoltsNotIncreasing { variable });
            }
            if pair[1].concentration < pair[0].concentration {
                return Err(SensorError::NotMonotone { variable });
            }
        }
        if let Some(p) = self.calibration.iter().find(|p| !self.contains(p.concentration)) {
            return Err(SensorError::PointOutOfRange {
                variable,
                value: p.concentration,
            });
        }
        Ok(())
    }

    pub fn contains(&self, value: i64) -> bool {
        (self.operating_min..=self.operating_max).contains(&value)
    }

    pub fn clamp(&self, value: i64) -> i64 {
        value.clamp(self.operating_min, self.operating_max)
    }

    /// Linear interpolation between the bracketing calibration points,
    /// rounded to hundredths. Voltages outside the table clamp to the
    /// operating range floor/ceiling.
    pub fn concentration_from_voltage(&self, volts: f64) -> Reading {
        let first = self.calibration[0];
        let last = self.calibration[self.calibration.len() - 1];
        let value = if volts < first.volts {
            self.operating_min
        } else if volts > last.volts {
            self.operating_max
        } else {
            let seg = self
                .calibration
                .windows(2)
                .find(|w| volts <= w[1].volts)
                .expect("volts within table");
            let (a, b) = (seg[0], seg[1]);
            let frac = (volts - a.volts) / (b.volts - a.volts);
            let c = a.concentration as f64 + frac * (b.concentration - a.concentration) as f64;
            self.clamp(c.round() as i64)
        };
        Reading::new(self.variable, value)
    }

    /// Inverse of [`Self::concentration_from_voltage`] along the table;
    /// used by simulated sensor nodes to synthesize ADC counts.
    pub fn voltage_for_concentration(&self, concentration: i64) -> f64 {
        let first = self.calibration[0];
        let last = self.calibration[self.calibration.len() - 1];
        if concentration <= first.concentration {
            return first.volts;
        }
        if concentration >= last.concentration {
            return last.volts;
        }
        let seg = self
            .calibration
            .windows(2)
            .find(|w| concentration <= w[1].concentration)
            .expect("concentration within table");
        let (a, b) = (seg[0], seg[1]);
        if b.concentration == a.concentration {
            return a.volts;
        }
        let frac = (concentration - a.concentration) as f64 / (b.concentration - a.concentration) as f64;
        a.volts + frac * (b.volts - a.volts)
    }
}

/// Free function form of [`SensorSpec::concentration_from_voltage`].
pub fn concentration_from_voltage(volts: f64, spec: &SensorSpec) -> Reading {
    spec.concentration_from_voltage(volts)
}

fn spec(
    variable: Variable,
    range: (f64, f64),
    table: &[(f64, f64)],
    conditions: Option<Conditions>,
) -> SensorSpec {
    SensorSpec {
        variable,
        operating_min: to_centi(range.0),
        operating_max: to_centi(range.1),
        calibration: table
            .iter()
            .map(|&(volts, c)| CalibrationPoint {
                volts,
                concentration: to_centi(c),
            })
            .collect(),
        conditions,
    }
}

/// Default specification for each sensor. Operating ranges and validity
/// envelopes follow the DHT22, MQ-7, TGS4161, MiCS-2714, 2SH12, MQ-2 and
/// SDS021 datasheet figures; the calibration curves are generic
/// piecewise-linear stand-ins.
pub fn default_sensor_spec(variable: Variable) -> SensorSpec {
    use Variable::*;
    let full = DEFAULT_FULL_SCALE_VOLTS;
    match variable {
        T => spec(T, (-40.0, 80.0), &[(0.0, -40.0), (full, 80.0)], None),
        H => spec(H, (0.0, 100.0), &[(0.0, 0.0), (full, 100.0)], None),
        Co => spec(
            Co,
            (20.0, 2000.0),
            &[(0.0, 20.0), (1.0, 50.0), (2.5, 300.0), (full, 2000.0)],
            Some(Conditions::new(-20.0, 50.0, 0.0, 94.99)),
        ),
        Co2 => spec(
            Co2,
            (350.0, 10000.0),
            &[(0.0, 350.0), (1.0, 600.0), (2.5, 2000.0), (full, 10000.0)],
            Some(Conditions::new(-10.0, 50.0, 5.0, 95.0)),
        ),
        No2 => spec(
            No2,
            (0.5, 10.0),
            &[(0.0, 0.5), (2.5, 3.0), (full, 10.0)],
            Some(Conditions::new(-30.0, 85.0, 5.0, 95.0)),
        ),
        So2 => spec(So2, (1.0, 200.0), &[(0.0, 1.0), (2.5, 50.0), (full, 200.0)], None),
        Smoke => spec(
            Smoke,
            (300.0, 10000.0),
            &[(0.0, 300.0), (2.5, 2000.0), (full, 10000.0)],
            Some(Conditions::new(-20.0, 50.0, 0.0, 94.99)),
        ),
        Pm2_5 => spec(Pm2_5, (0.0, 9999.0), &[(0.0, 0.0), (full, 9999.0)], None),
        Pm10 => spec(Pm10, (0.0, 9999.0), &[(0.0, 0.0), (full, 9999.0)], None),
    }
}

/// One [`SensorSpec`] per variable.
#[derive(Debug, Clone, PartialEq)]
pub struct SensorTable {
    specs: Vec<SensorSpec>,
}

impl Default for SensorTable {
    fn default() -> Self {
        Self {
            specs: Variable::ALL.into_iter().map(default_sensor_spec).collect(),
        }
    }
}

/// Sensor override as written in a configuration file. Values are in the
/// variable's unit; omitted fields keep the default.
///
/// ```toml
/// [[sensors]]
/// variable = "co"
/// operating_min = 20.0
/// operating_max = 2000.0
/// calibration = [[0.0, 20.0], [2.5, 400.0], [5.0, 2000.0]]
/// ```
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SensorOverride {
    pub variable: Variable,
    pub operating_min: Option<f64>,
    pub operating_max: Option<f64>,
    pub calibration: Option<Vec<(f64, f64)>>,
}

impl SensorTable {
    pub fn get(&self, variable: Variable) -> &SensorSpec {
        &self.specs[variable.index()]
    }

    pub fn set(&mut self, spec: SensorSpec) -> Result<(), SensorError> {
        spec.validate()?;
        let idx = spec.variable.index();
        self.specs[idx] = spec;
        Ok(())
    }

    pub fn apply(&mut self, o: &SensorOverride) -> Result<(), SensorError> {
        let mut spec = self.get(o.variable).clone();
        if let Some(min) = o.operating_min {
            spec.operating_min = to_centi(min);
        }
        if let Some(max) = o.operating_max {
            spec.operating_max = to_centi(max);
        }
        if let Some(table) = &o.calibration {
            spec.calibration = table
                .iter()
                .map(|&(volts, c)| CalibrationPoint {
                    volts,
                    concentration: to_centi(c),
                })
                .collect();
        }
        self.set(spec)
    }

    /// Parses a standalone sensor file made of `[[sensors]]` tables.
    pub fn from_toml_str(text: &str) -> Result<Self, SensorError> {
        #[derive(Deserialize)]
        #[serde(deny_unknown_fields)]
        struct File {
            #[serde(default)]
            sensors: Vec<SensorOverride>,
        }
        let file: File = toml::from_str(text).map_err(|e| SensorError::Parse(e.to_string()))?;
        let mut table = Self::default();
        for o in &file.sensors {
            table.apply(o)?;
        }
        Ok(table)
    }

    /// Converts one raw channel value to a reading. Analog variables carry
    /// an ADC count, digital ones carry hundredths directly.
    pub fn convert(&self, variable: Variable, raw: i64, full_scale_volts: f64) -> Result<Reading, SensorError> {
        let spec = self.get(variable);
        if variable.is_analog() {
            let raw = u32::try_from(raw).map_err(|_| SensorError::RawOutOfRange(u32::MAX))?;
            let volts = normalize_voltage(raw, full_scale_volts)?;
            Ok(spec.concentration_from_voltage(volts))
        } else {
            Ok(Reading::new(variable, spec.clamp(raw)))
        }
    }
}
