//! Per-channel value generators for simulated sensor nodes.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::config::SignalSpec;
use crate::blocks::SensorSpec;

/// Running state of one channel. Values are hundredths.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SignalState {
    spec: SignalSpec,
    current: Option<i64>,
}

/// Output of one channel for one cycle.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChannelValue {
    /// Concentration in hundredths, clamped to the operating range.
    Value(i64),
    /// Fixed ADC count.
    Raw(u16),
}

impl SignalState {
    pub fn new(spec: SignalSpec) -> Self {
        Self { spec, current: None }
    }

    pub fn spec(&self) -> &SignalSpec {
        &self.spec
    }

    /// Value at virtual time `now`. Only random walks draw from `rng`,
    /// and only after their first sample.
    pub fn sample(&mut self, now: u64, rng: &mut ChaCha8Rng, sensor: &SensorSpec) -> ChannelValue {
        let value = match &self.spec {
            SignalSpec::Raw { raw } => return ChannelValue::Raw(*raw),
            SignalSpec::Constant { value } => *value,
            SignalSpec::Script { points } => interpolate(points, now),
            SignalSpec::RandomWalk { base, step } => match self.current {
                None => *base,
                Some(v) => {
                    let jitter = if *step == 0 { 0 } else { rng.random_range(-*step..=*step) };
                    // pull back toward the base by an eighth of the offset
                    v + jitter - (v - base) / 8
                }
            },
        };
        let value = sensor.clamp(value);
        self.current = Some(value);
        ChannelValue::Value(value)
    }
}

/// Piecewise-linear interpolation over `(secs, value)` points, holding the
/// end values outside the scripted span. Rounds half away from zero.
pub fn interpolate(points: &[(u64, i64)], now: u64) -> i64 {
    let (first, last) = (points[0], points[points.len() - 1]);
    if now <= first.0 {
        return first.1;
    }
    if now >= last.0 {
        return last.1;
    }
    let seg = points.windows(2).find(|w| now < w[1].0).expect("now inside span");
    let ((t0, v0), (t1, v1)) = (seg[0], seg[1]);
    let den = (t1 - t0) as i128;
    let num = v0 as i128 * den + (v1 - v0) as i128 * (now - t0) as i128;
    let value = if num >= 0 { (2 * num + den) / (2 * den) } else { -((-2 * num + den) / (2 * den)) };
    value as i64
}
