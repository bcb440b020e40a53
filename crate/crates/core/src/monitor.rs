//! Server-side per-stream statistics and alert state fed by accepted blocks.

use std::collections::BTreeMap;

use crate::alerts::{
    build_notification, due_notifications, evaluate, EmissionSchedule, Notification, PolicySet, StreamKey,
    StreamStatus,
};
use crate::blocks::{AirQualityBlock, SensorTable, Variable};
use crate::stats::{compute_stats, sturges_scheme, ClassScheme, StatsWindow, WindowStats, DEFAULT_WINDOW};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MonitorSettings {
    pub window: usize,
    pub cycle_secs: u64,
    pub time_compression: u64,
}

impl Default for MonitorSettings {
    fn default() -> Self {
        Self {
            window: DEFAULT_WINDOW,
            cycle_secs: 600,
            time_compression: 1,
        }
    }
}

/// Statistics of one stream right after a block was observed.
#[derive(Debug, Clone, PartialEq)]
pub struct StatsRow {
    pub timestamp: u64,
    pub key: StreamKey,
    pub stats: WindowStats,
}

pub const STATS_HEADER: &str = "timestamp,zone,device,variable,n,mean,s2,s,cv_percent,class,frequencies";

impl StatsRow {
    /// Comma-separated row; class frequencies are `;`-joined `abs/rel`.
    pub fn render(&self) -> String {
        let s = &self.stats;
        let freqs = s
            .absolute_freq
            .iter()
            .zip(&s.relative_freq)
            .map(|(a, r)| format!("{a}/{r:.4}"))
            .collect::<Vec<_>>()
            .join(";");
        let cv = s.cv_percent.map_or_else(|| "n/a".into(), |c| format!("{c:.4}"));
        format!(
            "{},{},{},{},{},{:.4},{:.6},{:.6},{},{},{}",
            self.timestamp,
            self.key.zone_id,
            self.key.device_id,
            self.key.variable,
            s.n,
            s.mean,
            s.s2,
            s.s,
            cv,
            s.class_index_of_last,
            freqs
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Monitor {
    settings: MonitorSettings,
    policies: PolicySet,
    schemes: Vec<ClassScheme>,
    windows: BTreeMap<StreamKey, StatsWindow>,
    schedule: EmissionSchedule,
}

impl Monitor {
    /// Class bounds come from each sensor's operating range; the class
    /// count from Sturges' rule on the window capacity.
    pub fn new(sensors: &SensorTable, policies: PolicySet, settings: MonitorSettings) -> Self {
        let schemes = Variable::ALL
            .iter()
            .map(|&v| {
                let spec = sensors.get(v);
                sturges_scheme(settings.window as u64, spec.operating_min, spec.operating_max)
                    .expect("validated sensor range")
            })
            .collect();
        Self {
            settings,
            policies,
            schemes,
            windows: BTreeMap::new(),
            schedule: EmissionSchedule::new(),
        }
    }

    pub fn scheme(&self, variable: Variable) -> &ClassScheme {
        &self.schemes[variable.index()]
    }

    pub fn policies(&self) -> &PolicySet {
        &self.policies
    }

    pub fn schedule(&self) -> &EmissionSchedule {
        &self.schedule
    }

    pub fn window(&self, key: &StreamKey) -> Option<&StatsWindow> {
        self.windows.get(key)
    }

    /// Pushes every reading of the block into its stream window.
    pub fn observe(&mut self, block: &AirQualityBlock) -> Vec<StatsRow> {
        let mut rows = Vec::with_capacity(block.readings.len());
        for r in &block.readings {
            let key = StreamKey {
                zone_id: block.zone_id.clone(),
                device_id: block.device_id.clone(),
                variable: r.variable,
            };
            let window = self
                .windows
                .entry(key.clone())
                .or_insert_with(|| StatsWindow::new(self.settings.window));
            window.push(r.value);
            let stats = compute_stats(window, &self.schemes[r.variable.index()]).expect("non-empty window");
            rows.push(StatsRow {
                timestamp: block.timestamp,
                key,
                stats,
            });
        }
        rows
    }

    /// Current evaluation of every stream that has a policy.
    pub fn statuses(&self) -> Vec<StreamStatus> {
        let mut out = Vec::new();
        for (key, window) in &self.windows {
            let Ok(policy) = self.policies.get(key.variable) else {
                continue;
            };
            let scheme = &self.schemes[key.variable.index()];
            let full = compute_stats(window, scheme).expect("non-empty window");
            let k = policy.averaging_samples(self.settings.cycle_secs, self.settings.time_compression, window.capacity());
            let rolling = compute_stats(&window.tail(k), scheme).expect("non-empty window");
            let status = evaluate(&rolling, policy);
            out.push(StreamStatus {
                key: key.clone(),
                notification: build_notification(key.variable, &full, rolling.mean, status, &key.zone_id, &key.device_id),
            });
        }
        out
    }

    pub fn due_notifications(&mut self, now: u64) -> Vec<Notification> {
        let latest = self.statuses();
        due_notifications(&mut self.schedule, now, &latest)
    }

    pub fn next_due(&self) -> Option<u64> {
        self.schedule.next_due()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::alerts::Status;

    fn block(ts: u64, co2: i64) -> AirQualityBlock {
        AirQualityBlock::new(ts, "s1", "z", [co2, 2500, 100, 200, 32000, 900, 1400, 2250, 5600], 90)
    }

    #[test]
    fn observe_produces_one_row_per_variable() {
        let mut m = Monitor::new(&SensorTable::default(), PolicySet::default(), MonitorSettings::default());
        let rows = m.observe(&block(0, 45000));
        assert_eq!(rows.len(), 9);
        assert_eq!(rows[0].stats.mean, 450.0);
        assert_eq!(m.scheme(Variable::Co2).classes, 7);
        let line = rows[0].render();
        assert!(line.starts_with("0,z,s1,co2,1,450.0000,"), "{line}");
        assert_eq!(line.split(',').count(), STATS_HEADER.split(',').count());
    }

    #[test]
    fn statuses_only_for_policed_variables() {
        let mut m = Monitor::new(&SensorTable::default(), PolicySet::default(), MonitorSettings::default());
        m.observe(&block(0, 120000));
        let st = m.statuses();
        assert_eq!(st.len(), 5);
        let co2 = st.iter().find(|s| s.key.variable == Variable::Co2).unwrap();
        assert_eq!(co2.notification.state, Status::Bad);
        assert_eq!(m.due_notifications(0).len(), 5);
        assert!(m.due_notifications(60).is_empty());
        assert_eq!(m.next_due(), Some(900));
    }

    #[test]
    fn averaging_window_limits_the_rolling_mean() {
        let settings = MonitorSettings {
            time_compression: 24,
            ..Default::default()
        };
        let mut m = Monitor::new(&SensorTable::default(), PolicySet::default(), settings);
        let mut b = block(0, 45000);
        // PM10: 45 for many cycles, then 6 cycles at 60 -> 6-sample mean is 60
        for i in 0..20 {
            b.timestamp = i * 600;
            *b.value_mut(Variable::Pm10).unwrap() = if i < 14 { 1000 } else { 6000 };
            m.observe(&b);
        }
        let st = m.statuses();
        let pm10 = st.iter().find(|s| s.key.variable == Variable::Pm10).unwrap();
        assert_eq!(pm10.notification.average, 60.0);
        assert_eq!(pm10.notification.state, Status::Bad);
    }
}
