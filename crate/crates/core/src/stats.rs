//! Windowed statistics over the last `N` readings of one variable stream.
//!
//! Samples are integer hundredths. The window keeps exact integer running
//! sums (`Σx`, `Σx²`) so the variance comes from one exact numerator
//! `n·Σx² − (Σx)²` instead of an accumulating floating-point update.
//! Reported statistics are in the variable's unit.

use std::collections::VecDeque;

use thiserror::Error;

pub const DEFAULT_WINDOW: usize = 50;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum StatsError {
    #[error("window is empty")]
    EmptyWindow,
    #[error("class bounds require min < max (got {min}..{max})")]
    InvalidBounds { min: i64, max: i64 },
    #[error("class scheme needs n >= 1")]
    ZeroSamples,
}

/// FIFO ring buffer of the most recent readings.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StatsWindow {
    capacity: usize,
    samples: VecDeque<i64>,
    sum: i128,
    sum_sq: i128,
}

impl Default for StatsWindow {
    fn default() -> Self {
        Self::new(DEFAULT_WINDOW)
    }
}

impl StatsWindow {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "window capacity must be positive");
        Self {
            capacity,
            samples: VecDeque::with_capacity(capacity),
            sum: 0,
            sum_sq: 0,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Oldest first.
    pub fn samples(&self) -> impl ExactSizeIterator<Item = i64> + '_ {
        self.samples.iter().copied()
    }

    pub fn last(&self) -> Option<i64> {
        self.samples.back().copied()
    }

    /// Appends a sample, evicting the oldest once full.
    pub fn push(&mut self, value: i64) {
        if self.samples.len() == self.capacity {
            let old = self.samples.pop_front().expect("full window");
            self.sum -= old as i128;
            self.sum_sq -= (old as i128) * (old as i128);
        }
        self.samples.push_back(value);
        self.sum += value as i128;
        self.sum_sq += (value as i128) * (value as i128);
    }

    /// A window holding only the newest `k` samples (all of them if fewer).
    pub fn tail(&self, k: usize) -> StatsWindow {
        let k = k.clamp(1, self.capacity);
        let mut out = StatsWindow::new(k);
        let skip = self.len().saturating_sub(k);
        for v in self.samples.iter().skip(skip) {
            out.push(*v);
        }
        out
    }
}

/// Equal-width classes over a sensor's measurement range.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassScheme {
    pub classes: usize,
    /// Hundredths.
    pub class_min: i64,
    /// Hundredths.
    pub class_max: i64,
}

/// `K = ceil(1 + log2 n)`, computed as `1 + ceil(log2 n)` in integers.
pub fn sturges_class_count(n: u64) -> Result<usize, StatsError> {
    if n == 0 {
        return Err(StatsError::ZeroSamples);
    }
    Ok(1 + n.next_power_of_two().trailing_zeros() as usize)
}

pub fn sturges_scheme(n: u64, class_min: i64, class_max: i64) -> Result<ClassScheme, StatsError> {
    if class_min >= class_max {
        return Err(StatsError::InvalidBounds {
            min: class_min,
            max: class_max,
        });
    }
    Ok(ClassScheme {
        classes: sturges_class_count(n)?,
        class_min,
        class_max,
    })
}

impl ClassScheme {
    /// Class width `A = (max − min) / K`, in the variable's unit.
    pub fn width(&self) -> f64 {
        (self.class_max - self.class_min) as f64 / self.classes as f64 / 100.0
    }

    /// Lower bound of class `i` in the variable's unit.
    pub fn lower_bound(&self, i: usize) -> f64 {
        (self.class_min as f64 + (self.class_max - self.class_min) as f64 * i as f64 / self.classes as f64) / 100.0
    }

    pub fn class_mark(&self, i: usize) -> f64 {
        (self.lower_bound(i) + self.lower_bound(i + 1)) / 2.0
    }

    /// Index of the class containing `value`. Intervals are left-closed and
    /// right-open except the last; values outside the range clamp to the
    /// first or last class. Boundaries are decided in exact integer
    /// arithmetic.
    pub fn class_index(&self, value: i64) -> usize {
        if value <= self.class_min {
            return 0;
        }
        if value >= self.class_max {
            return self.classes - 1;
        }
        let offset = (value - self.class_min) as i128 * self.classes as i128;
        let span = (self.class_max - self.class_min) as i128;
        ((offset / span) as usize).min(self.classes - 1)
    }

    /// `(class index, class mark)`.
    pub fn classify(&self, value: i64) -> (usize, f64) {
        let i = self.class_index(value);
        (i, self.class_mark(i))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WindowStats {
    pub n: usize,
    pub last: i64,
    pub mean: f64,
    pub s2: f64,
    pub s: f64,
    /// `100·s/x̄`; `None` when the mean is zero.
    pub cv_percent: Option<f64>,
    pub class_index_of_last: usize,
    pub class_mark_of_last: f64,
    pub absolute_freq: Vec<u64>,
    pub relative_freq: Vec<f64>,
}

/// Mean, sample variance (`n − 1` denominator, zero for a single sample),
/// standard deviation, coefficient of variation and class frequencies.
pub fn compute_stats(window: &StatsWindow, scheme: &ClassScheme) -> Result<WindowStats, StatsError> {
    let n = window.len();
    let last = window.last().ok_or(StatsError::EmptyWindow)?;
    let n_i = n as i128;

    let mean = window.sum as f64 / n as f64 / 100.0;
    let s2 = if n >= 2 {
        let numerator = n_i * window.sum_sq - window.sum * window.sum;
        numerator as f64 / (n_i * (n_i - 1)) as f64 / 10_000.0
    } else {
        0.0
    };
    let s = s2.sqrt();
    let cv_percent = (window.sum != 0).then(|| 100.0 * s / mean);

    let mut absolute_freq = vec![0u64; scheme.classes];
    for v in window.samples() {
        absolute_freq[scheme.class_index(v)] += 1;
    }
    let relative_freq = absolute_freq.iter().map(|&c| c as f64 / n as f64).collect();
    let (class_index_of_last, class_mark_of_last) = scheme.classify(last);

    Ok(WindowStats {
        n,
        last,
        mean,
        s2,
        s,
        cv_percent,
        class_index_of_last,
        class_mark_of_last,
        absolute_freq,
        relative_freq,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn window_of(values: &[i64]) -> StatsWindow {
        let mut w = StatsWindow::new(DEFAULT_WINDOW);
        for &v in values {
            w.push(v);
        }
        w
    }

    fn scheme() -> ClassScheme {
        sturges_scheme(50, -100_000, 100_000).unwrap()
    }

    #[test]
    fn fifo_eviction() {
        let mut w = StatsWindow::new(50);
        for v in 1..=50 {
            w.push(v);
        }
        assert_eq!(w.len(), 50);
        w.push(51);
        assert_eq!(w.len(), 50);
        assert_eq!(w.samples().next(), Some(2));

        let w = window_of(&(1..=60).collect::<Vec<_>>());
        assert_eq!(w.samples().collect::<Vec<_>>(), (11..=60).collect::<Vec<_>>());
    }

    #[test]
    fn single_sample() {
        let w = window_of(&[700]);
        let st = compute_stats(&w, &scheme()).unwrap();
        assert_eq!(st.n, 1);
        assert_eq!(st.mean, 7.0);
        assert_eq!(st.s2, 0.0);
    }

    #[test]
    fn empty_window_is_an_error() {
        assert_eq!(
            compute_stats(&StatsWindow::new(5), &scheme()),
            Err(StatsError::EmptyWindow)
        );
    }

    #[test]
    fn constant_window_has_no_dispersion() {
        let st = compute_stats(&window_of(&[500; 4]), &scheme()).unwrap();
        assert_eq!((st.s2, st.s, st.cv_percent), (0.0, 0.0, Some(0.0)));
    }

    #[test]
    fn one_through_five() {
        // 1..5 in units is 100..500 in hundredths
        let st = compute_stats(&window_of(&[100, 200, 300, 400, 500]), &scheme()).unwrap();
        assert_eq!(st.mean, 3.0);
        assert_eq!(st.s2, 2.5);
        assert!((st.s - 1.581_138_830_084_19).abs() < 1e-12);
        assert!((st.cv_percent.unwrap() - 52.704_627_669_473).abs() < 1e-9);
    }

    #[test]
    fn zero_mean_has_undefined_cv() {
        let st = compute_stats(&window_of(&[-100, 100]), &scheme()).unwrap();
        assert_eq!(st.mean, 0.0);
        assert_eq!(st.cv_percent, None);
    }

    #[test]
    fn sturges_counts() {
        assert_eq!(sturges_class_count(50).unwrap(), 7);
        assert_eq!(sturges_class_count(1).unwrap(), 1);
        assert_eq!(sturges_class_count(2).unwrap(), 2);
        assert_eq!(sturges_class_count(64).unwrap(), 7);
        assert_eq!(sturges_class_count(65).unwrap(), 8);
        assert_eq!(sturges_class_count(0), Err(StatsError::ZeroSamples));
        // float cross-check of ceil(1 + log2 n)
        for n in 1u64..=4096 {
            let k = (1.0 + (n as f64).log2()).ceil() as usize;
            assert_eq!(sturges_class_count(n).unwrap(), k, "n={n}");
        }
    }

    #[test]
    fn co_range_width() {
        let s = sturges_scheme(50, 2000, 200_000).unwrap();
        assert_eq!(s.classes, 7);
        assert!((s.width() - 1980.0 / 7.0).abs() < 1e-9);
        assert!((s.width() - 282.857_142_857).abs() < 1e-6);
        assert!(sturges_scheme(50, 5, 5).is_err());
    }

    #[test]
    fn classify_boundaries() {
        // 7 classes of width 100 hundredths over [0, 700]
        let s = sturges_scheme(50, 0, 700).unwrap();
        assert_eq!(s.classify(0).0, 0);
        assert_eq!(s.classify(700).0, 6);
        assert_eq!(s.classify(-5).0, 0);
        assert_eq!(s.classify(10_000).0, 6);
        for i in 1..7 {
            let boundary = i as i64 * 100;
            assert_eq!(s.class_index(boundary), i);
            assert_eq!(s.class_index(boundary - 1), i - 1);
        }
        assert!((s.classify(150).1 - 1.5).abs() < 1e-12);
    }

    #[test]
    fn interior_boundaries_on_non_integer_width() {
        // width 1980/7 is not representable; boundaries are exact anyway
        let s = sturges_scheme(50, 2000, 200_000).unwrap();
        for i in 1..7i64 {
            // smallest hundredth at or above the exact boundary
            let num = 2000 * 7 + i * 198_000;
            let b = (num + 6) / 7;
            assert_eq!(s.class_index(b), i as usize);
            assert_eq!(s.class_index(b - 1), i as usize - 1);
        }
    }

    #[test]
    fn tail_keeps_newest() {
        let w = window_of(&[1, 2, 3, 4, 5]);
        assert_eq!(w.tail(2).samples().collect::<Vec<_>>(), vec![4, 5]);
        assert_eq!(w.tail(10).len(), 5);
    }

    fn two_pass(values: &[i64]) -> (f64, f64) {
        let xs: Vec<f64> = values.iter().map(|&v| v as f64 / 100.0).collect();
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let s2 = if xs.len() > 1 {
            xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        (mean, s2)
    }

    proptest! {
        #[test]
        fn windowed_matches_two_pass(values in prop::collection::vec(-1_000_000i64..1_000_000, 1..200)) {
            let mut w = StatsWindow::new(DEFAULT_WINDOW);
            for &v in &values {
                w.push(v);
            }
            let contents: Vec<i64> = w.samples().collect();
            let st = compute_stats(&w, &scheme()).unwrap();
            let (mean, s2) = two_pass(&contents);
            prop_assert!((st.mean - mean).abs() <= 1e-9 * mean.abs().max(1e-9) + 1e-12);
            prop_assert!((st.s2 - s2).abs() <= 1e-9 * s2.max(1e-9));
            prop_assert_eq!(st.absolute_freq.iter().sum::<u64>(), contents.len() as u64);
            prop_assert!((st.relative_freq.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        }

        #[test]
        fn translation_and_scaling(values in prop::collection::vec(1i64..100_000, 2..50), c in -50_000i64..50_000, k in 1i64..20) {
            let base = compute_stats(&window_of(&values), &scheme()).unwrap();
            let shifted: Vec<i64> = values.iter().map(|v| v + c).collect();
            let st = compute_stats(&window_of(&shifted), &scheme()).unwrap();
            prop_assert!((st.mean - (base.mean + c as f64 / 100.0)).abs() < 1e-9 * (1.0 + base.mean.abs()));
            prop_assert!((st.s2 - base.s2).abs() <= 1e-9 * base.s2.max(1.0));

            let scaled: Vec<i64> = values.iter().map(|v| v * k).collect();
            let st = compute_stats(&window_of(&scaled), &scheme()).unwrap();
            let kf = k as f64;
            prop_assert!((st.mean - kf * base.mean).abs() <= 1e-9 * st.mean.abs());
            prop_assert!((st.s - kf * base.s).abs() <= 1e-9 * st.s.max(1e-9));
            prop_assert!((st.s2 - kf * kf * base.s2).abs() <= 1e-9 * st.s2.max(1e-9));
            prop_assert!((st.cv_percent.unwrap() - base.cv_percent.unwrap()).abs() <= 1e-9 * base.cv_percent.unwrap().max(1.0));
        }

        #[test]
        fn variance_zero_iff_constant(values in prop::collection::vec(-500i64..500, 1..50)) {
            let st = compute_stats(&window_of(&values), &scheme()).unwrap();
            prop_assert!(st.s2 >= 0.0);
            let constant = values.iter().all(|&v| v == values[0]);
            prop_assert_eq!(st.s2 == 0.0, constant);
        }
    }
}
