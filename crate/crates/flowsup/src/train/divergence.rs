//! Loss-trace divergence detection.
//!
//! A run is flagged when the smoothed recent loss exceeds `factor` times the
//! median of the trailing window preceding it, or when any non-finite value
//! shows up. Baseline self-supervision strategies are *expected* to trip
//! this sometimes; the flag is an observation, not an assertion failure.

const SMOOTH_SPAN: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DivergenceStatus {
    Ok,
    Diverged,
}

pub struct DivergenceMonitor {
    window: usize,
    factor: f64,
    history: Vec<f64>,
}

impl DivergenceMonitor {
    pub fn new(window: usize, factor: f64) -> Self {
        Self {
            window: window.max(SMOOTH_SPAN),
            factor,
            history: Vec::new(),
        }
    }

    pub fn push(&mut self, loss: f64) -> DivergenceStatus {
        if !loss.is_finite() {
            return DivergenceStatus::Diverged;
        }
        self.history.push(loss);
        let n = self.history.len();
        if n < self.window + SMOOTH_SPAN {
            return DivergenceStatus::Ok;
        }
        let recent = &self.history[n - SMOOTH_SPAN..];
        let smoothed = recent.iter().sum::<f64>() / SMOOTH_SPAN as f64;
        let mut reference: Vec<f64> =
            self.history[n - SMOOTH_SPAN - self.window..n - SMOOTH_SPAN].to_vec();
        reference.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let median = reference[reference.len() / 2].max(1e-12);
        if smoothed > self.factor * median {
            DivergenceStatus::Diverged
        } else {
            DivergenceStatus::Ok
        }
    }
}
