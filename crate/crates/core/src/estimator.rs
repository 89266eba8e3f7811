//! Online recoverability estimate `P(success | r) = σ(w·r + b)`.
//!
//! Every branching event stores `(r, y)`: the normalized pivot depth and
//! whether any branch recovered. The buffer is a bounded FIFO shared across
//! prompts, and the two parameters are refit by full-batch gradient descent
//! on mean binary cross-entropy.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sampler::Recoverability;

pub const DEFAULT_CAPACITY: usize = 4096;
pub const DEFAULT_EPOCHS: usize = 50;
pub const DEFAULT_LR: f64 = 0.5;

/// Step growth after an accepted step, and its ceiling relative to the
/// requested learning rate.
const LR_GROWTH: f64 = 1.02;
const LR_CEILING: f64 = 64.0;
const LR_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorState {
    pub w: f64,
    pub b: f64,
    capacity: usize,
    buffer: VecDeque<(f64, u8)>,
    pub steps_since_update: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum UpdateOutcome {
    /// Nothing to fit; parameters untouched.
    EmptyBuffer,
    Fitted { epochs_run: usize, bce_before: f64, bce_after: f64, final_lr: f64 },
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `-y ln σ(z) - (1-y) ln(1-σ(z))` without cancellation.
fn bce_term(z: f64, y: f64) -> f64 {
    z.max(0.0) - y * z + (-z.abs()).exp().ln_1p()
}

pub fn init_estimator(capacity: usize) -> Result<EstimatorState> {
    if capacity == 0 {
        return Err(Error::domain("estimator capacity must be >= 1"));
    }
    Ok(EstimatorState {
        w: 0.0,
        b: 0.0,
        capacity,
        buffer: VecDeque::with_capacity(capacity.min(1 << 16)),
        steps_since_update: 0,
    })
}

impl EstimatorState {
    pub fn with_params(capacity: usize, w: f64, b: f64) -> Result<Self> {
        let mut s = init_estimator(capacity)?;
        s.w = w;
        s.b = b;
        Ok(s)
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.buffer.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buffer.is_empty()
    }

    pub fn samples(&self) -> impl Iterator<Item = (f64, u8)> + '_ {
        self.buffer.iter().copied()
    }

    pub fn predict(&self, r: f64) -> Result<f64> {
        if !(r > 0.0 && r < 1.0) {
            return Err(Error::domain(format!("normalized depth must lie in (0, 1), got {r}")));
        }
        Ok(sigmoid(self.w * r + self.b))
    }

    /// Appends `(r, y)`, evicting the oldest sample at capacity.
    pub fn record(&mut self, r: f64, y: u8) -> Result<()> {
        if y > 1 {
            return Err(Error::domain(format!("recovery label must be 0 or 1, got {y}")));
        }
        if !(r > 0.0 && r < 1.0) {
            return Err(Error::domain(format!("normalized depth must lie in (0, 1), got {r}")));
        }
        if self.buffer.len() == self.capacity {
            self.buffer.pop_front();
        }
        self.buffer.push_back((r, y));
        Ok(())
    }

    /// Mean binary cross-entropy of `(w, b)` over the buffer.
    pub fn bce_at(&self, w: f64, b: f64) -> f64 {
        let n = self.buffer.len() as f64;
        self.buffer.iter().map(|&(r, y)| bce_term(w * r + b, y as f64)).sum::<f64>() / n
    }

    pub fn bce(&self) -> f64 {
        self.bce_at(self.w, self.b)
    }

    fn gradient(&self) -> (f64, f64) {
        let n = self.buffer.len() as f64;
        let (mut gw, mut gb) = (0.0, 0.0);
        for &(r, y) in &self.buffer {
            let d = sigmoid(self.w * r + self.b) - y as f64;
            gw += d * r;
            gb += d;
        }
        (gw / n, gb / n)
    }

    /// Runs `epochs` full-batch descent steps on mean BCE.
    ///
    /// A step that would raise the loss is retried at half the step size;
    /// accepted steps grow it by 2% up to 64 times `lr`. The loss therefore
    /// never increases across the call.
    pub fn update(&mut self, epochs: usize, lr: f64) -> Result<UpdateOutcome> {
        if !(lr.is_finite() && lr > 0.0) {
            return Err(Error::domain(format!("learning rate must be positive, got {lr}")));
        }
        self.steps_since_update = 0;
        if self.buffer.is_empty() {
            return Ok(UpdateOutcome::EmptyBuffer);
        }
        let bce_before = self.bce();
        let mut loss = bce_before;
        let mut step = lr;
        let ceiling = lr * LR_CEILING;
        let mut epochs_run = 0;
        'outer: for _ in 0..epochs {
            let (gw, gb) = self.gradient();
            if gw == 0.0 && gb == 0.0 {
                break;
            }
            loop {
                let (w, b) = (self.w - step * gw, self.b - step * gb);
                let candidate = self.bce_at(w, b);
                if candidate <= loss {
                    self.w = w;
                    self.b = b;
                    loss = candidate;
                    step = (step * LR_GROWTH).min(ceiling);
                    break;
                }
                step *= 0.5;
                if step < LR_FLOOR {
                    break 'outer;
                }
            }
            epochs_run += 1;
        }
        if !(self.w.is_finite() && self.b.is_finite()) {
            return Err(Error::Numeric(format!(
                "estimator diverged: w={}, b={}",
                self.w, self.b
            )));
        }
        Ok(UpdateOutcome::Fitted { epochs_run, bce_before, bce_after: loss, final_lr: step })
    }

    /// Counts a training step and refits once `every` steps have elapsed.
    pub fn tick(&mut self, every: usize, epochs: usize, lr: f64) -> Result<Option<UpdateOutcome>> {
        self.steps_since_update += 1;
        if self.steps_since_update >= every.max(1) {
            self.update(epochs, lr).map(Some)
        } else {
            Ok(None)
        }
    }
}

impl Recoverability for EstimatorState {
    fn recoverability(&self, r: f64) -> Result<f64> {
        self.predict(r)
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::Rng;

    use super::*;
    use crate::rng::substream;

    fn two_point(ones_at_low: usize, ones_at_high: usize, per_point: usize) -> EstimatorState {
        let mut e = init_estimator(2 * per_point).unwrap();
        for i in 0..per_point {
            e.record(0.2, (i < ones_at_low) as u8).unwrap();
            e.record(0.8, (i < ones_at_high) as u8).unwrap();
        }
        e
    }

    #[test]
    fn initial_prediction_is_half() {
        let e = init_estimator(4).unwrap();
        assert_eq!(e.predict(0.3).unwrap(), 0.5);
        assert_eq!(e, init_estimator(4).unwrap());
        assert!(init_estimator(0).is_err());
        assert!(e.predict(0.0).is_err());
        assert!(e.predict(1.0).is_err());
    }

    #[test]
    fn logistic_values() {
        let e = EstimatorState::with_params(1, -4.0, 2.0).unwrap();
        assert_eq!(e.predict(0.5).unwrap(), 0.5);
        let e = EstimatorState::with_params(1, -10.0, 5.0).unwrap();
        assert!((e.predict(0.9).unwrap() - 0.017_986_209_962_091_56).abs() < 1e-15);
    }

    #[test]
    fn fifo_eviction() {
        let mut e = init_estimator(2).unwrap();
        e.record(0.1, 1).unwrap();
        e.record(0.2, 0).unwrap();
        e.record(0.3, 1).unwrap();
        assert_eq!(e.samples().collect::<Vec<_>>(), vec![(0.2, 0), (0.3, 1)]);
        assert!(e.record(0.5, 2).is_err());
    }

    #[test]
    fn empty_update_is_a_no_op() {
        let mut e = init_estimator(3).unwrap();
        assert_eq!(e.update(10, 0.5).unwrap(), UpdateOutcome::EmptyBuffer);
        assert_eq!((e.w, e.b), (0.0, 0.0));
    }

    #[test]
    fn separable_two_point_fixture() {
        let mut e = two_point(50, 0, 50);
        e.update(500, 0.5).unwrap();
        assert!(e.predict(0.2).unwrap() >= 0.95);
        assert!(e.predict(0.8).unwrap() <= 0.05);
        assert!(e.w < 0.0);
    }

    #[test]
    fn noisy_two_point_fixture() {
        // The minimizer solves σ(0.2w + b) = 0.8 and σ(0.8w + b) = 0.2.
        let logit = 4f64.ln();
        let w_star = -2.0 * logit / 0.6;
        let b_star = logit - 0.2 * w_star;
        assert!((sigmoid(0.2 * w_star + b_star) - 0.8).abs() < 1e-12);
        assert!((sigmoid(0.8 * w_star + b_star) - 0.2).abs() < 1e-12);

        let mut e = two_point(40, 10, 50);
        e.update(500, 0.5).unwrap();
        assert!((e.predict(0.2).unwrap() - 0.8).abs() <= 0.02);
        assert!((e.predict(0.8).unwrap() - 0.2).abs() <= 0.02);
        assert!((e.w - w_star).abs() < 0.5);
    }

    #[test]
    fn all_successes_saturate() {
        let mut e = init_estimator(64).unwrap();
        for i in 0..64 {
            e.record((i as f64 + 0.5) / 64.0, 1).unwrap();
        }
        for _ in 0..20 {
            e.update(50, 0.5).unwrap();
        }
        for k in 1..10 {
            assert!(e.predict(k as f64 / 10.0).unwrap() >= 0.99);
        }
    }

    #[test]
    fn recovers_a_known_logistic() {
        let (w_true, b_true) = (-3.0, 1.0);
        let truth = EstimatorState::with_params(1, w_true, b_true).unwrap();
        let mut e = init_estimator(10_000).unwrap();
        let mut rng = substream(17, &[]);
        for _ in 0..10_000 {
            let r: f64 = rng.gen_range(0.001..0.999);
            let y = rng.gen::<f64>() < truth.predict(r).unwrap();
            e.record(r, y as u8).unwrap();
        }
        for _ in 0..20 {
            e.update(50, 0.5).unwrap();
        }
        let mae: f64 = (1..10)
            .map(|k| {
                let r = k as f64 / 10.0;
                (e.predict(r).unwrap() - truth.predict(r).unwrap()).abs()
            })
            .sum::<f64>()
            / 9.0;
        assert!(mae <= 0.05, "mae {mae}");
    }

    #[test]
    fn serde_round_trip() {
        let mut e = two_point(3, 1, 4);
        e.update(7, 0.5).unwrap();
        let text = serde_json::to_string(&e).unwrap();
        let back: EstimatorState = serde_json::from_str(&text).unwrap();
        assert_eq!(back, e);
    }

    #[test]
    fn tick_cadence() {
        let mut e = two_point(2, 0, 2);
        assert!(e.tick(2, 5, 0.5).unwrap().is_none());
        assert!(e.tick(2, 5, 0.5).unwrap().is_some());
        assert_eq!(e.steps_since_update, 0);
    }

    proptest! {
        #[test]
        fn update_never_raises_bce(
            data in proptest::collection::vec((0.01f64..0.99, 0u8..2), 1..60),
            w in -20.0f64..20.0,
            b in -20.0f64..20.0,
            epochs in 1usize..60,
        ) {
            let mut e = EstimatorState::with_params(data.len(), w, b).unwrap();
            for (r, y) in data {
                e.record(r, y).unwrap();
            }
            let before = e.bce();
            match e.update(epochs, DEFAULT_LR).unwrap() {
                UpdateOutcome::Fitted { bce_after, .. } => {
                    prop_assert!(bce_after <= before);
                    prop_assert_eq!(bce_after, e.bce());
                }
                UpdateOutcome::EmptyBuffer => prop_assert!(false),
            }
        }

        #[test]
        fn decreasing_in_depth_when_w_negative(w in -30.0f64..-1e-3, b in -10.0f64..10.0) {
            let e = EstimatorState::with_params(1, w, b).unwrap();
            let p: Vec<f64> = (1..10).map(|k| e.predict(k as f64 / 10.0).unwrap()).collect();
            prop_assert!(p.windows(2).all(|x| x[0] >= x[1]));
        }
    }
}
