//! Distortion metrics and the rate-distortion trade-off schedules.
//!
//! The RGB loss is a per-channel mean squared error so PSNR is exactly
//! −10·log10(L_rgb) for unit-peak images. [`global_loss`] combines it with
//! the rate under one of three schedules; the hybrid schedule's moving
//! average and one-way switch live in [`ScheduleState`], owned by the
//! trainer.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::render::Vec3;

/// Window of the hybrid schedule's moving average, also its hysteresis: the
/// switch cannot fire before this many steps have been observed.
pub const HYBRID_WINDOW: usize = 100;

/// How the rate term enters the global objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum LambdaSchedule {
    /// L_rgb + λ·R.
    Fixed { lambda: f64 },
    /// L_rgb·(1 + λ̄·R), fully differentiable through the product.
    Adaptive { lambda_bar: f64 },
    /// λ_eff tracks the detached RGB loss until its moving average falls
    /// below Λ, then locks to λ.
    Hybrid { lambda: f64, threshold: f64 },
}

impl LambdaSchedule {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str, v: f64| Err(Error::Config(format!("{what} = {v} out of range")));
        match *self {
            LambdaSchedule::Fixed { lambda } => {
                if !(lambda.is_finite() && lambda >= 0.0) {
                    return bad("lambda", lambda);
                }
            }
            LambdaSchedule::Adaptive { lambda_bar } => {
                if !(lambda_bar.is_finite() && lambda_bar >= 0.0) {
                    return bad("lambda_bar", lambda_bar);
                }
            }
            LambdaSchedule::Hybrid { lambda, threshold } => {
                if !(lambda.is_finite() && lambda >= 0.0) {
                    return bad("lambda", lambda);
                }
                if !(threshold.is_finite() && threshold > 0.0) {
                    return bad("threshold", threshold);
                }
            }
        }
        Ok(())
    }
}

/// Mutable schedule state: the hybrid moving-average window and switch flag.
#[derive(Debug, Clone, Default)]
pub struct ScheduleState {
    window: Vec<f64>,
    cursor: usize,
    filled: bool,
    switched: bool,
}

impl ScheduleState {
    pub fn new() -> Self {
        ScheduleState { window: Vec::with_capacity(HYBRID_WINDOW), ..Default::default() }
    }

    /// True once the hybrid schedule has locked to its fixed λ.
    pub fn switched(&self) -> bool {
        self.switched
    }

    /// Records this step's detached L_rgb and updates the switch. The switch
    /// is one-way and requires a full window below-threshold average.
    fn observe(&mut self, l_rgb: f64, threshold: f64) {
        if self.switched {
            return;
        }
        if self.window.len() < HYBRID_WINDOW {
            self.window.push(l_rgb);
        } else {
            self.window[self.cursor] = l_rgb;
            self.cursor = (self.cursor + 1) % HYBRID_WINDOW;
            self.filled = true;
        }
        if self.window.len() == HYBRID_WINDOW {
            self.filled = true;
        }
        if self.filled {
            let avg = self.window.iter().sum::<f64>() / self.window.len() as f64;
            if avg < threshold {
                self.switched = true;
            }
        }
    }
}

/// Per-channel mean squared error over a ray batch.
///
/// Panics if the batches differ in length; an empty batch is a contract
/// violation.
pub fn rgb_loss(predicted: &[Vec3], target: &[Vec3]) -> f64 {
    assert_eq!(predicted.len(), target.len(), "batch shapes");
    assert!(!predicted.is_empty(), "empty batch");
    let mut acc = 0.0;
    for (p, t) in predicted.iter().zip(target) {
        for ch in 0..3 {
            let e = p[ch] - t[ch];
            acc += e * e;
        }
    }
    acc / (3.0 * predicted.len() as f64)
}

/// Peak signal-to-noise ratio for unit-peak signals; +inf at zero error.
///
/// Panics on negative mse.
pub fn psnr(mse: f64) -> f64 {
    assert!(mse >= 0.0, "mse {mse}");
    if mse == 0.0 {
        f64::INFINITY
    } else {
        -10.0 * mse.log10()
    }
}

/// One evaluation of the global objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GlobalLoss {
    pub loss: f64,
    /// Effective rate weight: the backward coefficient on R for fixed and
    /// hybrid modes; the diagnostic λ̄·L_rgb for adaptive mode.
    pub lambda_eff: f64,
    /// dLoss/dL_rgb treating R as constant.
    pub d_l_rgb: f64,
    /// dLoss/dR treating L_rgb as constant.
    pub d_rate: f64,
}

/// Combines distortion and rate under the schedule. Hybrid mode also feeds
/// `state` with the detached L_rgb; no gradient flows through λ_eff.
pub fn global_loss(
    l_rgb: f64,
    rate: f64,
    schedule: &LambdaSchedule,
    state: &mut ScheduleState,
) -> GlobalLoss {
    debug_assert!(l_rgb >= 0.0 && rate >= 0.0);
    match *schedule {
        LambdaSchedule::Fixed { lambda } => GlobalLoss {
            loss: l_rgb + lambda * rate,
            lambda_eff: lambda,
            d_l_rgb: 1.0,
            d_rate: lambda,
        },
        LambdaSchedule::Adaptive { lambda_bar } => GlobalLoss {
            loss: l_rgb * (1.0 + lambda_bar * rate),
            lambda_eff: lambda_bar * l_rgb,
            d_l_rgb: 1.0 + lambda_bar * rate,
            d_rate: lambda_bar * l_rgb,
        },
        LambdaSchedule::Hybrid { lambda, threshold } => {
            state.observe(l_rgb, threshold);
            let lambda_eff = if state.switched { lambda } else { l_rgb };
            GlobalLoss {
                loss: l_rgb + lambda_eff * rate,
                lambda_eff,
                // λ_eff is detached even while it tracks L_rgb.
                d_l_rgb: 1.0,
                d_rate: lambda_eff,
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rgb_loss_reference_points() {
        let a = vec![[0.2, 0.4, 0.9]; 5];
        assert_eq!(rgb_loss(&a, &a), 0.0);
        let black = vec![[0.0; 3]; 4];
        let white = vec![[1.0; 3]; 4];
        assert_eq!(rgb_loss(&black, &white), 1.0);
        let l = rgb_loss(&[[0.5, 0.0, 0.0]], &[[0.0; 3]]);
        assert!((l - 0.25 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn psnr_reference_points() {
        assert_eq!(psnr(1.0), 0.0);
        assert!((psnr(1e-3) - 30.0).abs() < 1e-12);
        assert_eq!(psnr(0.0), f64::INFINITY);
    }

    #[test]
    fn psnr_inverts_rgb_loss_normalization() {
        // Per-channel normalization makes PSNR = −10 log10(L_rgb) exact.
        let pred = vec![[0.3, 0.6, 0.1], [0.9, 0.2, 0.5]];
        let tgt = vec![[0.1, 0.5, 0.3], [0.8, 0.4, 0.6]];
        let l = rgb_loss(&pred, &tgt);
        assert!((psnr(l) - -10.0 * l.log10()).abs() < 1e-12);
    }

    #[test]
    fn fixed_schedule_zero_lambda_is_distortion_only() {
        let mut st = ScheduleState::new();
        let g = global_loss(0.123, 9.9, &LambdaSchedule::Fixed { lambda: 0.0 }, &mut st);
        assert_eq!(g.loss, 0.123);
        assert_eq!(g.lambda_eff, 0.0);
        assert_eq!(g.d_rate, 0.0);
    }

    #[test]
    fn adaptive_schedule_degenerates_at_zero_rate() {
        let mut st = ScheduleState::new();
        let g = global_loss(0.2, 0.0, &LambdaSchedule::Adaptive { lambda_bar: 2.0 }, &mut st);
        assert_eq!(g.loss, 0.2);
        assert!((g.lambda_eff - 0.4).abs() < 1e-15);
        assert_eq!(g.d_l_rgb, 1.0);
    }

    #[test]
    fn adaptive_schedule_full_product() {
        let mut st = ScheduleState::new();
        let g = global_loss(0.01, 5.0, &LambdaSchedule::Adaptive { lambda_bar: 1.0 }, &mut st);
        assert!((g.loss - 0.01 * 6.0).abs() < 1e-15);
        assert!((g.d_l_rgb - 6.0).abs() < 1e-15);
        assert!((g.d_rate - 0.01).abs() < 1e-15);
    }

    #[test]
    fn hybrid_tracks_then_locks() {
        let schedule = LambdaSchedule::Hybrid { lambda: 0.0007, threshold: 0.0009 };
        let mut st = ScheduleState::new();
        // High loss: adaptive phase, lambda_eff equals the current loss.
        let g = global_loss(0.01, 1.0, &schedule, &mut st);
        assert_eq!(g.lambda_eff, 0.01);
        assert!(!st.switched());
        // One low observation is not enough: the window must fill first.
        let g = global_loss(0.0005, 1.0, &schedule, &mut st);
        assert_eq!(g.lambda_eff, 0.0005);
        // Feed a full window of low losses; the average crosses and locks.
        for _ in 0..HYBRID_WINDOW {
            global_loss(0.0005, 1.0, &schedule, &mut st);
        }
        assert!(st.switched());
        let g = global_loss(0.01, 1.0, &schedule, &mut st);
        assert_eq!(g.lambda_eff, 0.0007, "switch is one-way");
        assert_eq!(g.d_l_rgb, 1.0);
    }

    #[test]
    fn hybrid_needs_full_window_below_threshold() {
        let schedule = LambdaSchedule::Hybrid { lambda: 1e-3, threshold: 0.01 };
        let mut st = ScheduleState::new();
        for _ in 0..HYBRID_WINDOW - 1 {
            global_loss(0.001, 1.0, &schedule, &mut st);
            assert!(!st.switched());
        }
        global_loss(0.001, 1.0, &schedule, &mut st);
        assert!(st.switched());
    }

    #[test]
    fn schedule_validation() {
        assert!(LambdaSchedule::Fixed { lambda: -1.0 }.validate().is_err());
        assert!(LambdaSchedule::Adaptive { lambda_bar: f64::NAN }.validate().is_err());
        assert!(LambdaSchedule::Hybrid { lambda: 1e-3, threshold: 0.0 }.validate().is_err());
        assert!(LambdaSchedule::Hybrid { lambda: 0.0, threshold: 1e-3 }.validate().is_ok());
    }

    #[test]
    fn schedule_serde_tagged_form() {
        let s: LambdaSchedule =
            serde_json::from_str(r#"{"mode":"fixed","lambda":0.001}"#).unwrap();
        assert_eq!(s, LambdaSchedule::Fixed { lambda: 0.001 });
        let s: LambdaSchedule =
            serde_json::from_str(r#"{"mode":"hybrid","lambda":0.001,"threshold":0.005}"#).unwrap();
        assert!(matches!(s, LambdaSchedule::Hybrid { .. }));
    }
}
