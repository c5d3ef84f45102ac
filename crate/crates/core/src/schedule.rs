//! Layer-wise pruning-ratio schedules and the cumulative retention they imply.
//!
//! Ratios are defined for layers `0..=L-2`; the last layer never prunes.
//! `r[l]` is the fraction of audiovisual tokens entering layer `l`, with
//! `r[l + 1] = r[l] * (1 - p[l])`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    #[default]
    Sigmoid,
    Exponential,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PruneScheduleConfig {
    pub p_init: f64,
    pub p_final: f64,
    pub t_mid: f64,
    pub beta: f64,
    pub layers: usize,
    pub kind: ScheduleKind,
}

impl PruneScheduleConfig {
    pub fn sigmoid(p_init: f64, p_final: f64, t_mid: f64, beta: f64, layers: usize) -> Self {
        Self {
            p_init,
            p_final,
            t_mid,
            beta,
            layers,
            kind: ScheduleKind::Sigmoid,
        }
    }

    pub fn exponential(p_init: f64, p_final: f64, layers: usize) -> Self {
        Self {
            p_init,
            p_final,
            t_mid: 0.5,
            beta: 20.0,
            layers,
            kind: ScheduleKind::Exponential,
        }
    }

    /// A schedule that never prunes.
    pub fn zero(layers: usize) -> Self {
        Self::sigmoid(0.0, 0.0, 0.5, 20.0, layers)
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |name: &str, v: f64| {
            if (0.0..1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::invalid(format!("{name} = {v} must be in [0, 1)")))
            }
        };
        unit("p_init", self.p_init)?;
        unit("p_final", self.p_final)?;
        if self.p_init > self.p_final {
            return Err(Error::invalid(format!(
                "p_init ({}) must not exceed p_final ({})",
                self.p_init, self.p_final
            )));
        }
        if !(self.t_mid > 0.0 && self.t_mid < 1.0) {
            return Err(Error::invalid(format!("t_mid = {} must be in (0, 1)", self.t_mid)));
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::invalid(format!("beta = {} must be positive", self.beta)));
        }
        if self.layers < 3 {
            return Err(Error::invalid(format!("layers = {} must be >= 3", self.layers)));
        }
        if self.kind == ScheduleKind::Exponential && self.p_init <= 0.0 {
            return Err(Error::invalid("exponential schedule requires p_init > 0"));
        }
        Ok(())
    }

    pub fn with_p_final(mut self, p_final: f64) -> Self {
        self.p_final = p_final;
        self
    }
}

/// `1 / (1 + exp(-beta * (l / (L - 2) - t_mid)))`.
pub fn sigmoid_value(l: usize, t_mid: f64, beta: f64, layers: usize) -> Result<f64> {
    if layers < 3 || l > layers - 2 {
        return Err(Error::invalid(format!(
            "layer {l} outside the pruned range [0, {}]",
            layers.saturating_sub(2)
        )));
    }
    let t = l as f64 / (layers - 2) as f64;
    Ok(1.0 / (1.0 + (-beta * (t - t_mid)).exp()))
}

/// Pruning ratio applied after layer `l`.
pub fn prune_ratio(l: usize, cfg: &PruneScheduleConfig) -> Result<f64> {
    let layers = cfg.layers;
    if l >= layers {
        return Err(Error::invalid(format!("layer {l} >= layer count {layers}")));
    }
    if l == layers - 1 {
        return Ok(0.0);
    }
    match cfg.kind {
        ScheduleKind::Sigmoid => {
            let s = sigmoid_value(l, cfg.t_mid, cfg.beta, layers)?;
            Ok(cfg.p_init + (cfg.p_final - cfg.p_init) * s)
        }
        ScheduleKind::Exponential => {
            if cfg.p_init <= 0.0 {
                return Err(Error::invalid("exponential schedule requires p_init > 0"));
            }
            let t = l as f64 / (layers - 2) as f64;
            Ok(cfg.p_init * (cfg.p_final / cfg.p_init).powf(t))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetentionTrace {
    pub r: Vec<f64>,
}

impl RetentionTrace {
    pub fn mean(&self) -> f64 {
        self.r.iter().sum::<f64>() / self.r.len() as f64
    }
}

pub fn retention_trace(cfg: &PruneScheduleConfig, r0: f64) -> Result<RetentionTrace> {
    if !(r0 > 0.0 && r0 <= 1.0) {
        return Err(Error::invalid(format!("r0 = {r0} must be in (0, 1]")));
    }
    let mut r = Vec::with_capacity(cfg.layers);
    r.push(r0);
    for l in 0..cfg.layers.saturating_sub(1) {
        let next = r[l] * (1.0 - prune_ratio(l, cfg)?);
        r.push(next);
    }
    Ok(RetentionTrace { r })
}

/// Unweighted mean of the per-layer retention over all `L` layers.
pub fn mean_retention(cfg: &PruneScheduleConfig, r0: f64) -> Result<f64> {
    Ok(retention_trace(cfg, r0)?.mean())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Calibration {
    /// Two-phase approximation; `None` when its assumptions (sigmoid,
    /// `p_init = 0`, `t_mid = 0.5`, `2·target > r0`) do not hold.
    pub closed_form: Option<f64>,
    pub bisection: f64,
    /// Mean retention achieved by the bisection value.
    pub achieved_mean: f64,
}

const BISECTION_UPPER: f64 = 0.999;
const BISECTION_ITERS: usize = 100;
const BISECTION_TOL: f64 = 1e-4;

/// Finds `p_final` such that the mean retention hits `target_mean`.
///
/// `shape.p_final` is ignored. The closed form treats the schedule as a step
/// at the midpoint: half the layers keep `r0`, the other half decay
/// geometrically and are represented by their middle layer.
pub fn calibrate_p_final(
    target_mean: f64,
    r0: f64,
    shape: &PruneScheduleConfig,
) -> Result<Calibration> {
    if !(r0 > 0.0 && r0 <= 1.0) {
        return Err(Error::invalid(format!("r0 = {r0} must be in (0, 1]")));
    }
    if !(target_mean > 0.0 && target_mean < r0) {
        return Err(Error::invalid(format!(
            "target mean {target_mean} must be in (0, r0 = {r0})"
        )));
    }
    shape.with_p_final(shape.p_init).validate()?;

    let closed_form = closed_form_p_final(target_mean, r0, shape);

    let mean_at = |p: f64| mean_retention(&shape.with_p_final(p), r0);
    let mut lo = shape.p_init;
    let mut hi = BISECTION_UPPER;
    let at_lo = mean_at(lo)?;
    if at_lo <= target_mean + f64::EPSILON {
        if at_lo < target_mean - BISECTION_TOL {
            return Err(Error::Infeasible(format!(
                "mean retention is already {at_lo:.6} at p_final = p_init, below target {target_mean}"
            )));
        }
        return Ok(Calibration {
            closed_form,
            bisection: lo,
            achieved_mean: at_lo,
        });
    }
    let at_hi = mean_at(hi)?;
    if at_hi > target_mean {
        return Err(Error::Infeasible(format!(
            "mean retention {at_hi:.6} at p_final = {hi} is still above target {target_mean}"
        )));
    }
    for _ in 0..BISECTION_ITERS {
        let mid = 0.5 * (lo + hi);
        if mean_at(mid)? > target_mean {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-15 {
            break;
        }
    }
    let bisection = 0.5 * (lo + hi);
    let achieved_mean = mean_at(bisection)?;
    debug_assert!((achieved_mean - target_mean).abs() < BISECTION_TOL);
    Ok(Calibration {
        closed_form,
        bisection,
        achieved_mean,
    })
}

fn closed_form_p_final(target_mean: f64, r0: f64, shape: &PruneScheduleConfig) -> Option<f64> {
    if shape.kind != ScheduleKind::Sigmoid || shape.p_init != 0.0 || shape.t_mid != 0.5 {
        return None;
    }
    let phase2_mean = 2.0 * target_mean - r0;
    let steps = (shape.layers / 2) / 2;
    if phase2_mean <= 0.0 || steps == 0 {
        return None;
    }
    Some(1.0 - (phase2_mean / r0).powf(1.0 / steps as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn reference() -> PruneScheduleConfig {
        PruneScheduleConfig::sigmoid(0.0, 0.2, 0.5, 20.0, 28)
    }

    #[test]
    fn sigmoid_examples() {
        assert_eq!(sigmoid_value(13, 0.5, 20.0, 28).unwrap(), 0.5);
        assert_abs_diff_eq!(sigmoid_value(0, 0.5, 20.0, 28).unwrap(), 4.5397868702434395e-5, epsilon = 1e-15);
        assert_abs_diff_eq!(sigmoid_value(26, 0.5, 20.0, 28).unwrap(), 0.9999546021312976, epsilon = 1e-12);
        assert!(matches!(sigmoid_value(27, 0.5, 20.0, 28), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn prune_ratio_examples() {
        assert_abs_diff_eq!(prune_ratio(13, &reference()).unwrap(), 0.1, epsilon = 1e-15);
        assert_eq!(prune_ratio(27, &reference()).unwrap(), 0.0);
        let exp = PruneScheduleConfig::exponential(0.02, 0.5, 28);
        assert_abs_diff_eq!(prune_ratio(26, &exp).unwrap(), 0.5, epsilon = 1e-15);
        assert_eq!(prune_ratio(0, &exp).unwrap(), 0.02);
        assert_eq!(prune_ratio(27, &exp).unwrap(), 0.0);
        assert!(prune_ratio(28, &reference()).is_err());
        let bad = PruneScheduleConfig::exponential(0.0, 0.5, 28);
        assert!(matches!(prune_ratio(3, &bad), Err(Error::InvalidInput(_))));
        assert!(bad.validate().is_err());
    }

    /// Constant-ratio schedule is reachable as a sigmoid with p_init = p_final.
    #[test]
    fn constant_ratio_mean() {
        let cfg = PruneScheduleConfig::sigmoid(0.1, 0.1, 0.5, 20.0, 5);
        let tr = retention_trace(&cfg, 1.0).unwrap();
        // Layer 4 is the last layer: r[4] is still produced by p[3] = 0.1.
        let expected = [1.0, 0.9, 0.81, 0.729, 0.6561];
        for (a, b) in tr.r.iter().zip(expected) {
            assert_abs_diff_eq!(*a, b, epsilon = 1e-12);
        }
        assert_abs_diff_eq!(mean_retention(&cfg, 1.0).unwrap(), 0.81902, epsilon = 1e-12);
    }

    #[test]
    fn zero_schedule_is_constant() {
        let tr = retention_trace(&PruneScheduleConfig::zero(28), 0.45).unwrap();
        assert!(tr.r.iter().all(|&r| r == 0.45));
        assert_eq!(mean_retention(&PruneScheduleConfig::zero(10), 1.0).unwrap(), 1.0);
        assert!(retention_trace(&reference(), 0.0).is_err());
    }

    #[test]
    fn reference_config_mean_in_band() {
        let m = mean_retention(&reference(), 0.45).unwrap();
        // Exact recurrence evaluated independently: 0.2879087791312282.
        assert_abs_diff_eq!(m, 0.2879087791312282, epsilon = 1e-12);
        assert!((0.27..=0.31).contains(&m));
    }

    #[test]
    fn calibration_reproduces_two_phase_estimate() {
        let c = calibrate_p_final(0.30, 0.45, &reference()).unwrap();
        let cf = c.closed_form.unwrap();
        assert_abs_diff_eq!(cf, 1.0 - (1.0f64 / 3.0).powf(1.0 / 7.0), epsilon = 1e-12);
        assert!((cf - 0.1452).abs() < 5e-4);
        assert!((c.achieved_mean - 0.30).abs() < 1e-4);
        // Independent recheck through the recurrence.
        let m = mean_retention(&reference().with_p_final(c.bisection), 0.45).unwrap();
        assert!((m - 0.30).abs() < 1e-4);
        assert_abs_diff_eq!(c.bisection, 0.1693038787649206, epsilon = 1e-9);
    }

    #[test]
    fn calibration_boundary_returns_p_init() {
        let shape = PruneScheduleConfig::sigmoid(0.1, 0.1, 0.5, 20.0, 12);
        let target = mean_retention(&shape, 0.8).unwrap();
        let c = calibrate_p_final(target, 0.8, &shape).unwrap();
        assert_eq!(c.bisection, 0.1);
        assert!(c.closed_form.is_none());
    }

    #[test]
    fn calibration_errors() {
        assert!(matches!(calibrate_p_final(0.45, 0.45, &reference()), Err(Error::InvalidInput(_))));
        // Short schedules cannot remove enough tokens.
        let short = PruneScheduleConfig::sigmoid(0.0, 0.2, 0.5, 20.0, 3);
        assert!(matches!(calibrate_p_final(0.01, 1.0, &short), Err(Error::Infeasible(_))));
    }

    #[test]
    fn gentle_target_gives_small_p_final() {
        let c = calibrate_p_final(0.44, 0.45, &reference()).unwrap();
        assert!(c.bisection > 0.0 && c.bisection < 0.01);
        assert!((c.achieved_mean - 0.44).abs() < 1e-4);
    }

    proptest! {
        #[test]
        fn schedule_monotone_and_trace_decreasing(
            p_init in 0.0f64..0.5,
            span in 0.0f64..0.49,
            t_mid in 0.05f64..0.95,
            beta in 0.5f64..40.0,
            layers in 3usize..40,
            exponential in any::<bool>(),
            r0 in 0.01f64..=1.0,
        ) {
            let p_final = p_init + span;
            let cfg = if exponential {
                PruneScheduleConfig::exponential(p_init.max(1e-3), p_final.max(1e-3), layers)
            } else {
                PruneScheduleConfig::sigmoid(p_init, p_final, t_mid, beta, layers)
            };
            let ps: Vec<f64> = (0..layers - 1).map(|l| prune_ratio(l, &cfg).unwrap()).collect();
            prop_assert!(ps.windows(2).all(|w| w[0] <= w[1] + 1e-15));
            let tr = retention_trace(&cfg, r0).unwrap();
            prop_assert_eq!(tr.r.len(), layers);
            prop_assert_eq!(tr.r[0], r0);
            prop_assert!(tr.r.windows(2).all(|w| w[1] <= w[0]));
            prop_assert!(tr.r.iter().all(|&r| r > 0.0 && r <= r0));
        }

        #[test]
        fn midpoint_layer_hits_average(p_init in 0.0f64..0.5, span in 0.0f64..0.49, half in 1usize..20) {
            let layers = 2 * half + 2;
            let cfg = PruneScheduleConfig::sigmoid(p_init, p_init + span, 0.5, 20.0, layers);
            let p = prune_ratio(half, &cfg).unwrap();
            prop_assert!((p - (2.0 * p_init + span) / 2.0).abs() < 1e-12);
        }

        #[test]
        fn mean_strictly_decreasing_in_p_final(a in 0.01f64..0.9, b in 0.01f64..0.9) {
            prop_assume!((a - b).abs() > 1e-6);
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            let m_lo = mean_retention(&reference().with_p_final(lo), 0.45).unwrap();
            let m_hi = mean_retention(&reference().with_p_final(hi), 0.45).unwrap();
            prop_assert!(m_hi < m_lo);
        }
    }
}
