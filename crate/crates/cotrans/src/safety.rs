//! Discrete-time higher-order barrier functions for obstacle avoidance.
//!
//! Safety of each body with respect to a point obstacle `o` is encoded by
//! the planar clearance
//!
//! ```text
//! h(p) = || p_xy - o || - d_th
//! ```
//!
//! which has relative degree two under the discretized dynamics (foot
//! forces move velocities, velocities move positions). The constraint
//! stack therefore uses the discrete higher-order chain
//!
//! ```text
//! psi1_k = h_{k+1} - h_k + alpha1 * h_k
//! psi2_k = psi1_{k+1} - psi1_k + alpha2 * psi1_k
//! ```
//!
//! with class-kappa slopes `alpha1, alpha2 in (0, 1)`. Expanding the chain
//! gives the closed form used when embedding the constraint over state
//! triples:
//!
//! ```text
//! psi2_k = h_{k+2} - (2 - alpha1 - alpha2) h_{k+1}
//!        + (1 - alpha1)(1 - alpha2) h_k
//! ```
//!
//! Enforcing `psi2_k >= 0` along the horizon plus `psi1 >= 0` at the final
//! transition renders the set `{h >= 0, psi1 >= 0}` forward invariant for
//! the model. The monitor in this module evaluates the same quantities on
//! closed-loop telemetry and classifies any excursions as transient or
//! persistent.

use crate::coupling::GlobalState;
use nalgebra::Vector2;
use thiserror::Error;

/// Guard radius below which the clearance gradient is ill-defined.
pub const DISTANCE_EPSILON: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SafetyError {
    #[error("barrier parameter {name} = {value} outside its valid range {range}")]
    InvalidParameter { name: &'static str, value: f64, range: &'static str },
    #[error("body sits within {DISTANCE_EPSILON} m of obstacle center; clearance gradient undefined")]
    DegenerateDistance,
}

/// Point obstacle in the plane.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Obstacle {
    pub center_m: Vector2<f64>,
}

impl Obstacle {
    pub fn new(x: f64, y: f64) -> Self {
        Self { center_m: Vector2::new(x, y) }
    }
}

/// Barrier chain parameters shared by all body/obstacle pairs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HocbfParams {
    /// First-order class-kappa slope, dimensionless, in (0, 1).
    pub alpha1: f64,
    /// Second-order class-kappa slope, dimensionless, in (0, 1).
    pub alpha2: f64,
    /// Required planar clearance from obstacle centers, m.
    pub distance_threshold_m: f64,
}

impl HocbfParams {
    pub fn new(alpha1: f64, alpha2: f64, distance_threshold_m: f64) -> Result<Self, SafetyError> {
        let p = Self { alpha1, alpha2, distance_threshold_m };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), SafetyError> {
        for (name, value) in [("alpha1", self.alpha1), ("alpha2", self.alpha2)] {
            if !(value > 0.0 && value < 1.0) {
                return Err(SafetyError::InvalidParameter { name, value, range: "(0, 1)" });
            }
        }
        if !(self.distance_threshold_m > 0.0 && self.distance_threshold_m.is_finite()) {
            return Err(SafetyError::InvalidParameter {
                name: "distance_threshold_m",
                value: self.distance_threshold_m,
                range: "(0, inf)",
            });
        }
        Ok(())
    }
}

impl Default for HocbfParams {
    fn default() -> Self {
        Self { alpha1: 0.4, alpha2: 0.04, distance_threshold_m: 0.5 }
    }
}

/// Planar clearance `h` of one body position from one obstacle.
pub fn barrier(p_xy: &Vector2<f64>, obstacle: &Obstacle, distance_threshold_m: f64) -> f64 {
    (p_xy - obstacle.center_m).norm() - distance_threshold_m
}

/// Gradient of [`barrier`] with respect to the planar position: the unit
/// vector away from the obstacle. Errors within [`DISTANCE_EPSILON`] of the
/// center, where the direction is undefined.
pub fn barrier_gradient(
    p_xy: &Vector2<f64>,
    obstacle: &Obstacle,
) -> Result<Vector2<f64>, SafetyError> {
    let d = p_xy - obstacle.center_m;
    let n = d.norm();
    if n < DISTANCE_EPSILON {
        return Err(SafetyError::DegenerateDistance);
    }
    Ok(d / n)
}

/// First-order difference constraint value over one transition.
pub fn psi1(h_k: f64, h_k1: f64, alpha1: f64) -> f64 {
    h_k1 - h_k + alpha1 * h_k
}

/// Second-order value by the recursive definition over two transitions.
pub fn psi2_recursive(h_k: f64, h_k1: f64, h_k2: f64, alpha1: f64, alpha2: f64) -> f64 {
    let p1_k = psi1(h_k, h_k1, alpha1);
    let p1_k1 = psi1(h_k1, h_k2, alpha1);
    p1_k1 - p1_k + alpha2 * p1_k
}

/// Closed-form coefficients `(c0, c1, c2)` with
/// `psi2 = c2*h_{k+2} + c1*h_{k+1} + c0*h_k`; exposed so constraint
/// assembly and tests share one definition.
pub fn psi2_coefficients(alpha1: f64, alpha2: f64) -> (f64, f64, f64) {
    ((1.0 - alpha1) * (1.0 - alpha2), -(2.0 - alpha1 - alpha2), 1.0)
}

/// Second-order value in closed form over a clearance triple.
pub fn psi2(h_k: f64, h_k1: f64, h_k2: f64, alpha1: f64, alpha2: f64) -> f64 {
    let (c0, c1, c2) = psi2_coefficients(alpha1, alpha2);
    c2 * h_k2 + c1 * h_k1 + c0 * h_k
}

/// Minimum clearance over all (body, obstacle) pairs at one state.
pub fn min_barrier(x: &GlobalState, obstacles: &[Obstacle], distance_threshold_m: f64) -> f64 {
    let mut min_h = f64::INFINITY;
    for body in &x.bodies {
        let p = Vector2::new(body.position.x, body.position.y);
        for obs in obstacles {
            min_h = min_h.min(barrier(&p, obs, distance_threshold_m));
        }
    }
    min_h
}

/// One contiguous excursion of a monitored signal below zero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ViolationInterval {
    pub start_s: f64,
    pub end_s: f64,
    /// Most negative sample inside the interval.
    pub min_value: f64,
    /// Whether a nonnegative sample follows the interval.
    pub recovered: bool,
}

impl ViolationInterval {
    pub fn duration_s(&self) -> f64 {
        self.end_s - self.start_s
    }

    /// Transient: short-lived and recovered. Anything longer, or still in
    /// violation at the end of the record, is persistent.
    pub fn is_transient(&self, max_duration_s: f64) -> bool {
        self.recovered && self.duration_s() < max_duration_s
    }
}

/// Safety verdict over one monitored signal.
#[derive(Debug, Clone, PartialEq)]
pub struct SafetyReport {
    pub min_value: f64,
    pub violations: Vec<ViolationInterval>,
    /// True when every violation is transient under the given threshold.
    pub all_transient: bool,
}

/// Scan `(time, value)` samples for negative excursions and classify them.
/// Samples must be time-ordered.
pub fn assess_samples(samples: &[(f64, f64)], transient_max_s: f64) -> SafetyReport {
    let mut min_value = f64::INFINITY;
    let mut violations = Vec::new();
    let mut open: Option<ViolationInterval> = None;
    for &(t, v) in samples {
        min_value = min_value.min(v);
        if v < 0.0 {
            match open.as_mut() {
                Some(iv) => {
                    iv.end_s = t;
                    iv.min_value = iv.min_value.min(v);
                }
                None => {
                    open = Some(ViolationInterval {
                        start_s: t,
                        end_s: t,
                        min_value: v,
                        recovered: false,
                    });
                }
            }
        } else if let Some(mut iv) = open.take() {
            iv.recovered = true;
            violations.push(iv);
        }
    }
    if let Some(iv) = open.take() {
        violations.push(iv);
    }
    let all_transient = violations.iter().all(|iv| iv.is_transient(transient_max_s));
    SafetyReport { min_value, violations, all_transient }
}

/// Evaluate the barrier chain along a time-ordered state record and report
/// on the worst (body, obstacle) clearance, exactly as the acceptance
/// monitor consumes closed-loop telemetry.
pub fn assess_trajectory(
    records: &[(f64, GlobalState)],
    obstacles: &[Obstacle],
    params: &HocbfParams,
    transient_max_s: f64,
) -> SafetyReport {
    let samples: Vec<(f64, f64)> = records
        .iter()
        .map(|(t, x)| (*t, min_barrier(x, obstacles, params.distance_threshold_m)))
        .collect();
    assess_samples(&samples, transient_max_s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn closed_form_matches_recursion_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        for _ in 0..1000 {
            let h0 = rng.gen_range(-3.0..3.0);
            let h1 = rng.gen_range(-3.0..3.0);
            let h2 = rng.gen_range(-3.0..3.0);
            let a1 = rng.gen_range(0.01..0.99);
            let a2 = rng.gen_range(0.01..0.99);
            let closed = psi2(h0, h1, h2, a1, a2);
            let recursive = psi2_recursive(h0, h1, h2, a1, a2);
            assert!(
                (closed - recursive).abs() < 1e-12,
                "closed form diverged: {closed} vs {recursive}"
            );
        }
    }

    #[test]
    fn stationary_clearance_values() {
        // A body parked at clearance 2 with the default slopes.
        let (a1, a2) = (0.4, 0.04);
        assert_relative_eq!(psi1(2.0, 2.0, a1), 0.8, epsilon = 1e-15);
        assert_relative_eq!(psi2(2.0, 2.0, 2.0, a1, a2), 0.032, epsilon = 1e-15);
    }

    #[test]
    fn barrier_value_and_gradient() {
        let obs = Obstacle::new(1.0, -2.0);
        let p = Vector2::new(4.0, 2.0); // distance 5
        assert_relative_eq!(barrier(&p, &obs, 0.5), 4.5, epsilon = 1e-15);
        let g = barrier_gradient(&p, &obs).unwrap();
        assert_relative_eq!(g.norm(), 1.0, epsilon = 1e-12);
        // Finite-difference cross-check.
        let step = 1e-7;
        for k in 0..2 {
            let mut pp = p;
            let mut pm = p;
            pp[k] += step;
            pm[k] -= step;
            let fd = (barrier(&pp, &obs, 0.5) - barrier(&pm, &obs, 0.5)) / (2.0 * step);
            assert_relative_eq!(g[k], fd, epsilon = 1e-6);
        }
        assert_eq!(
            barrier_gradient(&Vector2::new(1.0, -2.0), &obs),
            Err(SafetyError::DegenerateDistance)
        );
    }

    #[test]
    fn parameter_validation() {
        assert!(HocbfParams::new(0.4, 0.04, 0.5).is_ok());
        assert!(HocbfParams::new(0.0, 0.04, 0.5).is_err());
        assert!(HocbfParams::new(1.0, 0.04, 0.5).is_err());
        assert!(HocbfParams::new(0.4, -0.1, 0.5).is_err());
        assert!(HocbfParams::new(0.4, 0.04, 0.0).is_err());
        assert!(HocbfParams::new(0.4, 0.04, f64::NAN).is_err());
    }

    #[test]
    fn monitor_classifies_excursions() {
        // Clean record.
        let clean: Vec<(f64, f64)> = (0..100).map(|k| (k as f64 * 0.1, 0.4)).collect();
        let r = assess_samples(&clean, 0.5);
        assert!(r.violations.is_empty() && r.all_transient);
        assert_relative_eq!(r.min_value, 0.4);

        // One short dip that recovers: transient.
        let mut dip = clean.clone();
        for k in 40..43 {
            dip[k].1 = -0.05;
        }
        let r = assess_samples(&dip, 0.5);
        assert_eq!(r.violations.len(), 1);
        assert!(r.violations[0].recovered);
        assert!(r.all_transient);
        assert_relative_eq!(r.min_value, -0.05);

        // Long dip: not transient.
        let mut long = clean.clone();
        for k in 30..40 {
            long[k].1 = -0.02;
        }
        let r = assess_samples(&long, 0.5);
        assert_eq!(r.violations.len(), 1);
        assert!(!r.all_transient);

        // Violation still active at the record end: never transient, even
        // if short.
        let mut tail = clean;
        for k in 98..100 {
            tail[k].1 = -0.10;
        }
        let r = assess_samples(&tail, 0.5);
        assert_eq!(r.violations.len(), 1);
        assert!(!r.violations[0].recovered && !r.all_transient);
    }

    mod invariance {
        use proptest::prelude::*;

        proptest! {
            /// Forward invariance of the discrete chain: if h and psi1
            /// start nonnegative and every psi2 (and the final psi1) is
            /// nonnegative, then h stays nonnegative along the sequence.
            #[test]
            fn chain_nonnegativity_implies_invariance(
                h0 in 0.0..5.0f64,
                p10 in 0.0..2.0f64,
                a1 in 0.01..0.99f64,
                a2 in 0.01..0.99f64,
                psi2_vals in proptest::collection::vec(0.0..1.0f64, 1..30),
            ) {
                // Reconstruct h_k from the chain:
                // psi1_{k+1} = psi1_k(1-a2) + psi2_k,
                // h_{k+1}   = h_k(1-a1) + psi1_k.
                let mut h = h0;
                let mut p1 = p10;
                for &v2 in &psi2_vals {
                    let h_next = h * (1.0 - a1) + p1;
                    let p1_next = p1 * (1.0 - a2) + v2;
                    prop_assert!(h_next >= 0.0, "h must stay nonnegative");
                    prop_assert!(p1_next >= 0.0);
                    h = h_next;
                    p1 = p1_next;
                }
            }
        }
    }
}
