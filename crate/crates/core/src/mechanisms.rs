//! Two-agent mechanisms over a controlled value `λ ∈ [0, 1]`.
//!
//! Each agent's pressure is a linear p-function fixed by two numbers: the
//! seller's decreases from `a1` to `a2`, the buyer's increases from `b1` to
//! `b2`. The mechanism proposes `λ`, collects both reports and bisects
//! toward the point where its goal is met.

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_TOLERANCE: f64 = 1e-9;
pub const MAX_ITERATIONS: u32 = 200;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MechanismError {
    #[error("lambda {0} is outside [0, 1]")]
    LambdaOutOfRange(f64),
    #[error("parameters outside the admissible set: {0}")]
    InvalidParams(String),
    #[error("tolerance must be a positive finite number")]
    BadTolerance,
    #[error("pressures do not cross on [0, 1]; closest boundary is lambda = {}", .0.lambda_star)]
    NoCrossing(Box<Outcome>),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TauRange {
    pub min: f64,
    pub max: f64,
}

impl TauRange {
    pub const UNIT: TauRange = TauRange { min: 0.0, max: 1.0 };
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Monotonicity {
    /// Seller side.
    Decreasing,
    /// Buyer side.
    Increasing,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PFunction {
    pub kind: Monotonicity,
    /// Value at `λ = 0`.
    pub start: f64,
    /// Value at `λ = 1`.
    pub end: f64,
    pub range: TauRange,
}

impl PFunction {
    /// Requires `τ_max > a1 > a2 > τ_min`.
    pub fn decreasing(a1: f64, a2: f64, range: TauRange) -> Result<Self, MechanismError> {
        if !(range.max > a1 && a1 > a2 && a2 > range.min) {
            return Err(MechanismError::InvalidParams(format!(
                "need {} > a1 > a2 > {}, got a1={a1}, a2={a2}",
                range.max, range.min
            )));
        }
        Ok(PFunction {
            kind: Monotonicity::Decreasing,
            start: a1,
            end: a2,
            range,
        })
    }

    /// Requires `τ_min < b1 < b2 < τ_max`.
    pub fn increasing(b1: f64, b2: f64, range: TauRange) -> Result<Self, MechanismError> {
        if !(range.min < b1 && b1 < b2 && b2 < range.max) {
            return Err(MechanismError::InvalidParams(format!(
                "need {} < b1 < b2 < {}, got b1={b1}, b2={b2}",
                range.min, range.max
            )));
        }
        Ok(PFunction {
            kind: Monotonicity::Increasing,
            start: b1,
            end: b2,
            range,
        })
    }

    pub fn eval(&self, lambda: f64) -> Result<f64, MechanismError> {
        if !(0.0..=1.0).contains(&lambda) {
            return Err(MechanismError::LambdaOutOfRange(lambda));
        }
        Ok(self.at(lambda))
    }

    fn at(&self, lambda: f64) -> f64 {
        self.start + (self.end - self.start) * lambda
    }
}

/// `θ = (a1, a2, b1, b2)` with both p-functions validated.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Environment {
    pub seller: PFunction,
    pub buyer: PFunction,
}

impl Environment {
    /// Both ranges default to `[0, 1]`.
    pub fn new(a1: f64, a2: f64, b1: f64, b2: f64) -> Result<Self, MechanismError> {
        Self::with_ranges([a1, a2, b1, b2], TauRange::UNIT, TauRange::UNIT)
    }

    pub fn with_ranges(theta: [f64; 4], seller: TauRange, buyer: TauRange) -> Result<Self, MechanismError> {
        let [a1, a2, b1, b2] = theta;
        Ok(Environment {
            seller: PFunction::decreasing(a1, a2, seller)?,
            buyer: PFunction::increasing(b1, b2, buyer)?,
        })
    }

    pub fn theta(&self) -> [f64; 4] {
        [self.seller.start, self.seller.end, self.buyer.start, self.buyer.end]
    }

    /// Crossing of the two lines, when it lies in `[0, 1]`.
    pub fn closed_form_crossing(&self) -> Option<f64> {
        let [a1, a2, b1, b2] = self.theta();
        let lambda = (a1 - b1) / ((a1 - a2) + (b2 - b1));
        (0.0..=1.0).contains(&lambda).then_some(lambda)
    }
}

/// What the mechanism steers toward. `residual` must be non-increasing in
/// `λ` for bisection to apply; the goal is met where it reaches zero.
pub trait Goal {
    fn residual(&self, p1: f64, p2: f64) -> f64;
}

/// Equal pressure on both sides.
#[derive(Debug, Clone, Copy, Default)]
pub struct Balance;

impl Goal for Balance {
    fn residual(&self, p1: f64, p2: f64) -> f64 {
        p1 - p2
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    pub lambda: f64,
    pub p1: f64,
    pub p2: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Outcome {
    pub lambda_star: f64,
    pub p1: f64,
    pub p2: f64,
    /// Number of `λ` values proposed to the agents.
    pub iterations: u32,
    /// Whether `|residual| < tolerance` was reached.
    pub balanced: bool,
    pub trace: Vec<TracePoint>,
}

/// Runs the mechanism against two reporting agents.
pub fn run_with_agents(
    mut seller: impl FnMut(f64) -> f64,
    mut buyer: impl FnMut(f64) -> f64,
    goal: &dyn Goal,
    tolerance: f64,
) -> Result<Outcome, MechanismError> {
    if !(tolerance.is_finite() && tolerance > 0.0) {
        return Err(MechanismError::BadTolerance);
    }
    let mut trace = Vec::new();
    let mut ask = |lambda: f64, trace: &mut Vec<TracePoint>| {
        let point = TracePoint {
            lambda,
            p1: seller(lambda),
            p2: buyer(lambda),
        };
        trace.push(point);
        point
    };
    let finish = |point: TracePoint, balanced: bool, trace: Vec<TracePoint>| Outcome {
        lambda_star: point.lambda,
        p1: point.p1,
        p2: point.p2,
        iterations: trace.len() as u32,
        balanced,
        trace,
    };

    let lo_point = ask(0.0, &mut trace);
    let hi_point = ask(1.0, &mut trace);
    let r_lo = goal.residual(lo_point.p1, lo_point.p2);
    let r_hi = goal.residual(hi_point.p1, hi_point.p2);
    if r_lo.abs() < tolerance {
        return Ok(finish(lo_point, true, trace));
    }
    if r_hi.abs() < tolerance {
        return Ok(finish(hi_point, true, trace));
    }
    if r_lo < 0.0 {
        return Err(MechanismError::NoCrossing(Box::new(finish(lo_point, false, trace))));
    }
    if r_hi > 0.0 {
        return Err(MechanismError::NoCrossing(Box::new(finish(hi_point, false, trace))));
    }

    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    let mut best = lo_point;
    while trace.len() < MAX_ITERATIONS as usize {
        let mid = lo + (hi - lo) / 2.0;
        if mid <= lo || mid >= hi {
            break;
        }
        let point = ask(mid, &mut trace);
        let r = goal.residual(point.p1, point.p2);
        best = point;
        if r.abs() < tolerance {
            return Ok(finish(point, true, trace));
        }
        if r > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(finish(best, false, trace))
}

/// Balances the environment's two p-functions.
pub fn run_mechanism(env: &Environment, tolerance: f64) -> Result<Outcome, MechanismError> {
    let (seller, buyer) = (env.seller, env.buyer);
    run_with_agents(|l| seller.at(l), |l| buyer.at(l), &Balance, tolerance)
}

/// `round(λ · reserves)`.
pub fn price_at(lambda: f64, buyer_reserves: u64) -> Result<u64, MechanismError> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(MechanismError::LambdaOutOfRange(lambda));
    }
    Ok((lambda * buyer_reserves as f64).round() as u64)
}

pub fn price_of_good(env: &Environment, buyer_reserves: u64, tolerance: f64) -> Result<u64, MechanismError> {
    let outcome = run_mechanism(env, tolerance)?;
    price_at(outcome.lambda_star, buyer_reserves)
}

/// Both p-functions sampled at `steps + 1` evenly spaced points.
pub fn sweep(env: &Environment, steps: u32) -> Vec<TracePoint> {
    let steps = steps.max(1);
    (0..=steps)
        .map(|i| {
            let lambda = i as f64 / steps as f64;
            TracePoint {
                lambda,
                p1: env.seller.at(lambda),
                p2: env.buyer.at(lambda),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn p_eval_examples() {
        let dec = PFunction::decreasing(0.9, 0.1, TauRange::UNIT).unwrap();
        assert_eq!(dec.eval(0.0).unwrap(), 0.9);
        assert!((dec.eval(0.5).unwrap() - 0.5).abs() < 1e-12);
        let inc = PFunction::increasing(0.1, 0.9, TauRange::UNIT).unwrap();
        assert_eq!(inc.eval(1.0).unwrap(), 0.9);
        assert!(matches!(dec.eval(1.5), Err(MechanismError::LambdaOutOfRange(_))));
        assert!(matches!(dec.eval(f64::NAN), Err(MechanismError::LambdaOutOfRange(_))));
    }

    #[test]
    fn theta_is_strict() {
        assert!(PFunction::decreasing(0.1, 0.9, TauRange::UNIT).is_err());
        assert!(PFunction::decreasing(1.0, 0.5, TauRange::UNIT).is_err());
        assert!(PFunction::decreasing(0.5, 0.5, TauRange::UNIT).is_err());
        assert!(PFunction::increasing(0.0, 0.6, TauRange::UNIT).is_err());
        assert!(PFunction::increasing(0.2, f64::NAN, TauRange::UNIT).is_err());
    }

    #[test]
    fn symmetric_environment_balances_at_half() {
        let env = Environment::new(0.9, 0.1, 0.1, 0.9).unwrap();
        let out = run_mechanism(&env, DEFAULT_TOLERANCE).unwrap();
        assert_eq!(out.lambda_star, 0.5);
        assert!(out.balanced);
        assert_eq!(price_of_good(&env, 100, DEFAULT_TOLERANCE).unwrap(), 50);
    }

    #[test]
    fn two_thirds_example_with_widened_buyer_range() {
        // b1 = 0 sits on the default lower bound, so the buyer range is widened.
        assert!(Environment::new(0.8, 0.2, 0.0, 0.6).is_err());
        let env = Environment::with_ranges([0.8, 0.2, 0.0, 0.6], TauRange::UNIT, TauRange { min: -0.1, max: 1.0 }).unwrap();
        let out = run_mechanism(&env, DEFAULT_TOLERANCE).unwrap();
        assert!((out.lambda_star - 2.0 / 3.0).abs() < 1e-8);
        assert!((out.p1 - out.p2).abs() < DEFAULT_TOLERANCE);
    }

    #[test]
    fn no_crossing_reports_boundary() {
        // a2 > b2: the buyer stays below the seller everywhere.
        let env = Environment::new(0.9, 0.6, 0.1, 0.5).unwrap();
        match run_mechanism(&env, DEFAULT_TOLERANCE) {
            Err(MechanismError::NoCrossing(out)) => {
                assert_eq!(out.lambda_star, 1.0);
                assert!(!out.balanced);
            }
            other => panic!("{other:?}"),
        }
        // b1 > a1: the buyer starts above.
        let env = Environment::new(0.3, 0.1, 0.4, 0.9).unwrap();
        match run_mechanism(&env, DEFAULT_TOLERANCE) {
            Err(MechanismError::NoCrossing(out)) => assert_eq!(out.lambda_star, 0.0),
            other => panic!("{other:?}"),
        }
        assert!(price_of_good(&env, 10, DEFAULT_TOLERANCE).is_err());
    }

    #[test]
    fn prices() {
        assert_eq!(price_at(0.5, 100).unwrap(), 50);
        assert_eq!(price_at(0.0, 12345).unwrap(), 0);
        assert_eq!(price_at(1.0, 80).unwrap(), 80);
        assert!(price_at(1.01, 80).is_err());
    }

    #[test]
    fn tolerance_must_be_positive() {
        let env = Environment::new(0.9, 0.1, 0.1, 0.9).unwrap();
        assert_eq!(run_mechanism(&env, 0.0), Err(MechanismError::BadTolerance));
        assert_eq!(run_mechanism(&env, f64::INFINITY), Err(MechanismError::BadTolerance));
    }

    #[test]
    fn agents_are_callbacks() {
        let mut calls = 0;
        let out = run_with_agents(
            |l| {
                calls += 1;
                1.0 - l
            },
            |l| l * l,
            &Balance,
            1e-12,
        )
        .unwrap();
        let golden = (5f64.sqrt() - 1.0) / 2.0;
        assert!((out.lambda_star - golden).abs() < 1e-9);
        assert_eq!(calls as u32, out.iterations);
        assert_eq!(out.trace.len() as u32, out.iterations);
    }

    #[test]
    fn sweep_endpoints() {
        let env = Environment::new(0.9, 0.1, 0.1, 0.9).unwrap();
        let s = sweep(&env, 10);
        assert_eq!(s.len(), 11);
        assert_eq!((s[0].p1, s[0].p2), (0.9, 0.1));
        assert_eq!(s[10].lambda, 1.0);
    }
}
