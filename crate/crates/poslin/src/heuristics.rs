//! Linear heuristic bounds on the optimal cost vector: initialization from a
//! stabilizing policy, consistency tests, monotone improvement by value
//! iteration, and the convergence-rate bound.

use nalgebra::DVector;

use crate::bellman::{bellman_apply, evaluate_policy};
use crate::model::ProblemInstance;
use crate::{Error, Result, TOL};

/// Upper and lower bound vectors sandwiching the optimal cost:
/// `0 <= h_lower <= p <= h_upper` elementwise.
#[derive(Debug, Clone, PartialEq)]
pub struct HeuristicPair {
    pub h_upper: DVector<f64>,
    pub h_lower: DVector<f64>,
}

impl HeuristicPair {
    pub fn new(h_upper: DVector<f64>, h_lower: DVector<f64>) -> Result<Self> {
        if h_upper.len() != h_lower.len() {
            return Err(Error::Dimension("heuristic bound lengths differ".into()));
        }
        let ok = h_lower.iter().zip(h_upper.iter()).all(|(&lo, &hi)| {
            lo >= -TOL && lo <= hi + TOL && lo.is_finite() && hi.is_finite()
        });
        if !ok {
            return Err(Error::InvalidInstance(
                "heuristic pair violates 0 <= h_lower <= h_upper".into(),
            ));
        }
        Ok(HeuristicPair { h_upper, h_lower })
    }
}

/// Initial bounds from the stabilizing policy: the upper bound is the exact
/// cost of `k_hat`, the lower bound is the stage cost `s`.
pub fn init_heuristics(instance: &ProblemInstance) -> Result<HeuristicPair> {
    let k_hat = instance.k_hat.as_ref().ok_or(Error::MissingInitialPolicy)?;
    let h_upper = evaluate_policy(instance, k_hat)?.into_inner();
    HeuristicPair::new(h_upper, instance.s.clone())
}

/// True iff `h <= T(h) + tol` elementwise: `h` is a consistent lower bound.
pub fn check_consistent_lower(instance: &ProblemInstance, h: &DVector<f64>, tol: f64) -> bool {
    let t = bellman_apply(instance, h);
    (0..h.len()).all(|i| h[i] <= t[i] + tol)
}

/// True iff `h >= T(h) - tol` elementwise: `h` is a consistent upper bound.
pub fn check_consistent_upper(instance: &ProblemInstance, h: &DVector<f64>, tol: f64) -> bool {
    let t = bellman_apply(instance, h);
    (0..h.len()).all(|i| h[i] >= t[i] - tol)
}

/// Applies `k` Bellman steps to each bound. For consistent bounds the upper
/// sequence is nonincreasing and the lower nondecreasing, and the sandwich
/// around the optimal cost is preserved.
pub fn improve(instance: &ProblemInstance, pair: &HeuristicPair, k: usize) -> HeuristicPair {
    let mut h_upper = pair.h_upper.clone();
    let mut h_lower = pair.h_lower.clone();
    for _ in 0..k {
        h_upper = bellman_apply(instance, &h_upper);
        h_lower = bellman_apply(instance, &h_lower);
    }
    HeuristicPair { h_upper, h_lower }
}

/// Parameters of the value-iteration rate bound: `delta` with
/// `h_lower >= delta * h_upper` and `beta > 1` with `A'h_upper <= beta * s`
/// and `B'h_upper <= beta * r`.
#[derive(Debug, Clone)]
pub struct RateBound {
    pub delta: f64,
    pub beta: f64,
}

impl RateBound {
    /// The predicted factor `1 - (1 - delta) / (1 - 1/beta)^k`. The factor
    /// times the optimal cost vector lower-bounds the k-th improved lower
    /// heuristic, but is only informative while it stays in `[0, 1]`.
    pub fn factor(&self, k: usize) -> f64 {
        1.0 - (1.0 - self.delta) / (1.0 - 1.0 / self.beta).powi(k as i32)
    }

    /// Bound curve `k -> factor(k) * p` for `k = 0..=k_max`.
    pub fn curve(&self, p: &DVector<f64>, k_max: usize) -> Vec<DVector<f64>> {
        (0..=k_max).map(|k| p * self.factor(k)).collect()
    }
}

/// Computes the tightest valid `delta` and the smallest valid `beta` for the
/// given pair. A ratio `0/0` in `delta` counts as 1; `beta` is clamped below
/// by `1 + TOL`. Fails when some `r_j = 0` has `(B'h_upper)_j > 0`, in which
/// case no `beta` exists.
pub fn rate_bound(instance: &ProblemInstance, pair: &HeuristicPair) -> Result<RateBound> {
    let mut delta = 1.0_f64;
    for i in 0..instance.n {
        let hi = pair.h_upper[i];
        let lo = pair.h_lower[i];
        if hi <= TOL {
            // 0/0 counts as 1; a positive lower bound over a zero upper
            // bound cannot occur under the sandwich and is excluded.
            continue;
        }
        delta = delta.min(lo / hi);
    }
    delta = delta.clamp(0.0, 1.0);

    let at = instance.a.transpose() * &pair.h_upper;
    let mut beta = 1.0 + TOL;
    for i in 0..instance.n {
        beta = beta.max(at[i] / instance.s[i]);
    }
    let bt = instance.b.transpose() * &pair.h_upper;
    for j in 0..instance.m() {
        if instance.r[j] > TOL {
            beta = beta.max(bt[j] / instance.r[j]);
        } else if bt[j] > TOL {
            return Err(Error::BetaUndefined {
                index: j,
                value: bt[j],
            });
        }
    }
    Ok(RateBound { delta, beta })
}

/// CSV rows `(k, h_upper..., h_lower...)` for a bound trajectory.
pub fn bounds_trajectory_csv(instance: &ProblemInstance, pair: &HeuristicPair, steps: usize) -> String {
    let n = instance.n;
    let mut out = String::from("k");
    for i in 0..n {
        out.push_str(&format!(",h_upper_{}", i + 1));
    }
    for i in 0..n {
        out.push_str(&format!(",h_lower_{}", i + 1));
    }
    out.push('\n');
    let mut current = pair.clone();
    for k in 0..=steps {
        out.push_str(&k.to_string());
        for i in 0..n {
            out.push_str(&format!(",{}", current.h_upper[i]));
        }
        for i in 0..n {
            out.push_str(&format!(",{}", current.h_lower[i]));
        }
        out.push('\n');
        if k < steps {
            current = improve(instance, &current, 1);
        }
    }
    out
}
