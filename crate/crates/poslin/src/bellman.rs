//! The Bellman operator, value iteration to its fixed point, policy
//! extraction and exact evaluation, the LP-form certificate, and a
//! brute-force policy enumeration oracle.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::model::{spectral_radius_nonneg, Action, CostVector, Policy, ProblemInstance};
use crate::{Error, Result, TOL, VI_MAX_ITER, VI_TOL};

/// Default cap on the number of enumerated policies in the oracle.
pub const ENUMERATION_CAP: u128 = 1_000_000;

/// Fixed point, achieving policy and convergence data.
#[derive(Debug, Clone)]
pub struct SolveResult {
    pub p: CostVector,
    pub policy: Policy,
    pub iterations: usize,
    pub residual: f64,
}

/// JSON shape of a [`SolveResult`].
#[derive(Debug, Clone, Serialize)]
pub struct SolveResultFile {
    pub p: Vec<f64>,
    pub policy: Vec<i64>,
    pub iterations: usize,
    pub residual: f64,
    pub value: f64,
}

impl SolveResult {
    pub fn to_file(&self, instance: &ProblemInstance) -> SolveResultFile {
        SolveResultFile {
            p: self.p.iter().cloned().collect(),
            policy: self.policy.to_indices(),
            iterations: self.iterations,
            residual: self.residual,
            value: self.p.dot(&instance.x0),
        }
    }
}

/// One application of the Bellman operator
/// `T(p) = s + A'p + sum_i min{r_i + B_i'p, 0} E_i`.
pub fn bellman_apply(instance: &ProblemInstance, p: &DVector<f64>) -> DVector<f64> {
    let mut out = &instance.s + instance.a.transpose() * p;
    for i in 0..instance.n {
        let mut z = 0.0_f64;
        for c in instance.block(i) {
            let v = instance.r[c] + instance.b.column(c).dot(p);
            if v < z {
                z = v;
            }
        }
        if z != 0.0 {
            for q in 0..instance.n {
                out[q] += z * instance.e[(i, q)];
            }
        }
    }
    out
}

/// Iterates [`bellman_apply`] from `p0` until the max-norm change is at most
/// `tol`. From `p0 = 0` the iterates are monotonically nondecreasing; failure
/// to converge signals a possibly infinite value.
pub fn value_iterate(
    instance: &ProblemInstance,
    p0: &CostVector,
    tol: f64,
    max_iter: usize,
) -> Result<SolveResult> {
    let mut p = p0.as_vec().clone();
    let mut residual = f64::INFINITY;
    for it in 1..=max_iter {
        let next = bellman_apply(instance, &p);
        residual = (&next - &p).amax();
        p = next;
        if residual <= tol {
            let policy = extract_policy(instance, &p);
            return Ok(SolveResult {
                p: CostVector::new(p)?,
                policy,
                iterations: it,
                residual,
            });
        }
        if !residual.is_finite() {
            break;
        }
    }
    Err(Error::NoConvergence { max_iter, residual })
}

/// Solves from `p0 = 0` with the default tolerances.
pub fn solve(instance: &ProblemInstance) -> Result<SolveResult> {
    value_iterate(instance, &CostVector::zeros(instance.n), VI_TOL, VI_MAX_ITER)
}

/// Greedy policy at `p`: per block the input of minimal reduced cost
/// `r_ij + B_ij'p` when that minimum is negative, idle otherwise. Ties break
/// to the lowest index.
pub fn extract_policy(instance: &ProblemInstance, p: &DVector<f64>) -> Policy {
    let choice = (0..instance.n)
        .map(|i| {
            let mut best = 0.0_f64;
            let mut best_j = None;
            for (j, c) in instance.block(i).enumerate() {
                let v = instance.r[c] + instance.b.column(c).dot(p);
                if v < best {
                    best = v;
                    best_j = Some(j);
                }
            }
            match best_j {
                Some(j) => Action::Input(j),
                None => Action::Idle,
            }
        })
        .collect();
    Policy { choice }
}

/// Exact policy cost: solves `(I - (A+BK)') p = s + K'r`. Fails when the
/// closed loop is not Schur stable.
pub fn evaluate_policy(instance: &ProblemInstance, policy: &Policy) -> Result<CostVector> {
    let exp = instance.expand_policy(policy)?;
    let rho = spectral_radius_nonneg(&exp.closed_loop, 500);
    if rho >= 1.0 - TOL {
        return Err(Error::UnstablePolicy { rho });
    }
    let n = instance.n;
    let system = DMatrix::identity(n, n) - exp.closed_loop.transpose();
    let p = system
        .lu()
        .solve(&exp.stage_cost)
        .ok_or(Error::UnstablePolicy { rho })?;
    if p.iter().any(|&v| v < -1e-6) {
        // A nonnegative solve must come out nonnegative for a stable loop.
        return Err(Error::UnstablePolicy { rho });
    }
    CostVector::new(p.map(|v| v.max(0.0)))
}

/// True iff `p >= 0` and `p` satisfies the Bellman equation within `tol`,
/// certifying that `p` attains the LP optimum.
pub fn check_lp_form(instance: &ProblemInstance, p: &DVector<f64>, tol: f64) -> bool {
    if p.iter().any(|&v| v < -tol) {
        return false;
    }
    let t = bellman_apply(instance, p);
    (&t - p).amax() <= tol
}

/// True iff `p >= 0` and `p <= T(p) + tol` elementwise: `p` is feasible for
/// the inequality-relaxed LP (a consistent lower bound).
pub fn check_lp_feasible(instance: &ProblemInstance, p: &DVector<f64>, tol: f64) -> bool {
    if p.iter().any(|&v| v < -tol) {
        return false;
    }
    let t = bellman_apply(instance, p);
    (0..p.len()).all(|i| p[i] <= t[i] + tol)
}

fn policy_from_index(instance: &ProblemInstance, mut idx: u128) -> Policy {
    let choice = (0..instance.n)
        .map(|i| {
            let radix = (instance.partition[i] + 1) as u128;
            let digit = (idx % radix) as usize;
            idx /= radix;
            if digit == 0 {
                Action::Idle
            } else {
                Action::Input(digit - 1)
            }
        })
        .collect();
    Policy { choice }
}

fn evaluate_indexed(instance: &ProblemInstance, idx: u128) -> Option<(u128, DVector<f64>)> {
    let policy = policy_from_index(instance, idx);
    evaluate_policy(instance, &policy)
        .ok()
        .map(|p| (idx, p.into_inner()))
}

/// Independent oracle: enumerates every policy, evaluates each stable one,
/// and returns the elementwise-minimal cost vector together with a policy
/// attaining it. Deterministic: the elementwise minimum is computed with
/// exact comparisons and the achieving policy is the first in enumeration
/// order.
pub fn brute_force_solve(instance: &ProblemInstance, cap: u128) -> Result<SolveResult> {
    let count: u128 = instance
        .partition
        .iter()
        .map(|&mi| (mi + 1) as u128)
        .product();
    if count > cap {
        return Err(Error::TooLarge { count, cap });
    }
    let evaluated = enumerate_costs(instance, count as u64);
    if evaluated.is_empty() {
        return Err(Error::Infeasible);
    }
    let n = instance.n;
    let mut minimum = DVector::from_element(n, f64::INFINITY);
    for (_, cost) in &evaluated {
        for q in 0..n {
            if cost[q] < minimum[q] {
                minimum[q] = cost[q];
            }
        }
    }
    let attains = |cost: &DVector<f64>| {
        (0..n).all(|q| cost[q] <= minimum[q] + 1e-9 * minimum[q].abs().max(1.0))
    };
    let (idx, cost) = evaluated
        .iter()
        .find(|(_, c)| attains(c))
        .ok_or(Error::NoMinimizingPolicy)?;
    let policy = policy_from_index(instance, *idx as u128);
    let residual = (&bellman_apply(instance, cost) - cost).amax();
    Ok(SolveResult {
        p: CostVector::new(cost.clone())?,
        policy,
        iterations: evaluated.len(),
        residual,
    })
}

#[cfg(feature = "parallel")]
fn enumerate_costs(instance: &ProblemInstance, count: u64) -> Vec<(u64, DVector<f64>)> {
    use rayon::prelude::*;
    let mut out: Vec<(u64, DVector<f64>)> = (0..count)
        .into_par_iter()
        .filter_map(|idx| {
            evaluate_indexed(instance, idx as u128).map(|(i, c)| (i as u64, c))
        })
        .collect();
    // Restore enumeration order so tie-breaking matches the sequential path.
    out.sort_by_key(|(idx, _)| *idx);
    out
}

#[cfg(not(feature = "parallel"))]
fn enumerate_costs(instance: &ProblemInstance, count: u64) -> Vec<(u64, DVector<f64>)> {
    (0..count)
        .filter_map(|idx| evaluate_indexed(instance, idx as u128).map(|(i, c)| (i as u64, c)))
        .collect()
}

/// Sequential enumeration regardless of the `parallel` feature; used by the
/// benchmark suite for comparison.
pub fn brute_force_costs_sequential(
    instance: &ProblemInstance,
    cap: u128,
) -> Result<Vec<(u64, DVector<f64>)>> {
    let count: u128 = instance
        .partition
        .iter()
        .map(|&mi| (mi + 1) as u128)
        .product();
    if count > cap {
        return Err(Error::TooLarge { count, cap });
    }
    Ok((0..count as u64)
        .filter_map(|idx| evaluate_indexed(instance, idx as u128).map(|(i, c)| (i as u64, c)))
        .collect())
}

/// Parallel enumeration for benchmarking; only built with the feature.
#[cfg(feature = "parallel")]
pub fn brute_force_costs_parallel(
    instance: &ProblemInstance,
    cap: u128,
) -> Result<Vec<(u64, DVector<f64>)>> {
    let count: u128 = instance
        .partition
        .iter()
        .map(|&mi| (mi + 1) as u128)
        .product();
    if count > cap {
        return Err(Error::TooLarge { count, cap });
    }
    Ok(enumerate_costs(instance, count as u64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gen::{example_one, example_three_disposal_policy, scalar_instance};
    use nalgebra::DMatrix;

    #[test]
    fn bellman_at_zero_returns_s() {
        let inst = example_one();
        let out = bellman_apply(&inst, &DVector::zeros(3));
        assert_eq!(out, inst.s);
    }

    #[test]
    fn scalar_geometric_series() {
        // a = 0.5, s = 1, no inputs: p = 1 / (1 - 0.5) = 2.
        let inst = scalar_instance(0.5, 1.0);
        let res = solve(&inst).unwrap();
        assert!((res.p[0] - 2.0).abs() < 1e-8);
    }

    #[test]
    fn fixed_point_is_idempotent() {
        let inst = example_one();
        let res = solve(&inst).unwrap();
        let again = value_iterate(&inst, &res.p, VI_TOL, VI_MAX_ITER).unwrap();
        assert_eq!(again.iterations, 1);
        assert!(again.residual < 1e-9);
        let t = bellman_apply(&inst, &res.p);
        assert!((&t - res.p.as_vec()).amax() < 1e-9);
    }

    #[test]
    fn unstable_autonomous_system_does_not_converge() {
        let inst = scalar_instance(2.0, 1.0);
        let err = value_iterate(&inst, &CostVector::zeros(1), 1e-10, 200);
        assert!(matches!(err, Err(Error::NoConvergence { .. })));
    }

    #[test]
    fn value_iterate_matches_oracle_on_example_one() {
        let inst = example_one();
        let vi = solve(&inst).unwrap();
        let bf = brute_force_solve(&inst, ENUMERATION_CAP).unwrap();
        assert!((vi.p.as_vec() - bf.p.as_vec()).amax() < 1e-8);
    }

    #[test]
    fn extract_policy_all_idle_when_reduced_costs_nonnegative() {
        let inst = example_one();
        // At p = 0 every reduced cost equals r >= 0.
        let pol = extract_policy(&inst, &DVector::zeros(3));
        assert_eq!(pol, Policy::all_idle(3));
    }

    #[test]
    fn extract_policy_breaks_ties_to_lowest_index() {
        // Two identical input columns with equal negative reduced cost.
        let a = DMatrix::from_element(1, 1, 0.0);
        let b = DMatrix::from_row_slice(1, 2, &[-0.5, -0.5]);
        let inst = ProblemInstance::new(
            vec![2],
            a,
            b,
            DMatrix::identity(1, 1),
            DVector::from_element(1, 1.0),
            DVector::from_vec(vec![0.1, 0.1]),
            DVector::from_element(1, 1.0),
            None,
        )
        .unwrap();
        let pol = extract_policy(&inst, &DVector::from_element(1, 1.0));
        assert_eq!(pol.choice[0], Action::Input(0));
    }

    #[test]
    fn evaluate_policy_on_disposal_plant_is_stage_cost() {
        let (inst, k_hat) = example_three_disposal_policy(3);
        let exp = inst.expand_policy(&k_hat).unwrap();
        let p = evaluate_policy(&inst, &k_hat).unwrap();
        assert!((p.as_vec() - exp.stage_cost).amax() < 1e-10);
    }

    #[test]
    fn evaluate_policy_rejects_unstable_loop() {
        let inst = scalar_instance(1.5, 1.0);
        assert!(matches!(
            evaluate_policy(&inst, &Policy::all_idle(1)),
            Err(Error::UnstablePolicy { .. })
        ));
    }

    #[test]
    fn optimal_policy_evaluation_reproduces_fixed_point() {
        let inst = example_one();
        let res = solve(&inst).unwrap();
        let p_k = evaluate_policy(&inst, &res.policy).unwrap();
        assert!((p_k.as_vec() - res.p.as_vec()).amax() < 1e-8);
    }

    #[test]
    fn lp_form_holds_at_fixed_point_only() {
        let inst = example_one();
        let res = solve(&inst).unwrap();
        assert!(check_lp_form(&inst, res.p.as_vec(), 1e-8));
        assert!(!check_lp_form(&inst, &DVector::zeros(3), 1e-8));
        // h = s is feasible for the relaxed program but not a fixed point.
        assert!(check_lp_feasible(&inst, &inst.s, 1e-9));
        assert!(!check_lp_form(&inst, &inst.s, 1e-8));
    }

    #[test]
    fn oracle_requires_cap() {
        let inst = example_one();
        assert!(matches!(
            brute_force_solve(&inst, 3),
            Err(Error::TooLarge { count: 12, cap: 3 })
        ));
    }

    #[test]
    fn oracle_single_stable_policy() {
        let inst = scalar_instance(0.5, 1.0);
        let res = brute_force_solve(&inst, ENUMERATION_CAP).unwrap();
        assert_eq!(res.policy, Policy::all_idle(1));
        assert!((res.p[0] - 2.0).abs() < 1e-10);
    }
}
