//! Heuristic search over a growing subset `S` of the state space: local
//! dynamics with absorbing outside states, the local Bellman fixed point
//! with frozen boundary values, absorption limits, priority selection, and
//! the optional certification of dominant actions.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::heuristics::{init_heuristics, HeuristicPair};
use crate::model::{spectral_radius_nonneg, Action, Policy, ProblemInstance};
use crate::{Error, Result, TOL, VI_MAX_ITER, VI_TOL};

/// Which bound a local solve targets. Outside the search area the upper
/// bound freezes the initial policy's actions and the lower bound freezes
/// the idle action.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BoundMode {
    Upper,
    Lower,
}

/// Local dynamics `A_S`: columns of `A` with index outside `S` replaced by
/// unit vectors, so that outside states absorb.
pub fn local_dynamics(instance: &ProblemInstance, in_s: &[bool]) -> DMatrix<f64> {
    let n = instance.n;
    DMatrix::from_fn(n, n, |p, q| {
        if in_s[q] {
            instance.a[(p, q)]
        } else if p == q {
            1.0
        } else {
            0.0
        }
    })
}

fn outside_z(instance: &ProblemInstance, i: usize, g: &DVector<f64>, mode: BoundMode) -> f64 {
    match mode {
        BoundMode::Lower => 0.0,
        BoundMode::Upper => match instance
            .k_hat
            .as_ref()
            .expect("upper mode requires k_hat")
            .choice[i]
        {
            Action::Idle => 0.0,
            Action::Input(j) => instance.r_entry(i, j) + instance.b_column(i, j).dot(g),
        },
    }
}

fn inside_z(
    instance: &ProblemInstance,
    i: usize,
    g: &DVector<f64>,
    fixed: Option<Action>,
) -> (f64, Action) {
    if let Some(action) = fixed {
        let z = match action {
            Action::Idle => 0.0,
            Action::Input(j) => (instance.r_entry(i, j) + instance.b_column(i, j).dot(g)).min(0.0),
        };
        return (z, action);
    }
    let mut z = 0.0_f64;
    let mut best = Action::Idle;
    for (j, c) in instance.block(i).enumerate() {
        let v = instance.r[c] + instance.b.column(c).dot(g);
        if v < z {
            z = v;
            best = Action::Input(j);
        }
    }
    (z, best)
}

/// Solves the local fixed point
/// `g = I_S s + A_S' g + I_S min_{K in K_S}[K'(r + B'g)]`
/// by value iteration with entries outside `S` frozen to the boundary
/// values. Returns the solution and the achieving full policy (outside
/// blocks fixed per mode). `fixed` pins certified actions for blocks in `S`.
#[allow(clippy::too_many_arguments)]
pub fn local_solve(
    instance: &ProblemInstance,
    in_s: &[bool],
    boundary: &DVector<f64>,
    mode: BoundMode,
    warm: &DVector<f64>,
    fixed: Option<&[Option<Action>]>,
    tol: f64,
    max_iter: usize,
) -> Result<(DVector<f64>, Policy)> {
    let n = instance.n;
    if mode == BoundMode::Upper && instance.k_hat.is_none() {
        return Err(Error::MissingInitialPolicy);
    }
    let mut g = warm.clone();
    for i in 0..n {
        if !in_s[i] {
            g[i] = boundary[i];
        }
    }
    let mut residual = f64::INFINITY;
    for _ in 0..max_iter {
        let mut z = vec![0.0_f64; n];
        for i in 0..n {
            z[i] = if in_s[i] {
                inside_z(instance, i, &g, fixed.and_then(|f| f[i])).0
            } else {
                outside_z(instance, i, &g, mode)
            };
        }
        let mut next = g.clone();
        residual = 0.0;
        for i in 0..n {
            if !in_s[i] {
                continue;
            }
            let mut v = instance.s[i] + instance.a.column(i).dot(&g);
            for b in 0..n {
                v += z[b] * instance.e[(b, i)];
            }
            residual = residual.max((v - g[i]).abs());
            next[i] = v;
        }
        g = next;
        if residual <= tol {
            let choice = (0..n)
                .map(|i| {
                    if in_s[i] {
                        inside_z(instance, i, &g, fixed.and_then(|f| f[i])).1
                    } else {
                        match mode {
                            BoundMode::Lower => Action::Idle,
                            BoundMode::Upper => {
                                instance.k_hat.as_ref().unwrap().choice[i]
                            }
                        }
                    }
                })
                .collect();
            return Ok((g, Policy { choice }));
        }
        if !residual.is_finite() {
            break;
        }
    }
    Err(Error::NoConvergence { max_iter, residual })
}

/// Limit distribution of the local closed loop: mass in `S` drains into the
/// absorbing outside states.
#[derive(Debug, Clone)]
pub struct AbsorptionLimit {
    /// Zero on `S`, accumulated mass outside.
    pub x_inf: DVector<f64>,
    /// True when the inside block was not Schur stable and the limit was
    /// approximated by a truncated power iteration.
    pub truncated: bool,
}

fn closed_loop_blocks(
    instance: &ProblemInstance,
    in_s: &[bool],
    policy: &Policy,
) -> Result<(Vec<usize>, Vec<usize>, DMatrix<f64>, DMatrix<f64>)> {
    let exp = instance.expand_policy(policy)?;
    let m = exp.closed_loop;
    let inside: Vec<usize> = (0..instance.n).filter(|&i| in_s[i]).collect();
    let outside: Vec<usize> = (0..instance.n).filter(|&i| !in_s[i]).collect();
    let q = DMatrix::from_fn(inside.len(), inside.len(), |p, c| {
        m[(inside[p], inside[c])]
    });
    let rq = DMatrix::from_fn(outside.len(), inside.len(), |p, c| {
        m[(outside[p], inside[c])]
    });
    Ok((inside, outside, q, rq))
}

/// Cap on the truncated power iteration used when the inside block is not
/// Schur stable under the optimistic policy.
pub const ABSORPTION_ITER_CAP: usize = 10_000;

/// Computes `lim_k (A_S + BK)^k x0` by solving the absorbing-chain system:
/// the mass absorbed at outside state `o` is
/// `x0[o] + sum over inside flow M[o, S] (I - M[S, S])^{-1} x0[S]`.
/// Falls back to a truncated power iteration when the inside block has
/// spectral radius at or above one.
pub fn absorption_limit(
    instance: &ProblemInstance,
    in_s: &[bool],
    policy: &Policy,
) -> Result<AbsorptionLimit> {
    let (inside, outside, q, rq) = closed_loop_blocks(instance, in_s, policy)?;
    let x0_s = DVector::from_fn(inside.len(), |p, _| instance.x0[inside[p]]);
    let rho = spectral_radius_nonneg(&q, 500);
    let mut x_inf = DVector::zeros(instance.n);
    for &o in &outside {
        x_inf[o] = instance.x0[o];
    }
    if rho < 1.0 - TOL {
        let sys = DMatrix::identity(inside.len(), inside.len()) - &q;
        let visits = sys
            .lu()
            .solve(&x0_s)
            .ok_or(Error::UnstablePolicy { rho })?;
        let absorbed = &rq * &visits;
        for (p, &o) in outside.iter().enumerate() {
            x_inf[o] += absorbed[p];
        }
        Ok(AbsorptionLimit {
            x_inf,
            truncated: false,
        })
    } else {
        let mut xs = x0_s;
        for _ in 0..ABSORPTION_ITER_CAP {
            let leaked = &rq * &xs;
            for (p, &o) in outside.iter().enumerate() {
                x_inf[o] += leaked[p];
            }
            xs = &q * &xs;
            if xs.amax() < 1e-14 {
                break;
            }
        }
        Ok(AbsorptionLimit {
            x_inf,
            truncated: true,
        })
    }
}

/// Power-iteration route to the same limit; the linear-solve route above is
/// checked against it in tests.
pub fn absorption_limit_iterative(
    instance: &ProblemInstance,
    in_s: &[bool],
    policy: &Policy,
    steps: usize,
) -> Result<DVector<f64>> {
    let (inside, outside, q, rq) = closed_loop_blocks(instance, in_s, policy)?;
    let mut xs = DVector::from_fn(inside.len(), |p, _| instance.x0[inside[p]]);
    let mut x_inf = DVector::zeros(instance.n);
    for &o in &outside {
        x_inf[o] = instance.x0[o];
    }
    for _ in 0..steps {
        let leaked = &rq * &xs;
        for (p, &o) in outside.iter().enumerate() {
            x_inf[o] += leaked[p];
        }
        xs = &q * &xs;
    }
    Ok(x_inf)
}

/// Priority rule: the outside state maximizing
/// `(h_upper_i - h_lower_i)(x_up_i + x_low_i)`, ties to the lowest index.
pub fn select_next(
    in_s: &[bool],
    pair: &HeuristicPair,
    x_up: &DVector<f64>,
    x_low: &DVector<f64>,
) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for i in 0..in_s.len() {
        if in_s[i] {
            continue;
        }
        let score = (pair.h_upper[i] - pair.h_lower[i]) * (x_up[i] + x_low[i]);
        match best {
            Some((_, b)) if score <= b => {}
            _ => best = Some((i, score)),
        }
    }
    best.map(|(i, _)| i)
}

/// Per-state certification of actions that dominate every alternative for
/// all cost vectors in the box `[g_lower, g_upper]`. The box maximum of a
/// linear form splits into positive parts against the upper corner and
/// negative parts against the lower corner.
pub fn fixable_actions(
    instance: &ProblemInstance,
    g_lower: &DVector<f64>,
    g_upper: &DVector<f64>,
) -> Vec<Option<Action>> {
    let n = instance.n;
    // Worst-case (maximal) value over the box of r_a + B_a'g minus the same
    // for the alternative, as a closed form.
    let box_max = |delta: &DVector<f64>| -> f64 {
        (0..n)
            .map(|q| {
                if delta[q] >= 0.0 {
                    delta[q] * g_upper[q]
                } else {
                    delta[q] * g_lower[q]
                }
            })
            .sum()
    };
    let action_column = |i: usize, a: Action| -> (f64, DVector<f64>) {
        match a {
            Action::Idle => (0.0, DVector::zeros(n)),
            Action::Input(j) => (
                instance.r_entry(i, j),
                instance.b_column(i, j).clone_owned(),
            ),
        }
    };
    (0..n)
        .map(|i| {
            let candidates: Vec<Action> = std::iter::once(Action::Idle)
                .chain((0..instance.partition[i]).map(Action::Input))
                .collect();
            candidates.iter().copied().find(|&c| {
                let (rc, bc) = action_column(i, c);
                candidates.iter().all(|&d| {
                    if c == d {
                        return true;
                    }
                    let (rd, bd) = action_column(i, d);
                    rc - rd + box_max(&(&bc - &bd)) <= 0.0
                })
            })
        })
        .collect()
}

/// Configuration for [`run_search`].
#[derive(Debug, Clone)]
pub struct SearchConfig {
    /// Termination threshold on the bound ratio, at least 1.
    pub gamma: f64,
    pub tol: f64,
    pub max_iter: usize,
    /// Lock in actions certified dominant within the current bounds.
    pub fix_actions: bool,
    /// Keep per-iteration state snapshots for export.
    pub record_snapshots: bool,
}

impl SearchConfig {
    pub fn new(gamma: f64) -> Self {
        SearchConfig {
            gamma,
            tol: VI_TOL,
            max_iter: VI_MAX_ITER,
            fix_actions: false,
            record_snapshots: false,
        }
    }
}

/// One trace row per loop iteration: bound totals after the local solves and
/// the state selected for inclusion.
#[derive(Debug, Clone, Serialize)]
pub struct TraceRow {
    pub iteration: usize,
    pub cardinality_s: usize,
    pub upper_total: f64,
    pub lower_total: f64,
    /// 0-based selected state; absent on the final iteration.
    pub selected_state: Option<usize>,
    /// True when the lower-mode absorption limit had to be truncated.
    pub lower_truncated: bool,
}

/// Per-iteration snapshot of the bound vectors.
#[derive(Debug, Clone)]
pub struct Snapshot {
    pub iteration: usize,
    pub in_s: Vec<bool>,
    pub g_upper: Vec<f64>,
    pub g_lower: Vec<f64>,
}

/// Final state of a search run.
#[derive(Debug, Clone)]
pub struct SearchOutcome {
    pub in_s: Vec<bool>,
    pub g_upper: DVector<f64>,
    pub g_lower: DVector<f64>,
    pub policy_upper: Policy,
    pub policy_lower: Policy,
    pub heuristics: HeuristicPair,
    pub iterations: usize,
    pub trace: Vec<TraceRow>,
    pub snapshots: Vec<Snapshot>,
}

impl SearchOutcome {
    pub fn upper_total(&self, instance: &ProblemInstance) -> f64 {
        self.g_upper.dot(&instance.x0)
    }

    pub fn lower_total(&self, instance: &ProblemInstance) -> f64 {
        self.g_lower.dot(&instance.x0)
    }

    pub fn trace_csv(&self) -> String {
        let mut out =
            String::from("iteration,cardinality_S,upper_total,lower_total,selected_state\n");
        for row in &self.trace {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                row.iteration,
                row.cardinality_s,
                row.upper_total,
                row.lower_total,
                row.selected_state
                    .map(|i| (i + 1).to_string())
                    .unwrap_or_default()
            ));
        }
        out
    }

    /// Per-state snapshot CSV for one recorded iteration.
    pub fn snapshot_csv(&self, snapshot: &Snapshot, p: Option<&DVector<f64>>) -> String {
        let mut out = String::from("state,in_S,g_upper,g_lower,h_upper,h_lower,p\n");
        for i in 0..self.heuristics.h_upper.len() {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                i + 1,
                if snapshot.in_s[i] { 1 } else { 0 },
                snapshot.g_upper[i],
                snapshot.g_lower[i],
                self.heuristics.h_upper[i],
                self.heuristics.h_lower[i],
                p.map(|p| p[i].to_string()).unwrap_or_default()
            ));
        }
        out
    }
}

/// Runs the heuristic search until the certified ratio of bound totals drops
/// to `gamma`. The search space starts at the support of `x0` and grows by
/// one state per iteration; on termination the upper total is at most
/// `gamma` times the optimal value.
pub fn run_search(instance: &ProblemInstance, config: &SearchConfig) -> Result<SearchOutcome> {
    let n = instance.n;
    if config.gamma < 1.0 {
        return Err(Error::InvalidInstance("gamma must be at least 1".into()));
    }
    if instance.x0.iter().all(|&v| v <= 0.0) {
        return Err(Error::InvalidInstance("x0 must be nonzero".into()));
    }
    if instance.x0.iter().any(|&v| v < 0.0) {
        return Err(Error::InvalidInstance("x0 must be nonnegative".into()));
    }
    let pair = init_heuristics(instance)?;
    let mut in_s: Vec<bool> = instance.x0.iter().map(|&v| v > 0.0).collect();
    let mut g_upper = pair.h_upper.clone();
    let mut g_lower = instance.s.clone();
    let mut policy_upper = instance.k_hat.clone().unwrap();
    let mut policy_lower = Policy::all_idle(n);
    let mut fixed: Vec<Option<Action>> = vec![None; n];
    let mut trace = Vec::new();
    let mut snapshots = Vec::new();
    let mut iteration = 0;

    loop {
        let upper_total = g_upper.dot(&instance.x0);
        let lower_total = g_lower.dot(&instance.x0);
        if upper_total <= config.gamma * lower_total * (1.0 + 1e-12) {
            break;
        }
        iteration += 1;
        let fixed_ref = if config.fix_actions {
            Some(fixed.as_slice())
        } else {
            None
        };
        let (gu, pu) = local_solve(
            instance,
            &in_s,
            &pair.h_upper,
            BoundMode::Upper,
            &g_upper,
            fixed_ref,
            config.tol,
            config.max_iter,
        )?;
        let (gl, pl) = local_solve(
            instance,
            &in_s,
            &pair.h_lower,
            BoundMode::Lower,
            &g_lower,
            fixed_ref,
            config.tol,
            config.max_iter,
        )?;
        g_upper = gu;
        g_lower = gl;
        policy_upper = pu;
        policy_lower = pl;
        if config.fix_actions {
            let certified = fixable_actions(instance, &g_lower, &g_upper);
            for i in 0..n {
                if in_s[i] && fixed[i].is_none() {
                    fixed[i] = certified[i];
                }
            }
        }
        if config.record_snapshots {
            snapshots.push(Snapshot {
                iteration,
                in_s: in_s.clone(),
                g_upper: g_upper.iter().cloned().collect(),
                g_lower: g_lower.iter().cloned().collect(),
            });
        }
        let upper_total = g_upper.dot(&instance.x0);
        let lower_total = g_lower.dot(&instance.x0);
        let cardinality = in_s.iter().filter(|&&b| b).count();
        if cardinality == n {
            // Full state space: the local equation is the global Bellman
            // equation and both bounds coincide with the fixed point.
            trace.push(TraceRow {
                iteration,
                cardinality_s: cardinality,
                upper_total,
                lower_total,
                selected_state: None,
                lower_truncated: false,
            });
            break;
        }
        let up = absorption_limit(instance, &in_s, &policy_upper)?;
        let low = absorption_limit(instance, &in_s, &policy_lower)?;
        let next = select_next(&in_s, &pair, &up.x_inf, &low.x_inf)
            .expect("outside states remain");
        trace.push(TraceRow {
            iteration,
            cardinality_s: cardinality,
            upper_total,
            lower_total,
            selected_state: Some(next),
            lower_truncated: low.truncated || up.truncated,
        });
        in_s[next] = true;
    }

    Ok(SearchOutcome {
        in_s,
        g_upper,
        g_lower,
        policy_upper,
        policy_lower,
        heuristics: pair,
        iterations: iteration,
        trace,
        snapshots,
    })
}
