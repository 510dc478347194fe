//! Stochastic shortest path form: the forward construction from a control
//! instance, its reverse, a direct value-iteration solver used for
//! cross-validation, and the truncated skeleton expansion for instances
//! whose closed loop is not substochastic.

use std::collections::BTreeMap;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::model::{check_assumption2, Action, ProblemInstance};
use crate::{Error, Result, TOL, VI_MAX_ITER};

/// One action of an SSP state: label, stage cost, and a dense transition
/// distribution over all states.
#[derive(Debug, Clone)]
pub struct SspAction {
    pub label: String,
    pub cost: f64,
    pub transition: DVector<f64>,
}

/// Finite SSP: ordered states, a goal subset, and per-state action lists.
#[derive(Debug, Clone)]
pub struct SspInstance {
    pub states: Vec<String>,
    pub goal: Vec<bool>,
    pub actions: Vec<Vec<SspAction>>,
}

impl SspInstance {
    pub fn n_states(&self) -> usize {
        self.states.len()
    }

    pub fn state_index(&self, name: &str) -> Option<usize> {
        self.states.iter().position(|s| s == name)
    }

    /// Checks unit transition sums, absorbing zero-cost goals, and strictly
    /// positive costs off the goal.
    pub fn validate(&self) -> Result<()> {
        let n = self.n_states();
        if self.goal.len() != n || self.actions.len() != n {
            return Err(Error::InvalidSsp("field lengths disagree".into()));
        }
        if !self.goal.iter().any(|&g| g) {
            return Err(Error::InvalidSsp("no goal state".into()));
        }
        for v in 0..n {
            if self.actions[v].is_empty() {
                return Err(Error::InvalidSsp(format!(
                    "state {} has no actions",
                    self.states[v]
                )));
            }
            for (a, act) in self.actions[v].iter().enumerate() {
                if act.transition.len() != n {
                    return Err(Error::InvalidSsp(format!(
                        "transition length mismatch at ({}, {})",
                        self.states[v], act.label
                    )));
                }
                if act.transition.iter().any(|&p| !(-TOL..=1.0 + TOL).contains(&p)) {
                    return Err(Error::InvalidSsp(format!(
                        "transition probability out of range at ({}, {})",
                        self.states[v], act.label
                    )));
                }
                let sum: f64 = act.transition.sum();
                if (sum - 1.0).abs() > TOL {
                    return Err(Error::InvalidSsp(format!(
                        "transition sum {} at ({}, {})",
                        sum, self.states[v], act.label
                    )));
                }
                if self.goal[v] {
                    if act.cost != 0.0 {
                        return Err(Error::InvalidSsp(format!(
                            "goal state {} has nonzero cost",
                            self.states[v]
                        )));
                    }
                    let goal_mass: f64 = (0..n)
                        .filter(|&w| self.goal[w])
                        .map(|w| act.transition[w])
                        .sum();
                    if (goal_mass - 1.0).abs() > TOL {
                        return Err(Error::InvalidSsp(format!(
                            "goal state {} is not absorbing",
                            self.states[v]
                        )));
                    }
                } else if act.cost <= 0.0 {
                    return Err(Error::ZeroCostNonGoal {
                        state: self.states[v].clone(),
                        action: a,
                    });
                }
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&SspFile::from_instance(self)).unwrap()
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: SspFile =
            serde_json::from_str(text).map_err(|e| Error::InvalidSsp(e.to_string()))?;
        file.into_instance()
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct SspActionFile {
    label: String,
    cost: f64,
    transition: BTreeMap<String, f64>,
}

/// On-disk SSP format: state names, goal names, and per-state action
/// records with sparse transitions keyed by state name.
#[derive(Debug, Serialize, Deserialize)]
pub struct SspFile {
    states: Vec<String>,
    goal: Vec<String>,
    actions: BTreeMap<String, Vec<SspActionFile>>,
}

impl SspFile {
    fn from_instance(ssp: &SspInstance) -> Self {
        let goal = ssp
            .states
            .iter()
            .zip(&ssp.goal)
            .filter(|(_, &g)| g)
            .map(|(s, _)| s.clone())
            .collect();
        let actions = ssp
            .states
            .iter()
            .zip(&ssp.actions)
            .map(|(name, acts)| {
                let recs = acts
                    .iter()
                    .map(|a| SspActionFile {
                        label: a.label.clone(),
                        cost: a.cost,
                        transition: a
                            .transition
                            .iter()
                            .enumerate()
                            .filter(|(_, &p)| p != 0.0)
                            .map(|(w, &p)| (ssp.states[w].clone(), p))
                            .collect(),
                    })
                    .collect();
                (name.clone(), recs)
            })
            .collect();
        SspFile {
            states: ssp.states.clone(),
            goal,
            actions,
        }
    }

    fn into_instance(self) -> Result<SspInstance> {
        let n = self.states.len();
        let index: BTreeMap<&str, usize> = self
            .states
            .iter()
            .enumerate()
            .map(|(i, s)| (s.as_str(), i))
            .collect();
        if index.len() != n {
            return Err(Error::InvalidSsp("duplicate state names".into()));
        }
        let mut goal = vec![false; n];
        for g in &self.goal {
            let &i = index
                .get(g.as_str())
                .ok_or_else(|| Error::InvalidSsp(format!("unknown goal state {g}")))?;
            goal[i] = true;
        }
        let mut actions = vec![Vec::new(); n];
        for (name, recs) in &self.actions {
            let &v = index
                .get(name.as_str())
                .ok_or_else(|| Error::InvalidSsp(format!("unknown state {name}")))?;
            for rec in recs {
                let mut t = DVector::zeros(n);
                for (target, &p) in &rec.transition {
                    let &w = index.get(target.as_str()).ok_or_else(|| {
                        Error::InvalidSsp(format!("unknown transition target {target}"))
                    })?;
                    t[w] += p;
                }
                actions[v].push(SspAction {
                    label: rec.label.clone(),
                    cost: rec.cost,
                    transition: t,
                });
            }
        }
        let ssp = SspInstance {
            states: self.states,
            goal,
            actions,
        };
        ssp.validate()?;
        Ok(ssp)
    }
}

fn action_column(instance: &ProblemInstance, v: usize, action: Action) -> (f64, DVector<f64>) {
    let mut col = instance.a.column(v).clone_owned();
    match action {
        Action::Idle => (0.0, col),
        Action::Input(j) => {
            col += instance.b_column(v, j);
            (instance.r_entry(v, j), col)
        }
    }
}

fn state_actions(instance: &ProblemInstance, v: usize) -> Vec<(String, Action)> {
    std::iter::once(("idle".to_string(), Action::Idle))
        .chain((0..instance.partition[v]).map(|j| (format!("u{}", j + 1), Action::Input(j))))
        .collect()
}

/// Rewrites a substochastic control instance as an SSP. Non-goal state `v`
/// becomes `x{v+1}` at the same index; the goal is appended last. Each state
/// gets the idle action plus one action per input column, with the missing
/// column mass routed to the goal.
pub fn to_ssp(instance: &ProblemInstance) -> Result<SspInstance> {
    if !instance.e_is_identity() {
        return Err(Error::ENotIdentity);
    }
    let a2 = check_assumption2(instance);
    if !a2.holds {
        let worst = a2.worst_column_sums.iter().cloned().fold(f64::MIN, f64::max);
        return Err(Error::NotSubstochastic { worst });
    }
    let n = instance.n;
    let mut states: Vec<String> = (0..n).map(|v| format!("x{}", v + 1)).collect();
    states.push("goal".to_string());
    let mut goal = vec![false; n + 1];
    goal[n] = true;
    let mut actions: Vec<Vec<SspAction>> = Vec::with_capacity(n + 1);
    for v in 0..n {
        let acts = state_actions(instance, v)
            .into_iter()
            .map(|(label, action)| {
                let (r, col) = action_column(instance, v, action);
                let mut t = DVector::zeros(n + 1);
                for w in 0..n {
                    t[w] = col[w];
                }
                t[n] = (1.0 - col.sum()).max(0.0);
                SspAction {
                    label,
                    cost: instance.s[v] + r,
                    transition: t,
                }
            })
            .collect();
        actions.push(acts);
    }
    let mut stay = DVector::zeros(n + 1);
    stay[n] = 1.0;
    actions.push(vec![SspAction {
        label: "stay".to_string(),
        cost: 0.0,
        transition: stay,
    }]);
    Ok(SspInstance {
        states,
        goal,
        actions,
    })
}

/// Result of [`from_ssp`]: the control instance plus the original SSP index
/// of each control state.
#[derive(Debug, Clone)]
pub struct FromSsp {
    pub instance: ProblemInstance,
    pub state_map: Vec<usize>,
}

/// Rewrites any valid SSP as a control instance. Per state the cheapest
/// action (lowest index on ties) becomes the drift column of `A` with its
/// cost as `s`; every other action contributes one input column holding the
/// transition and cost differences, so `r >= 0` by construction. Goal states
/// are collapsed and dropped; `x0` is the indicator of the first non-goal
/// state.
pub fn from_ssp(ssp: &SspInstance) -> Result<FromSsp> {
    ssp.validate()?;
    let state_map: Vec<usize> = (0..ssp.n_states()).filter(|&v| !ssp.goal[v]).collect();
    let n = state_map.len();
    if n == 0 {
        return Err(Error::InvalidSsp("no non-goal states".into()));
    }
    let restrict = |t: &DVector<f64>| -> DVector<f64> {
        DVector::from_fn(n, |w, _| t[state_map[w]])
    };
    let mut partition = Vec::with_capacity(n);
    let mut a = nalgebra::DMatrix::zeros(n, n);
    let mut b_cols: Vec<DVector<f64>> = Vec::new();
    let mut s = DVector::zeros(n);
    let mut r_entries: Vec<f64> = Vec::new();
    for (new, &old) in state_map.iter().enumerate() {
        let acts = &ssp.actions[old];
        let base = acts
            .iter()
            .enumerate()
            .min_by(|(_, x), (_, y)| x.cost.partial_cmp(&y.cost).unwrap())
            .map(|(i, _)| i)
            .unwrap();
        let base_col = restrict(&acts[base].transition);
        a.set_column(new, &base_col);
        s[new] = acts[base].cost;
        partition.push(acts.len() - 1);
        for (i, act) in acts.iter().enumerate() {
            if i == base {
                continue;
            }
            b_cols.push(restrict(&act.transition) - &base_col);
            r_entries.push(act.cost - acts[base].cost);
        }
    }
    let m = b_cols.len();
    let mut b = nalgebra::DMatrix::zeros(n, m);
    for (c, col) in b_cols.iter().enumerate() {
        b.set_column(c, col);
    }
    let mut x0 = DVector::zeros(n);
    x0[0] = 1.0;
    let instance = ProblemInstance::new(
        partition,
        a,
        b,
        nalgebra::DMatrix::identity(n, n),
        s,
        DVector::from_vec(r_entries),
        x0,
        None,
    )?;
    Ok(FromSsp {
        instance,
        state_map,
    })
}

/// Value iteration output on an SSP.
#[derive(Debug, Clone)]
pub struct SspSolveResult {
    pub j: DVector<f64>,
    /// Chosen action index per state.
    pub policy: Vec<usize>,
    pub iterations: usize,
    pub residual: f64,
}

/// Value iteration `J(v) = min_a C(v,a) + T(v,a)'J` with `J = 0` pinned on
/// the goal set.
pub fn solve_ssp(ssp: &SspInstance, tol: f64) -> Result<SspSolveResult> {
    ssp.validate()?;
    let n = ssp.n_states();
    let mut j = DVector::zeros(n);
    let mut residual = f64::INFINITY;
    for it in 0..VI_MAX_ITER {
        let mut next = DVector::zeros(n);
        for v in 0..n {
            if ssp.goal[v] {
                continue;
            }
            next[v] = ssp.actions[v]
                .iter()
                .map(|a| a.cost + a.transition.dot(&j))
                .fold(f64::INFINITY, f64::min);
        }
        residual = (&next - &j).amax();
        j = next;
        if residual <= tol {
            let policy = (0..n)
                .map(|v| {
                    ssp.actions[v]
                        .iter()
                        .enumerate()
                        .min_by(|(_, x), (_, y)| {
                            (x.cost + x.transition.dot(&j))
                                .partial_cmp(&(y.cost + y.transition.dot(&j)))
                                .unwrap()
                        })
                        .map(|(i, _)| i)
                        .unwrap()
                })
                .collect();
            return Ok(SspSolveResult {
                j,
                policy,
                iterations: it + 1,
                residual,
            });
        }
        if !residual.is_finite() {
            break;
        }
    }
    Err(Error::NoConvergence {
        max_iter: VI_MAX_ITER,
        residual,
    })
}

/// Default truncation depth for [`expand_skeleton`].
pub const DEFAULT_K_MAX: usize = 16;

/// Truncated skeleton of a control instance: level-`k` copies `x{v}#k{k}`
/// of each state carry `k` times the base cost, and super-stochastic
/// transition mass is spread over levels so that probabilities sum to one.
#[derive(Debug, Clone)]
pub struct SkeletonSsp {
    pub ssp: SspInstance,
    pub k_max: usize,
    pub n_base: usize,
    /// Whether any expansion was needed; if not, `ssp` is the plain
    /// single-level conversion.
    pub expanded: bool,
    /// Per SSP state: some incoming-action target level was clamped at
    /// `k_max`.
    pub clamped: Vec<bool>,
    /// Total probability mass whose target level was clamped.
    pub truncation_mass: f64,
    /// Worst per-target deviation of the level allocation from the original
    /// mass (exact up to rounding).
    pub eq4_residual: f64,
    /// Worst deviation of redefined-action probability sums from one.
    pub eq5_residual: f64,
}

impl SkeletonSsp {
    /// SSP index of the level-`k` copy of base state `v` (1-based `k`).
    pub fn state_index(&self, v: usize, k: usize) -> usize {
        if self.expanded {
            v * self.k_max + (k - 1)
        } else {
            assert_eq!(k, 1);
            v
        }
    }

    pub fn goal_index(&self) -> usize {
        self.ssp.n_states() - 1
    }
}

/// Expands a control instance into the truncated skeleton SSP. When the
/// instance is already substochastic this is the plain conversion. Otherwise
/// every state is replicated at levels `1..=k_max`; the mass `t_w` of a
/// super-stochastic action with total mass `m > 1` is reallocated to the
/// level-`floor(m)` and `level-ceil(m)` copies of `w` with budget `t_w / m`
/// and level weights of mean `m`, which keeps both the expected level mass
/// and the unit probability sum exact. Level-`k` copies rescale target
/// levels by `k` and costs by `k`; target levels beyond `k_max` are clamped
/// there and recorded in `truncation_mass`.
pub fn expand_skeleton(instance: &ProblemInstance, k_max: usize) -> Result<SkeletonSsp> {
    if !instance.e_is_identity() {
        return Err(Error::ENotIdentity);
    }
    if check_assumption2(instance).holds {
        let ssp = to_ssp(instance)?;
        let n_states = ssp.n_states();
        return Ok(SkeletonSsp {
            ssp,
            k_max,
            n_base: instance.n,
            expanded: false,
            clamped: vec![false; n_states],
            truncation_mass: 0.0,
            eq4_residual: 0.0,
            eq5_residual: 0.0,
        });
    }
    let n = instance.n;
    let n_states = n * k_max + 1;
    let goal = n_states - 1;
    let mut states: Vec<String> = Vec::with_capacity(n_states);
    for v in 0..n {
        for k in 1..=k_max {
            states.push(format!("x{}#k{}", v + 1, k));
        }
    }
    states.push("goal".to_string());
    let mut goal_flags = vec![false; n_states];
    goal_flags[goal] = true;
    let index = |v: usize, k: usize| v * k_max + (k - 1);

    let mut actions: Vec<Vec<SspAction>> = vec![Vec::new(); n_states];
    let mut clamped = vec![false; n_states];
    let mut truncation_mass = 0.0;
    let mut eq4 = 0.0_f64;
    let mut eq5 = 0.0_f64;

    for v in 0..n {
        for (label, action) in state_actions(instance, v) {
            let (r, col) = action_column(instance, v, action);
            let cost = instance.s[v] + r;
            let mass: f64 = col.sum();
            // Base-level allocation: (target, level, probability) triples
            // plus direct goal mass.
            let mut alloc: Vec<(usize, usize, f64)> = Vec::new();
            let mut goal_mass = 0.0;
            if mass <= 1.0 + TOL {
                for w in 0..n {
                    if col[w] != 0.0 {
                        alloc.push((w, 1, col[w]));
                    }
                }
                goal_mass = (1.0 - mass).max(0.0);
            } else {
                let lo = mass.floor();
                let hi = mass.ceil();
                for w in 0..n {
                    if col[w] == 0.0 {
                        continue;
                    }
                    let budget = col[w] / mass;
                    if lo == hi {
                        alloc.push((w, lo as usize, budget));
                    } else {
                        let weight_lo = hi - mass;
                        alloc.push((w, lo as usize, budget * weight_lo));
                        alloc.push((w, hi as usize, budget * (1.0 - weight_lo)));
                    }
                }
                for w in 0..n {
                    if col[w] == 0.0 {
                        continue;
                    }
                    let got: f64 = alloc
                        .iter()
                        .filter(|&&(t, _, _)| t == w)
                        .map(|&(_, k, p)| k as f64 * p)
                        .sum();
                    eq4 = eq4.max((got - col[w]).abs());
                }
                let total: f64 = alloc.iter().map(|&(_, _, p)| p).sum();
                eq5 = eq5.max((total - 1.0).abs());
            }
            for k in 1..=k_max {
                let mut t = DVector::zeros(n_states);
                t[goal] = goal_mass;
                for &(w, level, p) in &alloc {
                    let mut target_level = k * level;
                    if target_level > k_max {
                        target_level = k_max;
                        truncation_mass += p;
                        clamped[index(v, k)] = true;
                    }
                    t[index(w, target_level)] += p;
                }
                actions[index(v, k)].push(SspAction {
                    label: label.clone(),
                    cost: k as f64 * cost,
                    transition: t,
                });
            }
        }
    }
    let mut stay = DVector::zeros(n_states);
    stay[goal] = 1.0;
    actions[goal].push(SspAction {
        label: "stay".to_string(),
        cost: 0.0,
        transition: stay,
    });

    Ok(SkeletonSsp {
        ssp: SspInstance {
            states,
            goal: goal_flags,
            actions,
        },
        k_max,
        n_base: n,
        expanded: true,
        clamped,
        truncation_mass,
        eq4_residual: eq4,
        eq5_residual: eq5,
    })
}

/// Scaling report: how far level values deviate from `k` times the base
/// value, over unclamped levels `k <= k_max / 2`.
#[derive(Debug, Clone, Serialize)]
pub struct ScalingReport {
    pub max_rel_dev: f64,
    pub levels_checked: usize,
    /// Deviation per checked level `k` (max over base states).
    pub per_level: Vec<f64>,
}

/// Solves the truncated skeleton and compares `J*(v_k)` against
/// `k J*(v_1)`, reporting the maximal relative deviation
/// `|J*(v_k) - k J*(v_1)| / max(1, k J*(v_1))` over unclamped levels with
/// `k <= k_max / 2`.
pub fn check_prop2_scaling(skeleton: &SkeletonSsp, tol: f64) -> Result<ScalingReport> {
    let sol = solve_ssp(&skeleton.ssp, tol)?;
    if !skeleton.expanded {
        return Ok(ScalingReport {
            max_rel_dev: 0.0,
            levels_checked: 1,
            per_level: vec![0.0],
        });
    }
    let k_top = skeleton.k_max / 2;
    let mut per_level = vec![0.0_f64; k_top];
    for v in 0..skeleton.n_base {
        let j1 = sol.j[skeleton.state_index(v, 1)];
        for k in 1..=k_top {
            let idx = skeleton.state_index(v, k);
            if skeleton.clamped[idx] {
                continue;
            }
            let target = k as f64 * j1;
            let dev = (sol.j[idx] - target).abs() / target.abs().max(1.0);
            per_level[k - 1] = per_level[k - 1].max(dev);
        }
    }
    let max_rel_dev = per_level.iter().cloned().fold(0.0, f64::max);
    Ok(ScalingReport {
        max_rel_dev,
        levels_checked: k_top,
        per_level,
    })
}
