//! Problem data for the positive-system optimal control problem, validation
//! of the standing assumptions, and the constraint normalization to `E = I`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::{Error, Result, TOL};

/// Condition-number threshold above which `E` is treated as singular.
pub const E_COND_LIMIT: f64 = 1e12;

/// Per-state action: either no actuation or full actuation of one input
/// column of the block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Action {
    Idle,
    /// 0-based column index within the state's input block.
    Input(usize),
}

/// One action choice per state. Expanding a policy yields a feedback matrix
/// `K` with `1'K_i = E_i'` (chosen input column fully actuated) or
/// `1'K_i = 0` (idle) per block.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Policy {
    pub choice: Vec<Action>,
}

impl Policy {
    pub fn all_idle(n: usize) -> Self {
        Policy {
            choice: vec![Action::Idle; n],
        }
    }

    /// Encodes as 0-based indices with -1 for idle (the file format).
    pub fn to_indices(&self) -> Vec<i64> {
        self.choice
            .iter()
            .map(|a| match a {
                Action::Idle => -1,
                Action::Input(j) => *j as i64,
            })
            .collect()
    }

    pub fn from_indices(idx: &[i64]) -> Self {
        Policy {
            choice: idx
                .iter()
                .map(|&j| {
                    if j < 0 {
                        Action::Idle
                    } else {
                        Action::Input(j as usize)
                    }
                })
                .collect(),
        }
    }
}

/// A nonnegative linear cost functional `p'x`.
#[derive(Debug, Clone, PartialEq)]
pub struct CostVector(DVector<f64>);

impl CostVector {
    pub fn new(p: DVector<f64>) -> Result<Self> {
        if p.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInstance("cost vector has non-finite entry".into()));
        }
        if p.iter().any(|&v| v < -TOL) {
            return Err(Error::InvalidInstance("cost vector has negative entry".into()));
        }
        Ok(CostVector(p))
    }

    pub fn zeros(n: usize) -> Self {
        CostVector(DVector::zeros(n))
    }

    pub fn as_vec(&self) -> &DVector<f64> {
        &self.0
    }

    pub fn into_inner(self) -> DVector<f64> {
        self.0
    }
}

impl std::ops::Deref for CostVector {
    type Target = DVector<f64>;
    fn deref(&self) -> &DVector<f64> {
        &self.0
    }
}

/// The full problem tuple `(A, B, E, s, r, x0)` with the input partition and
/// an optional stabilizing initial policy.
#[derive(Debug, Clone, PartialEq)]
pub struct ProblemInstance {
    pub n: usize,
    /// Number of input columns per state; `m_i = 0` means pure drift.
    pub partition: Vec<usize>,
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub e: DMatrix<f64>,
    pub s: DVector<f64>,
    pub r: DVector<f64>,
    pub x0: DVector<f64>,
    pub k_hat: Option<Policy>,
    /// Cumulative block offsets into the columns of `B` (length `n + 1`).
    offsets: Vec<usize>,
}

impl ProblemInstance {
    /// Builds an instance, checking dimension consistency only. Sign
    /// constraints and the standing assumptions are reported by [`validate`].
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        partition: Vec<usize>,
        a: DMatrix<f64>,
        b: DMatrix<f64>,
        e: DMatrix<f64>,
        s: DVector<f64>,
        r: DVector<f64>,
        x0: DVector<f64>,
        k_hat: Option<Policy>,
    ) -> Result<Self> {
        let n = partition.len();
        let m: usize = partition.iter().sum();
        if a.nrows() != n || a.ncols() != n {
            return Err(Error::Dimension(format!(
                "A is {}x{}, expected {n}x{n}",
                a.nrows(),
                a.ncols()
            )));
        }
        if b.nrows() != n || b.ncols() != m {
            return Err(Error::Dimension(format!(
                "B is {}x{}, expected {n}x{m}",
                b.nrows(),
                b.ncols()
            )));
        }
        if e.nrows() != n || e.ncols() != n {
            return Err(Error::Dimension(format!(
                "E is {}x{}, expected {n}x{n}",
                e.nrows(),
                e.ncols()
            )));
        }
        if s.len() != n {
            return Err(Error::Dimension(format!("s has length {}, expected {n}", s.len())));
        }
        if r.len() != m {
            return Err(Error::Dimension(format!("r has length {}, expected {m}", r.len())));
        }
        if x0.len() != n {
            return Err(Error::Dimension(format!("x0 has length {}, expected {n}", x0.len())));
        }
        if let Some(pol) = &k_hat {
            if pol.choice.len() != n {
                return Err(Error::Dimension(format!(
                    "k_hat has length {}, expected {n}",
                    pol.choice.len()
                )));
            }
            for (i, a) in pol.choice.iter().enumerate() {
                if let Action::Input(j) = a {
                    if *j >= partition[i] {
                        return Err(Error::BadAction {
                            state: i,
                            action: *j,
                            arity: partition[i],
                        });
                    }
                }
            }
        }
        let mut offsets = Vec::with_capacity(n + 1);
        let mut acc = 0;
        offsets.push(0);
        for &mi in &partition {
            acc += mi;
            offsets.push(acc);
        }
        Ok(ProblemInstance {
            n,
            partition,
            a,
            b,
            e,
            s,
            r,
            x0,
            k_hat,
            offsets,
        })
    }

    pub fn m(&self) -> usize {
        self.offsets[self.n]
    }

    /// Range of columns of `B` (and entries of `r`) belonging to block `i`.
    pub fn block(&self, i: usize) -> std::ops::Range<usize> {
        self.offsets[i]..self.offsets[i + 1]
    }

    /// Column `B_ij` of block `i`.
    pub fn b_column(&self, i: usize, j: usize) -> nalgebra::DVectorView<'_, f64> {
        self.b.column(self.offsets[i] + j)
    }

    /// Cost entry `r_ij` of block `i`.
    pub fn r_entry(&self, i: usize, j: usize) -> f64 {
        self.r[self.offsets[i] + j]
    }

    pub fn e_is_identity(&self) -> bool {
        let n = self.n;
        (0..n).all(|p| (0..n).all(|q| (self.e[(p, q)] - if p == q { 1.0 } else { 0.0 }).abs() <= TOL))
    }

    /// Reduced costs `r_i + B_i'p` for block `i`.
    pub fn reduced_costs(&self, i: usize, p: &DVector<f64>) -> Vec<f64> {
        self.block(i)
            .map(|c| self.r[c] + self.b.column(c).dot(p))
            .collect()
    }

    /// Expands a policy into `(K, A + BK, s + K'r)`.
    pub fn expand_policy(&self, policy: &Policy) -> Result<ExpandedPolicy> {
        if policy.choice.len() != self.n {
            return Err(Error::Dimension(format!(
                "policy has length {}, expected {}",
                policy.choice.len(),
                self.n
            )));
        }
        let m = self.m();
        let mut k = DMatrix::zeros(m, self.n);
        for (i, choice) in policy.choice.iter().enumerate() {
            match choice {
                Action::Idle => {}
                Action::Input(j) => {
                    if *j >= self.partition[i] {
                        return Err(Error::BadAction {
                            state: i,
                            action: *j,
                            arity: self.partition[i],
                        });
                    }
                    let row = self.offsets[i] + j;
                    for q in 0..self.n {
                        k[(row, q)] = self.e[(i, q)];
                    }
                }
            }
        }
        let closed_loop = &self.a + &self.b * &k;
        let stage_cost = &self.s + k.transpose() * &self.r;
        Ok(ExpandedPolicy {
            k,
            closed_loop,
            stage_cost,
        })
    }
}

/// Output of [`ProblemInstance::expand_policy`].
#[derive(Debug, Clone)]
pub struct ExpandedPolicy {
    pub k: DMatrix<f64>,
    pub closed_loop: DMatrix<f64>,
    pub stage_cost: DVector<f64>,
}

// ---------------------------------------------------------------------------
// Assumption checks and validation
// ---------------------------------------------------------------------------

/// Witness for a violation of the positivity assumption: the element of
/// `A + BK` that can be driven negative and the action combination doing so.
#[derive(Debug, Clone, Serialize)]
pub struct Assumption1Witness {
    pub row: usize,
    pub col: usize,
    pub value: f64,
    pub actions: Vec<i64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct Assumption1Report {
    pub holds: bool,
    pub witness: Option<Assumption1Witness>,
}

/// Checks `A + BK >= 0` for all `K` by separable per-element minimization
/// over each block's actions.
pub fn check_assumption1(instance: &ProblemInstance) -> Assumption1Report {
    let n = instance.n;
    for q in 0..n {
        for p in 0..n {
            let mut worst = instance.a[(p, q)];
            let mut actions = vec![-1i64; n];
            for i in 0..n {
                let eiq = instance.e[(i, q)];
                let mut best = 0.0;
                let mut best_j = -1i64;
                for (j, c) in instance.block(i).enumerate() {
                    let contrib = instance.b[(p, c)] * eiq;
                    if contrib < best {
                        best = contrib;
                        best_j = j as i64;
                    }
                }
                worst += best;
                actions[i] = best_j;
            }
            if worst < -TOL {
                return Assumption1Report {
                    holds: false,
                    witness: Some(Assumption1Witness {
                        row: p,
                        col: q,
                        value: worst,
                        actions,
                    }),
                };
            }
        }
    }
    Assumption1Report {
        holds: true,
        witness: None,
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Assumption2Report {
    pub holds: bool,
    /// Worst-case column sum of `A + BK` over `K` for each column.
    pub worst_column_sums: Vec<f64>,
}

/// Checks column substochasticity of `A + BK` for all `K`.
pub fn check_assumption2(instance: &ProblemInstance) -> Assumption2Report {
    let n = instance.n;
    let mut sums = Vec::with_capacity(n);
    let mut holds = true;
    // Worst-case per-block contribution is independent of the column.
    let block_max: Vec<f64> = (0..n)
        .map(|i| {
            instance
                .block(i)
                .map(|c| instance.b.column(c).sum())
                .fold(0.0_f64, f64::max)
        })
        .collect();
    for q in 0..n {
        let mut sum = instance.a.column(q).sum();
        for i in 0..n {
            sum += block_max[i] * instance.e[(i, q)];
        }
        if sum > 1.0 + TOL {
            holds = false;
        }
        sums.push(sum);
    }
    Assumption2Report {
        holds,
        worst_column_sums: sums,
    }
}

/// One named validation check.
#[derive(Debug, Clone, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub mandatory: bool,
    pub detail: String,
}

/// Aggregated validation report. Mandatory checks are dimension consistency,
/// sign constraints, invertibility of `E`, and the positivity assumption;
/// substochasticity and the initial policy are advisory.
#[derive(Debug, Clone, Serialize)]
pub struct ValidationReport {
    pub checks: Vec<CheckResult>,
    pub mandatory_ok: bool,
}

impl ValidationReport {
    fn push(&mut self, name: &str, passed: bool, mandatory: bool, detail: String) {
        self.checks.push(CheckResult {
            name: name.into(),
            passed,
            mandatory,
            detail,
        });
        if mandatory && !passed {
            self.mandatory_ok = false;
        }
    }
}

/// Runs every check on the instance and reports pass/fail per check.
pub fn validate(instance: &ProblemInstance) -> ValidationReport {
    let mut report = ValidationReport {
        checks: Vec::new(),
        mandatory_ok: true,
    };
    // Dimensions are enforced by the constructor.
    report.push(
        "dimensions",
        true,
        true,
        format!("n = {}, m = {}", instance.n, instance.m()),
    );

    let s_ok = instance.s.iter().all(|&v| v > TOL && v.is_finite());
    report.push(
        "s_strictly_positive",
        s_ok,
        true,
        if s_ok {
            "s > 0 elementwise".into()
        } else {
            "s has a nonpositive or non-finite entry".into()
        },
    );
    let r_ok = instance.r.iter().all(|&v| v >= -TOL && v.is_finite());
    report.push("r_nonnegative", r_ok, true, String::new());
    let e_ok = instance.e.iter().all(|&v| v >= -TOL && v.is_finite());
    report.push("E_nonnegative", e_ok, true, String::new());
    let x0_ok = instance.x0.iter().all(|&v| v >= -TOL && v.is_finite());
    report.push("x0_nonnegative", x0_ok, true, String::new());

    let cond = condition_estimate(&instance.e);
    let e_inv_ok = cond.map(|c| c <= E_COND_LIMIT).unwrap_or(false);
    report.push(
        "E_invertible",
        e_inv_ok,
        true,
        match cond {
            Some(c) => format!("condition estimate {c:.3e}"),
            None => "E is exactly singular".into(),
        },
    );

    let a1 = check_assumption1(instance);
    report.push(
        "assumption1_positivity",
        a1.holds,
        true,
        match &a1.witness {
            None => "A + BK >= 0 for all K".into(),
            Some(w) => format!(
                "element ({}, {}) reaches {:.6} under actions {:?}",
                w.row, w.col, w.value, w.actions
            ),
        },
    );

    let a2 = check_assumption2(instance);
    let worst = a2
        .worst_column_sums
        .iter()
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max);
    report.push(
        "assumption2_substochastic",
        a2.holds,
        false,
        format!("worst column sum {worst:.6}"),
    );

    match &instance.k_hat {
        None => report.push("k_hat_present", false, false, "no initial policy".into()),
        Some(pol) => {
            report.push("k_hat_present", true, false, String::new());
            let stable = instance
                .expand_policy(pol)
                .map(|exp| spectral_radius_nonneg(&exp.closed_loop, 500) < 1.0 - TOL)
                .unwrap_or(false);
            report.push(
                "k_hat_stable",
                stable,
                false,
                if stable {
                    "closed loop Schur stable".into()
                } else {
                    "closed loop not Schur stable".into()
                },
            );
        }
    }
    report
}

/// Power-iteration estimate of the spectral radius of `|M|`. Adequate for
/// the nonnegative closed loops arising here.
pub fn spectral_radius_nonneg(m: &DMatrix<f64>, steps: usize) -> f64 {
    let n = m.nrows();
    if n == 0 {
        return 0.0;
    }
    let mabs = m.abs();
    let mut v = DVector::from_element(n, 1.0);
    let mut rho = 0.0;
    for _ in 0..steps {
        let w = &mabs * &v;
        let norm = w.amax();
        if norm <= 1e-300 {
            return 0.0;
        }
        rho = norm;
        v = w / norm;
    }
    rho
}

/// 2-norm condition number via SVD; `None` when exactly singular.
pub fn condition_estimate(m: &DMatrix<f64>) -> Option<f64> {
    let svd = m.clone().svd(false, false);
    let smax = svd.singular_values.iter().cloned().fold(0.0_f64, f64::max);
    let smin = svd
        .singular_values
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min);
    if smin <= 0.0 {
        None
    } else {
        Some(smax / smin)
    }
}

/// Result of the `E = I` normalization.
#[derive(Debug, Clone)]
pub struct Normalized {
    pub instance: ProblemInstance,
    /// False when the transformed state cost `E^{-T} s` has a nonpositive
    /// entry; the transform is still returned but detectability arguments
    /// no longer apply.
    pub s_positive: bool,
}

/// Transforms to the equivalent problem with `E = I` via `x_hat = Ex`:
/// `A_hat = EAE^{-1}`, `B_hat = EB`, `s_hat = E^{-T}s`, `x0_hat = Ex0`.
/// The optimal value `p'x0` is invariant (`p_hat = E^{-T}p`).
pub fn normalize_e(instance: &ProblemInstance) -> Result<Normalized> {
    if instance.e_is_identity() {
        return Ok(Normalized {
            instance: instance.clone(),
            s_positive: instance.s.iter().all(|&v| v > 0.0),
        });
    }
    let cond = condition_estimate(&instance.e);
    match cond {
        None => return Err(Error::SingularE { cond: f64::INFINITY }),
        Some(c) if c > E_COND_LIMIT => return Err(Error::SingularE { cond: c }),
        _ => {}
    }
    let e_inv = instance
        .e
        .clone()
        .try_inverse()
        .ok_or(Error::SingularE { cond: f64::INFINITY })?;
    let a_hat = &instance.e * &instance.a * &e_inv;
    let b_hat = &instance.e * &instance.b;
    let s_hat = e_inv.transpose() * &instance.s;
    let x0_hat = &instance.e * &instance.x0;
    let s_positive = s_hat.iter().all(|&v| v > 0.0);
    let instance = ProblemInstance::new(
        instance.partition.clone(),
        a_hat,
        b_hat,
        DMatrix::identity(instance.n, instance.n),
        s_hat,
        instance.r.clone(),
        x0_hat,
        instance.k_hat.clone(),
    )?;
    Ok(Normalized {
        instance,
        s_positive,
    })
}

// ---------------------------------------------------------------------------
// File format
// ---------------------------------------------------------------------------

/// JSON schema for problem files: dense row-major matrices, 0-based action
/// indices with -1 for idle in `k_hat`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProblemFile {
    pub n: usize,
    pub partition: Vec<usize>,
    #[serde(rename = "A")]
    pub a: Vec<Vec<f64>>,
    #[serde(rename = "B")]
    pub b: Vec<Vec<f64>>,
    #[serde(rename = "E")]
    pub e: Vec<Vec<f64>>,
    pub s: Vec<f64>,
    pub r: Vec<f64>,
    pub x0: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub k_hat: Option<Vec<i64>>,
}

fn matrix_from_rows(rows: &[Vec<f64>], what: &str) -> Result<DMatrix<f64>> {
    let nrows = rows.len();
    let ncols = rows.first().map(|r| r.len()).unwrap_or(0);
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::Dimension(format!("{what} has ragged rows")));
    }
    Ok(DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
}

fn matrix_to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}

impl ProblemFile {
    pub fn from_instance(instance: &ProblemInstance) -> Self {
        ProblemFile {
            n: instance.n,
            partition: instance.partition.clone(),
            a: matrix_to_rows(&instance.a),
            b: matrix_to_rows(&instance.b),
            e: matrix_to_rows(&instance.e),
            s: instance.s.iter().cloned().collect(),
            r: instance.r.iter().cloned().collect(),
            x0: instance.x0.iter().cloned().collect(),
            k_hat: instance.k_hat.as_ref().map(|p| p.to_indices()),
        }
    }

    pub fn into_instance(self) -> Result<ProblemInstance> {
        if self.partition.len() != self.n {
            return Err(Error::Dimension(format!(
                "partition has length {}, expected n = {}",
                self.partition.len(),
                self.n
            )));
        }
        ProblemInstance::new(
            self.partition,
            matrix_from_rows(&self.a, "A")?,
            matrix_from_rows(&self.b, "B")?,
            matrix_from_rows(&self.e, "E")?,
            DVector::from_vec(self.s),
            DVector::from_vec(self.r),
            DVector::from_vec(self.x0),
            self.k_hat.as_deref().map(Policy::from_indices),
        )
    }
}

impl ProblemInstance {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&ProblemFile::from_instance(self)).expect("serialize")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: ProblemFile = serde_json::from_str(text)
            .map_err(|e| Error::InvalidInstance(format!("JSON parse error: {e}")))?;
        file.into_instance()
    }
}
