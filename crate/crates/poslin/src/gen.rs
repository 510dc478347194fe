//! Seeded instance generators and the worked fixtures used across the test
//! suite, plus the fictitious-action ("release valve") transformer.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::model::{Action, Policy, ProblemInstance};
use crate::search::{local_solve, BoundMode};
use crate::{Result, VI_MAX_ITER, VI_TOL};

/// Generator configuration. Cost ranges are half-open `(low, high)`
/// intervals with positive endpoints.
#[derive(Debug, Clone)]
pub struct GenConfig {
    pub n: usize,
    /// Input columns per state (`m_i`, uniform).
    pub actions_per_state: usize,
    /// Probability of each off-diagonal entry of `A` being nonzero.
    pub density: f64,
    pub seed: u64,
    pub disposal_cost_range: (f64, f64),
    pub routing_cost_range: (f64, f64),
    /// Keep all column sums of `A` below one; when false the first column
    /// sum is pushed to 1.2.
    pub stable_open_loop: bool,
    /// Use `E = I` instead of the default `E = A`; needed by the SSP
    /// conversions, which require the identity measurement.
    pub identity_e: bool,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            n: 4,
            actions_per_state: 2,
            density: 0.3,
            seed: 0,
            disposal_cost_range: (0.5, 1.5),
            routing_cost_range: (0.5, 2.0),
            stable_open_loop: true,
            identity_e: false,
        }
    }
}

/// Column-diagonally-dominant nonnegative `A` with column sums in
/// `[0.6, 0.95]`. Dominance keeps `A` invertible so it can double as `E`.
fn draw_a(rng: &mut ChaCha8Rng, n: usize, density: f64, stable: bool) -> DMatrix<f64> {
    let mut a = DMatrix::zeros(n, n);
    for q in 0..n {
        let colsum = rng.gen_range(0.6..0.95);
        let diag_frac = rng.gen_range(0.55..0.8);
        let mut off: Vec<(usize, f64)> = Vec::new();
        for p in 0..n {
            if p != q && rng.gen_bool(density) {
                off.push((p, rng.gen_range(0.1..1.0)));
            }
        }
        let off_sum: f64 = off.iter().map(|&(_, w)| w).sum();
        if off_sum > 0.0 {
            a[(q, q)] = diag_frac * colsum;
            for (p, w) in off {
                a[(p, q)] = (1.0 - diag_frac) * colsum * w / off_sum;
            }
        } else {
            a[(q, q)] = colsum;
        }
    }
    if !stable {
        let scale = 1.2 / a.column(0).sum();
        for p in 0..n {
            a[(p, 0)] *= scale;
        }
    }
    a
}

/// Routing column for state `i`. With `E = A` the column is `d - e_i` with
/// `d >= 0` and `1'd <= 1`, so `A + B_ij A_i. = A - e_i A_i. + d A_i. >= 0`
/// and column sums cannot grow. With `E = I` the column is
/// `d - theta A(:, i)` with `1'd <= theta (1'A(:,i))`, which rewrites
/// column `i` of the closed loop as `(1 - theta) A(:, i) + d >= 0`.
fn draw_routing_column(
    rng: &mut ChaCha8Rng,
    a: &DMatrix<f64>,
    i: usize,
    density: f64,
    identity_e: bool,
) -> DVector<f64> {
    let n = a.nrows();
    let (base, budget) = if identity_e {
        let theta = rng.gen_range(0.5..1.0);
        let col = a.column(i).clone_owned();
        let budget = rng.gen_range(0.0..0.9) * theta * col.sum();
        (col * -theta, budget)
    } else {
        let mut e_i = DVector::zeros(n);
        e_i[i] = -1.0;
        (e_i, rng.gen_range(0.0..0.9))
    };
    let mut d: Vec<(usize, f64)> = Vec::new();
    for p in 0..n {
        if rng.gen_bool(density.max(0.2)) {
            d.push((p, rng.gen_range(0.1..1.0)));
        }
    }
    let d_sum: f64 = d.iter().map(|&(_, w)| w).sum();
    let mut col = base;
    if d_sum > 0.0 {
        for (p, w) in d {
            col[p] += budget * w / d_sum;
        }
    }
    col
}

/// Draws a valid instance. Assumption 1 holds by construction of the input
/// columns and Assumption 2 follows from the column sums of `A` when
/// `stable_open_loop` is set. Draw order (fixed for reproducibility):
/// columns of `A`, then input columns state by state, then `r`, then `s`.
/// Identical configs give bit-identical instances.
pub fn random_instance(config: &GenConfig) -> ProblemInstance {
    assert!(config.density > 0.0 && config.density <= 1.0);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let n = config.n;
    let a = draw_a(&mut rng, n, config.density, config.stable_open_loop);
    let m = n * config.actions_per_state;
    let mut b = DMatrix::zeros(n, m);
    for i in 0..n {
        for j in 0..config.actions_per_state {
            let col = draw_routing_column(&mut rng, &a, i, config.density, config.identity_e);
            b.set_column(i * config.actions_per_state + j, &col);
        }
    }
    let (rl, rh) = config.routing_cost_range;
    let r = DVector::from_fn(m, |_, _| rng.gen_range(rl..rh));
    let s = DVector::from_fn(n, |_, _| rng.gen_range(rl..rh));
    let e = if config.identity_e {
        DMatrix::identity(n, n)
    } else {
        a.clone()
    };
    let x0 = DVector::from_fn(n, |i, _| if i < 2 { 1.0 } else { 0.0 });
    let k_hat = config.stable_open_loop.then(|| Policy::all_idle(n));
    ProblemInstance::new(
        vec![config.actions_per_state; n],
        a,
        b,
        e,
        s,
        r,
        x0,
        k_hat,
    )
    .expect("generated instance is dimensionally consistent")
}

/// The 25-state plant family: every state has a disposal input (`-e_i`
/// column, priced from the disposal range) and one routing input, `E = A`,
/// and the all-disposal initial policy, whose closed loop is exactly zero.
/// The initial mass sits on states 2 and 3.
pub fn chemical_plant(seed: u64) -> ProblemInstance {
    let config = GenConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = 25;
    let a = draw_a(&mut rng, n, config.density, true);
    let mut b = DMatrix::zeros(n, 2 * n);
    let mut r = DVector::zeros(2 * n);
    let (dl, dh) = config.disposal_cost_range;
    let (rl, rh) = config.routing_cost_range;
    for i in 0..n {
        b[(i, 2 * i)] = -1.0;
        r[2 * i] = rng.gen_range(dl..dh);
        let col = draw_routing_column(&mut rng, &a, i, config.density, false);
        b.set_column(2 * i + 1, &col);
        r[2 * i + 1] = rng.gen_range(rl..rh);
    }
    let s = DVector::from_fn(n, |_, _| rng.gen_range(rl..rh));
    let mut x0 = DVector::zeros(n);
    x0[1] = 0.7;
    x0[2] = 0.8;
    let k_hat = Policy {
        choice: vec![Action::Input(0); n],
    };
    ProblemInstance::new(vec![2; n], a.clone(), b, a, s, r, x0, Some(k_hat))
        .expect("plant instance is dimensionally consistent")
}

/// Plant instance together with its all-disposal policy.
pub fn example_three_disposal_policy(seed: u64) -> (ProblemInstance, Policy) {
    let inst = chemical_plant(seed);
    let policy = inst.k_hat.clone().unwrap();
    (inst, policy)
}

/// Three-state, four-input worked example: one input at states 1 and 3, two
/// at state 2, `E = I`, unit costs, `x0 = (2, 0, 1)`.
pub fn example_one() -> ProblemInstance {
    let a = DMatrix::from_row_slice(
        3,
        3,
        &[0.4, 0.0, 0.0, 0.0, 0.6, 0.0, 0.4, 0.4, 0.4],
    );
    let b = DMatrix::from_row_slice(
        3,
        4,
        &[
            -0.4, 0.3, 0.0, 0.2, //
            0.4, -0.6, -0.5, 0.2, //
            0.0, 0.3, 0.0, -0.4,
        ],
    );
    ProblemInstance::new(
        vec![1, 2, 1],
        a,
        b,
        DMatrix::identity(3, 3),
        DVector::from_element(3, 1.0),
        DVector::from_element(4, 1.0),
        DVector::from_vec(vec![2.0, 0.0, 1.0]),
        None,
    )
    .unwrap()
}

/// [`example_one`] with the second drift entry raised to 0.8, which pushes
/// the idle column sum at state 2 to 1.2 and breaks substochasticity.
pub fn example_two() -> ProblemInstance {
    let mut inst = example_one();
    inst.a[(1, 1)] = 0.8;
    inst
}

/// One drift-only state with self-loop `a` and stage cost `s`.
pub fn scalar_instance(a: f64, s: f64) -> ProblemInstance {
    ProblemInstance::new(
        vec![0],
        DMatrix::from_element(1, 1, a),
        DMatrix::zeros(1, 0),
        DMatrix::identity(1, 1),
        DVector::from_element(1, s),
        DVector::zeros(0),
        DVector::from_element(1, 1.0),
        None,
    )
    .unwrap()
}

/// Result of [`add_fictitious_actions`].
#[derive(Debug, Clone)]
pub struct Augmented {
    pub instance: ProblemInstance,
    /// `(state, in-block action index)` of each added column.
    pub added: Vec<(usize, usize)>,
    /// The cost attached to every added column.
    pub penalty: f64,
}

/// Added columns actually chosen by a policy.
pub fn fictitious_used(policy: &Policy, added: &[(usize, usize)]) -> Vec<(usize, usize)> {
    added
        .iter()
        .copied()
        .filter(|&(i, j)| policy.choice[i] == Action::Input(j))
        .collect()
}

/// Adds a release-valve input to every region state whose drift leaks across
/// the region boundary (to every region state when the region is the whole
/// space). The valve column is `-rho_i e_i` with
/// `rho_i = min over q with E_iq > 0 of A_iq / E_iq`, the largest uniform
/// drain of row `i` that keeps every closed loop nonnegative; with `E = A`
/// this is the plain disposal column `-e_i`. Valves are priced at
/// `penalty_factor` times the optimal cost of the isolated region (boundary
/// crossings treated as free), so large factors keep them out of any optimal
/// policy while factors near one may not.
pub fn add_fictitious_actions(
    instance: &ProblemInstance,
    region: &[usize],
    penalty_factor: f64,
) -> Result<Augmented> {
    assert!(penalty_factor > 1.0);
    let n = instance.n;
    let mut in_region = vec![false; n];
    for &i in region {
        in_region[i] = true;
    }
    let full = in_region.iter().all(|&b| b);
    // Isolated-region optimal cost: local solve with zero boundary values.
    let zero = DVector::zeros(n);
    let (g, _) = local_solve(
        instance,
        &in_region,
        &zero,
        BoundMode::Lower,
        &zero,
        None,
        VI_TOL,
        VI_MAX_ITER,
    )?;
    let bound = region.iter().map(|&i| g[i]).fold(0.0_f64, f64::max);
    let penalty = penalty_factor * bound;

    let gains_valve = |i: usize| -> bool {
        full || (0..n).any(|p| !in_region[p] && instance.a[(p, i)] > 0.0)
    };
    let mut partition = instance.partition.clone();
    let mut added = Vec::new();
    let mut columns: Vec<DVector<f64>> = Vec::new();
    let mut r_entries: Vec<f64> = Vec::new();
    for i in 0..n {
        for c in instance.block(i) {
            columns.push(instance.b.column(c).clone_owned());
            r_entries.push(instance.r[c]);
        }
        if in_region[i] && gains_valve(i) {
            let rho = (0..n)
                .filter(|&q| instance.e[(i, q)] > 0.0)
                .map(|q| instance.a[(i, q)] / instance.e[(i, q)])
                .fold(f64::INFINITY, f64::min);
            let mut col = DVector::zeros(n);
            col[i] = -rho;
            columns.push(col);
            r_entries.push(penalty);
            added.push((i, partition[i]));
            partition[i] += 1;
        }
    }
    let mut b = DMatrix::zeros(n, columns.len());
    for (c, col) in columns.iter().enumerate() {
        b.set_column(c, col);
    }
    let augmented = ProblemInstance::new(
        partition,
        instance.a.clone(),
        b,
        instance.e.clone(),
        instance.s.clone(),
        DVector::from_vec(r_entries),
        instance.x0.clone(),
        instance.k_hat.clone(),
    )?;
    Ok(Augmented {
        instance: augmented,
        added,
        penalty,
    })
}
