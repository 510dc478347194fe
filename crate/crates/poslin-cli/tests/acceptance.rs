//! End-to-end acceptance suite. Each test prints one PASS/FAIL line for its
//! criterion; run with `--nocapture` to see the lines for passing tests.

use std::process::Command;
use std::time::Instant;

use poslin::bellman::{brute_force_solve, value_iterate, ENUMERATION_CAP};
use poslin::gen::{chemical_plant, example_one, example_two, random_instance, GenConfig};
use poslin::heuristics::{improve, init_heuristics, rate_bound};
use poslin::model::validate;
use poslin::search::{run_search, SearchConfig};
use poslin::ssp::{check_prop2_scaling, expand_skeleton, from_ssp, solve_ssp, to_ssp};
use poslin::{CostVector, VI_MAX_ITER, VI_TOL};

fn report(criterion: usize, name: &str, pass: bool, detail: String) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    println!("[{verdict}] criterion {criterion}: {name} ({detail})");
    assert!(pass, "criterion {criterion} failed: {detail}");
}

fn small_config(seed: u64) -> GenConfig {
    GenConfig {
        n: 2 + (seed as usize % 4),
        actions_per_state: seed as usize % 3,
        seed,
        ..GenConfig::default()
    }
}

#[test]
fn criterion_01_oracle_equivalence() {
    let started = Instant::now();
    let mut worst = 0.0_f64;
    for seed in 0..100 {
        let inst = random_instance(&small_config(seed));
        let vi = value_iterate(&inst, &CostVector::zeros(inst.n), VI_TOL, VI_MAX_ITER).unwrap();
        let oracle = brute_force_solve(&inst, ENUMERATION_CAP).unwrap();
        worst = worst.max((vi.p.as_vec() - oracle.p.as_vec()).amax());
    }
    let elapsed = started.elapsed().as_secs_f64();
    report(
        1,
        "value iteration equals enumeration oracle on 100 instances",
        worst <= 1e-8 && elapsed < 30.0,
        format!("max gap {worst:.3e}, {elapsed:.2}s"),
    );
}

#[test]
fn criterion_02_example_one_ssp_exactness() {
    let ssp = to_ssp(&example_one()).unwrap();
    let acts = &ssp.actions[1];
    let costs: Vec<f64> = acts.iter().map(|a| a.cost).collect();
    let expected_t = [
        [0.0, 0.6, 0.4, 0.0],
        [0.3, 0.0, 0.7, 0.0],
        [0.0, 0.1, 0.4, 0.5],
    ];
    let mut worst = (costs[0] - 1.0).abs().max((costs[1] - 2.0).abs());
    worst = worst.max((costs[2] - 2.0).abs());
    for (a, exp) in acts.iter().zip(expected_t.iter()) {
        for w in 0..4 {
            worst = worst.max((a.transition[w] - exp[w]).abs());
        }
    }
    report(
        2,
        "worked-example SSP costs and transitions reproduced",
        worst <= 1e-12,
        format!("max deviation {worst:.3e}"),
    );
}

#[test]
fn criterion_03_round_trip_value_preservation() {
    let mut worst_rt = 0.0_f64;
    let mut worst_ssp = 0.0_f64;
    for seed in 0..50 {
        let cfg = GenConfig {
            identity_e: true,
            ..small_config(seed)
        };
        let inst = random_instance(&cfg);
        let oracle = brute_force_solve(&inst, ENUMERATION_CAP).unwrap();
        let ssp = to_ssp(&inst).unwrap();
        let sol = solve_ssp(&ssp, 1e-12).unwrap();
        for v in 0..inst.n {
            worst_ssp = worst_ssp.max((sol.j[v] - oracle.p[v]).abs());
        }
        let back = from_ssp(&ssp).unwrap();
        let p_back = brute_force_solve(&back.instance, ENUMERATION_CAP).unwrap().p;
        let value = oracle.p.dot(&inst.x0);
        // from_ssp uses its own x0; compare values through the original x0
        // under the preserved state order.
        let value_back = p_back.dot(&inst.x0);
        worst_rt = worst_rt.max((value - value_back).abs());
    }
    report(
        3,
        "round trip preserves values and the SSP solver agrees with the oracle",
        worst_rt <= 1e-9 && worst_ssp <= 1e-8,
        format!("round trip {worst_rt:.3e}, solver gap {worst_ssp:.3e}"),
    );
}

#[test]
fn criterion_04_heuristic_sandwich_and_monotonicity() {
    let mut ok = true;
    let mut detail = String::from("50 instances, 50 steps");
    'outer: for seed in 0..50 {
        let inst = random_instance(&small_config(seed));
        let p = brute_force_solve(&inst, ENUMERATION_CAP).unwrap().p;
        let mut pair = init_heuristics(&inst).unwrap();
        for step in 0..50 {
            let next = improve(&inst, &pair, 1);
            for i in 0..inst.n {
                let sandwich =
                    next.h_lower[i] <= p[i] + 1e-8 && p[i] <= next.h_upper[i] + 1e-8;
                let monotone = next.h_lower[i] >= pair.h_lower[i] - 1e-12
                    && next.h_upper[i] <= pair.h_upper[i] + 1e-12;
                if !sandwich || !monotone {
                    ok = false;
                    detail = format!("seed {seed}, step {step}, state {i}");
                    break 'outer;
                }
            }
            let moved = (&next.h_upper - &pair.h_upper)
                .amax()
                .max((&next.h_lower - &pair.h_lower).amax());
            let converged = (&pair.h_upper - &pair.h_lower).amax() < 1e-10;
            if !converged && moved == 0.0 {
                // No strict improvement anywhere although not converged.
                ok = false;
                detail = format!("seed {seed}, step {step}: stalled");
                break 'outer;
            }
            pair = next;
        }
    }
    report(4, "heuristic bounds sandwich the fixed point monotonically", ok, detail);
}

#[test]
fn criterion_05_rate_bound() {
    let mut checked = 0usize;
    let mut worst = f64::NEG_INFINITY;
    for seed in 0..50 {
        let inst = random_instance(&small_config(seed));
        let pair = init_heuristics(&inst).unwrap();
        let bound = match rate_bound(&inst, &pair) {
            Ok(b) => b,
            Err(_) => continue,
        };
        let p = brute_force_solve(&inst, ENUMERATION_CAP).unwrap().p;
        let mut current = pair.clone();
        for k in 0..=50usize {
            let factor = bound.factor(k);
            if (0.0..=1.0).contains(&factor) {
                checked += 1;
                for i in 0..inst.n {
                    worst = worst.max(factor * p[i] - current.h_lower[i]);
                }
            }
            current = improve(&inst, &current, 1);
        }
    }
    report(
        5,
        "lower bounds dominate the contraction-rate curve",
        worst <= 1e-9 && checked > 0,
        format!("worst violation {worst:.3e} over {checked} (instance, k) pairs"),
    );
}

#[test]
fn criterion_06_search_optimality_at_gamma_one() {
    let mut ok = true;
    let mut detail = String::from("25 instances");
    'outer: for seed in 0..25 {
        let inst = random_instance(&small_config(seed));
        let p = brute_force_solve(&inst, ENUMERATION_CAP).unwrap().p;
        let outcome = run_search(&inst, &SearchConfig::new(1.0)).unwrap();
        if outcome.iterations > inst.n {
            ok = false;
            detail = format!("seed {seed}: {} iterations > n = {}", outcome.iterations, inst.n);
            break;
        }
        for i in 0..inst.n {
            if inst.x0[i] > 0.0 && (outcome.g_upper[i] - p[i]).abs() > 1e-8 {
                ok = false;
                detail = format!(
                    "seed {seed}, state {i}: {} vs {}",
                    outcome.g_upper[i], p[i]
                );
                break 'outer;
            }
        }
    }
    report(6, "search at ratio 1 is optimal on the support of x0", ok, detail);
}

#[test]
fn criterion_07_gamma_guarantee() {
    let mut ok = true;
    let mut detail = String::from("25 instances x 3 ratios");
    'outer: for seed in 0..25 {
        let inst = random_instance(&small_config(seed));
        let p = brute_force_solve(&inst, ENUMERATION_CAP).unwrap().p;
        let optimal = p.dot(&inst.x0);
        for gamma in [1.05, 1.2, 2.0] {
            let outcome = run_search(&inst, &SearchConfig::new(gamma)).unwrap();
            let upper = outcome.upper_total(&inst);
            if upper > gamma * optimal + 1e-8 {
                ok = false;
                detail =
                    format!("seed {seed}, gamma {gamma}: {upper} > {}", gamma * optimal);
                break 'outer;
            }
        }
    }
    report(7, "terminated search respects the certified ratio", ok, detail);
}

#[test]
fn criterion_08_skeleton_scaling() {
    let sk = expand_skeleton(&example_two(), 16).unwrap();
    let scaling = check_prop2_scaling(&sk, 1e-12).unwrap();
    let mut worst_level = 0.0_f64;
    for k in 1..=5 {
        worst_level = worst_level.max(scaling.per_level[k - 1]);
    }
    let pass =
        worst_level <= 1e-6 && sk.eq4_residual <= 1e-12 && sk.eq5_residual <= 1e-12;
    report(
        8,
        "skeleton level values scale linearly and allocations are exact",
        pass,
        format!(
            "levels 1-5 deviation {worst_level:.3e}, allocation residuals {:.1e}/{:.1e}",
            sk.eq4_residual, sk.eq5_residual
        ),
    );
}

#[test]
fn criterion_09_plant_reproduction() {
    let started = Instant::now();
    let inst = chemical_plant(7);
    assert!(validate(&inst).mandatory_ok);
    let outcome = run_search(&inst, &SearchConfig::new(1.05)).unwrap();
    let elapsed = started.elapsed().as_secs_f64();
    let mut monotone = true;
    for w in outcome.trace.windows(2) {
        if w[1].upper_total > w[0].upper_total + 1e-9
            || w[1].lower_total < w[0].lower_total - 1e-9
        {
            monotone = false;
        }
    }
    let upper = outcome.upper_total(&inst);
    let lower = outcome.lower_total(&inst);
    let ratio = upper / lower;
    report(
        9,
        "plant search terminates with a monotone trace",
        monotone && ratio <= 1.05 * (1.0 + 1e-12) && elapsed < 10.0,
        format!("ratio {ratio:.6}, {} iterations, {elapsed:.2}s", outcome.iterations),
    );
}

fn run_cli(args: &[&str], dir: &std::path::Path) -> (Vec<u8>, i32) {
    let out = Command::new(env!("CARGO_BIN_EXE_poslin"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs");
    (out.stdout, out.status.code().unwrap_or(-1))
}

#[test]
fn criterion_10_cli_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path();
    let problem = example_one().to_json();
    std::fs::write(path.join("one.json"), &problem).unwrap();
    let mut inst = example_one();
    inst.k_hat = Some(poslin::Policy::all_idle(3));
    std::fs::write(path.join("one_khat.json"), inst.to_json()).unwrap();

    let commands: Vec<Vec<&str>> = vec![
        vec!["validate", "one.json"],
        vec!["solve", "one.json", "--method", "vi"],
        vec!["solve", "one.json", "--method", "oracle"],
        vec![
            "search",
            "one_khat.json",
            "--gamma",
            "1.1",
            "--trace",
            "trace.csv",
            "--snapshots",
            "snaps",
        ],
        vec!["convert", "one.json", "--to", "ssp", "--out", "one_ssp.json"],
        vec![
            "convert",
            "one_ssp.json",
            "--to",
            "control",
            "--out",
            "one_back.json",
        ],
        vec!["gen", "--preset", "chemical", "--seed", "7", "--out", "plant.json"],
        vec!["gen", "--preset", "random", "--seed", "42", "--n", "4"],
    ];
    let mut ok = true;
    let mut detail = format!("{} commands run twice", commands.len());
    for args in &commands {
        let (out1, code1) = run_cli(args, path);
        let files1 = snapshot_files(path);
        let (out2, code2) = run_cli(args, path);
        let files2 = snapshot_files(path);
        if out1 != out2 || code1 != code2 || files1 != files2 || code1 != 0 {
            ok = false;
            detail = format!("non-deterministic or failing: poslin {}", args.join(" "));
            break;
        }
    }
    report(10, "repeated CLI runs are byte-identical", ok, detail);
}

fn snapshot_files(dir: &std::path::Path) -> Vec<(String, Vec<u8>)> {
    let mut entries = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let entry = entry.unwrap();
            let p = entry.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                entries.push((
                    p.strip_prefix(dir).unwrap().display().to_string(),
                    std::fs::read(&p).unwrap(),
                ));
            }
        }
    }
    entries.sort();
    entries
}
