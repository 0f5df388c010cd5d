//! Acceptance suite. Prints one PASS/FAIL line per criterion and fails if
//! any criterion fails.

use std::io::Write;
use std::time::{Duration, Instant};

use feddlr::compression::lr_compress;
use feddlr::federation::{run_training, Federation, Mode, TrainConfig};
use feddlr::linalg::{matmul, matmul_at, svd, Matrix};
use feddlr::metrics::{
    bound_rhs, mac_count, mac_ratio, rank_monotonicity, ConvergenceConstants, MetricsLog,
};
use feddlr::nn::{forward_loss_grad, Batch, Mlp};
use feddlr_cli::experiment::{paired_logs, sweep_logs, Comparison};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

/// Writes past the test harness capture so the lines always show.
fn report(id: usize, name: &str, elapsed: Duration, budget: Option<Duration>, o: &Outcome) -> bool {
    let in_budget = budget.is_none_or(|b| elapsed <= b);
    let pass = o.pass && in_budget;
    let budget_note = match budget {
        Some(b) if !in_budget => format!(
            " [over budget: {:.1}s > {}s]",
            elapsed.as_secs_f64(),
            b.as_secs()
        ),
        _ => String::new(),
    };
    let line = format!(
        "[{}] criterion {id:>2} {name}: {} ({:.1}s){budget_note}\n",
        if pass { "PASS" } else { "FAIL" },
        o.detail,
        elapsed.as_secs_f64()
    );
    std::io::stderr().write_all(line.as_bytes()).unwrap();
    pass
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
}

fn oracle_singular_values(w: &Matrix) -> Vec<f64> {
    let m = nalgebra::DMatrix::from_row_slice(w.rows(), w.cols(), w.as_slice());
    let mut s: Vec<f64> = m.singular_values().iter().copied().collect();
    s.sort_by(|a, b| b.total_cmp(a));
    s
}

fn c1_energy_invariant() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst_residual = f64::NEG_INFINITY;
    let mut minimality_failures = 0;
    let mut cases = 0;
    for _ in 0..500 {
        let (m, n) = (rng.random_range(1..=64), rng.random_range(1..=64));
        let w = random_matrix(&mut rng, m, n);
        let energy = w.frobenius_norm().powi(2);
        let sigma = oracle_singular_values(&w);
        for e in [0.5, 0.9, 0.99] {
            cases += 1;
            let fp = lr_compress(&w, e).unwrap();
            let residual = fp.reconstruct().sub(&w).unwrap().frobenius_norm().powi(2);
            worst_residual = worst_residual.max((residual - (1.0 - e) * energy) / energy);
            let r = fp.rank();
            let kept_below: f64 = sigma[..r - 1].iter().map(|s| s * s).sum();
            let total: f64 = sigma.iter().map(|s| s * s).sum();
            // With r - 1 components the kept energy must fall short of e.
            // The oracle spectrum agrees with ours to ~1e-13 relative.
            if r > 1 && kept_below >= e * total * (1.0 + 1e-12) {
                minimality_failures += 1;
            }
        }
    }
    outcome(
        worst_residual <= 1e-9 && minimality_failures == 0,
        format!(
            "{cases} cases, max (residual - (1-e)E)/E = {worst_residual:.2e} (tol 1e-9), non-minimal ranks = {minimality_failures}"
        ),
    )
}

fn c2_svd() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut worst_rec, mut worst_orth) = (0.0f64, 0.0f64);
    let count = 240;
    for i in 0..count {
        let (m, n) = (rng.random_range(1..=40), rng.random_range(1..=40));
        let w = if i % 4 == 0 {
            let k = rng.random_range(1..=m.min(n));
            matmul(
                &random_matrix(&mut rng, m, k),
                &random_matrix(&mut rng, k, n),
            )
            .unwrap()
        } else {
            random_matrix(&mut rng, m, n)
        };
        let s = svd(&w).unwrap();
        worst_rec =
            worst_rec.max(s.reconstruct().sub(&w).unwrap().frobenius_norm() / w.frobenius_norm());
        for q in [&s.u, &s.v] {
            let defect = matmul_at(q, q)
                .unwrap()
                .max_abs_diff(&Matrix::identity(q.cols()));
            worst_orth = worst_orth.max(defect);
        }
    }
    outcome(
        worst_rec <= 1e-10 && worst_orth <= 1e-10,
        format!("{count} matrices, max relative reconstruction error {worst_rec:.2e}, max orthonormality defect {worst_orth:.2e} (tol 1e-10)"),
    )
}

fn c3_gradients() -> Outcome {
    const STEP: f64 = 1e-5;
    let mut worst = 0.0f64;
    let seeds = 20;
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(300 + seed);
        let dims = [6, 8, 7, 4];
        let mut model = Mlp::init(&dims, &mut rng).unwrap();
        for l in model.layers_mut() {
            l.bias
                .iter_mut()
                .for_each(|b| *b = rng.random_range(-0.5..0.5));
        }
        let x = random_matrix(&mut rng, 4, 6).scale(2.0);
        let labels = (0..4).map(|_| rng.random_range(0..4)).collect();
        let batch = Batch::new(x, labels).unwrap();
        let (_, g) = forward_loss_grad(&model, &batch).unwrap();
        let analytic = g.flatten();
        let base = model.flatten();
        let loss_with = |k: usize, delta: f64| {
            let mut m = model.clone();
            let mut offset = 0;
            for l in m.layers_mut() {
                let wl = l.weight.len();
                if k < offset + wl {
                    l.weight.as_mut_slice()[k - offset] += delta;
                    break;
                }
                offset += wl;
                if k < offset + l.bias.len() {
                    l.bias[k - offset] += delta;
                    break;
                }
                offset += l.bias.len();
            }
            forward_loss_grad(&m, &batch).unwrap().0
        };
        for k in 0..base.len() {
            let numeric = (loss_with(k, STEP) - loss_with(k, -STEP)) / (2.0 * STEP);
            let scale = analytic[k].abs().max(numeric.abs());
            let err = if scale < 1e-8 {
                (analytic[k] - numeric).abs()
            } else {
                (analytic[k] - numeric).abs() / scale
            };
            worst = worst.max(err);
        }
    }
    outcome(
        worst <= 1e-5,
        format!("{seeds} seeded 3-layer models, max relative error {worst:.2e} (tol 1e-5)"),
    )
}

fn globals(cfg: &TrainConfig) -> Vec<Mlp> {
    let mut v = Vec::new();
    Federation::new(cfg.clone())
        .unwrap()
        .run_with(|_, m| v.push(m.clone()))
        .unwrap();
    v
}

fn c4_fedavg_equivalence() -> Outcome {
    let mut cfg = TrainConfig::reference();
    cfg.total_iters = 5 * cfg.local_iters;
    cfg.e_client = 1.0;
    cfg.e_server = 1.0;
    cfg.dense_fallback = false;
    let mut avg = cfg.clone();
    avg.mode = Mode::FedAvg;
    let (a, b) = (globals(&avg), globals(&cfg));
    let diffs: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x.max_abs_diff(y)).collect();
    let worst = diffs.iter().copied().fold(0.0, f64::max);
    outcome(
        diffs.len() == 5 && worst <= 1e-6,
        format!(
            "{} rounds, max-abs parameter difference {worst:.2e} (tol 1e-6)",
            diffs.len()
        ),
    )
}

fn c5_rank_monotonicity(dlr: &MetricsLog) -> Outcome {
    let Some(report) = rank_monotonicity(dlr) else {
        return outcome(false, "no lambda values recorded".into());
    };
    let layers = dlr.layer_shapes.len();
    let rounds_all_ok: Vec<usize> = dlr
        .records
        .iter()
        .filter(|r| {
            r.lambdas
                .as_ref()
                .is_some_and(|l| l.iter().flatten().all(|&x| x <= 1.0))
        })
        .map(|r| r.round)
        .collect();
    let round_violations = report
        .checks
        .iter()
        .filter(|c| rounds_all_ok.contains(&c.round) && !c.holds())
        .count();
    let layer_checked = report.checks.iter().filter(|c| c.lambda_ok).count();
    let layer_violations = report.violations().len();
    let first = dlr.records.first().map(|r| r.broadcast_ranks.clone());
    let last = dlr.records.last().map(|r| r.broadcast_ranks.clone());
    outcome(
        round_violations == 0 && layer_violations == 0,
        format!(
            "{} rounds with every lambda <= 1 (violations {round_violations}); {layer_checked}/{} (round, layer) pairs with lambda <= 1 on all clients (violations {layer_violations}); lambda <= 1 fraction {:.3}; broadcast ranks {:?} -> {:?}",
            rounds_all_ok.len(),
            dlr.records.len() * layers,
            report.lambda_le_one_fraction,
            first.unwrap_or_default(),
            last.unwrap_or_default(),
        ),
    )
}

fn c6_communication(avg: &MetricsLog, dlr: &MetricsLog) -> Outcome {
    let cmp = Comparison::new(avg, dlr, 0.9);
    let never_more = cmp.rounds_not_above_fedavg == cmp.rounds;
    let strict_fraction = cmp.rounds_strictly_below_fedavg as f64 / cmp.rounds as f64;
    let reach = match (cmp.feddlr.params_to_target, cmp.fedavg.params_to_target) {
        (Some(d), Some(a)) => d < a,
        _ => false,
    };
    outcome(
        never_more && strict_fraction >= 0.9 && reach,
        format!(
            "(a) not above fedavg in {}/{} rounds, strictly below in {}/{} ({:.1}%, need >= 90%); (b) params to 90% accuracy feddlr {:?} (round {:?}) vs fedavg {:?} (round {:?}); final accuracy feddlr {:.4} fedavg {:.4}",
            cmp.rounds_not_above_fedavg,
            cmp.rounds,
            cmp.rounds_strictly_below_fedavg,
            cmp.rounds,
            100.0 * strict_fraction,
            cmp.feddlr.params_to_target,
            cmp.feddlr.first_round_at_target,
            cmp.fedavg.params_to_target,
            cmp.fedavg.first_round_at_target,
            cmp.feddlr.final_accuracy.unwrap_or(f64::NAN),
            cmp.fedavg.final_accuracy.unwrap_or(f64::NAN),
        ),
    )
}

fn c7_macs() -> Outcome {
    let r = mac_count(&[32, 64, 64, 10], Some(&[4, 8, 2])).unwrap();
    // 64x32, 64x64, 10x64 weights; biases 64 + 64 + 10.
    let dense = 64 * 32 + 64 * 64 + 10 * 64;
    let low = 4 * (64 + 32) + 8 * (64 + 64) + 2 * (10 + 64);
    let exact = r.dense_macs == dense
        && r.lowrank_macs == low
        && r.params_dense == dense + 138
        && r.params_lowrank == low + 138;
    let ratio = mac_ratio(153.75e6, 18.50e6);
    outcome(
        exact && (ratio - 8.31).abs() <= 0.01,
        format!(
            "dense {} MACs / {} params, low-rank {} MACs / {} params (expected {dense}/{}/{low}/{}); table ratio {ratio:.4}",
            r.dense_macs,
            r.params_dense,
            r.lowrank_macs,
            r.params_lowrank,
            dense + 138,
            low + 138
        ),
    )
}

fn c8_bound() -> Outcome {
    let mut c = ConvergenceConstants {
        lipschitz: 1.7,
        grad_bound: 2.3,
        weight_bound: 9.1,
        weight_drift_bound: 0.0,
        grad_variance: 0.8,
        f_star: 0.05,
        aggregations: 40,
        batch_size: 20,
        clients: 10,
        local_iters: 25,
        total_iters: 1000,
        e: 1.0,
        eta: 0.1,
    };
    let f0 = 2.31;
    let mut terms = Vec::new();
    let mut sum_err = 0.0f64;
    for e in [0.5, 0.9, 0.99, 1.0] {
        c.e = e;
        let b = bound_rhs(&c, f0).unwrap();
        let (l, t) = (c.lipschitz, c.total_iters as f64);
        let hand = (f0 - c.f_star) / (c.eta * t)
            + c.eta * l * c.grad_variance.powi(2) / 200.0
            + 2.0 * c.eta.powi(2) * l * l * c.grad_bound.powi(2) * 625.0
            + 4.0 * (1.0 - e * e) * 40.0 * l * l * c.weight_bound.powi(2) / t;
        sum_err = sum_err.max((b.total - hand).abs());
        terms.push(b.compression);
    }
    let decreasing = terms.windows(2).all(|w| w[1] < w[0]);
    outcome(
        terms[3] == 0.0 && decreasing && sum_err <= 1e-12,
        format!("compression term over e = 0.5, 0.9, 0.99, 1.0: {terms:?}; max |total - hand sum| {sum_err:.1e}"),
    )
}

fn c9_sweep(cfg: &TrainConfig, at_099: &MetricsLog) -> Outcome {
    let mut low = sweep_logs(cfg, &[0.9]).unwrap();
    let high = sweep_logs(cfg, &[0.999]).unwrap();
    low.push(at_099.clone());
    low.extend(high);
    let logs = low;
    let rounds = logs[0].records.len();
    let ordered_rounds = (0..rounds)
        .filter(|&h| {
            let p: Vec<usize> = logs.iter().map(|l| l.records[h].round_params()).collect();
            p.windows(2).all(|w| w[0] <= w[1])
        })
        .count();
    let means: Vec<f64> = logs
        .iter()
        .map(|l| l.total_params() as f64 / rounds as f64)
        .collect();
    let acc: Vec<f64> = logs
        .iter()
        .map(|l| l.final_accuracy().unwrap_or(f64::NAN))
        .collect();
    outcome(
        ordered_rounds == rounds,
        format!(
            "e = 0.9, 0.99, 0.999: per-round parameters ordered in {ordered_rounds}/{rounds} rounds; mean per round {:.0?}; final accuracy {:.4?} (reported only)",
            means, acc
        ),
    )
}

fn c10_determinism(cfg: &TrainConfig, first: &MetricsLog) -> Outcome {
    let strip = |log: &MetricsLog| -> String {
        log.csv_string()
            .lines()
            .map(|l| l.rsplit_once(',').unwrap().0.to_string())
            .collect::<Vec<_>>()
            .join("\n")
    };
    let again = run_training(cfg).unwrap();
    let mut seq = cfg.clone();
    seq.parallel = false;
    let sequential = run_training(&seq).unwrap();
    let same = strip(first) == strip(&again) && strip(first) == strip(&sequential);
    outcome(
        same,
        format!(
            "rerun and sequential-client run give {} metrics CSV ({} bytes without wall time)",
            if same { "byte-identical" } else { "different" },
            strip(first).len()
        ),
    )
}

#[test]
fn acceptance() {
    let suite = Instant::now();
    let mut results = Vec::new();
    let mut timed = |id, name, budget: Option<u64>, f: &mut dyn FnMut() -> Outcome| {
        let t = Instant::now();
        let o = f();
        results.push(report(
            id,
            name,
            t.elapsed(),
            budget.map(Duration::from_secs),
            &o,
        ));
    };

    timed(
        1,
        "compression energy invariant",
        Some(30),
        &mut c1_energy_invariant,
    );
    timed(2, "svd correctness", Some(30), &mut c2_svd);
    timed(3, "gradient fidelity", Some(60), &mut c3_gradients);
    timed(
        4,
        "fedavg equivalence at e = 1",
        Some(60),
        &mut c4_fedavg_equivalence,
    );

    let reference = TrainConfig::reference();
    let t = Instant::now();
    let (avg, dlr) = paired_logs(&reference).unwrap();
    let shared = t.elapsed();
    timed(5, "rank monotonicity", Some(300), &mut || {
        c5_rank_monotonicity(&dlr)
    });
    timed(6, "communication efficiency", Some(300), &mut || {
        c6_communication(&avg, &dlr)
    });
    timed(7, "mac accounting", None, &mut c7_macs);
    timed(8, "bound evaluator", None, &mut c8_bound);
    timed(9, "threshold sweep", None, &mut || {
        c9_sweep(&reference, &dlr)
    });
    timed(10, "determinism", None, &mut || {
        c10_determinism(&reference, &dlr)
    });

    let total = suite.elapsed();
    let passed = results.iter().filter(|&&p| p).count();
    let summary = format!(
        "acceptance: {passed}/{} criteria passed; reference runs {:.1}s; suite {:.1}s (budget 600s)\n",
        results.len(),
        shared.as_secs_f64(),
        total.as_secs_f64()
    );
    std::io::stderr().write_all(summary.as_bytes()).unwrap();
    assert!(total <= Duration::from_secs(600), "suite over budget");
    assert_eq!(passed, results.len(), "{summary}");
}
