//! Acceptance gate: one line per criterion, nonzero exit if any fails.
//!
//! Run with `cargo test -p dsiml-core --test acceptance`.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use dsiml::bqp::{
    assemble_item_subproblem, assemble_user_subproblem, solve_exhaustive, solve_flip_descent,
    BqpInstance,
};
use dsiml::codes::{hamming_distance, inner_product, BinaryCodeMatrix, EmbeddingMatrix};
use dsiml::data::{split_train_test, InteractionSet, NPairTuple, TripletBatch};
use dsiml::eval::{evaluate_model, rq4_settings, run_rq4, Model};
use dsiml::objective::{code_triplet_stats, siml_gradients, siml_objective, softplus, Hyperparams};
use dsiml::retrieval::{benchmark_speedup, naive_top_k, RetrievalIndex};
use dsiml::trainer::{train_dsiml_with, DsimlOptions, Init, Solver, Stage};
use dsiml::varbound::{jj_bound, VariationalState};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn signs(rng: &mut impl Rng, d: usize) -> Vec<i8> {
    (0..d)
        .map(|_| if rng.random::<bool>() { 1 } else { -1 })
        .collect()
}

fn hamming_identity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut mismatches = 0;
    let mut pairs = 0;
    for d in [8usize, 20, 64] {
        let a = BinaryCodeMatrix::random(100_000, d, &mut rng);
        let b = BinaryCodeMatrix::random(100_000, d, &mut rng);
        for r in 0..a.rows() {
            let ham = hamming_distance(a.row(r), b.row(r)).unwrap() as i64;
            // Inner product straight from the signs, independent of popcount.
            let inner: i64 = (0..d).map(|k| i64::from(a.get(r, k) * b.get(r, k))).sum();
            if 2 * ham != d as i64 - inner || inner != inner_product(a.row(r), b.row(r)).unwrap() {
                mismatches += 1;
            }
            pairs += 1;
        }
    }
    outcome(
        mismatches == 0,
        format!("{pairs} pairs, {mismatches} mismatches"),
    )
}

fn jj_majorization() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut worst_gap, mut worst_tight) = (f64::INFINITY, 0.0f64);
    for _ in 0..100_000 {
        let t: f64 = rng.random_range(-50.0..=50.0);
        let xi: f64 = rng.random_range(-50.0..=50.0);
        worst_gap = worst_gap.min(jj_bound(t, xi) - softplus(t));
        worst_tight = worst_tight
            .max((jj_bound(t, t) - softplus(t)).abs())
            .max((jj_bound(t, -t) - softplus(t)).abs());
    }
    outcome(
        worst_gap >= -1e-9 && worst_tight <= 1e-9,
        format!("min gap {worst_gap:.3e}, max tightness error {worst_tight:.3e}"),
    )
}

fn y_identity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let d = 20;
    let mut worst = 0.0f64;
    let mut exact = true;
    for &gamma in &[0.5, 1.0, 1.5] {
        for _ in 0..10_000 {
            let users = BinaryCodeMatrix::from_signs(1, d, &signs(&mut rng, d)).unwrap();
            let mut item_signs = signs(&mut rng, d);
            item_signs.extend(signs(&mut rng, d));
            let items = BinaryCodeMatrix::from_signs(2, d, &item_signs).unwrap();
            let t = dsiml::data::Triplet {
                user: 0,
                pos: 0,
                neg: 1,
            };
            let y = code_triplet_stats(&users, &items, t, gamma).y;
            let (u, p, n) = (
                users.row(0).to_f64(),
                items.row(0).to_f64(),
                items.row(1).to_f64(),
            );
            let g2 = gamma * gamma;
            let up: f64 = (0..d).map(|k| (u[k] - p[k]).powi(2)).sum();
            let apex: f64 = (0..d).map(|k| (2.0 * n[k] - u[k] - p[k]).powi(2)).sum();
            let lhs = 2.0 * y + (2.0 - 6.0 * g2) * d as f64;
            let rhs = up - g2 * apex;
            worst = worst.max((lhs - rhs).abs());
            exact &= lhs == rhs;
        }
    }
    outcome(
        worst <= 1e-9,
        format!("30000 triples, max error {worst:.3e}, bit-exact {exact}"),
    )
}

/// Random codes, batch and (non-tight) variational parameters.
fn random_problem(
    rng: &mut ChaCha8Rng,
    d: usize,
) -> (
    BinaryCodeMatrix,
    BinaryCodeMatrix,
    TripletBatch,
    VariationalState,
    Hyperparams,
) {
    let (n_users, n_items, n_neg) = (3, 7, 2);
    let users = BinaryCodeMatrix::random(n_users, d, rng);
    let items = BinaryCodeMatrix::random(n_items, d, rng);
    let mut tuples = Vec::new();
    for u in 0..n_users {
        for _ in 0..2 {
            let mut ids: Vec<usize> = (0..n_items).collect();
            rand::seq::SliceRandom::shuffle(ids.as_mut_slice(), rng);
            tuples.push(NPairTuple {
                user: u,
                positive: ids[0],
                negatives: ids[1..=n_neg].to_vec(),
            });
        }
    }
    let batch = TripletBatch::new(tuples, n_neg).unwrap();
    let hp = Hyperparams {
        dim: d,
        gamma: rng.random_range(0.2..1.7),
        lambda: rng.random_range(0.0..3.0),
        ..Hyperparams::default()
    };
    let mut state = VariationalState::new(batch.len());
    for t in 0..batch.len() {
        state.set_phi(t, rng.random_range(-2.0..2.0));
        state.set_eta(t, rng.random_range(-40.0..40.0));
    }
    (users, items, batch, state, hp)
}

fn partial_bound(
    users: &BinaryCodeMatrix,
    items: &BinaryCodeMatrix,
    batch: &TripletBatch,
    state: &VariationalState,
    hp: &Hyperparams,
    keep: impl Fn(dsiml::data::Triplet) -> bool,
) -> f64 {
    batch
        .triplets()
        .enumerate()
        .filter(|(_, t)| keep(*t))
        .map(|(k, t)| {
            let s = code_triplet_stats(users, items, t, hp.gamma);
            jj_bound(s.x, state.phi()[k]) + hp.lambda * jj_bound(s.y, state.eta()[k])
        })
        .sum()
}

fn all_codes(d: usize) -> impl Iterator<Item = Vec<i8>> {
    (0..1u32 << d).map(move |m| {
        (0..d)
            .map(|k| if m >> k & 1 == 1 { 1 } else { -1 })
            .collect()
    })
}

fn bqp_difference_identity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst = 0.0f64;
    let mut checked = 0;
    for case in 0..200 {
        let d = rng.random_range(2..=10);
        let (users, items, batch, state, hp) = random_problem(&mut rng, d);
        // Q(b) - P(b) must be the same for every b; its spread bounds
        // |(Q(b1) - Q(b2)) - (P(b1) - P(b2))| over all pairs.
        let gaps: Vec<(f64, f64)> = if case % 2 == 0 {
            let u = batch.triplet(0).user;
            let inst = assemble_user_subproblem(u, &users, &items, &state, &batch, &hp).unwrap();

            all_codes(d)
                .map(|b| {
                    let mut trial = users.clone();
                    trial.set_row(u, &b).unwrap();
                    let p = partial_bound(&trial, &items, &batch, &state, &hp, |t| t.user == u);
                    (inst.value(&b) - p, p)
                })
                .collect::<Vec<_>>()
        } else {
            let i = batch.triplet(0).neg;
            let inst = assemble_item_subproblem(i, &users, &items, &state, &batch, &hp).unwrap();

            all_codes(d)
                .map(|b| {
                    let mut trial = items.clone();
                    trial.set_row(i, &b).unwrap();
                    let p = partial_bound(&users, &trial, &batch, &state, &hp, |t| {
                        t.pos == i || t.neg == i
                    });
                    (inst.value(&b) - p, p)
                })
                .collect::<Vec<_>>()
        };
        let lo = gaps.iter().map(|g| g.0).fold(f64::INFINITY, f64::min);
        let hi = gaps.iter().map(|g| g.0).fold(f64::NEG_INFINITY, f64::max);
        let scale = gaps.iter().map(|g| g.1.abs()).fold(1.0, f64::max);
        worst = worst.max((hi - lo) / scale);
        checked += gaps.len() * gaps.len();
    }
    outcome(
        worst <= 1e-6,
        format!("{checked} code pairs over 200 subproblems, max relative error {worst:.3e}"),
    )
}

fn solver_quality() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (mut optimal, mut above_warm) = (0, 0);
    for case in 0..100u64 {
        let inst = BqpInstance::random(12, &mut rng);
        let warm = signs(&mut rng, 12);
        let (_, best) = solve_exhaustive(&inst).unwrap();
        let (b, v) = solve_flip_descent(&inst, &warm, 8, case).unwrap();
        assert_eq!(v, inst.value(&b));
        if v <= best + 1e-9 {
            optimal += 1;
        }
        if v > inst.value(&warm) {
            above_warm += 1;
        }
    }
    outcome(
        optimal >= 80 && above_warm == 0,
        format!("optimum on {optimal}/100, above warm start on {above_warm}"),
    )
}

fn tiny_data() -> InteractionSet {
    InteractionSet::from_positives(
        8,
        vec![vec![0, 1, 2], vec![1, 2, 3], vec![4, 5, 6], vec![5, 6, 7]],
    )
    .unwrap()
}

fn tiny_hp(seed: u64) -> Hyperparams {
    Hyperparams {
        dim: 8,
        n_neg: 4,
        batch_users: 1,
        max_iters: 10,
        tol: 0.0,
        seed,
        ..Hyperparams::default()
    }
}

fn mm_monotonicity() -> Outcome {
    let opts = DsimlOptions {
        init: Init::RandomSigns,
        solver: Solver::Exhaustive,
        batch: None,
    };
    let out = train_dsiml_with(&tiny_data(), &tiny_hp(6), &opts).unwrap();
    let recs = &out.codes.report.records;
    let max_increase = recs
        .windows(2)
        .map(|w| w[1].bound.unwrap() - w[0].bound.unwrap())
        .fold(f64::NEG_INFINITY, f64::max);
    let max_gap = recs
        .iter()
        .filter(|r| matches!(r.stage, Stage::UserRefresh | Stage::ItemRefresh))
        .map(|r| (r.bound.unwrap() - r.objective).abs())
        .fold(0.0, f64::max);
    let iterations = out.codes.report.iterations;
    let first = recs[0].bound.unwrap();
    let last = out.codes.report.final_bound().unwrap();
    outcome(
        iterations == 10 && max_increase <= 0.0 && max_gap <= 1e-9,
        format!(
            "{iterations} iterations, {} records, bound {first:.4} -> {last:.4}, largest step {max_increase:.3e}, refresh gap {max_gap:.3e}",
            recs.len()
        ),
    )
}

fn gradient_check() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let d = 8;
    let hp = Hyperparams {
        dim: d,
        gamma: 1.2,
        lambda: 0.7,
        ..Hyperparams::default()
    };
    let std = rand_distr::Normal::new(0.0, 0.5).unwrap();
    let mut worst = 0.0f64;
    for _ in 0..10 {
        let users = EmbeddingMatrix::new(1, d, (0..d).map(|_| rng.sample(std)).collect()).unwrap();
        let items =
            EmbeddingMatrix::new(2, d, (0..2 * d).map(|_| rng.sample(std)).collect()).unwrap();
        let batch = TripletBatch::new(
            vec![NPairTuple {
                user: 0,
                positive: 0,
                negatives: vec![1],
            }],
            1,
        )
        .unwrap();
        let g = siml_gradients(&users, &items, &batch, &hp).unwrap();
        for _ in 0..10 {
            let coord = rng.random_range(0..3 * d);
            let h = 1e-5;
            let eval = |delta: f64| {
                let (mut u, mut v) = (users.clone(), items.clone());
                if coord < d {
                    u.as_mut_slice()[coord] += delta;
                } else {
                    v.as_mut_slice()[coord - d] += delta;
                }
                siml_objective(&u, &v, &batch, &hp).unwrap()
            };
            let numeric = (eval(h) - eval(-h)) / (2.0 * h);
            let analytic = if coord < d {
                g.users.as_slice()[coord]
            } else {
                g.items.as_slice()[coord - d]
            };
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
            worst = worst.max(rel);
        }
    }
    outcome(
        worst <= 1e-4,
        format!("100 coordinates, max relative error {worst:.3e}"),
    )
}

fn retrieval_exactness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut mismatches = 0;
    for _ in 0..50 {
        let m = rng.random_range(1..=10_000);
        let d = [8, 20, 64][rng.random_range(0..3)];
        let items = BinaryCodeMatrix::random(m, d, &mut rng);
        let query = BinaryCodeMatrix::random(1, d, &mut rng);
        let mut excluded: Vec<usize> = (0..rng.random_range(0..20))
            .map(|_| rng.random_range(0..m))
            .collect();
        excluded.sort_unstable();
        excluded.dedup();
        let index = RetrievalIndex::with_exclusions(items.clone(), vec![excluded.clone()]).unwrap();
        let k = rng.random_range(1..=m.min(500));
        if index.top_k(query.row(0), k, Some(0)).unwrap()
            != naive_top_k(&items, query.row(0), k, &excluded)
        {
            mismatches += 1;
        }
        if index.top_k(query.row(0), k, None).unwrap() != naive_top_k(&items, query.row(0), k, &[])
        {
            mismatches += 1;
        }
    }
    outcome(
        mismatches == 0,
        format!("50 configurations, {mismatches} mismatches"),
    )
}

fn retrieval_speedup() -> Outcome {
    let r = benchmark_speedup(100_000, 64, 100, 9).unwrap();
    outcome(
        r.speedup >= 3.0,
        format!(
            "hamming {:.1} q/s, float {:.1} q/s, speedup {:.2}x",
            r.hamming_qps, r.float_qps, r.speedup
        ),
    )
}

fn rq4_direction() -> Outcome {
    let seeds: Vec<u64> = (0..10).collect();
    let settings = rq4_settings();
    let hp = Hyperparams::default();
    let report = run_rq4(&seeds, &hp, &settings).unwrap();
    let (s, c) = (
        report.mean_siml_ndcg("imbalanced"),
        report.mean_cml_ndcg("imbalanced"),
    );
    let (sb, cb) = (
        report.mean_siml_ndcg("balanced"),
        report.mean_cml_ndcg("balanced"),
    );
    let ratio = s / c;
    outcome(
        ratio >= 1.05,
        format!(
            "imbalanced NDCG@10 siml {s:.4} vs cml {c:.4} (ratio {ratio:.3}); balanced control {sb:.4} vs {cb:.4} (ratio {:.3})",
            sb / cb
        ),
    )
}

/// Not a criterion: the baseline with its margin scaled to the norm ball.
fn rq4_margin_sensitivity() -> String {
    let seeds: Vec<u64> = (0..10).collect();
    let settings = &rq4_settings()[..1];
    let mut parts = Vec::new();
    for margin in [0.5, 2.0, 8.0] {
        let hp = Hyperparams {
            cml_margin: margin,
            ..Hyperparams::default()
        };
        let r = run_rq4(&seeds, &hp, settings).unwrap();
        parts.push(format!(
            "margin {margin}: siml/cml {:.3}",
            r.mean_siml_ndcg("imbalanced") / r.mean_cml_ndcg("imbalanced")
        ));
    }
    parts.join(", ")
}

fn init_ordering() -> Outcome {
    let data = tiny_data();
    let mut wins = 0;
    for seed in 0..10 {
        let hp = tiny_hp(seed);
        let run = |init| {
            let opts = DsimlOptions {
                init,
                solver: Solver::Exhaustive,
                batch: None,
            };
            train_dsiml_with(&data, &hp, &opts)
                .unwrap()
                .codes
                .report
                .final_bound()
                .unwrap()
        };
        if run(Init::Siml) <= run(Init::RandomSigns) {
            wins += 1;
        }
    }
    outcome(
        wins >= 7,
        format!("sign-of-continuous init at or below random init in {wins}/10 runs"),
    )
}

fn random_model_sanity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let (n_users, m, d, k) = (2000, 1000, 64, 10);
    let positives: Vec<Vec<usize>> = (0..n_users)
        .map(|_| {
            let n = rng.random_range(5..=40);
            rand::seq::index::sample(&mut rng, m, n).into_vec()
        })
        .collect();
    let data = split_train_test(
        &InteractionSet::from_positives(m, positives).unwrap(),
        0.8,
        12,
    )
    .unwrap();
    let users = BinaryCodeMatrix::random(n_users, d, &mut rng);
    let items = BinaryCodeMatrix::random(m, d, &mut rng);
    let metrics = evaluate_model(
        &Model::Codes {
            users: &users,
            items: &items,
        },
        &data,
        &[k],
    )
    .unwrap();
    // Under a uniformly random ranking of the C candidates, hits in the top
    // k are hypergeometric.
    let (mut mean, mut var, mut n) = (0.0, 0.0, 0.0);
    for u in 0..n_users {
        let t = data.test(u).len() as f64;
        if t == 0.0 {
            continue;
        }
        let c = (m - data.train(u).len()) as f64;
        let kk = (k as f64).min(c);
        mean += kk / c;
        var += kk * (t / c) * (1.0 - t / c) * (c - kk) / (c - 1.0) / (t * t);
        n += 1.0;
    }
    let expected = mean / n;
    let sigma = var.sqrt() / n;
    let measured = metrics.hr[0];
    outcome(
        (measured - expected).abs() <= 3.0 * sigma,
        format!(
            "{} users, HR@{k} {measured:.5} vs expected {expected:.5} (3 sigma = {:.5})",
            metrics.users,
            3.0 * sigma
        ),
    )
}

type Check = (usize, &'static str, fn() -> Outcome, Duration);

fn main() -> ExitCode {
    let checks: Vec<Check> = vec![
        (
            1,
            "hamming identity",
            hamming_identity,
            Duration::from_secs(5),
        ),
        (
            2,
            "quadratic bound majorizes softplus",
            jj_majorization,
            Duration::from_secs(5),
        ),
        (
            3,
            "margin statistic identity",
            y_identity,
            Duration::from_secs(5),
        ),
        (
            4,
            "subproblem assembly",
            bqp_difference_identity,
            Duration::from_secs(60),
        ),
        (
            5,
            "flip-descent quality",
            solver_quality,
            Duration::from_secs(60),
        ),
        (
            6,
            "majorize-minimize monotonicity",
            mm_monotonicity,
            Duration::from_secs(30),
        ),
        (
            7,
            "continuous gradient check",
            gradient_check,
            Duration::from_secs(5),
        ),
        (
            8,
            "retrieval exactness",
            retrieval_exactness,
            Duration::from_secs(30),
        ),
        (
            9,
            "retrieval speedup",
            retrieval_speedup,
            Duration::from_secs(120),
        ),
        (
            10,
            "imbalanced synthetic direction",
            rq4_direction,
            Duration::from_secs(600),
        ),
        (
            11,
            "initialization ordering",
            init_ordering,
            Duration::from_secs(600),
        ),
        (
            12,
            "random-model hit rate",
            random_model_sanity,
            Duration::from_secs(60),
        ),
    ];
    let mut failed = 0;
    for (id, name, check, budget) in checks {
        let start = Instant::now();
        let result = check();
        let elapsed = start.elapsed();
        let pass = result.pass && elapsed <= budget;
        if !pass {
            failed += 1;
        }
        println!(
            "[{}] {id:>2} {name}: {} ({:.2}s, budget {}s)",
            if pass { "PASS" } else { "FAIL" },
            result.detail,
            elapsed.as_secs_f64(),
            budget.as_secs()
        );
        if id == 10 {
            println!(
                "[INFO] 10 baseline margin sensitivity: {}",
                rq4_margin_sensitivity()
            );
        }
    }
    println!("{} of 12 criteria passed", 12 - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
