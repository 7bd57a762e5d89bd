//! End-to-end acceptance suite. Each criterion prints one line:
//! `ACCEPT <id> PASS|FAIL <detail>`. Runs without the libtest harness so the
//! lines show up in plain `cargo test` output:
//! `cargo test -p msb-core --test acceptance`.

use std::collections::BTreeMap;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use msb_core::auction::{
    bid_grid, check_truthfulness, critical_payment, msb, spa, uav_contracted_bid, AuctionOutcome, BidVector,
    MarketInstance,
};
use msb_core::diffusion::{action_distribution, DiffusionActor, NoiseSchedule};
use msb_core::env::{generate_round, AuctionEnv, ScenarioConfig, OBSERVATION_DIM};
use msb_core::experiment::{
    run_sweep, save, seed_means, sweep_with, train_agents, write_convergence, write_results, convergence_rows,
    AgentKind, ExperimentSpec, MechanismKind, ResultRow, Sweep, SweepVariable, TrainedAgents,
};
use msb_core::nn::{Activation, Mlp};
use msb_core::auction::Mechanism;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn verdict(id: &str, pass: bool, detail: String) {
    println!("ACCEPT {id} {} {detail}", if pass { "PASS" } else { "FAIL" });
    assert!(pass, "criterion {id} failed: {detail}");
}

/// Independent feasibility check: one winner, losers pay zero.
fn feasible(outcome: &AuctionOutcome, providers: usize) -> bool {
    outcome.allocation.len() == providers
        && outcome.payments.len() == providers
        && outcome.allocation.iter().filter(|&&x| x).count() == 1
        && outcome.allocation[outcome.winner]
        && outcome
            .payments
            .iter()
            .enumerate()
            .all(|(i, &p)| if i == outcome.winner { p >= 0.0 } else { p == 0.0 })
}

fn c1_strategy_proofness() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut violations = 0;
    let mut infeasible = 0;
    let markets = 10_000;
    for _ in 0..markets {
        let config = ScenarioConfig {
            num_bs: rng.random_range(1..=8),
            seed: rng.random(),
            ..ScenarioConfig::default()
        };
        let round = generate_round(&config, &mut rng).unwrap();
        let instance = MarketInstance {
            uav_bid: round.bids.uav_bid,
            bs_values: round.valuations[1..].to_vec(),
        };
        let rho = rng.random_range(1.0..=10.0);
        let grid = instance.deviation_grid(rho, 100);
        if check_truthfulness(&instance, rho, &grid).unwrap().is_some() {
            violations += 1;
        }
        if !feasible(&msb(&instance.truthful_bids().unwrap(), rho).unwrap(), config.num_bs + 1) {
            infeasible += 1;
        }
    }
    let elapsed = start.elapsed();
    verdict(
        "1-strategy-proofness",
        violations == 0 && infeasible == 0 && elapsed < Duration::from_secs(60),
        format!("{markets} markets, {violations} counterexamples, {:.1}s (limit 60s)", elapsed.as_secs_f64()),
    );
}

fn c2_homogeneity() {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let samples = 100_000;
    let mut worst = 0.0f64;
    let mut winner_changes = 0;
    for _ in 0..samples {
        let n = rng.random_range(1..=8);
        let bids = BidVector::new(
            rng.random_range(0.0..10.0),
            (0..n).map(|_| rng.random_range(0.0..10.0)).collect(),
        )
        .unwrap();
        let rho = rng.random_range(1.0..=10.0);
        let theta = 100.0 * (1.0 - rng.random::<f64>());
        let scaled = BidVector::new(theta * bids.uav_bid, bids.bs_bids.iter().map(|b| theta * b).collect()).unwrap();
        let bidder = rng.random_range(1..=n);
        let others = |b: &BidVector| -> Vec<f64> {
            std::iter::once(b.uav_bid)
                .chain(b.bs_bids.iter().enumerate().filter(|(i, _)| i + 1 != bidder).map(|(_, &x)| x))
                .collect()
        };
        let psi = critical_payment(&others(&bids), rho).unwrap();
        let psi_scaled = critical_payment(&others(&scaled), rho).unwrap();
        if psi > 0.0 {
            worst = worst.max(((psi_scaled - theta * psi) / (theta * psi)).abs());
        } else if psi_scaled != 0.0 {
            worst = f64::INFINITY;
        }
        if msb(&bids, rho).unwrap().winner != msb(&scaled, rho).unwrap().winner {
            winner_changes += 1;
        }
    }
    verdict(
        "2-homogeneity",
        worst <= 1e-12 && winner_changes == 0,
        format!("{samples} samples, max rel err {worst:.2e} (limit 1e-12), {winner_changes} winner changes"),
    );
}

fn c3_feasibility() {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let mut checked = 0;
    let mut bad = 0;
    for _ in 0..100_000 {
        let n = rng.random_range(1..=9);
        // Coarse values make exact ties common.
        let bids = BidVector::new(
            rng.random_range(0..5) as f64,
            (0..n).map(|_| rng.random_range(0..5) as f64).collect(),
        )
        .unwrap();
        let rho = if rng.random_bool(0.3) { 1.0 } else { rng.random_range(1.0..=10.0) };
        for outcome in [msb(&bids, rho).unwrap(), spa(&bids).unwrap()] {
            checked += 1;
            bad += usize::from(!feasible(&outcome, n + 1));
        }
    }
    for seed in 0..3 {
        let mut env = AuctionEnv::new(ScenarioConfig { seed, ..ScenarioConfig::default() }).unwrap();
        for i in 0..2_000 {
            let step = match i % 3 {
                0 => env.step(i % 20).unwrap(),
                1 => env.step_with(Mechanism::Spa).unwrap(),
                _ => env.step_with(Mechanism::Msb { rho: 1.0 + (i % 7) as f64 }).unwrap(),
            };
            checked += 1;
            bad += usize::from(!feasible(&step.outcome, 6));
        }
    }
    verdict("3-feasibility", bad == 0, format!("{checked} outcomes, {bad} infeasible"));
}

fn relative_error(a: f64, f: f64) -> f64 {
    (a - f).abs() / a.abs().max(f.abs()).max(1e-6)
}

fn c4_gradient_correctness() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let acts = [Activation::Relu, Activation::Tanh, Activation::Mish, Activation::Identity];
    let h = 1e-6;
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let depth = rng.random_range(1..=3);
        let mut sizes = vec![rng.random_range(1..=6)];
        for _ in 0..depth {
            sizes.push(rng.random_range(1..=8));
        }
        sizes.push(rng.random_range(1..=4));
        let hidden = acts[rng.random_range(0..acts.len())];
        let output = acts[rng.random_range(0..acts.len())];
        let mut net = Mlp::new(&sizes, hidden, output, &mut rng).unwrap();
        for b in net.biases_mut() {
            b.mapv_inplace(|_| rng.random_range(-0.5..0.5));
        }
        let rows = rng.random_range(1..=3);
        let x = Array2::from_shape_simple_fn((rows, sizes[0]), || rng.random_range(-2.0..2.0));
        let c = Array2::from_shape_simple_fn((rows, *sizes.last().unwrap()), || rng.random_range(-1.0..1.0));
        let loss = |n: &Mlp, x: &Array2<f64>| (&n.forward_batch(x.view()).unwrap() * &c).sum();

        let (_, mut tape) = net.forward_tape(x.view()).unwrap();
        let (grads, dx) = net.backward(&mut tape, c.view()).unwrap();
        let analytic = grads.flatten();
        let params = net.flatten();
        let mut probe = net.clone();
        for (i, a) in analytic.iter().enumerate() {
            let mut p = params.clone();
            p[i] += h;
            probe.set_flat(&p).unwrap();
            let up = loss(&probe, &x);
            p[i] -= 2.0 * h;
            probe.set_flat(&p).unwrap();
            let down = loss(&probe, &x);
            worst = worst.max(relative_error(*a, (up - down) / (2.0 * h)));
        }
        for idx in 0..x.len() {
            let (r, col) = (idx / x.ncols(), idx % x.ncols());
            let mut xp = x.clone();
            xp[[r, col]] += h;
            let up = loss(&net, &xp);
            xp[[r, col]] -= 2.0 * h;
            let down = loss(&net, &xp);
            worst = worst.max(relative_error(dx[[r, col]], (up - down) / (2.0 * h)));
        }
    }
    let elapsed = start.elapsed();
    verdict(
        "4-gradients",
        worst < 1e-4 && elapsed < Duration::from_secs(30),
        format!("100 nets, max rel err {worst:.2e} (limit 1e-4), {:.1}s (limit 30s)", elapsed.as_secs_f64()),
    );
}

fn c5_diffusion_sanity() {
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let schedule = NoiseSchedule::linear(5, 1e-4, 2e-2).unwrap();
    let actor = DiffusionActor::new(OBSERVATION_DIM, 20, &[64, 64], schedule.clone(), &mut rng).unwrap();
    let obs = Array2::from_shape_simple_fn((500, OBSERVATION_DIM), || rng.random_range(-3.0..3.0));
    let (x0, _) = actor.denoise_batch(obs.view(), &mut rng, false).unwrap();
    let mut worst_sum = 0.0f64;
    for row in x0.rows() {
        worst_sum = worst_sum.max((action_distribution(&row.to_vec()).iter().sum::<f64>() - 1.0).abs());
    }
    for scale in [1e-3, 1.0, 50.0, 700.0] {
        let logits: Vec<f64> = (0..20).map(|_| scale * rng.random_range(-1.0..1.0)).collect();
        worst_sum = worst_sum.max((action_distribution(&logits).iter().sum::<f64>() - 1.0).abs());
    }

    let samples = 100_000;
    let x_start = [0.7];
    let mut worst_var = 0.0f64;
    for k in 1..=schedule.steps() {
        let theory = schedule.marginal_variance(k);
        let iterative: Vec<f64> = (0..samples).map(|_| schedule.forward_noise(&x_start, k, &mut rng).unwrap()[0]).collect();
        let closed: Vec<f64> =
            (0..samples).map(|_| schedule.forward_noise_closed(&x_start, k, &mut rng).unwrap()[0]).collect();
        let var = |xs: &[f64]| {
            let m = xs.iter().sum::<f64>() / xs.len() as f64;
            xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64
        };
        let (vi, vc) = (var(&iterative), var(&closed));
        worst_var = worst_var.max(((vi - vc) / vc).abs()).max(((vi - theory) / theory).abs());
    }
    verdict(
        "5-diffusion",
        worst_sum <= 1e-9 && worst_var <= 0.02,
        format!("max |sum-1| {worst_sum:.1e} (limit 1e-9), max variance gap {:.2}% (limit 2%)", 100.0 * worst_var),
    );
}

/// Direct enumeration: profit at every grid point from scratch.
fn brute_force_bid(vmax: &[f64], v0: &[f64], grid: &[f64]) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, &b) in grid.iter().enumerate() {
        let mut total = 0.0;
        for (&m, &u) in vmax.iter().zip(v0) {
            if m <= b {
                total += u - m;
            }
        }
        let profit = total / vmax.len() as f64;
        if profit > best.1 {
            best = (i, profit);
        }
    }
    best.0
}

fn c6_contracted_bid_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(606);
    let mut mismatches = 0;
    let cases = 100;
    for case in 0..2 * cases {
        let n = rng.random_range(1..=20);
        let (vmax, v0, grid): (Vec<f64>, Vec<f64>, Vec<f64>) = if case < cases {
            // Integer data: every profit is exact, so ties are genuine.
            let vmax = (0..n).map(|_| rng.random_range(0..50) as f64).collect();
            let v0 = (0..n).map(|_| rng.random_range(0..50) as f64).collect();
            (vmax, v0, (0..50).map(f64::from).collect())
        } else {
            let vmax: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..30.0)).collect();
            let v0 = (0..n).map(|_| rng.random_range(0.0..30.0)).collect();
            let top = vmax.iter().copied().fold(0.0, f64::max);
            (vmax, v0, bid_grid(top, 50))
        };
        let got = uav_contracted_bid(&vmax, &v0, &grid).unwrap().index;
        if got != brute_force_bid(&vmax, &v0, &grid) {
            mismatches += 1;
        }
    }
    verdict(
        "6-contracted-bid",
        mismatches == 0,
        format!("{} histories (<=20 samples, 50-point grid), {mismatches} index mismatches", 2 * cases),
    );
}

const SEEDS: usize = 5;

fn desk_spec() -> ExperimentSpec {
    ExperimentSpec {
        name: "desk".into(),
        mechanisms: vec![MechanismKind::Dmsb, MechanismKind::Spa, MechanismKind::MyopicMsb, MechanismKind::OptimalMsb],
        agents: vec![AgentKind::Greedy, AgentKind::Random],
        repetitions: SEEDS,
        train_steps: 50_000,
        eval_rounds: 1_000,
        ..ExperimentSpec::default()
    }
}

struct Desk {
    trained: Vec<TrainedAgents>,
    train_time: Duration,
}

/// Trains the diffusion agent once per seed; shared by criteria 7 and 8.
fn desk() -> &'static std::sync::Mutex<Desk> {
    static DESK: OnceLock<std::sync::Mutex<Desk>> = OnceLock::new();
    DESK.get_or_init(|| {
        let spec = desk_spec();
        let start = Instant::now();
        let trained = spec.seeds().map(|s| train_agents(&spec, s).unwrap()).collect();
        std::sync::Mutex::new(Desk {
            trained,
            train_time: start.elapsed(),
        })
    })
}

fn by_method(rows: &[ResultRow]) -> BTreeMap<(String, u64), f64> {
    rows.iter().map(|r| ((r.method.clone(), r.seed), r.total_surplus)).collect()
}

fn c7_ordering_at_desk_scale() {
    let spec = desk_spec();
    let mut desk = desk().lock().unwrap_or_else(|e| e.into_inner());
    // Training time is recorded inside `desk`; only evaluation is timed here.
    let start = Instant::now();
    let rows = sweep_with(&spec, &mut desk.trained).unwrap();
    let elapsed = desk.train_time + start.elapsed();
    let surplus = by_method(&rows);
    let seeds: Vec<u64> = spec.seeds().collect();
    for m in ["DMSB", "greedy", "random", "SPA", "MyopicMSB", "OptimalMSB"] {
        let per_seed: Vec<String> = seeds.iter().map(|&s| format!("{:.2}", surplus[&(m.to_string(), s)])).collect();
        println!("  {m:<10} {}", per_seed.join(" "));
    }
    let wins = |other: &str| {
        seeds
            .iter()
            .filter(|&&s| surplus[&("DMSB".to_string(), s)] >= surplus[&(other.to_string(), s)])
            .count()
    };
    let mean = |m: &str| seeds.iter().map(|&s| surplus[&(m.to_string(), s)]).sum::<f64>() / seeds.len() as f64;
    let (vs_random, vs_greedy) = (wins("random"), wins("greedy"));
    let (dmsb, spa_mean) = (mean("DMSB"), mean("SPA"));
    verdict(
        "7-ordering",
        vs_random >= 4 && vs_greedy >= 4 && dmsb >= spa_mean && elapsed < Duration::from_secs(30 * 60),
        format!(
            "DMSB>=random in {vs_random}/5, DMSB>=greedy in {vs_greedy}/5, mean DMSB {dmsb:.3} vs SPA {spa_mean:.3}, {:.0}s (limit 1800s)",
            elapsed.as_secs_f64()
        ),
    );
}

fn nondecreasing(points: &[(f64, f64)]) -> bool {
    points.windows(2).all(|w| w[1].1 >= w[0].1)
}

fn c8_trends() {
    let mechanisms = ["DMSB", "SPA", "MyopicMSB", "OptimalMSB"];
    let mut desk = desk().lock().unwrap_or_else(|e| e.into_inner());
    let mut spec = desk_spec();
    spec.agents.clear();

    spec.sweep = Some(Sweep {
        variable: SweepVariable::Bandwidth,
        values: vec![20.0, 30.0, 40.0, 50.0, 60.0],
    });
    let rows = sweep_with(&spec, &mut desk.trained).unwrap();
    let mut ok = true;
    for m in mechanisms {
        let curve = seed_means(&rows, m, |r| r.total_surplus);
        println!("  bandwidth {m:<10} {:?}", curve.iter().map(|p| (p.1 * 100.0).round() / 100.0).collect::<Vec<_>>());
        ok &= nondecreasing(&curve);
    }

    spec.sweep = Some(Sweep {
        variable: SweepVariable::TaskSize,
        values: vec![20.0, 25.0, 30.0, 35.0, 40.0],
    });
    let rows = sweep_with(&spec, &mut desk.trained).unwrap();
    for m in mechanisms {
        let curve = seed_means(&rows, m, |r| r.latency);
        println!("  task size {m:<10} {:?}", curve.iter().map(|p| (p.1 * 1e4).round() / 1e4).collect::<Vec<_>>());
        ok &= nondecreasing(&curve);
    }
    verdict(
        "8-trends",
        ok,
        format!("{SEEDS} seeds: surplus nondecreasing in bandwidth and delay nondecreasing in task size for {mechanisms:?}"),
    );
}

fn pipeline_bytes(dir: &std::path::Path) -> Vec<Vec<u8>> {
    let spec = ExperimentSpec {
        name: "determinism".into(),
        agents: vec![AgentKind::Diffusion, AgentKind::Ppo, AgentKind::Greedy, AgentKind::Random],
        repetitions: 2,
        seed: 11,
        train_steps: 1_500,
        eval_rounds: 200,
        smoothing_window: 100,
        sweep: Some(Sweep {
            variable: SweepVariable::Bandwidth,
            values: vec![20.0, 60.0],
        }),
        ..ExperimentSpec::default()
    };
    let (rows, trained) = run_sweep(&spec).unwrap();
    let curves = convergence_rows(&spec, &trained).unwrap();
    let a = save(dir, "results.csv", |b| write_results(&rows, b)).unwrap();
    let b = save(dir, "convergence.csv", |w| write_convergence(&curves, spec.smoothing_window, w)).unwrap();
    vec![std::fs::read(a).unwrap(), std::fs::read(b).unwrap()]
}

fn c9_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let first = pipeline_bytes(&dir.path().join("a"));
    let second = pipeline_bytes(&dir.path().join("b"));
    let rows = first[0].iter().filter(|&&c| c == b'\n').count();
    verdict(
        "9-determinism",
        first == second,
        format!("train + sweep run twice: {} result lines, CSVs byte-identical: {}", rows, first == second),
    );
}

fn main() {
    let criteria: [(&str, fn()); 9] = [
        ("c1_strategy_proofness", c1_strategy_proofness),
        ("c2_homogeneity", c2_homogeneity),
        ("c3_feasibility", c3_feasibility),
        ("c4_gradient_correctness", c4_gradient_correctness),
        ("c5_diffusion_sanity", c5_diffusion_sanity),
        ("c6_contracted_bid_oracle", c6_contracted_bid_oracle),
        ("c7_ordering_at_desk_scale", c7_ordering_at_desk_scale),
        ("c8_trends", c8_trends),
        ("c9_determinism", c9_determinism),
    ];
    let mut failed = Vec::new();
    for (name, criterion) in criteria {
        if std::panic::catch_unwind(criterion).is_err() {
            failed.push(name);
        }
    }
    println!("acceptance: {} passed, {} failed {:?}", criteria.len() - failed.len(), failed.len(), failed);
    if !failed.is_empty() {
        std::process::exit(1);
    }
}
