//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails.

mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::time::{Duration, Instant};

use common::oracle;
use common::scenarios::{cluster_task, four_device, staged_task, without_joins, JOIN_ROUNDS, SEEDS};
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sqmd_core::client::Split;
use sqmd_core::nn::{self, Activation, Batch, ModelParams, ModelSpec};
use sqmd_core::protocol::{messenger_divergence, score_quality, Messenger, ReferenceSet};
use sqmd_core::server::SimilaritySelection;
use sqmd_core::sim::{run_simulation, Protocol, RunRecord, SimConfig, Simulation};
use sqmd_core::ClientId;

type Outcome = Result<String, String>;

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn random_probs(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    let mut m = Array2::from_shape_fn((rows, cols), |_| (rng.random_range(-4.0..4.0f64)).exp());
    for mut row in m.rows_mut() {
        // Occasionally exercise the clamp with exact zeros.
        if rng.random_bool(0.2) {
            let c = rng.random_range(0..cols);
            row[c] = 0.0;
        }
        let s = row.sum();
        row.mapv_inplace(|v| v / s);
    }
    m
}

fn random_model(rng: &mut ChaCha8Rng, max_params: usize) -> (ModelSpec, ModelParams) {
    loop {
        let dim = rng.random_range(2..6);
        let classes = rng.random_range(2..5);
        let mut sizes = vec![dim];
        for _ in 0..rng.random_range(0..3) {
            sizes.push(rng.random_range(2..8));
        }
        sizes.push(classes);
        let act = if rng.random_bool(0.5) { Activation::Relu } else { Activation::Tanh };
        let spec = ModelSpec::new("random", sizes, act).unwrap();
        if spec.num_params() <= max_params {
            let mut params = ModelParams::init(&spec, rng);
            for v in params.values_mut() {
                *v += rng.random_range(-0.3..0.3);
            }
            return (spec, params);
        }
    }
}

fn random_features(rng: &mut ChaCha8Rng, rows: usize, dim: usize) -> Array2<f64> {
    Array2::from_shape_fn((rows, dim), |_| rng.random_range(-2.0..2.0))
}

fn balanced_labels(rng: &mut ChaCha8Rng, rows: usize, classes: usize) -> Vec<usize> {
    let mut l: Vec<usize> = (0..rows).map(|i| i % classes).collect();
    l.shuffle(rng);
    l
}

fn criterion_1() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let trials = 200;
    let mut worst = [0.0f64; 4];
    for _ in 0..trials {
        let (r, c) = (rng.random_range(2..12), rng.random_range(2..6));
        let labels = balanced_labels(&mut rng, r, c);
        let reference = ReferenceSet::new(random_features(&mut rng, r, 3), &labels, c).unwrap();
        let a = Messenger::new(0, 1, random_probs(&mut rng, r, c)).unwrap();
        let b = Messenger::new(1, 1, random_probs(&mut rng, r, c)).unwrap();

        let g = score_quality(&a, &reference).unwrap();
        worst[0] = worst[0].max((g - oracle::summed_ce(&oracle::rows(&a.soft_decisions), &labels)).abs());

        let d = messenger_divergence(&a, &b).unwrap();
        let d_oracle = oracle::divergence(&oracle::rows(&a.soft_decisions), &oracle::rows(&b.soft_decisions));
        worst[1] = worst[1].max((d - d_oracle).abs());

        let one_hot = nn::one_hot(&labels, c).unwrap();
        let ce = nn::cross_entropy(&b.soft_decisions, &one_hot).unwrap();
        worst[2] = worst[2].max((ce - oracle::summed_ce(&oracle::rows(&b.soft_decisions), &labels)).abs());

        let (spec, params) = random_model(&mut rng, 200);
        let x = random_features(&mut rng, r, spec.input_dim());
        let target = random_probs(&mut rng, r, spec.num_classes());
        let (_, loss) = nn::backward_reference(&spec, &params, &x, &target).unwrap();
        let expected = oracle::reference_loss(&oracle::forward(&spec, &params, &oracle::rows(&x)), &oracle::rows(&target));
        worst[3] = worst[3].max((loss - expected).abs());
    }
    let max = worst.iter().cloned().fold(0.0, f64::max);
    check(
        max <= 1e-9,
        format!(
            "{trials} instances each; max abs error quality {:.1e}, divergence {:.1e}, cross-entropy {:.1e}, reference loss {:.1e}",
            worst[0], worst[1], worst[2], worst[3]
        ),
    )
}

fn criterion_2() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let trials = 50;
    let (mut worst_local, mut worst_ref) = (0.0f64, 0.0f64);
    for _ in 0..trials {
        let (spec, params) = random_model(&mut rng, 200);
        let rows = rng.random_range(2..8);
        let x = random_features(&mut rng, rows, spec.input_dim());
        let labels: Vec<usize> = (0..rows).map(|_| rng.random_range(0..spec.num_classes())).collect();
        let batch = Batch::from_classes(x.clone(), &labels, spec.num_classes()).unwrap();
        let x_rows = oracle::rows(&x);

        let (g, _) = nn::backward_local(&spec, &params, &batch).unwrap();
        let fd = oracle::fd_gradient(&params, 1e-5, |p| oracle::summed_ce(&oracle::forward(&spec, p, &x_rows), &labels));
        worst_local = worst_local.max(oracle::relative_error(&g.to_flat(), &fd));

        let target = random_probs(&mut rng, rows, spec.num_classes());
        let t_rows = oracle::rows(&target);
        let (g, _) = nn::backward_reference(&spec, &params, &x, &target).unwrap();
        let fd = oracle::fd_gradient(&params, 1e-5, |p| oracle::reference_loss(&oracle::forward(&spec, p, &x_rows), &t_rows));
        worst_ref = worst_ref.max(oracle::relative_error(&g.to_flat(), &fd));
    }
    check(
        worst_local <= 1e-4 && worst_ref <= 1e-4,
        format!("{trials} trials each; max relative error local {worst_local:.1e}, reference {worst_ref:.1e}"),
    )
}

fn short_cluster(protocol: Protocol) -> SimConfig {
    let mut c = cluster_task(protocol, 9);
    c.hyper.total_iterations = 60;
    c.record_every = 10;
    c
}

fn criterion_3() -> Outcome {
    // (a) rho = 0 against isolated training, parameters compared every round.
    let mut sqmd = short_cluster(Protocol::Sqmd);
    sqmd.hyper.rho = 0.0;
    let isgd = short_cluster(Protocol::ISgd);
    let mut a = Simulation::new(&sqmd, None).map_err(|e| e.to_string())?;
    let mut b = Simulation::new(&isgd, None).map_err(|e| e.to_string())?;
    let mut identical = true;
    let mut exchanges = 0;
    while !a.is_finished() {
        exchanges += a.step().map_err(|e| e.to_string())?.communicated.len();
        b.step().map_err(|e| e.to_string())?;
        identical &= a
            .clients()
            .iter()
            .zip(b.clients())
            .all(|(x, y)| x.params.to_flat().iter().zip(y.params.to_flat()).all(|(p, q)| p.to_bits() == q.to_bits()));
    }

    // (b) quality filter off and k saturated: neighbor mean is the mean of
    // every other client's latest messenger.
    let mut open = short_cluster(Protocol::Sqmd);
    open.server.quality_filter = false;
    open.server.k = open.num_clients;
    let mut sim = Simulation::new(&open, None).map_err(|e| e.to_string())?;
    let mut worst_mean = 0.0f64;
    let mut sizes_ok = true;
    let mut checked = 0;
    while !sim.is_finished() {
        let outcome = sim.step().map_err(|e| e.to_string())?;
        let repo = sim.server().repository();
        for &id in &outcome.communicated {
            let others: Vec<Vec<Vec<f64>>> = (0..open.num_clients as ClientId)
                .filter(|&o| o != id)
                .map(|o| oracle::rows(&repo.get(o).expect("every client uploaded").soft_decisions))
                .collect();
            sizes_ok &= outcome.neighbors[&id].len() == open.num_clients - 1;
            let expected = oracle::mean_rows(&others);
            let got = sim.clients()[id as usize].last_neighbor_mean.as_ref().expect("mean set");
            for (i, row) in expected.iter().enumerate() {
                for (j, v) in row.iter().enumerate() {
                    worst_mean = worst_mean.max((got[(i, j)] - v).abs());
                }
            }
            checked += 1;
        }
    }

    // (c) the mixed update is the rho-weighted combination of the pure ones.
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let mut worst_lin = 0.0f64;
    for _ in 0..100 {
        let (spec, params) = random_model(&mut rng, 200);
        let (m, r) = (rng.random_range(1..6), rng.random_range(2..8));
        let labels: Vec<usize> = (0..m).map(|_| rng.random_range(0..spec.num_classes())).collect();
        let batch = Batch::from_classes(random_features(&mut rng, m, spec.input_dim()), &labels, spec.num_classes()).unwrap();
        let x = random_features(&mut rng, r, spec.input_dim());
        let target = random_probs(&mut rng, r, spec.num_classes());
        let rho = rng.random_range(0.0..1.0);
        let eta = rng.random_range(0.01..0.5);
        let step = |rho: f64| nn::sqmd_update(&spec, &params, &batch, &x, &target, rho, eta, m, r).unwrap().to_flat();
        let (mixed, local, reference, base) = (step(rho), step(0.0), step(1.0), params.to_flat());
        for i in 0..base.len() {
            let combo = (1.0 - rho) * (local[i] - base[i]) + rho * (reference[i] - base[i]);
            worst_lin = worst_lin.max((mixed[i] - base[i] - combo).abs());
        }
    }

    check(
        identical && exchanges > 0 && sizes_ok && checked > 0 && worst_mean <= 1e-12 && worst_lin <= 1e-12,
        format!(
            "(a) rho=0 trajectory bit-identical to I-SGD: {identical}; (b) {checked} neighbor means, max deviation {worst_mean:.1e}; (c) max linearity residual {worst_lin:.1e}"
        ),
    )
}

/// Set of training labels per client.
fn client_classes(sim: &Simulation) -> Vec<BTreeSet<usize>> {
    sim.clients()
        .iter()
        .map(|c| c.data.train.classes().unwrap().into_iter().collect())
        .collect()
}

fn criterion_4() -> Outcome {
    let mut config = four_device();
    config.record_every = 1;
    let mut sim = Simulation::new(&config, None).map_err(|e| e.to_string())?;
    let classes = client_classes(&sim);
    let disjoint = classes.iter().all(|c| c.len() == 1);
    let mut same_class_every_time = true;
    let mut exchanges = 0;
    let mut first_exchange = None;
    while !sim.is_finished() {
        let outcome = sim.step().map_err(|e| e.to_string())?;
        if !outcome.neighbors.is_empty() {
            first_exchange.get_or_insert(outcome.round);
        }
        for (id, neighbors) in &outcome.neighbors {
            exchanges += 1;
            same_class_every_time &= neighbors.len() == 1 && classes[neighbors[0] as usize] == classes[*id as usize];
        }
    }
    let record = sim.finish().map_err(|e| e.to_string())?;
    // Accuracy is tracked from the first exchange on; before it the models
    // are still fresh from initialization.
    let from = first_exchange.unwrap_or(u64::MAX);
    let sqmd_min = record
        .rounds
        .iter()
        .filter(|r| r.round >= from)
        .flat_map(|r| r.metrics.iter().map(|m| m.accuracy))
        .fold(f64::INFINITY, f64::min);

    let mut full = config.clone();
    full.protocol = Protocol::Fedmd;
    let fedmd = run_simulation(&full, None).map_err(|e| e.to_string())?;
    let fedmd_final_min = fedmd.summary.final_metrics.iter().map(|m| m.accuracy).fold(f64::INFINITY, f64::min);

    check(
        disjoint && exchanges > 0 && same_class_every_time && sqmd_min == 1.0 && fedmd_final_min < 1.0,
        format!(
            "single-class devices: {disjoint}; same-class peer in all {exchanges} exchanges: {same_class_every_time}; SQMD min accuracy from round {from} on {sqmd_min:.3}; FedMD final min device accuracy {fedmd_final_min:.3}"
        ),
    )
}

struct ClusterRuns {
    /// protocol label -> sparsity -> per-seed mean accuracy
    acc: BTreeMap<&'static str, BTreeMap<u32, Vec<f64>>>,
    records: Vec<RunRecord>,
}

fn variant(label: &str, seed: u64) -> SimConfig {
    match label {
        "sqmd" => cluster_task(Protocol::Sqmd, seed),
        "fedmd" => cluster_task(Protocol::Fedmd, seed),
        "d_dist" => cluster_task(Protocol::DDist, seed),
        "i_sgd" => cluster_task(Protocol::ISgd, seed),
        "sqmd/qf" => {
            let mut c = cluster_task(Protocol::Sqmd, seed);
            c.server.quality_filter = false;
            c
        }
        "sqmd/sf" => {
            let mut c = cluster_task(Protocol::Sqmd, seed);
            c.server.selection = SimilaritySelection::Random;
            c
        }
        _ => unreachable!(),
    }
}

fn run_grid(labels: &[&'static str], sparsities: &[u32]) -> Result<ClusterRuns, String> {
    let mut runs = ClusterRuns { acc: BTreeMap::new(), records: Vec::new() };
    for &label in labels {
        for &r in sparsities {
            for &seed in &SEEDS {
                let mut c = variant(label, seed);
                c.sparsity = f64::from(r);
                let record = run_simulation(&c, None).map_err(|e| format!("{label} r={r} seed {seed}: {e}"))?;
                runs.acc.entry(label).or_default().entry(r).or_default().push(record.summary.mean_accuracy);
                runs.records.push(record);
            }
        }
    }
    Ok(runs)
}

fn criterion_5() -> Outcome {
    let runs = run_grid(&["sqmd", "fedmd", "d_dist", "i_sgd"], &[100, 10, 1])?;
    let m = |label: &str, r: u32| mean(&runs.acc[label][&r]);
    let mut parts = Vec::new();
    let mut trend = true;
    for label in ["sqmd", "fedmd", "d_dist", "i_sgd"] {
        trend &= m(label, 100) > m(label, 1);
        parts.push(format!("{label} {:.3}/{:.3}/{:.3}", m(label, 100), m(label, 10), m(label, 1)));
    }
    let beats = m("sqmd", 10) >= m("d_dist", 10) && m("sqmd", 1) >= m("d_dist", 1);
    check(
        trend && beats,
        format!(
            "seed-mean accuracy at r=100/10/1: {}; r=100 > r=1 for all: {trend}; SQMD >= D-Dist at r=10 and r=1: {beats}",
            parts.join(", ")
        ),
    )
}

fn criterion_6() -> Outcome {
    let window = 3 * cluster_task(Protocol::Sqmd, 0).hyper.interval;
    let mut maps_equal = true;
    let mut compared = 0;
    let mut drops: BTreeMap<Protocol, Vec<f64>> = BTreeMap::new();
    let mut deficits: BTreeMap<Protocol, Vec<f64>> = BTreeMap::new();
    for protocol in [Protocol::Sqmd, Protocol::Fedmd] {
        for &seed in &SEEDS {
            let config = staged_task(protocol, seed);
            let joins = config.join_rounds();
            let record = run_simulation(&config, None).map_err(|e| e.to_string())?;
            for (stage, &s) in JOIN_ROUNDS.iter().enumerate() {
                let counterfactual = run_simulation(&without_joins(config.clone(), stage + 1), None).map_err(|e| e.to_string())?;
                let incumbents: Vec<ClientId> = (0..config.num_clients as ClientId).filter(|&c| joins[c as usize] < s).collect();
                let acc = |rec: &RunRecord, t: u64| rec.mean_accuracy_at(t, &incumbents).expect("recorded every round");
                let before = acc(&record, s - 1);
                let low = (s..s + window).map(|t| acc(&record, t)).fold(f64::INFINITY, f64::min);
                drops.entry(protocol).or_default().push(before - low);
                let deficit = (s..s + window).map(|t| acc(&counterfactual, t) - acc(&record, t)).sum::<f64>() / window as f64;
                deficits.entry(protocol).or_default().push(deficit);
                if protocol == Protocol::Sqmd {
                    let at = |rec: &RunRecord| rec.rounds.iter().find(|r| r.round == s).map(|r| r.neighbors.clone()).unwrap_or_default();
                    let (with, without) = (at(&record), at(&counterfactual));
                    for id in &incumbents {
                        compared += usize::from(with.contains_key(id));
                        maps_equal &= with.get(id) == without.get(id);
                    }
                }
            }
        }
    }
    let (sqmd_drop, fedmd_drop) = (mean(&drops[&Protocol::Sqmd]), mean(&drops[&Protocol::Fedmd]));
    check(
        maps_equal && compared > 0 && sqmd_drop < fedmd_drop,
        format!(
            "incumbent neighbor maps at join rounds equal to no-join run ({compared} maps): {maps_equal}; mean incumbent drop SQMD {sqmd_drop:.4} vs FedMD {fedmd_drop:.4}; accuracy deficit vs no-join run SQMD {:.4} vs FedMD {:.4}",
            mean(&deficits[&Protocol::Sqmd]),
            mean(&deficits[&Protocol::Fedmd])
        ),
    )
}

fn criterion_7() -> Outcome {
    let runs = run_grid(&["sqmd", "sqmd/qf", "sqmd/sf"], &[100])?;
    let m = |label: &str| mean(&runs.acc[label][&100]);
    check(
        m("sqmd") >= m("sqmd/qf") && m("sqmd") >= m("sqmd/sf"),
        format!(
            "seed-mean accuracy SQMD {:.4}, SQMD/QF {:.4}, SQMD/SF {:.4}",
            m("sqmd"),
            m("sqmd/qf"),
            m("sqmd/sf")
        ),
    )
}

fn criterion_8() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let configs = [four_device(), cluster_task(Protocol::Sqmd, 1), staged_task(Protocol::Fedmd, 1)];
    let mut identical = true;
    let mut round_trip = true;
    for (i, c) in configs.iter().enumerate() {
        let mut bytes = Vec::new();
        for run in 0..2 {
            let record = run_simulation(c, None).map_err(|e| e.to_string())?;
            let path = dir.path().join(format!("record_{i}_{run}.json"));
            std::fs::write(&path, record.to_json().map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
            let written = std::fs::read(&path).map_err(|e| e.to_string())?;
            let parsed: RunRecord = serde_json::from_slice(&written).map_err(|e| e.to_string())?;
            round_trip &= parsed == record;
            bytes.push(written);
        }
        identical &= bytes[0] == bytes[1];
    }
    check(
        identical && round_trip,
        format!("{} configs run twice: byte-identical files {identical}, JSON round-trip equal {round_trip}", configs.len()),
    )
}

fn criterion_9() -> Outcome {
    let populations = [
        ("four-device", four_device()),
        ("cluster-skew", cluster_task(Protocol::Sqmd, 1)),
        ("staged-join", staged_task(Protocol::Sqmd, 1)),
    ];
    let mut parts = Vec::new();
    let mut ok = true;
    for (name, c) in &populations {
        let distinct: BTreeSet<(Vec<usize>, String)> = c
            .client_specs()
            .iter()
            .map(|s| (s.layer_sizes.clone(), format!("{:?}", s.activation)))
            .collect();
        let depths: BTreeSet<usize> = c.client_specs().iter().map(|s| s.num_layers()).collect();
        ok &= distinct.len() >= 3 && depths.len() >= 2;
        // Every run completes end to end with this population.
        let mut short = c.clone();
        short.hyper.total_iterations = short.hyper.total_iterations.min(20);
        short.join_schedule.clear();
        let record = run_simulation(&short, None).map_err(|e| format!("{name}: {e}"))?;
        ok &= record.summary.final_metrics.iter().filter(|m| m.split == Split::Test).count() == c.num_clients;
        parts.push(format!("{name}: {} distinct specs, depths {:?}", distinct.len(), depths));
    }
    check(ok, parts.join("; "))
}

fn main() {
    let criteria: [(u32, &str, Duration, fn() -> Outcome); 9] = [
        (1, "formula oracles", Duration::from_secs(10), criterion_1),
        (2, "gradient checks", Duration::from_secs(30), criterion_2),
        (3, "degeneration equivalences", Duration::from_secs(60), criterion_3),
        (4, "four-device disjoint classes", Duration::from_secs(120), criterion_4),
        (5, "sparsity trend", Duration::from_secs(600), criterion_5),
        (6, "asynchronous shielding", Duration::from_secs(600), criterion_6),
        (7, "ablation ordering", Duration::from_secs(600), criterion_7),
        (8, "determinism and serialization", Duration::from_secs(60), criterion_8),
        (9, "heterogeneous populations", Duration::from_secs(600), criterion_9),
    ];
    let filter: Option<u32> = std::env::args().skip(1).find_map(|a| a.parse().ok());
    let mut failed = 0;
    for (n, name, limit, f) in criteria {
        if filter.is_some_and(|only| only != n) {
            continue;
        }
        let start = Instant::now();
        let outcome = f();
        let elapsed = start.elapsed();
        let in_time = elapsed <= limit;
        let (pass, detail) = match outcome {
            Ok(d) => (in_time, d),
            Err(d) => (false, d),
        };
        failed += usize::from(!pass);
        println!(
            "criterion {n} ({name}): {} | {detail} | {:.1}s of {}s",
            if pass { "PASS" } else { "FAIL" },
            elapsed.as_secs_f64(),
            limit.as_secs()
        );
    }
    if failed > 0 {
        println!("{failed} criterion(s) failed");
        std::process::exit(1);
    }
}
