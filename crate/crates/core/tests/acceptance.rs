//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::collections::HashSet;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::time::{Duration, Instant};

use amem4rec::agent::{repair_ranking, MockLinking, MockRanking, TemplateSet};
use amem4rec::dataset::{
    build_eval_instances, filter_cold_start, load_interactions, select_cohort, DataSource,
    EvalInstance, Interaction, Item, UserHistory,
};
use amem4rec::embedding::{top_k, Embedding};
use amem4rec::eval::{evaluate, ndcg_at_k, DEFAULT_KS};
use amem4rec::memory::{MemoryPool, PatternText, Provenance};
use amem4rec::pipeline::{replay, Pipeline, RunConfig, TrainOptions, TrainingReport, Variant};
use amem4rec::policy::{decide, BranchConstants, Strategy, Thresholds};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn fixture_path() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures/five_users.jsonl")
}

fn fixture_instances(seed: u64) -> Vec<EvalInstance> {
    let ds = load_interactions(&DataSource::Jsonl {
        path: fixture_path(),
    })
    .expect("fixture loads");
    let cohort = select_cohort(ds.histories(), 11, 300, seed);
    build_eval_instances(cohort, &ds.items(), 20, seed).expect("fixture instances")
}

struct Run {
    pipeline: Pipeline,
    pool: MemoryPool,
    report: TrainingReport,
    instances: Vec<EvalInstance>,
}

fn fixture_run(config: RunConfig) -> Run {
    let instances = fixture_instances(config.seed);
    let users: Vec<UserHistory> = instances.iter().map(EvalInstance::train_user).collect();
    let pipeline = Pipeline::from_config(config, TemplateSet::bundled()).expect("pipeline");
    let mut pool = MemoryPool::new();
    let options = TrainOptions {
        keep_traces: true,
        ..TrainOptions::default()
    };
    let report = pipeline
        .train(&mut pool, &users, &options)
        .expect("training");
    Run {
        pipeline,
        pool,
        report,
        instances,
    }
}

// 1 ------------------------------------------------------------------------

/// The decision rule written out case by case, with integer bucket counts. Returns every branch whose
/// condition holds, in case order.
fn literal_branches(scores: &[f64], lo: f64, hi: f64) -> Vec<Strategy> {
    let k = scores.len();
    let s_max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let n_high = scores.iter().filter(|&&s| s >= hi).count();
    let n_low = scores.iter().filter(|&&s| s < lo).count();
    let high_ok = 10 * n_high >= 6 * k;
    let low_ok = 10 * n_low >= 5 * k;
    let cases = [
        (s_max < lo, Strategy::StoreOnly),
        (lo <= s_max && s_max < hi, Strategy::UpdateAndStore),
        (s_max >= hi && high_ok, Strategy::UpdateOnly),
        (s_max >= hi && low_ok, Strategy::StoreOnly),
        (s_max >= hi && !high_ok && !low_ok, Strategy::UpdateAndStore),
    ];
    cases.iter().filter(|(c, _)| *c).map(|(_, s)| *s).collect()
}

fn policy_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let n = 10_000;
    for case in 0..n {
        let a: f64 = rng.random_range(0.01..0.99);
        let b: f64 = rng.random_range(0.01..0.99);
        if a == b {
            continue;
        }
        let (lo, hi) = (a.min(b), a.max(b));
        let t = Thresholds::new(lo, hi).map_err(|e| e.to_string())?;
        let len = rng.random_range(1..=10);
        let scores: Vec<f64> = (0..len)
            .map(|_| match rng.random_range(0..6) {
                0 => lo,
                1 => hi,
                _ => rng.random_range(-1.0..=1.0),
            })
            .collect();
        let fired = literal_branches(&scores, lo, hi);
        ensure(fired.len() == 1, || {
            format!("case {case}: {} branches fired for {scores:?}", fired.len())
        })?;
        let got = decide(&scores, &t, &BranchConstants::default());
        ensure(got.strategy == fired[0], || {
            format!(
                "case {case}: decide gave {:?}, oracle {:?} for {scores:?} at ({lo}, {hi})",
                got.strategy, fired[0]
            )
        })?;
        ensure(got.do_update || got.do_store, || {
            format!("case {case}: neither update nor store")
        })?;
    }
    let elapsed = start.elapsed();
    ensure(elapsed < Duration::from_secs(5), || {
        format!("took {elapsed:?}")
    })?;
    Ok(format!(
        "{n} random cases match, one branch each ({:.2} s)",
        elapsed.as_secs_f64()
    ))
}

// 2 ------------------------------------------------------------------------

fn hand_examples() -> Outcome {
    let t = Thresholds::default();
    let cases: [(&[f64], Strategy); 5] = [
        (&[0.95, 0.93, 0.92, 0.91, 0.60], Strategy::UpdateOnly),
        (&[0.95, 0.50, 0.40, 0.30, 0.20], Strategy::StoreOnly),
        (&[0.30, 0.20, 0.10], Strategy::StoreOnly),
        (&[0.70, 0.60, 0.20], Strategy::UpdateAndStore),
        (&[0.95, 0.92, 0.60, 0.50, 0.40], Strategy::UpdateAndStore),
    ];
    for (scores, want) in cases {
        let got = decide(scores, &t, &BranchConstants::default()).strategy;
        ensure(got == want, || {
            format!("{scores:?}: got {got:?}, want {want:?}")
        })?;
    }
    Ok("5 worked examples".into())
}

// 3 ------------------------------------------------------------------------

fn oracle_cosine(a: &[f64], b: &[f64]) -> f64 {
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for i in 0..a.len() {
        dot += a[i] * b[i];
    }
    for x in a {
        na += x * x;
    }
    for x in b {
        nb += x * x;
    }
    dot / (na.sqrt() * nb.sqrt())
}

fn random_vector(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        if v.iter().any(|x| *x != 0.0) {
            return v;
        }
    }
}

fn retrieval_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let dim = 64;
    let n_pools = 1000;
    for p in 0..n_pools {
        let size = rng.random_range(0..=500);
        let mut pool = MemoryPool::new();
        let mut vectors: Vec<Vec<f64>> = Vec::with_capacity(size);
        for i in 0..size {
            // Repeat earlier vectors now and then so ties occur.
            let v = if i > 0 && rng.random_range(0..8) == 0 {
                vectors[rng.random_range(0..i)].clone()
            } else {
                random_vector(&mut rng, dim)
            };
            pool.insert(
                PatternText::new("b", "p").unwrap(),
                Embedding::new(v.clone()).unwrap(),
                Provenance {
                    source_user: "u".into(),
                    source_window_index: i,
                },
            )
            .map_err(|e| e.to_string())?;
            vectors.push(v);
        }
        let query = if size > 0 && rng.random_range(0..4) == 0 {
            vectors[rng.random_range(0..size)].clone()
        } else {
            random_vector(&mut rng, dim)
        };
        let k = rng.random_range(1..=size.max(1) + 3);

        let mut expected: Vec<(u64, f64)> = vectors
            .iter()
            .enumerate()
            .map(|(i, v)| (i as u64, oracle_cosine(&query, v)))
            .collect();
        expected.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        expected.truncate(k);

        let got: Vec<(u64, f64)> = top_k(&pool, &Embedding::new(query).unwrap(), k)
            .map_err(|e| e.to_string())?
            .into_iter()
            .map(|n| (n.id, n.score))
            .collect();
        ensure(got == expected, || {
            format!("pool {p} (size {size}, k {k}) differs from exhaustive sort")
        })?;
    }
    let elapsed = start.elapsed();
    ensure(elapsed < Duration::from_secs(10), || {
        format!("took {elapsed:?}")
    })?;
    Ok(format!(
        "{n_pools} random pools match exhaustive sort ({:.2} s)",
        elapsed.as_secs_f64()
    ))
}

// 4 ------------------------------------------------------------------------

fn brute_ndcg(ranked: &[String], gt: &str, k: usize) -> f64 {
    let rel: Vec<f64> = ranked
        .iter()
        .map(|id| if id == gt { 1.0 } else { 0.0 })
        .collect();
    let dcg = |r: &[f64]| -> f64 {
        r.iter()
            .take(k)
            .enumerate()
            .map(|(i, x)| x / ((i + 2) as f64).log2())
            .sum()
    };
    let mut ideal = rel.clone();
    ideal.sort_by(|a, b| b.partial_cmp(a).unwrap());
    dcg(&rel) / dcg(&ideal)
}

fn ndcg_oracle() -> Outcome {
    let items: Vec<String> = (0..20).map(|i| format!("item{i}")).collect();
    for rank in 1..=20 {
        let mut ranked = items.clone();
        ranked.swap(0, rank - 1);
        let gt = &items[0];
        for k in DEFAULT_KS {
            let got = ndcg_at_k(&ranked, gt, k).map_err(|e| e.to_string())?;
            let want = brute_ndcg(&ranked, gt, k);
            ensure((got - want).abs() <= 1e-12, || {
                format!("rank {rank} K {k}: {got} vs {want}")
            })?;
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let perms = 10_000;
    for _ in 0..perms {
        let mut ranked = items.clone();
        rand::seq::SliceRandom::shuffle(ranked.as_mut_slice(), &mut rng);
        let gt = &items[rng.random_range(0..20)];
        let v: Vec<f64> = DEFAULT_KS
            .iter()
            .map(|&k| ndcg_at_k(&ranked, gt, k).unwrap())
            .collect();
        ensure(
            v[0] <= v[1] && v[1] <= v[2] && v.iter().all(|x| (0.0..=1.0).contains(x)),
            || format!("not monotone: {v:?}"),
        )?;
    }
    Ok(format!(
        "60 rank/K pairs within 1e-12, {perms} permutations monotone"
    ))
}

// 5 ------------------------------------------------------------------------

fn end_to_end_bytes() -> Result<(Vec<u8>, Vec<u8>), String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let run = fixture_run(RunConfig::default());
    let pool_path = dir.path().join("pool.jsonl");
    run.pool.save(&pool_path).map_err(|e| e.to_string())?;
    let report = evaluate(&run.pipeline, &run.pool, &run.instances, &DEFAULT_KS);
    let metrics = serde_json::to_vec_pretty(&report).map_err(|e| e.to_string())?;
    Ok((
        std::fs::read(&pool_path).map_err(|e| e.to_string())?,
        metrics,
    ))
}

fn determinism() -> Outcome {
    let (pool_a, metrics_a) = end_to_end_bytes()?;
    let (pool_b, metrics_b) = end_to_end_bytes()?;
    ensure(pool_a == pool_b, || "pool files differ".into())?;
    ensure(metrics_a == metrics_b, || "metrics reports differ".into())?;
    Ok(format!(
        "pool ({} bytes) and metrics ({} bytes) identical across two runs",
        pool_a.len(),
        metrics_a.len()
    ))
}

// 6 ------------------------------------------------------------------------

fn oracle_bounds() -> Outcome {
    let mut config = RunConfig::default();
    config.provider.mock.ranking = MockRanking::Oracle;
    let run = fixture_run(config.clone());
    let m = evaluate(&run.pipeline, &run.pool, &run.instances, &DEFAULT_KS);
    ensure(m.n_failed == 0 && m.n_users == 5, || {
        format!("{} of {} failed", m.n_failed, m.n_users)
    })?;
    for k in DEFAULT_KS {
        ensure(m.mean(k) == Some(1.0), || {
            format!("oracle NDCG@{k} = {:?}", m.mean(k))
        })?;
    }
    config.provider.mock.ranking = MockRanking::Adversarial;
    let run = fixture_run(config);
    let m = evaluate(&run.pipeline, &run.pool, &run.instances, &DEFAULT_KS);
    ensure(m.per_user.iter().all(|u| u.rank == 20), || {
        "ground truth not last".into()
    })?;
    ensure(m.mean(10) == Some(0.0), || {
        format!("adversarial NDCG@10 = {:?}", m.mean(10))
    })?;
    Ok("oracle mock 1.0 at K=1,5,10; adversarial mock 0.0 at K=10".into())
}

// 7 ------------------------------------------------------------------------

fn ablation_invariants() -> Outcome {
    let base = RunConfig::default();
    let ne = fixture_run(base.with_variant(Variant::NoEvolution));
    ensure(ne.pool.len() == ne.report.summary.windows, || {
        format!(
            "pool {} vs windows {}",
            ne.pool.len(),
            ne.report.summary.windows
        )
    })?;
    ensure(ne.pool.iter().all(|e| e.evolution_count == 0), || {
        "an entry evolved".into()
    })?;

    let nsv = fixture_run(base.with_variant(Variant::NoSimilarityValidator));
    let non_bootstrap: Vec<_> = nsv
        .report
        .traces
        .iter()
        .filter(|t| !t.is_bootstrap())
        .collect();
    ensure(!non_bootstrap.is_empty(), || {
        "no non-bootstrap windows".into()
    })?;
    for t in &non_bootstrap {
        let d = t.decision.expect("decision recorded");
        ensure(d.do_update && d.do_store, || {
            format!("window {}/{} skipped a step", t.user_id, t.window_index)
        })?;
    }

    let mut indiscriminate = base.clone();
    indiscriminate.provider.mock.linking = MockLinking::All;
    let full = fixture_run(indiscriminate.with_variant(Variant::Full));
    let nsem = fixture_run(indiscriminate.with_variant(Variant::NoSemanticValidator));
    ensure(
        nsem.report.summary.replaces >= full.report.summary.replaces,
        || {
            format!(
                "{} < {}",
                nsem.report.summary.replaces, full.report.summary.replaces
            )
        },
    )?;
    Ok(format!(
        "no_evolution pool {} = windows; {} non-bootstrap windows update+store; replaces {} >= {}",
        ne.pool.len(),
        non_bootstrap.len(),
        nsem.report.summary.replaces,
        full.report.summary.replaces
    ))
}

// 8 ------------------------------------------------------------------------

fn accounting() -> Outcome {
    let mut checked = Vec::new();
    for variant in Variant::ALL {
        for linking in [MockLinking::SharedCategory, MockLinking::All] {
            let mut config = RunConfig::default().with_variant(variant);
            config.provider.mock.linking = linking;
            let run = fixture_run(config);
            let traces = &run.report.traces;
            let storing = traces
                .iter()
                .filter(|t| t.decision.is_some_and(|d| d.do_store))
                .count();
            let applied: usize = traces.iter().map(|t| t.evolved_ids.len()).sum();
            let s = &run.report.summary;
            ensure(
                s.inserts == storing && run.pool.next_id() as usize == storing,
                || {
                    format!(
                        "{}: inserts {} vs storing windows {storing}",
                        variant.name(),
                        s.inserts
                    )
                },
            )?;
            ensure(
                s.replaces == applied && run.pool.total_evolutions() as usize == applied,
                || {
                    format!(
                        "{}: replaces {} vs applied updates {applied}",
                        variant.name(),
                        s.replaces
                    )
                },
            )?;
            let mut replayed =
                replay(traces.iter().flat_map(|t| &t.ops)).map_err(|e| e.to_string())?;
            replayed.set_config_hash(run.pipeline.config_hash());
            ensure(replayed == run.pool, || {
                format!("{}: replay diverges", variant.name())
            })?;
            checked.push(applied);
        }
    }
    Ok(format!(
        "8 mock runs balance and replay exactly (replaces {checked:?})"
    ))
}

// 9 ------------------------------------------------------------------------

fn serialization() -> Outcome {
    let run = fixture_run(RunConfig::default());
    ensure(run.pool.iter().any(|e| e.evolution_count > 0), || {
        "no evolved entry".into()
    })?;
    ensure(run.pool.iter().any(|e| e.evolution_count == 0), || {
        "no unevolved entry".into()
    })?;
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("pool.jsonl");
    run.pool.save(&path).map_err(|e| e.to_string())?;
    let loaded = MemoryPool::load(&path).map_err(|e| e.to_string())?;
    ensure(loaded == run.pool, || "round-trip changed the pool".into())?;

    let candidates: Vec<String> = (0..20).map(|i| format!("c{i:02}")).collect();
    let s = |v: &[&str]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>();
    let mut with_duplicates = s(&["c05", "c05", "c03", "c03", "c03"]);
    with_duplicates.extend(candidates.iter().cloned());
    let omitted: Vec<String> = candidates.iter().rev().skip(3).cloned().collect();
    let mut hallucinated = s(&["x1", "c19", "ghost", "42"]);
    hallucinated.extend(candidates.iter().take(19).cloned());
    let fixtures = [
        ("duplicates", with_duplicates, {
            let mut e = s(&["c05", "c03"]);
            e.extend(
                candidates
                    .iter()
                    .filter(|c| *c != "c05" && *c != "c03")
                    .cloned(),
            );
            e
        }),
        ("omissions", omitted.clone(), {
            let mut e = omitted;
            e.extend(s(&["c17", "c18", "c19"]));
            e
        }),
        ("hallucinations", hallucinated, {
            let mut e = s(&["c19"]);
            e.extend(candidates.iter().take(19).cloned());
            e
        }),
    ];
    for (name, proposed, expected) in fixtures {
        let (ranked, report) = repair_ranking(&proposed, &candidates);
        let unique: HashSet<&String> = ranked.iter().collect();
        ensure(ranked.len() == 20 && unique.len() == 20, || {
            format!("{name}: not a permutation")
        })?;
        ensure(ranked == expected, || format!("{name}: got {ranked:?}"))?;
        ensure(!report.is_clean(), || {
            format!("{name}: repair not reported")
        })?;
    }
    Ok(format!(
        "{}-entry pool round-trips exactly; 3 repair fixtures restored to 20-permutations",
        loaded.len()
    ))
}

// 10 -----------------------------------------------------------------------

fn synthetic_users(rng: &mut ChaCha8Rng, n_users: usize, universe: &[Item]) -> Vec<UserHistory> {
    (0..n_users)
        .map(|u| {
            let len = rng.random_range(2..=30);
            let picks = rand::seq::index::sample(rng, universe.len(), len);
            let interactions = picks
                .iter()
                .enumerate()
                .map(|(t, i)| {
                    let item = &universe[i];
                    Interaction {
                        item_id: item.item_id.clone(),
                        title: item.title.clone(),
                        category: item.category.clone(),
                        timestamp: rng.random_range(0..5) + t as i64,
                    }
                })
                .collect();
            UserHistory::new(format!("user{u}"), interactions)
        })
        .collect()
}

fn sized_user(id: &str, n: usize) -> UserHistory {
    UserHistory::new(
        id,
        (0..n)
            .map(|i| Interaction {
                item_id: format!("{id}-{i}"),
                title: "t".into(),
                category: "c".into(),
                timestamp: i as i64,
            })
            .collect(),
    )
}

fn protocol() -> Outcome {
    let users: Vec<UserHistory> = [9, 10, 11, 12]
        .iter()
        .map(|&n| sized_user(&format!("n{n}"), n))
        .collect();
    let admitted: Vec<usize> = select_cohort(&users, 11, 300, 0)
        .iter()
        .map(|u| u.len())
        .collect();
    ensure(admitted == vec![11, 12], || {
        format!("cohort admitted sizes {admitted:?}")
    })?;
    let small: Vec<UserHistory> = (1..=5).map(|n| sized_user(&format!("s{n}"), n)).collect();
    let cold: Vec<usize> = filter_cold_start(&small, 2, 3)
        .iter()
        .map(|u| u.len())
        .collect();
    ensure(cold == vec![2, 3], || {
        format!("cold-start admitted sizes {cold:?}")
    })?;

    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut checked = 0;
    let mut seed = 0;
    while checked < 1000 {
        let universe: Vec<Item> = (0..rng.random_range(60..120))
            .map(|i| Item {
                item_id: format!("i{i}"),
                title: format!("Item {i}"),
                category: format!("cat{}", i % 7),
            })
            .collect();
        let users = synthetic_users(&mut rng, 50, &universe);
        let instances =
            build_eval_instances(&users, &universe, 20, seed).map_err(|e| e.to_string())?;
        for inst in &instances {
            let ids: HashSet<&str> = inst.candidates.iter().map(|c| c.item_id.as_str()).collect();
            ensure(inst.candidates.len() == 20 && ids.len() == 20, || {
                format!("{}: not 20 unique", inst.user_id)
            })?;
            let gt_count = inst
                .candidates
                .iter()
                .filter(|c| c.item_id == inst.ground_truth.item_id)
                .count();
            ensure(gt_count == 1, || {
                format!("{}: ground truth appears {gt_count} times", inst.user_id)
            })?;
            let train: HashSet<&str> = inst
                .train_history
                .iter()
                .map(|i| i.item_id.as_str())
                .collect();
            ensure(ids.is_disjoint(&train), || {
                format!("{}: candidate leaks from training history", inst.user_id)
            })?;
            checked += 1;
        }
        seed += 1;
    }
    Ok(format!(
        "cohort and cold-start boundaries hold; {checked} instances conform"
    ))
}

type Criterion = (&'static str, fn() -> Outcome);

fn main() {
    let criteria: [Criterion; 10] = [
        ("policy oracle equivalence", policy_oracle),
        ("worked policy examples", hand_examples),
        ("retrieval oracle", retrieval_oracle),
        ("NDCG oracle and monotonicity", ndcg_oracle),
        ("end-to-end determinism", determinism),
        ("oracle and adversarial bounds", oracle_bounds),
        ("ablation invariants", ablation_invariants),
        ("training accounting and replay", accounting),
        ("serialization and ranking repair", serialization),
        ("protocol conformance", protocol),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|panic| {
            let msg = panic
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into());
            Err(msg)
        });
        match outcome {
            Ok(detail) => println!("PASS  {:>2}. {name}: {detail}", i + 1),
            Err(reason) => {
                failed += 1;
                println!("FAIL  {:>2}. {name}: {reason}", i + 1);
            }
        }
    }
    println!(
        "acceptance: {} passed, {failed} failed",
        criteria.len() - failed
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
