use std::collections::HashSet;
use std::io::Write;
use std::net::{Ipv4Addr, Ipv6Addr};

use flate2::write::DeflateEncoder;
use flate2::Compression;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use popdns::cli::list_from_trace;
use popdns::delta::{apply_batch, diff_states, encode_batch, Delta, RelRef, UpdateBatch};
use popdns::model::{ClientId, DomainName, QType, RecordAnswer, RecordKey, Ttl};
use popdns::poplist::{build_list, PopularityList};
use popdns::sim::{gen_trace, run_sim, GenParams, SimConfig, Trace, Universe, Upstream};
use popdns::voting::{bootstrap_weights, refresh_list, RoundConfig};

fn key(name: &str) -> RecordKey {
    RecordKey::new(DomainName::parse(name).unwrap(), QType::A)
}

fn deflate(data: &[u8]) -> Vec<u8> {
    let mut enc = DeflateEncoder::new(Vec::new(), Compression::default());
    enc.write_all(data).unwrap();
    enc.finish().unwrap()
}

fn day_trace(clients: u32, seed: u64) -> Trace {
    gen_trace(&GenParams { clients, duration_s: 86_400, seed, ..GenParams::default() })
}

#[test]
fn tree_snapshot_beats_flat_listing() {
    let trace = day_trace(2000, 7);
    let list = list_from_trace(&trace, 25_000, Universe::default());
    assert_eq!(list.popular_len(), 25_000);
    let snapshot = list.serialize_snapshot();
    let flat = deflate(list.to_flat_text().as_bytes());
    assert!(snapshot.len() < flat.len(), "snapshot {} B, flat listing {} B", snapshot.len(), flat.len());
}

#[test]
fn built_list_counts_support_and_pool() {
    let universe = Universe::default();
    let up = Upstream::new(universe, SimConfig::default().churn, 0);
    let ranked: Vec<_> = (0..10_000u64)
        .map(|i| {
            let k = universe.key(i * 3 + 1);
            let (a, t) = up.resolve(&k, 0);
            (k, a, t)
        })
        .collect();
    let mut resolver = |k: &RecordKey| Some(up.resolve(k, 0));
    let built = build_list(ranked.clone(), &mut resolver, 10_000);
    assert!(built.diagnostics.is_empty());

    let popular: HashSet<&RecordKey> = ranked.iter().map(|(k, _, _)| k).collect();
    let mut support = HashSet::new();
    let mut answers: HashSet<RecordAnswer> = HashSet::new();
    for (key, answer, _) in &ranked {
        answers.insert(answer.clone());
        let mut next = answer.cname_target().cloned().map(|n| RecordKey::new(n, key.qtype));
        while let Some(k) = next {
            let (a, _) = up.resolve(&k, 0);
            answers.insert(a.clone());
            next = a.cname_target().cloned().map(|n| RecordKey::new(n, k.qtype));
            if !popular.contains(&k) {
                support.insert(k);
            }
        }
    }
    assert!(!support.is_empty());
    assert_eq!(built.list.len(), 10_000 + support.len());
    assert_eq!(built.list.pool().len(), answers.len());
}

fn random_list(rng: &mut ChaCha8Rng, n: usize) -> PopularityList {
    let ranked: Vec<_> = (0..n)
        .map(|i| (key(&format!("h{i}.zone{}.example", i % 17)), RecordAnswer::A(Ipv4Addr::from(rng.gen::<u32>())), Ttl::new(300).unwrap()))
        .collect();
    build_list(ranked, &mut |_: &RecordKey| None, n).list
}

#[test]
fn diff_of_random_churn_replays_exactly() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let before = random_list(&mut rng, 500);
    let pool: Vec<RecordAnswer> = before.pool().answers().to_vec();

    // Rebuild the target from a mutated ranking so that orders shift too.
    let mut ranked: Vec<(RecordKey, RecordAnswer, Ttl)> = Vec::new();
    for e in before.entries() {
        if !rng.gen_bool(0.9) {
            continue;
        }
        let answer = match rng.gen_range(0..4) {
            0 => pool.choose(&mut rng).unwrap().clone(),
            1 => RecordAnswer::A(Ipv4Addr::from(rng.gen::<u32>())),
            _ => before.answer_of(e).clone(),
        };
        let ttl = if rng.gen_bool(0.1) { Ttl::new(rng.gen_range(30..4000)).unwrap() } else { e.ttl };
        ranked.push((e.key.clone(), answer, ttl));
    }
    for i in 0..60 {
        ranked.push((key(&format!("fresh{i}.example")), pool.choose(&mut rng).unwrap().clone(), Ttl::new(60).unwrap()));
    }
    ranked.shuffle(&mut rng);
    let after = build_list(ranked.clone(), &mut |_: &RecordKey| None, ranked.len()).list;

    let batch = diff_states(&before, &after);
    let bytes = encode_batch(&before, &batch).unwrap();
    let replica = apply_batch(&before, &bytes).unwrap();
    for (k, a, t) in &ranked {
        let e = replica.get(k).expect("every target key present");
        assert_eq!((replica.answer_of(e), e.ttl), (a, *t));
    }
    assert_eq!(replica.len(), ranked.len());

    // Applying the same batch to the server side gives the identical bytes.
    let mut server = before.clone();
    server.apply_update(&batch).unwrap();
    assert_eq!(replica.serialize_snapshot(), server.serialize_snapshot());
    assert!(diff_states(&after, &replica).deltas.is_empty());
}

#[test]
fn pool_relative_halves_aaaa_changes() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let ttl = Ttl::new(60).unwrap();
    let ranked: Vec<_> = (0..100)
        .map(|i| {
            let k = RecordKey::new(DomainName::parse(&format!("v6-{i}.cdn.example")).unwrap(), QType::Aaaa);
            (k, RecordAnswer::Aaaa(Ipv6Addr::from(rng.gen::<u128>())), ttl)
        })
        .collect();
    let list = build_list(ranked, &mut |_: &RecordKey| None, 100).list;
    let deltas: Vec<(Delta, Delta)> = list
        .entries()
        .map(|e| {
            let current = i64::from(e.answer.0);
            let target = (current + rng.gen_range(1..100)) % 100;
            let answer = list.pool().answers()[target as usize].clone();
            (
                Delta::AnswerChange { order: e.order, answer: RelRef::PoolRelative(target - current) },
                Delta::AnswerChange { order: e.order, answer: RelRef::Literal(answer) },
            )
        })
        .collect();
    let (rel, lit): (Vec<Delta>, Vec<Delta>) = deltas.into_iter().unzip();
    let rel = encode_batch(&list, &UpdateBatch::new(0, rel)).unwrap();
    let lit = UpdateBatch::new(0, lit).to_bytes();
    assert!(rel.len() * 2 <= lit.len(), "pool-relative {} B, literal {} B", rel.len(), lit.len());
    assert_eq!(apply_batch(&list, &rel).unwrap().serialize_snapshot(), apply_batch(&list, &lit).unwrap().serialize_snapshot());
}

#[test]
fn newcomer_enters_after_predicted_rounds() {
    let cfg = RoundConfig { n_popular: 5, ..RoundConfig::default() };
    let incumbents: Vec<RecordKey> = (0..8).map(|i| key(&format!("old{i}.example"))).collect();
    let newcomer = key("new.example");
    let day_one: Vec<RecordKey> =
        incumbents.iter().enumerate().flat_map(|(i, k)| std::iter::repeat_n(k.clone(), 400 - 20 * i)).collect();
    let mut table = bootstrap_weights(&day_one, &cfg);
    let ttl = Ttl::new(300).unwrap();
    let mut resolver = |k: &RecordKey| Some((RecordAnswer::A(Ipv4Addr::new(192, 0, 2, k.name.label_count() as u8)), ttl));
    let ranked = table.top(5).into_iter().map(|(k, _)| (k.clone(), RecordAnswer::A(Ipv4Addr::new(192, 0, 2, 1)), ttl));
    let mut list = build_list(ranked, &mut resolver, 5).list;
    assert!(!list.contains(&newcomer));

    // Newcomer weight n(1 - 0.9^j) against the fifth incumbent's decaying
    // bootstrap weight plus its own steady votes.
    let (new_votes, old_votes) = (25u64, 3u64);
    let fifth = 0.1 * (400 - 20 * 4) as f64;
    let predicted = (1..)
        .find(|&j| {
            let d = 0.9f64.powi(j);
            new_votes as f64 * (1.0 - d) > fifth * d + old_votes as f64 * (1.0 - d)
        })
        .unwrap();

    let mut entered = None;
    for round in 1..=60 {
        let mut counts: std::collections::HashMap<RecordKey, u64> = incumbents.iter().map(|k| (k.clone(), old_votes)).collect();
        counts.insert(newcomer.clone(), new_votes);
        table.update(&counts, cfg.alpha);
        let (next, _) = refresh_list(&table, &list, &mut resolver, &cfg);
        list = next;
        if list.contains(&newcomer) {
            entered = Some(round);
            break;
        }
    }
    assert_eq!(entered, Some(predicted));
    assert_eq!(list.popular_len(), 5);
}

#[test]
fn fresh_domains_never_hit() {
    let universe = Universe::default();
    let events = (0..=(86_400 + 3 * 3600) / 30).map(|i: u64| (i * 30_000, ClientId((i % 10) as u32), universe.key(i)));
    let trace = Trace::from_events(events).unwrap();
    let cfg = SimConfig { n_popular: 100, rounds: 2, ..SimConfig::default() };
    let report = run_sim(&cfg, &trace).unwrap();
    assert_eq!(report.hours.len(), 3);
    assert_eq!(report.mean_hit_ratio, 0.0);
}

#[test]
fn one_query_per_hour_on_average() {
    let trials = 10_000u64;
    let universe = Universe { size: 1000, ..Universe::default() };
    let total: usize = (0..trials)
        .map(|seed| gen_trace(&GenParams { clients: 1, duration_s: 3600, rate: 1.0, universe, seed, ..GenParams::default() }).len())
        .sum();
    let mean = total as f64 / trials as f64;
    assert!((mean - 1.0).abs() <= 0.05, "mean {mean}");
}

#[test]
fn zipf_top_mass_matches_harmonic_sums() {
    let universe = Universe::default();
    let trace = gen_trace(&GenParams { clients: 500, duration_s: 2 * 86_400, ..GenParams::default() });
    let top: usize = trace.events().iter().filter(|e| universe.index_of(&trace.key(e.key).name).unwrap() < 25_000).count();
    let share = top as f64 / trace.len() as f64;
    let h = |n: usize| (1..=n).rev().map(|i| 1.0 / i as f64).sum::<f64>();
    let expected = h(25_000) / h(1_000_000);
    let sigma = (expected * (1.0 - expected) / trace.len() as f64).sqrt();
    assert!((share - expected).abs() <= 4.0 * sigma, "share {share:.4}, expected {expected:.4}");
}

#[test]
fn million_line_trace_round_trips() {
    let trace = gen_trace(&GenParams { clients: 1000, duration_s: 100 * 3600, ..GenParams::default() });
    assert!(trace.len() > 900_000);
    let mut csv = Vec::new();
    trace.write_csv(&mut csv).unwrap();
    let back = Trace::read_csv(csv.as_slice()).unwrap();
    assert_eq!(back.len(), trace.len());
    assert!(back.events().windows(2).all(|w| w[0].t_ms <= w[1].t_ms));
    assert_eq!(back, trace);
}
