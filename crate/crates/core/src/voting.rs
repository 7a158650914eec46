//! Ballots, tallies and the exponentially weighted popularity score.

use std::borrow::Cow;
use std::cmp::Ordering;
use std::collections::{HashMap, HashSet};

use rand::Rng;
use thiserror::Error;

use crate::delta::{AnswerRef, Delta, RefPlanner, UpdateBatch};
use crate::model::{QType, RecordAnswer, RecordKey, Ttl};
use crate::poplist::{ListEntry, PopularityList, Resolver, MAX_CHAIN};

/// Weights below this are dropped from the table.
pub const EPSILON_DROP: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Vote {
    pub key: RecordKey,
}

/// One client's votes for a round. May be constructed over quota; [`tally`]
/// rejects such ballots.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Ballot {
    pub votes: Vec<Vote>,
}

impl Ballot {
    pub fn len(&self) -> usize {
        self.votes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.votes.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundConfig {
    pub t_refresh: u64,
    pub v_max: usize,
    pub p_vote: f64,
    pub alpha: f64,
    pub n_popular: usize,
}

impl Default for RoundConfig {
    fn default() -> Self {
        Self { t_refresh: 3600, v_max: 10, p_vote: 0.3, alpha: 0.1, n_popular: 25_000 }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ConfigError {
    #[error("alpha must lie strictly between 0 and 1, got {0}")]
    Alpha(f64),
    #[error("p_vote must lie in [0, 1], got {0}")]
    PVote(f64),
    #[error("v_max must be at least 1")]
    VMax,
    #[error("t_refresh must be positive")]
    TRefresh,
}

impl RoundConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(ConfigError::Alpha(self.alpha));
        }
        if !(0.0..=1.0).contains(&self.p_vote) {
            return Err(ConfigError::PVote(self.p_vote));
        }
        if self.v_max == 0 {
            return Err(ConfigError::VMax);
        }
        if self.t_refresh == 0 {
            return Err(ConfigError::TRefresh);
        }
        Ok(())
    }
}

/// Scans `history` in time order, keeping each query with probability
/// `p_vote`, until `v_max` distinct keys have been kept.
pub fn generate_ballot<'a, I, G>(history: I, config: &RoundConfig, rng: &mut G) -> Ballot
where
    I: IntoIterator<Item = &'a RecordKey>,
    G: Rng + ?Sized,
{
    let mut votes = Vec::new();
    let mut seen = HashSet::new();
    for key in history {
        if votes.len() >= config.v_max {
            break;
        }
        if rng.gen_bool(config.p_vote) && seen.insert(key) {
            votes.push(Vote { key: key.clone() });
        }
    }
    Ballot { votes }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BallotRejection {
    OverQuota { votes: usize, v_max: usize },
    DuplicateVote(RecordKey),
}

#[derive(Debug, Clone, Default)]
pub struct Tally {
    pub counts: HashMap<RecordKey, u64>,
    /// Index of each rejected ballot with the reason.
    pub rejected: Vec<(usize, BallotRejection)>,
}

pub fn tally<'a, I>(ballots: I, v_max: usize) -> Tally
where
    I: IntoIterator<Item = &'a Ballot>,
{
    let mut out = Tally::default();
    'ballots: for (i, ballot) in ballots.into_iter().enumerate() {
        if ballot.len() > v_max {
            out.rejected.push((i, BallotRejection::OverQuota { votes: ballot.len(), v_max }));
            continue;
        }
        let mut seen = HashSet::with_capacity(ballot.len());
        for vote in &ballot.votes {
            if !seen.insert(&vote.key) {
                out.rejected.push((i, BallotRejection::DuplicateVote(vote.key.clone())));
                continue 'ballots;
            }
        }
        for vote in &ballot.votes {
            *out.counts.entry(vote.key.clone()).or_insert(0) += 1;
        }
    }
    out
}

/// Counts anonymized votes directly, as they arrive from the mix network.
pub fn count_votes<'a, I>(votes: I) -> HashMap<RecordKey, u64>
where
    I: IntoIterator<Item = &'a Vote>,
{
    let mut counts = HashMap::new();
    for vote in votes {
        *counts.entry(vote.key.clone()).or_insert(0) += 1;
    }
    counts
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct WeightTable {
    weights: HashMap<RecordKey, f64>,
    round_index: u64,
}

fn rank_cmp(a: &(&RecordKey, f64), b: &(&RecordKey, f64)) -> Ordering {
    b.1.total_cmp(&a.1).then_with(|| a.0.cmp(b.0))
}

impl WeightTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn round_index(&self) -> u64 {
        self.round_index
    }

    pub fn weight(&self, key: &RecordKey) -> f64 {
        self.weights.get(key).copied().unwrap_or(0.0)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&RecordKey, f64)> + '_ {
        self.weights.iter().map(|(k, w)| (k, *w))
    }

    /// Applies one round of `w = alpha * n + (1 - alpha) * w_prev`.
    pub fn update(&mut self, counts: &HashMap<RecordKey, u64>, alpha: f64) {
        let keep = 1.0 - alpha;
        for w in self.weights.values_mut() {
            *w *= keep;
        }
        for (key, n) in counts {
            *self.weights.entry(key.clone()).or_insert(0.0) += alpha * *n as f64;
        }
        self.weights.retain(|_, w| *w >= EPSILON_DROP);
        self.round_index += 1;
    }

    /// The `k` heaviest keys, heaviest first; ties go to the smaller key.
    pub fn top(&self, k: usize) -> Vec<(&RecordKey, f64)> {
        let mut all: Vec<(&RecordKey, f64)> = self.iter().collect();
        if k < all.len() {
            let mut weights: Vec<f64> = all.iter().map(|&(_, w)| w).collect();
            let (_, &mut cut, _) = weights.select_nth_unstable_by(k, |a, b| b.total_cmp(a));
            all.retain(|&(_, w)| w >= cut);
        }
        if k < all.len() {
            all.select_nth_unstable_by(k, rank_cmp);
            all.truncate(k);
        }
        all.sort_unstable_by(rank_cmp);
        all
    }
}

/// A ranked prefix of a weight table, extended on demand, so that several
/// lists can be refreshed from one ranking.
pub struct Ranking<'a> {
    table: &'a WeightTable,
    ranked: Vec<(&'a RecordKey, f64)>,
}

impl<'a> Ranking<'a> {
    pub fn new(table: &'a WeightTable) -> Self {
        Self { table, ranked: Vec::new() }
    }

    /// Same as [`WeightTable::top`].
    pub fn top(&mut self, k: usize) -> &[(&'a RecordKey, f64)] {
        if self.ranked.len() < k && self.ranked.len() < self.table.len() {
            self.ranked = self.table.top(k);
        }
        &self.ranked[..k.min(self.ranked.len())]
    }
}

pub fn update_weights(mut table: WeightTable, counts: &HashMap<RecordKey, u64>, config: &RoundConfig) -> WeightTable {
    table.update(counts, config.alpha);
    table
}

/// Treats the day-one query counts as round zero.
pub fn bootstrap_weights<'a, I>(day_one: I, config: &RoundConfig) -> WeightTable
where
    I: IntoIterator<Item = &'a RecordKey>,
{
    let mut counts: HashMap<RecordKey, u64> = HashMap::new();
    for key in day_one {
        *counts.entry(key.clone()).or_insert(0) += 1;
    }
    let weights = counts.into_iter().map(|(k, n)| (k, config.alpha * n as f64)).collect();
    WeightTable { weights, round_index: 0 }
}

enum Source {
    Listed(u32),
    Fresh(RecordAnswer, Ttl),
}

struct Candidate<'a> {
    key: Cow<'a, RecordKey>,
    source: Source,
}

const ROLE_POPULAR: u8 = 1;
const ROLE_SUPPORT: u8 = 2;

/// Deltas moving `current` to the membership implied by `table`.
///
/// Popular members are the top `n_popular` keys that are either already
/// listed or resolvable. Support entries are recomputed by following each
/// member's chain. Surviving entries keep their slots; the result is what
/// `diff_states` yields for the corresponding target list.
pub fn refresh_deltas<R: Resolver + ?Sized>(
    table: &WeightTable,
    current: &PopularityList,
    resolver: &mut R,
    n_popular: usize,
) -> Vec<Delta> {
    refresh_from_ranking(&mut Ranking::new(table), current, resolver, n_popular)
}

/// [`refresh_deltas`] over a shared ranking.
pub fn refresh_from_ranking<R: Resolver + ?Sized>(
    ranking: &mut Ranking<'_>,
    current: &PopularityList,
    resolver: &mut R,
    n_popular: usize,
) -> Vec<Delta> {
    let mut resolved: HashMap<RecordKey, Option<(RecordAnswer, Ttl)>> = HashMap::new();
    let mut lookup = |key: &RecordKey, resolver: &mut R| -> Option<Source> {
        if let Some(e) = current.get(key) {
            return Some(Source::Listed(e.order));
        }
        resolved
            .entry(key.clone())
            .or_insert_with(|| resolver.resolve(key).filter(|(a, _)| key.accepts(a)))
            .clone()
            .map(|(a, t)| Source::Fresh(a, t))
    };

    let mut popular: Vec<Candidate> = Vec::with_capacity(n_popular);
    let mut window = n_popular + 64;
    loop {
        popular.clear();
        let ranked = ranking.top(window);
        for &(key, _) in ranked {
            if popular.len() >= n_popular {
                break;
            }
            if let Some(source) = lookup(key, resolver) {
                popular.push(Candidate { key: Cow::Borrowed(key), source });
            }
        }
        if ranked.len() < window || popular.len() >= n_popular {
            break;
        }
        window *= 4;
    }

    let mut role = vec![0u8; current.slot_count() as usize];
    let mut fresh_popular: HashSet<&RecordKey> = HashSet::new();
    for c in &popular {
        match c.source {
            Source::Listed(order) => role[order as usize] = ROLE_POPULAR,
            Source::Fresh(..) => {
                fresh_popular.insert(&c.key);
            }
        }
    }

    let mut support: Vec<Candidate> = Vec::new();
    let mut fresh_support: HashSet<RecordKey> = HashSet::new();
    for head in &popular {
        if head.key.qtype == QType::Cname {
            continue;
        }
        let answer = match &head.source {
            Source::Listed(order) => current.answer_of(current.entry(*order).expect("listed")),
            Source::Fresh(a, _) => a,
        };
        let Some(target) = answer.cname_target() else { continue };
        let mut seen = HashSet::from([head.key.name.clone()]);
        let mut next = Some(target.clone());
        let mut links = 1;
        while let Some(target) = next.take() {
            if !seen.insert(target.clone()) {
                break;
            }
            let key = RecordKey::new(target, head.key.qtype);
            let taken = match current.get(&key) {
                Some(e) => role[e.order as usize] != 0,
                None => fresh_popular.contains(&key) || fresh_support.contains(&key),
            };
            if taken || links >= MAX_CHAIN {
                break;
            }
            let Some(source) = lookup(&key, resolver) else { break };
            next = match &source {
                Source::Listed(order) => {
                    role[*order as usize] = ROLE_SUPPORT;
                    current.answer_of(current.entry(*order).expect("listed")).cname_target().cloned()
                }
                Source::Fresh(a, _) => {
                    fresh_support.insert(key.clone());
                    a.cname_target().cloned()
                }
            };
            links += 1;
            support.push(Candidate { key: Cow::Owned(key), source });
        }
    }

    let kept = |e: &ListEntry| role[e.order as usize] == if e.is_cname_support { ROLE_SUPPORT } else { ROLE_POPULAR };
    let mut deltas: Vec<Delta> =
        current.entries().filter(|e| !kept(e)).map(|e| Delta::RecordRemove { order: e.order }).collect();
    let mut planner = RefPlanner::new(current);
    let additions = popular.iter().map(|c| (c, false)).chain(support.iter().map(|c| (c, true)));
    for (c, is_cname_support) in additions {
        let (answer, ttl) = match &c.source {
            Source::Listed(order) => {
                let e = current.entry(*order).expect("listed");
                if kept(e) {
                    continue;
                }
                (current.answer_of(e), e.ttl)
            }
            Source::Fresh(a, t) => (a, *t),
        };
        let answer: AnswerRef = planner.add(answer);
        deltas.push(Delta::RecordAdd { key: c.key.clone().into_owned(), answer, ttl, is_cname_support });
    }
    deltas
}

/// Recomputes membership from `table` and returns the refreshed list with
/// the batch that produces it from `current`.
pub fn refresh_list<R: Resolver + ?Sized>(
    table: &WeightTable,
    current: &PopularityList,
    resolver: &mut R,
    config: &RoundConfig,
) -> (PopularityList, UpdateBatch) {
    let batch = UpdateBatch::new(current.version(), refresh_deltas(table, current, resolver, config.n_popular));
    let mut next = current.clone();
    next.apply_update(&batch).expect("refresh deltas are consistent with the current list");
    (next, batch)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::delta::{diff_states, encode_batch};
    use crate::model::parse_domain;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::net::Ipv4Addr;

    fn key(name: &str) -> RecordKey {
        RecordKey::new(parse_domain(name).unwrap(), QType::A)
    }

    fn resolve_all(key: &RecordKey) -> Option<(RecordAnswer, Ttl)> {
        let h = key.name.present().len() as u8;
        Some((RecordAnswer::A(Ipv4Addr::new(10, 0, 0, h)), Ttl::new(300).unwrap()))
    }

    fn table_of(entries: &[(&str, f64)]) -> WeightTable {
        WeightTable {
            weights: entries.iter().map(|(n, w)| (key(n), *w)).collect(),
            round_index: 0,
        }
    }

    fn cfg(n_popular: usize) -> RoundConfig {
        RoundConfig { n_popular, ..RoundConfig::default() }
    }

    #[test]
    fn ballot_edge_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(generate_ballot(&[], &cfg(1), &mut rng).is_empty());
        let history = [key("a.com"), key("b.com"), key("a.com"), key("c.com")];
        let all = RoundConfig { p_vote: 1.0, ..cfg(1) };
        let ballot = generate_ballot(&history, &all, &mut rng);
        let names: Vec<_> = ballot.votes.iter().map(|v| v.key.name.present()).collect();
        assert_eq!(names, ["a.com", "b.com", "c.com"]);
    }

    #[test]
    fn ballot_fills_to_quota_on_long_history() {
        let keys: Vec<_> = (0..500).map(|i| key(&format!("k{i}.net"))).collect();
        let history: Vec<_> = (0..10_000).map(|i| keys[(i * 7919) % 500].clone()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        assert_eq!(generate_ballot(&history, &cfg(1), &mut rng).len(), 10);
    }

    #[test]
    fn selection_frequency_matches_p_vote() {
        let keys: Vec<_> = (0..500).map(|i| key(&format!("k{i}.net"))).collect();
        let config = RoundConfig { v_max: 500, ..cfg(1) };
        let mut selected = 0usize;
        let seeds = 10_000u64;
        for seed in 0..seeds {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            selected += generate_ballot(&keys, &config, &mut rng).len();
        }
        let freq = selected as f64 / (seeds as f64 * 500.0);
        assert!((freq - 0.3).abs() < 0.01 * 0.3, "selection frequency {freq}");
    }

    #[test]
    fn tally_counts_and_rejects() {
        let k = key("k.com");
        let one = Ballot { votes: vec![Vote { key: k.clone() }] };
        let t = tally([&one, &one, &one], 10);
        assert_eq!(t.counts[&k], 3);
        assert!(tally(std::iter::empty(), 10).counts.is_empty());

        let big = Ballot { votes: (0..11).map(|i| Vote { key: key(&format!("x{i}.com")) }).collect() };
        let t = tally([&big, &one], 10);
        assert_eq!(t.rejected, vec![(0, BallotRejection::OverQuota { votes: 11, v_max: 10 })]);
        assert_eq!(t.counts.len(), 1);
        let dup = Ballot { votes: vec![Vote { key: k.clone() }, Vote { key: k.clone() }] };
        assert!(matches!(tally([&dup], 10).rejected[..], [(0, BallotRejection::DuplicateVote(_))]));
    }

    #[test]
    fn weight_update_examples() {
        let a = key("a.com");
        let mut table = table_of(&[("a.com", 5.0), ("b.com", 1.0)]);
        table.update(&HashMap::from([(a.clone(), 10)]), 0.1);
        assert!((table.weight(&a) - 5.5).abs() < 1e-12);
        assert!((table.weight(&key("b.com")) - 0.9).abs() < 1e-12);
        table.update(&HashMap::from([(key("fresh.com"), 4)]), 0.1);
        assert!((table.weight(&key("fresh.com")) - 0.4).abs() < 1e-12);
        assert_eq!(table.round_index(), 2);
    }

    #[test]
    fn decay_closed_form_and_eviction() {
        let mut table = table_of(&[("a.com", 3.0)]);
        for k in 1..=100 {
            table.update(&HashMap::new(), 0.1);
            let expected = 3.0 * 0.9f64.powi(k);
            assert!((table.weight(&key("a.com")) - expected).abs() <= 1e-9 * expected.max(1.0));
        }
        for _ in 0..100 {
            table.update(&HashMap::new(), 0.1);
        }
        assert!(table.is_empty());
    }

    #[test]
    fn bootstrap_scales_counts() {
        let k = key("popular.com");
        let day: Vec<_> = std::iter::repeat(k.clone()).take(100).collect();
        let table = bootstrap_weights(&day, &cfg(1));
        assert!((table.weight(&k) - 10.0).abs() < 1e-9);
        assert_eq!(table.weight(&key("absent.com")), 0.0);
        assert_eq!(table.len(), 1);
    }

    #[test]
    fn top_n_and_tie_break() {
        let table = table_of(&[("a.com", 3.0), ("b.com", 2.0), ("c.com", 1.0)]);
        let top: Vec<_> = table.top(2).into_iter().map(|(k, _)| k.name.present()).collect();
        assert_eq!(top, ["a.com", "b.com"]);
        let tied = table_of(&[("zz.com", 1.0), ("aa.com", 1.0), ("top.com", 2.0)]);
        let top: Vec<_> = tied.top(2).into_iter().map(|(k, _)| k.name.present()).collect();
        assert_eq!(top, ["top.com", "aa.com"]);
    }

    #[test]
    fn refresh_membership_and_fixed_point() {
        let table = table_of(&[("a.com", 3.0), ("b.com", 2.0), ("c.com", 1.0)]);
        let empty = PopularityList::new();
        let (list, batch) = refresh_list(&table, &empty, &mut resolve_all, &cfg(2));
        assert_eq!(list.len(), 2);
        assert!(list.contains(&key("a.com")) && list.contains(&key("b.com")));
        assert_eq!(batch.deltas.len(), 2);

        let (again, batch) = refresh_list(&table, &list, &mut resolve_all, &cfg(2));
        assert!(batch.deltas.is_empty());
        assert_eq!(again.version(), list.version() + 1);

        let shifted = table_of(&[("a.com", 3.0), ("c.com", 2.5), ("b.com", 2.0)]);
        let (next, batch) = refresh_list(&shifted, &list, &mut resolve_all, &cfg(2));
        assert_eq!(next.get(&key("a.com")).unwrap().order, list.get(&key("a.com")).unwrap().order);
        assert!(!next.contains(&key("b.com")));
        let bytes = encode_batch(&list, &batch).unwrap();
        assert_eq!(crate::delta::apply_batch(&list, &bytes).unwrap(), next);
        assert_eq!(diff_states(&list, &next), batch);
    }

    #[test]
    fn refresh_recomputes_chain_support() {
        let head = key("www.site.com");
        let mid = key("edge.cdn.net");
        let mut resolver = |k: &RecordKey| -> Option<(RecordAnswer, Ttl)> {
            let ttl = Ttl::new(60).unwrap();
            match k.name.present().as_str() {
                "www.site.com" => Some((RecordAnswer::Cname(parse_domain("edge.cdn.net").unwrap()), ttl)),
                "edge.cdn.net" => Some((RecordAnswer::A(Ipv4Addr::new(1, 2, 3, 4)), ttl)),
                "other.org" => Some((RecordAnswer::A(Ipv4Addr::new(5, 6, 7, 8)), ttl)),
                _ => None,
            }
        };
        let table = table_of(&[("www.site.com", 2.0), ("ghost.com", 1.5), ("other.org", 1.0)]);
        let (list, _) = refresh_list(&table, &PopularityList::new(), &mut resolver, &cfg(2));
        assert_eq!(list.popular_len(), 2, "unresolvable candidate skipped");
        assert!(list.get(&mid).unwrap().is_cname_support);
        assert!(list.lookup(&head).is_hit());

        // Voting the support record into the popular set flips its flag.
        let table = table_of(&[("edge.cdn.net", 5.0), ("www.site.com", 2.0)]);
        let (next, batch) = refresh_list(&table, &list, &mut resolver, &cfg(2));
        assert!(!next.get(&mid).unwrap().is_cname_support);
        assert!(next.lookup(&head).is_hit());
        assert_eq!(diff_states(&list, &next), batch);
    }

    #[test]
    fn refresh_is_deterministic() {
        let table = table_of(&[("a.com", 1.0), ("b.com", 1.0), ("c.com", 1.0), ("d.com", 0.5)]);
        let run = || {
            let (_, batch) = refresh_list(&table, &PopularityList::new(), &mut resolve_all, &cfg(3));
            batch.to_bytes()
        };
        assert_eq!(run(), run());
    }
}
