//! Discrete-event loop: trace replay, upstream re-queries, batch broadcast and
//! hourly voting rounds.

use std::collections::{BTreeMap, HashMap};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use super::churn::{ChurnError, ChurnModel, TrackedRecord, Upstream};
use super::report::{ExposureInputs, Fallback, HourStats, SimReport};
use super::trace::{KeyId, Trace};
use super::universe::{mix64, Universe};
use crate::delta::{Delta, DeltaError, Millis, UpdateBatch, UpdateScheduler};
use crate::mixnet::{run_voting_round, CipherSuite, LedgerPolicy, MixConfig, MixNetwork, RoundError};
use crate::model::{ClientId, RecordAnswer, RecordKey, Ttl};
use crate::poplist::{build_list, PopularityList};
use crate::voting::{bootstrap_weights, count_votes, generate_ballot, refresh_from_ranking, Ranking, RoundConfig, WeightTable};

const DAY_S: u64 = 86_400;

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub n_popular: usize,
    /// Seconds between voting rounds.
    pub t_refresh: u64,
    pub ttl_min: u32,
    /// Shuffle rounds per voting round.
    pub rounds: usize,
    pub v_max: usize,
    pub p_vote: f64,
    pub alpha: f64,
    pub seed: u64,
    pub fallback: Fallback,
    /// Seconds simulated after the bootstrap day; `None` runs to the last
    /// complete refresh period of the trace.
    pub duration: Option<u64>,
    pub bootstrap: u64,
    pub churn: ChurnModel,
    pub universe: Universe,
    pub cipher: CipherSuite,
    pub ledger_policy: LedgerPolicy,
    /// Seconds between replica digest checks.
    pub digest_interval: u64,
    /// Follow upstream answers and broadcast their changes. Membership and
    /// hit ratios do not depend on it.
    pub track_answers: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            n_popular: 25_000,
            t_refresh: 3600,
            ttl_min: 60,
            rounds: 10,
            v_max: 10,
            p_vote: 0.3,
            alpha: 0.1,
            seed: 1,
            fallback: Fallback::Tor3,
            duration: None,
            bootstrap: DAY_S,
            churn: ChurnModel::default(),
            universe: Universe::default(),
            cipher: CipherSuite::Symmetric,
            ledger_policy: LedgerPolicy::ExcludeNode,
            digest_interval: DAY_S,
            track_answers: true,
        }
    }
}

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Churn(#[from] ChurnError),
    #[error("trace covers {have_s} s; bootstrap plus one refresh period needs {need_s} s")]
    TraceTooShort { have_s: u64, need_s: u64 },
    #[error("voting round {round} failed: {source}")]
    Round { round: u64, source: RoundError },
    #[error("replica diverged from the server list: {0}")]
    Invariant(String),
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        let fail = |m: &str| Err(SimError::Config(m.to_string()));
        if self.n_popular == 0 {
            return fail("n_popular must be positive");
        }
        if self.t_refresh == 0 || self.bootstrap == 0 || self.digest_interval == 0 {
            return fail("t_refresh, bootstrap and digest_interval must be positive");
        }
        if Ttl::new(self.ttl_min).is_none() {
            return fail("ttl_min must be positive");
        }
        if self.duration == Some(0) {
            return fail("duration must be positive");
        }
        self.round_config().validate().map_err(|e| SimError::Config(e.to_string()))?;
        if self.rounds == 0 {
            return fail("rounds must be positive");
        }
        if self.universe.size == 0 {
            return fail("universe must be non-empty");
        }
        self.churn.validate()?;
        Ok(())
    }

    pub fn round_config(&self) -> RoundConfig {
        RoundConfig {
            t_refresh: self.t_refresh,
            v_max: self.v_max,
            p_vote: self.p_vote,
            alpha: self.alpha,
            n_popular: self.n_popular,
        }
    }
}

#[derive(Default)]
struct PipelineStats {
    hours: Vec<HourStats>,
    current: HourStats,
    snapshot_bytes: u64,
    answer_changes: u64,
    digest_checks: u32,
    digest_mismatches: u32,
    refetches: u32,
}

/// Server list, one client replica and the re-query machinery for one
/// list size.
struct Pipeline {
    n_popular: usize,
    track: bool,
    list: PopularityList,
    replica: PopularityList,
    scheduler: UpdateScheduler,
    calendar: BTreeMap<Millis, Vec<u32>>,
    tracked: Vec<Option<TrackedRecord>>,
    refresh_due: bool,
    stats: PipelineStats,
}

impl Pipeline {
    fn new(n_popular: usize, list: PopularityList, up: &Upstream, now: Millis, config: &SimConfig) -> Self {
        let ttl_min = Ttl::new(config.ttl_min).expect("validated");
        let snapshot = list.serialize_snapshot();
        let replica = PopularityList::parse_snapshot(&snapshot).expect("fresh snapshot parses");
        let mut p = Pipeline {
            n_popular,
            track: config.track_answers,
            list,
            replica,
            scheduler: UpdateScheduler::new(ttl_min, now),
            calendar: BTreeMap::new(),
            tracked: Vec::new(),
            refresh_due: false,
            stats: PipelineStats { snapshot_bytes: snapshot.len() as u64, ..Default::default() },
        };
        if p.track {
            let keys: Vec<(u32, RecordKey)> = p.list.entries().map(|e| (e.order, e.key.clone())).collect();
            for (order, key) in keys {
                let (_, rec) = up.track(&key, now);
                p.follow(order, rec, now);
            }
        }
        p
    }

    fn follow(&mut self, order: u32, rec: TrackedRecord, now: Millis) {
        let slot = order as usize;
        if self.tracked.len() <= slot {
            self.tracked.resize(slot + 1, None);
        }
        self.tracked[slot] = Some(rec);
        let at = self.scheduler.schedule_requery(rec.ttl, now);
        self.calendar.entry(at).or_default().push(order);
    }

    fn requery(&mut self, up: &Upstream, at: Millis) {
        let Some(orders) = self.calendar.remove(&at) else { return };
        for order in orders {
            let Some(Some(mut rec)) = self.tracked.get(order as usize).copied() else { continue };
            if up.advance(&mut rec, at) {
                self.scheduler.observe(order, up.answer(&rec), rec.ttl);
            }
            self.follow(order, rec, at);
        }
    }

    /// Processes every re-query and flush due before `limit`, or at it when
    /// `inclusive`.
    fn advance(&mut self, limit: Millis, inclusive: bool, up: &Upstream, ranking: &mut Ranking<'_>) -> Result<(), SimError> {
        let due = |t: Millis| t < limit || (inclusive && t == limit);
        loop {
            let tick = self.scheduler.next_flush();
            match self.calendar.first_key_value().map(|(&t, _)| t) {
                Some(t) if t <= tick && due(t) => self.requery(up, t),
                _ if due(tick) => self.flush(tick, up, ranking)?,
                _ => return Ok(()),
            }
        }
    }

    fn flush(&mut self, now: Millis, up: &Upstream, ranking: &mut Ranking<'_>) -> Result<(), SimError> {
        let mut deltas = self.scheduler.flush(now, &self.list).unwrap_or_default();
        let invariant = |e: DeltaError| SimError::Invariant(e.to_string());
        if !deltas.is_empty() {
            self.stats.answer_changes += deltas.iter().filter(|d| matches!(d, Delta::AnswerChange { .. })).count() as u64;
            self.list.apply_deltas(&deltas).map_err(invariant)?;
        }
        if std::mem::take(&mut self.refresh_due) {
            let refresh = self.refresh(now, up, ranking)?;
            deltas.extend(refresh);
        }
        if deltas.is_empty() {
            return Ok(());
        }
        let from = self.list.version();
        self.list.set_version(from + 1);
        let bytes = UpdateBatch::new(from, deltas).to_bytes();
        self.stats.current.update_bytes += bytes.len() as u64;
        self.stats.current.batches += 1;
        match self.replica.apply_batch(&bytes) {
            Ok(()) => Ok(()),
            Err(DeltaError::VersionGap { .. }) => {
                self.refetch();
                Ok(())
            }
            Err(e) => Err(invariant(e)),
        }
    }

    fn refresh(&mut self, now: Millis, up: &Upstream, ranking: &mut Ranking<'_>) -> Result<Vec<Delta>, SimError> {
        let mut fresh: HashMap<RecordKey, TrackedRecord> = HashMap::new();
        let mut resolver = |key: &RecordKey| -> Option<(RecordAnswer, Ttl)> {
            let (answer, rec) = up.track(key, now);
            fresh.insert(key.clone(), rec);
            Some((answer, rec.ttl))
        };
        let deltas = refresh_from_ranking(ranking, &self.list, &mut resolver, self.n_popular);
        let mut carried: HashMap<RecordKey, TrackedRecord> = HashMap::new();
        for d in &deltas {
            if let Delta::RecordRemove { order } = *d {
                self.scheduler.forget(order);
                let rec = self.tracked.get_mut(order as usize).and_then(Option::take);
                if let (Some(rec), Some(e)) = (rec, self.list.entry(order)) {
                    carried.insert(e.key.clone(), rec);
                }
            }
        }
        self.list.apply_deltas(&deltas).map_err(|e| SimError::Invariant(e.to_string()))?;
        if self.track {
            for d in &deltas {
                if let Delta::RecordAdd { key, .. } = d {
                    let order = self.list.get(key).expect("just added").order;
                    let rec = carried.remove(key).or_else(|| fresh.get(key).copied()).unwrap_or_else(|| up.track(key, now).1);
                    self.follow(order, rec, now);
                }
            }
        }
        Ok(deltas)
    }

    fn refetch(&mut self) {
        let snapshot = self.list.serialize_snapshot();
        self.replica = PopularityList::parse_snapshot(&snapshot).expect("fresh snapshot parses");
        self.stats.snapshot_bytes += snapshot.len() as u64;
        self.stats.refetches += 1;
    }

    fn check_digest(&mut self) {
        self.stats.digest_checks += 1;
        if self.replica.digest() != self.list.digest() {
            self.stats.digest_mismatches += 1;
            self.refetch();
        }
    }

    fn lookup(&mut self, key: &RecordKey) {
        self.stats.current.queries += 1;
        if self.replica.resolves(key) {
            self.stats.current.hits += 1;
        }
    }

    fn close_hour(&mut self, hour: u32, votes: u64, voters: u32) {
        let mut h = std::mem::take(&mut self.stats.current);
        h.hour = hour;
        h.votes = votes;
        h.voters = voters;
        self.stats.hours.push(h);
    }
}

/// Ballot collection and the mixnet round, shared by every pipeline.
struct Voting {
    net: MixNetwork,
    table: WeightTable,
    round_cfg: RoundConfig,
    mix_cfg: MixConfig,
    histories: Vec<Vec<KeyId>>,
    seed: u64,
    round: u64,
    violations: u64,
}

impl Voting {
    fn run_round(&mut self, trace: &Trace) -> Result<(u64, u32), SimError> {
        self.round += 1;
        let mut rng = ChaCha8Rng::seed_from_u64(mix64(self.seed ^ 0xb0_7e) ^ self.round);
        let mut ballots = Vec::new();
        for (client, history) in self.histories.iter_mut().enumerate() {
            if history.is_empty() {
                continue;
            }
            let ballot = generate_ballot(history.iter().map(|&id| trace.key(id)), &self.round_cfg, &mut rng);
            history.clear();
            if !ballot.is_empty() {
                ballots.push((ClientId(client as u32), ballot));
            }
        }
        let outcome = run_voting_round(&self.net, &ballots, &self.mix_cfg, &mut rng)
            .map_err(|source| SimError::Round { round: self.round, source })?;
        self.violations += outcome.excluded.len() as u64;
        self.table.update(&count_votes(&outcome.votes), self.round_cfg.alpha);
        Ok((outcome.votes.len() as u64, ballots.len() as u32))
    }
}

/// Runs the trace once per list size; voting is shared, so every size sees
/// the same rounds and weights.
pub fn run_sweep(config: &SimConfig, sizes: &[usize], trace: &Trace) -> Result<Vec<SimReport>, SimError> {
    config.validate()?;
    if sizes.is_empty() || sizes.contains(&0) {
        return Err(SimError::Config("list sizes must be positive".into()));
    }
    let (Some(start), Some(end)) = (trace.start_ms(), trace.end_ms()) else {
        return Err(SimError::TraceTooShort { have_s: 0, need_s: config.bootstrap + config.t_refresh });
    };
    let boot_end = start + config.bootstrap * 1000;
    let period = config.t_refresh * 1000;
    let mut hours = (end.saturating_sub(boot_end) / period) as u32;
    if let Some(d) = config.duration {
        hours = hours.min((d / config.t_refresh) as u32);
    }
    if hours == 0 {
        return Err(SimError::TraceTooShort {
            have_s: (end - start) / 1000,
            need_s: config.bootstrap + config.t_refresh,
        });
    }

    let events = trace.events();
    let first_live = events.partition_point(|e| e.t_ms < boot_end);
    let round_cfg = config.round_config();
    let table = bootstrap_weights(events[..first_live].iter().map(|e| trace.key(e.key)), &round_cfg);
    let up = Upstream::new(config.universe, config.churn.clone(), start);

    let mut pipelines: Vec<Pipeline> = sizes
        .iter()
        .map(|&n| {
            let mut resolver = |k: &RecordKey| Some(up.resolve(k, boot_end));
            let ranked: Vec<RecordKey> = table.top(n.saturating_mul(2).saturating_add(64)).into_iter().map(|(k, _)| k.clone()).collect();
            let ranked = ranked.into_iter().map(|k| {
                let (a, t) = up.resolve(&k, boot_end);
                (k, a, t)
            });
            let list = build_list(ranked, &mut resolver, n).list.compacted();
            Pipeline::new(n, list, &up, boot_end, config)
        })
        .collect();

    let clients = trace.clients();
    let mut net_rng = ChaCha8Rng::seed_from_u64(mix64(config.seed ^ 0x6e_e7));
    let mut mix_cfg = MixConfig::new(config.rounds, config.v_max);
    mix_cfg.policy = config.ledger_policy;
    let mut voting = Voting {
        net: MixNetwork::with_clients(clients, config.cipher, &mut net_rng),
        table,
        round_cfg,
        mix_cfg,
        histories: vec![Vec::new(); clients],
        seed: config.seed,
        round: 0,
        violations: 0,
    };

    let digest_every = (config.digest_interval / config.t_refresh).max(1);
    let widest = sizes.iter().max().map_or(0, |&n| n.saturating_add(64));
    let mut idx = first_live;
    let (mut total_votes, mut total_voters) = (0u64, 0u64);
    for hour in 0..hours {
        let boundary = boot_end + u64::from(hour + 1) * period;
        let mut idle = Ranking::new(&voting.table);
        while let Some(e) = events.get(idx).filter(|e| e.t_ms < boundary) {
            let key = trace.key(e.key);
            for p in &mut pipelines {
                p.advance(e.t_ms, true, &up, &mut idle)?;
                p.lookup(key);
            }
            voting.histories[e.client.0 as usize].push(e.key);
            idx += 1;
        }
        let (votes, voters) = voting.run_round(trace)?;
        total_votes += votes;
        total_voters += u64::from(voters);
        let mut ranking = Ranking::new(&voting.table);
        ranking.top(widest);
        for p in &mut pipelines {
            p.advance(boundary, false, &up, &mut ranking)?;
            p.refresh_due = true;
            p.advance(boundary, true, &up, &mut ranking)?;
            if p.refresh_due {
                p.flush(boundary, &up, &mut ranking)?;
            }
            p.close_hour(hour, votes, voters);
            if u64::from(hour + 1) % digest_every == 0 {
                p.check_digest();
            }
        }
    }

    let live_queries = (idx - first_live) as u64;
    Ok(pipelines
        .into_iter()
        .map(|p| {
            let ratios: Vec<f64> = p.stats.hours.iter().filter_map(HourStats::hit_ratio).collect();
            let mean_hit_ratio = if ratios.is_empty() { 0.0 } else { ratios.iter().sum::<f64>() / ratios.len() as f64 };
            let bytes: u64 = p.stats.hours.iter().map(|h| h.update_bytes).sum();
            let queries: u64 = p.stats.hours.iter().map(|h| h.queries).sum();
            let hits: u64 = p.stats.hours.iter().map(|h| h.hits).sum();
            SimReport {
                n_popular: p.n_popular,
                ttl_min: config.ttl_min,
                t_refresh: config.t_refresh,
                rounds: config.rounds,
                v_max: config.v_max,
                p_vote: config.p_vote,
                alpha: config.alpha,
                seed: config.seed,
                fallback: config.fallback,
                churn: config.churn.clone(),
                track_answers: config.track_answers,
                mean_hit_ratio,
                bandwidth_bytes_per_hour: bytes as f64 / f64::from(hours),
                snapshot_bytes: p.stats.snapshot_bytes,
                fallback_queries: queries - hits,
                answer_changes: p.stats.answer_changes,
                ledger_violations: voting.violations,
                digest_checks: p.stats.digest_checks,
                digest_mismatches: p.stats.digest_mismatches,
                snapshot_refetches: p.stats.refetches,
                final_list_len: p.list.len(),
                final_pool_len: p.list.pool().len(),
                exposure: ExposureInputs {
                    h: mean_hit_ratio,
                    voters: total_voters as f64 / f64::from(hours),
                    users: clients as u64,
                    q_v: if live_queries == 0 { 0.0 } else { total_votes as f64 / live_queries as f64 },
                },
                hours: p.stats.hours,
            }
        })
        .collect())
}

pub fn run_sim(config: &SimConfig, trace: &Trace) -> Result<SimReport, SimError> {
    Ok(run_sweep(config, &[config.n_popular], trace)?.remove(0))
}

/// Update bandwidth for a fixed membership: the `n_popular` most popular
/// universe records (and their chain support) churn for `duration` seconds
/// and every flush is encoded. Returns the encoded batches in order.
pub fn churn_batches(config: &SimConfig, duration: u64) -> Result<Vec<Vec<u8>>, SimError> {
    config.validate()?;
    let up = Upstream::new(config.universe, config.churn.clone(), 0);
    let n = (config.n_popular as u64).min(config.universe.size);
    let ranked = (0..n).map(|i| {
        let key = config.universe.key(i);
        let (a, t) = up.resolve(&key, 0);
        (key, a, t)
    });
    let mut resolver = |k: &RecordKey| Some(up.resolve(k, 0));
    let list = build_list(ranked, &mut resolver, config.n_popular).list.compacted();
    let mut cfg = config.clone();
    cfg.track_answers = true;
    let mut p = Pipeline::new(config.n_popular, list, &up, 0, &cfg);
    let table = WeightTable::new();
    let mut ranking = Ranking::new(&table);
    let end = duration * 1000;
    let mut batches = Vec::new();
    let mut replica = p.list.clone();
    loop {
        let tick = p.scheduler.next_flush();
        if tick > end {
            break;
        }
        p.advance(tick, false, &up, &mut ranking)?;
        let mut deltas = p.scheduler.flush(tick, &p.list).unwrap_or_default();
        if deltas.is_empty() {
            continue;
        }
        p.list.apply_deltas(&deltas).map_err(|e| SimError::Invariant(e.to_string()))?;
        let from = p.list.version();
        p.list.set_version(from + 1);
        let bytes = UpdateBatch::new(from, std::mem::take(&mut deltas)).to_bytes();
        replica.apply_batch(&bytes).map_err(|e| SimError::Invariant(e.to_string()))?;
        batches.push(bytes);
    }
    if replica.digest() != p.list.digest() {
        return Err(SimError::Invariant("bandwidth replica digest mismatch".into()));
    }
    Ok(batches)
}
