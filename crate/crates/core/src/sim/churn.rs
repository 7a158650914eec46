//! Upstream answer churn, modelling DNS load balancing.
//!
//! Every address record has a universe of `k` answers and a TTL drawn from a
//! weighted set. At each TTL expiry upstream, the record switches to a
//! different answer with probability `p_change`. The draws are a function
//! of (seed, record, expiry index), so the upstream timeline is fixed no
//! matter how often the server looks at it.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::universe::{address_answer, hash2, key_hash, unit, Universe};
use crate::model::{QType, RecordAnswer, RecordKey, Ttl};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChurnModel {
    pub k: u32,
    pub p_change: f64,
    /// (TTL seconds, weight) pairs; weights need not sum to one.
    pub ttl_weights: Vec<(u32, f64)>,
    pub seed: u64,
}

impl Default for ChurnModel {
    fn default() -> Self {
        Self {
            k: 8,
            p_change: 0.5,
            ttl_weights: vec![(30, 0.20), (60, 0.20), (300, 0.25), (3600, 0.25), (86400, 0.10)],
            seed: 0xc4a2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ChurnError {
    #[error("answer universe size must be at least 1")]
    K,
    #[error("p_change must lie in [0, 1], got {0}")]
    PChange(f64),
    #[error("TTL weights must be non-empty, with positive TTLs and non-negative weights summing above zero")]
    Weights,
}

impl ChurnModel {
    pub fn validate(&self) -> Result<(), ChurnError> {
        if self.k == 0 {
            return Err(ChurnError::K);
        }
        if !(0.0..=1.0).contains(&self.p_change) {
            return Err(ChurnError::PChange(self.p_change));
        }
        let total: f64 = self.ttl_weights.iter().map(|(_, w)| w).sum();
        if self.ttl_weights.is_empty()
            || self.ttl_weights.iter().any(|&(t, w)| t == 0 || !(w >= 0.0))
            || !(total > 0.0)
        {
            return Err(ChurnError::Weights);
        }
        Ok(())
    }

    pub fn ttl_for(&self, record_hash: u64) -> Ttl {
        let total: f64 = self.ttl_weights.iter().map(|(_, w)| w).sum();
        let mut u = unit(hash2(self.seed ^ 0x771, record_hash)) * total;
        for &(secs, w) in &self.ttl_weights {
            if u < w {
                return Ttl::new(secs).expect("validated");
            }
            u -= w;
        }
        Ttl::new(self.ttl_weights.last().expect("validated").0).expect("validated")
    }

    /// Second eigenvalue of the per-expiry transition matrix.
    fn lambda(&self) -> f64 {
        if self.k < 2 {
            return 1.0;
        }
        1.0 - self.p_change * f64::from(self.k) / f64::from(self.k - 1)
    }
}

/// Answer state of one record: which of its `k` answers is current.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RecordChurn {
    pub k: u32,
    pub current: u32,
}

fn apply_change(state: &mut RecordChurn, pick: u64) -> u32 {
    state.current = ((u64::from(state.current) + 1 + pick % u64::from(state.k - 1)) % u64::from(state.k)) as u32;
    state.current
}

/// One TTL expiry: with probability `p_change`, moves to a different answer
/// chosen uniformly and returns it.
pub fn churn_step<G: Rng + ?Sized>(state: &mut RecordChurn, p_change: f64, rng: &mut G) -> Option<u32> {
    if state.k < 2 || !rng.gen_bool(p_change) {
        return None;
    }
    Some(apply_change(state, rng.gen()))
}

/// Upstream view of a record the server keeps re-querying.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TrackedRecord {
    pub hash: u64,
    pub qtype: QType,
    pub ttl: Ttl,
    pub state: RecordChurn,
    pub epoch: u64,
}

#[derive(Debug, Clone)]
pub struct Upstream {
    pub universe: Universe,
    pub churn: ChurnModel,
    pub origin_ms: u64,
}

impl Upstream {
    pub fn new(universe: Universe, churn: ChurnModel, origin_ms: u64) -> Self {
        Self { universe, churn, origin_ms }
    }

    fn epoch(&self, ttl: Ttl, t_ms: u64) -> u64 {
        t_ms.saturating_sub(self.origin_ms) / ttl.millis()
    }

    /// Current answer of `key` at `t_ms`, with the record state used to
    /// follow it afterwards. Alias records have a single answer.
    pub fn track(&self, key: &RecordKey, t_ms: u64) -> (RecordAnswer, TrackedRecord) {
        let hash = key_hash(key);
        let ttl = self.churn.ttl_for(hash);
        let epoch = self.epoch(ttl, t_ms);
        if let Some(alias) = self.universe.alias(key) {
            let state = RecordChurn { k: 1, current: 0 };
            return (alias, TrackedRecord { hash, qtype: key.qtype, ttl, state, epoch });
        }
        let k = self.churn.k;
        let current = (hash2(hash2(self.churn.seed ^ 0x1a, hash), epoch) % u64::from(k)) as u32;
        let rec = TrackedRecord { hash, qtype: key.qtype, ttl, state: RecordChurn { k, current }, epoch };
        (self.answer(&rec), rec)
    }

    pub fn resolve(&self, key: &RecordKey, t_ms: u64) -> (RecordAnswer, Ttl) {
        let (answer, rec) = self.track(key, t_ms);
        (answer, rec.ttl)
    }

    pub fn answer(&self, rec: &TrackedRecord) -> RecordAnswer {
        address_answer(rec.hash, rec.qtype, rec.state.current)
    }

    /// Moves `rec` forward to `t_ms`; returns whether the answer differs
    /// from before.
    pub fn advance(&self, rec: &mut TrackedRecord, t_ms: u64) -> bool {
        let target = self.epoch(rec.ttl, t_ms);
        if rec.state.k < 2 || target <= rec.epoch {
            rec.epoch = rec.epoch.max(target);
            return false;
        }
        let before = rec.state.current;
        let gap = target - rec.epoch;
        let lambda = self.churn.lambda().abs();
        if gap >= 2 && lambda.powf(gap as f64) < 1e-15 {
            let draw = hash2(hash2(self.churn.seed ^ 0x1a, rec.hash), target);
            rec.state.current = (draw % u64::from(rec.state.k)) as u32;
        } else {
            for e in rec.epoch + 1..=target {
                let h = hash2(hash2(self.churn.seed, rec.hash), e);
                if unit(h) < self.churn.p_change {
                    apply_change(&mut rec.state, mix_pick(h));
                }
            }
        }
        rec.epoch = target;
        rec.state.current != before
    }
}

fn mix_pick(h: u64) -> u64 {
    hash2(h, 0x91c4)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::parse_domain;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn degenerate_probabilities() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut s = RecordChurn { k: 8, current: 3 };
        for _ in 0..1000 {
            assert_eq!(churn_step(&mut s, 0.0, &mut rng), None);
        }
        let mut s = RecordChurn { k: 2, current: 0 };
        let seq: Vec<_> = (0..6).map(|_| churn_step(&mut s, 1.0, &mut rng).unwrap()).collect();
        assert_eq!(seq, [1, 0, 1, 0, 1, 0]);
    }

    #[test]
    fn change_frequency_half() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut s = RecordChurn { k: 8, current: 0 };
        let n = 10_000;
        let changes = (0..n).filter(|_| churn_step(&mut s, 0.5, &mut rng).is_some()).count();
        let sigma = (n as f64 * 0.25).sqrt();
        assert!((changes as f64 - 5000.0).abs() <= 3.0 * sigma, "{changes}");
    }

    #[test]
    fn upstream_timeline_independent_of_polling() {
        let up = Upstream::new(Universe::default(), ChurnModel::default(), 0);
        let key = RecordKey::new(parse_domain("www.site3.org").unwrap(), QType::A);
        let (_, mut fine) = up.track(&key, 0);
        let mut coarse = fine;
        let ttl = fine.ttl.millis();
        for step in 1..=40u64 {
            up.advance(&mut fine, step * ttl);
            if step % 4 == 0 {
                up.advance(&mut coarse, step * ttl);
                assert_eq!(fine.state, coarse.state);
            }
        }
    }

    #[test]
    fn ttl_classes_follow_weights() {
        let model = ChurnModel::default();
        let mut counts = std::collections::BTreeMap::new();
        for h in 0..100_000u64 {
            *counts.entry(model.ttl_for(super::super::universe::mix64(h)).secs()).or_insert(0) += 1;
        }
        for &(secs, w) in &model.ttl_weights {
            let f = counts[&secs] as f64 / 100_000.0;
            assert!((f - w).abs() < 0.01, "{secs}: {f}");
        }
    }
}
