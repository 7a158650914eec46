//! Probability that an adversary links a DNS query to the user who made it.
//!
//! A query or vote is traced back to its sender when every hop on its path
//! colludes, each independently with probability `c`. Otherwise the
//! adversary guesses uniformly over the anonymity set it cannot see past:
//! all users for relayed queries, the round's voters for votes. Queries
//! resolved from the local list and not turned into votes are never seen.
//!
//! All figures are per query.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MIN_TRIALS: u64 = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    Direct,
    SingleRelay,
    Tor3,
    Popdns,
}

impl Scheme {
    pub const ALL: [Scheme; 4] = [Scheme::Direct, Scheme::SingleRelay, Scheme::Tor3, Scheme::Popdns];

    pub fn as_str(self) -> &'static str {
        match self {
            Scheme::Direct => "direct",
            Scheme::SingleRelay => "single_relay",
            Scheme::Tor3 => "tor3",
            Scheme::Popdns => "popdns",
        }
    }
}

impl std::str::FromStr for Scheme {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Scheme::ALL
            .into_iter()
            .find(|x| x.as_str() == s)
            .ok_or_else(|| format!("unknown scheme {s:?} (expected direct, single_relay, tor3 or popdns)"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExposureParams {
    /// Probability that any one relay or mix node colludes.
    pub c: f64,
    pub users: u64,
    pub voters: u64,
    /// Fraction of queries resolved locally.
    pub h: f64,
    pub rounds: u32,
    /// Probability that a locally resolved query ends up in a vote.
    pub q_v: f64,
    pub scheme: Scheme,
}

impl Default for ExposureParams {
    fn default() -> Self {
        Self { c: 0.5, users: 10_000, voters: 10_000, h: 0.944, rounds: 10, q_v: 0.3, scheme: Scheme::Popdns }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ExposureError {
    #[error("{name} must lie in [0, 1], got {value}")]
    Probability { name: &'static str, value: f64 },
    #[error("need users >= voters >= 1, got users = {users}, voters = {voters}")]
    Population { users: u64, voters: u64 },
    #[error("mix path length must be at least 1")]
    Rounds,
    #[error("Monte Carlo needs at least {MIN_TRIALS} trials, got {0}")]
    TooFewTrials(u64),
}

impl ExposureParams {
    pub fn validate(&self) -> Result<(), ExposureError> {
        for (name, value) in [("c", self.c), ("h", self.h), ("q_v", self.q_v)] {
            if !(0.0..=1.0).contains(&value) {
                return Err(ExposureError::Probability { name, value });
            }
        }
        if self.voters == 0 || self.voters > self.users {
            return Err(ExposureError::Population { users: self.users, voters: self.voters });
        }
        if self.rounds == 0 {
            return Err(ExposureError::Rounds);
        }
        Ok(())
    }

    pub fn with_scheme(self, scheme: Scheme) -> Self {
        Self { scheme, ..self }
    }

    pub fn with_c(self, c: f64) -> Self {
        Self { c, ..self }
    }
}

fn traced(c: f64, hops: i32, set: u64) -> f64 {
    let all = c.powi(hops);
    all + (1.0 - all) / set as f64
}

pub fn exposure_closed_form(p: &ExposureParams) -> f64 {
    let tor3 = traced(p.c, 3, p.users);
    match p.scheme {
        Scheme::Direct => 1.0,
        Scheme::SingleRelay => traced(p.c, 1, p.users),
        Scheme::Tor3 => tor3,
        Scheme::Popdns => {
            let vote = traced(p.c, p.rounds as i32, p.voters);
            (1.0 - p.h) * tor3 + p.h * p.q_v * vote
        }
    }
}

/// Exposure of the voted list minus that of plain three-hop relaying.
pub fn low_collusion_penalty(p: &ExposureParams) -> f64 {
    exposure_closed_form(&p.with_scheme(Scheme::Popdns)) - exposure_closed_form(&p.with_scheme(Scheme::Tor3))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Estimate {
    pub mean: f64,
    pub stderr: f64,
    pub trials: u64,
}

fn path_traced<G: Rng>(rng: &mut G, c: f64, hops: u32, set: u64) -> bool {
    let mut all = true;
    for _ in 0..hops {
        all &= rng.gen_bool(c);
    }
    all || rng.gen_range(0..set) == 0
}

fn trial(p: &ExposureParams, seed: u64) -> bool {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match p.scheme {
        Scheme::Direct => true,
        Scheme::SingleRelay => path_traced(&mut rng, p.c, 1, p.users),
        Scheme::Tor3 => path_traced(&mut rng, p.c, 3, p.users),
        Scheme::Popdns => {
            if !rng.gen_bool(p.h) {
                path_traced(&mut rng, p.c, 3, p.users)
            } else if rng.gen_bool(p.q_v) {
                path_traced(&mut rng, p.c, p.rounds, p.voters)
            } else {
                false
            }
        }
    }
}

/// Simulates `trials` independent queries; trial `i` draws from its own
/// generator seeded with `seed + i`.
pub fn exposure_monte_carlo(p: &ExposureParams, trials: u64, seed: u64) -> Result<Estimate, ExposureError> {
    p.validate()?;
    if trials < MIN_TRIALS {
        return Err(ExposureError::TooFewTrials(trials));
    }
    let exposed: u64 = (0..trials).into_par_iter().map(|i| u64::from(trial(p, seed.wrapping_add(i)))).sum();
    let mean = exposed as f64 / trials as f64;
    let stderr = (mean * (1.0 - mean) / trials as f64).sqrt();
    Ok(Estimate { mean, stderr, trials })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExposureRow {
    pub scheme: Scheme,
    pub c: f64,
    pub exposure: f64,
    pub stderr: Option<f64>,
}

/// Closed-form exposure of `base.scheme` at each collusion rate.
pub fn exposure_curve(base: &ExposureParams, cs: &[f64]) -> Vec<ExposureRow> {
    cs.iter()
        .map(|&c| ExposureRow { scheme: base.scheme, c, exposure: exposure_closed_form(&base.with_c(c)), stderr: None })
        .collect()
}

pub fn exposure_csv(rows: &[ExposureRow]) -> String {
    let mut out = String::from("scheme,c,exposure,stderr\n");
    for r in rows {
        let stderr = r.stderr.map(|s| format!("{s:.9}")).unwrap_or_default();
        out.push_str(&format!("{},{:.4},{:.9},{}\n", r.scheme.as_str(), r.c, r.exposure, stderr));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid() -> Vec<f64> {
        (0..=20).map(|i| f64::from(i) / 20.0).collect()
    }

    #[test]
    fn degenerate_collusion() {
        let p = ExposureParams::default();
        for s in [Scheme::Direct, Scheme::SingleRelay, Scheme::Tor3] {
            assert_eq!(exposure_closed_form(&p.with_scheme(s).with_c(1.0)), 1.0);
        }
        let tor3 = p.with_scheme(Scheme::Tor3).with_c(0.0);
        assert!((exposure_closed_form(&tor3) - 1e-4).abs() < 1e-15);
        // Unvoted local hits stay hidden even under full collusion.
        let popdns = exposure_closed_form(&p.with_c(1.0));
        assert!((popdns - (1.0 - p.h * (1.0 - p.q_v))).abs() < 1e-12);
    }

    #[test]
    fn ordering_and_monotonicity() {
        let base = ExposureParams { voters: 50, ..ExposureParams::default() };
        let mut prev = [0.0f64; 4];
        for c in grid() {
            let e: Vec<f64> = Scheme::ALL.iter().map(|&s| exposure_closed_form(&base.with_scheme(s).with_c(c))).collect();
            assert!(e[0] >= e[1] && e[1] >= e[2]);
            for (i, x) in e.iter().enumerate() {
                assert!((0.0..=1.0).contains(x));
                assert!(*x >= prev[i] - 1e-15);
                prev[i] = *x;
            }
        }
    }

    #[test]
    fn penalty_signs() {
        let p = ExposureParams { voters: 50, ..ExposureParams::default() };
        assert!(low_collusion_penalty(&p.with_c(0.0)) > 0.0);
        assert!(low_collusion_penalty(&p.with_c(0.6)) < 0.0);
        let no_votes = ExposureParams { voters: p.users, q_v: 0.0, ..p };
        for c in grid() {
            assert!(low_collusion_penalty(&no_votes.with_c(c)) <= 0.0);
        }
    }

    #[test]
    fn monte_carlo_degenerate_cases() {
        let p = ExposureParams { c: 1.0, scheme: Scheme::Tor3, ..ExposureParams::default() };
        assert_eq!(exposure_monte_carlo(&p, MIN_TRIALS, 3).unwrap().mean, 1.0);
        let p = ExposureParams { users: 1, voters: 1, c: 0.0, ..ExposureParams::default() };
        assert_eq!(exposure_monte_carlo(&p.with_scheme(Scheme::SingleRelay), MIN_TRIALS, 3).unwrap().mean, 1.0);
        assert!(matches!(exposure_monte_carlo(&p, 10, 3), Err(ExposureError::TooFewTrials(10))));
    }

    #[test]
    fn rejects_bad_params() {
        let p = ExposureParams { voters: 20_000, ..ExposureParams::default() };
        assert!(matches!(p.validate(), Err(ExposureError::Population { .. })));
        let p = ExposureParams { h: 1.5, ..ExposureParams::default() };
        assert!(matches!(p.validate(), Err(ExposureError::Probability { name: "h", .. })));
    }
}
