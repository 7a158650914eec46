//! Simulation results and their CSV form.

use std::fs;
use std::io::{self, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::churn::ChurnModel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Fallback {
    #[default]
    Tor3,
    Direct,
}

impl Fallback {
    pub fn as_str(self) -> &'static str {
        match self {
            Fallback::Tor3 => "tor3",
            Fallback::Direct => "direct",
        }
    }
}

impl std::str::FromStr for Fallback {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "tor3" => Ok(Fallback::Tor3),
            "direct" => Ok(Fallback::Direct),
            other => Err(format!("unknown fallback {other:?} (expected tor3 or direct)")),
        }
    }
}

/// Counters for one simulated hour after the bootstrap day.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct HourStats {
    pub hour: u32,
    pub queries: u64,
    pub hits: u64,
    /// Encoded update bytes broadcast during the hour.
    pub update_bytes: u64,
    pub batches: u32,
    /// Votes and voters of the round closing this hour.
    pub votes: u64,
    pub voters: u32,
}

impl HourStats {
    pub fn hit_ratio(&self) -> Option<f64> {
        (self.queries > 0).then(|| self.hits as f64 / self.queries as f64)
    }
}

/// Measured inputs for the exposure model.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ExposureInputs {
    /// Mean hourly hit ratio.
    pub h: f64,
    /// Mean voters per round.
    pub voters: f64,
    pub users: u64,
    /// Votes per query over the voting period.
    pub q_v: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimReport {
    pub n_popular: usize,
    pub ttl_min: u32,
    pub t_refresh: u64,
    pub rounds: usize,
    pub v_max: usize,
    pub p_vote: f64,
    pub alpha: f64,
    pub seed: u64,
    pub fallback: Fallback,
    pub churn: ChurnModel,
    pub track_answers: bool,
    pub hours: Vec<HourStats>,
    pub mean_hit_ratio: f64,
    pub bandwidth_bytes_per_hour: f64,
    pub snapshot_bytes: u64,
    pub fallback_queries: u64,
    pub answer_changes: u64,
    pub ledger_violations: u64,
    pub digest_checks: u32,
    pub digest_mismatches: u32,
    pub snapshot_refetches: u32,
    pub final_list_len: usize,
    pub final_pool_len: usize,
    pub exposure: ExposureInputs,
}

fn f6(x: f64) -> String {
    format!("{x:.6}")
}

impl SimReport {
    pub fn hit_ratio_csv(&self) -> String {
        let mut out = String::from("hour,ratio\n");
        for h in &self.hours {
            if let Some(r) = h.hit_ratio() {
                out.push_str(&format!("{},{}\n", h.hour, f6(r)));
            }
        }
        out
    }

    pub fn bandwidth_csv(&self) -> String {
        format!(
            "ttl_min,n_popular,bytes_per_hour\n{},{},{}\n",
            self.ttl_min,
            self.n_popular,
            f6(self.bandwidth_bytes_per_hour)
        )
    }

    pub fn votes_csv(&self) -> String {
        let mut out = String::from("round,votes,voters\n");
        for h in &self.hours {
            out.push_str(&format!("{},{},{}\n", h.hour, h.votes, h.voters));
        }
        out
    }

    pub fn summary_rows(&self) -> Vec<(&'static str, String)> {
        let weights: Vec<String> = self.churn.ttl_weights.iter().map(|(t, w)| format!("{t}:{w}")).collect();
        vec![
            ("n_popular", self.n_popular.to_string()),
            ("ttl_min", self.ttl_min.to_string()),
            ("t_refresh", self.t_refresh.to_string()),
            ("rounds", self.rounds.to_string()),
            ("v_max", self.v_max.to_string()),
            ("p_vote", self.p_vote.to_string()),
            ("alpha", self.alpha.to_string()),
            ("seed", self.seed.to_string()),
            ("fallback", self.fallback.as_str().to_string()),
            ("churn_k", self.churn.k.to_string()),
            ("churn_p_change", self.churn.p_change.to_string()),
            ("churn_ttl_weights", weights.join(" ")),
            ("churn_seed", self.churn.seed.to_string()),
            ("track_answers", self.track_answers.to_string()),
            ("hours", self.hours.len().to_string()),
            ("mean_hit_ratio", f6(self.mean_hit_ratio)),
            ("bandwidth_bytes_per_hour", f6(self.bandwidth_bytes_per_hour)),
            ("snapshot_bytes", self.snapshot_bytes.to_string()),
            ("fallback_queries", self.fallback_queries.to_string()),
            ("answer_changes", self.answer_changes.to_string()),
            ("ledger_violations", self.ledger_violations.to_string()),
            ("digest_checks", self.digest_checks.to_string()),
            ("digest_mismatches", self.digest_mismatches.to_string()),
            ("snapshot_refetches", self.snapshot_refetches.to_string()),
            ("final_list_len", self.final_list_len.to_string()),
            ("final_pool_len", self.final_pool_len.to_string()),
            ("exposure_h", f6(self.exposure.h)),
            ("exposure_voters", f6(self.exposure.voters)),
            ("exposure_users", self.exposure.users.to_string()),
            ("exposure_q_v", f6(self.exposure.q_v)),
        ]
    }

    pub fn summary_csv(&self) -> String {
        let mut out = String::from("metric,value\n");
        for (k, v) in self.summary_rows() {
            out.push_str(&format!("{k},{v}\n"));
        }
        out
    }

    /// Writes `hit_ratio.csv`, `bandwidth.csv`, `votes.csv` and `summary.csv`.
    pub fn write_dir(&self, dir: &Path) -> io::Result<()> {
        fs::create_dir_all(dir)?;
        for (name, body) in [
            ("hit_ratio.csv", self.hit_ratio_csv()),
            ("bandwidth.csv", self.bandwidth_csv()),
            ("votes.csv", self.votes_csv()),
            ("summary.csv", self.summary_csv()),
        ] {
            fs::File::create(dir.join(name))?.write_all(body.as_bytes())?;
        }
        Ok(())
    }
}
