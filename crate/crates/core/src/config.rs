//! Flat `key = value` simulation config files (TOML syntax).
//!
//! Keys mirror [`SimConfig`] field names; churn and universe settings carry
//! `churn_` and `universe_` prefixes. Every key is optional and unknown keys
//! are rejected.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Deserialize;
use thiserror::Error;

use crate::mixnet::{CipherSuite, LedgerPolicy};
use crate::sim::{Fallback, SimConfig};

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub n_popular: Option<usize>,
    /// List sizes for a sweep; overrides `n_popular` when present.
    pub sizes: Option<Vec<usize>>,
    pub t_refresh: Option<u64>,
    pub ttl_min: Option<u32>,
    pub rounds: Option<usize>,
    pub v_max: Option<usize>,
    pub p_vote: Option<f64>,
    pub alpha: Option<f64>,
    pub seed: Option<u64>,
    pub fallback: Option<Fallback>,
    pub duration: Option<u64>,
    pub bootstrap: Option<u64>,
    pub cipher: Option<CipherSuite>,
    pub ledger_policy: Option<LedgerPolicy>,
    pub digest_interval: Option<u64>,
    pub track_answers: Option<bool>,
    pub churn_k: Option<u32>,
    pub churn_p_change: Option<f64>,
    /// `[[ttl_seconds, weight], ...]`
    pub churn_ttl_weights: Option<Vec<(u32, f64)>>,
    pub churn_seed: Option<u64>,
    pub universe_size: Option<u64>,
    pub universe_cname_fraction: Option<f64>,
    pub universe_aaaa_fraction: Option<f64>,
    pub universe_seed: Option<u64>,
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("malformed config: {0}")]
    Parse(#[from] toml::de::Error),
}

macro_rules! overlay {
    ($src:expr, $dst:expr, $($field:ident => $target:expr),* $(,)?) => {
        $( if let Some(v) = $src.$field.clone() { $target = v; } )*
    };
}

impl FileConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        Ok(toml::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.to_owned(), source })?;
        Self::parse(&text)
    }

    /// Writes every present value into `cfg`.
    pub fn apply(&self, cfg: &mut SimConfig) {
        overlay!(self, cfg,
            n_popular => cfg.n_popular,
            t_refresh => cfg.t_refresh,
            ttl_min => cfg.ttl_min,
            rounds => cfg.rounds,
            v_max => cfg.v_max,
            p_vote => cfg.p_vote,
            alpha => cfg.alpha,
            seed => cfg.seed,
            fallback => cfg.fallback,
            bootstrap => cfg.bootstrap,
            cipher => cfg.cipher,
            ledger_policy => cfg.ledger_policy,
            digest_interval => cfg.digest_interval,
            track_answers => cfg.track_answers,
            churn_k => cfg.churn.k,
            churn_p_change => cfg.churn.p_change,
            churn_ttl_weights => cfg.churn.ttl_weights,
            churn_seed => cfg.churn.seed,
            universe_size => cfg.universe.size,
            universe_cname_fraction => cfg.universe.cname_fraction,
            universe_aaaa_fraction => cfg.universe.aaaa_fraction,
            universe_seed => cfg.universe.seed,
        );
        if self.duration.is_some() {
            cfg.duration = self.duration;
        }
    }
}
