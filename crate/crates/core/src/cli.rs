//! Command-line front end.

use std::collections::HashSet;
use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::FileConfig;
use crate::delta::measure_bandwidth;
use crate::exposure::{exposure_closed_form, exposure_csv, exposure_monte_carlo, ExposureParams, ExposureRow, Scheme};
use crate::mixnet::{run_voting_round, CipherSuite, LedgerPolicy, Misbehavior, MixConfig, MixNetwork, RoundError};
use crate::model::ClientId;
use crate::poplist::{build_list, PopularityList};
use crate::sim::{
    churn_batches, gen_trace, load_trace, run_sweep, write_trace, Fallback, GenParams, SimConfig, SimError, Trace,
    Universe, Upstream,
};
use crate::voting::{bootstrap_weights, Ballot, Vote};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_INPUT: i32 = 2;
pub const EXIT_INVARIANT: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "popdns", version, about = "Voted DNS popularity lists: simulation and analysis")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic Zipf query trace.
    GenTrace(GenTraceArgs),
    /// Replay a trace through the list, update and voting pipeline.
    RunSim(RunSimArgs),
    /// Run one voting round through the mix network.
    MixRound(MixRoundArgs),
    /// Exposure rates for the anonymization schemes.
    Exposure(ExposureArgs),
    /// Update bandwidth of a fixed list under upstream churn.
    Bandwidth(BandwidthArgs),
    /// Build or inspect list snapshots.
    #[command(subcommand)]
    Snapshot(SnapshotCommand),
}

#[derive(Debug, Args)]
pub struct GenTraceArgs {
    #[arg(long, default_value_t = 2000)]
    pub clients: u32,
    #[arg(long, default_value_t = 240)]
    pub hours: u64,
    /// Mean queries per client per hour.
    #[arg(long, default_value_t = 10.0)]
    pub rate: f64,
    #[arg(long, default_value_t = 1.0)]
    pub zipf: f64,
    #[arg(long, default_value_t = 1_000_000)]
    pub domains: u64,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct RunSimArgs {
    /// Trace CSV to replay.
    #[arg(long)]
    pub trace: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub n_popular: Option<usize>,
    /// Comma-separated list sizes sharing one voting run.
    #[arg(long, value_delimiter = ',')]
    pub sizes: Option<Vec<usize>>,
    #[arg(long)]
    pub t_refresh: Option<u64>,
    #[arg(long)]
    pub ttl_min: Option<u32>,
    #[arg(long)]
    pub rounds: Option<usize>,
    #[arg(long)]
    pub v_max: Option<usize>,
    #[arg(long)]
    pub p_vote: Option<f64>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub fallback: Option<Fallback>,
    /// Seconds to simulate after the bootstrap day.
    #[arg(long)]
    pub duration: Option<u64>,
    #[arg(long)]
    pub cipher: Option<CipherSuite>,
    #[arg(long)]
    pub ledger_policy: Option<LedgerPolicy>,
    /// Skip upstream answer tracking; hit ratios are unaffected.
    #[arg(long)]
    pub no_track_answers: bool,
}

#[derive(Debug, Args)]
pub struct MixRoundArgs {
    #[arg(long, default_value_t = 20)]
    pub clients: usize,
    /// Votes per client.
    #[arg(long, default_value_t = 3)]
    pub votes: usize,
    #[arg(long, default_value_t = 10)]
    pub rounds: usize,
    #[arg(long, default_value_t = 10)]
    pub v_max: usize,
    #[arg(long, default_value = "x25519")]
    pub suite: CipherSuite,
    #[arg(long, default_value = "exclude-node")]
    pub policy: LedgerPolicy,
    /// NODE:ROUND:COUNT extra onions emitted by a node.
    #[arg(long, value_parser = parse_fault)]
    pub inject: Vec<(u32, usize, usize)>,
    /// NODE:ROUND:COUNT onions silently discarded by a node.
    #[arg(long, value_parser = parse_fault)]
    pub drop: Vec<(u32, usize, usize)>,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ExposureArgs {
    /// One scheme; all four when omitted.
    #[arg(long)]
    pub scheme: Option<Scheme>,
    /// One collusion rate; a grid from 0 to 1 when omitted.
    #[arg(long)]
    pub c: Option<f64>,
    #[arg(long, default_value_t = 0.05)]
    pub step: f64,
    #[arg(long, default_value_t = 10_000)]
    pub users: u64,
    /// Defaults to the user count.
    #[arg(long)]
    pub voters: Option<u64>,
    #[arg(long, default_value_t = 0.944)]
    pub h: f64,
    #[arg(long, default_value_t = 10)]
    pub rounds: u32,
    #[arg(long, default_value_t = 0.3)]
    pub q_v: f64,
    /// Monte Carlo trials per point; closed form when omitted.
    #[arg(long)]
    pub trials: Option<u64>,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Directory for exposure.csv; stdout only when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BandwidthArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub n_popular: Option<usize>,
    #[arg(long, value_delimiter = ',', default_value = "30,60,120,300")]
    pub ttl_min: Vec<u32>,
    #[arg(long, default_value_t = 24)]
    pub hours: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum SnapshotCommand {
    /// Build a list from a trace's query counts and write its snapshot.
    Encode {
        #[arg(long)]
        trace: PathBuf,
        #[arg(long, default_value_t = 25_000)]
        n_popular: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print a snapshot as one record per line.
    Decode {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn parse_fault(s: &str) -> Result<(u32, usize, usize), String> {
    let parts: Vec<&str> = s.split(':').collect();
    let bad = || format!("expected NODE:ROUND:COUNT, got {s:?}");
    let [node, round, count] = parts.as_slice() else { return Err(bad()) };
    Ok((node.parse().map_err(|_| bad())?, round.parse().map_err(|_| bad())?, count.parse().map_err(|_| bad())?))
}

#[derive(Debug)]
pub enum CliError {
    Input(String),
    Invariant(String),
}

impl CliError {
    pub fn code(&self) -> i32 {
        match self {
            CliError::Input(_) => EXIT_INPUT,
            CliError::Invariant(_) => EXIT_INVARIANT,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Input(m) => write!(f, "error: {m}"),
            CliError::Invariant(m) => write!(f, "internal invariant violated: {m}"),
        }
    }
}

fn input<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Input(e.to_string())
}

impl From<SimError> for CliError {
    fn from(e: SimError) -> Self {
        match e {
            SimError::Invariant(_) => CliError::Invariant(e.to_string()),
            other => CliError::Input(other.to_string()),
        }
    }
}

fn write_file(path: &Path, body: &str) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| input(format!("cannot create {}: {e}", dir.display())))?;
    }
    fs::write(path, body).map_err(|e| input(format!("cannot write {}: {e}", path.display())))
}

/// Parses `args` (program name first) and runs the command. Returns the
/// process exit code.
pub fn run<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = write!(stderr, "{e}");
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => {
                    let _ = write!(stdout, "{e}");
                    EXIT_OK
                }
                _ => EXIT_USAGE,
            };
        }
    };
    match dispatch(cli.command, stdout) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(stderr, "{e}");
            e.code()
        }
    }
}

fn dispatch(command: Command, stdout: &mut dyn Write) -> Result<(), CliError> {
    match command {
        Command::GenTrace(a) => gen_trace_cmd(a, stdout),
        Command::RunSim(a) => run_sim_cmd(a, stdout),
        Command::MixRound(a) => mix_round_cmd(a, stdout),
        Command::Exposure(a) => exposure_cmd(a, stdout),
        Command::Bandwidth(a) => bandwidth_cmd(a, stdout),
        Command::Snapshot(c) => snapshot_cmd(c, stdout),
    }
}

fn gen_trace_cmd(a: GenTraceArgs, stdout: &mut dyn Write) -> Result<(), CliError> {
    if a.clients == 0 || a.hours == 0 || a.domains == 0 || !(a.rate > 0.0) || !(a.zipf > 0.0) {
        return Err(input("clients, hours, rate, zipf and domains must be positive"));
    }
    let params = GenParams {
        clients: a.clients,
        duration_s: a.hours * 3600,
        rate: a.rate,
        zipf_s: a.zipf,
        universe: Universe { size: a.domains, ..Universe::default() },
        seed: a.seed,
    };
    let trace = gen_trace(&params);
    write_trace(&trace, &a.out).map_err(|e| input(format!("cannot write {}: {e}", a.out.display())))?;
    let _ = writeln!(stdout, "wrote {} events for {} clients to {}", trace.len(), a.clients, a.out.display());
    Ok(())
}

fn sim_config(file: Option<&Path>) -> Result<SimConfig, CliError> {
    let mut cfg = SimConfig::default();
    if let Some(path) = file {
        FileConfig::load(path).map_err(input)?.apply(&mut cfg);
    }
    Ok(cfg)
}

fn run_sim_cmd(a: RunSimArgs, stdout: &mut dyn Write) -> Result<(), CliError> {
    let file = match &a.config {
        Some(p) => FileConfig::load(p).map_err(input)?,
        None => FileConfig::default(),
    };
    let mut cfg = SimConfig::default();
    file.apply(&mut cfg);
    let mut sizes = file.sizes.clone();
    macro_rules! flag {
        ($($f:ident),*) => { $( if let Some(v) = a.$f { cfg.$f = v; } )* };
    }
    flag!(n_popular, t_refresh, ttl_min, rounds, v_max, p_vote, alpha, seed, fallback, cipher, ledger_policy);
    if a.duration.is_some() {
        cfg.duration = a.duration;
    }
    if a.no_track_answers {
        cfg.track_answers = false;
    }
    if a.n_popular.is_some() {
        sizes = None;
    }
    if a.sizes.is_some() {
        sizes = a.sizes.clone();
    }
    let trace = load_trace(&a.trace).map_err(input)?;
    let sizes = sizes.unwrap_or_else(|| vec![cfg.n_popular]);
    let reports = run_sweep(&cfg, &sizes, &trace)?;
    if let [report] = reports.as_slice() {
        report.write_dir(&a.out).map_err(input)?;
    } else {
        for r in &reports {
            r.write_dir(&a.out.join(format!("n_{}", r.n_popular))).map_err(input)?;
        }
    }
    let mut sweep = String::from("n_popular,mean_hit_ratio,bytes_per_hour,fallback_queries\n");
    for r in &reports {
        let _ = writeln!(sweep, "{},{:.6},{:.6},{}", r.n_popular, r.mean_hit_ratio, r.bandwidth_bytes_per_hour, r.fallback_queries);
    }
    write_file(&a.out.join("sweep.csv"), &sweep)?;
    let _ = stdout.write_all(sweep.as_bytes());
    Ok(())
}

fn mix_round_cmd(a: MixRoundArgs, stdout: &mut dyn Write) -> Result<(), CliError> {
    if a.clients == 0 || a.rounds == 0 {
        return Err(input("clients and rounds must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let net = MixNetwork::with_clients(a.clients, a.suite, &mut rng);
    let universe = Universe::default();
    let ballots: Vec<(ClientId, Ballot)> = net
        .ids()
        .iter()
        .map(|&id| {
            let mut picked = HashSet::new();
            while picked.len() < a.votes {
                picked.insert(rng.gen_range(0..1000u64));
            }
            let mut picked: Vec<u64> = picked.into_iter().collect();
            picked.sort_unstable();
            (id, Ballot { votes: picked.into_iter().map(|i| Vote { key: universe.key(i) }).collect() })
        })
        .collect();
    let mut config = MixConfig::new(a.rounds, a.v_max);
    config.policy = a.policy;
    for (node, round, n) in &a.inject {
        config.misbehavior.insert((ClientId(*node), *round), Misbehavior::Inject(*n));
    }
    for (node, round, n) in &a.drop {
        config.misbehavior.insert((ClientId(*node), *round), Misbehavior::Drop(*n));
    }
    let outcome = match run_voting_round(&net, &ballots, &config, &mut rng) {
        Ok(o) => o,
        Err(e @ RoundError::Wrap(_)) => return Err(CliError::Invariant(e.to_string())),
        Err(e) => return Err(input(e)),
    };
    let mut votes = String::from("qname,qtype\n");
    for v in &outcome.votes {
        let _ = writeln!(votes, "{},{}", v.key.name, v.key.qtype);
    }
    let mut ledger = String::from("round,node,in_count,out_count,flagged,balanced\n");
    for (&(round, node), c) in &outcome.ledger.nodes {
        let _ = writeln!(ledger, "{round},{},{},{},{},{}", node.0, c.in_count, c.out_count, c.flagged, c.balanced());
    }
    write_file(&a.out.join("votes.csv"), &votes)?;
    write_file(&a.out.join("ledger.csv"), &ledger)?;
    let _ = writeln!(
        stdout,
        "submitted {} votes, {} terminal, {} excluded node rounds",
        outcome.ledger.submitted(),
        outcome.votes.len(),
        outcome.excluded.len()
    );
    for m in &outcome.excluded {
        let _ = writeln!(stdout, "excluded node {} in round {}", m.node.0, m.round);
    }
    Ok(())
}

fn exposure_cmd(a: ExposureArgs, stdout: &mut dyn Write) -> Result<(), CliError> {
    let base = ExposureParams {
        c: 0.0,
        users: a.users,
        voters: a.voters.unwrap_or(a.users),
        h: a.h,
        rounds: a.rounds,
        q_v: a.q_v,
        scheme: Scheme::Popdns,
    };
    base.validate().map_err(input)?;
    let cs: Vec<f64> = match a.c {
        Some(c) => vec![c],
        None => {
            if !(a.step > 0.0 && a.step <= 1.0) {
                return Err(input("step must lie in (0, 1]"));
            }
            let n = (1.0 / a.step).round() as u32;
            (0..=n).map(|i| (f64::from(i) * a.step).min(1.0)).collect()
        }
    };
    let schemes: Vec<Scheme> = a.scheme.map_or_else(|| Scheme::ALL.to_vec(), |s| vec![s]);
    let mut rows = Vec::new();
    for scheme in schemes {
        for &c in &cs {
            let p = base.with_scheme(scheme).with_c(c);
            p.validate().map_err(input)?;
            let row = match a.trials {
                Some(trials) => {
                    let est = exposure_monte_carlo(&p, trials, a.seed).map_err(input)?;
                    ExposureRow { scheme, c, exposure: est.mean, stderr: Some(est.stderr) }
                }
                None => ExposureRow { scheme, c, exposure: exposure_closed_form(&p), stderr: None },
            };
            rows.push(row);
        }
    }
    let csv = exposure_csv(&rows);
    if let Some(dir) = &a.out {
        write_file(&dir.join("exposure.csv"), &csv)?;
    }
    let _ = stdout.write_all(csv.as_bytes());
    Ok(())
}

fn bandwidth_cmd(a: BandwidthArgs, stdout: &mut dyn Write) -> Result<(), CliError> {
    let mut cfg = sim_config(a.config.as_deref())?;
    if let Some(n) = a.n_popular {
        cfg.n_popular = n;
    }
    if a.hours == 0 {
        return Err(input("hours must be positive"));
    }
    let mut csv = String::from("ttl_min,n_popular,bytes_per_hour\n");
    for ttl_min in &a.ttl_min {
        let cfg = SimConfig { ttl_min: *ttl_min, ..cfg.clone() };
        let batches = churn_batches(&cfg, a.hours * 3600)?;
        let rate = measure_bandwidth(&batches, std::time::Duration::from_secs(a.hours * 3600));
        let _ = writeln!(csv, "{},{},{:.6}", ttl_min, cfg.n_popular, rate);
    }
    write_file(&a.out.join("bandwidth.csv"), &csv)?;
    let _ = stdout.write_all(csv.as_bytes());
    Ok(())
}

/// List built from a trace's raw query counts, with answers from the
/// synthetic upstream at the trace start, numbered for publication.
pub fn list_from_trace(trace: &Trace, n_popular: usize, universe: Universe) -> PopularityList {
    let cfg = SimConfig::default();
    let start = trace.start_ms().unwrap_or(0);
    let up = Upstream::new(universe, cfg.churn.clone(), start);
    let table = bootstrap_weights(trace.events().iter().map(|e| trace.key(e.key)), &cfg.round_config());
    let ranked = table.top(n_popular).into_iter().map(|(k, _)| {
        let (a, t) = up.resolve(k, start);
        (k.clone(), a, t)
    });
    let mut resolver = |k: &crate::model::RecordKey| Some(up.resolve(k, start));
    build_list(ranked, &mut resolver, n_popular).list.compacted()
}

fn snapshot_cmd(c: SnapshotCommand, stdout: &mut dyn Write) -> Result<(), CliError> {
    match c {
        SnapshotCommand::Encode { trace, n_popular, out } => {
            if n_popular == 0 {
                return Err(input("n_popular must be positive"));
            }
            let trace = load_trace(&trace).map_err(input)?;
            let list = list_from_trace(&trace, n_popular, Universe::default());
            let bytes = list.serialize_snapshot();
            if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir).map_err(input)?;
            }
            fs::write(&out, &bytes).map_err(|e| input(format!("cannot write {}: {e}", out.display())))?;
            let _ = writeln!(
                stdout,
                "{} entries, {} pooled answers, {} bytes ({} uncompressed)",
                list.len(),
                list.pool().len(),
                bytes.len(),
                list.uncompressed_snapshot_len()
            );
            Ok(())
        }
        SnapshotCommand::Decode { input: path, out } => {
            let bytes = fs::read(&path).map_err(|e| input(format!("cannot read {}: {e}", path.display())))?;
            let list = PopularityList::parse_snapshot(&bytes).map_err(input)?;
            let mut text = format!("# version {} entries {} pool {}\n", list.version(), list.len(), list.pool().len());
            text.push_str(&list.to_flat_text());
            match out {
                Some(p) => write_file(&p, &text)?,
                None => {
                    let _ = stdout.write_all(text.as_bytes());
                }
            }
            Ok(())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run_args(args: &[&str]) -> (i32, String, String) {
        let mut out = Vec::new();
        let mut err = Vec::new();
        let code = run(std::iter::once("popdns").chain(args.iter().copied()), &mut out, &mut err);
        (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
    }

    #[test]
    fn exposure_row_matches_closed_form() {
        let (code, out, _) = run_args(&["exposure", "--scheme", "tor3", "--c", "0.5", "--users", "10000"]);
        assert_eq!(code, EXIT_OK);
        let p = ExposureParams { c: 0.5, scheme: Scheme::Tor3, ..ExposureParams::default() };
        assert_eq!(out, format!("scheme,c,exposure,stderr\ntor3,0.5000,{:.9},\n", exposure_closed_form(&p)));
    }

    #[test]
    fn exit_codes() {
        assert_eq!(run_args(&["frobnicate"]).0, EXIT_USAGE);
        assert_eq!(run_args(&["exposure", "--c"]).0, EXIT_USAGE);
        assert_eq!(run_args(&["--help"]).0, EXIT_OK);
        let dir = tempfile::tempdir().unwrap();
        let missing = dir.path().join("missing.toml");
        let (code, _, err) = run_args(&[
            "run-sim",
            "--config",
            missing.to_str().unwrap(),
            "--trace",
            "t.csv",
            "--out",
            dir.path().to_str().unwrap(),
        ]);
        assert_eq!(code, EXIT_INPUT, "{err}");
        assert_eq!(run_args(&["exposure", "--c", "1.5"]).0, EXIT_INPUT);
    }

    #[test]
    fn fault_spec_parsing() {
        assert_eq!(parse_fault("3:1:2"), Ok((3, 1, 2)));
        assert!(parse_fault("3:1").is_err());
    }
}
