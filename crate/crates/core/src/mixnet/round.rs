//! One voting round through the mix network, with the server's ledger.

use std::collections::BTreeMap;

use rand::{CryptoRng, Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::onion::{choose_path, peel, shuffle_peeled, wrap_vote, Hop, Onion, Peeled, WrapError};
use super::registry::{CertificateAuthority, Registry, RegistryError};
use super::seal::{CipherSuite, MixKeyPair};
use crate::model::ClientId;
use crate::voting::{Ballot, Vote};

/// What the server does when a node's counts do not balance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LedgerPolicy {
    /// Fail the whole round.
    Abort,
    /// Discard the offending node's output for that shuffle round and go on.
    #[default]
    ExcludeNode,
}

impl std::str::FromStr for LedgerPolicy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "abort" => Ok(LedgerPolicy::Abort),
            "exclude-node" => Ok(LedgerPolicy::ExcludeNode),
            other => Err(format!("unknown ledger policy {other:?} (expected abort or exclude-node)")),
        }
    }
}

/// Simulated deviation of one node in one shuffle round.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Misbehavior {
    /// Emit this many extra onions.
    Inject(usize),
    /// Silently discard this many peeled onions.
    Drop(usize),
}

#[derive(Debug, Clone, Default)]
pub struct MixConfig {
    pub rounds: usize,
    pub v_max: usize,
    pub policy: LedgerPolicy,
    pub capture_transcript: bool,
    /// Keyed by (node, shuffle round).
    pub misbehavior: BTreeMap<(ClientId, usize), Misbehavior>,
}

impl MixConfig {
    pub fn new(rounds: usize, v_max: usize) -> Self {
        Self { rounds, v_max, ..Self::default() }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct NodeCounts {
    pub in_count: usize,
    pub out_count: usize,
    /// Inputs that failed to peel.
    pub flagged: usize,
}

impl NodeCounts {
    pub fn balanced(&self) -> bool {
        self.in_count == self.out_count + self.flagged
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LedgerMismatch {
    pub node: ClientId,
    pub round: usize,
    pub counts: NodeCounts,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RoundLedger {
    /// Initial onions per submitting client.
    pub submissions: BTreeMap<ClientId, usize>,
    /// Keyed by (shuffle round, node).
    pub nodes: BTreeMap<(usize, ClientId), NodeCounts>,
    /// Onions the server could not route, per shuffle round.
    pub unroutable: BTreeMap<usize, usize>,
    /// Onions still layered after the last shuffle round.
    pub unterminated: usize,
    pub terminal: usize,
}

impl RoundLedger {
    pub fn mismatches(&self) -> Vec<LedgerMismatch> {
        self.nodes
            .iter()
            .filter(|(_, c)| !c.balanced())
            .map(|(&(round, node), &counts)| LedgerMismatch { node, round, counts })
            .collect()
    }

    pub fn submitted(&self) -> usize {
        self.submissions.values().sum()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RoundError {
    #[error("{client} submitted {submitted} votes, quota is {v_max}")]
    QuotaViolation { client: ClientId, submitted: usize, v_max: usize },
    #[error("ledger mismatch at {} in shuffle round {}", .0.node, .0.round)]
    LedgerMismatch(LedgerMismatch),
    #[error("{0} is not registered")]
    UnknownClient(ClientId),
    #[error(transparent)]
    Wrap(#[from] WrapError),
}

/// One node's processing step as seen by the server, plus the true
/// input-to-output mapping that only the node knows.
#[derive(Debug, Clone)]
pub struct NodeStep {
    pub round: usize,
    pub node: ClientId,
    /// Onion ids in the order the server delivered them.
    pub inputs: Vec<u64>,
    /// Ids of the node's outputs in emission order.
    pub outputs: Vec<u64>,
    /// Input position behind each output; `None` for injected onions.
    pub sources: Vec<Option<usize>>,
}

/// Everything the server observes during a round, for linkage analysis.
#[derive(Debug, Clone, Default)]
pub struct Transcript {
    /// Sender of each initial onion; initial onions have ids `0..senders.len()`.
    pub senders: Vec<ClientId>,
    pub steps: Vec<NodeStep>,
    /// Id of each terminal output with its vote.
    pub terminal: Vec<(u64, Vote)>,
}

#[derive(Debug, Clone)]
pub struct RoundOutcome {
    /// Terminal votes in canonical order.
    pub votes: Vec<Vote>,
    pub ledger: RoundLedger,
    /// Nodes whose output was discarded under [`LedgerPolicy::ExcludeNode`].
    pub excluded: Vec<LedgerMismatch>,
    pub transcript: Option<Transcript>,
}

/// Registered clients together with the key pairs they use as mix nodes.
pub struct MixNetwork {
    ca: CertificateAuthority,
    registry: Registry,
    keys: BTreeMap<ClientId, MixKeyPair>,
    ids: Vec<ClientId>,
}

impl MixNetwork {
    pub fn new<G: RngCore + CryptoRng>(suite: CipherSuite, rng: &mut G) -> Self {
        let ca = CertificateAuthority::generate(rng);
        let registry = Registry::new(ca.verifying_key(), suite);
        Self { ca, registry, keys: BTreeMap::new(), ids: Vec::new() }
    }

    /// A network of `n` clients registered with credentials `client-0`, `client-1`, ...
    pub fn with_clients<G: RngCore + CryptoRng>(n: usize, suite: CipherSuite, rng: &mut G) -> Self {
        let mut net = Self::new(suite, rng);
        for i in 0..n {
            net.enroll(format!("client-{i}").as_bytes(), rng).expect("distinct credentials");
        }
        net
    }

    /// Generates a key pair, has the CA certify it and registers the client.
    pub fn enroll<G: RngCore + CryptoRng>(&mut self, credential: &[u8], rng: &mut G) -> Result<ClientId, RegistryError> {
        let keys = MixKeyPair::generate(self.registry.suite(), rng);
        let cert = self.ca.issue(credential, keys.public());
        let id = self.registry.register_client(credential, &cert)?;
        self.keys.insert(id, keys);
        self.ids.push(id);
        Ok(id)
    }

    pub fn registry(&self) -> &Registry {
        &self.registry
    }

    pub fn ids(&self) -> &[ClientId] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Onions grouped by destination, each batch sorted by block bytes.
#[derive(Debug, Clone, Default)]
pub struct Routed<T> {
    pub batches: BTreeMap<ClientId, Vec<(T, Onion)>>,
    pub unroutable: Vec<(T, Onion)>,
}

fn route_tagged<T>(onions: Vec<(T, Onion)>, registry: &Registry) -> Routed<T> {
    let mut routed = Routed { batches: BTreeMap::new(), unroutable: Vec::new() };
    for (tag, onion) in onions {
        match onion.next_hop {
            Hop::Node(id) if registry.contains(id) => routed.batches.entry(id).or_default().push((tag, onion)),
            _ => routed.unroutable.push((tag, onion)),
        }
    }
    for batch in routed.batches.values_mut() {
        batch.sort_by(|a, b| a.1.block[..].cmp(&b.1.block[..]));
    }
    routed
}

/// Partitions onions by next hop. Onions for unregistered ids are returned
/// separately.
pub fn server_route(onions: Vec<Onion>, registry: &Registry) -> (BTreeMap<ClientId, Vec<Onion>>, Vec<Onion>) {
    let routed = route_tagged(onions.into_iter().map(|o| ((), o)).collect(), registry);
    let batches = routed
        .batches
        .into_iter()
        .map(|(id, batch)| (id, batch.into_iter().map(|(_, o)| o).collect()))
        .collect();
    (batches, routed.unroutable.into_iter().map(|(_, o)| o).collect())
}

/// Runs one voting round: every client wraps its ballot, then `rounds`
/// relay/peel/shuffle iterations move the onions until all are terminal.
pub fn run_voting_round<G: Rng + CryptoRng>(
    net: &MixNetwork,
    ballots: &[(ClientId, Ballot)],
    config: &MixConfig,
    rng: &mut G,
) -> Result<RoundOutcome, RoundError> {
    let mut ledger = RoundLedger::default();
    for (client, ballot) in ballots {
        if !net.registry.contains(*client) {
            return Err(RoundError::UnknownClient(*client));
        }
        *ledger.submissions.entry(*client).or_insert(0) += ballot.len();
    }
    if let Some((&client, &submitted)) = ledger.submissions.iter().find(|(_, &n)| n > config.v_max) {
        return Err(RoundError::QuotaViolation { client, submitted, v_max: config.v_max });
    }

    let mut transcript = config.capture_transcript.then(Transcript::default);
    let mut jobs = Vec::with_capacity(ledger.submitted());
    for (client, ballot) in ballots {
        for vote in &ballot.votes {
            let path = choose_path(*client, &net.ids, config.rounds, rng)?;
            jobs.push((vote, path, rng.next_u64()));
            if let Some(t) = transcript.as_mut() {
                t.senders.push(*client);
            }
        }
    }
    let wrapped: Result<Vec<Onion>, WrapError> = jobs
        .par_iter()
        .map(|(vote, path, seed)| {
            wrap_vote(vote, path, |id| net.registry.key(id), &mut ChaCha8Rng::seed_from_u64(*seed))
        })
        .collect();
    let mut held: Vec<(u64, Onion)> = wrapped?.into_iter().enumerate().map(|(i, o)| (i as u64, o)).collect();
    let mut next_id = held.len() as u64;

    let mut terminal: Vec<(u64, Vote)> = Vec::with_capacity(held.len());
    let mut excluded = Vec::new();
    for round in 0..config.rounds {
        let routed = route_tagged(std::mem::take(&mut held), &net.registry);
        if !routed.unroutable.is_empty() {
            ledger.unroutable.insert(round, routed.unroutable.len());
        }
        let peeled: Vec<_> = routed
            .batches
            .into_par_iter()
            .map(|(node, batch)| {
                let (ids, onions): (Vec<u64>, Vec<Onion>) = batch.into_iter().unzip();
                let keys = net.keys.get(&node).expect("registered nodes hold keys");
                let peeled: Vec<_> = onions.iter().map(|o| peel(o, keys)).collect();
                (node, ids, onions.len(), peeled)
            })
            .collect();
        for (node, ids, in_count, peeled) in peeled {
            let shuffled = shuffle_peeled(peeled, rng);
            let mut items = shuffled.items;
            let mut sources: Vec<Option<usize>> = shuffled.sources.into_iter().map(Some).collect();
            match config.misbehavior.get(&(node, round)) {
                Some(Misbehavior::Inject(n)) => {
                    for _ in 0..*n {
                        let target = net.ids[rng.gen_range(0..net.ids.len())];
                        items.push(Peeled::Onion(Onion::garbage(Hop::Node(target), rng)));
                        sources.push(None);
                    }
                }
                Some(Misbehavior::Drop(n)) => {
                    let keep = items.len().saturating_sub(*n);
                    items.truncate(keep);
                    sources.truncate(keep);
                }
                None => {}
            }
            let counts = NodeCounts { in_count, out_count: items.len(), flagged: shuffled.dropped.len() };
            ledger.nodes.insert((round, node), counts);
            if !counts.balanced() {
                let mismatch = LedgerMismatch { node, round, counts };
                match config.policy {
                    LedgerPolicy::Abort => return Err(RoundError::LedgerMismatch(mismatch)),
                    LedgerPolicy::ExcludeNode => {
                        excluded.push(mismatch);
                        continue;
                    }
                }
            }
            let mut out_ids = Vec::with_capacity(items.len());
            for item in items {
                let id = next_id;
                next_id += 1;
                out_ids.push(id);
                match item {
                    Peeled::Onion(onion) => held.push((id, onion)),
                    Peeled::Terminal(vote) => terminal.push((id, vote)),
                }
            }
            if let Some(t) = transcript.as_mut() {
                t.steps.push(NodeStep { round, node, inputs: ids, outputs: out_ids, sources });
            }
        }
    }
    ledger.unterminated = held.len();
    ledger.terminal = terminal.len();

    let mut votes: Vec<Vote> = terminal.iter().map(|(_, v)| v.clone()).collect();
    votes.sort_unstable();
    if let Some(t) = transcript.as_mut() {
        t.terminal = terminal;
    }
    Ok(RoundOutcome { votes, ledger, excluded, transcript })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{parse_domain, QType, RecordKey};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn vote(name: &str) -> Vote {
        Vote { key: RecordKey::new(parse_domain(name).unwrap(), QType::A) }
    }

    fn ballots(n: u32, per: usize) -> Vec<(ClientId, Ballot)> {
        (0..n)
            .map(|c| {
                let votes = (0..per).map(|i| vote(&format!("v{i}.c{c}.example"))).collect();
                (ClientId(c), Ballot { votes })
            })
            .collect()
    }

    fn sorted_inputs(b: &[(ClientId, Ballot)]) -> Vec<Vote> {
        let mut all: Vec<Vote> = b.iter().flat_map(|(_, b)| b.votes.clone()).collect();
        all.sort_unstable();
        all
    }

    #[test]
    fn three_clients_two_rounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let net = MixNetwork::with_clients(3, CipherSuite::X25519, &mut rng);
        let b = ballots(3, 2);
        let out = run_voting_round(&net, &b, &MixConfig::new(2, 10), &mut rng).unwrap();
        assert_eq!(out.votes, sorted_inputs(&b));
        assert!(out.ledger.mismatches().is_empty());
        assert_eq!(out.ledger.terminal, 6);
        assert_eq!(out.ledger.unterminated, 0);
    }

    #[test]
    fn quota_checked_before_round() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let net = MixNetwork::with_clients(3, CipherSuite::Symmetric, &mut rng);
        let b = ballots(3, 11);
        let err = run_voting_round(&net, &b, &MixConfig::new(2, 10), &mut rng).unwrap_err();
        assert_eq!(err, RoundError::QuotaViolation { client: ClientId(0), submitted: 11, v_max: 10 });
    }

    #[test]
    fn injection_detected_at_node_and_round() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let net = MixNetwork::with_clients(6, CipherSuite::Symmetric, &mut rng);
        let b = ballots(6, 3);
        // Find a node that actually handles onions in round 1.
        let probe = MixConfig { capture_transcript: true, ..MixConfig::new(3, 10) };
        let t = run_voting_round(&net, &b, &probe, &mut ChaCha8Rng::seed_from_u64(9)).unwrap().transcript.unwrap();
        let busy = t.steps.iter().find(|s| s.round == 1).unwrap().node;

        let mut config = MixConfig::new(3, 10);
        config.misbehavior.insert((busy, 1), Misbehavior::Inject(1));
        config.policy = LedgerPolicy::Abort;
        let err = run_voting_round(&net, &b, &config, &mut ChaCha8Rng::seed_from_u64(9)).unwrap_err();
        match err {
            RoundError::LedgerMismatch(m) => assert_eq!((m.node, m.round), (busy, 1)),
            other => panic!("unexpected {other:?}"),
        }

        config.policy = LedgerPolicy::ExcludeNode;
        config.misbehavior.insert((busy, 1), Misbehavior::Drop(1));
        let out = run_voting_round(&net, &b, &config, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(out.excluded.len(), 1);
        assert_eq!((out.excluded[0].node, out.excluded[0].round), (busy, 1));
        assert!(out.votes.len() < 18);
    }

    #[test]
    fn route_partitions_and_drops_unknown() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let net = MixNetwork::with_clients(3, CipherSuite::Symmetric, &mut rng);
        let mut onions: Vec<Onion> = (0..6).map(|i| Onion::garbage(Hop::Node(ClientId(i % 3)), &mut rng)).collect();
        onions.push(Onion::garbage(Hop::Node(ClientId(77)), &mut rng));
        let (batches, dropped) = server_route(onions, net.registry());
        assert_eq!(batches.len(), 3);
        assert!(batches.values().all(|b| b.len() == 2 && b[0].block[..] <= b[1].block[..]));
        assert_eq!(dropped.len(), 1);
    }
}
