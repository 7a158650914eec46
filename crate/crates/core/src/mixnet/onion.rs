//! Fixed-size layered onions.
//!
//! A block is a little-endian u16 length, the sealed layer, then zero
//! padding up to [`PAD_SIZE`]. Each layer opens to a next-hop id followed by
//! either the next sealed layer or, when the next hop is the server, the
//! 256-byte vote block.

use rand::seq::SliceRandom;
use rand::{CryptoRng, Rng, RngCore};
use thiserror::Error;

use super::seal::{seal, CipherSuite, MixKeyPair, PublicKey};
use crate::model::{ClientId, RecordKey};
use crate::voting::Vote;
use crate::wire::{self, Reader};

pub const PAD_SIZE: usize = 1024;
pub const VOTE_BLOCK: usize = 256;
pub const SERVER_ID: u32 = u32::MAX;

/// Longest path whose onion still fits in a block with either suite.
pub const MAX_HOPS: usize = (PAD_SIZE - 2 - VOTE_BLOCK) / (4 + CipherSuite::X25519.overhead());

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Hop {
    Node(ClientId),
    Server,
}

impl Hop {
    pub fn to_u32(self) -> u32 {
        match self {
            Hop::Node(id) => id.0,
            Hop::Server => SERVER_ID,
        }
    }

    pub fn from_u32(raw: u32) -> Self {
        if raw == SERVER_ID {
            Hop::Server
        } else {
            Hop::Node(ClientId(raw))
        }
    }
}

#[derive(Clone, PartialEq, Eq)]
pub struct Onion {
    pub next_hop: Hop,
    pub block: Box<[u8; PAD_SIZE]>,
}

impl std::fmt::Debug for Onion {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let len = u16::from_le_bytes([self.block[0], self.block[1]]);
        f.debug_struct("Onion").field("next_hop", &self.next_hop).field("sealed_len", &len).finish()
    }
}

impl Onion {
    fn from_sealed(next_hop: Hop, sealed: &[u8]) -> Self {
        assert!(sealed.len() + 2 <= PAD_SIZE, "sealed layer exceeds block");
        let mut block = Box::new([0u8; PAD_SIZE]);
        block[..2].copy_from_slice(&(sealed.len() as u16).to_le_bytes());
        block[2..2 + sealed.len()].copy_from_slice(sealed);
        Self { next_hop, block }
    }

    fn sealed(&self) -> Option<&[u8]> {
        let len = u16::from_le_bytes([self.block[0], self.block[1]]) as usize;
        self.block.get(2..2 + len)
    }

    /// Transport layout: next hop as u32 LE, then the block.
    pub fn to_wire(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(4 + PAD_SIZE);
        out.extend_from_slice(&self.next_hop.to_u32().to_le_bytes());
        out.extend_from_slice(&self.block[..]);
        out
    }

    pub fn from_wire(data: &[u8]) -> Option<Self> {
        if data.len() != 4 + PAD_SIZE {
            return None;
        }
        let next_hop = Hop::from_u32(u32::from_le_bytes(data[..4].try_into().ok()?));
        let block: Box<[u8; PAD_SIZE]> = Box::new(data[4..].try_into().ok()?);
        Some(Self { next_hop, block })
    }

    /// A well-sized block of random bytes, indistinguishable by length from
    /// a real onion. Used to model injection by a misbehaving node.
    pub fn garbage<G: RngCore>(next_hop: Hop, rng: &mut G) -> Self {
        let mut block = Box::new([0u8; PAD_SIZE]);
        rng.fill_bytes(&mut block[..]);
        block[..2].copy_from_slice(&300u16.to_le_bytes());
        Self { next_hop, block }
    }
}

pub fn encode_vote(vote: &Vote) -> [u8; VOTE_BLOCK] {
    let mut body = Vec::with_capacity(VOTE_BLOCK);
    body.push(vote.key.qtype.code());
    wire::put_name(&mut body, &vote.key.name);
    let mut out = [0u8; VOTE_BLOCK];
    out[..body.len()].copy_from_slice(&body);
    out
}

pub fn decode_vote(block: &[u8]) -> Result<Vote, PeelError> {
    if block.len() != VOTE_BLOCK {
        return Err(PeelError::BadVote);
    }
    let mut r = Reader::new(block);
    let qtype = r.qtype().map_err(|_| PeelError::BadVote)?;
    let name = r.name().map_err(|_| PeelError::BadVote)?;
    if r.bytes(r.remaining()).map_err(|_| PeelError::BadVote)?.iter().any(|&b| b != 0) {
        return Err(PeelError::BadVote);
    }
    Ok(Vote { key: RecordKey::new(name, qtype) })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MixPath {
    hops: Vec<ClientId>,
}

impl MixPath {
    pub fn new(hops: Vec<ClientId>) -> Result<Self, WrapError> {
        if hops.is_empty() {
            return Err(WrapError::PathTooShort);
        }
        if hops.len() > MAX_HOPS {
            return Err(WrapError::PathTooLong(hops.len()));
        }
        Ok(Self { hops })
    }

    pub fn hops(&self) -> &[ClientId] {
        &self.hops
    }

    pub fn len(&self) -> usize {
        self.hops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hops.is_empty()
    }
}

/// Draws `rounds` hops for `sender` from `nodes`.
///
/// With at least `rounds` other nodes the hops are distinct and exclude the
/// sender. Smaller networks reuse nodes across shuffled passes, never placing
/// the same node twice in a row when there is a choice.
pub fn choose_path<G: Rng + ?Sized>(sender: ClientId, nodes: &[ClientId], rounds: usize, rng: &mut G) -> Result<MixPath, WrapError> {
    if nodes.len() > rounds {
        let hops = rand::seq::index::sample(rng, nodes.len(), rounds + 1)
            .into_iter()
            .map(|i| nodes[i])
            .filter(|&n| n != sender)
            .take(rounds)
            .collect();
        return MixPath::new(hops);
    }
    let others: Vec<ClientId> = nodes.iter().copied().filter(|&n| n != sender).collect();
    let pool = if others.is_empty() { vec![sender] } else { others };
    if pool.len() >= rounds {
        let hops = rand::seq::index::sample(rng, pool.len(), rounds).into_iter().map(|i| pool[i]).collect();
        return MixPath::new(hops);
    }
    let mut hops: Vec<ClientId> = Vec::with_capacity(rounds);
    while hops.len() < rounds {
        let mut pass = pool.clone();
        pass.shuffle(rng);
        if pass.len() > 1 && hops.last() == pass.first() {
            pass.swap(0, 1);
        }
        hops.extend(pass.into_iter().take(rounds - hops.len()));
    }
    MixPath::new(hops)
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum WrapError {
    #[error("mix path is empty")]
    PathTooShort,
    #[error("mix path of {0} hops exceeds the onion capacity")]
    PathTooLong(usize),
    #[error("no certified key for {0}")]
    UncertifiedKey(ClientId),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PeelError {
    #[error("layer failed to open")]
    OpenFailed,
    #[error("layer plaintext is malformed")]
    Malformed,
    #[error("terminal vote block is malformed")]
    BadVote,
}

/// Seals `vote` for `path`, innermost layer first. `key_of` supplies
/// certified keys.
pub fn wrap_vote<'k, F, G>(vote: &Vote, path: &MixPath, mut key_of: F, rng: &mut G) -> Result<Onion, WrapError>
where
    F: FnMut(ClientId) -> Option<&'k PublicKey>,
    G: RngCore + CryptoRng,
{
    let keys = path
        .hops
        .iter()
        .map(|&id| key_of(id).ok_or(WrapError::UncertifiedKey(id)))
        .collect::<Result<Vec<_>, _>>()?;
    let mut payload = encode_vote(vote).to_vec();
    for k in (0..path.len()).rev() {
        let next = path.hops.get(k + 1).map_or(Hop::Server, |&id| Hop::Node(id));
        let mut plain = Vec::with_capacity(4 + payload.len());
        plain.extend_from_slice(&next.to_u32().to_le_bytes());
        plain.extend_from_slice(&payload);
        payload = seal(keys[k], &plain, rng);
    }
    if payload.len() + 2 > PAD_SIZE {
        return Err(WrapError::PathTooLong(path.len()));
    }
    Ok(Onion::from_sealed(Hop::Node(path.hops[0]), &payload))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Peeled {
    Onion(Onion),
    Terminal(Vote),
}

/// Removes one layer.
pub fn peel(onion: &Onion, keys: &MixKeyPair) -> Result<Peeled, PeelError> {
    let sealed = onion.sealed().ok_or(PeelError::Malformed)?;
    let plain = keys.open(sealed).map_err(|_| PeelError::OpenFailed)?;
    if plain.len() < 4 {
        return Err(PeelError::Malformed);
    }
    let (head, payload) = plain.split_at(4);
    match Hop::from_u32(u32::from_le_bytes(head.try_into().expect("4 bytes"))) {
        Hop::Server => Ok(Peeled::Terminal(decode_vote(payload)?)),
        hop => {
            if payload.len() + 2 > PAD_SIZE {
                return Err(PeelError::Malformed);
            }
            Ok(Peeled::Onion(Onion::from_sealed(hop, payload)))
        }
    }
}

/// Output of one node's shuffle.
#[derive(Debug, Clone)]
pub struct ShuffleOutput {
    pub items: Vec<Peeled>,
    /// `sources[i]` is the input position that produced `items[i]`.
    pub sources: Vec<usize>,
    /// Input positions that failed to peel.
    pub dropped: Vec<usize>,
}

pub fn node_shuffle<G: Rng + ?Sized>(batch: &[Onion], keys: &MixKeyPair, rng: &mut G) -> ShuffleOutput {
    shuffle_peeled(batch.iter().map(|o| peel(o, keys)).collect(), rng)
}

/// Shuffle step of [`node_shuffle`] over already peeled inputs.
pub(crate) fn shuffle_peeled<G: Rng + ?Sized>(peeled: Vec<Result<Peeled, PeelError>>, rng: &mut G) -> ShuffleOutput {
    let mut pairs = Vec::with_capacity(peeled.len());
    let mut dropped = Vec::new();
    for (i, p) in peeled.into_iter().enumerate() {
        match p {
            Ok(p) => pairs.push((i, p)),
            Err(_) => dropped.push(i),
        }
    }
    pairs.shuffle(rng);
    let (sources, items) = pairs.into_iter().unzip();
    ShuffleOutput { items, sources, dropped }
}
