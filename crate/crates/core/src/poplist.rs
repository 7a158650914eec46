//! The Popularity List: popular records plus CNAME-support records, indexed by
//! a root-first label trie, with an append-only answer pool and a compressed
//! snapshot format.
//!
//! Every entry has an `order`: its stable slot number. Removed entries leave a
//! tombstoned slot so that order references in later update batches stay
//! valid. [`PopularityList::compacted`] renumbers slots in trie pre-order and
//! drops unreferenced pool answers; servers use it when reissuing a full
//! snapshot.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::model::{DomainName, QType, RecordAnswer, RecordKey, Ttl};
use crate::wire::{self, Reader, WireError};

/// Longest CNAME chain (in records) a lookup will follow.
pub const MAX_CHAIN: usize = 8;

pub const SNAPSHOT_MAGIC: &[u8; 4] = b"PLS1";

const FLAG_CNAME_SUPPORT: u8 = 0x01;

/// Position of an answer in the pool, in order of first appearance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct PoolIndex(pub u32);

impl PoolIndex {
    pub fn get(self) -> usize {
        self.0 as usize
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ListEntry {
    pub key: RecordKey,
    pub answer: PoolIndex,
    pub ttl: Ttl,
    pub order: u32,
    pub is_cname_support: bool,
}

#[derive(Debug, Clone, Default)]
pub struct AnswerPool {
    answers: Vec<RecordAnswer>,
    index: HashMap<RecordAnswer, PoolIndex>,
}

impl AnswerPool {
    pub fn len(&self) -> usize {
        self.answers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.answers.is_empty()
    }

    pub fn get(&self, idx: PoolIndex) -> Option<&RecordAnswer> {
        self.answers.get(idx.get())
    }

    pub fn find(&self, answer: &RecordAnswer) -> Option<PoolIndex> {
        self.index.get(answer).copied()
    }

    pub fn intern(&mut self, answer: &RecordAnswer) -> PoolIndex {
        if let Some(idx) = self.index.get(answer) {
            return *idx;
        }
        let idx = PoolIndex(u32::try_from(self.answers.len()).expect("pool exceeds u32"));
        self.answers.push(answer.clone());
        self.index.insert(answer.clone(), idx);
        idx
    }

    pub fn answers(&self) -> &[RecordAnswer] {
        &self.answers
    }
}

impl PartialEq for AnswerPool {
    fn eq(&self, other: &Self) -> bool {
        self.answers == other.answers
    }
}

impl Eq for AnswerPool {}

#[derive(Debug, Clone, Default)]
struct TrieNode {
    children: BTreeMap<Box<[u8]>, TrieNode>,
    /// (qtype, order), sorted by qtype.
    entries: Vec<(QType, u32)>,
}

impl TrieNode {
    fn is_empty(&self) -> bool {
        self.children.is_empty() && self.entries.is_empty()
    }

    fn find(&self, name: &DomainName) -> Option<&TrieNode> {
        let mut node = self;
        for label in name.labels() {
            node = node.children.get(label)?;
        }
        Some(node)
    }

    fn insert(&mut self, name: &DomainName, qtype: QType, order: u32) -> bool {
        let mut node = self;
        for label in name.labels() {
            node = node.children.entry(label.into()).or_default();
        }
        match node.entries.binary_search_by_key(&qtype, |(q, _)| *q) {
            Ok(_) => false,
            Err(pos) => {
                node.entries.insert(pos, (qtype, order));
                true
            }
        }
    }

    /// Removes an entry, pruning nodes left empty.
    fn remove<'a, I>(&mut self, mut labels: I, qtype: QType) -> bool
    where
        I: Iterator<Item = &'a [u8]>,
    {
        match labels.next() {
            None => {
                let before = self.entries.len();
                self.entries.retain(|(q, _)| *q != qtype);
                before != self.entries.len()
            }
            Some(label) => {
                let Some(child) = self.children.get_mut(label) else {
                    return false;
                };
                let removed = child.remove(labels, qtype);
                if child.is_empty() {
                    self.children.remove(label);
                }
                removed
            }
        }
    }

    fn preorder(&self, out: &mut Vec<u32>) {
        out.extend(self.entries.iter().map(|(_, o)| *o));
        for child in self.children.values() {
            child.preorder(out);
        }
    }
}

/// Outcome of a local lookup.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LookupResult {
    /// The resolution chain; all but the last element are CNAMEs.
    Hit(Vec<(RecordKey, RecordAnswer)>),
    Miss,
}

impl LookupResult {
    pub fn is_hit(&self) -> bool {
        matches!(self, LookupResult::Hit(_))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BuildDiagnostic {
    DuplicateKey(RecordKey),
    IncompatibleAnswer(RecordKey),
    /// The chain starting at `head` would exceed [`MAX_CHAIN`] records.
    ChainTooLong { head: RecordKey },
    /// The chain starting at `head` loops back to `at`.
    CnameCycle { head: RecordKey, at: DomainName },
    Unresolvable { head: RecordKey, target: RecordKey },
}

/// Upstream answer source used when following CNAME chains and admitting new
/// members.
pub trait Resolver {
    fn resolve(&mut self, key: &RecordKey) -> Option<(RecordAnswer, Ttl)>;
}

impl<F> Resolver for F
where
    F: FnMut(&RecordKey) -> Option<(RecordAnswer, Ttl)>,
{
    fn resolve(&mut self, key: &RecordKey) -> Option<(RecordAnswer, Ttl)> {
        self(key)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SnapshotError {
    #[error("bad snapshot magic")]
    BadMagic,
    #[error("unsupported snapshot format version {0:?}")]
    UnsupportedVersion(char),
    #[error("snapshot truncated")]
    Truncated,
    #[error("snapshot body failed to decompress: {0}")]
    Decompress(String),
    #[error("pool index {index} out of range (pool has {pool_len} answers)")]
    DanglingPoolIndex { index: u64, pool_len: usize },
    #[error("malformed snapshot: {0}")]
    Malformed(String),
}

impl From<WireError> for SnapshotError {
    fn from(e: WireError) -> Self {
        match e {
            WireError::Truncated => SnapshotError::Truncated,
            WireError::Inflate(msg) => SnapshotError::Decompress(msg),
            other => SnapshotError::Malformed(other.to_string()),
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct PopularityList {
    slots: Vec<Option<ListEntry>>,
    live: usize,
    popular: usize,
    trie: TrieNode,
    pool: AnswerPool,
    version: u64,
}

impl PartialEq for PopularityList {
    fn eq(&self, other: &Self) -> bool {
        self.version == other.version && self.slots == other.slots && self.pool == other.pool
    }
}

impl Eq for PopularityList {}

impl PopularityList {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    /// Live entry count.
    pub fn len(&self) -> usize {
        self.live
    }

    pub fn is_empty(&self) -> bool {
        self.live == 0
    }

    /// Live entries that are not CNAME-support records.
    pub fn popular_len(&self) -> usize {
        self.popular
    }

    /// Number of order slots, tombstones included. The next added entry
    /// receives this order.
    pub fn slot_count(&self) -> u32 {
        self.slots.len() as u32
    }

    pub fn pool(&self) -> &AnswerPool {
        &self.pool
    }

    pub fn entry(&self, order: u32) -> Option<&ListEntry> {
        self.slots.get(order as usize).and_then(Option::as_ref)
    }

    /// Live entries in ascending order.
    pub fn entries(&self) -> impl Iterator<Item = &ListEntry> + '_ {
        self.slots.iter().flatten()
    }

    pub fn get(&self, key: &RecordKey) -> Option<&ListEntry> {
        let node = self.trie.find(&key.name)?;
        let (_, order) = node.entries.iter().find(|(q, _)| *q == key.qtype)?;
        self.entry(*order)
    }

    pub fn contains(&self, key: &RecordKey) -> bool {
        self.get(key).is_some()
    }

    pub fn answer_of(&self, entry: &ListEntry) -> &RecordAnswer {
        self.pool.get(entry.answer).expect("entry answers are in range")
    }

    /// Returns the pool index of `answer`, appending it if new.
    pub fn pool_intern(&mut self, answer: &RecordAnswer) -> PoolIndex {
        self.pool.intern(answer)
    }

    pub(crate) fn set_version(&mut self, version: u64) {
        self.version = version;
    }

    /// Appends a new entry at the next order slot.
    pub(crate) fn push_entry(
        &mut self,
        key: RecordKey,
        answer: PoolIndex,
        ttl: Ttl,
        is_cname_support: bool,
    ) -> Option<u32> {
        let order = self.slot_count();
        if !self.trie.insert(&key.name, key.qtype, order) {
            return None;
        }
        self.slots.push(Some(ListEntry { key, answer, ttl, order, is_cname_support }));
        self.live += 1;
        if !is_cname_support {
            self.popular += 1;
        }
        Some(order)
    }

    pub(crate) fn remove_entry(&mut self, order: u32) -> Option<ListEntry> {
        let entry = self.slots.get_mut(order as usize)?.take()?;
        self.trie.remove(entry.key.name.labels(), entry.key.qtype);
        self.live -= 1;
        if !entry.is_cname_support {
            self.popular -= 1;
        }
        Some(entry)
    }

    pub(crate) fn entry_mut(&mut self, order: u32) -> Option<&mut ListEntry> {
        self.slots.get_mut(order as usize).and_then(Option::as_mut)
    }

    fn find_link(&self, name: &DomainName, qtype: QType) -> Option<&ListEntry> {
        let node = self.trie.find(name)?;
        let exact = node.entries.iter().find(|(q, _)| *q == qtype);
        let alias = || node.entries.iter().find(|(q, _)| *q == QType::Cname);
        let (_, order) = exact.or_else(alias)?;
        self.entry(*order)
    }

    /// Follows the chain for `key`, calling `visit` on each link. Returns
    /// whether the chain terminated in a matching answer within the list.
    fn walk<'a>(&'a self, key: &RecordKey, mut visit: impl FnMut(&'a ListEntry, &'a RecordAnswer)) -> bool {
        let mut name = &key.name;
        for _ in 0..MAX_CHAIN {
            let Some(entry) = self.find_link(name, key.qtype) else {
                return false;
            };
            let answer = self.answer_of(entry);
            visit(entry, answer);
            match answer {
                RecordAnswer::Cname(target) if key.qtype != QType::Cname => name = target,
                RecordAnswer::Cname(_) => return true,
                RecordAnswer::A(_) => return key.qtype == QType::A,
                RecordAnswer::Aaaa(_) => return key.qtype == QType::Aaaa,
            }
        }
        false
    }

    /// Resolves `key` locally, following CNAME links inside the list.
    pub fn lookup(&self, key: &RecordKey) -> LookupResult {
        let mut chain = Vec::new();
        if self.walk(key, |entry, answer| chain.push((entry.key.clone(), answer.clone()))) {
            LookupResult::Hit(chain)
        } else {
            LookupResult::Miss
        }
    }

    /// Allocation-free form of [`lookup`](Self::lookup) for hot paths.
    pub fn resolves(&self, key: &RecordKey) -> bool {
        self.walk(key, |_, _| {})
    }

    /// Order values in trie pre-order.
    pub fn preorder(&self) -> Vec<u32> {
        let mut out = Vec::with_capacity(self.live);
        self.trie.preorder(&mut out);
        out
    }

    /// A copy with orders renumbered densely in trie pre-order and the pool
    /// rebuilt from referenced answers only.
    pub fn compacted(&self) -> PopularityList {
        let mut out = PopularityList { version: self.version, ..Default::default() };
        for order in self.preorder() {
            let entry = self.entry(order).expect("trie order is live");
            let idx = out.pool.intern(self.answer_of(entry));
            out.push_entry(entry.key.clone(), idx, entry.ttl, entry.is_cname_support);
        }
        out
    }

    fn encode_body(&self) -> Vec<u8> {
        let mut body = Vec::with_capacity(self.live * 12 + self.pool.len() * 6);
        wire::put_varint(&mut body, self.pool.len() as u64);
        for answer in self.pool.answers() {
            wire::put_answer(&mut body, answer);
        }
        self.encode_node(&mut body, &[], &self.trie);
        let preorder = self.preorder();
        let dense = self.slots.len() == preorder.len() && preorder.iter().enumerate().all(|(i, &o)| o as usize == i);
        if !dense {
            // Order trailer: slot count, then each order as a delta from
            // its pre-order predecessor.
            wire::put_varint(&mut body, self.slots.len() as u64);
            let mut prev = -1i64;
            for order in preorder {
                wire::put_varint(&mut body, wire::zigzag(i64::from(order) - prev - 1));
                prev = i64::from(order);
            }
        }
        body
    }

    fn encode_node(&self, out: &mut Vec<u8>, label: &[u8], node: &TrieNode) {
        wire::put_varint(out, label.len() as u64);
        out.extend_from_slice(label);
        wire::put_varint(out, node.entries.len() as u64);
        for (qtype, order) in &node.entries {
            let entry = self.entry(*order).expect("trie order is live");
            out.push(qtype.code());
            wire::put_varint(out, u64::from(entry.answer.0));
            wire::put_varint(out, u64::from(entry.ttl.secs()));
            out.push(if entry.is_cname_support { FLAG_CNAME_SUPPORT } else { 0 });
        }
        wire::put_varint(out, node.children.len() as u64);
        for (label, child) in &node.children {
            self.encode_node(out, label, child);
        }
    }

    /// Tree section size before compression; used to compare against flat
    /// encodings.
    pub fn uncompressed_snapshot_len(&self) -> usize {
        12 + self.encode_body().len()
    }

    pub fn serialize_snapshot(&self) -> Vec<u8> {
        let body = wire::deflate(&self.encode_body());
        let mut out = Vec::with_capacity(12 + body.len());
        out.extend_from_slice(SNAPSHOT_MAGIC);
        out.extend_from_slice(&self.version.to_le_bytes());
        out.extend_from_slice(&body);
        out
    }

    /// SHA-256 over the version and uncompressed snapshot body; equal digests
    /// mean byte-identical snapshots.
    pub fn digest(&self) -> [u8; 32] {
        let mut hasher = Sha256::new();
        hasher.update(self.version.to_le_bytes());
        hasher.update(self.encode_body());
        hasher.finalize().into()
    }

    pub fn parse_snapshot(data: &[u8]) -> Result<PopularityList, SnapshotError> {
        if data.len() < 4 {
            return Err(if SNAPSHOT_MAGIC.starts_with(data) {
                SnapshotError::Truncated
            } else {
                SnapshotError::BadMagic
            });
        }
        if &data[..4] != SNAPSHOT_MAGIC {
            if &data[..3] == b"PLS" && data[3].is_ascii_digit() {
                return Err(SnapshotError::UnsupportedVersion(data[3] as char));
            }
            return Err(SnapshotError::BadMagic);
        }
        if data.len() < 12 {
            return Err(SnapshotError::Truncated);
        }
        let version = u64::from_le_bytes(data[4..12].try_into().expect("8 bytes"));
        let body = wire::inflate(&data[12..])?;
        let mut r = Reader::new(&body);

        let mut list = PopularityList { version, ..Default::default() };
        let pool_len = r.varint()?;
        for _ in 0..pool_len {
            let answer = r.answer()?;
            if list.pool.find(&answer).is_some() {
                return Err(SnapshotError::Malformed("duplicate pool answer".into()));
            }
            list.pool.intern(&answer);
        }
        let mut labels: Vec<Vec<u8>> = Vec::new();
        let mut parsed = Vec::new();
        list.parse_node(&mut r, &mut labels, &mut parsed, true)?;

        let orders: Vec<u32> = if r.is_empty() {
            list.slots = vec![None; parsed.len()];
            (0..parsed.len() as u32).collect()
        } else {
            let slot_count = r.varint()?;
            if slot_count > u64::from(u32::MAX) || slot_count < parsed.len() as u64 {
                return Err(SnapshotError::Malformed("slot count".into()));
            }
            list.slots = vec![None; slot_count as usize];
            let mut prev = -1i64;
            let mut orders = Vec::with_capacity(parsed.len());
            for _ in 0..parsed.len() {
                let order = prev + 1 + wire::unzigzag(r.varint()?);
                if !(0..slot_count as i64).contains(&order) {
                    return Err(SnapshotError::Malformed(format!("order {order} outside slot range")));
                }
                orders.push(order as u32);
                prev = order;
            }
            if !r.is_empty() {
                return Err(SnapshotError::Malformed("trailing bytes".into()));
            }
            orders
        };
        for (entry, order) in parsed.into_iter().zip(orders) {
            let slot = &mut list.slots[order as usize];
            if slot.is_some() {
                return Err(SnapshotError::Malformed(format!("duplicate order {order}")));
            }
            if !list.trie.insert(&entry.key.name, entry.key.qtype, order) {
                return Err(SnapshotError::Malformed(format!("duplicate key {}", entry.key)));
            }
            if !entry.is_cname_support {
                list.popular += 1;
            }
            list.live += 1;
            *slot = Some(ListEntry { order, ..entry });
        }
        Ok(list)
    }

    fn parse_node(
        &mut self,
        r: &mut Reader<'_>,
        labels: &mut Vec<Vec<u8>>,
        parsed: &mut Vec<ListEntry>,
        root: bool,
    ) -> Result<(), SnapshotError> {
        let label_len = r.varint()? as usize;
        if root != (label_len == 0) {
            return Err(SnapshotError::Malformed("label length".into()));
        }
        if !root {
            labels.push(r.bytes(label_len)?.to_vec());
        }
        let entry_count = r.varint()?;
        if entry_count > 0 && root {
            return Err(SnapshotError::Malformed("entries at the root".into()));
        }
        let name = if entry_count > 0 {
            Some(
                DomainName::from_root_labels(labels.iter())
                    .map_err(|e| SnapshotError::Malformed(e.to_string()))?,
            )
        } else {
            None
        };
        for _ in 0..entry_count {
            let qtype = r.qtype()?;
            let index = r.varint()?;
            if index >= self.pool.len() as u64 {
                return Err(SnapshotError::DanglingPoolIndex { index, pool_len: self.pool.len() });
            }
            let ttl = u32::try_from(r.varint()?)
                .ok()
                .and_then(Ttl::new)
                .ok_or_else(|| SnapshotError::Malformed("ttl".into()))?;
            let flags = r.u8()?;
            if flags & !FLAG_CNAME_SUPPORT != 0 {
                return Err(SnapshotError::Malformed("unknown flags".into()));
            }
            let key = RecordKey::new(name.clone().expect("entry_count > 0"), qtype);
            let answer = PoolIndex(index as u32);
            if !key.accepts(self.pool.get(answer).expect("checked")) {
                return Err(SnapshotError::Malformed(format!("answer type mismatch for {key}")));
            }
            let is_cname_support = flags & FLAG_CNAME_SUPPORT != 0;
            parsed.push(ListEntry { key, answer, ttl, order: 0, is_cname_support });
        }
        let child_count = r.varint()?;
        if child_count > r.remaining() as u64 {
            return Err(SnapshotError::Truncated);
        }
        let mut previous: Option<Vec<u8>> = None;
        for _ in 0..child_count {
            self.parse_node(r, labels, parsed, false)?;
            let label = labels.pop().expect("child pushed its label");
            if previous.as_ref().is_some_and(|p| *p >= label) {
                return Err(SnapshotError::Malformed("children out of order".into()));
            }
            previous = Some(label);
        }
        Ok(())
    }

    /// Line-per-record presentation listing: `name qtype answer ttl`.
    pub fn to_flat_text(&self) -> String {
        let mut out = String::new();
        for entry in self.entries() {
            let _ = writeln!(
                out,
                "{} {} {} {}",
                entry.key.name,
                entry.key.qtype,
                self.answer_of(entry),
                entry.ttl.secs()
            );
        }
        out
    }
}

pub fn serialize_snapshot(list: &PopularityList) -> Vec<u8> {
    list.serialize_snapshot()
}

pub fn parse_snapshot(data: &[u8]) -> Result<PopularityList, SnapshotError> {
    PopularityList::parse_snapshot(data)
}

pub fn lookup(list: &PopularityList, key: &RecordKey) -> LookupResult {
    list.lookup(key)
}

pub fn pool_intern(list: &mut PopularityList, answer: &RecordAnswer) -> PoolIndex {
    list.pool_intern(answer)
}

#[derive(Debug, Clone)]
pub struct BuiltList {
    pub list: PopularityList,
    pub diagnostics: Vec<BuildDiagnostic>,
}

/// Builds a list from records ranked by descending popularity.
///
/// The first `n_popular` records take orders `0..n`. CNAME chains of the
/// included records are then followed through `resolver`, appending each
/// intermediate record not yet present as a support entry.
pub fn build_list<I, R>(ranked: I, resolver: &mut R, n_popular: usize) -> BuiltList
where
    I: IntoIterator<Item = (RecordKey, RecordAnswer, Ttl)>,
    R: Resolver + ?Sized,
{
    let mut list = PopularityList::new();
    let mut diagnostics = Vec::new();
    for (key, answer, ttl) in ranked {
        if list.popular_len() >= n_popular {
            break;
        }
        if !key.accepts(&answer) {
            diagnostics.push(BuildDiagnostic::IncompatibleAnswer(key));
            continue;
        }
        if list.contains(&key) {
            diagnostics.push(BuildDiagnostic::DuplicateKey(key));
            continue;
        }
        let idx = list.pool_intern(&answer);
        list.push_entry(key, idx, ttl, false);
    }
    let heads: Vec<u32> = list.entries().map(|e| e.order).collect();
    for order in heads {
        add_chain_support(&mut list, order, resolver, &mut diagnostics);
    }
    BuiltList { list, diagnostics }
}

/// Follows the CNAME chain of entry `order`, appending support entries for
/// links that are not yet in the list.
pub(crate) fn add_chain_support<R: Resolver + ?Sized>(
    list: &mut PopularityList,
    order: u32,
    resolver: &mut R,
    diagnostics: &mut Vec<BuildDiagnostic>,
) {
    let head = list.entry(order).expect("live head").clone();
    let Some(mut target) = list.answer_of(&head).cname_target().cloned() else {
        return;
    };
    if head.key.qtype == QType::Cname {
        return;
    }
    let mut seen: HashSet<DomainName> = HashSet::from([head.key.name.clone()]);
    let mut links = 1;
    loop {
        if seen.contains(&target) {
            diagnostics.push(BuildDiagnostic::CnameCycle { head: head.key.clone(), at: target });
            return;
        }
        let key = RecordKey::new(target, head.key.qtype);
        if list.contains(&key) {
            return;
        }
        if links >= MAX_CHAIN {
            diagnostics.push(BuildDiagnostic::ChainTooLong { head: head.key.clone() });
            return;
        }
        let Some((answer, ttl)) = resolver.resolve(&key) else {
            diagnostics.push(BuildDiagnostic::Unresolvable { head: head.key.clone(), target: key });
            return;
        };
        if !key.accepts(&answer) {
            diagnostics.push(BuildDiagnostic::IncompatibleAnswer(key));
            return;
        }
        let idx = list.pool_intern(&answer);
        seen.insert(key.name.clone());
        list.push_entry(key, idx, ttl, true);
        links += 1;
        match answer {
            RecordAnswer::Cname(next) => target = next,
            _ => return,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::parse_domain;
    use proptest::prelude::*;
    use std::net::{Ipv4Addr, Ipv6Addr};

    fn key(name: &str, qtype: QType) -> RecordKey {
        RecordKey::new(parse_domain(name).unwrap(), qtype)
    }

    fn a(ip: [u8; 4]) -> RecordAnswer {
        RecordAnswer::A(Ipv4Addr::from(ip))
    }

    fn cname(name: &str) -> RecordAnswer {
        RecordAnswer::Cname(parse_domain(name).unwrap())
    }

    fn ttl(secs: u32) -> Ttl {
        Ttl::new(secs).unwrap()
    }

    fn no_upstream(_: &RecordKey) -> Option<(RecordAnswer, Ttl)> {
        None
    }

    #[test]
    fn single_record_list() {
        let built = build_list([(key("a.com", QType::A), a([1, 2, 3, 4]), ttl(300))], &mut no_upstream, 1);
        assert_eq!(built.list.len(), 1);
        assert_eq!(built.list.pool().answers(), &[a([1, 2, 3, 4])]);
        assert!(built.diagnostics.is_empty());
    }

    #[test]
    fn cname_head_gets_support_entry() {
        let mut upstream = |k: &RecordKey| {
            (k == &key("edge.y.net", QType::A)).then(|| (a([5, 6, 7, 8]), ttl(60)))
        };
        let ranked = vec![
            (key("cdn.x.com", QType::A), cname("edge.y.net"), ttl(300)),
            (key("b.com", QType::A), a([9, 9, 9, 9]), ttl(300)),
        ];
        let built = build_list(ranked, &mut upstream, 2);
        let list = built.list;
        assert_eq!(list.len(), 3);
        assert_eq!(list.popular_len(), 2);
        let support = list.get(&key("edge.y.net", QType::A)).unwrap();
        assert!(support.is_cname_support);
        assert_eq!(support.order, 2, "support entries follow all popular entries");
        assert_eq!(list.answer_of(support), &a([5, 6, 7, 8]));
    }

    #[test]
    fn n_popular_caps_voted_entries_only() {
        let ranked: Vec<_> = (0..5)
            .map(|i| (key(&format!("h{i}.com"), QType::A), a([10, 0, 0, i]), ttl(60)))
            .collect();
        let built = build_list(ranked, &mut no_upstream, 3);
        assert_eq!(built.list.popular_len(), 3);
        assert!(built.list.contains(&key("h2.com", QType::A)));
        assert!(!built.list.contains(&key("h3.com", QType::A)));
    }

    #[test]
    fn cycle_and_long_chain_are_truncated() {
        // x -> y -> x
        let mut upstream = |k: &RecordKey| match k.name.present().as_str() {
            "y.com" => Some((cname("x.com"), ttl(60))),
            _ => None,
        };
        let built = build_list([(key("x.com", QType::A), cname("y.com"), ttl(60))], &mut upstream, 1);
        assert!(matches!(built.diagnostics[..], [BuildDiagnostic::CnameCycle { .. }]));
        assert_eq!(built.list.len(), 2);
        assert_eq!(built.list.lookup(&key("x.com", QType::A)), LookupResult::Miss);

        // c0 -> c1 -> ... -> c20
        let mut chain = |k: &RecordKey| {
            let name = k.name.present();
            let i: u32 = name.trim_start_matches('c').trim_end_matches(".com").parse().unwrap();
            Some((cname(&format!("c{}.com", i + 1)), ttl(60)))
        };
        let built = build_list([(key("c0.com", QType::A), cname("c1.com"), ttl(60))], &mut chain, 1);
        assert!(matches!(built.diagnostics[..], [BuildDiagnostic::ChainTooLong { .. }]));
        assert_eq!(built.list.len(), MAX_CHAIN);
        assert!(!built.list.resolves(&key("c0.com", QType::A)));
    }

    #[test]
    fn lookup_direct_chain_and_miss() {
        let mut upstream = |k: &RecordKey| (k.name.present() == "t.net").then(|| (a([1, 1, 1, 1]), ttl(60)));
        let built = build_list(
            [
                (key("d.com", QType::A), a([2, 2, 2, 2]), ttl(60)),
                (key("alias.com", QType::A), cname("t.net"), ttl(60)),
            ],
            &mut upstream,
            2,
        );
        let list = built.list;
        match list.lookup(&key("d.com", QType::A)) {
            LookupResult::Hit(chain) => assert_eq!(chain.len(), 1),
            LookupResult::Miss => panic!("expected hit"),
        }
        match list.lookup(&key("alias.com", QType::A)) {
            LookupResult::Hit(chain) => {
                assert_eq!(chain.len(), 2);
                assert_eq!(chain[0].1, cname("t.net"));
                assert_eq!(chain[1].0, key("t.net", QType::A));
            }
            LookupResult::Miss => panic!("expected hit"),
        }
        assert_eq!(list.lookup(&key("absent.com", QType::A)), LookupResult::Miss);
        assert_eq!(list.lookup(&key("d.com", QType::Aaaa)), LookupResult::Miss);
    }

    #[test]
    fn pool_intern_order_of_first_appearance() {
        let mut list = PopularityList::new();
        let (x, y) = (a([1, 2, 3, 4]), RecordAnswer::Aaaa(Ipv6Addr::LOCALHOST));
        assert_eq!(list.pool_intern(&x), PoolIndex(0));
        assert_eq!(list.pool_intern(&x), PoolIndex(0));
        assert_eq!(list.pool_intern(&y), PoolIndex(1));
        assert_eq!(list.pool_intern(&x), PoolIndex(0));
    }

    #[test]
    fn pool_intern_counts_distinct() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let mut list = PopularityList::new();
        let mut distinct = std::collections::BTreeSet::new();
        for _ in 0..100_000 {
            let ip: u32 = rng.gen_range(0..20_000);
            distinct.insert(ip);
            list.pool_intern(&RecordAnswer::A(Ipv4Addr::from(ip)));
        }
        assert_eq!(list.pool().len(), distinct.len());
    }

    #[test]
    fn empty_snapshot_round_trips() {
        let list = PopularityList::new();
        let bytes = list.serialize_snapshot();
        assert_eq!(&bytes[..4], SNAPSHOT_MAGIC);
        assert_eq!(PopularityList::parse_snapshot(&bytes).unwrap(), list);
    }

    #[test]
    fn shared_suffix_labels_written_once() {
        let built = build_list(
            [
                (key("example.com", QType::A), a([1, 1, 1, 1]), ttl(60)),
                (key("mail.example.com", QType::A), a([1, 1, 1, 2]), ttl(60)),
            ],
            &mut no_upstream,
            2,
        );
        let body = built.list.encode_body();
        let count = |needle: &[u8]| body.windows(needle.len()).filter(|w| *w == needle).count();
        assert_eq!(count(b"com"), 1);
        assert_eq!(count(b"example"), 1);
        assert_eq!(count(b"mail"), 1);
    }

    #[test]
    fn parse_errors_are_distinct() {
        let built = build_list([(key("a.com", QType::A), a([1, 2, 3, 4]), ttl(60))], &mut no_upstream, 1);
        let good = built.list.serialize_snapshot();

        let mut bad = good.clone();
        bad[0] = b'X';
        assert_eq!(PopularityList::parse_snapshot(&bad), Err(SnapshotError::BadMagic));
        bad = good.clone();
        bad[3] = b'2';
        assert_eq!(PopularityList::parse_snapshot(&bad), Err(SnapshotError::UnsupportedVersion('2')));
        assert_eq!(PopularityList::parse_snapshot(&good[..8]), Err(SnapshotError::Truncated));
        bad = good[..12].to_vec();
        bad.extend_from_slice(&[0xde, 0xad, 0xbe, 0xef, 0xff]);
        assert!(matches!(PopularityList::parse_snapshot(&bad), Err(SnapshotError::Decompress(_))));

        // Pool of one answer, one entry pointing at index 5.
        let mut body = Vec::new();
        wire::put_varint(&mut body, 1);
        wire::put_answer(&mut body, &a([1, 2, 3, 4]));
        body.extend_from_slice(&[0, 0, 1]); // root: no label, no entries, one child
        body.extend_from_slice(&[3, b'c', b'o', b'm', 1, QType::A.code(), 5, 60, 0, 0]);
        let mut dangling = good[..12].to_vec();
        dangling.extend_from_slice(&wire::deflate(&body));
        assert_eq!(
            PopularityList::parse_snapshot(&dangling),
            Err(SnapshotError::DanglingPoolIndex { index: 5, pool_len: 1 })
        );
    }

    #[test]
    fn compaction_renumbers_in_preorder() {
        let built = build_list(
            [
                (key("z.org", QType::A), a([1, 1, 1, 1]), ttl(60)),
                (key("b.com", QType::A), a([2, 2, 2, 2]), ttl(60)),
                (key("a.com", QType::A), a([3, 3, 3, 3]), ttl(60)),
            ],
            &mut no_upstream,
            3,
        );
        let compact = built.list.compacted();
        let names: Vec<String> = compact.entries().map(|e| e.key.name.present()).collect();
        assert_eq!(names, ["a.com", "b.com", "z.org"]);
        assert_eq!(compact.preorder(), vec![0, 1, 2]);
    }

    #[test]
    fn dense_snapshot_omits_orders() {
        let built = build_list([(key("a.com", QType::A), a([1, 2, 3, 4]), ttl(60))], &mut no_upstream, 1);
        let body = wire::inflate(&built.list.serialize_snapshot()[12..]).unwrap();
        let mut expected = vec![1, 1, 1, 2, 3, 4, 0, 0, 1];
        expected.extend_from_slice(&[3, b'c', b'o', b'm', 0, 1, 1, b'a', 1, QType::A.code(), 0, 60, 0, 0]);
        assert_eq!(body, expected);

        let mut sparse = built.list.clone();
        let b = sparse.pool_intern(&a([5, 6, 7, 8]));
        let order = sparse.push_entry(key("b.com", QType::A), b, ttl(60), false).unwrap();
        sparse.remove_entry(0);
        let body = wire::inflate(&sparse.serialize_snapshot()[12..]).unwrap();
        assert_eq!(body[body.len() - 2..], [2, wire::zigzag(i64::from(order)) as u8]);
        assert_eq!(PopularityList::parse_snapshot(&sparse.serialize_snapshot()).unwrap(), sparse);
    }

    fn arb_list() -> impl Strategy<Value = PopularityList> {
        let name = prop::collection::vec("[a-d]{1,3}", 1..4).prop_map(|l| l.join("."));
        let rec = (name, prop::bool::ANY, any::<u8>(), 1u32..100_000, prop::bool::ANY);
        prop::collection::vec(rec, 0..60).prop_map(|recs| {
            let mut list = PopularityList::new();
            for (name, v6, host, ttl_s, drop) in recs {
                let qtype = if v6 { QType::Aaaa } else { QType::A };
                let answer = if v6 {
                    RecordAnswer::Aaaa(Ipv6Addr::new(0x2001, 0xdb8, 0, 0, 0, 0, 0, u16::from(host % 8)))
                } else {
                    a([10, 0, 0, host % 8])
                };
                let idx = list.pool_intern(&answer);
                let order = list.push_entry(RecordKey::new(parse_domain(&name).unwrap(), qtype), idx, Ttl::new(ttl_s).unwrap(), host % 5 == 0);
                if let (Some(order), true) = (order, drop) {
                    list.remove_entry(order);
                }
            }
            list.set_version(u64::from(list.slot_count()) * 7);
            list
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn snapshot_round_trip(list in arb_list()) {
            let parsed = PopularityList::parse_snapshot(&list.serialize_snapshot()).unwrap();
            prop_assert_eq!(parsed.preorder(), list.preorder());
            prop_assert_eq!(parsed.popular_len(), list.popular_len());
            prop_assert_eq!(&parsed, &list);
        }

        #[test]
        fn every_entry_is_reachable(list in arb_list()) {
            for entry in list.entries() {
                match list.lookup(&entry.key) {
                    LookupResult::Hit(chain) => prop_assert_eq!(&chain[0].0, &entry.key),
                    LookupResult::Miss => prop_assert!(false, "entry {} not found", entry.key),
                }
            }
        }

        #[test]
        fn suffix_labels_serialized_once(list in arb_list()) {
            fn tree_label_bytes(node: &TrieNode) -> usize {
                node.children.iter().map(|(l, c)| l.len() + tree_label_bytes(c)).sum()
            }
            let flat: usize = list.entries().map(|e| e.key.name.labels().map(<[u8]>::len).sum::<usize>()).sum();
            let distinct: HashSet<Vec<Vec<u8>>> = list
                .entries()
                .flat_map(|e| {
                    let labels: Vec<Vec<u8>> = e.key.name.labels().map(<[u8]>::to_vec).collect();
                    (1..=labels.len()).map(move |n| labels[..n].to_vec())
                })
                .collect();
            let expected: usize = distinct.iter().map(|path| path.last().unwrap().len()).sum();
            prop_assert_eq!(tree_label_bytes(&list.trie), expected);
            prop_assert!(expected <= flat);
        }
    }
}
