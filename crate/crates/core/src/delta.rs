//! Incremental list updates.
//!
//! Records are referenced by their order slot. A changed answer is referenced
//! relative to the record's current pool index when the answer is already
//! pooled, and sent literally otherwise (which appends it to the pool).

use std::collections::{BTreeMap, HashMap, HashSet};

use thiserror::Error;

use crate::model::{RecordAnswer, RecordKey, Ttl};
use crate::poplist::{PoolIndex, PopularityList};
use crate::wire::{self, Reader, WireError};

pub const BATCH_MAGIC: &[u8; 4] = b"PLU1";

const TAG_ANSWER_CHANGE: u8 = 0;
const TAG_RECORD_ADD: u8 = 1;
const TAG_RECORD_REMOVE: u8 = 2;
const TAG_TTL_CHANGE: u8 = 3;

/// Reference to a new answer for an existing record.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RelRef {
    /// Signed offset from the record's current pool index; never zero.
    PoolRelative(i64),
    Literal(RecordAnswer),
}

/// Answer of a newly added record.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AnswerRef {
    Pooled(PoolIndex),
    Literal(RecordAnswer),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Delta {
    AnswerChange { order: u32, answer: RelRef },
    RecordAdd { key: RecordKey, answer: AnswerRef, ttl: Ttl, is_cname_support: bool },
    RecordRemove { order: u32 },
    TtlChange { order: u32, ttl: Ttl },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UpdateBatch {
    pub from_version: u64,
    pub to_version: u64,
    pub deltas: Vec<Delta>,
}

impl UpdateBatch {
    pub fn new(from_version: u64, deltas: Vec<Delta>) -> Self {
        Self { from_version, to_version: from_version + 1, deltas }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DeltaError {
    /// The replica is not at the batch's base version; fetch a snapshot.
    #[error("version gap: replica at {replica}, batch starts at {batch_from}")]
    VersionGap { replica: u64, batch_from: u64 },
    #[error("malformed delta: {0}")]
    Malformed(String),
    #[error("dangling reference: {0}")]
    DanglingReference(String),
}

impl From<WireError> for DeltaError {
    fn from(e: WireError) -> Self {
        DeltaError::Malformed(e.to_string())
    }
}

/// Tracks the effect of a batch on a list without mutating it.
struct Overlay<'a> {
    list: &'a PopularityList,
    answers: HashMap<u32, PoolIndex>,
    removed: HashSet<u32>,
    added: HashMap<u32, RecordKey>,
    added_keys: HashSet<RecordKey>,
    new_answers: Vec<RecordAnswer>,
    new_index: HashMap<RecordAnswer, PoolIndex>,
    next_slot: u32,
}

impl<'a> Overlay<'a> {
    fn new(list: &'a PopularityList) -> Self {
        Self {
            list,
            answers: HashMap::new(),
            removed: HashSet::new(),
            added: HashMap::new(),
            added_keys: HashSet::new(),
            new_answers: Vec::new(),
            new_index: HashMap::new(),
            next_slot: list.slot_count(),
        }
    }

    fn pool_len(&self) -> usize {
        self.list.pool().len() + self.new_answers.len()
    }

    fn pool_get(&self, idx: PoolIndex) -> Option<&RecordAnswer> {
        let base = self.list.pool().len();
        if idx.get() < base {
            self.list.pool().get(idx)
        } else {
            self.new_answers.get(idx.get() - base)
        }
    }

    fn pool_find(&self, answer: &RecordAnswer) -> Option<PoolIndex> {
        self.list.pool().find(answer).or_else(|| self.new_index.get(answer).copied())
    }

    fn intern(&mut self, answer: &RecordAnswer) -> PoolIndex {
        if let Some(idx) = self.pool_find(answer) {
            return idx;
        }
        let idx = PoolIndex(self.pool_len() as u32);
        self.new_answers.push(answer.clone());
        self.new_index.insert(answer.clone(), idx);
        idx
    }

    fn live_key(&self, order: u32) -> Option<&RecordKey> {
        if let Some(key) = self.added.get(&order) {
            return Some(key);
        }
        if self.removed.contains(&order) {
            return None;
        }
        self.list.entry(order).map(|e| &e.key)
    }

    fn key_live(&self, key: &RecordKey) -> bool {
        self.added_keys.contains(key)
            || self.list.get(key).is_some_and(|e| !self.removed.contains(&e.order))
    }

    fn current_answer(&self, order: u32) -> PoolIndex {
        self.answers
            .get(&order)
            .copied()
            .unwrap_or_else(|| self.list.entry(order).expect("live order").answer)
    }

    fn step(&mut self, delta: &Delta) -> Result<(), DeltaError> {
        match delta {
            Delta::AnswerChange { order, answer } => {
                let key = self
                    .live_key(*order)
                    .ok_or_else(|| DeltaError::DanglingReference(format!("record order {order}")))?
                    .clone();
                let idx = match answer {
                    RelRef::PoolRelative(0) => {
                        return Err(DeltaError::Malformed("zero pool offset".into()));
                    }
                    RelRef::PoolRelative(offset) => {
                        let target = i64::from(self.current_answer(*order).0) + offset;
                        if target < 0 || target as usize >= self.pool_len() {
                            return Err(DeltaError::DanglingReference(format!(
                                "pool offset {offset} from record order {order}"
                            )));
                        }
                        PoolIndex(target as u32)
                    }
                    RelRef::Literal(answer) => self.intern(answer),
                };
                if !key.accepts(self.pool_get(idx).expect("in range")) {
                    return Err(DeltaError::Malformed(format!("answer type mismatch for {key}")));
                }
                self.answers.insert(*order, idx);
            }
            Delta::RecordAdd { key, answer, .. } => {
                if self.key_live(key) {
                    return Err(DeltaError::Malformed(format!("{key} already present")));
                }
                let idx = match answer {
                    AnswerRef::Pooled(idx) if idx.get() < self.pool_len() => *idx,
                    AnswerRef::Pooled(idx) => {
                        return Err(DeltaError::DanglingReference(format!("pool index {}", idx.0)));
                    }
                    AnswerRef::Literal(answer) => self.intern(answer),
                };
                if !key.accepts(self.pool_get(idx).expect("in range")) {
                    return Err(DeltaError::Malformed(format!("answer type mismatch for {key}")));
                }
                let order = self.next_slot;
                self.next_slot += 1;
                self.added.insert(order, key.clone());
                self.added_keys.insert(key.clone());
                self.answers.insert(order, idx);
            }
            Delta::RecordRemove { order } => {
                if self.live_key(*order).is_none() {
                    return Err(DeltaError::DanglingReference(format!("record order {order}")));
                }
                if let Some(key) = self.added.remove(order) {
                    self.added_keys.remove(&key);
                }
                self.removed.insert(*order);
            }
            Delta::TtlChange { order, .. } => {
                if self.live_key(*order).is_none() {
                    return Err(DeltaError::DanglingReference(format!("record order {order}")));
                }
            }
        }
        Ok(())
    }
}

fn validate(list: &PopularityList, batch: &UpdateBatch) -> Result<(), DeltaError> {
    if batch.from_version != list.version() {
        return Err(DeltaError::VersionGap { replica: list.version(), batch_from: batch.from_version });
    }
    if batch.to_version != batch.from_version + 1 {
        return Err(DeltaError::Malformed(format!(
            "to_version {} does not follow {}",
            batch.to_version, batch.from_version
        )));
    }
    let mut overlay = Overlay::new(list);
    for delta in &batch.deltas {
        overlay.step(delta)?;
    }
    Ok(())
}

fn apply_unchecked(list: &mut PopularityList, deltas: &[Delta]) {
    for delta in deltas {
        match delta {
            Delta::AnswerChange { order, answer } => {
                let current = list.entry(*order).expect("validated").answer;
                let idx = match answer {
                    RelRef::PoolRelative(offset) => PoolIndex((i64::from(current.0) + offset) as u32),
                    RelRef::Literal(answer) => list.pool_intern(answer),
                };
                list.entry_mut(*order).expect("validated").answer = idx;
            }
            Delta::RecordAdd { key, answer, ttl, is_cname_support } => {
                let idx = match answer {
                    AnswerRef::Pooled(idx) => *idx,
                    AnswerRef::Literal(answer) => list.pool_intern(answer),
                };
                list.push_entry(key.clone(), idx, *ttl, *is_cname_support).expect("validated");
            }
            Delta::RecordRemove { order } => {
                list.remove_entry(*order).expect("validated");
            }
            Delta::TtlChange { order, ttl } => {
                list.entry_mut(*order).expect("validated").ttl = *ttl;
            }
        }
    }
}

impl PopularityList {
    /// Applies a decoded batch. Leaves the list untouched on error.
    pub fn apply_update(&mut self, batch: &UpdateBatch) -> Result<(), DeltaError> {
        validate(self, batch)?;
        apply_unchecked(self, &batch.deltas);
        self.set_version(batch.to_version);
        Ok(())
    }

    /// Decodes and applies an encoded batch. Leaves the list untouched on error.
    pub fn apply_batch(&mut self, data: &[u8]) -> Result<(), DeltaError> {
        let batch = decode_batch(data)?;
        self.apply_update(&batch)
    }

    /// Applies deltas without a version bump. Used by servers composing
    /// several change sets into one batch.
    pub fn apply_deltas(&mut self, deltas: &[Delta]) -> Result<(), DeltaError> {
        let probe = UpdateBatch::new(self.version(), deltas.to_vec());
        validate(self, &probe)?;
        apply_unchecked(self, deltas);
        Ok(())
    }
}

/// Returns a new list with the batch applied.
pub fn apply_batch(list: &PopularityList, data: &[u8]) -> Result<PopularityList, DeltaError> {
    let mut out = list.clone();
    out.apply_batch(data)?;
    Ok(out)
}

/// Encodes `batch` after checking it against `list_before`.
pub fn encode_batch(list_before: &PopularityList, batch: &UpdateBatch) -> Result<Vec<u8>, DeltaError> {
    validate(list_before, batch)?;
    Ok(batch.to_bytes())
}

impl UpdateBatch {
    /// Serializes without checking references; see [`encode_batch`].
    pub fn to_bytes(&self) -> Vec<u8> {
        encode_unchecked(self)
    }
}

fn encode_unchecked(batch: &UpdateBatch) -> Vec<u8> {
    let mut body = Vec::with_capacity(batch.deltas.len() * 6 + 4);
    wire::put_varint(&mut body, batch.deltas.len() as u64);
    for delta in &batch.deltas {
        match delta {
            Delta::AnswerChange { order, answer } => {
                body.push(TAG_ANSWER_CHANGE);
                wire::put_varint(&mut body, u64::from(*order));
                match answer {
                    RelRef::PoolRelative(offset) => wire::put_varint(&mut body, wire::zigzag(*offset)),
                    RelRef::Literal(answer) => {
                        body.push(0);
                        wire::put_answer(&mut body, answer);
                    }
                }
            }
            Delta::RecordAdd { key, answer, ttl, is_cname_support } => {
                body.push(TAG_RECORD_ADD);
                wire::put_key(&mut body, key);
                match answer {
                    AnswerRef::Pooled(idx) => {
                        body.push(0);
                        wire::put_varint(&mut body, u64::from(idx.0));
                    }
                    AnswerRef::Literal(answer) => {
                        body.push(1);
                        wire::put_answer(&mut body, answer);
                    }
                }
                wire::put_varint(&mut body, u64::from(ttl.secs()));
                body.push(u8::from(*is_cname_support));
            }
            Delta::RecordRemove { order } => {
                body.push(TAG_RECORD_REMOVE);
                wire::put_varint(&mut body, u64::from(*order));
            }
            Delta::TtlChange { order, ttl } => {
                body.push(TAG_TTL_CHANGE);
                wire::put_varint(&mut body, u64::from(*order));
                wire::put_varint(&mut body, u64::from(ttl.secs()));
            }
        }
    }
    let compressed = wire::deflate(&body);
    let mut out = Vec::with_capacity(20 + compressed.len());
    out.extend_from_slice(BATCH_MAGIC);
    out.extend_from_slice(&batch.from_version.to_le_bytes());
    out.extend_from_slice(&batch.to_version.to_le_bytes());
    out.extend_from_slice(&compressed);
    out
}

fn read_ttl(r: &mut Reader<'_>) -> Result<Ttl, DeltaError> {
    u32::try_from(r.varint()?)
        .ok()
        .and_then(Ttl::new)
        .ok_or_else(|| DeltaError::Malformed("ttl".into()))
}

fn read_order(r: &mut Reader<'_>) -> Result<u32, DeltaError> {
    u32::try_from(r.varint()?).map_err(|_| DeltaError::Malformed("order exceeds u32".into()))
}

pub fn decode_batch(data: &[u8]) -> Result<UpdateBatch, DeltaError> {
    if data.len() < 20 {
        return Err(DeltaError::Malformed("batch header truncated".into()));
    }
    if &data[..4] != BATCH_MAGIC {
        return Err(DeltaError::Malformed("bad batch magic".into()));
    }
    let from_version = u64::from_le_bytes(data[4..12].try_into().expect("8 bytes"));
    let to_version = u64::from_le_bytes(data[12..20].try_into().expect("8 bytes"));
    let body = wire::inflate(&data[20..])?;
    let mut r = Reader::new(&body);
    let count = r.varint()?;
    if count > body.len() as u64 {
        return Err(DeltaError::Malformed("delta count exceeds body".into()));
    }
    let mut deltas = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let delta = match r.u8()? {
            TAG_ANSWER_CHANGE => {
                let order = read_order(&mut r)?;
                let answer = match r.varint()? {
                    0 => RelRef::Literal(r.answer()?),
                    z => RelRef::PoolRelative(wire::unzigzag(z)),
                };
                Delta::AnswerChange { order, answer }
            }
            TAG_RECORD_ADD => {
                let key = r.key()?;
                let answer = match r.u8()? {
                    0 => AnswerRef::Pooled(PoolIndex(
                        u32::try_from(r.varint()?).map_err(|_| DeltaError::Malformed("pool index".into()))?,
                    )),
                    1 => AnswerRef::Literal(r.answer()?),
                    other => return Err(DeltaError::Malformed(format!("answer flag {other}"))),
                };
                let ttl = read_ttl(&mut r)?;
                let is_cname_support = match r.u8()? {
                    0 => false,
                    1 => true,
                    other => return Err(DeltaError::Malformed(format!("record flags {other}"))),
                };
                Delta::RecordAdd { key, answer, ttl, is_cname_support }
            }
            TAG_RECORD_REMOVE => Delta::RecordRemove { order: read_order(&mut r)? },
            TAG_TTL_CHANGE => {
                let order = read_order(&mut r)?;
                Delta::TtlChange { order, ttl: read_ttl(&mut r)? }
            }
            tag => return Err(DeltaError::Malformed(format!("delta tag {tag}"))),
        };
        deltas.push(delta);
    }
    if !r.is_empty() {
        return Err(DeltaError::Malformed("trailing bytes".into()));
    }
    Ok(UpdateBatch { from_version, to_version, deltas })
}

/// Pool-resident answers are referenced relatively; others are sent literally
/// and remembered so later deltas in the same batch can reference them.
pub(crate) struct RefPlanner<'a> {
    base: &'a PopularityList,
    introduced: HashMap<RecordAnswer, PoolIndex>,
}

impl<'a> RefPlanner<'a> {
    pub(crate) fn new(base: &'a PopularityList) -> Self {
        Self { base, introduced: HashMap::new() }
    }

    pub(crate) fn find(&self, answer: &RecordAnswer) -> Option<PoolIndex> {
        self.base.pool().find(answer).or_else(|| self.introduced.get(answer).copied())
    }

    fn introduce(&mut self, answer: &RecordAnswer) {
        let idx = PoolIndex((self.base.pool().len() + self.introduced.len()) as u32);
        self.introduced.insert(answer.clone(), idx);
    }

    pub(crate) fn change(&mut self, current: PoolIndex, answer: &RecordAnswer) -> RelRef {
        match self.find(answer) {
            Some(idx) if idx != current => RelRef::PoolRelative(i64::from(idx.0) - i64::from(current.0)),
            _ => {
                self.introduce(answer);
                RelRef::Literal(answer.clone())
            }
        }
    }

    pub(crate) fn add(&mut self, answer: &RecordAnswer) -> AnswerRef {
        match self.find(answer) {
            Some(idx) => AnswerRef::Pooled(idx),
            None => {
                self.introduce(answer);
                AnswerRef::Literal(answer.clone())
            }
        }
    }
}

/// Computes a batch turning `before` into `after`.
///
/// Deltas are emitted as removals (ascending order), then answer/TTL changes
/// of surviving records, then additions in `after`'s order. Applying the
/// result reproduces `after` exactly when `after` was derived from `before`
/// in that same sequence: new records occupy the next slots in ascending
/// order and new answers entered the pool in delta order. A record whose
/// support flag differs is removed and re-added.
pub fn diff_states(before: &PopularityList, after: &PopularityList) -> UpdateBatch {
    let mut deltas = Vec::new();
    let mut planner = RefPlanner::new(before);
    let mut kept: HashSet<&RecordKey> = HashSet::new();

    for old in before.entries() {
        match after.get(&old.key) {
            Some(new) if new.is_cname_support == old.is_cname_support => {
                kept.insert(&old.key);
            }
            _ => deltas.push(Delta::RecordRemove { order: old.order }),
        }
    }
    for old in before.entries().filter(|e| kept.contains(&e.key)) {
        let new = after.get(&old.key).expect("kept");
        let answer = after.answer_of(new);
        if answer != before.answer_of(old) {
            let rel = planner.change(old.answer, answer);
            deltas.push(Delta::AnswerChange { order: old.order, answer: rel });
        }
        if new.ttl != old.ttl {
            deltas.push(Delta::TtlChange { order: old.order, ttl: new.ttl });
        }
    }
    for new in after.entries().filter(|e| !kept.contains(&e.key)) {
        let answer = planner.add(after.answer_of(new));
        deltas.push(Delta::RecordAdd {
            key: new.key.clone(),
            answer,
            ttl: new.ttl,
            is_cname_support: new.is_cname_support,
        });
    }
    UpdateBatch::new(before.version(), deltas)
}

/// Milliseconds on the simulation timeline.
pub type Millis = u64;

/// Clamps re-query intervals to a minimum TTL and accumulates observed
/// answer changes into one batch per `ttl_min` window.
#[derive(Debug, Clone)]
pub struct UpdateScheduler {
    ttl_min: Ttl,
    next_flush: Millis,
    observed: BTreeMap<u32, (RecordAnswer, Ttl)>,
}

impl UpdateScheduler {
    pub const DEFAULT_TTL_MIN: Ttl = match Ttl::new(60) {
        Some(t) => t,
        None => unreachable!(),
    };

    /// The first flush happens one window after `start`.
    pub fn new(ttl_min: Ttl, start: Millis) -> Self {
        Self { ttl_min, next_flush: start + ttl_min.millis(), observed: BTreeMap::new() }
    }

    pub fn ttl_min(&self) -> Ttl {
        self.ttl_min
    }

    pub fn effective_ttl(&self, ttl: Ttl) -> Ttl {
        ttl.max(self.ttl_min)
    }

    /// Time of the next upstream re-query of `entry`.
    pub fn schedule_requery(&self, entry_ttl: Ttl, now: Millis) -> Millis {
        now + self.effective_ttl(entry_ttl).millis()
    }

    pub fn next_flush(&self) -> Millis {
        self.next_flush
    }

    /// Records a re-query result; later observations of the same record
    /// within a window replace earlier ones.
    pub fn observe(&mut self, order: u32, answer: RecordAnswer, ttl: Ttl) {
        self.observed.insert(order, (answer, ttl));
    }

    pub fn forget(&mut self, order: u32) {
        self.observed.remove(&order);
    }

    pub fn pending(&self) -> usize {
        self.observed.len()
    }

    /// At or after the flush time, drains observations into deltas against
    /// `list` and advances the window. Observations equal to the current
    /// state produce nothing.
    pub fn flush(&mut self, now: Millis, list: &PopularityList) -> Option<Vec<Delta>> {
        if now < self.next_flush {
            return None;
        }
        let step = self.ttl_min.millis();
        self.next_flush += ((now - self.next_flush) / step + 1) * step;
        let mut planner = RefPlanner::new(list);
        let mut deltas = Vec::new();
        let mut current: HashMap<u32, PoolIndex> = HashMap::new();
        for (order, (answer, ttl)) in std::mem::take(&mut self.observed) {
            let Some(entry) = list.entry(order) else { continue };
            let at = *current.get(&order).unwrap_or(&entry.answer);
            let held = list.pool().get(at);
            if held != Some(&answer) {
                let rel = planner.change(at, &answer);
                deltas.push(Delta::AnswerChange { order, answer: rel });
                current.insert(order, planner.find(&answer).expect("introduced"));
            }
            if ttl != entry.ttl {
                deltas.push(Delta::TtlChange { order, ttl });
            }
        }
        Some(deltas)
    }
}

pub fn schedule_requery(scheduler: &UpdateScheduler, entry_ttl: Ttl, now: Millis) -> Millis {
    scheduler.schedule_requery(entry_ttl, now)
}

/// Bytes per client per hour: every client receives every broadcast batch
/// once, so this is the total encoded size normalized to one hour.
pub fn measure_bandwidth<B: AsRef<[u8]>>(batches: &[B], window: std::time::Duration) -> f64 {
    assert!(!window.is_zero(), "window must be positive");
    let total: usize = batches.iter().map(|b| b.as_ref().len()).sum();
    total as f64 * 3600.0 / window.as_secs_f64()
}
