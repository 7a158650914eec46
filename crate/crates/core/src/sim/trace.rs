//! Query traces: CSV ingestion, export and synthetic generation.

use std::collections::HashMap;
use std::fs::File;
use std::io::{self, BufWriter, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Zipf};
use thiserror::Error;

use super::universe::{mix64, Universe};
use crate::model::{ClientId, DomainName, NameError, QType, RecordKey};

pub const TRACE_HEADER: [&str; 4] = ["t_ms", "client_id", "qname", "qtype"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct KeyId(pub u32);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TraceEvent {
    pub t_ms: u64,
    pub client: ClientId,
    pub key: KeyId,
}

/// Time-sorted events with interned record keys. Keys are numbered in order
/// of first appearance.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Trace {
    keys: Vec<RecordKey>,
    events: Vec<TraceEvent>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum LineError {
    #[error("expected 4 fields, found {0}")]
    FieldCount(usize),
    #[error("invalid timestamp {0:?}")]
    Time(String),
    #[error("invalid client id {0:?}")]
    Client(String),
    #[error("invalid name {name:?}: {err}")]
    Name { name: String, err: NameError },
    #[error("UnsupportedType: {0:?} (expected A or AAAA)")]
    UnsupportedType(String),
    #[error("{0}")]
    Csv(String),
}

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("{path}: {source}")]
    Io { path: String, source: io::Error },
    #[error("line 1: expected header t_ms,client_id,qname,qtype")]
    Header,
    #[error("line {line}: {kind}")]
    Line { line: u64, kind: LineError },
    #[error("line {line}: timestamp {t_ms} is earlier than the previous event ({prev_ms})")]
    Unsorted { line: u64, t_ms: u64, prev_ms: u64 },
}

impl TraceError {
    pub fn line(&self) -> Option<u64> {
        match self {
            TraceError::Line { line, .. } | TraceError::Unsorted { line, .. } => Some(*line),
            TraceError::Header => Some(1),
            TraceError::Io { .. } => None,
        }
    }
}

impl Trace {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn events(&self) -> &[TraceEvent] {
        &self.events
    }

    pub fn keys(&self) -> &[RecordKey] {
        &self.keys
    }

    pub fn key(&self, id: KeyId) -> &RecordKey {
        &self.keys[id.0 as usize]
    }

    pub fn clients(&self) -> usize {
        self.events.iter().map(|e| e.client.0 as usize + 1).max().unwrap_or(0)
    }

    pub fn start_ms(&self) -> Option<u64> {
        self.events.first().map(|e| e.t_ms)
    }

    pub fn end_ms(&self) -> Option<u64> {
        self.events.last().map(|e| e.t_ms)
    }

    pub fn read_csv<R: Read>(reader: R) -> Result<Self, TraceError> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(false).flexible(true).from_reader(reader);
        let mut trace = Trace::new();
        let mut index: HashMap<RecordKey, KeyId> = HashMap::new();
        let mut record = csv::StringRecord::new();
        let mut prev = 0u64;
        let mut line = 0u64;
        loop {
            let more = rdr.read_record(&mut record).map_err(|e| TraceError::Line {
                line: e.position().map_or(line + 1, |p| p.line()),
                kind: LineError::Csv(e.to_string()),
            })?;
            if !more {
                break;
            }
            line = record.position().map_or(line + 1, |p| p.line());
            if line == 1 {
                if record.iter().ne(TRACE_HEADER) {
                    return Err(TraceError::Header);
                }
                continue;
            }
            let fail = |kind| TraceError::Line { line, kind };
            if record.len() != 4 {
                return Err(fail(LineError::FieldCount(record.len())));
            }
            let t_ms: u64 = record[0].parse().map_err(|_| fail(LineError::Time(record[0].to_string())))?;
            let client: u32 = record[1].parse().map_err(|_| fail(LineError::Client(record[1].to_string())))?;
            let name = DomainName::parse(&record[2])
                .map_err(|err| fail(LineError::Name { name: record[2].to_string(), err }))?;
            let qtype = match &record[3] {
                "A" => QType::A,
                "AAAA" => QType::Aaaa,
                other => return Err(fail(LineError::UnsupportedType(other.to_string()))),
            };
            if t_ms < prev {
                return Err(TraceError::Unsorted { line, t_ms, prev_ms: prev });
            }
            prev = t_ms;
            let key = RecordKey::new(name, qtype);
            let next = KeyId(trace.keys.len() as u32);
            let id = *index.entry(key).or_insert_with_key(|k| {
                trace.keys.push(k.clone());
                next
            });
            trace.events.push(TraceEvent { t_ms, client: ClientId(client), key: id });
        }
        if line == 0 {
            return Err(TraceError::Header);
        }
        Ok(trace)
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> io::Result<()> {
        let mut w = BufWriter::new(writer);
        writeln!(w, "{}", TRACE_HEADER.join(","))?;
        for e in &self.events {
            let key = self.key(e.key);
            writeln!(w, "{},{},{},{}", e.t_ms, e.client.0, key.name, key.qtype)?;
        }
        w.flush()
    }
}

pub fn load_trace(path: &Path) -> Result<Trace, TraceError> {
    let file = File::open(path).map_err(|source| TraceError::Io { path: path.display().to_string(), source })?;
    Trace::read_csv(io::BufReader::new(file))
}

pub fn write_trace(trace: &Trace, path: &Path) -> io::Result<()> {
    trace.write_csv(File::create(path)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenParams {
    pub clients: u32,
    pub duration_s: u64,
    /// Mean queries per client per hour.
    pub rate: f64,
    pub zipf_s: f64,
    pub universe: Universe,
    pub seed: u64,
}

impl Default for GenParams {
    fn default() -> Self {
        Self { clients: 2000, duration_s: 10 * 86_400, rate: 10.0, zipf_s: 1.0, universe: Universe::default(), seed: 42 }
    }
}

/// Each client issues queries as a Poisson process; each query names the
/// domain at a Zipf-distributed popularity rank, queried with the domain's
/// record type.
pub fn gen_trace(params: &GenParams) -> Trace {
    assert!(params.clients > 0 && params.duration_s > 0, "clients and duration must be positive");
    assert!(params.rate > 0.0 && params.zipf_s > 0.0, "rate and zipf exponent must be positive");
    assert!(params.universe.size > 0, "universe must be non-empty");
    let end_ms = params.duration_s * 1000;
    let gap = Exp::new(params.rate / 3_600_000.0).expect("positive rate");
    let zipf = Zipf::new(params.universe.size, params.zipf_s).expect("valid zipf parameters");
    let mut raw: Vec<(u64, u32, u64)> = Vec::new();
    for client in 0..params.clients {
        let mut rng = ChaCha8Rng::seed_from_u64(mix64(params.seed ^ mix64(u64::from(client))));
        let mut t = 0.0f64;
        loop {
            t += gap.sample(&mut rng);
            let t_ms = t as u64;
            if t_ms >= end_ms {
                break;
            }
            let rank = zipf.sample(&mut rng) as u64;
            raw.push((t_ms, client, rank.clamp(1, params.universe.size) - 1));
        }
    }
    raw.sort_unstable();

    let mut trace = Trace::new();
    let mut index: HashMap<u64, KeyId> = HashMap::new();
    trace.events.reserve(raw.len());
    for (t_ms, client, domain) in raw {
        let next = KeyId(trace.keys.len() as u32);
        let id = *index.entry(domain).or_insert_with(|| {
            trace.keys.push(params.universe.key(domain));
            next
        });
        trace.events.push(TraceEvent { t_ms, client: ClientId(client), key: id });
    }
    trace
}

impl Trace {
    /// Builds a trace from explicit events, which must be time-sorted.
    pub fn from_events<I>(events: I) -> Result<Self, TraceError>
    where
        I: IntoIterator<Item = (u64, ClientId, RecordKey)>,
    {
        let mut trace = Trace::new();
        let mut index: HashMap<RecordKey, KeyId> = HashMap::new();
        let mut prev = 0;
        for (i, (t_ms, client, key)) in events.into_iter().enumerate() {
            if t_ms < prev {
                return Err(TraceError::Unsorted { line: i as u64 + 2, t_ms, prev_ms: prev });
            }
            prev = t_ms;
            let next = KeyId(trace.keys.len() as u32);
            let id = *index.entry(key).or_insert_with_key(|k| {
                trace.keys.push(k.clone());
                next
            });
            trace.events.push(TraceEvent { t_ms, client, key: id });
        }
        Ok(trace)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> GenParams {
        GenParams {
            clients: 5,
            duration_s: 7200,
            rate: 20.0,
            universe: Universe { size: 1000, ..Universe::default() },
            ..GenParams::default()
        }
    }

    #[test]
    fn empty_file_with_header() {
        let t = Trace::read_csv("t_ms,client_id,qname,qtype\n".as_bytes()).unwrap();
        assert!(t.is_empty());
    }

    #[test]
    fn line_errors_carry_line_numbers() {
        let mx = "t_ms,client_id,qname,qtype\n1,0,a.com,A\n2,0,b.com,MX\n";
        let err = Trace::read_csv(mx.as_bytes()).unwrap_err();
        assert!(matches!(&err, TraceError::Line { line: 3, kind: LineError::UnsupportedType(t) } if t == "MX"), "{err}");
        let unsorted = "t_ms,client_id,qname,qtype\n5,0,a.com,A\n4,1,a.com,A\n";
        assert!(matches!(Trace::read_csv(unsorted.as_bytes()), Err(TraceError::Unsorted { line: 3, .. })));
        let bad_time = "t_ms,client_id,qname,qtype\nx,0,a.com,A\n";
        assert_eq!(Trace::read_csv(bad_time.as_bytes()).unwrap_err().line(), Some(2));
        assert!(matches!(Trace::read_csv("".as_bytes()), Err(TraceError::Header)));
        assert!(matches!(Trace::read_csv("a,b,c,d\n".as_bytes()), Err(TraceError::Header)));
        let fields = "t_ms,client_id,qname,qtype\n1,0,a.com\n";
        assert!(matches!(
            Trace::read_csv(fields.as_bytes()),
            Err(TraceError::Line { line: 2, kind: LineError::FieldCount(3) })
        ));
    }

    #[test]
    fn generator_is_deterministic_and_round_trips() {
        let a = gen_trace(&small());
        let b = gen_trace(&small());
        assert_eq!(a, b);
        assert!(a.events().windows(2).all(|w| w[0].t_ms <= w[1].t_ms));
        let mut bytes = Vec::new();
        a.write_csv(&mut bytes).unwrap();
        let mut again = Vec::new();
        b.write_csv(&mut again).unwrap();
        assert_eq!(bytes, again);
        assert_eq!(Trace::read_csv(bytes.as_slice()).unwrap(), a);
    }
}
