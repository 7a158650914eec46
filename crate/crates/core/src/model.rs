//! DNS vocabulary shared by every other module: names, record keys, answers,
//! TTLs and client identities.

use std::cmp::Ordering;
use std::fmt;
use std::net::{Ipv4Addr, Ipv6Addr};
use std::str::FromStr;

use thiserror::Error;

/// Longest permitted label, in bytes.
pub const MAX_LABEL_LEN: usize = 63;
/// Longest permitted name in presentation form (no trailing dot), in bytes.
pub const MAX_NAME_LEN: usize = 253;

/// Internal label separator. Sorts below every byte a label may contain, so
/// byte order over the packed form equals label-wise order.
const SEP: u8 = 0;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum NameError {
    #[error("empty domain name")]
    Empty,
    #[error("empty label in domain name")]
    EmptyLabel,
    #[error("label of {0} bytes exceeds 63")]
    LabelTooLong(usize),
    #[error("name of {0} bytes exceeds 253")]
    NameTooLong(usize),
    #[error("byte 0x{0:02x} is not permitted in a domain name")]
    NonAscii(u8),
}

/// A normalized domain name, stored root-first ("www.example.com" is kept as
/// `com`, `example`, `www`).
///
/// Labels are packed into one buffer separated by a NUL byte. Ordering is
/// lexicographic over the root-first label sequence.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct DomainName {
    packed: Box<[u8]>,
}

impl DomainName {
    /// Parses a presentation-form name, lowercasing it and stripping one
    /// trailing dot.
    pub fn parse(text: &str) -> Result<Self, NameError> {
        let text = text.strip_suffix('.').unwrap_or(text);
        if text.is_empty() {
            return Err(NameError::Empty);
        }
        if let Some(b) = text.bytes().find(|b| !b.is_ascii_graphic()) {
            return Err(NameError::NonAscii(b));
        }
        if text.len() > MAX_NAME_LEN {
            return Err(NameError::NameTooLong(text.len()));
        }
        let labels: Vec<&str> = text.split('.').collect();
        for label in &labels {
            if label.is_empty() {
                return Err(NameError::EmptyLabel);
            }
            if label.len() > MAX_LABEL_LEN {
                return Err(NameError::LabelTooLong(label.len()));
            }
        }
        let mut packed = Vec::with_capacity(text.len());
        for (i, label) in labels.iter().rev().enumerate() {
            if i > 0 {
                packed.push(SEP);
            }
            packed.extend(label.bytes().map(|b| b.to_ascii_lowercase()));
        }
        Ok(Self { packed: packed.into_boxed_slice() })
    }

    /// Builds a name from root-first labels, validating each one.
    pub fn from_root_labels<I, L>(labels: I) -> Result<Self, NameError>
    where
        I: IntoIterator<Item = L>,
        L: AsRef<[u8]>,
    {
        let mut packed = Vec::new();
        let mut total = 0usize;
        let mut count = 0usize;
        for label in labels {
            let label = label.as_ref();
            if label.is_empty() {
                return Err(NameError::EmptyLabel);
            }
            if label.len() > MAX_LABEL_LEN {
                return Err(NameError::LabelTooLong(label.len()));
            }
            if let Some(&b) = label.iter().find(|b| !b.is_ascii_graphic() || **b == b'.') {
                return Err(NameError::NonAscii(b));
            }
            if count > 0 {
                packed.push(SEP);
            }
            packed.extend(label.iter().map(|b| b.to_ascii_lowercase()));
            total += label.len();
            count += 1;
        }
        if count == 0 {
            return Err(NameError::Empty);
        }
        let presented = total + count - 1;
        if presented > MAX_NAME_LEN {
            return Err(NameError::NameTooLong(presented));
        }
        Ok(Self { packed: packed.into_boxed_slice() })
    }

    /// Root-first label iterator.
    pub fn labels(&self) -> impl DoubleEndedIterator<Item = &[u8]> + Clone + '_ {
        self.packed.split(|b| *b == SEP)
    }

    pub fn label_count(&self) -> usize {
        self.packed.iter().filter(|b| **b == SEP).count() + 1
    }

    /// Length of the presentation form.
    pub fn presentation_len(&self) -> usize {
        self.packed.len()
    }

    /// Dot-joined presentation form without a trailing dot.
    pub fn present(&self) -> String {
        let mut out = String::with_capacity(self.packed.len());
        for (i, label) in self.labels().rev().enumerate() {
            if i > 0 {
                out.push('.');
            }
            // Labels are validated ASCII.
            out.push_str(std::str::from_utf8(label).expect("ascii label"));
        }
        out
    }
}

impl Ord for DomainName {
    fn cmp(&self, other: &Self) -> Ordering {
        self.packed.cmp(&other.packed)
    }
}

impl PartialOrd for DomainName {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl fmt::Display for DomainName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.present())
    }
}

impl fmt::Debug for DomainName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "DomainName({})", self.present())
    }
}

impl FromStr for DomainName {
    type Err = NameError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::parse(s)
    }
}

/// Free-function form of [`DomainName::parse`].
pub fn parse_domain(text: &str) -> Result<DomainName, NameError> {
    DomainName::parse(text)
}

/// Free-function form of [`DomainName::present`].
pub fn present_domain(name: &DomainName) -> String {
    name.present()
}

/// Supported record types. The discriminant is the wire code.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[repr(u8)]
pub enum QType {
    A = 1,
    Aaaa = 2,
    Cname = 3,
}

impl QType {
    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            1 => Some(QType::A),
            2 => Some(QType::Aaaa),
            3 => Some(QType::Cname),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            QType::A => "A",
            QType::Aaaa => "AAAA",
            QType::Cname => "CNAME",
        }
    }
}

impl fmt::Display for QType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("unsupported record type {0:?}")]
pub struct UnsupportedType(pub String);

impl FromStr for QType {
    type Err = UnsupportedType;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_uppercase().as_str() {
            "A" => Ok(QType::A),
            "AAAA" => Ok(QType::Aaaa),
            "CNAME" => Ok(QType::Cname),
            _ => Err(UnsupportedType(s.to_string())),
        }
    }
}

/// Identity of a record in the list: owner name plus query type.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct RecordKey {
    pub name: DomainName,
    pub qtype: QType,
}

impl RecordKey {
    pub fn new(name: DomainName, qtype: QType) -> Self {
        Self { name, qtype }
    }

    /// Whether `answer` may be stored under this key. Address keys also
    /// accept an alias, which is how a CNAME chain head is represented.
    pub fn accepts(&self, answer: &RecordAnswer) -> bool {
        matches!(
            (self.qtype, answer),
            (QType::A, RecordAnswer::A(_))
                | (QType::Aaaa, RecordAnswer::Aaaa(_))
                | (_, RecordAnswer::Cname(_))
        )
    }
}

impl fmt::Display for RecordKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {}", self.name, self.qtype)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum RecordAnswer {
    A(Ipv4Addr),
    Aaaa(Ipv6Addr),
    Cname(DomainName),
}

impl RecordAnswer {
    /// Pool/wire tag: 1 = A, 2 = AAAA, 3 = CNAME.
    pub fn tag(&self) -> u8 {
        match self {
            RecordAnswer::A(_) => 1,
            RecordAnswer::Aaaa(_) => 2,
            RecordAnswer::Cname(_) => 3,
        }
    }

    pub fn cname_target(&self) -> Option<&DomainName> {
        match self {
            RecordAnswer::Cname(target) => Some(target),
            _ => None,
        }
    }
}

impl fmt::Display for RecordAnswer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RecordAnswer::A(ip) => write!(f, "{ip}"),
            RecordAnswer::Aaaa(ip) => write!(f, "{ip}"),
            RecordAnswer::Cname(name) => write!(f, "{name}"),
        }
    }
}

/// A record TTL in seconds; never zero.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Ttl(u32);

impl Ttl {
    pub const fn new(secs: u32) -> Option<Self> {
        if secs == 0 {
            None
        } else {
            Some(Self(secs))
        }
    }

    pub const fn secs(self) -> u32 {
        self.0
    }

    pub fn millis(self) -> u64 {
        u64::from(self.0) * 1000
    }
}

impl fmt::Display for Ttl {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}s", self.0)
    }
}

/// Identity assigned to a client at registration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ClientId(pub u32);

impl fmt::Display for ClientId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "client#{}", self.0)
    }
}
