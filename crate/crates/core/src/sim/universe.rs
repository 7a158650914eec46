//! Synthetic domain universe and the upstream answers behind it.
//!
//! Domain `i` is named `{www,api,cdn,img}.site{i/4}.{com,net,org,io}`, so
//! names can be mapped back to their index. A fixed fraction of domains are
//! aliases pointing at another domain of the universe.

use std::net::{Ipv4Addr, Ipv6Addr};

use serde::{Deserialize, Serialize};

use crate::model::{DomainName, QType, RecordAnswer, RecordKey};

const PREFIXES: [&str; 4] = ["www", "api", "cdn", "img"];
const TLDS: [&str; 4] = ["com", "net", "org", "io"];

pub(crate) fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub(crate) fn hash2(a: u64, b: u64) -> u64 {
    mix64(a ^ mix64(b))
}

pub(crate) fn unit(h: u64) -> f64 {
    (h >> 11) as f64 / (1u64 << 53) as f64
}

/// Stable 64-bit hash of a record key.
pub fn key_hash(key: &RecordKey) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for label in key.name.labels() {
        for &b in label.iter().chain(std::iter::once(&b'.')) {
            h = (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3);
        }
    }
    mix64(h ^ u64::from(key.qtype.code()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Universe {
    pub size: u64,
    pub cname_fraction: f64,
    pub aaaa_fraction: f64,
    pub seed: u64,
}

impl Default for Universe {
    fn default() -> Self {
        Self { size: 1_000_000, cname_fraction: 0.1, aaaa_fraction: 0.25, seed: 0x5eed }
    }
}

impl Universe {
    pub fn name(&self, i: u64) -> DomainName {
        let site = i / 4;
        let text = format!("{}.site{site}.{}", PREFIXES[(i % 4) as usize], TLDS[(site % 4) as usize]);
        DomainName::parse(&text).expect("generated names are valid")
    }

    pub fn index_of(&self, name: &DomainName) -> Option<u64> {
        let labels: Vec<&[u8]> = name.labels().collect();
        let [tld, site, prefix] = labels[..] else { return None };
        let p = PREFIXES.iter().position(|x| x.as_bytes() == prefix)? as u64;
        let digits = site.strip_prefix(b"site")?;
        if digits.is_empty() || (digits.len() > 1 && digits[0] == b'0') {
            return None;
        }
        let site: u64 = std::str::from_utf8(digits).ok()?.parse().ok()?;
        if TLDS[(site % 4) as usize].as_bytes() != tld {
            return None;
        }
        let i = site.checked_mul(4)?.checked_add(p)?;
        (i < self.size).then_some(i)
    }

    /// The record type clients query for domain `i`.
    pub fn qtype(&self, i: u64) -> QType {
        if unit(hash2(self.seed ^ 0x71, i)) < self.aaaa_fraction {
            QType::Aaaa
        } else {
            QType::A
        }
    }

    pub fn key(&self, i: u64) -> RecordKey {
        RecordKey::new(self.name(i), self.qtype(i))
    }

    pub fn cname_target(&self, i: u64) -> Option<u64> {
        if self.size < 2 || unit(hash2(self.seed ^ 0xc4, i)) >= self.cname_fraction {
            return None;
        }
        let j = hash2(self.seed ^ 0x7a, i) % self.size;
        Some(if j == i { (j + 1) % self.size } else { j })
    }

    /// Alias answer for `key`, if its owner is an alias domain.
    pub fn alias(&self, key: &RecordKey) -> Option<RecordAnswer> {
        let i = self.index_of(&key.name)?;
        self.cname_target(i).map(|j| RecordAnswer::Cname(self.name(j)))
    }
}

/// Answer number `m` of the address record with hash `h`.
pub fn address_answer(h: u64, qtype: QType, m: u32) -> RecordAnswer {
    let bits = hash2(h, u64::from(m) + 1);
    match qtype {
        QType::Aaaa => {
            let low = u128::from(bits) | (u128::from(mix64(bits) & 0xffff_ffff) << 64);
            RecordAnswer::Aaaa(Ipv6Addr::from((0x2001_0db8u128 << 96) | low))
        }
        _ => RecordAnswer::A(Ipv4Addr::from((bits >> 32) as u32)),
    }
}
