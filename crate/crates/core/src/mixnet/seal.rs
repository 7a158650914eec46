//! Randomized sealing of onion layers.

use chacha20poly1305::aead::{Aead, KeyInit};
use chacha20poly1305::{ChaCha20Poly1305, Key, Nonce};
use rand::{CryptoRng, RngCore};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const KEY_SIZE: usize = 32;

/// Layer cipher. `X25519` is an anonymous public-key sealed box.
/// `Symmetric` uses the node key for both sealing and opening, so the
/// published key is the secret; it exists to make large simulations cheap
/// and gives no confidentiality.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum CipherSuite {
    #[default]
    X25519,
    Symmetric,
}

impl CipherSuite {
    /// Bytes added by one seal.
    pub const fn overhead(self) -> usize {
        match self {
            CipherSuite::X25519 => crypto_box::SEALBYTES,
            CipherSuite::Symmetric => 12 + 16,
        }
    }

    pub fn code(self) -> u8 {
        match self {
            CipherSuite::X25519 => 1,
            CipherSuite::Symmetric => 2,
        }
    }
}

impl std::str::FromStr for CipherSuite {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "x25519" => Ok(CipherSuite::X25519),
            "symmetric" => Ok(CipherSuite::Symmetric),
            other => Err(format!("unknown cipher suite {other:?} (expected x25519 or symmetric)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct PublicKey {
    pub suite: CipherSuite,
    pub bytes: [u8; KEY_SIZE],
}

#[derive(Clone)]
pub struct MixKeyPair {
    public: PublicKey,
    secret: [u8; KEY_SIZE],
}

impl std::fmt::Debug for MixKeyPair {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MixKeyPair").field("public", &self.public).finish_non_exhaustive()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SealError {
    #[error("layer failed to open")]
    OpenFailed,
}

impl MixKeyPair {
    pub fn generate<G: RngCore + CryptoRng>(suite: CipherSuite, rng: &mut G) -> Self {
        let mut secret = [0u8; KEY_SIZE];
        rng.fill_bytes(&mut secret);
        let bytes = match suite {
            CipherSuite::X25519 => *crypto_box::SecretKey::from_bytes(secret).public_key().as_bytes(),
            CipherSuite::Symmetric => secret,
        };
        Self { public: PublicKey { suite, bytes }, secret }
    }

    pub fn public(&self) -> &PublicKey {
        &self.public
    }

    pub fn open(&self, sealed: &[u8]) -> Result<Vec<u8>, SealError> {
        match self.public.suite {
            CipherSuite::X25519 => crypto_box::SecretKey::from_bytes(self.secret)
                .unseal(sealed)
                .map_err(|_| SealError::OpenFailed),
            CipherSuite::Symmetric => {
                if sealed.len() < 12 {
                    return Err(SealError::OpenFailed);
                }
                let (nonce, body) = sealed.split_at(12);
                ChaCha20Poly1305::new(Key::from_slice(&self.secret))
                    .decrypt(Nonce::from_slice(nonce), body)
                    .map_err(|_| SealError::OpenFailed)
            }
        }
    }
}

pub fn seal<G: RngCore + CryptoRng>(key: &PublicKey, plaintext: &[u8], rng: &mut G) -> Vec<u8> {
    match key.suite {
        CipherSuite::X25519 => crypto_box::PublicKey::from_bytes(key.bytes)
            .seal(rng, plaintext)
            .expect("sealing in memory cannot fail"),
        CipherSuite::Symmetric => {
            let mut out = vec![0u8; 12];
            rng.fill_bytes(&mut out);
            let body = ChaCha20Poly1305::new(Key::from_slice(&key.bytes))
                .encrypt(Nonce::from_slice(&out), plaintext)
                .expect("sealing in memory cannot fail");
            out.extend_from_slice(&body);
            out
        }
    }
}
