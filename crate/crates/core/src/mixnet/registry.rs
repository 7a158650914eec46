//! Credential-bound client registration.

use std::collections::{BTreeMap, HashSet};

use ed25519_dalek::{Signature, Signer, SigningKey, Verifier, VerifyingKey};
use rand::{CryptoRng, RngCore};
use sha2::{Digest, Sha256};
use thiserror::Error;

use super::seal::{CipherSuite, PublicKey};
use crate::model::ClientId;

/// Binds a mix key to the hash of a registration credential.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Certificate {
    pub key: PublicKey,
    pub credential_hash: [u8; 32],
    pub signature: [u8; 64],
}

fn credential_hash(credential: &[u8]) -> [u8; 32] {
    Sha256::digest(credential).into()
}

fn signed_bytes(key: &PublicKey, credential_hash: &[u8; 32]) -> Vec<u8> {
    let mut msg = Vec::with_capacity(1 + 32 + 32 + 8);
    msg.extend_from_slice(b"popcert1");
    msg.push(key.suite.code());
    msg.extend_from_slice(&key.bytes);
    msg.extend_from_slice(credential_hash);
    msg
}

pub struct CertificateAuthority {
    signing: SigningKey,
}

impl CertificateAuthority {
    pub fn generate<G: RngCore + CryptoRng>(rng: &mut G) -> Self {
        let mut seed = [0u8; 32];
        rng.fill_bytes(&mut seed);
        Self { signing: SigningKey::from_bytes(&seed) }
    }

    pub fn verifying_key(&self) -> VerifyingKey {
        self.signing.verifying_key()
    }

    pub fn issue(&self, credential: &[u8], key: &PublicKey) -> Certificate {
        let credential_hash = credential_hash(credential);
        let signature = self.signing.sign(&signed_bytes(key, &credential_hash)).to_bytes();
        Certificate { key: *key, credential_hash, signature }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RegistryError {
    #[error("credential already registered")]
    DuplicateCredential,
    #[error("certificate does not verify")]
    InvalidCertificate,
    #[error("certificate uses cipher suite {found:?}, network uses {expected:?}")]
    WrongSuite { expected: CipherSuite, found: CipherSuite },
}

#[derive(Debug, Clone)]
pub struct Registry {
    ca: VerifyingKey,
    suite: CipherSuite,
    clients: BTreeMap<ClientId, PublicKey>,
    credentials: HashSet<[u8; 32]>,
}

impl Registry {
    pub fn new(ca: VerifyingKey, suite: CipherSuite) -> Self {
        Self { ca, suite, clients: BTreeMap::new(), credentials: HashSet::new() }
    }

    pub fn suite(&self) -> CipherSuite {
        self.suite
    }

    /// Verifies the certificate against the presented credential and assigns
    /// the next client id.
    pub fn register_client(&mut self, credential: &[u8], cert: &Certificate) -> Result<ClientId, RegistryError> {
        let hash = credential_hash(credential);
        if hash != cert.credential_hash {
            return Err(RegistryError::InvalidCertificate);
        }
        let sig = Signature::from_bytes(&cert.signature);
        self.ca
            .verify(&signed_bytes(&cert.key, &hash), &sig)
            .map_err(|_| RegistryError::InvalidCertificate)?;
        if cert.key.suite != self.suite {
            return Err(RegistryError::WrongSuite { expected: self.suite, found: cert.key.suite });
        }
        if !self.credentials.insert(hash) {
            return Err(RegistryError::DuplicateCredential);
        }
        let id = ClientId(self.clients.len() as u32);
        self.clients.insert(id, cert.key);
        Ok(id)
    }

    pub fn key(&self, id: ClientId) -> Option<&PublicKey> {
        self.clients.get(&id)
    }

    pub fn contains(&self, id: ClientId) -> bool {
        self.clients.contains_key(&id)
    }

    pub fn ids(&self) -> impl Iterator<Item = ClientId> + '_ {
        self.clients.keys().copied()
    }

    pub fn len(&self) -> usize {
        self.clients.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clients.is_empty()
    }
}

pub fn register_client(registry: &mut Registry, credential: &[u8], cert: &Certificate) -> Result<ClientId, RegistryError> {
    registry.register_client(credential, cert)
}
