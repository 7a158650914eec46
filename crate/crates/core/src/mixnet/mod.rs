//! Client-operated mix network for anonymous vote submission.
//!
//! Clients wrap each vote in one sealed layer per shuffle round. The server
//! relays every batch, grouping onions by next hop, and checks that each
//! node emits exactly as many onions as it received.

pub mod adversary;
pub mod onion;
pub mod registry;
pub mod round;
pub mod seal;

pub use adversary::{Attribution, LinkageAdversary};
pub use onion::{choose_path, decode_vote, encode_vote, node_shuffle, peel, wrap_vote, Hop, MixPath, Onion, Peeled, PeelError, WrapError, MAX_HOPS, PAD_SIZE};
pub use registry::{register_client, Certificate, CertificateAuthority, Registry, RegistryError};
pub use round::{
    run_voting_round, server_route, LedgerMismatch, LedgerPolicy, Misbehavior, MixConfig, MixNetwork, NodeCounts,
    RoundError, RoundLedger, RoundOutcome, Transcript,
};
pub use seal::{seal, CipherSuite, MixKeyPair, PublicKey, SealError};
