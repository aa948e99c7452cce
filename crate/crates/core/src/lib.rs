//! Core state machine for a decentralized cloud: a token ledger with
//! collateral and staking, a hardware registry, greedy resource
//! composition, KPI enforcement with Merkle-committed performance reports,
//! and per-epoch economic settlement — all deterministic and exact.

pub mod canonical;
pub mod composition;
pub mod economics;
pub mod enforcement;
pub mod ledger;
pub mod merkle;
pub mod protocol;
pub mod registry;
pub mod rng;
pub mod types;

pub use protocol::{Protocol, ProtocolError, ProtocolParams, ESCROW_ACCOUNT};
pub use types::{Epoch, Rational, TokenAmount};
