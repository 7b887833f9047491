//! Core library: crypto, ledger, proposals, agreement, transactions,
//! the transaction algebra, negotiation mechanisms, privacy tools and a
//! deterministic network simulator.

pub mod agreement;
pub mod crypto;
pub mod encoding;
pub mod ledger;
pub mod mechanisms;
pub mod netsim;
pub mod privacy;
pub mod proposals;
pub mod transactions;
pub mod txalgebra;
