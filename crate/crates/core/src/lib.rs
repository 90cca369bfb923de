//! Two-party randomness on a simulated UTXO ledger: commitment chains,
//! a key-reveal covenant, the interactive OP_RAND emulation, the thimbles
//! game and the state-trace commitment tree.

pub mod commitments;
pub mod fairness;
pub mod group;
pub mod ledger;
pub mod proofs;
pub mod protocol;
pub mod session_net;
pub mod statetrace;
pub mod transcript;
