//! Ground-truth reference implementations for the tape-machine pipeline.
//!
//! Nothing in this crate touches a tape: the forward pass is a plain
//! array-based transformer, counting is a direct character scan, the
//! centre-embedding oracle is a schema generator plus shape checker, and
//! the beam oracle is a straightforward list-based search. Structural
//! independence from the tape pipeline is enforced by the crate graph:
//! this crate depends on the shared model/numerics substrate only.

pub mod beam;
pub mod cfg;
pub mod count;
pub mod forward;

pub use beam::oracle_beam;
pub use cfg::{check_sentence, generate_sentence, walkthrough_sentence, GeneratedSentence};
pub use count::oracle_count;
pub use forward::{oracle_forward, oracle_forward_f64, oracle_prob_rows, OracleError};
