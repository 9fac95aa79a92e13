//! Client protocols: the quorum client and the single-server optimistic client.

mod dpo;
mod optimistic;

pub use dpo::{dpo_combine, rotation, DpoClient, DpoError, DpoGetResult};
pub use optimistic::{check_confirmation, Confirmation, OptimisticClient, Outcome, RetryPolicy};
