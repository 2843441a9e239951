//! Temporal context parallelism for causal convolutions.
//!
//! Ranks own contiguous frame ranges. Before each causal conv, rank `r`
//! receives the trailing `kt − 1` frames of rank `r − 1`'s padded input
//! stream and uses them in place of zero padding; it forwards its own
//! trailing frames to `r + 1`. Halos only travel forward in time.

pub mod bus;
pub mod exec;
pub mod plan;

pub use bus::{Bus, HaloMeta, HaloMsg, LayerStat, MessageLog};
pub use exec::{
    causal_conv_parallel, comm_report, decode_parallel, encode_parallel, run_ranks, CommReport, ExecMode,
    LayerComm, ParallelEncode, RankContext,
};
pub use plan::{split, split_latent, RankPlan};
