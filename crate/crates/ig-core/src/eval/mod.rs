//! Three-layer judge evaluation over insight reports: union-gold
//! clustering, coverage against the cluster set, a position-swapped
//! pairwise tournament, and per-dimension rubric scoring with benchmark
//! aggregation.

pub mod aggregate;
pub mod cluster;
pub mod rubric;
pub mod tournament;

use thiserror::Error;

pub use aggregate::{benchmark_average, summary_table, BenchmarkSummary, RubricMeans};
pub use cluster::{coverage, pool_and_cluster, FindingPool, GoldCluster, GoldSet, MemberRef};
pub use rubric::{composite, rubric_score, rubric_scores, RubricScore};
pub use tournament::{
    head_to_head, judge_rounds, schedule_tournament, win_rate, PairwiseRound, RoundSlot, Winner,
};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Gateway(#[from] crate::gateway::GatewayError),
    #[error("judge output invalid after repair: {0}")]
    JudgeInvalid(String),
    #[error("need at least {need} {what} (got {got})")]
    NotEnough {
        what: &'static str,
        need: usize,
        got: usize,
    },
    #[error("unknown system '{0}' in rounds")]
    UnknownSystem(String),
}
