//! Reference feature alignment, content-conditioned aggregation, and a
//! block-matching flow estimator.

mod cofa;
mod flow;
mod rfa;

pub use cofa::{
    aggregate_baseline, aggregate_baseline_vjp, cofa_aggregate, cofa_aggregate_vjp, similarity_score,
    similarity_score_vjp, AggregateGrads, AggregationMode, BaselineKind, CofaParams, SimilarityGrads,
};
pub use flow::{block_match_flow, BlockMatchParams, FlowField};
pub use rfa::{flow_cotangent, rfa_align, rfa_align_vjp, RfaGrads, RfaMode, RfaParams};
