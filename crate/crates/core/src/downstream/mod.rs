//! Downstream evaluation: verb and relation probes, plus masked retrieval.

pub mod features;
pub mod metrics;
pub mod probe;
pub mod retrieval;

pub use features::{context_windows, contextual_features, pair_features, FeatureSource};
pub use metrics::{accuracy_at_k, macro_recall_at_k, mean_class_accuracy, top_k, MetricsReport};
pub use probe::{train_linear_probe, train_relation_end_to_end, LinearProbe, ProbeConfig};
pub use retrieval::{masked_retrieval_eval, RetrievalConfig, RetrievalResult};

use crate::error::Result;
use crate::tensor::Tensor;

/// Acc@1, Acc@5 and class-averaged Recall@5 of verb scores.
pub fn eval_verb(probe: &LinearProbe, features: &Tensor, labels: &[usize]) -> Result<MetricsReport> {
    let scores = probe.scores(features)?;
    Ok(MetricsReport::new("verb", labels.len())
        .with("acc@1", accuracy_at_k(&scores, labels, 1)?)
        .with("acc@5", accuracy_at_k(&scores, labels, 5)?)
        .with("recall@5", macro_recall_at_k(&scores, labels, 5)?))
}

/// Class-averaged accuracy and plain top-1 accuracy of relation scores.
pub fn eval_relation(probe: &LinearProbe, pair_features: &Tensor, labels: &[usize]) -> Result<MetricsReport> {
    let scores = probe.scores(pair_features)?;
    Ok(MetricsReport::new("relation", labels.len())
        .with("mean_acc", mean_class_accuracy(&scores, labels)?)
        .with("top1_acc", accuracy_at_k(&scores, labels, 1)?))
}
