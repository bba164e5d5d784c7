//! Self-supervised objectives: clip-level contrastive learning for the
//! backbone and event-level mask prediction for the contextualizer.

pub mod contrastive;
pub mod mask;
pub mod txe_train;

pub use contrastive::{augment_view, augment_views, info_nce, pretrain_backbone, AugmentStrengths, ContrastiveConfig};
pub use mask::{
    discrepancies, discrepancy, mask_pred_l2_loss, mask_pred_loss, max_discrepancy_start, max_mask_size,
    sample_mask_max_discrepancy, sample_mask_uniform, DistractorQueue, MaskPlan,
};
pub use txe_train::{
    continue_pretrain_txe, event_targets, pretrain_txe, window_tokens, MaskLoss, MaskPretrainConfig, MaskSampler,
    StepMetrics,
};
