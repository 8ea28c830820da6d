//! Training objective of the detector: target assignment, the YOLO loss and
//! anchor-prior clustering.

mod gradcheck;
mod kmeans;
mod loss;
mod targets;

pub use gradcheck::network_gradcheck;
pub use kmeans::{kmeans_anchors, kmeans_cost, KMeansFit, KMEANS_MAX_ITERATIONS};
pub use loss::{freeze_objectness, loss_and_grad, yolo_loss, LossBreakdown, LossConfig};
pub use targets::{
    assign_targets, assign_with_geometry, SlotTarget, TargetGrid, NOOBJ_IOU_THRESHOLD,
};
