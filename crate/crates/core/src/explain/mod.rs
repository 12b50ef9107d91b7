//! Object-aware multiple-instance classification and its explanations.
//!
//! Slides are bags of patches. A frozen extractor turns each patch into a feature
//! vector, either by plain average pooling or by masked pooling per object. An
//! attention aggregator per object pools the bag, a bias-free linear layer
//! classifies the mean of the object features, and the explanations read
//! activations (CAM) or perturbation losses (importance) off that structure.

pub mod cam;
pub mod features;
pub mod importance;
pub mod mil;

pub use cam::{object_cam, paint_object_cam, paint_patch_cam, patch_cam, ObjectActivation};
pub use features::{
    masked_avg_pool, object_features, slide_features, spatial_avg_pool, FeatureExtractor,
    ObjectMasks, PooledFeature, Slide, OTHER_OBJECT,
};
pub use importance::{
    blur_region, feature_importance, gaussian_blur, importance_from_losses, Importance,
    ObjectImportance, DEFAULT_BLUR_RADIUS, LOSS_FLOOR,
};
pub use mil::{
    class_logits, classify, cross_entropy, mil_aggregate, train_mil, train_standard,
    AttentionPool, MilBag, MilConfig, MilModel, MilOutput, SLIDE_OBJECT,
};

use thiserror::Error;

use crate::model::ModelError;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ExplainError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("empty bag")]
    EmptyBag,
    #[error("missing object masks: {0}")]
    MissingObjectMasks(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Per-object bags for every slide; `objects[s]` are slide `s`'s masks without
/// the "other" object, which is appended here.
pub fn object_bags(
    extractor: &FeatureExtractor,
    slides: &[Slide],
    objects: &[ObjectMasks],
) -> Result<(Vec<String>, Vec<MilBag>), ExplainError> {
    if slides.len() != objects.len() {
        return Err(ExplainError::MissingObjectMasks(format!(
            "{} slides but {} mask sets",
            slides.len(),
            objects.len()
        )));
    }
    let mut labels: Option<Vec<String>> = None;
    let mut bags = Vec::with_capacity(slides.len());
    for (slide, masks) in slides.iter().zip(objects) {
        let masks = masks.clone().with_other()?;
        match &labels {
            Some(l) if *l != masks.labels => {
                return Err(ExplainError::MissingObjectMasks(format!("object lists differ: {l:?} vs {:?}", masks.labels)))
            }
            Some(_) => {}
            None => labels = Some(masks.labels.clone()),
        }
        bags.push(MilBag {
            objects: object_features(extractor, slide, &masks)?,
            label: slide.label,
        });
    }
    Ok((labels.ok_or(ExplainError::EmptyBag)?, bags))
}

/// Builds object bags and trains the object-aware classifier on them.
pub fn build_object_model(
    extractor: &FeatureExtractor,
    slides: &[Slide],
    objects: &[ObjectMasks],
    classes: usize,
    cfg: &MilConfig,
) -> Result<(MilModel, Vec<f64>), ExplainError> {
    let (labels, bags) = object_bags(extractor, slides, objects)?;
    train_mil(&bags, labels, classes, cfg)
}
