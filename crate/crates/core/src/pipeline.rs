//! Per-image analysis (cost matrix, assignment, classification) and its batch
//! form. With the `parallel` feature, batches are spread over the rayon pool;
//! results always come back in input order.

use serde::{Deserialize, Serialize};

use crate::assignment::optimal_assignment;
use crate::classify::{classify, AnnotatedObject, ClassSet, ClassifyContext, ClassifyError, FailureReport, PredictedObject, Thresholds};
use crate::geometry::{build_cost_matrix, LabeledBox, MatchWeights};

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct AnalysisConfig {
    #[serde(default)]
    pub weights: MatchWeights,
    #[serde(default)]
    pub thresholds: Thresholds,
}

/// One image's expectations and predictions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageJob {
    pub context: ClassifyContext,
    pub annotations: Vec<AnnotatedObject>,
    pub predictions: Vec<PredictedObject>,
}

pub fn analyze_image(
    annotations: &[AnnotatedObject],
    predictions: &[PredictedObject],
    model_classes: Option<&ClassSet>,
    config: &AnalysisConfig,
    context: &ClassifyContext,
) -> Result<FailureReport, ClassifyError> {
    let anns: Vec<LabeledBox> = annotations.iter().map(|a| a.labeled.clone()).collect();
    let preds: Vec<LabeledBox> = predictions.iter().map(|p| p.labeled.clone()).collect();
    let assignment = optimal_assignment(&build_cost_matrix(&anns, &preds, &config.weights));
    classify(annotations, predictions, &assignment, model_classes, &config.thresholds, context)
}

fn analyze_job(job: &ImageJob, model_classes: Option<&ClassSet>, config: &AnalysisConfig) -> Result<FailureReport, ClassifyError> {
    analyze_image(&job.annotations, &job.predictions, model_classes, config, &job.context)
}

/// Analyzes every job, in parallel when the `parallel` feature is on.
pub fn analyze_batch(
    jobs: &[ImageJob],
    model_classes: Option<&ClassSet>,
    config: &AnalysisConfig,
) -> Vec<Result<FailureReport, ClassifyError>> {
    par::map(jobs, |job| analyze_job(job, model_classes, config))
}

/// Single-threaded reference for [`analyze_batch`].
pub fn analyze_batch_sequential(
    jobs: &[ImageJob],
    model_classes: Option<&ClassSet>,
    config: &AnalysisConfig,
) -> Vec<Result<FailureReport, ClassifyError>> {
    jobs.iter().map(|job| analyze_job(job, model_classes, config)).collect()
}

pub mod par {
    //! Order-preserving map over a slice.

    #[cfg(feature = "parallel")]
    pub fn map<T: Sync, R: Send>(items: &[T], f: impl Fn(&T) -> R + Sync + Send) -> Vec<R> {
        use rayon::prelude::*;
        items.par_iter().map(f).collect()
    }

    #[cfg(not(feature = "parallel"))]
    pub fn map<T: Sync, R: Send>(items: &[T], f: impl Fn(&T) -> R + Sync + Send) -> Vec<R> {
        items.iter().map(f).collect()
    }

    pub const fn is_parallel() -> bool {
        cfg!(feature = "parallel")
    }
}
