use serde::{Deserialize, Serialize};

use super::{Category, MllmError, RefinedResponse, Space};
use crate::privacy::{crop_metrics, BBox, CropTrial};

/// Growth factor of the target box inside which a pixel placement counts.
pub const PLACEMENT_BOX_SCALE: f64 = 1.5;

/// What a correct refined response must contain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ExpectedPlacement {
    /// Prefab name for creations, action type for animations.
    pub name: String,
    pub space: Space,
    pub target: BBox,
}

/// Name match (case-insensitive), pixel space, and (x, y) inside the
/// target box scaled by 1.5 about its center, boundary included.
pub fn evaluate_refined(response: &RefinedResponse, expected: &ExpectedPlacement) -> bool {
    let (name, space, pos) = match response {
        RefinedResponse::ObjectCreation(o) => (&o.prefab_name, o.space, o.position),
        RefinedResponse::AnimationCreation(a) => (&a.action_type, a.space, a.position),
        RefinedResponse::SceneQueryAnswer(_) => return false,
    };
    name.eq_ignore_ascii_case(&expected.name)
        && space == Space::Pixel
        && space == expected.space
        && expected.target.scaled(PLACEMENT_BOX_SCALE).contains(pos[0], pos[1])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct CategoryTrial {
    pub expected: Category,
    pub got: Category,
}

pub fn classification_accuracy(trials: &[CategoryTrial]) -> Result<f64, MllmError> {
    if trials.is_empty() {
        return Err(MllmError::Metric("no trials".into()));
    }
    let hits = trials.iter().filter(|t| t.expected == t.got).count();
    Ok(hits as f64 / trials.len() as f64)
}

/// Accumulates one model's results over repeated request sets.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ModelEvaluation {
    pub categories: Vec<CategoryTrial>,
    pub crops: Vec<CropTrial>,
    pub generation_times: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ModelScores {
    pub model: String,
    pub classification_accuracy: f64,
    pub crop_recall: f64,
    pub crop_fallout: f64,
    pub generation_time_mean: f64,
    pub generation_time_std: f64,
    pub trials: usize,
}

/// Sample mean and standard deviation (n - 1); std is 0 for one sample.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() == 1 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

impl ModelEvaluation {
    pub fn record(&mut self, category: CategoryTrial, crop: CropTrial, generation_time: f64) {
        self.categories.push(category);
        self.crops.push(crop);
        self.generation_times.push(generation_time);
    }

    pub fn scores(&self, model: &str) -> Result<ModelScores, MllmError> {
        let ca = classification_accuracy(&self.categories)?;
        let cm = crop_metrics(&self.crops).map_err(|e| MllmError::Metric(e.to_string()))?;
        let (gt, gs) = mean_std(&self.generation_times);
        Ok(ModelScores {
            model: model.to_owned(),
            classification_accuracy: ca,
            crop_recall: cm.crop_recall,
            crop_fallout: cm.crop_fallout,
            generation_time_mean: gt,
            generation_time_std: gs,
            trials: self.categories.len(),
        })
    }
}
