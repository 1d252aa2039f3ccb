//! The trainable detector: center-heatmap localization, extreme-point
//! contour initialization and iterative contour deformation, all as
//! linear / logistic heads over fixed features.

pub mod features;
mod model;
pub mod oracle;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{BBox, GeometryError, Polygon};
use crate::scene::{ImageRecord, SceneImage};
use crate::scalar::Scalar;

pub use model::{
    gradient_check, objective, prepare_batch, pretrain_loose_augmentation, GradCheck, LossBreakdown, ParamGrad,
    PreparedBatch, TrainInstance, TrainRecord, DEFORM_CLAMP, OUTPUT_EXTENT,
};
pub use oracle::{oracle_detector, NoiseSpec, OracleLabeler, ScoreModel};

/// Number of deformation iterations (and weight blocks).
pub const DEFORM_ITERATIONS: usize = 3;

/// A detected instance: box, outline and confidence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate<T: Scalar = f64> {
    pub bbox: BBox<T>,
    pub polygon: Polygon<T>,
    pub score: T,
}

#[derive(Debug, Error)]
pub enum DetectorError {
    #[error("geometry: {0}")]
    Geometry(#[from] GeometryError),
    #[error("non-finite loss")]
    NonFiniteLoss,
    #[error("confidence {0} outside [0, 1]")]
    InvalidConfidence(f64),
    #[error("feature dimension mismatch: model expects {expected}, image has {found}")]
    FeatureDim { expected: usize, found: usize },
    #[error("invalid detector state: {0}")]
    InvalidState(String),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

/// Weights of the composite loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    /// Contour initialization weight.
    pub lambda1: f64,
    /// Contour deformation weight.
    pub lambda2: f64,
    pub focal_gamma: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda1: 1.0,
            lambda2: 1.0,
            focal_gamma: 2.0,
        }
    }
}

/// Per-head learning-rate multipliers. The localization and size heads see
/// far fewer, larger-magnitude inputs than the contour heads.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HeadRates {
    pub loc: f64,
    pub size: f64,
    pub init: f64,
    pub deform: f64,
}

impl Default for HeadRates {
    fn default() -> Self {
        Self {
            loc: 0.2,
            size: 0.2,
            init: 0.05,
            deform: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorConfig {
    pub feature_dim: usize,
    pub loss: LossConfig,
    /// Randomly enlarge training boxes before contour initialization.
    pub loose_augmentation: bool,
    /// Active deformation iterations (1..=3).
    pub deform_iterations: usize,
    pub head_rates: HeadRates,
    /// Relative std of the centre and log-size noise added to training
    /// boxes before contour initialization; 0 disables it.
    #[serde(default)]
    pub box_jitter: f64,
    /// Seed for training-time box augmentation.
    pub aug_seed: u64,
    pub input_norm: features::InputNorm,
}

impl DetectorConfig {
    pub fn new(feature_dim: usize) -> Self {
        Self {
            feature_dim,
            loss: LossConfig::default(),
            loose_augmentation: false,
            deform_iterations: DEFORM_ITERATIONS,
            head_rates: HeadRates::default(),
            box_jitter: 0.0,
            aug_seed: 0,
            input_norm: features::InputNorm::identity(feature_dim),
        }
    }

    pub fn validate(&self) -> Result<(), DetectorError> {
        let l = &self.loss;
        if !(l.lambda1 > 0.0 && l.lambda2 > 0.0 && l.lambda1.is_finite() && l.lambda2.is_finite()) {
            return Err(DetectorError::InvalidState("lambda1 and lambda2 must be positive".into()));
        }
        if !(l.focal_gamma >= 0.0 && l.focal_gamma.is_finite()) {
            return Err(DetectorError::InvalidState("focal_gamma must be non-negative".into()));
        }
        if !(1..=DEFORM_ITERATIONS).contains(&self.deform_iterations) {
            return Err(DetectorError::InvalidState(format!(
                "deform_iterations must be in 1..={DEFORM_ITERATIONS}"
            )));
        }
        if !(0.0..0.5).contains(&self.box_jitter) {
            return Err(DetectorError::InvalidState("box_jitter must lie in [0, 0.5)".into()));
        }
        if self.feature_dim == 0 {
            return Err(DetectorError::InvalidState("feature_dim must be positive".into()));
        }
        if self.input_norm.dim() != self.feature_dim || !self.input_norm.is_valid() {
            return Err(DetectorError::InvalidState("input_norm must have one positive scale per channel".into()));
        }
        Ok(())
    }
}

/// All trainable parameters plus configuration.
///
/// Weight layouts (row-major, one row per output):
/// `loc_weights` is `loc_dim`, `box_reg_weights` is `4 x loc_dim` (width,
/// height, center offset x, y), `init_reg_weights` is `2 x init_dim` (tangential, normal offset)
/// and each of the three `deform_weights` blocks is `2 x deform_dim`
/// (normal, tangential offset).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorState {
    pub config: DetectorConfig,
    pub loc_weights: Vec<f64>,
    pub box_reg_weights: Vec<f64>,
    pub init_reg_weights: Vec<f64>,
    pub deform_weights: Vec<Vec<f64>>,
    /// Completed training steps; drives augmentation seeds.
    pub steps: u64,
}

/// Initial localization bias: logit of a 0.1 prior.
pub const LOC_PRIOR_BIAS: f64 = -2.19;
/// Box sizes are regressed in units of this many cells.
pub const SIZE_UNIT: f64 = 16.0;
/// Box regression outputs: width, height, center offset x, y.
pub const BOX_ROWS: usize = 4;

impl DetectorState {
    /// All-zero weights.
    pub fn zeros(config: DetectorConfig) -> Self {
        let f = config.feature_dim;
        Self {
            loc_weights: vec![0.0; features::loc_dim(f)],
            box_reg_weights: vec![0.0; BOX_ROWS * features::loc_dim(f)],
            init_reg_weights: vec![0.0; 2 * features::init_dim(f)],
            deform_weights: vec![vec![0.0; 2 * features::deform_dim(f)]; DEFORM_ITERATIONS],
            config,
            steps: 0,
        }
    }

    /// Training start point: background-prior localization bias and a
    /// one-unit size bias, every other weight zero.
    pub fn new(config: DetectorConfig) -> Self {
        let mut s = Self::zeros(config);
        s.loc_weights[0] = LOC_PRIOR_BIAS;
        let d = s.loc_weights.len();
        s.box_reg_weights[0] = 1.0;
        s.box_reg_weights[d] = 1.0;
        s
    }

    pub fn feature_dim(&self) -> usize {
        self.config.feature_dim
    }

    pub fn validate(&self) -> Result<(), DetectorError> {
        self.config.validate()?;
        let f = self.config.feature_dim;
        let shape_ok = self.loc_weights.len() == features::loc_dim(f)
            && self.box_reg_weights.len() == BOX_ROWS * features::loc_dim(f)
            && self.init_reg_weights.len() == 2 * features::init_dim(f)
            && self.deform_weights.len() == DEFORM_ITERATIONS
            && self.deform_weights.iter().all(|b| b.len() == 2 * features::deform_dim(f));
        if !shape_ok {
            return Err(DetectorError::InvalidState("weight shapes do not match feature_dim".into()));
        }
        if !self.param_blocks().iter().all(|(_, b)| b.iter().all(|v| v.is_finite())) {
            return Err(DetectorError::InvalidState("non-finite parameter".into()));
        }
        Ok(())
    }

    /// Named views of every weight block, in a fixed order.
    pub fn param_blocks(&self) -> Vec<(&'static str, &[f64])> {
        let mut v: Vec<(&'static str, &[f64])> = vec![
            ("loc", &self.loc_weights),
            ("box_reg", &self.box_reg_weights),
            ("init_reg", &self.init_reg_weights),
        ];
        for (name, b) in ["deform_0", "deform_1", "deform_2"].into_iter().zip(&self.deform_weights) {
            v.push((name, b));
        }
        v
    }

    pub fn param_blocks_mut(&mut self) -> Vec<(&'static str, &mut [f64])> {
        let mut v: Vec<(&'static str, &mut [f64])> = vec![
            ("loc", &mut self.loc_weights),
            ("box_reg", &mut self.box_reg_weights),
            ("init_reg", &mut self.init_reg_weights),
        ];
        for (name, b) in ["deform_0", "deform_1", "deform_2"].into_iter().zip(self.deform_weights.iter_mut()) {
            v.push((name, b.as_mut_slice()));
        }
        v
    }

    pub fn to_json(&self) -> Result<String, DetectorError> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self, DetectorError> {
        let state: Self = serde_json::from_str(s)?;
        state.validate()?;
        Ok(state)
    }

    pub(crate) fn check_image(&self, img: &SceneImage) -> Result<(), DetectorError> {
        if img.feature_dim != self.config.feature_dim {
            return Err(DetectorError::FeatureDim {
                expected: self.config.feature_dim,
                found: img.feature_dim,
            });
        }
        Ok(())
    }
}

/// Source of candidates and box-conditioned contours for the E-step.
///
/// The trained model is one implementation; [`OracleLabeler`] replays
/// (optionally corrupted) ground truth so the EM loop can be tested in
/// isolation.
pub trait PseudoLabeler: Sync {
    /// Candidates with score at least `score_floor`, sorted by score
    /// descending.
    fn detect(&self, record: &ImageRecord, score_floor: f64) -> Result<Vec<Candidate>, DetectorError>;

    /// All candidates accepted by `keep(box, score)`, in `detect` order.
    /// Implementations may skip building outlines of rejected candidates.
    fn detect_where(
        &self,
        record: &ImageRecord,
        keep: &(dyn Fn(&BBox, f64) -> bool + Sync),
    ) -> Result<Vec<Candidate>, DetectorError> {
        Ok(self
            .detect(record, 0.0)?
            .into_iter()
            .filter(|c| keep(&c.bbox, c.score))
            .collect())
    }

    /// Outline for a given box.
    fn contour_from_box(&self, record: &ImageRecord, b: &BBox) -> Result<Polygon, DetectorError>;
}

impl PseudoLabeler for DetectorState {
    fn detect(&self, record: &ImageRecord, score_floor: f64) -> Result<Vec<Candidate>, DetectorError> {
        self.infer(&record.image, score_floor)
    }

    fn detect_where(
        &self,
        record: &ImageRecord,
        keep: &(dyn Fn(&BBox, f64) -> bool + Sync),
    ) -> Result<Vec<Candidate>, DetectorError> {
        self.infer_where(&record.image, 0.0, keep)
    }

    fn contour_from_box(&self, record: &ImageRecord, b: &BBox) -> Result<Polygon, DetectorError> {
        DetectorState::contour_from_box(self, &record.image, b)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn state_json_round_trip_is_bit_exact() {
        let mut s = DetectorState::new(DetectorConfig::new(8));
        let mut x = 0.1234567890123456789f64;
        for (_, block) in s.param_blocks_mut() {
            for v in block.iter_mut() {
                x = (x * 3.987654321).fract() - 0.5;
                *v = x * 1e-3 + 1.0 / 3.0;
            }
        }
        let text = s.to_json().unwrap();
        let back = DetectorState::from_json(&text).unwrap();
        for ((_, a), (_, b)) in s.param_blocks().iter().zip(back.param_blocks()) {
            for (u, v) in a.iter().zip(b) {
                assert_eq!(u.to_bits(), v.to_bits());
            }
        }
        assert_eq!(s, back);
    }

    #[test]
    fn rejects_bad_shapes_and_config() {
        let mut s = DetectorState::zeros(DetectorConfig::new(4));
        s.deform_weights.pop();
        assert!(s.validate().is_err());
        let mut c = DetectorConfig::new(4);
        c.loss.lambda1 = 0.0;
        assert!(c.validate().is_err());
        let mut c = DetectorConfig::new(4);
        c.deform_iterations = 4;
        assert!(c.validate().is_err());
    }
}
