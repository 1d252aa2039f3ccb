//! Expectation-maximization over weakly labelled images: alternate between
//! estimating pseudo polygon labels with the current model (E-step) and
//! confidence-weighted training on strong plus pseudo labels (M-step).

use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detector::features::InputNorm;
use crate::detector::{
    Candidate, DetectorConfig, DetectorError, DetectorState, HeadRates, LossConfig, PseudoLabeler, TrainInstance,
    TrainRecord,
};
use crate::evaluation::{evaluate_split, match_detections, prf, Metrics, DEFAULT_IOU_THRESH};
use crate::geometry::{box_iou, BBox, Polygon};
use crate::scene::{ImageRecord, SplitDataset};
use crate::seeds::{named_seed, sub_seed};
use crate::weak_labels::{WeakKind, WeakLabel};

#[derive(Debug, Error)]
pub enum EmError {
    #[error(transparent)]
    Detector(#[from] DetectorError),
    #[error("expected a {expected} label, got {found}")]
    WrongKind { expected: WeakKind, found: WeakKind },
    #[error("record {0} has no weak label")]
    MissingWeakLabel(String),
    #[error("record {0} has no strong labels")]
    MissingStrongLabel(String),
    #[error("the strong subset is empty")]
    NoStrongData,
    #[error("invalid EM config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmConfig {
    /// Score threshold S for tag and coarse pseudo labels.
    pub confidence_threshold: f64,
    /// Tag detections scoring in `[uncertain_floor, S]` are neither pseudo
    /// labels nor background: their boxes are ignored by the M-step.
    /// Values at or above S disable this.
    pub uncertain_floor: f64,
    /// Box IoU threshold H against coarse boxes.
    pub iou_threshold: f64,
    pub rounds_tag_coarse: usize,
    pub rounds_tight_loose: usize,
    pub epochs_per_mstep: usize,
    pub base_lr: f64,
    /// `(epoch, multiplier)`: from `epoch` on, the rate is multiplied by
    /// every multiplier whose epoch has been reached. Restarts each M-step.
    pub lr_schedule: Vec<(usize, f64)>,
    pub batch_size: usize,
    pub rng_seed: u64,
    /// Train pseudo labels with their confidence; otherwise every pseudo
    /// instance gets weight 1.
    pub weighted_loss: bool,
    /// Score floor for the evaluation pass.
    pub eval_score_floor: f64,
    pub eval_iou: f64,
    pub loss: LossConfig,
    pub head_rates: HeadRates,
    /// See [`DetectorConfig::box_jitter`].
    pub box_jitter: f64,
}

/// Halves the rate at 40, 60, 75 and 85 percent of `epochs`.
pub fn default_schedule(epochs: usize) -> Vec<(usize, f64)> {
    [0.40, 0.60, 0.75, 0.85]
        .iter()
        .map(|f| (((epochs as f64) * f).round() as usize, 0.5))
        .collect()
}

impl Default for EmConfig {
    fn default() -> Self {
        let epochs = 24;
        Self {
            confidence_threshold: 0.5,
            uncertain_floor: 0.2,
            iou_threshold: 0.5,
            rounds_tag_coarse: 3,
            rounds_tight_loose: 1,
            epochs_per_mstep: epochs,
            base_lr: 0.05,
            lr_schedule: default_schedule(epochs),
            batch_size: 4,
            rng_seed: 0,
            weighted_loss: true,
            eval_score_floor: 0.5,
            eval_iou: DEFAULT_IOU_THRESH,
            loss: LossConfig::default(),
            head_rates: HeadRates::default(),
            box_jitter: 0.3,
        }
    }
}

impl EmConfig {
    pub fn validate(&self) -> Result<(), EmError> {
        let bad = |m: &str| Err(EmError::InvalidConfig(m.to_owned()));
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if !unit(self.confidence_threshold) || !unit(self.iou_threshold) {
            return bad("confidence_threshold and iou_threshold must lie in [0, 1]");
        }
        if !unit(self.uncertain_floor) {
            return bad("uncertain_floor must lie in [0, 1]");
        }
        if !unit(self.eval_score_floor) || !unit(self.eval_iou) {
            return bad("eval_score_floor and eval_iou must lie in [0, 1]");
        }
        if self.rounds_tag_coarse == 0 || self.rounds_tight_loose == 0 {
            return bad("rounds must be at least 1");
        }
        if self.epochs_per_mstep == 0 || self.batch_size == 0 {
            return bad("epochs_per_mstep and batch_size must be positive");
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return bad("base_lr must be positive");
        }
        if self.lr_schedule.iter().any(|&(_, m)| !(m > 0.0 && m.is_finite())) {
            return bad("lr_schedule multipliers must be positive");
        }
        let r = &self.head_rates;
        if [r.loc, r.size, r.init, r.deform].iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
            return bad("head rates must be non-negative");
        }
        Ok(())
    }

    pub fn rounds(&self, kind: WeakKind) -> usize {
        match kind {
            WeakKind::Tag | WeakKind::Coarse => self.rounds_tag_coarse,
            WeakKind::Tight | WeakKind::Loose => self.rounds_tight_loose,
        }
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr_schedule
            .iter()
            .filter(|&&(e, _)| epoch >= e)
            .fold(self.base_lr, |lr, &(_, m)| lr * m)
    }

    /// Detector configuration used for a run on `kind` labels.
    pub fn detector_config(&self, feature_dim: usize, kind: Option<WeakKind>) -> DetectorConfig {
        DetectorConfig {
            loss: self.loss,
            head_rates: self.head_rates,
            loose_augmentation: kind == Some(WeakKind::Loose),
            box_jitter: self.box_jitter,
            aug_seed: named_seed(self.rng_seed, "augment"),
            ..DetectorConfig::new(feature_dim)
        }
    }
}

/// Pseudo labels of one weakly labelled record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoAnnotationSet {
    pub record_id: String,
    pub items: Vec<Candidate>,
    /// Regions the M-step neither supervises as instances nor as background.
    #[serde(default)]
    pub uncertain: Vec<BBox>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmRoundReport {
    pub round: usize,
    /// Pseudo-label quality against withheld truth; absent in round 0.
    pub pseudo_precision: Option<f64>,
    pub pseudo_recall: Option<f64>,
    pub pseudo_items: usize,
    #[serde(rename = "eval_P")]
    pub eval_precision: f64,
    #[serde(rename = "eval_R")]
    pub eval_recall: f64,
    #[serde(rename = "eval_F")]
    pub eval_f: f64,
    pub mean_loss: f64,
}

fn expect_kind(label: &WeakLabel, kind: WeakKind) -> Result<(), EmError> {
    if label.kind != kind {
        return Err(EmError::WrongKind {
            expected: kind,
            found: label.kind,
        });
    }
    Ok(())
}

/// Tag E-step: confident detections of images known to contain instances.
/// Detections scoring in `[uncertain_floor, s]` are returned as uncertain
/// regions.
pub fn estep_tag(
    labeler: &dyn PseudoLabeler,
    record: &ImageRecord,
    tag: &WeakLabel,
    s: f64,
    uncertain_floor: f64,
) -> Result<PseudoAnnotationSet, EmError> {
    expect_kind(tag, WeakKind::Tag)?;
    let mut set = PseudoAnnotationSet {
        record_id: record.id.clone(),
        items: Vec::new(),
        uncertain: Vec::new(),
    };
    if !tag.has_text {
        return Ok(set);
    }
    for c in labeler.detect_where(record, &|_, score| score > s || score >= uncertain_floor)? {
        if c.score > s {
            set.items.push(c);
        } else {
            set.uncertain.push(c.bbox);
        }
    }
    Ok(set)
}

/// Coarse E-step: confident detections overlapping some coarse box.
/// Rejected detections scoring at least `uncertain_floor` whose centre lies
/// in a coarse box, and coarse boxes holding no accepted detection, are
/// returned as uncertain regions.
pub fn estep_coarse(
    labeler: &dyn PseudoLabeler,
    record: &ImageRecord,
    coarse: &WeakLabel,
    s: f64,
    h: f64,
    uncertain_floor: f64,
) -> Result<PseudoAnnotationSet, EmError> {
    expect_kind(coarse, WeakKind::Coarse)?;
    let accept = |b: &BBox, score: f64| score > s && coarse.boxes.iter().any(|g| box_iou(b, g) > h);
    let inside = |b: &BBox| coarse.boxes.iter().any(|g| g.contains_point(b.center(), 0.0));
    let mut set = PseudoAnnotationSet {
        record_id: record.id.clone(),
        items: Vec::new(),
        uncertain: Vec::new(),
    };
    let keep = |b: &BBox, score: f64| accept(b, score) || (score >= uncertain_floor && inside(b));
    for c in labeler.detect_where(record, &keep)? {
        if accept(&c.bbox, c.score) {
            set.items.push(c);
        } else {
            set.uncertain.push(c.bbox);
        }
    }
    // a coarse box without any accepted detection still holds an instance
    for g in &coarse.boxes {
        if !set.items.iter().any(|c| g.contains_point(c.bbox.center(), 0.0)) {
            set.uncertain.push(*g);
        }
    }
    Ok(set)
}

fn boxes_to_contours(
    labeler: &dyn PseudoLabeler,
    record: &ImageRecord,
    label: &WeakLabel,
) -> Result<PseudoAnnotationSet, EmError> {
    let items = label
        .boxes
        .iter()
        .map(|g| {
            Ok(Candidate {
                bbox: *g,
                polygon: labeler.contour_from_box(record, g)?,
                score: 1.0,
            })
        })
        .collect::<Result<Vec<_>, DetectorError>>()?;
    Ok(PseudoAnnotationSet {
        record_id: record.id.clone(),
        items,
        uncertain: Vec::new(),
    })
}

/// Tight-box E-step: one contour per box, confidence 1.
pub fn estep_tight(
    labeler: &dyn PseudoLabeler,
    record: &ImageRecord,
    tight: &WeakLabel,
) -> Result<PseudoAnnotationSet, EmError> {
    expect_kind(tight, WeakKind::Tight)?;
    boxes_to_contours(labeler, record, tight)
}

/// Loose-box E-step: as for tight boxes, from a model trained with box
/// enlargement.
pub fn estep_loose(
    labeler: &dyn PseudoLabeler,
    record: &ImageRecord,
    loose: &WeakLabel,
) -> Result<PseudoAnnotationSet, EmError> {
    expect_kind(loose, WeakKind::Loose)?;
    boxes_to_contours(labeler, record, loose)
}

/// Dispatches on the record's weak label.
pub fn estep(labeler: &dyn PseudoLabeler, record: &ImageRecord, cfg: &EmConfig) -> Result<PseudoAnnotationSet, EmError> {
    let label = record
        .weak
        .as_ref()
        .ok_or_else(|| EmError::MissingWeakLabel(record.id.clone()))?;
    match label.kind {
        WeakKind::Tag => estep_tag(labeler, record, label, cfg.confidence_threshold, cfg.uncertain_floor),
        WeakKind::Coarse => estep_coarse(
            labeler,
            record,
            label,
            cfg.confidence_threshold,
            cfg.iou_threshold,
            cfg.uncertain_floor,
        ),
        WeakKind::Tight => estep_tight(labeler, record, label),
        WeakKind::Loose => estep_loose(labeler, record, label),
    }
}

/// A weak label that asserts the image holds no instance.
fn is_negative(label: Option<&WeakLabel>) -> bool {
    match label {
        Some(l) if l.kind == WeakKind::Tag => !l.has_text,
        Some(l) => l.boxes.is_empty(),
        None => false,
    }
}

/// Outcome of one M-step.
#[derive(Debug, Clone)]
pub struct MStepOutput {
    pub state: DetectorState,
    /// Mean per-record loss over the final epoch.
    pub mean_loss: f64,
}

/// Trains on strong records (weight 1) and pseudo-labelled records.
///
/// Zero-confidence pseudo items are dropped. A pseudo record left without
/// items is dropped too, unless its weak label says it is empty, in which
/// case it trains as pure background.
pub fn mstep(
    state: &DetectorState,
    strong: &[ImageRecord],
    pseudo: &[(&ImageRecord, PseudoAnnotationSet)],
    cfg: &EmConfig,
    round: usize,
) -> Result<MStepOutput, EmError> {
    cfg.validate()?;
    let mut pool: Vec<TrainRecord> = Vec::with_capacity(strong.len() + pseudo.len());
    for r in strong {
        let polys = r.strong.as_ref().ok_or_else(|| EmError::MissingStrongLabel(r.id.clone()))?;
        pool.push(TrainRecord::new(&r.image, polys.iter().cloned().map(TrainInstance::strong).collect()));
    }
    for (r, set) in pseudo {
        let items: Vec<TrainInstance> = set
            .items
            .iter()
            .filter(|c| c.score > 0.0)
            .map(|c| {
                let mut t = TrainInstance::from(c);
                if !cfg.weighted_loss {
                    t.confidence = 1.0;
                }
                t
            })
            .collect();
        if items.is_empty() && !is_negative(r.weak.as_ref()) {
            continue;
        }
        pool.push(TrainRecord {
            image: &r.image,
            instances: items,
            ignore: set.uncertain.clone(),
        });
    }

    let mut state = state.clone();
    let mut order: Vec<usize> = (0..pool.len()).collect();
    let mut mean_loss = 0.0;
    let seed = sub_seed(named_seed(cfg.rng_seed, "mstep"), round as u64);
    for epoch in 0..cfg.epochs_per_mstep {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(sub_seed(seed, epoch as u64)));
        let lr = cfg.lr_at(epoch);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<TrainRecord> = chunk.iter().map(|&i| pool[i].clone()).collect();
            let (next, loss) = state.train_step(&batch, lr / batch.len() as f64)?;
            total += loss.total;
            state = next;
        }
        mean_loss = if pool.is_empty() { 0.0 } else { total / pool.len() as f64 };
    }
    Ok(MStepOutput { state, mean_loss })
}

/// Pooled P/R/F of a model's detections over labelled records.
pub fn evaluate_model(model: &dyn PseudoLabeler, records: &[ImageRecord], score_floor: f64, iou: f64) -> Result<Metrics, EmError> {
    let dets = records
        .par_iter()
        .map(|r| model.detect(r, score_floor))
        .collect::<Result<Vec<_>, _>>()?;
    let truths = records
        .iter()
        .map(|r| r.strong.as_deref().ok_or_else(|| EmError::MissingStrongLabel(r.id.clone())))
        .collect::<Result<Vec<&[Polygon]>, _>>()?;
    Ok(evaluate_split(dets.iter().map(Vec::as_slice).zip(truths), iou))
}

/// Result of a full EM run.
#[derive(Debug, Clone)]
pub struct EmRun {
    pub reports: Vec<EmRoundReport>,
    pub state: DetectorState,
    /// Pseudo labels of the last E-step.
    pub pseudo: Vec<PseudoAnnotationSet>,
}

/// Round 0 trains on the strong subset; each later round relabels every
/// weak record with the previous model (or `labeler`, when given) and
/// trains on strong plus pseudo labels. Without weak records only round 0
/// runs.
pub fn run_em(
    split: &SplitDataset,
    eval_set: &[ImageRecord],
    kind: WeakKind,
    cfg: &EmConfig,
    labeler: Option<&dyn PseudoLabeler>,
) -> Result<EmRun, EmError> {
    cfg.validate()?;
    let first = split.strong.first().ok_or(EmError::NoStrongData)?;
    for r in &split.weak {
        let label = r.weak.as_ref().ok_or_else(|| EmError::MissingWeakLabel(r.id.clone()))?;
        expect_kind(label, kind)?;
    }
    let f = first.image.feature_dim;
    let mut dcfg = cfg.detector_config(f, Some(kind));
    dcfg.input_norm = InputNorm::fit(f, split.strong.iter().chain(&split.weak).map(|r| &r.image));
    let mut state = DetectorState::new(dcfg);

    let evaluate = |state: &DetectorState| evaluate_model(state, eval_set, cfg.eval_score_floor, cfg.eval_iou);
    let out = mstep(&state, &split.strong, &[], cfg, 0)?;
    state = out.state;
    let m = evaluate(&state)?;
    let mut reports = vec![EmRoundReport {
        round: 0,
        pseudo_precision: None,
        pseudo_recall: None,
        pseudo_items: 0,
        eval_precision: m.precision,
        eval_recall: m.recall,
        eval_f: m.f_measure,
        mean_loss: out.mean_loss,
    }];
    let rounds = if split.weak.is_empty() { 0 } else { cfg.rounds(kind) };
    let mut last_pseudo = Vec::new();
    for round in 1..=rounds {
        let source: &dyn PseudoLabeler = labeler.unwrap_or(&state);
        let sets = split
            .weak
            .par_iter()
            .map(|r| estep(source, r, cfg))
            .collect::<Result<Vec<_>, _>>()?;
        let (mut hits, mut n_items, mut n_truth) = (0, 0, 0);
        for (set, truth) in sets.iter().zip(&split.weak_truth) {
            hits += match_detections(&set.items, truth, DEFAULT_IOU_THRESH).pairs.len();
            n_items += set.items.len();
            n_truth += truth.len();
        }
        let pseudo_quality = prf::<f64>(hits, n_items, n_truth);
        let pairs: Vec<(&ImageRecord, PseudoAnnotationSet)> = split.weak.iter().zip(sets.iter().cloned()).collect();
        let out = mstep(&state, &split.strong, &pairs, cfg, round)?;
        state = out.state;
        let m = evaluate(&state)?;
        reports.push(EmRoundReport {
            round,
            pseudo_precision: Some(pseudo_quality.precision),
            pseudo_recall: Some(pseudo_quality.recall),
            pseudo_items: n_items,
            eval_precision: m.precision,
            eval_recall: m.recall,
            eval_f: m.f_measure,
            mean_loss: out.mean_loss,
        });
        last_pseudo = sets;
    }
    Ok(EmRun {
        reports,
        state,
        pseudo: last_pseudo,
    })
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// One CSV row per round.
pub fn reports_csv(reports: &[EmRoundReport]) -> String {
    let mut out = String::from("round,pseudo_precision,pseudo_recall,pseudo_items,eval_P,eval_R,eval_F,mean_loss\n");
    for r in reports {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.round,
            opt(r.pseudo_precision),
            opt(r.pseudo_recall),
            r.pseudo_items,
            r.eval_precision,
            r.eval_recall,
            r.eval_f,
            r.mean_loss
        ));
    }
    out
}
