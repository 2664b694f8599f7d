//! End-to-end orchestration of calibration and fusion.
//!
//! A pipeline is configured by three independent decisions — the
//! calibration/fusion ordering, the calibration space, and the fusion space —
//! plus the fusion method and post-processing parameters. Fitting estimates
//! calibration and MetaLearner parameters on pooled reference-aligned
//! training frames; applying executes the configured chain at the input
//! frame rate and then upsamples, median-filters and thresholds the final
//! multilabel probabilities into hypothesis segments.

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::calibration::{
    apply_calibration, fit_calibration, CalibrationModel, CalibrationModelDoc,
    CalibrationOptions, CalibrationStrategy, CalibrationTrainingSet,
};
use crate::error::{Error, Result};
use crate::evaluation::{
    activity_to_annotation, compute_bce, compute_der, frame_targets,
    targets_in_prediction_order, Annotation, DerOptions, DerReport, ReportRow,
};
use crate::fusion::{
    align_systems, apply_metalearner, fit_metalearner, fuse_unsupervised, FusionInput,
    FusionRule, MetaLearnerDoc, MetaLearnerModel,
};
use crate::optim::Targets;
use crate::postproc::{median_filter, threshold_decisions, upsample};
use crate::spaces::{convert_space, to_logits, to_probabilities, PowersetEncoding};
use crate::types::{BinaryActivityMatrix, FrameScoreMatrix, ProbSpace, ScoreKind};

/// Calibration/fusion ordering.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PipelineOrder {
    CalibrateThenFuse,
    FuseThenCalibrate,
}

impl PipelineOrder {
    pub fn short_name(self) -> &'static str {
        match self {
            PipelineOrder::CalibrateThenFuse => "C>F",
            PipelineOrder::FuseThenCalibrate => "F>C",
        }
    }
}

/// Independent per-speaker vs joint calibration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CalStrategyChoice {
    Independent,
    Joint,
}

/// Fusion method, `none` meaning a single-system passthrough.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMethod {
    AverageProbs,
    AverageLogits,
    DynamicLogits,
    Entropy,
    Metalearner,
    None,
}

impl FusionMethod {
    pub fn name(self) -> &'static str {
        match self {
            FusionMethod::AverageProbs => "average_probs",
            FusionMethod::AverageLogits => "average_logits",
            FusionMethod::DynamicLogits => "dynamic_logits",
            FusionMethod::Entropy => "entropy",
            FusionMethod::Metalearner => "metalearner",
            FusionMethod::None => "none",
        }
    }

    fn unsupervised_rule(self) -> Option<FusionRule> {
        match self {
            FusionMethod::AverageProbs => Some(FusionRule::AverageProbs),
            FusionMethod::AverageLogits => Some(FusionRule::AverageLogits),
            FusionMethod::DynamicLogits => Some(FusionRule::DynamicLogits),
            FusionMethod::Entropy => Some(FusionRule::Entropy),
            _ => None,
        }
    }
}

fn default_upsample() -> usize {
    10
}
fn default_median() -> usize {
    11
}
fn default_threshold() -> f64 {
    0.5
}

/// Post-processing parameters applied after the calibration/fusion chain.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PostConfig {
    #[serde(default = "default_upsample")]
    pub upsample_factor: usize,
    #[serde(default = "default_median")]
    pub median_window: usize,
    #[serde(default = "default_threshold")]
    pub threshold: f64,
    /// Take hard powerset decisions before post-processing instead of
    /// marginalizing, when the chain ends in powerset space.
    #[serde(default)]
    pub powerset_hard: bool,
}

impl Default for PostConfig {
    fn default() -> Self {
        Self {
            upsample_factor: 10,
            median_window: 11,
            threshold: 0.5,
            powerset_hard: false,
        }
    }
}

fn default_true() -> bool {
    true
}

/// The three configuration decisions plus method and post-processing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub order: PipelineOrder,
    pub calibration_space: ProbSpace,
    pub calibration_strategy: CalStrategyChoice,
    pub fusion_space: ProbSpace,
    pub fusion_method: FusionMethod,
    #[serde(default = "default_true")]
    pub calibrate: bool,
    #[serde(default)]
    pub post: PostConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            order: PipelineOrder::FuseThenCalibrate,
            calibration_space: ProbSpace::Powerset,
            calibration_strategy: CalStrategyChoice::Joint,
            fusion_space: ProbSpace::Multilabel,
            fusion_method: FusionMethod::DynamicLogits,
            calibrate: true,
            post: PostConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self, num_systems: usize) -> Result<()> {
        if self.calibration_space == ProbSpace::Powerset
            && self.calibration_strategy == CalStrategyChoice::Independent
        {
            return Err(Error::Config(
                "powerset calibration is a distribution over mutually exclusive \
                 classes; only joint calibration applies"
                    .into(),
            ));
        }
        if self.order == PipelineOrder::FuseThenCalibrate
            && self.fusion_method == FusionMethod::None
        {
            return Err(Error::Config(
                "fuse-then-calibrate requires a fusion method".into(),
            ));
        }
        if self.fusion_method == FusionMethod::None && num_systems != 1 {
            return Err(Error::Config(format!(
                "fusion method 'none' needs exactly one system, got {num_systems}"
            )));
        }
        if self.post.median_window == 0 || self.post.median_window % 2 == 0 {
            return Err(Error::Config("median window must be odd and >= 1".into()));
        }
        if self.post.upsample_factor < 1 {
            return Err(Error::Config("upsample factor must be >= 1".into()));
        }
        if !(self.post.threshold > 0.0 && self.post.threshold < 1.0) {
            return Err(Error::Config("threshold must lie in (0,1)".into()));
        }
        Ok(())
    }

    fn calibration_strategy_enum(&self) -> CalibrationStrategy {
        match (self.calibration_space, self.calibration_strategy) {
            (ProbSpace::Multilabel, CalStrategyChoice::Independent) => {
                CalibrationStrategy::IndependentMult
            }
            (ProbSpace::Multilabel, CalStrategyChoice::Joint) => CalibrationStrategy::JointMult,
            (ProbSpace::Powerset, _) => CalibrationStrategy::JointPower,
        }
    }

    fn space_name(space: ProbSpace) -> &'static str {
        match space {
            ProbSpace::Multilabel => "mult",
            ProbSpace::Powerset => "power",
        }
    }

    /// Compact human-readable descriptor used as the report condition.
    pub fn label(&self) -> String {
        let cal = if self.calibrate {
            let strat = match self.calibration_strategy {
                CalStrategyChoice::Independent => "indep",
                CalStrategyChoice::Joint => "joint",
            };
            format!("cal:{}/{strat}", Self::space_name(self.calibration_space))
        } else {
            "cal:off".to_string()
        };
        format!(
            "{} fuse:{} {cal}",
            self.order.short_name(),
            Self::space_name(self.fusion_space)
        )
    }
}

/// One recording of per-system scores plus an optional reference.
#[derive(Debug, Clone)]
pub struct EnsembleRecording {
    pub recording_id: String,
    pub systems: Vec<FrameScoreMatrix>,
    pub reference: Option<Annotation>,
}

/// A whole dataset: consistent system order across recordings.
#[derive(Debug, Clone)]
pub struct EnsembleData {
    pub system_ids: Vec<String>,
    pub recordings: Vec<EnsembleRecording>,
}

impl EnsembleData {
    fn validate(&self) -> Result<usize> {
        if self.recordings.is_empty() {
            return Err(Error::Contract("no recordings".into()));
        }
        let m = self.system_ids.len();
        let s = self.recordings[0].systems[0].num_speakers;
        for rec in &self.recordings {
            if rec.systems.len() != m {
                return Err(Error::Contract(format!(
                    "recording {} has {} systems, expected {m}",
                    rec.recording_id,
                    rec.systems.len()
                )));
            }
            if rec.systems.iter().any(|sys| sys.num_speakers != s) {
                return Err(Error::Contract("inconsistent speaker counts".into()));
            }
        }
        Ok(s)
    }
}

/// Fitted artifacts for one configuration.
#[derive(Debug, Clone)]
pub struct TrainedPipeline {
    pub config: PipelineConfig,
    pub system_ids: Vec<String>,
    pub num_speakers: usize,
    /// One per system for calibrate-then-fuse, one total for
    /// fuse-then-calibrate, empty when calibration is off.
    pub calibrators: Vec<CalibrationModel>,
    pub metalearner: Option<MetaLearnerModel>,
    pub epsilon: f64,
    pub trained_on: String,
}

/// Per-recording pipeline result.
#[derive(Debug, Clone)]
pub struct PipelineOutput {
    /// Final multilabel probabilities at the input frame rate.
    pub probs: FrameScoreMatrix,
    /// Hard decisions at the upsampled rate.
    pub decisions: BinaryActivityMatrix,
    pub hypothesis: Annotation,
}

/// Chooses up to `max_speakers` reference speakers, most speech first.
fn reference_speaker_order(reference: &Annotation, max_speakers: usize) -> Vec<String> {
    let mut durations: Vec<(String, f64)> = reference
        .merged_intervals()
        .iter()
        .map(|(k, iv)| (k.clone(), iv.iter().map(|(a, b)| b - a).sum()))
        .collect();
    durations.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .unwrap()
            .then_with(|| a.0.cmp(&b.0))
    });
    if durations.len() > max_speakers {
        log::warn!(
            "recording {}: reference has {} speakers, keeping the {max_speakers} \
             with most speech",
            reference.recording_id,
            durations.len()
        );
    }
    durations
        .into_iter()
        .take(max_speakers)
        .map(|(k, _)| k)
        .collect()
}

/// Canonical multilabel probabilities for one system.
fn canonicalize(m: &FrameScoreMatrix) -> Result<FrameScoreMatrix> {
    let probs = to_probabilities(m);
    convert_space(&probs, ProbSpace::Multilabel)
}

/// Aligns all systems of a recording to the first-listed (anchor) system.
fn aligned_multilabel(systems: &[FrameScoreMatrix]) -> Result<Vec<FrameScoreMatrix>> {
    let canon: Vec<FrameScoreMatrix> =
        systems.iter().map(canonicalize).collect::<Result<_>>()?;
    let (anchor, rest) = canon.split_first().expect("at least one system");
    let refs: Vec<&FrameScoreMatrix> = rest.iter().collect();
    let perms = align_systems(anchor, &refs)?;
    let mut out = vec![anchor.clone()];
    for (sys, perm) in rest.iter().zip(perms) {
        out.push(FrameScoreMatrix {
            values: perm.apply_to_columns(&sys.values),
            ..sys.clone()
        });
    }
    Ok(out)
}

fn dataset_fingerprint(data: &EnsembleData) -> String {
    let mut hasher = Sha256::new();
    let mut frames = 0usize;
    for rec in &data.recordings {
        hasher.update(rec.recording_id.as_bytes());
        let t = rec.systems[0].num_frames();
        hasher.update(t.to_le_bytes());
        frames += t;
    }
    let digest = hasher.finalize();
    let hex: String = digest.iter().take(6).map(|b| format!("{b:02x}")).collect();
    format!(
        "{} recordings, {frames} frames, sha256:{hex}",
        data.recordings.len()
    )
}

/// Pooled reference-aligned training frames.
struct PooledTraining {
    /// Per-system multilabel probabilities, stacked over recordings.
    system_probs: Vec<Array2<f64>>,
    /// Binary targets in system column order.
    targets: Array2<u8>,
}

fn pool_training_frames(data: &EnsembleData) -> Result<PooledTraining> {
    let s = data.recordings[0].systems[0].num_speakers;
    let m = data.system_ids.len();
    let total: usize = data
        .recordings
        .iter()
        .map(|r| r.systems[0].num_frames())
        .sum();
    let mut system_probs = vec![Array2::<f64>::zeros((total, s)); m];
    let mut targets = Array2::<u8>::zeros((total, s));
    let mut offset = 0usize;
    for rec in &data.recordings {
        let reference = rec.reference.as_ref().ok_or_else(|| {
            Error::Contract(format!(
                "recording {} lacks a reference annotation",
                rec.recording_id
            ))
        })?;
        let aligned = aligned_multilabel(&rec.systems)?;
        let t = aligned[0].num_frames();
        let speaker_order = reference_speaker_order(reference, s);
        let raw_targets =
            frame_targets(reference, aligned[0].frame_rate_hz, t, &speaker_order);
        let sys_targets = targets_in_prediction_order(&aligned[0], &raw_targets)?;
        targets
            .slice_mut(ndarray::s![offset..offset + t, ..])
            .assign(&sys_targets.values);
        for (k, sys) in aligned.iter().enumerate() {
            system_probs[k]
                .slice_mut(ndarray::s![offset..offset + t, ..])
                .assign(&sys.values);
        }
        offset += t;
    }
    Ok(PooledTraining {
        system_probs,
        targets,
    })
}

fn matrix_in_space(
    values: Array2<f64>,
    num_speakers: usize,
    target: ProbSpace,
) -> Result<FrameScoreMatrix> {
    let m = FrameScoreMatrix {
        values,
        kind: ScoreKind::Probability,
        space: ProbSpace::Multilabel,
        num_speakers,
        frame_rate_hz: 1.0,
        recording_id: String::new(),
    };
    convert_space(&m, target)
}

fn targets_for_space(
    targets: &Array2<u8>,
    num_speakers: usize,
    space: ProbSpace,
) -> Result<Targets> {
    match space {
        ProbSpace::Multilabel => Ok(Targets::Binary(targets.clone())),
        ProbSpace::Powerset => {
            let enc = PowersetEncoding::new(num_speakers)?;
            let classes = targets
                .rows()
                .into_iter()
                .map(|row| enc.class_of(row.as_slice().expect("contiguous")))
                .collect();
            Ok(Targets::Class {
                classes,
                num_classes: enc.class_count(),
            })
        }
    }
}

fn fit_one_calibrator(
    probs_mult: &Array2<f64>,
    targets: &Array2<u8>,
    num_speakers: usize,
    strategy: CalibrationStrategy,
    opts: &CalibrationOptions,
    trained_on: &str,
) -> Result<CalibrationModel> {
    let space = strategy.space();
    let in_space = matrix_in_space(probs_mult.clone(), num_speakers, space)?;
    let train = CalibrationTrainingSet {
        probs: in_space.values,
        targets: targets_for_space(targets, num_speakers, space)?,
        space,
        num_speakers,
        sample_weights: None,
        trained_on: trained_on.to_string(),
    };
    fit_calibration(&train, strategy, opts)
}

/// Fits calibration and MetaLearner parameters for one configuration.
pub fn fit_pipeline(config: &PipelineConfig, data: &EnsembleData) -> Result<TrainedPipeline> {
    fit_pipeline_with_options(config, data, &CalibrationOptions::default())
}

pub fn fit_pipeline_with_options(
    config: &PipelineConfig,
    data: &EnsembleData,
    cal_opts: &CalibrationOptions,
) -> Result<TrainedPipeline> {
    config.validate(data.system_ids.len())?;
    let num_speakers = data.validate()?;
    let trained_on = dataset_fingerprint(data);
    let needs_reference =
        config.calibrate || config.fusion_method == FusionMethod::Metalearner;

    let mut calibrators = Vec::new();
    let mut metalearner = None;

    if needs_reference {
        let pooled = pool_training_frames(data)?;
        let strategy = config.calibration_strategy_enum();
        match config.order {
            PipelineOrder::CalibrateThenFuse => {
                if config.calibrate {
                    for probs in &pooled.system_probs {
                        calibrators.push(fit_one_calibrator(
                            probs,
                            &pooled.targets,
                            num_speakers,
                            strategy,
                            cal_opts,
                            &trained_on,
                        )?);
                    }
                }
                if config.fusion_method == FusionMethod::Metalearner {
                    // the MetaLearner consumes whatever the previous stage
                    // emits: calibrated logits under C>F, raw logits otherwise
                    let mut blocks = Vec::with_capacity(pooled.system_probs.len());
                    for (k, probs) in pooled.system_probs.iter().enumerate() {
                        let mult =
                            matrix_in_space(probs.clone(), num_speakers, ProbSpace::Multilabel)?;
                        let staged = if config.calibrate {
                            let cal_in =
                                convert_space(&mult, config.calibration_space)?;
                            let calibrated = apply_calibration(&calibrators[k], &cal_in)?;
                            convert_space(&calibrated, config.fusion_space)?
                        } else {
                            convert_space(&mult, config.fusion_space)?
                        };
                        blocks.push(to_logits(&staged, cal_opts.epsilon)?.values);
                    }
                    let targets =
                        targets_for_space(&pooled.targets, num_speakers, config.fusion_space)?;
                    let mut model = fit_metalearner(
                        &blocks,
                        &targets,
                        config.fusion_space,
                        num_speakers,
                        &data.system_ids,
                        cal_opts.l2_c,
                        cal_opts.epsilon,
                    )?;
                    model.trained_on = trained_on.clone();
                    metalearner = Some(model);
                }
            }
            PipelineOrder::FuseThenCalibrate => {
                let mut blocks = Vec::with_capacity(pooled.system_probs.len());
                let mut fusion_mats = Vec::with_capacity(pooled.system_probs.len());
                for probs in &pooled.system_probs {
                    let staged = matrix_in_space(probs.clone(), num_speakers, config.fusion_space)?;
                    blocks.push(to_logits(&staged, cal_opts.epsilon)?.values);
                    fusion_mats.push(staged);
                }
                if config.fusion_method == FusionMethod::Metalearner {
                    let targets =
                        targets_for_space(&pooled.targets, num_speakers, config.fusion_space)?;
                    let mut model = fit_metalearner(
                        &blocks,
                        &targets,
                        config.fusion_space,
                        num_speakers,
                        &data.system_ids,
                        cal_opts.l2_c,
                        cal_opts.epsilon,
                    )?;
                    model.trained_on = trained_on.clone();
                    metalearner = Some(model);
                }
                if config.calibrate {
                    let input = FusionInput::with_epsilon(
                        &fusion_mats,
                        &data.system_ids,
                        cal_opts.epsilon,
                    )?;
                    let fused = match config.fusion_method.unsupervised_rule() {
                        Some(rule) => fuse_unsupervised(&input, rule)?,
                        None => apply_metalearner(
                            metalearner.as_ref().expect("metalearner fitted above"),
                            &input,
                        )?,
                    };
                    let fused_mult = convert_space(&fused, ProbSpace::Multilabel)?;
                    calibrators.push(fit_one_calibrator(
                        &fused_mult.values,
                        &pooled.targets,
                        num_speakers,
                        strategy,
                        cal_opts,
                        &trained_on,
                    )?);
                }
            }
        }
    }

    Ok(TrainedPipeline {
        config: config.clone(),
        system_ids: data.system_ids.clone(),
        num_speakers,
        calibrators,
        metalearner,
        epsilon: cal_opts.epsilon,
        trained_on,
    })
}

/// Runs a trained pipeline on one recording's systems.
pub fn apply_pipeline(
    tp: &TrainedPipeline,
    system_ids: &[String],
    systems: &[FrameScoreMatrix],
) -> Result<PipelineOutput> {
    if system_ids != tp.system_ids.as_slice() {
        return Err(Error::Contract(format!(
            "system order mismatch: pipeline fitted on {:?}, input has {:?}",
            tp.system_ids, system_ids
        )));
    }
    if systems.len() != tp.system_ids.len() {
        return Err(Error::Contract("system count mismatch".into()));
    }
    let aligned = aligned_multilabel(systems)?;
    if aligned[0].num_speakers != tp.num_speakers {
        return Err(Error::Contract(format!(
            "pipeline fitted for {} speakers, input has {}",
            tp.num_speakers, aligned[0].num_speakers
        )));
    }

    let fused = match tp.config.order {
        PipelineOrder::CalibrateThenFuse => {
            let mut staged = Vec::with_capacity(aligned.len());
            for (k, sys) in aligned.iter().enumerate() {
                let mut cur = sys.clone();
                if tp.config.calibrate {
                    let cal_in = convert_space(&cur, tp.config.calibration_space)?;
                    cur = apply_calibration(&tp.calibrators[k], &cal_in)?;
                }
                staged.push(convert_space(&cur, tp.config.fusion_space)?);
            }

            if tp.config.fusion_method == FusionMethod::None {
                staged.pop().expect("validated single system")
            } else {
                let input =
                    FusionInput::with_epsilon(&staged, &tp.system_ids, tp.epsilon)?;
                match tp.config.fusion_method.unsupervised_rule() {
                    Some(rule) => fuse_unsupervised(&input, rule)?,
                    None => apply_metalearner(
                        tp.metalearner.as_ref().ok_or_else(|| {
                            Error::Contract("pipeline lacks a fitted metalearner".into())
                        })?,
                        &input,
                    )?,
                }
            }
        }
        PipelineOrder::FuseThenCalibrate => {
            let staged: Vec<FrameScoreMatrix> = aligned
                .iter()
                .map(|sys| convert_space(sys, tp.config.fusion_space))
                .collect::<Result<_>>()?;
            let input = FusionInput::with_epsilon(&staged, &tp.system_ids, tp.epsilon)?;
            let fused = match tp.config.fusion_method.unsupervised_rule() {
                Some(rule) => fuse_unsupervised(&input, rule)?,
                None => apply_metalearner(
                    tp.metalearner.as_ref().ok_or_else(|| {
                        Error::Contract("pipeline lacks a fitted metalearner".into())
                    })?,
                    &input,
                )?,
            };
            if tp.config.calibrate {
                let cal_in = convert_space(&fused, tp.config.calibration_space)?;
                apply_calibration(&tp.calibrators[0], &cal_in)?
            } else {
                fused
            }
        }
    };

    let final_mult = if fused.space == ProbSpace::Powerset && tp.config.post.powerset_hard {
        let decisions = crate::postproc::powerset_decision(&fused)?;
        FrameScoreMatrix {
            values: decisions.values.mapv(f64::from),
            kind: ScoreKind::Probability,
            space: ProbSpace::Multilabel,
            num_speakers: fused.num_speakers,
            frame_rate_hz: fused.frame_rate_hz,
            recording_id: fused.recording_id.clone(),
        }
    } else {
        convert_space(&fused, ProbSpace::Multilabel)?
    };

    let upsampled = upsample(&final_mult, tp.config.post.upsample_factor)?;
    let smoothed = median_filter(&upsampled, tp.config.post.median_window)?;
    let decisions = threshold_decisions(&smoothed, tp.config.post.threshold)?;
    let hypothesis = activity_to_annotation(&decisions, None);
    Ok(PipelineOutput {
        probs: final_mult,
        decisions,
        hypothesis,
    })
}

/// Scores of one configuration over a test set.
#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub config: PipelineConfig,
    pub der: DerReport,
    pub bce: f64,
}

/// Fits and evaluates every configuration, returning report rows plus the
/// underlying results in grid order.
pub fn run_experiment(
    grid: &[PipelineConfig],
    train: &EnsembleData,
    test: &EnsembleData,
    der_opts: &DerOptions,
    cal_opts: &CalibrationOptions,
) -> Result<(Vec<ReportRow>, Vec<ExperimentResult>)> {
    let train_ids: std::collections::BTreeSet<&String> = train
        .recordings
        .iter()
        .map(|r| &r.recording_id)
        .collect();
    if test
        .recordings
        .iter()
        .any(|r| train_ids.contains(&r.recording_id))
    {
        log::warn!("train and test sets share recording ids");
    }

    let mut rows = Vec::with_capacity(grid.len());
    let mut results = Vec::with_capacity(grid.len());
    for config in grid {
        let tp = fit_pipeline_with_options(config, train, cal_opts)?;
        let mut der_reports = Vec::with_capacity(test.recordings.len());
        let mut bce_weighted = 0.0f64;
        let mut bce_weight = 0.0f64;
        for rec in &test.recordings {
            let reference = rec.reference.as_ref().ok_or_else(|| {
                Error::Contract(format!(
                    "test recording {} lacks a reference",
                    rec.recording_id
                ))
            })?;
            let out = apply_pipeline(&tp, &test.system_ids, &rec.systems)?;
            der_reports.push(compute_der(reference, &out.hypothesis, der_opts)?);
            let speaker_order =
                reference_speaker_order(reference, out.probs.num_speakers);
            let targets = frame_targets(
                reference,
                out.probs.frame_rate_hz,
                out.probs.num_frames(),
                &speaker_order,
            );
            let bce = compute_bce(&out.probs, &targets, cal_opts.epsilon)?;
            let w = (out.probs.num_frames() * out.probs.num_speakers) as f64;
            bce_weighted += bce * w;
            bce_weight += w;
        }
        let der = DerReport::aggregate(&der_reports)?;
        let bce = bce_weighted / bce_weight;
        rows.push(ReportRow {
            condition: config.label(),
            method: config.fusion_method.name().to_string(),
            strategy: match config.order {
                PipelineOrder::CalibrateThenFuse => "calibrate_then_fuse".to_string(),
                PipelineOrder::FuseThenCalibrate => "fuse_then_calibrate".to_string(),
            },
            der: der.clone(),
            bce,
        });
        results.push(ExperimentResult {
            config: config.clone(),
            der,
            bce,
        });
    }
    Ok((rows, results))
}

#[derive(Serialize, Deserialize)]
struct TrainedPipelineDoc {
    config: PipelineConfig,
    system_ids: Vec<String>,
    #[serde(rename = "S")]
    num_speakers: usize,
    calibrators: Vec<CalibrationModelDoc>,
    metalearner: Option<MetaLearnerDoc>,
    epsilon: f64,
    trained_on: String,
}

impl TrainedPipeline {
    pub fn to_json(&self) -> Result<String> {
        let doc = TrainedPipelineDoc {
            config: self.config.clone(),
            system_ids: self.system_ids.clone(),
            num_speakers: self.num_speakers,
            calibrators: self.calibrators.iter().map(CalibrationModelDoc::from).collect(),
            metalearner: self.metalearner.as_ref().map(MetaLearnerDoc::from),
            epsilon: self.epsilon,
            trained_on: self.trained_on.clone(),
        };
        Ok(serde_json::to_string_pretty(&doc)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: TrainedPipelineDoc = serde_json::from_str(text)?;
        let calibrators: Vec<CalibrationModel> = doc
            .calibrators
            .into_iter()
            .map(CalibrationModel::try_from)
            .collect::<Result<_>>()?;
        let metalearner = doc
            .metalearner
            .map(MetaLearnerModel::try_from)
            .transpose()?;
        let expected = match (doc.config.calibrate, doc.config.order) {
            (false, _) => 0,
            (true, PipelineOrder::CalibrateThenFuse) => doc.system_ids.len(),
            (true, PipelineOrder::FuseThenCalibrate) => 1,
        };
        if calibrators.len() != expected {
            return Err(Error::Contract(format!(
                "pipeline document has {} calibrators, expected {expected}",
                calibrators.len()
            )));
        }
        Ok(TrainedPipeline {
            config: doc.config,
            system_ids: doc.system_ids,
            num_speakers: doc.num_speakers,
            calibrators,
            metalearner,
            epsilon: doc.epsilon,
            trained_on: doc.trained_on,
        })
    }
}
