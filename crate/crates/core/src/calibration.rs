//! Post-hoc Platt-scaling calibration.
//!
//! Three parameterizations are supported:
//!
//! * `independent_mult` — one `sigmoid(alpha_s * feat(p_s) + beta_s)` per
//!   speaker, each fitted separately;
//! * `joint_mult` — `sigmoid(A feat(p) + b)` with a full `S x S` matrix;
//! * `joint_power` — `softmax(W feat(p) + b)` over the `K = 2^S` powerset
//!   classes.
//!
//! The calibration feature is the clamped log-probability by default; a
//! `logit` feature is available as a configuration switch. All fits minimize
//! the regularized cross-entropy via [`crate::optim`].

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::links::{logit, safe_log, sigmoid, softmax_row, DEFAULT_EPSILON};
use crate::optim::{
    mean_cross_entropy, minimize_regularized_cross_entropy, FitOptions, Link, Targets,
};
use crate::types::{FrameScoreMatrix, ProbSpace, ScoreKind};

/// Which calibration family to fit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CalibrationStrategy {
    IndependentMult,
    JointMult,
    JointPower,
}

impl CalibrationStrategy {
    pub fn space(self) -> ProbSpace {
        match self {
            CalibrationStrategy::IndependentMult | CalibrationStrategy::JointMult => {
                ProbSpace::Multilabel
            }
            CalibrationStrategy::JointPower => ProbSpace::Powerset,
        }
    }
}

/// Feature map applied to probabilities before the affine transform.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CalibrationFeature {
    /// Clamped `log(p)`.
    #[default]
    Log,
    /// Clamped log-odds; for powerset inputs this is identical to `log`
    /// up to a per-frame shift only in the multilabel case, so it applies
    /// elementwise there too.
    Logit,
}

/// Fitted Platt-scaling parameters bound to a probability space.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationModel {
    pub strategy: CalibrationStrategy,
    pub space: ProbSpace,
    pub num_speakers: usize,
    /// Per-speaker scale for `independent_mult`, full matrix otherwise.
    pub scale: CalScale,
    pub bias: Vec<f64>,
    pub epsilon: f64,
    pub feature: CalibrationFeature,
    pub trained_on: String,
}

/// Scale parameters: a vector for the independent family, a matrix for the
/// joint families.
#[derive(Debug, Clone, PartialEq)]
pub enum CalScale {
    Vector(Vec<f64>),
    Matrix(Array2<f64>),
}

/// Options shared by every calibration fit.
#[derive(Debug, Clone)]
pub struct CalibrationOptions {
    pub l2_c: f64,
    pub max_iter: usize,
    pub epsilon: f64,
    pub feature: CalibrationFeature,
}

impl Default for CalibrationOptions {
    fn default() -> Self {
        Self {
            l2_c: 1.0,
            max_iter: 1000,
            epsilon: DEFAULT_EPSILON,
            feature: CalibrationFeature::Log,
        }
    }
}

/// Pooled per-frame training data for one calibration fit.
///
/// `probs` are raw probabilities in the model's space (`N x D`); targets are
/// the matching per-frame labels.
#[derive(Debug, Clone)]
pub struct CalibrationTrainingSet {
    pub probs: Array2<f64>,
    pub targets: Targets,
    pub space: ProbSpace,
    pub num_speakers: usize,
    pub sample_weights: Option<Vec<f64>>,
    pub trained_on: String,
}

impl CalibrationTrainingSet {
    fn validate(&self) -> Result<()> {
        if self.probs.nrows() == 0 {
            return Err(Error::Contract("empty calibration training set".into()));
        }
        if self.probs.nrows() != self.targets.num_samples() {
            return Err(Error::Contract(
                "calibration features/targets row mismatch".into(),
            ));
        }
        let d = self.space.dim(self.num_speakers);
        if self.probs.ncols() != d {
            return Err(Error::Contract(format!(
                "calibration probabilities have {} columns, expected {d}",
                self.probs.ncols()
            )));
        }
        Ok(())
    }
}

fn feature_map(
    probs: &Array2<f64>,
    feature: CalibrationFeature,
    epsilon: f64,
) -> Result<Array2<f64>> {
    match feature {
        CalibrationFeature::Log => safe_log(probs, epsilon),
        CalibrationFeature::Logit => {
            crate::links::check_epsilon(epsilon)?;
            Ok(probs.mapv(|p| logit(p, epsilon)))
        }
    }
}

/// Fits a calibration model of the requested strategy on pooled frames.
pub fn fit_calibration(
    train: &CalibrationTrainingSet,
    strategy: CalibrationStrategy,
    opts: &CalibrationOptions,
) -> Result<CalibrationModel> {
    train.validate()?;
    if train.space != strategy.space() {
        return Err(Error::Contract(format!(
            "{strategy:?} calibrates in {:?} space but training data is {:?}",
            strategy.space(),
            train.space
        )));
    }
    let s = train.num_speakers;
    let features = feature_map(&train.probs, opts.feature, opts.epsilon)?;
    let fit_opts = FitOptions {
        l2_c: opts.l2_c,
        max_iter: opts.max_iter,
        sample_weights: train.sample_weights.clone(),
        ..Default::default()
    };

    let (scale, bias) = match strategy {
        CalibrationStrategy::IndependentMult => {
            let Targets::Binary(y) = &train.targets else {
                return Err(Error::Contract(
                    "multilabel calibration needs binary targets".into(),
                ));
            };
            let mut alphas = Vec::with_capacity(s);
            let mut betas = Vec::with_capacity(s);
            for sp in 0..s {
                let col = features.column(sp).insert_axis(ndarray::Axis(1)).to_owned();
                let target_col = y.column(sp).insert_axis(ndarray::Axis(1)).to_owned();
                let fit = minimize_regularized_cross_entropy(
                    &col,
                    &Targets::Binary(target_col),
                    Link::ElementwiseSigmoid,
                    &fit_opts,
                )?;
                alphas.push(fit.weights[[0, 0]]);
                betas.push(fit.bias[0]);
            }
            (CalScale::Vector(alphas), betas)
        }
        CalibrationStrategy::JointMult => {
            if !matches!(train.targets, Targets::Binary(_)) {
                return Err(Error::Contract(
                    "multilabel calibration needs binary targets".into(),
                ));
            }
            let fit = minimize_regularized_cross_entropy(
                &features,
                &train.targets,
                Link::ElementwiseSigmoid,
                &fit_opts,
            )?;
            (CalScale::Matrix(fit.weights), fit.bias.to_vec())
        }
        CalibrationStrategy::JointPower => {
            let Targets::Class { num_classes, .. } = &train.targets else {
                return Err(Error::Contract(
                    "powerset calibration needs class targets".into(),
                ));
            };
            let k = *num_classes;
            if k != 1usize << s {
                return Err(Error::Contract(format!(
                    "powerset targets declare {k} classes, expected {}",
                    1usize << s
                )));
            }
            let identity = Array2::<f64>::eye(k);
            let zero_bias = Array1::<f64>::zeros(k);
            let fit = minimize_regularized_cross_entropy(
                &features,
                &train.targets,
                Link::Softmax,
                &FitOptions {
                    init: Some((identity.clone(), zero_bias.clone())),
                    ..fit_opts
                },
            )?;
            // keep the identity if the fit somehow ends up worse in raw CE
            let fit_ce = mean_cross_entropy(
                &features,
                &train.targets,
                Link::Softmax,
                &fit.weights,
                &fit.bias,
                train.sample_weights.as_deref(),
            )?;
            let id_ce = mean_cross_entropy(
                &features,
                &train.targets,
                Link::Softmax,
                &identity,
                &zero_bias,
                train.sample_weights.as_deref(),
            )?;
            if id_ce < fit_ce {
                (CalScale::Matrix(identity), zero_bias.to_vec())
            } else {
                (CalScale::Matrix(fit.weights), fit.bias.to_vec())
            }
        }
    };

    Ok(CalibrationModel {
        strategy,
        space: strategy.space(),
        num_speakers: s,
        scale,
        bias,
        epsilon: opts.epsilon,
        feature: opts.feature,
        trained_on: train.trained_on.clone(),
    })
}

/// Applies a fitted model: `p_cal = link(scale * feat(p) + bias)`.
pub fn apply_calibration(
    model: &CalibrationModel,
    m: &FrameScoreMatrix,
) -> Result<FrameScoreMatrix> {
    if m.space != model.space {
        return Err(Error::Contract(format!(
            "calibration model is bound to {:?} space but input is {:?}",
            model.space, m.space
        )));
    }
    if m.kind != ScoreKind::Probability {
        return Err(Error::Contract(
            "apply_calibration requires probabilities".into(),
        ));
    }
    if m.num_speakers != model.num_speakers {
        return Err(Error::Contract(format!(
            "model fitted for {} speakers, input has {}",
            model.num_speakers, m.num_speakers
        )));
    }
    let features = feature_map(&m.values, model.feature, model.epsilon)?;
    let bias = Array1::from_vec(model.bias.clone());
    let mut scores = match &model.scale {
        CalScale::Vector(alpha) => {
            let mut z = features;
            for mut row in z.rows_mut() {
                for (v, a) in row.iter_mut().zip(alpha) {
                    *v *= a;
                }
                row += &bias;
            }
            z
        }
        CalScale::Matrix(w) => {
            let mut z = features.dot(&w.t());
            for mut row in z.rows_mut() {
                row += &bias;
            }
            z
        }
    };
    match model.strategy {
        CalibrationStrategy::IndependentMult | CalibrationStrategy::JointMult => {
            scores.mapv_inplace(sigmoid);
        }
        CalibrationStrategy::JointPower => {
            for row in scores.rows_mut() {
                softmax_row(row);
            }
        }
    }
    Ok(FrameScoreMatrix {
        values: scores,
        kind: ScoreKind::Probability,
        space: m.space,
        num_speakers: m.num_speakers,
        frame_rate_hz: m.frame_rate_hz,
        recording_id: m.recording_id.clone(),
    })
}

#[derive(Serialize, Deserialize)]
pub(crate) struct CalibrationModelDoc {
    strategy: CalibrationStrategy,
    space: ProbSpace,
    #[serde(rename = "S")]
    num_speakers: usize,
    #[serde(rename = "K")]
    num_classes: usize,
    /// Row-major scale parameters: length `S` for the independent family,
    /// `S*S` or `K*K` for the joint families.
    scale: Vec<f64>,
    bias: Vec<f64>,
    epsilon: f64,
    #[serde(default)]
    feature: CalibrationFeature,
    trained_on: String,
}

impl From<&CalibrationModel> for CalibrationModelDoc {
    fn from(model: &CalibrationModel) -> Self {
        let scale: Vec<f64> = match &model.scale {
            CalScale::Vector(v) => v.clone(),
            CalScale::Matrix(m) => m.iter().copied().collect(),
        };
        CalibrationModelDoc {
            strategy: model.strategy,
            space: model.space,
            num_speakers: model.num_speakers,
            num_classes: 1usize << model.num_speakers,
            scale,
            bias: model.bias.clone(),
            epsilon: model.epsilon,
            feature: model.feature,
            trained_on: model.trained_on.clone(),
        }
    }
}

impl TryFrom<CalibrationModelDoc> for CalibrationModel {
    type Error = Error;

    fn try_from(doc: CalibrationModelDoc) -> Result<Self> {
        let d = doc.strategy.space().dim(doc.num_speakers);
        let scale = match doc.strategy {
            CalibrationStrategy::IndependentMult => {
                if doc.scale.len() != d {
                    return Err(Error::Contract(format!(
                        "independent scale must have {d} entries, got {}",
                        doc.scale.len()
                    )));
                }
                CalScale::Vector(doc.scale)
            }
            _ => {
                if doc.scale.len() != d * d {
                    return Err(Error::Contract(format!(
                        "joint scale must have {} entries, got {}",
                        d * d,
                        doc.scale.len()
                    )));
                }
                CalScale::Matrix(Array2::from_shape_vec((d, d), doc.scale).expect("shape"))
            }
        };
        if doc.bias.len() != d {
            return Err(Error::Contract(format!(
                "bias must have {d} entries, got {}",
                doc.bias.len()
            )));
        }
        Ok(CalibrationModel {
            strategy: doc.strategy,
            space: doc.strategy.space(),
            num_speakers: doc.num_speakers,
            scale,
            bias: doc.bias,
            epsilon: doc.epsilon,
            feature: doc.feature,
            trained_on: doc.trained_on,
        })
    }
}

impl CalibrationModel {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&CalibrationModelDoc::from(self))?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: CalibrationModelDoc = serde_json::from_str(text)?;
        doc.try_into()
    }
}
