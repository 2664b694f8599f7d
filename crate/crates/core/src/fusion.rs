//! Frame-level fusion of aligned diarization systems.
//!
//! Four unsupervised rules (probability averaging, logit averaging,
//! confidence-weighted dynamic logits, inverse-entropy weighting) plus a
//! supervised MetaLearner that fits an affine map over the concatenated
//! system logits. All rules work in either probability space; inputs are
//! normalized to probabilities and logits are always derived through
//! [`crate::spaces::to_logits`] with the standard clamp.

use itertools::Itertools;
use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::assignment::{hungarian_min_cost, Permutation};
use crate::error::{Error, Result};
use crate::links::DEFAULT_EPSILON;
use crate::optim::{
    minimize_regularized_cross_entropy, FitOptions, FitResult, Link, Targets,
};
use crate::spaces::{to_logits, to_probabilities};
use crate::types::{FrameScoreMatrix, ProbSpace, ScoreKind};

/// Unsupervised fusion rules.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionRule {
    AverageProbs,
    AverageLogits,
    DynamicLogits,
    Entropy,
}

/// A set of aligned per-system score matrices for one recording.
#[derive(Debug, Clone)]
pub struct FusionInput {
    probs: Vec<FrameScoreMatrix>,
    system_ids: Vec<String>,
    epsilon: f64,
}

impl FusionInput {
    /// Normalizes the systems to probability kind and checks that shapes,
    /// spaces, speaker counts and frame rates agree.
    pub fn new(systems: &[FrameScoreMatrix], system_ids: &[String]) -> Result<Self> {
        Self::with_epsilon(systems, system_ids, DEFAULT_EPSILON)
    }

    pub fn with_epsilon(
        systems: &[FrameScoreMatrix],
        system_ids: &[String],
        epsilon: f64,
    ) -> Result<Self> {
        if systems.is_empty() {
            return Err(Error::Contract("fusion needs at least one system".into()));
        }
        if systems.len() != system_ids.len() {
            return Err(Error::Contract("system id count mismatch".into()));
        }
        let first = &systems[0];
        for m in systems.iter().skip(1) {
            if m.num_frames() != first.num_frames()
                || m.space != first.space
                || m.num_speakers != first.num_speakers
                || m.frame_rate_hz != first.frame_rate_hz
            {
                return Err(Error::Contract(
                    "fusion inputs must share shape, space, speakers and frame rate".into(),
                ));
            }
        }
        let probs = systems.iter().map(to_probabilities).collect();
        Ok(Self {
            probs,
            system_ids: system_ids.to_vec(),
            epsilon,
        })
    }

    pub fn num_systems(&self) -> usize {
        self.probs.len()
    }

    pub fn system_ids(&self) -> &[String] {
        &self.system_ids
    }

    pub fn probabilities(&self) -> &[FrameScoreMatrix] {
        &self.probs
    }

    fn logits(&self) -> Result<Vec<FrameScoreMatrix>> {
        self.probs.iter().map(|m| to_logits(m, self.epsilon)).collect()
    }

    fn template(&self, values: Array2<f64>) -> FrameScoreMatrix {
        let first = &self.probs[0];
        FrameScoreMatrix {
            values,
            kind: ScoreKind::Probability,
            space: first.space,
            num_speakers: first.num_speakers,
            frame_rate_hz: first.frame_rate_hz,
            recording_id: first.recording_id.clone(),
        }
    }

    fn inverse_link(&self, mut logits: Array2<f64>) -> FrameScoreMatrix {
        match self.probs[0].space {
            ProbSpace::Multilabel => logits.mapv_inplace(crate::links::sigmoid),
            ProbSpace::Powerset => {
                for row in logits.rows_mut() {
                    crate::links::softmax_row(row);
                }
            }
        }
        self.template(logits)
    }
}

/// Squared-difference cost between anchor column `i` and candidate column `j`.
fn column_costs(anchor: &FrameScoreMatrix, other: &FrameScoreMatrix) -> Array2<f64> {
    let s = anchor.dim();
    let mut cost = Array2::<f64>::zeros((s, s));
    for i in 0..s {
        for j in 0..s {
            let mut acc = 0.0;
            for t in 0..anchor.num_frames() {
                let d = anchor.values[[t, i]] - other.values[[t, j]];
                acc += d * d;
            }
            cost[[i, j]] = acc;
        }
    }
    cost
}

fn best_permutation_from_costs(cost: &Array2<f64>) -> Result<Permutation> {
    let s = cost.nrows();
    if s <= 6 {
        let mut best: Option<(f64, Vec<usize>)> = None;
        for perm in (0..s).permutations(s) {
            let total: f64 = (0..s).map(|i| cost[[i, perm[i]]]).sum();
            let better = match &best {
                None => true,
                Some((bt, _)) => total < *bt,
            };
            if better {
                best = Some((total, perm));
            }
        }
        Ok(Permutation(best.expect("non-empty permutation set").1))
    } else {
        Ok(Permutation(hungarian_min_cost(cost)?))
    }
}

/// For each non-anchor system, the column permutation minimizing the total
/// squared difference to the anchor. Ties resolve to the lexicographically
/// smallest permutation.
pub fn align_systems(
    anchor: &FrameScoreMatrix,
    others: &[&FrameScoreMatrix],
) -> Result<Vec<Permutation>> {
    anchor.expect_multilabel_prob("align_systems")?;
    let mut perms = Vec::with_capacity(others.len());
    for other in others {
        other.expect_multilabel_prob("align_systems")?;
        if other.num_frames() != anchor.num_frames() || other.dim() != anchor.dim() {
            return Err(Error::Contract(
                "align_systems inputs must share shape".into(),
            ));
        }
        perms.push(best_permutation_from_costs(&column_costs(anchor, other))?);
    }
    Ok(perms)
}

/// Elementwise mean of the system probabilities.
pub fn average_probs(input: &FusionInput) -> Result<FrameScoreMatrix> {
    let m = input.num_systems() as f64;
    let mut acc = input.probs[0].values.clone();
    for sys in &input.probs[1..] {
        acc += &sys.values;
    }
    acc.mapv_inplace(|v| v / m);
    Ok(input.template(acc))
}

/// Inverse link of the mean system logits.
pub fn average_logits(input: &FusionInput) -> Result<FrameScoreMatrix> {
    let logits = input.logits()?;
    let m = logits.len() as f64;
    let mut acc = logits[0].values.clone();
    for sys in &logits[1..] {
        acc += &sys.values;
    }
    acc.mapv_inplace(|v| v / m);
    Ok(input.inverse_link(acc))
}

/// Confidence-weighted logit fusion: per frame, each system is weighted by
/// its share of the total absolute logit mass. All-zero frames fall back to
/// equal weights.
pub fn dynamic_logits(input: &FusionInput) -> Result<FrameScoreMatrix> {
    let logits = input.logits()?;
    let (t, d) = (logits[0].values.nrows(), logits[0].values.ncols());
    let m = logits.len();
    let mut fused = Array2::<f64>::zeros((t, d));
    for i in 0..t {
        let masses: Vec<f64> = logits
            .iter()
            .map(|sys| sys.values.row(i).iter().map(|v| v.abs()).sum())
            .collect();
        let total: f64 = masses.iter().sum();
        for (k, sys) in logits.iter().enumerate() {
            let w = if total > 0.0 {
                masses[k] / total
            } else {
                1.0 / m as f64
            };
            for j in 0..d {
                fused[[i, j]] += w * sys.values[[i, j]];
            }
        }
    }
    Ok(input.inverse_link(fused))
}

/// Inverse-entropy weighted probability mixture. Raw weights
/// `H_max - H(p_m)` are clamped below at zero (multilabel entropy can exceed
/// `log S`); if every weight clamps to zero the systems mix equally.
pub fn entropy_fusion(input: &FusionInput) -> Result<FrameScoreMatrix> {
    let (t, d) = (
        input.probs[0].values.nrows(),
        input.probs[0].values.ncols(),
    );
    let m = input.num_systems();
    let h_max = (d as f64).ln();
    let mut fused = Array2::<f64>::zeros((t, d));
    for i in 0..t {
        let raw: Vec<f64> = input
            .probs
            .iter()
            .map(|sys| {
                let h: f64 = sys
                    .values
                    .row(i)
                    .iter()
                    .map(|&p| if p > 0.0 { -p * p.ln() } else { 0.0 })
                    .sum();
                (h_max - h).max(0.0)
            })
            .collect();
        let total: f64 = raw.iter().sum();
        for (k, sys) in input.probs.iter().enumerate() {
            let w = if total > 0.0 {
                raw[k] / total
            } else {
                1.0 / m as f64
            };
            for j in 0..d {
                fused[[i, j]] += w * sys.values[[i, j]];
            }
        }
    }
    Ok(input.template(fused))
}

/// Applies one of the unsupervised rules.
pub fn fuse_unsupervised(input: &FusionInput, rule: FusionRule) -> Result<FrameScoreMatrix> {
    match rule {
        FusionRule::AverageProbs => average_probs(input),
        FusionRule::AverageLogits => average_logits(input),
        FusionRule::DynamicLogits => dynamic_logits(input),
        FusionRule::Entropy => entropy_fusion(input),
    }
}

/// Supervised fusion weights over concatenated system logits.
#[derive(Debug, Clone, PartialEq)]
pub struct MetaLearnerModel {
    /// `D x (M * D)` weight matrix.
    pub weights: Array2<f64>,
    pub bias: Vec<f64>,
    pub space: ProbSpace,
    pub num_speakers: usize,
    pub system_ids: Vec<String>,
    pub epsilon: f64,
    /// Final penalized training objective, kept for reproducibility checks.
    pub final_loss: f64,
    pub trained_on: String,
}

/// Concatenates per-system logit blocks row-wise into `N x (M * D)` features.
pub fn concat_logits(logits: &[Array2<f64>]) -> Result<Array2<f64>> {
    let n = logits[0].nrows();
    if logits.iter().any(|l| l.nrows() != n) {
        return Err(Error::Contract(
            "metalearner systems disagree on frame count".into(),
        ));
    }
    let d = logits[0].ncols();
    let mut out = Array2::<f64>::zeros((n, logits.len() * d));
    for (k, block) in logits.iter().enumerate() {
        if block.ncols() != d {
            return Err(Error::Contract(
                "metalearner systems disagree on dimension".into(),
            ));
        }
        out.slice_mut(ndarray::s![.., k * d..(k + 1) * d]).assign(block);
    }
    Ok(out)
}

/// Fits the MetaLearner by regularized cross-entropy over concatenated
/// training logits (one `N x D` block per system, already reference-aligned).
pub fn fit_metalearner(
    system_logits: &[Array2<f64>],
    targets: &Targets,
    space: ProbSpace,
    num_speakers: usize,
    system_ids: &[String],
    l2_c: f64,
    epsilon: f64,
) -> Result<MetaLearnerModel> {
    if system_logits.is_empty() {
        return Err(Error::Contract("metalearner needs at least one system".into()));
    }
    if system_logits.len() != system_ids.len() {
        return Err(Error::Contract("system id count mismatch".into()));
    }
    let d = space.dim(num_speakers);
    if system_logits[0].ncols() != d {
        return Err(Error::Contract(format!(
            "system logits have {} columns, expected {d}",
            system_logits[0].ncols()
        )));
    }
    let features = concat_logits(system_logits)?;
    let link = match space {
        ProbSpace::Multilabel => Link::ElementwiseSigmoid,
        ProbSpace::Powerset => Link::Softmax,
    };
    let fit: FitResult = minimize_regularized_cross_entropy(
        &features,
        targets,
        link,
        &FitOptions {
            l2_c,
            ..Default::default()
        },
    )?;
    Ok(MetaLearnerModel {
        weights: fit.weights,
        bias: fit.bias.to_vec(),
        space,
        num_speakers,
        system_ids: system_ids.to_vec(),
        epsilon,
        final_loss: fit.final_loss,
        trained_on: String::new(),
    })
}

/// Applies the MetaLearner: `p = link(W concat(z_m) + b)`. The system order
/// must match the fitted order exactly; nothing is silently reordered.
pub fn apply_metalearner(
    model: &MetaLearnerModel,
    input: &FusionInput,
) -> Result<FrameScoreMatrix> {
    if input.system_ids() != model.system_ids.as_slice() {
        return Err(Error::Contract(format!(
            "system order mismatch: model fitted on {:?}, input has {:?}",
            model.system_ids,
            input.system_ids()
        )));
    }
    if input.probs[0].space != model.space || input.probs[0].num_speakers != model.num_speakers {
        return Err(Error::Contract(
            "metalearner space/speaker mismatch".into(),
        ));
    }
    let logits = input.logits()?;
    let blocks: Vec<Array2<f64>> = logits.into_iter().map(|m| m.values).collect();
    let features = concat_logits(&blocks)?;
    let mut scores = features.dot(&model.weights.t());
    let bias = Array1::from_vec(model.bias.clone());
    for mut row in scores.rows_mut() {
        row += &bias;
    }
    Ok(input.inverse_link(scores))
}

#[derive(Serialize, Deserialize)]
pub(crate) struct MetaLearnerDoc {
    space: ProbSpace,
    #[serde(rename = "S")]
    num_speakers: usize,
    m_systems: usize,
    system_ids: Vec<String>,
    /// Row-major `D x (M * D)` weights.
    weights: Vec<f64>,
    bias: Vec<f64>,
    epsilon: f64,
    final_loss: f64,
    trained_on: String,
}

impl From<&MetaLearnerModel> for MetaLearnerDoc {
    fn from(model: &MetaLearnerModel) -> Self {
        MetaLearnerDoc {
            space: model.space,
            num_speakers: model.num_speakers,
            m_systems: model.system_ids.len(),
            system_ids: model.system_ids.clone(),
            weights: model.weights.iter().copied().collect(),
            bias: model.bias.clone(),
            epsilon: model.epsilon,
            final_loss: model.final_loss,
            trained_on: model.trained_on.clone(),
        }
    }
}

impl TryFrom<MetaLearnerDoc> for MetaLearnerModel {
    type Error = Error;

    fn try_from(doc: MetaLearnerDoc) -> Result<Self> {
        let d = doc.space.dim(doc.num_speakers);
        let cols = doc.m_systems * d;
        if doc.weights.len() != d * cols {
            return Err(Error::Contract(format!(
                "metalearner weights must have {} entries, got {}",
                d * cols,
                doc.weights.len()
            )));
        }
        if doc.bias.len() != d || doc.system_ids.len() != doc.m_systems {
            return Err(Error::Contract("metalearner document is inconsistent".into()));
        }
        Ok(MetaLearnerModel {
            weights: Array2::from_shape_vec((d, cols), doc.weights).expect("shape"),
            bias: doc.bias,
            space: doc.space,
            num_speakers: doc.num_speakers,
            system_ids: doc.system_ids,
            epsilon: doc.epsilon,
            final_loss: doc.final_loss,
            trained_on: doc.trained_on,
        })
    }
}

impl MetaLearnerModel {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&MetaLearnerDoc::from(self))?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: MetaLearnerDoc = serde_json::from_str(text)?;
        doc.try_into()
    }
}
