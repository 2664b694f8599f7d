//! Bijective class-index <-> speaker-subset encoding and transforms between
//! the multilabel and powerset probability spaces.
//!
//! Class index `k` encodes the subset `{s : bit s of k is 1}`, so for two
//! speakers the class order is `[{}, {0}, {1}, {0,1}]`. The multilabel ->
//! powerset transform treats speakers as independent; the reverse transform
//! marginalizes each speaker over the classes containing it.

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::links::{logit, safe_log, sigmoid_mat, softmax_mat};
use crate::types::{FrameScoreMatrix, ProbSpace, ScoreKind};

/// Largest supported speaker count for powerset representations.
pub const MAX_POWERSET_SPEAKERS: usize = 20;

/// Mapping between class indices and speaker subsets.
#[derive(Debug, Clone, Copy)]
pub struct PowersetEncoding {
    num_speakers: usize,
}

impl PowersetEncoding {
    pub fn new(num_speakers: usize) -> Result<Self> {
        if num_speakers == 0 {
            return Err(Error::Contract("num_speakers must be >= 1".into()));
        }
        if num_speakers > MAX_POWERSET_SPEAKERS {
            return Err(Error::Capability(format!(
                "powerset space with {num_speakers} speakers needs 2^{num_speakers} classes; \
                 at most {MAX_POWERSET_SPEAKERS} speakers are supported"
            )));
        }
        Ok(Self { num_speakers })
    }

    pub fn num_speakers(&self) -> usize {
        self.num_speakers
    }

    pub fn class_count(&self) -> usize {
        1usize << self.num_speakers
    }

    /// True iff speaker `s` belongs to the subset encoded by `class`.
    pub fn class_contains(&self, class: usize, speaker: usize) -> bool {
        (class >> speaker) & 1 == 1
    }

    /// Class index of an activity pattern (one entry per speaker).
    pub fn class_of(&self, active: &[u8]) -> usize {
        active
            .iter()
            .enumerate()
            .fold(0usize, |k, (s, &a)| k | ((a as usize & 1) << s))
    }

    /// Speakers contained in `class`, in increasing order.
    pub fn subset(&self, class: usize) -> Vec<usize> {
        (0..self.num_speakers)
            .filter(|&s| self.class_contains(class, s))
            .collect()
    }
}

/// Multilabel probabilities to powerset probabilities under speaker
/// independence: `P(class) = prod_{s in class} p_s * prod_{s not in class} (1 - p_s)`.
pub fn mult_to_power(m: &FrameScoreMatrix) -> Result<FrameScoreMatrix> {
    m.expect_multilabel_prob("mult_to_power")?;
    let enc = PowersetEncoding::new(m.num_speakers)?;
    let (t, s) = (m.num_frames(), m.num_speakers);
    let k = enc.class_count();
    let mut out = Array2::<f64>::zeros((t, k));
    for (i, row) in m.values.rows().into_iter().enumerate() {
        out[[i, 0]] = 1.0;
        let mut filled = 1usize;
        for sp in 0..s {
            let p = row[sp];
            for c in (0..filled).rev() {
                let v = out[[i, c]];
                out[[i, c | (1 << sp)]] = v * p;
                out[[i, c]] = v * (1.0 - p);
            }
            filled <<= 1;
        }
    }
    Ok(FrameScoreMatrix {
        values: out,
        kind: ScoreKind::Probability,
        space: ProbSpace::Powerset,
        num_speakers: s,
        frame_rate_hz: m.frame_rate_hz,
        recording_id: m.recording_id.clone(),
    })
}

/// Powerset probabilities to multilabel marginals:
/// `p_s = sum_{class containing s} P(class)`.
pub fn power_to_mult(m: &FrameScoreMatrix) -> Result<FrameScoreMatrix> {
    if m.space != ProbSpace::Powerset || m.kind != ScoreKind::Probability {
        return Err(Error::Contract(
            "power_to_mult requires powerset probabilities".into(),
        ));
    }
    let enc = PowersetEncoding::new(m.num_speakers)?;
    let (t, s) = (m.num_frames(), m.num_speakers);
    let mut out = Array2::<f64>::zeros((t, s));
    for (i, row) in m.values.rows().into_iter().enumerate() {
        let sum: f64 = row.sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(Error::Contract(format!(
                "powerset row {i} sums to {sum}, expected 1 within 1e-6"
            )));
        }
        for sp in 0..s {
            let mut acc = 0.0;
            for (k, &q) in row.iter().enumerate() {
                if enc.class_contains(k, sp) {
                    acc += q;
                }
            }
            out[[i, sp]] = acc.clamp(0.0, 1.0);
        }
    }
    Ok(FrameScoreMatrix {
        values: out,
        kind: ScoreKind::Probability,
        space: ProbSpace::Multilabel,
        num_speakers: s,
        frame_rate_hz: m.frame_rate_hz,
        recording_id: m.recording_id.clone(),
    })
}

/// Probability matrix to logits: elementwise log-odds for multilabel,
/// clamped log-probabilities for powerset (softmax shift invariance makes
/// the normalizing constant immaterial).
pub fn to_logits(m: &FrameScoreMatrix, epsilon: f64) -> Result<FrameScoreMatrix> {
    if m.kind != ScoreKind::Probability {
        return Err(Error::Contract("to_logits requires probabilities".into()));
    }
    crate::links::check_epsilon(epsilon)?;
    let values = match m.space {
        ProbSpace::Multilabel => m.values.mapv(|p| logit(p, epsilon)),
        ProbSpace::Powerset => safe_log(&m.values, epsilon)?,
    };
    Ok(FrameScoreMatrix {
        values,
        kind: ScoreKind::Logit,
        space: m.space,
        num_speakers: m.num_speakers,
        frame_rate_hz: m.frame_rate_hz,
        recording_id: m.recording_id.clone(),
    })
}

/// Converts a probability matrix to the target space (identity when the
/// spaces already agree).
pub fn convert_space(m: &FrameScoreMatrix, target: ProbSpace) -> Result<FrameScoreMatrix> {
    match (m.space, target) {
        (ProbSpace::Multilabel, ProbSpace::Powerset) => mult_to_power(m),
        (ProbSpace::Powerset, ProbSpace::Multilabel) => power_to_mult(m),
        _ => Ok(m.clone()),
    }
}

/// Logit matrix to probabilities via the space's inverse link. Probability
/// inputs are returned unchanged.
pub fn to_probabilities(m: &FrameScoreMatrix) -> FrameScoreMatrix {
    if m.kind == ScoreKind::Probability {
        return m.clone();
    }
    let values = match m.space {
        ProbSpace::Multilabel => sigmoid_mat(&m.values),
        ProbSpace::Powerset => softmax_mat(&m.values),
    };
    FrameScoreMatrix {
        values,
        kind: ScoreKind::Probability,
        space: m.space,
        num_speakers: m.num_speakers,
        frame_rate_hz: m.frame_rate_hz,
        recording_id: m.recording_id.clone(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::links::sigmoid;
    use ndarray::array;
    use proptest::prelude::*;

    fn mult(values: Array2<f64>, s: usize) -> FrameScoreMatrix {
        FrameScoreMatrix::new(
            values,
            ScoreKind::Probability,
            ProbSpace::Multilabel,
            s,
            10.0,
            "rec",
        )
        .unwrap()
    }

    fn power(values: Array2<f64>, s: usize) -> FrameScoreMatrix {
        FrameScoreMatrix::new(
            values,
            ScoreKind::Probability,
            ProbSpace::Powerset,
            s,
            10.0,
            "rec",
        )
        .unwrap()
    }

    /// Brute-force oracle: direct product over every subset.
    fn product_row(p: &[f64]) -> Vec<f64> {
        let k = 1usize << p.len();
        (0..k)
            .map(|c| {
                p.iter()
                    .enumerate()
                    .map(|(s, &ps)| if (c >> s) & 1 == 1 { ps } else { 1.0 - ps })
                    .product()
            })
            .collect()
    }

    #[test]
    fn encoding_is_a_bijection_for_two_speakers() {
        let enc = PowersetEncoding::new(2).unwrap();
        assert_eq!(enc.class_count(), 4);
        assert_eq!(enc.subset(0), Vec::<usize>::new());
        assert_eq!(enc.subset(1), vec![0]);
        assert_eq!(enc.subset(2), vec![1]);
        assert_eq!(enc.subset(3), vec![0, 1]);
        for k in 0..4usize {
            let pattern: Vec<u8> = (0..2).map(|s| u8::from(enc.class_contains(k, s))).collect();
            assert_eq!(enc.class_of(&pattern), k);
        }
    }

    #[test]
    fn encoding_rejects_oversized_speaker_count() {
        assert!(PowersetEncoding::new(21).is_err());
        assert!(PowersetEncoding::new(0).is_err());
    }

    #[test]
    fn mult_to_power_examples() {
        let m = mult(array![[1.0, 0.0], [0.5, 0.5], [0.9, 0.2]], 2);
        let q = mult_to_power(&m).unwrap();
        assert_eq!(q.values.row(0).to_vec(), vec![0.0, 1.0, 0.0, 0.0]);
        for v in q.values.row(1) {
            assert!((v - 0.25).abs() < 1e-15);
        }
        let expected = product_row(&[0.9, 0.2]);
        for (e, h) in expected.iter().zip([0.08, 0.72, 0.02, 0.18]) {
            assert!((e - h).abs() < 1e-15);
        }
        for (v, e) in q.values.row(2).iter().zip(&expected) {
            assert!((v - e).abs() < 1e-15);
        }
    }

    #[test]
    fn power_to_mult_examples() {
        let q = power(
            array![
                [0.0, 1.0, 0.0, 0.0],
                [0.25, 0.25, 0.25, 0.25],
                [0.08, 0.72, 0.02, 0.18]
            ],
            2,
        );
        let m = power_to_mult(&q).unwrap();
        assert_eq!(m.values.row(0).to_vec(), vec![1.0, 0.0]);
        assert_eq!(m.values.row(1).to_vec(), vec![0.5, 0.5]);
        assert!((m.values[[2, 0]] - 0.9).abs() < 1e-12);
        assert!((m.values[[2, 1]] - 0.2).abs() < 1e-12);
    }

    #[test]
    fn non_product_rows_are_not_fixed_points() {
        let q = power(array![[0.5, 0.0, 0.0, 0.5]], 2);
        let back = mult_to_power(&power_to_mult(&q).unwrap()).unwrap();
        // marginals are [0.5, 0.5] so the product reconstruction is uniform
        assert!((back.values[[0, 0]] - 0.25).abs() < 1e-12);
        assert!((back.values[[0, 0]] - q.values[[0, 0]]).abs() > 0.1);

        // while genuine product rows are fixed points
        let prod = power(
            Array2::from_shape_vec((1, 4), product_row(&[0.3, 0.8])).unwrap(),
            2,
        );
        let back = mult_to_power(&power_to_mult(&prod).unwrap()).unwrap();
        for (a, b) in back.values.iter().zip(prod.values.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn to_logits_multilabel_and_powerset() {
        let m = mult(array![[0.5, 0.2]], 2);
        let z = to_logits(&m, 1e-7).unwrap();
        assert_eq!(z.values[[0, 0]], 0.0);
        assert!((sigmoid(z.values[[0, 1]]) - 0.2).abs() < 1e-12);

        let q = power(array![[0.25, 0.25, 0.25, 0.25]], 2);
        let zq = to_logits(&q, 1e-7).unwrap();
        let first = zq.values[[0, 0]];
        assert!(zq.values.iter().all(|v| (v - first).abs() < 1e-15));
        let back = to_probabilities(&zq);
        for v in back.values.iter() {
            assert!((v - 0.25).abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn round_trip_is_identity(p in proptest::collection::vec(0.0f64..=1.0, 1..=3)) {
            let s = p.len();
            let m = mult(Array2::from_shape_vec((1, s), p).unwrap(), s);
            let back = power_to_mult(&mult_to_power(&m).unwrap()).unwrap();
            for (a, b) in back.values.iter().zip(m.values.iter()) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn marginalization_is_linear(
            a in proptest::collection::vec(0.01f64..=0.99, 2),
            b in proptest::collection::vec(0.01f64..=0.99, 2),
            alpha in 0.0f64..=1.0,
        ) {
            let qa = mult_to_power(&mult(Array2::from_shape_vec((1, 2), a).unwrap(), 2)).unwrap();
            let qb = mult_to_power(&mult(Array2::from_shape_vec((1, 2), b).unwrap(), 2)).unwrap();
            let mix_vals = &qa.values * alpha + &qb.values * (1.0 - alpha);
            let mix = power(mix_vals, 2);
            let lhs = power_to_mult(&mix).unwrap();
            let rhs = &power_to_mult(&qa).unwrap().values * alpha
                + &power_to_mult(&qb).unwrap().values * (1.0 - alpha);
            for (x, y) in lhs.values.iter().zip(rhs.iter()) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }

        #[test]
        fn sigmoid_inverts_multilabel_logits(p in 1e-6f64..=0.999999) {
            let m = mult(array![[p]], 1);
            let z = to_logits(&m, 1e-7).unwrap();
            let back = to_probabilities(&z);
            prop_assert!((back.values[[0,0]] - p).abs() < 1e-9);
        }
    }
}
