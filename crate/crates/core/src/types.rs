//! Frame-level score and activity matrices shared by every stage of the
//! toolkit.
//!
//! A [`FrameScoreMatrix`] is a `T x D` matrix of per-frame scores for one
//! recording, tagged with the representation it lives in: probabilities or
//! logits, multilabel (`D = S` speakers) or powerset (`D = 2^S` speaker
//! subsets). A [`BinaryActivityMatrix`] holds hard `{0,1}` speaker activity.
//!
//! All types are plain immutable data; they can be shared read-only across
//! threads.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Whether matrix entries are probabilities or logits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreKind {
    Probability,
    Logit,
}

/// The probability space a matrix lives in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbSpace {
    /// One independent activity score per speaker (`D = S`).
    Multilabel,
    /// One mutually exclusive class per speaker subset (`D = 2^S`).
    Powerset,
}

impl ProbSpace {
    /// Number of columns a matrix in this space must have for `S` speakers.
    pub fn dim(self, num_speakers: usize) -> usize {
        match self {
            ProbSpace::Multilabel => num_speakers,
            ProbSpace::Powerset => 1usize << num_speakers,
        }
    }
}

/// Row-sum tolerance accepted when validating powerset probability rows.
pub const SIMPLEX_TOL: f64 = 1e-9;

/// Per-frame scores for one recording.
#[derive(Debug, Clone)]
pub struct FrameScoreMatrix {
    /// `T x D` score values.
    pub values: Array2<f64>,
    pub kind: ScoreKind,
    pub space: ProbSpace,
    pub num_speakers: usize,
    pub frame_rate_hz: f64,
    pub recording_id: String,
}

impl FrameScoreMatrix {
    /// Builds a matrix and checks the representation invariants.
    pub fn new(
        values: Array2<f64>,
        kind: ScoreKind,
        space: ProbSpace,
        num_speakers: usize,
        frame_rate_hz: f64,
        recording_id: impl Into<String>,
    ) -> Result<Self> {
        let m = Self {
            values,
            kind,
            space,
            num_speakers,
            frame_rate_hz,
            recording_id: recording_id.into(),
        };
        m.validate()?;
        Ok(m)
    }

    pub fn num_frames(&self) -> usize {
        self.values.nrows()
    }

    pub fn dim(&self) -> usize {
        self.values.ncols()
    }

    /// Checks shape and value-range invariants for the declared kind/space.
    pub fn validate(&self) -> Result<()> {
        if self.num_speakers < 1 {
            return Err(Error::Contract("num_speakers must be >= 1".into()));
        }
        if !(self.frame_rate_hz > 0.0) {
            return Err(Error::Contract(format!(
                "frame_rate_hz must be positive, got {}",
                self.frame_rate_hz
            )));
        }
        let expected = self.space.dim(self.num_speakers);
        if self.dim() != expected {
            return Err(Error::Contract(format!(
                "matrix has {} columns but {:?} space with {} speakers requires {}",
                self.dim(),
                self.space,
                self.num_speakers,
                expected
            )));
        }
        if !self.values.iter().all(|v| v.is_finite()) {
            return Err(Error::Contract("matrix contains non-finite values".into()));
        }
        if self.kind == ScoreKind::Probability {
            if self.values.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
                return Err(Error::Contract(
                    "probability matrix has entries outside [0,1]".into(),
                ));
            }
            if self.space == ProbSpace::Powerset {
                for (t, row) in self.values.rows().into_iter().enumerate() {
                    let sum: f64 = row.sum();
                    if (sum - 1.0).abs() > SIMPLEX_TOL {
                        return Err(Error::Contract(format!(
                            "powerset row {t} sums to {sum}, expected 1"
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    /// Ensures the matrix is a multilabel probability matrix.
    pub fn expect_multilabel_prob(&self, op: &str) -> Result<()> {
        if self.space != ProbSpace::Multilabel || self.kind != ScoreKind::Probability {
            return Err(Error::Contract(format!(
                "{op} requires multilabel probabilities, got {:?} {:?}",
                self.space, self.kind
            )));
        }
        Ok(())
    }
}

/// Hard `{0,1}` per-frame speaker activity for one recording.
#[derive(Debug, Clone, PartialEq)]
pub struct BinaryActivityMatrix {
    /// `T x S` indicator values.
    pub values: Array2<u8>,
    pub frame_rate_hz: f64,
    pub recording_id: String,
}

impl BinaryActivityMatrix {
    pub fn new(
        values: Array2<u8>,
        frame_rate_hz: f64,
        recording_id: impl Into<String>,
    ) -> Result<Self> {
        if values.iter().any(|&v| v > 1) {
            return Err(Error::Contract(
                "activity matrix entries must be 0 or 1".into(),
            ));
        }
        Ok(Self {
            values,
            frame_rate_hz,
            recording_id: recording_id.into(),
        })
    }

    pub fn num_frames(&self) -> usize {
        self.values.nrows()
    }

    pub fn num_speakers(&self) -> usize {
        self.values.ncols()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn multilabel_dim_must_match_speakers() {
        let err = FrameScoreMatrix::new(
            array![[0.1, 0.2, 0.3]],
            ScoreKind::Probability,
            ProbSpace::Multilabel,
            2,
            10.0,
            "rec",
        );
        assert!(err.is_err());
    }

    #[test]
    fn powerset_rows_must_be_on_simplex() {
        let bad = FrameScoreMatrix::new(
            array![[0.5, 0.2, 0.2, 0.2]],
            ScoreKind::Probability,
            ProbSpace::Powerset,
            2,
            10.0,
            "rec",
        );
        assert!(bad.is_err());
        let ok = FrameScoreMatrix::new(
            array![[0.4, 0.2, 0.2, 0.2]],
            ScoreKind::Probability,
            ProbSpace::Powerset,
            2,
            10.0,
            "rec",
        );
        assert!(ok.is_ok());
    }

    #[test]
    fn probabilities_outside_unit_interval_rejected() {
        let err = FrameScoreMatrix::new(
            array![[1.2, 0.0]],
            ScoreKind::Probability,
            ProbSpace::Multilabel,
            2,
            10.0,
            "rec",
        );
        assert!(err.is_err());
        // logits are unconstrained
        let ok = FrameScoreMatrix::new(
            array![[5.0, -42.0]],
            ScoreKind::Logit,
            ProbSpace::Multilabel,
            2,
            10.0,
            "rec",
        );
        assert!(ok.is_ok());
    }

    #[test]
    fn activity_entries_are_binary() {
        assert!(BinaryActivityMatrix::new(array![[0u8, 1u8]], 10.0, "rec").is_ok());
        assert!(BinaryActivityMatrix::new(array![[2u8]], 10.0, "rec").is_err());
    }
}
