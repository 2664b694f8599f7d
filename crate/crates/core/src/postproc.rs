//! Post-processing of frame-level outputs: upsampling back to the original
//! temporal resolution, median smoothing, and hard decisions.

use ndarray::{Array2, Axis};

use crate::error::{Error, Result};
use crate::spaces::PowersetEncoding;
use crate::types::{BinaryActivityMatrix, FrameScoreMatrix, ProbSpace, ScoreKind};

fn repeat_rows<T: Clone>(values: &Array2<T>, factor: usize) -> Array2<T> {
    Array2::from_shape_fn((values.nrows() * factor, values.ncols()), |(i, j)| {
        values[[i / factor, j]].clone()
    })
}

fn check_factor(factor: usize) -> Result<()> {
    if factor < 1 {
        return Err(Error::InvalidArgument(
            "upsample factor must be >= 1".into(),
        ));
    }
    Ok(())
}

/// Repeats each frame `factor` times and scales the frame rate accordingly.
pub fn upsample(m: &FrameScoreMatrix, factor: usize) -> Result<FrameScoreMatrix> {
    check_factor(factor)?;
    Ok(FrameScoreMatrix {
        values: repeat_rows(&m.values, factor),
        kind: m.kind,
        space: m.space,
        num_speakers: m.num_speakers,
        frame_rate_hz: m.frame_rate_hz * factor as f64,
        recording_id: m.recording_id.clone(),
    })
}

/// Activity-matrix counterpart of [`upsample`].
pub fn upsample_activity(m: &BinaryActivityMatrix, factor: usize) -> Result<BinaryActivityMatrix> {
    check_factor(factor)?;
    Ok(BinaryActivityMatrix {
        values: repeat_rows(&m.values, factor),
        frame_rate_hz: m.frame_rate_hz * factor as f64,
        recording_id: m.recording_id.clone(),
    })
}

/// Reflected (symmetric) index for position `i` in a signal of length `len`.
fn reflect_index(mut i: isize, len: usize) -> usize {
    let n = len as isize;
    loop {
        if i < 0 {
            i = -i - 1;
        } else if i >= n {
            i = 2 * n - i - 1;
        } else {
            return i as usize;
        }
    }
}

/// Per-column sliding median with symmetric reflection at the boundaries.
pub fn median_filter(m: &FrameScoreMatrix, window: usize) -> Result<FrameScoreMatrix> {
    if m.kind != ScoreKind::Probability {
        return Err(Error::Contract(
            "median_filter requires probability inputs".into(),
        ));
    }
    if window == 0 || window % 2 == 0 {
        return Err(Error::InvalidArgument(format!(
            "median window must be odd and >= 1, got {window}"
        )));
    }
    let t = m.num_frames();
    let half = (window / 2) as isize;
    let mut out = m.values.clone();
    let mut buf = vec![0.0f64; window];
    for c in 0..m.dim() {
        let col = m.values.index_axis(Axis(1), c);
        for i in 0..t {
            for (k, j) in ((i as isize - half)..=(i as isize + half)).enumerate() {
                buf[k] = col[reflect_index(j, t)];
            }
            buf.sort_by(|a, b| a.partial_cmp(b).unwrap());
            out[[i, c]] = buf[window / 2];
        }
    }
    Ok(FrameScoreMatrix {
        values: out,
        kind: m.kind,
        space: m.space,
        num_speakers: m.num_speakers,
        frame_rate_hz: m.frame_rate_hz,
        recording_id: m.recording_id.clone(),
    })
}

/// Hard multilabel decisions: active iff `p > tau` (a tie at `tau` is inactive).
pub fn threshold_decisions(m: &FrameScoreMatrix, tau: f64) -> Result<BinaryActivityMatrix> {
    m.expect_multilabel_prob("threshold_decisions")?;
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "threshold must lie in (0,1), got {tau}"
        )));
    }
    let values = m.values.mapv(|p| u8::from(p > tau));
    Ok(BinaryActivityMatrix {
        values,
        frame_rate_hz: m.frame_rate_hz,
        recording_id: m.recording_id.clone(),
    })
}

/// Hard powerset decisions: per frame, the argmax class (lowest index on
/// ties) decoded to its speaker subset.
pub fn powerset_decision(m: &FrameScoreMatrix) -> Result<BinaryActivityMatrix> {
    if m.space != ProbSpace::Powerset || m.kind != ScoreKind::Probability {
        return Err(Error::Contract(
            "powerset_decision requires powerset probabilities".into(),
        ));
    }
    let enc = PowersetEncoding::new(m.num_speakers)?;
    let t = m.num_frames();
    let mut values = Array2::<u8>::zeros((t, m.num_speakers));
    for (i, row) in m.values.rows().into_iter().enumerate() {
        let sum: f64 = row.sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(Error::Contract(format!(
                "powerset row {i} sums to {sum}, expected 1 within 1e-6"
            )));
        }
        let mut best = 0usize;
        for (k, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = k;
            }
        }
        for s in 0..m.num_speakers {
            values[[i, s]] = u8::from(enc.class_contains(best, s));
        }
    }
    Ok(BinaryActivityMatrix {
        values,
        frame_rate_hz: m.frame_rate_hz,
        recording_id: m.recording_id.clone(),
    })
}
