//! Reference handling and scoring: frame targets, permutation alignment,
//! binary cross-entropy, and diarization error rate with its
//! miss / false-alarm / confusion decomposition.

use std::collections::BTreeMap;

use ndarray::Array2;

use crate::assignment::{hungarian_min_cost, Permutation};
use crate::error::{Error, Result};
use crate::links::DEFAULT_EPSILON;
use crate::spaces::power_to_mult;
use crate::types::{BinaryActivityMatrix, FrameScoreMatrix, ProbSpace, ScoreKind};

/// One speaker segment: `speaker` active on `[onset_s, onset_s + duration_s)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub speaker: String,
    pub onset_s: f64,
    pub duration_s: f64,
}

/// Reference or hypothesis speaker segments for one recording.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Annotation {
    pub recording_id: String,
    pub segments: Vec<Segment>,
}

impl Annotation {
    pub fn new(recording_id: impl Into<String>, segments: Vec<Segment>) -> Result<Self> {
        for seg in &segments {
            if !(seg.duration_s > 0.0) || !(seg.onset_s >= 0.0) {
                return Err(Error::Contract(format!(
                    "segment for {} has onset {} and duration {}; onsets must be >= 0 \
                     and durations positive",
                    seg.speaker, seg.onset_s, seg.duration_s
                )));
            }
        }
        Ok(Self {
            recording_id: recording_id.into(),
            segments,
        })
    }

    /// Segments sorted by onset, then speaker, then duration.
    pub fn canonical(&self) -> Annotation {
        let mut segments = self.segments.clone();
        segments.sort_by(|a, b| {
            a.onset_s
                .partial_cmp(&b.onset_s)
                .unwrap()
                .then_with(|| a.speaker.cmp(&b.speaker))
                .then_with(|| a.duration_s.partial_cmp(&b.duration_s).unwrap())
        });
        Annotation {
            recording_id: self.recording_id.clone(),
            segments,
        }
    }

    /// Sorted unique speaker ids.
    pub fn speakers(&self) -> Vec<String> {
        let mut ids: Vec<String> = self.segments.iter().map(|s| s.speaker.clone()).collect();
        ids.sort();
        ids.dedup();
        ids
    }

    /// Per-speaker intervals with overlaps within a speaker merged.
    pub fn merged_intervals(&self) -> BTreeMap<String, Vec<(f64, f64)>> {
        let mut map: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
        for seg in &self.segments {
            map.entry(seg.speaker.clone())
                .or_default()
                .push((seg.onset_s, seg.onset_s + seg.duration_s));
        }
        for intervals in map.values_mut() {
            intervals.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let mut merged: Vec<(f64, f64)> = Vec::with_capacity(intervals.len());
            for &(start, end) in intervals.iter() {
                match merged.last_mut() {
                    Some(last) if start <= last.1 => last.1 = last.1.max(end),
                    _ => merged.push((start, end)),
                }
            }
            *intervals = merged;
        }
        map
    }

    /// Total per-speaker speech time in seconds (overlap double counts).
    pub fn total_speech_s(&self) -> f64 {
        self.merged_intervals()
            .values()
            .flat_map(|iv| iv.iter().map(|(a, b)| b - a))
            .sum()
    }

    pub fn end_time_s(&self) -> f64 {
        self.segments
            .iter()
            .map(|s| s.onset_s + s.duration_s)
            .fold(0.0, f64::max)
    }
}

/// Rasterizes reference segments onto a frame grid: frame `t` is active for
/// a speaker iff the frame center `(t + 0.5) / rate` falls inside one of its
/// segments. Speakers not listed in `speaker_order` are dropped with a
/// warning.
pub fn frame_targets(
    reference: &Annotation,
    frame_rate_hz: f64,
    num_frames: usize,
    speaker_order: &[String],
) -> BinaryActivityMatrix {
    let intervals = reference.merged_intervals();
    for speaker in intervals.keys() {
        if !speaker_order.contains(speaker) {
            log::warn!(
                "recording {}: reference speaker {} not in speaker order, dropped",
                reference.recording_id,
                speaker
            );
        }
    }
    let mut values = Array2::<u8>::zeros((num_frames, speaker_order.len()));
    for (s, speaker) in speaker_order.iter().enumerate() {
        if let Some(ivs) = intervals.get(speaker) {
            for t in 0..num_frames {
                let center = (t as f64 + 0.5) / frame_rate_hz;
                if ivs.iter().any(|&(a, b)| center >= a && center < b) {
                    values[[t, s]] = 1;
                }
            }
        }
    }
    BinaryActivityMatrix {
        values,
        frame_rate_hz,
        recording_id: reference.recording_id.clone(),
    }
}

/// Inverse of [`frame_targets`]: merges consecutive active frames into
/// segments named by `speaker_names` (falling back to `spk{i}`).
pub fn activity_to_annotation(
    activity: &BinaryActivityMatrix,
    speaker_names: Option<&[String]>,
) -> Annotation {
    let mut segments = Vec::new();
    let rate = activity.frame_rate_hz;
    for s in 0..activity.num_speakers() {
        let name = speaker_names
            .and_then(|n| n.get(s).cloned())
            .unwrap_or_else(|| format!("spk{s}"));
        let mut run_start: Option<usize> = None;
        for t in 0..=activity.num_frames() {
            let active = t < activity.num_frames() && activity.values[[t, s]] == 1;
            match (run_start, active) {
                (None, true) => run_start = Some(t),
                (Some(start), false) => {
                    segments.push(Segment {
                        speaker: name.clone(),
                        onset_s: start as f64 / rate,
                        duration_s: (t - start) as f64 / rate,
                    });
                    run_start = None;
                }
                _ => {}
            }
        }
    }
    Annotation {
        recording_id: activity.recording_id.clone(),
        segments,
    }
    .canonical()
}

fn bce_entry(p: f64, y: u8, epsilon: f64) -> f64 {
    let p = p.clamp(epsilon, 1.0 - epsilon);
    if y == 1 {
        -p.ln()
    } else {
        -(1.0 - p).ln()
    }
}

fn pad_columns_f64(m: &Array2<f64>, cols: usize) -> Array2<f64> {
    if m.ncols() == cols {
        return m.clone();
    }
    let mut out = Array2::<f64>::zeros((m.nrows(), cols));
    out.slice_mut(ndarray::s![.., ..m.ncols()]).assign(m);
    out
}

fn pad_columns_u8(m: &Array2<u8>, cols: usize) -> Array2<u8> {
    if m.ncols() == cols {
        return m.clone();
    }
    let mut out = Array2::<u8>::zeros((m.nrows(), cols));
    out.slice_mut(ndarray::s![.., ..m.ncols()]).assign(m);
    out
}

/// Finds the prediction-column permutation minimizing total binary
/// cross-entropy against the targets; exhaustive for up to 6 columns,
/// Hungarian above (the objective is column-separable, so both are exact).
/// Mismatched speaker counts are padded with all-zero columns. Ties resolve
/// to the lexicographically smallest permutation.
pub fn align_to_reference(
    probs: &FrameScoreMatrix,
    targets: &BinaryActivityMatrix,
) -> Result<Permutation> {
    probs.expect_multilabel_prob("align_to_reference")?;
    if probs.num_frames() != targets.num_frames() {
        return Err(Error::Contract(format!(
            "predictions have {} frames but targets have {}",
            probs.num_frames(),
            targets.num_frames()
        )));
    }
    let s = probs.dim().max(targets.num_speakers());
    let p = pad_columns_f64(&probs.values, s);
    let y = pad_columns_u8(&targets.values, s);

    // cost[target column][prediction column]
    let mut cost = Array2::<f64>::zeros((s, s));
    for i in 0..s {
        for j in 0..s {
            let mut acc = 0.0;
            for t in 0..p.nrows() {
                acc += bce_entry(p[[t, j]], y[[t, i]], DEFAULT_EPSILON);
            }
            cost[[i, j]] = acc;
        }
    }
    if s <= 6 {
        use itertools::Itertools;
        let mut best: Option<(f64, Vec<usize>)> = None;
        for perm in (0..s).permutations(s) {
            let total: f64 = (0..s).map(|i| cost[[i, perm[i]]]).sum();
            if best.as_ref().map_or(true, |(bt, _)| total < *bt) {
                best = Some((total, perm));
            }
        }
        Ok(Permutation(best.expect("non-empty").1))
    } else {
        Ok(Permutation(hungarian_min_cost(&cost)?))
    }
}

/// Reorders (and pads) reference target columns so that column `i` labels
/// prediction column `i`, using the BCE-minimizing correspondence.
pub fn targets_in_prediction_order(
    probs: &FrameScoreMatrix,
    targets: &BinaryActivityMatrix,
) -> Result<BinaryActivityMatrix> {
    let perm = align_to_reference(probs, targets)?;
    let padded = pad_columns_u8(&targets.values, perm.len());
    let reordered = perm.inverse().apply_to_columns(&padded);
    let values = reordered.slice(ndarray::s![.., ..probs.dim()]).to_owned();
    Ok(BinaryActivityMatrix {
        values,
        frame_rate_hz: targets.frame_rate_hz,
        recording_id: targets.recording_id.clone(),
    })
}

/// Mean binary cross-entropy over frames and speakers, in nats. Powerset
/// inputs are marginalized to multilabel first; the BCE-minimizing speaker
/// permutation is applied before scoring.
pub fn compute_bce(
    probs: &FrameScoreMatrix,
    targets: &BinaryActivityMatrix,
    epsilon: f64,
) -> Result<f64> {
    crate::links::check_epsilon(epsilon)?;
    let mult;
    let probs = match probs.space {
        ProbSpace::Powerset => {
            mult = power_to_mult(probs)?;
            &mult
        }
        ProbSpace::Multilabel => probs,
    };
    if probs.kind != ScoreKind::Probability {
        return Err(Error::Contract("compute_bce requires probabilities".into()));
    }
    if probs.num_frames() != targets.num_frames() {
        return Err(Error::Contract("compute_bce frame count mismatch".into()));
    }
    let perm = align_to_reference(probs, targets)?;
    let s = perm.len();
    let p = perm.apply_to_columns(&pad_columns_f64(&probs.values, s));
    let y = pad_columns_u8(&targets.values, s);
    let mut acc = 0.0;
    for t in 0..p.nrows() {
        for j in 0..s {
            acc += bce_entry(p[[t, j]], y[[t, j]], epsilon);
        }
    }
    Ok(acc / (p.nrows() * s) as f64)
}

/// DER scoring options.
#[derive(Debug, Clone, Copy)]
pub struct DerOptions {
    /// Margin around each reference segment boundary excluded from scoring.
    pub collar_s: f64,
    /// When false, regions where the reference has overlapping speech are
    /// excluded entirely.
    pub score_overlap: bool,
}

impl Default for DerOptions {
    fn default() -> Self {
        Self {
            collar_s: 0.25,
            score_overlap: true,
        }
    }
}

/// Time-weighted DER decomposition for one or more recordings.
#[derive(Debug, Clone, PartialEq)]
pub struct DerReport {
    pub miss_pct: f64,
    pub false_alarm_pct: f64,
    pub confusion_pct: f64,
    pub der_pct: f64,
    pub miss_s: f64,
    pub false_alarm_s: f64,
    pub confusion_s: f64,
    pub scored_speech_s: f64,
    pub collar_s: f64,
    /// Optimal reference -> hypothesis speaker correspondence.
    pub mapping: Vec<(String, String)>,
}

impl DerReport {
    fn from_seconds(
        miss_s: f64,
        false_alarm_s: f64,
        confusion_s: f64,
        scored_speech_s: f64,
        collar_s: f64,
        mapping: Vec<(String, String)>,
    ) -> Result<Self> {
        if scored_speech_s <= 0.0 {
            return Err(Error::Contract(
                "reference has no scored speech; DER is undefined".into(),
            ));
        }
        let pct = |v: f64| 100.0 * v / scored_speech_s;
        let (miss_pct, false_alarm_pct, confusion_pct) =
            (pct(miss_s), pct(false_alarm_s), pct(confusion_s));
        Ok(Self {
            miss_pct,
            false_alarm_pct,
            confusion_pct,
            der_pct: miss_pct + false_alarm_pct + confusion_pct,
            miss_s,
            false_alarm_s,
            confusion_s,
            scored_speech_s,
            collar_s,
            mapping,
        })
    }

    /// Combines per-recording reports by summing seconds.
    pub fn aggregate(reports: &[DerReport]) -> Result<DerReport> {
        if reports.is_empty() {
            return Err(Error::Contract("no reports to aggregate".into()));
        }
        DerReport::from_seconds(
            reports.iter().map(|r| r.miss_s).sum(),
            reports.iter().map(|r| r.false_alarm_s).sum(),
            reports.iter().map(|r| r.confusion_s).sum(),
            reports.iter().map(|r| r.scored_speech_s).sum(),
            reports[0].collar_s,
            Vec::new(),
        )
    }
}

fn merge_zones(mut zones: Vec<(f64, f64)>) -> Vec<(f64, f64)> {
    zones.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut merged: Vec<(f64, f64)> = Vec::with_capacity(zones.len());
    for (start, end) in zones {
        match merged.last_mut() {
            Some(last) if start <= last.1 => last.1 = last.1.max(end),
            _ => merged.push((start, end)),
        }
    }
    merged
}

/// Computes the DER of `hyp` against `ref` on the collar-excluded timeline.
///
/// The reference/hypothesis speaker correspondence is the one-to-one mapping
/// maximizing attributed overlap time on scored regions (Hungarian on the
/// overlap-duration matrix). Per scored region of duration `d` with `Nr`
/// active reference speakers, `Nh` active hypothesis speakers and `Nc`
/// correctly attributed speakers:
///
/// * miss      += `d * max(0, Nr - Nh)`
/// * false al. += `d * max(0, Nh - Nr)`
/// * confusion += `d * (min(Nr, Nh) - Nc)`
///
/// and all components are divided by the scored reference speech time.
pub fn compute_der(
    reference: &Annotation,
    hypothesis: &Annotation,
    options: &DerOptions,
) -> Result<DerReport> {
    if options.collar_s < 0.0 {
        return Err(Error::InvalidArgument("collar must be >= 0".into()));
    }
    let ref_intervals = reference.merged_intervals();
    let hyp_intervals = hypothesis.merged_intervals();
    let ref_speakers: Vec<&String> = ref_intervals.keys().collect();
    let hyp_speakers: Vec<&String> = hyp_intervals.keys().collect();

    let mut exclusion: Vec<(f64, f64)> = Vec::new();
    if options.collar_s > 0.0 {
        for ivs in ref_intervals.values() {
            for &(start, end) in ivs {
                exclusion.push(((start - options.collar_s).max(0.0), start + options.collar_s));
                exclusion.push(((end - options.collar_s).max(0.0), end + options.collar_s));
            }
        }
    }
    let exclusion = merge_zones(exclusion);

    let mut points: Vec<f64> = vec![0.0];
    for ivs in ref_intervals.values().chain(hyp_intervals.values()) {
        for &(a, b) in ivs {
            points.push(a);
            points.push(b);
        }
    }
    for &(a, b) in &exclusion {
        points.push(a.max(0.0));
        points.push(b);
    }
    points.sort_by(|a, b| a.partial_cmp(b).unwrap());
    points.dedup();

    struct Region {
        duration: f64,
        refs: Vec<usize>,
        hyps: Vec<usize>,
    }
    let mut regions: Vec<Region> = Vec::new();
    for w in points.windows(2) {
        let (t0, t1) = (w[0], w[1]);
        let d = t1 - t0;
        if d <= 1e-12 {
            continue;
        }
        let mid = 0.5 * (t0 + t1);
        if exclusion.iter().any(|&(a, b)| mid >= a && mid < b) {
            continue;
        }
        let active = |ivs: &Vec<(f64, f64)>| ivs.iter().any(|&(a, b)| mid >= a && mid < b);
        let refs: Vec<usize> = ref_speakers
            .iter()
            .enumerate()
            .filter(|(_, sp)| active(&ref_intervals[**sp]))
            .map(|(i, _)| i)
            .collect();
        if !options.score_overlap && refs.len() >= 2 {
            continue;
        }
        let hyps: Vec<usize> = hyp_speakers
            .iter()
            .enumerate()
            .filter(|(_, sp)| active(&hyp_intervals[**sp]))
            .map(|(i, _)| i)
            .collect();
        regions.push(Region {
            duration: d,
            refs,
            hyps,
        });
    }

    // attributed-overlap matrix on scored regions
    let (nr, nh) = (ref_speakers.len(), hyp_speakers.len());
    let mut overlap = Array2::<f64>::zeros((nr.max(1), nh.max(1)));
    let mut scored_speech = 0.0;
    for region in &regions {
        scored_speech += region.duration * region.refs.len() as f64;
        for &r in &region.refs {
            for &h in &region.hyps {
                overlap[[r, h]] += region.duration;
            }
        }
    }

    // maximize overlap = minimize negated overlap on a padded square matrix
    let dim = nr.max(nh).max(1);
    let mut cost = Array2::<f64>::zeros((dim, dim));
    for r in 0..nr {
        for h in 0..nh {
            cost[[r, h]] = -overlap[[r, h]];
        }
    }
    let assignment = hungarian_min_cost(&cost)?;
    let mut map_r_to_h: Vec<Option<usize>> = vec![None; nr];
    let mut mapping = Vec::new();
    for r in 0..nr {
        let h = assignment[r];
        if h < nh {
            map_r_to_h[r] = Some(h);
            mapping.push((ref_speakers[r].clone(), hyp_speakers[h].clone()));
        }
    }

    let (mut miss, mut fa, mut conf) = (0.0f64, 0.0f64, 0.0f64);
    for region in &regions {
        let nr_active = region.refs.len();
        let nh_active = region.hyps.len();
        let correct = region
            .refs
            .iter()
            .filter(|&&r| map_r_to_h[r].is_some_and(|h| region.hyps.contains(&h)))
            .count();
        let d = region.duration;
        miss += d * (nr_active.saturating_sub(nh_active)) as f64;
        fa += d * (nh_active.saturating_sub(nr_active)) as f64;
        conf += d * (nr_active.min(nh_active) - correct) as f64;
    }

    DerReport::from_seconds(miss, fa, conf, scored_speech, options.collar_s, mapping)
}

/// One line of an experiment report.
#[derive(Debug, Clone)]
pub struct ReportRow {
    pub condition: String,
    pub method: String,
    pub strategy: String,
    pub der: DerReport,
    pub bce: f64,
}

fn sorted_rows(rows: &[ReportRow]) -> Vec<&ReportRow> {
    let mut out: Vec<&ReportRow> = rows.iter().collect();
    out.sort_by(|a, b| {
        a.condition
            .cmp(&b.condition)
            .then_with(|| a.method.cmp(&b.method))
    });
    out
}

const REPORT_HEADER: [&str; 8] = [
    "condition", "method", "strategy", "miss", "fa", "conf", "der", "bce",
];

/// Fixed-width text table: one row per result, three decimals throughout.
pub fn report_table(rows: &[ReportRow]) -> String {
    let mut cells: Vec<[String; 8]> = vec![REPORT_HEADER.map(str::to_string)];
    for row in sorted_rows(rows) {
        cells.push([
            row.condition.clone(),
            row.method.clone(),
            row.strategy.clone(),
            format!("{:.3}", row.der.miss_pct),
            format!("{:.3}", row.der.false_alarm_pct),
            format!("{:.3}", row.der.confusion_pct),
            format!("{:.3}", row.der.der_pct),
            format!("{:.3}", row.bce),
        ]);
    }
    let mut widths = [0usize; 8];
    for row in &cells {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.len());
        }
    }
    let mut out = String::new();
    for row in &cells {
        let line: Vec<String> = row
            .iter()
            .zip(widths)
            .map(|(cell, w)| format!("{cell:<w$}"))
            .collect();
        out.push_str(line.join("  ").trim_end());
        out.push('\n');
    }
    out
}

/// CSV rendering of the same table (comma separated, `.` decimal).
pub fn report_csv(rows: &[ReportRow]) -> String {
    let mut out = REPORT_HEADER.join(",");
    out.push('\n');
    for row in sorted_rows(rows) {
        out.push_str(&format!(
            "{},{},{},{:.3},{:.3},{:.3},{:.3},{:.3}\n",
            row.condition,
            row.method,
            row.strategy,
            row.der.miss_pct,
            row.der.false_alarm_pct,
            row.der.confusion_pct,
            row.der.der_pct,
            row.bce
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use itertools::Itertools;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn seg(speaker: &str, onset: f64, dur: f64) -> Segment {
        Segment {
            speaker: speaker.into(),
            onset_s: onset,
            duration_s: dur,
        }
    }

    fn ann(rec: &str, segs: Vec<Segment>) -> Annotation {
        Annotation::new(rec, segs).unwrap()
    }

    #[test]
    fn frame_targets_basic() {
        let r = ann("rec", vec![seg("a", 0.0, 1.0)]);
        let t = frame_targets(&r, 10.0, 12, &["a".to_string()]);
        for i in 0..10 {
            assert_eq!(t.values[[i, 0]], 1, "frame {i}");
        }
        assert_eq!(t.values[[10, 0]], 0);
        assert_eq!(t.values[[11, 0]], 0);

        let empty = frame_targets(&ann("rec", vec![]), 10.0, 5, &["a".to_string()]);
        assert!(empty.values.iter().all(|&v| v == 0));
    }

    #[test]
    fn frame_targets_merges_same_speaker_overlap() {
        let r = ann("rec", vec![seg("a", 0.0, 1.0), seg("a", 0.5, 1.0)]);
        let t = frame_targets(&r, 10.0, 20, &["a".to_string()]);
        let total: u32 = t.values.iter().map(|&v| u32::from(v)).sum();
        assert_eq!(total, 15); // union [0, 1.5): no double counting
    }

    #[test]
    fn activity_round_trips_through_annotation() {
        let values = array![[1u8, 0], [1, 0], [0, 1], [0, 1], [0, 0]];
        let act = BinaryActivityMatrix::new(values, 10.0, "rec").unwrap();
        let annotation = activity_to_annotation(&act, None);
        assert_eq!(annotation.segments.len(), 2);
        assert_eq!(annotation.segments[0], seg("spk0", 0.0, 0.2));
        assert_eq!(annotation.segments[1], seg("spk1", 0.2, 0.2));
        let back = frame_targets(
            &annotation,
            10.0,
            5,
            &["spk0".to_string(), "spk1".to_string()],
        );
        assert_eq!(back.values, act.values);
    }

    #[test]
    fn align_to_reference_finds_swap_and_breaks_ties() {
        let targets = BinaryActivityMatrix::new(
            array![[1u8, 0], [1, 0], [0, 1]],
            10.0,
            "rec",
        )
        .unwrap();
        let probs = FrameScoreMatrix::new(
            array![[0.1, 0.9], [0.2, 0.8], [0.9, 0.1]],
            ScoreKind::Probability,
            ProbSpace::Multilabel,
            2,
            10.0,
            "rec",
        )
        .unwrap();
        let perm = align_to_reference(&probs, &targets).unwrap();
        assert_eq!(perm.0, vec![1, 0]);

        let flat = FrameScoreMatrix::new(
            Array2::from_elem((3, 2), 0.5),
            ScoreKind::Probability,
            ProbSpace::Multilabel,
            2,
            10.0,
            "rec",
        )
        .unwrap();
        let perm = align_to_reference(&flat, &targets).unwrap();
        assert!(perm.is_identity());
    }

    #[test]
    fn bce_examples() {
        let targets =
            BinaryActivityMatrix::new(array![[1u8, 0], [0, 1]], 10.0, "rec").unwrap();
        let half = FrameScoreMatrix::new(
            Array2::from_elem((2, 2), 0.5),
            ScoreKind::Probability,
            ProbSpace::Multilabel,
            2,
            10.0,
            "rec",
        )
        .unwrap();
        let bce = compute_bce(&half, &targets, DEFAULT_EPSILON).unwrap();
        assert!((bce - 0.693147180559945309).abs() < 1e-12);

        let exact = FrameScoreMatrix::new(
            array![[1.0, 0.0], [0.0, 1.0]],
            ScoreKind::Probability,
            ProbSpace::Multilabel,
            2,
            10.0,
            "rec",
        )
        .unwrap();
        let bce = compute_bce(&exact, &targets, DEFAULT_EPSILON).unwrap();
        assert!((bce - 1e-7).abs() < 1e-12);

        let balanced = FrameScoreMatrix::new(
            array![[0.9, 0.1], [0.1, 0.9]],
            ScoreKind::Probability,
            ProbSpace::Multilabel,
            2,
            10.0,
            "rec",
        )
        .unwrap();
        let bce = compute_bce(&balanced, &targets, DEFAULT_EPSILON).unwrap();
        assert!((bce - 0.105360515657826301).abs() < 1e-5);
    }

    #[test]
    fn bce_of_powerset_equals_bce_of_marginals() {
        let mut rng = ChaCha12Rng::seed_from_u64(19);
        let mut rows = Array2::<f64>::zeros((50, 4));
        for mut row in rows.rows_mut() {
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = rng.gen_range(0.01f64..1.0);
                sum += *v;
            }
            row.mapv_inplace(|v| v / sum);
        }
        let power = FrameScoreMatrix::new(
            rows,
            ScoreKind::Probability,
            ProbSpace::Powerset,
            2,
            10.0,
            "rec",
        )
        .unwrap();
        let targets = BinaryActivityMatrix::new(
            Array2::from_shape_fn((50, 2), |_| rng.gen_range(0..2u8)),
            10.0,
            "rec",
        )
        .unwrap();
        let a = compute_bce(&power, &targets, DEFAULT_EPSILON).unwrap();
        let b = compute_bce(&power_to_mult(&power).unwrap(), &targets, DEFAULT_EPSILON).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn der_identical_is_zero() {
        let r = ann("rec", vec![seg("a", 0.0, 10.0), seg("b", 4.0, 3.0)]);
        let report = compute_der(&r, &r, &DerOptions { collar_s: 0.0, score_overlap: true })
            .unwrap();
        assert_eq!(report.der_pct, 0.0);
        assert_eq!(report.miss_pct, 0.0);
        assert_eq!(report.false_alarm_pct, 0.0);
        assert_eq!(report.confusion_pct, 0.0);
        assert!((report.scored_speech_s - 13.0).abs() < 1e-9);
    }

    #[test]
    fn der_miss_example() {
        let r = ann("rec", vec![seg("a", 0.0, 10.0)]);
        let h = ann("rec", vec![seg("x", 0.0, 8.0)]);
        let report =
            compute_der(&r, &h, &DerOptions { collar_s: 0.0, score_overlap: true }).unwrap();
        assert!((report.miss_pct - 20.0).abs() < 1e-9);
        assert_eq!(report.false_alarm_pct, 0.0);
        assert_eq!(report.confusion_pct, 0.0);
        assert!((report.der_pct - 20.0).abs() < 1e-9);
    }

    #[test]
    fn der_confusion_example() {
        let r = ann("rec", vec![seg("a", 0.0, 10.0)]);
        let h = ann("rec", vec![seg("b", 0.0, 6.0), seg("c", 6.0, 4.0)]);
        let report =
            compute_der(&r, &h, &DerOptions { collar_s: 0.0, score_overlap: true }).unwrap();
        assert!((report.confusion_pct - 40.0).abs() < 1e-9);
        assert_eq!(report.miss_pct, 0.0);
        assert_eq!(report.false_alarm_pct, 0.0);
        assert_eq!(report.mapping, vec![("a".to_string(), "b".to_string())]);
    }

    #[test]
    fn der_components_sum_and_relabel_symmetry() {
        let mut rng = ChaCha12Rng::seed_from_u64(47);
        for _ in 0..50 {
            let rand_ann = |rng: &mut ChaCha12Rng, names: &[&str]| {
                let mut segs = Vec::new();
                for name in names {
                    for _ in 0..rng.gen_range(1..4) {
                        segs.push(seg(
                            name,
                            rng.gen_range(0.0..20.0),
                            rng.gen_range(0.5..5.0),
                        ));
                    }
                }
                ann("rec", segs)
            };
            let r = rand_ann(&mut rng, &["a", "b"]);
            let h = rand_ann(&mut rng, &["x", "y", "z"]);
            let opts = DerOptions { collar_s: 0.0, score_overlap: true };
            let report = compute_der(&r, &h, &opts).unwrap();
            assert!(
                (report.der_pct
                    - (report.miss_pct + report.false_alarm_pct + report.confusion_pct))
                    .abs()
                    < 1e-9
            );

            // relabel hypothesis speakers
            let relabeled = Annotation {
                recording_id: h.recording_id.clone(),
                segments: h
                    .segments
                    .iter()
                    .map(|s| Segment {
                        speaker: format!("relabeled-{}", s.speaker),
                        ..s.clone()
                    })
                    .collect(),
            };
            let report2 = compute_der(&r, &relabeled, &opts).unwrap();
            assert!((report.der_pct - report2.der_pct).abs() < 1e-9);
        }
    }

    #[test]
    fn collar_never_increases_scored_time_or_miss_fa_seconds() {
        let mut rng = ChaCha12Rng::seed_from_u64(53);
        for _ in 0..20 {
            let rand_ann = |rng: &mut ChaCha12Rng, names: &[&str]| {
                let mut segs = Vec::new();
                for name in names {
                    for _ in 0..rng.gen_range(1..4) {
                        segs.push(seg(
                            name,
                            rng.gen_range(0.0..20.0),
                            rng.gen_range(1.0..5.0),
                        ));
                    }
                }
                ann("rec", segs)
            };
            let r = rand_ann(&mut rng, &["a", "b"]);
            let h = rand_ann(&mut rng, &["x", "y"]);
            let mut prev: Option<DerReport> = None;
            for collar in [0.0, 0.1, 0.25, 0.5] {
                let report = match compute_der(
                    &r,
                    &h,
                    &DerOptions { collar_s: collar, score_overlap: true },
                ) {
                    Ok(rep) => rep,
                    Err(_) => break, // collar consumed all scored speech
                };
                if let Some(p) = &prev {
                    assert!(report.scored_speech_s <= p.scored_speech_s + 1e-9);
                    assert!(
                        report.miss_s + report.false_alarm_s
                            <= p.miss_s + p.false_alarm_s + 1e-9
                    );
                }
                prev = Some(report);
            }
        }
    }

    #[test]
    fn hungarian_mapping_matches_exhaustive_on_random_annotations() {
        let mut rng = ChaCha12Rng::seed_from_u64(59);
        for _ in 0..100 {
            let rand_ann = |rng: &mut ChaCha12Rng, max_spk: usize| {
                let n = rng.gen_range(1..=max_spk);
                let mut segs = Vec::new();
                for i in 0..n {
                    for _ in 0..rng.gen_range(1..3) {
                        segs.push(seg(
                            &format!("s{i}"),
                            rng.gen_range(0.0..15.0),
                            rng.gen_range(0.5..4.0),
                        ));
                    }
                }
                ann("rec", segs)
            };
            let r = rand_ann(&mut rng, 4);
            let h = rand_ann(&mut rng, 4);
            let opts = DerOptions { collar_s: 0.0, score_overlap: true };
            let report = compute_der(&r, &h, &opts).unwrap();

            // exhaustive oracle over injective mappings on the overlap matrix
            let ref_iv = r.merged_intervals();
            let hyp_iv = h.merged_intervals();
            let rs: Vec<&String> = ref_iv.keys().collect();
            let hs: Vec<&String> = hyp_iv.keys().collect();
            let overlap = |a: &Vec<(f64, f64)>, b: &Vec<(f64, f64)>| -> f64 {
                let mut acc = 0.0;
                for &(a0, a1) in a {
                    for &(b0, b1) in b {
                        acc += (a1.min(b1) - a0.max(b0)).max(0.0);
                    }
                }
                acc
            };
            let hungarian_total: f64 = report
                .mapping
                .iter()
                .map(|(rsp, hsp)| overlap(&ref_iv[rsp], &hyp_iv[hsp]))
                .sum();
            let k = rs.len().min(hs.len());
            let mut best = 0.0f64;
            for hyp_subset in (0..hs.len()).permutations(k) {
                for ref_subset in (0..rs.len()).combinations(k) {
                    let total: f64 = ref_subset
                        .iter()
                        .zip(&hyp_subset)
                        .map(|(&ri, &hi)| overlap(&ref_iv[rs[ri]], &hyp_iv[hs[hi]]))
                        .sum();
                    best = best.max(total);
                }
            }
            assert!(
                (hungarian_total - best).abs() < 1e-9,
                "hungarian {hungarian_total} vs exhaustive {best}"
            );
        }
    }

    #[test]
    fn empty_reference_is_an_error() {
        let r = ann("rec", vec![]);
        let h = ann("rec", vec![seg("a", 0.0, 1.0)]);
        assert!(compute_der(&r, &h, &DerOptions::default()).is_err());
    }

    #[test]
    fn no_overlap_scoring_excludes_overlap_regions() {
        let r = ann("rec", vec![seg("a", 0.0, 10.0), seg("b", 2.0, 4.0)]);
        let h = ann("rec", vec![seg("a", 0.0, 10.0)]);
        let with = compute_der(&r, &h, &DerOptions { collar_s: 0.0, score_overlap: true })
            .unwrap();
        let without = compute_der(&r, &h, &DerOptions { collar_s: 0.0, score_overlap: false })
            .unwrap();
        // overlap region [2,6) contributes 4s of miss when scored
        assert!((with.miss_s - 4.0).abs() < 1e-9);
        assert!((without.miss_s - 0.0).abs() < 1e-9);
        assert!((with.scored_speech_s - 14.0).abs() < 1e-9);
        assert!((without.scored_speech_s - 6.0).abs() < 1e-9);
    }

    #[test]
    fn report_table_formatting() {
        assert_eq!(
            report_table(&[]),
            "condition  method  strategy  miss  fa  conf  der  bce\n"
        );
        let der = DerReport::from_seconds(0.2, 0.3, 0.33971, 10.0, 0.0, Vec::new()).unwrap();
        let row = ReportRow {
            condition: "default".into(),
            method: "average_probs".into(),
            strategy: "fuse_then_calibrate".into(),
            der,
            bce: 0.2518,
        };
        let table = report_table(&[row.clone()]);
        assert!(table.contains("8.397"), "{table}");
        assert!(table.contains("0.252"), "{table}");
        let csv = report_csv(&[row]);
        let mut lines = csv.lines();
        assert_eq!(
            lines.next().unwrap(),
            "condition,method,strategy,miss,fa,conf,der,bce"
        );
        assert_eq!(
            lines.next().unwrap(),
            "default,average_probs,fuse_then_calibrate,2.000,3.000,3.397,8.397,0.252"
        );
    }

    #[test]
    fn report_rows_sorted_by_condition_then_method() {
        let der = DerReport::from_seconds(0.0, 0.0, 0.0, 1.0, 0.0, Vec::new()).unwrap();
        let mk = |condition: &str, method: &str| ReportRow {
            condition: condition.into(),
            method: method.into(),
            strategy: "s".into(),
            der: der.clone(),
            bce: 0.0,
        };
        let table = report_csv(&[mk("b", "m2"), mk("a", "m9"), mk("b", "m1"), mk("a", "m0")]);
        let order: Vec<&str> = table
            .lines()
            .skip(1)
            .map(|l| l.split(',').next().unwrap())
            .collect();
        assert_eq!(order, vec!["a", "a", "b", "b"]);
        let methods: Vec<&str> = table
            .lines()
            .skip(1)
            .map(|l| l.split(',').nth(1).unwrap())
            .collect();
        assert_eq!(methods, vec!["m0", "m9", "m1", "m2"]);
    }
}
