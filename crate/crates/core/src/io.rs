//! File formats: plain-text score matrices, RTTM segment files, and the
//! JSON experiment configuration. Paths ending in `.gz` are compressed and
//! decompressed transparently.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::{Annotation, Segment};
use crate::pipeline::{EnsembleData, EnsembleRecording, PipelineConfig};
use crate::types::{FrameScoreMatrix, ProbSpace, ScoreKind};

const SCORES_MAGIC: &str = "#diacal-scores v1";

/// A score matrix together with the producing system's id.
#[derive(Debug, Clone)]
pub struct ScoreFile {
    pub matrix: FrameScoreMatrix,
    pub system_id: String,
}

fn open_reader(path: &Path) -> Result<Box<dyn BufRead>> {
    let file = File::open(path)?;
    if path.extension().is_some_and(|e| e == "gz") {
        Ok(Box::new(BufReader::new(GzDecoder::new(file))))
    } else {
        Ok(Box::new(BufReader::new(file)))
    }
}

fn open_writer(path: &Path) -> Result<Box<dyn Write>> {
    let file = File::create(path)?;
    if path.extension().is_some_and(|e| e == "gz") {
        Ok(Box::new(BufWriter::new(GzEncoder::new(
            file,
            Compression::default(),
        ))))
    } else {
        Ok(Box::new(BufWriter::new(file)))
    }
}

fn parse_err(line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        line,
        message: message.into(),
    }
}

/// Writes a score matrix in the v1 text format (12 significant digits).
pub fn write_scores(matrix: &FrameScoreMatrix, system_id: &str, path: &Path) -> Result<()> {
    let mut w = open_writer(path)?;
    writeln!(w, "{SCORES_MAGIC}")?;
    let kind = match matrix.kind {
        ScoreKind::Probability => "prob",
        ScoreKind::Logit => "logit",
    };
    let space = match matrix.space {
        ProbSpace::Multilabel => "mult",
        ProbSpace::Powerset => "power",
    };
    writeln!(
        w,
        "frames={} speakers={} rate_hz={} kind={kind} space={space} system={system_id} recording={}",
        matrix.num_frames(),
        matrix.num_speakers,
        matrix.frame_rate_hz,
        matrix.recording_id
    )?;
    for row in matrix.values.rows() {
        let line: Vec<String> = row.iter().map(|v| format!("{v:.12e}")).collect();
        writeln!(w, "{}", line.join(" "))?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a v1 score file, validating shape and value ranges.
pub fn read_scores(path: &Path) -> Result<ScoreFile> {
    let reader = open_reader(path)?;
    let mut lines = reader.lines().enumerate();

    let (_, magic) = lines
        .next()
        .ok_or_else(|| parse_err(1, "empty score file"))?;
    if magic?.trim() != SCORES_MAGIC {
        return Err(parse_err(1, format!("expected magic line '{SCORES_MAGIC}'")));
    }
    let (_, header) = lines
        .next()
        .ok_or_else(|| parse_err(2, "missing header line"))?;
    let header = header?;
    let mut fields: BTreeMap<&str, &str> = BTreeMap::new();
    for token in header.split_whitespace() {
        let (key, value) = token
            .split_once('=')
            .ok_or_else(|| parse_err(2, format!("malformed header token '{token}'")))?;
        fields.insert(key, value);
    }
    let get = |key: &str| -> Result<&str> {
        fields
            .get(key)
            .copied()
            .ok_or_else(|| parse_err(2, format!("missing header field '{key}'")))
    };
    let frames: usize = get("frames")?
        .parse()
        .map_err(|_| parse_err(2, "frames must be an integer"))?;
    let speakers: usize = get("speakers")?
        .parse()
        .map_err(|_| parse_err(2, "speakers must be an integer"))?;
    let rate_hz: f64 = get("rate_hz")?
        .parse()
        .map_err(|_| parse_err(2, "rate_hz must be a number"))?;
    let kind = match get("kind")? {
        "prob" => ScoreKind::Probability,
        "logit" => ScoreKind::Logit,
        other => return Err(parse_err(2, format!("unknown kind '{other}'"))),
    };
    let space = match get("space")? {
        "mult" => ProbSpace::Multilabel,
        "power" => ProbSpace::Powerset,
        other => return Err(parse_err(2, format!("unknown space '{other}'"))),
    };
    let system_id = get("system")?.to_string();
    let recording_id = get("recording")?.to_string();

    let dim = space.dim(speakers);
    let mut values = Array2::<f64>::zeros((frames, dim));
    let mut row = 0usize;
    for (idx, line) in lines {
        let line = line?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if row >= frames {
            return Err(parse_err(
                idx + 1,
                format!("more than the declared {frames} data rows"),
            ));
        }
        let mut col = 0usize;
        for token in line.split_whitespace() {
            if col >= dim {
                return Err(parse_err(
                    idx + 1,
                    format!("row has more than {dim} columns"),
                ));
            }
            values[[row, col]] = token
                .parse()
                .map_err(|_| parse_err(idx + 1, format!("bad number '{token}'")))?;
            col += 1;
        }
        if col != dim {
            return Err(parse_err(
                idx + 1,
                format!("row has {col} columns, expected {dim}"),
            ));
        }
        row += 1;
    }
    if row != frames {
        return Err(parse_err(
            row + 3,
            format!("file has {row} data rows, header declares {frames}"),
        ));
    }
    let matrix = FrameScoreMatrix::new(values, kind, space, speakers, rate_hz, recording_id)?;
    Ok(ScoreFile { matrix, system_id })
}

/// Writes annotations as RTTM, sorted by recording id with canonical
/// segment order and 3-decimal fixed-point times.
pub fn write_rttm(annotations: &[Annotation], path: &Path) -> Result<()> {
    let mut w = open_writer(path)?;
    let mut sorted: Vec<&Annotation> = annotations.iter().collect();
    sorted.sort_by(|a, b| a.recording_id.cmp(&b.recording_id));
    for ann in sorted {
        for seg in ann.canonical().segments {
            writeln!(
                w,
                "SPEAKER {} 1 {:.3} {:.3} <NA> <NA> {} <NA> <NA>",
                ann.recording_id, seg.onset_s, seg.duration_s, seg.speaker
            )?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Parses an RTTM file into one canonicalized annotation per recording.
/// Unknown line types are skipped with a warning.
pub fn read_rttm(path: &Path) -> Result<Vec<Annotation>> {
    let reader = open_reader(path)?;
    let mut by_recording: BTreeMap<String, Vec<Segment>> = BTreeMap::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        let fields: Vec<&str> = trimmed.split_whitespace().collect();
        if fields[0] != "SPEAKER" {
            log::warn!(
                "{}:{}: skipping unsupported line type '{}'",
                path.display(),
                idx + 1,
                fields[0]
            );
            continue;
        }
        if fields.len() < 8 {
            return Err(parse_err(idx + 1, "SPEAKER line has fewer than 8 fields"));
        }
        let onset: f64 = fields[3]
            .parse()
            .map_err(|_| parse_err(idx + 1, format!("bad onset '{}'", fields[3])))?;
        let duration: f64 = fields[4]
            .parse()
            .map_err(|_| parse_err(idx + 1, format!("bad duration '{}'", fields[4])))?;
        if !(duration > 0.0) || !(onset >= 0.0) {
            return Err(parse_err(
                idx + 1,
                format!("onset {onset} / duration {duration} out of range"),
            ));
        }
        by_recording
            .entry(fields[1].to_string())
            .or_default()
            .push(Segment {
                speaker: fields[7].to_string(),
                onset_s: onset,
                duration_s: duration,
            });
    }
    Ok(by_recording
        .into_iter()
        .map(|(recording_id, segments)| {
            Annotation {
                recording_id,
                segments,
            }
            .canonical()
        })
        .collect())
}

/// Reads a whole text file, decompressing `.gz` transparently.
pub fn read_text(path: &Path) -> Result<String> {
    let mut reader = open_reader(path)?;
    let mut out = String::new();
    reader.read_to_string(&mut out)?;
    Ok(out)
}

/// Writes a text file, compressing `.gz` transparently.
pub fn write_text(path: &Path, text: &str) -> Result<()> {
    let mut w = open_writer(path)?;
    w.write_all(text.as_bytes())?;
    w.flush()?;
    Ok(())
}

/// Top-level JSON experiment configuration: per-system score-file paths per
/// recording, the reference RTTM, and the configuration grid. Paths are
/// resolved relative to the config file's directory.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfigFile {
    pub systems: BTreeMap<String, BTreeMap<String, String>>,
    pub reference: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_systems: Option<BTreeMap<String, BTreeMap<String, String>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_reference: Option<String>,
    pub configs: Vec<PipelineConfig>,
}

impl ExperimentConfigFile {
    pub fn load(path: &Path) -> Result<(Self, PathBuf)> {
        let text = read_text(path)?;
        let cfg: ExperimentConfigFile = serde_json::from_str(&text)?;
        let base = path
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from("."));
        Ok((cfg, base))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_text(path, &format!("{}\n", serde_json::to_string_pretty(self)?))
    }

    pub fn train_ensemble(&self, base: &Path) -> Result<EnsembleData> {
        load_ensemble(&self.systems, &self.reference, base)
    }

    /// The held-out set, falling back to the training set when absent.
    pub fn test_ensemble(&self, base: &Path) -> Result<EnsembleData> {
        let systems = self.test_systems.as_ref().unwrap_or(&self.systems);
        let reference = self.test_reference.as_deref().unwrap_or(&self.reference);
        load_ensemble(systems, reference, base)
    }
}

fn load_ensemble(
    systems: &BTreeMap<String, BTreeMap<String, String>>,
    reference: &str,
    base: &Path,
) -> Result<EnsembleData> {
    if systems.is_empty() {
        return Err(Error::Config("config lists no systems".into()));
    }
    let system_ids: Vec<String> = systems.keys().cloned().collect();
    let recording_ids: Vec<String> = systems[&system_ids[0]].keys().cloned().collect();
    for id in &system_ids {
        let recs: Vec<&String> = systems[id].keys().collect();
        if recs.len() != recording_ids.len()
            || recs.iter().zip(&recording_ids).any(|(a, b)| *a != b)
        {
            return Err(Error::Config(format!(
                "system {id} does not cover the same recordings as {}",
                system_ids[0]
            )));
        }
    }
    let references: BTreeMap<String, Annotation> = read_rttm(&base.join(reference))?
        .into_iter()
        .map(|a| (a.recording_id.clone(), a))
        .collect();

    let mut recordings = Vec::with_capacity(recording_ids.len());
    for rec_id in &recording_ids {
        let mut matrices = Vec::with_capacity(system_ids.len());
        for sys_id in &system_ids {
            let file = read_scores(&base.join(&systems[sys_id][rec_id]))?;
            if file.matrix.recording_id != *rec_id {
                return Err(Error::Contract(format!(
                    "score file for {rec_id} carries recording id {}",
                    file.matrix.recording_id
                )));
            }
            if file.system_id != *sys_id {
                log::warn!(
                    "score file for {rec_id} declares system {} but is listed under {sys_id}",
                    file.system_id
                );
            }
            matrices.push(file.matrix);
        }
        recordings.push(EnsembleRecording {
            recording_id: rec_id.clone(),
            systems: matrices,
            reference: references.get(rec_id).cloned(),
        });
    }
    Ok(EnsembleData {
        system_ids,
        recordings,
    })
}
