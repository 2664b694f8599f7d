//! Golden files pin the generator's exact random streams and the score/RTTM
//! writer formats. Regenerate with DIACAL_REGEN_GOLDEN=1 after an intentional
//! format or stream change.

use std::path::PathBuf;

use diacal_core::datagen::{generate, GeneratorConfig, SystemEmission};
use diacal_core::io::{write_rttm, write_scores};

fn golden_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/data")
}

#[test]
fn generator_streams_match_golden_files() {
    let cfg = GeneratorConfig {
        num_speakers: 2,
        frames_per_recording: 8,
        frame_rate_hz: 10.0,
        num_recordings: 2,
        p_on_given_off: 0.3,
        p_off_given_on: 0.2,
        systems: vec![
            SystemEmission {
                scale: 2.0,
                bias: 1.0,
                noise_sd: 1.0,
            },
            SystemEmission {
                scale: 1.2,
                bias: -0.5,
                noise_sd: 1.5,
            },
        ],
        cross_speaker_corr: 0.25,
        seed: 42,
    };
    let data = generate(&cfg).unwrap();

    let tmp = tempfile::tempdir().unwrap();
    let mut produced: Vec<(String, PathBuf)> = Vec::new();
    for rec in &data.recordings {
        for (sys, matrix) in data.system_ids.iter().zip(&rec.systems) {
            let name = format!("golden_{}_{}.scores", rec.recording_id, sys);
            let path = tmp.path().join(&name);
            write_scores(matrix, sys, &path).unwrap();
            produced.push((name, path));
        }
    }
    let references: Vec<_> = data
        .recordings
        .iter()
        .map(|r| r.reference.clone().unwrap())
        .collect();
    let rttm_path = tmp.path().join("golden_ref.rttm");
    write_rttm(&references, &rttm_path).unwrap();
    produced.push(("golden_ref.rttm".to_string(), rttm_path));

    if std::env::var_os("DIACAL_REGEN_GOLDEN").is_some() {
        std::fs::create_dir_all(golden_dir()).unwrap();
        for (name, path) in &produced {
            std::fs::copy(path, golden_dir().join(name)).unwrap();
        }
        panic!("golden files regenerated; re-run without DIACAL_REGEN_GOLDEN");
    }

    for (name, path) in &produced {
        let expected = std::fs::read_to_string(golden_dir().join(name))
            .unwrap_or_else(|_| panic!("missing golden file {name}"));
        let actual = std::fs::read_to_string(path).unwrap();
        assert_eq!(actual, expected, "{name} deviates from the pinned stream");
    }
}
