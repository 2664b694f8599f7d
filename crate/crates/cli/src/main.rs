//! diacal: calibrate, fuse and score frame-level diarization outputs.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context};
use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

use diacal_core::calibration::{
    apply_calibration, fit_calibration, CalibrationFeature, CalibrationModel,
    CalibrationOptions, CalibrationStrategy, CalibrationTrainingSet,
};
use diacal_core::evaluation::{
    compute_bce, compute_der, frame_targets, report_csv, report_table,
    targets_in_prediction_order, Annotation, DerOptions, DerReport,
};
use diacal_core::fusion::{
    apply_metalearner, fit_metalearner, fuse_unsupervised, FusionInput, FusionRule,
    MetaLearnerModel,
};
use diacal_core::io::{
    read_rttm, read_scores, write_rttm, write_scores, write_text, ExperimentConfigFile,
    ScoreFile,
};
use diacal_core::optim::Targets;
use diacal_core::pipeline::{
    apply_pipeline, fit_pipeline_with_options, run_experiment, EnsembleData, PipelineConfig,
    PipelineOrder, PostConfig, TrainedPipeline, FusionMethod,
};
use diacal_core::spaces::{convert_space, to_probabilities, PowersetEncoding};
use diacal_core::datagen::{generate, GeneratorConfig, SystemEmission};
use diacal_core::{ProbSpace, ScoreKind};

fn parse_threshold(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|_| "not a number".to_string())?;
    if v > 0.0 && v < 1.0 {
        Ok(v)
    } else {
        Err("threshold must lie in (0,1)".into())
    }
}

fn parse_epsilon(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|_| "not a number".to_string())?;
    if v > 0.0 && v < 0.5 {
        Ok(v)
    } else {
        Err("epsilon must lie in (0,0.5)".into())
    }
}

fn parse_odd_window(s: &str) -> Result<usize, String> {
    let v: usize = s.parse().map_err(|_| "not an integer".to_string())?;
    if v >= 1 && v % 2 == 1 {
        Ok(v)
    } else {
        Err("median window must be odd and >= 1".into())
    }
}

fn parse_upsample(s: &str) -> Result<usize, String> {
    let v: usize = s.parse().map_err(|_| "not an integer".to_string())?;
    if v >= 1 {
        Ok(v)
    } else {
        Err("upsample factor must be >= 1".into())
    }
}

#[derive(Parser)]
#[command(
    name = "diacal",
    about = "Calibration and fusion of frame-level speaker diarization outputs",
    version
)]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct GlobalArgs {
    /// Experiment configuration file (JSON)
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for synthetic data generation
    #[arg(long, global = true, default_value_t = 7)]
    seed: u64,
    /// DER collar in seconds
    #[arg(long, global = true, default_value_t = 0.25)]
    collar: f64,
    /// Exclude reference overlap regions from DER scoring
    #[arg(long, global = true)]
    no_overlap_scoring: bool,
    /// Decision threshold (overrides config post-processing when given)
    #[arg(long, global = true, value_parser = parse_threshold)]
    threshold: Option<f64>,
    /// Median filter window in frames (odd; overrides config when given)
    #[arg(long, global = true, value_parser = parse_odd_window)]
    median_window: Option<usize>,
    /// Upsampling factor (overrides config when given)
    #[arg(long, global = true, value_parser = parse_upsample)]
    upsample: Option<usize>,
    /// Probability clamp for log/logit conversions
    #[arg(long, global = true, value_parser = parse_epsilon, default_value = "1e-7")]
    epsilon: f64,
    /// Output directory
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

impl GlobalArgs {
    fn out_dir(&self) -> anyhow::Result<&Path> {
        self.out
            .as_deref()
            .ok_or_else(|| anyhow!("this command requires --out <dir>"))
    }

    fn der_options(&self) -> DerOptions {
        DerOptions {
            collar_s: self.collar,
            score_overlap: !self.no_overlap_scoring,
        }
    }

    fn post_config(&self) -> PostConfig {
        let defaults = PostConfig::default();
        PostConfig {
            upsample_factor: self.upsample.unwrap_or(defaults.upsample_factor),
            median_window: self.median_window.unwrap_or(defaults.median_window),
            threshold: self.threshold.unwrap_or(defaults.threshold),
            powerset_hard: false,
        }
    }

    fn apply_post_overrides(&self, post: &mut PostConfig) {
        if let Some(v) = self.upsample {
            post.upsample_factor = v;
        }
        if let Some(v) = self.median_window {
            post.median_window = v;
        }
        if let Some(v) = self.threshold {
            post.threshold = v;
        }
    }

    fn config_path(&self) -> anyhow::Result<&Path> {
        self.global_config()
            .ok_or_else(|| anyhow!("this command requires --config <path>"))
    }

    fn global_config(&self) -> Option<&Path> {
        self.config.as_deref()
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic ensemble benchmark (scores, reference, config)
    Synth(SynthArgs),
    /// Fit a calibration model on one system's scores
    FitCal(FitCalArgs),
    /// Apply a calibration model to score files
    ApplyCal(ApplyCalArgs),
    /// Fuse aligned systems with an unsupervised rule or a MetaLearner
    Fuse(FuseArgs),
    /// Fit a MetaLearner over concatenated system logits
    FitMeta(FitMetaArgs),
    /// Fit or apply a full calibration/fusion pipeline
    Pipeline {
        #[command(subcommand)]
        action: PipelineAction,
    },
    /// Score hypotheses: DER against a reference, or BCE of score files
    Score {
        #[command(subcommand)]
        action: ScoreAction,
    },
    /// Fit and evaluate every configuration in the config grid
    Report(ReportArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Recordings to generate
    #[arg(long, default_value_t = 20)]
    recordings: usize,
    /// Frames per recording (at the base rate)
    #[arg(long, default_value_t = 3000)]
    frames: usize,
    /// Speakers per recording
    #[arg(long, default_value_t = 2)]
    speakers: usize,
    /// Base frame rate in Hz
    #[arg(long, default_value_t = 10.0)]
    rate_hz: f64,
    /// Cross-speaker noise correlation in [0,1)
    #[arg(long, default_value_t = 0.3)]
    rho: f64,
    /// Per-system emissions as scale:bias:noise_sd triples
    #[arg(long, default_value = "2.0:1.0:1.0,1.2:0.8:1.4,3.0:1.5:2.2")]
    systems: String,
    /// Markov P(on | off)
    #[arg(long, default_value_t = 0.05)]
    p_on: f64,
    /// Markov P(off | on)
    #[arg(long, default_value_t = 0.02)]
    p_off: f64,
}

#[derive(Args)]
struct FitCalArgs {
    /// Calibration family
    #[arg(long, value_enum)]
    strategy: StrategyArg,
    /// Feature map applied to probabilities
    #[arg(long, value_enum, default_value_t = FeatureArg::Log)]
    feature: FeatureArg,
    /// Inverse L2 regularization strength
    #[arg(long, default_value_t = 1.0)]
    l2_c: f64,
    /// Optimizer iteration cap
    #[arg(long, default_value_t = 1000)]
    max_iter: usize,
    /// Reference RTTM
    #[arg(long = "ref")]
    reference: PathBuf,
    /// Score files of one system (one file per recording)
    #[arg(required = true)]
    scores: Vec<PathBuf>,
}

#[derive(clap::ValueEnum, Clone, Copy)]
enum StrategyArg {
    IndependentMult,
    JointMult,
    JointPower,
}

impl From<StrategyArg> for CalibrationStrategy {
    fn from(v: StrategyArg) -> Self {
        match v {
            StrategyArg::IndependentMult => CalibrationStrategy::IndependentMult,
            StrategyArg::JointMult => CalibrationStrategy::JointMult,
            StrategyArg::JointPower => CalibrationStrategy::JointPower,
        }
    }
}

#[derive(clap::ValueEnum, Clone, Copy)]
enum FeatureArg {
    Log,
    Logit,
}

impl From<FeatureArg> for CalibrationFeature {
    fn from(v: FeatureArg) -> Self {
        match v {
            FeatureArg::Log => CalibrationFeature::Log,
            FeatureArg::Logit => CalibrationFeature::Logit,
        }
    }
}

#[derive(Args)]
struct ApplyCalArgs {
    /// Calibration model JSON
    #[arg(long)]
    model: PathBuf,
    /// Score files to calibrate
    #[arg(required = true)]
    scores: Vec<PathBuf>,
}

#[derive(clap::ValueEnum, Clone, Copy)]
enum MethodArg {
    AverageProbs,
    AverageLogits,
    DynamicLogits,
    Entropy,
    Metalearner,
}

#[derive(clap::ValueEnum, Clone, Copy)]
enum SpaceArg {
    Mult,
    Power,
}

impl From<SpaceArg> for ProbSpace {
    fn from(v: SpaceArg) -> Self {
        match v {
            SpaceArg::Mult => ProbSpace::Multilabel,
            SpaceArg::Power => ProbSpace::Powerset,
        }
    }
}

#[derive(Args)]
struct FuseArgs {
    /// Fusion method
    #[arg(long, value_enum)]
    method: MethodArg,
    /// Probability space to fuse in
    #[arg(long, value_enum, default_value_t = SpaceArg::Mult)]
    space: SpaceArg,
    /// Directory holding <system>/<recording>.scores
    #[arg(long)]
    scores_dir: PathBuf,
    /// Comma-separated system ids (anchor first)
    #[arg(long)]
    systems: String,
    /// Fitted MetaLearner JSON (required for --method metalearner)
    #[arg(long)]
    meta: Option<PathBuf>,
}

#[derive(Args)]
struct FitMetaArgs {
    /// Probability space of the concatenated logits
    #[arg(long, value_enum, default_value_t = SpaceArg::Mult)]
    space: SpaceArg,
    #[arg(long)]
    scores_dir: PathBuf,
    #[arg(long)]
    systems: String,
    #[arg(long = "ref")]
    reference: PathBuf,
    #[arg(long, default_value_t = 1.0)]
    l2_c: f64,
}

#[derive(Subcommand)]
enum PipelineAction {
    /// Fit one configuration from the config grid on the training data
    Fit(PipelineFitArgs),
    /// Apply a fitted pipeline to the config's evaluation data
    Apply(PipelineApplyArgs),
}

#[derive(Args)]
struct PipelineFitArgs {
    /// Index into the config file's `configs` array
    #[arg(long, default_value_t = 0)]
    index: usize,
    #[arg(long, default_value_t = 1.0)]
    l2_c: f64,
    #[arg(long, default_value_t = 1000)]
    max_iter: usize,
    /// Feature map for calibration stages
    #[arg(long, value_enum, default_value_t = FeatureArg::Log)]
    feature: FeatureArg,
}

#[derive(Args)]
struct PipelineApplyArgs {
    /// Fitted pipeline JSON
    #[arg(long)]
    pipeline: PathBuf,
    /// Apply to the training split instead of the evaluation split
    #[arg(long)]
    train: bool,
}

#[derive(Subcommand)]
enum ScoreAction {
    /// Diarization error rate of a hypothesis RTTM against a reference
    Der(ScoreDerArgs),
    /// Pooled per-speaker binary cross-entropy of score files
    Bce(ScoreBceArgs),
}

#[derive(Args)]
struct ScoreDerArgs {
    #[arg(long = "ref")]
    reference: PathBuf,
    #[arg(long)]
    hyp: PathBuf,
}

#[derive(Args)]
struct ScoreBceArgs {
    #[arg(long = "ref")]
    reference: PathBuf,
    #[arg(required = true)]
    scores: Vec<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    /// Also write report.csv into --out
    #[arg(long, default_value_t = 1.0)]
    l2_c: f64,
    #[arg(long, value_enum, default_value_t = FeatureArg::Log)]
    feature: FeatureArg,
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            let code = match err.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = err.print();
            std::process::exit(code);
        }
    };
    match run(cli) {
        Ok(()) => {}
        Err(err) => {
            eprintln!("error: {err:#}");
            std::process::exit(2);
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Synth(args) => synth(&cli.global, &args),
        Command::FitCal(args) => fit_cal(&cli.global, &args),
        Command::ApplyCal(args) => apply_cal(&cli.global, &args),
        Command::Fuse(args) => fuse(&cli.global, &args),
        Command::FitMeta(args) => fit_meta(&cli.global, &args),
        Command::Pipeline { action } => match action {
            PipelineAction::Fit(args) => pipeline_fit(&cli.global, &args),
            PipelineAction::Apply(args) => pipeline_apply(&cli.global, &args),
        },
        Command::Score { action } => match action {
            ScoreAction::Der(args) => score_der(&cli.global, &args),
            ScoreAction::Bce(args) => score_bce(&cli.global, &args),
        },
        Command::Report(args) => report(&cli.global, &args),
    }
}

fn parse_systems_spec(spec: &str) -> anyhow::Result<Vec<SystemEmission>> {
    spec.split(',')
        .map(|triple| {
            let parts: Vec<&str> = triple.split(':').collect();
            if parts.len() != 3 {
                bail!("system '{triple}' is not a scale:bias:noise_sd triple");
            }
            Ok(SystemEmission {
                scale: parts[0].parse().context("bad scale")?,
                bias: parts[1].parse().context("bad bias")?,
                noise_sd: parts[2].parse().context("bad noise_sd")?,
            })
        })
        .collect()
}

fn default_grid(post: PostConfig) -> Vec<PipelineConfig> {
    let methods = [
        FusionMethod::AverageProbs,
        FusionMethod::AverageLogits,
        FusionMethod::DynamicLogits,
        FusionMethod::Entropy,
        FusionMethod::Metalearner,
    ];
    let orders = [
        PipelineOrder::CalibrateThenFuse,
        PipelineOrder::FuseThenCalibrate,
    ];
    let mut grid = Vec::new();
    for method in methods {
        for order in orders {
            grid.push(PipelineConfig {
                order,
                fusion_method: method,
                post,
                ..Default::default()
            });
        }
    }
    grid
}

fn synth(global: &GlobalArgs, args: &SynthArgs) -> anyhow::Result<()> {
    let out = global.out_dir()?;
    let cfg = GeneratorConfig {
        num_speakers: args.speakers,
        frames_per_recording: args.frames,
        frame_rate_hz: args.rate_hz,
        num_recordings: args.recordings,
        p_on_given_off: args.p_on,
        p_off_given_on: args.p_off,
        systems: parse_systems_spec(&args.systems)?,
        cross_speaker_corr: args.rho,
        seed: global.seed,
    };
    let data = generate(&cfg)?;

    std::fs::create_dir_all(out)?;
    let mut systems_map: BTreeMap<String, BTreeMap<String, String>> = BTreeMap::new();
    for rec in &data.recordings {
        for (sys_id, matrix) in data.system_ids.iter().zip(&rec.systems) {
            let rel = format!("scores/{sys_id}/{}.scores", rec.recording_id);
            let path = out.join(&rel);
            std::fs::create_dir_all(path.parent().expect("has parent"))?;
            write_scores(matrix, sys_id, &path)?;
            systems_map
                .entry(sys_id.clone())
                .or_default()
                .insert(rec.recording_id.clone(), rel);
        }
    }
    let references: Vec<Annotation> = data
        .recordings
        .iter()
        .map(|r| r.reference.clone().expect("generator emits references"))
        .collect();
    write_rttm(&references, &out.join("ref.rttm"))?;

    let config = ExperimentConfigFile {
        systems: systems_map,
        reference: "ref.rttm".to_string(),
        test_systems: None,
        test_reference: None,
        configs: default_grid(global.post_config()),
    };
    config.save(&out.join("config.json"))?;
    println!(
        "wrote {} recordings x {} systems to {}",
        args.recordings,
        data.system_ids.len(),
        out.display()
    );
    Ok(())
}

/// Loads one system's score files plus reference targets, pooled over
/// recordings and converted to the requested space.
fn pooled_from_files(
    score_paths: &[PathBuf],
    reference: &Path,
    space: ProbSpace,
    epsilon: f64,
) -> anyhow::Result<(CalibrationTrainingSet, String)> {
    let refs: BTreeMap<String, Annotation> = read_rttm(reference)?
        .into_iter()
        .map(|a| (a.recording_id.clone(), a))
        .collect();
    let mut blocks = Vec::new();
    let mut target_rows: Vec<ndarray::Array2<u8>> = Vec::new();
    let mut system_id = String::new();
    let mut num_speakers = 0usize;
    for path in score_paths {
        let ScoreFile { matrix, system_id: sys } = read_scores(path)?;
        let probs = convert_space(&to_probabilities(&matrix), ProbSpace::Multilabel)?;
        if system_id.is_empty() {
            system_id = sys;
            num_speakers = probs.num_speakers;
        } else if num_speakers != probs.num_speakers {
            bail!("score files disagree on speaker count");
        }
        let ann = refs.get(&probs.recording_id).ok_or_else(|| {
            anyhow!("reference lacks recording {}", probs.recording_id)
        })?;
        let mut speakers = ann.speakers();
        speakers.truncate(num_speakers);
        let targets = frame_targets(ann, probs.frame_rate_hz, probs.num_frames(), &speakers);
        let aligned_targets = targets_in_prediction_order(&probs, &targets)?;
        let staged = convert_space(&probs, space)?;
        blocks.push(staged.values);
        target_rows.push(aligned_targets.values);
    }
    let total: usize = blocks.iter().map(|b| b.nrows()).sum();
    let dim = space.dim(num_speakers);
    let mut probs = ndarray::Array2::<f64>::zeros((total, dim));
    let mut targets_mult = ndarray::Array2::<u8>::zeros((total, num_speakers));
    let mut offset = 0;
    for (block, trow) in blocks.iter().zip(&target_rows) {
        probs
            .slice_mut(ndarray::s![offset..offset + block.nrows(), ..])
            .assign(block);
        targets_mult
            .slice_mut(ndarray::s![offset..offset + trow.nrows(), ..])
            .assign(trow);
        offset += block.nrows();
    }
    let targets = match space {
        ProbSpace::Multilabel => Targets::Binary(targets_mult),
        ProbSpace::Powerset => {
            let enc = PowersetEncoding::new(num_speakers)?;
            Targets::Class {
                classes: targets_mult
                    .rows()
                    .into_iter()
                    .map(|r| enc.class_of(r.as_slice().expect("contiguous")))
                    .collect(),
                num_classes: enc.class_count(),
            }
        }
    };
    let _ = epsilon;
    Ok((
        CalibrationTrainingSet {
            probs,
            targets,
            space,
            num_speakers,
            sample_weights: None,
            trained_on: format!("{} recordings from files", score_paths.len()),
        },
        system_id,
    ))
}

fn fit_cal(global: &GlobalArgs, args: &FitCalArgs) -> anyhow::Result<()> {
    let out = global.out_dir()?;
    let strategy: CalibrationStrategy = args.strategy.into();
    let (train, _) = pooled_from_files(
        &args.scores,
        &args.reference,
        strategy.space(),
        global.epsilon,
    )?;
    let opts = CalibrationOptions {
        l2_c: args.l2_c,
        max_iter: args.max_iter,
        epsilon: global.epsilon,
        feature: args.feature.into(),
    };
    let model = fit_calibration(&train, strategy, &opts)?;
    std::fs::create_dir_all(out)?;
    let path = out.join("calibration.json");
    write_text(&path, &format!("{}\n", model.to_json()?))?;
    println!("wrote {}", path.display());
    Ok(())
}

fn apply_cal(global: &GlobalArgs, args: &ApplyCalArgs) -> anyhow::Result<()> {
    let out = global.out_dir()?;
    let model = CalibrationModel::from_json(&diacal_core::io::read_text(&args.model)?)?;
    std::fs::create_dir_all(out)?;
    for path in &args.scores {
        let ScoreFile { matrix, system_id } = read_scores(path)?;
        let staged = convert_space(&to_probabilities(&matrix), model.space)?;
        let calibrated = apply_calibration(&model, &staged)?;
        let name = path
            .file_name()
            .ok_or_else(|| anyhow!("{} has no file name", path.display()))?;
        let dest = out.join(name);
        write_scores(&calibrated, &system_id, &dest)?;
        println!("wrote {}", dest.display());
    }
    Ok(())
}

/// Loads `<scores_dir>/<system>/<recording>.scores` for every listed system,
/// keyed by the recordings of the first system.
fn load_ensemble_dir(scores_dir: &Path, systems: &str) -> anyhow::Result<EnsembleData> {
    let system_ids: Vec<String> = systems.split(',').map(str::to_string).collect();
    if system_ids.is_empty() {
        bail!("--systems must list at least one system id");
    }
    let first_dir = scores_dir.join(&system_ids[0]);
    let mut rec_files: Vec<String> = std::fs::read_dir(&first_dir)
        .with_context(|| format!("listing {}", first_dir.display()))?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.ends_with(".scores") || n.ends_with(".scores.gz"))
        .collect();
    rec_files.sort();

    let mut recordings = Vec::new();
    for file in &rec_files {
        let mut matrices = Vec::new();
        let mut rec_id = String::new();
        for sys in &system_ids {
            let sf = read_scores(&scores_dir.join(sys).join(file))?;
            rec_id = sf.matrix.recording_id.clone();
            matrices.push(sf.matrix);
        }
        recordings.push(diacal_core::pipeline::EnsembleRecording {
            recording_id: rec_id,
            systems: matrices,
            reference: None,
        });
    }
    Ok(EnsembleData {
        system_ids,
        recordings,
    })
}

fn fuse(global: &GlobalArgs, args: &FuseArgs) -> anyhow::Result<()> {
    let out = global.out_dir()?;
    let data = load_ensemble_dir(&args.scores_dir, &args.systems)?;
    let space: ProbSpace = args.space.into();
    let meta = match args.method {
        MethodArg::Metalearner => {
            let path = args
                .meta
                .as_ref()
                .ok_or_else(|| anyhow!("--method metalearner requires --meta <model>"))?;
            Some(MetaLearnerModel::from_json(&diacal_core::io::read_text(path)?)?)
        }
        _ => None,
    };
    std::fs::create_dir_all(out)?;
    for rec in &data.recordings {
        let aligned = align_recording(&rec.systems)?;
        let staged: Vec<_> = aligned
            .iter()
            .map(|m| convert_space(m, space))
            .collect::<diacal_core::Result<_>>()?;
        let input = FusionInput::with_epsilon(&staged, &data.system_ids, global.epsilon)?;
        let fused = match args.method {
            MethodArg::AverageProbs => fuse_unsupervised(&input, FusionRule::AverageProbs)?,
            MethodArg::AverageLogits => fuse_unsupervised(&input, FusionRule::AverageLogits)?,
            MethodArg::DynamicLogits => fuse_unsupervised(&input, FusionRule::DynamicLogits)?,
            MethodArg::Entropy => fuse_unsupervised(&input, FusionRule::Entropy)?,
            MethodArg::Metalearner => {
                apply_metalearner(meta.as_ref().expect("checked above"), &input)?
            }
        };
        let dest = out.join(format!("{}.scores", rec.recording_id));
        write_scores(&fused, "fused", &dest)?;
    }
    println!("fused {} recordings into {}", data.recordings.len(), out.display());
    Ok(())
}

fn align_recording(
    systems: &[diacal_core::FrameScoreMatrix],
) -> anyhow::Result<Vec<diacal_core::FrameScoreMatrix>> {
    let canon: Vec<_> = systems
        .iter()
        .map(|m| convert_space(&to_probabilities(m), ProbSpace::Multilabel))
        .collect::<diacal_core::Result<_>>()?;
    let (anchor, rest) = canon.split_first().expect("non-empty");
    let refs: Vec<&diacal_core::FrameScoreMatrix> = rest.iter().collect();
    let perms = diacal_core::fusion::align_systems(anchor, &refs)?;
    let mut out = vec![anchor.clone()];
    for (sys, perm) in rest.iter().zip(perms) {
        out.push(diacal_core::FrameScoreMatrix {
            values: perm.apply_to_columns(&sys.values),
            ..sys.clone()
        });
    }
    Ok(out)
}

fn fit_meta(global: &GlobalArgs, args: &FitMetaArgs) -> anyhow::Result<()> {
    let out = global.out_dir()?;
    let data = load_ensemble_dir(&args.scores_dir, &args.systems)?;
    let refs: BTreeMap<String, Annotation> = read_rttm(&args.reference)?
        .into_iter()
        .map(|a| (a.recording_id.clone(), a))
        .collect();
    let space: ProbSpace = args.space.into();
    let num_speakers = data.recordings[0].systems[0].num_speakers;

    let mut blocks: Vec<Vec<ndarray::Array2<f64>>> = vec![Vec::new(); data.system_ids.len()];
    let mut target_blocks: Vec<ndarray::Array2<u8>> = Vec::new();
    for rec in &data.recordings {
        let aligned = align_recording(&rec.systems)?;
        let ann = refs
            .get(&rec.recording_id)
            .ok_or_else(|| anyhow!("reference lacks recording {}", rec.recording_id))?;
        let mut speakers = ann.speakers();
        speakers.truncate(num_speakers);
        let raw_targets = frame_targets(
            ann,
            aligned[0].frame_rate_hz,
            aligned[0].num_frames(),
            &speakers,
        );
        target_blocks.push(targets_in_prediction_order(&aligned[0], &raw_targets)?.values);
        for (k, sys) in aligned.iter().enumerate() {
            let staged = convert_space(sys, space)?;
            blocks[k].push(diacal_core::spaces::to_logits(&staged, global.epsilon)?.values);
        }
    }
    let stack = |parts: &[ndarray::Array2<f64>]| {
        let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
        ndarray::concatenate(ndarray::Axis(0), &views).expect("consistent shapes")
    };
    let logits: Vec<ndarray::Array2<f64>> = blocks.iter().map(|b| stack(b)).collect();
    let target_views: Vec<_> = target_blocks.iter().map(|p| p.view()).collect();
    let targets_mult = ndarray::concatenate(ndarray::Axis(0), &target_views)?;
    let targets = match space {
        ProbSpace::Multilabel => Targets::Binary(targets_mult),
        ProbSpace::Powerset => {
            let enc = PowersetEncoding::new(num_speakers)?;
            Targets::Class {
                classes: targets_mult
                    .rows()
                    .into_iter()
                    .map(|r| enc.class_of(r.as_slice().expect("contiguous")))
                    .collect(),
                num_classes: enc.class_count(),
            }
        }
    };
    let model = fit_metalearner(
        &logits,
        &targets,
        space,
        num_speakers,
        &data.system_ids,
        args.l2_c,
        global.epsilon,
    )?;
    std::fs::create_dir_all(out)?;
    let path = out.join("metalearner.json");
    write_text(&path, &format!("{}\n", model.to_json()?))?;
    println!("wrote {}", path.display());
    Ok(())
}

fn pipeline_fit(global: &GlobalArgs, args: &PipelineFitArgs) -> anyhow::Result<()> {
    let out = global.out_dir()?;
    let (cfg_file, base) = ExperimentConfigFile::load(global.config_path()?)?;
    let mut config = cfg_file
        .configs
        .get(args.index)
        .ok_or_else(|| {
            anyhow!(
                "--index {} out of range: config file has {} configs",
                args.index,
                cfg_file.configs.len()
            )
        })?
        .clone();
    global.apply_post_overrides(&mut config.post);
    let train = cfg_file.train_ensemble(&base)?;
    let cal_opts = CalibrationOptions {
        l2_c: args.l2_c,
        max_iter: args.max_iter,
        epsilon: global.epsilon,
        feature: args.feature.into(),
    };
    let tp = fit_pipeline_with_options(&config, &train, &cal_opts)?;
    std::fs::create_dir_all(out)?;
    let path = out.join("pipeline.json");
    write_text(&path, &format!("{}\n", tp.to_json()?))?;
    println!("wrote {}", path.display());
    Ok(())
}

fn pipeline_apply(global: &GlobalArgs, args: &PipelineApplyArgs) -> anyhow::Result<()> {
    let out = global.out_dir()?;
    let (cfg_file, base) = ExperimentConfigFile::load(global.config_path()?)?;
    let tp = TrainedPipeline::from_json(&diacal_core::io::read_text(&args.pipeline)?)?;
    let data = if args.train {
        cfg_file.train_ensemble(&base)?
    } else {
        cfg_file.test_ensemble(&base)?
    };
    std::fs::create_dir_all(out.join("probs"))?;
    let mut hypotheses = Vec::with_capacity(data.recordings.len());
    for rec in &data.recordings {
        let result = apply_pipeline(&tp, &data.system_ids, &rec.systems)?;
        write_scores(
            &result.probs,
            "pipeline",
            &out.join("probs").join(format!("{}.scores", rec.recording_id)),
        )?;
        hypotheses.push(result.hypothesis);
    }
    write_rttm(&hypotheses, &out.join("hyp.rttm"))?;
    println!("wrote {}", out.join("hyp.rttm").display());
    Ok(())
}

fn score_der(global: &GlobalArgs, args: &ScoreDerArgs) -> anyhow::Result<()> {
    let reference = read_rttm(&args.reference)?;
    let hypotheses: BTreeMap<String, Annotation> = read_rttm(&args.hyp)?
        .into_iter()
        .map(|a| (a.recording_id.clone(), a))
        .collect();
    if reference.is_empty() {
        bail!("reference RTTM contains no segments");
    }
    for hyp_id in hypotheses.keys() {
        if !reference.iter().any(|r| &r.recording_id == hyp_id) {
            log::warn!("hypothesis recording {hyp_id} absent from reference, skipped");
        }
    }
    let opts = global.der_options();
    let mut reports = Vec::with_capacity(reference.len());
    for ref_ann in &reference {
        let empty = Annotation {
            recording_id: ref_ann.recording_id.clone(),
            segments: Vec::new(),
        };
        let hyp = hypotheses.get(&ref_ann.recording_id).unwrap_or(&empty);
        reports.push(compute_der(ref_ann, hyp, &opts)?);
    }
    let total = DerReport::aggregate(&reports)?;
    println!(
        "DER {:.3} MISS {:.3} FA {:.3} CONF {:.3} SCORED_S {:.3}",
        total.der_pct,
        total.miss_pct,
        total.false_alarm_pct,
        total.confusion_pct,
        total.scored_speech_s
    );
    Ok(())
}

fn score_bce(global: &GlobalArgs, args: &ScoreBceArgs) -> anyhow::Result<()> {
    let refs: BTreeMap<String, Annotation> = read_rttm(&args.reference)?
        .into_iter()
        .map(|a| (a.recording_id.clone(), a))
        .collect();
    let mut weighted = 0.0f64;
    let mut weight = 0.0f64;
    for path in &args.scores {
        let ScoreFile { matrix, .. } = read_scores(path)?;
        let probs = to_probabilities(&matrix);
        let mult = convert_space(&probs, ProbSpace::Multilabel)?;
        let ann = refs.get(&mult.recording_id).ok_or_else(|| {
            anyhow!("reference lacks recording {}", mult.recording_id)
        })?;
        let mut speakers = ann.speakers();
        speakers.truncate(mult.num_speakers);
        let targets = frame_targets(ann, mult.frame_rate_hz, mult.num_frames(), &speakers);
        let bce = compute_bce(&probs, &targets, global.epsilon)?;
        let w = (mult.num_frames() * mult.num_speakers) as f64;
        weighted += bce * w;
        weight += w;
    }
    println!("BCE {:.3}", weighted / weight);
    Ok(())
}

fn report(global: &GlobalArgs, args: &ReportArgs) -> anyhow::Result<()> {
    let (cfg_file, base) = ExperimentConfigFile::load(global.config_path()?)?;
    if cfg_file.configs.is_empty() {
        bail!("config file has an empty `configs` grid");
    }
    let mut grid = cfg_file.configs.clone();
    for config in &mut grid {
        global.apply_post_overrides(&mut config.post);
    }
    let train = cfg_file.train_ensemble(&base)?;
    let test = cfg_file.test_ensemble(&base)?;
    let cal_opts = CalibrationOptions {
        l2_c: args.l2_c,
        epsilon: global.epsilon,
        feature: args.feature.into(),
        ..Default::default()
    };
    let (rows, _) = run_experiment(&grid, &train, &test, &global.der_options(), &cal_opts)?;
    print!("{}", report_table(&rows));
    if let Some(out) = global.out.as_deref() {
        std::fs::create_dir_all(out)?;
        let path = out.join("report.csv");
        write_text(&path, &report_csv(&rows))?;
        eprintln!("wrote {}", path.display());
    }
    Ok(())
}
