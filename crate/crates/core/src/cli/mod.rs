//! Command-line front end: config loading, the six commands, artifacts.

pub mod artifacts;

use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::error::{Error, Result};
use crate::fcnn::{self, model_to_bytes};
use crate::io::{read_file, sha256_hex, to_json_17, write_file};
use crate::pipeline::{
    self, epsilon_metric, generate_dataset, generate_truths, run_experiment, time_mean, Dataset, EnsembleChoice,
    ExperimentConfig, TruthSettings,
};
use artifacts::*;

#[derive(Debug, Parser)]
#[command(
    name = "hybrid-enkf",
    version,
    about = "EnKF with a learned small-ensemble correction"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone)]
pub struct Common {
    /// Config file, or a preset name (`lorenz63-paper`, `lorenz96-paper`).
    #[arg(long)]
    pub config: Option<String>,
    /// Overrides the config's master seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads; results do not depend on this.
    #[arg(long)]
    pub workers: Option<usize>,
    /// Primary output file.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Subset {
    All,
    Train,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum EnsembleArg {
    Small,
    Large,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate truth trajectories.
    Truth {
        #[command(flatten)]
        common: Common,
    },
    /// Run paired large/small EnKF over the truths and write training records.
    Dataset {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        truth: PathBuf,
    },
    /// Train the correction network.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: PathBuf,
        /// Per-epoch loss file; defaults to `<out>.metrics.json`.
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Run the filter over the truths: plain, or coupled when `--model` is given.
    Run {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        truth: PathBuf,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "small")]
        ensemble: EnsembleArg,
        #[arg(long, value_enum, default_value = "all")]
        subset: Subset,
    },
    /// ε(t) of a small-ensemble run against a large-ensemble run.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        small: PathBuf,
        #[arg(long)]
        large: PathBuf,
        /// Uncorrected small run, for the improvement ratio.
        #[arg(long)]
        baseline: Option<PathBuf>,
    },
    /// Time one window propagation against one network forward call.
    Bench {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value_t = 1000)]
        repetitions: usize,
        #[arg(long, default_value_t = 10)]
        calls_per_repetition: usize,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Truth { .. } => "truth",
            Command::Dataset { .. } => "dataset",
            Command::Train { .. } => "train",
            Command::Run { .. } => "run",
            Command::Eval { .. } => "eval",
            Command::Bench { .. } => "bench",
        }
    }

    pub fn common(&self) -> &Common {
        match self {
            Command::Truth { common }
            | Command::Dataset { common, .. }
            | Command::Train { common, .. }
            | Command::Run { common, .. }
            | Command::Eval { common, .. }
            | Command::Bench { common, .. } => common,
        }
    }
}

/// Parses a config document, reporting the failing field path and position.
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let config: ExperimentConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let inner = e.into_inner();
        let field = if path == "." { "<root>".to_string() } else { path };
        Error::Config {
            field,
            message: format!("{inner} (line {}, column {})", inner.line(), inner.column()),
        }
    })?;
    config.validate()?;
    Ok(config)
}

/// A preset name, or a path to a config file.
pub fn load_config(spec: &str, seed: Option<u64>) -> Result<ExperimentConfig> {
    let mut config = match ExperimentConfig::preset(spec) {
        Some(c) if !Path::new(spec).exists() => c,
        None if !Path::new(spec).exists() => {
            return Err(Error::config(
                "--config",
                format!("`{spec}` is neither a file nor a preset"),
            ));
        }
        _ => {
            let bytes = read_file(Path::new(spec))?;
            let text = String::from_utf8(bytes).map_err(|_| Error::config("<root>", "config is not UTF-8"))?;
            parse_config(&text)?
        }
    };
    if let Some(s) = seed {
        config.seed = s;
        config.validate()?;
    }
    Ok(config)
}

fn require_config(common: &Common) -> Result<ExperimentConfig> {
    let spec = common
        .config
        .as_deref()
        .ok_or_else(|| Error::config("--config", "this command needs a config"))?;
    load_config(spec, common.seed)
}

/// Files a command read and wrote, for its manifest.
#[derive(Default)]
struct Io {
    inputs: Vec<FileRef>,
    outputs: Vec<FileRef>,
}

impl Io {
    fn read(&mut self, role: &str, path: &Path) -> Result<Vec<u8>> {
        let bytes = read_file(path)?;
        self.inputs.push(FileRef::of(role, path, &bytes));
        Ok(bytes)
    }

    fn write(&mut self, role: &str, path: &Path, bytes: &[u8]) -> Result<()> {
        write_file(path, bytes)?;
        self.outputs.push(FileRef::of(role, path, bytes));
        Ok(())
    }
}

fn load_truth(io: &mut Io, path: &Path, config: &ExperimentConfig) -> Result<(Envelope<TruthPayload>, String)> {
    let bytes = io.read("truth", path)?;
    let env = Envelope::<TruthPayload>::from_bytes(&bytes, TRUTH_FORMAT)?;
    if env.provenance.truth_fingerprint != config.truth_fingerprint()? {
        return Err(Error::Provenance(format!(
            "{} was generated for a different model, experiment or seed",
            path.display()
        )));
    }
    Ok((env, sha256_hex(&bytes)))
}

fn cmd_truth(config: &ExperimentConfig, common: &Common, io: &mut Io) -> Result<()> {
    let truths = generate_truths(&config.model_spec()?, &TruthSettings::from(config), config.seed)?;
    let env = Envelope::new(
        TRUTH_FORMAT,
        Provenance::new(config, vec![])?,
        TruthPayload { trajectories: truths },
    )?;
    io.write("truth", &common.out, &env.to_bytes()?)
}

fn cmd_dataset(config: &ExperimentConfig, common: &Common, truth: &Path, io: &mut Io) -> Result<()> {
    let (env, truth_sha) = load_truth(io, truth, config)?;
    let dataset = generate_dataset(config, &env.payload.trajectories)?;
    let prov = Provenance::new(
        config,
        vec![InputRef {
            role: "truth".into(),
            sha256: truth_sha,
        }],
    )?;
    let out = Envelope::new(DATASET_FORMAT, prov, dataset)?;
    io.write("dataset", &common.out, &out.to_bytes()?)
}

fn target_variance(pairs: &[fcnn::TrainingPair]) -> Option<f64> {
    let values: Vec<f64> = pairs.iter().flat_map(|p| p.target.iter().copied()).collect();
    if values.is_empty() {
        return None;
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    Some(values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / values.len() as f64)
}

fn cmd_train(
    config: &ExperimentConfig,
    common: &Common,
    dataset: &Path,
    metrics: Option<&Path>,
    io: &mut Io,
) -> Result<()> {
    let bytes = io.read("dataset", dataset)?;
    let env = Envelope::<Dataset>::from_bytes(&bytes, DATASET_FORMAT)?;
    if env.provenance.filter_fingerprint != config.filter_fingerprint()? {
        return Err(Error::Provenance(format!(
            "{} was generated under a different filter configuration",
            dataset.display()
        )));
    }
    let dataset_sha = sha256_hex(&bytes);
    let mut outcome = pipeline::train_on_dataset(config, &env.payload)?;
    let meta = outcome.model.training.as_mut().expect("trained model carries metadata");
    meta.dataset_sha256 = Some(dataset_sha.clone());
    let meta = meta.clone();
    let model_bytes = model_to_bytes(&outcome.model)?;
    io.write("model", &common.out, &model_bytes)?;
    let report = TrainingMetrics {
        format: METRICS_FORMAT.into(),
        version: ARTIFACT_VERSION,
        dataset_sha256: dataset_sha,
        model_sha256: sha256_hex(&model_bytes),
        epochs: outcome.history,
        best_epoch: meta.best_epoch,
        final_train_loss: meta.final_train_loss,
        final_validation_loss: meta.final_validation_loss,
        test_mse: meta.test_mse,
        test_target_variance: target_variance(&env.payload.pairs(&env.payload.test)?),
    };
    let metrics_path = metrics.map(Path::to_path_buf).unwrap_or_else(|| {
        let mut name = common.out.file_name().unwrap_or_default().to_os_string();
        name.push(".metrics.json");
        common.out.with_file_name(name)
    });
    io.write("metrics", &metrics_path, &to_json_17(&report)?)
}

fn cmd_run(
    config: &ExperimentConfig,
    common: &Common,
    truth: &Path,
    model: Option<&Path>,
    ensemble: EnsembleArg,
    subset: Subset,
    io: &mut Io,
) -> Result<()> {
    let (env, truth_sha) = load_truth(io, truth, config)?;
    let network = match model {
        Some(p) => {
            let bytes = io.read("model", p)?;
            Some((fcnn::model_from_bytes(&bytes)?, sha256_hex(&bytes)))
        }
        None => None,
    };
    let choice = match ensemble {
        EnsembleArg::Small => EnsembleChoice::Small,
        EnsembleArg::Large => EnsembleChoice::Large,
    };
    let (train, test) = config.split();
    let keep: Vec<usize> = match subset {
        Subset::All => (0..config.experiment.trajectories).collect(),
        Subset::Train => train,
        Subset::Test => test,
    };
    let truths: Vec<_> = env
        .payload
        .trajectories
        .iter()
        .filter(|t| keep.contains(&t.index))
        .cloned()
        .collect();
    let runs = run_experiment(config, &truths, choice, network.as_ref().map(|(m, _)| m))?;
    let subset_name = format!("{subset:?}").to_lowercase();
    let meta = [
        ("format", RUN_FORMAT.to_string()),
        ("version", ARTIFACT_VERSION.to_string()),
        ("config_hash", config.hash()?),
        ("filter_fingerprint", config.filter_fingerprint()?),
        ("truth_sha256", truth_sha),
        (
            "model_sha256",
            network.as_ref().map_or_else(|| "none".to_string(), |(_, h)| h.clone()),
        ),
        ("ensemble", format!("{choice:?}").to_lowercase()),
        ("members", choice.size(config).to_string()),
        ("subset", subset_name),
    ];
    let refs: Vec<_> = truths.iter().collect();
    let csv = render_run_csv(&meta, &refs, &runs)?;
    io.write("run", &common.out, csv.as_bytes())
}

fn load_run(io: &mut Io, role: &str, path: &Path) -> Result<(RunTable, String)> {
    let bytes = io.read(role, path)?;
    let text =
        String::from_utf8(bytes.clone()).map_err(|_| Error::Corrupt(format!("{} is not UTF-8", path.display())))?;
    Ok((parse_run_csv(&text)?, sha256_hex(&bytes)))
}

fn check_aligned(a: &RunTable, b: &RunTable, what: &str) -> Result<()> {
    for key in ["truth_sha256", "filter_fingerprint"] {
        if a.meta.get(key) != b.meta.get(key) {
            return Err(Error::Provenance(format!("{what}: runs disagree on {key}")));
        }
    }
    if a.trajectory_ids() != b.trajectory_ids() || a.steps() != b.steps() {
        return Err(Error::Misaligned(format!("{what}: trajectories or step grids differ")));
    }
    Ok(())
}

fn cmd_eval(common: &Common, small: &Path, large: &Path, baseline: Option<&Path>, io: &mut Io) -> Result<()> {
    let (small_t, small_sha) = load_run(io, "small", small)?;
    let (large_t, large_sha) = load_run(io, "large", large)?;
    check_aligned(&small_t, &large_t, "small vs large")?;
    let reference = large_t.corrected_series();
    let epsilon = epsilon_metric(&small_t.corrected_series(), &reference)?;
    let tm = time_mean(&epsilon);
    let baseline = match baseline {
        Some(p) => {
            let (base_t, sha) = load_run(io, "baseline", p)?;
            check_aligned(&base_t, &large_t, "baseline vs large")?;
            let eps = epsilon_metric(&base_t.corrected_series(), &reference)?;
            Some(BaselineSummary {
                sha256: sha,
                time_mean_epsilon: time_mean(&eps),
                epsilon: eps,
            })
        }
        None => None,
    };
    let report = EvalReport {
        format: EVAL_FORMAT.into(),
        version: ARTIFACT_VERSION,
        truth_sha256: small_t.meta.get("truth_sha256").unwrap_or_default().to_string(),
        small_sha256: small_sha,
        large_sha256: large_sha,
        trajectories: small_t.trajectory_ids(),
        steps: small_t.steps().first().cloned().unwrap_or_default(),
        improvement_ratio: baseline.as_ref().map(|b| b.time_mean_epsilon / tm),
        epsilon,
        time_mean_epsilon: tm,
        baseline,
    };
    io.write("eval", &common.out, &to_json_17(&report)?)
}

fn cmd_bench(
    config: &ExperimentConfig,
    common: &Common,
    model: &Path,
    repetitions: usize,
    calls: usize,
    io: &mut Io,
) -> Result<()> {
    let bytes = io.read("model", model)?;
    let network = fcnn::model_from_bytes(&bytes)?;
    let settings = TruthSettings {
        count: 1,
        steps: 0,
        ..TruthSettings::from(config)
    };
    let state = generate_truths(&config.model_spec()?, &settings, config.seed)?[0].states[0]
        .values
        .clone();
    let r = pipeline::timing_benchmark(config, &network, &state, repetitions, calls)?;
    let report = BenchReport {
        format: BENCH_FORMAT.into(),
        version: ARTIFACT_VERSION,
        config_name: config.name.clone(),
        config_hash: config.hash()?,
        model_sha256: sha256_hex(&bytes),
        repetitions: r.repetitions,
        calls_per_repetition: r.calls_per_repetition,
        single_window_seconds: r.single_window_seconds,
        fcnn_inference_seconds: r.fcnn_inference_seconds,
        window_to_inference_ratio: r.single_window_seconds / r.fcnn_inference_seconds,
        machine: MachineInfo::current(),
    };
    io.write("bench", &common.out, &to_json_17(&report)?)
}

fn dispatch(command: &Command, config: Option<&ExperimentConfig>, io: &mut Io) -> Result<()> {
    let need = || config.ok_or_else(|| Error::config("--config", "this command needs a config"));
    match command {
        Command::Truth { common } => cmd_truth(need()?, common, io),
        Command::Dataset { common, truth } => cmd_dataset(need()?, common, truth, io),
        Command::Train {
            common,
            dataset,
            metrics,
        } => cmd_train(need()?, common, dataset, metrics.as_deref(), io),
        Command::Run {
            common,
            truth,
            model,
            ensemble,
            subset,
        } => cmd_run(need()?, common, truth, model.as_deref(), *ensemble, *subset, io),
        Command::Eval {
            common,
            small,
            large,
            baseline,
        } => cmd_eval(common, small, large, baseline.as_deref(), io),
        Command::Bench {
            common,
            model,
            repetitions,
            calls_per_repetition,
        } => cmd_bench(need()?, common, model, *repetitions, *calls_per_repetition, io),
    }
}

/// Executes a parsed command, then writes its manifest.
pub fn execute(cli: &Cli) -> Result<()> {
    let started = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0.0, |d| d.as_secs_f64());
    let clock = Instant::now();
    let common = cli.command.common();
    let config = match (&cli.command, &common.config) {
        (Command::Eval { .. }, None) => None,
        _ => Some(require_config(common)?),
    };
    let workers = common.workers.unwrap_or_else(rayon::current_num_threads);
    if workers == 0 {
        return Err(Error::config("--workers", "must be >= 1"));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::config("--workers", e.to_string()))?;
    let mut io = Io::default();
    pool.install(|| dispatch(&cli.command, config.as_ref(), &mut io))?;
    let manifest = RunManifest {
        format: MANIFEST_FORMAT.into(),
        version: ARTIFACT_VERSION,
        tool_version: TOOL_VERSION.into(),
        command: cli.command.name().into(),
        config_hash: config.as_ref().map(|c| c.hash()).transpose()?,
        seed: config.as_ref().map(|c| c.seed),
        config,
        workers,
        inputs: io.inputs,
        outputs: io.outputs,
        started_unix_seconds: started,
        wall_seconds: clock.elapsed().as_secs_f64(),
    };
    write_manifest(&common.out, &manifest)
}

/// Parses `args` (including the program name) and runs; returns the exit code.
pub fn run_from_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_errors_name_the_field() {
        let mut v = serde_json::to_value(ExperimentConfig::lorenz63_paper()).unwrap();
        v["model"]["system"]["kind"] = serde_json::json!("lorenz84");
        match parse_config(&v.to_string()) {
            Err(Error::Config { field, .. }) => assert!(field.starts_with("model.system"), "{field}"),
            other => panic!("{other:?}"),
        }
        let text = serde_json::to_string_pretty(&ExperimentConfig::lorenz63_paper())
            .unwrap()
            .replace("\"small\": 7", "\"small\": 7,\n    \"medium\": 3");
        match parse_config(&text) {
            Err(Error::Config { field, message }) => {
                assert_eq!(field, "ensemble.medium");
                assert!(message.contains("line"), "{message}");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn presets_load_by_name() {
        let c = load_config("lorenz96-paper", Some(9)).unwrap();
        assert_eq!(c.seed, 9);
        assert_eq!(c.model_spec().unwrap().steps_per_window, 5);
    }
}
