//! On-disk artifact formats. Field names and layouts are frozen in
//! `docs/formats.md`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::enkf::TruthTrajectory;
use crate::error::{Error, Result};
use crate::io::{fmt_f64, read_file, sha256_hex, to_json_17, to_json_pretty, write_file};
use crate::numerics::ALGORITHM_ID;
use crate::pipeline::{ExperimentConfig, TrajectoryRun};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");
pub const ARTIFACT_VERSION: u64 = 1;

pub const TRUTH_FORMAT: &str = "hybrid-enkf/truth";
pub const DATASET_FORMAT: &str = "hybrid-enkf/dataset";
pub const METRICS_FORMAT: &str = "hybrid-enkf/training-metrics";
pub const RUN_FORMAT: &str = "hybrid-enkf/run";
pub const EVAL_FORMAT: &str = "hybrid-enkf/eval";
pub const BENCH_FORMAT: &str = "hybrid-enkf/bench";
pub const MANIFEST_FORMAT: &str = "hybrid-enkf/manifest";

/// An input artifact identified by role and content hash.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputRef {
    pub role: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Provenance {
    pub tool_version: String,
    pub config_name: String,
    pub config_hash: String,
    pub truth_fingerprint: String,
    pub filter_fingerprint: String,
    pub seed: u64,
    pub rng_algorithm: String,
    pub inputs: Vec<InputRef>,
}

impl Provenance {
    pub fn new(config: &ExperimentConfig, inputs: Vec<InputRef>) -> Result<Self> {
        Ok(Self {
            tool_version: TOOL_VERSION.into(),
            config_name: config.name.clone(),
            config_hash: config.hash()?,
            truth_fingerprint: config.truth_fingerprint()?,
            filter_fingerprint: config.filter_fingerprint()?,
            seed: config.seed,
            rng_algorithm: ALGORITHM_ID.into(),
            inputs,
        })
    }

    pub fn input(&self, role: &str) -> Option<&str> {
        self.inputs.iter().find(|i| i.role == role).map(|i| i.sha256.as_str())
    }
}

/// JSON envelope shared by the truth and dataset artifacts.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Envelope<P> {
    pub format: String,
    pub version: u64,
    pub provenance: Provenance,
    /// SHA-256 of the canonical serialization of `payload`.
    pub payload_sha256: String,
    pub payload: P,
}

#[derive(Deserialize)]
struct Header {
    format: Option<String>,
    version: Option<u64>,
}

fn check_header(bytes: &[u8], format: &str, version: u64) -> Result<()> {
    let h: Header = serde_json::from_slice(bytes).map_err(|e| Error::Corrupt(e.to_string()))?;
    if h.format.as_deref() != Some(format) {
        return Err(Error::Corrupt(format!("expected a {format} document")));
    }
    match h.version {
        Some(v) if v == version => Ok(()),
        Some(v) => Err(Error::VersionMismatch {
            found: v,
            expected: version,
        }),
        None => Err(Error::Corrupt("missing version".into())),
    }
}

impl<P: Serialize + DeserializeOwned> Envelope<P> {
    pub fn new(format: &str, provenance: Provenance, payload: P) -> Result<Self> {
        Ok(Self {
            format: format.into(),
            version: ARTIFACT_VERSION,
            provenance,
            payload_sha256: sha256_hex(&to_json_17(&payload)?),
            payload,
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        to_json_17(self)
    }

    /// Parses and verifies the payload digest; an edited payload is a provenance error.
    pub fn from_bytes(bytes: &[u8], format: &str) -> Result<Self> {
        check_header(bytes, format, ARTIFACT_VERSION)?;
        let env: Self = serde_json::from_slice(bytes).map_err(|e| Error::Corrupt(e.to_string()))?;
        if sha256_hex(&to_json_17(&env.payload)?) != env.payload_sha256 {
            return Err(Error::Provenance(format!(
                "{format} payload does not match its recorded digest"
            )));
        }
        Ok(env)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TruthPayload {
    pub trajectories: Vec<TruthTrajectory>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingMetrics {
    pub format: String,
    pub version: u64,
    pub dataset_sha256: String,
    pub model_sha256: String,
    pub epochs: Vec<crate::fcnn::EpochLoss>,
    pub best_epoch: usize,
    pub final_train_loss: f64,
    pub final_validation_loss: Option<f64>,
    pub test_mse: Option<f64>,
    /// Variance of the test targets around their mean, for comparison with `test_mse`.
    pub test_target_variance: Option<f64>,
}

/// Artifact loaded from disk together with its content hash.
pub struct Loaded<T> {
    pub value: T,
    pub sha256: String,
}

pub fn load_envelope<P: Serialize + DeserializeOwned>(path: &Path, format: &str) -> Result<Loaded<Envelope<P>>> {
    let bytes = read_file(path)?;
    Ok(Loaded {
        value: Envelope::from_bytes(&bytes, format)?,
        sha256: sha256_hex(&bytes),
    })
}

/// Header keys of a run CSV's leading `#` line.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunMeta {
    pub fields: BTreeMap<String, String>,
}

impl RunMeta {
    pub fn get(&self, key: &str) -> Option<&str> {
        self.fields.get(key).map(String::as_str)
    }
}

/// Per-trajectory rows of a run CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct RunTable {
    pub meta: RunMeta,
    pub state_dim: usize,
    pub obs_dim: usize,
    /// `(trajectory, rows)`; each row is `(step, truth, obs, analysis, corrected)`.
    pub trajectories: Vec<(usize, Vec<RunRow>)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunRow {
    pub step: usize,
    pub truth: Vec<f64>,
    pub obs: Vec<f64>,
    pub analysis: Vec<f64>,
    pub corrected: Vec<f64>,
}

impl RunTable {
    pub fn corrected_series(&self) -> Vec<Vec<Vec<f64>>> {
        self.trajectories
            .iter()
            .map(|(_, rows)| rows.iter().map(|r| r.corrected.clone()).collect())
            .collect()
    }

    pub fn analysis_series(&self) -> Vec<Vec<Vec<f64>>> {
        self.trajectories
            .iter()
            .map(|(_, rows)| rows.iter().map(|r| r.analysis.clone()).collect())
            .collect()
    }

    pub fn trajectory_ids(&self) -> Vec<usize> {
        self.trajectories.iter().map(|(k, _)| *k).collect()
    }

    pub fn steps(&self) -> Vec<Vec<usize>> {
        self.trajectories
            .iter()
            .map(|(_, rows)| rows.iter().map(|r| r.step).collect())
            .collect()
    }
}

fn push_values(line: &mut String, values: &[f64]) {
    for v in values {
        line.push(',');
        line.push_str(&fmt_f64(*v));
    }
}

/// Renders a run as CSV: one `#` metadata line, a header, then one row per
/// `(trajectory, step)`.
pub fn render_run_csv(meta: &[(&str, String)], truths: &[&TruthTrajectory], runs: &[TrajectoryRun]) -> Result<String> {
    let first = runs.first().and_then(|r| r.steps.first());
    let (d, m) = first.map_or((0, 0), |s| (s.analysis_mean.len(), s.obs_mean.len()));
    let mut out = String::from("#");
    for (i, (k, v)) in meta.iter().enumerate() {
        if i > 0 {
            out.push(' ');
        }
        let _ = write!(out, "{k}={v}");
    }
    out.push('\n');
    out.push_str("trajectory,step");
    for (prefix, n) in [("truth", d), ("obs", m), ("analysis", d), ("corrected", d)] {
        for i in 0..n {
            let _ = write!(out, ",{prefix}_{i}");
        }
    }
    out.push('\n');
    for (truth, run) in truths.iter().zip(runs) {
        if truth.index != run.trajectory || truth.states.len() != run.steps.len() {
            return Err(Error::Misaligned(format!(
                "run for trajectory {} does not match its truth",
                run.trajectory
            )));
        }
        for (state, step) in truth.states.iter().zip(&run.steps) {
            let _ = write!(out, "{},{}", run.trajectory, step.time_index);
            push_values(&mut out, &state.values);
            push_values(&mut out, &step.obs_mean);
            push_values(&mut out, &step.analysis_mean);
            push_values(&mut out, &step.corrected_mean);
            out.push('\n');
        }
    }
    Ok(out)
}

pub fn parse_run_csv(text: &str) -> Result<RunTable> {
    let mut lines = text.lines();
    let meta_line = lines
        .next()
        .and_then(|l| l.strip_prefix('#'))
        .ok_or_else(|| Error::Corrupt("run CSV lacks its metadata line".into()))?;
    let fields: BTreeMap<String, String> = meta_line
        .split_whitespace()
        .filter_map(|kv| kv.split_once('=').map(|(k, v)| (k.to_string(), v.to_string())))
        .collect();
    let meta = RunMeta { fields };
    if meta.get("format") != Some(RUN_FORMAT) {
        return Err(Error::Corrupt(format!("expected a {RUN_FORMAT} document")));
    }
    match meta.get("version").map(str::parse::<u64>) {
        Some(Ok(v)) if v == ARTIFACT_VERSION => {}
        Some(Ok(v)) => {
            return Err(Error::VersionMismatch {
                found: v,
                expected: ARTIFACT_VERSION,
            })
        }
        _ => return Err(Error::Corrupt("run CSV has no valid version".into())),
    }
    let header: Vec<&str> = lines
        .next()
        .ok_or_else(|| Error::Corrupt("run CSV lacks a header".into()))?
        .split(',')
        .collect();
    let count = |prefix: &str| header.iter().filter(|h| h.starts_with(prefix)).count();
    let (d, m) = (count("truth_"), count("obs_"));
    if header.len() < 2 || header[0] != "trajectory" || header[1] != "step" || header.len() != 2 + 3 * d + m {
        return Err(Error::Corrupt("unexpected run CSV header".into()));
    }
    let mut trajectories: Vec<(usize, Vec<RunRow>)> = Vec::new();
    for (n, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != header.len() {
            return Err(Error::Corrupt(format!("row {} has {} cells", n + 1, cells.len())));
        }
        let bad = |_| Error::Corrupt(format!("row {}: unparsable value", n + 1));
        let k: usize = cells[0]
            .parse()
            .map_err(|_| Error::Corrupt(format!("row {}: bad trajectory", n + 1)))?;
        let step: usize = cells[1]
            .parse()
            .map_err(|_| Error::Corrupt(format!("row {}: bad step", n + 1)))?;
        let values = cells[2..]
            .iter()
            .map(|c| c.parse::<f64>().map_err(bad))
            .collect::<Result<Vec<f64>>>()?;
        let (truth, rest) = values.split_at(d);
        let (obs, rest) = rest.split_at(m);
        let (analysis, corrected) = rest.split_at(d);
        let row = RunRow {
            step,
            truth: truth.to_vec(),
            obs: obs.to_vec(),
            analysis: analysis.to_vec(),
            corrected: corrected.to_vec(),
        };
        match trajectories.last_mut() {
            Some((last, rows)) if *last == k => rows.push(row),
            _ => trajectories.push((k, vec![row])),
        }
    }
    Ok(RunTable {
        meta,
        state_dim: d,
        obs_dim: m,
        trajectories,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaselineSummary {
    pub sha256: String,
    pub epsilon: Vec<f64>,
    pub time_mean_epsilon: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalReport {
    pub format: String,
    pub version: u64,
    pub truth_sha256: String,
    pub small_sha256: String,
    pub large_sha256: String,
    pub trajectories: Vec<usize>,
    pub steps: Vec<usize>,
    /// `ε(t_j)` of the small (possibly corrected) run against the large run.
    pub epsilon: Vec<f64>,
    /// Mean of `epsilon` over `j >= 1`.
    pub time_mean_epsilon: f64,
    pub baseline: Option<BaselineSummary>,
    /// `baseline.time_mean_epsilon / time_mean_epsilon`.
    pub improvement_ratio: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MachineInfo {
    pub os: String,
    pub arch: String,
    pub available_parallelism: usize,
}

impl MachineInfo {
    pub fn current() -> Self {
        Self {
            os: std::env::consts::OS.into(),
            arch: std::env::consts::ARCH.into(),
            available_parallelism: std::thread::available_parallelism().map_or(1, |n| n.get()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchReport {
    pub format: String,
    pub version: u64,
    pub config_name: String,
    pub config_hash: String,
    pub model_sha256: String,
    pub repetitions: usize,
    pub calls_per_repetition: usize,
    pub single_window_seconds: f64,
    pub fcnn_inference_seconds: f64,
    /// `single_window_seconds / fcnn_inference_seconds`.
    pub window_to_inference_ratio: f64,
    pub machine: MachineInfo,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileRef {
    pub role: String,
    pub path: PathBuf,
    pub sha256: String,
}

impl FileRef {
    pub fn of(role: &str, path: &Path, bytes: &[u8]) -> Self {
        Self {
            role: role.into(),
            path: path.to_path_buf(),
            sha256: sha256_hex(bytes),
        }
    }
}

/// Sidecar written next to the primary output of every command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub format: String,
    pub version: u64,
    pub tool_version: String,
    pub command: String,
    pub config: Option<ExperimentConfig>,
    pub config_hash: Option<String>,
    pub seed: Option<u64>,
    pub workers: usize,
    pub inputs: Vec<FileRef>,
    pub outputs: Vec<FileRef>,
    pub started_unix_seconds: f64,
    pub wall_seconds: f64,
}

pub fn manifest_path(out: &Path) -> PathBuf {
    let mut name = out.file_name().unwrap_or_default().to_os_string();
    name.push(".manifest.json");
    out.with_file_name(name)
}

pub fn write_manifest(out: &Path, manifest: &RunManifest) -> Result<()> {
    write_file(&manifest_path(out), &to_json_pretty(manifest)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::StateVector;
    use crate::pipeline::RunStep;

    #[test]
    fn csv_round_trip() {
        let truth = TruthTrajectory {
            index: 3,
            initial_condition: vec![0.0, 0.0],
            states: vec![
                StateVector::new(vec![1.0, 2.0], 0),
                StateVector::new(vec![0.1, 1.0 / 3.0], 5),
            ],
            seed: 1,
        };
        let step = |j: usize, a: f64| RunStep {
            time_index: j,
            obs_mean: vec![a],
            analysis_mean: vec![a, -a],
            corrected_mean: vec![a + 1.0, -a],
        };
        let run = TrajectoryRun {
            trajectory: 3,
            obs_digest: String::new(),
            steps: vec![step(0, 0.5), step(1, 2.0 / 7.0)],
        };
        let meta = [("format", RUN_FORMAT.to_string()), ("version", "1".to_string())];
        let text = render_run_csv(&meta, &[&truth], &[run]).unwrap();
        assert!(
            text.lines().nth(1).unwrap()
                == "trajectory,step,truth_0,truth_1,obs_0,analysis_0,analysis_1,corrected_0,corrected_1"
        );
        let table = parse_run_csv(&text).unwrap();
        assert_eq!((table.state_dim, table.obs_dim), (2, 1));
        assert_eq!(table.trajectory_ids(), vec![3]);
        let rows = &table.trajectories[0].1;
        assert_eq!(rows[1].truth[1].to_bits(), (1.0f64 / 3.0).to_bits());
        assert_eq!(rows[1].analysis[0].to_bits(), (2.0f64 / 7.0).to_bits());
        assert_eq!(rows[0].corrected, vec![1.5, -0.5]);
    }

    #[test]
    fn envelope_detects_edits() {
        let cfg = ExperimentConfig::lorenz63_paper();
        let env = Envelope::new(TRUTH_FORMAT, Provenance::new(&cfg, vec![]).unwrap(), vec![1.0f64, 2.0]).unwrap();
        let bytes = env.to_bytes().unwrap();
        assert!(Envelope::<Vec<f64>>::from_bytes(&bytes, TRUTH_FORMAT).is_ok());
        let edited = String::from_utf8(bytes)
            .unwrap()
            .replace("2.0000000000000000e0", "2.5000000000000000e0");
        let err = Envelope::<Vec<f64>>::from_bytes(edited.as_bytes(), TRUTH_FORMAT).unwrap_err();
        assert!(matches!(err, Error::Provenance(_)), "{err}");
    }

    #[test]
    fn manifest_sits_next_to_output() {
        assert_eq!(
            manifest_path(Path::new("out/run.csv")),
            Path::new("out/run.csv.manifest.json")
        );
    }
}
