use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::ExperimentConfig;
use crate::dynamics::{integrate_in_place, propagate_window, ForwardModel, ModelSpec, StateVector};
use crate::enkf::{
    enkf_run, run_filter, Corrector, CycleRecord, Ensemble, MemberStreams, ObservationSequence, TruthTrajectory,
};
use crate::error::{Error, Result};
use crate::fcnn::{build_input_vector, FcnnModel, TrainingPair};
use crate::numerics::{RngStream, StreamPurpose};

/// Truth-generation settings, separate from the full config so degenerate
/// cases (`steps = 0`) stay expressible.
#[derive(Debug, Clone, PartialEq)]
pub struct TruthSettings {
    pub count: usize,
    pub steps: usize,
    pub spinup_steps: usize,
    pub initial_box: Vec<[f64; 2]>,
}

impl From<&ExperimentConfig> for TruthSettings {
    fn from(c: &ExperimentConfig) -> Self {
        Self {
            count: c.experiment.trajectories,
            steps: c.experiment.steps,
            spinup_steps: c.experiment.spinup_steps,
            initial_box: c.experiment.initial_box.clone(),
        }
    }
}

/// Initial conditions redrawn after a diverged spin-up before giving up.
pub const MAX_INITIAL_DRAWS: usize = 100;

/// Draws from the box until the forward-Euler spin-up stays bounded. Large
/// coherent Lorenz-96 starts can overshoot into the explicit scheme's
/// unstable range before reaching the attractor; those draws are discarded.
fn spun_up_draw(model: &ModelSpec, settings: &TruthSettings, rng: &mut RngStream) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut last = None;
    for _ in 0..MAX_INITIAL_DRAWS {
        let ic: Vec<f64> = settings
            .initial_box
            .iter()
            .map(|&[lo, hi]| rng.uniform_in(lo, hi))
            .collect();
        let mut x = ic.clone();
        match integrate_in_place(model, &mut x, settings.spinup_steps, 0) {
            Ok(()) => return Ok((ic, x)),
            Err(e @ Error::NumericalBlowup { .. }) => last = Some(e),
            Err(e) => return Err(e),
        }
    }
    Err(last.expect("at least one draw was attempted"))
}

/// Draws `count` initial conditions from the box, spins each up, and records
/// `steps + 1` states one window apart. Trajectory `k` uses its own stream.
pub fn generate_truths(model: &ModelSpec, settings: &TruthSettings, seed: u64) -> Result<Vec<TruthTrajectory>> {
    let d = model.dim();
    if settings.initial_box.len() != d {
        return Err(Error::contract("initial box does not match the model dimension"));
    }
    (0..settings.count)
        .into_par_iter()
        .map(|k| {
            let mut rng = RngStream::for_purpose(seed, StreamPurpose::InitialCondition, k, 0);
            let (ic, x) = spun_up_draw(model, settings, &mut rng).map_err(|e| e.with_trajectory(k))?;
            let mut states = Vec::with_capacity(settings.steps + 1);
            states.push(StateVector::new(x, 0));
            for _ in 0..settings.steps {
                let next = propagate_window(states.last().unwrap(), model).map_err(|e| e.with_trajectory(k))?;
                states.push(next);
            }
            Ok(TruthTrajectory {
                index: k,
                initial_condition: ic,
                states,
                seed,
            })
        })
        .collect()
}

/// Which member streams a filter run draws from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EnsembleChoice {
    Large,
    Small,
}

impl EnsembleChoice {
    pub fn size(self, config: &ExperimentConfig) -> usize {
        match self {
            EnsembleChoice::Large => config.ensemble.large,
            EnsembleChoice::Small => config.ensemble.small,
        }
    }

    fn purpose(self, config: &ExperimentConfig) -> StreamPurpose {
        match self {
            EnsembleChoice::Large if !config.ensemble.shared_member_streams => StreamPurpose::LargeEnsembleMember,
            _ => StreamPurpose::SmallEnsembleMember,
        }
    }
}

pub fn member_streams(config: &ExperimentConfig, choice: EnsembleChoice, trajectory: usize) -> MemberStreams {
    MemberStreams::new(config.seed, choice.purpose(config), trajectory, choice.size(config))
}

pub fn observations_for(config: &ExperimentConfig, truth: &TruthTrajectory) -> Result<ObservationSequence> {
    ObservationSequence::for_trajectory(truth, &config.observation_model()?, config.seed)
}

/// Training sample at one step `j >= 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssimilationRecord {
    pub time_index: usize,
    /// Small-run analysis members, member 1 first.
    pub small_members: Vec<Vec<f64>>,
    pub small_mean: Vec<f64>,
    pub large_mean: Vec<f64>,
    pub obs_mean: Vec<f64>,
    pub prev_small_mean: Vec<f64>,
    /// `large_mean - small_mean`.
    pub target: Vec<f64>,
}

impl AssimilationRecord {
    pub fn input(&self) -> Result<Vec<f64>> {
        build_input_vector(&self.small_members, &self.obs_mean, &self.prev_small_mean)
    }

    pub fn pair(&self) -> Result<TrainingPair> {
        Ok(TrainingPair {
            input: self.input()?,
            target: self.target.clone(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecords {
    pub trajectory: usize,
    /// Digest of the observation sequence both runs consumed.
    pub obs_digest: String,
    pub records: Vec<AssimilationRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub trajectories: Vec<TrajectoryRecords>,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

impl Dataset {
    pub fn trajectory(&self, k: usize) -> Option<&TrajectoryRecords> {
        self.trajectories.iter().find(|t| t.trajectory == k)
    }

    pub fn record_count(&self) -> usize {
        self.trajectories.iter().map(|t| t.records.len()).sum()
    }

    /// Training pairs of the listed trajectories, in trajectory then step order.
    pub fn pairs(&self, trajectories: &[usize]) -> Result<Vec<TrainingPair>> {
        let mut out = Vec::new();
        for &k in trajectories {
            let t = self
                .trajectory(k)
                .ok_or_else(|| Error::contract(format!("dataset has no trajectory {k}")))?;
            for r in &t.records {
                out.push(r.pair()?);
            }
        }
        Ok(out)
    }
}

fn subtract(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

fn member_rows(ens: &Ensemble) -> Vec<Vec<f64>> {
    (0..ens.size()).map(|n| ens.member(n)).collect()
}

/// Paired large/small plain-EnKF runs over every truth, sharing each
/// trajectory's observation sequence.
pub fn generate_dataset(config: &ExperimentConfig, truths: &[TruthTrajectory]) -> Result<Dataset> {
    let model = config.model_spec()?;
    let obs = config.observation_model()?;
    let settings = config.filter_settings();
    let trajectories = truths
        .par_iter()
        .map(|truth| {
            let k = truth.index;
            let seq = ObservationSequence::for_trajectory(truth, &obs, config.seed)?;
            let large = enkf_run(
                &seq,
                &model,
                &obs,
                &mut member_streams(config, EnsembleChoice::Large, k),
                settings,
            )
            .map_err(|e| e.with_trajectory(k))?;
            let small = enkf_run(
                &seq,
                &model,
                &obs,
                &mut member_streams(config, EnsembleChoice::Small, k),
                settings,
            )
            .map_err(|e| e.with_trajectory(k))?;
            let records = large
                .iter()
                .zip(&small)
                .skip(1)
                .map(|(l, s)| AssimilationRecord {
                    time_index: s.time_index,
                    small_members: member_rows(&s.analysis),
                    small_mean: s.analysis_mean.clone(),
                    large_mean: l.analysis_mean.clone(),
                    obs_mean: s.obs_mean.clone(),
                    prev_small_mean: s.prev_mean.clone(),
                    target: subtract(&l.analysis_mean, &s.analysis_mean),
                })
                .collect();
            Ok(TrajectoryRecords {
                trajectory: k,
                obs_digest: seq.digest(),
                records,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let (train, test) = config.split();
    Ok(Dataset {
        trajectories,
        train,
        test,
    })
}

/// Network-backed correction hook.
pub struct FcnnCorrector<'a> {
    pub model: &'a FcnnModel,
}

impl Corrector for FcnnCorrector<'_> {
    fn correct(&mut self, analysis: &Ensemble, obs_mean: &[f64], prev_mean: &[f64]) -> Result<Option<Vec<f64>>> {
        let input = build_input_vector(&member_rows(analysis), obs_mean, prev_mean)?;
        self.model.forward(&input).map(Some)
    }
}

/// One output row of a filter run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunStep {
    pub time_index: usize,
    pub obs_mean: Vec<f64>,
    pub analysis_mean: Vec<f64>,
    pub corrected_mean: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRun {
    pub trajectory: usize,
    pub obs_digest: String,
    pub steps: Vec<RunStep>,
}

impl TrajectoryRun {
    fn from_records(trajectory: usize, obs_digest: String, records: Vec<CycleRecord>) -> Self {
        Self {
            trajectory,
            obs_digest,
            steps: records
                .into_iter()
                .map(|r| RunStep {
                    time_index: r.time_index,
                    obs_mean: r.obs_mean,
                    analysis_mean: r.analysis_mean,
                    corrected_mean: r.corrected_mean,
                })
                .collect(),
        }
    }

    /// Means the run carries forward (the corrected mean when a model ran).
    pub fn output_means(&self) -> Vec<Vec<f64>> {
        self.steps.iter().map(|s| s.corrected_mean.clone()).collect()
    }
}

/// Checks a model against the config's layout and state dimension.
pub fn check_model(config: &ExperimentConfig, model: &FcnnModel) -> Result<()> {
    let (n_in, d) = (config.network_input_size()?, config.state_dim()?);
    if model.input_size() != n_in || model.output_size() != d {
        return Err(Error::ShapeMismatch(format!(
            "model maps {} -> {}, config needs {n_in} -> {d}",
            model.input_size(),
            model.output_size()
        )));
    }
    Ok(())
}

/// Plain EnKF over one truth with the chosen ensemble.
pub fn run_plain(config: &ExperimentConfig, truth: &TruthTrajectory, choice: EnsembleChoice) -> Result<TrajectoryRun> {
    let model = config.model_spec()?;
    let obs = config.observation_model()?;
    let seq = ObservationSequence::for_trajectory(truth, &obs, config.seed)?;
    let mut streams = member_streams(config, choice, truth.index);
    let records = enkf_run(&seq, &model, &obs, &mut streams, config.filter_settings())
        .map_err(|e| e.with_trajectory(truth.index))?;
    Ok(TrajectoryRun::from_records(truth.index, seq.digest(), records))
}

/// Small-ensemble EnKF with the network correction applied after every analysis.
pub fn run_coupled(config: &ExperimentConfig, network: &FcnnModel, truth: &TruthTrajectory) -> Result<TrajectoryRun> {
    check_model(config, network)?;
    let model = config.model_spec()?;
    let obs = config.observation_model()?;
    let seq = ObservationSequence::for_trajectory(truth, &obs, config.seed)?;
    let mut streams = member_streams(config, EnsembleChoice::Small, truth.index);
    let mut corrector = FcnnCorrector { model: network };
    let records = run_filter(
        &seq,
        &model,
        &obs,
        &mut streams,
        config.filter_settings(),
        &mut corrector,
    )
    .map_err(|e| e.with_trajectory(truth.index))?;
    Ok(TrajectoryRun::from_records(truth.index, seq.digest(), records))
}

/// Runs every truth in parallel: plain when `network` is `None`, coupled otherwise.
pub fn run_experiment(
    config: &ExperimentConfig,
    truths: &[TruthTrajectory],
    choice: EnsembleChoice,
    network: Option<&FcnnModel>,
) -> Result<Vec<TrajectoryRun>> {
    if network.is_some() && choice != EnsembleChoice::Small {
        return Err(Error::config(
            "ensemble",
            "a correction network only applies to the small ensemble",
        ));
    }
    truths
        .par_iter()
        .map(|t| match network {
            Some(m) => run_coupled(config, m, t),
            None => run_plain(config, t, choice),
        })
        .collect()
}

/// `ε(t_j) = (1/K_t) Σ_k ‖small_kj - large_kj‖₂`; outer index trajectory, inner step.
pub fn epsilon_metric(small: &[Vec<Vec<f64>>], large: &[Vec<Vec<f64>>]) -> Result<Vec<f64>> {
    if small.is_empty() || small.len() != large.len() {
        return Err(Error::Misaligned(format!(
            "{} vs {} trajectories",
            small.len(),
            large.len()
        )));
    }
    let steps = small[0].len();
    let mut eps = vec![0.0; steps];
    for (k, (s, l)) in small.iter().zip(large).enumerate() {
        if s.len() != steps || l.len() != steps {
            return Err(Error::Misaligned(format!("trajectory {k} has a different step count")));
        }
        for (j, (a, b)) in s.iter().zip(l).enumerate() {
            if a.len() != b.len() {
                return Err(Error::Misaligned(format!(
                    "trajectory {k}, step {j}: dimensions differ"
                )));
            }
            eps[j] += a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
        }
    }
    let kt = small.len() as f64;
    eps.iter_mut().for_each(|e| *e /= kt);
    Ok(eps)
}

/// Mean of `ε` over steps `j >= 1`; `t_0` carries no analysis update.
pub fn time_mean(eps: &[f64]) -> f64 {
    let tail = eps.get(1..).filter(|t| !t.is_empty()).unwrap_or(eps);
    tail.iter().sum::<f64>() / tail.len().max(1) as f64
}
