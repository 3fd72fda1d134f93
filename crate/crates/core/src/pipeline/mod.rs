//! Twin experiments: truths, paired large/small EnKF runs, the training
//! dataset, the coupled filter, the ε(t) metric and timings.

mod config;
mod experiment;

use std::hint::black_box;
use std::time::Instant;

use serde::{Deserialize, Serialize};

pub use config::{
    EnsembleSection, ExperimentConfig, ExperimentSection, ModelSection, NetworkSection, ObservationSection,
    PRESET_NAMES, SCHEMA_VERSION,
};
pub use experiment::{
    check_model, epsilon_metric, generate_dataset, generate_truths, member_streams, observations_for, run_coupled,
    run_experiment, run_plain, time_mean, AssimilationRecord, Dataset, EnsembleChoice, FcnnCorrector, RunStep,
    TrajectoryRecords, TrajectoryRun, TruthSettings, MAX_INITIAL_DRAWS,
};

use crate::dynamics::{propagate_window, ForwardModel, StateVector};
use crate::error::{Error, Result};
use crate::fcnn::{self, build_input_vector, FcnnModel, TrainingOutcome};

/// Trains on the dataset's training trajectories, holding out the config's
/// validation share for early stopping, and records the test-split MSE.
pub fn train_on_dataset(config: &ExperimentConfig, dataset: &Dataset) -> Result<TrainingOutcome> {
    let fcnn_config = config.fcnn_config()?;
    let (fit_idx, val_idx) = config.train_validation_split();
    let (fit, val) = (dataset.pairs(&fit_idx)?, dataset.pairs(&val_idx)?);
    let mut outcome = fcnn::train(&fcnn_config, &fit, &val)?;
    let test = dataset.pairs(&dataset.test)?;
    let test_mse = if test.is_empty() {
        None
    } else {
        Some(fcnn::evaluate_mse(&outcome.model, &test)?)
    };
    if let Some(meta) = outcome.model.training.as_mut() {
        meta.test_mse = test_mse;
    }
    Ok(outcome)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchResult {
    pub repetitions: usize,
    /// Calls timed together per repetition; reported times are per call.
    pub calls_per_repetition: usize,
    pub single_window_seconds: f64,
    pub fcnn_inference_seconds: f64,
}

impl BenchResult {
    pub fn inference_is_cheaper(&self) -> bool {
        self.fcnn_inference_seconds < self.single_window_seconds
    }
}

fn median_per_call(repetitions: usize, calls: usize, mut f: impl FnMut()) -> f64 {
    for _ in 0..calls.max(10) {
        f();
    }
    let mut times: Vec<f64> = (0..repetitions)
        .map(|_| {
            let start = Instant::now();
            for _ in 0..calls {
                f();
            }
            start.elapsed().as_secs_f64() / calls as f64
        })
        .collect();
    times.sort_by(f64::total_cmp);
    times[times.len() / 2]
}

/// Median wall time of one single-member window propagation and of one
/// network forward call on a representative input built from `state`.
pub fn timing_benchmark(
    config: &ExperimentConfig,
    network: &FcnnModel,
    state: &[f64],
    repetitions: usize,
    calls_per_repetition: usize,
) -> Result<BenchResult> {
    check_model(config, network)?;
    let model = config.model_spec()?;
    if state.len() != model.dim() {
        return Err(Error::contract("benchmark state has the wrong dimension"));
    }
    if repetitions == 0 || calls_per_repetition == 0 {
        return Err(Error::config("bench", "repetitions must be >= 1"));
    }
    let obs = config.observation_model()?;
    let members = vec![state.to_vec(); config.ensemble.small];
    let input = build_input_vector(&members, &obs.project(state), state)?;
    network.forward(&input)?;
    let x = StateVector::new(state.to_vec(), 0);
    propagate_window(&x, &model)?;

    let window = median_per_call(repetitions, calls_per_repetition, || {
        let _ = black_box(propagate_window(black_box(&x), &model));
    });
    let inference = median_per_call(repetitions, calls_per_repetition, || {
        let _ = black_box(network.forward(black_box(&input)));
    });
    Ok(BenchResult {
        repetitions,
        calls_per_repetition,
        single_window_seconds: window,
        fcnn_inference_seconds: inference,
    })
}
