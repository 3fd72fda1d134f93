//! Mini-batch Adam with early stopping on a held-out set.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{FcnnConfig, FcnnModel, Gradients, Normalization, TrainingMeta, Workspace};
use crate::error::{Error, Result};
use crate::numerics::{RngStream, StreamPurpose};

/// Samples per gradient chunk. Chunks are summed in index order, so the
/// batch gradient does not depend on how many threads evaluated them.
const CHUNK: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingPair {
    pub input: Vec<f64>,
    pub target: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    /// Mean normalized-space loss over the epoch's mini-batches.
    pub train_loss: f64,
    pub validation_loss: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainingOutcome {
    pub model: FcnnModel,
    pub history: Vec<EpochLoss>,
}

struct Adam {
    m: Gradients,
    v: Gradients,
    t: i32,
}

impl Adam {
    fn new(model: &FcnnModel) -> Self {
        Self {
            m: Gradients::zeros_like(model),
            v: Gradients::zeros_like(model),
            t: 0,
        }
    }

    fn step(&mut self, model: &mut FcnnModel, g: &Gradients) {
        let c = &model.config;
        let (lr, b1, b2, eps) = (c.learning_rate, c.beta1, c.beta2, c.epsilon);
        self.t += 1;
        let bc1 = 1.0 - b1.powi(self.t);
        let bc2 = 1.0 - b2.powi(self.t);
        for (k, layer) in model.layers.iter_mut().enumerate() {
            let params = [
                (
                    &mut layer.weights,
                    &g.weights[k],
                    &mut self.m.weights[k],
                    &mut self.v.weights[k],
                ),
                (
                    &mut layer.biases,
                    &g.biases[k],
                    &mut self.m.biases[k],
                    &mut self.v.biases[k],
                ),
            ];
            for (p, g, m, v) in params {
                for i in 0..p.len() {
                    m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                    v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                    let m_hat = m[i] / bc1;
                    let v_hat = v[i] / bc2;
                    p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
                }
            }
        }
    }
}

fn add_into(acc: &mut Gradients, g: &Gradients) {
    for (a, b) in acc
        .weights
        .iter_mut()
        .zip(&g.weights)
        .chain(acc.biases.iter_mut().zip(&g.biases))
    {
        for (x, y) in a.iter_mut().zip(b) {
            *x += y;
        }
    }
}

fn check_pairs(pairs: &[TrainingPair], n_in: usize, n_out: usize) -> Result<()> {
    for (i, p) in pairs.iter().enumerate() {
        if p.input.len() != n_in || p.target.len() != n_out {
            return Err(Error::ShapeMismatch(format!(
                "pair {i}: input {} / target {}, network expects {n_in} / {n_out}",
                p.input.len(),
                p.target.len()
            )));
        }
        if p.input.iter().chain(&p.target).any(|v| !v.is_finite()) {
            return Err(Error::contract(format!("pair {i} contains non-finite values")));
        }
    }
    Ok(())
}

/// Normalized-space mean loss of `model` over `set` (already standardized).
fn normalized_loss(model: &FcnnModel, set: &[(Vec<f64>, Vec<f64>)]) -> f64 {
    let total: f64 = set
        .par_chunks(64)
        .map(|chunk| {
            let mut ws = Workspace::new(model);
            chunk
                .iter()
                .map(|(x, t)| {
                    ws.acts[0].copy_from_slice(x);
                    model.forward_normalized(&mut ws);
                    let y = ws.acts.last().unwrap();
                    y.iter().zip(t).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / t.len() as f64
                })
                .sum::<f64>()
        })
        .collect::<Vec<_>>()
        .into_iter()
        .sum();
    total / set.len() as f64
}

/// Trains a fresh network on `fit`; `validation` drives early stopping and
/// may be empty, in which case the epoch training loss is monitored instead.
///
/// Normalization statistics come from `fit` only. The returned model holds
/// the weights of the best monitored epoch.
pub fn train(config: &FcnnConfig, fit: &[TrainingPair], validation: &[TrainingPair]) -> Result<TrainingOutcome> {
    config.validate()?;
    if fit.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let (n_in, n_out) = (config.input_size(), config.output_size());
    check_pairs(fit, n_in, n_out)?;
    check_pairs(validation, n_in, n_out)?;

    let mut model = FcnnModel::initialize(config.clone())?;
    model.input_norm = Normalization::fit(fit.iter().map(|p| p.input.as_slice()), n_in);
    model.output_norm = Normalization::fit(fit.iter().map(|p| p.target.as_slice()), n_out);
    let standardize = |pairs: &[TrainingPair]| -> Vec<(Vec<f64>, Vec<f64>)> {
        pairs
            .iter()
            .map(|p| (model.input_norm.apply(&p.input), model.output_norm.apply(&p.target)))
            .collect()
    };
    let fit_z = standardize(fit);
    let val_z = standardize(validation);

    let mut shuffle = RngStream::for_purpose(config.seed, StreamPurpose::Shuffle, 0, 0);
    let mut order: Vec<usize> = (0..fit_z.len()).collect();
    let mut adam = Adam::new(&model);
    let chunks_per_batch = config.batch_size.div_ceil(CHUNK);
    let mut scratch: Vec<(Workspace, Gradients, f64)> = (0..chunks_per_batch)
        .map(|_| (Workspace::new(&model), Gradients::zeros_like(&model), 0.0))
        .collect();
    let mut batch_grad = Gradients::zeros_like(&model);

    let mut history = Vec::with_capacity(config.epochs);
    let mut best = (f64::INFINITY, 0usize, model.layers.clone());
    for epoch in 0..config.epochs {
        for i in (1..order.len()).rev() {
            let j = shuffle.below(i + 1);
            order.swap(i, j);
        }
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for batch in order.chunks(config.batch_size) {
            let used = batch.len().div_ceil(CHUNK);
            let model_ref = &model;
            let fit_ref = &fit_z;
            scratch[..used]
                .par_iter_mut()
                .zip(batch.par_chunks(CHUNK))
                .for_each(|((ws, g, loss), idx)| {
                    g.clear();
                    *loss = 0.0;
                    for &s in idx {
                        let (x, t) = &fit_ref[s];
                        ws.acts[0].copy_from_slice(x);
                        *loss += model_ref.accumulate_gradient(ws, t, g);
                    }
                });
            batch_grad.clear();
            let mut batch_loss = 0.0;
            for (_, g, loss) in &scratch[..used] {
                add_into(&mut batch_grad, g);
                batch_loss += loss;
            }
            let inv = 1.0 / batch.len() as f64;
            batch_grad.scale(inv);
            batch_loss *= inv;
            if !batch_loss.is_finite() {
                return Err(Error::TrainingDiverged { epoch });
            }
            adam.step(&mut model, &batch_grad);
            loss_sum += batch_loss;
            batches += 1;
        }
        let train_loss = loss_sum / batches as f64;
        let validation_loss = (!val_z.is_empty()).then(|| normalized_loss(&model, &val_z));
        let monitored = validation_loss.unwrap_or(train_loss);
        if !monitored.is_finite() {
            return Err(Error::TrainingDiverged { epoch });
        }
        history.push(EpochLoss {
            epoch,
            train_loss,
            validation_loss,
        });
        if monitored < best.0 {
            best = (monitored, epoch, model.layers.clone());
        } else if epoch - best.1 >= config.patience {
            break;
        }
    }

    let (_, best_epoch, layers) = best;
    model.layers = layers;
    model.training = Some(TrainingMeta {
        dataset_sha256: None,
        train_samples: fit.len(),
        validation_samples: validation.len(),
        epochs_run: history.len(),
        best_epoch,
        final_train_loss: normalized_loss(&model, &fit_z),
        final_validation_loss: (!val_z.is_empty()).then(|| normalized_loss(&model, &val_z)),
        test_mse: None,
    });
    Ok(TrainingOutcome { model, history })
}

/// Raw-space mean over `pairs` of `loss_mse(forward(input), target)`.
pub fn evaluate_mse(model: &FcnnModel, pairs: &[TrainingPair]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::EmptyDataset);
    }
    check_pairs(pairs, model.input_size(), model.output_size())?;
    let per_pair = pairs
        .par_iter()
        .map(|p| super::loss_mse(&model.forward(&p.input)?, &p.target))
        .collect::<Result<Vec<f64>>>()?;
    Ok(per_pair.iter().sum::<f64>() / pairs.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn linear_task(n: usize, seed: u64) -> (Vec<TrainingPair>, Vec<Vec<f64>>) {
        let mut rng = RngStream::new(seed, 0);
        let m: Vec<Vec<f64>> = (0..2)
            .map(|_| (0..4).map(|_| rng.uniform_in(-1.0, 1.0)).collect())
            .collect();
        let pairs = (0..n)
            .map(|_| {
                let x: Vec<f64> = (0..4).map(|_| rng.standard_normal()).collect();
                let y = m
                    .iter()
                    .map(|row| row.iter().zip(&x).map(|(a, b)| a * b).sum())
                    .collect();
                TrainingPair { input: x, target: y }
            })
            .collect();
        (pairs, m)
    }

    #[test]
    fn empty_dataset_rejected() {
        let cfg = FcnnConfig::new(vec![2, 3, 1], 1);
        assert!(matches!(train(&cfg, &[], &[]), Err(Error::EmptyDataset)));
    }

    #[test]
    fn wrong_shape_rejected() {
        let cfg = FcnnConfig::new(vec![2, 3, 1], 1);
        let bad = [TrainingPair {
            input: vec![1.0],
            target: vec![1.0],
        }];
        assert!(matches!(train(&cfg, &bad, &[]), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn divergence_reports_epoch() {
        let mut cfg = FcnnConfig::new(vec![4, 16, 2], 3);
        cfg.learning_rate = 1e300;
        cfg.epochs = 20;
        let (pairs, _) = linear_task(64, 5);
        match train(&cfg, &pairs, &[]) {
            Err(Error::TrainingDiverged { epoch }) => assert!(epoch < 20),
            other => panic!("expected divergence, got {:?}", other.map(|o| o.history.len())),
        }
    }

    #[test]
    fn first_epochs_decrease_loss() {
        let mut cfg = FcnnConfig::new(vec![4, 64, 2], 11);
        cfg.epochs = 5;
        let (pairs, _) = linear_task(512, 2);
        let out = train(&cfg, &pairs, &[]).unwrap();
        let losses: Vec<f64> = out.history.iter().map(|e| e.train_loss).collect();
        assert_eq!(losses.len(), 5);
        assert!(losses.windows(2).all(|w| w[1] < w[0]), "{losses:?}");
    }

    #[test]
    fn learns_linear_map() {
        let mut cfg = FcnnConfig::new(vec![4, 64, 2], 11);
        cfg.epochs = 300;
        let (pairs, _) = linear_task(1200, 2);
        let (fit, rest) = pairs.split_at(800);
        let (val, test) = rest.split_at(200);
        let out = train(&cfg, fit, val).unwrap();
        let mse = evaluate_mse(&out.model, test).unwrap();
        let var = {
            let all: Vec<f64> = test.iter().flat_map(|p| p.target.clone()).collect();
            let mean = all.iter().sum::<f64>() / all.len() as f64;
            all.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / all.len() as f64
        };
        assert!(mse < 1e-3 * var, "mse {mse}, target variance {var}");
    }

    #[test]
    fn memorizes_constant_pairs() {
        let mut cfg = FcnnConfig::new(vec![3, 8, 2], 4);
        cfg.epochs = 50;
        let pairs = vec![
            TrainingPair {
                input: vec![0.5, -1.0, 2.0],
                target: vec![3.0, -4.0],
            };
            40
        ];
        let out = train(&cfg, &pairs, &pairs[..8]).unwrap();
        assert!(evaluate_mse(&out.model, &pairs).unwrap() < 1e-6);
    }

    #[test]
    fn training_is_deterministic() {
        let mut cfg = FcnnConfig::new(vec![4, 16, 2], 9);
        cfg.epochs = 15;
        let (pairs, _) = linear_task(100, 8);
        let a = train(&cfg, &pairs[..80], &pairs[80..]).unwrap();
        let b = train(&cfg, &pairs[..80], &pairs[80..]).unwrap();
        assert_eq!(a.model, b.model);
        assert_eq!(a.history, b.history);
    }

    #[test]
    fn early_stopping_restores_best() {
        let mut cfg = FcnnConfig::new(vec![4, 32, 2], 6);
        cfg.epochs = 400;
        cfg.patience = 5;
        let (pairs, _) = linear_task(60, 13);
        let out = train(&cfg, &pairs[..30], &pairs[30..]).unwrap();
        let meta = out.model.training.as_ref().unwrap();
        let best = out.history[meta.best_epoch].validation_loss.unwrap();
        assert!(out.history.iter().all(|e| e.validation_loss.unwrap() >= best));
        assert_eq!(meta.final_validation_loss, Some(best));
        assert!(meta.epochs_run <= meta.best_epoch + 1 + cfg.patience);
    }
}
