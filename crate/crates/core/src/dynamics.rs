//! Forward models and forward-Euler propagation over an assimilation window.
//!
//! Lorenz-96 components are indexed from zero; the component written
//! `χ(i)` with one-based `i` is stored at index `i - 1`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Any component above this magnitude is treated as a diverged integration.
pub const BLOWUP_THRESHOLD: f64 = 1e6;

/// Uniform interface every forward model implements.
///
/// Implementors only supply the right-hand side; stepping, window
/// propagation and the blowup guard are shared.
pub trait ForwardModel: Sync {
    fn dim(&self) -> usize;

    /// Writes `dx/dt` at `x` into `out`.
    fn rhs_into(&self, x: &[f64], out: &mut [f64]);

    fn dt(&self) -> f64;

    fn steps_per_window(&self) -> usize;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum ModelKind {
    Lorenz63 { sigma: f64, rho: f64, beta: f64 },
    Lorenz96 { dim: usize, forcing: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub dt: f64,
    pub steps_per_window: usize,
}

impl ModelSpec {
    pub fn new(kind: ModelKind, dt: f64, steps_per_window: usize) -> Result<Self> {
        match kind {
            ModelKind::Lorenz63 { sigma, rho, beta } => {
                if ![sigma, rho, beta].iter().all(|v| v.is_finite()) {
                    return Err(Error::config("model", "Lorenz-63 parameters must be finite"));
                }
            }
            ModelKind::Lorenz96 { dim, forcing } => {
                if dim < 4 {
                    return Err(Error::config(
                        "model.dim",
                        format!("Lorenz-96 needs dim >= 4, got {dim}"),
                    ));
                }
                if !forcing.is_finite() {
                    return Err(Error::config("model.forcing", "must be finite"));
                }
            }
        }
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::config("model.dt", format!("must be > 0, got {dt}")));
        }
        if steps_per_window < 1 {
            return Err(Error::config("model.steps_per_window", "must be >= 1"));
        }
        Ok(Self {
            kind,
            dt,
            steps_per_window,
        })
    }

    /// σ = 10, ρ = 28, β = 8/3, Δt = 0.01.
    pub fn lorenz63(steps_per_window: usize) -> Self {
        Self {
            kind: ModelKind::Lorenz63 {
                sigma: 10.0,
                rho: 28.0,
                beta: 8.0 / 3.0,
            },
            dt: 0.01,
            steps_per_window,
        }
    }

    /// L = 10, F = 8, Δt = 0.01.
    pub fn lorenz96(steps_per_window: usize) -> Self {
        Self {
            kind: ModelKind::Lorenz96 { dim: 10, forcing: 8.0 },
            dt: 0.01,
            steps_per_window,
        }
    }

    pub fn with_dt(mut self, dt: f64) -> Self {
        self.dt = dt;
        self
    }

    pub fn with_steps_per_window(mut self, steps: usize) -> Self {
        self.steps_per_window = steps;
        self
    }
}

impl ForwardModel for ModelSpec {
    fn dim(&self) -> usize {
        match self.kind {
            ModelKind::Lorenz63 { .. } => 3,
            ModelKind::Lorenz96 { dim, .. } => dim,
        }
    }

    fn rhs_into(&self, x: &[f64], out: &mut [f64]) {
        match self.kind {
            ModelKind::Lorenz63 { sigma, rho, beta } => lorenz63_into(x, sigma, rho, beta, out),
            ModelKind::Lorenz96 { forcing, .. } => lorenz96_into(x, forcing, out),
        }
    }

    fn dt(&self) -> f64 {
        self.dt
    }

    fn steps_per_window(&self) -> usize {
        self.steps_per_window
    }
}

/// Model state; `time_index` counts integrator steps (`t = time_index · dt`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateVector {
    pub values: Vec<f64>,
    pub time_index: usize,
}

impl StateVector {
    pub fn new(values: Vec<f64>, time_index: usize) -> Self {
        Self { values, time_index }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }
}

#[inline]
fn lorenz63_into(x: &[f64], sigma: f64, rho: f64, beta: f64, out: &mut [f64]) {
    out[0] = sigma * (x[1] - x[0]);
    out[1] = x[0] * (rho - x[2]) - x[1];
    out[2] = x[0] * x[1] - beta * x[2];
}

#[inline]
fn lorenz96_into(x: &[f64], forcing: f64, out: &mut [f64]) {
    let l = x.len();
    for i in 0..l {
        let ip1 = if i + 1 == l { 0 } else { i + 1 };
        let im1 = if i == 0 { l - 1 } else { i - 1 };
        let im2 = if i >= 2 { i - 2 } else { l + i - 2 };
        out[i] = (x[ip1] - x[im2]) * x[im1] - x[i] + forcing;
    }
}

fn check_dim(x: &StateVector, want: usize) -> Result<()> {
    if x.dim() != want {
        return Err(Error::contract(format!(
            "state has dimension {}, model expects {want}",
            x.dim()
        )));
    }
    Ok(())
}

pub fn rhs_lorenz63(x: &StateVector, sigma: f64, rho: f64, beta: f64) -> Result<StateVector> {
    check_dim(x, 3)?;
    let mut out = vec![0.0; 3];
    lorenz63_into(&x.values, sigma, rho, beta, &mut out);
    Ok(StateVector::new(out, x.time_index))
}

pub fn rhs_lorenz96(x: &StateVector, forcing: f64) -> Result<StateVector> {
    if x.dim() < 4 {
        return Err(Error::contract(format!("Lorenz-96 needs dim >= 4, got {}", x.dim())));
    }
    let mut out = vec![0.0; x.dim()];
    lorenz96_into(&x.values, forcing, &mut out);
    Ok(StateVector::new(out, x.time_index))
}

/// One forward-Euler step in place. `scratch` must have the model dimension.
///
/// `time_index` is the index the state will carry after the step; it is only
/// used to locate a blowup.
#[inline]
pub fn euler_in_place<M: ForwardModel + ?Sized>(
    model: &M,
    x: &mut [f64],
    scratch: &mut [f64],
    time_index: usize,
) -> Result<()> {
    model.rhs_into(x, scratch);
    let dt = model.dt();
    let mut ok = true;
    for (xi, fi) in x.iter_mut().zip(scratch.iter()) {
        *xi += dt * fi;
        ok &= xi.abs() <= BLOWUP_THRESHOLD;
    }
    // NaN fails the comparison above, so `ok` also covers non-finite values.
    if ok {
        Ok(())
    } else {
        Err(Error::NumericalBlowup {
            time_index,
            member: None,
            trajectory: None,
        })
    }
}

/// Advances `x` by `steps` Euler steps in place.
pub fn integrate_in_place<M: ForwardModel + ?Sized>(
    model: &M,
    x: &mut [f64],
    steps: usize,
    start_index: usize,
) -> Result<()> {
    let mut scratch = vec![0.0; x.len()];
    for k in 0..steps {
        euler_in_place(model, x, &mut scratch, start_index + k + 1)?;
    }
    Ok(())
}

/// `x + dt · f(x)`, with `time_index` advanced by one.
pub fn step_euler<M: ForwardModel + ?Sized>(x: &StateVector, model: &M) -> Result<StateVector> {
    check_dim(x, model.dim())?;
    let mut out = x.clone();
    integrate_in_place(model, &mut out.values, 1, x.time_index)?;
    out.time_index += 1;
    Ok(out)
}

/// Applies `steps_per_window` Euler steps: the forecast operator between
/// consecutive assimilation times.
pub fn propagate_window<M: ForwardModel + ?Sized>(x: &StateVector, model: &M) -> Result<StateVector> {
    check_dim(x, model.dim())?;
    let steps = model.steps_per_window();
    let mut out = x.clone();
    integrate_in_place(model, &mut out.values, steps, x.time_index)?;
    out.time_index += steps;
    Ok(out)
}
