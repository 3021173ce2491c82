//! Conditional flow matching on the linear path `x_t = t·x1 + (1 − t)·x0`.
//!
//! The velocity network sees `[x_t, y, t]` and is regressed onto
//! `x1 − x0`. Sampling integrates `dx/dt = u(x, t | y)` from a standard
//! normal draw at `t = 0` to `t = 1` and rejects draws outside the prior box.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::nn::{adam_step, Activation, Gradients, InitOptions, MlpParams, NnError, OptimState, Tape};

#[derive(Debug, thiserror::Error)]
pub enum CfmError {
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("training loss became non-finite at epoch {0}")]
    DivergedLoss(usize),
    #[error("adaptive step size underflow at t = {t}")]
    StepFailure { t: f64 },
    #[error("no draw out of {tries} fell inside the prior bounds")]
    AllRejected { tries: usize },
    #[error("only {accepted} of {wanted} draws accepted after {tries} tries")]
    Exhausted { accepted: usize, wanted: usize, tries: usize },
    #[error("column {0} has zero variance")]
    ZeroVariance(usize),
    #[error("invalid prior box: {0}")]
    BadBounds(String),
    #[error("invalid hyperparameters: {0}")]
    BadHyper(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("model file: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, CfmError>;

// ---------------------------------------------------------------------------
// Standardization and bounds
// ---------------------------------------------------------------------------

/// Columnwise affine map `(v − μ)/σ`, with σ the population std.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn fit(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        if n == 0 {
            return Err(CfmError::EmptyDataset);
        }
        let d = rows[0].len();
        let mut mean = vec![0.0; d];
        for r in rows {
            check_dim(d, r.len())?;
            for (m, v) in mean.iter_mut().zip(r) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0; d];
        for r in rows {
            for ((s, v), m) in var.iter_mut().zip(r).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let std: Vec<f64> = var.iter().map(|s| (s / n as f64).sqrt()).collect();
        for (j, s) in std.iter().enumerate() {
            if !s.is_finite() || *s == 0.0 || *s <= 1e-12 * mean[j].abs() {
                return Err(CfmError::ZeroVariance(j));
            }
        }
        Ok(Self { mean, std })
    }

    /// Identity map on `d` columns.
    pub fn identity(d: usize) -> Self {
        Self {
            mean: vec![0.0; d],
            std: vec![1.0; d],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn forward(&self, v: &[f64]) -> Vec<f64> {
        v.iter()
            .zip(&self.mean)
            .zip(&self.std)
            .map(|((v, m), s)| (v - m) / s)
            .collect()
    }

    pub fn inverse(&self, v: &[f64]) -> Vec<f64> {
        v.iter()
            .zip(&self.mean)
            .zip(&self.std)
            .map(|((v, m), s)| v * s + m)
            .collect()
    }
}

/// Per-dimension closed interval `[lo, hi]`; infinite ends are allowed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorBox {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl PriorBox {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Result<Self> {
        if lo.len() != hi.len() {
            return Err(CfmError::BadBounds(format!("{} lower vs {} upper", lo.len(), hi.len())));
        }
        for (j, (l, h)) in lo.iter().zip(&hi).enumerate() {
            if !(l < h) {
                return Err(CfmError::BadBounds(format!("dimension {j}: [{l}, {h}]")));
            }
        }
        Ok(Self { lo, hi })
    }

    pub fn unbounded(d: usize) -> Self {
        Self {
            lo: vec![f64::NEG_INFINITY; d],
            hi: vec![f64::INFINITY; d],
        }
    }

    /// `[(1 − r)·v, (1 + r)·v]` around positive nominal values.
    pub fn relative(nominal: &[f64], r: f64) -> Result<Self> {
        Self::new(
            nominal.iter().map(|v| v * (1.0 - r)).collect(),
            nominal.iter().map(|v| v * (1.0 + r)).collect(),
        )
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.dim()
            && x.iter()
                .zip(self.lo.iter().zip(&self.hi))
                .all(|(v, (l, h))| v.is_finite() && v >= l && v <= h)
    }
}

fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(CfmError::DimMismatch { expected, got });
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Training pairs and loss
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingPair {
    pub t: f64,
    pub x0: Vec<f64>,
    pub x_t: Vec<f64>,
    pub u_target: Vec<f64>,
    pub y: Vec<f64>,
}

/// Pair for a given base draw and time.
pub fn training_pair_at(x1: &[f64], x0: &[f64], y: &[f64], t: f64) -> TrainingPair {
    TrainingPair {
        t,
        x0: x0.to_vec(),
        x_t: x1.iter().zip(x0).map(|(a, b)| t * a + (1.0 - t) * b).collect(),
        u_target: x1.iter().zip(x0).map(|(a, b)| a - b).collect(),
        y: y.to_vec(),
    }
}

/// Draws `t ~ U[0,1]` and `x0 ~ N(0, I)` and builds the regression pair.
pub fn make_training_pair<R: Rng + ?Sized>(x1: &[f64], y: &[f64], rng: &mut R) -> TrainingPair {
    let t: f64 = rng.random();
    let x0: Vec<f64> = (0..x1.len()).map(|_| rng.sample(StandardNormal)).collect();
    training_pair_at(x1, &x0, y, t)
}

fn velocity_input(x: &[f64], y: &[f64], t: f64, buf: &mut Vec<f64>) {
    buf.clear();
    buf.extend_from_slice(x);
    buf.extend_from_slice(y);
    buf.push(t);
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CfmHyper {
    pub hidden: Vec<usize>,
    pub lr: f64,
    pub lr_decay: f64,
    pub weight_decay: f64,
    pub batch: usize,
    pub epochs: usize,
    pub patience: usize,
    pub tol: f64,
    /// Fixed `(t, x0)` draws per validation row, so the validation loss is
    /// deterministic across epochs.
    pub val_draws: usize,
    pub seed: u64,
}

impl Default for CfmHyper {
    fn default() -> Self {
        Self {
            hidden: vec![64, 64, 64],
            lr: 1e-3,
            lr_decay: 0.9999,
            weight_decay: 0.0,
            batch: 32,
            epochs: 15000,
            patience: 500,
            tol: 1e-4,
            val_draws: 8,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    pub best_epoch: usize,
    pub best_val: f64,
    pub stopped_early: bool,
}

/// Mean squared velocity error over pre-built pairs.
pub fn pair_loss(net: &MlpParams, pairs: &[TrainingPair]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(CfmError::EmptyDataset);
    }
    let mut buf = Vec::new();
    let mut total = 0.0;
    let mut count = 0usize;
    for p in pairs {
        velocity_input(&p.x_t, &p.y, p.t, &mut buf);
        let out = net.forward(&buf)?;
        total += out.iter().zip(&p.u_target).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        count += out.len();
    }
    Ok(total / count as f64)
}

/// Trains a velocity network on standardized rows `(x, y)`; returns the
/// weights from the epoch with the lowest validation loss.
pub fn train_velocity(
    x_train: &[Vec<f64>],
    y_train: &[Vec<f64>],
    x_val: &[Vec<f64>],
    y_val: &[Vec<f64>],
    hyper: &CfmHyper,
) -> Result<(MlpParams, TrainLog)> {
    if hyper.epochs == 0 {
        return Err(CfmError::BadHyper("epochs must be at least 1".into()));
    }
    if hyper.batch == 0 {
        return Err(CfmError::BadHyper("batch must be at least 1".into()));
    }
    if x_train.is_empty() {
        return Err(CfmError::EmptyDataset);
    }
    check_dim(x_train.len(), y_train.len())?;
    check_dim(x_val.len(), y_val.len())?;
    let d = x_train[0].len();
    let m = y_train[0].len();
    for (x, y) in x_train.iter().zip(y_train).chain(x_val.iter().zip(y_val)) {
        check_dim(d, x.len())?;
        check_dim(m, y.len())?;
    }
    let mut widths = vec![d + m + 1];
    widths.extend(&hyper.hidden);
    widths.push(d);
    let mut net = MlpParams::init(&widths, InitOptions::new(Activation::Silu, hyper.seed))?;
    let mut opt = OptimState::new(&net, hyper.lr)
        .with_decay(hyper.lr_decay)
        .with_weight_decay(hyper.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed ^ 0x5eed_cf11);

    let (vx, vy) = if x_val.is_empty() { (x_train, y_train) } else { (x_val, y_val) };
    let mut val_rng = ChaCha8Rng::seed_from_u64(hyper.seed ^ 0x0a11_da7e);
    let val_pairs: Vec<TrainingPair> = vx
        .iter()
        .zip(vy)
        .flat_map(|(x, y)| (0..hyper.val_draws.max(1)).map(|_| make_training_pair(x, y, &mut val_rng)).collect::<Vec<_>>())
        .collect();

    let mut order: Vec<usize> = (0..x_train.len()).collect();
    let mut tape = Tape::new(&net);
    let mut grads = Gradients::zeros_like(&net);
    let mut buf = Vec::with_capacity(d + m + 1);
    let mut upstream = vec![0.0; d];
    let mut log = TrainLog {
        best_val: f64::INFINITY,
        ..Default::default()
    };
    let mut best = net.clone();
    let mut since_best = 0usize;
    for epoch in 0..hyper.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(hyper.batch) {
            grads.zero();
            let scale = 2.0 / (chunk.len() * d) as f64;
            for &i in chunk {
                let pair = make_training_pair(&x_train[i], &y_train[i], &mut rng);
                velocity_input(&pair.x_t, &pair.y, pair.t, &mut buf);
                let out = net.forward_tape(&buf, &mut tape)?;
                for ((u, o), target) in upstream.iter_mut().zip(out).zip(&pair.u_target) {
                    let r = o - target;
                    epoch_loss += r * r;
                    *u = scale * r;
                }
                net.backward(&mut tape, &upstream, &mut grads, None)?;
            }
            adam_step(&mut opt, &mut net, &grads)?;
        }
        let train_loss = epoch_loss / (x_train.len() * d) as f64;
        let val_loss = pair_loss(&net, &val_pairs)?;
        if !train_loss.is_finite() || !val_loss.is_finite() {
            return Err(CfmError::DivergedLoss(epoch));
        }
        log.train_loss.push(train_loss);
        log.val_loss.push(val_loss);
        if val_loss < log.best_val - hyper.tol {
            log.best_val = val_loss;
            log.best_epoch = epoch;
            best.clone_from(&net);
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= hyper.patience {
                log.stopped_early = true;
                break;
            }
        }
    }
    Ok((best, log))
}

// ---------------------------------------------------------------------------
// ODE integration
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Integrator {
    /// Fixed-step classical Runge–Kutta.
    Rk4 { steps: usize },
    /// Dormand–Prince 5(4) with embedded error control.
    Dopri5 { rtol: f64, atol: f64, max_steps: usize },
}

impl Default for Integrator {
    fn default() -> Self {
        Integrator::Dopri5 {
            rtol: 1e-6,
            atol: 1e-8,
            max_steps: 10_000,
        }
    }
}

pub const RK4_FALLBACK_STEPS: usize = 100;

/// Integrates `dx/dt = f(t, x)` from `t = 0` to `t = 1`.
pub fn ode_integrate<F>(mut f: F, x0: &[f64], integrator: Integrator) -> Result<Vec<f64>>
where
    F: FnMut(f64, &[f64], &mut [f64]),
{
    match integrator {
        Integrator::Rk4 { steps } => Ok(rk4(&mut f, x0, steps.max(1))),
        Integrator::Dopri5 { rtol, atol, max_steps } => dopri5(&mut f, x0, rtol, atol, max_steps),
    }
}

fn rk4<F: FnMut(f64, &[f64], &mut [f64])>(f: &mut F, x0: &[f64], steps: usize) -> Vec<f64> {
    let n = x0.len();
    let h = 1.0 / steps as f64;
    let mut x = x0.to_vec();
    let (mut k1, mut k2, mut k3, mut k4, mut tmp) =
        (vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    for s in 0..steps {
        let t = s as f64 * h;
        f(t, &x, &mut k1);
        for i in 0..n {
            tmp[i] = x[i] + 0.5 * h * k1[i];
        }
        f(t + 0.5 * h, &tmp, &mut k2);
        for i in 0..n {
            tmp[i] = x[i] + 0.5 * h * k2[i];
        }
        f(t + 0.5 * h, &tmp, &mut k3);
        for i in 0..n {
            tmp[i] = x[i] + h * k3[i];
        }
        f(t + h, &tmp, &mut k4);
        for i in 0..n {
            x[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
    }
    x
}

// Dormand–Prince 5(4) tableau.
const DP_C: [f64; 7] = [0.0, 1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0];
const DP_A: [[f64; 6]; 7] = [
    [0.0; 6],
    [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0, 0.0, 0.0],
    [9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0, 0.0],
    [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
];
const DP_B5: [f64; 7] = [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0, 0.0];
const DP_B4: [f64; 7] = [
    5179.0 / 57600.0,
    0.0,
    7571.0 / 16695.0,
    393.0 / 640.0,
    -92097.0 / 339200.0,
    187.0 / 2100.0,
    1.0 / 40.0,
];

fn dopri5<F: FnMut(f64, &[f64], &mut [f64])>(
    f: &mut F,
    x0: &[f64],
    rtol: f64,
    atol: f64,
    max_steps: usize,
) -> Result<Vec<f64>> {
    let n = x0.len();
    let mut x = x0.to_vec();
    let mut k = vec![vec![0.0; n]; 7];
    let mut tmp = vec![0.0; n];
    let mut x5 = vec![0.0; n];
    let mut t = 0.0;
    let mut h: f64 = 0.1;
    let mut fsal = false;
    for _ in 0..max_steps {
        if t >= 1.0 {
            return Ok(x);
        }
        h = h.min(1.0 - t);
        if h < 1e-12 {
            return Err(CfmError::StepFailure { t });
        }
        if !fsal {
            f(t, &x, &mut k[0]);
        }
        for s in 1..7 {
            for i in 0..n {
                let mut acc = x[i];
                for (j, a) in DP_A[s].iter().enumerate().take(s) {
                    acc += h * a * k[j][i];
                }
                tmp[i] = acc;
            }
            f(t + DP_C[s] * h, &tmp, &mut k[s]);
        }
        let mut err: f64 = 0.0;
        for i in 0..n {
            let mut hi5 = x[i];
            let mut lo4 = x[i];
            for s in 0..7 {
                hi5 += h * DP_B5[s] * k[s][i];
                lo4 += h * DP_B4[s] * k[s][i];
            }
            x5[i] = hi5;
            let sc = atol + rtol * x[i].abs().max(hi5.abs());
            err = err.max(((hi5 - lo4) / sc).abs());
        }
        if !err.is_finite() {
            h *= 0.25;
            fsal = true;
            continue;
        }
        if err <= 1.0 {
            t += h;
            x.copy_from_slice(&x5);
            // First-same-as-last: the seventh stage is f at the new point.
            k.swap(0, 6);
        }
        fsal = true;
        let factor = if err == 0.0 { 5.0 } else { (0.9 * err.powf(-0.2)).clamp(0.2, 5.0) };
        h *= factor;
    }
    if t >= 1.0 {
        Ok(x)
    } else {
        Err(CfmError::StepFailure { t })
    }
}

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

/// Velocity network plus everything needed to map raw data in and out.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CfmModel {
    pub net: MlpParams,
    pub x_stats: Standardizer,
    pub y_stats: Standardizer,
    pub bounds: PriorBox,
    pub x_names: Vec<String>,
    pub y_names: Vec<String>,
    pub config_hash: String,
    pub seed: u64,
}

impl CfmModel {
    pub fn d(&self) -> usize {
        self.x_stats.dim()
    }

    pub fn m(&self) -> usize {
        self.y_stats.dim()
    }

    /// Velocity in standardized space.
    pub fn velocity(&self, x: &[f64], y_std: &[f64], t: f64, tape: &mut Tape, buf: &mut Vec<f64>) -> Result<Vec<f64>> {
        velocity_input(x, y_std, t, buf);
        Ok(self.net.forward_tape(buf, tape)?.to_vec())
    }

    /// Pushes one standardized base draw to `t = 1` (standardized output).
    pub fn integrate(&self, y_std: &[f64], x0: &[f64], integrator: Integrator) -> Result<Vec<f64>> {
        check_dim(self.m(), y_std.len())?;
        check_dim(self.d(), x0.len())?;
        let mut tape = Tape::new(&self.net);
        let mut buf = Vec::with_capacity(self.d() + self.m() + 1);
        ode_integrate(
            |t, x, out| {
                velocity_input(x, y_std, t, &mut buf);
                let v = self
                    .net
                    .forward_tape(&buf, &mut tape)
                    .expect("dimensions checked above");
                out.copy_from_slice(v);
            },
            x0,
            integrator,
        )
    }

    /// Trains on raw rows: statistics come from the training rows only.
    #[allow(clippy::too_many_arguments)]
    pub fn fit(
        x_train: &[Vec<f64>],
        y_train: &[Vec<f64>],
        x_val: &[Vec<f64>],
        y_val: &[Vec<f64>],
        bounds: PriorBox,
        x_names: Vec<String>,
        y_names: Vec<String>,
        hyper: &CfmHyper,
    ) -> Result<(Self, TrainLog)> {
        let x_stats = Standardizer::fit(x_train)?;
        let y_stats = if y_train.first().is_some_and(|r| r.is_empty()) {
            Standardizer::identity(0)
        } else {
            Standardizer::fit(y_train)?
        };
        check_dim(x_stats.dim(), bounds.dim())?;
        let sx = |rows: &[Vec<f64>]| rows.iter().map(|r| x_stats.forward(r)).collect::<Vec<_>>();
        let sy = |rows: &[Vec<f64>]| rows.iter().map(|r| y_stats.forward(r)).collect::<Vec<_>>();
        let (net, log) = train_velocity(&sx(x_train), &sy(y_train), &sx(x_val), &sy(y_val), hyper)?;
        Ok((
            Self {
                net,
                x_stats,
                y_stats,
                bounds,
                x_names,
                y_names,
                config_hash: String::new(),
                seed: hyper.seed,
            },
            log,
        ))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let m: Self = serde_json::from_slice(&std::fs::read(path)?)?;
        if !m.net.is_finite() || m.net.input_dim() != m.d() + m.m() + 1 || m.net.output_dim() != m.d() {
            return Err(CfmError::Nn(NnError::CorruptCheckpoint));
        }
        Ok(m)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SampleOptions {
    pub seed: u64,
    pub max_tries: usize,
    pub integrator: Integrator,
}

impl Default for SampleOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            max_tries: 100_000,
            integrator: Integrator::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorSamples {
    /// Accepted draws in raw units.
    pub samples: Vec<Vec<f64>>,
    pub tries: usize,
    pub acceptance_rate: f64,
    /// Draws where the adaptive integrator failed and RK4 was used instead.
    pub fallbacks: usize,
}

/// Base draw for index `i`: its own ChaCha stream under the root seed, so
/// results do not depend on scheduling.
fn base_draw(seed: u64, i: usize, d: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(i as u64);
    (0..d).map(|_| rng.sample(StandardNormal)).collect()
}

/// Draws `n` posterior samples for raw conditioning `y_raw` with rejection
/// against `bounds`.
pub fn sample_posterior(
    model: &CfmModel,
    y_raw: &[f64],
    n: usize,
    bounds: &PriorBox,
    opts: &SampleOptions,
) -> Result<PosteriorSamples> {
    if n == 0 {
        return Err(CfmError::BadHyper("n must be at least 1".into()));
    }
    check_dim(model.m(), y_raw.len())?;
    check_dim(model.d(), bounds.dim())?;
    let y_std = model.y_stats.forward(y_raw);
    let mut accepted = Vec::with_capacity(n);
    let mut tries = 0usize;
    let mut fallbacks = 0usize;
    while accepted.len() < n && tries < opts.max_tries {
        let want = n - accepted.len();
        let batch = (want + want / 4 + 8).min(opts.max_tries - tries);
        let draws: Vec<Result<(Vec<f64>, bool)>> = (tries..tries + batch)
            .into_par_iter()
            .map(|i| {
                let x0 = base_draw(opts.seed, i, model.d());
                let (x1, fell_back) = match model.integrate(&y_std, &x0, opts.integrator) {
                    Ok(x) => (x, false),
                    Err(CfmError::StepFailure { .. }) => (
                        model.integrate(&y_std, &x0, Integrator::Rk4 { steps: RK4_FALLBACK_STEPS })?,
                        true,
                    ),
                    Err(e) => return Err(e),
                };
                Ok((model.x_stats.inverse(&x1), fell_back))
            })
            .collect();
        for d in draws {
            let (x, fell_back) = d?;
            tries += 1;
            fallbacks += fell_back as usize;
            if bounds.contains(&x) {
                accepted.push(x);
                if accepted.len() == n {
                    break;
                }
            }
        }
    }
    if accepted.is_empty() {
        return Err(CfmError::AllRejected { tries });
    }
    if accepted.len() < n {
        return Err(CfmError::Exhausted {
            accepted: accepted.len(),
            wanted: n,
            tries,
        });
    }
    Ok(PosteriorSamples {
        acceptance_rate: n as f64 / tries as f64,
        samples: accepted,
        tries,
        fallbacks,
    })
}
