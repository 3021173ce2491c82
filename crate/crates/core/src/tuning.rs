//! Nominal boundary-condition tuning and a DE-MC reference sampler.
//!
//! Parameter vectors follow `[Rp_l, Rd_l, C_l, Rp_r, Rd_r, C_r]`.

use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::circuit::{
    build_network, summarize, CircuitError, RcrBoundary, Side, SimSettings, Simulator, TimeTraces, TopologyConfig,
};
use crate::inflow::FourierInflow;

pub const W_PRESSURE: f64 = 1.0;
pub const W_FLOW: f64 = 1e-4;
pub const W_MONO: f64 = 1e-2;
pub const SENTINEL: f64 = 1e6;
pub const C_MIN: f64 = 1e-5;
pub const C_MAX: f64 = 1e-2;
pub const TAU_MIN: f64 = 0.05;
pub const TAU_MAX: f64 = 10.0;

#[derive(Debug, thiserror::Error)]
pub enum TuningError {
    #[error("resistance {index} is not positive ({value})")]
    NonPositiveResistance { index: usize, value: f64 },
    #[error("invalid targets: {0}")]
    BadTargets(String),
    #[error("invalid bounds: {0}")]
    BadBounds(String),
    #[error("invalid options: {0}")]
    BadOptions(String),
    #[error("objective is not finite at the starting point")]
    NonFiniteStart,
    #[error(transparent)]
    Circuit(#[from] CircuitError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, TuningError>;

/// Closed interval per dimension; `lo == hi` pins a dimension.
pub type Bounds = Vec<(f64, f64)>;

fn check_bounds(b: &[(f64, f64)]) -> Result<()> {
    if b.is_empty() {
        return Err(TuningError::BadBounds("no dimensions".into()));
    }
    for (j, (lo, hi)) in b.iter().enumerate() {
        if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
            return Err(TuningError::BadBounds(format!("dimension {j}: [{lo}, {hi}]")));
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Objective
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuningTargets {
    /// mmHg
    pub p_sys: f64,
    /// mmHg
    pub p_dia: f64,
    /// Optional left flow split target in percent.
    #[serde(default)]
    pub flow_split: Option<f64>,
    /// Mean stenosed-branch flow of the previous geometry in a severity sweep.
    #[serde(default)]
    pub q_prev: Option<f64>,
    #[serde(default)]
    pub stenosed_side: Option<Side>,
}

impl TuningTargets {
    pub fn new(p_sys: f64, p_dia: f64) -> Result<Self> {
        let t = Self {
            p_sys,
            p_dia,
            flow_split: None,
            q_prev: None,
            stenosed_side: None,
        };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.p_sys > self.p_dia && self.p_dia > 0.0) {
            return Err(TuningError::BadTargets(format!(
                "need p_sys > p_dia > 0, got {} / {}",
                self.p_sys, self.p_dia
            )));
        }
        if self.q_prev.is_some() && self.stenosed_side.is_none() {
            return Err(TuningError::BadTargets("q_prev needs stenosed_side".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossTerms {
    pub pressure: f64,
    pub flow: f64,
    pub mono: f64,
    pub split: f64,
    pub total: f64,
}

/// Outlet RCRs `[left, right]` for a six-vector.
pub fn rcr_pair(x: &[f64]) -> [RcrBoundary; 2] {
    let bc = |o: usize| RcrBoundary {
        rp: x[o],
        rd: x[o + 1],
        c: x[o + 2],
        p_ref: 0.0,
    };
    [bc(0), bc(3)]
}

/// Capacitance window and `Rd·C` window on both sides.
pub fn hard_constraints_ok(x: &[f64]) -> bool {
    x.len() == 6
        && rcr_pair(x).iter().all(|b| {
            let tau = b.rd * b.c;
            b.rp > 0.0
                && b.rd > 0.0
                && (C_MIN..=C_MAX).contains(&b.c)
                && (TAU_MIN..=TAU_MAX).contains(&tau)
        })
}

/// Loss terms computed from already simulated traces.
pub fn loss_from_traces(tr: &TimeTraces, targets: &TuningTargets) -> Result<LossTerms> {
    let s = summarize(tr)?;
    let rel = |v: f64, target: f64| ((v - target) / target).powi(2);
    let pressure = rel(s.p_sys, targets.p_sys) + rel(s.p_dia, targets.p_dia);
    let flow = tr.negative_flow_penalty();
    let mono = match (targets.q_prev, targets.stenosed_side) {
        (Some(q_prev), Some(side)) => {
            let k = if side == Side::Left { tr.left_outlet } else { 1 - tr.left_outlet.min(1) };
            (s.q_mean[k] - q_prev).max(0.0).powi(2)
        }
        _ => 0.0,
    };
    let split = targets.flow_split.map_or(0.0, |f| rel(s.flow_split_left, f));
    Ok(LossTerms {
        pressure,
        flow,
        mono,
        split,
        total: W_PRESSURE * pressure + W_FLOW * flow + W_MONO * mono + split,
    })
}

/// Everything the constrained objective needs besides the parameter vector.
#[derive(Debug, Clone)]
pub struct TuningProblem {
    pub topology: TopologyConfig,
    pub inflow: FourierInflow,
    pub targets: TuningTargets,
    pub settings: SimSettings,
}

impl TuningProblem {
    pub fn simulate(&self, x: &[f64]) -> Result<TimeTraces> {
        let mut cfg = self.topology.clone();
        let [left, right] = rcr_pair(x);
        for b in &mut cfg.branches {
            if b.outlet.is_some() {
                match b.side {
                    Some(Side::Left) => b.outlet = Some(left),
                    Some(Side::Right) => b.outlet = Some(right),
                    None => {}
                }
            }
        }
        let net = build_network(&cfg)?;
        Ok(Simulator::new(&net)?.simulate(&self.inflow, &self.settings)?)
    }

    /// Constrained loss; infeasible points and failed simulations return
    /// [`SENTINEL`].
    pub fn objective(&self, x: &[f64]) -> f64 {
        if !hard_constraints_ok(x) {
            return SENTINEL;
        }
        match self.simulate(x).and_then(|tr| loss_from_traces(&tr, &self.targets)) {
            Ok(l) if l.total.is_finite() => l.total,
            _ => SENTINEL,
        }
    }
}

/// Free-function form of [`TuningProblem::objective`].
pub fn tuning_objective(
    x: &[f64],
    topology: &TopologyConfig,
    inflow: &FourierInflow,
    targets: &TuningTargets,
    settings: &SimSettings,
) -> f64 {
    TuningProblem {
        topology: topology.clone(),
        inflow: inflow.clone(),
        targets: targets.clone(),
        settings: *settings,
    }
    .objective(x)
}

// ---------------------------------------------------------------------------
// Continuation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContinuationState {
    pub prev: [f64; 6],
    pub alpha: f64,
    pub beta: f64,
    pub stenosed: Side,
}

impl ContinuationState {
    pub fn new(prev: [f64; 6], stenosed: Side) -> Self {
        Self {
            prev,
            alpha: 0.9,
            beta: 1.1,
            stenosed,
        }
    }
}

/// Bounds for the next geometry in a severity sweep. On the stenosed side
/// resistances may only grow (by at most β) and the capacitance may drop
/// freely but grow by at most β; on the other side everything may shrink by
/// at most α. The result never leaves `global`.
pub fn continuation_bounds(state: &ContinuationState, global: &[(f64, f64)]) -> Result<Bounds> {
    if global.len() != 6 {
        return Err(TuningError::BadBounds(format!("need 6 dimensions, got {}", global.len())));
    }
    check_bounds(global)?;
    if !(0.0 < state.alpha && state.alpha < 1.0 && state.beta > 1.0) {
        return Err(TuningError::BadOptions(format!(
            "need 0 < α < 1 < β, got {} and {}",
            state.alpha, state.beta
        )));
    }
    let sten = if state.stenosed == Side::Left { 0 } else { 3 };
    let mut out = Vec::with_capacity(6);
    for (j, (&p, &(lo, hi))) in state.prev.iter().zip(global).enumerate() {
        let p = p.clamp(lo, hi);
        let is_c = j % 3 == 2;
        let b = if (sten..sten + 3).contains(&j) {
            if is_c {
                (lo, (state.beta * p).min(hi))
            } else {
                (p, (state.beta * p).min(hi))
            }
        } else {
            ((state.alpha * p).max(lo), p)
        };
        out.push(b);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Nelder–Mead
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NmOptions {
    pub max_iter: usize,
    pub f_tol: f64,
    pub x_tol: f64,
    /// Initial simplex offset relative to each coordinate.
    pub rel_step: f64,
}

impl Default for NmOptions {
    fn default() -> Self {
        Self {
            max_iter: 5000,
            f_tol: 1e-8,
            x_tol: 1e-8,
            rel_step: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptResult {
    pub x: Vec<f64>,
    pub f: f64,
    pub iterations: usize,
    pub evaluations: usize,
    pub converged: bool,
    /// `(iteration, best f, best x)` after every iteration.
    pub history: Vec<(usize, f64, Vec<f64>)>,
}

/// Downhill simplex with the standard coefficients (1, 2, ½, ½). Stops when
/// the spread of simplex values is within `f_tol` or the simplex diameter is
/// within `x_tol`; otherwise returns the best point with `converged = false`.
pub fn nelder_mead<F: FnMut(&[f64]) -> f64>(mut f: F, x0: &[f64], opts: &NmOptions) -> Result<OptResult> {
    let n = x0.len();
    let f0 = f(x0);
    if !f0.is_finite() {
        return Err(TuningError::NonFiniteStart);
    }
    let mut evals = 1;
    let mut simplex: Vec<(Vec<f64>, f64)> = vec![(x0.to_vec(), f0)];
    for i in 0..n {
        let mut x = x0.to_vec();
        x[i] = if x[i] != 0.0 { x[i] * (1.0 + opts.rel_step) } else { 2.5e-4 };
        let fx = f(&x);
        evals += 1;
        simplex.push((x, fx));
    }
    let order = |s: &mut Vec<(Vec<f64>, f64)>| s.sort_by(|a, b| a.1.total_cmp(&b.1));
    let mut history = Vec::new();
    for it in 0..opts.max_iter {
        order(&mut simplex);
        let f_spread = (simplex[n].1 - simplex[0].1).abs();
        let x_spread = simplex[1..]
            .iter()
            .flat_map(|(x, _)| x.iter().zip(&simplex[0].0).map(|(a, b)| (a - b).abs()))
            .fold(0.0, f64::max);
        if f_spread <= opts.f_tol || x_spread <= opts.x_tol {
            return Ok(OptResult {
                x: simplex[0].0.clone(),
                f: simplex[0].1,
                iterations: it,
                evaluations: evals,
                converged: true,
                history,
            });
        }
        let centroid: Vec<f64> = (0..n)
            .map(|j| simplex[..n].iter().map(|(x, _)| x[j]).sum::<f64>() / n as f64)
            .collect();
        let along = |c: f64, worst: &[f64]| -> Vec<f64> {
            centroid.iter().zip(worst).map(|(m, w)| m + c * (m - w)).collect()
        };
        let worst = simplex[n].0.clone();
        let xr = along(1.0, &worst);
        let fr = f(&xr);
        evals += 1;
        if fr < simplex[0].1 {
            let xe = along(2.0, &worst);
            let fe = f(&xe);
            evals += 1;
            simplex[n] = if fe < fr { (xe, fe) } else { (xr, fr) };
        } else if fr < simplex[n - 1].1 {
            simplex[n] = (xr, fr);
        } else {
            let (xc, fc) = if fr < simplex[n].1 {
                let xc = along(0.5, &worst);
                let fc = f(&xc);
                (xc, fc)
            } else {
                let xc = along(-0.5, &worst);
                let fc = f(&xc);
                (xc, fc)
            };
            evals += 1;
            if fc < simplex[n].1.min(fr) {
                simplex[n] = (xc, fc);
            } else {
                let best = simplex[0].0.clone();
                for (x, fx) in simplex.iter_mut().skip(1) {
                    for (v, b) in x.iter_mut().zip(&best) {
                        *v = b + 0.5 * (*v - b);
                    }
                    *fx = f(x);
                    evals += 1;
                }
            }
        }
        let best = simplex.iter().min_by(|a, b| a.1.total_cmp(&b.1)).expect("nonempty simplex");
        history.push((it + 1, best.1, best.0.clone()));
    }
    order(&mut simplex);
    Ok(OptResult {
        x: simplex[0].0.clone(),
        f: simplex[0].1,
        iterations: opts.max_iter,
        evaluations: evals,
        converged: false,
        history,
    })
}

// ---------------------------------------------------------------------------
// Differential evolution
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DeOptions {
    pub pop: usize,
    pub f_weight: f64,
    pub cr: f64,
    pub max_gen: usize,
    pub seed: u64,
    /// Stop once the population's objective spread falls below this.
    pub tol: f64,
}

impl Default for DeOptions {
    fn default() -> Self {
        Self {
            pop: 60,
            f_weight: 0.5,
            cr: 0.9,
            max_gen: 200,
            seed: 0,
            tol: 0.0,
        }
    }
}

/// DE rand/1/bin with clipping to the bounds. Trial vectors are generated
/// serially from the seeded stream and scored in parallel, so the trajectory
/// is independent of the thread count. An optional initial member seeds the
/// population (warm start).
pub fn diff_evolution<F>(f: F, bounds: &[(f64, f64)], warm: Option<&[f64]>, opts: &DeOptions) -> Result<OptResult>
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    check_bounds(bounds)?;
    let d = bounds.len();
    if opts.pop < 4 {
        return Err(TuningError::BadOptions("population must be at least 4".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let draw = |rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)| if hi > lo { rng.random_range(lo..=hi) } else { lo };
    let mut pop: Vec<Vec<f64>> = (0..opts.pop)
        .map(|_| bounds.iter().map(|&b| draw(&mut rng, b)).collect())
        .collect();
    if let Some(w) = warm {
        if w.len() != d {
            return Err(TuningError::BadOptions(format!("warm start has {} entries, need {d}", w.len())));
        }
        pop[0] = w.iter().zip(bounds).map(|(v, (lo, hi))| v.clamp(*lo, *hi)).collect();
    }
    let score = |xs: &[Vec<f64>]| -> Vec<f64> {
        xs.par_iter()
            .map(|x| {
                let v = f(x);
                if v.is_nan() {
                    f64::INFINITY
                } else {
                    v
                }
            })
            .collect()
    };
    let mut fit = score(&pop);
    let mut evals = opts.pop;
    let best_of = |fit: &[f64]| (0..fit.len()).min_by(|&a, &b| fit[a].total_cmp(&fit[b])).expect("nonempty");
    let mut history = Vec::with_capacity(opts.max_gen + 1);
    let b = best_of(&fit);
    history.push((0, fit[b], pop[b].clone()));
    let mut generations = 0;
    let mut converged = false;
    for gen in 1..=opts.max_gen {
        let trials: Vec<Vec<f64>> = (0..opts.pop)
            .map(|i| {
                let mut pick = || loop {
                    let k = rng.random_range(0..opts.pop);
                    if k != i {
                        break k;
                    }
                };
                let (r1, mut r2, mut r3) = (pick(), pick(), pick());
                while r2 == r1 {
                    r2 = pick();
                }
                while r3 == r1 || r3 == r2 {
                    r3 = pick();
                }
                let jrand = rng.random_range(0..d);
                (0..d)
                    .map(|j| {
                        let (lo, hi) = bounds[j];
                        if j == jrand || rng.random::<f64>() < opts.cr {
                            (pop[r1][j] + opts.f_weight * (pop[r2][j] - pop[r3][j])).clamp(lo, hi)
                        } else {
                            pop[i][j]
                        }
                    })
                    .collect()
            })
            .collect();
        let tf = score(&trials);
        evals += opts.pop;
        for (i, (x, v)) in trials.into_iter().zip(tf).enumerate() {
            if v <= fit[i] {
                pop[i] = x;
                fit[i] = v;
            }
        }
        let b = best_of(&fit);
        history.push((gen, fit[b], pop[b].clone()));
        generations = gen;
        let worst = fit.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if opts.tol > 0.0 && worst - fit[b] <= opts.tol {
            converged = true;
            break;
        }
    }
    let b = best_of(&fit);
    Ok(OptResult {
        x: pop[b].clone(),
        f: fit[b],
        iterations: generations,
        evaluations: evals,
        converged,
        history,
    })
}

pub fn write_history_csv(path: &Path, history: &[(usize, f64, Vec<f64>)]) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    let d = history.first().map_or(0, |h| h.2.len());
    write!(w, "generation,best_f")?;
    for j in 0..d {
        write!(w, ",x{j}")?;
    }
    writeln!(w)?;
    for (g, f, x) in history {
        write!(w, "{g},{f}")?;
        for v in x {
            write!(w, ",{v}")?;
        }
        writeln!(w)?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Resistance rescaling
// ---------------------------------------------------------------------------

/// Parallel combination `(Σ 1/rᵢ)⁻¹`.
pub fn parallel_resistance(r: &[f64]) -> f64 {
    1.0 / r.iter().map(|v| 1.0 / v).sum::<f64>()
}

/// Scales every resistance so that the parallel total equals `r_tot_truth`.
pub fn rescale_resistances(r: &[f64], r_tot_truth: f64) -> Result<Vec<f64>> {
    if let Some((index, &value)) = r.iter().enumerate().find(|(_, v)| !(**v > 0.0 && v.is_finite())) {
        return Err(TuningError::NonPositiveResistance { index, value });
    }
    if r.is_empty() || !(r_tot_truth > 0.0) {
        return Err(TuningError::NonPositiveResistance {
            index: 0,
            value: r_tot_truth,
        });
    }
    let k = r_tot_truth / parallel_resistance(r);
    Ok(r.iter().map(|v| v * k).collect())
}

// ---------------------------------------------------------------------------
// DE-MC
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DemcOptions {
    pub chains: usize,
    pub generations: usize,
    pub burn_in: usize,
    pub seed: u64,
    /// Jitter std as a fraction of each bound width.
    pub jitter: f64,
}

impl Default for DemcOptions {
    fn default() -> Self {
        Self {
            chains: 8,
            generations: 5000,
            burn_in: 1000,
            seed: 0,
            jitter: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemcResult {
    /// `chains[c][g]`: state of chain `c` after generation `g`.
    pub chains: Vec<Vec<Vec<f64>>>,
    pub burn_in: usize,
    pub acceptance_rate: f64,
}

impl DemcResult {
    /// Pooled post-burn-in draws.
    pub fn samples(&self) -> Vec<Vec<f64>> {
        self.chains
            .iter()
            .flat_map(|c| c.iter().skip(self.burn_in).cloned())
            .collect()
    }
}

fn reflect(v: f64, lo: f64, hi: f64) -> f64 {
    let w = hi - lo;
    if w <= 0.0 {
        return lo;
    }
    let mut u = (v - lo).rem_euclid(2.0 * w);
    if u > w {
        u = 2.0 * w - u;
    }
    lo + u
}

/// Differential-evolution Markov chain: proposal
/// `x' = x + γ(x_a − x_b) + ε` with `γ = 2.38/√(2d)` (γ = 1 every tenth
/// generation for mode jumping), reflection at the bounds, and a Metropolis
/// test. Chains move one after another within a generation.
pub fn demc_oracle<F>(log_post: F, bounds: &[(f64, f64)], opts: &DemcOptions) -> Result<DemcResult>
where
    F: Fn(&[f64]) -> f64,
{
    check_bounds(bounds)?;
    let d = bounds.len();
    if opts.chains < 2 * d + 2 {
        return Err(TuningError::BadOptions(format!(
            "need at least {} chains for {d} dimensions",
            2 * d + 2
        )));
    }
    if opts.burn_in >= opts.generations {
        return Err(TuningError::BadOptions("burn_in must be below generations".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut state: Vec<Vec<f64>> = (0..opts.chains)
        .map(|_| bounds.iter().map(|&(lo, hi)| rng.random_range(lo..=hi)).collect())
        .collect();
    let mut lp: Vec<f64> = state.iter().map(|x| log_post(x)).collect();
    let mut chains = vec![Vec::with_capacity(opts.generations); opts.chains];
    let gamma0 = 2.38 / (2.0 * d as f64).sqrt();
    let mut accepted = 0usize;
    for g in 0..opts.generations {
        let gamma = if (g + 1) % 10 == 0 { 1.0 } else { gamma0 };
        for c in 0..opts.chains {
            let a = loop {
                let k = rng.random_range(0..opts.chains);
                if k != c {
                    break k;
                }
            };
            let b = loop {
                let k = rng.random_range(0..opts.chains);
                if k != c && k != a {
                    break k;
                }
            };
            let prop: Vec<f64> = (0..d)
                .map(|j| {
                    let (lo, hi) = bounds[j];
                    let eps: f64 = rng.sample::<f64, _>(StandardNormal) * opts.jitter * (hi - lo);
                    reflect(state[c][j] + gamma * (state[a][j] - state[b][j]) + eps, lo, hi)
                })
                .collect();
            let lp_new = log_post(&prop);
            let u: f64 = rng.random();
            if lp_new.is_finite() && (lp_new - lp[c] >= 0.0 || u.ln() < lp_new - lp[c]) {
                state[c] = prop;
                lp[c] = lp_new;
                accepted += 1;
            }
            chains[c].push(state[c].clone());
        }
    }
    Ok(DemcResult {
        chains,
        burn_in: opts.burn_in,
        acceptance_rate: accepted as f64 / (opts.chains * opts.generations) as f64,
    })
}

pub fn write_chains_csv(path: &Path, res: &DemcResult) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    let d = res.chains.first().and_then(|c| c.first()).map_or(0, |x| x.len());
    write!(w, "chain,generation")?;
    for j in 0..d {
        write!(w, ",x{j}")?;
    }
    writeln!(w)?;
    for (c, chain) in res.chains.iter().enumerate() {
        for (g, x) in chain.iter().enumerate() {
            write!(w, "{c},{g}")?;
            for v in x {
                write!(w, ",{v}")?;
            }
            writeln!(w)?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rescale_examples() {
        assert_eq!(rescale_resistances(&[2.0, 2.0], 1.0).unwrap(), vec![2.0, 2.0]);
        assert_eq!(rescale_resistances(&[4.0, 4.0], 1.0).unwrap(), vec![2.0, 2.0]);
        assert!(matches!(
            rescale_resistances(&[1.0, 0.0], 1.0),
            Err(TuningError::NonPositiveResistance { index: 1, .. })
        ));
    }

    #[test]
    fn continuation_examples() {
        let global = vec![(10.0, 1e5), (10.0, 1e5), (C_MIN, C_MAX), (10.0, 1e5), (10.0, 1e5), (C_MIN, C_MAX)];
        let st = ContinuationState::new([1000.0, 1e5, 1e-3, 500.0, 2000.0, 1e-3], Side::Left);
        let b = continuation_bounds(&st, &global).unwrap();
        assert!((b[0].0 - 1000.0).abs() < 1e-9 && (b[0].1 - 1100.0).abs() < 1e-9);
        assert_eq!(b[1], (1e5, 1e5));
        assert!((b[2].0 - C_MIN).abs() < 1e-18 && (b[2].1 - 1.1e-3).abs() < 1e-15);
        assert!((b[5].0 - 9e-4).abs() < 1e-15 && (b[5].1 - 1e-3).abs() < 1e-15);
        assert!((b[3].0 - 450.0).abs() < 1e-9 && b[3].1 == 500.0);
    }

    #[test]
    fn hard_constraint_tau() {
        assert!(!hard_constraints_ok(&[100.0, 1000.0, 1e-5, 100.0, 1000.0, 1e-3]));
        assert!(hard_constraints_ok(&[100.0, 1000.0, 1e-4, 100.0, 1000.0, 1e-3]));
    }

    #[test]
    fn reflection_stays_inside() {
        for v in [-3.5, -1.0, 0.0, 0.3, 1.0, 1.7, 4.2] {
            let r = reflect(v, 0.0, 1.0);
            assert!((0.0..=1.0).contains(&r));
        }
        assert!((reflect(1.2, 0.0, 1.0) - 0.8).abs() < 1e-12);
        assert!((reflect(-0.2, 0.0, 1.0) - 0.2).abs() < 1e-12);
    }
}
