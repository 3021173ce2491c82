//! Small fully-connected networks with hand-written backpropagation.
//!
//! Everything here is `f64` and row-major. A network is a stack of dense
//! layers; hidden layers apply the configured activation and the final
//! layer is always linear.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, thiserror::Error)]
pub enum NnError {
    #[error("architecture needs at least an input and an output width, got {0:?}")]
    EmptyArchitecture(Vec<usize>),
    #[error("layer widths must be positive, got {0:?}")]
    ZeroWidth(Vec<usize>),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error("optimizer state does not match parameter shapes")]
    ShapeMismatch,
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint format: {0}")]
    Format(#[from] serde_json::Error),
    #[error("checkpoint holds non-finite or inconsistent parameters")]
    CorruptCheckpoint,
}

pub type Result<T> = std::result::Result<T, NnError>;

/// Hidden-layer nonlinearity. The output layer is always the identity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    /// x·σ(x)
    Silu,
    Identity,
}

impl Activation {
    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Silu => x / (1.0 + (-x).exp()),
            Activation::Identity => x,
        }
    }

    #[inline]
    fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Silu => {
                let s = 1.0 / (1.0 + (-x).exp());
                s * (1.0 + x * (1.0 - s))
            }
            Activation::Identity => 1.0,
        }
    }
}

/// One affine layer: `y = W x + b` with `W` stored `n_out × n_in` row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub n_in: usize,
    pub n_out: usize,
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

impl Dense {
    pub fn zeros(n_in: usize, n_out: usize) -> Self {
        Self {
            n_in,
            n_out,
            w: vec![0.0; n_in * n_out],
            b: vec![0.0; n_out],
        }
    }

    fn affine(&self, x: &[f64], out: &mut [f64]) {
        for (o, row) in out.iter_mut().zip(self.w.chunks_exact(self.n_in)) {
            *o = row.iter().zip(x).map(|(w, x)| w * x).sum();
        }
        for (o, b) in out.iter_mut().zip(&self.b) {
            *o += b;
        }
    }

    fn same_shape(&self, other: &Dense) -> bool {
        self.n_in == other.n_in && self.n_out == other.n_out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    widths: Vec<usize>,
    activation: Activation,
    layers: Vec<Dense>,
}

/// Initialization options for [`MlpParams::init`].
#[derive(Debug, Clone, Copy)]
pub struct InitOptions {
    pub activation: Activation,
    pub seed: u64,
    /// Zero the final layer so the network starts as the zero map.
    pub zero_output_layer: bool,
}

impl InitOptions {
    pub fn new(activation: Activation, seed: u64) -> Self {
        Self {
            activation,
            seed,
            zero_output_layer: false,
        }
    }

    pub fn zero_output(mut self) -> Self {
        self.zero_output_layer = true;
        self
    }
}

/// Weight bound for fan-in-scaled uniform initialization: `sqrt(6 / fan_in)`.
pub fn he_uniform_bound(fan_in: usize) -> f64 {
    (6.0 / fan_in as f64).sqrt()
}

fn check_widths(widths: &[usize]) -> Result<()> {
    if widths.len() < 2 {
        return Err(NnError::EmptyArchitecture(widths.to_vec()));
    }
    if widths.contains(&0) {
        return Err(NnError::ZeroWidth(widths.to_vec()));
    }
    Ok(())
}

impl MlpParams {
    /// Weights are uniform on `±sqrt(6/fan_in)`, biases start at zero.
    pub fn init(widths: &[usize], opts: InitOptions) -> Result<Self> {
        check_widths(widths)?;
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        let n_layers = widths.len() - 1;
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, pair)| {
                let mut layer = Dense::zeros(pair[0], pair[1]);
                if !(opts.zero_output_layer && i + 1 == n_layers) {
                    let bound = he_uniform_bound(pair[0]);
                    for w in &mut layer.w {
                        *w = rng.random_range(-bound..bound);
                    }
                }
                layer
            })
            .collect();
        Ok(Self {
            widths: widths.to_vec(),
            activation: opts.activation,
            layers,
        })
    }

    /// Builds a network from explicit layers; widths are inferred.
    pub fn from_layers(layers: Vec<Dense>, activation: Activation) -> Result<Self> {
        if layers.is_empty() {
            return Err(NnError::EmptyArchitecture(Vec::new()));
        }
        let mut widths = vec![layers[0].n_in];
        for layer in &layers {
            let expected = *widths.last().unwrap();
            if layer.n_in != expected {
                return Err(NnError::DimMismatch {
                    expected,
                    got: layer.n_in,
                });
            }
            if layer.w.len() != layer.n_in * layer.n_out || layer.b.len() != layer.n_out {
                return Err(NnError::ShapeMismatch);
            }
            widths.push(layer.n_out);
        }
        check_widths(&widths)?;
        Ok(Self {
            widths,
            activation,
            layers,
        })
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Dense] {
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.w.iter().chain(&l.b).all(|v| v.is_finite()))
    }

    /// Parameters flattened layer by layer, weights before biases.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        for l in &self.layers {
            out.extend_from_slice(&l.w);
            out.extend_from_slice(&l.b);
        }
        out
    }

    pub fn unflatten(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.n_params() {
            return Err(NnError::DimMismatch {
                expected: self.n_params(),
                got: flat.len(),
            });
        }
        let mut rest = flat;
        for l in &mut self.layers {
            let (w, r) = rest.split_at(l.w.len());
            l.w.copy_from_slice(w);
            let (b, r) = r.split_at(l.b.len());
            l.b.copy_from_slice(b);
            rest = r;
        }
        Ok(())
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut tape = Tape::new(self);
        Ok(self.forward_tape(x, &mut tape)?.to_vec())
    }

    /// Forward pass that records pre-activations for a later [`backward`](Self::backward).
    pub fn forward_tape<'t>(&self, x: &[f64], tape: &'t mut Tape) -> Result<&'t [f64]> {
        if x.len() != self.input_dim() {
            return Err(NnError::DimMismatch {
                expected: self.input_dim(),
                got: x.len(),
            });
        }
        tape.ensure(self);
        tape.acts[0].copy_from_slice(x);
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let (before, after) = tape.acts.split_at_mut(i + 1);
            let input = &before[i];
            let pre = &mut tape.pre[i];
            layer.affine(input, pre);
            let out = &mut after[0];
            if i == last {
                out.copy_from_slice(pre);
            } else {
                for (o, p) in out.iter_mut().zip(pre.iter()) {
                    *o = self.activation.apply(*p);
                }
            }
        }
        Ok(&tape.acts[self.layers.len()])
    }

    /// Accumulates the gradient of `upstream · output` into `grads`, using the
    /// activations recorded by the most recent `forward_tape` on `tape`.
    /// When `input_grad` is given it receives the gradient with respect to the
    /// network input (overwritten, not accumulated).
    pub fn backward(
        &self,
        tape: &mut Tape,
        upstream: &[f64],
        grads: &mut Gradients,
        input_grad: Option<&mut [f64]>,
    ) -> Result<()> {
        if upstream.len() != self.output_dim() {
            return Err(NnError::DimMismatch {
                expected: self.output_dim(),
                got: upstream.len(),
            });
        }
        if !grads.matches(self) {
            return Err(NnError::ShapeMismatch);
        }
        let n = self.layers.len();
        tape.delta[n - 1].copy_from_slice(upstream);
        for i in (0..n).rev() {
            let layer = &self.layers[i];
            let g = &mut grads.layers[i];
            {
                let delta = &tape.delta[i];
                let input = &tape.acts[i];
                for (o, d) in delta.iter().enumerate() {
                    g.b[o] += d;
                    if *d != 0.0 {
                        let row = &mut g.w[o * layer.n_in..(o + 1) * layer.n_in];
                        for (gw, x) in row.iter_mut().zip(input) {
                            *gw += d * x;
                        }
                    }
                }
            }
            if i == 0 && input_grad.is_none() {
                break;
            }
            // delta of the previous layer (or the input gradient)
            let (lower, upper) = tape.delta.split_at_mut(i);
            let delta = &upper[0];
            let back: &mut [f64] = if i == 0 {
                tape.scratch.resize(layer.n_in, 0.0);
                &mut tape.scratch
            } else {
                &mut lower[i - 1]
            };
            back.iter_mut().for_each(|v| *v = 0.0);
            for (o, d) in delta.iter().enumerate() {
                if *d == 0.0 {
                    continue;
                }
                let row = &layer.w[o * layer.n_in..(o + 1) * layer.n_in];
                for (b, w) in back.iter_mut().zip(row) {
                    *b += d * w;
                }
            }
            if i > 0 {
                for (b, p) in back.iter_mut().zip(&tape.pre[i - 1]) {
                    *b *= self.activation.derivative(*p);
                }
            }
        }
        if let Some(out) = input_grad {
            if out.len() != self.input_dim() {
                return Err(NnError::DimMismatch {
                    expected: self.input_dim(),
                    got: out.len(),
                });
            }
            out.copy_from_slice(&tape.scratch[..self.input_dim()]);
        }
        Ok(())
    }

    pub fn save_checkpoint(&self, path: &Path, optimizer_steps: u64) -> Result<()> {
        let ckpt = Checkpoint::new(self, optimizer_steps);
        std::fs::write(path, serde_json::to_vec_pretty(&ckpt)?)?;
        Ok(())
    }

    pub fn load_checkpoint(path: &Path) -> Result<(Self, u64)> {
        let ckpt: Checkpoint = serde_json::from_slice(&std::fs::read(path)?)?;
        ckpt.into_params()
    }
}

/// Gradient of `upstream · f(x)` with respect to every weight and bias.
pub fn mlp_grad(p: &MlpParams, x: &[f64], upstream: &[f64]) -> Result<Gradients> {
    let mut tape = Tape::new(p);
    let mut grads = Gradients::zeros_like(p);
    p.forward_tape(x, &mut tape)?;
    p.backward(&mut tape, upstream, &mut grads, None)?;
    Ok(grads)
}

/// Per-layer scratch buffers reused across forward/backward calls.
#[derive(Debug, Clone, Default)]
pub struct Tape {
    acts: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
    delta: Vec<Vec<f64>>,
    scratch: Vec<f64>,
}

impl Tape {
    pub fn new(p: &MlpParams) -> Self {
        let mut t = Tape::default();
        t.ensure(p);
        t
    }

    fn ensure(&mut self, p: &MlpParams) {
        let ok = self.acts.len() == p.widths.len()
            && self.acts.iter().zip(&p.widths).all(|(a, w)| a.len() == *w);
        if ok {
            return;
        }
        self.acts = p.widths.iter().map(|&w| vec![0.0; w]).collect();
        self.pre = p.widths[1..].iter().map(|&w| vec![0.0; w]).collect();
        self.delta = p.widths[1..].iter().map(|&w| vec![0.0; w]).collect();
        self.scratch = vec![0.0; p.widths[0]];
    }

    pub fn output(&self) -> &[f64] {
        self.acts.last().map(|v| v.as_slice()).unwrap_or(&[])
    }
}

/// Parameter-shaped accumulator for gradients (and optimizer moments).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Gradients {
    pub layers: Vec<Dense>,
}

impl Gradients {
    pub fn zeros_like(p: &MlpParams) -> Self {
        Self {
            layers: p
                .layers
                .iter()
                .map(|l| Dense::zeros(l.n_in, l.n_out))
                .collect(),
        }
    }

    pub fn matches(&self, p: &MlpParams) -> bool {
        self.layers.len() == p.layers.len()
            && self.layers.iter().zip(&p.layers).all(|(a, b)| a.same_shape(b))
    }

    pub fn zero(&mut self) {
        for l in &mut self.layers {
            l.w.iter_mut().for_each(|v| *v = 0.0);
            l.b.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    pub fn scale(&mut self, s: f64) {
        for l in &mut self.layers {
            l.w.iter_mut().chain(l.b.iter_mut()).for_each(|v| *v *= s);
        }
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            for (x, y) in a.w.iter_mut().zip(&b.w) {
                *x += y;
            }
            for (x, y) in a.b.iter_mut().zip(&b.b) {
                *x += y;
            }
        }
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.w.iter().chain(&l.b).copied())
            .collect()
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.w.iter().chain(&l.b).all(|v| v.is_finite()))
    }
}

/// Adam with bias correction, optional coupled L2 weight decay, and an
/// exponential learning-rate schedule applied after every step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimState {
    pub m: Gradients,
    pub v: Gradients,
    pub step: u64,
    pub lr: f64,
    pub decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl OptimState {
    pub fn new(p: &MlpParams, lr: f64) -> Self {
        Self {
            m: Gradients::zeros_like(p),
            v: Gradients::zeros_like(p),
            step: 0,
            lr,
            decay: 1.0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }

    pub fn with_decay(mut self, decay: f64) -> Self {
        self.decay = decay;
        self
    }

    pub fn with_weight_decay(mut self, wd: f64) -> Self {
        self.weight_decay = wd;
        self
    }
}

/// One in-place Adam update of `p` using `grads`.
pub fn adam_step(state: &mut OptimState, p: &mut MlpParams, grads: &Gradients) -> Result<()> {
    if !grads.matches(p) || !state.m.matches(p) || !state.v.matches(p) {
        return Err(NnError::ShapeMismatch);
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    let lr = state.lr;
    let wd = state.weight_decay;
    let eps = state.eps;
    for (((layer, g), m), v) in p
        .layers
        .iter_mut()
        .zip(&grads.layers)
        .zip(&mut state.m.layers)
        .zip(&mut state.v.layers)
    {
        let params = layer.w.iter_mut().chain(layer.b.iter_mut());
        let gs = g.w.iter().chain(&g.b);
        let ms = m.w.iter_mut().chain(m.b.iter_mut());
        let vs = v.w.iter_mut().chain(v.b.iter_mut());
        for (((p, g), m), v) in params.zip(gs).zip(ms).zip(vs) {
            let g = g + wd * *p;
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    state.lr *= state.decay;
    Ok(())
}

/// Self-describing JSON checkpoint: widths, activation tag, flat parameters
/// and optimizer step count.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub widths: Vec<usize>,
    pub activation: Activation,
    pub params: Vec<f64>,
    pub optimizer_steps: u64,
}

impl Checkpoint {
    pub fn new(p: &MlpParams, optimizer_steps: u64) -> Self {
        Self {
            widths: p.widths.clone(),
            activation: p.activation,
            params: p.flatten(),
            optimizer_steps,
        }
    }

    pub fn into_params(self) -> Result<(MlpParams, u64)> {
        let mut p = MlpParams::init(&self.widths, InitOptions::new(self.activation, 0))?;
        p.unflatten(&self.params)
            .map_err(|_| NnError::CorruptCheckpoint)?;
        if !p.is_finite() {
            return Err(NnError::CorruptCheckpoint);
        }
        Ok((p, self.optimizer_steps))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(w: f64, b: f64) -> MlpParams {
        MlpParams::from_layers(
            vec![Dense {
                n_in: 1,
                n_out: 1,
                w: vec![w],
                b: vec![b],
            }],
            Activation::Identity,
        )
        .unwrap()
    }

    #[test]
    fn zero_output_layer_gives_zero_map() {
        let p = MlpParams::init(&[2, 1], InitOptions::new(Activation::Silu, 3).zero_output())
            .unwrap();
        for x in [[0.0, 0.0], [1.0, -4.0], [100.0, 3.5]] {
            assert_eq!(p.forward(&x).unwrap(), vec![0.0]);
        }
    }

    #[test]
    fn init_is_deterministic() {
        let a = MlpParams::init(&[3, 8, 3], InitOptions::new(Activation::Silu, 7)).unwrap();
        let b = MlpParams::init(&[3, 8, 3], InitOptions::new(Activation::Silu, 7)).unwrap();
        assert_eq!(a.flatten(), b.flatten());
        let c = MlpParams::init(&[3, 8, 3], InitOptions::new(Activation::Silu, 8)).unwrap();
        assert_ne!(a.flatten(), c.flatten());
    }

    #[test]
    fn single_width_is_rejected() {
        assert!(matches!(
            MlpParams::init(&[1], InitOptions::new(Activation::Silu, 0)),
            Err(NnError::EmptyArchitecture(_))
        ));
    }

    #[test]
    fn affine_forward() {
        assert_eq!(single(2.0, 1.0).forward(&[3.0]).unwrap(), vec![7.0]);
    }

    #[test]
    fn zero_params_zero_output() {
        let mut p = MlpParams::init(&[4, 5, 2], InitOptions::new(Activation::Silu, 1)).unwrap();
        let zeros = vec![0.0; p.n_params()];
        p.unflatten(&zeros).unwrap();
        assert_eq!(p.forward(&[1.0, 2.0, -3.0, 0.5]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn wrong_input_dim() {
        let p = MlpParams::init(&[3, 4, 2], InitOptions::new(Activation::Silu, 1)).unwrap();
        assert!(matches!(
            p.forward(&[1.0, 2.0]),
            Err(NnError::DimMismatch { expected: 3, got: 2 })
        ));
        assert!(mlp_grad(&p, &[1.0; 3], &[1.0]).is_err());
    }

    #[test]
    fn linear_gradient() {
        let g = mlp_grad(&single(2.0, 1.0), &[3.0], &[1.0]).unwrap();
        assert_eq!(g.layers[0].w, vec![3.0]);
        assert_eq!(g.layers[0].b, vec![1.0]);
    }

    #[test]
    fn zero_upstream_zero_gradient() {
        let p = MlpParams::init(&[3, 6, 2], InitOptions::new(Activation::Silu, 2)).unwrap();
        let g = mlp_grad(&p, &[0.3, -1.0, 2.0], &[0.0, 0.0]).unwrap();
        assert!(g.flatten().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn silu_derivative_matches_difference() {
        for x in [-5.0, -1.0, -0.1, 0.0, 0.3, 2.0, 7.0] {
            let h = 1e-6;
            let fd = (Activation::Silu.apply(x + h) - Activation::Silu.apply(x - h)) / (2.0 * h);
            assert!((fd - Activation::Silu.derivative(x)).abs() < 1e-8);
        }
    }

    #[test]
    fn adam_zero_gradient_keeps_params() {
        let mut p = MlpParams::init(&[2, 3, 1], InitOptions::new(Activation::Silu, 5)).unwrap();
        let before = p.flatten();
        let mut st = OptimState::new(&p, 0.01);
        let g = Gradients::zeros_like(&p);
        adam_step(&mut st, &mut p, &g).unwrap();
        assert_eq!(p.flatten(), before);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = single(0.5, 0.0);
        let mut st = OptimState::new(&p, 0.1);
        let mut g = Gradients::zeros_like(&p);
        g.layers[0].w[0] = 1.0;
        adam_step(&mut st, &mut p, &g).unwrap();
        // m_hat = 1, v_hat = 1 at t = 1 -> step = lr / (1 + eps)
        let expected = 0.5 - 0.1 / (1.0 + 1e-8);
        assert!((p.layers()[0].w[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn exponential_schedule() {
        let mut p = single(0.5, 0.0);
        let mut st = OptimState::new(&p, 0.1).with_decay(0.9999);
        let g = Gradients::zeros_like(&p);
        for _ in 0..10 {
            adam_step(&mut st, &mut p, &g).unwrap();
        }
        assert!((st.lr - 0.1 * 0.9999f64.powi(10)).abs() < 1e-15);
    }

    #[test]
    fn adam_shape_mismatch() {
        let mut p = MlpParams::init(&[2, 3, 1], InitOptions::new(Activation::Silu, 5)).unwrap();
        let other = MlpParams::init(&[2, 4, 1], InitOptions::new(Activation::Silu, 5)).unwrap();
        let mut st = OptimState::new(&p, 0.01);
        let g = Gradients::zeros_like(&other);
        assert!(matches!(
            adam_step(&mut st, &mut p, &g),
            Err(NnError::ShapeMismatch)
        ));
    }

    #[test]
    fn checkpoint_roundtrip() {
        let p = MlpParams::init(&[3, 5, 2], InitOptions::new(Activation::Silu, 11)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.json");
        p.save_checkpoint(&path, 42).unwrap();
        let (q, steps) = MlpParams::load_checkpoint(&path).unwrap();
        assert_eq!(steps, 42);
        assert_eq!(p, q);
    }
}
