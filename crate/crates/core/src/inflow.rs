//! Periodic inflow waveforms as truncated Fourier series.

use rand::Rng;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::path::Path;

/// Harmonic pairs kept in the standard feature vector.
pub const N_HARMONICS: usize = 9;
/// Length of the packed feature vector: mean, nine cosine, nine sine, period.
pub const FEATURE_LEN: usize = 2 * N_HARMONICS + 2;

#[derive(Debug, thiserror::Error)]
pub enum InflowError {
    #[error("need at least {needed} samples for {n_harm} harmonics, got {got}")]
    InsufficientSamples {
        needed: usize,
        got: usize,
        n_harm: usize,
    },
    #[error("at most {N_HARMONICS} harmonics are representable, asked for {0}")]
    TooManyHarmonics(usize),
    #[error("period must be positive and finite, got {0}")]
    BadPeriod(f64),
    #[error("sample times must lie in [0, T) and be distinct")]
    BadSampleTimes,
    #[error("feature vector must have {FEATURE_LEN} entries, got {0}")]
    FeatureLength(usize),
    #[error("waveform file: {0}")]
    Csv(#[from] csv::Error),
    #[error("waveform io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, InflowError>;

/// `q(t) = a0 + Σ aₙ cos(2πnt/T) + bₙ sin(2πnt/T)`, n = 1..9.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FourierInflow {
    pub period: f64,
    pub a0: f64,
    pub a: [f64; N_HARMONICS],
    pub b: [f64; N_HARMONICS],
}

impl FourierInflow {
    pub fn constant(period: f64, mean: f64) -> Self {
        Self {
            period,
            a0: mean,
            a: [0.0; N_HARMONICS],
            b: [0.0; N_HARMONICS],
        }
    }

    pub fn eval(&self, t: f64) -> f64 {
        let w = 2.0 * PI * t.rem_euclid(self.period) / self.period;
        let mut q = self.a0;
        for n in 0..N_HARMONICS {
            let arg = w * (n + 1) as f64;
            q += self.a[n] * arg.cos() + self.b[n] * arg.sin();
        }
        q
    }

    /// Time derivative of the series.
    pub fn eval_derivative(&self, t: f64) -> f64 {
        let w0 = 2.0 * PI / self.period;
        let w = w0 * t.rem_euclid(self.period);
        let mut dq = 0.0;
        for n in 0..N_HARMONICS {
            let k = (n + 1) as f64;
            let arg = w * k;
            dq += k * w0 * (-self.a[n] * arg.sin() + self.b[n] * arg.cos());
        }
        dq
    }

    /// Stroke volume per cycle, `a0·T`.
    pub fn cycle_volume(&self) -> f64 {
        self.a0 * self.period
    }

    /// Mean squared value of the oscillating part, `½ Σ (aₙ² + bₙ²)`.
    pub fn harmonic_power(&self) -> f64 {
        0.5 * self
            .a
            .iter()
            .zip(&self.b)
            .map(|(a, b)| a * a + b * b)
            .sum::<f64>()
    }

    /// `[a0, a1..a9, b1..b9, T]`.
    pub fn pack_features(&self) -> [f64; FEATURE_LEN] {
        let mut v = [0.0; FEATURE_LEN];
        v[0] = self.a0;
        v[1..=N_HARMONICS].copy_from_slice(&self.a);
        v[N_HARMONICS + 1..=2 * N_HARMONICS].copy_from_slice(&self.b);
        v[FEATURE_LEN - 1] = self.period;
        v
    }

    pub fn unpack_features(v: &[f64]) -> Result<Self> {
        if v.len() != FEATURE_LEN {
            return Err(InflowError::FeatureLength(v.len()));
        }
        let mut a = [0.0; N_HARMONICS];
        let mut b = [0.0; N_HARMONICS];
        a.copy_from_slice(&v[1..=N_HARMONICS]);
        b.copy_from_slice(&v[N_HARMONICS + 1..=2 * N_HARMONICS]);
        Ok(Self {
            period: v[FEATURE_LEN - 1],
            a0: v[0],
            a,
            b,
        })
    }

    /// Names of the packed feature slots, in packing order.
    pub fn feature_names() -> Vec<String> {
        let mut names = vec!["a0".to_string()];
        names.extend((1..=N_HARMONICS).map(|n| format!("a{n}")));
        names.extend((1..=N_HARMONICS).map(|n| format!("b{n}")));
        names.push("T".to_string());
        names
    }

    /// Uniform samples over one period (endpoint excluded).
    pub fn sample_uniform(&self, n: usize) -> Vec<(f64, f64)> {
        (0..n)
            .map(|i| {
                let t = self.period * i as f64 / n as f64;
                (t, self.eval(t))
            })
            .collect()
    }
}

/// Periodic trapezoidal fit of the first `n_harm` harmonics.
///
/// Samples must lie in `[0, T)`; the segment from the last sample back to the
/// first one (shifted by `T`) closes the period, which makes the rule exact for
/// band-limited signals on uniform grids below Nyquist.
pub fn fit_fourier(samples: &[(f64, f64)], period: f64, n_harm: usize) -> Result<FourierInflow> {
    if !(period.is_finite() && period > 0.0) {
        return Err(InflowError::BadPeriod(period));
    }
    if n_harm > N_HARMONICS {
        return Err(InflowError::TooManyHarmonics(n_harm));
    }
    let needed = (4 * n_harm).max(2);
    if samples.len() < needed {
        return Err(InflowError::InsufficientSamples {
            needed,
            got: samples.len(),
            n_harm,
        });
    }
    let mut pts = samples.to_vec();
    pts.sort_by(|x, y| x.0.total_cmp(&y.0));
    if pts.iter().any(|(t, q)| !(0.0..period).contains(t) || !q.is_finite())
        || pts.windows(2).any(|w| w[1].0 <= w[0].0)
    {
        return Err(InflowError::BadSampleTimes);
    }

    // trapezoid weights on the closed periodic grid
    let n = pts.len();
    let mut weights = vec![0.0; n];
    for i in 0..n {
        let next = if i + 1 < n {
            pts[i + 1].0
        } else {
            pts[0].0 + period
        };
        let h = next - pts[i].0;
        weights[i] += 0.5 * h;
        weights[(i + 1) % n] += 0.5 * h;
    }

    let integrate = |f: &dyn Fn(f64, f64) -> f64| -> f64 {
        pts.iter()
            .zip(&weights)
            .map(|(&(t, q), w)| w * f(t, q))
            .sum::<f64>()
    };

    let mut fit = FourierInflow::constant(period, integrate(&|_, q| q) / period);
    let w0 = 2.0 * PI / period;
    for k in 1..=n_harm {
        let kf = k as f64;
        fit.a[k - 1] = 2.0 / period * integrate(&|t, q| q * (kf * w0 * t).cos());
        fit.b[k - 1] = 2.0 / period * integrate(&|t, q| q * (kf * w0 * t).sin());
    }
    Ok(fit)
}

/// Shape parameters of the synthetic aortic inflow template: a systolic
/// ejection pulse, a dicrotic notch and a small diastolic wave.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WaveformShape {
    pub period: f64,
    /// Mean flow [cm³/s].
    pub mean: f64,
    /// Peak systolic flow above the diastolic baseline [cm³/s].
    pub systolic_peak: f64,
    /// Time of peak ejection as a fraction of the period.
    pub peak_time: f64,
    /// Width of the ejection pulse as a fraction of the period.
    pub systolic_width: f64,
    /// Depth of the dicrotic notch (backflow) [cm³/s].
    pub notch_depth: f64,
    pub notch_time: f64,
    /// Diastolic wave amplitude [cm³/s].
    pub diastolic_wave: f64,
}

impl Default for WaveformShape {
    fn default() -> Self {
        Self {
            period: 1.0,
            mean: 60.0,
            systolic_peak: 260.0,
            peak_time: 0.14,
            systolic_width: 0.06,
            notch_depth: 30.0,
            notch_time: 0.34,
            diastolic_wave: 12.0,
        }
    }
}

fn bump(x: f64, center: f64, width: f64) -> f64 {
    // wrapped gaussian on the unit circle of phases
    let mut d = (x - center).rem_euclid(1.0);
    if d > 0.5 {
        d -= 1.0;
    }
    (-0.5 * (d / width).powi(2)).exp()
}

impl WaveformShape {
    /// Raw (unshifted) template value at phase `s ∈ [0,1)`.
    fn template(&self, s: f64) -> f64 {
        self.systolic_peak * bump(s, self.peak_time, self.systolic_width)
            - self.notch_depth * bump(s, self.notch_time, 0.035)
            + self.diastolic_wave * bump(s, self.notch_time + 0.12, 0.08)
    }

    /// Samples one period on `n` uniform points, shifted so the cycle mean is
    /// exactly `mean` under the periodic trapezoid rule.
    pub fn sample(&self, n: usize) -> Vec<(f64, f64)> {
        let raw: Vec<f64> = (0..n).map(|i| self.template(i as f64 / n as f64)).collect();
        let shift = self.mean - raw.iter().sum::<f64>() / n as f64;
        raw.iter()
            .enumerate()
            .map(|(i, q)| (self.period * i as f64 / n as f64, q + shift))
            .collect()
    }

    /// Randomized physiologically-shaped variant around `self`.
    pub fn perturbed<R: Rng + ?Sized>(&self, rng: &mut R) -> Self {
        let mut u = |lo: f64, hi: f64| rng.random_range(lo..hi);
        Self {
            period: self.period * u(0.8, 1.2),
            mean: self.mean * u(0.75, 1.25),
            systolic_peak: self.systolic_peak * u(0.7, 1.3),
            peak_time: self.peak_time * u(0.85, 1.15),
            systolic_width: self.systolic_width * u(0.8, 1.25),
            notch_depth: self.notch_depth * u(0.3, 1.5),
            notch_time: self.notch_time * u(0.9, 1.1),
            diastolic_wave: self.diastolic_wave * u(0.0, 1.5),
        }
    }
}

/// A stand-in cohort of `count` reference inflow waveforms, fitted to nine
/// harmonics on 512-point grids.
pub fn reference_cohort<R: Rng + ?Sized>(rng: &mut R, count: usize) -> Vec<FourierInflow> {
    let base = WaveformShape::default();
    (0..count)
        .map(|_| {
            let shape = base.perturbed(rng);
            fit_fourier(&shape.sample(512), shape.period, N_HARMONICS)
                .expect("512 samples always cover nine harmonics")
        })
        .collect()
}

pub fn read_waveform_csv(path: &Path) -> Result<Vec<(f64, f64)>> {
    let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).from_path(path)?;
    let mut out = Vec::new();
    for rec in rdr.deserialize::<(f64, f64)>() {
        out.push(rec?);
    }
    Ok(out)
}

pub fn write_waveform_csv(path: &Path, samples: &[(f64, f64)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["t", "q"])?;
    for (t, q) in samples {
        w.write_record([t.to_string(), q.to_string()])?;
    }
    w.flush()?;
    Ok(())
}
