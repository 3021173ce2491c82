//! Point-cloud anatomy embedding: normalization and augmentation, one-hot
//! stenosis latents, a max-pooled point encoder and a deformation decoder
//! integrated with forward Euler.

use std::path::Path;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::circuit::StenosisLocation;
use crate::nn::{adam_step, Activation, Gradients, InitOptions, MlpParams, NnError, OptimState, Tape};

pub const LATENT_DIM: usize = 6;
pub const N_BRANCHES: usize = 3;
const EXTENT_EPS: f64 = 1e-12;

#[derive(Debug, thiserror::Error)]
pub enum AnatomyError {
    #[error("point cloud is empty")]
    EmptyCloud,
    #[error("template has zero extent")]
    DegenerateTemplate,
    #[error("asked for {wanted} points from a cloud of {have}")]
    TooFewPoints { wanted: usize, have: usize },
    #[error("value out of range: {0}")]
    OutOfRange(String),
    #[error("cloud has unlabeled points")]
    UnlabeledPoints,
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("non-finite coordinate at point {0}")]
    NonFinite(usize),
    #[error("bad hyperparameters: {0}")]
    BadHyper(String),
    #[error("training diverged at step {0}")]
    Diverged(usize),
    #[error("format: {0}")]
    Format(String),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, AnatomyError>;

pub type Point = [f64; 3];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    Aorta,
    LeftIliac,
    RightIliac,
}

impl Branch {
    pub const ALL: [Branch; N_BRANCHES] = [Branch::Aorta, Branch::LeftIliac, Branch::RightIliac];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Branch::Aorta => "aorta",
            Branch::LeftIliac => "left_iliac",
            Branch::RightIliac => "right_iliac",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|b| b.name() == s.trim())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointCloud {
    pub points: Vec<Point>,
    pub labels: Option<Vec<Branch>>,
}

impl PointCloud {
    pub fn new(points: Vec<Point>) -> Result<Self> {
        if points.is_empty() {
            return Err(AnatomyError::EmptyCloud);
        }
        if let Some(i) = points.iter().position(|p| p.iter().any(|c| !c.is_finite())) {
            return Err(AnatomyError::NonFinite(i));
        }
        Ok(Self { points, labels: None })
    }

    pub fn with_labels(mut self, labels: Vec<Branch>) -> Result<Self> {
        if labels.len() != self.points.len() {
            return Err(AnatomyError::OutOfRange(format!(
                "{} labels for {} points",
                labels.len(),
                self.points.len()
            )));
        }
        self.labels = Some(labels);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    fn subset(&self, idx: &[usize]) -> Self {
        Self {
            points: idx.iter().map(|&i| self.points[i]).collect(),
            labels: self.labels.as_ref().map(|l| idx.iter().map(|&i| l[i]).collect()),
        }
    }

    /// CSV with columns `x,y,z,branch` (branch may be empty).
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["x", "y", "z", "branch"])?;
        for (i, p) in self.points.iter().enumerate() {
            let label = self.labels.as_ref().map_or("", |l| l[i].name());
            w.write_record([p[0].to_string(), p[1].to_string(), p[2].to_string(), label.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().flexible(true).comment(Some(b'#')).from_path(path)?;
        let mut points = Vec::new();
        let mut labels = Vec::new();
        let mut all_labeled = true;
        for (i, rec) in rdr.records().enumerate() {
            let rec = rec?;
            if rec.len() < 3 {
                return Err(AnatomyError::Format(format!("row {i} has {} fields", rec.len())));
            }
            let mut p = [0.0; 3];
            for (k, c) in p.iter_mut().enumerate() {
                *c = rec[k]
                    .trim()
                    .parse()
                    .map_err(|e| AnatomyError::Format(format!("row {i}: {e}")))?;
            }
            points.push(p);
            match rec.get(3).filter(|s| !s.trim().is_empty()) {
                Some(s) => labels.push(Branch::parse(s).ok_or_else(|| AnatomyError::Format(format!("unknown branch {s:?}")))?),
                None => all_labeled = false,
            }
        }
        let cloud = Self::new(points)?;
        if all_labeled {
            cloud.with_labels(labels)
        } else {
            Ok(cloud)
        }
    }
}

// ---------------------------------------------------------------------------
// Normalization and augmentation
// ---------------------------------------------------------------------------

/// Center and scale taken from a template's bounding box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub center: Point,
    pub scale: f64,
}

impl Normalization {
    pub fn fit(template: &PointCloud) -> Result<Self> {
        if template.is_empty() {
            return Err(AnatomyError::EmptyCloud);
        }
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for p in &template.points {
            for k in 0..3 {
                lo[k] = lo[k].min(p[k]);
                hi[k] = hi[k].max(p[k]);
            }
        }
        let center = [0, 1, 2].map(|k| 0.5 * (lo[k] + hi[k]));
        let scale = (0..3).map(|k| 0.5 * (hi[k] - lo[k])).fold(0.0, f64::max);
        if !(scale > EXTENT_EPS) {
            return Err(AnatomyError::DegenerateTemplate);
        }
        Ok(Self { center, scale })
    }

    pub fn apply(&self, cloud: &PointCloud) -> PointCloud {
        PointCloud {
            points: cloud
                .points
                .iter()
                .map(|p| [0, 1, 2].map(|k| (p[k] - self.center[k]) / self.scale))
                .collect(),
            labels: cloud.labels.clone(),
        }
    }

    pub fn invert(&self, cloud: &PointCloud) -> PointCloud {
        PointCloud {
            points: cloud
                .points
                .iter()
                .map(|p| [0, 1, 2].map(|k| p[k] * self.scale + self.center[k]))
                .collect(),
            labels: cloud.labels.clone(),
        }
    }
}

/// `(cloud − c)/s` with `c`, `s` from the template bounding box.
pub fn normalize_points(template: &PointCloud, cloud: &PointCloud) -> Result<PointCloud> {
    Ok(Normalization::fit(template)?.apply(cloud))
}

/// `copies` independent uniform subsamples of `n` points.
pub fn subsample_augment<R: Rng + ?Sized>(
    cloud: &PointCloud,
    n: usize,
    copies: usize,
    replace: bool,
    rng: &mut R,
) -> Result<Vec<PointCloud>> {
    if n == 0 {
        return Err(AnatomyError::OutOfRange("subsample size 0".into()));
    }
    if !replace && n > cloud.len() {
        return Err(AnatomyError::TooFewPoints {
            wanted: n,
            have: cloud.len(),
        });
    }
    Ok((0..copies)
        .map(|_| {
            let idx: Vec<usize> = if replace {
                (0..n).map(|_| rng.random_range(0..cloud.len())).collect()
            } else {
                index::sample(rng, cloud.len(), n).into_vec()
            };
            cloud.subset(&idx)
        })
        .collect())
}

// ---------------------------------------------------------------------------
// Latents and features
// ---------------------------------------------------------------------------

/// `z = ψ·e_mode`.
pub fn onehot_latent(mode: usize, severity: f64) -> Result<[f64; LATENT_DIM]> {
    if mode >= LATENT_DIM {
        return Err(AnatomyError::OutOfRange(format!("mode {mode}")));
    }
    if !(0.0..=1.0).contains(&severity) {
        return Err(AnatomyError::OutOfRange(format!("severity {severity}")));
    }
    let mut z = [0.0; LATENT_DIM];
    z[mode] = severity;
    Ok(z)
}

/// First index of the largest entry.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Mode and severity of a latent (severity 0 for the zero vector).
pub fn mode_severity(z: &[f64]) -> (usize, f64) {
    let k = argmax(z);
    (k, z[k].max(0.0))
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Training,
    Evaluation,
}

/// `ψ̂·softmax(logits)` in training, `ψ̂·oneHot(argmax)` in evaluation.
pub fn latent_from_encoder(logits: &[f64], severity: f64, phase: Phase) -> [f64; LATENT_DIM] {
    let mut z = [0.0; LATENT_DIM];
    match phase {
        Phase::Training => {
            for (zi, p) in z.iter_mut().zip(softmax(logits)) {
                *zi = severity * p;
            }
        }
        Phase::Evaluation => z[argmax(logits)] = severity,
    }
    z
}

/// For `ℓ = 0..F−1`, `ω = 2^ℓ π`: `[sin ωx, sin ωy, sin ωz, cos ωx, cos ωy, cos ωz]`.
pub fn fourier_features(p: &Point, f: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(6 * f);
    fourier_into(p, f, &mut out);
    out
}

fn fourier_into(p: &Point, f: usize, out: &mut Vec<f64>) {
    let mut w = std::f64::consts::PI;
    for _ in 0..f {
        for c in p {
            out.push((w * c).sin());
        }
        for c in p {
            out.push((w * c).cos());
        }
        w *= 2.0;
    }
}

/// Adds `(∂γ/∂p)ᵀ g` to `acc`.
fn fourier_vjp(p: &Point, f: usize, g: &[f64], acc: &mut Point) {
    let mut w = std::f64::consts::PI;
    for l in 0..f {
        let base = 6 * l;
        for c in 0..3 {
            acc[c] += g[base + c] * w * (w * p[c]).cos() - g[base + 3 + c] * w * (w * p[c]).sin();
        }
        w *= 2.0;
    }
}

// ---------------------------------------------------------------------------
// Chamfer
// ---------------------------------------------------------------------------

fn dist(a: &Point, b: &Point) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

/// For each point of `a`, index of and distance to its nearest point in `b`
/// (first index on ties).
pub fn nearest(a: &[Point], b: &[Point]) -> Vec<(usize, f64)> {
    a.iter()
        .map(|p| {
            let mut best = (0, f64::INFINITY);
            for (j, q) in b.iter().enumerate() {
                let d2 = (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2);
                if d2 < best.1 {
                    best = (j, d2);
                }
            }
            (best.0, best.1.sqrt())
        })
        .collect()
}

/// Symmetric Chamfer distance: mean nearest distance from `a` to `b` plus
/// mean nearest distance from `b` to `a`.
pub fn chamfer(a: &PointCloud, b: &PointCloud) -> Result<f64> {
    chamfer_points(&a.points, &b.points)
}

pub fn chamfer_points(a: &[Point], b: &[Point]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(AnatomyError::EmptyCloud);
    }
    let ab: f64 = nearest(a, b).iter().map(|x| x.1).sum::<f64>() / a.len() as f64;
    let ba: f64 = nearest(b, a).iter().map(|x| x.1).sum::<f64>() / b.len() as f64;
    Ok(ab + ba)
}

/// Chamfer value and its gradient with respect to the points of `a`.
fn chamfer_grad(a: &[Point], b: &[Point]) -> (f64, Vec<Point>) {
    let mut g = vec![[0.0; 3]; a.len()];
    let na = a.len() as f64;
    let nb = b.len() as f64;
    let mut loss = 0.0;
    let push = |i: usize, j: usize, d: f64, w: f64, g: &mut Vec<Point>| {
        if d > 1e-12 {
            for k in 0..3 {
                g[i][k] += w * (a[i][k] - b[j][k]) / d;
            }
        }
    };
    for (i, (j, d)) in nearest(a, b).into_iter().enumerate() {
        loss += d / na;
        push(i, j, d, 1.0 / na, &mut g);
    }
    for (j, (i, d)) in nearest(b, a).into_iter().enumerate() {
        loss += d / nb;
        push(i, j, d, 1.0 / nb, &mut g);
    }
    (loss, g)
}

// ---------------------------------------------------------------------------
// Procedural corpus
// ---------------------------------------------------------------------------

/// Tube bifurcation: an aorta along +z ending at the origin and two iliac
/// tubes leaving it downward at ±`spread` from the axis. Lesions are
/// Gaussian radial necks centred at a quarter, half and three quarters of
/// each iliac (A–C left, D–F right).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TubeShape {
    pub aorta_length: f64,
    pub aorta_radius: f64,
    pub iliac_length: f64,
    pub iliac_radius: f64,
    /// Half angle between the iliacs, radians.
    pub spread: f64,
    /// Standard deviation of the neck along the axis.
    pub neck_width: f64,
    pub n_points: usize,
    /// Seed of the surface parametrization shared by all geometries.
    pub seed: u64,
}

impl Default for TubeShape {
    fn default() -> Self {
        Self {
            aorta_length: 6.0,
            aorta_radius: 1.0,
            iliac_length: 5.0,
            iliac_radius: 0.6,
            spread: 0.45,
            neck_width: 0.35,
            n_points: 4096,
            seed: 2024,
        }
    }
}

struct Segment {
    a: Point,
    b: Point,
}

impl TubeShape {
    fn centerlines(&self) -> [Segment; N_BRANCHES] {
        let (s, c) = self.spread.sin_cos();
        let l = self.iliac_length;
        [
            Segment {
                a: [0.0, 0.0, self.aorta_length],
                b: [0.0, 0.0, 0.0],
            },
            Segment {
                a: [0.0; 3],
                b: [-l * s, 0.0, -l * c],
            },
            Segment {
                a: [0.0; 3],
                b: [l * s, 0.0, -l * c],
            },
        ]
    }

    /// Axial position of a lesion along its iliac.
    pub fn station(&self, loc: StenosisLocation) -> (Branch, f64) {
        let i = loc.index();
        let branch = if i < 3 { Branch::LeftIliac } else { Branch::RightIliac };
        (branch, self.iliac_length * 0.25 * (1 + i % 3) as f64)
    }

    /// Surface points; the same `(branch, s, θ)` draws are used for every
    /// lesion, so geometries correspond point by point.
    pub fn generate(&self, lesion: Option<(StenosisLocation, f64)>) -> Result<PointCloud> {
        if let Some((_, sev)) = lesion {
            if !(0.0..=1.0).contains(&sev) {
                return Err(AnatomyError::OutOfRange(format!("severity {sev}")));
            }
        }
        if self.n_points < 3 {
            return Err(AnatomyError::OutOfRange("n_points below 3".into()));
        }
        let lines = self.centerlines();
        let area_a = self.aorta_radius * self.aorta_length;
        let area_i = self.iliac_radius * self.iliac_length;
        let total = area_a + 2.0 * area_i;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut points = Vec::with_capacity(self.n_points);
        let mut labels = Vec::with_capacity(self.n_points);
        for _ in 0..self.n_points {
            let u: f64 = rng.random::<f64>() * total;
            let branch = if u < area_a {
                Branch::Aorta
            } else if u < area_a + area_i {
                Branch::LeftIliac
            } else {
                Branch::RightIliac
            };
            let s: f64 = rng.random();
            let theta: f64 = rng.random::<f64>() * std::f64::consts::TAU;
            let seg = &lines[branch.index()];
            let (r0, len) = match branch {
                Branch::Aorta => (self.aorta_radius, self.aorta_length),
                _ => (self.iliac_radius, self.iliac_length),
            };
            let mut r = r0;
            if let Some((loc, sev)) = lesion {
                let (lb, pos) = self.station(loc);
                if lb == branch {
                    let x = s * len - pos;
                    r *= 1.0 - sev * (-0.5 * (x / self.neck_width).powi(2)).exp();
                }
            }
            let axis = [0, 1, 2].map(|k| seg.b[k] - seg.a[k]);
            let n = (axis[0] * axis[0] + axis[1] * axis[1] + axis[2] * axis[2]).sqrt();
            let t = axis.map(|v| v / n);
            // e1 in the bifurcation plane, e2 = y
            let e1 = [t[2], 0.0, -t[0]];
            let e2 = [0.0, 1.0, 0.0];
            let (st, ct) = theta.sin_cos();
            points.push([0, 1, 2].map(|k| seg.a[k] + s * axis[k] + r * (ct * e1[k] + st * e2[k])));
            labels.push(branch);
        }
        PointCloud::new(points)?.with_labels(labels)
    }

    /// Nearest-centerline branch label of every point (raw coordinates).
    pub fn label(&self, points: &[Point]) -> Vec<Branch> {
        let lines = self.centerlines();
        points
            .iter()
            .map(|p| {
                let d: Vec<f64> = lines.iter().map(|l| segment_distance(p, l)).collect();
                Branch::ALL[argmin(&d)]
            })
            .collect()
    }
}

fn argmin(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x < v[best] {
            best = i;
        }
    }
    best
}

fn segment_distance(p: &Point, s: &Segment) -> f64 {
    let ab = [0, 1, 2].map(|k| s.b[k] - s.a[k]);
    let ap = [0, 1, 2].map(|k| p[k] - s.a[k]);
    let l2 = ab.iter().map(|v| v * v).sum::<f64>();
    let t = if l2 > 0.0 {
        ((0..3).map(|k| ab[k] * ap[k]).sum::<f64>() / l2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    dist(p, &[0, 1, 2].map(|k| s.a[k] + t * ab[k]))
}

/// One geometry of the labelled corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledGeometry {
    pub cloud: PointCloud,
    pub mode: usize,
    pub severity: f64,
}

/// Default corpus severities.
pub const CORPUS_SEVERITIES: [f64; 8] = [0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9];

/// Template plus every location × severity, normalized with the template
/// and labelled by nearest centerline.
pub fn procedural_corpus(shape: &TubeShape, severities: &[f64]) -> Result<(PointCloud, Vec<LabeledGeometry>)> {
    let raw_template = shape.generate(None)?;
    let norm = Normalization::fit(&raw_template)?;
    let relabel = |c: PointCloud| -> Result<PointCloud> {
        let labels = shape.label(&c.points);
        norm.apply(&c).with_labels(labels)
    };
    let template = relabel(raw_template)?;
    let mut out = Vec::with_capacity(LATENT_DIM * severities.len());
    for loc in StenosisLocation::ALL {
        for &sev in severities {
            out.push(LabeledGeometry {
                cloud: relabel(shape.generate(Some((loc, sev)))?)?,
                mode: loc.index(),
                severity: sev,
            });
        }
    }
    Ok((template, out))
}

// ---------------------------------------------------------------------------
// Embedding model
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmbedHyper {
    /// Fourier frequency bands of the decoder input.
    pub f: usize,
    /// Euler steps of the decoder.
    pub j: usize,
    pub lambda_sev: f64,
    pub lambda_mode: f64,
    /// Fourier bands appended to the encoder's point coordinates (0: raw
    /// coordinates only).
    pub encoder_bands: usize,
    pub encoder_hidden: Vec<usize>,
    /// Pointwise feature width before pooling.
    pub features: usize,
    pub head_hidden: usize,
    pub decoder_hidden: Vec<usize>,
    pub lr: f64,
    pub lr_decay: f64,
    pub steps: usize,
    /// Clouds per optimizer step.
    pub batch: usize,
    /// Points per cloud (subsample size).
    pub n_points: usize,
    /// Subsamples per training geometry.
    pub copies: usize,
    /// Template points decoded per training cloud.
    pub decoder_points: usize,
    pub eval_every: usize,
    pub seed: u64,
}

impl Default for EmbedHyper {
    fn default() -> Self {
        Self {
            f: 6,
            j: 8,
            lambda_sev: 1.0,
            lambda_mode: 0.1,
            encoder_bands: 3,
            encoder_hidden: vec![64, 64],
            features: 64,
            head_hidden: 64,
            decoder_hidden: vec![64, 64],
            lr: 3e-3,
            lr_decay: 0.9995,
            steps: 2500,
            batch: 4,
            n_points: 1024,
            copies: 50,
            decoder_points: 128,
            eval_every: 100,
            seed: 0,
        }
    }
}

impl EmbedHyper {
    fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(AnatomyError::BadHyper(m.to_string()));
        if self.f == 0 || self.j == 0 {
            return bad("F and J must be at least 1");
        }
        if self.features == 0 || self.head_hidden == 0 || self.batch == 0 || self.n_points == 0 || self.copies == 0 || self.decoder_points == 0 {
            return bad("sizes must be positive");
        }
        if !(self.lr > 0.0) || !(self.lambda_sev >= 0.0) || !(self.lambda_mode >= 0.0) {
            return bad("lr must be positive and loss weights non-negative");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingModel {
    /// Pointwise feature net `R³ → R^features`.
    pub encoder: MlpParams,
    pub mode_head: MlpParams,
    pub severity_head: MlpParams,
    /// `[γ(s), s, z] → velocity`.
    pub decoder: MlpParams,
    pub hyper: EmbedHyper,
    /// Where the template came from.
    pub template_ref: String,
    pub normalization: Option<Normalization>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Encoding {
    pub logits: Vec<f64>,
    pub severity: f64,
}

impl EmbeddingModel {
    pub fn new(hyper: EmbedHyper) -> Result<Self> {
        hyper.validate()?;
        let mut enc = vec![encoder_input_dim(hyper.encoder_bands)];
        enc.extend(&hyper.encoder_hidden);
        enc.push(hyper.features);
        let pooled = N_BRANCHES * hyper.features;
        let mut dec = vec![decoder_input_dim(hyper.f)];
        dec.extend(&hyper.decoder_hidden);
        dec.push(3);
        let s = hyper.seed;
        Ok(Self {
            encoder: MlpParams::init(&enc, InitOptions::new(Activation::Silu, s))?,
            mode_head: MlpParams::init(&[pooled, hyper.head_hidden, LATENT_DIM], InitOptions::new(Activation::Silu, s + 1))?,
            severity_head: MlpParams::init(&[pooled, hyper.head_hidden, 1], InitOptions::new(Activation::Silu, s + 2))?,
            decoder: MlpParams::init(&dec, InitOptions::new(Activation::Silu, s + 3).zero_output())?,
            hyper,
            template_ref: String::new(),
            normalization: None,
        })
    }

    fn pool(&self, cloud: &PointCloud, tape: &mut Tape) -> Result<(Vec<f64>, Vec<Option<usize>>)> {
        let labels = cloud.labels.as_ref().ok_or(AnatomyError::UnlabeledPoints)?;
        let k = self.hyper.features;
        let mut pooled = vec![f64::NEG_INFINITY; N_BRANCHES * k];
        let mut owner = vec![None; N_BRANCHES * k];
        let mut input = Vec::with_capacity(self.encoder.input_dim());
        for (i, (p, b)) in cloud.points.iter().zip(labels).enumerate() {
            encoder_input(p, self.hyper.encoder_bands, &mut input);
            let h = self.encoder.forward_tape(&input, tape)?;
            let base = b.index() * k;
            for (j, v) in h.iter().enumerate() {
                if *v > pooled[base + j] {
                    pooled[base + j] = *v;
                    owner[base + j] = Some(i);
                }
            }
        }
        // an empty branch pools to zero
        for v in pooled.iter_mut() {
            if !v.is_finite() {
                *v = 0.0;
            }
        }
        Ok((pooled, owner))
    }

    pub fn encode(&self, cloud: &PointCloud) -> Result<Encoding> {
        let mut tape = Tape::new(&self.encoder);
        let (pooled, _) = self.pool(cloud, &mut tape)?;
        let logits = self.mode_head.forward(&pooled)?;
        let s = self.severity_head.forward(&pooled)?[0];
        Ok(Encoding {
            logits,
            severity: sigmoid(s),
        })
    }

    /// Latent of a cloud in the given phase.
    pub fn embed(&self, cloud: &PointCloud, phase: Phase) -> Result<[f64; LATENT_DIM]> {
        let e = self.encode(cloud)?;
        Ok(latent_from_encoder(&e.logits, e.severity, phase))
    }

    /// Forward-Euler deformation of every template point.
    pub fn decode_deform(&self, template: &PointCloud, z: &[f64]) -> Result<PointCloud> {
        let mut tape = Tape::new(&self.decoder);
        let mut input = Vec::with_capacity(self.decoder.input_dim());
        let points = template
            .points
            .iter()
            .map(|p| self.deform_point(*p, z, &mut tape, &mut input))
            .collect::<Result<Vec<_>>>()?;
        Ok(PointCloud {
            points,
            labels: template.labels.clone(),
        })
    }

    fn deform_point(&self, p: Point, z: &[f64], tape: &mut Tape, input: &mut Vec<f64>) -> Result<Point> {
        let h = 1.0 / self.hyper.j as f64;
        let mut s = p;
        for _ in 0..self.hyper.j {
            decoder_input(&s, z, self.hyper.f, input);
            let v = self.decoder.forward_tape(input, tape)?;
            for k in 0..3 {
                s[k] += h * v[k];
            }
        }
        Ok(s)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let m: Self = serde_json::from_slice(&std::fs::read(path)?)?;
        let pooled = N_BRANCHES * m.hyper.features;
        let ok = m.encoder.input_dim() == encoder_input_dim(m.hyper.encoder_bands)
            && m.encoder.output_dim() == m.hyper.features
            && m.mode_head.input_dim() == pooled
            && m.mode_head.output_dim() == LATENT_DIM
            && m.severity_head.input_dim() == pooled
            && m.severity_head.output_dim() == 1
            && m.decoder.input_dim() == decoder_input_dim(m.hyper.f)
            && m.decoder.output_dim() == 3
            && m.hyper.j >= 1;
        if !ok {
            return Err(AnatomyError::Nn(NnError::CorruptCheckpoint));
        }
        Ok(m)
    }
}

pub fn encoder_input_dim(bands: usize) -> usize {
    3 + 6 * bands
}

fn encoder_input(p: &Point, bands: usize, out: &mut Vec<f64>) {
    out.clear();
    out.extend_from_slice(p);
    fourier_into(p, bands, out);
}

pub fn decoder_input_dim(f: usize) -> usize {
    6 * f + 3 + LATENT_DIM
}

fn decoder_input(s: &Point, z: &[f64], f: usize, out: &mut Vec<f64>) {
    out.clear();
    fourier_into(s, f, out);
    out.extend_from_slice(s);
    out.extend_from_slice(z);
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossParts {
    pub chamfer: f64,
    pub severity: f64,
    pub mode: f64,
}

impl LossParts {
    pub fn total(&self, h: &EmbedHyper) -> f64 {
        self.chamfer + h.lambda_sev * self.severity + h.lambda_mode * self.mode
    }
}

struct Grads {
    encoder: Gradients,
    mode: Gradients,
    severity: Gradients,
    decoder: Gradients,
}

impl Grads {
    fn new(m: &EmbeddingModel) -> Self {
        Self {
            encoder: Gradients::zeros_like(&m.encoder),
            mode: Gradients::zeros_like(&m.mode_head),
            severity: Gradients::zeros_like(&m.severity_head),
            decoder: Gradients::zeros_like(&m.decoder),
        }
    }

    fn zero(&mut self) {
        self.encoder.zero();
        self.mode.zero();
        self.severity.zero();
        self.decoder.zero();
    }

    fn scale(&mut self, s: f64) {
        self.encoder.scale(s);
        self.mode.scale(s);
        self.severity.scale(s);
        self.decoder.scale(s);
    }

    fn is_finite(&self) -> bool {
        self.encoder.is_finite() && self.mode.is_finite() && self.severity.is_finite() && self.decoder.is_finite()
    }
}

/// Loss of one (cloud, template subset) pair; accumulates gradients when
/// `grads` is given.
fn sample_loss(
    m: &EmbeddingModel,
    cloud: &PointCloud,
    mode: usize,
    severity: f64,
    template: &[Point],
    grads: Option<&mut Grads>,
) -> Result<LossParts> {
    let h = &m.hyper;
    let mut etape = Tape::new(&m.encoder);
    let (pooled, owner) = m.pool(cloud, &mut etape)?;
    let mut mtape = Tape::new(&m.mode_head);
    let logits = m.mode_head.forward_tape(&pooled, &mut mtape)?.to_vec();
    let mut stape = Tape::new(&m.severity_head);
    let s_raw = m.severity_head.forward_tape(&pooled, &mut stape)?[0];
    let psi = sigmoid(s_raw);
    let p = softmax(&logits);
    let z: Vec<f64> = p.iter().map(|v| psi * v).collect();

    let mut dtape = Tape::new(&m.decoder);
    let mut input = Vec::new();
    let decoded: Vec<Point> = template
        .iter()
        .map(|t| m.deform_point(*t, &z, &mut dtape, &mut input))
        .collect::<Result<_>>()?;
    let (cd, g_pts) = chamfer_grad(&decoded, &cloud.points);
    let parts = LossParts {
        chamfer: cd,
        severity: (psi - severity).powi(2),
        mode: -p[mode].max(1e-300).ln(),
    };
    let Some(g) = grads else {
        return Ok(parts);
    };

    // decoder: reverse through the Euler steps, collecting dL/dz
    let steps = h.j;
    let step = 1.0 / steps as f64;
    let n_in = m.decoder.input_dim();
    let zoff = 6 * h.f + 3;
    let mut tapes: Vec<Tape> = (0..steps).map(|_| Tape::new(&m.decoder)).collect();
    let mut states = vec![[0.0; 3]; steps];
    let mut gin = vec![0.0; n_in];
    let mut dz = [0.0; LATENT_DIM];
    for (t, gp) in template.iter().zip(&g_pts) {
        if gp.iter().all(|v| *v == 0.0) {
            continue;
        }
        let mut s = *t;
        for (jj, tape) in tapes.iter_mut().enumerate() {
            states[jj] = s;
            decoder_input(&s, &z, h.f, &mut input);
            let v = m.decoder.forward_tape(&input, tape)?;
            for k in 0..3 {
                s[k] += step * v[k];
            }
        }
        let mut gs = *gp;
        for jj in (0..steps).rev() {
            let up = gs.map(|v| step * v);
            m.decoder.backward(&mut tapes[jj], &up, &mut g.decoder, Some(&mut gin))?;
            let mut acc = [0.0; 3];
            fourier_vjp(&states[jj], h.f, &gin[..6 * h.f], &mut acc);
            for k in 0..3 {
                gs[k] += acc[k] + gin[6 * h.f + k];
            }
            for (d, gi) in dz.iter_mut().zip(&gin[zoff..]) {
                *d += gi;
            }
        }
    }

    // heads
    let dpsi_z: f64 = dz.iter().zip(&p).map(|(a, b)| a * b).sum();
    let dp: Vec<f64> = dz.iter().map(|v| psi * v).collect();
    let pdp: f64 = dp.iter().zip(&p).map(|(a, b)| a * b).sum();
    let dlogits: Vec<f64> = (0..LATENT_DIM)
        .map(|k| {
            let onehot = if k == mode { 1.0 } else { 0.0 };
            p[k] * (dp[k] - pdp) + h.lambda_mode * (p[k] - onehot)
        })
        .collect();
    let dpsi = dpsi_z + h.lambda_sev * 2.0 * (psi - severity);
    let ds_raw = dpsi * psi * (1.0 - psi);
    let mut dpool_m = vec![0.0; m.mode_head.input_dim()];
    let mut dpool_s = vec![0.0; m.severity_head.input_dim()];
    m.mode_head.backward(&mut mtape, &dlogits, &mut g.mode, Some(&mut dpool_m))?;
    m.severity_head.backward(&mut stape, &[ds_raw], &mut g.severity, Some(&mut dpool_s))?;

    // encoder: only pooling winners receive gradient
    let k = h.features;
    let mut upstream: std::collections::BTreeMap<usize, Vec<f64>> = Default::default();
    for (slot, own) in owner.iter().enumerate() {
        if let Some(i) = own {
            let d = dpool_m[slot] + dpool_s[slot];
            upstream.entry(*i).or_insert_with(|| vec![0.0; k])[slot % k] += d;
        }
    }
    for (i, up) in upstream {
        encoder_input(&cloud.points[i], h.encoder_bands, &mut input);
        m.encoder.forward_tape(&input, &mut etape)?;
        m.encoder.backward(&mut etape, &up, &mut g.encoder, None)?;
    }
    Ok(parts)
}

/// Best-validation result of one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedLog {
    pub steps: Vec<usize>,
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    pub best_step: usize,
    pub best_val: f64,
}

/// Held-out performance on labelled geometries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedEval {
    pub mode_true: Vec<usize>,
    pub mode_pred: Vec<usize>,
    pub severity_true: Vec<f64>,
    pub severity_pred: Vec<f64>,
    pub chamfer: Vec<f64>,
    /// Chamfer between two independent subsamples of each truth geometry.
    pub noise_floor: Vec<f64>,
}

impl EmbedEval {
    pub fn mode_accuracy(&self) -> f64 {
        let hit = self.mode_true.iter().zip(&self.mode_pred).filter(|(a, b)| a == b).count();
        hit as f64 / self.mode_true.len().max(1) as f64
    }

    pub fn severity_mae(&self) -> f64 {
        let s: f64 = self.severity_true.iter().zip(&self.severity_pred).map(|(a, b)| (a - b).abs()).sum();
        s / self.severity_true.len().max(1) as f64
    }

    pub fn mean_chamfer(&self) -> f64 {
        self.chamfer.iter().sum::<f64>() / self.chamfer.len().max(1) as f64
    }

    pub fn mean_noise_floor(&self) -> f64 {
        self.noise_floor.iter().sum::<f64>() / self.noise_floor.len().max(1) as f64
    }

    pub fn extend(&mut self, other: EmbedEval) {
        self.mode_true.extend(other.mode_true);
        self.mode_pred.extend(other.mode_pred);
        self.severity_true.extend(other.severity_true);
        self.severity_pred.extend(other.severity_pred);
        self.chamfer.extend(other.chamfer);
        self.noise_floor.extend(other.noise_floor);
    }
}

fn val_loss(m: &EmbeddingModel, val: &[(PointCloud, usize, f64)], template: &[Point]) -> Result<f64> {
    let mut total = 0.0;
    for (c, mode, sev) in val {
        total += sample_loss(m, c, *mode, *sev, template, None)?.total(&m.hyper);
    }
    Ok(total / val.len().max(1) as f64)
}

/// Trains encoder and decoder jointly on `train`; the validation geometries
/// select the best checkpoint.
pub fn train_embedding(
    train: &[LabeledGeometry],
    val: &[LabeledGeometry],
    template: &PointCloud,
    hyper: &EmbedHyper,
) -> Result<(EmbeddingModel, EmbedLog)> {
    if train.is_empty() {
        return Err(AnatomyError::EmptyDataset);
    }
    hyper.validate()?;
    if template.labels.is_none() || train.iter().chain(val).any(|g| g.cloud.labels.is_none()) {
        return Err(AnatomyError::UnlabeledPoints);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed);
    let replace = |c: &PointCloud| c.len() < hyper.n_points;
    let mut clouds = Vec::with_capacity(train.len() * hyper.copies);
    for g in train {
        for c in subsample_augment(&g.cloud, hyper.n_points, hyper.copies, replace(&g.cloud), &mut rng)? {
            clouds.push((c, g.mode, g.severity));
        }
    }
    let mut val_set = Vec::with_capacity(val.len());
    for g in val {
        let c = subsample_augment(&g.cloud, hyper.n_points, 1, replace(&g.cloud), &mut rng)?.remove(0);
        val_set.push((c, g.mode, g.severity));
    }
    let n_dec = hyper.decoder_points.min(template.len());
    let val_template: Vec<Point> = index::sample(&mut rng, template.len(), n_dec)
        .into_iter()
        .map(|i| template.points[i])
        .collect();

    let mut model = EmbeddingModel::new(hyper.clone())?;
    let mut opt_e = OptimState::new(&model.encoder, hyper.lr).with_decay(hyper.lr_decay);
    let mut opt_m = OptimState::new(&model.mode_head, hyper.lr).with_decay(hyper.lr_decay);
    let mut opt_s = OptimState::new(&model.severity_head, hyper.lr).with_decay(hyper.lr_decay);
    let mut opt_d = OptimState::new(&model.decoder, hyper.lr).with_decay(hyper.lr_decay);
    let mut g = Grads::new(&model);
    let mut log = EmbedLog {
        steps: vec![],
        train_loss: vec![],
        val_loss: vec![],
        best_step: 0,
        best_val: f64::INFINITY,
    };
    let mut best = model.clone();
    let mut running = 0.0;
    let mut count = 0usize;
    for step in 1..=hyper.steps {
        g.zero();
        for _ in 0..hyper.batch {
            let (c, mode, sev) = &clouds[rng.random_range(0..clouds.len())];
            let sub: Vec<Point> = index::sample(&mut rng, template.len(), n_dec)
                .into_iter()
                .map(|i| template.points[i])
                .collect();
            let parts = sample_loss(&model, c, *mode, *sev, &sub, Some(&mut g))?;
            running += parts.total(hyper);
            count += 1;
        }
        g.scale(1.0 / hyper.batch as f64);
        if !g.is_finite() {
            return Err(AnatomyError::Diverged(step));
        }
        adam_step(&mut opt_e, &mut model.encoder, &g.encoder)?;
        adam_step(&mut opt_m, &mut model.mode_head, &g.mode)?;
        adam_step(&mut opt_s, &mut model.severity_head, &g.severity)?;
        adam_step(&mut opt_d, &mut model.decoder, &g.decoder)?;
        if step % hyper.eval_every == 0 || step == hyper.steps {
            let v = if val_set.is_empty() {
                running / count.max(1) as f64
            } else {
                val_loss(&model, &val_set, &val_template)?
            };
            if !v.is_finite() {
                return Err(AnatomyError::Diverged(step));
            }
            log.steps.push(step);
            log.train_loss.push(running / count.max(1) as f64);
            log.val_loss.push(v);
            running = 0.0;
            count = 0;
            if v < log.best_val {
                log.best_val = v;
                log.best_step = step;
                best = model.clone();
            }
        }
    }
    Ok((best, log))
}

/// Encodes each geometry from `repeats` fresh subsamples (logits and
/// severity averaged), decodes the template with the evaluation-phase
/// latent and compares against the truth.
pub fn evaluate_embedding(
    model: &EmbeddingModel,
    template: &PointCloud,
    geoms: &[LabeledGeometry],
    repeats: usize,
    seed: u64,
) -> Result<EmbedEval> {
    let n = model.hyper.n_points;
    let repeats = repeats.max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = EmbedEval {
        mode_true: vec![],
        mode_pred: vec![],
        severity_true: vec![],
        severity_pred: vec![],
        chamfer: vec![],
        noise_floor: vec![],
    };
    for g in geoms {
        let replace = g.cloud.len() < n;
        let subs = subsample_augment(&g.cloud, n, 3 * repeats, replace, &mut rng)?;
        let mut logits = vec![0.0; LATENT_DIM];
        let mut sev = 0.0;
        for c in &subs[..repeats] {
            let e = model.encode(c)?;
            for (a, b) in logits.iter_mut().zip(&e.logits) {
                *a += b / repeats as f64;
            }
            sev += e.severity / repeats as f64;
        }
        let z = latent_from_encoder(&logits, sev, Phase::Evaluation);
        let decoded = model.decode_deform(template, &z)?;
        let mut cd = 0.0;
        let mut floor = 0.0;
        let dsubs = subsample_augment(&decoded, n.min(decoded.len()), repeats, decoded.len() < n, &mut rng)?;
        for r in 0..repeats {
            cd += chamfer(&dsubs[r], &subs[repeats + r])? / repeats as f64;
            floor += chamfer(&subs[repeats + r], &subs[2 * repeats + r])? / repeats as f64;
        }
        out.mode_true.push(g.mode);
        out.mode_pred.push(argmax(&logits));
        out.severity_true.push(g.severity);
        out.severity_pred.push(sev);
        out.chamfer.push(cd);
        out.noise_floor.push(floor);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn onehot_examples() {
        assert_eq!(onehot_latent(1, 0.667).unwrap(), [0.0, 0.667, 0.0, 0.0, 0.0, 0.0]);
        assert_eq!(onehot_latent(0, 0.0).unwrap(), [0.0; 6]);
        assert!(onehot_latent(0, 1.2).is_err());
        assert!(onehot_latent(6, 0.5).is_err());
    }

    #[test]
    fn latent_phases() {
        let z = latent_from_encoder(&[0.3; 6], 0.6, Phase::Training);
        assert!(z.iter().all(|v| (v - 0.1).abs() < 1e-15));
        let z = latent_from_encoder(&[0.3; 6], 0.6, Phase::Evaluation);
        assert_eq!(z, [0.6, 0.0, 0.0, 0.0, 0.0, 0.0]);
        assert_eq!(latent_from_encoder(&[1.0, 2.0, 0.0, 0.0, 0.0, 0.0], 0.0, Phase::Training), [0.0; 6]);
    }

    #[test]
    fn fourier_examples() {
        let f = fourier_features(&[0.0; 3], 3);
        for l in 0..3 {
            assert!(f[6 * l..6 * l + 3].iter().all(|v| *v == 0.0));
            assert!(f[6 * l + 3..6 * l + 6].iter().all(|v| *v == 1.0));
        }
        let f = fourier_features(&[1.0, 0.0, 0.0], 1);
        assert!(f[0].abs() < 1e-15);
        assert!((f[3] + 1.0).abs() < 1e-15);
        for n in 1..=8 {
            assert_eq!(fourier_features(&[0.1, 0.2, 0.3], n).len(), 6 * n);
        }
    }

    #[test]
    fn chamfer_examples() {
        let a = PointCloud::new(vec![[0.0; 3]]).unwrap();
        let b = PointCloud::new(vec![[1.0, 0.0, 0.0]]).unwrap();
        assert_eq!(chamfer(&a, &b).unwrap(), 2.0);
        assert_eq!(chamfer(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn normalization_examples() {
        let t = PointCloud::new(vec![[1.0, 2.0, 3.0], [3.0, 3.0, 4.0]]).unwrap();
        let n = normalize_points(&t, &t).unwrap();
        assert_eq!(n.points, vec![[-1.0, -0.5, -0.5], [1.0, 0.5, 0.5]]);
        let single = PointCloud::new(vec![[1.0, 1.0, 1.0]]).unwrap();
        assert!(matches!(normalize_points(&single, &single), Err(AnatomyError::DegenerateTemplate)));
    }

    #[test]
    fn zero_decoder_is_identity() {
        let m = EmbeddingModel::new(EmbedHyper::default()).unwrap();
        let t = PointCloud::new(vec![[0.1, -0.2, 0.3], [0.5, 0.5, -0.9]]).unwrap();
        assert_eq!(m.decode_deform(&t, &[0.0, 0.5, 0.0, 0.0, 0.0, 0.0]).unwrap().points, t.points);
    }

    #[test]
    fn checkpoint_roundtrip() {
        let m = EmbeddingModel::new(EmbedHyper::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.json");
        m.save(&p).unwrap();
        let back = EmbeddingModel::load(&p).unwrap();
        assert_eq!(back.encoder.flatten(), m.encoder.flatten());
        assert_eq!(back.decoder.flatten(), m.decoder.flatten());
    }

    #[test]
    fn corpus_labels_follow_construction() {
        let shape = TubeShape {
            n_points: 600,
            ..Default::default()
        };
        let (template, geoms) = procedural_corpus(&shape, &[0.5]).unwrap();
        assert_eq!(geoms.len(), 6);
        assert!(template.points.iter().flatten().all(|c| c.abs() <= 1.0 + 1e-9));
        let built = shape.generate(None).unwrap().labels.unwrap();
        let agree = built.iter().zip(template.labels.as_ref().unwrap()).filter(|(a, b)| a == b).count();
        assert!(agree as f64 > 0.9 * built.len() as f64);
    }
    #[test]
    fn loss_gradient_matches_finite_differences() {
        let shape = TubeShape {
            n_points: 200,
            ..Default::default()
        };
        let (template, geoms) = procedural_corpus(&shape, &[0.6]).unwrap();
        let hyper = EmbedHyper {
            f: 2,
            j: 3,
            encoder_hidden: vec![8],
            features: 6,
            head_hidden: 5,
            decoder_hidden: vec![8],
            seed: 4,
            ..Default::default()
        };
        let mut m = EmbeddingModel::new(hyper).unwrap();
        // give the decoder a nonzero output layer so every path carries gradient
        let mut flat = m.decoder.flatten();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for v in flat.iter_mut() {
            *v += 0.1 * (rng.random::<f64>() - 0.5);
        }
        m.decoder.unflatten(&flat).unwrap();
        let g = &geoms[4];
        let sub: Vec<Point> = template.points[..40].to_vec();
        let mut grads = Grads::new(&m);
        sample_loss(&m, &g.cloud, g.mode, g.severity, &sub, Some(&mut grads)).unwrap();
        let loss = |m: &EmbeddingModel| sample_loss(m, &g.cloud, g.mode, g.severity, &sub, None).unwrap().total(&m.hyper);
        type Pick = fn(&mut EmbeddingModel) -> &mut MlpParams;
        let nets: [(Pick, &Gradients); 4] = [
            (|m| &mut m.encoder, &grads.encoder),
            (|m| &mut m.mode_head, &grads.mode),
            (|m| &mut m.severity_head, &grads.severity),
            (|m| &mut m.decoder, &grads.decoder),
        ];
        for (pick, an) in nets {
            let an = an.flatten();
            let base = pick(&mut m).flatten();
            let mut worst: f64 = 0.0;
            for idx in (0..base.len()).step_by(7) {
                let eps = 1e-6;
                let mut mp = m.clone();
                let mut w = base.clone();
                w[idx] += eps;
                pick(&mut mp).unflatten(&w).unwrap();
                let up = loss(&mp);
                w[idx] -= 2.0 * eps;
                pick(&mut mp).unflatten(&w).unwrap();
                let dn = loss(&mp);
                let fd = (up - dn) / (2.0 * eps);
                worst = worst.max((fd - an[idx]).abs() / (1e-6 + fd.abs().max(an[idx].abs())));
            }
            assert!(worst < 1e-4, "relative gradient error {worst}");
        }
    }
}
