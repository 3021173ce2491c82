//! Dataset generation, noise, standardization, splitting, reconstruction
//! metrics and hyperparameter search.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cfm::{sample_posterior, CfmError, CfmHyper, CfmModel, PriorBox, SampleOptions, Standardizer, TrainLog};
use crate::circuit::{build_network, summarize, CircuitError, ClinicalTargets, SimSettings, Simulator, StenosisLocation, TimeTraces};
use crate::desk::{self, BcParam};
use crate::inflow::{fit_fourier, FourierInflow, InflowError, FEATURE_LEN, N_HARMONICS};

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("nominal value {index} is not positive ({value})")]
    NonPositiveNominal { index: usize, value: f64 },
    #[error("noise std for column {0} is negative or non-finite")]
    NegativeStd(usize),
    #[error("noise spec covers {spec} columns, block has {block}")]
    MissingColumnSpec { spec: usize, block: usize },
    #[error("column {0} has zero variance")]
    ZeroVariance(usize),
    #[error("invalid split: {0}")]
    InvalidFractions(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("unknown column {0}")]
    UnknownColumn(String),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("dataset invalid: {0}")]
    Invalid(String),
    #[error("simulation of row {row} failed: {source}")]
    Simulation { row: usize, source: CircuitError },
    #[error(transparent)]
    Circuit(#[from] CircuitError),
    #[error(transparent)]
    Cfm(#[from] CfmError),
    #[error(transparent)]
    Inflow(#[from] InflowError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, PipelineError>;

type Block = Vec<Vec<f64>>;

// ---------------------------------------------------------------------------
// Dataset table
// ---------------------------------------------------------------------------

/// Latents stored once per geometry; rows point at their geometry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentBlock {
    pub names: Vec<String>,
    /// Geometry index of every row.
    pub group: Vec<usize>,
    /// One latent vector per geometry.
    pub values: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub seed: u64,
    pub config_hash: String,
    #[serde(default)]
    pub units: BTreeMap<String, String>,
    /// Prior box per column where one exists.
    #[serde(default)]
    pub bounds: BTreeMap<String, (f64, f64)>,
    /// Boundary-condition parameterization used to generate B, if any.
    #[serde(default)]
    pub param: Option<BcParam>,
}

/// `{B, C, Z}`: boundary conditions, clinical targets and inflow features,
/// and geometry latents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetTable {
    pub b_names: Vec<String>,
    pub b: Block,
    pub c_names: Vec<String>,
    pub c: Block,
    pub z: Option<LatentBlock>,
    pub meta: DatasetMeta,
}

#[derive(Debug, Serialize, Deserialize)]
struct Sidecar {
    b_names: Vec<String>,
    c_names: Vec<String>,
    z_names: Vec<String>,
    n_rows: usize,
    n_groups: usize,
    data_file: String,
    latent_file: Option<String>,
    #[serde(flatten)]
    meta: DatasetMeta,
}

impl DatasetTable {
    pub fn n_rows(&self) -> usize {
        self.b.len()
    }

    pub fn z_names(&self) -> Vec<String> {
        self.z.as_ref().map(|z| z.names.clone()).unwrap_or_default()
    }

    pub fn columns(&self) -> Vec<String> {
        let mut v = self.b_names.clone();
        v.extend(self.c_names.iter().cloned());
        v.extend(self.z_names());
        v
    }

    /// Geometry index of every row (all zero without latents).
    pub fn groups(&self) -> Vec<usize> {
        match &self.z {
            Some(z) => z.group.clone(),
            None => vec![0; self.n_rows()],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n_rows();
        if self.c.len() != n {
            return Err(PipelineError::Invalid(format!("B has {n} rows, C has {}", self.c.len())));
        }
        let check = |rows: &Block, width: usize, what: &str| -> Result<()> {
            for (i, r) in rows.iter().enumerate() {
                if r.len() != width {
                    return Err(PipelineError::Invalid(format!("{what} row {i} has {} entries, expected {width}", r.len())));
                }
                if r.iter().any(|v| !v.is_finite()) {
                    return Err(PipelineError::Invalid(format!("{what} row {i} holds a non-finite value")));
                }
            }
            Ok(())
        };
        check(&self.b, self.b_names.len(), "B")?;
        check(&self.c, self.c_names.len(), "C")?;
        if let Some(z) = &self.z {
            if z.group.len() != n {
                return Err(PipelineError::Invalid(format!("Z maps {} rows, table has {n}", z.group.len())));
            }
            check(&z.values, z.names.len(), "Z")?;
            if let Some(g) = z.group.iter().find(|g| **g >= z.values.len()) {
                return Err(PipelineError::Invalid(format!("row points at missing geometry {g}")));
            }
        }
        let names = self.columns();
        let unique: HashSet<_> = names.iter().collect();
        if unique.len() != names.len() {
            return Err(PipelineError::Invalid("duplicate column names".into()));
        }
        Ok(())
    }

    fn locate(&self, name: &str) -> Result<(u8, usize)> {
        if let Some(j) = self.b_names.iter().position(|n| n == name) {
            return Ok((0, j));
        }
        if let Some(j) = self.c_names.iter().position(|n| n == name) {
            return Ok((1, j));
        }
        if let Some(z) = &self.z {
            if let Some(j) = z.names.iter().position(|n| n == name) {
                return Ok((2, j));
            }
        }
        Err(PipelineError::UnknownColumn(name.to_string()))
    }

    fn get(&self, row: usize, at: (u8, usize)) -> f64 {
        match at.0 {
            0 => self.b[row][at.1],
            1 => self.c[row][at.1],
            _ => {
                let z = self.z.as_ref().expect("located in Z");
                z.values[z.group[row]][at.1]
            }
        }
    }

    /// Selected columns of the given rows (latents joined through the group key).
    pub fn select(&self, rows: &[usize], names: &[String]) -> Result<Block> {
        let at: Vec<_> = names.iter().map(|n| self.locate(n)).collect::<Result<_>>()?;
        Ok(rows.iter().map(|&r| at.iter().map(|&a| self.get(r, a)).collect()).collect())
    }

    pub fn column(&self, name: &str) -> Result<Vec<f64>> {
        let at = self.locate(name)?;
        Ok((0..self.n_rows()).map(|r| self.get(r, at)).collect())
    }

    /// All named values of one row.
    pub fn row_values(&self, row: usize) -> HashMap<String, f64> {
        let mut m = HashMap::new();
        for (n, v) in self.b_names.iter().zip(&self.b[row]) {
            m.insert(n.clone(), *v);
        }
        for (n, v) in self.c_names.iter().zip(&self.c[row]) {
            m.insert(n.clone(), *v);
        }
        if let Some(z) = &self.z {
            for (n, v) in z.names.iter().zip(&z.values[z.group[row]]) {
                m.insert(n.clone(), *v);
            }
        }
        m
    }

    /// Prior box for the named columns: recorded bounds where present,
    /// otherwise the observed range.
    pub fn bounds_for(&self, names: &[String]) -> Result<PriorBox> {
        let mut lo = Vec::with_capacity(names.len());
        let mut hi = Vec::with_capacity(names.len());
        for n in names {
            let (l, h) = match self.meta.bounds.get(n) {
                Some(b) => *b,
                None => {
                    let col = self.column(n)?;
                    let l = col.iter().copied().fold(f64::INFINITY, f64::min);
                    let h = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    if h > l {
                        (l, h)
                    } else {
                        (l - 1.0, h + 1.0)
                    }
                }
            };
            lo.push(l);
            hi.push(h);
        }
        Ok(PriorBox::new(lo, hi)?)
    }

    fn stamped_writer(&self, path: &Path) -> Result<csv::Writer<std::fs::File>> {
        use std::io::Write;
        let mut f = std::fs::File::create(path)?;
        writeln!(f, "# config_hash={} seed={}", self.meta.config_hash, self.meta.seed)?;
        Ok(csv::Writer::from_writer(f))
    }

    /// Writes `<stem>.csv`, `<stem>_latents.csv` (when present) and the JSON
    /// sidecar `<stem>.json`; returns the sidecar path.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<PathBuf> {
        self.validate()?;
        std::fs::create_dir_all(dir)?;
        let data_file = format!("{stem}.csv");
        let mut w = self.stamped_writer(&dir.join(&data_file))?;
        let mut header = vec!["group".to_string()];
        header.extend(self.b_names.iter().cloned());
        header.extend(self.c_names.iter().cloned());
        w.write_record(&header)?;
        let groups = self.groups();
        for (i, g) in groups.iter().enumerate().take(self.n_rows()) {
            let mut rec = vec![g.to_string()];
            rec.extend(self.b[i].iter().map(|v| v.to_string()));
            rec.extend(self.c[i].iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
        w.flush()?;
        let latent_file = match &self.z {
            Some(z) => {
                let name = format!("{stem}_latents.csv");
                let mut w = self.stamped_writer(&dir.join(&name))?;
                let mut header = vec!["group".to_string()];
                header.extend(z.names.iter().cloned());
                w.write_record(&header)?;
                for (g, v) in z.values.iter().enumerate() {
                    let mut rec = vec![g.to_string()];
                    rec.extend(v.iter().map(|x| x.to_string()));
                    w.write_record(&rec)?;
                }
                w.flush()?;
                Some(name)
            }
            None => None,
        };
        let side = Sidecar {
            b_names: self.b_names.clone(),
            c_names: self.c_names.clone(),
            z_names: self.z_names(),
            n_rows: self.n_rows(),
            n_groups: self.z.as_ref().map_or(1, |z| z.values.len()),
            data_file,
            latent_file,
            meta: self.meta.clone(),
        };
        let path = dir.join(format!("{stem}.json"));
        std::fs::write(&path, serde_json::to_vec_pretty(&side)?)?;
        Ok(path)
    }

    /// Reads a table from its JSON sidecar.
    pub fn read(sidecar: &Path) -> Result<Self> {
        let side: Sidecar = serde_json::from_slice(&std::fs::read(sidecar)?)?;
        let dir = sidecar.parent().unwrap_or(Path::new("."));
        let nb = side.b_names.len();
        let nc = side.c_names.len();
        let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).from_path(dir.join(&side.data_file))?;
        let (mut b, mut c, mut group) = (Vec::new(), Vec::new(), Vec::new());
        for rec in rdr.records() {
            let rec = rec?;
            if rec.len() != 1 + nb + nc {
                return Err(PipelineError::Invalid(format!("row with {} fields, expected {}", rec.len(), 1 + nb + nc)));
            }
            let parse = |s: &str| s.trim().parse::<f64>().map_err(|e| PipelineError::Invalid(format!("{s:?}: {e}")));
            group.push(rec[0].trim().parse::<usize>().map_err(|e| PipelineError::Invalid(e.to_string()))?);
            b.push((1..=nb).map(|j| parse(&rec[j])).collect::<Result<Vec<_>>>()?);
            c.push((1 + nb..1 + nb + nc).map(|j| parse(&rec[j])).collect::<Result<Vec<_>>>()?);
        }
        let z = match &side.latent_file {
            Some(f) => {
                let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).from_path(dir.join(f))?;
                let mut values = vec![Vec::new(); side.n_groups];
                for rec in rdr.records() {
                    let rec = rec?;
                    let g: usize = rec[0].trim().parse().map_err(|e: std::num::ParseIntError| PipelineError::Invalid(e.to_string()))?;
                    if g >= values.len() {
                        values.resize(g + 1, Vec::new());
                    }
                    values[g] = (1..rec.len())
                        .map(|j| rec[j].trim().parse::<f64>().map_err(|e| PipelineError::Invalid(e.to_string())))
                        .collect::<Result<Vec<_>>>()?;
                }
                Some(LatentBlock {
                    names: side.z_names.clone(),
                    group,
                    values,
                })
            }
            None => None,
        };
        let t = Self {
            b_names: side.b_names,
            b,
            c_names: side.c_names,
            c,
            z,
            meta: side.meta,
        };
        t.validate()?;
        if t.n_rows() != side.n_rows {
            return Err(PipelineError::Invalid(format!("sidecar says {} rows, file has {}", side.n_rows, t.n_rows())));
        }
        Ok(t)
    }
}

// ---------------------------------------------------------------------------
// Prior, noise, standardization
// ---------------------------------------------------------------------------

/// `n` rows, each column uniform on `[(1 − r)·v, (1 + r)·v]`.
pub fn sample_prior(nominal: &[f64], rel_range: f64, n: usize, seed: u64) -> Result<Block> {
    if let Some((index, &value)) = nominal.iter().enumerate().find(|(_, v)| !(**v > 0.0 && v.is_finite())) {
        return Err(PipelineError::NonPositiveNominal { index, value });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n).map(|_| prior_row(nominal, rel_range, &mut rng)).collect())
}

fn prior_row<R: Rng + ?Sized>(nominal: &[f64], r: f64, rng: &mut R) -> Vec<f64> {
    nominal
        .iter()
        .map(|v| v * (1.0 + r * (2.0 * rng.random::<f64>() - 1.0)))
        .collect()
}

/// Per-column relative noise level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    rel_std: Vec<f64>,
    pub seed: u64,
}

impl NoiseSpec {
    pub fn new(rel_std: Vec<f64>, seed: u64) -> Result<Self> {
        if let Some(j) = rel_std.iter().position(|s| !(s.is_finite() && *s >= 0.0)) {
            return Err(PipelineError::NegativeStd(j));
        }
        Ok(Self { rel_std, seed })
    }

    pub fn rel_std(&self) -> &[f64] {
        &self.rel_std
    }
}

fn noisy_row<R: Rng + ?Sized>(row: &[f64], rel: &[f64], rng: &mut R) -> Vec<f64> {
    row.iter()
        .zip(rel)
        .map(|(v, s)| {
            let e: f64 = rng.sample(StandardNormal);
            v + s * v.abs() * e
        })
        .collect()
}

/// Adds `N(0, (rel·|v|)²)` noise to every entry.
pub fn add_noise(block: &[Vec<f64>], spec: &NoiseSpec) -> Result<Block> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    block
        .iter()
        .map(|row| {
            if row.len() != spec.rel_std.len() {
                return Err(PipelineError::MissingColumnSpec {
                    spec: spec.rel_std.len(),
                    block: row.len(),
                });
            }
            Ok(noisy_row(row, &spec.rel_std, &mut rng))
        })
        .collect()
}

pub fn standardize(block: &[Vec<f64>]) -> Result<(Block, Standardizer)> {
    let s = Standardizer::fit(block).map_err(|e| match e {
        CfmError::ZeroVariance(j) => PipelineError::ZeroVariance(j),
        CfmError::EmptyDataset => PipelineError::EmptyDataset,
        other => PipelineError::Cfm(other),
    })?;
    Ok((block.iter().map(|r| s.forward(r)).collect(), s))
}

pub fn destandardize(block: &[Vec<f64>], s: &Standardizer) -> Block {
    block.iter().map(|r| s.inverse(r)).collect()
}

// ---------------------------------------------------------------------------
// Splits
// ---------------------------------------------------------------------------

/// Seeded shuffle of `0..n` cut into consecutive parts of the given fractions.
pub fn split_fractions(n: usize, fractions: &[f64], seed: u64) -> Result<Vec<Vec<usize>>> {
    if fractions.is_empty() || fractions.iter().any(|f| !(*f > 0.0 && *f <= 1.0)) {
        return Err(PipelineError::InvalidFractions(format!("{fractions:?}")));
    }
    let total: f64 = fractions.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(PipelineError::InvalidFractions(format!("{fractions:?} sums to {total}")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut parts = Vec::with_capacity(fractions.len());
    let mut start = 0;
    for (k, f) in fractions.iter().enumerate() {
        let end = if k + 1 == fractions.len() {
            n
        } else {
            (start + (f * n as f64).round() as usize).min(n)
        };
        parts.push(idx[start..end].to_vec());
        start = end;
    }
    Ok(parts)
}

/// `k` (train, validation) pairs over rows.
pub fn kfold(n: usize, k: usize, seed: u64) -> Result<Vec<(Vec<usize>, Vec<usize>)>> {
    group_kfold(&(0..n).collect::<Vec<_>>(), k, seed)
}

/// `k` (train, validation) pairs where all rows of a group land on the same
/// side of every split.
pub fn group_kfold(groups: &[usize], k: usize, seed: u64) -> Result<Vec<(Vec<usize>, Vec<usize>)>> {
    let mut uniq: Vec<usize> = groups.iter().copied().collect::<HashSet<_>>().into_iter().collect();
    uniq.sort_unstable();
    if k < 2 || k > uniq.len() {
        return Err(PipelineError::InvalidFractions(format!("{k} folds over {} groups", uniq.len())));
    }
    uniq.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let fold_of: HashMap<usize, usize> = uniq.iter().enumerate().map(|(i, g)| (*g, i % k)).collect();
    Ok((0..k)
        .map(|f| {
            let (val, train): (Vec<usize>, Vec<usize>) = (0..groups.len()).partition(|&r| fold_of[&groups[r]] == f);
            (train, val)
        })
        .collect())
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let m = v.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (m, 0.0);
    }
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1) as f64;
    (m, var.sqrt())
}

// ---------------------------------------------------------------------------
// Reconstruction metrics
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetMetrics {
    pub name: String,
    pub abs_mean: f64,
    pub abs_std: f64,
    pub sign_mean: f64,
    pub sign_std: f64,
    /// Mean over test points of `|ε_sign|`.
    pub abs_sign_mean: f64,
    pub rel_abs_mean: Option<f64>,
    pub rel_abs_std: Option<f64>,
    pub rel_sign_mean: Option<f64>,
    pub rel_sign_std: Option<f64>,
    pub rel_abs_sign_mean: Option<f64>,
    /// Test points left out of the relative metrics because their truth is 0.
    pub rel_missing: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub n_test: usize,
    pub n_s: usize,
    pub targets: Vec<TargetMetrics>,
    #[serde(default)]
    pub config_hash: String,
    #[serde(default)]
    pub seed: u64,
}

impl MetricsReport {
    pub fn target(&self, name: &str) -> Option<&TargetMetrics> {
        self.targets.iter().find(|t| t.name == name)
    }
}

/// Absolute and signed errors: for every test point the inner mean over its
/// `N_s` predictions, then mean and sample std over test points. Relative
/// variants divide each difference by `|truth|` (absolute) or `truth`
/// (signed).
pub fn reconstruction_metrics(predicted: &[Vec<Vec<f64>>], truth: &[Vec<f64>], names: &[String]) -> Result<MetricsReport> {
    let n_test = truth.len();
    if n_test == 0 || predicted.len() != n_test {
        return Err(PipelineError::ShapeMismatch(format!("{} predictions for {n_test} truths", predicted.len())));
    }
    let m = names.len();
    let n_s = predicted[0].len();
    for (p, t) in predicted.iter().zip(truth) {
        if t.len() != m || p.len() != n_s || n_s == 0 || p.iter().any(|s| s.len() != m) {
            return Err(PipelineError::ShapeMismatch("inconsistent prediction block".into()));
        }
    }
    let mut targets = Vec::with_capacity(m);
    for (k, name) in names.iter().enumerate() {
        let (mut abs, mut sign, mut rabs, mut rsign) = (vec![], vec![], vec![], vec![]);
        for (p, t) in predicted.iter().zip(truth) {
            let y = t[k];
            let diffs: Vec<f64> = p.iter().map(|s| s[k] - y).collect();
            abs.push(diffs.iter().map(|d| d.abs()).sum::<f64>() / n_s as f64);
            sign.push(diffs.iter().sum::<f64>() / n_s as f64);
            if y != 0.0 {
                rabs.push(diffs.iter().map(|d| d.abs() / y.abs()).sum::<f64>() / n_s as f64);
                rsign.push(diffs.iter().map(|d| d / y).sum::<f64>() / n_s as f64);
            }
        }
        let (abs_mean, abs_std) = mean_std(&abs);
        let (sign_mean, sign_std) = mean_std(&sign);
        let abs_sign_mean = sign.iter().map(|v| v.abs()).sum::<f64>() / n_test as f64;
        let have_rel = !rabs.is_empty();
        let opt = |v: f64| have_rel.then_some(v);
        let (ram, ras) = mean_std(&rabs);
        let (rsm, rss) = mean_std(&rsign);
        let rasm = rsign.iter().map(|v| v.abs()).sum::<f64>() / rsign.len().max(1) as f64;
        targets.push(TargetMetrics {
            name: name.clone(),
            abs_mean,
            abs_std,
            sign_mean,
            sign_std,
            abs_sign_mean,
            rel_abs_mean: opt(ram),
            rel_abs_std: opt(ras),
            rel_sign_mean: opt(rsm),
            rel_sign_std: opt(rss),
            rel_abs_sign_mean: opt(rasm),
            rel_missing: n_test - rabs.len(),
        });
    }
    Ok(MetricsReport {
        n_test,
        n_s,
        targets,
        config_hash: String::new(),
        seed: 0,
    })
}

// ---------------------------------------------------------------------------
// Random search
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchSpace {
    pub layers: (usize, usize),
    pub neurons: (usize, usize),
    pub lr: (f64, f64),
    pub batch: Vec<usize>,
    pub weight_decay: Option<(f64, f64)>,
}

impl SearchSpace {
    /// Ranges from the hyperparameter table, with the batch set depending on
    /// the dataset size.
    pub fn for_rows(n_rows: usize) -> Self {
        Self {
            layers: (1, 4),
            neurons: (1, 128),
            lr: (1e-4, 1e-2),
            batch: if n_rows <= 100 { vec![8, 16, 32, 64] } else { vec![16, 32, 64, 128] },
            weight_decay: Some((1e-6, 1e-4)),
        }
    }

    pub fn contains(&self, p: &TrialParams) -> bool {
        let n = p.hidden.len();
        (self.layers.0..=self.layers.1).contains(&n)
            && p.hidden.iter().all(|w| (self.neurons.0..=self.neurons.1).contains(w))
            && (self.lr.0..=self.lr.1).contains(&p.lr)
            && self.batch.contains(&p.batch)
            && match self.weight_decay {
                Some((lo, hi)) => (lo..=hi).contains(&p.weight_decay),
                None => p.weight_decay == 0.0,
            }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialParams {
    pub hidden: Vec<usize>,
    pub lr: f64,
    pub batch: usize,
    pub weight_decay: f64,
}

impl TrialParams {
    pub fn apply(&self, base: &CfmHyper) -> CfmHyper {
        CfmHyper {
            hidden: self.hidden.clone(),
            lr: self.lr,
            batch: self.batch,
            weight_decay: self.weight_decay,
            ..base.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchResult {
    pub best: TrialParams,
    pub best_loss: f64,
    pub best_index: usize,
    pub trials: Vec<(TrialParams, f64)>,
}

fn log_uniform<R: Rng + ?Sized>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    if hi <= lo {
        return lo;
    }
    (lo.ln() + rng.random::<f64>() * (hi.ln() - lo.ln())).exp().clamp(lo, hi)
}

/// Bounded random search; one width is drawn per trial and shared by all
/// hidden layers. Non-finite losses rank last.
pub fn random_search<F>(space: &SearchSpace, n_trials: usize, mut eval: F, seed: u64) -> Result<SearchResult>
where
    F: FnMut(&TrialParams) -> f64,
{
    if n_trials == 0 {
        return Err(PipelineError::Invalid("n_trials must be at least 1".into()));
    }
    if space.batch.is_empty() || space.layers.0 == 0 || space.layers.0 > space.layers.1 || space.neurons.0 == 0 || space.neurons.0 > space.neurons.1 {
        return Err(PipelineError::Invalid(format!("bad search space {space:?}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut trials = Vec::with_capacity(n_trials);
    for _ in 0..n_trials {
        let layers = rng.random_range(space.layers.0..=space.layers.1);
        let width = rng.random_range(space.neurons.0..=space.neurons.1);
        let p = TrialParams {
            hidden: vec![width; layers],
            lr: log_uniform(&mut rng, space.lr),
            batch: space.batch[rng.random_range(0..space.batch.len())],
            weight_decay: space.weight_decay.map_or(0.0, |b| log_uniform(&mut rng, b)),
        };
        let loss = eval(&p);
        trials.push((p, if loss.is_nan() { f64::INFINITY } else { loss }));
    }
    let best_index = (0..trials.len())
        .min_by(|&a, &b| trials[a].1.total_cmp(&trials[b].1))
        .expect("at least one trial");
    Ok(SearchResult {
        best: trials[best_index].0.clone(),
        best_loss: trials[best_index].1,
        best_index,
        trials,
    })
}

// ---------------------------------------------------------------------------
// Simulation from named values
// ---------------------------------------------------------------------------

pub const OBS_NAMES: [&str; 4] = ["P_dia", "P_sys", "Q_left", "Q_right"];
pub const DEFAULT_NOISE: [f64; 4] = [0.05, 0.05, 0.10, 0.10];

pub fn latent_names() -> Vec<String> {
    StenosisLocation::ALL.iter().map(|l| format!("z_{l}")).collect()
}

/// Runs the desk network for a row of named values: boundary conditions
/// (required), inflow features (all twenty, optional) and lesion latents
/// (optional; the largest slot gives location and severity).
pub fn simulate_values(param: BcParam, values: &HashMap<String, f64>, settings: &SimSettings) -> std::result::Result<ClinicalTargets, CircuitError> {
    summarize(&traces_for_values(param, values, settings)?)
}

/// Final-cycle traces for a row of named values (see [`simulate_values`]).
pub fn traces_for_values(param: BcParam, values: &HashMap<String, f64>, settings: &SimSettings) -> std::result::Result<TimeTraces, CircuitError> {
    let get = |n: &String| {
        values
            .get(n)
            .copied()
            .ok_or_else(|| CircuitError::BadSettings(format!("missing value {n}")))
    };
    let x: Vec<f64> = param.names().iter().map(get).collect::<std::result::Result<_, _>>()?;
    let lesion = {
        let z: Option<Vec<f64>> = latent_names().iter().map(|n| values.get(n).copied()).collect();
        z.and_then(|z| {
            let (k, v) = z
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc });
            (v > 0.0).then(|| (StenosisLocation::from_index(k).expect("six slots"), v.min(0.99)))
        })
    };
    let inflow = {
        let f: Option<Vec<f64>> = FourierInflow::feature_names().iter().map(|n| values.get(n).copied()).collect();
        match f {
            Some(f) => FourierInflow::unpack_features(&f).map_err(|e| CircuitError::BadSettings(e.to_string()))?,
            None => desk::nominal_inflow(),
        }
    };
    let mut cfg = desk::topology(lesion);
    param.apply(&mut cfg, &x)?;
    let net = build_network(&cfg)?;
    Simulator::new(&net)?.simulate(&inflow, settings)
}

fn observation(s: &ClinicalTargets) -> [f64; 4] {
    let total: f64 = s.q_mean.iter().sum();
    let left = s.flow_split_left / 100.0 * total;
    [s.p_dia, s.p_sys, left, total - left]
}

// ---------------------------------------------------------------------------
// Dataset generation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Geometry {
    #[serde(default)]
    pub location: Option<StenosisLocation>,
    #[serde(default)]
    pub severity: f64,
    /// Nominal boundary conditions for this geometry (defaults to the
    /// parameterization's nominal).
    #[serde(default)]
    pub nominal: Option<Vec<f64>>,
    /// Latent vector (defaults to the one-hot latent).
    #[serde(default)]
    pub latent: Option<Vec<f64>>,
}

impl Geometry {
    pub fn latent_or_onehot(&self) -> Vec<f64> {
        self.latent.clone().unwrap_or_else(|| {
            let mut z = vec![0.0; 6];
            if let Some(l) = self.location {
                z[l.index()] = self.severity;
            }
            z
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum InflowMode {
    /// The desk nominal waveform for every row.
    Nominal,
    /// A freshly perturbed waveform per row; features go into C.
    Random,
    /// Rows cycle through the given feature vectors; features go into C.
    Features { rows: Vec<Vec<f64>> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenSpec {
    pub param: BcParam,
    pub n: usize,
    pub rel_range: f64,
    pub seed: u64,
    pub noise: Vec<f64>,
    pub geometries: Vec<Geometry>,
    pub inflow: InflowMode,
    pub settings: SimSettings,
}

impl GenSpec {
    pub fn healthy(param: BcParam, n: usize, seed: u64) -> Self {
        Self {
            param,
            n,
            rel_range: 0.3,
            seed,
            noise: DEFAULT_NOISE.to_vec(),
            geometries: vec![],
            inflow: InflowMode::Nominal,
            settings: SimSettings::default(),
        }
    }
}

fn row_rng(seed: u64, row: usize, lane: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ lane.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    rng.set_stream(row as u64);
    rng
}

/// Prior sampling → simulation → summary → noise, one independent RNG
/// stream per row, rows simulated in parallel.
pub fn generate_dataset(spec: &GenSpec) -> Result<DatasetTable> {
    if spec.n == 0 {
        return Err(PipelineError::EmptyDataset);
    }
    let noise = NoiseSpec::new(spec.noise.clone(), spec.seed)?;
    if noise.rel_std.len() != OBS_NAMES.len() {
        return Err(PipelineError::MissingColumnSpec {
            spec: noise.rel_std.len(),
            block: OBS_NAMES.len(),
        });
    }
    let geoms = if spec.geometries.is_empty() {
        vec![Geometry {
            location: None,
            severity: 0.0,
            nominal: None,
            latent: None,
        }]
    } else {
        spec.geometries.clone()
    };
    let nominals: Vec<Vec<f64>> = geoms
        .iter()
        .map(|g| g.nominal.clone().unwrap_or_else(|| spec.param.nominal()))
        .collect();
    for nom in &nominals {
        if nom.len() != spec.param.dim() {
            return Err(PipelineError::ShapeMismatch(format!(
                "nominal has {} entries, {:?} needs {}",
                nom.len(),
                spec.param,
                spec.param.dim()
            )));
        }
        if let Some((index, &value)) = nom.iter().enumerate().find(|(_, v)| !(**v > 0.0)) {
            return Err(PipelineError::NonPositiveNominal { index, value });
        }
    }
    if let InflowMode::Features { rows } = &spec.inflow {
        if rows.is_empty() || rows.iter().any(|r| r.len() != FEATURE_LEN) {
            return Err(PipelineError::ShapeMismatch(format!("inflow feature rows must have {FEATURE_LEN} entries")));
        }
    }
    let with_inflow = !matches!(spec.inflow, InflowMode::Nominal);
    let with_z = !spec.geometries.is_empty();
    let base_shape = desk::nominal_shape();

    let rows: Vec<Result<(usize, Vec<f64>, Vec<f64>)>> = (0..spec.n)
        .into_par_iter()
        .map(|i| {
            let g = i % geoms.len();
            let mut prng = row_rng(spec.seed, i, 1);
            let x = prior_row(&nominals[g], spec.rel_range, &mut prng);
            let inflow = match &spec.inflow {
                InflowMode::Nominal => desk::nominal_inflow(),
                InflowMode::Random => {
                    let mut irng = row_rng(spec.seed, i, 2);
                    let shape = base_shape.perturbed(&mut irng);
                    fit_fourier(&shape.sample(512), shape.period, N_HARMONICS)?
                }
                InflowMode::Features { rows } => FourierInflow::unpack_features(&rows[i % rows.len()])?,
            };
            let lesion = geoms[g].location.map(|l| (l, geoms[g].severity));
            let mut cfg = desk::topology(lesion);
            spec.param
                .apply(&mut cfg, &x)
                .and_then(|_| build_network(&cfg))
                .and_then(|net| Simulator::new(&net)?.simulate(&inflow, &spec.settings))
                .and_then(|tr| summarize(&tr))
                .map_err(|source| PipelineError::Simulation { row: i, source })
                .map(|s| {
                    let clean = observation(&s);
                    let mut nrng = row_rng(spec.seed, i, 3);
                    let noisy = noisy_row(&clean, &noise.rel_std, &mut nrng);
                    let mut c = noisy;
                    c.extend_from_slice(&clean);
                    if with_inflow {
                        c.extend_from_slice(&inflow.pack_features());
                    }
                    (g, x, c)
                })
        })
        .collect();

    let mut b = Vec::with_capacity(spec.n);
    let mut c = Vec::with_capacity(spec.n);
    let mut group = Vec::with_capacity(spec.n);
    for r in rows {
        let (g, x, cc) = r?;
        group.push(g);
        b.push(x);
        c.push(cc);
    }
    let b_names = spec.param.names();
    let mut c_names: Vec<String> = OBS_NAMES.iter().map(|s| s.to_string()).collect();
    c_names.extend(OBS_NAMES.iter().map(|s| format!("{s}_sim")));
    if with_inflow {
        c_names.extend(FourierInflow::feature_names());
    }
    let mut meta = DatasetMeta {
        seed: spec.seed,
        param: Some(spec.param),
        ..Default::default()
    };
    for (j, name) in b_names.iter().enumerate() {
        let lo = nominals.iter().map(|n| n[j] * (1.0 - spec.rel_range)).fold(f64::INFINITY, f64::min);
        let hi = nominals.iter().map(|n| n[j] * (1.0 + spec.rel_range)).fold(f64::NEG_INFINITY, f64::max);
        if hi > lo {
            meta.bounds.insert(name.clone(), (lo, hi));
        }
        let unit = if name.starts_with('C') { "cm^5/dyn" } else { "dyn*s/cm^5" };
        meta.units.insert(name.clone(), unit.to_string());
    }
    for n in OBS_NAMES.iter().flat_map(|s| [s.to_string(), format!("{s}_sim")]) {
        let unit = if n.starts_with('P') { "mmHg" } else { "cm^3/s" };
        meta.units.insert(n, unit.to_string());
    }
    let z = with_z.then(|| {
        let names = latent_names();
        for n in &names {
            meta.bounds.insert(n.clone(), (0.0, 1.0));
        }
        LatentBlock {
            names,
            group,
            values: geoms.iter().map(|g| g.latent_or_onehot()).collect(),
        }
    });
    let t = DatasetTable {
        b_names,
        b,
        c_names,
        c,
        z,
        meta,
    };
    t.validate()?;
    Ok(t)
}

// ---------------------------------------------------------------------------
// Training and evaluation glue
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSpec {
    pub x_columns: Vec<String>,
    pub y_columns: Vec<String>,
    #[serde(default)]
    pub hyper: CfmHyper,
}

/// Trains a CFM model on the given rows of a table; prior bounds come from
/// the table metadata.
pub fn cfm_train(table: &DatasetTable, train: &[usize], val: &[usize], spec: &TrainSpec) -> Result<(CfmModel, TrainLog)> {
    if train.is_empty() {
        return Err(PipelineError::EmptyDataset);
    }
    let xt = table.select(train, &spec.x_columns)?;
    let yt = table.select(train, &spec.y_columns)?;
    let xv = table.select(val, &spec.x_columns)?;
    let yv = table.select(val, &spec.y_columns)?;
    let bounds = table.bounds_for(&spec.x_columns)?;
    let (mut model, log) = CfmModel::fit(
        &xt,
        &yt,
        &xv,
        &yv,
        bounds,
        spec.x_columns.clone(),
        spec.y_columns.clone(),
        &spec.hyper,
    )?;
    model.config_hash = table.meta.config_hash.clone();
    Ok((model, log))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Truth {
    /// The noisy observations the model was conditioned on.
    #[default]
    Observed,
    /// The noise-free simulator outputs of the test row.
    Simulated,
}

pub const PREDICTIVE_NAMES: [&str; 3] = ["P_dia", "P_sys", "flow_split"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Predictive {
    pub names: Vec<String>,
    /// `[test row][draw][target]`
    pub predicted: Vec<Vec<Vec<f64>>>,
    /// `[test row][target]`
    pub truth: Vec<Vec<f64>>,
    /// `[test row][draw][x column]`
    pub posterior: Vec<Vec<Vec<f64>>>,
    pub acceptance: Vec<f64>,
}

fn split_of(q_left: f64, q_right: f64) -> f64 {
    100.0 * q_left / (q_left + q_right)
}

/// Posterior predictive check: for each test row draw `n_s` posterior
/// samples, re-simulate with them substituted into the row, and compare
/// pressures and flow split against the row's truth.
pub fn posterior_predictive(
    model: &CfmModel,
    table: &DatasetTable,
    rows: &[usize],
    n_s: usize,
    opts: &SampleOptions,
    truth: Truth,
    settings: &SimSettings,
) -> Result<Predictive> {
    let param = table
        .meta
        .param
        .ok_or_else(|| PipelineError::Invalid("table does not record its parameterization".into()))?;
    let ys = table.select(rows, &model.y_names)?;
    let suffix = if truth == Truth::Observed { "" } else { "_sim" };
    let obs_names: Vec<String> = OBS_NAMES.iter().map(|s| format!("{s}{suffix}")).collect();
    let obs = table.select(rows, &obs_names)?;
    let mut out = Predictive {
        names: PREDICTIVE_NAMES.iter().map(|s| s.to_string()).collect(),
        predicted: Vec::with_capacity(rows.len()),
        truth: Vec::with_capacity(rows.len()),
        posterior: Vec::with_capacity(rows.len()),
        acceptance: Vec::with_capacity(rows.len()),
    };
    for (k, &row) in rows.iter().enumerate() {
        let row_opts = SampleOptions {
            seed: opts.seed.wrapping_add(row as u64),
            ..*opts
        };
        let post = sample_posterior(model, &ys[k], n_s, &model.bounds, &row_opts)?;
        let base = table.row_values(row);
        let preds: Vec<Vec<f64>> = post
            .samples
            .par_iter()
            .map(|x| {
                let mut v = base.clone();
                for (n, val) in model.x_names.iter().zip(x) {
                    v.insert(n.clone(), *val);
                }
                simulate_values(param, &v, settings)
                    .map(|s| vec![s.p_dia, s.p_sys, s.flow_split_left])
                    .map_err(|source| PipelineError::Simulation { row, source })
            })
            .collect::<Result<_>>()?;
        let o = &obs[k];
        out.truth.push(vec![o[0], o[1], split_of(o[2], o[3])]);
        out.predicted.push(preds);
        out.posterior.push(post.samples);
        out.acceptance.push(post.acceptance_rate);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn eq7_hand_fixture() {
        let r = reconstruction_metrics(&[vec![vec![9.0], vec![13.0]]], &[vec![10.0]], &["y".into()]).unwrap();
        let t = &r.targets[0];
        assert_eq!(t.abs_mean, 2.0);
        assert_eq!(t.sign_mean, 1.0);
        assert_eq!(t.abs_std, 0.0);
        assert!((t.rel_abs_mean.unwrap() - 0.2).abs() < 1e-15);
        assert!((t.rel_sign_mean.unwrap() - 0.1).abs() < 1e-15);
    }

    #[test]
    fn zero_truth_marks_relative_missing() {
        let r = reconstruction_metrics(&[vec![vec![1.0]], vec![vec![2.0]]], &[vec![0.0], vec![1.0]], &["y".into()]).unwrap();
        assert_eq!(r.targets[0].rel_missing, 1);
        assert_eq!(r.targets[0].rel_abs_mean, Some(1.0));
        let r = reconstruction_metrics(&[vec![vec![1.0]]], &[vec![0.0]], &["y".into()]).unwrap();
        assert_eq!(r.targets[0].rel_abs_mean, None);
    }

    #[test]
    fn split_sizes() {
        let p = split_fractions(1000, &[0.9, 0.1], 3).unwrap();
        assert_eq!((p[0].len(), p[1].len()), (900, 100));
        let all: HashSet<usize> = p.iter().flatten().copied().collect();
        assert_eq!(all.len(), 1000);
        assert!(split_fractions(10, &[0.5, 0.6], 0).is_err());
    }

    #[test]
    fn group_folds_keep_groups_together() {
        let groups: Vec<usize> = (0..480).map(|i| i % 48).collect();
        let folds = group_kfold(&groups, 6, 1).unwrap();
        for (train, val) in &folds {
            let tg: HashSet<_> = train.iter().map(|&r| groups[r]).collect();
            assert!(val.iter().all(|r| !tg.contains(&groups[*r])));
            assert_eq!(train.len() + val.len(), 480);
        }
    }

    #[test]
    fn noise_spec_rejects_negative() {
        assert!(NoiseSpec::new(vec![0.1, -0.1], 0).is_err());
        let same = add_noise(&[vec![80.0, 120.0]], &NoiseSpec::new(vec![0.0, 0.0], 1).unwrap()).unwrap();
        assert_eq!(same, vec![vec![80.0, 120.0]]);
        assert!(matches!(
            add_noise(&[vec![1.0]], &NoiseSpec::new(vec![0.1, 0.1], 1).unwrap()),
            Err(PipelineError::MissingColumnSpec { .. })
        ));
    }
}
