//! Datasets: planted low-rank synthetic tasks, TSV ingestion, IID sharding.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{HaflError, Result};
use crate::lora::LoraAdapter;
use crate::matrix::Matrix;
use crate::model::FrozenBase;
use crate::seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub x: Vec<f64>,
    pub y: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub feature_dim: usize,
    pub class_count: usize,
}

impl Dataset {
    pub fn new(samples: Vec<Sample>, feature_dim: usize, class_count: usize) -> Result<Self> {
        for (i, s) in samples.iter().enumerate() {
            if s.x.len() != feature_dim {
                return Err(HaflError::shape(
                    "Dataset sample",
                    format!("{feature_dim} features"),
                    format!("{} features at sample {i}", s.x.len()),
                ));
            }
            if s.y >= class_count {
                return Err(HaflError::InvalidArgument(format!(
                    "sample {i} has label {} >= class count {class_count}",
                    s.y
                )));
            }
            if s.x.iter().any(|v| !v.is_finite()) {
                return Err(HaflError::InvalidArgument(format!(
                    "sample {i} has non-finite features"
                )));
            }
        }
        Ok(Dataset {
            samples,
            feature_dim,
            class_count,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    /// Number of classes `d`.
    pub class_count: usize,
    /// Feature dimension `l`.
    pub feature_dim: usize,
    pub true_rank: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub label_noise: f64,
    /// Std of the frozen base entries, in units of `1/√l`.
    pub base_std: f64,
    /// Scale of the planted residual: its entries have std `residual_std²`,
    /// in units of `1/√l`, whatever `true_rank` is.
    pub residual_std: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            class_count: 20,
            feature_dim: 64,
            true_rank: 8,
            n_train: 100_000,
            n_test: 2_000,
            label_noise: 0.05,
            base_std: 0.25,
            residual_std: 5.0,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.class_count < 2 {
            return Err(HaflError::InvalidArgument(
                "class_count must be >= 2".into(),
            ));
        }
        if self.feature_dim == 0 {
            return Err(HaflError::ZeroDimension {
                name: "feature_dim",
            });
        }
        if self.true_rank == 0 || self.true_rank > self.class_count.min(self.feature_dim) {
            return Err(HaflError::InvalidArgument(format!(
                "true_rank {} must lie in [1, min(d, l) = {}]",
                self.true_rank,
                self.class_count.min(self.feature_dim)
            )));
        }
        if !(0.0..0.5).contains(&self.label_noise) {
            return Err(HaflError::InvalidArgument(format!(
                "label_noise {} must lie in [0, 0.5)",
                self.label_noise
            )));
        }
        if !(self.base_std >= 0.0 && self.residual_std > 0.0) {
            return Err(HaflError::InvalidArgument(
                "base_std must be >= 0 and residual_std > 0".into(),
            ));
        }
        Ok(())
    }
}

/// Frozen base, train/test splits, and the planted residual `(B*, A*)`
/// (scale 1) such that labels are `argmax((W_pre + B*A*) x)` before noise.
#[derive(Debug, Clone)]
pub struct SyntheticTask {
    pub base: FrozenBase,
    pub train: Dataset,
    pub test: Dataset,
    pub planted: LoraAdapter,
}

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticTask> {
    spec.validate()?;
    let (d, l, k) = (spec.class_count, spec.feature_dim, spec.true_rank);
    let mut rng = seed::rng_for(spec.seed, &[seed::TAG_DATA]);
    let unit = 1.0 / (l as f64).sqrt();
    let base_dist = Normal::new(0.0, spec.base_std * unit).expect("validated std");
    let w_pre = Matrix::from_fn(d, l, |_, _| base_dist.sample(&mut rng));
    // B*A* entries: sum of k products → std residual_std² · unit for any k.
    let b_dist = Normal::new(0.0, spec.residual_std).expect("validated std");
    let a_dist =
        Normal::new(0.0, spec.residual_std * unit / (k as f64).sqrt()).expect("validated std");
    let b_star = Matrix::from_fn(d, k, |_, _| b_dist.sample(&mut rng));
    let a_star = Matrix::from_fn(k, l, |_, _| a_dist.sample(&mut rng));
    let planted = LoraAdapter::new(b_star, a_star, 1.0)?;
    let base = FrozenBase::new(w_pre)?;
    let target = base.weights().add(&planted.effective_delta())?;

    // Only training labels are corrupted; the test split scores recovery of
    // the planted map itself.
    let mut draw = |n: usize, noise: f64| -> Vec<Sample> {
        (0..n)
            .map(|_| {
                let x: Vec<f64> = (0..l)
                    .map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal))
                    .collect();
                let mut y = argmax(&target.matvec(&x));
                if noise > 0.0 && rng.random::<f64>() < noise {
                    let shift = rng.random_range(1..d);
                    y = (y + shift) % d;
                }
                Sample { x, y }
            })
            .collect()
    };
    let train = draw(spec.n_train, spec.label_noise);
    let test = draw(spec.n_test, 0.0);
    Ok(SyntheticTask {
        base,
        train: Dataset::new(train, l, d)?,
        test: Dataset::new(test, l, d)?,
        planted,
    })
}

/// Index of the largest value; ties go to the lowest index.
pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate().skip(1) {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Reads `label<TAB>f1<TAB>…<TAB>fl` rows. Blank lines are skipped.
pub fn load_tsv(path: impl AsRef<Path>, l: usize, d: usize) -> Result<Dataset> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| HaflError::io(path, e))?;
    let parse_err = |line: usize, message: String| HaflError::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut samples = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let mut fields = line.split('\t');
        let label_field = fields.next().unwrap_or_default();
        let y: usize = label_field
            .trim()
            .parse()
            .map_err(|_| parse_err(line_no, format!("bad label `{label_field}`")))?;
        if y >= d {
            return Err(parse_err(line_no, format!("label {y} >= class count {d}")));
        }
        let x = fields
            .map(|f| {
                f.trim()
                    .parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| parse_err(line_no, format!("bad feature `{f}`")))
            })
            .collect::<Result<Vec<f64>>>()?;
        if x.len() != l {
            return Err(parse_err(
                line_no,
                format!("expected {l} features, found {}", x.len()),
            ));
        }
        samples.push(Sample { x, y });
    }
    Dataset::new(samples, l, d)
}

/// Seeded shuffle, then sample `i` goes to shard `i mod n_clients`.
pub fn partition_iid(dataset: &Dataset, n_clients: usize, seed: u64) -> Result<Vec<Dataset>> {
    if n_clients == 0 {
        return Err(HaflError::ZeroDimension { name: "n_clients" });
    }
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.shuffle(&mut seed::rng_for(seed, &[seed::TAG_PARTITION]));
    let mut shards: Vec<Vec<Sample>> = vec![Vec::new(); n_clients];
    for (pos, idx) in order.into_iter().enumerate() {
        shards[pos % n_clients].push(dataset.samples[idx].clone());
    }
    Ok(shards
        .into_iter()
        .map(|samples| Dataset {
            samples,
            feature_dim: dataset.feature_dim,
            class_count: dataset.class_count,
        })
        .collect())
}
