use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub enum Targets {
    Classes { labels: Vec<usize>, n_classes: usize },
    Values { dim: usize, values: Vec<f64> },
}

impl Targets {
    /// Target for output `c` of sample `s`; class labels read as one-hot.
    pub fn value(&self, s: usize, c: usize) -> f64 {
        match self {
            Targets::Classes { labels, .. } => (labels[s] == c) as u8 as f64,
            Targets::Values { dim, values } => values[s * dim + c],
        }
    }

    fn len(&self) -> usize {
        match self {
            Targets::Classes { labels, .. } => labels.len(),
            Targets::Values { dim, values } => values.len() / dim,
        }
    }

    fn select(&self, indices: &[usize]) -> Targets {
        match self {
            Targets::Classes { labels, n_classes } => Targets::Classes {
                labels: indices.iter().map(|&i| labels[i]).collect(),
                n_classes: *n_classes,
            },
            Targets::Values { dim, values } => Targets::Values {
                dim: *dim,
                values: indices
                    .iter()
                    .flat_map(|&i| values[i * dim..(i + 1) * dim].iter().copied())
                    .collect(),
            },
        }
    }
}

/// Row-major sample matrix with one target per row.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    inputs: Vec<f64>,
    dim: usize,
    targets: Targets,
}

impl Dataset {
    pub fn new(inputs: Vec<f64>, dim: usize, targets: Targets) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidArgument("input dimension must be positive".into()));
        }
        if inputs.len() % dim != 0 {
            return Err(Error::Format(format!(
                "{} input values do not form rows of {dim}",
                inputs.len()
            )));
        }
        let n = inputs.len() / dim;
        match &targets {
            Targets::Classes { labels, n_classes } => {
                if *n_classes == 0 {
                    return Err(Error::InvalidArgument("need at least one class".into()));
                }
                if let Some(bad) = labels.iter().find(|&&l| l >= *n_classes) {
                    return Err(Error::InvalidArgument(format!(
                        "label {bad} out of range for {n_classes} classes"
                    )));
                }
            }
            Targets::Values { dim: tdim, values } => {
                if *tdim == 0 || values.len() % tdim != 0 {
                    return Err(Error::Format("malformed target matrix".into()));
                }
                if let Some(index) = values.iter().position(|v| !v.is_finite()) {
                    return Err(Error::NonFinite { index });
                }
            }
        }
        if targets.len() != n {
            return Err(Error::LengthMismatch {
                what: "targets",
                expected: n,
                got: targets.len(),
            });
        }
        if let Some(index) = inputs.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        Ok(Dataset {
            inputs,
            dim,
            targets,
        })
    }

    pub fn len(&self) -> usize {
        self.inputs.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn input(&self, s: usize) -> &[f64] {
        &self.inputs[s * self.dim..(s + 1) * self.dim]
    }

    pub fn targets(&self) -> &Targets {
        &self.targets
    }

    pub fn labels(&self) -> Option<&[usize]> {
        match &self.targets {
            Targets::Classes { labels, .. } => Some(labels),
            Targets::Values { .. } => None,
        }
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            inputs: indices
                .iter()
                .flat_map(|&i| self.input(i).iter().copied())
                .collect(),
            dim: self.dim,
            targets: self.targets.select(indices),
        }
    }

    /// The first `n` samples (all of them if `n` exceeds the length).
    pub fn head(&self, n: usize) -> Dataset {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx)
    }

    /// Parses `label,feature,feature,...` rows. Blank lines and lines starting
    /// with `#` are skipped. The class count is `max label + 1` unless given.
    pub fn parse_csv(text: &str, n_classes: Option<usize>) -> Result<Dataset> {
        let mut inputs = Vec::new();
        let mut labels = Vec::new();
        let mut dim = None;
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut fields = line.split(',').map(str::trim);
            let label: usize = fields
                .next()
                .unwrap()
                .parse()
                .map_err(|e| Error::Format(format!("line {}: bad label: {e}", lineno + 1)))?;
            let before = inputs.len();
            for f in fields {
                let v: f64 = f
                    .parse()
                    .map_err(|e| Error::Format(format!("line {}: bad feature: {e}", lineno + 1)))?;
                inputs.push(v);
            }
            let row = inputs.len() - before;
            match dim {
                None => dim = Some(row),
                Some(d) if d != row => {
                    return Err(Error::Format(format!(
                        "line {}: {row} features, expected {d}",
                        lineno + 1
                    )))
                }
                _ => {}
            }
            labels.push(label);
        }
        let dim = dim.ok_or_else(|| Error::Format("dataset has no rows".into()))?;
        let n_classes = n_classes.unwrap_or_else(|| labels.iter().max().map_or(1, |m| m + 1));
        Dataset::new(inputs, dim, Targets::Classes { labels, n_classes })
    }

    pub fn load_csv(path: &Path, n_classes: Option<usize>) -> Result<Dataset> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_csv(&text, n_classes)
    }

    /// Inverse of [`Dataset::parse_csv`] for labelled data. Values use the
    /// shortest representation that parses back to the same `f64`.
    pub fn to_csv(&self) -> Result<String> {
        let labels = self
            .labels()
            .ok_or_else(|| Error::InvalidArgument("only labelled data can be written as CSV".into()))?;
        let mut out = String::new();
        for (s, label) in labels.iter().enumerate() {
            write!(out, "{label}").unwrap();
            for v in self.input(s) {
                write!(out, ",{v}").unwrap();
            }
            out.push('\n');
        }
        Ok(out)
    }
}

/// Parameters of the synthetic Gaussian-mixture classification task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskConfig {
    pub n_classes: usize,
    pub dim: usize,
    /// Each class is a mixture of this many Gaussian blobs.
    pub blobs_per_class: usize,
    /// Standard deviation of blob centres around the origin.
    pub separation: f64,
    /// Standard deviation of samples around their blob centre.
    pub noise: f64,
    pub seed: u64,
}

impl Default for TaskConfig {
    fn default() -> Self {
        TaskConfig {
            n_classes: 10,
            dim: 24,
            blobs_per_class: 3,
            separation: 1.0,
            noise: 0.9,
            seed: 0,
        }
    }
}

/// Deterministic classification task; every split sampled from the same
/// mixture with its own RNG stream.
#[derive(Clone, Debug)]
pub struct SyntheticTask {
    config: TaskConfig,
    centres: Vec<Vec<f64>>,
}

impl SyntheticTask {
    pub fn new(config: TaskConfig) -> Result<Self> {
        if config.n_classes == 0 || config.dim == 0 || config.blobs_per_class == 0 {
            return Err(Error::InvalidArgument(
                "synthetic task sizes must be positive".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let centres = (0..config.n_classes * config.blobs_per_class)
            .map(|_| {
                (0..config.dim)
                    .map(|_| config.separation * rng.sample::<f64, _>(StandardNormal))
                    .collect()
            })
            .collect();
        Ok(SyntheticTask { config, centres })
    }

    pub fn config(&self) -> &TaskConfig {
        &self.config
    }

    /// `n` labelled samples from stream `stream`.
    pub fn sample(&self, n: usize, stream: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(stream + 1);
        let mut inputs = Vec::with_capacity(n * self.config.dim);
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            let blob = rng.random_range(0..self.centres.len());
            labels.push(blob % self.config.n_classes);
            for &c in &self.centres[blob] {
                inputs.push(c + self.config.noise * rng.sample::<f64, _>(StandardNormal));
            }
        }
        Dataset::new(
            inputs,
            self.config.dim,
            Targets::Classes {
                labels,
                n_classes: self.config.n_classes,
            },
        )
        .expect("synthetic samples are well formed")
    }
}
