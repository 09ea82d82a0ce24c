//! Scalar clustering of a parameter set into `k` shared values.
//!
//! All schemes produce an [`Assignment`] (cluster index per parameter) and a
//! [`Codebook`] (centre and member count per cluster):
//!
//! - [`kmeans_lloyd`]: plain k-means, objective `Σ |w_i − c_j|²`.
//! - [`hw_kmeans_lloyd`]: Hessian-weighted k-means, objective
//!   `Σ h_ii |w_i − c_j|²` with weighted-mean centres.
//! - [`uniform_quantize`]: equal-width bins, mean or weighted-mean centres.
//! - [`ecsq_iterate`]: entropy-constrained scalar quantization minimising
//!   `J_λ = D + λH` with `D = (1/N) Σ h_ii |w_i − c_j|²`.
//! - [`solve_lambda`]: finds the `λ` meeting an entropy budget.

mod lambda;
mod lloyd;
mod uniform;

pub use lambda::{solve_lambda, LambdaSolution, ENTROPY_SLACK};
pub use lloyd::{ecsq_iterate, hw_kmeans_lloyd, kmeans_lloyd};
pub use uniform::{uniform_quantize, CenterRule};

use serde::{Deserialize, Serialize};

use crate::store::{CurvatureDiag, ParamSet};
use crate::{Error, Result};

/// Cluster index of every quantized parameter.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Assignment {
    indices: Vec<usize>,
}

impl Assignment {
    pub fn new(indices: Vec<usize>, k: usize) -> Result<Self> {
        if let Some(&bad) = indices.iter().find(|&&j| j >= k) {
            return Err(Error::InvalidArgument(format!(
                "cluster index {bad} out of range for k = {k}"
            )));
        }
        Ok(Assignment { indices })
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn counts(&self, k: usize) -> Vec<usize> {
        let mut counts = vec![0; k];
        for &j in &self.indices {
            counts[j] += 1;
        }
        counts
    }
}

/// Cluster centres and member counts. Clusters with zero members are
/// allowed (a retired ECSQ cluster, or an unfillable k-means cluster) and
/// removed by [`Codebook::compact`].
#[derive(Clone, Debug, PartialEq)]
pub struct Codebook {
    centers: Vec<f64>,
    counts: Vec<usize>,
}

impl Codebook {
    pub fn new(centers: Vec<f64>, counts: Vec<usize>) -> Result<Self> {
        if centers.is_empty() {
            return Err(Error::InvalidArgument("codebook needs at least one cluster".into()));
        }
        if centers.len() != counts.len() {
            return Err(Error::LengthMismatch {
                what: "cluster counts",
                expected: centers.len(),
                got: counts.len(),
            });
        }
        if let Some(index) = centers.iter().position(|c| !c.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        Ok(Codebook { centers, counts })
    }

    pub fn from_assignment(centers: Vec<f64>, assignment: &Assignment) -> Result<Self> {
        let counts = assignment.counts(centers.len());
        Self::new(centers, counts)
    }

    pub fn k(&self) -> usize {
        self.centers.len()
    }

    /// Number of clusters with at least one member.
    pub fn k_effective(&self) -> usize {
        self.counts.iter().filter(|&&c| c > 0).count()
    }

    pub fn centers(&self) -> &[f64] {
        &self.centers
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    /// `p_j = |C_j| / N`.
    pub fn proportions(&self) -> Vec<f64> {
        let n = self.total() as f64;
        self.counts.iter().map(|&c| c as f64 / n).collect()
    }

    /// Same clusters and counts, new centre values.
    pub fn with_centers(&self, centers: Vec<f64>) -> Result<Self> {
        Self::new(centers, self.counts.clone())
    }

    /// Drops empty clusters, renumbering the rest in their original order.
    pub fn compact(&self, assignment: &Assignment) -> Result<(Assignment, Codebook)> {
        let mut remap = vec![usize::MAX; self.k()];
        let mut centers = Vec::new();
        let mut counts = Vec::new();
        for (j, (&c, &n)) in self.centers.iter().zip(&self.counts).enumerate() {
            if n > 0 {
                remap[j] = centers.len();
                centers.push(c);
                counts.push(n);
            }
        }
        let indices = assignment
            .indices()
            .iter()
            .map(|&j| match remap.get(j) {
                Some(&r) if r != usize::MAX => Ok(r),
                _ => Err(Error::InvalidArgument(format!(
                    "assignment references empty or missing cluster {j}"
                ))),
            })
            .collect::<Result<Vec<_>>>()?;
        let k = centers.len();
        Ok((Assignment::new(indices, k)?, Codebook::new(centers, counts)?))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Init {
    /// `k` centres evenly spaced over `[min, max]`, endpoints included.
    Linspace,
    /// Centres at the `(j + ½)/k` empirical quantiles.
    Quantile,
    /// `k` distinct parameters drawn with the configured seed.
    SeededRandom,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterConfig {
    pub k: usize,
    pub init: Init,
    pub max_iters: usize,
    /// Stop once an iteration improves the objective by at most this
    /// fraction.
    pub rel_tol: f64,
    pub seed: u64,
}

impl ClusterConfig {
    pub fn new(k: usize) -> Self {
        ClusterConfig {
            k,
            init: Init::Linspace,
            max_iters: 200,
            rel_tol: 1e-7,
            seed: 0,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::InvalidArgument("k must be at least 1".into()));
        }
        if self.max_iters == 0 {
            return Err(Error::InvalidArgument("max_iters must be at least 1".into()));
        }
        if !(self.rel_tol > 0.0) {
            return Err(Error::InvalidArgument("rel_tol must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EcsqConfig {
    pub cluster: ClusterConfig,
    /// Bits-to-distortion exchange rate, `λ ≥ 0`.
    pub lambda: f64,
}

/// Output of every clustering scheme.
#[derive(Clone, Debug, PartialEq)]
pub struct ClusterResult {
    pub assignment: Assignment,
    pub codebook: Codebook,
    /// Objective after initialisation's first assignment and after every
    /// subsequent iteration (MSQE, weighted distortion or `J_λ`).
    pub trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

fn check_lengths(ps: &ParamSet, cv: &CurvatureDiag) -> Result<()> {
    if cv.len() != ps.len() {
        return Err(Error::LengthMismatch {
            what: "curvature",
            expected: ps.len(),
            got: cv.len(),
        });
    }
    Ok(())
}

fn check_shapes(n: usize, assignment: &Assignment, codebook: &Codebook) -> Result<()> {
    if assignment.len() != n {
        return Err(Error::LengthMismatch {
            what: "assignment",
            expected: n,
            got: assignment.len(),
        });
    }
    if let Some(&bad) = assignment.indices().iter().find(|&&j| j >= codebook.k()) {
        return Err(Error::InvalidArgument(format!(
            "cluster index {bad} out of range for k = {}",
            codebook.k()
        )));
    }
    Ok(())
}

/// Sum of squared quantization errors, `Σ_i |w_i − c_{a(i)}|²`.
pub fn msqe(ps: &ParamSet, assignment: &Assignment, codebook: &Codebook) -> Result<f64> {
    check_shapes(ps.len(), assignment, codebook)?;
    Ok(ps
        .values()
        .iter()
        .zip(assignment.indices())
        .map(|(w, &j)| (w - codebook.centers()[j]).powi(2))
        .sum())
}

/// Curvature-weighted squared error, `Σ_i h_ii |w_i − c_{a(i)}|²`. This is
/// the second-order loss estimate without its constant factor ½.
pub fn hw_distortion(
    ps: &ParamSet,
    cv: &CurvatureDiag,
    assignment: &Assignment,
    codebook: &Codebook,
) -> Result<f64> {
    check_lengths(ps, cv)?;
    check_shapes(ps.len(), assignment, codebook)?;
    Ok(ps
        .values()
        .iter()
        .zip(cv.values())
        .zip(assignment.indices())
        .map(|((w, h), &j)| h * (w - codebook.centers()[j]).powi(2))
        .sum())
}

/// `w̄_i = c_{a(i)}`.
pub fn dequantize(assignment: &Assignment, codebook: &Codebook) -> Result<Vec<f64>> {
    assignment
        .indices()
        .iter()
        .map(|&j| {
            codebook.centers().get(j).copied().ok_or_else(|| {
                Error::InvalidArgument(format!(
                    "cluster index {j} out of range for k = {}",
                    codebook.k()
                ))
            })
        })
        .collect()
}

/// Dequantized values written back into a vector of length `n` at
/// `positions` (or at `0..n` when `None`); every other entry is zero.
pub fn scatter_dequantized(
    n: usize,
    positions: Option<&[usize]>,
    assignment: &Assignment,
    codebook: &Codebook,
) -> Result<Vec<f64>> {
    let values = dequantize(assignment, codebook)?;
    match positions {
        None => {
            if values.len() != n {
                return Err(Error::LengthMismatch {
                    what: "assignment",
                    expected: n,
                    got: values.len(),
                });
            }
            Ok(values)
        }
        Some(pos) => {
            if pos.len() != values.len() {
                return Err(Error::LengthMismatch {
                    what: "positions",
                    expected: values.len(),
                    got: pos.len(),
                });
            }
            let mut out = vec![0.0; n];
            for (&p, v) in pos.iter().zip(values) {
                *out.get_mut(p).ok_or_else(|| {
                    Error::InvalidArgument(format!("position {p} out of range for {n}"))
                })? = v;
            }
            Ok(out)
        }
    }
}
