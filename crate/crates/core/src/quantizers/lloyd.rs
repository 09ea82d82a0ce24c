//! Lloyd-type iterations shared by k-means, Hessian-weighted k-means and
//! ECSQ.
//!
//! Internally every variant minimises
//!
//! ```text
//! S = Σ_i h_i |w_i − c_{a(i)}|² + λ (N log₂ N − Σ_j n_j log₂ n_j)
//! ```
//!
//! which is the weighted distortion when `λ = 0` and `N·J_λ` otherwise.
//! Each iteration is an assignment step (argmin of `h_i |w_i − c_j|² −
//! λ log₂ p_j`, lowest index on ties) followed by weighted-mean centres and
//! empirical proportions. Once that stalls, a sweep of single-point moves
//! evaluated with exact centre and proportion updates escapes fixed points
//! that a one-point reassignment would still improve; the Lloyd steps then
//! resume. `S` never increases along the way.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{check_lengths, Assignment, ClusterConfig, ClusterResult, Codebook, EcsqConfig, Init};
use crate::store::{CurvatureDiag, ParamSet};
use crate::{Error, Result};

/// `n log₂ n` with `0 log₂ 0 = 0`.
pub(crate) fn n_log_n(n: usize) -> f64 {
    if n == 0 {
        0.0
    } else {
        let x = n as f64;
        x * x.log2()
    }
}

pub(crate) fn initial_centers(values: &[f64], cfg: &ClusterConfig) -> Vec<f64> {
    let k = cfg.k;
    let (min, max) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    match cfg.init {
        Init::Linspace => {
            if k == 1 {
                vec![0.5 * (min + max)]
            } else {
                let step = (max - min) / (k - 1) as f64;
                (0..k)
                    .map(|j| if j == k - 1 { max } else { min + step * j as f64 })
                    .collect()
            }
        }
        Init::Quantile => {
            let mut sorted = values.to_vec();
            sorted.sort_by(f64::total_cmp);
            let n = sorted.len();
            (0..k)
                .map(|j| {
                    let q = (j as f64 + 0.5) / k as f64;
                    sorted[((q * n as f64).floor() as usize).min(n - 1)]
                })
                .collect()
        }
        Init::SeededRandom => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            let n = values.len();
            let picked = rand::seq::index::sample(&mut rng, n, k.min(n));
            let mut centers: Vec<f64> = picked.iter().map(|i| values[i]).collect();
            while centers.len() < k {
                centers.push(*centers.last().unwrap());
            }
            centers
        }
    }
}

struct Engine<'a> {
    values: &'a [f64],
    weights: &'a [f64],
    lambda: f64,
    /// Emptied clusters are retired (ECSQ with `λ > 0`) rather than
    /// re-seeded (Lloyd).
    retire: bool,
    centers: Vec<f64>,
    assign: Vec<usize>,
    counts: Vec<usize>,
    active: Vec<bool>,
    proportions: Vec<f64>,
}

impl<'a> Engine<'a> {
    fn new(values: &'a [f64], weights: &'a [f64], centers: Vec<f64>, lambda: f64) -> Self {
        let k = centers.len();
        Engine {
            values,
            weights,
            lambda,
            retire: lambda > 0.0,
            centers,
            assign: vec![0; values.len()],
            counts: vec![0; k],
            active: vec![true; k],
            proportions: vec![1.0 / k as f64; k],
        }
    }

    fn n(&self) -> usize {
        self.values.len()
    }

    fn cost(&self, i: usize, j: usize) -> f64 {
        let d = self.values[i] - self.centers[j];
        self.weights[i] * d * d
    }

    fn penalty(&self, j: usize) -> f64 {
        if self.lambda == 0.0 {
            0.0
        } else {
            -self.lambda * self.proportions[j].log2()
        }
    }

    fn assignment_step(&mut self) {
        let penalties: Vec<f64> = (0..self.centers.len()).map(|j| self.penalty(j)).collect();
        for i in 0..self.n() {
            let mut best = usize::MAX;
            let mut best_cost = f64::INFINITY;
            for j in 0..self.centers.len() {
                if !self.active[j] {
                    continue;
                }
                let c = self.cost(i, j) + penalties[j];
                if best == usize::MAX || c < best_cost {
                    best = j;
                    best_cost = c;
                }
            }
            self.assign[i] = best;
        }
        self.recount();
    }

    fn recount(&mut self) {
        self.counts.iter_mut().for_each(|c| *c = 0);
        for &j in &self.assign {
            self.counts[j] += 1;
        }
    }

    /// Moves the worst-served parameter into each empty cluster.
    fn reseed_empty(&mut self) {
        for j in 0..self.centers.len() {
            if self.counts[j] > 0 {
                continue;
            }
            let mut worst = None;
            let mut worst_cost = 0.0;
            for i in 0..self.n() {
                let a = self.assign[i];
                if self.counts[a] < 2 {
                    continue;
                }
                let c = self.cost(i, a);
                if c > worst_cost {
                    worst = Some(i);
                    worst_cost = c;
                }
            }
            let Some(i) = worst else {
                // Every remaining parameter sits exactly on its centre.
                return;
            };
            self.counts[self.assign[i]] -= 1;
            self.assign[i] = j;
            self.counts[j] = 1;
            self.centers[j] = self.values[i];
        }
    }

    fn update_centers(&mut self) {
        let k = self.centers.len();
        let mut num = vec![0.0; k];
        let mut den = vec![0.0; k];
        for i in 0..self.n() {
            let j = self.assign[i];
            num[j] += self.weights[i] * self.values[i];
            den[j] += self.weights[i];
        }
        let n = self.n() as f64;
        for j in 0..k {
            if self.counts[j] > 0 {
                self.centers[j] = num[j] / den[j];
            }
            self.proportions[j] = self.counts[j] as f64 / n;
        }
    }

    fn objective(&self) -> f64 {
        let distortion: f64 = (0..self.n()).map(|i| self.cost(i, self.assign[i])).sum();
        if self.lambda == 0.0 {
            return distortion;
        }
        let entropy_scaled =
            n_log_n(self.n()) - self.counts.iter().map(|&c| n_log_n(c)).sum::<f64>();
        distortion + self.lambda * entropy_scaled
    }

    /// One sweep of improving single-point moves with exact updates. Returns
    /// the number of moves made.
    fn refine(&mut self, current: f64) -> usize {
        let k = self.centers.len();
        let mut mass = vec![0.0; k];
        for i in 0..self.n() {
            mass[self.assign[i]] += self.weights[i];
        }
        let eps = 1e-12 * current.abs();
        let mut moves = 0;
        for i in 0..self.n() {
            let a = self.assign[i];
            let (x, h) = (self.values[i], self.weights[i]);
            if !self.retire && self.counts[a] == 1 {
                continue;
            }
            let da = x - self.centers[a];
            let removal = if self.counts[a] == 1 {
                -h * da * da
            } else {
                -h * mass[a] / (mass[a] - h) * da * da
            };
            let entropy_out = n_log_n(self.counts[a]) - n_log_n(self.counts[a] - 1);
            let mut best = None;
            let mut best_delta = -eps;
            for b in 0..k {
                if b == a || !self.active[b] {
                    continue;
                }
                let db = x - self.centers[b];
                let addition = if self.counts[b] == 0 {
                    0.0
                } else {
                    h * mass[b] / (mass[b] + h) * db * db
                };
                let mut delta = removal + addition;
                if self.lambda != 0.0 {
                    let entropy_in = n_log_n(self.counts[b]) - n_log_n(self.counts[b] + 1);
                    delta += self.lambda * (entropy_out + entropy_in);
                }
                if delta < best_delta {
                    best = Some(b);
                    best_delta = delta;
                }
            }
            let Some(b) = best else { continue };

            if self.counts[a] == 1 {
                mass[a] = 0.0;
            } else {
                self.centers[a] = (mass[a] * self.centers[a] - h * x) / (mass[a] - h);
                mass[a] -= h;
            }
            self.counts[a] -= 1;
            if self.counts[a] == 0 && self.retire {
                self.active[a] = false;
            }
            if self.counts[b] == 0 {
                self.centers[b] = x;
                mass[b] = h;
            } else {
                self.centers[b] = (mass[b] * self.centers[b] + h * x) / (mass[b] + h);
                mass[b] += h;
            }
            self.counts[b] += 1;
            self.assign[i] = b;
            moves += 1;
        }
        moves
    }

    fn run(mut self, cfg: &ClusterConfig) -> (Vec<usize>, Vec<f64>, Vec<usize>, Vec<f64>, bool) {
        let mut trace = Vec::new();
        let mut converged = false;
        while trace.len() < cfg.max_iters {
            self.assignment_step();
            if self.retire {
                for j in 0..self.centers.len() {
                    if self.counts[j] == 0 {
                        self.active[j] = false;
                    }
                }
            } else {
                self.reseed_empty();
            }
            self.update_centers();
            let obj = self.objective();
            let stalled = trace
                .last()
                .is_some_and(|&prev: &f64| prev - obj <= cfg.rel_tol * prev.abs());
            trace.push(obj);
            if !stalled || trace.len() >= cfg.max_iters {
                continue;
            }
            if self.refine(obj) == 0 {
                converged = true;
                break;
            }
            self.update_centers();
            trace.push(self.objective());
        }
        (self.assign, self.centers, self.counts, trace, converged)
    }
}

fn run_engine(
    values: &[f64],
    weights: &[f64],
    lambda: f64,
    cfg: &ClusterConfig,
    normalise: bool,
) -> Result<ClusterResult> {
    cfg.validate()?;
    let centers = initial_centers(values, cfg);
    let (assign, centers, counts, mut trace, converged) =
        Engine::new(values, weights, centers, lambda).run(cfg);
    if normalise {
        let n = values.len() as f64;
        trace.iter_mut().for_each(|t| *t /= n);
    }
    let k = centers.len();
    Ok(ClusterResult {
        assignment: Assignment::new(assign, k)?,
        codebook: Codebook::new(centers, counts)?,
        iterations: trace.len(),
        trace,
        converged,
    })
}

/// Plain k-means; the trace holds the MSQE `Σ |w_i − c_j|²`.
pub fn kmeans_lloyd(ps: &ParamSet, cfg: &ClusterConfig) -> Result<ClusterResult> {
    let ones = vec![1.0; ps.len()];
    run_engine(ps.values(), &ones, 0.0, cfg, false)
}

/// Hessian-weighted k-means; the trace holds `Σ h_ii |w_i − c_j|²`.
pub fn hw_kmeans_lloyd(
    ps: &ParamSet,
    cv: &CurvatureDiag,
    cfg: &ClusterConfig,
) -> Result<ClusterResult> {
    check_lengths(ps, cv)?;
    run_engine(ps.values(), cv.values(), 0.0, cfg, false)
}

/// Iterative entropy-constrained quantization; the trace holds
/// `J_λ = (1/N) Σ h_ii |w_i − c_j|² + λ H`. Proportions start uniform.
/// With `λ > 0` a cluster that loses all members is retired for good; at
/// `λ = 0` the entropy term vanishes and the run is exactly
/// [`hw_kmeans_lloyd`] with its trace divided by `N`.
pub fn ecsq_iterate(ps: &ParamSet, cv: &CurvatureDiag, cfg: &EcsqConfig) -> Result<ClusterResult> {
    check_lengths(ps, cv)?;
    if !(cfg.lambda >= 0.0) || !cfg.lambda.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "lambda must be a finite nonnegative number, got {}",
            cfg.lambda
        )));
    }
    run_engine(ps.values(), cv.values(), cfg.lambda, &cfg.cluster, true)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quantizers::{hw_distortion, msqe};
    use crate::store::CurvatureSource;
    use proptest::prelude::*;

    fn ps(v: &[f64]) -> ParamSet {
        ParamSet::single("w", v.to_vec()).unwrap()
    }

    fn cv(h: &[f64]) -> CurvatureDiag {
        CurvatureDiag::new(h.to_vec(), CurvatureSource::ExactHessian).unwrap()
    }

    #[test]
    fn symmetric_pairs_split_exactly() {
        let r = kmeans_lloyd(&ps(&[0.0, 0.0, 10.0, 10.0]), &ClusterConfig::new(2)).unwrap();
        assert_eq!(r.codebook.centers(), &[0.0, 10.0]);
        assert_eq!(*r.trace.last().unwrap(), 0.0);
        assert!(r.converged);
    }

    #[test]
    fn three_points_two_clusters() {
        let p = ps(&[0.0, 1.0, 9.0]);
        let r = kmeans_lloyd(&p, &ClusterConfig::new(2)).unwrap();
        assert_eq!(r.assignment.indices(), &[0, 0, 1]);
        assert_eq!(r.codebook.centers(), &[0.5, 9.0]);
        assert_eq!(msqe(&p, &r.assignment, &r.codebook).unwrap(), 0.5);
    }

    #[test]
    fn single_cluster_is_the_mean() {
        let r = kmeans_lloyd(&ps(&[1.0, 2.0, 6.0]), &ClusterConfig::new(1)).unwrap();
        assert_eq!(r.codebook.centers(), &[3.0]);
    }

    #[test]
    fn weighted_single_cluster_is_weighted_mean() {
        let r = hw_kmeans_lloyd(&ps(&[0.0, 4.0]), &cv(&[1.0, 3.0]), &ClusterConfig::new(1))
            .unwrap();
        assert_eq!(r.codebook.centers(), &[3.0]);
    }

    #[test]
    fn curvature_breaks_the_plain_tie() {
        let p = ps(&[-1.0, 0.0, 1.0]);
        let h = cv(&[4.0, 1.0, 1.0]);
        let r = hw_kmeans_lloyd(&p, &h, &ClusterConfig::new(2)).unwrap();
        assert_eq!(r.assignment.indices(), &[0, 1, 1]);
        assert_eq!(r.codebook.centers(), &[-1.0, 0.5]);
        assert_eq!(hw_distortion(&p, &h, &r.assignment, &r.codebook).unwrap(), 0.5);
    }

    #[test]
    fn empty_cluster_is_reseeded() {
        // Linspace puts the middle centre at 5, far from every value.
        let p = ps(&[0.0, 0.1, 0.2, 10.0]);
        let r = kmeans_lloyd(&p, &ClusterConfig::new(3)).unwrap();
        assert_eq!(r.codebook.k_effective(), 3);
    }

    #[test]
    fn too_few_distinct_values_leave_clusters_empty() {
        let r = kmeans_lloyd(&ps(&[2.0, 2.0, 2.0]), &ClusterConfig::new(3)).unwrap();
        assert_eq!(r.codebook.k_effective(), 1);
        assert_eq!(r.codebook.total(), 3);
    }

    #[test]
    fn zero_lambda_ecsq_equals_weighted_kmeans() {
        let p = ps(&[-2.0, -1.5, 0.0, 0.2, 0.4, 3.0, 3.3]);
        let h = cv(&[1.0, 2.0, 0.5, 1.5, 1.0, 4.0, 0.25]);
        let cfg = ClusterConfig::new(3);
        let hw = hw_kmeans_lloyd(&p, &h, &cfg).unwrap();
        let ec = ecsq_iterate(&p, &h, &EcsqConfig { cluster: cfg, lambda: 0.0 }).unwrap();
        assert_eq!(hw.assignment, ec.assignment);
        assert_eq!(hw.codebook, ec.codebook);
    }

    #[test]
    fn huge_lambda_collapses_to_one_cluster() {
        let p = ps(&[0.0, 1.0, 9.0]);
        let cfg = EcsqConfig {
            cluster: ClusterConfig::new(3),
            lambda: 1e6 * 9.0,
        };
        let r = ecsq_iterate(&p, &CurvatureDiag::identity(3), &cfg).unwrap();
        assert_eq!(r.codebook.k_effective(), 1);
    }

    #[test]
    fn negative_lambda_is_rejected() {
        let cfg = EcsqConfig {
            cluster: ClusterConfig::new(2),
            lambda: -1.0,
        };
        assert!(ecsq_iterate(&ps(&[0.0, 1.0]), &CurvatureDiag::identity(2), &cfg).is_err());
    }

    #[test]
    fn initialisers() {
        let v = [0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0];
        let mut cfg = ClusterConfig::new(3);
        assert_eq!(initial_centers(&v, &cfg), vec![0.0, 3.5, 7.0]);
        cfg.init = Init::Quantile;
        assert_eq!(initial_centers(&v, &cfg), vec![1.0, 4.0, 6.0]);
        cfg.init = Init::SeededRandom;
        let c = initial_centers(&v, &cfg);
        assert_eq!(c.len(), 3);
        assert_eq!(c, initial_centers(&v, &cfg));
        assert!(c.iter().all(|x| v.contains(x)));
    }

    fn monotone(trace: &[f64]) -> bool {
        trace.windows(2).all(|w| w[1] <= w[0] + 1e-12 * w[0].abs())
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn traces_never_increase(
            values in prop::collection::vec(-5.0f64..5.0, 2..60),
            k in 1usize..8,
            lambda in 0.0f64..3.0,
        ) {
            let p = ps(&values);
            let h: Vec<f64> = values.iter().map(|v| 0.1 + v.abs()).collect();
            let h = cv(&h);
            let cfg = ClusterConfig::new(k);
            prop_assert!(monotone(&kmeans_lloyd(&p, &cfg).unwrap().trace));
            prop_assert!(monotone(&hw_kmeans_lloyd(&p, &h, &cfg).unwrap().trace));
            let ec = ecsq_iterate(&p, &h, &EcsqConfig { cluster: cfg, lambda }).unwrap();
            prop_assert!(monotone(&ec.trace));
        }

        #[test]
        fn constant_curvature_matches_plain_kmeans(
            values in prop::collection::vec(-5.0f64..5.0, 2..60),
            k in 1usize..8,
            scale in prop::sample::select(vec![0.25, 1.0, 2.0, 8.0]),
        ) {
            let p = ps(&values);
            let cfg = ClusterConfig::new(k);
            let plain = kmeans_lloyd(&p, &cfg).unwrap();
            let weighted = hw_kmeans_lloyd(&p, &cv(&vec![scale; values.len()]), &cfg).unwrap();
            prop_assert_eq!(plain.assignment, weighted.assignment);
        }

        #[test]
        fn scaling_parameters_scales_centres(
            values in prop::collection::vec(-5.0f64..5.0, 2..60),
            k in 1usize..6,
            s in prop::sample::select(vec![0.5, 2.0, 4.0]),
        ) {
            let cfg = ClusterConfig::new(k);
            let a = kmeans_lloyd(&ps(&values), &cfg).unwrap();
            let scaled: Vec<f64> = values.iter().map(|v| v * s).collect();
            let b = kmeans_lloyd(&ps(&scaled), &cfg).unwrap();
            prop_assert_eq!(&a.assignment, &b.assignment);
            for (ca, cb) in a.codebook.centers().iter().zip(b.codebook.centers()) {
                prop_assert!((ca * s - cb).abs() <= 1e-12 * cb.abs().max(1.0));
            }
        }

        #[test]
        fn converged_centres_are_stationary(
            values in prop::collection::vec(-5.0f64..5.0, 2..40),
            k in 1usize..5,
        ) {
            let p = ps(&values);
            let h = cv(&values.iter().map(|v| 0.5 + v * v).collect::<Vec<_>>());
            let r = hw_kmeans_lloyd(&p, &h, &ClusterConfig::new(k)).unwrap();
            let base = hw_distortion(&p, &h, &r.assignment, &r.codebook).unwrap();
            let range = 10.0;
            for j in 0..r.codebook.k() {
                for delta in [1e-3 * range, -1e-3 * range] {
                    let mut c = r.codebook.centers().to_vec();
                    c[j] += delta;
                    let book = r.codebook.with_centers(c).unwrap();
                    let moved = hw_distortion(&p, &h, &r.assignment, &book).unwrap();
                    prop_assert!(moved >= base - 1e-12 * base);
                }
            }
        }
    }
}
