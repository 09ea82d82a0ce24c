use super::{check_lengths, ecsq_iterate, hw_distortion, ClusterConfig, ClusterResult, EcsqConfig};
use crate::coding::entropy_of_counts;
use crate::store::{CurvatureDiag, ParamSet};
use crate::{Error, Result};

/// Allowed excess of the achieved entropy over the budget, in bits.
pub const ENTROPY_SLACK: f64 = 0.05;

const MAX_BISECTIONS: usize = 48;

#[derive(Clone, Debug, PartialEq)]
pub struct LambdaSolution {
    pub lambda: f64,
    pub result: ClusterResult,
    /// Entropy of the cluster proportions, bits per parameter.
    pub entropy: f64,
    /// `(1/N) Σ h_ii |w_i − c_j|²`.
    pub distortion: f64,
    /// Whether `entropy ≤ target + ENTROPY_SLACK`.
    pub met: bool,
    /// Number of ECSQ runs performed.
    pub evaluations: usize,
}

fn evaluate(
    ps: &ParamSet,
    cv: &CurvatureDiag,
    cluster: &ClusterConfig,
    lambda: f64,
) -> Result<(ClusterResult, f64, f64)> {
    let result = ecsq_iterate(
        ps,
        cv,
        &EcsqConfig {
            cluster: cluster.clone(),
            lambda,
        },
    )?;
    let entropy = entropy_of_counts(result.codebook.counts());
    let distortion =
        hw_distortion(ps, cv, &result.assignment, &result.codebook)? / ps.len() as f64;
    Ok((result, entropy, distortion))
}

/// Searches `λ` so that ECSQ meets an entropy budget of `target_bits`.
///
/// `λ = 0` is tried first. Otherwise the search bisects (geometrically) on
/// `(0, λ_max]` with `λ_max = 10 · max h · range²`, moving towards larger `λ`
/// while the achieved entropy exceeds the target. Among all runs with
/// entropy at most `target_bits + ENTROPY_SLACK` the one with the smallest
/// distortion is returned. If even `λ_max` misses the budget, its run is
/// returned with `met == false`.
pub fn solve_lambda(
    ps: &ParamSet,
    cv: &CurvatureDiag,
    cluster: &ClusterConfig,
    target_bits: f64,
) -> Result<LambdaSolution> {
    check_lengths(ps, cv)?;
    if !(target_bits > 0.0) || !target_bits.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "entropy target must be positive, got {target_bits}"
        )));
    }
    let limit = target_bits + ENTROPY_SLACK;
    let mut evaluations = 0;
    let mut best: Option<LambdaSolution> = None;
    let mut consider = |lambda: f64, result: ClusterResult, entropy: f64, distortion: f64| {
        if entropy > limit {
            return;
        }
        let better = best.as_ref().is_none_or(|b| distortion < b.distortion);
        if better {
            best = Some(LambdaSolution {
                lambda,
                result,
                entropy,
                distortion,
                met: true,
                evaluations: 0,
            });
        }
    };

    let (r0, h0, d0) = evaluate(ps, cv, cluster, 0.0)?;
    evaluations += 1;
    if h0 <= limit {
        return Ok(LambdaSolution {
            lambda: 0.0,
            result: r0,
            entropy: h0,
            distortion: d0,
            met: true,
            evaluations,
        });
    }

    let values = ps.values();
    let (min, max) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let h_max = cv.values().iter().cloned().fold(0.0, f64::max);
    let lambda_max = 10.0 * h_max * (max - min).powi(2);

    let (r_hi, h_hi, d_hi) = evaluate(ps, cv, cluster, lambda_max)?;
    evaluations += 1;
    if h_hi > limit {
        return Ok(LambdaSolution {
            lambda: lambda_max,
            result: r_hi,
            entropy: h_hi,
            distortion: d_hi,
            met: false,
            evaluations,
        });
    }
    consider(lambda_max, r_hi, h_hi, d_hi);

    let mut lo = lambda_max * 1e-12;
    let mut hi = lambda_max;
    for _ in 0..MAX_BISECTIONS {
        let mid = (lo * hi).sqrt();
        let (r, h, d) = evaluate(ps, cv, cluster, mid)?;
        evaluations += 1;
        consider(mid, r, h, d);
        if h > target_bits {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi / lo < 1.0 + 1e-9 {
            break;
        }
    }

    let mut solution = best.expect("lambda_max run is feasible");
    solution.evaluations = evaluations;
    Ok(solution)
}
