//! End-to-end compression: prune, compact, curvature, quantize, code,
//! fine-tune and evaluate.

use std::fmt;
use std::str::FromStr;

use log::info;
use serde::{Deserialize, Serialize};

use crate::coding::{
    build_huffman, encode_assignments, entropy_budget, fixed_length_code, CodeScheme,
    CompressionReport, EncodedModel, IndexSection,
};
use crate::quantizers::{
    ecsq_iterate, hw_kmeans_lloyd, kmeans_lloyd, scatter_dequantized, solve_lambda,
    uniform_quantize, Assignment, CenterRule, ClusterConfig, ClusterResult, Codebook, EcsqConfig,
    Init,
};
use crate::refnet::{
    adam_curvature, eval_accuracy, fine_tune_centers, hessian_diag_exact, hessian_diag_gn,
    prune_magnitude, AdamState, Dataset, FineTuneConfig, MlpSpec,
};
use crate::store::{compact_unpruned, CurvatureDiag, CurvatureSource, ParamSet, PruneMask};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum QuantizerKind {
    Kmeans,
    HwKmeans,
    Uniform,
    Ecsq,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CurvatureKind {
    Exact,
    GaussNewton,
    Adam,
    Identity,
}

macro_rules! named_enum {
    ($ty:ty, $what:literal, $($variant:path => $name:literal),+ $(,)?) => {
        impl $ty {
            pub fn name(self) -> &'static str {
                match self {
                    $($variant => $name,)+
                }
            }
        }

        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.name())
            }
        }

        impl FromStr for $ty {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($name => Ok($variant),)+
                    other => Err(Error::InvalidArgument(format!(
                        concat!("unknown ", $what, " '{}'"),
                        other
                    ))),
                }
            }
        }
    };
}

named_enum!(QuantizerKind, "quantizer",
    QuantizerKind::Kmeans => "kmeans",
    QuantizerKind::HwKmeans => "hw-kmeans",
    QuantizerKind::Uniform => "uniform",
    QuantizerKind::Ecsq => "ecsq",
);

named_enum!(CurvatureKind, "curvature source",
    CurvatureKind::Exact => "exact",
    CurvatureKind::GaussNewton => "gauss-newton",
    CurvatureKind::Adam => "adam",
    CurvatureKind::Identity => "identity",
);

named_enum!(CodeScheme, "coding scheme",
    CodeScheme::Fixed => "fixed",
    CodeScheme::Huffman => "huffman",
);

named_enum!(CenterRule, "centre rule",
    CenterRule::Mean => "mean",
    CenterRule::HessianWeightedMean => "hessian-weighted-mean",
);

named_enum!(Init, "initialisation",
    Init::Linspace => "linspace",
    Init::Quantile => "quantile",
    Init::SeededRandom => "seeded-random",
);

impl CurvatureKind {
    fn source(self) -> CurvatureSource {
        match self {
            CurvatureKind::Exact => CurvatureSource::ExactHessian,
            CurvatureKind::GaussNewton => CurvatureSource::GaussNewton,
            CurvatureKind::Adam => CurvatureSource::AdamSqrtMoment,
            CurvatureKind::Identity => CurvatureSource::Identity,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub quantizer: QuantizerKind,
    pub curvature: CurvatureKind,
    pub coding: CodeScheme,
    /// Number of clusters. For ECSQ with a target ratio this is unset and
    /// `ecsq_max_clusters` bounds the search instead.
    pub k: Option<usize>,
    /// Target compression ratio `C`; ECSQ only.
    pub target_ratio: Option<f64>,
    /// Fixed Lagrange multiplier for ECSQ with explicit `k`.
    pub lambda: Option<f64>,
    pub ecsq_max_clusters: usize,
    pub prune_fraction: f64,
    pub fine_tune: bool,
    pub fine_tune_config: FineTuneConfig,
    pub seed: u64,
    /// `b`, bits per stored centre and per original parameter.
    pub bits_per_param: u32,
    pub uniform_center: CenterRule,
    pub init: Init,
    pub max_iters: usize,
    pub rel_tol: f64,
    /// Use only the first this-many samples of the hessian split.
    pub hessian_samples: Option<usize>,
    /// Added to `sqrt(v̂)` for the Adam curvature proxy.
    pub adam_epsilon: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            quantizer: QuantizerKind::Kmeans,
            curvature: CurvatureKind::Exact,
            coding: CodeScheme::Huffman,
            k: None,
            target_ratio: None,
            lambda: None,
            ecsq_max_clusters: 32,
            prune_fraction: 0.0,
            fine_tune: false,
            fine_tune_config: FineTuneConfig::default(),
            seed: 0,
            bits_per_param: 32,
            uniform_center: CenterRule::Mean,
            init: Init::Linspace,
            max_iters: 200,
            rel_tol: 1e-7,
            hessian_samples: None,
            adam_epsilon: 1e-8,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        match self.quantizer {
            QuantizerKind::Ecsq => {
                if self.k.is_some() == self.target_ratio.is_some() {
                    return bad("ecsq needs exactly one of k and target_ratio".into());
                }
                if self.target_ratio.is_some() && self.lambda.is_some() {
                    return bad("lambda is searched when target_ratio is given".into());
                }
            }
            q => {
                if self.k.is_none() {
                    return bad(format!("{q} needs k"));
                }
                if self.target_ratio.is_some() || self.lambda.is_some() {
                    return bad(format!("target_ratio and lambda apply to ecsq only, not {q}"));
                }
            }
        }
        if self.k == Some(0) || self.ecsq_max_clusters == 0 {
            return bad("cluster counts must be positive".into());
        }
        if let Some(c) = self.target_ratio {
            if !(c > 0.0) || !c.is_finite() {
                return bad(format!("target_ratio must be positive, got {c}"));
            }
        }
        if let Some(l) = self.lambda {
            if !(l >= 0.0) || !l.is_finite() {
                return bad(format!("lambda must be nonnegative, got {l}"));
            }
        }
        if !(0.0..1.0).contains(&self.prune_fraction) {
            return bad(format!("prune_fraction must lie in [0, 1), got {}", self.prune_fraction));
        }
        if self.bits_per_param != 32 && self.bits_per_param != 64 {
            return bad(format!("bits_per_param must be 32 or 64, got {}", self.bits_per_param));
        }
        if self.hessian_samples == Some(0) {
            return bad("hessian_samples must be positive".into());
        }
        if !(self.adam_epsilon >= 0.0) {
            return bad("adam_epsilon must be nonnegative".into());
        }
        Ok(())
    }

    fn cluster_config(&self, k: usize) -> ClusterConfig {
        ClusterConfig {
            k,
            init: self.init,
            max_iters: self.max_iters,
            rel_tol: self.rel_tol,
            seed: self.seed,
        }
    }

    fn needs_curvature(&self) -> bool {
        match self.quantizer {
            QuantizerKind::Kmeans => false,
            QuantizerKind::Uniform => self.uniform_center == CenterRule::HessianWeightedMean,
            QuantizerKind::HwKmeans | QuantizerKind::Ecsq => true,
        }
    }
}

/// Everything the pipeline may draw on. Only `params` is mandatory; the
/// other inputs are required by particular configurations.
#[derive(Clone, Copy, Debug, Default)]
pub struct PipelineInputs<'a> {
    pub params: Option<&'a ParamSet>,
    pub network: Option<&'a MlpSpec>,
    pub mask: Option<&'a PruneMask>,
    /// Precomputed curvature, used when its source matches the request.
    pub curvature: Option<&'a CurvatureDiag>,
    pub adam: Option<&'a AdamState>,
    pub train: Option<&'a Dataset>,
    pub eval: Option<&'a Dataset>,
    /// Defaults to `train`.
    pub hessian: Option<&'a Dataset>,
}

/// Report of one pipeline run: configuration echo, search outcome and the
/// compression figures.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub quantizer: QuantizerKind,
    pub curvature: Option<CurvatureSource>,
    pub seed: u64,
    pub k_requested: Option<usize>,
    pub target_ratio: Option<f64>,
    /// `R = b / C` when a target ratio was given.
    pub entropy_budget: Option<f64>,
    pub lambda: Option<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub pruned: usize,
    pub curvature_clamped: usize,
    pub fine_tune: Option<FineTuneConfig>,
    pub compression: CompressionReport,
}

#[derive(Clone, Debug)]
pub struct PipelineOutput {
    pub encoded: EncodedModel,
    pub report: PipelineReport,
    pub assignment: Assignment,
    /// Final centres at storage precision.
    pub codebook: Codebook,
    /// Original index of every quantized entry; `None` without pruning.
    pub positions: Option<Vec<usize>>,
    /// The reconstructed full-length parameter vector.
    pub dequantized: Vec<f64>,
}

fn round_to_storage(codebook: &Codebook, b: u32) -> Result<Codebook> {
    if b == 64 {
        return Ok(codebook.clone());
    }
    codebook.with_centers(codebook.centers().iter().map(|&c| c as f32 as f64).collect())
}

/// Curvature of the requested kind over the full parameter vector.
pub fn compute_curvature(
    cfg: &PipelineConfig,
    inputs: &PipelineInputs,
    params: &ParamSet,
) -> Result<CurvatureDiag> {
    if let Some(cv) = inputs.curvature {
        if cv.source() == cfg.curvature.source() && cv.len() == params.len() {
            return Ok(cv.clone());
        }
    }
    let missing = |what: &str| {
        Err(Error::InvalidArgument(format!(
            "{} curvature needs {what}",
            cfg.curvature
        )))
    };
    match cfg.curvature {
        CurvatureKind::Identity => Ok(CurvatureDiag::identity(params.len())),
        CurvatureKind::Adam => match inputs.adam {
            Some(state) => adam_curvature(state, cfg.adam_epsilon),
            None => missing("an Adam state"),
        },
        CurvatureKind::Exact | CurvatureKind::GaussNewton => {
            let Some(spec) = inputs.network else {
                return missing("a network description");
            };
            let Some(ds) = inputs.hessian.or(inputs.train) else {
                return missing("a hessian or training split");
            };
            let ds = match cfg.hessian_samples {
                Some(n) if n < ds.len() => ds.head(n),
                _ => ds.clone(),
            };
            if cfg.curvature == CurvatureKind::Exact {
                hessian_diag_exact(spec, params.values(), &ds)
            } else {
                hessian_diag_gn(spec, params.values(), &ds)
            }
        }
    }
}

fn quantize(
    cfg: &PipelineConfig,
    ps: &ParamSet,
    cv: &CurvatureDiag,
) -> Result<(ClusterResult, Option<f64>, Option<f64>)> {
    match cfg.quantizer {
        QuantizerKind::Kmeans => Ok((kmeans_lloyd(ps, &cfg.cluster_config(cfg.k.unwrap()))?, None, None)),
        QuantizerKind::HwKmeans => Ok((
            hw_kmeans_lloyd(ps, cv, &cfg.cluster_config(cfg.k.unwrap()))?,
            None,
            None,
        )),
        QuantizerKind::Uniform => {
            let curv = (cfg.uniform_center == CenterRule::HessianWeightedMean).then_some(cv);
            Ok((uniform_quantize(ps, curv, cfg.k.unwrap(), cfg.uniform_center)?, None, None))
        }
        QuantizerKind::Ecsq => match (cfg.k, cfg.target_ratio) {
            (Some(k), _) => {
                let lambda = cfg.lambda.unwrap_or(0.0);
                let ecsq = EcsqConfig {
                    cluster: cfg.cluster_config(k),
                    lambda,
                };
                Ok((ecsq_iterate(ps, cv, &ecsq)?, Some(lambda), None))
            }
            (None, Some(c)) => {
                if c >= cfg.bits_per_param as f64 {
                    return Err(Error::Infeasible(format!(
                        "ratio {c} needs fewer than one bit per parameter, below any prefix code"
                    )));
                }
                let budget = entropy_budget(cfg.bits_per_param, c)?;
                let cluster = cfg.cluster_config(cfg.ecsq_max_clusters);
                let sol = solve_lambda(ps, cv, &cluster, budget)?;
                if !sol.met {
                    return Err(Error::Infeasible(format!(
                        "entropy {:.4} bits exceeds the budget of {budget:.4} bits for ratio {c}",
                        sol.entropy
                    )));
                }
                Ok((sol.result, Some(sol.lambda), Some(budget)))
            }
            (None, None) => unreachable!("validated"),
        },
    }
}

/// Runs the whole pipeline in memory. Nothing is written to disk.
pub fn run_pipeline(cfg: &PipelineConfig, inputs: &PipelineInputs) -> Result<PipelineOutput> {
    cfg.validate()?;
    let original = inputs
        .params
        .ok_or_else(|| Error::InvalidArgument("no parameters given".into()))?;
    let n_total = original.len();
    if let Some(spec) = inputs.network {
        spec.check_params(original.values())?;
    }

    let mut mask = match inputs.mask {
        Some(m) if m.len() != n_total => {
            return Err(Error::LengthMismatch {
                what: "mask",
                expected: n_total,
                got: m.len(),
            })
        }
        Some(m) => Some(m.clone()),
        None => None,
    };
    if cfg.prune_fraction > 0.0 {
        let fresh = prune_magnitude(original, cfg.prune_fraction)?;
        let kept = match &mask {
            Some(m) => m.kept().iter().zip(fresh.kept()).map(|(&a, &b)| a && b).collect(),
            None => fresh.kept().to_vec(),
        };
        mask = Some(PruneMask::new(kept)?);
    }
    let params = match &mask {
        Some(m) => original.with_values(
            original
                .values()
                .iter()
                .zip(m.kept())
                .map(|(&v, &k)| if k { v } else { 0.0 })
                .collect(),
        )?,
        None => original.clone(),
    };
    let pruned = mask.as_ref().map_or(0, |m| n_total - m.popcount());

    let (curvature, curvature_source) = if cfg.needs_curvature() {
        let cv = compute_curvature(cfg, inputs, &params)?;
        let src = cv.source();
        (cv, Some(src))
    } else {
        (CurvatureDiag::identity(n_total), None)
    };
    info!(
        "quantizing {} of {n_total} parameters with {}",
        n_total - pruned,
        cfg.quantizer
    );

    let (qparams, qcurv, positions) = match &mask {
        Some(m) => {
            let c = compact_unpruned(&params, &curvature, m)?;
            (c.params, c.curvature, Some(c.positions))
        }
        None => (params.clone(), curvature.clone(), None),
    };

    let (result, lambda, budget) = quantize(cfg, &qparams, &qcurv)?;
    let (assignment, codebook) = result.codebook.compact(&result.assignment)?;
    let mut codebook = round_to_storage(&codebook, cfg.bits_per_param)?;

    let accuracy_of = |book: &Codebook| -> Result<Option<f64>> {
        match (inputs.network, inputs.eval) {
            (Some(spec), Some(eval)) => {
                let w = scatter_dequantized(n_total, positions.as_deref(), &assignment, book)?;
                Ok(Some(eval_accuracy(spec, &w, eval)?))
            }
            _ => Ok(None),
        }
    };
    let accuracy_unquantized = match (inputs.network, inputs.eval) {
        (Some(spec), Some(eval)) => Some(eval_accuracy(spec, params.values(), eval)?),
        _ => None,
    };
    let accuracy_pre_ft = accuracy_of(&codebook)?;

    let mut accuracy_post_ft = None;
    if cfg.fine_tune {
        let (Some(spec), Some(train), Some(eval)) = (inputs.network, inputs.train, inputs.eval)
        else {
            return Err(Error::InvalidArgument(
                "fine-tuning needs a network, a training split and an eval split".into(),
            ));
        };
        let tuned = fine_tune_centers(
            spec,
            positions.as_deref(),
            &assignment,
            &codebook,
            train,
            eval,
            &cfg.fine_tune_config,
        )?;
        codebook = round_to_storage(&tuned.codebook, cfg.bits_per_param)?;
        accuracy_post_ft = accuracy_of(&codebook)?;
    }

    let code = match cfg.coding {
        CodeScheme::Fixed => fixed_length_code(codebook.k())?,
        CodeScheme::Huffman => build_huffman(codebook.counts())?,
    };
    let index = positions.as_ref().map(|p| IndexSection {
        n_total,
        positions: p.clone(),
    });
    let encoded = encode_assignments(&assignment, &codebook, &code, cfg.bits_per_param, index.as_ref())?;

    let mut compression = CompressionReport::from_encoded(&encoded)?;
    compression.accuracy_unquantized = accuracy_unquantized;
    compression.accuracy_pre_ft = accuracy_pre_ft;
    compression.accuracy_post_ft = accuracy_post_ft;

    let dequantized = scatter_dequantized(n_total, positions.as_deref(), &assignment, &codebook)?;
    Ok(PipelineOutput {
        report: PipelineReport {
            quantizer: cfg.quantizer,
            curvature: curvature_source,
            seed: cfg.seed,
            k_requested: cfg.k,
            target_ratio: cfg.target_ratio,
            entropy_budget: budget,
            lambda,
            iterations: result.iterations,
            converged: result.converged,
            pruned,
            curvature_clamped: curvature.clamped(),
            fine_tune: cfg.fine_tune.then(|| cfg.fine_tune_config.clone()),
            compression,
        },
        encoded,
        assignment,
        codebook,
        positions,
        dequantized,
    })
}

/// Process exit status for an error: 2 configuration, 3 IO or malformed
/// artifact, 4 infeasible constraint, 5 numeric failure.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::InvalidArgument(_) | Error::LengthMismatch { .. } => 2,
        Error::Io { .. }
        | Error::Checksum { .. }
        | Error::Format(_)
        | Error::Truncated { .. }
        | Error::InvalidCode(_) => 3,
        Error::Infeasible(_) => 4,
        Error::Numeric(_) | Error::NonFinite { .. } => 5,
    }
}

/// One point of a sweep; unset fields fall back to the base configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub quantizer: QuantizerKind,
    pub coding: CodeScheme,
    pub k: Option<usize>,
    pub lambda: Option<f64>,
    pub target_ratio: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub point: SweepPoint,
    pub seed: u64,
    pub k_effective: Option<usize>,
    pub entropy: Option<f64>,
    pub average_length: Option<f64>,
    pub ratio_exact: Option<f64>,
    pub accuracy_pre_ft: Option<f64>,
    pub accuracy_post_ft: Option<f64>,
    /// `ok`, or `error<exit code>: message`.
    pub status: String,
}

pub const SWEEP_CSV_VERSION: &str = "# netquant sweep v1";

pub const SWEEP_CSV_COLUMNS: &str = "quantizer,coding,k,lambda,target_ratio,k_effective,entropy,\
average_length,ratio_exact,accuracy_pre_ft,accuracy_post_ft,seed,status";

/// Runs every point in order. Failed points become rows with an error
/// status; the sweep itself never fails.
pub fn run_sweep(base: &PipelineConfig, points: &[SweepPoint], inputs: &PipelineInputs) -> Vec<SweepRow> {
    points
        .iter()
        .map(|point| {
            let mut cfg = base.clone();
            cfg.quantizer = point.quantizer;
            cfg.coding = point.coding;
            cfg.k = point.k;
            cfg.lambda = point.lambda;
            cfg.target_ratio = point.target_ratio;
            match run_pipeline(&cfg, inputs) {
                Ok(out) => {
                    let c = &out.report.compression;
                    SweepRow {
                        point: point.clone(),
                        seed: cfg.seed,
                        k_effective: Some(c.k_effective),
                        entropy: Some(c.entropy),
                        average_length: Some(c.average_length),
                        ratio_exact: Some(c.ratio_exact),
                        accuracy_pre_ft: c.accuracy_pre_ft,
                        accuracy_post_ft: c.accuracy_post_ft,
                        status: "ok".into(),
                    }
                }
                Err(e) => SweepRow {
                    point: point.clone(),
                    seed: cfg.seed,
                    k_effective: None,
                    entropy: None,
                    average_length: None,
                    ratio_exact: None,
                    accuracy_pre_ft: None,
                    accuracy_post_ft: None,
                    status: format!("error{}: {e}", exit_code(&e)),
                },
            }
        })
        .collect()
}

fn csv_field<T: fmt::Display>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn csv_real(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

/// Frozen CSV rendering of sweep rows.
pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = format!("{SWEEP_CSV_VERSION}\n{SWEEP_CSV_COLUMNS}\n");
    for r in rows {
        let status = r.status.replace(['"', '\n', ','], " ");
        let line = [
            r.point.quantizer.to_string(),
            r.point.coding.to_string(),
            csv_field(r.point.k),
            csv_field(r.point.lambda),
            csv_field(r.point.target_ratio),
            csv_field(r.k_effective),
            csv_real(r.entropy),
            csv_real(r.average_length),
            csv_real(r.ratio_exact),
            csv_real(r.accuracy_pre_ft),
            csv_real(r.accuracy_post_ft),
            r.seed.to_string(),
            status,
        ]
        .join(",");
        out.push_str(&line);
        out.push('\n');
    }
    out
}
