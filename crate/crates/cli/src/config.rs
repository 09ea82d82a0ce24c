//! Flat `key = value` pipeline configuration.

use std::path::Path;

use netquant::pipeline::PipelineConfig;
use netquant::{Error, Result};

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| Error::InvalidArgument(format!("{key}: cannot parse '{value}': {e}")))
}

fn optional<T: std::str::FromStr>(key: &str, value: &str) -> Result<Option<T>>
where
    T::Err: std::fmt::Display,
{
    match value {
        "" | "none" => Ok(None),
        v => parse(key, v).map(Some),
    }
}

/// Applies one setting. Unknown keys are errors.
pub fn apply(cfg: &mut PipelineConfig, key: &str, value: &str) -> Result<()> {
    let v = value.trim();
    match key.trim() {
        "quantizer" => cfg.quantizer = parse(key, v)?,
        "curvature" => cfg.curvature = parse(key, v)?,
        "coding" => cfg.coding = parse(key, v)?,
        "k" => cfg.k = optional(key, v)?,
        "target_ratio" => cfg.target_ratio = optional(key, v)?,
        "lambda" => cfg.lambda = optional(key, v)?,
        "ecsq_max_clusters" => cfg.ecsq_max_clusters = parse(key, v)?,
        "prune_fraction" => cfg.prune_fraction = parse(key, v)?,
        "fine_tune" => cfg.fine_tune = parse(key, v)?,
        "fine_tune_steps" => cfg.fine_tune_config.steps = parse(key, v)?,
        "fine_tune_batch_size" => cfg.fine_tune_config.batch_size = parse(key, v)?,
        "fine_tune_learning_rate" => cfg.fine_tune_config.learning_rate = parse(key, v)?,
        "seed" => {
            cfg.seed = parse(key, v)?;
            cfg.fine_tune_config.seed = cfg.seed;
        }
        "bits_per_param" => cfg.bits_per_param = parse(key, v)?,
        "uniform_center" => cfg.uniform_center = parse(key, v)?,
        "init" => cfg.init = parse(key, v)?,
        "max_iters" => cfg.max_iters = parse(key, v)?,
        "rel_tol" => cfg.rel_tol = parse(key, v)?,
        "hessian_samples" => cfg.hessian_samples = optional(key, v)?,
        "adam_epsilon" => cfg.adam_epsilon = parse(key, v)?,
        other => return Err(Error::InvalidArgument(format!("unknown setting '{other}'"))),
    }
    Ok(())
}

/// Applies every `key = value` line of `text`; `#` starts a comment.
pub fn apply_text(cfg: &mut PipelineConfig, text: &str) -> Result<()> {
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap().trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Error::InvalidArgument(format!("config line {}: expected key = value", lineno + 1))
        })?;
        apply(cfg, key, value)?;
    }
    Ok(())
}

pub fn apply_file(cfg: &mut PipelineConfig, path: &Path) -> Result<()> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    apply_text(cfg, &text)
}

/// `key=value` form of a single `--set` argument.
pub fn apply_assignment(cfg: &mut PipelineConfig, assignment: &str) -> Result<()> {
    let (key, value) = assignment
        .split_once('=')
        .ok_or_else(|| Error::InvalidArgument(format!("expected key=value, got '{assignment}'")))?;
    apply(cfg, key, value)
}

fn opt<T: ToString>(v: &Option<T>) -> String {
    v.as_ref().map_or_else(|| "none".into(), T::to_string)
}

/// Every setting, defaults included, in a form `apply_text` reads back.
pub fn render(cfg: &PipelineConfig) -> String {
    let ft = &cfg.fine_tune_config;
    let lines = [
        ("quantizer", cfg.quantizer.to_string()),
        ("curvature", cfg.curvature.to_string()),
        ("coding", cfg.coding.to_string()),
        ("k", opt(&cfg.k)),
        ("target_ratio", opt(&cfg.target_ratio)),
        ("lambda", opt(&cfg.lambda)),
        ("ecsq_max_clusters", cfg.ecsq_max_clusters.to_string()),
        ("prune_fraction", cfg.prune_fraction.to_string()),
        ("fine_tune", cfg.fine_tune.to_string()),
        ("fine_tune_steps", ft.steps.to_string()),
        ("fine_tune_batch_size", ft.batch_size.to_string()),
        ("fine_tune_learning_rate", ft.learning_rate.to_string()),
        ("seed", cfg.seed.to_string()),
        ("bits_per_param", cfg.bits_per_param.to_string()),
        ("uniform_center", cfg.uniform_center.to_string()),
        ("init", cfg.init.to_string()),
        ("max_iters", cfg.max_iters.to_string()),
        ("rel_tol", cfg.rel_tol.to_string()),
        ("hessian_samples", opt(&cfg.hessian_samples)),
        ("adam_epsilon", cfg.adam_epsilon.to_string()),
    ];
    let mut out = String::from("# netquant pipeline configuration\n");
    for (k, v) in lines {
        out.push_str(&format!("{k} = {v}\n"));
    }
    out
}
