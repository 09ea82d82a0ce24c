use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use log::info;
use netquant::coding::{decode_assignments, CompressionReport, EncodedModel};
use netquant::pipeline::{
    compute_curvature, run_pipeline, run_sweep, sweep_csv, CurvatureKind, PipelineConfig,
    PipelineInputs, QuantizerKind, SweepPoint,
};
use netquant::quantizers::scatter_dequantized;
use netquant::refnet::{
    eval_accuracy, prune_magnitude, train_adam, Activation, AdamState, Dataset, LossKind,
    MlpSpec, SyntheticTask, TaskConfig, TrainConfig,
};
use netquant::store::{load_model, save_model, PruneMask, SavedModel};
use netquant::{Error, Result};
use serde_json::json;

use crate::config;
use crate::{ConfigArgs, CurvatureArgs, DataArgs, PruneArgs, QuantizeArgs, ReportArgs, SweepArgs, TrainArgs};

pub const ADAM_FILE: &str = "adam.json";
pub const TRAIN_FILE: &str = "train.csv";
pub const EVAL_FILE: &str = "eval.csv";

/// Writes every file under a temporary name first, then renames them all,
/// so a failure part-way leaves no outputs behind.
fn write_outputs(dir: &Path, files: &[(&str, Vec<u8>)]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut staged = Vec::new();
    for (name, bytes) in files {
        let tmp = dir.join(format!(".{name}.tmp"));
        if let Err(e) = fs::write(&tmp, bytes) {
            for (t, _) in &staged {
                let _ = fs::remove_file(t);
            }
            return Err(Error::io(&tmp, e));
        }
        staged.push((tmp, dir.join(name)));
    }
    for (tmp, dest) in &staged {
        fs::rename(tmp, dest).map_err(|e| Error::io(dest, e))?;
    }
    Ok(())
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn load_adam(dir: &Path) -> Result<Option<AdamState>> {
    let path = dir.join(ADAM_FILE);
    if !path.exists() {
        return Ok(None);
    }
    let bytes = read(&path)?;
    serde_json::from_slice(&bytes)
        .map(Some)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

fn load_split(explicit: Option<&Path>, dir: &Path, default: &str, spec: Option<&MlpSpec>) -> Result<Option<Dataset>> {
    let classes = spec.map(MlpSpec::output_dim);
    let ds = match explicit {
        Some(p) => Some(Dataset::load_csv(p, classes)?),
        None => {
            let p = dir.join(default);
            if p.exists() {
                Some(Dataset::load_csv(&p, classes)?)
            } else {
                None
            }
        }
    };
    if let (Some(ds), Some(spec)) = (&ds, spec) {
        spec.check_dataset(ds)?;
    }
    Ok(ds)
}

/// A model directory with its optional sidecars and datasets.
struct Workspace {
    model: SavedModel,
    adam: Option<AdamState>,
    train: Option<Dataset>,
    eval: Option<Dataset>,
    hessian: Option<Dataset>,
}

impl Workspace {
    fn load(dir: &Path, data: &DataArgs) -> Result<Self> {
        let model = load_model(dir)?;
        let spec = model.network.as_ref();
        Ok(Workspace {
            adam: load_adam(dir)?,
            train: load_split(data.train.as_deref(), dir, TRAIN_FILE, spec)?,
            eval: load_split(data.eval.as_deref(), dir, EVAL_FILE, spec)?,
            hessian: match &data.hessian {
                Some(p) => load_split(Some(p), dir, "", spec)?,
                None => None,
            },
            model,
        })
    }

    fn inputs(&self) -> PipelineInputs<'_> {
        PipelineInputs {
            params: Some(&self.model.params),
            network: self.model.network.as_ref(),
            mask: self.model.mask.as_ref(),
            curvature: self.model.curvature.as_ref(),
            adam: self.adam.as_ref(),
            train: self.train.as_ref(),
            eval: self.eval.as_ref(),
            hessian: self.hessian.as_ref(),
        }
    }

    /// Sidecar files carried over to a derived model directory.
    fn sidecars(&self, dir: &Path) -> Result<Vec<(&'static str, Vec<u8>)>> {
        let mut files = Vec::new();
        for name in [ADAM_FILE, TRAIN_FILE, EVAL_FILE] {
            let p = dir.join(name);
            if p.exists() {
                files.push((name, read(&p)?));
            }
        }
        Ok(files)
    }
}

fn resolve_config(args: &ConfigArgs) -> Result<PipelineConfig> {
    let mut cfg = PipelineConfig::default();
    if let Some(path) = &args.config {
        config::apply_file(&mut cfg, path)?;
    }
    let flags = [
        ("quantizer", args.quantizer.clone()),
        ("k", args.k.map(|v| v.to_string())),
        ("target_ratio", args.target_ratio.map(|v| v.to_string())),
        ("lambda", args.lambda.map(|v| v.to_string())),
        ("curvature", args.curvature.clone()),
        ("coding", args.coding.clone()),
        ("prune_fraction", args.prune_fraction.map(|v| v.to_string())),
        ("seed", args.seed.map(|v| v.to_string())),
        ("hessian_samples", args.hessian_samples.map(|v| v.to_string())),
    ];
    for (key, value) in flags {
        if let Some(v) = value {
            config::apply(&mut cfg, key, &v)?;
        }
    }
    if args.fine_tune {
        cfg.fine_tune = true;
    }
    for s in &args.set {
        config::apply_assignment(&mut cfg, s)?;
    }
    Ok(cfg)
}

fn to_json<T: serde::Serialize>(v: &T) -> Vec<u8> {
    let mut out = serde_json::to_vec_pretty(v).expect("report serializes");
    out.push(b'\n');
    out
}

/// Writes to stdout, ignoring a closed pipe.
fn emit(bytes: &[u8]) {
    let mut out = std::io::stdout().lock();
    let _ = out.write_all(bytes).and_then(|()| out.flush());
}

pub fn quantize(args: &QuantizeArgs) -> Result<()> {
    let cfg = resolve_config(&args.config)?;
    cfg.validate()?;
    let ws = Workspace::load(&args.model, &args.data)?;
    let out = run_pipeline(&cfg, &ws.inputs())?;
    let c = &out.report.compression;
    info!(
        "k_eff {} H {:.4} b̄ {:.4} ratio {:.3}",
        c.k_effective, c.entropy, c.average_length, c.ratio_exact
    );
    write_outputs(
        &args.out,
        &[
            ("model.nq", out.encoded.bytes.clone()),
            ("report.json", to_json(&out.report)),
            ("config.txt", config::render(&cfg).into_bytes()),
        ],
    )?;
    emit(&to_json(&out.report));
    Ok(())
}

fn split_list<T: std::str::FromStr>(what: &str, list: &Option<String>) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    let Some(list) = list else { return Ok(Vec::new()) };
    list.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse()
                .map_err(|e| Error::InvalidArgument(format!("{what}: cannot parse '{s}': {e}")))
        })
        .collect()
}

/// Sweep points in a fixed order: quantizer, then coding, then the value
/// lists. ECSQ consumes lambda and target-ratio lists, the others `k`.
pub fn sweep_points(args: &SweepArgs, base: &PipelineConfig) -> Result<Vec<SweepPoint>> {
    let quantizers: Vec<QuantizerKind> = match split_list("quantizers", &args.quantizers)? {
        q if q.is_empty() => vec![base.quantizer],
        q => q,
    };
    let codings = match split_list("codings", &args.codings)? {
        c if c.is_empty() => vec![base.coding],
        c => c,
    };
    let ks: Vec<usize> = split_list("k-list", &args.k_list)?;
    let lambdas: Vec<f64> = split_list("lambda-list", &args.lambda_list)?;
    let ratios: Vec<f64> = split_list("ratio-list", &args.ratio_list)?;

    let mut points = Vec::new();
    for &quantizer in &quantizers {
        for &coding in &codings {
            let point = |k, lambda, target_ratio| SweepPoint {
                quantizer,
                coding,
                k,
                lambda,
                target_ratio,
            };
            if quantizer == QuantizerKind::Ecsq && (!lambdas.is_empty() || !ratios.is_empty()) {
                let ks = match (&ks[..], base.k) {
                    ([], Some(k)) => vec![k],
                    ([], None) => vec![base.ecsq_max_clusters],
                    (ks, _) => ks.to_vec(),
                };
                for &k in &ks {
                    points.extend(lambdas.iter().map(|&l| point(Some(k), Some(l), None)));
                }
                points.extend(ratios.iter().map(|&c| point(None, None, Some(c))));
            } else if ks.is_empty() {
                points.push(point(base.k, base.lambda, base.target_ratio));
            } else {
                points.extend(ks.iter().map(|&k| point(Some(k), None, None)));
            }
        }
    }
    if points.is_empty() {
        return Err(Error::InvalidArgument("the sweep has no points".into()));
    }
    Ok(points)
}

pub fn sweep(args: &SweepArgs) -> Result<()> {
    let base = resolve_config(&args.config)?;
    let points = sweep_points(args, &base)?;
    let ws = Workspace::load(&args.model, &args.data)?;
    let rows = run_sweep(&base, &points, &ws.inputs());
    let failed = rows.iter().filter(|r| r.status != "ok").count();
    if failed > 0 {
        log::warn!("{failed} of {} sweep points failed", rows.len());
    }
    let csv = sweep_csv(&rows);
    let name = args
        .out
        .file_name()
        .and_then(|n| n.to_str())
        .ok_or_else(|| Error::InvalidArgument("sweep output must be a file path".into()))?;
    let dir = match args.out.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    write_outputs(
        &dir,
        &[
            (name, csv.into_bytes()),
            ("sweep-config.txt", config::render(&base).into_bytes()),
        ],
    )?;
    Ok(())
}

pub fn report(args: &ReportArgs) -> Result<()> {
    let bytes = read(&args.input)?;
    let em = EncodedModel {
        breakdown: Default::default(),
        bytes,
    };
    let decoded = decode_assignments(&em)?;
    let mut rep = CompressionReport::from_decoded(&decoded, em.total_bits())?;

    if let Some(dir) = &args.model {
        let model = load_model(dir)?;
        let spec = model.network.as_ref().ok_or_else(|| {
            Error::InvalidArgument("the model directory has no network description".into())
        })?;
        let eval = load_split(args.eval.as_deref(), dir, EVAL_FILE, Some(spec))?
            .ok_or_else(|| Error::InvalidArgument("no eval split for accuracy".into()))?;
        let n_total = spec.param_count();
        if rep.n_total != n_total {
            return Err(Error::LengthMismatch {
                what: "encoded parameters",
                expected: n_total,
                got: rep.n_total,
            });
        }
        let positions = decoded.index.as_ref().map(|ix| ix.positions.as_slice());
        let w = scatter_dequantized(n_total, positions, &decoded.assignment, &decoded.codebook)?;
        rep.accuracy_pre_ft = Some(eval_accuracy(spec, &w, &eval)?);
        rep.accuracy_unquantized = Some(eval_accuracy(spec, model.params.values(), &eval)?);
    }

    let summary = json!({
        "accuracy_percent": rep.accuracy_pre_ft.map(|a| 100.0 * a),
        "compression_ratio": rep.ratio_measured,
        "compression_ratio_exact": rep.ratio_exact,
        "report": rep,
    });
    let text = to_json(&summary);
    if let Some(out) = &args.out {
        let dir = out.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        let name = out
            .file_name()
            .and_then(|n| n.to_str())
            .ok_or_else(|| Error::InvalidArgument("report output must be a file path".into()))?;
        write_outputs(dir, &[(name, text.clone())])?;
    }
    emit(&text);
    Ok(())
}

pub fn train_ref(args: &TrainArgs) -> Result<()> {
    let task = SyntheticTask::new(TaskConfig {
        n_classes: args.classes,
        dim: args.dim,
        blobs_per_class: args.blobs,
        separation: args.separation,
        noise: args.noise,
        seed: args.task_seed,
    })?;
    let train = task.sample(args.train_samples, 0);
    let eval = task.sample(args.eval_samples, 1);
    let hidden: Vec<usize> = split_list("hidden", &Some(args.hidden.clone()))?;
    let mut widths = vec![args.dim];
    widths.extend(hidden);
    widths.push(args.classes);
    let activation = match args.activation.as_str() {
        "relu" => Activation::Relu,
        "tanh" => Activation::Tanh,
        "none" => Activation::None,
        other => return Err(Error::InvalidArgument(format!("unknown activation '{other}'"))),
    };
    let spec = MlpSpec::new(widths, activation, LossKind::SoftmaxCrossEntropy)?;
    let cfg = TrainConfig {
        steps: args.steps,
        batch_size: args.batch_size,
        learning_rate: args.learning_rate,
        seed: args.seed,
        ..TrainConfig::default()
    };
    let trained = train_adam(&spec, &train, &eval, &cfg)?;
    info!(
        "trained {} parameters: loss {:.4}, eval accuracy {:.4}",
        spec.param_count(),
        trained.final_loss,
        trained.eval_accuracy
    );

    let mut model = SavedModel::new("refnet", trained.params.rounded_to_storage());
    model.network = Some(spec);
    let staging = tempfile::tempdir().map_err(|e| Error::io(std::env::temp_dir(), e))?;
    save_model(&model, staging.path())?;
    let mut files = collect_dir(staging.path())?;
    files.push((ADAM_FILE.into(), to_json(&trained.adam)));
    files.push((TRAIN_FILE.into(), train.to_csv()?.into_bytes()));
    files.push((EVAL_FILE.into(), eval.to_csv()?.into_bytes()));
    files.push((
        "train-summary.json".into(),
        to_json(&json!({
            "task": task.config(),
            "train": cfg,
            "param_count": model.params.len(),
            "final_loss": trained.final_loss,
            "eval_accuracy": trained.eval_accuracy,
        })),
    ));
    let refs: Vec<(&str, Vec<u8>)> = files.iter().map(|(n, b)| (n.as_str(), b.clone())).collect();
    write_outputs(&args.out, &refs)
}

fn collect_dir(dir: &Path) -> Result<Vec<(String, Vec<u8>)>> {
    let mut names: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
        .collect::<Result<_>>()?;
    names.sort();
    names
        .into_iter()
        .map(|p| {
            let name = p.file_name().unwrap().to_string_lossy().into_owned();
            Ok((name, read(&p)?))
        })
        .collect()
}

/// Saves `model` into `out` together with the carried-over sidecars.
fn write_model(out: &Path, model: &SavedModel, sidecars: Vec<(&'static str, Vec<u8>)>) -> Result<()> {
    let staging = tempfile::tempdir().map_err(|e| Error::io(std::env::temp_dir(), e))?;
    save_model(model, staging.path())?;
    let mut files = collect_dir(staging.path())?;
    files.extend(sidecars.into_iter().map(|(n, b)| (n.to_string(), b)));
    let refs: Vec<(&str, Vec<u8>)> = files.iter().map(|(n, b)| (n.as_str(), b.clone())).collect();
    write_outputs(out, &refs)
}

pub fn prune(args: &PruneArgs) -> Result<()> {
    let ws = Workspace::load(&args.model, &DataArgs::default())?;
    let fresh = prune_magnitude(&ws.model.params, args.fraction)?;
    let kept: Vec<bool> = match &ws.model.mask {
        Some(m) => m.kept().iter().zip(fresh.kept()).map(|(&a, &b)| a && b).collect(),
        None => fresh.kept().to_vec(),
    };
    let mask = PruneMask::new(kept)?;
    let values = ws
        .model
        .params
        .values()
        .iter()
        .zip(mask.kept())
        .map(|(&v, &k)| if k { v } else { 0.0 })
        .collect();
    let mut model = ws.model.clone();
    model.params = ws.model.params.with_values(values)?;
    model.mask = Some(mask);
    model.curvature = None;
    info!("pruned {} of {}", model.params.len() - model.mask.as_ref().unwrap().popcount(), model.params.len());
    write_model(&args.out, &model, ws.sidecars(&args.model)?)
}

pub fn curvature(args: &CurvatureArgs) -> Result<()> {
    let ws = Workspace::load(&args.model, &args.data)?;
    let source: CurvatureKind = args.source.parse()?;
    let cfg = PipelineConfig {
        curvature: source,
        hessian_samples: args.hessian_samples,
        adam_epsilon: args.adam_epsilon,
        ..PipelineConfig::default()
    };
    let mut inputs = ws.inputs();
    inputs.curvature = None;
    let cv = compute_curvature(&cfg, &inputs, &ws.model.params)?;
    info!("curvature from {source}: {} entries floored", cv.clamped());
    let mut model = ws.model.clone();
    model.curvature = Some(cv);
    write_model(&args.out, &model, ws.sidecars(&args.model)?)
}
