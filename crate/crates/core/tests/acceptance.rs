//! End-to-end acceptance checks. Every test writes one `PASS`/`FAIL` line to
//! stderr and then asserts the same condition.

use std::io::Write;
use std::sync::OnceLock;
use std::thread;
use std::time::{Duration, Instant};

use netquant::coding::{
    build_huffman, compression_ratio_exact, decode_assignments, encode_assignments,
    entropy_of_counts, fixed_length_code, ratio_denominator, PrefixCode,
};
use netquant::pipeline::{run_pipeline, PipelineConfig, PipelineInputs, QuantizerKind};
use netquant::quantizers::{
    dequantize, ecsq_iterate, hw_kmeans_lloyd, kmeans_lloyd, scatter_dequantized, solve_lambda,
    uniform_quantize, Assignment, CenterRule, ClusterConfig, ClusterResult, Codebook, EcsqConfig,
    ENTROPY_SLACK,
};
use netquant::refnet::{
    adam_curvature, eval_accuracy, forward_loss, hessian_diag_exact, hessian_diag_gn, mean_loss,
    train_adam, Activation, Dataset, LossKind, MlpSpec, SyntheticTask, Targets, TaskConfig,
    TrainConfig, TrainedModel,
};
use netquant::store::{CurvatureDiag, CurvatureSource, ParamSet};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Percentage points expressed as an accuracy fraction.
const PP: f64 = 0.01;

/// Writes straight to stderr so the line survives the test harness's output
/// capture.
fn verdict(name: &str, ok: bool, elapsed: Duration, limit: Duration, detail: &str) -> bool {
    let pass = ok && elapsed < limit;
    let line = format!(
        "{} {name}: {detail} [{:.1}s, limit {}s]\n",
        if pass { "PASS" } else { "FAIL" },
        elapsed.as_secs_f64(),
        limit.as_secs()
    );
    let _ = std::io::stderr().lock().write_all(line.as_bytes());
    pass
}

fn params(values: Vec<f64>) -> ParamSet {
    ParamSet::single("w", values).unwrap()
}

fn curvature(values: Vec<f64>) -> CurvatureDiag {
    CurvatureDiag::new(values, CurvatureSource::ExactHessian).unwrap()
}

fn non_increasing(trace: &[f64]) -> bool {
    trace.windows(2).all(|w| w[1] <= w[0] + 1e-12 * w[0].abs())
}

fn close(a: f64, b: f64, rel: f64) -> bool {
    (a - b).abs() <= rel * a.abs().max(b.abs()).max(1e-300)
}

/// `(1/N) Σ h_i |w_i − c_{a(i)}|² + λ H(p)` with weighted-mean centres and
/// empirical proportions, recomputed from the labels alone. Empty labels
/// contribute nothing.
fn objective_from_labels(w: &[f64], h: &[f64], labels: &[usize], k: usize, lambda: f64) -> f64 {
    let mut mass = vec![0.0; k];
    let mut moment = vec![0.0; k];
    let mut counts = vec![0usize; k];
    for ((&x, &hx), &j) in w.iter().zip(h).zip(labels) {
        mass[j] += hx;
        moment[j] += hx * x;
        counts[j] += 1;
    }
    let centres: Vec<f64> = (0..k)
        .map(|j| if counts[j] > 0 { moment[j] / mass[j] } else { 0.0 })
        .collect();
    let n = w.len() as f64;
    let distortion: f64 = w
        .iter()
        .zip(h)
        .zip(labels)
        .map(|((&x, &hx), &j)| hx * (x - centres[j]).powi(2))
        .sum();
    let entropy: f64 = counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.log2()
        })
        .sum();
    distortion / n + lambda * entropy
}

// ---------------------------------------------------------------------------
// Exact ratio accounting

#[test]
fn exact_ratio_matches_serialized_bits() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0xA1);
    let mut failures = Vec::new();
    for case in 0..100 {
        let n = rng.random_range(1..=100_000usize);
        let k = rng.random_range(1..=64usize);
        // Skewed cluster popularity so Huffman lengths vary.
        let weights: Vec<f64> = (0..k).map(|_| rng.random_range(0.0f64..6.0).exp()).collect();
        let total: f64 = weights.iter().sum();
        let labels: Vec<usize> = (0..n)
            .map(|_| {
                let mut u = rng.random_range(0.0..total);
                weights
                    .iter()
                    .position(|&w| {
                        u -= w;
                        u < 0.0
                    })
                    .unwrap_or(k - 1)
            })
            .collect();
        let assignment = Assignment::new(labels, k).unwrap();
        let centres: Vec<f64> = (0..k).map(|_| rng.random_range(-1.0..1.0)).collect();
        let book = Codebook::from_assignment(centres, &assignment).unwrap();
        let (assignment, book) = book.compact(&assignment).unwrap();
        let b = if case % 4 == 3 { 64 } else { 32 };
        for code in [
            fixed_length_code(book.k()).unwrap(),
            build_huffman(book.counts()).unwrap(),
        ] {
            let em = encode_assignments(&assignment, &book, &code, b, None).unwrap();
            let decoded = decode_assignments(&em).unwrap();
            let measured = decoded.breakdown;
            let exact = compression_ratio_exact(n, b, book.counts(), &code).unwrap();
            let direct = (n as f64 * b as f64) / measured.ratio_bits() as f64;
            let ok = exact.to_bits() == direct.to_bits()
                && ratio_denominator(b, book.counts(), &code) == measured.ratio_bits()
                && measured == em.breakdown
                && measured.total_bits() == em.total_bits()
                && decoded.assignment == assignment;
            if !ok {
                failures.push(format!("case {case} ({:?}): {exact} vs {direct}", code.scheme()));
            }
        }
    }
    let pass = verdict(
        "exact ratio vs serialized bits",
        failures.is_empty(),
        start.elapsed(),
        Duration::from_secs(10),
        &format!("200 encodings, {} mismatches", failures.len()),
    );
    assert!(pass, "{failures:?}");
}

// ---------------------------------------------------------------------------
// Entropy and Huffman optimality

/// Minimum of `Σ n_i l_i` over all length vectors satisfying Kraft.
fn optimal_prefix_cost(counts: &[usize]) -> u64 {
    let k = counts.len();
    let max_len = (k - 1).max(1) as u32;
    let mut lengths = vec![1u32; k];
    let mut best = u64::MAX;
    loop {
        let kraft: u64 = lengths.iter().map(|&l| 1u64 << (max_len - l)).sum();
        if kraft <= 1u64 << max_len {
            let cost = counts.iter().zip(&lengths).map(|(&c, &l)| c as u64 * l as u64).sum();
            best = best.min(cost);
        }
        let mut i = 0;
        loop {
            if i == k {
                return best;
            }
            if lengths[i] < max_len {
                lengths[i] += 1;
                break;
            }
            lengths[i] = 1;
            i += 1;
        }
    }
}

fn kraft_is_one(code: &PrefixCode) -> bool {
    let max = *code.lengths().iter().max().unwrap();
    let sum: u128 = code.lengths().iter().map(|&l| 1u128 << (max - l)).sum();
    sum == 1u128 << max
}

#[test]
fn huffman_lengths_are_optimal() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0xA2);
    let mut failures = Vec::new();
    let mut exhaustive = 0;
    for case in 0..1000 {
        let k = if case < 300 { rng.random_range(2..=6usize) } else { rng.random_range(2..=64usize) };
        let spread = rng.random_range(0.0f64..12.0);
        let counts: Vec<usize> =
            (0..k).map(|_| rng.random_range(0.0..spread).exp2().round() as usize + 1).collect();
        let code = build_huffman(&counts).unwrap();
        let h = entropy_of_counts(&counts);
        let avg = code.average_length(&counts);
        let mut ok = h <= avg + 1e-12 && avg < h + 1.0 && kraft_is_one(&code);
        if k <= 6 {
            exhaustive += 1;
            let cost: u64 =
                counts.iter().zip(code.lengths()).map(|(&c, &l)| c as u64 * l as u64).sum();
            ok &= cost == optimal_prefix_cost(&counts);
        }
        if !ok {
            failures.push(format!("{counts:?}: H {h} b̄ {avg} lengths {:?}", code.lengths()));
        }
    }
    let pass = verdict(
        "Shannon bounds and Huffman optimality",
        failures.is_empty(),
        start.elapsed(),
        Duration::from_secs(30),
        &format!("1000 distributions ({exhaustive} exhaustive), {} failures", failures.len()),
    );
    assert!(pass, "{failures:?}");
}

// ---------------------------------------------------------------------------
// Lloyd-type monotonicity and stability

/// No single point can move to another occupied cluster and lower the
/// objective.
fn one_point_stable(w: &[f64], h: &[f64], r: &ClusterResult, lambda: f64) -> bool {
    let k = r.codebook.k();
    let counts = r.codebook.counts();
    let mut labels = r.assignment.indices().to_vec();
    let base = objective_from_labels(w, h, &labels, k, lambda);
    for i in 0..w.len() {
        let home = labels[i];
        for j in (0..k).filter(|&j| j != home && counts[j] > 0) {
            labels[i] = j;
            let moved = objective_from_labels(w, h, &labels, k, lambda);
            labels[i] = home;
            if moved < base - 1e-10 * base.abs().max(1e-12) {
                return false;
            }
        }
    }
    true
}

fn random_instance(rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<f64>) {
    let n = rng.random_range(20..=300usize);
    let modes: Vec<f64> = (0..rng.random_range(1..=5)).map(|_| rng.random_range(-4.0..4.0)).collect();
    let w = (0..n)
        .map(|_| modes[rng.random_range(0..modes.len())] + rng.random_range(-0.8..0.8))
        .collect();
    let h = (0..n).map(|_| rng.random_range(0.05f64..5.0)).collect();
    (w, h)
}

#[test]
fn lloyd_objectives_never_increase() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0xA3);
    let lambdas = [0.0, 0.01, 0.05, 0.2, 0.5, 1.5];
    let mut failures = Vec::new();
    for case in 0..50 {
        let (w, h) = random_instance(&mut rng);
        let ones = vec![1.0; w.len()];
        let n = w.len() as f64;
        let k = rng.random_range(2..=8usize);
        let cfg = ClusterConfig { max_iters: 1000, ..ClusterConfig::new(k) };
        let ps = params(w.clone());
        let cv = curvature(h.clone());

        let km = kmeans_lloyd(&ps, &cfg).unwrap();
        let hw = hw_kmeans_lloyd(&ps, &cv, &cfg).unwrap();
        let mut runs = vec![("kmeans", km, &ones, 0.0, n), ("hw-kmeans", hw, &h, 0.0, n)];
        for &lambda in &lambdas {
            let r = ecsq_iterate(&ps, &cv, &EcsqConfig { cluster: cfg.clone(), lambda }).unwrap();
            runs.push(("ecsq", r, &h, lambda, 1.0));
        }
        for (name, r, weights, lambda, scale) in runs {
            let last = *r.trace.last().unwrap();
            let recomputed =
                scale * objective_from_labels(&w, weights, r.assignment.indices(), r.codebook.k(), lambda);
            let ok = r.converged
                && non_increasing(&r.trace)
                && close(last, recomputed, 1e-9)
                && one_point_stable(&w, weights, &r, lambda);
            if !ok {
                failures.push(format!("case {case} {name} λ={lambda}: trace {:?}", r.trace));
            }
        }
    }
    let pass = verdict(
        "monotone traces and one-point stability",
        failures.is_empty(),
        start.elapsed(),
        Duration::from_secs(30),
        &format!(
            "50 instances x (kmeans, hw-kmeans, ecsq at {} λ values), {} failures",
            lambdas.len(),
            failures.len()
        ),
    );
    assert!(pass, "{failures:?}");
}

// ---------------------------------------------------------------------------
// Exhaustive oracle on tiny instances

/// Lowest objective over all `k^N` labelings.
fn enumerate_optimum(w: &[f64], h: &[f64], k: usize, lambda: f64) -> f64 {
    let n = w.len();
    let mut labels = vec![0usize; n];
    let mut best = f64::INFINITY;
    loop {
        best = best.min(objective_from_labels(w, h, &labels, k, lambda));
        let mut i = 0;
        loop {
            if i == n {
                return best;
            }
            labels[i] += 1;
            if labels[i] < k {
                break;
            }
            labels[i] = 0;
            i += 1;
        }
    }
}

/// `k` groups whose gaps are at least four times the widest group.
fn separated_instance(rng: &mut ChaCha8Rng, n: usize, k: usize) -> (Vec<f64>, Vec<f64>) {
    let spread = rng.random_range(0.05..0.5);
    let mut w = Vec::with_capacity(n);
    let mut origin = rng.random_range(-3.0..0.0);
    for g in 0..k {
        let size = if g + 1 == k { n - w.len() } else { n / k };
        w.extend((0..size).map(|_| origin + rng.random_range(0.0..spread)));
        origin += spread + 4.0 * spread * rng.random_range(1.0..3.0);
    }
    let h = (0..n).map(|_| rng.random_range(0.2..3.0)).collect();
    (w, h)
}

fn gap_ratio(w: &[f64], groups: usize) -> f64 {
    let mut sorted = w.to_vec();
    sorted.sort_by(f64::total_cmp);
    let size = w.len() / groups;
    let bounds: Vec<(f64, f64)> = (0..groups)
        .map(|g| {
            let end = if g + 1 == groups { w.len() } else { (g + 1) * size };
            (sorted[g * size], sorted[end - 1])
        })
        .collect();
    let spread = bounds.iter().map(|(lo, hi)| hi - lo).fold(0.0, f64::max);
    let gap = bounds.windows(2).map(|p| p[1].0 - p[0].1).fold(f64::INFINITY, f64::min);
    gap / spread
}

#[test]
fn clustering_matches_exhaustive_enumeration() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0xA4);
    let mut failures = Vec::new();

    let toy = hw_kmeans_lloyd(
        &params(vec![-1.0, 0.0, 1.0]),
        &curvature(vec![4.0, 1.0, 1.0]),
        &ClusterConfig::new(2),
    )
    .unwrap();
    let toy_cost = *toy.trace.last().unwrap();
    let toy_opt = 3.0 * enumerate_optimum(&[-1.0, 0.0, 1.0], &[4.0, 1.0, 1.0], 2, 0.0);
    if toy.assignment.indices() != [0, 1, 1] || toy_cost != 0.5 || !close(toy_opt, 0.5, 1e-12) {
        failures.push(format!("toy: {:?} cost {toy_cost}", toy.assignment.indices()));
    }

    let mut separated = 0;
    for case in 0..40 {
        let n = rng.random_range(4..=12usize);
        let k = rng.random_range(2..=3usize);
        let well_separated = case % 2 == 0;
        let (w, h) = if well_separated {
            separated_instance(&mut rng, n, k)
        } else {
            random_instance_small(&mut rng, n)
        };
        if well_separated {
            assert!(gap_ratio(&w, k) >= 4.0);
            separated += 1;
        }
        let ones = vec![1.0; n];
        let nf = n as f64;
        let ps = params(w.clone());
        let cv = curvature(h.clone());
        let cfg = ClusterConfig::new(k);

        let hw = hw_kmeans_lloyd(&ps, &cv, &cfg).unwrap();
        let zero = ecsq_iterate(&ps, &cv, &EcsqConfig { cluster: cfg.clone(), lambda: 0.0 }).unwrap();
        if zero.assignment != hw.assignment {
            failures.push(format!("case {case}: λ=0 ecsq differs from hw-kmeans"));
        }

        let km = kmeans_lloyd(&ps, &cfg).unwrap();
        let lambda = rng.random_range(0.01..0.5);
        let ec = ecsq_iterate(&ps, &cv, &EcsqConfig { cluster: cfg.clone(), lambda }).unwrap();
        let checks = [
            ("kmeans", km.trace.last().unwrap() / nf, enumerate_optimum(&w, &ones, k, 0.0), true),
            ("hw-kmeans", hw.trace.last().unwrap() / nf, enumerate_optimum(&w, &h, k, 0.0), true),
            ("ecsq", *ec.trace.last().unwrap(), enumerate_optimum(&w, &h, k, lambda), false),
        ];
        for (name, got, optimum, lambda_free) in checks {
            let tol = 1e-9 * optimum.abs().max(1e-12);
            let mut ok = got >= optimum - tol;
            if well_separated && lambda_free {
                ok &= (got - optimum).abs() <= tol;
            }
            if !ok {
                failures.push(format!("case {case} {name}: {got} vs optimum {optimum}"));
            }
        }
    }
    let pass = verdict(
        "exhaustive-enumeration oracle",
        failures.is_empty(),
        start.elapsed(),
        Duration::from_secs(60),
        &format!("toy example + 40 instances ({separated} well separated), {} failures", failures.len()),
    );
    assert!(pass, "{failures:?}");
}

fn random_instance_small(rng: &mut ChaCha8Rng, n: usize) -> (Vec<f64>, Vec<f64>) {
    let w = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
    let h = (0..n).map(|_| rng.random_range(0.1..4.0)).collect();
    (w, h)
}

// ---------------------------------------------------------------------------
// Gradients and Hessian diagonals

fn random_dataset(rng: &mut ChaCha8Rng, n: usize, dim: usize, out: usize, loss: LossKind) -> Dataset {
    let inputs = (0..n * dim).map(|_| rng.random_range(-1.5..1.5)).collect();
    let targets = match loss {
        LossKind::SoftmaxCrossEntropy => Targets::Classes {
            labels: (0..n).map(|_| rng.random_range(0..out)).collect(),
            n_classes: out,
        },
        LossKind::MeanSquareError => Targets::Values {
            dim: out,
            values: (0..n * out).map(|_| rng.random_range(-1.0..1.0)).collect(),
        },
    };
    Dataset::new(inputs, dim, targets).unwrap()
}

fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let norm: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / norm
}

#[test]
fn curvature_matches_analytic_oracles() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0xA5);
    let mut failures = Vec::new();

    let cases = [
        (vec![3, 5, 4], Activation::Tanh, LossKind::SoftmaxCrossEntropy),
        (vec![4, 6, 3, 2], Activation::Tanh, LossKind::MeanSquareError),
        (vec![2, 3], Activation::None, LossKind::SoftmaxCrossEntropy),
        (vec![5, 4, 3], Activation::None, LossKind::MeanSquareError),
    ];
    let mut worst_grad = 0.0f64;
    for (widths, act, loss) in cases {
        let out = *widths.last().unwrap();
        let spec = MlpSpec::new(widths.clone(), act, loss).unwrap();
        let ds = random_dataset(&mut rng, 16, widths[0], out, loss);
        let w: Vec<f64> = (0..spec.param_count()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let (_, grad) = forward_loss(&spec, &w, &ds).unwrap();
        let step = 1e-5;
        let fd: Vec<f64> = (0..w.len())
            .map(|i| {
                let mut plus = w.clone();
                let mut minus = w.clone();
                plus[i] += step;
                minus[i] -= step;
                (mean_loss(&spec, &plus, &ds).unwrap() - mean_loss(&spec, &minus, &ds).unwrap())
                    / (2.0 * step)
            })
            .collect();
        let rel = relative_error(&grad, &fd);
        worst_grad = worst_grad.max(rel);
        if rel > 1e-6 {
            failures.push(format!("{widths:?} {act:?} {loss:?}: gradient rel error {rel:e}"));
        }
    }

    // y = w·x + b on x ∈ {1, 2}: ∂²L/∂w² is the mean of x², 2.5.
    let scalar = MlpSpec::new(vec![1, 1], Activation::None, LossKind::MeanSquareError).unwrap();
    let ds = Dataset::new(vec![1.0, 2.0], 1, Targets::Values { dim: 1, values: vec![0.3, -0.7] })
        .unwrap();
    let mean_square_input = (1.0f64 * 1.0 + 2.0 * 2.0) / 2.0;
    let h = hessian_diag_exact(&scalar, &[0.4, 0.1], &ds).unwrap();
    if h.values()[0] != mean_square_input {
        failures.push(format!("scalar example: {} != {mean_square_input}", h.values()[0]));
    }

    let mut worst_gn = 0.0f64;
    for (widths, samples) in [(vec![3, 2], 10), (vec![6, 4], 25), (vec![1, 5], 7)] {
        let spec = MlpSpec::new(widths.clone(), Activation::None, LossKind::MeanSquareError).unwrap();
        let ds = random_dataset(&mut rng, samples, widths[0], widths[1], LossKind::MeanSquareError);
        let w: Vec<f64> = (0..spec.param_count()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let exact = hessian_diag_exact(&spec, &w, &ds).unwrap();
        let gn = hessian_diag_gn(&spec, &w, &ds).unwrap();
        for (a, b) in exact.values().iter().zip(gn.values()) {
            let rel = (a - b).abs() / a.abs().max(b.abs());
            worst_gn = worst_gn.max(rel);
            if rel > 1e-8 {
                failures.push(format!("{widths:?}: gauss-newton {b} vs exact {a}"));
            }
        }
    }
    let pass = verdict(
        "gradient and Hessian oracles",
        failures.is_empty(),
        start.elapsed(),
        Duration::from_secs(30),
        &format!("worst gradient rel {worst_grad:.1e}, worst GN rel {worst_gn:.1e}"),
    );
    assert!(pass, "{failures:?}");
}

// ---------------------------------------------------------------------------
// Desk-scale trends on the reference network

const SEEDS: u64 = 10;
const TRAIN_SAMPLES: usize = 4000;
const EVAL_SAMPLES: usize = 10_000;
/// Leading share of the hessian split used for the reduced-data Hessian.
const HESSIAN_SUBSET: usize = TRAIN_SAMPLES / 20;

struct Reference {
    spec: MlpSpec,
    train: Dataset,
    eval: Dataset,
    models: Vec<(TrainedModel, CurvatureDiag)>,
}

/// Ten `24-256-10` ReLU networks (8 970 parameters) trained with Adam on the
/// synthetic classifier, one per seed, with their exact Hessian diagonals
/// over the training split.
fn reference() -> &'static Reference {
    static CELL: OnceLock<Reference> = OnceLock::new();
    CELL.get_or_init(|| {
        let task = SyntheticTask::new(TaskConfig::default()).unwrap();
        let train = task.sample(TRAIN_SAMPLES, 0);
        let eval = task.sample(EVAL_SAMPLES, 1);
        let spec =
            MlpSpec::new(vec![24, 256, 10], Activation::Relu, LossKind::SoftmaxCrossEntropy).unwrap();
        let models = thread::scope(|s| {
            let handles: Vec<_> = (0..SEEDS)
                .map(|seed| {
                    let (spec, train, eval) = (&spec, &train, &eval);
                    s.spawn(move || {
                        let cfg = TrainConfig { seed, ..TrainConfig::default() };
                        let model = train_adam(spec, train, eval, &cfg).unwrap();
                        let h = hessian_diag_exact(spec, model.params.values(), train).unwrap();
                        (model, h)
                    })
                })
                .collect();
            handles.into_iter().map(|h| h.join().unwrap()).collect()
        });
        Reference { spec, train, eval, models }
    })
}

fn accuracy(r: &ClusterResult) -> f64 {
    let reference = reference();
    let (assignment, book) = r.codebook.compact(&r.assignment).unwrap();
    let w = dequantize(&assignment, &book).unwrap();
    eval_accuracy(&reference.spec, &w, &reference.eval).unwrap()
}

fn huffman_length(r: &ClusterResult) -> f64 {
    let (_, book) = r.codebook.compact(&r.assignment).unwrap();
    build_huffman(book.counts()).unwrap().average_length(book.counts())
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn cluster_config(k: usize, seed: u64) -> ClusterConfig {
    ClusterConfig { seed, ..ClusterConfig::new(k) }
}

#[test]
fn hessian_weighting_helps_fixed_length_coding() {
    let start = Instant::now();
    let reference = reference();
    let (mut plain, mut weighted) = (Vec::new(), Vec::new());
    for (seed, (model, h)) in reference.models.iter().enumerate() {
        let cfg = cluster_config(8, seed as u64);
        plain.push(accuracy(&kmeans_lloyd(&model.params, &cfg).unwrap()));
        weighted.push(accuracy(&hw_kmeans_lloyd(&model.params, h, &cfg).unwrap()));
    }
    let wins = plain.iter().zip(&weighted).filter(|(p, w)| w > p).count();
    let ok = mean(&weighted) >= mean(&plain) - 0.2 * PP && wins >= 6;
    let pass = verdict(
        "Hessian-weighted k-means vs k-means, k=8",
        ok,
        start.elapsed(),
        Duration::from_secs(600),
        &format!(
            "mean accuracy {:.4} vs {:.4}, strictly better in {wins}/{SEEDS} seeds",
            mean(&weighted),
            mean(&plain)
        ),
    );
    assert!(pass, "plain {plain:?} weighted {weighted:?}");
}

/// The candidate whose average length is closest to `target`, if any lies
/// within `tolerance`.
fn closest(
    candidates: impl IntoIterator<Item = ClusterResult>,
    target: f64,
    tolerance: f64,
) -> Option<(ClusterResult, f64)> {
    candidates
        .into_iter()
        .map(|r| {
            let len = huffman_length(&r);
            (r, len)
        })
        .filter(|(_, len)| (len - target).abs() <= tolerance)
        .min_by(|a, b| (a.1 - target).abs().total_cmp(&(b.1 - target).abs()))
}

#[test]
fn entropy_coded_quantizers_beat_kmeans_at_two_bits() {
    let start = Instant::now();
    let reference = reference();
    let tolerance = 0.1;
    let mut rows = Vec::new();
    let mut unmatched = Vec::new();
    for (seed, (model, h)) in reference.models.iter().enumerate() {
        let seed = seed as u64;
        // k-means sets the operating point: the k whose Huffman length is
        // nearest two bits. The other schemes must land within the
        // tolerance of that length.
        let (km, target) = closest(
            (2..=16).map(|k| kmeans_lloyd(&model.params, &cluster_config(k, seed)).unwrap()),
            2.0,
            f64::INFINITY,
        )
        .unwrap();
        let uniform = closest(
            (2..=64).map(|k| uniform_quantize(&model.params, None, k, CenterRule::Mean).unwrap()),
            target,
            tolerance,
        );
        // Geometric bisection on λ towards the k-means length.
        let (mut lo, mut hi) = (1e-12f64, 1e2f64);
        let mut ecsq_runs = Vec::new();
        for _ in 0..60 {
            let lambda = (lo * hi).sqrt();
            let cfg = EcsqConfig { cluster: cluster_config(32, seed), lambda };
            let r = ecsq_iterate(&model.params, h, &cfg).unwrap();
            let len = huffman_length(&r);
            ecsq_runs.push(r);
            if (len - target).abs() <= 0.02 {
                break;
            }
            if len > target {
                lo = lambda;
            } else {
                hi = lambda;
            }
        }
        let ecsq = closest(ecsq_runs, target, tolerance);
        if uniform.is_none() {
            unmatched.push(format!("seed {seed}: no uniform k within {tolerance} of {target:.3}"));
        }
        if ecsq.is_none() {
            unmatched.push(format!("seed {seed}: no ECSQ λ within {tolerance} of {target:.3}"));
        }
        let acc = |x: &Option<(ClusterResult, f64)>| x.as_ref().map_or(f64::NAN, |(r, _)| accuracy(r));
        rows.push((accuracy(&km), target, acc(&uniform), acc(&ecsq)));
    }
    let km_mean = mean(&rows.iter().map(|r| r.0).collect::<Vec<_>>());
    let uniform_mean = mean(&rows.iter().map(|r| r.2).collect::<Vec<_>>());
    let ecsq_mean = mean(&rows.iter().map(|r| r.3).collect::<Vec<_>>());
    let lengths: Vec<f64> = rows.iter().map(|r| r.1).collect();
    let (shortest, longest) = lengths
        .iter()
        .fold((f64::INFINITY, 0.0f64), |(lo, hi), &l| (lo.min(l), hi.max(l)));
    let floor = km_mean - 0.2 * PP;
    let ok = unmatched.is_empty() && uniform_mean >= floor && ecsq_mean >= floor;
    let pass = verdict(
        "uniform and ECSQ vs k-means at matched Huffman length ≈ 2 bits",
        ok,
        start.elapsed(),
        Duration::from_secs(900),
        &format!(
            "mean accuracy k-means {km_mean:.4}, uniform {uniform_mean:.4}, ECSQ {ecsq_mean:.4} \
             (floor {floor:.4}); k-means lengths {shortest:.3}..{longest:.3}; {} unmatched",
            unmatched.len()
        ),
    );
    assert!(pass, "rows (k-means, length, uniform, ecsq) {rows:?}; {unmatched:?}");
}

#[test]
fn cheaper_curvature_gives_similar_accuracy() {
    let start = Instant::now();
    let reference = reference();
    let subset = reference.train.head(HESSIAN_SUBSET);
    let (mut subset_gap, mut adam_gap) = (Vec::new(), Vec::new());
    for (seed, (model, h)) in reference.models.iter().enumerate() {
        let cfg = cluster_config(8, seed as u64);
        let full = accuracy(&hw_kmeans_lloyd(&model.params, h, &cfg).unwrap());
        let h_subset = hessian_diag_exact(&reference.spec, model.params.values(), &subset).unwrap();
        let partial = accuracy(&hw_kmeans_lloyd(&model.params, &h_subset, &cfg).unwrap());
        let adam = adam_curvature(&model.adam, 1e-8).unwrap();
        let from_adam = accuracy(&hw_kmeans_lloyd(&model.params, &adam, &cfg).unwrap());
        subset_gap.push((partial - full).abs());
        adam_gap.push((from_adam - full).abs());
    }
    let ok = mean(&subset_gap) <= 0.5 * PP && mean(&adam_gap) <= 0.5 * PP;
    let pass = verdict(
        "5% Hessian and Adam curvature vs full Hessian, k=8",
        ok,
        start.elapsed(),
        Duration::from_secs(600),
        &format!(
            "mean |Δaccuracy| {:.2} pp (5% split), {:.2} pp (Adam)",
            mean(&subset_gap) / PP,
            mean(&adam_gap) / PP
        ),
    );
    assert!(pass, "5%: {subset_gap:?} adam: {adam_gap:?}");
}

// ---------------------------------------------------------------------------
// Pruned pipeline round trip

#[test]
fn pruned_pipeline_decodes_exactly() {
    let start = Instant::now();
    let task = SyntheticTask::new(TaskConfig::default()).unwrap();
    let train = task.sample(1000, 0);
    let eval = task.sample(1000, 1);
    let spec =
        MlpSpec::new(vec![24, 128, 10], Activation::Relu, LossKind::SoftmaxCrossEntropy).unwrap();
    let model = train_adam(&spec, &train, &eval, &TrainConfig { steps: 400, ..TrainConfig::default() })
        .unwrap();
    let cfg = PipelineConfig {
        quantizer: QuantizerKind::Uniform,
        k: Some(8),
        prune_fraction: 0.8,
        ..PipelineConfig::default()
    };
    let inputs = PipelineInputs {
        params: Some(&model.params),
        network: Some(&spec),
        train: Some(&train),
        eval: Some(&eval),
        ..PipelineInputs::default()
    };
    let out = run_pipeline(&cfg, &inputs).unwrap();
    let n_total = model.params.len();
    let kept = n_total - (0.8 * n_total as f64).floor() as usize;

    let decoded = decode_assignments(&out.encoded).unwrap();
    let index = decoded.index.as_ref().expect("index section present");
    let rebuilt =
        scatter_dequantized(index.n_total, Some(&index.positions), &decoded.assignment, &decoded.codebook)
            .unwrap();
    let reported = out.report.compression.breakdown;
    let exact_values = rebuilt.len() == out.dequantized.len()
        && rebuilt.iter().zip(&out.dequantized).all(|(a, b)| a.to_bits() == b.to_bits());
    let ok = exact_values
        && decoded.assignment.len() == kept
        && index.n_total == n_total
        && out.positions.as_deref() == Some(index.positions.as_slice())
        && decoded.assignment == out.assignment
        && decoded.breakdown == reported
        && reported.total_bits() == out.encoded.total_bits()
        && reported.index_bits > 0;
    let pass = verdict(
        "prune 80% + uniform k=8 + Huffman + index coding round trip",
        ok,
        start.elapsed(),
        Duration::from_secs(60),
        &format!(
            "{kept}/{n_total} kept, {} bits on disk ({} index), exact ratio {:.3}",
            out.encoded.total_bits(),
            reported.index_bits,
            out.report.compression.ratio_exact
        ),
    );
    assert!(pass, "decoded {:?} vs reported {reported:?}", decoded.breakdown);
}

// ---------------------------------------------------------------------------
// Entropy target search

#[test]
fn lambda_search_meets_entropy_targets() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0xAA);
    let mut failures = Vec::new();
    let mut met = 0;
    for case in 0..20 {
        let n = rng.random_range(500..=3000usize);
        let k = rng.random_range(2..=32usize);
        let modes: Vec<f64> = (0..rng.random_range(1..=4)).map(|_| rng.random_range(-1.0..1.0)).collect();
        let w: Vec<f64> = (0..n)
            .map(|_| modes[rng.random_range(0..modes.len())] + 0.3 * rng.random_range(-1.0f64..1.0).powi(3))
            .collect();
        let h: Vec<f64> = (0..n).map(|_| rng.random_range(0.01f64..10.0)).collect();
        let target = (k as f64).log2() * rng.random_range(0.05..=1.0);
        let cfg = ClusterConfig { seed: case, ..ClusterConfig::new(k) };
        let sol = solve_lambda(&params(w), &curvature(h), &cfg, target).unwrap();
        let entropy = entropy_of_counts(sol.result.codebook.counts());
        let ok = if sol.met {
            met += 1;
            entropy <= target + ENTROPY_SLACK && close(entropy, sol.entropy, 1e-12)
        } else {
            entropy > target + ENTROPY_SLACK
        };
        if !ok {
            failures.push(format!("case {case}: k {k} R {target:.3} H {entropy:.3} met {}", sol.met));
        }
    }
    let pass = verdict(
        "λ search entropy contract",
        failures.is_empty(),
        start.elapsed(),
        Duration::from_secs(120),
        &format!("20 instances, {met} met the budget, {} violations", failures.len()),
    );
    assert!(pass, "{failures:?}");
}
