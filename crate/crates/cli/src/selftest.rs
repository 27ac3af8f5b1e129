//! Built-in invariant checks, small enough to run in a few seconds.

use std::time::Instant;

use gnsp_core::checkpoint;
use gnsp_core::encoder::{backward, finite_diff_grad, forward, init_stack, Activation};
use gnsp_core::linalg::{frobenius_norm, matmul};
use gnsp_core::losses::{cd_loss, classification_loss, map_loss};
use gnsp_core::projection::gram_from_activations;
use gnsp_core::{
    adaptive_split, build_projector, make_reference_set, make_task, project_update, summarize, train_task,
    AccuracyMatrix, ContinualState, DualEncoder, EigenSpectrum, Gradients, GramAccumulator, Matrix, ModelSpec, Split,
    TrainerConfig,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SelftestOptions {
    /// Negative control: adds a small diagonal offset to every built
    /// projector before the algebra checks, which must then fail.
    pub perturb_projector: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub group: &'static str,
    pub name: &'static str,
    /// Worst observed violation.
    pub residual: f64,
    pub bound: f64,
}

impl Check {
    pub fn passed(&self) -> bool {
        self.residual <= self.bound
    }

    pub fn line(&self) -> String {
        format!(
            "{} {}: {} residual={:.3e} bound={:.1e}",
            if self.passed() { "PASS" } else { "FAIL" },
            self.group,
            self.name,
            self.residual,
            self.bound
        )
    }
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
}

/// Relative mismatch used by every gradient check. Entries where both values
/// are below 1e-6 are compared with an absolute tolerance of 1e-7, rescaled so
/// that the same 1e-4 bound applies.
fn grad_mismatch(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| {
            let scale = a.abs().max(n.abs());
            if scale > 1e-6 {
                (a - n).abs() / scale
            } else {
                (a - n).abs() * 1e3
            }
        })
        .fold(0.0, f64::max)
}

fn fd_embeddings(m: &Matrix, f: impl Fn(&Matrix) -> f64, eps: f64) -> Vec<f64> {
    let mut x = m.clone();
    let mut out = Vec::with_capacity(m.data().len());
    for k in 0..m.data().len() {
        let orig = x.data()[k];
        x.data_mut()[k] = orig + eps;
        let up = f(&x);
        x.data_mut()[k] = orig - eps;
        let down = f(&x);
        x.data_mut()[k] = orig;
        out.push((up - down) / (2.0 * eps));
    }
    out
}

fn projector_algebra(opts: SelftestOptions) -> Vec<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let (mut idem, mut sym, mut tr) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..50 {
        let d = rng.random_range(2..=24);
        let n = rng.random_range(1..=2 * d);
        let x = random_matrix(&mut rng, n, d);
        let mut acc = GramAccumulator::new(&[d]);
        acc.accumulate(&[gram_from_activations(&x).unwrap()]).unwrap();
        let mut p = build_projector(&acc, rng.random_range(0.0..0.5)).unwrap();
        if opts.perturb_projector {
            for m in &mut p.per_layer {
                m.set(0, 0, m.get(0, 0) + 1e-3);
            }
        }
        for diag in p.diagnostics().unwrap() {
            idem = idem.max(diag.idempotence);
            sym = sym.max(diag.symmetry);
            tr = tr.max(diag.trace_defect);
        }
    }
    vec![
        Check {
            group: "projector",
            name: "idempotence |P^2-P|_F",
            residual: idem,
            bound: 1e-8,
        },
        Check {
            group: "projector",
            name: "symmetry |P-P^T|_max",
            residual: sym,
            bound: 1e-8,
        },
        Check {
            group: "projector",
            name: "trace vs null_dim",
            residual: tr,
            bound: 1e-6,
        },
    ]
}

fn null_space() -> Vec<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let (mut worst, mut dim_err) = (0.0f64, 0.0f64);
    for _ in 0..20 {
        let d = rng.random_range(3..=24);
        let r = rng.random_range(1..d);
        let n = rng.random_range(r..=2 * d);
        let x = matmul(&random_matrix(&mut rng, n, r), &random_matrix(&mut rng, r, d)).unwrap();
        let mut acc = GramAccumulator::new(&[d]);
        acc.accumulate(&[gram_from_activations(&x).unwrap()]).unwrap();
        let p = build_projector(&acc, 0.0).unwrap();
        dim_err = dim_err.max((p.null_dims[0] as f64 - (d - r) as f64).abs());
        let gc = rng.random_range(1..=8);
        let g = random_matrix(&mut rng, d, gc);
        let delta = project_update(
            &p,
            &Gradients {
                layers: vec![g.clone()],
            },
        )
        .unwrap();
        let xd = matmul(&x, &delta.layers[0]).unwrap();
        worst = worst.max(frobenius_norm(&xd) / (frobenius_norm(&x) * frobenius_norm(&g)));
    }
    vec![
        Check {
            group: "null-space",
            name: "|X P G|_F / (|X|_F |G|_F)",
            residual: worst,
            bound: 1e-8,
        },
        Check {
            group: "null-space",
            name: "null_dim = d - rank",
            residual: dim_err,
            bound: 0.0,
        },
    ]
}

fn adaptive_split_examples() -> Vec<Check> {
    let cases: [(&[f64], f64, usize); 3] = [
        (&[10.0, 1.0, 0.5, 0.5], 0.15, 2),
        (&[2.0, 1.0, 0.0, 0.0], 0.0, 2),
        (&[10.0, 1.0, 0.5, 0.5], 1.0, 4),
    ];
    let worst = cases
        .iter()
        .map(|(values, rho, k)| {
            let spectrum = EigenSpectrum {
                values: values.to_vec(),
                vectors: Matrix::identity(values.len()),
            };
            (adaptive_split(&spectrum, *rho).unwrap() as f64 - *k as f64).abs()
        })
        .fold(0.0, f64::max);
    vec![Check {
        group: "adaptive-split",
        name: "hand-computed split sizes",
        residual: worst,
        bound: 0.0,
    }]
}

fn gradients() -> Vec<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let eps = 1e-5;
    let (mut ce, mut cd, mut map, mut enc) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for _ in 0..5 {
        let b = rng.random_range(2..=5);
        let c = rng.random_range(2..=4);
        let d = rng.random_range(2..=5);
        let tau = rng.random_range(0.2..1.0);
        let img = random_matrix(&mut rng, b, d);
        let txt = random_matrix(&mut rng, c, d);
        let labels: Vec<usize> = (0..b).map(|_| rng.random_range(0..c)).collect();
        let out = classification_loss(&img, &txt, &labels, tau).unwrap();
        let num = fd_embeddings(&img, |m| classification_loss(m, &txt, &labels, tau).unwrap().value, eps);
        ce = ce.max(grad_mismatch(out.d_image_embeddings.data(), &num));

        let (ti, tt, si, st) = (
            random_matrix(&mut rng, b, d),
            random_matrix(&mut rng, b, d),
            random_matrix(&mut rng, b, d),
            random_matrix(&mut rng, b, d),
        );
        let out = cd_loss(&ti, &tt, &si, &st, tau).unwrap();
        let num = fd_embeddings(&si, |m| cd_loss(&ti, &tt, m, &st, tau).unwrap().value, eps);
        cd = cd.max(grad_mismatch(out.d_image_embeddings.data(), &num));

        let out = map_loss(&si, &st, tau).unwrap();
        let num = fd_embeddings(&si, |m| map_loss(m, &st, tau).unwrap().value, eps);
        map = map.max(grad_mismatch(out.d_image_embeddings.data(), &num));

        let dims: Vec<usize> = (0..rng.random_range(2..=4)).map(|_| rng.random_range(2..=6)).collect();
        let mut stack = init_stack(&dims, Activation::Gelu, rng.random()).unwrap();
        let x = random_matrix(&mut rng, b, dims[0]);
        let up = random_matrix(&mut rng, b, *dims.last().unwrap());
        let (_, trace) = forward(&stack, &x, true).unwrap();
        let analytic = backward(&stack, trace.as_ref().unwrap(), &up).unwrap();
        let numeric = finite_diff_grad(
            &mut stack,
            |s| {
                let e = s.embed(&x).unwrap();
                e.data().iter().zip(up.data()).map(|(a, b)| a * b).sum()
            },
            eps,
        );
        for (a, n) in analytic.layers.iter().zip(&numeric.layers) {
            enc = enc.max(grad_mismatch(a.data(), n.data()));
        }
    }
    [
        "classification loss",
        "distillation loss",
        "alignment loss",
        "encoder backward",
    ]
    .into_iter()
    .zip([ce, cd, map, enc])
    .map(|(name, residual)| Check {
        group: "gradients",
        name,
        residual,
        bound: 1e-4,
    })
    .collect()
}

fn distillation_identity() -> Vec<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let img = random_matrix(&mut rng, 8, 4);
    let txt = random_matrix(&mut rng, 8, 4);
    let same = cd_loss(&img, &txt, &img, &txt, 0.07).unwrap().value;
    let one = cd_loss(
        &img.row_range(0, 1),
        &txt.row_range(0, 1),
        &txt.row_range(0, 1),
        &img.row_range(0, 1),
        0.07,
    )
    .unwrap()
    .value
    .abs()
        + map_loss(&img.row_range(0, 1), &txt.row_range(0, 1), 0.07)
            .unwrap()
            .value
            .abs();
    vec![
        Check {
            group: "distillation",
            name: "student == teacher",
            residual: same,
            bound: 1e-10,
        },
        Check {
            group: "distillation",
            name: "single-pair batch",
            residual: one,
            bound: 0.0,
        },
    ]
}

/// Two-task run with rho = 0 where the first task has fewer training rows than
/// any layer's input width, so its grams are exactly rank-deficient.
fn output_invariance() -> Vec<Check> {
    let spec = ModelSpec::default();
    let model = DualEncoder::init(&spec, 17).unwrap();
    let d_in = spec.image_dims[0];
    let (train1, _) = make_task(31, 4, 5, d_in, spec.text_dims[0], 8.0).unwrap();
    let (train2, _) = make_task(32, 4, 20, d_in, spec.text_dims[0], 8.0).unwrap();
    let reference = make_reference_set(33, 64, d_in, spec.text_dims[0]).unwrap();
    let cfg = TrainerConfig {
        iterations_per_task: 30,
        batch_size: 16,
        rho: 0.0,
        capture_cap: train1.len(),
        ..TrainerConfig::default()
    };
    let mut state = ContinualState::new(model, &reference, &cfg).unwrap();
    train_task(&mut state, &train1, &reference, &cfg).unwrap();
    let probe = train1.images.clone();
    let before = layer_outputs(&state, &probe);
    let mut eval1 = train1.clone();
    eval1.split = Split::Test;
    let acc_before = gnsp_core::metrics::evaluate_accuracy(&state.model, &eval1).unwrap();
    train_task(&mut state, &train2, &reference, &cfg).unwrap();
    let after = layer_outputs(&state, &probe);
    let acc_after = gnsp_core::metrics::evaluate_accuracy(&state.model, &eval1).unwrap();
    let drift = before
        .iter()
        .zip(&after)
        .flat_map(|(a, b)| a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()))
        .fold(0.0, f64::max);
    vec![
        Check {
            group: "invariance",
            name: "task-1 layer outputs after task 2",
            residual: drift,
            bound: 1e-8,
        },
        Check {
            group: "invariance",
            name: "task-1 accuracy after task 2",
            residual: (acc_before - acc_after).abs(),
            bound: 0.0,
        },
    ]
}

fn layer_outputs(state: &ContinualState, x: &Matrix) -> Vec<Matrix> {
    let (_, trace) = forward(&state.model.image_encoder, x, true).unwrap();
    trace.unwrap().preactivations
}

fn checkpoint_round_trip() -> Vec<Check> {
    let model = DualEncoder::init(&ModelSpec::default(), 3).unwrap();
    let reference = make_reference_set(5, 16, 32, 16).unwrap();
    let cfg = TrainerConfig {
        include_reference_gram: true,
        ..TrainerConfig::default()
    };
    let state = ContinualState::new(model, &reference, &cfg).unwrap();
    let bytes = checkpoint::encode(&state);
    let back = checkpoint::decode(&bytes).map(|s| s == state).unwrap_or(false);
    let mut corrupted = bytes.clone();
    let mid = corrupted.len() / 2;
    corrupted[mid] ^= 0x10;
    let detected = checkpoint::decode(&corrupted).is_err();
    vec![
        Check {
            group: "checkpoint",
            name: "bitwise round trip",
            residual: if back { 0.0 } else { 1.0 },
            bound: 0.0,
        },
        Check {
            group: "checkpoint",
            name: "corruption detected",
            residual: if detected { 0.0 } else { 1.0 },
            bound: 0.0,
        },
    ]
}

fn metric_formulas() -> Vec<Check> {
    let names: Vec<String> = (1..=3).map(|i| format!("t{i}")).collect();
    let grid = Matrix::from_fn(4, 3, |i, j| 0.1 * (i + j + 1) as f64);
    let s = summarize(&AccuracyMatrix::from_grid(grid, names).unwrap());
    let residual = (s.transfer.unwrap_or(f64::NAN) - 0.325)
        .abs()
        .max((s.last - 0.5).abs())
        .max((s.average - 0.4).abs());
    vec![Check {
        group: "metrics",
        name: "T=3 grid summary",
        residual: if residual.is_nan() { f64::INFINITY } else { residual },
        bound: 1e-12,
    }]
}

/// Runs every group, returning checks in a fixed order.
pub fn run_checks(opts: SelftestOptions) -> Vec<Check> {
    let mut out = Vec::new();
    out.extend(projector_algebra(opts));
    out.extend(null_space());
    out.extend(adaptive_split_examples());
    out.extend(gradients());
    out.extend(distillation_identity());
    out.extend(output_invariance());
    out.extend(checkpoint_round_trip());
    out.extend(metric_formulas());
    out
}

/// Prints one line per check; returns the failing lines.
pub fn run(opts: SelftestOptions) -> Vec<String> {
    let start = Instant::now();
    let checks = run_checks(opts);
    for c in &checks {
        println!("{}", c.line());
    }
    println!("{} checks in {:.2}s", checks.len(), start.elapsed().as_secs_f64());
    checks.iter().filter(|c| !c.passed()).map(Check::line).collect()
}
