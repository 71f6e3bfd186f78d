//! End-to-end acceptance run. Prints one line per criterion and exits
//! non-zero when any of them fails.

mod common;

use std::f64::consts::PI;
use std::path::PathBuf;
use std::time::Instant;

use common::{gaussian_pair_expectation, gaussian_tensor, max_gradient_error, pair_correlation_oracle, random_network};
use nalgebra::DMatrix;
use symbreak::arch::{
    build, build_constnet, haar_orthogonal, init_tensor, ArchConfig, BlockInit, ConstNetConfig, DeltaOrthogonalConfig,
    InitScheme, LayerInit, LeakyNetConfig, ReplicatedMlpConfig,
};
use symbreak::harness::train::load_datasets;
use symbreak::harness::{
    probe_batch, run_meanfield_sweep, train_seed, verify_ntk, verify_sigprop, write_sweep_csv, CheckStatus, DatasetRef,
    ExperimentConfig, MetricsLog, RunSummary, SigpropTolerances, SweepConfig,
};
use symbreak::meanfield::{
    map_c, map_q, stability_eigenvalues, trajectory, Activation, ActivationMap, MeanFieldState, Quadrature,
};
use symbreak::metrics::{backward_correlation, deviation_ratio, forward_correlation};
use symbreak::nn::{softmax_cross_entropy, Mechanisms, Mode, NodeKind};
use symbreak::tensor::{conv2d_batch, Boundary, Precision, ReductionPolicy, Tensor};

/// Outcome of one criterion: pass flag and a one-line summary.
struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

const ALL_ACTIVATIONS: [Activation; 8] = [
    Activation::Relu,
    Activation::LeakyRelu { slope: 0.1 },
    Activation::Tanh,
    Activation::Identity,
    Activation::Step,
    Activation::LeakyStep { slope: 0.1 },
    Activation::TanhPrime,
    Activation::Unit,
];

fn identity_at_init() -> Outcome {
    let model = build_constnet(&ConstNetConfig::default(), Precision::Single).unwrap();
    let x = gaussian_tensor(&[8, 32, 32, 3], 1, Precision::Single);
    let labels: Vec<usize> = (0..8).map(|i| i % 10).collect();
    let mut worst_logit = 0.0f64;
    let mut worst_ce = 0.0f64;
    let mut blocks = 0;
    let mut non_identity = 0;
    for mode in [Mode::Train, Mode::Eval] {
        let pass = model.net.forward(&x, mode, &Mechanisms::deterministic()).unwrap();
        worst_logit = worst_logit.max(pass.logits.max_abs());
        let (ce, _) = softmax_cross_entropy(&pass.logits, &labels).unwrap();
        worst_ce = worst_ce.max((ce - 10f64.ln()).abs());
        for n in model.net.nodes().iter().filter(|n| n.kind == NodeKind::SkipAdd) {
            blocks += 1;
            let same = pass
                .input(n.index)
                .data()
                .iter()
                .zip(pass.output(n.index).data())
                .all(|(a, b)| a.to_bits() == b.to_bits());
            if !same {
                non_identity += 1;
            }
        }
    }
    outcome(
        worst_logit == 0.0 && worst_ce < 1e-5 && non_identity == 0 && blocks > 0,
        format!(
            "max |logit| {worst_logit:e}, |CE - ln 10| {worst_ce:.2e}, {non_identity}/{blocks} skip blocks not bit-exact"
        ),
    )
}

fn gradient_correctness() -> Outcome {
    let mut worst = 0.0f64;
    let mut max_params = 0;
    for seed in 0..20 {
        let (net, x, labels) = random_network(seed);
        max_params = max_params.max(net.params().iter().map(|p| p.value.len()).sum::<usize>());
        worst = worst.max(max_gradient_error(&net, &x, &labels, 1e-5));
    }
    outcome(
        worst < 1e-4 && max_params <= 1000,
        format!("max relative error {worst:.2e} over 20 networks, largest has {max_params} params"),
    )
}

fn correlation_formulas() -> Outcome {
    let w = Tensor::full(&[3, 3, 5, 4], 0.37, Precision::Double);
    let a = forward_correlation(&w).unwrap() == 1.0 && backward_correlation(&w).unwrap() == 1.0;

    // d = 6 output channels built from 3 orthonormal filters, R = 2 copies each.
    let q = haar_orthogonal(36, 7);
    let mut w = Tensor::zeros(&[3, 3, 6, 4], Precision::Double);
    for out in 0..6 {
        for t in 0..9 {
            for c in 0..4 {
                w.set(&[t / 3, t % 3, out, c], q[(t * 4 + c, out % 3)]);
            }
        }
    }
    let cf_b = forward_correlation(&w).unwrap();
    let b = (cf_b - 0.2).abs() < 1e-12;

    let w = gaussian_tensor(&[3, 3, 512, 512], 3, Precision::Double);
    let (cf, cb) = (forward_correlation(&w).unwrap(), backward_correlation(&w).unwrap());
    let c = cf.abs() < 0.05 && cb.abs() < 0.05;

    let mut worst = 0.0f64;
    for seed in 0..50u64 {
        let shape = [3, 3, 2 + (seed % 5) as usize, 2 + (seed % 3) as usize];
        let w = gaussian_tensor(&shape, 100 + seed, Precision::Double);
        worst = worst.max((forward_correlation(&w).unwrap() - pair_correlation_oracle(&w, true)).abs());
        worst = worst.max((backward_correlation(&w).unwrap() - pair_correlation_oracle(&w, false)).abs());
    }
    let d = worst < 1e-12;
    outcome(
        a && b && c && d,
        format!("(a) {a}; (b) C_f {cf_b:.15}; (c) C_f {cf:.4} C_b {cb:.4}; (d) max oracle gap {worst:.1e}"),
    )
}

fn meanfield_maps() -> Outcome {
    let relu = ActivationMap::gauss(Activation::Relu);
    let q1 = map_q(&relu, 1.0).unwrap();
    let gauss = map_c(&relu, 0.0, 1.0).unwrap();
    let mc = ActivationMap::new(
        Activation::Relu,
        Quadrature::MonteCarlo {
            samples: 400_000,
            seed: 5,
        },
    )
    .unwrap();
    let mc = map_c(&mc, 0.0, 1.0).unwrap();
    let grid = gaussian_pair_expectation(|x| x.max(0.0), 0.0) / 0.5;
    let c0_err = [gauss, mc, grid]
        .iter()
        .map(|v| (v - 1.0 / PI).abs())
        .fold(0.0, f64::max);
    let c1_err = ALL_ACTIVATIONS
        .iter()
        .map(|&phi| (map_c(&ActivationMap::gauss(phi), 1.0, 1.0).unwrap() - 1.0).abs())
        .fold(0.0, f64::max);
    outcome(
        (q1 - 0.5).abs() < 1e-6 && c0_err < 1e-4 && c1_err < 1e-9,
        format!(
            "map_Q(1) = {q1:.9}; map_C(0) gauss {gauss:.6} mc {mc:.6} grid {grid:.6}; max |map_C(1) - 1| {c1_err:.1e}"
        ),
    )
}

fn fixed_point_instability() -> Outcome {
    let mut worst = 0.0f64;
    for t in [1u64, 10, 100] {
        let e = stability_eigenvalues(t, 1.0, 1.0, 1.0, 1.0).unwrap();
        worst = worst.max((e.lambda1 - (1.0 + (1.25f64.sqrt() - 0.5) / t as f64)).abs());
    }
    let relu = ActivationMap::gauss(Activation::Relu);
    let mut decreasing = true;
    for eps in [1e-3, 1e-4, 1e-5] {
        let traj = trajectory(&MeanFieldState::new(1.0 - eps, 1.0 - eps, 1.0, 1.0, 0.1), &relu, 100).unwrap();
        decreasing &= traj.windows(2).all(|w| w[1].c_f < w[0].c_f);
    }
    outcome(
        worst < 1e-12 && decreasing,
        format!("max lambda1 error {worst:.1e}; ReLU trajectories strictly decreasing: {decreasing}"),
    )
}

/// Jacobian between consecutive pre-activations of a delta-orthogonal stack
/// in the reduced coordinates `a -> (a, -a)`, built column by column.
fn reduced_layer_jacobian(pre: &Tensor, w: &Tensor) -> DMatrix<f64> {
    let [_, h, wd, n] = pre.shape()[..] else {
        panic!("pre-activation shape")
    };
    let half = n / 2;
    let dim = h * wd * half;
    let policy = ReductionPolicy::ordered(Precision::Double);
    let mut j = DMatrix::zeros(dim, dim);
    for p in 0..h * wd {
        for c in 0..half {
            let mut v = Tensor::zeros(&[1, h, wd, n], Precision::Double);
            for (ch, sign) in [(c, 1.0), (c + half, -1.0)] {
                // ReLU derivative of the current pre-activation.
                if pre.data()[p * n + ch] > 0.0 {
                    v.data_mut()[p * n + ch] = sign;
                }
            }
            let out = conv2d_batch(&v, w, 1, Boundary::Periodic, &policy).unwrap();
            for q in 0..h * wd {
                for r in 0..half {
                    j[(q * half + r, p * half + c)] = out.data()[q * n + r];
                }
            }
        }
    }
    j
}

fn delta_orthogonal_isometry() -> Outcome {
    let cfg = DeltaOrthogonalConfig::default();
    let model = build(&ArchConfig::DeltaOrthogonal(cfg), Precision::Double).unwrap();
    let (x, labels) = probe_batch(&model, 8, 0).unwrap();
    let report = verify_sigprop(&model, &x, &labels, &SigpropTolerances::default()).unwrap();
    let check = report.get("d").unwrap();
    let drift = check.measured.unwrap();

    let tiny = DeltaOrthogonalConfig {
        depth: 4,
        width: 4,
        spatial: vec![6, 6],
        n_classes: 2,
        seed: 3,
    };
    let model = build(&ArchConfig::DeltaOrthogonal(tiny.clone()), Precision::Double).unwrap();
    let (x, _) = probe_batch(&model, 1, 1).unwrap();
    let pass = model.net.forward(&x, Mode::Eval, &Mechanisms::deterministic()).unwrap();
    let mut sv_err = 0.0f64;
    let mut count = 0;
    for l in 0..tiny.depth - 1 {
        let pre = pass.output(model.taps[l].node);
        let w = model.net.param(&format!("{}.weight", 2 * (l + 1))).unwrap();
        let j = reduced_layer_jacobian(pre, w);
        for s in j.singular_values().iter() {
            sv_err = sv_err.max((s - 1.0).abs());
            count += 1;
        }
    }
    outcome(
        check.status == CheckStatus::Pass && drift < 1e-5 && sv_err < 1e-8,
        format!("50-layer norm/angle drift {drift:.2e}; {count} singular values within {sv_err:.1e} of 1"),
    )
}

fn leakynet_algebra() -> Outcome {
    let cfg = LeakyNetConfig::default();
    let model = build(&ArchConfig::LeakyNet(cfg.clone()), Precision::Single).unwrap();
    let (x, labels) = probe_batch(&model, 4, 0).unwrap();
    let report = verify_sigprop(&model, &x, &labels, &SigpropTolerances::default()).unwrap();
    let neg = report.get("e").unwrap().measured.unwrap();

    let mut layers = cfg.per_layer_init.clone();
    layers[4] = LayerInit::Ones;
    let ones = LeakyNetConfig {
        per_layer_init: layers,
        ..cfg
    };
    let variant = build(&ArchConfig::LeakyNet(ones), Precision::Single).unwrap();
    let mech = Mechanisms::deterministic();
    let a = model.net.forward(&x, Mode::Eval, &mech).unwrap();
    let b = variant.net.forward(&x, Mode::Eval, &mech).unwrap();
    let diff = model
        .taps
        .iter()
        .map(|t| a.output(t.node).max_abs_diff(b.output(t.node)).unwrap())
        .fold(0.0, f64::max);
    outcome(
        neg < 1e-5 && diff < 1e-5,
        format!("negation error {neg:.2e}; one-Ones variant feature gap {diff:.2e}"),
    )
}

fn perturbation_propagation() -> Outcome {
    let n = 64;
    let policy = ReductionPolicy::ordered(Precision::Double);
    // Channel-symmetric features: one Gaussian value per pixel.
    let base = gaussian_tensor(&[1, 8, 8, 1], 9, Precision::Double);
    let sym: Vec<f64> = base.data().iter().flat_map(|&v| std::iter::repeat_n(v, n)).collect();
    let sym = Tensor::new(&[1, 8, 8, n], sym, Precision::Double).unwrap();
    let ones = init_tensor(&[3, 3, n, n], &InitScheme::DeltaOnes, 0, Precision::Double).unwrap();
    let ident = init_tensor(&[3, 3, n, n], &InitScheme::DeltaIdentity, 0, Precision::Double).unwrap();
    let conv = |x: &Tensor, w: &Tensor| conv2d_batch(x, w, 1, Boundary::Periodic, &policy).unwrap();
    let (ref_ones, ref_ident) = (conv(&sym, &ones), conv(&sym, &ident));
    let mut mean_ones = 0.0;
    let mut ident_err = 0.0f64;
    for s in 0..100 {
        let x = sym
            .add(&gaussian_tensor(&[1, 8, 8, n], 1000 + s, Precision::Double).scale(1e-3))
            .unwrap();
        let r_in = deviation_ratio(&x, &sym).unwrap();
        mean_ones += deviation_ratio(&conv(&x, &ones), &ref_ones).unwrap() / r_in / 100.0;
        let r_id = deviation_ratio(&conv(&x, &ident), &ref_ident).unwrap();
        ident_err = ident_err.max((r_id / r_in - 1.0).abs());
    }
    let expected = 1.0 / (n as f64).sqrt();
    outcome(
        (0.8 * expected..=1.2 * expected).contains(&mean_ones) && ident_err < 1e-7,
        format!("Ones attenuation {mean_ones:.5} (1/sqrt(n) = {expected:.5}); Identity ratio error {ident_err:.1e}"),
    )
}

fn ntk_at_init() -> Outcome {
    let cfg = ConstNetConfig {
        n_blocks: 4,
        base_width: 4,
        widen_positions: vec![2],
        use_batchnorm: false,
        n_classes: 3,
        input_shape: vec![8, 8, 3],
        ..Default::default()
    };
    let model = build_constnet(&cfg, Precision::Double).unwrap();
    let (x, _) = probe_batch(&model, 4, 2).unwrap();
    let r = verify_ntk(&model, &x).unwrap();
    outcome(
        r.max_relative_deviation < 1e-5 && r.max_off_diagonal < 1e-8,
        format!(
            "max relative deviation {:.2e}, max cross-class entry {:.2e}",
            r.max_relative_deviation, r.max_off_diagonal
        ),
    )
}

fn digits() -> DatasetRef {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/digits");
    serde_json::from_value(serde_json::json!({
        "kind": "idx_pair",
        "images": dir.join("images.idx"),
        "labels": dir.join("labels.idx"),
    }))
    .unwrap()
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    v[v.len() / 2]
}

/// Six-block zero-initialised ConstNet on the digits set.
fn symmetry_config(block_init: BlockInit, mechanisms: Mechanisms) -> ExperimentConfig {
    let arch = ArchConfig::ConstNet(ConstNetConfig {
        n_blocks: 6,
        base_width: 8,
        widen_positions: vec![],
        n_classes: 10,
        input_shape: vec![8, 8, 1],
        block_init,
        ..Default::default()
    });
    let mut cfg = ExperimentConfig::new(arch, Some(digits()));
    cfg.mechanisms = mechanisms;
    cfg.optimizer.lr = 0.03;
    cfg.optimizer.momentum = 0.9;
    cfg.optimizer.milestones = vec![];
    cfg.batch_size = 16;
    cfg.epochs = 1000;
    cfg.max_steps = Some(2000);
    cfg.test_size = 497;
    cfg.log_interval = 500;
    cfg
}

fn dropout_mechanisms() -> Mechanisms {
    Mechanisms {
        dropout_rate: 0.01,
        dropout_on_first_layer: true,
        ..Mechanisms::deterministic()
    }
}

/// Train one seed with an in-memory log; returns the summary and CSV bytes.
fn run_seed(cfg: &ExperimentConfig, seed: u64) -> (RunSummary, Vec<u8>) {
    let (train, test) = load_datasets(cfg).unwrap();
    let mut log = MetricsLog::new(Vec::new()).unwrap();
    let (summary, _) = train_seed(cfg, seed, &train, test.as_ref(), &mut log).unwrap();
    (summary, log.into_inner().unwrap())
}

fn symmetry_breaking(csv_out: &mut Vec<u8>) -> Outcome {
    let runs = [
        (
            "deterministic",
            symmetry_config(BlockInit::Zero, Mechanisms::deterministic()),
        ),
        ("dropout", symmetry_config(BlockInit::Zero, dropout_mechanisms())),
        ("he", symmetry_config(BlockInit::He, Mechanisms::deterministic())),
    ];
    let mut acc = Vec::new();
    let mut min_cf = Vec::new();
    for (name, cfg) in &runs {
        let mut a = Vec::new();
        let mut c = Vec::new();
        for seed in 0..5 {
            let (s, csv) = run_seed(cfg, seed);
            if *name == "dropout" && seed == 0 {
                *csv_out = csv;
            }
            a.push(s.test_acc.unwrap());
            c.push(s.min_conv_c_f.unwrap());
        }
        println!("    {name}: test accuracy {a:.3?}, min conv C_f {c:.4?}");
        acc.push(median(a));
        min_cf.push(c);
    }
    let chance = 0.1;
    let det_near_chance = (acc[0] - chance).abs() <= 0.05;
    let det_symmetric = min_cf[0].iter().all(|&c| (c - 1.0).abs() < 1e-9);
    let drop_matches_he = acc[1] >= 0.9 * acc[2];
    let drop_broken = median(min_cf[1].clone()) < 0.9;
    outcome(
        det_near_chance && det_symmetric && drop_matches_he && drop_broken,
        format!(
            "median acc det {:.3} (chance {chance}, within 5 pts: {det_near_chance}), det C_f = 1: {det_symmetric}; \
             dropout {:.3} vs He {:.3} (>= 90%: {drop_matches_he}); dropout min C_f < 0.9: {drop_broken}",
            acc[0], acc[1], acc[2]
        ),
    )
}

fn mlp_config(k: usize, lambda: f64) -> ExperimentConfig {
    let arch = ArchConfig::ReplicatedMlp(ReplicatedMlpConfig {
        input_shape: vec![8, 8, 1],
        width: 64,
        n_classes: 10,
        k,
        lambda,
        seed: 0,
    });
    let mut cfg = ExperimentConfig::new(arch, Some(digits()));
    cfg.optimizer.lr = 0.1;
    cfg.optimizer.milestones = vec![];
    cfg.batch_size = 16;
    cfg.epochs = 1000;
    cfg.max_steps = Some(7500);
    cfg.test_size = 599;
    cfg.log_interval = 7500;
    cfg
}

fn replicated_feature_trend() -> Outcome {
    let ks = [64, 16, 4, 1];
    let mut medians = Vec::new();
    for lambda in [0.0, 0.01] {
        let row: Vec<f64> = ks
            .iter()
            .map(|&k| {
                let cfg = mlp_config(k, lambda);
                median((0..5).map(|s| run_seed(&cfg, s).0.test_acc.unwrap()).collect())
            })
            .collect();
        println!("    lambda {lambda}: median accuracy for K = {ks:?}: {row:.4?}");
        medians.push(row);
    }
    let plain = &medians[0];
    let rises: Vec<f64> = plain.windows(2).map(|w| w[1] - w[0]).filter(|&d| d > 0.0).collect();
    let trend = rises.is_empty() || (rises.len() == 1 && rises[0] <= 0.005);
    let baseline = plain[0];
    let gap = medians[1].iter().map(|m| (m - baseline).abs()).fold(0.0, f64::max);
    outcome(
        trend && gap <= 0.01,
        format!(
            "non-increasing in K with {} inversion(s) {rises:.4?}; lambda 0.01 max gap to K=64 {gap:.4}",
            rises.len()
        ),
    )
}

fn sweep_csv() -> Vec<u8> {
    let cfg = SweepConfig {
        activations: vec![Activation::Relu, Activation::Tanh],
        c0: vec![0.99, 1.0],
        t_max: 20,
        quadrature: Quadrature::MonteCarlo {
            samples: 100_000,
            seed: 4,
        },
        ..Default::default()
    };
    let mut out = Vec::new();
    write_sweep_csv(&run_meanfield_sweep(&cfg).unwrap(), &mut out).unwrap();
    out
}

fn reproducibility(first: &[u8]) -> Outcome {
    let cfg = symmetry_config(BlockInit::Zero, dropout_mechanisms());
    let (_, again) = run_seed(&cfg, 0);
    let train_same = !first.is_empty() && first == again.as_slice();
    let mlp = mlp_config(4, 0.01);
    let mlp_same = run_seed(&mlp, 1).1 == run_seed(&mlp, 1).1;
    let sweep_same = sweep_csv() == sweep_csv();
    outcome(
        train_same && mlp_same && sweep_same,
        format!(
            "ConstNet dropout CSV identical: {train_same} ({} bytes); MLP CSV identical: {mlp_same}; \
             mean-field CSV identical: {sweep_same}",
            first.len()
        ),
    )
}

fn main() {
    let mut failed = Vec::new();
    let mut csv = Vec::new();
    let mut report = |id: usize, name: &str, limit: Option<f64>, f: &mut dyn FnMut() -> Outcome| {
        let t = Instant::now();
        let mut o = f();
        let secs = t.elapsed().as_secs_f64();
        if let Some(limit) = limit {
            if secs >= limit {
                o.pass = false;
                o.detail += &format!("; over the {limit} s budget");
            }
        }
        println!(
            "criterion {id:>2} {name}: {} ({secs:.1} s) {}",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail
        );
        if !o.pass {
            failed.push(id);
        }
    };
    report(1, "identity at init", Some(10.0), &mut identity_at_init);
    report(2, "gradient correctness", Some(60.0), &mut gradient_correctness);
    report(3, "correlation formulas", None, &mut correlation_formulas);
    report(4, "mean-field maps", None, &mut meanfield_maps);
    report(5, "fixed-point instability", None, &mut fixed_point_instability);
    report(6, "delta-orthogonal isometry", None, &mut delta_orthogonal_isometry);
    report(7, "LeakyNet algebra", None, &mut leakynet_algebra);
    report(8, "perturbation propagation", None, &mut perturbation_propagation);
    report(9, "NTK at init", Some(30.0), &mut ntk_at_init);
    report(10, "symmetry breaking end to end", Some(600.0), &mut || {
        symmetry_breaking(&mut csv)
    });
    report(
        11,
        "replicated-feature trend",
        Some(600.0),
        &mut replicated_feature_trend,
    );
    report(12, "reproducibility", None, &mut || reproducibility(&csv));
    if failed.is_empty() {
        println!("acceptance: all 12 criteria passed");
    } else {
        println!("acceptance: failed criteria {failed:?}");
        std::process::exit(1);
    }
}
