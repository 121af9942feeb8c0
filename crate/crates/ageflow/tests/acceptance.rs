//! Acceptance suite: one test per criterion, each printing a PASS line
//! with its measured numbers (visible under --nocapture). The training
//! criteria share one artifact build guarded by a lazy lock.

use std::sync::LazyLock;
use std::time::Instant;

use ageflow::adversary::{
    age_cls_loss, discriminator_loss, generator_adv_loss, total_generator_loss,
    GeneratorLossParts, LossWeights,
};
use ageflow::checkpoint::Checkpoint;
use ageflow::config::AppConfig;
use ageflow::flow_layers::{squeeze, unsqueeze, ActNorm, Coupling, InvConv};
use ageflow::glow::{self, Glow, GlowConfig, LatentState};
use ageflow::ictm::{consistency_loss, ConditionGaussian, Ictm, IctmConfig, PriorGenerator};
use ageflow::numerics::gradcheck::{compare_grads, finite_diff_grad, numeric_jacobian, slogdet};
use ageflow::numerics::{Rng, Scalar, Tensor};
use ageflow::pipeline::{evaluate, EvalReport, Pipeline, SourceInfo, TranslateMode};
use ageflow::semantics::{akd_loss, akd_target, PrototypeTable};
use ageflow::toydata::{dataset_generate, Dataset};
use ageflow::training::{compute_prototype_stage, full_checkpoint, train_glow, train_ictm};

// ── shared trained artifacts for criteria 6-9 ───────────────────────────

struct Artifacts {
    config: AppConfig,
    dataset: Dataset,
    stage1_csv: String,
    stage2_iters: usize,
    glow: Glow<f32>,
    prototypes: PrototypeTable<f32>,
    ictm: Ictm<f32>,
    prior: PriorGenerator<f32>,
    disc: ageflow::adversary::Discriminator<f32>,
    report_ictm: EvalReport,
    report_glow_manip: EvalReport,
    report_glow_attr: EvalReport,
    stage1_secs: f64,
    stage2_secs: f64,
    eval_secs: f64,
}

/// Desk-scale acceptance configuration. Optimizer defaults in TrainConfig
/// keep the reference learning rates (1e-5 / 1e-4); this run uses rates
/// tuned for the desk-scale model so the training criteria complete within
/// their budgets.
fn desk_config() -> AppConfig {
    let mut cfg = AppConfig::default();
    cfg.train.seed = 7;
    cfg.train.glow_iters = 200;
    cfg.train.ictm_iters = STAGE2_ITERS;
    cfg.train.lr_glow = 1e-3;
    cfg.train.lr_ictm = 1e-3;
    cfg
}

const STAGE2_ITERS: usize = 600;

static ARTIFACTS: LazyLock<Artifacts> = LazyLock::new(|| {
    let config = desk_config();
    let dir = std::env::temp_dir().join("ageflow_acceptance_data");
    std::fs::remove_dir_all(&dir).ok();
    let manifest = dataset_generate(800, config.train.seed, &dir).expect("dataset");
    let dataset = Dataset::load(manifest).expect("manifest");

    let t0 = Instant::now();
    let stage1 = train_glow::<f32>(&config, &dataset).expect("stage 1");
    assert!(stage1.aborted_at.is_none(), "stage 1 diverged");
    let stage1_secs = t0.elapsed().as_secs_f64();

    let prototypes = compute_prototype_stage(&stage1.glow, &dataset, config.train.seed).expect("prototypes");

    let t0 = Instant::now();
    let stage2 = train_ictm(&config, &stage1.glow, &prototypes, &dataset).expect("stage 2");
    let stage2_secs = t0.elapsed().as_secs_f64();

    let pipeline = Pipeline {
        config: config.clone(),
        glow: stage1.glow.clone(),
        prototypes: Some(prototypes.clone()),
        ictm: Some(stage2.ictm.clone()),
        prior: Some(stage2.prior.clone()),
    };
    let t0 = Instant::now();
    let report_ictm =
        evaluate(&pipeline, &dataset, ageflow::toydata::Split::Test, TranslateMode::Ictm).expect("eval ictm");
    let report_glow_manip =
        evaluate(&pipeline, &dataset, ageflow::toydata::Split::Test, TranslateMode::GlowManip)
            .expect("eval glow-manip");
    let report_glow_attr =
        evaluate(&pipeline, &dataset, ageflow::toydata::Split::Test, TranslateMode::GlowAttrManip)
            .expect("eval glow-attr-manip");
    let eval_secs = t0.elapsed().as_secs_f64();

    Artifacts {
        config,
        dataset,
        stage1_csv: stage1.csv,
        stage2_iters: STAGE2_ITERS,
        glow: stage1.glow,
        prototypes,
        ictm: stage2.ictm,
        prior: stage2.prior,
        disc: stage2.disc,
        report_ictm,
        report_glow_manip,
        report_glow_attr,
        stage1_secs,
        stage2_secs,
        eval_secs,
    }
});

fn max_abs_diff<F: Scalar>(a: &Tensor<F>, b: &Tensor<F>) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x.as_f64() - y.as_f64()).abs())
        .fold(0.0, f64::max)
}

fn latent_max_diff<F: Scalar>(a: &LatentState<F>, b: &LatentState<F>) -> f64 {
    let mut m = max_abs_diff(&a.final_z, &b.final_z);
    for (x, y) in a.splits.iter().zip(&b.splits) {
        m = m.max(max_abs_diff(x, y));
    }
    m
}

// ── criterion 1: invertibility ──────────────────────────────────────────

fn invertibility_suite<F: Scalar>(trials: usize, tol: f64) -> f64 {
    let mut rng = Rng::new(1001);
    let mut worst = 0.0f64;

    // individual flow layers on 4-channel 16x16 inputs
    let mut actnorm = ActNorm::<F>::new(4);
    actnorm.log_s.value = rng.normal_tensor(&[4], 0.3);
    actnorm.b.value = rng.normal_tensor(&[4], 0.5);
    actnorm.initialized = true;
    let invconv = InvConv::<F>::new(4, &mut rng);
    let mut coupling = Coupling::<F>::new(4, 16, false, &mut rng).unwrap();
    coupling.subnet.conv_out.weight.value =
        rng.normal_tensor(coupling.subnet.conv_out.weight.value.shape(), 0.2);

    for _ in 0..trials {
        let x: Tensor<F> = rng.normal_tensor(&[1, 4, 16, 16], 1.0);
        let (y, _) = actnorm.forward(&x).unwrap();
        worst = worst.max(max_abs_diff(&actnorm.inverse(&y).unwrap(), &x));
        let (y, _) = invconv.forward(&x).unwrap();
        worst = worst.max(max_abs_diff(&invconv.inverse(&y).unwrap(), &x));
        let (y, _) = coupling.forward(&x).unwrap();
        worst = worst.max(max_abs_diff(&coupling.inverse(&y).unwrap(), &x));
        let y = squeeze(&x).unwrap();
        worst = worst.max(max_abs_diff(&unsqueeze(&y).unwrap(), &x));
    }

    // full GLOW composition at desk scale
    let cfg = GlowConfig::default();
    let mut glow = Glow::<F>::new(cfg.clone(), &mut rng).unwrap();
    glow.randomize_couplings(&mut rng, 0.05);
    let init: Tensor<F> = rng.normal_tensor(&[8, 1, 32, 32], 1.0);
    glow.encode_with_init(&init).unwrap();
    for _ in 0..trials / 4 {
        let x: Tensor<F> = rng.normal_tensor(&[4, 1, 32, 32], 1.0);
        let (z, _) = glow.encode(&x).unwrap();
        worst = worst.max(max_abs_diff(&glow.decode(&z).unwrap(), &x));
        // pack/unpack is a pure permutation: bit-exact
        let packed = glow::pack_latent(&z, &cfg).unwrap();
        let back = glow::unpack_latent(&packed, &cfg).unwrap();
        assert_eq!(latent_max_diff(&back, &z), 0.0, "pack/unpack must be bit-exact");
    }

    // ICTM on the combined tensor at desk scale
    let icfg = IctmConfig::default();
    let mut ictm = Ictm::<F>::new(icfg.clone(), &mut rng).unwrap();
    for flow in &mut ictm.flows {
        let shape = flow.subnet.conv_out.weight.value.shape().to_vec();
        flow.subnet.conv_out.weight.value = rng.normal_tensor(&shape, 0.1);
    }
    for _ in 0..trials / 4 {
        let u: Tensor<F> = rng.normal_tensor(&[1, icfg.combined_channels(), 4, 4], 1.0);
        let v = ictm.forward_combined(&u).unwrap();
        worst = worst.max(max_abs_diff(&ictm.inverse_combined(&v).unwrap(), &u));
    }

    assert!(worst <= tol, "round-trip error {worst} over tolerance {tol}");
    worst
}

#[test]
fn criterion_1_invertibility() {
    let t0 = Instant::now();
    let worst32 = invertibility_suite::<f32>(100, 1e-4);
    let worst64 = invertibility_suite::<f64>(100, 1e-9);
    let secs = t0.elapsed().as_secs_f64();
    assert!(secs < 60.0, "invertibility suite took {secs:.1}s, budget 60s");
    println!(
        "criterion 1 PASS: invertibility worst-case {worst32:.2e} (f32, tol 1e-4), {worst64:.2e} (f64, tol 1e-9), {secs:.1}s"
    );
}

// ── criterion 2: log-determinant oracles ────────────────────────────────

#[test]
fn criterion_2_logdet_oracles() {
    let t0 = Instant::now();
    let mut rng = Rng::new(2002);
    let mut worst_rel = 0.0f64;

    // actnorm on 2x2x2 (dim 8)
    let mut an = ActNorm::<f64>::new(2);
    an.log_s.value = rng.normal_tensor(&[2], 0.4);
    an.b.value = rng.normal_tensor(&[2], 0.4);
    an.initialized = true;
    let x: Tensor<f64> = rng.normal_tensor(&[1, 2, 2, 2], 1.0);
    let jac = numeric_jacobian(
        |v| an.forward(&Tensor::from_vec(&[1, 2, 2, 2], v.to_vec())).unwrap().0.into_data(),
        x.data(),
        1e-6,
    );
    let (_, ld_oracle) = slogdet(&jac);
    let (_, ld) = an.forward(&x).unwrap();
    worst_rel = worst_rel.max((ld - ld_oracle).abs() / ld_oracle.abs().max(1.0));

    // invconv C=3 on 2x2 spatial (dim 12)
    let ic = InvConv::<f64>::new(3, &mut rng);
    let x: Tensor<f64> = rng.normal_tensor(&[1, 3, 2, 2], 1.0);
    let jac = numeric_jacobian(
        |v| ic.forward(&Tensor::from_vec(&[1, 3, 2, 2], v.to_vec())).unwrap().0.into_data(),
        x.data(),
        1e-6,
    );
    let (_, ld_oracle) = slogdet(&jac);
    let (_, ld) = ic.forward(&x).unwrap();
    worst_rel = worst_rel.max((ld - ld_oracle).abs() / ld_oracle.abs().max(1.0));

    // coupling C=4 on 2x2 (dim 16): analytic logdet is exactly 0
    let mut cp = Coupling::<f64>::new(4, 8, true, &mut rng).unwrap();
    cp.subnet.conv_out.weight.value = rng.normal_tensor(cp.subnet.conv_out.weight.value.shape(), 0.3);
    let x: Tensor<f64> = rng.normal_tensor(&[1, 4, 2, 2], 1.0);
    let jac = numeric_jacobian(
        |v| cp.forward(&Tensor::from_vec(&[1, 4, 2, 2], v.to_vec())).unwrap().0.into_data(),
        x.data(),
        1e-6,
    );
    let (_, ld_oracle) = slogdet(&jac);
    assert!(ld_oracle.abs() < 1e-5, "coupling logdet oracle {ld_oracle}");

    // tiny glow (1x1x4x4, dim 16)
    let cfg = GlowConfig {
        scales: 2,
        flows_per_scale: 2,
        channels: 1,
        height: 4,
        width: 4,
        subnet_width: 6,
        dequant_bins: 256,
    };
    let mut tiny = Glow::<f64>::new(cfg.clone(), &mut rng).unwrap();
    tiny.randomize_couplings(&mut rng, 0.2);
    let batch: Tensor<f64> = rng.normal_tensor(&[4, 1, 4, 4], 1.0);
    tiny.encode_with_init(&batch).unwrap();
    let x: Tensor<f64> = rng.normal_tensor(&[1, 1, 4, 4], 1.0);
    let flatten = |z: &LatentState<f64>| {
        let mut v = Vec::new();
        for s in &z.splits {
            v.extend_from_slice(s.data());
        }
        v.extend_from_slice(z.final_z.data());
        v
    };
    let jac = numeric_jacobian(
        |v| {
            let (z, _) = tiny.encode(&Tensor::from_vec(&[1, 1, 4, 4], v.to_vec())).unwrap();
            flatten(&z)
        },
        x.data(),
        1e-6,
    );
    let (_, ld_oracle) = slogdet(&jac);
    let (_, ld) = tiny.encode(&x).unwrap();
    worst_rel = worst_rel.max((ld - ld_oracle).abs() / ld_oracle.abs().max(1.0));

    // ICTM combined map on a 4-channel 2x2 miniature (dim 16): |det| = 1
    let icfg = IctmConfig { flows: 3, latent_channels: 2, cond_dim: 1, hidden_width: 8, groups: 4 };
    let mut ictm = Ictm::<f64>::new(icfg.clone(), &mut rng).unwrap();
    for flow in &mut ictm.flows {
        let shape = flow.subnet.conv_out.weight.value.shape().to_vec();
        flow.subnet.conv_out.weight.value = rng.normal_tensor(&shape, 0.3);
    }
    let u: Tensor<f64> = rng.normal_tensor(&[1, 4, 2, 2], 1.0);
    let jac = numeric_jacobian(
        |v| ictm.forward_combined(&Tensor::from_vec(&[1, 4, 2, 2], v.to_vec())).unwrap().into_data(),
        u.data(),
        1e-6,
    );
    let (_, ictm_logdet) = slogdet(&jac);
    assert!(ictm_logdet.abs() <= 1e-5, "ICTM combined logdet {ictm_logdet}");

    assert!(worst_rel <= 1e-5, "logdet relative error {worst_rel}");
    let secs = t0.elapsed().as_secs_f64();
    assert!(secs < 120.0, "logdet suite took {secs:.1}s, budget 120s");
    println!(
        "criterion 2 PASS: layer logdets within rel {worst_rel:.2e} of the Jacobian oracle; ICTM |logdet| = {:.2e} (abs tol 1e-5), {secs:.1}s",
        ictm_logdet.abs()
    );
}

// ── criterion 3: gradient suite ─────────────────────────────────────────

#[test]
fn criterion_3_gradient_suite() {
    let t0 = Instant::now();
    let mut rng = Rng::new(3003);
    let mut worst = 0.0f64;
    let mut checked = 0usize;

    let mut note = |chk: ageflow::numerics::gradcheck::GradCheck, what: &str| {
        assert!(chk.ok, "{what}: rel {} abs {}", chk.max_rel_diff, chk.max_abs_diff);
        worst = worst.max(chk.max_rel_diff.min(chk.max_abs_diff * 1e3));
        checked += 1;
    };

    // actnorm
    {
        let base_ls: Tensor<f64> = rng.normal_tensor(&[2], 0.4);
        let base_b: Tensor<f64> = rng.normal_tensor(&[2], 0.4);
        let x: Tensor<f64> = rng.normal_tensor(&[2, 2, 3, 3], 1.0);
        let r: Tensor<f64> = rng.normal_tensor(&[2, 2, 3, 3], 1.0);
        let eval = |ls: &Tensor<f64>, b: &Tensor<f64>| {
            let mut an = ActNorm::new(2);
            an.log_s.value = ls.clone();
            an.b.value = b.clone();
            an.initialized = true;
            let (y, ld) = an.forward(&x).unwrap();
            y.dot(&r) + 0.5 * ld
        };
        let mut an = ActNorm::new(2);
        an.log_s.value = base_ls.clone();
        an.b.value = base_b.clone();
        an.initialized = true;
        let (_, _, cache) = an.forward_cached(&x).unwrap();
        an.backward(&cache, &r, 0.5);
        note(
            compare_grads(&an.log_s.grad, &finite_diff_grad(|p| eval(p, &base_b), &base_ls, 1e-5), 1e-4, 1e-7),
            "actnorm log_s",
        );
        note(
            compare_grads(&an.b.grad, &finite_diff_grad(|p| eval(&base_ls, p), &base_b, 1e-5), 1e-4, 1e-7),
            "actnorm b",
        );
    }

    // invconv
    {
        let base = InvConv::<f64>::new(3, &mut rng);
        let x: Tensor<f64> = rng.normal_tensor(&[1, 3, 2, 2], 1.0);
        let r: Tensor<f64> = rng.normal_tensor(&[1, 3, 2, 2], 1.0);
        let eval = |ld_t: &Tensor<f64>| {
            let mut ic = base.clone();
            ic.log_diag.value = ld_t.clone();
            let (y, ld) = ic.forward(&x).unwrap();
            y.dot(&r) - 0.3 * ld
        };
        let mut ic = base.clone();
        let (_, _, cache) = ic.forward_cached(&x).unwrap();
        ic.backward(&cache, &r, -0.3);
        note(
            compare_grads(
                &ic.log_diag.grad,
                &finite_diff_grad(eval, &base.log_diag.value, 1e-5),
                1e-4,
                1e-7,
            ),
            "invconv log_diag",
        );
    }

    // full tiny glow end-to-end covers coupling subnets, invconv
    // lower/upper, and composition
    {
        let cfg = GlowConfig {
            scales: 2,
            flows_per_scale: 2,
            channels: 1,
            height: 4,
            width: 4,
            subnet_width: 6,
            dequant_bins: 256,
        };
        let mut glowm = Glow::<f64>::new(cfg.clone(), &mut rng).unwrap();
        glowm.randomize_couplings(&mut rng, 0.2);
        let batch: Tensor<f64> = rng.normal_tensor(&[4, 1, 4, 4], 1.0);
        glowm.encode_with_init(&batch).unwrap();
        let x: Tensor<f64> = rng.normal_tensor(&[2, 1, 4, 4], 1.0);
        let r_split: Tensor<f64> = rng.normal_tensor(&[2, 2, 2, 2], 1.0);
        let r_final: Tensor<f64> = rng.normal_tensor(&[2, 8, 1, 1], 1.0);
        let loss = |g: &Glow<f64>| {
            let (z, ld) = g.encode(&x).unwrap();
            z.splits[0].dot(&r_split) + z.final_z.dot(&r_final) + 0.4 * ld
        };
        let mut probe = glowm.clone();
        let (_, _, cache) = probe.encode_cached(&x).unwrap();
        let dz = LatentState { splits: vec![r_split.clone()], final_z: r_final.clone() };
        probe.encode_backward(&cache, &dz, 0.4).unwrap();

        for (sel, tag) in [
            (0usize, "glow coupling conv1 weight"),
            (1, "glow coupling conv2 weight"),
            (2, "glow coupling conv_out weight"),
            (3, "glow invconv lower"),
            (4, "glow invconv upper"),
        ] {
            let (value, grad) = {
                let step = &glowm.scales[0][1];
                let probe_step = &probe.scales[0][1];
                match sel {
                    0 => (step.coupling.subnet.conv1.weight.value.clone(), probe_step.coupling.subnet.conv1.weight.grad.clone()),
                    1 => (step.coupling.subnet.conv2.weight.value.clone(), probe_step.coupling.subnet.conv2.weight.grad.clone()),
                    2 => (step.coupling.subnet.conv_out.weight.value.clone(), probe_step.coupling.subnet.conv_out.weight.grad.clone()),
                    3 => (step.invconv.lower.value.clone(), probe_step.invconv.lower.grad.clone()),
                    _ => (step.invconv.upper.value.clone(), probe_step.invconv.upper.grad.clone()),
                }
            };
            let num = finite_diff_grad(
                |p| {
                    let mut g2 = glowm.clone();
                    match sel {
                        0 => g2.scales[0][1].coupling.subnet.conv1.weight.value = p.clone(),
                        1 => g2.scales[0][1].coupling.subnet.conv2.weight.value = p.clone(),
                        2 => g2.scales[0][1].coupling.subnet.conv_out.weight.value = p.clone(),
                        3 => g2.scales[0][1].invconv.lower.value = p.clone(),
                        _ => g2.scales[0][1].invconv.upper.value = p.clone(),
                    }
                    loss(&g2)
                },
                &value,
                1e-5,
            );
            note(compare_grads(&grad, &num, 1e-4, 1e-6), tag);
        }
    }

    // ICTM subnets including channel attention
    {
        let icfg = IctmConfig { flows: 2, latent_channels: 2, cond_dim: 1, hidden_width: 8, groups: 4 };
        let mut base = Ictm::<f64>::new(icfg.clone(), &mut rng).unwrap();
        for flow in &mut base.flows {
            let shape = flow.subnet.conv_out.weight.value.shape().to_vec();
            flow.subnet.conv_out.weight.value = rng.normal_tensor(&shape, 0.3);
        }
        let u: Tensor<f64> = rng.normal_tensor(&[2, 4, 2, 2], 1.0);
        let r: Tensor<f64> = rng.normal_tensor(&[2, 4, 2, 2], 1.0);
        let mut probe = base.clone();
        let (_, cache) = probe.forward_combined_cached(&u).unwrap();
        probe.backward_combined(&cache, &r);
        for (sel, tag) in [
            (0usize, "ictm conv1 weight"),
            (1, "ictm attention squeeze weight"),
            (2, "ictm attention excite weight"),
            (3, "ictm conv_out weight"),
        ] {
            let (value, grad) = {
                let s = &base.flows[0].subnet;
                let p = &probe.flows[0].subnet;
                match sel {
                    0 => (s.conv1.weight.value.clone(), p.conv1.weight.grad.clone()),
                    1 => (s.attention.squeeze.weight.value.clone(), p.attention.squeeze.weight.grad.clone()),
                    2 => (s.attention.excite.weight.value.clone(), p.attention.excite.weight.grad.clone()),
                    _ => (s.conv_out.weight.value.clone(), p.conv_out.weight.grad.clone()),
                }
            };
            let num = finite_diff_grad(
                |pv| {
                    let mut m = base.clone();
                    match sel {
                        0 => m.flows[0].subnet.conv1.weight.value = pv.clone(),
                        1 => m.flows[0].subnet.attention.squeeze.weight.value = pv.clone(),
                        2 => m.flows[0].subnet.attention.excite.weight.value = pv.clone(),
                        _ => m.flows[0].subnet.conv_out.weight.value = pv.clone(),
                    }
                    m.forward_combined(&u).unwrap().dot(&r)
                },
                &value,
                1e-5,
            );
            note(compare_grads(&grad, &num, 1e-4, 1e-6), tag);
        }
    }

    // prior generator
    {
        let mut base = PriorGenerator::<f64>::new(4, 3, &mut rng);
        base.out.weight.value = rng.normal_tensor(&[6, 32], 0.3);
        let groups = [1usize, 3];
        let r: Vec<Vec<f64>> = (0..2).map(|_| (0..6).map(|_| rng.normal()).collect()).collect();
        let loss = |p: &PriorGenerator<f64>| {
            p.generate_for_groups(&groups)
                .unwrap()
                .iter()
                .zip(&r)
                .map(|(c, ri)| c.flat().iter().zip(ri).map(|(a, b)| a * b).sum::<f64>())
                .sum::<f64>()
        };
        let mut probe = base.clone();
        let (_, cache) = probe.forward_cached(&groups).unwrap();
        probe.backward(&cache, &r);
        let num = finite_diff_grad(
            |p| {
                let mut pr = base.clone();
                pr.hidden.weight.value = p.clone();
                loss(&pr)
            },
            &base.hidden.weight.value,
            1e-5,
        );
        note(compare_grads(&probe.hidden.weight.grad, &num, 1e-4, 1e-7), "prior hidden weight");
        let num = finite_diff_grad(
            |p| {
                let mut pr = base.clone();
                pr.out.weight.value = p.clone();
                loss(&pr)
            },
            &base.out.weight.value,
            1e-5,
        );
        note(compare_grads(&probe.out.weight.grad, &num, 1e-4, 1e-7), "prior out weight");
    }

    // discriminator with spectral normalization (converged vectors)
    {
        let base = ageflow::adversary::Discriminator::<f64>::with_hidden(6, 4, 8, &mut rng);
        let x: Tensor<f64> = rng.normal_tensor(&[3, 6], 1.0);
        let r_s: Tensor<f64> = rng.normal_tensor(&[3], 1.0);
        let r_l: Tensor<f64> = rng.normal_tensor(&[3, 4], 1.0);
        let iters = 2000;
        let loss = |d: &ageflow::adversary::Discriminator<f64>| {
            let (s, l, _) = d.forward_cached(&x, iters).unwrap();
            s.dot(&r_s) + l.dot(&r_l)
        };
        let mut probe = base.clone();
        let (_, _, cache) = probe.forward_cached(&x, iters).unwrap();
        probe.backward(&cache, &r_s, &r_l);
        for (sel, tag) in [(0usize, "disc dense1 weight"), (1, "disc dense2 weight"), (2, "disc age head weight")] {
            let (value, grad) = match sel {
                0 => (base.dense1.weight.value.clone(), probe.dense1.weight.grad.clone()),
                1 => (base.dense2.weight.value.clone(), probe.dense2.weight.grad.clone()),
                _ => (base.head_age.weight.value.clone(), probe.head_age.weight.grad.clone()),
            };
            let num = finite_diff_grad(
                |p| {
                    let mut d = base.clone();
                    match sel {
                        0 => d.dense1.weight.value = p.clone(),
                        1 => d.dense2.weight.value = p.clone(),
                        _ => d.head_age.weight.value = p.clone(),
                    }
                    loss(&d)
                },
                &value,
                1e-5,
            );
            note(compare_grads(&grad, &num, 1e-4, 1e-6), tag);
        }
    }

    // loss gradients
    {
        let p: Tensor<f64> = rng.normal_tensor(&[12], 1.0);
        let q: Tensor<f64> = rng.normal_tensor(&[12], 1.0);
        let analytic = ageflow::semantics::akd_loss_backward(&p, &q);
        let numeric = finite_diff_grad(|t| akd_loss(t, &q), &p, 1e-6);
        note(compare_grads(&analytic, &numeric, 1e-4, 1e-7), "akd loss");

        let logits: Tensor<f64> = rng.normal_tensor(&[4], 1.0);
        let analytic = ageflow::adversary::age_cls_loss_backward(&logits, 2);
        let numeric = finite_diff_grad(|l| age_cls_loss(l, 2), &logits, 1e-6);
        note(compare_grads(&analytic, &numeric, 1e-4, 1e-8), "age classification loss");

        let a = ConditionGaussian::<f64> {
            mu: rng.normal_tensor(&[4], 1.0),
            log_sigma: rng.normal_tensor(&[4], 1.0),
        };
        let b = ConditionGaussian::<f64> {
            mu: rng.normal_tensor(&[4], 1.0),
            log_sigma: rng.normal_tensor(&[4], 1.0),
        };
        let (drec, _) = ageflow::ictm::consistency_loss_backward(&a, &b);
        let num_mu = finite_diff_grad(
            |p| consistency_loss(&ConditionGaussian { mu: p.clone(), log_sigma: a.log_sigma.clone() }, &b),
            &a.mu,
            1e-6,
        );
        let analytic_mu = Tensor::from_vec(&[4], drec[..4].to_vec());
        note(compare_grads(&analytic_mu, &num_mu, 1e-4, 1e-8), "consistency loss");
    }

    let secs = t0.elapsed().as_secs_f64();
    assert!(secs < 300.0, "gradient suite took {secs:.1}s, budget 300s");
    println!(
        "criterion 3 PASS: {checked} parameterized operations match central differences (worst rel {worst:.2e}, tol 1e-4), {secs:.1}s"
    );
}

// ── criterion 4: identity at init ───────────────────────────────────────

#[test]
fn criterion_4_identity_at_init() {
    let mut rng = Rng::new(4004);

    // untrained ICTM returns its inputs bit-exactly
    let icfg = IctmConfig { flows: 6, latent_channels: 8, cond_dim: 2, hidden_width: 8, groups: 4 };
    let ictm = Ictm::<f32>::new(icfg, &mut rng).unwrap();
    assert!(ictm.is_identity());
    let z: Tensor<f32> = rng.normal_tensor(&[2, 8, 4, 4], 1.0);
    let conds: Vec<ConditionGaussian<f32>> = (0..2)
        .map(|_| ConditionGaussian {
            mu: rng.normal_tensor(&[2], 1.0),
            log_sigma: rng.normal_tensor(&[2], 1.0),
        })
        .collect();
    let (z_t, rec) = ictm.forward(&z, &conds).unwrap();
    assert_eq!(z_t, z, "untrained ICTM must return the latent bit-exactly");
    for (r, c) in rec.iter().zip(&conds) {
        assert_eq!(r, c, "untrained ICTM must return the condition bit-exactly");
    }

    // zero-subnet coupling is an exact identity
    let cp = Coupling::<f32>::new(4, 8, false, &mut rng).unwrap();
    let x: Tensor<f32> = rng.normal_tensor(&[2, 4, 4, 4], 1.0);
    let (y, logdet) = cp.forward(&x).unwrap();
    assert_eq!(y, x);
    assert_eq!(logdet, 0.0);

    // first translator loss with only the distillation term active equals
    // the closed-form value computed directly from prototypes
    let mut cfg = AppConfig::default();
    cfg.glow.scales = 2;
    cfg.glow.flows_per_scale = 2;
    cfg.glow.subnet_width = 8;
    cfg.ictm.flows = 2;
    cfg.ictm.hidden_width = 8;
    cfg.ictm.latent_channels = cfg.glow.packed_shape().0;
    cfg.train.micro_batch = 4;
    cfg.train.accumulation = 1;
    cfg.train.glow_iters = 1;
    cfg.train.ictm_iters = 1;
    cfg.train.lr_glow = 1e-3;
    cfg.train.weights = LossWeights { akd: 1.0, al: 0.0, acl: 0.0, cl: 0.0, acl_d: 0.1 };

    let dir = std::env::temp_dir().join("ageflow_acceptance_c4");
    std::fs::remove_dir_all(&dir).ok();
    let manifest = dataset_generate(48, 7, &dir).unwrap();
    let dataset = Dataset::load(manifest).unwrap();
    let stage1 = train_glow::<f64>(&cfg, &dataset).unwrap();
    let table = compute_prototype_stage(&stage1.glow, &dataset, cfg.train.seed).unwrap();
    let stage2 = train_ictm(&cfg, &stage1.glow, &table, &dataset).unwrap();
    let logged: f64 = stage2.csv.lines().nth(1).unwrap().split(',').nth(1).unwrap().parse().unwrap();

    // replay the iteration's sample draws against the same stream
    let tc = &cfg.train;
    let train_idx = dataset.indices_of(ageflow::toydata::Split::Train);
    let by_group = dataset.train_indices_by_group();
    let mut stream = Rng::new(tc.seed).fork(2);
    let _i = Ictm::<f64>::new(cfg.ictm.clone(), &mut stream.fork(10)).unwrap();
    let _p = PriorGenerator::<f64>::new(4, cfg.ictm.cond_dim, &mut stream.fork(11));
    let (pc, hf, wf) = cfg.glow.packed_shape();
    let _d = ageflow::adversary::Discriminator::<f64>::new(pc * hf * wf, 4, &mut stream.fork(12));
    let n = tc.micro_batch;
    let indices: Vec<usize> = (0..n).map(|_| train_idx[stream.below(train_idx.len())]).collect();
    let src: Vec<usize> = indices.iter().map(|&i| dataset.entries[i].group).collect();
    let attrs: Vec<usize> = indices.iter().map(|&i| dataset.entries[i].attr).collect();
    let tgt: Vec<usize> = src
        .iter()
        .map(|&g| {
            let mut t = stream.below(3);
            if t >= g {
                t += 1;
            }
            t
        })
        .collect();
    for &t in &tgt {
        let members = &by_group[t];
        let _ = members[stream.below(members.len())];
    }
    let images = {
        let mut xs = Tensor::<f64>::zeros(&[n, 1, 32, 32]);
        for (row, &i) in indices.iter().enumerate() {
            for (dst, &srcv) in xs.sample_mut(row).iter_mut().zip(&dataset.image(i).pixels) {
                *dst = srcv as f64;
            }
        }
        xs
    };
    let (x, _) = glow::preprocess(&images, 256, &mut stream).unwrap();
    let (zz, _) = stage1.glow.encode(&x).unwrap();
    let packed = glow::pack_latent(&zz, &cfg.glow).unwrap();
    let shape: Vec<usize> = packed.shape()[1..].to_vec();
    let mut expect = 0.0;
    for row in 0..n {
        let z_row = Tensor::from_vec(&shape, packed.sample(row).to_vec());
        let target = akd_target(&z_row, &table, src[row], tgt[row], attrs[row], tc.manip_scale).unwrap();
        expect += akd_loss(&z_row, &target);
    }
    expect /= n as f64;
    assert!(
        (logged - expect).abs() <= 1e-6 * expect.abs().max(1.0),
        "first loss {logged} vs closed form {expect}"
    );
    std::fs::remove_dir_all(&dir).ok();
    println!(
        "criterion 4 PASS: identity at init bit-exact; init loss {logged:.6} matches closed-form distillation value {expect:.6} within 1e-6"
    );
}

// ── criterion 5: loss formula checks ────────────────────────────────────

#[test]
fn criterion_5_loss_formulas() {
    // adversarial generator loss on constructed scores
    assert!((generator_adv_loss(&[1.0, 1.0]) - 0.0).abs() < 1e-6);
    assert!((generator_adv_loss(&[0.0, 0.0]) - 0.5).abs() < 1e-6);
    assert!((generator_adv_loss(&[0.5]) - 0.125).abs() < 1e-6);

    // age classification on uniform logits with n = 4
    let logits = Tensor::from_vec(&[4], vec![0.0f64; 4]);
    assert!((age_cls_loss(&logits, 1) - 4.0f64.ln()).abs() < 1e-6);

    // consistency loss minimum at 16 dims
    let c = ConditionGaussian::<f64> {
        mu: Tensor::from_vec(&[8], (0..8).map(|i| i as f64).collect()),
        log_sigma: Tensor::from_vec(&[8], (0..8).map(|i| -(i as f64)).collect()),
    };
    let min = consistency_loss(&c, &c);
    assert!((min - 8.0 * (2.0 * std::f64::consts::PI).ln()).abs() < 1e-6);

    // total generator loss with unit parts and reference weights
    let w = LossWeights::default();
    let unit = GeneratorLossParts { akd: 1.0, al: 1.0, acl: 1.0, cl: 1.0 };
    assert!((total_generator_loss(&unit, &w) - 3.01).abs() < 1e-6);

    // discriminator loss at the perfect-discriminator construction
    let perfect_logits = Tensor::from_vec(&[2, 4], vec![80.0, 0.0, 0.0, 0.0, 0.0, 80.0, 0.0, 0.0]);
    let ld = discriminator_loss(&[1.0, 1.0], &[0.0, 0.0], &perfect_logits, &[0, 1], &w);
    assert!(ld.abs() < 1e-6);

    println!(
        "criterion 5 PASS: adversarial {{0, 0.5, 0.125}}, uniform CE ln4 = {:.6}, consistency min = {min:.6}, total = 3.01, perfect discriminator loss = {ld:.2e}",
        4.0f64.ln()
    );
}

// ── criterion 6: stage-1 training ───────────────────────────────────────

#[test]
fn criterion_6_stage1_bits_per_dim_decrease() {
    let a = &*ARTIFACTS;
    assert!(
        !a.stage1_csv.to_lowercase().contains("nan") && !a.stage1_csv.to_lowercase().contains("inf"),
        "stage-1 loss log contains non-finite values"
    );
    let bpd: Vec<f64> = a
        .stage1_csv
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(2).unwrap().parse().unwrap())
        .collect();
    assert_eq!(bpd.len(), 200);
    let first: f64 = bpd[..50].iter().sum::<f64>() / 50.0;
    let last: f64 = bpd[150..].iter().sum::<f64>() / 50.0;
    assert!(
        last < first,
        "50-iteration mean bits/dim did not decrease: first {first:.4}, last {last:.4}"
    );
    assert!(
        a.stage1_secs < 900.0,
        "stage 1 took {:.0}s, budget 900s",
        a.stage1_secs
    );
    println!(
        "criterion 6 PASS: bits/dim first-50 mean {first:.4} -> last-50 mean {last:.4} over 200 iterations ({:.0}s <= 900s)",
        a.stage1_secs
    );
}

// ── criterion 7: stage-2 end-to-end metrics ─────────────────────────────

#[test]
fn criterion_7_stage2_translation_metrics() {
    let a = &*ARTIFACTS;
    assert!(a.stage2_iters <= 2000, "iteration budget");
    let r = &a.report_ictm;
    assert_eq!(r.pairs.len(), 12, "all 12 source/target pairs evaluated");
    let age = r.mean_age_accuracy();
    let attr = r.mean_attr_preservation();
    let shift = r.mean_centroid_shift();
    assert!(age >= 90.0, "age-oracle accuracy {age:.2}% < 90%");
    assert!(attr >= 95.0, "attribute preservation {attr:.2}% < 95%");
    assert!(shift <= 1.0, "mean centroid displacement {shift:.3}px > 1.0px");
    assert!(
        a.stage2_secs + a.eval_secs < 2700.0,
        "stage 2 + eval took {:.0}s, budget 2700s",
        a.stage2_secs + a.eval_secs
    );

    // trained prior conditions must be pairwise distinct
    let conds = a.prior.generate_for_groups(&[0, 1, 2, 3]).unwrap();
    for i in 0..4 {
        for j in i + 1..4 {
            assert!(
                conds[i].l2_distance(&conds[j]) > 0.0,
                "trained conditions for groups {i} and {j} coincide"
            );
        }
    }

    // age head sanity on true latents (train split)
    let mut rng = Rng::new(7979);
    let train_idx = a.dataset.indices_of(ageflow::toydata::Split::Train);
    let mut hits = 0usize;
    let pipeline = Pipeline {
        config: a.config.clone(),
        glow: a.glow.clone(),
        prototypes: Some(a.prototypes.clone()),
        ictm: Some(a.ictm.clone()),
        prior: Some(a.prior.clone()),
    };
    let mut count = 0usize;
    for &i in train_idx.iter() {
        let img = a.dataset.image(i);
        let t = img.to_tensor::<f32>();
        let (x, _) = glow::preprocess(&t, 256, &mut rng).unwrap();
        let packed = pipeline.encode_continuous(&x).unwrap();
        let flat_dim = packed.len();
        let flat = packed.reshape(&[1, flat_dim]);
        let (_, logits) = a.disc.forward(&flat).unwrap();
        let mut best = 0;
        for k in 1..4 {
            if logits.data()[k] > logits.data()[best] {
                best = k;
            }
        }
        if best == a.dataset.entries[i].group {
            hits += 1;
        }
        count += 1;
    }
    let acc = 100.0 * hits as f64 / count as f64;
    assert!(acc >= 95.0, "age head train accuracy {acc:.2}% < 95%");

    println!(
        "criterion 7 PASS: after {} iterations, age accuracy {age:.2}% (>=90), attribute preservation {attr:.2}% (>=95), centroid shift {shift:.3}px (<=1.0), age head {acc:.1}% on train latents ({:.0}s <= 2700s)",
        a.stage2_iters,
        a.stage2_secs + a.eval_secs
    );
}

// ── criterion 8: ablation ordering ──────────────────────────────────────

#[test]
fn criterion_8_ablation_ordering() {
    let a = &*ARTIFACTS;
    let age_ictm = a.report_ictm.mean_age_accuracy();
    let age_glow = a.report_glow_manip.mean_age_accuracy();
    let age_glow_attr = a.report_glow_attr.mean_age_accuracy();
    let attr_glow = a.report_glow_manip.mean_attr_preservation();
    let attr_glow_attr = a.report_glow_attr.mean_attr_preservation();

    assert!(
        age_ictm > age_glow_attr,
        "age accuracy: ictm {age_ictm:.2}% must beat glow-attr-manip {age_glow_attr:.2}%"
    );
    assert!(
        age_ictm > age_glow,
        "age accuracy: ictm {age_ictm:.2}% must beat glow-manip {age_glow:.2}%"
    );
    assert!(
        attr_glow_attr > attr_glow,
        "attribute preservation: glow-attr-manip {attr_glow_attr:.2}% must beat glow-manip {attr_glow:.2}%"
    );
    println!(
        "criterion 8 PASS: age accuracy ictm {age_ictm:.2}% > glow-attr {age_glow_attr:.2}% and > glow {age_glow:.2}%; attribute preservation glow-attr {attr_glow_attr:.2}% > glow {attr_glow:.2}%"
    );
}

// ── criterion 9: determinism and persistence ────────────────────────────

#[test]
fn criterion_9_determinism_and_persistence() {
    // identical config and seed on a reduced setup reproduce identical loss
    // CSVs and evaluation reports
    let mut cfg = AppConfig::default();
    cfg.glow.scales = 2;
    cfg.glow.flows_per_scale = 2;
    cfg.glow.subnet_width = 8;
    cfg.ictm.flows = 2;
    cfg.ictm.hidden_width = 8;
    cfg.ictm.latent_channels = cfg.glow.packed_shape().0;
    cfg.train.micro_batch = 4;
    cfg.train.accumulation = 2;
    cfg.train.glow_iters = 8;
    cfg.train.ictm_iters = 4;
    cfg.train.lr_glow = 1e-3;
    cfg.train.lr_ictm = 1e-3;

    let dir = std::env::temp_dir().join("ageflow_acceptance_c9");
    std::fs::remove_dir_all(&dir).ok();
    let manifest = dataset_generate(64, cfg.train.seed, &dir).unwrap();
    let dataset = Dataset::load(manifest).unwrap();

    let run = || {
        let s1 = train_glow::<f32>(&cfg, &dataset).unwrap();
        let proto = compute_prototype_stage(&s1.glow, &dataset, cfg.train.seed).unwrap();
        let s2 = train_ictm(&cfg, &s1.glow, &proto, &dataset).unwrap();
        let pipeline = Pipeline {
            config: cfg.clone(),
            glow: s1.glow.clone(),
            prototypes: Some(proto.clone()),
            ictm: Some(s2.ictm.clone()),
            prior: Some(s2.prior.clone()),
        };
        let report =
            evaluate(&pipeline, &dataset, ageflow::toydata::Split::Test, TranslateMode::Ictm).unwrap();
        let stage2_csv = s2.csv.clone();
        (s1.csv, stage2_csv, report.to_csv(), s1.glow, proto, s2)
    };
    let (csv1a, csv2a, report_a, glow_a, proto_a, stage2_a) = run();
    let (csv1b, csv2b, report_b, _, _, _) = run();
    assert_eq!(csv1a, csv1b, "stage-1 loss CSVs differ between identical runs");
    assert_eq!(csv2a, csv2b, "stage-2 loss CSVs differ between identical runs");
    assert_eq!(report_a, report_b, "evaluation reports differ between identical runs");

    // checkpoint save -> load -> save is byte-identical
    let ckpt = full_checkpoint(&glow_a, &proto_a, &stage2_a.ictm, &stage2_a.prior, &stage2_a.disc, &cfg, 4)
        .unwrap();
    let bytes1 = ckpt.to_bytes();
    let reloaded = Checkpoint::<f32>::from_bytes(&bytes1).unwrap();
    let bytes2 = reloaded.to_bytes();
    assert_eq!(bytes1, bytes2, "save -> load -> save must be byte-identical");

    // and the big trained checkpoint round-trips too
    let a = &*ARTIFACTS;
    let big = full_checkpoint(&a.glow, &a.prototypes, &a.ictm, &a.prior, &a.disc, &a.config, a.stage2_iters)
        .unwrap();
    let b1 = big.to_bytes();
    let b2 = Checkpoint::<f32>::from_bytes(&b1).unwrap().to_bytes();
    assert_eq!(b1, b2);

    std::fs::remove_dir_all(&dir).ok();
    println!(
        "criterion 9 PASS: identical config+seed reproduce identical loss CSVs and EvalReports; checkpoint round trip byte-identical ({} bytes reduced, {} bytes desk-scale)",
        bytes1.len(),
        b1.len()
    );
}

// supporting check: translate-mode identity cases on the trained pipeline
#[test]
fn supporting_translate_consistency_on_trained_checkpoint() {
    let a = &*ARTIFACTS;
    let pipeline = Pipeline {
        config: a.config.clone(),
        glow: a.glow.clone(),
        prototypes: Some(a.prototypes.clone()),
        ictm: Some(a.ictm.clone()),
        prior: Some(a.prior.clone()),
    };
    let idx = a.dataset.indices_of(ageflow::toydata::Split::Test)[0];
    let image = a.dataset.image(idx);
    let entry = &a.dataset.entries[idx];

    // glow-manip with s = 0 reproduces the reconstruction exactly
    let recon = pipeline.reconstruct(image).unwrap();
    let out = pipeline
        .translate(
            image,
            (entry.group + 1) % 4,
            TranslateMode::GlowManip,
            SourceInfo { group: Some(entry.group), attr: Some(entry.attr) },
            Some(0.0),
        )
        .unwrap();
    let d = max_abs_diff(&out.continuous, &recon);
    assert!(d <= 1e-5, "glow-manip s=0 differs from reconstruction by {d}");

    // cycle: translate to g' then invert with the recovered condition
    let t = image.to_tensor::<f32>();
    let (x, _) = glow::preprocess_midpoint(&t, 256).unwrap();
    let target = (entry.group + 2) % 4;
    let (x_fwd, rec) = pipeline
        .translate_continuous(&x, image, target, TranslateMode::Ictm, SourceInfo::default(), None)
        .unwrap();
    let cond = match rec {
        ageflow::pipeline::RecoveredSource::Condition(c) => c,
        _ => unreachable!(),
    };
    let (x_back, _) = pipeline.translate_inverse_with_condition(&x_fwd, &cond).unwrap();
    let err = max_abs_diff(&x_back, &x);
    assert!(err <= 5e-2, "pipeline cycle error {err} > 5e-2");
    println!("supporting PASS: s=0 edit equals reconstruction ({d:.2e}); pipeline cycle error {err:.2e} <= 5e-2");
}
