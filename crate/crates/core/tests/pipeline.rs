use ctrlx::control::ControlConfig;
use ctrlx::denoiser::{DenoiserConfig, DenoiserModel, Side, Sublayer};
use ctrlx::pipeline::{appearance_seed, ddim_invert, run, Mode, RunConfig, Sources};
use ctrlx::rng::{normal, stream};
use ctrlx::{NoiseSchedule, Tensor};

fn micro() -> DenoiserModel {
    DenoiserModel::new(DenoiserConfig::micro(), 11).unwrap()
}

/// Structure and appearance control on every layer of the micro model that
/// supports it.
fn micro_control(m: &DenoiserModel) -> ControlConfig {
    let reg = m.config().registry();
    let dec_conv = reg.iter().find(|l| l.side == Side::Decoder && l.sublayer == Sublayer::Conv).copied().unwrap();
    let attn: Vec<_> = reg.iter().filter(|l| l.sublayer == Sublayer::SelfAttn).copied().collect();
    ControlConfig {
        feat_layers: [dec_conv].into(),
        self_layers: attn.iter().filter(|l| l.side == Side::Decoder).copied().collect(),
        app_layers: attn.into_iter().collect(),
        ..ControlConfig::default()
    }
}

fn image(seed: u64) -> Tensor {
    normal(&mut stream(seed), &[3, 8, 8]).map(|v| (v * 0.5).clamp(-1.0, 1.0))
}

fn sources() -> Sources {
    Sources {
        structure: Some(image(1)),
        appearance: Some(image(2)),
        structure_latents: None,
    }
}

fn config(m: &DenoiserModel, seed: u64) -> RunConfig {
    RunConfig {
        num_steps: 10,
        control: micro_control(m),
        seed,
        cond_o: Some(0),
        ..RunConfig::default()
    }
}

#[test]
fn zero_schedules_are_bit_identical_to_uncontrolled() {
    let (m, s) = (micro(), NoiseSchedule::default_scaled_linear());
    for seed in 0..5 {
        let mut cfg = config(&m, seed);
        cfg.control.tau_s = 0.0;
        cfg.control.tau_a = 0.0;
        cfg.n_r = 0;
        let (gated, trace) = run(&m, &s, &sources(), &cfg).unwrap();
        assert!(trace.steps.iter().all(|r| !r.structure_control && !r.appearance_control && r.recurrence == 0));
        cfg.mode = Mode::Uncontrolled;
        let (plain, _) = run(&m, &s, &Sources::default(), &cfg).unwrap();
        assert_eq!(gated, plain, "seed {seed}");
    }
}

#[test]
fn runs_are_deterministic_and_seed_dependent() {
    let (m, s) = (micro(), NoiseSchedule::default_scaled_linear());
    let cfg = config(&m, 3);
    let (a, ta) = run(&m, &s, &sources(), &cfg).unwrap();
    let (b, tb) = run(&m, &s, &sources(), &cfg).unwrap();
    assert_eq!(a, b);
    assert_eq!(ta.to_jsonl(), tb.to_jsonl());
    assert_ne!(a, run(&m, &s, &sources(), &config(&m, 4)).unwrap().0);
    assert!(a.data().iter().all(|v| (-1.0..=1.0).contains(v)));
}

#[test]
fn control_follows_the_schedules() {
    let (m, s) = (micro(), NoiseSchedule::default_scaled_linear());
    let mut cfg = config(&m, 0);
    cfg.control.tau_s = 0.3;
    cfg.control.tau_a = 0.6;
    cfg.n_r = 1;
    cfg.tau_r0 = 0.2;
    cfg.tau_r1 = 0.4;
    let (_, trace) = run(&m, &s, &sources(), &cfg).unwrap();
    assert_eq!(trace.steps.len(), 10);
    for r in &trace.steps {
        assert_eq!(r.structure_control, r.progress <= 0.3, "step {}", r.step);
        assert_eq!(r.appearance_control, r.progress <= 0.6, "step {}", r.step);
        assert_eq!(r.recurrence, usize::from((0.2..=0.4).contains(&r.progress)), "step {}", r.step);
    }
    assert_eq!(trace.steps[0].t, 901);
    assert_eq!(trace.steps[9].t_prev, 0);
}

#[test]
fn control_never_reaches_the_unconditional_or_recurrence_passes() {
    let (m, s) = (micro(), NoiseSchedule::default_scaled_linear());
    let mut cfg = config(&m, 5);
    cfg.audit = true;
    cfg.n_r = 2;
    cfg.tau_r0 = 0.0;
    cfg.tau_r1 = 1.0;
    let (_, trace) = run(&m, &s, &sources(), &cfg).unwrap();
    assert!(trace.steps.iter().any(|r| r.structure_control));
    assert!(trace.steps.iter().all(|r| r.uncond_overridden == 0 && r.recurrence_overridden == 0));

    // the audit is live: controlling both branches shows up in it
    cfg.control.cond_branch_only = false;
    let (_, trace) = run(&m, &s, &sources(), &cfg).unwrap();
    for r in &trace.steps {
        assert_eq!(r.uncond_overridden > 0, r.structure_control || r.appearance_control);
    }
}

#[test]
fn audit_does_not_perturb_the_output() {
    let (m, s) = (micro(), NoiseSchedule::default_scaled_linear());
    let mut cfg = config(&m, 6);
    let plain = run(&m, &s, &sources(), &cfg).unwrap().0;
    cfg.audit = true;
    assert_eq!(plain, run(&m, &s, &sources(), &cfg).unwrap().0);
}

#[test]
fn appearance_only_ignores_the_structure_image() {
    let (m, s) = (micro(), NoiseSchedule::default_scaled_linear());
    let mut cfg = config(&m, 7);
    cfg.mode = Mode::AppearanceOnly;
    let a = run(&m, &s, &sources(), &cfg).unwrap().0;
    let other = Sources {
        structure: Some(image(99)),
        ..sources()
    };
    assert_eq!(a, run(&m, &s, &other, &cfg).unwrap().0);

    // and equals the full method with structure control switched off
    cfg.mode = Mode::StructureAndAppearance;
    cfg.control.tau_s = 0.0;
    assert_eq!(a, run(&m, &s, &sources(), &cfg).unwrap().0);
}

#[test]
fn structure_image_matters_when_controlled() {
    let (m, s) = (micro(), NoiseSchedule::default_scaled_linear());
    let cfg = config(&m, 8);
    let other = Sources {
        structure: Some(image(99)),
        ..sources()
    };
    assert_ne!(run(&m, &s, &sources(), &cfg).unwrap().0, run(&m, &s, &other, &cfg).unwrap().0);
}

#[test]
fn joint_appearance_branch_is_an_uncontrolled_run_on_its_own_stream() {
    let (m, s) = (micro(), NoiseSchedule::default_scaled_linear());
    let mut cfg = config(&m, 9);
    cfg.mode = Mode::ConditionalJointAppearance;
    cfg.cond_a = Some(1);
    let src = Sources {
        appearance: None,
        ..sources()
    };
    let (_, trace) = run(&m, &s, &src, &cfg).unwrap();
    let joint = trace.appearance_output.expect("joint branch output");

    let mut plain = config(&m, appearance_seed(9));
    plain.mode = Mode::Uncontrolled;
    plain.cond_o = Some(1);
    assert_eq!(joint, run(&m, &s, &Sources::default(), &plain).unwrap().0);
}

#[test]
fn missing_sources_are_configuration_errors() {
    let (m, s) = (micro(), NoiseSchedule::default_scaled_linear());
    let cfg = config(&m, 0);
    let no_structure = Sources {
        structure: None,
        ..sources()
    };
    assert!(run(&m, &s, &no_structure, &cfg).is_err());
    let no_appearance = Sources {
        appearance: None,
        ..sources()
    };
    assert!(run(&m, &s, &no_appearance, &cfg).is_err());
    // the default control layers do not exist in the micro model
    let bad = RunConfig {
        control: ControlConfig::default(),
        ..cfg
    };
    assert!(run(&m, &s, &sources(), &bad).is_err());
}

#[test]
fn snapshots_follow_the_requested_cadence() {
    let (m, s) = (micro(), NoiseSchedule::default_scaled_linear());
    let mut cfg = config(&m, 1);
    cfg.snapshot_every = 3;
    let (_, trace) = run(&m, &s, &sources(), &cfg).unwrap();
    let steps: Vec<usize> = trace.snapshots.iter().map(|(i, _)| *i).collect();
    assert_eq!(steps, vec![0, 3, 6, 9]);
}

#[test]
fn inversion_latents_drive_the_structure_branch() {
    let (m, s) = (micro(), NoiseSchedule::default_scaled_linear());
    let x0 = image(1);
    let latents = ddim_invert(&m, &s, &x0, 0, 10).unwrap();
    assert_eq!(latents.len(), 10);
    assert_eq!(latents[9], x0);
    assert!(latents.iter().all(Tensor::all_finite));
    // latents grow noisier towards the first sampling step
    assert!(latents[0].mean_sq_diff(&x0) > latents[5].mean_sq_diff(&x0));

    let cfg = config(&m, 2);
    let inverted = Sources {
        structure_latents: Some(latents.clone()),
        ..sources()
    };
    let a = run(&m, &s, &inverted, &cfg).unwrap().0;
    assert_ne!(a, run(&m, &s, &sources(), &cfg).unwrap().0);
    let short = Sources {
        structure_latents: Some(latents[..5].to_vec()),
        ..sources()
    };
    assert!(run(&m, &s, &short, &cfg).is_err());
}
