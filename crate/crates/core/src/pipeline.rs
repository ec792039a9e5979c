//! The three-branch controlled sampling loop.
//!
//! Every step runs a structure pass and an appearance pass that only record
//! features, then the output pass that consumes them through an
//! [`OverrideSet`]. Classifier-free guidance combines a label-conditioned and
//! a null-label prediction of the output branch.
//!
//! # Random stream
//!
//! A run draws from one stream seeded by `RunConfig::seed`, in this order:
//!
//! 1. the initial latent `z` (`x_o` at the first timestep);
//! 2. per step `i`:
//!    - the structure noise (for `i = 0` this is `z` itself and nothing is drawn),
//!    - the appearance noise,
//!    - the DDIM noise,
//!    - one re-noising draw per self-recurrence iteration, when active.
//!
//! Every mode consumes the structure, appearance and DDIM draws, so a run
//! whose controls are all gated off is bit-identical to an uncontrolled one.
//! The jointly generated appearance branch uses its own stream seeded by
//! [`appearance_seed`], consumed exactly like an uncontrolled run.

use serde::{Deserialize, Serialize};

use crate::control::{build_override_set, control_active, ControlConfig, FeatureCache};
use crate::denoiser::{DenoiserModel, OverrideSet, TapKind, TapRecord, TapRequest};
use crate::error::{Error, Result};
use crate::rng::{self, Stream};
use crate::scheduler::{NoiseSchedule, TimestepMap};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    #[default]
    StructureAndAppearance,
    /// The appearance image is generated alongside the output from `cond_a`.
    ConditionalJointAppearance,
    AppearanceOnly,
    Uncontrolled,
}

impl Mode {
    pub const ALL: [Mode; 4] = [
        Mode::StructureAndAppearance,
        Mode::ConditionalJointAppearance,
        Mode::AppearanceOnly,
        Mode::Uncontrolled,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Mode::StructureAndAppearance => "structure_and_appearance",
            Mode::ConditionalJointAppearance => "conditional_joint_appearance",
            Mode::AppearanceOnly => "appearance_only",
            Mode::Uncontrolled => "uncontrolled",
        }
    }

    pub fn needs_structure(self) -> bool {
        matches!(self, Mode::StructureAndAppearance | Mode::ConditionalJointAppearance)
    }

    pub fn needs_appearance_image(self) -> bool {
        matches!(self, Mode::StructureAndAppearance | Mode::AppearanceOnly)
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::config(format!("unknown mode `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub num_steps: usize,
    pub eta: f64,
    pub cfg_scale: f64,
    /// Self-recurrence iterations per step inside the window.
    pub n_r: usize,
    pub tau_r0: f64,
    pub tau_r1: f64,
    pub control: ControlConfig,
    pub mode: Mode,
    pub seed: u64,
    /// Labels of the structure, appearance and output branches; `None` is the
    /// null label.
    pub cond_s: Option<usize>,
    pub cond_a: Option<usize>,
    pub cond_o: Option<usize>,
    /// Keep an `x0` estimate every this many steps; 0 keeps none.
    pub snapshot_every: usize,
    /// Tap the unconditional and recurrence passes to audit that no control
    /// reached them.
    pub audit: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            num_steps: 50,
            eta: 1.0,
            cfg_scale: 5.0,
            n_r: 2,
            tau_r0: 0.1,
            tau_r1: 0.5,
            control: ControlConfig::default(),
            mode: Mode::default(),
            seed: 0,
            cond_s: None,
            cond_a: None,
            cond_o: None,
            snapshot_every: 0,
            audit: false,
        }
    }
}

impl RunConfig {
    pub fn validate(&self, model: &DenoiserModel, sched: &NoiseSchedule) -> Result<()> {
        if self.num_steps == 0 || self.num_steps > sched.num_train_steps() {
            return Err(Error::config(format!(
                "num_steps must lie in [1, {}], got {}",
                sched.num_train_steps(),
                self.num_steps
            )));
        }
        if !(0.0..=1.0).contains(&self.eta) {
            return Err(Error::config(format!("eta must lie in [0, 1], got {}", self.eta)));
        }
        if !self.cfg_scale.is_finite() {
            return Err(Error::config("cfg_scale must be finite"));
        }
        if !(0.0..=1.0).contains(&self.tau_r0) || !(0.0..=1.0).contains(&self.tau_r1) || self.tau_r0 > self.tau_r1 {
            return Err(Error::config(format!(
                "need 0 <= tau_r0 <= tau_r1 <= 1, got {} and {}",
                self.tau_r0, self.tau_r1
            )));
        }
        self.control.validate(model.config())?;
        let n = model.config().num_classes;
        for (c, name) in [(self.cond_s, "cond_s"), (self.cond_a, "cond_a"), (self.cond_o, "cond_o")] {
            if c.is_some_and(|c| c >= n) {
                return Err(Error::config(format!("{name} must be below num_classes = {n}")));
            }
        }
        Ok(())
    }

    fn recurrence_active(&self, progress: f64) -> bool {
        self.n_r > 0 && self.mode != Mode::Uncontrolled && progress >= self.tau_r0 && progress <= self.tau_r1
    }
}

/// Seed of the jointly generated appearance branch's stream.
pub fn appearance_seed(seed: u64) -> u64 {
    seed ^ 0x5DEE_CE66_D1CE_4E5B
}

/// Clean inputs of a run, as `[3, H, W]` tensors in `[-1, 1]`.
#[derive(Clone, Debug, Default)]
pub struct Sources {
    pub structure: Option<Tensor>,
    pub appearance: Option<Tensor>,
    /// Structure latents per sampling step (e.g. from [`ddim_invert`]);
    /// replaces forward diffusion of `structure` when present.
    pub structure_latents: Option<Vec<Tensor>>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepRecord {
    pub step: usize,
    pub t: usize,
    pub t_prev: usize,
    pub progress: f64,
    pub structure_control: bool,
    pub appearance_control: bool,
    pub recurrence: usize,
    /// Overridden tap records seen in the unconditional pass (audit only).
    pub uncond_overridden: usize,
    /// Overridden tap records seen in recurrence passes (audit only).
    pub recurrence_overridden: usize,
}

#[derive(Clone, Debug, Default)]
pub struct RunTrace {
    pub steps: Vec<StepRecord>,
    /// `(step, x0 estimate)` every `snapshot_every` steps.
    pub snapshots: Vec<(usize, Tensor)>,
    /// Final image of the jointly generated appearance branch.
    pub appearance_output: Option<Tensor>,
}

impl RunTrace {
    /// One JSON object per step.
    pub fn to_jsonl(&self) -> String {
        self.steps
            .iter()
            .map(|s| serde_json::to_string(s).expect("step record serialises") + "\n")
            .collect()
    }
}

/// `eps_uncond + scale * (eps_cond - eps_uncond)`; exact at scale 0 and 1.
pub fn cfg_combine(eps_cond: &Tensor, eps_uncond: &Tensor, scale: f64) -> Result<Tensor> {
    eps_cond.ensure_same_shape(eps_uncond, "cfg_combine")?;
    if scale == 1.0 {
        return Ok(eps_cond.clone());
    }
    if scale == 0.0 {
        return Ok(eps_uncond.clone());
    }
    let s = scale as f32;
    Ok(eps_uncond.zip_map(eps_cond, |u, c| u + s * (c - u)))
}

struct Ctx<'a> {
    model: &'a DenoiserModel,
    map: TimestepMap,
    cfg: &'a RunConfig,
    null: usize,
}

impl Ctx<'_> {
    fn label(&self, c: Option<usize>) -> usize {
        c.unwrap_or(self.null)
    }

    /// Guided noise prediction. Conditional overrides go to the labelled
    /// branch, and to the null branch too unless `cond_branch_only`.
    fn guided(&self, x: &Tensor, t: usize, cond: usize, ov: &OverrideSet, audit: &[TapRequest]) -> Result<(Tensor, usize)> {
        let (eps_c, _) = self.model.forward(x, t, cond, &[], ov)?;
        if self.cfg.cfg_scale == 1.0 {
            return Ok((eps_c, 0));
        }
        let empty = OverrideSet::default();
        let uncond_ov = if self.cfg.control.cond_branch_only { &empty } else { ov };
        let (eps_u, recs) = self.model.forward(x, t, self.null, audit, uncond_ov)?;
        Ok((cfg_combine(&eps_c, &eps_u, self.cfg.cfg_scale)?, overridden(&recs)))
    }

    fn audit_taps(&self) -> Vec<TapRequest> {
        if !self.cfg.audit {
            return Vec::new();
        }
        let c = &self.cfg.control;
        c.feat_layers
            .iter()
            .map(|l| TapRequest::new(*l, TapKind::ConvFeature))
            .chain(c.self_layers.iter().map(|l| TapRequest::new(*l, TapKind::AttnMap)))
            .chain(c.app_layers.iter().map(|l| TapRequest::new(*l, TapKind::PreAttnFeature)))
            .collect()
    }
}

fn overridden(recs: &[TapRecord]) -> usize {
    recs.iter().filter(|r| r.overridden).count()
}

/// Re-noises `x_prev` from `t_prev` to `t` and denoises it back without
/// control, `n_r` times. Draws one noise tensor per iteration.
#[allow(clippy::too_many_arguments)]
pub fn self_recurrence(
    x_prev: &Tensor,
    t: usize,
    t_prev: usize,
    n_r: usize,
    model: &DenoiserModel,
    sched: &NoiseSchedule,
    cond: usize,
    cfg_scale: f64,
    rng: &mut Stream,
) -> Result<Tensor> {
    let null = model.config().null_class();
    let mut x = x_prev.clone();
    for _ in 0..n_r {
        let noise = rng::normal(rng, x.shape());
        let x_t = sched.renoise(&x, t_prev, t, &noise)?;
        let eps_c = model.predict(&x_t, t, cond)?;
        let eps = if cfg_scale == 1.0 {
            eps_c
        } else {
            cfg_combine(&eps_c, &model.predict(&x_t, t, null)?, cfg_scale)?
        };
        x = sched.ddim_step(&x_t, &eps, t, t_prev, 0.0, &noise)?;
    }
    Ok(x)
}

/// Generates one image. Returns the output clamped to `[-1, 1]` and the trace.
pub fn run(model: &DenoiserModel, sched: &NoiseSchedule, sources: &Sources, cfg: &RunConfig) -> Result<(Tensor, RunTrace)> {
    cfg.validate(model, sched)?;
    let mc = model.config();
    let shape = [mc.channels, mc.image_size, mc.image_size];
    check_sources(sources, cfg, &shape)?;
    let ctx = Ctx {
        model,
        map: TimestepMap::new(sched, cfg.num_steps)?,
        cfg,
        null: mc.null_class(),
    };
    let n = ctx.map.len();
    if let Some(l) = &sources.structure_latents {
        if l.len() != n {
            return Err(Error::config(format!("{} structure latents for {n} steps", l.len())));
        }
    }
    let (cond_s, cond_a, cond_o) = (ctx.label(cfg.cond_s), ctx.label(cfg.cond_a), ctx.label(cfg.cond_o));

    let mut rng = rng::stream(cfg.seed);
    let z = rng::normal(&mut rng, &shape);
    let mut x_o = match &sources.structure_latents {
        Some(l) if cfg.mode.needs_structure() => l[0].clone(),
        _ => z.clone(),
    };

    // Jointly generated appearance branch: an uncontrolled run on its own stream.
    let mut joint = (cfg.mode == Mode::ConditionalJointAppearance).then(|| {
        let mut r = rng::stream(appearance_seed(cfg.seed));
        let x = rng::normal(&mut r, &shape);
        (r, x)
    });

    let audit = ctx.audit_taps();
    let mut trace = RunTrace::default();
    let feat_taps: Vec<TapRequest> = cfg
        .control
        .feat_layers
        .iter()
        .map(|l| TapRequest::new(*l, TapKind::ConvFeature))
        .chain(cfg.control.self_layers.iter().map(|l| TapRequest::new(*l, TapKind::AttnMap)))
        .collect();
    let app_taps: Vec<TapRequest> =
        cfg.control.app_layers.iter().map(|l| TapRequest::new(*l, TapKind::PreAttnFeature)).collect();

    for i in 0..n {
        let (t, t_prev, progress) = (ctx.map.t(i), ctx.map.t_prev(i), ctx.map.progress(i));
        let eps_s = if i == 0 { z.clone() } else { rng::normal(&mut rng, &shape) };
        let eps_a = rng::normal(&mut rng, &shape);
        let ddim_noise = rng::normal(&mut rng, &shape);

        let s_on = cfg.mode.needs_structure() && control_active(progress, cfg.control.tau_s);
        let a_on = cfg.mode != Mode::Uncontrolled && control_active(progress, cfg.control.tau_a);

        let mut cache = FeatureCache {
            step_t: t,
            ..FeatureCache::default()
        };
        if s_on {
            let x_s = match &sources.structure_latents {
                Some(l) => l[i].clone(),
                None => sched.forward_diffuse(structure(sources)?, t, &eps_s)?,
            };
            let (_, recs) = model.forward(&x_s, t, cond_s, &feat_taps, &OverrideSet::default())?;
            for r in recs {
                match r.kind {
                    TapKind::ConvFeature => cache.f_s.insert(r.layer, r.tensor),
                    _ => cache.a_s.insert(r.layer, r.tensor),
                };
            }
        }

        // The joint branch needs its labelled prediction every step; the
        // appearance taps ride along on that same pass.
        let mut joint_eps_c = None;
        if let Some((_, x_a)) = &joint {
            let taps: &[TapRequest] = if a_on { &app_taps } else { &[] };
            let (eps_c, recs) = model.forward(x_a, t, cond_a, taps, &OverrideSet::default())?;
            cache.h_a.extend(recs.into_iter().map(|r| (r.layer, r.tensor)));
            joint_eps_c = Some(eps_c);
        } else if a_on {
            let x_a = sched.forward_diffuse(appearance(sources)?, t, &eps_a)?;
            let (_, recs) = model.forward(&x_a, t, cond_a, &app_taps, &OverrideSet::default())?;
            cache.h_a.extend(recs.into_iter().map(|r| (r.layer, r.tensor)));
        }

        let mut control = cfg.control.clone();
        if !s_on {
            control.feat_layers.clear();
            control.self_layers.clear();
        }
        if !a_on {
            control.app_layers.clear();
        }
        let ov = build_override_set(&cache, &control, progress, t)?;
        let (eps, uncond_overridden) = ctx.guided(&x_o, t, cond_o, &ov, &audit)?;
        let x0_hat = (cfg.snapshot_every > 0 && i % cfg.snapshot_every == 0)
            .then(|| sched.predict_x0(&x_o, &eps, t))
            .transpose()?;
        x_o = sched.ddim_step(&x_o, &eps, t, t_prev, cfg.eta, &ddim_noise)?;

        if let Some((r, x_a)) = &mut joint {
            let eps_c = joint_eps_c.take().expect("joint prediction");
            let eps = if cfg.cfg_scale == 1.0 {
                eps_c
            } else {
                cfg_combine(&eps_c, &model.predict(x_a, t, ctx.null)?, cfg.cfg_scale)?
            };
            let _ = if i == 0 { None } else { Some(rng::normal(r, &shape)) };
            let _ = rng::normal(r, &shape);
            let noise = rng::normal(r, &shape);
            *x_a = sched.ddim_step(x_a, &eps, t, t_prev, cfg.eta, &noise)?;
        }

        let mut recurrence = 0;
        let mut recurrence_overridden = 0;
        if cfg.recurrence_active(progress) {
            if cfg.audit {
                let noise = rng::normal(&mut rng.clone(), &shape);
                let x_t = sched.renoise(&x_o, t_prev, t, &noise)?;
                let (_, recs) = model.forward(&x_t, t, cond_o, &audit, &OverrideSet::default())?;
                recurrence_overridden = overridden(&recs);
            }
            x_o = self_recurrence(&x_o, t, t_prev, cfg.n_r, model, sched, cond_o, cfg.cfg_scale, &mut rng)?;
            recurrence = cfg.n_r;
        }

        trace.steps.push(StepRecord {
            step: i,
            t,
            t_prev,
            progress,
            structure_control: !ov.conv.is_empty() || !ov.attn.is_empty(),
            appearance_control: !ov.appearance.is_empty(),
            recurrence,
            uncond_overridden,
            recurrence_overridden,
        });
        if let Some(x0) = x0_hat {
            trace.snapshots.push((i, x0.clamp(-1.0, 1.0)));
        }
    }
    trace.appearance_output = joint.map(|(_, x)| x.clamp(-1.0, 1.0));
    Ok((x_o.clamp(-1.0, 1.0), trace))
}

fn structure(s: &Sources) -> Result<&Tensor> {
    s.structure.as_ref().ok_or_else(|| Error::config("this mode needs a structure image"))
}

fn appearance(s: &Sources) -> Result<&Tensor> {
    s.appearance.as_ref().ok_or_else(|| Error::config("this mode needs an appearance image"))
}

fn check_sources(s: &Sources, cfg: &RunConfig, shape: &[usize]) -> Result<()> {
    if cfg.mode.needs_structure() && s.structure.is_none() && s.structure_latents.is_none() {
        return Err(Error::config(format!("mode {} needs a structure image", cfg.mode.name())));
    }
    if cfg.mode.needs_appearance_image() && s.appearance.is_none() {
        return Err(Error::config(format!("mode {} needs an appearance image", cfg.mode.name())));
    }
    for (t, what) in [(&s.structure, "structure image"), (&s.appearance, "appearance image")] {
        if let Some(t) = t {
            t.ensure_shape(shape, what)?;
        }
    }
    Ok(())
}

/// Deterministic DDIM inversion of a clean image.
///
/// Walks the sampling timesteps in increasing order starting from `x0`
/// placed at the smallest timestep, predicting noise with label `cond` and
/// no guidance. Returns the latent for each sampling step `i`, so `[0]` is
/// the most-noised latent.
pub fn ddim_invert(model: &DenoiserModel, sched: &NoiseSchedule, x0: &Tensor, cond: usize, num_steps: usize) -> Result<Vec<Tensor>> {
    let map = TimestepMap::new(sched, num_steps)?;
    let n = map.len();
    let mut latents = vec![Tensor::zeros(&[0]); n];
    let mut x = x0.clone();
    latents[n - 1] = x.clone();
    for i in (1..n).rev() {
        let (t, t_next) = (map.t(i), map.t(i - 1));
        let eps = model.predict(&x, t, cond)?;
        let x0_hat = sched.predict_x0(&x, &eps, t)?;
        let ab = sched.alpha_bar(t_next);
        let (a, b) = (ab.sqrt() as f32, (1.0 - ab).sqrt() as f32);
        x = x0_hat.zip_map(&eps, |p, e| a * p + b * e);
        latents[i - 1] = x.clone();
    }
    Ok(latents)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::DenoiserConfig;

    #[test]
    fn cfg_combine_boundaries() {
        let c = Tensor::from_fn(&[2, 3], |i| i as f32 * 0.37 - 1.0);
        let u = Tensor::from_fn(&[2, 3], |i| (i as f32).sin());
        assert_eq!(cfg_combine(&c, &u, 1.0).unwrap(), c);
        assert_eq!(cfg_combine(&c, &u, 0.0).unwrap(), u);
        assert_eq!(cfg_combine(&c, &c, 7.5).unwrap(), c);
        let g = cfg_combine(&c, &u, 3.0).unwrap();
        for i in 0..6 {
            let want = u.data()[i] + 3.0 * (c.data()[i] - u.data()[i]);
            assert!((g.data()[i] - want).abs() < 1e-6);
        }
        assert!(cfg_combine(&c, &Tensor::zeros(&[6]), 2.0).is_err());
    }

    #[test]
    fn mode_names_round_trip() {
        for m in Mode::ALL {
            assert_eq!(m.name().parse::<Mode>().unwrap(), m);
        }
        assert!("both".parse::<Mode>().is_err());
    }

    #[test]
    fn invalid_run_configs_are_rejected() {
        let model = DenoiserModel::new(DenoiserConfig::micro(), 0).unwrap();
        let sched = NoiseSchedule::default_scaled_linear();
        let bad = [
            RunConfig { num_steps: 0, ..RunConfig::default() },
            RunConfig { eta: 1.5, ..RunConfig::default() },
            RunConfig { tau_r0: 0.6, tau_r1: 0.5, ..RunConfig::default() },
            RunConfig { cond_o: Some(99), ..RunConfig::default() },
        ];
        for cfg in bad {
            assert!(matches!(cfg.validate(&model, &sched), Err(Error::Config(_))), "{cfg:?}");
        }
    }

    #[test]
    fn recurrence_window_is_inclusive() {
        let cfg = RunConfig::default();
        assert!(!cfg.recurrence_active(0.08));
        assert!(cfg.recurrence_active(0.1));
        assert!(cfg.recurrence_active(0.5));
        assert!(!cfg.recurrence_active(0.52));
        let off = RunConfig { mode: Mode::Uncontrolled, ..RunConfig::default() };
        assert!(!off.recurrence_active(0.3));
    }
}
