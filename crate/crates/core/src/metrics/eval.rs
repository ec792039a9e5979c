//! Paired evaluation: structure from scene A, appearance from scene B.
//!
//! Pairs share a scene class, so every shape of A has a same-kind partner in
//! B whose colours define the intended appearance of that region.

use serde::{Deserialize, Serialize};

use crate::denoiser::{DenoiserModel, LayerId, OverrideSet, StatsWeighting, Sublayer, TapKind, TapRequest};
use crate::error::{Error, Result};
use crate::image::RgbImage;
use crate::pipeline::{ddim_invert, run, Mode, RunConfig, Sources};
use crate::rng;
use crate::tensor::Tensor;
use crate::trainer::scene::{gen_scene, render_condition, scene_seed, ConditionKind, Scene, SceneSpec};
use crate::NoiseSchedule;

use super::alignment::{palette_distance, region_color_error, self_similarity_distance, structure_iou, ColorHistogram};
use super::AlignmentReport;

/// Timestep at which output and source features are compared.
pub const FEATURE_T: usize = 201;
/// Seed of the shared noise used to diffuse both images to [`FEATURE_T`].
pub const FEATURE_SEED: u64 = 0xFEA7;

/// The layer whose self-similarity is compared.
pub fn feature_layer() -> LayerId {
    LayerId::dec(0, Sublayer::Conv)
}

/// `[tokens, channels]` features of `image` at `layer`, after diffusing it to
/// `t` with noise from `seed` and predicting with the null label.
pub fn denoiser_features(
    model: &DenoiserModel,
    sched: &NoiseSchedule,
    image: &RgbImage,
    layer: LayerId,
    t: usize,
    seed: u64,
) -> Result<Tensor> {
    let x0 = image.to_tensor();
    let eps = rng::normal(&mut rng::stream(seed), x0.shape());
    let x_t = sched.forward_diffuse(&x0, t, &eps)?;
    let tap = [TapRequest::new(layer, TapKind::ConvFeature)];
    let null = model.config().null_class();
    let (_, mut recs) = model.forward(&x_t, t, null, &tap, &OverrideSet::default())?;
    Ok(recs.remove(0).tensor)
}

/// Partner in `b` for every shape of `a`: same kind, matched in raster order
/// of the shape centres. `None` when the kind multisets differ.
pub fn match_shapes(a: &SceneSpec, b: &SceneSpec) -> Option<Vec<usize>> {
    let order = |s: &SceneSpec| {
        let mut idx: Vec<usize> = (0..s.shapes.len()).collect();
        idx.sort_by(|&i, &j| {
            let (ci, cj) = (s.shapes[i].center(), s.shapes[j].center());
            (s.shapes[i].kind as u8, ci.1, ci.0)
                .partial_cmp(&(s.shapes[j].kind as u8, cj.1, cj.0))
                .expect("finite centres")
        });
        idx
    };
    let (oa, ob) = (order(a), order(b));
    if oa.len() != ob.len() || oa.iter().zip(&ob).any(|(&i, &j)| a.shapes[i].kind != b.shapes[j].kind) {
        return None;
    }
    let mut map = vec![0; oa.len()];
    for (&i, &j) in oa.iter().zip(&ob) {
        map[i] = j;
    }
    Some(map)
}

#[derive(Clone, Debug)]
pub struct Pair {
    pub index: usize,
    /// Structure scene.
    pub a: Scene,
    /// Appearance scene, same class as `a`.
    pub b: Scene,
    /// How the structure image is rendered from `a`.
    pub kind: ConditionKind,
    /// `shape_map[i]` is the shape of `b` partnered with shape `i` of `a`.
    pub shape_map: Vec<usize>,
}

impl Pair {
    pub fn id(&self) -> String {
        format!("pair{:03}", self.index)
    }

    pub fn structure_image(&self) -> RgbImage {
        render_condition(&self.a.spec, self.kind)
    }

    /// Rebuilds a pair from its manifest entry.
    pub fn from_entry(e: &PairEntry) -> Result<Self> {
        let (a, b) = (gen_scene(e.structure_seed), gen_scene(e.appearance_seed));
        let shape_map = match_shapes(&a.spec, &b.spec).ok_or_else(|| {
            Error::config(format!(
                "pair {}: scenes {} and {} have different shape kinds",
                e.index, e.structure_seed, e.appearance_seed
            ))
        })?;
        Ok(Self {
            index: e.index,
            a,
            b,
            kind: e.kind,
            shape_map,
        })
    }

    pub fn entry(&self) -> PairEntry {
        PairEntry {
            index: self.index,
            structure_seed: self.a.seed,
            appearance_seed: self.b.seed,
            kind: self.kind,
        }
    }

    /// Intended colour of every region of `a`: background, then shapes.
    pub fn appearance_targets(&self) -> Vec<[f64; 3]> {
        std::iter::once(self.b.palette[0])
            .chain(self.shape_map.iter().map(|&j| self.b.palette[j + 1]))
            .collect()
    }
}

/// One line of a pair manifest.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairEntry {
    pub index: usize,
    pub structure_seed: u64,
    pub appearance_seed: u64,
    pub kind: ConditionKind,
}

/// `count` pairs drawn from the scene stream of `base_seed`. Each pair takes
/// the next unused scene as A and the first later same-class scene as B; the
/// rendering kind cycles through `kinds`.
pub fn make_pairs(base_seed: u64, count: usize, kinds: &[ConditionKind]) -> Vec<Pair> {
    assert!(!kinds.is_empty(), "at least one condition kind");
    let mut pool: Vec<Scene> = Vec::new();
    let mut next = 0;
    let mut draw = |pool: &mut Vec<Scene>| {
        pool.push(gen_scene(scene_seed(base_seed, next)));
        next += 1;
    };
    let mut pairs = Vec::with_capacity(count);
    while pairs.len() < count {
        if pool.is_empty() {
            draw(&mut pool);
        }
        let a = pool.remove(0);
        let pos = loop {
            if let Some(p) = pool.iter().position(|s| s.spec.class_id == a.spec.class_id) {
                break p;
            }
            draw(&mut pool);
        };
        let b = pool.remove(pos);
        let shape_map = match_shapes(&a.spec, &b.spec).expect("same class implies same kinds");
        pairs.push(Pair {
            index: pairs.len(),
            kind: kinds[pairs.len() % kinds.len()],
            a,
            b,
            shape_map,
        });
    }
    pairs
}

/// Scores outputs of one pair, caching the source-side quantities.
pub struct PairScorer<'a> {
    model: &'a DenoiserModel,
    sched: &'a NoiseSchedule,
    pair: &'a Pair,
    feat_a: Tensor,
    hist_a: ColorHistogram,
    hist_b: ColorHistogram,
}

impl<'a> PairScorer<'a> {
    pub fn new(model: &'a DenoiserModel, sched: &'a NoiseSchedule, pair: &'a Pair) -> Result<Self> {
        Ok(Self {
            feat_a: denoiser_features(model, sched, &pair.a.image, feature_layer(), FEATURE_T, FEATURE_SEED)?,
            hist_a: ColorHistogram::of(&pair.a.image),
            hist_b: ColorHistogram::of(&pair.b.image),
            model,
            sched,
            pair,
        })
    }

    pub fn score(&self, output: &RgbImage, variant: &str) -> Result<AlignmentReport> {
        let masks = self.pair.a.shape_masks();
        let feat_o = denoiser_features(self.model, self.sched, output, feature_layer(), FEATURE_T, FEATURE_SEED)?;
        let report = AlignmentReport {
            pair: self.pair.id(),
            variant: variant.to_owned(),
            structure_iou: structure_iou(output, &masks)?.mean,
            self_sim_distance: self_similarity_distance(&self.feat_a, &feat_o)?,
            palette_distance: palette_distance(output, &self.hist_b),
            palette_distance_a: palette_distance(output, &self.hist_a),
            region_color_error: region_color_error(output, &masks, &self.pair.appearance_targets())?,
        };
        report.validate()?;
        Ok(report)
    }
}

/// One generation to score against a pair.
#[derive(Clone, Debug)]
pub struct Variant {
    pub name: &'static str,
    pub config: RunConfig,
    pub sources: Sources,
}

/// `template` specialised to a pair: per-pair seed and the shared class label
/// on every branch.
pub fn pair_config(pair: &Pair, template: &RunConfig) -> RunConfig {
    let class = Some(pair.a.spec.class_id);
    RunConfig {
        seed: template.seed.wrapping_add(pair.index as u64),
        cond_s: class,
        cond_a: class,
        cond_o: class,
        ..template.clone()
    }
}

/// Structure rendered as `kind` from scene A, appearance from scene B.
pub fn pair_sources(pair: &Pair, kind: ConditionKind) -> Sources {
    Sources {
        structure: Some(render_condition(&pair.a.spec, kind).to_tensor()),
        appearance: Some(pair.b.image.to_tensor()),
        structure_latents: None,
    }
}

/// The controlled run and its uncontrolled baseline on the same seed.
pub fn baseline_variants(pair: &Pair, template: &RunConfig) -> Vec<Variant> {
    let full = pair_config(pair, template);
    let sources = pair_sources(pair, pair.kind);
    vec![
        Variant {
            name: "uncontrolled",
            config: RunConfig {
                mode: Mode::Uncontrolled,
                ..full.clone()
            },
            sources: sources.clone(),
        },
        Variant {
            name: "controlled",
            config: full,
            sources,
        },
    ]
}

/// Names of the ablation grid, in output order: the three control subsets,
/// the two statistics weightings and the two structure-latent sources.
pub const ABLATION_VARIANTS: [&str; 7] = [
    "appearance_only",
    "structure_only",
    "full",
    "weighted",
    "uniform",
    "forward",
    "inversion",
];

/// The ablation grid of one pair, all on the natural rendering of A so that
/// structure-image appearance can leak. `weighted` and `forward` are the full
/// method under its default weighting and latent source; `inversion` replaces
/// forward diffusion of the structure image with deterministic DDIM inversion.
pub fn ablation_variants(
    model: &DenoiserModel,
    sched: &NoiseSchedule,
    pair: &Pair,
    template: &RunConfig,
) -> Result<Vec<Variant>> {
    let full = pair_config(pair, template);
    let natural = pair_sources(pair, ConditionKind::Natural);
    let latents = ddim_invert(
        model,
        sched,
        natural.structure.as_ref().expect("natural structure"),
        full.cond_s.unwrap_or(model.config().null_class()),
        full.num_steps,
    )?;
    let with = |f: &dyn Fn(&mut RunConfig)| {
        let mut c = full.clone();
        f(&mut c);
        c
    };
    let variants = vec![
        ("appearance_only", with(&|c| c.mode = Mode::AppearanceOnly), natural.clone()),
        ("structure_only", with(&|c| c.control.app_layers.clear()), natural.clone()),
        ("full", full.clone(), natural.clone()),
        ("weighted", with(&|c| c.control.appearance.weighting = StatsWeighting::Attention), natural.clone()),
        ("uniform", with(&|c| c.control.appearance.weighting = StatsWeighting::Uniform), natural.clone()),
        ("forward", full.clone(), natural.clone()),
        (
            "inversion",
            full,
            Sources {
                structure_latents: Some(latents),
                ..natural
            },
        ),
    ];
    debug_assert!(variants.iter().map(|v| v.0).eq(ABLATION_VARIANTS));
    Ok(variants
        .into_iter()
        .map(|(name, config, sources)| Variant { name, config, sources })
        .collect())
}

/// Runs and scores every variant in order.
pub fn evaluate(
    model: &DenoiserModel,
    sched: &NoiseSchedule,
    pair: &Pair,
    variants: &[Variant],
) -> Result<Vec<(AlignmentReport, RgbImage)>> {
    let scorer = PairScorer::new(model, sched, pair)?;
    variants
        .iter()
        .map(|v| {
            let (x, _) = run(model, sched, &v.sources, &v.config)?;
            let img = RgbImage::from_tensor(&x)?;
            Ok((scorer.score(&img, v.name)?, img))
        })
        .collect()
}
