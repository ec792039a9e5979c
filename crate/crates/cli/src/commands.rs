use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ctrlx::denoiser::{DenoiserModel, LayerId};
use ctrlx::image::RgbImage;
use ctrlx::metrics::eval::{
    ablation_variants, baseline_variants, denoiser_features, evaluate, make_pairs, Pair, PairEntry, Variant,
    FEATURE_SEED,
};
use ctrlx::metrics::{pca_feature_view, summary_grid, write_reports, AlignmentReport, FeatureBatch};
use ctrlx::pipeline::{self, Sources};
use ctrlx::trainer::dataset::{read_manifest, write_dataset, MANIFEST};
use ctrlx::trainer::{
    eval_loss, examples_from_scenes, load_checkpoint, save_checkpoint, ConditionKind, Trainer,
};
use ctrlx::NoiseSchedule;
use rayon::prelude::*;
use serde::Serialize;

use crate::config::RunFile;
use crate::{CliError, MakeDatasetArgs, PairArgs, RunArgs, TrainArgs, VizArgs};

/// File name of the pair manifest inside a dataset directory.
pub const PAIRS: &str = "pairs.jsonl";

fn runtime(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(format!("{}: {e}", path.display()))
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| runtime(dir, e))
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), CliError> {
    let text: String = rows
        .iter()
        .map(|r| serde_json::to_string(r).expect("row serialises") + "\n")
        .collect();
    fs::write(path, text).map_err(|e| runtime(path, e))
}

/// `flag` if given, else the run-file entry, else a usage error naming `name`.
fn required(flag: Option<PathBuf>, file: &Option<PathBuf>, name: &str) -> Result<PathBuf, CliError> {
    flag.or_else(|| file.clone())
        .ok_or_else(|| CliError::Usage(format!("{name} is required")))
}

fn existing(path: PathBuf, name: &str) -> Result<PathBuf, CliError> {
    if path.exists() {
        Ok(path)
    } else {
        Err(CliError::Usage(format!("{name} {}: no such file or directory", path.display())))
    }
}

/// Loads a checkpoint; its architecture replaces `[model]` so the echoed
/// config describes the model actually used.
fn load_model(path: &Path, file: &mut RunFile) -> Result<DenoiserModel, CliError> {
    let ckpt = load_checkpoint(path)?;
    if let Some(diff) = ctrlx::trainer::checkpoint::config_mismatch(&ckpt.config, &file.model) {
        eprintln!("note: using the checkpoint's model config ({diff} differs from [model])");
    }
    file.model = ckpt.config.clone();
    Ok(ckpt.into_model()?)
}

fn read_image(path: Option<PathBuf>, flag: &str) -> Result<Option<RgbImage>, CliError> {
    path.map(|p| {
        let p = existing(p, flag)?;
        RgbImage::read(&p).map_err(|e| CliError::Usage(format!("{flag}: {e}")))
    })
    .transpose()
}

/// Rayon pool capped by `CTRLX_THREADS` (unset or 0 means all cores).
fn pool() -> Result<rayon::ThreadPool, CliError> {
    let threads = match std::env::var("CTRLX_THREADS") {
        Ok(v) => v
            .parse()
            .map_err(|_| CliError::Usage(format!("CTRLX_THREADS must be a count, got `{v}`")))?,
        Err(_) => 0,
    };
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| CliError::Runtime(e.to_string()))
}

pub fn make_dataset(a: MakeDatasetArgs) -> Result<(), CliError> {
    if a.count == 0 {
        return Err(CliError::Usage("--count must be at least 1".into()));
    }
    let t0 = Instant::now();
    write_dataset(&a.out, a.seed, a.count)?;
    let pairs: Vec<PairEntry> = make_pairs(a.pair_seed, a.pairs, &[ConditionKind::Edge, ConditionKind::Silhouette, ConditionKind::Segmentation])
        .iter()
        .map(Pair::entry)
        .collect();
    write_jsonl(&a.out.join(PAIRS), &pairs)?;
    eprintln!(
        "wrote {} scenes and {} pairs to {} in {:.1}s",
        a.count,
        pairs.len(),
        a.out.display(),
        t0.elapsed().as_secs_f64()
    );
    Ok(())
}

#[derive(Serialize)]
struct LossRecord {
    step: usize,
    loss: f64,
    lr: f64,
}

#[derive(Serialize)]
struct TrainSummary {
    steps: usize,
    scenes: usize,
    eval_loss: f64,
    seconds: f64,
}

/// Draws used by the held-out loss estimate written after training.
const EVAL_DRAWS: usize = 512;

pub fn train(a: TrainArgs) -> Result<(), CliError> {
    let mut file = RunFile::load(a.common.config.as_deref())?;
    if let Some(s) = a.steps {
        file.train.steps = s;
    }
    if let Some(s) = a.seed {
        file.train.seed = s;
    }
    let dataset = existing(required(a.dataset, &file.paths.dataset, "--dataset")?, "--dataset")?;
    let out = required(a.common.out, &file.paths.output, "--out")?;
    file.paths.dataset = Some(dataset.clone());
    file.paths.output = Some(out.clone());
    file.train.validate()?;
    let sched = file.schedule()?;
    let entries = read_manifest(&dataset.join(MANIFEST))?;
    let scenes = entries.iter().map(|e| e.scene()).collect::<ctrlx::Result<Vec<_>>>()?;
    if scenes.is_empty() {
        return Err(CliError::Usage(format!("--dataset {}: manifest is empty", dataset.display())));
    }
    let data = examples_from_scenes(&scenes);
    let mut model = DenoiserModel::new(file.model.clone(), file.train.seed)?;
    create_dir(&out)?;
    file.echo(&out)?;

    let t0 = Instant::now();
    let mut trainer = Trainer::new(file.train.clone(), &model)?;
    let log_path = out.join("loss.jsonl");
    let mut log = fs::File::create(&log_path).map_err(|e| runtime(&log_path, e))?;
    for step in 0..file.train.steps {
        let loss = trainer.step(&mut model, &sched, &data)?;
        let rec = LossRecord {
            step: step + 1,
            loss,
            lr: file.train.lr_at(step),
        };
        writeln!(log, "{}", serde_json::to_string(&rec).expect("record serialises")).map_err(|e| runtime(&log_path, e))?;
        if a.checkpoint_every > 0 && (step + 1) % a.checkpoint_every == 0 {
            save_checkpoint(&trainer.checkpoint(&model), &out.join(format!("step{:06}.ckpt", step + 1)))?;
            eprintln!("step {} loss {loss:.5} ({:.0}s)", step + 1, t0.elapsed().as_secs_f64());
        }
    }
    save_checkpoint(&trainer.checkpoint(&model), &out.join("model.ckpt"))?;
    let summary = TrainSummary {
        steps: file.train.steps,
        scenes: scenes.len(),
        eval_loss: eval_loss(&model, &sched, &data, EVAL_DRAWS, file.train.seed ^ 0xE7A1)?,
        seconds: t0.elapsed().as_secs_f64(),
    };
    let path = out.join("summary.json");
    fs::write(&path, serde_json::to_string_pretty(&summary).expect("summary serialises")).map_err(|e| runtime(&path, e))?;
    eprintln!("trained {} steps, eval loss {:.5}", summary.steps, summary.eval_loss);
    Ok(())
}

pub fn run(a: RunArgs) -> Result<(), CliError> {
    let mut file = RunFile::load(a.common.config.as_deref())?;
    if let Some(m) = a.mode {
        file.run.mode = m;
    }
    if let Some(s) = a.seed {
        file.run.seed = s;
    }
    for (flag, slot) in [(a.cond_s, &mut file.run.cond_s), (a.cond_a, &mut file.run.cond_a), (a.cond_o, &mut file.run.cond_o)] {
        if flag.is_some() {
            *slot = flag;
        }
    }
    let mode = file.run.mode;
    if mode.needs_structure() && a.structure.is_none() {
        return Err(CliError::Usage(format!("--structure is required in {} mode", mode.name())));
    }
    if mode.needs_appearance_image() && a.appearance.is_none() {
        return Err(CliError::Usage(format!("--appearance is required in {} mode", mode.name())));
    }
    let ckpt = existing(required(a.checkpoint, &file.paths.checkpoint, "--checkpoint")?, "--checkpoint")?;
    let out = required(a.common.out, &file.paths.output, "--out")?;
    let structure = if mode.needs_structure() { read_image(a.structure, "--structure")? } else { None };
    let appearance = if mode.needs_appearance_image() { read_image(a.appearance, "--appearance")? } else { None };
    file.paths.checkpoint = Some(ckpt.clone());
    file.paths.output = Some(out.clone());

    let sched = file.schedule()?;
    let model = load_model(&ckpt, &mut file)?;
    let cfg = file.run_config();
    cfg.validate(&model, &sched)?;
    let sources = Sources {
        structure: structure.as_ref().map(RgbImage::to_tensor),
        appearance: appearance.as_ref().map(RgbImage::to_tensor),
        structure_latents: None,
    };
    create_dir(&out)?;
    file.echo(&out)?;
    let t0 = Instant::now();
    let (x, trace) = pipeline::run(&model, &sched, &sources, &cfg)?;
    let output = RgbImage::from_tensor(&x)?;
    output.write(&out.join("output.ppm"))?;

    let side = model.config().image_size;
    let blank = RgbImage::filled(side, side, [0; 3]);
    let joint = trace.appearance_output.as_ref().map(RgbImage::from_tensor).transpose()?;
    let panels = [
        structure.as_ref().unwrap_or(&blank),
        appearance.as_ref().or(joint.as_ref()).unwrap_or(&blank),
        &output,
    ];
    RgbImage::hstack(&panels, 2)?.write(&out.join("grid.ppm"))?;
    if let Some(j) = &joint {
        j.write(&out.join("appearance.ppm"))?;
    }
    let path = out.join("trace.jsonl");
    fs::write(&path, trace.to_jsonl()).map_err(|e| runtime(&path, e))?;
    for (step, snap) in &trace.snapshots {
        RgbImage::from_tensor(snap)?.write(&out.join(format!("x0_step{step:03}.ppm")))?;
    }
    eprintln!("{} run finished in {:.1}s", mode.name(), t0.elapsed().as_secs_f64());
    Ok(())
}

#[derive(Serialize)]
struct PcaRecord {
    t: usize,
    layer: String,
    explained: Vec<f64>,
}

pub fn viz_features(a: VizArgs) -> Result<(), CliError> {
    let mut file = RunFile::load(a.common.config.as_deref())?;
    let layer: LayerId = a.layer.parse().map_err(|e| CliError::Usage(format!("--layer: {e}")))?;
    let ckpt = existing(required(a.checkpoint, &file.paths.checkpoint, "--checkpoint")?, "--checkpoint")?;
    let dataset = existing(required(a.dataset, &file.paths.dataset, "--dataset")?, "--dataset")?;
    let out = required(a.common.out, &file.paths.output, "--out")?;
    if a.count == 0 || a.timesteps.is_empty() {
        return Err(CliError::Usage("--count and --timesteps must be non-empty".into()));
    }
    file.paths = crate::config::PathsSection {
        checkpoint: Some(ckpt.clone()),
        dataset: Some(dataset.clone()),
        output: Some(out.clone()),
    };
    let sched = file.schedule()?;
    if let Some(&t) = a.timesteps.iter().find(|&&t| t == 0 || t > sched.num_train_steps()) {
        return Err(CliError::Usage(format!("--timesteps: {t} is outside [1, {}]", sched.num_train_steps())));
    }
    let model = load_model(&ckpt, &mut file)?;
    if !model.config().contains(layer) {
        return Err(CliError::Usage(format!("--layer: `{layer}` is not a layer of this model")));
    }
    let entries = read_manifest(&dataset.join(MANIFEST))?;
    let entries = &entries[..a.count.min(entries.len())];
    // every condition rendering of each scene, so that shared structure shows up
    // as shared colours across modalities
    let mut inputs = Vec::new();
    for e in entries {
        for kind in ConditionKind::ALL {
            inputs.push((format!("scene{:05}_{}", e.index, kind.name()), RgbImage::read(&e.path(&dataset, kind)?)?));
        }
    }
    create_dir(&out)?;
    file.echo(&out)?;
    let mut records = Vec::new();
    for &t in &a.timesteps {
        let features = inputs
            .iter()
            .map(|(id, img)| Ok((id.clone(), denoiser_features(&model, &sched, img, layer, t, FEATURE_SEED)?)))
            .collect::<ctrlx::Result<Vec<_>>>()?;
        let side = (features[0].1.rows() as f64).sqrt() as usize;
        let view = pca_feature_view(&FeatureBatch { layer, t, features }, a.components, side)?;
        let scale = model.config().image_size / side;
        let rows: Vec<Vec<RgbImage>> = inputs
            .chunks(ConditionKind::ALL.len())
            .zip(view.maps.chunks(ConditionKind::ALL.len()))
            .map(|(ins, maps)| {
                ins.iter()
                    .zip(maps)
                    .flat_map(|((_, img), (_, map))| [img.clone(), map.upscale(scale)])
                    .collect()
            })
            .collect();
        summary_grid(&rows)?.write(&out.join(format!("pca_t{t:04}.ppm")))?;
        records.push(PcaRecord {
            t,
            layer: layer.to_string(),
            explained: view.explained,
        });
    }
    write_jsonl(&out.join("pca.jsonl"), &records)?;
    eprintln!("wrote {} PCA grids to {}", records.len(), out.display());
    Ok(())
}

struct PairJob {
    file: RunFile,
    model: DenoiserModel,
    sched: NoiseSchedule,
    pairs: Vec<Pair>,
    out: PathBuf,
}

fn pair_job(a: PairArgs) -> Result<PairJob, CliError> {
    let mut file = RunFile::load(a.common.config.as_deref())?;
    if let Some(s) = a.seed {
        file.run.seed = s;
    }
    let ckpt = existing(required(a.checkpoint, &file.paths.checkpoint, "--checkpoint")?, "--checkpoint")?;
    let pairs_path = match a.pairs {
        Some(p) => p,
        None => required(None, &file.paths.dataset, "--pairs")?.join(PAIRS),
    };
    let pairs_path = existing(pairs_path, "--pairs")?;
    let out = required(a.common.out, &file.paths.output, "--out")?;
    file.paths.checkpoint = Some(ckpt.clone());
    file.paths.output = Some(out.clone());
    let text = fs::read_to_string(&pairs_path).map_err(|e| CliError::Usage(format!("--pairs: {e}")))?;
    let pairs = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            let e: PairEntry = serde_json::from_str(l)
                .map_err(|e| CliError::Usage(format!("--pairs {} line {}: {e}", pairs_path.display(), i + 1)))?;
            Pair::from_entry(&e).map_err(CliError::from)
        })
        .collect::<Result<Vec<_>, _>>()?;
    if pairs.is_empty() {
        return Err(CliError::Usage(format!("--pairs {}: no pairs", pairs_path.display())));
    }
    let sched = file.schedule()?;
    let model = load_model(&ckpt, &mut file)?;
    file.run_config().validate(&model, &sched)?;
    create_dir(&out)?;
    file.echo(&out)?;
    Ok(PairJob {
        file,
        model,
        sched,
        pairs,
        out,
    })
}

type Scored = Vec<(AlignmentReport, RgbImage)>;

/// Scores every pair's variants in parallel; results keep pair order.
fn score_all(job: &PairJob, variants: impl Fn(&Pair) -> ctrlx::Result<Vec<Variant>> + Sync) -> Result<Vec<Scored>, CliError> {
    let t0 = Instant::now();
    let scored = pool()?.install(|| {
        job.pairs
            .par_iter()
            .map(|p| evaluate(&job.model, &job.sched, p, &variants(p)?))
            .collect::<ctrlx::Result<Vec<_>>>()
    })?;
    eprintln!("scored {} pairs in {:.1}s", job.pairs.len(), t0.elapsed().as_secs_f64());
    Ok(scored)
}

#[derive(Serialize)]
struct EvalSummary {
    pairs: usize,
    iou_wins: usize,
    self_sim_wins: usize,
    palette_wins: usize,
}

pub fn eval(a: PairArgs) -> Result<(), CliError> {
    let job = pair_job(a)?;
    let template = job.file.run_config();
    let scored = score_all(&job, |p| Ok(baseline_variants(p, &template)))?;
    let reports: Vec<AlignmentReport> = scored.iter().flatten().map(|(r, _)| r.clone()).collect();
    write_reports(&job.out.join("reports.jsonl"), &reports)?;
    let mut summary = EvalSummary {
        pairs: scored.len(),
        iou_wins: 0,
        self_sim_wins: 0,
        palette_wins: 0,
    };
    for s in &scored {
        let (u, c) = (&s[0].0, &s[1].0);
        summary.iou_wins += usize::from(c.structure_iou > u.structure_iou);
        summary.self_sim_wins += usize::from(c.self_sim_distance < u.self_sim_distance);
        summary.palette_wins += usize::from(c.palette_distance < u.palette_distance);
    }
    let path = job.out.join("summary.json");
    fs::write(&path, serde_json::to_string_pretty(&summary).expect("summary serialises")).map_err(|e| runtime(&path, e))?;
    let rows: Vec<Vec<RgbImage>> = job
        .pairs
        .iter()
        .zip(&scored)
        .map(|(p, s)| vec![p.structure_image(), p.b.image.clone(), s[0].1.clone(), s[1].1.clone()])
        .collect();
    summary_grid(&rows)?.write(&job.out.join("grid.ppm"))?;
    eprintln!(
        "controlled beats uncontrolled: iou {}/{n}, self-sim {}/{n}, palette {}/{n}",
        summary.iou_wins,
        summary.self_sim_wins,
        summary.palette_wins,
        n = summary.pairs
    );
    Ok(())
}

pub fn ablate(a: PairArgs) -> Result<(), CliError> {
    let job = pair_job(a)?;
    let template = job.file.run_config();
    let scored = score_all(&job, |p| ablation_variants(&job.model, &job.sched, p, &template))?;
    let mut rows = Vec::new();
    for (p, s) in job.pairs.iter().zip(&scored) {
        let dir = job.out.join(p.id());
        create_dir(&dir)?;
        for (r, img) in s {
            img.write(&dir.join(format!("{}.ppm", r.variant)))?;
        }
        let mut row = vec![p.structure_image(), p.b.image.clone()];
        row.extend(s.iter().map(|(_, img)| img.clone()));
        rows.push(row);
    }
    let reports: Vec<AlignmentReport> = scored.into_iter().flatten().map(|(r, _)| r).collect();
    write_reports(&job.out.join("reports.jsonl"), &reports)?;
    summary_grid(&rows)?.write(&job.out.join("grid.ppm"))?;
    eprintln!("wrote {} ablation outputs to {}", reports.len(), job.out.display());
    Ok(())
}
