use ctrlx::denoiser::{DenoiserConfig, DenoiserModel};
use ctrlx::rng::{normal, stream};
use ctrlx::trainer::scene::gen_scene_on;
use ctrlx::trainer::{eval_loss, load_checkpoint, save_checkpoint, train, Example, TrainConfig, Trainer};
use ctrlx::NoiseSchedule;

/// Micro-model dataset: 8x8 scenes with the two non-null micro labels.
fn micro_data(n: usize) -> Vec<Example> {
    (0..n as u64)
        .map(|i| {
            let s = gen_scene_on(i, 8);
            Example {
                image: s.image.to_tensor(),
                class_id: s.spec.class_id % 2,
            }
        })
        .collect()
}

fn micro_cfg(steps: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        steps,
        batch_size: 8,
        lr: 3e-3,
        warmup_steps: 20,
        seed,
        ..TrainConfig::default()
    }
}

fn window_mean(losses: &[f64], end: usize, width: usize) -> f64 {
    losses[end - width..end].iter().sum::<f64>() / width as f64
}

#[test]
fn same_seed_gives_identical_checkpoint_bytes() {
    let sched = NoiseSchedule::default_scaled_linear();
    let data = micro_data(32);
    let bytes = |seed| {
        let mut m = DenoiserModel::new(DenoiserConfig::micro(), 0).unwrap();
        train(&mut m, &sched, &data, &micro_cfg(30, seed), |_, _| {}).unwrap().to_bytes()
    };
    let a = bytes(5);
    assert_eq!(a, bytes(5));
    assert_ne!(a, bytes(6));
}

#[test]
fn loss_trends_down() {
    let sched = NoiseSchedule::default_scaled_linear();
    let data = micro_data(64);
    let mut early = Vec::new();
    let mut late = Vec::new();
    for seed in 0..3 {
        let mut m = DenoiserModel::new(DenoiserConfig::micro(), seed).unwrap();
        let mut losses = Vec::new();
        train(&mut m, &sched, &data, &micro_cfg(2000, seed), |_, l| losses.push(l)).unwrap();
        early.push(window_mean(&losses, 100, 50));
        late.push(window_mean(&losses, 2000, 50));
    }
    let median = |v: &mut Vec<f64>| {
        v.sort_by(f64::total_cmp);
        v[1]
    };
    let (e, l) = (median(&mut early), median(&mut late));
    assert!(l < e, "loss near step 2000 ({l}) not below loss near step 100 ({e})");
}

#[test]
fn full_label_dropout_trains_only_the_null_label() {
    let sched = NoiseSchedule::default_scaled_linear();
    let data = micro_data(32);
    let mut m = DenoiserModel::new(DenoiserConfig::micro(), 1).unwrap();
    let cfg = TrainConfig {
        cfg_dropout: 1.0,
        ..micro_cfg(900, 0)
    };
    let mut tr = Trainer::new(cfg, &m).unwrap();
    let emb = m.params().entries().iter().find(|e| e.name == "class_emb").unwrap().range();
    let dim = emb.len() / 3;
    let labelled_rows = m.params().data()[emb.start..emb.start + 2 * dim].to_vec();
    let mut r = stream(77);
    let probes: Vec<_> = (0..4).map(|_| normal(&mut r, &[3, 8, 8])).collect();
    let gap = |m: &DenoiserModel| {
        probes
            .iter()
            .map(|x| m.predict(x, 500, 0).unwrap().max_abs_diff(&m.predict(x, 500, 2).unwrap()))
            .fold(0.0f32, f32::max)
    };
    let mut gaps = vec![gap(&m)];
    for _ in 0..3 {
        for _ in 0..300 {
            tr.step(&mut m, &sched, &data).unwrap();
        }
        gaps.push(gap(&m));
    }
    // labelled embeddings never receive a gradient
    assert_eq!(&m.params().data()[emb.start..emb.start + 2 * dim], labelled_rows.as_slice());
    assert!(gaps[1..].iter().all(|g| *g < gaps[0]), "gap did not shrink: {gaps:?}");
    assert!(gaps[3] < 0.75 * gaps[0], "gap did not shrink: {gaps:?}");
}

#[test]
fn checkpoint_round_trip_preserves_predictions() {
    let sched = NoiseSchedule::default_scaled_linear();
    let data = micro_data(16);
    let mut m = DenoiserModel::new(DenoiserConfig::micro(), 2).unwrap();
    let ck = train(&mut m, &sched, &data, &micro_cfg(10, 0), |_, _| {}).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    save_checkpoint(&ck, &path).unwrap();
    let loaded = load_checkpoint(&path).unwrap();
    assert_eq!(loaded.step, 10);
    let back = loaded.into_model().unwrap();
    let x = normal(&mut stream(1), &[3, 8, 8]);
    assert_eq!(back.predict(&x, 300, 1).unwrap(), m.predict(&x, 300, 1).unwrap());
    assert_eq!(
        eval_loss(&back, &sched, &data, 8, 4).unwrap(),
        eval_loss(&m, &sched, &data, 8, 4).unwrap()
    );
}
