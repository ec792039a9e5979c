//! Finite-difference oracles for the hand-derived backward pass.

use ctrlx::denoiser::{DenoiserConfig, DenoiserModel};
use ctrlx::rng::{normal, stream};
use ctrlx::Tensor;

const STEPS: usize = 8;

fn loss(model: &DenoiserModel, x: &Tensor, t: usize, cond: usize, r: &Tensor) -> f64 {
    let out = model.predict(x, t, cond).unwrap();
    out.data()
        .iter()
        .zip(r.data())
        .map(|(&a, &b)| a as f64 * b as f64)
        .sum()
}

/// Relative error `|g_a - g_fd| / |g_fd|` per parameter tensor.
pub fn check(cfg: DenoiserConfig, seed: u64, max_coords: usize) -> Vec<(String, f64, usize)> {
    let mut model = DenoiserModel::new(cfg.clone(), seed).unwrap();
    // break symmetric initial values (unit gammas, zero biases)
    let mut rng = stream(seed + 100);
    let jitter = normal(&mut rng, &[model.params().len()]);
    for (p, j) in model.params_mut().data_mut().iter_mut().zip(jitter.data()) {
        *p += 0.05 * j;
    }
    let s = cfg.image_size;
    let x = normal(&mut rng, &[cfg.channels, s, s]);
    let r = normal(&mut rng, &[cfg.channels, s, s]);
    let (t, cond) = (437, 1);

    let (_, cache) = model.forward_train(&x, t, cond).unwrap();
    let mut grads = model.params().zeros_like();
    model.backward(&cache, &r, &mut grads);

    let h = 1e-2f32;
    let mut report = Vec::new();
    for entry in model.params().entries().to_vec() {
        let range = entry.range();
        let stride = (range.len() / max_coords).max(1);
        let (mut num, mut den) = (0.0f64, 0.0f64);
        let mut count = 0;
        for i in range.clone().step_by(stride) {
            let orig = model.params().data()[i];
            // Averaging over jittered steps suppresses f32 round-off in the
            // loss, which otherwise dominates for small gradients.
            let mut fd = 0.0;
            for k in 0..STEPS {
                let hk = h * (1.0 + 0.1 * k as f32);
                model.params_mut().data_mut()[i] = orig + hk;
                let lp = loss(&model, &x, t, cond, &r);
                model.params_mut().data_mut()[i] = orig - hk;
                let lm = loss(&model, &x, t, cond, &r);
                let dh = (orig + hk) as f64 - (orig - hk) as f64;
                fd += (lp - lm) / dh;
            }
            model.params_mut().data_mut()[i] = orig;
            let fd = fd / STEPS as f64;
            let an = grads[i] as f64;
            num += (an - fd).powi(2);
            den += fd.powi(2);
            count += 1;
        }
        let rel = if den > 0.0 { (num / den).sqrt() } else { num.sqrt() };
        report.push((entry.name.clone(), rel, count));
    }
    report
}

/// Central differences of `sum(f(x) * r)` against a vector-Jacobian product.
pub fn check_op(f: impl Fn(&[f32]) -> Vec<f32>, vjp: impl Fn(&[f32], &[f32]) -> Vec<f32>, n_in: usize, n_out: usize) -> f64 {
    let mut rng = stream(n_in as u64);
    let x = normal(&mut rng, &[n_in]).into_data();
    let r = normal(&mut rng, &[n_out]).into_data();
    let loss = |x: &[f32]| f(x).iter().zip(&r).map(|(a, b)| *a as f64 * *b as f64).sum::<f64>();
    let g = vjp(&x, &r);
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..n_in {
        let h = 1e-2f32;
        let (mut xp, mut xm) = (x.clone(), x.clone());
        xp[i] += h;
        xm[i] -= h;
        let fd = (loss(&xp) - loss(&xm)) / (xp[i] as f64 - xm[i] as f64);
        num += (g[i] as f64 - fd).powi(2);
        den += fd * fd;
    }
    (num / den).sqrt()
}

