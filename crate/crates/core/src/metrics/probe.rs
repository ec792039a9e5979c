//! Linear probe: multinomial logistic regression on standardised features.

use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub lr: f64,
    pub l2: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            epochs: 300,
            lr: 0.5,
            l2: 1e-3,
        }
    }
}

/// Trained probe. Weights are `[classes][dims + 1]`, bias last.
#[derive(Clone, Debug)]
pub struct LinearProbe {
    mean: Vec<f64>,
    std: Vec<f64>,
    weights: Vec<Vec<f64>>,
}

fn softmax(z: &mut [f64]) {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in z.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    z.iter_mut().for_each(|v| *v /= s);
}

impl LinearProbe {
    /// Full-batch gradient descent on the mean cross-entropy plus `l2`.
    /// Deterministic: weights start at zero.
    pub fn fit(x: &[Vec<f64>], y: &[usize], classes: usize, cfg: &ProbeConfig) -> Result<Self> {
        if x.is_empty() || x.len() != y.len() {
            return Err(Error::contract("probe needs one label per sample"));
        }
        if let Some(&bad) = y.iter().find(|&&c| c >= classes) {
            return Err(Error::contract(format!("label {bad} outside {classes} classes")));
        }
        let d = x[0].len();
        let n = x.len() as f64;
        let mean: Vec<f64> = (0..d).map(|j| x.iter().map(|r| r[j]).sum::<f64>() / n).collect();
        // constant features get unit scale so they standardise to zero
        let std: Vec<f64> = (0..d)
            .map(|j| {
                let v = x.iter().map(|r| (r[j] - mean[j]).powi(2)).sum::<f64>() / n;
                if v > 1e-12 { v.sqrt() } else { 1.0 }
            })
            .collect();
        let mut probe = Self {
            mean,
            std,
            weights: vec![vec![0.0; d + 1]; classes],
        };
        let xs: Vec<Vec<f64>> = x.iter().map(|r| probe.standardise(r)).collect();
        for _ in 0..cfg.epochs {
            let mut grad = vec![vec![0.0; d + 1]; classes];
            for (r, &label) in xs.iter().zip(y) {
                let mut p = probe.logits_std(r);
                softmax(&mut p);
                for (c, g) in grad.iter_mut().enumerate() {
                    let e = p[c] - f64::from(u8::from(c == label));
                    for j in 0..d {
                        g[j] += e * r[j];
                    }
                    g[d] += e;
                }
            }
            for (w, g) in probe.weights.iter_mut().zip(&grad) {
                for j in 0..=d {
                    let reg = if j < d { cfg.l2 * w[j] } else { 0.0 };
                    w[j] -= cfg.lr * (g[j] / n + reg);
                }
            }
        }
        Ok(probe)
    }

    fn standardise(&self, r: &[f64]) -> Vec<f64> {
        r.iter().zip(&self.mean).zip(&self.std).map(|((v, m), s)| (v - m) / s).collect()
    }

    fn logits_std(&self, r: &[f64]) -> Vec<f64> {
        let d = r.len();
        self.weights
            .iter()
            .map(|w| w[..d].iter().zip(r).map(|(a, b)| a * b).sum::<f64>() + w[d])
            .collect()
    }

    pub fn predict(&self, r: &[f64]) -> usize {
        let z = self.logits_std(&self.standardise(r));
        (0..z.len()).max_by(|&a, &b| z[a].total_cmp(&z[b]).then(b.cmp(&a))).unwrap_or(0)
    }

    pub fn accuracy(&self, x: &[Vec<f64>], y: &[usize]) -> f64 {
        let hits = x.iter().zip(y).filter(|(r, &c)| self.predict(r) == c).count();
        hits as f64 / x.len().max(1) as f64
    }
}
