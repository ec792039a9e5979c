//! Structure injection bookkeeping and spatially-aware appearance transfer.
//!
//! Appearance transfer matches output tokens to appearance tokens through a
//! cross-image attention map computed from spatially normalised features,
//! pools per-token mean/std maps of the appearance feature with that map, and
//! rescales the output feature with them:
//!
//! ```text
//! A = mean_heads softmax(norm(h_o) W_Q (norm(h_a) W_K)^T / sqrt(d))
//! M = A h_a
//! S = sqrt(max(A (h_a * h_a) - M * M, 0))
//! h_o <- S * h_o + M
//! ```

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::denoiser::{
    AppearanceOptions, DenoiserConfig, LayerId, OverrideSet, StatsWeighting, Sublayer,
};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Whether a control with schedule `tau` is active at sampling `progress`.
///
/// Progress runs from 0 (pure noise) to 1 (done); control covers the first
/// `tau` fraction of sampling.
pub fn control_active(progress: f64, tau: f64) -> bool {
    progress <= tau
}

const NORM_EPS: f64 = 1e-6;

/// Per-channel standardisation over the token axis of `h: [n, c]`.
pub fn spatial_norm(h: &Tensor) -> Result<Tensor> {
    if h.shape().len() != 2 {
        return Err(Error::contract(format!("spatial_norm expects [n, c], got {:?}", h.shape())));
    }
    let (n, c) = (h.rows(), h.cols());
    if n < 2 {
        return Err(Error::contract(format!("spatial_norm needs at least 2 tokens, got {n}")));
    }
    let d = h.data();
    let mut mean = vec![0.0f64; c];
    for row in d.chunks(c) {
        for (m, &v) in mean.iter_mut().zip(row) {
            *m += v as f64;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut var = vec![0.0f64; c];
    for row in d.chunks(c) {
        for ((s, &v), m) in var.iter_mut().zip(row).zip(&mean) {
            let x = v as f64 - m;
            *s += x * x;
        }
    }
    let inv: Vec<f64> = var
        .iter()
        .map(|s| 1.0 / (s / n as f64 + NORM_EPS).sqrt())
        .collect();
    let mut out = vec![0.0f32; n * c];
    for (orow, irow) in out.chunks_mut(c).zip(d.chunks(c)) {
        for j in 0..c {
            orow[j] = ((irow[j] as f64 - mean[j]) * inv[j]) as f32;
        }
    }
    Tensor::new(&[n, c], out)
}

/// Head-averaged cross-image attention `[n_o, n_a]` between output and
/// appearance tokens, with `W_Q`, `W_K` stored `[c, c]`.
pub fn appearance_attention(
    h_o: &Tensor,
    h_a: &Tensor,
    w_q: &[f32],
    w_k: &[f32],
    heads: usize,
) -> Result<Tensor> {
    let c = h_o.cols();
    if h_a.cols() != c || w_q.len() != c * c || w_k.len() != c * c {
        return Err(Error::contract(format!(
            "appearance_attention: channel mismatch (h_o {:?}, h_a {:?}, weights {}/{})",
            h_o.shape(),
            h_a.shape(),
            w_q.len(),
            w_k.len()
        )));
    }
    if heads == 0 || c % heads != 0 {
        return Err(Error::contract(format!("{heads} heads do not divide {c} channels")));
    }
    let (n_o, n_a) = (h_o.rows(), h_a.rows());
    if n_a == 1 {
        return Ok(Tensor::full(&[n_o, 1], 1.0));
    }
    let q = project(&spatial_norm(h_o)?, w_q);
    let k = project(&spatial_norm(h_a)?, w_k);
    let d = c / heads;
    let scale = 1.0 / (d as f64).sqrt();
    let mut out = vec![0.0f64; n_o * n_a];
    let mut logits = vec![0.0f64; n_a];
    for head in 0..heads {
        let cols = head * d..(head + 1) * d;
        for i in 0..n_o {
            let qi = &q[i * c..][cols.clone()];
            for (j, l) in logits.iter_mut().enumerate() {
                let kj = &k[j * c..][cols.clone()];
                *l = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
            }
            let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for l in logits.iter_mut() {
                *l = (*l - max).exp();
                sum += *l;
            }
            let row = &mut out[i * n_a..(i + 1) * n_a];
            for (o, l) in row.iter_mut().zip(&logits) {
                *o += l / sum / heads as f64;
            }
        }
    }
    Tensor::new(&[n_o, n_a], out.into_iter().map(|v| v as f32).collect())
}

fn project(h: &Tensor, w: &[f32]) -> Vec<f64> {
    let (n, c) = (h.rows(), h.cols());
    let mut out = vec![0.0f64; n * c];
    for i in 0..n {
        let hi = &h.data()[i * c..(i + 1) * c];
        let oi = &mut out[i * c..(i + 1) * c];
        for (p, &hv) in hi.iter().enumerate() {
            let wrow = &w[p * c..(p + 1) * c];
            for (o, &wv) in oi.iter_mut().zip(wrow) {
                *o += hv as f64 * wv as f64;
            }
        }
    }
    out
}

/// Uniform `[n_o, n_a]` weights; reduces the transfer to global AdaIN.
pub fn uniform_attention(n_o: usize, n_a: usize) -> Tensor {
    Tensor::full(&[n_o, n_a], 1.0 / n_a as f32)
}

/// Attention-weighted mean and standard deviation maps of `h_a`.
#[derive(Clone, Debug, PartialEq)]
pub struct AppearanceStats {
    pub attention: Tensor,
    pub mean: Tensor,
    pub std: Tensor,
}

/// `M = A h_a`, `S = sqrt(max(A (h_a * h_a) - M * M, 0))`, evaluated in the
/// centred form `A (h_a - M)^2` in f64.
pub fn weighted_stats(attn: &Tensor, h_a: &Tensor) -> Result<(Tensor, Tensor)> {
    if attn.shape().len() != 2 || h_a.shape().len() != 2 || attn.cols() != h_a.rows() {
        return Err(Error::contract(format!(
            "weighted_stats: attention {:?} does not match features {:?}",
            attn.shape(),
            h_a.shape()
        )));
    }
    let (n_o, n_a, c) = (attn.rows(), attn.cols(), h_a.cols());
    let a = attn.data();
    for i in 0..n_o {
        let sum: f64 = a[i * n_a..(i + 1) * n_a].iter().map(|&v| v as f64).sum();
        if (sum - 1.0).abs() > 1e-4 {
            return Err(Error::contract(format!(
                "weighted_stats: attention row {i} sums to {sum}, not 1"
            )));
        }
    }
    let h = h_a.data();
    let mut mean = vec![0.0f32; n_o * c];
    let mut std = vec![0.0f32; n_o * c];
    let mut m1 = vec![0.0f64; c];
    let mut m2 = vec![0.0f64; c];
    for i in 0..n_o {
        let row = &a[i * n_a..(i + 1) * n_a];
        m1.fill(0.0);
        m2.fill(0.0);
        for (j, &w) in row.iter().enumerate() {
            if w != 0.0 {
                for (k, &v) in h[j * c..(j + 1) * c].iter().enumerate() {
                    m1[k] += w as f64 * v as f64;
                }
            }
        }
        // centred second pass; A(h*h) - M*M cancels for peaked rows
        for (j, &w) in row.iter().enumerate() {
            if w != 0.0 {
                for (k, &v) in h[j * c..(j + 1) * c].iter().enumerate() {
                    let d = v as f64 - m1[k];
                    m2[k] += w as f64 * d * d;
                }
            }
        }
        for k in 0..c {
            mean[i * c + k] = m1[k] as f32;
            std[i * c + k] = m2[k].max(0.0).sqrt() as f32;
        }
    }
    Ok((Tensor::new(&[n_o, c], mean)?, Tensor::new(&[n_o, c], std)?))
}

/// `S * h_o + M`.
pub fn apply_appearance(h_o: &Tensor, mean: &Tensor, std: &Tensor) -> Result<Tensor> {
    h_o.ensure_same_shape(mean, "apply_appearance mean")?;
    h_o.ensure_same_shape(std, "apply_appearance std")?;
    let mut out = h_o.zip_map(std, |h, s| s * h);
    out.add_assign(mean);
    Ok(out)
}

/// Full appearance transfer at one layer, as applied inside the denoiser.
pub fn transfer_appearance(
    h_o: &Tensor,
    h_a: &Tensor,
    w_q: &[f32],
    w_k: &[f32],
    heads: usize,
    opts: AppearanceOptions,
) -> Result<(Tensor, AppearanceStats)> {
    let attention = match opts.weighting {
        StatsWeighting::Attention => appearance_attention(h_o, h_a, w_q, w_k, heads)?,
        StatsWeighting::Uniform => uniform_attention(h_o.rows(), h_a.rows()),
    };
    let (mean, std) = weighted_stats(&attention, h_a)?;
    let base = if opts.renormalize_source {
        spatial_norm(h_o)?
    } else {
        h_o.clone()
    };
    let out = apply_appearance(&base, &mean, &std)?;
    Ok((
        out,
        AppearanceStats {
            attention,
            mean,
            std,
        },
    ))
}

/// Layer sets and schedules for structure and appearance control.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ControlConfig {
    /// Conv layers whose features are injected from the structure pass.
    pub feat_layers: BTreeSet<LayerId>,
    /// Attention layers whose maps are injected from the structure pass.
    pub self_layers: BTreeSet<LayerId>,
    /// Attention layers receiving appearance statistics.
    pub app_layers: BTreeSet<LayerId>,
    pub tau_s: f64,
    pub tau_a: f64,
    /// Control only the label-conditioned branch of classifier-free guidance.
    pub cond_branch_only: bool,
    pub appearance: AppearanceOptions,
}

impl Default for ControlConfig {
    fn default() -> Self {
        use Sublayer::{Conv, SelfAttn};
        Self {
            feat_layers: [LayerId::dec(0, Conv)].into(),
            self_layers: (0..3).map(|i| LayerId::dec(i, SelfAttn)).collect(),
            app_layers: (1..4)
                .map(|i| LayerId::dec(i, SelfAttn))
                .chain((2..6).map(|i| LayerId::enc(i, SelfAttn)))
                .collect(),
            tau_s: 0.6,
            tau_a: 0.6,
            cond_branch_only: true,
            appearance: AppearanceOptions::default(),
        }
    }
}

impl ControlConfig {
    pub fn validate(&self, model: &DenoiserConfig) -> Result<()> {
        for (set, kind, name) in [
            (&self.feat_layers, Sublayer::Conv, "feat_layers"),
            (&self.self_layers, Sublayer::SelfAttn, "self_layers"),
            (&self.app_layers, Sublayer::SelfAttn, "app_layers"),
        ] {
            for l in set {
                if l.sublayer != kind || !model.contains(*l) {
                    return Err(Error::config(format!(
                        "{name}: `{l}` is not a {kind:?} layer of this model"
                    )));
                }
            }
        }
        for (v, name) in [(self.tau_s, "tau_s"), (self.tau_a, "tau_a")] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::config(format!("{name} must lie in [0, 1], got {v}")));
            }
        }
        Ok(())
    }

    /// Disables both structure and appearance control.
    pub fn disabled() -> Self {
        Self {
            tau_s: 0.0,
            tau_a: 0.0,
            ..Self::default()
        }
    }
}

/// Features captured from the structure and appearance passes at one step.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FeatureCache {
    pub step_t: usize,
    pub f_s: BTreeMap<LayerId, Tensor>,
    pub a_s: BTreeMap<LayerId, Tensor>,
    pub h_a: BTreeMap<LayerId, Tensor>,
}

/// Overrides for the output pass at timestep `t` and sampling `progress`.
pub fn build_override_set(
    cache: &FeatureCache,
    cfg: &ControlConfig,
    progress: f64,
    t: usize,
) -> Result<OverrideSet> {
    if cache.step_t != t {
        return Err(Error::contract(format!(
            "stale feature cache: captured at t = {}, consumed at t = {t}",
            cache.step_t
        )));
    }
    let mut set = OverrideSet {
        appearance_options: cfg.appearance,
        ..OverrideSet::default()
    };
    let pick = |layers: &BTreeSet<LayerId>, src: &BTreeMap<LayerId, Tensor>, what: &str| {
        layers
            .iter()
            .map(|l| {
                src.get(l)
                    .cloned()
                    .map(|t| (*l, t))
                    .ok_or_else(|| Error::contract(format!("feature cache lacks {what} for `{l}`")))
            })
            .collect::<Result<BTreeMap<_, _>>>()
    };
    if control_active(progress, cfg.tau_s) {
        set.conv = pick(&cfg.feat_layers, &cache.f_s, "conv feature")?;
        set.attn = pick(&cfg.self_layers, &cache.a_s, "attention map")?;
    }
    if control_active(progress, cfg.tau_a) {
        set.appearance = pick(&cfg.app_layers, &cache.h_a, "appearance feature")?;
    }
    Ok(set)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{normal, stream};
    use proptest::prelude::*;

    fn random(seed: u64, shape: &[usize]) -> Tensor {
        normal(&mut stream(seed), shape)
    }

    fn random_stochastic(seed: u64, n_o: usize, n_a: usize) -> Tensor {
        let raw = random(seed, &[n_o, n_a]);
        let mut d = raw.into_data();
        crate::nn::ops::softmax_rows(&mut d, n_a);
        Tensor::new(&[n_o, n_a], d).unwrap()
    }

    #[test]
    fn gating() {
        assert!(control_active(0.0, 0.6));
        assert!(control_active(0.6, 0.6));
        assert!(!control_active(0.61, 0.6));
        for p in [0.02, 0.5, 1.0] {
            assert!(!control_active(p, 0.0));
        }
    }

    #[test]
    fn spatial_norm_constant_channels_vanish() {
        let h = Tensor::from_fn(&[16, 4], |i| (i % 4) as f32 * 3.0 - 1.0);
        let out = spatial_norm(&h).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn spatial_norm_moments() {
        let h = random(1, &[64, 8]).scale(5.0);
        let out = spatial_norm(&h).unwrap();
        for j in 0..8 {
            let col: Vec<f64> = (0..64).map(|i| out.data()[i * 8 + j] as f64).collect();
            let mean = col.iter().sum::<f64>() / 64.0;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 64.0;
            assert!(mean.abs() < 1e-6);
            assert!((var.sqrt() - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn spatial_norm_matches_loop_oracle() {
        let h = random(2, &[64, 8]);
        let out = spatial_norm(&h).unwrap();
        for j in 0..8 {
            let col: Vec<f64> = (0..64).map(|i| h.data()[i * 8 + j] as f64).collect();
            let mean = col.iter().sum::<f64>() / 64.0;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 64.0;
            for i in 0..64 {
                let want = (col[i] - mean) / (var + 1e-6).sqrt();
                let got = out.data()[i * 8 + j] as f64;
                assert!((got - want).abs() <= 1e-6 * want.abs().max(1.0));
            }
        }
    }

    #[test]
    fn spatial_norm_rejects_single_token() {
        assert!(spatial_norm(&Tensor::zeros(&[1, 4])).is_err());
    }

    #[test]
    fn spatial_norm_is_idempotent() {
        let h = random(3, &[32, 6]).scale(4.0);
        let once = spatial_norm(&h).unwrap();
        let twice = spatial_norm(&once).unwrap();
        assert!(once.max_abs_diff(&twice) < 1e-3);
    }

    fn identity(c: usize) -> Vec<f32> {
        (0..c * c).map(|i| if i / c == i % c { 1.0 } else { 0.0 }).collect()
    }

    #[test]
    fn self_correspondence_concentrates_on_diagonal() {
        // one-hot tokens keep equal norms after spatial normalisation
        let h = Tensor::new(&[16, 16], identity(16)).unwrap();
        let sharp: Vec<f32> = identity(16).iter().map(|v| v * 6.0).collect();
        let a = appearance_attention(&h, &h, &sharp, &sharp, 2).unwrap();
        for i in 0..16 {
            let row = &a.data()[i * 16..(i + 1) * 16];
            let argmax = (0..16).max_by(|&x, &y| row[x].total_cmp(&row[y])).unwrap();
            assert_eq!(argmax, i);
        }
    }

    #[test]
    fn appearance_attention_rows_sum_to_one() {
        let h_o = random(5, &[20, 8]);
        let h_a = random(6, &[12, 8]);
        let w_q = random(7, &[8, 8]);
        let w_k = random(8, &[8, 8]);
        let a = appearance_attention(&h_o, &h_a, w_q.data(), w_k.data(), 2).unwrap();
        assert_eq!(a.shape(), &[20, 12]);
        for row in a.data().chunks(12) {
            let s: f64 = row.iter().map(|&v| v as f64).sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
        let single = appearance_attention(&h_o, &random(9, &[1, 8]), w_q.data(), w_k.data(), 2).unwrap();
        assert!(single.data().iter().all(|&v| v == 1.0));
        assert!(appearance_attention(&h_o, &random(9, &[4, 6]), w_q.data(), w_k.data(), 2).is_err());
    }

    #[test]
    fn uniform_weights_reduce_to_global_statistics() {
        let h_a = random(10, &[24, 5]).scale(2.0);
        let (m, s) = weighted_stats(&uniform_attention(7, 24), &h_a).unwrap();
        for k in 0..5 {
            let col: Vec<f64> = (0..24).map(|j| h_a.data()[j * 5 + k] as f64).collect();
            let mean = col.iter().sum::<f64>() / 24.0;
            let std = (col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 24.0).sqrt();
            for i in 0..7 {
                assert!((m.data()[i * 5 + k] as f64 - mean).abs() < 1e-5);
                assert!((s.data()[i * 5 + k] as f64 - std).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn identity_attention_gives_zero_std() {
        let h_a = random(11, &[9, 4]);
        let eye = Tensor::new(&[9, 9], identity(9)).unwrap();
        let (m, s) = weighted_stats(&eye, &h_a).unwrap();
        assert_eq!(m, h_a);
        assert!(s.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn weighted_stats_matches_loop_oracle() {
        let a = random_stochastic(12, 16, 16);
        let h = random(13, &[16, 4]);
        let (m, s) = weighted_stats(&a, &h).unwrap();
        for i in 0..16 {
            for k in 0..4 {
                let mut mean = 0.0f64;
                for j in 0..16 {
                    mean += a.data()[i * 16 + j] as f64 * h.data()[j * 4 + k] as f64;
                }
                let mut var = 0.0f64;
                for j in 0..16 {
                    var += a.data()[i * 16 + j] as f64 * (h.data()[j * 4 + k] as f64 - mean).powi(2);
                }
                let got_m = m.data()[i * 4 + k] as f64;
                let got_s = s.data()[i * 4 + k] as f64;
                assert!((got_m - mean).abs() <= 1e-5 * mean.abs().max(1.0));
                assert!((got_s - var.sqrt()).abs() <= 1e-5 * var.sqrt().max(1.0));
            }
        }
    }

    #[test]
    fn weighted_stats_rejects_non_stochastic_rows() {
        let a = Tensor::full(&[2, 3], 0.5);
        assert!(weighted_stats(&a, &Tensor::zeros(&[3, 2])).is_err());
    }

    #[test]
    fn apply_appearance_identities() {
        let h = random(14, &[8, 3]);
        let one = Tensor::full(&[8, 3], 1.0);
        let zero = Tensor::zeros(&[8, 3]);
        assert_eq!(apply_appearance(&h, &zero, &one).unwrap(), h);
        let m = random(15, &[8, 3]);
        assert_eq!(apply_appearance(&h, &m, &zero).unwrap(), m);
        let s = random(16, &[8, 3]);
        let got = apply_appearance(&h, &m, &s).unwrap();
        for i in 0..24 {
            let want = s.data()[i] as f64 * h.data()[i] as f64 + m.data()[i] as f64;
            assert!((got.data()[i] as f64 - want).abs() < 1e-6);
        }
        assert!(apply_appearance(&h, &Tensor::zeros(&[4, 3]), &s).is_err());
    }

    fn cache_for(model: &DenoiserConfig, t: usize) -> FeatureCache {
        use crate::denoiser::TapKind;
        let mut cache = FeatureCache {
            step_t: t,
            ..Default::default()
        };
        for l in model.registry() {
            match l.sublayer {
                Sublayer::Conv => {
                    let s = model.tap_shape(l, TapKind::ConvFeature).unwrap();
                    cache.f_s.insert(l, Tensor::zeros(&s));
                }
                Sublayer::SelfAttn => {
                    let s = model.tap_shape(l, TapKind::AttnMap).unwrap();
                    cache.a_s.insert(l, Tensor::zeros(&s));
                    let s = model.tap_shape(l, TapKind::PreAttnFeature).unwrap();
                    cache.h_a.insert(l, Tensor::zeros(&s));
                }
            }
        }
        cache
    }

    #[test]
    fn override_gating_by_schedule() {
        let model = DenoiserConfig::default();
        let cache = cache_for(&model, 501);
        let mut cfg = ControlConfig::default();
        cfg.validate(&model).unwrap();

        cfg.tau_s = 0.0;
        cfg.tau_a = 0.0;
        assert!(build_override_set(&cache, &cfg, 0.02, 501).unwrap().is_empty());

        cfg.tau_s = 0.6;
        cfg.tau_a = 0.6;
        let set = build_override_set(&cache, &cfg, 0.5, 501).unwrap();
        assert_eq!(set.conv.len(), 1);
        assert_eq!(set.attn.len(), 3);
        assert_eq!(set.appearance.len(), 7);

        cfg.tau_s = 0.3;
        let set = build_override_set(&cache, &cfg, 0.45, 501).unwrap();
        assert!(set.conv.is_empty() && set.attn.is_empty());
        assert_eq!(set.appearance.len(), 7);

        assert!(build_override_set(&cache, &cfg, 0.45, 481).is_err());
    }

    #[test]
    fn control_config_validation() {
        let model = DenoiserConfig::default();
        let mut cfg = ControlConfig::default();
        cfg.feat_layers.insert(LayerId::dec(0, Sublayer::SelfAttn));
        assert!(cfg.validate(&model).is_err());
        let mut cfg = ControlConfig::default();
        cfg.app_layers.insert(LayerId::dec(5, Sublayer::SelfAttn));
        assert!(cfg.validate(&model).is_err());
        let mut cfg = ControlConfig::default();
        cfg.tau_a = 1.5;
        assert!(cfg.validate(&model).is_err());
    }

    proptest! {
        #[test]
        fn stats_are_finite_and_nonnegative(seed in 0u64..1000, n in 1usize..12, c in 1usize..6, dup in 0.0f32..1e-3) {
            // near-duplicate rows stress the variance cancellation
            let base = random(seed, &[1, c]);
            let jitter = random(seed + 1, &[n, c]).scale(dup);
            let h = Tensor::from_fn(&[n, c], |i| base.data()[i % c] * 100.0 + jitter.data()[i]);
            let a = random_stochastic(seed + 2, 5, n);
            let (m, s) = weighted_stats(&a, &h).unwrap();
            prop_assert!(m.all_finite() && s.all_finite());
            prop_assert!(s.data().iter().all(|&v| v >= 0.0));
        }

        #[test]
        fn stats_scale_covariantly(seed in 0u64..1000, k in 0.1f32..10.0) {
            let a = random_stochastic(seed, 6, 10);
            let h = random(seed + 7, &[10, 4]);
            let (m, s) = weighted_stats(&a, &h).unwrap();
            let (mk, sk) = weighted_stats(&a, &h.scale(k)).unwrap();
            for i in 0..m.len() {
                prop_assert!((mk.data()[i] - k * m.data()[i]).abs() <= 1e-5 * k.max(1.0) * m.data()[i].abs().max(1.0));
                prop_assert!((sk.data()[i] - k * s.data()[i]).abs() <= 1e-5 * k.max(1.0) * s.data()[i].abs().max(1.0));
            }
        }
    }
}
