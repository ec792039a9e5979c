use ctrlx::denoiser::{
    self_attention, DenoiserConfig, DenoiserModel, LayerId, OverrideSet, Side, Sublayer, TapKind, TapRequest,
};
use ctrlx::rng::{normal, stream};
use ctrlx::Tensor;

fn micro(seed: u64) -> DenoiserModel {
    DenoiserModel::new(DenoiserConfig::micro(), seed).unwrap()
}

fn input(seed: u64) -> Tensor {
    normal(&mut stream(seed), &[3, 8, 8])
}

fn all_taps(cfg: &DenoiserConfig) -> Vec<TapRequest> {
    cfg.registry()
        .into_iter()
        .flat_map(|l| match l.sublayer {
            Sublayer::Conv => vec![TapRequest::new(l, TapKind::ConvFeature)],
            Sublayer::SelfAttn => vec![
                TapRequest::new(l, TapKind::PreAttnFeature),
                TapRequest::new(l, TapKind::AttnMap),
            ],
        })
        .collect()
}

#[test]
fn forward_is_deterministic() {
    let (a, b) = (micro(3), micro(3));
    let x = input(1);
    assert_eq!(a.predict(&x, 500, 0).unwrap(), b.predict(&x, 500, 0).unwrap());
    assert_ne!(a.predict(&x, 500, 0).unwrap(), micro(4).predict(&x, 500, 0).unwrap());
}

#[test]
fn every_registered_layer_is_tappable_with_its_declared_shape() {
    let m = micro(0);
    let taps = all_taps(m.config());
    let (_, recs) = m.forward(&input(2), 700, 1, &taps, &OverrideSet::default()).unwrap();
    assert_eq!(recs.len(), taps.len());
    for (req, rec) in taps.iter().zip(&recs) {
        assert_eq!((rec.layer, rec.kind), (req.layer, req.kind));
        assert_eq!(rec.tensor.shape(), m.config().tap_shape(req.layer, req.kind).unwrap().as_slice());
        assert!(!rec.overridden);
    }
}

#[test]
fn attention_maps_are_row_stochastic() {
    let m = micro(0);
    let taps: Vec<_> = all_taps(m.config()).into_iter().filter(|t| t.kind == TapKind::AttnMap).collect();
    assert!(!taps.is_empty());
    let (_, recs) = m.forward(&input(3), 300, 0, &taps, &OverrideSet::default()).unwrap();
    for r in recs {
        let n = r.tensor.shape()[2];
        for row in r.tensor.data().chunks(n) {
            assert!(row.iter().all(|&v| v >= 0.0));
            assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-5);
        }
    }
}

#[test]
fn injecting_own_features_reproduces_the_output() {
    let m = micro(1);
    let x = input(4);
    let plain = m.predict(&x, 600, 2).unwrap();
    let taps: Vec<_> = all_taps(m.config()).into_iter().filter(|t| t.kind != TapKind::PreAttnFeature).collect();
    let (_, recs) = m.forward(&x, 600, 2, &taps, &OverrideSet::default()).unwrap();
    let mut ov = OverrideSet::default();
    for r in recs {
        match r.kind {
            TapKind::ConvFeature => ov.conv.insert(r.layer, r.tensor),
            _ => ov.attn.insert(r.layer, r.tensor),
        };
    }
    let (injected, recs) = m.forward(&x, 600, 2, &taps, &ov).unwrap();
    assert!(recs.iter().all(|r| r.overridden));
    assert!(plain.max_abs_diff(&injected) <= 1e-5);
}

#[test]
fn zero_decoder_conv_override_changes_the_output() {
    let m = micro(2);
    let x = input(5);
    let layer = LayerId::dec(0, Sublayer::Conv);
    let shape = m.config().tap_shape(layer, TapKind::ConvFeature).unwrap();
    let mut ov = OverrideSet::default();
    ov.conv.insert(layer, Tensor::zeros(&shape));
    let (out, _) = m.forward(&x, 400, 0, &[], &ov).unwrap();
    assert!(out.max_abs_diff(&m.predict(&x, 400, 0).unwrap()) > 1e-4);
}

#[test]
fn overrides_of_the_wrong_shape_are_rejected() {
    let m = micro(0);
    let mut ov = OverrideSet::default();
    ov.conv.insert(LayerId::dec(0, Sublayer::Conv), Tensor::zeros(&[3, 3]));
    assert!(m.forward(&input(0), 10, 0, &[], &ov).is_err());
    let missing = LayerId::new(Side::Decoder, 40, Sublayer::Conv);
    assert!(m.forward(&input(0), 10, 0, &[TapRequest::new(missing, TapKind::ConvFeature)], &OverrideSet::default()).is_err());
}

/// Double-precision multi-head attention: `softmax(q k^T / sqrt(d)) v`, then
/// the output projection.
fn attention_oracle(h: &[f32], n: usize, c: usize, heads: usize, w: [&[f32]; 5], fixed: Option<&[f32]>) -> Vec<f64> {
    let [wq, wk, wv, wo, bo] = w;
    let proj = |m: &[f32]| -> Vec<f64> {
        let mut out = vec![0.0; n * c];
        for i in 0..n {
            for j in 0..c {
                out[i * c + j] = (0..c).map(|k| h[i * c + k] as f64 * m[k * c + j] as f64).sum();
            }
        }
        out
    };
    let (q, k, v) = (proj(wq), proj(wk), proj(wv));
    let d = c / heads;
    let mut o = vec![0.0; n * c];
    for hd in 0..heads {
        for i in 0..n {
            let a: Vec<f64> = match fixed {
                Some(f) => (0..n).map(|j| f[(hd * n + i) * n + j] as f64).collect(),
                None => {
                    let s: Vec<f64> = (0..n)
                        .map(|j| (0..d).map(|e| q[i * c + hd * d + e] * k[j * c + hd * d + e]).sum::<f64>() / (d as f64).sqrt())
                        .collect();
                    let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let z: f64 = s.iter().map(|x| (x - m).exp()).sum();
                    s.iter().map(|x| (x - m).exp() / z).collect()
                }
            };
            for e in 0..d {
                o[i * c + hd * d + e] = (0..n).map(|j| a[j] * v[j * c + hd * d + e]).sum();
            }
        }
    }
    (0..n * c)
        .map(|idx| {
            let (i, j) = (idx / c, idx % c);
            (0..c).map(|k| o[i * c + k] * wo[k * c + j] as f64).sum::<f64>() + bo[j] as f64
        })
        .collect()
}

fn attn_layer() -> (DenoiserModel, LayerId) {
    let m = micro(7);
    let layer = m.config().registry().into_iter().find(|l| l.sublayer == Sublayer::SelfAttn).unwrap();
    (m, layer)
}

fn assert_close(got: &Tensor, want: &[f64]) {
    for (g, w) in got.data().iter().zip(want) {
        assert!((*g as f64 - w).abs() <= 1e-5 * (1.0 + w.abs()), "{g} vs {w}");
    }
}

#[test]
fn self_attention_matches_loop_oracle() {
    let (m, layer) = attn_layer();
    let w = m.attn_weights(layer).unwrap();
    let (n, c) = (16, 8);
    let h = normal(&mut stream(8), &[n, c]);
    let (out, maps) = self_attention(&h, &w, 2, None).unwrap();
    assert_eq!(maps.shape(), &[2, n, n]);
    assert_close(&out, &attention_oracle(h.data(), n, c, 2, [w.wq, w.wk, w.wv, w.wo, w.bo], None));
}

#[test]
fn identity_attention_override_projects_each_token_alone() {
    let (m, layer) = attn_layer();
    let w = m.attn_weights(layer).unwrap();
    let (n, c) = (5, 8);
    let h = normal(&mut stream(9), &[n, c]);
    let eye = Tensor::from_fn(&[2, n, n], |i| if (i / n) % n == i % n { 1.0 } else { 0.0 });
    let (out, maps) = self_attention(&h, &w, 2, Some(&eye)).unwrap();
    assert_eq!(maps, eye);
    assert_close(&out, &attention_oracle(h.data(), n, c, 2, [w.wq, w.wk, w.wv, w.wo, w.bo], Some(eye.data())));
    // each output row depends only on its own token
    let mut h2 = h.clone();
    h2.data_mut()[..c].iter_mut().for_each(|v| *v += 1.0);
    let (out2, _) = self_attention(&h2, &w, 2, Some(&eye)).unwrap();
    assert_eq!(out.data()[c..], out2.data()[c..]);
}

#[test]
fn singleton_attention_is_the_value_projection() {
    let (m, layer) = attn_layer();
    let w = m.attn_weights(layer).unwrap();
    let h = normal(&mut stream(10), &[1, 8]);
    let (out, maps) = self_attention(&h, &w, 2, None).unwrap();
    assert_eq!(maps.data(), &[1.0, 1.0]);
    let fixed = Tensor::full(&[2, 1, 1], 1.0);
    assert_close(&out, &attention_oracle(h.data(), 1, 8, 2, [w.wq, w.wk, w.wv, w.wo, w.bo], Some(fixed.data())));
}
