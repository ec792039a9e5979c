//! Elementwise activations, resampling and the time embedding.

use crate::error::{Error, Result};

#[inline]
fn sigmoid(x: f32) -> f32 {
    let e = exp_nonpos(-x.abs());
    let s = 1.0 / (1.0 + e);
    if x >= 0.0 { s } else { e * s }
}

pub fn silu(x: &[f32]) -> Vec<f32> {
    x.iter().map(|&v| v * sigmoid(v)).collect()
}

pub fn silu_backward(x: &[f32], dy: &[f32]) -> Vec<f32> {
    x.iter()
        .zip(dy)
        .map(|(&v, &g)| {
            let s = sigmoid(v);
            g * s * (1.0 + v * (1.0 - s))
        })
        .collect()
}

/// 2x2 average pooling of a `[c, h, w]` map.
pub fn avg_pool2(x: &[f32], c: usize, h: usize, w: usize) -> Vec<f32> {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0; c * oh * ow];
    for ch in 0..c {
        let src = &x[ch * h * w..];
        let dst = &mut out[ch * oh * ow..];
        for y in 0..oh {
            for xx in 0..ow {
                let i = 2 * y * w + 2 * xx;
                dst[y * ow + xx] = 0.25 * (src[i] + src[i + 1] + src[i + w] + src[i + w + 1]);
            }
        }
    }
    out
}

pub fn avg_pool2_backward(dy: &[f32], c: usize, h: usize, w: usize) -> Vec<f32> {
    let (oh, ow) = (h / 2, w / 2);
    let mut dx = vec![0.0; c * h * w];
    for ch in 0..c {
        for y in 0..oh {
            for xx in 0..ow {
                let g = 0.25 * dy[ch * oh * ow + y * ow + xx];
                let i = ch * h * w + 2 * y * w + 2 * xx;
                dx[i] = g;
                dx[i + 1] = g;
                dx[i + w] = g;
                dx[i + w + 1] = g;
            }
        }
    }
    dx
}

/// Nearest-neighbour 2x upsampling of a `[c, h, w]` map.
pub fn upsample2(x: &[f32], c: usize, h: usize, w: usize) -> Vec<f32> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![0.0; c * oh * ow];
    for ch in 0..c {
        for y in 0..oh {
            for xx in 0..ow {
                out[ch * oh * ow + y * ow + xx] = x[ch * h * w + (y / 2) * w + xx / 2];
            }
        }
    }
    out
}

pub fn upsample2_backward(dy: &[f32], c: usize, h: usize, w: usize) -> Vec<f32> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut dx = vec![0.0; c * h * w];
    for ch in 0..c {
        for y in 0..oh {
            for xx in 0..ow {
                dx[ch * h * w + (y / 2) * w + xx / 2] += dy[ch * oh * ow + y * ow + xx];
            }
        }
    }
    dx
}

/// Sinusoidal timestep features, interleaved as `[sin, cos, sin, cos, ...]`.
pub fn time_embedding(t: usize, dim: usize) -> Result<Vec<f32>> {
    if dim == 0 || dim % 2 != 0 {
        return Err(Error::config(format!(
            "time embedding dimension must be even and positive, got {dim}"
        )));
    }
    let half = dim / 2;
    let mut out = Vec::with_capacity(dim);
    for i in 0..half {
        let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
        let arg = t as f64 * freq;
        out.push(arg.sin() as f32);
        out.push(arg.cos() as f32);
    }
    Ok(out)
}

/// `exp(x)` for `x <= 0` via range reduction and a degree-6 polynomial.
///
/// Relative error is below 3e-7 on `[-87, 0]`; inputs below -87 flush to 0.
/// Written branch-free so softmax rows auto-vectorise.
#[inline]
pub fn exp_nonpos(x: f32) -> f32 {
    const LOG2E: f32 = std::f32::consts::LOG2_E;
    const LN2_HI: f32 = 0.693_145_75;
    const LN2_LO: f32 = 1.428_606_8e-6;
    let x = x.max(-87.0);
    // round-to-nearest via the 1.5 * 2^23 trick; `f32::round` is a libm call
    // on baseline x86-64 and blocks vectorisation
    const MAGIC: f32 = 12_582_912.0;
    let n = (x * LOG2E + MAGIC) - MAGIC;
    let r = (x - n * LN2_HI) - n * LN2_LO;
    let p = 1.0
        + r * (1.0
            + r * (0.5
                + r * (1.0 / 6.0 + r * (1.0 / 24.0 + r * (1.0 / 120.0 + r * (1.0 / 720.0))))));
    let bits = ((n as i32 + 127) as u32) << 23;
    p * f32::from_bits(bits)
}

/// Row-wise softmax in place over rows of length `n`.
pub fn softmax_rows(x: &mut [f32], n: usize) {
    for row in x.chunks_mut(n) {
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        for v in row.iter_mut() {
            *v = exp_nonpos(*v - max);
        }
        let sum: f32 = row.iter().sum();
        let inv = 1.0 / sum;
        for v in row.iter_mut() {
            *v *= inv;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn time_embedding_at_zero_alternates() {
        let e = time_embedding(0, 8).unwrap();
        assert_eq!(e, vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn time_embedding_rejects_odd_dim() {
        assert!(matches!(time_embedding(3, 7), Err(Error::Config(_))));
    }

    #[test]
    fn time_embedding_norm_bound() {
        let dim = 64;
        let bound = (dim as f32 / 2.0).sqrt() * 2f32.sqrt();
        for t in [0, 1, 17, 500, 999, 1000] {
            let e = time_embedding(t, dim).unwrap();
            let norm = e.iter().map(|v| v * v).sum::<f32>().sqrt();
            assert!(norm <= bound + 1e-5);
        }
    }

    #[test]
    fn time_embeddings_are_pairwise_distinct() {
        let embs: Vec<Vec<f32>> = (1..=1000).map(|t| time_embedding(t, 64).unwrap()).collect();
        for i in 0..embs.len() {
            for j in i + 1..embs.len() {
                let d: f32 = embs[i]
                    .iter()
                    .zip(&embs[j])
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0, f32::max);
                assert!(d > 1e-4, "t={} and t={} collide", i + 1, j + 1);
            }
        }
    }

    #[test]
    fn fast_exp_accuracy() {
        let mut worst = 0.0f64;
        let mut x = -87.0f32;
        while x <= 0.0 {
            let want = (x as f64).exp();
            let got = exp_nonpos(x) as f64;
            worst = worst.max((got - want).abs() / want);
            x += 0.0137;
        }
        assert!(worst < 3e-7, "worst relative error {worst:e}");
        assert_eq!(exp_nonpos(0.0), 1.0);
        assert_eq!(exp_nonpos(-200.0), exp_nonpos(-87.0));
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut x: Vec<f32> = (0..3 * 257).map(|i| ((i * 37) % 101) as f32 * 0.3 - 15.0).collect();
        softmax_rows(&mut x, 257);
        for row in x.chunks(257) {
            let s: f64 = row.iter().map(|&v| v as f64).sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn pool_then_upsample_roundtrip_constant() {
        let x = vec![2.0; 2 * 4 * 4];
        let p = avg_pool2(&x, 2, 4, 4);
        assert_eq!(p, vec![2.0; 8]);
        assert_eq!(upsample2(&p, 2, 2, 2), x);
    }
}
