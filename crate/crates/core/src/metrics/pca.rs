//! Principal-component views of intermediate features.

use nalgebra::DMatrix;

use crate::denoiser::LayerId;
use crate::error::{Error, Result};
use crate::image::RgbImage;
use crate::tensor::Tensor;

/// Features of one layer at one timestep across several images.
#[derive(Clone, Debug)]
pub struct FeatureBatch {
    pub layer: LayerId,
    pub t: usize,
    /// `(image id, [tokens, channels])`.
    pub features: Vec<(String, Tensor)>,
}

#[derive(Clone, Debug)]
pub struct PcaView {
    /// Per image, tokens coloured by the first three components.
    pub maps: Vec<(String, RgbImage)>,
    /// `k` orthonormal components, each of length `channels`.
    pub basis: Vec<Vec<f64>>,
    /// Variance along each component, non-increasing.
    pub explained: Vec<f64>,
    pub mean: Vec<f64>,
}

/// Convergence tolerance of the symmetric eigen-solver.
pub const EIGEN_TOL: f64 = 1e-8;

/// Top-`k` principal components of a `[samples, dims]` matrix, centred.
///
/// Fails when `min(samples - 1, dims) < k`, reporting that rank.
pub fn principal_components(rows: &[Vec<f64>], k: usize) -> Result<(Vec<Vec<f64>>, Vec<f64>, Vec<f64>)> {
    let n = rows.len();
    let d = rows.first().map_or(0, Vec::len);
    let rank = n.saturating_sub(1).min(d);
    if rank < k {
        return Err(Error::contract(format!(
            "PCA needs rank {k}, data supports rank {rank} ({n} samples of dimension {d})"
        )));
    }
    let mut mean = vec![0.0; d];
    for r in rows {
        if r.len() != d {
            return Err(Error::contract("PCA rows differ in length"));
        }
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut cov = DMatrix::<f64>::zeros(d, d);
    for r in rows {
        let c: Vec<f64> = r.iter().zip(&mean).map(|(v, m)| v - m).collect();
        for i in 0..d {
            for j in i..d {
                cov[(i, j)] += c[i] * c[j];
            }
        }
    }
    for i in 0..d {
        for j in i..d {
            let v = cov[(i, j)] / n as f64;
            cov[(i, j)] = v;
            cov[(j, i)] = v;
        }
    }
    let eig = cov
        .try_symmetric_eigen(EIGEN_TOL, 10_000)
        .ok_or_else(|| Error::contract("eigen-solver did not converge"))?;
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let basis = order[..k]
        .iter()
        .map(|&j| {
            let v: Vec<f64> = eig.eigenvectors.column(j).iter().copied().collect();
            // sign convention: largest-magnitude entry is positive
            let pivot = v.iter().copied().fold(0.0f64, |a, b| if b.abs() > a.abs() { b } else { a });
            if pivot < 0.0 {
                v.iter().map(|x| -x).collect()
            } else {
                v
            }
        })
        .collect();
    let explained = order[..k].iter().map(|&j| eig.eigenvalues[j].max(0.0)).collect();
    Ok((basis, explained, mean))
}

/// Projects every token onto the top `k` components computed jointly over
/// all images, then min-max scales each component to `[0, 1]` as a colour
/// channel. Components beyond the third are not drawn.
pub fn pca_feature_view(batch: &FeatureBatch, k: usize, side: usize) -> Result<PcaView> {
    let Some((_, first)) = batch.features.first() else {
        return Err(Error::contract("PCA needs at least one image"));
    };
    let shape = first.shape().to_vec();
    if shape.len() != 2 || shape[0] != side * side {
        return Err(Error::contract(format!("features {shape:?} are not [{}, c]", side * side)));
    }
    if batch.features.iter().any(|(_, f)| f.shape() != shape.as_slice()) {
        return Err(Error::contract("feature tensors differ in shape"));
    }
    let c = shape[1];
    let rows: Vec<Vec<f64>> = batch
        .features
        .iter()
        .flat_map(|(_, f)| f.data().chunks(c).map(|r| r.iter().map(|&v| v as f64).collect::<Vec<_>>()).collect::<Vec<_>>())
        .collect();
    let (basis, explained, mean) = principal_components(&rows, k)?;
    let proj: Vec<Vec<f64>> = rows
        .iter()
        .map(|r| basis.iter().map(|b| r.iter().zip(&mean).zip(b).map(|((v, m), w)| (v - m) * w).sum()).collect())
        .collect();
    let drawn = k.min(3);
    let mut lo = vec![f64::INFINITY; drawn];
    let mut hi = vec![f64::NEG_INFINITY; drawn];
    for p in &proj {
        for j in 0..drawn {
            lo[j] = lo[j].min(p[j]);
            hi[j] = hi[j].max(p[j]);
        }
    }
    let tokens = side * side;
    let maps = batch
        .features
        .iter()
        .enumerate()
        .map(|(i, (id, _))| {
            let mut img = RgbImage::filled(side, side, [0; 3]);
            for tok in 0..tokens {
                let p = &proj[i * tokens + tok];
                let mut rgb = [0u8; 3];
                for j in 0..drawn {
                    let span = hi[j] - lo[j];
                    let v = if span > 0.0 { (p[j] - lo[j]) / span } else { 0.0 };
                    rgb[j] = (v * 255.0).round() as u8;
                }
                img.put(tok % side, tok / side, rgb);
            }
            (id.clone(), img)
        })
        .collect();
    Ok(PcaView {
        maps,
        basis,
        explained,
        mean,
    })
}
