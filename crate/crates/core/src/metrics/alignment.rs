//! Structure and appearance alignment scores on scenes with known geometry.

use rand::Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::image::RgbImage;
use crate::rng;
use crate::tensor::Tensor;

/// Cosine-similarity Gram matrix of `[tokens, channels]` features.
/// A zero-norm token has similarity 0 with every token, itself included.
pub fn cosine_gram(feat: &Tensor) -> Vec<f64> {
    let (n, c) = (feat.rows(), feat.cols());
    let d = feat.data();
    let unit: Vec<Option<Vec<f64>>> = (0..n)
        .map(|i| {
            let row = &d[i * c..(i + 1) * c];
            let norm = row.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt();
            (norm > 0.0).then(|| row.iter().map(|&v| v as f64 / norm).collect())
        })
        .collect();
    let mut g = vec![0.0; n * n];
    for i in 0..n {
        for j in i..n {
            if let (Some(a), Some(b)) = (&unit[i], &unit[j]) {
                let s: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
                g[i * n + j] = s;
                g[j * n + i] = s;
            }
        }
    }
    g
}

/// Mean squared difference between the cosine Gram matrices of two feature sets.
pub fn self_similarity_distance(feat_s: &Tensor, feat_o: &Tensor) -> Result<f64> {
    if feat_s.shape().len() != 2 || feat_o.shape().len() != 2 || feat_s.rows() != feat_o.rows() {
        return Err(Error::contract(format!(
            "self-similarity needs equal token counts, got {:?} and {:?}",
            feat_s.shape(),
            feat_o.shape()
        )));
    }
    let (a, b) = (cosine_gram(feat_s), cosine_gram(feat_o));
    Ok(a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64)
}

pub const KMEANS_ITERS: usize = 20;
pub const KMEANS_SEED: u64 = 0x10_0A_5EED;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct IouReport {
    pub mean: f64,
    pub per_shape: Vec<f64>,
    /// A cluster stayed empty after one re-seed.
    pub degenerate: bool,
}

pub const KMEANS_RESTARTS: usize = 4;

fn dist2(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    (0..3).map(|i| (a[i] - b[i]).powi(2)).sum()
}

fn nearest(p: &[f64; 3], centers: &[[f64; 3]]) -> usize {
    // first minimum wins ties
    (0..centers.len()).min_by(|&x, &y| dist2(p, &centers[x]).total_cmp(&dist2(p, &centers[y]))).unwrap()
}

/// One k-means++ seeded Lloyd run: assignment, degenerate flag, inertia.
fn kmeans_once(px: &[[f64; 3]], k: usize, r: &mut rng::Stream) -> (Vec<usize>, bool, f64) {
    let n = px.len();
    let mut centers = vec![px[r.gen_range(0..n)]];
    while centers.len() < k {
        let d: Vec<f64> = px.iter().map(|p| dist2(p, &centers[nearest(p, &centers)])).collect();
        let total: f64 = d.iter().sum();
        if total == 0.0 {
            centers.push(px[r.gen_range(0..n)]);
            continue;
        }
        let mut u = r.gen::<f64>() * total;
        let mut pick = n - 1;
        for (i, di) in d.iter().enumerate() {
            if u < *di {
                pick = i;
                break;
            }
            u -= di;
        }
        centers.push(px[pick]);
    }
    let mut assign = vec![0usize; n];
    let mut reseeded = false;
    let mut degenerate = false;
    for _ in 0..KMEANS_ITERS {
        for (a, p) in assign.iter_mut().zip(px) {
            *a = nearest(p, &centers);
        }
        let mut sum = vec![[0.0; 3]; k];
        let mut cnt = vec![0usize; k];
        for (a, p) in assign.iter().zip(px) {
            cnt[*a] += 1;
            for c in 0..3 {
                sum[*a][c] += p[c];
            }
        }
        for j in 0..k {
            if cnt[j] > 0 {
                centers[j] = sum[j].map(|s| s / cnt[j] as f64);
            } else if !reseeded {
                // re-seed on the pixel farthest from its centre
                let far = (0..n)
                    .max_by(|&x, &y| dist2(&px[x], &centers[assign[x]]).total_cmp(&dist2(&px[y], &centers[assign[y]])))
                    .unwrap();
                centers[j] = px[far];
                reseeded = true;
            } else {
                degenerate = true;
            }
        }
    }
    for (a, p) in assign.iter_mut().zip(px) {
        *a = nearest(p, &centers);
    }
    let mut used = vec![false; k];
    assign.iter().for_each(|&a| used[a] = true);
    let inertia = assign.iter().zip(px).map(|(&a, p)| dist2(p, &centers[a])).sum();
    (assign, degenerate || used.iter().any(|u| !u), inertia)
}

/// k-means over pixel colours: k-means++ seeding from a fixed seed,
/// [`KMEANS_RESTARTS`] runs, lowest inertia kept (earliest on ties).
/// Returns the per-pixel cluster index and whether a cluster stayed empty.
pub fn kmeans_colors(img: &RgbImage, k: usize) -> (Vec<usize>, bool) {
    let px: Vec<[f64; 3]> = img.pixels().map(|p| p.map(|v| v as f64)).collect();
    let mut r = rng::stream(KMEANS_SEED);
    let mut best = kmeans_once(&px, k, &mut r);
    for _ in 1..KMEANS_RESTARTS {
        let run = kmeans_once(&px, k, &mut r);
        if run.2 < best.2 {
            best = run;
        }
    }
    (best.0, best.1)
}

/// Segments `img` into `shapes + 1` colour clusters, greedily matches
/// clusters to ground-truth regions by decreasing overlap (background
/// included), and averages the IoU of the shape regions.
pub fn structure_iou(img: &RgbImage, shape_masks: &[Vec<bool>]) -> Result<IouReport> {
    let n = img.width() * img.height();
    if shape_masks.is_empty() {
        return Err(Error::contract("structure_iou needs at least one shape mask"));
    }
    if shape_masks.iter().any(|m| m.len() != n) {
        return Err(Error::contract("mask resolution differs from the image"));
    }
    let k = shape_masks.len() + 1;
    let (assign, degenerate) = kmeans_colors(img, k);
    // region 0 is background
    let region: Vec<usize> = (0..n)
        .map(|p| shape_masks.iter().position(|m| m[p]).map_or(0, |s| s + 1))
        .collect();
    let mut inter = vec![vec![0usize; k]; k];
    let mut csize = vec![0usize; k];
    let mut rsize = vec![0usize; k];
    for p in 0..n {
        inter[assign[p]][region[p]] += 1;
        csize[assign[p]] += 1;
        rsize[region[p]] += 1;
    }
    let mut pairs: Vec<(usize, usize, usize)> = (0..k)
        .flat_map(|c| (0..k).map(move |r| (c, r)))
        .filter(|&(c, _)| csize[c] > 0)
        .map(|(c, r)| (inter[c][r], c, r))
        .collect();
    pairs.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut cluster_of = vec![None; k];
    let mut taken = vec![false; k];
    for (ov, c, r) in pairs {
        if ov == 0 || taken[c] || cluster_of[r].is_some() {
            continue;
        }
        taken[c] = true;
        cluster_of[r] = Some(c);
    }
    let per_shape: Vec<f64> = (1..k)
        .map(|r| match cluster_of[r] {
            Some(c) => {
                let i = inter[c][r] as f64;
                i / ((csize[c] + rsize[r]) as f64 - i)
            }
            None => 0.0,
        })
        .collect();
    let mean = per_shape.iter().sum::<f64>() / per_shape.len() as f64;
    Ok(IouReport {
        mean,
        per_shape,
        degenerate,
    })
}

pub const HIST_BINS: usize = 8;

/// 8x8x8 RGB histogram. Counts are kept exact and normalised on comparison.
#[derive(Clone, Debug, PartialEq)]
pub struct ColorHistogram {
    counts: Vec<u64>,
    total: u64,
}

impl ColorHistogram {
    pub fn of(img: &RgbImage) -> Self {
        let shift = 8 - HIST_BINS.trailing_zeros();
        let mut counts = vec![0u64; HIST_BINS.pow(3)];
        for p in img.pixels() {
            let [r, g, b] = p.map(|v| (v >> shift) as usize);
            counts[(r * HIST_BINS + g) * HIST_BINS + b] += 1;
        }
        Self {
            counts,
            total: (img.width() * img.height()) as u64,
        }
    }

    /// Bin masses, summing to one.
    pub fn normalized(&self) -> Vec<f64> {
        self.counts.iter().map(|&c| c as f64 / self.total as f64).collect()
    }

    /// Total-variation distance, in `[0, 1]`. Computed on cross-multiplied
    /// integer counts so the only rounding is the final division.
    pub fn distance(&self, other: &ColorHistogram) -> f64 {
        let (na, nb) = (self.total as u128, other.total as u128);
        let num: u128 = self
            .counts
            .iter()
            .zip(&other.counts)
            .map(|(&a, &b)| (a as u128 * nb).abs_diff(b as u128 * na))
            .sum();
        num as f64 / (2 * na * nb) as f64
    }
}

/// Total-variation distance between the colour histograms of `img` and the
/// reference palette.
pub fn palette_distance(img: &RgbImage, reference: &ColorHistogram) -> f64 {
    ColorHistogram::of(img).distance(reference)
}

/// Mean Euclidean distance (0..=255 units) between the mean colour of each
/// region of `img` and the matching `targets` colour. Region 0 is the
/// background; region `i` is `shape_masks[i - 1]`.
pub fn region_color_error(img: &RgbImage, shape_masks: &[Vec<bool>], targets: &[[f64; 3]]) -> Result<f64> {
    if targets.len() != shape_masks.len() + 1 {
        return Err(Error::contract("one target colour per region is required"));
    }
    let k = targets.len();
    let mut sum = vec![[0.0f64; 3]; k];
    let mut cnt = vec![0usize; k];
    for (p, px) in img.pixels().enumerate() {
        let r = shape_masks.iter().position(|m| m[p]).map_or(0, |s| s + 1);
        cnt[r] += 1;
        for c in 0..3 {
            sum[r][c] += px[c] as f64;
        }
    }
    let mut total = 0.0;
    let mut regions = 0;
    for r in 0..k {
        if cnt[r] == 0 {
            continue;
        }
        let mean = sum[r].map(|s| s / cnt[r] as f64);
        total += (0..3).map(|c| (mean[c] - targets[r][c]).powi(2)).sum::<f64>().sqrt();
        regions += 1;
    }
    Ok(total / regions.max(1) as f64)
}

/// Scores of one generated image against its structure and appearance sources.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AlignmentReport {
    pub pair: String,
    pub variant: String,
    pub structure_iou: f64,
    pub self_sim_distance: f64,
    /// Palette distance to the appearance source.
    pub palette_distance: f64,
    /// Palette distance to the structure source.
    pub palette_distance_a: f64,
    /// Mean colour error of the structure regions against their intended colours.
    pub region_color_error: f64,
}

impl AlignmentReport {
    pub fn validate(&self) -> Result<()> {
        let ok = (0.0..=1.0).contains(&self.structure_iou)
            && self.self_sim_distance.is_finite()
            && self.self_sim_distance >= 0.0
            && (0.0..=1.0).contains(&self.palette_distance)
            && (0.0..=1.0).contains(&self.palette_distance_a)
            && self.region_color_error.is_finite()
            && self.region_color_error >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::contract(format!("alignment report out of range: {self:?}")))
        }
    }
}
