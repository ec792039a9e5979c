//! Procedural scenes with exact ground truth.
//!
//! Rasterisation is integer-only so a scene is bit-identical on every
//! platform. Shape membership is tested at pixel centres in half-pixel units.

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::image::RgbImage;
use crate::rng;

pub const CANVAS: usize = 32;
pub const MIN_SHAPE: usize = 8;
pub const MAX_SHAPE: usize = 14;
pub const MAX_SHAPES: usize = 3;

/// Number of distinct shape multisets with 1 to 3 members over 3 kinds.
pub const SCENE_CLASSES: usize = 19;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 3] = [ShapeKind::Circle, ShapeKind::Square, ShapeKind::Triangle];

    /// Segmentation colour.
    pub fn label_color(self) -> [u8; 3] {
        match self {
            ShapeKind::Circle => [255, 0, 0],
            ShapeKind::Square => [0, 255, 0],
            ShapeKind::Triangle => [0, 0, 255],
        }
    }

    /// Area of the continuous shape inscribed in a `size` box.
    pub fn analytic_area(self, size: usize) -> f64 {
        let s = size as f64;
        match self {
            ShapeKind::Circle => std::f64::consts::PI * s * s / 4.0,
            ShapeKind::Square => s * s,
            ShapeKind::Triangle => s * s / 2.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Fill {
    Flat { color: [u8; 3] },
    /// `top` on the first row of the bounding box, `bottom` on the last.
    Gradient { top: [u8; 3], bottom: [u8; 3] },
    /// Horizontal bands two pixels tall.
    Stripes { a: [u8; 3], b: [u8; 3] },
}

impl Fill {
    fn color_at(&self, row: usize, size: usize) -> [u8; 3] {
        match *self {
            Fill::Flat { color } => color,
            Fill::Gradient { top, bottom } => {
                let den = (size - 1) as i32;
                let r = row as i32;
                std::array::from_fn(|c| {
                    (top[c] as i32 + (bottom[c] as i32 - top[c] as i32) * r / den) as u8
                })
            }
            Fill::Stripes { a, b } => {
                if (row / 2) % 2 == 0 {
                    a
                } else {
                    b
                }
            }
        }
    }

    /// The colours the fill interpolates or alternates between.
    pub fn colors(&self) -> Vec<[u8; 3]> {
        match *self {
            Fill::Flat { color } => vec![color],
            Fill::Gradient { top, bottom } => vec![top, bottom],
            Fill::Stripes { a, b } => vec![a, b],
        }
    }
}

/// A shape inscribed in the square box with top-left `(x0, y0)` and side `size`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Shape {
    pub kind: ShapeKind,
    pub x0: usize,
    pub y0: usize,
    pub size: usize,
    pub fill: Fill,
}

impl Shape {
    /// Box centre in pixel units.
    pub fn center(&self) -> (f64, f64) {
        let h = self.size as f64 / 2.0;
        (self.x0 as f64 + h, self.y0 as f64 + h)
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        if x < self.x0 || y < self.y0 || x >= self.x0 + self.size || y >= self.y0 + self.size {
            return false;
        }
        let d = self.size as i64;
        // doubled coordinates: pixel centre 2x+1, box centre 2x0+d
        let px = 2 * x as i64 + 1 - (2 * self.x0 as i64 + d);
        let py = 2 * y as i64 + 1 - (2 * self.y0 as i64 + d);
        match self.kind {
            ShapeKind::Square => true,
            ShapeKind::Circle => px * px + py * py <= d * d,
            ShapeKind::Triangle => {
                let row = (y - self.y0) as i64;
                2 * px.abs() <= 2 * row + 1
            }
        }
    }

    fn overlaps_with_gap(&self, other: &Shape) -> bool {
        let sep = |a0: usize, a: usize, b0: usize, b: usize| a0 + a < b0 || b0 + b < a0;
        !(sep(self.x0, self.size, other.x0, other.size) || sep(self.y0, self.size, other.y0, other.size))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub canvas: usize,
    pub background: [u8; 3],
    pub shapes: Vec<Shape>,
    pub class_id: usize,
}

impl SceneSpec {
    /// Per-pixel shape index: 0 is background, `i + 1` is `shapes[i]`.
    pub fn mask(&self) -> Vec<u8> {
        let n = self.canvas;
        let mut mask = vec![0u8; n * n];
        for (i, s) in self.shapes.iter().enumerate() {
            for y in s.y0..s.y0 + s.size {
                for x in s.x0..s.x0 + s.size {
                    if s.contains(x, y) {
                        mask[y * n + x] = i as u8 + 1;
                    }
                }
            }
        }
        mask
    }

    pub fn render(&self) -> RgbImage {
        let n = self.canvas;
        let mut img = RgbImage::filled(n, n, self.background);
        for s in &self.shapes {
            for y in s.y0..s.y0 + s.size {
                let color = s.fill.color_at(y - s.y0, s.size);
                for x in s.x0..s.x0 + s.size {
                    if s.contains(x, y) {
                        img.put(x, y, color);
                    }
                }
            }
        }
        img
    }

    pub fn kinds(&self) -> Vec<ShapeKind> {
        self.shapes.iter().map(|s| s.kind).collect()
    }
}

/// Bijective rank of a shape multiset among all multisets of size 1..=3,
/// ordered by size then lexicographically by sorted kinds.
pub fn class_of(kinds: &[ShapeKind]) -> usize {
    assert!((1..=MAX_SHAPES).contains(&kinds.len()), "scene needs 1 to 3 shapes");
    let mut sorted = kinds.to_vec();
    sorted.sort();
    multisets()
        .iter()
        .position(|m| *m == sorted)
        .expect("every sorted multiset is enumerated")
}

/// Inverse of [`class_of`].
pub fn kinds_of_class(class_id: usize) -> Option<Vec<ShapeKind>> {
    multisets().into_iter().nth(class_id)
}

fn multisets() -> Vec<Vec<ShapeKind>> {
    let mut out = Vec::with_capacity(SCENE_CLASSES);
    for len in 1..=MAX_SHAPES {
        extend_multisets(len, 0, &mut Vec::new(), &mut out);
    }
    out
}

fn extend_multisets(len: usize, from: usize, cur: &mut Vec<ShapeKind>, out: &mut Vec<Vec<ShapeKind>>) {
    if cur.len() == len {
        out.push(cur.clone());
        return;
    }
    for k in from..ShapeKind::ALL.len() {
        cur.push(ShapeKind::ALL[k]);
        extend_multisets(len, k, cur, out);
        cur.pop();
    }
}

/// A generated scene with its ground truth.
#[derive(Clone, Debug)]
pub struct Scene {
    pub seed: u64,
    pub spec: SceneSpec,
    pub image: RgbImage,
    pub mask: Vec<u8>,
    /// Mean colour of the background, then of each shape, in 0..=255 units.
    pub palette: Vec<[f64; 3]>,
}

impl Scene {
    pub fn from_spec(seed: u64, spec: SceneSpec) -> Self {
        let image = spec.render();
        let mask = spec.mask();
        let regions = spec.shapes.len() + 1;
        let mut sum = vec![[0.0f64; 3]; regions];
        let mut count = vec![0usize; regions];
        for (m, px) in mask.iter().zip(image.pixels()) {
            let r = *m as usize;
            count[r] += 1;
            for c in 0..3 {
                sum[r][c] += px[c] as f64;
            }
        }
        let palette = sum
            .iter()
            .zip(&count)
            .map(|(s, &n)| s.map(|v| if n > 0 { v / n as f64 } else { 0.0 }))
            .collect();
        Self {
            seed,
            spec,
            image,
            mask,
            palette,
        }
    }

    /// Boolean mask per shape, in `spec.shapes` order.
    pub fn shape_masks(&self) -> Vec<Vec<bool>> {
        (1..=self.spec.shapes.len())
            .map(|i| self.mask.iter().map(|&m| m as usize == i).collect())
            .collect()
    }
}

/// Minimum L1 distance between a shape colour and the background.
const MIN_CONTRAST: i32 = 180;

fn random_color(rng: &mut rng::Stream) -> [u8; 3] {
    [rng.gen(), rng.gen(), rng.gen()]
}

/// Largest per-channel offset between the two colours of a textured fill.
const SHADE: i32 = 20;

fn l1(a: [u8; 3], b: [u8; 3]) -> i32 {
    (0..3).map(|i| (a[i] as i32 - b[i] as i32).abs()).sum()
}

fn shade(rng: &mut rng::Stream, base: [u8; 3]) -> [u8; 3] {
    base.map(|v| (v as i32 + rng.gen_range(-SHADE..=SHADE)).clamp(0, 255) as u8)
}

/// A fill whose colours all contrast with every colour in `taken`. Textured
/// fills vary only by a shade, so each region stays one colour cluster.
fn contrasting_fill(rng: &mut rng::Stream, taken: &[[u8; 3]]) -> Fill {
    let style = rng.gen_range(0..3);
    loop {
        let base = random_color(rng);
        let fill = match style {
            0 => Fill::Flat { color: base },
            1 => Fill::Gradient {
                top: base,
                bottom: shade(rng, base),
            },
            _ => Fill::Stripes {
                a: base,
                b: shade(rng, base),
            },
        };
        if fill.colors().iter().all(|&c| taken.iter().all(|&t| l1(c, t) >= MIN_CONTRAST)) {
            return fill;
        }
    }
}

/// Deterministic scene for `seed` on the default canvas.
pub fn gen_scene(seed: u64) -> Scene {
    gen_scene_on(seed, CANVAS)
}

/// Deterministic scene for `seed` on an `canvas`-pixel square canvas.
///
/// Shapes never overlap and keep a one-pixel gap, so every mask region is
/// exactly the rasterised shape. If a shape cannot be placed after a bounded
/// number of attempts it is dropped; the first shape always fits.
pub fn gen_scene_on(seed: u64, canvas: usize) -> Scene {
    assert!(canvas >= MIN_SHAPE, "canvas smaller than the minimum shape");
    let mut rng = rng::stream(seed);
    let background = random_color(&mut rng);
    let wanted = rng.gen_range(1..=MAX_SHAPES);
    let max_size = MAX_SHAPE.min(canvas);
    let mut shapes: Vec<Shape> = Vec::with_capacity(wanted);
    for _ in 0..wanted {
        let kind = ShapeKind::ALL[rng.gen_range(0..3)];
        let taken: Vec<[u8; 3]> = std::iter::once(background)
            .chain(shapes.iter().flat_map(|s| s.fill.colors()))
            .collect();
        let fill = contrasting_fill(&mut rng, &taken);
        for _ in 0..64 {
            // even sizes keep lattice discs within a few percent of their area
            let size = MIN_SHAPE + 2 * rng.gen_range(0..=(max_size - MIN_SHAPE) / 2);
            let x0 = rng.gen_range(0..=canvas - size);
            let y0 = rng.gen_range(0..=canvas - size);
            let cand = Shape {
                kind,
                x0,
                y0,
                size,
                fill,
            };
            if shapes.iter().all(|s| !s.overlaps_with_gap(&cand)) {
                shapes.push(cand);
                break;
            }
        }
    }
    let class_id = class_of(&shapes.iter().map(|s| s.kind).collect::<Vec<_>>());
    let spec = SceneSpec {
        canvas,
        background,
        shapes,
        class_id,
    };
    Scene::from_spec(seed, spec)
}

/// Seed of scene `index` in the dataset drawn from `base`.
pub fn scene_seed(base: u64, index: usize) -> u64 {
    let mut r = rng::stream(base);
    r.set_stream(index as u64);
    r.next_u64()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConditionKind {
    Natural,
    Edge,
    Silhouette,
    Segmentation,
}

impl ConditionKind {
    pub const ALL: [ConditionKind; 4] = [
        ConditionKind::Natural,
        ConditionKind::Edge,
        ConditionKind::Silhouette,
        ConditionKind::Segmentation,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ConditionKind::Natural => "natural",
            ConditionKind::Edge => "edge",
            ConditionKind::Silhouette => "silhouette",
            ConditionKind::Segmentation => "segmentation",
        }
    }
}

impl std::str::FromStr for ConditionKind {
    type Err = crate::Error;

    fn from_str(s: &str) -> crate::Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| crate::Error::config(format!("unknown condition kind `{s}`")))
    }
}

/// Renders a structure condition. Edges are the inner 4-connected boundary
/// of each shape; every non-natural kind is drawn on black.
pub fn render_condition(spec: &SceneSpec, kind: ConditionKind) -> RgbImage {
    let n = spec.canvas;
    if kind == ConditionKind::Natural {
        return spec.render();
    }
    let mask = spec.mask();
    let mut img = RgbImage::filled(n, n, [0; 3]);
    for y in 0..n {
        for x in 0..n {
            let m = mask[y * n + x];
            if m == 0 {
                continue;
            }
            let color = match kind {
                ConditionKind::Silhouette => [255; 3],
                ConditionKind::Segmentation => spec.shapes[m as usize - 1].kind.label_color(),
                ConditionKind::Edge => {
                    let at = |xx: isize, yy: isize| {
                        if xx < 0 || yy < 0 || xx >= n as isize || yy >= n as isize {
                            0
                        } else {
                            mask[yy as usize * n + xx as usize]
                        }
                    };
                    let (xi, yi) = (x as isize, y as isize);
                    let interior = [(1, 0), (-1, 0), (0, 1), (0, -1)]
                        .iter()
                        .all(|(dx, dy)| at(xi + dx, yi + dy) == m);
                    if interior {
                        continue;
                    }
                    [255; 3]
                }
                ConditionKind::Natural => unreachable!(),
            };
            img.put(x, y, color);
        }
    }
    img
}
