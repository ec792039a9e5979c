//! Parameterised layers with hand-derived reverse-mode gradients.
//!
//! Every layer follows the same pattern: `forward` returns the output plus a
//! cache (only when `train` is set), and `backward` consumes that cache, adds
//! parameter gradients into a flat gradient buffer laid out like the
//! [`ParamStore`], and returns the gradient with respect to the input.

use rand::Rng;

use super::linalg::{gemm, matmul, Mat};
use super::ops::softmax_rows;
use super::params::{grad_slice, ParamId, ParamStore};

/// Same-padded, stride-1 2-D convolution over `[c, h, w]` maps.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
}

#[derive(Debug)]
pub struct ConvCache {
    /// im2col matrix `[cin * k * k, h * w]` (the raw input when `k == 1`).
    col: Vec<f32>,
    h: usize,
    w: usize,
}

impl Conv2d {
    pub fn new(store: &mut ParamStore, name: &str, cin: usize, cout: usize, kernel: usize) -> Self {
        assert!(kernel == 1 || kernel == 3, "only 1x1 and 3x3 kernels are supported");
        let weight = store.register(format!("{name}.weight"), &[cout, cin, kernel, kernel]);
        let bias = store.register(format!("{name}.bias"), &[cout]);
        Self {
            weight,
            bias,
            cin,
            cout,
            kernel,
        }
    }

    pub fn init<R: Rng>(&self, store: &mut ParamStore, rng: &mut R) {
        let bound = 1.0 / ((self.cin * self.kernel * self.kernel) as f32).sqrt();
        store.fill_uniform(self.weight, bound, rng);
        store.fill_uniform(self.bias, bound, rng);
    }

    fn im2col(&self, x: &[f32], h: usize, w: usize) -> Vec<f32> {
        let hw = h * w;
        let mut col = Vec::with_capacity(self.cin * 9 * hw);
        for ci in 0..self.cin {
            let src = &x[ci * hw..(ci + 1) * hw];
            for ky in 0..3 {
                for kx in 0..3 {
                    for y in 0..h {
                        let sy = y as isize + ky as isize - 1;
                        if sy < 0 || sy >= h as isize {
                            col.resize(col.len() + w, 0.0);
                            continue;
                        }
                        let srow = &src[sy as usize * w..][..w];
                        match kx {
                            0 => {
                                col.push(0.0);
                                col.extend_from_slice(&srow[..w - 1]);
                            }
                            1 => col.extend_from_slice(srow),
                            _ => {
                                col.extend_from_slice(&srow[1..]);
                                col.push(0.0);
                            }
                        }
                    }
                }
            }
        }
        col
    }

    fn col2im(&self, dcol: &[f32], h: usize, w: usize) -> Vec<f32> {
        let hw = h * w;
        let mut dx = vec![0.0; self.cin * hw];
        for ci in 0..self.cin {
            let dst = &mut dx[ci * hw..(ci + 1) * hw];
            for ky in 0..3 {
                for kx in 0..3 {
                    let row = &dcol[(ci * 9 + ky * 3 + kx) * hw..][..hw];
                    for y in 0..h {
                        let sy = y as isize + ky as isize - 1;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        let drow = &mut dst[sy as usize * w..][..w];
                        let srow = &row[y * w..][..w];
                        let x0 = if kx == 0 { 1 } else { 0 };
                        let x1 = if kx == 2 { w - 1 } else { w };
                        for xx in x0..x1 {
                            drow[xx + kx - 1] += srow[xx];
                        }
                    }
                }
            }
        }
        dx
    }

    pub fn forward(
        &self,
        p: &ParamStore,
        x: &[f32],
        h: usize,
        w: usize,
        train: bool,
    ) -> (Vec<f32>, Option<ConvCache>) {
        let hw = h * w;
        debug_assert_eq!(x.len(), self.cin * hw);
        let kdim = self.cin * self.kernel * self.kernel;
        let col = if self.kernel == 3 {
            self.im2col(x, h, w)
        } else {
            x.to_vec()
        };
        let bias = p.get(self.bias);
        let mut out = Vec::with_capacity(self.cout * hw);
        for &b in bias {
            out.resize(out.len() + hw, b);
        }
        gemm(
            1.0,
            Mat::new(p.get(self.weight), self.cout, kdim),
            Mat::new(&col, kdim, hw),
            1.0,
            &mut out,
            hw,
        );
        let cache = train.then_some(ConvCache { col, h, w });
        (out, cache)
    }

    pub fn backward(
        &self,
        p: &ParamStore,
        grads: &mut [f32],
        cache: &ConvCache,
        dy: &[f32],
    ) -> Vec<f32> {
        let hw = cache.h * cache.w;
        let kdim = self.cin * self.kernel * self.kernel;
        {
            let gb = grad_slice(p, grads, self.bias);
            for (co, chunk) in dy.chunks(hw).enumerate() {
                gb[co] += chunk.iter().sum::<f32>();
            }
        }
        gemm(
            1.0,
            Mat::new(dy, self.cout, hw),
            Mat::new(&cache.col, kdim, hw).t(),
            1.0,
            grad_slice(p, grads, self.weight),
            kdim,
        );
        let dcol = matmul(
            Mat::new(p.get(self.weight), self.cout, kdim).t(),
            Mat::new(dy, self.cout, hw),
        );
        if self.kernel == 3 {
            self.col2im(&dcol, cache.h, cache.w)
        } else {
            dcol
        }
    }
}

/// Group normalisation over `[c, n]` maps with per-channel affine parameters.
#[derive(Clone, Debug)]
pub struct GroupNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub channels: usize,
    pub groups: usize,
    pub eps: f32,
}

#[derive(Debug)]
pub struct NormCache {
    xhat: Vec<f32>,
    rstd: Vec<f32>,
}

impl GroupNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, groups: usize) -> Self {
        assert!(channels % groups == 0, "groups must divide channels");
        let gamma = store.register(format!("{name}.gamma"), &[channels]);
        let beta = store.register(format!("{name}.beta"), &[channels]);
        Self {
            gamma,
            beta,
            channels,
            groups,
            eps: 1e-5,
        }
    }

    pub fn init(&self, store: &mut ParamStore) {
        store.fill(self.gamma, 1.0);
        store.fill(self.beta, 0.0);
    }

    pub fn forward(&self, p: &ParamStore, x: &[f32], train: bool) -> (Vec<f32>, Option<NormCache>) {
        let n = x.len() / self.channels;
        let cpg = self.channels / self.groups;
        let gsize = cpg * n;
        let gamma = p.get(self.gamma);
        let beta = p.get(self.beta);
        let mut out = vec![0.0; x.len()];
        let mut xhat = if train { vec![0.0; x.len()] } else { Vec::new() };
        let mut rstds = Vec::with_capacity(self.groups);
        for g in 0..self.groups {
            let xs = &x[g * gsize..(g + 1) * gsize];
            let mean = xs.iter().map(|&v| v as f64).sum::<f64>() / gsize as f64;
            let var = xs
                .iter()
                .map(|&v| {
                    let d = v as f64 - mean;
                    d * d
                })
                .sum::<f64>()
                / gsize as f64;
            let rstd = (1.0 / (var + self.eps as f64).sqrt()) as f32;
            let mean = mean as f32;
            rstds.push(rstd);
            for cl in 0..cpg {
                let c = g * cpg + cl;
                let base = c * n;
                for i in 0..n {
                    let xh = (x[base + i] - mean) * rstd;
                    if train {
                        xhat[base + i] = xh;
                    }
                    out[base + i] = xh * gamma[c] + beta[c];
                }
            }
        }
        let cache = train.then_some(NormCache { xhat, rstd: rstds });
        (out, cache)
    }

    pub fn backward(
        &self,
        p: &ParamStore,
        grads: &mut [f32],
        cache: &NormCache,
        dy: &[f32],
    ) -> Vec<f32> {
        let n = dy.len() / self.channels;
        let cpg = self.channels / self.groups;
        let gsize = (cpg * n) as f32;
        let gamma = p.get(self.gamma).to_vec();
        {
            let (mut dg, mut db) = (vec![0.0; self.channels], vec![0.0; self.channels]);
            for c in 0..self.channels {
                for i in 0..n {
                    dg[c] += dy[c * n + i] * cache.xhat[c * n + i];
                    db[c] += dy[c * n + i];
                }
            }
            for (a, b) in grad_slice(p, grads, self.gamma).iter_mut().zip(&dg) {
                *a += b;
            }
            for (a, b) in grad_slice(p, grads, self.beta).iter_mut().zip(&db) {
                *a += b;
            }
        }
        let mut dx = vec![0.0; dy.len()];
        for g in 0..self.groups {
            let (mut sum_d, mut sum_dx) = (0.0f32, 0.0f32);
            for cl in 0..cpg {
                let c = g * cpg + cl;
                for i in 0..n {
                    let d = dy[c * n + i] * gamma[c];
                    sum_d += d;
                    sum_dx += d * cache.xhat[c * n + i];
                }
            }
            let rstd = cache.rstd[g];
            for cl in 0..cpg {
                let c = g * cpg + cl;
                for i in 0..n {
                    let idx = c * n + i;
                    let d = dy[idx] * gamma[c];
                    dx[idx] = rstd / gsize * (gsize * d - sum_d - cache.xhat[idx] * sum_dx);
                }
            }
        }
        dx
    }
}

/// Dense layer `y = x W + b` over row vectors, `W` stored `[din, dout]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub din: usize,
    pub dout: usize,
}

#[derive(Debug)]
pub struct LinearCache {
    x: Vec<f32>,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, din: usize, dout: usize, bias: bool) -> Self {
        let weight = store.register(format!("{name}.weight"), &[din, dout]);
        let bias = bias.then(|| store.register(format!("{name}.bias"), &[dout]));
        Self {
            weight,
            bias,
            din,
            dout,
        }
    }

    pub fn init<R: Rng>(&self, store: &mut ParamStore, rng: &mut R) {
        let bound = 1.0 / (self.din as f32).sqrt();
        store.fill_uniform(self.weight, bound, rng);
        if let Some(b) = self.bias {
            store.fill_uniform(b, bound, rng);
        }
    }

    pub fn forward(&self, p: &ParamStore, x: &[f32], train: bool) -> (Vec<f32>, Option<LinearCache>) {
        let rows = x.len() / self.din;
        let mut out = vec![0.0; rows * self.dout];
        if let Some(b) = self.bias {
            let b = p.get(b);
            for row in out.chunks_mut(self.dout) {
                row.copy_from_slice(b);
            }
        }
        gemm(
            1.0,
            Mat::new(x, rows, self.din),
            Mat::new(p.get(self.weight), self.din, self.dout),
            1.0,
            &mut out,
            self.dout,
        );
        (out, train.then(|| LinearCache { x: x.to_vec() }))
    }

    pub fn backward(
        &self,
        p: &ParamStore,
        grads: &mut [f32],
        cache: &LinearCache,
        dy: &[f32],
    ) -> Vec<f32> {
        let rows = dy.len() / self.dout;
        if let Some(b) = self.bias {
            let gb = grad_slice(p, grads, b);
            for row in dy.chunks(self.dout) {
                for (g, d) in gb.iter_mut().zip(row) {
                    *g += d;
                }
            }
        }
        gemm(
            1.0,
            Mat::new(&cache.x, rows, self.din).t(),
            Mat::new(dy, rows, self.dout),
            1.0,
            grad_slice(p, grads, self.weight),
            self.dout,
        );
        matmul(
            Mat::new(dy, rows, self.dout),
            Mat::new(p.get(self.weight), self.din, self.dout).t(),
        )
    }
}

/// Borrowed projection weights of one self-attention layer, each `[c, c]`
/// except the output bias `[c]`.
#[derive(Clone, Copy, Debug)]
pub struct AttnWeights<'a> {
    pub wq: &'a [f32],
    pub wk: &'a [f32],
    pub wv: &'a [f32],
    pub wo: &'a [f32],
    pub bo: &'a [f32],
}

#[derive(Debug)]
pub struct AttnCache {
    h: Vec<f32>,
    q: Vec<f32>,
    k: Vec<f32>,
    v: Vec<f32>,
    /// `[heads, n, n]`
    a: Vec<f32>,
    o: Vec<f32>,
}

/// Output of the multi-head attention core.
#[derive(Debug)]
pub struct AttnOutput {
    /// `[n, c]`, after the output projection.
    pub out: Vec<f32>,
    /// `[heads, n, n]` maps actually used to mix the values.
    pub attn: Vec<f32>,
    pub cache: Option<AttnCache>,
}

/// Multi-head self-attention on tokens `h: [n, c]`.
///
/// When `override_attn` (`[heads, n, n]`) is given it replaces the computed
/// maps before they weigh the values. The override path is inference-only.
pub fn attention_core(
    h: &[f32],
    n: usize,
    c: usize,
    heads: usize,
    w: &AttnWeights<'_>,
    override_attn: Option<&[f32]>,
    train: bool,
) -> AttnOutput {
    let d = c / heads;
    let q = matmul(Mat::new(h, n, c), Mat::new(w.wq, c, c));
    let k = matmul(Mat::new(h, n, c), Mat::new(w.wk, c, c));
    let v = matmul(Mat::new(h, n, c), Mat::new(w.wv, c, c));
    let attn = match override_attn {
        Some(a) => a.to_vec(),
        None => {
            let scale = 1.0 / (d as f32).sqrt();
            let mut a = vec![0.0; heads * n * n];
            for head in 0..heads {
                let block = &mut a[head * n * n..(head + 1) * n * n];
                gemm(
                    scale,
                    Mat::cols_slice(&q, n, c, head * d, d),
                    Mat::cols_slice(&k, n, c, head * d, d).t(),
                    0.0,
                    block,
                    n,
                );
                softmax_rows(block, n);
            }
            a
        }
    };
    let mut o = vec![0.0; n * c];
    for head in 0..heads {
        gemm(
            1.0,
            Mat::new(&attn[head * n * n..(head + 1) * n * n], n, n),
            Mat::cols_slice(&v, n, c, head * d, d),
            0.0,
            &mut o[head * d..],
            c,
        );
    }
    let mut out = vec![0.0; n * c];
    for row in out.chunks_mut(c) {
        row.copy_from_slice(w.bo);
    }
    gemm(1.0, Mat::new(&o, n, c), Mat::new(w.wo, c, c), 1.0, &mut out, c);
    let cache = train.then(|| AttnCache {
        h: h.to_vec(),
        q,
        k,
        v,
        a: attn.clone(),
        o,
    });
    AttnOutput { out, attn, cache }
}

/// Gradients of [`attention_core`]: returns `(dh, dwq, dwk, dwv, dwo, dbo)`.
pub struct AttnGrads {
    pub dh: Vec<f32>,
    pub dwq: Vec<f32>,
    pub dwk: Vec<f32>,
    pub dwv: Vec<f32>,
    pub dwo: Vec<f32>,
    pub dbo: Vec<f32>,
}

pub fn attention_core_backward(
    cache: &AttnCache,
    n: usize,
    c: usize,
    heads: usize,
    w: &AttnWeights<'_>,
    dout: &[f32],
) -> AttnGrads {
    let d = c / heads;
    let scale = 1.0 / (d as f32).sqrt();
    let mut dbo = vec![0.0; c];
    for row in dout.chunks(c) {
        for (g, v) in dbo.iter_mut().zip(row) {
            *g += v;
        }
    }
    let dwo = matmul(Mat::new(&cache.o, n, c).t(), Mat::new(dout, n, c));
    let d_o = matmul(Mat::new(dout, n, c), Mat::new(w.wo, c, c).t());
    let mut dq = vec![0.0; n * c];
    let mut dk = vec![0.0; n * c];
    let mut dv = vec![0.0; n * c];
    let mut da = vec![0.0; n * n];
    for head in 0..heads {
        let a = &cache.a[head * n * n..(head + 1) * n * n];
        // dA = dO_h V_h^T
        gemm(
            1.0,
            Mat::cols_slice(&d_o, n, c, head * d, d),
            Mat::cols_slice(&cache.v, n, c, head * d, d).t(),
            0.0,
            &mut da,
            n,
        );
        // dV_h = A^T dO_h
        gemm(
            1.0,
            Mat::new(a, n, n).t(),
            Mat::cols_slice(&d_o, n, c, head * d, d),
            0.0,
            &mut dv[head * d..],
            c,
        );
        // softmax backward, folding in the logit scale
        for i in 0..n {
            let ar = &a[i * n..(i + 1) * n];
            let dr = &mut da[i * n..(i + 1) * n];
            let dot: f32 = ar.iter().zip(dr.iter()).map(|(x, y)| x * y).sum();
            for j in 0..n {
                dr[j] = ar[j] * (dr[j] - dot) * scale;
            }
        }
        gemm(
            1.0,
            Mat::new(&da, n, n),
            Mat::cols_slice(&cache.k, n, c, head * d, d),
            0.0,
            &mut dq[head * d..],
            c,
        );
        gemm(
            1.0,
            Mat::new(&da, n, n).t(),
            Mat::cols_slice(&cache.q, n, c, head * d, d),
            0.0,
            &mut dk[head * d..],
            c,
        );
    }
    let hmat = Mat::new(&cache.h, n, c);
    let dwq = matmul(hmat.t(), Mat::new(&dq, n, c));
    let dwk = matmul(hmat.t(), Mat::new(&dk, n, c));
    let dwv = matmul(hmat.t(), Mat::new(&dv, n, c));
    let mut dh = matmul(Mat::new(&dq, n, c), Mat::new(w.wq, c, c).t());
    gemm(1.0, Mat::new(&dk, n, c), Mat::new(w.wk, c, c).t(), 1.0, &mut dh, c);
    gemm(1.0, Mat::new(&dv, n, c), Mat::new(w.wv, c, c).t(), 1.0, &mut dh, c);
    AttnGrads {
        dh,
        dwq,
        dwk,
        dwv,
        dwo,
        dbo,
    }
}

/// Self-attention sublayer parameters: `h -> A(hW^Q, hW^K) (hW^V) W^O + b`.
#[derive(Clone, Debug)]
pub struct AttnLayer {
    pub norm: GroupNorm,
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
    pub channels: usize,
    pub heads: usize,
}

impl AttnLayer {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, heads: usize, groups: usize) -> Self {
        let norm = GroupNorm::new(store, &format!("{name}.norm"), channels, groups);
        let wq = store.register(format!("{name}.wq"), &[channels, channels]);
        let wk = store.register(format!("{name}.wk"), &[channels, channels]);
        let wv = store.register(format!("{name}.wv"), &[channels, channels]);
        let wo = store.register(format!("{name}.wo"), &[channels, channels]);
        let bo = store.register(format!("{name}.bo"), &[channels]);
        Self {
            norm,
            wq,
            wk,
            wv,
            wo,
            bo,
            channels,
            heads,
        }
    }

    pub fn init<R: Rng>(&self, store: &mut ParamStore, rng: &mut R) {
        self.norm.init(store);
        let bound = 1.0 / (self.channels as f32).sqrt();
        for id in [self.wq, self.wk, self.wv, self.wo] {
            store.fill_uniform(id, bound, rng);
        }
        store.fill(self.bo, 0.0);
    }

    pub fn weights<'a>(&self, p: &'a ParamStore) -> AttnWeights<'a> {
        AttnWeights {
            wq: p.get(self.wq),
            wk: p.get(self.wk),
            wv: p.get(self.wv),
            wo: p.get(self.wo),
            bo: p.get(self.bo),
        }
    }

    pub fn accumulate(&self, p: &ParamStore, grads: &mut [f32], g: &AttnGrads) {
        for (id, src) in [
            (self.wq, &g.dwq),
            (self.wk, &g.dwk),
            (self.wv, &g.dwv),
            (self.wo, &g.dwo),
            (self.bo, &g.dbo),
        ] {
            for (a, b) in grad_slice(p, grads, id).iter_mut().zip(src.iter()) {
                *a += b;
            }
        }
    }
}
