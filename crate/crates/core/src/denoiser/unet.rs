use crate::control::transfer_appearance;
use crate::error::{Error, Result};
use crate::nn::layers::{
    attention_core_backward, AttnCache, ConvCache, LinearCache, NormCache,
};
use crate::nn::ops::{self, silu, silu_backward};
use crate::nn::params::grad_slice;
use crate::nn::{attention_core, AttnLayer, AttnWeights, Conv2d, GroupNorm, Linear, ParamId, ParamStore};
use crate::rng;
use crate::tensor::Tensor;

use super::{
    BlockSpec, DenoiserConfig, LayerId, OverrideSet, Side, Sublayer, TapKind, TapRecord, TapRequest,
};

/// Multi-head self-attention over tokens `h: [n, c]`.
///
/// Returns the projected output `[n, c]` and the maps `[heads, n, n]` that
/// were used. An `override_attn` replaces the computed maps for every head.
pub fn self_attention(
    h: &Tensor,
    weights: &AttnWeights<'_>,
    heads: usize,
    override_attn: Option<&Tensor>,
) -> Result<(Tensor, Tensor)> {
    let (n, c) = (h.rows(), h.cols());
    if weights.wq.len() != c * c || heads == 0 || c % heads != 0 {
        return Err(Error::contract(format!(
            "self_attention: {heads} heads / weights incompatible with {c} channels"
        )));
    }
    if let Some(a) = override_attn {
        a.ensure_shape(&[heads, n, n], "attention override")?;
    }
    let out = attention_core(h.data(), n, c, heads, weights, override_attn.map(|a| a.data()), false);
    Ok((Tensor::new(&[n, c], out.out)?, Tensor::new(&[heads, n, n], out.attn)?))
}

#[derive(Clone, Debug)]
struct Block {
    spec: BlockSpec,
    norm1: GroupNorm,
    conv1: Conv2d,
    emb: Linear,
    norm2: GroupNorm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
    attn: Option<AttnLayer>,
    /// Resample after this block: pool on the way down, upsample on the way up.
    resample: bool,
}

#[derive(Clone, Debug)]
struct Net {
    time1: Linear,
    time2: Linear,
    class_emb: ParamId,
    conv_in: Conv2d,
    blocks: Vec<Block>,
    norm_out: GroupNorm,
    conv_out: Conv2d,
    emb_dim: usize,
}

/// The noise predictor: configuration, parameters and layer wiring.
#[derive(Clone, Debug)]
pub struct DenoiserModel {
    cfg: DenoiserConfig,
    params: ParamStore,
    net: Net,
}

#[derive(Debug)]
struct BlockCache {
    n1_cache: NormCache,
    n1: Vec<f32>,
    conv1_cache: ConvCache,
    emb_cache: LinearCache,
    n2_cache: NormCache,
    n2: Vec<f32>,
    conv2_cache: ConvCache,
    skip_cache: Option<ConvCache>,
    attn: Option<(NormCache, AttnCache)>,
    /// Channels of the incoming (non-skip) input, for splitting concat grads.
    cx: usize,
}

/// Activations retained by a training forward pass.
#[derive(Debug)]
pub struct TrainCache {
    cond: usize,
    time1_cache: LinearCache,
    h1: Vec<f32>,
    time2_cache: LinearCache,
    e: Vec<f32>,
    conv_in_cache: ConvCache,
    blocks: Vec<BlockCache>,
    norm_out_cache: NormCache,
    norm_out: Vec<f32>,
    conv_out_cache: ConvCache,
}

struct Taps<'a> {
    wanted: &'a [TapRequest],
    records: Vec<TapRecord>,
}

impl Taps<'_> {
    fn want(&self, layer: LayerId, kind: TapKind) -> bool {
        self.wanted.iter().any(|r| r.layer == layer && r.kind == kind)
    }

    fn push(&mut self, layer: LayerId, kind: TapKind, tensor: Tensor, overridden: bool) {
        self.records.push(TapRecord {
            layer,
            kind,
            tensor,
            overridden,
        });
    }
}

impl DenoiserModel {
    /// Builds the network and initialises every parameter from `seed`.
    pub fn new(cfg: DenoiserConfig, seed: u64) -> Result<Self> {
        let mut model = Self::uninit(cfg)?;
        let mut rng = rng::stream(seed);
        let net = model.net.clone();
        let p = &mut model.params;
        net.time1.init(p, &mut rng);
        net.time2.init(p, &mut rng);
        p.fill_uniform(net.class_emb, 1.0, &mut rng);
        net.conv_in.init(p, &mut rng);
        for b in &net.blocks {
            b.norm1.init(p);
            b.conv1.init(p, &mut rng);
            b.emb.init(p, &mut rng);
            b.norm2.init(p);
            b.conv2.init(p, &mut rng);
            if let Some(s) = &b.skip {
                s.init(p, &mut rng);
            }
            if let Some(a) = &b.attn {
                a.init(p, &mut rng);
            }
        }
        net.norm_out.init(p);
        net.conv_out.init(p, &mut rng);
        Ok(model)
    }

    /// Builds the network with all parameters zeroed (used when loading).
    pub fn uninit(cfg: DenoiserConfig) -> Result<Self> {
        cfg.validate()?;
        let mut p = ParamStore::new();
        let emb_dim = cfg.time_embed_dim;
        let time1 = Linear::new(&mut p, "time.0", cfg.time_embed_dim, emb_dim, true);
        let time2 = Linear::new(&mut p, "time.1", emb_dim, emb_dim, true);
        let class_emb = p.register("class_emb", &[cfg.num_classes, emb_dim]);
        let conv_in = Conv2d::new(&mut p, "conv_in", cfg.channels, cfg.base_width, 3);
        let specs = cfg.block_specs();
        let levels = cfg.resolutions.len();
        let mut blocks = Vec::with_capacity(specs.len());
        for (i, spec) in specs.iter().enumerate() {
            let name = format!(
                "{}.{}",
                match spec.side {
                    Side::Encoder => "encoder",
                    Side::Bottleneck => "bottleneck",
                    Side::Decoder => "decoder",
                },
                spec.index
            );
            let next_level = specs.get(i + 1).map(|n| n.level);
            let resample = match spec.side {
                Side::Encoder => spec.level + 1 < levels && next_level == Some(spec.level + 1),
                Side::Bottleneck => false,
                Side::Decoder => spec.level > 0 && next_level.is_some_and(|l| l + 1 == spec.level),
            };
            let norm1 = GroupNorm::new(&mut p, &format!("{name}.norm1"), spec.cin, cfg.groups);
            let conv1 = Conv2d::new(&mut p, &format!("{name}.conv1"), spec.cin, spec.cout, 3);
            let emb = Linear::new(&mut p, &format!("{name}.emb"), emb_dim, spec.cout, true);
            let norm2 = GroupNorm::new(&mut p, &format!("{name}.norm2"), spec.cout, cfg.groups);
            let conv2 = Conv2d::new(&mut p, &format!("{name}.conv2"), spec.cout, spec.cout, 3);
            let skip = (spec.cin != spec.cout)
                .then(|| Conv2d::new(&mut p, &format!("{name}.skip"), spec.cin, spec.cout, 1));
            let attn = spec.attn.then(|| {
                AttnLayer::new(&mut p, &format!("{name}.attn"), spec.cout, cfg.heads, cfg.groups)
            });
            blocks.push(Block {
                spec: *spec,
                norm1,
                conv1,
                emb,
                norm2,
                conv2,
                skip,
                attn,
                resample,
            });
        }
        let norm_out = GroupNorm::new(&mut p, "norm_out", cfg.base_width * cfg.channel_mult[0], cfg.groups);
        let conv_out = Conv2d::new(&mut p, "conv_out", cfg.width(0), cfg.channels, 3);
        Ok(Self {
            cfg,
            params: p,
            net: Net {
                time1,
                time2,
                class_emb,
                conv_in,
                blocks,
                norm_out,
                conv_out,
                emb_dim,
            },
        })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Projection weights of the self-attention sublayer at `layer`.
    pub fn attn_weights(&self, layer: LayerId) -> Result<AttnWeights<'_>> {
        let block = self.block(layer)?;
        let attn = block
            .attn
            .as_ref()
            .ok_or_else(|| Error::contract(format!("layer `{layer}` has no self-attention")))?;
        Ok(attn.weights(&self.params))
    }

    fn block(&self, layer: LayerId) -> Result<&Block> {
        self.net
            .blocks
            .iter()
            .find(|b| b.spec.side == layer.side && b.spec.index == layer.block)
            .ok_or_else(|| Error::contract(format!("unknown layer `{layer}`")))
    }

    fn check_inputs(&self, x_t: &Tensor, cond: usize) -> Result<()> {
        let s = self.cfg.image_size;
        x_t.ensure_shape(&[self.cfg.channels, s, s], "denoiser input")?;
        if cond >= self.cfg.num_classes {
            return Err(Error::contract(format!(
                "label {cond} out of range (num_classes = {})",
                self.cfg.num_classes
            )));
        }
        Ok(())
    }

    /// Predicts the noise in `x_t`, applying `overrides` and recording `taps`.
    pub fn forward(
        &self,
        x_t: &Tensor,
        t: usize,
        cond: usize,
        taps: &[TapRequest],
        overrides: &OverrideSet,
    ) -> Result<(Tensor, Vec<TapRecord>)> {
        self.check_inputs(x_t, cond)?;
        for r in taps {
            self.cfg.tap_shape(r.layer, r.kind)?;
        }
        overrides.validate(&self.cfg)?;
        let (out, records, _) = self.run(x_t, t, cond, taps, overrides, false)?;
        Ok((out, records))
    }

    /// Plain noise prediction without taps or overrides.
    pub fn predict(&self, x_t: &Tensor, t: usize, cond: usize) -> Result<Tensor> {
        self.check_inputs(x_t, cond)?;
        Ok(self.run(x_t, t, cond, &[], &OverrideSet::default(), false)?.0)
    }

    /// Forward pass that keeps the activations needed by [`Self::backward`].
    pub fn forward_train(&self, x_t: &Tensor, t: usize, cond: usize) -> Result<(Tensor, TrainCache)> {
        self.check_inputs(x_t, cond)?;
        let (out, _, cache) = self.run(x_t, t, cond, &[], &OverrideSet::default(), true)?;
        Ok((out, cache.expect("train cache")))
    }

    fn run(
        &self,
        x_t: &Tensor,
        t: usize,
        cond: usize,
        taps: &[TapRequest],
        overrides: &OverrideSet,
        train: bool,
    ) -> Result<(Tensor, Vec<TapRecord>, Option<TrainCache>)> {
        let p = &self.params;
        let net = &self.net;
        let cfg = &self.cfg;
        let mut taps = Taps {
            wanted: taps,
            records: Vec::new(),
        };

        let temb = ops::time_embedding(t, cfg.time_embed_dim)?;
        let (h1, time1_cache) = net.time1.forward(p, &temb, train);
        let a1 = silu(&h1);
        let (mut e, time2_cache) = net.time2.forward(p, &a1, train);
        let row = &p.get(net.class_emb)[cond * net.emb_dim..(cond + 1) * net.emb_dim];
        for (v, c) in e.iter_mut().zip(row) {
            *v += c;
        }
        let es = silu(&e);

        let size = cfg.image_size;
        let (mut x, conv_in_cache) = net.conv_in.forward(p, x_t.data(), size, size, train);
        let mut skips: Vec<Vec<f32>> = Vec::new();
        let mut caches = Vec::with_capacity(net.blocks.len());
        for block in &net.blocks {
            let spec = block.spec;
            let cx = x.len() / (spec.size * spec.size);
            if spec.side == Side::Decoder {
                let skip = skips.pop().expect("skip for every decoder block");
                x.extend_from_slice(&skip);
            }
            let (y, bc) = self.block_forward(block, &x, &es, &mut taps, overrides, train)?;
            if let Some(mut bc) = bc {
                bc.cx = cx;
                caches.push(bc);
            }
            x = y;
            if spec.side == Side::Encoder {
                skips.push(x.clone());
            }
            if block.resample {
                x = match spec.side {
                    Side::Encoder => ops::avg_pool2(&x, spec.cout, spec.size, spec.size),
                    _ => ops::upsample2(&x, spec.cout, spec.size, spec.size),
                };
            }
        }
        let (n, norm_out_cache) = net.norm_out.forward(p, &x, train);
        let a = silu(&n);
        let (out, conv_out_cache) = net.conv_out.forward(p, &a, size, size, train);
        let out = Tensor::new(&[cfg.channels, size, size], out)?;
        let cache = if train {
            Some(TrainCache {
                cond,
                time1_cache: time1_cache.expect("train"),
                h1,
                time2_cache: time2_cache.expect("train"),
                e,
                conv_in_cache: conv_in_cache.expect("train"),
                blocks: caches,
                norm_out_cache: norm_out_cache.expect("train"),
                norm_out: n,
                conv_out_cache: conv_out_cache.expect("train"),
            })
        } else {
            None
        };
        Ok((out, taps.records, cache))
    }

    fn block_forward(
        &self,
        b: &Block,
        x: &[f32],
        es: &[f32],
        taps: &mut Taps<'_>,
        overrides: &OverrideSet,
        train: bool,
    ) -> Result<(Vec<f32>, Option<BlockCache>)> {
        let p = &self.params;
        let spec = b.spec;
        let (hh, ww) = (spec.size, spec.size);
        let hw = hh * ww;
        let (n1, n1_cache) = b.norm1.forward(p, x, train);
        let a1 = silu(&n1);
        let (mut c1, conv1_cache) = b.conv1.forward(p, &a1, hh, ww, train);
        let (proj, emb_cache) = b.emb.forward(p, es, train);
        for (co, chunk) in c1.chunks_mut(hw).enumerate() {
            let v = proj[co];
            chunk.iter_mut().for_each(|x| *x += v);
        }
        let (n2, n2_cache) = b.norm2.forward(p, &c1, train);
        let a2 = silu(&n2);
        let (mut f, conv2_cache) = b.conv2.forward(p, &a2, hh, ww, train);
        let skip_cache = match &b.skip {
            Some(s) => {
                let (sx, sc) = s.forward(p, x, hh, ww, train);
                for (a, v) in f.iter_mut().zip(&sx) {
                    *a += v;
                }
                sc
            }
            None => {
                for (a, v) in f.iter_mut().zip(x) {
                    *a += v;
                }
                None
            }
        };

        let conv_id = LayerId::new(spec.side, spec.index, Sublayer::Conv);
        let conv_override = overrides.conv.get(&conv_id);
        if let Some(o) = conv_override {
            f = o.transpose().into_data();
        }
        if taps.want(conv_id, TapKind::ConvFeature) {
            let t = Tensor::new(&[spec.cout, hw], f.clone())?.transpose();
            taps.push(conv_id, TapKind::ConvFeature, t, conv_override.is_some());
        }

        let mut attn_cache = None;
        if let Some(attn) = &b.attn {
            let id = LayerId::new(spec.side, spec.index, Sublayer::SelfAttn);
            let c = spec.cout;
            let (n, ncache) = attn.norm.forward(p, &f, train);
            let mut h = Tensor::new(&[c, hw], n)?.transpose();
            if taps.want(id, TapKind::PreAttnFeature) {
                let touched = overrides.appearance.contains_key(&id);
                taps.push(id, TapKind::PreAttnFeature, h.clone(), touched);
            }
            if let Some(h_a) = overrides.appearance.get(&id) {
                let w = attn.weights(p);
                let (h2, _) =
                    transfer_appearance(&h, h_a, w.wq, w.wk, attn.heads, overrides.appearance_options)?;
                h = h2;
            }
            let attn_override = overrides.attn.get(&id);
            let core = attention_core(
                h.data(),
                hw,
                c,
                attn.heads,
                &attn.weights(p),
                attn_override.map(|a| a.data()),
                train,
            );
            if taps.want(id, TapKind::AttnMap) {
                let touched = attn_override.is_some() || overrides.appearance.contains_key(&id);
                taps.push(id, TapKind::AttnMap, Tensor::new(&[attn.heads, hw, hw], core.attn)?, touched);
            }
            // residual: f += out^T
            for tok in 0..hw {
                for ch in 0..c {
                    f[ch * hw + tok] += core.out[tok * c + ch];
                }
            }
            if train {
                attn_cache = Some((ncache.expect("train"), core.cache.expect("train")));
            }
        }

        let cache = if train {
            Some(BlockCache {
                n1_cache: n1_cache.expect("train"),
                n1,
                conv1_cache: conv1_cache.expect("train"),
                emb_cache: emb_cache.expect("train"),
                n2_cache: n2_cache.expect("train"),
                n2,
                conv2_cache: conv2_cache.expect("train"),
                skip_cache,
                attn: attn_cache,
                cx: 0,
            })
        } else {
            None
        };
        Ok((f, cache))
    }

    /// Accumulates parameter gradients of `sum(d_out * out)` into `grads`.
    pub fn backward(&self, cache: &TrainCache, d_out: &Tensor, grads: &mut [f32]) {
        assert_eq!(grads.len(), self.params.len(), "gradient buffer layout mismatch");
        let p = &self.params;
        let net = &self.net;
        let d = net.conv_out.backward(p, grads, &cache.conv_out_cache, d_out.data());
        let d = silu_backward(&cache.norm_out, &d);
        let mut d = net.norm_out.backward(p, grads, &cache.norm_out_cache, &d);

        let mut d_es = vec![0.0f32; net.emb_dim];
        let n_enc = net.blocks.iter().filter(|b| b.spec.side == Side::Encoder).count();
        let mut d_skips: Vec<Option<Vec<f32>>> = vec![None; n_enc];

        for (idx, block) in net.blocks.iter().enumerate().rev() {
            let spec = block.spec;
            let bc = &cache.blocks[idx];
            let hw = spec.size * spec.size;
            match spec.side {
                Side::Decoder => {
                    if block.resample {
                        d = ops::upsample2_backward(&d, spec.cout, spec.size, spec.size);
                    }
                    let dcat = self.block_backward(block, bc, &d, &mut d_es, grads);
                    let split = bc.cx * hw;
                    // decoder block k consumes encoder skip n_enc - 1 - k
                    let enc = n_enc - 1 - spec.index;
                    d_skips[enc] = Some(dcat[split..].to_vec());
                    d = dcat[..split].to_vec();
                }
                Side::Bottleneck => {
                    d = self.block_backward(block, bc, &d, &mut d_es, grads);
                }
                Side::Encoder => {
                    if block.resample {
                        d = ops::avg_pool2_backward(&d, spec.cout, spec.size, spec.size);
                    }
                    if let Some(ds) = d_skips[spec.index].take() {
                        for (a, b) in d.iter_mut().zip(&ds) {
                            *a += b;
                        }
                    }
                    d = self.block_backward(block, bc, &d, &mut d_es, grads);
                }
            }
        }
        net.conv_in.backward(p, grads, &cache.conv_in_cache, &d);

        let de = silu_backward(&cache.e, &d_es);
        {
            let g = grad_slice(p, grads, net.class_emb);
            let row = &mut g[cache.cond * net.emb_dim..(cache.cond + 1) * net.emb_dim];
            for (a, b) in row.iter_mut().zip(&de) {
                *a += b;
            }
        }
        let d = net.time2.backward(p, grads, &cache.time2_cache, &de);
        let d = silu_backward(&cache.h1, &d);
        net.time1.backward(p, grads, &cache.time1_cache, &d);
    }

    fn block_backward(
        &self,
        b: &Block,
        bc: &BlockCache,
        dy: &[f32],
        d_es: &mut [f32],
        grads: &mut [f32],
    ) -> Vec<f32> {
        let p = &self.params;
        let spec = b.spec;
        let hw = spec.size * spec.size;
        let mut df = dy.to_vec();
        if let (Some(attn), Some((ncache, acache))) = (&b.attn, &bc.attn) {
            let c = spec.cout;
            let mut dout = vec![0.0f32; hw * c];
            for tok in 0..hw {
                for ch in 0..c {
                    dout[tok * c + ch] = dy[ch * hw + tok];
                }
            }
            let g = attention_core_backward(acache, hw, c, attn.heads, &attn.weights(p), &dout);
            attn.accumulate(p, grads, &g);
            let mut dn = vec![0.0f32; c * hw];
            for tok in 0..hw {
                for ch in 0..c {
                    dn[ch * hw + tok] = g.dh[tok * c + ch];
                }
            }
            let dnorm = attn.norm.backward(p, grads, ncache, &dn);
            for (a, v) in df.iter_mut().zip(&dnorm) {
                *a += v;
            }
        }
        let da2 = b.conv2.backward(p, grads, &bc.conv2_cache, &df);
        let dn2 = silu_backward(&bc.n2, &da2);
        let dc1 = b.norm2.backward(p, grads, &bc.n2_cache, &dn2);
        let dproj: Vec<f32> = dc1.chunks(hw).map(|c| c.iter().sum()).collect();
        let des = b.emb.backward(p, grads, &bc.emb_cache, &dproj);
        for (a, v) in d_es.iter_mut().zip(&des) {
            *a += v;
        }
        let da1 = b.conv1.backward(p, grads, &bc.conv1_cache, &dc1);
        let dn1 = silu_backward(&bc.n1, &da1);
        let mut dx = b.norm1.backward(p, grads, &bc.n1_cache, &dn1);
        match (&b.skip, &bc.skip_cache) {
            (Some(s), Some(sc)) => {
                let ds = s.backward(p, grads, sc, &df);
                for (a, v) in dx.iter_mut().zip(&ds) {
                    *a += v;
                }
            }
            _ => {
                for (a, v) in dx.iter_mut().zip(&df) {
                    *a += v;
                }
            }
        }
        dx
    }
}
