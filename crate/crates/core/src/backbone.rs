//! Small U-Net noise predictor with text cross-attention and decoupled
//! image-prompt attention.
//!
//! The forward pass is split into stages so that two pathways can be run
//! block-synchronously: [`Backbone::begin`] covers the encoder and the
//! bottleneck, each [`Backbone::stage`] one decoder block, and
//! [`Backbone::head`] the output projection. Every stage boundary is a tap.

use rand::Rng;

use crate::adapters::adapter_kv;
use crate::error::{shape_err, Error, Result};
use crate::graph::{concat, Var};
use crate::nn::{conv, group_norm, init_conv, init_linear, init_norm, linear, Binder, ParamStore};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneConfig {
    pub image_size: usize,
    pub base_channels: usize,
    /// Channel multiplier per resolution level; level `l` runs at
    /// `image_size / 2^l`.
    pub channel_mults: Vec<usize>,
    /// Levels whose blocks carry cross-attention. The bottleneck always does.
    pub attention_levels: Vec<usize>,
    pub heads: usize,
    pub text_dim: usize,
    pub time_dim: usize,
    pub vocab_size: usize,
    pub norm_groups: usize,
    /// Prepend an all-zero key/value to the image keys so image attention
    /// can abstain at positions where the prompt is irrelevant.
    pub image_null_key: bool,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            base_channels: 32,
            channel_mults: vec![1, 2, 4],
            attention_levels: vec![1, 2],
            heads: 2,
            text_dim: 64,
            time_dim: 128,
            vocab_size: 10,
            norm_groups: 8,
            image_null_key: true,
        }
    }
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        let levels = self.channel_mults.len();
        let fail = |msg: String| Err(Error::Parameter(msg));
        if levels == 0 || self.base_channels == 0 || self.channel_mults.contains(&0) {
            return fail("backbone needs at least one level with nonzero channels".into());
        }
        if self.attention_levels.iter().any(|&l| l >= levels) {
            return fail(format!("attention level outside 0..{levels}"));
        }
        if self.image_size == 0 || !self.image_size.is_multiple_of(1 << (levels - 1)) {
            return fail(format!(
                "image size {} not divisible by 2^{}",
                self.image_size,
                levels - 1
            ));
        }
        if self.heads == 0 || (0..levels).any(|l| !self.channels(l).is_multiple_of(self.heads)) {
            return fail(format!("{} heads do not divide every channel count", self.heads));
        }
        if self.text_dim == 0 || self.time_dim == 0 || self.vocab_size == 0 {
            return fail("text, time and vocabulary sizes must be nonzero".into());
        }
        Ok(())
    }

    pub fn levels(&self) -> usize {
        self.channel_mults.len()
    }

    pub fn channels(&self, level: usize) -> usize {
        self.base_channels * self.channel_mults[level]
    }

    pub fn resolution(&self, level: usize) -> usize {
        self.image_size >> level
    }

    fn groups(&self, channels: usize) -> usize {
        gcd(self.norm_groups.max(1), channels)
    }

    fn has_attention(&self, level: usize) -> bool {
        self.attention_levels.contains(&level)
    }

    /// Ids of the cross-attention layers in execution order.
    pub fn attention_layers(&self) -> Vec<String> {
        let levels = self.levels();
        let mut ids: Vec<String> = (0..levels)
            .filter(|&l| self.has_attention(l))
            .map(|l| format!("down.{l}"))
            .collect();
        ids.push("mid".into());
        ids.extend(
            (0..levels)
                .rev()
                .filter(|&l| self.has_attention(l))
                .map(|l| format!("up.{l}")),
        );
        ids
    }

    /// Blendable blocks: the bottleneck followed by every decoder block.
    pub fn taps(&self) -> Vec<TapSpec> {
        let last = self.levels() - 1;
        let mut taps = vec![TapSpec {
            block: "mid".into(),
            channels: self.channels(last),
            resolution: self.resolution(last),
        }];
        taps.extend((0..self.levels()).rev().map(|l| TapSpec {
            block: format!("up.{l}"),
            channels: self.channels(l),
            resolution: self.resolution(l),
        }));
        taps
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TapSpec {
    pub block: String,
    pub channels: usize,
    pub resolution: usize,
}

/// Image-prompt tokens for one adapter plus its injection weight.
#[derive(Clone, Copy, Debug)]
pub struct ImagePrompt<'g, 'a, S: Real> {
    /// `[B, n_tokens, token_dim]`
    pub tokens: Var<'g, S>,
    /// Parameter-name prefix of the adapter (`iea` or `tca`).
    pub adapter: &'a str,
    pub alpha: f64,
}

#[derive(Clone, Copy, Debug)]
pub struct Conditioning<'g, 'a, S: Real> {
    /// `[B, L, text_dim]`
    pub text: Var<'g, S>,
    pub image: Option<ImagePrompt<'g, 'a, S>>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Taps {
    pub features: bool,
    pub attention: bool,
}

impl Taps {
    pub const NONE: Taps = Taps {
        features: false,
        attention: false,
    };
    pub const ALL: Taps = Taps {
        features: true,
        attention: true,
    };
}

/// Attention probabilities of one layer, `[B, heads, H·W, keys]`.
#[derive(Clone, Debug)]
pub struct AttnRecord {
    pub layer: String,
    pub height: usize,
    pub width: usize,
    pub text: Tensor<f32>,
    /// Includes the null key in column 0 when it is enabled.
    pub image: Option<Tensor<f32>>,
    pub null_key: bool,
}

#[derive(Clone, Debug)]
pub struct BlockFeature<'g, S: Real> {
    pub block: String,
    pub resolution: usize,
    pub value: Var<'g, S>,
}

pub struct ForwardOutput<'g, S: Real> {
    pub eps: Var<'g, S>,
    pub features: Vec<BlockFeature<'g, S>>,
    pub attention: Vec<AttnRecord>,
}

#[derive(Clone, Copy, Debug)]
pub struct KeyValue<'g, S: Real> {
    /// `[B, L, inner]`
    pub keys: Var<'g, S>,
    /// `[B, L, inner]`
    pub values: Var<'g, S>,
}

pub struct MergedAttention<'g, S: Real> {
    /// `[B, N, inner]`
    pub output: Var<'g, S>,
    /// `[B·heads, N, L_text]`
    pub text_probs: Var<'g, S>,
    /// `[B·heads, N, L_image]`
    pub image_probs: Option<Var<'g, S>>,
}

fn split_heads<'g, S: Real>(x: &Var<'g, S>, heads: usize) -> Result<Var<'g, S>> {
    let s = x.shape();
    let (b, l, inner) = (s[0], s[1], s[2]);
    x.reshape([b, l, heads, inner / heads])?
        .permute(&[0, 2, 1, 3])?
        .reshape([b * heads, l, inner / heads])
}

fn merge_heads<'g, S: Real>(x: &Var<'g, S>, batch: usize, heads: usize) -> Result<Var<'g, S>> {
    let s = x.shape();
    let (n, dh) = (s[1], s[2]);
    x.reshape([batch, heads, n, dh])?
        .permute(&[0, 2, 1, 3])?
        .reshape([batch, n, heads * dh])
}

fn attend<'g, S: Real>(
    q: &Var<'g, S>,
    kv: &KeyValue<'g, S>,
    heads: usize,
) -> Result<(Var<'g, S>, Var<'g, S>)> {
    let qs = q.shape();
    let ks = kv.keys.shape();
    if qs.len() != 3 || ks.len() != 3 || ks[0] != qs[0] || ks[2] != qs[2] || kv.values.shape() != ks
    {
        return Err(shape_err("attention", &qs, &ks));
    }
    if !qs[2].is_multiple_of(heads) {
        return Err(Error::Structural(format!("{heads} heads for width {}", qs[2])));
    }
    let dh = qs[2] / heads;
    let qh = split_heads(q, heads)?;
    let kh = split_heads(&kv.keys, heads)?;
    let vh = split_heads(&kv.values, heads)?;
    let probs = qh
        .matmul_t(&kh, false, true)?
        .scale(1.0 / (dh as f64).sqrt())
        .softmax();
    let out = merge_heads(&probs.matmul(&vh)?, qs[0], heads)?;
    Ok((out, probs))
}

/// `Attn(q, text) + α·Attn(q, image)`; the image term is skipped entirely
/// when `image` is `None` or `α == 0`.
pub fn merged_attention<'g, S: Real>(
    q: &Var<'g, S>,
    text: &KeyValue<'g, S>,
    image: Option<&KeyValue<'g, S>>,
    alpha: f64,
    heads: usize,
) -> Result<MergedAttention<'g, S>> {
    let (text_out, text_probs) = attend(q, text, heads)?;
    match image {
        Some(kv) if alpha != 0.0 => {
            let (img_out, img_probs) = attend(q, kv, heads)?;
            Ok(MergedAttention {
                output: text_out.add(&img_out.scale(alpha))?,
                text_probs,
                image_probs: Some(img_probs),
            })
        }
        _ => Ok(MergedAttention {
            output: text_out,
            text_probs,
            image_probs: None,
        }),
    }
}

/// Per-pathway state carried between stages.
pub struct PathState<'g, 'a, S: Real> {
    batch: usize,
    temb_act: Var<'g, S>,
    skips: Vec<Var<'g, S>>,
    cond: Conditioning<'g, 'a, S>,
    taps: Taps,
    pub attention: Vec<AttnRecord>,
}

impl<'g, 'a, S: Real> PathState<'g, 'a, S> {
    pub fn batch(&self) -> usize {
        self.batch
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Backbone {
    config: BackboneConfig,
}

impl Backbone {
    pub fn new(config: BackboneConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { config })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn num_taps(&self) -> usize {
        self.config.levels() + 1
    }

    /// Fresh `base.*` weights.
    pub fn init_params<S: Real, R: Rng>(&self, rng: &mut R) -> ParamStore<S> {
        let c = &self.config;
        let mut p = ParamStore::new();
        p.insert(
            "base.tok_emb",
            Tensor::from_fn([c.vocab_size, c.text_dim], |_| S::lit(rng.gen_range(-1.0..1.0))),
        );
        init_linear(&mut p, rng, "base.time.l1", c.base_channels, c.time_dim, true);
        init_linear(&mut p, rng, "base.time.l2", c.time_dim, c.time_dim, true);
        init_conv(&mut p, rng, "base.conv_in", 3, c.channels(0), 3);
        let mut cin = c.channels(0);
        for l in 0..c.levels() {
            let cout = c.channels(l);
            self.init_res(&mut p, rng, &format!("base.down.{l}.res"), cin, cout);
            if c.has_attention(l) {
                self.init_attn(&mut p, rng, &format!("base.down.{l}.attn"), cout);
            }
            cin = cout;
        }
        self.init_res(&mut p, rng, "base.mid.res", cin, cin);
        self.init_attn(&mut p, rng, "base.mid.attn", cin);
        for l in (0..c.levels()).rev() {
            let cout = c.channels(l);
            self.init_res(&mut p, rng, &format!("base.up.{l}.res"), cin + cout, cout);
            if c.has_attention(l) {
                self.init_attn(&mut p, rng, &format!("base.up.{l}.attn"), cout);
            }
            cin = cout;
        }
        init_norm(&mut p, "base.out.norm", cin);
        init_conv(&mut p, rng, "base.out.conv", cin, 3, 3);
        p
    }

    fn init_res<S: Real, R: Rng>(
        &self,
        p: &mut ParamStore<S>,
        rng: &mut R,
        name: &str,
        cin: usize,
        cout: usize,
    ) {
        init_norm(p, &format!("{name}.norm1"), cin);
        init_conv(p, rng, &format!("{name}.conv1"), cin, cout, 3);
        init_linear(p, rng, &format!("{name}.temb"), self.config.time_dim, cout, true);
        init_norm(p, &format!("{name}.norm2"), cout);
        init_conv(p, rng, &format!("{name}.conv2"), cout, cout, 3);
        if cin != cout {
            init_conv(p, rng, &format!("{name}.skip"), cin, cout, 1);
        }
    }

    fn init_attn<S: Real, R: Rng>(&self, p: &mut ParamStore<S>, rng: &mut R, name: &str, ch: usize) {
        let td = self.config.text_dim;
        init_norm(p, &format!("{name}.norm"), ch);
        init_linear(p, rng, &format!("{name}.q"), ch, ch, false);
        init_linear(p, rng, &format!("{name}.k"), td, ch, false);
        init_linear(p, rng, &format!("{name}.v"), td, ch, false);
        init_linear(p, rng, &format!("{name}.out"), ch, ch, true);
    }

    /// Token ids `[B][L]` to embeddings `[B, L, text_dim]`.
    pub fn embed_text<'g, S: Real>(
        &self,
        b: &Binder<'g, S>,
        tokens: &[Vec<usize>],
    ) -> Result<Var<'g, S>> {
        let len = tokens.first().map_or(0, Vec::len);
        if len == 0 || tokens.iter().any(|t| t.len() != len) {
            return Err(Error::Structural("captions must be nonempty and of equal length".into()));
        }
        let flat: Vec<usize> = tokens.iter().flatten().copied().collect();
        b.param("base.tok_emb")?
            .embedding(&flat)?
            .reshape([tokens.len(), len, self.config.text_dim])
    }

    fn time_embedding<'g, S: Real>(&self, b: &Binder<'g, S>, t: &[usize]) -> Result<Var<'g, S>> {
        let dim = self.config.base_channels;
        let half = dim / 2;
        let sin = Tensor::from_fn([t.len(), dim], |i| {
            let (row, j) = (i / dim, i % dim);
            let k = j % half.max(1);
            let freq = (-(10000f64.ln()) * k as f64 / half.max(1) as f64).exp();
            let arg = t[row] as f64 * freq;
            S::lit(if j < half { arg.sin() } else { arg.cos() })
        });
        let h = linear(b, &b.graph().constant(sin), "base.time.l1")?.silu();
        linear(b, &h, "base.time.l2")
    }

    fn res_block<'g, S: Real>(
        &self,
        b: &Binder<'g, S>,
        x: &Var<'g, S>,
        state: &PathState<'g, '_, S>,
        name: &str,
    ) -> Result<Var<'g, S>> {
        let (bsz, cin, _, _) = x.value().dims4()?;
        let h = group_norm(b, x, &format!("{name}.norm1"), self.config.groups(cin))?.silu();
        let h = conv(b, &h, &format!("{name}.conv1"))?;
        let cout = h.shape()[1];
        let tproj = linear(b, &state.temb_act, &format!("{name}.temb"))?.reshape([bsz, cout, 1, 1])?;
        let h = h.add(&tproj)?;
        let h = group_norm(b, &h, &format!("{name}.norm2"), self.config.groups(cout))?.silu();
        let h = conv(b, &h, &format!("{name}.conv2"))?;
        let skip = if cin != cout {
            conv(b, x, &format!("{name}.skip"))?
        } else {
            *x
        };
        h.add(&skip)
    }

    fn attention<'g, S: Real>(
        &self,
        b: &Binder<'g, S>,
        x: &Var<'g, S>,
        state: &mut PathState<'g, '_, S>,
        layer: &str,
    ) -> Result<Var<'g, S>> {
        let (bsz, ch, h, w) = x.value().dims4()?;
        let name = format!("base.{layer}.attn");
        let n = h * w;
        let hn = group_norm(b, x, &format!("{name}.norm"), self.config.groups(ch))?;
        let tokens = hn.permute(&[0, 2, 3, 1])?.reshape([bsz, n, ch])?;
        let q = linear(b, &tokens, &format!("{name}.q"))?;
        let text = state.cond.text;
        if text.shape()[0] != bsz {
            return Err(shape_err("text batch", &text.shape(), &[bsz]));
        }
        let text_kv = KeyValue {
            keys: linear(b, &text, &format!("{name}.k"))?,
            values: linear(b, &text, &format!("{name}.v"))?,
        };
        let (image_kv, alpha) = match state.cond.image {
            Some(p) if p.alpha != 0.0 => {
                let mut kv = adapter_kv(b, &p.tokens, p.adapter, layer)?;
                if kv.keys.shape()[0] != bsz {
                    return Err(shape_err("image token batch", &kv.keys.shape(), &[bsz]));
                }
                if self.config.image_null_key {
                    let null = b.graph().constant(Tensor::zeros([bsz, 1, ch]));
                    kv = KeyValue {
                        keys: concat(&[null, kv.keys], 1)?,
                        values: concat(&[null, kv.values], 1)?,
                    };
                }
                (Some(kv), p.alpha)
            }
            _ => (None, 0.0),
        };
        let att = merged_attention(&q, &text_kv, image_kv.as_ref(), alpha, self.config.heads)?;
        if state.taps.attention {
            let heads = self.config.heads;
            let as_record = |p: &Var<'g, S>| -> Result<Tensor<f32>> {
                let v = p.value();
                let keys = v.shape()[2];
                v.cast::<f32>().reshape([bsz, heads, n, keys])
            };
            state.attention.push(AttnRecord {
                layer: layer.to_string(),
                height: h,
                width: w,
                text: as_record(&att.text_probs)?,
                image: att.image_probs.as_ref().map(as_record).transpose()?,
                null_key: self.config.image_null_key,
            });
        }
        let out = linear(b, &att.output, &format!("{name}.out"))?
            .reshape([bsz, h, w, ch])?
            .permute(&[0, 3, 1, 2])?;
        x.add(&out)
    }

    /// Encoder and bottleneck; returns the state and the bottleneck tap.
    pub fn begin<'g, 'a, S: Real>(
        &self,
        b: &Binder<'g, S>,
        x_t: &Var<'g, S>,
        t: &[usize],
        cond: Conditioning<'g, 'a, S>,
        taps: Taps,
    ) -> Result<(PathState<'g, 'a, S>, Var<'g, S>)> {
        let c = &self.config;
        let (bsz, ch, h, w) = x_t.value().dims4()?;
        if ch != 3 || h != c.image_size || w != c.image_size {
            return Err(shape_err(
                "backbone input",
                &x_t.shape(),
                &[bsz, 3, c.image_size, c.image_size],
            ));
        }
        if t.len() != bsz {
            return Err(Error::Structural(format!("{} timesteps for batch {bsz}", t.len())));
        }
        let temb_act = self.time_embedding(b, t)?.silu();
        let mut state = PathState {
            batch: bsz,
            temb_act,
            skips: Vec::with_capacity(c.levels()),
            cond,
            taps,
            attention: Vec::new(),
        };
        let mut h = conv(b, x_t, "base.conv_in")?;
        for l in 0..c.levels() {
            h = self.res_block(b, &h, &state, &format!("base.down.{l}.res"))?;
            if c.has_attention(l) {
                h = self.attention(b, &h, &mut state, &format!("down.{l}"))?;
            }
            state.skips.push(h);
            if l + 1 < c.levels() {
                h = h.avg_pool2()?;
            }
        }
        h = self.res_block(b, &h, &state, "base.mid.res")?;
        h = self.attention(b, &h, &mut state, "mid")?;
        Ok((state, h))
    }

    /// Decoder stage `k` (1-based; stage `k` produces tap `k`).
    pub fn stage<'g, S: Real>(
        &self,
        b: &Binder<'g, S>,
        state: &mut PathState<'g, '_, S>,
        k: usize,
        input: &Var<'g, S>,
    ) -> Result<Var<'g, S>> {
        let levels = self.config.levels();
        if k == 0 || k > levels {
            return Err(Error::Index(format!("decoder stage {k} outside 1..={levels}")));
        }
        let l = levels - k;
        let h = if k > 1 { input.upsample2()? } else { *input };
        let h = concat(&[h, state.skips[l]], 1)?;
        let h = self.res_block(b, &h, state, &format!("base.up.{l}.res"))?;
        if self.config.has_attention(l) {
            self.attention(b, &h, state, &format!("up.{l}"))
        } else {
            Ok(h)
        }
    }

    pub fn head<'g, S: Real>(&self, b: &Binder<'g, S>, h: &Var<'g, S>) -> Result<Var<'g, S>> {
        let ch = h.shape()[1];
        let h = group_norm(b, h, "base.out.norm", self.config.groups(ch))?.silu();
        conv(b, &h, "base.out.conv")
    }

    /// Full single-pathway forward.
    pub fn forward<'g, 'a, S: Real>(
        &self,
        b: &Binder<'g, S>,
        x_t: &Var<'g, S>,
        t: &[usize],
        cond: Conditioning<'g, 'a, S>,
        taps: Taps,
    ) -> Result<ForwardOutput<'g, S>> {
        let specs = self.config.taps();
        let (mut state, mut h) = self.begin(b, x_t, t, cond, taps)?;
        let mut features = Vec::new();
        let mut record = |k: usize, v: Var<'g, S>| {
            if taps.features {
                features.push(BlockFeature {
                    block: specs[k].block.clone(),
                    resolution: specs[k].resolution,
                    value: v,
                });
            }
        };
        record(0, h);
        for k in 1..self.num_taps() {
            h = self.stage(b, &mut state, k, &h)?;
            record(k, h);
        }
        let eps = self.head(b, &h)?;
        Ok(ForwardOutput {
            eps,
            features,
            attention: state.attention,
        })
    }
}
