use rand::Rng;

use super::blocks::GatedBlock;
use super::config::{Fusion, ModelConfig};
use crate::attention::{Cdffa, ChannelAttention, CrossAttention};
use crate::autograd::{ConvSpec, Graph, Var};
use crate::error::Result;
use crate::nn::{Conv2d, Init};
use crate::params::ParamStore;

/// How the bottleneck merges encoder, low-frequency and guidance features.
#[derive(Clone, Debug)]
pub enum Refiner {
    /// No guidance. Holds a 1×1 merge when a low-frequency stream exists.
    Plain(Option<Conv2d>),
    Concat(Conv2d),
    Cdffa(Cdffa),
}

#[derive(Clone, Debug)]
pub struct DecoderStage {
    pub merge: Conv2d,
    pub cross: Option<CrossAttention>,
    pub channel: ChannelAttention,
    pub refine: GatedBlock,
    pub up: Conv2d,
}

/// One Retinex branch: encoder, guided bottleneck, decoder and a
/// zero-initialized residual head.
#[derive(Clone, Debug)]
pub struct Branch {
    pub head: Conv2d,
    pub down: Vec<Conv2d>,
    pub lf_proj: Vec<Conv2d>,
    pub guide_embed: Option<Conv2d>,
    pub refiner: Refiner,
    pub bottleneck: GatedBlock,
    pub decoder: Vec<DecoderStage>,
    pub tail: Conv2d,
    pub stages: usize,
}

/// Feature maps handed back for diagnostics.
pub struct BranchTrace {
    pub residual: Var,
    pub encoder: Vec<Var>,
    pub fusion: Option<crate::attention::FusionVars>,
}

pub(crate) fn attention_heads(width: usize) -> usize {
    (width / 16).max(1)
}

impl Branch {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        cfg: &ModelConfig,
        in_channels: usize,
        guide_channels: usize,
        context_width: Option<usize>,
    ) -> Result<Self> {
        let k = cfg.stages;
        let w = |i: usize| cfg.width_at(i);
        let freq = cfg.variant.frequency_stream();
        let head = Conv2d::same(store, rng, &format!("{name}.head"), in_channels, w(0), 3);
        let down = (1..=k)
            .map(|i| {
                Conv2d::new(store, rng, &format!("{name}.down{i}"), w(i - 1), w(i), 3, ConvSpec::strided(2, 1), Init::He(1.0))
            })
            .collect();
        let lf_proj = if freq {
            (1..=k).map(|i| Conv2d::pointwise(store, rng, &format!("{name}.lf{i}"), w(i - 1), w(i))).collect()
        } else {
            Vec::new()
        };
        let ck = w(k);
        let fusion = cfg.effective_fusion();
        let guide_embed = fusion.map(|_| Conv2d::same(store, rng, &format!("{name}.guide"), guide_channels, ck, 3));
        let refiner = match fusion {
            None => Refiner::Plain(freq.then(|| Conv2d::pointwise(store, rng, &format!("{name}.merge_lf"), 2 * ck, ck))),
            Some(Fusion::Concat) => {
                let cin = ck * if freq { 3 } else { 2 };
                Refiner::Concat(Conv2d::same(store, rng, &format!("{name}.fuse"), cin, ck, 3))
            }
            Some(Fusion::Cdffa) => {
                Refiner::Cdffa(Cdffa::new(store, rng, &format!("{name}.cdffa"), ck, freq.then_some(ck), ck, ck))
            }
        };
        let bottleneck = GatedBlock::new(store, rng, &format!("{name}.bottleneck"), ck);
        let mut decoder = Vec::with_capacity(k);
        for i in (1..=k).rev() {
            let p = format!("{name}.dec{i}");
            let skip = if freq { 3 * w(i - 1) } else { w(i) };
            let cross = match context_width {
                Some(cw) => Some(CrossAttention::new(store, rng, &format!("{p}.cross"), w(i), cw, attention_heads(w(i)))?),
                None => None,
            };
            decoder.push(DecoderStage {
                merge: Conv2d::pointwise(store, rng, &format!("{p}.merge"), w(i) + skip, w(i)),
                cross,
                channel: ChannelAttention::new(store, rng, &format!("{p}.ca"), w(i), 4),
                refine: GatedBlock::new(store, rng, &format!("{p}.refine"), w(i)),
                up: Conv2d::pointwise(store, rng, &format!("{p}.up"), w(i), 4 * w(i - 1)),
            });
        }
        let tail = Conv2d::new(
            store,
            rng,
            &format!("{name}.tail"),
            w(0),
            in_channels,
            3,
            ConvSpec::same(3),
            Init::Zeros,
        );
        Ok(Self { head, down, lf_proj, guide_embed, refiner, bottleneck, decoder, tail, stages: k })
    }

    pub fn forward(&self, g: &mut Graph, x: Var, guide: Option<Var>, context: Option<Var>) -> Result<BranchTrace> {
        let freq = !self.lf_proj.is_empty();
        let e0 = self.head.forward(g, x)?;
        let e0 = g.gelu(e0);
        let mut enc = vec![e0];
        let mut lf = e0;
        let mut skips = Vec::with_capacity(self.stages);
        for i in 0..self.stages {
            let e = self.down[i].forward(g, enc[i])?;
            let e = g.gelu(e);
            enc.push(e);
            if freq {
                let c = g.shape(lf)[1];
                let bands = g.dwt(lf)?;
                let ll = g.slice_c(bands, 0, c)?;
                let hf = g.slice_c(bands, c, 3 * c)?;
                let l = self.lf_proj[i].forward(g, ll)?;
                lf = g.gelu(l);
                skips.push(hf);
            } else {
                skips.push(e);
            }
        }
        let deep = enc[self.stages];
        let lf_deep = freq.then_some(lf);
        let guide_feat = match (&self.guide_embed, guide) {
            (Some(embed), Some(guide)) => {
                let pooled = g.avg_pool(guide, 1 << self.stages)?;
                let f = embed.forward(g, pooled)?;
                Some(g.gelu(f))
            }
            _ => None,
        };
        let mut fusion = None;
        let mut z = match (&self.refiner, guide_feat) {
            (Refiner::Plain(None), _) => deep,
            (Refiner::Plain(Some(merge)), _) => {
                let cat = g.concat_c(&[deep, lf])?;
                merge.forward(g, cat)?
            }
            (Refiner::Concat(conv), Some(gf)) => {
                let mut parts = vec![deep];
                parts.extend(lf_deep);
                parts.push(gf);
                let cat = g.concat_c(&parts)?;
                conv.forward(g, cat)?
            }
            (Refiner::Cdffa(cd), Some(gf)) => {
                let f = cd.forward(g, deep, lf_deep, gf)?;
                let out = f.out;
                fusion = Some(f);
                out
            }
            _ => return Err(crate::Error::config("guided refiner called without guidance")),
        };
        z = self.bottleneck.forward(g, z)?;
        for (stage, i) in self.decoder.iter().zip((1..=self.stages).rev()) {
            let cat = g.concat_c(&[z, skips[i - 1]])?;
            z = stage.merge.forward(g, cat)?;
            if let (Some(cross), Some(ctx)) = (&stage.cross, context) {
                z = cross.forward(g, z, ctx)?;
            }
            z = stage.channel.forward(g, z)?;
            z = stage.refine.forward(g, z)?;
            z = stage.up.forward(g, z)?;
            z = g.pixel_shuffle(z, 2)?;
            z = g.add(z, enc[i - 1])?;
        }
        let residual = self.tail.forward(g, z)?;
        Ok(BranchTrace { residual, encoder: enc, fusion })
    }

    /// Analytic multiply-accumulate count for an `h`×`w` branch input, with
    /// `context` giving the context-token grid when cross-attention is on.
    pub fn macs(&self, h: usize, w: usize, context: Option<(usize, usize)>) -> u64 {
        let k = self.stages;
        let size = |i: usize| (h >> i, w >> i);
        let mut total = self.head.macs(h, w) + self.tail.macs(h, w);
        for i in 1..=k {
            let (hp, wp) = size(i - 1);
            let (hi, wi) = size(i);
            total += self.down[i - 1].macs(hp, wp);
            if let Some(p) = self.lf_proj.get(i - 1) {
                let c = p.in_channels as u64;
                total += 4 * c * (hp * wp) as u64 + p.macs(hi, wi);
            }
        }
        let (hk, wk) = size(k);
        if let Some(embed) = &self.guide_embed {
            total += embed.macs(hk, wk);
        }
        total += match &self.refiner {
            Refiner::Plain(m) => m.as_ref().map_or(0, |m| m.macs(hk, wk)),
            Refiner::Concat(c) => c.macs(hk, wk),
            Refiner::Cdffa(c) => c.macs(hk, wk),
        };
        total += self.bottleneck.macs(hk, wk);
        for (stage, i) in self.decoder.iter().zip((1..=k).rev()) {
            let (hi, wi) = size(i);
            total += stage.merge.macs(hi, wi);
            if let (Some(cross), Some((ch, cw))) = (&stage.cross, context) {
                total += cross.macs(hi, wi, ch, cw);
            }
            total += stage.channel.macs() + stage.refine.macs(hi, wi) + stage.up.macs(hi, wi);
        }
        total
    }
}
