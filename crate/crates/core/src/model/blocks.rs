use rand::Rng;

use crate::autograd::{ConvSpec, Graph, Var};
use crate::error::Result;
use crate::nn::{Conv2d, Init, LayerNorm2d};
use crate::params::ParamStore;

/// Gated convolutional refinement in the spirit of MambaOut's gated CNN
/// block: `x + proj(gelu(gate(x)) ⊙ dw3x3(value(x)))`.
#[derive(Clone, Debug)]
pub struct GatedBlock {
    pub gate: Conv2d,
    pub value: Conv2d,
    pub dw: Conv2d,
    pub proj: Conv2d,
}

impl GatedBlock {
    pub const EXPANSION: usize = 2;

    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, channels: usize) -> Self {
        let e = channels * Self::EXPANSION;
        Self {
            gate: Conv2d::pointwise(store, rng, &format!("{name}.gate"), channels, e),
            value: Conv2d::pointwise(store, rng, &format!("{name}.value"), channels, e),
            dw: Conv2d::new(store, rng, &format!("{name}.dw"), e, e, 3, ConvSpec::depthwise(3, e), Init::He(1.0)),
            proj: Conv2d::new(store, rng, &format!("{name}.proj"), e, channels, 1, ConvSpec::same(1), Init::He(0.5)),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let gate = self.gate.forward(g, x)?;
        let gate = g.gelu(gate);
        let v = self.value.forward(g, x)?;
        let v = self.dw.forward(g, v)?;
        let h = g.mul(gate, v)?;
        let h = self.proj.forward(g, h)?;
        g.add(x, h)
    }

    pub fn macs(&self, h: usize, w: usize) -> u64 {
        self.gate.macs(h, w) + self.value.macs(h, w) + self.dw.macs(h, w) + self.proj.macs(h, w)
    }
}

/// ConvNeXt block: depthwise 7×7, layer norm, 4× pointwise expansion, GELU,
/// pointwise projection, residual.
#[derive(Clone, Debug)]
pub struct ConvNextBlock {
    pub dw: Conv2d,
    pub norm: LayerNorm2d,
    pub pw1: Conv2d,
    pub pw2: Conv2d,
}

impl ConvNextBlock {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, dim: usize) -> Self {
        Self {
            dw: Conv2d::new(store, rng, &format!("{name}.dw"), dim, dim, 7, ConvSpec::depthwise(7, dim), Init::He(1.0)),
            norm: LayerNorm2d::new(store, &format!("{name}.norm"), dim),
            pw1: Conv2d::pointwise(store, rng, &format!("{name}.pw1"), dim, 4 * dim),
            pw2: Conv2d::new(store, rng, &format!("{name}.pw2"), 4 * dim, dim, 1, ConvSpec::same(1), Init::He(0.5)),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let h = self.dw.forward(g, x)?;
        let h = self.norm.forward(g, h)?;
        let h = self.pw1.forward(g, h)?;
        let h = g.gelu(h);
        let h = self.pw2.forward(g, h)?;
        g.add(x, h)
    }

    pub fn macs(&self, h: usize, w: usize) -> u64 {
        self.dw.macs(h, w) + self.pw1.macs(h, w) + self.pw2.macs(h, w)
    }
}

/// ConvNeXt-style hierarchical extractor with stages at 1/4, 1/8 and 1/16
/// of the input resolution.
#[derive(Clone, Debug)]
pub struct WideContext {
    pub stem: Conv2d,
    pub stem_norm: LayerNorm2d,
    pub downsample: Vec<(LayerNorm2d, Conv2d)>,
    pub stages: Vec<Vec<ConvNextBlock>>,
    pub dims: [usize; 3],
}

impl WideContext {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, dims: [usize; 3], depths: [usize; 3]) -> Self {
        let stem = Conv2d::new(store, rng, &format!("{name}.stem"), 3, dims[0], 4, ConvSpec::strided(4, 0), Init::He(1.0));
        let stem_norm = LayerNorm2d::new(store, &format!("{name}.stem_norm"), dims[0]);
        let mut downsample = Vec::new();
        let mut stages = Vec::new();
        for (i, (&dim, &depth)) in dims.iter().zip(&depths).enumerate() {
            if i > 0 {
                let norm = LayerNorm2d::new(store, &format!("{name}.down{i}.norm"), dims[i - 1]);
                let conv = Conv2d::new(
                    store,
                    rng,
                    &format!("{name}.down{i}.conv"),
                    dims[i - 1],
                    dim,
                    2,
                    ConvSpec::strided(2, 0),
                    Init::He(1.0),
                );
                downsample.push((norm, conv));
            }
            stages.push((0..depth).map(|j| ConvNextBlock::new(store, rng, &format!("{name}.stage{i}.block{j}"), dim)).collect());
        }
        Self { stem, stem_norm, downsample, stages, dims }
    }

    pub fn width(&self) -> usize {
        self.dims[2]
    }

    /// Outputs of every stage, finest first.
    pub fn features(&self, g: &mut Graph, rgb: Var) -> Result<Vec<Var>> {
        let mut x = self.stem.forward(g, rgb)?;
        x = self.stem_norm.forward(g, x)?;
        let mut out = Vec::with_capacity(self.stages.len());
        for (i, blocks) in self.stages.iter().enumerate() {
            if i > 0 {
                let (norm, conv) = &self.downsample[i - 1];
                x = norm.forward(g, x)?;
                x = conv.forward(g, x)?;
            }
            for b in blocks {
                x = b.forward(g, x)?;
            }
            out.push(x);
        }
        Ok(out)
    }

    pub fn forward(&self, g: &mut Graph, rgb: Var) -> Result<Var> {
        Ok(*self.features(g, rgb)?.last().expect("three stages"))
    }

    pub fn macs(&self, h: usize, w: usize) -> u64 {
        let (mut hh, mut ww) = self.stem.output_size(h, w);
        let mut total = self.stem.macs(h, w);
        for (i, blocks) in self.stages.iter().enumerate() {
            if i > 0 {
                let conv = &self.downsample[i - 1].1;
                total += conv.macs(hh, ww);
                (hh, ww) = conv.output_size(hh, ww);
            }
            total += blocks.iter().map(|b| b.macs(hh, ww)).sum::<u64>();
        }
        total
    }
}
