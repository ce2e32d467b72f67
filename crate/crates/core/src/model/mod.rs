//! The dual-branch restoration network.
//!
//! The input is split into luminance `L′ = max(V, ε)` and reflectance
//! `R′ = I / L′`. Each branch predicts an additive residual and the result
//! is recomposed as `clamp((L′ + L̄) ⊙ (R′ + R̄))`. Both residual heads start
//! at zero, so a freshly built model returns its input unchanged.

mod blocks;
mod branch;
pub mod checkpoint;
mod config;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use blocks::{ConvNextBlock, GatedBlock, WideContext};
pub use branch::{Branch, BranchTrace, DecoderStage, Refiner};
pub use config::{ContextBackbone, Fusion, Guidance, GuidanceNorm, ModelConfig, Variant};

use crate::attention::RelevanceWeights;
use crate::autograd::{ConvSpec, Graph, Var};
use crate::colorspace::{rgb_to_hsv_pixel, rgb_to_lab_pixel};
use crate::error::{Error, Result};
use crate::image::ImagePlane;
use crate::nn::{Conv2d, Init};
use crate::params::ParamStore;
use crate::retinex::ResidualPair;
use crate::tensor::Tensor;

/// Network inputs derived from an RGB batch outside the graph.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub rgb: Tensor,
    pub luminance: Tensor,
    pub reflectance: Tensor,
    /// Guidance for the luminance and reflectance branches; `None` for RGB
    /// guidance, which is computed inside the graph by the dynamic filter.
    pub guide_l: Option<Tensor>,
    pub guide_r: Option<Tensor>,
}

/// Graph handles produced by [`Model::forward_graph`].
pub struct ForwardVars {
    pub restored: Var,
    /// `(L′ + L̄) ⊙ (R′ + R̄)` before clamping; the training loss uses this
    /// so out-of-range pixels still receive gradient.
    pub unclamped: Var,
    pub d_luminance: Var,
    pub d_reflectance: Var,
    pub l_trace: BranchTrace,
    pub r_trace: BranchTrace,
    pub context: Option<Var>,
}

#[derive(Clone, Debug)]
pub struct Rln2Output {
    pub restored: ImagePlane,
    pub residuals: ResidualPair,
    /// `(name, rms)` of the encoder features of each branch and of the
    /// context features.
    pub diagnostics: Vec<(String, f64)>,
    /// CDFFA weights at the bottleneck of the (luminance, reflectance)
    /// branch, when that fusion is active.
    pub relevance: Option<(RelevanceWeights, RelevanceWeights)>,
}

#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    params: ParamStore,
    l_branch: Branch,
    r_branch: Branch,
    context: Option<WideContext>,
    dynamic_filter: Option<Conv2d>,
}

impl Model {
    pub fn build(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamStore::new();
        let context = match (config.context_backbone.dims(), config.context_backbone.depths()) {
            (Some(d), Some(depths)) => Some(WideContext::new(&mut params, &mut rng, "context", d, depths)),
            _ => None,
        };
        let cw = context.as_ref().map(WideContext::width);
        let (gl, gr) = match config.guidance {
            Guidance::None => (0, 0),
            Guidance::Hsv | Guidance::Lab => (1, 2),
            Guidance::Rgb => (3, 3),
        };
        let dynamic_filter = (config.guidance == Guidance::Rgb).then(|| {
            Conv2d::new(
                &mut params,
                &mut rng,
                "dynamic_filter",
                3,
                3,
                3,
                ConvSpec::depthwise(3, 3),
                Init::Constant(1.0 / 9.0),
            )
        });
        let l_branch = Branch::new(&mut params, &mut rng, "l", &config, 1, gl, cw)?;
        let r_branch = Branch::new(&mut params, &mut rng, "r", &config, 3, gr, cw)?;
        Ok(Self { config, params, l_branch, r_branch, context, dynamic_filter })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.element_count()
    }

    pub fn context_backbone(&self) -> Option<&WideContext> {
        self.context.as_ref()
    }

    /// Loads externally supplied backbone weights (for example converted
    /// pretrained ConvNeXt tensors). Names are those of the parameter store
    /// without the `context.` prefix. Returns the number of tensors loaded.
    pub fn load_backbone_weights<'a, I>(&mut self, weights: I) -> Result<usize>
    where
        I: IntoIterator<Item = (&'a str, &'a Tensor)>,
    {
        if self.context.is_none() {
            return Err(Error::config("model has no context backbone"));
        }
        let mut n = 0;
        for (name, t) in weights {
            self.params.assign(&format!("context.{name}"), t.clone())?;
            n += 1;
        }
        Ok(n)
    }

    /// Decomposition and guidance maps for an N×3×H×W batch.
    pub fn prepare(&self, rgb: &Tensor) -> Result<Prepared> {
        let [n, c, h, w] = rgb.shape();
        if c != 3 {
            return Err(Error::shape(format!("model input needs 3 channels, got {c}")));
        }
        let hw = h * w;
        let eps = self.config.retinex_eps;
        let unit = self.config.guidance_norm == GuidanceNorm::Unit;
        let mut lum = Tensor::zeros([n, 1, h, w]);
        let mut refl = Tensor::zeros([n, 3, h, w]);
        let guided = matches!(self.config.guidance, Guidance::Hsv | Guidance::Lab);
        let mut gl = Tensor::zeros([n, 1, h, w]);
        let mut gr = Tensor::zeros([n, 2, h, w]);
        for s in 0..n {
            let src = rgb.sample(s);
            for p in 0..hw {
                let (r, g, b) = (src[p], src[hw + p], src[2 * hw + p]);
                let l = r.max(g).max(b).max(eps);
                lum.sample_mut(s)[p] = l;
                let dst = refl.sample_mut(s);
                dst[p] = r / l;
                dst[hw + p] = g / l;
                dst[2 * hw + p] = b / l;
                if !guided {
                    continue;
                }
                let (a0, a1, a2) = match self.config.guidance {
                    Guidance::Hsv => {
                        let (hue, sat, val) = rgb_to_hsv_pixel(r, g, b);
                        if unit {
                            (val, hue / 360.0, sat)
                        } else {
                            (val, hue, sat)
                        }
                    }
                    _ => {
                        let (ls, la, lb) = rgb_to_lab_pixel(r, g, b);
                        if unit {
                            (ls / 100.0, (la + 128.0) / 256.0, (lb + 128.0) / 256.0)
                        } else {
                            (ls, la, lb)
                        }
                    }
                };
                gl.sample_mut(s)[p] = a0;
                let dst = gr.sample_mut(s);
                dst[p] = a1;
                dst[hw + p] = a2;
            }
        }
        Ok(Prepared {
            rgb: rgb.clone(),
            luminance: lum,
            reflectance: refl,
            guide_l: guided.then_some(gl),
            guide_r: guided.then_some(gr),
        })
    }

    /// Builds the forward pass on `g`. Spatial sizes must already be
    /// multiples of [`ModelConfig::size_multiple`].
    pub fn forward_graph(&self, g: &mut Graph, prep: &Prepared) -> Result<ForwardVars> {
        let [_, _, h, w] = prep.rgb.shape();
        let m = self.config.size_multiple();
        if h % m != 0 || w % m != 0 {
            return Err(Error::shape(format!("graph input {h}x{w} is not a multiple of {m}")));
        }
        let rgb = g.input(prep.rgb.clone());
        let lum = g.input(prep.luminance.clone());
        let refl = g.input(prep.reflectance.clone());
        let (guide_l, guide_r) = match (&self.dynamic_filter, &prep.guide_l, &prep.guide_r) {
            (Some(f), _, _) => {
                let low = f.forward(g, rgb)?;
                let high = g.sub(rgb, low)?;
                (Some(low), Some(high))
            }
            (None, Some(a), Some(b)) => (Some(g.input(a.clone())), Some(g.input(b.clone()))),
            _ => (None, None),
        };
        let context = match &self.context {
            Some(c) => Some(c.forward(g, rgb)?),
            None => None,
        };
        let l_trace = self.l_branch.forward(g, lum, guide_l, context)?;
        let r_trace = self.r_branch.forward(g, refl, guide_r, context)?;
        let l = g.add(lum, l_trace.residual)?;
        let r = g.add(refl, r_trace.residual)?;
        let out = g.mul(l, r)?;
        let restored = g.clamp(out, 0.0, 1.0);
        Ok(ForwardVars {
            restored,
            unclamped: out,
            d_luminance: l_trace.residual,
            d_reflectance: r_trace.residual,
            l_trace,
            r_trace,
            context,
        })
    }

    /// Restores one image of any size; reflect-pads to the required multiple
    /// and crops back.
    pub fn forward(&self, input: &ImagePlane) -> Result<Rln2Output> {
        input.require_channels(3, "model input")?;
        let (h, w, _) = input.dims();
        let m = self.config.size_multiple();
        let (hp, wp) = (h.div_ceil(m) * m, w.div_ceil(m) * m);
        let padded = if (hp, wp) == (h, w) { input.clone() } else { input.pad_reflect(hp, wp) };
        let prep = self.prepare(&padded.to_tensor())?;
        let mut g = Graph::new(&self.params);
        let vars = self.forward_graph(&mut g, &prep)?;
        let crop = |v: Var| ImagePlane::from_tensor(&g.value(v).crop_hw(h, w), 0);
        let restored = crop(vars.restored)?;
        let residuals =
            ResidualPair { d_luminance: crop(vars.d_luminance)?, d_reflectance: crop(vars.d_reflectance)? };
        let rms = |t: &Tensor| t.l2_norm() / (t.len() as f64).sqrt();
        let mut diagnostics = Vec::new();
        for (name, trace) in [("l", &vars.l_trace), ("r", &vars.r_trace)] {
            for (k, e) in trace.encoder.iter().enumerate() {
                diagnostics.push((format!("{name}.enc{k}"), rms(g.value(*e))));
            }
        }
        if let Some(c) = vars.context {
            diagnostics.push(("context".to_string(), rms(g.value(c))));
        }
        let relevance = match (&vars.l_trace.fusion, &vars.r_trace.fusion) {
            (Some(a), Some(b)) => Some((a.weights(&g, 0), b.weights(&g, 0))),
            _ => None,
        };
        Ok(Rln2Output { restored: restored.clamp01(), residuals, diagnostics, relevance })
    }

    /// Analytic MAC count of one forward pass at `h`×`w` (already a valid
    /// multiple).
    pub fn macs(&self, h: usize, w: usize) -> u64 {
        let mut total = self.dynamic_filter.as_ref().map_or(0, |f| f.macs(h, w));
        let ctx = self.context.as_ref().map(|c| {
            total += c.macs(h, w);
            (h / ContextBackbone::FACTOR, w / ContextBackbone::FACTOR)
        });
        total + self.l_branch.macs(h, w, ctx) + self.r_branch.macs(h, w, ctx)
    }
}

/// MACs of a configuration for a square patch, rounding the patch up to the
/// size the model would pad to.
pub fn count_macs(config: &ModelConfig, patch: usize) -> Result<u64> {
    let m = config.size_multiple();
    let p = patch.div_ceil(m) * m;
    Ok(Model::build(config.clone())?.macs(p, p))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_image(h: usize, w: usize, seed: u64) -> ImagePlane {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ImagePlane::from_fn(h, w, 3, |_, _, _| rng.random()).unwrap()
    }

    fn tiny(variant: Variant) -> ModelConfig {
        ModelConfig::for_variant(variant).with_width(4, 2)
    }

    #[test]
    fn identity_at_init_with_padding() {
        for v in Variant::ALL {
            let model = Model::build(tiny(*v)).unwrap();
            let x = random_image(19, 23, 3);
            let out = model.forward(&x).unwrap();
            assert_eq!(out.restored.dims(), (19, 23, 3));
            let err = out.restored.data().iter().zip(x.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(err < 1e-12, "{v}: {err}");
        }
    }

    #[test]
    fn analytic_macs_match_graph_counter() {
        for v in Variant::ALL {
            for (gd, fu) in [(Guidance::None, Fusion::Concat), (Guidance::Rgb, Fusion::Concat), (Guidance::Hsv, Fusion::Cdffa)] {
                let model = Model::build(tiny(*v).with_guidance(gd, fu)).unwrap();
                let prep = model.prepare(&random_image(32, 48, 1).to_tensor()).unwrap();
                let mut g = Graph::new(model.params());
                model.forward_graph(&mut g, &prep).unwrap();
                assert_eq!(g.macs(), model.macs(32, 48), "{v} {gd} {fu}");
            }
        }
    }

    #[test]
    fn non_rgb_input_rejected() {
        let model = Model::build(tiny(Variant::S)).unwrap();
        let gray = ImagePlane::filled(16, 16, 1, 0.5).unwrap();
        assert!(matches!(model.forward(&gray), Err(Error::Shape(_))));
    }

    fn perturbed(cfg: ModelConfig, seed: u64, scale: f64) -> Model {
        let mut model = Model::build(cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for t in model.params_mut().values_mut() {
            for v in t.data_mut() {
                *v += scale * rng.random_range(-1.0..1.0);
            }
        }
        model
    }

    #[test]
    fn full_model_gradients_match_finite_differences() {
        use crate::gradcheck::check_params;
        for (v, gd, fu) in [(Variant::Sf, Guidance::Hsv, Fusion::Cdffa), (Variant::L, Guidance::Rgb, Fusion::Concat)] {
            let model = perturbed(tiny(v).with_guidance(gd, fu), 5, 0.05);
            let prep = model.prepare(&random_image(16, 16, 8).to_tensor()).unwrap();
            let probe = Tensor::from_vec([1, 3, 16, 16], (0..768).map(|i| ((i * 37 % 101) as f64 / 101.0) - 0.5).collect())
                .unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(2);
            let report = check_params(model.params(), 3, 1e-6, &mut rng, |g| {
                let out = model.forward_graph(g, &prep)?;
                g.weighted_sum(out.restored, &probe)
            })
            .unwrap();
            let worst = report.iter().max_by(|a, b| a.rel_error.total_cmp(&b.rel_error)).unwrap();
            assert!(worst.rel_error < 1e-3, "{v}: {} rel error {}", worst.name, worst.rel_error);
        }
    }
}
