//! Attention blocks of the restoration network.
//!
//! * [`Cdffa`]: cross-domain feature fusion. Every channel of the RGB stream
//!   and of the low-frequency stream is weighted by a softmax over its
//!   scaled dot-product similarity to the matching guidance channel.
//! * [`ChannelAttention`]: CBAM-style gating from pooled channel statistics.
//! * [`CrossAttention`]: queries from the restoration features, keys and
//!   values from the wide-context features, added back residually.

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{Conv2d, Init};
use crate::params::{ParamId, ParamStore};
use crate::autograd::ConvSpec;

/// Scaled dot product `⟨a, b⟩ / √d`.
pub fn similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::shape(format!("similarity of lengths {} and {}", a.len(), b.len())));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok(dot / (a.len() as f64).sqrt())
}

pub fn softmax(xs: &[f64]) -> Vec<f64> {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = xs.iter().map(|x| (x - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// Per-sample channel weights produced by a CDFFA fusion.
#[derive(Clone, Debug, PartialEq)]
pub struct RelevanceWeights {
    pub alpha: Vec<f64>,
    /// Empty when the low-frequency stream is disabled.
    pub beta: Vec<f64>,
}

impl RelevanceWeights {
    fn from_graph(g: &Graph, alpha: Var, beta: Option<Var>, sample: usize) -> Self {
        let n = g.shape(alpha)[1];
        let pick = |v: Var| g.value(v).data()[sample * n..(sample + 1) * n].to_vec();
        Self { alpha: pick(alpha), beta: beta.map(pick).unwrap_or_default() }
    }
}

pub struct FusionVars {
    pub out: Var,
    pub alpha: Var,
    pub beta: Option<Var>,
}

impl FusionVars {
    pub fn weights(&self, g: &Graph, sample: usize) -> RelevanceWeights {
        RelevanceWeights::from_graph(g, self.alpha, self.beta, sample)
    }
}

/// Channel similarities `sim(x_i, guid_i)` as an N×C×1×1 variable.
pub fn channel_similarity(g: &mut Graph, x: Var, guid: Var) -> Result<Var> {
    let [_, _, h, w] = g.shape(x);
    let prod = g.mul(x, guid)?;
    let mean = g.mean_hw(prod);
    // mean · d / √d = ⟨a, b⟩ / √d
    Ok(g.scale(mean, ((h * w) as f64).sqrt()))
}

/// Weighted sum `α ⊙ main + β ⊙ lf` from raw similarity scores
/// (each N×C×1×1); softmax is taken over channels, separately for α and β.
pub fn fuse_with_similarities(
    g: &mut Graph,
    main: Var,
    lf: Option<Var>,
    sim_alpha: Var,
    sim_beta: Option<Var>,
) -> Result<FusionVars> {
    let alpha = g.softmax_c(sim_alpha);
    let mut out = g.mul(main, alpha)?;
    let mut beta = None;
    if let (Some(lf), Some(sb)) = (lf, sim_beta) {
        let b = g.softmax_c(sb);
        let weighted = g.mul(lf, b)?;
        out = g.add(out, weighted)?;
        beta = Some(b);
    }
    Ok(FusionVars { out, alpha, beta })
}

/// Fusion of already projected streams (all N×n×H×W).
pub fn cdffa_fuse(g: &mut Graph, main: Var, lf: Option<Var>, guid: Var) -> Result<FusionVars> {
    let shape = g.shape(main);
    let mut check = vec![guid];
    check.extend(lf);
    for v in check {
        if g.shape(v) != shape {
            return Err(Error::shape(format!(
                "cdffa streams not aligned: {:?} vs {:?}",
                shape,
                g.shape(v)
            )));
        }
    }
    let sa = channel_similarity(g, main, guid)?;
    let sb = match lf {
        Some(lf) => Some(channel_similarity(g, lf, guid)?),
        None => None,
    };
    fuse_with_similarities(g, main, lf, sa, sb)
}

/// CDFFA with its learned 1×1 projections to `n` channels.
#[derive(Clone, Debug)]
pub struct Cdffa {
    pub proj_main: Conv2d,
    pub proj_lf: Option<Conv2d>,
    pub proj_guid: Conv2d,
    pub n: usize,
}

impl Cdffa {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        main_channels: usize,
        lf_channels: Option<usize>,
        guid_channels: usize,
        n: usize,
    ) -> Self {
        Self {
            proj_main: Conv2d::pointwise(store, rng, &format!("{name}.proj_main"), main_channels, n),
            proj_lf: lf_channels.map(|c| Conv2d::pointwise(store, rng, &format!("{name}.proj_lf"), c, n)),
            proj_guid: Conv2d::pointwise(store, rng, &format!("{name}.proj_guid"), guid_channels, n),
            n,
        }
    }

    pub fn forward(&self, g: &mut Graph, main: Var, lf: Option<Var>, guid: Var) -> Result<FusionVars> {
        let m = self.proj_main.forward(g, main)?;
        let l = match (&self.proj_lf, lf) {
            (Some(p), Some(lf)) => Some(p.forward(g, lf)?),
            (None, None) => None,
            _ => return Err(Error::config("cdffa low-frequency stream presence mismatch")),
        };
        let gd = self.proj_guid.forward(g, guid)?;
        cdffa_fuse(g, m, l, gd)
    }

    pub fn macs(&self, h: usize, w: usize) -> u64 {
        self.proj_main.macs(h, w)
            + self.proj_lf.as_ref().map_or(0, |p| p.macs(h, w))
            + self.proj_guid.macs(h, w)
    }
}

/// CBAM channel attention: `x ⊙ σ(mlp(avg(x)) + mlp(max(x)))`.
#[derive(Clone, Debug)]
pub struct ChannelAttention {
    pub fc1: Conv2d,
    pub fc2: Conv2d,
}

impl ChannelAttention {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, channels: usize, reduction: usize) -> Self {
        let hidden = (channels / reduction).max(1);
        Self {
            fc1: Conv2d::pointwise(store, rng, &format!("{name}.fc1"), channels, hidden),
            fc2: Conv2d::pointwise(store, rng, &format!("{name}.fc2"), hidden, channels),
        }
    }

    fn mlp(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let h = self.fc1.forward(g, x)?;
        let h = g.relu(h);
        self.fc2.forward(g, h)
    }

    /// The N×C×1×1 gates.
    pub fn gates(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let avg = g.mean_hw(x);
        let max = g.max_hw(x);
        let a = self.mlp(g, avg)?;
        let m = self.mlp(g, max)?;
        let s = g.add(a, m)?;
        Ok(g.sigmoid(s))
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let gate = self.gates(g, x)?;
        g.mul(x, gate)
    }

    pub fn macs(&self) -> u64 {
        2 * (self.fc1.macs(1, 1) + self.fc2.macs(1, 1))
    }
}

/// Residual multi-head cross-attention from a query map to context tokens.
#[derive(Clone, Debug)]
pub struct CrossAttention {
    pub wq: Conv2d,
    pub wk: Conv2d,
    pub wv: Conv2d,
    /// Output projection, bias-free so a zero value projection leaves the
    /// query stream untouched.
    pub wo: ParamId,
    pub width: usize,
    pub heads: usize,
}

impl CrossAttention {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        width: usize,
        context_width: usize,
        heads: usize,
    ) -> Result<Self> {
        if heads == 0 || width % heads != 0 {
            return Err(Error::config(format!("{heads} heads do not divide width {width}")));
        }
        let wo_t = crate::nn::init_tensor(rng, [width, width, 1, 1], width, Init::He(0.5));
        Ok(Self {
            wq: Conv2d::pointwise(store, rng, &format!("{name}.wq"), width, width),
            wk: Conv2d::pointwise(store, rng, &format!("{name}.wk"), context_width, width),
            wv: Conv2d::pointwise(store, rng, &format!("{name}.wv"), context_width, width),
            wo: store.add(format!("{name}.wo.weight"), wo_t),
            width,
            heads,
        })
    }

    pub fn forward(&self, g: &mut Graph, query: Var, context: Var) -> Result<Var> {
        let q = self.wq.forward(g, query)?;
        let k = self.wk.forward(g, context)?;
        let v = self.wv.forward(g, context)?;
        let a = g.attention(q, k, v, self.heads)?;
        let wo = g.param(self.wo);
        let o = g.conv2d(a, wo, None, ConvSpec::same(1))?;
        g.add(query, o)
    }

    /// MACs for a `h`×`w` query map against `tokens` context positions.
    pub fn macs(&self, h: usize, w: usize, ctx_h: usize, ctx_w: usize) -> u64 {
        let tq = (h * w) as u64;
        let tk = (ctx_h * ctx_w) as u64;
        let c = self.width as u64;
        self.wq.macs(h, w) + self.wk.macs(ctx_h, ctx_w) + self.wv.macs(ctx_h, ctx_w) + 2 * tq * tk * c + c * c * tq
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_inputs, check_params};
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: [usize; 4]) -> Tensor {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn identity(c: usize) -> Tensor {
        let mut t = Tensor::zeros([c, c, 1, 1]);
        for i in 0..c {
            t.data_mut()[i * c + i] = 1.0;
        }
        t
    }

    #[test]
    fn similarity_examples() {
        assert_eq!(similarity(&[1.0; 4], &[1.0; 4]).unwrap(), 2.0);
        assert_eq!(similarity(&[1.0, 0.0], &[0.0, 3.0]).unwrap(), 0.0);
        assert!(similarity(&[1.0], &[1.0, 2.0]).is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let a: Vec<f64> = (0..8).map(|_| rng.random()).collect();
        let b: Vec<f64> = (0..8).map(|_| rng.random()).collect();
        let mut dot = 0.0;
        for i in 0..8 {
            dot += a[i] * b[i];
        }
        assert!((similarity(&a, &b).unwrap() - dot / 8f64.sqrt()).abs() < 1e-14);
    }

    #[test]
    fn graph_similarity_matches_plain() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = rand_tensor(&mut rng, [1, 3, 2, 4]);
        let b = rand_tensor(&mut rng, [1, 3, 2, 4]);
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let (va, vb) = (g.input(a.clone()), g.input(b.clone()));
        let s = channel_similarity(&mut g, va, vb).unwrap();
        for c in 0..3 {
            let want = similarity(a.plane(0, c), b.plane(0, c)).unwrap();
            assert!((g.value(s).data()[c] - want).abs() < 1e-14);
        }
    }

    #[test]
    fn hand_chosen_two_channel_fusion() {
        let ln3 = 3f64.ln();
        // d = 4 pixels (2x2), channel-major planes.
        let guid = Tensor::from_vec([1, 2, 2, 2], vec![1.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0]).unwrap();
        let main = Tensor::from_vec([1, 2, 2, 2], vec![0.0, 1.0, 0.0, 0.0, ln3 / 2.0, ln3 / 2.0, ln3 / 2.0, ln3 / 2.0]).unwrap();
        let lf = Tensor::from_vec([1, 2, 2, 2], vec![0.0, 0.0, 1.0, 0.0, 1.0, -1.0, 1.0, -1.0]).unwrap();
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let (m, l, gd) = (g.input(main.clone()), g.input(lf.clone()), g.input(guid));
        let fused = cdffa_fuse(&mut g, m, Some(l), gd).unwrap();
        let w = fused.weights(&g, 0);
        assert!((w.alpha[0] - 0.25).abs() < 1e-12 && (w.alpha[1] - 0.75).abs() < 1e-12);
        assert!((w.beta[0] - 0.5).abs() < 1e-12 && (w.beta[1] - 0.5).abs() < 1e-12);
        let out = g.value(fused.out);
        let alpha = [0.25, 0.75];
        for c in 0..2 {
            for p in 0..4 {
                let want = alpha[c] * main.plane(0, c)[p] + 0.5 * lf.plane(0, c)[p];
                assert!((out.plane(0, c)[p] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn uniform_and_singleton_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        // Guidance zero => all similarities zero => uniform weights.
        let main = rand_tensor(&mut rng, [1, 4, 3, 3]);
        let lf = rand_tensor(&mut rng, [1, 4, 3, 3]);
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let (m, l, gd) = (g.input(main.clone()), g.input(lf.clone()), g.input(Tensor::zeros([1, 4, 3, 3])));
        let fused = cdffa_fuse(&mut g, m, Some(l), gd).unwrap();
        let w = fused.weights(&g, 0);
        assert!(w.alpha.iter().chain(&w.beta).all(|&a| a == 0.25));
        for (o, (a, b)) in g.value(fused.out).data().iter().zip(main.data().iter().zip(lf.data())) {
            assert!((o - 0.25 * (a + b)).abs() < 1e-15);
        }

        let main = rand_tensor(&mut rng, [1, 1, 3, 3]);
        let lf = rand_tensor(&mut rng, [1, 1, 3, 3]);
        let guid = rand_tensor(&mut rng, [1, 1, 3, 3]);
        let mut g = Graph::new(&store);
        let (m, l, gd) = (g.input(main.clone()), g.input(lf.clone()), g.input(guid));
        let fused = cdffa_fuse(&mut g, m, Some(l), gd).unwrap();
        for (o, (a, b)) in g.value(fused.out).data().iter().zip(main.data().iter().zip(lf.data())) {
            assert_eq!(*o, a + b);
        }
    }

    #[test]
    fn misaligned_streams_rejected() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let m = g.input(Tensor::zeros([1, 2, 4, 4]));
        let gd = g.input(Tensor::zeros([1, 2, 2, 2]));
        assert!(matches!(cdffa_fuse(&mut g, m, None, gd), Err(Error::Shape(_))));
    }

    #[test]
    fn projected_cdffa_with_identity_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut store = ParamStore::new();
        let block = Cdffa::new(&mut store, &mut rng, "f", 3, Some(3), 3, 3);
        for name in ["f.proj_main.weight", "f.proj_lf.weight", "f.proj_guid.weight"] {
            store.assign(name, identity(3)).unwrap();
        }
        let main = rand_tensor(&mut rng, [1, 3, 2, 2]);
        let lf = rand_tensor(&mut rng, [1, 3, 2, 2]);
        let guid = rand_tensor(&mut rng, [1, 3, 2, 2]);
        let mut g = Graph::new(&store);
        let (m, l, gd) = (g.input(main.clone()), g.input(lf.clone()), g.input(guid.clone()));
        let fused = block.forward(&mut g, m, Some(l), gd).unwrap();
        let sa: Vec<f64> = (0..3).map(|c| similarity(main.plane(0, c), guid.plane(0, c)).unwrap()).collect();
        let sb: Vec<f64> = (0..3).map(|c| similarity(lf.plane(0, c), guid.plane(0, c)).unwrap()).collect();
        let (a, b) = (softmax(&sa), softmax(&sb));
        for c in 0..3 {
            for p in 0..4 {
                let want = a[c] * main.plane(0, c)[p] + b[c] * lf.plane(0, c)[p];
                assert!((g.value(fused.out).plane(0, c)[p] - want).abs() < 1e-12);
            }
        }
        assert!(block.macs(2, 2) == 3 * 9 * 4);
    }

    #[test]
    fn channel_attention_zero_weights_halves() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mut store = ParamStore::new();
        let ca = ChannelAttention::new(&mut store, &mut rng, "ca", 4, 2);
        for id in store.ids().collect::<Vec<_>>() {
            let shape = store.get(id).shape();
            *store.get_mut(id) = Tensor::zeros(shape);
        }
        let x = rand_tensor(&mut rng, [1, 4, 3, 3]);
        let mut g = Graph::new(&store);
        let xv = g.input(x.clone());
        let y = ca.forward(&mut g, xv).unwrap();
        for (o, i) in g.value(y).data().iter().zip(x.data()) {
            assert_eq!(*o, 0.5 * i);
        }
    }

    #[test]
    fn channel_attention_hand_computed_gates() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let mut store = ParamStore::new();
        let ca = ChannelAttention::new(&mut store, &mut rng, "ca", 2, 2);
        // hidden = 1: fc1 w = [0.5, -0.25], b = 0.1; fc2 w = [1.0, -2.0], b = [0.05, 0.0]
        store.assign("ca.fc1.weight", Tensor::from_vec([1, 2, 1, 1], vec![0.5, -0.25]).unwrap()).unwrap();
        store.assign("ca.fc1.bias", Tensor::from_vec([1, 1, 1, 1], vec![0.1]).unwrap()).unwrap();
        store.assign("ca.fc2.weight", Tensor::from_vec([2, 1, 1, 1], vec![1.0, -2.0]).unwrap()).unwrap();
        store.assign("ca.fc2.bias", Tensor::from_vec([1, 2, 1, 1], vec![0.05, 0.0]).unwrap()).unwrap();
        // 1x1 spatial input: avg = max = x.
        let x = Tensor::from_vec([1, 2, 1, 1], vec![0.8, 0.4]).unwrap();
        let hidden = (0.5f64 * 0.8 - 0.25 * 0.4 + 0.1).max(0.0); // 0.4
        let logits = [2.0 * (1.0 * hidden + 0.05), 2.0 * (-2.0 * hidden)];
        let gates = logits.map(|l| 1.0 / (1.0 + (-l as f64).exp()));
        let mut g = Graph::new(&store);
        let xv = g.input(x.clone());
        let y = ca.forward(&mut g, xv).unwrap();
        for c in 0..2 {
            assert!((g.value(y).data()[c] - gates[c] * x.data()[c]).abs() < 1e-12);
        }
        // Gates in (0, 1) shrink every nonzero channel.
        assert!(gates.iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn cross_attention_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let mut store = ParamStore::new();
        let xa = CrossAttention::new(&mut store, &mut rng, "xa", 2, 2, 1).unwrap();
        assert!(CrossAttention::new(&mut store, &mut rng, "bad", 3, 2, 2).is_err());
        let query = rand_tensor(&mut rng, [1, 2, 2, 2]);

        // Single context token: weights are 1, output = query + wo·v(token).
        let ctx1 = rand_tensor(&mut rng, [1, 2, 1, 1]);
        let mut g = Graph::new(&store);
        let (q, c) = (g.input(query.clone()), g.input(ctx1.clone()));
        let out = xa.forward(&mut g, q, c).unwrap();
        let mut g2 = Graph::new(&store);
        let cv = g2.input(ctx1);
        let v = xa.wv.forward(&mut g2, cv).unwrap();
        let wo = g2.param(xa.wo);
        let proj = g2.conv2d(v, wo, None, ConvSpec::same(1)).unwrap();
        for ch in 0..2 {
            for p in 0..4 {
                let want = query.plane(0, ch)[p] + g2.value(proj).data()[ch];
                assert!((g.value(out).plane(0, ch)[p] - want).abs() < 1e-12);
            }
        }

        // Zero value projection: residual identity.
        let mut zeroed = store.clone();
        zeroed.assign("xa.wv.weight", Tensor::zeros([2, 2, 1, 1])).unwrap();
        let ctx = rand_tensor(&mut rng, [1, 2, 3, 1]);
        let mut g = Graph::new(&zeroed);
        let (q, c) = (g.input(query.clone()), g.input(ctx.clone()));
        let out = xa.forward(&mut g, q, c).unwrap();
        assert_eq!(g.value(out), &query);

        // Identity projections, two tokens: hand-computed softmax mixture.
        let mut ident = store.clone();
        for n in ["xa.wq.weight", "xa.wk.weight", "xa.wv.weight", "xa.wo.weight"] {
            ident.assign(n, identity(2)).unwrap();
        }
        let ctx2 = Tensor::from_vec([1, 2, 1, 2], vec![1.0, -0.5, 0.2, 0.7]).unwrap();
        let mut g = Graph::new(&ident);
        let (q, c) = (g.input(query.clone()), g.input(ctx2.clone()));
        let out = xa.forward(&mut g, q, c).unwrap();
        for p in 0..4 {
            let qv = [query.plane(0, 0)[p], query.plane(0, 1)[p]];
            let tok = |t: usize| [ctx2.plane(0, 0)[t], ctx2.plane(0, 1)[t]];
            let score = |t: usize| (qv[0] * tok(t)[0] + qv[1] * tok(t)[1]) / 2f64.sqrt();
            let w = softmax(&[score(0), score(1)]);
            for ch in 0..2 {
                let want = qv[ch] + w[0] * tok(0)[ch] + w[1] * tok(1)[ch];
                assert!((g.value(out).plane(0, ch)[p] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn attention_blocks_pass_gradient_checks() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let mut store = ParamStore::new();
        let cd = Cdffa::new(&mut store, &mut rng, "cd", 4, Some(4), 2, 4);
        let ca = ChannelAttention::new(&mut store, &mut rng, "ca", 4, 2);
        let xa = CrossAttention::new(&mut store, &mut rng, "xa", 4, 3, 2).unwrap();
        let main = rand_tensor(&mut rng, [1, 4, 4, 4]);
        let lf = rand_tensor(&mut rng, [1, 4, 4, 4]);
        let guid = rand_tensor(&mut rng, [1, 2, 4, 4]);
        let ctx = rand_tensor(&mut rng, [1, 3, 2, 2]);
        let probe = rand_tensor(&mut rng, [1, 4, 4, 4]);
        let f = |g: &mut Graph| -> Result<Var> {
            let (m, l, gd, c) = (g.input(main.clone()), g.input(lf.clone()), g.input(guid.clone()), g.input(ctx.clone()));
            let fused = cd.forward(g, m, Some(l), gd)?;
            let y = ca.forward(g, fused.out)?;
            let y = xa.forward(g, y, c)?;
            g.weighted_sum(y, &probe)
        };
        for r in check_params(&store, 8, 1e-6, &mut rng, f).unwrap() {
            assert!(r.rel_error < 1e-3, "{} rel error {}", r.name, r.rel_error);
        }
        let report = check_inputs(&[main.clone(), lf.clone(), guid.clone()], 1e-6, |g, v| {
            let gp = g.concat_c(&[v[2], v[2]])?;
            let fused = cdffa_fuse(g, v[0], Some(v[1]), gp)?;
            g.weighted_sum(fused.out, &probe)
        })
        .unwrap();
        for r in report {
            assert!(r.rel_error < 1e-3, "{} rel error {}", r.name, r.rel_error);
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn softmax_sums_to_one_and_is_shift_invariant(
                xs in proptest::collection::vec(-5.0f64..5.0, 1..12),
                shift in -50.0f64..50.0,
            ) {
                let p = softmax(&xs);
                prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-6);
                prop_assert!(p.iter().all(|&v| v > 0.0));
                let shifted: Vec<f64> = xs.iter().map(|x| x + shift).collect();
                for (a, b) in p.iter().zip(softmax(&shifted)) {
                    prop_assert!((a - b).abs() < 1e-6);
                }
            }

            #[test]
            fn fusion_is_linear_for_frozen_weights(seed in 0u64..200, s in -2.0f64..2.0) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let sims = rand_tensor(&mut rng, [1, 3, 1, 1]);
                let x1 = rand_tensor(&mut rng, [1, 3, 2, 2]);
                let x2 = rand_tensor(&mut rng, [1, 3, 2, 2]);
                let store = ParamStore::new();
                let run = |main: &Tensor| {
                    let mut g = Graph::new(&store);
                    let (m, sa) = (g.input(main.clone()), g.input(sims.clone()));
                    let f = fuse_with_similarities(&mut g, m, None, sa, None).unwrap();
                    g.value(f.out).clone()
                };
                let combo = Tensor::from_vec([1, 3, 2, 2], x1.data().iter().zip(x2.data()).map(|(a, b)| a + s * b).collect()).unwrap();
                let (y1, y2, yc) = (run(&x1), run(&x2), run(&combo));
                for i in 0..yc.len() {
                    prop_assert!((yc.data()[i] - (y1.data()[i] + s * y2.data()[i])).abs() < 1e-12);
                }
            }
        }
    }
}
