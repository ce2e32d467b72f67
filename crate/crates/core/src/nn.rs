//! Parameterized building blocks shared by the attention, backbone and
//! restoration modules.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autograd::{ConvSpec, Graph, Var};
use crate::error::Result;
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// How a freshly registered weight is filled.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// He-normal, `std = gain * sqrt(2 / fan_in)`.
    He(f64),
    Zeros,
    Constant(f64),
}

pub(crate) fn init_tensor<R: Rng>(rng: &mut R, shape: [usize; 4], fan_in: usize, init: Init) -> Tensor {
    match init {
        Init::Zeros => Tensor::zeros(shape),
        Init::Constant(v) => Tensor::full(shape, v),
        Init::He(gain) => {
            let std = gain * (2.0 / fan_in.max(1) as f64).sqrt();
            let normal = Normal::new(0.0, std).expect("finite std");
            let n = shape.iter().product();
            Tensor::from_vec(shape, (0..n).map(|_| normal.sample(rng)).collect()).expect("shape")
        }
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub spec: ConvSpec,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        spec: ConvSpec,
        init: Init,
    ) -> Self {
        let cin_g = in_channels / spec.groups;
        let shape = [out_channels, cin_g, kernel, kernel];
        let w = init_tensor(rng, shape, cin_g * kernel * kernel, init);
        let weight = store.add(format!("{name}.weight"), w);
        let bias = Some(store.add(format!("{name}.bias"), Tensor::zeros([1, out_channels, 1, 1])));
        Self { weight, bias, spec, in_channels, out_channels, kernel }
    }

    /// Same-padded k×k convolution.
    pub fn same<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, cin: usize, cout: usize, k: usize) -> Self {
        Self::new(store, rng, name, cin, cout, k, ConvSpec::same(k), Init::He(1.0))
    }

    pub fn pointwise<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, cin: usize, cout: usize) -> Self {
        Self::same(store, rng, name, cin, cout, 1)
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let b = self.bias.map(|b| g.param(b));
        g.conv2d(x, w, b, self.spec)
    }

    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        self.spec.output_size(h, w, self.kernel, self.kernel)
    }

    /// Multiply-accumulates for one sample of size `h`×`w`.
    pub fn macs(&self, h: usize, w: usize) -> u64 {
        let (ho, wo) = self.output_size(h, w);
        (self.out_channels * (self.in_channels / self.spec.groups) * self.kernel * self.kernel * ho * wo) as u64
    }
}

/// Channel-wise layer normalization over N×C×H×W maps.
#[derive(Clone, Debug)]
pub struct LayerNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNorm2d {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::full([1, channels, 1, 1], 1.0)),
            beta: store.add(format!("{name}.beta"), Tensor::zeros([1, channels, 1, 1])),
            eps: 1e-6,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let gm = g.param(self.gamma);
        let bt = g.param(self.beta);
        g.layer_norm_c(x, gm, bt, self.eps)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_inputs;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: [usize; 4]) -> Tensor {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn assert_ok(report: &[crate::gradcheck::GroupCheck]) {
        for r in report {
            assert!(r.rel_error < 1e-6, "{} rel error {}", r.name, r.rel_error);
        }
    }

    #[test]
    fn conv_gradients_all_layouts() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cases = [
            ([2, 4, 5, 6], [6, 4, 3, 3], ConvSpec::same(3)),
            ([1, 4, 6, 6], [4, 2, 3, 3], ConvSpec { stride: 2, pad: 1, groups: 2 }),
            ([2, 3, 4, 4], [5, 3, 1, 1], ConvSpec::same(1)),
            ([1, 3, 7, 7], [3, 1, 3, 3], ConvSpec::depthwise(3, 3)),
            ([1, 2, 8, 8], [3, 2, 4, 4], ConvSpec::strided(4, 0)),
        ];
        for (xs, ws, spec) in cases {
            let x = rand_tensor(&mut rng, xs);
            let w = rand_tensor(&mut rng, ws);
            let b = rand_tensor(&mut rng, [1, ws[0], 1, 1]);
            let probe = {
                let [n, _, h, wd] = xs;
                let (ho, wo) = spec.output_size(h, wd, ws[2], ws[3]);
                rand_tensor(&mut rng, [n, ws[0], ho, wo])
            };
            let report = check_inputs(&[x, w, b], 1e-6, |g, v| {
                let y = g.conv2d(v[0], v[1], Some(v[2]), spec)?;
                g.weighted_sum(y, &probe)
            })
            .unwrap();
            assert_ok(&report);
        }
    }

    #[test]
    fn conv_matches_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = rand_tensor(&mut rng, [1, 2, 5, 5]);
        let w = rand_tensor(&mut rng, [3, 2, 3, 3]);
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let (xv, wv) = (g.input(x.clone()), g.input(w.clone()));
        let y = g.conv2d(xv, wv, None, ConvSpec::strided(2, 1)).unwrap();
        let out = g.value(y);
        assert_eq!(out.shape(), [1, 3, 3, 3]);
        for co in 0..3 {
            for oy in 0..3 {
                for ox in 0..3 {
                    let mut acc = 0.0;
                    for ci in 0..2 {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let iy = (oy * 2 + ky) as isize - 1;
                                let ix = (ox * 2 + kx) as isize - 1;
                                if (0..5).contains(&iy) && (0..5).contains(&ix) {
                                    acc += w.data()[((co * 2 + ci) * 3 + ky) * 3 + kx]
                                        * x.data()[(ci * 5 + iy as usize) * 5 + ix as usize];
                                }
                            }
                        }
                    }
                    assert!((out.data()[(co * 3 + oy) * 3 + ox] - acc).abs() < 1e-12);
                }
            }
        }
        assert_eq!(g.macs(), 3 * 2 * 9 * 9);
    }

    #[test]
    fn elementwise_and_structural_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = rand_tensor(&mut rng, [2, 4, 4, 4]);
        let b = rand_tensor(&mut rng, [2, 4, 1, 1]);
        let l = rand_tensor(&mut rng, [2, 1, 4, 4]);
        let probe = rand_tensor(&mut rng, [2, 4, 4, 4]);
        let report = check_inputs(&[a.clone(), b, l], 1e-6, |g, v| {
            let m = g.mul(v[0], v[1])?;
            let s = g.sub(m, v[2])?;
            let e = g.gelu(s);
            let sg = g.sigmoid(v[0]);
            let p = g.add(e, sg)?;
            let sm = g.softmax_c(p);
            let q = g.scale(sm, 3.0);
            g.weighted_sum(q, &probe)
        })
        .unwrap();
        assert_ok(&report);

        // a: 2x4x4x4 -> dwt 2x16x2x2 -> shuffle 2x6x4x4 ...
        let probe2 = rand_tensor(&mut rng, [2, 2, 4, 4]);
        let report = check_inputs(&[a], 1e-6, |g, v| {
            let d = g.dwt(v[0])?;
            let hf = g.slice_c(d, 4, 8)?;
            let cat = g.concat_c(&[hf, d])?;
            let sh = g.pixel_shuffle(cat, 2)?;
            let sl = g.slice_c(sh, 1, 2)?;
            let id = g.idwt(d)?;
            let idp = g.avg_pool(id, 2)?;
            let mx = g.max_hw(idp);
            let mx2 = g.slice_c(mx, 0, 2)?;
            let mn = g.mean_hw(sl);
            let w = g.mul(sl, mx2)?;
            let w2 = g.mul(w, mn)?;
            let r = g.relu(w2);
            let r2 = g.add(r, w2)?;
            g.weighted_sum(r2, &probe2)
        })
        .unwrap();
        assert_ok(&report);
    }

    #[test]
    fn layer_norm_and_attention_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_tensor(&mut rng, [2, 4, 3, 3]);
        let gm = rand_tensor(&mut rng, [1, 4, 1, 1]);
        let bt = rand_tensor(&mut rng, [1, 4, 1, 1]);
        let probe = rand_tensor(&mut rng, [2, 4, 3, 3]);
        let report = check_inputs(&[x.clone(), gm, bt], 1e-6, |g, v| {
            let y = g.layer_norm_c(v[0], v[1], v[2], 1e-6)?;
            g.weighted_sum(y, &probe)
        })
        .unwrap();
        assert_ok(&report);

        let k = rand_tensor(&mut rng, [2, 4, 2, 3]);
        let vv = rand_tensor(&mut rng, [2, 4, 2, 3]);
        let report = check_inputs(&[x, k, vv], 1e-6, |g, v| {
            let y = g.attention(v[0], v[1], v[2], 2)?;
            g.weighted_sum(y, &probe)
        })
        .unwrap();
        assert_ok(&report);
    }

    #[test]
    fn l1_and_clamp_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = rand_tensor(&mut rng, [1, 3, 4, 4]);
        let target = rand_tensor(&mut rng, [1, 3, 4, 4]).map(|v| v + 3.0);
        let report = check_inputs(&[x], 1e-6, |g, v| {
            let c = g.clamp(v[0], -0.5, 0.5);
            let o = g.add_scalar(c, 0.1);
            g.l1_loss(o, &target)
        })
        .unwrap();
        assert_ok(&report);
    }
}
