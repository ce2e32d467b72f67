//! Optimization recipe: Adam on an L1 loss, cosine schedule with warm
//! restarts, global L1-norm gradient clipping and a progressive patch
//! schedule with random crops and horizontal flips.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::Graph;
use crate::error::{Error, Result};
use crate::image::{stack, ImagePlane};
use crate::kv::KvMap;
use crate::metrics::{MetricReport, SampleMetrics};
use crate::model::checkpoint::{Checkpoint, OptimizerState, RngState};
use crate::model::Model;
use crate::synthdata::SceneTriplet;
use crate::tensor::Tensor;

/// Mean absolute difference over all elements.
pub fn l1_loss(pred: &ImagePlane, reference: &ImagePlane) -> Result<f64> {
    pred.require_same_shape(reference, "l1 loss")?;
    let n = pred.data().len() as f64;
    Ok(pred.data().iter().zip(reference.data()).map(|(a, b)| (a - b).abs()).sum::<f64>() / n)
}

/// Cosine decay restarted `periods` times over `total` steps.
///
/// Each period decays from `base_lr` to 0 along a half cosine; the first
/// step after a period boundary restarts at the top.
pub fn cosine_lr(step: usize, total: usize, base_lr: f64, periods: usize) -> f64 {
    if step == 0 || total == 0 || periods == 0 {
        return base_lr;
    }
    let u = step.min(total) as f64 * periods as f64 / total as f64;
    let k = u.ceil() - 1.0;
    let local = u - k;
    base_lr * 0.5 * (1.0 + (std::f64::consts::PI * local).cos())
}

pub fn gradient_l1(grads: &[Tensor]) -> f64 {
    grads.iter().map(Tensor::l1_norm).sum()
}

/// Rescales all gradients together when their summed absolute value
/// exceeds `clip`. Returns the norm before clipping.
pub fn clip_gradients(grads: &mut [Tensor], clip: f64) -> f64 {
    let total = gradient_l1(grads);
    if total > clip {
        let s = clip / total;
        for g in grads.iter_mut() {
            g.scale(s);
        }
    }
    total
}

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub state: OptimizerState,
}

impl Adam {
    pub fn new(params: &[Tensor]) -> Self {
        let zeros: Vec<Tensor> = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, state: OptimizerState { t: 0, m: zeros.clone(), v: zeros } }
    }

    pub fn from_state(state: OptimizerState) -> Self {
        Self { state, ..Self::new(&[]) }
    }

    pub fn update(&mut self, params: &mut [Tensor], grads: &[Tensor], lr: f64) {
        let st = &mut self.state;
        st.t += 1;
        let bc1 = 1.0 - self.beta1.powi(st.t as i32);
        let bc2 = 1.0 - self.beta2.powi(st.t as i32);
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(st.m.iter_mut().zip(st.v.iter_mut())) {
            let (p, g, m, v) = (p.data_mut(), g.data(), m.data_mut(), v.data_mut());
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                p[i] -= lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + self.eps);
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub total_steps: usize,
    pub batch_size: usize,
    /// `(first_step, patch_size)` pairs with ascending steps and sizes.
    pub patch_schedule: Vec<(usize, usize)>,
    pub clip_value: f64,
    pub cosine_periods: usize,
    pub seed: u64,
    /// Checkpoint cadence in steps; 0 disables periodic checkpoints.
    pub checkpoint_every: usize,
    pub flip: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            total_steps: 1000,
            batch_size: 4,
            patch_schedule: vec![(0, 32), (400, 64)],
            clip_value: 0.01,
            cosine_periods: 2,
            seed: 0,
            checkpoint_every: 0,
            flip: true,
        }
    }
}

pub fn format_schedule(s: &[(usize, usize)]) -> String {
    s.iter().map(|(a, b)| format!("{a}:{b}")).collect::<Vec<_>>().join(",")
}

pub fn parse_schedule(text: &str) -> Result<Vec<(usize, usize)>> {
    text.split(',')
        .filter(|p| !p.trim().is_empty())
        .map(|p| {
            let (a, b) = p.split_once(':').ok_or_else(|| Error::config(format!("bad schedule entry `{p}`")))?;
            let parse = |s: &str| s.trim().parse::<usize>().map_err(|_| Error::config(format!("bad schedule entry `{p}`")));
            Ok((parse(a)?, parse(b)?))
        })
        .collect()
}

impl TrainConfig {
    pub fn validate(&self, size_multiple: usize) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if self.batch_size == 0 || self.cosine_periods == 0 {
            return Err(Error::config("batch_size and cosine_periods must be positive"));
        }
        if !(self.clip_value > 0.0) {
            return Err(Error::config("clip_value must be positive"));
        }
        let s = &self.patch_schedule;
        if s.is_empty() || s[0].0 != 0 {
            return Err(Error::config("patch schedule must start at step 0"));
        }
        for w in s.windows(2) {
            if w[1].0 <= w[0].0 || w[1].1 <= w[0].1 {
                return Err(Error::config("patch schedule steps and sizes must be strictly ascending"));
            }
        }
        if let Some(&(_, p)) = s.iter().find(|(_, p)| *p == 0 || p % size_multiple != 0) {
            return Err(Error::config(format!("patch size {p} is not a multiple of {size_multiple}")));
        }
        Ok(())
    }

    pub fn patch_at(&self, step: usize) -> usize {
        self.patch_schedule.iter().take_while(|(s, _)| *s <= step).last().map_or(self.patch_schedule[0].1, |e| e.1)
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        cosine_lr(step, self.total_steps, self.lr, self.cosine_periods)
    }

    pub fn to_kv(&self) -> KvMap {
        let mut kv = KvMap::new();
        kv.set("lr", self.lr);
        kv.set("total_steps", self.total_steps);
        kv.set("batch_size", self.batch_size);
        kv.set("patch_schedule", format_schedule(&self.patch_schedule));
        kv.set("clip_value", self.clip_value);
        kv.set("cosine_periods", self.cosine_periods);
        kv.set("seed", self.seed);
        kv.set("checkpoint_every", self.checkpoint_every);
        kv.set("flip", self.flip);
        kv
    }

    pub fn from_kv(kv: &KvMap) -> Result<Self> {
        let d = Self::default();
        Ok(Self {
            lr: kv.parse_or("lr", d.lr)?,
            total_steps: kv.parse_or("total_steps", d.total_steps)?,
            batch_size: kv.parse_or("batch_size", d.batch_size)?,
            patch_schedule: match kv.get("patch_schedule") {
                Some(t) => parse_schedule(t)?,
                None => d.patch_schedule,
            },
            clip_value: kv.parse_or("clip_value", d.clip_value)?,
            cosine_periods: kv.parse_or("cosine_periods", d.cosine_periods)?,
            seed: kv.parse_or("seed", d.seed)?,
            checkpoint_every: kv.parse_or("checkpoint_every", d.checkpoint_every)?,
            flip: kv.parse_or("flip", d.flip)?,
        })
    }
}

/// Input/target pair: the colour-lit image and its ambient reference.
#[derive(Clone, Debug)]
pub struct TrainPair {
    pub id: String,
    pub input: ImagePlane,
    pub target: ImagePlane,
}

impl From<&SceneTriplet> for TrainPair {
    fn from(t: &SceneTriplet) -> Self {
        Self { id: t.id(), input: t.color_lit.clone(), target: t.ambient.clone() }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainRecord {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub patch_size: usize,
    pub grad_l1: f64,
    pub grad_l1_clipped: f64,
    pub wall_time: f64,
}

pub fn history_csv(records: &[TrainRecord]) -> String {
    let mut s = String::from("step,lr,loss,patch_size,wall_time,grad_l1,grad_l1_clipped\n");
    for r in records {
        let _ = writeln!(
            s,
            "{},{},{},{},{:.3},{},{}",
            r.step, r.lr, r.loss, r.patch_size, r.wall_time, r.grad_l1, r.grad_l1_clipped
        );
    }
    s
}

pub struct Trainer {
    pub model: Model,
    pub config: TrainConfig,
    pub adam: Adam,
    rng: ChaCha8Rng,
    step: usize,
    pub history: Vec<TrainRecord>,
    started: Instant,
}

impl Trainer {
    pub fn new(model: Model, config: TrainConfig) -> Result<Self> {
        config.validate(model.config().size_multiple())?;
        let adam = Adam::new(model.params().values());
        let rng = ChaCha8Rng::seed_from_u64(config.seed);
        Ok(Self { model, config, adam, rng, step: 0, history: Vec::new(), started: Instant::now() })
    }

    /// Resumes from a checkpoint written by [`Trainer::checkpoint`].
    pub fn resume(ck: &Checkpoint) -> Result<Self> {
        let model = ck.to_model()?;
        let config = TrainConfig::from_kv(&ck.config.section("train"))?;
        config.validate(model.config().size_multiple())?;
        let adam = match &ck.optimizer {
            Some(s) => Adam::from_state(s.clone()),
            None => Adam::new(model.params().values()),
        };
        let rng = match &ck.rng {
            Some(r) => r.restore(),
            None => return Err(Error::format("checkpoint lacks generator state, cannot resume")),
        };
        Ok(Self { model, config, adam, rng, step: ck.step as usize, history: Vec::new(), started: Instant::now() })
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::from_model(&self.model);
        ck.config.merge_prefixed("train", &self.config.to_kv());
        ck.optimizer = Some(self.adam.state.clone());
        ck.rng = Some(RngState::capture(&self.rng));
        ck.step = self.step as u64;
        ck
    }

    fn sample_batch(&mut self, data: &[TrainPair], patch: usize) -> Result<(Tensor, Tensor)> {
        let mut xs = Vec::with_capacity(self.config.batch_size);
        let mut ys = Vec::with_capacity(self.config.batch_size);
        for _ in 0..self.config.batch_size {
            let pair = &data[self.rng.random_range(0..data.len())];
            let (h, w, _) = pair.input.dims();
            if h < patch || w < patch {
                return Err(Error::config(format!("patch {patch} larger than sample `{}` ({h}x{w})", pair.id)));
            }
            let y0 = self.rng.random_range(0..=h - patch);
            let x0 = self.rng.random_range(0..=w - patch);
            let flip = self.config.flip && self.rng.random_bool(0.5);
            let mut x = pair.input.crop(y0, x0, patch, patch)?;
            let mut y = pair.target.crop(y0, x0, patch, patch)?;
            if flip {
                x = x.flip_horizontal();
                y = y.flip_horizontal();
            }
            xs.push(x);
            ys.push(y);
        }
        Ok((stack(&xs)?, stack(&ys)?))
    }

    /// One optimizer step.
    pub fn train_step(&mut self, data: &[TrainPair]) -> Result<TrainRecord> {
        if data.is_empty() {
            return Err(Error::config("training set is empty"));
        }
        let patch = self.config.patch_at(self.step);
        let (x, y) = self.sample_batch(data, patch)?;
        let prep = self.model.prepare(&x)?;
        let (loss, mut grads) = {
            let mut g = Graph::new(self.model.params());
            let out = self.model.forward_graph(&mut g, &prep)?;
            let l = g.l1_loss(out.unclamped, &y)?;
            let loss = g.value(l).item();
            (loss, g.backward(l).for_params(self.model.params()))
        };
        if !loss.is_finite() || !grads.iter().all(Tensor::all_finite) {
            return Err(Error::Numerical(format!("non-finite loss or gradient at step {}", self.step)));
        }
        let grad_l1 = clip_gradients(&mut grads, self.config.clip_value);
        let lr = self.config.lr_at(self.step);
        self.adam.update(self.model.params_mut().values_mut(), &grads, lr);
        let rec = TrainRecord {
            step: self.step,
            lr,
            loss,
            patch_size: patch,
            grad_l1,
            grad_l1_clipped: gradient_l1(&grads),
            wall_time: self.started.elapsed().as_secs_f64(),
        };
        self.step += 1;
        self.history.push(rec.clone());
        Ok(rec)
    }

    /// Trains until `until` (capped at the configured total). Periodic
    /// checkpoints go to `checkpoint_dir/step_XXXXXX.ckpt`; a numerical
    /// failure leaves `checkpoint_dir/diagnostic.ckpt` behind.
    pub fn run_until(&mut self, data: &[TrainPair], until: usize, checkpoint_dir: Option<&Path>) -> Result<()> {
        let until = until.min(self.config.total_steps);
        while self.step < until {
            match self.train_step(data) {
                Ok(_) => {}
                Err(e @ Error::Numerical(_)) => {
                    if let Some(dir) = checkpoint_dir {
                        self.checkpoint().save(&dir.join("diagnostic.ckpt"))?;
                    }
                    return Err(e);
                }
                Err(e) => return Err(e),
            }
            if let Some(dir) = checkpoint_dir {
                let every = self.config.checkpoint_every;
                if every > 0 && self.step % every == 0 {
                    self.checkpoint().save(&checkpoint_path(dir, self.step))?;
                }
            }
        }
        Ok(())
    }

    pub fn run(&mut self, data: &[TrainPair], checkpoint_dir: Option<&Path>) -> Result<()> {
        self.run_until(data, self.config.total_steps, checkpoint_dir)
    }
}

pub fn checkpoint_path(dir: &Path, step: usize) -> PathBuf {
    dir.join(format!("step_{step:06}.ckpt"))
}

/// Model and unprocessed-input metrics over a set of pairs.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub model: MetricReport,
    pub unprocessed: MetricReport,
}

pub fn evaluate(model: &Model, pairs: &[TrainPair]) -> Result<Evaluation> {
    let mut m = Vec::with_capacity(pairs.len());
    let mut u = Vec::with_capacity(pairs.len());
    for p in pairs {
        let out = model.forward(&p.input)?;
        m.push(SampleMetrics::compute(&p.id, &out.restored, &p.target)?);
        u.push(SampleMetrics::compute(&p.id, &p.input, &p.target)?);
    }
    Ok(Evaluation { model: MetricReport::from_samples(m), unprocessed: MetricReport::from_samples(u) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, Variant};

    #[test]
    fn loss_examples() {
        let a = ImagePlane::filled(4, 4, 3, 0.5).unwrap();
        let b = ImagePlane::filled(4, 4, 3, 0.75).unwrap();
        assert_eq!(l1_loss(&a, &a).unwrap(), 0.0);
        assert_eq!(l1_loss(&a, &b).unwrap(), 0.25);
        assert!(l1_loss(&a, &ImagePlane::filled(4, 5, 3, 0.0).unwrap()).is_err());
    }

    #[test]
    fn schedule_points() {
        let base = 2e-4;
        assert_eq!(cosine_lr(0, 1000, base, 2), base);
        assert!(cosine_lr(500, 1000, base, 2).abs() < 1e-20);
        assert!((cosine_lr(250, 1000, base, 2) - base / 2.0).abs() < 1e-18);
        assert!(cosine_lr(1000, 1000, base, 2).abs() < 1e-20);
        assert!(cosine_lr(501, 1000, base, 2) > 0.999 * base);
        assert!((cosine_lr(500, 1000, base, 1) - base / 2.0).abs() < 1e-18);
    }

    #[test]
    fn clipping_examples() {
        let mut small = vec![Tensor::full([1, 1, 1, 5], 0.001)];
        let before = small.clone();
        assert!((clip_gradients(&mut small, 0.01) - 0.005).abs() < 1e-15);
        assert_eq!(small, before);
        let mut big = vec![Tensor::full([1, 1, 2, 2], 0.25)];
        clip_gradients(&mut big, 0.01);
        assert!(big[0].data().iter().all(|v| (v - 0.0025).abs() < 1e-15));
    }

    #[test]
    fn config_validation_and_kv() {
        let mut c = TrainConfig { patch_schedule: vec![(0, 32), (200, 64)], ..Default::default() };
        c.validate(16).unwrap();
        assert_eq!(c.patch_at(199), 32);
        assert_eq!(c.patch_at(200), 64);
        assert_eq!(TrainConfig::from_kv(&c.to_kv()).unwrap(), c);
        c.patch_schedule = vec![(0, 24)];
        assert!(c.validate(16).is_err());
        c.patch_schedule = vec![(0, 64), (10, 32)];
        assert!(c.validate(16).is_err());
        c.patch_schedule = vec![(0, 32)];
        c.lr = 0.0;
        assert!(c.validate(16).is_err());
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = vec![Tensor::full([1, 1, 1, 3], 1.0)];
        let g = vec![Tensor::from_vec([1, 1, 1, 3], vec![0.5, -2.0, 0.0]).unwrap()];
        let mut adam = Adam::new(&p);
        adam.update(&mut p, &g, 0.1);
        let d = p[0].data();
        assert!((d[0] - 0.9).abs() < 1e-6 && (d[1] - 1.1).abs() < 1e-6 && d[2] == 1.0);
    }

    #[test]
    fn short_run_is_deterministic() {
        let cfg = ModelConfig::for_variant(Variant::Sf).with_width(4, 2);
        let pair = TrainPair {
            id: "a".into(),
            input: ImagePlane::from_fn(32, 32, 3, |y, x, c| ((y * 3 + x * 5 + c) % 7) as f64 / 8.0).unwrap(),
            target: ImagePlane::filled(32, 32, 3, 0.4).unwrap(),
        };
        let tc = TrainConfig { total_steps: 3, batch_size: 2, patch_schedule: vec![(0, 16)], ..Default::default() };
        let run = || {
            let mut t = Trainer::new(Model::build(cfg.clone()).unwrap(), tc.clone()).unwrap();
            t.run(std::slice::from_ref(&pair), None).unwrap();
            t.history.iter().map(|r| r.loss).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }
}
