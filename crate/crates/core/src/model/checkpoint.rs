//! Single-file checkpoint archive.
//!
//! Layout: the header line `rln2-ckpt-v1\n`, then tagged sections, each a
//! 4-byte ASCII tag, a little-endian `u64` payload length and the payload.
//! Sections: `CONF` (canonical key-value text), `PARM` (named tensors),
//! `ADAM` (optimizer moments), `RNG_` (generator state), `STEP`.

use std::io::{Read, Write};
use std::path::Path;

use rand_chacha::ChaCha8Rng;

use super::{Model, ModelConfig};
use crate::error::{Error, Result};
use crate::kv::KvMap;
use crate::tensor::Tensor;

pub const HEADER: &str = "rln2-ckpt-v1";

/// Adam moments, in parameter-store order.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub t: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

/// Exact position of a ChaCha8 stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self { seed: rng.get_seed(), stream: rng.get_stream(), word_pos: rng.get_word_pos() }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// Model settings under `model.`; other prefixes are free for callers.
    pub config: KvMap,
    pub params: Vec<(String, Tensor)>,
    pub optimizer: Option<OptimizerState>,
    pub rng: Option<RngState>,
    pub step: u64,
}

fn put_tensor(buf: &mut Vec<u8>, t: &Tensor) {
    for d in t.shape() {
        buf.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::format("checkpoint truncated"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn tensor(&mut self) -> Result<Tensor> {
        let mut shape = [0usize; 4];
        for d in &mut shape {
            *d = self.u64()? as usize;
        }
        let n: usize = shape.iter().product();
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| Error::format("tensor too large"))?)?;
        let data = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        Tensor::from_vec(shape, data)
    }

    fn tensors(&mut self) -> Result<Vec<Tensor>> {
        let n = self.u64()? as usize;
        (0..n).map(|_| self.tensor()).collect()
    }
}

impl Checkpoint {
    pub fn from_model(model: &Model) -> Self {
        let mut config = KvMap::new();
        config.merge_prefixed("model", &model.config().to_kv());
        Self {
            config,
            params: model.params().iter().map(|(_, n, t)| (n.to_string(), t.clone())).collect(),
            optimizer: None,
            rng: None,
            step: 0,
        }
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        ModelConfig::from_kv(&self.config.section("model"))
    }

    /// Rebuilds the model and overwrites every parameter from the archive.
    pub fn to_model(&self) -> Result<Model> {
        let mut model = Model::build(self.model_config()?)?;
        if self.params.len() != model.params().len() {
            return Err(Error::format(format!(
                "checkpoint has {} tensors, model expects {}",
                self.params.len(),
                model.params().len()
            )));
        }
        for (name, t) in &self.params {
            model.params_mut().assign(name, t.clone())?;
        }
        Ok(model)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(HEADER.as_bytes());
        out.push(b'\n');
        let mut section = |tag: &[u8; 4], payload: Vec<u8>| {
            out.extend_from_slice(tag);
            out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
            out.extend_from_slice(&payload);
        };
        section(b"CONF", self.config.to_text().into_bytes());
        let mut p = Vec::new();
        p.extend_from_slice(&(self.params.len() as u64).to_le_bytes());
        for (name, t) in &self.params {
            p.extend_from_slice(&(name.len() as u64).to_le_bytes());
            p.extend_from_slice(name.as_bytes());
            put_tensor(&mut p, t);
        }
        section(b"PARM", p);
        if let Some(opt) = &self.optimizer {
            let mut a = opt.t.to_le_bytes().to_vec();
            for set in [&opt.m, &opt.v] {
                a.extend_from_slice(&(set.len() as u64).to_le_bytes());
                for t in set {
                    put_tensor(&mut a, t);
                }
            }
            section(b"ADAM", a);
        }
        if let Some(r) = &self.rng {
            let mut b = r.seed.to_vec();
            b.extend_from_slice(&r.stream.to_le_bytes());
            b.extend_from_slice(&r.word_pos.to_le_bytes());
            section(b"RNG_", b);
        }
        section(b"STEP", self.step.to_le_bytes().to_vec());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let h = HEADER.len();
        if bytes.len() <= h || &bytes[..h] != HEADER.as_bytes() || bytes[h] != b'\n' {
            return Err(Error::format(format!("missing `{HEADER}` header")));
        }
        let mut cur = Cursor { buf: bytes, pos: h + 1 };
        let mut ck = Checkpoint { config: KvMap::new(), params: Vec::new(), optimizer: None, rng: None, step: 0 };
        let mut seen_params = false;
        while cur.pos < bytes.len() {
            let tag: [u8; 4] = cur.take(4)?.try_into().expect("4 bytes");
            let len = cur.u64()? as usize;
            let payload = cur.take(len)?;
            let mut c = Cursor { buf: payload, pos: 0 };
            match &tag {
                b"CONF" => {
                    let text = std::str::from_utf8(payload).map_err(|_| Error::format("config is not utf-8"))?;
                    ck.config = KvMap::parse_text(text)?;
                }
                b"PARM" => {
                    let n = c.u64()? as usize;
                    for _ in 0..n {
                        let len = c.u64()? as usize;
                        let name = std::str::from_utf8(c.take(len)?)
                            .map_err(|_| Error::format("parameter name is not utf-8"))?
                            .to_string();
                        ck.params.push((name, c.tensor()?));
                    }
                    seen_params = true;
                }
                b"ADAM" => {
                    let t = c.u64()?;
                    let m = c.tensors()?;
                    let v = c.tensors()?;
                    ck.optimizer = Some(OptimizerState { t, m, v });
                }
                b"RNG_" => {
                    let seed = c.take(32)?.try_into().expect("32 bytes");
                    let stream = c.u64()?;
                    let word_pos = u128::from_le_bytes(c.take(16)?.try_into().expect("16 bytes"));
                    ck.rng = Some(RngState { seed, stream, word_pos });
                }
                b"STEP" => ck.step = c.u64()?,
                other => {
                    return Err(Error::format(format!("unknown section {:?}", String::from_utf8_lossy(other))))
                }
            }
        }
        if !seen_params {
            return Err(Error::format("checkpoint has no parameter section"));
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        {
            let mut f = std::fs::File::create(&tmp)?;
            f.write_all(&self.to_bytes())?;
            f.sync_all()?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Variant;
    use rand::{RngCore, SeedableRng};

    #[test]
    fn round_trip_restores_model_and_state() {
        let mut model = Model::build(ModelConfig::for_variant(Variant::Sf).with_width(4, 2).with_seed(3)).unwrap();
        model.params_mut().values_mut()[0].data_mut()[0] = 0.125;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        rng.next_u64();
        let mut ck = Checkpoint::from_model(&model);
        ck.config.set("train.lr", 0.0002);
        ck.optimizer = Some(OptimizerState {
            t: 5,
            m: model.params().values().to_vec(),
            v: model.params().values().iter().map(|t| t.map(|x| x * x)).collect(),
        });
        ck.rng = Some(RngState::capture(&rng));
        ck.step = 42;
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        assert_eq!(back, ck);
        let restored = back.to_model().unwrap();
        assert_eq!(restored.params().flatten(), model.params().flatten());
        let mut r2 = back.rng.unwrap().restore();
        assert_eq!(r2.next_u64(), rng.next_u64());
    }

    #[test]
    fn rejects_bad_archives() {
        assert!(Checkpoint::from_bytes(b"not a checkpoint").is_err());
        let model = Model::build(ModelConfig::for_variant(Variant::S).with_width(4, 1)).unwrap();
        let bytes = Checkpoint::from_model(&model).to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
    }
}
