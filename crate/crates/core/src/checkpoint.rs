//! Versioned binary container for named parameter arrays.
//!
//! Layout, all integers little-endian:
//! `b"TGCK"`, `u32` version, `u16` kind length + UTF-8 kind, 32-byte config
//! fingerprint, `u32` entry count, then per entry `u16` name length + name,
//! `u8` rank, `u64` per dimension and the values as `f64`.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::discriminator::Discriminator;
use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::generator::Generator;
use crate::optim::Optimizer;
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::training::{critic_running_stats, load_critic_running_stats};

pub const MAGIC: [u8; 4] = *b"TGCK";
pub const VERSION: u32 = 1;

pub const KIND_GENERATOR: &str = "generator";
pub const KIND_ENCODER: &str = "encoder";
pub const KIND_CRITIC: &str = "critic";
pub const KIND_OPTIMIZER: &str = "optimizer";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub fingerprint: [u8; 32],
    pub entries: ParamStore,
}

fn ckpt_err(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| ckpt_err("truncated data"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    fn string(&mut self) -> Result<String> {
        let n = u16::from_le_bytes(self.array()?) as usize;
        core::str::from_utf8(self.take(n)?).map(ToString::to_string).map_err(|_| ckpt_err("invalid UTF-8 in name"))
    }
}

fn push_str(out: &mut Vec<u8>, s: &str) -> Result<()> {
    let n = u16::try_from(s.len()).map_err(|_| ckpt_err(format!("name too long: {} bytes", s.len())))?;
    out.extend_from_slice(&n.to_le_bytes());
    out.extend_from_slice(s.as_bytes());
    Ok(())
}

impl Checkpoint {
    pub fn new(kind: &str, fingerprint: [u8; 32], entries: ParamStore) -> Self {
        Self { kind: kind.to_string(), fingerprint, entries }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::with_capacity(64 + 8 * self.entries.num_values());
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        push_str(&mut out, &self.kind)?;
        out.extend_from_slice(&self.fingerprint);
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, t) in self.entries.iter() {
            push_str(&mut out, name)?;
            let rank = u8::try_from(t.shape().len()).map_err(|_| ckpt_err("rank above 255"))?;
            out.push(rank);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.array::<4>()? != MAGIC {
            return Err(ckpt_err("bad magic; not a checkpoint file"));
        }
        let version = u32::from_le_bytes(r.array()?);
        if version != VERSION {
            return Err(ckpt_err(format!("unsupported version {version}, expected {VERSION}")));
        }
        let kind = r.string()?;
        let fingerprint = r.array::<32>()?;
        let count = u32::from_le_bytes(r.array()?) as usize;
        let mut entries = ParamStore::new();
        for _ in 0..count {
            let name = r.string()?;
            if entries.find(&name).is_some() {
                return Err(ckpt_err(format!("duplicate entry '{name}'")));
            }
            let rank = r.array::<1>()?[0] as usize;
            let mut shape = Vec::with_capacity(rank);
            let mut n: usize = 1;
            for _ in 0..rank {
                let d = usize::try_from(u64::from_le_bytes(r.array()?)).map_err(|_| ckpt_err("dimension overflow"))?;
                n = n.checked_mul(d).ok_or_else(|| ckpt_err("size overflow"))?;
                shape.push(d);
            }
            let bytes = r.take(n.checked_mul(8).ok_or_else(|| ckpt_err("size overflow"))?)?;
            let data = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
            entries.add(&name, Tensor::from_vec(&shape, data)?);
        }
        if r.pos != buf.len() {
            return Err(ckpt_err(format!("{} trailing bytes", buf.len() - r.pos)));
        }
        Ok(Self { kind, fingerprint, entries })
    }

    /// Fails unless the kind and fingerprint match.
    pub fn expect(&self, kind: &str, config: &ModelConfig) -> Result<()> {
        if self.kind != kind {
            return Err(ckpt_err(format!("expected a {kind} checkpoint, found '{}'", self.kind)));
        }
        if self.fingerprint != config.fingerprint() {
            return Err(ckpt_err(format!("{kind} checkpoint was written for a different model configuration")));
        }
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.entries.find(name).map(|id| self.entries.get(id)).ok_or_else(|| ckpt_err(format!("missing entry '{name}'")))
    }
}

/// Overwrites every tensor of `dst` from `src`; every name must exist with the same shape.
pub fn load_exact(dst: &mut ParamStore, src: &ParamStore) -> Result<()> {
    for name in dst.names().to_vec() {
        let id = src.find(&name).ok_or_else(|| ckpt_err(format!("missing entry '{name}'")))?;
        let dst_id = dst.find(&name).expect("own name");
        if src.get(id).shape() != dst.get(dst_id).shape() {
            return Err(ckpt_err(format!("entry '{name}' has shape {:?}, expected {:?}", src.get(id).shape(), dst.get(dst_id).shape())));
        }
        *dst.get_mut(dst_id) = src.get(id).clone();
    }
    Ok(())
}

fn with_extra(params: &ParamStore, extra: &[(&str, Tensor)]) -> ParamStore {
    let mut p = params.clone();
    for (name, t) in extra {
        p.add(name, t.clone());
    }
    p
}

pub fn generator_checkpoint(gen: &Generator) -> Result<Checkpoint> {
    let w_avg = Tensor::from_vec(&[gen.w_avg.len()], gen.w_avg.clone())?;
    Ok(Checkpoint::new(KIND_GENERATOR, gen.config().fingerprint(), with_extra(gen.params(), &[("gen.w_avg", w_avg)])))
}

pub fn load_generator(config: &ModelConfig, ckpt: &Checkpoint) -> Result<Generator> {
    ckpt.expect(KIND_GENERATOR, config)?;
    let mut gen = Generator::new(config, &mut ChaCha8Rng::seed_from_u64(0))?;
    load_exact(gen.params_mut(), &ckpt.entries)?;
    let w = ckpt.get("gen.w_avg")?;
    if w.len() != config.w_dim {
        return Err(ckpt_err(format!("w_avg has {} values, expected {}", w.len(), config.w_dim)));
    }
    gen.w_avg = w.data().to_vec();
    Ok(gen)
}

pub fn encoder_checkpoint(enc: &Encoder) -> Checkpoint {
    Checkpoint::new(KIND_ENCODER, enc.config().fingerprint(), enc.params().clone())
}

pub fn load_encoder(config: &ModelConfig, ckpt: &Checkpoint) -> Result<Encoder> {
    ckpt.expect(KIND_ENCODER, config)?;
    let mut enc = Encoder::new(config, &alloc::vec![0.0; config.w_dim], &mut ChaCha8Rng::seed_from_u64(0))?;
    load_exact(enc.params_mut(), &ckpt.entries)?;
    Ok(enc)
}

pub fn critic_checkpoint(critic: &Discriminator, config: &ModelConfig) -> Checkpoint {
    let mut p = critic.params().clone();
    for (name, t) in critic_running_stats(critic).iter() {
        p.add(name, t.clone());
    }
    Checkpoint::new(KIND_CRITIC, config.fingerprint(), p)
}

/// Rebuilds a critic; input channels and widths are read from the stored weights.
pub fn load_critic(config: &ModelConfig, ckpt: &Checkpoint) -> Result<Discriminator> {
    ckpt.expect(KIND_CRITIC, config)?;
    let shape = |i: usize| -> Result<Vec<usize>> {
        let s = ckpt.get(&format!("disc.conv{i}.w"))?.shape().to_vec();
        if s.len() != 4 {
            return Err(ckpt_err(format!("disc.conv{i}.w must be 4-d")));
        }
        Ok(s)
    };
    let in_channels = shape(0)?[1];
    let widths = [shape(0)?[0], shape(1)?[0], shape(2)?[0], shape(3)?[0]];
    let mut critic = Discriminator::new(in_channels, widths, &mut ChaCha8Rng::seed_from_u64(0));
    load_exact(critic.params_mut(), &ckpt.entries)?;
    load_critic_running_stats(&mut critic, &ckpt.entries)?;
    Ok(critic)
}

pub fn optimizer_checkpoint(opt: &Optimizer, params: &ParamStore, config: &ModelConfig) -> Checkpoint {
    Checkpoint::new(KIND_OPTIMIZER, config.fingerprint(), opt.state(params))
}

pub fn load_optimizer(opt: &mut Optimizer, params: &ParamStore, config: &ModelConfig, ckpt: &Checkpoint) -> Result<()> {
    ckpt.expect(KIND_OPTIMIZER, config)?;
    opt.load_state(params, &ckpt.entries)
}
