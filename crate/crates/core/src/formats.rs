//! Versioned little-endian binary formats for checkpoints, motions and
//! trajectory datasets.
//!
//! Every file starts with an ASCII magic string. Integers are unsigned
//! little-endian; real values are little-endian `f64`.
//!
//! `DLALIGN-CKPT/1`:
//! `activation u8 | n_sizes u32 | sizes u32* | n_params u64 | params f64* |
//! n_extra u64 | extra f64* | has_opt u8 | [t u64 | m f64* | v f64*]`
//!
//! `DLALIGN-MOT/1`:
//! `dt f64 | n_links u32 | n_frames u32 | difficulty u8 | name_len u16 | name |
//! per frame: q f64[n] | qd f64[n] | body f64[4n]`
//!
//! `DLALIGN-TRAJ/1`:
//! `dt f64 | n_links u32 | hash_len u16 | params_hash | provenance u8 |
//! n_episodes u32 | per episode: name_len u16 | name | failed u8 |
//! n_steps u32 | prime f64[n] | states f64[(n_steps+1)·2n] | actions f64[n_steps·n]`

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::neural::{Activation, Adam, GaussianPolicy, Mlp, MlpSpec};
use crate::ppo::{Agent, ValueNorm};
use crate::reference::{Difficulty, ReferenceMotion};

pub const CKPT_MAGIC: &[u8] = b"DLALIGN-CKPT/1";
pub const MOT_MAGIC: &[u8] = b"DLALIGN-MOT/1";
pub const TRAJ_MAGIC: &[u8] = b"DLALIGN-TRAJ/1";

#[derive(Default)]
pub(crate) struct ByteWriter {
    pub buf: Vec<u8>,
}

impl ByteWriter {
    pub fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }
    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    pub fn u16(&mut self, v: u16) {
        self.bytes(&v.to_le_bytes());
    }
    pub fn u32(&mut self, v: u32) {
        self.bytes(&v.to_le_bytes());
    }
    pub fn u64(&mut self, v: u64) {
        self.bytes(&v.to_le_bytes());
    }
    pub fn f64(&mut self, v: f64) {
        self.bytes(&v.to_le_bytes());
    }
    pub fn f64s(&mut self, vs: &[f64]) {
        for v in vs {
            self.f64(*v);
        }
    }
    pub fn str16(&mut self, s: &str) -> Result<()> {
        let len = u16::try_from(s.len())
            .map_err(|_| Error::InvalidArgument(format!("string too long: {} bytes", s.len())))?;
        self.u16(len);
        self.bytes(s.as_bytes());
        Ok(())
    }
}

pub(crate) struct ByteReader<'a> {
    kind: &'static str,
    data: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub fn new(kind: &'static str, data: &'a [u8], magic: &[u8]) -> Result<Self> {
        if data.len() < magic.len() || &data[..magic.len()] != magic {
            return Err(Error::format(kind, "bad magic"));
        }
        Ok(Self {
            kind,
            data,
            pos: magic.len(),
        })
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.data.len())
            .ok_or_else(|| Error::format(self.kind, format!("truncated at byte {}", self.pos)))?;
        let s = &self.data[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    pub fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    pub fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let remaining = (self.data.len() - self.pos) / 8;
        if n > remaining {
            return Err(Error::format(self.kind, format!("{n} values claimed, {remaining} present")));
        }
        (0..n).map(|_| self.f64()).collect()
    }
    pub fn str16(&mut self) -> Result<String> {
        let n = self.u16()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::format(self.kind, "string is not utf-8"))
    }
    pub fn finish(&self) -> Result<()> {
        if self.pos != self.data.len() {
            return Err(Error::format(
                self.kind,
                format!("{} trailing bytes", self.data.len() - self.pos),
            ));
        }
        Ok(())
    }
    pub fn fail(&self, reason: impl Into<String>) -> Error {
        Error::format(self.kind, reason)
    }
}

/// A network, an auxiliary vector (such as log standard deviations), and
/// optionally the optimizer state for the network parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub net: Mlp,
    pub extra: Vec<f64>,
    pub optimizer: Option<Adam>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::default();
        w.bytes(CKPT_MAGIC);
        w.u8(match self.net.spec.activation {
            Activation::Tanh => 0,
            Activation::Relu => 1,
        });
        w.u32(self.net.spec.layer_sizes.len() as u32);
        for s in &self.net.spec.layer_sizes {
            w.u32(*s as u32);
        }
        w.u64(self.net.params.len() as u64);
        w.f64s(&self.net.params);
        w.u64(self.extra.len() as u64);
        w.f64s(&self.extra);
        match &self.optimizer {
            None => w.u8(0),
            Some(opt) => {
                w.u8(1);
                w.u64(opt.t);
                w.f64s(&opt.m);
                w.f64s(&opt.v);
            }
        }
        w.buf
    }

    pub fn from_bytes(data: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new("checkpoint", data, CKPT_MAGIC)?;
        let activation = match r.u8()? {
            0 => Activation::Tanh,
            1 => Activation::Relu,
            a => return Err(r.fail(format!("unknown activation code {a}"))),
        };
        let n_sizes = r.u32()? as usize;
        if n_sizes > 64 {
            return Err(r.fail(format!("{n_sizes} layers")));
        }
        let sizes = (0..n_sizes)
            .map(|_| r.u32().map(|s| s as usize))
            .collect::<Result<Vec<_>>>()?;
        let spec = MlpSpec::new(sizes, activation).map_err(|e| r.fail(e.to_string()))?;
        let n = r.u64()? as usize;
        if n != spec.param_count() {
            return Err(r.fail(format!("flat length {n} does not match spec ({})", spec.param_count())));
        }
        let params = r.f64s(n)?;
        let n_extra = r.u64()? as usize;
        let extra = r.f64s(n_extra)?;
        let optimizer = match r.u8()? {
            0 => None,
            1 => {
                let t = r.u64()?;
                let mut opt = Adam::new(n);
                opt.t = t;
                opt.m = r.f64s(n)?;
                opt.v = r.f64s(n)?;
                Some(opt)
            }
            f => return Err(r.fail(format!("bad optimizer flag {f}"))),
        };
        r.finish()?;
        let net = Mlp::from_params(spec, params).map_err(|e| r.fail(e.to_string()))?;
        Ok(Self {
            net,
            extra,
            optimizer,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

/// Writes `{stem}.actor.ckpt` (extra: log std) and `{stem}.critic.ckpt`
/// (extra: value normalizer state) into `dir`.
pub fn save_agent(agent: &Agent, dir: &Path, stem: &str) -> Result<()> {
    fs::create_dir_all(dir)?;
    Checkpoint {
        net: agent.policy.mean.clone(),
        extra: agent.policy.log_std.clone(),
        optimizer: None,
    }
    .save(&dir.join(format!("{stem}.actor.ckpt")))?;
    Checkpoint {
        net: agent.critic.clone(),
        extra: agent.value_norm.to_vec(),
        optimizer: None,
    }
    .save(&dir.join(format!("{stem}.critic.ckpt")))
}

pub fn load_agent(dir: &Path, stem: &str) -> Result<Agent> {
    let actor = Checkpoint::load(&dir.join(format!("{stem}.actor.ckpt")))?;
    let critic = Checkpoint::load(&dir.join(format!("{stem}.critic.ckpt")))?;
    if actor.extra.len() != actor.net.output_dim() {
        return Err(Error::format("checkpoint", "log std length does not match actor output"));
    }
    let mut policy = GaussianPolicy::new(actor.net, 0.0);
    policy.log_std = actor.extra;
    Ok(Agent {
        policy,
        critic: critic.net,
        value_norm: ValueNorm::from_slice(&critic.extra)?,
    })
}

pub fn motion_to_bytes(m: &ReferenceMotion) -> Result<Vec<u8>> {
    m.validate()?;
    let mut w = ByteWriter::default();
    w.bytes(MOT_MAGIC);
    w.f64(m.dt);
    w.u32(m.n_links() as u32);
    w.u32(m.n_frames() as u32);
    w.u8(m.difficulty.code());
    w.str16(&m.name)?;
    for k in 0..m.n_frames() {
        w.f64s(&m.q_ref[k]);
        w.f64s(&m.qd_ref[k]);
        for p in &m.body_ref[k] {
            w.f64s(p);
        }
    }
    Ok(w.buf)
}

pub fn motion_from_bytes(data: &[u8]) -> Result<ReferenceMotion> {
    let mut r = ByteReader::new("motion", data, MOT_MAGIC)?;
    let dt = r.f64()?;
    let n = r.u32()? as usize;
    let frames = r.u32()? as usize;
    let difficulty =
        Difficulty::from_code(r.u8()?).ok_or_else(|| r.fail("unknown difficulty code"))?;
    let name = r.str16()?;
    if n == 0 || n > crate::dynamics::MAX_LINKS {
        return Err(r.fail(format!("{n} links")));
    }
    let mut m = ReferenceMotion {
        name,
        difficulty,
        dt,
        q_ref: Vec::new(),
        qd_ref: Vec::new(),
        body_ref: Vec::new(),
    };
    for _ in 0..frames {
        m.q_ref.push(r.f64s(n)?);
        m.qd_ref.push(r.f64s(n)?);
        let body = r.f64s(4 * n)?;
        m.body_ref.push(body.chunks_exact(2).map(|c| [c[0], c[1]]).collect());
    }
    r.finish()?;
    m.validate().map_err(|e| r.fail(e.to_string()))?;
    Ok(m)
}

pub fn save_motion(m: &ReferenceMotion, path: &Path) -> Result<()> {
    fs::write(path, motion_to_bytes(m)?)?;
    Ok(())
}

pub fn load_motion(path: &Path) -> Result<ReferenceMotion> {
    motion_from_bytes(&fs::read(path)?)
}
