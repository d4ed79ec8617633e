//! `PVSSL1` checkpoints: every tensor, optimizer moment and RNG word of a
//! training run, so a resumed run continues bit-exactly.
//!
//! Layout: magic, u32 version, then blocks of
//! `[u16 name length][name][u8 rank][u32 dims…][f64 payload, little endian]`
//! ending with the block `__end__`. Nothing may follow it.

use std::path::Path;

use rand_chacha::ChaCha8Rng;

use crate::config::Config;
use crate::data::formats::{read_bytes, write_atomic};
use crate::error::{Error, Result};
use crate::numcore::{OptimizerKind, OptimizerState, Tensor};

use super::config::{Stage, TrainConfig};
use super::model::{Model, MODULES};

pub const MAGIC: &[u8; 6] = b"PVSSL1";
pub const VERSION: u32 = 1;
const END: &str = "__end__";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub stage: Stage,
    /// Completed epochs of `stage`.
    pub epoch: usize,
    pub config: TrainConfig,
    pub model: Model,
    /// One per module, indexed like [`MODULES`].
    pub optimizers: Vec<OptimizerState>,
    /// Master stream of the run, positioned after the last completed epoch.
    pub rng: ChaCha8Rng,
}

struct Block {
    offset: u64,
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

fn put_block(out: &mut Vec<u8>, name: &str, shape: &[usize], data: &[f64]) {
    debug_assert_eq!(shape.iter().product::<usize>(), data.len());
    out.extend_from_slice(&(name.len() as u16).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(shape.len() as u8);
    for &d in shape {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &x in data {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

fn put_vec(out: &mut Vec<u8>, name: &str, data: &[f64]) {
    put_block(out, name, &[data.len()], data);
}

fn u32_pieces(x: u128, n: usize) -> Vec<f64> {
    (0..n).map(|i| ((x >> (32 * i)) & 0xFFFF_FFFF) as f64).collect()
}

fn from_pieces(p: &[f64]) -> u128 {
    p.iter().enumerate().fold(0u128, |acc, (i, &x)| acc | ((x as u128) << (32 * i)))
}

fn optimizer_meta(st: &OptimizerState) -> Vec<f64> {
    let (kind, a, b, c) = match st.kind {
        OptimizerKind::Adam { beta1, beta2, eps } => (0.0, beta1, beta2, eps),
        OptimizerKind::SgdMomentum { momentum } => (1.0, momentum, 0.0, 0.0),
    };
    vec![kind, a, b, c, st.lr, st.weight_decay, st.step as f64, st.first.len() as f64, st.second.len() as f64]
}

impl Checkpoint {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        put_vec(&mut out, "meta.stage", &[self.stage.number() as f64]);
        put_vec(&mut out, "meta.epoch", &[self.epoch as f64]);
        let text = self.config.to_config().to_text();
        put_vec(&mut out, "meta.config", &text.bytes().map(f64::from).collect::<Vec<_>>());
        for (k, m) in MODULES.iter().enumerate() {
            let ps = self.model.params(k);
            for (name, t) in ps.names().iter().zip(ps.values()) {
                put_block(&mut out, &format!("param.{m}.{name}"), t.shape(), t.data());
            }
            for (name, b) in ps.buffer_names().iter().zip(ps.buffers()) {
                put_vec(&mut out, &format!("buffer.{m}.{name}"), b);
            }
        }
        for (m, st) in MODULES.iter().zip(&self.optimizers) {
            put_vec(&mut out, &format!("optim.{m}.meta"), &optimizer_meta(st));
            for (i, t) in st.first.iter().enumerate() {
                put_block(&mut out, &format!("optim.{m}.first.{i}"), t.shape(), t.data());
            }
            for (i, t) in st.second.iter().enumerate() {
                put_block(&mut out, &format!("optim.{m}.second.{i}"), t.shape(), t.data());
            }
        }
        let seed = self.rng.get_seed();
        let seed_words: Vec<f64> = seed.chunks_exact(4).map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64).collect();
        put_vec(&mut out, "rng.seed", &seed_words);
        put_vec(&mut out, "rng.word_pos", &u32_pieces(self.rng.get_word_pos(), 4));
        put_vec(&mut out, "rng.stream", &u32_pieces(self.rng.get_stream() as u128, 2));
        put_vec(&mut out, END, &[]);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let blocks = read_blocks(bytes)?;
        let mut table = Table { blocks, used: Vec::new() };
        let stage = Stage::from_number(table.scalar("meta.stage")? as u8).map_err(|e| table.err("meta.stage", e.to_string()))?;
        let epoch = table.scalar("meta.epoch")? as usize;
        let text: Vec<u8> = table.vec("meta.config")?.iter().map(|&b| b as u8).collect();
        let text = String::from_utf8(text).map_err(|_| table.err("meta.config", "config echo is not UTF-8"))?;
        let config = Config::parse(&text)
            .and_then(|c| TrainConfig::from_config(&c, stage))
            .map_err(|e| table.err("meta.config", e.to_string()))?;
        let mut model = Model::new(config.model.clone(), 0).map_err(|e| table.err("meta.config", e.to_string()))?;
        for (k, m) in MODULES.iter().enumerate() {
            let names = model.params(k).names().to_vec();
            for name in names {
                let key = format!("param.{m}.{name}");
                let t = table.tensor(&key)?;
                model.params_mut(k).set(&name, t).map_err(|e| table.err(&key, e.to_string()))?;
            }
            let names = model.params(k).buffer_names().to_vec();
            for name in names {
                let key = format!("buffer.{m}.{name}");
                let v = table.vec(&key)?;
                model.params_mut(k).set_buffer(&name, v).map_err(|e| table.err(&key, e.to_string()))?;
            }
        }
        let mut optimizers = Vec::with_capacity(MODULES.len());
        for m in MODULES {
            let key = format!("optim.{m}.meta");
            let meta = table.vec(&key)?;
            if meta.len() != 9 {
                return Err(table.err(&key, format!("expected 9 values, found {}", meta.len())));
            }
            let kind = match meta[0] as u8 {
                0 => OptimizerKind::Adam { beta1: meta[1], beta2: meta[2], eps: meta[3] },
                1 => OptimizerKind::SgdMomentum { momentum: meta[1] },
                other => return Err(table.err(&key, format!("unknown optimizer kind {other}"))),
            };
            let mut st = OptimizerState::new(kind, meta[4]);
            st.weight_decay = meta[5];
            st.step = meta[6] as u64;
            st.first = (0..meta[7] as usize).map(|i| table.tensor(&format!("optim.{m}.first.{i}"))).collect::<Result<_>>()?;
            st.second = (0..meta[8] as usize).map(|i| table.tensor(&format!("optim.{m}.second.{i}"))).collect::<Result<_>>()?;
            optimizers.push(st);
        }
        let seed_words = table.vec("rng.seed")?;
        if seed_words.len() != 8 {
            return Err(table.err("rng.seed", "expected 8 words"));
        }
        let mut seed = [0u8; 32];
        for (i, w) in seed_words.iter().enumerate() {
            seed[4 * i..4 * i + 4].copy_from_slice(&(*w as u32).to_le_bytes());
        }
        let mut rng = <ChaCha8Rng as rand::SeedableRng>::from_seed(seed);
        rng.set_stream(from_pieces(&table.vec("rng.stream")?) as u64);
        rng.set_word_pos(from_pieces(&table.vec("rng.word_pos")?));
        table.finish()?;
        Ok(Self { stage, epoch, config, model, optimizers, rng })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.encode())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&read_bytes(path)?)
    }
}

fn read_blocks(bytes: &[u8]) -> Result<Vec<Block>> {
    let mut pos = 0usize;
    let fail = |offset: usize, msg: String| Error::Format { offset: offset as u64, msg };
    let take = |pos: &mut usize, n: usize, what: &str| -> Result<&[u8]> {
        if bytes.len() - *pos < n {
            return Err(fail(*pos, format!("truncated {what}: need {n} bytes, {} remain", bytes.len() - *pos)));
        }
        let s = &bytes[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };
    if take(&mut pos, MAGIC.len(), "magic")? != MAGIC {
        return Err(fail(0, "bad magic, expected PVSSL1".into()));
    }
    let version = u32::from_le_bytes(take(&mut pos, 4, "version")?.try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(fail(MAGIC.len(), format!("unsupported checkpoint version {version}, expected {VERSION}")));
    }
    let mut blocks = Vec::new();
    loop {
        let offset = pos;
        let len = u16::from_le_bytes(take(&mut pos, 2, "name length")?.try_into().expect("2 bytes")) as usize;
        let name = std::str::from_utf8(take(&mut pos, len, "name")?).map_err(|_| fail(offset + 2, "block name is not UTF-8".into()))?;
        let name = name.to_string();
        let rank = take(&mut pos, 1, "rank")?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u32::from_le_bytes(take(&mut pos, 4, "dimension")?.try_into().expect("4 bytes")) as usize);
        }
        let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| fail(offset, "dimension overflow".into()))?;
        let payload = take(&mut pos, n.checked_mul(8).ok_or_else(|| fail(offset, "payload overflow".into()))?, &format!("payload of {name}"))?;
        let data = payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        if blocks.iter().any(|b: &Block| b.name == name) {
            return Err(fail(offset, format!("duplicate block {name}")));
        }
        let end = name == END;
        blocks.push(Block { offset: offset as u64, name, shape, data });
        if end {
            break;
        }
    }
    if pos != bytes.len() {
        return Err(fail(pos, format!("{} trailing bytes after end block", bytes.len() - pos)));
    }
    Ok(blocks)
}

/// Named lookup that tracks which blocks were consumed.
struct Table {
    blocks: Vec<Block>,
    used: Vec<bool>,
}

impl Table {
    fn find(&mut self, name: &str) -> Result<&Block> {
        if self.used.is_empty() {
            self.used = vec![false; self.blocks.len()];
        }
        let end_offset = self.blocks.last().map_or(0, |b| b.offset);
        let i = self
            .blocks
            .iter()
            .position(|b| b.name == name)
            .ok_or_else(|| Error::Format { offset: end_offset, msg: format!("missing block {name}") })?;
        self.used[i] = true;
        Ok(&self.blocks[i])
    }

    fn err(&self, name: &str, msg: impl Into<String>) -> Error {
        let offset = self.blocks.iter().find(|b| b.name == name).map_or(0, |b| b.offset);
        Error::Format { offset, msg: format!("{name}: {}", msg.into()) }
    }

    fn tensor(&mut self, name: &str) -> Result<Tensor> {
        let b = self.find(name)?;
        let (shape, data, offset) = (b.shape.clone(), b.data.clone(), b.offset);
        Tensor::new(shape, data).map_err(|e| Error::Format { offset, msg: e.to_string() })
    }

    fn vec(&mut self, name: &str) -> Result<Vec<f64>> {
        let b = self.find(name)?;
        if b.shape.len() != 1 {
            let offset = b.offset;
            return Err(Error::Format { offset, msg: format!("{name}: expected rank 1, found rank {}", b.shape.len()) });
        }
        Ok(b.data.clone())
    }

    fn scalar(&mut self, name: &str) -> Result<f64> {
        let v = self.vec(name)?;
        if v.len() != 1 {
            return Err(self.err(name, format!("expected 1 value, found {}", v.len())));
        }
        Ok(v[0])
    }

    /// Every block but the terminator must have been consumed.
    fn finish(mut self) -> Result<()> {
        self.find(END)?;
        match self.used.iter().position(|u| !u) {
            Some(i) => Err(Error::Format { offset: self.blocks[i].offset, msg: format!("unexpected block {}", self.blocks[i].name) }),
            None => Ok(()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::config::ModelConfig;
    use rand::{Rng, SeedableRng};

    fn small() -> Checkpoint {
        let mut config = TrainConfig::stage2().with_seed(3);
        config.model = ModelConfig {
            f2d: crate::encoders::Encoder2DConfig { widths: vec![4, 8], width: 8, height: 8 },
            f3d_widths: vec![8, 16],
            head_hidden: 8,
            embed_dim: 4,
        };
        let mut model = Model::new(config.model.clone(), 5).unwrap();
        model.f3d.params.set_buffer("bn0.running_var", vec![0.3; 8]).unwrap();
        let mut optimizers: Vec<_> = MODULES.iter().map(|_| config.new_optimizer()).collect();
        let grads: Vec<_> = model.f3d.params.values().iter().map(|t| Some(Tensor::full(t.shape().to_vec(), 0.1))).collect();
        optimizers[3].step(model.f3d.params.values_mut(), &grads).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let _: [u64; 5] = rng.random();
        Checkpoint { stage: Stage::Two, epoch: 4, config, model, optimizers, rng }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let c = small();
        let bytes = c.encode();
        let mut back = Checkpoint::decode(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.encode(), bytes);
        let mut orig = c.rng.clone();
        assert_eq!(back.rng.random::<u64>(), orig.random::<u64>());
    }

    #[test]
    fn truncation_and_corruption_report_offsets() {
        let bytes = small().encode();
        for cut in [0, 3, 8, 11, 100, bytes.len() / 2, bytes.len() - 1] {
            match Checkpoint::decode(&bytes[..cut]) {
                Err(Error::Format { offset, .. }) => assert!(offset as usize <= cut),
                other => panic!("cut {cut}: {other:?}"),
            }
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::decode(&bad), Err(Error::Format { offset: 0, .. })));
        let mut v2 = bytes.clone();
        v2[6] = 2;
        assert!(matches!(Checkpoint::decode(&v2), Err(Error::Format { offset: 6, .. })));
        let mut trailing = bytes;
        trailing.push(0);
        assert!(matches!(Checkpoint::decode(&trailing), Err(Error::Format { .. })));
    }

    #[test]
    fn save_and_load_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.ckpt");
        let c = small();
        c.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap(), c);
        assert!(matches!(Checkpoint::load(&dir.path().join("none")), Err(Error::Io { .. })));
    }
}
