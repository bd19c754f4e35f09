//! Versioned binary checkpoints: named parameters, Adam moments,
//! spectral-norm vectors, RNG position, and a trailing CRC32.
//!
//! Layout (all little-endian):
//!   magic "LGTSMCK1" | version u8 | stage u8 | step u64
//!   rng seed [32] | rng word_pos u128
//!   adam_g step u64 | adam_d step u64
//!   entry count u32
//!   entries: name_len u16, name, dtype u8, rank u8, dims u32*rank, offset u64
//!   payload (offsets relative to payload start)
//!   crc32 u32 over everything above

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::adam::AdamState;
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{DType, Scalar, TensorData};

const MAGIC: &[u8; 8] = b"LGTSMCK1";
const VERSION: u8 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Pretrain,
    Finetune,
}

impl Stage {
    pub fn code(self) -> u8 {
        match self {
            Stage::Pretrain => 0,
            Stage::Finetune => 1,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(Stage::Pretrain),
            1 => Ok(Stage::Finetune),
            other => Err(Error::format(format!("unknown stage code {other}"))),
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "pretrain" => Ok(Stage::Pretrain),
            "finetune" => Ok(Stage::Finetune),
            other => Err(Error::config(format!("unknown stage {other}; use pretrain|finetune"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Pretrain => "pretrain",
            Stage::Finetune => "finetune",
        }
    }
}

/// Enough to restore a ChaCha8 stream exactly.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState { seed: rng.get_seed(), word_pos: rng.get_word_pos() }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

pub struct Checkpoint<T: Scalar> {
    pub stage: Stage,
    pub step: u64,
    pub params: ParamStore<T>,
    pub adam_g: AdamState<T>,
    pub adam_d: AdamState<T>,
    pub sn_u: BTreeMap<String, Vec<T>>,
    pub rng: RngState,
}

// crc32 (IEEE, reflected, poly 0xEDB88320)
fn crc32(bytes: &[u8]) -> u32 {
    let mut table = [0u32; 256];
    for (i, slot) in table.iter_mut().enumerate() {
        let mut c = i as u32;
        for _ in 0..8 {
            c = if c & 1 != 0 { 0xEDB8_8320 ^ (c >> 1) } else { c >> 1 };
        }
        *slot = c;
    }
    let mut crc = 0xFFFF_FFFFu32;
    for &b in bytes {
        crc = table[((crc ^ b as u32) & 0xFF) as usize] ^ (crc >> 8);
    }
    crc ^ 0xFFFF_FFFF
}

impl<T: Scalar> Checkpoint<T> {
    /// All tensors under stable serialization keys.
    fn entries(&self) -> Vec<(String, TensorData<T>)> {
        let mut map: BTreeMap<String, TensorData<T>> = BTreeMap::new();
        for (name, t) in self.params.iter() {
            map.insert(format!("p.{name}"), t.clone());
        }
        for (prefix, state) in [("g", &self.adam_g), ("d", &self.adam_d)] {
            for (name, t) in &state.m {
                map.insert(format!("m{prefix}.{name}"), t.clone());
            }
            for (name, t) in &state.v {
                map.insert(format!("v{prefix}.{name}"), t.clone());
            }
        }
        for (name, u) in &self.sn_u {
            let t = TensorData::from_vec([u.len()], u.clone()).expect("sized");
            map.insert(format!("u.{name}"), t);
        }
        map.into_iter().collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        out.push(self.stage.code());
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&self.rng.seed);
        out.extend_from_slice(&self.rng.word_pos.to_le_bytes());
        out.extend_from_slice(&self.adam_g.step.to_le_bytes());
        out.extend_from_slice(&self.adam_d.step.to_le_bytes());

        let entries = self.entries();
        out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
        let mut offset = 0u64;
        for (name, t) in &entries {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(T::DTYPE.code());
            let dims = t.shape().dims();
            out.push(dims.len() as u8);
            for &d in dims {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            out.extend_from_slice(&offset.to_le_bytes());
            offset += (t.numel() * T::DTYPE.size()) as u64;
        }
        for (_, t) in &entries {
            for &v in t.data() {
                v.to_le_bytes(&mut out);
            }
        }
        let crc = crc32(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
        }
        let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        file.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 2 {
            return Err(Error::format("checkpoint too short"));
        }
        if &bytes[..8] != MAGIC {
            return Err(Error::format("not a checkpoint file (bad magic)"));
        }
        if bytes[8] != VERSION {
            return Err(Error::format(format!(
                "unsupported checkpoint version {} (supported: {VERSION})",
                bytes[8]
            )));
        }
        if bytes.len() < 4 {
            return Err(Error::format("checkpoint missing checksum"));
        }
        let body = &bytes[..bytes.len() - 4];
        let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap());
        let computed = crc32(body);
        if stored != computed {
            return Err(Error::format(format!(
                "checksum mismatch at byte offset {}: stored {stored:#010x}, computed {computed:#010x}",
                bytes.len() - 4
            )));
        }

        let mut pos = 9;
        let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
            if *pos + n > body.len() {
                return Err(Error::format("truncated checkpoint"));
            }
            let s = &body[*pos..*pos + n];
            *pos += n;
            Ok(s)
        };

        let stage = Stage::from_code(take(&mut pos, 1)?[0])?;
        let step = u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap());
        let seed: [u8; 32] = take(&mut pos, 32)?.try_into().unwrap();
        let word_pos = u128::from_le_bytes(take(&mut pos, 16)?.try_into().unwrap());
        let adam_g_step = u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap());
        let adam_d_step = u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap());
        let n_entries = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;

        struct RawEntry {
            name: String,
            dims: Vec<usize>,
            offset: u64,
        }
        let mut raw = Vec::with_capacity(n_entries);
        for _ in 0..n_entries {
            let name_len = u16::from_le_bytes(take(&mut pos, 2)?.try_into().unwrap()) as usize;
            let name = String::from_utf8(take(&mut pos, name_len)?.to_vec())
                .map_err(|_| Error::format("entry name is not utf-8"))?;
            let dtype = DType::from_code(take(&mut pos, 1)?[0])?;
            if dtype != T::DTYPE {
                return Err(Error::format(format!(
                    "checkpoint holds {dtype:?} tensors, loader expects {:?}",
                    T::DTYPE
                )));
            }
            let rank = take(&mut pos, 1)?[0] as usize;
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize);
            }
            let offset = u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap());
            raw.push(RawEntry { name, dims, offset });
        }
        let payload = &body[pos..];

        let mut ckpt = Checkpoint {
            stage,
            step,
            params: ParamStore::new(),
            adam_g: AdamState { step: adam_g_step, ..AdamState::new() },
            adam_d: AdamState { step: adam_d_step, ..AdamState::new() },
            sn_u: BTreeMap::new(),
            rng: RngState { seed, word_pos },
        };
        let elem = T::DTYPE.size();
        for entry in raw {
            let n: usize = entry.dims.iter().product();
            let start = entry.offset as usize;
            if start + n * elem > payload.len() {
                return Err(Error::format(format!(
                    "entry {} overruns payload: offset {start} + {} bytes > {}",
                    entry.name,
                    n * elem,
                    payload.len()
                )));
            }
            let data: Vec<T> = payload[start..start + n * elem]
                .chunks_exact(elem)
                .map(T::from_le_bytes)
                .collect();
            let tensor = TensorData::from_vec(entry.dims.as_slice(), data)?;
            let (kind, name) = entry
                .name
                .split_once('.')
                .ok_or_else(|| Error::format(format!("malformed entry name {}", entry.name)))?;
            let name = name.to_string();
            match kind {
                "p" => ckpt.params.insert(name, tensor)?,
                "mg" => drop(ckpt.adam_g.m.insert(name, tensor)),
                "vg" => drop(ckpt.adam_g.v.insert(name, tensor)),
                "md" => drop(ckpt.adam_d.m.insert(name, tensor)),
                "vd" => drop(ckpt.adam_d.v.insert(name, tensor)),
                "u" => drop(ckpt.sn_u.insert(name, tensor.into_data())),
                other => return Err(Error::format(format!("unknown entry kind {other}"))),
            }
        }
        Ok(ckpt)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
