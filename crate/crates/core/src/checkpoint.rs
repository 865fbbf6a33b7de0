//! Binary checkpoint container.
//!
//! Layout (little-endian): magic `DCBD`, `u16` format version, `u32` entry
//! count, then per entry a `u16`-length-prefixed UTF-8 name, `u8` rank,
//! `u64` dims, `u8` dtype tag and the raw payload; finally an FNV-1a 64-bit
//! checksum of every preceding byte.

use std::fs;
use std::path::Path;

use crate::error::{Error, FormatError, Result};
use crate::model::{layers_from_str, layers_to_string, Model, ModelConfig};
use crate::optim::AdamState;
use crate::tensor::{Shape, Tensor};

pub const MAGIC: &[u8; 4] = b"DCBD";
pub const FORMAT_VERSION: u16 = 1;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes.iter().fold(FNV_OFFSET, |h, &b| (h ^ b as u64).wrapping_mul(FNV_PRIME))
}

/// Payload of one table entry.
#[derive(Clone, Debug, PartialEq)]
pub enum EntryData {
    F64(Vec<f64>),
    F32(Vec<f32>),
    Bytes(Vec<u8>),
    U64(Vec<u64>),
}

impl EntryData {
    fn tag(&self) -> u8 {
        match self {
            EntryData::F64(_) => 0,
            EntryData::F32(_) => 1,
            EntryData::Bytes(_) => 2,
            EntryData::U64(_) => 3,
        }
    }

    fn len(&self) -> usize {
        match self {
            EntryData::F64(v) => v.len(),
            EntryData::F32(v) => v.len(),
            EntryData::Bytes(v) => v.len(),
            EntryData::U64(v) => v.len(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub name: String,
    pub dims: Vec<u64>,
    pub data: EntryData,
}

/// Ordered table of named arrays.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TensorTable {
    pub entries: Vec<Entry>,
}

impl TensorTable {
    pub fn push(&mut self, name: impl Into<String>, dims: Vec<u64>, data: EntryData) {
        self.entries.push(Entry { name: name.into(), dims, data });
    }

    pub fn push_tensor(&mut self, name: impl Into<String>, t: &Tensor, storage: Storage) {
        let s = t.shape();
        let dims = vec![s.n as u64, s.c as u64, s.h as u64, s.w as u64];
        let data = match storage {
            Storage::F64 => EntryData::F64(t.data().to_vec()),
            Storage::F32 => EntryData::F32(t.to_f32_vec()),
        };
        self.push(name, dims, data);
    }

    pub fn get(&self, name: &str) -> Option<&Entry> {
        self.entries.iter().find(|e| e.name == name)
    }

    fn require(&self, name: &str) -> Result<&Entry> {
        self.get(name).ok_or_else(|| invalid(format!("missing entry `{name}`")))
    }

    pub fn tensor(&self, name: &str) -> Result<Tensor> {
        let e = self.require(name)?;
        if e.dims.len() != 4 {
            return Err(invalid(format!("entry `{name}` has rank {}, expected 4", e.dims.len())));
        }
        let shape = Shape::new(e.dims[0] as usize, e.dims[1] as usize, e.dims[2] as usize, e.dims[3] as usize);
        match &e.data {
            EntryData::F64(v) => Tensor::new(shape, v.clone()),
            EntryData::F32(v) => Tensor::from_f32(shape, v),
            _ => Err(invalid(format!("entry `{name}` is not floating point"))),
        }
    }

    pub fn u64s(&self, name: &str) -> Result<&[u64]> {
        match &self.require(name)?.data {
            EntryData::U64(v) => Ok(v),
            _ => Err(invalid(format!("entry `{name}` is not u64"))),
        }
    }

    pub fn f64s(&self, name: &str) -> Result<&[f64]> {
        match &self.require(name)?.data {
            EntryData::F64(v) => Ok(v),
            _ => Err(invalid(format!("entry `{name}` is not f64"))),
        }
    }

    pub fn text(&self, name: &str) -> Result<String> {
        match &self.require(name)?.data {
            EntryData::Bytes(v) => String::from_utf8(v.clone()).map_err(|_| invalid(format!("entry `{name}` is not UTF-8"))),
            _ => Err(invalid(format!("entry `{name}` is not text"))),
        }
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for e in &self.entries {
            let numel: u64 = e.dims.iter().product();
            if numel != e.data.len() as u64 {
                return Err(Error::Shape(format!("entry `{}`: dims {:?} vs {} values", e.name, e.dims, e.data.len())));
            }
            let name = e.name.as_bytes();
            let name_len = u16::try_from(name.len()).map_err(|_| invalid(format!("name too long: {}", e.name)))?;
            out.extend_from_slice(&name_len.to_le_bytes());
            out.extend_from_slice(name);
            out.push(e.dims.len() as u8);
            for d in &e.dims {
                out.extend_from_slice(&d.to_le_bytes());
            }
            out.push(e.data.tag());
            match &e.data {
                EntryData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                EntryData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                EntryData::Bytes(v) => out.extend_from_slice(v),
                EntryData::U64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            }
        }
        let sum = fnv1a64(&out);
        out.extend_from_slice(&sum.to_le_bytes());
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4).map_err(|_| bad_or_truncated(bytes))?;
        if magic != MAGIC {
            return Err(FormatError::BadMagic.into());
        }
        let version = u16::from_le_bytes(r.array()?);
        if version != FORMAT_VERSION {
            return Err(FormatError::VersionMismatch { found: version, expected: FORMAT_VERSION }.into());
        }
        let count = u32::from_le_bytes(r.array()?);
        let mut table = TensorTable::default();
        for _ in 0..count {
            let name_len = u16::from_le_bytes(r.array()?) as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec()).map_err(|_| invalid("entry name is not UTF-8".into()))?;
            let rank = r.take(1)?[0] as usize;
            let dims: Vec<u64> = (0..rank).map(|_| r.array().map(u64::from_le_bytes)).collect::<Result<_>>()?;
            let tag = r.take(1)?[0];
            let numel = dims
                .iter()
                .try_fold(1u64, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| invalid(format!("entry `{name}`: dims overflow")))?;
            let width = match tag {
                0 | 3 => 8,
                1 => 4,
                2 => 1,
                t => return Err(invalid(format!("entry `{name}`: unknown dtype tag {t}"))),
            };
            let nbytes = numel.checked_mul(width).filter(|&n| n <= usize::MAX as u64).ok_or(FormatError::Truncated)?;
            let raw = r.take(nbytes as usize)?;
            let data = match tag {
                0 => EntryData::F64(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect()),
                1 => EntryData::F32(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect()),
                2 => EntryData::Bytes(raw.to_vec()),
                _ => EntryData::U64(raw.chunks_exact(8).map(|c| u64::from_le_bytes(c.try_into().unwrap())).collect()),
            };
            table.entries.push(Entry { name, dims, data });
        }
        let body_end = r.pos;
        let stored = u64::from_le_bytes(r.array()?);
        if r.pos != bytes.len() {
            return Err(invalid(format!("{} trailing bytes after checksum", bytes.len() - r.pos)));
        }
        let computed = fnv1a64(&bytes[..body_end]);
        if stored != computed {
            return Err(FormatError::ChecksumMismatch { stored, computed }.into());
        }
        Ok(table)
    }
}

fn invalid(msg: String) -> Error {
    FormatError::Invalid(msg).into()
}

fn bad_or_truncated(bytes: &[u8]) -> Error {
    if MAGIC.starts_with(bytes) {
        FormatError::Truncated.into()
    } else {
        FormatError::BadMagic.into()
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or(FormatError::Truncated)?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }
}

/// Precision used for stored parameters.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Storage {
    #[default]
    F64,
    F32,
}

/// Position of the counter-based training generator: batches are a pure
/// function of `(seed, position)`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct RngState {
    pub seed: u64,
    pub position: u64,
}

/// Everything needed to rebuild a model and resume training.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    /// Parameters followed by batch-norm statistics, in model order.
    pub tensors: Vec<(String, Tensor)>,
    pub optimizer: Option<AdamState>,
    pub iteration: u64,
    pub rng: RngState,
    /// Free-form key/value metadata (e.g. the resolved training config).
    pub meta: Vec<(String, String)>,
    pub storage: Storage,
}

pub fn config_to_text(c: &ModelConfig) -> String {
    format!(
        "channels={}\ninput_channels={}\nuse_skip={}\nuse_bn={}\nconv_bias={}\ninit_gain={}\nseed={}\nestimator={}\nupper={}\nlower={}\n",
        c.channels,
        c.input_channels,
        c.use_skip,
        c.use_bn,
        c.conv_bias,
        c.init_gain,
        c.seed,
        layers_to_string(&c.estimator),
        layers_to_string(&c.upper),
        layers_to_string(&c.lower)
    )
}

pub fn config_from_text(text: &str) -> Result<ModelConfig> {
    let mut c = ModelConfig::new(1, 1);
    let mut seen = 0;
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let (k, v) = line.split_once('=').ok_or_else(|| invalid(format!("bad config line `{line}`")))?;
        let num = |v: &str| v.parse::<u64>().map_err(|_| invalid(format!("bad value for {k}: `{v}`")));
        let flag = |v: &str| v.parse::<bool>().map_err(|_| invalid(format!("bad value for {k}: `{v}`")));
        match k {
            "channels" => c.channels = num(v)? as usize,
            "input_channels" => c.input_channels = num(v)? as usize,
            "use_skip" => c.use_skip = flag(v)?,
            "use_bn" => c.use_bn = flag(v)?,
            "conv_bias" => c.conv_bias = flag(v)?,
            "init_gain" => c.init_gain = v.parse().map_err(|_| invalid(format!("bad value for {k}: `{v}`")))?,
            "seed" => c.seed = num(v)?,
            "estimator" => c.estimator = layers_from_str(v)?,
            "upper" => c.upper = layers_from_str(v)?,
            "lower" => c.lower = layers_from_str(v)?,
            _ => return Err(invalid(format!("unknown model config key `{k}`"))),
        }
        seen += 1;
    }
    if seen != 10 {
        return Err(invalid(format!("model config has {seen} of 10 keys")));
    }
    Ok(c)
}

impl Checkpoint {
    pub fn capture(model: &Model, optimizer: Option<&AdamState>, iteration: u64, rng: RngState) -> Self {
        let tensors = model
            .parameters()
            .into_iter()
            .chain(model.buffers())
            .map(|(n, t)| (n, t.clone()))
            .collect();
        Checkpoint {
            config: model.config().clone(),
            tensors,
            optimizer: optimizer.cloned(),
            iteration,
            rng,
            meta: Vec::new(),
            storage: Storage::F64,
        }
    }

    pub fn with_storage(mut self, storage: Storage) -> Self {
        self.storage = storage;
        self
    }

    pub fn to_table(&self) -> Result<TensorTable> {
        let mut t = TensorTable::default();
        let text = |s: &str| (vec![s.len() as u64], EntryData::Bytes(s.as_bytes().to_vec()));
        let (d, v) = text(&config_to_text(&self.config));
        t.push("meta.config", d, v);
        for (k, val) in &self.meta {
            let (d, v) = text(val);
            t.push(format!("meta.{k}"), d, v);
        }
        t.push("state.iteration", vec![1], EntryData::U64(vec![self.iteration]));
        t.push("state.rng", vec![2], EntryData::U64(vec![self.rng.seed, self.rng.position]));
        for (name, tensor) in &self.tensors {
            t.push_tensor(format!("param.{name}"), tensor, self.storage);
        }
        if let Some(adam) = &self.optimizer {
            t.push("adam.t", vec![1], EntryData::U64(vec![adam.t]));
            t.push("adam.hyper", vec![3], EntryData::F64(vec![adam.beta1, adam.beta2, adam.eps]));
            let names = self.tensors.iter().map(|(n, _)| n);
            for (i, (name, m)) in names.clone().zip(&adam.m).enumerate() {
                t.push_tensor(format!("adam.m.{name}"), m, Storage::F64);
                t.push_tensor(format!("adam.v.{name}"), &adam.v[i], Storage::F64);
            }
        }
        Ok(t)
    }

    pub fn from_table(t: &TensorTable) -> Result<Self> {
        let config = config_from_text(&t.text("meta.config")?)?;
        let meta = t
            .entries
            .iter()
            .filter_map(|e| e.name.strip_prefix("meta.").filter(|k| *k != "config").map(|k| (k, &e.name)))
            .map(|(k, full)| Ok((k.to_string(), t.text(full)?)))
            .collect::<Result<Vec<_>>>()?;
        let iteration = *t.u64s("state.iteration")?.first().ok_or_else(|| invalid("empty iteration".into()))?;
        let rng = match t.u64s("state.rng")? {
            [seed, position] => RngState { seed: *seed, position: *position },
            _ => return Err(invalid("state.rng must hold two values".into())),
        };
        let mut storage = Storage::F64;
        let mut tensors = Vec::new();
        for e in t.entries.iter().filter(|e| e.name.starts_with("param.")) {
            if matches!(e.data, EntryData::F32(_)) {
                storage = Storage::F32;
            }
            tensors.push((e.name["param.".len()..].to_string(), t.tensor(&e.name)?));
        }
        let optimizer = match t.get("adam.t") {
            None => None,
            Some(_) => {
                let hyper = t.f64s("adam.hyper")?;
                if hyper.len() != 3 {
                    return Err(invalid("adam.hyper must hold three values".into()));
                }
                let mut m = Vec::new();
                let mut v = Vec::new();
                for e in t.entries.iter().filter(|e| e.name.starts_with("adam.m.")) {
                    let name = &e.name["adam.m.".len()..];
                    m.push(t.tensor(&e.name)?);
                    v.push(t.tensor(&format!("adam.v.{name}"))?);
                }
                Some(AdamState {
                    beta1: hyper[0],
                    beta2: hyper[1],
                    eps: hyper[2],
                    m,
                    v,
                    t: t.u64s("adam.t")?[0],
                })
            }
        };
        Ok(Checkpoint { config, tensors, optimizer, iteration, rng, meta, storage })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.to_table()?.encode()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Checkpoint::from_table(&TensorTable::decode(bytes)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let bytes = self.to_bytes()?;
        let path = path.as_ref();
        // write-then-rename so an interrupted save never leaves a torn file
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, bytes)?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Checkpoint::from_bytes(&fs::read(path)?)
    }

    /// Rebuild the model with the stored parameters and statistics.
    pub fn build_model(&self) -> Result<Model> {
        let mut model = Model::new(self.config.clone())?;
        let expected = model.parameters().len() + model.buffers().len();
        if expected != self.tensors.len() {
            return Err(invalid(format!("checkpoint has {} tensors, model needs {expected}", self.tensors.len())));
        }
        model.load_named(|name| self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t.clone()))?;
        Ok(model)
    }

    /// Optimizer state restricted to trainable parameters, checked against `model`.
    pub fn optimizer_for(&self, model: &Model) -> Result<Option<AdamState>> {
        let Some(adam) = &self.optimizer else { return Ok(None) };
        let params = model.parameters();
        if adam.m.len() != params.len() {
            return Err(invalid(format!("optimizer has {} slots, model has {} parameters", adam.m.len(), params.len())));
        }
        for ((_, p), m) in params.iter().zip(&adam.m) {
            if p.shape() != m.shape() {
                return Err(Error::Shape(format!("optimizer moment {} vs parameter {}", m.shape(), p.shape())));
            }
        }
        Ok(Some(adam.clone()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Model {
        Model::new(ModelConfig::new(1, 4).with_seed(3)).unwrap()
    }

    #[test]
    fn fnv_reference_values() {
        assert_eq!(fnv1a64(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a64(b"a"), 0xaf63dc4c8601ec8c);
        assert_eq!(fnv1a64(b"foobar"), 0x85944171f73967e8);
    }

    #[test]
    fn config_text_round_trip() {
        let mut c = ModelConfig::color().with_ablation(false, true).with_seed(99);
        c.init_gain = 0.1 + 0.2;
        assert_eq!(config_from_text(&config_to_text(&c)).unwrap(), c);
        assert!(config_from_text("channels=4\n").is_err());
        assert!(config_from_text(&format!("{}bogus=1\n", config_to_text(&c))).is_err());
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let m = tiny();
        let adam = AdamState::new(m.parameters().into_iter().map(|(_, t)| t));
        let mut ck = Checkpoint::capture(&m, Some(&adam), 17, RngState { seed: 5, position: 17 });
        ck.meta.push(("train".into(), "batch=8\n".into()));
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn rebuilt_model_matches() {
        let m = tiny();
        let ck = Checkpoint::capture(&m, None, 0, RngState::default());
        let m2 = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap().build_model().unwrap();
        let x = Tensor::from_fn(Shape::new(1, 1, 8, 8), |_, _, y, x| (y * 8 + x) as f64 / 64.0);
        assert_eq!(m.infer(&x).unwrap(), m2.infer(&x).unwrap());
    }

    #[test]
    fn f32_storage_rounds_parameters() {
        let m = tiny();
        let ck = Checkpoint::capture(&m, None, 0, RngState::default()).with_storage(Storage::F32);
        let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
        assert_eq!(back.storage, Storage::F32);
        let mut rounded = m.clone();
        rounded.round_to_f32();
        let rebuilt = back.build_model().unwrap();
        for ((_, a), (_, b)) in rebuilt.parameters().iter().zip(rounded.parameters()) {
            assert_eq!(*a, b);
        }
    }

    #[test]
    fn corruption_is_classified() {
        let bytes = Checkpoint::capture(&tiny(), None, 0, RngState::default()).to_bytes().unwrap();

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Format(FormatError::BadMagic))));

        let mut ver = bytes.clone();
        ver[4] = 9;
        assert!(matches!(
            Checkpoint::from_bytes(&ver),
            Err(Error::Format(FormatError::VersionMismatch { found: 9, expected: 1 }))
        ));

        assert!(matches!(
            Checkpoint::from_bytes(&bytes[..bytes.len() / 2]),
            Err(Error::Format(FormatError::Truncated))
        ));
        assert!(matches!(Checkpoint::from_bytes(&bytes[..2]), Err(Error::Format(FormatError::Truncated))));

        let mut flipped = bytes.clone();
        let i = bytes.len() - 20;
        flipped[i] ^= 0x40;
        assert!(matches!(
            Checkpoint::from_bytes(&flipped),
            Err(Error::Format(FormatError::ChecksumMismatch { .. }))
        ));
    }
}
