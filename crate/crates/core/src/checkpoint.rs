//! The GFCN checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "GFCN"  u32 version  u32 record_count
//! record: u32 name_len  name  u8 tag  u8 rank  u64 dims[rank]  payload
//! u32 CRC32 of every preceding byte
//! ```
//!
//! Tags: 0 = f32, 1 = f64, 2 = u64, 3 = u8 (UTF-8 text).

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use crate::data::AlphabetCodec;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::optim::{Adam, AdamState, PolyakState};
use crate::tensor::{Real, Tensor};
use crate::train::{TrainConfig, TrainState};

pub const MAGIC: &[u8; 4] = b"GFCN";
pub const VERSION: u32 = 1;

const TAG_F32: u8 = 0;
const TAG_F64: u8 = 1;
const TAG_U64: u8 = 2;
const TAG_U8: u8 = 3;

/// One named array.
#[derive(Clone, Debug, PartialEq)]
pub enum Record {
    F32 { dims: Vec<u64>, data: Vec<f32> },
    F64 { dims: Vec<u64>, data: Vec<f64> },
    U64 { dims: Vec<u64>, data: Vec<u64> },
    U8 { dims: Vec<u64>, data: Vec<u8> },
}

impl Record {
    pub fn tensor<T: Real>(t: &Tensor<T>) -> Self {
        let dims = t.shape().iter().map(|&d| d as u64).collect();
        match T::TAG {
            TAG_F32 => Record::F32 {
                dims,
                data: t.data().iter().map(|v| v.as_f64() as f32).collect(),
            },
            _ => Record::F64 {
                dims,
                data: t.data().iter().map(|v| v.as_f64()).collect(),
            },
        }
    }

    pub fn text(s: &str) -> Self {
        Record::U8 {
            dims: vec![s.len() as u64],
            data: s.as_bytes().to_vec(),
        }
    }

    pub fn u64s(v: &[u64]) -> Self {
        Record::U64 {
            dims: vec![v.len() as u64],
            data: v.to_vec(),
        }
    }

    fn tag(&self) -> u8 {
        match self {
            Record::F32 { .. } => TAG_F32,
            Record::F64 { .. } => TAG_F64,
            Record::U64 { .. } => TAG_U64,
            Record::U8 { .. } => TAG_U8,
        }
    }

    fn dims(&self) -> &[u64] {
        match self {
            Record::F32 { dims, .. } | Record::F64 { dims, .. } | Record::U64 { dims, .. } | Record::U8 { dims, .. } => dims,
        }
    }

    fn write_payload(&self, out: &mut Vec<u8>) {
        match self {
            Record::F32 { data, .. } => data.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
            Record::F64 { data, .. } => data.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
            Record::U64 { data, .. } => data.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
            Record::U8 { data, .. } => out.extend_from_slice(data),
        }
    }

    /// Exact conversion into a tensor of precision `T`.
    pub fn to_tensor<T: Real>(&self, name: &str) -> Result<Tensor<T>> {
        let dims: Vec<usize> = self.dims().iter().map(|&d| d as usize).collect();
        let data: Vec<T> = match (self, T::TAG) {
            (Record::F32 { data, .. }, _) => data.iter().map(|&v| T::from_f64(v as f64)).collect(),
            (Record::F64 { data, .. }, TAG_F64) => data.iter().map(|&v| T::from_f64(v)).collect(),
            _ => {
                return Err(Error::Corrupt {
                    field: "record type",
                    detail: format!("{name}: tag {} cannot be read as tensor tag {}", self.tag(), T::TAG),
                })
            }
        };
        Tensor::from_vec(&dims, data).map_err(|e| Error::Corrupt {
            field: "record dims",
            detail: format!("{name}: {e}"),
        })
    }
}

/// Named records in file order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub records: BTreeMap<String, Record>,
}

impl Checkpoint {
    pub fn insert(&mut self, name: impl Into<String>, record: Record) {
        self.records.insert(name.into(), record);
    }

    pub fn get(&self, name: &str) -> Result<&Record> {
        self.records.get(name).ok_or_else(|| Error::Corrupt {
            field: "record",
            detail: format!("missing {name}"),
        })
    }

    pub fn text(&self, name: &str) -> Result<String> {
        match self.get(name)? {
            Record::U8 { data, .. } => String::from_utf8(data.clone()).map_err(|e| Error::Corrupt {
                field: "record payload",
                detail: format!("{name}: {e}"),
            }),
            _ => Err(Error::Corrupt {
                field: "record type",
                detail: format!("{name} is not text"),
            }),
        }
    }

    pub fn u64s(&self, name: &str) -> Result<Vec<u64>> {
        match self.get(name)? {
            Record::U64 { data, .. } => Ok(data.clone()),
            _ => Err(Error::Corrupt {
                field: "record type",
                detail: format!("{name} is not u64"),
            }),
        }
    }

    pub fn tensor<T: Real>(&self, name: &str) -> Result<Tensor<T>> {
        self.get(name)?.to_tensor(name)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.records.len() as u32).to_le_bytes());
        for (name, rec) in &self.records {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(rec.tag());
            out.push(rec.dims().len() as u8);
            for d in rec.dims() {
                out.extend_from_slice(&d.to_le_bytes());
            }
            rec.write_payload(&mut out);
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "magic")? != MAGIC {
            return Err(corrupt("magic", "not a GFCN checkpoint"));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(corrupt("version", format!("unsupported version {version}")));
        }
        if bytes.len() < 12 + 4 {
            return Err(corrupt("crc", "file too short"));
        }
        let body = &bytes[..bytes.len() - 4];
        let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().expect("4 bytes"));
        let actual = crc32fast::hash(body);
        if stored != actual {
            return Err(corrupt("crc", format!("stored {stored:08x}, computed {actual:08x}")));
        }
        let mut r = Reader { bytes: body, pos: 8 };
        let count = r.u32("record count")?;
        let mut records = BTreeMap::new();
        for _ in 0..count {
            let len = r.u32("name length")? as usize;
            let name = String::from_utf8(r.take(len, "name")?.to_vec()).map_err(|e| corrupt("name", e.to_string()))?;
            let tag = r.take(1, "tag")?[0];
            let rank = r.take(1, "rank")?[0] as usize;
            let dims = (0..rank).map(|_| r.u64("dims")).collect::<Result<Vec<u64>>>()?;
            let n = dims
                .iter()
                .try_fold(1u64, |a, &d| a.checked_mul(d))
                .and_then(|n| usize::try_from(n).ok())
                .ok_or_else(|| corrupt("dims", format!("{name}: element count overflows")))?;
            let width = match tag {
                TAG_F32 => 4,
                TAG_F64 | TAG_U64 => 8,
                TAG_U8 => 1,
                t => return Err(corrupt("tag", format!("{name}: unknown tag {t}"))),
            };
            let bytes_len = n.checked_mul(width).ok_or_else(|| corrupt("dims", format!("{name}: too large")))?;
            let raw = r.take(bytes_len, "payload")?;
            let rec = match tag {
                TAG_F32 => Record::F32 {
                    dims,
                    data: raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect(),
                },
                TAG_F64 => Record::F64 {
                    dims,
                    data: raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect(),
                },
                TAG_U64 => Record::U64 {
                    dims,
                    data: raw.chunks_exact(8).map(|c| u64::from_le_bytes(c.try_into().unwrap())).collect(),
                },
                _ => Record::U8 { dims, data: raw.to_vec() },
            };
            records.insert(name, rec);
        }
        if r.pos != body.len() {
            return Err(corrupt("trailing bytes", format!("{} unread bytes", body.len() - r.pos)));
        }
        Ok(Checkpoint { records })
    }

    /// Writes to a temporary sibling, syncs it and renames it over `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&self.to_bytes())?;
            f.sync_all()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

fn corrupt(field: &'static str, detail: impl Into<String>) -> Error {
    Error::Corrupt {
        field,
        detail: detail.into(),
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, field: &'static str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(corrupt(field, "truncated")),
        }
    }

    fn u32(&mut self, field: &'static str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, field)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, field: &'static str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, field)?.try_into().expect("8 bytes")))
    }
}

/// Everything needed to resume a run or evaluate a model.
#[derive(Clone, Debug)]
pub struct Snapshot<T> {
    pub state: TrainState<T>,
    pub codec: AlphabetCodec,
    pub train_config_text: String,
}

const COUNTERS: &str = "state/counters";
const MODEL_CONFIG: &str = "config/model";
const TRAIN_CONFIG: &str = "config/train";
const ALPHABET: &str = "alphabet";

/// Serializes a training state. Counters record `[epoch, step, seed,
/// bn_step, adam_t]`.
pub fn snapshot_to_checkpoint<T: Real>(state: &TrainState<T>, codec: &AlphabetCodec, train_config_text: &str) -> Checkpoint {
    let mut ck = Checkpoint::default();
    let store = &state.model.store;
    for (id, p) in store.iter() {
        ck.insert(format!("param/{}", p.name), Record::tensor(&p.value));
        ck.insert(format!("polyak/{}", p.name), Record::tensor(&state.polyak.shadow[id.index()]));
    }
    for (i, &id) in state.adam.ids.iter().enumerate() {
        let name = &store.param(id).name;
        ck.insert(format!("adam_m/{name}"), Record::tensor(&state.adam.state.m[i]));
        ck.insert(format!("adam_v/{name}"), Record::tensor(&state.adam.state.v[i]));
    }
    let a = state.adam.state.config;
    ck.insert(
        "adam/hyper",
        Record::F64 {
            dims: vec![3],
            data: vec![a.beta1, a.beta2, a.epsilon],
        },
    );
    ck.insert(
        "polyak/decay",
        Record::F64 {
            dims: vec![1],
            data: vec![state.polyak.decay],
        },
    );
    ck.insert(
        COUNTERS,
        Record::u64s(&[state.epoch, state.step, state.seed, state.model.bn_step, state.adam.state.t]),
    );
    ck.insert(MODEL_CONFIG, Record::text(&crate::config::model_config_text(&state.model.config)));
    ck.insert(TRAIN_CONFIG, Record::text(train_config_text));
    ck.insert(ALPHABET, Record::text(&codec.symbols()));
    ck
}

/// Rebuilds the training state stored by [`snapshot_to_checkpoint`].
pub fn checkpoint_to_snapshot<T: Real>(ck: &Checkpoint) -> Result<Snapshot<T>> {
    let model_config: ModelConfig = crate::config::parse_model_config(&ck.text(MODEL_CONFIG)?)?;
    let train_config_text = ck.text(TRAIN_CONFIG)?;
    let codec = AlphabetCodec::new(&ck.text(ALPHABET)?)?;
    let counters = ck.u64s(COUNTERS)?;
    let [epoch, step, seed, bn_step, adam_t] = counters[..] else {
        return Err(corrupt("record payload", format!("{COUNTERS} needs 5 values")));
    };
    let mut model = Model::<T>::build(model_config, 0)?;
    let names: Vec<(crate::params::ParamId, String)> = model.store.iter().map(|(id, p)| (id, p.name.clone())).collect();
    let mut shadow = Vec::with_capacity(names.len());
    for (id, name) in &names {
        let value: Tensor<T> = ck.tensor(&format!("param/{name}"))?;
        check_shape(&value, model.store.get(*id), name)?;
        *model.store.get_mut(*id) = value;
        let s: Tensor<T> = ck.tensor(&format!("polyak/{name}"))?;
        check_shape(&s, model.store.get(*id), name)?;
        shadow.push(s);
    }
    model.bn_step = bn_step;
    let hyper = match ck.get("adam/hyper")? {
        Record::F64 { data, .. } if data.len() == 3 => data.clone(),
        _ => return Err(corrupt("record payload", "adam/hyper needs 3 f64 values")),
    };
    let decay = match ck.get("polyak/decay")? {
        Record::F64 { data, .. } if data.len() == 1 => data[0],
        _ => return Err(corrupt("record payload", "polyak/decay needs 1 f64 value")),
    };
    let mut adam = Adam::new(
        &model.store,
        crate::optim::AdamConfig {
            beta1: hyper[0],
            beta2: hyper[1],
            epsilon: hyper[2],
        },
    );
    let mut m = Vec::new();
    let mut v = Vec::new();
    for &id in &adam.ids {
        let name = &model.store.param(id).name;
        let mi: Tensor<T> = ck.tensor(&format!("adam_m/{name}"))?;
        let vi: Tensor<T> = ck.tensor(&format!("adam_v/{name}"))?;
        check_shape(&mi, model.store.get(id), name)?;
        check_shape(&vi, model.store.get(id), name)?;
        m.push(mi);
        v.push(vi);
    }
    adam.state = AdamState {
        config: adam.state.config,
        m,
        v,
        t: adam_t,
    };
    let state = TrainState {
        model,
        adam,
        polyak: PolyakState { decay, shadow },
        epoch,
        step,
        seed,
    };
    Ok(Snapshot {
        state,
        codec,
        train_config_text,
    })
}

fn check_shape<T: Real>(got: &Tensor<T>, want: &Tensor<T>, name: &str) -> Result<()> {
    if got.shape() == want.shape() {
        Ok(())
    } else {
        Err(corrupt(
            "record dims",
            format!("{name}: expected {:?}, found {:?}", want.shape(), got.shape()),
        ))
    }
}

pub fn save_checkpoint<T: Real>(path: &Path, state: &TrainState<T>, codec: &AlphabetCodec, config: &TrainConfig) -> Result<()> {
    snapshot_to_checkpoint(state, codec, &crate::config::train_config_text(config)).save(path)
}

pub fn load_checkpoint<T: Real>(path: &Path) -> Result<Snapshot<T>> {
    checkpoint_to_snapshot(&Checkpoint::load(path)?)
}
