//! Binary checkpoint container.
//!
//! Layout, all little-endian: magic `MNKY`, u16 major, u16 minor, u32 tensor
//! count; per tensor a u32 name length, the UTF-8 name, a u8 dtype
//! (0 = f32, 1 = u64, 2 = u8), a u8 rank, `rank` u64 dims and the raw
//! row-major payload. A u64-length-prefixed UTF-8 JSON blob with the
//! training config and history closes the file.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::BackboneParams;
use crate::error::{Error, Result};
use crate::membank::{ExemplarMemory, KeyEncoder};
use crate::nncore::Tensor;
use crate::trainer::TrainConfig;

pub const MAGIC: &[u8; 4] = b"MNKY";
pub const MAJOR: u16 = 1;
pub const MINOR: u16 = 0;

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    U64(Vec<u64>),
    U8(Vec<u8>),
}

impl TensorData {
    fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::U64(v) => v.len(),
            TensorData::U8(v) => v.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub dims: Vec<u64>,
    pub data: TensorData,
}

/// The raw container: named tensors in file order plus the JSON blob.
#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub major: u16,
    pub minor: u16,
    pub tensors: Vec<NamedTensor>,
    pub meta: String,
}

impl Container {
    pub fn tensor(&self, name: &str) -> Result<&NamedTensor> {
        self.tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| Error::Format(format!("checkpoint has no tensor `{name}`")))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&self.major.to_le_bytes());
        out.extend_from_slice(&self.minor.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            let count: u64 = t.dims.iter().product();
            if count as usize != t.data.len() || t.dims.len() > u8::MAX as usize {
                return Err(Error::Format(format!("tensor `{}` dims do not match its payload", t.name)));
            }
            out.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            let dtype = match t.data {
                TensorData::F32(_) => 0u8,
                TensorData::U64(_) => 1,
                TensorData::U8(_) => 2,
            };
            out.push(dtype);
            out.push(t.dims.len() as u8);
            for d in &t.dims {
                out.extend_from_slice(&d.to_le_bytes());
            }
            match &t.data {
                TensorData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                TensorData::U64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                TensorData::U8(v) => out.extend_from_slice(v),
            }
        }
        out.extend_from_slice(&(self.meta.len() as u64).to_le_bytes());
        out.extend_from_slice(self.meta.as_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4, "magic")?;
        if magic != MAGIC {
            return Err(Error::Format(format!("bad magic {magic:?}, expected \"MNKY\"")));
        }
        let major = u16::from_le_bytes(r.array("version")?);
        let minor = u16::from_le_bytes(r.array("version")?);
        if major != MAJOR {
            return Err(Error::Format(format!("unsupported major version {major} (reader knows {MAJOR})")));
        }
        let count = u32::from_le_bytes(r.array("tensor count")?) as usize;
        let mut tensors = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let len = u32::from_le_bytes(r.array("name length")?) as usize;
            let name = std::str::from_utf8(r.take(len, "tensor name")?)
                .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
                .to_owned();
            let [dtype, rank] = r.array::<2>("tensor header")?;
            let mut dims = Vec::with_capacity(rank as usize);
            for _ in 0..rank {
                dims.push(u64::from_le_bytes(r.array("tensor dims")?));
            }
            let n = dims
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d as usize))
                .ok_or_else(|| Error::Format(format!("tensor `{name}` is too large")))?;
            let width = match dtype {
                0 => 4,
                1 => 8,
                2 => 1,
                other => return Err(Error::Format(format!("tensor `{name}` has unknown dtype {other}"))),
            };
            let payload = r.take(
                n.checked_mul(width).ok_or_else(|| Error::Format(format!("tensor `{name}` is too large")))?,
                "tensor payload",
            )?;
            let data = match dtype {
                0 => TensorData::F32(payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4"))).collect()),
                1 => TensorData::U64(payload.chunks_exact(8).map(|c| u64::from_le_bytes(c.try_into().expect("8"))).collect()),
                _ => TensorData::U8(payload.to_vec()),
            };
            tensors.push(NamedTensor { name, dims, data });
        }
        let len = u64::from_le_bytes(r.array("metadata length")?) as usize;
        let meta = std::str::from_utf8(r.take(len, "metadata")?)
            .map_err(|_| Error::Format("metadata is not UTF-8".into()))?
            .to_owned();
        if r.pos != bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes after metadata", bytes.len() - r.pos)));
        }
        Ok(Self { major, minor, tensors, meta })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format(format!("file truncated while reading {what}")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn array<const N: usize>(&mut self, what: &str) -> Result<[u8; N]> {
        Ok(self.take(N, what)?.try_into().expect("length checked"))
    }
}

/// Metrics recorded after each training epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_acc: f64,
    pub lr: f64,
    pub p_s_probe: f64,
}

impl EpochRecord {
    pub const CSV_HEADER: &'static str = "epoch,train_loss,val_acc,lr,p_s_probe";

    pub fn csv_row(&self) -> String {
        format!("{},{},{},{},{}", self.epoch, self.train_loss, self.val_acc, self.lr, self.p_s_probe)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Meta {
    config: TrainConfig,
    encoder_seed: u64,
    history: Vec<EpochRecord>,
}

/// A trained model: backbone, frozen key encoder, memory bank, the config
/// that produced them and the per-epoch history.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub params: BackboneParams<f32>,
    pub encoder: KeyEncoder,
    pub memory: ExemplarMemory,
    pub history: Vec<EpochRecord>,
}

fn f32_tensor(name: &str, dims: &[usize], data: &[f32]) -> NamedTensor {
    NamedTensor {
        name: name.to_owned(),
        dims: dims.iter().map(|&d| d as u64).collect(),
        data: TensorData::F32(data.to_vec()),
    }
}

fn expect_f32<'c>(c: &'c Container, name: &str, dims: &[usize]) -> Result<&'c [f32]> {
    let t = c.tensor(name)?;
    let want: Vec<u64> = dims.iter().map(|&d| d as u64).collect();
    if t.dims != want {
        return Err(Error::Format(format!("tensor `{name}` has dims {:?}, expected {want:?}", t.dims)));
    }
    match &t.data {
        TensorData::F32(v) => Ok(v),
        _ => Err(Error::Format(format!("tensor `{name}` should be f32"))),
    }
}

impl Checkpoint {
    pub fn to_container(&self) -> Result<Container> {
        let mut tensors = Vec::new();
        for (name, p) in self.params.store.iter() {
            tensors.push(f32_tensor(name, p.tensor.shape(), p.tensor.data()));
        }
        let e = &self.encoder;
        tensors.push(f32_tensor("enc.projection", &[e.input_dim(), e.key_dim()], e.projection()));
        tensors.push(f32_tensor("enc.mean", &[e.channels()], e.mean()));
        tensors.push(f32_tensor("enc.std", &[e.channels()], e.std()));
        let m = &self.memory;
        let n = m.len();
        tensors.push(NamedTensor { name: "mem.ids".into(), dims: vec![n as u64], data: TensorData::U64(m.ids().to_vec()) });
        tensors.push(f32_tensor("mem.keys", &[n, m.key_dim()], m.keys()));
        tensors.push(f32_tensor("mem.values", &[n, m.token_dim()], m.values().data()));
        tensors.push(NamedTensor {
            name: "mem.live".into(),
            dims: vec![n as u64],
            data: TensorData::U8(m.live_flags().iter().map(|&l| u8::from(l)).collect()),
        });
        let meta = serde_json::to_string(&Meta {
            config: self.config.clone(),
            encoder_seed: e.seed(),
            history: self.history.clone(),
        })?;
        Ok(Container { major: MAJOR, minor: MINOR, tensors, meta })
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let meta: Meta = serde_json::from_str(&c.meta).map_err(|e| Error::Format(format!("metadata: {e}")))?;
        let cfg = &meta.config.backbone;
        cfg.validate().map_err(|e| Error::Format(format!("stored backbone config: {e}")))?;

        // Fresh init gives the exact parameter layout and decay flags.
        let mut params = BackboneParams::init(cfg, 0)?;
        let names: Vec<String> = params.store.names().map(str::to_owned).collect();
        for name in &names {
            let t = params.store.get_mut(name)?;
            let shape = t.shape().to_vec();
            t.data_mut().copy_from_slice(expect_f32(c, name, &shape)?);
        }
        let model_tensors = c.tensors.iter().filter(|t| t.name.starts_with("model.")).count();
        if model_tensors != names.len() {
            return Err(Error::Format(format!(
                "checkpoint has {model_tensors} model tensors, config implies {}",
                names.len()
            )));
        }

        let proj = c.tensor("enc.projection")?;
        if proj.dims.len() != 2 {
            return Err(Error::Format("enc.projection must be rank 2".into()));
        }
        let (d_in, d) = (proj.dims[0] as usize, proj.dims[1] as usize);
        let channels = cfg.channels;
        let encoder = KeyEncoder::from_parts(
            channels,
            d_in,
            d,
            expect_f32(c, "enc.projection", &[d_in, d])?.to_vec(),
            expect_f32(c, "enc.mean", &[channels])?.to_vec(),
            expect_f32(c, "enc.std", &[channels])?.to_vec(),
            meta.encoder_seed,
        )
        .map_err(|e| Error::Format(format!("encoder: {e}")))?;

        let ids = match &c.tensor("mem.ids")?.data {
            TensorData::U64(v) => v.clone(),
            _ => return Err(Error::Format("mem.ids should be u64".into())),
        };
        let n = ids.len();
        let live = match &c.tensor("mem.live")?.data {
            TensorData::U8(v) if v.len() == n && v.iter().all(|&b| b <= 1) => v.iter().map(|&b| b == 1).collect(),
            _ => return Err(Error::Format("mem.live should be u8 flags, one per id".into())),
        };
        let keys = expect_f32(c, "mem.keys", &[n, d])?.to_vec();
        let values = expect_f32(c, "mem.values", &[n, cfg.token_dim])?.to_vec();
        let memory = ExemplarMemory::from_parts(ids, keys, d, Tensor::matrix(n, cfg.token_dim, values)?, live)?;

        Ok(Self { config: meta.config, params, encoder, memory, history: meta.history })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.to_container()?.to_bytes()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Self::from_container(&Container::from_bytes(bytes)?)
    }

    /// Writes to a sibling temp file, then renames over `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    pub fn history_csv(&self) -> String {
        let mut s = String::from(EpochRecord::CSV_HEADER);
        s.push('\n');
        for r in &self.history {
            s.push_str(&r.csv_row());
            s.push('\n');
        }
        s
    }
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let name = path
        .file_name()
        .ok_or_else(|| Error::Io(std::io::Error::new(std::io::ErrorKind::InvalidInput, "path has no file name")))?;
    let mut tmp_name = std::ffi::OsString::from(".");
    tmp_name.push(name);
    tmp_name.push(".tmp");
    let tmp = path.with_file_name(tmp_name);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}
