//! Versioned binary checkpoint: magic bytes, format version, config
//! snapshot, epoch/optimizer counters, and a named tensor table with shapes
//! and raw little-endian f64 values. Save -> load -> save is byte-identical.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use anyhow::{Context, Result, bail};
use cape_core::autodiff::Tensor;
use cape_core::params::ParamStore;

use crate::config::RunConfig;

const MAGIC: &[u8; 4] = b"CGTD";
const VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: RunConfig,
    /// Epochs completed (training resumes here).
    pub epoch: u32,
    pub adam_step: u64,
    pub params: ParamStore,
    pub adam_m: BTreeMap<String, Vec<f64>>,
    pub adam_v: BTreeMap<String, Vec<f64>>,
}

fn write_bytes(out: &mut Vec<u8>, bytes: &[u8]) {
    out.extend_from_slice(&(bytes.len() as u64).to_le_bytes());
    out.extend_from_slice(bytes);
}

fn write_tensor(out: &mut Vec<u8>, name: &str, shape: &[usize], values: &[f64]) {
    write_bytes(out, name.as_bytes());
    out.extend_from_slice(&(shape.len() as u64).to_le_bytes());
    for &d in shape {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    out.extend_from_slice(&(values.len() as u64).to_le_bytes());
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn save(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let config = serde_json::to_vec(&ckpt.config).context("serializing config snapshot")?;
    write_bytes(&mut out, &config);
    out.extend_from_slice(&ckpt.epoch.to_le_bytes());
    out.extend_from_slice(&ckpt.config.seed.to_le_bytes());
    out.extend_from_slice(&ckpt.adam_step.to_le_bytes());

    let n = ckpt.params.len() + ckpt.adam_m.len() + ckpt.adam_v.len();
    out.extend_from_slice(&(n as u64).to_le_bytes());
    for (name, tensor) in ckpt.params.iter() {
        write_tensor(&mut out, name, tensor.shape(), tensor.values());
    }
    for (name, values) in &ckpt.adam_m {
        write_tensor(&mut out, &format!("adam.m.{name}"), &[values.len()], values);
    }
    for (name, values) in &ckpt.adam_v {
        write_tensor(&mut out, &format!("adam.v.{name}"), &[values.len()], values);
    }

    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut file = std::fs::File::create(path)
        .with_context(|| format!("creating checkpoint {}", path.display()))?;
    file.write_all(&out)?;
    Ok(())
}

struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let Some(chunk) = self.data.get(self.pos..self.pos + n) else {
            bail!("checkpoint truncated at byte {}", self.pos);
        };
        self.pos += n;
        Ok(chunk)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn bytes(&mut self) -> Result<&'a [u8]> {
        let len = self.u64()? as usize;
        self.take(len)
    }
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let mut data = Vec::new();
    std::fs::File::open(path)
        .with_context(|| format!("opening checkpoint {}", path.display()))?
        .read_to_end(&mut data)?;
    let mut r = Reader {
        data: &data,
        pos: 0,
    };
    if r.take(4)? != MAGIC {
        bail!("{} is not a checkpoint (bad magic)", path.display());
    }
    let version = r.u32()?;
    if version != VERSION {
        bail!(
            "checkpoint {} has format version {version}, this build reads version {VERSION}",
            path.display()
        );
    }
    let config: RunConfig =
        serde_json::from_slice(r.bytes()?).context("parsing config snapshot")?;
    let epoch = r.u32()?;
    let seed = r.u64()?;
    if seed != config.seed {
        bail!("checkpoint seed {seed} disagrees with config snapshot {}", config.seed);
    }
    let adam_step = r.u64()?;
    let n = r.u64()? as usize;

    let mut params = ParamStore::new();
    let mut adam_m = BTreeMap::new();
    let mut adam_v = BTreeMap::new();
    for _ in 0..n {
        let name = String::from_utf8(r.bytes()?.to_vec()).context("tensor name")?;
        let rank = r.u64()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64()? as usize);
        }
        let len = r.u64()? as usize;
        let mut values = Vec::with_capacity(len);
        for _ in 0..len {
            values.push(f64::from_le_bytes(r.take(8)?.try_into().unwrap()));
        }
        if let Some(rest) = name.strip_prefix("adam.m.") {
            adam_m.insert(rest.to_string(), values);
        } else if let Some(rest) = name.strip_prefix("adam.v.") {
            adam_v.insert(rest.to_string(), values);
        } else {
            params.insert(name, Tensor::new(shape, values)?);
        }
    }
    if r.pos != data.len() {
        bail!("checkpoint has {} trailing bytes", data.len() - r.pos);
    }
    Ok(Checkpoint {
        config,
        epoch,
        adam_step,
        params,
        adam_m,
        adam_v,
    })
}
