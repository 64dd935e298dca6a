//! The `SSRW` weight file.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "SSRW"                      magic
//! u16                         format version (1)
//! u32 + bytes                 network config in key = value text form
//! u64                         FNV-1a hash of the config bytes
//! u32                         tensor count
//! per tensor:
//!   u16 + bytes               name, `<conv>.weight` or `<conv>.bias`
//!   u8                        dtype tag (0 = f32)
//!   u8                        rank
//!   u32 * rank                dims
//!   f32 * prod(dims)          values
//! ```

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, ErrorKind, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::network::{Network, NetworkConfig};

pub const MAGIC: &[u8; 4] = b"SSRW";
pub const VERSION: u16 = 1;
const DTYPE_F32: u8 = 0;

/// 64-bit FNV-1a.
fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

struct Entry {
    dims: Vec<usize>,
    values: Vec<f32>,
}

fn put_tensor(out: &mut Vec<u8>, name: &str, dims: &[usize], values: &[f32]) -> Result<()> {
    let name_len = u16::try_from(name.len())
        .map_err(|_| Error::WeightFormat(format!("tensor name too long: {name}")))?;
    out.extend_from_slice(&name_len.to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(DTYPE_F32);
    out.push(dims.len() as u8);
    for &d in dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(())
}

/// Serializes a network.
pub fn encode(net: &Network<f32>) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let cfg = net.config().to_text();
    out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
    out.extend_from_slice(cfg.as_bytes());
    out.extend_from_slice(&fnv1a(cfg.as_bytes()).to_le_bytes());

    let weights = net.weights();
    let count: usize = weights.iter().map(|w| 1 + w.bias.is_some() as usize).sum();
    out.extend_from_slice(&(count as u32).to_le_bytes());
    for w in weights {
        put_tensor(&mut out, &format!("{}.weight", w.name), &w.kernel.shape().dims(), w.kernel.data())?;
        if let Some(b) = &w.bias {
            put_tensor(&mut out, &format!("{}.bias", w.name), &[b.len()], b)?;
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::WeightFormat(format!("truncated file while reading {what} at byte {}", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self, what: &str) -> Result<[u8; N]> {
        Ok(self.take(N, what)?.try_into().expect("length checked"))
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.array::<1>(what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.array(what)?))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array(what)?))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array(what)?))
    }
}

/// Parses a weight file and rebuilds the network it describes.
pub fn decode(bytes: &[u8]) -> Result<Network<f32>> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(4, "magic")? != MAGIC {
        return Err(Error::WeightFormat("bad magic, not a weight file".into()));
    }
    let version = c.u16("version")?;
    if version != VERSION {
        return Err(Error::WeightFormat(format!(
            "unsupported format version {version}, expected {VERSION}"
        )));
    }
    let cfg_len = c.u32("config length")? as usize;
    let cfg_bytes = c.take(cfg_len, "config")?;
    let hash = c.u64("config hash")?;
    if fnv1a(cfg_bytes) != hash {
        return Err(Error::WeightFormat("config hash mismatch".into()));
    }
    let cfg_text = std::str::from_utf8(cfg_bytes)
        .map_err(|_| Error::WeightFormat("config is not UTF-8".into()))?;
    let config = NetworkConfig::parse(cfg_text)?;

    let count = c.u32("tensor count")? as usize;
    let mut table: HashMap<String, Entry> = HashMap::new();
    for _ in 0..count {
        let name_len = c.u16("tensor name length")? as usize;
        let name = std::str::from_utf8(c.take(name_len, "tensor name")?)
            .map_err(|_| Error::WeightFormat("tensor name is not UTF-8".into()))?
            .to_string();
        let dtype = c.u8("dtype")?;
        if dtype != DTYPE_F32 {
            return Err(Error::WeightFormat(format!("tensor `{name}` has unknown dtype {dtype}")));
        }
        let rank = c.u8("rank")? as usize;
        let dims = (0..rank)
            .map(|_| c.u32("dims").map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let len = dims
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| Error::WeightFormat(format!("tensor `{name}` is too large")))?;
        let raw = c.take(
            len.checked_mul(4)
                .ok_or_else(|| Error::WeightFormat(format!("tensor `{name}` is too large")))?,
            "tensor values",
        )?;
        let values = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("chunk of 4")))
            .collect();
        if table.insert(name.clone(), Entry { dims, values }).is_some() {
            return Err(Error::WeightFormat(format!("duplicate tensor `{name}`")));
        }
    }
    if c.pos != bytes.len() {
        return Err(Error::WeightFormat(format!(
            "{} trailing bytes after tensor table",
            bytes.len() - c.pos
        )));
    }

    let mut net = Network::<f32>::build(&config, 0)?;
    for slot in net.weights_mut() {
        let key = format!("{}.weight", slot.name);
        let k = table
            .remove(&key)
            .ok_or_else(|| Error::WeightFormat(format!("missing tensor `{key}`")))?;
        let want = slot.kernel.shape().dims();
        if k.dims != want {
            return Err(Error::WeightFormat(format!(
                "tensor `{key}` has dims {:?}, architecture expects {want:?}",
                k.dims
            )));
        }
        slot.kernel.data_mut().copy_from_slice(&k.values);
        if let Some(bias) = slot.bias.as_mut() {
            let key = format!("{}.bias", slot.name);
            let b = table
                .remove(&key)
                .ok_or_else(|| Error::WeightFormat(format!("missing tensor `{key}`")))?;
            if b.dims != [bias.len()] {
                return Err(Error::WeightFormat(format!(
                    "tensor `{key}` has dims {:?}, architecture expects [{}]",
                    b.dims,
                    bias.len()
                )));
            }
            bias.copy_from_slice(&b.values);
        }
    }
    if let Some(name) = table.keys().min() {
        return Err(Error::WeightFormat(format!("unexpected tensor `{name}`")));
    }
    Ok(net)
}

pub fn save_weights(net: &Network<f32>, mut dst: impl Write) -> Result<()> {
    dst.write_all(&encode(net)?)?;
    dst.flush()?;
    Ok(())
}

pub fn load_weights(mut src: impl Read) -> Result<Network<f32>> {
    let mut bytes = Vec::new();
    src.read_to_end(&mut bytes)?;
    decode(&bytes)
}

pub fn save_weights_file(net: &Network<f32>, path: impl AsRef<Path>) -> Result<()> {
    save_weights(net, BufWriter::new(File::create(path)?))
}

pub fn load_weights_file(path: impl AsRef<Path>) -> Result<Network<f32>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| match e.kind() {
        ErrorKind::NotFound => Error::WeightFormat(format!("{} not found", path.display())),
        _ => Error::Io(e),
    })?;
    load_weights(BufReader::new(file))
}
