//! `RFLV` checkpoint files.
//!
//! Layout, all integers `u32` little-endian:
//! magic `RFLV`, version, record length + UTF-8 `key=value` lines, tensor
//! count, then per tensor: name length + name, rank, dims, `f32` data.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{ModelConfig, RFlavNetwork};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const MAGIC: &[u8; 4] = b"RFLV";
pub const VERSION: u32 = 1;

/// Decoded checkpoint contents.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    pub record: BTreeMap<String, String>,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    pub fn tensor(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }
}

fn put_u32(w: &mut impl Write, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Format(format!("value {v} does not fit in u32")))?;
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

pub fn write_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    let mut text = String::new();
    for (k, v) in &ckpt.record {
        if k.contains(['=', '\n']) || v.contains('\n') {
            return Err(Error::Format(format!("record entry {k:?} cannot be stored")));
        }
        text.push_str(&format!("{k}={v}\n"));
    }
    put_u32(&mut w, text.len())?;
    w.write_all(text.as_bytes())?;
    put_u32(&mut w, ckpt.tensors.len())?;
    for (name, t) in &ckpt.tensors {
        put_u32(&mut w, name.len())?;
        w.write_all(name.as_bytes())?;
        put_u32(&mut w, t.rank())?;
        for &d in t.shape() {
            put_u32(&mut w, d)?;
        }
        for x in t.data() {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

struct Reader<'a, R> {
    inner: R,
    path: &'a Path,
}

impl<R: Read> Reader<'_, R> {
    fn bytes(&mut self, n: usize, what: &str) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        (&mut self.inner).take(n as u64).read_to_end(&mut buf)?;
        if buf.len() != n {
            return Err(Error::Truncated {
                path: self.path.to_path_buf(),
                detail: format!("{what}: wanted {n} bytes, got {}", buf.len()),
            });
        }
        Ok(buf)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        let b = self.bytes(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let file = File::open(path)?;
    let file_len = file.metadata()?.len() as usize;
    let mut r = Reader { inner: BufReader::new(file), path };
    if r.bytes(4, "magic")? != MAGIC {
        return Err(Error::BadMagic { path: path.to_path_buf(), expected: "RFLV" });
    }
    let version = r.u32("version")? as u32;
    if version != VERSION {
        return Err(Error::VersionMismatch { path: path.to_path_buf(), found: version, expected: VERSION });
    }
    // Lengths are bounded by the file size before allocating.
    let bounded = |n: usize, what: &str| -> Result<usize> {
        if n > file_len {
            Err(Error::Truncated { path: path.to_path_buf(), detail: format!("{what} length {n} exceeds file") })
        } else {
            Ok(n)
        }
    };
    let len = bounded(r.u32("record length")?, "record")?;
    let text = String::from_utf8(r.bytes(len, "record")?)
        .map_err(|_| Error::Format("checkpoint record is not UTF-8".into()))?;
    let mut record = BTreeMap::new();
    for line in text.lines().filter(|l| !l.is_empty()) {
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Format(format!("bad record line {line:?}")))?;
        record.insert(k.to_string(), v.to_string());
    }
    let count = bounded(r.u32("tensor count")?, "tensor count")?;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let n = bounded(r.u32("name length")?, "name")?;
        let name = String::from_utf8(r.bytes(n, "name")?)
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
        let rank = bounded(r.u32("rank")?, "rank")?;
        let shape = (0..rank).map(|_| r.u32("dim")).collect::<Result<Vec<_>>>()?;
        let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let bytes = numel.and_then(|n| n.checked_mul(4)).unwrap_or(usize::MAX);
        let raw = r.bytes(bounded(bytes, &name)?, &name)?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        tensors.push((name, Tensor::from_vec(shape, data)?));
    }
    let mut rest = [0u8; 1];
    if r.inner.read(&mut rest)? != 0 {
        return Err(Error::Format(format!("{}: trailing bytes after last tensor", path.display())));
    }
    Ok(Checkpoint { record, tensors })
}

impl RFlavNetwork<f32> {
    /// Config record plus every parameter by name.
    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            record: self.config().to_record().into_iter().collect(),
            tensors: self.params().iter().map(|(n, t)| (n.to_string(), t.clone())).collect(),
        }
    }

    /// Rebuild a network from a checkpoint's record and tensors. Extra
    /// tensors (optimizer state) are ignored.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let config = ModelConfig::from_record(&ckpt.record)?;
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let mut net = Self::new(config, &mut rng)?;
        net.params_mut().load_named(&ckpt.tensors)?;
        Ok(net)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_checkpoint(path, &self.to_checkpoint())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&read_checkpoint(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::BlockVariant;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> ModelConfig {
        ModelConfig { hidden: 16, heads: 2, blocks: 2, variant: BlockVariant::ConcatAttention, ..Default::default() }
    }

    #[test]
    fn network_round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.rflv");
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut net = RFlavNetwork::<f32>::new(small(), &mut rng).unwrap();
        net.params_mut().randomize(0.1, &mut rng);
        net.save(&path).unwrap();
        let back = RFlavNetwork::load(&path).unwrap();
        assert_eq!(back.config(), net.config());
        assert_eq!(back.params(), net.params());
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.rflv");
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        RFlavNetwork::<f32>::new(small(), &mut rng).unwrap().save(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();

        let bad = dir.path().join("bad");
        let mut b = bytes.clone();
        b[0] = b'X';
        std::fs::write(&bad, &b).unwrap();
        assert!(matches!(read_checkpoint(&bad), Err(Error::BadMagic { .. })));

        let mut b = bytes.clone();
        b[4] = 9;
        std::fs::write(&bad, &b).unwrap();
        assert!(matches!(read_checkpoint(&bad), Err(Error::VersionMismatch { found: 9, .. })));

        std::fs::write(&bad, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(read_checkpoint(&bad), Err(Error::Truncated { .. })));

        let mut b = bytes;
        b.push(0);
        std::fs::write(&bad, &b).unwrap();
        assert!(read_checkpoint(&bad).is_err());
    }

    #[test]
    fn missing_parameter_fails_load() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let net = RFlavNetwork::<f32>::new(small(), &mut rng).unwrap();
        let mut ckpt = net.to_checkpoint();
        ckpt.tensors.pop();
        assert!(RFlavNetwork::from_checkpoint(&ckpt).is_err());
    }
}
