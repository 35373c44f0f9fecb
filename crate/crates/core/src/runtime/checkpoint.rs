//! Binary checkpoint layout, all integers little-endian:
//!
//! ```text
//! magic "XFMRCKPT" | u32 version | u32 len, config text
//! u32 count, (u32 len, token bytes)*                       vocabulary
//! u32 count, (u32 len, name, u32 rank, u64 dim*, f32 data*)*  tensors
//! u32 crc32 of everything before it
//! ```

use std::path::Path;

use crate::config::Config;
use crate::embedding::Vocab;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"XFMRCKPT";
pub const VERSION: u32 = 1;

fn put_u32(out: &mut Vec<u8>, x: usize) -> Result<()> {
    let x = u32::try_from(x).map_err(|_| Error::Overflow)?;
    out.extend_from_slice(&x.to_le_bytes());
    Ok(())
}

fn put_bytes(out: &mut Vec<u8>, b: &[u8]) -> Result<()> {
    put_u32(out, b.len())?;
    out.extend_from_slice(b);
    Ok(())
}

pub fn write_checkpoint(model: &Model<f32>, vocab: &Vocab) -> Result<Vec<u8>> {
    if vocab.len() != model.cfg.vocab {
        return Err(Error::Config(format!("vocabulary of {} for a model expecting {}", vocab.len(), model.cfg.vocab)));
    }
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    put_bytes(&mut out, model.cfg.to_config().to_text().as_bytes())?;
    put_u32(&mut out, vocab.len())?;
    for t in vocab.tokens() {
        put_bytes(&mut out, t.as_bytes())?;
    }
    put_u32(&mut out, model.store.len())?;
    for id in model.store.ids() {
        put_bytes(&mut out, model.store.name(id).as_bytes())?;
        let t = model.store.get(id);
        put_u32(&mut out, t.shape().len())?;
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &x in t.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

pub fn save_checkpoint(model: &Model<f32>, vocab: &Vocab, path: &Path) -> Result<()> {
    let bytes = write_checkpoint(model, vocab)?;
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    at: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| Error::Integrity("checkpoint is truncated".into()))?;
        let s = &self.buf[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn u64(&mut self) -> Result<usize> {
        usize::try_from(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes"))).map_err(|_| Error::Overflow)
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Format("string field is not UTF-8".into()))
    }
}

pub fn read_checkpoint(bytes: &[u8]) -> Result<(Model<f32>, Vocab)> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic bytes)".into()));
    }
    if bytes.len() < MAGIC.len() + 4 {
        return Err(Error::Integrity("checkpoint is truncated".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    if bytes.len() < 16 {
        return Err(Error::Integrity("checkpoint is truncated".into()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let crc = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    if crc32fast::hash(body) != crc {
        return Err(Error::Integrity("checksum mismatch (truncated or corrupted file)".into()));
    }
    let mut r = Reader { buf: body, at: 12 };
    let cfg = ModelConfig::from_config(&Config::parse(&r.string()?)?)?;
    let n_vocab = r.u32()?;
    let vocab = Vocab::from_tokens((0..n_vocab).map(|_| r.string()).collect::<Result<_>>()?)?;
    let mut model = Model::<f32>::new(cfg, 0)?;
    if vocab.len() != model.cfg.vocab {
        return Err(Error::Config(format!("checkpoint vocabulary has {} entries, config says {}", vocab.len(), model.cfg.vocab)));
    }
    let count = r.u32()?;
    if count != model.store.len() {
        return Err(Error::Config(format!("checkpoint has {count} tensors, its config builds {}", model.store.len())));
    }
    let ids: Vec<_> = model.store.ids().collect();
    for id in ids {
        let name = r.string()?;
        let rank = r.u32()?;
        let shape = (0..rank).map(|_| r.u64()).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or(Error::Overflow)?;
        let raw = r.take(n.checked_mul(4).ok_or(Error::Overflow)?)?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        let want = model.store.get(id);
        if name != model.store.name(id) || shape != want.shape() {
            return Err(Error::Config(format!(
                "checkpoint tensor {name} {shape:?} does not match {} {:?}",
                model.store.name(id),
                want.shape()
            )));
        }
        model.store.set(id, Tensor::new(&shape, data)?);
    }
    if r.at != body.len() {
        return Err(Error::Format("trailing bytes after the tensor table".into()));
    }
    Ok((model, vocab))
}

pub fn load_checkpoint(path: &Path) -> Result<(Model<f32>, Vocab)> {
    read_checkpoint(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Architecture;

    fn sample() -> (Model<f32>, Vocab) {
        let mut c = ModelConfig::new(Architecture::DecoderOnly, 1, 8, 2, 9);
        c.d_ffn = 8;
        (Model::new(c, 4).unwrap(), Vocab::from_chars("abcd"))
    }

    #[test]
    fn round_trip_is_bitwise() {
        let (m, v) = sample();
        let a = write_checkpoint(&m, &v).unwrap();
        let (m2, v2) = read_checkpoint(&a).unwrap();
        assert_eq!(v, v2);
        assert_eq!(write_checkpoint(&m2, &v2).unwrap(), a);
    }

    #[test]
    fn corruption_is_reported() {
        let (m, v) = sample();
        let mut a = write_checkpoint(&m, &v).unwrap();
        assert!(matches!(read_checkpoint(&a[..a.len() - 10]), Err(Error::Integrity(_))));
        a[40] ^= 1;
        assert!(matches!(read_checkpoint(&a), Err(Error::Integrity(_))));
        a[0] = b'Y';
        assert!(matches!(read_checkpoint(&a), Err(Error::Format(_))));
    }
}
