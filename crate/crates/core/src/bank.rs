//! Persisted collections of unit-normalized image embeddings.
//!
//! File format (all integers little-endian): magic `EBNK`, u32 version = 1,
//! u32 dim, u64 count, then `count` records of (u16 id length, UTF-8 id
//! bytes, dim little-endian f32 values).

use std::collections::HashSet;
use std::path::Path;

use crate::embedding::{Embedding, EmbeddingBackend};
use crate::error::{Error, Result};
use crate::tensor::{f32v, Tensor};

const BANK_MAGIC: &[u8; 4] = b"EBNK";
const BANK_VERSION: u32 = 1;

/// Immutable, ordered collection of unit-normalized embeddings with ids.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBank {
    dim: usize,
    ids: Vec<String>,
    /// Row-major `len x dim` storage.
    data: Vec<f32>,
    source_tag: String,
}

impl EmbeddingBank {
    pub fn from_entries(
        entries: impl IntoIterator<Item = (String, Embedding)>,
        source_tag: impl Into<String>,
    ) -> Result<Self> {
        let mut dim = 0usize;
        let mut ids = Vec::new();
        let mut data = Vec::new();
        let mut seen = HashSet::new();
        for (id, emb) in entries {
            if dim == 0 {
                dim = emb.dim();
                if dim == 0 {
                    return Err(Error::input("bank entries must have nonzero dimension"));
                }
            }
            if emb.dim() != dim {
                return Err(Error::input(format!(
                    "bank entry {id:?} has dimension {} but bank dimension is {dim}",
                    emb.dim()
                )));
            }
            let n = f32v::l2_norm(emb.values());
            if (n - 1.0).abs() > 1e-6 {
                return Err(Error::input(format!("bank entry {id:?} is not unit-normalized")));
            }
            if !seen.insert(id.clone()) {
                return Err(Error::input(format!("duplicate bank id {id:?}")));
            }
            ids.push(id);
            data.extend_from_slice(emb.values());
        }
        if ids.is_empty() {
            return Err(Error::input("cannot build an empty bank"));
        }
        Ok(EmbeddingBank { dim, ids, data, source_tag: source_tag.into() })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn source_tag(&self) -> &str {
        &self.source_tag
    }

    pub fn id(&self, index: usize) -> &str {
        &self.ids[index]
    }

    pub fn row(&self, index: usize) -> &[f32] {
        &self.data[index * self.dim..(index + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = (&str, &[f32])> {
        self.ids
            .iter()
            .map(String::as_str)
            .zip(self.data.chunks_exact(self.dim))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = Vec::with_capacity(16 + self.data.len() * 4);
        out.extend_from_slice(BANK_MAGIC);
        out.extend_from_slice(&BANK_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.len() as u64).to_le_bytes());
        for (id, row) in self.rows() {
            let b = id.as_bytes();
            if b.len() > u16::MAX as usize {
                return Err(Error::input(format!("bank id too long: {} bytes", b.len())));
            }
            out.extend_from_slice(&(b.len() as u16).to_le_bytes());
            out.extend_from_slice(b);
            for v in row {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::from_bytes(&bytes, format!("file:{}", path.display()))
    }

    pub fn from_bytes(bytes: &[u8], source_tag: String) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        let magic = r.take(4)?;
        if magic != BANK_MAGIC {
            return Err(Error::format(0, "bad magic, not an embedding bank"));
        }
        let at = r.offset();
        let version = r.u32()?;
        if version != BANK_VERSION {
            return Err(Error::format(at, format!("unsupported bank version {version}")));
        }
        let at = r.offset();
        let dim = r.u32()? as usize;
        if dim == 0 {
            return Err(Error::format(at, "bank dimension is zero"));
        }
        let at = r.offset();
        let count = r.u64()?;
        if count == 0 {
            return Err(Error::format(at, "bank declares zero entries"));
        }
        let count = usize::try_from(count).map_err(|_| Error::format(at, "bank count overflows"))?;

        let mut ids = Vec::with_capacity(count);
        let mut data = Vec::with_capacity(count * dim);
        let mut seen = HashSet::new();
        for i in 0..count {
            let at = r.offset();
            let id = r.string().map_err(|_| {
                Error::format(at, format!("truncated payload: entry {i} of {count}"))
            })?;
            if !seen.insert(id.clone()) {
                return Err(Error::format(at, format!("duplicate bank id {id:?}")));
            }
            let at = r.offset();
            let row = r.f32_vec(dim).map_err(|_| {
                Error::format(at, format!("truncated payload: entry {i} of {count}"))
            })?;
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::format(at, format!("non-finite value in entry {id:?}")));
            }
            let n = f32v::l2_norm(&row);
            if (n - 1.0).abs() > 1e-3 {
                return Err(Error::format(at, format!("entry {id:?} is not unit-normalized (norm {n})")));
            }
            ids.push(id);
            data.extend_from_slice(&row);
        }
        r.expect_eof()?;
        Ok(EmbeddingBank { dim, ids, data, source_tag })
    }
}

/// Build a bank by embedding images in order. Ids must be unique.
pub fn build_bank(
    backend: &dyn EmbeddingBackend,
    images: &[Tensor],
    ids: &[String],
) -> Result<EmbeddingBank> {
    if images.is_empty() {
        return Err(Error::input("cannot build a bank from no images"));
    }
    if images.len() != ids.len() {
        return Err(Error::input(format!(
            "got {} images but {} ids",
            images.len(),
            ids.len()
        )));
    }
    let entries: Result<Vec<(String, Embedding)>> = images
        .iter()
        .zip(ids)
        .map(|(img, id)| Ok((id.clone(), backend.embed_image(img)?)))
        .collect();
    EmbeddingBank::from_entries(entries?, backend.source_tag().to_string())
}

/// Little-endian reader with byte-offset tracking for format errors.
pub(crate) struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub fn new(bytes: &'a [u8]) -> Self {
        ByteReader { bytes, pos: 0 }
    }

    pub fn offset(&self) -> u64 {
        self.pos as u64
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::format(
                self.bytes.len() as u64,
                format!("unexpected end of file (wanted {n} bytes at offset {})", self.pos),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
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

    pub fn f32_vec(&mut self, n: usize) -> Result<Vec<f32>> {
        let raw = self.take(n * 4)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    pub fn f64_vec(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n * 8)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    /// u16 length-prefixed UTF-8 string.
    pub fn string(&mut self) -> Result<String> {
        let at = self.offset();
        let len = self.u16()? as usize;
        let raw = self.take(len)?;
        String::from_utf8(raw.to_vec()).map_err(|_| Error::format(at, "invalid UTF-8 string"))
    }

    pub fn expect_eof(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::format(
                self.pos as u64,
                format!("{} trailing bytes after declared payload", self.bytes.len() - self.pos),
            ));
        }
        Ok(())
    }
}
