//! Per-token semantic vectors.
//!
//! Two providers sit behind [`EmbeddingSource`]: SPNE files written by an
//! external encoder, and a deterministic synthetic generator used in tests
//! and examples.
//!
//! SPNE layout (little-endian, no padding):
//!
//! ```text
//! "SPNE" | u16 version = 1 | u32 d
//! repeated until EOF:
//!   u32 id_len | id bytes (UTF-8) | u32 n | n*d binary32, row-major
//! ```

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::corpus::Sentence;
use crate::error::{Error, Result};

pub const SPNE_MAGIC: &[u8; 4] = b"SPNE";
pub const SPNE_VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddedSentence {
    pub sentence_id: String,
    pub n: usize,
    pub d: usize,
    /// Row-major `n x d`.
    pub vectors: Vec<f32>,
}

impl EmbeddedSentence {
    pub fn row(&self, i: usize) -> &[f32] {
        &self.vectors[i * self.d..(i + 1) * self.d]
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.vectors.iter().map(|&v| f64::from(v)).collect()
    }
}

/// Streams SPNE records to any writer.
pub struct SpneWriter<W: Write> {
    inner: W,
    d: usize,
}

impl<W: Write> SpneWriter<W> {
    pub fn new(mut inner: W, d: usize) -> Result<Self> {
        let d32 = u32::try_from(d).map_err(|_| Error::Format(format!("width {d} too large")))?;
        inner.write_all(SPNE_MAGIC)?;
        inner.write_all(&SPNE_VERSION.to_le_bytes())?;
        inner.write_all(&d32.to_le_bytes())?;
        Ok(SpneWriter { inner, d })
    }

    pub fn write_record(&mut self, id: &str, n: usize, vectors: &[f32]) -> Result<()> {
        if vectors.len() != n * self.d {
            return Err(Error::dim("spne record", &[n, self.d], &[vectors.len()]));
        }
        self.inner.write_all(&(id.len() as u32).to_le_bytes())?;
        self.inner.write_all(id.as_bytes())?;
        self.inner.write_all(&(n as u32).to_le_bytes())?;
        for v in vectors {
            self.inner.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn finish(mut self) -> Result<W> {
        self.inner.flush()?;
        Ok(self.inner)
    }
}

pub fn write_embedding_file(path: &Path, d: usize, records: &[EmbeddedSentence]) -> Result<()> {
    let mut w = SpneWriter::new(BufWriter::new(File::create(path)?), d)?;
    for r in records {
        if r.d != d {
            return Err(Error::dim("spne record", &[r.n, d], &[r.n, r.d]));
        }
        w.write_record(&r.sentence_id, r.n, &r.vectors)?;
    }
    w.finish()?;
    Ok(())
}

/// All records of an SPNE file, loaded eagerly.
#[derive(Debug, Clone)]
pub struct EmbeddingFile {
    d: usize,
    records: HashMap<String, EmbeddedSentence>,
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, len: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < len {
            return Err(Error::Corruption {
                offset: self.pos as u64,
                message: format!("truncated {what}: need {len} bytes, {} left", self.buf.len() - self.pos),
            });
        }
        let out = &self.buf[self.pos..self.pos + len];
        self.pos += len;
        Ok(out)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

impl EmbeddingFile {
    pub fn open(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 10 || &bytes[..4] != SPNE_MAGIC {
            return Err(Error::Format("missing SPNE magic".into()));
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != SPNE_VERSION {
            return Err(Error::Format(format!("unsupported SPNE version {version}")));
        }
        let d = u32::from_le_bytes([bytes[6], bytes[7], bytes[8], bytes[9]]) as usize;
        if d == 0 {
            return Err(Error::Format("embedding width is zero".into()));
        }
        let mut cur = Cursor { buf: bytes, pos: 10 };
        let mut records = HashMap::new();
        while cur.pos < bytes.len() {
            let start = cur.pos as u64;
            let id_len = cur.u32("id length")? as usize;
            let id = std::str::from_utf8(cur.take(id_len, "id")?)
                .map_err(|e| Error::Corruption {
                    offset: start + 4,
                    message: format!("id is not UTF-8: {e}"),
                })?
                .to_string();
            let n = cur.u32("row count")? as usize;
            let raw = cur.take(n * d * 4, "vector block")?;
            let vectors = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            if records.contains_key(&id) {
                return Err(Error::Corruption {
                    offset: start,
                    message: format!("duplicate record `{id}`"),
                });
            }
            records.insert(
                id.clone(),
                EmbeddedSentence {
                    sentence_id: id,
                    n,
                    d,
                    vectors,
                },
            );
        }
        Ok(EmbeddingFile { d, records })
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, id: &str) -> Result<&EmbeddedSentence> {
        self.records.get(id).ok_or_else(|| Error::MissingId(id.to_string()))
    }
}

/// Deterministic pseudo-embeddings. Each component is a hash of
/// `(seed, sentence id, token index, component)` mapped into `[-1, 1]`.
/// With a class signal, every token covered by an annotation of label `l`
/// additionally receives `signal[l]` (summed over all covering annotations).
#[derive(Debug, Clone)]
pub struct SyntheticEmbeddings {
    seed: u64,
    d: usize,
    class_signal: Option<BTreeMap<String, Vec<f64>>>,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

impl SyntheticEmbeddings {
    pub fn new(seed: u64, d: usize, class_signal: Option<BTreeMap<String, Vec<f64>>>) -> Result<Self> {
        if d < 2 {
            return Err(Error::Contract(format!("synthetic width must be >= 2, got {d}")));
        }
        if let Some(signal) = &class_signal {
            if let Some((label, v)) = signal.iter().find(|(_, v)| v.len() != d) {
                return Err(Error::Contract(format!(
                    "signal for `{label}` has width {}, expected {d}",
                    v.len()
                )));
            }
        }
        Ok(SyntheticEmbeddings { seed, d, class_signal })
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    /// The noise component for one token.
    pub fn token_vector(&self, sentence_id: &str, index: usize) -> Vec<f64> {
        let base = splitmix64(self.seed ^ splitmix64(fnv1a(sentence_id.as_bytes())))
            ^ splitmix64(index as u64).rotate_left(17);
        (0..self.d)
            .map(|k| {
                let bits = splitmix64(base.wrapping_add((k as u64).wrapping_mul(0xA24B_AED4_963E_E407)));
                let unit = (bits >> 11) as f64 / (1u64 << 53) as f64;
                2.0 * unit - 1.0
            })
            .collect()
    }

    pub fn embed(&self, sentence: &Sentence) -> EmbeddedSentence {
        let n = sentence.len();
        let mut vectors = Vec::with_capacity(n * self.d);
        for i in 0..n {
            let mut v = self.token_vector(&sentence.id, i);
            if let Some(signal) = &self.class_signal {
                for a in &sentence.annotations {
                    if (a.start..=a.end).contains(&(i + 1)) {
                        if let Some(s) = signal.get(&a.label) {
                            v.iter_mut().zip(s).for_each(|(x, y)| *x += y);
                        }
                    }
                }
            }
            vectors.extend(v.into_iter().map(|x| x as f32));
        }
        EmbeddedSentence {
            sentence_id: sentence.id.clone(),
            n,
            d: self.d,
            vectors,
        }
    }
}

/// Standard basis vectors `e_0, e_1, ...` assigned to labels in order.
pub fn orthogonal_signals<'a>(
    labels: impl IntoIterator<Item = &'a str>,
    d: usize,
) -> Result<BTreeMap<String, Vec<f64>>> {
    let mut out = BTreeMap::new();
    for (k, label) in labels.into_iter().enumerate() {
        if k >= d {
            return Err(Error::Contract(format!(
                "cannot place more than {d} orthogonal signals in width {d}"
            )));
        }
        let mut v = vec![0.0; d];
        v[k] = 1.0;
        out.insert(label.to_string(), v);
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub enum EmbeddingSource {
    File(EmbeddingFile),
    Synthetic(SyntheticEmbeddings),
}

impl EmbeddingSource {
    pub fn read_file(path: &Path) -> Result<Self> {
        Ok(EmbeddingSource::File(EmbeddingFile::open(path)?))
    }

    pub fn synthetic(seed: u64, d: usize, class_signal: Option<BTreeMap<String, Vec<f64>>>) -> Result<Self> {
        Ok(EmbeddingSource::Synthetic(SyntheticEmbeddings::new(
            seed,
            d,
            class_signal,
        )?))
    }

    pub fn dim(&self) -> usize {
        match self {
            EmbeddingSource::File(f) => f.dim(),
            EmbeddingSource::Synthetic(s) => s.dim(),
        }
    }

    /// Vectors for `sentence`. File-backed lookups check that the stored
    /// row count matches the token count.
    pub fn lookup(&self, sentence: &Sentence) -> Result<EmbeddedSentence> {
        match self {
            EmbeddingSource::File(f) => {
                let rec = f.get(&sentence.id)?;
                if rec.n != sentence.len() {
                    return Err(Error::Validation(format!(
                        "sentence `{}` has {} tokens but {} embedding rows",
                        sentence.id,
                        sentence.len(),
                        rec.n
                    )));
                }
                Ok(rec.clone())
            }
            EmbeddingSource::Synthetic(s) => Ok(s.embed(sentence)),
        }
    }
}
