//! Precomputed teacher-embedding datasets.
//!
//! On-disk layout (little-endian):
//!
//! ```text
//! "VSDS" | version u32 | d u32 | d_pre u32 | rows u64 | language count u32 | 2-byte codes
//! per row: language index u16 | text offset u64 | text length u32 | final f32*d | pre-dense f32*d_pre
//! text heap (UTF-8, rows concatenated)
//! ```

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::corpus::{is_language_code, CorpusRecord, Tagged};
use crate::error::{Error, Result};
use crate::segmenter::Segmenter;

pub const MAGIC: &[u8; 4] = b"VSDS";
pub const VERSION: u32 = 1;
pub const UNIT_NORM_TOL: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct TeacherRecord {
    pub text: String,
    pub language: String,
    pub final_embedding: Vec<f32>,
    pub pre_dense: Option<Vec<f32>>,
}

impl Tagged for TeacherRecord {
    fn language(&self) -> &str {
        &self.language
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QuotaPolicy {
    pub caps: BTreeMap<String, usize>,
    pub default_cap: usize,
}

impl QuotaPolicy {
    /// Default caps: 100K Turkish and English rows, 10K for every other language.
    pub fn standard() -> Self {
        QuotaPolicy {
            caps: [("tr".to_string(), 100_000), ("en".to_string(), 100_000)].into(),
            default_cap: 10_000,
        }
    }

    pub fn cap(&self, language: &str) -> usize {
        self.caps.get(language).copied().unwrap_or(self.default_cap)
    }

    /// Parses `tr=100000,en=100000,default=10000`.
    pub fn parse(text: &str) -> Result<Self> {
        let mut caps = BTreeMap::new();
        let mut default_cap = None;
        for part in text.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (k, v) = part
                .split_once('=')
                .ok_or_else(|| Error::Invalid(format!("quota entry {part:?} is not key=value")))?;
            let v: usize = v
                .trim()
                .parse()
                .map_err(|_| Error::Invalid(format!("quota cap {v:?} is not a count")))?;
            match k.trim() {
                "default" => default_cap = Some(v),
                lang if is_language_code(lang) => {
                    caps.insert(lang.to_string(), v);
                }
                other => return Err(Error::Invalid(format!("bad quota language {other:?}"))),
            }
        }
        Ok(QuotaPolicy {
            caps,
            default_cap: default_cap.ok_or_else(|| Error::Invalid("quota needs a default=N entry".into()))?,
        })
    }
}

fn language_seed(seed: u64, language: &str) -> u64 {
    // FNV-1a over the code, mixed with the run seed
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in language.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h ^ seed.rotate_left(17)
}

/// Keeps at most `cap` rows per language, chosen by a seeded shuffle of that
/// language's rows, and returns them in a seeded global order.
pub fn apply_quota<T: Tagged>(records: impl IntoIterator<Item = T>, policy: &QuotaPolicy, seed: u64) -> Vec<T> {
    let mut by_lang: BTreeMap<String, Vec<T>> = BTreeMap::new();
    for r in records {
        by_lang.entry(r.language().to_string()).or_default().push(r);
    }
    let mut out = Vec::new();
    for (lang, mut rows) in by_lang {
        let cap = policy.cap(&lang);
        if rows.len() > cap {
            rows.shuffle(&mut ChaCha8Rng::seed_from_u64(language_seed(seed, &lang)));
            rows.truncate(cap);
        }
        out.extend(rows);
    }
    out.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct TeacherOutput {
    pub final_embedding: Vec<f32>,
    pub pre_dense: Option<Vec<f32>>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PrecomputeStats {
    pub kept: usize,
    pub skipped_non_finite: usize,
    pub skipped_zero_norm: usize,
    pub skipped_encoder_error: usize,
}

fn l2_normalize(v: &[f32]) -> Option<Vec<f32>> {
    let norm = v.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt();
    if !(norm > 0.0) || !norm.is_finite() {
        return None;
    }
    Some(v.iter().map(|&x| (x as f64 / norm) as f32).collect())
}

/// Runs the teacher over every record and stores unit-normalized final
/// vectors. Encoding fans out across threads; output order follows input order.
pub fn precompute<F>(records: &[CorpusRecord], encoder: F) -> (Vec<TeacherRecord>, PrecomputeStats)
where
    F: Fn(&str) -> Result<TeacherOutput> + Sync,
{
    let outputs: Vec<Result<TeacherOutput>> = records.par_iter().map(|r| encoder(&r.text)).collect();
    let mut stats = PrecomputeStats::default();
    let mut out = Vec::with_capacity(records.len());
    for (record, output) in records.iter().zip(outputs) {
        let Ok(output) = output else {
            stats.skipped_encoder_error += 1;
            continue;
        };
        let finite = |v: &[f32]| v.iter().all(|x| x.is_finite());
        if !finite(&output.final_embedding) || !output.pre_dense.as_deref().is_none_or(finite) {
            stats.skipped_non_finite += 1;
            continue;
        }
        let Some(final_embedding) = l2_normalize(&output.final_embedding) else {
            stats.skipped_zero_norm += 1;
            continue;
        };
        out.push(TeacherRecord {
            text: record.text.clone(),
            language: record.language.clone(),
            final_embedding,
            pre_dense: output.pre_dense,
        });
    }
    stats.kept = out.len();
    (out, stats)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub d: usize,
    pub d_pre: usize,
    pub records: Vec<TeacherRecord>,
}

impl Dataset {
    pub fn new(records: Vec<TeacherRecord>) -> Result<Self> {
        let first = records.first().ok_or(Error::EmptyDataset)?;
        let d = first.final_embedding.len();
        let d_pre = first.pre_dense.as_ref().map_or(0, Vec::len);
        let ds = Dataset { d, d_pre, records };
        ds.check_dims()?;
        Ok(ds)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    fn check_dims(&self) -> Result<()> {
        for (i, r) in self.records.iter().enumerate() {
            let pre = r.pre_dense.as_ref().map_or(0, Vec::len);
            if r.final_embedding.len() != self.d || pre != self.d_pre {
                return Err(Error::Shape(format!(
                    "row {i}: vectors are {}/{pre}, header says {}/{}",
                    r.final_embedding.len(),
                    self.d,
                    self.d_pre
                )));
            }
            if !is_language_code(&r.language) {
                return Err(Error::Format(format!("row {i}: bad language code {:?}", r.language)));
            }
        }
        Ok(())
    }

    /// Fails on the first row whose final vector is not unit-norm.
    pub fn validate(&self) -> Result<()> {
        self.check_dims()?;
        for (row, r) in self.records.iter().enumerate() {
            let norm = r.final_embedding.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
            if !((norm - 1.0).abs() <= UNIT_NORM_TOL) {
                return Err(Error::NotUnitNorm { row, norm });
            }
        }
        Ok(())
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        self.check_dims()?;
        let languages: Vec<&str> = {
            let mut l: Vec<&str> = self.records.iter().map(|r| r.language.as_str()).collect();
            l.sort_unstable();
            l.dedup();
            l
        };
        let lang_index: BTreeMap<&str, u16> = languages.iter().enumerate().map(|(i, &l)| (l, i as u16)).collect();
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.d as u32).to_le_bytes());
        out.extend_from_slice(&(self.d_pre as u32).to_le_bytes());
        out.extend_from_slice(&(self.records.len() as u64).to_le_bytes());
        out.extend_from_slice(&(languages.len() as u32).to_le_bytes());
        for l in &languages {
            out.extend_from_slice(l.as_bytes());
        }
        let mut offset = 0u64;
        for r in &self.records {
            out.extend_from_slice(&lang_index[r.language.as_str()].to_le_bytes());
            out.extend_from_slice(&offset.to_le_bytes());
            out.extend_from_slice(&(r.text.len() as u32).to_le_bytes());
            for x in r.final_embedding.iter().chain(r.pre_dense.iter().flatten()) {
                out.extend_from_slice(&x.to_bits().to_le_bytes());
            }
            offset += r.text.len() as u64;
        }
        for r in &self.records {
            out.extend_from_slice(r.text.as_bytes());
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let truncated = || Error::Format("dataset file is truncated".into());
        let mut pos = 0usize;
        let mut take = |n: usize| -> Result<&[u8]> {
            let end = pos.checked_add(n).filter(|&e| e <= bytes.len()).ok_or_else(truncated)?;
            let s = &bytes[pos..end];
            pos = end;
            Ok(s)
        };
        if take(4)? != MAGIC {
            return Err(Error::Format("not a VSDS dataset (bad magic)".into()));
        }
        let u32_at = |s: &[u8]| u32::from_le_bytes(s.try_into().unwrap());
        let version = u32_at(take(4)?);
        if version != VERSION {
            return Err(Error::Format(format!("unsupported dataset version {version}")));
        }
        let d = u32_at(take(4)?) as usize;
        let d_pre = u32_at(take(4)?) as usize;
        let rows = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
        let n_lang = u32_at(take(4)?) as usize;
        let mut languages = Vec::with_capacity(n_lang);
        for _ in 0..n_lang {
            let code = std::str::from_utf8(take(2)?)
                .map_err(|_| Error::Format("language code is not UTF-8".into()))?;
            languages.push(code.to_string());
        }
        let row_bytes = 2 + 8 + 4 + 4 * (d + d_pre);
        let block = take(rows.checked_mul(row_bytes).ok_or_else(truncated)?)?;
        let heap = &bytes[pos..];
        let floats = |s: &[u8]| -> Vec<f32> {
            s.chunks_exact(4).map(|c| f32::from_bits(u32::from_le_bytes(c.try_into().unwrap()))).collect()
        };
        let mut records = Vec::with_capacity(rows);
        for (i, row) in block.chunks_exact(row_bytes).enumerate() {
            let lang = u16::from_le_bytes(row[0..2].try_into().unwrap()) as usize;
            let offset = u64::from_le_bytes(row[2..10].try_into().unwrap()) as usize;
            let len = u32::from_le_bytes(row[10..14].try_into().unwrap()) as usize;
            let language = languages
                .get(lang)
                .ok_or_else(|| Error::Format(format!("row {i}: language index {lang} out of range")))?
                .clone();
            let text = offset
                .checked_add(len)
                .and_then(|end| heap.get(offset..end))
                .ok_or_else(|| Error::Format(format!("row {i}: text out of bounds")))?;
            let text = std::str::from_utf8(text)
                .map_err(|_| Error::Format(format!("row {i}: text is not UTF-8")))?
                .to_string();
            let final_embedding = floats(&row[14..14 + 4 * d]);
            let pre_dense = (d_pre > 0).then(|| floats(&row[14 + 4 * d..]));
            records.push(TeacherRecord {
                text,
                language,
                final_embedding,
                pre_dense,
            });
        }
        Ok(Dataset { d, d_pre, records })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.encode()?).map_err(|e| Error::file(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::decode(&std::fs::read(path).map_err(|e| Error::file(path, e))?)
    }

    /// Interchange export: `language<TAB>text<TAB>final<TAB>pre_dense`, vectors
    /// as comma-separated shortest-roundtrip decimals.
    pub fn export_tsv<W: Write>(&self, mut w: W) -> Result<()> {
        let join = |v: &[f32]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        for r in &self.records {
            writeln!(
                w,
                "{}\t{}\t{}\t{}",
                r.language,
                crate::vocab::escape(&r.text),
                join(&r.final_embedding),
                r.pre_dense.as_deref().map(join).unwrap_or_default()
            )?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TargetKind {
    #[default]
    Final,
    PreDense,
}

impl std::str::FromStr for TargetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "final" => Ok(TargetKind::Final),
            "pre_dense" | "pre-dense" => Ok(TargetKind::PreDense),
            _ => Err(Error::Invalid(format!("unknown target {s:?} (final|pre_dense)"))),
        }
    }
}

/// A padded mini-batch. `ids` and `mask` are `rows x seq_len`, row-major;
/// `targets` holds one unit vector per row.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub rows: usize,
    pub seq_len: usize,
    pub ids: Vec<u32>,
    pub mask: Vec<bool>,
    pub targets: Vec<f64>,
    pub target_dim: usize,
    pub indices: Vec<usize>,
}

pub fn epoch_order(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ epoch.wrapping_mul(0x9E37_79B9_7F4A_7C15)));
    order
}

/// Serves batches for one epoch in a seeded order.
pub struct Batcher<'a> {
    dataset: &'a Dataset,
    segmenter: &'a Segmenter<'a>,
    order: Vec<usize>,
    batch_size: usize,
    max_len: usize,
    target: TargetKind,
}

impl<'a> Batcher<'a> {
    pub fn new(
        dataset: &'a Dataset,
        segmenter: &'a Segmenter<'a>,
        batch_size: usize,
        max_len: usize,
        target: TargetKind,
        seed: u64,
        epoch: u64,
    ) -> Result<Self> {
        if dataset.is_empty() {
            return Err(Error::EmptyDataset);
        }
        if batch_size == 0 || max_len == 0 {
            return Err(Error::Invalid("batch size and max length must be >= 1".into()));
        }
        if target == TargetKind::PreDense && dataset.d_pre == 0 {
            return Err(Error::Invalid("dataset carries no pre-dense vectors".into()));
        }
        Ok(Batcher {
            dataset,
            segmenter,
            order: epoch_order(dataset.len(), seed, epoch),
            batch_size,
            max_len,
            target,
        })
    }

    pub fn num_batches(&self) -> usize {
        self.order.len().div_ceil(self.batch_size)
    }

    pub fn batch(&self, index: usize) -> Batch {
        let start = index * self.batch_size;
        let indices: Vec<usize> = self.order[start..(start + self.batch_size).min(self.order.len())].to_vec();
        let seqs: Vec<Vec<u32>> = indices
            .iter()
            .map(|&i| self.segmenter.encode(&self.dataset.records[i].text, self.max_len).ids)
            .collect();
        let seq_len = seqs.iter().map(Vec::len).max().unwrap_or(0).max(1);
        let pad = self.segmenter.vocab().specials().pad;
        let rows = indices.len();
        let mut ids = vec![pad; rows * seq_len];
        let mut mask = vec![false; rows * seq_len];
        for (r, seq) in seqs.iter().enumerate() {
            ids[r * seq_len..r * seq_len + seq.len()].copy_from_slice(seq);
            mask[r * seq_len..r * seq_len + seq.len()].fill(true);
        }
        let target_dim = match self.target {
            TargetKind::Final => self.dataset.d,
            TargetKind::PreDense => self.dataset.d_pre,
        };
        let mut targets = Vec::with_capacity(rows * target_dim);
        for &i in &indices {
            let rec = &self.dataset.records[i];
            match self.target {
                TargetKind::Final => targets.extend(rec.final_embedding.iter().map(|&x| x as f64)),
                TargetKind::PreDense => {
                    let v = rec.pre_dense.as_deref().unwrap();
                    let norm = v.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
                    targets.extend(v.iter().map(|&x| x as f64 / norm));
                }
            }
        }
        Batch {
            rows,
            seq_len,
            ids,
            mask,
            targets,
            target_dim,
            indices,
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = Batch> + '_ {
        (0..self.num_batches()).map(move |i| self.batch(i))
    }
}
