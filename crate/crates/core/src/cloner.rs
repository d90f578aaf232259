//! Teacher cloning for a new vocabulary.
//!
//! Every target token is mapped to the teacher segmentation of its surface
//! form, and its embedding row is composed from the corresponding teacher
//! rows. All non-embedding tensors are copied untouched.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::corpus::{FrequencyTable, BOUNDARY};
use crate::error::{Error, Result};
use crate::segmenter::Segmenter;
use crate::tensor::{self, Tensor, TensorMap};
use crate::vocab::Vocabulary;

pub const EMBEDDING: &str = "embedding.weight";
pub const BACKBONE_WEIGHT: &str = "backbone.weight";
pub const BACKBONE_BIAS: &str = "backbone.bias";
pub const DENSE1: &str = "head.dense1.weight";
pub const DENSE2: &str = "head.dense2.weight";
pub const CONFIG: &str = "meta.config";
/// Prefix reserved for trainer state stored alongside a bundle.
pub const STATE_PREFIX: &str = "state.";

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    rows: usize,
    dim: usize,
    data: Vec<f32>,
}

impl EmbeddingMatrix {
    pub fn new(rows: usize, dim: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * dim {
            return Err(Error::Shape(format!(
                "{rows}x{dim} embedding needs {} values, got {}",
                rows * dim,
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFinite {
                what: "embedding",
                row: i / dim.max(1),
            });
        }
        Ok(EmbeddingMatrix { rows, dim, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Strategy {
    #[default]
    Mean,
    Weighted,
    First,
    Last,
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mean" => Ok(Strategy::Mean),
            "weighted" => Ok(Strategy::Weighted),
            "first" => Ok(Strategy::First),
            "last" => Ok(Strategy::Last),
            _ => Err(Error::Invalid(format!("unknown composition strategy {s:?}"))),
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Strategy::Mean => "mean",
            Strategy::Weighted => "weighted",
            Strategy::First => "first",
            Strategy::Last => "last",
        })
    }
}

/// For each target id, the ordered teacher ids it composes from. An empty
/// entry marks a fallback row.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenMapping {
    pub entries: Vec<Vec<u32>>,
    pub strategy: Strategy,
    /// Per-entry weights for [`Strategy::Weighted`]; uniform when absent.
    pub weights: Option<Vec<Vec<f64>>>,
}

impl TokenMapping {
    pub fn fallback_count(&self) -> usize {
        self.entries.iter().filter(|e| e.is_empty()).count()
    }

    /// Weights proportional to teacher-token corpus frequency. Tokens absent
    /// from the table count once so every weight stays positive.
    pub fn frequency_weights(&self, teacher_vocab: &Vocabulary, freq: &FrequencyTable) -> Vec<Vec<f64>> {
        self.entries
            .iter()
            .map(|ids| {
                let raw: Vec<f64> = ids
                    .iter()
                    .map(|&i| teacher_vocab.token(i).map_or(0, |t| freq.get(t)).max(1) as f64)
                    .collect();
                let total: f64 = raw.iter().sum();
                raw.into_iter().map(|w| w / total).collect()
            })
            .collect()
    }

    pub fn validate(&self, teacher_rows: usize) -> Result<()> {
        for (j, ids) in self.entries.iter().enumerate() {
            if let Some(&bad) = ids.iter().find(|&&i| i as usize >= teacher_rows) {
                return Err(Error::Invalid(format!(
                    "mapping for target {j} references teacher id {bad} >= {teacher_rows}"
                )));
            }
        }
        if let Some(weights) = &self.weights {
            if weights.len() != self.entries.len() {
                return Err(Error::Invalid("weights and entries differ in length".into()));
            }
            for (j, (w, ids)) in weights.iter().zip(&self.entries).enumerate() {
                let sum: f64 = w.iter().sum();
                if w.len() != ids.len() || w.iter().any(|&x| !(x > 0.0)) || (!w.is_empty() && (sum - 1.0).abs() > 1e-9) {
                    return Err(Error::Invalid(format!(
                        "weights for target {j} must be {} positive values summing to 1",
                        ids.len()
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Maps every target token to the teacher's segmentation of its surface.
/// Specials and byte tokens map to their teacher counterparts by role.
pub fn build_mapping(target_vocab: &Vocabulary, teacher: &Segmenter<'_>) -> TokenMapping {
    let teacher_vocab = teacher.vocab();
    let (ts, ss) = (teacher_vocab.specials(), target_vocab.specials());
    let unk = ts.unk;
    let entries = (0..target_vocab.size() as u32)
        .map(|id| {
            let by_role = [(ss.pad, ts.pad), (ss.unk, ts.unk), (ss.bos, ts.bos), (ss.eos, ts.eos)];
            if let Some(&(_, t)) = by_role.iter().find(|(s, _)| *s == id) {
                return vec![t];
            }
            if let Some(b) = target_vocab.byte_of(id) {
                return vec![teacher_vocab.byte_id(b)];
            }
            let surface = target_vocab.token(id).unwrap();
            let matched = |piece: &str| -> Vec<u32> {
                teacher.match_piece(piece).into_iter().filter(|&i| i != unk).collect()
            };
            let ids = matched(surface);
            if !ids.is_empty() {
                return ids;
            }
            match surface.strip_prefix(BOUNDARY) {
                Some(stripped) if !stripped.is_empty() => matched(stripped),
                _ => Vec::new(),
            }
        })
        .collect();
    TokenMapping {
        entries,
        strategy: Strategy::Mean,
        weights: None,
    }
}

/// Column-wise mean of the whole table, accumulated in f64.
fn global_mean(table: &EmbeddingMatrix) -> Vec<f64> {
    let mut mean = vec![0.0f64; table.dim];
    for r in 0..table.rows {
        for (m, &x) in mean.iter_mut().zip(table.row(r)) {
            *m += x as f64;
        }
    }
    let n = table.rows.max(1) as f64;
    mean.iter_mut().for_each(|m| *m /= n);
    mean
}

pub fn compose(teacher: &EmbeddingMatrix, mapping: &TokenMapping) -> Result<EmbeddingMatrix> {
    mapping.validate(teacher.rows)?;
    let dim = teacher.dim;
    let fallback = global_mean(teacher);
    let mut data = vec![0.0f32; mapping.entries.len() * dim];
    data.par_chunks_mut(dim.max(1))
        .zip(mapping.entries.par_iter().enumerate())
        .for_each(|(out, (j, ids))| {
            if dim == 0 {
                return;
            }
            let mut acc = vec![0.0f64; dim];
            let mut add = |row: u32, w: f64| {
                for (a, &x) in acc.iter_mut().zip(teacher.row(row as usize)) {
                    *a += w * x as f64;
                }
            };
            match (ids.first(), ids.last()) {
                (None, _) | (_, None) => acc.copy_from_slice(&fallback),
                (Some(&first), Some(&last)) => match mapping.strategy {
                    Strategy::First => add(first, 1.0),
                    Strategy::Last => add(last, 1.0),
                    Strategy::Mean => {
                        ids.iter().for_each(|&i| add(i, 1.0));
                        let k = ids.len() as f64;
                        acc.iter_mut().for_each(|a| *a /= k);
                    }
                    Strategy::Weighted => match &mapping.weights {
                        Some(w) => ids.iter().zip(&w[j]).for_each(|(&i, &w)| add(i, w)),
                        None => {
                            ids.iter().for_each(|&i| add(i, 1.0));
                            let k = ids.len() as f64;
                            acc.iter_mut().for_each(|a| *a /= k);
                        }
                    },
                },
            }
            for (o, a) in out.iter_mut().zip(acc) {
                *o = a as f32;
            }
        });
    if let Some(i) = data.iter().position(|x| !x.is_finite()) {
        return Err(Error::NonFinite {
            what: "composed embedding",
            row: i / dim,
        });
    }
    Ok(EmbeddingMatrix {
        rows: mapping.entries.len(),
        dim,
        data,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    pub d: usize,
    pub h: usize,
    pub max_len: usize,
    pub vocab_size: usize,
}

/// Embedding table, backbone and projection head of an encoder, as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle {
    pub embedding: EmbeddingMatrix,
    pub backbone: TensorMap,
    pub head: TensorMap,
    pub config: ModelConfig,
}

pub fn embedding_parameter_count(vocab_size: u64, d: u64) -> u64 {
    vocab_size * d
}

impl ModelBundle {
    /// A randomly initialized encoder, used as a desk-scale teacher.
    pub fn random(config: ModelConfig, with_backbone: bool, seed: u64) -> Result<Self> {
        let ModelConfig { d, h, vocab_size, .. } = config;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut uniform = |n: usize, scale: f64| -> Vec<f32> {
            (0..n).map(|_| (rng.random_range(-1.0..1.0) * scale) as f32).collect()
        };
        let embedding = EmbeddingMatrix::new(vocab_size, d, uniform(vocab_size * d, 1.0))?;
        let mut backbone = TensorMap::new();
        if with_backbone {
            backbone.insert(BACKBONE_WEIGHT.into(), Tensor::f32(vec![d, d], uniform(d * d, 0.3 / (d as f64).sqrt()))?);
            backbone.insert(BACKBONE_BIAS.into(), Tensor::f32(vec![d], uniform(d, 0.05))?);
        }
        let mut head = TensorMap::new();
        head.insert(DENSE1.into(), Tensor::f32(vec![h, d], uniform(h * d, (3.0 / d as f64).sqrt()))?);
        head.insert(DENSE2.into(), Tensor::f32(vec![d, h], uniform(d * h, (3.0 / h as f64).sqrt()))?);
        let bundle = ModelBundle {
            embedding,
            backbone,
            head,
            config,
        };
        bundle.validate()?;
        Ok(bundle)
    }

    pub fn validate(&self) -> Result<()> {
        let ModelConfig { d, h, vocab_size, .. } = self.config;
        if self.embedding.rows != vocab_size || self.embedding.dim != d {
            return Err(Error::Shape(format!(
                "embedding is {}x{} but config says {vocab_size}x{d}",
                self.embedding.rows, self.embedding.dim
            )));
        }
        let expect = |map: &TensorMap, name: &str, shape: &[usize]| -> Result<()> {
            match map.get(name) {
                Some(t) if t.shape == shape && t.as_f32().is_some() => Ok(()),
                Some(t) => Err(Error::Shape(format!("{name} has shape {:?}, expected {shape:?} f32", t.shape))),
                None => Err(Error::Shape(format!("missing tensor {name}"))),
            }
        };
        expect(&self.head, DENSE1, &[h, d])?;
        expect(&self.head, DENSE2, &[d, h])?;
        if self.head.len() != 2 {
            let extra: Vec<_> = self.head.keys().filter(|k| *k != DENSE1 && *k != DENSE2).collect();
            return Err(Error::Shape(format!("projection head must be bias-free; unexpected {extra:?}")));
        }
        if !self.backbone.is_empty() {
            expect(&self.backbone, BACKBONE_WEIGHT, &[d, d])?;
            expect(&self.backbone, BACKBONE_BIAS, &[d])?;
        }
        Ok(())
    }

    pub fn parameter_count(&self) -> u64 {
        let n = |m: &TensorMap| m.values().map(|t| t.numel() as u64).sum::<u64>();
        self.embedding.data.len() as u64 + n(&self.backbone) + n(&self.head)
    }

    pub fn to_tensors(&self) -> TensorMap {
        let c = self.config;
        let mut map = TensorMap::new();
        map.insert(
            EMBEDDING.into(),
            Tensor::f32(vec![self.embedding.rows, self.embedding.dim], self.embedding.data.clone()).unwrap(),
        );
        map.insert(
            CONFIG.into(),
            Tensor::u64(vec![4], vec![c.d as u64, c.h as u64, c.max_len as u64, c.vocab_size as u64]).unwrap(),
        );
        map.extend(self.backbone.iter().map(|(k, v)| (k.clone(), v.clone())));
        map.extend(self.head.iter().map(|(k, v)| (k.clone(), v.clone())));
        map
    }

    /// Reads a bundle out of a tensor map; `state.*` entries are ignored.
    pub fn from_tensors(map: &TensorMap) -> Result<Self> {
        let cfg = map
            .get(CONFIG)
            .and_then(Tensor::as_u64)
            .filter(|c| c.len() == 4)
            .ok_or_else(|| Error::Shape(format!("missing or malformed {CONFIG}")))?;
        let config = ModelConfig {
            d: cfg[0] as usize,
            h: cfg[1] as usize,
            max_len: cfg[2] as usize,
            vocab_size: cfg[3] as usize,
        };
        let emb = map
            .get(EMBEDDING)
            .ok_or_else(|| Error::Shape(format!("missing tensor {EMBEDDING}")))?;
        let data = emb
            .as_f32()
            .filter(|_| emb.shape.len() == 2)
            .ok_or_else(|| Error::Shape(format!("{EMBEDDING} must be a 2-d f32 tensor")))?;
        let embedding = EmbeddingMatrix::new(emb.shape[0], emb.shape[1], data.to_vec())?;
        let mut backbone = TensorMap::new();
        let mut head = TensorMap::new();
        for (name, t) in map {
            if name.starts_with("backbone.") {
                backbone.insert(name.clone(), t.clone());
            } else if name.starts_with("head.") {
                head.insert(name.clone(), t.clone());
            } else if name != EMBEDDING && name != CONFIG && !name.starts_with(STATE_PREFIX) {
                return Err(Error::Shape(format!("unexpected tensor {name:?} in model bundle")));
            }
        }
        let bundle = ModelBundle {
            embedding,
            backbone,
            head,
            config,
        };
        bundle.validate()?;
        Ok(bundle)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        tensor::save(&self.to_tensors(), path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_tensors(&tensor::load(path)?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CloneReport {
    pub mapping: TokenMapping,
    pub fallback_count: usize,
    pub teacher_parameters: u64,
    pub student_parameters: u64,
}

/// Clones `teacher` onto `target_vocab`. Backbone and head tensors are copied
/// bit for bit; only the embedding table is rebuilt.
pub fn clone_bundle(
    teacher: &ModelBundle,
    teacher_vocab: &Vocabulary,
    target_vocab: &Vocabulary,
    strategy: Strategy,
    weight_freq: Option<&FrequencyTable>,
) -> Result<(ModelBundle, CloneReport)> {
    teacher.validate()?;
    if teacher.embedding.rows != teacher_vocab.size() {
        return Err(Error::Shape(format!(
            "teacher embedding has {} rows but its vocabulary has {} tokens",
            teacher.embedding.rows,
            teacher_vocab.size()
        )));
    }
    let seg = Segmenter::raw(teacher_vocab);
    let mut mapping = build_mapping(target_vocab, &seg);
    mapping.strategy = strategy;
    if strategy == Strategy::Weighted {
        if let Some(freq) = weight_freq {
            mapping.weights = Some(mapping.frequency_weights(teacher_vocab, freq));
        }
    }
    let embedding = compose(&teacher.embedding, &mapping)?;
    let student = ModelBundle {
        embedding,
        backbone: teacher.backbone.clone(),
        head: teacher.head.clone(),
        config: ModelConfig {
            vocab_size: target_vocab.size(),
            ..teacher.config
        },
    };
    let report = CloneReport {
        fallback_count: mapping.fallback_count(),
        teacher_parameters: teacher.parameter_count(),
        student_parameters: student.parameter_count(),
        mapping,
    };
    Ok((student, report))
}

/// Maps produced by [`ModelBundle::to_tensors`] keyed by role, for comparisons.
pub fn non_embedding_tensors(bundle: &ModelBundle) -> BTreeMap<&str, &Tensor> {
    bundle
        .backbone
        .iter()
        .chain(&bundle.head)
        .map(|(k, v)| (k.as_str(), v))
        .collect()
}
