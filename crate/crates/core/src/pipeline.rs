//! Config-driven end-to-end run: build-vocab, clone, precompute, distill and
//! eval-sts, followed by a manifest of every produced file and its SHA-256.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};

use log::info;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::builder::{build, BuildPlan};
use crate::cloner::{clone_bundle, ModelBundle, Strategy};
use crate::corpus::{count_substrings, read_corpus, CorpusRecord};
use crate::error::{Error, Result};
use crate::eval::{evaluate_sts, load_sts};
use crate::model::{StudentModel, Trainable};
use crate::segmenter::Segmenter;
use crate::store::{apply_quota, precompute, Dataset, QuotaPolicy, TargetKind};
use crate::train::{train, TrainConfig};
use crate::vocab::Vocabulary;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Deserialize, Serialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    pub mono_corpus: PathBuf,
    pub multi_corpus: PathBuf,
    /// Corpus the teacher encodes for distillation; defaults to `multi_corpus`.
    #[serde(default)]
    pub train_corpus: Option<PathBuf>,
    pub teacher_model: PathBuf,
    pub teacher_vocab: PathBuf,
    pub sts_pairs: PathBuf,
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, Deserialize, Serialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct VocabSection {
    pub target_size: usize,
    pub monolingual_top_k: usize,
    pub fill_lengths: Vec<usize>,
    /// Character lengths of the substring candidates counted in each corpus.
    pub candidate_lengths: Vec<usize>,
    pub candidates_per_length: usize,
    pub language_field: Option<String>,
}

impl Default for VocabSection {
    fn default() -> Self {
        VocabSection {
            target_size: 131_072,
            monolingual_top_k: 65_536,
            fill_lengths: vec![1, 2, 3, 4, 5, 6],
            candidate_lengths: (1..=8).collect(),
            candidates_per_length: 50_000,
            language_field: None,
        }
    }
}

#[derive(Debug, Clone, Deserialize, Serialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct CloneSection {
    pub strategy: String,
}

impl Default for CloneSection {
    fn default() -> Self {
        CloneSection {
            strategy: Strategy::Mean.to_string(),
        }
    }
}

#[derive(Debug, Clone, Deserialize, Serialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct QuotaSection {
    pub caps: BTreeMap<String, usize>,
    pub default_cap: usize,
}

impl Default for QuotaSection {
    fn default() -> Self {
        let p = QuotaPolicy::standard();
        QuotaSection {
            caps: p.caps,
            default_cap: p.default_cap,
        }
    }
}

#[derive(Debug, Clone, Deserialize, Serialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub epochs: u64,
    pub batch_size: usize,
    pub lr_peak: f64,
    pub warmup_ratio: f64,
    pub weight_decay: f64,
    pub max_grad_norm: f64,
    pub checkpoint_every: u64,
    pub target: String,
    pub train_embedding: bool,
    pub train_backbone: bool,
    pub train_head: bool,
}

impl Default for TrainSection {
    fn default() -> Self {
        let c = TrainConfig::default();
        TrainSection {
            epochs: c.epochs,
            batch_size: c.batch_size,
            lr_peak: c.lr_peak,
            warmup_ratio: c.warmup_ratio,
            weight_decay: c.weight_decay,
            max_grad_norm: c.max_grad_norm,
            checkpoint_every: c.checkpoint_every,
            target: "final".into(),
            train_embedding: c.trainable.embedding,
            train_backbone: c.trainable.backbone,
            train_head: c.trainable.head,
        }
    }
}

#[derive(Debug, Clone, Deserialize, Serialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    #[serde(default = "default_seed")]
    pub seed: u64,
    pub paths: Paths,
    #[serde(default)]
    pub vocab: VocabSection,
    #[serde(default)]
    pub clone: CloneSection,
    #[serde(default)]
    pub quota: QuotaSection,
    #[serde(default)]
    pub train: TrainSection,
}

fn default_seed() -> u64 {
    42
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Invalid(format!("pipeline config: {e}")))
    }

    /// Loads a config; relative paths are resolved against the file's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::load_with_overrides(path, &[])
    }

    /// Like [`PipelineConfig::load`], applying `section.key=value` overrides
    /// first. Values are parsed as TOML and fall back to plain strings.
    pub fn load_with_overrides(path: impl AsRef<Path>, overrides: &[String]) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
        let mut table: toml::Table = text
            .parse()
            .map_err(|e| Error::Invalid(format!("pipeline config: {e}")))?;
        for item in overrides {
            let (key, raw) = item
                .split_once('=')
                .ok_or_else(|| Error::Invalid(format!("override {item:?} is not key=value")))?;
            let value = format!("v = {raw}")
                .parse::<toml::Table>()
                .ok()
                .and_then(|mut t| t.remove("v"))
                .unwrap_or_else(|| toml::Value::String(raw.to_string()));
            let mut parts: Vec<&str> = key.trim().split('.').collect();
            let leaf = parts.pop().filter(|l| !l.is_empty()).ok_or_else(|| Error::Invalid(format!("empty override key in {item:?}")))?;
            let mut node = &mut table;
            for part in parts {
                node = node
                    .entry(part)
                    .or_insert_with(|| toml::Value::Table(toml::Table::new()))
                    .as_table_mut()
                    .ok_or_else(|| Error::Invalid(format!("override {key}: {part} is not a section")))?;
            }
            node.insert(leaf.to_string(), value);
        }
        let mut cfg: PipelineConfig = table
            .try_into()
            .map_err(|e| Error::Invalid(format!("pipeline config: {e}")))?;
        if let Some(base) = path.parent() {
            cfg.resolve(base);
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn resolve(&mut self, base: &Path) {
        let p = &mut self.paths;
        for path in [
            &mut p.mono_corpus,
            &mut p.multi_corpus,
            &mut p.teacher_model,
            &mut p.teacher_vocab,
            &mut p.sts_pairs,
            &mut p.out_dir,
        ]
        .into_iter()
        .chain(p.train_corpus.as_mut())
        {
            if path.is_relative() {
                *path = base.join(&*path);
            }
        }
    }

    pub fn strategy(&self) -> Result<Strategy> {
        self.clone.strategy.parse()
    }

    pub fn quota_policy(&self) -> QuotaPolicy {
        QuotaPolicy {
            caps: self.quota.caps.clone(),
            default_cap: self.quota.default_cap,
        }
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let t = &self.train;
        Ok(TrainConfig {
            epochs: t.epochs,
            batch_size: t.batch_size,
            lr_peak: t.lr_peak,
            warmup_ratio: t.warmup_ratio,
            weight_decay: t.weight_decay,
            max_grad_norm: t.max_grad_norm,
            checkpoint_every: t.checkpoint_every,
            seed: self.seed,
            target: t.target.parse::<TargetKind>()?,
            trainable: Trainable {
                embedding: t.train_embedding,
                backbone: t.train_backbone,
                head: t.train_head,
            },
        })
    }

    /// Checks every input path and parameter before any stage runs.
    pub fn validate(&self) -> Result<()> {
        let p = &self.paths;
        for (what, path) in [
            ("mono_corpus", &p.mono_corpus),
            ("multi_corpus", &p.multi_corpus),
            ("teacher_model", &p.teacher_model),
            ("teacher_vocab", &p.teacher_vocab),
            ("sts_pairs", &p.sts_pairs),
        ]
        .into_iter()
        .chain(p.train_corpus.as_ref().map(|t| ("train_corpus", t)))
        {
            if !path.is_file() {
                return Err(Error::Invalid(format!("{what}: {} does not exist", path.display())));
            }
        }
        if p.out_dir.exists() && !p.out_dir.is_dir() {
            return Err(Error::Invalid(format!("out_dir {} is not a directory", p.out_dir.display())));
        }
        self.strategy()?;
        self.train_config()?.validate()?;
        let v = &self.vocab;
        if v.candidate_lengths.is_empty() || v.candidate_lengths.contains(&0) || v.fill_lengths.contains(&0) {
            return Err(Error::Invalid("vocab lengths must be >= 1".into()));
        }
        if v.monolingual_top_k + crate::vocab::RESERVED > v.target_size {
            return Err(Error::Invalid(format!(
                "monolingual_top_k {} does not fit in target_size {}",
                v.monolingual_top_k, v.target_size
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    BuildVocab,
    Clone,
    Precompute,
    Distill,
    EvalSts,
}

impl Stage {
    pub const ALL: [Stage; 5] = [Stage::BuildVocab, Stage::Clone, Stage::Precompute, Stage::Distill, Stage::EvalSts];

    pub fn name(self) -> &'static str {
        match self {
            Stage::BuildVocab => "build-vocab",
            Stage::Clone => "clone",
            Stage::Precompute => "precompute",
            Stage::Distill => "distill",
            Stage::EvalSts => "eval-sts",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug)]
pub enum PipelineError {
    /// The config or its inputs are unusable; no stage ran.
    Validation(Error),
    Stage { stage: Stage, source: Error },
}

impl fmt::Display for PipelineError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PipelineError::Validation(e) => write!(f, "invalid pipeline config: {e}"),
            PipelineError::Stage { stage, source } => write!(f, "stage {stage} failed: {source}"),
        }
    }
}

impl std::error::Error for PipelineError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            PipelineError::Validation(e) | PipelineError::Stage { source: e, .. } => Some(e),
        }
    }
}

impl PipelineError {
    pub fn inner(&self) -> &Error {
        match self {
            PipelineError::Validation(e) | PipelineError::Stage { source: e, .. } => e,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    /// Path relative to the output directory, `/`-separated.
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub stages: BTreeMap<String, Vec<ManifestEntry>>,
}

impl Manifest {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("manifest serializes");
        s.push('\n');
        s
    }

    /// Re-hashes every listed file under `out_dir`; returns the mismatching paths.
    pub fn verify(&self, out_dir: &Path) -> Result<Vec<String>> {
        let mut bad = Vec::new();
        for entry in self.stages.values().flatten() {
            let actual = hash_file(out_dir, &out_dir.join(&entry.path))?;
            if actual != *entry {
                bad.push(entry.path.clone());
            }
        }
        Ok(bad)
    }
}

fn hash_file(out_dir: &Path, path: &Path) -> Result<ManifestEntry> {
    let bytes = std::fs::read(path).map_err(|e| Error::file(path, e))?;
    let rel = path.strip_prefix(out_dir).unwrap_or(path);
    Ok(ManifestEntry {
        path: rel.components().map(|c| c.as_os_str().to_string_lossy()).collect::<Vec<_>>().join("/"),
        bytes: bytes.len() as u64,
        sha256: hex::encode(Sha256::digest(&bytes)),
    })
}

fn hash_all(out_dir: &Path, paths: &[PathBuf]) -> Result<Vec<ManifestEntry>> {
    paths.iter().map(|p| hash_file(out_dir, p)).collect()
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| Error::Format(e.to_string()))?;
    s.push('\n');
    std::fs::write(path, s).map_err(|e| Error::file(path, e))
}

#[derive(Debug, Serialize)]
struct CloneSummary {
    strategy: String,
    teacher_vocab_size: usize,
    student_vocab_size: usize,
    fallback_count: usize,
    teacher_parameters: u64,
    student_parameters: u64,
}

#[derive(Debug, Serialize)]
struct PrecomputeSummary {
    input_records: usize,
    after_quota: usize,
    kept: usize,
    skipped_encoder_error: usize,
    skipped_non_finite: usize,
    skipped_zero_norm: usize,
    per_language: BTreeMap<String, usize>,
}

struct Run<'c> {
    cfg: &'c PipelineConfig,
    out: PathBuf,
}

impl Run<'_> {
    fn dir(&self, stage: Stage) -> Result<PathBuf> {
        let d = self.out.join(stage.name());
        std::fs::create_dir_all(&d).map_err(|e| Error::file(&d, e))?;
        Ok(d)
    }

    fn corpus(&self, path: &Path) -> Result<Vec<CorpusRecord>> {
        let (records, skipped) = read_corpus(path, self.cfg.vocab.language_field.as_deref())?;
        if skipped > 0 {
            log::warn!("{}: skipped {skipped} malformed lines", path.display());
        }
        Ok(records)
    }

    fn build_vocab(&self, teacher_vocab: &Vocabulary) -> Result<(Vocabulary, Vec<PathBuf>)> {
        let v = &self.cfg.vocab;
        let dir = self.dir(Stage::BuildVocab)?;
        let lengths: BTreeSet<usize> = v.candidate_lengths.iter().copied().collect();
        let mono = self.corpus(&self.cfg.paths.mono_corpus)?;
        let multi = self.corpus(&self.cfg.paths.multi_corpus)?;
        let mono_freq = count_substrings(&mono, &lengths, v.candidates_per_length)?;
        let multi_freq = count_substrings(&multi, &lengths, v.candidates_per_length)?;
        let plan = BuildPlan {
            monolingual_top_k: v.monolingual_top_k,
            target_size: v.target_size,
            lengths: v.fill_lengths.clone(),
            teacher_vocab: teacher_vocab.clone(),
            mono_freq,
            multi_freq,
        };
        let vocab = build(&plan)?;
        let files = [dir.join("mono_freq.tsv"), dir.join("multi_freq.tsv"), dir.join("vocab.txt")];
        plan.mono_freq.save(&files[0])?;
        plan.multi_freq.save(&files[1])?;
        vocab.save(&files[2])?;
        info!("built a {}-token vocabulary", vocab.size());
        Ok((vocab, files.to_vec()))
    }

    fn clone(&self, teacher: &ModelBundle, teacher_vocab: &Vocabulary, vocab: &Vocabulary) -> Result<(ModelBundle, Vec<PathBuf>)> {
        let dir = self.dir(Stage::Clone)?;
        let strategy = self.cfg.strategy()?;
        let freq = match strategy {
            Strategy::Weighted => Some(crate::corpus::FrequencyTable::load(
                self.out.join(Stage::BuildVocab.name()).join("multi_freq.tsv"),
            )?),
            _ => None,
        };
        let (student, report) = clone_bundle(teacher, teacher_vocab, vocab, strategy, freq.as_ref())?;
        let files = [dir.join("student.vsrg"), dir.join("clone_report.json")];
        student.save(&files[0])?;
        write_json(
            &files[1],
            &CloneSummary {
                strategy: strategy.to_string(),
                teacher_vocab_size: teacher_vocab.size(),
                student_vocab_size: vocab.size(),
                fallback_count: report.fallback_count,
                teacher_parameters: report.teacher_parameters,
                student_parameters: report.student_parameters,
            },
        )?;
        Ok((student, files.to_vec()))
    }

    fn precompute(&self, teacher: &ModelBundle, teacher_vocab: &Vocabulary) -> Result<(Dataset, Vec<PathBuf>)> {
        let dir = self.dir(Stage::Precompute)?;
        let p = &self.cfg.paths;
        let records = self.corpus(p.train_corpus.as_ref().unwrap_or(&p.multi_corpus))?;
        let input_records = records.len();
        let records = apply_quota(records, &self.cfg.quota_policy(), self.cfg.seed);
        let model: StudentModel<f32> = StudentModel::from_bundle(teacher)?;
        let seg = Segmenter::new(teacher_vocab);
        let max_len = teacher.config.max_len;
        let (rows, stats) = precompute(&records, |text| model.teacher_output(&seg.encode(text, max_len).ids));
        let mut per_language = BTreeMap::new();
        for r in &rows {
            *per_language.entry(r.language.clone()).or_insert(0) += 1;
        }
        let dataset = Dataset::new(rows)?;
        let files = [dir.join("dataset.vsds"), dir.join("precompute_report.json")];
        dataset.save(&files[0])?;
        write_json(
            &files[1],
            &PrecomputeSummary {
                input_records,
                after_quota: records.len(),
                kept: stats.kept,
                skipped_encoder_error: stats.skipped_encoder_error,
                skipped_non_finite: stats.skipped_non_finite,
                skipped_zero_norm: stats.skipped_zero_norm,
                per_language,
            },
        )?;
        Ok((dataset, files.to_vec()))
    }

    fn distill(&self, student: &ModelBundle, vocab: &Vocabulary, dataset: &Dataset) -> Result<(StudentModel<f32>, Vec<PathBuf>)> {
        let dir = self.dir(Stage::Distill)?;
        let cfg = self.cfg.train_config()?;
        let seg = Segmenter::new(vocab);
        let outcome = train(StudentModel::from_bundle(student)?, dataset, &seg, &cfg, Some(&dir), None)?;
        let mut files: Vec<PathBuf> = std::fs::read_dir(&dir)
            .map_err(|e| Error::file(&dir, e))?
            .map(|e| e.map(|e| e.path()).map_err(|e| Error::file(&dir, e)))
            .collect::<Result<_>>()?;
        files.sort();
        Ok((outcome.model, files))
    }

    fn eval(&self, model: &StudentModel<f32>, vocab: &Vocabulary) -> Result<Vec<PathBuf>> {
        let dir = self.dir(Stage::EvalSts)?;
        let pairs = load_sts(&self.cfg.paths.sts_pairs)?;
        let report = evaluate_sts(model, &pairs, &Segmenter::new(vocab))?;
        info!("STS pearson {:.2} spearman {:.2}", report.pearson, report.spearman);
        let path = dir.join("sts_report.json");
        write_json(&path, &report)?;
        Ok(vec![path])
    }
}

/// Runs all stages in order and writes `manifest.json` into the output
/// directory. Artifacts of a failed run are left in place.
pub fn run_pipeline(cfg: &PipelineConfig) -> std::result::Result<Manifest, PipelineError> {
    cfg.validate().map_err(PipelineError::Validation)?;
    let out = cfg.paths.out_dir.clone();
    std::fs::create_dir_all(&out)
        .map_err(|e| PipelineError::Validation(Error::file(&out, e)))?;
    let run = Run { cfg, out: out.clone() };
    let at = |stage: Stage| move |source: Error| PipelineError::Stage { stage, source };

    let load_teacher = || -> Result<(Vocabulary, ModelBundle)> {
        Ok((Vocabulary::load(&cfg.paths.teacher_vocab)?, ModelBundle::load(&cfg.paths.teacher_model)?))
    };
    let (teacher_vocab, teacher) = load_teacher().map_err(PipelineError::Validation)?;

    let mut stages = BTreeMap::new();
    let mut record = |stage: Stage, files: &[PathBuf]| -> std::result::Result<(), PipelineError> {
        stages.insert(stage.name().to_string(), hash_all(&out, files).map_err(at(stage))?);
        Ok(())
    };

    info!("stage {}", Stage::BuildVocab);
    let (vocab, files) = run.build_vocab(&teacher_vocab).map_err(at(Stage::BuildVocab))?;
    record(Stage::BuildVocab, &files)?;

    info!("stage {}", Stage::Clone);
    let (student, files) = run.clone(&teacher, &teacher_vocab, &vocab).map_err(at(Stage::Clone))?;
    record(Stage::Clone, &files)?;

    info!("stage {}", Stage::Precompute);
    let (dataset, files) = run.precompute(&teacher, &teacher_vocab).map_err(at(Stage::Precompute))?;
    record(Stage::Precompute, &files)?;

    info!("stage {}", Stage::Distill);
    let (model, files) = run.distill(&student, &vocab, &dataset).map_err(at(Stage::Distill))?;
    record(Stage::Distill, &files)?;

    info!("stage {}", Stage::EvalSts);
    let files = run.eval(&model, &vocab).map_err(at(Stage::EvalSts))?;
    record(Stage::EvalSts, &files)?;

    let manifest = Manifest { seed: cfg.seed, stages };
    let path = out.join(MANIFEST_FILE);
    std::fs::write(&path, manifest.to_json())
        .map_err(|e| PipelineError::Stage { stage: Stage::EvalSts, source: Error::file(&path, e) })?;
    Ok(manifest)
}

/// Writes a complete desk-scale input set (corpora, teacher, STS pairs and a
/// `pipeline.toml` pointing at them) into `dir`.
pub fn write_desk_inputs(dir: &Path, seed: u64) -> Result<PathBuf> {
    use crate::fixture;
    std::fs::create_dir_all(dir).map_err(|e| Error::file(dir, e))?;
    let write_jsonl = |name: &str, records: &[CorpusRecord]| -> Result<()> {
        let path = dir.join(name);
        let mut s = String::new();
        for r in records {
            s.push_str(&serde_json::json!({"text": r.text, "language": r.language}).to_string());
            s.push('\n');
        }
        std::fs::write(&path, s).map_err(|e| Error::file(&path, e))
    };
    write_jsonl("mono.jsonl", &fixture::monolingual_corpus(300, seed))?;
    write_jsonl("multi.jsonl", &fixture::multilingual_corpus(200, seed.wrapping_add(1)))?;
    let teacher_vocab = fixture::teacher_vocab(1500, seed.wrapping_add(2))?;
    teacher_vocab.save(dir.join("teacher_vocab.txt"))?;
    fixture::teacher_model(&teacher_vocab, 32, 64, 32, seed.wrapping_add(3))?.save(dir.join("teacher.vsrg"))?;
    let sts: String = fixture::sts_pairs(60, seed.wrapping_add(4))
        .iter()
        .map(|p| format!("{}\t{}\t{}\n", p.gold, p.sentence1, p.sentence2))
        .collect();
    let sts_path = dir.join("sts.tsv");
    std::fs::write(&sts_path, sts).map_err(|e| Error::file(&sts_path, e))?;

    let cfg = PipelineConfig {
        seed,
        paths: Paths {
            mono_corpus: "mono.jsonl".into(),
            multi_corpus: "multi.jsonl".into(),
            train_corpus: None,
            teacher_model: "teacher.vsrg".into(),
            teacher_vocab: "teacher_vocab.txt".into(),
            sts_pairs: "sts.tsv".into(),
            out_dir: "out".into(),
        },
        vocab: VocabSection {
            target_size: 1000,
            monolingual_top_k: 300,
            fill_lengths: vec![1, 2, 3, 4, 5, 6],
            candidate_lengths: (1..=8).collect(),
            candidates_per_length: 2000,
            language_field: None,
        },
        clone: CloneSection::default(),
        quota: QuotaSection::default(),
        train: TrainSection {
            epochs: 10,
            batch_size: 20,
            lr_peak: 5e-3,
            checkpoint_every: 25,
            ..TrainSection::default()
        },
    };
    let path = dir.join("pipeline.toml");
    std::fs::write(&path, cfg.to_toml()).map_err(|e| Error::file(&path, e))?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_defaults_and_roundtrip() {
        let text = r#"
            [paths]
            mono_corpus = "m.jsonl"
            multi_corpus = "x.jsonl"
            teacher_model = "t.vsrg"
            teacher_vocab = "t.txt"
            sts_pairs = "s.tsv"
            out_dir = "out"
        "#;
        let cfg = PipelineConfig::from_toml(text).unwrap();
        assert_eq!(cfg.seed, 42);
        assert_eq!(cfg.vocab.target_size, 131_072);
        assert_eq!(cfg.train_config().unwrap(), TrainConfig::default());
        assert_eq!(cfg.quota_policy(), QuotaPolicy::standard());
        assert_eq!(PipelineConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
        assert!(PipelineConfig::from_toml("[paths]\nbogus = 1").is_err());
    }

    #[test]
    fn overrides_apply_before_parsing() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_desk_inputs(dir.path(), 3).unwrap();
        let cfg = PipelineConfig::load_with_overrides(
            &path,
            &["seed=7".into(), "train.lr_peak=1e-3".into(), "clone.strategy=first".into()],
        )
        .unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.train.lr_peak, 1e-3);
        assert_eq!(cfg.clone.strategy, "first");
        assert_eq!(cfg.paths.out_dir, dir.path().join("out"));
        assert!(PipelineConfig::load_with_overrides(&path, &["train.bogus=1".into()]).is_err());
        assert!(PipelineConfig::load_with_overrides(&path, &["novalue".into()]).is_err());
    }

    #[test]
    fn missing_teacher_fails_validation() {
        let dir = tempfile::tempdir().unwrap();
        let cfg_path = write_desk_inputs(dir.path(), 1).unwrap();
        std::fs::remove_file(dir.path().join("teacher.vsrg")).unwrap();
        let cfg = PipelineConfig::load(&cfg_path).unwrap();
        match run_pipeline(&cfg) {
            Err(PipelineError::Validation(e)) => assert!(e.to_string().contains("teacher_model")),
            other => panic!("expected validation failure, got {other:?}"),
        }
        assert!(!dir.path().join("out").exists());
    }
}
