use std::collections::BTreeSet;
use std::fs::File;
use std::io::{self, BufRead, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::bail;
use clap::{Args, Parser, Subcommand};
use log::info;
use vsrg_core::builder::{build, BuildPlan};
use vsrg_core::cloner::{clone_bundle, ModelBundle, Strategy};
use vsrg_core::corpus::{count_substrings, count_tokens, read_corpus, FrequencyTable};
use vsrg_core::eval::{aggregate_report, evaluate_sts, load_sts, read_task_scores};
use vsrg_core::model::{StudentModel, Trainable};
use vsrg_core::pipeline::{run_pipeline, write_desk_inputs, PipelineConfig, PipelineError, MANIFEST_FILE};
use vsrg_core::segmenter::{Pretokenize, Segmenter};
use vsrg_core::store::{apply_quota, precompute, Dataset, QuotaPolicy, TargetKind};
use vsrg_core::train::{train, TrainConfig};
use vsrg_core::vocab::Vocabulary;
use vsrg_core::Error;

const DEFAULT_SEED: u64 = 42;

#[derive(Parser)]
#[command(name = "vsrg", version, about = "Vocabulary surgery, embedding cloning and offline distillation")]
struct Cli {
    /// Random seed for shuffles, quotas and initialization.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true, env = "VSRG_THREADS")]
    threads: Option<usize>,
    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Count substrings of a corpus, or the tokens a vocabulary emits over it.
    Count(CountArgs),
    /// Build a target vocabulary from frequency tables and a teacher vocabulary.
    BuildVocab(BuildVocabArgs),
    /// Encode stdin lines to token ids (or decode id lines with --decode).
    Encode(EncodeArgs),
    /// Clone a teacher bundle onto a new vocabulary.
    Clone(CloneArgs),
    /// Encode a corpus with the teacher and store unit-normalized targets.
    Precompute(PrecomputeArgs),
    /// Distill a student bundle against a precomputed dataset.
    Distill(DistillArgs),
    /// Score a model on STS pairs.
    EvalSts(EvalStsArgs),
    /// Macro-average task scores by category.
    Report(ReportArgs),
    /// Run every stage from a config file.
    Pipeline(PipelineArgs),
    /// Write a desk-scale input set and pipeline config.
    Fixture(FixtureArgs),
}

#[derive(Args)]
struct CountArgs {
    /// Corpus file (.jsonl or .tsv).
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    language_field: Option<String>,
    /// Count tokens emitted by this vocabulary instead of substrings.
    #[arg(long)]
    vocab: Option<PathBuf>,
    /// Match the text as-is instead of word by word (with --vocab).
    #[arg(long)]
    raw: bool,
    /// Substring lengths, comma separated.
    #[arg(long, value_delimiter = ',', default_values_t = [1usize, 2, 3, 4, 5, 6, 7, 8])]
    lengths: Vec<usize>,
    #[arg(long, default_value_t = 50_000)]
    top_n: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct BuildVocabArgs {
    #[arg(long)]
    teacher_vocab: PathBuf,
    /// Monolingual frequency table (from `count`).
    #[arg(long)]
    mono_freq: PathBuf,
    /// Multilingual frequency table (from `count`).
    #[arg(long)]
    multi_freq: PathBuf,
    #[arg(long, default_value_t = 131_072)]
    target_size: usize,
    #[arg(long, default_value_t = 65_536)]
    top_k: usize,
    #[arg(long, value_delimiter = ',', default_values_t = [1usize, 2, 3, 4, 5, 6])]
    fill_lengths: Vec<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EncodeArgs {
    #[arg(long)]
    vocab: PathBuf,
    #[arg(long, default_value_t = 8192)]
    max_len: usize,
    #[arg(long)]
    raw: bool,
    /// Read space-separated ids and print the decoded text.
    #[arg(long)]
    decode: bool,
}

#[derive(Args)]
struct CloneArgs {
    #[arg(long)]
    teacher: PathBuf,
    #[arg(long)]
    teacher_vocab: PathBuf,
    /// Target vocabulary.
    #[arg(long)]
    vocab: PathBuf,
    #[arg(long, default_value = "mean")]
    strategy: Strategy,
    /// Frequency table for the weighted strategy.
    #[arg(long)]
    freq: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PrecomputeArgs {
    #[arg(long)]
    teacher: PathBuf,
    #[arg(long)]
    teacher_vocab: PathBuf,
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    language_field: Option<String>,
    #[arg(long, default_value = "tr=100000,en=100000,default=10000")]
    quota: String,
    #[arg(long)]
    out: PathBuf,
    /// Also write the records as TSV.
    #[arg(long)]
    export_tsv: Option<PathBuf>,
}

#[derive(Args)]
struct DistillArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Student vocabulary.
    #[arg(long)]
    vocab: PathBuf,
    #[arg(long, default_value = "final")]
    target: TargetKind,
    #[arg(long, default_value_t = 256)]
    batch: usize,
    #[arg(long, default_value_t = 5e-5)]
    lr: f64,
    #[arg(long, default_value_t = 0.01)]
    warmup_ratio: f64,
    #[arg(long, default_value_t = 0.01)]
    weight_decay: f64,
    #[arg(long, default_value_t = 1.0)]
    clip: f64,
    #[arg(long, default_value_t = 1)]
    epochs: u64,
    #[arg(long, default_value_t = 100)]
    ckpt_every: u64,
    /// Also update the backbone.
    #[arg(long)]
    train_backbone: bool,
    #[arg(long)]
    freeze_embedding: bool,
    #[arg(long)]
    freeze_head: bool,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalStsArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
    #[arg(long)]
    pairs: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    /// TSV of task<TAB>category<TAB>score.
    #[arg(long)]
    scores: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PipelineArgs {
    #[arg(long)]
    config: PathBuf,
    /// Override a config value, e.g. `--set train.lr_peak=1e-4`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Re-hash the files listed in an existing manifest instead of running.
    #[arg(long)]
    verify: bool,
}

#[derive(Args)]
struct FixtureArgs {
    #[arg(long)]
    out: PathBuf,
}

fn create(path: &Path) -> anyhow::Result<BufWriter<File>> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::File { path: parent.into(), source: e })?;
    }
    let file = File::create(path).map_err(|e| Error::File { path: path.into(), source: e })?;
    Ok(BufWriter::new(file))
}

fn write_json(value: serde_json::Value, out: Option<&Path>) -> anyhow::Result<()> {
    let json = serde_json::to_string_pretty(&value)?;
    match out {
        Some(path) => {
            let mut w = create(path)?;
            writeln!(w, "{json}").map_err(|e| Error::File { path: path.into(), source: e })?;
            w.flush().map_err(|e| Error::File { path: path.into(), source: e })?;
        }
        None => println!("{json}"),
    }
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let seed = cli.seed.unwrap_or(DEFAULT_SEED);
    match cli.command {
        Command::Count(a) => {
            let (records, skipped) = read_corpus(&a.input, a.language_field.as_deref())?;
            info!("{} records ({skipped} malformed lines skipped)", records.len());
            let table = match &a.vocab {
                Some(path) => {
                    let vocab = Vocabulary::load(path)?;
                    let mode = if a.raw { Pretokenize::Raw } else { Pretokenize::Words };
                    count_tokens(&records, &Segmenter::with_mode(&vocab, mode))?
                }
                None => {
                    let lengths: BTreeSet<usize> = a.lengths.iter().copied().collect();
                    count_substrings(&records, &lengths, a.top_n)?
                }
            };
            table.save(&a.out)?;
            eprintln!("{} entries, total {}", table.len(), table.total_count());
        }
        Command::BuildVocab(a) => {
            let plan = BuildPlan {
                monolingual_top_k: a.top_k,
                target_size: a.target_size,
                lengths: a.fill_lengths,
                teacher_vocab: Vocabulary::load(&a.teacher_vocab)?,
                mono_freq: FrequencyTable::load(&a.mono_freq)?,
                multi_freq: FrequencyTable::load(&a.multi_freq)?,
            };
            let vocab = build(&plan)?;
            vocab.save(&a.out)?;
            eprintln!("{} tokens", vocab.size());
        }
        Command::Encode(a) => {
            let vocab = Vocabulary::load(&a.vocab)?;
            let mode = if a.raw { Pretokenize::Raw } else { Pretokenize::Words };
            let seg = Segmenter::with_mode(&vocab, mode);
            let stdout = io::stdout();
            let mut out = BufWriter::new(stdout.lock());
            for (n, line) in io::stdin().lock().lines().enumerate() {
                let line = line?;
                if a.decode {
                    let ids = line
                        .split_whitespace()
                        .map(|t| t.parse::<u32>())
                        .collect::<Result<Vec<_>, _>>()
                        .map_err(|_| Error::Format(format!("line {}: ids must be unsigned integers", n + 1)))?;
                    writeln!(out, "{}", seg.decode(&ids).text)?;
                } else {
                    let ids = seg.encode(&line, a.max_len).ids;
                    let strs: Vec<String> = ids.iter().map(u32::to_string).collect();
                    writeln!(out, "{}", strs.join(" "))?;
                }
            }
            out.flush()?;
        }
        Command::Clone(a) => {
            let teacher = ModelBundle::load(&a.teacher)?;
            let teacher_vocab = Vocabulary::load(&a.teacher_vocab)?;
            let vocab = Vocabulary::load(&a.vocab)?;
            let freq = a.freq.as_ref().map(FrequencyTable::load).transpose()?;
            if a.strategy == Strategy::Weighted && freq.is_none() {
                bail!(Error::Invalid("the weighted strategy needs --freq".into()));
            }
            let (student, report) = clone_bundle(&teacher, &teacher_vocab, &vocab, a.strategy, freq.as_ref())?;
            student.save(&a.out)?;
            eprintln!(
                "{} rows ({} fallback); parameters {} -> {}",
                vocab.size(),
                report.fallback_count,
                report.teacher_parameters,
                report.student_parameters
            );
        }
        Command::Precompute(a) => {
            let teacher = ModelBundle::load(&a.teacher)?;
            let teacher_vocab = Vocabulary::load(&a.teacher_vocab)?;
            let policy = QuotaPolicy::parse(&a.quota)?;
            let (records, skipped) = read_corpus(&a.input, a.language_field.as_deref())?;
            info!("{} records ({skipped} malformed lines skipped)", records.len());
            let records = apply_quota(records, &policy, seed);
            let model: StudentModel<f32> = StudentModel::from_bundle(&teacher)?;
            let seg = Segmenter::new(&teacher_vocab);
            let max_len = teacher.config.max_len;
            let (rows, stats) = precompute(&records, |t| model.teacher_output(&seg.encode(t, max_len).ids));
            let dataset = Dataset::new(rows)?;
            dataset.save(&a.out)?;
            if let Some(path) = &a.export_tsv {
                let mut w = create(path)?;
                dataset.export_tsv(&mut w)?;
                w.flush()?;
            }
            eprintln!(
                "kept {} of {} (skipped: {} encoder errors, {} non-finite, {} zero-norm)",
                stats.kept,
                records.len(),
                stats.skipped_encoder_error,
                stats.skipped_non_finite,
                stats.skipped_zero_norm
            );
        }
        Command::Distill(a) => {
            let student = StudentModel::from_bundle(&ModelBundle::load(&a.model)?)?;
            let dataset = Dataset::load(&a.data)?;
            let vocab = Vocabulary::load(&a.vocab)?;
            let cfg = TrainConfig {
                epochs: a.epochs,
                batch_size: a.batch,
                lr_peak: a.lr,
                warmup_ratio: a.warmup_ratio,
                weight_decay: a.weight_decay,
                max_grad_norm: a.clip,
                checkpoint_every: a.ckpt_every,
                seed,
                target: a.target,
                trainable: Trainable {
                    embedding: !a.freeze_embedding,
                    backbone: a.train_backbone,
                    head: !a.freeze_head,
                },
            };
            let out = train(student, &dataset, &Segmenter::new(&vocab), &cfg, Some(&a.out), a.resume.as_deref())?;
            if let Some(last) = out.log.last() {
                eprintln!("{} steps, final loss {:.6}", out.total_steps, last.loss);
            }
        }
        Command::EvalSts(a) => {
            let model: StudentModel<f32> = StudentModel::from_bundle(&ModelBundle::load(&a.model)?)?;
            let vocab = Vocabulary::load(&a.vocab)?;
            let pairs = load_sts(&a.pairs)?;
            let report = evaluate_sts(&model, &pairs, &Segmenter::new(&vocab))?;
            write_json(serde_json::to_value(&report)?, a.out.as_deref())?;
        }
        Command::Report(a) => {
            let file = File::open(&a.scores).map_err(|e| Error::File { path: a.scores.clone(), source: e })?;
            let scores = read_task_scores(io::BufReader::new(file))?;
            write_json(serde_json::to_value(aggregate_report(&scores)?)?, a.out.as_deref())?;
        }
        Command::Pipeline(a) => {
            let mut cfg = PipelineConfig::load_with_overrides(&a.config, &a.overrides)?;
            if let Some(s) = cli.seed {
                cfg.seed = s;
            }
            if a.verify {
                let path = cfg.paths.out_dir.join(MANIFEST_FILE);
                let text = std::fs::read_to_string(&path).map_err(|e| Error::File { path: path.clone(), source: e })?;
                let manifest: vsrg_core::pipeline::Manifest = serde_json::from_str(&text)
                    .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
                let bad = manifest.verify(&cfg.paths.out_dir)?;
                if !bad.is_empty() {
                    bail!(Error::Invalid(format!("hash mismatch: {}", bad.join(", "))));
                }
                eprintln!("manifest verified");
            } else {
                let manifest = run_pipeline(&cfg)?;
                let files: usize = manifest.stages.values().map(Vec::len).sum();
                eprintln!(
                    "{} stages, {files} files; manifest at {}",
                    manifest.stages.len(),
                    cfg.paths.out_dir.join(MANIFEST_FILE).display()
                );
            }
        }
        Command::Fixture(a) => {
            let cfg = write_desk_inputs(&a.out, seed)?;
            eprintln!("wrote {}", cfg.display());
        }
    }
    Ok(())
}

/// 1 for invalid input, 2 for a failed computation, 3 for I/O.
fn exit_code(err: &anyhow::Error) -> u8 {
    let classify = |e: &Error| {
        if e.is_io() {
            3
        } else {
            match e {
                Error::Underfull { .. }
                | Error::NonFinite { .. }
                | Error::NonFiniteLoss { .. }
                | Error::Degenerate { .. }
                | Error::ZeroVariance
                | Error::CountOverflow(_) => 2,
                _ => 1,
            }
        }
    };
    if let Some(p) = err.downcast_ref::<PipelineError>() {
        return match p {
            PipelineError::Validation(e) if e.is_io() => 3,
            PipelineError::Validation(_) => 1,
            PipelineError::Stage { source, .. } if source.is_io() => 3,
            PipelineError::Stage { .. } => 2,
        };
    }
    if let Some(e) = err.downcast_ref::<Error>() {
        return classify(e);
    }
    if err.downcast_ref::<io::Error>().is_some() {
        return 3;
    }
    1
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    if let Some(n) = cli.threads.filter(|&n| n > 0) {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
