#![allow(dead_code)]

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vsrg_core::cloner::{clone_bundle, ModelBundle, ModelConfig, Strategy};
use vsrg_core::corpus::CorpusRecord;
use vsrg_core::fixture;
use vsrg_core::model::{cosine_loss, StudentModel};
use vsrg_core::segmenter::Segmenter;
use vsrg_core::store::{precompute, Dataset, TargetKind, TeacherRecord};
use vsrg_core::train::{evaluate_loss, train, TrainConfig};
use vsrg_core::vocab::Vocabulary;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn unit_vectors(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(n * d);
    for _ in 0..n {
        let v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        out.extend(v.iter().map(|x| x / norm));
    }
    out
}

pub fn desk_bundle(vocab_size: usize, d: usize, h: usize, backbone: bool, seed: u64) -> ModelBundle {
    ModelBundle::random(ModelConfig { d, h, max_len: 16, vocab_size }, backbone, seed).unwrap()
}

/// A small vocabulary of exactly `size` tokens built from the toy language.
pub fn desk_vocab(size: usize) -> Vocabulary {
    fixture::teacher_vocab(size, 11).unwrap()
}

/// Encodes `records` with `teacher` to form a dataset.
pub fn teacher_dataset(teacher: &ModelBundle, vocab: &Vocabulary, records: &[CorpusRecord]) -> Dataset {
    let model: StudentModel<f32> = StudentModel::from_bundle(teacher).unwrap();
    let seg = Segmenter::new(vocab);
    let max_len = teacher.config.max_len;
    let (rows, stats): (Vec<TeacherRecord>, _) =
        precompute(records, |t| model.teacher_output(&seg.encode(t, max_len).ids));
    assert_eq!(stats.kept, records.len());
    Dataset::new(rows).unwrap()
}

pub struct Batch {
    pub ids: Vec<u32>,
    pub mask: Vec<bool>,
    pub seq: usize,
    pub targets: Vec<f64>,
}

pub fn random_batch(seed: u64, vocab: usize, rows: usize, seq: usize, d: usize) -> Batch {
    let mut r = rng(seed);
    let ids = (0..rows * seq).map(|_| r.random_range(0..vocab as u32)).collect();
    // row r keeps its first seq - (r % 3) positions
    let mask = (0..rows * seq).map(|i| i % seq < seq - (i / seq) % 3).collect();
    Batch {
        ids,
        mask,
        seq,
        targets: unit_vectors(&mut r, rows, d),
    }
}

pub fn loss_of(m: &StudentModel<f64>, b: &Batch, target: TargetKind) -> f64 {
    let fwd = m.forward(&b.ids, &b.mask, b.seq, target).unwrap();
    cosine_loss(&fwd.s_hat, &b.targets, fwd.dim).unwrap().0
}

/// Largest relative error between analytic and central-difference gradients.
pub fn gradient_check(target: TargetKind) -> f64 {
    let (v, d, h) = (32, 8, 16);
    let base: StudentModel<f64> = StudentModel::from_bundle(&desk_bundle(v, d, h, true, 21)).unwrap();
    let b = random_batch(22, v, 4, 5, d);
    let fwd = base.forward(&b.ids, &b.mask, b.seq, target).unwrap();
    let (_, g) = cosine_loss(&fwd.s_hat, &b.targets, d).unwrap();
    let analytic = base.backward(&fwd, &g);
    let eps = 1e-5;
    let mut worst: f64 = 0.0;
    let n_tensors = base.params.tensors().len();
    for ti in 0..n_tensors {
        let len = base.params.tensors()[ti].2.len();
        for i in 0..len {
            let mut m = base.clone();
            m.params.tensors_mut()[ti].2[i] += eps;
            let plus = loss_of(&m, &b, target);
            m.params.tensors_mut()[ti].2[i] -= 2.0 * eps;
            let minus = loss_of(&m, &b, target);
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic.tensors()[ti].2[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            worst = worst.max(rel);
        }
    }
    worst
}

/// Self-distillation from a clone of the teacher; returns the step losses
/// and the full-dataset loss afterwards.
pub fn fixed_point_run(steps: usize) -> (Vec<f64>, f64) {
    let vocab = desk_vocab(400);
    let teacher = fixture::teacher_model(&vocab, 16, 32, 16, 7).unwrap();
    let (student, _) = clone_bundle(&teacher, &vocab, &vocab, Strategy::Mean, None).unwrap();
    assert_eq!(student, teacher);
    let batch = 8;
    let records = fixture::multilingual_corpus(steps * batch, 8);
    let data = teacher_dataset(&teacher, &vocab, &records);
    let seg = Segmenter::new(&vocab);
    let cfg = TrainConfig {
        batch_size: batch,
        ..TrainConfig::default()
    };
    let out = train(StudentModel::from_bundle(&student).unwrap(), &data, &seg, &cfg, None, None).unwrap();
    let losses: Vec<f64> = out.log.iter().map(|r| r.loss).collect();
    let after = evaluate_loss(&out.model, &data, &seg, TargetKind::Final, 64).unwrap();
    (losses, after)
}

/// 500 steps of distillation toward an unrelated teacher.
pub fn progress_run() -> Vec<f64> {
    // 64 regular tokens on top of the reserved ids
    let vocab = desk_vocab(64 + vsrg_core::vocab::RESERVED);
    let d = 8;
    let target_teacher = fixture::teacher_model(&vocab, d, 16, 16, 100).unwrap();
    let records = fixture::multilingual_corpus(160, 101);
    let data = teacher_dataset(&target_teacher, &vocab, &records);
    let student = fixture::teacher_model(&vocab, d, 16, 16, 102).unwrap();
    let seg = Segmenter::new(&vocab);
    let cfg = TrainConfig {
        epochs: 50,
        batch_size: 16,
        lr_peak: 2e-2,
        warmup_ratio: 0.02,
        ..TrainConfig::default()
    };
    let out = train(StudentModel::from_bundle(&student).unwrap(), &data, &seg, &cfg, None, None).unwrap();
    assert_eq!(out.total_steps, 500);
    out.log.iter().map(|r| r.loss).collect()
}
