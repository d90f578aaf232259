//! Shared fixtures for the benchmarks.

use vsrg_core::cloner::ModelBundle;
use vsrg_core::corpus::CorpusRecord;
use vsrg_core::fixture;
use vsrg_core::model::StudentModel;
use vsrg_core::segmenter::Segmenter;
use vsrg_core::store::{precompute, Dataset};
use vsrg_core::vocab::Vocabulary;

pub struct Desk {
    pub vocab: Vocabulary,
    pub teacher: ModelBundle,
    pub records: Vec<CorpusRecord>,
    pub dataset: Dataset,
}

/// A teacher of `vocab_size` tokens and width `d`, plus `n` encoded records.
pub fn desk(vocab_size: usize, d: usize, n: usize) -> Desk {
    let vocab = fixture::teacher_vocab(vocab_size, 1).unwrap();
    let teacher = fixture::teacher_model(&vocab, d, 2 * d, 32, 2).unwrap();
    let records = fixture::multilingual_corpus(n, 3);
    let model: StudentModel<f32> = StudentModel::from_bundle(&teacher).unwrap();
    let seg = Segmenter::new(&vocab);
    let (rows, _) = precompute(&records, |t| model.teacher_output(&seg.encode(t, 32).ids));
    let dataset = Dataset::new(rows).unwrap();
    Desk {
        vocab,
        teacher,
        records,
        dataset,
    }
}
