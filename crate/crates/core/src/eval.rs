//! STS evaluation (cosine similarity against gold scores) and macro-averaged
//! category reports.

use std::collections::BTreeMap;
use std::io::BufRead;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Real, StudentModel};
use crate::segmenter::Segmenter;
use crate::store::TargetKind;

fn check_pair(x: &[f64], y: &[f64]) -> Result<()> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::Invalid(format!(
            "correlation needs two equal-length inputs of at least 2 values (got {} and {})",
            x.len(),
            y.len()
        )));
    }
    Ok(())
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pair(x, y)?;
    let (mx, my) = (mean(x), mean(y));
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (&a, &b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::ZeroVariance);
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// 1-based ranks; tied values share the average of their positions.
pub fn ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut out = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && x[order[j + 1]] == x[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            out[k] = avg;
        }
        i = j + 1;
    }
    out
}

pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pair(x, y)?;
    pearson(&ranks(x), &ranks(y))
}

#[derive(Debug, Clone, PartialEq)]
pub struct StsPair {
    pub sentence1: String,
    pub sentence2: String,
    pub gold: f64,
}

impl StsPair {
    pub fn new(sentence1: impl Into<String>, sentence2: impl Into<String>, gold: f64) -> Result<Self> {
        let (sentence1, sentence2) = (sentence1.into(), sentence2.into());
        if !(0.0..=5.0).contains(&gold) {
            return Err(Error::Invalid(format!("gold score {gold} outside [0, 5]")));
        }
        if sentence1.trim().is_empty() || sentence2.trim().is_empty() {
            return Err(Error::Invalid("STS sentences must be non-empty".into()));
        }
        Ok(StsPair {
            sentence1,
            sentence2,
            gold,
        })
    }
}

/// Reads `score<TAB>sentence1<TAB>sentence2` lines. Blank lines are ignored;
/// malformed lines are errors naming the line number.
pub fn read_sts<R: BufRead>(r: R) -> Result<Vec<StsPair>> {
    let mut pairs = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed = line
            .splitn(3, '\t')
            .collect::<Vec<_>>()
            .try_into()
            .ok()
            .and_then(|[score, s1, s2]: [&str; 3]| score.trim().parse::<f64>().ok().map(|g| (g, s1, s2)));
        let Some((gold, s1, s2)) = parsed else {
            return Err(Error::Format(format!("STS line {}: expected score<TAB>sentence1<TAB>sentence2", i + 1)));
        };
        pairs.push(StsPair::new(s1, s2, gold).map_err(|e| Error::Format(format!("STS line {}: {e}", i + 1)))?);
    }
    Ok(pairs)
}

pub fn load_sts(path: impl AsRef<Path>) -> Result<Vec<StsPair>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::file(path, e))?;
    read_sts(std::io::BufReader::new(file))
}

/// Rounds a correlation to a percentage with two decimals.
pub fn percent(x: f64) -> f64 {
    (x * 10_000.0).round() / 100.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StsReport {
    /// Percentages, two decimals.
    pub pearson: f64,
    pub spearman: f64,
    pub pearson_raw: f64,
    pub spearman_raw: f64,
    pub n_pairs: usize,
    pub n_skipped: usize,
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// Correlations of gold scores against predicted similarities.
pub fn score_predictions(gold: &[f64], predicted: &[f64], n_skipped: usize) -> Result<StsReport> {
    let p = pearson(predicted, gold)?;
    let s = spearman(predicted, gold)?;
    Ok(StsReport {
        pearson: percent(p),
        spearman: percent(s),
        pearson_raw: p,
        spearman_raw: s,
        n_pairs: gold.len(),
        n_skipped,
    })
}

/// Encodes both sentences of every pair and correlates their cosine
/// similarity with the gold score. Pairs whose embedding cannot be formed
/// (empty or degenerate) are skipped and counted.
pub fn evaluate_sts<T: Real>(model: &StudentModel<T>, pairs: &[StsPair], segmenter: &Segmenter<'_>) -> Result<StsReport> {
    if pairs.is_empty() {
        return Err(Error::Invalid("no STS pairs to evaluate".into()));
    }
    let max_len = model.config.max_len;
    let embed = |text: &str| model.embed(&segmenter.encode(text, max_len).ids, TargetKind::Final);
    let predicted: Vec<Option<f64>> = pairs
        .par_iter()
        .map(|p| match (embed(&p.sentence1), embed(&p.sentence2)) {
            (Ok(a), Ok(b)) => Some(cosine(&a, &b)),
            _ => None,
        })
        .collect();
    let mut gold = Vec::with_capacity(pairs.len());
    let mut pred = Vec::with_capacity(pairs.len());
    for (pair, p) in pairs.iter().zip(&predicted) {
        if let Some(p) = p {
            gold.push(pair.gold);
            pred.push(*p);
        }
    }
    score_predictions(&gold, &pred, pairs.len() - gold.len())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryReport {
    pub categories: BTreeMap<String, f64>,
    pub macro_average: f64,
    pub tasks: BTreeMap<String, f64>,
}

/// Averages task scores within each category, then averages the categories.
pub fn aggregate_report(task_scores: &BTreeMap<String, (String, f64)>) -> Result<CategoryReport> {
    if task_scores.is_empty() {
        return Err(Error::Invalid("no task scores to aggregate".into()));
    }
    let mut by_cat: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for (category, score) in task_scores.values() {
        if !score.is_finite() {
            return Err(Error::Invalid(format!("non-finite score in category {category}")));
        }
        by_cat.entry(category.clone()).or_default().push(*score);
    }
    let categories: BTreeMap<String, f64> = by_cat.into_iter().map(|(c, v)| (c, mean(&v))).collect();
    let macro_average = categories.values().sum::<f64>() / categories.len() as f64;
    Ok(CategoryReport {
        categories,
        macro_average,
        tasks: task_scores.iter().map(|(t, (_, s))| (t.clone(), *s)).collect(),
    })
}

/// Reads `task<TAB>category<TAB>score` lines.
pub fn read_task_scores<R: BufRead>(r: R) -> Result<BTreeMap<String, (String, f64)>> {
    let mut out = BTreeMap::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let [task, category, score] = fields[..] else {
            return Err(Error::Format(format!("score line {}: expected task<TAB>category<TAB>score", i + 1)));
        };
        let score: f64 = score
            .trim()
            .parse()
            .map_err(|_| Error::Format(format!("score line {}: bad score {score:?}", i + 1)))?;
        if out.insert(task.to_string(), (category.to_string(), score)).is_some() {
            return Err(Error::Format(format!("score line {}: duplicate task {task:?}", i + 1)));
        }
    }
    Ok(out)
}
