//! Corpus ingestion and frequency counting.
//!
//! Records arrive as JSONL (`{"text": ..., "language": ...}`) or TSV
//! (`language<TAB>text`). Frequency tables are persisted as UTF-8 TSV with a
//! `#total<TAB>n` header, sorted by count descending then token ascending.

use std::collections::{BTreeSet, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use log::warn;
use serde_json::Value;

use crate::error::{Error, Result};
use crate::segmenter::Segmenter;

/// Word-boundary marker prefixed to word-initial subwords.
pub const BOUNDARY: char = '\u{2581}';

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorpusRecord {
    pub text: String,
    pub language: String,
}

impl CorpusRecord {
    pub fn new(text: impl Into<String>, language: impl Into<String>) -> Result<Self> {
        let text = text.into();
        let language = language.into();
        if text.trim().is_empty() {
            return Err(Error::Invalid("record text is empty".into()));
        }
        if !is_language_code(&language) {
            return Err(Error::Invalid(format!(
                "language code {language:?} is not two lowercase ASCII letters"
            )));
        }
        Ok(CorpusRecord { text, language })
    }
}

pub fn is_language_code(code: &str) -> bool {
    code.len() == 2 && code.bytes().all(|b| b.is_ascii_lowercase())
}

/// Anything that carries a language tag, so quotas can be applied before or
/// after teacher encoding.
pub trait Tagged {
    fn language(&self) -> &str;
}

impl Tagged for CorpusRecord {
    fn language(&self) -> &str {
        &self.language
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InputFormat {
    Jsonl,
    Tsv,
}

impl InputFormat {
    pub fn from_path(path: &Path) -> Result<Self> {
        match path.extension().and_then(|e| e.to_str()) {
            Some("jsonl") | Some("json") | Some("ndjson") => Ok(InputFormat::Jsonl),
            Some("tsv") | Some("txt") => Ok(InputFormat::Tsv),
            _ => Err(Error::Invalid(format!(
                "cannot detect corpus format of {} (expected .jsonl or .tsv)",
                path.display()
            ))),
        }
    }
}

/// Streaming reader over a corpus file. Malformed lines and records that fail
/// validation are skipped and counted; I/O failures end the stream.
pub struct Ingest<R> {
    lines: std::io::Lines<R>,
    format: InputFormat,
    language_field: String,
    line_no: usize,
    skipped: u64,
    yielded: u64,
    failed: bool,
}

pub fn ingest(path: impl AsRef<Path>, language_field: Option<&str>) -> Result<Ingest<BufReader<File>>> {
    let path = path.as_ref();
    let format = InputFormat::from_path(path)?;
    let file = File::open(path).map_err(|e| Error::file(path, e))?;
    Ok(Ingest::new(BufReader::new(file), format, language_field))
}

/// Reads a whole corpus file into memory, returning the records and the skip count.
pub fn read_corpus(path: impl AsRef<Path>, language_field: Option<&str>) -> Result<(Vec<CorpusRecord>, u64)> {
    let mut stream = ingest(path, language_field)?;
    let records = stream.by_ref().collect::<Result<Vec<_>>>()?;
    Ok((records, stream.skipped()))
}

impl<R: BufRead> Ingest<R> {
    pub fn new(reader: R, format: InputFormat, language_field: Option<&str>) -> Self {
        Ingest {
            lines: reader.lines(),
            format,
            language_field: language_field.unwrap_or("language").to_string(),
            line_no: 0,
            skipped: 0,
            yielded: 0,
            failed: false,
        }
    }

    pub fn skipped(&self) -> u64 {
        self.skipped
    }

    pub fn yielded(&self) -> u64 {
        self.yielded
    }

    fn parse_line(&self, line: &str) -> Option<(String, String)> {
        match self.format {
            InputFormat::Jsonl => {
                let value: Value = serde_json::from_str(line).ok()?;
                let text = value.get("text")?.as_str()?.to_string();
                let lang = value.get(self.language_field.as_str())?.as_str()?.to_string();
                Some((text, lang))
            }
            InputFormat::Tsv => {
                let (lang, text) = line.split_once('\t')?;
                Some((text.to_string(), lang.to_string()))
            }
        }
    }
}

impl<R: BufRead> Iterator for Ingest<R> {
    type Item = Result<CorpusRecord>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.failed {
            return None;
        }
        loop {
            let line = match self.lines.next()? {
                Ok(line) => line,
                Err(e) => {
                    self.failed = true;
                    return Some(Err(e.into()));
                }
            };
            self.line_no += 1;
            if line.trim().is_empty() {
                continue;
            }
            let parsed = self
                .parse_line(&line)
                .and_then(|(text, lang)| CorpusRecord::new(text, lang).ok());
            match parsed {
                Some(record) => {
                    self.yielded += 1;
                    return Some(Ok(record));
                }
                None => {
                    self.skipped += 1;
                    warn!("skipping malformed corpus line {}", self.line_no);
                }
            }
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FrequencyTable {
    entries: HashMap<String, u64>,
    total_count: u64,
}

impl FrequencyTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, token: &str, count: u64) -> Result<()> {
        if token.is_empty() {
            return Err(Error::Invalid("frequency table keys must be non-empty".into()));
        }
        if count == 0 {
            return Ok(());
        }
        let overflow = || Error::CountOverflow(token.to_string());
        self.total_count = self.total_count.checked_add(count).ok_or_else(overflow)?;
        match self.entries.get_mut(token) {
            Some(c) => *c = c.checked_add(count).ok_or_else(overflow)?,
            None => {
                self.entries.insert(token.to_string(), count);
            }
        }
        Ok(())
    }

    pub fn get(&self, token: &str) -> u64 {
        self.entries.get(token).copied().unwrap_or(0)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn total_count(&self) -> u64 {
        self.total_count
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, u64)> {
        self.entries.iter().map(|(k, &v)| (k.as_str(), v))
    }

    /// Entries ordered by count descending, then surface ascending.
    pub fn sorted(&self) -> Vec<(&str, u64)> {
        let mut v: Vec<_> = self.iter().collect();
        v.sort_unstable_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        v
    }

    /// Adds every count of `other` into `self`. Commutative and associative.
    pub fn merge(&mut self, other: &FrequencyTable) -> Result<()> {
        for (token, count) in other.iter() {
            self.add(token, count)?;
        }
        Ok(())
    }

    pub fn write_tsv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "#total\t{}", self.total_count)?;
        for (token, count) in self.sorted() {
            writeln!(w, "{}\t{}", crate::vocab::escape(token), count)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_tsv<R: BufRead>(r: R) -> Result<Self> {
        let mut lines = r.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Format("frequency table is empty".into()))??;
        let declared: u64 = header
            .strip_prefix("#total\t")
            .and_then(|n| n.trim().parse().ok())
            .ok_or_else(|| Error::Format(format!("bad frequency table header {header:?}")))?;
        let mut table = FrequencyTable::new();
        for (i, line) in lines.enumerate() {
            let line = line?;
            if line.is_empty() {
                continue;
            }
            let (token, count) = line
                .rsplit_once('\t')
                .ok_or_else(|| Error::Format(format!("line {}: missing tab", i + 2)))?;
            let count: u64 = count
                .parse()
                .map_err(|_| Error::Format(format!("line {}: bad count {count:?}", i + 2)))?;
            if count == 0 {
                return Err(Error::Format(format!("line {}: zero count", i + 2)));
            }
            table.add(&crate::vocab::unescape(token)?, count)?;
        }
        if table.total_count != declared {
            return Err(Error::Format(format!(
                "declared total {declared} does not match sum of counts {}",
                table.total_count
            )));
        }
        Ok(table)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::file(path, e))?;
        self.write_tsv(std::io::BufWriter::new(file))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::file(path, e))?;
        Self::read_tsv(BufReader::new(file))
    }
}

/// Counts every token the segmenter emits over the stream.
pub fn count_tokens<'a, I>(records: I, segmenter: &Segmenter<'_>) -> Result<FrequencyTable>
where
    I: IntoIterator<Item = &'a CorpusRecord>,
{
    let vocab = segmenter.vocab();
    let mut counts: HashMap<u32, u64> = HashMap::new();
    for record in records {
        for id in segmenter.encode(&record.text, usize::MAX).ids {
            *counts.entry(id).or_insert(0) += 1;
        }
    }
    let mut table = FrequencyTable::new();
    let mut ids: Vec<_> = counts.into_iter().collect();
    ids.sort_unstable();
    for (id, count) in ids {
        table.add(vocab.token(id).expect("segmenter emits valid ids"), count)?;
    }
    Ok(table)
}

/// Character length of a surface, not counting a leading boundary marker.
pub fn surface_len(token: &str) -> usize {
    token.strip_prefix(BOUNDARY).unwrap_or(token).chars().count()
}

/// Counts word-internal character n-grams of each requested length and keeps
/// the `top_n_per_length` most frequent per length. A word-initial gram is
/// counted both as itself and as a separate boundary-marked entry.
pub fn count_substrings<'a, I>(records: I, lengths: &BTreeSet<usize>, top_n_per_length: usize) -> Result<FrequencyTable>
where
    I: IntoIterator<Item = &'a CorpusRecord>,
{
    if lengths.is_empty() || lengths.contains(&0) {
        return Err(Error::Invalid("substring lengths must be non-empty and >= 1".into()));
    }
    let mut grams: HashMap<String, u64> = HashMap::new();
    let mut buf = String::new();
    for record in records {
        for word in record.text.split_whitespace() {
            let chars: Vec<char> = word.chars().collect();
            for &len in lengths {
                if len > chars.len() {
                    continue;
                }
                for start in 0..=chars.len() - len {
                    buf.clear();
                    buf.extend(&chars[start..start + len]);
                    bump(&mut grams, &buf)?;
                    if start == 0 {
                        buf.insert(0, BOUNDARY);
                        bump(&mut grams, &buf)?;
                    }
                }
            }
        }
    }

    let mut buckets: HashMap<usize, Vec<(String, u64)>> = HashMap::new();
    for (gram, count) in grams {
        buckets.entry(surface_len(&gram)).or_default().push((gram, count));
    }
    let mut table = FrequencyTable::new();
    for len in lengths {
        let Some(bucket) = buckets.get_mut(len) else { continue };
        bucket.sort_unstable_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        for (gram, count) in bucket.iter().take(top_n_per_length) {
            table.add(gram, *count)?;
        }
    }
    Ok(table)
}

fn bump(grams: &mut HashMap<String, u64>, gram: &str) -> Result<()> {
    match grams.get_mut(gram) {
        Some(c) => *c = c.checked_add(1).ok_or_else(|| Error::CountOverflow(gram.to_string()))?,
        None => {
            grams.insert(gram.to_string(), 1);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vocab::Vocabulary;

    fn rec(text: &str) -> CorpusRecord {
        CorpusRecord::new(text, "tr").unwrap()
    }

    fn lengths(ls: &[usize]) -> BTreeSet<usize> {
        ls.iter().copied().collect()
    }

    #[test]
    fn jsonl_line_parses() {
        let data = "{\"text\":\"merhaba dünya\",\"language\":\"tr\"}\n";
        let records: Vec<_> = Ingest::new(data.as_bytes(), InputFormat::Jsonl, None)
            .collect::<Result<_>>()
            .unwrap();
        assert_eq!(records, vec![CorpusRecord::new("merhaba dünya", "tr").unwrap()]);
    }

    #[test]
    fn empty_text_is_skipped_and_counted() {
        let data = "{\"text\":\"   \",\"language\":\"tr\"}\n{\"text\":\"ok\",\"language\":\"en\"}\n";
        let mut it = Ingest::new(data.as_bytes(), InputFormat::Jsonl, None);
        let records: Vec<_> = it.by_ref().collect::<Result<_>>().unwrap();
        assert_eq!(records.len(), 1);
        assert_eq!(it.skipped(), 1);
    }

    #[test]
    fn tsv_with_one_malformed_line() {
        let data = "tr\tbir\nen\ttwo\nno tab here\nde\tdrei\n";
        let mut it = Ingest::new(data.as_bytes(), InputFormat::Tsv, None);
        let records: Vec<_> = it.by_ref().collect::<Result<_>>().unwrap();
        assert_eq!(records.len(), 3);
        assert_eq!(it.skipped(), 1);
        assert_eq!(records[2].language, "de");
    }

    #[test]
    fn custom_language_field() {
        let data = "{\"text\":\"hallo\",\"lang\":\"de\"}\n";
        let records: Vec<_> = Ingest::new(data.as_bytes(), InputFormat::Jsonl, Some("lang"))
            .collect::<Result<_>>()
            .unwrap();
        assert_eq!(records[0].language, "de");
    }

    #[test]
    fn bad_language_codes_rejected() {
        assert!(CorpusRecord::new("x", "TR").is_err());
        assert!(CorpusRecord::new("x", "tur").is_err());
        assert!(CorpusRecord::new("x", "t1").is_err());
    }

    #[test]
    fn count_tokens_hand_example() {
        let vocab = Vocabulary::from_tokens(["ab", " "].map(String::from)).unwrap();
        let seg = Segmenter::raw(&vocab);
        let records = [rec("ab ab"), rec("ab")];
        let table = count_tokens(&records, &seg).unwrap();
        assert_eq!(table.get("ab"), 3);
        assert_eq!(table.get(" "), 1);
        assert_eq!(table.len(), 2);
        assert_eq!(table.total_count(), 4);
    }

    #[test]
    fn count_tokens_empty_and_single() {
        let vocab = Vocabulary::from_tokens(["a".to_string()]).unwrap();
        let seg = Segmenter::raw(&vocab);
        let table = count_tokens(&[], &seg).unwrap();
        assert!(table.is_empty());
        assert_eq!(table.total_count(), 0);

        let table = count_tokens(&[rec("aaa")], &seg).unwrap();
        assert_eq!(table.get("a"), 3);
        assert_eq!(table.len(), 1);
    }

    #[test]
    fn substrings_abab() {
        // word "abab": 2-grams ab@0, ba@1, ab@2 plus the boundary variant ▁ab@0
        let table = count_substrings(&[rec("abab")], &lengths(&[2]), 1).unwrap();
        assert_eq!(table.len(), 1);
        assert_eq!(table.get("ab"), 2);

        let table = count_substrings(&[rec("abab")], &lengths(&[2]), 10).unwrap();
        assert_eq!(table.get("ab"), 2);
        assert_eq!(table.get("ba"), 1);
        assert_eq!(table.get("\u{2581}ab"), 1);
        assert_eq!(table.total_count(), 4);
    }

    #[test]
    fn substrings_unigram_order_and_zero_top() {
        let table = count_substrings(&[rec("aab")], &lengths(&[1]), 1).unwrap();
        assert_eq!(table.sorted(), vec![("a", 2)]);
        let table = count_substrings(&[rec("aab")], &lengths(&[1, 2]), 0).unwrap();
        assert!(table.is_empty());
        assert!(count_substrings(&[rec("aab")], &lengths(&[]), 3).is_err());
    }

    #[test]
    fn tsv_roundtrip_and_ordering() {
        let mut t = FrequencyTable::new();
        t.add("b", 2).unwrap();
        t.add("a", 2).unwrap();
        t.add("tab\there", 5).unwrap();
        let mut buf = Vec::new();
        t.write_tsv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert_eq!(text, "#total\t9\ntab\\there\t5\na\t2\nb\t2\n");
        assert_eq!(FrequencyTable::read_tsv(buf.as_slice()).unwrap(), t);
    }

    #[test]
    fn overflow_is_an_error() {
        let mut t = FrequencyTable::new();
        t.add("a", u64::MAX).unwrap();
        assert!(matches!(t.add("a", 1), Err(Error::CountOverflow(_))));
    }

    #[test]
    fn sharded_merge_matches_single_pass() {
        let records: Vec<_> = ["ev evler", "evlerimiz ev", "kitap kitaplar", "ev"].map(rec).into();
        let ls = lengths(&[1, 2, 3]);
        let vocab = Vocabulary::from_tokens(["ev", "ler", "\u{2581}ev", "kitap"].map(String::from)).unwrap();
        let seg = Segmenter::new(&vocab);
        let whole = count_tokens(&records, &seg).unwrap();
        let mut a = count_tokens(&records[..2], &seg).unwrap();
        let b = count_tokens(&records[2..], &seg).unwrap();
        a.merge(&b).unwrap();
        assert_eq!(a, whole);
        // determinism
        assert_eq!(count_substrings(&records, &ls, 5).unwrap(), count_substrings(&records, &ls, 5).unwrap());
    }
}
