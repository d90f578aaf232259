//! Hybrid vocabulary construction: monolingual top-k selection, teacher
//! pruning and length-stratified multilingual fill.
//!
//! The built layout is `[specials][256 byte tokens][monolingual top-k]
//! [teacher survivors][multilingual fill]`, with exactly `target_size` ids.

use std::collections::{HashMap, HashSet};

use crate::corpus::{surface_len, FrequencyTable};
use crate::error::{Error, Result};
use crate::trie::Trie;
use crate::vocab::{reserved_surfaces, Vocabulary, RESERVED};

#[derive(Debug, Clone)]
pub struct BuildPlan {
    pub monolingual_top_k: usize,
    pub target_size: usize,
    /// Character lengths for the multilingual fill, in round-robin order.
    pub lengths: Vec<usize>,
    pub teacher_vocab: Vocabulary,
    pub mono_freq: FrequencyTable,
    pub multi_freq: FrequencyTable,
}

impl BuildPlan {
    pub fn validate(&self) -> Result<()> {
        if self.target_size < RESERVED {
            return Err(Error::Invalid(format!(
                "target size {} is smaller than the {RESERVED} reserved tokens",
                self.target_size
            )));
        }
        if self.monolingual_top_k + RESERVED > self.target_size {
            return Err(Error::Invalid(format!(
                "monolingual top-k {} plus {RESERVED} reserved tokens exceeds target size {}",
                self.monolingual_top_k, self.target_size
            )));
        }
        if self.lengths.contains(&0) {
            return Err(Error::Invalid("fill lengths must be >= 1".into()));
        }
        Ok(())
    }
}

/// The `k` highest-count tokens, ties broken by surface.
pub fn select_top_k(freq: &FrequencyTable, k: usize) -> Vec<String> {
    freq.sorted()
        .into_iter()
        .take(k)
        .map(|(t, _)| t.to_string())
        .collect()
}

/// Regular teacher tokens that survive pruning against `retained`, in teacher
/// order. A token is pruned when it is itself retained or when greedy
/// longest-match over the retained set covers its whole surface.
pub fn prune_teacher(teacher_vocab: &Vocabulary, retained: &[String]) -> Vec<String> {
    let mut trie = Trie::new();
    let mut set = HashSet::with_capacity(retained.len());
    for (i, token) in retained.iter().enumerate() {
        trie.insert(token, i as u32);
        set.insert(token.as_str());
    }
    teacher_vocab
        .regular_ids()
        .map(|id| teacher_vocab.token(id).unwrap())
        .filter(|surface| !set.contains(surface) && trie.greedy_cover(surface).is_none())
        .map(str::to_string)
        .collect()
}

/// Fills the slots left after `already_chosen` regular tokens by round-robin
/// over the plan's length buckets, most frequent first within a bucket.
pub fn fill_multilingual(plan: &BuildPlan, already_chosen: &HashSet<String>) -> Result<Vec<String>> {
    let capacity = plan.target_size.saturating_sub(RESERVED);
    if already_chosen.len() > capacity {
        return Err(Error::Invalid(format!(
            "{} tokens already chosen but only {capacity} regular slots exist",
            already_chosen.len()
        )));
    }
    let free = capacity - already_chosen.len();
    if free == 0 {
        return Ok(Vec::new());
    }

    let reserved: HashSet<String> = reserved_surfaces().into_iter().collect();
    let mut lengths: Vec<usize> = Vec::new();
    for &l in &plan.lengths {
        if !lengths.contains(&l) {
            lengths.push(l);
        }
    }
    let mut by_len: HashMap<usize, Vec<&str>> = HashMap::new();
    for (token, _) in plan.multi_freq.sorted() {
        by_len.entry(surface_len(token)).or_default().push(token);
    }
    let mut buckets: Vec<std::vec::IntoIter<&str>> = lengths
        .iter()
        .map(|l| by_len.remove(l).unwrap_or_default().into_iter())
        .collect();

    let mut out = Vec::with_capacity(free);
    let mut taken: HashSet<&str> = HashSet::new();
    while out.len() < free {
        let mut progressed = false;
        for bucket in buckets.iter_mut() {
            if out.len() == free {
                break;
            }
            let next = bucket.by_ref().find(|t| {
                !already_chosen.contains(*t) && !reserved.contains(*t) && !taken.contains(t)
            });
            if let Some(token) = next {
                taken.insert(token);
                out.push(token.to_string());
                progressed = true;
            }
        }
        if !progressed {
            return Err(Error::Underfull {
                shortfall: free - out.len(),
            });
        }
    }
    Ok(out)
}

pub fn build(plan: &BuildPlan) -> Result<Vocabulary> {
    plan.validate()?;
    let reserved: HashSet<String> = reserved_surfaces().into_iter().collect();

    let mono: Vec<String> = select_top_k(&plan.mono_freq, plan.monolingual_top_k)
        .into_iter()
        .filter(|t| !reserved.contains(t))
        .collect();
    let capacity = plan.target_size - RESERVED - mono.len();

    let mut survivors = prune_teacher(&plan.teacher_vocab, &mono);
    if survivors.len() > capacity {
        // keep the most frequent survivors, then restore teacher order
        let mut ranked: Vec<(usize, u64)> = survivors
            .iter()
            .enumerate()
            .map(|(i, t)| (i, plan.multi_freq.get(t)))
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        let mut keep: Vec<usize> = ranked.into_iter().take(capacity).map(|(i, _)| i).collect();
        keep.sort_unstable();
        survivors = keep.into_iter().map(|i| std::mem::take(&mut survivors[i])).collect();
    }

    let chosen: HashSet<String> = mono.iter().chain(&survivors).cloned().collect();
    let fill = fill_multilingual(plan, &chosen)?;

    let vocab = Vocabulary::from_tokens(mono.into_iter().chain(survivors).chain(fill))?;
    debug_assert_eq!(vocab.size(), plan.target_size);
    Ok(vocab)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::BOUNDARY;
    use rand::{RngExt, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn table(entries: &[(&str, u64)]) -> FrequencyTable {
        let mut t = FrequencyTable::new();
        for (k, v) in entries {
            t.add(k, *v).unwrap();
        }
        t
    }

    fn plan(target_size: usize, top_k: usize, teacher: &[&str], mono: FrequencyTable, multi: FrequencyTable) -> BuildPlan {
        BuildPlan {
            monolingual_top_k: top_k,
            target_size,
            lengths: vec![1, 2, 3, 4],
            teacher_vocab: Vocabulary::from_tokens(teacher.iter().map(|s| s.to_string())).unwrap(),
            mono_freq: mono,
            multi_freq: multi,
        }
    }

    #[test]
    fn top_k_tie_break() {
        let t = table(&[("a", 5), ("b", 5), ("c", 1)]);
        assert_eq!(select_top_k(&t, 2), vec!["a", "b"]);
        assert!(select_top_k(&t, 0).is_empty());
        assert_eq!(select_top_k(&t, 10).len(), 3);
    }

    #[test]
    fn top_k_matches_full_sort_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut t = FrequencyTable::new();
        let mut entries = Vec::new();
        for i in 0..10 {
            let tok = format!("t{}", (b'a' + i as u8) as char);
            let c = rng.random_range(1..4u64);
            t.add(&tok, c).unwrap();
            entries.push((tok, c));
        }
        entries.sort_by(|a, b| (std::cmp::Reverse(a.1), &a.0).cmp(&(std::cmp::Reverse(b.1), &b.0)));
        let oracle: Vec<String> = entries.into_iter().take(4).map(|e| e.0).collect();
        assert_eq!(select_top_k(&t, 4), oracle);
    }

    #[test]
    fn prune_resolvable_teacher_token() {
        let teacher = Vocabulary::from_tokens(["ev", "ler", "evler", "xyz"].map(String::from)).unwrap();
        let retained = vec!["ev".to_string(), "ler".to_string()];
        assert_eq!(prune_teacher(&teacher, &retained), vec!["xyz"]);
        assert_eq!(prune_teacher(&teacher, &[]), vec!["ev", "ler", "evler", "xyz"]);
    }

    #[test]
    fn prune_soundness_decodes() {
        let teacher = Vocabulary::from_tokens(
            ["▁ev", "ler", "▁evler", "imiz", "▁evlerimiz", "▁kitap", "lar"].map(String::from),
        )
        .unwrap();
        let retained: Vec<String> = ["▁ev", "ler", "imiz"].map(String::from).into();
        let survivors: HashSet<_> = prune_teacher(&teacher, &retained).into_iter().collect();
        let mut trie = Trie::new();
        for (i, t) in retained.iter().enumerate() {
            trie.insert(t, i as u32);
        }
        for id in teacher.regular_ids() {
            let s = teacher.token(id).unwrap();
            if !survivors.contains(s) {
                let pieces = trie.greedy_cover(s).unwrap();
                let joined: String = pieces.iter().map(|&i| retained[i as usize].as_str()).collect();
                assert_eq!(joined, s);
            }
        }
        assert!(survivors.contains("▁kitap"));
    }

    #[test]
    fn round_robin_fill() {
        let multi = table(&[("a", 9), ("b", 8), ("ab", 1)]);
        let p = plan(RESERVED + 2, 0, &[], FrequencyTable::new(), multi);
        let fill = fill_multilingual(&p, &HashSet::new()).unwrap();
        assert_eq!(fill, vec!["a", "ab"]);
    }

    #[test]
    fn fill_zero_slots_and_skips_chosen() {
        let multi = table(&[("a", 9), ("b", 8), ("ab", 1)]);
        let p = plan(RESERVED + 1, 0, &[], FrequencyTable::new(), multi.clone());
        let chosen: HashSet<String> = ["x".to_string()].into();
        assert!(fill_multilingual(&p, &chosen).unwrap().is_empty());

        let p = plan(RESERVED + 2, 0, &[], FrequencyTable::new(), multi);
        let chosen: HashSet<String> = ["a".to_string()].into();
        assert_eq!(fill_multilingual(&p, &chosen).unwrap(), vec!["b"]);
    }

    #[test]
    fn underfull_names_shortfall() {
        let multi = table(&[("a", 9)]);
        let p = plan(RESERVED + 4, 0, &[], FrequencyTable::new(), multi);
        match fill_multilingual(&p, &HashSet::new()) {
            Err(Error::Underfull { shortfall }) => assert_eq!(shortfall, 3),
            other => panic!("expected underfull, got {other:?}"),
        }
    }

    #[test]
    fn target_below_reserved_is_rejected() {
        let p = plan(100, 0, &[], FrequencyTable::new(), FrequencyTable::new());
        assert!(matches!(build(&p), Err(Error::Invalid(_))));
    }

    #[test]
    fn desk_build_layout() {
        let b = BOUNDARY;
        let mono = table(&[(&format!("{b}ev"), 50), ("ler", 40), ("imiz", 30), ("den", 5)]);
        let multi = table(&[("a", 100), ("e", 90), ("th", 80), ("he", 70), ("the", 60), (&format!("{b}kitap"), 3)]);
        let teacher = [&format!("{b}evler") as &str, "xyz", "ler", &format!("{b}kitap"), "qq"];
        let regular = |target: usize| {
            let p = plan(target, 3, &teacher, mono.clone(), multi.clone());
            let v = build(&p).unwrap();
            assert_eq!(v.size(), target);
            v.regular_ids().map(|id| v.token(id).unwrap().to_string()).collect::<Vec<_>>()
        };
        let ev = format!("{b}ev");
        let kitap = format!("{b}kitap");
        // survivors xyz, ▁kitap, qq all fit; two fill slots go round-robin
        assert_eq!(regular(RESERVED + 8), vec![&ev as &str, "ler", "imiz", "xyz", &kitap, "qq", "a", "th"]);
        // only two survivor slots: ▁kitap by frequency, xyz by teacher order; emitted in teacher order
        assert_eq!(regular(RESERVED + 5), vec![&ev as &str, "ler", "imiz", "xyz", &kitap]);
    }
}
