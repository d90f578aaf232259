use std::collections::HashMap;

/// Character trie used for greedy longest-match segmentation.
#[derive(Debug, Clone, Default)]
pub(crate) struct Trie {
    edges: HashMap<(u32, char), u32>,
    terminal: Vec<Option<u32>>,
}

impl Trie {
    pub fn new() -> Self {
        Trie {
            edges: HashMap::new(),
            terminal: vec![None],
        }
    }

    pub fn insert(&mut self, key: &str, value: u32) {
        let mut node = 0u32;
        for c in key.chars() {
            let next = self.terminal.len() as u32;
            node = *self.edges.entry((node, c)).or_insert_with(|| next);
            if node == next {
                self.terminal.push(None);
            }
        }
        self.terminal[node as usize] = Some(value);
    }

    /// Longest key that is a prefix of `chars[start..]`, as (length in chars, value).
    pub fn longest_match(&self, chars: &[char], start: usize) -> Option<(usize, u32)> {
        let mut node = 0u32;
        let mut best = None;
        for (offset, c) in chars[start..].iter().enumerate() {
            match self.edges.get(&(node, *c)) {
                Some(&next) => node = next,
                None => break,
            }
            if let Some(value) = self.terminal[node as usize] {
                best = Some((offset + 1, value));
            }
        }
        best
    }

    /// Greedy longest-match cover of the whole string; `None` if some position
    /// has no match.
    pub fn greedy_cover(&self, s: &str) -> Option<Vec<u32>> {
        let chars: Vec<char> = s.chars().collect();
        let mut pos = 0;
        let mut out = Vec::new();
        while pos < chars.len() {
            let (len, value) = self.longest_match(&chars, pos)?;
            out.push(value);
            pos += len;
        }
        Some(out)
    }
}
