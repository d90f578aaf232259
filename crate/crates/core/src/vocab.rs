//! Token vocabularies with reserved special and byte-fallback ids.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;
pub const BOS_ID: u32 = 2;
pub const EOS_ID: u32 = 3;
pub const BYTE_TOKEN_BASE: u32 = 4;
pub const NUM_BYTE_TOKENS: usize = 256;
/// Specials plus byte tokens.
pub const RESERVED: usize = 4 + NUM_BYTE_TOKENS;

pub const SPECIAL_SURFACES: [&str; 4] = ["<pad>", "<unk>", "<s>", "</s>"];

pub fn byte_surface(byte: u8) -> String {
    format!("<0x{byte:02X}>")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Specials {
    pub pad: u32,
    pub unk: u32,
    pub bos: u32,
    pub eos: u32,
}

impl Default for Specials {
    fn default() -> Self {
        Specials {
            pad: PAD_ID,
            unk: UNK_ID,
            bos: BOS_ID,
            eos: EOS_ID,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    id_of: HashMap<String, u32>,
    specials: Specials,
    byte_token_base: u32,
}

/// Surfaces of the reserved ids, in id order.
pub fn reserved_surfaces() -> Vec<String> {
    let mut v: Vec<String> = SPECIAL_SURFACES.iter().map(|s| s.to_string()).collect();
    v.extend((0..=255u8).map(byte_surface));
    v
}

impl Vocabulary {
    /// Builds a vocabulary from regular tokens, prepending the specials and
    /// the 256 byte tokens.
    pub fn from_tokens<I: IntoIterator<Item = String>>(regular: I) -> Result<Self> {
        let mut tokens = reserved_surfaces();
        tokens.extend(regular);
        Self::from_parts(tokens, Specials::default(), BYTE_TOKEN_BASE)
    }

    pub fn from_parts(tokens: Vec<String>, specials: Specials, byte_token_base: u32) -> Result<Self> {
        let size = tokens.len();
        let in_range = |id: u32| (id as usize) < size;
        if ![specials.pad, specials.unk, specials.bos, specials.eos]
            .into_iter()
            .all(in_range)
            || byte_token_base as usize + NUM_BYTE_TOKENS > size
        {
            return Err(Error::Invalid(format!(
                "vocabulary of size {size} cannot hold the reserved tokens"
            )));
        }
        for b in 0..=255u8 {
            let id = byte_token_base as usize + b as usize;
            if tokens[id] != byte_surface(b) {
                return Err(Error::Format(format!(
                    "id {id} should be byte token {} but is {:?}",
                    byte_surface(b),
                    tokens[id]
                )));
            }
        }
        let mut id_of = HashMap::with_capacity(size);
        for (id, token) in tokens.iter().enumerate() {
            if token.is_empty() {
                return Err(Error::Format(format!("token id {id} has an empty surface")));
            }
            if id_of.insert(token.clone(), id as u32).is_some() {
                return Err(Error::Format(format!("duplicate token surface {token:?}")));
            }
        }
        Ok(Vocabulary {
            tokens,
            id_of,
            specials,
            byte_token_base,
        })
    }

    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn id(&self, surface: &str) -> Option<u32> {
        self.id_of.get(surface).copied()
    }

    pub fn contains(&self, surface: &str) -> bool {
        self.id_of.contains_key(surface)
    }

    pub fn specials(&self) -> Specials {
        self.specials
    }

    pub fn byte_token_base(&self) -> u32 {
        self.byte_token_base
    }

    pub fn byte_id(&self, byte: u8) -> u32 {
        self.byte_token_base + byte as u32
    }

    pub fn byte_of(&self, id: u32) -> Option<u8> {
        id.checked_sub(self.byte_token_base)
            .filter(|&off| (off as usize) < NUM_BYTE_TOKENS)
            .map(|off| off as u8)
    }

    pub fn is_special(&self, id: u32) -> bool {
        let s = self.specials;
        id == s.pad || id == s.unk || id == s.bos || id == s.eos
    }

    pub fn is_reserved(&self, id: u32) -> bool {
        self.is_special(id) || self.byte_of(id).is_some()
    }

    /// Ids that are neither specials nor byte tokens, ascending.
    pub fn regular_ids(&self) -> impl Iterator<Item = u32> + '_ {
        (0..self.tokens.len() as u32).filter(move |&id| !self.is_reserved(id))
    }

    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        let s = self.specials;
        writeln!(w, "#size {}", self.size())?;
        writeln!(w, "#specials pad={} unk={} bos={} eos={}", s.pad, s.unk, s.bos, s.eos)?;
        writeln!(w, "#bytes base={}", self.byte_token_base)?;
        for token in &self.tokens {
            writeln!(w, "{}", escape(token))?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read<R: BufRead>(r: R) -> Result<Self> {
        let mut lines = r.lines();
        let mut header = |prefix: &str| -> Result<String> {
            let line = lines
                .next()
                .ok_or_else(|| Error::Format("truncated vocabulary header".into()))??;
            line.strip_prefix(prefix)
                .map(str::to_string)
                .ok_or_else(|| Error::Format(format!("expected {prefix:?} header, got {line:?}")))
        };
        let size: usize = parse_num(&header("#size ")?)?;
        let specials_line = header("#specials ")?;
        let bytes_line = header("#bytes ")?;

        let mut fields = HashMap::new();
        for kv in specials_line.split_whitespace() {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("bad specials field {kv:?}")))?;
            fields.insert(k.to_string(), parse_num::<u32>(v)?);
        }
        let get = |k: &str| {
            fields
                .get(k)
                .copied()
                .ok_or_else(|| Error::Format(format!("specials header missing {k}")))
        };
        let specials = Specials {
            pad: get("pad")?,
            unk: get("unk")?,
            bos: get("bos")?,
            eos: get("eos")?,
        };
        let base: u32 = parse_num(
            bytes_line
                .strip_prefix("base=")
                .ok_or_else(|| Error::Format(format!("bad bytes header {bytes_line:?}")))?,
        )?;

        let mut tokens = Vec::with_capacity(size);
        for line in lines {
            tokens.push(unescape(&line?)?);
        }
        if tokens.len() != size {
            return Err(Error::Format(format!(
                "header declares {size} tokens but file has {}",
                tokens.len()
            )));
        }
        Self::from_parts(tokens, specials, base)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::file(path, e))?;
        self.write(BufWriter::new(file))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::file(path, e))?;
        Self::read(BufReader::new(file))
    }
}

fn parse_num<T: std::str::FromStr>(s: &str) -> Result<T> {
    s.trim()
        .parse()
        .map_err(|_| Error::Format(format!("expected a number, got {s:?}")))
}

pub fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            '\t' => out.push_str("\\t"),
            '\r' => out.push_str("\\r"),
            c => out.push(c),
        }
    }
    out
}

pub fn unescape(s: &str) -> Result<String> {
    let mut out = String::with_capacity(s.len());
    let mut chars = s.chars();
    while let Some(c) = chars.next() {
        if c != '\\' {
            out.push(c);
            continue;
        }
        match chars.next() {
            Some('\\') => out.push('\\'),
            Some('n') => out.push('\n'),
            Some('t') => out.push('\t'),
            Some('r') => out.push('\r'),
            other => return Err(Error::Format(format!("bad escape \\{other:?} in {s:?}"))),
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn reserved_layout() {
        let v = Vocabulary::from_tokens(["ev".to_string()]).unwrap();
        assert_eq!(v.size(), RESERVED + 1);
        assert_eq!(v.token(PAD_ID), Some("<pad>"));
        assert_eq!(v.token(4), Some("<0x00>"));
        assert_eq!(v.token(259), Some("<0xFF>"));
        assert_eq!(v.id("ev"), Some(260));
        assert_eq!(v.byte_of(4 + 0x41), Some(0x41));
        assert_eq!(v.byte_of(260), None);
        assert_eq!(v.regular_ids().collect::<Vec<_>>(), vec![260]);
    }

    #[test]
    fn duplicates_rejected() {
        let err = Vocabulary::from_tokens(["a", "a"].map(String::from)).unwrap_err();
        assert!(matches!(err, Error::Format(_)));
        assert!(Vocabulary::from_tokens(["<s>".to_string()]).is_err());
    }

    #[test]
    fn file_format_header_and_escapes() {
        let v = Vocabulary::from_tokens(["a\tb", "back\\slash", "new\nline", "#x"].map(String::from)).unwrap();
        let mut buf = Vec::new();
        v.write(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines[0], "#size 264");
        assert_eq!(lines[1], "#specials pad=0 unk=1 bos=2 eos=3");
        assert_eq!(lines[2], "#bytes base=4");
        assert_eq!(lines[3], "<pad>");
        assert_eq!(lines[3 + 260], "a\\tb");
        assert_eq!(lines[3 + 262], "new\\nline");
        assert_eq!(Vocabulary::read(buf.as_slice()).unwrap(), v);
    }

    #[test]
    fn size_mismatch_is_format_error() {
        let text = "#size 5\n#specials pad=0 unk=1 bos=2 eos=3\n#bytes base=4\n<pad>\n";
        assert!(matches!(Vocabulary::read(text.as_bytes()), Err(Error::Format(_))));
    }

    proptest! {
        #[test]
        fn escape_roundtrip(s in "\\PC*|[\\\\\n\t\r]*") {
            prop_assert_eq!(unescape(&escape(&s)).unwrap(), s.clone());
            prop_assert!(!escape(&s).contains('\n'));
        }
    }
}
