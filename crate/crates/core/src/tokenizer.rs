//! Corpus-trained subword vocabulary, greedy longest-match tokenization and
//! `[CLS] query [SEP] passage [SEP]` pair framing.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const CLS: u32 = 2;
pub const SEP: u32 = 3;

const RESERVED: [&str; 4] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]"];
pub const CONTINUATION: &str = "##";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
    longest: usize,
}

/// Lowercases and splits on whitespace, emitting each punctuation character as its own word.
pub fn basic_words(text: &str) -> Vec<String> {
    let mut words = Vec::new();
    for raw in text.split_whitespace() {
        let mut cur = String::new();
        for c in raw.chars().flat_map(char::to_lowercase) {
            if c.is_ascii_punctuation() {
                if !cur.is_empty() {
                    words.push(std::mem::take(&mut cur));
                }
                words.push(c.to_string());
            } else {
                cur.push(c);
            }
        }
        if !cur.is_empty() {
            words.push(cur);
        }
    }
    words
}

impl Vocabulary {
    /// Reserved tokens, then character pieces (initial and `##` continuation) by
    /// frequency, then whole words with at least `min_freq` occurrences by frequency,
    /// until `max_size` entries. Frequency ties break lexicographically.
    pub fn build<I, S>(texts: I, max_size: usize, min_freq: usize) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        if max_size < RESERVED.len() {
            return Err(Error::Argument(format!(
                "vocabulary size {max_size} cannot hold the {} reserved tokens",
                RESERVED.len()
            )));
        }
        let mut word_freq: HashMap<String, usize> = HashMap::new();
        for text in texts {
            for w in basic_words(text.as_ref()) {
                *word_freq.entry(w).or_default() += 1;
            }
        }
        let mut piece_freq: HashMap<String, usize> = HashMap::new();
        for (w, &f) in &word_freq {
            for (i, c) in w.chars().enumerate() {
                let piece = if i == 0 {
                    c.to_string()
                } else {
                    format!("{CONTINUATION}{c}")
                };
                *piece_freq.entry(piece).or_default() += f;
            }
        }
        let by_freq = |m: HashMap<String, usize>| {
            let mut v: Vec<(String, usize)> = m.into_iter().collect();
            v.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
            v
        };
        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        let mut seen: HashMap<String, u32> = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        let pieces = by_freq(piece_freq).into_iter();
        let words = by_freq(word_freq)
            .into_iter()
            .filter(|(_, f)| *f >= min_freq.max(1));
        for (tok, _) in pieces.chain(words) {
            if tokens.len() >= max_size {
                break;
            }
            if !seen.contains_key(&tok) {
                seen.insert(tok.clone(), tokens.len() as u32);
                tokens.push(tok);
            }
        }
        Ok(Self::from_tokens_unchecked(tokens, seen))
    }

    fn from_tokens_unchecked(tokens: Vec<String>, index: HashMap<String, u32>) -> Self {
        let longest = tokens
            .iter()
            .skip(RESERVED.len())
            .map(|t| t.chars().count())
            .max()
            .unwrap_or(0);
        Vocabulary {
            tokens,
            index,
            longest,
        }
    }

    /// Builds a vocabulary from an explicit token list. Reserved tokens are prepended.
    pub fn from_tokens<I, S>(tokens: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let all = RESERVED
            .iter()
            .map(|s| s.to_string())
            .chain(tokens.into_iter().map(Into::into));
        Self::from_lines(all)
    }

    fn from_lines(lines: impl Iterator<Item = String>) -> Result<Self> {
        let mut tokens = Vec::new();
        let mut index = HashMap::new();
        for tok in lines {
            if tok.is_empty() || tok.contains(char::is_whitespace) {
                return Err(Error::Argument(format!("invalid vocabulary token {tok:?}")));
            }
            if index.insert(tok.clone(), tokens.len() as u32).is_some() {
                return Err(Error::Argument(format!("duplicate vocabulary token {tok:?}")));
            }
            tokens.push(tok);
        }
        for (i, r) in RESERVED.iter().enumerate() {
            if tokens.get(i).map(String::as_str) != Some(*r) {
                return Err(Error::Argument(format!("reserved token {r} must have id {i}")));
            }
        }
        Ok(Self::from_tokens_unchecked(tokens, index))
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Greedy longest-match-first segmentation of each word. A character with no
    /// matching piece becomes `[UNK]` and matching resumes after it.
    pub fn tokenize(&self, text: &str) -> Vec<u32> {
        let mut out = Vec::new();
        for word in basic_words(text) {
            self.tokenize_word(&word, &mut out);
        }
        out
    }

    fn tokenize_word(&self, word: &str, out: &mut Vec<u32>) {
        let chars: Vec<char> = word.chars().collect();
        let mut start = 0;
        let mut buf = String::new();
        while start < chars.len() {
            let mut end = chars.len().min(start + self.longest);
            let mut found = None;
            while end > start {
                buf.clear();
                if start > 0 {
                    buf.push_str(CONTINUATION);
                }
                buf.extend(&chars[start..end]);
                if let Some(id) = self.id(&buf) {
                    found = Some(id);
                    break;
                }
                end -= 1;
            }
            match found {
                Some(id) => {
                    out.push(id);
                    start = end;
                }
                None => {
                    out.push(UNK);
                    start += 1;
                }
            }
        }
    }

    /// Joins pieces back into whitespace-separated words.
    pub fn detokenize(&self, ids: &[u32]) -> String {
        let mut out = String::new();
        for &id in ids {
            let tok = self.token(id).unwrap_or("[UNK]");
            match tok.strip_prefix(CONTINUATION) {
                Some(rest) if !out.is_empty() => out.push_str(rest),
                _ => {
                    if !out.is_empty() {
                        out.push(' ');
                    }
                    out.push_str(tok);
                }
            }
        }
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?);
        for t in &self.tokens {
            writeln!(out, "{t}").map_err(|e| Error::io(path, e))?;
        }
        out.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let lines = BufReader::new(file)
            .lines()
            .collect::<std::io::Result<Vec<_>>>()
            .map_err(|e| Error::io(path, e))?;
        Self::from_lines(lines.into_iter()).map_err(|e| Error::format(path, e.to_string()))
    }

    /// Encodes a (query, passage) pair. See [`EncodedPair::from_ids`].
    pub fn encode_pair(
        &self,
        query_id: &str,
        query: &str,
        passage: &str,
        seq_len: usize,
    ) -> Result<EncodedPair> {
        EncodedPair::from_ids(query_id, &self.tokenize(query), &self.tokenize(passage), seq_len)
    }
}

/// One framed (query, passage) input of fixed length.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedPair {
    pub token_ids: Vec<u32>,
    pub segment_ids: Vec<u8>,
    pub mask: Vec<u8>,
    pub seq_len: usize,
}

impl EncodedPair {
    /// Lays out `[CLS] q [SEP] p [SEP] [PAD]*`. The query is never truncated; the
    /// passage loses its tail so the frame fits in `seq_len`.
    pub fn from_ids(query_id: &str, query: &[u32], passage: &[u32], seq_len: usize) -> Result<Self> {
        if seq_len < query.len() + 4 {
            return Err(Error::Encoding {
                query_id: query_id.to_string(),
                message: format!(
                    "{} query tokens leave no passage budget in seq_len {seq_len}",
                    query.len()
                ),
            });
        }
        let budget = seq_len - query.len() - 3;
        let passage = &passage[..passage.len().min(budget)];
        let mut token_ids = Vec::with_capacity(seq_len);
        token_ids.push(CLS);
        token_ids.extend_from_slice(query);
        token_ids.push(SEP);
        let first_segment = token_ids.len();
        token_ids.extend_from_slice(passage);
        token_ids.push(SEP);
        let real = token_ids.len();
        token_ids.resize(seq_len, PAD);
        let segment_ids = (0..seq_len)
            .map(|i| u8::from(i >= first_segment && i < real))
            .collect();
        let mask = (0..seq_len).map(|i| u8::from(i < real)).collect();
        Ok(EncodedPair {
            token_ids,
            segment_ids,
            mask,
            seq_len,
        })
    }

    /// Number of real (unpadded) positions.
    pub fn len(&self) -> usize {
        self.mask.iter().take_while(|&&m| m == 1).count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Passage token ids that survived truncation.
    pub fn passage_ids(&self) -> &[u32] {
        let n = self.len();
        let start = self.segment_ids[..n]
            .iter()
            .position(|&s| s == 1)
            .unwrap_or(n);
        &self.token_ids[start..n.saturating_sub(1).max(start)]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn build_counts_words() {
        let v = Vocabulary::build(["a a a b"], 10, 1).unwrap();
        assert!(v.id("a").is_some() && v.id("b").is_some());
        assert_eq!(v.token(CLS), Some("[CLS]"));

        let empty = Vocabulary::build(Vec::<&str>::new(), 10, 1).unwrap();
        assert_eq!(empty.len(), 4);
        assert!(Vocabulary::build(["a"], 3, 1).is_err());
    }

    #[test]
    fn rare_word_falls_back_to_characters() {
        let v = Vocabulary::build(["cat cat dog"], 100, 2).unwrap();
        assert!(v.id("cat").is_some());
        assert!(v.id("dog").is_none());
        let ids = v.tokenize("dog");
        assert_eq!(ids, vec![v.id("d").unwrap(), v.id("##o").unwrap(), v.id("##g").unwrap()]);
    }

    #[test]
    fn greedy_longest_match() {
        let v = Vocabulary::from_tokens(["hello"]).unwrap();
        assert_eq!(v.tokenize("hello"), vec![v.id("hello").unwrap()]);

        let v = Vocabulary::from_tokens(["he", "h", "##llo", "##l"]).unwrap();
        assert_eq!(v.tokenize("hello"), vec![v.id("he").unwrap(), v.id("##llo").unwrap()]);
        assert!(v.tokenize("").is_empty());
        assert_eq!(v.tokenize("hex"), vec![v.id("he").unwrap(), UNK]);
    }

    #[test]
    fn lowercases_and_splits_punctuation() {
        assert_eq!(basic_words("Hello, World!"), vec!["hello", ",", "world", "!"]);
    }

    #[test]
    fn pair_layout() {
        let (a, b, c, d, e) = (10, 11, 12, 13, 14);
        let p = EncodedPair::from_ids("q", &[a, b], &[c, d, e], 8).unwrap();
        assert_eq!(p.token_ids, vec![CLS, a, b, SEP, c, d, e, SEP]);
        assert_eq!(p.segment_ids, vec![0, 0, 0, 0, 1, 1, 1, 1]);
        assert_eq!(p.mask, vec![1; 8]);

        let p = EncodedPair::from_ids("q", &[a, b], &[c, d, e], 7).unwrap();
        assert_eq!(p.token_ids, vec![CLS, a, b, SEP, c, d, SEP]);
        assert_eq!(p.mask, vec![1; 7]);
        assert_eq!(p.passage_ids(), &[c, d]);

        let p = EncodedPair::from_ids("q", &[a], &[b], 8).unwrap();
        assert_eq!(p.token_ids, vec![CLS, a, SEP, b, SEP, PAD, PAD, PAD]);
        assert_eq!(p.mask, vec![1, 1, 1, 1, 1, 0, 0, 0]);
        assert_eq!(p.segment_ids, vec![0, 0, 0, 1, 1, 0, 0, 0]);
    }

    #[test]
    fn query_over_budget_names_query() {
        let err = EncodedPair::from_ids("q42", &[5, 6, 7], &[8], 6).unwrap_err();
        match err {
            Error::Encoding { query_id, .. } => assert_eq!(query_id, "q42"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn vocab_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let v = Vocabulary::build(["the cat sat on the mat"], 64, 1).unwrap();
        let path = dir.path().join("vocab.txt");
        v.save(&path).unwrap();
        assert_eq!(Vocabulary::load(&path).unwrap(), v);
    }

    proptest! {
        #[test]
        fn frame_invariants(q in prop::collection::vec(4u32..50, 0..6),
                            p in prop::collection::vec(4u32..50, 0..40),
                            extra in 0usize..40) {
            let seq_len = q.len() + 4 + extra;
            let e = EncodedPair::from_ids("q", &q, &p, seq_len).unwrap();
            prop_assert_eq!(e.token_ids.len(), seq_len);
            prop_assert_eq!(e.token_ids[0], CLS);
            let n = e.len();
            prop_assert!(n <= seq_len);
            prop_assert!(e.mask[n..].iter().all(|&m| m == 0));
            prop_assert!(e.token_ids[n..].iter().all(|&t| t == PAD));
            prop_assert_eq!(e.token_ids[..n].iter().filter(|&&t| t == SEP).count(), 2);
            prop_assert_eq!(e.token_ids[n - 1], SEP);
            let first_sep = q.len() + 1;
            prop_assert!(e.segment_ids[..=first_sep].iter().all(|&s| s == 0));
            prop_assert!(e.segment_ids[first_sep + 1..n].iter().all(|&s| s == 1));
            prop_assert!(p.starts_with(e.passage_ids()));
            if p.len() <= seq_len - q.len() - 3 {
                prop_assert_eq!(n, 3 + q.len() + p.len());
            }
        }

        #[test]
        fn retokenizing_detokenized_words(words in prop::collection::vec("[a-e]{1,6}", 1..8)) {
            let text = words.join(" ");
            let v = Vocabulary::build([text.as_str(), "ab cd"], 40, 1).unwrap();
            let ids = v.tokenize(&text);
            prop_assert!(!ids.contains(&UNK));
            prop_assert_eq!(v.tokenize(&v.detokenize(&ids)), ids);
        }
    }
}
