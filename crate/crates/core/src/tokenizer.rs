//! Byte-level BPE: trainer, encoder, fertility measurement, persistence.
//!
//! The base vocabulary is the 256 byte values, so any byte string encodes and
//! decodes exactly, including invalid UTF-8. Merges are learned greedily
//! (most frequent adjacent pair first) and never cross pre-token boundaries.
//!
//! Pre-tokenization splits text into runs of letters, runs of digits (numbers
//! are kept whole, never split per digit), and runs of punctuation or
//! symbols, each grabbing one immediately preceding space when present.
//! Concatenating the pre-tokens reproduces the input bytes exactly.
//!
//! Determinism: pair-count ties are broken toward the lower (left, right)
//! token-id pair, and candidate words are kept in sorted order, so training
//! is a pure function of (corpus bytes, n_merges).

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::fsio;

/// Name of the end-of-document token appended after the merged vocabulary.
pub const EOD_TOKEN: &str = "<|eod|>";
/// Reserved padding token; defined for completeness, nothing in the training
/// path emits it.
pub const PAD_TOKEN: &str = "<|pad|>";

const FORMAT_VERSION: &str = "bbpe v1";

#[derive(Debug, Clone)]
pub struct Tokenizer {
    /// Byte strings for ids 0..256+n_merges; ids 0..256 are the single bytes.
    vocab: Vec<Vec<u8>>,
    /// Merge `rank` produced token id `256 + rank` from this (left, right) pair.
    merges: Vec<(u32, u32)>,
    pair_rank: HashMap<(u32, u32), u32>,
    specials: Vec<String>,
}

/// Corpus token totals observed during training, one entry per executed
/// merge. Each merge replaces pairs, so the sequence never increases.
#[derive(Debug, Clone)]
pub struct TrainStats {
    pub initial_tokens: u64,
    pub tokens_after_merge: Vec<u64>,
}

impl Tokenizer {
    /// Tokenizer with no merges: plain bytes plus the special tokens.
    pub fn byte_level() -> Tokenizer {
        Tokenizer::from_merges(Vec::new()).expect("byte-level vocab is consistent")
    }

    fn from_merges(merges: Vec<(u32, u32)>) -> Result<Tokenizer> {
        let mut vocab: Vec<Vec<u8>> = (0u8..=255).map(|b| vec![b]).collect();
        let mut pair_rank = HashMap::new();
        for (rank, &(l, r)) in merges.iter().enumerate() {
            let (l, r) = (l as usize, r as usize);
            if l >= vocab.len() || r >= vocab.len() {
                return Err(Error::SchemaMismatch(format!(
                    "merge {rank} references unknown token ids ({l}, {r})"
                )));
            }
            let mut bytes = vocab[l].clone();
            bytes.extend_from_slice(&vocab[r]);
            vocab.push(bytes);
            pair_rank.insert((l as u32, r as u32), rank as u32);
        }
        Ok(Tokenizer {
            vocab,
            merges,
            pair_rank,
            specials: vec![EOD_TOKEN.to_string(), PAD_TOKEN.to_string()],
        })
    }

    /// Train `n_merges` merges over the corpus (stops early once no pair
    /// occurs twice).
    pub fn train<I, B>(corpus: I, n_merges: usize) -> Tokenizer
    where
        I: IntoIterator<Item = B>,
        B: AsRef<[u8]>,
    {
        Tokenizer::train_with_stats(corpus, n_merges).0
    }

    pub fn train_with_stats<I, B>(corpus: I, n_merges: usize) -> (Tokenizer, TrainStats)
    where
        I: IntoIterator<Item = B>,
        B: AsRef<[u8]>,
    {
        // Aggregate identical pre-tokens; synthetic and natural corpora alike
        // repeat words heavily, so training cost scales with the unique set.
        let mut word_counts: HashMap<Vec<u8>, u64> = HashMap::new();
        for doc in corpus {
            for pre in pretokenize(doc.as_ref()) {
                *word_counts.entry(pre.to_vec()).or_insert(0) += 1;
            }
        }
        let mut entries: Vec<(Vec<u8>, u64)> = word_counts.into_iter().collect();
        entries.sort();
        let mut words: Vec<(Vec<u32>, u64)> = entries
            .into_iter()
            .map(|(bytes, n)| (bytes.iter().map(|&b| b as u32).collect(), n))
            .collect();

        let mut tok = Tokenizer::byte_level();
        let mut total: u64 = words.iter().map(|(w, n)| w.len() as u64 * n).sum();
        let mut stats = TrainStats {
            initial_tokens: total,
            tokens_after_merge: Vec::new(),
        };
        // Byte strings present in the vocab; a merge whose result collides
        // with an existing token is skipped to keep contents unique, which
        // the file format relies on.
        let mut seen: HashMap<Vec<u8>, ()> = tok.vocab.iter().map(|v| (v.clone(), ())).collect();
        let mut banned: HashMap<(u32, u32), ()> = HashMap::new();

        while tok.merges.len() < n_merges {
            let mut counts: HashMap<(u32, u32), u64> = HashMap::new();
            for (w, n) in &words {
                for pair in w.windows(2) {
                    *counts.entry((pair[0], pair[1])).or_insert(0) += n;
                }
            }
            // Highest count wins; ties go to the smaller (left, right) pair.
            let mut best: Option<((u32, u32), u64)> = None;
            for (&pair, &count) in &counts {
                if count < 2 || banned.contains_key(&pair) {
                    continue;
                }
                let better = match best {
                    None => true,
                    Some((bp, bc)) => count > bc || (count == bc && pair < bp),
                };
                if better {
                    best = Some((pair, count));
                }
            }
            let Some(((l, r), _)) = best else { break };

            let mut bytes = tok.vocab[l as usize].clone();
            bytes.extend_from_slice(&tok.vocab[r as usize]);
            if seen.contains_key(&bytes) {
                banned.insert((l, r), ());
                continue;
            }

            let rank = tok.merges.len() as u32;
            let new_id = 256 + rank;
            for (w, n) in &mut words {
                let merged = merge_pair(w, l, r, new_id);
                if merged > 0 {
                    total -= merged * *n;
                }
            }
            seen.insert(bytes.clone(), ());
            tok.vocab.push(bytes);
            tok.merges.push((l, r));
            tok.pair_rank.insert((l, r), rank);
            stats.tokens_after_merge.push(total);
        }
        (tok, stats)
    }

    pub fn n_merges(&self) -> usize {
        self.merges.len()
    }

    /// Total ids: 256 bytes + one per merge + special tokens.
    pub fn vocab_size(&self) -> usize {
        self.vocab.len() + self.specials.len()
    }

    pub fn eod_id(&self) -> u32 {
        self.vocab.len() as u32
    }

    pub fn pad_id(&self) -> u32 {
        self.vocab.len() as u32 + 1
    }

    /// Byte string behind an ordinary token id; specials have no bytes.
    pub fn token_bytes(&self, id: u32) -> Option<&[u8]> {
        self.vocab.get(id as usize).map(|v| v.as_slice())
    }

    /// Encode arbitrary bytes. Special tokens are never produced; text that
    /// happens to spell a special token's name encodes as its plain bytes.
    pub fn encode(&self, bytes: &[u8]) -> Vec<u32> {
        let mut out = Vec::new();
        for pre in pretokenize(bytes) {
            self.encode_pretoken(pre, &mut out);
        }
        out
    }

    fn encode_pretoken(&self, bytes: &[u8], out: &mut Vec<u32>) {
        let mut toks: Vec<u32> = bytes.iter().map(|&b| b as u32).collect();
        loop {
            let mut best: Option<u32> = None;
            for pair in toks.windows(2) {
                if let Some(&rank) = self.pair_rank.get(&(pair[0], pair[1])) {
                    if best.map_or(true, |b| rank < b) {
                        best = Some(rank);
                    }
                }
            }
            let Some(rank) = best else { break };
            let (l, r) = self.merges[rank as usize];
            let new_id = 256 + rank;
            merge_pair(&mut toks, l, r, new_id);
        }
        out.extend_from_slice(&toks);
    }

    /// Decode ids back to bytes. Special tokens decode to nothing; ids past
    /// the vocabulary are an error.
    pub fn decode(&self, ids: &[u32]) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        for &id in ids {
            if let Some(bytes) = self.vocab.get(id as usize) {
                out.extend_from_slice(bytes);
            } else if (id as usize) < self.vocab.len() + self.specials.len() {
                // special token: no byte content
            } else {
                return Err(Error::IndexOutOfRange {
                    what: "token id",
                    index: id as usize,
                    size: self.vocab_size(),
                });
            }
        }
        Ok(out)
    }

    /// Serialize: version line, one merge per line as two hex-encoded parent
    /// byte strings in rank order, then the special-token section.
    pub fn to_writer(&self, w: &mut dyn Write) -> std::io::Result<()> {
        writeln!(w, "{FORMAT_VERSION}")?;
        for &(l, r) in &self.merges {
            writeln!(
                w,
                "{} {}",
                hex(&self.vocab[l as usize]),
                hex(&self.vocab[r as usize])
            )?;
        }
        for name in &self.specials {
            writeln!(w, "special {name}")?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fsio::atomic_write_with(path, |w| {
            self.to_writer(w).map_err(|e| Error::io(path, e))
        })
    }

    pub fn from_str_contents(contents: &str) -> Result<Tokenizer> {
        let mut lines = contents.lines().enumerate();
        match lines.next() {
            Some((_, line)) if line.trim() == FORMAT_VERSION => {}
            other => {
                return Err(Error::SchemaMismatch(format!(
                    "expected {FORMAT_VERSION:?} header, found {:?}",
                    other.map(|(_, l)| l).unwrap_or("")
                )))
            }
        }
        let mut merges: Vec<(u32, u32)> = Vec::new();
        let mut by_bytes: HashMap<Vec<u8>, u32> = (0u32..256).map(|b| (vec![b as u8], b)).collect();
        let mut specials = Vec::new();
        let mut in_specials = false;
        for (idx, line) in lines {
            let lineno = idx + 1;
            let line = line.trim_end();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix("special ") {
                in_specials = true;
                specials.push(name.to_string());
                continue;
            }
            if in_specials {
                return Err(Error::Parse {
                    line: lineno,
                    msg: "merge line after special section".into(),
                });
            }
            let mut parts = line.split(' ');
            let (Some(lh), Some(rh), None) = (parts.next(), parts.next(), parts.next()) else {
                return Err(Error::Parse {
                    line: lineno,
                    msg: "expected two hex fields".into(),
                });
            };
            let lb = unhex(lh).ok_or_else(|| Error::Parse {
                line: lineno,
                msg: format!("bad hex {lh:?}"),
            })?;
            let rb = unhex(rh).ok_or_else(|| Error::Parse {
                line: lineno,
                msg: format!("bad hex {rh:?}"),
            })?;
            let &l = by_bytes.get(&lb).ok_or_else(|| Error::Parse {
                line: lineno,
                msg: "left parent not in vocabulary".into(),
            })?;
            let &r = by_bytes.get(&rb).ok_or_else(|| Error::Parse {
                line: lineno,
                msg: "right parent not in vocabulary".into(),
            })?;
            let new_id = 256 + merges.len() as u32;
            let mut bytes = lb;
            bytes.extend_from_slice(&rb);
            if by_bytes.insert(bytes, new_id).is_some() {
                return Err(Error::Parse {
                    line: lineno,
                    msg: "merge result duplicates an existing token".into(),
                });
            }
            merges.push((l, r));
        }
        if specials != [EOD_TOKEN, PAD_TOKEN] {
            return Err(Error::SchemaMismatch(format!(
                "special section must list {EOD_TOKEN} then {PAD_TOKEN}, found {specials:?}"
            )));
        }
        Tokenizer::from_merges(merges)
    }

    pub fn load(path: &Path) -> Result<Tokenizer> {
        Tokenizer::from_str_contents(&fsio::read_to_string(path)?)
    }
}

/// Replace non-overlapping occurrences of `(l, r)` with `new_id`, scanning
/// left to right in place. Returns the number of replacements.
fn merge_pair(toks: &mut Vec<u32>, l: u32, r: u32, new_id: u32) -> u64 {
    let mut read = 0;
    let mut write = 0;
    let mut merged = 0u64;
    while read < toks.len() {
        if read + 1 < toks.len() && toks[read] == l && toks[read + 1] == r {
            toks[write] = new_id;
            read += 2;
            merged += 1;
        } else {
            toks[write] = toks[read];
            read += 1;
        }
        write += 1;
    }
    toks.truncate(write);
    merged
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn unhex(s: &str) -> Option<Vec<u8>> {
    if s.is_empty() || s.len() % 2 != 0 {
        return None;
    }
    (0..s.len())
        .step_by(2)
        .map(|i| u8::from_str_radix(&s[i..i + 2], 16).ok())
        .collect()
}

#[derive(Clone, Copy, PartialEq)]
enum Kind {
    Letter,
    Digit,
    Punct,
    Space,
    OtherWs,
    Raw,
}

fn classify(bytes: &[u8]) -> (Kind, usize) {
    match next_char(bytes) {
        Some((c, len)) => {
            let kind = if c == ' ' {
                Kind::Space
            } else if c.is_whitespace() {
                Kind::OtherWs
            } else if c.is_alphabetic() {
                Kind::Letter
            } else if c.is_numeric() {
                Kind::Digit
            } else {
                Kind::Punct
            };
            (kind, len)
        }
        None => (Kind::Raw, 1),
    }
}

fn next_char(bytes: &[u8]) -> Option<(char, usize)> {
    let len = bytes.len().min(4);
    for l in 1..=len {
        if let Ok(s) = std::str::from_utf8(&bytes[..l]) {
            if let Some(c) = s.chars().next() {
                return Some((c, l));
            }
        }
    }
    None
}

/// Split into pre-tokens: letter runs, digit runs, punctuation/symbol runs
/// (each with one immediately preceding space attached), whitespace runs, and
/// invalid-byte runs. The pieces concatenate back to the input exactly.
pub fn pretokenize(bytes: &[u8]) -> Vec<&[u8]> {
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let (kind, clen) = classify(&bytes[i..]);
        match kind {
            Kind::Space | Kind::OtherWs => {
                // Maximal whitespace run; when it ends with a single space
                // right before a content run, that space joins the run.
                let start = i;
                let mut last_kind = kind;
                let mut last_len = clen;
                let mut j = i + clen;
                loop {
                    let (k, l) = if j < bytes.len() {
                        classify(&bytes[j..])
                    } else {
                        break;
                    };
                    if k != Kind::Space && k != Kind::OtherWs {
                        break;
                    }
                    last_kind = k;
                    last_len = l;
                    j += l;
                }
                let content_follows = j < bytes.len() && !matches!(classify(&bytes[j..]).0, Kind::Raw);
                if last_kind == Kind::Space && content_follows {
                    // Keep one space for the following run.
                    if j - last_len > start {
                        out.push(&bytes[start..j - last_len]);
                    }
                    let (run_end, _) = content_run(bytes, j);
                    out.push(&bytes[j - last_len..run_end]);
                    i = run_end;
                } else {
                    out.push(&bytes[start..j]);
                    i = j;
                }
            }
            Kind::Raw => {
                let start = i;
                let mut j = i + 1;
                while j < bytes.len() && matches!(classify(&bytes[j..]).0, Kind::Raw) {
                    j += 1;
                }
                out.push(&bytes[start..j]);
                i = j;
            }
            _ => {
                let (end, _) = content_run(bytes, i);
                out.push(&bytes[i..end]);
                i = end;
            }
        }
    }
    out
}

/// Extent of the letter/digit/punct run starting at `start`.
fn content_run(bytes: &[u8], start: usize) -> (usize, Kind) {
    let (kind, clen) = classify(&bytes[start..]);
    let mut j = start + clen;
    while j < bytes.len() {
        let (k, l) = classify(&bytes[j..]);
        if k != kind {
            break;
        }
        j += l;
    }
    (j, kind)
}

/// Tokens per whitespace-delimited word, per language. `fertility` is `None`
/// when a language has no words at all.
#[derive(Debug, Clone, serde::Serialize)]
pub struct FertilityEntry {
    pub tokens: u64,
    pub words: u64,
    pub fertility: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct FertilityReport {
    /// Keyed and therefore ordered by language code.
    pub per_lang: std::collections::BTreeMap<String, FertilityEntry>,
}

/// The word denominator splits on Unicode whitespace, which undercounts
/// scripts written without spaces (zh, ja, th); their fertility reads as
/// tokens per line rather than per word. The CSV header carries this note.
pub const FERTILITY_NOTE: &str =
    "words are whitespace-delimited; zh/ja/th style text without spaces counts one word per line";

pub fn fertility<'a>(
    tok: &Tokenizer,
    docs: impl IntoIterator<Item = (&'a str, &'a str)>,
) -> FertilityReport {
    let mut per_lang: std::collections::BTreeMap<String, FertilityEntry> =
        std::collections::BTreeMap::new();
    for (lang, text) in docs {
        let e = per_lang.entry(lang.to_string()).or_insert(FertilityEntry {
            tokens: 0,
            words: 0,
            fertility: None,
        });
        e.tokens += tok.encode(text.as_bytes()).len() as u64;
        e.words += text.split_whitespace().count() as u64;
    }
    for e in per_lang.values_mut() {
        e.fertility = (e.words > 0).then(|| e.tokens as f64 / e.words as f64);
    }
    FertilityReport { per_lang }
}

impl FertilityReport {
    pub fn write_csv(&self, w: &mut dyn Write) -> std::io::Result<()> {
        writeln!(w, "# {FERTILITY_NOTE}")?;
        writeln!(w, "lang,tokens,words,fertility")?;
        for (lang, e) in &self.per_lang {
            match e.fertility {
                Some(f) => writeln!(w, "{lang},{},{},{f}", e.tokens, e.words)?,
                None => writeln!(w, "{lang},{},{},", e.tokens, e.words)?,
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn pre_strs(s: &[u8]) -> Vec<Vec<u8>> {
        pretokenize(s).into_iter().map(|p| p.to_vec()).collect()
    }

    #[test]
    fn pretokenize_letters_and_digits() {
        assert_eq!(pre_strs(b"abc 123"), vec![b"abc".to_vec(), b" 123".to_vec()]);
    }

    #[test]
    fn pretokenize_punctuation_splits() {
        assert_eq!(
            pre_strs(b"a,b"),
            vec![b"a".to_vec(), b",".to_vec(), b"b".to_vec()]
        );
    }

    #[test]
    fn pretokenize_multiple_spaces() {
        assert_eq!(
            pre_strs(b"a  b"),
            vec![b"a".to_vec(), b" ".to_vec(), b" b".to_vec()]
        );
    }

    #[test]
    fn pretokenize_digits_stay_whole() {
        assert_eq!(pre_strs(b"9481"), vec![b"9481".to_vec()]);
        assert_eq!(
            pre_strs(b"x86_64"),
            vec![b"x".to_vec(), b"86".to_vec(), b"_".to_vec(), b"64".to_vec()]
        );
    }

    #[test]
    fn pretokenize_invalid_utf8_passes_through() {
        let input = [0xff, 0xfe, b'a', b'b'];
        assert_eq!(
            pre_strs(&input),
            vec![vec![0xff, 0xfe], b"ab".to_vec()]
        );
    }

    #[test]
    fn pretokenize_empty() {
        assert!(pretokenize(b"").is_empty());
    }

    #[test]
    fn pretokenize_concatenation_recovers_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..200 {
            let len = rng.random_range(0..60);
            let bytes: Vec<u8> = (0..len).map(|_| rng.random()).collect();
            let joined: Vec<u8> = pretokenize(&bytes).concat();
            assert_eq!(joined, bytes);
        }
    }

    #[test]
    fn first_merge_on_abab() {
        // "abab abab" pairs within pre-tokens: (a,b) 4 times, (b,a) twice,
        // (space,a) once; the first merge must be (a,b).
        let (tok, stats) = Tokenizer::train_with_stats(["abab abab"], 1);
        assert_eq!(tok.merges, vec![(b'a' as u32, b'b' as u32)]);
        assert_eq!(stats.initial_tokens, 9);
        assert_eq!(stats.tokens_after_merge, vec![5]);
    }

    #[test]
    fn tie_break_prefers_lower_pair() {
        // (a,b) and (x,y) both occur twice; (a,b) is the smaller pair.
        let tok = Tokenizer::train(["xy", "ab", "xy", "ab"], 1);
        assert_eq!(tok.merges, vec![(b'a' as u32, b'b' as u32)]);
        // Same corpus, reversed presentation order: identical result.
        let tok2 = Tokenizer::train(["ab", "xy", "ab", "xy"], 1);
        assert_eq!(tok2.merges, tok.merges);
    }

    #[test]
    fn empty_corpus_trains_zero_merges() {
        let tok = Tokenizer::train(std::iter::empty::<&str>(), 50);
        assert_eq!(tok.n_merges(), 0);
        assert_eq!(tok.vocab_size(), 258);
    }

    #[test]
    fn training_is_deterministic() {
        let corpus = ["the cat sat on the mat", "the bat and the rat", "mat cat"];
        let a = Tokenizer::train(corpus, 40);
        let b = Tokenizer::train(corpus, 40);
        assert_eq!(a.merges, b.merges);
    }

    #[test]
    fn compression_is_monotone() {
        let corpus = [
            "das ist ein langer satz mit ein paar wiederholungen",
            "ein satz und noch ein satz mit wiederholungen",
            "langer langer satz",
        ];
        let (_, stats) = Tokenizer::train_with_stats(corpus, 60);
        let mut prev = stats.initial_tokens;
        for &after in &stats.tokens_after_merge {
            assert!(after <= prev, "{after} > {prev}");
            prev = after;
        }
    }

    #[test]
    fn merged_token_bytes_are_parent_concatenation() {
        let tok = Tokenizer::train(["hello hello help helm"], 30);
        for (rank, &(l, r)) in tok.merges.iter().enumerate() {
            let mut expect = tok.vocab[l as usize].clone();
            expect.extend_from_slice(&tok.vocab[r as usize]);
            assert_eq!(tok.vocab[256 + rank], expect);
        }
        assert_eq!(tok.vocab_size(), 256 + tok.n_merges() + 2);
    }

    #[test]
    fn round_trip_on_multilingual_samples() {
        let tok = Tokenizer::train(["hello world", "многие языки", "מזל טוב"], 80);
        for s in [
            "hello world",
            "completely unseen text!",
            "многие языки мира",
            "日本語のテキスト",
            "emoji 🦀🧪 mixed, with 1234 numbers",
            "מזל טוב",
            "",
            "   leading and trailing   ",
        ] {
            let ids = tok.encode(s.as_bytes());
            assert_eq!(tok.decode(&ids).unwrap(), s.as_bytes());
        }
    }

    #[test]
    fn round_trip_fuzzed_bytes() {
        let tok = Tokenizer::train(["some training text satz wiederholungen"], 64);
        let mut rng = ChaCha8Rng::seed_from_u64(4242);
        for _ in 0..500 {
            let len = rng.random_range(0..48);
            let bytes: Vec<u8> = (0..len).map(|_| rng.random()).collect();
            let ids = tok.encode(&bytes);
            assert_eq!(tok.decode(&ids).unwrap(), bytes);
        }
    }

    proptest! {
        #[test]
        fn round_trip_property(bytes in proptest::collection::vec(any::<u8>(), 0..64)) {
            let tok = Tokenizer::train(["abc abd abe 12 345"], 16);
            let ids = tok.encode(&bytes);
            prop_assert_eq!(tok.decode(&ids).unwrap(), bytes);
        }
    }

    #[test]
    fn specials_are_never_emitted_by_encode() {
        let tok = Tokenizer::train([EOD_TOKEN, EOD_TOKEN, "other text"], 32);
        let ids = tok.encode(EOD_TOKEN.as_bytes());
        assert!(ids.iter().all(|&id| id < tok.eod_id()));
        assert_eq!(tok.decode(&ids).unwrap(), EOD_TOKEN.as_bytes());
        assert_eq!(tok.decode(&[tok.eod_id()]).unwrap(), b"");
    }

    #[test]
    fn decode_rejects_out_of_range() {
        let tok = Tokenizer::byte_level();
        assert!(tok.decode(&[tok.pad_id() + 1]).is_err());
    }

    #[test]
    fn save_load_round_trip() {
        let tok = Tokenizer::train(["roundtrip содержимое 123 !!", "more text here"], 50);
        let mut buf = Vec::new();
        tok.to_writer(&mut buf).unwrap();
        let loaded = Tokenizer::from_str_contents(std::str::from_utf8(&buf).unwrap()).unwrap();
        assert_eq!(loaded.merges, tok.merges);
        for s in ["roundtrip text", "много 123", "unseen!"] {
            assert_eq!(loaded.encode(s.as_bytes()), tok.encode(s.as_bytes()));
        }
        let mut buf2 = Vec::new();
        loaded.to_writer(&mut buf2).unwrap();
        assert_eq!(buf, buf2);
    }

    #[test]
    fn load_rejects_bad_header() {
        assert!(Tokenizer::from_str_contents("bogus v9\n").is_err());
    }

    #[test]
    fn load_rejects_unknown_parent() {
        let contents = format!("{FORMAT_VERSION}\n6162 63\nspecial {EOD_TOKEN}\nspecial {PAD_TOKEN}\n");
        assert!(Tokenizer::from_str_contents(&contents).is_err());
    }

    #[test]
    fn fertility_on_byte_tokenizer() {
        let tok = Tokenizer::byte_level();
        let report = fertility(&tok, [("en", "aa bb")]);
        let e = &report.per_lang["en"];
        assert_eq!((e.tokens, e.words), (5, 2));
        assert_eq!(e.fertility, Some(2.5));
    }

    #[test]
    fn fertility_zero_words_is_undefined() {
        let tok = Tokenizer::byte_level();
        let report = fertility(&tok, [("xx", "")]);
        assert_eq!(report.per_lang["xx"].fertility, None);
        let mut csv = Vec::new();
        report.write_csv(&mut csv).unwrap();
        let text = String::from_utf8(csv).unwrap();
        assert!(text.contains("xx,0,0,"));
        assert!(text.starts_with('#'));
    }
}
