//! Corpus handling: document and parallel-corpus loading, the pre-training
//! language registry, and deterministic synthetic fixtures.
//!
//! Documents are newline-delimited JSON records `{"lang": ..., "text": ...}`.
//! Parallel corpora are TSV with a header row of language codes; row `i`
//! holds aligned sentences across all columns. Cells must not contain tabs
//! or newlines.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsio;

/// One pre-training language: ISO code, English name, language family.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LanguageInfo {
    pub code: &'static str,
    pub name: &'static str,
    pub family: &'static str,
}

macro_rules! langs {
    ($(($code:literal, $name:literal, $family:literal)),* $(,)?) => {
        &[$(LanguageInfo { code: $code, name: $name, family: $family }),*]
    };
}

/// The 43 pre-training languages. Family labels follow the model card as
/// published (including Hungarian under Indo-European).
pub const LANGUAGE_REGISTRY: &[LanguageInfo] = langs![
    ("ar", "Arabic", "Afro-Asiatic"),
    ("bg", "Bulgarian", "Indo-European"),
    ("bn", "Bengali", "Indo-European"),
    ("ca", "Catalan", "Indo-European"),
    ("cs", "Czech", "Indo-European"),
    ("de", "German", "Indo-European"),
    ("el", "Greek", "Indo-European"),
    ("en", "English", "Indo-European"),
    ("es", "Spanish", "Indo-European"),
    ("fa", "Persian", "Indo-European"),
    ("fi", "Finnish", "Uralic"),
    ("fr", "French", "Indo-European"),
    ("he", "Hebrew", "Afro-Asiatic"),
    ("hi", "Hindi", "Indo-European"),
    ("hu", "Hungarian", "Indo-European"),
    ("id", "Indonesian", "Austronesian"),
    ("it", "Italian", "Indo-European"),
    ("ja", "Japanese", "Japanic"),
    ("kk", "Kazakh", "Turkic"),
    ("km", "Khmer", "Austroasiatic"),
    ("ko", "Korean", "Koreanic"),
    ("ku", "Kurdish", "Indo-European"),
    ("ky", "Kyrgyz", "Turkic"),
    ("lo", "Lao", "Kra-Dai"),
    ("ms", "Malay", "Austronesian"),
    ("my", "Burmese", "Sino-Tibetan"),
    ("nl", "Dutch", "Indo-European"),
    ("pl", "Polish", "Indo-European"),
    ("pt", "Portuguese", "Indo-European"),
    ("ro", "Romanian", "Indo-European"),
    ("ru", "Russian", "Indo-European"),
    ("sv", "Swedish", "Indo-European"),
    ("ta", "Tamil", "Dravidian"),
    ("tg", "Tajik", "Indo-European"),
    ("th", "Thai", "Kra-Dai"),
    ("tk", "Turkmen", "Turkic"),
    ("tl", "Filipino", "Austronesian"),
    ("tr", "Turkish", "Turkic"),
    ("uk", "Ukrainian", "Indo-European"),
    ("ur", "Urdu", "Indo-European"),
    ("uz", "Uzbek", "Turkic"),
    ("vi", "Vietnamese", "Austroasiatic"),
    ("zh", "Chinese", "Sino-Tibetan"),
];

pub fn language_registry() -> &'static [LanguageInfo] {
    LANGUAGE_REGISTRY
}

pub fn language_info(code: &str) -> Option<&'static LanguageInfo> {
    LANGUAGE_REGISTRY
        .binary_search_by(|l| l.code.cmp(code))
        .ok()
        .map(|i| &LANGUAGE_REGISTRY[i])
}

/// One training document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Document {
    pub lang: String,
    pub text: String,
}

/// Load newline-delimited JSON documents. Every `lang` must be a registry
/// code; evaluation-only languages do not belong in training corpora.
pub fn load_documents(path: &Path) -> Result<Vec<Document>> {
    let contents = fsio::read_to_string(path)?;
    parse_documents(&contents)
}

pub fn parse_documents(contents: &str) -> Result<Vec<Document>> {
    let mut docs = Vec::new();
    for (idx, line) in contents.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let doc: Document = serde_json::from_str(line).map_err(|e| Error::Parse {
            line: idx + 1,
            msg: e.to_string(),
        })?;
        if language_info(&doc.lang).is_none() {
            return Err(Error::UnknownLanguage(doc.lang));
        }
        docs.push(doc);
    }
    Ok(docs)
}

pub fn write_documents(path: &Path, docs: &[Document]) -> Result<()> {
    fsio::atomic_write_with(path, |w| {
        for doc in docs {
            let line = serde_json::to_string(doc)
                .map_err(|e| Error::InvalidInput(format!("unencodable document: {e}")))?;
            writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
        }
        Ok(())
    })
}

/// Row-aligned sentences across a fixed set of languages, in declared column
/// order. Column order is preserved end to end; downstream reports follow it.
#[derive(Debug, Clone, PartialEq)]
pub struct ParallelCorpus {
    languages: Vec<String>,
    /// `rows[i][j]` is row `i` in language `languages[j]`.
    rows: Vec<Vec<String>>,
}

impl ParallelCorpus {
    pub fn new(languages: Vec<String>, rows: Vec<Vec<String>>) -> Result<ParallelCorpus> {
        let mut seen = HashMap::new();
        for (j, lang) in languages.iter().enumerate() {
            if seen.insert(lang.clone(), j).is_some() {
                return Err(Error::InvalidInput(format!("duplicate column {lang:?}")));
            }
        }
        for (i, row) in rows.iter().enumerate() {
            if row.len() != languages.len() {
                return Err(Error::Parse {
                    line: i + 2,
                    msg: format!("row has {} cells, expected {}", row.len(), languages.len()),
                });
            }
        }
        Ok(ParallelCorpus { languages, rows })
    }

    pub fn languages(&self) -> &[String] {
        &self.languages
    }

    pub fn n_rows(&self) -> usize {
        self.rows.len()
    }

    /// All sentences of one language, in row order.
    pub fn column(&self, lang: &str) -> Result<Vec<&str>> {
        let j = self
            .languages
            .iter()
            .position(|l| l == lang)
            .ok_or_else(|| Error::InvalidInput(format!("no column for language {lang:?}")))?;
        Ok(self.rows.iter().map(|r| r[j].as_str()).collect())
    }

    /// (lang, sentence) pairs over every cell, column-major.
    pub fn lang_texts(&self) -> impl Iterator<Item = (&str, &str)> {
        self.languages.iter().enumerate().flat_map(move |(j, lang)| {
            self.rows
                .iter()
                .map(move |row| (lang.as_str(), row[j].as_str()))
        })
    }

    /// Corpus restricted to the first `n` rows.
    pub fn take_rows(&self, n: usize) -> ParallelCorpus {
        ParallelCorpus {
            languages: self.languages.clone(),
            rows: self.rows.iter().take(n).cloned().collect(),
        }
    }

    pub fn write_tsv(&self, path: &Path) -> Result<()> {
        fsio::atomic_write_with(path, |w| {
            let io = |e| Error::io(path, e);
            writeln!(w, "{}", self.languages.join("\t")).map_err(io)?;
            for row in &self.rows {
                writeln!(w, "{}", row.join("\t")).map_err(io)?;
            }
            Ok(())
        })
    }
}

/// Load a TSV parallel corpus: header of language codes, one aligned row per
/// line. Evaluation sets may include languages beyond the registry.
pub fn load_parallel(path: &Path) -> Result<ParallelCorpus> {
    parse_parallel(&fsio::read_to_string(path)?)
}

pub fn parse_parallel(contents: &str) -> Result<ParallelCorpus> {
    let mut lines = contents.lines();
    let header = lines.next().ok_or(Error::Parse {
        line: 1,
        msg: "empty file, expected language-code header".into(),
    })?;
    let languages: Vec<String> = header.split('\t').map(str::to_string).collect();
    if languages.iter().any(|l| l.is_empty()) {
        return Err(Error::Parse {
            line: 1,
            msg: "empty language code in header".into(),
        });
    }
    let mut rows = Vec::new();
    for (idx, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let cells: Vec<String> = line.split('\t').map(str::to_string).collect();
        if cells.len() != languages.len() {
            return Err(Error::Parse {
                line: idx + 2,
                msg: format!("row has {} cells, expected {}", cells.len(), languages.len()),
            });
        }
        rows.push(cells);
    }
    ParallelCorpus::new(languages, rows)
}

pub mod synth {
    //! Synthetic text from per-language character n-gram templates.
    //!
    //! Each language owns a small inventory of script-typical syllables;
    //! words are short syllable chains, sentences short word chains. The
    //! output is gibberish with the right script, byte statistics, and word
    //! geometry, which is all the fixtures need. Generation is a pure
    //! function of (seed, language, index).

    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::{Document, ParallelCorpus};
    use crate::error::{Error, Result};

    struct Template {
        syllables: &'static [&'static str],
        /// Between words; empty for scripts written without spaces.
        word_sep: &'static str,
        sentence_end: &'static str,
        max_syllables: usize,
    }

    fn template(lang: &str) -> Option<Template> {
        let (syllables, word_sep, sentence_end, max_syllables): (
            &'static [&'static str],
            &str,
            &str,
            usize,
        ) = match lang {
            "en" => (
                &["lan", "ter", "son", "win", "ber", "ful", "light", "stone",
                  "mor", "den", "ing", "ward", "el", "fen", "ross", "hale"],
                " ", ".", 3,
            ),
            "de" => (
                &["schn", "berg", "hof", "ung", "klein", "stein", "bach", "wald",
                  "schaft", "mann", "vor", "zeit", "gel", "brau", "icht", "uber"],
                " ", ".", 3,
            ),
            "es" => (
                &["cion", "mente", "ado", "ista", "illo", "par", "cosa", "lun",
                  "ver", "tierra", "mar", "sol", "niño", "aba", "ñez", "ero"],
                " ", ".", 3,
            ),
            "fr" => (
                &["eau", "oux", "ette", "tion", "mont", "champ", "vert", "feuille",
                  "ciel", "roi", "lune", "père", "être", "où", "çon", "ique"],
                " ", ".", 3,
            ),
            "it" => (
                &["zione", "ella", "etto", "ino", "cam", "por", "tera", "via",
                  "giorno", "notte", "mare", "monte", "però", "città", "gli", "sco"],
                " ", ".", 3,
            ),
            "pt" => (
                &["ção", "inho", "eira", "mento", "sol", "mar", "verde", "terra",
                  "água", "noite", "ão", "lho", "você", "até", "pão", "res"],
                " ", ".", 3,
            ),
            "hu" => (
                &["szág", "gyar", "ember", "föld", "víz", "kör", "hal", "ség",
                  "nyelv", "tűz", "ház", "út", "ősz", "gy", "ök", "alma"],
                " ", ".", 3,
            ),
            "sk" => (
                &["ová", "ček", "mesto", "voda", "hora", "deň", "čas", "svet",
                  "ľud", "ruka", "šte", "žena", "dom", "rok", "ý", "nie"],
                " ", ".", 3,
            ),
            "id" => (
                &["kan", "ber", "me", "per", "an", "jalan", "makan", "rumah",
                  "air", "hari", "tanah", "orang", "besar", "kecil", "lah", "nya"],
                " ", ".", 3,
            ),
            "vi" => (
                &["trường", "phố", "nước", "người", "đường", "việt", "ngày", "đất",
                  "trời", "sông", "núi", "biển", "làng", "mưa", "gió", "hoa"],
                " ", ".", 2,
            ),
            // Mirrors the "en" inventory 1:1 by index, so the en/ru pair is
            // structurally isomorphic up to script; the bilingual training
            // fixtures rely on this to make cross-language structure
            // learnable at desk scale.
            "ru" => (
                &["лан", "тер", "сон", "вин", "бер", "фул", "лигт", "стон",
                  "мор", "ден", "инг", "вард", "ел", "фен", "росс", "хале"],
                " ", ".", 3,
            ),
            "ar" => (
                &["ال", "مد", "رس", "كتاب", "نور", "بحر", "جبل", "شمس",
                  "قمر", "بيت", "ماء", "نهر", "ورد", "سماء", "ين", "ها"],
                " ", ".", 3,
            ),
            "bn" => (
                &["বাং", "লা", "দেশ", "নদী", "পানি", "আকাশ", "মানুষ", "পাহাড়",
                  "ফুল", "বই", "গান", "আলো", "রাত", "দিন", "ঘর", "পথ"],
                " ", ".", 3,
            ),
            "ta" => (
                &["தமிழ்", "நாடு", "மலை", "கடல்", "நீர்", "ஊர்", "வீடு", "மழை",
                  "காடு", "பூ", "நிலா", "வானம்", "பாடல்", "ஒளி", "கல்", "வழி"],
                " ", ".", 2,
            ),
            "zh" => (
                &["山", "水", "人", "天", "地", "中", "国", "语",
                  "言", "文", "学", "大", "小", "日", "月", "光"],
                "", "。", 3,
            ),
            _ => return None,
        };
        Some(Template {
            syllables,
            word_sep,
            sentence_end,
            max_syllables,
        })
    }

    pub fn supported(lang: &str) -> bool {
        template(lang).is_some()
    }

    fn cell_rng(seed: u64, lang: &str, index: u64) -> ChaCha8Rng {
        // FNV-style fold so each (seed, lang, index) cell is independent.
        let mut h = seed ^ 0xcbf2_9ce4_8422_2325;
        for b in lang.bytes() {
            h = h.wrapping_mul(0x1000_0000_01b3) ^ b as u64;
        }
        h = h.wrapping_mul(0x1000_0000_01b3) ^ index;
        ChaCha8Rng::seed_from_u64(h)
    }

    fn sentence_with(tpl: &Template, rng: &mut ChaCha8Rng) -> String {
        let n_words = rng.random_range(4..=9);
        let mut out = String::new();
        for w in 0..n_words {
            if w > 0 {
                out.push_str(tpl.word_sep);
            }
            let n_syl = rng.random_range(1..=tpl.max_syllables);
            for _ in 0..n_syl {
                out.push_str(tpl.syllables[rng.random_range(0..tpl.syllables.len())]);
            }
        }
        out.push_str(tpl.sentence_end);
        out
    }

    /// One synthetic sentence; pure in (seed, lang, index).
    pub fn sentence(lang: &str, seed: u64, index: u64) -> Result<String> {
        let tpl = template(lang)
            .ok_or_else(|| Error::InvalidInput(format!("no synthesis template for {lang:?}")))?;
        Ok(sentence_with(&tpl, &mut cell_rng(seed, lang, index)))
    }

    /// Aligned synthetic corpus over `languages`, `rows` rows.
    pub fn parallel(languages: &[&str], rows: usize, seed: u64) -> Result<ParallelCorpus> {
        let mut out_rows = Vec::with_capacity(rows);
        for i in 0..rows {
            let mut row = Vec::with_capacity(languages.len());
            for lang in languages {
                row.push(sentence(lang, seed, i as u64)?);
            }
            out_rows.push(row);
        }
        ParallelCorpus::new(languages.iter().map(|s| s.to_string()).collect(), out_rows)
    }

    /// Synthetic documents of 1..=3 sentences each.
    pub fn documents(lang: &str, n_docs: usize, seed: u64) -> Result<Vec<Document>> {
        let tpl = template(lang)
            .ok_or_else(|| Error::InvalidInput(format!("no synthesis template for {lang:?}")))?;
        let mut docs = Vec::with_capacity(n_docs);
        for i in 0..n_docs {
            let mut rng = cell_rng(seed, lang, i as u64);
            let n_sent = rng.random_range(1..=3);
            let mut text = String::new();
            for s in 0..n_sent {
                if s > 0 && !tpl.word_sep.is_empty() {
                    text.push(' ');
                }
                text.push_str(&sentence_with(&tpl, &mut rng));
            }
            docs.push(Document {
                lang: lang.to_string(),
                text,
            });
        }
        Ok(docs)
    }

    /// Single-sentence documents; one synthetic sentence per index.
    pub fn sentence_documents(lang: &str, n_docs: usize, seed: u64) -> Result<Vec<Document>> {
        (0..n_docs)
            .map(|i| {
                Ok(Document {
                    lang: lang.to_string(),
                    text: sentence(lang, seed, i as u64)?,
                })
            })
            .collect()
    }

    /// Column order of the committed 15-language parallel fixture.
    pub const FIXTURE_LANGS: [&str; 15] = [
        "ar", "bn", "es", "fr", "id", "pt", "ta", "vi", "zh", "en", "de", "hu", "it", "ru", "sk",
    ];

    /// Content of `fixtures/parallel_15lang.tsv`.
    pub fn fixture_parallel() -> Result<ParallelCorpus> {
        parallel(&FIXTURE_LANGS, 96, 2024)
    }

    /// Content of `fixtures/train_latin.jsonl`: a Latin-script-dominant
    /// training corpus, sized so a 4000-merge tokenizer saturates on it.
    pub fn fixture_latin() -> Result<Vec<Document>> {
        let mut docs = Vec::new();
        for lang in ["en", "es", "fr", "de", "it", "pt"] {
            docs.extend(documents(lang, 400, 11)?);
        }
        Ok(docs)
    }

    /// Content of `fixtures/train_en_ru_balanced.jsonl`: a 50/50
    /// English/Russian mix by document count. Sentence-level documents:
    /// with no same-language continuation to predict past a sentence end,
    /// last-token states are free to stay language-neutral, which is what
    /// the data-balance experiment measures.
    pub fn fixture_balanced() -> Result<Vec<Document>> {
        let mut docs = sentence_documents("en", 300, 21)?;
        docs.extend(sentence_documents("ru", 300, 22)?);
        Ok(docs)
    }

    /// Content of `fixtures/train_en_ru_imbalanced.jsonl`: a 95/5 mix.
    /// Generation is per-index, so the English documents extend the
    /// balanced set and the Russian documents are a prefix of it; the two
    /// corpora differ only in the mix.
    pub fn fixture_imbalanced() -> Result<Vec<Document>> {
        let mut docs = sentence_documents("en", 570, 21)?;
        docs.extend(sentence_documents("ru", 30, 22)?);
        Ok(docs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn registry_has_43_sorted_unique_codes() {
        assert_eq!(LANGUAGE_REGISTRY.len(), 43);
        for pair in LANGUAGE_REGISTRY.windows(2) {
            assert!(pair[0].code < pair[1].code);
        }
    }

    #[test]
    fn registry_lookups() {
        let vi = language_info("vi").unwrap();
        assert_eq!((vi.name, vi.family), ("Vietnamese", "Austroasiatic"));
        let ta = language_info("ta").unwrap();
        assert_eq!((ta.name, ta.family), ("Tamil", "Dravidian"));
        assert!(language_info("xx").is_none());
        // Slovak appears in evaluation sets but not in pre-training.
        assert!(language_info("sk").is_none());
    }

    #[test]
    fn documents_round_trip() {
        let docs = vec![
            Document { lang: "en".into(), text: "hello there".into() },
            Document { lang: "zh".into(), text: "山水人".into() },
        ];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("docs.jsonl");
        write_documents(&path, &docs).unwrap();
        assert_eq!(load_documents(&path).unwrap(), docs);
    }

    #[test]
    fn documents_reject_unknown_language() {
        let err = parse_documents(r#"{"lang":"xx","text":"?"}"#).unwrap_err();
        assert!(matches!(err, Error::UnknownLanguage(code) if code == "xx"));
    }

    #[test]
    fn documents_parse_error_names_line() {
        let err = parse_documents("{\"lang\":\"en\",\"text\":\"ok\"}\nnot json").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }));
    }

    #[test]
    fn parallel_accepts_evaluation_languages() {
        let contents = "en\tsk\nhello\tahoj\n";
        let corpus = parse_parallel(contents).unwrap();
        assert_eq!(corpus.languages(), ["en", "sk"]);
        assert_eq!(corpus.column("sk").unwrap(), ["ahoj"]);
    }

    #[test]
    fn parallel_rejects_ragged_row() {
        let err = parse_parallel("en\tde\nhello\thallo\nonly-one-cell\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 3, .. }));
    }

    #[test]
    fn parallel_missing_column_is_an_error() {
        let corpus = parse_parallel("en\tde\nhello\thallo\n").unwrap();
        assert!(corpus.column("fr").is_err());
    }

    #[test]
    fn parallel_tsv_round_trip() {
        let corpus = synth::parallel(&["en", "ru", "zh"], 8, 7).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("par.tsv");
        corpus.write_tsv(&path).unwrap();
        assert_eq!(load_parallel(&path).unwrap(), corpus);
    }

    #[test]
    fn synth_is_deterministic_and_seed_sensitive() {
        let a = synth::parallel(&["en", "ta"], 5, 42).unwrap();
        let b = synth::parallel(&["en", "ta"], 5, 42).unwrap();
        let c = synth::parallel(&["en", "ta"], 5, 43).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn synth_scripts_look_right() {
        let row = synth::sentence("bn", 1, 0).unwrap();
        assert!(row.bytes().any(|b| b >= 0x80), "bengali should be non-ascii");
        let en = synth::sentence("en", 1, 0).unwrap();
        assert!(en.is_ascii());
        let zh = synth::sentence("zh", 1, 0).unwrap();
        assert_eq!(zh.split_whitespace().count(), 1, "no spaces in zh");
    }

    #[test]
    fn synth_documents_carry_language() {
        let docs = synth::documents("ru", 4, 9).unwrap();
        assert_eq!(docs.len(), 4);
        assert!(docs.iter().all(|d| d.lang == "ru" && !d.text.is_empty()));
    }
}
