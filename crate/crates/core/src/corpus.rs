//! Parallel corpora: paired line files, TSV, and deterministic synthetic toy tasks.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Language tags used by the synthetic corpora.
pub const SYNTH_SOURCE_LANG: &str = "src";
pub const SYNTH_TARGET_LANG: &str = "tgt";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "valid" => Ok(Split::Valid),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SentencePair {
    pub source: String,
    pub target: String,
    pub source_lang: String,
    pub target_lang: String,
}

impl SentencePair {
    /// Builds a pair after checking that both sides are nonempty and the
    /// language tags are distinct, nonempty ASCII.
    pub fn new(
        source: impl Into<String>,
        target: impl Into<String>,
        source_lang: impl Into<String>,
        target_lang: impl Into<String>,
    ) -> Result<Self> {
        let pair = SentencePair {
            source: source.into(),
            target: target.into(),
            source_lang: source_lang.into(),
            target_lang: target_lang.into(),
        };
        if pair.source.trim().is_empty() || pair.target.trim().is_empty() {
            return Err(Error::InvalidArgument(
                "sentence pair has an empty side".into(),
            ));
        }
        check_lang_pair(&pair.source_lang, &pair.target_lang)?;
        Ok(pair)
    }
}

fn check_lang_pair(source_lang: &str, target_lang: &str) -> Result<()> {
    for tag in [source_lang, target_lang] {
        if tag.is_empty() || !tag.is_ascii() || tag.chars().any(char::is_whitespace) {
            return Err(Error::InvalidArgument(format!(
                "language tag {tag:?} must be nonempty ASCII without whitespace"
            )));
        }
    }
    if source_lang == target_lang {
        return Err(Error::InvalidArgument(format!(
            "source and target language are both {source_lang:?}"
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParallelCorpus {
    pub pairs: Vec<SentencePair>,
    pub split: Split,
    /// Line pairs dropped at load time because one side was blank.
    pub n_dropped: usize,
}

/// Summary emitted by `prepare`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub split: Split,
    pub n_pairs: usize,
    pub n_dropped: usize,
    pub src_tokens: usize,
    pub tgt_tokens: usize,
}

impl ParallelCorpus {
    pub fn new(pairs: Vec<SentencePair>, split: Split) -> Result<Self> {
        if let Some(first) = pairs.first() {
            let langs = (&first.source_lang, &first.target_lang);
            if let Some(bad) = pairs
                .iter()
                .position(|p| (&p.source_lang, &p.target_lang) != langs)
            {
                return Err(Error::InvalidArgument(format!(
                    "pair {bad} has languages ({}, {}), corpus is ({}, {})",
                    pairs[bad].source_lang, pairs[bad].target_lang, langs.0, langs.1
                )));
            }
        }
        Ok(ParallelCorpus {
            pairs,
            split,
            n_dropped: 0,
        })
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// `(source_lang, target_lang)`, or `None` for an empty corpus.
    pub fn languages(&self) -> Option<(&str, &str)> {
        self.pairs
            .first()
            .map(|p| (p.source_lang.as_str(), p.target_lang.as_str()))
    }

    pub fn stats(&self) -> CorpusStats {
        let count = |s: &str| s.split_whitespace().count();
        CorpusStats {
            split: self.split,
            n_pairs: self.pairs.len(),
            n_dropped: self.n_dropped,
            src_tokens: self.pairs.iter().map(|p| count(&p.source)).sum(),
            tgt_tokens: self.pairs.iter().map(|p| count(&p.target)).sum(),
        }
    }

    /// Splits off the last `n` pairs as a new corpus with the given split tag.
    pub fn split_off(&mut self, n: usize, split: Split) -> ParallelCorpus {
        let at = self.pairs.len().saturating_sub(n);
        ParallelCorpus {
            pairs: self.pairs.split_off(at),
            split,
            n_dropped: 0,
        }
    }

    /// Writes `{prefix}.{source_lang}` and `{prefix}.{target_lang}`.
    pub fn save(&self, prefix: &Path) -> Result<(PathBuf, PathBuf)> {
        let (src_lang, tgt_lang) = self
            .languages()
            .ok_or_else(|| Error::InvalidArgument("cannot save an empty corpus".into()))?;
        let src_path = with_lang_suffix(prefix, src_lang);
        let tgt_path = with_lang_suffix(prefix, tgt_lang);
        let mut src = String::new();
        let mut tgt = String::new();
        for pair in &self.pairs {
            src.push_str(&pair.source);
            src.push('\n');
            tgt.push_str(&pair.target);
            tgt.push('\n');
        }
        fs::write(&src_path, src).map_err(|e| Error::io(&src_path, e))?;
        fs::write(&tgt_path, tgt).map_err(|e| Error::io(&tgt_path, e))?;
        Ok((src_path, tgt_path))
    }
}

/// `{prefix}.{lang}`, keeping any dots already in the prefix.
pub fn with_lang_suffix(prefix: &Path, lang: &str) -> PathBuf {
    let mut name = prefix.as_os_str().to_owned();
    name.push(".");
    name.push(lang);
    PathBuf::from(name)
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut lines = Vec::new();
    let mut body: &[u8] = &bytes;
    if let Some(stripped) = body.strip_suffix(b"\n") {
        body = stripped;
    }
    if bytes.is_empty() {
        return Ok(lines);
    }
    for (i, raw) in body.split(|&b| b == b'\n').enumerate() {
        let raw = raw.strip_suffix(b"\r").unwrap_or(raw);
        let line = std::str::from_utf8(raw).map_err(|_| Error::Encoding {
            path: path.to_path_buf(),
            line: i + 1,
        })?;
        lines.push(line.to_string());
    }
    Ok(lines)
}

/// Loads a paired line-file corpus. Line `i` of each file forms pair `i`;
/// pairs with a blank side are dropped and counted in `n_dropped`.
pub fn load_parallel(
    source_path: &Path,
    target_path: &Path,
    source_lang: &str,
    target_lang: &str,
    split: Split,
) -> Result<ParallelCorpus> {
    check_lang_pair(source_lang, target_lang)?;
    let (src, tgt) = std::thread::scope(|s| {
        let src = s.spawn(|| read_lines(source_path));
        let tgt = read_lines(target_path);
        (src.join().expect("reader thread panicked"), tgt)
    });
    let (src, tgt) = (src?, tgt?);
    if src.len() != tgt.len() {
        return Err(Error::Alignment {
            source_lines: src.len(),
            target_lines: tgt.len(),
        });
    }
    build_corpus(src.into_iter().zip(tgt), source_lang, target_lang, split)
}

/// Loads a `source<TAB>target` file into the same corpus type.
pub fn load_tsv(
    path: &Path,
    source_lang: &str,
    target_lang: &str,
    split: Split,
) -> Result<ParallelCorpus> {
    check_lang_pair(source_lang, target_lang)?;
    let mut rows = Vec::new();
    for (i, line) in read_lines(path)?.into_iter().enumerate() {
        match line.split_once('\t') {
            Some((s, t)) => rows.push((s.to_string(), t.to_string())),
            None if line.trim().is_empty() => rows.push((String::new(), String::new())),
            None => {
                return Err(Error::InvalidArgument(format!(
                    "{} line {}: expected source<TAB>target",
                    path.display(),
                    i + 1
                )))
            }
        }
    }
    build_corpus(rows.into_iter(), source_lang, target_lang, split)
}

fn build_corpus(
    rows: impl Iterator<Item = (String, String)>,
    source_lang: &str,
    target_lang: &str,
    split: Split,
) -> Result<ParallelCorpus> {
    let mut pairs = Vec::new();
    let mut n_dropped = 0;
    for (source, target) in rows {
        if source.trim().is_empty() || target.trim().is_empty() {
            n_dropped += 1;
            continue;
        }
        pairs.push(SentencePair {
            source,
            target,
            source_lang: source_lang.to_string(),
            target_lang: target_lang.to_string(),
        });
    }
    Ok(ParallelCorpus {
        pairs,
        split,
        n_dropped,
    })
}

/// Name of the `i`-th symbol of a synthetic alphabet.
pub fn symbol_name(i: usize) -> String {
    if i < 26 {
        char::from(b'a' + i as u8).to_string()
    } else {
        format!("s{i}")
    }
}

fn check_lengths(min_len: usize, max_len: usize) -> Result<()> {
    if min_len == 0 || min_len > max_len {
        return Err(Error::InvalidArgument(format!(
            "need 1 <= min_len <= max_len, got {min_len}..{max_len}"
        )));
    }
    Ok(())
}

/// Copy task: the target repeats the source. Token and length draws are uniform.
pub fn synth_copy_corpus(
    n_pairs: usize,
    min_len: usize,
    max_len: usize,
    alphabet_size: usize,
    seed: u64,
) -> Result<ParallelCorpus> {
    check_lengths(min_len, max_len)?;
    if alphabet_size < 2 {
        return Err(Error::InvalidArgument(format!(
            "alphabet_size must be at least 2, got {alphabet_size}"
        )));
    }
    let alphabet: Vec<String> = (0..alphabet_size).map(symbol_name).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pairs = (0..n_pairs)
        .map(|_| {
            let len = rng.random_range(min_len..=max_len);
            let words: Vec<&str> = (0..len)
                .map(|_| alphabet[rng.random_range(0..alphabet_size)].as_str())
                .collect();
            let text = words.join(" ");
            SentencePair {
                source: text.clone(),
                target: text,
                source_lang: SYNTH_SOURCE_LANG.into(),
                target_lang: SYNTH_TARGET_LANG.into(),
            }
        })
        .collect();
    Ok(ParallelCorpus {
        pairs,
        split: Split::Train,
        n_dropped: 0,
    })
}

/// An injective token substitution table, kept in insertion order so that
/// sampling from it is deterministic.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MappingTable {
    entries: Vec<(String, String)>,
}

impl MappingTable {
    pub fn new(entries: Vec<(String, String)>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::InvalidArgument("mapping table is empty".into()));
        }
        let mut seen_src = std::collections::HashSet::new();
        let mut seen_tgt = std::collections::HashSet::new();
        for (s, t) in &entries {
            for tok in [s, t] {
                if tok.is_empty() || tok.chars().any(char::is_whitespace) {
                    return Err(Error::InvalidArgument(format!(
                        "mapping token {tok:?} must be a single nonempty word"
                    )));
                }
            }
            if !seen_src.insert(s.as_str()) {
                return Err(Error::InvalidArgument(format!(
                    "mapping has duplicate source {s:?}"
                )));
            }
            if !seen_tgt.insert(t.as_str()) {
                return Err(Error::InvalidArgument(format!(
                    "mapping is not injective: {t:?} has several preimages"
                )));
            }
        }
        Ok(MappingTable { entries })
    }

    /// Digits to English number words.
    pub fn digits_to_words() -> Self {
        const WORDS: [&str; 10] = [
            "zero", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine",
        ];
        let entries = WORDS
            .iter()
            .enumerate()
            .map(|(d, w)| (d.to_string(), w.to_string()))
            .collect();
        MappingTable { entries }
    }

    pub fn entries(&self) -> &[(String, String)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, source: &str) -> Option<&str> {
        self.entries
            .iter()
            .find(|(s, _)| s == source)
            .map(|(_, t)| t.as_str())
    }

    /// Maps a whitespace-tokenized sentence, or `None` if a token is outside the domain.
    pub fn apply(&self, sentence: &str) -> Option<String> {
        let mapped: Option<Vec<&str>> = sentence.split_whitespace().map(|w| self.get(w)).collect();
        mapped.map(|m| m.join(" "))
    }
}

/// Toy translation: the target is the tokenwise image of the source, so `|Y| = |X|`.
pub fn synth_mapping_corpus(
    n_pairs: usize,
    mapping: &MappingTable,
    min_len: usize,
    max_len: usize,
    seed: u64,
) -> Result<ParallelCorpus> {
    check_lengths(min_len, max_len)?;
    let entries = mapping.entries();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pairs = (0..n_pairs)
        .map(|_| {
            let len = rng.random_range(min_len..=max_len);
            let picks: Vec<usize> = (0..len).map(|_| rng.random_range(0..entries.len())).collect();
            let source: Vec<&str> = picks.iter().map(|&i| entries[i].0.as_str()).collect();
            let target: Vec<&str> = picks.iter().map(|&i| entries[i].1.as_str()).collect();
            SentencePair {
                source: source.join(" "),
                target: target.join(" "),
                source_lang: SYNTH_SOURCE_LANG.into(),
                target_lang: SYNTH_TARGET_LANG.into(),
            }
        })
        .collect();
    Ok(ParallelCorpus {
        pairs,
        split: Split::Train,
        n_dropped: 0,
    })
}
