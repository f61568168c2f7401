use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::corpus::ParallelCorpus;
use crate::{Error, Result};

/// Appended to the last symbol of every word.
pub const END_OF_WORD: &str = "</w>";

const MERGES_HEADER: &str = "#version: 0.2";

/// Ordered merge rules. Earlier merges have higher priority.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BpeModel {
    merges: Vec<(String, String)>,
    marker: String,
    ranks: HashMap<(String, String), usize>,
}

impl Default for BpeModel {
    fn default() -> Self {
        BpeModel::from_merges(Vec::new()).expect("empty merge list is valid")
    }
}

impl BpeModel {
    pub fn from_merges(merges: Vec<(String, String)>) -> Result<Self> {
        let mut ranks = HashMap::with_capacity(merges.len());
        for (rank, pair) in merges.iter().enumerate() {
            if ranks.insert(pair.clone(), rank).is_some() {
                return Err(Error::InvalidArgument(format!(
                    "duplicate merge {} {}",
                    pair.0, pair.1
                )));
            }
        }
        Ok(BpeModel {
            merges,
            marker: END_OF_WORD.to_string(),
            ranks,
        })
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    pub fn marker(&self) -> &str {
        &self.marker
    }

    /// Initial symbols of a word: its characters, the last one carrying the marker.
    fn word_symbols(&self, word: &str) -> Vec<String> {
        let mut symbols: Vec<String> = word.chars().map(String::from).collect();
        if let Some(last) = symbols.last_mut() {
            last.push_str(&self.marker);
        }
        symbols
    }

    pub fn encode_word(&self, word: &str) -> Vec<String> {
        let mut symbols = self.word_symbols(word);
        loop {
            let best = symbols
                .windows(2)
                .enumerate()
                .filter_map(|(i, w)| {
                    self.ranks
                        .get(&(w[0].clone(), w[1].clone()))
                        .map(|&rank| (rank, i))
                })
                .min();
            let Some((rank, _)) = best else { break };
            let (left, right) = &self.merges[rank];
            let mut merged = Vec::with_capacity(symbols.len());
            let mut i = 0;
            while i < symbols.len() {
                if i + 1 < symbols.len() && &symbols[i] == left && &symbols[i + 1] == right {
                    merged.push(format!("{left}{right}"));
                    i += 2;
                } else {
                    merged.push(std::mem::take(&mut symbols[i]));
                    i += 1;
                }
            }
            symbols = merged;
        }
        symbols
    }

    /// Whitespace pre-tokenization followed by per-word merging.
    pub fn encode(&self, text: &str) -> Vec<String> {
        text.split_whitespace()
            .flat_map(|w| self.encode_word(w))
            .collect()
    }

    pub fn to_merges_text(&self) -> String {
        let mut out = String::from(MERGES_HEADER);
        out.push('\n');
        for (l, r) in &self.merges {
            out.push_str(l);
            out.push(' ');
            out.push_str(r);
            out.push('\n');
        }
        out
    }

    pub fn from_merges_text(text: &str) -> Result<Self> {
        let mut merges = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.starts_with("#version") || line.is_empty() {
                continue;
            }
            let mut parts = line.split(' ');
            match (parts.next(), parts.next(), parts.next()) {
                (Some(l), Some(r), None) if !l.is_empty() && !r.is_empty() => {
                    merges.push((l.to_string(), r.to_string()))
                }
                _ => {
                    return Err(Error::InvalidArgument(format!(
                        "merge file line {}: expected \"left right\"",
                        i + 1
                    )))
                }
            }
        }
        BpeModel::from_merges(merges)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_merges_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_merges_text(&text)
    }
}

/// Joins subwords back into whitespace-separated words using the end-of-word marker.
pub fn detokenize<S: AsRef<str>>(subwords: &[S]) -> String {
    let mut out = String::new();
    let mut pending = false;
    for sw in subwords {
        let sw = sw.as_ref();
        match sw.strip_suffix(END_OF_WORD) {
            Some(stem) => {
                out.push_str(stem);
                out.push(' ');
                pending = false;
            }
            None => {
                out.push_str(sw);
                pending = true;
            }
        }
    }
    if !pending && out.ends_with(' ') {
        out.pop();
    }
    out
}

/// Learns merges over source and target text jointly.
///
/// Each round merges the most frequent adjacent pair; ties go to the
/// lexicographically smallest `(left, right)`. Training stops early once no
/// word has two symbols left.
pub fn bpe_train(corpora: &[&ParallelCorpus], n_merges: usize) -> Result<BpeModel> {
    if corpora.is_empty() {
        return Err(Error::InvalidArgument("bpe_train needs at least one corpus".into()));
    }

    let base = BpeModel::default();
    let mut symbols: Vec<String> = Vec::new();
    let mut symbol_ids: HashMap<String, u32> = HashMap::new();
    let mut intern = |s: String, symbols: &mut Vec<String>| -> u32 {
        *symbol_ids.entry(s.clone()).or_insert_with(|| {
            symbols.push(s);
            (symbols.len() - 1) as u32
        })
    };

    // Word types in first-seen order with their frequencies.
    let mut word_index: HashMap<&str, usize> = HashMap::new();
    let mut words: Vec<(Vec<u32>, usize)> = Vec::new();
    for corpus in corpora {
        for pair in &corpus.pairs {
            for text in [&pair.source, &pair.target] {
                for w in text.split_whitespace() {
                    match word_index.get(w) {
                        Some(&i) => words[i].1 += 1,
                        None => {
                            let ids = base
                                .word_symbols(w)
                                .into_iter()
                                .map(|s| intern(s, &mut symbols))
                                .collect();
                            word_index.insert(w, words.len());
                            words.push((ids, 1));
                        }
                    }
                }
            }
        }
    }

    let mut merges = Vec::with_capacity(n_merges);
    for _ in 0..n_merges {
        let mut counts: HashMap<(u32, u32), usize> = HashMap::new();
        for (ids, freq) in &words {
            for w in ids.windows(2) {
                *counts.entry((w[0], w[1])).or_default() += freq;
            }
        }
        let best = counts.into_iter().max_by(|(pa, ca), (pb, cb)| {
            ca.cmp(cb).then_with(|| {
                let ka = (&symbols[pa.0 as usize], &symbols[pa.1 as usize]);
                let kb = (&symbols[pb.0 as usize], &symbols[pb.1 as usize]);
                kb.cmp(&ka)
            })
        });
        let Some(((l, r), _)) = best else { break };
        let left = symbols[l as usize].clone();
        let right = symbols[r as usize].clone();
        let new_id = intern(format!("{left}{right}"), &mut symbols);
        for (ids, _) in words.iter_mut() {
            if ids.len() < 2 {
                continue;
            }
            let mut out = Vec::with_capacity(ids.len());
            let mut i = 0;
            while i < ids.len() {
                if i + 1 < ids.len() && ids[i] == l && ids[i + 1] == r {
                    out.push(new_id);
                    i += 2;
                } else {
                    out.push(ids[i]);
                    i += 1;
                }
            }
            *ids = out;
        }
        merges.push((left, right));
    }
    BpeModel::from_merges(merges)
}
