use std::collections::HashMap;
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::bpe::{detokenize, BpeModel};
use crate::corpus::ParallelCorpus;
use crate::{Error, Result, TokenId};

/// Reserved tokens, in id order: pad, bos, eos, mask.
pub const SPECIAL_TOKENS: [&str; 4] = ["<pad>", "<s>", "</s>", "<mask>"];
pub const LANG_TOKEN_PREFIX: &str = "<lang:";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SpecialIds {
    pub pad: TokenId,
    pub bos: TokenId,
    pub eos: TokenId,
    pub mask: TokenId,
}

const SPECIALS: SpecialIds = SpecialIds {
    pad: 0,
    bos: 1,
    eos: 2,
    mask: 3,
};

/// Joint subword inventory. Ids are laid out as
/// `[specials | one id per language | subwords by descending frequency]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    id_of: HashMap<String, TokenId>,
    languages: Vec<String>,
}

fn lang_token(tag: &str) -> String {
    format!("{LANG_TOKEN_PREFIX}{tag}>")
}

impl Vocabulary {
    fn from_parts(languages: Vec<String>, subwords: Vec<String>) -> Result<Self> {
        let mut tokens: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
        tokens.extend(languages.iter().map(|l| lang_token(l)));
        tokens.extend(subwords);
        let mut id_of = HashMap::with_capacity(tokens.len());
        for (id, tok) in tokens.iter().enumerate() {
            if id_of.insert(tok.clone(), id as TokenId).is_some() {
                return Err(Error::InvalidArgument(format!(
                    "token {tok:?} appears twice in the vocabulary"
                )));
            }
        }
        Ok(Vocabulary {
            tokens,
            id_of,
            languages,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn specials(&self) -> SpecialIds {
        SPECIALS
    }

    pub fn mask_id(&self) -> TokenId {
        SPECIALS.mask
    }

    pub fn pad_id(&self) -> TokenId {
        SPECIALS.pad
    }

    pub fn languages(&self) -> &[String] {
        &self.languages
    }

    /// Token id reserved for a language tag.
    pub fn lang_id(&self, tag: &str) -> Option<TokenId> {
        self.lang_index(tag)
            .map(|i| (SPECIAL_TOKENS.len() + i) as TokenId)
    }

    /// Position of the language in the language table (the language-embedding row).
    pub fn lang_index(&self, tag: &str) -> Option<usize> {
        self.languages.iter().position(|l| l == tag)
    }

    /// First id after the special and language block.
    pub fn first_subword_id(&self) -> TokenId {
        (SPECIAL_TOKENS.len() + self.languages.len()) as TokenId
    }

    pub fn is_special(&self, id: TokenId) -> bool {
        id < self.first_subword_id()
    }

    /// Ids of every learned subword.
    pub fn subword_ids(&self) -> Vec<TokenId> {
        (self.first_subword_id()..self.tokens.len() as TokenId).collect()
    }

    pub fn id_of(&self, token: &str) -> Option<TokenId> {
        self.id_of.get(token).copied()
    }

    pub fn token_of(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn encode_ids(&self, bpe: &BpeModel, text: &str) -> Result<Vec<TokenId>> {
        bpe.encode(text)
            .into_iter()
            .map(|sw| {
                self.id_of(&sw)
                    .filter(|&id| !self.is_special(id))
                    .ok_or(Error::UnknownSubword(sw))
            })
            .collect()
    }

    /// Detokenizes ids, dropping specials and language ids first.
    pub fn decode_ids(&self, ids: &[TokenId]) -> Result<String> {
        let mut subwords = Vec::with_capacity(ids.len());
        for &id in ids {
            let tok = self.token_of(id).ok_or(Error::UnknownId(id))?;
            if !self.is_special(id) {
                subwords.push(tok);
            }
        }
        Ok(detokenize(&subwords))
    }

    /// Renders ids as space-separated tokens, specials included (used for traces).
    pub fn render(&self, ids: &[TokenId]) -> String {
        ids.iter()
            .map(|&id| self.token_of(id).unwrap_or("<?>"))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn to_text(&self) -> String {
        let first = self.first_subword_id() as usize;
        let mut out = String::from("#specials\n");
        for (id, tok) in self.tokens.iter().enumerate().take(SPECIAL_TOKENS.len()) {
            out.push_str(&format!("{tok}\t{id}\n"));
        }
        out.push_str("#langs\n");
        for (i, tag) in self.languages.iter().enumerate() {
            out.push_str(&format!("{tag}\t{}\n", SPECIAL_TOKENS.len() + i));
        }
        out.push_str("#tokens\n");
        for (id, tok) in self.tokens.iter().enumerate().skip(first) {
            out.push_str(&format!("{tok}\t{id}\n"));
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        #[derive(PartialEq)]
        enum Section {
            None,
            Specials,
            Langs,
            Tokens,
        }
        let mut section = Section::None;
        let mut languages = Vec::new();
        let mut subwords = Vec::new();
        let mut expected_id: usize = 0;
        for (i, line) in text.lines().enumerate() {
            let bad = |msg: &str| Error::InvalidArgument(format!("vocab line {}: {msg}", i + 1));
            match line {
                "#specials" => section = Section::Specials,
                "#langs" => section = Section::Langs,
                "#tokens" => section = Section::Tokens,
                "" => {}
                _ => {
                    let (tok, id) = line.split_once('\t').ok_or_else(|| bad("expected token<TAB>id"))?;
                    let id: usize = id.parse().map_err(|_| bad("id is not an integer"))?;
                    if id != expected_id {
                        return Err(bad(&format!("expected id {expected_id}, found {id}")));
                    }
                    expected_id += 1;
                    match section {
                        Section::Specials => {
                            if SPECIAL_TOKENS.get(id) != Some(&tok) {
                                return Err(bad("unexpected special token"));
                            }
                        }
                        Section::Langs => languages.push(tok.to_string()),
                        Section::Tokens => subwords.push(tok.to_string()),
                        Section::None => return Err(bad("entry before any section header")),
                    }
                }
            }
        }
        if languages.is_empty() {
            return Err(Error::InvalidArgument("vocabulary has no languages".into()));
        }
        Vocabulary::from_parts(languages, subwords)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }

    /// Hex SHA-256 of the serialized vocabulary; checkpoints record it.
    pub fn content_hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_text().as_bytes()))
    }
}

/// Builds the joint vocabulary from every subword the model produces on the corpora.
pub fn vocab_build(
    model: &BpeModel,
    corpora: &[&ParallelCorpus],
    languages: &[&str],
) -> Result<Vocabulary> {
    if languages.is_empty() {
        return Err(Error::InvalidArgument("vocabulary needs at least one language".into()));
    }
    let mut counts: HashMap<String, usize> = HashMap::new();
    for corpus in corpora {
        for pair in &corpus.pairs {
            for text in [&pair.source, &pair.target] {
                for sw in model.encode(text) {
                    *counts.entry(sw).or_default() += 1;
                }
            }
        }
    }
    let mut subwords: Vec<(String, usize)> = counts.into_iter().collect();
    subwords.sort_by(|(ta, ca), (tb, cb)| cb.cmp(ca).then_with(|| ta.cmp(tb)));
    let mut reserved: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
    reserved.extend(languages.iter().map(|l| lang_token(l)));
    if let Some((clash, _)) = subwords.iter().find(|(t, _)| reserved.contains(t)) {
        return Err(Error::InvalidArgument(format!(
            "corpus subword {clash:?} collides with a reserved token"
        )));
    }
    Vocabulary::from_parts(
        languages.iter().map(|l| l.to_string()).collect(),
        subwords.into_iter().map(|(t, _)| t).collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{synth_copy_corpus, synth_mapping_corpus, MappingTable};
    use crate::tokenizer::bpe_train;
    use proptest::prelude::*;

    fn mapping_setup() -> (ParallelCorpus, BpeModel, Vocabulary) {
        let c = synth_mapping_corpus(500, &MappingTable::digits_to_words(), 1, 8, 4).unwrap();
        let bpe = bpe_train(&[&c], 1000).unwrap();
        let v = vocab_build(&bpe, &[&c], &["src", "tgt"]).unwrap();
        (c, bpe, v)
    }

    #[test]
    fn copy_vocab_counts() {
        let c = synth_copy_corpus(200, 2, 6, 6, 0).unwrap();
        let bpe = bpe_train(&[&c], 0).unwrap();
        let v = vocab_build(&bpe, &[&c], &["src", "tgt"]).unwrap();
        assert_eq!(v.len(), 4 + 2 + 6);
        assert_eq!(v.first_subword_id(), 6);
        assert_eq!(v.lang_id("tgt"), Some(5));
        assert_eq!(v.lang_index("tgt"), Some(1));
    }

    #[test]
    fn specials_occupy_lowest_ids_and_are_distinct() {
        let (_, _, v) = mapping_setup();
        let s = v.specials();
        let ids = [s.pad, s.bos, s.eos, s.mask];
        assert_eq!(ids, [0, 1, 2, 3]);
        for id in v.subword_ids() {
            assert!(!v.is_special(id));
            assert!(!ids.contains(&id));
        }
    }

    #[test]
    fn id_maps_are_inverse() {
        let (_, _, v) = mapping_setup();
        for id in 0..v.len() as TokenId {
            assert_eq!(v.id_of(v.token_of(id).unwrap()), Some(id));
        }
    }

    #[test]
    fn ids_are_frequency_sorted() {
        let c = ParallelCorpus::new(
            vec![crate::corpus::SentencePair::new("b b b a", "c c", "x", "y").unwrap()],
            crate::corpus::Split::Train,
        )
        .unwrap();
        let bpe = BpeModel::default();
        let v = vocab_build(&bpe, &[&c], &["x", "y"]).unwrap();
        assert_eq!(v.id_of("b</w>"), Some(6));
        assert_eq!(v.id_of("c</w>"), Some(7));
        assert_eq!(v.id_of("a</w>"), Some(8));
    }

    #[test]
    fn serialization_round_trip() {
        let (_, _, v) = mapping_setup();
        let back = Vocabulary::from_text(&v.to_text()).unwrap();
        assert_eq!(back, v);
        assert_eq!(back.content_hash(), v.content_hash());
        assert!(v.to_text().starts_with("#specials\n<pad>\t0\n"));
    }

    #[test]
    fn decode_errors_and_strips() {
        let (_, bpe, v) = mapping_setup();
        assert_eq!(v.decode_ids(&[]).unwrap(), "");
        let mut ids = v.encode_ids(&bpe, "one two").unwrap();
        ids.insert(1, v.mask_id());
        ids.push(v.pad_id());
        assert_eq!(v.decode_ids(&ids).unwrap(), "one two");
        let bad = v.len() as TokenId + 3;
        match v.decode_ids(&[bad]).unwrap_err() {
            Error::UnknownId(id) => assert_eq!(id, bad),
            e => panic!("{e}"),
        }
    }

    #[test]
    fn unknown_subword_is_an_error() {
        let (_, bpe, v) = mapping_setup();
        assert!(matches!(
            v.encode_ids(&bpe, "qqq"),
            Err(Error::UnknownSubword(_))
        ));
    }

    proptest! {
        #[test]
        fn round_trip_on_corpus_words(picks in proptest::collection::vec(0usize..20, 0..12)) {
            let (_, bpe, v) = mapping_setup();
            let table = MappingTable::digits_to_words();
            let words: Vec<&str> = picks.iter().map(|&i| {
                let (s, t) = &table.entries()[i % 10];
                if i < 10 { s.as_str() } else { t.as_str() }
            }).collect();
            let text = words.join(" ");
            let ids = v.encode_ids(&bpe, &text).unwrap();
            prop_assert_eq!(v.decode_ids(&ids).unwrap(), text);
        }
    }
}
