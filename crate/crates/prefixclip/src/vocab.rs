//! Word-level vocabulary with reserved control tokens, and sequence assembly.
//!
//! Token id layout is fixed: PAD=0, BOS=1, EOS=2, then one prefix id per
//! data source, then content words in lexicon order starting at 5. The two
//! prefix ids are ordinary learnable rows of the token embedding table; they
//! only enter a sequence through [`prepend_prefix`].

use std::collections::HashMap;

use thiserror::Error;

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const PREFIX_PROMPT: usize = 3;
pub const PREFIX_CAPTION: usize = 4;
pub const FIRST_CONTENT_ID: usize = 5;

#[derive(Debug, Error)]
pub enum VocabError {
    #[error("duplicate word '{0}' in lexicon")]
    Duplicate(String),
    #[error("unknown word '{0}'")]
    UnknownWord(String),
    #[error("max_len {0} cannot hold BOS, EOS and one content token")]
    MaxLenTooSmall(usize),
    #[error("cannot tokenize empty text")]
    EmptyText,
    #[error("sequence already starts with a prefix token")]
    AlreadyPrefixed,
    #[error("lexicon line must hold a single word, got {0:?}")]
    BadLexiconLine(String),
}

/// Which data source a sequence is declared to come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PrefixKind {
    /// Label prompts built from templates.
    Prompt,
    /// Free-form captions.
    Caption,
}

impl PrefixKind {
    pub fn token_id(self) -> usize {
        match self {
            PrefixKind::Prompt => PREFIX_PROMPT,
            PrefixKind::Caption => PREFIX_CAPTION,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Vocabulary {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Content words get ids in input order starting at [`FIRST_CONTENT_ID`].
    pub fn new<I: IntoIterator<Item = String>>(lexicon: I) -> Result<Vocabulary, VocabError> {
        let mut words = Vec::new();
        let mut index = HashMap::new();
        for w in lexicon {
            let w = w.to_lowercase();
            if index.insert(w.clone(), FIRST_CONTENT_ID + words.len()).is_some() {
                return Err(VocabError::Duplicate(w));
            }
            words.push(w);
        }
        Ok(Vocabulary { words, index })
    }

    /// Parses the lexicon interchange format: one word per line, `#` starts
    /// a comment, blank lines are skipped.
    pub fn from_lexicon_text(text: &str) -> Result<Vocabulary, VocabError> {
        let mut words = Vec::new();
        for line in text.lines() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if line.split_whitespace().count() != 1 {
                return Err(VocabError::BadLexiconLine(line.to_string()));
            }
            words.push(line.to_string());
        }
        Vocabulary::new(words)
    }

    pub fn to_lexicon_text(&self) -> String {
        let mut out = String::new();
        for w in &self.words {
            out.push_str(w);
            out.push('\n');
        }
        out
    }

    /// Total id count, control tokens included; the embedding table height.
    pub fn len(&self) -> usize {
        FIRST_CONTENT_ID + self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id_of(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    pub fn word_of(&self, id: usize) -> Option<&str> {
        match id {
            PAD => Some("<pad>"),
            BOS => Some("<bos>"),
            EOS => Some("<eos>"),
            PREFIX_PROMPT => Some("<prompt>"),
            PREFIX_CAPTION => Some("<caption>"),
            _ => self.words.get(id - FIRST_CONTENT_ID).map(|s| s.as_str()),
        }
    }

    /// Whitespace tokenization into a padded sequence. Content beyond
    /// `max_len - 2` is dropped so BOS and EOS always fit.
    pub fn tokenize(&self, text: &str, max_len: usize) -> Result<TokenSequence, VocabError> {
        if max_len < 3 {
            return Err(VocabError::MaxLenTooSmall(max_len));
        }
        let mut ids = Vec::with_capacity(max_len);
        ids.push(BOS);
        let mut any = false;
        for word in text.split_whitespace() {
            any = true;
            if ids.len() == max_len - 1 {
                break;
            }
            let word = word.to_lowercase();
            let id = self.id_of(&word).ok_or(VocabError::UnknownWord(word))?;
            ids.push(id);
        }
        if !any {
            return Err(VocabError::EmptyText);
        }
        ids.push(EOS);
        let valid = ids.len();
        ids.resize(max_len, PAD);
        Ok(TokenSequence { ids, valid })
    }
}

/// One padded token sequence: `BOS [prefix] content... EOS PAD...`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<usize>,
    /// Count of non-PAD tokens; EOS sits at `valid - 1`.
    pub valid: usize,
}

impl TokenSequence {
    pub fn eos_pos(&self) -> usize {
        self.valid - 1
    }

    pub fn max_len(&self) -> usize {
        self.ids.len()
    }
}

/// Returns a copy of `seq` with the prefix token inserted directly after
/// BOS, shifting everything else right. If the sequence is already full the
/// last content token is dropped to keep EOS inside the window.
pub fn prepend_prefix(seq: &TokenSequence, kind: PrefixKind) -> Result<TokenSequence, VocabError> {
    let max_len = seq.max_len();
    if max_len < 4 {
        return Err(VocabError::MaxLenTooSmall(max_len));
    }
    if seq.valid > 1 && (seq.ids[1] == PREFIX_PROMPT || seq.ids[1] == PREFIX_CAPTION) {
        return Err(VocabError::AlreadyPrefixed);
    }
    let eos = seq.eos_pos();
    let mut content: Vec<usize> = seq.ids[1..eos].to_vec();
    content.truncate(max_len - 3);
    let mut ids = Vec::with_capacity(max_len);
    ids.push(BOS);
    ids.push(kind.token_id());
    ids.extend_from_slice(&content);
    ids.push(EOS);
    let valid = ids.len();
    ids.resize(max_len, PAD);
    Ok(TokenSequence { ids, valid })
}
