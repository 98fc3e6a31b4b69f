//! WordPiece vocabularies ranked by corpus frequency.

mod encode;
mod trainer;

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use encode::{is_punctuation, pre_tokenize, Encoding};
pub use trainer::{train_wordpiece, train_wordpiece_logged, TrainedVocabulary};

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const CLS: u32 = 2;
pub const SEP: u32 = 3;
pub const MASK: u32 = 4;
pub const NUM_SPECIALS: usize = 5;
pub const SPECIAL_TOKENS: [&str; NUM_SPECIALS] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"];
pub const CONTINUATION_PREFIX: &str = "##";
pub const MIN_MAX_LEN: usize = 8;

#[derive(Debug, thiserror::Error)]
pub enum TokenizerError {
    #[error("vocab_size {requested} is below 5 specials + {alphabet} alphabet symbols")]
    VocabTooSmall { requested: usize, alphabet: usize },
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("cannot truncate to {n}: {reason}")]
    Truncate { n: usize, reason: String },
    #[error("token id {id} out of range for vocabulary of {size}")]
    IdOutOfRange { id: u32, size: usize },
    #[error("max_len {0} is below the minimum of 8")]
    MaxLenTooSmall(usize),
    #[error("malformed vocabulary: {0}")]
    Malformed(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("tokenizer config: {0}")]
    Config(#[from] serde_json::Error),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TokenizerError + '_ {
    move |source| TokenizerError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Tokens by rank. Ranks 0..5 are the specials; the rest are sorted by
/// non-increasing corpus frequency with code-point order breaking ties.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    name: String,
    tokens: Vec<String>,
    index: HashMap<String, u32>,
    frequencies: Option<Vec<u64>>,
}

impl Vocabulary {
    /// Checks the special prefix and uniqueness; does not check ordering,
    /// since a vocabulary read from disk carries no frequencies.
    pub fn new(name: impl Into<String>, tokens: Vec<String>, frequencies: Option<Vec<u64>>) -> Result<Self, TokenizerError> {
        if tokens.len() < NUM_SPECIALS || tokens[..NUM_SPECIALS].iter().zip(SPECIAL_TOKENS).any(|(a, b)| a != b) {
            return Err(TokenizerError::Malformed(format!(
                "ranks 0-4 must be {SPECIAL_TOKENS:?}"
            )));
        }
        if let Some(f) = &frequencies {
            if f.len() != tokens.len() {
                return Err(TokenizerError::Malformed(format!(
                    "{} frequencies for {} tokens",
                    f.len(),
                    tokens.len()
                )));
            }
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(TokenizerError::Malformed(format!("token {i} is empty or contains whitespace")));
            }
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(TokenizerError::Malformed(format!("duplicate token {t:?}")));
            }
        }
        Ok(Self {
            name: name.into(),
            tokens,
            index,
            frequencies,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn set_name(&mut self, name: impl Into<String>) {
        self.name = name.into();
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn frequencies(&self) -> Option<&[u64]> {
        self.frequencies.as_deref()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn is_special(id: u32) -> bool {
        (id as usize) < NUM_SPECIALS
    }

    /// Keeps ranks `[0, n)`.
    pub fn truncate(&self, n: usize) -> Result<Self, TokenizerError> {
        if n < NUM_SPECIALS {
            return Err(TokenizerError::Truncate {
                n,
                reason: "would drop special tokens".into(),
            });
        }
        if n > self.len() {
            return Err(TokenizerError::Truncate {
                n,
                reason: format!("vocabulary has only {} tokens", self.len()),
            });
        }
        Self::new(
            self.name.clone(),
            self.tokens[..n].to_vec(),
            self.frequencies.as_ref().map(|f| f[..n].to_vec()),
        )
    }

    /// One token per line; the line number is the rank.
    pub fn to_file_string(&self) -> String {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        s
    }

    pub fn save(&self, path: &Path) -> Result<(), TokenizerError> {
        fs::write(path, self.to_file_string()).map_err(io_err(path))?;
        if let Some(f) = &self.frequencies {
            let counts = counts_path(path);
            let body: String = f.iter().map(|c| format!("{c}\n")).collect();
            fs::write(&counts, body).map_err(io_err(&counts))?;
        }
        Ok(())
    }

    /// Loads a vocab file, picking up a `.counts` sidecar if present. The
    /// name defaults to the file stem.
    pub fn load(path: &Path) -> Result<Self, TokenizerError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let tokens: Vec<String> = text.lines().map(str::to_string).collect();
        let counts = counts_path(path);
        let frequencies = if counts.exists() {
            let body = fs::read_to_string(&counts).map_err(io_err(&counts))?;
            Some(
                body.lines()
                    .map(|l| l.trim().parse::<u64>())
                    .collect::<Result<Vec<_>, _>>()
                    .map_err(|e| TokenizerError::Malformed(format!("{}: {e}", counts.display())))?,
            )
        } else {
            None
        };
        let name = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        Self::new(name, tokens, frequencies)
    }
}

fn counts_path(vocab: &Path) -> PathBuf {
    let mut s = vocab.as_os_str().to_owned();
    s.push(".counts");
    PathBuf::from(s)
}

pub fn truncate_vocabulary(vocab: &Vocabulary, n: usize) -> Result<Vocabulary, TokenizerError> {
    vocab.truncate(n)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenizerConfig {
    pub lowercase: bool,
    pub max_word_chars: usize,
    pub continuation_prefix: String,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub name: String,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        Self {
            lowercase: false,
            max_word_chars: 100,
            continuation_prefix: CONTINUATION_PREFIX.into(),
            name: String::new(),
        }
    }
}

/// A vocabulary plus the normalization it was trained with.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Tokenizer {
    pub vocab: Vocabulary,
    pub config: TokenizerConfig,
}

pub const VOCAB_FILE: &str = "vocab.txt";
pub const CONFIG_FILE: &str = "tokenizer.json";

impl Tokenizer {
    pub fn new(vocab: Vocabulary, lowercase: bool) -> Self {
        let config = TokenizerConfig {
            lowercase,
            name: vocab.name().to_string(),
            ..TokenizerConfig::default()
        };
        Self { vocab, config }
    }

    pub fn name(&self) -> &str {
        self.vocab.name()
    }

    pub fn len(&self) -> usize {
        self.vocab.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vocab.is_empty()
    }

    pub fn truncate(&self, n: usize) -> Result<Self, TokenizerError> {
        Ok(Self {
            vocab: self.vocab.truncate(n)?,
            config: self.config.clone(),
        })
    }

    /// Writes `vocab.txt` (plus counts) and `tokenizer.json` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<(), TokenizerError> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        self.vocab.save(&dir.join(VOCAB_FILE))?;
        let mut config = self.config.clone();
        config.name = self.vocab.name().to_string();
        let p = dir.join(CONFIG_FILE);
        fs::write(&p, serde_json::to_string_pretty(&config)? + "\n").map_err(io_err(&p))
    }

    pub fn load(dir: &Path) -> Result<Self, TokenizerError> {
        let p = dir.join(CONFIG_FILE);
        let config: TokenizerConfig = serde_json::from_slice(&fs::read(&p).map_err(io_err(&p))?)?;
        if config.continuation_prefix != CONTINUATION_PREFIX {
            return Err(TokenizerError::Malformed(format!(
                "unsupported continuation prefix {:?}",
                config.continuation_prefix
            )));
        }
        let mut vocab = Vocabulary::load(&dir.join(VOCAB_FILE))?;
        if !config.name.is_empty() {
            vocab.set_name(config.name.clone());
        }
        Ok(Self { vocab, config })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn vocab(extra: &[&str]) -> Vocabulary {
        let tokens = SPECIAL_TOKENS.iter().chain(extra).map(|s| s.to_string()).collect();
        Vocabulary::new("t", tokens, None).unwrap()
    }

    #[test]
    fn specials_are_fixed() {
        let v = vocab(&["a"]);
        assert_eq!(v.id("[PAD]"), Some(PAD));
        assert_eq!(v.id("[MASK]"), Some(MASK));
        let bad = vec!["[UNK]".to_string(), "[PAD]".into(), "[CLS]".into(), "[SEP]".into(), "[MASK]".into()];
        assert!(Vocabulary::new("x", bad, None).is_err());
    }

    #[test]
    fn duplicates_are_rejected() {
        let tokens = SPECIAL_TOKENS.iter().chain(&["a", "a"]).map(|s| s.to_string()).collect();
        assert!(matches!(Vocabulary::new("x", tokens, None), Err(TokenizerError::Malformed(_))));
    }

    #[test]
    fn truncate_identity_and_prefix() {
        let extra: Vec<String> = (0..95).map(|i| format!("t{i:02}")).collect();
        let refs: Vec<&str> = extra.iter().map(String::as_str).collect();
        let v = vocab(&refs);
        assert_eq!(v.truncate(100).unwrap(), v);
        let t = v.truncate(10).unwrap();
        assert_eq!(t.tokens(), &v.tokens()[..10]);
        assert!(matches!(v.truncate(4), Err(TokenizerError::Truncate { .. })));
        assert!(v.truncate(101).is_err());
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let tokens = SPECIAL_TOKENS.iter().chain(&["ab", "##c"]).map(|s| s.to_string()).collect();
        let v = Vocabulary::new("src", tokens, Some(vec![0, 0, 0, 0, 0, 9, 3])).unwrap();
        let tok = Tokenizer::new(v, true);
        tok.save(dir.path()).unwrap();
        let back = Tokenizer::load(dir.path()).unwrap();
        assert_eq!(back, tok);
        assert_eq!(back.name(), "src");
        let cfg = fs::read_to_string(dir.path().join(CONFIG_FILE)).unwrap();
        assert!(cfg.contains("\"max_word_chars\": 100"));
    }
}
