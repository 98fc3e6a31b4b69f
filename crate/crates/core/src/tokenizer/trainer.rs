use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, HashMap};

use super::encode::{pre_tokenize, segment_word};
use super::{Tokenizer, TokenizerConfig, TokenizerError, Vocabulary, CONTINUATION_PREFIX, NUM_SPECIALS, SPECIAL_TOKENS};
use crate::corpus::Corpus;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TrainedVocabulary {
    pub tokenizer: Tokenizer,
    /// Every merge in the order applied, as (left, right) symbols.
    pub merges: Vec<(String, String)>,
}

pub fn train_wordpiece(corpus: &Corpus, vocab_size: usize, lowercase: bool) -> Result<Tokenizer, TokenizerError> {
    train_wordpiece_logged(corpus, vocab_size, lowercase).map(|t| t.tokenizer)
}

struct Symbols {
    strings: Vec<String>,
    ids: HashMap<String, u32>,
}

impl Symbols {
    fn intern(&mut self, s: String) -> u32 {
        if let Some(&id) = self.ids.get(&s) {
            return id;
        }
        let id = self.strings.len() as u32;
        self.ids.insert(s.clone(), id);
        self.strings.push(s);
        id
    }
}

/// Joins two adjacent symbols, dropping the right one's continuation marker.
fn join(a: &str, b: &str) -> String {
    let mut s = a.to_string();
    s.push_str(b.strip_prefix(CONTINUATION_PREFIX).unwrap_or(b));
    s
}

/// True when pair `x` scores strictly better than pair `y`. Scores
/// count(ab) / (count(a) count(b)) are compared exactly by
/// cross-multiplication; equal scores go to the code-point-smaller pair.
fn better(x: (u64, u64, u64, &str, &str), y: (u64, u64, u64, &str, &str)) -> bool {
    let lhs = x.0 as u128 * (y.1 as u128 * y.2 as u128);
    let rhs = y.0 as u128 * (x.1 as u128 * x.2 as u128);
    match lhs.cmp(&rhs) {
        Ordering::Greater => true,
        Ordering::Less => false,
        Ordering::Equal => (x.3, x.4) < (y.3, y.4),
    }
}

/// Trains a WordPiece vocabulary and returns the merge log alongside it.
///
/// The final ranking comes from greedily re-tokenizing the training
/// corpus with the learned inventory, so ranks reflect real usage rather
/// than merge order.
pub fn train_wordpiece_logged(
    corpus: &Corpus,
    vocab_size: usize,
    lowercase: bool,
) -> Result<TrainedVocabulary, TokenizerError> {
    let config = TokenizerConfig {
        lowercase,
        name: corpus.name.clone(),
        ..TokenizerConfig::default()
    };
    let mut word_counts: BTreeMap<String, u64> = BTreeMap::new();
    for s in &corpus.sentences {
        for w in pre_tokenize(s, lowercase) {
            *word_counts.entry(w).or_default() += 1;
        }
    }
    if word_counts.is_empty() {
        return Err(TokenizerError::EmptyCorpus);
    }

    let mut syms = Symbols {
        strings: Vec::new(),
        ids: HashMap::new(),
    };
    let mut words: Vec<(Vec<u32>, u64)> = Vec::new();
    for (w, &c) in &word_counts {
        if w.chars().count() > config.max_word_chars {
            continue;
        }
        let seq = w
            .chars()
            .enumerate()
            .map(|(i, ch)| {
                syms.intern(if i == 0 {
                    ch.to_string()
                } else {
                    format!("{CONTINUATION_PREFIX}{ch}")
                })
            })
            .collect();
        words.push((seq, c));
    }
    let mut inventory: BTreeSet<String> = syms.strings.iter().cloned().collect();
    if vocab_size < NUM_SPECIALS + inventory.len() {
        return Err(TokenizerError::VocabTooSmall {
            requested: vocab_size,
            alphabet: inventory.len(),
        });
    }

    let mut merges = Vec::new();
    while NUM_SPECIALS + inventory.len() < vocab_size {
        let mut unit: HashMap<u32, u64> = HashMap::new();
        let mut pairs: HashMap<(u32, u32), u64> = HashMap::new();
        for (seq, c) in &words {
            for (i, &s) in seq.iter().enumerate() {
                *unit.entry(s).or_default() += c;
                if i + 1 < seq.len() {
                    *pairs.entry((s, seq[i + 1])).or_default() += c;
                }
            }
        }
        let mut best: Option<((u32, u32), u64)> = None;
        for (&(a, b), &cab) in &pairs {
            let cand = (cab, unit[&a], unit[&b], syms.strings[a as usize].as_str(), syms.strings[b as usize].as_str());
            let wins = match best {
                None => true,
                Some(((ba, bb), bc)) => better(
                    cand,
                    (bc, unit[&ba], unit[&bb], &syms.strings[ba as usize], &syms.strings[bb as usize]),
                ),
            };
            if wins {
                best = Some(((a, b), cab));
            }
        }
        let Some(((a, b), _)) = best else { break };
        let merged = join(&syms.strings[a as usize], &syms.strings[b as usize]);
        merges.push((syms.strings[a as usize].clone(), syms.strings[b as usize].clone()));
        inventory.insert(merged.clone());
        let m = syms.intern(merged);
        for (seq, _) in &mut words {
            if seq.len() < 2 {
                continue;
            }
            let mut out = Vec::with_capacity(seq.len());
            let mut i = 0;
            while i < seq.len() {
                if i + 1 < seq.len() && seq[i] == a && seq[i + 1] == b {
                    out.push(m);
                    i += 2;
                } else {
                    out.push(seq[i]);
                    i += 1;
                }
            }
            *seq = out;
        }
    }

    // rank by usage under greedy segmentation
    let provisional: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).chain(inventory.iter().cloned()).collect();
    let provisional = Vocabulary::new(corpus.name.clone(), provisional, None)?;
    let mut freq = vec![0u64; provisional.len()];
    for (w, &c) in &word_counts {
        for id in segment_word(&provisional, w, config.max_word_chars) {
            freq[id as usize] += c;
        }
    }
    let mut order: Vec<usize> = (NUM_SPECIALS..provisional.len()).collect();
    order.sort_by(|&x, &y| freq[y].cmp(&freq[x]).then_with(|| provisional.tokens()[x].cmp(&provisional.tokens()[y])));
    let ranked: Vec<usize> = (0..NUM_SPECIALS).chain(order).collect();
    let tokens = ranked.iter().map(|&i| provisional.tokens()[i].clone()).collect();
    let frequencies = ranked.iter().map(|&i| freq[i]).collect();
    let vocab = Vocabulary::new(corpus.name.clone(), tokens, Some(frequencies))?;
    Ok(TrainedVocabulary {
        tokenizer: Tokenizer { vocab, config },
        merges,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn corpus(lines: &[&str]) -> Corpus {
        Corpus::new("toy", lines.iter().copied())
    }

    #[test]
    fn single_possible_merge() {
        // alphabet {a, ##a}: room for exactly one merge
        let t = train_wordpiece_logged(&corpus(&["aa aa aa"]), 5 + 3, false).unwrap();
        assert_eq!(t.merges, vec![("a".to_string(), "##a".to_string())]);
        let v = &t.tokenizer.vocab;
        for tok in ["a", "##a", "aa"] {
            assert!(v.contains(tok), "{tok}");
        }
        assert_eq!(v.len(), 8);
    }

    #[test]
    fn stops_when_no_pair_remains() {
        let t = train_wordpiece(&corpus(&["ab ab"]), 100, false).unwrap();
        assert_eq!(t.vocab.len(), 5 + 3);
    }

    #[test]
    fn too_small_and_empty() {
        assert!(matches!(
            train_wordpiece(&corpus(&["abc"]), 7, false),
            Err(TokenizerError::VocabTooSmall { alphabet: 3, .. })
        ));
        assert!(matches!(train_wordpiece(&corpus(&[]), 50, false), Err(TokenizerError::EmptyCorpus)));
    }

    #[test]
    fn frequencies_rank_non_specials() {
        let c = corpus(&["the cat sat on the mat", "the dog sat", "a cat a hat"]);
        let t = train_wordpiece(&c, 40, false).unwrap();
        let f = t.vocab.frequencies().unwrap();
        for i in NUM_SPECIALS + 1..t.vocab.len() {
            assert!(f[i - 1] > f[i] || (f[i - 1] == f[i] && t.vocab.tokens()[i - 1] < t.vocab.tokens()[i]));
        }
    }

    #[test]
    fn lowercase_flag() {
        let t = train_wordpiece(&corpus(&["AB ab"]), 100, true).unwrap();
        assert!(t.vocab.contains("ab"));
        assert!(!t.vocab.contains("A"));
        assert!(t.config.lowercase);
    }

    #[test]
    fn repeated_training_is_byte_identical() {
        let c = corpus(&["lorem ipsum dolor sit amet", "consectetur adipiscing elit", "sed do eiusmod"]);
        let a = train_wordpiece(&c, 60, false).unwrap().vocab.to_file_string();
        let b = train_wordpiece(&c, 60, false).unwrap().vocab.to_file_string();
        assert_eq!(a, b);
    }
}
