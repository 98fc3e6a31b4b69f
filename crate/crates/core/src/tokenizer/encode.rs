use unicode_normalization::UnicodeNormalization;

use super::{Tokenizer, TokenizerError, Vocabulary, CLS, CONTINUATION_PREFIX, MIN_MAX_LEN, NUM_SPECIALS, SEP, UNK};

/// A packed model input.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Encoding {
    pub ids: Vec<u32>,
    pub type_ids: Vec<u32>,
    /// `[start, end)` subword positions of each (possibly truncated) word,
    /// segment a first. Together they cover every non-special position.
    pub word_spans: Vec<(usize, usize)>,
    /// How many of `word_spans` belong to segment a.
    pub words_a: usize,
}

impl Encoding {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// ASCII punctuation plus the common Unicode punctuation blocks.
pub fn is_punctuation(c: char) -> bool {
    c.is_ascii_punctuation()
        || matches!(c as u32, 0xA1 | 0xA7 | 0xAB | 0xB6 | 0xB7 | 0xBB | 0xBF | 0x2010..=0x2027 | 0x2030..=0x205E | 0x3001..=0x3003 | 0x3008..=0x3011)
}

/// NFC, optional lowercasing, whitespace split, and every punctuation
/// character as its own word.
pub fn pre_tokenize(text: &str, lowercase: bool) -> Vec<String> {
    let mut norm: String = text.nfc().collect();
    if lowercase {
        norm = norm.to_lowercase();
    }
    let mut words = Vec::new();
    for chunk in norm.split_whitespace() {
        let mut cur = String::new();
        for c in chunk.chars() {
            if is_punctuation(c) {
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

/// Greedy longest-match-first segmentation of one word.
pub(crate) fn segment_word(vocab: &Vocabulary, word: &str, max_chars: usize) -> Vec<u32> {
    let chars: Vec<char> = word.chars().collect();
    if chars.is_empty() {
        return Vec::new();
    }
    if chars.len() > max_chars {
        return vec![UNK];
    }
    // byte offset of each char boundary
    let mut bounds: Vec<usize> = word.char_indices().map(|(i, _)| i).collect();
    bounds.push(word.len());
    let mut out = Vec::new();
    let mut start = 0;
    let mut piece = String::new();
    while start < chars.len() {
        let mut found = None;
        for end in (start + 1..=chars.len()).rev() {
            piece.clear();
            if start > 0 {
                piece.push_str(CONTINUATION_PREFIX);
            }
            piece.push_str(&word[bounds[start]..bounds[end]]);
            if let Some(id) = vocab.id(&piece) {
                found = Some((id, end));
                break;
            }
        }
        match found {
            Some((id, end)) => {
                out.push(id);
                start = end;
            }
            None => return vec![UNK],
        }
    }
    out
}

impl Tokenizer {
    fn normalize_word(&self, w: &str) -> String {
        let n: String = w.nfc().collect();
        if self.config.lowercase {
            n.to_lowercase()
        } else {
            n
        }
    }

    fn segment_words(&self, words: &[String]) -> Vec<Vec<u32>> {
        words
            .iter()
            .map(|w| segment_word(&self.vocab, w, self.config.max_word_chars))
            .filter(|p| !p.is_empty())
            .collect()
    }

    /// Encodes one or two raw texts as `CLS a SEP [b SEP]`, truncating the
    /// longer segment first when the pair does not fit.
    pub fn encode(&self, text_a: &str, text_b: Option<&str>, max_len: usize) -> Result<Encoding, TokenizerError> {
        let a = self.segment_words(&pre_tokenize(text_a, self.config.lowercase));
        let b = text_b.map(|t| self.segment_words(&pre_tokenize(t, self.config.lowercase)));
        pack(a, b, max_len)
    }

    /// Encodes already-split words (a treebank sentence) without further
    /// punctuation splitting, so `word_spans[i]` belongs to `words[i]`.
    pub fn encode_pretokenized(&self, words: &[String], max_len: usize) -> Result<Encoding, TokenizerError> {
        let pieces = words
            .iter()
            .map(|w| {
                let p = segment_word(&self.vocab, &self.normalize_word(w), self.config.max_word_chars);
                if p.is_empty() {
                    vec![UNK]
                } else {
                    p
                }
            })
            .collect();
        pack(pieces, None, max_len)
    }

    /// Drops specials, joins continuation pieces, single-spaces words.
    pub fn decode(&self, ids: &[u32]) -> Result<String, TokenizerError> {
        let mut out = String::new();
        for &id in ids {
            let tok = self.vocab.token(id).ok_or(TokenizerError::IdOutOfRange {
                id,
                size: self.vocab.len(),
            })?;
            if (id as usize) < NUM_SPECIALS {
                continue;
            }
            match tok.strip_prefix(CONTINUATION_PREFIX) {
                Some(rest) if !out.is_empty() => out.push_str(rest),
                _ => {
                    if !out.is_empty() {
                        out.push(' ');
                    }
                    out.push_str(tok);
                }
            }
        }
        Ok(out)
    }
}

fn total(words: &[Vec<u32>]) -> usize {
    words.iter().map(Vec::len).sum()
}

fn pop_piece(words: &mut Vec<Vec<u32>>) {
    if let Some(last) = words.last_mut() {
        last.pop();
        if last.is_empty() {
            words.pop();
        }
    }
}

fn pack(mut a: Vec<Vec<u32>>, mut b: Option<Vec<Vec<u32>>>, max_len: usize) -> Result<Encoding, TokenizerError> {
    if max_len < MIN_MAX_LEN {
        return Err(TokenizerError::MaxLenTooSmall(max_len));
    }
    let budget = max_len - if b.is_some() { 3 } else { 2 };
    loop {
        let (la, lb) = (total(&a), b.as_deref().map_or(0, total));
        if la + lb <= budget {
            break;
        }
        match &mut b {
            Some(bw) if lb > la => pop_piece(bw),
            _ => pop_piece(&mut a),
        }
    }
    let mut ids = vec![CLS];
    let mut type_ids = vec![0];
    let mut word_spans = Vec::new();
    let words_a = a.len();
    let mut push_segment = |words: Vec<Vec<u32>>, seg: u32, ids: &mut Vec<u32>, type_ids: &mut Vec<u32>| {
        for w in words {
            let start = ids.len();
            type_ids.extend(std::iter::repeat(seg).take(w.len()));
            ids.extend(w);
            word_spans.push((start, ids.len()));
        }
        ids.push(SEP);
        type_ids.push(seg);
    };
    push_segment(a, 0, &mut ids, &mut type_ids);
    if let Some(b) = b {
        push_segment(b, 1, &mut ids, &mut type_ids);
    }
    Ok(Encoding {
        ids,
        type_ids,
        word_spans,
        words_a,
    })
}

#[cfg(test)]
mod tests {
    use super::super::tests::vocab;
    use super::super::MASK;
    use super::*;
    use proptest::prelude::*;

    fn tok(extra: &[&str]) -> Tokenizer {
        Tokenizer::new(vocab(extra), false)
    }

    #[test]
    fn empty_text_is_cls_sep() {
        let e = tok(&[]).encode("", None, 8).unwrap();
        assert_eq!(e.ids, vec![CLS, SEP]);
        assert!(e.word_spans.is_empty());
    }

    #[test]
    fn unknown_word_is_one_unk() {
        let e = tok(&["a"]).encode("zzz", None, 8).unwrap();
        assert_eq!(e.ids, vec![CLS, UNK, SEP]);
        assert_eq!(e.word_spans, vec![(1, 2)]);
    }

    #[test]
    fn greedy_longest_match() {
        let t = tok(&["u", "un", "##a", "##aff", "##able", "##ab", "##le"]);
        let e = t.encode("unaffable", None, 16).unwrap();
        let pieces: Vec<&str> = e.ids[1..4].iter().map(|&i| t.vocab.token(i).unwrap()).collect();
        assert_eq!(pieces, ["un", "##aff", "##able"]);
        assert_eq!(e.word_spans, vec![(1, 4)]);
        assert_eq!(t.decode(&e.ids).unwrap(), "unaffable");
    }

    #[test]
    fn partial_match_falls_back_to_unk() {
        let t = tok(&["un"]);
        assert_eq!(t.encode("unx", None, 8).unwrap().ids, vec![CLS, UNK, SEP]);
    }

    #[test]
    fn overlong_word_is_unk() {
        let t = tok(&["a", "##a"]);
        let long = "a".repeat(101);
        assert_eq!(t.encode(&long, None, 8).unwrap().ids, vec![CLS, UNK, SEP]);
        let ok = "a".repeat(100);
        assert_eq!(t.encode(&ok, None, 128).unwrap().len(), 102);
    }

    #[test]
    fn punctuation_splits() {
        assert_eq!(pre_tokenize("Hi, you!", false), ["Hi", ",", "you", "!"]);
        assert_eq!(pre_tokenize("  a\t b ", true), ["a", "b"]);
        assert_eq!(pre_tokenize("ÉCOLE", true), ["école"]);
    }

    #[test]
    fn nfc_composes() {
        let t = tok(&["é"]);
        assert_eq!(t.encode("e\u{301}", None, 8).unwrap().ids, vec![CLS, 5, SEP]);
    }

    #[test]
    fn pair_layout_and_truncation() {
        let t = tok(&["a", "b"]);
        let e = t.encode("a a a a a a", Some("b b"), 8).unwrap();
        // budget 5: a is longer and shrinks first
        assert_eq!(e.ids, vec![CLS, 5, 5, 5, SEP, 6, 6, SEP]);
        assert_eq!(e.type_ids, vec![0, 0, 0, 0, 0, 1, 1, 1]);
        assert_eq!(e.words_a, 3);
        assert_eq!(e.word_spans, vec![(1, 2), (2, 3), (3, 4), (5, 6), (6, 7)]);
    }

    #[test]
    fn decode_rejects_out_of_range() {
        assert!(matches!(tok(&[]).decode(&[9]), Err(TokenizerError::IdOutOfRange { .. })));
        assert_eq!(tok(&[]).decode(&[CLS, MASK, SEP]).unwrap(), "");
    }

    #[test]
    fn max_len_below_eight_is_rejected() {
        assert!(matches!(tok(&[]).encode("", None, 7), Err(TokenizerError::MaxLenTooSmall(7))));
    }

    #[test]
    fn pretokenized_keeps_one_span_per_word() {
        let t = tok(&["n", "##'", "##t", "do"]);
        let words = vec!["do".to_string(), "n't".into(), "?".into()];
        let e = t.encode_pretokenized(&words, 16).unwrap();
        assert_eq!(e.word_spans, vec![(1, 2), (2, 5), (5, 6)]);
        assert_eq!(e.ids[5], UNK);
    }

    proptest! {
        #[test]
        fn length_bound_and_span_partition(
            a in "[ab ,]{0,60}",
            b in proptest::option::of("[ab .]{0,60}"),
            max_len in 8usize..40,
        ) {
            let t = tok(&["a", "b", "##a", "##b", ",", "."]);
            let e = t.encode(&a, b.as_deref(), max_len).unwrap();
            prop_assert!(e.len() <= max_len);
            prop_assert_eq!(e.ids[0], CLS);
            prop_assert_eq!(e.ids.iter().filter(|&&i| i == SEP).count(), if b.is_some() { 2 } else { 1 });
            let mut covered = vec![false; e.len()];
            for &(s, t) in &e.word_spans {
                prop_assert!(s < t);
                for c in &mut covered[s..t] {
                    prop_assert!(!*c);
                    *c = true;
                }
            }
            for (i, id) in e.ids.iter().enumerate() {
                prop_assert_eq!(covered[i], *id != CLS && *id != SEP);
            }
        }
    }
}
