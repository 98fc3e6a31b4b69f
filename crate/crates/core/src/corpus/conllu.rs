use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{io_err, CorpusError};

/// One treebank sentence. `heads[i]` is the 1-based index of word `i+1`'s
/// governor, 0 for the root.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParsedSentence {
    pub tokens: Vec<String>,
    pub upos: Vec<String>,
    pub heads: Vec<usize>,
}

impl ParsedSentence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn is_punct(&self, i: usize) -> bool {
        self.upos[i] == "PUNCT"
    }

    /// 1-based index of the root word.
    pub fn root(&self) -> usize {
        self.heads.iter().position(|&h| h == 0).map(|i| i + 1).unwrap_or(0)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Treebank {
    pub sentences: Vec<ParsedSentence>,
}

impl Treebank {
    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }
}

/// Single root, heads in range, no cycles.
pub fn check_tree(heads: &[usize]) -> Result<(), String> {
    let n = heads.len();
    let roots = heads.iter().filter(|&&h| h == 0).count();
    if roots != 1 {
        return Err(format!("expected exactly one root, found {roots}"));
    }
    if let Some((i, &h)) = heads.iter().enumerate().find(|(i, &h)| h > n || h == i + 1) {
        return Err(format!("word {} has invalid head {h}", i + 1));
    }
    for start in 1..=n {
        let mut cur = start;
        for _ in 0..=n {
            cur = heads[cur - 1];
            if cur == 0 {
                break;
            }
        }
        if cur != 0 {
            return Err(format!("cycle through word {start}"));
        }
    }
    Ok(())
}

pub fn parse_conllu(path: &Path) -> Result<Treebank, CorpusError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    parse_conllu_str(&text)
}

/// Parses CoNLL-U text. Multiword-token ranges (`3-4`) and empty nodes
/// (`5.1`) are skipped; only FORM, UPOS and HEAD are retained.
pub fn parse_conllu_str(text: &str) -> Result<Treebank, CorpusError> {
    let mut sentences = Vec::new();
    let mut cur = ParsedSentence {
        tokens: Vec::new(),
        upos: Vec::new(),
        heads: Vec::new(),
    };

    let finish = |cur: &mut ParsedSentence, sentences: &mut Vec<ParsedSentence>| -> Result<(), CorpusError> {
        if cur.is_empty() {
            return Ok(());
        }
        let sent = std::mem::replace(
            cur,
            ParsedSentence {
                tokens: Vec::new(),
                upos: Vec::new(),
                heads: Vec::new(),
            },
        );
        check_tree(&sent.heads).map_err(|reason| CorpusError::InvalidTree {
            index: sentences.len(),
            reason,
        })?;
        sentences.push(sent);
        Ok(())
    };

    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            finish(&mut cur, &mut sentences)?;
            continue;
        }
        if line.starts_with('#') {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() < 7 {
            return Err(CorpusError::MalformedLine {
                line: lineno,
                reason: format!("{} columns", cols.len()),
            });
        }
        let id = cols[0];
        if id.contains('-') || id.contains('.') {
            continue;
        }
        let id: usize = id.parse().map_err(|_| CorpusError::MalformedLine {
            line: lineno,
            reason: format!("ID {id:?}"),
        })?;
        if id != cur.len() + 1 {
            return Err(CorpusError::MalformedLine {
                line: lineno,
                reason: format!("ID {id} out of sequence"),
            });
        }
        let head: usize = cols[6].parse().map_err(|_| CorpusError::NonIntegerHead {
            line: lineno,
            value: cols[6].to_string(),
        })?;
        cur.tokens.push(cols[1].to_string());
        cur.upos.push(cols[3].to_string());
        cur.heads.push(head);
    }
    finish(&mut cur, &mut sentences)?;
    Ok(Treebank { sentences })
}

/// Writes a ten-column CoNLL-U rendering; unused columns are `_`.
pub fn write_conllu(treebank: &Treebank) -> String {
    let mut out = String::new();
    for s in &treebank.sentences {
        for i in 0..s.len() {
            let rel = if s.heads[i] == 0 { "root" } else { "dep" };
            let _ = writeln!(
                out,
                "{}\t{}\t_\t{}\t_\t_\t{}\t{}\t_\t_",
                i + 1,
                s.tokens[i],
                s.upos[i],
                s.heads[i],
                rel
            );
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const I_ATE_RICE: &str = "# text = I ate rice\n\
1\tI\tI\tPRON\tPRP\t_\t2\tnsubj\t_\t_\n\
2\tate\teat\tVERB\tVBD\t_\t0\troot\t_\t_\n\
3\trice\trice\tNOUN\tNN\t_\t2\tobj\t_\t_\n\n";

    #[test]
    fn empty_input_gives_empty_treebank() {
        assert!(parse_conllu_str("").unwrap().is_empty());
    }

    #[test]
    fn three_token_sentence() {
        let tb = parse_conllu_str(I_ATE_RICE).unwrap();
        assert_eq!(tb.len(), 1);
        let s = &tb.sentences[0];
        assert_eq!(s.tokens, vec!["I", "ate", "rice"]);
        assert_eq!(s.upos, vec!["PRON", "VERB", "NOUN"]);
        assert_eq!(s.heads, vec![2, 0, 2]);
        assert_eq!(s.root(), 2);
    }

    #[test]
    fn multiword_ranges_and_empty_nodes_are_skipped() {
        let text = "1\tI\t_\tPRON\t_\t_\t2\t_\t_\t_\n\
2\twent\t_\tVERB\t_\t_\t0\t_\t_\t_\n\
3-4\tdon't\t_\t_\t_\t_\t_\t_\t_\t_\n\
3\tdo\t_\tAUX\t_\t_\t2\t_\t_\t_\n\
4\tn't\t_\tPART\t_\t_\t2\t_\t_\t_\n\
4.1\tgo\t_\tVERB\t_\t_\t_\t_\t_\t_\n\
5\t.\t_\tPUNCT\t_\t_\t2\t_\t_\t_\n";
        let tb = parse_conllu_str(text).unwrap();
        assert_eq!(tb.sentences[0].tokens, vec!["I", "went", "do", "n't", "."]);
        assert!(!tb.sentences[0].tokens.iter().any(|t| t == "don't"));
    }

    #[test]
    fn non_integer_head_is_rejected() {
        let text = "1\ta\t_\tX\t_\t_\tzero\t_\t_\t_\n";
        assert!(matches!(
            parse_conllu_str(text),
            Err(CorpusError::NonIntegerHead { line: 1, .. })
        ));
    }

    #[test]
    fn cyclic_and_multi_root_sentences_are_rejected_with_index() {
        let cyclic = format!("{I_ATE_RICE}1\ta\t_\tX\t_\t_\t2\t_\t_\t_\n2\tb\t_\tX\t_\t_\t1\t_\t_\t_\n\n");
        match parse_conllu_str(&cyclic) {
            Err(CorpusError::InvalidTree { index, .. }) => assert_eq!(index, 1),
            other => panic!("{other:?}"),
        }
        let multi = "1\ta\t_\tX\t_\t_\t0\t_\t_\t_\n2\tb\t_\tX\t_\t_\t0\t_\t_\t_\n";
        assert!(matches!(
            parse_conllu_str(multi),
            Err(CorpusError::InvalidTree { index: 0, .. })
        ));
    }

    #[test]
    fn tree_check() {
        assert!(check_tree(&[2, 0, 2]).is_ok());
        assert!(check_tree(&[0]).is_ok());
        assert!(check_tree(&[2, 3, 1]).is_err());
        assert!(check_tree(&[2, 1, 0]).is_err());
        assert!(check_tree(&[1, 0]).is_err());
        assert!(check_tree(&[5, 0]).is_err());
    }

    fn random_tree() -> impl Strategy<Value = Vec<usize>> {
        (1usize..15).prop_flat_map(|n| {
            (Just(n), proptest::collection::vec(any::<u32>(), n), any::<u32>()).prop_map(|(n, picks, root)| {
                // attach word order[i] to an earlier word in a random order
                let mut order: Vec<usize> = (1..=n).collect();
                let r = root as usize % n;
                order.swap(0, r);
                let mut heads = vec![0; n];
                for i in 1..n {
                    heads[order[i] - 1] = order[picks[i] as usize % i];
                }
                heads
            })
        })
    }

    proptest! {
        #[test]
        fn write_then_parse_round_trips(trees in proptest::collection::vec(random_tree(), 0..5)) {
            let tb = Treebank {
                sentences: trees
                    .into_iter()
                    .map(|heads| ParsedSentence {
                        tokens: (0..heads.len()).map(|i| format!("w{i}")).collect(),
                        upos: (0..heads.len()).map(|i| if i % 3 == 0 { "PUNCT".into() } else { "NOUN".into() }).collect(),
                        heads,
                    })
                    .collect(),
            };
            let back = parse_conllu_str(&write_conllu(&tb)).unwrap();
            prop_assert_eq!(back, tb);
        }
    }
}
