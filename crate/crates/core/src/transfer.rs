//! The two transfer variants: swap the vocabulary while reusing embedding
//! rows by frequency rank, or keep the source vocabulary.

use serde::{Deserialize, Serialize};

use crate::corpus::Corpus;
use crate::engine::Tensor;
use crate::model::{Checkpoint, ModelError};
use crate::tokenizer::{Tokenizer, TokenizerError, Vocabulary, NUM_SPECIALS, UNK};

#[derive(Debug, thiserror::Error)]
pub enum TransferError {
    #[error("target vocabulary has {vocab} tokens but the model only {model} rows; truncate it first")]
    LargerVocabulary { vocab: usize, model: usize },
    #[error("vocabulary size {vocab} differs from model rows {model}")]
    SizeMismatch { vocab: usize, model: usize },
    #[error("vocabulary {name:?} is not rank-ordered: {reason}")]
    Ordering { name: String, reason: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TransferVariant {
    Swap,
    Keep,
}

impl std::str::FromStr for TransferVariant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "swap" => Ok(Self::Swap),
            "keep" => Ok(Self::Keep),
            other => Err(format!("unknown transfer variant {other:?} (swap|keep)")),
        }
    }
}

fn check_ordering(vocab: &Vocabulary) -> Result<(), TransferError> {
    let bad = |reason: String| TransferError::Ordering {
        name: vocab.name().to_string(),
        reason,
    };
    if let Some(f) = vocab.frequencies() {
        for i in NUM_SPECIALS + 1..f.len() {
            if f[i] > f[i - 1] {
                return Err(bad(format!("rank {i} has count {} above rank {}'s {}", f[i], i - 1, f[i - 1])));
            }
        }
    }
    Ok(())
}

/// Replaces the vocabulary identity: the token of rank `i` in `new_vocab`
/// inherits embedding row `i`. Every tensor stays bit-identical except the
/// MLM output bias, which holds source unigram priors and is zeroed.
pub fn swap_vocabulary(ck: &Checkpoint, new_vocab: &Vocabulary) -> Result<Checkpoint, TransferError> {
    let (vocab, model) = (new_vocab.len(), ck.config.vocab_size);
    if vocab > model {
        return Err(TransferError::LargerVocabulary { vocab, model });
    }
    if vocab != model {
        return Err(TransferError::SizeMismatch { vocab, model });
    }
    check_ordering(new_vocab)?;
    let mut out = ck.clone();
    let bias = out
        .params
        .get_mut("mlm.output_bias")
        .ok_or_else(|| ModelError::Corrupt("missing mlm.output_bias".into()))?;
    *bias = Tensor::zeros(&[model]);
    out.lineage.push(format!("swap:{}", new_vocab.name()));
    Ok(out)
}

/// Continued pre-training under the source vocabulary: tensors unchanged.
pub fn keep_vocabulary(ck: &Checkpoint) -> Checkpoint {
    let mut out = ck.clone();
    out.lineage.push("keep".into());
    out
}

/// Drops the embedding rows (and MLM bias entries) past rank `n`.
pub fn truncate_model_vocabulary(ck: &Checkpoint, n: usize) -> Result<Checkpoint, TransferError> {
    let v = ck.config.vocab_size;
    if n > v {
        return Err(TransferError::LargerVocabulary { vocab: n, model: v });
    }
    if n == v {
        return Ok(ck.clone());
    }
    let mut out = ck.clone();
    out.config.vocab_size = n;
    out.config.validate()?;
    let h = ck.config.hidden;
    let emb = ck.word_embeddings();
    *out.params.get_mut("word_embeddings").expect("present") = Tensor::new(vec![n, h], emb.data()[..n * h].to_vec())
        .map_err(ModelError::from)?;
    let bias = ck.params.get("mlm.output_bias").expect("present");
    *out.params.get_mut("mlm.output_bias").expect("present") =
        Tensor::new(vec![n], bias.data()[..n].to_vec()).map_err(ModelError::from)?;
    out.lineage.push(format!("truncate:{n}"));
    Ok(out)
}

/// Reconciles sizes by truncating whichever side is larger, so the result
/// can go straight into [`swap_vocabulary`].
pub fn reconcile(ck: &Checkpoint, target: &Tokenizer) -> Result<(Checkpoint, Tokenizer), TransferError> {
    let (v, t) = (ck.config.vocab_size, target.len());
    if t > v {
        Ok((ck.clone(), target.truncate(v)?))
    } else {
        Ok((truncate_model_vocabulary(ck, t)?, target.clone()))
    }
}

/// SWAP or KEEP, returning the checkpoint together with the tokenizer it
/// is paired with from now on.
pub fn apply_transfer(
    variant: TransferVariant,
    ck: &Checkpoint,
    source: &Tokenizer,
    target: &Tokenizer,
) -> Result<(Checkpoint, Tokenizer), TransferError> {
    match variant {
        TransferVariant::Swap => {
            let (ck, tok) = reconcile(ck, target)?;
            Ok((swap_vocabulary(&ck, &tok.vocab)?, tok))
        }
        TransferVariant::Keep => {
            ck.check_vocab(source)?;
            Ok((keep_vocabulary(ck), source.clone()))
        }
    }
}

/// Fraction of subword positions that are UNK when `tokenizer` encodes
/// `corpus` (specials excluded).
pub fn unk_rate(tokenizer: &Tokenizer, corpus: &Corpus) -> Result<f64, TokenizerError> {
    let (mut unk, mut total) = (0usize, 0usize);
    for s in &corpus.sentences {
        let e = tokenizer.encode(s, None, usize::MAX)?;
        for &id in &e.ids[1..e.ids.len() - 1] {
            total += 1;
            unk += usize::from(id == UNK);
        }
    }
    Ok(if total == 0 { 0.0 } else { unk as f64 / total as f64 })
}
