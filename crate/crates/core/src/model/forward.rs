use std::collections::HashMap;

use crate::engine::{Float, Graph, ParamStore, Tensor, Var};
use crate::rng::StreamRng;
use crate::tokenizer::{Encoding, PAD};

use super::{Checkpoint, ModelConfig, ModelError, TaskHead};

const MASK_PENALTY: f64 = -1e4;

/// Right-padded token ids, `batch` rows of `seq` positions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub ids: Vec<u32>,
    pub type_ids: Vec<u32>,
    /// `true` at real (non-pad) positions.
    pub attention: Vec<bool>,
    pub batch: usize,
    pub seq: usize,
}

impl Batch {
    /// Pads every encoding to the longest one.
    pub fn from_encodings(encs: &[&Encoding]) -> Self {
        let seq = encs.iter().map(|e| e.len()).max().unwrap_or(0);
        Self::padded(encs, seq)
    }

    /// Pads every encoding to `seq` positions; `seq` must cover the longest.
    pub fn padded(encs: &[&Encoding], seq: usize) -> Self {
        let mut ids = Vec::with_capacity(encs.len() * seq);
        let mut type_ids = Vec::with_capacity(encs.len() * seq);
        let mut attention = Vec::with_capacity(encs.len() * seq);
        for e in encs {
            assert!(e.len() <= seq, "encoding of {} positions padded to {seq}", e.len());
            ids.extend(&e.ids);
            type_ids.extend(&e.type_ids);
            attention.extend(std::iter::repeat(true).take(e.len()));
            let pad = seq - e.len();
            ids.extend(std::iter::repeat(PAD).take(pad));
            type_ids.extend(std::iter::repeat(0).take(pad));
            attention.extend(std::iter::repeat(false).take(pad));
        }
        Self {
            ids,
            type_ids,
            attention,
            batch: encs.len(),
            seq,
        }
    }

    pub fn rows(&self) -> usize {
        self.batch * self.seq
    }

    pub fn row_ids(&self, b: usize) -> &[u32] {
        &self.ids[b * self.seq..(b + 1) * self.seq]
    }
}

/// Graph variables bound to parameter names.
#[derive(Clone, Debug, Default)]
pub struct Weights {
    vars: HashMap<String, Var>,
    order: Vec<(String, Var)>,
}

impl Weights {
    /// Registers every tensor of `store` as a trainable leaf.
    pub fn bind<T: Float>(&mut self, g: &mut Graph<T>, store: &ParamStore<T>) {
        for (name, t) in store.iter() {
            let v = g.param(t.clone());
            self.vars.insert(name.to_string(), v);
            self.order.push((name.to_string(), v));
        }
    }

    /// Names already-registered variables, pairing `vars` with `store` order.
    pub fn from_vars<T: Float>(store: &ParamStore<T>, vars: &[Var]) -> Self {
        let mut w = Self::default();
        for ((name, _), &v) in store.iter().zip(vars) {
            w.vars.insert(name.to_string(), v);
            w.order.push((name.to_string(), v));
        }
        w
    }

    /// Registers every tensor of `store` as a constant.
    pub fn bind_const<T: Float>(&mut self, g: &mut Graph<T>, store: &ParamStore<T>) {
        for (name, t) in store.iter() {
            let v = g.constant(t.clone());
            self.vars.insert(name.to_string(), v);
            self.order.push((name.to_string(), v));
        }
    }

    pub fn get(&self, name: &str) -> Result<Var, ModelError> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| ModelError::Corrupt(format!("missing tensor {name}")))
    }

    /// Bound variables in binding order.
    pub fn vars(&self) -> &[(String, Var)] {
        &self.order
    }
}

fn check_batch(cfg: &ModelConfig, batch: &Batch) -> Result<(), ModelError> {
    if batch.seq > cfg.max_positions {
        return Err(ModelError::SequenceTooLong {
            len: batch.seq,
            max: cfg.max_positions,
        });
    }
    if let Some(&id) = batch.ids.iter().find(|&&i| i as usize >= cfg.vocab_size) {
        return Err(ModelError::VocabMismatch {
            vocab: id as usize + 1,
            model: cfg.vocab_size,
        });
    }
    Ok(())
}

fn maybe_dropout<T: Float>(
    g: &mut Graph<T>,
    x: Var,
    rate: f64,
    rng: &mut Option<&mut StreamRng>,
) -> Result<Var, ModelError> {
    match rng {
        Some(r) if rate > 0.0 => Ok(g.dropout(x, rate, *r)?),
        _ => Ok(x),
    }
}

/// Encoder states `[batch*seq, H]` after `upto` layers (0 = normalized
/// embeddings). Dropout applies only when an RNG is supplied.
pub(crate) fn hidden<T: Float>(
    g: &mut Graph<T>,
    w: &Weights,
    cfg: &ModelConfig,
    batch: &Batch,
    upto: usize,
    mut rng: Option<&mut StreamRng>,
) -> Result<Var, ModelError> {
    check_batch(cfg, batch)?;
    if upto > cfg.layers {
        return Err(ModelError::LayerOutOfRange {
            layer: upto,
            layers: cfg.layers,
        });
    }
    let (b, s, h, a) = (batch.batch, batch.seq, cfg.hidden, cfg.heads);
    let dh = cfg.head_dim();
    let eps = cfg.layer_norm_eps;
    let p = cfg.dropout;

    let ids: Vec<usize> = batch.ids.iter().map(|&i| i as usize).collect();
    let positions: Vec<usize> = (0..b).flat_map(|_| 0..s).collect();
    let types: Vec<usize> = batch.type_ids.iter().map(|&i| i as usize).collect();
    let we = g.gather(w.get("word_embeddings")?, &ids)?;
    let pe = g.gather(w.get("position_embeddings")?, &positions)?;
    let te = g.gather(w.get("type_embeddings")?, &types)?;
    let x = g.add(we, pe)?;
    let x = g.add(x, te)?;
    let x = g.layer_norm(x, w.get("embedding_ln.gain")?, w.get("embedding_ln.bias")?, eps)?;
    let mut x = maybe_dropout(g, x, p, &mut rng)?;
    if upto == 0 {
        return Ok(x);
    }

    let penalty = T::lit(MASK_PENALTY);
    let mask = Tensor::from_fn(&[b * a, s, s], |idx| {
        let key = idx % s;
        let row = idx / (s * s) / a;
        if batch.attention[row * s + key] {
            T::zero()
        } else {
            penalty
        }
    });
    let mask = g.constant(mask);
    let scale = 1.0 / (dh as f64).sqrt();

    for l in 0..upto {
        let name = |n: &str| format!("layer.{l}.{n}");
        let split = |g: &mut Graph<T>, proj: &str| -> Result<Var, ModelError> {
            let y = g.linear(x, w.get(&name(&format!("attn.{proj}.weight")))?, w.get(&name(&format!("attn.{proj}.bias")))?)?;
            let y = g.reshape(y, &[b, s, a, dh])?;
            let y = g.permute(y, &[0, 2, 1, 3])?;
            Ok(g.reshape(y, &[b * a, s, dh])?)
        };
        let q = split(g, "query")?;
        let k = split(g, "key")?;
        let v = split(g, "value")?;
        let scores = g.matmul_t(q, k, false, true)?;
        let scores = g.scale(scores, scale)?;
        let scores = g.add(scores, mask)?;
        let probs = g.softmax(scores)?;
        let probs = maybe_dropout(g, probs, p, &mut rng)?;
        let ctx = g.matmul(probs, v)?;
        let ctx = g.reshape(ctx, &[b, a, s, dh])?;
        let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = g.reshape(ctx, &[b * s, h])?;
        let out = g.linear(ctx, w.get(&name("attn.output.weight"))?, w.get(&name("attn.output.bias"))?)?;
        let out = maybe_dropout(g, out, p, &mut rng)?;
        let res = g.add(x, out)?;
        x = g.layer_norm(res, w.get(&name("attn_ln.gain"))?, w.get(&name("attn_ln.bias"))?, eps)?;

        let inner = g.linear(x, w.get(&name("ffn.in.weight"))?, w.get(&name("ffn.in.bias"))?)?;
        let inner = g.gelu(inner)?;
        let out = g.linear(inner, w.get(&name("ffn.out.weight"))?, w.get(&name("ffn.out.bias"))?)?;
        let out = maybe_dropout(g, out, p, &mut rng)?;
        let res = g.add(x, out)?;
        x = g.layer_norm(res, w.get(&name("ffn_ln.gain"))?, w.get(&name("ffn_ln.bias"))?, eps)?;
    }
    Ok(x)
}

/// Vocabulary logits `[n, V]` at the given flat positions: the transform,
/// then the tied decoder (word embeddings transposed) plus output bias.
pub(crate) fn mlm_head<T: Float>(
    g: &mut Graph<T>,
    w: &Weights,
    cfg: &ModelConfig,
    states: Var,
    positions: &[usize],
) -> Result<Var, ModelError> {
    let sel = g.gather(states, positions)?;
    let t = g.linear(sel, w.get("mlm.transform.weight")?, w.get("mlm.transform.bias")?)?;
    let t = g.gelu(t)?;
    let t = g.layer_norm(t, w.get("mlm.ln.gain")?, w.get("mlm.ln.bias")?, cfg.layer_norm_eps)?;
    let logits = g.matmul_t(t, w.get("word_embeddings")?, false, true)?;
    Ok(g.add_row(logits, w.get("mlm.output_bias")?)?)
}

pub(crate) fn pool<T: Float>(g: &mut Graph<T>, w: &Weights, batch: &Batch, states: Var) -> Result<Var, ModelError> {
    let cls: Vec<usize> = (0..batch.batch).map(|r| r * batch.seq).collect();
    let c = g.gather(states, &cls)?;
    let p = g.linear(c, w.get("pooler.weight")?, w.get("pooler.bias")?)?;
    Ok(g.tanh(p)?)
}

/// Mean cross-entropy of the MLM predictions at `positions` (flat indices
/// into the batch) against `targets`.
pub fn mlm_loss<T: Float>(
    g: &mut Graph<T>,
    w: &Weights,
    cfg: &ModelConfig,
    batch: &Batch,
    positions: &[usize],
    targets: &[usize],
    rng: Option<&mut StreamRng>,
) -> Result<Var, ModelError> {
    let states = hidden(g, w, cfg, batch, cfg.layers, rng)?;
    let logits = mlm_head(g, w, cfg, states, positions)?;
    Ok(g.cross_entropy(logits, targets)?)
}

pub enum HeadTargets<'a> {
    Classes(&'a [usize]),
    /// Regression labels already scaled to [0, 1].
    Values(&'a [f64]),
}

/// Task loss on the pooled CLS state. Returns `(loss, outputs)`, outputs
/// being `[batch, n]` logits or `[batch, 1]` predictions.
pub fn task_loss<T: Float>(
    g: &mut Graph<T>,
    w: &Weights,
    cfg: &ModelConfig,
    batch: &Batch,
    targets: HeadTargets,
    rng: Option<&mut StreamRng>,
) -> Result<(Var, Var), ModelError> {
    let states = hidden(g, w, cfg, batch, cfg.layers, rng)?;
    let pooled = pool(g, w, batch, states)?;
    let out = g.linear(pooled, w.get("head.weight")?, w.get("head.bias")?)?;
    let loss = match targets {
        HeadTargets::Classes(t) => g.cross_entropy(out, t)?,
        HeadTargets::Values(v) => {
            let target = g.constant(Tensor::new(vec![v.len(), 1], v.iter().map(|&x| T::lit(x)).collect())?);
            let d = g.sub(out, target)?;
            let sq = g.mul(d, d)?;
            g.mean(sq)?
        }
    };
    Ok((loss, out))
}

fn inference_graph(ck: &Checkpoint) -> (Graph<f32>, Weights) {
    let mut g = Graph::new();
    let mut w = Weights::default();
    w.bind_const(&mut g, &ck.params);
    (g, w)
}

/// Hidden states `[batch, seq, H]` at `layer` with dropout off.
pub fn encode_hidden(ck: &Checkpoint, batch: &Batch, layer: usize) -> Result<Tensor<f32>, ModelError> {
    let (mut g, w) = inference_graph(ck);
    let h = hidden(&mut g, &w, &ck.config, batch, layer, None)?;
    Ok(g.value(h).clone().reshaped(vec![batch.batch, batch.seq, ck.config.hidden])?)
}

/// MLM logits `[n, V]` at flat positions.
pub fn mlm_logits_at(ck: &Checkpoint, batch: &Batch, positions: &[usize]) -> Result<Tensor<f32>, ModelError> {
    let (mut g, w) = inference_graph(ck);
    let h = hidden(&mut g, &w, &ck.config, batch, ck.config.layers, None)?;
    let l = mlm_head(&mut g, &w, &ck.config, h, positions)?;
    Ok(g.value(l).clone())
}

/// MLM logits at every position, `[batch, seq, V]`.
pub fn mlm_logits(ck: &Checkpoint, batch: &Batch) -> Result<Tensor<f32>, ModelError> {
    let all: Vec<usize> = (0..batch.rows()).collect();
    let l = mlm_logits_at(ck, batch, &all)?;
    Ok(l.reshaped(vec![batch.batch, batch.seq, ck.config.vocab_size])?)
}

/// Pooled CLS states `[batch, H]`.
pub fn pooled(ck: &Checkpoint, batch: &Batch) -> Result<Tensor<f32>, ModelError> {
    let (mut g, w) = inference_graph(ck);
    let h = hidden(&mut g, &w, &ck.config, batch, ck.config.layers, None)?;
    let p = pool(&mut g, &w, batch, h)?;
    Ok(g.value(p).clone())
}

/// Head outputs `[batch, n]` with dropout off.
pub fn head_outputs(ck: &Checkpoint, head: &TaskHead, batch: &Batch) -> Result<Tensor<f32>, ModelError> {
    let (mut g, mut w) = inference_graph(ck);
    w.bind_const(&mut g, &head.params);
    let h = hidden(&mut g, &w, &ck.config, batch, ck.config.layers, None)?;
    let p = pool(&mut g, &w, batch, h)?;
    let out = g.linear(p, w.get("head.weight")?, w.get("head.bias")?)?;
    debug_assert_eq!(g.value(out).last_dim(), head.kind.outputs());
    Ok(g.value(out).clone())
}

#[cfg(test)]
mod tests {
    use super::super::init_model;
    use super::*;
    use crate::engine::finite_diff_check;
    use crate::tokenizer::{CLS, SEP};

    fn enc(ids: &[u32]) -> Encoding {
        let mut v = vec![CLS];
        v.extend(ids);
        v.push(SEP);
        Encoding {
            type_ids: vec![0; v.len()],
            word_spans: (1..v.len() - 1).map(|i| (i, i + 1)).collect(),
            words_a: ids.len(),
            ids: v,
        }
    }

    fn tiny() -> ModelConfig {
        ModelConfig::new(50, 16, 2, 2)
    }

    #[test]
    fn layer_zero_of_one_token_is_normalized_embedding_sum() {
        let ck = init_model(&tiny(), 1).unwrap();
        let e = Encoding {
            ids: vec![7],
            type_ids: vec![0],
            word_spans: vec![],
            words_a: 0,
        };
        let b = Batch::from_encodings(&[&e]);
        let h = encode_hidden(&ck, &b, 0).unwrap();
        let p = &ck.params;
        let sum: Vec<f64> = (0..16)
            .map(|j| {
                (p.get("word_embeddings").unwrap().row(7)[j]
                    + p.get("position_embeddings").unwrap().row(0)[j]
                    + p.get("type_embeddings").unwrap().row(0)[j]) as f64
            })
            .collect();
        let mean = sum.iter().sum::<f64>() / 16.0;
        let var = sum.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 16.0;
        for j in 0..16 {
            let expect = (sum[j] - mean) / (var + 1e-12).sqrt();
            assert!((h.data()[j] as f64 - expect).abs() < 1e-4);
        }
    }

    #[test]
    fn pad_invariance() {
        let ck = init_model(&tiny(), 2).unwrap();
        let e = enc(&[5, 9, 11, 6]);
        let short = encode_hidden(&ck, &Batch::padded(&[&e], 6), 2).unwrap();
        let long = encode_hidden(&ck, &Batch::padded(&[&e], 20), 2).unwrap();
        for i in 0..6 * 16 {
            assert!((short.data()[i] - long.data()[i]).abs() < 1e-5);
        }
    }

    #[test]
    fn batch_order_is_respected() {
        let ck = init_model(&tiny(), 3).unwrap();
        let (a, b) = (enc(&[5, 6, 7]), enc(&[8, 9, 10, 11, 12]));
        let ab = encode_hidden(&ck, &Batch::from_encodings(&[&a, &b]), 2).unwrap();
        let ba = encode_hidden(&ck, &Batch::from_encodings(&[&b, &a]), 2).unwrap();
        let n = 7 * 16;
        assert_eq!(&ab.data()[..n], &ba.data()[n..]);
        assert_eq!(&ab.data()[n..], &ba.data()[..n]);
    }

    #[test]
    fn logits_shape_and_tying() {
        let mut ck = init_model(&ModelConfig::new(2000, 16, 1, 2), 4).unwrap();
        let encs: Vec<Encoding> = (0..2).map(|i| enc(&vec![10 + i; 30])).collect();
        let b = Batch::from_encodings(&encs.iter().collect::<Vec<_>>());
        assert_eq!(mlm_logits(&ck, &b).unwrap().shape(), &[2, 32, 2000]);

        // identity transform: logits = LN(gelu(h)) . E^T + 0
        let h = 16;
        let eye = Tensor::from_fn(&[h, h], |i| if i / h == i % h { 1.0 } else { 0.0 });
        ck.params.insert("mlm.transform.weight", eye);
        let small = Batch::from_encodings(&[&encs[0]]);
        let logits = mlm_logits_at(&ck, &small, &[3]).unwrap();
        let states = encode_hidden(&ck, &small, 1).unwrap();
        let x: Vec<f64> = states.data()[3 * h..4 * h].iter().map(|&v| v as f64).collect();
        let gx: Vec<f64> = x
            .iter()
            .map(|&v| 0.5 * v * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (v + 0.044715 * v.powi(3))).tanh()))
            .collect();
        let m = gx.iter().sum::<f64>() / h as f64;
        let var = gx.iter().map(|v| (v - m).powi(2)).sum::<f64>() / h as f64;
        let t: Vec<f64> = gx.iter().map(|v| (v - m) / (var + 1e-12).sqrt()).collect();
        let e = ck.word_embeddings();
        for tok in [0usize, 17, 1999] {
            let expect: f64 = (0..h).map(|j| t[j] * e.row(tok)[j] as f64).sum();
            assert!((logits.row(0)[tok] as f64 - expect).abs() < 1e-4);
        }

        // perturbing the embeddings moves the logits with no other tensor touched
        let before = logits.row(0)[17];
        ck.params.get_mut("word_embeddings").unwrap().data_mut()[17 * h] += 0.5;
        let after = mlm_logits_at(&ck, &small, &[3]).unwrap().row(0)[17];
        assert_ne!(before, after);
    }

    #[test]
    fn too_long_sequence_is_rejected() {
        let mut cfg = tiny();
        cfg.max_positions = 8;
        let ck = init_model(&cfg, 0).unwrap();
        let e = enc(&[5; 10]);
        assert!(matches!(
            encode_hidden(&ck, &Batch::from_encodings(&[&e]), 1),
            Err(ModelError::SequenceTooLong { len: 12, max: 8 })
        ));
    }

    #[test]
    fn mlm_loss_gradients_pass_finite_differences() {
        let ck = init_model(&tiny(), 5).unwrap();
        // a generic point: at the N(0, 0.02) init attention is nearly uniform
        // and some gradients sit below finite-difference resolution
        let mut rng = crate::rng::stream(5, "grad-point", 0);
        let mut params = ck.params.cast::<f64>();
        for (name, t) in params.iter_mut() {
            let base = if name.ends_with(".gain") { 1.0 } else { 0.0 };
            for x in t.data_mut() {
                *x = base + rand::Rng::random_range(&mut rng, -0.5..0.5);
            }
        }
        let encs = [enc(&[5, 6, 7, 8]), enc(&[9, 10])];
        let batch = Batch::from_encodings(&encs.iter().collect::<Vec<_>>());
        let cfg = ck.config.clone();
        let report = finite_diff_check(
            &params,
            |g, vars| {
                let w = Weights::from_vars(&params, vars);
                mlm_loss(g, &w, &cfg, &batch, &[1, 3, 7], &[12, 30, 44], None)
                    .map_err(|e| crate::engine::EngineError::InvalidArgument(e.to_string()))
            },
            1e-5,
            200,
            11,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }
}
