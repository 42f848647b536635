//! Encoder-decoder sequence model over the semantic-ID vocabulary, plus the
//! direct-decoding reference used for preference contrast and likelihood
//! regularization.
//!
//! Small pre-layer-norm transformer with learned absolute positions. The
//! reference decoder is a second decoder stack + output head that shares the
//! backbone's encoder and token embeddings (the same tensors, not copies)
//! and is trained only for one-step target generation.

use crate::graph::{softmax_temp, Graph, Var};
use crate::real::Real;
use crate::rng::{derive, stream, Rng};
use crate::tensor::Tensor;
use crate::tokenizer::SemanticId;
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum BackboneError {
    #[error("token {0} outside vocabulary of size {1}")]
    UnknownToken(usize, usize),
    #[error("input is empty or all padding")]
    AllPadding,
    #[error("sequence length {len} exceeds limit {max}")]
    TooLong { len: usize, max: usize },
    #[error("decoder prefix must begin with the begin-of-sequence token")]
    MissingBos,
}

/// Padding token id.
pub const PAD: usize = 0;
/// Begin-of-sequence token id.
pub const BOS: usize = 1;
/// End-of-sequence token id.
pub const EOS: usize = 2;
const SPECIALS: usize = 3;

/// Token-id layout: 3 specials, then m level-wise blocks of K code tokens,
/// then a reserved block for collision disambiguators.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    pub m: usize,
    pub k: usize,
    /// Capacity of the collision-suffix block.
    pub collision_block: usize,
    /// Reasoning tokens alias the code-token blocks (the only supported
    /// mode; kept explicit because the vocabulary layout depends on it).
    pub reasoning_aliased: bool,
}

impl Vocabulary {
    pub fn new(m: usize, k: usize, collision_block: usize) -> Self {
        Vocabulary {
            m,
            k,
            collision_block,
            reasoning_aliased: true,
        }
    }

    pub fn size(&self) -> usize {
        SPECIALS + self.m * self.k + self.collision_block
    }

    /// Token id of code `c` at `level`.
    pub fn code_token(&self, level: usize, code: usize) -> usize {
        assert!(level < self.m && code < self.k);
        SPECIALS + level * self.k + code
    }

    /// Inverse of [`Vocabulary::code_token`].
    pub fn parse_code(&self, token: usize) -> Option<(usize, usize)> {
        let base = SPECIALS;
        let top = base + self.m * self.k;
        if token < base || token >= top {
            return None;
        }
        let off = token - base;
        Some((off / self.k, off % self.k))
    }

    /// True for any code token (the shared vocabulary the reasoning tokens
    /// alias).
    pub fn is_code(&self, token: usize) -> bool {
        self.parse_code(token).is_some()
    }

    /// Range of code-token ids, all levels.
    pub fn code_token_range(&self) -> std::ops::Range<usize> {
        SPECIALS..SPECIALS + self.m * self.k
    }

    pub fn collision_token(&self, order: usize) -> usize {
        assert!(
            order < self.collision_block,
            "collision suffix {order} exceeds reserved block {}",
            self.collision_block
        );
        SPECIALS + self.m * self.k + order
    }

    pub fn parse_collision(&self, token: usize) -> Option<usize> {
        let base = SPECIALS + self.m * self.k;
        if token >= base && token < base + self.collision_block {
            Some(token - base)
        } else {
            None
        }
    }

    /// Token expansion of one item: m level codes plus the collision suffix
    /// when present.
    pub fn item_tokens(&self, id: &SemanticId) -> Vec<usize> {
        let mut out: Vec<usize> = id
            .codes
            .iter()
            .enumerate()
            .map(|(level, &c)| self.code_token(level, c))
            .collect();
        if let Some(d) = id.disambiguator {
            out.push(self.collision_token(d));
        }
        out
    }
}

/// Architecture hyperparameters.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub hidden: usize,
    pub ffn: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub heads: usize,
    pub dropout: f64,
    pub max_enc_positions: usize,
    pub max_dec_positions: usize,
    pub seed: u64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            hidden: 256,
            ffn: 1024,
            enc_layers: 4,
            dec_layers: 4,
            heads: 4,
            dropout: 0.1,
            max_enc_positions: 128,
            max_dec_positions: 24,
            seed: 0,
        }
    }
}

const INIT_STD: f64 = 0.02;
const MASK_NEG: f64 = -1e9;

struct Linear<F: Real> {
    w: Tensor<F>,
    b: Tensor<F>,
}

impl<F: Real> Linear<F> {
    fn new(d_in: usize, d_out: usize, rng: &mut Rng) -> Self {
        Linear {
            w: Tensor::randn(&[d_in, d_out], INIT_STD, rng).with_requires_grad(),
            b: Tensor::zeros(&[d_out]).with_requires_grad(),
        }
    }

    /// Applies to the last axis of a (B,T,H) or (N,H) input.
    fn forward(&self, g: &mut Graph<F>, x: Var) -> Var {
        let w = g.param(&self.w);
        let b = g.param(&self.b);
        let shape = g.shape(x).to_vec();
        if shape.len() == 3 {
            let (bsz, t, h) = (shape[0], shape[1], shape[2]);
            let flat = g.reshape(x, &[bsz * t, h]);
            let y = g.matmul(flat, w);
            let y = g.add_bias(y, b);
            g.reshape(y, &[bsz, t, self.w.shape()[1]])
        } else {
            let y = g.matmul(x, w);
            g.add_bias(y, b)
        }
    }
}

struct Norm<F: Real> {
    gain: Tensor<F>,
    bias: Tensor<F>,
}

impl<F: Real> Norm<F> {
    fn new(h: usize) -> Self {
        Norm {
            gain: Tensor::full(&[h], F::one()).with_requires_grad(),
            bias: Tensor::zeros(&[h]).with_requires_grad(),
        }
    }

    fn forward(&self, g: &mut Graph<F>, x: Var) -> Var {
        let gain = g.param(&self.gain);
        let bias = g.param(&self.bias);
        g.layer_norm(x, gain, bias, F::from_f64(1e-5))
    }
}

struct Attention<F: Real> {
    wq: Linear<F>,
    wk: Linear<F>,
    wv: Linear<F>,
    wo: Linear<F>,
    heads: usize,
}

impl<F: Real> Attention<F> {
    fn new(h: usize, heads: usize, rng: &mut Rng) -> Self {
        Attention {
            wq: Linear::new(h, h, rng),
            wk: Linear::new(h, h, rng),
            wv: Linear::new(h, h, rng),
            wo: Linear::new(h, h, rng),
            heads,
        }
    }

    /// Scaled dot-product attention. `kv` may have batch 1 while `q` is
    /// batched (keys/values are then projected once and tiled). The additive
    /// mask must already be shaped (q_batch*heads, Tq, Tk).
    fn forward(&self, g: &mut Graph<F>, q_in: Var, kv_in: Var, mask: Option<&Tensor<F>>) -> Var {
        let qb = g.shape(q_in)[0];
        let kvb = g.shape(kv_in)[0];
        let dh = g.shape(q_in)[2] / self.heads;
        let q = self.wq.forward(g, q_in);
        let k = self.wk.forward(g, kv_in);
        let v = self.wv.forward(g, kv_in);
        let q = g.split_heads(q, self.heads);
        let mut k = g.split_heads(k, self.heads);
        let mut v = g.split_heads(v, self.heads);
        if kvb == 1 && qb > 1 {
            k = g.repeat_batch(k, qb);
            v = g.repeat_batch(v, qb);
        }
        let scores = g.matmul_nt(q, k);
        let scores = g.scale(scores, F::from_f64(1.0 / (dh as f64).sqrt()));
        let scores = match mask {
            Some(m) => {
                let mv = g.input(m.clone());
                g.add(scores, mv)
            }
            None => scores,
        };
        let attn = g.softmax_last(scores, F::one());
        let out = g.matmul(attn, v);
        let out = g.merge_heads(out, self.heads);
        self.wo.forward(g, out)
    }
}

struct FeedForward<F: Real> {
    lin1: Linear<F>,
    lin2: Linear<F>,
}

impl<F: Real> FeedForward<F> {
    fn new(h: usize, ffn: usize, rng: &mut Rng) -> Self {
        FeedForward {
            lin1: Linear::new(h, ffn, rng),
            lin2: Linear::new(ffn, h, rng),
        }
    }

    fn forward(&self, g: &mut Graph<F>, x: Var) -> Var {
        let h = self.lin1.forward(g, x);
        let h = g.silu(h);
        self.lin2.forward(g, h)
    }
}

struct EncLayer<F: Real> {
    ln1: Norm<F>,
    attn: Attention<F>,
    ln2: Norm<F>,
    ffn: FeedForward<F>,
}

struct DecLayer<F: Real> {
    ln1: Norm<F>,
    self_attn: Attention<F>,
    ln2: Norm<F>,
    cross_attn: Attention<F>,
    ln3: Norm<F>,
    ffn: FeedForward<F>,
}

/// Decoder stack with its own positions and final norm; used by both the
/// backbone decoder and the reference decoder.
struct DecoderStack<F: Real> {
    pos: Tensor<F>,
    layers: Vec<DecLayer<F>>,
    final_ln: Norm<F>,
}

/// Per-forward dropout context: `None` disables dropout (evaluation).
pub type DropCtx<'a> = Option<&'a mut Rng>;

impl<F: Real> DecoderStack<F> {
    fn new(config: &BackboneConfig, rng: &mut Rng) -> Self {
        DecoderStack {
            pos: Tensor::randn(&[config.max_dec_positions, config.hidden], INIT_STD, rng)
                .with_requires_grad(),
            layers: (0..config.dec_layers)
                .map(|_| DecLayer {
                    ln1: Norm::new(config.hidden),
                    self_attn: Attention::new(config.hidden, config.heads, rng),
                    ln2: Norm::new(config.hidden),
                    cross_attn: Attention::new(config.hidden, config.heads, rng),
                    ln3: Norm::new(config.hidden),
                    ffn: FeedForward::new(config.hidden, config.ffn, rng),
                })
                .collect(),
            final_ln: Norm::new(config.hidden),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn forward(
        &self,
        g: &mut Graph<F>,
        embedding: &Tensor<F>,
        rows: &[&[usize]],
        memory: Var,
        memory_lengths: &[usize],
        heads: usize,
        dropout: f64,
        drop: &mut DropCtx,
    ) -> Result<Var, BackboneError> {
        let b = rows.len();
        let t = rows[0].len();
        let vocab_size = embedding.shape()[0];
        for r in rows {
            if r.len() != t {
                // Batched decoding pads to equal length upstream.
                return Err(BackboneError::TooLong {
                    len: r.len(),
                    max: t,
                });
            }
            if r[0] != BOS {
                return Err(BackboneError::MissingBos);
            }
            if let Some(&bad) = r.iter().find(|&&tok| tok >= vocab_size) {
                return Err(BackboneError::UnknownToken(bad, vocab_size));
            }
        }
        if t > self.pos.shape()[0] {
            return Err(BackboneError::TooLong {
                len: t,
                max: self.pos.shape()[0],
            });
        }

        let ids: Vec<usize> = rows.iter().flat_map(|r| r.iter().copied()).collect();
        let emb = g.param(embedding);
        let x = g.embed(emb, &ids, &[b, t]);
        let posp = g.param(&self.pos);
        let pos_ids: Vec<usize> = (0..b).flat_map(|_| 0..t).collect();
        let pos = g.embed(posp, &pos_ids, &[b, t]);
        let mut x = g.add(x, pos);
        x = apply_dropout(g, x, dropout, drop);

        let causal = causal_mask::<F>(b * heads, t);
        let enc_b = g.shape(memory)[0];
        let mem_t = g.shape(memory)[1];
        let cross = cross_mask::<F>(b, heads, t, mem_t, memory_lengths, enc_b);

        for layer in &self.layers {
            let n = layer.ln1.forward(g, x);
            let a = layer.self_attn.forward(g, n, n, Some(&causal));
            let a = apply_dropout(g, a, dropout, drop);
            x = g.add(x, a);
            let n = layer.ln2.forward(g, x);
            let c = layer.cross_attn.forward(g, n, memory, Some(&cross));
            let c = apply_dropout(g, c, dropout, drop);
            x = g.add(x, c);
            let n = layer.ln3.forward(g, x);
            let f = layer.ffn.forward(g, n);
            let f = apply_dropout(g, f, dropout, drop);
            x = g.add(x, f);
        }
        Ok(self.final_ln.forward(g, x))
    }

    fn named_params(&self, prefix: &str, out: &mut Vec<(String, Tensor<F>)>) {
        out.push((format!("{prefix}.pos"), self.pos.clone()));
        for (i, l) in self.layers.iter().enumerate() {
            let p = format!("{prefix}.layer{i}");
            push_norm(&format!("{p}.ln1"), &l.ln1, out);
            push_attn(&format!("{p}.self_attn"), &l.self_attn, out);
            push_norm(&format!("{p}.ln2"), &l.ln2, out);
            push_attn(&format!("{p}.cross_attn"), &l.cross_attn, out);
            push_norm(&format!("{p}.ln3"), &l.ln3, out);
            push_linear(&format!("{p}.ffn1"), &l.ffn.lin1, out);
            push_linear(&format!("{p}.ffn2"), &l.ffn.lin2, out);
        }
        push_norm(&format!("{prefix}.final_ln"), &self.final_ln, out);
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor<F>> {
        let mut v: Vec<&mut Tensor<F>> = vec![&mut self.pos];
        for l in &mut self.layers {
            v.push(&mut l.ln1.gain);
            v.push(&mut l.ln1.bias);
            v.extend(attn_params_mut(&mut l.self_attn));
            v.push(&mut l.ln2.gain);
            v.push(&mut l.ln2.bias);
            v.extend(attn_params_mut(&mut l.cross_attn));
            v.push(&mut l.ln3.gain);
            v.push(&mut l.ln3.bias);
            v.push(&mut l.ffn.lin1.w);
            v.push(&mut l.ffn.lin1.b);
            v.push(&mut l.ffn.lin2.w);
            v.push(&mut l.ffn.lin2.b);
        }
        v.push(&mut self.final_ln.gain);
        v.push(&mut self.final_ln.bias);
        v
    }
}

fn attn_params_mut<F: Real>(a: &mut Attention<F>) -> Vec<&mut Tensor<F>> {
    vec![
        &mut a.wq.w,
        &mut a.wq.b,
        &mut a.wk.w,
        &mut a.wk.b,
        &mut a.wv.w,
        &mut a.wv.b,
        &mut a.wo.w,
        &mut a.wo.b,
    ]
}

fn push_linear<F: Real>(prefix: &str, l: &Linear<F>, out: &mut Vec<(String, Tensor<F>)>) {
    out.push((format!("{prefix}.w"), l.w.clone()));
    out.push((format!("{prefix}.b"), l.b.clone()));
}

fn push_norm<F: Real>(prefix: &str, n: &Norm<F>, out: &mut Vec<(String, Tensor<F>)>) {
    out.push((format!("{prefix}.gain"), n.gain.clone()));
    out.push((format!("{prefix}.bias"), n.bias.clone()));
}

fn push_attn<F: Real>(prefix: &str, a: &Attention<F>, out: &mut Vec<(String, Tensor<F>)>) {
    push_linear(&format!("{prefix}.wq"), &a.wq, out);
    push_linear(&format!("{prefix}.wk"), &a.wk, out);
    push_linear(&format!("{prefix}.wv"), &a.wv, out);
    push_linear(&format!("{prefix}.wo"), &a.wo, out);
}

fn apply_dropout<F: Real>(g: &mut Graph<F>, x: Var, p: f64, drop: &mut DropCtx) -> Var {
    match drop {
        Some(rng) => g.dropout(x, p, rng),
        None => x,
    }
}

fn causal_mask<F: Real>(batch: usize, t: usize) -> Tensor<F> {
    let neg = F::from_f64(MASK_NEG);
    let mut data = vec![F::zero(); batch * t * t];
    for b in 0..batch {
        for q in 0..t {
            for k in (q + 1)..t {
                data[(b * t + q) * t + k] = neg;
            }
        }
    }
    Tensor::from_vec(&[batch, t, t], data)
}

/// Mask padding keys of the memory; `enc_b == 1` broadcasts one user's
/// memory across the decode batch.
fn cross_mask<F: Real>(
    b: usize,
    heads: usize,
    tq: usize,
    tk: usize,
    lengths: &[usize],
    enc_b: usize,
) -> Tensor<F> {
    let neg = F::from_f64(MASK_NEG);
    let mut data = vec![F::zero(); b * heads * tq * tk];
    for bi in 0..b {
        let len = lengths[if enc_b == 1 { 0 } else { bi }];
        for h in 0..heads {
            for q in 0..tq {
                for k in len..tk {
                    data[((bi * heads + h) * tq + q) * tk + k] = neg;
                }
            }
        }
    }
    Tensor::from_vec(&[b * heads, tq, tk], data)
}

fn key_pad_mask<F: Real>(heads: usize, t: usize, lengths: &[usize]) -> Tensor<F> {
    let neg = F::from_f64(MASK_NEG);
    let b = lengths.len();
    let mut data = vec![F::zero(); b * heads * t * t];
    for (bi, &len) in lengths.iter().enumerate() {
        for h in 0..heads {
            for q in 0..t {
                for k in len..t {
                    data[((bi * heads + h) * t + q) * t + k] = neg;
                }
            }
        }
    }
    Tensor::from_vec(&[b * heads, t, t], data)
}

/// Graph-tied encoder output: per-position memory, masked-mean initial
/// state, and the true (unpadded) lengths.
pub struct Encoded {
    pub memory: Var,
    pub s0: Var,
    pub lengths: Vec<usize>,
}

/// Detached encoder output, reusable across later graphs (generation,
/// evaluation).
#[derive(Clone, Debug)]
pub struct EncodedSnapshot<F: Real> {
    pub memory: Tensor<F>,
    pub s0: Tensor<F>,
    pub lengths: Vec<usize>,
}

impl<F: Real> EncodedSnapshot<F> {
    pub fn bind(&self, g: &mut Graph<F>) -> Encoded {
        Encoded {
            memory: g.input(self.memory.clone()),
            s0: g.input(self.s0.clone()),
            lengths: self.lengths.clone(),
        }
    }
}

/// The sequence backbone.
pub struct BackboneModel<F: Real> {
    pub vocab: Vocabulary,
    pub config: BackboneConfig,
    embedding: Tensor<F>,
    enc_pos: Tensor<F>,
    enc_layers: Vec<EncLayer<F>>,
    enc_final_ln: Norm<F>,
    decoder: DecoderStack<F>,
    out_proj: Linear<F>,
}

/// Decoder + head sharing the backbone's encoder and embeddings, trained
/// for one-step target generation.
pub struct ReferenceDecoder<F: Real> {
    decoder: DecoderStack<F>,
    out_proj: Linear<F>,
}

/// Decoding strategy for [`BackboneModel::generate`].
#[derive(Clone, Copy, Debug)]
pub enum GenerateMode {
    Greedy,
    Sample { tau: f64 },
    Beam { width: usize },
}

impl<F: Real> BackboneModel<F> {
    pub fn new(vocab: Vocabulary, config: BackboneConfig) -> Self {
        let mut rng = derive(config.seed, stream::BACKBONE_INIT, 0);
        let h = config.hidden;
        let embedding = Tensor::randn(&[vocab.size(), h], INIT_STD, &mut rng).with_requires_grad();
        let enc_pos =
            Tensor::randn(&[config.max_enc_positions, h], INIT_STD, &mut rng).with_requires_grad();
        let enc_layers = (0..config.enc_layers)
            .map(|_| EncLayer {
                ln1: Norm::new(h),
                attn: Attention::new(h, config.heads, &mut rng),
                ln2: Norm::new(h),
                ffn: FeedForward::new(h, config.ffn, &mut rng),
            })
            .collect();
        let enc_final_ln = Norm::new(h);
        let decoder = DecoderStack::new(&config, &mut rng);
        let out_proj = Linear::new(h, vocab.size(), &mut rng);
        BackboneModel {
            vocab,
            config,
            embedding,
            enc_pos,
            enc_layers,
            enc_final_ln,
            decoder,
            out_proj,
        }
    }

    /// Embedding row of a token, as a plain tensor.
    pub fn token_embedding(&self, token: usize) -> Vec<F> {
        self.embedding.row(token).to_vec()
    }

    pub fn embedding_table(&self) -> &Tensor<F> {
        &self.embedding
    }

    /// Encodes a batch of histories into memory states and the pooled
    /// initial state s0 (masked mean over non-pad positions).
    pub fn encode_batch(
        &self,
        g: &mut Graph<F>,
        histories: &[&[usize]],
        drop: &mut DropCtx,
    ) -> Result<Encoded, BackboneError> {
        let b = histories.len();
        assert!(b > 0, "empty batch");
        let mut lengths = Vec::with_capacity(b);
        for hist in histories {
            let len = hist.iter().filter(|&&t| t != PAD).count();
            if len == 0 {
                return Err(BackboneError::AllPadding);
            }
            if hist.iter().any(|&t| t == PAD) && hist.iter().take(len).any(|&t| t == PAD) {
                // Mixed padding inside the live prefix is a caller bug;
                // treat trailing padding as the only valid form.
                return Err(BackboneError::AllPadding);
            }
            if let Some(&bad) = hist.iter().find(|&&t| t >= self.vocab.size()) {
                return Err(BackboneError::UnknownToken(bad, self.vocab.size()));
            }
            if hist.len() > self.config.max_enc_positions {
                return Err(BackboneError::TooLong {
                    len: hist.len(),
                    max: self.config.max_enc_positions,
                });
            }
            lengths.push(len);
        }
        let t = histories.iter().map(|h| h.len()).max().unwrap();
        let ids: Vec<usize> = histories
            .iter()
            .flat_map(|h| {
                h.iter()
                    .copied()
                    .chain(std::iter::repeat(PAD).take(t - h.len()))
            })
            .collect();

        let emb = g.param(&self.embedding);
        let x = g.embed(emb, &ids, &[b, t]);
        let posp = g.param(&self.enc_pos);
        let pos_ids: Vec<usize> = (0..b).flat_map(|_| 0..t).collect();
        let pos = g.embed(posp, &pos_ids, &[b, t]);
        let mut x = g.add(x, pos);
        x = apply_dropout(g, x, self.config.dropout, drop);

        let mask = key_pad_mask::<F>(self.config.heads, t, &lengths);
        for layer in &self.enc_layers {
            let n = layer.ln1.forward(g, x);
            let a = layer.attn.forward(g, n, n, Some(&mask));
            let a = apply_dropout(g, a, self.config.dropout, drop);
            x = g.add(x, a);
            let n = layer.ln2.forward(g, x);
            let f = layer.ffn.forward(g, n);
            let f = apply_dropout(g, f, self.config.dropout, drop);
            x = g.add(x, f);
        }
        let memory = self.enc_final_ln.forward(g, x);

        // Masked mean pooling for s0.
        let h = self.config.hidden;
        let mut mask_data = vec![F::zero(); b * t * h];
        for (bi, &len) in lengths.iter().enumerate() {
            for ti in 0..len {
                let base = (bi * t + ti) * h;
                for v in &mut mask_data[base..base + h] {
                    *v = F::one();
                }
            }
        }
        let mask = g.input(Tensor::from_vec(&[b, t, h], mask_data));
        let masked = g.mul(memory, mask);
        let summed = g.sum_axis(masked, 1);
        let mut inv = vec![F::zero(); b * h];
        for (bi, &len) in lengths.iter().enumerate() {
            let v = F::from_f64(1.0 / len as f64);
            for x in &mut inv[bi * h..(bi + 1) * h] {
                *x = v;
            }
        }
        let inv = g.input(Tensor::from_vec(&[b, h], inv));
        let s0 = g.mul(summed, inv);

        Ok(Encoded {
            memory,
            s0,
            lengths,
        })
    }

    /// Convenience: encode one history and snapshot the result.
    pub fn encode_snapshot(&self, history: &[usize]) -> Result<EncodedSnapshot<F>, BackboneError> {
        let mut g = Graph::inference();
        let enc = self.encode_batch(&mut g, &[history], &mut None)?;
        Ok(EncodedSnapshot {
            memory: g.value(enc.memory).clone(),
            s0: g.value(enc.s0).clone(),
            lengths: enc.lengths,
        })
    }

    /// Decoder hidden states (top layer, after the final norm) for a batch
    /// of BOS-prefixed rows against an encoded memory. All rows must share
    /// one length; pad shorter rows with PAD upstream and mask downstream.
    pub fn decode_hidden(
        &self,
        g: &mut Graph<F>,
        enc: &Encoded,
        rows: &[&[usize]],
        drop: &mut DropCtx,
    ) -> Result<Var, BackboneError> {
        self.decoder.forward(
            g,
            &self.embedding,
            rows,
            enc.memory,
            &enc.lengths,
            self.config.heads,
            self.config.dropout,
            drop,
        )
    }

    /// Vocabulary logits at the given time positions of a hidden batch.
    pub fn logits_at(&self, g: &mut Graph<F>, hidden: Var, positions: &[usize]) -> Var {
        let picked = g.gather_time(hidden, positions);
        self.out_proj.forward(g, picked)
    }

    /// Per-position vocabulary logits for a single teacher-forced prefix;
    /// position t depends only on prefix tokens at or before t (causal
    /// masking) and the memory.
    pub fn decode_logits(
        &self,
        enc: &EncodedSnapshot<F>,
        prefix: &[usize],
    ) -> Result<Tensor<F>, BackboneError> {
        let mut g = Graph::inference();
        let bound = enc.bind(&mut g);
        let hidden = self.decode_hidden(&mut g, &bound, &[prefix], &mut None)?;
        let positions: Vec<usize> = (0..prefix.len()).collect();
        let logits = self.logits_at(&mut g, hidden, &positions);
        let v = g.value(logits);
        Ok(v.reshaped(&[prefix.len(), self.vocab.size()]))
    }

    /// Autoregressive generation from an encoded history. Stops at EOS or
    /// `max_len` generated tokens. Greedy picks the argmax (lowest id on
    /// ties), sampling uses the temperature softmax with the given RNG, and
    /// beam returns the best of `width` beams by total log-probability.
    pub fn generate(
        &self,
        enc: &EncodedSnapshot<F>,
        mode: GenerateMode,
        max_len: usize,
        rng: &mut Rng,
    ) -> Vec<usize> {
        match mode {
            GenerateMode::Greedy => self.generate_greedy_or_sample(enc, None, max_len, rng),
            GenerateMode::Sample { tau } => {
                self.generate_greedy_or_sample(enc, Some(tau), max_len, rng)
            }
            GenerateMode::Beam { width } => self
                .beam_search(enc, width, max_len)
                .into_iter()
                .next()
                .map(|(toks, _)| toks)
                .unwrap_or_default(),
        }
    }

    fn generate_greedy_or_sample(
        &self,
        enc: &EncodedSnapshot<F>,
        tau: Option<f64>,
        max_len: usize,
        rng: &mut Rng,
    ) -> Vec<usize> {
        let mut tokens = vec![BOS];
        let mut out = Vec::new();
        while out.len() < max_len {
            let logits = self
                .decode_logits(enc, &tokens)
                .expect("generation prefix within limits");
            let last = logits.row(tokens.len() - 1);
            let next = match tau {
                None => argmax(last),
                Some(tau) => {
                    let probs = softmax_temp(last, F::from_f64(tau))
                        .expect("finite logits during sampling");
                    sample_index(&probs, rng)
                }
            };
            if next == EOS {
                break;
            }
            tokens.push(next);
            out.push(next);
        }
        out
    }

    /// Beam search; returns up to `width` (tokens, total log-prob) pairs
    /// sorted by descending score. `beam(1)` coincides with greedy.
    pub fn beam_search(
        &self,
        enc: &EncodedSnapshot<F>,
        width: usize,
        max_len: usize,
    ) -> Vec<(Vec<usize>, f64)> {
        assert!(width >= 1);
        #[derive(Clone)]
        struct Beam {
            tokens: Vec<usize>,
            score: f64,
            finished: bool,
        }
        let mut beams = vec![Beam {
            tokens: Vec::new(),
            score: 0.0,
            finished: false,
        }];
        for _ in 0..max_len {
            if beams.iter().all(|b| b.finished) {
                break;
            }
            let mut candidates: Vec<Beam> = Vec::new();
            for beam in &beams {
                if beam.finished {
                    candidates.push(beam.clone());
                    continue;
                }
                let mut prefix = vec![BOS];
                prefix.extend(&beam.tokens);
                let logits = self
                    .decode_logits(enc, &prefix)
                    .expect("beam prefix within limits");
                let last = logits.row(prefix.len() - 1);
                let logp = log_softmax_row(last);
                // Expanding by the top `width` continuations is sufficient.
                let mut idx: Vec<usize> = (0..logp.len()).collect();
                idx.sort_by(|&a, &b| logp[b].partial_cmp(&logp[a]).unwrap().then(a.cmp(&b)));
                for &tok in idx.iter().take(width) {
                    let mut tokens = beam.tokens.clone();
                    let mut finished = false;
                    if tok == EOS {
                        finished = true;
                    } else {
                        tokens.push(tok);
                    }
                    candidates.push(Beam {
                        tokens,
                        score: beam.score + logp[tok],
                        finished,
                    });
                }
            }
            candidates.sort_by(|a, b| {
                b.score
                    .partial_cmp(&a.score)
                    .unwrap()
                    .then(a.tokens.cmp(&b.tokens))
            });
            candidates.truncate(width);
            for c in &mut candidates {
                if c.tokens.len() >= max_len {
                    c.finished = true;
                }
            }
            beams = candidates;
        }
        beams
            .into_iter()
            .map(|b| (b.tokens, b.score))
            .collect()
    }

    /// Sum of temperature log-softmax probabilities of `target` conditioned
    /// on the history memory and an optional in-decoder prefix.
    pub fn log_prob(
        &self,
        enc: &EncodedSnapshot<F>,
        prefix: &[usize],
        target: &[usize],
        tau: f64,
    ) -> Result<f64, BackboneError> {
        assert!(!target.is_empty(), "log_prob of empty target");
        let mut row = vec![BOS];
        row.extend_from_slice(prefix);
        row.extend_from_slice(&target[..target.len() - 1]);
        let mut g = Graph::inference();
        let bound = enc.bind(&mut g);
        let hidden = self.decode_hidden(&mut g, &bound, &[row.as_slice()], &mut None)?;
        let positions: Vec<usize> = (prefix.len()..prefix.len() + target.len()).collect();
        let logits = self.logits_at(&mut g, hidden, &positions);
        let flat = g.reshape(logits, &[target.len(), self.vocab.size()]);
        let logp = g.log_softmax_last(flat, F::from_f64(tau));
        let picked = g.pick_per_row(logp, target);
        let total = g.sum_all(picked);
        Ok(g.scalar_value(total).to_f64())
    }

    pub fn named_params(&self) -> Vec<(String, Tensor<F>)> {
        let mut out = vec![
            ("embedding".to_string(), self.embedding.clone()),
            ("enc.pos".to_string(), self.enc_pos.clone()),
        ];
        for (i, l) in self.enc_layers.iter().enumerate() {
            let p = format!("enc.layer{i}");
            push_norm(&format!("{p}.ln1"), &l.ln1, &mut out);
            push_attn(&format!("{p}.attn"), &l.attn, &mut out);
            push_norm(&format!("{p}.ln2"), &l.ln2, &mut out);
            push_linear(&format!("{p}.ffn1"), &l.ffn.lin1, &mut out);
            push_linear(&format!("{p}.ffn2"), &l.ffn.lin2, &mut out);
        }
        push_norm("enc.final_ln", &self.enc_final_ln, &mut out);
        self.decoder.named_params("dec", &mut out);
        push_linear("out_proj", &self.out_proj, &mut out);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<F>> {
        let mut v: Vec<&mut Tensor<F>> = vec![&mut self.embedding, &mut self.enc_pos];
        for l in &mut self.enc_layers {
            v.push(&mut l.ln1.gain);
            v.push(&mut l.ln1.bias);
            v.extend(attn_params_mut(&mut l.attn));
            v.push(&mut l.ln2.gain);
            v.push(&mut l.ln2.bias);
            v.push(&mut l.ffn.lin1.w);
            v.push(&mut l.ffn.lin1.b);
            v.push(&mut l.ffn.lin2.w);
            v.push(&mut l.ffn.lin2.b);
        }
        v.push(&mut self.enc_final_ln.gain);
        v.push(&mut self.enc_final_ln.bias);
        v.extend(self.decoder.params_mut());
        v.push(&mut self.out_proj.w);
        v.push(&mut self.out_proj.b);
        v
    }

    /// Encoder-only parameters (used to optionally freeze them in RL).
    pub fn encoder_param_count(&self) -> usize {
        // embedding + enc_pos + per-layer (2 norms * 2 + attn 8 + ffn 4) + final norm
        2 + self.enc_layers.len() * (2 + 8 + 2 + 4) + 2
    }

    /// Loads named tensors (from a checkpoint) into the model.
    pub fn load_named(&mut self, tensors: &std::collections::HashMap<String, Tensor<F>>) {
        let names: Vec<String> = self.named_params().into_iter().map(|(n, _)| n).collect();
        for (name, slot) in names.iter().zip(self.params_mut()) {
            let t = tensors
                .get(name)
                .unwrap_or_else(|| panic!("checkpoint misses tensor {name}"));
            assert_eq!(t.shape(), slot.shape(), "shape mismatch for {name}");
            let rg = slot.requires_grad();
            *slot = t.clone();
            slot.set_requires_grad(rg);
        }
    }
}

impl<F: Real> ReferenceDecoder<F> {
    /// Builds the reference decoder for a backbone; it owns only its decoder
    /// stack and head, everything else is read from the backbone.
    pub fn new(backbone: &BackboneModel<F>) -> Self {
        let mut rng = derive(backbone.config.seed, stream::BACKBONE_INIT, 1);
        ReferenceDecoder {
            decoder: DecoderStack::new(&backbone.config, &mut rng),
            out_proj: Linear::new(
                backbone.config.hidden,
                backbone.vocab.size(),
                &mut rng,
            ),
        }
    }

    pub fn decode_hidden(
        &self,
        g: &mut Graph<F>,
        backbone: &BackboneModel<F>,
        enc: &Encoded,
        rows: &[&[usize]],
        drop: &mut DropCtx,
    ) -> Result<Var, BackboneError> {
        self.decoder.forward(
            g,
            &backbone.embedding,
            rows,
            enc.memory,
            &enc.lengths,
            backbone.config.heads,
            backbone.config.dropout,
            drop,
        )
    }

    pub fn logits_at(&self, g: &mut Graph<F>, hidden: Var, positions: &[usize]) -> Var {
        let picked = g.gather_time(hidden, positions);
        self.out_proj.forward(g, picked)
    }

    /// One-step conditional log-probability of `target` given the history
    /// memory only (no reasoning prefix).
    pub fn log_prob(
        &self,
        backbone: &BackboneModel<F>,
        enc: &EncodedSnapshot<F>,
        target: &[usize],
        tau: f64,
    ) -> Result<f64, BackboneError> {
        assert!(!target.is_empty());
        let mut row = vec![BOS];
        row.extend_from_slice(&target[..target.len() - 1]);
        let mut g = Graph::inference();
        let bound = enc.bind(&mut g);
        let hidden = self.decode_hidden(&mut g, backbone, &bound, &[row.as_slice()], &mut None)?;
        let positions: Vec<usize> = (0..target.len()).collect();
        let logits = self.logits_at(&mut g, hidden, &positions);
        let flat = g.reshape(logits, &[target.len(), backbone.vocab.size()]);
        let logp = g.log_softmax_last(flat, F::from_f64(tau));
        let picked = g.pick_per_row(logp, target);
        let total = g.sum_all(picked);
        Ok(g.scalar_value(total).to_f64())
    }

    pub fn named_params(&self) -> Vec<(String, Tensor<F>)> {
        let mut out = Vec::new();
        self.decoder.named_params("ref.dec", &mut out);
        push_linear("ref.out_proj", &self.out_proj, &mut out);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<F>> {
        let mut v = self.decoder.params_mut();
        v.push(&mut self.out_proj.w);
        v.push(&mut self.out_proj.b);
        v
    }

    pub fn load_named(&mut self, tensors: &std::collections::HashMap<String, Tensor<F>>) {
        let names: Vec<String> = self.named_params().into_iter().map(|(n, _)| n).collect();
        for (name, slot) in names.iter().zip(self.params_mut()) {
            let t = tensors
                .get(name)
                .unwrap_or_else(|| panic!("checkpoint misses tensor {name}"));
            assert_eq!(t.shape(), slot.shape(), "shape mismatch for {name}");
            let rg = slot.requires_grad();
            *slot = t.clone();
            slot.set_requires_grad(rg);
        }
    }
}

/// Token expansion of an item-index sequence through the semantic-ID map.
pub fn tokenize_items(
    vocab: &Vocabulary,
    map: &crate::tokenizer::SemanticIdMap,
    items: &[usize],
) -> Vec<usize> {
    items
        .iter()
        .flat_map(|&i| vocab.item_tokens(&map.ids[i]))
        .collect()
}

/// Parses the trailing item token block of a sequence: m codes, or m codes
/// plus a collision suffix when the tuple is ambiguous. Returns the item
/// index and how many tokens the block used.
pub fn parse_item_suffix(
    vocab: &Vocabulary,
    map: &crate::tokenizer::SemanticIdMap,
    tokens: &[usize],
) -> Option<(usize, usize)> {
    let m = vocab.m;
    if tokens.len() >= m {
        let tail = &tokens[tokens.len() - m..];
        if let Some(codes) = parse_level_codes(vocab, tail) {
            if let Some(item) = map.resolve(&codes, None) {
                return Some((item, m));
            }
        }
    }
    if tokens.len() >= m + 1 {
        let tail = &tokens[tokens.len() - m - 1..];
        let suffix = vocab.parse_collision(tail[m])?;
        let codes = parse_level_codes(vocab, &tail[..m])?;
        if let Some(item) = map.resolve(&codes, Some(suffix)) {
            return Some((item, m + 1));
        }
    }
    None
}

/// Level-checked code parse: token j must come from level-j's block.
pub fn parse_level_codes(vocab: &Vocabulary, tokens: &[usize]) -> Option<Vec<usize>> {
    if tokens.len() != vocab.m {
        return None;
    }
    let mut codes = Vec::with_capacity(vocab.m);
    for (level, &tok) in tokens.iter().enumerate() {
        let (l, c) = vocab.parse_code(tok)?;
        if l != level {
            return None;
        }
        codes.push(c);
    }
    Some(codes)
}

/// Argmax with lowest index on ties.
pub fn argmax<F: Real>(row: &[F]) -> usize {
    let mut best = 0;
    let mut best_v = row[0];
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > best_v {
            best_v = v;
            best = i;
        }
    }
    best
}

fn log_softmax_row<F: Real>(row: &[F]) -> Vec<f64> {
    let max = row.iter().copied().fold(row[0], F::max).to_f64();
    let sum: f64 = row.iter().map(|&v| (v.to_f64() - max).exp()).sum();
    let lse = max + sum.ln();
    row.iter().map(|&v| v.to_f64() - lse).collect()
}

fn sample_index<F: Real>(probs: &[F], rng: &mut Rng) -> usize {
    let draw: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p.to_f64();
        if draw < acc {
            return i;
        }
    }
    probs.len() - 1
}
