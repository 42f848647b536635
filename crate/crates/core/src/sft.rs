//! Stage 2: fine-tuning on reasoning traces with a four-part objective.
//!
//! Per batch the total is
//! `L_SFT + lambda * L_DPO + mu * L_Quant + delta * L_State`:
//!
//! * `L_SFT` — teacher-forced NLL over the whole label `[think ; target]`
//!   (mean per token; a flag restricts supervision to the target block).
//! * `L_DPO` — preference contrast of the target against an
//!   embedding-similar dispreferred item, where the policy conditions on
//!   the generated think prefix and the frozen direct-decoding reference
//!   conditions on the history alone.
//! * `L_Quant` — two-sided quantization alignment between recomputed
//!   per-step residuals and the frozen pseudo-label embeddings
//!   (stop-gradient placement as in the tokenizer).
//! * `L_State` — in-batch contrastive alignment of per-step states with
//!   target representations, step weights increasing linearly (w_j = j/l).
//!
//! `L_DPO`, `L_Quant`, and `L_State` are reported as per-sample means so
//! batch size does not change their scale.
//!
//! Data collection and optimization run in a staggered loop: annotate the
//! training set with the current model, train for a fixed number of epochs,
//! repeat; the checkpoint with the best validation NDCG@10 is retained.

use crate::annotator::{annotate_all, AnnotatorHeads, ReasoningTrace};
use crate::backbone::{BackboneError, BackboneModel, ReferenceDecoder, BOS, PAD};
use crate::corpus::ItemEmbeddingTable;
use crate::graph::{Graph, NumericsError, Var};
use crate::optim::{AdamWConfig, OptimizerState};
use crate::pretrain::similar_items;
use crate::real::Real;
use crate::rng::{derive, stream};
use crate::tensor::Tensor;
use crate::tokenizer::SemanticIdMap;
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SftError {
    #[error(transparent)]
    Backbone(#[from] BackboneError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("dispreferred sample equals the preferred target")]
    DegeneratePair,
    #[error("non-finite {component} loss at round {round} epoch {epoch}")]
    Diverged {
        component: &'static str,
        round: usize,
        epoch: usize,
    },
}

/// Stage-2 hyperparameters.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SftConfig {
    /// DPO weight.
    pub lambda: f64,
    /// Quantization-loss weight.
    pub mu: f64,
    /// State-contrastive weight.
    pub delta: f64,
    /// Commitment weight inside the quantization loss.
    pub beta_q: f64,
    /// DPO temperature.
    pub beta_dpo: f64,
    /// Reasoning-trace length.
    pub l: usize,
    /// Staggered rounds (annotate + train).
    pub rounds: usize,
    /// Epochs per round.
    pub epochs_per_round: usize,
    /// Dispreferred samples come from this many nearest neighbors.
    pub negatives_pool: usize,
    /// Supervise think tokens in the NLL (otherwise target-only).
    pub supervise_think: bool,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub tau: f64,
    pub seed: u64,
}

impl Default for SftConfig {
    fn default() -> Self {
        SftConfig {
            lambda: 1.0,
            mu: 1.0,
            delta: 0.5,
            beta_q: 0.25,
            beta_dpo: 0.1,
            l: 4,
            rounds: 3,
            epochs_per_round: 10,
            negatives_pool: 20,
            supervise_think: true,
            lr: 1e-3,
            weight_decay: 0.0,
            batch_size: 32,
            tau: 1.0,
            seed: 0,
        }
    }
}

/// Step weights w_1..w_l, linearly increasing and ending at 1.
pub fn step_weights(l: usize) -> Vec<f64> {
    (1..=l).map(|j| j as f64 / l as f64).collect()
}

/// Loss components of one step; `total` is the weighted sum.
#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize)]
pub struct SftLossBreakdown {
    pub nll: f64,
    pub dpo: f64,
    pub quant: f64,
    pub state: f64,
    pub total: f64,
}

/// Scalar DPO core in the softmax-of-two form: the negative log of the
/// preferred side's share of `exp(beta * logit)` mass. Algebraically equal
/// to `-ln sigmoid(beta * (logit_plus - logit_minus))`.
pub fn dpo_loss_value(logit_plus: f64, logit_minus: f64, beta: f64) -> f64 {
    let a = beta * logit_plus;
    let b = beta * logit_minus;
    let m = a.max(b);
    let lse = m + ((a - m).exp() + (b - m).exp()).ln();
    lse - a
}

/// Full DPO loss: policy log-probs condition on history + think, reference
/// log-probs on history alone. Rejects `y_minus == y_plus`.
#[allow(clippy::too_many_arguments)]
pub fn dpo_loss<F: Real>(
    model: &BackboneModel<F>,
    reference: &ReferenceDecoder<F>,
    enc: &crate::backbone::EncodedSnapshot<F>,
    think: &[usize],
    y_plus: &[usize],
    y_minus: &[usize],
    beta: f64,
    tau: f64,
) -> Result<f64, SftError> {
    if y_plus == y_minus {
        return Err(SftError::DegeneratePair);
    }
    let lp_pol_plus = model.log_prob(enc, think, y_plus, tau)?;
    let lp_pol_minus = model.log_prob(enc, think, y_minus, tau)?;
    let lp_ref_plus = reference.log_prob(model, enc, y_plus, tau)?;
    let lp_ref_minus = reference.log_prob(model, enc, y_minus, tau)?;
    Ok(dpo_loss_value(
        lp_pol_plus - lp_ref_plus,
        lp_pol_minus - lp_ref_minus,
        beta,
    ))
}

/// State-target contrastive loss (per-sample mean): for each step j, an
/// in-batch softmax over `s_{i,j} . t_{j'}` with the matching target as the
/// positive, weighted by `w_j`.
///
/// `states[i][j]` is sample i's state after step j+1; `targets[i]` its
/// target representation.
pub fn state_contrastive_loss(states: &[Vec<Vec<f64>>], targets: &[Vec<f64>], w: &[f64]) -> f64 {
    let b = states.len();
    assert!(b >= 1);
    let l = states[0].len();
    assert_eq!(w.len(), l);
    let mut total = 0.0;
    for (j, &wj) in w.iter().enumerate() {
        for i in 0..b {
            let dots: Vec<f64> = (0..b)
                .map(|jp| {
                    states[i][j]
                        .iter()
                        .zip(&targets[jp])
                        .map(|(a, b)| a * b)
                        .sum()
                })
                .collect();
            let max = dots.iter().cloned().fold(f64::MIN, f64::max);
            let lse = max + dots.iter().map(|d| (d - max).exp()).sum::<f64>().ln();
            total -= wj * (dots[i] - lse);
        }
    }
    total / b as f64
}

/// Quantization alignment (per-sample mean): two-sided squared error with
/// stop-gradients, `sum ||sg[r]-o||^2 + beta_q ||r-sg[o]||^2`.
pub fn quantization_loss(residuals: &[Vec<Vec<f64>>], labels: &[Vec<Vec<f64>>], beta_q: f64) -> f64 {
    let b = residuals.len();
    let mut total = 0.0;
    for (rs, os) in residuals.iter().zip(labels) {
        for (r, o) in rs.iter().zip(os) {
            let sq: f64 = r.iter().zip(o).map(|(a, b)| (a - b) * (a - b)).sum();
            total += sq + beta_q * sq;
        }
    }
    total / b as f64
}

/// One fine-tuning example: token-level trace plus the target item index
/// (for negative sampling).
#[derive(Clone, Debug)]
pub struct SftExample {
    pub user: usize,
    pub history: Vec<usize>,
    pub think: Vec<usize>,
    pub target: Vec<usize>,
    pub target_item: usize,
}

impl SftExample {
    pub fn from_trace<F>(trace: &ReasoningTrace<F>, target_item: usize) -> Self {
        SftExample {
            user: trace.user,
            history: trace.history.clone(),
            think: trace.think.clone(),
            target: trace.target.clone(),
            target_item,
        }
    }
}

/// In-graph DPO over per-example policy log-prob vars and frozen reference
/// log-probs; returns the per-sample mean.
pub fn dpo_loss_graph<F: Real>(
    g: &mut Graph<F>,
    lp_pol_plus: Var,
    lp_pol_minus: Var,
    lp_ref_plus: &[f64],
    lp_ref_minus: &[f64],
    beta: f64,
) -> Var {
    let b = lp_ref_plus.len();
    let refp = g.input(Tensor::from_vec(
        &[b],
        lp_ref_plus.iter().map(|&v| F::from_f64(v)).collect(),
    ));
    let refm = g.input(Tensor::from_vec(
        &[b],
        lp_ref_minus.iter().map(|&v| F::from_f64(v)).collect(),
    ));
    let logit_p = g.sub(lp_pol_plus, refp);
    let logit_m = g.sub(lp_pol_minus, refm);
    let a = g.scale(logit_p, F::from_f64(beta));
    let bb = g.scale(logit_m, F::from_f64(beta));
    // Stable logsumexp with a detached elementwise max.
    let m: Vec<F> = g
        .value(a)
        .data()
        .iter()
        .zip(g.value(bb).data())
        .map(|(&x, &y)| x.max(y))
        .collect();
    let m = g.input(Tensor::from_vec(&[b], m));
    let am = g.sub(a, m);
    let bm = g.sub(bb, m);
    let ea = g.exp(am);
    let eb = g.exp(bm);
    let sum = g.add(ea, eb);
    let lg = g.log(sum);
    let lse = g.add(lg, m);
    let per = g.sub(lse, a);
    g.mean_all(per)
}

/// In-graph quantization loss over per-step residual and label-embedding
/// vars (each a list of (B,H) vars); per-sample mean.
pub fn quant_loss_graph<F: Real>(
    g: &mut Graph<F>,
    residuals: &[Var],
    labels: &[Var],
    beta_q: f64,
) -> Var {
    assert_eq!(residuals.len(), labels.len());
    let b = g.shape(residuals[0])[0];
    let mut acc: Option<Var> = None;
    for (&r, &o) in residuals.iter().zip(labels) {
        let r_det = g.detach(r);
        let o_det = g.detach(o);
        let code_term = {
            let d = g.sub(r_det, o);
            let sq = g.sqr(d);
            g.sum_all(sq)
        };
        let commit_term = {
            let d = g.sub(r, o_det);
            let sq = g.sqr(d);
            g.sum_all(sq)
        };
        let commit = g.scale(commit_term, F::from_f64(beta_q));
        let term = g.add(code_term, commit);
        acc = Some(match acc {
            Some(a) => g.add(a, term),
            None => term,
        });
    }
    let total = acc.expect("at least one step");
    g.scale(total, F::from_f64(1.0 / b as f64))
}

/// In-graph state-contrastive loss over per-step state vars (each (B,H))
/// and the target representations (B,H); per-sample mean.
pub fn state_loss_graph<F: Real>(g: &mut Graph<F>, states: &[Var], targets: Var, w: &[f64]) -> Var {
    assert_eq!(states.len(), w.len());
    let b = g.shape(targets)[0];
    let diag: Vec<usize> = (0..b).collect();
    let mut acc: Option<Var> = None;
    for (&s, &wj) in states.iter().zip(w) {
        let logits = g.matmul_nt(s, targets); // (B,B)
        let logp = g.log_softmax_last(logits, F::one());
        let picked = g.pick_per_row(logp, &diag);
        let sum = g.sum_all(picked);
        let neg = g.neg(sum);
        let term = g.scale(neg, F::from_f64(wj));
        acc = Some(match acc {
            Some(a) => g.add(a, term),
            None => term,
        });
    }
    let total = acc.expect("at least one step");
    g.scale(total, F::from_f64(1.0 / b as f64))
}

/// Polled result of one optimization step.
struct StepGraph<F: Real> {
    graph: Graph<F>,
    total: Var,
    breakdown: SftLossBreakdown,
}

/// Builds the full four-loss graph for a batch. `negatives[i]` is the
/// dispreferred item's token sequence for example i.
#[allow(clippy::too_many_arguments)]
fn build_step_graph<F: Real>(
    model: &BackboneModel<F>,
    heads: &AnnotatorHeads<F>,
    reference: &ReferenceDecoder<F>,
    batch: &[&SftExample],
    negatives: &[Vec<usize>],
    config: &SftConfig,
    dropout_rng: &mut Option<&mut crate::rng::Rng>,
) -> Result<StepGraph<F>, SftError> {
    let b = batch.len();
    let l = config.l;
    let hsize = model.config.hidden;
    let vsize = model.vocab.size();
    for (ex, neg) in batch.iter().zip(negatives) {
        if &ex.target == neg {
            return Err(SftError::DegeneratePair);
        }
        assert_eq!(ex.think.len(), l, "trace length mismatch");
    }

    // Frozen reference log-probs, computed outside the training graph.
    let mut lp_ref_plus = Vec::with_capacity(b);
    let mut lp_ref_minus = Vec::with_capacity(b);
    for (ex, neg) in batch.iter().zip(negatives) {
        let enc = model.encode_snapshot(&ex.history)?;
        lp_ref_plus.push(reference.log_prob(model, &enc, &ex.target, config.tau)?);
        lp_ref_minus.push(reference.log_prob(model, &enc, neg, config.tau)?);
    }

    let mut g = Graph::new();
    let hists: Vec<&[usize]> = batch.iter().map(|e| e.history.as_slice()).collect();
    let mut drop: crate::backbone::DropCtx = dropout_rng.as_deref_mut();
    let enc = model.encode_batch(&mut g, &hists, &mut drop)?;

    // Teacher-forced pass over Y = [think ; target].
    let ys: Vec<Vec<usize>> = batch
        .iter()
        .map(|e| {
            let mut y = e.think.clone();
            y.extend_from_slice(&e.target);
            y
        })
        .collect();
    let max_y = ys.iter().map(Vec::len).max().unwrap();
    let rows: Vec<Vec<usize>> = ys
        .iter()
        .map(|y| {
            let mut row = Vec::with_capacity(max_y);
            row.push(BOS);
            row.extend_from_slice(&y[..y.len() - 1]);
            row.resize(max_y, PAD);
            row
        })
        .collect();
    let row_refs: Vec<&[usize]> = rows.iter().map(|r| r.as_slice()).collect();
    let hidden = model.decode_hidden(&mut g, &enc, &row_refs, &mut drop)?;
    let positions: Vec<usize> = (0..max_y).collect();
    let logits = model.logits_at(&mut g, hidden, &positions);
    let flat = g.reshape(logits, &[b * max_y, vsize]);
    let logp = g.log_softmax_last(flat, F::from_f64(config.tau));
    let targets_flat: Vec<usize> = ys
        .iter()
        .flat_map(|y| {
            y.iter()
                .copied()
                .chain(std::iter::repeat(PAD).take(max_y - y.len()))
        })
        .collect();
    let picked = g.pick_per_row(logp, &targets_flat);

    // L_SFT mask: think+target or target-only.
    let mut nll_mask = vec![F::zero(); b * max_y];
    let mut nll_tokens = 0usize;
    for (i, y) in ys.iter().enumerate() {
        let from = if config.supervise_think { 0 } else { l };
        for t in from..y.len() {
            nll_mask[i * max_y + t] = F::one();
            nll_tokens += 1;
        }
    }
    let nll_mask = g.input(Tensor::from_vec(&[b * max_y], nll_mask));
    let nll = {
        let masked = g.mul(picked, nll_mask);
        let sum = g.sum_all(masked);
        let neg = g.neg(sum);
        g.scale(neg, F::from_f64(1.0 / nll_tokens as f64))
    };

    // Policy log-prob of y+ given think: reuse the same pass.
    let mut plus_mask = vec![F::zero(); b * max_y];
    for (i, y) in ys.iter().enumerate() {
        for t in l..y.len() {
            plus_mask[i * max_y + t] = F::one();
        }
    }
    let plus_mask = g.input(Tensor::from_vec(&[b * max_y], plus_mask));
    let lp_pol_plus = {
        let masked = g.mul(picked, plus_mask);
        let grid = g.reshape(masked, &[b, max_y]);
        g.sum_axis(grid, 1)
    };

    // Policy log-prob of y- given think: a second decoder pass.
    let yms: Vec<Vec<usize>> = batch
        .iter()
        .zip(negatives)
        .map(|(e, neg)| {
            let mut y = e.think.clone();
            y.extend_from_slice(neg);
            y
        })
        .collect();
    let max_ym = yms.iter().map(Vec::len).max().unwrap();
    let rows_m: Vec<Vec<usize>> = yms
        .iter()
        .map(|y| {
            let mut row = Vec::with_capacity(max_ym);
            row.push(BOS);
            row.extend_from_slice(&y[..y.len() - 1]);
            row.resize(max_ym, PAD);
            row
        })
        .collect();
    let rows_m_refs: Vec<&[usize]> = rows_m.iter().map(|r| r.as_slice()).collect();
    let hidden_m = model.decode_hidden(&mut g, &enc, &rows_m_refs, &mut drop)?;
    let positions_m: Vec<usize> = (0..max_ym).collect();
    let logits_m = model.logits_at(&mut g, hidden_m, &positions_m);
    let flat_m = g.reshape(logits_m, &[b * max_ym, vsize]);
    let logp_m = g.log_softmax_last(flat_m, F::from_f64(config.tau));
    let targets_m: Vec<usize> = yms
        .iter()
        .flat_map(|y| {
            y.iter()
                .copied()
                .chain(std::iter::repeat(PAD).take(max_ym - y.len()))
        })
        .collect();
    let picked_m = g.pick_per_row(logp_m, &targets_m);
    let mut minus_mask = vec![F::zero(); b * max_ym];
    for (i, y) in yms.iter().enumerate() {
        for t in l..y.len() {
            minus_mask[i * max_ym + t] = F::one();
        }
    }
    let minus_mask = g.input(Tensor::from_vec(&[b * max_ym], minus_mask));
    let lp_pol_minus = {
        let masked = g.mul(picked_m, minus_mask);
        let grid = g.reshape(masked, &[b, max_ym]);
        g.sum_axis(grid, 1)
    };

    let dpo = dpo_loss_graph(
        &mut g,
        lp_pol_plus,
        lp_pol_minus,
        &lp_ref_plus,
        &lp_ref_minus,
        config.beta_dpo,
    );

    // Target representations t_i: masked mean of target-token embeddings.
    let emb = g.param(model.embedding_table());
    let max_tt = batch.iter().map(|e| e.target.len()).max().unwrap();
    let tt_ids: Vec<usize> = batch
        .iter()
        .flat_map(|e| {
            e.target
                .iter()
                .copied()
                .chain(std::iter::repeat(PAD).take(max_tt - e.target.len()))
        })
        .collect();
    let tt = g.embed(emb, &tt_ids, &[b, max_tt]);
    let mut tmask = vec![F::zero(); b * max_tt * hsize];
    let mut tinv = vec![F::zero(); b * hsize];
    for (i, ex) in batch.iter().enumerate() {
        for t in 0..ex.target.len() {
            let base = (i * max_tt + t) * hsize;
            for v in &mut tmask[base..base + hsize] {
                *v = F::one();
            }
        }
        let inv = F::from_f64(1.0 / ex.target.len() as f64);
        for v in &mut tinv[i * hsize..(i + 1) * hsize] {
            *v = inv;
        }
    }
    let tmask = g.input(Tensor::from_vec(&[b, max_tt, hsize], tmask));
    let tinv = g.input(Tensor::from_vec(&[b, hsize], tinv));
    let tt = g.mul(tt, tmask);
    let tt = g.sum_axis(tt, 1);
    let t_rep = g.mul(tt, tinv);

    // Per-step decoder states d_1..d_l from the teacher-forced hidden, and
    // recomputed states/residuals through the heads. d_0 = s_0.
    let mut d_sum = enc.s0;
    let mut states: Vec<Var> = Vec::with_capacity(l); // s_1..s_l
    let mut residuals: Vec<Var> = Vec::with_capacity(l); // r_1..r_l
    let mut prev_state = enc.s0;
    for j in 1..=l {
        let gap = g.sub(t_rep, prev_state);
        residuals.push(heads.residual.forward(&mut g, gap));
        let d_j = {
            let picked = g.gather_time(hidden, &[j]);
            g.reshape(picked, &[b, hsize])
        };
        d_sum = g.add(d_sum, d_j);
        let s_j = heads.state.forward(&mut g, d_sum);
        states.push(s_j);
        prev_state = s_j;
    }

    // Pseudo-label embeddings o_1..o_l.
    let labels: Vec<Var> = (0..l)
        .map(|j| {
            let ids: Vec<usize> = batch.iter().map(|e| e.think[j]).collect();
            g.embed(emb, &ids, &[b])
        })
        .collect();

    let quant = quant_loss_graph(&mut g, &residuals, &labels, config.beta_q);
    let state = state_loss_graph(&mut g, &states, t_rep, &step_weights(l));

    let dpo_w = g.scale(dpo, F::from_f64(config.lambda));
    let quant_w = g.scale(quant, F::from_f64(config.mu));
    let state_w = g.scale(state, F::from_f64(config.delta));
    let total = g.add(nll, dpo_w);
    let total = g.add(total, quant_w);
    let total = g.add(total, state_w);

    let breakdown = SftLossBreakdown {
        nll: g.scalar_value(nll).to_f64(),
        dpo: g.scalar_value(dpo).to_f64(),
        quant: g.scalar_value(quant).to_f64(),
        state: g.scalar_value(state).to_f64(),
        total: g.scalar_value(total).to_f64(),
    };
    Ok(StepGraph {
        graph: g,
        total,
        breakdown,
    })
}

/// One optimization step over a batch of traces: builds the four-loss
/// graph, backpropagates, and applies AdamW to the backbone and heads.
/// Returns the loss breakdown; NaN aborts with component attribution.
#[allow(clippy::too_many_arguments)]
pub fn sft_step<F: Real>(
    model: &mut BackboneModel<F>,
    heads: &mut AnnotatorHeads<F>,
    reference: &ReferenceDecoder<F>,
    batch: &[&SftExample],
    negatives: &[Vec<usize>],
    config: &SftConfig,
    opt: &mut OptimizerState<F>,
    dropout_rng: &mut Option<&mut crate::rng::Rng>,
) -> Result<SftLossBreakdown, SftError> {
    let step = build_step_graph(model, heads, reference, batch, negatives, config, dropout_rng)?;
    let breakdown = step.breakdown;
    for (value, name) in [
        (breakdown.nll, "nll"),
        (breakdown.dpo, "dpo"),
        (breakdown.quant, "quant"),
        (breakdown.state, "state"),
    ] {
        if !value.is_finite() {
            return Err(SftError::Diverged {
                component: name,
                round: 0,
                epoch: 0,
            });
        }
    }
    let g = step.graph;
    let grads = g.backward(step.total);

    let model_named = model.named_params();
    let heads_named = heads.named_params();
    let mut grad_tensors: Vec<Option<Tensor<F>>> = Vec::new();
    // Graph is immutable now; look up leaf vars through a fresh param call
    // on a mutable shadow is not possible, so capture vars by buffer id.
    for (_, t) in model_named.iter().chain(heads_named.iter()) {
        grad_tensors.push(lookup_grad(&g, &grads, t));
    }
    let mut params = model.params_mut();
    params.extend(heads.params_mut());
    let refs: Vec<Option<&Tensor<F>>> = grad_tensors.iter().map(|t| t.as_ref()).collect();
    opt.step(&mut params, &refs)?;
    Ok(breakdown)
}

fn lookup_grad<F: Real>(
    g: &Graph<F>,
    grads: &crate::graph::Grads<F>,
    t: &Tensor<F>,
) -> Option<Tensor<F>> {
    g.find_param(t).and_then(|v| grads.of(v).cloned())
}

/// Per-round log entry of the staggered loop.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SftRoundLog {
    pub round: usize,
    pub skipped_annotations: usize,
    pub epoch_losses: Vec<SftLossBreakdown>,
    pub validation_ndcg10: f64,
}

/// Output of the staggered loop: best checkpoint tensors (model + heads),
/// per-round logs, and each round's trace cache.
pub struct SftOutcome<F: Real> {
    pub best_tensors: HashMap<String, Tensor<F>>,
    pub best_round: usize,
    pub logs: Vec<SftRoundLog>,
    pub round_traces: Vec<Vec<ReasoningTrace<F>>>,
}

/// Item-level training input for annotation.
pub struct SftDataset {
    /// (user, history tokens, target tokens, target item)
    pub examples: Vec<(usize, Vec<usize>, Vec<usize>, usize)>,
}

/// The staggered collect/train loop. `validate` scores the current model
/// (validation NDCG@10); the best-scoring checkpoint, including the
/// pre-training baseline, is retained.
#[allow(clippy::too_many_arguments)]
pub fn staggered_loop<F: Real>(
    model: &mut BackboneModel<F>,
    heads: &mut AnnotatorHeads<F>,
    reference: &ReferenceDecoder<F>,
    dataset: &SftDataset,
    table: &ItemEmbeddingTable,
    map: &SemanticIdMap,
    config: &SftConfig,
    mut validate: impl FnMut(&BackboneModel<F>, &AnnotatorHeads<F>) -> f64,
) -> Result<SftOutcome<F>, SftError> {
    use rand::seq::SliceRandom;
    let vocab = model.vocab.clone();
    let mut logs = Vec::new();
    let mut round_traces = Vec::new();

    let snapshot = |model: &BackboneModel<F>, heads: &AnnotatorHeads<F>| {
        let mut tensors: HashMap<String, Tensor<F>> = model.named_params().into_iter().collect();
        tensors.extend(heads.named_params());
        tensors
    };
    let mut best_score = validate(model, heads);
    let mut best_tensors = snapshot(model, heads);
    let mut best_round = 0usize;

    // Precomputed negative pools per item.
    let mut neg_pools: HashMap<usize, Vec<usize>> = HashMap::new();
    for &(_, _, _, item) in &dataset.examples {
        neg_pools
            .entry(item)
            .or_insert_with(|| similar_items(table, item, config.negatives_pool));
    }

    let mut opt = OptimizerState::new(AdamWConfig {
        lr: config.lr,
        weight_decay: config.weight_decay,
        ..Default::default()
    });

    for round in 1..=config.rounds {
        // Collect fresh traces with the current model.
        let annotate_input: Vec<(usize, Vec<usize>, Vec<usize>)> = dataset
            .examples
            .iter()
            .map(|(u, h, t, _)| (*u, h.clone(), t.clone()))
            .collect();
        let (traces, skipped) = annotate_all(model, heads, &annotate_input, config.l);
        let sft_examples: Vec<SftExample> = traces
            .iter()
            .zip(dataset.examples.iter())
            .map(|(tr, (_, _, _, item))| SftExample::from_trace(tr, *item))
            .collect();

        let mut epoch_losses = Vec::new();
        for epoch in 0..config.epochs_per_round {
            let mut rng = derive(
                config.seed,
                stream::SFT,
                (round * 1000 + epoch) as u64,
            );
            let mut order: Vec<usize> = (0..sft_examples.len()).collect();
            order.shuffle(&mut rng);
            let mut sums = SftLossBreakdown::default();
            let mut batches = 0.0;
            for chunk in order.chunks(config.batch_size) {
                let batch: Vec<&SftExample> = chunk.iter().map(|&i| &sft_examples[i]).collect();
                let negatives: Vec<Vec<usize>> = batch
                    .iter()
                    .map(|ex| {
                        let pool = &neg_pools[&ex.target_item];
                        let pick = pool[rng.gen_range(0..pool.len())];
                        crate::backbone::tokenize_items(&vocab, map, &[pick])
                    })
                    .collect();
                let bd = sft_step(
                    model,
                    heads,
                    reference,
                    &batch,
                    &negatives,
                    config,
                    &mut opt,
                    &mut Some(&mut rng),
                )
                .map_err(|e| match e {
                    SftError::Diverged { component, .. } => SftError::Diverged {
                        component,
                        round,
                        epoch,
                    },
                    other => other,
                })?;
                sums.nll += bd.nll;
                sums.dpo += bd.dpo;
                sums.quant += bd.quant;
                sums.state += bd.state;
                sums.total += bd.total;
                batches += 1.0;
            }
            epoch_losses.push(SftLossBreakdown {
                nll: sums.nll / batches,
                dpo: sums.dpo / batches,
                quant: sums.quant / batches,
                state: sums.state / batches,
                total: sums.total / batches,
            });
        }

        let score = validate(model, heads);
        if score > best_score {
            best_score = score;
            best_tensors = snapshot(model, heads);
            best_round = round;
        }
        logs.push(SftRoundLog {
            round,
            skipped_annotations: skipped,
            epoch_losses,
            validation_ndcg10: score,
        });
        round_traces.push(traces);
    }

    Ok(SftOutcome {
        best_tensors,
        best_round,
        logs,
        round_traces,
    })
}
