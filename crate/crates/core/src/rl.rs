//! Stage 3: group-relative policy optimization with a five-part reward.
//!
//! For each prompt, G rollouts are sampled from a frozen snapshot of the
//! policy. Every rollout is scored by the sum of five rewards — format,
//! exact match, batch similarity, likelihood (against the frozen direct
//! decoder), and ranking against embedding-similar negatives — and group
//! advantages are the rewards standardized within the group. One ascent
//! step maximizes the clipped surrogate minus a KL penalty against a
//! reference policy, estimated per token by `r - ln r - 1` with
//! `r = pi_ref / pi_theta`.
//!
//! All log-probabilities entering the objective use the model's canonical
//! temperature-1 distribution; the sampling temperature is an exploration
//! knob only.

use crate::backbone::{
    parse_level_codes, tokenize_items, BackboneError, BackboneModel, GenerateMode,
    ReferenceDecoder, BOS, PAD,
};
use crate::corpus::ItemEmbeddingTable;
use crate::graph::{Graph, NumericsError};
use crate::optim::OptimizerState;
use crate::pretrain::similar_items;
use crate::real::Real;
use crate::rng::{derive, stream};
use crate::tensor::{cosine, Tensor};
use crate::tokenizer::SemanticIdMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum RlError {
    #[error(transparent)]
    Backbone(#[from] BackboneError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("ranking reward needs at least 10 negatives, got {0}")]
    TooFewNegatives(usize),
    #[error("generated and target token blocks differ in length: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("clip epsilon must lie in (0,1), got {0}")]
    BadClip(f64),
}

/// Stage-3 hyperparameters.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RlConfig {
    /// Rollouts per prompt (G).
    pub group_size: usize,
    pub clip_eps: f64,
    pub beta_kl: f64,
    /// Rollout sampling temperature.
    pub temperature: f64,
    /// Hard negatives for the ranking reward (K).
    pub k_neg: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub iterations: usize,
    pub prompts_per_iter: usize,
    /// Think length expected by the format parser.
    pub l: usize,
    pub seed: u64,
}

impl Default for RlConfig {
    fn default() -> Self {
        RlConfig {
            group_size: 8,
            clip_eps: 0.2,
            beta_kl: 0.01,
            temperature: 1.0,
            k_neg: 50,
            lr: 1e-5,
            weight_decay: 0.0,
            iterations: 50,
            prompts_per_iter: 16,
            l: 4,
            seed: 0,
        }
    }
}

impl RlConfig {
    pub fn validate(&self) -> Result<(), RlError> {
        if !(self.clip_eps > 0.0 && self.clip_eps < 1.0) {
            return Err(RlError::BadClip(self.clip_eps));
        }
        if self.k_neg < 10 {
            return Err(RlError::TooFewNegatives(self.k_neg));
        }
        assert!(self.beta_kl >= 0.0);
        assert!(self.group_size >= 2);
        Ok(())
    }
}

/// Per-rollout reward components; the total is their plain sum.
#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub format: f64,
    pub em: f64,
    pub similarity: f64,
    pub likelihood: f64,
    pub ranking: f64,
}

impl RewardBreakdown {
    pub fn total(&self) -> f64 {
        self.format + self.em + self.similarity + self.likelihood + self.ranking
    }
}

/// Parses a generation as exactly `l` think tokens from the shared code
/// vocabulary followed by a complete item block resolving to one item.
pub fn parse_generation(
    tokens: &[usize],
    l: usize,
    vocab: &crate::backbone::Vocabulary,
    map: &SemanticIdMap,
) -> Option<(Vec<usize>, usize, Vec<usize>)> {
    if tokens.len() < l {
        return None;
    }
    let (think, rest) = tokens.split_at(l);
    if think.iter().any(|&t| !vocab.is_code(t)) {
        return None;
    }
    // The remainder must be one complete item block and nothing else.
    let m = vocab.m;
    if rest.len() == m {
        let codes = parse_level_codes(vocab, rest)?;
        let item = map.resolve(&codes, None)?;
        return Some((think.to_vec(), item, rest.to_vec()));
    }
    if rest.len() == m + 1 {
        let codes = parse_level_codes(vocab, &rest[..m])?;
        let suffix = vocab.parse_collision(rest[m])?;
        let item = map.resolve(&codes, Some(suffix))?;
        return Some((think.to_vec(), item, rest.to_vec()));
    }
    None
}

/// Format reward: 0 for a parseable generation, -1 otherwise.
pub fn reward_format(
    tokens: &[usize],
    l: usize,
    vocab: &crate::backbone::Vocabulary,
    map: &SemanticIdMap,
) -> f64 {
    if parse_generation(tokens, l, vocab, map).is_some() {
        0.0
    } else {
        -1.0
    }
}

/// Exact-match reward: the number of consecutively matched tokens from the
/// beginning. Both blocks must have length m.
pub fn reward_em(generated: &[usize], target: &[usize]) -> Result<usize, RlError> {
    if generated.len() != target.len() {
        return Err(RlError::LengthMismatch(generated.len(), target.len()));
    }
    let mut em = 0;
    for (g, t) in generated.iter().zip(target) {
        if g == t {
            em += 1;
        } else {
            break;
        }
    }
    Ok(em)
}

/// Tier for the similarity reward given the in-batch dominance fraction.
pub fn similarity_tier(g: f64) -> f64 {
    if g >= 0.99 {
        0.5
    } else if g >= 0.95 {
        0.1
    } else if g >= 0.50 {
        0.05
    } else {
        -0.1
    }
}

/// Similarity reward over a batch: cosine similarity matrix between pooled
/// decoder states and target representations; each sample is scored by the
/// fraction of columns not exceeding its own match (ties count).
pub fn reward_similarity(decoder_pool: &[Vec<f64>], target_reps: &[Vec<f64>]) -> Vec<f64> {
    let b = decoder_pool.len();
    assert!(b >= 2, "similarity reward needs a batch of at least 2");
    assert_eq!(b, target_reps.len());
    let mut out = Vec::with_capacity(b);
    for i in 0..b {
        let own = cosine_f64(&decoder_pool[i], &target_reps[i]);
        let mut count = 0usize;
        for t in target_reps {
            if cosine_f64(&decoder_pool[i], t) <= own {
                count += 1;
            }
        }
        let g = count as f64 / b as f64;
        out.push(similarity_tier(g));
    }
    out
}

fn cosine_f64(a: &[f64], b: &[f64]) -> f64 {
    cosine(a, b)
}

/// Tier for the ranking reward given the positive's 1-indexed rank among
/// `k + 1` candidates (k negatives). The band `0.2K <= p < 0.5K` is
/// neutral.
pub fn ranking_tier(p: usize, k: usize) -> f64 {
    let pf = p as f64;
    let kf = k as f64;
    if p == 1 {
        0.2
    } else if pf < 0.1 * kf {
        0.1
    } else if pf < 0.2 * kf {
        0.05
    } else if pf >= 0.5 * kf {
        -0.1
    } else {
        0.0
    }
}

/// Ranking reward from precomputed likelihood scores: the positive's
/// 1-indexed rank among all candidates, ties ranking it worst.
pub fn ranking_reward_from_liks(lik_pos: f64, lik_negs: &[f64]) -> Result<f64, RlError> {
    if lik_negs.len() < 10 {
        return Err(RlError::TooFewNegatives(lik_negs.len()));
    }
    let p = 1 + lik_negs.iter().filter(|&&l| l >= lik_pos).count();
    Ok(ranking_tier(p, lik_negs.len()))
}

/// Ranking reward: rank of the positive target's conditional log-likelihood
/// among the negatives (ties rank the positive worst).
pub fn reward_ranking<F: Real>(
    model: &BackboneModel<F>,
    enc: &crate::backbone::EncodedSnapshot<F>,
    think: &[usize],
    positive: &[usize],
    negatives: &[Vec<usize>],
) -> Result<f64, RlError> {
    if negatives.len() < 10 {
        return Err(RlError::TooFewNegatives(negatives.len()));
    }
    let lik_pos = model.log_prob(enc, think, positive, 1.0)?;
    let mut liks = Vec::with_capacity(negatives.len());
    for neg in negatives {
        liks.push(model.log_prob(enc, think, neg, 1.0)?);
    }
    ranking_reward_from_liks(lik_pos, &liks)
}

/// Likelihood reward: policy log-prob of the true target conditioned on the
/// generated think, minus the direct decoder's one-step log-prob.
pub fn reward_likelihood<F: Real>(
    model: &BackboneModel<F>,
    reference: &ReferenceDecoder<F>,
    enc: &crate::backbone::EncodedSnapshot<F>,
    think: &[usize],
    target: &[usize],
) -> Result<f64, RlError> {
    let pol = model.log_prob(enc, think, target, 1.0)?;
    let refv = reference.log_prob(model, enc, target, 1.0)?;
    Ok(pol - refv)
}

/// Group-standardized advantages: `(r - mean) / max(std, 1e-6)` with the
/// population standard deviation.
pub fn group_advantages(rewards: &[f64]) -> Vec<f64> {
    let g = rewards.len();
    assert!(g >= 2, "advantages need a group of at least 2");
    let mean = rewards.iter().sum::<f64>() / g as f64;
    let var = rewards.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / g as f64;
    let std = var.sqrt().max(1e-6);
    rewards.iter().map(|r| (r - mean) / std).collect()
}

/// One sampled generation plus everything the update step needs.
#[derive(Clone, Debug)]
pub struct Rollout {
    pub tokens: Vec<usize>,
    /// Sequence log-prob under the rollout-time policy snapshot.
    pub logp_old: f64,
    /// Per-token log-probs under the KL reference policy.
    pub ref_token_logps: Vec<f64>,
    pub reward: RewardBreakdown,
}

/// G rollouts for one prompt with their advantages.
#[derive(Clone, Debug)]
pub struct RolloutGroup {
    pub user: usize,
    pub history: Vec<usize>,
    pub target_item: usize,
    pub rollouts: Vec<Rollout>,
    pub advantages: Vec<f64>,
}

/// Per-token log-probs of a token sequence under a frozen model.
pub fn policy_token_logps<F: Real>(
    model: &BackboneModel<F>,
    enc: &crate::backbone::EncodedSnapshot<F>,
    tokens: &[usize],
) -> Result<Vec<f64>, BackboneError> {
    let mut row = vec![BOS];
    row.extend_from_slice(&tokens[..tokens.len() - 1]);
    let logits = model.decode_logits(enc, &row)?;
    let mut out = Vec::with_capacity(tokens.len());
    for (t, &tok) in tokens.iter().enumerate() {
        let lp = log_softmax_pick(logits.row(t), tok);
        out.push(lp);
    }
    Ok(out)
}

fn log_softmax_pick<F: Real>(row: &[F], pick: usize) -> f64 {
    let max = row.iter().copied().fold(row[0], F::max).to_f64();
    let sum: f64 = row.iter().map(|&v| (v.to_f64() - max).exp()).sum();
    row[pick].to_f64() - max - sum.ln()
}

/// Pooled decoder hidden state over the generated positions of a rollout.
fn pooled_decoder_state<F: Real>(
    model: &BackboneModel<F>,
    enc: &crate::backbone::EncodedSnapshot<F>,
    tokens: &[usize],
) -> Result<Vec<f64>, BackboneError> {
    let mut row = vec![BOS];
    row.extend_from_slice(tokens);
    let mut g = Graph::inference();
    let bound = enc.bind(&mut g);
    let hidden = model.decode_hidden(&mut g, &bound, &[row.as_slice()], &mut None)?;
    let h = model.config.hidden;
    let hval = g.value(hidden);
    let from = if tokens.is_empty() { 0 } else { 1 };
    let to = row.len();
    let mut pooled = vec![0.0f64; h];
    for t in from..to {
        for i in 0..h {
            pooled[i] += hval.data()[t * h + i].to_f64();
        }
    }
    let n = (to - from) as f64;
    for v in &mut pooled {
        *v /= n;
    }
    Ok(pooled)
}

/// Prompt for rollout collection.
pub struct RlPrompt {
    pub user: usize,
    pub history: Vec<usize>,
    pub target_item: usize,
}

/// Collects rollout groups for a batch of prompts against frozen policy,
/// KL-reference, and direct-decoder snapshots. Rewards are computed here;
/// the similarity reward is batch-wide across all rollouts of the
/// iteration. Parallel over prompts, deterministic per (seed, iteration).
#[allow(clippy::too_many_arguments)]
pub fn collect_groups<F: Real>(
    policy: &BackboneModel<F>,
    kl_ref: &BackboneModel<F>,
    direct: &ReferenceDecoder<F>,
    prompts: &[RlPrompt],
    table: &ItemEmbeddingTable,
    map: &SemanticIdMap,
    config: &RlConfig,
    iteration: usize,
) -> Result<Vec<RolloutGroup>, RlError> {
    use rayon::prelude::*;
    let vocab = policy.vocab.clone();
    let m = vocab.m;
    let has_collisions = map.max_disambiguator().is_some();
    let max_len = config.l + m + usize::from(has_collisions);

    struct Partial {
        user: usize,
        history: Vec<usize>,
        target_item: usize,
        tokens: Vec<Vec<usize>>,
        logp_old: Vec<f64>,
        ref_token_logps: Vec<Vec<f64>>,
        format: Vec<f64>,
        em: Vec<f64>,
        likelihood: Vec<f64>,
        ranking: Vec<f64>,
        pooled: Vec<Vec<f64>>,
        target_rep: Vec<f64>,
    }

    let partials: Vec<Result<Partial, RlError>> = prompts
        .par_iter()
        .enumerate()
        .map(|(pi, prompt)| {
            let enc = policy.encode_snapshot(&prompt.history)?;
            let enc_ref = kl_ref.encode_snapshot(&prompt.history)?;
            let target_tokens = tokenize_items(&vocab, map, &[prompt.target_item]);
            let target_m: Vec<usize> = target_tokens.iter().copied().take(m).collect();
            let negatives: Vec<Vec<usize>> = similar_items(table, prompt.target_item, config.k_neg)
                .into_iter()
                .map(|i| tokenize_items(&vocab, map, &[i]))
                .collect();
            let target_rep: Vec<f64> =
                crate::annotator::target_representation(policy, &target_tokens)
                    .iter()
                    .map(|&v| v.to_f64())
                    .collect();

            let mut tokens = Vec::with_capacity(config.group_size);
            let mut logp_old = Vec::with_capacity(config.group_size);
            let mut ref_token_logps = Vec::with_capacity(config.group_size);
            let mut format = Vec::new();
            let mut em = Vec::new();
            let mut likelihood = Vec::new();
            let mut ranking = Vec::new();
            let mut pooled = Vec::new();

            for gi in 0..config.group_size {
                let mut rng = derive(
                    config.seed,
                    stream::ROLLOUT,
                    (iteration * 1_000_000 + pi * 1_000 + gi) as u64,
                );
                let gen = policy.generate(
                    &enc,
                    GenerateMode::Sample {
                        tau: config.temperature,
                    },
                    max_len,
                    &mut rng,
                );
                // Degenerate immediate-EOS rollouts carry no scoreable
                // tokens; substitute a single PAD to keep shapes valid.
                let gen = if gen.is_empty() { vec![PAD] } else { gen };
                let lp_old: f64 = policy_token_logps(policy, &enc, &gen)?.iter().sum();
                let ref_lps = policy_token_logps(kl_ref, &enc_ref, &gen)?;

                let fmt = reward_format(&gen, config.l, &vocab, map);
                let em_v = if gen.len() >= config.l + m {
                    reward_em(&gen[config.l..config.l + m], &target_m)? as f64
                } else {
                    0.0
                };
                let think: Vec<usize> = gen.iter().copied().take(config.l).collect();
                let lik = reward_likelihood(policy, direct, &enc, &think, &target_tokens)?;
                let rank = reward_ranking(policy, &enc, &think, &target_tokens, &negatives)?;
                let pool = pooled_decoder_state(policy, &enc, &gen)?;

                tokens.push(gen);
                logp_old.push(lp_old);
                ref_token_logps.push(ref_lps);
                format.push(fmt);
                em.push(em_v);
                likelihood.push(lik);
                ranking.push(rank);
                pooled.push(pool);
            }
            Ok(Partial {
                user: prompt.user,
                history: prompt.history.clone(),
                target_item: prompt.target_item,
                tokens,
                logp_old,
                ref_token_logps,
                format,
                em,
                likelihood,
                ranking,
                pooled,
                target_rep,
            })
        })
        .collect();

    let mut parts = Vec::with_capacity(partials.len());
    for p in partials {
        parts.push(p?);
    }

    // Batch-wide similarity reward across every rollout of the iteration.
    let all_pooled: Vec<Vec<f64>> = parts.iter().flat_map(|p| p.pooled.clone()).collect();
    let all_targets: Vec<Vec<f64>> = parts
        .iter()
        .flat_map(|p| vec![p.target_rep.clone(); p.tokens.len()])
        .collect();
    let sim = if all_pooled.len() >= 2 {
        reward_similarity(&all_pooled, &all_targets)
    } else {
        vec![0.0; all_pooled.len()]
    };

    let mut groups = Vec::with_capacity(parts.len());
    let mut cursor = 0usize;
    for p in parts {
        let g = p.tokens.len();
        let mut rollouts = Vec::with_capacity(g);
        let mut totals = Vec::with_capacity(g);
        for i in 0..g {
            let reward = RewardBreakdown {
                format: p.format[i],
                em: p.em[i],
                similarity: sim[cursor + i],
                likelihood: p.likelihood[i],
                ranking: p.ranking[i],
            };
            totals.push(reward.total());
            rollouts.push(Rollout {
                tokens: p.tokens[i].clone(),
                logp_old: p.logp_old[i],
                ref_token_logps: p.ref_token_logps[i].clone(),
                reward,
            });
        }
        cursor += g;
        groups.push(RolloutGroup {
            user: p.user,
            history: p.history,
            target_item: p.target_item,
            rollouts,
            advantages: group_advantages(&totals),
        });
    }
    Ok(groups)
}

/// Diagnostics from one update step.
#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize)]
pub struct GrpoStats {
    pub objective: f64,
    pub surrogate: f64,
    pub kl: f64,
    pub clip_fraction: f64,
    pub skipped_groups: usize,
}

/// Builds the GRPO objective on an existing graph: group-mean of
/// `min(ratio * A, clip(ratio) * A)` minus `beta_kl` times the per-token KL
/// estimate. Groups with non-finite log-probs are skipped and counted.
/// Returns `None` for the objective when every group was skipped.
pub fn grpo_objective_graph<F: Real>(
    g: &mut Graph<F>,
    model: &BackboneModel<F>,
    groups: &[RolloutGroup],
    clip_eps: f64,
    beta_kl: f64,
) -> Result<(Option<crate::graph::Var>, GrpoStats), RlError> {
    let vsize = model.vocab.size();

    let mut group_terms = Vec::new();
    let mut kl_terms = Vec::new();
    let mut kl_token_count = 0usize;
    let mut clip_hits = 0usize;
    let mut rollout_count = 0usize;
    let mut skipped = 0usize;

    for group in groups {
        if group
            .rollouts
            .iter()
            .any(|r| !r.logp_old.is_finite() || r.ref_token_logps.iter().any(|v| !v.is_finite()))
        {
            skipped += 1;
            continue;
        }
        let gsize = group.rollouts.len();
        let hist: &[usize] = &group.history;
        let enc = model.encode_batch(g, &[hist], &mut None)?;

        let max_t = group.rollouts.iter().map(|r| r.tokens.len()).max().unwrap();
        let rows: Vec<Vec<usize>> = group
            .rollouts
            .iter()
            .map(|r| {
                let mut row = Vec::with_capacity(max_t);
                row.push(BOS);
                row.extend_from_slice(&r.tokens[..r.tokens.len() - 1]);
                row.resize(max_t, PAD);
                row
            })
            .collect();
        let row_refs: Vec<&[usize]> = rows.iter().map(|r| r.as_slice()).collect();
        let hidden = model.decode_hidden(g, &enc, &row_refs, &mut None)?;
        let positions: Vec<usize> = (0..max_t).collect();
        let logits = model.logits_at(g, hidden, &positions);
        let flat = g.reshape(logits, &[gsize * max_t, vsize]);
        let logp = g.log_softmax_last(flat, F::one());
        let ids: Vec<usize> = group
            .rollouts
            .iter()
            .flat_map(|r| {
                r.tokens
                    .iter()
                    .copied()
                    .chain(std::iter::repeat(PAD).take(max_t - r.tokens.len()))
            })
            .collect();
        let picked = g.pick_per_row(logp, &ids);
        let mut mask = vec![F::zero(); gsize * max_t];
        for (i, r) in group.rollouts.iter().enumerate() {
            for t in 0..r.tokens.len() {
                mask[i * max_t + t] = F::one();
            }
        }
        let mask_v = g.input(Tensor::from_vec(&[gsize * max_t], mask.clone()));
        let picked_masked = g.mul(picked, mask_v);
        let grid = g.reshape(picked_masked, &[gsize, max_t]);
        let logp_new = g.sum_axis(grid, 1); // (G,)

        // Sequence-level ratios against the rollout snapshot.
        let logp_old = g.input(Tensor::from_vec(
            &[gsize],
            group
                .rollouts
                .iter()
                .map(|r| F::from_f64(r.logp_old))
                .collect(),
        ));
        let diff = g.sub(logp_new, logp_old);
        let ratio = g.exp(diff);

        let ratio_vals: Vec<f64> = g
            .value(ratio)
            .data()
            .iter()
            .map(|&v| v.to_f64())
            .collect();
        if ratio_vals.iter().any(|v| !v.is_finite()) {
            skipped += 1;
            continue;
        }
        for &rv in &ratio_vals {
            if rv < 1.0 - clip_eps || rv > 1.0 + clip_eps {
                clip_hits += 1;
            }
        }
        rollout_count += gsize;

        let adv = g.input(Tensor::from_vec(
            &[gsize],
            group.advantages.iter().map(|&a| F::from_f64(a)).collect(),
        ));
        let unclipped = g.mul(ratio, adv);
        let clipped_ratio = g.clamp(
            ratio,
            F::from_f64(1.0 - clip_eps),
            F::from_f64(1.0 + clip_eps),
        );
        let clipped = g.mul(clipped_ratio, adv);
        let surr = g.min_elem(unclipped, clipped);
        let group_mean = g.mean_all(surr);
        group_terms.push(group_mean);

        // Per-token KL estimate against the reference policy:
        // r - ln r - 1 with r = p_ref / p_theta, over real tokens.
        let ref_lp: Vec<F> = group
            .rollouts
            .iter()
            .flat_map(|r| {
                r.ref_token_logps
                    .iter()
                    .map(|&v| F::from_f64(v))
                    .chain(std::iter::repeat(F::zero()).take(max_t - r.tokens.len()))
            })
            .collect();
        let ref_lp = g.input(Tensor::from_vec(&[gsize * max_t], ref_lp));
        let log_r = g.sub(ref_lp, picked); // ln r at real positions
        let r = g.exp(log_r);
        let k3 = {
            let a = g.sub(r, log_r);
            g.add_scalar(a, -F::one())
        };
        let mask_v2 = g.input(Tensor::from_vec(&[gsize * max_t], mask));
        let k3 = g.mul(k3, mask_v2);
        kl_terms.push(g.sum_all(k3));
        kl_token_count += group.rollouts.iter().map(|r| r.tokens.len()).sum::<usize>();
    }

    if group_terms.is_empty() {
        return Ok((
            None,
            GrpoStats {
                skipped_groups: skipped,
                ..Default::default()
            },
        ));
    }

    let mut surr_sum = group_terms[0];
    for &t in &group_terms[1..] {
        surr_sum = g.add(surr_sum, t);
    }
    let surrogate = g.scale(surr_sum, F::from_f64(1.0 / group_terms.len() as f64));

    let mut kl_sum = kl_terms[0];
    for &t in &kl_terms[1..] {
        kl_sum = g.add(kl_sum, t);
    }
    let kl = g.scale(kl_sum, F::from_f64(1.0 / kl_token_count as f64));

    let kl_w = g.scale(kl, F::from_f64(beta_kl));
    let objective = g.sub(surrogate, kl_w);

    let stats = GrpoStats {
        objective: g.scalar_value(objective).to_f64(),
        surrogate: g.scalar_value(surrogate).to_f64(),
        kl: g.scalar_value(kl).to_f64(),
        clip_fraction: if rollout_count == 0 {
            0.0
        } else {
            clip_hits as f64 / rollout_count as f64
        },
        skipped_groups: skipped,
    };
    Ok((Some(objective), stats))
}

/// One GRPO ascent step (descent on the negated objective).
pub fn grpo_step<F: Real>(
    model: &mut BackboneModel<F>,
    groups: &[RolloutGroup],
    clip_eps: f64,
    beta_kl: f64,
    opt: &mut OptimizerState<F>,
) -> Result<GrpoStats, RlError> {
    let mut g = Graph::new();
    let (objective, stats) = grpo_objective_graph(&mut g, model, groups, clip_eps, beta_kl)?;
    let Some(objective) = objective else {
        return Ok(stats);
    };
    let loss = g.neg(objective);
    let grads = g.backward(loss);
    let named = model.named_params();
    let grad_tensors: Vec<Option<Tensor<F>>> = named
        .iter()
        .map(|(_, t)| g.find_param(t).and_then(|v| grads.of(v).cloned()))
        .collect();
    let mut params = model.params_mut();
    let refs: Vec<Option<&Tensor<F>>> = grad_tensors.iter().map(|t| t.as_ref()).collect();
    opt.step(&mut params, &refs)?;
    Ok(stats)
}
