//! Leave-one-out evaluation: think-conditioned likelihood ranking over a
//! candidate pool, HR@N / NDCG@N, a popularity baseline, and early
//! stopping.
//!
//! Ranking scores every candidate by the log-probability of its tokens
//! conditioned on the greedily generated think prefix (exact at desk-scale
//! pool sizes); a beam-decoded top-N variant is available behind a flag for
//! large pools.

use crate::backbone::{tokenize_items, BackboneError, BackboneModel, GenerateMode, BOS, PAD};
use crate::corpus::{Corpus, Example};
use crate::graph::Graph;
use crate::real::Real;

use crate::tokenizer::SemanticIdMap;
use serde::{Deserialize, Serialize};

/// Items ordered by score descending, ties broken by ascending item index;
/// no duplicates.
#[derive(Clone, Debug)]
pub struct RankedList {
    pub entries: Vec<(usize, f64)>,
}

impl RankedList {
    pub fn from_scores(scores: Vec<(usize, f64)>) -> Self {
        let mut entries = scores;
        entries.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        debug_assert!({
            let mut seen = std::collections::HashSet::new();
            entries.iter().all(|(i, _)| seen.insert(*i))
        });
        RankedList { entries }
    }

    /// 1-indexed rank of an item.
    pub fn rank_of(&self, item: usize) -> Option<usize> {
        self.entries
            .iter()
            .position(|&(i, _)| i == item)
            .map(|p| p + 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Log-probability of each candidate's token block conditioned on the
/// prefix, computed in one batched decoder pass.
pub fn score_candidates<F: Real>(
    model: &BackboneModel<F>,
    enc: &crate::backbone::EncodedSnapshot<F>,
    prefix: &[usize],
    candidate_tokens: &[Vec<usize>],
    tau: f64,
) -> Result<Vec<f64>, BackboneError> {
    let b = candidate_tokens.len();
    assert!(b > 0);
    let max_c = candidate_tokens.iter().map(Vec::len).max().unwrap();
    let total = prefix.len() + max_c;
    let rows: Vec<Vec<usize>> = candidate_tokens
        .iter()
        .map(|c| {
            let mut row = Vec::with_capacity(total);
            row.push(BOS);
            row.extend_from_slice(prefix);
            row.extend_from_slice(&c[..c.len() - 1]);
            row.resize(total, PAD);
            row
        })
        .collect();
    let mut g = Graph::inference();
    let bound = enc.bind(&mut g);
    let row_refs: Vec<&[usize]> = rows.iter().map(|r| r.as_slice()).collect();
    let hidden = model.decode_hidden(&mut g, &bound, &row_refs, &mut None)?;
    let positions: Vec<usize> = (prefix.len()..prefix.len() + max_c).collect();
    let logits = model.logits_at(&mut g, hidden, &positions);
    let flat = g.reshape(logits, &[b * max_c, model.vocab.size()]);
    let logp = g.log_softmax_last(flat, F::from_f64(tau));
    let ids: Vec<usize> = candidate_tokens
        .iter()
        .flat_map(|c| {
            c.iter()
                .copied()
                .chain(std::iter::repeat(PAD).take(max_c - c.len()))
        })
        .collect();
    let picked = g.pick_per_row(logp, &ids);
    let vals = g.value(picked);
    let mut out = Vec::with_capacity(b);
    for (i, c) in candidate_tokens.iter().enumerate() {
        let mut sum = 0.0;
        for t in 0..c.len() {
            sum += vals.data()[i * max_c + t].to_f64();
        }
        out.push(sum);
    }
    Ok(out)
}

/// Generates the think prefix greedily and ranks every candidate by its
/// conditional log-likelihood. A think generation that terminates early or
/// leaves the shared code vocabulary falls back to the empty prefix
/// (reported in the flag).
#[allow(clippy::too_many_arguments)]
pub fn rank_items<F: Real>(
    model: &BackboneModel<F>,
    map: &SemanticIdMap,
    history: &[usize],
    candidates: &[usize],
    think_len: usize,
    tau: f64,
) -> Result<(RankedList, bool), BackboneError> {
    assert!(!candidates.is_empty());
    let enc = model.encode_snapshot(history)?;
    let mut rng = crate::rng::seed_rng(0); // greedy path draws nothing
    let think = if think_len == 0 {
        Vec::new()
    } else {
        model.generate(&enc, GenerateMode::Greedy, think_len, &mut rng)
    };
    let usable = think.len() == think_len && think.iter().all(|&t| model.vocab.is_code(t));
    let (prefix, fallback) = if usable {
        (think, false)
    } else {
        (Vec::new(), think_len > 0)
    };
    let tokens: Vec<Vec<usize>> = candidates
        .iter()
        .map(|&i| tokenize_items(&model.vocab, map, &[i]))
        .collect();
    let scores = score_candidates(model, &enc, &prefix, &tokens, tau)?;
    let list = RankedList::from_scores(candidates.iter().copied().zip(scores).collect());
    Ok((list, fallback))
}

/// Beam-decoded top-N alternative for large pools: beams over item token
/// blocks after the greedy think; decoded items are ranked by sequence
/// log-probability and the remaining pool follows in index order.
pub fn rank_items_beam<F: Real>(
    model: &BackboneModel<F>,
    map: &SemanticIdMap,
    history: &[usize],
    candidates: &[usize],
    think_len: usize,
    width: usize,
) -> Result<(RankedList, bool), BackboneError> {
    let enc = model.encode_snapshot(history)?;
    let mut rng = crate::rng::seed_rng(0);
    let think = if think_len == 0 {
        Vec::new()
    } else {
        model.generate(&enc, GenerateMode::Greedy, think_len, &mut rng)
    };
    let usable = think.len() == think_len && think.iter().all(|&t| model.vocab.is_code(t));
    let (prefix, fallback) = if usable {
        (think, false)
    } else {
        (Vec::new(), think_len > 0)
    };

    // Beam over candidate token blocks with the prefix fixed.
    let max_block = candidates
        .iter()
        .map(|&i| model.vocab.item_tokens(&map.ids[i]).len())
        .max()
        .unwrap();
    #[derive(Clone)]
    struct Beam {
        tokens: Vec<usize>,
        score: f64,
    }
    let mut beams = vec![Beam {
        tokens: Vec::new(),
        score: 0.0,
    }];
    for _ in 0..max_block {
        let mut next = Vec::new();
        for beam in &beams {
            let mut row = vec![BOS];
            row.extend_from_slice(&prefix);
            row.extend_from_slice(&beam.tokens);
            let logits = model.decode_logits(&enc, &row)?;
            let last = logits.row(row.len() - 1);
            let max = last.iter().copied().fold(last[0], F::max).to_f64();
            let lse =
                max + last.iter().map(|&v| (v.to_f64() - max).exp()).sum::<f64>().ln();
            let mut idx: Vec<usize> = (0..last.len()).collect();
            idx.sort_by(|&a, &b| {
                last[b]
                    .partial_cmp(&last[a])
                    .unwrap()
                    .then(a.cmp(&b))
            });
            for &tok in idx.iter().take(width) {
                let mut tokens = beam.tokens.clone();
                tokens.push(tok);
                next.push(Beam {
                    tokens,
                    score: beam.score + last[tok].to_f64() - lse,
                });
            }
        }
        next.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap().then(a.tokens.cmp(&b.tokens)));
        next.truncate(width);
        beams = next;
    }

    // Decode beams into items.
    let mut scored: Vec<(usize, f64)> = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for beam in &beams {
        if let Some((item, _)) = crate::backbone::parse_item_suffix(&model.vocab, map, &beam.tokens)
        {
            if candidates.contains(&item) && seen.insert(item) {
                scored.push((item, beam.score));
            }
        }
    }
    let floor = scored
        .iter()
        .map(|(_, s)| *s)
        .fold(f64::INFINITY, f64::min)
        .min(0.0);
    let mut rest: Vec<usize> = candidates
        .iter()
        .copied()
        .filter(|i| !seen.contains(i))
        .collect();
    rest.sort_unstable();
    for (off, i) in rest.into_iter().enumerate() {
        scored.push((i, floor - 1.0 - off as f64));
    }
    Ok((RankedList::from_scores(scored), fallback))
}

/// HR@N and NDCG@N over 1-indexed target ranks.
pub fn hr_ndcg(ranks: &[usize], ns: &[usize]) -> Vec<(usize, f64, f64)> {
    let count = ranks.len() as f64;
    ns.iter()
        .map(|&n| {
            let mut hits = 0.0;
            let mut gain = 0.0;
            for &r in ranks {
                if r <= n {
                    hits += 1.0;
                    gain += 1.0 / ((r as f64) + 1.0).log2();
                }
            }
            (n, hits / count, gain / count)
        })
        .collect()
}

/// Metric bundle at the standard cutoffs.
#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize, PartialEq)]
pub struct RankMetrics {
    pub hr5: f64,
    pub hr10: f64,
    pub ndcg5: f64,
    pub ndcg10: f64,
}

impl RankMetrics {
    pub fn from_ranks(ranks: &[usize]) -> Self {
        let m = hr_ndcg(ranks, &[5, 10]);
        RankMetrics {
            hr5: m[0].1,
            ndcg5: m[0].2,
            hr10: m[1].1,
            ndcg10: m[1].2,
        }
    }
}

/// Popularity baseline: items ranked by interaction count over each user's
/// training region (everything but the held-out last interaction), ties to
/// the lower item index. The same list serves every user.
pub fn popularity_baseline(corpus: &Corpus) -> RankedList {
    let mut counts = vec![0usize; corpus.n_items()];
    for seq in &corpus.sequences {
        if seq.len() < 3 {
            continue;
        }
        for &i in &seq[..seq.len() - 1] {
            counts[i] += 1;
        }
    }
    RankedList::from_scores(
        counts
            .iter()
            .enumerate()
            .map(|(i, &c)| (i, c as f64))
            .collect(),
    )
}

/// Early stopping on a per-epoch validation curve: stop once `patience`
/// consecutive epochs fail to exceed the best value. Returns whether to
/// continue and the best epoch (1-indexed; 0 for an empty history).
pub fn early_stop(history: &[f64], patience: usize) -> (bool, usize) {
    if history.is_empty() {
        return (true, 0);
    }
    let mut best_idx = 0;
    for (i, &v) in history.iter().enumerate() {
        if v > history[best_idx] {
            best_idx = i;
        }
    }
    let since_best = history.len() - 1 - best_idx;
    (since_best < patience, best_idx + 1)
}

/// Outcome of evaluating one checkpoint over a set of examples.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalOutcome {
    pub metrics: RankMetrics,
    pub examples: usize,
    /// Think generations that fell back to the empty prefix.
    pub fallbacks: usize,
}

/// Evaluates leave-one-out examples in parallel over a frozen model with a
/// fixed reduction order.
#[allow(clippy::too_many_arguments)]
pub fn evaluate<F: Real>(
    model: &BackboneModel<F>,
    map: &SemanticIdMap,
    examples: &[Example],
    candidates: &[usize],
    think_len: usize,
    tau: f64,
) -> Result<EvalOutcome, BackboneError> {
    use rayon::prelude::*;
    let results: Vec<Result<(usize, bool), BackboneError>> = examples
        .par_iter()
        .map(|ex| {
            let history = tokenize_items(&model.vocab, map, &ex.history);
            let (list, fallback) =
                rank_items(model, map, &history, candidates, think_len, tau)?;
            let rank = list
                .rank_of(ex.target)
                .expect("target must be inside the candidate pool");
            Ok((rank, fallback))
        })
        .collect();
    let mut ranks = Vec::with_capacity(examples.len());
    let mut fallbacks = 0usize;
    for r in results {
        let (rank, fb) = r?;
        ranks.push(rank);
        if fb {
            fallbacks += 1;
        }
    }
    Ok(EvalOutcome {
        metrics: RankMetrics::from_ranks(&ranks),
        examples: examples.len(),
        fallbacks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{BackboneConfig, Vocabulary};
    use crate::tokenizer::SemanticId;

    fn map4() -> SemanticIdMap {
        SemanticIdMap {
            m: 2,
            k: 4,
            ids: (0..4)
                .map(|i| SemanticId {
                    codes: vec![i, i],
                    disambiguator: None,
                })
                .collect(),
            collision_groups: Vec::new(),
            collision_rate: 0.0,
        }
    }

    fn tiny_model() -> BackboneModel<f64> {
        BackboneModel::new(
            Vocabulary::new(2, 4, 4),
            BackboneConfig {
                hidden: 16,
                ffn: 32,
                enc_layers: 1,
                dec_layers: 1,
                heads: 2,
                dropout: 0.0,
                max_enc_positions: 16,
                max_dec_positions: 16,
                seed: 21,
            },
        )
    }

    #[test]
    fn ranked_list_orders_and_breaks_ties() {
        let list = RankedList::from_scores(vec![(2, 0.5), (0, 0.9), (1, 0.5), (3, -1.0)]);
        let items: Vec<usize> = list.entries.iter().map(|&(i, _)| i).collect();
        assert_eq!(items, vec![0, 1, 2, 3]);
        assert_eq!(list.rank_of(1), Some(2));
    }

    #[test]
    fn two_candidate_scores_match_log_prob() {
        let model = tiny_model();
        let map = map4();
        let history = tokenize_items(&model.vocab, &map, &[0, 1]);
        let (list, fallback) = rank_items(&model, &map, &history, &[2, 3], 0, 1.0).unwrap();
        assert!(!fallback);
        assert_eq!(list.len(), 2);
        // Cross-module consistency: scores equal the backbone's log_prob.
        let enc = model.encode_snapshot(&history).unwrap();
        for &(item, score) in &list.entries {
            let tokens = tokenize_items(&model.vocab, &map, &[item]);
            let lp = model.log_prob(&enc, &[], &tokens, 1.0).unwrap();
            assert!((score - lp).abs() < 1e-9, "{score} vs {lp}");
        }
        // Order matches a manual comparison.
        assert!(list.entries[0].1 >= list.entries[1].1);
    }

    #[test]
    fn single_candidate_ranks_first() {
        let model = tiny_model();
        let map = map4();
        let history = tokenize_items(&model.vocab, &map, &[0]);
        let (list, _) = rank_items(&model, &map, &history, &[3], 0, 1.0).unwrap();
        assert_eq!(list.rank_of(3), Some(1));
        assert_eq!(list.len(), 1);
    }

    #[test]
    fn think_conditioned_ranking_has_full_length_and_no_duplicates() {
        let model = tiny_model();
        let map = map4();
        let history = tokenize_items(&model.vocab, &map, &[0, 1, 2]);
        let candidates = [0usize, 1, 2, 3];
        let (list, _) = rank_items(&model, &map, &history, &candidates, 2, 1.0).unwrap();
        assert_eq!(list.len(), candidates.len());
        let mut items: Vec<usize> = list.entries.iter().map(|&(i, _)| i).collect();
        items.sort_unstable();
        assert_eq!(items, candidates);
    }

    #[test]
    fn hr_ndcg_analytic_cases() {
        // Rank 1: perfect.
        let m = RankMetrics::from_ranks(&[1]);
        assert_eq!(m.hr5, 1.0);
        assert_eq!(m.ndcg5, 1.0);
        // Rank 3: NDCG@5 = 1/log2(4) = 0.5.
        let m = RankMetrics::from_ranks(&[3]);
        assert_eq!(m.hr5, 1.0);
        assert!((m.ndcg5 - 0.5).abs() < 1e-12);
        // Outside the cutoff.
        let m = RankMetrics::from_ranks(&[11]);
        assert_eq!(m.hr10, 0.0);
        assert_eq!(m.ndcg10, 0.0);
    }

    #[test]
    fn hr_ndcg_matches_independent_recomputation() {
        // 100 ranks; spreadsheet-style recount.
        let ranks: Vec<usize> = (0..100).map(|i| (i * 7) % 23 + 1).collect();
        let m = RankMetrics::from_ranks(&ranks);
        for (n, hr_field, ndcg_field) in [(5usize, m.hr5, m.ndcg5), (10, m.hr10, m.ndcg10)] {
            let mut hr = 0.0;
            let mut ndcg = 0.0;
            for &r in &ranks {
                if r <= n {
                    hr += 1.0;
                    ndcg += 1.0 / ((r + 1) as f64).log2();
                }
            }
            assert!((hr_field - hr / 100.0).abs() < 1e-12);
            assert!((ndcg_field - ndcg / 100.0).abs() < 1e-12);
        }
    }

    #[test]
    fn hr_ndcg_invariant_to_pool_permutation() {
        // Only ranks matter: permuting candidate scores consistently leaves
        // the metrics unchanged.
        let scores = vec![(0usize, 0.3), (1, 0.9), (2, -0.2), (3, 0.5)];
        let base = RankedList::from_scores(scores.clone());
        let mut permuted = scores;
        permuted.reverse();
        let perm = RankedList::from_scores(permuted);
        for item in 0..4 {
            assert_eq!(base.rank_of(item), perm.rank_of(item));
        }
    }

    #[test]
    fn popularity_counts_match_bruteforce() {
        let corpus = Corpus {
            user_ids: vec!["a".into(), "b".into()],
            item_ids: (0..4).map(|i| i.to_string()).collect(),
            sequences: vec![vec![0, 1, 1, 2], vec![1, 3, 0, 2]],
            max_seq_len: 20,
        };
        let list = popularity_baseline(&corpus);
        // Training regions: [0,1,1] and [1,3,0] -> counts 0:2, 1:3, 2:0, 3:1.
        let items: Vec<usize> = list.entries.iter().map(|&(i, _)| i).collect();
        assert_eq!(items, vec![1, 0, 3, 2]);
        assert_eq!(list.rank_of(1), Some(1));
        // Tie on counts: lower index first.
        let corpus2 = Corpus {
            user_ids: vec!["a".into()],
            item_ids: (0..3).map(|i| i.to_string()).collect(),
            sequences: vec![vec![2, 1, 0]],
            max_seq_len: 20,
        };
        let list2 = popularity_baseline(&corpus2);
        let items2: Vec<usize> = list2.entries.iter().map(|&(i, _)| i).collect();
        assert_eq!(items2, vec![1, 2, 0]);
    }

    #[test]
    fn early_stop_rule_trace() {
        // Strictly increasing: never stops, best = last.
        let curve: Vec<f64> = (0..20).map(|i| i as f64).collect();
        let (cont, best) = early_stop(&curve, 10);
        assert!(cont);
        assert_eq!(best, 20);
        // Best at epoch 3, flat after: stop exactly at epoch 13.
        let mut curve = vec![0.1, 0.2, 0.9];
        for _ in 0..9 {
            curve.push(0.5);
            let (cont, best) = early_stop(&curve, 10);
            assert!(cont, "should continue at epoch {}", curve.len());
            assert_eq!(best, 3);
        }
        curve.push(0.5); // epoch 13
        let (cont, best) = early_stop(&curve, 10);
        assert!(!cont);
        assert_eq!(best, 3);
        // Empty history: continue.
        assert_eq!(early_stop(&[], 10), (true, 0));
    }

    #[test]
    fn beam_variant_returns_full_ranking() {
        let model = tiny_model();
        let map = map4();
        let history = tokenize_items(&model.vocab, &map, &[0, 1]);
        let candidates = [0usize, 1, 2, 3];
        let (list, _) = rank_items_beam(&model, &map, &history, &candidates, 0, 3).unwrap();
        assert_eq!(list.len(), candidates.len());
        let mut items: Vec<usize> = list.entries.iter().map(|&(i, _)| i).collect();
        items.sort_unstable();
        assert_eq!(items, candidates);
    }

    #[test]
    fn evaluate_aggregates_deterministically() {
        let model = tiny_model();
        let map = map4();
        let examples: Vec<Example> = (0..4)
            .map(|u| Example {
                user: u,
                history: vec![u % 4, (u + 1) % 4],
                target: (u + 2) % 4,
            })
            .collect();
        let pool = [0usize, 1, 2, 3];
        let a = evaluate(&model, &map, &examples, &pool, 2, 1.0).unwrap();
        let b = evaluate(&model, &map, &examples, &pool, 2, 1.0).unwrap();
        assert_eq!(a.metrics, b.metrics);
        assert_eq!(a.examples, 4);
    }
}
