//! Iterative residual inference: annotates training examples with reasoning
//! traces.
//!
//! Starting from the encoder's pooled state s0 (= d0), each step maps the
//! gap between the target representation t and the current state through the
//! residual head, snaps that residual to the nearest code-token embedding
//! (the pseudo-label), appends the pseudo-label to the decoder input, reads
//! the decoder's top hidden state at the new position, and updates the
//! running state from the sum of decoder states through the state head.
//! After l steps the label sequence is the l pseudo-labels followed by the
//! target item's tokens.

use crate::backbone::{BackboneError, BackboneModel, Vocabulary, BOS};
use crate::graph::{Graph, Var};
use crate::real::Real;
use crate::rng::{derive, stream};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AnnotatorError {
    #[error(transparent)]
    Backbone(#[from] BackboneError),
    #[error("trace of {l} steps plus target exceeds decoder capacity {max}")]
    TraceTooLong { l: usize, max: usize },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{path}:{line}: malformed trace record")]
    Malformed { path: String, line: usize },
}

/// Head hyperparameters.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct HeadConfig {
    /// Hidden width of each head MLP.
    pub width: usize,
    pub seed: u64,
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig {
            width: 256,
            seed: 0,
        }
    }
}

/// One hidden layer with a skip connection; the final layer starts near
/// zero so an untrained head is close to the identity.
pub struct HeadMlp<F: Real> {
    w1: Tensor<F>,
    b1: Tensor<F>,
    w2: Tensor<F>,
    b2: Tensor<F>,
}

impl<F: Real> HeadMlp<F> {
    fn new(hidden: usize, width: usize, rng: &mut crate::rng::Rng) -> Self {
        HeadMlp {
            w1: Tensor::randn(&[hidden, width], (1.0 / hidden as f64).sqrt(), rng)
                .with_requires_grad(),
            b1: Tensor::zeros(&[width]).with_requires_grad(),
            w2: Tensor::randn(&[width, hidden], 1e-3, rng).with_requires_grad(),
            b2: Tensor::zeros(&[hidden]).with_requires_grad(),
        }
    }

    /// x + W2 silu(W1 x + b1) + b2, on 2-D inputs (rows, hidden).
    pub fn forward(&self, g: &mut Graph<F>, x: Var) -> Var {
        let w1 = g.param(&self.w1);
        let b1 = g.param(&self.b1);
        let w2 = g.param(&self.w2);
        let b2 = g.param(&self.b2);
        let h = g.matmul(x, w1);
        let h = g.add_bias(h, b1);
        let h = g.silu(h);
        let delta = g.matmul(h, w2);
        let delta = g.add_bias(delta, b2);
        g.add(x, delta)
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor<F>> {
        vec![&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }

    fn named(&self, prefix: &str, out: &mut Vec<(String, Tensor<F>)>) {
        out.push((format!("{prefix}.w1"), self.w1.clone()));
        out.push((format!("{prefix}.b1"), self.b1.clone()));
        out.push((format!("{prefix}.w2"), self.w2.clone()));
        out.push((format!("{prefix}.b2"), self.b2.clone()));
    }
}

/// Residual head (applied to t - s) and state head (applied to the decoder
/// state sum); two separate parameter sets.
pub struct AnnotatorHeads<F: Real> {
    pub residual: HeadMlp<F>,
    pub state: HeadMlp<F>,
}

impl<F: Real> AnnotatorHeads<F> {
    pub fn new(hidden: usize, config: &HeadConfig) -> Self {
        let mut rng = derive(config.seed, stream::HEADS_INIT, 0);
        AnnotatorHeads {
            residual: HeadMlp::new(hidden, config.width, &mut rng),
            state: HeadMlp::new(hidden, config.width, &mut rng),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<F>> {
        let mut v = self.residual.params_mut();
        v.extend(self.state.params_mut());
        v
    }

    pub fn named_params(&self) -> Vec<(String, Tensor<F>)> {
        let mut out = Vec::new();
        self.residual.named("heads.residual", &mut out);
        self.state.named("heads.state", &mut out);
        out
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

/// Annotated example: pseudo-labels, per-step vectors, and the final label
/// sequence `[think ; target]`.
#[derive(Clone, Debug)]
pub struct ReasoningTrace<F> {
    pub user: usize,
    pub history: Vec<usize>,
    pub think: Vec<usize>,
    pub target: Vec<usize>,
    /// r_1 .. r_l
    pub residuals: Vec<Vec<F>>,
    /// s_0 .. s_l
    pub states: Vec<Vec<F>>,
    /// d_0 .. d_l
    pub decoder_states: Vec<Vec<F>>,
    pub target_rep: Vec<F>,
}

impl<F> ReasoningTrace<F> {
    /// Y = [o_1..o_l ; target tokens]
    pub fn label(&self) -> Vec<usize> {
        let mut y = self.think.clone();
        y.extend_from_slice(&self.target);
        y
    }
}

/// Mean of the token embedding rows: the target representation t.
pub fn target_representation<F: Real>(model: &BackboneModel<F>, tokens: &[usize]) -> Vec<F> {
    assert!(!tokens.is_empty());
    let h = model.config.hidden;
    let mut out = vec![F::zero(); h];
    for &tok in tokens {
        for (o, &e) in out.iter_mut().zip(model.token_embedding(tok).iter()) {
            *o += e;
        }
    }
    let n = F::from_f64(tokens.len() as f64);
    for o in &mut out {
        *o /= n;
    }
    out
}

/// Code token whose embedding best approximates the residual; ties go to
/// the lowest token id.
pub fn pseudo_label<F: Real>(model: &BackboneModel<F>, residual: &[F]) -> usize {
    let vocab: &Vocabulary = &model.vocab;
    let h = model.config.hidden;
    debug_assert_eq!(residual.len(), h);
    let emb = model.embedding_table();
    let mut best = vocab.code_token_range().start;
    let mut best_d = F::infinity();
    for tok in vocab.code_token_range() {
        let row = &emb.data()[tok * h..(tok + 1) * h];
        let mut d = F::zero();
        for i in 0..h {
            let diff = residual[i] - row[i];
            d += diff * diff;
        }
        if d < best_d {
            best_d = d;
            best = tok;
        }
    }
    best
}

fn head_apply<F: Real>(head: &HeadMlp<F>, input: &[F]) -> Vec<F> {
    let mut g = Graph::inference();
    let x = g.input(Tensor::from_vec(&[1, input.len()], input.to_vec()));
    let y = head.forward(&mut g, x);
    g.value(y).data().to_vec()
}

/// Runs the two-step iterative inference for `l` rounds and assembles the
/// trace. Deterministic given the model, heads, example, and l.
pub fn annotate<F: Real>(
    model: &BackboneModel<F>,
    heads: &AnnotatorHeads<F>,
    user: usize,
    history: &[usize],
    target_tokens: &[usize],
    l: usize,
) -> Result<ReasoningTrace<F>, AnnotatorError> {
    assert!(l >= 1, "trace length must be at least 1");
    if l + 1 + target_tokens.len() > model.config.max_dec_positions {
        return Err(AnnotatorError::TraceTooLong {
            l,
            max: model.config.max_dec_positions,
        });
    }
    let enc = model.encode_snapshot(history)?;
    let t = target_representation(model, target_tokens);
    let s0: Vec<F> = enc.s0.data().to_vec();

    let mut states = vec![s0.clone()];
    let mut decoder_states = vec![s0.clone()]; // d_0 = s_0
    let mut residuals: Vec<Vec<F>> = Vec::with_capacity(l);
    let mut think: Vec<usize> = Vec::with_capacity(l);
    let mut d_sum = s0;

    for i in 1..=l {
        let prev = &states[i - 1];
        let gap: Vec<F> = t.iter().zip(prev.iter()).map(|(&a, &b)| a - b).collect();
        let r = head_apply(&heads.residual, &gap);
        let o = pseudo_label(model, &r);
        residuals.push(r);
        think.push(o);

        // Decoder hidden state at the newly appended position.
        let mut row = vec![BOS];
        row.extend_from_slice(&think);
        let mut g = Graph::inference();
        let bound = enc.bind(&mut g);
        let hidden = model.decode_hidden(&mut g, &bound, &[row.as_slice()], &mut None)?;
        let hval = g.value(hidden);
        let h = model.config.hidden;
        let d_i = hval.data()[i * h..(i + 1) * h].to_vec();
        for (s, &d) in d_sum.iter_mut().zip(d_i.iter()) {
            *s += d;
        }
        decoder_states.push(d_i);
        states.push(head_apply(&heads.state, &d_sum));
    }

    Ok(ReasoningTrace {
        user,
        history: history.to_vec(),
        think,
        target: target_tokens.to_vec(),
        residuals,
        states,
        decoder_states,
        target_rep: t,
    })
}

/// Annotates many examples in parallel over a frozen model snapshot.
/// Failures are skipped and counted.
pub fn annotate_all<F: Real>(
    model: &BackboneModel<F>,
    heads: &AnnotatorHeads<F>,
    examples: &[(usize, Vec<usize>, Vec<usize>)],
    l: usize,
) -> (Vec<ReasoningTrace<F>>, usize) {
    use rayon::prelude::*;
    let results: Vec<Option<ReasoningTrace<F>>> = examples
        .par_iter()
        .map(|(user, history, target)| annotate(model, heads, *user, history, target, l).ok())
        .collect();
    let mut traces = Vec::with_capacity(results.len());
    let mut skipped = 0usize;
    for r in results {
        match r {
            Some(t) => traces.push(t),
            None => skipped += 1,
        }
    }
    (traces, skipped)
}

/// Trace cache: `history | think | target` token ids per line.
pub fn save_traces<F>(traces: &[ReasoningTrace<F>], path: &Path) -> Result<(), AnnotatorError> {
    let pstr = path.display().to_string();
    let mut f = std::fs::File::create(path).map_err(|source| AnnotatorError::Io {
        path: pstr.clone(),
        source,
    })?;
    for tr in traces {
        let fmt = |v: &[usize]| {
            v.iter()
                .map(|t| t.to_string())
                .collect::<Vec<_>>()
                .join(" ")
        };
        writeln!(
            f,
            "{} | {} | {}",
            fmt(&tr.history),
            fmt(&tr.think),
            fmt(&tr.target)
        )
        .map_err(|source| AnnotatorError::Io {
            path: pstr.clone(),
            source,
        })?;
    }
    Ok(())
}

/// Token-level trace record loaded from a cache (per-step vectors are
/// recomputed by the trainer when needed).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CachedTrace {
    pub history: Vec<usize>,
    pub think: Vec<usize>,
    pub target: Vec<usize>,
}

pub fn load_traces(path: &Path) -> Result<Vec<CachedTrace>, AnnotatorError> {
    let pstr = path.display().to_string();
    let file = std::fs::File::open(path).map_err(|source| AnnotatorError::Io {
        path: pstr.clone(),
        source,
    })?;
    let mut out = Vec::new();
    for (no, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|source| AnnotatorError::Io {
            path: pstr.clone(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split('|').collect();
        if parts.len() != 3 {
            return Err(AnnotatorError::Malformed {
                path: pstr,
                line: no + 1,
            });
        }
        let parse = |s: &str| -> Result<Vec<usize>, AnnotatorError> {
            s.split_whitespace()
                .map(|t| {
                    t.parse().map_err(|_| AnnotatorError::Malformed {
                        path: pstr.clone(),
                        line: no + 1,
                    })
                })
                .collect()
        };
        out.push(CachedTrace {
            history: parse(parts[0])?,
            think: parse(parts[1])?,
            target: parse(parts[2])?,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::BackboneConfig;

    fn tiny_model(m: usize, k: usize) -> BackboneModel<f64> {
        BackboneModel::new(
            Vocabulary::new(m, k, 4),
            BackboneConfig {
                hidden: 16,
                ffn: 32,
                enc_layers: 1,
                dec_layers: 2,
                heads: 2,
                dropout: 0.0,
                max_enc_positions: 32,
                max_dec_positions: 16,
                seed: 11,
            },
        )
    }

    #[test]
    fn target_representation_single_token() {
        let model = tiny_model(2, 4);
        let tok = model.vocab.code_token(0, 1);
        let t = target_representation(&model, &[tok]);
        assert_eq!(t, model.token_embedding(tok));
    }

    #[test]
    fn target_representation_opposite_vectors_cancel() {
        let mut model = tiny_model(2, 4);
        let a = model.vocab.code_token(0, 0);
        let b = model.vocab.code_token(0, 1);
        let h = model.config.hidden;
        let row: Vec<f64> = (0..h).map(|i| i as f64 * 0.1 - 0.5).collect();
        {
            let table = model.embedding_table().clone();
            let mut new = table.clone();
            new.data_mut()[a * h..(a + 1) * h].copy_from_slice(&row);
            let neg: Vec<f64> = row.iter().map(|v| -v).collect();
            new.data_mut()[b * h..(b + 1) * h].copy_from_slice(&neg);
            // Swap the table in through load_named-style replacement.
            let mut tensors: std::collections::HashMap<String, Tensor<f64>> =
                model.named_params().into_iter().collect();
            tensors.insert("embedding".into(), new);
            model.load_named(&tensors);
        }
        let t = target_representation(&model, &[a, b]);
        assert!(t.iter().all(|&v| v.abs() < 1e-12));
    }

    #[test]
    fn target_representation_mean_of_four() {
        let model = tiny_model(4, 4);
        let toks: Vec<usize> = (0..4).map(|l| model.vocab.code_token(l, 1)).collect();
        let t = target_representation(&model, &toks);
        let h = model.config.hidden;
        for i in 0..h {
            let mean: f64 = toks
                .iter()
                .map(|&tok| model.token_embedding(tok)[i])
                .sum::<f64>()
                / 4.0;
            assert!((t[i] - mean).abs() < 1e-12);
        }
    }

    #[test]
    fn pseudo_label_picks_nearest_and_breaks_ties_low() {
        let mut model = tiny_model(1, 2);
        let h = model.config.hidden;
        // Plant two known embeddings on the code tokens.
        let t0 = model.vocab.code_token(0, 0);
        let t1 = model.vocab.code_token(0, 1);
        let mut tensors: std::collections::HashMap<String, Tensor<f64>> =
            model.named_params().into_iter().collect();
        let mut table = tensors["embedding"].clone();
        let mut e0 = vec![0.0; h];
        e0[0] = 1.0;
        let mut e1 = vec![0.0; h];
        e1[1] = 1.0;
        table.data_mut()[t0 * h..(t0 + 1) * h].copy_from_slice(&e0);
        table.data_mut()[t1 * h..(t1 + 1) * h].copy_from_slice(&e1);
        tensors.insert("embedding".into(), table);
        model.load_named(&tensors);

        let mut r = vec![0.0; h];
        r[0] = 0.8;
        r[1] = 0.3;
        assert_eq!(pseudo_label(&model, &r), t0);
        // Equidistant residual: lowest token id wins.
        let mut r = vec![0.0; h];
        r[0] = 0.5;
        r[1] = 0.5;
        assert_eq!(pseudo_label(&model, &r), t0);
    }

    #[test]
    fn pseudo_label_matches_exhaustive_scan_256() {
        let model = tiny_model(4, 64); // 256 code tokens
        let h = model.config.hidden;
        for trial in 0..20 {
            let mut rng = crate::rng::derive(5, 1, trial);
            let r: Vec<f64> = (0..h)
                .map(|_| rand::Rng::gen_range(&mut rng, -1.0..1.0))
                .collect();
            let got = pseudo_label(&model, &r);
            let mut best = None;
            let mut best_d = f64::INFINITY;
            for tok in model.vocab.code_token_range() {
                let e = model.token_embedding(tok);
                let d: f64 = r.iter().zip(&e).map(|(a, b)| (a - b) * (a - b)).sum();
                if d < best_d {
                    best_d = d;
                    best = Some(tok);
                }
            }
            assert_eq!(got, best.unwrap());
            // Optimality over the whole shared vocabulary.
            for tok in model.vocab.code_token_range() {
                let e = model.token_embedding(tok);
                let d: f64 = r.iter().zip(&e).map(|(a, b)| (a - b) * (a - b)).sum();
                assert!(best_d <= d + 1e-15);
            }
        }
    }

    #[test]
    fn trace_length_identity() {
        let model = tiny_model(4, 4);
        let heads = AnnotatorHeads::new(16, &HeadConfig::default());
        let hist: Vec<usize> = vec![model.vocab.code_token(0, 1), model.vocab.code_token(1, 2)];
        let target: Vec<usize> = (0..4).map(|l| model.vocab.code_token(l, 0)).collect();
        // l=6, m=4 -> |Y| = 10
        let tr = annotate(&model, &heads, 0, &hist, &target, 6).unwrap();
        assert_eq!(tr.label().len(), 10);
        assert_eq!(tr.think.len(), 6);
        // l=1: exactly one residual/pseudo-label before the target block.
        let tr = annotate(&model, &heads, 0, &hist, &target, 1).unwrap();
        assert_eq!(tr.think.len(), 1);
        assert_eq!(tr.residuals.len(), 1);
        assert_eq!(tr.label().len(), 5);
        // Stored vectors have the expected counts.
        assert_eq!(tr.states.len(), 2);
        assert_eq!(tr.decoder_states.len(), 2);
    }

    #[test]
    fn trace_rejects_overflow() {
        let model = tiny_model(4, 4);
        let heads = AnnotatorHeads::new(16, &HeadConfig::default());
        let hist = vec![model.vocab.code_token(0, 1)];
        let target: Vec<usize> = (0..4).map(|l| model.vocab.code_token(l, 0)).collect();
        assert!(matches!(
            annotate(&model, &heads, 0, &hist, &target, 14),
            Err(AnnotatorError::TraceTooLong { .. })
        ));
    }

    #[test]
    fn d0_equals_s0_and_determinism() {
        let model = tiny_model(2, 4);
        let heads = AnnotatorHeads::new(16, &HeadConfig::default());
        let hist = vec![model.vocab.code_token(0, 3), model.vocab.code_token(1, 1)];
        let target = vec![model.vocab.code_token(0, 0), model.vocab.code_token(1, 0)];
        let a = annotate(&model, &heads, 0, &hist, &target, 3).unwrap();
        let b = annotate(&model, &heads, 0, &hist, &target, 3).unwrap();
        assert_eq!(a.think, b.think);
        assert_eq!(a.states, b.states);
        assert_eq!(a.decoder_states[0], a.states[0], "d_0 must equal s_0");
    }

    #[test]
    fn scripted_reexecution_reproduces_trace() {
        // Independent re-execution of the two-step loop using only public
        // model primitives.
        let model = tiny_model(2, 8);
        let heads = AnnotatorHeads::new(16, &HeadConfig { width: 32, seed: 4 });
        let hist = vec![model.vocab.code_token(0, 5), model.vocab.code_token(1, 2)];
        let target = vec![model.vocab.code_token(0, 1), model.vocab.code_token(1, 7)];
        let l = 4;
        let tr = annotate(&model, &heads, 0, &hist, &target, l).unwrap();

        let enc = model.encode_snapshot(&hist).unwrap();
        let t = target_representation(&model, &target);
        let mut s = enc.s0.data().to_vec();
        let mut d_sum = s.clone();
        let mut think = Vec::new();
        let h = model.config.hidden;
        for i in 1..=l {
            let gap: Vec<f64> = t.iter().zip(&s).map(|(a, b)| a - b).collect();
            let r = head_apply(&heads.residual, &gap);
            let o = pseudo_label(&model, &r);
            think.push(o);
            // Fresh decode per step.
            let mut row = vec![BOS];
            row.extend_from_slice(&think);
            let mut g = Graph::inference();
            let bound = enc.bind(&mut g);
            let hidden = model
                .decode_hidden(&mut g, &bound, &[row.as_slice()], &mut None)
                .unwrap();
            let d_i = g.value(hidden).data()[i * h..(i + 1) * h].to_vec();
            for (acc, &d) in d_sum.iter_mut().zip(&d_i) {
                *acc += d;
            }
            s = head_apply(&heads.state, &d_sum);
            assert!(
                tr.states[i]
                    .iter()
                    .zip(&s)
                    .all(|(a, b)| (a - b).abs() < 1e-12),
                "state {i} diverged"
            );
        }
        assert_eq!(tr.think, think, "token-for-token reproduction failed");
    }

    #[test]
    fn trace_cache_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let model = tiny_model(2, 4);
        let heads = AnnotatorHeads::new(16, &HeadConfig::default());
        let hist = vec![model.vocab.code_token(0, 1)];
        let target = vec![model.vocab.code_token(0, 0), model.vocab.code_token(1, 3)];
        let tr = annotate(&model, &heads, 7, &hist, &target, 2).unwrap();
        let path = dir.path().join("traces.txt");
        save_traces(&[tr.clone()], &path).unwrap();
        let loaded = load_traces(&path).unwrap();
        assert_eq!(loaded.len(), 1);
        assert_eq!(loaded[0].history, tr.history);
        assert_eq!(loaded[0].think, tr.think);
        assert_eq!(loaded[0].target, tr.target);
    }
}
