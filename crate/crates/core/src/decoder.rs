//! Token-HMM Viterbi decoder with bigram LM transitions, n-best generation,
//! forced alignment and confusion-network construction.
//!
//! Tokens are left-to-right state chains with self-loops; inter-token arcs
//! carry LM log probabilities scaled by the LM weight. Silence is optionally
//! insertable between words (and at the utterance edges) with a fixed
//! insertion log probability and is transparent to the LM context. A token
//! never follows itself directly - repeats go through silence - which keeps
//! backtraces unambiguous.

use std::collections::HashMap;

use crate::am::{scaled_loglik, AcousticModel, Priors};
use crate::corpus::{Lexicon, Utterance};
use crate::lm::NgramLm;
use crate::scoring::{edit_align, EditOp};
use crate::util::Matrix;
use crate::{Error, Result};

/// Decoder settings shared by graph construction.
#[derive(Debug, Clone)]
pub struct GraphConfig {
    pub lm_weight: f64,
    pub silence_enabled: bool,
    /// Log probability charged for each inserted silence.
    pub silence_logprob: f64,
}

impl Default for GraphConfig {
    fn default() -> Self {
        GraphConfig { lm_weight: 1.0, silence_enabled: true, silence_logprob: (0.15f64).ln() }
    }
}

#[derive(Debug, Clone, Copy)]
struct Node {
    token: usize,
    state_in_token: usize,
    am_state: usize,
    /// LM context carried through silence; for word nodes the word itself,
    /// for silence nodes the last word (or BOS) before the pause.
    ctx: usize,
}

/// Search graph over token state chains with bigram LM transition weights.
#[derive(Debug, Clone)]
pub struct DecodingGraph {
    nodes: Vec<Node>,
    /// Incoming arcs per node, including the zero-cost self-loop, sorted by
    /// (source state index, source context) so score ties resolve to the
    /// lowest state.
    preds: Vec<Vec<(usize, f64)>>,
    start: Vec<f64>,
    finish: Vec<f64>,
    /// Node indices in (state index, context) order, the tie-break order.
    rank: Vec<usize>,
    n_states: usize,
    pub config: GraphConfig,
}

impl DecodingGraph {
    /// Builds the graph from a lexicon and an LM trained over the same
    /// token-id space (queried with single-token contexts, so any order
    /// works; the decoder is effectively a bigram decoder).
    pub fn build(lexicon: &Lexicon, lm: &NgramLm, config: &GraphConfig) -> Result<Self> {
        if lm.vocab != lexicon.vocab_size() {
            return Err(Error::DimensionMismatch(format!(
                "lm vocab {} vs lexicon vocab {}",
                lm.vocab,
                lexicon.vocab_size()
            )));
        }
        let sil = lexicon.silence_id;
        let words: Vec<usize> = (0..lexicon.vocab_size()).filter(|&t| t != sil).collect();
        let lmw = config.lm_weight;

        let mut nodes = Vec::new();
        let mut word_entry: HashMap<usize, usize> = HashMap::new();
        let mut word_exit: HashMap<usize, usize> = HashMap::new();
        for &w in &words {
            word_entry.insert(w, nodes.len());
            for j in 0..lexicon.tokens[w].states {
                nodes.push(Node {
                    token: w,
                    state_in_token: j,
                    am_state: lexicon.global_state(w, j),
                    ctx: w,
                });
            }
            word_exit.insert(w, nodes.len() - 1);
        }
        // silence chains, one copy per LM context (words plus BOS)
        let mut sil_entry: HashMap<usize, usize> = HashMap::new();
        let mut sil_exit: HashMap<usize, usize> = HashMap::new();
        let mut sil_ctxs: Vec<usize> = Vec::new();
        if config.silence_enabled {
            sil_ctxs = words.clone();
            sil_ctxs.push(lm.bos());
            for &ctx in &sil_ctxs {
                sil_entry.insert(ctx, nodes.len());
                for j in 0..lexicon.tokens[sil].states {
                    nodes.push(Node {
                        token: sil,
                        state_in_token: j,
                        am_state: lexicon.global_state(sil, j),
                        ctx,
                    });
                }
                sil_exit.insert(ctx, nodes.len() - 1);
            }
        }

        let n = nodes.len();
        let mut preds: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
        let mut start = vec![f64::NEG_INFINITY; n];
        let mut finish = vec![f64::NEG_INFINITY; n];

        for i in 0..n {
            preds[i].push((i, 0.0));
            if nodes[i].state_in_token > 0 {
                preds[i].push((i - 1, 0.0));
            }
        }
        for &w in &words {
            start[word_entry[&w]] = lmw * lm.cond_logprob(&[lm.bos()], w);
        }
        if config.silence_enabled {
            start[sil_entry[&lm.bos()]] = lmw * config.silence_logprob;
        }
        // word -> word (no direct self-repeat) and word -> silence
        for &v in &words {
            let exit = word_exit[&v];
            for &w in &words {
                if w == v {
                    continue;
                }
                preds[word_entry[&w]].push((exit, lmw * lm.cond_logprob(&[v], w)));
            }
            if config.silence_enabled {
                preds[sil_entry[&v]].push((exit, lmw * config.silence_logprob));
            }
            finish[exit] = lmw * lm.cond_logprob(&[v], lm.eos());
        }
        // silence -> word with the stored context
        for &ctx in &sil_ctxs {
            let exit = sil_exit[&ctx];
            for &w in &words {
                preds[word_entry[&w]].push((exit, lmw * lm.cond_logprob(&[ctx], w)));
            }
            finish[exit] = lmw * lm.cond_logprob(&[ctx], lm.eos());
        }

        let sort_key = |i: usize| (nodes[i].am_state, nodes[i].ctx);
        for p in &mut preds {
            p.sort_by_key(|&(from, _)| sort_key(from));
        }
        let mut rank: Vec<usize> = (0..n).collect();
        rank.sort_by_key(|&i| sort_key(i));
        Ok(DecodingGraph {
            nodes,
            preds,
            start,
            finish,
            rank,
            n_states: lexicon.total_states(),
            config: config.clone(),
        })
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }
}

/// One decoding result: full token sequence (silence included) with total
/// and acoustic-only scores.
#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    pub tokens: Vec<usize>,
    pub score: f64,
    pub acoustic: f64,
}

impl Hypothesis {
    /// Token sequence with silence stripped; the word sequence used for
    /// scoring, LM queries and QE features.
    pub fn words(&self, lexicon: &Lexicon) -> Vec<usize> {
        self.tokens.iter().copied().filter(|&t| !lexicon.is_silence(t)).collect()
    }
}

/// Up to n distinct-sequence hypotheses, sorted by descending score.
#[derive(Debug, Clone)]
pub struct NBestList {
    pub hypotheses: Vec<Hypothesis>,
    /// Set when the beam produced fewer distinct sequences than requested.
    pub truncated: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TokenSpan {
    pub token: usize,
    pub start: usize,
    pub end: usize,
}

/// Per-frame state path plus per-token frame spans.
#[derive(Debug, Clone, PartialEq)]
pub struct Alignment {
    pub frame_states: Vec<usize>,
    pub spans: Vec<TokenSpan>,
}

impl Alignment {
    pub fn tokens(&self) -> Vec<usize> {
        self.spans.iter().map(|s| s.token).collect()
    }
}

fn check_dims(graph: &DecodingGraph, loglik: &Matrix) -> Result<()> {
    if loglik.cols() != graph.n_states {
        return Err(Error::DimensionMismatch(format!(
            "loglik has {} states, graph expects {}",
            loglik.cols(),
            graph.n_states
        )));
    }
    Ok(())
}

/// Exact Viterbi over the graph. Score ties resolve to the lowest state
/// index (then lowest silence context) through the fixed iteration order.
pub fn viterbi_decode(graph: &DecodingGraph, loglik: &Matrix) -> Result<(Hypothesis, Alignment)> {
    check_dims(graph, loglik)?;
    let t_len = loglik.rows();
    if t_len == 0 {
        return Err(Error::TooShort("utterance has no frames".into()));
    }
    let n = graph.nodes.len();
    let mut delta = vec![f64::NEG_INFINITY; n];
    let mut psi: Vec<Vec<usize>> = vec![vec![usize::MAX; n]; t_len];
    for i in 0..n {
        if graph.start[i] > f64::NEG_INFINITY {
            delta[i] = graph.start[i] + loglik.get(0, graph.nodes[i].am_state);
        }
    }
    for t in 1..t_len {
        let mut next = vec![f64::NEG_INFINITY; n];
        for i in 0..n {
            let mut best = f64::NEG_INFINITY;
            let mut best_from = usize::MAX;
            for &(from, cost) in &graph.preds[i] {
                if delta[from] == f64::NEG_INFINITY {
                    continue;
                }
                let cand = delta[from] + cost;
                if cand > best {
                    best = cand;
                    best_from = from;
                }
            }
            if best_from != usize::MAX {
                next[i] = best + loglik.get(t, graph.nodes[i].am_state);
                psi[t][i] = best_from;
            }
        }
        delta = next;
    }
    let mut best_final = f64::NEG_INFINITY;
    let mut best_node = usize::MAX;
    for &i in &graph.rank {
        if delta[i] == f64::NEG_INFINITY || graph.finish[i] == f64::NEG_INFINITY {
            continue;
        }
        let cand = delta[i] + graph.finish[i];
        if cand > best_final {
            best_final = cand;
            best_node = i;
        }
    }
    if best_node == usize::MAX {
        return Err(Error::TooShort("no complete path through the graph".into()));
    }

    let mut path = vec![best_node; t_len];
    for t in (1..t_len).rev() {
        path[t - 1] = psi[t][path[t]];
    }
    let mut frame_states = Vec::with_capacity(t_len);
    let mut spans: Vec<TokenSpan> = Vec::new();
    let mut acoustic = 0.0;
    for (t, &node_idx) in path.iter().enumerate() {
        let node = &graph.nodes[node_idx];
        frame_states.push(node.am_state);
        acoustic += loglik.get(t, node.am_state);
        let continues = t > 0 && {
            let prev = &graph.nodes[path[t - 1]];
            path[t - 1] == node_idx
                || (prev.token == node.token
                    && prev.ctx == node.ctx
                    && prev.state_in_token + 1 == node.state_in_token)
        };
        if continues {
            spans.last_mut().unwrap().end = t + 1;
        } else {
            spans.push(TokenSpan { token: node.token, start: t, end: t + 1 });
        }
    }
    let tokens: Vec<usize> = spans.iter().map(|s| s.token).collect();
    Ok((Hypothesis { tokens, score: best_final, acoustic }, Alignment { frame_states, spans }))
}

#[derive(Clone)]
struct Partial {
    score: f64,
    acoustic: f64,
    /// Rolling hash of `tokens`; cheap dedup filter.
    hash: u64,
    tokens: Vec<usize>,
}

fn extend_hash(hash: u64, token: usize) -> u64 {
    crate::util::mix_seed(hash, &[token as u64])
}

/// N-best decoding with per-node hypothesis lists. Partial paths are merged
/// by token sequence within each node (the node determines the future) and
/// capped at `beam` entries per node, so sufficiently wide beams are exact.
pub fn nbest_decode(
    graph: &DecodingGraph,
    loglik: &Matrix,
    n: usize,
    beam: usize,
) -> Result<NBestList> {
    if n == 0 {
        return Err(Error::invalid("n must be >= 1"));
    }
    check_dims(graph, loglik)?;
    let t_len = loglik.rows();
    if t_len == 0 {
        return Err(Error::TooShort("utterance has no frames".into()));
    }
    let n_nodes = graph.nodes.len();
    let cap = beam.max(n);

    let prune = |list: &mut Vec<Partial>| {
        list.sort_by(|a, b| {
            b.score.partial_cmp(&a.score).unwrap().then_with(|| a.tokens.cmp(&b.tokens))
        });
        list.truncate(cap);
    };

    let mut lists: Vec<Vec<Partial>> = vec![Vec::new(); n_nodes];
    for i in 0..n_nodes {
        if graph.start[i] > f64::NEG_INFINITY {
            let emit = loglik.get(0, graph.nodes[i].am_state);
            let token = graph.nodes[i].token;
            lists[i].push(Partial {
                score: graph.start[i] + emit,
                acoustic: emit,
                hash: extend_hash(0x5eed, token),
                tokens: vec![token],
            });
        }
    }
    // candidate arcs are collected cheaply, sorted once by score, and
    // deduplicated against the capped output in that order; after the list
    // is full, strictly worse candidates cannot contribute and are skipped
    struct Cand {
        score: f64,
        acoustic: f64,
        hash: u64,
        from: usize,
        pidx: usize,
        enters: bool,
    }
    let mut cands: Vec<Cand> = Vec::new();
    for t in 1..t_len {
        let mut next: Vec<Vec<Partial>> = vec![Vec::new(); n_nodes];
        for i in 0..n_nodes {
            let node = &graph.nodes[i];
            let emit = loglik.get(t, node.am_state);
            cands.clear();
            for &(from, cost) in &graph.preds[i] {
                // arcs from other nodes either advance the chain or enter a
                // fresh token at its first state
                let enters = from != i && node.state_in_token == 0;
                for (pidx, p) in lists[from].iter().enumerate() {
                    cands.push(Cand {
                        score: p.score + cost + emit,
                        acoustic: p.acoustic + emit,
                        hash: if enters { extend_hash(p.hash, node.token) } else { p.hash },
                        from,
                        pidx,
                        enters,
                    });
                }
            }
            cands.sort_by(|a, b| {
                b.score
                    .partial_cmp(&a.score)
                    .unwrap()
                    .then_with(|| b.acoustic.partial_cmp(&a.acoustic).unwrap())
                    .then_with(|| (a.from, a.pidx).cmp(&(b.from, b.pidx)))
            });
            let mut list: Vec<Partial> = Vec::with_capacity(cap + 1);
            for c in &cands {
                if list.len() >= cap && c.score < list.last().map_or(f64::INFINITY, |e| e.score) {
                    break;
                }
                let p = &lists[c.from][c.pidx];
                let duplicate = list.iter().any(|e| {
                    e.hash == c.hash
                        && if c.enters {
                            e.tokens.len() == p.tokens.len() + 1
                                && e.tokens.last() == Some(&node.token)
                                && e.tokens[..p.tokens.len()] == p.tokens[..]
                        } else {
                            e.tokens == p.tokens
                        }
                });
                if !duplicate {
                    let mut tokens = p.tokens.clone();
                    if c.enters {
                        tokens.push(node.token);
                    }
                    list.push(Partial {
                        score: c.score,
                        acoustic: c.acoustic,
                        hash: c.hash,
                        tokens,
                    });
                }
            }
            prune(&mut list);
            next[i] = list;
        }
        lists = next;
    }

    let mut finals: Vec<Partial> = Vec::new();
    for i in 0..n_nodes {
        if graph.finish[i] == f64::NEG_INFINITY {
            continue;
        }
        for p in &lists[i] {
            let score = p.score + graph.finish[i];
            match finals.iter_mut().find(|e| e.hash == p.hash && e.tokens == p.tokens) {
                Some(e) => {
                    if (score, p.acoustic) > (e.score, e.acoustic) {
                        e.score = score;
                        e.acoustic = p.acoustic;
                    }
                }
                None => {
                    let mut merged = p.clone();
                    merged.score = score;
                    finals.push(merged);
                }
            }
        }
    }
    let mut hyps: Vec<Hypothesis> = finals
        .into_iter()
        .map(|p| Hypothesis { tokens: p.tokens, score: p.score, acoustic: p.acoustic })
        .collect();
    hyps.sort_by(|a, b| {
        b.score.partial_cmp(&a.score).unwrap().then_with(|| a.tokens.cmp(&b.tokens))
    });
    if hyps.is_empty() {
        return Err(Error::TooShort("no complete path through the graph".into()));
    }
    let truncated = hyps.len() < n;
    hyps.truncate(n);
    Ok(NBestList { hypotheses: hyps, truncated })
}

/// Constrained Viterbi over the reference token chain; the emitted token
/// sequence always equals the reference. Ties prefer advancing, so earlier
/// chain states keep the lower frame indices.
pub fn forced_align(loglik: &Matrix, lexicon: &Lexicon, reference: &[usize]) -> Result<Alignment> {
    if reference.is_empty() {
        return Err(Error::invalid("empty reference for forced alignment"));
    }
    let t_len = loglik.rows();
    let mut chain: Vec<(usize, usize)> = Vec::new(); // (reference index, am state)
    for (k, &tok) in reference.iter().enumerate() {
        if tok >= lexicon.vocab_size() {
            return Err(Error::invalid(format!("unknown token id {tok}")));
        }
        for j in 0..lexicon.tokens[tok].states {
            chain.push((k, lexicon.global_state(tok, j)));
        }
    }
    if t_len < chain.len() {
        return Err(Error::TooShort(format!(
            "{} frames cannot cover {} mandatory states",
            t_len,
            chain.len()
        )));
    }
    let m = chain.len();
    let neg = f64::NEG_INFINITY;
    let mut delta = vec![neg; m];
    let mut psi: Vec<Vec<u8>> = vec![vec![0; m]; t_len]; // 1 = advanced into k
    delta[0] = loglik.get(0, chain[0].1);
    for t in 1..t_len {
        let mut next = vec![neg; m];
        for k in 0..m {
            let stay = delta[k];
            let advance = if k > 0 { delta[k - 1] } else { neg };
            let (best, adv) = if advance >= stay { (advance, 1u8) } else { (stay, 0u8) };
            if best > neg {
                next[k] = best + loglik.get(t, chain[k].1);
                psi[t][k] = adv;
            }
        }
        delta = next;
    }
    if delta[m - 1] == neg {
        return Err(Error::TooShort("alignment infeasible".into()));
    }
    let mut k = m - 1;
    let mut states = vec![0usize; t_len];
    let mut ref_idx = vec![0usize; t_len];
    for t in (0..t_len).rev() {
        states[t] = chain[k].1;
        ref_idx[t] = chain[k].0;
        if t > 0 && psi[t][k] == 1 {
            k -= 1;
        }
    }
    let mut spans: Vec<TokenSpan> = Vec::new();
    for t in 0..t_len {
        let token = reference[ref_idx[t]];
        if t > 0 && ref_idx[t] == ref_idx[t - 1] {
            spans.last_mut().unwrap().end = t + 1;
        } else {
            spans.push(TokenSpan { token, start: t, end: t + 1 });
        }
    }
    Ok(Alignment { frame_states: states, spans })
}

fn loglik_for(model: &AcousticModel, priors: &Priors, utterance: &Utterance) -> Result<Matrix> {
    let post = model.forward(&utterance.frames)?;
    Ok(scaled_loglik(&post, priors))
}

/// Full decode of one utterance: posterior pass, scaled likelihoods,
/// Viterbi.
pub fn viterbi(
    model: &AcousticModel,
    priors: &Priors,
    utterance: &Utterance,
    graph: &DecodingGraph,
) -> Result<(Hypothesis, Alignment)> {
    viterbi_decode(graph, &loglik_for(model, priors, utterance)?)
}

pub fn nbest(
    model: &AcousticModel,
    priors: &Priors,
    utterance: &Utterance,
    graph: &DecodingGraph,
    n: usize,
    beam: usize,
) -> Result<NBestList> {
    nbest_decode(graph, &loglik_for(model, priors, utterance)?, n, beam)
}

pub fn forced_align_utt(
    model: &AcousticModel,
    priors: &Priors,
    utterance: &Utterance,
    reference: &[usize],
    lexicon: &Lexicon,
) -> Result<Alignment> {
    forced_align(&loglik_for(model, priors, utterance)?, lexicon, reference)
}

/// One confusion-network slot: a competing token (or an epsilon gap) with
/// its posterior.
#[derive(Debug, Clone, PartialEq)]
pub struct CnEntry {
    pub token: Option<usize>,
    pub posterior: f64,
}

/// Linear sequence of bins; per bin the posteriors sum to one and entries
/// are sorted by descending posterior.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ConfusionNetwork {
    pub bins: Vec<Vec<CnEntry>>,
}

impl ConfusionNetwork {
    /// Highest-posterior token of each bin, epsilon entries skipped.
    pub fn consensus(&self) -> Vec<usize> {
        self.bins.iter().filter_map(|b| b.first().and_then(|e| e.token)).collect()
    }
}

/// Builds a confusion network by pivot alignment against the 1-best.
/// Hypothesis weights are exponentiated score differences at temperature
/// `tau`, normalized; deletions contribute epsilon entries and insertions
/// relative to the pivot are dropped.
pub fn build_cn(nbest: &NBestList, tau: f64) -> Result<ConfusionNetwork> {
    if nbest.hypotheses.is_empty() {
        return Err(Error::invalid("empty n-best list"));
    }
    let pivot = &nbest.hypotheses[0].tokens;
    let max_score = nbest.hypotheses[0].score;
    let weights: Vec<f64> =
        nbest.hypotheses.iter().map(|h| ((h.score - max_score) / tau).exp()).collect();
    let total: f64 = weights.iter().sum();

    let mut bins: Vec<HashMap<Option<usize>, f64>> = vec![HashMap::new(); pivot.len()];
    for (h, w) in nbest.hypotheses.iter().zip(weights.iter()) {
        let weight = w / total;
        let (ops, _) = edit_align(pivot, &h.tokens);
        let mut i = 0usize; // pivot position
        let mut j = 0usize; // hypothesis position
        for op in ops {
            match op {
                EditOp::Match | EditOp::Sub => {
                    *bins[i].entry(Some(h.tokens[j])).or_insert(0.0) += weight;
                    i += 1;
                    j += 1;
                }
                EditOp::Del => {
                    *bins[i].entry(None).or_insert(0.0) += weight;
                    i += 1;
                }
                EditOp::Ins => {
                    j += 1;
                }
            }
        }
    }
    let bins = bins
        .into_iter()
        .map(|bin| {
            let mut entries: Vec<CnEntry> =
                bin.into_iter().map(|(token, posterior)| CnEntry { token, posterior }).collect();
            entries.sort_by(|a, b| {
                b.posterior
                    .partial_cmp(&a.posterior)
                    .unwrap()
                    .then_with(|| token_order(a.token).cmp(&token_order(b.token)))
            });
            entries
        })
        .collect();
    Ok(ConfusionNetwork { bins })
}

fn token_order(t: Option<usize>) -> usize {
    t.map_or(usize::MAX, |v| v)
}

/// N-best dump lines: `<utt-id> <rank> <score> <tokens...>`.
pub fn nbest_dump(utt_id: &str, nbest: &NBestList, lexicon: &Lexicon) -> String {
    let mut out = String::new();
    for (rank, h) in nbest.hypotheses.iter().enumerate() {
        let words: Vec<&str> =
            h.tokens.iter().map(|&t| lexicon.tokens[t].surface.as_str()).collect();
        out.push_str(&format!("{}\t{}\t{:.6}\t{}\n", utt_id, rank + 1, h.score, words.join(" ")));
    }
    out
}

/// CN dump lines: `<utt-id> <bin-index> <token|«eps»> <posterior>`.
pub fn cn_dump(utt_id: &str, cn: &ConfusionNetwork, lexicon: &Lexicon) -> String {
    let mut out = String::new();
    for (b, bin) in cn.bins.iter().enumerate() {
        for e in bin {
            let name = match e.token {
                Some(t) => lexicon.tokens[t].surface.as_str(),
                None => "«eps»",
            };
            out.push_str(&format!("{}\t{}\t{}\t{:.6}\n", utt_id, b, name, e.posterior));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{
        build_lexicon, generator_alignment, synthesize_utterance, LexClass, LexToken, NoiseCondition,
        Phone, PhoneClass, SpeakerProfile,
    };
    use crate::lm::train_lm;
    use crate::util::rng_from_seed;
    use rand::Rng as _;

    /// Silence plus `n_words` word tokens, `states` states each.
    fn tiny_lexicon(n_words: usize, states: usize) -> Lexicon {
        let phones = vec![
            Phone { symbol: "v0".into(), class: PhoneClass::Vowel },
            Phone { symbol: "s0".into(), class: PhoneClass::Stop },
        ];
        let mut tokens = vec![LexToken {
            id: 0,
            surface: "<sil>".into(),
            phones: vec![0],
            class: LexClass::Other,
            states: 1,
        }];
        for i in 1..=n_words {
            tokens.push(LexToken {
                id: i,
                surface: format!("w{i}"),
                phones: vec![i % 2, (i + 1) % 2],
                class: LexClass::Noun,
                states,
            });
        }
        Lexicon::new(tokens, phones, 0, 999).unwrap()
    }

    fn flat_lm(lexicon: &Lexicon) -> NgramLm {
        // bigram over a few synthetic sentences covering all words
        let words: Vec<usize> =
            (0..lexicon.vocab_size()).filter(|&t| !lexicon.is_silence(t)).collect();
        let mut sents = Vec::new();
        for (i, &w) in words.iter().enumerate() {
            let mut s = vec![w];
            s.push(words[(i + 1) % words.len()]);
            sents.push(s);
        }
        train_lm(&sents, 2, 0.75, lexicon.vocab_size()).unwrap()
    }

    fn random_loglik(rng: &mut crate::util::Rng, t: usize, states: usize) -> Matrix {
        let mut m = Matrix::zeros(t, states);
        for v in m.data_mut() {
            *v = rng.gen_range(-4.0..0.0);
        }
        m
    }

    /// Brute-force oracle: every word sequence (no silence, no immediate
    /// repeats) scored by plain recursion over all segmentations.
    fn oracle_sequences(
        loglik: &Matrix,
        lexicon: &Lexicon,
        lm: &NgramLm,
        lm_weight: f64,
    ) -> Vec<(Vec<usize>, f64)> {
        let t_len = loglik.rows();
        let words: Vec<usize> =
            (0..lexicon.vocab_size()).filter(|&t| !lexicon.is_silence(t)).collect();

        fn seg_score(
            loglik: &Matrix,
            states: &[usize],
            t0: usize,
            t1: usize,
        ) -> f64 {
            if states.len() == 1 {
                return (t0..t1).map(|t| loglik.get(t, states[0])).sum();
            }
            let rest = states.len() - 1;
            let mut best = f64::NEG_INFINITY;
            for cut in t0 + 1..=t1 - rest {
                let head: f64 = (t0..cut).map(|t| loglik.get(t, states[0])).sum();
                let tail = seg_score(loglik, &states[1..], cut, t1);
                best = best.max(head + tail);
            }
            best
        }

        let mut results: Vec<(Vec<usize>, f64)> = Vec::new();
        let mut stack: Vec<Vec<usize>> = words.iter().map(|&w| vec![w]).collect();
        while let Some(seq) = stack.pop() {
            let states: Vec<usize> = seq
                .iter()
                .flat_map(|&w| (0..lexicon.tokens[w].states).map(move |j| (w, j)))
                .map(|(w, j)| lexicon.global_state(w, j))
                .collect();
            if states.len() <= t_len {
                let mut lm_score = lm.cond_logprob(&[lm.bos()], seq[0]);
                for k in 1..seq.len() {
                    lm_score += lm.cond_logprob(&[seq[k - 1]], seq[k]);
                }
                lm_score += lm.cond_logprob(&[*seq.last().unwrap()], lm.eos());
                let acoustic = seg_score(loglik, &states, 0, t_len);
                results.push((seq.clone(), acoustic + lm_weight * lm_score));
                for &w in &words {
                    if w != *seq.last().unwrap() {
                        let mut longer = seq.clone();
                        longer.push(w);
                        stack.push(longer);
                    }
                }
            }
        }
        results.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then_with(|| a.0.cmp(&b.0)));
        results
    }

    #[test]
    fn viterbi_matches_bruteforce_enumeration() {
        let lexicon = tiny_lexicon(3, 1);
        let lm = flat_lm(&lexicon);
        let config =
            GraphConfig { lm_weight: 0.7, silence_enabled: false, ..GraphConfig::default() };
        let graph = DecodingGraph::build(&lexicon, &lm, &config).unwrap();
        for seed in 0..30 {
            let mut rng = rng_from_seed(seed);
            let t_len = rng.gen_range(1..=6);
            let loglik = random_loglik(&mut rng, t_len, lexicon.total_states());
            let (hyp, _) = viterbi_decode(&graph, &loglik).unwrap();
            let oracle = oracle_sequences(&loglik, &lexicon, &lm, 0.7);
            let (best_seq, best_score) = &oracle[0];
            assert!((hyp.score - best_score).abs() < 1e-9, "seed {seed}");
            assert_eq!(&hyp.tokens, best_seq, "seed {seed}");
        }
    }

    #[test]
    fn nbest_matches_bruteforce_enumeration() {
        let lexicon = tiny_lexicon(3, 1);
        let lm = flat_lm(&lexicon);
        let config =
            GraphConfig { lm_weight: 1.0, silence_enabled: false, ..GraphConfig::default() };
        let graph = DecodingGraph::build(&lexicon, &lm, &config).unwrap();
        for seed in 100..120 {
            let mut rng = rng_from_seed(seed);
            let t_len = rng.gen_range(2..=6);
            let loglik = random_loglik(&mut rng, t_len, lexicon.total_states());
            let oracle = oracle_sequences(&loglik, &lexicon, &lm, 1.0);
            let n = 5.min(oracle.len());
            let nb = nbest_decode(&graph, &loglik, n, 256).unwrap();
            assert_eq!(nb.hypotheses.len(), n, "seed {seed}");
            for (h, (seq, score)) in nb.hypotheses.iter().zip(oracle.iter()) {
                assert!((h.score - score).abs() < 1e-9, "seed {seed}");
                assert_eq!(&h.tokens, seq, "seed {seed}");
            }
        }
    }

    #[test]
    fn nbest_first_equals_viterbi_and_sorted() {
        let lexicon = tiny_lexicon(3, 2);
        let lm = flat_lm(&lexicon);
        let graph = DecodingGraph::build(&lexicon, &lm, &GraphConfig::default()).unwrap();
        let mut rng = rng_from_seed(7);
        let loglik = random_loglik(&mut rng, 12, lexicon.total_states());
        let (hyp, _) = viterbi_decode(&graph, &loglik).unwrap();
        let nb = nbest_decode(&graph, &loglik, 6, 64).unwrap();
        assert_eq!(nb.hypotheses[0].tokens, hyp.tokens);
        assert!((nb.hypotheses[0].score - hyp.score).abs() < 1e-9);
        for w in nb.hypotheses.windows(2) {
            assert!(w[0].score >= w[1].score);
            assert_ne!(w[0].tokens, w[1].tokens);
        }
        // n = 1 returns exactly the viterbi hypothesis
        let nb1 = nbest_decode(&graph, &loglik, 1, 64).unwrap();
        assert_eq!(nb1.hypotheses.len(), 1);
        assert_eq!(nb1.hypotheses[0].tokens, hyp.tokens);
    }

    #[test]
    fn lm_weight_zero_follows_frame_argmax() {
        let lexicon = tiny_lexicon(2, 1);
        let lm = flat_lm(&lexicon);
        let config =
            GraphConfig { lm_weight: 0.0, silence_enabled: false, ..GraphConfig::default() };
        let graph = DecodingGraph::build(&lexicon, &lm, &config).unwrap();
        let mut rng = rng_from_seed(21);
        let loglik = random_loglik(&mut rng, 6, lexicon.total_states());
        let (hyp, align) = viterbi_decode(&graph, &loglik).unwrap();
        let word_states: Vec<usize> = (1..lexicon.vocab_size())
            .map(|w| lexicon.global_state(w, 0))
            .collect();
        for t in 0..6 {
            let best = word_states
                .iter()
                .copied()
                .max_by(|&a, &b| loglik.get(t, a).partial_cmp(&loglik.get(t, b)).unwrap())
                .unwrap();
            assert_eq!(align.frame_states[t], best);
        }
        assert!(!hyp.tokens.is_empty());
        // and the exhaustive oracle agrees
        let oracle = oracle_sequences(&loglik, &lexicon, &lm, 0.0);
        assert!((hyp.score - oracle[0].1).abs() < 1e-9);
    }

    #[test]
    fn decode_is_deterministic() {
        let lexicon = tiny_lexicon(3, 2);
        let lm = flat_lm(&lexicon);
        let graph = DecodingGraph::build(&lexicon, &lm, &GraphConfig::default()).unwrap();
        let mut rng = rng_from_seed(3);
        let loglik = random_loglik(&mut rng, 10, lexicon.total_states());
        let a = viterbi_decode(&graph, &loglik).unwrap();
        let b = viterbi_decode(&graph, &loglik).unwrap();
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
        let na = nbest_decode(&graph, &loglik, 4, 32).unwrap();
        let nb = nbest_decode(&graph, &loglik, 4, 32).unwrap();
        assert_eq!(na.hypotheses, nb.hypotheses);
    }

    #[test]
    fn too_short_utterance_rejected() {
        let lexicon = tiny_lexicon(2, 3);
        let lm = flat_lm(&lexicon);
        let config =
            GraphConfig { lm_weight: 1.0, silence_enabled: false, ..GraphConfig::default() };
        let graph = DecodingGraph::build(&lexicon, &lm, &config).unwrap();
        let mut rng = rng_from_seed(5);
        // words need 3 frames; 2 frames cannot complete any path
        let loglik = random_loglik(&mut rng, 2, lexicon.total_states());
        assert!(matches!(viterbi_decode(&graph, &loglik), Err(Error::TooShort(_))));
    }

    #[test]
    fn forced_alignment_two_state_token_two_frames() {
        let lexicon = tiny_lexicon(2, 2);
        let mut rng = rng_from_seed(8);
        let loglik = random_loglik(&mut rng, 2, lexicon.total_states());
        let align = forced_align(&loglik, &lexicon, &[1]).unwrap();
        assert_eq!(
            align.frame_states,
            vec![lexicon.global_state(1, 0), lexicon.global_state(1, 1)]
        );
        assert_eq!(align.tokens(), vec![1]);
    }

    #[test]
    fn forced_alignment_reproduces_reference() {
        let lexicon = tiny_lexicon(4, 2);
        let mut rng = rng_from_seed(9);
        for _ in 0..100 {
            let len = rng.gen_range(1..5);
            let mut reference = Vec::with_capacity(len);
            for _ in 0..len {
                reference.push(rng.gen_range(1..lexicon.vocab_size()));
            }
            let needed: usize = reference.iter().map(|&t| lexicon.tokens[t].states).sum();
            let t_len = needed + rng.gen_range(0..6);
            let loglik = random_loglik(&mut rng, t_len, lexicon.total_states());
            let align = forced_align(&loglik, &lexicon, &reference).unwrap();
            assert_eq!(align.tokens(), reference);
            assert_eq!(align.frame_states.len(), t_len);
            // spans partition the frame range
            assert_eq!(align.spans.first().unwrap().start, 0);
            assert_eq!(align.spans.last().unwrap().end, t_len);
            for w in align.spans.windows(2) {
                assert_eq!(w[0].end, w[1].start);
            }
        }
    }

    #[test]
    fn forced_alignment_too_short_errors() {
        let lexicon = tiny_lexicon(2, 3);
        let mut rng = rng_from_seed(10);
        let loglik = random_loglik(&mut rng, 2, lexicon.total_states());
        assert!(forced_align(&loglik, &lexicon, &[1]).is_err());
    }

    #[test]
    fn forced_alignment_recovers_generator_spans_on_clean_audio() {
        // a noiseless utterance aligned against the true emission means
        // reproduces the generator's frame spans exactly
        let lexicon = build_lexicon(1, 20, 10).unwrap();
        let dim = 6;
        let speaker = SpeakerProfile::identity("s", dim);
        let condition = NoiseCondition::identity(0, dim);
        let reference = vec![3usize, 7, 1];
        let fps = 3;
        let utt =
            synthesize_utterance(&lexicon, &reference, &speaker, &condition, fps, 0.0, 42).unwrap();
        // loglik from true means: negative squared distance to each state mean
        let n_states = lexicon.total_states();
        let mut loglik = Matrix::zeros(utt.frames.rows(), n_states);
        for t in 0..utt.frames.rows() {
            for s in 0..n_states {
                let mut d2 = 0.0;
                for d in 0..dim {
                    let diff = utt.frames.get(t, d) - lexicon.state_mean(s, d);
                    d2 += diff * diff;
                }
                loglik.set(t, s, -d2);
            }
        }
        let align = forced_align(&loglik, &lexicon, &reference).unwrap();
        assert_eq!(align.frame_states, generator_alignment(&lexicon, &reference, fps));
    }

    #[test]
    fn cn_single_hypothesis_is_degenerate() {
        let nb = NBestList {
            hypotheses: vec![Hypothesis { tokens: vec![2, 5, 1], score: -3.0, acoustic: -3.0 }],
            truncated: false,
        };
        let cn = build_cn(&nb, 1.0).unwrap();
        assert_eq!(cn.bins.len(), 3);
        for (bin, &tok) in cn.bins.iter().zip([2usize, 5, 1].iter()) {
            assert_eq!(bin.len(), 1);
            assert_eq!(bin[0].token, Some(tok));
            assert!((bin[0].posterior - 1.0).abs() < 1e-12);
        }
        assert_eq!(cn.consensus(), vec![2, 5, 1]);
    }

    #[test]
    fn cn_equal_scores_split_evenly() {
        let nb = NBestList {
            hypotheses: vec![
                Hypothesis { tokens: vec![1, 2], score: -2.0, acoustic: -2.0 },
                Hypothesis { tokens: vec![1, 3], score: -2.0, acoustic: -2.0 },
            ],
            truncated: false,
        };
        let cn = build_cn(&nb, 1.0).unwrap();
        assert_eq!(cn.bins.len(), 2);
        assert_eq!(cn.bins[0].len(), 1);
        assert!((cn.bins[0][0].posterior - 1.0).abs() < 1e-12);
        assert_eq!(cn.bins[1].len(), 2);
        for e in &cn.bins[1] {
            assert!((e.posterior - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn cn_bins_always_normalize() {
        let lexicon = tiny_lexicon(3, 1);
        let lm = flat_lm(&lexicon);
        let graph = DecodingGraph::build(&lexicon, &lm, &GraphConfig::default()).unwrap();
        let mut rng = rng_from_seed(30);
        for _ in 0..20 {
            let t_len = rng.gen_range(3..10);
            let loglik = random_loglik(&mut rng, t_len, lexicon.total_states());
            let nb = nbest_decode(&graph, &loglik, 6, 64).unwrap();
            let cn = build_cn(&nb, 1.0).unwrap();
            for bin in &cn.bins {
                let sum: f64 = bin.iter().map(|e| e.posterior).sum();
                assert!((sum - 1.0).abs() < 1e-9);
                for w in bin.windows(2) {
                    assert!(w[0].posterior >= w[1].posterior);
                }
            }
            // with a single-hypothesis input the consensus reproduces the
            // 1-best sequence
            let nb1 = nbest_decode(&graph, &loglik, 1, 64).unwrap();
            let cn1 = build_cn(&nb1, 1.0).unwrap();
            assert_eq!(cn1.consensus(), nb1.hypotheses[0].tokens);
        }
    }
}
