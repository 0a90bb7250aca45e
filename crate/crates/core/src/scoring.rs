//! Edit-distance alignment, sentence/corpus WER and utterance-selection
//! policies (threshold and top-K, oracle or predicted).

use std::collections::HashMap;

use crate::corpus::Corpus;
use crate::{Error, Result};

/// One step of an edit alignment between a reference and a hypothesis.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EditOp {
    Match,
    Sub,
    Del,
    Ins,
}

/// Error counts from an edit alignment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct EditCounts {
    pub subs: usize,
    pub dels: usize,
    pub ins: usize,
}

impl EditCounts {
    pub fn total(&self) -> usize {
        self.subs + self.dels + self.ins
    }
}

/// Minimal-edit alignment with unit costs.
///
/// Backtrace tie-break prefers match > substitution > deletion > insertion,
/// so identical inputs always produce the same operation list.
pub fn edit_align<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> (Vec<EditOp>, EditCounts) {
    let m = reference.len();
    let n = hypothesis.len();
    let mut dist = vec![0usize; (m + 1) * (n + 1)];
    let idx = |i: usize, j: usize| i * (n + 1) + j;
    for i in 0..=m {
        dist[idx(i, 0)] = i;
    }
    for j in 0..=n {
        dist[idx(0, j)] = j;
    }
    for i in 1..=m {
        for j in 1..=n {
            let cost = usize::from(reference[i - 1] != hypothesis[j - 1]);
            let diag = dist[idx(i - 1, j - 1)] + cost;
            let del = dist[idx(i - 1, j)] + 1;
            let ins = dist[idx(i, j - 1)] + 1;
            dist[idx(i, j)] = diag.min(del).min(ins);
        }
    }

    let mut ops = Vec::with_capacity(m.max(n));
    let (mut i, mut j) = (m, n);
    while i > 0 || j > 0 {
        let here = dist[idx(i, j)];
        if i > 0 && j > 0 && reference[i - 1] == hypothesis[j - 1] && here == dist[idx(i - 1, j - 1)] {
            ops.push(EditOp::Match);
            i -= 1;
            j -= 1;
        } else if i > 0 && j > 0 && here == dist[idx(i - 1, j - 1)] + 1 {
            ops.push(EditOp::Sub);
            i -= 1;
            j -= 1;
        } else if i > 0 && here == dist[idx(i - 1, j)] + 1 {
            ops.push(EditOp::Del);
            i -= 1;
        } else {
            ops.push(EditOp::Ins);
            j -= 1;
        }
    }
    ops.reverse();

    let mut counts = EditCounts::default();
    for op in &ops {
        match op {
            EditOp::Match => {}
            EditOp::Sub => counts.subs += 1,
            EditOp::Del => counts.dels += 1,
            EditOp::Ins => counts.ins += 1,
        }
    }
    (ops, counts)
}

/// Raw sentence WER, (S+D+I)/len(ref). May exceed 1 with insertions.
pub fn sentence_wer<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::invalid("sentence WER needs a non-empty reference"));
    }
    let (_, counts) = edit_align(reference, hypothesis);
    Ok(counts.total() as f64 / reference.len() as f64)
}

/// Sentence WER clamped to [0,1], the form consumed by the QE target and by
/// the sentence-dependent regularization coefficient.
pub fn sentence_wer_clamped<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> Result<f64> {
    sentence_wer(reference, hypothesis).map(|w| w.min(1.0))
}

/// Per-utterance scoring entry.
#[derive(Debug, Clone)]
pub struct UttScore {
    pub utt_id: String,
    pub subs: usize,
    pub dels: usize,
    pub ins: usize,
    pub ref_len: usize,
    pub wer: f64,
}

impl UttScore {
    pub fn from_pair<T: PartialEq>(utt_id: &str, reference: &[T], hypothesis: &[T]) -> Result<Self> {
        if reference.is_empty() {
            return Err(Error::invalid(format!("empty reference for {utt_id}")));
        }
        let (_, c) = edit_align(reference, hypothesis);
        Ok(UttScore {
            utt_id: utt_id.to_string(),
            subs: c.subs,
            dels: c.dels,
            ins: c.ins,
            ref_len: reference.len(),
            wer: c.total() as f64 / reference.len() as f64,
        })
    }
}

/// WER report over a corpus. The corpus WER is the ratio of summed error
/// counts to summed reference lengths, not the mean of sentence WERs.
#[derive(Debug, Clone, Default)]
pub struct WerReport {
    pub utts: Vec<UttScore>,
}

impl WerReport {
    pub fn corpus_wer(&self) -> f64 {
        let errors: usize = self.utts.iter().map(|u| u.subs + u.dels + u.ins).sum();
        let ref_len: usize = self.utts.iter().map(|u| u.ref_len).sum();
        if ref_len == 0 {
            0.0
        } else {
            errors as f64 / ref_len as f64
        }
    }

    /// Map from utterance id to clamped sentence WER.
    pub fn wer_map(&self) -> HashMap<String, f64> {
        self.utts.iter().map(|u| (u.utt_id.clone(), u.wer.min(1.0))).collect()
    }

    /// TSV dump: `utt-id S D I ref-len wer` lines plus a TOTAL percent line.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for u in &self.utts {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\t{:.6}\n",
                u.utt_id, u.subs, u.dels, u.ins, u.ref_len, u.wer
            ));
        }
        out.push_str(&format!("TOTAL\t{:.2}\n", self.corpus_wer() * 100.0));
        out
    }
}

/// Which WER estimate drives the selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SelectionBasis {
    Oracle,
    Predicted,
}

/// How the adaptation subset is carved out of the corpus.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SelectionMode {
    /// Keep utterances with WER <= threshold.
    Threshold(f64),
    /// Keep the K smallest-WER utterances, ties broken by utterance id.
    TopK(usize),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SelectionSpec {
    pub basis: SelectionBasis,
    pub mode: SelectionMode,
}

impl SelectionSpec {
    pub fn validate(&self) -> Result<()> {
        match self.mode {
            SelectionMode::Threshold(theta) => {
                if !(0.0..=1.0).contains(&theta) {
                    return Err(Error::invalid(format!("threshold {theta} outside [0,1]")));
                }
            }
            SelectionMode::TopK(k) => {
                if k == 0 {
                    return Err(Error::invalid("top-K selection needs K >= 1"));
                }
            }
        }
        Ok(())
    }
}

/// Outcome of a selection pass.
#[derive(Debug, Clone)]
pub struct Selection {
    pub corpus: Corpus,
    /// Set when top-K asked for more utterances than the corpus holds.
    pub truncated: bool,
}

/// Selects an adaptation subset. Threshold mode keeps utterances with
/// WER <= theta; top-K keeps the K smallest-WER utterances. The original
/// corpus order is preserved in the returned subset.
pub fn select_utterances(
    corpus: &Corpus,
    wer_map: &HashMap<String, f64>,
    spec: &SelectionSpec,
) -> Result<Selection> {
    spec.validate()?;
    for utt in &corpus.utterances {
        if !wer_map.contains_key(&utt.id) {
            return Err(Error::invalid(format!("wer map misses utterance {}", utt.id)));
        }
    }
    let mut truncated = false;
    let keep_ids: Vec<String> = match spec.mode {
        SelectionMode::Threshold(theta) => corpus
            .utterances
            .iter()
            .filter(|u| wer_map[&u.id] <= theta)
            .map(|u| u.id.clone())
            .collect(),
        SelectionMode::TopK(k) => {
            let mut ranked: Vec<(&String, f64)> =
                corpus.utterances.iter().map(|u| (&u.id, wer_map[&u.id])).collect();
            ranked.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then_with(|| a.0.cmp(b.0)));
            if k >= ranked.len() {
                truncated = k > ranked.len();
                ranked.iter().map(|(id, _)| (*id).clone()).collect()
            } else {
                ranked[..k].iter().map(|(id, _)| (*id).clone()).collect()
            }
        }
    };
    let keep: std::collections::HashSet<&String> = keep_ids.iter().collect();
    let mut sub = corpus.clone();
    sub.utterances.retain(|u| keep.contains(&u.id));
    Ok(Selection { corpus: sub, truncated })
}
