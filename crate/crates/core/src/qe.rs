//! Sentence-level WER prediction: a 41-dimensional feature vector per
//! hypothesis and an extremely-randomized-trees regressor tuned by
//! speaker-disjoint k-fold MAE.
//!
//! Features come in three groups: confusion-network statistics, sentence
//! statistics and word-level statistics. Per-bin and per-word quantities are
//! aggregated to sentence level by arithmetic mean; missing-context
//! positions at sentence edges contribute zero.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::Rng as _;

use crate::corpus::{LexClass, Lexicon, PHONE_CLASSES};
use crate::decoder::{ConfusionNetwork, Hypothesis};
use crate::lm::NgramLm;
use crate::util::{fmt_g12, mix_seed, parse_f64, parse_usize, rng_from_seed};
use crate::{Error, Result};

pub const QE_DIM: usize = 41;

/// Names of the 41 features, in vector order.
pub const QE_FEATURE_NAMES: [&str; QE_DIM] = [
    "cn_log_top",
    "cn_log_top_prev",
    "cn_log_top_next",
    "cn_mean_logp",
    "cn_std_logp",
    "cn_min_logp",
    "cn_max_logp",
    "cn_prev_is_sil",
    "cn_next_is_sil",
    "n_words",
    "lm_logprob",
    "class_lm_logprob",
    "log_perplexity",
    "class_log_perplexity",
    "pct_number",
    "pct_non_alpha",
    "pct_content",
    "pct_noun",
    "pct_verb",
    "class_id_prev",
    "class_id_cur",
    "class_id_next",
    "class_score_prev",
    "class_score_cur",
    "class_score_next",
    "word_logp_in",
    "word_logp_out",
    "word_unigram_in",
    "word_unigram_out",
    "phones_fricative",
    "phones_liquid",
    "phones_nasal",
    "phones_stop",
    "phones_vowel",
    "homophones",
    "neighbors",
    "is_stop_word",
    "before_repetition",
    "after_repetition",
    "before_silence",
    "after_silence",
];

/// One 41-dimensional feature vector.
#[derive(Debug, Clone, PartialEq)]
pub struct QeFeatureVector(pub Vec<f64>);

impl QeFeatureVector {
    pub fn values(&self) -> &[f64] {
        &self.0
    }
}

fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        0.0
    } else {
        values.iter().sum::<f64>() / values.len() as f64
    }
}

/// Extracts the 41 features for one decoded utterance.
pub fn extract_features(
    hypothesis: &Hypothesis,
    cn: &ConfusionNetwork,
    lm_in: &NgramLm,
    lm_out: &NgramLm,
    class_lm: &NgramLm,
    lexicon: &Lexicon,
) -> QeFeatureVector {
    let mut f = vec![0.0f64; QE_DIM];

    // --- confusion-network group, mean over bins ---
    let n_bins = cn.bins.len();
    if n_bins > 0 {
        let top_log: Vec<f64> =
            cn.bins.iter().map(|b| b[0].posterior.max(1e-12).ln()).collect();
        let top_is_sil: Vec<f64> = cn
            .bins
            .iter()
            .map(|b| if b[0].token == Some(lexicon.silence_id) { 1.0 } else { 0.0 })
            .collect();
        let mut prev_log = Vec::with_capacity(n_bins);
        let mut next_log = Vec::with_capacity(n_bins);
        let mut prev_sil = Vec::with_capacity(n_bins);
        let mut next_sil = Vec::with_capacity(n_bins);
        for b in 0..n_bins {
            prev_log.push(if b > 0 { top_log[b - 1] } else { 0.0 });
            next_log.push(if b + 1 < n_bins { top_log[b + 1] } else { 0.0 });
            prev_sil.push(if b > 0 { top_is_sil[b - 1] } else { 0.0 });
            next_sil.push(if b + 1 < n_bins { top_is_sil[b + 1] } else { 0.0 });
        }
        let mut mean_lp = Vec::with_capacity(n_bins);
        let mut std_lp = Vec::with_capacity(n_bins);
        let mut min_lp = Vec::with_capacity(n_bins);
        let mut max_lp = Vec::with_capacity(n_bins);
        for bin in &cn.bins {
            let logs: Vec<f64> = bin.iter().map(|e| e.posterior.max(1e-12).ln()).collect();
            let m = mean(&logs);
            let var = logs.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / logs.len() as f64;
            mean_lp.push(m);
            std_lp.push(var.sqrt());
            min_lp.push(logs.iter().cloned().fold(f64::INFINITY, f64::min));
            max_lp.push(logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max));
        }
        f[0] = mean(&top_log);
        f[1] = mean(&prev_log);
        f[2] = mean(&next_log);
        f[3] = mean(&mean_lp);
        f[4] = mean(&std_lp);
        f[5] = mean(&min_lp);
        f[6] = mean(&max_lp);
        f[7] = mean(&prev_sil);
        f[8] = mean(&next_sil);
    }

    // --- sentence group over the silence-stripped word sequence ---
    let words = hypothesis.words(lexicon);
    let n = words.len();
    f[9] = n as f64;
    if n > 0 {
        let classes: Vec<usize> =
            words.iter().map(|&w| lexicon.tokens[w].class.index()).collect();
        f[10] = lm_in.logprob(&words);
        f[11] = class_lm.logprob(&classes);
        f[12] = lm_in.perplexity(&words).ln();
        f[13] = class_lm.perplexity(&classes).ln();
        let frac = |pred: &dyn Fn(usize) -> bool| {
            words.iter().filter(|&&w| pred(w)).count() as f64 / n as f64
        };
        f[14] = frac(&|w| lexicon.tokens[w].class == LexClass::Number);
        f[15] = frac(&|w| {
            lexicon.tokens[w].surface.chars().any(|c| !c.is_ascii_lowercase())
        });
        f[16] = frac(&|w| lexicon.tokens[w].class != LexClass::Function);
        f[17] = frac(&|w| lexicon.tokens[w].class == LexClass::Noun);
        f[18] = frac(&|w| lexicon.tokens[w].class == LexClass::Verb);

        // --- word-level group, mean over words ---
        let class_score = |i: usize| -> f64 {
            let ctx: Vec<usize> = classes[..i].to_vec();
            class_lm.cond_logprob(&ctx, classes[i])
        };
        let word_logp = |lm: &NgramLm, i: usize, order: usize| -> f64 {
            let ctx: Vec<usize> = words[..i].to_vec();
            lm.cond_logprob_at_order(&ctx, words[i], order)
        };
        // silence adjacency over the full token sequence
        let mut before_sil = vec![0.0; n];
        let mut after_sil = vec![0.0; n];
        {
            let toks = &hypothesis.tokens;
            let mut wi = 0usize;
            for (p, &t) in toks.iter().enumerate() {
                if lexicon.is_silence(t) {
                    continue;
                }
                if p > 0 && lexicon.is_silence(toks[p - 1]) {
                    after_sil[wi] = 1.0;
                }
                if p + 1 < toks.len() && lexicon.is_silence(toks[p + 1]) {
                    before_sil[wi] = 1.0;
                }
                wi += 1;
            }
        }
        let mut acc: Vec<Vec<f64>> = vec![Vec::new(); 22];
        for i in 0..n {
            let w = words[i];
            acc[0].push(if i > 0 { classes[i - 1] as f64 } else { 0.0 });
            acc[1].push(classes[i] as f64);
            acc[2].push(if i + 1 < n { classes[i + 1] as f64 } else { 0.0 });
            acc[3].push(if i > 0 { class_score(i - 1) } else { 0.0 });
            acc[4].push(class_score(i));
            acc[5].push(if i + 1 < n { class_score(i + 1) } else { 0.0 });
            acc[6].push(word_logp(lm_in, i, lm_in.order));
            acc[7].push(word_logp(lm_out, i, lm_out.order));
            acc[8].push(word_logp(lm_in, i, 1));
            acc[9].push(word_logp(lm_out, i, 1));
            for (k, &pc) in PHONE_CLASSES.iter().enumerate() {
                let count = lexicon.tokens[w]
                    .phones
                    .iter()
                    .filter(|&&p| lexicon.phones[p].class == pc)
                    .count();
                acc[10 + k].push(count as f64);
            }
            acc[15].push(lexicon.homophone_count(w) as f64);
            acc[16].push(lexicon.neighbor_count(w) as f64);
            acc[17].push(if lexicon.tokens[w].class == LexClass::Function { 1.0 } else { 0.0 });
            acc[18].push(if i + 1 < n && words[i + 1] == w { 1.0 } else { 0.0 });
            acc[19].push(if i > 0 && words[i - 1] == w { 1.0 } else { 0.0 });
            acc[20].push(before_sil[i]);
            acc[21].push(after_sil[i]);
        }
        for (k, values) in acc.iter().enumerate() {
            f[19 + k] = mean(values);
        }
    }
    debug_assert!(f.iter().all(|v| v.is_finite()));
    QeFeatureVector(f)
}

/// Feature dump TSV: `utt-id f1 ... f41`.
pub fn features_to_tsv(rows: &[(String, QeFeatureVector)]) -> String {
    let mut out = String::new();
    for (id, fv) in rows {
        out.push_str(id);
        for v in fv.values() {
            out.push_str(&format!("\t{v:.6}"));
        }
        out.push('\n');
    }
    out
}

pub fn features_from_tsv(text: &str) -> Result<Vec<(String, QeFeatureVector)>> {
    let mut rows = Vec::new();
    for line in text.lines() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != QE_DIM + 1 {
            return Err(Error::Parse(format!("feature row arity {}", fields.len())));
        }
        let values: Vec<f64> =
            fields[1..].iter().map(|s| parse_f64(s)).collect::<Result<_>>()?;
        rows.push((fields[0].to_string(), QeFeatureVector(values)));
    }
    Ok(rows)
}

// ---------------------------------------------------------------------------
// Extremely randomized trees
// ---------------------------------------------------------------------------

/// Ensemble controls: bags, trees per bag, random features per split and the
/// minimum node size that still splits.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct XrtParams {
    pub n_bags: usize,
    pub trees_per_bag: usize,
    pub k_features: usize,
    pub n_min: usize,
    pub bootstrap: bool,
    pub seed: u64,
}

impl Default for XrtParams {
    fn default() -> Self {
        XrtParams { n_bags: 4, trees_per_bag: 16, k_features: 8, n_min: 4, bootstrap: true, seed: 0 }
    }
}

impl XrtParams {
    pub fn validate(&self, dim: usize) -> Result<()> {
        if self.n_bags == 0 || self.trees_per_bag == 0 || self.k_features == 0 || self.n_min == 0 {
            return Err(Error::invalid("xrt params must all be >= 1"));
        }
        if self.k_features > dim {
            return Err(Error::invalid(format!(
                "k_features {} exceeds dimensionality {dim}",
                self.k_features
            )));
        }
        Ok(())
    }

    pub fn total_trees(&self) -> usize {
        self.n_bags * self.trees_per_bag
    }
}

#[derive(Debug, Clone, PartialEq)]
enum TreeNode {
    Split { feature: usize, cut: f64, left: usize, right: usize },
    Leaf { value: f64 },
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct XrtTree {
    nodes: Vec<TreeNode>,
}

impl XrtTree {
    fn predict(&self, x: &[f64]) -> f64 {
        let mut idx = 0usize;
        loop {
            match &self.nodes[idx] {
                TreeNode::Leaf { value } => return *value,
                TreeNode::Split { feature, cut, left, right } => {
                    idx = if x[*feature] < *cut { *left } else { *right };
                }
            }
        }
    }
}

/// Bagged ensemble of extremely randomized regression trees.
#[derive(Debug, Clone, PartialEq)]
pub struct XrtModel {
    pub dim: usize,
    pub n_bags: usize,
    pub trees_per_bag: usize,
    bags: Vec<Vec<XrtTree>>,
}

impl XrtModel {
    /// Raw per-tree outputs for one sample, across all bags.
    pub fn tree_outputs(&self, x: &[f64]) -> Vec<f64> {
        self.bags.iter().flatten().map(|t| t.predict(x)).collect()
    }
}

fn variance(targets: &[f64], idx: &[usize]) -> f64 {
    let n = idx.len() as f64;
    let m = idx.iter().map(|&i| targets[i]).sum::<f64>() / n;
    idx.iter().map(|&i| (targets[i] - m) * (targets[i] - m)).sum::<f64>() / n
}

fn build_tree(
    x: &[Vec<f64>],
    y: &[f64],
    idx: Vec<usize>,
    k_features: usize,
    n_min: usize,
    rng: &mut crate::util::Rng,
    nodes: &mut Vec<TreeNode>,
) -> usize {
    let dim = x[0].len();
    let node_var = variance(y, &idx);
    let constant_targets = node_var <= 0.0;
    if idx.len() < n_min || constant_targets {
        let value = idx.iter().map(|&i| y[i]).sum::<f64>() / idx.len() as f64;
        nodes.push(TreeNode::Leaf { value });
        return nodes.len() - 1;
    }
    // draw k distinct candidate features
    let mut order: Vec<usize> = (0..dim).collect();
    for i in 0..k_features.min(dim) {
        let j = rng.gen_range(i..dim);
        order.swap(i, j);
    }
    let mut best: Option<(f64, usize, f64)> = None; // (reduction, feature, cut)
    for &feat in order.iter().take(k_features) {
        let lo = idx.iter().map(|&i| x[i][feat]).fold(f64::INFINITY, f64::min);
        let hi = idx.iter().map(|&i| x[i][feat]).fold(f64::NEG_INFINITY, f64::max);
        if hi <= lo {
            continue;
        }
        // cut strictly inside (lo, hi)
        let cut = loop {
            let u: f64 = rng.gen_range(0.0..1.0);
            if u > 0.0 {
                break lo + u * (hi - lo);
            }
        };
        let left: Vec<usize> = idx.iter().copied().filter(|&i| x[i][feat] < cut).collect();
        let right: Vec<usize> = idx.iter().copied().filter(|&i| x[i][feat] >= cut).collect();
        if left.is_empty() || right.is_empty() {
            continue;
        }
        let nl = left.len() as f64;
        let nr = right.len() as f64;
        let n = idx.len() as f64;
        let reduction =
            node_var - (nl / n) * variance(y, &left) - (nr / n) * variance(y, &right);
        if best.as_ref().is_none_or(|b| reduction > b.0) {
            best = Some((reduction, feat, cut));
        }
    }
    match best {
        None => {
            let value = idx.iter().map(|&i| y[i]).sum::<f64>() / idx.len() as f64;
            nodes.push(TreeNode::Leaf { value });
            nodes.len() - 1
        }
        Some((_, feature, cut)) => {
            let left_idx: Vec<usize> =
                idx.iter().copied().filter(|&i| x[i][feature] < cut).collect();
            let right_idx: Vec<usize> =
                idx.iter().copied().filter(|&i| x[i][feature] >= cut).collect();
            let here = nodes.len();
            nodes.push(TreeNode::Split { feature, cut, left: 0, right: 0 });
            let left = build_tree(x, y, left_idx, k_features, n_min, rng, nodes);
            let right = build_tree(x, y, right_idx, k_features, n_min, rng, nodes);
            if let TreeNode::Split { left: l, right: r, .. } = &mut nodes[here] {
                *l = left;
                *r = right;
            }
            here
        }
    }
}

/// Fits the ensemble. Bags are bootstrap resamples of the training set
/// (bag size = training size) unless bootstrap is disabled; each tree draws
/// `k_features` random candidate features per node with one uniform random
/// cut each and keeps the best variance reduction.
pub fn xrt_fit(features: &[QeFeatureVector], targets: &[f64], params: &XrtParams) -> Result<XrtModel> {
    if features.len() < 2 {
        return Err(Error::invalid("need at least 2 training samples"));
    }
    if features.len() != targets.len() {
        return Err(Error::DimensionMismatch("features vs targets".into()));
    }
    let dim = features[0].values().len();
    params.validate(dim)?;
    if targets.iter().any(|&t| !(0.0..=1.0).contains(&t)) {
        return Err(Error::invalid("targets must lie in [0,1]"));
    }
    let x: Vec<Vec<f64>> = features.iter().map(|f| f.values().to_vec()).collect();
    let n = x.len();
    let mut bags = Vec::with_capacity(params.n_bags);
    for bag in 0..params.n_bags {
        let mut bag_rng = rng_from_seed(mix_seed(params.seed, &[0xb0, bag as u64]));
        let base: Vec<usize> = if params.bootstrap {
            (0..n).map(|_| bag_rng.gen_range(0..n)).collect()
        } else {
            (0..n).collect()
        };
        let mut trees = Vec::with_capacity(params.trees_per_bag);
        for tree in 0..params.trees_per_bag {
            let mut rng = rng_from_seed(mix_seed(params.seed, &[0x7e, bag as u64, tree as u64]));
            let mut nodes = Vec::new();
            build_tree(&x, targets, base.clone(), params.k_features, params.n_min, &mut rng, &mut nodes);
            trees.push(XrtTree { nodes });
        }
        bags.push(trees);
    }
    Ok(XrtModel { dim, n_bags: params.n_bags, trees_per_bag: params.trees_per_bag, bags })
}

/// Mean over all trees of all bags, clamped to [0,1].
pub fn xrt_predict(model: &XrtModel, features: &QeFeatureVector) -> Result<f64> {
    if features.values().len() != model.dim {
        return Err(Error::DimensionMismatch(format!(
            "feature dim {} vs model dim {}",
            features.values().len(),
            model.dim
        )));
    }
    let outputs = model.tree_outputs(features.values());
    let p = outputs.iter().sum::<f64>() / outputs.len() as f64;
    Ok(p.clamp(0.0, 1.0))
}

/// Mean absolute error between aligned prediction and oracle lists.
pub fn mae(predictions: &[f64], oracle: &[f64]) -> Result<f64> {
    if predictions.len() != oracle.len() {
        return Err(Error::DimensionMismatch("prediction vs oracle length".into()));
    }
    if predictions.is_empty() {
        return Err(Error::invalid("empty prediction list"));
    }
    Ok(predictions.iter().zip(oracle.iter()).map(|(p, o)| (p - o).abs()).sum::<f64>()
        / predictions.len() as f64)
}

/// Speaker-disjoint fold assignment: sample index -> fold.
pub fn speaker_folds(speakers: &[String], k: usize) -> Result<Vec<usize>> {
    let mut distinct: Vec<&String> = Vec::new();
    for s in speakers {
        if !distinct.contains(&s) {
            distinct.push(s);
        }
    }
    if distinct.len() < k {
        return Err(Error::invalid(format!(
            "{} folds requested but only {} speakers",
            k,
            distinct.len()
        )));
    }
    let mut sorted = distinct.clone();
    sorted.sort_unstable();
    let fold_of: HashMap<&String, usize> =
        sorted.iter().enumerate().map(|(i, s)| (*s, i % k)).collect();
    Ok(speakers.iter().map(|s| fold_of[s]).collect())
}

/// Grid search minimizing mean k-fold MAE with speaker-disjoint folds.
/// Ties prefer fewer total trees, then larger n_min, then grid order.
pub fn tune_cv(
    features: &[QeFeatureVector],
    targets: &[f64],
    speakers: &[String],
    grid: &[XrtParams],
    k: usize,
    seed: u64,
) -> Result<XrtParams> {
    if grid.is_empty() {
        return Err(Error::invalid("empty parameter grid"));
    }
    if features.len() != targets.len() || features.len() != speakers.len() {
        return Err(Error::DimensionMismatch("features/targets/speakers".into()));
    }
    let folds = speaker_folds(speakers, k)?;
    let mut best: Option<(f64, usize, usize, XrtParams)> = None;
    for (ci, candidate) in grid.iter().enumerate() {
        let mut fold_maes = Vec::with_capacity(k);
        for fold in 0..k {
            let train_idx: Vec<usize> =
                (0..features.len()).filter(|&i| folds[i] != fold).collect();
            let test_idx: Vec<usize> =
                (0..features.len()).filter(|&i| folds[i] == fold).collect();
            if train_idx.len() < 2 || test_idx.is_empty() {
                continue;
            }
            let train_x: Vec<QeFeatureVector> =
                train_idx.iter().map(|&i| features[i].clone()).collect();
            let train_y: Vec<f64> = train_idx.iter().map(|&i| targets[i]).collect();
            let params = XrtParams { seed: mix_seed(seed, &[0xcd, ci as u64]), ..candidate.clone() };
            let model = xrt_fit(&train_x, &train_y, &params)?;
            let preds: Vec<f64> = test_idx
                .iter()
                .map(|&i| xrt_predict(&model, &features[i]))
                .collect::<Result<_>>()?;
            let oracle: Vec<f64> = test_idx.iter().map(|&i| targets[i]).collect();
            fold_maes.push(mae(&preds, &oracle)?);
        }
        if fold_maes.is_empty() {
            continue;
        }
        let cv_mae = fold_maes.iter().sum::<f64>() / fold_maes.len() as f64;
        let size = candidate.total_trees();
        let better = match &best {
            None => true,
            Some((bm, bsize, bnmin, _)) => {
                cv_mae < *bm
                    || (cv_mae == *bm && (size < *bsize || (size == *bsize && candidate.n_min > *bnmin)))
            }
        };
        if better {
            let chosen =
                XrtParams { seed: mix_seed(seed, &[0xcd, ci as u64]), ..candidate.clone() };
            best = Some((cv_mae, size, candidate.n_min, chosen));
        }
    }
    best.map(|(_, _, _, p)| p).ok_or_else(|| Error::invalid("no feasible grid point"))
}

// ---------------------------------------------------------------------------
// Serialization
// ---------------------------------------------------------------------------

/// Pre-order tree dump, one node per line: `<feature-idx> <cut>` for splits,
/// `LEAF <value>` for leaves. Pre-order over binary nodes is self-delimiting
/// so only the header carries structure.
pub fn save_xrt(model: &XrtModel, path: &Path) -> Result<()> {
    let mut out = String::new();
    out.push_str(&format!("XRT {} {} {}\n", model.n_bags, model.trees_per_bag, model.dim));
    for bag in &model.bags {
        for tree in bag {
            dump_node(tree, 0, &mut out);
        }
    }
    fs::write(path, out)?;
    Ok(())
}

fn dump_node(tree: &XrtTree, idx: usize, out: &mut String) {
    match &tree.nodes[idx] {
        TreeNode::Leaf { value } => out.push_str(&format!("LEAF {}\n", fmt_g12(*value))),
        TreeNode::Split { feature, cut, left, right } => {
            out.push_str(&format!("{} {}\n", feature, fmt_g12(*cut)));
            dump_node(tree, *left, out);
            dump_node(tree, *right, out);
        }
    }
}

pub fn load_xrt(path: &Path) -> Result<XrtModel> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| Error::Parse("empty xrt file".into()))?;
    let h: Vec<&str> = header.split_whitespace().collect();
    if h.len() != 4 || h[0] != "XRT" {
        return Err(Error::Parse("bad xrt header".into()));
    }
    let n_bags = parse_usize(h[1])?;
    let trees_per_bag = parse_usize(h[2])?;
    let dim = parse_usize(h[3])?;
    let mut rest: Vec<&str> = lines.collect();
    rest.reverse(); // pop from the front
    let mut bags = Vec::with_capacity(n_bags);
    for _ in 0..n_bags {
        let mut trees = Vec::with_capacity(trees_per_bag);
        for _ in 0..trees_per_bag {
            let mut tree = XrtTree::default();
            parse_node(&mut rest, &mut tree)?;
            trees.push(tree);
        }
        bags.push(trees);
    }
    Ok(XrtModel { dim, n_bags, trees_per_bag, bags })
}

fn parse_node(rest: &mut Vec<&str>, tree: &mut XrtTree) -> Result<usize> {
    let line = rest.pop().ok_or_else(|| Error::Parse("truncated xrt dump".into()))?;
    let f: Vec<&str> = line.split_whitespace().collect();
    if f.len() != 2 {
        return Err(Error::Parse(format!("bad xrt node line {line:?}")));
    }
    if f[0] == "LEAF" {
        tree.nodes.push(TreeNode::Leaf { value: parse_f64(f[1])? });
        Ok(tree.nodes.len() - 1)
    } else {
        let here = tree.nodes.len();
        tree.nodes.push(TreeNode::Split {
            feature: parse_usize(f[0])?,
            cut: parse_f64(f[1])?,
            left: 0,
            right: 0,
        });
        let left = parse_node(rest, tree)?;
        let right = parse_node(rest, tree)?;
        if let TreeNode::Split { left: l, right: r, .. } = &mut tree.nodes[here] {
            *l = left;
            *r = right;
        }
        Ok(here)
    }
}

/// Prediction TSV: `utt-id pWER`.
pub fn predictions_to_tsv(rows: &[(String, f64)]) -> String {
    let mut out = String::new();
    for (id, p) in rows {
        out.push_str(&format!("{id}\t{p:.6}\n"));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::build_lexicon;
    use crate::util::rng_from_seed;
    use crate::decoder::{CnEntry, ConfusionNetwork, Hypothesis};
    use crate::lm::train_lm;

    fn vecs(raw: &[(f64, f64)]) -> Vec<QeFeatureVector> {
        raw.iter().map(|&(a, b)| QeFeatureVector(vec![a, b])).collect()
    }

    fn test_lms(lexicon: &crate::corpus::Lexicon) -> (NgramLm, NgramLm, NgramLm) {
        let words: Vec<usize> =
            (0..lexicon.vocab_size()).filter(|&t| !lexicon.is_silence(t)).collect();
        let sents: Vec<Vec<usize>> = words.chunks(3).map(|c| c.to_vec()).collect();
        let lm_in = train_lm(&sents, 3, 0.75, lexicon.vocab_size()).unwrap();
        let lm_out =
            train_lm(&sents[..sents.len() / 2 + 1], 3, 0.75, lexicon.vocab_size()).unwrap();
        let class_sents: Vec<Vec<usize>> = sents
            .iter()
            .map(|s| s.iter().map(|&w| lexicon.tokens[w].class.index()).collect())
            .collect();
        let class_lm = train_lm(&class_sents, 3, 0.75, 5).unwrap();
        (lm_in, lm_out, class_lm)
    }

    #[test]
    fn features_have_41_finite_entries_and_are_deterministic() {
        let lexicon = build_lexicon(1, 20, 10).unwrap();
        let (lm_in, lm_out, class_lm) = test_lms(&lexicon);
        let hyp = Hypothesis { tokens: vec![1, 0, 2, 3], score: -5.0, acoustic: -6.0 };
        let cn = ConfusionNetwork {
            bins: vec![
                vec![CnEntry { token: Some(1), posterior: 0.8 }, CnEntry { token: None, posterior: 0.2 }],
                vec![CnEntry { token: Some(0), posterior: 1.0 }],
                vec![CnEntry { token: Some(2), posterior: 0.6 }, CnEntry { token: Some(3), posterior: 0.4 }],
                vec![CnEntry { token: Some(3), posterior: 1.0 }],
            ],
        };
        let a = extract_features(&hyp, &cn, &lm_in, &lm_out, &class_lm, &lexicon);
        let b = extract_features(&hyp, &cn, &lm_in, &lm_out, &class_lm, &lexicon);
        assert_eq!(a, b);
        assert_eq!(a.values().len(), QE_DIM);
        assert!(a.values().iter().all(|v| v.is_finite()));
        assert_eq!(QE_FEATURE_NAMES.len(), QE_DIM);
    }

    #[test]
    fn single_certain_bin_has_zero_log_posterior() {
        let lexicon = build_lexicon(1, 20, 10).unwrap();
        let (lm_in, lm_out, class_lm) = test_lms(&lexicon);
        let hyp = Hypothesis { tokens: vec![1], score: -1.0, acoustic: -1.0 };
        let cn = ConfusionNetwork { bins: vec![vec![CnEntry { token: Some(1), posterior: 1.0 }]] };
        let f = extract_features(&hyp, &cn, &lm_in, &lm_out, &class_lm, &lexicon);
        assert_eq!(f.values()[0], 0.0);
    }

    #[test]
    fn noun_fraction_matches_definition() {
        let lexicon = build_lexicon(1, 20, 10).unwrap();
        let (lm_in, lm_out, class_lm) = test_lms(&lexicon);
        // pick 4 words with exactly one noun
        let nouns: Vec<usize> = (1..lexicon.vocab_size())
            .filter(|&t| lexicon.tokens[t].class == LexClass::Noun)
            .collect();
        let others: Vec<usize> = (1..lexicon.vocab_size())
            .filter(|&t| {
                lexicon.tokens[t].class != LexClass::Noun && !lexicon.is_silence(t)
            })
            .collect();
        let tokens = vec![nouns[0], others[0], others[1], others[2]];
        let hyp = Hypothesis { tokens, score: -1.0, acoustic: -1.0 };
        let f = extract_features(&hyp, &ConfusionNetwork::default(), &lm_in, &lm_out, &class_lm, &lexicon);
        assert!((f.values()[17] - 0.25).abs() < 1e-12);
        assert_eq!(f.values()[9], 4.0);
    }

    #[test]
    fn repetition_flags_average_to_half_on_pair() {
        let lexicon = build_lexicon(1, 20, 10).unwrap();
        let (lm_in, lm_out, class_lm) = test_lms(&lexicon);
        let hyp = Hypothesis { tokens: vec![4, 4], score: -1.0, acoustic: -1.0 };
        let f = extract_features(&hyp, &ConfusionNetwork::default(), &lm_in, &lm_out, &class_lm, &lexicon);
        let idx_before = QE_FEATURE_NAMES.iter().position(|n| *n == "before_repetition").unwrap();
        let idx_after = QE_FEATURE_NAMES.iter().position(|n| *n == "after_repetition").unwrap();
        assert!((f.values()[idx_before] - 0.5).abs() < 1e-12);
        assert!((f.values()[idx_after] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn empty_hypothesis_yields_zero_features() {
        let lexicon = build_lexicon(1, 20, 10).unwrap();
        let (lm_in, lm_out, class_lm) = test_lms(&lexicon);
        let hyp = Hypothesis { tokens: vec![], score: 0.0, acoustic: 0.0 };
        let f = extract_features(&hyp, &ConfusionNetwork::default(), &lm_in, &lm_out, &class_lm, &lexicon);
        assert!(f.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn constant_targets_predict_exactly() {
        let features = vecs(&[(0.0, 1.0), (1.0, 0.0), (0.5, 0.5), (0.2, 0.8)]);
        let targets = vec![0.3; 4];
        let model = xrt_fit(&features, &targets, &XrtParams {
            n_bags: 2,
            trees_per_bag: 3,
            k_features: 2,
            n_min: 2,
            bootstrap: true,
            seed: 1,
        })
        .unwrap();
        for f in &features {
            assert_eq!(xrt_predict(&model, f).unwrap(), 0.3);
        }
    }

    #[test]
    fn degenerate_depth_predicts_global_mean() {
        let features = vecs(&[(0.0, 1.0), (1.0, 0.0), (0.5, 0.5), (0.2, 0.8)]);
        let targets = vec![0.1, 0.2, 0.3, 0.6];
        let params = XrtParams {
            n_bags: 1,
            trees_per_bag: 5,
            k_features: 2,
            n_min: 100,
            bootstrap: false,
            seed: 9,
        };
        let model = xrt_fit(&features, &targets, &params).unwrap();
        let mean = 0.3;
        for f in &features {
            assert!((xrt_predict(&model, f).unwrap() - mean).abs() < 1e-12);
        }
    }

    #[test]
    fn staircase_signal_is_learned() {
        let mut rng = rng_from_seed(77);
        let mut features = Vec::new();
        let mut targets = Vec::new();
        for _ in 0..200 {
            let x: f64 = rng.gen_range(0.0..1.0);
            features.push(QeFeatureVector(vec![x]));
            targets.push(if x > 0.5 { 1.0 } else { 0.0 });
        }
        let params = XrtParams {
            n_bags: 4,
            trees_per_bag: 16,
            k_features: 1,
            n_min: 2,
            bootstrap: true,
            seed: 5,
        };
        let model = xrt_fit(&features, &targets, &params).unwrap();
        let preds: Vec<f64> =
            features.iter().map(|f| xrt_predict(&model, f).unwrap()).collect();
        let err = mae(&preds, &targets).unwrap();
        assert!(err < 0.05, "train MAE {err}");
    }

    #[test]
    fn fit_is_deterministic_and_ensemble_mean_bounded() {
        let mut rng = rng_from_seed(31);
        let features: Vec<QeFeatureVector> = (0..40)
            .map(|_| QeFeatureVector((0..3).map(|_| rng.gen_range(0.0..1.0)).collect()))
            .collect();
        let targets: Vec<f64> = (0..40).map(|_| rng.gen_range(0.0..1.0)).collect();
        let params = XrtParams {
            n_bags: 3,
            trees_per_bag: 4,
            k_features: 2,
            n_min: 3,
            bootstrap: true,
            seed: 12,
        };
        let a = xrt_fit(&features, &targets, &params).unwrap();
        let b = xrt_fit(&features, &targets, &params).unwrap();
        assert_eq!(a, b);
        for f in features.iter().take(10) {
            let outs = a.tree_outputs(f.values());
            let lo = outs.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = outs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let p = xrt_predict(&a, f).unwrap();
            assert!(p >= lo - 1e-12 && p <= hi + 1e-12);
        }
    }

    #[test]
    fn mae_basics() {
        assert!((mae(&[0.1, 0.3], &[0.2, 0.2]).unwrap() - 0.1).abs() < 1e-12);
        assert_eq!(mae(&[0.5], &[0.5]).unwrap(), 0.0);
        let a = [0.1, 0.9, 0.4];
        let b = [0.3, 0.2, 0.8];
        assert_eq!(mae(&a, &b).unwrap(), mae(&b, &a).unwrap());
        assert!(mae(&[0.1], &[0.1, 0.2]).is_err());
    }

    #[test]
    fn folds_are_speaker_disjoint() {
        let speakers: Vec<String> = (0..20).map(|i| format!("s{}", i % 5)).collect();
        let folds = speaker_folds(&speakers, 4).unwrap();
        let mut fold_of: HashMap<&String, usize> = HashMap::new();
        for (s, &f) in speakers.iter().zip(folds.iter()) {
            if let Some(&prev) = fold_of.get(s) {
                assert_eq!(prev, f, "speaker {s} in two folds");
            }
            fold_of.insert(s, f);
        }
        assert!(speaker_folds(&speakers, 6).is_err());
    }

    #[test]
    fn singleton_grid_is_returned() {
        let mut rng = rng_from_seed(2);
        let features: Vec<QeFeatureVector> = (0..24)
            .map(|_| QeFeatureVector(vec![rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)]))
            .collect();
        let targets: Vec<f64> = features.iter().map(|f| f.values()[0].clamp(0.0, 1.0)).collect();
        let speakers: Vec<String> = (0..24).map(|i| format!("s{}", i % 4)).collect();
        let grid = vec![XrtParams {
            n_bags: 2,
            trees_per_bag: 3,
            k_features: 1,
            n_min: 2,
            bootstrap: true,
            seed: 0,
        }];
        let tuned = tune_cv(&features, &targets, &speakers, &grid, 4, 7).unwrap();
        assert_eq!(tuned.n_bags, 2);
        assert_eq!(tuned.trees_per_bag, 3);
        assert_eq!(tuned.n_min, 2);
    }

    #[test]
    fn tuned_model_beats_constant_baseline_on_synthetic_signal() {
        // targets depend on 2 of the features; held-out MAE must improve on
        // the constant-mean predictor
        let mut rng = rng_from_seed(99);
        let n = 120;
        let mut features = Vec::with_capacity(n);
        let mut targets = Vec::with_capacity(n);
        let mut speakers = Vec::with_capacity(n);
        for i in 0..n {
            let v: Vec<f64> = (0..8).map(|_| rng.gen_range(0.0..1.0)).collect();
            let y = (0.6 * v[2] + 0.4 * v[5]).clamp(0.0, 1.0);
            features.push(QeFeatureVector(v));
            targets.push(y);
            speakers.push(format!("s{}", i % 6));
        }
        let grid = vec![
            XrtParams { n_bags: 2, trees_per_bag: 8, k_features: 4, n_min: 2, bootstrap: true, seed: 0 },
            XrtParams { n_bags: 4, trees_per_bag: 8, k_features: 8, n_min: 4, bootstrap: true, seed: 0 },
        ];
        let tuned = tune_cv(&features, &targets, &speakers, &grid, 4, 11).unwrap();
        // hold out the last 2 speakers entirely
        let hold: Vec<usize> =
            (0..n).filter(|i| speakers[*i] == "s4" || speakers[*i] == "s5").collect();
        let train: Vec<usize> =
            (0..n).filter(|i| speakers[*i] != "s4" && speakers[*i] != "s5").collect();
        let tx: Vec<QeFeatureVector> = train.iter().map(|&i| features[i].clone()).collect();
        let ty: Vec<f64> = train.iter().map(|&i| targets[i]).collect();
        let model = xrt_fit(&tx, &ty, &tuned).unwrap();
        let preds: Vec<f64> = hold
            .iter()
            .map(|&i| xrt_predict(&model, &features[i]).unwrap())
            .collect();
        let oracle: Vec<f64> = hold.iter().map(|&i| targets[i]).collect();
        let model_mae = mae(&preds, &oracle).unwrap();
        let train_mean = ty.iter().sum::<f64>() / ty.len() as f64;
        let baseline: Vec<f64> = vec![train_mean; oracle.len()];
        let baseline_mae = mae(&baseline, &oracle).unwrap();
        assert!(
            model_mae <= 0.9 * baseline_mae,
            "model {model_mae} vs baseline {baseline_mae}"
        );
    }

    #[test]
    fn xrt_dump_roundtrip() {
        let mut rng = rng_from_seed(8);
        let features: Vec<QeFeatureVector> = (0..30)
            .map(|_| QeFeatureVector((0..4).map(|_| rng.gen_range(0.0..1.0)).collect()))
            .collect();
        let targets: Vec<f64> = features.iter().map(|f| f.values()[1]).collect();
        let params = XrtParams {
            n_bags: 2,
            trees_per_bag: 3,
            k_features: 2,
            n_min: 3,
            bootstrap: true,
            seed: 4,
        };
        let model = xrt_fit(&features, &targets, &params).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("xrt.txt");
        save_xrt(&model, &path).unwrap();
        let loaded = load_xrt(&path).unwrap();
        assert_eq!(loaded.dim, 4);
        for f in &features {
            let a = xrt_predict(&model, f).unwrap();
            let b = xrt_predict(&loaded, f).unwrap();
            assert!((a - b).abs() < 1e-9);
        }
    }
}
