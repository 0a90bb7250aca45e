//! KLD-regularized acoustic model adaptation via target blending, soft
//! per-sentence regularization coefficients and output-transform (oDLR)
//! adaptation.
//!
//! The regularized objective is trained as plain cross-entropy against a
//! blended target distribution P = (1-alpha) * aligned one-hot targets +
//! alpha * frozen-baseline posteriors. Hard adaptation uses one alpha for
//! every sentence; soft adaptation derives a per-sentence alpha(k) from a
//! (predicted or oracle) sentence WER. The baseline model is never mutated:
//! its posteriors are computed once per utterance and cached as the p*
//! source, and training operates on a copy.

use crate::am::{
    self, AcousticModel, FrameTargets, OutputTransform, Priors, TrainLog, TrainSchedule,
};
use crate::corpus::Lexicon;
use crate::decoder::forced_align;
use crate::util::Matrix;
use crate::{Error, Result};

/// Adaptation flavour.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdaptMode {
    KldHard,
    KldSoft,
    Odlr,
}

impl AdaptMode {
    pub fn tag(self) -> &'static str {
        match self {
            AdaptMode::KldHard => "kld-hard",
            AdaptMode::KldSoft => "kld-soft",
            AdaptMode::Odlr => "odlr",
        }
    }

    pub fn from_tag(tag: &str) -> Result<Self> {
        Ok(match tag {
            "kld-hard" => AdaptMode::KldHard,
            "kld-soft" => AdaptMode::KldSoft,
            "odlr" => AdaptMode::Odlr,
            other => return Err(Error::invalid(format!("unknown adaptation mode {other:?}"))),
        })
    }
}

/// Configuration for one adaptation run.
#[derive(Debug, Clone)]
pub struct AdaptationConfig {
    pub mode: AdaptMode,
    /// Global regularization coefficient (hard mode).
    pub alpha: f64,
    /// Bias of the sentence-dependent coefficient (soft mode).
    pub beta: f64,
    pub schedule: TrainSchedule,
}

impl AdaptationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::invalid(format!("alpha {} outside [0,1]", self.alpha)));
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(Error::invalid(format!("beta {} outside [0,1]", self.beta)));
        }
        self.schedule.validate()
    }
}

/// One utterance of the adaptation set: frames, a supervision transcript
/// (manual or first-pass automatic) and, for soft adaptation, the clamped
/// sentence WER estimate behind alpha(k).
#[derive(Debug, Clone)]
pub struct AdaptationItem {
    pub utt_id: String,
    pub frames: Matrix,
    pub supervision: Vec<usize>,
    pub wer: Option<f64>,
}

#[derive(Debug, Clone, Default)]
pub struct AdaptationSet {
    pub items: Vec<AdaptationItem>,
}

impl AdaptationSet {
    pub fn total_frames(&self) -> usize {
        self.items.iter().map(|i| i.frames.rows()).sum()
    }
}

/// What an adaptation run reports besides the model.
#[derive(Debug, Clone, Default)]
pub struct AdaptReport {
    /// Utterances dropped because forced alignment failed.
    pub dropped: Vec<String>,
    pub log: TrainLog,
    /// Fraction of parameters that received updates (oDLR only).
    pub updated_fraction: Option<f64>,
}

/// Eq. P = (1-alpha) * one-hot targets + alpha * original posteriors;
/// rows stay normalized by construction.
pub fn blend_targets(
    alpha: f64,
    aligned: &FrameTargets,
    original_posteriors: &Matrix,
) -> Result<FrameTargets> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::invalid(format!("alpha {alpha} outside [0,1]")));
    }
    let p_hat = &aligned.0;
    if p_hat.rows() != original_posteriors.rows() || p_hat.cols() != original_posteriors.cols() {
        return Err(Error::DimensionMismatch("aligned targets vs posteriors".into()));
    }
    for (t, row) in p_hat.iter_rows().enumerate() {
        let ones = row.iter().filter(|&&v| v == 1.0).count();
        let zeros = row.iter().filter(|&&v| v == 0.0).count();
        if ones != 1 || ones + zeros != row.len() {
            return Err(Error::invalid(format!("aligned target row {t} is not one-hot")));
        }
    }
    let mut blended = Matrix::zeros(p_hat.rows(), p_hat.cols());
    for t in 0..p_hat.rows() {
        let h = p_hat.row(t);
        let s = original_posteriors.row(t);
        let out = blended.row_mut(t);
        for i in 0..h.len() {
            out[i] = (1.0 - alpha) * h[i] + alpha * s[i];
        }
    }
    FrameTargets::new(blended)
}

/// Sentence-dependent regularization coefficient:
/// alpha(k) = beta + (1-beta) * wer_k.
pub fn sentence_alpha(beta: f64, wer: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::invalid(format!("beta {beta} outside [0,1]")));
    }
    if !(0.0..=1.0).contains(&wer) {
        return Err(Error::invalid(format!("wer {wer} outside [0,1]; clamp upstream")));
    }
    Ok(beta + (1.0 - beta) * wer)
}

struct PreparedSet {
    dataset: Vec<(Matrix, FrameTargets)>,
    dropped: Vec<String>,
}

/// Forced-aligns every utterance against the frozen baseline and builds the
/// per-frame targets. `blend` maps (item, one-hot targets, posteriors) to
/// the final targets.
fn prepare_targets(
    baseline: &AcousticModel,
    priors: &Priors,
    lexicon: &Lexicon,
    set: &AdaptationSet,
    mut blend: impl FnMut(&AdaptationItem, FrameTargets, &Matrix) -> Result<FrameTargets>,
) -> Result<PreparedSet> {
    let mut dataset = Vec::with_capacity(set.items.len());
    let mut dropped = Vec::new();
    for item in &set.items {
        if item.supervision.is_empty() {
            dropped.push(item.utt_id.clone());
            continue;
        }
        let posteriors = baseline.forward(&item.frames)?;
        let loglik = am::scaled_loglik(&posteriors, priors);
        let alignment = match forced_align(&loglik, lexicon, &item.supervision) {
            Ok(a) => a,
            Err(_) => {
                dropped.push(item.utt_id.clone());
                continue;
            }
        };
        let one_hot = FrameTargets::one_hot(&alignment.frame_states, baseline.n_states());
        let targets = blend(item, one_hot, &posteriors)?;
        dataset.push((item.frames.clone(), targets));
    }
    if dataset.is_empty() {
        return Err(Error::invalid("no usable adaptation utterances"));
    }
    Ok(PreparedSet { dataset, dropped })
}

/// KLD-regularized adaptation. The supervision is forced-aligned with the
/// frozen baseline, baseline posteriors are blended in with the hard alpha
/// or the per-sentence soft alpha(k), and a copy of the baseline is trained
/// on the blended targets. The cross-validation set of the schedule is the
/// adaptation set itself.
pub fn adapt_kld(
    baseline: &AcousticModel,
    priors: &Priors,
    lexicon: &Lexicon,
    set: &AdaptationSet,
    config: &AdaptationConfig,
) -> Result<(AcousticModel, AdaptReport)> {
    config.validate()?;
    let prepared = prepare_targets(baseline, priors, lexicon, set, |item, one_hot, posteriors| {
        let alpha = match config.mode {
            AdaptMode::KldHard => config.alpha,
            AdaptMode::KldSoft => {
                let wer = item.wer.ok_or_else(|| {
                    Error::invalid(format!("soft adaptation needs a WER for {}", item.utt_id))
                })?;
                sentence_alpha(config.beta, wer)?
            }
            AdaptMode::Odlr => {
                return Err(Error::invalid("adapt_kld called with odlr mode"));
            }
        };
        blend_targets(alpha, &one_hot, posteriors)
    })?;
    let (model, log) =
        am::train(baseline, &prepared.dataset, &config.schedule, &prepared.dataset)?;
    Ok((model, AdaptReport { dropped: prepared.dropped, log, updated_fraction: None }))
}

/// Output-transform adaptation: an affine transform on the final
/// pre-softmax activations is initialized to identity and trained against
/// one-hot forced-alignment targets while every other parameter stays
/// frozen.
pub fn adapt_odlr(
    baseline: &AcousticModel,
    priors: &Priors,
    lexicon: &Lexicon,
    set: &AdaptationSet,
    schedule: &TrainSchedule,
) -> Result<(AcousticModel, AdaptReport)> {
    let prepared = prepare_targets(baseline, priors, lexicon, set, |_, one_hot, _| Ok(one_hot))?;
    let mut seeded = baseline.clone();
    seeded.output_transform = Some(OutputTransform::identity(baseline.n_states()));
    let (model, log) =
        am::train_with_options(&seeded, &prepared.dataset, schedule, &prepared.dataset, true)?;
    let base_params: usize = baseline.weights.iter().map(|w| w.data().len()).sum::<usize>()
        + baseline.biases.iter().map(|b| b.len()).sum::<usize>();
    let transform_params = baseline.n_states() * baseline.n_states() + baseline.n_states();
    let updated_fraction = transform_params as f64 / (base_params + transform_params) as f64;
    Ok((
        model,
        AdaptReport {
            dropped: prepared.dropped,
            log,
            updated_fraction: Some(updated_fraction),
        },
    ))
}
