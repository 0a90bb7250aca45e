//! Experiment orchestration: scenario construction, the two-pass pipeline
//! with QE-driven utterance selection, grid sweeps over (adaptation size,
//! alpha), and n-best LM rescoring.
//!
//! A scenario is fully determined by an [`ExperimentConfig`] and its master
//! seed: corpora, language models, the baseline acoustic model and the
//! decoding graph are all derived deterministically, and every report file
//! is byte-stable across reruns.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use crate::adapt::{
    adapt_kld, adapt_odlr, AdaptMode, AdaptReport, AdaptationConfig, AdaptationItem,
    AdaptationSet,
};
use crate::am::{
    estimate_priors, init_model, save_model, AcousticModel, FrameTargets, Layout, Priors,
    TrainSchedule,
};
use crate::corpus::{
    cmvn_per_speaker, gen_corpus, generator_alignment, sample_in_domain_text, sample_transcripts,
    Corpus, GenSpec, Lexicon,
};
use crate::decoder::{
    build_cn, cn_dump, nbest, nbest_dump, ConfusionNetwork, DecodingGraph, GraphConfig,
    Hypothesis, NBestList,
};
use crate::lm::{train_lm, NgramLm};
use crate::qe::{
    extract_features, features_to_tsv, predictions_to_tsv, tune_cv, xrt_fit, xrt_predict,
    QeFeatureVector, XrtModel, XrtParams,
};
use crate::scoring::{
    select_utterances, SelectionBasis, SelectionMode, SelectionSpec, UttScore, WerReport,
};
use crate::util::{mix_seed, parse_f64, parse_usize};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Normalization {
    Raw,
    Cmvn,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Condition {
    /// Adapt on the test corpus itself and evaluate on it.
    Homogeneous,
    /// Adapt on the dev corpus itself and evaluate on it.
    HomogeneousDev,
    /// Adapt on dev, evaluate on test.
    Cross,
}

/// Where adaptation transcripts come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SupervisionSource {
    /// First-pass automatic transcripts.
    Auto,
    /// Reference transcripts (supervised adaptation).
    Manual,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WerSource {
    Oracle,
    Predicted,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SelectionCfg {
    All,
    Threshold(f64),
    TopK(usize),
}

/// Everything a run needs; every field has a default so a config file only
/// lists overrides.
#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub seed: u64,
    // corpus generation
    pub vocab_size: usize,
    pub phone_inventory: usize,
    pub dim: usize,
    pub speakers: [usize; 3],
    pub utts: [usize; 3],
    pub len_min: usize,
    pub len_max: usize,
    pub mismatch: f64,
    pub frames_per_state: usize,
    pub emission_stddev: f64,
    pub pause_prob: f64,
    pub normalization: Normalization,
    // acoustic model
    pub hidden: Vec<usize>,
    pub context: usize,
    pub initial_lr: f64,
    pub halve_threshold: f64,
    pub stop_threshold: f64,
    pub min_epochs: usize,
    pub max_epochs: usize,
    pub batch_size: usize,
    pub prior_floor: f64,
    // decoder
    pub lm_discount: f64,
    pub lm_weight: f64,
    /// Extra in-domain text sentences for the higher-order LM.
    pub lm_text_sentences: usize,
    pub silence_logprob: f64,
    pub nbest_n: usize,
    pub nbest_beam: usize,
    pub cn_tau: f64,
    // adaptation
    pub adapt_mode: AdaptMode,
    pub alpha: f64,
    pub beta: f64,
    pub wer_source: WerSource,
    pub selection: SelectionCfg,
    pub supervision: SupervisionSource,
    pub adapt_min_epochs: usize,
    pub adapt_max_epochs: usize,
    pub condition: Condition,
    // QE
    pub qe_folds: usize,
    // grids
    pub grid_sizes: Vec<usize>,
    pub grid_alphas: Vec<f64>,
    // rescoring
    pub rescore_weight: f64,
    // artifacts
    pub out_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 1,
            vocab_size: 20,
            phone_inventory: 10,
            dim: 8,
            speakers: [6, 8, 8],
            utts: [240, 240, 200],
            len_min: 3,
            len_max: 7,
            mismatch: 1.5,
            frames_per_state: 3,
            emission_stddev: 0.35,
            pause_prob: 0.2,
            normalization: Normalization::Raw,
            hidden: vec![64],
            context: 2,
            initial_lr: 0.2,
            halve_threshold: 0.005,
            stop_threshold: 0.001,
            min_epochs: 16,
            max_epochs: 24,
            batch_size: 64,
            prior_floor: 1e-6,
            lm_discount: 0.75,
            lm_weight: 1.0,
            lm_text_sentences: 2000,
            silence_logprob: (0.15f64).ln(),
            nbest_n: 12,
            nbest_beam: 24,
            cn_tau: 1.0,
            adapt_mode: AdaptMode::KldHard,
            alpha: 0.3,
            beta: 0.5,
            wer_source: WerSource::Oracle,
            selection: SelectionCfg::Threshold(0.10),
            supervision: SupervisionSource::Auto,
            adapt_min_epochs: 8,
            adapt_max_epochs: 14,
            condition: Condition::Homogeneous,
            qe_folds: 4,
            grid_sizes: vec![50, 100, 150, 300, 600, 1200],
            grid_alphas: vec![0.0, 0.1, 0.3, 0.5, 0.7, 0.9],
            rescore_weight: 0.3,
            out_dir: None,
        }
    }
}

fn parse_u64(s: &str) -> Result<u64> {
    s.parse::<u64>().map_err(|_| Error::Parse(format!("bad integer: {s:?}")))
}

fn parse_usize_list(s: &str) -> Result<Vec<usize>> {
    s.split(',').map(|p| parse_usize(p.trim())).collect()
}

fn parse_f64_list(s: &str) -> Result<Vec<f64>> {
    s.split(',').map(|p| parse_f64(p.trim())).collect()
}

impl ExperimentConfig {
    /// Applies one `key = value` override.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "seed" => self.seed = parse_u64(value)?,
            "vocab_size" => self.vocab_size = parse_usize(value)?,
            "phone_inventory" => self.phone_inventory = parse_usize(value)?,
            "dim" => self.dim = parse_usize(value)?,
            "speakers_train" => self.speakers[0] = parse_usize(value)?,
            "speakers_dev" => self.speakers[1] = parse_usize(value)?,
            "speakers_test" => self.speakers[2] = parse_usize(value)?,
            "utts_train" => self.utts[0] = parse_usize(value)?,
            "utts_dev" => self.utts[1] = parse_usize(value)?,
            "utts_test" => self.utts[2] = parse_usize(value)?,
            "len_min" => self.len_min = parse_usize(value)?,
            "len_max" => self.len_max = parse_usize(value)?,
            "mismatch" => self.mismatch = parse_f64(value)?,
            "frames_per_state" => self.frames_per_state = parse_usize(value)?,
            "emission_stddev" => self.emission_stddev = parse_f64(value)?,
            "pause_prob" => self.pause_prob = parse_f64(value)?,
            "normalization" => {
                self.normalization = match value {
                    "raw" => Normalization::Raw,
                    "cmvn" => Normalization::Cmvn,
                    other => return Err(Error::invalid(format!("normalization {other:?}"))),
                }
            }
            "hidden" => self.hidden = parse_usize_list(value)?,
            "context" => self.context = parse_usize(value)?,
            "initial_lr" => self.initial_lr = parse_f64(value)?,
            "halve_threshold" => self.halve_threshold = parse_f64(value)?,
            "stop_threshold" => self.stop_threshold = parse_f64(value)?,
            "min_epochs" => self.min_epochs = parse_usize(value)?,
            "max_epochs" => self.max_epochs = parse_usize(value)?,
            "batch_size" => self.batch_size = parse_usize(value)?,
            "prior_floor" => self.prior_floor = parse_f64(value)?,
            "lm_discount" => self.lm_discount = parse_f64(value)?,
            "lm_weight" => self.lm_weight = parse_f64(value)?,
            "lm_text_sentences" => self.lm_text_sentences = parse_usize(value)?,
            "silence_logprob" => self.silence_logprob = parse_f64(value)?,
            "nbest_n" => self.nbest_n = parse_usize(value)?,
            "nbest_beam" => self.nbest_beam = parse_usize(value)?,
            "cn_tau" => self.cn_tau = parse_f64(value)?,
            "adapt_mode" => self.adapt_mode = AdaptMode::from_tag(value)?,
            "alpha" => self.alpha = parse_f64(value)?,
            "beta" => self.beta = parse_f64(value)?,
            "wer_source" => {
                self.wer_source = match value {
                    "oracle" => WerSource::Oracle,
                    "predicted" => WerSource::Predicted,
                    other => return Err(Error::invalid(format!("wer_source {other:?}"))),
                }
            }
            "selection" => {
                self.selection = if value == "none" {
                    SelectionCfg::All
                } else if let Some(rest) = value.strip_prefix("thr:") {
                    SelectionCfg::Threshold(parse_f64(rest)?)
                } else if let Some(rest) = value.strip_prefix("top:") {
                    SelectionCfg::TopK(parse_usize(rest)?)
                } else {
                    return Err(Error::invalid(format!("selection {value:?}")));
                }
            }
            "supervision" => {
                self.supervision = match value {
                    "auto" => SupervisionSource::Auto,
                    "manual" => SupervisionSource::Manual,
                    other => return Err(Error::invalid(format!("supervision {other:?}"))),
                }
            }
            "adapt_min_epochs" => self.adapt_min_epochs = parse_usize(value)?,
            "adapt_max_epochs" => self.adapt_max_epochs = parse_usize(value)?,
            "condition" => {
                self.condition = match value {
                    "homogeneous" => Condition::Homogeneous,
                    "homogeneous-dev" => Condition::HomogeneousDev,
                    "cross" => Condition::Cross,
                    other => return Err(Error::invalid(format!("condition {other:?}"))),
                }
            }
            // named experiment presets: adaptation/evaluation sets,
            // supervision type and feature normalization in one key
            "preset" => self.apply_preset(value)?,
            "qe_folds" => self.qe_folds = parse_usize(value)?,
            "grid_sizes" => self.grid_sizes = parse_usize_list(value)?,
            "grid_alphas" => self.grid_alphas = parse_f64_list(value)?,
            "rescore_weight" => self.rescore_weight = parse_f64(value)?,
            "out_dir" => self.out_dir = Some(PathBuf::from(value)),
            other => return Err(Error::invalid(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    /// Parses `key = value` lines with `#` comments.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Parse(format!("line {}: expected key = value", lineno + 1)))?;
            self.apply(key.trim(), value.trim())?;
        }
        Ok(())
    }

    pub fn load_file(path: &Path) -> Result<Self> {
        let mut config = ExperimentConfig::default();
        config.apply_text(&fs::read_to_string(path)?)?;
        Ok(config)
    }

    /// Resolved configuration as `key = value` text, stable ordering.
    pub fn resolved_text(&self) -> String {
        let selection = match self.selection {
            SelectionCfg::All => "none".to_string(),
            SelectionCfg::Threshold(t) => format!("thr:{t}"),
            SelectionCfg::TopK(k) => format!("top:{k}"),
        };
        let hidden: Vec<String> = self.hidden.iter().map(|h| h.to_string()).collect();
        let sizes: Vec<String> = self.grid_sizes.iter().map(|s| s.to_string()).collect();
        let alphas: Vec<String> = self.grid_alphas.iter().map(|a| a.to_string()).collect();
        let mut out = String::new();
        let mut push = |k: &str, v: String| out.push_str(&format!("{k} = {v}\n"));
        push("seed", self.seed.to_string());
        push("vocab_size", self.vocab_size.to_string());
        push("phone_inventory", self.phone_inventory.to_string());
        push("dim", self.dim.to_string());
        push("speakers_train", self.speakers[0].to_string());
        push("speakers_dev", self.speakers[1].to_string());
        push("speakers_test", self.speakers[2].to_string());
        push("utts_train", self.utts[0].to_string());
        push("utts_dev", self.utts[1].to_string());
        push("utts_test", self.utts[2].to_string());
        push("len_min", self.len_min.to_string());
        push("len_max", self.len_max.to_string());
        push("mismatch", self.mismatch.to_string());
        push("frames_per_state", self.frames_per_state.to_string());
        push("emission_stddev", self.emission_stddev.to_string());
        push("pause_prob", self.pause_prob.to_string());
        push(
            "normalization",
            match self.normalization {
                Normalization::Raw => "raw".to_string(),
                Normalization::Cmvn => "cmvn".to_string(),
            },
        );
        push("hidden", hidden.join(","));
        push("context", self.context.to_string());
        push("initial_lr", self.initial_lr.to_string());
        push("halve_threshold", self.halve_threshold.to_string());
        push("stop_threshold", self.stop_threshold.to_string());
        push("min_epochs", self.min_epochs.to_string());
        push("max_epochs", self.max_epochs.to_string());
        push("batch_size", self.batch_size.to_string());
        push("prior_floor", self.prior_floor.to_string());
        push("lm_discount", self.lm_discount.to_string());
        push("lm_weight", self.lm_weight.to_string());
        push("lm_text_sentences", self.lm_text_sentences.to_string());
        push("silence_logprob", self.silence_logprob.to_string());
        push("nbest_n", self.nbest_n.to_string());
        push("nbest_beam", self.nbest_beam.to_string());
        push("cn_tau", self.cn_tau.to_string());
        push("adapt_mode", self.adapt_mode.tag().to_string());
        push("alpha", self.alpha.to_string());
        push("beta", self.beta.to_string());
        push(
            "wer_source",
            match self.wer_source {
                WerSource::Oracle => "oracle".to_string(),
                WerSource::Predicted => "predicted".to_string(),
            },
        );
        push("selection", selection);
        push(
            "supervision",
            match self.supervision {
                SupervisionSource::Auto => "auto".to_string(),
                SupervisionSource::Manual => "manual".to_string(),
            },
        );
        push("adapt_min_epochs", self.adapt_min_epochs.to_string());
        push("adapt_max_epochs", self.adapt_max_epochs.to_string());
        push(
            "condition",
            match self.condition {
                Condition::Homogeneous => "homogeneous".to_string(),
                Condition::HomogeneousDev => "homogeneous-dev".to_string(),
                Condition::Cross => "cross".to_string(),
            },
        );
        push("qe_folds", self.qe_folds.to_string());
        push("grid_sizes", sizes.join(","));
        push("grid_alphas", alphas.join(","));
        push("rescore_weight", self.rescore_weight.to_string());
        if let Some(dir) = &self.out_dir {
            push("out_dir", dir.display().to_string());
        }
        out
    }

    /// Applies one of the named experiment presets, the standard list of
    /// adaptation/evaluation-set, supervision and feature combinations.
    pub fn apply_preset(&mut self, name: &str) -> Result<()> {
        let (condition, supervision, normalization) = match name {
            "cross-man-norm" => (Condition::Cross, SupervisionSource::Manual, Normalization::Cmvn),
            "cross-man-raw" => (Condition::Cross, SupervisionSource::Manual, Normalization::Raw),
            "cross-auto-norm" => (Condition::Cross, SupervisionSource::Auto, Normalization::Cmvn),
            "cross-auto-raw" => (Condition::Cross, SupervisionSource::Auto, Normalization::Raw),
            "dev-auto-norm" => {
                (Condition::HomogeneousDev, SupervisionSource::Auto, Normalization::Cmvn)
            }
            "dev-auto-raw" => {
                (Condition::HomogeneousDev, SupervisionSource::Auto, Normalization::Raw)
            }
            "test-auto-norm" => {
                (Condition::Homogeneous, SupervisionSource::Auto, Normalization::Cmvn)
            }
            "test-auto-raw" => (Condition::Homogeneous, SupervisionSource::Auto, Normalization::Raw),
            other => return Err(Error::invalid(format!("unknown preset {other:?}"))),
        };
        self.condition = condition;
        self.supervision = supervision;
        self.normalization = normalization;
        Ok(())
    }

    pub fn gen_spec(&self) -> GenSpec {
        GenSpec {
            seed: self.seed,
            vocab_size: self.vocab_size,
            phone_inventory_size: self.phone_inventory,
            dim: self.dim,
            n_speakers: self.speakers,
            n_utts: self.utts,
            len_range: (self.len_min, self.len_max),
            mismatch: self.mismatch,
            frames_per_state: self.frames_per_state,
            emission_stddev: self.emission_stddev,
            pause_prob: self.pause_prob,
        }
    }

    pub fn schedule(&self, min_epochs: usize, max_epochs: usize, seed: u64) -> TrainSchedule {
        TrainSchedule {
            initial_lr: self.initial_lr,
            halve_threshold: self.halve_threshold,
            stop_threshold: self.stop_threshold,
            min_epochs,
            max_epochs,
            batch_size: self.batch_size,
            seed,
        }
    }
}

/// A fully built experiment world.
pub struct Scenario {
    pub config: ExperimentConfig,
    pub lexicon: Lexicon,
    pub train: Corpus,
    pub dev: Corpus,
    pub test: Corpus,
    /// Bigram used by the decoding graph.
    pub lm_decode: NgramLm,
    /// Trigram on in-domain training transcripts; QE features and rescoring.
    pub lm_rescore: NgramLm,
    /// Trigram on out-of-domain synthetic text.
    pub lm_out: NgramLm,
    /// Trigram over lexical-class sequences.
    pub class_lm: NgramLm,
    pub model: AcousticModel,
    pub priors: Priors,
    pub graph: DecodingGraph,
}

fn strip_silence(lexicon: &Lexicon, tokens: &[usize]) -> Vec<usize> {
    tokens.iter().copied().filter(|&t| !lexicon.is_silence(t)).collect()
}

/// Generates corpora, trains the language models and the baseline acoustic
/// model, and builds the decoding graph.
pub fn build_scenario(config: &ExperimentConfig) -> Result<Scenario> {
    let generated = gen_corpus(&config.gen_spec())?;
    let lexicon = generated.lexicon;
    let (train, dev, test) = match config.normalization {
        Normalization::Raw => (generated.train, generated.dev, generated.test),
        Normalization::Cmvn => {
            let (train, _) = cmvn_per_speaker(&generated.train)?;
            let (dev, _) = cmvn_per_speaker(&generated.dev)?;
            let (test, _) = cmvn_per_speaker(&generated.test)?;
            (train, dev, test)
        }
    };

    // LM text: training transcripts with silence stripped; the rescoring
    // trigram additionally sees a large cheap text sample from the same
    // reference process (text is plentiful, transcribed audio is not)
    let transcripts: Vec<Vec<usize>> =
        train.utterances.iter().map(|u| strip_silence(&lexicon, &u.reference)).collect();
    let lm_decode = train_lm(&transcripts, 2, config.lm_discount, lexicon.vocab_size())?;
    let mut lm_text = transcripts.clone();
    lm_text.extend(sample_in_domain_text(
        &lexicon,
        config.seed,
        config.lm_text_sentences,
        (config.len_min, config.len_max),
    ));
    let lm_rescore = train_lm(&lm_text, 3, config.lm_discount, lexicon.vocab_size())?;
    let out_text = sample_transcripts(
        &lexicon,
        mix_seed(config.seed, &[0xf00d]),
        transcripts.len().max(50),
        (config.len_min, config.len_max),
    );
    let lm_out = train_lm(&out_text, 3, config.lm_discount, lexicon.vocab_size())?;
    let class_text: Vec<Vec<usize>> = transcripts
        .iter()
        .map(|s| s.iter().map(|&w| lexicon.tokens[w].class.index()).collect())
        .collect();
    let class_lm = train_lm(&class_text, 3, config.lm_discount, 5)?;

    // baseline acoustic model on generator alignments; cross-validation on a
    // deterministic slice of the training corpus
    let layout = Layout {
        frame_dim: config.dim,
        context: config.context,
        hidden: config.hidden.clone(),
        output: lexicon.total_states(),
    };
    let init = init_model(mix_seed(config.seed, &[0xa0]), &layout)?;
    let mut train_set = Vec::new();
    let mut cv_set = Vec::new();
    let mut alignments = Vec::new();
    for (i, utt) in train.utterances.iter().enumerate() {
        let states = generator_alignment(&lexicon, &utt.reference, config.frames_per_state);
        alignments.push(states.clone());
        let targets = FrameTargets::one_hot(&states, lexicon.total_states());
        if i % 7 == 3 {
            cv_set.push((utt.frames.clone(), targets));
        } else {
            train_set.push((utt.frames.clone(), targets));
        }
    }
    let schedule =
        config.schedule(config.min_epochs, config.max_epochs, mix_seed(config.seed, &[0xa1]));
    let (model, _) = crate::am::train(&init, &train_set, &schedule, &cv_set)?;
    let priors = estimate_priors(&alignments, lexicon.total_states(), config.prior_floor)?;
    let graph_config = GraphConfig {
        lm_weight: config.lm_weight,
        silence_enabled: true,
        silence_logprob: config.silence_logprob,
    };
    let graph = DecodingGraph::build(&lexicon, &lm_decode, &graph_config)?;
    Ok(Scenario {
        config: config.clone(),
        lexicon,
        train,
        dev,
        test,
        lm_decode,
        lm_rescore,
        lm_out,
        class_lm,
        model,
        priors,
        graph,
    })
}

/// Scenario assembled from already-trained artifacts on disk (CLI flows).
/// The corpus stands in for all three splits and the decode LM doubles as
/// the QE feature LM; the feature vectors a file scenario produces are only
/// placeholders for pipelines that do not consume them.
pub fn file_scenario(
    config: &ExperimentConfig,
    lexicon: Lexicon,
    corpus: Corpus,
    model: AcousticModel,
    priors: Priors,
    lm: NgramLm,
) -> Result<Scenario> {
    let graph = DecodingGraph::build(
        &lexicon,
        &lm,
        &GraphConfig {
            lm_weight: config.lm_weight,
            silence_enabled: true,
            silence_logprob: config.silence_logprob,
        },
    )?;
    Ok(Scenario {
        config: config.clone(),
        lexicon,
        train: corpus.clone(),
        dev: corpus.clone(),
        test: corpus,
        lm_decode: lm.clone(),
        lm_rescore: lm.clone(),
        lm_out: lm.clone(),
        class_lm: NgramLm::uniform(5),
        model,
        priors,
        graph,
    })
}

/// Decoder outputs and QE features for one utterance.
#[derive(Debug, Clone)]
pub struct UttDecode {
    pub utt_id: String,
    pub speaker: String,
    pub hypothesis: Hypothesis,
    pub nbest: NBestList,
    pub cn: ConfusionNetwork,
    pub features: QeFeatureVector,
}

/// A full decoding pass over one corpus.
#[derive(Debug, Clone, Default)]
pub struct DecodePass {
    pub decodes: Vec<UttDecode>,
    pub failures: Vec<String>,
}

/// Decodes every utterance of a corpus with the given model: 1-best,
/// n-best, confusion network and the 41 QE features. Failures are recorded
/// and skipped.
pub fn decode_corpus(
    scenario: &Scenario,
    model: &AcousticModel,
    corpus: &Corpus,
) -> Result<DecodePass> {
    let mut pass = DecodePass::default();
    for utt in &corpus.utterances {
        let nb = match nbest(
            model,
            &scenario.priors,
            utt,
            &scenario.graph,
            scenario.config.nbest_n,
            scenario.config.nbest_beam,
        ) {
            Ok(nb) => nb,
            Err(_) => {
                pass.failures.push(utt.id.clone());
                continue;
            }
        };
        let cn = build_cn(&nb, scenario.config.cn_tau)?;
        let hypothesis = nb.hypotheses[0].clone();
        let features = extract_features(
            &hypothesis,
            &cn,
            &scenario.lm_rescore,
            &scenario.lm_out,
            &scenario.class_lm,
            &scenario.lexicon,
        );
        pass.decodes.push(UttDecode {
            utt_id: utt.id.clone(),
            speaker: utt.speaker.clone(),
            hypothesis,
            nbest: nb,
            cn,
            features,
        });
    }
    if pass.decodes.is_empty() {
        return Err(Error::invalid("every utterance failed to decode"));
    }
    Ok(pass)
}

/// First decoding pass with the baseline model.
pub fn first_pass(scenario: &Scenario, corpus: &Corpus) -> Result<DecodePass> {
    decode_corpus(scenario, &scenario.model, corpus)
}

/// Oracle WER report of a decode pass against the corpus references,
/// silence stripped on both sides.
pub fn oracle_report(scenario: &Scenario, corpus: &Corpus, pass: &DecodePass) -> Result<WerReport> {
    let refs: HashMap<&str, Vec<usize>> = corpus
        .utterances
        .iter()
        .map(|u| (u.id.as_str(), strip_silence(&scenario.lexicon, &u.reference)))
        .collect();
    let mut report = WerReport::default();
    for d in &pass.decodes {
        let reference = refs
            .get(d.utt_id.as_str())
            .ok_or_else(|| Error::invalid(format!("decode for unknown utt {}", d.utt_id)))?;
        let words = d.hypothesis.words(&scenario.lexicon);
        report.utts.push(UttScore::from_pair(&d.utt_id, reference, &words)?);
    }
    Ok(report)
}

/// 1-best hypotheses keyed by utterance id.
pub type BestHyps = Vec<(String, Hypothesis)>;

/// Viterbi-only pass: 1-best hypotheses without n-best, CN or features.
pub fn decode_1best(
    scenario: &Scenario,
    model: &AcousticModel,
    corpus: &Corpus,
) -> Result<(BestHyps, Vec<String>)> {
    let mut hyps = Vec::with_capacity(corpus.utterances.len());
    let mut failures = Vec::new();
    for utt in &corpus.utterances {
        match crate::decoder::viterbi(model, &scenario.priors, utt, &scenario.graph) {
            Ok((hyp, _)) => hyps.push((utt.id.clone(), hyp)),
            Err(_) => failures.push(utt.id.clone()),
        }
    }
    if hyps.is_empty() {
        return Err(Error::invalid("every utterance failed to decode"));
    }
    Ok((hyps, failures))
}

/// Decode + score in one step; the corpus WER of `model` on `corpus`,
/// using the light 1-best pass.
pub fn evaluate_model(
    scenario: &Scenario,
    model: &AcousticModel,
    corpus: &Corpus,
) -> Result<(f64, WerReport)> {
    let (hyps, _) = decode_1best(scenario, model, corpus)?;
    let refs: HashMap<&str, Vec<usize>> = corpus
        .utterances
        .iter()
        .map(|u| (u.id.as_str(), strip_silence(&scenario.lexicon, &u.reference)))
        .collect();
    let mut report = WerReport::default();
    for (id, hyp) in &hyps {
        let reference = refs
            .get(id.as_str())
            .ok_or_else(|| Error::invalid(format!("decode for unknown utt {id}")))?;
        let words = hyp.words(&scenario.lexicon);
        report.utts.push(UttScore::from_pair(id, reference, &words)?);
    }
    Ok((report.corpus_wer(), report))
}

/// Internal default grid for XRT tuning.
pub fn default_qe_grid() -> Vec<XrtParams> {
    let mut grid = Vec::new();
    for &(n_bags, trees) in &[(2usize, 16usize), (4, 16)] {
        for &k_features in &[8usize, 16] {
            for &n_min in &[2usize, 8] {
                grid.push(XrtParams {
                    n_bags,
                    trees_per_bag: trees,
                    k_features,
                    n_min,
                    bootstrap: true,
                    seed: 0,
                });
            }
        }
    }
    grid
}

/// Trains the WER predictor on a decoded corpus with oracle targets,
/// tuning on speaker-disjoint folds.
pub fn train_qe(
    scenario: &Scenario,
    corpus: &Corpus,
    pass: &DecodePass,
    seed: u64,
) -> Result<(XrtModel, XrtParams)> {
    let report = oracle_report(scenario, corpus, pass)?;
    let wer_map = report.wer_map();
    let features: Vec<QeFeatureVector> = pass.decodes.iter().map(|d| d.features.clone()).collect();
    let targets: Vec<f64> = pass.decodes.iter().map(|d| wer_map[&d.utt_id]).collect();
    let speakers: Vec<String> = pass.decodes.iter().map(|d| d.speaker.clone()).collect();
    let params = tune_cv(
        &features,
        &targets,
        &speakers,
        &default_qe_grid(),
        scenario.config.qe_folds,
        mix_seed(seed, &[0x9e]),
    )?;
    let model = xrt_fit(&features, &targets, &params)?;
    Ok((model, params))
}

/// Per-utterance predicted WER, clamped to [0,1].
pub fn predict_wer_map(model: &XrtModel, pass: &DecodePass) -> Result<HashMap<String, f64>> {
    let mut map = HashMap::new();
    for d in &pass.decodes {
        map.insert(d.utt_id.clone(), xrt_predict(model, &d.features)?);
    }
    Ok(map)
}

/// Out-of-fold predictions on the QE training corpus itself: each utterance
/// is predicted by a model fitted on the other speaker folds. Used when a
/// selection threshold is tuned on the same corpus the QE model is trained
/// on, so the tuning sees honest prediction quality.
pub fn cv_predict_wer_map(
    scenario: &Scenario,
    corpus: &Corpus,
    pass: &DecodePass,
    params: &XrtParams,
    seed: u64,
) -> Result<HashMap<String, f64>> {
    let report = oracle_report(scenario, corpus, pass)?;
    let wer_map = report.wer_map();
    let features: Vec<QeFeatureVector> = pass.decodes.iter().map(|d| d.features.clone()).collect();
    let targets: Vec<f64> = pass.decodes.iter().map(|d| wer_map[&d.utt_id]).collect();
    let speakers: Vec<String> = pass.decodes.iter().map(|d| d.speaker.clone()).collect();
    let folds = crate::qe::speaker_folds(&speakers, scenario.config.qe_folds)?;
    let mut map = HashMap::new();
    for fold in 0..scenario.config.qe_folds {
        let train_idx: Vec<usize> = (0..features.len()).filter(|&i| folds[i] != fold).collect();
        let test_idx: Vec<usize> = (0..features.len()).filter(|&i| folds[i] == fold).collect();
        if test_idx.is_empty() {
            continue;
        }
        let tx: Vec<QeFeatureVector> = train_idx.iter().map(|&i| features[i].clone()).collect();
        let ty: Vec<f64> = train_idx.iter().map(|&i| targets[i]).collect();
        let fold_params = XrtParams { seed: mix_seed(seed, &[0xcf, fold as u64]), ..params.clone() };
        let model = xrt_fit(&tx, &ty, &fold_params)?;
        for &i in &test_idx {
            map.insert(pass.decodes[i].utt_id.clone(), xrt_predict(&model, &features[i])?);
        }
    }
    Ok(map)
}

/// Result of adaptation with selection.
pub struct AdaptOutcome {
    pub model: AcousticModel,
    pub report: AdaptReport,
    pub pool: usize,
    pub selected: usize,
    /// Selection came up empty; the baseline is returned unchanged.
    pub fallback: bool,
    pub selected_ids: Vec<String>,
}

/// Selects an adaptation subset by the WER map, builds the adaptation set
/// from first-pass supervision and runs the configured adaptation.
#[allow(clippy::too_many_arguments)]
pub fn adapt_with_selection(
    scenario: &Scenario,
    adapt_corpus: &Corpus,
    pass: &DecodePass,
    wer_map: &HashMap<String, f64>,
    selection: SelectionCfg,
    mode: AdaptMode,
    alpha: f64,
    beta: f64,
    seed: u64,
) -> Result<AdaptOutcome> {
    // restrict to utterances that actually decoded
    let decoded_ids: HashMap<&str, &UttDecode> =
        pass.decodes.iter().map(|d| (d.utt_id.as_str(), d)).collect();
    let mut pool = adapt_corpus.clone();
    pool.utterances.retain(|u| decoded_ids.contains_key(u.id.as_str()));
    let pool_size = pool.utterances.len();

    let selected_corpus = match selection {
        SelectionCfg::All => pool.clone(),
        SelectionCfg::Threshold(theta) => {
            let spec = SelectionSpec {
                basis: SelectionBasis::Oracle,
                mode: SelectionMode::Threshold(theta),
            };
            select_utterances(&pool, wer_map, &spec)?.corpus
        }
        SelectionCfg::TopK(k) => {
            let spec =
                SelectionSpec { basis: SelectionBasis::Oracle, mode: SelectionMode::TopK(k) };
            select_utterances(&pool, wer_map, &spec)?.corpus
        }
    };
    let selected_ids: Vec<String> =
        selected_corpus.utterances.iter().map(|u| u.id.clone()).collect();
    if selected_corpus.utterances.is_empty() {
        return Ok(AdaptOutcome {
            model: scenario.model.clone(),
            report: AdaptReport::default(),
            pool: pool_size,
            selected: 0,
            fallback: true,
            selected_ids,
        });
    }

    let items: Vec<AdaptationItem> = selected_corpus
        .utterances
        .iter()
        .map(|u| {
            let d = decoded_ids[u.id.as_str()];
            let supervision = match scenario.config.supervision {
                SupervisionSource::Auto => d.hypothesis.tokens.clone(),
                SupervisionSource::Manual => u.reference.clone(),
            };
            AdaptationItem {
                utt_id: u.id.clone(),
                frames: u.frames.clone(),
                supervision,
                wer: wer_map.get(&u.id).copied().map(|w| w.min(1.0)),
            }
        })
        .collect();
    let set = AdaptationSet { items };
    let schedule = scenario.config.schedule(
        scenario.config.adapt_min_epochs,
        scenario.config.adapt_max_epochs,
        seed,
    );
    let (model, report) = match mode {
        AdaptMode::KldHard | AdaptMode::KldSoft => {
            let config = AdaptationConfig { mode, alpha, beta, schedule };
            adapt_kld(&scenario.model, &scenario.priors, &scenario.lexicon, &set, &config)?
        }
        AdaptMode::Odlr => {
            adapt_odlr(&scenario.model, &scenario.priors, &scenario.lexicon, &set, &schedule)?
        }
    };
    Ok(AdaptOutcome {
        model,
        report,
        pool: pool_size,
        selected: set.items.len(),
        fallback: false,
        selected_ids,
    })
}

/// Summary of one two-pass run.
#[derive(Debug, Clone)]
pub struct TwoPassOutcome {
    pub baseline_wer: f64,
    pub adapted_wer: f64,
    pub pool: usize,
    pub selected: usize,
    pub fallback: bool,
    pub dropped: usize,
}

impl TwoPassOutcome {
    pub fn report_tsv(&self) -> String {
        format!(
            "baseline-wer\t{:.2}\nadapted-wer\t{:.2}\npool\t{}\nselected\t{}\nfallback\t{}\ndropped\t{}\n",
            self.baseline_wer * 100.0,
            self.adapted_wer * 100.0,
            self.pool,
            self.selected,
            u8::from(self.fallback),
            self.dropped
        )
    }
}

/// The full two-pass pipeline: first pass, optional QE prediction,
/// selection, adaptation, second decode, WER report. Artifacts are
/// persisted under `config.out_dir` when set.
pub fn run_two_pass(config: &ExperimentConfig) -> Result<TwoPassOutcome> {
    let scenario = build_scenario(config)?;
    run_two_pass_on(&scenario)
}

/// Two-pass pipeline on an already-built scenario.
pub fn run_two_pass_on(scenario: &Scenario) -> Result<TwoPassOutcome> {
    let config = &scenario.config;
    let (adapt_corpus, eval_corpus) = match config.condition {
        Condition::Homogeneous => (&scenario.test, &scenario.test),
        Condition::HomogeneousDev => (&scenario.dev, &scenario.dev),
        Condition::Cross => (&scenario.dev, &scenario.test),
    };
    let pass_adapt = first_pass(scenario, adapt_corpus)?;
    let adapt_report = oracle_report(scenario, adapt_corpus, &pass_adapt)?;

    // baseline on the evaluation corpus
    let baseline_wer = match config.condition {
        Condition::Homogeneous | Condition::HomogeneousDev => adapt_report.corpus_wer(),
        Condition::Cross => evaluate_model(scenario, &scenario.model, eval_corpus)?.0,
    };

    // WER estimates driving selection and soft adaptation
    let mut qe_artifacts: Option<(XrtModel, XrtParams, HashMap<String, f64>)> = None;
    let wer_map: HashMap<String, f64> = match config.wer_source {
        WerSource::Oracle => adapt_report.wer_map(),
        WerSource::Predicted => {
            let dev_pass = match config.condition {
                Condition::Homogeneous => first_pass(scenario, &scenario.dev)?,
                Condition::HomogeneousDev | Condition::Cross => pass_adapt.clone(),
            };
            let (qe_model, params) =
                train_qe(scenario, &scenario.dev, &dev_pass, mix_seed(config.seed, &[0x4e]))?;
            let map = predict_wer_map(&qe_model, &pass_adapt)?;
            qe_artifacts = Some((qe_model, params, map.clone()));
            map
        }
    };

    let outcome = adapt_with_selection(
        scenario,
        adapt_corpus,
        &pass_adapt,
        &wer_map,
        config.selection,
        config.adapt_mode,
        config.alpha,
        config.beta,
        mix_seed(config.seed, &[0xada]),
    )?;
    let (adapted_wer, second_report) = evaluate_model(scenario, &outcome.model, eval_corpus)?;

    let result = TwoPassOutcome {
        baseline_wer,
        adapted_wer,
        pool: outcome.pool,
        selected: outcome.selected,
        fallback: outcome.fallback,
        dropped: outcome.report.dropped.len(),
    };

    if let Some(dir) = &config.out_dir {
        write_two_pass_artifacts(
            dir,
            scenario,
            adapt_corpus,
            eval_corpus,
            &pass_adapt,
            &adapt_report,
            qe_artifacts.as_ref(),
            &wer_map,
            &outcome,
            &second_report,
            &result,
        )?;
    }
    Ok(result)
}

#[allow(clippy::too_many_arguments)]
fn write_two_pass_artifacts(
    dir: &Path,
    scenario: &Scenario,
    adapt_corpus: &Corpus,
    eval_corpus: &Corpus,
    pass_adapt: &DecodePass,
    adapt_report: &WerReport,
    qe: Option<&(XrtModel, XrtParams, HashMap<String, f64>)>,
    wer_map: &HashMap<String, f64>,
    outcome: &AdaptOutcome,
    second_report: &WerReport,
    result: &TwoPassOutcome,
) -> Result<()> {
    let lexicon = &scenario.lexicon;
    fs::create_dir_all(dir.join("first_pass"))?;
    fs::create_dir_all(dir.join("second_pass"))?;
    fs::create_dir_all(dir.join("models"))?;
    fs::write(dir.join("config.txt"), scenario.config.resolved_text())?;

    let mut hyps = String::new();
    let mut cns = String::new();
    let mut feature_rows = Vec::new();
    for d in &pass_adapt.decodes {
        hyps.push_str(&nbest_dump(&d.utt_id, &d.nbest, lexicon));
        cns.push_str(&cn_dump(&d.utt_id, &d.cn, lexicon));
        feature_rows.push((d.utt_id.clone(), d.features.clone()));
    }
    fs::write(dir.join("first_pass/nbest.tsv"), hyps)?;
    fs::write(dir.join("first_pass/cn.tsv"), cns)?;
    fs::write(dir.join("first_pass/features.tsv"), features_to_tsv(&feature_rows))?;
    fs::write(dir.join("first_pass/wer.tsv"), adapt_report.to_tsv())?;
    if !pass_adapt.failures.is_empty() {
        fs::write(dir.join("first_pass/failures.txt"), pass_adapt.failures.join("\n"))?;
    }

    if let Some((qe_model, params, preds)) = qe {
        fs::create_dir_all(dir.join("qe"))?;
        crate::qe::save_xrt(qe_model, &dir.join("qe/model.txt"))?;
        let mut rows: Vec<(String, f64)> =
            preds.iter().map(|(k, v)| (k.clone(), *v)).collect();
        rows.sort_by(|a, b| a.0.cmp(&b.0));
        fs::write(dir.join("qe/predictions.tsv"), predictions_to_tsv(&rows))?;
        fs::write(
            dir.join("qe/params.txt"),
            format!(
                "n_bags = {}\ntrees_per_bag = {}\nk_features = {}\nn_min = {}\n",
                params.n_bags, params.trees_per_bag, params.k_features, params.n_min
            ),
        )?;
    }

    let mut selection = String::new();
    for id in &outcome.selected_ids {
        selection.push_str(&format!("{}\t{:.6}\n", id, wer_map.get(id).copied().unwrap_or(1.0)));
    }
    fs::write(dir.join("selection.tsv"), selection)?;
    fs::create_dir_all(dir.join("adapt"))?;
    fs::write(dir.join("adapt/log.tsv"), outcome.report.log.to_tsv())?;
    if !outcome.report.dropped.is_empty() {
        fs::write(dir.join("adapt/dropped.txt"), outcome.report.dropped.join("\n"))?;
    }

    fs::write(dir.join("second_pass/wer.tsv"), second_report.to_tsv())?;
    let _ = eval_corpus;
    save_model(&scenario.model, &dir.join("models/baseline.bin"))?;
    save_model(&outcome.model, &dir.join("models/adapted.bin"))?;
    fs::write(dir.join("report.tsv"), result.report_tsv())?;
    let _ = adapt_corpus;
    Ok(())
}

/// Corpus-WER matrix over (adaptation size, alpha) with per-cell seeds.
#[derive(Debug, Clone)]
pub struct GridReport {
    pub sizes: Vec<usize>,
    pub alphas: Vec<f64>,
    /// Percent WER per cell; None marks failed cells.
    pub wer: Vec<Vec<Option<f64>>>,
    pub failures: Vec<String>,
}

impl GridReport {
    /// Appendix-style table: blank corner, alpha column headers, size row
    /// headers, percent with 2 decimals.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for a in &self.alphas {
            out.push_str(&format!("\t{a:.1}"));
        }
        out.push('\n');
        for (r, size) in self.sizes.iter().enumerate() {
            out.push_str(&size.to_string());
            for c in 0..self.alphas.len() {
                match self.wer[r][c] {
                    Some(w) => out.push_str(&format!("\t{w:.2}")),
                    None => out.push('\t'),
                }
            }
            out.push('\n');
        }
        out
    }

    /// (size, alpha, percent) of the smallest cell, row-major first winner.
    pub fn argmin(&self) -> Option<(usize, f64, f64)> {
        let mut best: Option<(usize, f64, f64)> = None;
        for (r, row) in self.wer.iter().enumerate() {
            for (c, cell) in row.iter().enumerate() {
                if let Some(w) = cell {
                    if best.is_none_or(|(_, _, bw)| *w < bw) {
                        best = Some((self.sizes[r], self.alphas[c], *w));
                    }
                }
            }
        }
        best
    }

    pub fn argmin_tsv(&self) -> String {
        match self.argmin() {
            Some((size, alpha, wer)) => format!("argmin\t{size}\t{alpha:.1}\t{wer:.2}\n"),
            None => "argmin\t-\t-\t-\n".to_string(),
        }
    }
}

/// One two-pass run per (size, alpha) cell: top-K selection at the row size,
/// KLD-hard adaptation at the column alpha, per-cell seeds derived from the
/// master seed. The scenario, first pass and WER basis are shared across
/// cells.
pub fn run_grid(config: &ExperimentConfig) -> Result<GridReport> {
    let scenario = build_scenario(config)?;
    if config.grid_sizes.is_empty() || config.grid_alphas.is_empty() {
        return Err(Error::invalid("grid axes must be non-empty"));
    }
    let (adapt_corpus, eval_corpus) = match config.condition {
        Condition::Homogeneous => (&scenario.test, &scenario.test),
        Condition::HomogeneousDev => (&scenario.dev, &scenario.dev),
        Condition::Cross => (&scenario.dev, &scenario.test),
    };
    let pass_adapt = first_pass(&scenario, adapt_corpus)?;
    let adapt_report = oracle_report(&scenario, adapt_corpus, &pass_adapt)?;
    let wer_map: HashMap<String, f64> = match config.wer_source {
        WerSource::Oracle => adapt_report.wer_map(),
        WerSource::Predicted => {
            let dev_pass = match config.condition {
                Condition::Homogeneous => first_pass(&scenario, &scenario.dev)?,
                Condition::HomogeneousDev | Condition::Cross => pass_adapt.clone(),
            };
            let (qe_model, _) =
                train_qe(&scenario, &scenario.dev, &dev_pass, mix_seed(config.seed, &[0x4e]))?;
            predict_wer_map(&qe_model, &pass_adapt)?
        }
    };

    let mut report = GridReport {
        sizes: config.grid_sizes.clone(),
        alphas: config.grid_alphas.clone(),
        wer: vec![vec![None; config.grid_alphas.len()]; config.grid_sizes.len()],
        failures: Vec::new(),
    };
    for (r, &size) in config.grid_sizes.iter().enumerate() {
        for (c, &alpha) in config.grid_alphas.iter().enumerate() {
            let cell_seed = mix_seed(config.seed, &[0x911d, r as u64, c as u64]);
            let run = adapt_with_selection(
                &scenario,
                adapt_corpus,
                &pass_adapt,
                &wer_map,
                SelectionCfg::TopK(size),
                AdaptMode::KldHard,
                alpha,
                0.0,
                cell_seed,
            )
            .and_then(|outcome| {
                Ok(evaluate_model(&scenario, &outcome.model, eval_corpus)?.0)
            });
            match run {
                Ok(wer) => report.wer[r][c] = Some(wer * 100.0),
                Err(e) => report.failures.push(format!("size {size} alpha {alpha}: {e}")),
            }
        }
    }
    if let Some(dir) = &config.out_dir {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("grid.tsv"), report.to_tsv())?;
        fs::write(dir.join("grid_argmin.tsv"), report.argmin_tsv())?;
        if !report.failures.is_empty() {
            fs::write(dir.join("grid_failures.txt"), report.failures.join("\n"))?;
        }
    }
    Ok(report)
}

/// Outcome of rescoring a set of n-best lists with a higher-order LM.
#[derive(Debug, Clone)]
pub struct RescoreOutcome {
    pub wer_before: f64,
    pub wer_after: f64,
    /// New 1-best per utterance after re-ranking.
    pub reranked: Vec<(String, Hypothesis)>,
}

/// Re-ranks n-best lists by `score + weight * higher-order LM logprob` of
/// the silence-stripped word sequence. A weight of zero leaves the ranking
/// unchanged.
pub fn rescore_nbest(
    scenario: &Scenario,
    corpus: &Corpus,
    pass: &DecodePass,
    lm: &NgramLm,
    weight: f64,
) -> Result<RescoreOutcome> {
    let refs: HashMap<&str, Vec<usize>> = corpus
        .utterances
        .iter()
        .map(|u| (u.id.as_str(), strip_silence(&scenario.lexicon, &u.reference)))
        .collect();
    let mut before = WerReport::default();
    let mut after = WerReport::default();
    let mut reranked = Vec::new();
    for d in &pass.decodes {
        let reference = refs
            .get(d.utt_id.as_str())
            .ok_or_else(|| Error::invalid(format!("no reference for {}", d.utt_id)))?;
        let mut scored: Vec<(f64, &Hypothesis)> = d
            .nbest
            .hypotheses
            .iter()
            .map(|h| {
                let words = h.words(&scenario.lexicon);
                (h.score + weight * lm.logprob(&words), h)
            })
            .collect();
        // stable: ties keep the original rank order
        scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
        let new_best = scored[0].1.clone();
        before.utts.push(UttScore::from_pair(
            &d.utt_id,
            reference,
            &d.hypothesis.words(&scenario.lexicon),
        )?);
        after.utts.push(UttScore::from_pair(
            &d.utt_id,
            reference,
            &new_best.words(&scenario.lexicon),
        )?);
        reranked.push((d.utt_id.clone(), new_best));
    }
    Ok(RescoreOutcome {
        wer_before: before.corpus_wer(),
        wer_after: after.corpus_wer(),
        reranked,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_roundtrip_through_text() {
        let mut config = ExperimentConfig::default();
        config
            .apply_text(
                "seed = 42\nmismatch = 0.3   # comment\n# full line comment\nselection = top:25\nhidden = 16,8\nadapt_mode = kld-soft\n",
            )
            .unwrap();
        assert_eq!(config.seed, 42);
        assert_eq!(config.mismatch, 0.3);
        assert_eq!(config.selection, SelectionCfg::TopK(25));
        assert_eq!(config.hidden, vec![16, 8]);
        assert_eq!(config.adapt_mode, AdaptMode::KldSoft);

        let text = config.resolved_text();
        let mut reparsed = ExperimentConfig::default();
        reparsed.apply_text(&text).unwrap();
        assert_eq!(reparsed.seed, config.seed);
        assert_eq!(reparsed.selection, config.selection);
        assert_eq!(reparsed.hidden, config.hidden);
    }

    #[test]
    fn unknown_key_rejected() {
        let mut config = ExperimentConfig::default();
        assert!(config.apply("no_such_key", "1").is_err());
        assert!(config.apply_text("garbage line without equals\n").is_err());
    }

    #[test]
    fn grid_report_layout_and_argmin() {
        let report = GridReport {
            sizes: vec![50, 100],
            alphas: vec![0.0, 0.3],
            wer: vec![vec![Some(20.0), Some(18.5)], vec![Some(19.0), None]],
            failures: vec![],
        };
        let tsv = report.to_tsv();
        let lines: Vec<&str> = tsv.lines().collect();
        assert_eq!(lines[0], "\t0.0\t0.3");
        assert_eq!(lines[1], "50\t20.00\t18.50");
        assert_eq!(lines[2], "100\t19.00\t");
        let (size, alpha, wer) = report.argmin().unwrap();
        assert_eq!(size, 50);
        assert_eq!(alpha, 0.3);
        assert_eq!(wer, 18.5);
    }
}
