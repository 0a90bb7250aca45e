//! Command-line driver for the adaptation laboratory: corpus generation,
//! LM/AM training, decoding, QE, adaptation and the experiment harness.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use adaptlab::am::{
    estimate_priors, init_model, load_model, save_model, train, FrameTargets, Layout, Priors,
};
use adaptlab::corpus::{
    gen_corpus, generator_alignment, load_corpus, load_lexicon, save_corpus, save_lexicon, Corpus,
    Lexicon, Split,
};
use adaptlab::decoder::{
    build_cn, cn_dump, forced_align_utt, nbest, nbest_dump, DecodingGraph, GraphConfig,
    Hypothesis, NBestList,
};
use adaptlab::harness::{
    self, adapt_with_selection, first_pass, oracle_report, run_grid, run_two_pass,
    ExperimentConfig, WerSource,
};
use adaptlab::lm::{train_lm, NgramLm};
use adaptlab::qe::{
    extract_features, features_from_tsv, features_to_tsv, load_xrt, predictions_to_tsv, save_xrt,
    tune_cv, xrt_fit, xrt_predict,
};
use adaptlab::scoring::{UttScore, WerReport};
use adaptlab::util::mix_seed;

#[derive(Parser)]
#[command(name = "adaptlab", about = "Two-pass acoustic model adaptation laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Configuration sources shared by scenario-driven commands; every --set
/// overrides the corresponding config-file key.
#[derive(Args, Clone)]
struct ConfigArgs {
    /// Plain-text `key = value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one configuration key, e.g. --set seed=7. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> anyhow::Result<ExperimentConfig> {
        let mut config = match &self.config {
            Some(path) => ExperimentConfig::load_file(path)?,
            None => ExperimentConfig::default(),
        };
        for kv in &self.sets {
            let (key, value) = kv
                .split_once('=')
                .ok_or_else(|| anyhow::anyhow!("--set expects key=value, got {kv:?}"))?;
            config.apply(key.trim(), value.trim())?;
        }
        Ok(config)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic train/dev/test corpora plus the lexicon.
    Gen {
        #[command(flatten)]
        config: ConfigArgs,
        /// Output directory for lexicon.tsv and the three corpus dirs.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a Kneser-Ney n-gram LM from corpus transcripts.
    TrainLm {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        lexicon: PathBuf,
        #[arg(long, default_value_t = 2)]
        order: usize,
        #[arg(long, default_value_t = 0.75)]
        discount: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the baseline acoustic model on a generated training corpus.
    TrainAm {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        lexicon: PathBuf,
        #[arg(long)]
        out_model: PathBuf,
        #[arg(long)]
        out_priors: PathBuf,
    },
    /// Decode a corpus: 1-best, n-best, confusion networks, WER when
    /// references are present.
    Decode {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        lexicon: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        priors: PathBuf,
        #[arg(long)]
        lm: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Forced-align a corpus against its reference transcripts.
    Align {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        lexicon: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        priors: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Decode a corpus and dump the 41 QE features per utterance.
    QeExtract {
        #[command(flatten)]
        config: ConfigArgs,
        /// Corpus to decode and featurize.
        #[arg(long)]
        corpus: PathBuf,
        /// Training corpus supplying in-domain LM text.
        #[arg(long)]
        train_corpus: PathBuf,
        #[arg(long)]
        lexicon: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        priors: PathBuf,
        #[arg(long)]
        lm: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Tune and fit the XRT WER predictor from features and oracle WERs.
    QeTrain {
        #[arg(long)]
        features: PathBuf,
        /// WER report TSV carrying the oracle sentence WERs.
        #[arg(long)]
        wer: PathBuf,
        /// Corpus dir supplying the speaker of each utterance.
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        lexicon: PathBuf,
        #[arg(long, default_value_t = 4)]
        folds: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Predict sentence WER for a feature dump.
    QePredict {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Adapt an acoustic model on a corpus with first-pass supervision.
    Adapt {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        lexicon: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        priors: PathBuf,
        #[arg(long)]
        lm: PathBuf,
        /// Predicted-WER TSV (`utt-id pWER`); required when
        /// wer_source = predicted.
        #[arg(long)]
        predictions: Option<PathBuf>,
        #[arg(long)]
        out_model: PathBuf,
    },
    /// Score a hypothesis dump against corpus references.
    Eval {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        lexicon: PathBuf,
        /// Hypothesis dump (`utt rank score tokens...`); rank-1 lines used.
        #[arg(long)]
        hyps: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the full two-pass adaptation experiment.
    TwoPass {
        #[command(flatten)]
        config: ConfigArgs,
        /// Output directory (overrides the config key).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sweep (adaptation size x alpha) and emit the grid table.
    Grid {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Re-rank an n-best dump with a higher-order LM.
    Rescore {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        lexicon: PathBuf,
        /// N-best dump produced by decode.
        #[arg(long)]
        nbest: PathBuf,
        #[arg(long)]
        lm: PathBuf,
        #[arg(long, default_value_t = 0.3)]
        weight: f64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error\t{}", format!("{e}").replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}

fn save_priors(priors: &Priors, path: &Path) -> anyhow::Result<()> {
    let mut out = format!("PRIORS {} {}\n", priors.values().len(), priors.floor);
    for v in priors.values() {
        out.push_str(&format!("{}\n", adaptlab::util::fmt_g12(*v)));
    }
    fs::write(path, out)?;
    Ok(())
}

fn load_priors(path: &Path) -> anyhow::Result<Priors> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| anyhow::anyhow!("empty priors file"))?;
    let h: Vec<&str> = header.split_whitespace().collect();
    if h.len() != 3 || h[0] != "PRIORS" {
        anyhow::bail!("bad priors header");
    }
    let n: usize = h[1].parse()?;
    let floor: f64 = h[2].parse()?;
    let values: Vec<f64> =
        lines.take(n).map(|l| l.trim().parse::<f64>()).collect::<Result<_, _>>()?;
    if values.len() != n {
        anyhow::bail!("priors file truncated");
    }
    Ok(Priors::from_values(values, floor)?)
}

fn stripped_transcripts(corpus: &Corpus, lexicon: &Lexicon) -> Vec<Vec<usize>> {
    corpus
        .utterances
        .iter()
        .map(|u| u.reference.iter().copied().filter(|&t| !lexicon.is_silence(t)).collect())
        .collect()
}

fn strip_words(lexicon: &Lexicon, tokens: &[usize]) -> Vec<usize> {
    tokens.iter().copied().filter(|&t| !lexicon.is_silence(t)).collect()
}

fn graph_for(
    config: &ExperimentConfig,
    lexicon: &Lexicon,
    lm: &NgramLm,
) -> anyhow::Result<DecodingGraph> {
    Ok(DecodingGraph::build(
        lexicon,
        lm,
        &GraphConfig {
            lm_weight: config.lm_weight,
            silence_enabled: true,
            silence_logprob: config.silence_logprob,
        },
    )?)
}

/// Parses a hypothesis/n-best dump back into per-utterance lists, keeping
/// the file order of utterances.
fn parse_nbest_dump(path: &Path, lexicon: &Lexicon) -> anyhow::Result<Vec<(String, NBestList)>> {
    let surface_map = lexicon.surface_to_id();
    let text = fs::read_to_string(path)?;
    let mut order: Vec<String> = Vec::new();
    let mut lists: HashMap<String, Vec<Hypothesis>> = HashMap::new();
    for line in text.lines() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() < 3 {
            anyhow::bail!("bad n-best line: {line:?}");
        }
        let utt = fields[0].to_string();
        let score: f64 = fields[2].parse()?;
        let tokens: Vec<usize> = if fields.len() > 3 && !fields[3].is_empty() {
            fields[3]
                .split(' ')
                .map(|w| {
                    surface_map
                        .get(w)
                        .copied()
                        .ok_or_else(|| anyhow::anyhow!("unknown surface {w:?}"))
                })
                .collect::<Result<_, _>>()?
        } else {
            Vec::new()
        };
        if !lists.contains_key(&utt) {
            order.push(utt.clone());
        }
        lists.entry(utt).or_default().push(Hypothesis { tokens, score, acoustic: score });
    }
    Ok(order
        .into_iter()
        .map(|utt| {
            let hypotheses = lists.remove(&utt).unwrap();
            (utt, NBestList { hypotheses, truncated: false })
        })
        .collect())
}

/// Accepts either a prediction dump (`utt pWER`) or a WER report
/// (`utt S D I len wer`); values clamped to [0,1].
fn parse_wer_tsv(path: &Path) -> anyhow::Result<HashMap<String, f64>> {
    let text = fs::read_to_string(path)?;
    let mut map = HashMap::new();
    for line in text.lines() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields[0] == "TOTAL" {
            continue;
        }
        if fields.len() == 2 {
            map.insert(fields[0].to_string(), fields[1].parse::<f64>()?.clamp(0.0, 1.0));
        } else if fields.len() >= 6 {
            map.insert(fields[0].to_string(), fields[5].parse::<f64>()?.min(1.0));
        } else {
            anyhow::bail!("bad wer line: {line:?}");
        }
    }
    Ok(map)
}

fn reference_map<'a>(corpus: &'a Corpus, lexicon: &Lexicon) -> HashMap<&'a str, Vec<usize>> {
    corpus
        .utterances
        .iter()
        .map(|u| (u.id.as_str(), strip_words(lexicon, &u.reference)))
        .collect()
}

fn run(command: Command) -> anyhow::Result<()> {
    match command {
        Command::Gen { config, out } => {
            let config = config.load()?;
            let generated = gen_corpus(&config.gen_spec())?;
            fs::create_dir_all(&out)?;
            save_lexicon(&generated.lexicon, &out.join("lexicon.tsv"))?;
            for (corpus, name) in
                [(&generated.train, "train"), (&generated.dev, "dev"), (&generated.test, "test")]
            {
                save_corpus(corpus, &generated.lexicon, &out.join(name))?;
            }
            println!(
                "gen\tutterances\t{}",
                generated.train.utterances.len()
                    + generated.dev.utterances.len()
                    + generated.test.utterances.len()
            );
        }
        Command::TrainLm { corpus, lexicon, order, discount, out } => {
            let lexicon = load_lexicon(&lexicon)?;
            let corpus = load_corpus(&corpus, &lexicon, "lm-text", Split::Train)?;
            let lm = train_lm(
                &stripped_transcripts(&corpus, &lexicon),
                order,
                discount,
                lexicon.vocab_size(),
            )?;
            lm.save(&out)?;
            println!("train-lm\torder\t{order}");
        }
        Command::TrainAm { config, corpus, lexicon, out_model, out_priors } => {
            let config = config.load()?;
            let lexicon = load_lexicon(&lexicon)?;
            let corpus = load_corpus(&corpus, &lexicon, "train", Split::Train)?;
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
            for (i, utt) in corpus.utterances.iter().enumerate() {
                let states =
                    generator_alignment(&lexicon, &utt.reference, config.frames_per_state);
                alignments.push(states.clone());
                let targets = FrameTargets::one_hot(&states, lexicon.total_states());
                if i % 7 == 3 {
                    cv_set.push((utt.frames.clone(), targets));
                } else {
                    train_set.push((utt.frames.clone(), targets));
                }
            }
            let schedule = config.schedule(
                config.min_epochs,
                config.max_epochs,
                mix_seed(config.seed, &[0xa1]),
            );
            let (model, log) = train(&init, &train_set, &schedule, &cv_set)?;
            let priors = estimate_priors(&alignments, lexicon.total_states(), config.prior_floor)?;
            save_model(&model, &out_model)?;
            save_priors(&priors, &out_priors)?;
            print!("{}", log.to_tsv());
        }
        Command::Decode { config, corpus, lexicon, model, priors, lm, out } => {
            let config = config.load()?;
            let lexicon = load_lexicon(&lexicon)?;
            let corpus = load_corpus(&corpus, &lexicon, "decode", Split::Test)?;
            let model = load_model(&model)?;
            let priors = load_priors(&priors)?;
            let lm = NgramLm::load(&lm)?;
            let graph = graph_for(&config, &lexicon, &lm)?;
            fs::create_dir_all(&out)?;
            let mut hyps = String::new();
            let mut nbests = String::new();
            let mut cns = String::new();
            let mut report = WerReport::default();
            let mut failures = Vec::new();
            for utt in &corpus.utterances {
                let nb =
                    match nbest(&model, &priors, utt, &graph, config.nbest_n, config.nbest_beam) {
                        Ok(nb) => nb,
                        Err(e) => {
                            failures.push(format!("{}\t{e}", utt.id));
                            continue;
                        }
                    };
                let best = &nb.hypotheses[0];
                let words: Vec<&str> =
                    best.tokens.iter().map(|&t| lexicon.tokens[t].surface.as_str()).collect();
                hyps.push_str(&format!("{}\t1\t{:.6}\t{}\n", utt.id, best.score, words.join(" ")));
                nbests.push_str(&nbest_dump(&utt.id, &nb, &lexicon));
                let cn = build_cn(&nb, config.cn_tau)?;
                cns.push_str(&cn_dump(&utt.id, &cn, &lexicon));
                if !utt.reference.is_empty() {
                    let reference = strip_words(&lexicon, &utt.reference);
                    let hyp_words = best.words(&lexicon);
                    report.utts.push(UttScore::from_pair(&utt.id, &reference, &hyp_words)?);
                }
            }
            fs::write(out.join("hyps.tsv"), hyps)?;
            fs::write(out.join("nbest.tsv"), nbests)?;
            fs::write(out.join("cn.tsv"), cns)?;
            if !report.utts.is_empty() {
                fs::write(out.join("wer.tsv"), report.to_tsv())?;
                println!("decode\tWER\t{:.2}", report.corpus_wer() * 100.0);
            } else {
                println!("decode\tutts\t{}", corpus.utterances.len());
            }
            if !failures.is_empty() {
                fs::write(out.join("failures.tsv"), failures.join("\n"))?;
            }
        }
        Command::Align { corpus, lexicon, model, priors, out } => {
            let lexicon = load_lexicon(&lexicon)?;
            let corpus = load_corpus(&corpus, &lexicon, "align", Split::Train)?;
            let model = load_model(&model)?;
            let priors = load_priors(&priors)?;
            let mut lines = String::new();
            for utt in &corpus.utterances {
                let alignment = forced_align_utt(&model, &priors, utt, &utt.reference, &lexicon)?;
                let states: Vec<String> =
                    alignment.frame_states.iter().map(|s| s.to_string()).collect();
                lines.push_str(&format!("{}\t{}\n", utt.id, states.join(" ")));
            }
            fs::write(&out, lines)?;
            println!("align\tutts\t{}", corpus.utterances.len());
        }
        Command::QeExtract { config, corpus, train_corpus, lexicon, model, priors, lm, out } => {
            let config = config.load()?;
            let lexicon = load_lexicon(&lexicon)?;
            let corpus = load_corpus(&corpus, &lexicon, "qe", Split::Test)?;
            let train_corpus = load_corpus(&train_corpus, &lexicon, "train", Split::Train)?;
            let model = load_model(&model)?;
            let priors = load_priors(&priors)?;
            let lm = NgramLm::load(&lm)?;
            let graph = graph_for(&config, &lexicon, &lm)?;
            let transcripts = stripped_transcripts(&train_corpus, &lexicon);
            let mut lm_text = transcripts.clone();
            lm_text.extend(adaptlab::corpus::sample_in_domain_text(
                &lexicon,
                config.seed,
                config.lm_text_sentences,
                (config.len_min, config.len_max),
            ));
            let lm_in = train_lm(&lm_text, 3, config.lm_discount, lexicon.vocab_size())?;
            let out_text = adaptlab::corpus::sample_transcripts(
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
            let mut rows = Vec::new();
            for utt in &corpus.utterances {
                let nb = nbest(&model, &priors, utt, &graph, config.nbest_n, config.nbest_beam)?;
                let cn = build_cn(&nb, config.cn_tau)?;
                let features =
                    extract_features(&nb.hypotheses[0], &cn, &lm_in, &lm_out, &class_lm, &lexicon);
                rows.push((utt.id.clone(), features));
            }
            fs::write(&out, features_to_tsv(&rows))?;
            println!("qe-extract\tutts\t{}", rows.len());
        }
        Command::QeTrain { features, wer, corpus, lexicon, folds, seed, out } => {
            let lexicon = load_lexicon(&lexicon)?;
            let corpus = load_corpus(&corpus, &lexicon, "qe", Split::Dev)?;
            let speaker_of: HashMap<&str, &str> =
                corpus.utterances.iter().map(|u| (u.id.as_str(), u.speaker.as_str())).collect();
            let rows = features_from_tsv(&fs::read_to_string(&features)?)?;
            let wers = parse_wer_tsv(&wer)?;
            let mut xs = Vec::new();
            let mut ys = Vec::new();
            let mut speakers = Vec::new();
            for (id, fv) in rows {
                let y = wers
                    .get(&id)
                    .copied()
                    .ok_or_else(|| anyhow::anyhow!("no WER for utterance {id}"))?;
                let spk = speaker_of
                    .get(id.as_str())
                    .ok_or_else(|| anyhow::anyhow!("utterance {id} not in corpus"))?;
                xs.push(fv);
                ys.push(y);
                speakers.push(spk.to_string());
            }
            let grid = harness::default_qe_grid();
            let params = tune_cv(&xs, &ys, &speakers, &grid, folds, seed)?;
            let model = xrt_fit(&xs, &ys, &params)?;
            save_xrt(&model, &out)?;
            println!(
                "qe-train\tbags\t{}\ttrees\t{}\tk\t{}\tn_min\t{}",
                params.n_bags, params.trees_per_bag, params.k_features, params.n_min
            );
        }
        Command::QePredict { model, features, out } => {
            let model = load_xrt(&model)?;
            let rows = features_from_tsv(&fs::read_to_string(&features)?)?;
            let mut preds = Vec::new();
            for (id, fv) in rows {
                preds.push((id, xrt_predict(&model, &fv)?));
            }
            fs::write(&out, predictions_to_tsv(&preds))?;
            println!("qe-predict\tutts\t{}", preds.len());
        }
        Command::Adapt { config, corpus, lexicon, model, priors, lm, predictions, out_model } => {
            let config = config.load()?;
            let lexicon = load_lexicon(&lexicon)?;
            let corpus = load_corpus(&corpus, &lexicon, "adapt", Split::Test)?;
            let model = load_model(&model)?;
            let priors = load_priors(&priors)?;
            let lm = NgramLm::load(&lm)?;
            let scenario =
                harness::file_scenario(&config, lexicon, corpus.clone(), model, priors, lm)?;
            let pass = first_pass(&scenario, &corpus)?;
            let wer_map: HashMap<String, f64> = match config.wer_source {
                WerSource::Oracle => oracle_report(&scenario, &corpus, &pass)?.wer_map(),
                WerSource::Predicted => {
                    let path = predictions.ok_or_else(|| {
                        anyhow::anyhow!("wer_source = predicted needs --predictions")
                    })?;
                    parse_wer_tsv(&path)?
                }
            };
            let outcome = adapt_with_selection(
                &scenario,
                &corpus,
                &pass,
                &wer_map,
                config.selection,
                config.adapt_mode,
                config.alpha,
                config.beta,
                mix_seed(config.seed, &[0xada]),
            )?;
            save_model(&outcome.model, &out_model)?;
            println!(
                "adapt\tselected\t{}\tof\t{}\tdropped\t{}",
                outcome.selected,
                outcome.pool,
                outcome.report.dropped.len()
            );
        }
        Command::Eval { corpus, lexicon, hyps, out } => {
            let lexicon = load_lexicon(&lexicon)?;
            let corpus = load_corpus(&corpus, &lexicon, "eval", Split::Test)?;
            let lists = parse_nbest_dump(&hyps, &lexicon)?;
            let refs = reference_map(&corpus, &lexicon);
            let mut report = WerReport::default();
            for (id, list) in &lists {
                let reference = refs
                    .get(id.as_str())
                    .ok_or_else(|| anyhow::anyhow!("utterance {id} not in corpus"))?;
                let words = strip_words(&lexicon, &list.hypotheses[0].tokens);
                report.utts.push(UttScore::from_pair(id, reference, &words)?);
            }
            fs::write(&out, report.to_tsv())?;
            println!("eval\tWER\t{:.2}", report.corpus_wer() * 100.0);
        }
        Command::TwoPass { config, out } => {
            let mut config = config.load()?;
            if let Some(out) = out {
                config.out_dir = Some(out);
            }
            let outcome = run_two_pass(&config)?;
            print!("{}", outcome.report_tsv());
        }
        Command::Grid { config, out } => {
            let mut config = config.load()?;
            if let Some(out) = out {
                config.out_dir = Some(out);
            }
            let report = run_grid(&config)?;
            print!("{}", report.to_tsv());
            print!("{}", report.argmin_tsv());
        }
        Command::Rescore { corpus, lexicon, nbest, lm, weight, out } => {
            let lexicon = load_lexicon(&lexicon)?;
            let corpus = load_corpus(&corpus, &lexicon, "rescore", Split::Test)?;
            let lm = NgramLm::load(&lm)?;
            let lists = parse_nbest_dump(&nbest, &lexicon)?;
            let refs = reference_map(&corpus, &lexicon);
            let mut before = WerReport::default();
            let mut after = WerReport::default();
            let mut reranked = String::new();
            for (id, list) in &lists {
                let reference = refs
                    .get(id.as_str())
                    .ok_or_else(|| anyhow::anyhow!("utterance {id} not in corpus"))?;
                let mut scored: Vec<(f64, &Hypothesis)> = list
                    .hypotheses
                    .iter()
                    .map(|h| (h.score + weight * lm.logprob(&strip_words(&lexicon, &h.tokens)), h))
                    .collect();
                scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
                before.utts.push(UttScore::from_pair(
                    id,
                    reference,
                    &strip_words(&lexicon, &list.hypotheses[0].tokens),
                )?);
                after.utts.push(UttScore::from_pair(
                    id,
                    reference,
                    &strip_words(&lexicon, &scored[0].1.tokens),
                )?);
                let words: Vec<&str> =
                    scored[0].1.tokens.iter().map(|&t| lexicon.tokens[t].surface.as_str()).collect();
                reranked.push_str(&format!("{}\t1\t{:.6}\t{}\n", id, scored[0].0, words.join(" ")));
            }
            fs::create_dir_all(&out)?;
            fs::write(out.join("rescored_hyps.tsv"), reranked)?;
            fs::write(out.join("wer_before.tsv"), before.to_tsv())?;
            fs::write(out.join("wer_after.tsv"), after.to_tsv())?;
            println!(
                "rescore\tbefore\t{:.2}\tafter\t{:.2}",
                before.corpus_wer() * 100.0,
                after.corpus_wer() * 100.0
            );
        }
    }
    Ok(())
}
