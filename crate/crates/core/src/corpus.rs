//! Deterministic synthetic corpora: lexicon, speakers, noise conditions and
//! utterances with controllable train/test acoustic mismatch, plus
//! per-speaker feature normalization.
//!
//! Utterance frames are emitted per HMM state from state-specific mean
//! vectors, then passed through a per-speaker affine transform and a
//! per-condition shift/variance-inflation. The affine mismatch injected into
//! dev/test speakers stands in for the acoustic mismatch a real system would
//! see between training and deployment.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng as _;

use crate::util::{self, mix_seed, rng_from_seed, Matrix};
use crate::{Error, Result};

/// Phone classes spanned by the phone inventory.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PhoneClass {
    Fricative,
    Liquid,
    Nasal,
    Stop,
    Vowel,
}

pub const PHONE_CLASSES: [PhoneClass; 5] = [
    PhoneClass::Fricative,
    PhoneClass::Liquid,
    PhoneClass::Nasal,
    PhoneClass::Stop,
    PhoneClass::Vowel,
];

impl PhoneClass {
    pub fn tag(self) -> &'static str {
        match self {
            PhoneClass::Fricative => "fric",
            PhoneClass::Liquid => "liq",
            PhoneClass::Nasal => "nas",
            PhoneClass::Stop => "stop",
            PhoneClass::Vowel => "vow",
        }
    }

    fn from_tag(tag: &str) -> Result<Self> {
        Ok(match tag {
            "fric" => PhoneClass::Fricative,
            "liq" => PhoneClass::Liquid,
            "nas" => PhoneClass::Nasal,
            "stop" => PhoneClass::Stop,
            "vow" => PhoneClass::Vowel,
            other => return Err(Error::Parse(format!("unknown phone class {other:?}"))),
        })
    }
}

/// One phone of the inventory.
#[derive(Debug, Clone, PartialEq)]
pub struct Phone {
    pub symbol: String,
    pub class: PhoneClass,
}

/// Lexical classes; the synthetic stand-in for part-of-speech tags.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LexClass {
    Noun,
    Verb,
    Function,
    Number,
    Other,
}

pub const LEX_CLASSES: [LexClass; 5] =
    [LexClass::Noun, LexClass::Verb, LexClass::Function, LexClass::Number, LexClass::Other];

impl LexClass {
    pub fn tag(self) -> &'static str {
        match self {
            LexClass::Noun => "noun",
            LexClass::Verb => "verb",
            LexClass::Function => "function",
            LexClass::Number => "number",
            LexClass::Other => "other",
        }
    }

    fn from_tag(tag: &str) -> Result<Self> {
        Ok(match tag {
            "noun" => LexClass::Noun,
            "verb" => LexClass::Verb,
            "function" => LexClass::Function,
            "number" => LexClass::Number,
            "other" => LexClass::Other,
            other => return Err(Error::Parse(format!("unknown lexical class {other:?}"))),
        })
    }

    /// Stable numeric id used as a QE feature and as the class-LM symbol.
    pub fn index(self) -> usize {
        match self {
            LexClass::Noun => 0,
            LexClass::Verb => 1,
            LexClass::Function => 2,
            LexClass::Number => 3,
            LexClass::Other => 4,
        }
    }
}

/// One lexicon entry.
#[derive(Debug, Clone, PartialEq)]
pub struct LexToken {
    pub id: usize,
    pub surface: String,
    /// Indices into the lexicon phone inventory; never empty.
    pub phones: Vec<usize>,
    pub class: LexClass,
    /// Number of HMM states for this token, 1..=3.
    pub states: usize,
}

/// Token inventory with a dedicated silence token and a phone inventory.
#[derive(Debug, Clone, PartialEq)]
pub struct Lexicon {
    pub tokens: Vec<LexToken>,
    pub phones: Vec<Phone>,
    pub silence_id: usize,
    /// Seed of the hidden emission model that defines state mean vectors.
    pub emission_seed: u64,
    state_offsets: Vec<usize>,
    total_states: usize,
}

impl Lexicon {
    /// Validated constructor from explicit parts.
    pub fn new(
        tokens: Vec<LexToken>,
        phones: Vec<Phone>,
        silence_id: usize,
        emission_seed: u64,
    ) -> Result<Self> {
        let lex = Lexicon::finish(tokens, phones, silence_id, emission_seed);
        lex.validate()?;
        Ok(lex)
    }

    fn finish(tokens: Vec<LexToken>, phones: Vec<Phone>, silence_id: usize, emission_seed: u64) -> Self {
        let mut state_offsets = Vec::with_capacity(tokens.len());
        let mut acc = 0usize;
        for t in &tokens {
            state_offsets.push(acc);
            acc += t.states;
        }
        Lexicon { tokens, phones, silence_id, emission_seed, state_offsets, total_states: acc }
    }

    pub fn vocab_size(&self) -> usize {
        self.tokens.len()
    }

    /// Total number of HMM states; the acoustic model output size.
    pub fn total_states(&self) -> usize {
        self.total_states
    }

    /// Global state index of state `j` of token `token_id`.
    pub fn global_state(&self, token_id: usize, j: usize) -> usize {
        debug_assert!(j < self.tokens[token_id].states);
        self.state_offsets[token_id] + j
    }

    /// Inverse of [`Lexicon::global_state`].
    pub fn state_owner(&self, state: usize) -> (usize, usize) {
        match self.state_offsets.binary_search(&state) {
            Ok(tok) => (tok, 0),
            Err(ins) => {
                let tok = ins - 1;
                (tok, state - self.state_offsets[tok])
            }
        }
    }

    /// Hidden emission mean for a global state, one dimension at a time.
    /// A pure function of the emission seed, so the same acoustic world is
    /// reproduced by every call.
    pub fn state_mean(&self, state: usize, dim: usize) -> f64 {
        let h = mix_seed(self.emission_seed, &[STATE_MEAN_SALT, state as u64, dim as u64]);
        // map to [-1.5, 1.5]
        (h as f64 / u64::MAX as f64) * 3.0 - 1.5
    }

    pub fn surface_to_id(&self) -> HashMap<&str, usize> {
        self.tokens.iter().map(|t| (t.surface.as_str(), t.id)).collect()
    }

    pub fn is_silence(&self, token_id: usize) -> bool {
        token_id == self.silence_id
    }

    /// Tokens sharing this token's full phone string (excluding itself).
    pub fn homophone_count(&self, token_id: usize) -> usize {
        let phones = &self.tokens[token_id].phones;
        self.tokens
            .iter()
            .filter(|t| t.id != token_id && t.id != self.silence_id && &t.phones == phones)
            .count()
    }

    /// Tokens whose phone string is at edit distance exactly 1.
    pub fn neighbor_count(&self, token_id: usize) -> usize {
        let phones = &self.tokens[token_id].phones;
        self.tokens
            .iter()
            .filter(|t| {
                if t.id == token_id || t.id == self.silence_id {
                    return false;
                }
                let (_, c) = crate::scoring::edit_align(phones, &t.phones);
                c.total() == 1
            })
            .count()
    }

    pub fn validate(&self) -> Result<()> {
        for (i, t) in self.tokens.iter().enumerate() {
            if t.id != i {
                return Err(Error::invalid(format!("token ids not dense at {i}")));
            }
            if t.phones.is_empty() {
                return Err(Error::invalid(format!("token {} has empty phone string", t.surface)));
            }
            if t.states == 0 {
                return Err(Error::invalid(format!("token {} has zero states", t.surface)));
            }
        }
        if self.silence_id >= self.tokens.len() {
            return Err(Error::invalid("silence id out of range"));
        }
        Ok(())
    }
}

const fn silence_surface() -> &'static str {
    "<sil>"
}

const STATE_MEAN_SALT: u64 = 0x51a7_e00d;

/// Builds a deterministic lexicon. Lexical classes are assigned round-robin
/// so every class has at least one token; vocabularies of 20 or more tokens
/// are guaranteed at least one homophone pair.
pub fn build_lexicon(seed: u64, vocab_size: usize, phone_inventory_size: usize) -> Result<Lexicon> {
    if vocab_size < 5 {
        return Err(Error::invalid(format!("vocab_size {vocab_size} < 5")));
    }
    if phone_inventory_size < 5 {
        return Err(Error::invalid(format!("phone_inventory_size {phone_inventory_size} < 5")));
    }
    let mut rng = rng_from_seed(mix_seed(seed, &[1]));

    let mut phones = Vec::with_capacity(phone_inventory_size);
    for p in 0..phone_inventory_size {
        let class = PHONE_CLASSES[p % PHONE_CLASSES.len()];
        phones.push(Phone { symbol: format!("{}{}", class.tag(), p / PHONE_CLASSES.len()), class });
    }

    let mut tokens = Vec::with_capacity(vocab_size);
    tokens.push(LexToken {
        id: 0,
        surface: silence_surface().to_string(),
        phones: vec![0],
        class: LexClass::Other,
        states: 1,
    });

    let mut used_surfaces: HashSet<String> = HashSet::new();
    used_surfaces.insert(silence_surface().to_string());
    let mut number_count = 0usize;
    for id in 1..vocab_size {
        let class = LEX_CLASSES[(id - 1) % LEX_CLASSES.len()];
        let surface = loop {
            let cand = match class {
                LexClass::Number => {
                    number_count += 1;
                    format!("{}", 10 + number_count * 7)
                }
                _ => {
                    let len = rng.gen_range(2..=5);
                    let mut s = String::new();
                    for _ in 0..len {
                        s.push((b'a' + rng.gen_range(0..26u8)) as char);
                    }
                    s
                }
            };
            if !used_surfaces.contains(&cand) {
                break cand;
            }
        };
        used_surfaces.insert(surface.clone());
        let n_phones = rng.gen_range(2..=4);
        let phone_ids: Vec<usize> = (0..n_phones).map(|_| rng.gen_range(0..phones.len())).collect();
        let states = rng.gen_range(1..=3);
        tokens.push(LexToken { id, surface, phones: phone_ids, class, states });
    }

    // force one homophone pair on larger vocabularies
    if vocab_size >= 20 {
        let donor = tokens[1].phones.clone();
        tokens[2].phones = donor;
    }

    let lex = Lexicon::finish(tokens, phones, 0, mix_seed(seed, &[2]));
    lex.validate()?;
    Ok(lex)
}

/// Per-speaker affine transform applied to emitted frames.
#[derive(Debug, Clone, PartialEq)]
pub struct SpeakerProfile {
    pub id: String,
    pub offset: Vec<f64>,
    pub scale: Vec<f64>,
}

impl SpeakerProfile {
    pub fn identity(id: &str, dim: usize) -> Self {
        SpeakerProfile { id: id.to_string(), offset: vec![0.0; dim], scale: vec![1.0; dim] }
    }

    pub fn validate(&self) -> Result<()> {
        if self.scale.iter().any(|&s| s <= 0.0) {
            return Err(Error::invalid(format!("speaker {} has non-positive scale", self.id)));
        }
        Ok(())
    }
}

/// Per-condition mean shift and emission variance inflation.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseCondition {
    pub id: u32,
    pub shift: Vec<f64>,
    pub var_inflation: f64,
}

impl NoiseCondition {
    pub fn identity(id: u32, dim: usize) -> Self {
        NoiseCondition { id, shift: vec![0.0; dim], var_inflation: 1.0 }
    }
}

/// One utterance: a T x D frame matrix plus its reference token sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub speaker: String,
    pub condition: u32,
    pub frames: Matrix,
    /// Reference token ids; empty when no transcript is available.
    pub reference: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub fn tag(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub name: String,
    pub split: Split,
    pub utterances: Vec<Utterance>,
    pub speakers: Vec<SpeakerProfile>,
}

impl Corpus {
    pub fn speaker_ids(&self) -> Vec<String> {
        let mut seen = HashSet::new();
        let mut out = Vec::new();
        for u in &self.utterances {
            if seen.insert(u.speaker.clone()) {
                out.push(u.speaker.clone());
            }
        }
        out
    }

    pub fn total_frames(&self) -> usize {
        self.utterances.iter().map(|u| u.frames.rows()).sum()
    }
}

/// Synthesizes one utterance. Every token contributes
/// `states x frames_per_state` frames around its state means; the noise
/// standard deviation is inflated by the condition before the speaker
/// transform and condition shift are applied. Frame values are quantized
/// through f32 so on-disk round trips are exact.
pub fn synthesize_utterance(
    lexicon: &Lexicon,
    reference: &[usize],
    speaker: &SpeakerProfile,
    condition: &NoiseCondition,
    frames_per_state: usize,
    emission_stddev: f64,
    seed: u64,
) -> Result<Utterance> {
    if reference.is_empty() {
        return Err(Error::invalid("reference must be non-empty"));
    }
    if frames_per_state == 0 {
        return Err(Error::invalid("frames_per_state must be >= 1"));
    }
    for &tok in reference {
        if tok >= lexicon.vocab_size() {
            return Err(Error::invalid(format!("unknown token id {tok}")));
        }
    }
    speaker.validate()?;
    let dim = speaker.offset.len();
    if condition.shift.len() != dim {
        return Err(Error::DimensionMismatch("speaker/condition dimension".into()));
    }

    let mut rng = rng_from_seed(seed);
    let noise_std = emission_stddev * condition.var_inflation.sqrt();
    let t_total: usize = reference.iter().map(|&t| lexicon.tokens[t].states * frames_per_state).sum();
    let mut frames = Matrix::zeros(t_total, dim);
    let mut row = 0usize;
    for &tok in reference {
        for j in 0..lexicon.tokens[tok].states {
            let state = lexicon.global_state(tok, j);
            for _ in 0..frames_per_state {
                let out = frames.row_mut(row);
                for (d, v) in out.iter_mut().enumerate() {
                    let noise: f64 = if noise_std > 0.0 {
                        let g: f64 = sample_standard_normal(&mut rng);
                        g * noise_std
                    } else {
                        0.0
                    };
                    let emitted = lexicon.state_mean(state, d) + noise;
                    let x = emitted * speaker.scale[d] + speaker.offset[d] + condition.shift[d];
                    *v = x as f32 as f64;
                }
                row += 1;
            }
        }
    }
    Ok(Utterance {
        id: String::new(),
        speaker: speaker.id.clone(),
        condition: condition.id,
        frames,
        reference: reference.to_vec(),
    })
}

fn sample_standard_normal(rng: &mut crate::util::Rng) -> f64 {
    // Box-Muller; two uniforms per draw keeps the stream layout simple.
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen::<f64>();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Ground-truth per-frame state alignment implied by the generator: each
/// reference token occupies its states in order, `frames_per_state` frames
/// each.
pub fn generator_alignment(
    lexicon: &Lexicon,
    reference: &[usize],
    frames_per_state: usize,
) -> Vec<usize> {
    let mut states = Vec::new();
    for &tok in reference {
        for j in 0..lexicon.tokens[tok].states {
            let s = lexicon.global_state(tok, j);
            for _ in 0..frames_per_state {
                states.push(s);
            }
        }
    }
    states
}

/// Generation parameters for a three-way corpus.
#[derive(Debug, Clone)]
pub struct GenSpec {
    pub seed: u64,
    pub vocab_size: usize,
    pub phone_inventory_size: usize,
    pub dim: usize,
    pub n_speakers: [usize; 3],
    pub n_utts: [usize; 3],
    pub len_range: (usize, usize),
    /// Magnitude of the dev/test speaker mismatch; 0 disables it.
    pub mismatch: f64,
    pub frames_per_state: usize,
    pub emission_stddev: f64,
    /// Probability of inserting a silence token between consecutive words.
    pub pause_prob: f64,
}

impl Default for GenSpec {
    fn default() -> Self {
        GenSpec {
            seed: 1,
            vocab_size: 20,
            phone_inventory_size: 10,
            dim: 8,
            n_speakers: [4, 4, 4],
            n_utts: [120, 60, 60],
            len_range: (3, 7),
            mismatch: 0.6,
            frames_per_state: 3,
            emission_stddev: 0.35,
            pause_prob: 0.2,
        }
    }
}

/// Everything `gen_corpus` produces.
#[derive(Debug, Clone)]
pub struct GeneratedCorpora {
    pub lexicon: Lexicon,
    pub conditions: Vec<NoiseCondition>,
    pub train: Corpus,
    pub dev: Corpus,
    pub test: Corpus,
}

/// Generates train/dev/test corpora with pairwise-disjoint speaker sets.
/// References are sampled from a seeded bigram process over non-silence
/// tokens; dev/test speakers carry affine offsets proportional to the
/// mismatch level while train speakers stay at identity.
/// The generator bigram process over non-silence tokens: transition weights
/// with a zeroed diagonal (no immediate repeats; the decoding graph only
/// reaches a repeated token through an intervening silence). The last row is
/// the sentence-start distribution.
fn reference_chain(lexicon: &Lexicon, seed: u64) -> (Vec<usize>, Vec<Vec<f64>>) {
    let words: Vec<usize> =
        (0..lexicon.vocab_size()).filter(|&t| !lexicon.is_silence(t)).collect();
    let mut chain_rng = rng_from_seed(mix_seed(seed, &[11]));
    let mut weights: Vec<Vec<f64>> = (0..=words.len())
        .map(|_| (0..words.len()).map(|_| chain_rng.gen_range(0.05..1.0)).collect())
        .collect();
    for (prev, row) in weights.iter_mut().enumerate().take(words.len()) {
        row[prev] = 0.0;
    }
    (words, weights)
}

fn chain_step(
    weights: &[Vec<f64>],
    prev: usize,
    rng: &mut crate::util::Rng,
) -> usize {
    let row = &weights[prev];
    let total: f64 = row.iter().sum();
    let mut draw = rng.gen_range(0.0..total);
    for (k, &wt) in row.iter().enumerate() {
        if draw < wt {
            return k;
        }
        draw -= wt;
    }
    row.len() - 1
}

/// Extra text drawn from the same reference process that `gen_corpus` uses
/// for utterances; cheap in-domain LM training data, the analog of having
/// far more LM text than transcribed audio.
pub fn sample_in_domain_text(
    lexicon: &Lexicon,
    gen_seed: u64,
    n_sentences: usize,
    len_range: (usize, usize),
) -> Vec<Vec<usize>> {
    let (words, weights) = reference_chain(lexicon, gen_seed);
    let mut rng = rng_from_seed(mix_seed(gen_seed, &[0x7e47]));
    let mut out = Vec::with_capacity(n_sentences);
    for _ in 0..n_sentences {
        let len = rng.gen_range(len_range.0..=len_range.1);
        let mut sent = Vec::with_capacity(len);
        let mut prev = words.len();
        for _ in 0..len {
            let pick = chain_step(&weights, prev, &mut rng);
            sent.push(words[pick]);
            prev = pick;
        }
        out.push(sent);
    }
    out
}

pub fn gen_corpus(spec: &GenSpec) -> Result<GeneratedCorpora> {
    if spec.n_speakers.contains(&0) {
        return Err(Error::invalid("need at least one speaker per split"));
    }
    if spec.len_range.0 == 0 || spec.len_range.0 > spec.len_range.1 {
        return Err(Error::invalid("bad utterance length range"));
    }
    let lexicon = build_lexicon(mix_seed(spec.seed, &[10]), spec.vocab_size, spec.phone_inventory_size)?;
    let (words, bigram_weights) = reference_chain(&lexicon, spec.seed);

    let mut conditions = Vec::with_capacity(4);
    let mut cond_rng = rng_from_seed(mix_seed(spec.seed, &[12]));
    let inflations = [1.0, 1.5, 2.0, 2.5];
    for (c, &infl) in inflations.iter().enumerate() {
        let shift: Vec<f64> = if c == 0 {
            vec![0.0; spec.dim]
        } else {
            (0..spec.dim).map(|_| cond_rng.gen_range(-0.12..0.12)).collect()
        };
        conditions.push(NoiseCondition { id: c as u32, shift, var_inflation: infl });
    }

    let splits = [Split::Train, Split::Dev, Split::Test];
    let prefixes = ["tr", "dv", "et"];
    let mut corpora = Vec::with_capacity(3);
    for (si, &split) in splits.iter().enumerate() {
        // every dev/test speaker draws an independent mismatch direction, so
        // the two evaluation splits are exchangeable domains with disjoint
        // speakers and a wide per-speaker difficulty spread
        let mut spk_rng = rng_from_seed(mix_seed(spec.seed, &[20, si as u64]));
        let mut speakers = Vec::with_capacity(spec.n_speakers[si]);
        for s in 0..spec.n_speakers[si] {
            let id = format!("{}_s{:02}", prefixes[si], s);
            let profile = if split == Split::Train || spec.mismatch == 0.0 {
                SpeakerProfile::identity(&id, spec.dim)
            } else {
                let severity: f64 = spk_rng.gen_range(0.3..1.0);
                let offset: Vec<f64> = (0..spec.dim)
                    .map(|_| spec.mismatch * severity * spk_rng.gen_range(-1.0..1.0))
                    .collect();
                let scale: Vec<f64> = (0..spec.dim)
                    .map(|_| {
                        (1.0 + spec.mismatch * severity * spk_rng.gen_range(-0.25..0.25)).max(0.1)
                    })
                    .collect();
                SpeakerProfile { id: id.clone(), offset, scale }
            };
            profile.validate()?;
            speakers.push(profile);
        }

        let mut utterances = Vec::with_capacity(spec.n_utts[si]);
        for i in 0..spec.n_utts[si] {
            let mut utt_rng = rng_from_seed(mix_seed(spec.seed, &[30, si as u64, i as u64]));
            let len = utt_rng.gen_range(spec.len_range.0..=spec.len_range.1);
            let mut reference = Vec::with_capacity(len + 2);
            let mut prev: usize = words.len(); // start-of-sentence row
            for w in 0..len {
                let pick = chain_step(&bigram_weights, prev, &mut utt_rng);
                if w > 0 && utt_rng.gen::<f64>() < spec.pause_prob {
                    reference.push(lexicon.silence_id);
                }
                reference.push(words[pick]);
                prev = pick;
            }
            let speaker = &speakers[i % speakers.len()];
            let condition = &conditions[i % conditions.len()];
            let mut utt = synthesize_utterance(
                &lexicon,
                &reference,
                speaker,
                condition,
                spec.frames_per_state,
                spec.emission_stddev,
                mix_seed(spec.seed, &[31, si as u64, i as u64]),
            )?;
            utt.id = format!("{}{:04}", prefixes[si], i);
            utterances.push(utt);
        }
        corpora.push(Corpus {
            name: format!("{}-{}", prefixes[si], spec.seed),
            split,
            utterances,
            speakers,
        });
    }

    let test = corpora.pop().unwrap();
    let dev = corpora.pop().unwrap();
    let train = corpora.pop().unwrap();
    debug_assert!(disjoint_speakers(&train, &dev) && disjoint_speakers(&dev, &test));
    Ok(GeneratedCorpora { lexicon, conditions, train, dev, test })
}

pub fn disjoint_speakers(a: &Corpus, b: &Corpus) -> bool {
    let sa: HashSet<_> = a.speaker_ids().into_iter().collect();
    b.speaker_ids().iter().all(|s| !sa.contains(s))
}

/// Samples token sequences from a seeded bigram process over the lexicon's
/// non-silence tokens; the text source for out-of-domain language models.
pub fn sample_transcripts(
    lexicon: &Lexicon,
    seed: u64,
    n_sentences: usize,
    len_range: (usize, usize),
) -> Vec<Vec<usize>> {
    let words: Vec<usize> =
        (0..lexicon.vocab_size()).filter(|&t| !lexicon.is_silence(t)).collect();
    let mut rng = rng_from_seed(mix_seed(seed, &[0x0d]));
    let mut weights: Vec<Vec<f64>> = (0..=words.len())
        .map(|_| (0..words.len()).map(|_| rng.gen_range(0.05..1.0)).collect())
        .collect();
    for (prev, row) in weights.iter_mut().enumerate().take(words.len()) {
        row[prev] = 0.0;
    }
    let mut sentences = Vec::with_capacity(n_sentences);
    for _ in 0..n_sentences {
        let len = rng.gen_range(len_range.0..=len_range.1);
        let mut sent = Vec::with_capacity(len);
        let mut prev = words.len();
        for _ in 0..len {
            let row = &weights[prev];
            let total: f64 = row.iter().sum();
            let mut draw = rng.gen_range(0.0..total);
            let mut pick = 0usize;
            for (k, &wt) in row.iter().enumerate() {
                if draw < wt {
                    pick = k;
                    break;
                }
                draw -= wt;
            }
            sent.push(words[pick]);
            prev = pick;
        }
        sentences.push(sent);
    }
    sentences
}

/// A dimension left centered-only because a speaker had zero variance there.
#[derive(Debug, Clone, PartialEq)]
pub struct CmvnWarning {
    pub speaker: String,
    pub dim: usize,
}

/// Per-speaker cepstral mean/variance normalization. Population (1/N)
/// variance is used so that recomputing the statistics after the transform
/// yields exactly mean 0 / variance 1. Zero-variance dimensions are centered
/// but not scaled, and flagged.
pub fn cmvn_per_speaker(corpus: &Corpus) -> Result<(Corpus, Vec<CmvnWarning>)> {
    let mut by_speaker: HashMap<&str, Vec<usize>> = HashMap::new();
    for (i, utt) in corpus.utterances.iter().enumerate() {
        by_speaker.entry(utt.speaker.as_str()).or_default().push(i);
    }
    for spk in corpus.speaker_ids() {
        if by_speaker.get(spk.as_str()).is_none_or(|v| v.is_empty()) {
            return Err(Error::invalid(format!("speaker {spk} has no utterances")));
        }
    }

    let mut out = corpus.clone();
    let mut warnings = Vec::new();
    let mut speakers: Vec<&str> = by_speaker.keys().copied().collect();
    speakers.sort_unstable();
    for spk in speakers {
        let utt_idxs = &by_speaker[spk];
        let dim = corpus.utterances[utt_idxs[0]].frames.cols();
        let mut count = 0usize;
        let mut mean = vec![0.0f64; dim];
        for &ui in utt_idxs {
            let frames = &corpus.utterances[ui].frames;
            for row in frames.iter_rows() {
                for (d, &v) in row.iter().enumerate() {
                    mean[d] += v;
                }
            }
            count += frames.rows();
        }
        for m in &mut mean {
            *m /= count as f64;
        }
        let mut var = vec![0.0f64; dim];
        for &ui in utt_idxs {
            for row in corpus.utterances[ui].frames.iter_rows() {
                for (d, &v) in row.iter().enumerate() {
                    let diff = v - mean[d];
                    var[d] += diff * diff;
                }
            }
        }
        for v in &mut var {
            *v /= count as f64;
        }
        let mut inv_std = vec![0.0f64; dim];
        for d in 0..dim {
            if var[d] > 1e-24 {
                inv_std[d] = 1.0 / var[d].sqrt();
            } else {
                inv_std[d] = 1.0;
                warnings.push(CmvnWarning { speaker: spk.to_string(), dim: d });
            }
        }
        for &ui in utt_idxs {
            let frames = &mut out.utterances[ui].frames;
            for r in 0..frames.rows() {
                let row = frames.row_mut(r);
                for (d, v) in row.iter_mut().enumerate() {
                    *v = (*v - mean[d]) * inv_std[d];
                }
            }
        }
    }
    Ok((out, warnings))
}

// ---------------------------------------------------------------------------
// Disk formats
// ---------------------------------------------------------------------------

const FRAMES_MAGIC: &[u8; 4] = b"FRM1";

/// Writes a frames file: 16-byte header (magic "FRM1", u32 rows, u32 cols,
/// 4 reserved zero bytes) followed by row-major little-endian f32 values.
pub fn save_frames(path: &Path, frames: &Matrix) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    w.write_all(FRAMES_MAGIC)?;
    util::write_u32_le(&mut w, frames.rows() as u32)?;
    util::write_u32_le(&mut w, frames.cols() as u32)?;
    w.write_all(&[0u8; 4])?;
    for &v in frames.data() {
        util::write_f32_le(&mut w, v as f32)?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_frames(path: &Path) -> Result<Matrix> {
    let mut r = BufReader::new(fs::File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != FRAMES_MAGIC {
        return Err(Error::Parse(format!("{}: bad frames magic", path.display())));
    }
    let rows = util::read_u32_le(&mut r)? as usize;
    let cols = util::read_u32_le(&mut r)? as usize;
    let mut reserved = [0u8; 4];
    r.read_exact(&mut reserved)?;
    let mut data = Vec::with_capacity(rows * cols);
    for _ in 0..rows * cols {
        data.push(util::read_f32_le(&mut r)? as f64);
    }
    Ok(Matrix::from_vec(rows, cols, data))
}

/// Writes a corpus directory: `manifest.tsv` plus one frames file per
/// utterance under `frames/`.
pub fn save_corpus(corpus: &Corpus, lexicon: &Lexicon, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir.join("frames"))?;
    let mut manifest = String::new();
    for utt in &corpus.utterances {
        let rel = format!("frames/{}.frm", utt.id);
        save_frames(&dir.join(&rel), &utt.frames)?;
        let words: Vec<&str> =
            utt.reference.iter().map(|&t| lexicon.tokens[t].surface.as_str()).collect();
        manifest.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\n",
            utt.id,
            utt.speaker,
            utt.condition,
            rel,
            words.join(" ")
        ));
    }
    fs::write(dir.join("manifest.tsv"), manifest)?;
    Ok(())
}

/// Loads a corpus directory written by [`save_corpus`]. Speaker profiles are
/// generator internals and are reconstructed as bare identifiers.
pub fn load_corpus(dir: &Path, lexicon: &Lexicon, name: &str, split: Split) -> Result<Corpus> {
    let file = fs::File::open(dir.join("manifest.tsv"))?;
    let surface_map = lexicon.surface_to_id();
    let mut utterances = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() < 4 {
            return Err(Error::Parse(format!("bad manifest line: {line:?}")));
        }
        let reference: Vec<usize> = if fields.len() >= 5 && !fields[4].is_empty() {
            fields[4]
                .split(' ')
                .map(|w| {
                    surface_map
                        .get(w)
                        .copied()
                        .ok_or_else(|| Error::Parse(format!("unknown surface {w:?}")))
                })
                .collect::<Result<_>>()?
        } else {
            Vec::new()
        };
        let frames = load_frames(&dir.join(fields[3]))?;
        utterances.push(Utterance {
            id: fields[0].to_string(),
            speaker: fields[1].to_string(),
            condition: fields[2]
                .parse()
                .map_err(|_| Error::Parse(format!("bad condition {:?}", fields[2])))?,
            frames,
            reference,
        });
    }
    let mut corpus = Corpus { name: name.to_string(), split, utterances, speakers: vec![] };
    corpus.speakers = corpus
        .speaker_ids()
        .iter()
        .map(|id| SpeakerProfile { id: id.clone(), offset: vec![], scale: vec![] })
        .collect();
    Ok(corpus)
}

/// Writes the lexicon as a small text file alongside corpus directories.
pub fn save_lexicon(lexicon: &Lexicon, path: &Path) -> Result<()> {
    let mut out = String::new();
    out.push_str(&format!(
        "LEXICON\t{}\t{}\t{}\t{}\n",
        lexicon.vocab_size(),
        lexicon.phones.len(),
        lexicon.silence_id,
        lexicon.emission_seed
    ));
    for p in &lexicon.phones {
        out.push_str(&format!("PHONE\t{}\t{}\n", p.symbol, p.class.tag()));
    }
    for t in &lexicon.tokens {
        let phones: Vec<String> = t.phones.iter().map(|p| p.to_string()).collect();
        out.push_str(&format!(
            "TOKEN\t{}\t{}\t{}\t{}\t{}\n",
            t.id,
            t.surface,
            phones.join(","),
            t.class.tag(),
            t.states
        ));
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn load_lexicon(path: &Path) -> Result<Lexicon> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| Error::Parse("empty lexicon file".into()))?;
    let h: Vec<&str> = header.split('\t').collect();
    if h.len() != 5 || h[0] != "LEXICON" {
        return Err(Error::Parse("bad lexicon header".into()));
    }
    let silence_id = util::parse_usize(h[3])?;
    let emission_seed =
        h[4].parse::<u64>().map_err(|_| Error::Parse("bad emission seed".into()))?;
    let mut phones = Vec::new();
    let mut tokens = Vec::new();
    for line in lines {
        let f: Vec<&str> = line.split('\t').collect();
        match f[0] {
            "PHONE" => {
                phones.push(Phone { symbol: f[1].to_string(), class: PhoneClass::from_tag(f[2])? })
            }
            "TOKEN" => {
                let phone_ids: Vec<usize> = f[3]
                    .split(',')
                    .map(util::parse_usize)
                    .collect::<Result<_>>()?;
                tokens.push(LexToken {
                    id: util::parse_usize(f[1])?,
                    surface: f[2].to_string(),
                    phones: phone_ids,
                    class: LexClass::from_tag(f[4])?,
                    states: util::parse_usize(f[5])?,
                });
            }
            other => return Err(Error::Parse(format!("bad lexicon line tag {other:?}"))),
        }
    }
    let lex = Lexicon::finish(tokens, phones, silence_id, emission_seed);
    lex.validate()?;
    Ok(lex)
}
