//! Feed-forward softmax frame classifier: cross-entropy training with a
//! newbob learning-rate schedule, state priors and posterior to
//! scaled-likelihood conversion.
//!
//! Hidden layers use the logistic sigmoid; the output layer is a softmax
//! over HMM states. Input frames are spliced with a +/-c context window,
//! edge frames replicated. An optional affine transform on the final
//! pre-softmax activations carries output-transform adaptation.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng as _;

use crate::util::{self, mix_seed, rng_from_seed, Matrix};
use crate::{Error, Result};

/// Floor applied to posteriors before logs.
pub const POSTERIOR_FLOOR: f64 = 1e-12;

/// Network shape: D-dimensional frames, context half-window c, hidden sizes,
/// output size I (total HMM states). The spliced input size is D*(2c+1).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    pub frame_dim: usize,
    pub context: usize,
    pub hidden: Vec<usize>,
    pub output: usize,
}

impl Layout {
    pub fn input_size(&self) -> usize {
        self.frame_dim * (2 * self.context + 1)
    }

    /// All layer sizes, input first.
    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![self.input_size()];
        s.extend(&self.hidden);
        s.push(self.output);
        s
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden.is_empty() {
            return Err(Error::invalid("need at least one hidden layer"));
        }
        if self.frame_dim == 0 || self.output == 0 || self.hidden.contains(&0) {
            return Err(Error::invalid("zero-sized layer"));
        }
        Ok(())
    }
}

/// Affine transform on final pre-softmax activations (the oDLR parameters).
#[derive(Debug, Clone, PartialEq)]
pub struct OutputTransform {
    pub matrix: Matrix,
    pub bias: Vec<f64>,
}

impl OutputTransform {
    pub fn identity(n: usize) -> Self {
        let mut matrix = Matrix::zeros(n, n);
        for i in 0..n {
            matrix.set(i, i, 1.0);
        }
        OutputTransform { matrix, bias: vec![0.0; n] }
    }
}

/// The frame classifier. Immutable models may be shared across decoding
/// workers; training operates on private copies.
#[derive(Debug, Clone, PartialEq)]
pub struct AcousticModel {
    pub layout: Layout,
    /// weights[l] has one row per unit of layer l+1.
    pub weights: Vec<Matrix>,
    pub biases: Vec<Vec<f64>>,
    pub output_transform: Option<OutputTransform>,
}

/// Per-frame target distributions over the I states.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameTargets(pub Matrix);

impl FrameTargets {
    pub fn new(matrix: Matrix) -> Result<Self> {
        for (t, row) in matrix.iter_rows().enumerate() {
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > 1e-9 {
                return Err(Error::invalid(format!("target row {t} sums to {sum}")));
            }
            if row.iter().any(|&v| !(0.0..=1.0 + 1e-12).contains(&v)) {
                return Err(Error::invalid(format!("target row {t} outside [0,1]")));
            }
        }
        Ok(FrameTargets(matrix))
    }

    /// One-hot targets from a per-frame state alignment.
    pub fn one_hot(states: &[usize], n_states: usize) -> Self {
        let mut m = Matrix::zeros(states.len(), n_states);
        for (t, &s) in states.iter().enumerate() {
            m.set(t, s, 1.0);
        }
        FrameTargets(m)
    }

    pub fn rows(&self) -> usize {
        self.0.rows()
    }
}

/// Splices frames with a +/-context window, replicating edge frames.
pub fn splice(frames: &Matrix, context: usize) -> Matrix {
    let t_len = frames.rows();
    let d = frames.cols();
    let width = 2 * context + 1;
    let mut out = Matrix::zeros(t_len, d * width);
    for t in 0..t_len {
        for (w, off) in (-(context as isize)..=context as isize).enumerate() {
            let src = (t as isize + off).clamp(0, t_len as isize - 1) as usize;
            let row = frames.row(src);
            out.row_mut(t)[w * d..(w + 1) * d].copy_from_slice(row);
        }
    }
    out
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn softmax_row(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Initializes a model with fan-in scaled symmetric uniform weights.
pub fn init_model(seed: u64, layout: &Layout) -> Result<AcousticModel> {
    layout.validate()?;
    let sizes = layout.sizes();
    let mut rng = rng_from_seed(mix_seed(seed, &[0xA11]));
    let mut weights = Vec::with_capacity(sizes.len() - 1);
    let mut biases = Vec::with_capacity(sizes.len() - 1);
    for l in 0..sizes.len() - 1 {
        let (fan_in, fan_out) = (sizes[l], sizes[l + 1]);
        let bound = 1.0 / (fan_in as f64).sqrt();
        let mut w = Matrix::zeros(fan_out, fan_in);
        for v in w.data_mut() {
            *v = rng.gen_range(-bound..bound);
        }
        weights.push(w);
        biases.push(vec![0.0; fan_out]);
    }
    Ok(AcousticModel { layout: layout.clone(), weights, biases, output_transform: None })
}

struct ForwardTrace {
    /// Activations per layer: [input, hidden..., pre-transform output z].
    activations: Vec<Matrix>,
    /// Posteriors after optional transform and softmax.
    posteriors: Matrix,
}

impl AcousticModel {
    pub fn n_states(&self) -> usize {
        self.layout.output
    }

    fn forward_spliced(&self, input: &Matrix) -> ForwardTrace {
        let t_len = input.rows();
        let mut activations = vec![input.clone()];
        let n_layers = self.weights.len();
        for l in 0..n_layers {
            let prev = &activations[l];
            let w = &self.weights[l];
            let mut next = Matrix::zeros(t_len, w.rows());
            for t in 0..t_len {
                let x = prev.row(t);
                let out = next.row_mut(t);
                for (j, o) in out.iter_mut().enumerate() {
                    let wrow = w.row(j);
                    let mut acc = self.biases[l][j];
                    for (a, b) in wrow.iter().zip(x.iter()) {
                        acc += a * b;
                    }
                    *o = if l + 1 < n_layers { sigmoid(acc) } else { acc };
                }
            }
            activations.push(next);
        }
        let z = activations.last().unwrap();
        let mut posteriors = match &self.output_transform {
            None => z.clone(),
            Some(tr) => {
                let mut u = Matrix::zeros(t_len, z.cols());
                for t in 0..t_len {
                    let zr = z.row(t);
                    let ur = u.row_mut(t);
                    for (i, o) in ur.iter_mut().enumerate() {
                        let arow = tr.matrix.row(i);
                        let mut acc = tr.bias[i];
                        for (a, b) in arow.iter().zip(zr.iter()) {
                            acc += a * b;
                        }
                        *o = acc;
                    }
                }
                u
            }
        };
        for t in 0..t_len {
            softmax_row(posteriors.row_mut(t));
        }
        ForwardTrace { activations, posteriors }
    }

    /// Posterior matrix T x I for an utterance; rows are distributions.
    pub fn forward(&self, frames: &Matrix) -> Result<Matrix> {
        if frames.cols() != self.layout.frame_dim {
            return Err(Error::DimensionMismatch(format!(
                "frames have dim {}, model expects {}",
                frames.cols(),
                self.layout.frame_dim
            )));
        }
        let input = splice(frames, self.layout.context);
        Ok(self.forward_spliced(&input).posteriors)
    }
}

/// Gradients mirroring the model parameter shapes.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub weights: Vec<Matrix>,
    pub biases: Vec<Vec<f64>>,
    pub transform: Option<(Matrix, Vec<f64>)>,
}

impl Gradients {
    fn zeros_like(model: &AcousticModel) -> Self {
        Gradients {
            weights: model
                .weights
                .iter()
                .map(|w| Matrix::zeros(w.rows(), w.cols()))
                .collect(),
            biases: model.biases.iter().map(|b| vec![0.0; b.len()]).collect(),
            transform: model
                .output_transform
                .as_ref()
                .map(|t| (Matrix::zeros(t.matrix.rows(), t.matrix.cols()), vec![0.0; t.bias.len()])),
        }
    }

    pub fn norm(&self) -> f64 {
        let mut acc = 0.0;
        for w in &self.weights {
            acc += w.data().iter().map(|v| v * v).sum::<f64>();
        }
        for b in &self.biases {
            acc += b.iter().map(|v| v * v).sum::<f64>();
        }
        if let Some((m, b)) = &self.transform {
            acc += m.data().iter().map(|v| v * v).sum::<f64>();
            acc += b.iter().map(|v| v * v).sum::<f64>();
        }
        acc.sqrt()
    }

    /// Linear combination used by the blended-objective linearity check.
    pub fn axpy(&mut self, alpha: f64, other: &Gradients) {
        for (w, o) in self.weights.iter_mut().zip(other.weights.iter()) {
            for (v, ov) in w.data_mut().iter_mut().zip(o.data().iter()) {
                *v += alpha * ov;
            }
        }
        for (b, o) in self.biases.iter_mut().zip(other.biases.iter()) {
            for (v, ov) in b.iter_mut().zip(o.iter()) {
                *v += alpha * ov;
            }
        }
        if let (Some((m, b)), Some((om, ob))) = (self.transform.as_mut(), other.transform.as_ref())
        {
            for (v, ov) in m.data_mut().iter_mut().zip(om.data().iter()) {
                *v += alpha * ov;
            }
            for (v, ov) in b.iter_mut().zip(ob.iter()) {
                *v += alpha * ov;
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for w in &mut self.weights {
            for v in w.data_mut() {
                *v *= factor;
            }
        }
        for b in &mut self.biases {
            for v in b {
                *v *= factor;
            }
        }
        if let Some((m, b)) = self.transform.as_mut() {
            for v in m.data_mut() {
                *v *= factor;
            }
            for v in b {
                *v *= factor;
            }
        }
    }
}

/// Cross-entropy loss and exact backprop gradients on one utterance.
/// The loss is the negated mean over frames of sum_i target * log posterior,
/// minimized during training; posteriors are floored before the log.
pub fn ce_loss_and_grad(
    model: &AcousticModel,
    frames: &Matrix,
    targets: &FrameTargets,
) -> Result<(f64, Gradients)> {
    if frames.rows() != targets.rows() {
        return Err(Error::DimensionMismatch("frames vs targets".into()));
    }
    let input = splice(frames, model.layout.context);
    ce_grad_spliced(model, &input, &targets.0)
}

fn ce_grad_spliced(
    model: &AcousticModel,
    input: &Matrix,
    targets: &Matrix,
) -> Result<(f64, Gradients)> {
    let t_len = input.rows();
    if t_len == 0 {
        return Err(Error::invalid("empty batch"));
    }
    let trace = model.forward_spliced(input);
    let post = &trace.posteriors;
    if post.cols() != targets.cols() {
        return Err(Error::DimensionMismatch("posteriors vs targets".into()));
    }
    let scale = 1.0 / t_len as f64;
    let mut loss = 0.0;
    for t in 0..t_len {
        for (p, y) in post.row(t).iter().zip(targets.row(t).iter()) {
            if *y > 0.0 {
                loss -= y * p.max(POSTERIOR_FLOOR).ln();
            }
        }
    }
    loss *= scale;

    let mut grads = Gradients::zeros_like(model);
    // softmax + CE: d loss / d u = (posterior - target) / T
    let mut delta = Matrix::zeros(t_len, post.cols());
    for t in 0..t_len {
        for (i, d) in delta.row_mut(t).iter_mut().enumerate() {
            *d = (post.get(t, i) - targets.get(t, i)) * scale;
        }
    }

    // through the optional output transform: u = A z + c
    let z_index = trace.activations.len() - 1;
    let delta = if let Some(tr) = &model.output_transform {
        let (gm, gb) = grads.transform.as_mut().unwrap();
        let z = &trace.activations[z_index];
        let mut dz = Matrix::zeros(t_len, z.cols());
        for t in 0..t_len {
            let drow = delta.row(t);
            let zrow = z.row(t);
            for (i, &dv) in drow.iter().enumerate() {
                gb[i] += dv;
                let gmr = gm.row_mut(i);
                for (j, &zv) in zrow.iter().enumerate() {
                    gmr[j] += dv * zv;
                }
            }
            let dzrow = dz.row_mut(t);
            for (j, o) in dzrow.iter_mut().enumerate() {
                let mut acc = 0.0;
                for (i, &dv) in drow.iter().enumerate() {
                    acc += tr.matrix.get(i, j) * dv;
                }
                *o = acc;
            }
        }
        dz
    } else {
        delta
    };

    // backprop through the stack; delta holds d loss / d pre-activation of
    // the layer above, hidden layers apply the sigmoid derivative
    let n_layers = model.weights.len();
    let mut delta = delta;
    for l in (0..n_layers).rev() {
        let below = &trace.activations[l];
        for t in 0..t_len {
            let drow = delta.row(t);
            let xrow = below.row(t);
            for (j, &dv) in drow.iter().enumerate() {
                grads.biases[l][j] += dv;
                let grow = grads.weights[l].row_mut(j);
                for (k, &xv) in xrow.iter().enumerate() {
                    grow[k] += dv * xv;
                }
            }
        }
        if l > 0 {
            let mut next_delta = Matrix::zeros(t_len, model.weights[l].cols());
            for t in 0..t_len {
                let drow = delta.row(t);
                let hrow = trace.activations[l].row(t);
                let out = next_delta.row_mut(t);
                for (k, o) in out.iter_mut().enumerate() {
                    let mut acc = 0.0;
                    for (j, &dv) in drow.iter().enumerate() {
                        acc += model.weights[l].get(j, k) * dv;
                    }
                    *o = acc * hrow[k] * (1.0 - hrow[k]);
                }
            }
            delta = next_delta;
        }
    }
    Ok((loss, grads))
}

/// Training schedule; learning-rate halving and stopping are driven by
/// relative frame-accuracy improvements on a cross-validation set. The
/// halving/stopping rules only engage after `min_epochs` epochs, so short
/// runs can force full optimization (the same role as min_iters in common
/// newbob schedulers).
#[derive(Debug, Clone)]
pub struct TrainSchedule {
    pub initial_lr: f64,
    pub halve_threshold: f64,
    pub stop_threshold: f64,
    pub min_epochs: usize,
    pub max_epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        TrainSchedule {
            initial_lr: 0.008,
            halve_threshold: 0.005,
            stop_threshold: 0.001,
            min_epochs: 0,
            max_epochs: 20,
            batch_size: 64,
            seed: 0,
        }
    }
}

impl TrainSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.stop_threshold > 0.0 && self.stop_threshold <= self.halve_threshold) {
            return Err(Error::invalid("need 0 < stop_threshold <= halve_threshold"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be >= 1"));
        }
        Ok(())
    }
}

/// One epoch of the training log.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub cv_frame_accuracy: f64,
    pub train_loss: f64,
}

#[derive(Debug, Clone, Default)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
}

impl TrainLog {
    /// TSV rows `epoch lr cv-frame-acc train-loss`.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("epoch\tlr\tcv-frame-acc\ttrain-loss\n");
        for e in &self.epochs {
            out.push_str(&format!(
                "{}\t{:.6e}\t{:.6}\t{:.6}\n",
                e.epoch, e.lr, e.cv_frame_accuracy, e.train_loss
            ));
        }
        out
    }
}

/// Frame accuracy on a labelled set: fraction of frames whose posterior
/// argmax matches the target argmax.
pub fn frame_accuracy(model: &AcousticModel, set: &[(Matrix, FrameTargets)]) -> Result<f64> {
    let mut correct = 0usize;
    let mut total = 0usize;
    for (frames, targets) in set {
        let post = model.forward(frames)?;
        for t in 0..post.rows() {
            if argmax(post.row(t)) == argmax(targets.0.row(t)) {
                correct += 1;
            }
            total += 1;
        }
    }
    Ok(if total == 0 { 0.0 } else { correct as f64 / total as f64 })
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0usize;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Mini-batch gradient descent under the newbob schedule. Returns the model
/// from the best cross-validation epoch together with the per-epoch log.
/// Training is plain SGD; when `transform_only` is set, only the output
/// transform parameters receive updates.
pub fn train_with_options(
    model: &AcousticModel,
    dataset: &[(Matrix, FrameTargets)],
    schedule: &TrainSchedule,
    cv_set: &[(Matrix, FrameTargets)],
    transform_only: bool,
) -> Result<(AcousticModel, TrainLog)> {
    schedule.validate()?;
    if dataset.is_empty() || cv_set.is_empty() {
        return Err(Error::invalid("empty dataset or cv set"));
    }
    let mut log = TrainLog::default();
    if schedule.max_epochs == 0 {
        return Ok((model.clone(), log));
    }

    // flatten to frame-level samples, splicing each utterance once
    let mut inputs: Vec<Vec<f64>> = Vec::new();
    let mut targets: Vec<Vec<f64>> = Vec::new();
    for (frames, tg) in dataset {
        if frames.rows() != tg.rows() {
            return Err(Error::DimensionMismatch("frames vs targets".into()));
        }
        let spliced = splice(frames, model.layout.context);
        for t in 0..spliced.rows() {
            inputs.push(spliced.row(t).to_vec());
            targets.push(tg.0.row(t).to_vec());
        }
    }
    let n = inputs.len();
    let dim_in = inputs[0].len();
    let dim_out = targets[0].len();

    let mut current = model.clone();
    let mut best = current.clone();
    let mut best_acc = f64::NEG_INFINITY;
    let mut lr = schedule.initial_lr;
    let mut prev_acc: Option<f64> = None;

    for epoch in 1..=schedule.max_epochs {
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = rng_from_seed(mix_seed(schedule.seed, &[0xe9, epoch as u64]));
        // Fisher-Yates
        for i in (1..n).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }

        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(schedule.batch_size) {
            let mut bi = Matrix::zeros(chunk.len(), dim_in);
            let mut bt = Matrix::zeros(chunk.len(), dim_out);
            for (r, &idx) in chunk.iter().enumerate() {
                bi.row_mut(r).copy_from_slice(&inputs[idx]);
                bt.row_mut(r).copy_from_slice(&targets[idx]);
            }
            let (loss, grads) = ce_grad_spliced(&current, &bi, &bt)?;
            if !loss.is_finite() {
                return Err(Error::Diverged(format!("loss {loss} at epoch {epoch}")));
            }
            apply_sgd(&mut current, &grads, lr, transform_only);
            epoch_loss += loss;
            batches += 1;
        }
        let train_loss = epoch_loss / batches as f64;
        let cv_acc = frame_accuracy(&current, cv_set)?;
        log.epochs.push(EpochRecord { epoch, lr, cv_frame_accuracy: cv_acc, train_loss });

        if cv_acc >= best_acc {
            best_acc = cv_acc;
            best = current.clone();
        }
        if epoch > schedule.min_epochs {
            if let Some(prev) = prev_acc {
                let rel = (cv_acc - prev) / prev.abs().max(1e-12);
                if rel < schedule.stop_threshold {
                    break;
                }
                if rel < schedule.halve_threshold {
                    lr *= 0.5;
                }
            }
        }
        prev_acc = Some(cv_acc);
    }
    Ok((best, log))
}

/// [`train_with_options`] updating all parameters.
pub fn train(
    model: &AcousticModel,
    dataset: &[(Matrix, FrameTargets)],
    schedule: &TrainSchedule,
    cv_set: &[(Matrix, FrameTargets)],
) -> Result<(AcousticModel, TrainLog)> {
    train_with_options(model, dataset, schedule, cv_set, false)
}

pub(crate) fn apply_sgd(
    model: &mut AcousticModel,
    grads: &Gradients,
    lr: f64,
    transform_only: bool,
) {
    if !transform_only {
        for (w, g) in model.weights.iter_mut().zip(grads.weights.iter()) {
            for (v, gv) in w.data_mut().iter_mut().zip(g.data().iter()) {
                *v -= lr * gv;
            }
        }
        for (b, g) in model.biases.iter_mut().zip(grads.biases.iter()) {
            for (v, gv) in b.iter_mut().zip(g.iter()) {
                *v -= lr * gv;
            }
        }
    }
    if let (Some(tr), Some((gm, gb))) = (model.output_transform.as_mut(), grads.transform.as_ref())
    {
        for (v, gv) in tr.matrix.data_mut().iter_mut().zip(gm.data().iter()) {
            *v -= lr * gv;
        }
        for (v, gv) in tr.bias.iter_mut().zip(gb.iter()) {
            *v -= lr * gv;
        }
    }
}

/// State priors with flooring: floored states sit exactly at the floor and
/// the remaining mass is renormalized over the others.
#[derive(Debug, Clone, PartialEq)]
pub struct Priors {
    priors: Vec<f64>,
    pub floor: f64,
}

impl Priors {
    pub fn uniform(n: usize) -> Self {
        Priors { priors: vec![1.0 / n as f64; n], floor: 1e-8 }
    }

    /// Rebuilds priors from stored values (e.g. a priors file).
    pub fn from_values(values: Vec<f64>, floor: f64) -> Result<Self> {
        let sum: f64 = values.iter().sum();
        if (sum - 1.0).abs() > 1e-6 || values.iter().any(|&v| v <= 0.0) {
            return Err(Error::invalid("priors must be positive and sum to 1"));
        }
        Ok(Priors { priors: values, floor })
    }

    pub fn values(&self) -> &[f64] {
        &self.priors
    }

    pub fn log_prior(&self, state: usize) -> f64 {
        self.priors[state].ln()
    }
}

/// Relative state frequencies over forced alignments, floored and
/// renormalized.
pub fn estimate_priors(alignments: &[Vec<usize>], n_states: usize, floor: f64) -> Result<Priors> {
    if alignments.iter().map(|a| a.len()).sum::<usize>() == 0 {
        return Err(Error::invalid("no aligned frames for prior estimation"));
    }
    if floor <= 0.0 || floor * n_states as f64 >= 1.0 {
        return Err(Error::invalid("floor must be positive and < 1/I"));
    }
    let mut counts = vec![0.0f64; n_states];
    let mut total = 0.0;
    for a in alignments {
        for &s in a {
            if s >= n_states {
                return Err(Error::invalid(format!("state {s} out of range")));
            }
            counts[s] += 1.0;
            total += 1.0;
        }
    }
    let mut priors: Vec<f64> = counts.iter().map(|c| c / total).collect();
    // waterfill: pin floored states, rescale the rest until stable
    loop {
        let floored: Vec<bool> = priors.iter().map(|&p| p <= floor).collect();
        let pinned_mass = floored.iter().filter(|&&f| f).count() as f64 * floor;
        let free_mass: f64 =
            priors.iter().zip(&floored).filter(|(_, &f)| !f).map(|(p, _)| *p).sum();
        let scale = (1.0 - pinned_mass) / free_mass;
        let mut changed = false;
        for (p, &f) in priors.iter_mut().zip(&floored) {
            let next = if f { floor } else { *p * scale };
            if next < floor && !f {
                changed = true;
            }
            *p = next;
        }
        if !changed {
            break;
        }
    }
    Ok(Priors { priors, floor })
}

/// Scaled log-likelihoods: log posterior - log prior, the decoder's frame
/// scores.
pub fn scaled_loglik(posteriors: &Matrix, priors: &Priors) -> Matrix {
    let mut out = Matrix::zeros(posteriors.rows(), posteriors.cols());
    for t in 0..posteriors.rows() {
        let row = posteriors.row(t);
        let o = out.row_mut(t);
        for (i, v) in o.iter_mut().enumerate() {
            *v = row[i].max(POSTERIOR_FLOOR).ln() - priors.log_prior(i);
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Model file
// ---------------------------------------------------------------------------

/// Writes `MLP <n_sizes> <sizes...> <context>` followed by little-endian
/// f64 parameters (per layer: weights row-major, then biases) and an
/// optional `ODLR` section.
pub fn save_model(model: &AcousticModel, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    let sizes = model.layout.sizes();
    let size_strs: Vec<String> = sizes.iter().map(|s| s.to_string()).collect();
    writeln!(w, "MLP {} {} {}", sizes.len(), size_strs.join(" "), model.layout.context)?;
    for (wm, b) in model.weights.iter().zip(model.biases.iter()) {
        for &v in wm.data() {
            util::write_f64_le(&mut w, v)?;
        }
        for &v in b {
            util::write_f64_le(&mut w, v)?;
        }
    }
    if let Some(tr) = &model.output_transform {
        writeln!(w, "ODLR")?;
        for &v in tr.matrix.data() {
            util::write_f64_le(&mut w, v)?;
        }
        for &v in &tr.bias {
            util::write_f64_le(&mut w, v)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Loads a model file; the frame dimension is recovered from the input size
/// and context.
pub fn load_model(path: &Path) -> Result<AcousticModel> {
    let mut r = BufReader::new(fs::File::open(path)?);
    let mut header = String::new();
    r.read_line(&mut header)?;
    let h: Vec<&str> = header.split_whitespace().collect();
    if h.len() < 4 || h[0] != "MLP" {
        return Err(Error::Parse("bad model header".into()));
    }
    let n_sizes = util::parse_usize(h[1])?;
    if h.len() != n_sizes + 3 {
        return Err(Error::Parse("model header arity".into()));
    }
    let sizes: Vec<usize> =
        h[2..2 + n_sizes].iter().map(|s| util::parse_usize(s)).collect::<Result<_>>()?;
    let context = util::parse_usize(h[2 + n_sizes])?;
    let width = 2 * context + 1;
    if !sizes[0].is_multiple_of(width) {
        return Err(Error::Parse("input size incompatible with context".into()));
    }
    let layout = Layout {
        frame_dim: sizes[0] / width,
        context,
        hidden: sizes[1..sizes.len() - 1].to_vec(),
        output: *sizes.last().unwrap(),
    };
    let mut weights = Vec::new();
    let mut biases = Vec::new();
    for l in 0..sizes.len() - 1 {
        let (rows, cols) = (sizes[l + 1], sizes[l]);
        let mut m = Matrix::zeros(rows, cols);
        for v in m.data_mut() {
            *v = util::read_f64_le(&mut r)?;
        }
        let mut b = vec![0.0; rows];
        for v in &mut b {
            *v = util::read_f64_le(&mut r)?;
        }
        weights.push(m);
        biases.push(b);
    }
    let mut marker = String::new();
    let output_transform = if r.read_line(&mut marker)? > 0 && marker.trim() == "ODLR" {
        let n = layout.output;
        let mut m = Matrix::zeros(n, n);
        for v in m.data_mut() {
            *v = util::read_f64_le(&mut r)?;
        }
        let mut b = vec![0.0; n];
        for v in &mut b {
            *v = util::read_f64_le(&mut r)?;
        }
        Some(OutputTransform { matrix: m, bias: b })
    } else {
        None
    };
    Ok(AcousticModel { layout, weights, biases, output_transform })
}
