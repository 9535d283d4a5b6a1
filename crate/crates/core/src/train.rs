//! Joint optimization of the main and auxiliary objectives on one training
//! fold: batching with sampled negatives, Adam steps, a held-in validation
//! split and early stopping on validation AUPR.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::AssociationMatrix;
use crate::error::{Error, Result};
use crate::eval::aupr;
use crate::featurize::ViewVectors;
use crate::model::{
    loss_and_grad, loss_total, select_all_negatives, AuxContext, Hyper, Latents, ModelParams, ParamGrads,
    TowerInputs,
};
use crate::numerics::{finite_diff_grad, max_relative_error, Matrix};

// RNG stream ids derived from the run seed.
const STREAM_BATCHES: u64 = 3;
const STREAM_VALIDATION: u64 = 4;
const STREAM_VALIDATION_NEGATIVES: u64 = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub k: usize,
    pub alpha: f64,
    pub lambda: f64,
    pub beta: f64,
    pub learning_rate: f64,
    /// Pairs per batch, positives and sampled negatives together.
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    /// Sampled negatives per training positive.
    pub neg_ratio: f64,
    pub seed: u64,
    pub aux_enabled: bool,
    pub encoder_hidden: usize,
    /// Skip L2 normalization of the auxiliary latents.
    pub aux_raw: bool,
    /// Fraction of training positives held in for early stopping.
    pub validation_fraction: f64,
    /// Sampled validation negatives per validation positive.
    pub validation_neg_ratio: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            k: 64,
            alpha: 0.5,
            lambda: 0.5,
            beta: 0.5,
            learning_rate: 0.001,
            batch_size: 256,
            max_epochs: 200,
            patience: 10,
            neg_ratio: 5.0,
            seed: 0,
            aux_enabled: true,
            encoder_hidden: 128,
            aux_raw: false,
            validation_fraction: 0.1,
            validation_neg_ratio: 100.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning rate must be > 0, got {}", self.learning_rate));
        }
        if self.batch_size < 1 {
            return bad("batch size must be ≥ 1".into());
        }
        if self.patience < 1 {
            return bad("patience must be ≥ 1".into());
        }
        if !(self.neg_ratio >= 0.0 && self.neg_ratio.is_finite()) {
            return bad(format!("neg_ratio must be ≥ 0, got {}", self.neg_ratio));
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return bad(format!(
                "validation fraction must lie in (0, 1), got {}",
                self.validation_fraction
            ));
        }
        if !(self.validation_neg_ratio > 0.0 && self.validation_neg_ratio.is_finite()) {
            return bad(format!(
                "validation_neg_ratio must be > 0, got {}",
                self.validation_neg_ratio
            ));
        }
        self.hyper().validate()
    }

    pub fn hyper(&self) -> Hyper {
        Hyper {
            k: self.k,
            hidden: self.encoder_hidden,
            alpha: self.alpha,
            beta: self.beta,
            lambda: self.lambda,
            normalize_aux: !self.aux_raw,
        }
    }

    /// Training positives per batch so that positives plus their sampled
    /// negatives fit in `batch_size`.
    pub fn positives_per_batch(&self) -> usize {
        ((self.batch_size as f64 / (1.0 + self.neg_ratio)).floor() as usize).max(1)
    }
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Seeded split of `positives` into (train, validation); the validation side
/// gets `round(fraction · n)` pairs.
pub fn make_validation_split(
    positives: &[(usize, usize)],
    fraction: f64,
    seed: u64,
) -> Result<(Vec<(usize, usize)>, Vec<(usize, usize)>)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Config(format!("validation fraction must lie in (0, 1), got {fraction}")));
    }
    let n = positives.len();
    let n_val = (fraction * n as f64).round() as usize;
    if n_val == 0 || n_val >= n {
        return Err(Error::Config(format!(
            "{n} positives cannot be split {fraction} into two non-empty sides"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream_rng(seed, STREAM_VALIDATION));
    let (val_idx, train_idx) = order.split_at(n_val);
    let pick = |idx: &[usize]| {
        let mut v: Vec<(usize, usize)> = idx.iter().map(|&i| positives[i]).collect();
        v.sort_unstable();
        v
    };
    Ok((pick(train_idx), pick(val_idx)))
}

/// Draws `count` zero cells of `matrix` uniformly, with replacement.
fn sample_zeros(matrix: &AssociationMatrix, count: usize, rng: &mut ChaCha8Rng) -> Result<Vec<(usize, usize)>> {
    if count == 0 {
        return Ok(Vec::new());
    }
    let (n, m) = (matrix.num_drugs(), matrix.num_diseases());
    let zeros = matrix.count_zeros();
    if zeros == 0 {
        return Err(Error::Sampling("association matrix has no zero entries to sample".into()));
    }
    // Rejection is cheap while zeros dominate; otherwise index them.
    if zeros * 4 >= n * m {
        let mut out = Vec::with_capacity(count);
        while out.len() < count {
            let (i, j) = (rng.random_range(0..n), rng.random_range(0..m));
            if !matrix.get(i, j) {
                out.push((i, j));
            }
        }
        Ok(out)
    } else {
        let cells: Vec<(usize, usize)> = (0..n)
            .flat_map(|i| (0..m).map(move |j| (i, j)))
            .filter(|&(i, j)| !matrix.get(i, j))
            .collect();
        Ok((0..count).map(|_| cells[rng.random_range(0..cells.len())]).collect())
    }
}

/// `positives` labelled 1 followed by `⌈neg_ratio · |positives|⌉` zero
/// cells of `train_matrix` labelled 0.
pub fn sample_batch(
    train_matrix: &AssociationMatrix,
    positives: &[(usize, usize)],
    neg_ratio: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<(usize, usize, u8)>> {
    if !(neg_ratio >= 0.0 && neg_ratio.is_finite()) {
        return Err(Error::Config(format!("neg_ratio must be ≥ 0, got {neg_ratio}")));
    }
    let n_neg = (neg_ratio * positives.len() as f64).ceil() as usize;
    let mut batch: Vec<(usize, usize, u8)> = positives.iter().map(|&(i, j)| (i, j, 1)).collect();
    batch.extend(sample_zeros(train_matrix, n_neg, rng)?.into_iter().map(|(i, j)| (i, j, 0)));
    Ok(batch)
}

/// One epoch of batches: shuffled positives in chunks, each with fresh
/// negatives.
pub fn epoch_batches(
    sample_matrix: &AssociationMatrix,
    positives: &[(usize, usize)],
    config: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Vec<(usize, usize, u8)>>> {
    let mut order = positives.to_vec();
    order.shuffle(rng);
    order
        .chunks(config.positives_per_batch())
        .map(|chunk| sample_batch(sample_matrix, chunk, config.neg_ratio, rng))
        .collect()
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(learning_rate: f64, num_params: usize) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
        }
    }

    pub fn step(&mut self, params: &mut ModelParams, grads: &ParamGrads) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let mut offset = 0;
        for (p, g) in params.tensors_mut().into_iter().zip(grads.tensors()) {
            let n = p.len();
            let (m, v) = (&mut self.m[offset..offset + n], &mut self.v[offset..offset + n]);
            for (((w, &gi), mi), vi) in p.values_mut().iter_mut().zip(g.values()).zip(m).zip(v) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *w -= self.learning_rate * m_hat / (v_hat.sqrt() + self.eps);
            }
            offset += n;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean total loss over the epoch's batches.
    pub train_loss: f64,
    /// Mean `alpha`-weighted auxiliary part of `train_loss`.
    pub aux_loss: f64,
    pub val_aupr: f64,
}

#[derive(Debug, Clone)]
pub struct TrainState {
    /// Parameters of the best validation epoch (initial ones if none ran).
    pub params: ModelParams,
    /// Parameters after the last completed epoch.
    pub final_params: ModelParams,
    /// Completed epochs.
    pub epoch: usize,
    pub history: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    /// Encoder inputs used in training: the fold matrix without its
    /// validation positives.
    pub inputs: TowerInputs,
}

impl TrainState {
    pub fn best_aupr(&self) -> Option<f64> {
        self.best_epoch.map(|e| self.history[e - 1].val_aupr)
    }
}

/// Tab-separated `epoch, train_loss, aux_loss, val_aupr` lines.
pub fn format_log(history: &[EpochRecord]) -> String {
    let mut out = String::from("epoch\ttrain_loss\taux_loss\tval_aupr\n");
    for r in history {
        let _ = writeln!(out, "{}\t{:.6}\t{:.6}\t{:.6}", r.epoch, r.train_loss, r.aux_loss, r.val_aupr);
    }
    out
}

/// Trains on the positives of `fold_train` and returns the best snapshot by
/// validation AUPR.
///
/// A fraction of the fold's positives is held in for validation: removed
/// from the encoder inputs and from the training batches, and scored each
/// epoch against sampled zeros. Training negatives are drawn from zeros of
/// `fold_train`, so held-in positives are never used as negatives.
pub fn fit(
    fold_train: &AssociationMatrix,
    drug_sim: &Matrix,
    views: Option<&ViewVectors>,
    config: &TrainConfig,
) -> Result<TrainState> {
    config.validate()?;
    if config.aux_enabled != views.is_some() {
        return Err(Error::Config(
            "view vectors must be supplied exactly when the auxiliary task is enabled".into(),
        ));
    }
    let (n, m) = (fold_train.num_drugs(), fold_train.num_diseases());
    if drug_sim.shape() != (n, n) {
        return Err(Error::Dimension {
            op: "drug similarity",
            left: drug_sim.shape(),
            right: (n, n),
        });
    }

    let (train_pos, val_pos) = make_validation_split(&fold_train.positives(), config.validation_fraction, config.seed)?;
    let mut encoder_matrix = fold_train.clone();
    for &(i, j) in &val_pos {
        encoder_matrix.set(i, j, false);
    }
    let inputs = TowerInputs::new(&encoder_matrix);

    let n_val_neg = (config.validation_neg_ratio * val_pos.len() as f64).ceil() as usize;
    let val_neg = validation_negatives(fold_train, n_val_neg, config.seed)?;
    let mut val_pairs: Vec<(usize, usize)> = val_pos.clone();
    val_pairs.extend(&val_neg);
    let val_labels: Vec<u8> = (0..val_pairs.len()).map(|r| u8::from(r < val_pos.len())).collect();

    let negatives = if config.aux_enabled {
        select_all_negatives(drug_sim)?
    } else {
        Vec::new()
    };
    let aux = views.map(|v| AuxContext {
        views: v,
        negatives: &negatives,
    });

    let feat_dim = views.map(ViewVectors::dim);
    let mut params = ModelParams::init(n, m, feat_dim, config.hyper(), config.seed)?;
    let mut best = params.clone();
    let mut best_epoch = None;
    let mut best_aupr = f64::NEG_INFINITY;
    let mut history = Vec::new();
    let mut adam = Adam::new(config.learning_rate, params.num_params());
    let mut rng = stream_rng(config.seed, STREAM_BATCHES);
    let mut since_best = 0;

    for epoch in 1..=config.max_epochs {
        let batches = epoch_batches(fold_train, &train_pos, config, &mut rng)?;
        let (mut loss_sum, mut aux_sum) = (0.0, 0.0);
        for (b, batch) in batches.iter().enumerate() {
            let mut grads = params.zeros_like();
            let loss = loss_and_grad(batch, &params, &inputs, aux, Some(&mut grads))?;
            if !loss.total.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    batch: b,
                    loss: loss.total,
                });
            }
            adam.step(&mut params, &grads);
            loss_sum += loss.total;
            aux_sum += params.hyper.alpha * loss.aux;
        }
        if !params.is_finite() {
            return Err(Error::Divergence {
                epoch,
                batch: batches.len().saturating_sub(1),
                loss: f64::NAN,
            });
        }

        let latents = Latents::compute(&params, &inputs);
        let scores: Vec<f64> = val_pairs.iter().map(|&(i, j)| latents.score(i, j)).collect();
        let val_aupr = aupr(&scores, &val_labels)?;
        let nb = batches.len() as f64;
        history.push(EpochRecord {
            epoch,
            train_loss: loss_sum / nb,
            aux_loss: aux_sum / nb,
            val_aupr,
        });

        if val_aupr > best_aupr {
            best_aupr = val_aupr;
            best = params.clone();
            best_epoch = Some(epoch);
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= config.patience {
                break;
            }
        }
    }

    Ok(TrainState {
        params: best,
        final_params: params,
        epoch: history.len(),
        history,
        best_epoch,
        inputs,
    })
}

/// Distinct zero cells of `matrix`, `count` of them (or all if fewer).
fn validation_negatives(matrix: &AssociationMatrix, count: usize, seed: u64) -> Result<Vec<(usize, usize)>> {
    let zeros: Vec<(usize, usize)> = (0..matrix.num_drugs())
        .flat_map(|i| (0..matrix.num_diseases()).map(move |j| (i, j)))
        .filter(|&(i, j)| !matrix.get(i, j))
        .collect();
    if zeros.is_empty() {
        return Err(Error::Sampling("no zero entries available for validation negatives".into()));
    }
    let mut rng = stream_rng(seed, STREAM_VALIDATION_NEGATIVES);
    let mut picked: Vec<usize> = rand::seq::index::sample(&mut rng, zeros.len(), count.min(zeros.len())).into_vec();
    picked.sort_unstable();
    Ok(picked.into_iter().map(|r| zeros[r]).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckOptions {
    pub hyper: Hyper,
    pub seed: u64,
    pub eps: f64,
    /// Drops the auxiliary gradient from the shared encoder and adapters,
    /// a deliberate bug the check must catch.
    pub inject_fault: bool,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            hyper: Hyper {
                k: 3,
                hidden: 4,
                alpha: 0.5,
                beta: 0.5,
                lambda: 0.5,
                normalize_aux: true,
            },
            seed: 0,
            eps: 1e-5,
            inject_fault: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub num_params: usize,
}

/// Denominator floor for relative gradient errors; far below any gradient
/// magnitude on the toy problem.
pub const GRADCHECK_FLOOR: f64 = 1e-8;

/// Compares analytic and central-difference gradients of the total loss on
/// a seeded toy problem: 5 drugs, 4 diseases, 6-dimensional views.
pub fn gradient_check(opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let (n, m, f) = (5, 4, 6);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut assoc = AssociationMatrix::zeros(n, m);
    for (i, j) in [(0, 0), (0, 2), (1, 1), (2, 3), (3, 0), (3, 1), (4, 2)] {
        assoc.set(i, j, true);
    }
    let mut sim = Matrix::identity(n);
    for i in 0..n {
        for j in (i + 1)..n {
            let v = rng.random_range(0.0..1.0);
            sim.set(i, j, v);
            sim.set(j, i, v);
        }
    }
    let mut view = || Matrix::from_vec(n, f, (0..n * f).map(|_| rng.random_range(-1.0..1.0)).collect());
    let views = ViewVectors {
        smiles: view()?,
        inchi: view()?,
    };
    let negatives = select_all_negatives(&sim)?;
    let aux = Some(AuxContext {
        views: &views,
        negatives: &negatives,
    });
    let params = ModelParams::init(n, m, Some(f), opts.hyper.clone(), opts.seed)?;
    let inputs = TowerInputs::new(&assoc);
    let batch = [(0, 0, 1), (0, 1, 0), (1, 1, 1), (2, 0, 0), (3, 1, 1), (4, 3, 0), (2, 3, 1)];

    let mut grads = params.zeros_like();
    let used_aux = if opts.inject_fault { None } else { aux };
    loss_and_grad(&batch, &params, &inputs, used_aux, Some(&mut grads))?;
    let analytic = grads.flatten();

    let mut probe = params.clone();
    let numeric = finite_diff_grad(
        |flat: &[f64]| {
            probe.set_flat(flat);
            loss_total(&batch, &probe, &inputs, aux).unwrap_or(f64::NAN)
        },
        &params.flatten(),
        opts.eps,
    )?;
    let (max_rel_error, worst) = max_relative_error(&analytic, &numeric, GRADCHECK_FLOOR);
    Ok(GradCheckReport {
        max_rel_error,
        worst_param: param_name(&params, worst),
        num_params: analytic.len(),
    })
}

fn param_name(params: &ModelParams, mut index: usize) -> String {
    for (name, m) in params.named_tensors() {
        if index < m.len() {
            return format!("{name}[{},{}]", index / m.cols(), index % m.cols());
        }
        index -= m.len();
    }
    "?".into()
}
