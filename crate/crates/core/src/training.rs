//! Optimisers, early stopping and the epoch loop.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::SubSequence;
use crate::error::{Error, Result};
use crate::gradients::loss_and_grads;
use crate::metrics::evaluate_split;
use crate::model::{Dims, FusionModel, HeadSpec, Model, ModelKind, Target};
use crate::numerics::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

impl OptimizerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            OptimizerKind::Adam => "adam",
            OptimizerKind::Sgd => "sgd",
        }
    }
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adam" => Ok(OptimizerKind::Adam),
            "sgd" => Ok(OptimizerKind::Sgd),
            o => Err(Error::InvalidArgument(format!("unknown optimizer {o:?} (adam|sgd)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub optimizer: OptimizerKind,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub momentum: f64,
    /// Decoupled; never applied to biases.
    pub weight_decay: f64,
    /// Sub-sequences per batch.
    pub batch_size: usize,
    /// Dropout probability on the fused features.
    pub dropout: f64,
    pub max_epochs: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub seed: u64,
    pub target: Target,
    /// Optional hidden width of the prediction head.
    pub head_hidden: Option<usize>,
    /// Keep the two correlation matrices at their initial values.
    pub freeze_correlation: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            optimizer: OptimizerKind::Adam,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            momentum: 0.8,
            weight_decay: 5e-4,
            batch_size: 64,
            dropout: 0.5,
            max_epochs: 50,
            patience: 5,
            seed: 0,
            target: Target::Valence,
            head_hidden: None,
            freeze_correlation: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be > 0, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout must lie in [0, 1), got {}", self.dropout));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if self.patience == 0 {
            return bad("patience must be >= 1".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("adam betas must lie in [0, 1)".into());
        }
        if self.weight_decay < 0.0 || self.momentum < 0.0 || self.eps <= 0.0 {
            return bad("weight_decay and momentum must be >= 0, eps > 0".into());
        }
        Ok(())
    }

    pub fn head_spec(&self) -> HeadSpec {
        HeadSpec {
            hidden: self.head_hidden,
            outputs: self.target.outputs(),
        }
    }
}

/// Per-parameter moment buffers. SGD uses `first` as its velocity.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub first: Vec<Matrix>,
    pub second: Vec<Matrix>,
}

impl OptimizerState {
    pub fn new(params: &[&Matrix]) -> Self {
        let zeros: Vec<Matrix> = params.iter().map(|p| Matrix::zeros(p.rows(), p.cols())).collect();
        OptimizerState {
            step: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }
}

fn check_step(params: &[&mut Matrix], grads: &[Matrix], decay: &[bool], state: &OptimizerState) -> Result<()> {
    if params.len() != grads.len() || decay.len() != params.len() || state.first.len() != params.len() {
        return Err(Error::InvalidArgument(format!(
            "{} parameters, {} gradients, {} decay flags, {} state slots",
            params.len(),
            grads.len(),
            decay.len(),
            state.first.len()
        )));
    }
    for (p, g) in params.iter().zip(grads) {
        if p.shape() != g.shape() {
            return Err(Error::shape("optimizer step", p.shape(), g.shape()));
        }
        if !g.is_finite() {
            return Err(Error::NonFinite {
                stage: "gradient".into(),
            });
        }
    }
    Ok(())
}

fn apply_decay(params: &mut [&mut Matrix], decay: &[bool], lr: f64, wd: f64) {
    if wd == 0.0 {
        return;
    }
    for (p, &d) in params.iter_mut().zip(decay) {
        if d {
            for v in p.as_mut_slice() {
                *v -= lr * wd * *v;
            }
        }
    }
}

/// One Adam step with bias correction, after decoupled weight decay on
/// the tensors flagged in `decay`.
pub fn adam_step(
    params: &mut [&mut Matrix],
    grads: &[Matrix],
    decay: &[bool],
    state: &mut OptimizerState,
    cfg: &TrainConfig,
) -> Result<()> {
    check_step(params, grads, decay, state)?;
    apply_decay(params, decay, cfg.lr, cfg.weight_decay);
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (i, p) in params.iter_mut().enumerate() {
        let g = grads[i].as_slice();
        let m = state.first[i].as_mut_slice();
        let v = state.second[i].as_mut_slice();
        for (j, w) in p.as_mut_slice().iter_mut().enumerate() {
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g[j];
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g[j] * g[j];
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            *w -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

/// One SGD step with momentum: `v = μ v + g; θ -= lr v`.
pub fn sgd_step(
    params: &mut [&mut Matrix],
    grads: &[Matrix],
    decay: &[bool],
    state: &mut OptimizerState,
    cfg: &TrainConfig,
) -> Result<()> {
    check_step(params, grads, decay, state)?;
    apply_decay(params, decay, cfg.lr, cfg.weight_decay);
    state.step += 1;
    for (i, p) in params.iter_mut().enumerate() {
        let g = grads[i].as_slice();
        let vel = state.first[i].as_mut_slice();
        for (j, w) in p.as_mut_slice().iter_mut().enumerate() {
            vel[j] = cfg.momentum * vel[j] + g[j];
            *w -= cfg.lr * vel[j];
        }
    }
    Ok(())
}

/// Patience-based early stopping on a metric to maximise.
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopping {
    patience: usize,
    best: f64,
    best_epoch: usize,
    since_best: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping {
            patience,
            best: f64::NEG_INFINITY,
            best_epoch: 0,
            since_best: 0,
        }
    }

    /// Records an epoch's metric. Returns `(improved, stop)`.
    pub fn update(&mut self, epoch: usize, metric: f64) -> (bool, bool) {
        if metric > self.best {
            self.best = metric;
            self.best_epoch = epoch;
            self.since_best = 0;
            (true, false)
        } else {
            self.since_best += 1;
            (false, self.since_best >= self.patience)
        }
    }

    pub fn best(&self) -> f64 {
        self.best
    }

    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub train_ccc: f64,
    pub val_ccc: f64,
}

impl EpochRecord {
    pub fn to_line(&self) -> String {
        format!(
            "epoch={} train_loss={:.17e} train_ccc={:.17e} val_ccc={:.17e}",
            self.epoch, self.train_loss, self.train_ccc, self.val_ccc
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_ccc: f64,
}

impl TrainHistory {
    pub fn to_log(&self) -> String {
        self.epochs.iter().map(|e| e.to_line() + "\n").collect()
    }
}

pub struct TrainOutcome {
    pub best: Model,
    pub history: TrainHistory,
}

/// Inverted-dropout mask: each entry is `0` with probability `p`, else
/// `1 / (1 - p)`.
pub fn dropout_mask<R: Rng + ?Sized>(rows: usize, cols: usize, p: f64, rng: &mut R) -> Matrix {
    let keep = 1.0 / (1.0 - p);
    let mut m = Matrix::zeros(rows, cols);
    for v in m.as_mut_slice() {
        *v = if rng.random::<f64>() < p { 0.0 } else { keep };
    }
    m
}

/// Trains from a fresh Xavier initialisation.
pub fn train(
    kind: ModelKind,
    dims: Dims,
    train_set: &[SubSequence],
    val_set: &[SubSequence],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    let model = Model::xavier(kind, dims, cfg.head_spec(), cfg.seed)?;
    train_from(model, train_set, val_set, cfg, |_, _| Ok(()))
}

/// Trains `model`, calling `on_epoch` after every epoch with the record
/// and the current parameters. Returns the best-validation parameters.
pub fn train_from(
    mut model: Model,
    train_set: &[SubSequence],
    val_set: &[SubSequence],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord, &Model) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::InvalidArgument("training and validation splits must be non-empty".into()));
    }
    let dims = model.dims();
    for s in train_set.iter().chain(val_set) {
        dims.check_inputs(&s.audio, &s.visual)?;
    }
    if model.head().output_dim() != cfg.target.outputs() {
        return Err(Error::InvalidArgument(format!(
            "model head has {} outputs, target {} needs {}",
            model.head().output_dim(),
            cfg.target,
            cfg.target.outputs()
        )));
    }
    let slots = model.param_slots();
    let decay: Vec<bool> = slots.iter().map(|s| !s.is_bias).collect();
    let frozen: Vec<bool> = (0..slots.len())
        .map(|i| cfg.freeze_correlation && model.kind() != ModelKind::Concat && i < 2)
        .collect();
    let mut state = OptimizerState::new(&model.params());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(7);
    let mut order: Vec<SubSequence> = train_set.to_vec();
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut best = model.clone();
    let mut epochs = Vec::new();

    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0;
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let masks: Option<Vec<Matrix>> = (cfg.dropout > 0.0).then(|| {
                batch
                    .iter()
                    .map(|_| dropout_mask(dims.seq_len, dims.d(), cfg.dropout, &mut rng))
                    .collect()
            });
            let mut g = loss_and_grads(&model, batch, cfg.target, masks.as_deref())?;
            if !g.loss.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    batch: b,
                    loss: g.loss,
                });
            }
            for (gi, &f) in g.grads.iter_mut().zip(&frozen) {
                if f {
                    gi.as_mut_slice().fill(0.0);
                }
            }
            let mut params = model.params_mut();
            let frozen_decay: Vec<bool> = decay.iter().zip(&frozen).map(|(&d, &f)| d && !f).collect();
            match cfg.optimizer {
                OptimizerKind::Adam => adam_step(&mut params, &g.grads, &frozen_decay, &mut state, cfg)?,
                OptimizerKind::Sgd => sgd_step(&mut params, &g.grads, &frozen_decay, &mut state, cfg)?,
            }
            loss_sum += g.loss;
            batches += 1;
        }
        let train_ccc = evaluate_split(&model, train_set, cfg.target)?.mean_rho();
        let val_ccc = evaluate_split(&model, val_set, cfg.target)?.mean_rho();
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / batches as f64,
            train_ccc,
            val_ccc,
        };
        log::info!("{}", record.to_line());
        let (improved, stop) = stopper.update(epoch, val_ccc);
        if improved {
            best = model.clone();
        }
        on_epoch(&record, &model)?;
        epochs.push(record);
        if stop {
            break;
        }
    }
    Ok(TrainOutcome {
        best,
        history: TrainHistory {
            epochs,
            best_epoch: stopper.best_epoch(),
            best_val_ccc: stopper.best(),
        },
    })
}
