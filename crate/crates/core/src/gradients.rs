//! Exact gradients of the batch loss and a finite-difference verifier.
//!
//! The batch loss is `1 - ccc` over every clip of every sub-sequence in
//! the batch, on raw (unclipped) predictions. With a two-output head it is
//! the mean of the two per-target losses. Dropout masks are constants.

use std::fmt;

use crate::data::SubSequence;
use crate::error::{Error, Result};
use crate::metrics::{ccc_loss_grad, targets_of};
use crate::model::{Dims, FusionModel, ModelKind, Target};
use crate::numerics::Matrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const DEFAULT_STEP: f64 = 1e-6;
pub const DEFAULT_TOL: f64 = 1e-4;
/// ReLU pre-activations closer to zero than this count as kinks.
pub const KINK_MARGIN: f64 = 1e-3;

/// One gradient per trainable tensor, in the model's parameter order.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet {
    pub loss: f64,
    pub names: Vec<String>,
    pub grads: Vec<Matrix>,
}

impl GradientSet {
    pub fn get(&self, name: &str) -> Option<&Matrix> {
        self.names.iter().position(|n| n == name).map(|i| &self.grads[i])
    }

    pub fn is_finite(&self) -> bool {
        self.loss.is_finite() && self.grads.iter().all(Matrix::is_finite)
    }
}

fn check_batch(batch: &[SubSequence], masks: Option<&[Matrix]>) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    if let Some(m) = masks {
        if m.len() != batch.len() {
            return Err(Error::InvalidArgument(format!(
                "{} dropout masks for {} sub-sequences",
                m.len(),
                batch.len()
            )));
        }
    }
    Ok(())
}

fn check_outputs<M: FusionModel + ?Sized>(model: &M, target: Target) -> Result<()> {
    if model.head().output_dim() != target.outputs() {
        return Err(Error::InvalidArgument(format!(
            "model has {} outputs but target {target} needs {}",
            model.head().output_dim(),
            target.outputs()
        )));
    }
    Ok(())
}

/// Loss and `d loss / d output` for each sub-sequence, from raw outputs.
fn loss_from_outputs(
    outputs: &[Matrix],
    batch: &[SubSequence],
    target: Target,
) -> Result<(f64, Vec<Matrix>)> {
    let targets = targets_of(target);
    let weight = 1.0 / targets.len() as f64;
    let mut loss = 0.0;
    let mut d_out: Vec<Matrix> = outputs.iter().map(|o| Matrix::zeros(o.rows(), o.cols())).collect();
    for (col, t) in targets.into_iter().enumerate() {
        let pred: Vec<f64> = outputs
            .iter()
            .flat_map(|o| (0..o.rows()).map(move |r| o.get(r, col)))
            .collect();
        let truth: Vec<f64> = batch.iter().flat_map(|s| s.labels(t).iter().copied()).collect();
        let (l, g) = ccc_loss_grad(&pred, &truth)?;
        if weight == 1.0 {
            loss = l;
        } else {
            loss += weight * l;
        }
        let mut i = 0;
        for d in d_out.iter_mut() {
            for r in 0..d.rows() {
                d.set(r, col, weight * g[i]);
                i += 1;
            }
        }
    }
    Ok((loss, d_out))
}

/// Batch loss only.
pub fn batch_loss<M: FusionModel + ?Sized>(
    model: &M,
    batch: &[SubSequence],
    target: Target,
    masks: Option<&[Matrix]>,
) -> Result<f64> {
    check_batch(batch, masks)?;
    check_outputs(model, target)?;
    let outputs = batch
        .iter()
        .enumerate()
        .map(|(i, s)| Ok(model.forward(&s.audio, &s.visual, masks.map(|m| &m[i]))?.output))
        .collect::<Result<Vec<_>>>()?;
    Ok(loss_from_outputs(&outputs, batch, target)?.0)
}

/// Loss and exact gradients for every trainable tensor.
pub fn loss_and_grads<M: FusionModel + ?Sized>(
    model: &M,
    batch: &[SubSequence],
    target: Target,
    masks: Option<&[Matrix]>,
) -> Result<GradientSet> {
    check_batch(batch, masks)?;
    check_outputs(model, target)?;
    let traces = batch
        .iter()
        .enumerate()
        .map(|(i, s)| model.forward(&s.audio, &s.visual, masks.map(|m| &m[i])))
        .collect::<Result<Vec<_>>>()?;
    let outputs: Vec<Matrix> = traces.iter().map(|t| t.output.clone()).collect();
    let (loss, d_out) = loss_from_outputs(&outputs, batch, target)?;
    let mut grads: Vec<Matrix> = model
        .params()
        .iter()
        .map(|p| Matrix::zeros(p.rows(), p.cols()))
        .collect();
    for ((s, trace), d) in batch.iter().zip(&traces).zip(&d_out) {
        let g = model.backward(&s.audio, &s.visual, trace, d)?;
        for (acc, gi) in grads.iter_mut().zip(&g) {
            acc.add_assign(gi)?;
        }
    }
    Ok(GradientSet {
        loss,
        names: model.param_slots().into_iter().map(|s| s.name).collect(),
        grads,
    })
}

/// Central differences `(f(θ+h) - f(θ-h)) / 2h` for every scalar parameter.
pub fn finite_diff_grads<M: FusionModel + Clone>(
    model: &M,
    batch: &[SubSequence],
    target: Target,
    masks: Option<&[Matrix]>,
    step: f64,
) -> Result<GradientSet> {
    if !(step > 0.0) {
        return Err(Error::InvalidArgument(format!("step must be positive, got {step}")));
    }
    let loss = batch_loss(model, batch, target, masks)?;
    let mut work = model.clone();
    let shapes: Vec<(usize, usize)> = model.params().iter().map(|p| p.shape()).collect();
    let mut grads = Vec::with_capacity(shapes.len());
    for (p, &(rows, cols)) in shapes.iter().enumerate() {
        let mut g = Matrix::zeros(rows, cols);
        for e in 0..rows * cols {
            let orig = work.params()[p].as_slice()[e];
            work.params_mut()[p].as_mut_slice()[e] = orig + step;
            let plus = batch_loss(&work, batch, target, masks)?;
            work.params_mut()[p].as_mut_slice()[e] = orig - step;
            let minus = batch_loss(&work, batch, target, masks)?;
            work.params_mut()[p].as_mut_slice()[e] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::NonFinite {
                    stage: format!("finite difference of parameter {p}, entry {e}"),
                });
            }
            g.as_mut_slice()[e] = (plus - minus) / (2.0 * step);
        }
        grads.push(g);
    }
    Ok(GradientSet {
        loss,
        names: model.param_slots().into_iter().map(|s| s.name).collect(),
        grads,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckStatus {
    Pass,
    Fail,
    /// Disagreement attributable to a ReLU input sitting at (or within
    /// [`KINK_MARGIN`] of) zero, where the loss is not differentiable.
    Kink,
}

impl CheckStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            CheckStatus::Pass => "pass",
            CheckStatus::Fail => "fail",
            CheckStatus::Kink => "kink",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel: f64,
    pub max_abs: f64,
    pub status: CheckStatus,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub tol: f64,
    pub step: f64,
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    /// True iff no parameter failed. Kink-flagged parameters do not fail
    /// the check but are listed by [`GradCheckReport::kinked`].
    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.status != CheckStatus::Fail)
    }

    pub fn failures(&self) -> Vec<&str> {
        self.names_with(CheckStatus::Fail)
    }

    pub fn kinked(&self) -> Vec<&str> {
        self.names_with(CheckStatus::Kink)
    }

    fn names_with(&self, s: CheckStatus) -> Vec<&str> {
        self.params
            .iter()
            .filter(|p| p.status == s)
            .map(|p| p.name.as_str())
            .collect()
    }

    pub fn max_rel(&self) -> f64 {
        self.params.iter().fold(0.0, |m, p| m.max(p.max_rel))
    }

    /// One `param=... max_rel=... max_abs=... status=...` line per parameter.
    pub fn to_records(&self) -> String {
        self.params
            .iter()
            .map(|p| {
                format!(
                    "param={} max_rel={:.6e} max_abs={:.6e} status={}\n",
                    p.name,
                    p.max_rel,
                    p.max_abs,
                    p.status.as_str()
                )
            })
            .collect()
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let w = self.params.iter().map(|p| p.name.len()).max().unwrap_or(5).max(9);
        writeln!(f, "{:<w$}  {:>12}  {:>12}  status", "parameter", "max_rel", "max_abs")?;
        for p in &self.params {
            writeln!(
                f,
                "{:<w$}  {:>12.4e}  {:>12.4e}  {}",
                p.name,
                p.max_rel,
                p.max_abs,
                p.status.as_str()
            )?;
        }
        write!(
            f,
            "tol={:e} step={:e} result={}",
            self.tol,
            self.step,
            if self.passed() { "PASS" } else { "FAIL" }
        )
    }
}

/// `|g - ĝ| / max(|g|, |ĝ|, 1e-8)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Which parameters lie upstream of a near-zero ReLU input anywhere in
/// the batch.
pub fn kink_exposure<M: FusionModel + ?Sized>(
    model: &M,
    batch: &[SubSequence],
    masks: Option<&[Matrix]>,
) -> Result<Vec<bool>> {
    let n = model.params().len();
    let mut exposed = vec![false; n];
    let attention = model.kind() != ModelKind::Concat;
    let n_att = if attention { 8 } else { 0 };
    let hidden = model.head().layers.len() > 1;
    for (i, s) in batch.iter().enumerate() {
        let t = model.forward(&s.audio, &s.visual, masks.map(|m| &m[i]))?;
        let near = |m: &Matrix| m.as_slice().iter().any(|v| v.abs() < KINK_MARGIN);
        if let Some(a) = &t.audio {
            if near(&a.att_pre) {
                for j in [0, 2, 4] {
                    exposed[j] = true;
                }
            }
        }
        if let Some(v) = &t.visual {
            if near(&v.att_pre) {
                for j in [1, 3, 5] {
                    exposed[j] = true;
                }
            }
        }
        if hidden && t.head.pre[..t.head.pre.len() - 1].iter().any(near) {
            for e in exposed.iter_mut().take(n_att + 2) {
                *e = true;
            }
        }
    }
    Ok(exposed)
}

/// Seeded random batch with features in `[-1, 1]` and targets in
/// `[-0.9, 0.9]`, for gradient checks.
pub fn seeded_batch(dims: Dims, n: usize, seed: u64) -> Result<Vec<SubSequence>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            SubSequence::new(
                format!("b{i}"),
                Matrix::uniform(dims.seq_len, dims.d_a, 1.0, &mut rng),
                Matrix::uniform(dims.seq_len, dims.d_v, 1.0, &mut rng),
                (0..dims.seq_len).map(|_| rng.random_range(-0.9..0.9)).collect(),
                (0..dims.seq_len).map(|_| rng.random_range(-0.9..0.9)).collect(),
            )
        })
        .collect()
}

/// Builds the report from two gradient sets.
pub fn compare(
    analytic: &GradientSet,
    numeric: &GradientSet,
    exposed: &[bool],
    tol: f64,
    step: f64,
) -> GradCheckReport {
    let params = analytic
        .names
        .iter()
        .enumerate()
        .map(|(i, name)| {
            let (mut max_rel, mut max_abs) = (0.0f64, 0.0f64);
            for (&a, &b) in analytic.grads[i].as_slice().iter().zip(numeric.grads[i].as_slice()) {
                max_rel = max_rel.max(relative_error(a, b));
                max_abs = max_abs.max((a - b).abs());
            }
            let status = if max_rel <= tol {
                CheckStatus::Pass
            } else if exposed.get(i).copied().unwrap_or(false) {
                CheckStatus::Kink
            } else {
                CheckStatus::Fail
            };
            ParamCheck {
                name: name.clone(),
                max_rel,
                max_abs,
                status,
            }
        })
        .collect();
    GradCheckReport { tol, step, params }
}

/// Compares [`loss_and_grads`] against [`finite_diff_grads`] with the
/// given step.
pub fn grad_check_with_step<M: FusionModel + Clone>(
    model: &M,
    batch: &[SubSequence],
    target: Target,
    masks: Option<&[Matrix]>,
    tol: f64,
    step: f64,
) -> Result<GradCheckReport> {
    if !(tol > 0.0) {
        return Err(Error::InvalidArgument(format!("tolerance must be positive, got {tol}")));
    }
    let analytic = loss_and_grads(model, batch, target, masks)?;
    let numeric = finite_diff_grads(model, batch, target, masks, step)?;
    let exposed = kink_exposure(model, batch, masks)?;
    Ok(compare(&analytic, &numeric, &exposed, tol, step))
}

/// [`grad_check_with_step`] at [`DEFAULT_STEP`].
pub fn grad_check<M: FusionModel + Clone>(
    model: &M,
    batch: &[SubSequence],
    target: Target,
    masks: Option<&[Matrix]>,
    tol: f64,
) -> Result<GradCheckReport> {
    grad_check_with_step(model, batch, target, masks, tol, DEFAULT_STEP)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Dims, HeadSpec, Model};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn batch(dims: Dims, n: usize, seed: u64) -> Vec<SubSequence> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                SubSequence::new(
                    format!("b{i}"),
                    Matrix::uniform(dims.seq_len, dims.d_a, 1.0, &mut rng),
                    Matrix::uniform(dims.seq_len, dims.d_v, 1.0, &mut rng),
                    (0..dims.seq_len).map(|_| rng.random_range(-0.9..0.9)).collect(),
                    (0..dims.seq_len).map(|_| rng.random_range(-0.9..0.9)).collect(),
                )
                .unwrap()
            })
            .collect()
    }

    #[test]
    fn degenerate_batch_is_an_error() {
        let dims = Dims::new(2, 1, 1, 1).unwrap();
        let mut m = Model::xavier(ModelKind::Jca, dims, HeadSpec::linear(1), 0).unwrap();
        for p in m.params_mut() {
            p.as_mut_slice().fill(0.0);
        }
        let b = vec![SubSequence::new(
            "z",
            Matrix::zeros(2, 1),
            Matrix::zeros(2, 1),
            vec![0.0, 0.0],
            vec![0.0, 0.0],
        )
        .unwrap()];
        assert!(matches!(
            loss_and_grads(&m, &b, Target::Valence, None),
            Err(Error::DegenerateCcc { .. })
        ));
        assert!(loss_and_grads(&m, &[], Target::Valence, None).is_err());
    }

    #[test]
    fn loss_equals_metric_on_same_predictions() {
        let dims = Dims::new(3, 2, 2, 2).unwrap();
        let m = Model::xavier(ModelKind::Jca, dims, HeadSpec::linear(1), 1).unwrap();
        let b = batch(dims, 3, 2);
        let g = loss_and_grads(&m, &b, Target::Arousal, None).unwrap();
        let pred: Vec<f64> = b
            .iter()
            .flat_map(|s| m.forward(&s.audio, &s.visual, None).unwrap().output.into_vec())
            .collect();
        let y: Vec<f64> = b.iter().flat_map(|s| s.arousal.clone()).collect();
        assert_eq!(g.loss, crate::metrics::ccc_loss(&pred, &y).unwrap());
    }

    #[test]
    fn head_bias_gradient_matches_finite_difference() {
        let dims = Dims::new(4, 2, 3, 2).unwrap();
        let m = Model::xavier(ModelKind::Jca, dims, HeadSpec::linear(1), 3).unwrap();
        let b = batch(dims, 1, 4);
        let g = loss_and_grads(&m, &b, Target::Valence, None).unwrap();
        let fd = finite_diff_grads(&m, &b, Target::Valence, None, 1e-6).unwrap();
        let a = g.get("head.0.bias").unwrap().get(0, 0);
        let n = fd.get("head.0.bias").unwrap().get(0, 0);
        assert!(relative_error(a, n) < 1e-6 || (a.abs() < 1e-9 && n.abs() < 1e-9), "{a} {n}");
    }

    #[test]
    fn fd_matches_quadratic_toy() {
        // loss in a single scalar head weight w on one fixed feature column;
        // check the differencing itself against a closed-form quadratic.
        let f = |t: f64| 3.0 * t * t;
        for theta in [-1.3, 0.2, 2.5] {
            let h = 1e-6;
            let fd = (f(theta + h) - f(theta - h)) / (2.0 * h);
            let exact = 6.0 * theta;
            assert!(relative_error(fd, exact) < 1e-8);
        }
    }

    #[test]
    fn step_halving_is_stable() {
        let dims = Dims::new(3, 2, 2, 2).unwrap();
        let m = Model::xavier(ModelKind::Concat, dims, HeadSpec::linear(1), 6).unwrap();
        let b = batch(dims, 2, 7);
        let a = finite_diff_grads(&m, &b, Target::Valence, None, 1e-5).unwrap();
        let c = finite_diff_grads(&m, &b, Target::Valence, None, 5e-6).unwrap();
        for (x, y) in a.grads.iter().zip(&c.grads) {
            for (p, q) in x.as_slice().iter().zip(y.as_slice()) {
                assert!((p - q).abs() < 1e-7, "{p} {q}");
            }
        }
    }

    #[test]
    fn unused_head_weight_has_zero_gradient() {
        let dims = Dims::new(3, 2, 2, 1).unwrap();
        let m = Model::xavier(ModelKind::Concat, dims, HeadSpec::linear(1), 6).unwrap();
        let mut b = batch(dims, 2, 8);
        for s in &mut b {
            let mut a = s.audio.block().clone();
            for r in 0..a.rows() {
                a.set(r, 1, 0.0);
            }
            s.audio = crate::model::ModalityFeatures::audio(a).unwrap();
        }
        let fd = finite_diff_grads(&m, &b, Target::Valence, None, 1e-6).unwrap();
        assert!(fd.grads[0].get(1, 0).abs() < 1e-9);
    }

    #[test]
    fn all_kinds_pass_with_hidden_head_and_two_outputs() {
        let dims = Dims::new(3, 3, 2, 2).unwrap();
        for kind in ModelKind::ALL {
            for (spec, target) in [
                (HeadSpec::linear(1), Target::Valence),
                (HeadSpec { hidden: Some(3), outputs: 2 }, Target::Both),
            ] {
                let m = Model::xavier(kind, dims, spec, 11).unwrap();
                let b = batch(dims, 3, 12);
                let r = grad_check(&m, &b, target, None, DEFAULT_TOL).unwrap();
                assert!(r.passed(), "{kind} {target}\n{r}");
            }
        }
    }

    #[test]
    fn dropout_masks_are_constants() {
        let dims = Dims::new(3, 2, 2, 2).unwrap();
        let m = Model::xavier(ModelKind::Jca, dims, HeadSpec::linear(1), 13).unwrap();
        let b = batch(dims, 2, 14);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let masks: Vec<Matrix> = (0..2)
            .map(|_| {
                let mut mk = Matrix::zeros(3, 4);
                for v in mk.as_mut_slice() {
                    *v = if rng.random::<f64>() < 0.5 { 0.0 } else { 2.0 };
                }
                mk
            })
            .collect();
        let r = grad_check(&m, &b, Target::Valence, Some(&masks), DEFAULT_TOL).unwrap();
        assert!(r.passed(), "{r}");
    }

    #[test]
    fn corrupted_gradient_is_named() {
        let dims = Dims::new(3, 3, 3, 2).unwrap();
        let m = Model::xavier(ModelKind::Jca, dims, HeadSpec::linear(1), 1).unwrap();
        let b = batch(dims, 2, 2);
        let mut g = loss_and_grads(&m, &b, Target::Valence, None).unwrap();
        let fd = finite_diff_grads(&m, &b, Target::Valence, None, DEFAULT_STEP).unwrap();
        let idx = g.names.iter().position(|n| n == "W_ca").unwrap();
        g.grads[idx].as_mut_slice()[0] += 0.1;
        let r = compare(&g, &fd, &vec![false; g.names.len()], DEFAULT_TOL, DEFAULT_STEP);
        assert!(!r.passed());
        assert_eq!(r.failures(), vec!["W_ca"]);
        let names: Vec<&str> = r.params.iter().map(|p| p.name.as_str()).collect();
        let mut dedup = names.clone();
        dedup.sort();
        dedup.dedup();
        assert_eq!(dedup.len(), names.len());
    }

    #[test]
    fn exact_relu_kink_is_flagged_not_failed() {
        // all-ones inputs and a W_a row chosen so that the first attention
        // pre-activation of the audio branch is exactly zero
        let dims = Dims::new(2, 1, 1, 1).unwrap();
        let mut m = Model::xavier(ModelKind::Jca, dims, HeadSpec::linear(1), 0).unwrap();
        if let Model::Jca(p) = &mut m {
            p.w_ca.as_mut_slice().fill(0.0);
            p.w_a = Matrix::from_rows(&[[1.0, -1.0]]);
            p.w_ha = Matrix::from_rows(&[[0.7, -0.4]]);
        }
        let b = vec![SubSequence::new(
            "k",
            Matrix::column(&[0.5, 0.5]),
            Matrix::column(&[0.2, -0.3]),
            vec![0.1, -0.2],
            vec![0.0, 0.0],
        )
        .unwrap()];
        let t = m.forward(&b[0].audio, &b[0].visual, None).unwrap();
        assert_eq!(t.audio.as_ref().unwrap().att_pre.get(0, 0), 0.0);
        let r = grad_check(&m, &b, Target::Valence, None, DEFAULT_TOL).unwrap();
        assert!(r.passed(), "{r}");
        assert!(r.failures().is_empty());
        assert!(!r.kinked().is_empty(), "{r}");
        assert!(r.kinked().iter().all(|n| ["W_ja", "W_a", "W_ca"].contains(n)), "{r}");
    }

    #[test]
    fn deterministic() {
        let dims = Dims::new(3, 2, 2, 2).unwrap();
        let m = Model::xavier(ModelKind::VanillaCa, dims, HeadSpec::linear(1), 2).unwrap();
        let b = batch(dims, 2, 3);
        assert_eq!(
            loss_and_grads(&m, &b, Target::Valence, None).unwrap(),
            loss_and_grads(&m, &b, Target::Valence, None).unwrap()
        );
    }
}
