//! Concordance correlation coefficient and the `1 - ccc` training loss.

use std::fmt;

use crate::data::SubSequence;
use crate::error::{Error, Result};
use crate::model::{FusionModel, Target};

/// Denominators below this are treated as degenerate.
pub const DEGENERATE_EPS: f64 = 1e-12;

/// Population statistics behind one CCC value.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CccStats {
    pub n: usize,
    pub mu_x: f64,
    pub mu_y: f64,
    pub var_x: f64,
    pub var_y: f64,
    pub cov_xy: f64,
    pub rho_c: f64,
    /// Set when the denominator fell below [`DEGENERATE_EPS`].
    pub degenerate: bool,
}

impl CccStats {
    pub fn denominator(&self) -> f64 {
        let dm = self.mu_x - self.mu_y;
        self.var_x + self.var_y + dm * dm
    }
}

/// CCC between predictions `x` and targets `y`.
///
/// A degenerate denominator yields `1` when both sides are the same
/// constant and `0` otherwise.
pub fn ccc(x: &[f64], y: &[f64]) -> Result<CccStats> {
    if x.len() != y.len() {
        return Err(Error::InvalidArgument(format!(
            "ccc length mismatch: {} vs {}",
            x.len(),
            y.len()
        )));
    }
    let n = x.len();
    if n < 2 {
        return Err(Error::InvalidArgument(format!("ccc needs n >= 2, got {n}")));
    }
    let nf = n as f64;
    let mu_x = x.iter().sum::<f64>() / nf;
    let mu_y = y.iter().sum::<f64>() / nf;
    let (mut var_x, mut var_y, mut cov_xy) = (0.0, 0.0, 0.0);
    for (&a, &b) in x.iter().zip(y) {
        let (da, db) = (a - mu_x, b - mu_y);
        var_x += da * da;
        var_y += db * db;
        cov_xy += da * db;
    }
    var_x /= nf;
    var_y /= nf;
    cov_xy /= nf;
    let dm = mu_x - mu_y;
    let denom = var_x + var_y + dm * dm;
    let degenerate = denom < DEGENERATE_EPS;
    let rho_c = if degenerate {
        if dm.abs() < DEGENERATE_EPS {
            1.0
        } else {
            0.0
        }
    } else {
        (2.0 * cov_xy / denom).clamp(-1.0, 1.0)
    };
    Ok(CccStats {
        n,
        mu_x,
        mu_y,
        var_x,
        var_y,
        cov_xy,
        rho_c,
        degenerate,
    })
}

pub fn ccc_loss(predictions: &[f64], targets: &[f64]) -> Result<f64> {
    Ok(1.0 - ccc(predictions, targets)?.rho_c)
}

/// Loss and its gradient with respect to every prediction. Degenerate
/// denominators are errors here.
pub fn ccc_loss_grad(predictions: &[f64], targets: &[f64]) -> Result<(f64, Vec<f64>)> {
    let stats = ccc(predictions, targets)?;
    if stats.degenerate {
        return Err(Error::DegenerateCcc {
            denominator: stats.denominator(),
            n: stats.n,
        });
    }
    let loss = ccc_loss(predictions, targets)?;
    let nf = stats.n as f64;
    let num = 2.0 * stats.cov_xy;
    let den = stats.denominator();
    let dm = stats.mu_x - stats.mu_y;
    let grad = predictions
        .iter()
        .zip(targets)
        .map(|(&x, &y)| {
            let d_num = 2.0 * (y - stats.mu_y) / nf;
            let d_den = 2.0 * (x - stats.mu_x) / nf + 2.0 * dm / nf;
            -(d_num * den - num * d_den) / (den * den)
        })
        .collect();
    Ok((loss, grad))
}

#[derive(Debug, Clone, PartialEq)]
pub struct CccEntry {
    pub target: Target,
    pub n: usize,
    pub rho_c: f64,
    pub degenerate: bool,
}

/// One CCC per predicted target over a whole split.
#[derive(Debug, Clone, PartialEq)]
pub struct CccReport {
    pub entries: Vec<CccEntry>,
}

impl CccReport {
    /// Mean CCC over the entries; the early-stopping criterion.
    pub fn mean_rho(&self) -> f64 {
        self.entries.iter().map(|e| e.rho_c).sum::<f64>() / self.entries.len() as f64
    }

    pub fn get(&self, target: Target) -> Option<&CccEntry> {
        self.entries.iter().find(|e| e.target == target)
    }

    /// `target=... n=... rho_c=... degenerate=...` lines.
    pub fn to_records(&self) -> String {
        let mut s = String::new();
        for e in &self.entries {
            s.push_str(&format!(
                "target={} n={} rho_c={:.17e} degenerate={}\n",
                e.target, e.n, e.rho_c, e.degenerate
            ));
        }
        s
    }
}

impl fmt::Display for CccReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for e in &self.entries {
            writeln!(f, "{:<8} n={:<7} ccc={:.6}{}", e.target.as_str(), e.n, e.rho_c,
                if e.degenerate { " (degenerate)" } else { "" })?;
        }
        Ok(())
    }
}

/// Targets a model with the given output target reports on.
pub fn targets_of(target: Target) -> Vec<Target> {
    match target {
        Target::Both => vec![Target::Valence, Target::Arousal],
        t => vec![t],
    }
}

/// Clipped predictions for every clip of every sub-sequence, in order,
/// one vector per output column.
pub fn predict_split<M: FusionModel + ?Sized>(
    model: &M,
    dataset: &[SubSequence],
) -> Result<Vec<Vec<f64>>> {
    let outputs = model.head().output_dim();
    let mut cols = vec![Vec::new(); outputs];
    for s in dataset {
        let y = model.predict(&s.audio, &s.visual)?;
        for r in 0..y.rows() {
            for (c, col) in cols.iter_mut().enumerate() {
                col.push(y.get(r, c));
            }
        }
    }
    Ok(cols)
}

/// CCC of clipped predictions against targets, over all clips of the
/// split concatenated in order.
pub fn evaluate_split<M: FusionModel + ?Sized>(
    model: &M,
    dataset: &[SubSequence],
    target: Target,
) -> Result<CccReport> {
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("cannot evaluate an empty split".into()));
    }
    let targets = targets_of(target);
    if model.head().output_dim() != targets.len() {
        return Err(Error::InvalidArgument(format!(
            "model has {} outputs, target {target} needs {}",
            model.head().output_dim(),
            targets.len()
        )));
    }
    let preds = predict_split(model, dataset)?;
    let mut entries = Vec::new();
    for (t, p) in targets.into_iter().zip(preds) {
        let y: Vec<f64> = dataset.iter().flat_map(|s| s.labels(t).iter().copied()).collect();
        let stats = ccc(&p, &y)?;
        entries.push(CccEntry {
            target: t,
            n: stats.n,
            rho_c: stats.rho_c,
            degenerate: stats.degenerate,
        });
    }
    Ok(CccReport { entries })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identities() {
        let x = [0.1, 0.5, -0.2];
        assert_eq!(ccc(&x, &x).unwrap().rho_c, 1.0);
        assert_eq!(ccc_loss(&x, &x).unwrap(), 0.0);

        let s = ccc(&[0.3, 0.3, 0.3], &[-1.0, 0.0, 1.0]).unwrap();
        assert_eq!(s.cov_xy, 0.0);
        assert_eq!(s.rho_c, 0.0);

        let x = [-1.0, 0.0, 1.0];
        let y = [-0.7, 0.3, 1.3];
        let r = ccc(&x, &y).unwrap().rho_c;
        let want = (4.0 / 3.0) / (4.0 / 3.0 + 0.09);
        assert!((r - want).abs() < 1e-12);
        assert!((r - 0.93677).abs() < 1e-5);
        assert!((ccc_loss(&x, &y).unwrap() - 0.06323).abs() < 1e-5);

        let neg = [1.0, 0.0, -1.0];
        assert!((ccc_loss(&x, &neg).unwrap() - 2.0).abs() < 1e-15);
    }

    #[test]
    fn degenerate_policy() {
        let s = ccc(&[0.2, 0.2], &[0.2, 0.2]).unwrap();
        assert!(s.degenerate);
        assert_eq!(s.rho_c, 1.0);
        let s = ccc(&[0.2, 0.2], &[0.2 + 1e-7, 0.2 + 1e-7]).unwrap();
        assert!(s.degenerate);
        assert_eq!(s.rho_c, 0.0);
        // constant but far apart: well-defined denominator, zero agreement
        let s = ccc(&[0.2, 0.2], &[0.5, 0.5]).unwrap();
        assert!(!s.degenerate);
        assert_eq!(s.rho_c, 0.0);
        assert!(matches!(
            ccc_loss_grad(&[0.0, 0.0], &[0.0, 0.0]),
            Err(Error::DegenerateCcc { .. })
        ));
    }

    #[test]
    fn input_errors() {
        assert!(ccc(&[1.0], &[1.0]).is_err());
        assert!(ccc(&[1.0, 2.0], &[1.0]).is_err());
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..20 {
            let x: Vec<f64> = (0..10).map(|_| rng.random_range(-1.0..1.0)).collect();
            let y: Vec<f64> = (0..10).map(|_| rng.random_range(-1.0..1.0)).collect();
            let (_, g) = ccc_loss_grad(&x, &y).unwrap();
            let h = 1e-6;
            for i in 0..x.len() {
                let mut xp = x.clone();
                xp[i] += h;
                let mut xm = x.clone();
                xm[i] -= h;
                let fd = (ccc_loss(&xp, &y).unwrap() - ccc_loss(&xm, &y).unwrap()) / (2.0 * h);
                let rel = (fd - g[i]).abs() / fd.abs().max(g[i].abs()).max(1e-8);
                assert!(rel < 1e-6, "rel {rel} at {i}");
            }
        }
    }

    fn pearson(x: &[f64], y: &[f64]) -> f64 {
        let s = ccc(x, y).unwrap();
        s.cov_xy / (s.var_x * s.var_y).sqrt()
    }

    proptest! {
        #[test]
        fn symmetric_bounded_attenuated(
            x in proptest::collection::vec(-3.0f64..3.0, 50),
            y in proptest::collection::vec(-3.0f64..3.0, 50),
        ) {
            let a = ccc(&x, &y).unwrap().rho_c;
            let b = ccc(&y, &x).unwrap().rho_c;
            prop_assert!((a - b).abs() <= 1e-15);
            prop_assert!(a.abs() <= 1.0);
            prop_assert!(a.abs() <= pearson(&x, &y).abs() + 1e-12);
        }
    }
}
