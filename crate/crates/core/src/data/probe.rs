//! Closed-form least-squares linear probes, used to check that a
//! generated dataset's targets are recoverable from its features.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::metrics::ccc;
use crate::model::Target;

use super::SubSequence;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProbeInput {
    Audio,
    Visual,
    Both,
}

/// Fits `y ~ X w + b` by least squares on every clip of `data` and
/// returns the in-sample CCC of the fit.
pub fn linear_probe_ccc(data: &[SubSequence], input: ProbeInput, target: Target) -> Result<f64> {
    let first = data
        .first()
        .ok_or_else(|| Error::InvalidArgument("probe needs data".into()))?;
    let width = match input {
        ProbeInput::Audio => first.audio.dim(),
        ProbeInput::Visual => first.visual.dim(),
        ProbeInput::Both => first.audio.dim() + first.visual.dim(),
    };
    let n: usize = data.iter().map(|s| s.clips()).sum();
    let mut x = DMatrix::<f64>::zeros(n, width + 1);
    let mut y = DVector::<f64>::zeros(n);
    let mut r = 0;
    for s in data {
        for c in 0..s.clips() {
            let a = s.audio.block().row(c);
            let v = s.visual.block().row(c);
            let feats: Vec<f64> = match input {
                ProbeInput::Audio => a.to_vec(),
                ProbeInput::Visual => v.to_vec(),
                ProbeInput::Both => a.iter().chain(v).copied().collect(),
            };
            for (j, f) in feats.iter().enumerate() {
                x[(r, j)] = *f;
            }
            x[(r, width)] = 1.0;
            y[r] = s.labels(target)[c];
            r += 1;
        }
    }
    let svd = x.clone().svd(true, true);
    let w = svd
        .solve(&y, 1e-10)
        .map_err(|e| Error::InvalidArgument(format!("least squares failed: {e}")))?;
    let fit = &x * w;
    Ok(ccc(fit.as_slice(), y.as_slice())?.rho_c)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Matrix;

    #[test]
    fn exact_linear_relation_is_recovered() {
        let a = Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0], [1.0, 1.0], [2.0, -1.0]]);
        let v = Matrix::filled(4, 1, 0.0);
        let val: Vec<f64> = (0..4).map(|r| 0.3 * a.get(r, 0) - 0.2 * a.get(r, 1) + 0.1).collect();
        let s = SubSequence::new("p", a, v, val, vec![0.0; 4]).unwrap();
        let r = linear_probe_ccc(&[s], ProbeInput::Audio, Target::Valence).unwrap();
        assert!((r - 1.0).abs() < 1e-12, "{r}");
    }
}
