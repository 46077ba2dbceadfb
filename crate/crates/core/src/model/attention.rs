//! One attention branch: correlation, attention maps, attended features.
//!
//! Features are clip-major (`L x d_m`). A branch attends modality `m`
//! against a context block (`L x c`): the joint representation for the
//! joint model, or the opposite modality for vanilla cross-attention.
//!
//! ```text
//! C_m     = tanh(X_m^T W_corr K / sqrt(c))      d_m x c
//! H_m     = relu(W_feat X_m + W_c C_m^T)        k x d_m
//! X_att,m = W_h^T H_m + X_m                     L x d_m
//! ```

use crate::error::{Error, Result};
use crate::numerics::Matrix;

use super::ModalityFeatures;

/// Forward intermediates of one branch, kept for the backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct BranchTrace {
    /// Correlation pre-activation, before tanh.
    pub corr_pre: Matrix,
    /// `C_m`.
    pub corr: Matrix,
    /// Attention pre-activation, before ReLU.
    pub att_pre: Matrix,
    /// `H_m`.
    pub att: Matrix,
    /// `X_att,m`.
    pub attended: Matrix,
}

/// Borrowed weights of one branch.
#[derive(Debug, Clone, Copy)]
pub struct BranchWeights<'a> {
    pub w_corr: &'a Matrix,
    pub w_feat: &'a Matrix,
    pub w_c: &'a Matrix,
    pub w_h: &'a Matrix,
}

/// Gradients for one branch, same layout as [`BranchWeights`].
#[derive(Debug, Clone, PartialEq)]
pub struct BranchGrads {
    pub w_corr: Matrix,
    pub w_feat: Matrix,
    pub w_c: Matrix,
    pub w_h: Matrix,
}

/// `J = [X_a | X_v]`, audio columns first.
pub fn joint_representation(xa: &ModalityFeatures, xv: &ModalityFeatures) -> Result<Matrix> {
    if xa.clips() != xv.clips() {
        return Err(Error::shape(
            "joint_representation",
            xa.block().shape(),
            xv.block().shape(),
        ));
    }
    xa.block().concat_cols(xv.block())
}

fn correlation_pre(x: &Matrix, context: &Matrix, w_corr: &Matrix, scale_dim: usize) -> Result<Matrix> {
    let l = x.rows();
    if w_corr.shape() != (l, l) {
        return Err(Error::shape("joint_correlation", (l, l), w_corr.shape()));
    }
    if context.rows() != l {
        return Err(Error::shape("joint_correlation", x.shape(), context.shape()));
    }
    if scale_dim == 0 {
        return Err(Error::InvalidArgument("correlation scale dimension is zero".into()));
    }
    let pre = x.transpose().matmul(w_corr)?.matmul(context)?;
    Ok(pre.scale(1.0 / (scale_dim as f64).sqrt()))
}

/// `tanh(X_m^T W_jm J / sqrt(d))`, shape `d_m x d`.
pub fn joint_correlation(
    xm: &ModalityFeatures,
    joint: &Matrix,
    w_jm: &Matrix,
    d: usize,
) -> Result<Matrix> {
    Ok(correlation_pre(xm.block(), joint, w_jm, d)?.tanh())
}

fn attention_pre(x: &Matrix, corr: &Matrix, w_feat: &Matrix, w_c: &Matrix) -> Result<Matrix> {
    let feat = w_feat.matmul(x)?;
    let cross = w_c.matmul(&corr.transpose())?;
    feat.add(&cross)
}

/// `relu(W_m X_m + W_cm C_m^T)`, shape `k x d_m`.
pub fn attention_maps(
    xm: &ModalityFeatures,
    corr: &Matrix,
    w_m: &Matrix,
    w_cm: &Matrix,
) -> Result<Matrix> {
    Ok(attention_pre(xm.block(), corr, w_m, w_cm)?.relu())
}

fn attended(x: &Matrix, att: &Matrix, w_h: &Matrix) -> Result<Matrix> {
    if w_h.rows() != att.rows() || w_h.cols() != x.rows() {
        return Err(Error::shape("attended_features", w_h.shape(), att.shape()));
    }
    w_h.transpose().matmul(att)?.add(x)
}

/// `W_hm^T H_m + X_m`, shape `L x d_m`.
pub fn attended_features(xm: &ModalityFeatures, att: &Matrix, w_hm: &Matrix) -> Result<Matrix> {
    attended(xm.block(), att, w_hm)
}

fn finite(m: Matrix, stage: &str) -> Result<Matrix> {
    if m.is_finite() {
        Ok(m)
    } else {
        Err(Error::NonFinite {
            stage: stage.to_string(),
        })
    }
}

pub(crate) fn branch_forward(
    x: &Matrix,
    context: &Matrix,
    w: BranchWeights<'_>,
    tag: &str,
) -> Result<BranchTrace> {
    let corr_pre = finite(
        correlation_pre(x, context, w.w_corr, context.cols())?,
        &format!("correlation_{tag}"),
    )?;
    let corr = corr_pre.tanh();
    let att_pre = finite(
        attention_pre(x, &corr, w.w_feat, w.w_c)?,
        &format!("attention_{tag}"),
    )?;
    let att = att_pre.relu();
    let attended = finite(attended(x, &att, w.w_h)?, &format!("attended_{tag}"))?;
    Ok(BranchTrace {
        corr_pre,
        corr,
        att_pre,
        att,
        attended,
    })
}

/// Backpropagates `d_attended` (L x d_m) through one branch. The inputs
/// and the context are constants.
pub(crate) fn branch_backward(
    x: &Matrix,
    context: &Matrix,
    w: BranchWeights<'_>,
    trace: &BranchTrace,
    d_attended: &Matrix,
) -> Result<BranchGrads> {
    // X_att = W_h^T H + X
    let w_h = trace.att.matmul(&d_attended.transpose())?;
    let d_att = w.w_h.matmul(d_attended)?;
    // H = relu(Q); derivative at exactly 0 taken as 0
    let mut d_pre = d_att;
    for (g, &q) in d_pre.as_mut_slice().iter_mut().zip(trace.att_pre.as_slice()) {
        if q <= 0.0 {
            *g = 0.0;
        }
    }
    // Q = W_feat X + W_c C^T
    let w_feat = d_pre.matmul(&x.transpose())?;
    let w_c = d_pre.matmul(&trace.corr)?;
    let d_corr = d_pre.transpose().matmul(w.w_c)?;
    // C = tanh(P), reusing the stored activation
    let mut d_corr_pre = d_corr;
    for (g, &c) in d_corr_pre.as_mut_slice().iter_mut().zip(trace.corr.as_slice()) {
        *g *= 1.0 - c * c;
    }
    // P = X^T W_corr K / sqrt(c)
    let inv_scale = 1.0 / (context.cols() as f64).sqrt();
    let w_corr = x
        .matmul(&d_corr_pre)?
        .matmul(&context.transpose())?
        .scale(inv_scale);
    Ok(BranchGrads {
        w_corr,
        w_feat,
        w_c,
        w_h,
    })
}
