//! Comparison fusion strategies: plain feature concatenation and vanilla
//! cross-attention, where each modality attends to the other one instead
//! of the joint representation.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::attention::{branch_backward, branch_forward, BranchWeights};
use crate::model::{
    finish_forward, head_backward, xavier_matrix, Dims, ForwardTrace, FusionModel, Head, HeadSpec,
    ModalityFeatures, ModelKind, ParamSlot,
};
use crate::numerics::Matrix;

/// Feature concatenation: the head sees `[X_a | X_v]` directly.
#[derive(Debug, Clone, PartialEq)]
pub struct ConcatParams {
    pub dims: Dims,
    pub head: Head,
}

impl ConcatParams {
    pub fn xavier(dims: Dims, head: HeadSpec, seed: u64) -> Result<Self> {
        Self::xavier_with(dims, head, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    pub(crate) fn xavier_with<R: Rng + ?Sized>(dims: Dims, head: HeadSpec, rng: &mut R) -> Result<Self> {
        dims.validate()?;
        Ok(ConcatParams {
            dims,
            head: Head::xavier(dims.d(), head, rng)?,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.dims.validate()?;
        self.head.validate()?;
        if self.head.input_dim() != self.dims.d() {
            return Err(Error::shape(
                "head input",
                (1, self.dims.d()),
                self.head.layers[0].weight.shape(),
            ));
        }
        Ok(())
    }
}

/// Raw (unclipped) concat predictions, `L x outputs`.
pub fn concat_forward(
    params: &ConcatParams,
    xa: &ModalityFeatures,
    xv: &ModalityFeatures,
) -> Result<Matrix> {
    Ok(params.forward(xa, xv, None)?.output)
}

impl FusionModel for ConcatParams {
    fn kind(&self) -> ModelKind {
        ModelKind::Concat
    }

    fn dims(&self) -> Dims {
        self.dims
    }

    fn head(&self) -> &Head {
        &self.head
    }

    fn forward(
        &self,
        xa: &ModalityFeatures,
        xv: &ModalityFeatures,
        mask: Option<&Matrix>,
    ) -> Result<ForwardTrace> {
        self.dims.check_inputs(xa, xv)?;
        let fused = xa.block().concat_cols(xv.block())?;
        finish_forward(&self.head, None, None, None, fused, mask)
    }

    fn backward(
        &self,
        _xa: &ModalityFeatures,
        _xv: &ModalityFeatures,
        trace: &ForwardTrace,
        d_output: &Matrix,
    ) -> Result<Vec<Matrix>> {
        Ok(head_backward(&self.head, trace, d_output)?.0)
    }

    fn params(&self) -> Vec<&Matrix> {
        self.head.params().collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Matrix> {
        self.head.params_mut().collect()
    }

    fn param_slots(&self) -> Vec<ParamSlot> {
        self.head.slots().collect()
    }
}

/// Vanilla cross-attention weights.
///
/// `C_a = tanh(X_a^T W_xa X_v / sqrt(d_v))`, `C_v = tanh(X_v^T W_xv X_a / sqrt(d_a))`;
/// the rest of the pipeline matches the joint model.
#[derive(Debug, Clone, PartialEq)]
pub struct VanillaCaParams {
    pub dims: Dims,
    /// `L x L`
    pub w_xa: Matrix,
    /// `L x L`
    pub w_xv: Matrix,
    /// `k x L`
    pub w_a: Matrix,
    /// `k x L`
    pub w_v: Matrix,
    /// `k x d_v`
    pub w_ca: Matrix,
    /// `k x d_a`
    pub w_cv: Matrix,
    /// `k x L`
    pub w_ha: Matrix,
    /// `k x L`
    pub w_hv: Matrix,
    pub head: Head,
}

pub(crate) const VCA_NAMES: [&str; 8] = [
    "W_xa", "W_xv", "W_a", "W_v", "W_ca", "W_cv", "W_ha", "W_hv",
];

impl VanillaCaParams {
    pub fn xavier(dims: Dims, head: HeadSpec, seed: u64) -> Result<Self> {
        Self::xavier_with(dims, head, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    pub(crate) fn xavier_with<R: Rng + ?Sized>(dims: Dims, head: HeadSpec, rng: &mut R) -> Result<Self> {
        dims.validate()?;
        let (l, k) = (dims.seq_len, dims.k);
        Ok(VanillaCaParams {
            dims,
            w_xa: xavier_matrix(l, l, rng),
            w_xv: xavier_matrix(l, l, rng),
            w_a: xavier_matrix(k, l, rng),
            w_v: xavier_matrix(k, l, rng),
            w_ca: xavier_matrix(k, dims.d_v, rng),
            w_cv: xavier_matrix(k, dims.d_a, rng),
            w_ha: xavier_matrix(k, l, rng),
            w_hv: xavier_matrix(k, l, rng),
            head: Head::xavier(dims.d(), head, rng)?,
        })
    }

    pub fn zero_attention(&mut self) {
        for m in self.params_mut().into_iter().take(8) {
            m.as_mut_slice().fill(0.0);
        }
    }

    fn attention(&self) -> [&Matrix; 8] {
        [
            &self.w_xa,
            &self.w_xv,
            &self.w_a,
            &self.w_v,
            &self.w_ca,
            &self.w_cv,
            &self.w_ha,
            &self.w_hv,
        ]
    }

    fn audio_weights(&self) -> BranchWeights<'_> {
        BranchWeights {
            w_corr: &self.w_xa,
            w_feat: &self.w_a,
            w_c: &self.w_ca,
            w_h: &self.w_ha,
        }
    }

    fn visual_weights(&self) -> BranchWeights<'_> {
        BranchWeights {
            w_corr: &self.w_xv,
            w_feat: &self.w_v,
            w_c: &self.w_cv,
            w_h: &self.w_hv,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.dims.validate()?;
        let (l, k) = (self.dims.seq_len, self.dims.k);
        let want = [
            (l, l),
            (l, l),
            (k, l),
            (k, l),
            (k, self.dims.d_v),
            (k, self.dims.d_a),
            (k, l),
            (k, l),
        ];
        for ((m, w), name) in self.attention().iter().zip(want).zip(VCA_NAMES) {
            if m.shape() != w {
                return Err(Error::shape(name, w, m.shape()));
            }
        }
        self.head.validate()?;
        if self.head.input_dim() != self.dims.d() {
            return Err(Error::shape(
                "head input",
                (1, self.dims.d()),
                self.head.layers[0].weight.shape(),
            ));
        }
        Ok(())
    }
}

/// Raw (unclipped) vanilla cross-attention predictions, `L x outputs`.
pub fn vanilla_ca_forward(
    params: &VanillaCaParams,
    xa: &ModalityFeatures,
    xv: &ModalityFeatures,
) -> Result<Matrix> {
    Ok(params.forward(xa, xv, None)?.output)
}

impl FusionModel for VanillaCaParams {
    fn kind(&self) -> ModelKind {
        ModelKind::VanillaCa
    }

    fn dims(&self) -> Dims {
        self.dims
    }

    fn head(&self) -> &Head {
        &self.head
    }

    fn forward(
        &self,
        xa: &ModalityFeatures,
        xv: &ModalityFeatures,
        mask: Option<&Matrix>,
    ) -> Result<ForwardTrace> {
        self.dims.check_inputs(xa, xv)?;
        let audio = branch_forward(xa.block(), xv.block(), self.audio_weights(), "audio")?;
        let visual = branch_forward(xv.block(), xa.block(), self.visual_weights(), "visual")?;
        let fused = visual.attended.concat_cols(&audio.attended)?;
        finish_forward(&self.head, None, Some(audio), Some(visual), fused, mask)
    }

    fn backward(
        &self,
        xa: &ModalityFeatures,
        xv: &ModalityFeatures,
        trace: &ForwardTrace,
        d_output: &Matrix,
    ) -> Result<Vec<Matrix>> {
        let (head_grads, d_fused) = head_backward(&self.head, trace, d_output)?;
        let dv = self.dims.d_v;
        let d_att_v = d_fused.slice_cols(0, dv);
        let d_att_a = d_fused.slice_cols(dv, self.dims.d());
        let (audio, visual) = match (&trace.audio, &trace.visual) {
            (Some(a), Some(v)) => (a, v),
            _ => {
                return Err(Error::InvalidArgument(
                    "trace was not produced by an attention model".into(),
                ))
            }
        };
        let ga = branch_backward(xa.block(), xv.block(), self.audio_weights(), audio, &d_att_a)?;
        let gv = branch_backward(xv.block(), xa.block(), self.visual_weights(), visual, &d_att_v)?;
        let mut grads = vec![
            ga.w_corr, gv.w_corr, ga.w_feat, gv.w_feat, ga.w_c, gv.w_c, ga.w_h, gv.w_h,
        ];
        grads.extend(head_grads);
        Ok(grads)
    }

    fn params(&self) -> Vec<&Matrix> {
        let mut v: Vec<&Matrix> = self.attention().into();
        v.extend(self.head.params());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Matrix> {
        let VanillaCaParams {
            w_xa,
            w_xv,
            w_a,
            w_v,
            w_ca,
            w_cv,
            w_ha,
            w_hv,
            head,
            ..
        } = self;
        let mut v: Vec<&mut Matrix> = vec![w_xa, w_xv, w_a, w_v, w_ca, w_cv, w_ha, w_hv];
        v.extend(head.params_mut());
        v
    }

    fn param_slots(&self) -> Vec<ParamSlot> {
        VCA_NAMES
            .iter()
            .map(|n| ParamSlot {
                name: n.to_string(),
                is_bias: false,
            })
            .chain(self.head.slots())
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{JcaParams, Modality};

    fn inputs(dims: Dims, seed: u64) -> (ModalityFeatures, ModalityFeatures) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (
            ModalityFeatures::new(Modality::Audio, Matrix::uniform(dims.seq_len, dims.d_a, 1.0, &mut rng))
                .unwrap(),
            ModalityFeatures::new(Modality::Visual, Matrix::uniform(dims.seq_len, dims.d_v, 1.0, &mut rng))
                .unwrap(),
        )
    }

    #[test]
    fn concat_zero_head_gives_bias() {
        let dims = Dims::new(3, 2, 2, 1).unwrap();
        let mut p = ConcatParams::xavier(dims, HeadSpec::linear(1), 0).unwrap();
        p.head.layers[0].weight = Matrix::zeros(4, 1);
        p.head.layers[0].bias = Matrix::from_rows(&[[0.25]]);
        let (xa, xv) = inputs(dims, 1);
        let y = concat_forward(&p, &xa, &xv).unwrap();
        assert!(y.as_slice().iter().all(|&v| v == 0.25));
    }

    #[test]
    fn concat_matches_zero_attention_jca_up_to_column_order() {
        let dims = Dims::new(4, 2, 3, 2).unwrap();
        let c = ConcatParams::xavier(dims, HeadSpec::linear(1), 7).unwrap();
        let mut j = JcaParams::xavier(dims, HeadSpec::linear(1), 7).unwrap();
        j.zero_attention();
        // concat weight rows are audio-first; the joint model's are visual-first
        let w = &c.head.layers[0].weight;
        let permuted = w.slice_cols(0, 1).transpose();
        let audio_rows = permuted.slice_cols(0, dims.d_a);
        let visual_rows = permuted.slice_cols(dims.d_a, dims.d());
        j.head.layers[0].weight = visual_rows.concat_cols(&audio_rows).unwrap().transpose();
        j.head.layers[0].bias = c.head.layers[0].bias.clone();
        let (xa, xv) = inputs(dims, 3);
        let yc = concat_forward(&c, &xa, &xv).unwrap();
        let yj = j.forward(&xa, &xv, None).unwrap().output;
        for (a, b) in yc.as_slice().iter().zip(yj.as_slice()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn vanilla_zero_weights_equals_concat() {
        let dims = Dims::new(4, 3, 2, 2).unwrap();
        let mut v = VanillaCaParams::xavier(dims, HeadSpec::linear(1), 1).unwrap();
        v.zero_attention();
        v.head.layers[0].weight = Matrix::zeros(dims.d(), 1);
        v.head.layers[0].bias = Matrix::from_rows(&[[-0.4]]);
        let mut c = ConcatParams::xavier(dims, HeadSpec::linear(1), 1).unwrap();
        c.head = v.head.clone();
        let (xa, xv) = inputs(dims, 2);
        assert_eq!(
            vanilla_ca_forward(&v, &xa, &xv).unwrap(),
            concat_forward(&c, &xa, &xv).unwrap()
        );
        let t = v.forward(&xa, &xv, None).unwrap();
        assert_eq!(t.fused, xv.block().concat_cols(xa.block()).unwrap());
    }

    #[test]
    fn vanilla_symmetric_inputs_give_equal_correlations() {
        let dims = Dims::new(3, 2, 2, 2).unwrap();
        let mut v = VanillaCaParams::xavier(dims, HeadSpec::linear(1), 4).unwrap();
        v.w_xv = v.w_xa.clone();
        let (xa, _) = inputs(dims, 5);
        let xv = ModalityFeatures::new(Modality::Visual, xa.block().clone()).unwrap();
        let t = v.forward(&xa, &xv, None).unwrap();
        assert_eq!(t.c_a().unwrap(), t.c_v().unwrap());
        assert_eq!(t.c_a().unwrap().shape(), (2, 2));
    }

    #[test]
    fn vanilla_correlation_shapes() {
        let dims = Dims::new(3, 4, 2, 2).unwrap();
        let v = VanillaCaParams::xavier(dims, HeadSpec::linear(1), 4).unwrap();
        v.validate().unwrap();
        let (xa, xv) = inputs(dims, 5);
        let t = v.forward(&xa, &xv, None).unwrap();
        assert_eq!(t.c_a().unwrap().shape(), (4, 2));
        assert_eq!(t.c_v().unwrap().shape(), (2, 4));
        assert_eq!(t.h_a().unwrap().shape(), (2, 4));
    }
}
