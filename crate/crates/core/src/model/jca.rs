use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::Matrix;

use super::attention::{branch_backward, branch_forward, joint_representation, BranchWeights};
use super::{
    finish_forward, head_backward, xavier_matrix, Dims, ForwardTrace, FusionModel, Head, HeadSpec,
    ModalityFeatures, ModelKind, ParamSlot,
};

/// Trainable state of the joint cross-attention model.
#[derive(Debug, Clone, PartialEq)]
pub struct JcaParams {
    pub dims: Dims,
    /// `L x L`
    pub w_ja: Matrix,
    /// `L x L`
    pub w_jv: Matrix,
    /// `k x L`
    pub w_a: Matrix,
    /// `k x L`
    pub w_v: Matrix,
    /// `k x d`
    pub w_ca: Matrix,
    /// `k x d`
    pub w_cv: Matrix,
    /// `k x L`
    pub w_ha: Matrix,
    /// `k x L`
    pub w_hv: Matrix,
    pub head: Head,
}

pub(crate) const JCA_NAMES: [&str; 8] = [
    "W_ja", "W_jv", "W_a", "W_v", "W_ca", "W_cv", "W_ha", "W_hv",
];

impl JcaParams {
    pub fn xavier(dims: Dims, head: HeadSpec, seed: u64) -> Result<Self> {
        Self::xavier_with(dims, head, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    pub(crate) fn xavier_with<R: Rng + ?Sized>(dims: Dims, head: HeadSpec, rng: &mut R) -> Result<Self> {
        dims.validate()?;
        let (l, k, d) = (dims.seq_len, dims.k, dims.d());
        Ok(JcaParams {
            dims,
            w_ja: xavier_matrix(l, l, rng),
            w_jv: xavier_matrix(l, l, rng),
            w_a: xavier_matrix(k, l, rng),
            w_v: xavier_matrix(k, l, rng),
            w_ca: xavier_matrix(k, d, rng),
            w_cv: xavier_matrix(k, d, rng),
            w_ha: xavier_matrix(k, l, rng),
            w_hv: xavier_matrix(k, l, rng),
            head: Head::xavier(d, head, rng)?,
        })
    }

    /// Sets every attention matrix to zero, leaving the head untouched.
    pub fn zero_attention(&mut self) {
        for m in self.attention_mut() {
            m.as_mut_slice().fill(0.0);
        }
    }

    fn attention_mut(&mut self) -> [&mut Matrix; 8] {
        [
            &mut self.w_ja,
            &mut self.w_jv,
            &mut self.w_a,
            &mut self.w_v,
            &mut self.w_ca,
            &mut self.w_cv,
            &mut self.w_ha,
            &mut self.w_hv,
        ]
    }

    fn attention(&self) -> [&Matrix; 8] {
        [
            &self.w_ja,
            &self.w_jv,
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
            w_corr: &self.w_ja,
            w_feat: &self.w_a,
            w_c: &self.w_ca,
            w_h: &self.w_ha,
        }
    }

    fn visual_weights(&self) -> BranchWeights<'_> {
        BranchWeights {
            w_corr: &self.w_jv,
            w_feat: &self.w_v,
            w_c: &self.w_cv,
            w_h: &self.w_hv,
        }
    }

    /// Checks every shape against `dims`.
    pub fn validate(&self) -> Result<()> {
        self.dims.validate()?;
        let (l, k, d) = (self.dims.seq_len, self.dims.k, self.dims.d());
        let want = [(l, l), (l, l), (k, l), (k, l), (k, d), (k, d), (k, l), (k, l)];
        for ((m, w), name) in self.attention().iter().zip(want).zip(JCA_NAMES) {
            if m.shape() != w {
                return Err(Error::shape(name, w, m.shape()));
            }
        }
        self.head.validate()?;
        if self.head.input_dim() != d {
            return Err(Error::shape("head input", (1, d), self.head.layers[0].weight.shape()));
        }
        Ok(())
    }
}

impl FusionModel for JcaParams {
    fn kind(&self) -> ModelKind {
        ModelKind::Jca
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
        let joint = joint_representation(xa, xv)?;
        let audio = branch_forward(xa.block(), &joint, self.audio_weights(), "audio")?;
        let visual = branch_forward(xv.block(), &joint, self.visual_weights(), "visual")?;
        // visual attended features first
        let fused = visual.attended.concat_cols(&audio.attended)?;
        finish_forward(&self.head, Some(joint), Some(audio), Some(visual), fused, mask)
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
        let d = self.dims.d();
        let d_att_v = d_fused.slice_cols(0, dv);
        let d_att_a = d_fused.slice_cols(dv, d);
        let (joint, audio, visual) = match (&trace.joint, &trace.audio, &trace.visual) {
            (Some(j), Some(a), Some(v)) => (j, a, v),
            _ => {
                return Err(Error::InvalidArgument(
                    "trace was not produced by the joint model".into(),
                ))
            }
        };
        let ga = branch_backward(xa.block(), joint, self.audio_weights(), audio, &d_att_a)?;
        let gv = branch_backward(xv.block(), joint, self.visual_weights(), visual, &d_att_v)?;
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
        let JcaParams {
            w_ja,
            w_jv,
            w_a,
            w_v,
            w_ca,
            w_cv,
            w_ha,
            w_hv,
            head,
            ..
        } = self;
        let mut v: Vec<&mut Matrix> = vec![w_ja, w_jv, w_a, w_v, w_ca, w_cv, w_ha, w_hv];
        v.extend(head.params_mut());
        v
    }

    fn param_slots(&self) -> Vec<ParamSlot> {
        JCA_NAMES
            .iter()
            .map(|n| ParamSlot {
                name: n.to_string(),
                is_bias: false,
            })
            .chain(self.head.slots())
            .collect()
    }
}
