//! Fusion models: the joint cross-attention model and the shared pieces
//! (dimensions, feature blocks, prediction head, forward traces) that the
//! baselines reuse.

pub mod attention;
pub mod io;
mod jca;

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::baselines::{ConcatParams, VanillaCaParams};
use crate::error::{Error, Result};
use crate::numerics::Matrix;

pub use attention::{BranchTrace, BranchWeights};
pub use jca::JcaParams;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Modality {
    Audio,
    Visual,
}

/// Clip-major feature block (`L x d_m`) for one modality.
#[derive(Debug, Clone, PartialEq)]
pub struct ModalityFeatures {
    modality: Modality,
    block: Matrix,
}

impl ModalityFeatures {
    pub fn new(modality: Modality, block: Matrix) -> Result<Self> {
        if block.rows() == 0 || block.cols() == 0 {
            return Err(Error::InvalidArgument(format!(
                "{modality:?} features must be non-empty, got {}x{}",
                block.rows(),
                block.cols()
            )));
        }
        if !block.is_finite() {
            return Err(Error::NonFinite {
                stage: format!("{modality:?} input features"),
            });
        }
        Ok(ModalityFeatures { modality, block })
    }

    pub fn audio(block: Matrix) -> Result<Self> {
        Self::new(Modality::Audio, block)
    }

    pub fn visual(block: Matrix) -> Result<Self> {
        Self::new(Modality::Visual, block)
    }

    pub fn modality(&self) -> Modality {
        self.modality
    }

    pub fn block(&self) -> &Matrix {
        &self.block
    }

    pub fn clips(&self) -> usize {
        self.block.rows()
    }

    pub fn dim(&self) -> usize {
        self.block.cols()
    }
}

/// Model dimensions. `d = d_a + d_v` is derived.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Dims {
    /// Clips per sub-sequence (`L`).
    pub seq_len: usize,
    pub d_a: usize,
    pub d_v: usize,
    /// Attention hidden size.
    pub k: usize,
}

impl Dims {
    pub fn new(seq_len: usize, d_a: usize, d_v: usize, k: usize) -> Result<Self> {
        let dims = Dims { seq_len, d_a, d_v, k };
        dims.validate()?;
        Ok(dims)
    }

    pub fn d(&self) -> usize {
        self.d_a + self.d_v
    }

    pub fn validate(&self) -> Result<()> {
        if self.seq_len == 0 || self.d_a == 0 || self.d_v == 0 || self.k == 0 {
            return Err(Error::InvalidArgument(format!(
                "all dimensions must be positive: {self:?}"
            )));
        }
        Ok(())
    }

    pub(crate) fn check_inputs(&self, xa: &ModalityFeatures, xv: &ModalityFeatures) -> Result<()> {
        if xa.modality() != Modality::Audio || xv.modality() != Modality::Visual {
            return Err(Error::InvalidArgument(
                "expected audio features first, visual second".into(),
            ));
        }
        if xa.block().shape() != (self.seq_len, self.d_a) {
            return Err(Error::shape(
                "audio input",
                (self.seq_len, self.d_a),
                xa.block().shape(),
            ));
        }
        if xv.block().shape() != (self.seq_len, self.d_v) {
            return Err(Error::shape(
                "visual input",
                (self.seq_len, self.d_v),
                xv.block().shape(),
            ));
        }
        Ok(())
    }
}

impl fmt::Display for Dims {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "L={} d_a={} d_v={} k={}",
            self.seq_len, self.d_a, self.d_v, self.k
        )
    }
}

/// Which emotion dimension(s) a model predicts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Target {
    Valence,
    Arousal,
    /// Two-output head: column 0 valence, column 1 arousal.
    Both,
}

impl Target {
    pub fn outputs(self) -> usize {
        match self {
            Target::Both => 2,
            _ => 1,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Target::Valence => "valence",
            Target::Arousal => "arousal",
            Target::Both => "both",
        }
    }
}

impl fmt::Display for Target {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Target {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "valence" => Ok(Target::Valence),
            "arousal" => Ok(Target::Arousal),
            "both" => Ok(Target::Both),
            other => Err(Error::InvalidArgument(format!(
                "unknown target {other:?} (valence|arousal|both)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ModelKind {
    Jca,
    Concat,
    VanillaCa,
}

impl ModelKind {
    pub const ALL: [ModelKind; 3] = [ModelKind::Jca, ModelKind::Concat, ModelKind::VanillaCa];

    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Jca => "jca",
            ModelKind::Concat => "concat",
            ModelKind::VanillaCa => "vanilla-ca",
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "jca" => Ok(ModelKind::Jca),
            "concat" => Ok(ModelKind::Concat),
            "vanilla-ca" => Ok(ModelKind::VanillaCa),
            other => Err(Error::InvalidArgument(format!(
                "unknown model {other:?} (jca|concat|vanilla-ca)"
            ))),
        }
    }
}

/// Head architecture: optional ReLU hidden layer, then a linear output.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct HeadSpec {
    pub hidden: Option<usize>,
    pub outputs: usize,
}

impl HeadSpec {
    pub fn linear(outputs: usize) -> Self {
        HeadSpec {
            hidden: None,
            outputs,
        }
    }
}

/// Uniform Xavier/Glorot draw for an `m x n` matrix.
pub fn xavier_matrix<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Matrix {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    Matrix::uniform(rows, cols, bound, rng)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    /// `in x out`.
    pub weight: Matrix,
    /// `1 x out`.
    pub bias: Matrix,
}

/// Fully connected head applied row-wise, ReLU between layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Head {
    pub layers: Vec<DenseLayer>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadTrace {
    /// Input to each layer.
    pub inputs: Vec<Matrix>,
    /// Output of each layer before its activation.
    pub pre: Vec<Matrix>,
}

impl Head {
    pub fn xavier<R: Rng + ?Sized>(input: usize, spec: HeadSpec, rng: &mut R) -> Result<Self> {
        if spec.outputs == 0 || spec.hidden == Some(0) {
            return Err(Error::InvalidArgument(format!("invalid head spec {spec:?}")));
        }
        let mut widths = vec![input];
        widths.extend(spec.hidden);
        widths.push(spec.outputs);
        let layers = widths
            .windows(2)
            .map(|w| DenseLayer {
                weight: xavier_matrix(w[0], w[1], rng),
                bias: Matrix::zeros(1, w[1]),
            })
            .collect();
        Ok(Head { layers })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.weight.cols())
    }

    pub fn spec(&self) -> HeadSpec {
        HeadSpec {
            hidden: if self.layers.len() > 1 {
                Some(self.layers[0].weight.cols())
            } else {
                None
            },
            outputs: self.output_dim(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    pub(crate) fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::InvalidArgument("head has no layers".into()));
        }
        for pair in self.layers.windows(2) {
            if pair[0].weight.cols() != pair[1].weight.rows() {
                return Err(Error::shape(
                    "head layers",
                    pair[0].weight.shape(),
                    pair[1].weight.shape(),
                ));
            }
        }
        for l in &self.layers {
            if l.bias.shape() != (1, l.weight.cols()) {
                return Err(Error::shape("head bias", l.weight.shape(), l.bias.shape()));
            }
        }
        Ok(())
    }

    pub fn forward(&self, input: &Matrix) -> Result<HeadTrace> {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut x = input.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let z = x.matmul(&layer.weight)?.add_row_vector(&layer.bias)?;
            inputs.push(x);
            x = if i + 1 < self.layers.len() { z.relu() } else { z.clone() };
            pre.push(z);
        }
        Ok(HeadTrace { inputs, pre })
    }

    /// Returns per-layer `(dW, db)` and the gradient with respect to the
    /// head input.
    pub fn backward(&self, trace: &HeadTrace, d_out: &Matrix) -> Result<(Vec<(Matrix, Matrix)>, Matrix)> {
        let mut grads = vec![(Matrix::zeros(0, 0), Matrix::zeros(0, 0)); self.layers.len()];
        let mut delta = d_out.clone();
        for i in (0..self.layers.len()).rev() {
            if i + 1 < self.layers.len() {
                for (g, &z) in delta.as_mut_slice().iter_mut().zip(trace.pre[i].as_slice()) {
                    if z <= 0.0 {
                        *g = 0.0;
                    }
                }
            }
            let dw = trace.inputs[i].transpose().matmul(&delta)?;
            let db = delta.col_sums();
            let d_in = delta.matmul(&self.layers[i].weight.transpose())?;
            grads[i] = (dw, db);
            delta = d_in;
        }
        Ok((grads, delta))
    }

    pub(crate) fn params(&self) -> impl Iterator<Item = &Matrix> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias])
    }

    pub(crate) fn params_mut(&mut self) -> impl Iterator<Item = &mut Matrix> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
    }

    pub(crate) fn slots(&self) -> impl Iterator<Item = ParamSlot> + '_ {
        (0..self.layers.len()).flat_map(|i| {
            [
                ParamSlot {
                    name: format!("head.{i}.weight"),
                    is_bias: false,
                },
                ParamSlot {
                    name: format!("head.{i}.bias"),
                    is_bias: true,
                },
            ]
        })
    }
}

/// Name and role of one trainable tensor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamSlot {
    pub name: String,
    pub is_bias: bool,
}

/// All intermediates of one forward pass on one sub-sequence.
///
/// For the attention models `fused` is `X_att = [X_att,v | X_att,a]`; for
/// feature concatenation it is `[X_a | X_v]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    /// Joint representation `J` (joint model only).
    pub joint: Option<Matrix>,
    pub audio: Option<BranchTrace>,
    pub visual: Option<BranchTrace>,
    pub fused: Matrix,
    /// Dropout mask applied to `fused`, if any.
    pub mask: Option<Matrix>,
    pub head_input: Matrix,
    pub head: HeadTrace,
    /// Raw head output, `L x outputs`.
    pub output: Matrix,
}

/// The joint model's activations.
pub type JcaActivations = ForwardTrace;

impl ForwardTrace {
    pub fn c_a(&self) -> Option<&Matrix> {
        self.audio.as_ref().map(|b| &b.corr)
    }

    pub fn c_v(&self) -> Option<&Matrix> {
        self.visual.as_ref().map(|b| &b.corr)
    }

    pub fn h_a(&self) -> Option<&Matrix> {
        self.audio.as_ref().map(|b| &b.att)
    }

    pub fn h_v(&self) -> Option<&Matrix> {
        self.visual.as_ref().map(|b| &b.att)
    }

    pub fn x_att_a(&self) -> Option<&Matrix> {
        self.audio.as_ref().map(|b| &b.attended)
    }

    pub fn x_att_v(&self) -> Option<&Matrix> {
        self.visual.as_ref().map(|b| &b.attended)
    }

    /// Smallest |pre-activation| over every ReLU in the pass. Finite
    /// differences are unreliable when this is near zero.
    pub fn min_relu_margin(&self) -> f64 {
        let mut m = f64::INFINITY;
        for b in [&self.audio, &self.visual].into_iter().flatten() {
            m = m.min(b.att_pre.as_slice().iter().fold(f64::INFINITY, |a, v| a.min(v.abs())));
        }
        let hidden = self.head.pre.len().saturating_sub(1);
        for z in &self.head.pre[..hidden] {
            m = m.min(z.as_slice().iter().fold(f64::INFINITY, |a, v| a.min(v.abs())));
        }
        m
    }
}

/// Applies the dropout mask and the head to the fused features.
pub(crate) fn finish_forward(
    head: &Head,
    joint: Option<Matrix>,
    audio: Option<BranchTrace>,
    visual: Option<BranchTrace>,
    fused: Matrix,
    mask: Option<&Matrix>,
) -> Result<ForwardTrace> {
    let head_input = match mask {
        Some(m) => fused.hadamard(m)?,
        None => fused.clone(),
    };
    let trace = head.forward(&head_input)?;
    let output = trace.pre.last().cloned().expect("head has layers");
    if !output.is_finite() {
        return Err(Error::NonFinite {
            stage: "head".into(),
        });
    }
    Ok(ForwardTrace {
        joint,
        audio,
        visual,
        fused,
        mask: mask.cloned(),
        head_input,
        head: trace,
        output,
    })
}

/// Backpropagates through the head and the dropout mask, returning head
/// gradients (flattened weight/bias order) and `d fused`.
pub(crate) fn head_backward(
    head: &Head,
    trace: &ForwardTrace,
    d_output: &Matrix,
) -> Result<(Vec<Matrix>, Matrix)> {
    let (layers, d_in) = head.backward(&trace.head, d_output)?;
    let d_fused = match &trace.mask {
        Some(m) => d_in.hadamard(m)?,
        None => d_in,
    };
    let grads = layers.into_iter().flat_map(|(w, b)| [w, b]).collect();
    Ok((grads, d_fused))
}

/// Behaviour shared by every fusion strategy.
pub trait FusionModel {
    fn kind(&self) -> ModelKind;
    fn dims(&self) -> Dims;
    fn head(&self) -> &Head;

    /// Full forward pass; `mask` is an optional inverted-dropout mask of
    /// shape `L x d` applied to the fused features.
    fn forward(
        &self,
        xa: &ModalityFeatures,
        xv: &ModalityFeatures,
        mask: Option<&Matrix>,
    ) -> Result<ForwardTrace>;

    /// Gradients of a scalar loss with respect to every parameter, in
    /// [`FusionModel::params`] order, given `d loss / d output`.
    fn backward(
        &self,
        xa: &ModalityFeatures,
        xv: &ModalityFeatures,
        trace: &ForwardTrace,
        d_output: &Matrix,
    ) -> Result<Vec<Matrix>>;

    fn params(&self) -> Vec<&Matrix>;
    fn params_mut(&mut self) -> Vec<&mut Matrix>;
    fn param_slots(&self) -> Vec<ParamSlot>;

    fn param_count(&self) -> usize {
        self.params().iter().map(|m| m.len()).sum()
    }

    /// Inference: no dropout, predictions clipped to `[-1, 1]`.
    fn predict(&self, xa: &ModalityFeatures, xv: &ModalityFeatures) -> Result<Matrix> {
        Ok(self.forward(xa, xv, None)?.output.map(|v| v.clamp(-1.0, 1.0)))
    }
}

/// Any of the three fusion strategies.
#[derive(Debug, Clone, PartialEq)]
pub enum Model {
    Jca(JcaParams),
    Concat(ConcatParams),
    VanillaCa(VanillaCaParams),
}

impl Model {
    /// Xavier-initialised model of the given kind; biases start at zero.
    pub fn xavier(kind: ModelKind, dims: Dims, head: HeadSpec, seed: u64) -> Result<Model> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(match kind {
            ModelKind::Jca => Model::Jca(JcaParams::xavier_with(dims, head, &mut rng)?),
            ModelKind::Concat => Model::Concat(ConcatParams::xavier_with(dims, head, &mut rng)?),
            ModelKind::VanillaCa => {
                Model::VanillaCa(VanillaCaParams::xavier_with(dims, head, &mut rng)?)
            }
        })
    }

    fn inner(&self) -> &dyn FusionModel {
        match self {
            Model::Jca(p) => p,
            Model::Concat(p) => p,
            Model::VanillaCa(p) => p,
        }
    }

    fn inner_mut(&mut self) -> &mut dyn FusionModel {
        match self {
            Model::Jca(p) => p,
            Model::Concat(p) => p,
            Model::VanillaCa(p) => p,
        }
    }

    /// Analytic parameter count for a configuration.
    pub fn expected_param_count(kind: ModelKind, dims: Dims, head: HeadSpec) -> usize {
        let (l, k, d) = (dims.seq_len, dims.k, dims.d());
        let head_count = match head.hidden {
            Some(h) => d * h + h + h * head.outputs + head.outputs,
            None => d * head.outputs + head.outputs,
        };
        head_count
            + match kind {
                ModelKind::Jca => 2 * l * l + 4 * k * l + 2 * k * d,
                ModelKind::VanillaCa => 2 * l * l + 4 * k * l + k * d,
                ModelKind::Concat => 0,
            }
    }
}

impl FusionModel for Model {
    fn kind(&self) -> ModelKind {
        self.inner().kind()
    }

    fn dims(&self) -> Dims {
        self.inner().dims()
    }

    fn head(&self) -> &Head {
        self.inner().head()
    }

    fn forward(
        &self,
        xa: &ModalityFeatures,
        xv: &ModalityFeatures,
        mask: Option<&Matrix>,
    ) -> Result<ForwardTrace> {
        self.inner().forward(xa, xv, mask)
    }

    fn backward(
        &self,
        xa: &ModalityFeatures,
        xv: &ModalityFeatures,
        trace: &ForwardTrace,
        d_output: &Matrix,
    ) -> Result<Vec<Matrix>> {
        self.inner().backward(xa, xv, trace, d_output)
    }

    fn params(&self) -> Vec<&Matrix> {
        self.inner().params()
    }

    fn params_mut(&mut self) -> Vec<&mut Matrix> {
        self.inner_mut().params_mut()
    }

    fn param_slots(&self) -> Vec<ParamSlot> {
        self.inner().param_slots()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn xavier_is_deterministic_and_bounded() {
        let dims = Dims::new(4, 3, 2, 2).unwrap();
        let a = Model::xavier(ModelKind::Jca, dims, HeadSpec::linear(1), 9).unwrap();
        let b = Model::xavier(ModelKind::Jca, dims, HeadSpec::linear(1), 9).unwrap();
        assert_eq!(a, b);
        let c = Model::xavier(ModelKind::Jca, dims, HeadSpec::linear(1), 10).unwrap();
        assert_ne!(a, c);

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = xavier_matrix(100, 100, &mut rng);
        let bound = (6.0f64 / 200.0).sqrt();
        assert!(w.as_slice().iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn xavier_mean_near_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let w = xavier_matrix(200, 200, &mut rng);
        let mean = w.sum() / w.len() as f64;
        assert!(mean.abs() < 0.005, "{mean}");
    }

    #[test]
    fn biases_start_at_zero() {
        let dims = Dims::new(3, 2, 2, 2).unwrap();
        let spec = HeadSpec {
            hidden: Some(4),
            outputs: 2,
        };
        let m = Model::xavier(ModelKind::VanillaCa, dims, spec, 1).unwrap();
        for (slot, p) in m.param_slots().iter().zip(m.params()) {
            if slot.is_bias {
                assert_eq!(p.max_abs(), 0.0, "{}", slot.name);
            }
        }
    }

    #[test]
    fn param_counts_match_formula_and_order() {
        for (l, da, dv, k) in [(8, 16, 16, 8), (3, 2, 5, 1), (1, 1, 1, 4)] {
            let dims = Dims::new(l, da, dv, k).unwrap();
            for spec in [HeadSpec::linear(1), HeadSpec { hidden: Some(3), outputs: 2 }] {
                let mut counts = vec![];
                for kind in ModelKind::ALL {
                    let m = Model::xavier(kind, dims, spec, 0).unwrap();
                    assert_eq!(m.param_count(), Model::expected_param_count(kind, dims, spec));
                    assert_eq!(m.params().len(), m.param_slots().len());
                    counts.push(m.param_count());
                }
                // jca, concat, vanilla
                assert!(counts[1] < counts[2] && counts[2] < counts[0]);
            }
        }
        let dims = Dims::new(8, 16, 16, 8).unwrap();
        let jca = Model::xavier(ModelKind::Jca, dims, HeadSpec::linear(1), 0).unwrap();
        assert_eq!(jca.param_count(), 2 * 64 + 4 * 64 + 2 * 8 * 32 + 33);
    }

    #[test]
    fn dims_reject_zero() {
        assert!(Dims::new(0, 1, 1, 1).is_err());
        assert!(Dims::new(1, 1, 0, 1).is_err());
    }

    #[test]
    fn head_with_hidden_layer_runs() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let head = Head::xavier(
            5,
            HeadSpec {
                hidden: Some(3),
                outputs: 1,
            },
            &mut rng,
        )
        .unwrap();
        let t = head.forward(&Matrix::filled(2, 5, 0.3)).unwrap();
        assert_eq!(t.pre.last().unwrap().shape(), (2, 1));
        assert_eq!(head.spec().hidden, Some(3));
    }
}
