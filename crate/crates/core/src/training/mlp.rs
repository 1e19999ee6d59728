//! Minimal fully-connected network with rectifier hidden layers and
//! hand-written reverse-mode backpropagation.

use std::path::Path;
use std::sync::Arc;

use crate::error::{invalid, Error, Result};
use crate::math::Matrix;
use crate::rng::RngStream;
use crate::teacher::{
    fingerprint64, read_envelope, write_envelope, PayloadKind, PayloadReader, PayloadWriter,
    Teacher, TeacherRep,
};

#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    /// `out x in`, row-major.
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

/// Feed-forward classifier: `widths = [D_in, h_1, ..., C]`, rectifier on all
/// hidden layers, raw logits at the output. The activation feeding the output
/// layer doubles as the intermediate tap for white-box hints.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel {
    widths: Vec<usize>,
    pub layers: Vec<DenseLayer>,
}

/// Per-layer activations kept from a forward pass for the backward pass.
/// `inputs[l]` feeds layer `l`; `pre[l]` is its pre-activation output.
pub struct ForwardTrace {
    pub inputs: Vec<Matrix>,
    pub pre: Vec<Matrix>,
}

impl ForwardTrace {
    /// Output logits (pre-activation of the last layer).
    pub fn logits(&self) -> &Matrix {
        self.pre.last().unwrap()
    }

    /// Post-rectifier activation feeding the output layer (the hint tap);
    /// the raw input when the model has no hidden layer.
    pub fn tap(&self) -> &Matrix {
        self.inputs.last().unwrap()
    }
}

/// Gradients mirroring the model's parameter blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGrads {
    pub layers: Vec<DenseLayer>,
}

impl MlpModel {
    /// Fan-in-scaled Gaussian weights (`sigma = 1/sqrt(fan_in)`), zero biases.
    pub fn init(widths: &[usize], rng: &mut RngStream) -> Result<Self> {
        if widths.len() < 2 {
            return Err(invalid("model needs at least input and output widths"));
        }
        if widths.iter().any(|&w| w == 0) {
            return Err(invalid("zero layer width"));
        }
        let mut layers = Vec::with_capacity(widths.len() - 1);
        for pair in widths.windows(2) {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let scale = 1.0 / (fan_in as f64).sqrt();
            let mut weight = Matrix::zeros(fan_out, fan_in);
            for v in weight.data_mut() {
                *v = scale * rng.normal();
            }
            layers.push(DenseLayer {
                weight,
                bias: vec![0.0; fan_out],
            });
        }
        Ok(MlpModel {
            widths: widths.to_vec(),
            layers,
        })
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().unwrap()
    }

    /// Width of the activation feeding the output layer.
    pub fn tap_dim(&self) -> usize {
        self.widths[self.widths.len() - 2]
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.rows() * l.weight.cols() + l.bias.len())
            .sum()
    }

    fn layer_forward(layer: &DenseLayer, x: &Matrix) -> Result<Matrix> {
        let mut z = x.matmul_nt(&layer.weight)?;
        for r in 0..z.rows() {
            for (v, b) in z.row_mut(r).iter_mut().zip(&layer.bias) {
                *v += b;
            }
        }
        Ok(z)
    }

    /// Batch forward keeping the trace needed for backpropagation.
    pub fn forward_batch_trace(&self, x: &Matrix) -> Result<ForwardTrace> {
        if x.cols() != self.input_dim() {
            return Err(invalid(format!(
                "input dim {} != model input {}",
                x.cols(),
                self.input_dim()
            )));
        }
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut a = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let z = Self::layer_forward(layer, &a)?;
            inputs.push(a);
            let last = i + 1 == self.layers.len();
            a = if last {
                z.clone()
            } else {
                let mut r = z.clone();
                for v in r.data_mut() {
                    *v = v.max(0.0);
                }
                r
            };
            pre.push(z);
        }
        Ok(ForwardTrace { inputs, pre })
    }

    /// Batch logits without a trace.
    pub fn forward_batch(&self, x: &Matrix) -> Result<Matrix> {
        let mut trace = self.forward_batch_trace(x)?;
        Ok(trace.pre.pop().expect("at least one layer"))
    }

    /// Single-sample logits.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        let m = Matrix::from_rows(&[x.to_vec()])?;
        Ok(self.forward_batch(&m)?.row(0).to_vec())
    }

    /// Reverse-mode parameter gradients for a batch, given the gradient of
    /// the loss with respect to the logits and, optionally, an extra gradient
    /// injected at the tap activation (hint losses attach there).
    pub fn backward(
        &self,
        trace: &ForwardTrace,
        d_logits: &Matrix,
        d_tap: Option<&Matrix>,
    ) -> Result<ModelGrads> {
        let num_layers = self.layers.len();
        let mut grads: Vec<DenseLayer> = Vec::with_capacity(num_layers);
        let mut delta = d_logits.clone();
        for l in (0..num_layers).rev() {
            let input = &trace.inputs[l];
            // dW = delta^T * input; db = column sums of delta.
            let d_weight = delta.matmul_tn(input)?;
            let mut d_bias = vec![0.0; self.layers[l].bias.len()];
            for r in 0..delta.rows() {
                for (b, &d) in d_bias.iter_mut().zip(delta.row(r)) {
                    *b += d;
                }
            }
            grads.push(DenseLayer {
                weight: d_weight,
                bias: d_bias,
            });
            if l == 0 {
                break;
            }
            // Gradient at the previous activation, plus any tap injection,
            // masked by the rectifier derivative.
            let mut d_act = delta.matmul_nn(&self.layers[l].weight)?;
            if l == num_layers - 1 {
                if let Some(extra) = d_tap {
                    if extra.rows() != d_act.rows() || extra.cols() != d_act.cols() {
                        return Err(invalid("tap gradient shape mismatch"));
                    }
                    for (v, &e) in d_act.data_mut().iter_mut().zip(extra.data()) {
                        *v += e;
                    }
                }
            }
            let z_prev = &trace.pre[l - 1];
            for (v, &z) in d_act.data_mut().iter_mut().zip(z_prev.data()) {
                if z <= 0.0 {
                    *v = 0.0;
                }
            }
            delta = d_act;
        }
        grads.reverse();
        Ok(ModelGrads { layers: grads })
    }

    /// Hash of the architecture and all parameters.
    pub fn fingerprint(&self) -> u64 {
        fingerprint64(&self.canonical_bytes())
    }

    fn canonical_bytes(&self) -> Vec<u8> {
        let mut w = PayloadWriter::new();
        w.u32(self.widths.len() as u32);
        for &width in &self.widths {
            w.u32(width as u32);
        }
        for layer in &self.layers {
            w.f64_slice(layer.weight.data());
            w.f64_slice(&layer.bias);
        }
        w.finish()
    }

    /// Write a checkpoint in the shared envelope format (versioned,
    /// checksummed); round-trips are bit-exact.
    pub fn save(&self, path: &Path) -> Result<()> {
        write_envelope(path, PayloadKind::Checkpoint, &self.canonical_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let payload = read_envelope(path, PayloadKind::Checkpoint)?;
        let mut r = PayloadReader::new(&payload, "checkpoint");
        let num_widths = r.u32()? as usize;
        if num_widths < 2 || num_widths > 64 {
            return Err(Error::CacheCorrupt(format!(
                "checkpoint: implausible layer-count field {num_widths}"
            )));
        }
        let mut widths = Vec::with_capacity(num_widths);
        for _ in 0..num_widths {
            widths.push(r.u32()? as usize);
        }
        let mut layers = Vec::with_capacity(num_widths - 1);
        for pair in widths.windows(2) {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let data = r.f64_vec(fan_out * fan_in)?;
            let weight = Matrix::from_vec(fan_out, fan_in, data)?;
            let bias = r.f64_vec(fan_out)?;
            layers.push(DenseLayer { weight, bias });
        }
        r.expect_end()?;
        Ok(MlpModel { widths, layers })
    }
}

/// A trained model serves as a teacher directly: logits from the output
/// layer, hints from the tap activation, one forward pass for both.
pub struct MlpTeacher {
    model: Arc<MlpModel>,
    fingerprint: u64,
}

impl MlpTeacher {
    pub fn new(model: MlpModel) -> Self {
        let fingerprint = model.fingerprint();
        MlpTeacher {
            model: Arc::new(model),
            fingerprint,
        }
    }

    pub fn model(&self) -> &MlpModel {
        &self.model
    }
}

impl Teacher for MlpTeacher {
    fn num_classes(&self) -> usize {
        self.model.output_dim()
    }

    fn hint_dim(&self) -> Option<usize> {
        Some(self.model.tap_dim())
    }

    fn fingerprint(&self) -> u64 {
        self.fingerprint
    }

    fn forward(&self, _sample_id: u64, features: &[f64], want_hint: bool) -> Result<TeacherRep> {
        let x = Matrix::from_rows(&[features.to_vec()])?;
        let trace = self.model.forward_batch_trace(&x)?;
        let logits = trace.logits().row(0).to_vec();
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::NumericalDivergence(
                "teacher produced non-finite logits".into(),
            ));
        }
        let hint = want_hint.then(|| trace.tap().row(0).to_vec());
        Ok(TeacherRep { logits, hint })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{max_gradient_error, STEP, TOLERANCE};
    use crate::losses;

    #[test]
    fn init_is_seeded_and_finite() {
        let mut rng = RngStream::new(3);
        let a = MlpModel::init(&[4, 8, 3], &mut rng).unwrap();
        let mut rng2 = RngStream::new(3);
        let b = MlpModel::init(&[4, 8, 3], &mut rng2).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.param_count(), 4 * 8 + 8 + 8 * 3 + 3);
        let x = Matrix::from_rows(&[vec![1.0, -1.0, 0.5, 2.0]]).unwrap();
        assert!(a.forward_batch(&x).unwrap().is_finite());
    }

    #[test]
    fn checkpoint_round_trip_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let model = MlpModel::init(&[3, 5, 2], &mut RngStream::new(11)).unwrap();
        model.save(&path).unwrap();
        let loaded = MlpModel::load(&path).unwrap();
        assert_eq!(model, loaded);
        assert_eq!(model.fingerprint(), loaded.fingerprint());
    }

    #[test]
    fn zero_weight_model_gradient_is_softmax_minus_onehot_at_output() {
        // With all weights zero, logits are zero and the CE gradient at the
        // output bias is exactly softmax(0) - onehot = [1/C.., -1+1/C..].
        let mut model = MlpModel::init(&[2, 3, 2], &mut RngStream::new(1)).unwrap();
        for layer in &mut model.layers {
            for v in layer.weight.data_mut() {
                *v = 0.0;
            }
        }
        let x = Matrix::from_rows(&[vec![0.3, -0.4]]).unwrap();
        let trace = model.forward_batch_trace(&x).unwrap();
        let logits = trace.logits().row(0);
        let ce = losses::ce_loss(logits, 0).unwrap();
        let d_logits = Matrix::from_rows(&[ce.grads[0].clone()]).unwrap();
        let grads = model.backward(&trace, &d_logits, None).unwrap();
        let out_bias_grad = &grads.layers[1].bias;
        assert!((out_bias_grad[0] - (0.5 - 1.0)).abs() < 1e-12);
        assert!((out_bias_grad[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn parameter_gradients_match_finite_differences() {
        // Two-layer toy model, CE loss summed over a batch of 3.
        let model = MlpModel::init(&[3, 4, 3], &mut RngStream::new(7)).unwrap();
        let x = Matrix::from_rows(&[
            vec![0.5, -1.0, 0.25],
            vec![1.5, 0.3, -0.75],
            vec![-0.25, 0.8, 1.1],
        ])
        .unwrap();
        let labels = [0usize, 2, 1];

        let loss_of = |m: &MlpModel| -> f64 {
            let logits = m.forward_batch(&x).unwrap();
            (0..3)
                .map(|r| losses::ce_loss(logits.row(r), labels[r]).unwrap().value)
                .sum()
        };

        let trace = model.forward_batch_trace(&x).unwrap();
        let mut d_logits = Matrix::zeros(3, 3);
        for r in 0..3 {
            let g = losses::ce_loss(trace.logits().row(r), labels[r]).unwrap();
            d_logits.row_mut(r).copy_from_slice(&g.grads[0]);
        }
        let grads = model.backward(&trace, &d_logits, None).unwrap();

        // flatten params and analytic grads into blocks for the checker
        let inputs: Vec<Vec<f64>> = model
            .layers
            .iter()
            .flat_map(|l| [l.weight.data().to_vec(), l.bias.clone()])
            .collect();
        let analytic: Vec<Vec<f64>> = grads
            .layers
            .iter()
            .flat_map(|l| [l.weight.data().to_vec(), l.bias.clone()])
            .collect();
        let err = max_gradient_error(
            |blocks| {
                let mut m = model.clone();
                for (li, layer) in m.layers.iter_mut().enumerate() {
                    layer
                        .weight
                        .data_mut()
                        .copy_from_slice(&blocks[2 * li]);
                    layer.bias.copy_from_slice(&blocks[2 * li + 1]);
                }
                loss_of(&m)
            },
            &inputs,
            &analytic,
            STEP,
        );
        assert!(err <= TOLERANCE, "err {err}");
    }

    #[test]
    fn tap_injection_gradients_match_finite_differences() {
        // hint loss attached at the tap: mean squared distance to a target
        let model = MlpModel::init(&[3, 4, 2], &mut RngStream::new(9)).unwrap();
        let x = Matrix::from_rows(&[vec![0.4, -0.6, 1.2], vec![0.9, 0.1, -0.3]]).unwrap();
        let target = Matrix::from_rows(&[vec![0.1, -0.2, 0.3, 0.4], vec![0.0, 0.5, -0.5, 1.0]])
            .unwrap();

        let loss_of = |m: &MlpModel| -> f64 {
            let trace = m.forward_batch_trace(&x).unwrap();
            let tap = trace.tap();
            tap.data()
                .iter()
                .zip(target.data())
                .map(|(a, b)| (a - b) * (a - b))
                .sum()
        };

        let trace = model.forward_batch_trace(&x).unwrap();
        let mut d_tap = Matrix::zeros(2, 4);
        for (v, (a, b)) in d_tap
            .data_mut()
            .iter_mut()
            .zip(trace.tap().data().iter().zip(target.data()))
        {
            *v = 2.0 * (a - b);
        }
        let d_logits = Matrix::zeros(2, 2);
        let grads = model.backward(&trace, &d_logits, Some(&d_tap)).unwrap();

        let inputs: Vec<Vec<f64>> = model
            .layers
            .iter()
            .flat_map(|l| [l.weight.data().to_vec(), l.bias.clone()])
            .collect();
        let analytic: Vec<Vec<f64>> = grads
            .layers
            .iter()
            .flat_map(|l| [l.weight.data().to_vec(), l.bias.clone()])
            .collect();
        let err = max_gradient_error(
            |blocks| {
                let mut m = model.clone();
                for (li, layer) in m.layers.iter_mut().enumerate() {
                    layer.weight.data_mut().copy_from_slice(&blocks[2 * li]);
                    layer.bias.copy_from_slice(&blocks[2 * li + 1]);
                }
                loss_of(&m)
            },
            &inputs,
            &analytic,
            STEP,
        );
        assert!(err <= TOLERANCE, "err {err}");
    }
}
