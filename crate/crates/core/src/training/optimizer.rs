//! SGD with momentum and coupled weight decay.

use crate::training::mlp::{MlpModel, ModelGrads};

/// One SGD step on a flat parameter block:
/// `v <- momentum*v + g + weight_decay*p; p <- p - lr*v`.
/// Weight decay is coupled (added to the gradient before momentum).
pub fn sgd_update(
    params: &mut [f64],
    grads: &[f64],
    velocity: &mut [f64],
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) {
    debug_assert_eq!(params.len(), grads.len());
    debug_assert_eq!(params.len(), velocity.len());
    for ((p, &g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        *v = momentum * *v + g + weight_decay * *p;
        *p -= lr * *v;
    }
}

/// Momentum buffers mirroring a set of parameter blocks.
#[derive(Debug, Clone)]
pub struct SgdState {
    blocks: Vec<Vec<f64>>,
}

impl SgdState {
    pub fn for_model(model: &MlpModel) -> Self {
        let blocks = model
            .layers
            .iter()
            .flat_map(|l| {
                [
                    vec![0.0; l.weight.rows() * l.weight.cols()],
                    vec![0.0; l.bias.len()],
                ]
            })
            .collect();
        SgdState { blocks }
    }

    pub fn for_shapes(shapes: &[usize]) -> Self {
        SgdState {
            blocks: shapes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn reset(&mut self) {
        for b in &mut self.blocks {
            b.fill(0.0);
        }
    }

    pub fn block_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.blocks[i]
    }

    /// Apply one step to a model given matching gradients.
    pub fn step_model(
        &mut self,
        model: &mut MlpModel,
        grads: &ModelGrads,
        lr: f64,
        momentum: f64,
        weight_decay: f64,
    ) {
        for (li, (layer, g)) in model.layers.iter_mut().zip(&grads.layers).enumerate() {
            sgd_update(
                layer.weight.data_mut(),
                g.weight.data(),
                &mut self.blocks[2 * li],
                lr,
                momentum,
                weight_decay,
            );
            sgd_update(
                &mut layer.bias,
                &g.bias,
                &mut self.blocks[2 * li + 1],
                lr,
                momentum,
                weight_decay,
            );
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut p = vec![1.0, -2.0];
        let mut v = vec![0.0, 0.0];
        sgd_update(&mut p, &[0.0, 0.0], &mut v, 0.1, 0.9, 0.0);
        assert_eq!(p, vec![1.0, -2.0]);
    }

    #[test]
    fn single_step_arithmetic() {
        let mut p = vec![1.0];
        let mut v = vec![0.0];
        sgd_update(&mut p, &[1.0], &mut v, 0.1, 0.0, 0.0);
        assert_eq!(p, vec![0.9]);
    }

    #[test]
    fn two_momentum_steps_match_hand_recurrence() {
        // v1 = 1, p1 = 0.9; v2 = 0.9 + 1 = 1.9, p2 = 0.9 - 0.19 = 0.71
        let mut p = vec![1.0];
        let mut v = vec![0.0];
        sgd_update(&mut p, &[1.0], &mut v, 0.1, 0.9, 0.0);
        assert!((p[0] - 0.9).abs() < 1e-15);
        sgd_update(&mut p, &[1.0], &mut v, 0.1, 0.9, 0.0);
        assert!((p[0] - 0.71).abs() < 1e-15);
    }

    #[test]
    fn coupled_weight_decay_enters_the_gradient() {
        let mut p = vec![2.0];
        let mut v = vec![0.0];
        sgd_update(&mut p, &[0.0], &mut v, 0.1, 0.0, 0.5);
        // v = 0.5*2 = 1; p = 2 - 0.1 = 1.9
        assert!((p[0] - 1.9).abs() < 1e-15);
    }
}
