use serde::{Deserialize, Serialize};

use super::layers::Param;
use super::model::EdNet;
use super::tensor::Element;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    #[default]
    Adam,
    Sgd,
}

/// First-order optimizer state for one model. Moment buffers are indexed by
/// the model's fixed parameter order.
#[derive(Debug, Clone)]
pub struct Optimizer<T> {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPSILON: f64 = 1e-8;
const SGD_MOMENTUM: f64 = 0.9;

impl<T: Element> Optimizer<T> {
    pub fn new(kind: OptimizerKind, learning_rate: f64) -> Self {
        Optimizer {
            kind,
            learning_rate,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update from the accumulated gradients, then clears them.
    pub fn step(&mut self, model: &mut EdNet<T>) {
        self.step += 1;
        let t = self.step as i32;
        let lr = self.learning_rate;
        let bc1 = 1.0 - BETA1.powi(t);
        let bc2 = 1.0 - BETA2.powi(t);
        let kind = self.kind;
        let (ms, vs) = (&mut self.m, &mut self.v);
        let mut i = 0;
        model.visit_params_mut(|p: &mut Param<T>| {
            if ms.len() <= i {
                ms.push(vec![T::zero(); p.len()]);
                vs.push(vec![T::zero(); p.len()]);
            }
            let (m, v) = (&mut ms[i], &mut vs[i]);
            match kind {
                OptimizerKind::Adam => {
                    let (b1, b2) = (T::of(BETA1), T::of(BETA2));
                    let step = T::of(lr / bc1);
                    let inv_bc2 = T::of(1.0 / bc2);
                    let eps = T::of(ADAM_EPSILON);
                    for (((w, &g), m), v) in p.value.iter_mut().zip(&p.grad).zip(m.iter_mut()).zip(v.iter_mut()) {
                        *m = b1 * *m + (T::one() - b1) * g;
                        *v = b2 * *v + (T::one() - b2) * g * g;
                        *w -= step * *m / ((*v * inv_bc2).sqrt() + eps);
                    }
                }
                OptimizerKind::Sgd => {
                    let mu = T::of(SGD_MOMENTUM);
                    let lr = T::of(lr);
                    for ((w, &g), m) in p.value.iter_mut().zip(&p.grad).zip(m.iter_mut()) {
                        *m = mu * *m + g;
                        *w -= lr * *m;
                    }
                }
            }
            p.zero_grad();
            i += 1;
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ednet::{ModelSpec, NormMode};

    #[test]
    fn first_adam_step_moves_each_weight_by_about_lr() {
        let spec = ModelSpec::scaled(5, 2, NormMode::Instance, 16);
        let mut net = EdNet::<f64>::build(&spec, 1).unwrap();
        let before: Vec<f64> = net.params().iter().flat_map(|p| p.value.clone()).collect();
        net.visit_params_mut(|p| p.grad.iter_mut().for_each(|g| *g = 0.25));
        let mut opt = Optimizer::new(OptimizerKind::Adam, 1e-3);
        opt.step(&mut net);
        let after: Vec<f64> = net.params().iter().flat_map(|p| p.value.clone()).collect();
        for (a, b) in before.iter().zip(&after) {
            assert!(((a - b) - 1e-3).abs() < 1e-8);
        }
        assert!(net.params().iter().all(|p| p.grad.iter().all(|&g| g == 0.0)));
    }
}
