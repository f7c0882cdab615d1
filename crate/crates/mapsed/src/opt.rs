//! First-order optimizers over flat parameter vectors.

/// Update rule. Adam follows the published moment-estimate equations with
/// bias correction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Optimizer {
    Sgd,
    Momentum { beta: f64 },
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Optimizer {
    pub fn adam_default() -> Self {
        Optimizer::Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }

    pub fn momentum_default() -> Self {
        Optimizer::Momentum { beta: 0.9 }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Optimizer::Sgd => "sgd",
            Optimizer::Momentum { .. } => "momentum",
            Optimizer::Adam { .. } => "adam",
        }
    }
}

/// Moment buffers, sized to the flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct OptState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl OptState {
    pub fn new(n: usize) -> Self {
        OptState { m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }
}

/// One in-place update of `params` given `grad`.
pub fn apply_update(
    opt: Optimizer,
    state: &mut OptState,
    params: &mut [f64],
    grad: &[f64],
    lr: f64,
) {
    assert_eq!(params.len(), grad.len());
    assert_eq!(params.len(), state.m.len());
    state.t += 1;
    match opt {
        Optimizer::Sgd => {
            for (p, g) in params.iter_mut().zip(grad) {
                *p -= lr * g;
            }
        }
        Optimizer::Momentum { beta } => {
            for ((p, g), m) in params.iter_mut().zip(grad).zip(&mut state.m) {
                *m = beta * *m + *g;
                *p -= lr * *m;
            }
        }
        Optimizer::Adam { beta1, beta2, eps } => {
            let bc1 = 1.0 - beta1.powi(state.t as i32);
            let bc2 = 1.0 - beta2.powi(state.t as i32);
            for ((p, g), (m, v)) in params
                .iter_mut()
                .zip(grad)
                .zip(state.m.iter_mut().zip(&mut state.v))
            {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let mhat = *m / bc1;
                let vhat = *v / bc2;
                *p -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}
