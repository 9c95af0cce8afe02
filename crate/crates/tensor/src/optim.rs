use crate::element::Element;
use crate::error::{Result, TensorError};
use crate::params::ParamStore;

/// AdamW with decoupled weight decay.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW<T: Element = f64> {
    pub learning_rate: f64,
    pub betas: (f64, f64),
    pub weight_decay: f64,
    pub epsilon: f64,
    step: u64,
    first: Vec<Vec<T>>,
    second: Vec<Vec<T>>,
}

impl<T: Element> AdamW<T> {
    pub fn new(learning_rate: f64, betas: (f64, f64), weight_decay: f64, epsilon: f64) -> Self {
        Self {
            learning_rate,
            betas,
            weight_decay,
            epsilon,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn with_lr(learning_rate: f64) -> Self {
        Self::new(learning_rate, (0.9, 0.999), 0.01, 1e-8)
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update from the gradients held in `params`. Every
    /// registered parameter must carry a gradient.
    pub fn step(&mut self, params: &mut ParamStore<T>) -> Result<()> {
        for id in params.ids() {
            if params.get(id).grad.is_none() {
                return Err(TensorError::MissingGrad(params.name(id).to_string()));
            }
        }
        if self.first.is_empty() {
            self.first = params.ids().map(|id| vec![T::zero(); params.get(id).numel()]).collect();
            self.second = self.first.clone();
        } else if self.first.len() != params.len()
            || params
                .ids()
                .zip(&self.first)
                .any(|(id, m)| m.len() != params.get(id).numel())
        {
            return Err(TensorError::ShapeMismatch {
                op: "adamw",
                detail: "optimizer state does not match the parameter set".into(),
            });
        }
        self.step += 1;
        let (b1, b2) = self.betas;
        let bc1 = 1.0 - b1.powi(self.step as i32);
        let bc2 = 1.0 - b2.powi(self.step as i32);
        let lr = T::lit(self.learning_rate);
        let decay = T::one() - lr * T::lit(self.weight_decay);
        let (b1t, b2t) = (T::lit(b1), T::lit(b2));
        let (ob1, ob2) = (T::lit(1.0 - b1), T::lit(1.0 - b2));
        let (bc1, bc2) = (T::lit(bc1), T::lit(bc2));
        let eps = T::lit(self.epsilon);
        for (i, id) in params.ids().collect::<Vec<_>>().into_iter().enumerate() {
            let t = params.get_mut(id);
            let grad = t.grad.take().expect("checked above");
            let (m, v) = (&mut self.first[i], &mut self.second[i]);
            for (((p, &g), m), v) in t.data_mut().iter_mut().zip(&grad).zip(m).zip(v) {
                *p *= decay;
                *m = b1t * *m + ob1 * g;
                *v = b2t * *v + ob2 * g * g;
                let mh = *m / bc1;
                let vh = *v / bc2;
                *p -= lr * mh / (vh.sqrt() + eps);
            }
            t.grad = Some(grad);
        }
        Ok(())
    }
}
