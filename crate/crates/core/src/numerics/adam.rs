use super::{NumericsError, ParamGrads, ParamStore, Real, Tensor};

/// Bias-corrected Adam moments for every tensor of a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<R> {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step: u64,
    first: Vec<Tensor<R>>,
    second: Vec<Tensor<R>>,
}

impl<R: Real> AdamState<R> {
    pub fn new(params: &ParamStore<R>) -> Self {
        let zeros = || -> Vec<Tensor<R>> { params.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect() };
        Self {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            first: zeros(),
            second: zeros(),
        }
    }

    /// Rebuild from saved moments, e.g. out of a checkpoint.
    pub fn from_parts(step: u64, first: Vec<Tensor<R>>, second: Vec<Tensor<R>>) -> Result<Self, NumericsError> {
        if first.len() != second.len() || first.iter().zip(&second).any(|(m, v)| m.shape() != v.shape()) {
            return Err(NumericsError::ShapeMismatch("adam moment tensors disagree".into()));
        }
        Ok(Self {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step,
            first,
            second,
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moments(&self) -> &[Tensor<R>] {
        &self.first
    }

    pub fn second_moments(&self) -> &[Tensor<R>] {
        &self.second
    }

    /// One update of every parameter that has a gradient.
    pub fn step(&mut self, params: &mut ParamStore<R>, grads: &ParamGrads<R>, lr: f64) -> Result<(), NumericsError> {
        if grads.len() != params.len() || self.first.len() != params.len() {
            return Err(NumericsError::ShapeMismatch(format!(
                "adam: {} parameters, {} gradients, {} moment slots",
                params.len(),
                grads.len(),
                self.first.len()
            )));
        }
        for (id, g) in grads.iter() {
            if let Some(g) = g {
                if g.shape() != params.get(id).shape() || self.first[id.0].shape() != g.shape() {
                    return Err(NumericsError::ShapeMismatch(format!(
                        "adam: gradient {:?} vs parameter {} {:?}",
                        g.shape(),
                        params.name(id),
                        params.get(id).shape()
                    )));
                }
            }
        }

        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (R::from_f64_lossy(self.beta1), R::from_f64_lossy(self.beta2));
        let c1 = R::from_f64_lossy(1.0 - self.beta1.powi(t));
        let c2 = R::from_f64_lossy(1.0 - self.beta2.powi(t));
        let lr = R::from_f64_lossy(lr);
        let eps = R::from_f64_lossy(self.epsilon);
        let one = R::one();

        for (id, g) in grads.iter() {
            let Some(g) = g else { continue };
            let m = self.first[id.0].data_mut();
            let v = self.second[id.0].data_mut();
            let p = params.get_mut(id).data_mut();
            for i in 0..p.len() {
                let gi = g.data()[i];
                m[i] = b1 * m[i] + (one - b1) * gi;
                v[i] = b2 * v[i] + (one - b2) * gi * gi;
                let mhat = m[i] / c1;
                let vhat = v[i] / c2;
                p[i] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
