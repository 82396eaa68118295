use crate::error::{Error, Result};

use super::{ParamStore, Tensor};

/// Moment buffers and step counter for one parameter group.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub step_count: u64,
    pub first_moment: Vec<Vec<f32>>,
    pub second_moment: Vec<Vec<f32>>,
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub learning_rate: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub epsilon: f32,
    state: AdamState,
}

impl Adam {
    pub fn new(learning_rate: f32) -> Self {
        Adam {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            state: AdamState {
                step_count: 0,
                first_moment: Vec::new(),
                second_moment: Vec::new(),
            },
        }
    }

    pub fn state(&self) -> &AdamState {
        &self.state
    }

    /// One update over `params`, each of which must hold a gradient.
    ///
    /// The parameter list must be the same (same order, same shapes) on
    /// every call; moment buffers are matched positionally.
    pub fn step(&mut self, params: &mut [&mut Tensor]) -> Result<()> {
        if self.state.first_moment.is_empty() {
            self.state.first_moment = params.iter().map(|p| vec![0.0; p.numel()]).collect();
            self.state.second_moment = self.state.first_moment.clone();
        }
        if self.state.first_moment.len() != params.len()
            || params
                .iter()
                .zip(&self.state.first_moment)
                .any(|(p, m)| p.numel() != m.len())
        {
            return Err(Error::contract(
                "optimizer state is not congruent with the parameter list",
            ));
        }
        let grads: Vec<Vec<f32>> = params
            .iter()
            .enumerate()
            .map(|(i, p)| {
                p.grad()
                    .ok_or_else(|| Error::contract(format!("parameter #{i} has no gradient")))
            })
            .collect::<Result<_>>()?;

        self.state.step_count += 1;
        let t = self.state.step_count as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (i, p) in params.iter_mut().enumerate() {
            let m = &mut self.state.first_moment[i];
            let v = &mut self.state.second_moment[i];
            let w = p.data_mut()?;
            for j in 0..w.len() {
                let g = grads[i][j];
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g * g;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                w[j] -= self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
            }
        }
        Ok(())
    }

    /// Steps every trainable parameter of `store`, then clears gradients.
    pub fn step_store(&mut self, store: &mut ParamStore) -> Result<()> {
        let mut params: Vec<&mut Tensor> = store
            .entries_mut()
            .filter(|(_, _, trainable)| *trainable)
            .map(|(_, t, _)| t)
            .collect();
        self.step(&mut params)?;
        for p in params {
            p.zero_grad();
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set_grad(p: &Tensor, g: f32) {
        p.zero_grad();
        p.scale(g).sum().backward().unwrap();
    }

    #[test]
    fn first_step_moves_by_learning_rate_against_gradient_sign() {
        let mut p = Tensor::param(vec![0.5], &[1]).unwrap();
        set_grad(&p, -3.0);
        let mut opt = Adam::new(0.01);
        opt.step(&mut [&mut p]).unwrap();
        assert!((p.data()[0] - 0.51).abs() < 1e-6);
        assert_eq!(opt.state().step_count, 1);
    }

    #[test]
    fn zero_gradient_leaves_param_unchanged() {
        let mut p = Tensor::param(vec![0.5], &[1]).unwrap();
        set_grad(&p, 0.0);
        let mut opt = Adam::new(0.1);
        opt.step(&mut [&mut p]).unwrap();
        assert_eq!(p.data()[0], 0.5);
    }

    #[test]
    fn missing_gradient_is_contract_error() {
        let mut p = Tensor::param(vec![0.5], &[1]).unwrap();
        let mut opt = Adam::new(0.1);
        assert!(matches!(opt.step(&mut [&mut p]), Err(Error::Contract(_))));
    }

    #[test]
    fn quadratic_descends_monotonically() {
        // f(w) = w², f'(w) = 2w
        let mut p = Tensor::param(vec![1.0], &[1]).unwrap();
        let mut opt = Adam::new(0.1);
        let mut prev = 1.0f32;
        for _ in 0..10 {
            p.mul(&p).unwrap().sum().backward().unwrap();
            opt.step(&mut [&mut p]).unwrap();
            p.zero_grad();
            let w = p.data()[0].abs();
            assert!(w < prev, "{w} !< {prev}");
            prev = w;
        }
    }
}
