use super::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum OptimizerKind {
    Adam { beta1: f64, beta2: f64, eps: f64 },
    SgdMomentum { momentum: f64 },
}

impl OptimizerKind {
    pub fn adam() -> Self {
        OptimizerKind::Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }

    pub fn sgd(momentum: f64) -> Self {
        OptimizerKind::SgdMomentum { momentum }
    }
}

/// Per-parameter moment buffers plus the shared step counter.
///
/// Buffers are indexed like the parameter slice passed to [`step`](Self::step);
/// the first call fixes their shapes.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub weight_decay: f64,
    pub step: u64,
    /// Adam first moment, or the SGD momentum buffer.
    pub first: Vec<Tensor>,
    /// Adam second moment; empty for SGD.
    pub second: Vec<Tensor>,
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        Self { kind, lr, weight_decay: 0.0, step: 0, first: Vec::new(), second: Vec::new() }
    }

    fn ensure_buffers(&mut self, params: &[Tensor]) -> Result<()> {
        if self.first.is_empty() {
            self.first = params.iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect();
            if matches!(self.kind, OptimizerKind::Adam { .. }) {
                self.second = self.first.clone();
            }
        }
        if self.first.len() != params.len() {
            return Err(Error::dim(
                "optimizer_step",
                format!("{} moment buffers for {} parameters", self.first.len(), params.len()),
            ));
        }
        for (i, (b, p)) in self.first.iter().zip(params).enumerate() {
            if b.shape() != p.shape() {
                return Err(Error::dim("optimizer_step", format!("parameter {i}: buffer {:?} vs {:?}", b.shape(), p.shape())));
            }
        }
        Ok(())
    }

    /// Applies one update. `None` gradients mark parameters that are not
    /// being trained; they and their buffers are left untouched.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Option<Tensor>]) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::dim("optimizer_step", format!("{} gradients for {} parameters", grads.len(), params.len())));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if let Some(g) = g {
                if g.shape() != p.shape() {
                    return Err(Error::dim("optimizer_step", format!("parameter {i}: grad {:?} vs {:?}", g.shape(), p.shape())));
                }
            }
        }
        self.ensure_buffers(params)?;
        self.step += 1;
        let lr = self.lr;
        let wd = self.weight_decay;
        match self.kind {
            OptimizerKind::Adam { beta1, beta2, eps } => {
                let t = self.step as i32;
                let c1 = 1.0 - beta1.powi(t);
                let c2 = 1.0 - beta2.powi(t);
                for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
                    let Some(g) = g else { continue };
                    let m = self.first[i].data_mut();
                    let v = self.second[i].data_mut();
                    for (j, (theta, &gj)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                        let gj = gj + wd * *theta;
                        m[j] = beta1 * m[j] + (1.0 - beta1) * gj;
                        v[j] = beta2 * v[j] + (1.0 - beta2) * gj * gj;
                        let mhat = m[j] / c1;
                        let vhat = v[j] / c2;
                        *theta -= lr * mhat / (vhat.sqrt() + eps);
                    }
                }
            }
            OptimizerKind::SgdMomentum { momentum } => {
                for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
                    let Some(g) = g else { continue };
                    let buf = self.first[i].data_mut();
                    for (j, (theta, &gj)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                        let gj = gj + wd * *theta;
                        buf[j] = momentum * buf[j] + gj;
                        *theta -= lr * buf[j];
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut st = OptimizerState::new(OptimizerKind::adam(), 0.001);
        let mut p = vec![Tensor::scalar(0.0)];
        st.step(&mut p, &[Some(Tensor::scalar(1.0))]).unwrap();
        // m̂ = 1, v̂ = 1  =>  Δ = -0.001 / (1 + 1e-8)
        let expected = -0.001 / (1.0 + 1e-8);
        assert!((p[0].data()[0] - expected).abs() < 1e-15);
        assert!((p[0].data()[0] + 0.000999999).abs() < 1e-9);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        for kind in [OptimizerKind::adam(), OptimizerKind::sgd(0.9)] {
            let mut st = OptimizerState::new(kind, 0.1);
            let mut p = vec![Tensor::from_vec(vec![0.3, -1.2])];
            for _ in 0..3 {
                st.step(&mut p, &[Some(Tensor::zeros([2]))]).unwrap();
            }
            assert!((p[0].data()[0] - 0.3).abs() < 1e-12);
            assert!((p[0].data()[1] + 1.2).abs() < 1e-12);
        }
    }

    #[test]
    fn sgd_momentum_two_steps() {
        let mut st = OptimizerState::new(OptimizerKind::sgd(0.9), 0.1);
        let mut p = vec![Tensor::scalar(0.0)];
        st.step(&mut p, &[Some(Tensor::scalar(1.0))]).unwrap();
        st.step(&mut p, &[Some(Tensor::scalar(1.0))]).unwrap();
        // buf: 1 then 1.9; Δ = -0.1 - 0.19
        assert!((p[0].data()[0] + 0.29).abs() < 1e-12);
        assert_eq!(st.step, 2);
    }

    #[test]
    fn mismatched_shapes_rejected() {
        let mut st = OptimizerState::new(OptimizerKind::adam(), 0.1);
        let mut p = vec![Tensor::zeros([2])];
        assert!(matches!(st.step(&mut p, &[Some(Tensor::zeros([3]))]), Err(Error::Dimension { .. })));
        st.step(&mut p, &[Some(Tensor::zeros([2]))]).unwrap();
        let mut q = vec![Tensor::zeros([4])];
        assert!(st.step(&mut q, &[Some(Tensor::zeros([4]))]).is_err());
    }
}
