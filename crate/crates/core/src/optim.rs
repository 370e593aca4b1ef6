//! Parameter updates.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Plain SGD with coupled weight decay: `p ← p − lr·(grad + wd·p)`.
///
/// Gradient slots are cleared afterwards. Every parameter must carry a gradient.
pub fn sgd_step(params: &mut [&mut Tensor], lr: f64, weight_decay: f64) -> Result<()> {
    check_grads(params)?;
    for p in params.iter_mut() {
        let g = p.take_grad().expect("checked");
        for (v, gv) in p.data_mut().iter_mut().zip(&g) {
            *v -= lr * (gv + weight_decay * *v);
        }
    }
    Ok(())
}

fn check_grads(params: &[&mut Tensor]) -> Result<()> {
    if let Some(i) = params.iter().position(|p| p.grad().is_none()) {
        return Err(Error::Contract(format!("parameter {i} has no gradient")));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

/// Stateful optimizer carried across every training stage of a run.
#[derive(Clone, Debug)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    weight_decay: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, weight_decay: f64) -> Self {
        Self {
            kind,
            lr,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut [&mut Tensor]) -> Result<()> {
        match self.kind {
            OptimizerKind::Sgd => {
                self.step += 1;
                sgd_step(params, self.lr, self.weight_decay)
            }
            OptimizerKind::Adam => self.adam(params),
        }
    }

    // Adam with L2 penalty folded into the gradient.
    fn adam(&mut self, params: &mut [&mut Tensor]) -> Result<()> {
        check_grads(params)?;
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.v = self.m.clone();
        }
        if self.m.len() != params.len() {
            return Err(Error::Contract(format!(
                "optimizer tracks {} parameters, got {}",
                self.m.len(),
                params.len()
            )));
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for ((p, m), v) in params.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let g = p.take_grad().expect("checked");
            for (i, val) in p.data_mut().iter_mut().enumerate() {
                let gi = g[i] + self.weight_decay * *val;
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                *val -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
