//! Adam over named tensors, with state that can be written to and restored
//! from a checkpoint.

use std::path::Path;

use tch::{Kind, Tensor};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            beta1: 0.5,
            beta2: 0.9,
            eps: 1e-8,
        }
    }
}

#[derive(Debug)]
pub struct Adam {
    cfg: AdamConfig,
    params: Vec<(String, Tensor)>,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
    steps: i64,
}

impl Adam {
    pub fn new(params: Vec<(String, Tensor)>, cfg: AdamConfig) -> Self {
        let first = params.iter().map(|(_, p)| p.zeros_like()).collect();
        let second = params.iter().map(|(_, p)| p.zeros_like()).collect();
        Self {
            cfg,
            params,
            first,
            second,
            steps: 0,
        }
    }

    pub fn steps(&self) -> i64 {
        self.steps
    }

    pub fn zero_grad(&mut self) {
        for (_, p) in &mut self.params {
            let mut grad = p.grad();
            if grad.defined() {
                let _ = grad.detach_().zero_();
            }
        }
    }

    pub fn backward_step(&mut self, loss: &Tensor) {
        self.zero_grad();
        loss.backward();
        self.step();
    }

    pub fn step(&mut self) {
        self.steps += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.cfg;
        let bias1 = 1.0 - beta1.powi(self.steps as i32);
        let bias2 = 1.0 - beta2.powi(self.steps as i32);
        tch::no_grad(|| {
            for (((_, p), m), v) in self.params.iter_mut().zip(&mut self.first).zip(&mut self.second) {
                let grad = p.grad();
                if !grad.defined() {
                    continue;
                }
                let _ = m.g_mul_scalar_(beta1).g_add_(&(&grad * (1.0 - beta1)));
                let _ = v.g_mul_scalar_(beta2).g_add_(&(grad.square() * (1.0 - beta2)));
                let update = (&*m / bias1) / ((&*v / bias2).sqrt() + eps) * lr;
                let _ = p.g_sub_(&update);
            }
        });
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut named: Vec<(String, Tensor)> = Vec::with_capacity(2 * self.params.len() + 1);
        for ((name, _), (m, v)) in self.params.iter().zip(self.first.iter().zip(&self.second)) {
            named.push((format!("m.{name}"), m.shallow_clone()));
            named.push((format!("v.{name}"), v.shallow_clone()));
        }
        named.push(("steps".into(), Tensor::from_slice(&[self.steps])));
        Tensor::write_safetensors(&named, path)?;
        Ok(())
    }

    pub fn load(&mut self, path: &Path) -> Result<()> {
        let stored: std::collections::HashMap<String, Tensor> = Tensor::read_safetensors(path)?.into_iter().collect();
        let fetch = |key: &str, like: &Tensor| -> Result<Tensor> {
            let t = stored
                .get(key)
                .ok_or_else(|| Error::CheckpointIncompatible(format!("optimizer state lacks {key}")))?;
            if t.size() != like.size() {
                return Err(Error::CheckpointIncompatible(format!("optimizer state {key} has wrong shape")));
            }
            Ok(t.to_kind(like.kind()))
        };
        for (i, (name, p)) in self.params.iter().enumerate() {
            self.first[i] = fetch(&format!("m.{name}"), p)?;
            self.second[i] = fetch(&format!("v.{name}"), p)?;
        }
        self.steps = stored
            .get("steps")
            .map(|t| t.to_kind(Kind::Int64).int64_value(&[0]))
            .ok_or_else(|| Error::CheckpointIncompatible("optimizer state lacks steps".into()))?;
        Ok(())
    }
}
