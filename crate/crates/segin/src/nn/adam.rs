//! Adam with the GAN-convention betas (0.5, 0.999).

use std::collections::BTreeMap;

use super::ParamRef;

#[derive(Debug, Clone)]
struct Moments {
    m: Vec<f32>,
    v: Vec<f32>,
}

#[derive(Debug)]
pub struct Adam {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub t: u64,
    state: BTreeMap<String, Moments>,
}

impl Adam {
    pub fn new(lr: f32, beta1: f32, beta2: f32) -> Self {
        Adam { lr, beta1, beta2, eps: 1e-8, t: 0, state: BTreeMap::new() }
    }

    pub fn step(&mut self, params: &mut [ParamRef<'_>]) {
        self.t += 1;
        let b1t = 1.0 - self.beta1.powi(self.t as i32);
        let b2t = 1.0 - self.beta2.powi(self.t as i32);
        for p in params.iter_mut() {
            let entry = self
                .state
                .entry(p.name.clone())
                .or_insert_with(|| Moments { m: vec![0.0; p.value.len()], v: vec![0.0; p.value.len()] });
            for i in 0..p.value.len() {
                let g = p.grad[i];
                entry.m[i] = self.beta1 * entry.m[i] + (1.0 - self.beta1) * g;
                entry.v[i] = self.beta2 * entry.v[i] + (1.0 - self.beta2) * g * g;
                let m_hat = entry.m[i] / b1t;
                let v_hat = entry.v[i] / b2t;
                p.value[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }

    pub fn zero_grads(params: &mut [ParamRef<'_>]) {
        for p in params.iter_mut() {
            p.grad.fill(0.0);
        }
    }

    /// Serialize moments as named flat tensors (`<prefix>.m.<param>` and
    /// `<prefix>.v.<param>`).
    pub fn export(&self, prefix: &str) -> Vec<(String, Vec<usize>, Vec<f32>)> {
        let mut out = Vec::new();
        for (name, mom) in &self.state {
            out.push((format!("{prefix}.m.{name}"), vec![mom.m.len()], mom.m.clone()));
            out.push((format!("{prefix}.v.{name}"), vec![mom.v.len()], mom.v.clone()));
        }
        out
    }

    pub fn import(&mut self, prefix: &str, tensors: &[(String, Vec<usize>, Vec<f32>)]) {
        let m_pre = format!("{prefix}.m.");
        let v_pre = format!("{prefix}.v.");
        for (name, _, data) in tensors {
            if let Some(param) = name.strip_prefix(&m_pre) {
                self.state
                    .entry(param.to_string())
                    .or_insert_with(|| Moments { m: vec![0.0; data.len()], v: vec![0.0; data.len()] })
                    .m = data.clone();
            } else if let Some(param) = name.strip_prefix(&v_pre) {
                self.state
                    .entry(param.to_string())
                    .or_insert_with(|| Moments { m: vec![0.0; data.len()], v: vec![0.0; data.len()] })
                    .v = data.clone();
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut value = vec![1.0f32, -2.0, 3.0];
        let mut grad = vec![0.0f32; 3];
        let before = value.clone();
        let mut adam = Adam::new(1e-2, 0.5, 0.999);
        for _ in 0..3 {
            let mut params = vec![ParamRef {
                name: "p".into(),
                shape: vec![3],
                value: &mut value,
                grad: &mut grad,
            }];
            adam.step(&mut params);
        }
        assert_eq!(value, before);
    }

    #[test]
    fn descends_a_quadratic() {
        let mut value = vec![2.0f32];
        let mut grad = vec![0.0f32];
        let mut adam = Adam::new(0.1, 0.5, 0.999);
        for _ in 0..200 {
            grad[0] = 2.0 * value[0];
            let mut params = vec![ParamRef {
                name: "x".into(),
                shape: vec![1],
                value: &mut value,
                grad: &mut grad,
            }];
            adam.step(&mut params);
        }
        assert!(value[0].abs() < 0.05, "x = {}", value[0]);
    }

    #[test]
    fn export_import_round_trip() {
        let mut value = vec![1.0f32, 2.0];
        let mut grad = vec![0.5f32, -0.5];
        let mut adam = Adam::new(0.01, 0.5, 0.999);
        let mut params = vec![ParamRef { name: "p".into(), shape: vec![2], value: &mut value, grad: &mut grad }];
        adam.step(&mut params);
        let dump = adam.export("opt");
        let mut fresh = Adam::new(0.01, 0.5, 0.999);
        fresh.import("opt", &dump);
        fresh.t = adam.t;
        assert_eq!(fresh.export("opt"), dump);
    }
}
