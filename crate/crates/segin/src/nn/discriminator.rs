//! Patch discriminator conditioned on the input image: spectrally-normalized
//! strided convolutions with leaky ReLU, sigmoid patch probabilities at the
//! end.

use ndarray::Array4;
use rand_chacha::ChaCha8Rng;

use super::spectral::SpectralConv2d;
use super::{LeakyRelu, NetError, ParamRef, Sigmoid, StateRef};

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DiscriminatorConfig {
    pub in_channels: usize,
    pub base_channels: usize,
    pub layers: usize,
    pub train_power_iters: usize,
    pub eval_power_iters: usize,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        DiscriminatorConfig {
            in_channels: 6,
            base_channels: 32,
            layers: 3,
            train_power_iters: 1,
            eval_power_iters: 20,
        }
    }
}

#[derive(Debug)]
pub struct Discriminator {
    pub cfg: DiscriminatorConfig,
    convs: Vec<(SpectralConv2d, LeakyRelu)>,
    head: SpectralConv2d,
    head_act: Sigmoid,
}

impl Discriminator {
    pub fn new(cfg: DiscriminatorConfig, rng: &mut ChaCha8Rng) -> Self {
        let mut convs = Vec::with_capacity(cfg.layers);
        let mut cin = cfg.in_channels;
        for i in 0..cfg.layers {
            let cout = (cfg.base_channels << i).min(cfg.base_channels * 8);
            convs.push((SpectralConv2d::new(cin, cout, 3, 2, 1, rng), LeakyRelu::default()));
            cin = cout;
        }
        let head = SpectralConv2d::new(cin, 1, 3, 1, 1, rng);
        Discriminator { cfg, convs, head, head_act: Sigmoid::default() }
    }

    /// Patch probabilities in `(0, 1)`. In training mode each forward runs
    /// one power iteration and persists the state; otherwise 20 iterations
    /// run on a scratch copy, leaving the state frozen.
    pub fn forward(&mut self, x: &Array4<f32>, train: bool) -> Result<Array4<f32>, NetError> {
        let (_, c, _, _) = x.dim();
        if c != self.cfg.in_channels {
            return Err(NetError::BadChannels { expected: self.cfg.in_channels, got: c });
        }
        let iters = if train { self.cfg.train_power_iters } else { self.cfg.eval_power_iters };
        let mut z = x.clone();
        for (conv, act) in self.convs.iter_mut() {
            z = conv.forward(&z, iters, train, train);
            z = act.forward(&z, train);
        }
        let z = self.head.forward(&z, iters, train, train);
        Ok(self.head_act.forward(&z, train))
    }

    /// Gradient with respect to the input (the generated-image path of the
    /// adversarial loss needs it); parameter gradients accumulate.
    pub fn backward(&mut self, gy: &Array4<f32>) -> Array4<f32> {
        let g = self.head_act.backward(gy);
        let mut g = self.head.backward(&g);
        for (conv, act) in self.convs.iter_mut().rev() {
            g = act.backward(&g);
            g = conv.backward(&g);
        }
        g
    }

    pub fn collect_params<'a>(&'a mut self, out: &mut Vec<ParamRef<'a>>) {
        for (i, (conv, _)) in self.convs.iter_mut().enumerate() {
            conv.collect_params(&format!("disc.c{i}"), out);
        }
        self.head.collect_params("disc.head", out);
    }

    pub fn collect_state<'a>(&'a mut self, out: &mut Vec<StateRef<'a>>) {
        for (i, (conv, _)) in self.convs.iter_mut().enumerate() {
            conv.collect_state(&format!("disc.c{i}"), out);
        }
        self.head.collect_state("disc.head", out);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn input(seed: usize) -> Array4<f32> {
        Array4::from_shape_fn((2, 6, 16, 16), |(n, c, i, j)| {
            ((n * 37 + c * 11 + i * 3 + j + seed) % 19) as f32 / 19.0
        })
    }

    #[test]
    fn outputs_strict_probabilities() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut d = Discriminator::new(DiscriminatorConfig::default(), &mut rng);
        let p = d.forward(&input(0), false).unwrap();
        assert_eq!(p.dim(), (2, 1, 2, 2));
        assert!(p.iter().all(|&v| v > 0.0 && v < 1.0 && v.is_finite()));
    }

    #[test]
    fn eval_mode_is_deterministic_and_frozen() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut d = Discriminator::new(DiscriminatorConfig::default(), &mut rng);
        let u_before: Vec<f32> = {
            let mut state = Vec::new();
            d.collect_state(&mut state);
            state.iter().flat_map(|s| s.value.iter().copied()).collect()
        };
        let p1 = d.forward(&input(1), false).unwrap();
        let p2 = d.forward(&input(1), false).unwrap();
        for (a, b) in p1.iter().zip(p2.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        let u_after: Vec<f32> = {
            let mut state = Vec::new();
            d.collect_state(&mut state);
            state.iter().flat_map(|s| s.value.iter().copied()).collect()
        };
        assert_eq!(u_before, u_after, "eval forward must not mutate power-iteration state");
    }

    #[test]
    fn train_mode_updates_state() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut d = Discriminator::new(DiscriminatorConfig::default(), &mut rng);
        let before: Vec<f32> = {
            let mut state = Vec::new();
            d.collect_state(&mut state);
            state.iter().flat_map(|s| s.value.iter().copied()).collect()
        };
        let _ = d.forward(&input(2), true).unwrap();
        let after: Vec<f32> = {
            let mut state = Vec::new();
            d.collect_state(&mut state);
            state.iter().flat_map(|s| s.value.iter().copied()).collect()
        };
        assert_ne!(before, after);
    }

    #[test]
    fn identical_pair_input_is_pure() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut d = Discriminator::new(DiscriminatorConfig::default(), &mut rng);
        let x = input(3);
        let y = x.clone();
        let p1 = d.forward(&x, false).unwrap();
        let p2 = d.forward(&y, false).unwrap();
        assert_eq!(p1, p2);
    }

    #[test]
    fn rejects_wrong_channel_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut d = Discriminator::new(DiscriminatorConfig::default(), &mut rng);
        let x = Array4::zeros((1, 5, 16, 16));
        assert!(matches!(d.forward(&x, false), Err(NetError::BadChannels { .. })));
    }
}
