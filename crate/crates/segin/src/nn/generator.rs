//! The translation generator: a strided-convolution encoder, a bottleneck of
//! non-local layers interleaved with residual blocks, an image decoder with
//! U-net skip connections (nearest upsample + convolution, no deconvolution),
//! and an optional segmentation decoder sharing the same encoder.

use ndarray::Array4;
use rand_chacha::ChaCha8Rng;

use super::conv::Conv2d;
use super::norm::BatchNorm2d;
use super::{concat_channels, split_channels, upsample2x, upsample2x_backward};
use super::{NetError, NonLocal2d, ParamRef, Relu, Sigmoid};

/// Where the non-local layers sit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NonLocalPlacement {
    Bottleneck,
    BottleneckAndDecoder,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct GeneratorConfig {
    pub encoder_blocks: usize,
    pub base_channels: usize,
    pub nonlocal_count: usize,
    pub nonlocal_placement: NonLocalPlacement,
    pub residual_blocks_between_nonlocal: usize,
    pub multitask: bool,
    pub in_channels: usize,
    pub channel_cap: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            encoder_blocks: 6,
            base_channels: 16,
            nonlocal_count: 3,
            nonlocal_placement: NonLocalPlacement::Bottleneck,
            residual_blocks_between_nonlocal: 1,
            multitask: true,
            in_channels: 7,
            channel_cap: 128,
        }
    }
}

impl GeneratorConfig {
    fn width(&self, stage: usize) -> usize {
        (self.base_channels << stage).min(self.channel_cap)
    }

    /// Non-local layers at the bottleneck vs spread into the image decoder.
    fn nonlocal_split(&self) -> (usize, usize) {
        match self.nonlocal_placement {
            NonLocalPlacement::Bottleneck => (self.nonlocal_count, 0),
            NonLocalPlacement::BottleneckAndDecoder => {
                let bn = self.nonlocal_count.min(2);
                (bn, self.nonlocal_count - bn)
            }
        }
    }
}

#[derive(Debug)]
struct EncBlock {
    conv: Conv2d,
    bn: BatchNorm2d,
    relu: Relu,
}

impl EncBlock {
    fn new(cin: usize, cout: usize, rng: &mut ChaCha8Rng) -> Self {
        EncBlock { conv: Conv2d::new(cin, cout, 3, 2, 1, rng), bn: BatchNorm2d::new(cout), relu: Relu::default() }
    }

    fn forward(&mut self, x: &Array4<f32>, train: bool) -> Array4<f32> {
        let z = self.conv.forward(x, train);
        let z = self.bn.forward(&z, train);
        self.relu.forward(&z, train)
    }

    fn backward(&mut self, gy: &Array4<f32>) -> Array4<f32> {
        let g = self.relu.backward(gy);
        let g = self.bn.backward(&g);
        self.conv.backward(&g)
    }

    fn collect_params<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamRef<'a>>) {
        self.conv.collect_params(&format!("{prefix}.conv"), out);
        self.bn.collect_params(&format!("{prefix}.bn"), out);
    }
}

/// Two 3x3 convolution blocks with an identity shortcut.
#[derive(Debug)]
struct ResBlock {
    conv1: Conv2d,
    bn1: BatchNorm2d,
    relu1: Relu,
    conv2: Conv2d,
    bn2: BatchNorm2d,
    relu2: Relu,
}

impl ResBlock {
    fn new(channels: usize, rng: &mut ChaCha8Rng) -> Self {
        ResBlock {
            conv1: Conv2d::new(channels, channels, 3, 1, 1, rng),
            bn1: BatchNorm2d::new(channels),
            relu1: Relu::default(),
            conv2: Conv2d::new(channels, channels, 3, 1, 1, rng),
            bn2: BatchNorm2d::new(channels),
            relu2: Relu::default(),
        }
    }

    fn forward(&mut self, x: &Array4<f32>, train: bool) -> Array4<f32> {
        let h = self.conv1.forward(x, train);
        let h = self.bn1.forward(&h, train);
        let h = self.relu1.forward(&h, train);
        let h = self.conv2.forward(&h, train);
        let h = self.bn2.forward(&h, train);
        self.relu2.forward(&(&h + x), train)
    }

    fn backward(&mut self, gy: &Array4<f32>) -> Array4<f32> {
        let g_sum = self.relu2.backward(gy);
        let g = self.bn2.backward(&g_sum);
        let g = self.conv2.backward(&g);
        let g = self.relu1.backward(&g);
        let g = self.bn1.backward(&g);
        let g_branch = self.conv1.backward(&g);
        g_branch + g_sum
    }

    fn collect_params<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamRef<'a>>) {
        self.conv1.collect_params(&format!("{prefix}.conv1"), out);
        self.bn1.collect_params(&format!("{prefix}.bn1"), out);
        self.conv2.collect_params(&format!("{prefix}.conv2"), out);
        self.bn2.collect_params(&format!("{prefix}.bn2"), out);
    }
}

#[derive(Debug)]
enum BottleneckItem {
    NonLocal(NonLocal2d),
    Res(ResBlock),
}

/// One decoder stage: nearest upsample, optional skip concat (handled by the
/// caller), convolution, batch norm, ReLU, optional trailing non-local layer.
#[derive(Debug)]
struct DecStage {
    conv: Conv2d,
    bn: BatchNorm2d,
    relu: Relu,
    nl: Option<NonLocal2d>,
    skip_channels: usize,
}

impl DecStage {
    fn forward(&mut self, x: &Array4<f32>, train: bool) -> Array4<f32> {
        let z = self.conv.forward(x, train);
        let z = self.bn.forward(&z, train);
        let z = self.relu.forward(&z, train);
        match self.nl.as_mut() {
            Some(nl) => nl.forward(&z, train),
            None => z,
        }
    }

    fn backward(&mut self, gy: &Array4<f32>) -> Array4<f32> {
        let g = match self.nl.as_mut() {
            Some(nl) => nl.backward(gy),
            None => gy.clone(),
        };
        let g = self.relu.backward(&g);
        let g = self.bn.backward(&g);
        self.conv.backward(&g)
    }

    fn collect_params<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamRef<'a>>) {
        self.conv.collect_params(&format!("{prefix}.conv"), out);
        self.bn.collect_params(&format!("{prefix}.bn"), out);
        if let Some(nl) = self.nl.as_mut() {
            nl.collect_params(&format!("{prefix}.nl"), out);
        }
    }
}

#[derive(Debug)]
pub struct Generator {
    pub cfg: GeneratorConfig,
    enc: Vec<EncBlock>,
    bottleneck: Vec<BottleneckItem>,
    dec_img: Vec<DecStage>,
    head_img: Conv2d,
    head_img_act: Sigmoid,
    dec_seg: Vec<DecStage>,
    head_seg: Option<Conv2d>,
    head_seg_act: Sigmoid,
    enc_shapes: Vec<(usize, usize, usize, usize)>,
}

impl Generator {
    pub fn new(cfg: GeneratorConfig, rng: &mut ChaCha8Rng) -> Self {
        let b = cfg.encoder_blocks;
        assert!(b >= 1, "encoder needs at least one block");
        let mut enc = Vec::with_capacity(b);
        for i in 0..b {
            let cin = if i == 0 { cfg.in_channels } else { cfg.width(i - 1) };
            enc.push(EncBlock::new(cin, cfg.width(i), rng));
        }
        let bottleneck_ch = cfg.width(b - 1);
        let (nl_bottleneck, nl_decoder) = cfg.nonlocal_split();
        // With the non-local layers disabled the bottleneck is a pass-through
        // (the residual blocks exist only in between non-local layers).
        let mut bottleneck = Vec::new();
        if nl_bottleneck > 0 {
            bottleneck.push(BottleneckItem::NonLocal(NonLocal2d::new(bottleneck_ch, rng)));
            for _ in 1..nl_bottleneck {
                for _ in 0..cfg.residual_blocks_between_nonlocal {
                    bottleneck.push(BottleneckItem::Res(ResBlock::new(bottleneck_ch, rng)));
                }
                bottleneck.push(BottleneckItem::NonLocal(NonLocal2d::new(bottleneck_ch, rng)));
            }
        }

        let dec_width = |j: usize| {
            if j + 1 < b {
                cfg.width(b - 2 - j)
            } else {
                cfg.base_channels
            }
        };
        let mut dec_img = Vec::with_capacity(b);
        let mut d_in = bottleneck_ch;
        for j in 0..b {
            let skip_channels = if j + 1 < b { cfg.width(b - 2 - j) } else { 0 };
            let cout = dec_width(j);
            let nl = (j < nl_decoder).then(|| NonLocal2d::new(cout, rng));
            dec_img.push(DecStage {
                conv: Conv2d::new(d_in + skip_channels, cout, 3, 1, 1, rng),
                bn: BatchNorm2d::new(cout),
                relu: Relu::default(),
                nl,
                skip_channels,
            });
            d_in = cout;
        }
        let head_img = Conv2d::new(cfg.base_channels, 3, 3, 1, 1, rng);

        let mut dec_seg = Vec::new();
        let mut head_seg = None;
        if cfg.multitask {
            let mut s_in = bottleneck_ch;
            for j in 0..b {
                let cout = (dec_width(j) / 2).max(4);
                dec_seg.push(DecStage {
                    conv: Conv2d::new(s_in, cout, 3, 1, 1, rng),
                    bn: BatchNorm2d::new(cout),
                    relu: Relu::default(),
                    nl: None,
                    skip_channels: 0,
                });
                s_in = cout;
            }
            head_seg = Some(Conv2d::new(s_in, 1, 3, 1, 1, rng));
        }

        Generator {
            cfg,
            enc,
            bottleneck,
            dec_img,
            head_img,
            head_img_act: Sigmoid::default(),
            dec_seg,
            head_seg,
            head_seg_act: Sigmoid::default(),
            enc_shapes: Vec::new(),
        }
    }

    /// Run the generator. Input is the channel concatenation
    /// `[x | aux | valid-mask]`; outputs are the translated image in `[0, 1]`
    /// and, when the segmentation sub-task is enabled, the predicted mask.
    pub fn forward(
        &mut self,
        x: &Array4<f32>,
        train: bool,
    ) -> Result<(Array4<f32>, Option<Array4<f32>>), NetError> {
        let (_, c, h, w) = x.dim();
        if c != self.cfg.in_channels {
            return Err(NetError::BadChannels { expected: self.cfg.in_channels, got: c });
        }
        let factor = 1usize << self.cfg.encoder_blocks;
        if h % factor != 0 || w % factor != 0 {
            return Err(NetError::BadSpatialSize { h, w, blocks: self.cfg.encoder_blocks });
        }

        let mut e = Vec::with_capacity(self.enc.len());
        let mut z = x.clone();
        for block in self.enc.iter_mut() {
            z = block.forward(&z, train);
            e.push(z.clone());
        }
        self.enc_shapes = e.iter().map(|a| a.dim()).collect();

        for item in self.bottleneck.iter_mut() {
            z = match item {
                BottleneckItem::NonLocal(nl) => nl.forward(&z, train),
                BottleneckItem::Res(res) => res.forward(&z, train),
            };
        }
        let bottleneck_out = z.clone();

        let b = self.enc.len();
        for (j, stage) in self.dec_img.iter_mut().enumerate() {
            z = upsample2x(&z);
            if stage.skip_channels > 0 {
                z = concat_channels(&z, &e[b - 2 - j]);
            }
            z = stage.forward(&z, train);
        }
        let y = self.head_img.forward(&z, train);
        let y = self.head_img_act.forward(&y, train);

        let seg = if self.cfg.multitask {
            let mut s = bottleneck_out;
            for stage in self.dec_seg.iter_mut() {
                s = upsample2x(&s);
                s = stage.forward(&s, train);
            }
            let s = self.head_seg.as_mut().unwrap().forward(&s, train);
            Some(self.head_seg_act.forward(&s, train))
        } else {
            None
        };
        Ok((y, seg))
    }

    /// Accumulate parameter gradients for the given output gradients.
    pub fn backward(&mut self, gy: &Array4<f32>, gseg: Option<&Array4<f32>>) {
        let b = self.enc.len();
        let mut g_e: Vec<Array4<f32>> =
            self.enc_shapes.iter().map(|&d| Array4::zeros(d)).collect();

        // Image decoder path.
        let g = self.head_img_act.backward(gy);
        let mut g = self.head_img.backward(&g);
        for j in (0..b).rev() {
            let stage = &mut self.dec_img[j];
            let g_in = stage.backward(&g);
            let g_up = if stage.skip_channels > 0 {
                let up_channels = g_in.dim().1 - stage.skip_channels;
                let (g_up, g_skip) = split_channels(&g_in, up_channels);
                g_e[b - 2 - j] += &g_skip;
                g_up
            } else {
                g_in
            };
            g = upsample2x_backward(&g_up);
        }
        let mut g_bottleneck = g;

        // Segmentation decoder path joins at the bottleneck output.
        if self.cfg.multitask {
            if let Some(gseg) = gseg {
                let gs = self.head_seg_act.backward(gseg);
                let mut gs = self.head_seg.as_mut().unwrap().backward(&gs);
                for stage in self.dec_seg.iter_mut().rev() {
                    let g_in = stage.backward(&gs);
                    gs = upsample2x_backward(&g_in);
                }
                g_bottleneck += &gs;
            }
        }

        for item in self.bottleneck.iter_mut().rev() {
            g_bottleneck = match item {
                BottleneckItem::NonLocal(nl) => nl.backward(&g_bottleneck),
                BottleneckItem::Res(res) => res.backward(&g_bottleneck),
            };
        }
        g_e[b - 1] += &g_bottleneck;

        for i in (0..b).rev() {
            let gx = self.enc[i].backward(&g_e[i]);
            if i > 0 {
                let (head, _) = g_e.split_at_mut(i);
                head[i - 1] += &gx;
            }
        }
    }

    pub fn collect_params<'a>(&'a mut self, out: &mut Vec<ParamRef<'a>>) {
        for (i, block) in self.enc.iter_mut().enumerate() {
            block.collect_params(&format!("gen.enc{i}"), out);
        }
        for (i, item) in self.bottleneck.iter_mut().enumerate() {
            match item {
                BottleneckItem::NonLocal(nl) => nl.collect_params(&format!("gen.bott{i}.nl"), out),
                BottleneckItem::Res(res) => res.collect_params(&format!("gen.bott{i}.res"), out),
            }
        }
        for (j, stage) in self.dec_img.iter_mut().enumerate() {
            stage.collect_params(&format!("gen.dec{j}"), out);
        }
        self.head_img.collect_params("gen.head_img", out);
        for (j, stage) in self.dec_seg.iter_mut().enumerate() {
            stage.collect_params(&format!("gen.seg{j}"), out);
        }
        if let Some(head) = self.head_seg.as_mut() {
            head.collect_params("gen.head_seg", out);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn small_cfg() -> GeneratorConfig {
        GeneratorConfig {
            encoder_blocks: 3,
            base_channels: 4,
            nonlocal_count: 2,
            channel_cap: 16,
            ..Default::default()
        }
    }

    fn seeded_input(seed: f32) -> Array4<f32> {
        Array4::from_shape_fn((2, 7, 16, 16), |(n, c, i, j)| {
            ((n * 31 + c * 17 + i * 5 + j) % 23) as f32 * 0.04 + seed * 0.001
        })
    }

    #[test]
    fn forward_shapes_and_ranges() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut gen = Generator::new(small_cfg(), &mut rng);
        let x = seeded_input(0.0);
        let (y, seg) = gen.forward(&x, false).unwrap();
        assert_eq!(y.dim(), (2, 3, 16, 16));
        let seg = seg.unwrap();
        assert_eq!(seg.dim(), (2, 1, 16, 16));
        assert!(y.iter().all(|&v| (0.0..=1.0).contains(&v) && v.is_finite()));
        assert!(seg.iter().all(|&v| (0.0..=1.0).contains(&v) && v.is_finite()));
    }

    #[test]
    fn forward_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut gen = Generator::new(small_cfg(), &mut rng);
        let x = seeded_input(1.0);
        let (y1, _) = gen.forward(&x, false).unwrap();
        let (y2, _) = gen.forward(&x, false).unwrap();
        for (a, b) in y1.iter().zip(y2.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn aux_channels_condition_the_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut gen = Generator::new(small_cfg(), &mut rng);
        let x = seeded_input(0.0);
        let mut x2 = x.clone();
        // Perturb the aux channels (3..6) only.
        for n in 0..2 {
            for c in 3..6 {
                for i in 0..16 {
                    for j in 0..16 {
                        x2[(n, c, i, j)] = 1.0 - x2[(n, c, i, j)];
                    }
                }
            }
        }
        let (y1, _) = gen.forward(&x, false).unwrap();
        let (y2, _) = gen.forward(&x2, false).unwrap();
        let diff: f32 = (&y1 - &y2).mapv(f32::abs).sum();
        assert!(diff > 0.0, "auxiliary input does not affect the output");
    }

    #[test]
    fn rejects_bad_spatial_size() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut gen = Generator::new(small_cfg(), &mut rng);
        let x = Array4::zeros((1, 7, 12, 12));
        assert!(matches!(gen.forward(&x, false), Err(NetError::BadSpatialSize { .. })));
    }

    #[test]
    fn multitask_off_drops_seg_head() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cfg = GeneratorConfig { multitask: false, ..small_cfg() };
        let mut gen = Generator::new(cfg, &mut rng);
        let (_, seg) = gen.forward(&seeded_input(0.0), false).unwrap();
        assert!(seg.is_none());
        let mut params = Vec::new();
        gen.collect_params(&mut params);
        assert!(params.iter().all(|p| !p.name.contains("seg")));
    }

    #[test]
    fn backward_reduces_reconstruction_loss() {
        // One Adam step on an L1 target must reduce the loss: a coarse
        // end-to-end sanity check that gradients point downhill.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut gen = Generator::new(small_cfg(), &mut rng);
        let x = seeded_input(0.0);
        let target = Array4::from_elem((2, 3, 16, 16), 0.8f32);
        let seg_target = Array4::from_elem((2, 1, 16, 16), 1.0f32);

        let loss_of = |y: &Array4<f32>, s: &Array4<f32>| {
            (y - &target).mapv(f32::abs).mean().unwrap() + (s - &seg_target).mapv(f32::abs).mean().unwrap()
        };

        let (y, seg) = gen.forward(&x, true).unwrap();
        let seg = seg.unwrap();
        let before = loss_of(&y, &seg);
        let n_img = y.len() as f32;
        let n_seg = seg.len() as f32;
        let gy = (&y - &target).mapv(|v| v.signum() / n_img);
        let gs = (&seg - &seg_target).mapv(|v| v.signum() / n_seg);
        gen.backward(&gy, Some(&gs));

        let mut params = Vec::new();
        gen.collect_params(&mut params);
        let mut adam = crate::nn::Adam::new(5e-3, 0.5, 0.999);
        adam.step(&mut params);

        let (y2, seg2) = gen.forward(&x, false).unwrap();
        let after = loss_of(&y2, &seg2.unwrap());
        assert!(after < before, "loss went {before} -> {after}");
    }
}
