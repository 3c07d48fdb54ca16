//! Alternating generator/discriminator training with label flipping,
//! per-step loss reporting, and bit-exact resumable checkpoints.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{s, Array3, Array4, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::checkpoint::{self, CheckpointError, NamedTensor};
use crate::data_pipeline::{
    inject_noise_sample, load_dataset, post_process, sample_rng, DataError, DatasetManifest,
    ForegroundPolicy, PostProcessConfig, TrainingSample,
};
use crate::features::{FeatureExtractor, FeatureExtractorConfig};
use crate::losses::{
    feature_loss, feature_loss_grad, gan_loss_d, gan_loss_d_grad, gan_loss_g, gan_loss_g_grad,
    nchw_to_hwc, recon_loss, recon_loss_grad, seg_att_loss, seg_att_loss_grad, seg_loss,
    seg_loss_grad, total_loss, tv_loss, tv_loss_grad, LossError, LossReport, LossWeights,
};
use crate::nn::{Adam, Discriminator, DiscriminatorConfig, Generator, GeneratorConfig, NetError};
use crate::semantic_match::{
    semantic_match, semantic_match_full, AuxiliarySample, CorrespondenceMap, MatchError, PatchSpec,
};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite loss in term `{term}` at step {step}")]
    NonFinite { term: &'static str, step: u64 },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Match(#[from] MatchError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

/// True on the steps whose discriminator batch trains with swapped labels:
/// with period `p`, every step where `step mod p == p - 1`.
pub fn label_schedule(step: u64, flip_period: u64) -> bool {
    assert!(flip_period >= 1, "flip period must be >= 1");
    step % flip_period == flip_period - 1
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct TrainConfig {
    pub lr_g: f64,
    pub lr_d: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub max_steps: Option<usize>,
    pub beta1: f64,
    pub beta2: f64,
    pub flip_period: u64,
    pub seed: u64,
    pub checkpoint_every: usize,
    pub weights: LossWeights,
    pub gen: GeneratorConfig,
    pub disc: DiscriminatorConfig,
    pub extractor: FeatureExtractorConfig,
    pub patch: PatchSpec,
    pub fg: ForegroundPolicy,
    pub post: PostProcessConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr_g: 2e-4,
            lr_d: 1.3e-5,
            batch_size: 4,
            epochs: 1,
            max_steps: None,
            beta1: 0.5,
            beta2: 0.999,
            flip_period: 3,
            seed: 0,
            checkpoint_every: 0,
            weights: LossWeights::default(),
            gen: GeneratorConfig::default(),
            disc: DiscriminatorConfig::default(),
            extractor: FeatureExtractorConfig::default(),
            patch: PatchSpec::default(),
            fg: ForegroundPolicy::default(),
            post: PostProcessConfig::default(),
        }
    }
}

impl TrainConfig {
    /// CPU-runnable defaults for a given square image size: the encoder depth
    /// keeps a 4x4 bottleneck and the matcher runs on a half-resolution grid.
    pub fn desk_default(image_size: usize, seed: u64) -> Self {
        let blocks = (image_size.trailing_zeros() as usize).saturating_sub(2).clamp(1, 6);
        let mut cfg = TrainConfig::default();
        cfg.seed = seed;
        cfg.gen.encoder_blocks = blocks;
        cfg.extractor.downsample_factor = 2;
        cfg.post.seed = seed;
        cfg
    }
}

/// A dataset with the expensive matching stage precomputed; per-epoch
/// corruptions are re-rolled from `(seed, epoch, index)` streams.
pub struct PreparedDataset {
    samples: Vec<PreparedSample>,
    pub image_size: usize,
}

struct PreparedSample {
    x: Array3<f32>,
    y: Array3<f32>,
    y_seg: ndarray::Array2<u8>,
    base_aux: AuxiliarySample,
    corr: CorrespondenceMap,
}

impl PreparedDataset {
    pub fn prepare(manifest: &DatasetManifest, cfg: &TrainConfig) -> Result<Self, TrainError> {
        let pairs = load_dataset(manifest)?;
        let mut samples = Vec::with_capacity(pairs.len());
        for (x, y) in pairs {
            let (base_aux, corr) = semantic_match_full(&x, &y, &cfg.extractor, &cfg.patch, &cfg.fg)?;
            let y_seg = crate::data_pipeline::extract_foreground_mask(&y, &cfg.fg);
            samples.push(PreparedSample { x, y, y_seg, base_aux, corr });
        }
        Ok(PreparedDataset { samples, image_size: manifest.image_size })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    fn training_sample(&self, idx: usize, epoch: u64, cfg: &TrainConfig) -> TrainingSample {
        let s = &self.samples[idx];
        let mut rng = sample_rng(cfg.seed, epoch, idx as u64);
        let aux = post_process(&s.base_aux, &s.corr, &s.y, &cfg.post, &mut rng);
        let aux = inject_noise_sample(&aux, &cfg.post, &mut rng);
        TrainingSample { x: s.x.clone(), y: s.y.clone(), y_seg: s.y_seg.clone(), aux }
    }
}

fn epoch_order(seed: u64, epoch: u64, n: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = sample_rng(seed, epoch, u32::MAX as u64);
    idx.shuffle(&mut rng);
    idx
}

fn hwc_into_batch(dst: &mut Array4<f32>, n: usize, c0: usize, img: &Array3<f32>) {
    let (h, w, c) = img.dim();
    for ch in 0..c {
        for i in 0..h {
            for j in 0..w {
                dst[(n, c0 + ch, i, j)] = img[(i, j, ch)];
            }
        }
    }
}

/// Pack `[x | aux | valid-mask]` into the generator's 7-channel input.
pub fn pack_generator_input(x: &Array3<f32>, aux: &AuxiliarySample) -> Array4<f32> {
    let (h, w, _) = x.dim();
    let mut out = Array4::zeros((1, 7, h, w));
    hwc_into_batch(&mut out, 0, 0, x);
    hwc_into_batch(&mut out, 0, 3, &aux.aux);
    for i in 0..h {
        for j in 0..w {
            out[(0, 6, i, j)] = aux.valid_mask[(i, j)] as f32;
        }
    }
    out
}

pub struct TrainOutcome {
    pub reports: Vec<LossReport>,
    pub checkpoint_path: PathBuf,
    pub csv_path: PathBuf,
}

pub struct Trainer {
    pub cfg: TrainConfig,
    pub gen: Generator,
    pub disc: Discriminator,
    adam_g: Adam,
    adam_d: Adam,
    extractor: FeatureExtractor<f32>,
    pub step: u64,
}

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Self {
        let mut rng_g = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng_g.set_stream(1);
        let mut rng_d = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng_d.set_stream(2);
        let gen = Generator::new(cfg.gen.clone(), &mut rng_g);
        let disc = Discriminator::new(cfg.disc.clone(), &mut rng_d);
        let adam_g = Adam::new(cfg.lr_g as f32, cfg.beta1 as f32, cfg.beta2 as f32);
        let adam_d = Adam::new(cfg.lr_d as f32, cfg.beta1 as f32, cfg.beta2 as f32);
        let extractor = FeatureExtractor::from_config(&cfg.extractor);
        Trainer { cfg, gen, disc, adam_g, adam_d, extractor, step: 0 }
    }

    fn check(&self, term: &'static str, v: f32) -> Result<f64, TrainError> {
        if !v.is_finite() {
            return Err(TrainError::NonFinite { term, step: self.step });
        }
        Ok(v as f64)
    }

    /// One discriminator update followed by one generator update.
    pub fn train_step(&mut self, batch: &[TrainingSample]) -> Result<LossReport, TrainError> {
        assert!(!batch.is_empty(), "batch must be non-empty");
        let n = batch.len();
        let (h, w, _) = batch[0].x.dim();

        let mut x3 = Array4::zeros((n, 3, h, w));
        let mut x_in = Array4::zeros((n, 7, h, w));
        let mut y_t = Array4::zeros((n, 3, h, w));
        let mut seg_t = Array4::zeros((n, 1, h, w));
        for (bi, sample) in batch.iter().enumerate() {
            hwc_into_batch(&mut x3, bi, 0, &sample.x);
            hwc_into_batch(&mut x_in, bi, 0, &sample.x);
            hwc_into_batch(&mut x_in, bi, 3, &sample.aux.aux);
            hwc_into_batch(&mut y_t, bi, 0, &sample.y);
            for i in 0..h {
                for j in 0..w {
                    x_in[(bi, 6, i, j)] = sample.aux.valid_mask[(i, j)] as f32;
                    seg_t[(bi, 0, i, j)] = sample.y_seg[(i, j)] as f32;
                }
            }
        }

        let flipped = label_schedule(self.step, self.cfg.flip_period);
        let wts = self.cfg.weights;
        let use_gan = wts.w3_gan != 0.0;
        let multitask = self.cfg.gen.multitask;

        let (y_hat, seg_hat) = self.gen.forward(&x_in, true)?;

        // Discriminator update on [real | fake] in one pass.
        let gan_d = if use_gan {
            let mut d_params = Vec::new();
            self.disc.collect_params(&mut d_params);
            Adam::zero_grads(&mut d_params);
            drop(d_params);

            let real_in = ndarray::concatenate(Axis(1), &[x3.view(), y_t.view()]).unwrap();
            let fake_in = ndarray::concatenate(Axis(1), &[x3.view(), y_hat.view()]).unwrap();
            let d_in = ndarray::concatenate(Axis(0), &[real_in.view(), fake_in.view()]).unwrap();
            let probs = self.disc.forward(&d_in, true)?;
            let p_real = probs.slice(s![..n, .., .., ..]).to_owned();
            let p_fake = probs.slice(s![n.., .., .., ..]).to_owned();
            let val = gan_loss_d(&p_real.view().into_dyn(), &p_fake.view().into_dyn(), flipped)?;
            let val = self.check("gan_d", val)?;
            let (g_real, g_fake) =
                gan_loss_d_grad(&p_real.view().into_dyn(), &p_fake.view().into_dyn(), flipped)?;
            let mut g_probs = Array4::zeros(probs.dim());
            g_probs
                .slice_mut(s![..n, .., .., ..])
                .assign(&g_real.into_dimensionality::<ndarray::Ix4>().unwrap());
            g_probs
                .slice_mut(s![n.., .., .., ..])
                .assign(&g_fake.into_dimensionality::<ndarray::Ix4>().unwrap());
            let _ = self.disc.backward(&g_probs);

            let mut d_params = Vec::new();
            self.disc.collect_params(&mut d_params);
            self.adam_d.step(&mut d_params);
            val
        } else {
            0.0
        };

        // Generator update.
        let mut g_params = Vec::new();
        self.gen.collect_params(&mut g_params);
        Adam::zero_grads(&mut g_params);
        drop(g_params);

        let recon = recon_loss(&y_hat.view().into_dyn(), &y_t.view().into_dyn())?;
        let recon = self.check("recon", recon)?;
        let mut g_yhat = recon_loss_grad(&y_hat.view().into_dyn(), &y_t.view().into_dyn())?
            .into_dimensionality::<ndarray::Ix4>()
            .unwrap()
            * (wts.w1_recon as f32);

        let inv_n = 1.0 / n as f32;
        let mut feature_acc = 0.0f32;
        let mut tv_acc = 0.0f32;
        for bi in 0..n {
            let y_hat_i = nchw_to_hwc(&y_hat, bi);
            let y_i = nchw_to_hwc(&y_t, bi);
            if wts.w2_feature != 0.0 {
                feature_acc += feature_loss(&y_hat_i, &y_i, &self.extractor)?;
                let g = feature_loss_grad(&y_hat_i, &y_i, &self.extractor)?;
                add_hwc_scaled(&mut g_yhat, bi, &g, wts.w2_feature as f32 * inv_n);
            }
            if wts.w6_tv != 0.0 {
                tv_acc += tv_loss(&y_hat_i);
                let g = tv_loss_grad(&y_hat_i);
                add_hwc_scaled(&mut g_yhat, bi, &g, wts.w6_tv as f32 * inv_n);
            }
        }
        let feature = self.check("feature", feature_acc * inv_n)?;
        let tv = self.check("tv", tv_acc * inv_n)?;

        let (mut seg_val, mut seg_att_val) = (0.0f64, 0.0f64);
        let mut g_seghat: Option<Array4<f32>> = None;
        if multitask {
            let seg_hat_t = seg_hat.as_ref().expect("multitask forward returns a mask");
            let sv = seg_loss(&seg_hat_t.view().into_dyn(), &seg_t.view().into_dyn())?;
            seg_val = self.check("seg", sv)?;
            let mut gs = seg_loss_grad(&seg_hat_t.view().into_dyn(), &seg_t.view().into_dyn())?
                .into_dimensionality::<ndarray::Ix4>()
                .unwrap()
                * (wts.w4_seg as f32);
            let mut att_acc = 0.0f32;
            if wts.w5_seg_att != 0.0 {
                for bi in 0..n {
                    let seg_hat_i = nchw_to_hwc(seg_hat_t, bi);
                    let y_hat_i = nchw_to_hwc(&y_hat, bi);
                    let seg_i = nchw_to_hwc(&seg_t, bi);
                    let y_i = nchw_to_hwc(&y_t, bi);
                    att_acc += seg_att_loss(&seg_hat_i, &y_hat_i, &seg_i, &y_i)?;
                    let (g_s, g_y) = seg_att_loss_grad(&seg_hat_i, &y_hat_i, &seg_i, &y_i)?;
                    add_hwc_scaled(&mut gs, bi, &g_s, wts.w5_seg_att as f32 * inv_n);
                    add_hwc_scaled(&mut g_yhat, bi, &g_y, wts.w5_seg_att as f32 * inv_n);
                }
            }
            seg_att_val = self.check("seg_att", att_acc * inv_n)?;
            g_seghat = Some(gs);
        }

        let gan_g = if use_gan {
            let fake_in = ndarray::concatenate(Axis(1), &[x3.view(), y_hat.view()]).unwrap();
            let probs = self.disc.forward(&fake_in, true)?;
            let val = gan_loss_g(&probs.view().into_dyn())?;
            let val = self.check("gan_g", val)?;
            let g_probs = gan_loss_g_grad(&probs.view().into_dyn())?
                .into_dimensionality::<ndarray::Ix4>()
                .unwrap();
            let g_input = self.disc.backward(&g_probs);
            let g_fake = g_input.slice(s![.., 3..6, .., ..]).to_owned();
            g_yhat += &(g_fake * (wts.w3_gan as f32));
            val
        } else {
            0.0
        };

        self.gen.backward(&g_yhat, g_seghat.as_ref());
        let mut g_params = Vec::new();
        self.gen.collect_params(&mut g_params);
        self.adam_g.step(&mut g_params);

        let mut report = LossReport {
            step: self.step,
            recon,
            feature,
            gan_g,
            gan_d,
            seg: seg_val,
            seg_att: seg_att_val,
            tv,
            ..Default::default()
        };
        report.total = total_loss(&report, &wts)?;
        if let Some(term) = report.non_finite_term() {
            return Err(TrainError::NonFinite { term, step: self.step });
        }
        self.step += 1;
        Ok(report)
    }

    /// Run the training loop, writing a loss CSV and checkpoints under
    /// `out_dir`. Resumes from the current `step` when the trainer was loaded
    /// from a checkpoint.
    pub fn train(&mut self, data: &PreparedDataset, out_dir: &Path) -> Result<TrainOutcome, TrainError> {
        if data.is_empty() {
            return Err(TrainError::EmptyDataset);
        }
        fs::create_dir_all(out_dir).map_err(|e| TrainError::Io { path: out_dir.to_path_buf(), source: e })?;
        let batch = self.cfg.batch_size.min(data.len()).max(1);
        let steps_per_epoch = (data.len() / batch).max(1);
        let total_steps = self
            .cfg
            .max_steps
            .unwrap_or(self.cfg.epochs * steps_per_epoch) as u64;

        let mut reports = Vec::new();
        let mut csv = String::from(LossReport::CSV_HEADER);
        csv.push('\n');
        while self.step < total_steps {
            let epoch = self.step / steps_per_epoch as u64;
            let slot = (self.step % steps_per_epoch as u64) as usize;
            let order = epoch_order(self.cfg.seed, epoch, data.len());
            let samples: Vec<TrainingSample> = order[slot * batch..(slot + 1) * batch]
                .iter()
                .map(|&idx| data.training_sample(idx, epoch, &self.cfg))
                .collect();
            let report = self.train_step(&samples)?;
            csv.push_str(&report.to_csv_row());
            csv.push('\n');
            reports.push(report);
            if self.cfg.checkpoint_every > 0 && self.step % self.cfg.checkpoint_every as u64 == 0 {
                self.save_checkpoint(&out_dir.join(format!("model_step{}.segar", self.step)))?;
            }
        }
        let csv_path = out_dir.join("loss.csv");
        fs::write(&csv_path, csv).map_err(|e| TrainError::Io { path: csv_path.clone(), source: e })?;
        let checkpoint_path = out_dir.join("model_final.segar");
        self.save_checkpoint(&checkpoint_path)?;
        Ok(TrainOutcome { reports, checkpoint_path, csv_path })
    }

    /// Inference: match against the reference (no corruption) and run the
    /// generator.
    pub fn translate(
        &mut self,
        x: &Array3<f32>,
        r: &Array3<f32>,
    ) -> Result<(Array3<f32>, Option<Array3<f32>>, AuxiliarySample), TrainError> {
        let aux = semantic_match(x, r, &self.cfg.extractor, &self.cfg.patch, &self.cfg.fg)?;
        let x_in = pack_generator_input(x, &aux);
        let (y, seg) = self.gen.forward(&x_in, false)?;
        Ok((nchw_to_hwc(&y, 0), seg.map(|s| nchw_to_hwc(&s, 0)), aux))
    }

    fn named_tensors(&mut self) -> Vec<NamedTensor> {
        let mut tensors = Vec::new();
        let mut params = Vec::new();
        self.gen.collect_params(&mut params);
        for p in &params {
            tensors.push((p.name.clone(), p.shape.clone(), p.value.to_vec()));
        }
        drop(params);
        let mut params = Vec::new();
        self.disc.collect_params(&mut params);
        for p in &params {
            tensors.push((p.name.clone(), p.shape.clone(), p.value.to_vec()));
        }
        drop(params);
        let mut state = Vec::new();
        self.disc.collect_state(&mut state);
        for s in &state {
            tensors.push((s.name.clone(), s.shape.clone(), s.value.to_vec()));
        }
        drop(state);
        tensors.extend(self.adam_g.export("adam_g"));
        tensors.extend(self.adam_d.export("adam_d"));
        tensors
    }

    pub fn save_checkpoint(&mut self, path: &Path) -> Result<(), TrainError> {
        let tensors = self.named_tensors();
        let header = serde_json::json!({
            "version": 1,
            "step": self.step,
            "adam_t_g": self.adam_g.t,
            "adam_t_d": self.adam_d.t,
            "config": self.cfg,
        });
        checkpoint::save_archive(path, &header, &tensors)?;
        Ok(())
    }

    pub fn load_checkpoint(path: &Path) -> Result<Trainer, TrainError> {
        let (header, tensors) = checkpoint::load_archive(path)?;
        let cfg: TrainConfig = serde_json::from_value(header["config"].clone())
            .map_err(CheckpointError::Header)?;
        let mut trainer = Trainer::new(cfg);
        trainer.step = header["step"].as_u64().unwrap_or(0);
        trainer.adam_g.t = header["adam_t_g"].as_u64().unwrap_or(0);
        trainer.adam_d.t = header["adam_t_d"].as_u64().unwrap_or(0);

        let mut params = Vec::new();
        trainer.gen.collect_params(&mut params);
        let mut targets: Vec<(String, &mut [f32])> =
            params.iter_mut().map(|p| (p.name.clone(), &mut *p.value)).collect();
        checkpoint::assign_by_name(&tensors, &mut targets)?;
        drop(targets);
        drop(params);

        let mut params = Vec::new();
        trainer.disc.collect_params(&mut params);
        let mut targets: Vec<(String, &mut [f32])> =
            params.iter_mut().map(|p| (p.name.clone(), &mut *p.value)).collect();
        checkpoint::assign_by_name(&tensors, &mut targets)?;
        drop(targets);
        drop(params);

        let mut state = Vec::new();
        trainer.disc.collect_state(&mut state);
        let mut targets: Vec<(String, &mut [f32])> =
            state.iter_mut().map(|p| (p.name.clone(), &mut *p.value)).collect();
        checkpoint::assign_by_name(&tensors, &mut targets)?;
        drop(targets);
        drop(state);

        trainer.adam_g.import("adam_g", &tensors);
        trainer.adam_d.import("adam_d", &tensors);
        Ok(trainer)
    }
}

fn add_hwc_scaled(dst: &mut Array4<f32>, bi: usize, g: &Array3<f32>, scale: f32) {
    let (h, w, c) = g.dim();
    for ch in 0..c {
        for i in 0..h {
            for j in 0..w {
                dst[(bi, ch, i, j)] += g[(i, j, ch)] * scale;
            }
        }
    }
}

/// Convenience wrapper: prepare a dataset from a manifest and train.
pub fn train(cfg: TrainConfig, manifest: &DatasetManifest, out_dir: &Path) -> Result<TrainOutcome, TrainError> {
    let data = PreparedDataset::prepare(manifest, &cfg)?;
    let mut trainer = Trainer::new(cfg);
    trainer.train(&data, out_dir)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data_pipeline::{synth_shapes_dataset, Split};
    use crate::features::ExtractorKind;

    #[test]
    fn label_schedule_contract() {
        let flags: Vec<bool> = (0..9).map(|s| label_schedule(s, 3)).collect();
        assert_eq!(
            flags,
            vec![false, false, true, false, false, true, false, false, true]
        );
        assert!(label_schedule(0, 1));
        assert!(label_schedule(5, 1));
    }

    fn tiny_cfg(seed: u64) -> TrainConfig {
        let mut cfg = TrainConfig::desk_default(16, seed);
        cfg.gen.base_channels = 4;
        cfg.gen.channel_cap = 16;
        cfg.gen.nonlocal_count = 1;
        cfg.disc.base_channels = 4;
        cfg.disc.layers = 2;
        cfg.extractor.kind = ExtractorKind::ColorPool;
        cfg.batch_size = 2;
        cfg.max_steps = Some(3);
        cfg
    }

    fn tiny_data(cfg: &TrainConfig, seed: u64) -> (tempfile::TempDir, PreparedDataset) {
        let dir = tempfile::tempdir().unwrap();
        let manifest = synth_shapes_dataset(4, 16, seed, dir.path(), Split::Train).unwrap();
        let data = PreparedDataset::prepare(&manifest, cfg).unwrap();
        (dir, data)
    }

    #[test]
    fn zero_weights_leave_generator_unchanged() {
        let mut cfg = tiny_cfg(1);
        cfg.weights = LossWeights {
            w1_recon: 0.0,
            w2_feature: 0.0,
            w3_gan: 0.0,
            w4_seg: 0.0,
            w5_seg_att: 0.0,
            w6_tv: 0.0,
        };
        let (_dir, data) = tiny_data(&cfg, 2);
        let mut trainer = Trainer::new(cfg.clone());
        let before: Vec<f32> = {
            let mut params = Vec::new();
            trainer.gen.collect_params(&mut params);
            params.iter().flat_map(|p| p.value.iter().copied()).collect()
        };
        let batch: Vec<TrainingSample> = (0..2).map(|i| data.training_sample(i, 0, &cfg)).collect();
        let report = trainer.train_step(&batch).unwrap();
        assert_eq!(report.total, 0.0);
        let after: Vec<f32> = {
            let mut params = Vec::new();
            trainer.gen.collect_params(&mut params);
            params.iter().flat_map(|p| p.value.iter().copied()).collect()
        };
        assert_eq!(before, after);
    }

    #[test]
    fn identical_seeds_produce_identical_reports() {
        let cfg = tiny_cfg(7);
        let (_dir, data) = tiny_data(&cfg, 3);
        let out1 = tempfile::tempdir().unwrap();
        let out2 = tempfile::tempdir().unwrap();
        let r1 = Trainer::new(cfg.clone()).train(&data, out1.path()).unwrap();
        let r2 = Trainer::new(cfg.clone()).train(&data, out2.path()).unwrap();
        let csv1 = fs::read(out1.path().join("loss.csv")).unwrap();
        let csv2 = fs::read(out2.path().join("loss.csv")).unwrap();
        assert_eq!(csv1, csv2);
        assert_eq!(r1.reports.len(), 3);
        assert_eq!(r2.reports.len(), 3);
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let mut cfg = tiny_cfg(11);
        cfg.max_steps = Some(4);
        cfg.checkpoint_every = 2;
        let (_dir, data) = tiny_data(&cfg, 5);

        let out_full = tempfile::tempdir().unwrap();
        let full = Trainer::new(cfg.clone()).train(&data, out_full.path()).unwrap();

        // Resume from the step-2 checkpoint and run to completion.
        let out_resume = tempfile::tempdir().unwrap();
        let mut resumed = Trainer::load_checkpoint(&out_full.path().join("model_step2.segar")).unwrap();
        assert_eq!(resumed.step, 2);
        let tail = resumed.train(&data, out_resume.path()).unwrap();
        assert_eq!(tail.reports.len(), 2);
        for (a, b) in full.reports[2..].iter().zip(tail.reports.iter()) {
            assert_eq!(a.to_csv_row(), b.to_csv_row(), "resumed run diverged");
        }
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let cfg = tiny_cfg(13);
        let (_dir, data) = tiny_data(&cfg, 6);
        let mut trainer = Trainer::new(cfg.clone());
        let batch: Vec<TrainingSample> = (0..2).map(|i| data.training_sample(i, 0, &cfg)).collect();
        trainer.train_step(&batch).unwrap();

        let ckpt_dir = tempfile::tempdir().unwrap();
        let path = ckpt_dir.path().join("m.segar");
        trainer.save_checkpoint(&path).unwrap();
        let mut loaded = Trainer::load_checkpoint(&path).unwrap();
        assert_eq!(loaded.step, trainer.step);

        let dump = |t: &mut Trainer| -> Vec<(String, Vec<f32>)> {
            t.named_tensors().into_iter().map(|(n, _, d)| (n, d)).collect()
        };
        let a = dump(&mut trainer);
        let b = dump(&mut loaded);
        assert_eq!(a.len(), b.len());
        for ((n1, d1), (n2, d2)) in a.iter().zip(b.iter()) {
            assert_eq!(n1, n2);
            for (x, y) in d1.iter().zip(d2.iter()) {
                assert_eq!(x.to_bits(), y.to_bits(), "tensor {n1} differs");
            }
        }
    }

    #[test]
    fn translate_shapes_and_determinism() {
        let cfg = tiny_cfg(17);
        let (_dir, data) = tiny_data(&cfg, 7);
        let mut trainer = Trainer::new(cfg.clone());
        let x = data.samples[0].x.clone();
        let r = data.samples[1].y.clone();
        let (y1, seg1, aux) = trainer.translate(&x, &r).unwrap();
        assert_eq!(y1.dim(), (16, 16, 3));
        assert_eq!(seg1.as_ref().unwrap().dim(), (16, 16, 1));
        assert_eq!(aux.aux.dim(), (16, 16, 3));
        let (y2, _, _) = trainer.translate(&x, &r).unwrap();
        for (a, b) in y1.iter().zip(y2.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }
}
