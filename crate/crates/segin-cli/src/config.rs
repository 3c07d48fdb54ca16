//! Flat key=value configuration files and their mapping onto the train
//! config. CLI flags override file values, which override defaults.

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{bail, Context, Result};
use segin::features::ExtractorKind;
use segin::nn::NonLocalPlacement;
use segin::TrainConfig;

/// Parse an INI-style file: one `key = value` per line, `#` comments.
pub fn parse_file(path: &Path) -> Result<BTreeMap<String, String>> {
    let body = std::fs::read_to_string(path).with_context(|| format!("cannot read config {}", path.display()))?;
    let mut out = BTreeMap::new();
    for (lineno, raw) in body.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            bail!("{}:{}: expected `key = value`, got `{raw}`", path.display(), lineno + 1);
        };
        out.insert(key.trim().to_string(), value.trim().to_string());
    }
    Ok(out)
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse::<T>()
        .map_err(|e| anyhow::anyhow!("config key `{key}`: bad value `{value}`: {e}"))
}

/// Apply file entries onto a train config; unknown keys are rejected.
pub fn apply(cfg: &mut TrainConfig, entries: &BTreeMap<String, String>) -> Result<()> {
    for (key, value) in entries {
        match key.as_str() {
            "seed" => cfg.seed = parse(key, value)?,
            "steps" => cfg.max_steps = Some(parse(key, value)?),
            "epochs" => cfg.epochs = parse(key, value)?,
            "batch_size" => cfg.batch_size = parse(key, value)?,
            "lr_g" => cfg.lr_g = parse(key, value)?,
            "lr_d" => cfg.lr_d = parse(key, value)?,
            "beta1" => cfg.beta1 = parse(key, value)?,
            "beta2" => cfg.beta2 = parse(key, value)?,
            "flip_period" => cfg.flip_period = parse(key, value)?,
            "checkpoint_every" => cfg.checkpoint_every = parse(key, value)?,
            "w1" => cfg.weights.w1_recon = parse(key, value)?,
            "w2" => cfg.weights.w2_feature = parse(key, value)?,
            "w3" => cfg.weights.w3_gan = parse(key, value)?,
            "w4" => cfg.weights.w4_seg = parse(key, value)?,
            "w5" => cfg.weights.w5_seg_att = parse(key, value)?,
            "w6" => cfg.weights.w6_tv = parse(key, value)?,
            "base_channels" => cfg.gen.base_channels = parse(key, value)?,
            "encoder_blocks" => cfg.gen.encoder_blocks = parse(key, value)?,
            "nonlocal_count" => cfg.gen.nonlocal_count = parse(key, value)?,
            "nonlocal_placement" => {
                cfg.gen.nonlocal_placement = match value.as_str() {
                    "bottleneck" => NonLocalPlacement::Bottleneck,
                    "bottleneck+decoder" => NonLocalPlacement::BottleneckAndDecoder,
                    other => bail!("config key `nonlocal_placement`: unknown value `{other}`"),
                }
            }
            "residual_between" => cfg.gen.residual_blocks_between_nonlocal = parse(key, value)?,
            "multitask" => cfg.gen.multitask = parse(key, value)?,
            "channel_cap" => cfg.gen.channel_cap = parse(key, value)?,
            "disc_base_channels" => cfg.disc.base_channels = parse(key, value)?,
            "disc_layers" => cfg.disc.layers = parse(key, value)?,
            "extractor" => {
                cfg.extractor.kind = value
                    .parse::<ExtractorKind>()
                    .map_err(|e| anyhow::anyhow!("config key `extractor`: {e}"))?
            }
            "extractor_seed" => cfg.extractor.seed = parse(key, value)?,
            "downsample_factor" => cfg.extractor.downsample_factor = parse(key, value)?,
            "patch_k" => cfg.patch.k = parse(key, value)?,
            "patch_stride" => cfg.patch.stride = parse(key, value)?,
            "shift_prob" => cfg.post.shift_prob = parse(key, value)?,
            "repeat_prob" => cfg.post.repeat_prob = parse(key, value)?,
            "random_match_prob" => cfg.post.random_match_prob = parse(key, value)?,
            "noise_sample_prob" => cfg.post.noise_sample_prob = parse(key, value)?,
            "max_shift" => cfg.post.max_shift = parse(key, value)?,
            "chroma_threshold" => cfg.fg.chroma_threshold = parse(key, value)?,
            "white_threshold" => cfg.fg.white_threshold = parse(key, value)?,
            other => bail!("unknown config key `{other}`"),
        }
    }
    Ok(())
}

/// Every effective setting, printed before each run so the run is
/// reproducible from its log.
pub fn resolved_lines(cfg: &TrainConfig, extras: &[(&str, String)]) -> Vec<String> {
    let mut lines = vec![
        format!("batch_size = {}", cfg.batch_size),
        format!("base_channels = {}", cfg.gen.base_channels),
        format!("beta1 = {}", cfg.beta1),
        format!("beta2 = {}", cfg.beta2),
        format!("channel_cap = {}", cfg.gen.channel_cap),
        format!("checkpoint_every = {}", cfg.checkpoint_every),
        format!("chroma_threshold = {}", cfg.fg.chroma_threshold),
        format!("disc_base_channels = {}", cfg.disc.base_channels),
        format!("disc_layers = {}", cfg.disc.layers),
        format!(
            "downsample_factor = {}",
            cfg.extractor.downsample_factor
        ),
        format!("encoder_blocks = {}", cfg.gen.encoder_blocks),
        format!("epochs = {}", cfg.epochs),
        format!(
            "extractor = {}",
            match cfg.extractor.kind {
                ExtractorKind::ToyConv => "toy-conv",
                ExtractorKind::ColorPool => "color-pool",
                ExtractorKind::Precomputed => "precomputed",
            }
        ),
        format!("extractor_seed = {}", cfg.extractor.seed),
        format!("flip_period = {}", cfg.flip_period),
        format!("lr_d = {}", cfg.lr_d),
        format!("lr_g = {}", cfg.lr_g),
        format!("max_shift = {}", cfg.post.max_shift),
        format!("multitask = {}", cfg.gen.multitask),
        format!("noise_sample_prob = {}", cfg.post.noise_sample_prob),
        format!("nonlocal_count = {}", cfg.gen.nonlocal_count),
        format!(
            "nonlocal_placement = {}",
            match cfg.gen.nonlocal_placement {
                NonLocalPlacement::Bottleneck => "bottleneck",
                NonLocalPlacement::BottleneckAndDecoder => "bottleneck+decoder",
            }
        ),
        format!("patch_k = {}", cfg.patch.k),
        format!("patch_stride = {}", cfg.patch.stride),
        format!("random_match_prob = {}", cfg.post.random_match_prob),
        format!("repeat_prob = {}", cfg.post.repeat_prob),
        format!("residual_between = {}", cfg.gen.residual_blocks_between_nonlocal),
        format!("seed = {}", cfg.seed),
        format!("shift_prob = {}", cfg.post.shift_prob),
        format!("steps = {}", cfg.max_steps.map_or("auto".into(), |s| s.to_string())),
        format!("w1 = {}", cfg.weights.w1_recon),
        format!("w2 = {}", cfg.weights.w2_feature),
        format!("w3 = {}", cfg.weights.w3_gan),
        format!("w4 = {}", cfg.weights.w4_seg),
        format!("w5 = {}", cfg.weights.w5_seg_att),
        format!("w6 = {}", cfg.weights.w6_tv),
    ];
    for (k, v) in extras {
        lines.push(format!("{k} = {v}"));
    }
    lines.sort();
    lines
}
