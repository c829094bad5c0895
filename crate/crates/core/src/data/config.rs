//! `key = value` configuration files.
//!
//! One setting per line; `#` starts a comment. Unknown or repeated keys are
//! errors. Lists are comma-separated. The same text is embedded in
//! checkpoints together with a `step` key.
//!
//! | key | default |
//! |---|---|
//! | `mode` | `rgb` (`rgb` or `rgbd`) |
//! | `encoder_widths` | `16,32,64,128` |
//! | `encoder_blocks` | `1` |
//! | `n` | `64` |
//! | `cross_attention`, `channel_attention`, `multiscale_context`, `attentive_fusion` | `true` |
//! | `depth_input` | `true` in `rgbd` mode, else `false` |
//! | `sampling_rates` | `1,2,4,8` |
//! | `dilation_rates` | `1,4,6` |
//! | `projection_kernel` | `3` |
//! | `upsample`, `head_upsample` | `bilinear` (or `nearest`) |
//! | `depth_shared_stem` | `false` |
//! | `loss_bce`, `loss_iou`, `loss_edge`, `multi_level` | `true` |
//! | `edge_radius` | `1` |
//! | `momentum`, `weight_decay` | `0.9`, `0.0005` |
//! | `lr_backbone`, `lr_head` | `0.005`, `0.05` |
//! | `warmup_steps` | `auto` (5% of `total_steps`) |
//! | `total_steps`, `batch_size`, `input_size`, `seed` | `500`, `4`, `64`, `7` |
//! | `hflip`, `random_crop`, `multiscale` | `true` |
//! | `checkpoint_every` | `0` |

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::str::FromStr;

use crate::autodiff::UpsampleMode;
use crate::error::{Error, Result};
use crate::network::InputMode;
use crate::trainer::TrainConfig;

const KEYS: &[&str] = &[
    "mode",
    "encoder_widths",
    "encoder_blocks",
    "n",
    "cross_attention",
    "channel_attention",
    "multiscale_context",
    "attentive_fusion",
    "depth_input",
    "sampling_rates",
    "dilation_rates",
    "projection_kernel",
    "upsample",
    "head_upsample",
    "depth_shared_stem",
    "loss_bce",
    "loss_iou",
    "loss_edge",
    "multi_level",
    "edge_radius",
    "momentum",
    "weight_decay",
    "lr_backbone",
    "lr_head",
    "warmup_steps",
    "total_steps",
    "batch_size",
    "input_size",
    "seed",
    "hflip",
    "random_crop",
    "multiscale",
    "checkpoint_every",
    "step",
];

fn bad(key: &str, value: &str, expected: &str) -> Error {
    Error::Config(format!("{key} = {value}: expected {expected}"))
}

fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| bad(key, v, "a number"))
}

fn flag(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(bad(key, v, "true or false")),
    }
}

fn list(key: &str, v: &str) -> Result<Vec<usize>> {
    v.split(',').map(|s| num(key, s.trim())).collect()
}

fn upsample(key: &str, v: &str) -> Result<UpsampleMode> {
    match v {
        "bilinear" => Ok(UpsampleMode::Bilinear),
        "nearest" => Ok(UpsampleMode::Nearest),
        _ => Err(bad(key, v, "bilinear or nearest")),
    }
}

fn upsample_name(m: UpsampleMode) -> &'static str {
    match m {
        UpsampleMode::Bilinear => "bilinear",
        UpsampleMode::Nearest => "nearest",
    }
}

fn join(v: &[usize]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

/// Splits the text into key/value pairs, rejecting unknown and repeated keys.
pub fn parse_pairs(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", i + 1)))?;
        let (k, v) = (k.trim(), v.trim());
        if !KEYS.contains(&k) {
            return Err(Error::Config(format!("line {}: unknown key `{k}`", i + 1)));
        }
        if out.insert(k.to_string(), v.to_string()).is_some() {
            return Err(Error::Config(format!("line {}: `{k}` given twice", i + 1)));
        }
    }
    Ok(out)
}

/// Parses a configuration; returns it with the `step` value (0 if absent).
pub fn parse_config(text: &str) -> Result<(TrainConfig, usize)> {
    let pairs = parse_pairs(text)?;
    let mut cfg = TrainConfig::default();
    let get = |k: &str| pairs.get(k).map(String::as_str);

    if let Some(v) = get("mode") {
        let mode = match v {
            "rgb" => InputMode::Rgb,
            "rgbd" => InputMode::Rgbd,
            _ => return Err(bad("mode", v, "rgb or rgbd")),
        };
        cfg.network = crate::network::NetworkConfig::new(mode, cfg.network.crace[0].clone());
    }
    let net = &mut cfg.network;
    if let Some(v) = get("encoder_widths") {
        let w = list("encoder_widths", v)?;
        net.encoder.widths = w
            .try_into()
            .map_err(|_| bad("encoder_widths", v, "four comma-separated widths"))?;
    }
    if let Some(v) = get("encoder_blocks") {
        net.encoder.blocks_per_stage = num("encoder_blocks", v)?;
    }
    if let Some(v) = get("depth_shared_stem") {
        net.depth_shared_stem = flag("depth_shared_stem", v)?;
    }
    if let Some(v) = get("head_upsample") {
        net.head_upsample = upsample("head_upsample", v)?;
    }
    for c in net.crace.iter_mut() {
        if let Some(v) = get("n") {
            c.n = num("n", v)?;
        }
        for (key, field) in [
            ("cross_attention", &mut c.enable_cross_attention),
            ("channel_attention", &mut c.enable_channel_attention),
            ("multiscale_context", &mut c.enable_multiscale),
            ("attentive_fusion", &mut c.enable_attentive_fusion),
            ("depth_input", &mut c.depth_input),
        ] {
            if let Some(v) = get(key) {
                *field = flag(key, v)?;
            }
        }
        if let Some(v) = get("sampling_rates") {
            c.sampling_rates = list("sampling_rates", v)?;
        }
        if let Some(v) = get("dilation_rates") {
            c.dilation_rates = list("dilation_rates", v)?;
        }
        if let Some(v) = get("projection_kernel") {
            c.projection_kernel = num("projection_kernel", v)?;
        }
        if let Some(v) = get("upsample") {
            c.upsample_mode = upsample("upsample", v)?;
        }
    }
    for (key, field) in [
        ("loss_bce", &mut cfg.loss.use_bce),
        ("loss_iou", &mut cfg.loss.use_iou),
        ("loss_edge", &mut cfg.loss.use_edge),
        ("multi_level", &mut cfg.loss.multi_level),
        ("hflip", &mut cfg.hflip),
        ("random_crop", &mut cfg.random_crop),
        ("multiscale", &mut cfg.multiscale),
    ] {
        if let Some(v) = get(key) {
            *field = flag(key, v)?;
        }
    }
    for (key, field) in [
        ("momentum", &mut cfg.momentum),
        ("weight_decay", &mut cfg.weight_decay),
        ("lr_backbone", &mut cfg.lr_backbone),
        ("lr_head", &mut cfg.lr_head),
    ] {
        if let Some(v) = get(key) {
            *field = num(key, v)?;
        }
    }
    for (key, field) in [
        ("edge_radius", &mut cfg.loss.edge_radius),
        ("total_steps", &mut cfg.total_steps),
        ("batch_size", &mut cfg.batch_size),
        ("input_size", &mut cfg.input_size),
        ("checkpoint_every", &mut cfg.checkpoint_every),
    ] {
        if let Some(v) = get(key) {
            *field = num(key, v)?;
        }
    }
    if let Some(v) = get("seed") {
        cfg.seed = num("seed", v)?;
    }
    if let Some(v) = get("warmup_steps") {
        cfg.warmup_steps = if v == "auto" {
            None
        } else {
            Some(num("warmup_steps", v)?)
        };
    }
    let step = get("step").map(|v| num("step", v)).transpose()?.unwrap_or(0);
    cfg.validate()?;
    Ok((cfg, step))
}

/// Renders every key; `parse_config(render_config(c, s)) == (c, s)`.
pub fn render_config(cfg: &TrainConfig, step: usize) -> String {
    let net = &cfg.network;
    let c = &net.crace[0];
    let mut s = String::new();
    let mut kv = |k: &str, v: String| {
        let _ = writeln!(s, "{k} = {v}");
    };
    kv("mode", if net.mode == InputMode::Rgbd { "rgbd" } else { "rgb" }.into());
    kv("encoder_widths", join(&net.encoder.widths));
    kv("encoder_blocks", net.encoder.blocks_per_stage.to_string());
    kv("n", c.n.to_string());
    kv("cross_attention", c.enable_cross_attention.to_string());
    kv("channel_attention", c.enable_channel_attention.to_string());
    kv("multiscale_context", c.enable_multiscale.to_string());
    kv("attentive_fusion", c.enable_attentive_fusion.to_string());
    kv("depth_input", c.depth_input.to_string());
    kv("sampling_rates", join(&c.sampling_rates));
    kv("dilation_rates", join(&c.dilation_rates));
    kv("projection_kernel", c.projection_kernel.to_string());
    kv("upsample", upsample_name(c.upsample_mode).into());
    kv("head_upsample", upsample_name(net.head_upsample).into());
    kv("depth_shared_stem", net.depth_shared_stem.to_string());
    kv("loss_bce", cfg.loss.use_bce.to_string());
    kv("loss_iou", cfg.loss.use_iou.to_string());
    kv("loss_edge", cfg.loss.use_edge.to_string());
    kv("multi_level", cfg.loss.multi_level.to_string());
    kv("edge_radius", cfg.loss.edge_radius.to_string());
    kv("momentum", cfg.momentum.to_string());
    kv("weight_decay", cfg.weight_decay.to_string());
    kv("lr_backbone", cfg.lr_backbone.to_string());
    kv("lr_head", cfg.lr_head.to_string());
    kv(
        "warmup_steps",
        cfg.warmup_steps.map_or("auto".into(), |w| w.to_string()),
    );
    kv("total_steps", cfg.total_steps.to_string());
    kv("batch_size", cfg.batch_size.to_string());
    kv("input_size", cfg.input_size.to_string());
    kv("seed", cfg.seed.to_string());
    kv("hflip", cfg.hflip.to_string());
    kv("random_crop", cfg.random_crop.to_string());
    kv("multiscale", cfg.multiscale.to_string());
    kv("checkpoint_every", cfg.checkpoint_every.to_string());
    kv("step", step.to_string());
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let text = "mode = rgbd\nn = 16 # narrow\nlr_head = 0.03\nmultiscale = false\nwarmup_steps = 12\n";
        let (cfg, step) = parse_config(text).unwrap();
        assert_eq!(step, 0);
        assert!(cfg.network.crace.iter().all(|c| c.n == 16 && c.depth_input));
        assert_eq!(cfg.lr_head, 0.03);
        assert_eq!(parse_config(&render_config(&cfg, 42)).unwrap(), (cfg, 42));
    }

    #[test]
    fn unknown_and_repeated_keys() {
        assert!(parse_config("learning_rate = 1")
            .unwrap_err()
            .to_string()
            .contains("unknown key"));
        assert!(parse_config("seed = 1\nseed = 2")
            .unwrap_err()
            .to_string()
            .contains("twice"));
        assert!(parse_config("seed").is_err());
        assert!(parse_config("hflip = yes").is_err());
        assert!(parse_config("mode = rgb\ndepth_input = true").is_err());
    }
}
