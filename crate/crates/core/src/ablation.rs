//! Ablation matrix: named configuration overrides applied to one base
//! configuration, each trained and scored the same way.

use crate::data::config::{parse_config, parse_pairs, render_config};
use crate::data::{Dataset, Sample};
use crate::error::{Error, Result};
use crate::metrics::{format_table, EvalOptions, MetricReport};
use crate::trainer::{evaluate_samples, train, TrainConfig};

/// Rows as `(label, overrides)`; overrides use the configuration file syntax.
pub const ROWS: [(&str, &str); 9] = [
    (
        "baseline",
        "cross_attention = false\nchannel_attention = false\nmultiscale_context = false\nattentive_fusion = false",
    ),
    (
        "+CA",
        "channel_attention = false\nmultiscale_context = false\nattentive_fusion = false",
    ),
    ("+CA+ChA", "multiscale_context = false\nattentive_fusion = false"),
    ("+CA+ChA+MS", "attentive_fusion = false"),
    ("w/o Edge", "loss_edge = false"),
    ("w/o BCE", "loss_bce = false"),
    ("w/o IoU", "loss_iou = false"),
    ("w/o MLS", "multi_level = false"),
    ("full", ""),
];

/// `base` with the settings in `overrides` replaced.
pub fn apply_overrides(base: &TrainConfig, overrides: &str) -> Result<TrainConfig> {
    let mut pairs = parse_pairs(&render_config(base, 0))?;
    pairs.remove("step");
    for (k, v) in parse_pairs(overrides)? {
        if k == "step" {
            return Err(Error::Config("`step` cannot be overridden".into()));
        }
        pairs.insert(k, v);
    }
    let text: String = pairs.iter().map(|(k, v)| format!("{k} = {v}\n")).collect();
    Ok(parse_config(&text)?.0)
}

#[derive(Debug, Clone)]
pub struct AblationRow {
    pub label: String,
    pub config: TrainConfig,
    pub report: MetricReport,
}

/// Trains one model per row on `train_set` and scores it on `eval_set`.
pub fn run_ablation(
    base: &TrainConfig,
    rows: &[(&str, &str)],
    train_set: &Dataset,
    eval_set: &[Sample],
    opts: EvalOptions,
) -> Result<Vec<AblationRow>> {
    rows.iter()
        .map(|&(label, overrides)| {
            let config = apply_overrides(base, overrides)?;
            log::info!("ablation row {label}");
            let trainer = train(train_set, config.clone(), None)?;
            let report = evaluate_samples(&trainer.network, eval_set, config.input_size, opts)?;
            Ok(AblationRow {
                label: label.to_string(),
                config,
                report,
            })
        })
        .collect()
}

pub fn ablation_table(rows: &[AblationRow]) -> String {
    let labelled: Vec<(String, &MetricReport)> = rows.iter().map(|r| (r.label.clone(), &r.report)).collect();
    format_table(&labelled)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rows_parse_and_differ() {
        let base = TrainConfig::default();
        let configs: Vec<TrainConfig> = ROWS.iter().map(|(_, o)| apply_overrides(&base, o).unwrap()).collect();
        assert_eq!(configs[8], base);
        for (i, a) in configs.iter().enumerate() {
            for b in &configs[i + 1..] {
                assert_ne!(a, b);
            }
        }
        let c = &configs[0].network.crace[2];
        assert!(!c.enable_cross_attention && !c.enable_attentive_fusion);
        assert!(!configs[7].loss.multi_level);
    }

    #[test]
    fn bad_overrides() {
        let base = TrainConfig::default();
        assert!(apply_overrides(&base, "nonsense = 1").is_err());
        assert!(apply_overrides(&base, "step = 4").is_err());
        assert!(apply_overrides(&base, "loss_bce = false\nloss_iou = false").is_err());
    }
}
