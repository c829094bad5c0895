//! Saliency evaluation: maxF, mF, wF, MAE, S-measure and E-measure.
//!
//! Images whose ground truth has no foreground are left out of the
//! F-family metrics (maxF, mF, wF) and counted in the report; they still
//! count towards MAE, S-measure and E-measure.

mod fmeasure;
mod structure;
mod weighted;

use std::fmt::Write as _;
use std::path::Path;

pub use fmeasure::{
    adaptive_f, adaptive_threshold, f_beta, image_counts, image_mae, mae, mean_f, pr_curve, threshold, Counts,
    MeanFMode, PrAggregation, PrCurve, BETA2, NUM_THRESHOLDS,
};
pub use structure::{image_e_measure, image_s_measure};
pub use weighted::image_weighted_f;

use crate::data::pnm;
use crate::error::{Error, Result};
use crate::map::Map;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct EvalOptions {
    pub aggregation: PrAggregation,
    pub mean_f: MeanFMode,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageMetrics {
    pub id: String,
    pub mae: f64,
    /// `None` when the ground truth has no foreground.
    pub weighted_f: Option<f64>,
    pub s_measure: f64,
    pub e_measure: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub max_f: f64,
    pub mean_f: f64,
    pub weighted_f: f64,
    pub mae: f64,
    pub s_measure: f64,
    pub e_measure: f64,
    /// 256 `(precision, recall)` pairs, threshold ascending.
    pub pr_curve: Vec<(f64, f64)>,
    pub per_image: Vec<ImageMetrics>,
    /// Images left out of the F-family metrics.
    pub skipped_for_f: Vec<String>,
}

pub const COLUMNS: [&str; 6] = ["maxF", "mF", "wF", "MAE", "Sm", "Em"];

/// A named prediction / ground-truth pair.
pub type EvalItem<'a> = (&'a str, &'a Map, &'a Map);

/// Evaluates a set of pairs. Items are processed in id order, so the result
/// does not depend on input order.
pub fn evaluate(items: &[EvalItem<'_>], opts: EvalOptions) -> Result<MetricReport> {
    if items.is_empty() {
        return Err(Error::Dataset("nothing to evaluate".into()));
    }
    let mut items = items.to_vec();
    items.sort_by(|a, b| a.0.cmp(b.0));
    if let Some(w) = items.windows(2).find(|w| w[0].0 == w[1].0) {
        return Err(Error::Dataset(format!("duplicate image id {}", w[0].0)));
    }

    let mut per_image = Vec::with_capacity(items.len());
    let mut skipped = Vec::new();
    let mut with_fg = Vec::new();
    for &(id, pred, gt) in &items {
        let weighted_f = image_weighted_f(pred, gt)?;
        if weighted_f.is_none() {
            skipped.push(id.to_string());
        } else {
            with_fg.push((pred, gt));
        }
        per_image.push(ImageMetrics {
            id: id.to_string(),
            mae: image_mae(pred, gt)?,
            weighted_f,
            s_measure: image_s_measure(pred, gt)?,
            e_measure: image_e_measure(pred, gt)?,
        });
    }
    if !skipped.is_empty() {
        log::warn!("{} image(s) without foreground left out of F metrics", skipped.len());
    }
    if with_fg.is_empty() {
        return Err(Error::Dataset("no ground-truth map has any foreground".into()));
    }

    let curve = pr_curve(&with_fg, opts.aggregation)?;
    let mean_f = match opts.mean_f {
        MeanFMode::Curve => curve.mean_f(),
        MeanFMode::Adaptive => mean_f(&with_fg, MeanFMode::Adaptive, opts.aggregation)?,
    };
    let n = per_image.len() as f64;
    let wf: Vec<f64> = per_image.iter().filter_map(|m| m.weighted_f).collect();
    Ok(MetricReport {
        max_f: curve.max_f(),
        mean_f,
        weighted_f: wf.iter().sum::<f64>() / wf.len() as f64,
        mae: per_image.iter().map(|m| m.mae).sum::<f64>() / n,
        s_measure: per_image.iter().map(|m| m.s_measure).sum::<f64>() / n,
        e_measure: per_image.iter().map(|m| m.e_measure).sum::<f64>() / n,
        pr_curve: curve.points,
        per_image,
        skipped_for_f: skipped,
    })
}

/// Pairs every `.pgm` in `gt_dir` with the same-named file in `pred_dir`.
/// Any file present on only one side is an error.
pub fn evaluate_dataset(pred_dir: &Path, gt_dir: &Path, opts: EvalOptions) -> Result<MetricReport> {
    let preds = pnm::list_images(pred_dir, "pgm")?;
    let gts = pnm::list_images(gt_dir, "pgm")?;
    let missing_pred: Vec<_> = gts.keys().filter(|k| !preds.contains_key(*k)).cloned().collect();
    let missing_gt: Vec<_> = preds.keys().filter(|k| !gts.contains_key(*k)).cloned().collect();
    if !missing_pred.is_empty() || !missing_gt.is_empty() {
        return Err(Error::Dataset(format!(
            "unmatched files: no prediction for [{}]; no ground truth for [{}]",
            missing_pred.join(", "),
            missing_gt.join(", ")
        )));
    }
    if gts.is_empty() {
        return Err(Error::Dataset(format!("no .pgm files in {}", gt_dir.display())));
    }
    let mut loaded = Vec::with_capacity(gts.len());
    for (id, gt_path) in &gts {
        let pred = pnm::read_gray(&preds[id])?;
        let gt = pnm::read_gray(gt_path)?.binarized();
        loaded.push((id.clone(), pred, gt));
    }
    let items: Vec<EvalItem<'_>> = loaded.iter().map(|(id, p, g)| (id.as_str(), p, g)).collect();
    evaluate(&items, opts)
}

impl MetricReport {
    /// `(column name, value)` in table order.
    pub fn columns(&self) -> [(&'static str, f64); 6] {
        let v = [
            self.max_f,
            self.mean_f,
            self.weighted_f,
            self.mae,
            self.s_measure,
            self.e_measure,
        ];
        std::array::from_fn(|i| (COLUMNS[i], v[i]))
    }

    /// Aligned plain-text table with a single row labelled `label`.
    pub fn to_table(&self, label: &str) -> String {
        format_table(&[(label.to_string(), self)])
    }

    pub fn to_csv(&self) -> String {
        let cols = self.columns();
        let header: Vec<_> = cols.iter().map(|c| c.0).collect();
        let values: Vec<_> = cols.iter().map(|c| format!("{:.6}", c.1)).collect();
        format!("{}\n{}\n", header.join(","), values.join(","))
    }

    pub fn per_image_csv(&self) -> String {
        let mut s = String::from("id,MAE,wF,Sm,Em\n");
        for m in &self.per_image {
            let wf = m.weighted_f.map(|v| format!("{v:.6}")).unwrap_or_default();
            let _ = writeln!(s, "{},{:.6},{},{:.6},{:.6}", m.id, m.mae, wf, m.s_measure, m.e_measure);
        }
        s
    }

    /// 256 rows of `precision recall`.
    pub fn pr_curve_text(&self) -> String {
        let mut s = String::new();
        for (p, r) in &self.pr_curve {
            let _ = writeln!(s, "{p:.6} {r:.6}");
        }
        s
    }

    /// Writes `metrics.txt`, `metrics.csv`, `per_image.csv` and `pr_curve.txt`.
    pub fn write_to(&self, dir: &Path, label: &str) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (name, body) in [
            ("metrics.txt", self.to_table(label)),
            ("metrics.csv", self.to_csv()),
            ("per_image.csv", self.per_image_csv()),
            ("pr_curve.txt", self.pr_curve_text()),
        ] {
            let path = dir.join(name);
            std::fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }
}

/// One aligned table with a row per labelled report.
pub fn format_table(rows: &[(String, &MetricReport)]) -> String {
    let label_w = rows.iter().map(|r| r.0.len()).max().unwrap_or(0).max(6);
    let mut s = format!("{:<label_w$}", "config");
    for name in COLUMNS {
        let _ = write!(s, "  {name:>7}");
    }
    s.push('\n');
    for (label, report) in rows {
        let _ = write!(s, "{label:<label_w$}");
        for (_, v) in report.columns() {
            let _ = write!(s, "  {v:>7.4}");
        }
        s.push('\n');
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gt(seed: usize) -> Map {
        Map::from_fn(8, 8, |y, x| ((y * 3 + x * 5 + seed) % 7 < 3) as u8 as f64)
    }

    #[test]
    fn identical_maps_are_perfect() {
        let maps: Vec<Map> = (0..3).map(gt).collect();
        let ids = ["a", "b", "c"];
        let items: Vec<EvalItem<'_>> = ids.iter().zip(&maps).map(|(id, m)| (*id, m, m)).collect();
        let r = evaluate(&items, EvalOptions::default()).unwrap();
        assert_eq!(
            (r.max_f, r.mean_f, r.weighted_f, r.s_measure, r.mae),
            (1.0, 1.0, 1.0, 1.0, 0.0)
        );
        assert_eq!(r.pr_curve.len(), NUM_THRESHOLDS);
    }

    #[test]
    fn order_invariance_and_skips() {
        let maps: Vec<Map> = (0..3).map(gt).collect();
        let empty = Map::filled(8, 8, 0.0);
        let pred = Map::from_fn(8, 8, |y, x| ((y + x) % 5) as f64 / 4.0);
        let a = [("x", &pred, &maps[0]), ("y", &pred, &maps[1]), ("z", &pred, &empty)];
        let b = [a[2], a[0], a[1]];
        let ra = evaluate(&a, EvalOptions::default()).unwrap();
        let rb = evaluate(&b, EvalOptions::default()).unwrap();
        assert_eq!(ra, rb);
        assert_eq!(ra.skipped_for_f, vec!["z".to_string()]);
        assert!(ra.max_f >= ra.mean_f);
    }

    #[test]
    fn table_layout() {
        let m = gt(0);
        let r = evaluate(&[("a", &m, &m)], EvalOptions::default()).unwrap();
        let t = r.to_table("full");
        assert!(t.starts_with("config"));
        assert!(t.lines().nth(1).unwrap().starts_with("full"));
        assert_eq!(r.pr_curve_text().lines().count(), 256);
    }
}
