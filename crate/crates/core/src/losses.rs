//! Supervision: BCE, IoU, boundary ground truth and the combined objectives.
//!
//! Saliency, edge and depth predictions are probabilities shaped
//! `(B, 1, H, W)`; ground truth has the same shape with values in `{0, 1}`.

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::map::Map;
use crate::nn::erode;

/// Probabilities are clamped to `[PROB_EPS, 1 - PROB_EPS]` before the logs.
pub const PROB_EPS: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq)]
pub struct LossConfig {
    pub use_bce: bool,
    pub use_iou: bool,
    pub use_edge: bool,
    /// Supervise all four levels; otherwise only level 2.
    pub multi_level: bool,
    pub edge_radius: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            use_bce: true,
            use_iou: true,
            use_edge: true,
            multi_level: true,
            edge_radius: 1,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.use_bce && !self.use_iou {
            return Err(Error::Config("at least one of BCE and IoU must stay enabled".into()));
        }
        if self.edge_radius == 0 {
            return Err(Error::Config("edge radius must be at least 1".into()));
        }
        Ok(())
    }
}

fn check_pair(op: &'static str, p: &Var<'_>, s: &Var<'_>) -> Result<()> {
    if p.shape() != s.shape() {
        return Err(Error::shape(
            op,
            format!("prediction {:?} vs target {:?}", p.shape(), s.shape()),
        ));
    }
    if p.shape().len() != 4 {
        return Err(Error::shape(op, format!("expected (B, C, H, W), got {:?}", p.shape())));
    }
    Ok(())
}

/// Mean binary cross-entropy over all pixels of the batch.
pub fn bce_loss<'t>(p: Var<'t>, s: Var<'t>) -> Result<Var<'t>> {
    check_pair("bce_loss", &p, &s)?;
    let p = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
    let pos = s.mul(p.ln())?;
    let neg = s.one_minus().mul(p.one_minus().ln())?;
    Ok(pos.add(neg)?.mean().mul_scalar(-1.0))
}

/// `1 - (ΣP·S + 1) / (Σ(P + S - P·S) + 1)` per image, averaged over the batch.
pub fn iou_loss<'t>(p: Var<'t>, s: Var<'t>) -> Result<Var<'t>> {
    check_pair("iou_loss", &p, &s)?;
    let ps = p.mul(s)?;
    let inter = ps.sum_axes(&[1, 2, 3])?.add_scalar(1.0);
    let union = p.add(s)?.sub(ps)?.sum_axes(&[1, 2, 3])?.add_scalar(1.0);
    Ok(inter.div(union)?.one_minus().mean())
}

/// `S - erode(S)`.
pub fn make_edge_gt(s: &Map, radius: usize) -> Result<Map> {
    let eroded = erode(s, radius)?;
    let data = s.data().iter().zip(eroded.data()).map(|(a, b)| a - b).collect();
    Map::new(s.height(), s.width(), data)
}

fn levels<'a, 't>(preds: &'a [Var<'t>], cfg: &LossConfig, op: &'static str) -> Result<&'a [Var<'t>]> {
    if preds.len() != 4 {
        return Err(Error::shape(op, format!("expected 4 levels, got {}", preds.len())));
    }
    Ok(if cfg.multi_level { preds } else { &preds[..1] })
}

fn sum_all<'t>(terms: Vec<Var<'t>>) -> Result<Var<'t>> {
    let mut it = terms.into_iter();
    let first = it.next().ok_or_else(|| Error::Contract("no loss terms".into()))?;
    it.try_fold(first, |acc, t| acc.add(t))
}

/// `Σ_i [bce + iou](P_i, S)` over the supervised levels.
pub fn multilevel_saliency_loss<'t>(preds: &[Var<'t>], s: Var<'t>, cfg: &LossConfig) -> Result<Var<'t>> {
    cfg.validate()?;
    let mut terms = Vec::new();
    for &p in levels(preds, cfg, "multilevel_saliency_loss")? {
        if cfg.use_bce {
            terms.push(bce_loss(p, s)?);
        }
        if cfg.use_iou {
            terms.push(iou_loss(p, s)?);
        }
    }
    sum_all(terms)
}

/// `Σ_i bce(E_i, E)` over the supervised levels.
pub fn multilevel_edge_loss<'t>(preds: &[Var<'t>], e: Var<'t>, cfg: &LossConfig) -> Result<Var<'t>> {
    let terms = levels(preds, cfg, "multilevel_edge_loss")?
        .iter()
        .map(|&p| bce_loss(p, e))
        .collect::<Result<Vec<_>>>()?;
    sum_all(terms)
}

/// Mean of the present terms.
fn average<'t>(terms: &[Option<Var<'t>>]) -> Result<Var<'t>> {
    let present: Vec<_> = terms.iter().flatten().copied().collect();
    let k = present.len() as f64;
    Ok(sum_all(present)?.mul_scalar(1.0 / k))
}

/// `(L_S + L_E) / 2`, or `L_S` alone without edge supervision.
pub fn total_loss_rgb<'t>(l_s: Var<'t>, l_e: Option<Var<'t>>) -> Result<Var<'t>> {
    average(&[Some(l_s), l_e])
}

/// `(L_S + L_D + L_E) / 3`, or `(L_S + L_D) / 2` without edge supervision.
pub fn total_loss_rgbd<'t>(l_s: Var<'t>, l_d: Var<'t>, l_e: Option<Var<'t>>) -> Result<Var<'t>> {
    average(&[Some(l_s), Some(l_d), l_e])
}

/// The component losses of one training step.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms<'t> {
    pub saliency: Var<'t>,
    pub edge: Option<Var<'t>>,
    pub depth: Option<Var<'t>>,
    pub total: Var<'t>,
}

/// Applies sigmoid to every logit map and assembles the full objective.
pub fn objective<'t>(
    saliency_logits: &[Var<'t>],
    edge_logits: &[Var<'t>],
    depth_logits: Option<&[Var<'t>]>,
    s: Var<'t>,
    e: Var<'t>,
    cfg: &LossConfig,
) -> Result<LossTerms<'t>> {
    let probs = |ls: &[Var<'t>]| ls.iter().map(|l| l.sigmoid()).collect::<Vec<_>>();
    let saliency = multilevel_saliency_loss(&probs(saliency_logits), s, cfg)?;
    let edge = if cfg.use_edge {
        Some(multilevel_edge_loss(&probs(edge_logits), e, cfg)?)
    } else {
        None
    };
    let (depth, total) = match depth_logits {
        Some(d) => {
            let l_d = multilevel_saliency_loss(&probs(d), s, cfg)?;
            (Some(l_d), total_loss_rgbd(saliency, l_d, edge)?)
        }
        None => (None, total_loss_rgb(saliency, edge)?),
    };
    Ok(LossTerms {
        saliency,
        edge,
        depth,
        total,
    })
}
