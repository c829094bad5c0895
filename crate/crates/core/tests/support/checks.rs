//! Oracle comparisons shared by the focused test files and the acceptance
//! suite. Each returns a one-line summary, or the first discrepancy.

use crace::losses::{bce_loss, iou_loss, make_edge_gt, total_loss_rgb, total_loss_rgbd};
use crace::metrics::{
    evaluate, image_e_measure, image_s_measure, image_weighted_f, pr_curve, EvalOptions, MeanFMode, PrAggregation,
};
use crace::{Map, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::oracle;

pub type Check = Result<String, String>;

fn close(what: &str, got: f64, want: f64, tol: f64) -> Result<(), String> {
    if (got - want).abs() <= tol {
        Ok(())
    } else {
        Err(format!("{what}: got {got:.17}, oracle {want:.17}"))
    }
}

fn exact(what: &str, got: f64, want: f64) -> Result<(), String> {
    if got == want {
        Ok(())
    } else {
        Err(format!("{what}: got {got:.17}, expected exactly {want}"))
    }
}

fn scalar(t: &Tape, shape: [usize; 4], v: f64) -> crace::Var<'_> {
    t.constant(Tensor::full(shape, v))
}

pub fn loss_oracles() -> Check {
    let tape = Tape::new();
    let mut checked = 0;
    for (h, w) in [(1, 1), (2, 3), (4, 4), (7, 5), (16, 16), (64, 64)] {
        let n = (h * w) as f64;
        let iou = iou_loss(scalar(&tape, [1, 1, h, w], 0.0), scalar(&tape, [1, 1, h, w], 1.0))
            .map_err(|e| e.to_string())?
            .value()
            .item();
        exact(&format!("iou_loss(P=0, S=1, N={n})"), iou, 1.0 - 1.0 / (n + 1.0))?;
        for s in [0.0, 1.0] {
            let bce = bce_loss(scalar(&tape, [2, 1, h, w], 0.5), scalar(&tape, [2, 1, h, w], s))
                .map_err(|e| e.to_string())?
                .value()
                .item();
            close(&format!("bce(P=0.5, S={s}, N={n})"), bce, std::f64::consts::LN_2, 1e-9)?;
        }
        checked += 3;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..50 {
        let (ls, le, ld): (f64, f64, f64) = (rng.random(), rng.random(), rng.random());
        let v = |x: f64| tape.constant(Tensor::scalar(x));
        let item = |r: crace::Result<crace::Var<'_>>| r.map(|v| v.value().item()).map_err(|e| e.to_string());
        exact(
            "L = (L_S + L_E)/2",
            item(total_loss_rgb(v(ls), Some(v(le))))?,
            (ls + le) * (1.0 / 2.0),
        )?;
        exact(
            "L = (L_S + L_D + L_E)/3",
            item(total_loss_rgbd(v(ls), v(ld), Some(v(le))))?,
            ((ls + ld) + le) * (1.0 / 3.0),
        )?;
        exact("L = L_S without edges", item(total_loss_rgb(v(ls), None))?, ls)?;
        checked += 3;
    }
    Ok(format!("{checked} closed-form loss values"))
}

fn pairs_of(rng: &mut ChaCha8Rng, count: usize) -> Vec<(Map, Map)> {
    (0..count).map(|_| oracle::toy_pair(rng)).collect()
}

pub fn metric_oracles(trials: usize) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut compared = 0;
    for trial in 0..trials {
        let count = rng.random_range(1..=4);
        let pairs = pairs_of(&mut rng, count);
        let refs: Vec<(&Map, &Map)> = pairs.iter().map(|(p, g)| (p, g)).collect();
        let ctx = |what: &str| format!("trial {trial} {what}");

        let pooled = pr_curve(&refs, PrAggregation::Dataset).map_err(|e| e.to_string())?;
        let want = oracle::pr_curve_pooled(&pairs);
        for (t, (&(p, r), &(wp, wr))) in pooled.points.iter().zip(&want).enumerate() {
            close(&ctx(&format!("precision[{t}]")), p, wp, 1e-9)?;
            close(&ctx(&format!("recall[{t}]")), r, wr, 1e-9)?;
        }
        let want_f: Vec<f64> = want.iter().map(|&(p, r)| oracle::f_beta(p, r)).collect();
        close(&ctx("maxF"), pooled.max_f(), oracle::max_f(&want_f), 1e-9)?;
        close(&ctx("mF"), pooled.mean_f(), want_f.iter().sum::<f64>() / 256.0, 1e-9)?;

        let per = pr_curve(&refs, PrAggregation::PerImage).map_err(|e| e.to_string())?;
        let (points, f) = oracle::pr_curve_per_image(&pairs);
        for t in 0..256 {
            close(&ctx("per-image precision"), per.points[t].0, points[t].0, 1e-9)?;
            close(&ctx("per-image recall"), per.points[t].1, points[t].1, 1e-9)?;
            close(&ctx("per-image F"), per.f[t], f[t], 1e-9)?;
        }

        for (i, (p, g)) in pairs.iter().enumerate() {
            let wf = image_weighted_f(p, g)
                .map_err(|e| e.to_string())?
                .ok_or("wF undefined")?;
            close(&ctx(&format!("wF[{i}]")), wf, oracle::weighted_f(p, g).unwrap(), 1e-9)?;
            let sm = image_s_measure(p, g).map_err(|e| e.to_string())?;
            close(&ctx(&format!("Sm[{i}]")), sm, oracle::s_measure(p, g), 1e-9)?;
            let em = image_e_measure(p, g).map_err(|e| e.to_string())?;
            close(&ctx(&format!("Em[{i}]")), em, oracle::e_measure(p, g), 1e-9)?;
        }

        let items: Vec<(String, &Map, &Map)> = pairs
            .iter()
            .enumerate()
            .map(|(i, (p, g))| (format!("{i:02}"), p, g))
            .collect();
        let items: Vec<(&str, &Map, &Map)> = items.iter().map(|(id, p, g)| (id.as_str(), *p, *g)).collect();
        let opts = EvalOptions {
            aggregation: PrAggregation::Dataset,
            mean_f: MeanFMode::Adaptive,
        };
        let report = evaluate(&items, opts).map_err(|e| e.to_string())?;
        let n = pairs.len() as f64;
        let avg = |f: &dyn Fn(&Map, &Map) -> f64| pairs.iter().map(|(p, g)| f(p, g)).sum::<f64>() / n;
        close(&ctx("report maxF"), report.max_f, oracle::max_f(&want_f), 1e-9)?;
        close(
            &ctx("report adaptive mF"),
            report.mean_f,
            avg(&oracle::adaptive_f),
            1e-9,
        )?;
        close(&ctx("report MAE"), report.mae, avg(&oracle::mae), 1e-9)?;
        close(
            &ctx("report wF"),
            report.weighted_f,
            avg(&|p, g| oracle::weighted_f(p, g).unwrap()),
            1e-9,
        )?;
        close(&ctx("report Sm"), report.s_measure, avg(&oracle::s_measure), 1e-9)?;
        close(&ctx("report Em"), report.e_measure, avg(&oracle::e_measure), 1e-9)?;
        compared += 1;
    }

    // Degenerate ground truth takes the special-case branches of Sm and Em.
    let mut special = 0;
    for _ in 0..trials {
        let (h, w) = (rng.random_range(1..=8), rng.random_range(1..=8));
        let fill = rng.random_bool(0.5) as u8 as f64;
        let gt = Map::filled(h, w, fill);
        let pred = oracle::random_pred(&oracle::random_mask(h, w, 0.5, &mut rng), &mut rng);
        close(
            "Sm (uniform GT)",
            image_s_measure(&pred, &gt).unwrap(),
            oracle::s_measure(&pred, &gt),
            1e-6,
        )?;
        close(
            "Em (uniform GT)",
            image_e_measure(&pred, &gt).unwrap(),
            oracle::e_measure(&pred, &gt),
            1e-6,
        )?;
        special += 1;
    }
    Ok(format!(
        "{compared} toy datasets against brute-force PR/maxF/mF/wF/Sm/Em/MAE, {special} uniform-GT cases"
    ))
}

pub fn identical_maps(trials: usize) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for trial in 0..trials {
        let (_, gt) = oracle::toy_pair(&mut rng);
        let items = [("a", &gt, &gt)];
        for aggregation in [PrAggregation::Dataset, PrAggregation::PerImage] {
            for mean_f in [MeanFMode::Curve, MeanFMode::Adaptive] {
                let r = evaluate(&items, EvalOptions { aggregation, mean_f }).map_err(|e| e.to_string())?;
                let ctx = |m: &str| format!("trial {trial} {m}");
                exact(&ctx("maxF"), r.max_f, 1.0)?;
                exact(&ctx("mF"), r.mean_f, 1.0)?;
                exact(&ctx("wF"), r.weighted_f, 1.0)?;
                exact(&ctx("Sm"), r.s_measure, 1.0)?;
                exact(&ctx("MAE"), r.mae, 0.0)?;
                close(&ctx("Em"), r.e_measure, 1.0, 1e-12)?;
            }
        }
    }
    Ok(format!(
        "{trials} identical pairs: maxF = mF = wF = Sm = 1 and MAE = 0 exactly"
    ))
}

pub fn edge_oracle(masks: usize) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for i in 0..masks {
        let mask = oracle::random_mask(16, 16, rng.random_range(0.3..0.95), &mut rng);
        for radius in [1, 2] {
            let got = make_edge_gt(&mask, radius).map_err(|e| e.to_string())?;
            let eroded = oracle::erode(&mask, radius);
            let want = Map::from_fn(16, 16, |y, x| mask.get(y, x) - eroded.get(y, x));
            if got != want {
                return Err(format!(
                    "mask {i}, radius {radius}: edge map differs from brute-force erosion"
                ));
            }
        }
    }
    Ok(format!("{masks} random 16x16 masks at radius 1 and 2 match exactly"))
}
