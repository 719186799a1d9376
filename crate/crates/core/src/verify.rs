//! Self-check suites runnable from the command line: finite-difference
//! gradients, model invariants, and the synthetic world's geometric oracle.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::str::FromStr;

use libm::{cos, sin, tan};
use rand::Rng as _;

use crate::error::{Error, Result};
use crate::geocalib::orientation_pdf;
use crate::gradcheck::{check_all_ops, check_model};
use crate::graph::Graph;
use crate::labels::LabelMap;
use crate::model::{CrossViewConfig, CrossViewModel, TransformKind};
use crate::rng::rng;
use crate::scalar::Scalar;
use crate::synth::{
    crop_centered, generate_scene, generate_scene_at, make_geocal_instance, make_pair, min_rotation_change,
    render_aerial, render_ground, EntityKind, SynthConfig, ROAD,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    Grad,
    Invariants,
    Oracle,
}

impl Suite {
    pub const ALL: [Suite; 3] = [Suite::Grad, Suite::Invariants, Suite::Oracle];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Grad => "grad",
            Suite::Invariants => "invariants",
            Suite::Oracle => "oracle",
        }
    }
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Suite::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown suite '{s}' (expected grad, invariants or oracle)")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn new(name: &str, passed: bool, detail: String) -> Self {
        Check {
            name: name.into(),
            passed,
            detail,
        }
    }
}

/// One `PASS|FAIL name detail` line per check.
pub fn report(checks: &[Check]) -> String {
    let mut s = String::new();
    for c in checks {
        s += &format!("{} {} {}\n", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    s
}

pub fn run_suite(suite: Suite, seed: u64) -> Result<Vec<Check>> {
    match suite {
        Suite::Grad => grad_suite(seed),
        Suite::Invariants => invariant_suite(seed),
        Suite::Oracle => oracle_suite(seed),
    }
}

pub fn grad_suite(seed: u64) -> Result<Vec<Check>> {
    let mut out = Vec::new();
    for (prec, tol, results) in [
        ("f64", 1e-6, check_all_ops::<f64>(seed, 1e-5)?),
        ("f32", 1e-3, check_all_ops::<f32>(seed, 1e-2)?),
    ] {
        for r in results {
            out.push(Check::new(
                &format!("op.{}.{prec}", r.name),
                r.rel_err < tol,
                format!("rel_err={:.3e} tol={tol:e}", r.rel_err),
            ));
        }
    }
    for g in check_model(CrossViewConfig::tiny(), seed, 1e-5)? {
        out.push(Check::new(
            &format!("model.{}", g.group.label()),
            g.rel_err < 1e-6 && g.grad_norm > 0.0,
            format!("params={} rel_err={:.3e} grad_norm={:.3e}", g.params, g.rel_err, g.grad_norm),
        ));
    }
    Ok(out)
}

fn random_image<T: Scalar>(size: usize, seed: u64) -> Vec<T> {
    let mut r = rng(seed);
    (0..3 * size * size).map(|_| T::lit(r.gen_range(0.0..1.0))).collect()
}

fn row_stochastic<T: Scalar>(model: &CrossViewModel<T>, image: &[T]) -> Result<f64> {
    let m = model.transform_matrix(image)?;
    let cols = model.config().aerial_cells();
    let mut worst = 0.0f64;
    for row in m.data().chunks(cols) {
        if row.iter().any(|v| v.as_f64() < 0.0) {
            return Ok(f64::INFINITY);
        }
        let sum: f64 = row.iter().map(|v| v.as_f64()).sum();
        worst = worst.max((sum - 1.0).abs());
    }
    Ok(worst)
}

fn sparse_full_gap<T: Scalar>(model: &CrossViewModel<T>, image: &[T], rows: &[usize]) -> Result<f64> {
    let full = model.transform_matrix(image)?;
    let (sub, _) = model.transform_rows(image, rows)?;
    let cols = model.config().aerial_cells();
    let mut gap = 0.0f64;
    for (i, &r) in rows.iter().enumerate() {
        for c in 0..cols {
            let d = sub.data()[i * cols + c].as_f64() - full.data()[r * cols + c].as_f64();
            gap = gap.max(d.abs());
        }
    }
    Ok(gap)
}

/// Largest excursion of any ground logit outside the per-class range of the
/// aerial logits (zero bias assumed).
fn convex_hull_excess(model: &CrossViewModel<f64>, image: &[f64]) -> Result<f64> {
    let cfg = model.config();
    let k = cfg.classes;
    let f_a = model.aerial_features(image, &cfg.aerial_grid_points())?;
    let rows: Vec<usize> = (0..cfg.ground_cells()).collect();
    let g = model.predict_ground(image, &rows)?;
    let mut excess = 0.0f64;
    for class in 0..k {
        let col = f_a.data().iter().skip(class).step_by(k);
        let lo = col.clone().copied().fold(f64::INFINITY, f64::min);
        let hi = col.copied().fold(f64::NEG_INFINITY, f64::max);
        for v in g.data().iter().skip(class).step_by(k) {
            excess = excess.max(lo - v).max(v - hi);
        }
    }
    Ok(excess)
}

fn matrix_difference<T: Scalar>(model: &CrossViewModel<T>, a: &[T], b: &[T]) -> Result<f64> {
    let ma = model.transform_matrix(a)?;
    let mb = model.transform_matrix(b)?;
    Ok(ma
        .data()
        .iter()
        .zip(mb.data())
        .map(|(x, y)| (x.as_f64() - y.as_f64()).abs())
        .fold(0.0, f64::max))
}

pub fn invariant_suite(seed: u64) -> Result<Vec<Check>> {
    let mut out = Vec::new();
    let tiny = CrossViewConfig::tiny();
    let desk = CrossViewConfig::desk();
    let t64 = CrossViewModel::<f64>::new(tiny.clone(), seed)?;
    let d32 = CrossViewModel::<f32>::new(desk.clone(), seed)?;
    let ti: Vec<Vec<f64>> = (0..2).map(|i| random_image(tiny.backbone.input_size, seed + i)).collect();
    let di: Vec<Vec<f32>> = (0..2).map(|i| random_image(desk.backbone.input_size, seed + 10 + i)).collect();

    let w = row_stochastic(&t64, &ti[0])?.max(row_stochastic(&d32, &di[0])?);
    out.push(Check::new("row_stochastic", w <= 1e-5, format!("max|Σ_c M_rc − 1|={w:.3e}")));

    let gap = sparse_full_gap(&t64, &ti[0], &[5, 0, 3])?.max(sparse_full_gap(&d32, &di[0], &[63, 0, 17, 40])?);
    out.push(Check::new("sparse_full_equivalence", gap <= 1e-6, format!("max gap={gap:.3e}")));

    let ex = convex_hull_excess(&t64, &ti[1])?;
    out.push(Check::new("convex_hull", ex <= 1e-12, format!("excess={ex:.3e}")));

    let diff = matrix_difference(&d32, &di[0], &di[1])?;
    out.push(Check::new("adaptivity", diff > 1e-6, format!("max|M(a) − M(b)|={diff:.3e}")));
    let naive = CrossViewModel::<f32>::new(
        CrossViewConfig {
            transform: TransformKind::Naive,
            ..desk
        },
        seed,
    )?;
    let nd = matrix_difference(&naive, &di[0], &di[1])?;
    out.push(Check::new("naive_input_independent", nd == 0.0, format!("max|M(a) − M(b)|={nd:.3e}")));

    let mut g = Graph::<f64>::new();
    let x = g.constant(&[3, 4], alloc::vec![1e3, -1e3, 999.5, 0.0, -1e3, -1e3, -1e3, -1e3, 1e3, 1e3, 1e3, -1e3])?;
    let s = g.softmax(x);
    let v = g.value(s);
    let worst = v.chunks(4).map(|r| (r.iter().sum::<f64>() - 1.0).abs()).fold(0.0, f64::max);
    let finite = v.iter().all(|p| p.is_finite());
    out.push(Check::new("softmax_large_inputs", finite && worst <= 1e-6, format!("max row error={worst:.3e}")));

    let q = LabelMap::one_hot(2, 8, 3, &[0, 0, 0, 1, 1, 2, 2, 2, 1, 1, 0, 0, 2, 2, 2, 2])?;
    let p = LabelMap::from_logits(2, 8, 3, &random_image::<f32>(4, seed)[..48])?;
    let base = orientation_pdf(&q, &p, 0.1)?;
    let total: f64 = base.probs.iter().sum();
    out.push(Check::new(
        "orientation_pdf_normalized",
        base.bins() == 8 && (total - 1.0).abs() <= 1e-6,
        format!("bins={} Σp={total:.9}", base.bins()),
    ));
    let moved = (1..8)
        .filter(|&s| orientation_pdf(&q.shift_columns(s), &p, 0.1).map(|m| m.argmin) != Ok((base.argmin + s as usize) % 8))
        .count();
    out.push(Check::new("orientation_circularity", moved == 0, format!("{moved} of 7 shifts moved wrongly")));
    Ok(out)
}

/// Ground point of the ray through ground cell `(y, x)`, computed without
/// the renderer.
fn ground_point(cfg: &SynthConfig, camera: (f64, f64), y: usize, x: usize) -> Option<(f64, f64)> {
    let (phi, elev) = (cfg.azimuth(x, 0.0), cfg.elevation(y));
    if elev >= 0.0 {
        return None;
    }
    let t = cfg.camera_height / tan(-elev);
    Some((camera.0 + t * sin(phi), camera.1 - t * cos(phi)))
}

pub fn oracle_suite(seed: u64) -> Result<Vec<Check>> {
    let cfg = SynthConfig::default();
    let mut out = Vec::new();
    let scenes = 12u64;

    let mut broken = 0;
    for s in 0..scenes {
        let scene = generate_scene(seed + s, &cfg)?;
        let base = render_ground(&scene, &cfg, 0.0, (0.0, 0.0))?;
        for k in 0..cfg.w_g {
            let rotated = render_ground(&scene, &cfg, k as f64 * cfg.column_step(), (0.0, 0.0))?;
            broken += usize::from(rotated != base.shift_columns(k as isize));
        }
    }
    out.push(Check::new("rotation_equivariance", broken == 0, format!("{broken} mismatched rotations")));

    let (mut roads, mut off_road) = (0, 0);
    for s in 0..scenes {
        let scene = generate_scene(seed + s, &cfg)?;
        let ids = render_ground(&scene, &cfg, 0.0, (0.0, 0.0))?.argmax();
        for (i, _) in ids.iter().enumerate().filter(|(_, &c)| c == ROAD) {
            roads += 1;
            let Some((px, py)) = ground_point(&cfg, (scene.camera.x, scene.camera.y), i / cfg.w_g, i % cfg.w_g) else {
                off_road += 1;
                continue;
            };
            let on_road = scene.entities.iter().filter(|e| e.kind == EntityKind::Road).any(|e| {
                let (dx, dy) = (px - e.rect.cx, py - e.rect.cy);
                let (c, s) = (cos(-e.rect.angle), sin(-e.rect.angle));
                (dx * c - dy * s).abs() <= e.rect.length / 2.0 && (dx * s + dy * c).abs() <= e.rect.width / 2.0
            });
            off_road += usize::from(!on_road);
        }
    }
    out.push(Check::new(
        "road_hits_on_roads",
        off_road == 0 && roads > 0,
        format!("{off_road} of {roads} road cells off-road"),
    ));

    let (mut wrong, mut asym) = (0, 0);
    for s in 0..scenes {
        let scene = generate_scene(seed + s, &cfg)?;
        let aligned = render_ground(&scene, &cfg, 0.0, (0.0, 0.0))?;
        if min_rotation_change(&aligned.argmax(), cfg.h_g, cfg.w_g) == 0 {
            continue;
        }
        asym += 1;
        let k = (s as usize * 5 + 3) % cfg.w_g;
        let query = render_ground(&scene, &cfg, k as f64 * cfg.column_step(), (0.0, 0.0))?;
        wrong += usize::from(orientation_pdf(&query, &aligned, 0.1)?.argmin != k);
    }
    out.push(Check::new(
        "orientation_from_oracle",
        wrong == 0 && asym > 0,
        format!("{wrong} of {asym} asymmetric scenes misoriented"),
    ));

    let scene = generate_scene_at(seed, &cfg, 96.0, (48.0, 48.0))?;
    let (big, _) = render_aerial(&scene, (0, 0), 96, cfg.noise_amp);
    let mut crops_ok = true;
    for off in [(0i64, 0i64), (5, -7), (-16, 16)] {
        let crop = crop_centered(&big, off, cfg.image_size)?;
        let (direct, _) = render_aerial(&scene, (16 + off.0, 16 + off.1), cfg.image_size, cfg.noise_amp);
        crops_ok &= crop == direct;
    }
    out.push(Check::new("crops_equal_direct_renders", crops_ok, String::new()));

    let inst = make_geocal_instance(seed, &cfg, 5, 4)?;
    let fits = inst.offsets.iter().all(|o| crop_centered(&inst.image, *o, cfg.image_size).is_ok());
    out.push(Check::new("geocal_grid_fits", fits, format!("{} offsets", inst.offsets.len())));

    let a = make_pair(seed, &cfg)?;
    let b = make_pair(seed, &cfg)?;
    out.push(Check::new("pairs_deterministic", a == b, String::new()));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_names_parse() {
        for s in Suite::ALL {
            assert_eq!(s.name().parse::<Suite>().unwrap(), s);
        }
        assert!("nope".parse::<Suite>().is_err());
    }

    #[test]
    fn invariants_pass() {
        let checks = invariant_suite(3).unwrap();
        assert!(checks.iter().all(|c| c.passed), "{}", report(&checks));
    }

    #[test]
    fn oracle_passes() {
        let checks = oracle_suite(0).unwrap();
        assert!(checks.iter().all(|c| c.passed), "{}", report(&checks));
    }

    #[test]
    fn report_lines() {
        let r = report(&[Check::new("a", true, "x=1".into()), Check::new("b", false, String::new())]);
        assert_eq!(r, "PASS a x=1\nFAIL b \n");
    }
}
