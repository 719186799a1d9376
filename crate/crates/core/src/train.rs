//! Cross-view training, direct aerial training and evaluation metrics.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::Rng as _;

use crate::error::{Error, Result};
use crate::labels::LabelMap;
use crate::model::CrossViewModel;
use crate::nn::{Adam, AdamConfig, Mode};
use crate::rng::{derive_seed, rng, Rng};
use crate::synth::AlignedPair;

const SHUFFLE_STREAM: u64 = 0x5407;
const GRID_STREAM: u64 = 0x6A1D;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Ground cells sampled per example and step, `(rows, cols)`.
    pub sparse_grid: (usize, usize),
    pub seed: u64,
    pub bn_decay: f64,
    /// Evaluate every this many epochs (0 disables).
    pub eval_every: usize,
    /// Global gradient-norm ceiling.
    pub clip_norm: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 4,
            lr: 3e-3,
            sparse_grid: (4, 8),
            seed: 0,
            bn_decay: crate::nn::BN_DECAY,
            eval_every: 1,
            clip_norm: 10.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, h_g: usize, w_g: usize) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be ≥ 1".into()));
        }
        let (gh, gw) = self.sparse_grid;
        if gh == 0 || gw == 0 || gh > h_g || gw > w_g {
            return Err(Error::Config(format!(
                "sparse grid {gh}×{gw} does not fit the {h_g}×{w_g} ground grid"
            )));
        }
        if !(self.lr >= 0.0) || !(0.0..1.0).contains(&self.bn_decay) || !(self.clip_norm > 0.0) {
            return Err(Error::Config("lr ≥ 0, bn_decay in [0, 1) and clip_norm > 0 required".into()));
        }
        Ok(())
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            ..AdamConfig::default()
        }
    }
}

/// Regular `gh × gw` grid of ground cells with one random sub-cell jitter
/// per axis: index `k` maps to `⌊(k + u) · h / gh⌋`. Returned row-major.
pub fn sample_grid(h: usize, w: usize, grid: (usize, usize), r: &mut Rng) -> Vec<usize> {
    let (uy, ux): (f64, f64) = (r.gen(), r.gen());
    let ys: Vec<usize> = (0..grid.0).map(|k| ((k as f64 + uy) * h as f64 / grid.0 as f64) as usize).collect();
    let xs: Vec<usize> = (0..grid.1).map(|k| ((k as f64 + ux) * w as f64 / grid.1 as f64) as usize).collect();
    ys.iter().flat_map(|y| xs.iter().map(move |x| y * w + x)).collect()
}

/// Per-step losses and per-epoch metrics. Wall time is kept out of the text
/// form so identical runs produce identical logs.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainLog {
    pub losses: Vec<f64>,
    pub epochs: Vec<(usize, Metrics)>,
    pub wall_seconds: Option<f64>,
}

impl TrainLog {
    pub fn to_text(&self, class_names: &[&str]) -> String {
        let mut s = String::new();
        for (i, l) in self.losses.iter().enumerate() {
            let _ = writeln!(s, "{i} {l:.9}");
        }
        for (e, m) in &self.epochs {
            let _ = writeln!(s, "epoch {e} {}", m.to_text(class_names));
        }
        s
    }
}

/// Progress callback payload.
#[derive(Debug, Clone, Copy)]
pub enum Progress<'a> {
    Step { step: usize, loss: f64 },
    Epoch { epoch: usize, metrics: Option<&'a Metrics> },
}

fn check_pairs(model: &CrossViewModel<f32>, data: &[AlignedPair]) -> Result<()> {
    if data.is_empty() {
        return Err(Error::Config("empty dataset".into()));
    }
    let c = model.config();
    let s = c.backbone.input_size;
    for (i, p) in data.iter().enumerate() {
        let g = &p.ground_labels;
        let a = &p.aerial_labels;
        if p.aerial_image.shape() != [3, s, s]
            || (g.height(), g.width(), g.classes()) != (c.h_g, c.w_g, c.classes)
            || (a.height(), a.width(), a.classes()) != (c.h_a, c.w_a, c.classes)
        {
            return Err(Error::Config(format!(
                "pair {i} does not match the model: image {:?}, ground {}×{}×{}, aerial {}×{}×{}",
                p.aerial_image.shape(),
                g.height(),
                g.width(),
                g.classes(),
                a.height(),
                a.width(),
                a.classes()
            )));
        }
    }
    Ok(())
}

fn gather_targets(labels: &LabelMap, rows: &[usize], out: &mut Vec<f32>) {
    let k = labels.classes();
    for &r in rows {
        out.extend_from_slice(&labels.probs()[r * k..(r + 1) * k]);
    }
}

/// One optimizer step on a batch: cross-entropy of the sampled ground rows
/// against the oracle labels, train-mode batch norm, clipped Adam update.
fn crossview_step(
    model: &mut CrossViewModel<f32>,
    adam: &mut Adam<f32>,
    batch: &[&AlignedPair],
    rows: &[usize],
    cfg: &TrainConfig,
    step: usize,
) -> Result<f64> {
    let mut targets = Vec::with_capacity(batch.len() * rows.len() * model.config().classes);
    for p in batch {
        gather_targets(&p.ground_labels, rows, &mut targets);
    }
    let images: Vec<&[f32]> = batch.iter().map(|p| p.aerial_image.data()).collect();
    let mut pass = model.params.pass(Mode::Train, true);
    let img = model.image_batch(&mut pass, &images)?;
    let out = model.predict_ground_var(&mut pass, img, rows)?;
    let loss = pass.graph.cross_entropy(out, &targets)?;
    let value = pass.graph.value(loss)[0] as f64;
    if !value.is_finite() {
        return Err(Error::NonFinite { step, loss: value, lr: cfg.lr });
    }
    pass.backward(loss)?;
    let outcome = pass.finish();
    apply_update(model, adam, outcome, cfg)?;
    Ok(value)
}

fn apply_update(
    model: &mut CrossViewModel<f32>,
    adam: &mut Adam<f32>,
    outcome: crate::nn::PassOutcome<f32>,
    cfg: &TrainConfig,
) -> Result<()> {
    model.params.zero_grad();
    model.params.absorb(outcome, cfg.bn_decay)?;
    model.params.clip_grad_norm(cfg.clip_norm);
    adam.step(&mut model.params)
}

/// End-to-end training of every parameter group against ground labels.
pub fn train_crossview(
    model: &mut CrossViewModel<f32>,
    data: &[AlignedPair],
    cfg: &TrainConfig,
    eval: Option<&[AlignedPair]>,
    progress: &mut dyn FnMut(Progress<'_>),
) -> Result<TrainLog> {
    let c = model.config().clone();
    cfg.validate(c.h_g, c.w_g)?;
    check_pairs(model, data)?;
    if let Some(e) = eval {
        check_pairs(model, e)?;
    }
    let mut adam = Adam::new(cfg.adam());
    let mut log = TrainLog::default();
    let mut grid_rng = rng(derive_seed(cfg.seed, GRID_STREAM, 0));
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng(derive_seed(cfg.seed, SHUFFLE_STREAM, epoch as u64)));
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&AlignedPair> = chunk.iter().map(|&i| &data[i]).collect();
            let rows = sample_grid(c.h_g, c.w_g, cfg.sparse_grid, &mut grid_rng);
            let step = log.losses.len();
            let loss = crossview_step(model, &mut adam, &batch, &rows, cfg, step)?;
            log.losses.push(loss);
            progress(Progress::Step { step, loss });
        }
        let due = cfg.eval_every > 0 && ((epoch + 1) % cfg.eval_every == 0 || epoch + 1 == cfg.epochs);
        // The running averages lag the weights; evaluation and the final
        // model use statistics recomputed from the training set instead.
        if (due && eval.is_some()) || epoch + 1 == cfg.epochs {
            refresh_batch_norm(model, data, cfg.batch_size)?;
        }
        match eval {
            Some(e) if due => {
                let m = evaluate(model, e)?;
                progress(Progress::Epoch {
                    epoch,
                    metrics: Some(&m),
                });
                log.epochs.push((epoch, m));
            }
            _ => progress(Progress::Epoch { epoch, metrics: None }),
        }
    }
    Ok(log)
}

/// Re-estimates every batch-norm running statistic as the plain average of
/// train-mode batch statistics over `data` (in order, `batch_size` pairs per
/// batch), with the current weights. Parameters are untouched.
pub fn refresh_batch_norm(model: &mut CrossViewModel<f32>, data: &[AlignedPair], batch_size: usize) -> Result<()> {
    check_pairs(model, data)?;
    let rows: Vec<usize> = (0..model.config().ground_cells()).collect();
    for (k, chunk) in data.chunks(batch_size.max(1)).enumerate() {
        let images: Vec<&[f32]> = chunk.iter().map(|p| p.aerial_image.data()).collect();
        let mut pass = model.params.pass(Mode::Train, false);
        let img = model.image_batch(&mut pass, &images)?;
        model.predict_ground_var(&mut pass, img, &rows)?;
        let outcome = pass.finish();
        model.params.absorb(outcome, k as f64 / (k + 1) as f64)?;
    }
    Ok(())
}

/// Cross-entropy of the full ground grid of `data` under `mode`, without
/// updating anything. With `rows` only those cells enter the mean.
pub fn crossview_loss(model: &CrossViewModel<f32>, data: &[&AlignedPair], rows: &[usize], mode: Mode) -> Result<f64> {
    let mut targets = Vec::new();
    for p in data {
        gather_targets(&p.ground_labels, rows, &mut targets);
    }
    let images: Vec<&[f32]> = data.iter().map(|p| p.aerial_image.data()).collect();
    let mut pass = model.params.pass(mode, false);
    let img = model.image_batch(&mut pass, &images)?;
    let out = model.predict_ground_var(&mut pass, img, rows)?;
    let loss = pass.graph.cross_entropy(out, &targets)?;
    Ok(pass.graph.value(loss)[0] as f64)
}

// ---- direct aerial training ------------------------------------------------

/// Copies the backbone stages (weights and running statistics) of `from`
/// into `to`; the aerial head and every other group keep their own values.
pub fn copy_backbone(from: &CrossViewModel<f32>, to: &mut CrossViewModel<f32>) -> Result<usize> {
    let names: Vec<String> = from.backbone_param_names().into_iter().map(String::from).collect();
    for name in &names {
        let src = from.params.get(from.params.find(name).unwrap());
        to.params.set_value(name, src.data(), src.shape())?;
    }
    Ok(names.len())
}

/// Classes that never occur (as argmax) in the aerial labels of `data`.
pub fn missing_aerial_classes(data: &[AlignedPair], classes: usize) -> Vec<usize> {
    let mut seen = vec![false; classes];
    for p in data {
        for c in p.aerial_labels.argmax() {
            seen[c as usize] = true;
        }
    }
    (0..classes).filter(|&k| !seen[k]).collect()
}

/// Trains the aerial branch directly on aerial labels for `steps` steps,
/// cycling through `data` in a seed-determined order; every aerial cell
/// center is a training point.
pub fn train_aerial_direct(
    model: &mut CrossViewModel<f32>,
    data: &[AlignedPair],
    cfg: &TrainConfig,
    steps: usize,
) -> Result<TrainLog> {
    check_pairs(model, data)?;
    if cfg.batch_size == 0 || !(cfg.lr >= 0.0) {
        return Err(Error::Config("batch_size ≥ 1 and lr ≥ 0 required".into()));
    }
    let points = model.config().aerial_grid_points();
    let mut adam = Adam::new(cfg.adam());
    let mut log = TrainLog::default();
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let mut epoch = 0u64;
    for step in 0..steps {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        while batch.len() < cfg.batch_size.min(data.len()) {
            if cursor == order.len() {
                order = (0..data.len()).collect();
                order.shuffle(&mut rng(derive_seed(cfg.seed, SHUFFLE_STREAM, epoch)));
                epoch += 1;
                cursor = 0;
            }
            batch.push(&data[order[cursor]]);
            cursor += 1;
        }
        let mut targets = Vec::new();
        for p in &batch {
            targets.extend_from_slice(p.aerial_labels.probs());
        }
        let images: Vec<&[f32]> = batch.iter().map(|p| p.aerial_image.data()).collect();
        let mut pass = model.params.pass(Mode::Train, true);
        let img = model.image_batch(&mut pass, &images)?;
        let out = model.aerial_logits(&mut pass, img, &points)?;
        let loss = pass.graph.cross_entropy(out, &targets)?;
        let value = pass.graph.value(loss)[0] as f64;
        if !value.is_finite() {
            return Err(Error::NonFinite { step, loss: value, lr: cfg.lr });
        }
        pass.backward(loss)?;
        let outcome = pass.finish();
        apply_update(model, &mut adam, outcome, cfg)?;
        log.losses.push(value);
    }
    if steps > 0 {
        refresh_batch_norm(model, data, cfg.batch_size)?;
    }
    Ok(log)
}

// ---- metrics ---------------------------------------------------------------

/// Cross-entropy sums are kept in fixed point so that merging is exact and
/// metrics do not depend on evaluation order or thread count.
const CE_SCALE: f64 = (1u64 << 32) as f64;

/// Confusion matrix (truth × prediction) plus summed cross-entropy.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Metrics {
    pub classes: usize,
    pub confusion: Vec<u64>,
    ce_fixed: i128,
}

impl Metrics {
    pub fn new(classes: usize) -> Self {
        Metrics {
            classes,
            confusion: vec![0; classes * classes],
            ce_fixed: 0,
        }
    }

    /// Adds one prediction per cell: `logits` holds `cells × K` values. The
    /// truth is the argmax of each target cell, the cross-entropy is taken
    /// against the full target distribution.
    pub fn add(&mut self, logits: &[f32], target: &LabelMap) -> Result<()> {
        let k = self.classes;
        if target.classes() != k || logits.len() != target.cells() * k {
            return Err(Error::dim("metrics", &[logits.len()], &[target.cells(), k]));
        }
        let truth = target.argmax();
        for (cell, row) in logits.chunks(k).enumerate() {
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::Validation("non-finite prediction".into()));
            }
            let mut best = 0;
            for j in 1..k {
                if row[j] > row[best] {
                    best = j;
                }
            }
            self.confusion[truth[cell] as usize * k + best] += 1;
            let row64: Vec<f64> = row.iter().map(|&v| v as f64).collect();
            let lse = crate::graph::log_sum_exp(&row64);
            let t = target.cell(cell / target.width(), cell % target.width());
            let ce: f64 = t.iter().zip(&row64).map(|(&p, &z)| -(p as f64) * (z - lse)).sum();
            self.ce_fixed += libm::round(ce * CE_SCALE) as i128;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &Metrics) {
        for (a, b) in self.confusion.iter_mut().zip(&other.confusion) {
            *a += b;
        }
        self.ce_fixed += other.ce_fixed;
    }

    pub fn pixels(&self) -> u64 {
        self.confusion.iter().sum()
    }

    pub fn accuracy(&self) -> f64 {
        let correct: u64 = (0..self.classes).map(|k| self.confusion[k * self.classes + k]).sum();
        correct as f64 / self.pixels().max(1) as f64
    }

    pub fn mean_ce(&self) -> f64 {
        self.ce_fixed as f64 / CE_SCALE / self.pixels().max(1) as f64
    }

    fn predicted(&self, k: usize) -> u64 {
        (0..self.classes).map(|t| self.confusion[t * self.classes + k]).sum()
    }

    fn actual(&self, k: usize) -> u64 {
        self.confusion[k * self.classes..(k + 1) * self.classes].iter().sum()
    }

    /// `None` when class `k` is never predicted.
    pub fn precision(&self, k: usize) -> Option<f64> {
        let p = self.predicted(k);
        (p > 0).then(|| self.confusion[k * self.classes + k] as f64 / p as f64)
    }

    /// `None` when class `k` never occurs in the truth.
    pub fn recall(&self, k: usize) -> Option<f64> {
        let a = self.actual(k);
        (a > 0).then(|| self.confusion[k * self.classes + k] as f64 / a as f64)
    }

    /// Mean precision over the classes present in the truth; a present class
    /// that is never predicted contributes zero.
    pub fn mean_precision(&self) -> f64 {
        let present: Vec<usize> = (0..self.classes).filter(|&k| self.actual(k) > 0).collect();
        if present.is_empty() {
            return 0.0;
        }
        present.iter().map(|&k| self.precision(k).unwrap_or(0.0)).sum::<f64>() / present.len() as f64
    }

    /// `accuracy=… mean_ce=… mean_precision=… precision_<name>=… …`, with
    /// `nan` for undefined precision or recall.
    pub fn to_text(&self, class_names: &[&str]) -> String {
        let mut s = format!(
            "pixels={} accuracy={:.6} mean_ce={:.6} mean_precision={:.6}",
            self.pixels(),
            self.accuracy(),
            self.mean_ce(),
            self.mean_precision()
        );
        let fmt = |v: Option<f64>| v.map_or(String::from("nan"), |x| format!("{x:.6}"));
        for k in 0..self.classes {
            let name = class_names.get(k).copied().unwrap_or("class");
            let _ = write!(s, " precision_{name}={} recall_{name}={}", fmt(self.precision(k)), fmt(self.recall(k)));
        }
        s
    }
}

/// Ground-label metrics of one pair under eval-mode batch norm.
pub fn evaluate_pair(model: &CrossViewModel<f32>, pair: &AlignedPair) -> Result<Metrics> {
    let rows: Vec<usize> = (0..model.config().ground_cells()).collect();
    let logits = model.predict_ground(pair.aerial_image.data(), &rows)?;
    let mut m = Metrics::new(model.config().classes);
    m.add(logits.data(), &pair.ground_labels)?;
    Ok(m)
}

pub fn evaluate(model: &CrossViewModel<f32>, data: &[AlignedPair]) -> Result<Metrics> {
    let mut m = Metrics::new(model.config().classes);
    for p in data {
        m.merge(&evaluate_pair(model, p)?);
    }
    Ok(m)
}

/// Aerial-label metrics of one pair (`L_a` on the aerial grid).
pub fn evaluate_aerial_pair(model: &CrossViewModel<f32>, pair: &AlignedPair) -> Result<Metrics> {
    let f = model.aerial_features(pair.aerial_image.data(), &model.config().aerial_grid_points())?;
    let mut m = Metrics::new(model.config().classes);
    m.add(f.data(), &pair.aerial_labels)?;
    Ok(m)
}

pub fn evaluate_aerial(model: &CrossViewModel<f32>, data: &[AlignedPair]) -> Result<Metrics> {
    let mut m = Metrics::new(model.config().classes);
    for p in data {
        m.merge(&evaluate_aerial_pair(model, p)?);
    }
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::CrossViewConfig;
    use crate::synth::{generate_split, Split, SynthConfig};

    fn tiny_setup(n: usize) -> (CrossViewModel<f32>, Vec<AlignedPair>) {
        let mut cfg = CrossViewConfig::desk();
        cfg.backbone.stage_channels = vec![4, 8, 8, 8];
        cfg.head_widths = vec![16];
        cfg.s_channels = vec![4, 8, 8];
        cfg.d_s = 8;
        cfg.f_widths = vec![16, 1];
        let model = CrossViewModel::new(cfg, 1).unwrap();
        let data = generate_split(2, Split::Train, n, &SynthConfig::default()).unwrap();
        (model, data)
    }

    #[test]
    fn grid_fits_and_covers_every_row() {
        let mut r = rng(1);
        for _ in 0..50 {
            let g = sample_grid(4, 16, (4, 8), &mut r);
            assert_eq!(g.len(), 32);
            assert!(g.iter().all(|&i| i < 64));
            let mut ys: Vec<usize> = g.iter().map(|i| i / 16).collect();
            ys.dedup();
            assert_eq!(ys, vec![0, 1, 2, 3]);
        }
        assert!(TrainConfig::default().validate(4, 16).is_ok());
        let bad = TrainConfig {
            sparse_grid: (8, 8),
            ..TrainConfig::default()
        };
        assert!(matches!(bad.validate(4, 16), Err(Error::Config(_))));
    }

    #[test]
    fn first_loss_is_ln_k_with_zero_output_layer() {
        let (mut model, data) = tiny_setup(4);
        model.zero_output_layer();
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 4,
            eval_every: 0,
            ..TrainConfig::default()
        };
        let log = train_crossview(&mut model, &data, &cfg, None, &mut |_| {}).unwrap();
        assert!((log.losses[0] - 4f64.ln()).abs() < 1e-5, "{}", log.losses[0]);
    }

    #[test]
    fn empty_dataset_is_a_config_error() {
        let (mut model, _) = tiny_setup(0);
        let r = train_crossview(&mut model, &[], &TrainConfig::default(), None, &mut |_| {});
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn zero_learning_rate_leaves_parameters_bit_identical() {
        let (mut model, data) = tiny_setup(2);
        let before = model.params.clone();
        let cfg = TrainConfig {
            epochs: 1,
            lr: 0.0,
            eval_every: 0,
            ..TrainConfig::default()
        };
        train_crossview(&mut model, &data, &cfg, None, &mut |_| {}).unwrap();
        for ((n, a), (_, b)) in before.iter().zip(model.params.iter()) {
            if before.is_trainable(before.find(n).unwrap()) {
                assert_eq!(a.data(), b.data(), "{n}");
            }
        }
    }

    #[test]
    fn training_is_deterministic() {
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 2,
            ..TrainConfig::default()
        };
        let run = || {
            let (mut model, data) = tiny_setup(4);
            let log = train_crossview(&mut model, &data, &cfg, Some(&data[..2]), &mut |_| {}).unwrap();
            (log.to_text(&crate::synth::CLASS_NAMES), model.params)
        };
        let (a, pa) = run();
        let (b, pb) = run();
        assert_eq!(a, b);
        assert_eq!(pa, pb);
    }

    #[test]
    fn sparse_loss_equals_restricted_full_loss() {
        let (model, data) = tiny_setup(2);
        let refs: Vec<&AlignedPair> = data.iter().collect();
        let rows = sample_grid(4, 16, (4, 8), &mut rng(3));
        let sparse = crossview_loss(&model, &refs, &rows, Mode::Eval).unwrap();
        let all: Vec<usize> = (0..64).collect();
        let mut full = 0.0;
        for p in &data {
            let logits = model.predict_ground(p.aerial_image.data(), &all).unwrap();
            for &r in &rows {
                let row: Vec<f64> = logits.data()[r * 4..r * 4 + 4].iter().map(|&v| v as f64).collect();
                let lse = crate::graph::log_sum_exp(&row);
                let t = &p.ground_labels.probs()[r * 4..r * 4 + 4];
                full -= t.iter().zip(&row).map(|(&p, &z)| p as f64 * (z - lse)).sum::<f64>();
            }
        }
        full /= (rows.len() * data.len()) as f64;
        assert!((sparse - full).abs() < 1e-5, "{sparse} vs {full}");
    }

    #[test]
    fn overfits_a_single_scene() {
        let mut model = CrossViewModel::new(CrossViewConfig::desk(), 1).unwrap();
        let data = generate_split(2, Split::Train, 1, &SynthConfig::default()).unwrap();
        let cfg = TrainConfig {
            epochs: 500,
            batch_size: 1,
            lr: 3e-3,
            sparse_grid: (4, 16),
            eval_every: 0,
            ..TrainConfig::default()
        };
        train_crossview(&mut model, &data, &cfg, None, &mut |_| {}).unwrap();
        let m = evaluate(&model, &data).unwrap();
        assert!(m.accuracy() >= 0.95, "{}", m.to_text(&crate::synth::CLASS_NAMES));
    }

    fn one_hot_logits(ids: &[u8], k: usize, margin: f32) -> Vec<f32> {
        ids.iter()
            .flat_map(|&c| (0..k).map(move |j| if j == c as usize { margin } else { 0.0 }))
            .collect()
    }

    #[test]
    fn perfect_predictions_score_one() {
        let ids = [0u8, 1, 2, 3, 1, 1];
        let target = LabelMap::one_hot(2, 3, 4, &ids).unwrap();
        let mut m = Metrics::new(4);
        m.add(&one_hot_logits(&ids, 4, 50.0), &target).unwrap();
        assert_eq!(m.accuracy(), 1.0);
        assert!((0..4).all(|k| m.precision(k) == Some(1.0)));
        assert!(m.mean_ce() < 1e-12);
    }

    #[test]
    fn constant_predictor_precision_is_prevalence() {
        let ids = [0u8, 1, 1, 2, 1, 3, 1, 0];
        let target = LabelMap::one_hot(2, 4, 4, &ids).unwrap();
        let mut m = Metrics::new(4);
        m.add(&one_hot_logits(&[1; 8], 4, 3.0), &target).unwrap();
        assert_eq!(m.precision(1), Some(4.0 / 8.0));
        assert_eq!(m.precision(0), None);
        assert_eq!(m.mean_precision(), 0.5 / 4.0);
    }

    #[test]
    fn uniform_logits_give_ln_k() {
        let target = LabelMap::one_hot(1, 3, 4, &[0, 2, 3]).unwrap();
        let mut m = Metrics::new(4);
        m.add(&[0.0; 12], &target).unwrap();
        assert!((m.mean_ce() - 4f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn random_predictions_are_near_chance() {
        let mut r = rng(9);
        let mut m = Metrics::new(4);
        let n = 4000;
        let ids: Vec<u8> = (0..n).map(|_| r.gen_range(0..4)).collect();
        let logits: Vec<f32> = (0..4 * n).map(|_| r.gen_range(-1.0..1.0)).collect();
        m.add(&logits, &LabelMap::one_hot(1, n, 4, &ids).unwrap()).unwrap();
        // 4 binomial standard deviations
        let sd = (0.25f64 * 0.75 / n as f64).sqrt();
        assert!((m.accuracy() - 0.25).abs() < 4.0 * sd, "{}", m.accuracy());
    }

    #[test]
    fn merge_order_does_not_matter() {
        let mut r = rng(5);
        let parts: Vec<(Vec<f32>, LabelMap)> = (0..5)
            .map(|_| {
                let ids: Vec<u8> = (0..6).map(|_| r.gen_range(0..4)).collect();
                let logits = (0..24).map(|_| r.gen_range(-3.0..3.0)).collect();
                (logits, LabelMap::one_hot(2, 3, 4, &ids).unwrap())
            })
            .collect();
        let fold = |order: &[usize]| {
            let mut m = Metrics::new(4);
            for &i in order {
                let mut one = Metrics::new(4);
                one.add(&parts[i].0, &parts[i].1).unwrap();
                m.merge(&one);
            }
            m
        };
        assert_eq!(fold(&[0, 1, 2, 3, 4]), fold(&[4, 2, 0, 3, 1]));
    }
}
