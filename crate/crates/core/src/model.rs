//! The cross-view network.
//!
//! Three sub-networks cooperate to turn an aerial image into ground-level
//! class logits:
//!
//! - `A`: a conv backbone whose stage outputs are bilinearly sampled into a
//!   hypercolumn at each aerial label cell, followed by per-point layers that
//!   emit `K` class logits `f_a`.
//! - `S`: a stride-2 conv stack projecting the image to a `d_s`-wide
//!   conditioning vector.
//! - `F`: an MLP scoring every `(ground row r, aerial column c)` pair from
//!   `[i, j, y, x, S(I_a)]`; a softmax over `c` makes the transform matrix
//!   `M` row-stochastic.
//!
//! Ground logits are `f_g' = M f_a + b` with a learnable per-pixel,
//! per-class bias `b`. In [`TransformKind::Naive`] mode `F` and `S` are
//! replaced by a directly learnable `(h_g w_g) × (h_a w_a)` logit table.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::graph::Var;
use crate::labels::LabelMap;
use crate::nn::{hypercolumn, Backbone, BackboneConfig, Conv2d, Linear, Mlp, Mode, ParamId, ParamStore, Pass};
use crate::rng::{rng, Rng};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Largest naive logit table (entries) accepted.
pub const NAIVE_TABLE_LIMIT: usize = 1 << 22;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TransformKind {
    /// `M` produced by the conditioned per-entry network.
    Adaptive,
    /// `M` logits are a free parameter table, independent of the image.
    Naive,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CrossViewConfig {
    pub h_a: usize,
    pub w_a: usize,
    pub h_g: usize,
    pub w_g: usize,
    pub classes: usize,
    /// Width of the conditioning vector `S(I_a)`.
    pub d_s: usize,
    pub backbone: BackboneConfig,
    /// Hidden widths of the per-point head after the hypercolumn; the final
    /// `classes`-wide linear layer is implied.
    pub head_widths: Vec<usize>,
    /// Output channels of the stride-2 convs in `S`.
    pub s_channels: Vec<usize>,
    /// Widths of `F`; the last must be 1.
    pub f_widths: Vec<usize>,
    pub transform: TransformKind,
}

impl CrossViewConfig {
    pub fn desk() -> Self {
        CrossViewConfig {
            h_a: 8,
            w_a: 8,
            h_g: 4,
            w_g: 16,
            classes: 4,
            d_s: 32,
            backbone: BackboneConfig::desk(),
            head_widths: vec![64, 64],
            s_channels: vec![8, 16, 16, 16],
            f_widths: vec![64, 32, 1],
            transform: TransformKind::Adaptive,
        }
    }

    /// Layer widths of the full-size network (VGG16 taps, 512-wide head,
    /// 293-wide transform input).
    pub fn paper_scale() -> Self {
        CrossViewConfig {
            h_a: 17,
            w_a: 17,
            h_g: 17,
            w_g: 17,
            classes: 4,
            d_s: 289,
            backbone: BackboneConfig::paper_scale(),
            head_widths: vec![512, 512],
            s_channels: vec![32, 64, 64, 64],
            f_widths: vec![128, 64, 1],
            transform: TransformKind::Adaptive,
        }
    }

    /// Smallest meaningful configuration, used for gradient checks.
    pub fn tiny() -> Self {
        CrossViewConfig {
            h_a: 3,
            w_a: 3,
            h_g: 2,
            w_g: 4,
            classes: 3,
            d_s: 5,
            backbone: BackboneConfig {
                stage_channels: vec![2, 3, 3],
                taps: vec![0, 1, 2],
                input_size: 8,
            },
            head_widths: vec![6],
            s_channels: vec![2, 3],
            f_widths: vec![6, 4, 1],
            transform: TransformKind::Adaptive,
        }
    }

    pub fn aerial_cells(&self) -> usize {
        self.h_a * self.w_a
    }

    pub fn ground_cells(&self) -> usize {
        self.h_g * self.w_g
    }

    /// Input width of `F`: four normalized coordinates plus `d_s`.
    pub fn f_input_width(&self) -> usize {
        4 + self.d_s
    }

    pub fn validate(&self) -> Result<()> {
        if [self.h_a, self.w_a, self.h_g, self.w_g].contains(&0) {
            return Err(Error::Config("label grid extents must be ≥ 1".into()));
        }
        if self.classes < 2 {
            return Err(Error::Config("need at least 2 classes".into()));
        }
        self.backbone.validate()?;
        if self.head_widths.contains(&0) {
            return Err(Error::Config(format!("head widths must be ≥ 1: {:?}", self.head_widths)));
        }
        match self.transform {
            TransformKind::Adaptive => {
                if self.d_s == 0 || self.s_channels.is_empty() || self.s_channels.contains(&0) {
                    return Err(Error::Config("conditioning network needs d_s ≥ 1 and ≥ 1 conv".into()));
                }
                if self.f_widths.last() != Some(&1) || self.f_widths.contains(&0) {
                    return Err(Error::Config(format!("transform widths must end in 1: {:?}", self.f_widths)));
                }
            }
            TransformKind::Naive => {
                let entries = self.ground_cells() * self.aerial_cells();
                if entries > NAIVE_TABLE_LIMIT {
                    return Err(Error::Config(format!(
                        "naive transform table has {entries} entries (limit {NAIVE_TABLE_LIMIT})"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Normalized aerial cell centers `((ii + 0.5) / h_a, (jj + 0.5) / w_a)`
    /// in column order `c = ii · w_a + jj`.
    pub fn aerial_grid_points(&self) -> Vec<(f64, f64)> {
        (0..self.aerial_cells())
            .map(|c| {
                let (ii, jj) = (c / self.w_a, c % self.w_a);
                ((ii as f64 + 0.5) / self.h_a as f64, (jj as f64 + 0.5) / self.w_a as f64)
            })
            .collect()
    }
}

/// Normalized coordinates `(i, j, y, x)` of transform entry `(r, c)`:
/// `i = ⌊c / w_a⌋ / h_a`, `j = (c mod w_a) / w_a`, `y = ⌊r / w_g⌋ / h_g`,
/// `x = (r mod w_g) / w_g`.
pub fn normalize_indices(r: usize, c: usize, cfg: &CrossViewConfig) -> Result<[f64; 4]> {
    if r >= cfg.ground_cells() || c >= cfg.aerial_cells() {
        return Err(Error::Contract(format!(
            "entry ({r}, {c}) outside {}×{} transform",
            cfg.ground_cells(),
            cfg.aerial_cells()
        )));
    }
    Ok([
        (c / cfg.w_a) as f64 / cfg.h_a as f64,
        (c % cfg.w_a) as f64 / cfg.w_a as f64,
        (r / cfg.w_g) as f64 / cfg.h_g as f64,
        (r % cfg.w_g) as f64 / cfg.w_g as f64,
    ])
}

#[derive(Debug, Clone)]
/// `S`: stride-2 convs and a projection to `d_s`, ReLU throughout. No batch
/// norm: train-mode statistics over a small batch would make `S(I_a)` depend
/// on the other images in the batch, and that noise stalls the transform.
struct Conditioning {
    convs: Vec<Conv2d>,
    proj: Linear,
}

#[derive(Debug, Clone)]
enum TransformNet {
    Adaptive { cond: Conditioning, f: Mlp },
    Naive { table: ParamId },
}

/// Parameter groups, used for per-group gradient reporting.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    Aerial,
    Conditioning,
    Transform,
    Bias,
}

impl ParamGroup {
    pub fn of(name: &str) -> ParamGroup {
        match name.split('.').next() {
            Some("A") => ParamGroup::Aerial,
            Some("S") => ParamGroup::Conditioning,
            Some("F") => ParamGroup::Transform,
            _ => ParamGroup::Bias,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            ParamGroup::Aerial => "A",
            ParamGroup::Conditioning => "S",
            ParamGroup::Transform => "F",
            ParamGroup::Bias => "b",
        }
    }
}

#[derive(Debug, Clone)]
pub struct CrossViewModel<T> {
    config: CrossViewConfig,
    pub params: ParamStore<T>,
    backbone: Backbone,
    head: Mlp,
    transform: TransformNet,
    bias: ParamId,
}

fn conv_out(size: usize) -> usize {
    (size + 2 - 3) / 2 + 1
}

impl<T: Scalar> CrossViewModel<T> {
    /// Builds a model with Xavier-uniform weights, zero biases and a zero
    /// ground bias `b`.
    pub fn new(config: CrossViewConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut r = rng(seed);
        let mut ps = ParamStore::new();
        let backbone = Backbone::new(&mut ps, "A", 3, config.backbone.clone(), &mut r)?;
        let mut widths = config.head_widths.clone();
        widths.push(config.classes);
        let head = Mlp::new(&mut ps, "A.head", config.backbone.hypercolumn_width(), &widths, &mut r)?;
        let transform = match config.transform {
            TransformKind::Adaptive => {
                let cond = Self::build_conditioning(&mut ps, &config, &mut r);
                let f = Mlp::new(&mut ps, "F", config.f_input_width(), &config.f_widths, &mut r)?;
                TransformNet::Adaptive { cond, f }
            }
            TransformKind::Naive => {
                let n = config.ground_cells() * config.aerial_cells();
                let table = ps.add_param(
                    "F.table",
                    Tensor::new(vec![config.ground_cells(), config.aerial_cells()], vec![T::zero(); n])?,
                );
                TransformNet::Naive { table }
            }
        };
        let bias = ps.add_param("b", Tensor::zeros(&[config.ground_cells(), config.classes]));
        Ok(CrossViewModel {
            config,
            params: ps,
            backbone,
            head,
            transform,
            bias,
        })
    }

    fn build_conditioning(ps: &mut ParamStore<T>, cfg: &CrossViewConfig, r: &mut Rng) -> Conditioning {
        let mut prev = 3;
        let mut size = cfg.backbone.input_size;
        let mut convs = Vec::new();
        for (i, &c) in cfg.s_channels.iter().enumerate() {
            convs.push(Conv2d::new(ps, &format!("S.conv{}", i + 1), prev, c, 3, 2, 1, r));
            prev = c;
            size = conv_out(size);
        }
        let proj = Linear::new(ps, "S.proj", prev * size * size, cfg.d_s, r);
        Conditioning { convs, proj }
    }

    pub fn config(&self) -> &CrossViewConfig {
        &self.config
    }

    pub fn is_naive(&self) -> bool {
        matches!(self.transform, TransformNet::Naive { .. })
    }

    /// Parameter names belonging to the aerial backbone (the part shared
    /// with direct aerial finetuning).
    pub fn backbone_param_names(&self) -> Vec<&str> {
        self.params
            .iter()
            .map(|(n, _)| n)
            .filter(|n| n.starts_with("A.stage"))
            .collect()
    }

    /// Zeroes the final aerial head layer so `f_a ≡ 0` at initialization.
    pub fn zero_output_layer(&mut self) {
        let last = self.head.layers.last().unwrap().linear.clone();
        self.params.get_mut(last.weight).data_mut().iter_mut().for_each(|v| *v = T::zero());
        self.params.get_mut(last.bias).data_mut().iter_mut().for_each(|v| *v = T::zero());
    }

    // ---- graph-level building blocks --------------------------------------

    /// Stacks `[3, H, W]` images into a `[N, 3, H, W]` constant.
    pub fn image_batch(&self, pass: &mut Pass<'_, T>, images: &[&[T]]) -> Result<Var> {
        let s = self.config.backbone.input_size;
        let mut data = Vec::with_capacity(images.len() * 3 * s * s);
        for img in images {
            if img.len() != 3 * s * s {
                return Err(Error::dim("image", &[img.len()], &[3, s, s]));
            }
            data.extend_from_slice(img);
        }
        pass.graph.constant(&[images.len(), 3, s, s], data)
    }

    /// Per-point class logits `f_a`: `[N · P, K]`.
    pub fn aerial_logits(&self, pass: &mut Pass<'_, T>, images: Var, points: &[(f64, f64)]) -> Result<Var> {
        let maps = self.backbone.forward(pass, images)?;
        let hc = hypercolumn(pass, &maps, points)?;
        self.head.forward(pass, hc)
    }

    /// `S(I_a)`: `[N, d_s]`. Zero-width for the naive transform.
    pub fn conditioning(&self, pass: &mut Pass<'_, T>, images: Var) -> Result<Var> {
        let TransformNet::Adaptive { cond, .. } = &self.transform else {
            return Err(Error::Config("naive transform has no conditioning network".into()));
        };
        let n = pass.graph.shape(images)[0];
        let mut h = images;
        for conv in &cond.convs {
            h = conv.forward(pass, h)?;
            h = pass.graph.relu(h);
        }
        let flat = pass.graph.shape(h)[1..].iter().product::<usize>();
        let h = pass.graph.reshape(h, &[n, flat])?;
        let h = cond.proj.forward(pass, h)?;
        Ok(pass.graph.relu(h))
    }

    fn check_rows(&self, rows: &[usize]) -> Result<()> {
        match rows.iter().find(|&&r| r >= self.config.ground_cells()) {
            Some(r) => Err(Error::Contract(format!(
                "ground row {r} out of range ({} rows)",
                self.config.ground_cells()
            ))),
            None => Ok(()),
        }
    }

    /// Pre-softmax transform scores for the requested rows of each of `n`
    /// images: `[n · R, h_a · w_a]`.
    pub fn transform_logits(&self, pass: &mut Pass<'_, T>, cond: Option<Var>, n: usize, rows: &[usize]) -> Result<Var> {
        self.check_rows(rows)?;
        let cols = self.config.aerial_cells();
        match &self.transform {
            TransformNet::Naive { table } => {
                let t = pass.param(*table);
                let idx: Vec<usize> = (0..n).flat_map(|_| rows.iter().copied()).collect();
                pass.graph.gather_rows(t, &idx)
            }
            TransformNet::Adaptive { f, .. } => {
                let cond = cond.ok_or_else(|| Error::Contract("adaptive transform needs S(I_a)".into()))?;
                let per_image = rows.len() * cols;
                let mut coords = Vec::with_capacity(n * per_image * 4);
                for _ in 0..n {
                    for &r in rows {
                        for c in 0..cols {
                            for v in normalize_indices(r, c, &self.config)? {
                                coords.push(T::lit(v));
                            }
                        }
                    }
                }
                let coords = pass.graph.constant(&[n * per_image, 4], coords)?;
                let s = pass.graph.repeat_rows(cond, per_image);
                let input = pass.graph.concat(&[coords, s])?;
                let out = f.forward(pass, input)?;
                pass.graph.reshape(out, &[n * rows.len(), cols])
            }
        }
    }

    /// Row-stochastic rows of `M`: `[n · R, h_a · w_a]`.
    pub fn transform_rows_var(&self, pass: &mut Pass<'_, T>, cond: Option<Var>, n: usize, rows: &[usize]) -> Result<Var> {
        let logits = self.transform_logits(pass, cond, n, rows)?;
        Ok(pass.graph.softmax(logits))
    }

    /// `f_g'[r] = Σ_c M[r, c] f_a[c] + b[r]` for each image: `[n · R, K]`.
    pub fn apply_transform_var(&self, pass: &mut Pass<'_, T>, m: Var, f_a: Var, n: usize, rows: &[usize]) -> Result<Var> {
        let (r, c, k) = (rows.len(), self.config.aerial_cells(), self.config.classes);
        let m3 = pass.graph.reshape(m, &[n, r, c])?;
        let f3 = pass.graph.reshape(f_a, &[n, c, k])?;
        let prod = pass.graph.matmul(m3, f3)?;
        let prod = pass.graph.reshape(prod, &[n * r, k])?;
        let b = pass.param(self.bias);
        let idx: Vec<usize> = (0..n).flat_map(|_| rows.iter().copied()).collect();
        let b_rows = pass.graph.gather_rows(b, &idx)?;
        pass.graph.add(prod, b_rows)
    }

    /// Ground logits for the requested rows of every image: `[n · R, K]`.
    pub fn predict_ground_var(&self, pass: &mut Pass<'_, T>, images: Var, rows: &[usize]) -> Result<Var> {
        self.check_rows(rows)?;
        let n = pass.graph.shape(images)[0];
        let f_a = self.aerial_logits(pass, images, &self.config.aerial_grid_points())?;
        let cond = match self.transform {
            TransformNet::Adaptive { .. } => Some(self.conditioning(pass, images)?),
            TransformNet::Naive { .. } => None,
        };
        let m = self.transform_rows_var(pass, cond, n, rows)?;
        self.apply_transform_var(pass, m, f_a, n, rows)
    }

    // ---- eval-mode tensor API ---------------------------------------------

    fn eval_pass(&self) -> Pass<'_, T> {
        self.params.pass(Mode::Eval, false)
    }

    /// `f_a` at arbitrary normalized points of one image: `[P, K]`.
    pub fn aerial_features(&self, image: &[T], points: &[(f64, f64)]) -> Result<Tensor<T>> {
        if points.is_empty() {
            let mut pass = self.eval_pass();
            self.image_batch(&mut pass, &[image])?;
            return Ok(Tensor::zeros(&[0, self.config.classes]));
        }
        let mut pass = self.eval_pass();
        let img = self.image_batch(&mut pass, &[image])?;
        let v = self.aerial_logits(&mut pass, img, points)?;
        Ok(pass.graph.tensor(v))
    }

    /// Aerial label distribution `L_a = softmax(f_a)` on a `rows × cols` grid
    /// of cell centers.
    pub fn aerial_labels(&self, image: &[T], rows: usize, cols: usize) -> Result<LabelMap> {
        let pts: Vec<(f64, f64)> = (0..rows * cols)
            .map(|i| (((i / cols) as f64 + 0.5) / rows as f64, ((i % cols) as f64 + 0.5) / cols as f64))
            .collect();
        let f = self.aerial_features(image, &pts)?;
        let logits: Vec<f32> = f.data().iter().map(|v| v.as_f64() as f32).collect();
        LabelMap::from_logits(rows, cols, self.config.classes, &logits)
    }

    pub fn conditioning_vector(&self, image: &[T]) -> Result<Tensor<T>> {
        let mut pass = self.eval_pass();
        let img = self.image_batch(&mut pass, &[image])?;
        let v = self.conditioning(&mut pass, img)?;
        let t = pass.graph.tensor(v);
        t.reshape(&[self.config.d_s])
    }

    /// Requested rows of `M` and their pre-softmax logits, each `[R, h_a w_a]`.
    pub fn transform_rows(&self, image: &[T], rows: &[usize]) -> Result<(Tensor<T>, Tensor<T>)> {
        let mut pass = self.eval_pass();
        let img = self.image_batch(&mut pass, &[image])?;
        let cond = match self.transform {
            TransformNet::Adaptive { .. } => Some(self.conditioning(&mut pass, img)?),
            TransformNet::Naive { .. } => None,
        };
        let logits = self.transform_logits(&mut pass, cond, 1, rows)?;
        let m = pass.graph.softmax(logits);
        Ok((pass.graph.tensor(m), pass.graph.tensor(logits)))
    }

    /// The full `(h_g w_g) × (h_a w_a)` transform matrix for one image.
    pub fn transform_matrix(&self, image: &[T]) -> Result<Tensor<T>> {
        let rows: Vec<usize> = (0..self.config.ground_cells()).collect();
        Ok(self.transform_rows(image, &rows)?.0)
    }

    /// Ground logits for the requested rows of one image: `[R, K]`.
    pub fn predict_ground(&self, image: &[T], rows: &[usize]) -> Result<Tensor<T>> {
        let mut pass = self.eval_pass();
        let img = self.image_batch(&mut pass, &[image])?;
        let v = self.predict_ground_var(&mut pass, img, rows)?;
        Ok(pass.graph.tensor(v))
    }

    /// Full-grid ground logits for a batch of images, `[N · h_g w_g, K]`.
    pub fn predict_ground_batch(&self, images: &[&[T]]) -> Result<Tensor<T>> {
        let rows: Vec<usize> = (0..self.config.ground_cells()).collect();
        let mut pass = self.eval_pass();
        let img = self.image_batch(&mut pass, images)?;
        let v = self.predict_ground_var(&mut pass, img, &rows)?;
        Ok(pass.graph.tensor(v))
    }

    /// `L_g'` over the whole ground grid.
    pub fn predict_ground_labels(&self, image: &[T]) -> Result<LabelMap> {
        let rows: Vec<usize> = (0..self.config.ground_cells()).collect();
        let t = self.predict_ground(image, &rows)?;
        let logits: Vec<f32> = t.data().iter().map(|v| v.as_f64() as f32).collect();
        LabelMap::from_logits(self.config.h_g, self.config.w_g, self.config.classes, &logits)
    }
}

/// `f_g' = M f_a + b` on plain tensors: `m_rows: [R, C]`, `f_a: [C, K]`,
/// `b_rows: [R, K]`.
pub fn apply_transform<T: Scalar>(m_rows: &Tensor<T>, f_a: &Tensor<T>, b_rows: &Tensor<T>) -> Result<Tensor<T>> {
    let mut g = crate::graph::Graph::new();
    let m = g.leaf(m_rows);
    let f = g.leaf(f_a);
    let b = g.leaf(b_rows);
    let p = g.matmul(m, f)?;
    if g.shape(p) != b_rows.shape() {
        return Err(Error::dim("apply_transform", g.shape(p), b_rows.shape()));
    }
    let out = g.add(p, b)?;
    Ok(g.tensor(out))
}
