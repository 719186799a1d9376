//! Central finite-difference checks of reverse-mode gradients.
//!
//! The numeric side only ever evaluates forward passes, so it is independent
//! of every backward rule it validates.

use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng as _;

use crate::error::Result;
use crate::graph::{BnLayout, Graph, Var};
use crate::model::{CrossViewConfig, CrossViewModel, ParamGroup};
use crate::nn::{Mode, ParamStore};
use crate::rng::{rng, Rng};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// `‖a − b‖₂ / max(‖a‖₂, ‖b‖₂, 1e-12)`.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let mut diff = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for (x, y) in a.iter().zip(b) {
        diff += (x - y) * (x - y);
        na += x * x;
        nb += y * y;
    }
    libm::sqrt(diff) / libm::sqrt(na).max(libm::sqrt(nb)).max(1e-12)
}

/// `(f(x + h e_i) − f(x − h e_i)) / 2h` for every coordinate.
pub fn central_difference<T: Scalar>(x: &mut [T], h: f64, mut f: impl FnMut(&[T]) -> f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = T::lit(orig.as_f64() + h);
        let plus = f(x);
        x[i] = T::lit(orig.as_f64() - h);
        let minus = f(x);
        x[i] = orig;
        out.push((plus - minus) / (2.0 * h));
    }
    out
}

/// Compares the tape gradient of `Σ w ⊙ op(inputs)` (fixed random `w`) with
/// central differences. Returns the relative error over all inputs.
pub fn check_op<T: Scalar>(
    inputs: &[Tensor<T>],
    h: f64,
    seed: u64,
    op: impl Fn(&mut Graph<T>, &[Var]) -> Result<Var>,
) -> Result<f64> {
    let eval = |vals: &[Tensor<T>], track: bool| -> Result<(f64, Vec<Vec<f64>>)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = vals
            .iter()
            .map(|t| g.input(t.shape(), t.data().to_vec(), track).unwrap())
            .collect();
        let out = op(&mut g, &vars)?;
        let mut r = rng(seed);
        let n = g.value(out).len();
        let w: Vec<T> = (0..n).map(|_| T::lit(r.gen_range(-1.0..1.0))).collect();
        let shape = g.shape(out).to_vec();
        let wv = g.constant(&shape, w)?;
        let prod = g.mul(out, wv)?;
        let loss = g.sum(prod);
        let value = g.value(loss)[0].as_f64();
        let mut grads = Vec::new();
        if track {
            g.backward(loss)?;
            for v in &vars {
                grads.push(g.grad(*v).map_or_else(|| alloc::vec![0.0; g.value(*v).len()], |gr| gr.iter().map(|x| x.as_f64()).collect()));
            }
        }
        Ok((value, grads))
    };
    let (_, analytic) = eval(inputs, true)?;
    let mut numeric = Vec::new();
    let mut work: Vec<Tensor<T>> = inputs.to_vec();
    for k in 0..work.len() {
        let mut data = work[k].data().to_vec();
        let shape = work[k].shape().to_vec();
        let nd = central_difference(&mut data, h, |d| {
            let mut vals = work.clone();
            vals[k] = Tensor::new(shape.clone(), d.to_vec()).unwrap();
            eval(&vals, false).map(|v| v.0).unwrap_or(f64::NAN)
        });
        work[k] = Tensor::new(shape, data)?;
        numeric.extend(nd);
    }
    let analytic: Vec<f64> = analytic.into_iter().flatten().collect();
    Ok(relative_error(&analytic, &numeric))
}

fn random_tensor<T: Scalar>(r: &mut Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::lit(r.gen_range(lo..hi)))
}

fn random_distributions<T: Scalar>(r: &mut Rng, rows: usize, k: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(rows * k);
    for _ in 0..rows {
        let raw: Vec<f64> = (0..k).map(|_| r.gen_range(0.05..1.0)).collect();
        let s: f64 = raw.iter().sum();
        out.extend(raw.iter().map(|v| T::lit(v / s)));
    }
    out
}

/// Result of one gradient check.
#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: String,
    pub rel_err: f64,
}

/// Finite-difference checks of every differentiable op on small random inputs.
pub fn check_all_ops<T: Scalar>(seed: u64, h: f64) -> Result<Vec<CheckResult>> {
    let mut r = rng(seed);
    let mut out = Vec::new();
    let mut push = |name: &str, e: f64| {
        out.push(CheckResult {
            name: name.into(),
            rel_err: e,
        })
    };
    let a = random_tensor::<T>(&mut r, &[3, 4], -1.0, 1.0);
    let b = random_tensor::<T>(&mut r, &[4, 2], -1.0, 1.0);
    push("matmul", check_op(&[a.clone(), b], h, seed, |g, v| g.matmul(v[0], v[1]))?);
    let a3 = random_tensor::<T>(&mut r, &[2, 3, 4], -1.0, 1.0);
    let b3 = random_tensor::<T>(&mut r, &[2, 4, 2], -1.0, 1.0);
    push("batched_matmul", check_op(&[a3, b3], h, seed, |g, v| g.matmul(v[0], v[1]))?);
    let c = random_tensor::<T>(&mut r, &[3, 4], -1.0, 1.0);
    push("add", check_op(&[a.clone(), c.clone()], h, seed, |g, v| g.add(v[0], v[1]))?);
    push("mul", check_op(&[a.clone(), c.clone()], h, seed, |g, v| g.mul(v[0], v[1]))?);
    let bias = random_tensor::<T>(&mut r, &[4], -1.0, 1.0);
    push("add_bias", check_op(&[a.clone(), bias], h, seed, |g, v| g.add_bias(v[0], v[1]))?);
    push("scale", check_op(&[a.clone()], h, seed, |g, v| Ok(g.scale(v[0], T::lit(-2.5))))?);
    // keep relu inputs away from the kink
    let pos = Tensor::from_fn(&[3, 4], |i| T::lit(if i % 2 == 0 { 0.3 + 0.1 * i as f64 } else { -0.2 - 0.1 * i as f64 }));
    push("relu", check_op(&[pos], h, seed, |g, v| Ok(g.relu(v[0])))?);
    push("softmax", check_op(&[a.clone()], h, seed, |g, v| Ok(g.softmax(v[0])))?);
    let target: Vec<T> = random_distributions(&mut r, 3, 4);
    push(
        "cross_entropy",
        check_op(&[a.clone()], h, seed, |g, v| g.cross_entropy(v[0], &target))?,
    );
    let x = random_tensor::<T>(&mut r, &[2, 2, 5, 5], -1.0, 1.0);
    let w = random_tensor::<T>(&mut r, &[3, 2, 3, 3], -0.5, 0.5);
    let bc = random_tensor::<T>(&mut r, &[3], -0.5, 0.5);
    push(
        "conv2d",
        check_op(&[x.clone(), w.clone(), bc.clone()], h, seed, |g, v| g.conv2d(v[0], v[1], Some(v[2]), 1, 1))?,
    );
    push(
        "conv2d_stride2",
        check_op(&[x.clone(), w, bc], h, seed, |g, v| g.conv2d(v[0], v[1], Some(v[2]), 2, 1))?,
    );
    let pts = [(0.1, 0.7), (0.5, 0.5), (0.93, 0.02), (1.2, -0.1)];
    push(
        "bilinear_sample",
        check_op(&[x.clone()], h, seed, |g, v| g.bilinear_sample(v[0], &pts))?,
    );
    let d = random_tensor::<T>(&mut r, &[3, 2], -1.0, 1.0);
    push("concat", check_op(&[a.clone(), d], h, seed, |g, v| g.concat(&[v[0], v[1]]))?);
    push("reshape", check_op(&[a.clone()], h, seed, |g, v| g.reshape(v[0], &[2, 6]))?);
    push("mean", check_op(&[a.clone()], h, seed, |g, v| Ok(g.mean(v[0])))?);
    push("gather_rows", check_op(&[a.clone()], h, seed, |g, v| g.gather_rows(v[0], &[2, 0, 2]))?);
    push("repeat_rows", check_op(&[a.clone()], h, seed, |g, v| Ok(g.repeat_rows(v[0], 3)))?);
    let gamma = random_tensor::<T>(&mut r, &[2], 0.5, 1.5);
    let beta = random_tensor::<T>(&mut r, &[2], -0.5, 0.5);
    push(
        "batch_norm_train",
        check_op(&[x.clone(), gamma.clone(), beta.clone()], h, seed, |g, v| {
            let layout = BnLayout::nchw(g.shape(v[0]));
            Ok(g.batch_norm(v[0], v[1], v[2], layout, None, T::lit(1e-5))?.0)
        })?,
    );
    let rm = [T::lit(0.1), T::lit(-0.2)];
    let rv = [T::lit(0.8), T::lit(1.3)];
    push(
        "batch_norm_eval",
        check_op(&[x, gamma, beta], h, seed, |g, v| {
            let layout = BnLayout::nchw(g.shape(v[0]));
            Ok(g.batch_norm(v[0], v[1], v[2], layout, Some((&rm, &rv)), T::lit(1e-5))?.0)
        })?,
    );
    // one leaf feeding two consumers
    push(
        "shared_leaf",
        check_op(&[a], h, seed, |g, v| {
            let s = g.softmax(v[0]);
            let t = g.mul(v[0], v[0])?;
            g.add(s, t)
        })?,
    );
    Ok(out)
}

/// Per-parameter-group gradient check of the whole cross-view model.
#[derive(Debug, Clone)]
pub struct GroupCheck {
    pub group: ParamGroup,
    pub params: usize,
    pub rel_err: f64,
    pub grad_norm: f64,
}

/// Cross-entropy of the model's full-grid ground logits against random
/// targets, on a batch of random images, with train-mode batch norm.
pub struct ModelLoss<T> {
    pub images: Vec<Vec<T>>,
    pub targets: Vec<T>,
}

impl<T: Scalar> ModelLoss<T> {
    pub fn random(cfg: &CrossViewConfig, batch: usize, seed: u64) -> Self {
        let mut r = rng(seed);
        let s = cfg.backbone.input_size;
        let images = (0..batch)
            .map(|_| (0..3 * s * s).map(|_| T::lit(r.gen_range(0.0..1.0))).collect())
            .collect();
        let targets = random_distributions(&mut r, batch * cfg.ground_cells(), cfg.classes);
        ModelLoss { images, targets }
    }

    pub fn eval(&self, model: &CrossViewModel<T>, store: &ParamStore<T>, track: bool) -> Result<(f64, Vec<(usize, Vec<T>)>)> {
        let rows: Vec<usize> = (0..model.config().ground_cells()).collect();
        let mut pass = store.pass(Mode::Train, track);
        let refs: Vec<&[T]> = self.images.iter().map(|v| v.as_slice()).collect();
        let img = model.image_batch(&mut pass, &refs)?;
        let out = model.predict_ground_var(&mut pass, img, &rows)?;
        let loss = pass.graph.cross_entropy(out, &self.targets)?;
        let value = pass.graph.value(loss)[0].as_f64();
        if track {
            pass.backward(loss)?;
        }
        let grads = pass.finish().grads.into_iter().map(|(id, g)| (id.0, g)).collect();
        Ok((value, grads))
    }
}

/// End-to-end finite-difference check of every trainable parameter, grouped
/// into `A`, `S`, `F` and `b`.
pub fn check_model(cfg: CrossViewConfig, seed: u64, h: f64) -> Result<Vec<GroupCheck>> {
    let model = CrossViewModel::<f64>::new(cfg.clone(), seed)?;
    let loss = ModelLoss::<f64>::random(&cfg, 2, seed ^ 0x5eed);
    let (_, grads) = loss.eval(&model, &model.params, true)?;
    let mut store = model.params.clone();
    let groups = [ParamGroup::Aerial, ParamGroup::Conditioning, ParamGroup::Transform, ParamGroup::Bias];
    let mut acc: Vec<(Vec<f64>, Vec<f64>, usize)> = groups.iter().map(|_| (Vec::new(), Vec::new(), 0)).collect();
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        if !store.is_trainable(id) {
            continue;
        }
        let name = String::from(store.name(id));
        let gi = groups.iter().position(|g| *g == ParamGroup::of(&name)).unwrap();
        let analytic: Vec<f64> = grads
            .iter()
            .find(|(i, _)| *i == id.0)
            .map(|(_, g)| g.clone())
            .unwrap_or_else(|| alloc::vec![0.0; store.get(id).numel()]);
        let shape = store.get(id).shape().to_vec();
        let mut data = store.get(id).data().to_vec();
        let numeric = central_difference(&mut data, h, |d| {
            let mut s = store.clone();
            s.set_value(&name, d, &shape).unwrap();
            loss.eval(&model, &s, false).map(|v| v.0).unwrap_or(f64::NAN)
        });
        store.set_value(&name, &data, &shape)?;
        acc[gi].0.extend(analytic);
        acc[gi].1.extend(numeric);
        acc[gi].2 += 1;
    }
    Ok(groups
        .iter()
        .zip(acc)
        .filter(|(_, (a, _, _))| !a.is_empty())
        .map(|(g, (a, n, _))| GroupCheck {
            group: *g,
            params: a.len(),
            rel_err: relative_error(&a, &n),
            grad_norm: libm::sqrt(a.iter().map(|v| v * v).sum::<f64>()),
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_op_matches_finite_differences_f64() {
        for c in check_all_ops::<f64>(3, 1e-5).unwrap() {
            assert!(c.rel_err < 1e-6, "{}: {}", c.name, c.rel_err);
        }
    }

    #[test]
    fn every_op_matches_finite_differences_f32() {
        for c in check_all_ops::<f32>(4, 1e-2).unwrap() {
            assert!(c.rel_err < 1e-3, "{}: {}", c.name, c.rel_err);
        }
    }

    #[test]
    fn tiny_model_gradients_match() {
        let groups = check_model(CrossViewConfig::tiny(), 11, 1e-5).unwrap();
        assert_eq!(groups.len(), 4);
        for g in groups {
            assert!(g.rel_err < 1e-6, "{:?}: {}", g.group, g.rel_err);
            assert!(g.grad_norm > 0.0, "{:?} has zero gradient", g.group);
        }
    }
}
