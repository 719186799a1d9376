//! Orientation estimation and fine-grained geocalibration.
//!
//! The energy of candidate orientation `s` (in panorama columns) is the mean
//! per-cell cross-entropy between the query rotated back by `s` columns and
//! the ground labels predicted from the aerial image. A query taken `s`
//! columns clockwise of the aligned panorama therefore has its minimum at
//! bin `s`.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::f64::consts::PI;
use core::fmt::Write as _;

use crate::error::{Error, Result};
use crate::labels::LabelMap;
use crate::model::CrossViewModel;
use crate::synth::crop_centered;
use crate::tensor::Tensor;

/// Mass mixed into both label maps before taking logarithms.
pub const SMOOTHING: f32 = 1e-3;

/// Default PDF temperature `0.1 · ln K`.
pub fn default_temperature(classes: usize) -> f64 {
    0.1 * libm::log(classes as f64)
}

/// Energy of candidate shift `shift` with explicit smoothing `eps`.
pub fn orientation_energy_eps(query: &LabelMap, pred: &LabelMap, shift: isize, eps: f32) -> Result<f64> {
    if !query.same_shape(pred) {
        return Err(Error::dim(
            "orientation_energy",
            &[query.height(), query.width(), query.classes()],
            &[pred.height(), pred.width(), pred.classes()],
        ));
    }
    let q = query.smoothed(eps);
    let p = pred.smoothed(eps);
    let (h, w) = (q.height(), q.width());
    let mut total = 0.0;
    for y in 0..h {
        for x in 0..w {
            let src = (x as isize + shift).rem_euclid(w as isize) as usize;
            total -= q
                .cell(y, src)
                .iter()
                .zip(p.cell(y, x))
                .map(|(&a, &b)| a as f64 * libm::log(b as f64))
                .sum::<f64>();
        }
    }
    Ok(total / (h * w) as f64)
}

/// Mean cross-entropy between `query` rotated back by `shift` columns and
/// `pred`, both smoothed by [`SMOOTHING`].
pub fn orientation_energy(query: &LabelMap, pred: &LabelMap, shift: isize) -> Result<f64> {
    orientation_energy_eps(query, pred, shift, SMOOTHING)
}

/// Energies and Boltzmann probabilities over candidate orientations.
#[derive(Debug, Clone, PartialEq)]
pub struct OrientationPdf {
    pub energies: Vec<f64>,
    pub probs: Vec<f64>,
    pub argmin: usize,
    pub temperature: f64,
}

impl OrientationPdf {
    /// `probs = softmax(−E / τ)`; the argmin takes the lowest bin on ties.
    pub fn from_energies(energies: Vec<f64>, temperature: f64) -> Result<Self> {
        if energies.is_empty() {
            return Err(Error::Validation("no candidate orientations".into()));
        }
        if energies.iter().any(|e| !e.is_finite()) || !(temperature > 0.0) {
            return Err(Error::Validation("non-finite energies or non-positive temperature".into()));
        }
        let mut argmin = 0;
        for (i, e) in energies.iter().enumerate() {
            if *e < energies[argmin] {
                argmin = i;
            }
        }
        let emin = energies[argmin];
        let mut probs: Vec<f64> = energies.iter().map(|e| libm::exp(-(e - emin) / temperature)).collect();
        let z: f64 = probs.iter().sum();
        probs.iter_mut().for_each(|p| *p /= z);
        Ok(OrientationPdf {
            energies,
            probs,
            argmin,
            temperature,
        })
    }

    pub fn bins(&self) -> usize {
        self.energies.len()
    }

    pub fn bin_to_radians(&self, bin: usize) -> f64 {
        bin as f64 * 2.0 * PI / self.bins() as f64
    }

    pub fn argmin_radians(&self) -> f64 {
        self.bin_to_radians(self.argmin)
    }

    pub fn min_energy(&self) -> f64 {
        self.energies[self.argmin]
    }

    pub fn peak_prob(&self) -> f64 {
        self.probs[self.argmin]
    }
}

/// Energies of every whole-column rotation of `query` against `pred`.
pub fn orientation_pdf(query: &LabelMap, pred: &LabelMap, temperature: f64) -> Result<OrientationPdf> {
    let energies = (0..query.width() as isize)
        .map(|s| orientation_energy(query, pred, s))
        .collect::<Result<Vec<_>>>()?;
    OrientationPdf::from_energies(energies, temperature)
}

/// Predicts the aligned ground labels of `image` once and scores every
/// column rotation of the query against them.
pub fn estimate_orientation(model: &CrossViewModel<f32>, image: &[f32], query: &LabelMap) -> Result<OrientationPdf> {
    let pred = model.predict_ground_labels(image)?;
    orientation_pdf(query, &pred, default_temperature(model.config().classes))
}

/// Orientation PDFs over a grid of candidate camera offsets.
#[derive(Debug, Clone, PartialEq)]
pub struct GeocalibResult {
    /// Row-major candidate offsets (meters from the aerial image center).
    pub offsets: Vec<(i64, i64)>,
    pub grid: (usize, usize),
    pub pdfs: Vec<OrientationPdf>,
    /// Index of the best location and its best orientation bin.
    pub best: (usize, usize),
}

impl GeocalibResult {
    pub fn assemble(offsets: Vec<(i64, i64)>, grid: (usize, usize), pdfs: Vec<OrientationPdf>) -> Result<Self> {
        if offsets.is_empty() || offsets.len() != grid.0 * grid.1 || pdfs.len() != offsets.len() {
            return Err(Error::Validation(format!(
                "{} offsets and {} PDFs for a {}×{} grid",
                offsets.len(),
                pdfs.len(),
                grid.0,
                grid.1
            )));
        }
        let mut best = 0;
        for (i, p) in pdfs.iter().enumerate() {
            if p.min_energy() < pdfs[best].min_energy() {
                best = i;
            }
        }
        let bin = pdfs[best].argmin;
        Ok(GeocalibResult {
            offsets,
            grid,
            pdfs,
            best: (best, bin),
        })
    }

    pub fn best_energy_map(&self) -> Vec<f64> {
        self.pdfs.iter().map(|p| p.min_energy()).collect()
    }

    pub fn best_offset(&self) -> (i64, i64) {
        self.offsets[self.best.0]
    }

    /// Grid coordinates `(row, col)` of location `index`.
    pub fn cell(&self, index: usize) -> (usize, usize) {
        (index / self.grid.1, index % self.grid.1)
    }

    /// A `# grid rows cols bins temperature` header, then one
    /// `offset_x offset_y bin energy prob` line per location and bin.
    pub fn to_text(&self) -> String {
        let p0 = &self.pdfs[0];
        let mut s = format!("# grid {} {} {} {:?}\n", self.grid.0, self.grid.1, p0.bins(), p0.temperature);
        for (off, pdf) in self.offsets.iter().zip(&self.pdfs) {
            for b in 0..pdf.bins() {
                let _ = writeln!(s, "{} {} {} {:?} {:?}", off.0, off.1, b, pdf.energies[b], pdf.probs[b]);
            }
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |m: String| Error::Validation(format!("geocalibration text: {m}"));
        let mut lines = text.lines();
        let header: Vec<&str> = lines.next().unwrap_or("").split_whitespace().collect();
        if header.len() != 6 || header[0] != "#" || header[1] != "grid" {
            return Err(bad("missing header".into()));
        }
        let num = |s: &str| s.parse::<usize>().map_err(|e| bad(format!("{s}: {e}")));
        let (rows, cols, bins) = (num(header[2])?, num(header[3])?, num(header[4])?);
        let tau: f64 = header[5].parse().map_err(|_| bad("temperature".into()))?;
        let mut offsets = Vec::new();
        let mut pdfs = Vec::new();
        let mut energies = Vec::new();
        for line in lines.filter(|l| !l.trim().is_empty()) {
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.len() != 5 {
                return Err(bad(format!("malformed line {line:?}")));
            }
            let off = (
                f[0].parse::<i64>().map_err(|_| bad(line.into()))?,
                f[1].parse::<i64>().map_err(|_| bad(line.into()))?,
            );
            if num(f[2])? != energies.len() {
                return Err(bad(format!("bins out of order at {line:?}")));
            }
            energies.push(f[3].parse::<f64>().map_err(|_| bad(line.into()))?);
            if energies.len() == bins {
                offsets.push(off);
                pdfs.push(OrientationPdf::from_energies(core::mem::take(&mut energies), tau)?);
            }
        }
        if !energies.is_empty() {
            return Err(bad("truncated PDF".into()));
        }
        GeocalibResult::assemble(offsets, (rows, cols), pdfs)
    }
}

/// Orientation PDF of one candidate location: the window of `image`
/// centered `offset` pixels from its center.
pub fn geocalib_cell(
    model: &CrossViewModel<f32>,
    image: &Tensor<f32>,
    query: &LabelMap,
    offset: (i64, i64),
) -> Result<OrientationPdf> {
    let crop = crop_centered(image, offset, model.config().backbone.input_size)?;
    estimate_orientation(model, crop.data(), query)
}

/// Checks every crop before any inference; the error names the first
/// offending offset.
pub fn check_offsets(image: &Tensor<f32>, offsets: &[(i64, i64)], crop: usize) -> Result<()> {
    for &off in offsets {
        let &[_, h, w] = image.shape() else {
            return Err(Error::dim("geocalibrate", image.shape(), &[3, crop, crop]));
        };
        let x0 = (w / 2) as i64 + off.0 - (crop / 2) as i64;
        let y0 = (h / 2) as i64 + off.1 - (crop / 2) as i64;
        if x0 < 0 || y0 < 0 || x0 as usize + crop > w || y0 as usize + crop > h {
            return Err(Error::Config(format!(
                "offset ({}, {}) puts the {crop}×{crop} crop outside the {w}×{h} aerial image",
                off.0, off.1
            )));
        }
    }
    Ok(())
}

pub fn geocalibrate(
    model: &CrossViewModel<f32>,
    image: &Tensor<f32>,
    query: &LabelMap,
    offsets: &[(i64, i64)],
    grid: (usize, usize),
) -> Result<GeocalibResult> {
    check_offsets(image, offsets, model.config().backbone.input_size)?;
    let pdfs = offsets
        .iter()
        .map(|&off| geocalib_cell(model, image, query, off))
        .collect::<Result<Vec<_>>>()?;
    GeocalibResult::assemble(offsets.to_vec(), grid, pdfs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{render_ground, Camera, Entity, EntityKind, Rect, SceneSpec, SynthConfig};
    use proptest::prelude::*;

    fn random_map(seed: u64, h: usize, w: usize, k: usize) -> LabelMap {
        use rand::Rng as _;
        let mut r = crate::rng::rng(seed);
        let logits: Vec<f32> = (0..h * w * k).map(|_| r.gen_range(-3.0..3.0)).collect();
        LabelMap::from_logits(h, w, k, &logits).unwrap()
    }

    fn random_hard(seed: u64, h: usize, w: usize) -> LabelMap {
        use rand::Rng as _;
        let mut r = crate::rng::rng(seed);
        let ids: Vec<u8> = (0..h * w).map(|_| r.gen_range(0..4)).collect();
        LabelMap::one_hot(h, w, 4, &ids).unwrap()
    }

    #[test]
    fn self_match_is_minimal() {
        let q = random_hard(1, 4, 16);
        let pdf = orientation_pdf(&q, &q, default_temperature(4)).unwrap();
        assert_eq!(pdf.argmin, 0);
        assert!((1..16).all(|s| pdf.energies[s] > pdf.energies[0]));
    }

    #[test]
    fn uniform_prediction_is_flat() {
        let q = random_hard(2, 4, 16);
        let pdf = orientation_pdf(&q, &LabelMap::uniform(4, 16, 4), 0.1).unwrap();
        for e in &pdf.energies {
            assert!((e - 4f64.ln()).abs() < 1e-6);
        }
        for p in &pdf.probs {
            assert!((p - 1.0 / 16.0).abs() < 1e-9);
        }
    }

    #[test]
    fn confident_wrong_prediction_stays_finite() {
        let q = LabelMap::one_hot(1, 2, 4, &[0, 1]).unwrap();
        let p = LabelMap::from_logits(1, 2, 4, &[-1e3, 1e3, 0.0, 0.0, 1e3, -1e3, 0.0, 0.0]).unwrap();
        let e = orientation_energy(&q, &p, 0).unwrap();
        assert!(e.is_finite() && e > 1.0);
    }

    #[test]
    fn shape_mismatch_is_a_dimension_error() {
        let r = orientation_energy(&LabelMap::uniform(2, 4, 4), &LabelMap::uniform(2, 8, 4), 0);
        assert!(matches!(r, Err(Error::Dimension { .. })));
    }

    #[test]
    fn shift_duality() {
        let q = random_map(3, 3, 8, 4);
        let p = random_map(4, 3, 8, 4);
        for s in -8..8isize {
            let a = orientation_energy(&q, &p, s).unwrap();
            // undoing the rotation on the query = applying it to the prediction
            let b = orientation_energy(&q, &p.shift_columns(s), 0).unwrap();
            assert!((a - b).abs() < 1e-12, "shift {s}");
            let c = orientation_energy(&q.shift_columns(-s), &p, 0).unwrap();
            assert!((a - c).abs() < 1e-12, "shift {s}");
        }
    }

    #[test]
    fn pdf_is_shift_invariant_and_normalized() {
        let e = alloc::vec![0.3, 1.2, 0.1, 0.7];
        let a = OrientationPdf::from_energies(e.clone(), 0.2).unwrap();
        let b = OrientationPdf::from_energies(e.iter().map(|x| x + 5.0).collect(), 0.2).unwrap();
        assert_eq!(a.argmin, 2);
        for (x, y) in a.probs.iter().zip(&b.probs) {
            assert!((x - y).abs() < 1e-12);
        }
        assert!((a.probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!((a.bin_to_radians(2) - PI).abs() < 1e-12);
    }

    #[test]
    fn rendered_rotation_is_recovered_from_the_oracle() {
        let cfg = SynthConfig::default();
        for seed in 0..8 {
            let scene = crate::synth::generate_scene(seed, &cfg).unwrap();
            let aligned = render_ground(&scene, &cfg, 0.0, (0.0, 0.0)).unwrap();
            let s = (seed as usize * 5) % cfg.w_g;
            let query = render_ground(&scene, &cfg, s as f64 * cfg.column_step(), (0.0, 0.0)).unwrap();
            let pdf = orientation_pdf(&query, &aligned, 0.1).unwrap();
            assert_eq!(pdf.argmin, s, "seed {seed}");
        }
    }

    #[test]
    fn symmetric_scene_has_two_opposite_minima() {
        let cfg = SynthConfig::default();
        let scene = SceneSpec {
            seed: 0,
            extent: 64.0,
            entities: alloc::vec![Entity {
                kind: EntityKind::Road,
                rect: Rect {
                    cx: 32.0,
                    cy: 32.0,
                    length: 200.0,
                    width: 6.0,
                    // along the 135° azimuth, a column center
                    angle: PI / 4.0,
                },
                height: 0.0,
                tint: 0.0,
            }],
            camera: Camera {
                x: 32.0,
                y: 32.0,
                height: 2.5,
            },
            w_pano: 16,
            h_pano: 4,
        };
        let aligned = render_ground(&scene, &cfg, 0.0, (0.0, 0.0)).unwrap();
        let query = render_ground(&scene, &cfg, 3.0 * cfg.column_step(), (0.0, 0.0)).unwrap();
        let pdf = orientation_pdf(&query, &aligned, 0.1).unwrap();
        let mut order: Vec<usize> = (0..16).collect();
        order.sort_by(|&a, &b| pdf.energies[a].partial_cmp(&pdf.energies[b]).unwrap());
        let (a, b) = (order[0].min(order[1]), order[0].max(order[1]));
        assert_eq!(b - a, 8);
        assert!(a == 3 || b == 3);
        assert!((pdf.energies[a] - pdf.energies[b]).abs() < 1e-9);
    }

    #[test]
    fn text_round_trip_preserves_result() {
        let pdfs: Vec<OrientationPdf> = (0..4)
            .map(|i| OrientationPdf::from_energies((0..6).map(|b| ((b * 7 + i * 3) % 5) as f64 * 0.37).collect(), 0.13).unwrap())
            .collect();
        let r = GeocalibResult::assemble(alloc::vec![(-1, -1), (1, -1), (-1, 1), (1, 1)], (2, 2), pdfs).unwrap();
        let back = GeocalibResult::from_text(&r.to_text()).unwrap();
        assert_eq!(back, r);
        let m = r.best_energy_map();
        assert_eq!(m[r.best.0], m.iter().cloned().fold(f64::INFINITY, f64::min));
    }

    proptest! {
        #[test]
        fn query_rotation_moves_argmin(seed in 0u64..500, s in 0isize..16) {
            let q = random_hard(seed, 2, 16);
            let p = random_map(seed + 1, 2, 16, 4);
            let base = orientation_pdf(&q, &p, 0.1).unwrap();
            let moved = orientation_pdf(&q.shift_columns(s), &p, 0.1).unwrap();
            // ties could legitimately move differently
            let mut sorted = base.energies.clone();
            sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
            prop_assume!(sorted[1] - sorted[0] > 1e-9);
            prop_assert_eq!(moved.argmin, (base.argmin + s as usize) % 16);
        }

        #[test]
        fn argmin_survives_monotone_transforms(e in proptest::collection::vec(-5.0f64..5.0, 1..20)) {
            let a = OrientationPdf::from_energies(e.clone(), 0.3).unwrap();
            let b = OrientationPdf::from_energies(e.iter().map(|x| 2.0 * x.exp() + 1.0).collect(), 0.3).unwrap();
            prop_assert_eq!(a.argmin, b.argmin);
            prop_assert!((a.probs.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }
}
