//! Deterministic rasterization into binary PPM (P6) images.
//!
//! Colors follow the usual convention for the four classes: road red,
//! vegetation green, man-made blue, sky white. Arrows are integer Bresenham
//! lines with no anti-aliasing, so every render is a pure function of its
//! inputs.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use libm::{cos, round, sin};

use crate::error::{Error, Result};
use crate::geocalib::GeocalibResult;
use crate::labels::LabelMap;
use crate::model::CrossViewModel;
use crate::tensor::Tensor;

pub type Rgb = [u8; 3];

pub const RED: Rgb = [255, 0, 0];
pub const GREEN: Rgb = [0, 160, 0];
pub const BLUE: Rgb = [0, 0, 255];
pub const WHITE: Rgb = [255, 255, 255];
pub const BLACK: Rgb = [0, 0, 0];
pub const YELLOW: Rgb = [255, 220, 0];
pub const CYAN: Rgb = [0, 220, 220];

/// Largest image any renderer will allocate.
pub const MAX_PIXELS: usize = 1 << 24;

/// Side of one orientation-map tile at scale 1.
pub const ARROW_TILE: usize = 24;

/// Half opening angle of a drawn camera frustum.
pub const FRUSTUM_HALF_ANGLE: f64 = 0.35;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, fill: Rgb) -> Result<Self> {
        let pixels = width
            .checked_mul(height)
            .filter(|&p| p <= MAX_PIXELS)
            .ok_or_else(|| Error::Config(format!("{width}×{height} image exceeds {MAX_PIXELS} pixels")))?;
        let mut data = Vec::with_capacity(pixels * 3);
        for _ in 0..pixels {
            data.extend_from_slice(&fill);
        }
        Ok(RgbImage { width, height, data })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, x: usize, y: usize) -> Rgb {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set(&mut self, x: usize, y: usize, c: Rgb) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&c);
    }

    /// Sets the pixel if it lies inside the image.
    pub fn plot(&mut self, x: i64, y: i64, c: Rgb) {
        if x >= 0 && y >= 0 && (x as usize) < self.width && (y as usize) < self.height {
            self.set(x as usize, y as usize, c);
        }
    }

    pub fn fill_rect(&mut self, x0: usize, y0: usize, w: usize, h: usize, c: Rgb) {
        for y in y0..(y0 + h).min(self.height) {
            for x in x0..(x0 + w).min(self.width) {
                self.set(x, y, c);
            }
        }
    }

    /// Bresenham line including both end points.
    pub fn line(&mut self, (mut x0, mut y0): (i64, i64), (x1, y1): (i64, i64), c: Rgb) {
        let dx = (x1 - x0).abs();
        let dy = -(y1 - y0).abs();
        let sx = if x0 < x1 { 1 } else { -1 };
        let sy = if y0 < y1 { 1 } else { -1 };
        let mut err = dx + dy;
        loop {
            self.plot(x0, y0, c);
            if x0 == x1 && y0 == y1 {
                break;
            }
            let e2 = 2 * err;
            if e2 >= dy {
                err += dy;
                x0 += sx;
            }
            if e2 <= dx {
                err += dx;
                y0 += sy;
            }
        }
    }

    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.data);
        out
    }

    /// Parses the P6 layout written by [`RgbImage::to_ppm`] (single
    /// whitespace separators, no comments, maxval 255).
    pub fn from_ppm(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Validation(format!("PPM: {m}"));
        let mut fields = Vec::with_capacity(4);
        let mut pos = 0;
        while fields.len() < 4 {
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos >= bytes.len() || start == pos {
                return Err(bad("truncated header"));
            }
            fields.push(core::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("header is not ASCII"))?);
            pos += 1;
        }
        if fields[0] != "P6" || fields[3] != "255" {
            return Err(bad("expected P6 with maxval 255"));
        }
        let dim = |s: &str| s.parse::<usize>().map_err(|_| bad("bad dimension"));
        let (width, height) = (dim(fields[1])?, dim(fields[2])?);
        let mut img = RgbImage::new(width, height, BLACK)?;
        if bytes.len() - pos != img.data.len() {
            return Err(bad("payload length does not match dimensions"));
        }
        img.data.copy_from_slice(&bytes[pos..]);
        Ok(img)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderSpec {
    /// One color per class id.
    pub palette: Vec<Rgb>,
    /// Integer nearest-neighbor upscaling factor.
    pub scale: usize,
    /// Draw best and ground-truth frustums on orientation maps.
    pub frustums: bool,
}

impl Default for RenderSpec {
    fn default() -> Self {
        RenderSpec {
            palette: vec![RED, GREEN, BLUE, WHITE],
            scale: 1,
            frustums: true,
        }
    }
}

impl RenderSpec {
    pub fn validate(&self, classes: usize) -> Result<()> {
        if self.scale == 0 {
            return Err(Error::Config("render scale must be ≥ 1".into()));
        }
        if self.palette.len() < classes {
            return Err(Error::Config(format!(
                "palette has {} colors for {classes} classes",
                self.palette.len()
            )));
        }
        Ok(())
    }
}

/// Paints an `h × w` grid of class ids, one `scale × scale` block per cell.
pub fn render_class_ids(ids: &[u8], height: usize, width: usize, spec: &RenderSpec) -> Result<RgbImage> {
    spec.validate(0)?;
    if ids.len() != height * width {
        return Err(Error::Shape {
            shape: vec![height, width],
            len: ids.len(),
        });
    }
    if let Some(&bad) = ids.iter().find(|&&c| c as usize >= spec.palette.len()) {
        return Err(Error::Validation(format!(
            "class id {bad} has no palette color ({} colors)",
            spec.palette.len()
        )));
    }
    let s = spec.scale;
    let mut img = RgbImage::new(width * s, height * s, BLACK)?;
    for y in 0..height {
        for x in 0..width {
            img.fill_rect(x * s, y * s, s, s, spec.palette[ids[y * width + x] as usize]);
        }
    }
    Ok(img)
}

/// Argmax class of every cell, painted with the palette.
pub fn render_labelmap(labels: &LabelMap, spec: &RenderSpec) -> Result<RgbImage> {
    render_class_ids(&labels.argmax(), labels.height(), labels.width(), spec)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MatrixLayout {
    /// `M` as one `(h_g·w_g) × (h_a·w_a)` heat map.
    Raw,
    /// An `h_g × w_g` grid of tiles; tile `(y, x)` is row `y·w_g + x`
    /// reshaped to `h_a × w_a`.
    CellGrid,
}

/// Gray level of each entry, linear in the value and normalized by the
/// largest entry of the whole matrix.
fn gray_levels(m: &[f32]) -> Vec<u8> {
    let max = m.iter().copied().fold(0.0f32, f32::max);
    m.iter()
        .map(|&v| if max > 0.0 { round(255.0 * (v / max) as f64) as u8 } else { 0 })
        .collect()
}

/// Heat map of a transform matrix `[h_g·w_g, h_a·w_a]`.
pub fn render_matrix(
    m: &Tensor<f32>,
    aerial: (usize, usize),
    ground: (usize, usize),
    layout: MatrixLayout,
    scale: usize,
) -> Result<RgbImage> {
    let (rows, cols) = (ground.0 * ground.1, aerial.0 * aerial.1);
    if m.shape() != [rows, cols] {
        return Err(Error::dim("render_matrix", m.shape(), &[rows, cols]));
    }
    if scale == 0 {
        return Err(Error::Config("render scale must be ≥ 1".into()));
    }
    if rows.saturating_mul(cols).saturating_mul(scale * scale) > MAX_PIXELS {
        return Err(Error::Config(format!(
            "a {rows}×{cols} transform matrix at scale {scale} is too large to render"
        )));
    }
    let g = gray_levels(m.data());
    let (w, h) = match layout {
        MatrixLayout::Raw => (cols, rows),
        MatrixLayout::CellGrid => (ground.1 * aerial.1, ground.0 * aerial.0),
    };
    let mut img = RgbImage::new(w * scale, h * scale, BLACK)?;
    for r in 0..rows {
        for c in 0..cols {
            let (x, y) = match layout {
                MatrixLayout::Raw => (c, r),
                MatrixLayout::CellGrid => {
                    let (gy, gx) = (r / ground.1, r % ground.1);
                    let (ay, ax) = (c / aerial.1, c % aerial.1);
                    (gx * aerial.1 + ax, gy * aerial.0 + ay)
                }
            };
            let v = g[r * cols + c];
            img.fill_rect(x * scale, y * scale, scale, scale, [v, v, v]);
        }
    }
    Ok(img)
}

/// Computes the full transform matrix of `image` and renders it.
pub fn render_transform_matrix(
    model: &CrossViewModel<f32>,
    image: &[f32],
    layout: MatrixLayout,
    scale: usize,
) -> Result<RgbImage> {
    let cfg = model.config();
    let m = model.transform_matrix(image)?;
    render_matrix(&m, (cfg.h_a, cfg.w_a), (cfg.h_g, cfg.w_g), layout, scale)
}

/// End point of a ray of length `len` from `from` at compass angle `theta`
/// (clockwise from image-up).
pub fn ray_end(from: (i64, i64), theta: f64, len: f64) -> (i64, i64) {
    (
        from.0 + round(len * sin(theta)) as i64,
        from.1 - round(len * cos(theta)) as i64,
    )
}

/// Tile center and half-size of grid cell `(row, col)`.
fn tile_center(row: usize, col: usize, tile: usize) -> (i64, i64) {
    ((col * tile + tile / 2) as i64, (row * tile + tile / 2) as i64)
}

/// Arrow length in pixels for peak probability `p` on a tile of `tile`
/// pixels.
pub fn arrow_length(p: f64, tile: usize) -> f64 {
    p.clamp(0.0, 1.0) * (tile / 2 - 1) as f64
}

/// One tile per grid location. Each arrow points along the location's best
/// orientation (compass angle, clockwise from image-up) with length
/// proportional to its peak probability. With frustums enabled, the global
/// best is outlined in yellow and `truth` (location index, angle) in cyan.
pub fn render_orientation_map(
    result: &GeocalibResult,
    truth: Option<(usize, f64)>,
    spec: &RenderSpec,
) -> Result<RgbImage> {
    spec.validate(0)?;
    let (gr, gc) = result.grid;
    if gr * gc == 0 || result.pdfs.is_empty() {
        return Err(Error::Config("orientation map needs a non-empty grid".into()));
    }
    if let Some((i, _)) = truth {
        if i >= result.pdfs.len() {
            return Err(Error::Config(format!(
                "true location {i} outside a grid of {} cells",
                result.pdfs.len()
            )));
        }
    }
    let tile = ARROW_TILE * spec.scale;
    let mut img = RgbImage::new(gc * tile, gr * tile, BLACK)?;
    for (i, pdf) in result.pdfs.iter().enumerate() {
        let (row, col) = result.cell(i);
        let c = tile_center(row, col, tile);
        let theta = pdf.argmin_radians();
        let len = arrow_length(pdf.peak_prob(), tile);
        let tip = ray_end(c, theta, len);
        img.line(c, tip, RED);
        let barb = len / 3.0;
        if barb >= 1.0 {
            img.line(tip, ray_end(tip, theta + 2.6, barb), RED);
            img.line(tip, ray_end(tip, theta - 2.6, barb), RED);
        }
    }
    if spec.frustums {
        let best = (result.best.0, result.pdfs[result.best.0].bin_to_radians(result.best.1));
        for ((i, theta), color) in [(truth, CYAN), (Some(best), YELLOW)]
            .into_iter()
            .filter_map(|(t, c)| t.map(|t| (t, c)))
        {
            let (row, col) = result.cell(i);
            frustum(&mut img, tile_center(row, col, tile), theta, (tile / 2 - 1) as f64, color);
        }
    }
    Ok(img)
}

fn frustum(img: &mut RgbImage, apex: (i64, i64), theta: f64, len: f64, color: Rgb) {
    let a = ray_end(apex, theta - FRUSTUM_HALF_ANGLE, len);
    let b = ray_end(apex, theta + FRUSTUM_HALF_ANGLE, len);
    img.line(apex, a, color);
    img.line(apex, b, color);
    img.line(a, b, color);
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geocalib::OrientationPdf;
    use core::f64::consts::PI;

    fn count(img: &RgbImage, c: Rgb) -> usize {
        img.pixels().chunks(3).filter(|p| *p == c).count()
    }

    #[test]
    fn all_road_is_solid_red() {
        let ids = vec![0u8; 12];
        let img = render_labelmap(&LabelMap::one_hot(3, 4, 4, &ids).unwrap(), &RenderSpec { scale: 3, ..Default::default() }).unwrap();
        assert_eq!((img.width(), img.height()), (12, 9));
        assert_eq!(count(&img, RED), 108);
    }

    #[test]
    fn checkerboard_scale_one() {
        let ids: Vec<u8> = (0..16).map(|i| if (i / 4 + i % 4) % 2 == 0 { 1 } else { 3 }).collect();
        let img = render_class_ids(&ids, 4, 4, &RenderSpec::default()).unwrap();
        for y in 0..4 {
            for x in 0..4 {
                let want = if (x + y) % 2 == 0 { GREEN } else { WHITE };
                assert_eq!(img.get(x, y), want);
            }
        }
    }

    #[test]
    fn unknown_class_is_an_error() {
        assert!(render_class_ids(&[0, 4], 1, 2, &RenderSpec::default()).is_err());
        let spec = RenderSpec { scale: 0, ..Default::default() };
        assert!(render_class_ids(&[0], 1, 1, &spec).is_err());
    }

    #[test]
    fn ppm_bytes_and_round_trip() {
        let img = render_class_ids(&[0, 1, 2, 3], 2, 2, &RenderSpec::default()).unwrap();
        let bytes = img.to_ppm();
        assert!(bytes.starts_with(b"P6\n2 2\n255\n"));
        assert_eq!(bytes.len(), 11 + 12);
        assert_eq!(RgbImage::from_ppm(&bytes).unwrap(), img);
        assert!(RgbImage::from_ppm(&bytes[..bytes.len() - 1]).is_err());
        assert!(RgbImage::from_ppm(b"P3\n1 1\n255\nabc").is_err());
    }

    #[test]
    fn uniform_matrix_is_flat() {
        let m = Tensor::full(&[8, 9], 1.0 / 9.0);
        let img = render_matrix(&m, (3, 3), (2, 4), MatrixLayout::Raw, 2).unwrap();
        let first = img.get(0, 0);
        assert!(img.pixels().chunks(3).all(|p| p == first));
    }

    #[test]
    fn permutation_matrix_has_one_hot_cell_per_tile() {
        let n = 8;
        let perm = [3usize, 0, 7, 1, 6, 2, 5, 4];
        let m = Tensor::from_fn(&[n, n], |i| if perm[i / n] == i % n { 1.0 } else { 0.0 });
        let img = render_matrix(&m, (2, 4), (2, 4), MatrixLayout::CellGrid, 1).unwrap();
        for ty in 0..2 {
            for tx in 0..4 {
                let hot = (0..2)
                    .flat_map(|y| (0..4).map(move |x| (x, y)))
                    .filter(|&(x, y)| img.get(tx * 4 + x, ty * 2 + y) == WHITE)
                    .count();
                assert_eq!(hot, 1);
            }
        }
    }

    #[test]
    fn cellgrid_tile_is_reshaped_row() {
        let (aerial, ground) = ((3, 2), (2, 3));
        let m = Tensor::from_fn(&[6, 6], |i| ((i * 37) % 11) as f32);
        let raw = render_matrix(&m, aerial, ground, MatrixLayout::Raw, 1).unwrap();
        let grid = render_matrix(&m, aerial, ground, MatrixLayout::CellGrid, 1).unwrap();
        for r in 0..6 {
            let (gy, gx) = (r / ground.1, r % ground.1);
            for c in 0..6 {
                let (ay, ax) = (c / aerial.1, c % aerial.1);
                assert_eq!(grid.get(gx * aerial.1 + ax, gy * aerial.0 + ay), raw.get(c, r));
            }
        }
        let mut a: Vec<u8> = raw.pixels().to_vec();
        let mut b: Vec<u8> = grid.pixels().to_vec();
        a.sort_unstable();
        b.sort_unstable();
        assert_eq!(a, b);
    }

    #[test]
    fn matrix_size_guard() {
        let m = Tensor::zeros(&[4096, 4096]);
        assert!(render_matrix(&m, (64, 64), (64, 64), MatrixLayout::Raw, 2).is_err());
        assert!(render_matrix(&Tensor::zeros(&[2, 3]), (1, 2), (1, 2), MatrixLayout::Raw, 1).is_err());
    }

    #[test]
    fn bresenham_end_points_and_connectivity() {
        let mut img = RgbImage::new(20, 20, BLACK).unwrap();
        img.line((2, 3), (17, 9), RED);
        assert_eq!(img.get(2, 3), RED);
        assert_eq!(img.get(17, 9), RED);
        // x-major line: one pixel per column
        assert_eq!(count(&img, RED), 16);
    }

    fn single(bin: usize, bins: usize, sharp: bool) -> GeocalibResult {
        let energies = (0..bins)
            .map(|b| if !sharp { 1.0 } else if b == bin { 0.0 } else { 10.0 })
            .collect();
        let pdf = OrientationPdf::from_energies(energies, 0.1).unwrap();
        GeocalibResult::assemble(vec![(0, 0)], (1, 1), vec![pdf]).unwrap()
    }

    #[test]
    fn single_cell_arrow_points_east() {
        let res = single(4, 16, true);
        let spec = RenderSpec { frustums: false, ..Default::default() };
        let img = render_orientation_map(&res, None, &spec).unwrap();
        let c = (ARROW_TILE / 2) as i64;
        let len = arrow_length(res.pdfs[0].peak_prob(), ARROW_TILE) as i64;
        assert_eq!(res.pdfs[0].argmin_radians(), PI / 2.0);
        for dx in 0..=len {
            assert_eq!(img.get((c + dx) as usize, c as usize), RED);
        }
        assert_eq!(img.get((c - 2) as usize, c as usize), BLACK);
    }

    #[test]
    fn flat_pdfs_give_short_arrows() {
        let sharp = render_orientation_map(&single(0, 16, true), None, &RenderSpec::default()).unwrap();
        let flat = render_orientation_map(&single(0, 16, false), None, &RenderSpec { frustums: false, ..Default::default() }).unwrap();
        assert!(count(&flat, RED) <= 2);
        assert!(count(&sharp, RED) > 8);
        assert!(count(&sharp, YELLOW) > 0);
    }

    #[test]
    fn orientation_map_errors() {
        let res = single(0, 8, true);
        assert!(render_orientation_map(&res, Some((1, 0.0)), &RenderSpec::default()).is_err());
        let mut empty = res.clone();
        empty.grid = (0, 0);
        empty.pdfs.clear();
        assert!(render_orientation_map(&empty, None, &RenderSpec::default()).is_err());
    }

    #[test]
    fn rendering_is_deterministic() {
        let res = single(5, 16, true);
        let a = render_orientation_map(&res, Some((0, 1.0)), &RenderSpec::default()).unwrap();
        let b = render_orientation_map(&res, Some((0, 1.0)), &RenderSpec::default()).unwrap();
        assert_eq!(a.to_ppm(), b.to_ppm());
    }
}
