//! Label-preserving augmentations: random projective transforms, coarse-grid
//! elastic distortion and sign flipping.
//!
//! Geometric transforms move content along a single axis per draw. Warping is
//! backward mapping with bilinear interpolation; reads outside the image
//! replicate the nearest edge pixel. In a batch every sample receives the same
//! draw.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub type Point = (f64, f64);

const MAX_TRIES: usize = 100;

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentConfig {
    pub p_projective: f64,
    pub p_elastic: f64,
    pub p_signflip: f64,
    /// Control point spacing of the elastic grid, in pixels.
    pub grid_spacing: usize,
    /// Largest control point displacement, in pixels.
    pub elastic_max_disp: f64,
    /// Largest corner shift as a fraction of the perturbed extent.
    pub projective_max_shift: f64,
    pub rng_seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            p_projective: 0.5,
            p_elastic: 0.5,
            p_signflip: 0.5,
            grid_spacing: 16,
            elastic_max_disp: 4.0,
            projective_max_shift: 0.25,
            rng_seed: 0,
        }
    }
}

impl AugmentConfig {
    /// No augmentation at all.
    pub fn disabled() -> Self {
        AugmentConfig {
            p_projective: 0.0,
            p_elastic: 0.0,
            p_signflip: 0.0,
            ..Default::default()
        }
    }

    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        for (name, p) in [
            ("p_projective", self.p_projective),
            ("p_elastic", self.p_elastic),
            ("p_signflip", self.p_signflip),
        ] {
            if !(0.0..=1.0).contains(&p) {
                v.push(format!("{name} must lie in [0, 1], got {p}"));
            }
        }
        if self.grid_spacing < 2 {
            v.push(format!("grid_spacing must be at least 2, got {}", self.grid_spacing));
        }
        if self.elastic_max_disp < 0.0 {
            v.push(format!("elastic_max_disp must be non-negative, got {}", self.elastic_max_disp));
        }
        if !(0.0..=1.0).contains(&self.projective_max_shift) {
            v.push(format!(
                "projective_max_shift must lie in [0, 1], got {}",
                self.projective_max_shift
            ));
        }
        v
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    X,
    Y,
}

/// Corners of a `w × h` image: top-left, top-right, bottom-right, bottom-left.
pub fn image_corners(w: usize, h: usize) -> [Point; 4] {
    let (x1, y1) = ((w - 1) as f64, (h - 1) as f64);
    [(0.0, 0.0), (x1, 0.0), (x1, y1), (0.0, y1)]
}

fn dist(a: Point, b: Point) -> f64 {
    ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt()
}

/// True when every edge of `dst` is within `[0.5, 2]` times the matching edge
/// of `src` and the quadrilateral keeps its orientation (no mirroring).
pub fn corners_valid(src: &[Point; 4], dst: &[Point; 4]) -> bool {
    let edges_ok = (0..4).all(|i| {
        let j = (i + 1) % 4;
        let ratio = dist(dst[i], dst[j]) / dist(src[i], src[j]);
        (0.5..=2.0).contains(&ratio)
    });
    let oriented = dst[1].0 > dst[0].0 && dst[2].0 > dst[3].0 && dst[3].1 > dst[0].1 && dst[2].1 > dst[1].1;
    edges_ok && oriented
}

/// New positions for the four image corners, moving either every x or every
/// y coordinate. Falls back to the unmoved corners when no valid draw is
/// found in a bounded number of tries.
pub fn sample_projective_corners(w: usize, h: usize, max_shift: f64, rng: &mut impl Rng) -> [Point; 4] {
    let src = image_corners(w.max(2), h.max(2));
    let axis = if rng.random::<bool>() { Axis::X } else { Axis::Y };
    let extent = match axis {
        Axis::X => (w.max(2) - 1) as f64,
        Axis::Y => (h.max(2) - 1) as f64,
    };
    let span = max_shift * extent;
    for _ in 0..MAX_TRIES {
        let mut dst = src;
        for p in dst.iter_mut() {
            let shift = (2.0 * rng.random::<f64>() - 1.0) * span;
            match axis {
                Axis::X => p.0 += shift,
                Axis::Y => p.1 += shift,
            }
        }
        if corners_valid(&src, &dst) {
            return dst;
        }
    }
    src
}

/// 3×3 projective transform with the bottom-right entry normalized to 1.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Homography(pub [[f64; 3]; 3]);

impl Homography {
    pub fn identity() -> Self {
        Homography([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
    }

    pub fn translation(dx: f64, dy: f64) -> Self {
        Homography([[1.0, 0.0, dx], [0.0, 1.0, dy], [0.0, 0.0, 1.0]])
    }

    pub fn apply(&self, p: Point) -> Point {
        let m = &self.0;
        let w = m[2][0] * p.0 + m[2][1] * p.1 + m[2][2];
        (
            (m[0][0] * p.0 + m[0][1] * p.1 + m[0][2]) / w,
            (m[1][0] * p.0 + m[1][1] * p.1 + m[1][2]) / w,
        )
    }

    pub fn determinant(&self) -> f64 {
        let m = &self.0;
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    }

    pub fn inverse(&self) -> Result<Self> {
        let det = self.determinant();
        if det.abs() <= 1e-9 {
            return Err(Error::DegenerateGeometry(format!("homography determinant {det:e}")));
        }
        let m = &self.0;
        let cof = |r0: usize, r1: usize, c0: usize, c1: usize| m[r0][c0] * m[r1][c1] - m[r0][c1] * m[r1][c0];
        let mut inv = [
            [cof(1, 2, 1, 2), -cof(0, 2, 1, 2), cof(0, 1, 1, 2)],
            [-cof(1, 2, 0, 2), cof(0, 2, 0, 2), -cof(0, 1, 0, 2)],
            [cof(1, 2, 0, 1), -cof(0, 2, 0, 1), cof(0, 1, 0, 1)],
        ];
        for row in inv.iter_mut() {
            for v in row.iter_mut() {
                *v /= det;
            }
        }
        Ok(Homography(inv).normalized())
    }

    pub fn mul(&self, other: &Self) -> Self {
        let mut out = [[0.0; 3]; 3];
        for (i, row) in out.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (0..3).map(|k| self.0[i][k] * other.0[k][j]).sum();
            }
        }
        Homography(out)
    }

    fn normalized(mut self) -> Self {
        let s = self.0[2][2];
        if s.abs() > 1e-300 {
            for row in self.0.iter_mut() {
                for v in row.iter_mut() {
                    *v /= s;
                }
            }
        }
        self
    }
}

/// Solves the 8-unknown linear system mapping each `src[i]` to `dst[i]`.
pub fn homography_from_corners(src: &[Point; 4], dst: &[Point; 4]) -> Result<Homography> {
    let mut a = [[0.0f64; 9]; 8];
    for i in 0..4 {
        let (x, y) = src[i];
        let (u, v) = dst[i];
        a[2 * i] = [x, y, 1.0, 0.0, 0.0, 0.0, -u * x, -u * y, u];
        a[2 * i + 1] = [0.0, 0.0, 0.0, x, y, 1.0, -v * x, -v * y, v];
    }
    let scale = a.iter().flat_map(|r| r[..8].iter()).fold(0.0f64, |m, v| m.max(v.abs()));
    for col in 0..8 {
        let pivot = (col..8)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .unwrap_or(col);
        if a[pivot][col].abs() <= 1e-12 * scale.max(1.0) {
            return Err(Error::DegenerateGeometry("corner correspondences are singular".into()));
        }
        a.swap(col, pivot);
        for row in 0..8 {
            if row != col {
                let f = a[row][col] / a[col][col];
                if f != 0.0 {
                    for k in col..9 {
                        a[row][k] -= f * a[col][k];
                    }
                }
            }
        }
    }
    let h: Vec<f64> = (0..8).map(|i| a[i][8] / a[i][i]).collect();
    let hm = Homography([[h[0], h[1], h[2]], [h[3], h[4], h[5]], [h[6], h[7], 1.0]]);
    if hm.determinant().abs() <= 1e-9 {
        return Err(Error::DegenerateGeometry("resulting homography is not invertible".into()));
    }
    Ok(hm)
}

/// Coordinates within this distance of an integer are sampled exactly.
const SNAP: f64 = 1e-9;

fn snap(v: f64) -> f64 {
    let r = v.round();
    if (v - r).abs() < SNAP {
        r
    } else {
        v
    }
}

/// Bilinear read of a single-channel `h × w` plane with edge replication.
fn sample<T: Real>(plane: &[T], w: usize, h: usize, x: f64, y: f64) -> T {
    let x = snap(x).clamp(0.0, (w - 1) as f64);
    let y = snap(y).clamp(0.0, (h - 1) as f64);
    let (x0, y0) = (x.floor() as usize, y.floor() as usize);
    let (fx, fy) = (x - x0 as f64, y - y0 as f64);
    let at = |xx: usize, yy: usize| plane[yy * w + xx].as_f64();
    if fx == 0.0 && fy == 0.0 {
        return plane[y0 * w + x0];
    }
    let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
    let top = at(x0, y0) * (1.0 - fx) + at(x1, y0) * fx;
    let bottom = at(x0, y1) * (1.0 - fx) + at(x1, y1) * fx;
    T::from_f64(top * (1.0 - fy) + bottom * fy)
}

fn image_dims<T: Real>(image: &Tensor<T>, op: &'static str) -> Result<(usize, usize)> {
    match image.shape()[..] {
        [h, w, 1] => Ok((h, w)),
        [_, _, c] => Err(Error::Dimension {
            op,
            axis: "channels",
            expected: 1,
            found: c,
        }),
        _ => Err(Error::Shape {
            op,
            shape: image.shape().to_vec(),
            reason: "expected (height, width, 1)".into(),
        }),
    }
}

/// Output pixel `q` reads the source at `hmat⁻¹ q`.
pub fn warp_projective<T: Real>(image: &Tensor<T>, hmat: &Homography) -> Result<Tensor<T>> {
    let (h, w) = image_dims(image, "warp_projective")?;
    let inv = hmat.inverse()?;
    let src = image.data();
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let (sx, sy) = inv.apply((x as f64, y as f64));
            out.push(sample(src, w, h, sx, sy));
        }
    }
    Tensor::from_vec(&[h, w, 1], out)
}

/// Regular control grid with one-axis displacements.
#[derive(Clone, Debug, PartialEq)]
pub struct DisplacementGrid {
    pub axis: Axis,
    /// Control point x positions (ascending, spanning `[0, w-1]`).
    pub xs: Vec<f64>,
    /// Control point y positions (ascending, spanning `[0, h-1]`).
    pub ys: Vec<f64>,
    /// Row-major `ys.len() × xs.len()` displacements along `axis`.
    pub disp: Vec<f64>,
}

fn control_positions(extent: usize, spacing: usize) -> Vec<f64> {
    let last = (extent.max(2) - 1) as f64;
    let cells = ((last / spacing as f64).round() as usize).max(1);
    (0..=cells).map(|i| last * i as f64 / cells as f64).collect()
}

impl DisplacementGrid {
    pub fn zeros(w: usize, h: usize, spacing: usize, axis: Axis) -> Self {
        let xs = control_positions(w, spacing);
        let ys = control_positions(h, spacing);
        let disp = vec![0.0; xs.len() * ys.len()];
        DisplacementGrid { axis, xs, ys, disp }
    }

    /// Narrowest extent, along the displaced axis, of any distorted cell.
    /// The other axis is untouched, so its cells keep their original size.
    pub fn min_cell_extent(&self) -> f64 {
        let nx = self.xs.len();
        let mut min = f64::INFINITY;
        match self.axis {
            Axis::X => {
                for j in 0..self.ys.len() {
                    for i in 0..nx - 1 {
                        let a = self.xs[i] + self.disp[j * nx + i];
                        let b = self.xs[i + 1] + self.disp[j * nx + i + 1];
                        min = min.min(b - a);
                    }
                }
            }
            Axis::Y => {
                for j in 0..self.ys.len() - 1 {
                    for i in 0..nx {
                        let a = self.ys[j] + self.disp[j * nx + i];
                        let b = self.ys[j + 1] + self.disp[(j + 1) * nx + i];
                        min = min.min(b - a);
                    }
                }
            }
        }
        min
    }

    pub fn is_valid(&self) -> bool {
        self.min_cell_extent() >= 1.0
    }

    /// Bilinearly interpolated displacement at `(x, y)`.
    pub fn displacement_at(&self, x: f64, y: f64) -> f64 {
        let (i, fx) = locate(&self.xs, x);
        let (j, fy) = locate(&self.ys, y);
        let nx = self.xs.len();
        let d = |ii: usize, jj: usize| self.disp[jj * nx + ii];
        let top = d(i, j) * (1.0 - fx) + d(i + 1, j) * fx;
        let bottom = d(i, j + 1) * (1.0 - fx) + d(i + 1, j + 1) * fx;
        top * (1.0 - fy) + bottom * fy
    }
}

/// Cell index and fractional offset of `v` within ascending `pos`.
fn locate(pos: &[f64], v: f64) -> (usize, f64) {
    let cells = pos.len() - 1;
    let i = pos[1..cells].iter().take_while(|&&p| p <= v).count();
    let frac = ((v - pos[i]) / (pos[i + 1] - pos[i])).clamp(0.0, 1.0);
    (i, frac)
}

/// Draws displacements uniformly in `±min(spacing - 1, max_disp)` along a
/// random axis, rejecting grids with a cell narrower than one pixel. Falls back
/// to the zero grid after a bounded number of tries.
pub fn sample_displacement_grid(
    w: usize,
    h: usize,
    spacing: usize,
    max_disp: f64,
    rng: &mut impl Rng,
) -> DisplacementGrid {
    let axis = if rng.random::<bool>() { Axis::X } else { Axis::Y };
    let mut grid = DisplacementGrid::zeros(w, h, spacing, axis);
    let bound = max_disp.min(spacing as f64 - 1.0).max(0.0);
    for _ in 0..MAX_TRIES {
        for d in grid.disp.iter_mut() {
            *d = (2.0 * rng.random::<f64>() - 1.0) * bound;
        }
        if grid.is_valid() {
            return grid;
        }
    }
    grid.disp.iter_mut().for_each(|d| *d = 0.0);
    grid
}

/// Output pixel `q` reads the source at `q - d(q)` along the grid axis.
pub fn warp_elastic<T: Real>(image: &Tensor<T>, grid: &DisplacementGrid) -> Result<Tensor<T>> {
    let (h, w) = image_dims(image, "warp_elastic")?;
    let src = image.data();
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let (xf, yf) = (x as f64, y as f64);
            let d = grid.displacement_at(xf, yf);
            let (sx, sy) = match grid.axis {
                Axis::X => (xf - d, yf),
                Axis::Y => (xf, yf - d),
            };
            out.push(sample(src, w, h, sx, sy));
        }
    }
    Tensor::from_vec(&[h, w, 1], out)
}

pub fn sign_flip<T: Real>(image: &Tensor<T>) -> Tensor<T> {
    image.map(|v| -v)
}

/// The random choices of one batch.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AugmentDraw {
    pub homography: Option<Homography>,
    pub grid: Option<DisplacementGrid>,
    pub sign_flip: bool,
}

/// Draws one set of augmentation parameters for `w × h` images.
pub fn draw_augmentation(w: usize, h: usize, config: &AugmentConfig, rng: &mut impl Rng) -> Result<AugmentDraw> {
    let mut draw = AugmentDraw::default();
    if rng.random::<f64>() < config.p_projective {
        let src = image_corners(w, h);
        let dst = sample_projective_corners(w, h, config.projective_max_shift, rng);
        draw.homography = Some(homography_from_corners(&src, &dst)?);
    }
    if rng.random::<f64>() < config.p_elastic {
        draw.grid = Some(sample_displacement_grid(
            w,
            h,
            config.grid_spacing,
            config.elastic_max_disp,
            rng,
        ));
    }
    draw.sign_flip = rng.random::<f64>() < config.p_signflip;
    Ok(draw)
}

/// Applies `draw` to every sample of a `(N, H, W, 1)` batch.
pub fn apply_draw<T: Real>(batch: &Tensor<T>, draw: &AugmentDraw) -> Result<Tensor<T>> {
    let [n, h, w, c] = batch.dims4("augment_batch")?;
    if c != 1 {
        return Err(Error::Dimension {
            op: "augment_batch",
            axis: "channels",
            expected: 1,
            found: c,
        });
    }
    let mut out = Vec::with_capacity(batch.len());
    for sample in batch.data().chunks_exact(h * w) {
        let mut img = Tensor::from_vec(&[h, w, 1], sample.to_vec())?;
        if let Some(hm) = &draw.homography {
            img = warp_projective(&img, hm)?;
        }
        if let Some(grid) = &draw.grid {
            img = warp_elastic(&img, grid)?;
        }
        if draw.sign_flip {
            img = sign_flip(&img);
        }
        out.extend_from_slice(img.data());
    }
    Tensor::from_vec(&[n, h, w, 1], out)
}

/// One draw per augmentation for the whole batch, each gated by its
/// probability. Returns the augmented batch and the draw.
pub fn augment_batch<T: Real>(
    batch: &Tensor<T>,
    config: &AugmentConfig,
    rng: &mut impl Rng,
) -> Result<(Tensor<T>, AugmentDraw)> {
    let [_, h, w, _] = batch.dims4("augment_batch")?;
    let draw = draw_augmentation(w, h, config, rng)?;
    Ok((apply_draw(batch, &draw)?, draw))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_corners_give_identity() {
        let c = image_corners(10, 6);
        let h = homography_from_corners(&c, &c).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let e = if i == j { 1.0 } else { 0.0 };
                assert!((h.0[i][j] - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn doubled_x_is_diagonal_scale() {
        let c = image_corners(10, 6);
        let d = c.map(|(x, y)| (2.0 * x, y));
        let h = homography_from_corners(&c, &d).unwrap();
        let expected = [[2.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        for i in 0..3 {
            for j in 0..3 {
                assert!((h.0[i][j] - expected[i][j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn collinear_corners_are_degenerate() {
        let src = [(0.0, 0.0), (1.0, 0.0), (2.0, 0.0), (3.0, 0.0)];
        let dst = image_corners(4, 4);
        assert!(matches!(
            homography_from_corners(&src, &dst),
            Err(Error::DegenerateGeometry(_))
        ));
    }

    #[test]
    fn locate_cells() {
        let pos = [0.0, 10.0, 20.0];
        assert_eq!(locate(&pos, 0.0), (0, 0.0));
        assert_eq!(locate(&pos, 15.0), (1, 0.5));
        assert_eq!(locate(&pos, 20.0), (1, 1.0));
    }

    #[test]
    fn config_violations_listed() {
        let c = AugmentConfig {
            p_elastic: 1.5,
            grid_spacing: 1,
            ..Default::default()
        };
        assert_eq!(c.violations().len(), 2);
    }
}
