//! Geometric and statistical properties of the augmentations.

mod common;

use common::{random_tensor, rng};
use gfcn::augment::{
    apply_draw, augment_batch, corners_valid, draw_augmentation, homography_from_corners, image_corners,
    sample_displacement_grid, sample_projective_corners, sign_flip, warp_elastic, warp_projective, AugmentConfig,
    Axis, DisplacementGrid, Homography, Point,
};
use gfcn::Tensor;
use proptest::prelude::*;
use rand::RngCore;

const DRAWS: usize = 2000;

/// Source whose uniform floats are all exactly one half.
struct Midpoint;

impl RngCore for Midpoint {
    fn next_u32(&mut self) -> u32 {
        1 << 31
    }
    fn next_u64(&mut self) -> u64 {
        1 << 63
    }
    fn fill_bytes(&mut self, dst: &mut [u8]) {
        dst.fill(0x80);
    }
}

fn ramp(h: usize, w: usize, a: f64, b: f64, c: f64) -> Tensor<f64> {
    let data = (0..h).flat_map(|y| (0..w).map(move |x| a * x as f64 + b * y as f64 + c)).collect();
    Tensor::from_vec(&[h, w, 1], data).unwrap()
}

fn at(t: &Tensor<f64>, y: usize, x: usize) -> f64 {
    t.data()[y * t.shape()[1] + x]
}

#[test]
fn projective_draws_respect_constraints() {
    let mut r = rng(1);
    let (w, h) = (120, 32);
    let src = image_corners(w, h);
    let mut moved_x = 0;
    for _ in 0..DRAWS {
        let dst = sample_projective_corners(w, h, 0.25, &mut r);
        assert!(corners_valid(&src, &dst));
        let dx = src.iter().zip(&dst).any(|(s, d)| s.0 != d.0);
        let dy = src.iter().zip(&dst).any(|(s, d)| s.1 != d.1);
        assert!(!(dx && dy), "both axes moved");
        moved_x += dx as usize;
        for (s, d) in src.iter().zip(&dst) {
            assert!((d.0 - s.0).abs() <= 0.25 * (w - 1) as f64 + 1e-9);
            assert!((d.1 - s.1).abs() <= 0.25 * (h - 1) as f64 + 1e-9);
        }
    }
    let frac = moved_x as f64 / DRAWS as f64;
    assert!((frac - 0.5).abs() < 0.05, "x-axis fraction {frac}");
}

#[test]
fn elastic_draws_respect_constraints() {
    let mut r = rng(2);
    for (spacing, max_disp) in [(16usize, 4.0f64), (4, 10.0), (8, 2.5)] {
        let bound = max_disp.min(spacing as f64 - 1.0);
        for _ in 0..DRAWS / 4 {
            let g = sample_displacement_grid(100, 32, spacing, max_disp, &mut r);
            assert!(g.is_valid());
            assert!(g.min_cell_extent() >= 1.0);
            assert!(g.disp.iter().all(|d| d.abs() <= bound));
            assert_eq!(g.disp.len(), g.xs.len() * g.ys.len());
            assert_eq!(*g.xs.first().unwrap(), 0.0);
            assert_eq!(*g.xs.last().unwrap(), 99.0);
        }
    }
}

#[test]
fn application_frequencies_follow_probabilities() {
    let cfg = AugmentConfig {
        p_projective: 0.3,
        p_elastic: 0.7,
        p_signflip: 0.5,
        ..AugmentConfig::default()
    };
    let mut r = rng(3);
    let mut counts = [0usize; 3];
    for _ in 0..DRAWS {
        let d = draw_augmentation(40, 16, &cfg, &mut r).unwrap();
        counts[0] += d.homography.is_some() as usize;
        counts[1] += d.grid.is_some() as usize;
        counts[2] += d.sign_flip as usize;
    }
    for (count, p) in counts.iter().zip([0.3, 0.7, 0.5]) {
        let f = *count as f64 / DRAWS as f64;
        assert!((f - p).abs() < 0.04, "frequency {f} for p={p}");
    }
}

#[test]
fn disabled_config_is_the_identity() {
    let mut r = rng(4);
    let batch = random_tensor(&mut r, &[3, 8, 20, 1], 0.0, 1.0);
    let (out, draw) = augment_batch(&batch, &AugmentConfig::disabled(), &mut r).unwrap();
    assert_eq!(draw, Default::default());
    assert_eq!(out.data(), batch.data());
}

#[test]
fn identity_warps_are_bit_exact() {
    let mut r = rng(5);
    let img = random_tensor(&mut r, &[9, 31, 1], -1.0, 1.0);
    assert_eq!(warp_projective(&img, &Homography::identity()).unwrap().data(), img.data());
    let grid = DisplacementGrid::zeros(31, 9, 4, Axis::Y);
    assert_eq!(warp_elastic(&img, &grid).unwrap().data(), img.data());
    let h = homography_from_corners(&image_corners(31, 9), &image_corners(31, 9)).unwrap();
    assert_eq!(warp_projective(&img, &h).unwrap().data(), img.data());
}

#[test]
fn midpoint_rng_yields_identity_geometry_and_a_flip() {
    let cfg = AugmentConfig {
        p_projective: 1.0,
        p_elastic: 1.0,
        p_signflip: 1.0,
        ..AugmentConfig::default()
    };
    let mut r = rng(6);
    let batch = random_tensor(&mut r, &[2, 12, 40, 1], 0.0, 1.0);
    let (out, draw) = augment_batch(&batch, &cfg, &mut Midpoint).unwrap();
    assert!(draw.sign_flip);
    assert!(draw.grid.as_ref().unwrap().disp.iter().all(|&d| d == 0.0));
    let expected: Vec<f64> = batch.data().iter().map(|v| -v).collect();
    assert_eq!(out.data(), &expected[..]);
}

#[test]
fn integer_translation_shifts_pixels() {
    let mut r = rng(7);
    let img = random_tensor(&mut r, &[6, 20, 1], 0.0, 1.0);
    let out = warp_projective(&img, &Homography::translation(3.0, 0.0)).unwrap();
    for y in 0..6 {
        for x in 0..20usize {
            let src = x.saturating_sub(3);
            assert_eq!(at(&out, y, x), at(&img, y, src));
        }
    }
    let down = warp_projective(&img, &Homography::translation(0.0, -2.0)).unwrap();
    for y in 0..6 {
        for x in 0..20 {
            assert_eq!(at(&down, y, x), at(&img, (y + 2).min(5), x));
        }
    }
}

#[test]
fn bilinear_sampling_reproduces_linear_ramps() {
    let img = ramp(10, 30, 0.7, -0.3, 2.0);
    let out = warp_projective(&img, &Homography::translation(1.5, 0.25)).unwrap();
    for y in 1..10 {
        for x in 2..30 {
            let expected = 0.7 * (x as f64 - 1.5) - 0.3 * (y as f64 - 0.25) + 2.0;
            assert!((at(&out, y, x) - expected).abs() < 1e-12);
        }
    }
}

#[test]
fn constant_elastic_displacement_is_a_translation() {
    let mut r = rng(8);
    let img = random_tensor(&mut r, &[8, 40, 1], 0.0, 1.0);
    let mut grid = DisplacementGrid::zeros(40, 8, 8, Axis::X);
    grid.disp.fill(2.0);
    let out = warp_elastic(&img, &grid).unwrap();
    let reference = warp_projective(&img, &Homography::translation(2.0, 0.0)).unwrap();
    assert!(out.max_abs_diff(&reference) < 1e-12);
}

#[test]
fn constant_images_stay_constant() {
    let img = Tensor::full(&[10, 25, 1], 0.37f64);
    let mut r = rng(9);
    for _ in 0..50 {
        let corners = sample_projective_corners(25, 10, 0.25, &mut r);
        let h = homography_from_corners(&image_corners(25, 10), &corners).unwrap();
        let out = warp_projective(&img, &h).unwrap();
        assert!(out.data().iter().all(|v| (v - 0.37).abs() < 1e-15));
        let g = sample_displacement_grid(25, 10, 4, 3.0, &mut r);
        assert!(warp_elastic(&img, &g).unwrap().data().iter().all(|v| (v - 0.37).abs() < 1e-15));
    }
}

#[test]
fn one_draw_is_shared_by_the_whole_batch() {
    let cfg = AugmentConfig {
        p_projective: 1.0,
        p_elastic: 1.0,
        ..AugmentConfig::default()
    };
    let mut r = rng(10);
    let a = random_tensor(&mut r, &[1, 16, 48, 1], 0.0, 1.0);
    let b = random_tensor(&mut r, &[1, 16, 48, 1], 0.0, 1.0);
    let mut data = a.data().to_vec();
    data.extend_from_slice(b.data());
    data.extend_from_slice(a.data());
    let batch = Tensor::from_vec(&[3, 16, 48, 1], data).unwrap();
    let (out, draw) = augment_batch(&batch, &cfg, &mut r).unwrap();
    let n = 16 * 48;
    assert_eq!(&out.data()[..n], &out.data()[2 * n..]);
    assert_eq!(&out.data()[n..2 * n], apply_draw(&b, &draw).unwrap().data());
}

#[test]
fn sign_flip_negates() {
    let mut r = rng(11);
    let img = random_tensor(&mut r, &[4, 5, 1], -1.0, 1.0);
    let f = sign_flip(&img);
    assert!(img.data().iter().zip(f.data()).all(|(a, b)| *a == -b));
    assert_eq!(sign_flip(&f).data(), img.data());
}

fn point() -> impl Strategy<Value = Point> {
    (-0.2f64..0.2, -0.2f64..0.2)
}

proptest! {
    #[test]
    fn homography_maps_corners_and_inverts(w in 4usize..200, h in 4usize..64, jitter in prop::array::uniform4(point())) {
        let src = image_corners(w, h);
        let mut dst = src;
        for (p, j) in dst.iter_mut().zip(jitter) {
            p.0 += j.0 * (w - 1) as f64;
            p.1 += j.1 * (h - 1) as f64;
        }
        let hm = homography_from_corners(&src, &dst).unwrap();
        for (s, d) in src.iter().zip(&dst) {
            let m = hm.apply(*s);
            prop_assert!((m.0 - d.0).abs() < 1e-8 && (m.1 - d.1).abs() < 1e-8);
        }
        // Equal to the identity up to the projective scale factor.
        let id = hm.mul(&hm.inverse().unwrap());
        let s = id.0[2][2];
        for (i, row) in id.0.iter().enumerate() {
            for (j, v) in row.iter().map(|v| v / s).enumerate() {
                let e = if i == j { 1.0 } else { 0.0 };
                prop_assert!((v - e).abs() < 1e-9, "entry ({i},{j}) = {v}");
            }
        }
    }

    #[test]
    fn scaled_homography_warps_identically(k in 0.1f64..10.0, dx in -3.0f64..3.0, dy in -2.0f64..2.0) {
        let img = ramp(6, 12, 0.2, 0.5, -1.0);
        let t = Homography::translation(dx, dy);
        let mut scaled = t;
        scaled.0.iter_mut().flatten().for_each(|v| *v *= k);
        let a = warp_projective(&img, &t).unwrap();
        let b = warp_projective(&img, &scaled).unwrap();
        prop_assert!(a.max_abs_diff(&b) < 1e-9);
    }
}
