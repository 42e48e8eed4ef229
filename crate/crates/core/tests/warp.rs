use candle_core::{Device, Tensor};
use mixforge::mixer::{apply_affine, identity_theta, sample_coefficients, sample_noise, WarpPadding};
use mixforge::stats::{ks_two_sample, mean_std};
use mixforge::SeedStreams;
use proptest::prelude::*;
use rand_distr::{Beta, Distribution};

const DEV: Device = Device::Cpu;

/// Scalar-loop bilinear warp with zero padding and half-pixel centres.
fn oracle_warp(src: &[f64], h: usize, w: usize, t: [[f64; 3]; 2]) -> Vec<f64> {
    let at = |y: i64, x: i64| {
        if y < 0 || x < 0 || y >= h as i64 || x >= w as i64 {
            0.0
        } else {
            src[y as usize * w + x as usize]
        }
    };
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let gx = (2.0 * x as f64 + 1.0) / w as f64 - 1.0;
            let gy = (2.0 * y as f64 + 1.0) / h as f64 - 1.0;
            let sx = t[0][0] * gx + t[0][1] * gy + t[0][2];
            let sy = t[1][0] * gx + t[1][1] * gy + t[1][2];
            let px = ((sx + 1.0) * w as f64 - 1.0) / 2.0;
            let py = ((sy + 1.0) * h as f64 - 1.0) / 2.0;
            let (x0, y0) = (px.floor(), py.floor());
            let (fx, fy) = (px - x0, py - y0);
            let (x0, y0) = (x0 as i64, y0 as i64);
            out[y * w + x] = at(y0, x0) * (1.0 - fx) * (1.0 - fy)
                + at(y0, x0 + 1) * fx * (1.0 - fy)
                + at(y0 + 1, x0) * (1.0 - fx) * fy
                + at(y0 + 1, x0 + 1) * fx * fy;
        }
    }
    out
}

fn warp(src: &[f64], h: usize, w: usize, t: [[f64; 3]; 2], padding: WarpPadding) -> Vec<f64> {
    let x = Tensor::from_vec(src.to_vec(), (1, 1, h, w), &DEV).unwrap();
    let theta = Tensor::new(&[t], &DEV).unwrap();
    apply_affine(&x, &theta, padding)
        .unwrap()
        .flatten_all()
        .unwrap()
        .to_vec1::<f64>()
        .unwrap()
}

#[test]
fn identity_reproduces_input() {
    let src: Vec<f64> = (0..48).map(|i| (i as f64 * 0.37).sin()).collect();
    let x = Tensor::from_vec(src.clone(), (2, 1, 4, 6), &DEV).unwrap();
    let theta = identity_theta(2, candle_core::DType::F64, &DEV).unwrap();
    let y = apply_affine(&x, &theta, WarpPadding::Zeros)
        .unwrap()
        .flatten_all()
        .unwrap()
        .to_vec1::<f64>()
        .unwrap();
    for (a, b) in y.iter().zip(&src) {
        assert!((a - b).abs() <= 1e-12);
    }
}

#[test]
fn one_pixel_translation_of_a_step() {
    // step at column 4 of an 8-wide image; sampling one pixel to the right
    // moves the edge one pixel left and zero-fills the last column
    let src: Vec<f64> = (0..64).map(|i| if i % 8 >= 4 { 1.0 } else { 0.0 }).collect();
    let y = warp(&src, 8, 8, [[1.0, 0.0, 2.0 / 8.0], [0.0, 1.0, 0.0]], WarpPadding::Zeros);
    for r in 0..8 {
        let row: Vec<f64> = y[r * 8..r * 8 + 8].iter().map(|v| (v * 1e9).round() / 1e9).collect();
        assert_eq!(row, vec![0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0, 0.0]);
    }
}

#[test]
fn half_pixel_translation_blends_neighbours() {
    let src: Vec<f64> = (0..16).map(f64::from).collect();
    let y = warp(&src, 4, 4, [[1.0, 0.0, 0.25], [0.0, 1.0, 0.0]], WarpPadding::Zeros);
    // row 0: (0+1)/2, (1+2)/2, (2+3)/2, (3+0)/2
    assert_eq!(&y[..4], &[0.5, 1.5, 2.5, 1.5]);
}

#[test]
fn reflection_padding_mirrors_at_the_border() {
    let src = [1.0, 2.0, 3.0, 4.0];
    // horizontal flip by scaling x by -1 stays inside; a shift by one pixel
    // past the right edge reflects back onto the last column
    let y = warp(&src, 1, 4, [[1.0, 0.0, 0.5], [0.0, 1.0, 0.0]], WarpPadding::Reflection);
    assert_eq!(y, vec![2.0, 3.0, 4.0, 4.0]);
    let y = warp(&src, 1, 4, [[-1.0, 0.0, 0.0], [0.0, 1.0, 0.0]], WarpPadding::Reflection);
    assert_eq!(y, vec![4.0, 3.0, 2.0, 1.0]);
}

#[test]
fn sampled_coefficient_means() {
    let mut rng = SeedStreams::new(11).stream("coeffs");
    let n = 20_000;
    let first: Vec<f64> = (0..n)
        .map(|_| sample_coefficients(1.0, 2, &mut rng).unwrap().as_slice()[0])
        .collect();
    let (m, _) = mean_std(&first);
    assert!((m - 0.5).abs() < 0.01, "mean {m}");
    let draws: Vec<Vec<f64>> = (0..n)
        .map(|_| sample_coefficients(2.0, 3, &mut rng).unwrap().as_slice().to_vec())
        .collect();
    for j in 0..3 {
        let col: Vec<f64> = draws.iter().map(|d| d[j]).collect();
        let (m, s) = mean_std(&col);
        assert!((m - 1.0 / 3.0).abs() < 0.01, "component {j} mean {m}");
        // Var of a Dirichlet(2,2,2) marginal: 2*4 / (36*7)
        assert!((s * s - 8.0 / 252.0).abs() < 0.003, "component {j} variance {}", s * s);
    }
}

#[test]
fn two_way_coefficients_follow_beta() {
    let mut ours = SeedStreams::new(5).stream("ours");
    let mut reference = SeedStreams::new(6).stream("reference");
    for alpha in [0.2, 0.5, 1.0, 2.0] {
        let a: Vec<f64> = (0..4000)
            .map(|_| sample_coefficients(alpha, 2, &mut ours).unwrap().as_slice()[0])
            .collect();
        let beta = Beta::new(alpha, alpha).unwrap();
        let b: Vec<f64> = (0..4000).map(|_| beta.sample(&mut reference)).collect();
        let ks = ks_two_sample(&a, &b).unwrap();
        assert!(ks.p_value > 0.01, "alpha {alpha}: {ks:?}");
    }
}

#[test]
fn three_way_marginal_follows_beta() {
    // the first Dirichlet(a, a, a) component is Beta(a, 2a)
    let mut ours = SeedStreams::new(7).stream("ours");
    let mut reference = SeedStreams::new(8).stream("reference");
    let a: Vec<f64> = (0..4000)
        .map(|_| sample_coefficients(1.0, 3, &mut ours).unwrap().as_slice()[0])
        .collect();
    let beta = Beta::new(1.0, 2.0).unwrap();
    let b: Vec<f64> = (0..4000).map(|_| beta.sample(&mut reference)).collect();
    assert!(ks_two_sample(&a, &b).unwrap().p_value > 0.01);
}

#[test]
fn noise_cells_are_standard_normal() {
    let mut rng = SeedStreams::new(3).stream("noise");
    let fields: Vec<_> = (0..4000).map(|_| sample_noise(&mut rng, (4, 4), (4, 4))).collect();
    for y in 0..4 {
        for x in 0..4 {
            let cell: Vec<f64> = fields.iter().map(|f| f.values()[[y, x]]).collect();
            let (m, s) = mean_std(&cell);
            assert!(m.abs() < 0.06, "cell ({y},{x}) mean {m}");
            assert!((s - 1.0).abs() < 0.05, "cell ({y},{x}) std {s}");
        }
    }
    let upsampled = sample_noise(&mut rng, (32, 32), (4, 4));
    assert_eq!(upsampled.values().dim(), (32, 32));
}

proptest! {
    #[test]
    fn warp_matches_scalar_oracle(
        a in -1.5f64..1.5, b in -1.5f64..1.5, c in -1.0f64..1.0,
        d in -1.5f64..1.5, e in -1.5f64..1.5, f in -1.0f64..1.0,
        seed in 0u64..1000,
    ) {
        let mut rng = SeedStreams::new(seed).stream("src");
        let src: Vec<f64> = (0..5 * 7).map(|_| rand::Rng::random::<f64>(&mut rng) * 4.0 - 2.0).collect();
        let t = [[a, b, c], [d, e, f]];
        let got = warp(&src, 5, 7, t, WarpPadding::Zeros);
        let want = oracle_warp(&src, 5, 7, t);
        for (g, w) in got.iter().zip(&want) {
            prop_assert!((g - w).abs() <= 1e-9, "{g} vs {w}");
        }
    }
}
