use candle_core::{DType, Device, Tensor};
use mixforge::baselines::{
    cutmix, cutmix_with, iterative_mask_optimizer, mixup, mixup_with, IterativeConfig, PatchBox,
};
use mixforge::data::{ImageBatch, Pairing};
use mixforge::models::{build_model, ArchSpec, Family};
use mixforge::saliency::TeacherHandle;
use mixforge::{Error, SeedStreams};
use proptest::prelude::*;

const DEV: Device = Device::Cpu;

fn batch(n: usize, size: usize, seed: u64) -> ImageBatch {
    let mut rng = SeedStreams::new(seed).stream("x");
    let v: Vec<f64> = (0..n * 3 * size * size)
        .map(|_| rand::Rng::random::<f64>(&mut rng))
        .collect();
    let images = Tensor::from_vec(v, (n, 3, size, size), &DEV).unwrap();
    ImageBatch::new(images, (0..n as u32).map(|i| i % 3).collect(), 3).unwrap()
}

fn values(t: &Tensor) -> Vec<f64> {
    t.flatten_all().unwrap().to_vec1::<f64>().unwrap()
}

fn reversed(n: usize) -> Pairing {
    Pairing::from_slots(vec![(0..n).collect(), (0..n).rev().collect()]).unwrap()
}

#[test]
fn mixup_is_the_pixelwise_convex_combination() {
    let b = batch(4, 4, 0);
    let lambdas = [0.0, 0.25, 0.6, 1.0];
    let out = mixup_with(&b, &reversed(4), &lambdas).unwrap();
    let x = values(&b.images);
    let y = values(&out.images);
    let per = 3 * 16;
    for i in 0..4 {
        for p in 0..per {
            let want = lambdas[i] * x[i * per + p] + (1.0 - lambdas[i]) * x[(3 - i) * per + p];
            assert!((y[i * per + p] - want).abs() < 1e-12);
        }
    }
    let labels = out.labels.to_vec2::<f64>().unwrap();
    // sample 1 has label 1 and partner 2 (label 2)
    assert_eq!(labels[1], vec![0.0, 0.25, 0.75]);
    // endpoints give single-image outputs
    assert_eq!(&y[..per], &x[3 * per..4 * per]);
    assert_eq!(&y[3 * per..], &x[3 * per..]);
}

#[test]
fn cutmix_pastes_the_box_and_weights_labels_by_area() {
    let b = batch(2, 8, 1);
    let boxes = [
        PatchBox {
            y0: 2,
            y1: 6,
            x0: 0,
            x1: 4,
        },
        PatchBox {
            y0: 0,
            y1: 0,
            x0: 0,
            x1: 0,
        },
    ];
    let out = cutmix_with(&b, &reversed(2), &boxes).unwrap();
    let x = values(&b.images);
    let y = values(&out.images);
    let mut pasted = 0;
    for c in 0..3 {
        for r in 0..8 {
            for col in 0..8 {
                let p = (c * 8 + r) * 8 + col;
                let inside = boxes[0].contains(r, col);
                let want = if inside { x[192 + p] } else { x[p] };
                assert_eq!(y[p], want);
                pasted += inside as usize;
                // empty box keeps sample 1 intact
                assert_eq!(y[192 + p], x[192 + p]);
            }
        }
    }
    assert_eq!(pasted, 3 * 16);
    let labels = out.labels.to_vec2::<f64>().unwrap();
    // sample 0 (label 0) with partner 1 (label 1): box covers 16 of 64 pixels
    assert_eq!(labels[0], vec![0.75, 0.25, 0.0]);
    assert_eq!(labels[1], vec![0.0, 1.0, 0.0]);
}

#[test]
fn random_baselines_produce_simplex_labels() {
    let b = batch(6, 8, 2);
    let mut rng = SeedStreams::new(0).stream("baselines");
    for out in [mixup(&b, 1.0, &mut rng).unwrap(), cutmix(&b, 1.0, &mut rng).unwrap()] {
        assert_eq!(out.images.dims(), b.images.dims());
        let sums = values(&out.labels.sum(1).unwrap());
        assert!(sums.iter().all(|s| (s - 1.0).abs() < 1e-12));
    }
}

#[test]
fn iterative_optimizer_masks_stay_open() {
    let spec = ArchSpec::new(Family::ToyCnn, 3, 8, 8, 3);
    let model = build_model(spec, SeedStreams::new(0).stream("t"), DType::F64, &DEV).unwrap();
    let t = TeacherHandle::freeze(&model, "toy").unwrap();
    let b = batch(4, 8, 3);
    let cfg = IterativeConfig {
        steps: 5,
        ..IterativeConfig::default()
    };
    let out = iterative_mask_optimizer(&b, &t, &cfg, &mut SeedStreams::new(1).stream("it")).unwrap();
    assert_eq!(out.masks.dims(), [4, 1, 8, 8]);
    assert!(values(&out.masks).iter().all(|&m| m > 0.0 && m < 1.0));
    let zero = IterativeConfig { steps: 0, ..cfg };
    assert!(matches!(
        iterative_mask_optimizer(&b, &t, &zero, &mut SeedStreams::new(1).stream("it")),
        Err(Error::Param(_))
    ));
}

proptest! {
    #[test]
    fn sampled_boxes_stay_inside(lambda in 0.0f64..=1.0, h in 1usize..40, w in 1usize..40, seed in 0u64..500) {
        let mut rng = SeedStreams::new(seed).stream("box");
        let r = PatchBox::sample(lambda, h, w, &mut rng);
        prop_assert!(r.y0 <= r.y1 && r.y1 <= h && r.x0 <= r.x1 && r.x1 <= w);
        prop_assert!(r.area() as f64 <= (1.0 - lambda) * (h * w) as f64 + 1e-9);
    }
}
