use fdn_core::data::dataset::{augment, crop, flip_h, flip_v, rot90};
use fdn_core::data::pnm::{decode_pnm, encode_pnm, quantize};
use fdn_core::data::{add_awgn, AugPolicy, CropPolicy, PatchDataset, SigmaPolicy};
use fdn_core::layers::{squeeze_forward, squeeze_inverse};
use fdn_core::metrics::psnr;
use fdn_core::{FlowModel, LatentMask, ModelConfig, Rng, Tensor};
use proptest::prelude::*;

fn tensor(dims: [usize; 4], seed: u64) -> Tensor {
    Tensor::randn(dims, &mut Rng::new(seed)).unwrap()
}

fn unit_tensor(dims: [usize; 4], seed: u64) -> Tensor {
    let mut rng = Rng::new(seed);
    let data = (0..dims.iter().product()).map(|_| rng.uniform()).collect();
    Tensor::from_vec(dims, data).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn mask_is_idempotent(c in 1usize..24, h in 1usize..5, frac in 0.01f64..=1.0, seed in any::<u64>()) {
        let mask = LatentMask::new(c, frac).unwrap();
        let z = tensor([2, c, h, h], seed);
        let once = mask.apply(&z).unwrap();
        prop_assert_eq!(mask.apply(&once).unwrap(), once.clone());
        let zeroed = once.data().iter().filter(|v| **v == 0.0).count();
        prop_assert!(zeroed >= 2 * mask.noise_channels() * h * h);
    }

    #[test]
    fn squeeze_round_trip(n in 1usize..3, c in 1usize..4, h2 in 1usize..5, w2 in 1usize..5, seed in any::<u64>()) {
        let x = tensor([n, c, 2 * h2, 2 * w2], seed);
        let s = squeeze_forward(&x).unwrap();
        prop_assert_eq!(s.dims(), [n, 4 * c, h2, w2]);
        prop_assert_eq!(squeeze_inverse(&s).unwrap(), x);
    }

    #[test]
    fn flips_are_involutions(c in 1usize..4, h in 1usize..9, w in 1usize..9, seed in any::<u64>()) {
        let x = tensor([1, c, h, w], seed);
        prop_assert_eq!(flip_h(&flip_h(&x)), x.clone());
        prop_assert_eq!(flip_v(&flip_v(&x)), x.clone());
        let mut r = x.clone();
        for _ in 0..4 {
            r = rot90(&r);
        }
        prop_assert_eq!(r, x);
    }

    #[test]
    fn augmentation_preserves_values(p in 1usize..8, k in 0usize..8, seed in any::<u64>()) {
        let x = tensor([1, 1, p, p], seed);
        let y = augment(&x, AugPolicy::FlipRot, k);
        let mut a = x.data().to_vec();
        let mut b = y.data().to_vec();
        a.sort_by(f64::total_cmp);
        b.sort_by(f64::total_cmp);
        prop_assert_eq!(a, b);
    }

    #[test]
    fn random_crops_stay_inside(h in 1usize..20, w in 1usize..20, p in 1usize..20, seed in any::<u64>()) {
        let image = unit_tensor([1, 2, h, w], seed);
        let ds = PatchDataset::new(vec![image.clone()], p, CropPolicy::Random, AugPolicy::None, SigmaPolicy::Fixed(0.0));
        if p > h || p > w {
            prop_assert!(ds.is_err());
        } else {
            let (clean, noisy) = ds.unwrap().next_batch(4, &mut Rng::new(seed)).unwrap();
            prop_assert_eq!(clean.dims(), [4, 2, p, p]);
            prop_assert_eq!(&noisy, &clean);
            // every patch equals some window of the source
            for i in 0..4 {
                let patch = clean.slice_batch(i, 1).unwrap();
                let found = (0..=h - p).any(|t| (0..=w - p).any(|l| crop(&image, t, l, p).unwrap() == patch));
                prop_assert!(found);
            }
        }
    }

    #[test]
    fn patches_in_unit_range(p in 2usize..10, seed in any::<u64>(), k in 0usize..3) {
        let image = unit_tensor([1, 1, 12, 9], seed);
        let crop_policy = if k == 0 { CropPolicy::Random } else { CropPolicy::CenterResize };
        let ds = PatchDataset::new(vec![image], p, crop_policy, AugPolicy::FlipHV, SigmaPolicy::Blind(0.0, 55.0)).unwrap();
        let (clean, _) = ds.next_batch(3, &mut Rng::new(seed)).unwrap();
        prop_assert_eq!(clean.dims(), [3, 1, p, p]);
        prop_assert!(clean.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn pnm_round_trip(c in prop::sample::select(vec![1usize, 3]), h in 1usize..9, w in 1usize..9, seed in any::<u64>()) {
        let x = quantize(&unit_tensor([1, c, h, w], seed));
        let back = decode_pnm(&encode_pnm(&x).unwrap()).unwrap();
        prop_assert_eq!(back, x);
    }

    #[test]
    fn fdt1_round_trip(n in 1usize..3, c in 1usize..4, h in 1usize..4, w in 1usize..4, seed in any::<u64>()) {
        let x = tensor([n, c, h, w], seed);
        let mut buf = Vec::new();
        x.write_fdt1(&mut buf).unwrap();
        prop_assert_eq!(Tensor::read_fdt1(&buf[..]).unwrap(), x);
    }

    #[test]
    fn rng_state_resumes_stream(seed in any::<u64>(), skip in 0usize..50) {
        let mut a = Rng::new(seed);
        for _ in 0..skip {
            a.normal();
        }
        let mut b = Rng::state_from_f64(&a.state_to_f64()).unwrap();
        for _ in 0..10 {
            prop_assert_eq!(a.normal().to_bits(), b.normal().to_bits());
            prop_assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn psnr_is_symmetric(seed in any::<u64>(), sigma in 1.0f64..80.0) {
        let x = unit_tensor([1, 1, 8, 8], seed);
        let y = add_awgn(&x, sigma, &mut Rng::new(seed ^ 1)).unwrap();
        prop_assert_eq!(psnr(&x, &y, 1.0).unwrap(), psnr(&y, &x, 1.0).unwrap());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn model_round_trip(seed in any::<u64>(), blocks in 1usize..3, sof in 1usize..3, strength in 0.0f64..0.5) {
        let config = ModelConfig { in_channels: 1, height: 8, width: 8, n_flow_blocks: blocks, n_sof: sof, dense_width: 4, clamp: 2.0 };
        let mut rng = Rng::new(seed);
        let mut model = FlowModel::new(config, &mut rng).unwrap();
        model.randomize(&mut rng, strength);
        let y = Tensor::randn([2, 1, 8, 8], &mut rng).unwrap();
        let (z, _) = model.forward(&y).unwrap();
        prop_assert!(model.inverse(&z).unwrap().max_rel_diff(&y).unwrap() <= 1e-10);
        let back = model.forward(&model.inverse(&z).unwrap()).unwrap().0;
        prop_assert!(back.max_rel_diff(&z).unwrap() <= 1e-10);
    }
}

#[test]
fn psnr_falls_as_noise_grows() {
    let mut rng = Rng::new(8);
    let clean: Vec<Tensor> = (0..32)
        .map(|_| unit_tensor([1, 1, 16, 16], rng.next_u64()))
        .collect();
    let mean_psnr = |sigma: f64| {
        let mut noise_rng = Rng::new(99);
        clean
            .iter()
            .map(|x| psnr(&add_awgn(x, sigma, &mut noise_rng).unwrap(), x, 1.0).unwrap())
            .sum::<f64>()
            / 32.0
    };
    let (a, b, c) = (mean_psnr(10.0), mean_psnr(25.0), mean_psnr(50.0));
    assert!(a > b && b > c, "{a} {b} {c}");
}
