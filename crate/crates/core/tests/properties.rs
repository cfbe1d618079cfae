use dhcnet::data::{Manifest, ManifestRow, Split};
use dhcnet::hce;
use dhcnet::hcl::{self, Corner};
use dhcnet::losses::{self, LossTerms, LossWeights, OrderingMode};
use dhcnet::nn::{self, Rect};
use dhcnet::tensor::{Tape, Tensor};
use dhcnet::train::{apply_overrides, TrainConfig};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn image(c: usize, h: usize, w: usize, seed: u64) -> Tensor {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::new(vec![c, h, w], (0..c * h * w).map(|_| rng.gen::<f64>()).collect()).unwrap()
}

fn sorted(v: &[f64]) -> Vec<f64> {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    s
}

fn corner() -> impl Strategy<Value = Corner> {
    prop::sample::select(Corner::ALL.to_vec())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn shuffle_is_an_invertible_region_permutation(
        seed in any::<u64>(),
        size in prop::sample::select(vec![16usize, 24, 32]),
        sigma in 0.05f64..=1.0,
        m in 1u32..=3,
        corner in corner(),
    ) {
        let img = image(3, size, size, seed);
        let region = hcl::region_at(size, size, sigma, m, corner);
        prop_assume!(region.is_ok());
        let region = region.unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5a);
        for k in 1..=m {
            let n = 1usize << k;
            let (out, perm) = hcl::shuffle_region(&img, &region, n, &mut rng).unwrap();
            let back = hcl::apply_permutation(&out, &region, n, &hcl::invert_permutation(&perm)).unwrap();
            prop_assert_eq!(&back, &img);
            let (mut inside_a, mut inside_b) = (Vec::new(), Vec::new());
            for (i, (a, b)) in img.data().iter().zip(out.data()).enumerate() {
                let (y, x) = ((i / size) % size, i % size);
                if region.contains(y, x) {
                    inside_a.push(*a);
                    inside_b.push(*b);
                } else {
                    prop_assert_eq!(a.to_bits(), b.to_bits());
                }
            }
            prop_assert_eq!(sorted(&inside_a), sorted(&inside_b));
        }
    }

    #[test]
    fn hinge_ordering_is_nonnegative_and_zero_when_sorted(c in prop::collection::vec(-6.0f64..0.0, 2..6)) {
        let t = losses::ordering_term(&c, OrderingMode::Hinge);
        prop_assert!(t >= 0.0);
        prop_assert_eq!(losses::ordering_term(&sorted(&c), OrderingMode::Hinge), 0.0);
        prop_assert!(losses::ordering_term(&c, OrderingMode::Raw) <= t);
    }

    #[test]
    fn raw_ordering_flips_sign_when_reversed(c in prop::collection::vec(-6.0f64..0.0, 2..6)) {
        let rev: Vec<f64> = c.iter().rev().copied().collect();
        let (a, b) = (losses::ordering_term(&c, OrderingMode::Raw), losses::ordering_term(&rev, OrderingMode::Raw));
        prop_assert!((a + b).abs() < 1e-9);
    }

    #[test]
    fn exp_loss_is_a_symmetric_nonnegative_distance(seed in any::<u64>(), n in 1usize..3, ch in 1usize..5) {
        let (a, b) = (image(4 * n, ch, 4, seed).reshape(vec![4 * n, ch, 2, 2]).unwrap(),
                      image(4 * n, ch, 4, seed + 1).reshape(vec![4 * n, ch, 2, 2]).unwrap());
        let mut tape = Tape::new();
        let (va, vb) = (tape.constant(a), tape.constant(b));
        let ab = losses::exp_loss(&mut tape, va, vb).unwrap();
        let ba = losses::exp_loss(&mut tape, vb, va).unwrap();
        let aa = losses::exp_loss(&mut tape, va, va).unwrap();
        let (ab, ba, aa) = (tape.value(ab).item().unwrap(), tape.value(ba).item().unwrap(), tape.value(aa).item().unwrap());
        prop_assert!(ab >= 0.0);
        prop_assert_eq!(ab, ba);
        prop_assert_eq!(aa, 0.0);
    }

    #[test]
    fn total_loss_scales_exactly_by_powers_of_two(
        cls in 0.0f64..10.0, hor in 0.0f64..10.0, exp in 0.0f64..10.0,
        alpha in 0.0f64..4.0, beta in 0.0f64..4.0, gamma in 0.0f64..4.0, e in -4i32..5,
    ) {
        let run = |w: &LossWeights| {
            let mut tape = Tape::new();
            let terms = LossTerms {
                cls: tape.param(Tensor::scalar(cls)),
                hor: Some(tape.param(Tensor::scalar(hor))),
                exp: Some(tape.param(Tensor::scalar(exp))),
                confidences: vec![],
            };
            losses::total_loss(&mut tape, &terms, w).unwrap().1.total
        };
        let w = LossWeights { alpha, beta, gamma };
        let factor = 2f64.powi(e);
        prop_assert_eq!(run(&w.scaled(factor)), factor * run(&w));
        prop_assert_eq!(run(&w), alpha * cls + beta * hor + gamma * exp);
    }

    #[test]
    fn log_softmax_normalises_and_ignores_shifts(seed in any::<u64>(), k in 2usize..8, shift in -50.0f64..50.0) {
        let x = image(1, 3, k, seed).reshape(vec![3, k]).unwrap().map(|v| 10.0 * v - 5.0);
        let lp = nn::log_softmax_values(&x).unwrap();
        for row in lp.data().chunks(k) {
            prop_assert!((row.iter().map(|v| v.exp()).sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let shifted = nn::log_softmax_values(&x.map(|v| v + shift)).unwrap();
        for (a, b) in lp.data().iter().zip(shifted.data()) {
            prop_assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn mixup_is_convex(seed in any::<u64>(), lambda in 0.0f64..=1.0, la in 0usize..5, lb in 0usize..5) {
        let (a, b) = (image(3, 6, 6, seed), image(3, 6, 6, seed + 7));
        let (mixed, label) = hcl::mixup(&a, &b, la, lb, 5, lambda).unwrap();
        for ((m, x), y) in mixed.data().iter().zip(a.data()).zip(b.data()) {
            prop_assert!(*m >= x.min(*y) - 1e-12 && *m <= x.max(*y) + 1e-12);
        }
        prop_assert!((label.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(label.iter().all(|v| *v >= 0.0));
    }

    #[test]
    fn resampling_preserves_constants(
        v in -3.0f64..3.0, h in 2usize..9, w in 2usize..9, oh in 1usize..12, ow in 1usize..12,
        fx in 0.0f64..1.0, fy in 0.0f64..1.0, fw in 0.05f64..1.0, fh in 0.05f64..1.0, spb in 1usize..4,
    ) {
        let (x0, y0) = (fx * w as f64 * 0.9, fy * h as f64 * 0.9);
        let (bw, bh) = (fw * (w as f64 - x0), fh * (h as f64 - y0));
        let feat = Tensor::new(vec![2, h, w], vec![v; 2 * h * w]).unwrap();
        let resized = nn::bilinear_resize_values(&feat.reshape(vec![1, 2, h, w]).unwrap(), oh, ow).unwrap();
        prop_assert!(resized.data().iter().all(|x| (x - v).abs() < 1e-12));
        let pooled = nn::roi_align_values(&feat, Rect::new(x0, y0, x0 + bw, y0 + bh), oh, ow, spb).unwrap();
        prop_assert!(pooled.data().iter().all(|x| (x - v).abs() < 1e-12));
    }

    #[test]
    fn quarter_views_reassemble_the_image(seed in any::<u64>(), half in 2usize..12) {
        let size = 2 * half;
        let img = image(3, size, size, seed);
        let views = hce::extract_views(&img, 0.25).unwrap();
        prop_assert_eq!(hce::reassemble(&views, size, size), img);
    }

    #[test]
    fn manifest_roundtrips(rows in prop::collection::vec(("[a-z]{1,8}/[a-z0-9_]{1,10}\\.png", 0usize..50, any::<bool>()), 0..20)) {
        let manifest = Manifest {
            rows: rows
                .into_iter()
                .map(|(path, label, train)| ManifestRow { path, label, split: if train { Split::Train } else { Split::Test } })
                .collect(),
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.csv");
        manifest.write(&path).unwrap();
        prop_assert_eq!(Manifest::read(&path).unwrap(), manifest);
    }

    #[test]
    fn overrides_set_nested_fields(seed in any::<u64>(), lr in 1e-5f64..1.0, epochs in 1usize..100) {
        let pairs = vec![
            ("seed".to_string(), seed.to_string()),
            ("optimizer.lr".to_string(), format!("{lr:?}")),
            ("epochs".to_string(), epochs.to_string()),
        ];
        let c: TrainConfig = apply_overrides(&TrainConfig::default(), &pairs).unwrap();
        prop_assert_eq!(c.seed, seed);
        prop_assert_eq!(c.optimizer.lr, lr);
        prop_assert_eq!(c.epochs, epochs);
        prop_assert_eq!(TrainConfig::from_json(&c.to_json()).unwrap(), c);
    }
}

#[test]
fn region_side_snaps_to_granularity() {
    for sigma in [0.1, 0.25, 0.5, 0.9, 1.0] {
        for m in 1..=4 {
            let r = hcl::region_at(64, 64, sigma, m, Corner::ALL[0]).unwrap();
            assert_eq!(r.side_h % (1 << m), 0);
            assert_eq!(r.side_w % (1 << m), 0);
            assert!(r.side_h as f64 <= sigma.sqrt() * 64.0 + 1e-9);
        }
    }
    let full = hcl::region_at(64, 64, 1.0, 3, Corner::ALL[2]).unwrap();
    assert_eq!((full.side_h, full.side_w, full.origin()), (64, 64, (0, 0)));
}
