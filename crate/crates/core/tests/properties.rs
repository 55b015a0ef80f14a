use hcma::attention::{AxialAttention, Axis3};
use hcma::harness::io::{load_volume, save_volume};
use hcma::harness::{RunConfig, VolumeRecord};
use hcma::losses::VoxelMask;
use hcma::metrics::evaluate;
use hcma::ssm::{cross_merge, cross_scan};
use hcma::tensor::ConvSpec;
use hcma::verify::oracles;
use hcma::{SeedStream, Tensor};
use proptest::prelude::*;

fn vol(seed: u64, shape: &[usize]) -> Tensor<f64> {
    Tensor::randn(shape, 1.0, &mut SeedStream::new(seed))
}

fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.to_vec().iter().zip(b.to_vec()).map(|(x, y)| x * y).sum()
}

fn mask_strategy(max: usize) -> impl Strategy<Value = VoxelMask> {
    (1..=max, 1..=max, 1..=max).prop_flat_map(|(d, h, w)| {
        prop::collection::vec(prop::bool::weighted(0.2), d * h * w).prop_map(move |bits| VoxelMask::new([d, h, w], bits).unwrap())
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn strided_conv_and_transpose_are_adjoint(seed in any::<u64>(), ca in 1usize..4, cb in 1usize..4, n in 1usize..4) {
        let x = vol(seed, &[1, ca, 2 * n, 2 * n, 2]);
        let w = vol(seed ^ 1, &[cb, ca, 2, 2, 2]);
        let y = vol(seed ^ 2, &[1, cb, n, n, 1]);
        let fwd = x.conv3d(&w, None, ConvSpec::new(2, 0, 1)).unwrap();
        let back = y.conv_transpose3d(&w, None, [2; 3]).unwrap();
        prop_assert!((dot(&fwd, &y) - dot(&x, &back)).abs() < 1e-10);
    }

    #[test]
    fn padded_conv_matches_loop_oracle(seed in any::<u64>(), groups in 1usize..3, k in prop::sample::select(vec![1usize, 3]), stride in 1usize..3) {
        let (cin, cout) = (2 * groups, 2 * groups);
        let xs = [1, cin, 4, 3, 5];
        let ws = [cout, cin / groups, k, k, k];
        let x = vol(seed, &xs);
        let w = vol(seed ^ 3, &ws);
        let b = vol(seed ^ 4, &[cout]);
        let pad = k / 2;
        let got = x.conv3d(&w, Some(&b), ConvSpec::new(stride, pad, groups)).unwrap();
        let (want, shape) = oracles::conv3d(&x.to_vec(), xs, &w.to_vec(), ws, Some(&b.to_vec()), stride, pad, groups);
        prop_assert_eq!(got.shape(), &shape[..]);
        for (g, e) in got.to_vec().iter().zip(&want) {
            prop_assert!((g - e).abs() < 1e-10);
        }
    }

    #[test]
    fn softmax_rows_are_distributions_and_shift_invariant(seed in any::<u64>(), rows in 1usize..6, cols in 1usize..9, shift in -50.0f64..50.0) {
        let x = vol(seed, &[rows, cols]);
        let p = x.softmax(1).unwrap().to_vec();
        let q = x.add_scalar(shift).softmax(1).unwrap().to_vec();
        for r in p.chunks(cols) {
            prop_assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        for (a, b) in p.iter().zip(&q) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn permute_then_inverse_is_identity(seed in any::<u64>(), perm in Just(vec![0usize, 1, 2, 3]).prop_shuffle()) {
        let x = vol(seed, &[2, 3, 4, 5]);
        let mut inv = vec![0; 4];
        for (i, &p) in perm.iter().enumerate() {
            inv[p] = i;
        }
        let back = x.permute(&perm).unwrap().permute(&inv).unwrap();
        prop_assert_eq!(back.to_vec(), x.to_vec());
    }

    #[test]
    fn merge_of_scan_is_four_times_input(seed in any::<u64>(), c in 1usize..4, h in 1usize..9, w in 1usize..9) {
        let mut rng = SeedStream::new(seed);
        let data: Vec<f64> = (0..c * h * w).map(|_| rng.below(9) as f64).collect();
        let x = Tensor::<f64>::from_vec(data, &[1, c, h, w]).unwrap();
        let y = cross_merge(&cross_scan(&x).unwrap(), h, w).unwrap();
        prop_assert_eq!(y.to_vec(), x.scale(4.0).to_vec());
    }

    #[test]
    fn dilation_is_extensive_monotone_and_additive(m in mask_strategy(6), a in 0usize..3, b in 0usize..3) {
        let grown = m.dilate(a);
        prop_assert!(m.is_subset_of(&grown));
        prop_assert_eq!(grown.dilate(b), m.dilate(a + b));
        let want = oracles::chebyshev_dilate(m.bits(), m.dims(), a);
        prop_assert_eq!(grown.bits(), want.as_slice());
    }

    #[test]
    fn overlap_metrics_relations(pair in mask_strategy(5).prop_flat_map(|m| {
        let n = m.len();
        let dims = m.dims();
        (Just(m), prop::collection::vec(any::<bool>(), n).prop_map(move |b| VoxelMask::new(dims, b).unwrap()))
    })) {
        let (p, g) = pair;
        let m = evaluate(&p, &g).unwrap();
        let swapped = evaluate(&g, &p).unwrap();
        prop_assert!(m.dice >= m.iou);
        prop_assert!((m.dice - 2.0 * m.iou / (1.0 + m.iou)).abs() < 1e-12);
        prop_assert_eq!(m.dice, swapped.dice);
        prop_assert_eq!(m.precision, swapped.recall);
        for v in [m.dice, m.iou, m.precision, m.recall, m.vs] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn attention_commutes_with_slice_permutation(seed in any::<u64>(), axis in 0usize..3, perm in Just(vec![0usize, 1, 2, 3]).prop_shuffle()) {
        let mut rng = SeedStream::new(seed);
        let block = AxialAttention::<f64>::init(3, false, &mut rng);
        let x = Tensor::<f64>::randn(&[1, 3, 4, 4, 4], 1.0, &mut rng);
        let ax = [Axis3::L1, Axis3::L2, Axis3::L3][axis];
        let shuffle = |t: &Tensor<f64>| t.index_select(axis + 2, &perm).unwrap();
        let a = shuffle(&block.update(&x, ax).unwrap()).to_vec();
        let b = block.update(&shuffle(&x), ax).unwrap().to_vec();
        for (u, v) in a.iter().zip(&b) {
            prop_assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn volume_files_roundtrip_bit_exactly(seed in any::<u64>(), d in 1usize..5, h in 1usize..5, w in 1usize..5, sp in 0.1f64..4.0) {
        let mut rng = SeedStream::new(seed);
        let n = d * h * w;
        let image: Vec<f32> = (0..n).map(|_| rng.normal() as f32).collect();
        let label = VoxelMask::new([d, h, w], (0..n).map(|_| rng.uniform() < 0.3).collect()).unwrap();
        let rec = VolumeRecord::new(format!("v{seed}"), image, label, [sp, 1.0, 2.0 * sp]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let back = load_volume(&save_volume(&rec, dir.path()).unwrap()).unwrap();
        let bits = |v: &[f32]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        prop_assert_eq!(bits(&back.image), bits(&rec.image));
        prop_assert_eq!(&back.label, &rec.label);
        prop_assert_eq!(back.spacing, rec.spacing);
    }

    #[test]
    fn run_config_survives_toml(seed in any::<u64>(), steps in 1u64..10_000, lr in 1e-6f64..1e-1, fr in 0.0f64..10.0) {
        let mut cfg = RunConfig { seed, ..RunConfig::default() };
        cfg.train.steps = steps;
        cfg.train.optimizer.lr = lr;
        cfg.loss.fr_weight = fr;
        prop_assert_eq!(RunConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    }
}
