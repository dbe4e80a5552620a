//! Property-based invariant suite: episode construction, augmentation
//! shape/determinism, split disjointness, softmax normalization, and
//! gradient linearity, each under at least 200 random cases.

use proptest::prelude::*;

use umtra_core::augment::{apply_augmentation, AugPrimitive, AugmentationSpec};
use umtra_core::data::{gen_glyphs, split, strip_labels, GlyphSpec, SplitSpec};
use umtra_core::rng::Stream;
use umtra_core::taskgen::{build_supervised_task, build_umtra_task};
use umtra_core::{Graph, Tensor};

const CASES: u32 = 256;

fn rand_tensor(shape: &[usize], seed: u64, lo: f64, hi: f64) -> Tensor {
    let mut s = Stream::new(seed, 1);
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| s.uniform_in(lo, hi)).collect()).unwrap()
}

fn small_pool(classes: usize, instances: usize, seed: u64) -> umtra_core::data::LabeledDataset {
    let mut spec = GlyphSpec::new(classes, instances, seed);
    spec.image_size = 8;
    gen_glyphs(&spec).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(CASES))]

    /// Unsupervised episodes have each artificial label exactly once in
    /// both splits, aligned pairs, fresh valid storage, and bit-for-bit
    /// reproducibility from the stream seed.
    #[test]
    fn umtra_episode_structure(seed in 0u64..1_000_000, n_way in 2usize..6, stream_id in 0u64..1000) {
        let ds = small_pool(8, 3, seed % 64);
        let pool = strip_labels(&ds);
        let aug = AugmentationSpec::of(vec![
            AugPrimitive::Shift { min_px: 0, max_px: 3 },
            AugPrimitive::ZeroPixels { rate: 0.3 },
        ]);
        let task = build_umtra_task(&pool, n_way, &aug, &mut Stream::new(seed, stream_id)).unwrap();
        prop_assert_eq!(task.train.len(), n_way);
        prop_assert_eq!(task.valid.len(), n_way);
        prop_assert_eq!(task.k_shot_train, 1);
        let mut train_labels: Vec<usize> = task.train.iter().map(|(_, l)| *l).collect();
        train_labels.sort_unstable();
        prop_assert_eq!(train_labels, (0..n_way).collect::<Vec<_>>());
        let mut valid_labels: Vec<usize> = task.valid.iter().map(|(_, l)| *l).collect();
        valid_labels.sort_unstable();
        prop_assert_eq!(valid_labels, (0..n_way).collect::<Vec<_>>());
        for ((ti, tl), (vi, vl)) in task.train.iter().zip(&task.valid) {
            prop_assert_eq!(tl, vl);
            prop_assert_eq!(vi.shape(), ti.shape());
            prop_assert!(vi.is_all_finite());
            prop_assert!(!ti.shares_storage(vi));
        }
        let again = build_umtra_task(&pool, n_way, &aug, &mut Stream::new(seed, stream_id)).unwrap();
        for ((a, _), (b, _)) in task.valid.iter().zip(&again.valid) {
            prop_assert!(a.bits_eq(b));
        }
    }

    /// Supervised episodes map artificial labels bijectively onto the
    /// sampled true classes.
    #[test]
    fn supervised_episode_bijection(seed in 0u64..1_000_000, n_way in 2usize..5) {
        let ds = small_pool(6, 4, 17);
        let task = build_supervised_task(&ds, n_way, 1, &mut Stream::new(seed, 0)).unwrap();
        let true_class = |img: &Tensor| -> usize {
            (0..ds.len()).find(|&i| ds.image(i).bits_eq(img)).map(|i| ds.class_of(i)).unwrap()
        };
        let classes: Vec<usize> = task.train.iter().map(|(img, _)| true_class(img)).collect();
        let mut dedup = classes.clone();
        dedup.sort_unstable();
        dedup.dedup();
        prop_assert_eq!(dedup.len(), n_way);
        for (img, label) in &task.valid {
            prop_assert_eq!(true_class(img), classes[*label]);
        }
    }

    /// Every augmentation pipeline preserves shape, keeps values
    /// finite, and is deterministic for a fixed stream.
    #[test]
    fn augmentation_shape_and_determinism(
        seed in 0u64..1_000_000,
        rate in 0.0f64..1.0,
        max_px in 0usize..7,
        deg in 0.0f64..45.0,
        delta in 0.0f64..0.5,
    ) {
        let img = rand_tensor(&[1, 9, 11], seed, 0.0, 1.0);
        let aug = AugmentationSpec::of(vec![
            AugPrimitive::Shift { min_px: 0, max_px },
            AugPrimitive::HorizontalFlip { prob: 0.5 },
            AugPrimitive::Rotate { max_degrees: deg },
            AugPrimitive::ZeroPixels { rate },
            AugPrimitive::BrightnessContrast { max_delta: delta },
        ]);
        let a = apply_augmentation(&aug, &img, &mut Stream::new(seed, 7));
        prop_assert_eq!(a.shape(), img.shape());
        prop_assert!(a.is_all_finite());
        let b = apply_augmentation(&aug, &img, &mut Stream::new(seed, 7));
        prop_assert!(a.bits_eq(&b));
    }

    /// Class-level splits are pairwise disjoint and cover every class,
    /// for any seed and admissible ratio triple.
    #[test]
    fn split_class_disjointness(seed in 0u64..1_000_000, rv in 0.1f64..0.4, rs in 0.1f64..0.4) {
        let ds = small_pool(12, 2, 23);
        let rt = 1.0 - rv - rs;
        let (train, val, test) = split(&ds, &SplitSpec::Ratios(rt, rv, rs), seed).unwrap();
        let mut all = train.classes();
        all.extend(val.classes());
        all.extend(test.classes());
        let total = all.len();
        all.sort_unstable();
        all.dedup();
        prop_assert_eq!(total, all.len());
        prop_assert_eq!(all, ds.classes());
    }

    /// Softmax rows are probability vectors even for extreme logits.
    #[test]
    fn softmax_rows_normalize(seed in 0u64..1_000_000, scale in 0.1f64..100.0) {
        let logits = rand_tensor(&[4, 6], seed, -scale, scale);
        let g = Graph::new();
        let p = g.softmax(&logits).unwrap();
        for i in 0..4 {
            let row = &p.data()[i * 6..(i + 1) * 6];
            prop_assert!(row.iter().all(|&v| v >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    /// grad(a*L1 + b*L2) equals a*grad(L1) + b*grad(L2) elementwise.
    #[test]
    fn gradient_linearity(seed in 0u64..1_000_000, a in -2.0f64..2.0, b in -2.0f64..2.0) {
        let x0 = rand_tensor(&[2, 3], seed, -1.5, 1.5);
        let g = Graph::new();
        let leaf = g.leaf(&x0);
        let l1 = g.sum_all(&g.mul(&leaf, &leaf).unwrap()).unwrap();
        let l2 = g.sum_all(&g.exp(&g.scale(&leaf, 0.4).unwrap()).unwrap()).unwrap();
        let combined = g.add(&g.scale(&l1, a).unwrap(), &g.scale(&l2, b).unwrap()).unwrap();
        let gc = g.grad(&combined, &[&leaf], false).unwrap();
        let g1 = g.grad(&l1, &[&leaf], false).unwrap();
        let g2 = g.grad(&l2, &[&leaf], false).unwrap();
        for e in 0..6 {
            let want = a * g1[0].data()[e] + b * g2[0].data()[e];
            prop_assert!((gc[0].data()[e] - want).abs() < 1e-12);
        }
    }

    /// Serialized tensors decode to bit-identical values.
    #[test]
    fn tensor_bytes_round_trip(seed in 0u64..1_000_000, r in 1usize..4, c in 1usize..5) {
        let t = rand_tensor(&[r, c], seed, -1e6, 1e6);
        let (back, used) = Tensor::from_bytes(&t.to_bytes()).unwrap();
        prop_assert_eq!(used, t.to_bytes().len());
        prop_assert!(t.bits_eq(&back));
    }
}
