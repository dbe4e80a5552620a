//! Meta-training episode construction.
//!
//! The unsupervised builder draws N samples at random from the flat
//! pool, assigns artificial labels 0..N-1 (one shot per class by
//! construction), and synthesizes the validation split by augmenting
//! each training image. The supervised builder samples N distinct true
//! classes and disjoint train/valid instances from each. Artificial
//! labels are 0-based internally; only displays map to 1..N.
//!
//! Whether the drawn samples really come from distinct hidden classes
//! is exactly the collision model of [`collision_probability`]: with c
//! balanced classes of m instances, drawing N without replacement gives
//! all-distinct classes with probability `prod_i (c-i)m / (cm-i)`.

use alloc::format;
use alloc::vec::Vec;

use crate::augment::{apply_augmentation, AugmentationSpec};
use crate::data::{LabeledDataset, UnlabeledDataset};
use crate::error::{CoreError, Result};
use crate::rng::Stream;
use crate::tensor::Tensor;

/// One meta-training task: a train split and a validation split of
/// (image, artificial label) pairs.
#[derive(Debug, Clone)]
pub struct EpisodeTask {
    pub train: Vec<(Tensor, usize)>,
    pub valid: Vec<(Tensor, usize)>,
    pub n_way: usize,
    pub k_shot_train: usize,
}

/// Builds an unsupervised episode: N samples drawn without replacement,
/// artificial labels 0..N-1, K = 1, and a validation set created by
/// augmenting each training image under the same label.
pub fn build_umtra_task(
    pool: &UnlabeledDataset,
    n_way: usize,
    aug: &AugmentationSpec,
    stream: &mut Stream,
) -> Result<EpisodeTask> {
    if pool.len() < n_way {
        return Err(CoreError::DatasetTooSmall {
            needed: n_way,
            have: pool.len(),
        });
    }
    let picks = stream.distinct_below(pool.len(), n_way);
    let mut train = Vec::with_capacity(n_way);
    let mut valid = Vec::with_capacity(n_way);
    for (label, &i) in picks.iter().enumerate() {
        let img = pool.sample(i);
        train.push((img.clone(), label));
        valid.push((apply_augmentation(aug, img, stream), label));
    }
    Ok(EpisodeTask {
        train,
        valid,
        n_way,
        k_shot_train: 1,
    })
}

/// Builds a supervised episode: N distinct true classes mapped to
/// artificial labels 0..N-1, with disjoint K-sized train and valid
/// draws per class.
pub fn build_supervised_task(
    dataset: &LabeledDataset,
    n_way: usize,
    k_shot: usize,
    stream: &mut Stream,
) -> Result<EpisodeTask> {
    let by_class = dataset.by_class();
    let eligible: Vec<(usize, &Vec<usize>)> = by_class
        .iter()
        .filter(|(_, v)| v.len() >= 2 * k_shot)
        .map(|(&c, v)| (c, v))
        .collect();
    if eligible.len() < n_way {
        return Err(CoreError::InsufficientClasses {
            detail: format!(
                "need {n_way} classes with >= {} samples, have {}",
                2 * k_shot,
                eligible.len()
            ),
        });
    }
    let class_picks = stream.distinct_below(eligible.len(), n_way);
    let mut train = Vec::with_capacity(n_way * k_shot);
    let mut valid = Vec::with_capacity(n_way * k_shot);
    for (label, &ci) in class_picks.iter().enumerate() {
        let members = eligible[ci].1;
        let draws = stream.distinct_below(members.len(), 2 * k_shot);
        for (j, &d) in draws.iter().enumerate() {
            let img = dataset.image(members[d]).clone();
            if j < k_shot {
                train.push((img, label));
            } else {
                valid.push((img, label));
            }
        }
    }
    Ok(EpisodeTask {
        train,
        valid,
        n_way,
        k_shot_train: k_shot,
    })
}

/// Probability that N draws without replacement from c balanced classes
/// of m instances each land in N distinct classes:
/// `prod_{i=0}^{N-1} (c-i)*m / (c*m - i)`, evaluated in log space.
pub fn collision_probability(c: u64, m: u64, n_way: u64) -> Result<f64> {
    if c == 0 || m == 0 || n_way == 0 {
        return Err(CoreError::InvalidSpec(
            "collision model needs c, m, n_way >= 1".into(),
        ));
    }
    if n_way > c.saturating_mul(m) {
        return Err(CoreError::CollisionDomain { c, m, n_way });
    }
    if n_way > c {
        return Ok(0.0);
    }
    let mut log_p = 0.0;
    for i in 0..n_way {
        log_p += libm::log(((c - i) * m) as f64) - libm::log((c * m - i) as f64);
    }
    Ok(libm::exp(log_p))
}

/// Monte-Carlo estimate of the same probability by simulating draws;
/// returns (estimate, standard error).
pub fn collision_monte_carlo(c: u64, m: u64, n_way: u64, trials: u64, stream: &mut Stream) -> Result<(f64, f64)> {
    if n_way > c.saturating_mul(m) {
        return Err(CoreError::CollisionDomain { c, m, n_way });
    }
    let population = (c * m) as usize;
    let mut hits = 0u64;
    let mut classes: Vec<u64> = Vec::with_capacity(n_way as usize);
    for _ in 0..trials {
        let draws = stream.distinct_below(population, n_way as usize);
        classes.clear();
        classes.extend(draws.iter().map(|&d| d as u64 / m));
        classes.sort_unstable();
        let distinct = classes.windows(2).all(|w| w[0] != w[1]);
        if distinct {
            hits += 1;
        }
    }
    let p = hits as f64 / trials as f64;
    let se = libm::sqrt(p * (1.0 - p) / trials as f64);
    Ok((p, se))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::augment::{preset, AugPrimitive};
    use crate::data::{gen_glyphs, GlyphSpec};

    /// Balanced pool of c classes with m instances each; sample content
    /// is irrelevant to episode structure, so keep images tiny.
    fn balanced_pool(c: usize, m: usize) -> UnlabeledDataset {
        let mut samples = Vec::with_capacity(c * m);
        let mut hidden = Vec::with_capacity(c * m);
        for class in 0..c {
            for inst in 0..m {
                samples.push(
                    Tensor::new(alloc::vec![1, 1, 1], alloc::vec![(class * m + inst) as f64]).unwrap(),
                );
                hidden.push(class);
            }
        }
        UnlabeledDataset::new(samples, Some(hidden)).unwrap()
    }

    #[test]
    fn umtra_identity_episode_mirrors_train_into_valid() {
        let ds = gen_glyphs(&GlyphSpec::new(10, 4, 1)).unwrap();
        let pool = crate::data::strip_labels(&ds);
        let mut s = Stream::new(5, 0);
        let task = build_umtra_task(&pool, 5, &AugmentationSpec::identity(), &mut s).unwrap();
        assert_eq!(task.train.len(), 5);
        assert_eq!(task.valid.len(), 5);
        assert_eq!(task.k_shot_train, 1);
        let mut labels: Vec<usize> = task.train.iter().map(|(_, l)| *l).collect();
        labels.sort_unstable();
        assert_eq!(labels, alloc::vec![0, 1, 2, 3, 4]);
        for ((ti, tl), (vi, vl)) in task.train.iter().zip(task.valid.iter()) {
            assert_eq!(tl, vl);
            assert!(ti.bits_eq(vi));
            assert!(!ti.shares_storage(vi), "train/valid must not share storage");
        }
    }

    #[test]
    fn umtra_rejects_pools_smaller_than_n_way() {
        let pool = balanced_pool(2, 2);
        let mut s = Stream::new(1, 0);
        assert!(matches!(
            build_umtra_task(&pool, 5, &AugmentationSpec::identity(), &mut s),
            Err(CoreError::DatasetTooSmall { needed: 5, have: 4 })
        ));
    }

    #[test]
    fn umtra_episode_construction_is_reproducible() {
        let ds = gen_glyphs(&GlyphSpec::new(8, 3, 2)).unwrap();
        let pool = crate::data::strip_labels(&ds);
        let aug = preset("zero_shift").unwrap();
        let a = build_umtra_task(&pool, 4, &aug, &mut Stream::new(9, 42)).unwrap();
        let b = build_umtra_task(&pool, 4, &aug, &mut Stream::new(9, 42)).unwrap();
        for ((ai, al), (bi, bl)) in a.train.iter().zip(&b.train) {
            assert_eq!(al, bl);
            assert!(ai.bits_eq(bi));
        }
        for ((ai, _), (bi, _)) in a.valid.iter().zip(&b.valid) {
            assert!(ai.bits_eq(bi));
        }
    }

    /// Fraction of built tasks whose samples carry distinct hidden
    /// classes, against the closed form. The Omniglot-shaped case
    /// (c=1200, m=20, N=5) sits at 0.9921.
    #[test]
    fn distinct_class_frequency_matches_closed_form_omniglot_shape() {
        let pool = balanced_pool(1200, 20);
        let hidden = pool.diagnostics_hidden_labels().unwrap().to_vec();
        let aug = AugmentationSpec::identity();
        let trials = 100_000usize;
        let mut distinct = 0usize;
        for t in 0..trials {
            let mut s = Stream::new(777, t as u64);
            let task = build_umtra_task(&pool, 5, &aug, &mut s).unwrap();
            let mut classes: Vec<usize> = task
                .train
                .iter()
                .map(|(img, _)| hidden[img.data()[0] as usize])
                .collect();
            classes.sort_unstable();
            classes.dedup();
            if classes.len() == 5 {
                distinct += 1;
            }
        }
        let freq = distinct as f64 / trials as f64;
        assert!(
            (freq - 0.9921).abs() < 0.003,
            "frequency {freq} should be within 0.003 of 0.9921"
        );
    }

    /// Monte-Carlo frequency converges to the closed form within three
    /// standard errors for several (c, m, N) shapes.
    #[test]
    fn monte_carlo_agrees_with_closed_form_across_shapes() {
        for &(c, m) in &[(20usize, 10usize), (64, 600), (1200, 20)] {
            let pool = balanced_pool(c, m);
            let hidden = pool.diagnostics_hidden_labels().unwrap().to_vec();
            let aug = AugmentationSpec::identity();
            let trials = 20_000usize;
            let mut distinct = 0usize;
            for t in 0..trials {
                let mut s = Stream::new(888, t as u64);
                let task = build_umtra_task(&pool, 5, &aug, &mut s).unwrap();
                let mut classes: Vec<usize> = task
                    .train
                    .iter()
                    .map(|(img, _)| hidden[img.data()[0] as usize])
                    .collect();
                classes.sort_unstable();
                classes.dedup();
                if classes.len() == 5 {
                    distinct += 1;
                }
            }
            let p = collision_probability(c as u64, m as u64, 5).unwrap();
            let freq = distinct as f64 / trials as f64;
            let se = libm::sqrt(p * (1.0 - p) / trials as f64);
            assert!(
                (freq - p).abs() < 3.0 * se.max(1e-4),
                "(c={c}, m={m}): freq {freq} vs p {p} (se {se})"
            );
        }
    }

    #[test]
    fn collision_probability_reproduces_the_published_values() {
        let omniglot = collision_probability(1200, 20, 5).unwrap();
        assert!((omniglot - 0.9921).abs() < 5e-5, "{omniglot}");
        let mini = collision_probability(64, 600, 5).unwrap();
        assert!((mini - 0.8523).abs() < 5e-5, "{mini}");
    }

    #[test]
    fn collision_probability_edge_cases() {
        assert_eq!(collision_probability(7, 3, 1).unwrap(), 1.0);
        assert_eq!(collision_probability(5, 10, 6).unwrap(), 0.0);
        assert!(matches!(
            collision_probability(2, 2, 5),
            Err(CoreError::CollisionDomain { .. })
        ));
        assert!(collision_probability(0, 1, 1).is_err());
        // Large arguments survive thanks to the log-space product.
        let huge = collision_probability(1_000_000, 1_000, 20).unwrap();
        assert!(huge > 0.999 && huge <= 1.0);
    }

    #[test]
    fn collision_monte_carlo_se_scales() {
        let mut s = Stream::new(3, 0);
        let (p, se) = collision_monte_carlo(20, 10, 5, 50_000, &mut s).unwrap();
        let exact = collision_probability(20, 10, 5).unwrap();
        assert!((p - exact).abs() < 3.0 * se, "{p} vs {exact} (se {se})");
    }

    #[test]
    fn supervised_task_pairs_disjoint_samples_per_class() {
        let ds = gen_glyphs(&GlyphSpec::new(10, 2, 3)).unwrap();
        // Exactly two samples per class: both must be used, one per split.
        let mut s = Stream::new(4, 0);
        let task = build_supervised_task(&ds, 5, 1, &mut s).unwrap();
        assert_eq!(task.train.len(), 5);
        assert_eq!(task.valid.len(), 5);
        for ((ti, tl), (vi, vl)) in task.train.iter().zip(&task.valid) {
            assert_eq!(tl, vl);
            assert!(!ti.bits_eq(vi), "train and valid must draw different samples");
        }
    }

    #[test]
    fn supervised_classes_are_distinct_and_bijective() {
        let ds = gen_glyphs(&GlyphSpec::new(12, 6, 5)).unwrap();
        for t in 0..500 {
            let mut s = Stream::new(6, t);
            let task = build_supervised_task(&ds, 4, 1, &mut s).unwrap();
            // Recover the true class of each train sample by payload
            // equality.
            let true_class = |img: &Tensor| -> usize {
                (0..ds.len())
                    .find(|&i| ds.image(i).bits_eq(img))
                    .map(|i| ds.class_of(i))
                    .unwrap()
            };
            let classes: Vec<usize> = task.train.iter().map(|(img, _)| true_class(img)).collect();
            let mut sorted = classes.clone();
            sorted.sort_unstable();
            sorted.dedup();
            assert_eq!(sorted.len(), 4, "duplicate true classes in episode");
            // Valid samples carry the same artificial label as their
            // class's train sample.
            for (img, label) in &task.valid {
                assert_eq!(true_class(img), classes[*label]);
            }
        }
    }

    #[test]
    fn supervised_train_valid_index_sets_are_disjoint() {
        let ds = gen_glyphs(&GlyphSpec::new(8, 6, 7)).unwrap();
        for t in 0..2000 {
            let mut s = Stream::new(8, t);
            let task = build_supervised_task(&ds, 4, 2, &mut s).unwrap();
            for (ti, _) in &task.train {
                for (vi, _) in &task.valid {
                    assert!(!ti.shares_storage(vi) || !ti.bits_eq(vi));
                }
            }
        }
    }

    #[test]
    fn supervised_rejects_thin_classes() {
        let ds = gen_glyphs(&GlyphSpec::new(6, 3, 9)).unwrap();
        let mut s = Stream::new(10, 0);
        // k=2 needs 4 samples per class but only 3 exist.
        assert!(matches!(
            build_supervised_task(&ds, 3, 2, &mut s),
            Err(CoreError::InsufficientClasses { .. })
        ));
    }
}
