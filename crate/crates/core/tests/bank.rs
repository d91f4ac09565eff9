use std::collections::HashSet;

use proptest::prelude::*;
use vapdiff_core::bank::{DescriptionRecord, PromptBank, SplitTag};
use vapdiff_core::Error;

fn bank(per_class: &[usize]) -> PromptBank {
    let mut b = PromptBank::new("t", per_class.len());
    for (c, &n) in per_class.iter().enumerate() {
        for i in 0..n {
            b.insert(DescriptionRecord::new(c, format!("img-{c}-{i}"), format!("lesion {c} variant {i}"))).unwrap();
        }
    }
    b
}

#[test]
fn retrieval_is_uniform_over_four_records() {
    let b = bank(&[4, 1]);
    let mut counts = [0usize; 4];
    let draws = 100_000u64;
    for seed in 0..draws {
        let r = b.retrieve_random(0, seed).unwrap();
        counts[r.image_id.rsplit('-').next().unwrap().parse::<usize>().unwrap()] += 1;
    }
    for (i, &c) in counts.iter().enumerate() {
        let f = c as f64 / draws as f64;
        assert!((f - 0.25).abs() <= 0.01, "record {i} frequency {f}");
    }
    let chi2: f64 = counts.iter().map(|&c| (c as f64 - 25_000.0).powi(2) / 25_000.0).sum();
    // 3 degrees of freedom; 16.27 is the 0.999 quantile.
    assert!(chi2 < 16.27, "chi-square {chi2}");
    assert_eq!(b.retrieve_random(1, 123).unwrap().image_id, "img-1-0");
    assert_eq!(b.retrieve_random(0, 42).unwrap(), b.retrieve_random(0, 42).unwrap());
}

#[test]
fn retrieval_errors() {
    let b = bank(&[2, 0, 1]);
    assert!(matches!(b.retrieve_random(1, 0), Err(Error::EmptyClass(1))));
    assert!(matches!(b.retrieve_random(3, 0), Err(Error::Validation { .. })));
}

#[test]
fn duplicate_insert_leaves_bank_unchanged() {
    let mut b = bank(&[2, 2, 2]);
    let before = b.clone();
    let err = b.insert(DescriptionRecord::new(1, "img-1-0", "other text")).unwrap_err();
    assert!(matches!(err, Error::Conflict { class: 1, .. }));
    assert_eq!(b, before);
    assert!(b.insert(DescriptionRecord::new(9, "x", "y")).is_err());
    assert_eq!((b.count(0), b.count(1), b.count(2)), (2, 2, 2));
}

#[test]
fn split_examples() {
    let b = bank(&[4, 4, 4]);
    let (seen, unseen) = b.split(0.5, 7).unwrap();
    for c in 0..3 {
        assert_eq!((seen.count(c), unseen.count(c)), (2, 2));
    }
    let (s2, u2) = b.split(0.5, 7).unwrap();
    assert_eq!((seen.clone(), unseen.clone()), (s2, u2));
    assert!(unseen.iter().all(|r| r.split_tag == SplitTag::Unseen));
    let err = bank(&[4, 1]).split(0.5, 0).unwrap_err();
    assert!(err.to_string().contains("class 1"), "{err}");
}

proptest! {
    #[test]
    fn split_partitions_each_class(
        sizes in prop::collection::vec(2usize..30, 1..5),
        fraction in 0.01f64..0.99,
        seed in any::<u64>(),
    ) {
        let b = bank(&sizes);
        let (seen, unseen) = b.split(fraction, seed).unwrap();
        for (c, &n) in sizes.iter().enumerate() {
            let s: HashSet<_> = seen.records(c).iter().map(|r| r.image_id.clone()).collect();
            let u: HashSet<_> = unseen.records(c).iter().map(|r| r.image_id.clone()).collect();
            prop_assert!(s.is_disjoint(&u));
            prop_assert_eq!(s.len() + u.len(), n);
            prop_assert!((u.len() as f64 - fraction * n as f64).abs() <= 1.0);
            // Insertion order survives in both halves.
            let order = |recs: &[DescriptionRecord]| recs.iter().map(|r| r.image_id.rsplit('-').next().unwrap().parse::<usize>().unwrap()).collect::<Vec<_>>();
            let so = order(seen.records(c));
            prop_assert!(so.windows(2).all(|w| w[0] < w[1]));
        }
        prop_assert_eq!(b.split(fraction, seed).unwrap(), (seen, unseen));
    }

    #[test]
    fn retrieval_is_seed_deterministic(sizes in prop::collection::vec(1usize..10, 1..4), seed in any::<u64>()) {
        let b = bank(&sizes);
        for c in 0..sizes.len() {
            prop_assert_eq!(b.retrieve_random(c, seed).unwrap(), b.retrieve_random(c, seed).unwrap());
        }
    }
}
