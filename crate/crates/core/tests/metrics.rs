use mft_core::metrics::{compute_metrics, render_map, ConfusionMatrix, PALETTE};
use mft_core::{MftError, Rng};

/// Straightforward 64-bit reimplementation used as the oracle.
fn brute(counts: &[Vec<u64>]) -> (f64, f64, f64) {
    let c = counts.len();
    let mut total = 0.0;
    let mut diag = 0.0;
    let mut row = vec![0.0; c];
    let mut col = vec![0.0; c];
    for i in 0..c {
        for j in 0..c {
            let x = counts[i][j] as f64;
            total += x;
            row[i] += x;
            col[j] += x;
            if i == j {
                diag += x;
            }
        }
    }
    let oa = diag / total;
    let nonempty: Vec<usize> = (0..c).filter(|&i| row[i] > 0.0).collect();
    let aa = nonempty.iter().map(|&i| counts[i][i] as f64 / row[i]).sum::<f64>() / nonempty.len() as f64;
    let mut pe = 0.0;
    for i in 0..c {
        pe += row[i] * col[i];
    }
    pe /= total * total;
    let kappa = if pe == 1.0 { 0.0 } else { (oa - pe) / (1.0 - pe) };
    (oa, aa, kappa)
}

fn random_matrix(rng: &mut Rng) -> Vec<Vec<u64>> {
    let c = 2 + rng.below(7);
    let mut m: Vec<Vec<u64>> = (0..c).map(|_| (0..c).map(|_| rng.below(20) as u64).collect()).collect();
    if rng.uniform() < 0.2 {
        m[rng.below(c)] = vec![0; c];
    }
    m[0][0] += 1;
    m
}

#[test]
fn matches_brute_force_on_random_matrices() {
    let mut rng = Rng::new(11);
    for _ in 0..100 {
        let m = random_matrix(&mut rng);
        let r = compute_metrics(&ConfusionMatrix::from_counts(m.clone()).unwrap()).unwrap();
        let (oa, aa, kappa) = brute(&m);
        assert!((r.oa - oa).abs() <= 1e-12);
        assert!((r.aa - aa).abs() <= 1e-12);
        assert!((r.kappa - kappa).abs() <= 1e-12);
        assert!(r.kappa <= r.oa + 1e-12);
    }
}

#[test]
fn hand_case_and_perfect_agreement() {
    let r = compute_metrics(&ConfusionMatrix::from_counts(vec![vec![2, 1], vec![1, 2]]).unwrap()).unwrap();
    assert!((r.oa - 2.0 / 3.0).abs() < 1e-15);
    assert!((r.aa - 2.0 / 3.0).abs() < 1e-15);
    assert!((r.kappa - 1.0 / 3.0).abs() < 1e-15);

    let r = compute_metrics(&ConfusionMatrix::from_counts(vec![vec![3, 0, 0], vec![0, 5, 0], vec![0, 0, 1]]).unwrap())
        .unwrap();
    assert_eq!((r.oa, r.aa, r.kappa), (1.0, 1.0, 1.0));
}

#[test]
fn empty_rows_are_flagged_and_skipped() {
    let r = compute_metrics(&ConfusionMatrix::from_counts(vec![vec![4, 0, 1], vec![0, 0, 0], vec![1, 0, 4]]).unwrap())
        .unwrap();
    assert_eq!(r.empty_classes, vec![1]);
    assert_eq!(r.per_class[1], 0.0);
    assert!((r.aa - 0.8).abs() < 1e-15);
}

#[test]
fn degenerate_chance_agreement_gives_zero_kappa() {
    let r = compute_metrics(&ConfusionMatrix::from_counts(vec![vec![7, 0], vec![0, 0]]).unwrap()).unwrap();
    assert_eq!(r.oa, 1.0);
    assert_eq!(r.kappa, 0.0);
}

#[test]
fn empty_evaluation_is_an_error() {
    assert!(matches!(compute_metrics(&ConfusionMatrix::new(3)), Err(MftError::EmptyEvaluation)));
}

#[test]
fn random_predictions_have_near_zero_kappa() {
    let mut rng = Rng::new(5);
    let mut cm = ConfusionMatrix::new(4);
    for i in 0..10_000 {
        cm.accumulate(i % 4, rng.below(4)).unwrap();
    }
    let r = compute_metrics(&cm).unwrap();
    assert!(r.kappa.abs() < 0.05, "{}", r.kappa);
}

#[test]
fn accumulation_counts_and_rejects_out_of_range() {
    let mut cm = ConfusionMatrix::new(3);
    cm.accumulate(0, 0).unwrap();
    assert_eq!(cm.counts()[0][0], 1);
    let pairs = [(1, 2), (2, 2), (0, 1), (1, 1)];
    for &(t, p) in &pairs {
        cm.accumulate(t, p).unwrap();
    }
    assert_eq!(cm.total(), 5);
    let mut reversed = ConfusionMatrix::new(3);
    for &(t, p) in pairs.iter().rev().chain([(0, 0)].iter()) {
        reversed.accumulate(t, p).unwrap();
    }
    assert_eq!(cm, reversed);
    assert!(matches!(cm.accumulate(3, 0), Err(MftError::Label(_))));
    assert!(matches!(cm.accumulate(0, 3), Err(MftError::Label(_))));
}

#[test]
fn merging_shards_sums_counts() {
    let mut a = ConfusionMatrix::from_counts(vec![vec![1, 2], vec![3, 4]]).unwrap();
    let b = ConfusionMatrix::from_counts(vec![vec![5, 0], vec![1, 1]]).unwrap();
    a.merge(&b).unwrap();
    assert_eq!(a.counts(), &[vec![6, 2], vec![4, 5]]);
    assert!(a.merge(&ConfusionMatrix::new(3)).is_err());
}

#[test]
fn report_json_has_expected_fields() {
    let r = compute_metrics(&ConfusionMatrix::from_counts(vec![vec![2, 1], vec![1, 2]]).unwrap()).unwrap();
    let v: serde_json::Value = serde_json::to_value(&r).unwrap();
    for key in ["oa", "aa", "kappa", "per_class", "confusion", "samples"] {
        assert!(v.get(key).is_some(), "missing {key}");
    }
    assert_eq!(v["samples"], 6);
}

#[test]
fn map_rendering() {
    let empty = render_map(3, 5, &[]).unwrap();
    let header = b"P6\n5 3\n255\n";
    assert_eq!(&empty[..header.len()], header);
    assert_eq!(empty.len(), header.len() + 3 * 5 * 3);
    assert!(empty[header.len()..].iter().all(|&b| b == 0));

    let one = render_map(3, 5, &[((1, 2), 0)]).unwrap();
    let px = &one[header.len()..];
    let colored: Vec<usize> = (0..15).filter(|&p| px[p * 3..p * 3 + 3] != [0, 0, 0]).collect();
    assert_eq!(colored, vec![7]);
    assert_eq!(&px[21..24], &PALETTE[1]);
    assert_eq!(one, render_map(3, 5, &[((1, 2), 0)]).unwrap());

    assert!(matches!(render_map(3, 5, &[((0, 0), 15)]), Err(MftError::Palette { .. })));
    assert!(matches!(render_map(3, 5, &[((3, 0), 0)]), Err(MftError::Bounds { .. })));
}

mod props {
    use super::*;
    use mft_core::Rng;
    use proptest::prelude::*;

    fn matrix() -> impl Strategy<Value = Vec<Vec<u64>>> {
        (2usize..6).prop_flat_map(|c| proptest::collection::vec(proptest::collection::vec(0u64..30, c), c))
    }

    proptest! {
        #[test]
        fn relabeling_preserves_scores(m in matrix(), seed in 0u64..1000) {
            prop_assume!(m.iter().flatten().sum::<u64>() > 0);
            let c = m.len();
            let mut perm: Vec<usize> = (0..c).collect();
            Rng::new(seed).shuffle(&mut perm);
            let mut p = vec![vec![0; c]; c];
            for i in 0..c {
                for j in 0..c {
                    p[perm[i]][perm[j]] = m[i][j];
                }
            }
            let a = compute_metrics(&ConfusionMatrix::from_counts(m).unwrap()).unwrap();
            let b = compute_metrics(&ConfusionMatrix::from_counts(p).unwrap()).unwrap();
            prop_assert!((a.oa - b.oa).abs() < 1e-12);
            prop_assert!((a.aa - b.aa).abs() < 1e-12);
            prop_assert!((a.kappa - b.kappa).abs() < 1e-12);
        }

        #[test]
        fn kappa_never_exceeds_oa(m in matrix()) {
            prop_assume!(m.iter().flatten().sum::<u64>() > 0);
            let r = compute_metrics(&ConfusionMatrix::from_counts(m).unwrap()).unwrap();
            prop_assert!(r.kappa <= r.oa + 1e-12);
            prop_assert!((0.0..=1.0).contains(&r.oa) && (0.0..=1.0).contains(&r.aa));
            prop_assert!((-1.0..=1.0).contains(&r.kappa));
        }
    }
}
