use evctx_core::downstream::{accuracy_at_k, macro_recall_at_k, mean_class_accuracy, top_k};
use evctx_core::Tensor;
use proptest::prelude::*;

fn scored(n: usize, c: usize) -> impl Strategy<Value = (Tensor, Vec<usize>)> {
    (
        prop::collection::vec(-5.0f32..5.0, n * c),
        prop::collection::vec(0..c, n),
    )
        .prop_map(move |(d, l)| (Tensor::new(vec![n, c], d).unwrap(), l))
}

fn permute_rows(t: &Tensor, perm: &[usize]) -> Tensor {
    let rows: Vec<Vec<f64>> = perm.iter().map(|&i| t.row(i).iter().map(|&x| x as f64).collect()).collect();
    Tensor::from_f64_rows(&rows).unwrap()
}

proptest! {
    #[test]
    fn metrics_ignore_sample_order((s, l) in scored(12, 5), seed: u64) {
        let mut perm: Vec<usize> = (0..12).collect();
        let mut r = seed;
        for i in (1..12).rev() {
            r = r.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            perm.swap(i, (r >> 33) as usize % (i + 1));
        }
        let (ps, pl) = (permute_rows(&s, &perm), perm.iter().map(|&i| l[i]).collect::<Vec<_>>());
        prop_assert_eq!(accuracy_at_k(&s, &l, 1).unwrap(), accuracy_at_k(&ps, &pl, 1).unwrap());
        prop_assert!((macro_recall_at_k(&s, &l, 2).unwrap() - macro_recall_at_k(&ps, &pl, 2).unwrap()).abs() < 1e-12);
        prop_assert!((mean_class_accuracy(&s, &l).unwrap() - mean_class_accuracy(&ps, &pl).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn metrics_ignore_monotone_rescaling((s, l) in scored(10, 4), a in 0.1f32..4.0, b in -3.0f32..3.0) {
        let t = s.map(|x| a * x + b);
        prop_assert_eq!(accuracy_at_k(&s, &l, 1).unwrap(), accuracy_at_k(&t, &l, 1).unwrap());
        prop_assert_eq!(macro_recall_at_k(&s, &l, 3).unwrap(), macro_recall_at_k(&t, &l, 3).unwrap());
    }

    #[test]
    fn accuracy_grows_with_k((s, l) in scored(10, 6)) {
        let accs: Vec<f64> = (1..=6).map(|k| accuracy_at_k(&s, &l, k).unwrap()).collect();
        prop_assert!(accs.windows(2).all(|w| w[0] <= w[1]));
        prop_assert_eq!(accs[5], 1.0);
    }
}

#[test]
fn top_k_ranks_ties_by_index() {
    assert_eq!(top_k(&[0.5, 0.9, 0.5, 0.9], 3), vec![1, 3, 0]);
}

#[test]
fn macro_recall_weights_classes_equally() {
    // class 0: 3 of 4 correct, class 1: 0 of 1 correct
    let s = Tensor::from_f64_rows(&[
        vec![1.0, 0.0],
        vec![1.0, 0.0],
        vec![1.0, 0.0],
        vec![0.0, 1.0],
        vec![1.0, 0.0],
    ])
    .unwrap();
    let l = [0, 0, 0, 0, 1];
    assert_eq!(accuracy_at_k(&s, &l, 1).unwrap(), 0.6);
    assert_eq!(mean_class_accuracy(&s, &l).unwrap(), 0.375);
}

#[test]
fn absent_classes_are_excluded_from_the_mean() {
    let s = Tensor::from_f64_rows(&[vec![1.0, 0.0, 0.0], vec![0.0, 0.0, 1.0]]).unwrap();
    assert_eq!(macro_recall_at_k(&s, &[0, 2], 1).unwrap(), 1.0);
}

#[test]
fn bad_labels_are_rejected() {
    let s = Tensor::from_f64_rows(&[vec![1.0, 0.0]]).unwrap();
    assert!(accuracy_at_k(&s, &[2], 1).is_err());
    assert!(accuracy_at_k(&s, &[0, 1], 1).is_err());
}
