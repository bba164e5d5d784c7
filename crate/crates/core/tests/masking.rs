use evctx_core::autograd::Tape;
use evctx_core::pretrain::{info_nce, mask_pred_loss, max_discrepancy_start, max_mask_size, sample_mask_uniform, DistractorQueue};
use evctx_core::rng::rng_from_seed;
use evctx_core::{Error, Tensor};
use proptest::prelude::*;

fn unit(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| x / n).collect()
}

fn assert_rows_close(got: Vec<Vec<f64>>, expect: Vec<Vec<f64>>) {
    assert_eq!(got.len(), expect.len());
    for (g, e) in got.iter().zip(&expect) {
        assert!(g.iter().zip(e).all(|(a, b)| (a - b).abs() < 1e-14), "{got:?} vs {expect:?}");
    }
}

fn row(v: &[f64]) -> Tensor<f64> {
    Tensor::new(vec![1, v.len()], unit(v)).unwrap()
}

#[test]
fn queue_evicts_oldest_first() {
    let mut q = DistractorQueue::<f64>::new(3, 2);
    for i in 1..=5 {
        q.push(&row(&[i as f64, 1.0])).unwrap();
    }
    assert_eq!(q.len(), 3);
    let kept: Vec<Vec<f64>> = q.iter().map(<[f64]>::to_vec).collect();
    let expect: Vec<Vec<f64>> = (3..=5).map(|i| unit(&[i as f64, 1.0])).collect();
    assert_rows_close(kept, expect);
    assert_eq!(q.to_tensor().unwrap().shape(), &[3, 2]);
}

#[test]
fn queue_push_of_a_batch_keeps_row_order() {
    let mut q = DistractorQueue::<f64>::new(2, 2);
    let batch = Tensor::from_f64_rows(&[unit(&[1.0, 0.0]), unit(&[0.0, 1.0]), unit(&[1.0, 1.0])]).unwrap();
    q.push(&batch).unwrap();
    let kept: Vec<Vec<f64>> = q.iter().map(<[f64]>::to_vec).collect();
    assert_rows_close(kept, vec![unit(&[0.0, 1.0]), unit(&[1.0, 1.0])]);
}

#[test]
fn queue_rejects_wrong_width_and_non_unit_rows() {
    let mut q = DistractorQueue::<f64>::new(4, 3);
    assert!(matches!(q.push(&row(&[1.0, 0.0])), Err(Error::Shape { .. })));
    let big = Tensor::new(vec![1, 3], vec![2.0, 0.0, 0.0]).unwrap();
    assert!(matches!(q.push(&big), Err(Error::NotUnitNorm { .. })));
    assert!(q.is_empty());
    let mut none = DistractorQueue::<f64>::new(0, 3);
    none.push(&row(&[1.0, 0.0, 0.0])).unwrap();
    assert!(none.to_tensor().is_none());
}

#[test]
fn mask_loss_without_distractors_is_zero() {
    let mut tape = Tape::<f64>::new();
    let a = tape.constant(row(&[1.0, 2.0]));
    let b = tape.constant(row(&[-1.0, 0.5]));
    let l = mask_pred_loss(&mut tape, a, b, &DistractorQueue::new(4, 2), 0.1).unwrap();
    assert_eq!(tape.value(l).item(), 0.0);
}

#[test]
fn mask_loss_prefers_matching_prediction() {
    let mut q = DistractorQueue::<f64>::new(4, 2);
    q.push(&row(&[0.0, 1.0])).unwrap();
    q.push(&row(&[-1.0, 0.2])).unwrap();
    let target = row(&[1.0, 0.1]);
    let loss = |pred: Tensor<f64>| {
        let mut tape = Tape::<f64>::new();
        let (a, b) = (tape.constant(pred), tape.constant(target.clone()));
        let l = mask_pred_loss(&mut tape, a, b, &q, 0.1).unwrap();
        tape.value(l).item()
    };
    assert!(loss(target.clone()) < loss(row(&[0.0, 1.0])));
}

#[test]
fn losses_reject_bad_inputs() {
    let mut tape = Tape::<f64>::new();
    let a = tape.constant(row(&[1.0, 0.0]));
    let b = tape.constant(row(&[0.0, 1.0]));
    assert!(matches!(info_nce(&mut tape, a, b, 0.2), Err(Error::InvalidArgument(_))));
    let big = tape.constant(Tensor::new(vec![1, 2], vec![3.0, 0.0]).unwrap());
    let q = DistractorQueue::new(2, 2);
    assert!(matches!(mask_pred_loss(&mut tape, big, b, &q, 0.1), Err(Error::NotUnitNorm { .. })));
    assert!(mask_pred_loss(&mut tape, a, b, &q, 0.0).is_err());
}

#[test]
fn info_nce_is_symmetric_in_its_views() {
    let za = Tensor::from_f64_rows(&[unit(&[1.0, 0.3]), unit(&[-0.2, 1.0]), unit(&[0.5, -1.0])]).unwrap();
    let zb = Tensor::from_f64_rows(&[unit(&[0.9, 0.1]), unit(&[0.1, 1.0]), unit(&[1.0, -1.0])]).unwrap();
    let value = |x: &Tensor<f64>, y: &Tensor<f64>| {
        let mut tape = Tape::<f64>::new();
        let (a, b) = (tape.constant(x.clone()), tape.constant(y.clone()));
        let l = info_nce(&mut tape, a, b, 0.2).unwrap();
        tape.value(l).item()
    };
    assert!((value(&za, &zb) - value(&zb, &za)).abs() < 1e-12);
}

#[test]
fn max_discrepancy_breaks_ties_to_the_left() {
    assert_eq!(max_discrepancy_start(&[1.0, 1.0, 1.0, 1.0], 2).unwrap(), 1);
    assert_eq!(max_discrepancy_start(&[0.0, 1.0, 0.0, 1.0], 1).unwrap(), 2);
    assert!(max_discrepancy_start(&[1.0, 2.0], 3).is_err());
    assert!(max_discrepancy_start(&[1.0, 2.0], 0).is_err());
}

#[test]
fn max_mask_size_floors_and_clamps() {
    assert_eq!(max_mask_size(5, 0.6), 3);
    assert_eq!(max_mask_size(5, 0.2), 1);
    assert_eq!(max_mask_size(5, 0.01), 1);
    assert_eq!(max_mask_size(5, 2.0), 5);
    assert_eq!(max_mask_size(10, 0.3), 3);
}

proptest! {
    #[test]
    fn sampled_plans_fit_the_window(n in 2usize..12, alpha in 0.05f64..1.0, seed: u64) {
        let mut rng = rng_from_seed(seed);
        for _ in 0..20 {
            let p = sample_mask_uniform(n, alpha, &mut rng).unwrap();
            prop_assert!(p.size() >= 1 && p.size() <= max_mask_size(n, alpha));
            prop_assert!(p.start() >= 1 && p.end() <= n);
            prop_assert_eq!(p.positions().count(), p.size());
        }
    }

    #[test]
    fn max_discrepancy_matches_exhaustive_search(d in prop::collection::vec(0.0f64..1.0, 2..10), m in 1usize..4) {
        prop_assume!(m <= d.len());
        let s = max_discrepancy_start(&d, m).unwrap();
        let sums: Vec<f64> = (0..=d.len() - m).map(|i| d[i..i + m].iter().sum()).collect();
        let best = sums.iter().copied().fold(f64::MIN, f64::max);
        prop_assert_eq!(sums[s - 1], best);
        prop_assert!(sums[..s - 1].iter().all(|&x| x < best));
    }
}
