//! Event-level mask prediction: mask samplers, the distractor queue and the
//! masked-prediction losses.

use std::collections::VecDeque;

use rand::Rng as _;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::txe::TxE;
use crate::rng::Rng;
use crate::tensor::{dot, Scalar, Tensor};

/// Contiguous mask over positions `start..=start + size - 1` (1-based) of an
/// `N`-token window.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct MaskPlan {
    size: usize,
    start: usize,
}

impl MaskPlan {
    pub fn new(n: usize, size: usize, start: usize) -> Result<Self> {
        let plan = Self { size, start };
        plan.check_len(n)?;
        Ok(plan)
    }

    pub fn size(&self) -> usize {
        self.size
    }

    /// 1-based start position.
    pub fn start(&self) -> usize {
        self.start
    }

    /// 1-based last masked position.
    pub fn end(&self) -> usize {
        self.start + self.size - 1
    }

    pub fn contains(&self, pos: usize) -> bool {
        (self.start..=self.end()).contains(&pos)
    }

    pub fn positions(&self) -> impl Iterator<Item = usize> {
        self.start..=self.end()
    }

    pub fn check_len(&self, n: usize) -> Result<()> {
        if self.size == 0 || self.start == 0 || self.end() > n {
            return Err(Error::InvalidArgument(format!(
                "mask of size {} at {} does not fit a window of {n}",
                self.size, self.start
            )));
        }
        Ok(())
    }
}

/// Largest mask size: `max(1, floor(alpha * n))`.
pub fn max_mask_size(n: usize, alpha: f64) -> usize {
    (((alpha * n as f64) + 1e-9).floor() as usize).clamp(1, n)
}

fn check_sampler_args(n: usize, alpha: f64) -> Result<()> {
    if n < 2 {
        return Err(Error::InvalidArgument(format!("window length must be >= 2, got {n}")));
    }
    if !(alpha > 0.0) {
        return Err(Error::InvalidArgument(format!("alpha must be > 0, got {alpha}")));
    }
    Ok(())
}

/// `m` uniform over `1..=max_mask_size(n, alpha)`, then `s` uniform over `1..=n-m+1`.
pub fn sample_mask_uniform(n: usize, alpha: f64, rng: &mut Rng) -> Result<MaskPlan> {
    check_sampler_args(n, alpha)?;
    let m = rng.random_range(1..=max_mask_size(n, alpha));
    let s = rng.random_range(1..=n - m + 1);
    MaskPlan::new(n, m, s)
}

/// Start of the size-`m` window with the largest discrepancy sum; the
/// smallest start wins ties.
pub fn max_discrepancy_start(discrepancies: &[f64], m: usize) -> Result<usize> {
    let n = discrepancies.len();
    if m == 0 || m > n {
        return Err(Error::InvalidArgument(format!("mask size {m} invalid for {n} tokens")));
    }
    let mut best = (f64::NEG_INFINITY, 1);
    for s in 0..=n - m {
        let sum: f64 = discrepancies[s..s + m].iter().sum();
        if sum > best.0 {
            best = (sum, s + 1);
        }
    }
    Ok(best.1)
}

/// `1 - cos(v_hat_i, v_hat'_i)` for every position, where `v_hat'` is the
/// output with only token `i` masked.
pub fn discrepancies<F: Scalar>(tokens: &Tensor<F>, txe: &TxE<F>) -> Result<Vec<f64>> {
    let n = txe.config.seq_len;
    if tokens.rows() != n {
        return Err(Error::shape("discrepancy", tokens.shape(), &[n, txe.config.d_model]));
    }
    let mut stacked = Vec::with_capacity((n + 1) * tokens.numel());
    let mut plans = Vec::with_capacity(n + 1);
    for i in 0..=n {
        stacked.extend_from_slice(tokens.data());
        plans.push(if i == 0 { None } else { Some(MaskPlan::new(n, 1, i)?) });
    }
    let stacked = Tensor::new(vec![(n + 1) * n, tokens.cols()], stacked)?;
    let out = txe.forward_windows(&stacked, &plans)?;
    let d = tokens.cols();
    let rows = |w: usize, p: usize| &out.data()[(w * n + p) * d..(w * n + p + 1) * d];
    (0..n)
        .map(|p| {
            let (a, b) = (rows(0, p), rows(p + 1, p));
            let na = dot(a, a).as_f64().sqrt();
            let nb = dot(b, b).as_f64().sqrt();
            if na < 1e-12 || nb < 1e-12 {
                return Err(Error::ZeroNorm {
                    row: p,
                    norm: na.min(nb),
                });
            }
            let cos = dot(a, b).as_f64() / (na * nb);
            Ok((1.0 - cos).max(0.0))
        })
        .collect()
}

/// Discrepancy of one 1-based position.
pub fn discrepancy<F: Scalar>(tokens: &Tensor<F>, txe: &TxE<F>, i: usize) -> Result<f64> {
    let n = txe.config.seq_len;
    if i == 0 || i > n {
        return Err(Error::InvalidArgument(format!("position {i} outside 1..={n}")));
    }
    Ok(discrepancies(tokens, txe)?[i - 1])
}

/// Mask size as in [`sample_mask_uniform`]; the start maximizes the summed
/// discrepancy of the covered tokens.
pub fn sample_mask_max_discrepancy<F: Scalar>(
    tokens: &Tensor<F>,
    txe: &TxE<F>,
    n: usize,
    alpha: f64,
    rng: &mut Rng,
) -> Result<MaskPlan> {
    check_sampler_args(n, alpha)?;
    let m = rng.random_range(1..=max_mask_size(n, alpha));
    let disc = discrepancies(tokens, txe)?;
    MaskPlan::new(n, m, max_discrepancy_start(&disc, m)?)
}

const PUSH_NORM_TOL: f64 = 1e-3;
const LOSS_NORM_TOL: f64 = 1e-3;

/// Bounded FIFO of unit-norm distractor vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct DistractorQueue<F = f32> {
    capacity: usize,
    dim: usize,
    buf: VecDeque<Vec<F>>,
}

fn row_norm<F: Scalar>(row: &[F]) -> f64 {
    row.iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>().sqrt()
}

fn check_unit_rows<F: Scalar>(t: &Tensor<F>, tol: f64) -> Result<()> {
    for r in 0..t.rows() {
        let norm = row_norm(t.row(r));
        if (norm - 1.0).abs() > tol {
            return Err(Error::NotUnitNorm { row: r, norm });
        }
    }
    Ok(())
}

impl<F: Scalar> DistractorQueue<F> {
    pub fn new(capacity: usize, dim: usize) -> Self {
        Self {
            capacity,
            dim,
            buf: VecDeque::with_capacity(capacity.min(1 << 16)),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.buf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buf.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &[F]> {
        self.buf.iter().map(Vec::as_slice)
    }

    /// Appends rows in order, evicting the oldest entries beyond capacity.
    /// Values are copied, so nothing pushed is attached to a tape.
    pub fn push(&mut self, targets: &Tensor<F>) -> Result<()> {
        if targets.cols() != self.dim {
            return Err(Error::shape("queue_push", targets.shape(), &[self.dim]));
        }
        check_unit_rows(targets, PUSH_NORM_TOL)?;
        if self.capacity == 0 {
            return Ok(());
        }
        for r in 0..targets.rows() {
            let row = targets.row(r);
            let norm = row_norm(row);
            // re-normalize in f64 so stored entries are unit norm to working precision
            let v: Vec<F> = row.iter().map(|&x| F::from_f64(x.as_f64() / norm)).collect();
            if self.buf.len() == self.capacity {
                self.buf.pop_front();
            }
            self.buf.push_back(v);
        }
        Ok(())
    }

    /// Entries stacked oldest first, or `None` when empty.
    pub fn to_tensor(&self) -> Option<Tensor<F>> {
        if self.buf.is_empty() {
            return None;
        }
        let data: Vec<F> = self.buf.iter().flatten().copied().collect();
        Some(Tensor::new(vec![self.buf.len(), self.dim], data).expect("consistent dims"))
    }
}

/// Masked-prediction contrastive loss: the mean over rows `t` of
/// `-log(exp(v_hat_t . v_t / tau) / (exp(v_hat_t . v_t / tau) + sum_i exp(v_hat_t . p_i / tau)))`.
/// Both `v_hat` and `targets` are `M x d` with unit-norm rows.
pub fn mask_pred_loss<F: Scalar>(
    tape: &mut Tape<F>,
    v_hat: Var,
    targets: Var,
    queue: &DistractorQueue<F>,
    tau: f64,
) -> Result<Var> {
    if !(tau > 0.0) {
        return Err(Error::InvalidArgument(format!("temperature must be > 0, got {tau}")));
    }
    let (vh, vt) = (tape.value(v_hat), tape.value(targets));
    if vh.shape() != vt.shape() {
        return Err(Error::shape("mask_pred_loss", vh.shape(), vt.shape()));
    }
    check_unit_rows(vh, LOSS_NORM_TOL)?;
    check_unit_rows(vt, LOSS_NORM_TOL)?;
    let (m, d) = (vh.rows(), vh.cols());
    let inv_tau = F::from_f64(1.0 / tau);
    let pos = tape.row_dot(v_hat, targets)?;
    let logits = match queue.to_tensor() {
        Some(q) => {
            if q.cols() != d {
                return Err(Error::shape("mask_pred_loss", &[m, d], q.shape()));
            }
            let qt = tape.constant(q.transpose());
            let neg = tape.matmul(v_hat, qt)?;
            tape.concat_cols(&[pos, neg])?
        }
        None => pos,
    };
    let logits = tape.scale(logits, inv_tau);
    tape.cross_entropy(logits, &vec![0; m])
}

/// Mean squared Euclidean distance between matching rows.
pub fn mask_pred_l2_loss<F: Scalar>(tape: &mut Tape<F>, v_hat: Var, targets: Var) -> Result<Var> {
    let (vh, vt) = (tape.value(v_hat), tape.value(targets));
    if vh.rows() != vt.rows() {
        return Err(Error::InvalidArgument(format!(
            "{} predictions for {} targets",
            vh.rows(),
            vt.rows()
        )));
    }
    let m = vh.rows();
    let diff = tape.sub(v_hat, targets)?;
    let sq = tape.mul(diff, diff)?;
    let total = tape.sum(sq);
    Ok(tape.scale(total, F::from_f64(1.0 / m as f64)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;

    fn unit(v: &[f64]) -> Vec<f64> {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter().map(|x| x / n).collect()
    }

    fn loss_of(vhat: &[Vec<f64>], v: &[Vec<f64>], queue: &[Vec<f64>], tau: f64) -> f64 {
        let mut q = DistractorQueue::<f64>::new(queue.len(), vhat[0].len());
        if !queue.is_empty() {
            q.push(&Tensor::from_f64_rows(queue).unwrap()).unwrap();
        }
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::from_f64_rows(vhat).unwrap());
        let b = tape.constant(Tensor::from_f64_rows(v).unwrap());
        let l = mask_pred_loss(&mut tape, a, b, &q, tau).unwrap();
        tape.value(l).item()
    }

    #[test]
    fn mask_size_range() {
        assert_eq!(max_mask_size(5, 0.6), 3);
        assert_eq!(max_mask_size(5, 0.2), 1);
        assert_eq!(max_mask_size(5, 0.1), 1);
        assert_eq!(max_mask_size(5, 0.8), 4);
        assert_eq!(max_mask_size(5, 1.0), 5);
    }

    #[test]
    fn uniform_sampler_respects_bounds() {
        let mut rng = rng_from_seed(3);
        for _ in 0..2000 {
            let p = sample_mask_uniform(5, 0.6, &mut rng).unwrap();
            assert!((1..=3).contains(&p.size()));
            assert!(p.start() >= 1 && p.end() <= 5);
            let p = sample_mask_uniform(5, 0.2, &mut rng).unwrap();
            assert_eq!(p.size(), 1);
        }
        assert!(sample_mask_uniform(5, 0.0, &mut rng).is_err());
        assert!(sample_mask_uniform(5, -1.0, &mut rng).is_err());
        assert!(sample_mask_uniform(1, 0.6, &mut rng).is_err());
    }

    #[test]
    fn start_range_for_size_three() {
        let mut rng = rng_from_seed(9);
        let mut seen = [false; 6];
        for _ in 0..5000 {
            let p = sample_mask_uniform(5, 0.6, &mut rng).unwrap();
            if p.size() == 3 {
                seen[p.start()] = true;
            }
        }
        assert_eq!(seen, [false, true, true, true, false, false]);
    }

    #[test]
    fn max_discrepancy_examples() {
        assert_eq!(max_discrepancy_start(&[0.1, 0.9, 0.2, 0.2, 0.2], 1).unwrap(), 2);
        assert_eq!(max_discrepancy_start(&[0.3; 5], 1).unwrap(), 1);
        assert_eq!(max_discrepancy_start(&[0.3; 5], 3).unwrap(), 1);
        assert_eq!(max_discrepancy_start(&[0.5, 0.1, 0.1, 0.6, 0.5], 2).unwrap(), 4);
        assert!(max_discrepancy_start(&[0.1; 5], 6).is_err());
    }

    #[test]
    fn plan_validation() {
        assert!(MaskPlan::new(5, 3, 3).is_ok());
        assert!(MaskPlan::new(5, 3, 4).is_err());
        assert!(MaskPlan::new(5, 0, 1).is_err());
        assert!(MaskPlan::new(5, 1, 0).is_err());
        let p = MaskPlan::new(5, 2, 2).unwrap();
        assert_eq!(p.positions().collect::<Vec<_>>(), vec![2, 3]);
    }

    #[test]
    fn loss_examples() {
        let e1 = vec![1.0, 0.0, 0.0];
        let e2 = vec![0.0, 1.0, 0.0];
        assert_eq!(loss_of(&[e1.clone()], &[e1.clone()], &[], 0.1), 0.0);

        let l = loss_of(&[e1.clone()], &[e1.clone()], &[e2.clone()], 0.1);
        let expected = (1.0 + (-10.0f64).exp()).ln();
        assert!((l - expected).abs() < 1e-15);
        assert!((l - 4.54e-5).abs() < 1e-7);

        // v_hat . v = v_hat . p = 0.5
        let a = unit(&[1.0, 0.0, 0.0]);
        let v = vec![0.5, (0.75f64).sqrt(), 0.0];
        let p = vec![0.5, 0.0, (0.75f64).sqrt()];
        let l = loss_of(&[a], &[v], &[p], 0.1);
        assert!((l - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn loss_rejects_non_unit_inputs() {
        let q = DistractorQueue::<f64>::new(4, 2);
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::from_f64_rows(&[vec![2.0, 0.0]]).unwrap());
        let b = tape.constant(Tensor::from_f64_rows(&[vec![1.0, 0.0]]).unwrap());
        assert!(matches!(
            mask_pred_loss(&mut tape, a, b, &q, 0.1),
            Err(Error::NotUnitNorm { .. })
        ));
        assert!(mask_pred_loss(&mut tape, b, b, &q, 0.0).is_err());
    }

    #[test]
    fn queue_is_fifo() {
        let mut q = DistractorQueue::<f64>::new(2, 2);
        for row in [[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0]] {
            q.push(&Tensor::from_f64_rows(&[row.to_vec()]).unwrap()).unwrap();
        }
        let entries: Vec<Vec<f64>> = q.iter().map(<[f64]>::to_vec).collect();
        assert_eq!(entries, vec![vec![0.0, 1.0], vec![-1.0, 0.0]]);

        let mut q = DistractorQueue::<f64>::new(2, 2);
        let batch = Tensor::from_f64_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![-1.0, 0.0]]).unwrap();
        q.push(&batch).unwrap();
        let entries: Vec<Vec<f64>> = q.iter().map(<[f64]>::to_vec).collect();
        assert_eq!(entries, vec![vec![0.0, 1.0], vec![-1.0, 0.0]]);
    }

    #[test]
    fn zero_capacity_queue_stays_empty() {
        let mut q = DistractorQueue::<f64>::new(0, 2);
        q.push(&Tensor::from_f64_rows(&[vec![1.0, 0.0]]).unwrap()).unwrap();
        assert!(q.is_empty());
        let e = vec![0.6, 0.8];
        assert_eq!(loss_of(&[e.clone()], &[e.clone()], &[], 0.1), 0.0);
    }

    #[test]
    fn queue_rejects_non_unit() {
        let mut q = DistractorQueue::<f64>::new(2, 2);
        assert!(q.push(&Tensor::from_f64_rows(&[vec![1.0, 1.0]]).unwrap()).is_err());
        assert!(q.push(&Tensor::from_f64_rows(&[vec![1.0, 0.0, 0.0]]).unwrap()).is_err());
    }

    #[test]
    fn l2_loss_examples() {
        let run = |a: Vec<f64>, b: Vec<f64>| {
            let mut tape = Tape::<f64>::new();
            let x = tape.constant(Tensor::from_f64_rows(&[a]).unwrap());
            let y = tape.constant(Tensor::from_f64_rows(&[b]).unwrap());
            let l = mask_pred_l2_loss(&mut tape, x, y).unwrap();
            tape.value(l).item()
        };
        assert_eq!(run(vec![0.6, 0.8], vec![0.6, 0.8]), 0.0);
        assert!((run(vec![1.0, 0.0, 0.0], vec![0.0, 0.0, 1.0]) - 2.0).abs() < 1e-15);
        assert!((run(vec![0.6, 0.8], vec![-0.6, -0.8]) - 4.0).abs() < 1e-12);

        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_f64_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap());
        let y = tape.constant(Tensor::from_f64_rows(&[vec![1.0, 0.0]]).unwrap());
        assert!(mask_pred_l2_loss(&mut tape, x, y).is_err());
    }
}
