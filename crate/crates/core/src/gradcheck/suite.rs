//! Finite-difference checks of every differentiable tape op, the losses, the
//! backbone and a composed one-layer contextualizer.

use rand_distr::{Distribution, StandardNormal, Uniform};

use crate::autograd::{Tape, Var};
use crate::error::Result;
use crate::gradcheck::{grad_check, GradCheckReport};
use crate::nn::{Backbone, BackboneConfig, Mode, TxE, TxEConfig};
use crate::pretrain::{info_nce, mask_pred_l2_loss, mask_pred_loss, DistractorQueue, MaskPlan};
use crate::rng::{derive_seed, rng_from_seed, Rng};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteEntry {
    pub name: String,
    pub seed: u64,
    pub report: GradCheckReport,
}

type Case = Box<dyn Fn(&mut Tape<f64>, Var) -> Result<Var>>;

fn randn(shape: &[usize], rng: &mut Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| StandardNormal.sample(rng)).collect()).expect("shape matches data")
}

fn positive(shape: &[usize], rng: &mut Rng) -> Tensor<f64> {
    let u = Uniform::new(0.5, 2.0).expect("valid range");
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| u.sample(rng)).collect()).expect("shape matches data")
}

fn unit_rows(mut t: Tensor<f64>) -> Tensor<f64> {
    let d = t.cols();
    for row in t.data_mut().chunks_mut(d) {
        let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        row.iter_mut().for_each(|x| *x /= n);
    }
    t
}

/// Reduces any node to a scalar with fixed random weights so every output
/// element contributes a distinct amount.
fn project(tape: &mut Tape<f64>, out: Var, w: &Tensor<f64>) -> Result<Var> {
    let wv = tape.constant(w.clone());
    let p = tape.mul(out, wv)?;
    Ok(tape.sum(p))
}

fn weights_like(shape: &[usize], rng: &mut Rng) -> Tensor<f64> {
    randn(shape, rng)
}

const TXE_WIDTH: usize = 16;

fn small_txe_config() -> TxEConfig {
    TxEConfig {
        n_layers: 1,
        n_heads: 2,
        d_model: TXE_WIDTH,
        d_ff: 24,
        seq_len: 3,
        dropout: 0.0,
        ln_eps: 1e-5,
    }
}

fn op_cases(rng: &mut Rng) -> Vec<(String, Tensor<f64>, Case)> {
    let mut cases: Vec<(String, Tensor<f64>, Case)> = Vec::new();
    let (m, n, k) = (3, 4, 5);

    macro_rules! unary {
        ($name:expr, $x:expr, $out_shape:expr, |$t:ident, $v:ident| $body:expr) => {{
            let w = weights_like(&$out_shape, rng);
            let case: Case = Box::new(move |$t: &mut Tape<f64>, $v: Var| {
                let out = $body?;
                project($t, out, &w)
            });
            cases.push(($name.to_string(), $x, case));
        }};
    }

    let b = randn(&[n, k], rng);
    unary!("matmul.lhs", randn(&[m, n], rng), [m, k], |t, x| {
        let c = t.constant(b.clone());
        t.matmul(x, c)
    });
    let a = randn(&[m, n], rng);
    unary!("matmul.rhs", randn(&[n, k], rng), [m, k], |t, x| {
        let c = t.constant(a.clone());
        t.matmul(c, x)
    });
    for (name, which) in [("add", 0u8), ("sub.lhs", 1), ("sub.rhs", 2), ("mul", 3)] {
        let other = randn(&[m, n], rng);
        unary!(name, randn(&[m, n], rng), [m, n], |t, x| {
            let c = t.constant(other.clone());
            match which {
                0 => t.add(x, c),
                1 => t.sub(x, c),
                2 => t.sub(c, x),
                _ => t.mul(x, c),
            }
        });
    }
    let bias = randn(&[n], rng);
    unary!("add_row.matrix", randn(&[m, n], rng), [m, n], |t, x| {
        let c = t.constant(bias.clone());
        t.add_row(x, c)
    });
    let mat = randn(&[m, n], rng);
    unary!("add_row.bias", randn(&[n], rng), [m, n], |t, x| {
        let c = t.constant(mat.clone());
        t.add_row(c, x)
    });
    unary!("scale", randn(&[m, n], rng), [m, n], |t, x| Ok::<_, crate::Error>(t.scale(x, -1.7)));
    unary!("add_scalar", randn(&[m, n], rng), [m, n], |t, x| Ok::<_, crate::Error>(t.add_scalar(x, 0.3)));
    unary!("sum", randn(&[m, n], rng), [1], |t, x| {
        let s = t.sum(x);
        t.reshape(s, &[1])
    });
    unary!("mean", randn(&[m, n], rng), [1], |t, x| {
        let s = t.mean(x);
        t.reshape(s, &[1])
    });
    unary!("exp", randn(&[m, n], rng), [m, n], |t, x| Ok::<_, crate::Error>(t.exp(x)));
    unary!("ln", positive(&[m, n], rng), [m, n], |t, x| t.ln(x));
    unary!("gelu", randn(&[m, n], rng), [m, n], |t, x| Ok::<_, crate::Error>(t.gelu(x)));
    unary!("tanh", randn(&[m, n], rng), [m, n], |t, x| Ok::<_, crate::Error>(t.tanh(x)));
    unary!("transpose", randn(&[m, n], rng), [n, m], |t, x| Ok::<_, crate::Error>(t.transpose(x)));
    unary!("reshape", randn(&[m, n], rng), [2, 6], |t, x| t.reshape(x, &[2, 6]));
    unary!("softmax.rows", randn(&[m, n], rng), [m, n], |t, x| t.softmax(x, 1));
    unary!("softmax.cols", randn(&[m, n], rng), [m, n], |t, x| t.softmax(x, 0));
    let (gain, beta) = (positive(&[n], rng), randn(&[n], rng));
    unary!("layer_norm.x", randn(&[m, n], rng), [m, n], |t, x| {
        let g = t.constant(gain.clone());
        let b = t.constant(beta.clone());
        t.layer_norm(x, g, b, 1e-5)
    });
    let (xs, beta2) = (randn(&[m, n], rng), randn(&[n], rng));
    unary!("layer_norm.gain", positive(&[n], rng), [m, n], |t, g| {
        let x = t.constant(xs.clone());
        let b = t.constant(beta2.clone());
        t.layer_norm(x, g, b, 1e-5)
    });
    let (xs2, gain2) = (randn(&[m, n], rng), positive(&[n], rng));
    unary!("layer_norm.bias", randn(&[n], rng), [m, n], |t, b| {
        let x = t.constant(xs2.clone());
        let g = t.constant(gain2.clone());
        t.layer_norm(x, g, b, 1e-5)
    });
    unary!("l2_normalize", randn(&[m, n], rng), [m, n], |t, x| t.l2_normalize(x));
    unary!("slice_cols", randn(&[m, n], rng), [m, 2], |t, x| t.slice_cols(x, 1, 3));
    let right = randn(&[m, 2], rng);
    unary!("concat_cols", randn(&[m, n], rng), [m, n + 2], |t, x| {
        let c = t.constant(right.clone());
        t.concat_cols(&[x, c])
    });
    let below = randn(&[2, n], rng);
    unary!("concat_rows", randn(&[m, n], rng), [2 * m + 2, n], |t, x| {
        let c = t.constant(below.clone());
        t.concat_rows(&[x, c, x])
    });
    unary!("gather_rows", randn(&[m, n], rng), [4, n], |t, x| t.gather_rows(x, &[2, 0, 2, 1]));
    let token = randn(&[n], rng);
    unary!("mask_rows.input", randn(&[m, n], rng), [m, n], |t, x| {
        let c = t.constant(token.clone());
        t.mask_rows(x, c, &[false, true, false])
    });
    let input = randn(&[m, n], rng);
    unary!("mask_rows.token", randn(&[n], rng), [m, n], |t, x| {
        let c = t.constant(input.clone());
        t.mask_rows(c, x, &[true, false, true])
    });
    let other = randn(&[m, n], rng);
    unary!("row_dot", randn(&[m, n], rng), [m, 1], |t, x| {
        let c = t.constant(other.clone());
        t.row_dot(x, c)
    });
    unary!("block_mean_rows", randn(&[4, n], rng), [2, n], |t, x| t.block_mean_rows(x, 2));
    // two windows of three rows, two heads of width two
    for (idx, name) in ["attention.query", "attention.key", "attention.value"].iter().enumerate() {
        let fixed = [randn(&[6, n], rng), randn(&[6, n], rng)];
        unary!(*name, randn(&[6, n], rng), [6, n], |t, x| {
            let c0 = t.constant(fixed[0].clone());
            let c1 = t.constant(fixed[1].clone());
            match idx {
                0 => t.attention(x, c0, c1, 2, 3),
                1 => t.attention(c0, x, c1, 2, 3),
                _ => t.attention(c0, c1, x, 2, 3),
            }
        });
    }
    let targets = vec![1usize, 3, 0];
    unary!("cross_entropy", randn(&[m, n], rng), [1], |t, x| {
        let l = t.cross_entropy(x, &targets)?;
        t.reshape(l, &[1])
    });
    let keep: Vec<bool> = (0..m * n).map(|i| i % 3 != 1).collect();
    unary!("dropout", randn(&[m, n], rng), [m, n], |t, x| t.dropout(x, &keep, 0.25));

    let d = 6;
    let tgt = unit_rows(randn(&[2, d], rng));
    let mut queue = DistractorQueue::new(5, d);
    queue.push(&unit_rows(randn(&[5, d], rng))).expect("unit rows");
    let case: Case = Box::new(move |t, x| {
        let v = t.l2_normalize(x)?;
        let c = t.constant(tgt.clone());
        mask_pred_loss(t, v, c, &queue, 0.1)
    });
    cases.push(("mask_pred_loss".into(), randn(&[2, d], rng), case));
    let tgt = unit_rows(randn(&[2, d], rng));
    let case: Case = Box::new(move |t, x| {
        let v = t.l2_normalize(x)?;
        let c = t.constant(tgt.clone());
        mask_pred_l2_loss(t, v, c)
    });
    cases.push(("mask_pred_l2_loss".into(), randn(&[2, d], rng), case));
    let zb = unit_rows(randn(&[4, d], rng));
    let case: Case = Box::new(move |t, x| {
        let za = t.l2_normalize(x)?;
        let b = t.constant(zb.clone());
        info_nce(t, za, b, 0.2)
    });
    cases.push(("info_nce".into(), randn(&[4, d], rng), case));
    cases
}

/// Runs every check for one seed at the given step and tolerance.
pub fn run_suite(seed: u64, step: f64, tol: f64) -> Result<Vec<SuiteEntry>> {
    let mut rng = rng_from_seed(derive_seed(seed, "gradcheck"));
    let mut out = Vec::new();
    for (name, x, f) in op_cases(&mut rng) {
        let report = grad_check(f, &x, step, tol)?;
        out.push(SuiteEntry { name, seed, report });
    }

    let bb_cfg = BackboneConfig {
        d_in: 3,
        window: 2,
        hidden: 5,
        d_model: 4,
    };
    let backbone = Backbone::<f64>::init(bb_cfg, derive_seed(seed, "gradcheck-backbone"))?;
    let clips = randn(&[4, 3], &mut rng);
    let w = randn(&[2, 4], &mut rng);
    for id in backbone.params.ids() {
        let report = grad_check(
            |tape, x| {
                let bound = backbone.params.bind_replacing(tape, id, x);
                let c = tape.constant(clips.clone());
                let e = backbone.forward(tape, &bound, c)?;
                project(tape, e, &w)
            },
            backbone.params.get(id),
            step,
            tol,
        )?;
        out.push(SuiteEntry {
            name: format!("backbone/{}", backbone.params.name(id)),
            seed,
            report,
        });
    }

    let txe = TxE::<f64>::init(small_txe_config(), derive_seed(seed, "gradcheck-txe"))?;
    let tokens = unit_rows(randn(&[3, TXE_WIDTH], &mut rng));
    let mut queue = DistractorQueue::new(4, TXE_WIDTH);
    queue.push(&unit_rows(randn(&[4, TXE_WIDTH], &mut rng)))?;
    let plan = [Some(MaskPlan::new(3, 1, 2)?)];
    let mask = txe.mask_rows_for(&plan)?;
    let composed = |tape: &mut Tape<f64>, bound: &crate::nn::Bound, tok: Var| -> Result<Var> {
        let o = txe.forward(tape, bound, tok, Some(&mask), Mode::Eval)?;
        let picked = tape.gather_rows(o, &[1])?;
        let v_hat = tape.l2_normalize(picked)?;
        let tgt = tape.constant(Tensor::new(vec![1, TXE_WIDTH], tokens.row(1).to_vec())?);
        mask_pred_loss(tape, v_hat, tgt, &queue, 0.5)
    };
    for id in txe.params.ids() {
        let report = grad_check(
            |tape, x| {
                let bound = txe.params.bind_replacing(tape, id, x);
                let tok = tape.constant(tokens.clone());
                composed(tape, &bound, tok)
            },
            txe.params.get(id),
            step,
            tol,
        )?;
        out.push(SuiteEntry {
            name: format!("txe+mask_loss/{}", txe.params.name(id)),
            seed,
            report,
        });
    }
    // unmasked input rows feed the loss through attention
    let report = grad_check(
        |tape, x| {
            let bound = txe.params.bind(tape, false);
            composed(tape, &bound, x)
        },
        &tokens,
        step,
        tol,
    )?;
    out.push(SuiteEntry {
        name: "txe+mask_loss/tokens".into(),
        seed,
        report,
    });
    Ok(out)
}
