//! Central finite differences against every backward rule, end to end
//! through both network architectures. Three losses cover the full op set:
//! next-token cross-entropy (decoder trunk, causal attention, log-prob
//! gather), a clipped-ratio update with a squared value penalty (exp, clamp,
//! min, square), and binary cross-entropy through the encoder (bidirectional
//! attention, mean pooling).

use claimrl::neural::{
    LmConfig, ParamSet, PolicyModel, RewardNet, RmConfig, Scalar, Tape, Tensor, Var,
};

const TOL_F64: f64 = 1e-6;
const TOL_F32: f64 = 1e-3;

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / f64::max(1.0, b.abs())
}

fn toy_lm() -> LmConfig {
    LmConfig {
        vocab_size: 24,
        context_length: 8,
        layers: 2,
        heads: 2,
        model_dim: 8,
        feedforward_dim: 16,
        init_seed: 11,
    }
}

fn toy_rm() -> RmConfig {
    RmConfig {
        vocab_size: 24,
        context_length: 8,
        layers: 2,
        heads: 2,
        model_dim: 8,
        feedforward_dim: 16,
        token_cap: 8,
        init_seed: 13,
    }
}

/// Uniform view over both model types so one harness sweeps either.
trait Net<T: Scalar>: Clone {
    fn params(&self) -> &ParamSet<T>;
    fn params_mut(&mut self) -> &mut ParamSet<T>;
    fn vars(&self, tape: &mut Tape<T>) -> Vec<Var>;
}

impl<T: Scalar> Net<T> for PolicyModel<T> {
    fn params(&self) -> &ParamSet<T> {
        &self.params
    }
    fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }
    fn vars(&self, tape: &mut Tape<T>) -> Vec<Var> {
        self.tape_vars(tape)
    }
}

impl<T: Scalar> Net<T> for RewardNet<T> {
    fn params(&self) -> &ParamSet<T> {
        &self.params
    }
    fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }
    fn vars(&self, tape: &mut Tape<T>) -> Vec<Var> {
        self.tape_vars(tape)
    }
}

fn col<T: Scalar>(xs: &[f64]) -> Tensor<T> {
    Tensor::from_vec(&[xs.len(), 1], xs.iter().map(|&x| T::from_f64(x)).collect())
}

fn lm_loss<T: Scalar>(tape: &mut Tape<T>, vars: &[Var], model: &PolicyModel<T>) -> Var {
    let windows: [&[u32]; 2] = [&[1, 7, 3, 19, 2, 4], &[5, 5, 23, 0, 9]];
    let mut gathered = Vec::new();
    for w in windows {
        let (logits, _values) = model.forward_tape(tape, vars, w).unwrap();
        let preds: Vec<usize> = (0..w.len() - 1).collect();
        let pred_logits = tape.select_rows(logits, &preds).unwrap();
        gathered.push(tape.gather_log_probs(pred_logits, &w[1..]).unwrap());
    }
    let all = tape.concat_rows(&gathered).unwrap();
    let mean = tape.mean_all(all).unwrap();
    tape.scale(mean, T::from_f64(-1.0)).unwrap()
}

/// Clipped-ratio surrogate plus squared value error, with fixed stand-ins
/// for old log-probs, advantages, and returns. The constants are chosen so
/// some ratios clip and some do not, keeping every ratio well clear of the
/// clamp kinks relative to the finite-difference step.
fn clipped_update_loss<T: Scalar>(tape: &mut Tape<T>, vars: &[Var], model: &PolicyModel<T>) -> Var {
    let full: &[u32] = &[3, 14, 8, 1, 21, 6, 2];
    let prompt_len = 3;
    let resp_len = full.len() - prompt_len;
    let rows: Vec<usize> = (prompt_len - 1..prompt_len - 1 + resp_len).collect();
    let (logits, values) = model.forward_tape(tape, vars, full).unwrap();
    let resp_logits = tape.select_rows(logits, &rows).unwrap();
    let new_lp = tape.gather_log_probs(resp_logits, &full[prompt_len..]).unwrap();
    let old = tape.constant(col(&[-3.31, -2.97, -3.60, -2.20]));
    let adv = tape.constant(col(&[0.9, -1.4, 0.3, 1.8]));
    let ret = tape.constant(col(&[0.5, 0.4, -0.2, 1.0]));
    let diff = tape.sub(new_lp, old).unwrap();
    let ratio = tape.exp(diff).unwrap();
    let clipped = tape.clamp(ratio, T::from_f64(0.8), T::from_f64(1.2)).unwrap();
    let unclipped_term = tape.mul(ratio, adv).unwrap();
    let clipped_term = tape.mul(clipped, adv).unwrap();
    let surrogate = tape.min_elem(unclipped_term, clipped_term).unwrap();
    let surrogate_mean = tape.mean_all(surrogate).unwrap();
    let value_rows = tape.select_rows(values, &rows).unwrap();
    let value_err = tape.sub(value_rows, ret).unwrap();
    let value_sq = tape.square(value_err).unwrap();
    let value_sum = tape.sum_all(value_sq).unwrap();
    let neg_surrogate = tape.scale(surrogate_mean, T::from_f64(-1.0)).unwrap();
    let value_term = tape.scale(value_sum, T::from_f64(0.1)).unwrap();
    tape.add(neg_surrogate, value_term).unwrap()
}

fn rm_loss<T: Scalar>(tape: &mut Tape<T>, vars: &[Var], net: &RewardNet<T>) -> Var {
    let granted: &[u32] = &[2, 9, 17, 4, 4, 1];
    let pregrant: &[u32] = &[8, 0, 23, 11];
    let lg = net.forward_tape(tape, vars, granted).unwrap();
    let lp = net.forward_tape(tape, vars, pregrant).unwrap();
    let bce_g = tape.bce_with_logits(lg, &[T::ONE]).unwrap();
    let bce_p = tape.bce_with_logits(lp, &[T::ZERO]).unwrap();
    let both = tape.concat_rows(&[bce_g, bce_p]).unwrap();
    tape.mean_all(both).unwrap()
}

fn loss_value<T: Scalar, N: Net<T>>(
    net: &N,
    f: &impl Fn(&mut Tape<T>, &[Var], &N) -> Var,
) -> f64 {
    let mut tape = Tape::new();
    let vars = net.vars(&mut tape);
    let loss = f(&mut tape, &vars, net);
    tape.scalar(loss).to_f64()
}

fn analytic_grads<T: Scalar, N: Net<T>>(
    net: &N,
    f: &impl Fn(&mut Tape<T>, &[Var], &N) -> Var,
) -> Vec<Vec<f64>> {
    let mut work = net.clone();
    work.params_mut().zero_grads();
    let mut tape = Tape::new();
    let vars = work.vars(&mut tape);
    let loss = f(&mut tape, &vars, &work);
    tape.backward(loss, work.params_mut()).unwrap();
    (0..work.params().len())
        .map(|i| {
            let t = work.params().tensor(i);
            match t.grad() {
                Some(g) => g.iter().map(|v| v.to_f64()).collect(),
                None => vec![0.0; t.len()],
            }
        })
        .collect()
}

/// Central-difference gradient of the loss at every parameter element,
/// computed in double precision where the quotient is trustworthy.
fn central_diff<N: Net<f64>>(
    net: &N,
    f: &impl Fn(&mut Tape<f64>, &[Var], &N) -> Var,
    h: f64,
) -> Vec<Vec<f64>> {
    let mut work = net.clone();
    let mut out = Vec::with_capacity(work.params().len());
    for i in 0..work.params().len() {
        let mut per_element = Vec::with_capacity(work.params().tensor(i).len());
        for j in 0..work.params().tensor(i).len() {
            let orig = work.params().tensor(i).data()[j];
            work.params_mut().tensor_mut(i).data_mut()[j] = orig + h;
            let loss_plus = loss_value(&work, f);
            work.params_mut().tensor_mut(i).data_mut()[j] = orig - h;
            let loss_minus = loss_value(&work, f);
            work.params_mut().tensor_mut(i).data_mut()[j] = orig;
            per_element.push((loss_plus - loss_minus) / (2.0 * h));
        }
        out.push(per_element);
    }
    out
}

fn max_rel_err(candidate: &[Vec<f64>], reference: &[Vec<f64>]) -> f64 {
    let mut worst = 0.0f64;
    for (a, b) in candidate.iter().zip(reference) {
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b) {
            worst = worst.max(rel_err(*x, *y));
        }
    }
    worst
}

#[test]
fn backward_matches_finite_differences_at_f64() {
    let policy = PolicyModel::<f64>::new(toy_lm()).unwrap();
    let h = 1e-6;

    let fd = central_diff(&policy, &lm_loss, h);
    let n: usize = fd.iter().map(Vec::len).sum();
    assert!(n > 1000, "swept only {n} elements");
    let err = max_rel_err(&analytic_grads(&policy, &lm_loss), &fd);
    assert!(err < TOL_F64, "lm loss: max rel err {err:.3e}");

    let fd = central_diff(&policy, &clipped_update_loss, h);
    let err = max_rel_err(&analytic_grads(&policy, &clipped_update_loss), &fd);
    assert!(err < TOL_F64, "clipped update loss: max rel err {err:.3e}");

    let rm = RewardNet::<f64>::new(toy_rm()).unwrap();
    let fd = central_diff(&rm, &rm_loss, h);
    let err = max_rel_err(&analytic_grads(&rm, &rm_loss), &fd);
    assert!(err < TOL_F64, "bce loss: max rel err {err:.3e}");
}

/// Single-precision backward against the double-precision difference
/// quotient: same seed initializes bitwise-corresponding weights, and the
/// looser bound absorbs f32 forward/backward rounding.
#[test]
fn backward_matches_finite_differences_at_f32() {
    let h = 1e-6;
    let policy64 = PolicyModel::<f64>::new(toy_lm()).unwrap();
    let policy32 = PolicyModel::<f32>::new(toy_lm()).unwrap();

    let fd = central_diff(&policy64, &lm_loss, h);
    let err = max_rel_err(&analytic_grads(&policy32, &lm_loss), &fd);
    assert!(err < TOL_F32, "lm loss: max rel err {err:.3e}");

    let fd = central_diff(&policy64, &clipped_update_loss, h);
    let err = max_rel_err(&analytic_grads(&policy32, &clipped_update_loss), &fd);
    assert!(err < TOL_F32, "clipped update loss: max rel err {err:.3e}");

    let rm64 = RewardNet::<f64>::new(toy_rm()).unwrap();
    let rm32 = RewardNet::<f32>::new(toy_rm()).unwrap();
    let fd = central_diff(&rm64, &rm_loss, h);
    let err = max_rel_err(&analytic_grads(&rm32, &rm_loss), &fd);
    assert!(err < TOL_F32, "bce loss: max rel err {err:.3e}");
}

/// Same seed at both precisions initializes bitwise-corresponding weights,
/// so the analytic gradients must agree to single precision.
#[test]
fn f32_gradients_track_f64_gradients() {
    let p64 = PolicyModel::<f64>::new(toy_lm()).unwrap();
    let p32 = PolicyModel::<f32>::new(toy_lm()).unwrap();
    for i in 0..p64.params.len() {
        for (a, b) in p64.params.tensor(i).data().iter().zip(p32.params.tensor(i).data()) {
            assert_eq!(*a as f32, *b);
        }
    }
    let g64 = analytic_grads(&p64, &lm_loss);
    let g32 = analytic_grads(&p32, &lm_loss);
    let mut worst = 0.0f64;
    for (ti, (a, b)) in g64.iter().zip(&g32).enumerate() {
        for (x, y) in a.iter().zip(b) {
            worst = worst.max(rel_err(*y, *x));
        }
        assert_eq!(a.len(), b.len(), "param {ti} length");
    }
    assert!(worst < TOL_F32, "cross-precision max rel err {worst:.3e}");
}
