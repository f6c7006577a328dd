//! Network building blocks recorded on a [`Tape`].

use rand::Rng;

use super::array::Array;
use super::params::{ParamId, ParameterSet};
use super::tape::{Tape, Var};
use crate::corpus::PAD;
use crate::error::{Error, Result};

fn expect_shape(tape: &Tape, v: Var, name: &str, rows: usize, cols: usize) -> Result<()> {
    let found = tape.shape(v);
    if found != [rows, cols] {
        return Err(Error::Shape {
            name: name.to_string(),
            expected: vec![rows, cols],
            found: found.to_vec(),
        });
    }
    Ok(())
}

fn expect_param(ps: &ParameterSet, id: ParamId, rows: usize, cols: usize) -> Result<()> {
    let p = ps.get(id);
    if p.value.shape() != [rows, cols] {
        return Err(Error::Shape {
            name: p.name.clone(),
            expected: vec![rows, cols],
            found: p.value.shape().to_vec(),
        });
    }
    Ok(())
}

/// LSTM weights. Gate blocks are laid out as `[input, forget, output, candidate]`.
#[derive(Clone, Copy, Debug)]
pub struct LstmParams {
    pub wx: ParamId,
    pub wh: ParamId,
    pub b: ParamId,
    pub input: usize,
    pub hidden: usize,
}

impl LstmParams {
    pub fn register<R: Rng>(
        ps: &mut ParameterSet,
        prefix: &str,
        input: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(LstmParams {
            wx: ps.uniform(format!("{prefix}.wx"), input, 4 * hidden, rng)?,
            wh: ps.uniform(format!("{prefix}.wh"), hidden, 4 * hidden, rng)?,
            b: ps.uniform(format!("{prefix}.b"), 1, 4 * hidden, rng)?,
            input,
            hidden,
        })
    }

    fn validate(&self, ps: &ParameterSet) -> Result<()> {
        expect_param(ps, self.wx, self.input, 4 * self.hidden)?;
        expect_param(ps, self.wh, self.hidden, 4 * self.hidden)?;
        expect_param(ps, self.b, 1, 4 * self.hidden)
    }
}

/// Hidden and cell state of an LSTM.
#[derive(Clone, Copy, Debug)]
pub struct LstmState {
    pub h: Var,
    pub c: Var,
}

impl LstmState {
    pub fn zeros(tape: &mut Tape, hidden: usize) -> Self {
        let h = tape.constant(Array::zeros(1, hidden));
        let c = tape.constant(Array::zeros(1, hidden));
        LstmState { h, c }
    }
}

/// Gate nonlinearities given pre-activations that already include the input
/// projection and bias.
fn lstm_cell(tape: &mut Tape, p: &LstmParams, pre: Var, prev: LstmState) -> LstmState {
    let wh = tape.param(p.wh);
    let rec = tape.matmul(prev.h, wh);
    let gates = tape.add(pre, rec);
    let d = p.hidden;
    let i = tape.slice_cols(gates, 0, d);
    let f = tape.slice_cols(gates, d, d);
    let o = tape.slice_cols(gates, 2 * d, d);
    let g = tape.slice_cols(gates, 3 * d, d);
    let i = tape.sigmoid(i);
    let f = tape.sigmoid(f);
    let o = tape.sigmoid(o);
    let g = tape.tanh(g);
    let keep = tape.mul(f, prev.c);
    let write = tape.mul(i, g);
    let c = tape.add(keep, write);
    let tc = tape.tanh(c);
    let h = tape.mul(o, tc);
    LstmState { h, c }
}

/// One LSTM step for a `1 x input` row.
pub fn lstm_step(tape: &mut Tape, p: &LstmParams, x: Var, prev: LstmState) -> Result<LstmState> {
    p.validate(tape.params())?;
    expect_shape(tape, x, "lstm input", 1, p.input)?;
    expect_shape(tape, prev.h, "lstm hidden state", 1, p.hidden)?;
    expect_shape(tape, prev.c, "lstm cell state", 1, p.hidden)?;
    let wx = tape.param(p.wx);
    let b = tape.param(p.b);
    let xw = tape.matmul(x, wx);
    let pre = tape.add(xw, b);
    Ok(lstm_cell(tape, p, pre, prev))
}

/// Runs an LSTM over the rows of `xs` (`T x input`). Returns the hidden state
/// for every position in positional order and the final state. When
/// `reverse` is set the sequence is consumed from the last row to the first.
pub fn lstm_sequence(
    tape: &mut Tape,
    p: &LstmParams,
    xs: Var,
    init: Option<LstmState>,
    reverse: bool,
) -> Result<(Vec<Var>, LstmState)> {
    p.validate(tape.params())?;
    let [t_len, cols] = tape.shape(xs);
    if t_len == 0 {
        return Err(Error::EmptyUtterance("lstm input sequence"));
    }
    if cols != p.input {
        return Err(Error::Shape {
            name: "lstm input".into(),
            expected: vec![t_len, p.input],
            found: vec![t_len, cols],
        });
    }
    let wx = tape.param(p.wx);
    let b = tape.param(p.b);
    let proj = tape.matmul(xs, wx);
    let proj = tape.add_row(proj, b);
    let mut state = match init {
        Some(s) => s,
        None => LstmState::zeros(tape, p.hidden),
    };
    let mut states = vec![state.h; t_len];
    let order: Vec<usize> = if reverse {
        (0..t_len).rev().collect()
    } else {
        (0..t_len).collect()
    };
    for t in order {
        let pre = tape.row(proj, t);
        state = lstm_cell(tape, p, pre, state);
        states[t] = state.h;
    }
    Ok((states, state))
}

/// Bi-directional encoding: row `i` of the result is
/// `[forward state at i ; backward state at i]`, shape `T x 2d`.
pub fn bilstm(tape: &mut Tape, fwd: &LstmParams, bwd: &LstmParams, xs: Var) -> Result<Var> {
    let (f, _) = lstm_sequence(tape, fwd, xs, None, false)?;
    let (b, _) = lstm_sequence(tape, bwd, xs, None, true)?;
    let f = tape.stack_rows(&f);
    let b = tape.stack_rows(&b);
    Ok(tape.concat_cols(&[f, b]))
}

/// Feed-forward attention scorer `q(state, key) = v . tanh(Ws state + Wk key + b)`.
#[derive(Clone, Copy, Debug)]
pub struct ScorerParams {
    pub ws: ParamId,
    pub wk: ParamId,
    pub b: ParamId,
    pub v: ParamId,
    pub state_dim: usize,
    pub key_dim: usize,
    pub hidden: usize,
}

impl ScorerParams {
    pub fn register<R: Rng>(
        ps: &mut ParameterSet,
        prefix: &str,
        state_dim: usize,
        key_dim: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(ScorerParams {
            ws: ps.uniform(format!("{prefix}.ws"), state_dim, hidden, rng)?,
            wk: ps.uniform(format!("{prefix}.wk"), key_dim, hidden, rng)?,
            b: ps.uniform(format!("{prefix}.b"), 1, hidden, rng)?,
            v: ps.uniform(format!("{prefix}.v"), hidden, 1, rng)?,
            state_dim,
            key_dim,
            hidden,
        })
    }

    /// `keys (T x key_dim) -> T x hidden`. Independent of the state, so it can
    /// be computed once per encoded sequence.
    pub fn project_keys(&self, tape: &mut Tape, keys: Var) -> Result<Var> {
        expect_param(tape.params(), self.wk, self.key_dim, self.hidden)?;
        let [t, k] = tape.shape(keys);
        if k != self.key_dim {
            return Err(Error::Shape {
                name: "attention keys".into(),
                expected: vec![t, self.key_dim],
                found: vec![t, k],
            });
        }
        let wk = tape.param(self.wk);
        Ok(tape.matmul(keys, wk))
    }

    /// Scores of `state` against pre-projected keys, as a `1 x T` row.
    pub fn scores(&self, tape: &mut Tape, state: Var, projected: Var) -> Result<Var> {
        let ps = tape.params();
        expect_param(ps, self.ws, self.state_dim, self.hidden)?;
        expect_param(ps, self.b, 1, self.hidden)?;
        expect_param(ps, self.v, self.hidden, 1)?;
        expect_shape(tape, state, "attention state", 1, self.state_dim)?;
        let ws = tape.param(self.ws);
        let b = tape.param(self.b);
        let v = tape.param(self.v);
        let sp = tape.matmul(state, ws);
        let sp = tape.add(sp, b);
        let hidden = tape.add_row(projected, sp);
        let hidden = tape.tanh(hidden);
        let col = tape.matmul(hidden, v);
        Ok(tape.transpose(col))
    }
}

/// Attention weights and context vector.
#[derive(Clone, Copy, Debug)]
pub struct Attended {
    /// `1 x T`
    pub weights: Var,
    /// `1 x key_dim`
    pub context: Var,
}

/// Softmax attention of `state` over the rows of `keys` with pre-projected
/// keys. `mask[i] == false` marks padding.
pub fn attend_projected(
    tape: &mut Tape,
    q: &ScorerParams,
    state: Var,
    keys: Var,
    projected: Var,
    mask: Option<&[bool]>,
) -> Result<Attended> {
    let scores = q.scores(tape, state, projected)?;
    let weights = tape.softmax(scores, mask)?;
    let context = tape.matmul(weights, keys);
    Ok(Attended { weights, context })
}

pub fn attention(
    tape: &mut Tape,
    q: &ScorerParams,
    state: Var,
    keys: Var,
    mask: Option<&[bool]>,
) -> Result<Attended> {
    if tape.shape(keys)[0] == 0 {
        return Err(Error::EmptyUtterance("attention keys"));
    }
    let projected = q.project_keys(tape, keys)?;
    attend_projected(tape, q, state, keys, projected, mask)
}

/// One-hidden-layer perceptron with a tanh hidden layer and scalar output.
#[derive(Clone, Copy, Debug)]
pub struct MlpParams {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub input: usize,
    pub hidden: usize,
}

impl MlpParams {
    pub fn register<R: Rng>(
        ps: &mut ParameterSet,
        prefix: &str,
        input: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(MlpParams {
            w1: ps.uniform(format!("{prefix}.w1"), input, hidden, rng)?,
            b1: ps.uniform(format!("{prefix}.b1"), 1, hidden, rng)?,
            w2: ps.uniform(format!("{prefix}.w2"), hidden, 1, rng)?,
            b2: ps.uniform(format!("{prefix}.b2"), 1, 1, rng)?,
            input,
            hidden,
        })
    }
}

/// Returns the pre-sigmoid `1 x 1` output.
pub fn mlp(tape: &mut Tape, p: &MlpParams, input: Var) -> Result<Var> {
    let ps = tape.params();
    expect_param(ps, p.w1, p.input, p.hidden)?;
    expect_param(ps, p.b1, 1, p.hidden)?;
    expect_param(ps, p.w2, p.hidden, 1)?;
    expect_param(ps, p.b2, 1, 1)?;
    expect_shape(tape, input, "mlp input", 1, p.input)?;
    let w1 = tape.param(p.w1);
    let b1 = tape.param(p.b1);
    let w2 = tape.param(p.w2);
    let b2 = tape.param(p.b2);
    let h = tape.matmul(input, w1);
    let h = tape.add(h, b1);
    let h = tape.tanh(h);
    let o = tape.matmul(h, w2);
    Ok(tape.add(o, b2))
}

/// Mean of `-ln p(target)` over rows of `probs` (`T x V`), skipping rows whose
/// target is `PAD`.
pub fn cross_entropy(tape: &mut Tape, probs: Var, targets: &[usize]) -> Result<Var> {
    let [rows, vocab] = tape.shape(probs);
    if targets.len() != rows {
        return Err(Error::Shape {
            name: "cross-entropy targets".into(),
            expected: vec![rows],
            found: vec![targets.len()],
        });
    }
    if let Some(&bad) = targets.iter().find(|&&t| t >= vocab) {
        return Err(Error::TokenOutOfRange {
            id: bad,
            size: vocab,
        });
    }
    let live: Vec<usize> = (0..rows).filter(|&r| targets[r] != PAD).collect();
    if live.is_empty() {
        return Err(Error::EmptyUtterance("cross-entropy targets"));
    }
    let picked = if live.len() == rows {
        tape.pick(probs, targets)?
    } else {
        let kept: Vec<Var> = live.iter().map(|&r| tape.row(probs, r)).collect();
        let kept = tape.stack_rows(&kept);
        let t: Vec<usize> = live.iter().map(|&r| targets[r]).collect();
        tape.pick(kept, &t)?
    };
    let logs = tape.log(picked);
    let mean = tape.mean(logs);
    Ok(tape.scale(mean, -1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck::check_gradients;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(5)
    }

    #[test]
    fn zero_lstm_is_a_fixed_point() {
        let mut ps = ParameterSet::new();
        let p = LstmParams::register(&mut ps, "l", 3, 2, &mut rng()).unwrap();
        ps.fill_values(0.0);
        let mut t = Tape::new(&ps);
        let x = t.constant(Array::row_vector(vec![1.0, -2.0, 0.5]));
        let s0 = LstmState::zeros(&mut t, 2);
        let s = lstm_step(&mut t, &p, x, s0).unwrap();
        assert_eq!(t.value(s.h).data(), &[0.0, 0.0]);
        assert_eq!(t.value(s.c).data(), &[0.0, 0.0]);
    }

    #[test]
    fn saturated_forget_gate_keeps_cell() {
        let mut ps = ParameterSet::new();
        let p = LstmParams::register(&mut ps, "l", 1, 2, &mut rng()).unwrap();
        ps.fill_values(0.0);
        // input gate -> 0, forget gate -> 1
        let b = ps.value_mut(p.b);
        for c in 0..2 {
            b.set(0, c, -1e3);
            b.set(0, 2 + c, 1e3);
        }
        let mut t = Tape::new(&ps);
        let x = t.constant(Array::row_vector(vec![0.3]));
        let h = t.constant(Array::row_vector(vec![0.1, 0.2]));
        let c = t.constant(Array::row_vector(vec![0.7, -0.4]));
        let s = lstm_step(&mut t, &p, x, LstmState { h, c }).unwrap();
        assert_eq!(t.value(s.c).data(), &[0.7, -0.4]);
    }

    #[test]
    fn lstm_shape_error_names_parameter() {
        let mut ps = ParameterSet::new();
        let mut p = LstmParams::register(&mut ps, "enc", 3, 2, &mut rng()).unwrap();
        p.input = 4;
        let mut t = Tape::new(&ps);
        let x = t.constant(Array::zeros(1, 4));
        let s0 = LstmState::zeros(&mut t, 2);
        let err = lstm_step(&mut t, &p, x, s0).unwrap_err();
        assert!(err.to_string().contains("enc.wx"), "{err}");
    }

    #[test]
    fn lstm_step_gradcheck() {
        let mut ps = ParameterSet::new();
        let mut r = rng();
        let p = LstmParams::register(&mut ps, "l", 3, 2, &mut r).unwrap();
        for p in ps.iter_mut() {
            p.value.scale(8.0);
        }
        let report = check_gradients(&ps, |ps| {
            let mut t = Tape::new(ps);
            let x = t.constant(Array::row_vector(vec![0.5, -1.0, 0.25]));
            let h = t.constant(Array::row_vector(vec![0.1, -0.3]));
            let c = t.constant(Array::row_vector(vec![0.2, 0.4]));
            let s = lstm_step(&mut t, &p, x, LstmState { h, c })?;
            let l = t.sum(s.h);
            Ok((t.value(l).item(), t.backward(l)?))
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }

    #[test]
    fn bilstm_single_step_shape() {
        let mut ps = ParameterSet::new();
        let mut r = rng();
        let f = LstmParams::register(&mut ps, "f", 2, 3, &mut r).unwrap();
        let b = LstmParams::register(&mut ps, "b", 2, 3, &mut r).unwrap();
        let mut t = Tape::new(&ps);
        let xs = t.constant(Array::zeros(1, 2));
        let out = bilstm(&mut t, &f, &b, xs).unwrap();
        assert_eq!(t.shape(out), [1, 6]);
        let empty = t.constant(Array::zeros(0, 2));
        assert!(bilstm(&mut t, &f, &b, empty).is_err());
    }

    #[test]
    fn bilstm_tied_weights_on_palindrome_mirror() {
        let mut ps = ParameterSet::new();
        let mut r = rng();
        let f = LstmParams::register(&mut ps, "f", 2, 3, &mut r).unwrap();
        let b = LstmParams::register(&mut ps, "b", 2, 3, &mut r).unwrap();
        for (src, dst) in [(f.wx, b.wx), (f.wh, b.wh), (f.b, b.b)] {
            let v = ps.value(src).clone();
            *ps.value_mut(dst) = v;
        }
        let rows = [[0.3, -0.2], [1.0, 0.5], [-0.7, 0.1], [1.0, 0.5], [0.3, -0.2]];
        let data: Vec<f64> = rows.iter().flatten().copied().collect();
        let mut t = Tape::new(&ps);
        let xs = t.constant(Array::from_vec(5, 2, data).unwrap());
        let out = bilstm(&mut t, &f, &b, xs).unwrap();
        let o = t.value(out);
        for i in 0..5 {
            for c in 0..3 {
                let fwd = o.get(i, c);
                let bwd = o.get(4 - i, 3 + c);
                assert!((fwd - bwd).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn bilstm_gradcheck() {
        let mut ps = ParameterSet::new();
        let mut r = rng();
        let f = LstmParams::register(&mut ps, "f", 2, 2, &mut r).unwrap();
        let b = LstmParams::register(&mut ps, "b", 2, 2, &mut r).unwrap();
        for p in ps.iter_mut() {
            p.value.scale(8.0);
        }
        let data = vec![0.3, -0.2, 1.0, 0.5, -0.7, 0.1];
        let report = check_gradients(&ps, |ps| {
            let mut t = Tape::new(ps);
            let xs = t.constant(Array::from_vec(3, 2, data.clone()).unwrap());
            let out = bilstm(&mut t, &f, &b, xs)?;
            let w = t.constant(Array::from_vec(3, 4, (0..12).map(|i| i as f64 * 0.1 - 0.5).collect()).unwrap());
            let prod = t.mul(out, w);
            let l = t.sum(prod);
            Ok((t.value(l).item(), t.backward(l)?))
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }

    #[test]
    fn attention_equal_scores_are_uniform() {
        let mut ps = ParameterSet::new();
        let q = ScorerParams::register(&mut ps, "q", 2, 3, 4, &mut rng()).unwrap();
        ps.fill_values(0.0);
        let mut t = Tape::new(&ps);
        let s = t.constant(Array::row_vector(vec![0.2, 0.1]));
        let keys = t.constant(Array::from_vec(4, 3, (0..12).map(|i| i as f64).collect()).unwrap());
        let a = attention(&mut t, &q, s, keys, None).unwrap();
        assert_eq!(t.value(a.weights).data(), &[0.25; 4]);
        // context is the mean key
        assert_eq!(t.value(a.context).data(), &[4.5, 5.5, 6.5]);
    }

    #[test]
    fn attention_hand_softmax() {
        // v = 2, hidden = 1, ws = 0, b = 0, wk = 1 -> q = 2 tanh(key). Choose
        // keys so that the scores equal ln 1 and ln 3.
        let mut ps = ParameterSet::new();
        let q = ScorerParams::register(&mut ps, "q", 1, 1, 1, &mut rng()).unwrap();
        ps.fill_values(0.0);
        ps.value_mut(q.wk).fill(1.0);
        ps.value_mut(q.v).fill(2.0);
        let keys = vec![0.0_f64.atanh(), (3.0_f64.ln() / 2.0).atanh()];
        let mut t = Tape::new(&ps);
        let s = t.constant(Array::scalar(0.0));
        let k = t.constant(Array::from_vec(2, 1, keys).unwrap());
        let a = attention(&mut t, &q, s, k, None).unwrap();
        let w = t.value(a.weights).data().to_vec();
        assert!((w[0] - 0.25).abs() < 1e-12 && (w[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn attention_all_masked_errors() {
        let mut ps = ParameterSet::new();
        let q = ScorerParams::register(&mut ps, "q", 2, 2, 2, &mut rng()).unwrap();
        let mut t = Tape::new(&ps);
        let s = t.constant(Array::zeros(1, 2));
        let keys = t.constant(Array::zeros(2, 2));
        assert!(matches!(
            attention(&mut t, &q, s, keys, Some(&[false, false])),
            Err(Error::AllMasked)
        ));
    }

    #[test]
    fn mlp_hand_evaluation() {
        let mut ps = ParameterSet::new();
        let p = MlpParams::register(&mut ps, "m", 1, 1, &mut rng()).unwrap();
        ps.fill_values(0.0);
        {
            let mut t = Tape::new(&ps);
            let x = t.constant(Array::scalar(0.8));
            let o = mlp(&mut t, &p, x).unwrap();
            assert_eq!(t.value(o).item(), 0.0);
        }
        ps.value_mut(p.w1).fill(1.0);
        ps.value_mut(p.w2).fill(2.5);
        let mut t = Tape::new(&ps);
        let x = t.constant(Array::scalar(0.8));
        let o = mlp(&mut t, &p, x).unwrap();
        assert!((t.value(o).item() - 0.8_f64.tanh() * 2.5).abs() < 1e-15);
    }

    #[test]
    fn mlp_gradcheck() {
        let mut ps = ParameterSet::new();
        let p = MlpParams::register(&mut ps, "m", 3, 4, &mut rng()).unwrap();
        for p in ps.iter_mut() {
            p.value.scale(10.0);
        }
        let report = check_gradients(&ps, |ps| {
            let mut t = Tape::new(ps);
            let x = t.constant(Array::row_vector(vec![0.5, -0.1, 0.9]));
            let o = mlp(&mut t, &p, x)?;
            Ok((t.value(o).item(), t.backward(o)?))
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }

    #[test]
    fn cross_entropy_cases() {
        let ps = ParameterSet::new();
        let mut t = Tape::new(&ps);
        let one_hot = t.constant(Array::from_vec(2, 4, vec![0., 1., 0., 0., 0., 0., 0., 1.]).unwrap());
        let l = cross_entropy(&mut t, one_hot, &[1, 3]).unwrap();
        assert_eq!(t.value(l).item(), 0.0);

        let uniform = t.constant(Array::filled(3, 4, 0.25));
        let l = cross_entropy(&mut t, uniform, &[1, 2, 3]).unwrap();
        assert!((t.value(l).item() - 4.0_f64.ln()).abs() < 1e-12);

        // targets pick 0.5 and 0.1; the third row is PAD and excluded
        let mixed = t.constant(
            Array::from_vec(3, 4, vec![0.5, 0.5, 0., 0., 0.2, 0.3, 0.1, 0.4, 0.1, 0.2, 0.3, 0.4])
                .unwrap(),
        );
        let l = cross_entropy(&mut t, mixed, &[1, 2, PAD]).unwrap();
        let expected = -(0.5_f64.ln() + 0.1_f64.ln()) / 2.0;
        assert!((t.value(l).item() - expected).abs() < 1e-12);

        assert!(matches!(
            cross_entropy(&mut t, mixed, &[1, 9, 2]),
            Err(Error::TokenOutOfRange { .. })
        ));
    }
}
