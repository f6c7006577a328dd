//! Binary classifier scoring how likely a response is human-written given
//! the message and the retrieved candidates.
//!
//! Each candidate is read by a candidate LSTM from a zero state; its final
//! hidden state seeds a response LSTM that reads the response, and the
//! per-candidate results are averaged. The message path seeds the same
//! response LSTM from a message LSTM. An MLP over both representations gives
//! the logit.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{
    lstm_sequence, mlp, sigmoid, Array, Checkpoint, Gradients, LstmParams, LstmState, MlpParams,
    ParamId, ParameterSet, Tape, Var,
};
use crate::corpus::{Utterance, NUM_RESERVED};
use crate::error::{Error, Result};

pub const NAMESPACE: &str = "disc";

const MLP_W1: &str = "disc.mlp.w1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiscriminatorConfig {
    pub vocab_size: usize,
    pub embedding_dim: usize,
    pub hidden: usize,
    pub mlp_hidden: usize,
    pub n_candidates: usize,
    /// When false the classifier sees only the message representation.
    pub use_candidates: bool,
}

impl DiscriminatorConfig {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("embedding_dim", self.embedding_dim),
            ("hidden", self.hidden),
            ("mlp_hidden", self.mlp_hidden),
            ("n_candidates", self.n_candidates),
        ];
        for (name, v) in fields {
            if v == 0 {
                return Err(Error::Config(format!("discriminator {name} must be positive")));
            }
        }
        if self.vocab_size <= NUM_RESERVED {
            return Err(Error::Config(format!(
                "discriminator vocab_size {} leaves no room beyond reserved tokens",
                self.vocab_size
            )));
        }
        Ok(())
    }

    fn mlp_input(&self) -> usize {
        if self.use_candidates {
            2 * self.hidden
        } else {
            self.hidden
        }
    }

    /// Sets `use_candidates` from the MLP input width stored in `ck`.
    pub fn infer_variant(&mut self, ck: &Checkpoint) -> Result<()> {
        let rec = ck
            .record(MLP_W1)
            .ok_or_else(|| Error::Config(format!("checkpoint lacks parameter {MLP_W1}")))?;
        match rec.value.rows() {
            r if r == 2 * self.hidden => self.use_candidates = true,
            r if r == self.hidden => self.use_candidates = false,
            r => {
                return Err(Error::Shape {
                    name: MLP_W1.into(),
                    expected: vec![2 * self.hidden, self.mlp_hidden],
                    found: vec![r, rec.value.cols()],
                })
            }
        }
        Ok(())
    }
}

/// One classifier input. The response is a raw id sequence because sampled
/// responses may contain any vocabulary id.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscExample {
    pub message: Utterance,
    pub candidates: Vec<Utterance>,
    pub response: Vec<usize>,
}

/// Intermediate representations of one classification.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DiscTrace {
    /// Final candidate-LSTM hidden state per candidate.
    pub candidate_finals: Vec<Vec<f64>>,
    /// Candidate-aware response representation per candidate.
    pub local: Vec<Vec<f64>>,
    pub z_c: Vec<f64>,
    pub z_x: Vec<f64>,
    pub probability: f64,
}

#[derive(Clone, Copy, Debug)]
struct Layout {
    emb: ParamId,
    cand: LstmParams,
    msg: LstmParams,
    resp: LstmParams,
    mlp: MlpParams,
}

#[derive(Clone, Debug)]
pub struct Discriminator {
    config: DiscriminatorConfig,
    params: ParameterSet,
    layout: Layout,
}

/// Candidate-aware representations on a tape.
#[derive(Clone, Debug)]
pub struct CandidateAware {
    pub finals: Vec<Var>,
    pub local: Vec<Var>,
    /// Mean of `local`.
    pub z_c: Var,
}

impl Discriminator {
    pub fn new<R: Rng>(config: DiscriminatorConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let (v, e, d) = (config.vocab_size, config.embedding_dim, config.hidden);
        let mut ps = ParameterSet::new();
        let emb = ps.uniform("disc.emb", v, e, rng)?;
        let cand = LstmParams::register(&mut ps, "disc.cand", e, d, rng)?;
        let msg = LstmParams::register(&mut ps, "disc.msg", e, d, rng)?;
        let resp = LstmParams::register(&mut ps, "disc.resp", e, d, rng)?;
        let mlp = MlpParams::register(&mut ps, "disc.mlp", config.mlp_input(), config.mlp_hidden, rng)?;
        Ok(Discriminator {
            config,
            params: ps,
            layout: Layout {
                emb,
                cand,
                msg,
                resp,
                mlp,
            },
        })
    }

    pub fn seeded(config: DiscriminatorConfig, seed: u64) -> Result<Self> {
        Self::new(config, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    pub fn config(&self) -> &DiscriminatorConfig {
        &self.config
    }

    pub fn params(&self) -> &ParameterSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParameterSet {
        &mut self.params
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::from_params(&self.params)
    }

    pub fn restore(&mut self, ck: &Checkpoint) -> Result<()> {
        ck.restore(&mut self.params)
    }

    fn embed(&self, tape: &mut Tape, ids: &[usize], what: &'static str) -> Result<Var> {
        if ids.is_empty() {
            return Err(Error::EmptyUtterance(what));
        }
        let emb = tape.param(self.layout.emb);
        tape.gather(emb, ids)
    }

    /// Runs the response LSTM over `ys` from hidden state `h0` and a zero cell.
    fn read_response(&self, tape: &mut Tape, ys: Var, h0: Var) -> Result<Var> {
        let c = tape.constant(Array::zeros(1, self.config.hidden));
        let (_, last) = lstm_sequence(tape, &self.layout.resp, ys, Some(LstmState { h: h0, c }), false)?;
        Ok(last.h)
    }

    pub fn candidate_aware(&self, tape: &mut Tape, response: &[usize], candidates: &[Utterance]) -> Result<CandidateAware> {
        if candidates.len() != self.config.n_candidates {
            return Err(Error::InvalidArgument(format!(
                "expected {} candidates, found {}",
                self.config.n_candidates,
                candidates.len()
            )));
        }
        let ys = self.embed(tape, response, "response")?;
        let mut finals = Vec::with_capacity(candidates.len());
        let mut local = Vec::with_capacity(candidates.len());
        for c in candidates {
            let xs = self.embed(tape, c.ids(), "candidate")?;
            let (_, u) = lstm_sequence(tape, &self.layout.cand, xs, None, false)?;
            finals.push(u.h);
            local.push(self.read_response(tape, ys, u.h)?);
        }
        let stacked = tape.stack_rows(&local);
        let n = local.len();
        let avg = tape.constant(Array::filled(1, n, 1.0 / n as f64));
        let z_c = tape.matmul(avg, stacked);
        Ok(CandidateAware { finals, local, z_c })
    }

    pub fn message_aware(&self, tape: &mut Tape, response: &[usize], message: &[usize]) -> Result<Var> {
        let ys = self.embed(tape, response, "response")?;
        let xs = self.embed(tape, message, "message")?;
        let (_, v) = lstm_sequence(tape, &self.layout.msg, xs, None, false)?;
        self.read_response(tape, ys, v.h)
    }

    /// Pre-sigmoid score, `1 x 1`.
    pub fn logit_on(&self, tape: &mut Tape, ex: &DiscExample) -> Result<Var> {
        let z_x = self.message_aware(tape, &ex.response, ex.message.ids())?;
        let input = if self.config.use_candidates {
            let ca = self.candidate_aware(tape, &ex.response, &ex.candidates)?;
            tape.concat_cols(&[z_x, ca.z_c])
        } else {
            z_x
        };
        mlp(tape, &self.layout.mlp, input)
    }

    /// Probability that the response is human-written.
    pub fn classify(&self, ex: &DiscExample) -> Result<f64> {
        let mut tape = Tape::new(&self.params);
        let l = self.logit_on(&mut tape, ex)?;
        Ok(sigmoid(tape.value(l).item()))
    }

    pub fn trace(&self, ex: &DiscExample) -> Result<DiscTrace> {
        let mut tape = Tape::new(&self.params);
        let ca = self.candidate_aware(&mut tape, &ex.response, &ex.candidates)?;
        let z_x = self.message_aware(&mut tape, &ex.response, ex.message.ids())?;
        let vals = |t: &Tape, v: Var| t.value(v).data().to_vec();
        Ok(DiscTrace {
            candidate_finals: ca.finals.iter().map(|&v| vals(&tape, v)).collect(),
            local: ca.local.iter().map(|&v| vals(&tape, v)).collect(),
            z_c: vals(&tape, ca.z_c),
            z_x: vals(&tape, z_x),
            probability: self.classify(ex)?,
        })
    }

    /// `mean(-ln D(pos)) + mean(-ln(1 - D(neg)))`.
    pub fn loss_on(&self, tape: &mut Tape, positives: &[DiscExample], negatives: &[DiscExample]) -> Result<Var> {
        if positives.is_empty() || negatives.is_empty() {
            return Err(Error::InvalidArgument(
                "discriminator loss needs positives and negatives".into(),
            ));
        }
        let mut pos = Vec::with_capacity(positives.len());
        for ex in positives {
            let l = self.logit_on(tape, ex)?;
            pos.push(tape.log_sigmoid(l));
        }
        let mut neg = Vec::with_capacity(negatives.len());
        for ex in negatives {
            let l = self.logit_on(tape, ex)?;
            let flipped = tape.scale(l, -1.0);
            neg.push(tape.log_sigmoid(flipped));
        }
        let pos = tape.stack_rows(&pos);
        let neg = tape.stack_rows(&neg);
        let pos = tape.mean(pos);
        let neg = tape.mean(neg);
        let total = tape.add(pos, neg);
        Ok(tape.scale(total, -1.0))
    }

    pub fn loss_gradients_with(
        &self,
        ps: &ParameterSet,
        positives: &[DiscExample],
        negatives: &[DiscExample],
    ) -> Result<(f64, Gradients)> {
        let mut tape = Tape::new(ps);
        let loss = self.loss_on(&mut tape, positives, negatives)?;
        Ok((tape.value(loss).item(), tape.backward(loss)?))
    }

    pub fn loss_gradients(&self, positives: &[DiscExample], negatives: &[DiscExample]) -> Result<(f64, Gradients)> {
        self.loss_gradients_with(&self.params, positives, negatives)
    }

    pub fn loss(&self, positives: &[DiscExample], negatives: &[DiscExample]) -> Result<f64> {
        let mut tape = Tape::new(&self.params);
        let loss = self.loss_on(&mut tape, positives, negatives)?;
        Ok(tape.value(loss).item())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck::check_gradients;
    use crate::autodiff::sigmoid;
    use proptest::prelude::*;

    fn cfg(d: usize, n: usize, use_candidates: bool) -> DiscriminatorConfig {
        DiscriminatorConfig {
            vocab_size: 10,
            embedding_dim: 3,
            hidden: d,
            mlp_hidden: 3,
            n_candidates: n,
            use_candidates,
        }
    }

    fn u(ids: &[usize]) -> Utterance {
        Utterance::new(ids.to_vec()).unwrap()
    }

    fn scaled(config: DiscriminatorConfig, seed: u64, by: f64) -> Discriminator {
        let mut d = Discriminator::seeded(config, seed).unwrap();
        for p in d.params_mut().iter_mut() {
            p.value.scale(by);
        }
        d
    }

    fn ex(msg: &[usize], cands: &[&[usize]], resp: &[usize]) -> DiscExample {
        DiscExample {
            message: u(msg),
            candidates: cands.iter().map(|c| u(c)).collect(),
            response: resp.to_vec(),
        }
    }

    /// Plain-float LSTM with gate blocks `[i, f, o, g]`.
    fn lstm_ref(ps: &ParameterSet, prefix: &str, xs: &[Vec<f64>], h0: Vec<f64>) -> Vec<f64> {
        let wx = &ps.by_name(&format!("{prefix}.wx")).unwrap().value;
        let wh = &ps.by_name(&format!("{prefix}.wh")).unwrap().value;
        let b = &ps.by_name(&format!("{prefix}.b")).unwrap().value;
        let d = wh.rows();
        let (mut h, mut c) = (h0, vec![0.0; d]);
        for x in xs {
            let pre: Vec<f64> = (0..4 * d)
                .map(|j| {
                    b.get(0, j)
                        + x.iter().enumerate().map(|(i, xi)| xi * wx.get(i, j)).sum::<f64>()
                        + h.iter().enumerate().map(|(i, hi)| hi * wh.get(i, j)).sum::<f64>()
                })
                .collect();
            for k in 0..d {
                let (i, f, o, g) = (
                    sigmoid(pre[k]),
                    sigmoid(pre[d + k]),
                    sigmoid(pre[2 * d + k]),
                    pre[3 * d + k].tanh(),
                );
                c[k] = f * c[k] + i * g;
                h[k] = o * c[k].tanh();
            }
        }
        h
    }

    fn embed(ps: &ParameterSet, ids: &[usize]) -> Vec<Vec<f64>> {
        let e = &ps.by_name("disc.emb").unwrap().value;
        ids.iter().map(|&i| e.row(i).to_vec()).collect()
    }

    #[test]
    fn candidate_aware_matches_hand_recurrence() {
        let d = scaled(cfg(2, 2, true), 1, 10.0);
        let e = ex(&[4], &[&[5, 6], &[7, 8]], &[6, 9]);
        let tr = d.trace(&e).unwrap();
        let ps = d.params();
        let ys = embed(ps, &e.response);
        let mut local = Vec::new();
        for c in &e.candidates {
            let u = lstm_ref(ps, "disc.cand", &embed(ps, c.ids()), vec![0.0; 2]);
            local.push(lstm_ref(ps, "disc.resp", &ys, u));
        }
        for k in 0..2 {
            let zc = 0.5 * (local[0][k] + local[1][k]);
            assert!((tr.z_c[k] - zc).abs() < 1e-14);
            assert!((tr.local[0][k] - local[0][k]).abs() < 1e-14);
        }
        let v = lstm_ref(ps, "disc.msg", &embed(ps, &[4]), vec![0.0; 2]);
        let zx = lstm_ref(ps, "disc.resp", &ys, v);
        for k in 0..2 {
            assert!((tr.z_x[k] - zx[k]).abs() < 1e-14);
        }
    }

    #[test]
    fn identical_candidates_mean_equals_member() {
        let d = scaled(cfg(3, 2, true), 2, 10.0);
        let tr = d.trace(&ex(&[4, 5], &[&[6, 7], &[6, 7]], &[8])).unwrap();
        assert_eq!(tr.local[0], tr.local[1]);
        for (a, b) in tr.z_c.iter().zip(&tr.local[0]) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_weights_give_zero_message_representation_and_half() {
        let mut d = Discriminator::seeded(cfg(3, 2, true), 3).unwrap();
        d.params_mut().fill_values(0.0);
        let e = ex(&[4, 5], &[&[6], &[7]], &[8, 9]);
        let tr = d.trace(&e).unwrap();
        assert!(tr.z_x.iter().all(|&v| v == 0.0));
        assert_eq!(d.classify(&e).unwrap(), 0.5);
        let loss = d.loss(&[e.clone()], &[e]).unwrap();
        assert!((loss - 2.0 * 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn classify_matches_hand_computation_d1() {
        let mut d = Discriminator::seeded(
            DiscriminatorConfig {
                hidden: 1,
                mlp_hidden: 1,
                embedding_dim: 1,
                ..cfg(1, 1, true)
            },
            4,
        )
        .unwrap();
        for p in d.params_mut().iter_mut() {
            p.value.scale(10.0);
        }
        let e = ex(&[4], &[&[5]], &[6, 7]);
        let ps = d.params();
        let ys = embed(ps, &e.response);
        let u = lstm_ref(ps, "disc.cand", &embed(ps, &[5]), vec![0.0]);
        let zc = lstm_ref(ps, "disc.resp", &ys, u)[0];
        let v = lstm_ref(ps, "disc.msg", &embed(ps, &[4]), vec![0.0]);
        let zx = lstm_ref(ps, "disc.resp", &ys, v)[0];
        let g = |n: &str| ps.by_name(n).unwrap().value.data().to_vec();
        let (w1, b1, w2, b2) = (g("disc.mlp.w1"), g("disc.mlp.b1"), g("disc.mlp.w2"), g("disc.mlp.b2"));
        let h = (zx * w1[0] + zc * w1[1] + b1[0]).tanh();
        let p = sigmoid(h * w2[0] + b2[0]);
        assert!((d.classify(&e).unwrap() - p).abs() < 1e-14);
    }

    #[test]
    fn mixed_batch_loss_matches_hand_sum() {
        let d = scaled(cfg(3, 2, true), 5, 12.0);
        let pos = vec![ex(&[4], &[&[5], &[6]], &[7, 8]), ex(&[5, 4], &[&[6], &[9]], &[4])];
        let neg = vec![
            ex(&[4], &[&[5], &[6]], &[9]),
            ex(&[7], &[&[8], &[6]], &[5, 5]),
            ex(&[7, 8], &[&[4], &[6]], &[6]),
        ];
        let pp: Vec<f64> = pos.iter().map(|e| d.classify(e).unwrap()).collect();
        let pn: Vec<f64> = neg.iter().map(|e| d.classify(e).unwrap()).collect();
        let hand = -pp.iter().map(|p| p.ln()).sum::<f64>() / 2.0
            - pn.iter().map(|p| (1.0 - p).ln()).sum::<f64>() / 3.0;
        assert!((d.loss(&pos, &neg).unwrap() - hand).abs() < 1e-12);
    }

    #[test]
    fn empty_inputs_are_rejected() {
        let d = Discriminator::seeded(cfg(2, 1, true), 6).unwrap();
        assert!(d.classify(&ex(&[4], &[&[5]], &[])).is_err());
        assert!(d.loss(&[], &[ex(&[4], &[&[5]], &[6])]).is_err());
    }

    #[test]
    fn loss_gradcheck_both_variants() {
        for use_candidates in [true, false] {
            let d = scaled(cfg(3, 2, use_candidates), 7, 10.0);
            let pos = vec![ex(&[4, 5], &[&[6, 7], &[8]], &[9, 4])];
            let neg = vec![ex(&[4, 5], &[&[6, 7], &[8]], &[5]), ex(&[6], &[&[7], &[8, 9]], &[4, 4, 6])];
            let report = check_gradients(d.params(), |ps| d.loss_gradients_with(ps, &pos, &neg)).unwrap();
            assert!(report.max_rel_error < 1e-4, "{use_candidates} {report:?}");
        }
    }

    #[test]
    fn variant_is_inferred_from_checkpoint() {
        let d = Discriminator::seeded(cfg(3, 2, false), 8).unwrap();
        let mut c = cfg(3, 2, true);
        c.infer_variant(&d.checkpoint()).unwrap();
        assert!(!c.use_candidates);
        let mut back = Discriminator::seeded(c, 0).unwrap();
        back.restore(&d.checkpoint()).unwrap();
        assert_eq!(back.params().iter().count(), d.params().iter().count());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn swap_invariance_and_range(
            a in prop::collection::vec(4usize..10, 1..4),
            b in prop::collection::vec(4usize..10, 1..4),
            y in prop::collection::vec(0usize..10, 1..4),
            seed in 0u64..50,
        ) {
            let d = scaled(cfg(3, 2, true), seed, 10.0);
            let e1 = ex(&[4, 5], &[&a, &b], &y);
            let e2 = ex(&[4, 5], &[&b, &a], &y);
            let (t1, t2) = (d.trace(&e1).unwrap(), d.trace(&e2).unwrap());
            for (x, z) in t1.z_c.iter().zip(&t2.z_c) {
                prop_assert!((x - z).abs() < 1e-12);
            }
            prop_assert!(t1.probability > 0.0 && t1.probability < 1.0);
        }
    }
}
