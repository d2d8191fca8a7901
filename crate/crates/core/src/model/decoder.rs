use rand::Rng;

use crate::tape::{Tape, Var};
use crate::thesaurus::{BOS, EOS};

use super::{EncoderOutput, Model, ModelError};

/// Longest generated sequence, counted in prediction steps.
pub const MAX_TARGET_LEN: usize = 31;

#[derive(Debug, Clone, Copy)]
pub struct DecoderState {
    /// `1 × m` hidden state.
    pub h: Var,
    /// Vocabulary id fed at this step.
    pub prev_token: u32,
    pub step: usize,
}

#[derive(Debug, Clone)]
pub struct StepOutput {
    /// `1 × 1130` log-probabilities of the next token.
    pub log_probs: Var,
    /// Attention weights over description positions (empty when there are none).
    pub attention: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct DecodeOutput {
    /// Token fed at each step.
    pub step_inputs: Vec<u32>,
    pub steps: Vec<StepOutput>,
    /// Mean per-step negative log-likelihood, when a target was given.
    pub nll: Option<Var>,
    /// Greedy choice at each step.
    pub predicted: Vec<u32>,
}

/// Description-only attention memory.
struct Memory {
    states: Option<(Var, Var)>,
}

fn argmax(row: ndarray::ArrayView1<f64>) -> u32 {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best as u32
}

impl Model {
    fn memory(&self, tape: &mut Tape, enc: &EncoderOutput) -> Memory {
        let rows = enc.desc_positions();
        if rows.is_empty() {
            return Memory { states: None };
        }
        let s = tape.select_rows(enc.seq_states, &rows);
        let st = tape.transpose(s);
        Memory { states: Some((s, st)) }
    }

    pub fn initial_state(&self, enc: &EncoderOutput) -> DecoderState {
        DecoderState {
            h: enc.cls_state,
            prev_token: BOS,
            step: 0,
        }
    }

    /// One attention-GRU step fed with `state.prev_token`.
    pub fn decode_step(
        &self,
        tape: &mut Tape,
        state: &DecoderState,
        enc: &EncoderOutput,
    ) -> Result<(DecoderState, StepOutput), ModelError> {
        let memory = self.memory(tape, enc);
        self.step_with(tape, state, &memory)
    }

    fn step_with(
        &self,
        tape: &mut Tape,
        state: &DecoderState,
        memory: &Memory,
    ) -> Result<(DecoderState, StepOutput), ModelError> {
        let ids = self.ids();
        let m = self.config.encoder.width;
        let embed = tape.gather(ids.dec_emb, &[state.prev_token as usize]);

        let (applied, attention) = match memory.states {
            Some((s, st)) => {
                let scores = tape.matmul(state.h, st);
                let weights = tape.softmax_rows(scores, None);
                let attention = tape.value(weights).row(0).to_vec();
                (tape.matmul(weights, s), attention)
            }
            None => (tape.constant(crate::tape::Mat::zeros((1, m))), Vec::new()),
        };
        let input = tape.add(embed, applied);

        let wi = tape.param(ids.gru_wi);
        let bi = tape.param(ids.gru_bi);
        let wh = tape.param(ids.gru_wh);
        let bh = tape.param(ids.gru_bh);
        let gi = tape.matmul(input, wi);
        let gi = tape.add(gi, bi);
        let gh = tape.matmul(state.h, wh);
        let gh = tape.add(gh, bh);
        let (gi_r, gi_z, gi_n) = (tape.slice_cols(gi, 0, m), tape.slice_cols(gi, m, 2 * m), tape.slice_cols(gi, 2 * m, 3 * m));
        let (gh_r, gh_z, gh_n) = (tape.slice_cols(gh, 0, m), tape.slice_cols(gh, m, 2 * m), tape.slice_cols(gh, 2 * m, 3 * m));
        let r = tape.add(gi_r, gh_r);
        let r = tape.sigmoid(r);
        let z = tape.add(gi_z, gh_z);
        let z = tape.sigmoid(z);
        let rn = tape.mul(r, gh_n);
        let n = tape.add(gi_n, rn);
        let n = tape.tanh(n);
        let diff = tape.sub(state.h, n);
        let zd = tape.mul(z, diff);
        let h = tape.add(n, zd);
        if !tape.value(h).iter().all(|v| v.is_finite()) {
            return Err(ModelError::NonFiniteActivation { step: state.step });
        }

        let out_w = tape.param(ids.out_w);
        let out_b = tape.param(ids.out_b);
        let logits = tape.matmul(h, out_w);
        let logits = tape.add(logits, out_b);
        let log_probs = tape.log_softmax_rows(logits);
        let next = DecoderState {
            h,
            prev_token: argmax(tape.value(log_probs).row(0)),
            step: state.step + 1,
        };
        Ok((next, StepOutput { log_probs, attention }))
    }

    /// Runs the decoder. With a target, step `j` predicts `target[j + 1]` and
    /// is fed `target[j]` with probability `teacher_forcing`, otherwise the
    /// previous greedy choice. Without a target, greedy decoding from BOS
    /// until EOS or [`MAX_TARGET_LEN`] steps.
    pub fn decode_tree_number<R: Rng>(
        &self,
        tape: &mut Tape,
        enc: &EncoderOutput,
        target: Option<&[u32]>,
        teacher_forcing: f64,
        rng: &mut R,
    ) -> Result<DecodeOutput, ModelError> {
        let memory = self.memory(tape, enc);
        let mut state = self.initial_state(enc);
        let mut out = DecodeOutput {
            step_inputs: Vec::new(),
            steps: Vec::new(),
            nll: None,
            predicted: Vec::new(),
        };
        match target {
            Some(target) => {
                let mut picks = Vec::with_capacity(target.len().saturating_sub(1));
                for j in 0..target.len().saturating_sub(1) {
                    let forced = teacher_forcing >= 1.0 || rng.random::<f64>() < teacher_forcing;
                    let fed = if j == 0 || forced { target[j] } else { state.prev_token };
                    state.prev_token = fed;
                    out.step_inputs.push(fed);
                    let (next, step) = self.step_with(tape, &state, &memory)?;
                    picks.push(tape.pick(step.log_probs, 0, target[j + 1] as usize));
                    out.predicted.push(next.prev_token);
                    out.steps.push(step);
                    state = next;
                }
                if !picks.is_empty() {
                    let all = tape.concat_cols(&picks);
                    let total = tape.sum(all);
                    out.nll = Some(tape.scale(total, -1.0 / picks.len() as f64));
                }
            }
            None => {
                while out.steps.len() < MAX_TARGET_LEN {
                    out.step_inputs.push(state.prev_token);
                    let (next, step) = self.step_with(tape, &state, &memory)?;
                    out.predicted.push(next.prev_token);
                    out.steps.push(step);
                    let done = next.prev_token == EOS;
                    state = next;
                    if done {
                        break;
                    }
                }
            }
        }
        Ok(out)
    }

    /// Greedy Tree Number generation for one input; returns `[BOS, ...]`
    /// followed by the generated ids.
    pub fn generate(&self, input: &super::ModelInput) -> Result<Vec<u32>, ModelError> {
        let mut tape = Tape::new(&self.params);
        let enc = self.encode(&mut tape, input)?;
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let out = self.decode_tree_number(&mut tape, &enc, None, 1.0, &mut rng)?;
        let mut seq = vec![BOS];
        seq.extend(out.predicted);
        Ok(seq)
    }
}

#[cfg(test)]
mod tests {
    use super::super::tests::tiny;
    use super::super::EncoderKind;
    use super::*;
    use crate::thesaurus::{target_sequence, TreeNumber, VOCAB_SIZE};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn fixture() -> (Model, super::super::ModelInput, Vec<u32>) {
        let m = tiny(EncoderKind::BagOfEmbeddings);
        let x = m.input("Covid", "viral disease", "covid cases").unwrap();
        let target = target_sequence(&TreeNumber::parse("C01.748.214").unwrap());
        (m, x, target)
    }

    #[test]
    fn seven_steps_for_a_depth_three_target() {
        let (m, x, target) = fixture();
        assert_eq!(target.len(), 8);
        let mut t = Tape::new(m.params());
        let enc = m.encode(&mut t, &x).unwrap();
        let out = m
            .decode_tree_number(&mut t, &enc, Some(&target), 1.0, &mut ChaCha8Rng::seed_from_u64(0))
            .unwrap();
        assert_eq!(out.steps.len(), 7);
        let recomputed: f64 = out
            .steps
            .iter()
            .zip(&target[1..])
            .map(|(s, &g)| -t.value(s.log_probs)[[0, g as usize]])
            .sum::<f64>()
            / 7.0;
        assert!((t.scalar(out.nll.unwrap()) - recomputed).abs() < 1e-12);
        for s in &out.steps {
            assert_eq!(t.value(s.log_probs).ncols(), VOCAB_SIZE);
            let total: f64 = t.value(s.log_probs).iter().map(|v| v.exp()).sum();
            assert!((total - 1.0).abs() < 1e-9);
            assert!(s.attention.iter().all(|&w| w >= 0.0));
            assert!((s.attention.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn teacher_forcing_inputs_ignore_model_outputs() {
        let (mut m, x, target) = fixture();
        let run = |m: &Model| {
            let mut t = Tape::new(m.params());
            let enc = m.encode(&mut t, &x).unwrap();
            let out = m
                .decode_tree_number(&mut t, &enc, Some(&target), 1.0, &mut ChaCha8Rng::seed_from_u64(0))
                .unwrap();
            (out.step_inputs, out.predicted)
        };
        let (inputs_a, pred_a) = run(&m);
        let out_b = m.ids().out_b;
        m.params_mut().get_mut(out_b).mapv_inplace(|_| 0.0);
        m.params_mut().get_mut(out_b)[[0, 999]] = 50.0;
        let (inputs_b, pred_b) = run(&m);
        assert_eq!(inputs_a, target[..7].to_vec());
        assert_eq!(inputs_a, inputs_b);
        assert_ne!(pred_a, pred_b);
    }

    #[test]
    fn single_description_position_returns_its_state() {
        let m = tiny(EncoderKind::BagOfEmbeddings);
        let x = m.input("Covid", "viral", "covid").unwrap();
        let mut t = Tape::new(m.params());
        let enc = m.encode(&mut t, &x).unwrap();
        let memory = m.memory(&mut t, &enc);
        let (s, st) = memory.states.unwrap();
        let h = enc.cls_state;
        let scores = t.matmul(h, st);
        let w = t.softmax_rows(scores, None);
        let applied = t.matmul(w, s);
        let pos = enc.desc_positions();
        assert_eq!(pos.len(), 1);
        let expected = t.value(enc.seq_states).row(pos[0]).to_owned();
        assert_eq!(t.value(applied).row(0), expected);
    }

    #[test]
    fn generation_stops_and_no_description_is_finite() {
        let m = tiny(EncoderKind::SelfAttention);
        let x = m.input("Covid", "", "").unwrap();
        let seq = m.generate(&x).unwrap();
        assert!(seq.len() <= MAX_TARGET_LEN + 1);
        assert_eq!(seq[0], BOS);
    }
}
