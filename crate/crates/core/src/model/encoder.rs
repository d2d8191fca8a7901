use crate::tape::{Mat, Tape, Var};

use super::{EncoderKind, Model, ModelError, ModelInput, Pooling};

/// Encoder states recorded on a tape.
#[derive(Debug, Clone)]
pub struct EncoderOutput {
    /// `L × m` per-position states.
    pub seq_states: Var,
    /// `1 × m` first-position state.
    pub cls_state: Var,
    pub desc_mask: Vec<bool>,
}

impl EncoderOutput {
    pub fn desc_positions(&self) -> Vec<usize> {
        self.desc_mask
            .iter()
            .enumerate()
            .filter_map(|(i, &d)| d.then_some(i))
            .collect()
    }

    /// States with every non-description row zeroed, as the decoder sees them.
    pub fn attention_view(&self, tape: &Tape) -> Mat {
        let mut m = tape.value(self.seq_states).clone();
        for (mut row, &keep) in m.rows_mut().into_iter().zip(&self.desc_mask) {
            if !keep {
                row.fill(0.0);
            }
        }
        m
    }
}

fn description_positions(input: &ModelInput) -> Vec<usize> {
    input
        .desc_mask
        .iter()
        .enumerate()
        .filter_map(|(i, &d)| d.then_some(i))
        .collect()
}

/// `softmax(q Xᵀ) X` over the given rows of `x`; zeros when there are none.
fn attend(tape: &mut Tape, q: Var, x: Var, rows: &[usize]) -> Var {
    if rows.is_empty() {
        return tape.mean_rows(x, rows);
    }
    let keys = tape.select_rows(x, rows);
    let kt = tape.transpose(keys);
    let scores = tape.matmul(q, kt);
    let a = tape.softmax_rows(scores, None);
    tape.matmul(a, keys)
}

impl Model {
    pub fn encode(&self, tape: &mut Tape, input: &ModelInput) -> Result<EncoderOutput, ModelError> {
        let max = self.config.encoder.max_len;
        if input.len() > max {
            return Err(ModelError::SequenceTooLong { len: input.len(), max });
        }
        if input.is_empty() {
            return Err(ModelError::BadConfig("empty input".into()));
        }
        let ids = self.ids();
        let rows: Vec<usize> = input.ids.iter().map(|&i| i as usize).collect();
        let segs: Vec<usize> = input.segments.iter().map(|&s| s as usize).collect();
        let tok = tape.gather(ids.tok_emb, &rows);
        let seg = tape.gather(ids.seg_emb, &segs);
        let x = tape.add(tok, seg);
        let seq = match self.config.encoder.kind {
            EncoderKind::BagOfEmbeddings => self.bag(tape, x, input),
            EncoderKind::SelfAttention => self.attention_stack(tape, x),
        };
        let cls = tape.select_rows(seq, &[0]);
        Ok(EncoderOutput {
            seq_states: seq,
            cls_state: cls,
            desc_mask: input.desc_mask.clone(),
        })
    }

    /// Position-wise `tanh(x W + b)`. The first state is
    /// `tanh([t; d; v; t⊙a(t); d⊙a(d)] W_pool + b_pool)` over the mean term (t),
    /// description (d) and abstract (v) embeddings, where `a(q)` is the
    /// dot-product attention read of the abstract positions by `q`.
    fn bag(&self, tape: &mut Tape, x: Var, input: &ModelInput) -> Var {
        let b = self.ids().bag.as_ref().expect("bag encoder parameters");
        let w_tok = tape.param(b.w_tok);
        let b_tok = tape.param(b.b_tok);
        let w_pool = tape.param(b.w_pool);
        let b_pool = tape.param(b.b_pool);
        let h = tape.matmul(x, w_tok);
        let h = tape.add_row(h, b_tok);
        let states = tape.tanh(h);
        let desc = description_positions(input);
        let t = tape.mean_rows(x, &input.term_positions);
        let d = tape.mean_rows(x, &desc);
        let v = tape.mean_rows(x, &input.abstract_positions);
        let ut = attend(tape, t, x, &input.abstract_positions);
        let ud = attend(tape, d, x, &input.abstract_positions);
        let tv = tape.mul(t, ut);
        let dv = tape.mul(d, ud);
        let joint = tape.concat_cols(&[t, d, v, tv, dv]);
        let first = tape.matmul(joint, w_pool);
        let first = tape.add_row(first, b_pool);
        let first = tape.tanh(first);
        let rest: Vec<usize> = (1..input.len()).collect();
        if rest.is_empty() {
            return first;
        }
        let rest = tape.select_rows(states, &rest);
        tape.concat_rows(&[first, rest])
    }

    fn attention_stack(&self, tape: &mut Tape, mut x: Var) -> Var {
        let m = self.config.encoder.width;
        let heads = self.config.encoder.heads;
        let dh = m / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        for layer in &self.ids().layers {
            let wq = tape.param(layer.wq);
            let wk = tape.param(layer.wk);
            let wv = tape.param(layer.wv);
            let q = tape.matmul(x, wq);
            let k = tape.matmul(x, wk);
            let v = tape.matmul(x, wv);
            let mut outs = Vec::with_capacity(heads);
            for h in 0..heads {
                let (s, e) = (h * dh, (h + 1) * dh);
                let qh = tape.slice_cols(q, s, e);
                let kh = tape.slice_cols(k, s, e);
                let vh = tape.slice_cols(v, s, e);
                let kt = tape.transpose(kh);
                let scores = tape.matmul(qh, kt);
                let scores = tape.scale(scores, scale);
                let a = tape.softmax_rows(scores, None);
                outs.push(tape.matmul(a, vh));
            }
            let cat = tape.concat_cols(&outs);
            let wo = tape.param(layer.wo);
            let o = tape.matmul(cat, wo);
            x = tape.add(x, o);
            let w1 = tape.param(layer.w1);
            let b1 = tape.param(layer.b1);
            let w2 = tape.param(layer.w2);
            let b2 = tape.param(layer.b2);
            let f = tape.matmul(x, w1);
            let f = tape.add_row(f, b1);
            let f = tape.tanh(f);
            let f = tape.matmul(f, w2);
            let f = tape.add_row(f, b2);
            x = tape.add(x, f);
        }
        x
    }

    /// Logit of the matching head on the first-position state.
    pub fn head_logit(&self, tape: &mut Tape, enc: &EncoderOutput) -> Var {
        let w = tape.param(self.ids().head_w);
        let b = tape.param(self.ids().head_b);
        let z = tape.matmul(enc.cls_state, w);
        tape.add(z, b)
    }

    /// Matching probability in `(0, 1)`.
    pub fn classify(&self, input: &ModelInput) -> Result<f64, ModelError> {
        let mut tape = Tape::new(&self.params);
        let enc = self.encode(&mut tape, input)?;
        let z = self.head_logit(&mut tape, &enc);
        let p = tape.sigmoid(z);
        Ok(tape.scalar(p))
    }

    /// Vector for a label encoded alone (empty abstract).
    pub fn label_embedding(&self, term: &str, description: &str, pooling: Pooling) -> Result<Vec<f64>, ModelError> {
        let input = self.input(term, description, "")?;
        let mut tape = Tape::new(&self.params);
        let enc = self.encode(&mut tape, &input)?;
        let states = tape.value(enc.seq_states);
        Ok(match pooling {
            Pooling::FirstPosition => states.row(0).to_vec(),
            Pooling::Mean => {
                let rows = &input.label_positions;
                let mut acc = vec![0.0; states.ncols()];
                for &r in rows {
                    for (a, v) in acc.iter_mut().zip(states.row(r)) {
                        *a += v;
                    }
                }
                let n = rows.len().max(1) as f64;
                acc.iter().map(|a| a / n).collect()
            }
        })
    }
}
