//! Small neural transducer: recurrent encoder, recurrent prediction
//! network, feed-forward joint with tanh, and the exact sequence loss via
//! a log-space forward recursion over the alignment lattice.
//!
//! Symbol `0` is the blank; words occupy ids `1..=vocab_words`. The loss
//! follows the standard formulation in which a path terminates by
//! emitting blank at the final frame, so every complete alignment for a
//! `U`-label sequence over `T` frames has exactly `T` blanks and `U`
//! labels.
//!
//! Forward math exists twice on purpose — once recorded on a [`Tape`] for
//! gradients, once tape-free for decoding and evaluation — but both call
//! the same kernels in the same order, so their values agree bit-for-bit
//! (covered by tests).

use crate::error::{Error, Result};
use crate::numerics::tape::{Tape, Var};
use crate::numerics::{kernels, Layout, ParamVector};
use crate::scalar::Real;
use std::sync::Arc;

/// Blank / start-of-sequence symbol id.
pub const BLANK: u32 = 0;

/// Desk-scale guard on label length.
pub const MAX_LABEL_LEN: usize = 64;

/// Network dimensions; the vocabulary excludes blank.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelDims {
    pub feature_dim: usize,
    pub encoder_hidden: usize,
    pub prediction_hidden: usize,
    pub embed_dim: usize,
    pub joint_hidden: usize,
    pub vocab_words: usize,
}

/// Segment indices into the model layout, in declaration order.
mod seg {
    pub const ENC_GATE_WX: usize = 0;
    pub const ENC_GATE_WH: usize = 1;
    pub const ENC_GATE_B: usize = 2;
    pub const ENC_CAND_WX: usize = 3;
    pub const ENC_CAND_WH: usize = 4;
    pub const ENC_CAND_B: usize = 5;
    pub const PRED_EMBED: usize = 6;
    pub const PRED_GATE_WX: usize = 7;
    pub const PRED_GATE_WH: usize = 8;
    pub const PRED_GATE_B: usize = 9;
    pub const PRED_CAND_WX: usize = 10;
    pub const PRED_CAND_WH: usize = 11;
    pub const PRED_CAND_B: usize = 12;
    pub const JOINT_ENC_W: usize = 13;
    pub const JOINT_PRED_W: usize = 14;
    pub const JOINT_B: usize = 15;
    pub const JOINT_OUT_W: usize = 16;
    pub const JOINT_OUT_B: usize = 17;
}

impl ModelDims {
    /// Alphabet size: words plus blank.
    pub fn alphabet(&self) -> usize {
        self.vocab_words + 1
    }

    pub fn layout(&self) -> Layout {
        let (d, he, hp, e, hj, a) = (
            self.feature_dim,
            self.encoder_hidden,
            self.prediction_hidden,
            self.embed_dim,
            self.joint_hidden,
            self.alphabet(),
        );
        Layout::new(vec![
            ("enc.gate_wx".into(), he, d),
            ("enc.gate_wh".into(), he, he),
            ("enc.gate_b".into(), he, 1),
            ("enc.cand_wx".into(), he, d),
            ("enc.cand_wh".into(), he, he),
            ("enc.cand_b".into(), he, 1),
            ("pred.embed".into(), a, e),
            ("pred.gate_wx".into(), hp, e),
            ("pred.gate_wh".into(), hp, hp),
            ("pred.gate_b".into(), hp, 1),
            ("pred.cand_wx".into(), hp, e),
            ("pred.cand_wh".into(), hp, hp),
            ("pred.cand_b".into(), hp, 1),
            ("joint.enc_w".into(), hj, he),
            ("joint.pred_w".into(), hj, hp),
            ("joint.b".into(), hj, 1),
            ("joint.out_w".into(), a, hj),
            ("joint.out_b".into(), a, 1),
        ])
    }
}

/// T x D matrix of synthetic feature frames; T >= 1 and all entries finite.
/// Serializable for reporting; never deserialized (frames are regenerated
/// from seeds instead).
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct FeatureSequence<T> {
    data: Vec<T>,
    frames: usize,
    dim: usize,
}

impl<T: Real> FeatureSequence<T> {
    pub fn new(frames: usize, dim: usize, data: Vec<T>) -> Result<Self> {
        if frames == 0 {
            return Err(Error::EmptyInput("feature sequence needs at least one frame"));
        }
        if data.len() != frames * dim {
            return Err(Error::DimMismatch(format!(
                "feature data {} != {} frames x {} dims",
                data.len(),
                frames,
                dim
            )));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::DimMismatch("non-finite feature entry".into()));
        }
        Ok(FeatureSequence { data, frames, dim })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn frame(&self, t: usize) -> &[T] {
        &self.data[t * self.dim..(t + 1) * self.dim]
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }
}

/// Checks label ids fall inside `1..=vocab_words`.
pub fn validate_tokens(tokens: &[u32], vocab_words: usize) -> Result<()> {
    if tokens.len() > MAX_LABEL_LEN {
        return Err(Error::DimMismatch(format!(
            "label length {} exceeds bound {}",
            tokens.len(),
            MAX_LABEL_LEN
        )));
    }
    for &t in tokens {
        if t == BLANK || t as usize > vocab_words {
            return Err(Error::TokenOutOfVocab { id: t, vocab: vocab_words as u32 });
        }
    }
    Ok(())
}

/// Log posterior over symbols at every lattice node `(t, u)`.
#[derive(Debug, Clone)]
pub struct LogLattice<T> {
    data: Vec<T>,
    pub t_len: usize,
    /// `U + 1` prediction states.
    pub u_len: usize,
    pub alphabet: usize,
}

impl<T: Real> LogLattice<T> {
    fn new(t_len: usize, u_len: usize, alphabet: usize) -> Self {
        LogLattice { data: vec![T::zero(); t_len * u_len * alphabet], t_len, u_len, alphabet }
    }

    #[inline]
    pub fn at(&self, t: usize, u: usize, k: usize) -> T {
        self.data[(t * self.u_len + u) * self.alphabet + k]
    }

    fn node_mut(&mut self, t: usize, u: usize) -> &mut [T] {
        let base = (t * self.u_len + u) * self.alphabet;
        &mut self.data[base..base + self.alphabet]
    }

    pub fn node(&self, t: usize, u: usize) -> &[T] {
        let base = (t * self.u_len + u) * self.alphabet;
        &self.data[base..base + self.alphabet]
    }
}

/// Prediction-network state paired with its joint-space projection.
#[derive(Debug, Clone)]
pub struct PredState<T> {
    pub hidden: Vec<T>,
    pub proj: Vec<T>,
}

/// Reusable buffers for [`TransducerModel::joint_log_probs_into`].
#[derive(Debug, Clone)]
pub struct JointScratch<T> {
    s: Vec<T>,
    th: Vec<T>,
    logits: Vec<T>,
    lb: Vec<T>,
}

/// The transducer: dimensions plus a parameter vector in the matching layout.
#[derive(Debug, Clone)]
pub struct TransducerModel<T> {
    pub dims: ModelDims,
    pub params: ParamVector<T>,
}

impl<T: Real> TransducerModel<T> {
    pub fn init_random(dims: ModelDims, rng: &mut impl rand::Rng) -> Self {
        let layout = Arc::new(dims.layout());
        TransducerModel { dims, params: ParamVector::random(layout, rng) }
    }

    pub fn with_params(dims: ModelDims, params: ParamVector<T>) -> Result<Self> {
        if params.layout().total_len() != dims.layout().total_len() {
            return Err(Error::LayoutMismatch("params do not fit model dims".into()));
        }
        Ok(TransducerModel { dims, params })
    }

    pub fn layout(&self) -> &Arc<Layout> {
        self.params.layout()
    }

    fn seg(&self, idx: usize) -> &[T] {
        self.params.segment_values(idx)
    }

    /// One gated-cell step: `h' = h + g (c - h)` with
    /// `g = sigmoid(Wg x + Ug h + bg)`, `c = tanh(Wc x + Uc h + bc)`.
    fn cell_step(
        &self,
        wx_g: usize,
        wh_g: usize,
        b_g: usize,
        wx_c: usize,
        wh_c: usize,
        b_c: usize,
        hidden_dim: usize,
        x: &[T],
        h: &[T],
    ) -> Vec<T> {
        let in_dim = x.len();
        let mut m1 = vec![T::zero(); hidden_dim];
        let mut m2 = vec![T::zero(); hidden_dim];
        let mut s = vec![T::zero(); hidden_dim];
        let mut g = vec![T::zero(); hidden_dim];
        kernels::matvec(self.seg(wx_g), hidden_dim, in_dim, x, &mut m1);
        kernels::matvec(self.seg(wh_g), hidden_dim, hidden_dim, h, &mut m2);
        kernels::add(&m1, &m2, &mut s);
        let mut sb = vec![T::zero(); hidden_dim];
        kernels::add(&s, self.seg(b_g), &mut sb);
        kernels::sigmoid(&sb, &mut g);

        let mut c = vec![T::zero(); hidden_dim];
        kernels::matvec(self.seg(wx_c), hidden_dim, in_dim, x, &mut m1);
        kernels::matvec(self.seg(wh_c), hidden_dim, hidden_dim, h, &mut m2);
        kernels::add(&m1, &m2, &mut s);
        kernels::add(&s, self.seg(b_c), &mut sb);
        kernels::tanh(&sb, &mut c);

        let mut diff = vec![T::zero(); hidden_dim];
        kernels::sub(&c, h, &mut diff);
        let mut gd = vec![T::zero(); hidden_dim];
        kernels::mul(&g, &diff, &mut gd);
        let mut out = vec![T::zero(); hidden_dim];
        kernels::add(h, &gd, &mut out);
        out
    }

    /// Encoder states projected into joint space with the joint bias
    /// folded in: one vector per frame.
    pub fn encode(&self, x: &FeatureSequence<T>) -> Result<Vec<Vec<T>>> {
        if x.dim() != self.dims.feature_dim {
            return Err(Error::DimMismatch(format!(
                "feature dim {} != model feature dim {}",
                x.dim(),
                self.dims.feature_dim
            )));
        }
        let he = self.dims.encoder_hidden;
        let hj = self.dims.joint_hidden;
        let mut h = vec![T::zero(); he];
        let mut out = Vec::with_capacity(x.frames());
        for t in 0..x.frames() {
            h = self.cell_step(
                seg::ENC_GATE_WX,
                seg::ENC_GATE_WH,
                seg::ENC_GATE_B,
                seg::ENC_CAND_WX,
                seg::ENC_CAND_WH,
                seg::ENC_CAND_B,
                he,
                x.frame(t),
                &h,
            );
            let mut proj = vec![T::zero(); hj];
            kernels::matvec(self.seg(seg::JOINT_ENC_W), hj, he, &h, &mut proj);
            let mut projb = vec![T::zero(); hj];
            kernels::add(&proj, self.seg(seg::JOINT_B), &mut projb);
            out.push(projb);
        }
        Ok(out)
    }

    fn pred_from_hidden(&self, hidden: Vec<T>) -> PredState<T> {
        let hj = self.dims.joint_hidden;
        let mut proj = vec![T::zero(); hj];
        kernels::matvec(self.seg(seg::JOINT_PRED_W), hj, self.dims.prediction_hidden, &hidden, &mut proj);
        PredState { hidden, proj }
    }

    /// Prediction state after consuming only the start symbol.
    pub fn pred_start(&self) -> PredState<T> {
        let hp = self.dims.prediction_hidden;
        let h0 = vec![T::zero(); hp];
        let h = self.pred_cell(&h0, BLANK);
        self.pred_from_hidden(h)
    }

    /// Advances the prediction state by one emitted label.
    pub fn pred_step(&self, state: &PredState<T>, token: u32) -> PredState<T> {
        let h = self.pred_cell(&state.hidden, token);
        self.pred_from_hidden(h)
    }

    fn pred_cell(&self, h: &[T], token: u32) -> Vec<T> {
        let e = self.dims.embed_dim;
        let row = token as usize;
        let emb = &self.seg(seg::PRED_EMBED)[row * e..(row + 1) * e];
        self.cell_step(
            seg::PRED_GATE_WX,
            seg::PRED_GATE_WH,
            seg::PRED_GATE_B,
            seg::PRED_CAND_WX,
            seg::PRED_CAND_WH,
            seg::PRED_CAND_B,
            self.dims.prediction_hidden,
            emb,
            h,
        )
    }

    /// Log posterior over the alphabet for one `(frame, prediction)` pair.
    pub fn joint_log_probs(&self, enc_projb: &[T], pred_proj: &[T]) -> Vec<T> {
        let mut scratch = self.joint_scratch();
        let mut lp = vec![T::zero(); self.dims.alphabet()];
        self.joint_log_probs_into(enc_projb, pred_proj, &mut scratch, &mut lp);
        lp
    }

    pub fn joint_scratch(&self) -> JointScratch<T> {
        JointScratch {
            s: vec![T::zero(); self.dims.joint_hidden],
            th: vec![T::zero(); self.dims.joint_hidden],
            logits: vec![T::zero(); self.dims.alphabet()],
            lb: vec![T::zero(); self.dims.alphabet()],
        }
    }

    /// Allocation-free twin of [`Self::joint_log_probs`] for hot loops;
    /// performs the identical kernel sequence.
    pub fn joint_log_probs_into(
        &self,
        enc_projb: &[T],
        pred_proj: &[T],
        scratch: &mut JointScratch<T>,
        out: &mut [T],
    ) {
        let hj = self.dims.joint_hidden;
        let a = self.dims.alphabet();
        kernels::add(enc_projb, pred_proj, &mut scratch.s);
        kernels::tanh(&scratch.s, &mut scratch.th);
        kernels::matvec(self.seg(seg::JOINT_OUT_W), a, hj, &scratch.th, &mut scratch.logits);
        kernels::add(&scratch.logits, self.seg(seg::JOINT_OUT_B), &mut scratch.lb);
        kernels::log_softmax(&scratch.lb, out);
    }

    /// Full grid of `log P(symbol | t, u)` for `t in 0..T`, `u in 0..=U`.
    pub fn forward_lattice(&self, x: &FeatureSequence<T>, y: &[u32]) -> Result<LogLattice<T>> {
        validate_tokens(y, self.dims.vocab_words)?;
        let enc = self.encode(x)?;
        let mut preds = Vec::with_capacity(y.len() + 1);
        preds.push(self.pred_start());
        for &tok in y {
            let next = self.pred_step(preds.last().unwrap(), tok);
            preds.push(next);
        }
        let mut lat = LogLattice::new(x.frames(), y.len() + 1, self.dims.alphabet());
        let mut scratch = self.joint_scratch();
        let mut lp = vec![T::zero(); self.dims.alphabet()];
        for (t, ep) in enc.iter().enumerate() {
            for (u, ps) in preds.iter().enumerate() {
                self.joint_log_probs_into(ep, &ps.proj, &mut scratch, &mut lp);
                lat.node_mut(t, u).copy_from_slice(&lp);
            }
        }
        Ok(lat)
    }

    /// `-log P(y | x)`, marginalizing over all monotone alignments.
    pub fn loss(&self, x: &FeatureSequence<T>, y: &[u32]) -> Result<T> {
        let lat = self.forward_lattice(x, y)?;
        Ok(-log_lik_from_lattice(&lat, y))
    }

    /// `log P(y | x)`; exactly the negated loss.
    pub fn posterior_log_prob(&self, x: &FeatureSequence<T>, y: &[u32]) -> Result<T> {
        Ok(-self.loss(x, y)?)
    }
}

/// Forward recursion over a precomputed lattice:
/// `alpha(t,u) = logaddexp(alpha(t-1,u) + blank, alpha(t,u-1) + label)`,
/// terminated by the final-frame blank.
pub fn log_lik_from_lattice<T: Real>(lat: &LogLattice<T>, y: &[u32]) -> T {
    let t_len = lat.t_len;
    let u_len = lat.u_len;
    let mut alpha = vec![T::zero(); t_len * u_len];
    for t in 1..t_len {
        alpha[t * u_len] = alpha[(t - 1) * u_len] + lat.at(t - 1, 0, BLANK as usize);
    }
    for u in 1..u_len {
        let label = y[u - 1] as usize;
        alpha[u] = alpha[u - 1] + lat.at(0, u - 1, label);
        for t in 1..t_len {
            let via_blank = alpha[(t - 1) * u_len + u] + lat.at(t - 1, u, BLANK as usize);
            let via_label = alpha[t * u_len + u - 1] + lat.at(t, u - 1, label);
            alpha[t * u_len + u] = kernels::logaddexp(via_blank, via_label);
        }
    }
    alpha[(t_len - 1) * u_len + (u_len - 1)] + lat.at(t_len - 1, u_len - 1, BLANK as usize)
}

/// Tape-recorded twin of the model forward; produces differentiable loss
/// and log-probability nodes on a [`Tape`] bound to the same parameters.
pub struct TapeModel {
    dims: ModelDims,
    enc_gate_wx: Var,
    enc_gate_wh: Var,
    enc_gate_b: Var,
    enc_cand_wx: Var,
    enc_cand_wh: Var,
    enc_cand_b: Var,
    embed: Var,
    pred_gate_wx: Var,
    pred_gate_wh: Var,
    pred_gate_b: Var,
    pred_cand_wx: Var,
    pred_cand_wh: Var,
    pred_cand_b: Var,
    joint_enc_w: Var,
    joint_pred_w: Var,
    joint_b: Var,
    joint_out_w: Var,
    joint_out_b: Var,
}

impl TapeModel {
    pub fn new<T: Real>(tape: &mut Tape<T>, dims: ModelDims) -> Self {
        TapeModel {
            dims,
            enc_gate_wx: tape.param(seg::ENC_GATE_WX),
            enc_gate_wh: tape.param(seg::ENC_GATE_WH),
            enc_gate_b: tape.param(seg::ENC_GATE_B),
            enc_cand_wx: tape.param(seg::ENC_CAND_WX),
            enc_cand_wh: tape.param(seg::ENC_CAND_WH),
            enc_cand_b: tape.param(seg::ENC_CAND_B),
            embed: tape.param(seg::PRED_EMBED),
            pred_gate_wx: tape.param(seg::PRED_GATE_WX),
            pred_gate_wh: tape.param(seg::PRED_GATE_WH),
            pred_gate_b: tape.param(seg::PRED_GATE_B),
            pred_cand_wx: tape.param(seg::PRED_CAND_WX),
            pred_cand_wh: tape.param(seg::PRED_CAND_WH),
            pred_cand_b: tape.param(seg::PRED_CAND_B),
            joint_enc_w: tape.param(seg::JOINT_ENC_W),
            joint_pred_w: tape.param(seg::JOINT_PRED_W),
            joint_b: tape.param(seg::JOINT_B),
            joint_out_w: tape.param(seg::JOINT_OUT_W),
            joint_out_b: tape.param(seg::JOINT_OUT_B),
        }
    }

    fn cell_step<T: Real>(
        &self,
        tape: &mut Tape<T>,
        wx_g: Var,
        wh_g: Var,
        b_g: Var,
        wx_c: Var,
        wh_c: Var,
        b_c: Var,
        x: Var,
        h: Var,
    ) -> Var {
        let m1 = tape.matvec(wx_g, x);
        let m2 = tape.matvec(wh_g, h);
        let s = tape.add(m1, m2);
        let sb = tape.add(s, b_g);
        let g = tape.sigmoid(sb);

        let m1 = tape.matvec(wx_c, x);
        let m2 = tape.matvec(wh_c, h);
        let s = tape.add(m1, m2);
        let sb = tape.add(s, b_c);
        let c = tape.tanh(sb);

        let diff = tape.sub(c, h);
        let gd = tape.mul(g, diff);
        tape.add(h, gd)
    }

    /// Encoder states projected into joint space (bias folded in).
    pub fn encode<T: Real>(&self, tape: &mut Tape<T>, x: &FeatureSequence<T>) -> Result<Vec<Var>> {
        if x.dim() != self.dims.feature_dim {
            return Err(Error::DimMismatch(format!(
                "feature dim {} != model feature dim {}",
                x.dim(),
                self.dims.feature_dim
            )));
        }
        let mut h = tape.constant(vec![T::zero(); self.dims.encoder_hidden]);
        let mut out = Vec::with_capacity(x.frames());
        for t in 0..x.frames() {
            let xv = tape.constant(x.frame(t).to_vec());
            h = self.cell_step(
                tape,
                self.enc_gate_wx,
                self.enc_gate_wh,
                self.enc_gate_b,
                self.enc_cand_wx,
                self.enc_cand_wh,
                self.enc_cand_b,
                xv,
                h,
            );
            let proj = tape.matvec(self.joint_enc_w, h);
            out.push(tape.add(proj, self.joint_b));
        }
        Ok(out)
    }

    fn pred_states<T: Real>(&self, tape: &mut Tape<T>, y: &[u32]) -> Vec<Var> {
        let mut h = tape.constant(vec![T::zero(); self.dims.prediction_hidden]);
        let mut states = Vec::with_capacity(y.len() + 1);
        let feed = |tape: &mut Tape<T>, h: Var, tok: u32| {
            let emb = tape.row(self.embed, tok as usize);
            self.cell_step(
                tape,
                self.pred_gate_wx,
                self.pred_gate_wh,
                self.pred_gate_b,
                self.pred_cand_wx,
                self.pred_cand_wh,
                self.pred_cand_b,
                emb,
                h,
            )
        };
        h = feed(tape, h, BLANK);
        states.push(tape.matvec(self.joint_pred_w, h));
        for &tok in y {
            h = feed(tape, h, tok);
            states.push(tape.matvec(self.joint_pred_w, h));
        }
        states
    }

    fn joint_log_probs<T: Real>(&self, tape: &mut Tape<T>, enc_projb: Var, pred_proj: Var) -> Var {
        let s = tape.add(enc_projb, pred_proj);
        let th = tape.tanh(s);
        let logits = tape.matvec(self.joint_out_w, th);
        let lb = tape.add(logits, self.joint_out_b);
        tape.log_softmax(lb)
    }

    /// Differentiable `log P(y | x)` reusing already-encoded frames, so
    /// several label sequences can share one encoder pass.
    pub fn log_prob_encoded<T: Real>(
        &self,
        tape: &mut Tape<T>,
        enc: &[Var],
        y: &[u32],
    ) -> Result<Var> {
        validate_tokens(y, self.dims.vocab_words)?;
        let preds = self.pred_states(tape, y);
        let t_len = enc.len();
        let u_len = y.len() + 1;

        // lattice log-probs, then the same forward recursion as inference
        let filler = tape.scalar_const(T::zero());
        let mut blank_lp = vec![filler; t_len * u_len];
        let mut label_lp = vec![filler; t_len * u_len];
        for (t, &ep) in enc.iter().enumerate() {
            for (u, &pp) in preds.iter().enumerate() {
                let lp = self.joint_log_probs(tape, ep, pp);
                blank_lp[t * u_len + u] = tape.index(lp, BLANK as usize);
                if u < y.len() {
                    label_lp[t * u_len + u] = tape.index(lp, y[u] as usize);
                }
            }
        }

        let mut alpha = vec![filler; t_len * u_len];
        alpha[0] = tape.scalar_const(T::zero());
        for t in 1..t_len {
            alpha[t * u_len] = tape.add(alpha[(t - 1) * u_len], blank_lp[(t - 1) * u_len]);
        }
        for u in 1..u_len {
            alpha[u] = tape.add(alpha[u - 1], label_lp[u - 1]);
            for t in 1..t_len {
                let via_blank = tape.add(alpha[(t - 1) * u_len + u], blank_lp[(t - 1) * u_len + u]);
                let via_label = tape.add(alpha[t * u_len + u - 1], label_lp[t * u_len + u - 1]);
                alpha[t * u_len + u] = tape.logaddexp(via_blank, via_label);
            }
        }
        Ok(tape.add(alpha[t_len * u_len - 1], blank_lp[t_len * u_len - 1]))
    }

    /// Differentiable `log P(y | x)`.
    pub fn log_prob<T: Real>(
        &self,
        tape: &mut Tape<T>,
        x: &FeatureSequence<T>,
        y: &[u32],
    ) -> Result<Var> {
        let enc = self.encode(tape, x)?;
        self.log_prob_encoded(tape, &enc, y)
    }

    /// Differentiable transducer loss `-log P(y | x)`.
    pub fn loss<T: Real>(
        &self,
        tape: &mut Tape<T>,
        x: &FeatureSequence<T>,
        y: &[u32],
    ) -> Result<Var> {
        let lp = self.log_prob(tape, x, y)?;
        Ok(tape.affine(lp, -T::one(), T::zero()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::derive_rng;

    pub(crate) fn micro_dims() -> ModelDims {
        ModelDims {
            feature_dim: 2,
            encoder_hidden: 2,
            prediction_hidden: 2,
            embed_dim: 2,
            joint_hidden: 2,
            vocab_words: 3,
        }
    }

    pub(crate) fn random_features(t: usize, d: usize, seed: u64) -> FeatureSequence<f64> {
        let mut rng = derive_rng(seed, &[21]);
        let data: Vec<f64> = (0..t * d).map(|_| rand::Rng::gen_range(&mut rng, -1.0..1.0)).collect();
        FeatureSequence::new(t, d, data).unwrap()
    }

    /// Explicit path enumeration: every interleaving of T blanks and U
    /// labels ending in blank, probabilities multiplied in prob space.
    fn brute_force_lik(lat: &LogLattice<f64>, y: &[u32]) -> f64 {
        fn go(lat: &LogLattice<f64>, y: &[u32], t: usize, u: usize, acc: f64) -> f64 {
            if t == lat.t_len {
                return if u == y.len() { acc } else { 0.0 };
            }
            let mut total = go(lat, y, t + 1, u, acc * lat.at(t, u, BLANK as usize).exp());
            if u < y.len() {
                total += go(lat, y, t, u + 1, acc * lat.at(t, u, y[u] as usize).exp());
            }
            total
        }
        go(lat, y, 0, 0, 1.0)
    }

    fn binomial(n: usize, k: usize) -> f64 {
        let mut out = 1.0;
        for i in 0..k {
            out = out * (n - i) as f64 / (i + 1) as f64;
        }
        out
    }

    #[test]
    fn lattice_nodes_are_distributions() {
        let dims = micro_dims();
        let mut rng = derive_rng(7, &[1]);
        let model = TransducerModel::<f64>::init_random(dims, &mut rng);
        let x = random_features(3, 2, 3);
        let lat = model.forward_lattice(&x, &[1, 2]).unwrap();
        for t in 0..lat.t_len {
            for u in 0..lat.u_len {
                let total: f64 = lat.node(t, u).iter().map(|v| v.exp()).sum();
                assert!((total - 1.0).abs() < 1e-9, "node ({t},{u}) sums to {total}");
            }
        }
    }

    #[test]
    fn single_frame_empty_label_has_one_node() {
        let dims = micro_dims();
        let mut rng = derive_rng(8, &[1]);
        let model = TransducerModel::<f64>::init_random(dims, &mut rng);
        let x = random_features(1, 2, 4);
        let lat = model.forward_lattice(&x, &[]).unwrap();
        assert_eq!((lat.t_len, lat.u_len), (1, 1));
    }

    #[test]
    fn lattice_recomputation_is_bit_exact() {
        let dims = micro_dims();
        let mut rng = derive_rng(9, &[1]);
        let model = TransducerModel::<f64>::init_random(dims, &mut rng);
        let x = random_features(4, 2, 5);
        let a = model.forward_lattice(&x, &[2, 1]).unwrap();
        let b = model.forward_lattice(&x, &[2, 1]).unwrap();
        for t in 0..a.t_len {
            for u in 0..a.u_len {
                for k in 0..a.alphabet {
                    assert_eq!(a.at(t, u, k).to_bits(), b.at(t, u, k).to_bits());
                }
            }
        }
    }

    #[test]
    fn loss_matches_explicit_two_path_enumeration() {
        // T=2, U=1: exactly the two blank/label orderings
        let dims = micro_dims();
        let mut rng = derive_rng(10, &[1]);
        let model = TransducerModel::<f64>::init_random(dims, &mut rng);
        let x = random_features(2, 2, 6);
        let y = [1u32];
        let lat = model.forward_lattice(&x, &y).unwrap();
        let p_manual = lat.at(0, 0, 1).exp() * lat.at(0, 1, 0).exp() * lat.at(1, 1, 0).exp()
            + lat.at(0, 0, 0).exp() * lat.at(1, 0, 1).exp() * lat.at(1, 1, 0).exp();
        let loss = model.loss(&x, &y).unwrap();
        assert!(((-loss).exp() - p_manual).abs() < 1e-12);
    }

    #[test]
    fn loss_matches_brute_force_alignment_sum_small_grid() {
        for (t, u) in [(1usize, 0usize), (2, 1), (3, 2), (4, 4), (4, 3), (2, 2)] {
            let dims = micro_dims();
            let mut rng = derive_rng(11 + t as u64 * 10 + u as u64, &[1]);
            let model = TransducerModel::<f64>::init_random(dims, &mut rng);
            let x = random_features(t, 2, 100 + t as u64);
            let y: Vec<u32> = (0..u).map(|i| (i % 3 + 1) as u32).collect();
            let lat = model.forward_lattice(&x, &y).unwrap();
            let brute = brute_force_lik(&lat, &y);
            let loss = model.loss(&x, &y).unwrap();
            assert!(
                ((-loss).exp() - brute).abs() < 1e-9,
                "T={t} U={u}: exp(-loss)={} brute={brute}",
                (-loss).exp()
            );
        }
    }

    #[test]
    fn uniform_joint_matches_path_counting() {
        // zero params make every node's posterior uniform over the alphabet
        for (t, u) in [(2usize, 1usize), (3, 2), (4, 3), (4, 4)] {
            let dims = micro_dims();
            let layout = Arc::new(dims.layout());
            let model =
                TransducerModel::with_params(dims, ParamVector::<f64>::zeros(layout)).unwrap();
            let x = random_features(t, 2, 200 + t as u64);
            let y: Vec<u32> = (0..u).map(|i| (i % 3 + 1) as u32).collect();
            let a = dims.alphabet() as f64;
            let expected = binomial(t - 1 + u, u) * a.powi(-((t + u) as i32));
            let loss = model.loss(&x, &y).unwrap();
            assert!(
                ((-loss).exp() - expected).abs() < 1e-12,
                "T={t} U={u}: got {} want {expected}",
                (-loss).exp()
            );
        }
    }

    #[test]
    fn loss_is_nonnegative() {
        for seed in 0..5 {
            let dims = micro_dims();
            let mut rng = derive_rng(30 + seed, &[1]);
            let model = TransducerModel::<f64>::init_random(dims, &mut rng);
            let x = random_features(3, 2, 40 + seed);
            assert!(model.loss(&x, &[1, 2]).unwrap() >= 0.0);
        }
    }

    #[test]
    fn posterior_is_negated_loss_exactly() {
        let dims = micro_dims();
        let mut rng = derive_rng(31, &[1]);
        let model = TransducerModel::<f64>::init_random(dims, &mut rng);
        let x = random_features(3, 2, 41);
        let loss = model.loss(&x, &[2]).unwrap();
        let lp = model.posterior_log_prob(&x, &[2]).unwrap();
        assert_eq!(lp.to_bits(), (-loss).to_bits());
    }

    #[test]
    fn impossible_token_sends_log_prob_below_minus_thirty() {
        // clamp the output bias so token 3 is effectively impossible
        let dims = micro_dims();
        let mut rng = derive_rng(32, &[1]);
        let base = TransducerModel::<f64>::init_random(dims, &mut rng);
        let layout = base.params.layout().clone();
        let mut values = base.params.values().to_vec();
        let seg = layout.segment(layout.index_of("joint.out_b").unwrap()).clone();
        values[seg.offset + 3] = -80.0;
        let model =
            TransducerModel::with_params(dims, ParamVector::from_values(layout, values).unwrap())
                .unwrap();
        let x = random_features(3, 2, 42);
        let lp_base = model.posterior_log_prob(&x, &[1]).unwrap();
        let lp_ext = model.posterior_log_prob(&x, &[1, 3]).unwrap();
        assert!(lp_ext < -30.0, "got {lp_ext}");
        assert!(lp_ext < lp_base);
    }

    #[test]
    fn total_probability_sums_to_one_on_blank_heavy_instance() {
        // blank-dominant bias keeps the mass of >T-label paths below 1e-9,
        // so enumerating U <= T captures the full distribution
        let dims = micro_dims();
        let mut rng = derive_rng(33, &[1]);
        let base = TransducerModel::<f64>::init_random(dims, &mut rng);
        let layout = base.params.layout().clone();
        let mut values = base.params.values().to_vec();
        let seg = layout.segment(layout.index_of("joint.out_b").unwrap()).clone();
        values[seg.offset] = 12.0;
        for k in 1..dims.alphabet() {
            values[seg.offset + k] = -12.0;
        }
        let model =
            TransducerModel::with_params(dims, ParamVector::from_values(layout, values).unwrap())
                .unwrap();
        let x = random_features(2, 2, 43);

        let mut total = 0.0;
        let v = dims.vocab_words as u32;
        let mut seqs: Vec<Vec<u32>> = vec![vec![]];
        for len in 1..=x.frames() {
            let mut level: Vec<Vec<u32>> = Vec::new();
            fn extend(prefix: Vec<u32>, v: u32, len: usize, out: &mut Vec<Vec<u32>>) {
                if prefix.len() == len {
                    out.push(prefix);
                    return;
                }
                for tok in 1..=v {
                    let mut p = prefix.clone();
                    p.push(tok);
                    extend(p, v, len, out);
                }
            }
            extend(Vec::new(), v, len, &mut level);
            seqs.extend(level);
        }
        for y in &seqs {
            total += model.posterior_log_prob(&x, y).unwrap().exp();
        }
        assert!((total - 1.0).abs() < 1e-6, "total={total}");
    }

    #[test]
    fn tape_forward_matches_inference_bitwise() {
        let dims = micro_dims();
        let mut rng = derive_rng(34, &[1]);
        let model = TransducerModel::<f64>::init_random(dims, &mut rng);
        let x = random_features(4, 2, 44);
        let y = [1u32, 3];
        let inference = model.loss(&x, &y).unwrap();
        let mut tape = Tape::new(&model.params);
        let tm = TapeModel::new(&mut tape, dims);
        let loss = tm.loss(&mut tape, &x, &y).unwrap();
        assert_eq!(tape.scalar(loss).to_bits(), inference.to_bits());
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        for seed in 0..6u64 {
            let dims = micro_dims();
            let mut rng = derive_rng(50 + seed, &[1]);
            let model = TransducerModel::<f64>::init_random(dims, &mut rng);
            let x = random_features(3, 2, 60 + seed);
            let y = [2u32, 1];

            let mut tape = Tape::new(&model.params);
            let tm = TapeModel::new(&mut tape, dims);
            let loss = tm.loss(&mut tape, &x, &y).unwrap();
            let grad = tape.backprop(loss).unwrap();

            let h = 1e-4;
            let mut fd = Vec::new();
            for i in 0..model.params.values().len() {
                let mut hi = model.params.values().to_vec();
                hi[i] += h;
                let mut lo = model.params.values().to_vec();
                lo[i] -= h;
                let mhi = TransducerModel::with_params(
                    dims,
                    ParamVector::from_values(model.params.layout().clone(), hi).unwrap(),
                )
                .unwrap();
                let mlo = TransducerModel::with_params(
                    dims,
                    ParamVector::from_values(model.params.layout().clone(), lo).unwrap(),
                )
                .unwrap();
                fd.push((mhi.loss(&x, &y).unwrap() - mlo.loss(&x, &y).unwrap()) / (2.0 * h));
            }
            let norm: f64 = fd.iter().map(|v| v * v).sum::<f64>().sqrt();
            let diff: f64 = grad
                .values()
                .iter()
                .zip(&fd)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            assert!(diff <= 1e-3 * norm.max(1e-8), "seed {seed}: rel {}", diff / norm);
        }
    }

    #[test]
    fn rejects_invalid_inputs() {
        let dims = micro_dims();
        let mut rng = derive_rng(35, &[1]);
        let model = TransducerModel::<f64>::init_random(dims, &mut rng);
        assert!(matches!(
            FeatureSequence::<f64>::new(0, 2, vec![]),
            Err(Error::EmptyInput(_))
        ));
        let x = random_features(2, 2, 45);
        assert!(matches!(
            model.loss(&x, &[9]),
            Err(Error::TokenOutOfVocab { .. })
        ));
    }

    #[test]
    fn works_at_f32_precision_too() {
        let dims = micro_dims();
        let mut rng = derive_rng(36, &[1]);
        let model64 = TransducerModel::<f64>::init_random(dims, &mut rng);
        let values32: Vec<f32> = model64.params.values().iter().map(|&v| v as f32).collect();
        let layout = Arc::new(dims.layout());
        let model32 = TransducerModel::with_params(
            dims,
            ParamVector::from_values(layout, values32).unwrap(),
        )
        .unwrap();
        let x64 = random_features(3, 2, 46);
        let data32: Vec<f32> = x64.data().iter().map(|&v| v as f32).collect();
        let x32 = FeatureSequence::new(3, 2, data32).unwrap();
        let l64 = model64.loss(&x64, &[1, 2]).unwrap();
        let l32 = model32.loss(&x32, &[1, 2]).unwrap();
        assert!((l64 - l32 as f64).abs() < 1e-4);
    }
}
