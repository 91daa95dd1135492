//! Stage one: word+character representation, bidirectional variational LSTM
//! and Monte-Carlo inference of draft labels with entropy uncertainty.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;

use crate::autodiff::{Tape, Var, GATHER_ZERO};
use crate::data::{Sentence, Vocabulary};
use crate::error::{contract, Result};
use crate::params::{glorot, uniform, Graph, ParamId, ParamStore};
use crate::rng::{self, Rng};
use crate::tensor::{argmax, softmax_in_place, Tensor};

pub const CHAR_WINDOW: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    pub word_dim: usize,
    pub char_dim: usize,
    pub char_filters: usize,
    /// Hidden size of each direction.
    pub hidden: usize,
    pub embed_dropout: f64,
    pub recurrent_dropout: f64,
    /// Also apply the (unlocked) embedding dropout during MC inference.
    pub mc_embedding_dropout: bool,
    /// Adds a CRF transition matrix (the BiLSTM-CRF baseline).
    pub crf: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            word_dim: 100,
            char_dim: 30,
            char_filters: 50,
            hidden: 200,
            embed_dropout: 0.5,
            recurrent_dropout: 0.25,
            mc_embedding_dropout: false,
            crf: false,
        }
    }
}

impl EncoderConfig {
    pub fn input_dim(&self) -> usize {
        self.word_dim + self.char_filters
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("word_dim", self.word_dim),
            ("char_dim", self.char_dim),
            ("char_filters", self.char_filters),
            ("hidden", self.hidden),
        ] {
            if v == 0 {
                return Err(crate::Error::Config(format!("encoder.{name} must be positive")));
            }
        }
        for (name, r) in [
            ("embed_dropout", self.embed_dropout),
            ("recurrent_dropout", self.recurrent_dropout),
        ] {
            if !(0.0..1.0).contains(&r) {
                return Err(crate::Error::Config(format!("encoder.{name} must lie in [0, 1)")));
            }
        }
        Ok(())
    }
}

/// Word and character ids of one sentence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedSentence {
    pub words: Vec<usize>,
    pub chars: Vec<Vec<usize>>,
}

impl EncodedSentence {
    pub fn new(vocab: &Vocabulary, sentence: &Sentence) -> Self {
        Self {
            words: vocab.word_ids(sentence),
            chars: vocab.char_ids(sentence),
        }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }
}

/// Dropout masks for the input and hidden vectors of one direction.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskPair {
    pub z_x: Vec<f64>,
    pub z_h: Vec<f64>,
}

fn bernoulli_mask(len: usize, rate: f64, rng: &mut Rng) -> Vec<f64> {
    let keep = 1.0 - rate;
    let scale = 1.0 / keep;
    (0..len)
        .map(|_| if rng.gen::<f64>() < keep { scale } else { 0.0 })
        .collect()
}

impl MaskPair {
    pub fn ones(input: usize, hidden: usize) -> Self {
        Self {
            z_x: vec![1.0; input],
            z_h: vec![1.0; hidden],
        }
    }

    /// Entries are `Bernoulli(1-r)/(1-r)`.
    pub fn sample(input: usize, hidden: usize, rate: f64, rng: &mut Rng) -> Self {
        Self {
            z_x: bernoulli_mask(input, rate, rng),
            z_h: bernoulli_mask(hidden, rate, rng),
        }
    }
}

/// Every mask used by one pass over one sentence.
#[derive(Debug, Clone, PartialEq)]
pub struct Masks {
    pub forward: MaskPair,
    pub backward: MaskPair,
    /// Element-wise embedding dropout `[n×D]`, resampled per token.
    pub embed: Option<Tensor>,
}

/// Gate weights `[(D+H)×4H]` with column blocks g|i|f|o, and biases `[1×4H]`.
#[derive(Debug, Clone, Copy)]
pub struct GateVars {
    pub w: Var,
    pub b: Var,
}

/// One variational LSTM step on `[x⊙z_x ; h⊙z_h]`:
/// `c = tanh(g)⊙σ(i) + c_prev⊙σ(f)`, `h = σ(o)⊙tanh(c)`.
pub fn vlstm_step(
    tape: &mut Tape,
    x: Var,
    h: Var,
    c: Var,
    z_x: Var,
    z_h: Var,
    gates: GateVars,
) -> Result<(Var, Var)> {
    let d = tape.value(x).cols();
    let hd = tape.value(h).cols();
    let w = tape.value(gates.w).shape().to_vec();
    if w != [d + hd, 4 * hd]
        || tape.value(c).cols() != hd
        || tape.value(z_x).cols() != d
        || tape.value(z_h).cols() != hd
        || tape.value(gates.b).shape() != [1, 4 * hd]
    {
        return Err(contract(format!(
            "vlstm_step dimensions: x {d}, h {hd}, c {}, z_x {}, z_h {}, w {w:?}, b {:?}",
            tape.value(c).cols(),
            tape.value(z_x).cols(),
            tape.value(z_h).cols(),
            tape.value(gates.b).shape()
        )));
    }
    let xm = tape.mul_row(x, z_x)?;
    let hm = tape.mul_row(h, z_h)?;
    let xh = tape.concat_cols(&[xm, hm])?;
    let pre = tape.matmul(xh, gates.w)?;
    let pre = tape.add_row(pre, gates.b)?;
    let g = tape.slice_cols(pre, 0, hd)?;
    let i = tape.slice_cols(pre, hd, hd)?;
    let f = tape.slice_cols(pre, 2 * hd, hd)?;
    let o = tape.slice_cols(pre, 3 * hd, hd)?;
    let g = tape.tanh(g);
    let i = tape.sigmoid(i);
    let f = tape.sigmoid(f);
    let o = tape.sigmoid(o);
    let gi = tape.mul(g, i)?;
    let cf = tape.mul(c, f)?;
    let c_new = tape.add(gi, cf)?;
    let tc = tape.tanh(c_new);
    let h_new = tape.mul(o, tc)?;
    Ok((h_new, c_new))
}

const GATES: [&str; 4] = ["g", "i", "f", "o"];

#[derive(Debug, Clone, PartialEq)]
struct DirectionIds {
    w: [ParamId; 4],
    b: [ParamId; 4],
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderIds {
    pub word_emb: ParamId,
    pub char_emb: ParamId,
    pub char_conv_w: ParamId,
    pub char_conv_b: ParamId,
    fwd: DirectionIds,
    bwd: DirectionIds,
    pub out_w: ParamId,
    pub out_b: ParamId,
    pub transitions: Option<ParamId>,
}

/// Forward-pass handles on a graph.
#[derive(Debug, Clone, Copy)]
pub struct EncoderOutput {
    /// Token representations `[n×D]` before dropout.
    pub repr: Var,
    /// Concatenated forward/backward hidden states `[n×2H]`.
    pub hidden: Var,
    /// Emission scores `[n×C]`.
    pub logits: Var,
}

/// The variational BiLSTM tagger.
#[derive(Debug, Clone, PartialEq)]
pub struct BayesEncoder {
    pub config: EncoderConfig,
    pub num_labels: usize,
    pub params: ParamStore,
    pub ids: EncoderIds,
}

impl BayesEncoder {
    /// `word_table` is `[V×word_dim]`, usually from
    /// [`init_word_table`](crate::data::embeddings::init_word_table).
    pub fn new(
        config: EncoderConfig,
        word_table: Tensor,
        num_chars: usize,
        num_labels: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        config.validate()?;
        if word_table.cols() != config.word_dim || word_table.rows() == 0 {
            return Err(contract(format!(
                "word table {:?} does not have {} columns",
                word_table.shape(),
                config.word_dim
            )));
        }
        if num_labels == 0 {
            return Err(contract("an encoder needs at least one label"));
        }
        let d = config.input_dim();
        let h = config.hidden;
        let mut p = ParamStore::new();
        let word_emb = p.add("encoder.word_emb", word_table);
        let cb = libm::sqrt(3.0 / config.char_dim as f64);
        let char_emb = p.add(
            "encoder.char_emb",
            uniform(num_chars.max(1), config.char_dim, cb, rng),
        );
        let char_conv_w = p.add(
            "encoder.char_conv.w",
            glorot(CHAR_WINDOW * config.char_dim, config.char_filters, rng),
        );
        let char_conv_b = p.add("encoder.char_conv.b", Tensor::zeros(1, config.char_filters));
        let direction = |name: &str, p: &mut ParamStore, rng: &mut Rng| {
            let w = GATES.map(|gt| p.add(format!("encoder.{name}.w_{gt}"), glorot(d + h, h, rng)));
            let b = GATES.map(|gt| p.add(format!("encoder.{name}.b_{gt}"), Tensor::zeros(1, h)));
            DirectionIds { w, b }
        };
        let fwd = direction("fwd", &mut p, rng);
        let bwd = direction("bwd", &mut p, rng);
        let out_w = p.add("encoder.out.w", glorot(2 * h, num_labels, rng));
        let out_b = p.add("encoder.out.b", Tensor::zeros(1, num_labels));
        let transitions = config
            .crf
            .then(|| p.add("encoder.crf.transitions", Tensor::zeros(num_labels + 2, num_labels + 2)));
        Ok(Self {
            config,
            num_labels,
            params: p,
            ids: EncoderIds {
                word_emb,
                char_emb,
                char_conv_w,
                char_conv_b,
                fwd,
                bwd,
                out_w,
                out_b,
                transitions,
            },
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.params.value(self.ids.word_emb).rows()
    }

    pub fn num_chars(&self) -> usize {
        self.params.value(self.ids.char_emb).rows()
    }

    /// Parameters covered by the weight penalty of the stage-one loss.
    pub fn penalized(&self) -> Vec<ParamId> {
        let mut v = vec![
            self.ids.word_emb,
            self.ids.char_emb,
            self.ids.char_conv_w,
        ];
        v.extend(self.ids.fwd.w);
        v.extend(self.ids.bwd.w);
        v
    }

    /// Names of the gate weight and bias parameters of one direction.
    pub fn gate_names(direction: &str) -> Vec<String> {
        GATES
            .iter()
            .flat_map(|g| [format!("encoder.{direction}.w_{g}"), format!("encoder.{direction}.b_{g}")])
            .collect()
    }

    /// Masks with every entry equal to one.
    pub fn identity_masks(&self) -> Masks {
        let d = self.config.input_dim();
        let h = self.config.hidden;
        Masks {
            forward: MaskPair::ones(d, h),
            backward: MaskPair::ones(d, h),
            embed: None,
        }
    }

    /// Fresh masks for one pass: forward pair, backward pair, then the
    /// embedding dropout if `embed` is set.
    pub fn sample_masks(&self, n: usize, embed: bool, rng: &mut Rng) -> Masks {
        let d = self.config.input_dim();
        let h = self.config.hidden;
        let r = self.config.recurrent_dropout;
        let forward = MaskPair::sample(d, h, r, rng);
        let backward = MaskPair::sample(d, h, r, rng);
        let embed = (embed && self.config.embed_dropout > 0.0).then(|| {
            Tensor::matrix(n, d, bernoulli_mask(n * d, self.config.embed_dropout, rng))
        });
        Masks {
            forward,
            backward,
            embed,
        }
    }

    fn check_input(&self, input: &EncodedSentence) -> Result<()> {
        if input.is_empty() || input.chars.len() != input.len() {
            return Err(contract("encoded sentence must be non-empty with chars per token"));
        }
        let v = self.vocab_size();
        let c = self.num_chars();
        if let Some(w) = input.words.iter().find(|&&w| w >= v) {
            return Err(contract(format!("word id {w} outside vocabulary of {v}")));
        }
        for t in &input.chars {
            if t.is_empty() {
                return Err(contract("token without characters"));
            }
            if let Some(ch) = t.iter().find(|&&ch| ch >= c) {
                return Err(contract(format!("char id {ch} outside alphabet of {c}")));
            }
        }
        Ok(())
    }

    /// Character encodings `[n×F]`: window-3 same-padded convolution over
    /// character embeddings, max-pooled per token.
    pub fn encode_chars(&self, g: &mut Graph, chars: &[Vec<usize>]) -> Result<Var> {
        let dc = self.config.char_dim;
        let table = g.param(self.ids.char_emb);
        let total: usize = chars.iter().map(Vec::len).sum();
        let cols = CHAR_WINDOW * dc;
        let mut index = Vec::with_capacity(total * cols);
        let mut segments = Vec::with_capacity(chars.len());
        let half = (CHAR_WINDOW / 2) as isize;
        for token in chars {
            segments.push((index.len() / cols, token.len()));
            for p in 0..token.len() as isize {
                for o in -half..=half {
                    let q = p + o;
                    if q < 0 || q >= token.len() as isize {
                        index.extend(core::iter::repeat(GATHER_ZERO).take(dc));
                    } else {
                        let id = token[q as usize];
                        index.extend((0..dc).map(|k| id * dc + k));
                    }
                }
            }
        }
        let windows = g.tape.gather(table, index, total, cols)?;
        let w = g.param(self.ids.char_conv_w);
        let b = g.param(self.ids.char_conv_b);
        let conv = g.tape.matmul(windows, w)?;
        let conv = g.tape.add_row(conv, b)?;
        g.tape.segment_max(conv, &segments)
    }

    /// Token representations `[n×D] = [word ; chars]`.
    pub fn represent(&self, g: &mut Graph, input: &EncodedSentence) -> Result<Var> {
        self.check_input(input)?;
        let words = g.param_rows(self.ids.word_emb, &input.words)?;
        let chars = self.encode_chars(g, &input.chars)?;
        g.tape.concat_cols(&[words, chars])
    }

    fn gate_vars(&self, g: &mut Graph, ids: &DirectionIds) -> Result<GateVars> {
        let ws: Vec<Var> = ids.w.iter().map(|&id| g.param(id)).collect();
        let bs: Vec<Var> = ids.b.iter().map(|&id| g.param(id)).collect();
        Ok(GateVars {
            w: g.tape.concat_cols(&ws)?,
            b: g.tape.concat_cols(&bs)?,
        })
    }

    fn run_direction(
        &self,
        g: &mut Graph,
        x: Var,
        n: usize,
        ids: &DirectionIds,
        mask: &MaskPair,
        reverse: bool,
    ) -> Result<Vec<Var>> {
        let h = self.config.hidden;
        let gates = self.gate_vars(g, ids)?;
        let z_x = g.constant(Tensor::row(mask.z_x.clone()));
        let z_h = g.constant(Tensor::row(mask.z_h.clone()));
        let mut hs = g.constant(Tensor::zeros(1, h));
        let mut cs = g.constant(Tensor::zeros(1, h));
        let mut out = vec![hs; n];
        for step in 0..n {
            let t = if reverse { n - 1 - step } else { step };
            let xt = g.tape.slice_rows(x, t, 1)?;
            let (hn, cn) = vlstm_step(&mut g.tape, xt, hs, cs, z_x, z_h, gates)?;
            hs = hn;
            cs = cn;
            out[t] = hn;
        }
        Ok(out)
    }

    /// One masked pass.
    pub fn forward(&self, g: &mut Graph, input: &EncodedSentence, masks: &Masks) -> Result<EncoderOutput> {
        let n = input.len();
        let repr = self.represent(g, input)?;
        let x = match &masks.embed {
            Some(m) => {
                let m = g.constant(m.clone());
                g.tape.mul(repr, m)?
            }
            None => repr,
        };
        let f = self.run_direction(g, x, n, &self.ids.fwd, &masks.forward, false)?;
        let b = self.run_direction(g, x, n, &self.ids.bwd, &masks.backward, true)?;
        let f = g.tape.concat_rows(&f)?;
        let b = g.tape.concat_rows(&b)?;
        let hidden = g.tape.concat_cols(&[f, b])?;
        let w = g.param(self.ids.out_w);
        let bias = g.param(self.ids.out_b);
        let logits = g.tape.matmul(hidden, w)?;
        let logits = g.tape.add_row(logits, bias)?;
        Ok(EncoderOutput {
            repr,
            hidden,
            logits,
        })
    }

    /// Representation values without recording gradients.
    pub fn representation(&self, input: &EncodedSentence) -> Result<Tensor> {
        let mut g = Graph::frozen(&self.params);
        let r = self.represent(&mut g, input)?;
        Ok(g.value(r).clone())
    }

    /// Emission scores of the deterministic (mask-free) network.
    pub fn emissions(&self, input: &EncodedSentence) -> Result<Tensor> {
        let mut g = Graph::frozen(&self.params);
        let out = self.forward(&mut g, input, &self.identity_masks())?;
        Ok(g.value(out.logits).clone())
    }

    /// Masks of MC sample `sample` for a sentence seeded with `seed`.
    pub fn mc_masks(&self, n: usize, seed: u64, sample: usize) -> Masks {
        let mut r = rng::substream(seed, sample as u64);
        self.sample_masks(n, self.config.mc_embedding_dropout, &mut r)
    }

    /// Softmax output `[n×C]` of one MC sample.
    pub fn mc_sample(&self, input: &EncodedSentence, seed: u64, sample: usize) -> Result<Tensor> {
        let masks = self.mc_masks(input.len(), seed, sample);
        let mut g = Graph::frozen(&self.params);
        let out = self.forward(&mut g, input, &masks)?;
        let mut p = g.value(out.logits).clone();
        let c = p.cols();
        for row in p.data_mut().chunks_mut(c) {
            softmax_in_place(row);
        }
        Ok(p)
    }

    /// Averages `m` MC samples into a [`DraftPrediction`].
    pub fn mc_forward(&self, input: &EncodedSentence, m: usize, seed: u64) -> Result<DraftPrediction> {
        if m == 0 {
            return Err(contract("MC sample count must be at least 1"));
        }
        let samples = (0..m)
            .map(|j| self.mc_sample(input, seed, j))
            .collect::<Result<Vec<_>>>()?;
        DraftPrediction::from_samples(&samples)
    }
}

/// Natural-log entropy, with `0·ln 0 = 0`, clamped to `[0, ln C]`.
pub fn entropy(p: &[f64]) -> f64 {
    let h: f64 = p
        .iter()
        .filter(|&&x| x > 0.0)
        .map(|&x| -x * libm::log(x))
        .sum();
    h.clamp(0.0, libm::log(p.len().max(1) as f64))
}

/// Stage-one output for one sentence.
#[derive(Debug, Clone, PartialEq)]
pub struct DraftPrediction {
    /// MC-averaged distributions `[n×C]`.
    pub probs: Tensor,
    pub labels: Vec<usize>,
    pub uncertainty: Vec<f64>,
}

impl DraftPrediction {
    pub fn from_probs(probs: Tensor) -> Self {
        let c = probs.cols();
        let labels = probs.data().chunks(c).map(argmax).collect();
        let uncertainty = probs.data().chunks(c).map(entropy).collect();
        Self {
            probs,
            labels,
            uncertainty,
        }
    }

    /// Averages per-sample softmax outputs in sample order.
    pub fn from_samples(samples: &[Tensor]) -> Result<Self> {
        let first = samples.first().ok_or_else(|| contract("no MC samples"))?;
        let mut acc = vec![0.0; first.len()];
        for s in samples {
            if s.shape() != first.shape() {
                return Err(contract("MC samples differ in shape"));
            }
            acc.iter_mut().zip(s.data()).for_each(|(a, b)| *a += b);
        }
        let m = samples.len() as f64;
        acc.iter_mut().for_each(|a| *a /= m);
        Ok(Self::from_probs(Tensor::matrix(first.rows(), first.cols(), acc)))
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::CasePolicy;
    use crate::tensor::sigmoid;
    use alloc::string::ToString;

    fn tiny_config() -> EncoderConfig {
        EncoderConfig {
            word_dim: 4,
            char_dim: 3,
            char_filters: 2,
            hidden: 3,
            embed_dropout: 0.5,
            recurrent_dropout: 0.25,
            mc_embedding_dropout: false,
            crf: false,
        }
    }

    fn tiny(cfg: EncoderConfig) -> (BayesEncoder, Vocabulary, Sentence) {
        let s = Sentence::new(
            ["Anna", "met", "Bo", "in", "Oslo"].iter().map(|w| w.to_string()).collect(),
            Some(vec![1, 0, 1, 0, 2]),
        )
        .unwrap();
        let vocab = Vocabulary::build(core::slice::from_ref(&s), CasePolicy::default());
        let mut r = rng::seeded(11);
        let table = uniform(vocab.num_words(), cfg.word_dim, 0.5, &mut r);
        let enc = BayesEncoder::new(cfg, table, vocab.num_chars(), 3, &mut r).unwrap();
        (enc, vocab, s)
    }

    fn set(t: &mut Tape, rows: &[Vec<f64>]) -> Var {
        t.constant(Tensor::from_rows(rows))
    }

    #[test]
    fn zero_weights_give_zero_hidden() {
        let mut t = Tape::new();
        let x = set(&mut t, &[vec![0.3, -0.7]]);
        let h = set(&mut t, &[vec![0.0, 0.0]]);
        let c = set(&mut t, &[vec![0.0, 0.0]]);
        let zx = set(&mut t, &[vec![1.0, 1.0]]);
        let zh = set(&mut t, &[vec![1.0, 1.0]]);
        let w = t.constant(Tensor::zeros(4, 8));
        let b = t.constant(Tensor::zeros(1, 8));
        let (h1, c1) = vlstm_step(&mut t, x, h, c, zx, zh, GateVars { w, b }).unwrap();
        assert_eq!(t.value(h1).data(), &[0.0, 0.0]);
        assert_eq!(t.value(c1).data(), &[0.0, 0.0]);
    }

    /// Step with hand-set weights against a scalar evaluation of the gate
    /// equations written out per unit.
    #[test]
    fn step_matches_hand_evaluation() {
        let x = [0.5, -1.0];
        let hp = [0.2, 0.4];
        let cp = [0.1, -0.3];
        let zx = [2.0, 0.0];
        let zh = [1.0, 4.0 / 3.0];
        // Rows: x1, x2, h1, h2; column blocks g|i|f|o of width 2.
        let w: [[f64; 8]; 4] = [
            [0.1, -0.2, 0.3, 0.0, -0.5, 0.2, 0.7, 0.1],
            [0.4, 0.4, -0.1, 0.2, 0.3, -0.6, 0.0, 0.5],
            [-0.3, 0.1, 0.2, -0.4, 0.1, 0.1, -0.2, 0.3],
            [0.2, 0.5, 0.0, 0.3, -0.1, 0.4, 0.6, -0.7],
        ];
        let b = [0.05, -0.05, 0.1, 0.0, 1.0, 0.5, -0.2, 0.3];
        let inp = [x[0] * zx[0], x[1] * zx[1], hp[0] * zh[0], hp[1] * zh[1]];
        let pre = |col: usize| b[col] + (0..4).map(|r| inp[r] * w[r][col]).sum::<f64>();
        let mut want_h = [0.0; 2];
        let mut want_c = [0.0; 2];
        for u in 0..2 {
            let g = libm::tanh(pre(u));
            let i = sigmoid(pre(2 + u));
            let f = sigmoid(pre(4 + u));
            let o = sigmoid(pre(6 + u));
            want_c[u] = g * i + cp[u] * f;
            want_h[u] = o * libm::tanh(want_c[u]);
        }
        let mut t = Tape::new();
        let xv = set(&mut t, &[x.to_vec()]);
        let hv = set(&mut t, &[hp.to_vec()]);
        let cv = set(&mut t, &[cp.to_vec()]);
        let zxv = set(&mut t, &[zx.to_vec()]);
        let zhv = set(&mut t, &[zh.to_vec()]);
        let wv = t.constant(Tensor::from_rows(&w.iter().map(|r| r.to_vec()).collect::<Vec<_>>()));
        let bv = t.constant(Tensor::row(b.to_vec()));
        let (h1, c1) = vlstm_step(&mut t, xv, hv, cv, zxv, zhv, GateVars { w: wv, b: bv }).unwrap();
        for u in 0..2 {
            assert!((t.value(h1).data()[u] - want_h[u]).abs() < 1e-12);
            assert!((t.value(c1).data()[u] - want_c[u]).abs() < 1e-12);
        }
    }

    #[test]
    fn step_rejects_bad_dimensions() {
        let mut t = Tape::new();
        let x = set(&mut t, &[vec![0.3, -0.7]]);
        let h = set(&mut t, &[vec![0.0, 0.0]]);
        let zx = set(&mut t, &[vec![1.0, 1.0, 1.0]]);
        let zh = set(&mut t, &[vec![1.0, 1.0]]);
        let w = t.constant(Tensor::zeros(4, 8));
        let b = t.constant(Tensor::zeros(1, 8));
        let err = vlstm_step(&mut t, x, h, h, zx, zh, GateVars { w, b }).unwrap_err();
        assert!(matches!(err, crate::Error::Contract(_)));
    }

    /// Explicit loops over the char embedding table and filters.
    #[test]
    fn char_cnn_matches_naive_loops() {
        let (enc, _, _) = tiny(tiny_config());
        let token = vec![3usize, 1, 4, 1];
        let mut g = Graph::frozen(&enc.params);
        let v = enc.encode_chars(&mut g, core::slice::from_ref(&token)).unwrap();
        let out = g.value(v).clone();
        let e = enc.params.value(enc.ids.char_emb);
        let w = enc.params.value(enc.ids.char_conv_w);
        let b = enc.params.value(enc.ids.char_conv_b);
        let dc = enc.config.char_dim;
        for f in 0..enc.config.char_filters {
            let mut best = f64::NEG_INFINITY;
            for p in 0..token.len() as isize {
                let mut s = b.at(0, f);
                for o in 0..3isize {
                    let q = p + o - 1;
                    if q < 0 || q >= token.len() as isize {
                        continue;
                    }
                    for k in 0..dc {
                        s += e.at(token[q as usize], k) * w.at(o as usize * dc + k, f);
                    }
                }
                best = best.max(s);
            }
            assert!((out.at(0, f) - best).abs() < 1e-12);
        }
    }

    #[test]
    fn single_char_token_pools_its_only_column() {
        let (enc, _, _) = tiny(tiny_config());
        let mut g = Graph::frozen(&enc.params);
        let v = enc.encode_chars(&mut g, &[vec![2]]).unwrap();
        let e = enc.params.value(enc.ids.char_emb);
        let w = enc.params.value(enc.ids.char_conv_w);
        let dc = enc.config.char_dim;
        for f in 0..enc.config.char_filters {
            let s: f64 = (0..dc).map(|k| e.at(2, k) * w.at(dc + k, f)).sum::<f64>()
                + enc.params.value(enc.ids.char_conv_b).at(0, f);
            assert!((g.value(v).at(0, f) - s).abs() < 1e-15);
        }
    }

    #[test]
    fn padding_does_not_leak_between_tokens() {
        let (enc, _, _) = tiny(tiny_config());
        let alone = {
            let mut g = Graph::frozen(&enc.params);
            let v = enc.encode_chars(&mut g, &[vec![1, 2]]).unwrap();
            g.value(v).clone()
        };
        let mut g = Graph::frozen(&enc.params);
        let v = enc
            .encode_chars(&mut g, &[vec![5, 5, 5, 5, 5], vec![1, 2], vec![3]])
            .unwrap();
        assert_eq!(g.value(v).row_slice(1), alone.row_slice(0));
    }

    #[test]
    fn locked_masks_replay_bit_exactly() {
        let (enc, vocab, s) = tiny(tiny_config());
        let input = EncodedSentence::new(&vocab, &s);
        let masks = enc.sample_masks(input.len(), true, &mut rng::seeded(4));
        let run = |m: &Masks| {
            let mut g = Graph::frozen(&enc.params);
            let o = enc.forward(&mut g, &input, m).unwrap();
            g.value(o.hidden).clone()
        };
        assert_eq!(run(&masks), run(&masks));
    }

    /// Resampling the recurrent masks at every step (the mutation) changes
    /// the hidden states, while replaying the locked pair does not.
    #[test]
    fn per_step_resampling_breaks_replay() {
        let (enc, vocab, s) = tiny(EncoderConfig {
            recurrent_dropout: 0.5,
            ..tiny_config()
        });
        let input = EncodedSentence::new(&vocab, &s);
        let d = enc.config.input_dim();
        let h = enc.config.hidden;
        let mut r = rng::seeded(8);
        let locked = MaskPair::sample(d, h, 0.5, &mut r);
        let run = |per_step: bool| {
            let mut g = Graph::frozen(&enc.params);
            let x = enc.represent(&mut g, &input).unwrap();
            let gates = enc.gate_vars(&mut g, &enc.ids.fwd).unwrap();
            let mut hs = g.constant(Tensor::zeros(1, h));
            let mut cs = g.constant(Tensor::zeros(1, h));
            let mut rr = rng::seeded(9);
            let mut out = Vec::new();
            for t in 0..input.len() {
                let m = if per_step && t > 0 {
                    MaskPair::sample(d, h, 0.5, &mut rr)
                } else {
                    locked.clone()
                };
                let zx = g.constant(Tensor::row(m.z_x));
                let zh = g.constant(Tensor::row(m.z_h));
                let xt = g.tape.slice_rows(x, t, 1).unwrap();
                let (hn, cn) = vlstm_step(&mut g.tape, xt, hs, cs, zx, zh, gates).unwrap();
                hs = hn;
                cs = cn;
                out.extend_from_slice(g.value(hn).data());
            }
            out
        };
        let full = {
            let masks = Masks {
                forward: locked.clone(),
                backward: MaskPair::ones(d, h),
                embed: None,
            };
            let mut g = Graph::frozen(&enc.params);
            let o = enc.forward(&mut g, &input, &masks).unwrap();
            let hid = g.value(o.hidden).clone();
            (0..input.len())
                .flat_map(|t| hid.row_slice(t)[..h].to_vec())
                .collect::<Vec<_>>()
        };
        assert_eq!(run(false), full);
        assert_ne!(run(true), full);
    }

    #[test]
    fn zero_rate_makes_samples_identical() {
        let (enc, vocab, s) = tiny(EncoderConfig {
            recurrent_dropout: 0.0,
            ..tiny_config()
        });
        let input = EncodedSentence::new(&vocab, &s);
        let a = enc.mc_sample(&input, 3, 0).unwrap();
        for j in 1..5 {
            assert_eq!(enc.mc_sample(&input, 3, j).unwrap(), a);
        }
        let d = enc.mc_forward(&input, 5, 3).unwrap();
        let c = a.cols();
        for (i, row) in a.data().chunks(c).enumerate() {
            assert!((d.uncertainty[i] - entropy(row)).abs() < 1e-12);
        }
    }

    #[test]
    fn single_sample_is_one_masked_softmax() {
        let (enc, vocab, s) = tiny(tiny_config());
        let input = EncodedSentence::new(&vocab, &s);
        let d = enc.mc_forward(&input, 1, 42).unwrap();
        assert_eq!(d.probs, enc.mc_sample(&input, 42, 0).unwrap());
        for row in d.probs.data().chunks(3) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn more_samples_concentrate_the_average() {
        let (enc, vocab, s) = tiny(EncoderConfig {
            recurrent_dropout: 0.5,
            ..tiny_config()
        });
        let input = EncodedSentence::new(&vocab, &s);
        let spread = |m: usize| {
            let runs: Vec<Tensor> = (0..40)
                .map(|k| enc.mc_forward(&input, m, 1000 + k).unwrap().probs)
                .collect();
            let len = runs[0].len();
            let mut total = 0.0;
            for i in 0..len {
                let mean = runs.iter().map(|r| r.data()[i]).sum::<f64>() / runs.len() as f64;
                total += runs.iter().map(|r| (r.data()[i] - mean).powi(2)).sum::<f64>()
                    / (runs.len() - 1) as f64;
            }
            total
        };
        let v2 = spread(2);
        let v32 = spread(32);
        assert!(v32 * 2.0 <= v2, "M=2 {v2}, M=32 {v32}");
    }

    /// Swapping the direction weights and reversing the sentence mirrors the
    /// hidden states.
    #[test]
    fn reversal_mirrors_directions() {
        let (enc, vocab, s) = tiny(tiny_config());
        let mut swapped = enc.clone();
        for (a, b) in BayesEncoder::gate_names("fwd").iter().zip(BayesEncoder::gate_names("bwd")) {
            let ia = enc.params.find(a).unwrap();
            let ib = enc.params.find(&b).unwrap();
            *swapped.params.value_mut(ia) = enc.params.value(ib).clone();
            *swapped.params.value_mut(ib) = enc.params.value(ia).clone();
        }
        let input = EncodedSentence::new(&vocab, &s);
        let mut rev = input.clone();
        rev.words.reverse();
        rev.chars.reverse();
        let masks = enc.sample_masks(input.len(), false, &mut rng::seeded(2));
        let swapped_masks = Masks {
            forward: masks.backward.clone(),
            backward: masks.forward.clone(),
            embed: None,
        };
        let hidden = |e: &BayesEncoder, i: &EncodedSentence, m: &Masks| {
            let mut g = Graph::frozen(&e.params);
            let o = e.forward(&mut g, i, m).unwrap();
            g.value(o.hidden).clone()
        };
        let a = hidden(&enc, &input, &masks);
        let b = hidden(&swapped, &rev, &swapped_masks);
        let h = enc.config.hidden;
        let n = input.len();
        for t in 0..n {
            assert_eq!(&a.row_slice(t)[..h], &b.row_slice(n - 1 - t)[h..]);
            assert_eq!(&a.row_slice(t)[h..], &b.row_slice(n - 1 - t)[..h]);
        }
    }

    #[test]
    fn entropy_cases() {
        assert!((entropy(&[0.2; 5]) - libm::log(5.0)).abs() < 1e-12);
        assert_eq!(entropy(&[0.0, 1.0, 0.0]), 0.0);
        let direct = -(0.7 * libm::log(0.7) + 0.2 * libm::log(0.2) + 0.1 * libm::log(0.1));
        assert!((entropy(&[0.7, 0.2, 0.1]) - direct).abs() < 1e-15);
        assert!((direct - 0.801_818_8).abs() < 1e-6);
    }

    #[test]
    fn out_of_range_ids_are_contract_errors() {
        let (enc, vocab, s) = tiny(tiny_config());
        let mut input = EncodedSentence::new(&vocab, &s);
        input.words[0] = 999;
        let mut g = Graph::frozen(&enc.params);
        assert!(enc.forward(&mut g, &input, &enc.identity_masks()).is_err());
    }
}
