//! Stage two: two-stream self-attention with relative positions over token
//! representations and draft-label embeddings.
//!
//! Scores for one head, with `Q = X·W_q`, `K = Y·W_k`, `P_o = R_o·W_kR`:
//!
//! ```text
//! A[i,j] = (Q_i·K_j + Q_i·P_{i-j} + u·K_j + v·P_{i-j}) / sqrt(head_dim)
//! ```
//!
//! The word stream uses `Y = X` with `(W_qx, W_kx, u_x, v_x)`; the label stream
//! uses the label embeddings as `Y` with `(W_ql, W_kl, u_l, v_l)`. `W_kR` and
//! the sinusoid table `R` are shared by both streams.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::autodiff::Var;
use crate::error::{contract, Error, Result};
use crate::params::{glorot, uniform, Graph, ParamId, ParamStore};
use crate::rng::Rng;
use crate::tensor::{argmax, softmax_in_place, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct RefinerConfig {
    pub d_model: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub layers: usize,
    pub ff_dim: usize,
    /// Longest sentence; relative offsets are clipped to `±max_len`.
    pub max_len: usize,
    pub layer_norm_eps: f64,
    /// With `false` every draft is replaced by the mask symbol, leaving only
    /// the word stream informative.
    pub label_stream: bool,
}

impl Default for RefinerConfig {
    fn default() -> Self {
        Self {
            d_model: 400,
            heads: 5,
            head_dim: 80,
            layers: 2,
            ff_dim: 800,
            max_len: 512,
            layer_norm_eps: 1e-12,
            label_stream: true,
        }
    }
}

impl RefinerConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("d_model", self.d_model),
            ("heads", self.heads),
            ("head_dim", self.head_dim),
            ("layers", self.layers),
            ("ff_dim", self.ff_dim),
            ("max_len", self.max_len),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("refiner.{name} must be positive")));
            }
        }
        if !(self.layer_norm_eps > 0.0) {
            return Err(Error::Config("refiner.layer_norm_eps must be positive".into()));
        }
        Ok(())
    }
}

/// Sinusoid table with rows for offsets `-max_len..=max_len`.
pub fn sinusoid_table(max_len: usize, dim: usize) -> Tensor {
    let rows = 2 * max_len + 1;
    let mut data = Vec::with_capacity(rows * dim);
    for r in 0..rows {
        let pos = r as f64 - max_len as f64;
        for k in 0..dim {
            let pair = (k / 2 * 2) as f64;
            let angle = pos / libm::pow(10000.0, pair / dim as f64);
            data.push(if k % 2 == 0 { libm::sin(angle) } else { libm::cos(angle) });
        }
    }
    Tensor::matrix(rows, dim, data)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Word,
    Label,
}

/// Per-layer parameters; attention matrices hold all heads side by side
/// (`[d × heads·head_dim]`).
#[derive(Debug, Clone, PartialEq)]
pub struct LayerIds {
    pub w_qx: ParamId,
    pub w_kx: ParamId,
    pub w_ql: ParamId,
    pub w_kl: ParamId,
    pub w_kr: ParamId,
    pub w_x: ParamId,
    pub w_l: ParamId,
    pub lin_x: (ParamId, ParamId),
    pub lin_l: (ParamId, ParamId),
    pub ln_x: (ParamId, ParamId),
    pub ln_l: (ParamId, ParamId),
    pub ff_x: [ParamId; 4],
    pub ff_l: [ParamId; 4],
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefinerIds {
    pub input_w: ParamId,
    pub input_b: ParamId,
    pub label_emb: ParamId,
    /// Bias vectors, one row per head, shared by all layers.
    pub u_x: ParamId,
    pub v_x: ParamId,
    pub u_l: ParamId,
    pub v_l: ParamId,
    pub layers: Vec<LayerIds>,
    pub out_w: ParamId,
    pub out_b: ParamId,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefinedPrediction {
    pub probs: Tensor,
    pub labels: Vec<usize>,
}

impl RefinedPrediction {
    pub fn from_logits(mut logits: Tensor) -> Self {
        let c = logits.cols();
        for row in logits.data_mut().chunks_mut(c) {
            softmax_in_place(row);
        }
        let labels = logits.data().chunks(c).map(argmax).collect();
        Self {
            probs: logits,
            labels,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Refiner {
    pub config: RefinerConfig,
    pub input_dim: usize,
    pub num_labels: usize,
    pub params: ParamStore,
    pub ids: RefinerIds,
    pub table: Tensor,
}

impl Refiner {
    /// `input_dim` is the width of the stage-one token representation.
    pub fn new(config: RefinerConfig, input_dim: usize, num_labels: usize, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        if input_dim == 0 || num_labels == 0 {
            return Err(contract("refiner needs positive input width and label count"));
        }
        let d = config.d_model;
        let hd = config.heads * config.head_dim;
        let mut p = ParamStore::new();
        let input_w = p.add("refiner.input.w", glorot(input_dim, d, rng));
        let input_b = p.add("refiner.input.b", Tensor::zeros(1, d));
        let label_emb = p.add(
            "refiner.label_emb",
            uniform(num_labels + 1, d, libm::sqrt(3.0 / d as f64), rng),
        );
        let u_x = p.add("refiner.u_x", Tensor::zeros(config.heads, config.head_dim));
        let v_x = p.add("refiner.v_x", Tensor::zeros(config.heads, config.head_dim));
        let u_l = p.add("refiner.u_l", Tensor::zeros(config.heads, config.head_dim));
        let v_l = p.add("refiner.v_l", Tensor::zeros(config.heads, config.head_dim));
        let mut layers = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            let pre = format!("refiner.layer{l}");
            let mut mat = |name: &str, r: usize, c: usize, p: &mut ParamStore| {
                p.add(format!("{pre}.{name}"), glorot(r, c, rng))
            };
            let w_qx = mat("w_qx", d, hd, &mut p);
            let w_kx = mat("w_kx", d, hd, &mut p);
            let w_ql = mat("w_ql", d, hd, &mut p);
            let w_kl = mat("w_kl", d, hd, &mut p);
            let w_kr = mat("w_kr", d, hd, &mut p);
            let w_x = mat("w_x", d, hd, &mut p);
            let w_l = mat("w_l", d, hd, &mut p);
            let lin_x = (mat("lin_x.w", hd, d, &mut p), p.add(format!("{pre}.lin_x.b"), Tensor::zeros(1, d)));
            let lin_l = (mat("lin_l.w", hd, d, &mut p), p.add(format!("{pre}.lin_l.b"), Tensor::zeros(1, d)));
            let ln = |s: &str, p: &mut ParamStore| {
                (
                    p.add(format!("{pre}.ln_{s}.gain"), Tensor::filled(1, d, 1.0)),
                    p.add(format!("{pre}.ln_{s}.bias"), Tensor::zeros(1, d)),
                )
            };
            let ln_x = ln("x", &mut p);
            let ln_l = ln("l", &mut p);
            let ff_x = [
                mat("ff_x.w1", d, config.ff_dim, &mut p),
                p.add(format!("{pre}.ff_x.b1"), Tensor::zeros(1, config.ff_dim)),
                mat("ff_x.w2", config.ff_dim, d, &mut p),
                p.add(format!("{pre}.ff_x.b2"), Tensor::zeros(1, d)),
            ];
            let ff_l = [
                mat("ff_l.w1", d, config.ff_dim, &mut p),
                p.add(format!("{pre}.ff_l.b1"), Tensor::zeros(1, config.ff_dim)),
                mat("ff_l.w2", config.ff_dim, d, &mut p),
                p.add(format!("{pre}.ff_l.b2"), Tensor::zeros(1, d)),
            ];
            layers.push(LayerIds {
                w_qx,
                w_kx,
                w_ql,
                w_kl,
                w_kr,
                w_x,
                w_l,
                lin_x,
                lin_l,
                ln_x,
                ln_l,
                ff_x,
                ff_l,
            });
        }
        let out_w = p.add("refiner.out.w", glorot(2 * d, num_labels, rng));
        let out_b = p.add("refiner.out.b", Tensor::zeros(1, num_labels));
        let table = sinusoid_table(config.max_len, d);
        Ok(Self {
            config,
            input_dim,
            num_labels,
            params: p,
            ids: RefinerIds {
                input_w,
                input_b,
                label_emb,
                u_x,
                v_x,
                u_l,
                v_l,
                layers,
                out_w,
                out_b,
            },
            table,
        })
    }

    /// Id of the label-embedding row that hides the draft.
    pub fn mask_label(&self) -> usize {
        self.num_labels
    }

    /// Relative encodings for offsets `-(n-1)..=(n-1)`, `[(2n-1)×d]`.
    pub fn offsets(&self, n: usize) -> Result<Tensor> {
        let l = self.config.max_len;
        if n > l {
            return Err(Error::Capacity { len: n, max: l });
        }
        let d = self.config.d_model;
        let mut data = Vec::with_capacity((2 * n - 1) * d);
        for k in 0..2 * n - 1 {
            let off = (k as isize - (n as isize - 1)).clamp(-(l as isize), l as isize);
            data.extend_from_slice(self.table.row_slice((off + l as isize) as usize));
        }
        Ok(Tensor::matrix(2 * n - 1, d, data))
    }

    /// Unnormalized scores `A` `[n×n]` of one head. `queries` is the word
    /// stream input, `keys` the word or label stream input, `rel` the output
    /// of [`Self::offsets`] bound on the graph.
    pub fn attn_scores(
        &self,
        g: &mut Graph,
        queries: Var,
        keys: Var,
        rel: Var,
        layer: usize,
        head: usize,
        stream: Stream,
    ) -> Result<Var> {
        let ids = &self.ids.layers[layer];
        let dh = self.config.head_dim;
        let (wq, wk, u, v) = match stream {
            Stream::Word => (ids.w_qx, ids.w_kx, self.ids.u_x, self.ids.v_x),
            Stream::Label => (ids.w_ql, ids.w_kl, self.ids.u_l, self.ids.v_l),
        };
        let n = g.value(queries).rows();
        let head_cols = |g: &mut Graph, id: ParamId| -> Result<Var> {
            let w = g.param(id);
            g.tape.slice_cols(w, head * dh, dh)
        };
        let wq = head_cols(g, wq)?;
        let wk = head_cols(g, wk)?;
        let wr = head_cols(g, ids.w_kr)?;
        let u = g.param(u);
        let u = g.tape.slice_rows(u, head, 1)?;
        let v = g.param(v);
        let v = g.tape.slice_rows(v, head, 1)?;
        let q = g.tape.matmul(queries, wq)?;
        let k = g.tape.matmul(keys, wk)?;
        let p = g.tape.matmul(rel, wr)?;
        let qu = g.tape.add_row(q, u)?;
        let qv = g.tape.add_row(q, v)?;
        let kt = g.tape.transpose(k);
        let content = g.tape.matmul(qu, kt)?;
        let pt = g.tape.transpose(p);
        let by_offset = g.tape.matmul(qv, pt)?;
        let width = 2 * n - 1;
        let index = (0..n)
            .flat_map(|i| (0..n).map(move |j| i * width + i + n - 1 - j))
            .collect();
        let position = g.tape.gather(by_offset, index, n, n)?;
        let a = g.tape.add(content, position)?;
        Ok(g.tape.scale(a, 1.0 / libm::sqrt(dh as f64)))
    }

    fn stream_block(
        &self,
        g: &mut Graph,
        queries: Var,
        input: Var,
        rel: Var,
        layer: usize,
        stream: Stream,
    ) -> Result<Var> {
        let ids = &self.ids.layers[layer];
        let dh = self.config.head_dim;
        let (wv, lin, ln, ff) = match stream {
            Stream::Word => (ids.w_x, ids.lin_x, ids.ln_x, ids.ff_x),
            Stream::Label => (ids.w_l, ids.lin_l, ids.ln_l, ids.ff_l),
        };
        let wv = g.param(wv);
        let values = g.tape.matmul(input, wv)?;
        let mut heads = Vec::with_capacity(self.config.heads);
        for h in 0..self.config.heads {
            let a = self.attn_scores(g, queries, input, rel, layer, h, stream)?;
            let a = g.tape.softmax_rows(a);
            let vh = g.tape.slice_cols(values, h * dh, dh)?;
            heads.push(g.tape.matmul(a, vh)?);
        }
        let a = g.tape.concat_cols(&heads)?;
        let lw = g.param(lin.0);
        let lb = g.param(lin.1);
        let a = g.tape.matmul(a, lw)?;
        let a = g.tape.add_row(a, lb)?;
        let res = g.tape.add(a, input)?;
        let normed = g.tape.layer_norm_rows(res, self.config.layer_norm_eps);
        let gain = g.param(ln.0);
        let bias = g.param(ln.1);
        let o = g.tape.mul_row(normed, gain)?;
        let o = g.tape.add_row(o, bias)?;
        let [w1, b1, w2, b2] = ff.map(|id| g.param(id));
        let f = g.tape.matmul(o, w1)?;
        let f = g.tape.add_row(f, b1)?;
        let f = g.tape.relu(f);
        let f = g.tape.matmul(f, w2)?;
        let f = g.tape.add_row(f, b2)?;
        g.tape.add(o, f)
    }

    /// One layer: `(E_x, E_y) -> (H_x, H_l)`.
    pub fn layer(&self, g: &mut Graph, x: Var, l: Var, rel: Var, layer: usize) -> Result<(Var, Var)> {
        let hx = self.stream_block(g, x, x, rel, layer, Stream::Word)?;
        let hl = self.stream_block(g, x, l, rel, layer, Stream::Label)?;
        Ok((hx, hl))
    }

    /// Word stream input `E_x = repr·W_in + b_in`.
    pub fn word_input(&self, g: &mut Graph, repr: &Tensor) -> Result<Var> {
        if repr.cols() != self.input_dim {
            return Err(contract(format!(
                "refiner expects {}-wide representations, got {}",
                self.input_dim,
                repr.cols()
            )));
        }
        let r = g.constant(repr.clone());
        let w = g.param(self.ids.input_w);
        let b = g.param(self.ids.input_b);
        let x = g.tape.matmul(r, w)?;
        g.tape.add_row(x, b)
    }

    pub fn label_input(&self, g: &mut Graph, drafts: &[usize]) -> Result<Var> {
        if let Some(&bad) = drafts.iter().find(|&&y| y > self.num_labels) {
            return Err(contract(format!(
                "draft label {bad} outside 0..={} (including the mask symbol)",
                self.num_labels
            )));
        }
        let table = g.param(self.ids.label_emb);
        if self.config.label_stream {
            g.tape.gather_rows(table, drafts)
        } else {
            g.tape.gather_rows(table, &vec![self.mask_label(); drafts.len()])
        }
    }

    /// Concatenates both streams and projects to label logits `[n×C]`.
    pub fn predict_logits(&self, g: &mut Graph, hx: Var, hl: Var) -> Result<Var> {
        let h = g.tape.concat_cols(&[hx, hl])?;
        let w = g.param(self.ids.out_w);
        let b = g.param(self.ids.out_b);
        let z = g.tape.matmul(h, w)?;
        g.tape.add_row(z, b)
    }

    /// Logits for a sentence given its stage-one representations and drafts.
    pub fn forward(&self, g: &mut Graph, repr: &Tensor, drafts: &[usize]) -> Result<Var> {
        let n = repr.rows();
        if drafts.len() != n {
            return Err(contract(format!("{} drafts for {n} tokens", drafts.len())));
        }
        let rel = self.offsets(n)?;
        let rel = g.constant(rel);
        let mut x = self.word_input(g, repr)?;
        let mut l = self.label_input(g, drafts)?;
        for layer in 0..self.config.layers {
            (x, l) = self.layer(g, x, l, rel, layer)?;
        }
        self.predict_logits(g, x, l)
    }

    pub fn predict(&self, repr: &Tensor, drafts: &[usize]) -> Result<RefinedPrediction> {
        let mut g = Graph::frozen(&self.params);
        let z = self.forward(&mut g, repr, drafts)?;
        Ok(RefinedPrediction::from_logits(g.value(z).clone()))
    }
}
