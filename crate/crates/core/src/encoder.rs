//! Position-aware directional multi-dimensional self-attention utterance encoder.
//!
//! Matrices are stored with one token per row: `H` is `len x d_h`, the
//! directional contexts `C^F`/`C^B` are `len x d_h`, and their concatenation
//! `C` is `len x 2 d_h`. The sentence vector is a single `1 x 2 d_h` row.
//!
//! Token-to-token scores are multi-dimensional: for target `j` and source `s`
//! the score vector is `sigmoid(q_j + k_s + b) W / sqrt(d_h)` with
//! `q = H W_q`, `k = H W_k`; the forward branch lets `j` attend to `s < j`,
//! the backward branch to `s > j`. Values are `H W_v`.

use std::ops::Range;
use std::rc::Rc;

use ndarray::{s, Array2};
use rand::Rng;

use crate::data::vocab::PAD_ID;
use crate::error::{Error, Result};
use crate::tensor::{Graph, Mat, NodeId, ParamId, ParamStore, RowMix, Support};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Backward,
}

impl Direction {
    fn tag(self) -> &'static str {
        match self {
            Direction::Forward => "fw",
            Direction::Backward => "bw",
        }
    }

    fn index(self) -> usize {
        match self {
            Direction::Forward => 0,
            Direction::Backward => 1,
        }
    }
}

#[derive(Clone, Debug)]
pub struct DirectionParams {
    pub query: ParamId,
    pub key: ParamId,
    pub value: ParamId,
    pub score_bias: ParamId,
    pub score: ParamId,
    pub gate_input: ParamId,
    pub gate_attended: ParamId,
    pub gate_bias: ParamId,
}

/// Source-to-token scoring `F(X) = sigmoid(X W_h + b) W_s`, softmaxed per
/// column over a group of rows. Shared by the encoder and temporal fusion.
#[derive(Clone, Debug)]
pub struct S2tParams {
    pub hidden: ParamId,
    pub hidden_bias: ParamId,
    pub score: ParamId,
}

impl S2tParams {
    pub fn init<R: Rng>(store: &mut ParamStore, prefix: &str, width: usize, rng: &mut R) -> Self {
        S2tParams {
            hidden: store.glorot(&format!("{prefix}.hidden"), width, width, rng),
            hidden_bias: store.zeros(&format!("{prefix}.hidden_bias"), 1, width),
            score: store.glorot(&format!("{prefix}.score"), width, width, rng),
        }
    }

    /// Per-dimension scores for every row of `x`.
    pub fn scores(&self, g: &mut Graph, store: &ParamStore, x: NodeId) -> NodeId {
        let wh = g.param(store, self.hidden);
        let bh = g.param(store, self.hidden_bias);
        let ws = g.param(store, self.score);
        let hidden = g.affine(x, wh, bh);
        let act = g.sigmoid(hidden);
        g.matmul(act, ws)
    }

    /// Attention-weighted aggregate of `x` over each group of row indices.
    pub fn aggregate(&self, g: &mut Graph, store: &ParamStore, x: NodeId, groups: &[Vec<usize>]) -> NodeId {
        let scores = self.scores(g, store, x);
        let support = Support {
            groups: groups.iter().map(|rows| rows.iter().map(|&r| (r, r)).collect()).collect(),
        };
        g.softmax_agg(scores, x, Rc::new(support))
    }
}

#[derive(Clone, Debug)]
pub struct EncoderParams {
    pub token_embedding: ParamId,
    pub input_proj: ParamId,
    pub pos_embedding: ParamId,
    pub directions: [DirectionParams; 2],
    pub s2t: S2tParams,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub max_tokens: usize,
    pub vocab_size: usize,
}

impl EncoderParams {
    pub fn init<R: Rng>(
        store: &mut ParamStore,
        vocab_size: usize,
        embed_dim: usize,
        hidden_dim: usize,
        max_tokens: usize,
        rng: &mut R,
    ) -> Self {
        let d = hidden_dim;
        let mk_dir = |store: &mut ParamStore, dir: Direction, rng: &mut R| {
            let p = format!("encoder.t2t.{}", dir.tag());
            let gp = format!("encoder.gate.{}", dir.tag());
            DirectionParams {
                query: store.glorot(&format!("{p}.query"), d, d, rng),
                key: store.glorot(&format!("{p}.key"), d, d, rng),
                value: store.glorot(&format!("{p}.value"), d, d, rng),
                score_bias: store.zeros(&format!("{p}.score_bias"), 1, d),
                score: store.glorot(&format!("{p}.score"), d, d, rng),
                gate_input: store.glorot(&format!("{gp}.input"), d, d, rng),
                gate_attended: store.glorot(&format!("{gp}.attended"), d, d, rng),
                gate_bias: store.zeros(&format!("{gp}.bias"), 1, d),
            }
        };
        let token_embedding = store.uniform("encoder.token_embedding", vocab_size, embed_dim, 0.1, rng);
        let input_proj = store.glorot("encoder.input_proj", embed_dim, d, rng);
        let pos_embedding = store.uniform("encoder.pos_embedding", max_tokens, d, 0.1, rng);
        let fw = mk_dir(store, Direction::Forward, rng);
        let bw = mk_dir(store, Direction::Backward, rng);
        let s2t = S2tParams::init(store, "encoder.s2t", 2 * d, rng);
        EncoderParams {
            token_embedding,
            input_proj,
            pos_embedding,
            directions: [fw, bw],
            s2t,
            embed_dim,
            hidden_dim,
            max_tokens,
            vocab_size,
        }
    }

    pub fn direction(&self, dir: Direction) -> &DirectionParams {
        &self.directions[dir.index()]
    }
}

/// Stacked token rows of several utterances.
#[derive(Clone, Debug, Default)]
pub struct TokenBatch {
    pub ids: Vec<usize>,
    pub positions: Vec<usize>,
    pub spans: Vec<Range<usize>>,
}

impl TokenBatch {
    pub fn push(&mut self, ids: &[usize]) -> usize {
        let start = self.ids.len();
        self.ids.extend_from_slice(ids);
        self.positions.extend(0..ids.len());
        self.spans.push(start..self.ids.len());
        self.spans.len() - 1
    }

    pub fn num_tokens(&self) -> usize {
        self.ids.len()
    }

    /// Attention support and pair list for one direction.
    fn directional_support(&self, dir: Direction) -> (Vec<(usize, usize)>, Support) {
        let mut pairs = Vec::new();
        let mut groups = vec![Vec::new(); self.ids.len()];
        for span in &self.spans {
            for j in span.clone() {
                let sources = match dir {
                    Direction::Forward => span.start..j,
                    Direction::Backward => j + 1..span.end,
                };
                for src in sources {
                    groups[j].push((pairs.len(), src));
                    pairs.push((j, src));
                }
            }
        }
        (pairs, Support { groups })
    }
}

/// Dropout applied during training.
pub struct Dropout<'a, R: Rng> {
    pub rate: f64,
    pub rng: &'a mut R,
}

impl<R: Rng> Dropout<'_, R> {
    pub fn apply(&mut self, g: &mut Graph, x: NodeId) -> NodeId {
        if self.rate <= 0.0 {
            return x;
        }
        let keep = 1.0 / (1.0 - self.rate);
        let dim = g.value(x).raw_dim();
        let mask = Array2::from_shape_fn(dim, |_| if self.rng.gen::<f64>() < self.rate { 0.0 } else { keep });
        g.dropout(x, mask)
    }
}

/// Graph nodes produced by encoding a batch.
#[derive(Clone, Copy, Debug)]
pub struct EncodedBatch {
    /// `N x d_h` position-aware token states.
    pub hidden: NodeId,
    /// `N x 2 d_h` directional contexts `[C^F ; C^B]`.
    pub context: NodeId,
    /// `U x 2 d_h` sentence vectors.
    pub sentence: NodeId,
}

pub fn embed_positions(g: &mut Graph, store: &ParamStore, p: &EncoderParams, batch: &TokenBatch) -> NodeId {
    let table = g.param(store, p.token_embedding);
    let emb = g.rows(table, Rc::new(RowMix::gather(&batch.ids)));
    embed_from(g, store, p, emb, batch)
}

fn embed_from(g: &mut Graph, store: &ParamStore, p: &EncoderParams, emb: NodeId, batch: &TokenBatch) -> NodeId {
    let proj = g.param(store, p.input_proj);
    let projected = g.matmul(emb, proj);
    let pos_table = g.param(store, p.pos_embedding);
    let pos = g.rows(pos_table, Rc::new(RowMix::gather(&batch.positions)));
    g.add(projected, pos)
}

/// Multi-dimensional masked token-to-token attention; targets with no
/// allowed source get a zero row.
pub fn t2t_attention(
    g: &mut Graph,
    store: &ParamStore,
    p: &DirectionParams,
    hidden_dim: usize,
    h: NodeId,
    batch: &TokenBatch,
    dir: Direction,
) -> NodeId {
    let (pairs, support) = batch.directional_support(dir);
    let wq = g.param(store, p.query);
    let wk = g.param(store, p.key);
    let wv = g.param(store, p.value);
    let b = g.param(store, p.score_bias);
    let ws = g.param(store, p.score);
    let q = g.matmul(h, wq);
    let k = g.matmul(h, wk);
    let v = g.matmul(h, wv);
    let pre = g.pair_sum(q, k, Rc::new(pairs));
    let pre = g.add_row(pre, b);
    let act = g.sigmoid(pre);
    let raw = g.matmul(act, ws);
    let scores = g.scale(raw, 1.0 / (hidden_dim as f64).sqrt());
    g.softmax_agg(scores, v, Rc::new(support))
}

/// `G = sigmoid(H W1 + Hm W2 + b)`, output `G * H + (1 - G) * Hm`.
pub fn fusion_gate(g: &mut Graph, store: &ParamStore, p: &DirectionParams, h: NodeId, hm: NodeId) -> (NodeId, NodeId) {
    let w1 = g.param(store, p.gate_input);
    let w2 = g.param(store, p.gate_attended);
    let b = g.param(store, p.gate_bias);
    let a = g.matmul(h, w1);
    let c = g.affine(hm, w2, b);
    let pre = g.add(a, c);
    let gate = g.sigmoid(pre);
    (g.blend(gate, h, hm), gate)
}

pub fn encode_batch<R: Rng>(
    g: &mut Graph,
    store: &ParamStore,
    p: &EncoderParams,
    batch: &TokenBatch,
    mut dropout: Option<&mut Dropout<'_, R>>,
) -> EncodedBatch {
    let table = g.param(store, p.token_embedding);
    let mut emb = g.rows(table, Rc::new(RowMix::gather(&batch.ids)));
    if let Some(d) = dropout.as_deref_mut() {
        emb = d.apply(g, emb);
    }
    let hidden = embed_from(g, store, p, emb, batch);
    let mut halves = Vec::with_capacity(2);
    for dir in [Direction::Forward, Direction::Backward] {
        let dp = p.direction(dir);
        let hm = t2t_attention(g, store, dp, p.hidden_dim, hidden, batch, dir);
        halves.push(fusion_gate(g, store, dp, hidden, hm).0);
    }
    let mut context = g.concat_cols(&halves);
    if let Some(d) = dropout {
        context = d.apply(g, context);
    }
    let groups: Vec<Vec<usize>> = batch.spans.iter().map(|s| s.clone().collect()).collect();
    let sentence = p.s2t.aggregate(g, store, context, &groups);
    EncodedBatch {
        hidden,
        context,
        sentence,
    }
}

/// Output of encoding a single utterance, padded to `max_tokens` rows.
#[derive(Clone, Debug, PartialEq)]
pub struct UtteranceEncoding {
    /// `k x 2 d_h`, zero rows at padded positions.
    pub token_states: Mat,
    /// `1 x 2 d_h`.
    pub sentence_vector: Mat,
    pub token_mask: Vec<bool>,
}

/// Real-token count of a PAD-terminated id sequence.
fn real_length(tokens: &[usize], p: &EncoderParams) -> Result<usize> {
    if tokens.len() > p.max_tokens {
        return Err(Error::InvalidInput(format!(
            "{} tokens exceed the maximum of {}",
            tokens.len(),
            p.max_tokens
        )));
    }
    if let Some(&bad) = tokens.iter().find(|&&t| t >= p.vocab_size) {
        return Err(Error::IdOutOfRange {
            kind: "token",
            id: bad,
            size: p.vocab_size,
        });
    }
    let len = tokens.iter().take_while(|&&t| t != PAD_ID).count();
    if tokens[len..].iter().any(|&t| t != PAD_ID) {
        return Err(Error::InvalidInput("padding must trail the real tokens".into()));
    }
    Ok(len)
}

fn pad_rows(m: &Mat, rows: usize) -> Mat {
    let mut out = Mat::zeros((rows, m.ncols()));
    out.slice_mut(s![..m.nrows(), ..]).assign(m);
    out
}

fn single(tokens: &[usize]) -> TokenBatch {
    let mut b = TokenBatch::default();
    b.push(tokens);
    b
}

/// `H = E[tokens] W_in + p_u`, as a `k x d_h` matrix with zero rows at pads.
pub fn embed_and_position(tokens: &[usize], store: &ParamStore, p: &EncoderParams) -> Result<Mat> {
    let len = real_length(tokens, p)?;
    let batch = single(&tokens[..len]);
    let mut g = Graph::new();
    let h = embed_positions(&mut g, store, p, &batch);
    Ok(pad_rows(g.value(h), p.max_tokens))
}

/// Directional attention over the first `len` rows of `h`; the remaining rows are pads.
pub fn t2t_directional_attention(h: &Mat, len: usize, dir: Direction, store: &ParamStore, p: &EncoderParams) -> Mat {
    let batch = single(&vec![0; len]);
    let mut g = Graph::new();
    let hn = g.constant(h.slice(s![..len, ..]).to_owned());
    let out = t2t_attention(&mut g, store, p.direction(dir), p.hidden_dim, hn, &batch, dir);
    pad_rows(g.value(out), h.nrows())
}

/// Gated blend of `h` and the attention output `hm` for one direction.
pub fn fusion_gate_values(h: &Mat, hm: &Mat, dir: Direction, store: &ParamStore, p: &EncoderParams) -> Result<Mat> {
    if h.dim() != hm.dim() {
        return Err(Error::InvalidInput(format!("shape mismatch {:?} vs {:?}", h.dim(), hm.dim())));
    }
    let mut g = Graph::new();
    let hn = g.constant(h.clone());
    let hmn = g.constant(hm.clone());
    let (out, _) = fusion_gate(&mut g, store, p.direction(dir), hn, hmn);
    Ok(g.value(out).clone())
}

/// Per-dimension softmax over the real rows of `c`, then a weighted sum.
pub fn s2t_attention(c: &Mat, token_mask: &[bool], store: &ParamStore, params: &S2tParams) -> Result<Mat> {
    let rows: Vec<usize> = token_mask.iter().enumerate().filter(|(_, m)| **m).map(|(i, _)| i).collect();
    if rows.is_empty() {
        return Err(Error::InvalidInput("source2token attention over an all-pad input".into()));
    }
    let mut g = Graph::new();
    let cn = g.constant(c.clone());
    let out = params.aggregate(&mut g, store, cn, &[rows]);
    Ok(g.value(out).clone())
}

pub fn encode_utterance(tokens: &[usize], store: &ParamStore, p: &EncoderParams) -> Result<UtteranceEncoding> {
    let len = real_length(tokens, p)?;
    if len == 0 {
        return Err(Error::InvalidInput("cannot encode an utterance without tokens".into()));
    }
    let batch = single(&tokens[..len]);
    let mut g = Graph::new();
    let enc = encode_batch::<rand::rngs::ThreadRng>(&mut g, store, p, &batch, None);
    let mut token_mask = vec![false; p.max_tokens];
    token_mask[..len].iter_mut().for_each(|m| *m = true);
    Ok(UtteranceEncoding {
        token_states: pad_rows(g.value(enc.context), p.max_tokens),
        sentence_vector: g.value(enc.sentence).clone(),
        token_mask,
    })
}
