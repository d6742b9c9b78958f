//! Intent and slot prediction heads and the joint training objective.

use std::ops::Range;
use std::rc::Rc;

use rand::Rng;

use crate::data::Turn;
use crate::error::{Error, Result};
use crate::recurrent::GruParams;
use crate::tensor::{Graph, Mat, NodeId, ParamId, ParamStore, RowMix, Targets};

#[derive(Clone, Debug)]
pub struct HeadParams {
    pub fc1: ParamId,
    pub fc1_bias: ParamId,
    pub fc2: ParamId,
    pub fc2_bias: ParamId,
    pub ic_out: ParamId,
    pub ic_out_bias: ParamId,
    pub sec_out: ParamId,
    pub sec_out_bias: ParamId,
    pub utt_proj: ParamId,
    pub gate_context: ParamId,
    pub gate_utt: ParamId,
    pub gate_bias: ParamId,
    pub gru: GruParams,
    pub sl_out: ParamId,
    pub sl_out_bias: ParamId,
    /// Sliding window width over neighbouring tokens (odd).
    pub slot_window: usize,
    pub hidden_dim: usize,
    pub slot_dim: usize,
}

pub struct HeadSizes {
    pub turn_dim: usize,
    pub hidden_dim: usize,
    pub slot_dim: usize,
    pub slot_window: usize,
    pub n_intents: usize,
    pub n_slot_labels: usize,
}

impl HeadParams {
    pub fn init<R: Rng>(store: &mut ParamStore, s: &HeadSizes, rng: &mut R) -> Self {
        let d = s.hidden_dim;
        let gru_in = s.slot_window * 2 * d + s.slot_dim + d;
        HeadParams {
            fc1: store.glorot("heads.ic.fc1", s.turn_dim, d, rng),
            fc1_bias: store.zeros("heads.ic.fc1_bias", 1, d),
            fc2: store.glorot("heads.ic.fc2", 3 * d, d, rng),
            fc2_bias: store.zeros("heads.ic.fc2_bias", 1, d),
            ic_out: store.glorot("heads.ic.out", d, s.n_intents, rng),
            ic_out_bias: store.zeros("heads.ic.out_bias", 1, s.n_intents),
            sec_out: store.glorot("heads.sec_ic.out", 2 * d, s.n_intents, rng),
            sec_out_bias: store.zeros("heads.sec_ic.out_bias", 1, s.n_intents),
            utt_proj: store.glorot("heads.sl.utt_proj", d, 2 * d, rng),
            gate_context: store.glorot("heads.sl.gate.context", 2 * d, 2 * d, rng),
            gate_utt: store.glorot("heads.sl.gate.utt", 2 * d, 2 * d, rng),
            gate_bias: store.zeros("heads.sl.gate.bias", 1, 2 * d),
            gru: GruParams::init(store, "heads.sl.gru", gru_in, d, rng),
            sl_out: store.glorot("heads.sl.out", d, s.n_slot_labels, rng),
            sl_out_bias: store.zeros("heads.sl.out_bias", 1, s.n_slot_labels),
            slot_window: s.slot_window,
            hidden_dim: d,
            slot_dim: s.slot_dim,
        }
    }
}

/// Returns `(intent_logits, fc)` for each row of `cf` / `utt`.
pub fn ic_graph(g: &mut Graph, store: &ParamStore, p: &HeadParams, cf: NodeId, utt: NodeId) -> (NodeId, NodeId) {
    let w1 = g.param(store, p.fc1);
    let b1 = g.param(store, p.fc1_bias);
    let h1 = g.affine(cf, w1, b1);
    let h1 = g.tanh(h1);
    let joined = g.concat_cols(&[h1, utt]);
    let w2 = g.param(store, p.fc2);
    let b2 = g.param(store, p.fc2_bias);
    let fc = g.affine(joined, w2, b2);
    let fc = g.tanh(fc);
    let wo = g.param(store, p.ic_out);
    let bo = g.param(store, p.ic_out_bias);
    (g.affine(fc, wo, bo), fc)
}

pub fn secondary_ic_graph(g: &mut Graph, store: &ParamStore, p: &HeadParams, utt: NodeId) -> NodeId {
    let w = g.param(store, p.sec_out);
    let b = g.param(store, p.sec_out_bias);
    g.affine(utt, w, b)
}

/// Slot logits for the token rows listed in `spans` (one span per turn, rows
/// of `context`/`hidden`). `slot_hist` and `fc` carry one row per span. Output
/// rows follow the spans in order.
#[allow(clippy::too_many_arguments)]
pub fn sl_graph(
    g: &mut Graph,
    store: &ParamStore,
    p: &HeadParams,
    context: NodeId,
    hidden: NodeId,
    spans: &[Range<usize>],
    slot_hist: NodeId,
    fc: NodeId,
) -> NodeId {
    let rows: Vec<usize> = spans.iter().flat_map(|s| s.clone()).collect();
    let mix = Rc::new(RowMix::gather(&rows));
    let c = g.rows(context, mix.clone());
    let h = g.rows(hidden, mix);
    let wu = g.param(store, p.utt_proj);
    let hup = g.matmul(h, wu);
    let wgc = g.param(store, p.gate_context);
    let wgu = g.param(store, p.gate_utt);
    let bg = g.param(store, p.gate_bias);
    let a = g.matmul(c, wgc);
    let b = g.affine(hup, wgu, bg);
    let pre = g.add(a, b);
    let gate = g.sigmoid(pre);
    let fused = g.blend(gate, c, hup);

    // local row index of every token, grouped per turn
    let mut seqs = Vec::with_capacity(spans.len());
    let mut owner = Vec::with_capacity(rows.len());
    let mut start = 0;
    for (m, s) in spans.iter().enumerate() {
        seqs.push((start..start + s.len()).collect::<Vec<_>>());
        owner.extend(std::iter::repeat_n(m, s.len()));
        start += s.len();
    }
    let radius = (p.slot_window / 2) as isize;
    let mut parts = Vec::with_capacity(p.slot_window + 2);
    for off in -radius..=radius {
        let idx: Vec<Option<usize>> = seqs
            .iter()
            .flat_map(|seq| {
                let len = seq.len() as isize;
                seq.iter().enumerate().map(move |(j, &row)| {
                    let t = j as isize + off;
                    (0..len).contains(&t).then(|| (row as isize + off) as usize)
                })
            })
            .collect();
        parts.push(g.rows(fused, Rc::new(RowMix::gather_opt(&idx))));
    }
    let owner = Rc::new(RowMix::gather(&owner));
    parts.push(g.rows(slot_hist, owner.clone()));
    parts.push(g.rows(fc, owner));
    let x = g.concat_cols(&parts);
    let states = p.gru.run(g, store, x, &seqs).states;
    let wo = g.param(store, p.sl_out);
    let bo = g.param(store, p.sl_out_bias);
    g.affine(states, wo, bo)
}

/// Gold labels of a batch, aligned with the head outputs.
pub struct BatchTargets {
    pub intents: Vec<usize>,
    /// Gold BIO label ids per turn.
    pub slots: Vec<Vec<usize>>,
}

/// Loss nodes of the joint objective.
pub struct LossNodes {
    pub total: NodeId,
    pub ic: NodeId,
    pub sl: NodeId,
    pub sec: NodeId,
}

/// `L = L_IC + alpha L_SL + beta L_sec`, each term averaged over the batch;
/// the slot term first averages over the real tokens of each turn.
pub fn joint_loss_graph(
    g: &mut Graph,
    intent_logits: NodeId,
    sec_logits: NodeId,
    slot_logits: NodeId,
    gold: &BatchTargets,
    alpha: f64,
    beta: f64,
) -> LossNodes {
    let b = gold.intents.len().max(1) as f64;
    let ic_t = Rc::new(Targets {
        rows: gold.intents.iter().map(|&c| Some((c, 1.0 / b))).collect(),
    });
    let sl_t = Rc::new(Targets {
        rows: gold
            .slots
            .iter()
            .flat_map(|s| {
                let w = 1.0 / (s.len().max(1) as f64 * b);
                s.iter().map(move |&c| Some((c, w)))
            })
            .collect(),
    });
    let ic = g.cross_entropy(intent_logits, ic_t.clone());
    let sec = g.cross_entropy(sec_logits, ic_t);
    let sl = g.cross_entropy(slot_logits, sl_t);
    let a = g.scale(sl, alpha);
    let c = g.scale(sec, beta);
    let total = g.add(ic, a);
    let total = g.add(total, c);
    LossNodes { total, ic, sl, sec }
}

/// Outputs of the heads for one turn.
#[derive(Clone, Debug, PartialEq)]
pub struct TurnPrediction {
    pub intent_logits: Vec<f64>,
    pub sec_intent_logits: Vec<f64>,
    /// One row per real token.
    pub slot_logits: Mat,
    pub fc: Vec<f64>,
}

impl TurnPrediction {
    pub fn intent(&self) -> usize {
        argmax(&self.intent_logits, 0)
    }

    pub fn slots(&self) -> Vec<usize> {
        self.slot_logits.rows().into_iter().map(|r| argmax(&r.to_vec(), 0)).collect()
    }
}

/// Index of the largest value at or after `from` (ties go to the lowest index).
pub fn argmax(xs: &[f64], from: usize) -> usize {
    let mut best = from;
    for i in from..xs.len() {
        if xs[i] > xs[best] {
            best = i;
        }
    }
    best
}

fn check_width(m: &Mat, shape: (usize, usize), what: &str) -> Result<()> {
    if m.dim() != shape {
        return Err(Error::InvalidInput(format!("{what} has shape {:?}, expected {shape:?}", m.dim())));
    }
    Ok(())
}

/// Single-turn intent head; `cf` is `1 x d_T`, `utt` is `1 x 2 d_h`.
pub fn ic_forward(cf: &Mat, utt: &Mat, store: &ParamStore, p: &HeadParams) -> Result<(Mat, Mat)> {
    check_width(cf, (1, store.value(p.fc1).nrows()), "context feature")?;
    check_width(utt, (1, 2 * p.hidden_dim), "utterance vector")?;
    let mut g = Graph::new();
    let cf = g.constant(cf.clone());
    let utt = g.constant(utt.clone());
    let (logits, fc) = ic_graph(&mut g, store, p, cf, utt);
    Ok((g.value(logits).clone(), g.value(fc).clone()))
}

pub fn secondary_ic_forward(utt: &Mat, store: &ParamStore, p: &HeadParams) -> Result<Mat> {
    check_width(utt, (1, 2 * p.hidden_dim), "utterance vector")?;
    let mut g = Graph::new();
    let utt = g.constant(utt.clone());
    let logits = secondary_ic_graph(&mut g, store, p, utt);
    Ok(g.value(logits).clone())
}

/// Single-turn slot head over padded `k`-row inputs; returns `k x |S|` logits
/// with zero rows at padded positions.
pub fn sl_forward(
    token_states: &Mat,
    utt_embedding: &Mat,
    sl_hist: &Mat,
    fc: &Mat,
    token_mask: &[bool],
    store: &ParamStore,
    p: &HeadParams,
) -> Result<Mat> {
    let k = token_mask.len();
    let len = token_mask.iter().take_while(|m| **m).count();
    if token_mask[len..].iter().any(|m| *m) {
        return Err(Error::InvalidInput("token mask must be a prefix of real tokens".into()));
    }
    check_width(token_states, (k, 2 * p.hidden_dim), "token states")?;
    check_width(utt_embedding, (k, p.hidden_dim), "utterance embedding")?;
    check_width(sl_hist, (1, p.slot_dim), "slot history")?;
    check_width(fc, (1, p.hidden_dim), "fc")?;
    let n_labels = store.value(p.sl_out).ncols();
    let mut out = Mat::zeros((k, n_labels));
    if len == 0 {
        return Ok(out);
    }
    let mut g = Graph::new();
    let c = g.constant(token_states.clone());
    let h = g.constant(utt_embedding.clone());
    let sh = g.constant(sl_hist.clone());
    let f = g.constant(fc.clone());
    let logits = sl_graph(&mut g, store, p, c, h, &[0..len], sh, f);
    out.slice_mut(ndarray::s![..len, ..]).assign(g.value(logits));
    Ok(out)
}

fn cross_entropy(logits: &[f64], gold: usize) -> f64 {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
    lse - logits[gold]
}

/// Components of the joint objective for a single turn.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossParts {
    pub ic: f64,
    pub sl: f64,
    pub sec: f64,
}

impl LossParts {
    pub fn combine(&self, alpha: f64, beta: f64) -> f64 {
        self.ic + alpha * self.sl + beta * self.sec
    }

    pub fn of(pred: &TurnPrediction, gold: &Turn) -> Result<Self> {
        let n_intents = pred.intent_logits.len();
        if gold.intent >= n_intents {
            return Err(Error::IdOutOfRange {
                kind: "intent",
                id: gold.intent,
                size: n_intents,
            });
        }
        if pred.slot_logits.nrows() < gold.slots.len() {
            return Err(Error::InvalidInput(format!(
                "{} slot rows for {} tokens",
                pred.slot_logits.nrows(),
                gold.slots.len()
            )));
        }
        let n_labels = pred.slot_logits.ncols();
        let mut sl = 0.0;
        for (j, &tag) in gold.slots.iter().enumerate() {
            if tag >= n_labels {
                return Err(Error::IdOutOfRange {
                    kind: "slot label",
                    id: tag,
                    size: n_labels,
                });
            }
            sl += cross_entropy(&pred.slot_logits.row(j).to_vec(), tag);
        }
        if !gold.slots.is_empty() {
            sl /= gold.slots.len() as f64;
        }
        Ok(LossParts {
            ic: cross_entropy(&pred.intent_logits, gold.intent),
            sl,
            sec: cross_entropy(&pred.sec_intent_logits, gold.intent),
        })
    }
}

/// `L_IC + alpha L_SL + beta L_sec` for one turn.
pub fn joint_loss(pred: &TurnPrediction, gold: &Turn, alpha: f64, beta: f64) -> Result<f64> {
    if alpha < 0.0 || beta < 0.0 {
        return Err(Error::InvalidInput("loss weights must be non-negative".into()));
    }
    Ok(LossParts::of(pred, gold)?.combine(alpha, beta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup() -> (ParamStore, HeadParams) {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut store = ParamStore::new();
        let sizes = HeadSizes {
            turn_dim: 2,
            hidden_dim: 2,
            slot_dim: 1,
            slot_window: 3,
            n_intents: 2,
            n_slot_labels: 3,
        };
        let p = HeadParams::init(&mut store, &sizes, &mut rng);
        (store, p)
    }

    #[test]
    fn zero_inputs_give_bias_chain() {
        let (mut store, p) = setup();
        for id in [p.fc1, p.fc2, p.ic_out] {
            store.value_mut(id).fill(0.0);
        }
        *store.value_mut(p.fc1_bias) = array![[0.3, -0.1]];
        *store.value_mut(p.ic_out_bias) = array![[0.25, -2.0]];
        let (logits, fc) = ic_forward(&array![[0.0, 0.0]], &array![[0.0; 4]], &store, &p).unwrap();
        assert_eq!(logits, array![[0.25, -2.0]]);
        assert_eq!(fc, array![[0.0, 0.0]]);
    }

    #[test]
    fn hand_computed_intent_logits() {
        // d_T = 2, d_h = 2, |I| = 2
        let (mut store, p) = setup();
        *store.value_mut(p.fc1) = array![[1.0, 0.0], [0.0, 1.0]];
        store.value_mut(p.fc1_bias).fill(0.0);
        let mut fc2 = Mat::zeros((6, 2));
        fc2[[0, 0]] = 1.0; // h1[0] -> fc[0]
        fc2[[2, 1]] = 1.0; // utt[0] -> fc[1]
        *store.value_mut(p.fc2) = fc2;
        store.value_mut(p.fc2_bias).fill(0.0);
        *store.value_mut(p.ic_out) = array![[1.0, -1.0], [2.0, 0.5]];
        *store.value_mut(p.ic_out_bias) = array![[0.1, 0.2]];
        let cf = array![[0.5, -0.3]];
        let utt = array![[0.7, 0.0, 0.0, 0.0]];
        let (logits, fc) = ic_forward(&cf, &utt, &store, &p).unwrap();
        let f0 = 0.5f64.tanh().tanh();
        let f1 = 0.7f64.tanh();
        assert!((fc[[0, 0]] - f0).abs() < 1e-15 && (fc[[0, 1]] - f1).abs() < 1e-15);
        let expect = [f0 + 2.0 * f1 + 0.1, -f0 + 0.5 * f1 + 0.2];
        for c in 0..2 {
            assert!((logits[[0, c]] - expect[c]).abs() < 1e-14);
        }
        assert_eq!(secondary_ic_forward(&utt, &store, &p).unwrap().dim(), (1, 2));
    }

    #[test]
    fn single_token_window_pads_edges() {
        let (store, p) = setup();
        // With one token, the neighbour blocks of the GRU input are zero; so
        // zeroing the neighbour weight rows must not change the logits.
        let c = array![[0.5, -0.5, 1.0, 0.2]];
        let h = array![[0.3, 0.9]];
        let sh = array![[0.4]];
        let fc = array![[0.1, -0.6]];
        let a = sl_forward(&c, &h, &sh, &fc, &[true], &store, &p).unwrap();
        let mut store2 = store.clone();
        let wi = store2.value_mut(p.gru.input);
        wi.slice_mut(ndarray::s![0..4, ..]).fill(0.0);
        wi.slice_mut(ndarray::s![8..12, ..]).fill(0.0);
        let b = sl_forward(&c, &h, &sh, &fc, &[true], &store2, &p).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.dim(), (1, 3));
    }

    #[test]
    fn slot_logits_shape_and_pad_rows() {
        let (store, p) = setup();
        let c = Mat::from_elem((4, 4), 0.3);
        let h = Mat::from_elem((4, 2), -0.2);
        let out = sl_forward(&c, &h, &array![[0.0]], &array![[0.0, 0.0]], &[true, true, false, false], &store, &p)
            .unwrap();
        assert_eq!(out.dim(), (4, 3));
        assert!(out.row(2).iter().chain(out.row(3).iter()).all(|&x| x == 0.0));
    }

    #[test]
    fn hand_unrolled_slot_recurrence() {
        // d_h = 1 (so 2 d_h = 2), d_SL = 1, w = 3, 3 labels; 2 tokens.
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let sizes = HeadSizes {
            turn_dim: 1,
            hidden_dim: 1,
            slot_dim: 1,
            slot_window: 3,
            n_intents: 2,
            n_slot_labels: 2,
        };
        let p = HeadParams::init(&mut store, &sizes, &mut rng);
        // gate saturated to the context side: h_j = C_j
        store.value_mut(p.gate_bias).fill(1e3);
        // GRU input width 3*2 + 1 + 1 = 8; candidate reads only C_j[0] of the centre block
        let mut wi = Mat::zeros((8, 3));
        wi[[2, 2]] = 1.0;
        *store.value_mut(p.gru.input) = wi;
        store.value_mut(p.gru.input_bias).fill(0.0);
        *store.value_mut(p.gru.recurrent) = array![[0.0, 0.0, 1.0]];
        store.value_mut(p.gru.recurrent_bias).fill(0.0);
        *store.value_mut(p.sl_out) = array![[1.0, -1.0]];
        store.value_mut(p.sl_out_bias).fill(0.0);
        let c = array![[1.0, 5.0], [-1.0, 5.0]];
        let h = array![[0.0], [0.0]];
        let out = sl_forward(&c, &h, &array![[0.0]], &array![[0.0]], &[true, true], &store, &p).unwrap();
        // z = r = 1/2; n_t = tanh(x_t + h/2); h_t = (n_t + h_{t-1}) / 2
        let h1 = 0.5 * 1f64.tanh();
        let h2 = 0.5 * ((-1.0 + 0.5 * h1).tanh() + h1);
        assert!((out[[0, 0]] - h1).abs() < 1e-14 && (out[[0, 1]] + h1).abs() < 1e-14);
        assert!((out[[1, 0]] - h2).abs() < 1e-14);
    }

    fn prediction(intent: Vec<f64>, sec: Vec<f64>, slots: Mat) -> TurnPrediction {
        TurnPrediction {
            intent_logits: intent,
            sec_intent_logits: sec,
            slot_logits: slots,
            fc: vec![],
        }
    }

    fn gold(intent: usize, slots: Vec<usize>) -> Turn {
        Turn {
            text: String::new(),
            tokens: vec![],
            intent,
            slots,
            dialog_act: 0,
        }
    }

    #[test]
    fn loss_combination() {
        let parts = LossParts { ic: 1.0, sl: 2.0, sec: 3.0 };
        assert!((parts.combine(0.9, 0.9) - 5.5).abs() < 1e-12);
        assert_eq!(parts.combine(0.0, 0.0), 1.0);
    }

    #[test]
    fn confident_correct_prediction_has_zero_loss() {
        let pred = prediction(vec![0.0, 60.0, 0.0], vec![0.0, 60.0, 0.0], array![[50.0, 0.0], [0.0, 50.0]]);
        let l = joint_loss(&pred, &gold(1, vec![0, 1]), 0.9, 0.9).unwrap();
        assert!(l.abs() < 1e-6, "{l}");
    }

    #[test]
    fn loss_rejects_bad_labels() {
        let pred = prediction(vec![0.0, 1.0], vec![0.0, 1.0], array![[0.0, 0.0]]);
        assert!(joint_loss(&pred, &gold(2, vec![0]), 0.9, 0.9).is_err());
        assert!(joint_loss(&pred, &gold(1, vec![2]), 0.9, 0.9).is_err());
        assert!(joint_loss(&pred, &gold(1, vec![0]), -1.0, 0.9).is_err());
    }

    #[test]
    fn zero_weights_leave_intent_loss() {
        let pred = prediction(vec![0.3, 1.0], vec![2.0, -1.0], array![[0.5, -0.5]]);
        let g = gold(0, vec![1]);
        let parts = LossParts::of(&pred, &g).unwrap();
        assert_eq!(joint_loss(&pred, &g, 0.0, 0.0).unwrap(), parts.ic);
        let expect = (0.3f64.exp() + 1f64.exp()).ln() - 0.3;
        assert!((parts.ic - expect).abs() < 1e-12);
    }

    #[test]
    fn argmax_ties_and_offset() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0], 0), 1);
        assert_eq!(argmax(&[9.0, 3.0, 4.0], 1), 2);
    }
}
