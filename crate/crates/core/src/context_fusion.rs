//! Per-turn contextual signals and temporal fusion of the turn window.
//!
//! A turn vector is `[utterance (2 d_h) | intent (d_I) | dialog act (d_DA)]`.
//! Before fusion each window row gets the learned turn-position embedding
//! `p_c[t]`; the fused context is a per-dimension softmax-weighted average of
//! the non-pad rows (or the final GRU state for the recurrent baseline).

use std::collections::BTreeSet;
use std::ops::Range;
use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::S2tParams;
use crate::error::{Error, Result};
use crate::recurrent::GruParams;
use crate::tensor::{Graph, Mat, NodeId, ParamId, ParamStore, RowMix};

#[derive(Clone, Debug)]
pub struct SignalParams {
    pub intent_embedding: ParamId,
    pub da_embedding: ParamId,
    pub slot_embedding: ParamId,
    pub turn_pos_embedding: ParamId,
    pub layout: SignalLayout,
}

#[derive(Clone, Debug)]
pub enum TemporalParams {
    Attention(S2tParams),
    Recurrent(GruParams),
}

/// Named, contiguous column blocks of the turn vector.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SignalLayout {
    pub blocks: Vec<(String, Range<usize>)>,
}

impl SignalLayout {
    pub fn turn_vector(utt: usize, intent: usize, da: usize) -> Self {
        SignalLayout {
            blocks: vec![
                ("utt".into(), 0..utt),
                ("intent".into(), utt..utt + intent),
                ("da".into(), utt + intent..utt + intent + da),
            ],
        }
    }

    pub fn width(&self) -> usize {
        self.blocks.last().map_or(0, |(_, r)| r.end)
    }

    fn check_partition(&self, width: usize) -> Result<()> {
        let mut next = 0;
        for (name, r) in &self.blocks {
            if r.start != next || r.end <= r.start {
                return Err(Error::InvalidInput(format!("signal block {name} at {r:?} leaves a gap or overlap")));
            }
            next = r.end;
        }
        if next != width {
            return Err(Error::InvalidInput(format!("layout covers {next} of {width} dimensions")));
        }
        Ok(())
    }
}

impl SignalParams {
    #[allow(clippy::too_many_arguments)]
    pub fn init<R: Rng>(
        store: &mut ParamStore,
        sizes: (usize, usize, usize),
        utt_dim: usize,
        intent_dim: usize,
        da_dim: usize,
        slot_dim: usize,
        window: usize,
        rng: &mut R,
    ) -> Self {
        let (n_intents, n_das, n_slot_types) = sizes;
        let layout = SignalLayout::turn_vector(utt_dim, intent_dim, da_dim);
        SignalParams {
            intent_embedding: store.uniform("context.intent_embedding", n_intents, intent_dim, 0.1, rng),
            da_embedding: store.uniform("context.da_embedding", n_das, da_dim, 0.1, rng),
            slot_embedding: store.uniform("context.slot_embedding", n_slot_types.max(1), slot_dim, 0.1, rng),
            turn_pos_embedding: store.uniform("context.turn_pos_embedding", window + 1, layout.width(), 0.1, rng),
            layout,
        }
    }

    pub fn turn_dim(&self) -> usize {
        self.layout.width()
    }
}

/// One window row to assemble in a batched graph.
#[derive(Clone, Copy, Debug)]
pub struct WindowRow {
    /// Row of the sentence-vector matrix, `None` for a zeroed utterance.
    pub utterance: Option<usize>,
    pub intent: usize,
    pub dialog_act: usize,
    /// Slot position in the window (0 = oldest).
    pub position: usize,
    pub is_pad: bool,
}

/// Fused context for a batch of windows.
pub struct FusedBatch {
    pub context: NodeId,
    /// Softmax aggregation node whose aux holds one weight row per window row (attention only).
    pub attention: Option<NodeId>,
    /// Non-pad window rows of each window, in the order used by the aggregation.
    pub groups: Vec<Vec<usize>>,
}

/// Builds `T' = [u | h(I) | h(DA)] + p_c` for every window row.
pub fn turn_matrix(g: &mut Graph, store: &ParamStore, p: &SignalParams, sentences: NodeId, rows: &[WindowRow]) -> NodeId {
    let utt_idx: Vec<Option<usize>> = rows.iter().map(|r| r.utterance).collect();
    let intents: Vec<usize> = rows.iter().map(|r| r.intent).collect();
    let das: Vec<usize> = rows.iter().map(|r| r.dialog_act).collect();
    let pos: Vec<usize> = rows.iter().map(|r| r.position).collect();
    let utt = g.rows(sentences, Rc::new(RowMix::gather_opt(&utt_idx)));
    let it = g.param(store, p.intent_embedding);
    let it = g.rows(it, Rc::new(RowMix::gather(&intents)));
    let dt = g.param(store, p.da_embedding);
    let dt = g.rows(dt, Rc::new(RowMix::gather(&das)));
    let t = g.concat_cols(&[utt, it, dt]);
    let pc = g.param(store, p.turn_pos_embedding);
    let pc = g.rows(pc, Rc::new(RowMix::gather(&pos)));
    g.add(t, pc)
}

/// Fuses each window (a contiguous run of `width` rows of `turns`) into one row.
pub fn fuse_windows(
    g: &mut Graph,
    store: &ParamStore,
    temporal: &TemporalParams,
    turns: NodeId,
    pads: &[bool],
    width: usize,
) -> FusedBatch {
    let groups: Vec<Vec<usize>> = pads
        .chunks(width)
        .enumerate()
        .map(|(w, chunk)| {
            chunk
                .iter()
                .enumerate()
                .filter(|(_, pad)| !**pad)
                .map(|(t, _)| w * width + t)
                .collect()
        })
        .collect();
    match temporal {
        TemporalParams::Attention(s2t) => {
            let context = s2t.aggregate(g, store, turns, &groups);
            FusedBatch {
                context,
                attention: Some(context),
                groups,
            }
        }
        TemporalParams::Recurrent(gru) => {
            let out = gru.run(g, store, turns, &groups);
            FusedBatch {
                context: out.finals,
                attention: None,
                groups,
            }
        }
    }
}

/// Mean of the embedding rows of the distinct slot types in each set; empty sets give zero rows.
pub fn slot_history_rows(g: &mut Graph, store: &ParamStore, p: &SignalParams, sets: &[Vec<usize>]) -> NodeId {
    let table = g.param(store, p.slot_embedding);
    g.rows(table, Rc::new(RowMix::mean_of(sets)))
}

fn lookup(store: &ParamStore, table: ParamId, id: usize, kind: &'static str) -> Result<Mat> {
    let t = store.value(table);
    if id >= t.nrows() {
        return Err(Error::IdOutOfRange { kind, id, size: t.nrows() });
    }
    Ok(t.row(id).insert_axis(ndarray::Axis(0)).to_owned())
}

pub fn embed_intent(intent: usize, store: &ParamStore, p: &SignalParams) -> Result<Mat> {
    lookup(store, p.intent_embedding, intent, "intent")
}

pub fn embed_da(da: usize, store: &ParamStore, p: &SignalParams) -> Result<Mat> {
    lookup(store, p.da_embedding, da, "dialog act")
}

pub fn embed_slot_history(slot_types: &BTreeSet<usize>, store: &ParamStore, p: &SignalParams) -> Result<Mat> {
    let t = store.value(p.slot_embedding);
    let mut out = Mat::zeros((1, t.ncols()));
    for &s in slot_types {
        out += &lookup(store, p.slot_embedding, s, "slot type")?;
    }
    if !slot_types.is_empty() {
        out /= slot_types.len() as f64;
    }
    Ok(out)
}

pub fn build_turn_vector(utt: &Mat, intent: &Mat, da: &Mat, layout: &SignalLayout) -> Result<Mat> {
    let parts = [utt, intent, da];
    for ((name, r), m) in layout.blocks.iter().zip(parts) {
        if m.dim() != (1, r.len()) {
            return Err(Error::InvalidInput(format!(
                "{name} signal has shape {:?}, expected (1, {})",
                m.dim(),
                r.len()
            )));
        }
    }
    Ok(ndarray::concatenate(ndarray::Axis(1), &[utt.view(), intent.view(), da.view()]).expect("widths checked"))
}

/// Fuses a single `(K+1) x d_T` window. Returns the `1 x d_T` context and the
/// `d_T x (K+1)` attention matrix (zero columns at pads).
pub fn fuse_context(
    window: &Mat,
    pad_mask: &[bool],
    store: &ParamStore,
    p: &SignalParams,
    s2t: &S2tParams,
) -> Result<(Mat, Mat)> {
    let width = window.nrows();
    if pad_mask.len() != width || width != store.value(p.turn_pos_embedding).nrows() {
        return Err(Error::InvalidInput(format!(
            "window of {width} rows with {} pad flags does not match the configured window",
            pad_mask.len()
        )));
    }
    if pad_mask.last() != Some(&false) {
        return Err(Error::InvalidInput("the current turn must not be padded".into()));
    }
    let mut g = Graph::new();
    let t = g.constant(window.clone());
    let pc = g.param(store, p.turn_pos_embedding);
    let t = g.add(t, pc);
    let fused = fuse_windows(&mut g, store, &TemporalParams::Attention(s2t.clone()), t, pad_mask, width);
    let weights = g.aux(fused.context).expect("attention weights");
    let mut attn = Mat::zeros((window.ncols(), width));
    for &t in &fused.groups[0] {
        attn.column_mut(t).assign(&weights.row(t));
    }
    Ok((g.value(fused.context).clone(), attn))
}

/// Per-signal attention weights for one window, averaged over each signal's dimensions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionSummary {
    pub signals: Vec<(String, Vec<f64>)>,
}

impl AttentionSummary {
    pub fn get(&self, name: &str) -> Option<&[f64]> {
        self.signals.iter().find(|(n, _)| n == name).map(|(_, w)| w.as_slice())
    }
}

pub fn summarize_attention(attn: &Mat, layout: &SignalLayout) -> Result<AttentionSummary> {
    layout.check_partition(attn.nrows())?;
    let signals = layout
        .blocks
        .iter()
        .map(|(name, r)| {
            let block = attn.slice(ndarray::s![r.clone(), ..]);
            let mean = block.mean_axis(ndarray::Axis(0)).expect("non-empty block");
            (name.clone(), mean.to_vec())
        })
        .collect();
    Ok(AttentionSummary { signals })
}

/// Attention export record for one evaluated turn.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionRecord {
    pub conv: String,
    pub turn: usize,
    pub signals: AttentionSignals,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionSignals {
    pub utt: Vec<f64>,
    pub intent: Vec<f64>,
    pub da: Vec<f64>,
}

impl AttentionRecord {
    pub fn new(conv: &str, turn: usize, summary: &AttentionSummary) -> Result<Self> {
        let get = |n: &str| {
            summary
                .get(n)
                .map(<[f64]>::to_vec)
                .ok_or_else(|| Error::InvalidInput(format!("attention summary lacks the {n} signal")))
        };
        Ok(AttentionRecord {
            conv: conv.to_string(),
            turn,
            signals: AttentionSignals {
                utt: get("utt")?,
                intent: get("intent")?,
                da: get("da")?,
            },
        })
    }
}
