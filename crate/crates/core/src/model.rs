//! The full model: encoder, context fusion and heads, with the three variants
//! (context attention, no context, recurrent context).

use std::collections::BTreeSet;
use std::fmt;
use std::ops::Range;
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::context_fusion::{
    fuse_windows, slot_history_rows, turn_matrix, FusedBatch, SignalLayout, SignalParams, TemporalParams, WindowRow,
};
use crate::data::vocab::{Vocabularies, DUMMY_DA_ID, DUMMY_INTENT_ID, UNK_ID};
use crate::data::{build_window, ContextWindow, Conversation, History};
use crate::encoder::{encode_batch, Dropout, EncodedBatch, EncoderParams, S2tParams, TokenBatch};
use crate::error::{Error, Result};
use crate::heads::{ic_graph, secondary_ic_graph, sl_graph, HeadParams, HeadSizes, TurnPrediction};
use crate::recurrent::GruParams;
use crate::tensor::{Graph, Mat, NodeId, ParamStore, TensorArchive};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub intent_dim: usize,
    pub da_dim: usize,
    pub slot_dim: usize,
    /// Number of previous turns in the context window (`K`).
    pub window: usize,
    pub max_tokens: usize,
    pub slot_window: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        ModelDims {
            embed_dim: 56,
            hidden_dim: 56,
            intent_dim: 16,
            da_dim: 16,
            slot_dim: 16,
            window: 3,
            max_tokens: crate::data::MAX_TOKENS,
            slot_window: 3,
        }
    }
}

impl ModelDims {
    /// Small sizes used for finite-difference checks.
    pub fn toy() -> Self {
        ModelDims {
            embed_dim: 4,
            hidden_dim: 4,
            intent_dim: 3,
            da_dim: 3,
            slot_dim: 3,
            window: 2,
            max_tokens: 5,
            slot_window: 3,
        }
    }

    pub fn turn_dim(&self) -> usize {
        2 * self.hidden_dim + self.intent_dim + self.da_dim
    }

    pub fn validate(&self) -> Result<()> {
        let sizes = [
            ("embed_dim", self.embed_dim),
            ("hidden_dim", self.hidden_dim),
            ("intent_dim", self.intent_dim),
            ("da_dim", self.da_dim),
            ("slot_dim", self.slot_dim),
            ("max_tokens", self.max_tokens),
        ];
        if let Some((name, _)) = sizes.iter().find(|(_, v)| *v == 0) {
            return Err(Error::InvalidInput(format!("{name} must be positive")));
        }
        if self.slot_window.is_multiple_of(2) {
            return Err(Error::InvalidInput("slot_window must be odd".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VariantKind {
    Casa,
    Nc,
    Cgru,
}

impl fmt::Display for VariantKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            VariantKind::Casa => "casa",
            VariantKind::Nc => "nc",
            VariantKind::Cgru => "cgru",
        })
    }
}

impl FromStr for VariantKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "casa" => Ok(VariantKind::Casa),
            "nc" => Ok(VariantKind::Nc),
            "cgru" => Ok(VariantKind::Cgru),
            other => Err(Error::InvalidInput(format!(
                "unknown variant {other:?} (expected casa, nc or cgru)"
            ))),
        }
    }
}

/// Which history signals reach the model. A disabled signal is replaced by
/// its neutral value: dummy intent/act ids, a zero utterance vector for
/// previous turns, an empty slot history.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SignalFlags {
    pub use_intent_hist: bool,
    pub use_slot_hist: bool,
    pub use_utt_hist: bool,
    pub use_da_hist: bool,
}

impl SignalFlags {
    pub const ALL: SignalFlags = SignalFlags {
        use_intent_hist: true,
        use_slot_hist: true,
        use_utt_hist: true,
        use_da_hist: true,
    };
    pub const NONE: SignalFlags = SignalFlags {
        use_intent_hist: false,
        use_slot_hist: false,
        use_utt_hist: false,
        use_da_hist: false,
    };

    pub fn any(&self) -> bool {
        self.use_intent_hist || self.use_slot_hist || self.use_utt_hist || self.use_da_hist
    }
}

impl fmt::Display for SignalFlags {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mark = |b: bool| if b { '+' } else { '-' };
        write!(
            f,
            "{}I {}SL {}Utt {}DA",
            mark(self.use_intent_hist),
            mark(self.use_slot_hist),
            mark(self.use_utt_hist),
            mark(self.use_da_hist)
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelVariant {
    pub kind: VariantKind,
    pub flags: SignalFlags,
}

impl ModelVariant {
    pub fn casa() -> Self {
        Self::new(VariantKind::Casa, SignalFlags::ALL)
    }

    pub fn nc() -> Self {
        Self::new(VariantKind::Nc, SignalFlags::NONE)
    }

    pub fn cgru() -> Self {
        Self::new(VariantKind::Cgru, SignalFlags::ALL)
    }

    /// The no-context variant always runs with every signal off.
    pub fn new(kind: VariantKind, flags: SignalFlags) -> Self {
        let flags = if kind == VariantKind::Nc { SignalFlags::NONE } else { flags };
        ModelVariant { kind, flags }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub dims: ModelDims,
    pub variant: ModelVariant,
}

impl ModelConfig {
    /// Effective number of previous turns in the window.
    pub fn window(&self) -> usize {
        match self.variant.kind {
            VariantKind::Nc => 0,
            _ => self.dims.window,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    /// Seed of the parameter initialisation and of the training run.
    pub seed: u64,
    pub vocabs: Arc<Vocabularies>,
    pub store: ParamStore,
    pub encoder: EncoderParams,
    pub signals: SignalParams,
    pub temporal: TemporalParams,
    pub heads: HeadParams,
}

/// Training-time noise: dropout and singleton-to-UNK replacement.
pub struct Noise<'a> {
    pub rng: &'a mut ChaCha8Rng,
    pub dropout: f64,
    pub unk_prob: f64,
}

/// Encoder output for every turn of a set of conversations.
pub struct EncodedConversations {
    pub nodes: EncodedBatch,
    /// Index of the first utterance of each conversation.
    pub first_utterance: Vec<usize>,
    /// Token rows of each utterance.
    pub spans: Vec<Range<usize>>,
}

impl EncodedConversations {
    pub fn utterance(&self, conv: usize, turn: usize) -> usize {
        self.first_utterance[conv] + turn
    }
}

/// A turn to predict, with the context window it sees.
#[derive(Clone, Debug)]
pub struct TurnQuery {
    pub conv: usize,
    pub turn: usize,
    pub window: ContextWindow,
}

pub struct TurnOutputs {
    pub intent_logits: NodeId,
    pub sec_logits: NodeId,
    pub slot_logits: NodeId,
    pub fc: NodeId,
    pub fused: FusedBatch,
    /// Rows of `slot_logits` belonging to each query.
    pub slot_rows: Vec<Range<usize>>,
}

impl Model {
    pub fn new(dims: ModelDims, variant: ModelVariant, vocabs: Arc<Vocabularies>, seed: u64) -> Result<Self> {
        dims.validate()?;
        let config = ModelConfig { dims, variant };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let d = dims.hidden_dim;
        let encoder = EncoderParams::init(&mut store, vocabs.tokens.len(), dims.embed_dim, d, dims.max_tokens, &mut rng);
        let signals = SignalParams::init(
            &mut store,
            (vocabs.intents.len(), vocabs.dialog_acts.len(), vocabs.slot_types.len()),
            2 * d,
            dims.intent_dim,
            dims.da_dim,
            dims.slot_dim,
            config.window(),
            &mut rng,
        );
        let temporal = match variant.kind {
            VariantKind::Cgru => {
                TemporalParams::Recurrent(GruParams::init(&mut store, "context.gru", dims.turn_dim(), dims.turn_dim(), &mut rng))
            }
            _ => TemporalParams::Attention(S2tParams::init(&mut store, "context.s2t", dims.turn_dim(), &mut rng)),
        };
        let heads = HeadParams::init(
            &mut store,
            &HeadSizes {
                turn_dim: dims.turn_dim(),
                hidden_dim: d,
                slot_dim: dims.slot_dim,
                slot_window: dims.slot_window,
                n_intents: vocabs.intents.len(),
                n_slot_labels: vocabs.slot_labels.len(),
            },
            &mut rng,
        );
        Ok(Model {
            config,
            seed,
            vocabs,
            store,
            encoder,
            signals,
            temporal,
            heads,
        })
    }

    pub fn layout(&self) -> &SignalLayout {
        &self.signals.layout
    }

    /// Context window for turn `i`, with history labels from `history`.
    pub fn window(&self, conv: &Conversation, i: usize, history: &History<'_>) -> Result<ContextWindow> {
        build_window(conv, i, self.config.window(), history)
    }

    pub fn encode(&self, g: &mut Graph, convs: &[&Conversation], mut noise: Option<&mut Noise<'_>>) -> EncodedConversations {
        let mut batch = TokenBatch::default();
        let mut first_utterance = Vec::with_capacity(convs.len());
        for conv in convs {
            first_utterance.push(batch.spans.len());
            for turn in &conv.turns {
                let mut ids = turn.token_ids();
                ids.truncate(self.config.dims.max_tokens);
                if let Some(n) = noise.as_deref_mut() {
                    if n.unk_prob > 0.0 {
                        for id in ids.iter_mut() {
                            if self.vocabs.is_singleton(*id) && n.rng.gen_bool(n.unk_prob) {
                                *id = UNK_ID;
                            }
                        }
                    }
                }
                batch.push(&ids);
            }
        }
        let nodes = match noise {
            Some(n) => {
                let mut d = Dropout {
                    rate: n.dropout,
                    rng: &mut *n.rng,
                };
                encode_batch(g, &self.store, &self.encoder, &batch, Some(&mut d))
            }
            None => encode_batch::<ChaCha8Rng>(g, &self.store, &self.encoder, &batch, None),
        };
        EncodedConversations {
            nodes,
            first_utterance,
            spans: batch.spans,
        }
    }

    fn window_rows(&self, enc: &EncodedConversations, q: &TurnQuery) -> Vec<WindowRow> {
        let flags = self.config.variant.flags;
        q.window
            .slots
            .iter()
            .zip(&q.window.pad_mask)
            .enumerate()
            .map(|(position, (slot, &is_pad))| match slot.turn {
                None => WindowRow {
                    utterance: None,
                    intent: DUMMY_INTENT_ID,
                    dialog_act: DUMMY_DA_ID,
                    position,
                    is_pad,
                },
                Some(t) if t == q.turn => WindowRow {
                    utterance: Some(enc.utterance(q.conv, t)),
                    intent: DUMMY_INTENT_ID,
                    dialog_act: DUMMY_DA_ID,
                    position,
                    is_pad,
                },
                Some(t) => WindowRow {
                    utterance: flags.use_utt_hist.then(|| enc.utterance(q.conv, t)),
                    intent: if flags.use_intent_hist { slot.intent } else { DUMMY_INTENT_ID },
                    dialog_act: if flags.use_da_hist { slot.dialog_act } else { DUMMY_DA_ID },
                    position,
                    is_pad,
                },
            })
            .collect()
    }

    /// Runs context fusion and both heads for a set of turns of already encoded conversations.
    pub fn predict(&self, g: &mut Graph, enc: &EncodedConversations, queries: &[TurnQuery]) -> TurnOutputs {
        let width = self.config.window() + 1;
        let mut rows = Vec::with_capacity(queries.len() * width);
        for q in queries {
            debug_assert_eq!(q.window.width(), width);
            rows.extend(self.window_rows(enc, q));
        }
        let pads: Vec<bool> = rows.iter().map(|r| r.is_pad).collect();
        let turns = turn_matrix(g, &self.store, &self.signals, enc.nodes.sentence, &rows);
        let fused = fuse_windows(g, &self.store, &self.temporal, turns, &pads, width);

        let current: Vec<usize> = queries.iter().map(|q| enc.utterance(q.conv, q.turn)).collect();
        let utt = g.rows(enc.nodes.sentence, std::rc::Rc::new(crate::tensor::RowMix::gather(&current)));
        let (intent_logits, fc) = ic_graph(g, &self.store, &self.heads, fused.context, utt);
        let sec_logits = secondary_ic_graph(g, &self.store, &self.heads, utt);

        let use_slots = self.config.variant.flags.use_slot_hist;
        let sets: Vec<Vec<usize>> = queries
            .iter()
            .map(|q| {
                if use_slots {
                    q.window.slot_history.iter().copied().collect()
                } else {
                    Vec::new()
                }
            })
            .collect();
        let slot_hist = slot_history_rows(g, &self.store, &self.signals, &sets);
        let spans: Vec<Range<usize>> = current.iter().map(|&u| enc.spans[u].clone()).collect();
        let slot_logits = sl_graph(
            g,
            &self.store,
            &self.heads,
            enc.nodes.context,
            enc.nodes.hidden,
            &spans,
            slot_hist,
            fc,
        );
        let mut slot_rows = Vec::with_capacity(spans.len());
        let mut start = 0;
        for s in &spans {
            slot_rows.push(start..start + s.len());
            start += s.len();
        }
        TurnOutputs {
            intent_logits,
            sec_logits,
            slot_logits,
            fc,
            fused,
            slot_rows,
        }
    }

    pub fn predictions(&self, g: &Graph, out: &TurnOutputs) -> Vec<TurnPrediction> {
        let il = g.value(out.intent_logits);
        let sl = g.value(out.sec_logits);
        let fc = g.value(out.fc);
        let slots = g.value(out.slot_logits);
        out.slot_rows
            .iter()
            .enumerate()
            .map(|(m, r)| TurnPrediction {
                intent_logits: il.row(m).to_vec(),
                sec_intent_logits: sl.row(m).to_vec(),
                slot_logits: slots.slice(ndarray::s![r.clone(), ..]).to_owned(),
                fc: fc.row(m).to_vec(),
            })
            .collect()
    }

    /// `d_T x (K+1)` temporal attention of query `m`; `None` for the recurrent variant.
    pub fn attention(&self, g: &Graph, out: &TurnOutputs, m: usize) -> Option<Mat> {
        let node = out.fused.attention?;
        let weights = g.aux(node)?;
        let width = self.config.window() + 1;
        let mut attn = Mat::zeros((weights.ncols(), width));
        for &row in &out.fused.groups[m] {
            attn.column_mut(row - m * width).assign(&weights.row(row));
        }
        Some(attn)
    }

    /// Predicted intent, never the dummy symbol.
    pub fn decode_intent(&self, pred: &TurnPrediction) -> usize {
        let from = if pred.intent_logits.len() > 1 { DUMMY_INTENT_ID + 1 } else { 0 };
        crate::heads::argmax(&pred.intent_logits, from)
    }

    /// Slot types named by a predicted label sequence.
    pub fn slot_types_of(&self, labels: &[usize]) -> BTreeSet<usize> {
        labels.iter().filter_map(|&l| self.vocabs.slot_type_of(l)).collect()
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.config,
            seed: self.seed,
            vocabs: (*self.vocabs).clone(),
            params: self.store.to_archive(),
        }
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self> {
        let mut model = Model::new(ckpt.config.dims, ckpt.config.variant, Arc::new(ckpt.vocabs), ckpt.seed)?;
        model.store.load_archive(&ckpt.params)?;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Model::from_checkpoint(Checkpoint::load(path)?)
    }
}

/// Serialized model: configuration, vocabularies and named parameter tensors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub config: ModelConfig,
    #[serde(default)]
    pub seed: u64,
    pub vocabs: Vocabularies,
    pub params: TensorArchive,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        serde_json::to_writer(std::io::BufWriter::new(file), self)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        serde_json::from_reader(std::io::BufReader::new(file))
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
    }
}
