//! Training loop, evaluation with gold or predicted history, metrics and
//! the signal ablation grid.

use std::collections::BTreeSet;
use std::fmt;
use std::io::Write;
use std::str::FromStr;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::vocab::OUTSIDE_ID;
use crate::data::{Conversation, Dataset, History};
use crate::error::{Error, Result};
use crate::heads::{joint_loss_graph, BatchTargets, LossNodes};
use crate::model::{Model, ModelDims, ModelVariant, Noise, SignalFlags, TurnQuery};
use crate::tensor::{Adam, Graph, Mat};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hyperparams {
    pub dims: ModelDims,
    pub dropout: f64,
    pub lr: f64,
    pub alpha: f64,
    pub beta: f64,
    pub patience: usize,
    /// Minimum validation IC gain, in accuracy points, that resets patience.
    pub min_delta: f64,
    pub seeds: Vec<u64>,
    /// Target number of turns per mini-batch; conversations are never split.
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Probability of replacing a singleton training token with UNK.
    pub unk_prob: f64,
    /// Global gradient-norm clipping threshold.
    pub clip_norm: Option<f64>,
    /// Learning-rate factor applied after an epoch whose mean training loss
    /// does not improve on the best so far. 1 disables the schedule.
    pub lr_decay: f64,
    /// History used when scoring the validation split for early stopping.
    pub val_history: HistoryPolicy,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Hyperparams {
            dims: ModelDims::default(),
            dropout: 0.3,
            lr: 0.01,
            alpha: 0.9,
            beta: 0.9,
            patience: 10,
            min_delta: 0.5,
            seeds: vec![1, 2, 3],
            batch_size: 32,
            max_epochs: 100,
            unk_prob: 0.1,
            clip_norm: Some(5.0),
            lr_decay: 0.5,
            val_history: HistoryPolicy::Predicted,
        }
    }
}

impl Hyperparams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidInput(m.to_string()));
        if self.patience == 0 {
            return bad("patience must be at least 1");
        }
        if self.seeds.is_empty() {
            return bad("at least one seed is required");
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return bad("batch_size and max_epochs must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout) || !(0.0..=1.0).contains(&self.unk_prob) {
            return bad("dropout must be in [0, 1) and unk_prob in [0, 1]");
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return bad("lr_decay must be in (0, 1]");
        }
        if !(self.lr > 0.0) || self.alpha < 0.0 || self.beta < 0.0 || self.min_delta < 0.0 {
            return bad("lr must be positive; alpha, beta and min_delta non-negative");
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HistoryPolicy {
    Gold,
    Predicted,
}

impl fmt::Display for HistoryPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            HistoryPolicy::Gold => "gold",
            HistoryPolicy::Predicted => "predicted",
        })
    }
}

impl FromStr for HistoryPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gold" => Ok(HistoryPolicy::Gold),
            "predicted" => Ok(HistoryPolicy::Predicted),
            other => Err(Error::InvalidInput(format!(
                "unknown history policy {other:?} (expected gold or predicted)"
            ))),
        }
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_ic: f64,
    pub val_sl_f1: f64,
}

pub struct TrainOutcome {
    /// Parameters from the epoch with the best validation IC.
    pub model: Model,
    pub log: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_ic: f64,
    pub stopped_early: bool,
}

/// Scores for one evaluated split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub ic_accuracy: f64,
    pub sl_token_f1: f64,
    pub ic_first_turn: Option<f64>,
    pub ic_followup: Option<f64>,
    pub n_turns: usize,
    pub n_first: usize,
    pub n_followup: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedMetrics {
    pub seed: u64,
    pub metrics: Metrics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_seed: Vec<SeedMetrics>,
    pub mean: Metrics,
}

impl MetricsReport {
    pub fn new(per_seed: Vec<SeedMetrics>) -> Result<Self> {
        if per_seed.is_empty() {
            return Err(Error::InvalidInput("no per-seed metrics to average".into()));
        }
        let all: Vec<&Metrics> = per_seed.iter().map(|s| &s.metrics).collect();
        let mean = Metrics::mean(&all);
        Ok(MetricsReport { per_seed, mean })
    }
}

impl Metrics {
    /// Arithmetic mean of several reports; optional entries average over the
    /// reports that have them and stay absent if none do.
    pub fn mean(all: &[&Metrics]) -> Metrics {
        let n = all.len().max(1) as f64;
        let avg = |f: &dyn Fn(&Metrics) -> f64| all.iter().map(|m| f(m)).sum::<f64>() / n;
        let avg_opt = |f: &dyn Fn(&Metrics) -> Option<f64>| {
            let vals: Vec<f64> = all.iter().filter_map(|m| f(m)).collect();
            (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
        };
        Metrics {
            ic_accuracy: avg(&|m| m.ic_accuracy),
            sl_token_f1: avg(&|m| m.sl_token_f1),
            ic_first_turn: avg_opt(&|m| m.ic_first_turn),
            ic_followup: avg_opt(&|m| m.ic_followup),
            n_turns: all.first().map_or(0, |m| m.n_turns),
            n_first: all.first().map_or(0, |m| m.n_first),
            n_followup: all.first().map_or(0, |m| m.n_followup),
        }
    }
}

/// Gold and predicted labels for one turn.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ScoredTurn {
    pub turn_index: usize,
    pub gold_intent: usize,
    pub pred_intent: usize,
    pub gold_slots: Vec<usize>,
    pub pred_slots: Vec<usize>,
}

/// IC accuracy (overall, first turns, follow-ups) and micro token-level F1
/// over non-`O` slot tags, all in percent.
pub fn compute_metrics(turns: &[ScoredTurn]) -> Metrics {
    let pct = |hit: usize, n: usize| (n > 0).then(|| 100.0 * hit as f64 / n as f64);
    let (mut hit, mut hit_first, mut n_first, mut hit_fu, mut n_fu) = (0, 0, 0, 0, 0);
    let (mut tp, mut fp, mut fneg) = (0usize, 0usize, 0usize);
    for t in turns {
        let ok = t.gold_intent == t.pred_intent;
        hit += ok as usize;
        if t.turn_index == 0 {
            n_first += 1;
            hit_first += ok as usize;
        } else {
            n_fu += 1;
            hit_fu += ok as usize;
        }
        for (j, &gold) in t.gold_slots.iter().enumerate() {
            let pred = t.pred_slots.get(j).copied().unwrap_or(OUTSIDE_ID);
            if gold == pred {
                tp += (gold != OUTSIDE_ID) as usize;
            } else {
                fp += (pred != OUTSIDE_ID) as usize;
                fneg += (gold != OUTSIDE_ID) as usize;
            }
        }
    }
    let denom = 2 * tp + fp + fneg;
    Metrics {
        ic_accuracy: pct(hit, turns.len()).unwrap_or(0.0),
        sl_token_f1: if denom == 0 { 100.0 } else { 100.0 * 2.0 * tp as f64 / denom as f64 },
        ic_first_turn: pct(hit_first, n_first),
        ic_followup: pct(hit_fu, n_fu),
        n_turns: turns.len(),
        n_first,
        n_followup: n_fu,
    }
}

/// Per-turn evaluation output.
#[derive(Clone, Debug, PartialEq)]
pub struct TurnResult {
    pub conv_id: String,
    pub scored: ScoredTurn,
    /// `d_T x (K+1)` temporal attention, absent for the recurrent variant.
    pub attention: Option<Mat>,
}

fn gold_slots(conv: &Conversation, i: usize, max_tokens: usize) -> Vec<usize> {
    let s = &conv.turns[i].slots;
    s[..s.len().min(max_tokens)].to_vec()
}

/// Groups conversations so that each group holds about `turns` turns.
fn batches<'a>(convs: &[&'a Conversation], turns: usize) -> Vec<Vec<&'a Conversation>> {
    let mut out: Vec<Vec<&Conversation>> = Vec::new();
    let mut current = Vec::new();
    let mut count = 0;
    for &c in convs {
        if !current.is_empty() && count + c.turns.len() > turns {
            out.push(std::mem::take(&mut current));
            count = 0;
        }
        count += c.turns.len();
        current.push(c);
    }
    if !current.is_empty() {
        out.push(current);
    }
    out
}

fn gold_history(model: &Model, conv: &Conversation) -> (Vec<usize>, Vec<BTreeSet<usize>>) {
    let intents = conv.turns.iter().map(|t| t.intent).collect();
    let slots = conv.turns.iter().map(|t| t.slot_types(&model.vocabs)).collect();
    (intents, slots)
}

/// Joint loss over every turn of `convs`, with gold history.
pub fn batch_objective(
    model: &Model,
    g: &mut Graph,
    convs: &[&Conversation],
    alpha: f64,
    beta: f64,
    noise: Option<&mut Noise<'_>>,
) -> Result<LossNodes> {
    let enc = model.encode(g, convs, noise);
    let mut queries = Vec::new();
    let mut targets = BatchTargets {
        intents: Vec::new(),
        slots: Vec::new(),
    };
    for (c, conv) in convs.iter().enumerate() {
        let (intents, slots) = gold_history(model, conv);
        let h = History {
            intents: &intents,
            slot_types: &slots,
        };
        for i in 0..conv.turns.len() {
            queries.push(TurnQuery {
                conv: c,
                turn: i,
                window: model.window(conv, i, &h)?,
            });
            targets.intents.push(conv.turns[i].intent);
            targets.slots.push(gold_slots(conv, i, model.config.dims.max_tokens));
        }
    }
    let out = model.predict(g, &enc, &queries);
    Ok(joint_loss_graph(
        g,
        out.intent_logits,
        out.sec_logits,
        out.slot_logits,
        &targets,
        alpha,
        beta,
    ))
}

fn check_vocabs(model: &Model, data: &Dataset) -> Result<()> {
    if !Arc::ptr_eq(&model.vocabs, &data.vocabs) && *model.vocabs != *data.vocabs {
        return Err(Error::VocabMismatch(format!(
            "{:?} split was built with different vocabularies than the model",
            data.split
        )));
    }
    Ok(())
}

/// Predicts every turn of `data` in turn order. With predicted history, the
/// intent and slot history of turn `i` come from the model's own outputs on
/// turns `< i`.
pub fn evaluate_turns(model: &Model, data: &Dataset, policy: HistoryPolicy) -> Result<Vec<TurnResult>> {
    check_vocabs(model, data)?;
    let max_tokens = model.config.dims.max_tokens;
    let convs: Vec<&Conversation> = data.conversations.iter().collect();
    let mut results = Vec::with_capacity(data.num_turns());
    for chunk in batches(&convs, 256) {
        let mut g = Graph::new();
        let enc = model.encode(&mut g, &chunk, None);
        let mut hist: Vec<(Vec<usize>, Vec<BTreeSet<usize>>)> = match policy {
            HistoryPolicy::Gold => chunk.iter().map(|c| gold_history(model, c)).collect(),
            HistoryPolicy::Predicted => vec![(Vec::new(), Vec::new()); chunk.len()],
        };
        let mut per_conv: Vec<Vec<TurnResult>> = vec![Vec::new(); chunk.len()];
        let longest = chunk.iter().map(|c| c.turns.len()).max().unwrap_or(0);
        for t in 0..longest {
            let mut queries = Vec::new();
            for (c, conv) in chunk.iter().enumerate() {
                if t < conv.turns.len() {
                    let h = History {
                        intents: &hist[c].0,
                        slot_types: &hist[c].1,
                    };
                    queries.push(TurnQuery {
                        conv: c,
                        turn: t,
                        window: model.window(conv, t, &h)?,
                    });
                }
            }
            let out = model.predict(&mut g, &enc, &queries);
            let preds = model.predictions(&g, &out);
            for (m, (q, p)) in queries.iter().zip(&preds).enumerate() {
                let conv = chunk[q.conv];
                let pred_intent = model.decode_intent(p);
                let pred_slots = p.slots();
                if policy == HistoryPolicy::Predicted {
                    hist[q.conv].0.push(pred_intent);
                    hist[q.conv].1.push(model.slot_types_of(&pred_slots));
                }
                per_conv[q.conv].push(TurnResult {
                    conv_id: conv.id.clone(),
                    scored: ScoredTurn {
                        turn_index: t,
                        gold_intent: conv.turns[t].intent,
                        pred_intent,
                        gold_slots: gold_slots(conv, t, max_tokens),
                        pred_slots,
                    },
                    attention: model.attention(&g, &out, m),
                });
            }
        }
        results.extend(per_conv.into_iter().flatten());
    }
    Ok(results)
}

pub fn evaluate(model: &Model, data: &Dataset, policy: HistoryPolicy) -> Result<Metrics> {
    let turns = evaluate_turns(model, data, policy)?;
    let scored: Vec<ScoredTurn> = turns.into_iter().map(|t| t.scored).collect();
    Ok(compute_metrics(&scored))
}

/// Trains one model. Validation IC is measured after every epoch; the best
/// epoch's parameters are kept, and training stops once `patience` epochs
/// pass without a gain of at least `min_delta` points.
pub fn train(
    train_set: &Dataset,
    val_set: &Dataset,
    variant: ModelVariant,
    hp: &Hyperparams,
    seed: u64,
    mut log_sink: Option<&mut dyn Write>,
) -> Result<TrainOutcome> {
    hp.validate()?;
    if train_set.is_empty() {
        return Err(Error::InvalidInput("training split is empty".into()));
    }
    let mut model = Model::new(hp.dims, variant, train_set.vocabs.clone(), seed)?;
    check_vocabs(&model, val_set)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_cafe);
    let mut adam = Adam::new(&model.store, hp.lr);
    adam.clip_norm = hp.clip_norm;
    let mut order: Vec<&Conversation> = train_set.conversations.iter().collect();

    let mut log = Vec::new();
    let mut best_store = model.store.clone();
    let mut best_ic = f64::NEG_INFINITY;
    let mut best_sl = f64::NEG_INFINITY;
    let mut best_epoch = 0;
    let mut reference = f64::NEG_INFINITY;
    let mut waited = 0;
    let mut stopped_early = false;
    let mut best_loss = f64::INFINITY;
    for epoch in 1..=hp.max_epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut n_batches) = (0.0, 0);
        for batch in batches(&order, hp.batch_size) {
            let mut g = Graph::new();
            let mut noise = Noise {
                rng: &mut rng,
                dropout: hp.dropout,
                unk_prob: hp.unk_prob,
            };
            let loss = batch_objective(&model, &mut g, &batch, hp.alpha, hp.beta, Some(&mut noise))?;
            let value = g.scalar(loss.total);
            if !value.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    message: format!("non-finite loss {value} on batch {n_batches}"),
                });
            }
            let grads = g.backward(loss.total);
            adam.step(&mut model.store, &grads);
            if !model.store.all_finite() {
                return Err(Error::Diverged {
                    epoch,
                    message: "parameters became non-finite".into(),
                });
            }
            loss_sum += value;
            n_batches += 1;
        }
        let val = evaluate(&model, val_set, hp.val_history)?;
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / n_batches.max(1) as f64,
            val_ic: val.ic_accuracy,
            val_sl_f1: val.sl_token_f1,
        };
        log::info!(
            "seed {seed} epoch {epoch}: loss {:.4}, val IC {:.2}, val SL F1 {:.2}",
            record.train_loss,
            record.val_ic,
            record.val_sl_f1
        );
        if let Some(w) = log_sink.as_deref_mut() {
            serde_json::to_writer(&mut *w, &record)?;
            writeln!(w)?;
        }
        if record.train_loss < best_loss {
            best_loss = record.train_loss;
        } else {
            adam.lr *= hp.lr_decay;
        }
        log.push(record);

        // ties on IC go to the better slot tagger
        if val.ic_accuracy > best_ic || (val.ic_accuracy == best_ic && val.sl_token_f1 > best_sl) {
            best_ic = val.ic_accuracy;
            best_sl = val.sl_token_f1;
            best_epoch = epoch;
            best_store = model.store.clone();
        }
        if val.ic_accuracy >= reference + hp.min_delta {
            reference = val.ic_accuracy;
            waited = 0;
        } else {
            waited += 1;
            if waited >= hp.patience {
                stopped_early = epoch < hp.max_epochs;
                break;
            }
        }
    }
    model.store = best_store;
    Ok(TrainOutcome {
        model,
        log,
        best_epoch,
        best_val_ic: best_ic,
        stopped_early,
    })
}

/// Trains and tests one variant for every seed in `hp.seeds`.
pub fn run_seeds(
    train_set: &Dataset,
    val_set: &Dataset,
    test_set: &Dataset,
    variant: ModelVariant,
    hp: &Hyperparams,
    policy: HistoryPolicy,
) -> Result<MetricsReport> {
    let mut per_seed = Vec::with_capacity(hp.seeds.len());
    for &seed in &hp.seeds {
        let outcome = train(train_set, val_set, variant, hp, seed, None)?;
        let metrics = evaluate(&outcome.model, test_set, policy)?;
        log::info!(
            "{} seed {seed}: IC {:.2}, SL F1 {:.2}",
            variant.kind,
            metrics.ic_accuracy,
            metrics.sl_token_f1
        );
        per_seed.push(SeedMetrics { seed, metrics });
    }
    MetricsReport::new(per_seed)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub flags: SignalFlags,
    pub report: MetricsReport,
}

/// The signal grid from no context to all signals.
pub fn default_ablation_grid() -> Vec<SignalFlags> {
    let f = |i, s, u, d| SignalFlags {
        use_intent_hist: i,
        use_slot_hist: s,
        use_utt_hist: u,
        use_da_hist: d,
    };
    vec![
        SignalFlags::NONE,
        f(true, false, false, false),
        f(true, true, false, false),
        f(true, true, true, false),
        SignalFlags::ALL,
    ]
}

/// Trains and evaluates the context-attention model once per signal configuration.
pub fn run_ablation(
    train_set: &Dataset,
    val_set: &Dataset,
    test_set: &Dataset,
    configs: &[SignalFlags],
    hp: &Hyperparams,
    policy: HistoryPolicy,
) -> Result<Vec<AblationRow>> {
    if configs.is_empty() {
        return Err(Error::InvalidInput("ablation needs at least one configuration".into()));
    }
    configs
        .iter()
        .map(|&flags| {
            let variant = ModelVariant::new(crate::model::VariantKind::Casa, flags);
            let report = run_seeds(train_set, val_set, test_set, variant, hp, policy)?;
            Ok(AblationRow { flags, report })
        })
        .collect()
}
