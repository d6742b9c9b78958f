use std::collections::BTreeSet;

use super::dataset::Conversation;
use super::vocab::{Vocabularies, DUMMY_DA_ID, DUMMY_INTENT_ID};
use crate::error::{Error, Result};

/// One position of a context window.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WindowSlot {
    /// Index of the turn in the conversation, `None` for a pre-conversation pad.
    pub turn: Option<usize>,
    pub intent: usize,
    /// The agent act that followed this user turn (i.e. the act attached to
    /// the next user turn). Dummy for the current turn and for pads.
    pub dialog_act: usize,
}

/// The `K + 1` turns ending at the current one, oldest first.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ContextWindow {
    pub slots: Vec<WindowSlot>,
    pub pad_mask: Vec<bool>,
    /// Distinct slot types observed in turns before the current one.
    pub slot_history: BTreeSet<usize>,
}

impl ContextWindow {
    pub fn current(&self) -> &WindowSlot {
        self.slots.last().expect("window is never empty")
    }

    pub fn width(&self) -> usize {
        self.slots.len()
    }

    pub fn num_real(&self) -> usize {
        self.pad_mask.iter().filter(|p| !**p).count()
    }
}

/// History labels available when building windows: gold labels during
/// training, the model's own predictions during evaluation.
pub struct History<'a> {
    pub intents: &'a [usize],
    pub slot_types: &'a [BTreeSet<usize>],
}

/// Window over gold history.
pub fn make_context_window(
    conv: &Conversation,
    i: usize,
    k: usize,
    vocabs: &Vocabularies,
) -> Result<ContextWindow> {
    let intents: Vec<usize> = conv.turns.iter().map(|t| t.intent).collect();
    let slot_types: Vec<BTreeSet<usize>> = conv.turns.iter().map(|t| t.slot_types(vocabs)).collect();
    build_window(
        conv,
        i,
        k,
        &History {
            intents: &intents,
            slot_types: &slot_types,
        },
    )
}

/// Window with intent and slot history taken from `history` (indices `< i` are read).
pub fn build_window(conv: &Conversation, i: usize, k: usize, history: &History<'_>) -> Result<ContextWindow> {
    if i >= conv.turns.len() {
        return Err(Error::TurnOutOfRange {
            index: i,
            len: conv.turns.len(),
        });
    }
    if history.intents.len() < i || history.slot_types.len() < i {
        return Err(Error::InvalidInput(format!(
            "history covers {} turns, window at turn {i} needs {i}",
            history.intents.len().min(history.slot_types.len())
        )));
    }
    let mut slots = Vec::with_capacity(k + 1);
    let mut pad_mask = Vec::with_capacity(k + 1);
    for pos in 0..=k {
        let t = i as isize - k as isize + pos as isize;
        if t < 0 {
            slots.push(WindowSlot {
                turn: None,
                intent: DUMMY_INTENT_ID,
                dialog_act: DUMMY_DA_ID,
            });
            pad_mask.push(true);
        } else if t as usize == i {
            slots.push(WindowSlot {
                turn: Some(i),
                intent: DUMMY_INTENT_ID,
                dialog_act: DUMMY_DA_ID,
            });
            pad_mask.push(false);
        } else {
            let t = t as usize;
            slots.push(WindowSlot {
                turn: Some(t),
                intent: history.intents[t],
                dialog_act: conv.turns[t + 1].dialog_act,
            });
            pad_mask.push(false);
        }
    }
    let slot_history = history.slot_types[..i].iter().flatten().copied().collect();
    Ok(ContextWindow {
        slots,
        pad_mask,
        slot_history,
    })
}
