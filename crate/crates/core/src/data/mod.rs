//! Dialogue data: schema, loaders, vocabularies, context windows and the
//! synthetic conversation generator.

mod dataset;
mod synthetic;
mod tokenize;
pub mod vocab;
mod window;

pub use dataset::{
    load_conversational_jsonl, load_flat_icsl, read_conversational_jsonl, read_flat_icsl,
    save_conversational_jsonl, write_conversational_jsonl, Conversation, ConversationRecord, Dataset, Split,
    Token, Turn, TurnRecord, MAX_TOKENS,
};
pub use synthetic::{
    ambiguous_followup_fraction, generate_records, generate_synthetic, Profile, CLOSE, CONFIRM, ELICIT_SLOT,
    INFORM,
};
pub use tokenize::tokenize;
pub use vocab::{validate_bio, Vocab, Vocabularies};
pub use window::{build_window, make_context_window, ContextWindow, History, WindowSlot};
