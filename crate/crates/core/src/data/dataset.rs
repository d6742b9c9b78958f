use std::collections::BTreeSet;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::tokenize::tokenize;
use super::vocab::{validate_bio, Vocabularies, DUMMY_DA, UNK_ID};
use crate::error::{Error, Result};

/// Maximum tokens per utterance; longer utterances are truncated.
pub const MAX_TOKENS: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        })
    }
}

/// One line of the conversational JSONL format.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConversationRecord {
    pub id: String,
    pub turns: Vec<TurnRecord>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TurnRecord {
    pub text: String,
    pub tokens: Vec<String>,
    pub intent: String,
    pub slots: Vec<String>,
    pub dialog_act: String,
}

impl TurnRecord {
    /// Builds a record by tokenizing `text`; `slots` must already align with the tokens.
    pub fn from_text(text: &str, intent: &str, slots: Vec<String>, dialog_act: &str) -> Self {
        TurnRecord {
            text: text.to_string(),
            tokens: tokenize(text),
            intent: intent.to_string(),
            slots,
            dialog_act: dialog_act.to_string(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Token {
    pub surface: String,
    pub vocab_id: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Turn {
    pub text: String,
    pub tokens: Vec<Token>,
    pub intent: usize,
    pub slots: Vec<usize>,
    /// Agent act that preceded this user turn.
    pub dialog_act: usize,
}

impl Turn {
    pub fn token_ids(&self) -> Vec<usize> {
        self.tokens.iter().map(|t| t.vocab_id).collect()
    }

    /// Distinct slot types tagged in this turn.
    pub fn slot_types(&self, vocabs: &Vocabularies) -> BTreeSet<usize> {
        self.slots.iter().filter_map(|&l| vocabs.slot_type_of(l)).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Conversation {
    pub id: String,
    pub turns: Vec<Turn>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub conversations: Vec<Conversation>,
    pub vocabs: Arc<Vocabularies>,
    pub split: Split,
}

fn schema_err(conv: &str, field: &str, message: impl Into<String>) -> Error {
    Error::Schema {
        conversation: conv.to_string(),
        field: field.to_string(),
        message: message.into(),
    }
}

fn check_record(rec: &ConversationRecord) -> Result<()> {
    if rec.turns.is_empty() {
        return Err(schema_err(&rec.id, "turns", "conversation has no turns"));
    }
    for (i, t) in rec.turns.iter().enumerate() {
        if t.tokens.len() != t.slots.len() {
            return Err(schema_err(
                &rec.id,
                &format!("turns[{i}].slots"),
                format!("{} slots for {} tokens", t.slots.len(), t.tokens.len()),
            ));
        }
        validate_bio(&t.slots).map_err(|m| schema_err(&rec.id, &format!("turns[{i}].slots"), m))?;
        if t.intent.is_empty() {
            return Err(schema_err(&rec.id, &format!("turns[{i}].intent"), "empty intent"));
        }
        if t.dialog_act.is_empty() {
            return Err(schema_err(&rec.id, &format!("turns[{i}].dialog_act"), "empty dialog act"));
        }
    }
    Ok(())
}

impl Dataset {
    /// Validates and encodes records. With `vocabs == None` the vocabularies
    /// are built from these records (the training split); otherwise unknown
    /// tokens map to UNK and unknown labels are rejected.
    pub fn from_records(
        records: &[ConversationRecord],
        split: Split,
        vocabs: Option<Arc<Vocabularies>>,
    ) -> Result<Dataset> {
        for rec in records {
            check_record(rec)?;
        }
        let vocabs = match vocabs {
            Some(v) => v,
            None => Arc::new(build_vocabularies(records)),
        };
        let mut conversations = Vec::with_capacity(records.len());
        for rec in records {
            let mut turns = Vec::with_capacity(rec.turns.len());
            for t in &rec.turns {
                let n = t.tokens.len().min(MAX_TOKENS);
                if t.tokens.len() > MAX_TOKENS {
                    log::warn!(
                        "conversation {}: truncating utterance of {} tokens to {MAX_TOKENS}",
                        rec.id,
                        t.tokens.len()
                    );
                }
                let tokens = t.tokens[..n]
                    .iter()
                    .map(|s| Token {
                        surface: s.clone(),
                        vocab_id: vocabs.token_id(s),
                    })
                    .collect();
                let slots = t.slots[..n]
                    .iter()
                    .map(|s| {
                        vocabs.slot_labels.get(s).ok_or_else(|| Error::UnknownLabel {
                            kind: "slot",
                            label: s.clone(),
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                let intent = vocabs.intents.get(&t.intent).ok_or_else(|| Error::UnknownLabel {
                    kind: "intent",
                    label: t.intent.clone(),
                })?;
                let dialog_act = vocabs.dialog_acts.get(&t.dialog_act).ok_or_else(|| Error::UnknownLabel {
                    kind: "dialog act",
                    label: t.dialog_act.clone(),
                })?;
                turns.push(Turn {
                    text: t.text.clone(),
                    tokens,
                    intent,
                    slots,
                    dialog_act,
                });
            }
            conversations.push(Conversation {
                id: rec.id.clone(),
                turns,
            });
        }
        Ok(Dataset {
            conversations,
            vocabs,
            split,
        })
    }

    pub fn to_records(&self) -> Vec<ConversationRecord> {
        let v = &self.vocabs;
        self.conversations
            .iter()
            .map(|c| ConversationRecord {
                id: c.id.clone(),
                turns: c
                    .turns
                    .iter()
                    .map(|t| TurnRecord {
                        text: t.text.clone(),
                        tokens: t.tokens.iter().map(|x| x.surface.clone()).collect(),
                        intent: v.intents.label(t.intent).unwrap_or_default().to_string(),
                        slots: t
                            .slots
                            .iter()
                            .map(|&s| v.slot_labels.label(s).unwrap_or_default().to_string())
                            .collect(),
                        dialog_act: v.dialog_acts.label(t.dialog_act).unwrap_or_default().to_string(),
                    })
                    .collect(),
            })
            .collect()
    }

    pub fn num_turns(&self) -> usize {
        self.conversations.iter().map(|c| c.turns.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.conversations.is_empty()
    }

    /// Moves a seed-fixed `fraction` of conversations into a validation split.
    pub fn hold_out(self, fraction: f64, seed: u64) -> (Dataset, Dataset) {
        let mut order: Vec<usize> = (0..self.conversations.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let n_val = ((self.conversations.len() as f64) * fraction).round() as usize;
        let val_set: BTreeSet<usize> = order[..n_val].iter().copied().collect();
        let (mut train, mut val) = (Vec::new(), Vec::new());
        for (i, c) in self.conversations.into_iter().enumerate() {
            if val_set.contains(&i) {
                val.push(c);
            } else {
                train.push(c);
            }
        }
        (
            Dataset {
                conversations: train,
                vocabs: self.vocabs.clone(),
                split: Split::Train,
            },
            Dataset {
                conversations: val,
                vocabs: self.vocabs,
                split: Split::Validation,
            },
        )
    }

    /// Count of tokens that fell back to UNK.
    pub fn unknown_tokens(&self) -> usize {
        self.conversations
            .iter()
            .flat_map(|c| &c.turns)
            .flat_map(|t| &t.tokens)
            .filter(|t| t.vocab_id == UNK_ID)
            .count()
    }
}

fn build_vocabularies(records: &[ConversationRecord]) -> Vocabularies {
    let mut v = Vocabularies::default();
    for rec in records {
        for t in &rec.turns {
            for tok in t.tokens.iter().take(MAX_TOKENS) {
                v.add_token(tok);
            }
            for s in &t.slots {
                v.add_slot_label(s);
            }
            v.intents.insert(&t.intent);
            v.dialog_acts.insert(&t.dialog_act);
        }
    }
    v
}

pub fn read_conversational_jsonl(path: &Path) -> Result<Vec<ConversationRecord>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ConversationRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: n + 1,
            message: e.to_string(),
        })?;
        check_record(&rec)?;
        out.push(rec);
    }
    Ok(out)
}

pub fn load_conversational_jsonl(
    path: &Path,
    split: Split,
    vocabs: Option<Arc<Vocabularies>>,
) -> Result<Dataset> {
    Dataset::from_records(&read_conversational_jsonl(path)?, split, vocabs)
}

pub fn write_conversational_jsonl<W: Write>(mut w: W, records: &[ConversationRecord]) -> Result<()> {
    for rec in records {
        serde_json::to_writer(&mut w, rec)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_conversational_jsonl(path: &Path, records: &[ConversationRecord]) -> Result<()> {
    write_conversational_jsonl(BufWriter::new(File::create(path)?), records)
}

/// Parses the flat IC-SL block format: an optional `# intent: <label>` header
/// per block followed by one `token tag` (or `index token tag`) line per token;
/// blocks are separated by blank lines.
pub fn read_flat_icsl(path: &Path) -> Result<Vec<ConversationRecord>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    let mut intent: Option<String> = None;
    let mut tokens: Vec<String> = Vec::new();
    let mut slots: Vec<String> = Vec::new();
    let mut block_start = 0;

    let parse_err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };

    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = n + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            finish_block(path, &mut out, &mut intent, &mut tokens, &mut slots, block_start)?;
            continue;
        }
        if tokens.is_empty() && intent.is_none() {
            block_start = lineno;
        }
        if let Some(rest) = trimmed.strip_prefix('#') {
            let Some(label) = rest.trim().strip_prefix("intent:") else {
                return Err(parse_err(lineno, format!("unrecognised header `{trimmed}`")));
            };
            if intent.is_some() || !tokens.is_empty() {
                return Err(parse_err(lineno, "intent header must open a block".into()));
            }
            let label = label.trim();
            if label.is_empty() {
                return Err(parse_err(lineno, "empty intent label".into()));
            }
            intent = Some(label.to_string());
            continue;
        }
        let cols: Vec<&str> = trimmed.split_whitespace().collect();
        let (tok, tag) = match cols.as_slice() {
            [tok, tag] => (*tok, *tag),
            [_idx, tok, tag] => (*tok, *tag),
            [tok] => {
                return Err(schema_err(
                    &format!("flat-{}", out.len()),
                    "slots",
                    format!("line {lineno}: token `{tok}` has no tag"),
                ))
            }
            _ => return Err(parse_err(lineno, format!("expected 2 or 3 columns, found {}", cols.len()))),
        };
        tokens.push(tok.to_lowercase());
        slots.push(tag.to_string());
    }
    finish_block(path, &mut out, &mut intent, &mut tokens, &mut slots, block_start)?;
    Ok(out)
}

fn finish_block(
    path: &Path,
    out: &mut Vec<ConversationRecord>,
    intent: &mut Option<String>,
    tokens: &mut Vec<String>,
    slots: &mut Vec<String>,
    line: usize,
) -> Result<()> {
    if intent.is_none() && tokens.is_empty() {
        return Ok(());
    }
    let Some(label) = intent.take() else {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line,
            message: "block has no `# intent:` header".into(),
        });
    };
    let id = format!("flat-{}", out.len());
    validate_bio(slots).map_err(|m| schema_err(&id, "slots", format!("block at line {line}: {m}")))?;
    out.push(ConversationRecord {
        id,
        turns: vec![TurnRecord {
            text: tokens.join(" "),
            tokens: std::mem::take(tokens),
            intent: label,
            slots: std::mem::take(slots),
            dialog_act: DUMMY_DA.to_string(),
        }],
    });
    Ok(())
}

pub fn load_flat_icsl(path: &Path, split: Split, vocabs: Option<Arc<Vocabularies>>) -> Result<Dataset> {
    Dataset::from_records(&read_flat_icsl(path)?, split, vocabs)
}
