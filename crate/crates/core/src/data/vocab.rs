use std::collections::HashMap;

use serde::{Deserialize, Serialize};

pub const PAD: &str = "<pad>";
pub const UNK: &str = "<unk>";
pub const DUMMY_INTENT: &str = "<dummy_intent>";
pub const DUMMY_DA: &str = "<dummy_da>";
pub const OUTSIDE: &str = "O";

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
pub const DUMMY_INTENT_ID: usize = 0;
pub const DUMMY_DA_ID: usize = 0;
pub const OUTSIDE_ID: usize = 0;

/// Label <-> id bijection. Ids are assigned in insertion order.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    items: Vec<String>,
    index: HashMap<String, usize>,
}

impl From<Vec<String>> for Vocab {
    fn from(items: Vec<String>) -> Self {
        let mut v = Vocab::default();
        for it in items {
            v.insert(&it);
        }
        v
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.items
    }
}

impl Vocab {
    pub fn with_specials(specials: &[&str]) -> Self {
        let mut v = Vocab::default();
        for s in specials {
            v.insert(s);
        }
        v
    }

    pub fn insert(&mut self, label: &str) -> usize {
        if let Some(&id) = self.index.get(label) {
            return id;
        }
        let id = self.items.len();
        self.items.push(label.to_string());
        self.index.insert(label.to_string(), id);
        id
    }

    pub fn get(&self, label: &str) -> Option<usize> {
        self.index.get(label).copied()
    }

    pub fn label(&self, id: usize) -> Option<&str> {
        self.items.get(id).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn labels(&self) -> &[String] {
        &self.items
    }
}

/// Splits a BIO tag into its prefix and slot type. `O` yields `None`.
pub fn bio_parts(tag: &str) -> Option<(char, &str)> {
    let (prefix, ty) = tag.split_once('-')?;
    match prefix {
        "B" => Some(('B', ty)),
        "I" => Some(('I', ty)),
        _ => None,
    }
}

/// A tag sequence is valid BIO when every tag is `O`, `B-x` or `I-x`, and every
/// `I-x` follows `B-x` or `I-x` of the same type.
pub fn validate_bio<S: AsRef<str>>(tags: &[S]) -> Result<(), String> {
    let mut prev: Option<&str> = None;
    for (i, tag) in tags.iter().enumerate() {
        let tag = tag.as_ref();
        if tag == OUTSIDE {
            prev = None;
            continue;
        }
        match bio_parts(tag) {
            Some(('B', ty)) if !ty.is_empty() => prev = Some(ty),
            Some(('I', ty)) if !ty.is_empty() => {
                if prev != Some(ty) {
                    return Err(format!("tag {i} `{tag}` does not continue a `{ty}` span"));
                }
            }
            _ => return Err(format!("tag {i} `{tag}` is not a BIO tag")),
        }
    }
    Ok(())
}

/// All vocabularies of a dataset, built from a training split.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabularies {
    pub tokens: Vocab,
    /// Training frequency per token id, used to find singletons.
    pub token_counts: Vec<u32>,
    pub intents: Vocab,
    pub slot_labels: Vocab,
    pub slot_types: Vocab,
    pub dialog_acts: Vocab,
    /// Slot type id for each BIO label id (`None` for `O`).
    pub label_slot_type: Vec<Option<usize>>,
}

impl Default for Vocabularies {
    fn default() -> Self {
        Vocabularies {
            tokens: Vocab::with_specials(&[PAD, UNK]),
            token_counts: vec![0, 0],
            intents: Vocab::with_specials(&[DUMMY_INTENT]),
            slot_labels: Vocab::with_specials(&[OUTSIDE]),
            slot_types: Vocab::default(),
            dialog_acts: Vocab::with_specials(&[DUMMY_DA]),
            label_slot_type: vec![None],
        }
    }
}

impl Vocabularies {
    pub(crate) fn add_token(&mut self, surface: &str) {
        let id = self.tokens.insert(surface);
        if id >= self.token_counts.len() {
            self.token_counts.push(0);
        }
        self.token_counts[id] += 1;
    }

    pub(crate) fn add_slot_label(&mut self, tag: &str) {
        if self.slot_labels.get(tag).is_some() {
            return;
        }
        self.slot_labels.insert(tag);
        let ty = bio_parts(tag).map(|(_, ty)| self.slot_types.insert(ty));
        self.label_slot_type.push(ty);
    }

    pub fn token_id(&self, surface: &str) -> usize {
        self.tokens.get(surface).unwrap_or(UNK_ID)
    }

    pub fn is_singleton(&self, token_id: usize) -> bool {
        self.token_counts.get(token_id).copied() == Some(1)
    }

    pub fn slot_type_of(&self, label_id: usize) -> Option<usize> {
        self.label_slot_type.get(label_id).copied().flatten()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bio_rules() {
        assert!(validate_bio(&["O", "B-a", "I-a", "O"]).is_ok());
        assert!(validate_bio::<&str>(&[]).is_ok());
        assert!(validate_bio(&["I-a"]).is_err());
        assert!(validate_bio(&["B-a", "I-b"]).is_err());
        assert!(validate_bio(&["O", "I-a"]).is_err());
        assert!(validate_bio(&["X-a"]).is_err());
        assert!(validate_bio(&["B-"]).is_err());
    }

    #[test]
    fn vocab_serde_keeps_order() {
        let mut v = Vocab::with_specials(&[PAD, UNK]);
        v.insert("flight");
        let json = serde_json::to_string(&v).unwrap();
        assert_eq!(json, r#"["<pad>","<unk>","flight"]"#);
        let back: Vocab = serde_json::from_str(&json).unwrap();
        assert_eq!(back, v);
        assert_eq!(back.get("flight"), Some(2));
    }

    #[test]
    fn slot_types_follow_labels() {
        let mut v = Vocabularies::default();
        v.add_slot_label("B-city");
        v.add_slot_label("I-city");
        v.add_slot_label("B-date");
        assert_eq!(v.slot_types.len(), 2);
        assert_eq!(v.slot_type_of(1), v.slot_type_of(2));
        assert_eq!(v.slot_type_of(OUTSIDE_ID), None);
    }
}
