//! Synthetic task-oriented conversations with intent, BIO slot and dialog-act
//! annotation.
//!
//! First turns state their goal explicitly. Follow-up turns are mostly bare
//! answers to slot elicitations, confirmations, and anaphoric continuations
//! ("cancel it", "change it to friday") whose surface form is shared by many
//! intents, so their gold intent is only recoverable from the dialogue history.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::dataset::{ConversationRecord, Dataset, Split, TurnRecord};
use super::tokenize::tokenize;
use crate::error::{Error, Result};

pub const ELICIT_SLOT: &str = "ElicitSlot";
pub const CLOSE: &str = "Close";
pub const CONFIRM: &str = "Confirm";
pub const INFORM: &str = "Inform";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Profile {
    BookingLike,
    CableLike,
}

impl fmt::Display for Profile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Profile::BookingLike => "booking-like",
            Profile::CableLike => "cable-like",
        })
    }
}

impl FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "booking-like" | "booking" => Ok(Profile::BookingLike),
            "cable-like" | "cable" => Ok(Profile::CableLike),
            other => Err(Error::InvalidInput(format!("unknown profile `{other}`"))),
        }
    }
}

/// Builds one user turn from text pieces; `{Slot}` pieces are filled with a
/// value and tagged, everything else is tagged `O`.
struct Utterance {
    tokens: Vec<String>,
    tags: Vec<String>,
}

impl Utterance {
    fn new() -> Self {
        Utterance {
            tokens: Vec::new(),
            tags: Vec::new(),
        }
    }

    fn plain(&mut self, text: &str) {
        for t in tokenize(text) {
            self.tokens.push(t);
            self.tags.push("O".into());
        }
    }

    fn value(&mut self, slot: &str, value: &str) {
        for (i, t) in tokenize(value).into_iter().enumerate() {
            self.tokens.push(t);
            self.tags.push(format!("{}-{slot}", if i == 0 { 'B' } else { 'I' }));
        }
    }

    fn into_turn(self, intent: &str, dialog_act: &str) -> TurnRecord {
        TurnRecord {
            text: self.tokens.join(" "),
            tokens: self.tokens,
            intent: intent.to_string(),
            slots: self.tags,
            dialog_act: dialog_act.to_string(),
        }
    }
}

/// Renders a template such as `"move my {NewAddress} service"`. Slots that
/// appear in the template are filled from `values`.
fn render<R: Rng>(template: &str, domain: &Domain, rng: &mut R, filled: &mut Vec<&'static str>) -> Utterance {
    let mut u = Utterance::new();
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        u.plain(&rest[..open]);
        let close = rest[open..].find('}').expect("unclosed template placeholder") + open;
        let slot = &rest[open + 1..close];
        let spec = domain.slot(slot);
        u.value(spec.name, spec.values.choose(rng).expect("slot values"));
        if !filled.contains(&spec.name) {
            filled.push(spec.name);
        }
        rest = &rest[close + 1..];
    }
    u.plain(rest);
    u
}

struct SlotSpec {
    name: &'static str,
    /// How the user names the slot ("my zip code is ...").
    phrase: &'static str,
    values: &'static [&'static str],
}

struct TaskSpec {
    intent: &'static str,
    required: &'static [&'static str],
    openers: &'static [&'static str],
    /// Anaphoric change request after the task closes: (intent, templates).
    change: Option<(&'static str, &'static [&'static str])>,
    /// Anaphoric cancellation after the task closes.
    cancel: Option<&'static str>,
}

struct Domain {
    slots: &'static [SlotSpec],
    tasks: &'static [TaskSpec],
}

impl Domain {
    fn slot(&self, name: &str) -> &SlotSpec {
        self.slots
            .iter()
            .find(|s| s.name == name)
            .unwrap_or_else(|| panic!("unknown slot {name}"))
    }
}

const DATES: &[&str] = &[
    "tomorrow",
    "today",
    "next monday",
    "next friday",
    "june 3",
    "july 14",
    "august 21",
    "the 15th",
    "saturday",
    "the first of may",
];
const ZIPS: &[&str] = &["94105", "10001", "60614", "30301", "73301", "02139", "98101"];
const ADDRESSES: &[&str] = &[
    "12 oak street",
    "400 main street",
    "77 pine avenue",
    "9 elm road",
    "250 lake drive",
];
const ACCOUNTS: &[&str] = &["4417 2210", "8812 0034", "5521 7789", "1190 4456", "6023 9981", "3307 1124"];
const TIMES: &[&str] = &["9am", "10am", "noon", "2pm", "5pm", "4 30 pm", "the morning", "the afternoon"];
const PLANS: &[&str] = &["gigabit", "premium", "basic", "family plan", "sports plus", "starter"];

const CABLE_SLOTS: &[SlotSpec] = &[
    SlotSpec { name: "ServiceType", phrase: "service", values: &["internet", "cable tv", "home phone", "tv and internet"] },
    SlotSpec { name: "StreetAddress", phrase: "address", values: ADDRESSES },
    SlotSpec { name: "ZipCode", phrase: "zip code", values: ZIPS },
    SlotSpec { name: "StartDate", phrase: "date", values: DATES },
    SlotSpec { name: "AccountNumber", phrase: "account number", values: ACCOUNTS },
    SlotSpec { name: "StopDate", phrase: "date", values: DATES },
    SlotSpec { name: "StopReason", phrase: "reason", values: &["moving", "too expensive", "switching providers", "not using it"] },
    SlotSpec { name: "NewAddress", phrase: "address", values: ADDRESSES },
    SlotSpec { name: "NewZipCode", phrase: "zip code", values: ZIPS },
    SlotSpec { name: "MoveDate", phrase: "date", values: DATES },
    SlotSpec { name: "PlanName", phrase: "plan", values: PLANS },
    SlotSpec { name: "Speed", phrase: "speed", values: &["500 megabit", "1 gig", "100 megabit"] },
    SlotSpec { name: "BillingMonth", phrase: "month", values: &["january", "february", "march", "last month", "this month"] },
    SlotSpec { name: "PaymentAmount", phrase: "amount", values: &["50 dollars", "120 dollars", "the full balance", "75 dollars"] },
    SlotSpec { name: "PaymentDate", phrase: "date", values: DATES },
    SlotSpec { name: "CardType", phrase: "card", values: &["visa", "mastercard", "amex", "debit card"] },
    SlotSpec { name: "AppointmentDate", phrase: "date", values: DATES },
    SlotSpec { name: "AppointmentTime", phrase: "time", values: TIMES },
    SlotSpec { name: "DeviceType", phrase: "device", values: &["modem", "router", "cable box", "remote"] },
    SlotSpec { name: "OutageType", phrase: "service", values: &["internet", "tv", "phone line"] },
    SlotSpec { name: "UserName", phrase: "username", values: &["jsmith", "mary lee", "alex42", "rkumar", "dana w"] },
    SlotSpec { name: "Email", phrase: "email", values: &["jsmith@mail.com", "mlee@inbox.net", "alex42@web.org", "rk@corp.com"] },
    SlotSpec { name: "PhoneNumber", phrase: "phone number", values: &["555 0134", "555 8871", "555 2290", "555 6612"] },
    SlotSpec { name: "ChannelPackage", phrase: "package", values: &["sports plus", "movie max", "kids zone", "news world"] },
];

const DATE_CHANGES: &[&str] = &[
    "change it to {AppointmentDate}",
    "make it {AppointmentDate} instead",
    "can we do {AppointmentDate} instead",
    "change it to {AppointmentTime}",
    "make it {AppointmentTime} instead",
];
const START_CHANGES: &[&str] = &[
    "change it to {StartDate}",
    "make it {StartDate} instead",
    "can we do {StartDate} instead",
];

const CABLE_TASKS: &[TaskSpec] = &[
    TaskSpec {
        intent: "StartService",
        required: &["ServiceType", "StreetAddress", "ZipCode", "StartDate"],
        openers: &[
            "i want to start new service",
            "i would like to sign up for {ServiceType}",
            "can i get {ServiceType} installed at {StreetAddress}",
            "i need to set up service at my new place",
            "please start {ServiceType} service on {StartDate}",
        ],
        change: Some(("ChangeStartDate", START_CHANGES)),
        cancel: Some("CancelOrder"),
    },
    TaskSpec {
        intent: "StopService",
        required: &["AccountNumber", "StopDate", "StopReason"],
        openers: &[
            "i want to stop my service",
            "please disconnect my service on {StopDate}",
            "i need to cancel my subscription because it is {StopReason}",
            "how do i end my service",
        ],
        change: None,
        cancel: None,
    },
    TaskSpec {
        intent: "MoveService",
        required: &["AccountNumber", "NewAddress", "NewZipCode", "MoveDate"],
        openers: &[
            "i am moving and need to transfer my service",
            "move my service to {NewAddress}",
            "can you move my account to {NewAddress} on {MoveDate}",
            "i need my service at a new address",
        ],
        change: None,
        cancel: Some("CancelOrder"),
    },
    TaskSpec {
        intent: "UpgradeService",
        required: &["AccountNumber", "PlanName"],
        openers: &[
            "i want to upgrade my plan",
            "upgrade me to {PlanName}",
            "can i get faster internet like {Speed}",
            "i would like a better package",
        ],
        change: None,
        cancel: Some("CancelOrder"),
    },
    TaskSpec {
        intent: "DowngradeService",
        required: &["AccountNumber", "PlanName"],
        openers: &[
            "i want to downgrade my plan",
            "switch me down to {PlanName}",
            "my plan is too expensive can i get a cheaper one",
        ],
        change: None,
        cancel: Some("CancelOrder"),
    },
    TaskSpec {
        intent: "ViewDataUsage",
        required: &["AccountNumber", "BillingMonth"],
        openers: &[
            "how much data have i used",
            "show my data usage for {BillingMonth}",
            "check my internet usage",
        ],
        change: None,
        cancel: None,
    },
    TaskSpec {
        intent: "ViewBill",
        required: &["AccountNumber", "BillingMonth"],
        openers: &[
            "i want to see my bill",
            "what was my bill for {BillingMonth}",
            "show me my latest statement",
        ],
        change: None,
        cancel: None,
    },
    TaskSpec {
        intent: "PayBill",
        required: &["AccountNumber", "PaymentAmount", "CardType"],
        openers: &[
            "i want to pay my bill",
            "pay {PaymentAmount} on my account",
            "can i make a payment with my {CardType}",
            "schedule a payment for {PaymentDate}",
        ],
        change: None,
        cancel: Some("CancelPayment"),
    },
    TaskSpec {
        intent: "ScheduleTechnician",
        required: &["ZipCode", "AppointmentDate", "AppointmentTime"],
        openers: &[
            "i need a technician to come out",
            "book a technician visit for {AppointmentDate}",
            "can someone fix my {DeviceType} at home",
            "schedule a repair appointment",
        ],
        change: Some(("RescheduleTechnician", DATE_CHANGES)),
        cancel: Some("CancelTechnician"),
    },
    TaskSpec {
        intent: "ReportOutage",
        required: &["ZipCode", "DeviceType"],
        openers: &[
            "my {OutageType} is not working",
            "is there an outage in {ZipCode}",
            "my {OutageType} has been down since this morning",
            "i want to report an outage",
        ],
        change: None,
        cancel: None,
    },
    TaskSpec {
        intent: "ResetPassword",
        required: &["UserName", "Email"],
        openers: &[
            "i forgot my password",
            "reset the password for {UserName}",
            "i cannot log in to my account",
        ],
        change: None,
        cancel: None,
    },
    TaskSpec {
        intent: "UpdateContactInfo",
        required: &["UserName", "PhoneNumber"],
        openers: &[
            "i need to update my contact details",
            "change my phone number to {PhoneNumber}",
            "update the phone on my profile",
        ],
        change: None,
        cancel: None,
    },
    TaskSpec {
        intent: "OrderChannelPackage",
        required: &["ChannelPackage", "StartDate"],
        openers: &[
            "i want to add a channel package",
            "add {ChannelPackage} to my tv",
            "can i order the {ChannelPackage} package",
        ],
        change: Some(("ChangeStartDate", START_CHANGES)),
        cancel: Some("CancelOrder"),
    },
];

const CABLE: Domain = Domain {
    slots: CABLE_SLOTS,
    tasks: CABLE_TASKS,
};

const ELICIT_FORMS: &[(&str, u32)] = &[("{v}", 60), ("{v} please", 10), ("it is {v}", 15), ("my {p} is {v}", 15)];
const YES: &[&str] = &["yes", "yes please", "that is correct", "correct", "sure", "yeah"];
const CLARIFY: &[&str] = &["what do you mean", "why do you need that", "where do i find that", "sorry what was that"];
const CANCELS: &[&str] = &["cancel it", "actually cancel that", "never mind cancel it", "please cancel it"];

fn weighted<'a, R: Rng>(rng: &mut R, items: &'a [(&'a str, u32)]) -> &'a str {
    let total: u32 = items.iter().map(|(_, w)| w).sum();
    let mut x = rng.gen_range(0..total);
    for (it, w) in items {
        if x < *w {
            return it;
        }
        x -= w;
    }
    unreachable!()
}

fn elicit_answer<R: Rng>(slot: &SlotSpec, rng: &mut R) -> Utterance {
    let form = weighted(rng, ELICIT_FORMS);
    let value = slot.values.choose(rng).expect("values");
    let mut u = Utterance::new();
    let (before, after) = form.split_once("{v}").expect("form has value");
    u.plain(&before.replace("{p}", slot.phrase));
    u.value(slot.name, value);
    u.plain(after);
    u
}

fn cable_conversation<R: Rng>(rng: &mut R) -> Vec<TurnRecord> {
    let domain = &CABLE;
    let mut turns = Vec::new();
    let mut act = INFORM;
    let n_goals = *[1usize, 1, 2].choose(rng).expect("goals");
    let mut prev_task: Option<usize> = None;

    if rng.gen_bool(0.08) {
        let mut u = Utterance::new();
        u.plain(["i need some help", "can you help me", "help"].choose(rng).expect("help"));
        turns.push(u.into_turn("Help", act));
        act = INFORM;
    }

    for _ in 0..n_goals {
        let ti = loop {
            let t = rng.gen_range(0..domain.tasks.len());
            if Some(t) != prev_task {
                break t;
            }
        };
        prev_task = Some(ti);
        let task = &domain.tasks[ti];
        let mut filled = Vec::new();
        let opener = task.openers.choose(rng).expect("openers");
        turns.push(render(opener, domain, rng, &mut filled).into_turn(task.intent, act));

        for slot in task.required {
            if filled.contains(slot) {
                continue;
            }
            let spec = domain.slot(slot);
            if rng.gen_bool(0.15) {
                // side question; the agent repeats the elicitation afterwards
                let mut u = Utterance::new();
                u.plain(CLARIFY.choose(rng).expect("clarify"));
                turns.push(u.into_turn("AskClarification", ELICIT_SLOT));
            }
            turns.push(elicit_answer(spec, rng).into_turn(task.intent, ELICIT_SLOT));
            filled.push(spec.name);
        }
        if rng.gen_bool(0.5) {
            let mut u = Utterance::new();
            u.plain(YES.choose(rng).expect("yes"));
            turns.push(u.into_turn(task.intent, CONFIRM));
        }
        act = CLOSE;

        let roll: f64 = rng.gen();
        if let (Some((intent, templates)), true) = (task.change, roll < 0.45) {
            let mut scratch = Vec::new();
            let t = templates.choose(rng).expect("change templates");
            turns.push(render(t, domain, rng, &mut scratch).into_turn(intent, CLOSE));
        } else if let (Some(intent), true) = (task.cancel, roll < 0.75) {
            let mut u = Utterance::new();
            u.plain(CANCELS.choose(rng).expect("cancels"));
            turns.push(u.into_turn(intent, CLOSE));
        }
    }

    let mut u = Utterance::new();
    if rng.gen_bool(0.5) {
        u.plain(["thanks that is all", "goodbye", "bye", "that is everything bye"].choose(rng).expect("bye"));
        turns.push(u.into_turn("Goodbye", CLOSE));
    } else if rng.gen_bool(0.5) {
        u.plain(["thank you", "thanks a lot", "great thanks"].choose(rng).expect("thanks"));
        turns.push(u.into_turn("ThankYou", CLOSE));
    }
    turns
}

const BOOKING_SLOTS: &[SlotSpec] = &[
    SlotSpec {
        name: "food",
        phrase: "food",
        values: &["chinese", "italian", "indian", "thai", "french", "mexican", "korean", "british", "seafood"],
    },
    SlotSpec { name: "area", phrase: "area", values: &["north", "south", "east", "west", "centre", "city centre"] },
    SlotSpec { name: "pricerange", phrase: "price", values: &["cheap", "moderate", "expensive", "moderately priced"] },
    SlotSpec { name: "people", phrase: "party", values: &["2", "3", "4", "5", "6", "7", "8"] },
    SlotSpec { name: "time", phrase: "time", values: &["5", "6", "7", "8", "7 pm", "6 30", "8 pm"] },
];

const BOOKING: Domain = Domain {
    slots: BOOKING_SLOTS,
    tasks: &[],
};

const DONTCARE: &[&str] = &["i dont care", "any", "it doesnt matter", "anything is fine", "dont care"];

fn booking_conversation<R: Rng>(rng: &mut R) -> Vec<TurnRecord> {
    let d = &BOOKING;
    let mut turns = Vec::new();
    let mut filled = Vec::new();
    let opener = *[
        "i am looking for a restaurant",
        "i want a {pricerange} restaurant",
        "find me a {food} restaurant",
        "i want {food} food in the {area}",
        "a {pricerange} restaurant in the {area} please",
        "i need a {pricerange} {food} place",
        "looking for somewhere to eat in the {area}",
    ]
    .choose(rng)
    .expect("openers");
    turns.push(render(opener, d, rng, &mut filled).into_turn("FindRestaurant", INFORM));

    for (slot, intent) in [("food", "InformFood"), ("area", "InformArea"), ("pricerange", "InformPricerange")] {
        if filled.contains(&slot) || !rng.gen_bool(0.75) {
            continue;
        }
        filled.push(slot);
        let u = if rng.gen_bool(0.4) {
            let mut u = Utterance::new();
            u.plain(DONTCARE.choose(rng).expect("dontcare"));
            u
        } else {
            let spec = d.slot(slot);
            let mut u = Utterance::new();
            let v = spec.values.choose(rng).expect("values");
            match rng.gen_range(0..3) {
                0 => u.value(slot, v),
                1 => {
                    u.value(slot, v);
                    u.plain(&format!("{} please", spec.phrase));
                }
                _ => {
                    u.plain("i want");
                    u.value(slot, v);
                    u.plain(spec.phrase);
                }
            }
            u
        };
        turns.push(u.into_turn(intent, ELICIT_SLOT));
    }

    // the agent offers a restaurant
    let mut act = INFORM;
    for _ in 0..rng.gen_range(0..3) {
        let choice = rng.gen_range(0..8);
        let mut u = Utterance::new();
        let intent = match choice {
            0 => {
                u.plain(["what is the address", "whats the address", "where is it"].choose(rng).unwrap());
                "RequestAddress"
            }
            1 => {
                u.plain(["what is the phone number", "can i have the phone number"].choose(rng).unwrap());
                "RequestPhone"
            }
            2 => {
                u.plain(["what is the postcode", "and the post code"].choose(rng).unwrap());
                "RequestPostcode"
            }
            3 => {
                u.plain(["how expensive is it", "what is the price range"].choose(rng).unwrap());
                "RequestPrice"
            }
            4 => {
                u.plain("is it");
                u.value("food", d.slot("food").values.choose(rng).unwrap());
                "ConfirmFood"
            }
            5 => {
                u.plain("is it in the");
                u.value("area", d.slot("area").values.choose(rng).unwrap());
                "ConfirmArea"
            }
            6 => {
                u.plain("is it");
                u.value("pricerange", d.slot("pricerange").values.choose(rng).unwrap());
                "ConfirmPricerange"
            }
            _ => {
                u.plain(["anything else", "is there anything else", "how about another one"].choose(rng).unwrap());
                "RequestAlternatives"
            }
        };
        turns.push(u.into_turn(intent, act));
        act = INFORM;
    }

    if rng.gen_bool(0.5) {
        let mut u = Utterance::new();
        u.plain(["book a table", "can you book it", "i would like to make a reservation"].choose(rng).unwrap());
        turns.push(u.into_turn("BookTable", act));
        for (slot, intent) in [("people", "InformPeople"), ("time", "InformTime")] {
            let spec = d.slot(slot);
            let v = spec.values.choose(rng).unwrap();
            let mut u = Utterance::new();
            if rng.gen_bool(0.7) {
                u.value(slot, v);
            } else if slot == "people" {
                u.plain("for");
                u.value(slot, v);
                u.plain("people");
            } else {
                u.plain("at");
                u.value(slot, v);
            }
            turns.push(u.into_turn(intent, ELICIT_SLOT));
        }
        let mut u = Utterance::new();
        let (text, intent) = if rng.gen_bool(0.8) {
            (*["yes", "yes please", "correct"].choose(rng).unwrap(), "Affirm")
        } else {
            (*["no", "no thanks", "wrong"].choose(rng).unwrap(), "Negate")
        };
        u.plain(text);
        turns.push(u.into_turn(intent, CONFIRM));
        act = CLOSE;
    }

    let mut u = Utterance::new();
    if rng.gen_bool(0.5) {
        u.plain(["thank you", "thanks", "thank you very much"].choose(rng).unwrap());
        turns.push(u.into_turn("ThankYou", act));
    } else {
        u.plain(["bye", "goodbye", "thank you goodbye"].choose(rng).unwrap());
        turns.push(u.into_turn("Goodbye", act));
    }
    turns
}

/// Deterministic per `(seed, n_conversations, profile)`.
pub fn generate_records(seed: u64, n_conversations: usize, profile: Profile) -> Vec<ConversationRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n_conversations)
        .map(|n| ConversationRecord {
            id: format!("{profile}-{seed}-{n:05}"),
            turns: match profile {
                Profile::CableLike => cable_conversation(&mut rng),
                Profile::BookingLike => booking_conversation(&mut rng),
            },
        })
        .collect()
}

/// Generated conversations as a training-split dataset with its own vocabularies.
pub fn generate_synthetic(seed: u64, n_conversations: usize, profile: Profile) -> Result<Dataset> {
    if n_conversations == 0 {
        return Err(Error::InvalidInput("n_conversations must be at least 1".into()));
    }
    Dataset::from_records(&generate_records(seed, n_conversations, profile), Split::Train, None)
}

/// Fraction of non-first turns whose utterance string occurs under two or
/// more distinct gold intents anywhere in `records`.
pub fn ambiguous_followup_fraction(records: &[ConversationRecord]) -> f64 {
    use std::collections::{HashMap, HashSet};
    let mut intents_by_text: HashMap<&str, HashSet<&str>> = HashMap::new();
    for r in records {
        for t in &r.turns {
            intents_by_text.entry(&t.text).or_default().insert(&t.intent);
        }
    }
    let (mut amb, mut total) = (0usize, 0usize);
    for r in records {
        for t in r.turns.iter().skip(1) {
            total += 1;
            if intents_by_text[t.text.as_str()].len() >= 2 {
                amb += 1;
            }
        }
    }
    if total == 0 {
        0.0
    } else {
        amb as f64 / total as f64
    }
}
