//! Closed task grammar shared by the simulator (instruction generation) and
//! the language side (parsing, entity extraction, decomposition).

use std::fmt;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

/// Manipulable objects known to the world.
pub const OBJECT_NAMES: &[&str] = &[
    "ball",
    "orange",
    "red block",
    "white bowl",
    "mug",
    "ketchup",
    "chocolate pudding",
    "cream cheese",
    "first pot",
    "second pot",
    "left bowl",
    "right bowl",
];

/// Named target areas on the table.
pub const LOCATION_NAMES: &[&str] = &["basket", "plate", "stove", "tray"];

/// Plural forms for the `put both ... on the ...` template, with the
/// singular used in object names ("first pot", "second pot").
pub const PAIRED_KINDS: &[(&str, &str)] = &[("pots", "pot"), ("bowls", "bowl")];

pub fn is_object(name: &str) -> bool {
    OBJECT_NAMES.contains(&name)
}

pub fn is_location(name: &str) -> bool {
    LOCATION_NAMES.contains(&name)
}

/// Sentence templates. Slot roles are fixed per template.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Template {
    /// grab the {object} and place it in the {location}
    GrabPlaceIn,
    /// put the {object} on the {location}
    PutOn,
    /// put the {object} in the {location}
    PutIn,
    /// move the {object} into the {location}
    MoveInto,
    /// pick up the {object} and place it on the {location}
    PickUpPlaceOn,
    /// stack the {object} on the {object2}
    Stack,
    /// put both {kind}s on the {location}
    BothOn,
    /// turn on the {location}
    TurnOn,
    /// turn on the {location} and put the {object} on it
    TurnOnAndPut,
    /// put the {object} in the {location} and the {object2} on the {location2}
    TwoPlace,
}

impl Template {
    pub const ALL: [Template; 10] = [
        Template::GrabPlaceIn,
        Template::PutOn,
        Template::PutIn,
        Template::MoveInto,
        Template::PickUpPlaceOn,
        Template::Stack,
        Template::BothOn,
        Template::TurnOn,
        Template::TurnOnAndPut,
        Template::TwoPlace,
    ];

    /// Template text with `{o}`, `{o2}`, `{l}`, `{l2}`, `{k}` placeholders.
    pub fn pattern(self) -> &'static str {
        match self {
            Template::GrabPlaceIn => "grab the {o} and place it in the {l}",
            Template::PutOn => "put the {o} on the {l}",
            Template::PutIn => "put the {o} in the {l}",
            Template::MoveInto => "move the {o} into the {l}",
            Template::PickUpPlaceOn => "pick up the {o} and place it on the {l}",
            Template::Stack => "stack the {o} on the {o2}",
            Template::BothOn => "put both {k} on the {l}",
            Template::TurnOn => "turn on the {l}",
            Template::TurnOnAndPut => "turn on the {l} and put the {o} on it",
            Template::TwoPlace => "put the {o} in the {l} and the {o2} on the {l2}",
        }
    }

    pub fn id(self) -> &'static str {
        match self {
            Template::GrabPlaceIn => "grab_place_in",
            Template::PutOn => "put_on",
            Template::PutIn => "put_in",
            Template::MoveInto => "move_into",
            Template::PickUpPlaceOn => "pick_up_place_on",
            Template::Stack => "stack",
            Template::BothOn => "both_on",
            Template::TurnOn => "turn_on",
            Template::TurnOnAndPut => "turn_on_and_put",
            Template::TwoPlace => "two_place",
        }
    }

    pub fn is_pick_place(self) -> bool {
        matches!(
            self,
            Template::GrabPlaceIn | Template::PutOn | Template::PutIn | Template::MoveInto | Template::PickUpPlaceOn
        )
    }
}

impl fmt::Display for Template {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

/// Slot bindings. Unused slots are `None`.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Slots {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub object: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub object2: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub location: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub location2: Option<String>,
    /// Singular kind for paired objects ("pot" for "first pot"/"second pot").
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kind: Option<String>,
}

impl Slots {
    pub fn place(object: &str, location: &str) -> Self {
        Slots {
            object: Some(object.into()),
            location: Some(location.into()),
            ..Default::default()
        }
    }
}

fn plural_of(kind: &str) -> Option<&'static str> {
    PAIRED_KINDS.iter().find(|(_, s)| *s == kind).map(|(p, _)| *p)
}

fn singular_of(plural: &str) -> Option<&'static str> {
    PAIRED_KINDS.iter().find(|(p, _)| *p == plural).map(|(_, s)| *s)
}

/// Render an instruction. Returns `None` when a required slot is missing.
pub fn render(template: Template, slots: &Slots) -> Option<String> {
    let mut text = template.pattern().to_string();
    let subs: [(&str, &Option<String>); 4] = [
        ("{o2}", &slots.object2),
        ("{l2}", &slots.location2),
        ("{o}", &slots.object),
        ("{l}", &slots.location),
    ];
    for (key, val) in subs {
        if text.contains(key) {
            text = text.replace(key, val.as_deref()?);
        }
    }
    if text.contains("{k}") {
        text = text.replace("{k}", plural_of(slots.kind.as_deref()?)?);
    }
    Some(text)
}

/// Lowercase, drop punctuation, collapse whitespace.
pub fn normalize_text(text: &str) -> String {
    text.to_lowercase()
        .chars()
        .map(|c| {
            if c.is_alphanumeric() || c.is_whitespace() {
                c
            } else {
                ' '
            }
        })
        .collect::<String>()
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
}

fn compiled() -> &'static [(Template, Regex)] {
    static CELL: OnceLock<Vec<(Template, Regex)>> = OnceLock::new();
    CELL.get_or_init(|| {
        Template::ALL
            .iter()
            .map(|&t| {
                let mut pat = regex::escape(t.pattern());
                for (k, group) in [
                    (r"\{o2\}", "(?P<o2>.+?)"),
                    (r"\{l2\}", "(?P<l2>.+?)"),
                    (r"\{o\}", "(?P<o>.+?)"),
                    (r"\{l\}", "(?P<l>.+?)"),
                    (r"\{k\}", "(?P<k>.+?)"),
                ] {
                    pat = pat.replace(k, group);
                }
                (t, Regex::new(&format!("^{pat}$")).expect("template regex"))
            })
            .collect()
    })
}

/// Match free text against the grammar. Slot values must come from the
/// closed vocabulary.
pub fn parse(text: &str) -> Option<(Template, Slots)> {
    let norm = normalize_text(text);
    for (template, re) in compiled() {
        let Some(caps) = re.captures(&norm) else {
            continue;
        };
        let get = |name: &str| caps.name(name).map(|m| m.as_str().to_string());
        let slots = Slots {
            object: get("o"),
            object2: get("o2"),
            location: get("l"),
            location2: get("l2"),
            kind: get("k").and_then(|p| singular_of(&p).map(str::to_string)),
        };
        if get("k").is_some() && slots.kind.is_none() {
            continue;
        }
        let objects_ok = [&slots.object, &slots.object2]
            .iter()
            .all(|o| o.as_deref().is_none_or(is_object));
        let locations_ok = [&slots.location, &slots.location2]
            .iter()
            .all(|l| l.as_deref().is_none_or(is_location));
        if objects_ok && locations_ok {
            return Some((*template, slots));
        }
    }
    None
}

/// Every word the grammar can produce, in instructions or plan steps.
pub fn closed_word_set() -> Vec<String> {
    let mut words: Vec<String> = Vec::new();
    let mut push_text = |t: &str| {
        for w in normalize_text(t).split(' ') {
            if !w.is_empty() && !w.starts_with('{') {
                words.push(w.to_string());
            }
        }
    };
    for t in Template::ALL {
        push_text(&t.pattern().replace(['{', '}'], " "));
    }
    for n in OBJECT_NAMES.iter().chain(LOCATION_NAMES) {
        push_text(n);
    }
    for (p, s) in PAIRED_KINDS {
        push_text(p);
        push_text(s);
    }
    for step_word in super::cot::STEP_WORDS {
        push_text(step_word);
    }
    words.retain(|w| !matches!(w.as_str(), "o" | "o2" | "l" | "l2" | "k"));
    words.sort();
    words.dedup();
    words
}
