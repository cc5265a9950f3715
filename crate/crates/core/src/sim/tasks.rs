//! Task catalogue and the seen / similar / unseen suites.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lang::grammar::{self, Slots, Template};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Seen,
    Similar,
    Unseen,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Seen, Split::Similar, Split::Unseen];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Seen => "seen",
            Split::Similar => "similar",
            Split::Unseen => "unseen",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Split::ALL
            .into_iter()
            .find(|x| x.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown suite {s:?}")))
    }
}

/// One success condition. A task succeeds when all goals hold, reached in
/// order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Goal {
    /// Object resting inside a region. `offset` is where the expert aims,
    /// relative to the region center; success only needs the region radius.
    Place {
        object: String,
        region: String,
        offset: [f64; 2],
    },
    Stack {
        upper: String,
        lower: String,
    },
    Toggle {
        region: String,
    },
}

impl Goal {
    pub fn predicate_id(&self) -> String {
        match self {
            Goal::Place { object, region, .. } => format!("place({object},{region})"),
            Goal::Stack { upper, lower } => format!("stack({upper},{lower})"),
            Goal::Toggle { region } => format!("toggle({region})"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub id: String,
    pub template: Template,
    pub slots: Slots,
    pub split: Split,
    pub instruction: String,
    pub goals: Vec<Goal>,
}

impl TaskSpec {
    pub fn new(id: &str, template: Template, slots: Slots, split: Split) -> Self {
        let instruction = grammar::render(template, &slots)
            .unwrap_or_else(|| panic!("task {id}: slots do not fill template {template}"));
        let goals = goals_for(template, &slots);
        TaskSpec {
            id: id.into(),
            template,
            slots,
            split,
            instruction,
            goals,
        }
    }

    pub fn success_predicate(&self) -> String {
        self.goals
            .iter()
            .map(Goal::predicate_id)
            .collect::<Vec<_>>()
            .join(" then ")
    }

    /// Objects the task manipulates, in goal order.
    pub fn task_objects(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for g in &self.goals {
            let names: Vec<&String> = match g {
                Goal::Place { object, .. } => vec![object],
                Goal::Stack { upper, lower } => vec![upper, lower],
                Goal::Toggle { .. } => vec![],
            };
            for n in names {
                if !out.contains(n) {
                    out.push(n.clone());
                }
            }
        }
        out
    }

    /// `(object, location)` pairs appearing in place goals.
    pub fn object_location_pairs(&self) -> Vec<(String, String)> {
        self.goals
            .iter()
            .filter_map(|g| match g {
                Goal::Place { object, region, .. } => Some((object.clone(), region.clone())),
                _ => None,
            })
            .collect()
    }
}

const PAIR_OFFSET: f64 = 0.04;

pub fn goals_for(template: Template, s: &Slots) -> Vec<Goal> {
    let place = |o: &Option<String>, l: &Option<String>| Goal::Place {
        object: o.clone().expect("object slot"),
        region: l.clone().expect("location slot"),
        offset: [0.0, 0.0],
    };
    match template {
        t if t.is_pick_place() => vec![place(&s.object, &s.location)],
        Template::Stack => vec![Goal::Stack {
            upper: s.object.clone().expect("object slot"),
            lower: s.object2.clone().expect("object2 slot"),
        }],
        Template::BothOn => {
            let k = s.kind.as_deref().expect("kind slot");
            let l = s.location.clone().expect("location slot");
            vec![
                Goal::Place {
                    object: format!("first {k}"),
                    region: l.clone(),
                    offset: [-PAIR_OFFSET, 0.0],
                },
                Goal::Place {
                    object: format!("second {k}"),
                    region: l,
                    offset: [PAIR_OFFSET, 0.0],
                },
            ]
        }
        Template::TurnOn => vec![Goal::Toggle {
            region: s.location.clone().expect("location slot"),
        }],
        Template::TurnOnAndPut => vec![
            Goal::Toggle {
                region: s.location.clone().expect("location slot"),
            },
            place(&s.object, &s.location),
        ],
        Template::TwoPlace => vec![place(&s.object, &s.location), place(&s.object2, &s.location2)],
        _ => unreachable!(),
    }
}

fn pp(id: &str, t: Template, o: &str, l: &str, split: Split) -> TaskSpec {
    TaskSpec::new(id, t, Slots::place(o, l), split)
}

fn seen() -> Vec<TaskSpec> {
    use Template::*;
    vec![
        pp("ball_basket", GrabPlaceIn, "ball", "basket", Split::Seen),
        pp("white_bowl_stove", PutOn, "white bowl", "stove", Split::Seen),
        pp("red_block_plate", PutOn, "red block", "plate", Split::Seen),
        pp("mug_tray", PutIn, "mug", "tray", Split::Seen),
        TaskSpec::new(
            "stack_bowls",
            Stack,
            Slots {
                object: Some("right bowl".into()),
                object2: Some("left bowl".into()),
                ..Default::default()
            },
            Split::Seen,
        ),
        TaskSpec::new(
            "pots_stove",
            BothOn,
            Slots {
                kind: Some("pot".into()),
                location: Some("stove".into()),
                ..Default::default()
            },
            Split::Seen,
        ),
        TaskSpec::new(
            "stove_on",
            TurnOn,
            Slots {
                location: Some("stove".into()),
                ..Default::default()
            },
            Split::Seen,
        ),
        pp(
            "cream_cheese_plate",
            PickUpPlaceOn,
            "cream cheese",
            "plate",
            Split::Seen,
        ),
    ]
}

fn similar() -> Vec<TaskSpec> {
    use Template::*;
    vec![
        TaskSpec::new(
            "stove_on_white_bowl",
            TurnOnAndPut,
            Slots::place("white bowl", "stove"),
            Split::Similar,
        ),
        TaskSpec::new(
            "ball_basket_red_block_plate",
            TwoPlace,
            Slots {
                object: Some("ball".into()),
                location: Some("basket".into()),
                object2: Some("red block".into()),
                location2: Some("plate".into()),
                kind: None,
            },
            Split::Similar,
        ),
        TaskSpec::new(
            "mug_tray_cream_cheese_plate",
            TwoPlace,
            Slots {
                object: Some("mug".into()),
                location: Some("tray".into()),
                object2: Some("cream cheese".into()),
                location2: Some("plate".into()),
                kind: None,
            },
            Split::Similar,
        ),
    ]
}

fn unseen() -> Vec<TaskSpec> {
    use Template::*;
    let u = Split::Unseen;
    vec![
        pp("ball_plate", PutOn, "ball", "plate", u),
        pp("ball_tray", PutIn, "ball", "tray", u),
        pp("white_bowl_plate", PutOn, "white bowl", "plate", u),
        pp("white_bowl_basket", MoveInto, "white bowl", "basket", u),
        pp("red_block_basket", PutIn, "red block", "basket", u),
        pp("red_block_tray", PickUpPlaceOn, "red block", "tray", u),
        pp("mug_stove", PutOn, "mug", "stove", u),
        pp("mug_basket", GrabPlaceIn, "mug", "basket", u),
        pp("cream_cheese_basket", MoveInto, "cream cheese", "basket", u),
        pp("cream_cheese_stove", PutOn, "cream cheese", "stove", u),
    ]
}

pub fn suite(split: Split) -> Vec<TaskSpec> {
    match split {
        Split::Seen => seen(),
        Split::Similar => similar(),
        Split::Unseen => unseen(),
    }
}

pub fn all_tasks() -> Vec<TaskSpec> {
    Split::ALL.into_iter().flat_map(suite).collect()
}

pub fn task_by_id(id: &str) -> Result<TaskSpec> {
    all_tasks()
        .into_iter()
        .find(|t| t.id == id)
        .ok_or_else(|| Error::UnknownTask(id.to_string()))
}

/// Seen tasks used by the default desk-scale run.
pub const DEFAULT_TRAIN_TASKS: [&str; 4] = ["ball_basket", "white_bowl_stove", "red_block_plate", "mug_tray"];
