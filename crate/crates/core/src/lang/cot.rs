//! Rule-based step decomposition and prompt formatting for an external model.

use serde::{Deserialize, Serialize};

use super::grammar::{self, Slots, Template};

/// Verbs allowed to open a plan step.
pub const STEP_VERBS: &[&str] = &["locate", "grasp", "move", "place", "release", "toggle"];

/// Fixed words used by the step skeletons (besides slot values).
pub const STEP_WORDS: &[&str] = &[
    "locate", "grasp", "at", "center", "move", "over", "place", "on", "release", "leaving", "some", "space", "first",
    "second", "next", "to", "knob", "toggle", "steps",
];

/// A task sentence and, when it matches the grammar, its template and slots.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Instruction {
    pub raw: String,
    pub task_id: Option<Template>,
    pub slots: Slots,
}

impl Instruction {
    pub fn parse(raw: &str) -> Self {
        match grammar::parse(raw) {
            Some((t, slots)) => Instruction {
                raw: raw.to_string(),
                task_id: Some(t),
                slots,
            },
            None => Instruction {
                raw: raw.to_string(),
                task_id: None,
                slots: Slots::default(),
            },
        }
    }

    pub fn from_template(template: Template, slots: Slots) -> Option<Self> {
        let raw = grammar::render(template, &slots)?;
        Some(Instruction {
            raw,
            task_id: Some(template),
            slots,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CoTPlan {
    pub steps: Vec<String>,
    /// `"raw. Steps: s1 → s2 → …"`
    pub rendered: String,
    /// Set when the instruction did not match a template and the plan is
    /// just the raw sentence.
    pub fallback: bool,
}

impl CoTPlan {
    pub fn new(raw: &str, steps: Vec<String>, fallback: bool) -> Self {
        let rendered = format!("{}. Steps: {}", raw.trim_end_matches('.'), steps.join(" → "));
        CoTPlan {
            steps,
            rendered,
            fallback,
        }
    }
}

fn pick_place(o: &str, l: &str) -> Vec<String> {
    vec![
        format!("locate {o}"),
        "grasp at center".into(),
        format!("move over {l}"),
        "release".into(),
    ]
}

fn turn_on(l: &str) -> Vec<String> {
    vec![
        format!("locate {l} knob"),
        format!("move over {l} knob"),
        format!("toggle {l} knob"),
    ]
}

/// Step skeleton for a template with its slots substituted. `None` if a
/// required slot is missing.
pub fn skeleton(template: Template, s: &Slots) -> Option<Vec<String>> {
    let o = s.object.as_deref();
    let l = s.location.as_deref();
    Some(match template {
        t if t.is_pick_place() => pick_place(o?, l?),
        Template::Stack => {
            let (o, o2) = (o?, s.object2.as_deref()?);
            vec![
                format!("locate {o}"),
                "grasp at center".into(),
                format!("move over {o2}"),
                format!("place on {o2}"),
                "release".into(),
            ]
        }
        Template::BothOn => {
            let (k, l) = (s.kind.as_deref()?, l?);
            vec![
                format!("grasp first {k}"),
                format!("place on {l} leaving some space"),
                format!("grasp second {k}"),
                format!("place on {l} next to first {k}"),
            ]
        }
        Template::TurnOn => turn_on(l?),
        Template::TurnOnAndPut => {
            let mut steps = turn_on(l?);
            steps.extend(pick_place(o?, l?));
            steps
        }
        Template::TwoPlace => {
            let mut steps = pick_place(o?, l?);
            steps.extend(pick_place(s.object2.as_deref()?, s.location2.as_deref()?));
            steps
        }
        _ => unreachable!("pick-place templates handled above"),
    })
}

/// Grammar-driven decomposition. Unmatched instructions yield a single step
/// holding the raw text, with `fallback` set.
pub fn decompose_rule_based(instr: &Instruction) -> CoTPlan {
    match instr.task_id.and_then(|t| skeleton(t, &instr.slots)) {
        Some(steps) => CoTPlan::new(&instr.raw, steps, false),
        None => {
            log::warn!("no template for {:?}; using raw instruction as the plan", instr.raw);
            CoTPlan::new(&instr.raw, vec![instr.raw.clone()], true)
        }
    }
}

const PREAMBLE: &str = "You control a robot arm with a parallel gripper on a tabletop. \
Split the instruction into short ordered steps that a gripper can execute, using what \
you see in the camera image to decide where to grasp and where to put things.";

const CLOSING: &str = "Write a step-by-step plan for the next instruction in the same style. \
Only mention objects in the scene and only use grasp, move, place, release, locate or toggle steps.";

fn capitalize(s: &str) -> String {
    let mut c = s.chars();
    match c.next() {
        Some(f) => f.to_uppercase().chain(c).collect(),
        None => String::new(),
    }
}

/// Prompt for an external decomposer: preamble, worked examples, target.
pub fn format_llm_prompt(instr: &Instruction, examples: &[(Instruction, CoTPlan)]) -> String {
    let mut out = String::from(PREAMBLE);
    out.push_str("\n\n");
    if !examples.is_empty() {
        out.push_str("Examples:\n\n");
        for (ex, plan) in examples {
            out.push_str(&format!("Task Instruction: {}\n", capitalize(&ex.raw)));
            out.push_str(&format!("Steps: {}.\n\n", capitalize(&plan.steps.join(", "))));
        }
        out.push_str(CLOSING);
        out.push_str("\n\n");
    }
    out.push_str(&format!("Task Instruction: {}\n", instr.raw));
    out.push_str("RGB view: <attached image>\n");
    out.push_str("Steps:");
    out
}

/// Pull a step list out of free model output. Accepts arrows, `->`, commas
/// after a `Steps:` label, or one step per line.
pub fn parse_steps(text: &str) -> Option<Vec<String>> {
    let body = match text.rfind("Steps:") {
        Some(i) => &text[i + "Steps:".len()..],
        None => text,
    };
    let body = body.replace("->", "→");
    let parts: Vec<&str> = if body.contains('→') {
        body.split(['→', '\n']).collect()
    } else if body.trim().contains('\n') {
        body.split('\n').collect()
    } else {
        body.split(',').collect()
    };
    let steps: Vec<String> = parts
        .into_iter()
        .map(|p| {
            p.trim()
                .trim_start_matches(|c: char| c.is_ascii_digit() || matches!(c, '.' | ')' | '-' | '*'))
                .trim()
                .trim_end_matches('.')
                .trim()
                .to_string()
        })
        .filter(|p| !p.is_empty())
        .collect();
    (!steps.is_empty()).then_some(steps)
}
