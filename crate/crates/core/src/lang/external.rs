//! Optional HTTP client for model-generated step plans. Any failure falls back
//! to the rule-based decomposer; a run never aborts because of this path.

use std::time::Duration;

use base64::Engine;
use serde::{Deserialize, Serialize};

use super::cot::{decompose_rule_based, format_llm_prompt, parse_steps, CoTPlan, Instruction};
use crate::error::{Error, Result};

pub const ENV_URL: &str = "CAVLA_LLM_URL";
pub const ENV_KEY: &str = "CAVLA_LLM_KEY";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExternalConfig {
    pub url: String,
    #[serde(default, skip_serializing)]
    pub key: Option<String>,
    pub model: String,
    pub timeout_ms: u64,
}

impl ExternalConfig {
    /// Reads `CAVLA_LLM_URL` and `CAVLA_LLM_KEY`. `None` when no URL is set.
    pub fn from_env() -> Option<Self> {
        let url = std::env::var(ENV_URL).ok().filter(|u| !u.is_empty())?;
        Some(ExternalConfig {
            url,
            key: std::env::var(ENV_KEY).ok(),
            model: "default".into(),
            timeout_ms: 10_000,
        })
    }
}

#[derive(Serialize)]
struct Request<'a> {
    model: &'a str,
    prompt: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    image: Option<String>,
}

#[derive(Deserialize)]
struct Response {
    text: String,
}

fn request_plan(cfg: &ExternalConfig, prompt: &str, image: Option<&[u8]>) -> Result<String> {
    let agent: ureq::Agent = ureq::Agent::config_builder()
        .timeout_global(Some(Duration::from_millis(cfg.timeout_ms)))
        .build()
        .into();
    let body = Request {
        model: &cfg.model,
        prompt,
        image: image.map(|b| base64::engine::general_purpose::STANDARD.encode(b)),
    };
    let mut req = agent.post(&cfg.url);
    if let Some(key) = &cfg.key {
        req = req.header("Authorization", &format!("Bearer {key}"));
    }
    let mut resp = req.send_json(&body).map_err(|e| Error::Llm(e.to_string()))?;
    let parsed: Response = resp.body_mut().read_json().map_err(|e| Error::Llm(e.to_string()))?;
    Ok(parsed.text)
}

/// Ask the endpoint for a plan. `image` is an encoded frame (PPM bytes) sent
/// base64 in the request. Falls back to [`decompose_rule_based`] on any error
/// or unparseable reply.
pub fn decompose_external(
    instr: &Instruction,
    image: Option<&[u8]>,
    cfg: &ExternalConfig,
    examples: &[(Instruction, CoTPlan)],
) -> CoTPlan {
    let prompt = format_llm_prompt(instr, examples);
    match request_plan(cfg, &prompt, image) {
        Ok(text) => match parse_steps(&text) {
            Some(steps) => CoTPlan::new(&instr.raw, steps, false),
            None => {
                log::warn!("external plan for {:?} was empty; using rule-based plan", instr.raw);
                decompose_rule_based(instr)
            }
        },
        Err(e) => {
            log::warn!("external decomposer failed ({e}); using rule-based plan");
            decompose_rule_based(instr)
        }
    }
}
