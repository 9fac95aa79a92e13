//! Browser bindings for the demo page in `www/`. Every entry point takes and
//! returns JSON text so the page can stay plain JavaScript.

use serde::Serialize;
use wasm_bindgen::prelude::*;

use setchain::bench::{self, Scenario};
use setchain::byz_model::{self, Model, ModelEvent};
use setchain::incentives::{reward, RewardParams};
use setchain::simnet::SimTime;

/// Longest run the page will ask for; anything longer stalls the tab.
pub const MAX_DURATION: u64 = 200_000;

fn js_err(e: impl std::fmt::Display) -> JsValue {
    JsValue::from_str(&e.to_string())
}

/// Run a scenario given as (partial) JSON and return its report.
#[wasm_bindgen]
pub fn simulate(scenario_json: &str) -> Result<String, JsValue> {
    simulate_json(scenario_json).map_err(js_err)
}

pub fn simulate_json(scenario_json: &str) -> Result<String, String> {
    let mut s: Scenario = serde_json::from_str(scenario_json).map_err(|e| e.to_string())?;
    s.duration = SimTime(s.duration.0.min(MAX_DURATION));
    let r = bench::run_scenario(&s).map_err(|e| e.to_string())?;
    serde_json::to_string(&r).map_err(|e| e.to_string())
}

#[derive(Serialize)]
struct Surface {
    signers: Vec<usize>,
    elements: Vec<u64>,
    /// `tokens[s][i]` is the reward for `signers[s]` signers and `elements[i]` elements.
    tokens: Vec<Vec<u64>>,
}

/// Reward for every signer count and a sweep of epoch sizes.
#[wasm_bindgen]
pub fn reward_surface(params_json: &str, max_elements: u64, step: u64) -> Result<String, JsValue> {
    reward_surface_json(params_json, max_elements, step).map_err(js_err)
}

pub fn reward_surface_json(params_json: &str, max_elements: u64, step: u64) -> Result<String, String> {
    let p: RewardParams = serde_json::from_str(params_json).map_err(|e| e.to_string())?;
    p.validate().map_err(|e| e.to_string())?;
    let elements: Vec<u64> = (0..=max_elements).step_by(step.max(1) as usize).collect();
    let signers: Vec<usize> = (0..=p.n).collect();
    let tokens = signers
        .iter()
        .map(|&s| elements.iter().map(|&e| reward(e, s, &p)).collect::<Result<Vec<_>, _>>())
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| e.to_string())?;
    serde_json::to_string(&Surface { signers, elements, tokens }).map_err(|e| e.to_string())
}

#[derive(Serialize)]
struct MappedStep {
    source: ModelEvent,
    mapped: ModelEvent,
}

#[derive(Serialize)]
struct Mapping {
    byzantine: Vec<u32>,
    ok: bool,
    reason: Option<String>,
    steps: Vec<MappedStep>,
}

/// Generate a trace with `f` Byzantine servers and map it to the single-adversary model.
#[wasm_bindgen]
pub fn map_trace(n: u32, f: u32, len: u32, seed: u64) -> Result<String, JsValue> {
    map_trace_json(n, f, len, seed).map_err(js_err)
}

pub fn map_trace_json(n: u32, f: u32, len: u32, seed: u64) -> Result<String, String> {
    if f == 0 || n < 3 * f + 1 {
        return Err(format!("need n >= 3f+1 and f >= 1, got n={n}, f={f}"));
    }
    let m = Model::gamma_seeded(n, f as usize, seed);
    let source = m.generate(len.min(1000) as usize, seed);
    let (mapped, ok, reason) = match byz_model::map_gamma_to_gamma_prime(&m, &source) {
        Ok(v) => (v, true, None),
        Err(c) => (c.mapped.clone(), false, Some(c.reason.clone())),
    };
    let steps = source.into_iter().zip(mapped).map(|(source, mapped)| MappedStep { source, mapped }).collect();
    let out = Mapping { byzantine: m.byzantine.iter().map(|p| p.0).collect(), ok, reason, steps };
    serde_json::to_string(&out).map_err(|e| e.to_string())
}
