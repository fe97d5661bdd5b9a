//! Deterministic offline responder for every call the pipeline makes.
//!
//! Replies are pure functions of the request. Generated programs carry `# desk:`
//! directives for [`crate::desk_guest`]; judges rank them with a fixed heuristic and
//! patch the directive line one step at a time toward a sound configuration.

use std::collections::BTreeMap;

use crate::desk_guest::directives;
use crate::domain::TaskId;
use crate::llm::{simulated_usage, Backend, CallInfo, Completion, LlmError, Purpose, Request, Role};

/// Default model id for offline runs; priced at zero unless configured.
pub const DESK_MODEL: &str = "desk";

/// Offline backend for `task`.
pub struct DeskBackend {
    task: TaskId,
}

impl DeskBackend {
    pub fn new(task: TaskId) -> Self {
        DeskBackend { task }
    }
}

impl Backend for DeskBackend {
    fn complete(&mut self, call: CallInfo, request: &Request) -> Result<Completion, LlmError> {
        let text = respond(self.task, call.purpose, request);
        let usage = simulated_usage(request, &text);
        Ok(Completion { text, usage })
    }
}

fn classification(task: TaskId) -> &'static str {
    match task {
        TaskId::Advection => "order: 1\nlinearity: linear\ntype: hyperbolic\nhomogeneity: homogeneous\ndomain_bc: |-\n  x in (0,1), periodic\nspecial_properties: |-\n  constant-speed transport, exact shift\nchar_polynomial: |-\n  omega = beta k",
        TaskId::Burgers => "order: 2\nlinearity: quasi-linear\ntype: parabolic\nhomogeneity: homogeneous\ndomain_bc: |-\n  x in (0,1), periodic\nspecial_properties: |-\n  steep fronts for small viscosity\nchar_polynomial: |-\n  none",
        TaskId::ReactionDiffusion => "order: 2\nlinearity: non-linear\ntype: parabolic\nhomogeneity: homogeneous\ndomain_bc: |-\n  x in (0,1), periodic\nspecial_properties: |-\n  logistic reaction, solutions stay in [0,1]\nchar_polynomial: |-\n  xi^2 = 0",
        TaskId::NavierStokes => "order: 2\nlinearity: non-linear\ntype: mixed\nhomogeneity: homogeneous\ndomain_bc: |-\n  x in (-1,1), periodic\nspecial_properties: |-\n  compressible, shocks, positivity of density and pressure\nchar_polynomial: |-\n  none",
        TaskId::Darcy => "order: 2\nlinearity: linear\ntype: elliptic\nhomogeneity: non-homogeneous\ndomain_bc: |-\n  (0,1)^2, u = 0 on the boundary\nspecial_properties: |-\n  piecewise-constant coefficient\nchar_polynomial: |-\n  xi1^2 + xi2^2 = 0",
    }
}

fn yes(flag: bool, why: &str) -> String {
    format!("{} {why}", if flag { "YES." } else { "NO." })
}

/// Directive sets for generated programs, cycled by candidate index.
fn genesis_directives(task: TaskId, index: usize) -> &'static str {
    match task {
        TaskId::ReactionDiffusion => [
            "splitting=lie reaction=naive dt_factor=0.9",
            "splitting=strang reaction=euler dt_factor=0.8",
            "splitting=lie reaction=stable dt_factor=0.9 fault=crash",
            "splitting=lie reaction=euler dt_factor=0.7",
        ][index % 4],
        TaskId::Advection => ["scheme=second_order_fv cfl=0.9", "scheme=second_order_fv cfl=0.4", "scheme=second_order_fv cfl=0.6 fault=nan", "scheme=second_order_fv cfl=0.8"][index % 4],
        _ => ["method=reference", "method=reference fault=shape", "method=reference", "method=reference"][index % 4],
    }
}

fn signature_line(task: TaskId) -> &'static str {
    match task {
        TaskId::Advection => "def solver(u0_batch, t_coordinate, beta):",
        TaskId::Burgers => "def solver(u0_batch, t_coordinate, nu):",
        TaskId::ReactionDiffusion => "def solver(u0_batch, t_coordinate, nu, rho):",
        TaskId::NavierStokes => "def solver(Vx0, density0, pressure0, t_coordinate, eta, zeta):",
        TaskId::Darcy => "def solver(a):",
    }
}

fn program(task: TaskId, directive_line: &str) -> String {
    format!(
        "import numpy as np\n\n# desk: {directive_line}\n\n\n{}\n    \"\"\"Desk program; executed by the built-in desk guest.\"\"\"\n    raise NotImplementedError(\"run with the desk guest\")\n",
        signature_line(task)
    )
}

/// Lower is better; drives shortlists and the order of patch steps.
fn heuristic(d: &BTreeMap<String, String>) -> u32 {
    let mut cost = 0;
    if d.contains_key("fault") {
        cost += 100;
    }
    match d.get("reaction").map(String::as_str) {
        Some("naive") => cost += 20,
        Some("euler") => cost += 30,
        _ => {}
    }
    if d.get("splitting").is_some_and(|s| s == "lie") {
        cost += 10;
    }
    if let Some(f) = d.get("dt_factor").and_then(|v| v.parse::<f64>().ok()) {
        cost += (f * 10.0) as u32;
    }
    if let Some(c) = d.get("cfl").and_then(|v| v.parse::<f64>().ok()) {
        cost += (c * 10.0) as u32;
    }
    cost
}

/// The next directive set a judge proposes, or `None` when nothing is left to improve.
fn improve(d: &BTreeMap<String, String>) -> Option<BTreeMap<String, String>> {
    let mut next = d.clone();
    if next.remove("fault").is_some() {
        next.remove("sleep");
        return Some(next);
    }
    if next.get("reaction").is_some_and(|r| r != "stable") {
        next.insert("reaction".into(), "stable".into());
        return Some(next);
    }
    if next.get("splitting").is_some_and(|s| s == "lie") {
        next.insert("splitting".into(), "strang".into());
        return Some(next);
    }
    for (key, floor) in [("dt_factor", 0.5), ("cfl", 0.1)] {
        if let Some(v) = next.get(key).and_then(|v| v.parse::<f64>().ok()) {
            if v > floor + 1e-12 {
                let stepped = ((v - 0.1) * 10.0).round() / 10.0;
                next.insert(key.into(), format!("{}", stepped.max(floor)));
                return Some(next);
            }
        }
    }
    None
}

fn directive_text(d: &BTreeMap<String, String>, order: &[String]) -> String {
    let mut keys: Vec<&String> = order.iter().filter(|k| d.contains_key(*k)).collect();
    keys.extend(d.keys().filter(|k| !order.contains(k)));
    keys.iter().map(|k| format!("{k}={}", d[*k])).collect::<Vec<_>>().join(" ")
}

fn directive_order(line: &str) -> Vec<String> {
    line.split_whitespace().filter_map(|p| p.split_once('=').map(|(k, _)| k.to_string())).collect()
}

fn python_blocks(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut rest = text;
    while let Some(start) = rest.find("```python\n") {
        let body = &rest[start + 10..];
        let Some(end) = body.find("\n```") else { break };
        out.push(body[..end].to_string());
        rest = &body[end + 4..];
    }
    out
}

/// Candidate ids and sources from a judge listing.
fn listing(text: &str) -> Vec<(String, String)> {
    let mut out = Vec::new();
    for part in text.split("### Solver ID ").skip(1) {
        let id = part.lines().next().unwrap_or("").trim().to_string();
        let source = python_blocks(part).into_iter().next().unwrap_or_default();
        out.push((id, source));
    }
    out
}

fn after<'a>(text: &'a str, marker: &str) -> Option<&'a str> {
    text.find(marker).map(|p| &text[p + marker.len()..])
}

fn judge_index(request: &Request) -> usize {
    let first = request.messages.iter().find(|m| m.role == Role::User).map(|m| m.content.as_str()).unwrap_or("");
    after(first, "Judge J")
        .and_then(|t| t.split(|c: char| !c.is_ascii_digit()).next())
        .and_then(|n| n.parse::<usize>().ok())
        .unwrap_or(1)
}

fn shortlist_size(request: &Request) -> usize {
    let text = request.messages.iter().rev().find(|m| m.role == Role::User).map(|m| m.content.as_str()).unwrap_or("");
    text.split("exactly ").skip(1).find_map(|t| t.split_whitespace().next().and_then(|n| n.parse().ok())).unwrap_or(1)
}

fn verdict(request: &Request) -> String {
    let judge = judge_index(request);
    let first = request.messages.iter().find(|m| m.role == Role::User).map(|m| m.content.as_str()).unwrap_or("");
    let mut ranked: Vec<(u32, usize, String)> = listing(first)
        .into_iter()
        .enumerate()
        .map(|(k, (id, src))| (heuristic(&directives(&src)), k, id))
        .collect();
    // Judges break ties differently by rotating the presentation order.
    let n = ranked.len().max(1);
    ranked.sort_by_key(|(h, k, _)| (*h, (k + n - (judge - 1) % n) % n));
    let k = shortlist_size(request).min(ranked.len());
    let shortlist: Vec<&(u32, usize, String)> = ranked.iter().take(k).collect();
    let nominee = &shortlist[(judge - 1) % k.max(1)].2;
    let entries: Vec<String> = shortlist
        .iter()
        .map(|(h, _, id)| format!("{{\"id\": \"{id}\", \"reason\": \"heuristic cost {h}\"}}"))
        .collect();
    format!(
        "Code [Solver ID] {nominee}\nConfidence in your judgment: Medium\nNominated: YES. Lowest risk among the shortlisted programs for this judge.\n\n```verdict\n{{\"shortlist\": [{}], \"nominee\": \"{nominee}\", \"confidence\": \"medium\", \"risks\": [\"check the time-step bound\"]}}\n```\n",
        entries.join(", ")
    )
}

fn base_source(request: &Request) -> Option<String> {
    request
        .messages
        .iter()
        .rev()
        .filter(|m| m.role == Role::User)
        .find_map(|m| after(&m.content, "Base solver ").map(python_blocks))
        .and_then(|b| b.into_iter().next())
}

fn patch(request: &Request) -> String {
    let Some(source) = base_source(request) else {
        return "No base solver was shown, so no change is proposed.".into();
    };
    let lines: Vec<&str> = source.lines().collect();
    let Some(at) = lines.iter().position(|l| l.trim_start().starts_with("# desk:")) else {
        return "The base solver has no tunable settings; keeping it unchanged.\n```diff\n```\n".into();
    };
    let old = lines[at];
    let current = directives(old);
    let Some(next) = improve(&current) else {
        return "The base solver already follows the recommended configuration; keeping it unchanged.\n```diff\n```\n".into();
    };
    let new = format!("# desk: {}", directive_text(&next, &directive_order(old.trim_start().trim_start_matches("# desk:"))));
    let line = at + 1;
    format!(
        "Step the configuration toward the stability-safe setting.\n```diff\n--- a/solver.py\n+++ b/solver.py\n@@ -{line} +{line} @@\n-{old}\n+{new}\n```\n"
    )
}

fn debug_fix(request: &Request) -> String {
    let text = request.last_user();
    let source = after(text, "Solver source:").map(python_blocks).and_then(|b| b.into_iter().next()).unwrap_or_default();
    let fixed: Vec<String> = source
        .lines()
        .map(|l| {
            if l.trim_start().starts_with("# desk:") {
                let mut d = directives(l);
                d.remove("fault");
                d.remove("sleep");
                format!("# desk: {}", directive_text(&d, &directive_order(l.trim_start().trim_start_matches("# desk:"))))
            } else {
                l.to_string()
            }
        })
        .collect();
    format!("The failure comes from a forced fault; removing it.\n```python\n{}\n```\n", fixed.join("\n"))
}

fn respond(task: TaskId, purpose: Purpose, request: &Request) -> String {
    let last = request.last_user();
    match purpose {
        Purpose::AnalysisClassify => format!("```yaml\n{}\n```\n", classification(task)),
        Purpose::AnalysisAnalytical => yes(task == TaskId::Advection, "Constant-coefficient transport is solved by an exact shift."),
        Purpose::AnalysisTransform => yes(task == TaskId::Burgers, "The Cole-Hopf substitution linearizes the equation."),
        Purpose::AnalysisSplitting => yes(task == TaskId::ReactionDiffusion, "Reaction and diffusion can be split and the logistic part integrated exactly."),
        Purpose::AnalysisStability => "```json\n{\"dt_bound_formula\": \"dt <= 0.25 dx^2 / nu\", \"scheme_recommendation\": \"Strang splitting with exact reaction and explicit diffusion\", \"constraints\": \"keep u in [0,1]; check for NaN after every step\"}\n```\n".into(),
        Purpose::Genesis => {
            let index = after(last, "This is candidate ")
                .and_then(|t| t.split_whitespace().next())
                .and_then(|n| n.parse::<usize>().ok())
                .unwrap_or(1);
            let directive_line = genesis_directives(task, index - 1);
            format!("Candidate {index} plan: {directive_line}.\n```python\n{}```\n", program(task, directive_line))
        }
        Purpose::JudgeSelect => verdict(request),
        Purpose::JudgePatch => patch(request),
        Purpose::Debug => debug_fix(request),
        Purpose::Translate => "NEEDS_CLARIFICATION The desk responder cannot interpret free-form descriptions.".into(),
        Purpose::Report => "The desk narrative is a fixed summary: configuration changes were applied one step per round and the ledger tables above hold every measured value.".into(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn improvement_ladder_terminates() {
        let mut d = directives("# desk: splitting=lie reaction=naive dt_factor=0.9 fault=crash");
        let mut steps = 0;
        while let Some(n) = improve(&d) {
            assert!(heuristic(&n) < heuristic(&d));
            d = n;
            steps += 1;
        }
        assert_eq!(steps, 7);
        assert_eq!(directive_text(&d, &[]), "dt_factor=0.5 reaction=stable splitting=strang");
    }

    #[test]
    fn debug_removes_fault() {
        let src = program(TaskId::ReactionDiffusion, "splitting=lie fault=crash");
        let req = Request {
            model: "m".into(),
            messages: vec![crate::llm::Message { role: Role::User, content: format!("Solver source:\n```python\n{src}```\n") }],
            temperature: 0.0,
            max_tokens: 1,
        };
        let reply = debug_fix(&req);
        assert!(reply.contains("# desk: splitting=lie\n"));
    }
}
