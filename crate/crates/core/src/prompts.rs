//! Prompt assets and `str.format`-style rendering.
//!
//! Placeholders are `{name}`; `{{` and `}}` render as literal braces. Assets ship inside the
//! binary and can be overridden per name from a directory of `<name>.txt` files.

use std::collections::BTreeMap;
use std::path::Path;

use thiserror::Error;

use crate::domain::{PdeTask, TaskId};

#[derive(Debug, Error, PartialEq)]
pub enum PromptError {
    #[error("unknown prompt asset '{0}'")]
    MissingAsset(String),
    #[error("template '{template}' needs a value for '{{{name}}}'")]
    MissingValue { template: String, name: String },
    #[error("template '{template}': unmatched '{brace}' at byte {offset}")]
    StrayBrace { template: String, brace: char, offset: usize },
    #[error("reading override {path}: {message}")]
    Io { path: String, message: String },
}

macro_rules! builtin {
    ($($name:literal),* $(,)?) => {
        &[$(($name, include_str!(concat!("../assets/prompts/", $name, ".txt")))),*]
    };
}

static BUILTIN: &[(&str, &str)] = builtin!(
    "system",
    "classification",
    "classification_repair",
    "analytical_check",
    "transformation_check",
    "splitting_check",
    "stability",
    "analytical_followup",
    "transform_followup",
    "hybrid_followup",
    "numerical_followup",
    "genesis_index",
    "code_generation_criteria",
    "judge_select",
    "judge_candidate",
    "judge_verdict_block",
    "verdict_repair",
    "round_feedback",
    "round_result",
    "patch_retry",
    "debug_fix",
    "code_repair",
    "translator",
    "reporter",
    "description_advection",
    "description_burgers",
    "description_reaction_diffusion",
    "description_navier_stokes",
    "description_darcy",
    "template_advection",
    "template_burgers",
    "template_reaction_diffusion",
    "template_navier_stokes",
    "template_darcy",
);

/// Names of every built-in asset.
pub fn builtin_names() -> impl Iterator<Item = &'static str> {
    BUILTIN.iter().map(|(n, _)| *n)
}

/// The asset collection used by a run.
#[derive(Debug, Clone, Default)]
pub struct PromptSet {
    overrides: BTreeMap<String, String>,
}

impl PromptSet {
    pub fn builtin() -> Self {
        PromptSet::default()
    }

    /// Built-ins, with any `<name>.txt` found in `dir` taking precedence.
    pub fn with_overrides(dir: &Path) -> Result<Self, PromptError> {
        let mut overrides = BTreeMap::new();
        for name in builtin_names() {
            let path = dir.join(format!("{name}.txt"));
            if path.exists() {
                let text = std::fs::read_to_string(&path)
                    .map_err(|e| PromptError::Io { path: path.display().to_string(), message: e.to_string() })?;
                overrides.insert(name.to_string(), text);
            }
        }
        Ok(PromptSet { overrides })
    }

    pub fn set(&mut self, name: &str, text: impl Into<String>) {
        self.overrides.insert(name.to_string(), text.into());
    }

    pub fn get(&self, name: &str) -> Result<&str, PromptError> {
        if let Some(t) = self.overrides.get(name) {
            return Ok(t);
        }
        BUILTIN
            .iter()
            .find(|(n, _)| *n == name)
            .map(|(_, t)| *t)
            .ok_or_else(|| PromptError::MissingAsset(name.to_string()))
    }

    pub fn render(&self, name: &str, values: &[(&str, &str)]) -> Result<String, PromptError> {
        render_named(name, self.get(name)?, values)
    }

    /// The task description with its coefficients filled in.
    pub fn describe(&self, task: &PdeTask) -> Result<String, PromptError> {
        let fmt = |s: &str| format_coefficient(task.param(s));
        let values: Vec<(&str, String)> = match task.task_id() {
            TaskId::Advection => vec![("advection_beta", fmt("beta"))],
            TaskId::Burgers => vec![("burgers_nu", fmt("nu"))],
            TaskId::ReactionDiffusion => vec![("reacdiff1d_nu", fmt("nu")), ("reacdiff1d_rho", fmt("rho"))],
            TaskId::NavierStokes => vec![("cns1d_eta", fmt("eta")), ("cns1d_zeta", fmt("zeta"))],
            TaskId::Darcy => vec![("darcy_beta", fmt("beta_source"))],
        };
        let refs: Vec<(&str, &str)> = values.iter().map(|(k, v)| (*k, v.as_str())).collect();
        self.render(task.description_template(), &refs)
    }

    pub fn solver_template(&self, task: &PdeTask) -> Result<&str, PromptError> {
        self.get(&format!("template_{}", task.task_id().as_str()))
    }
}

/// Shortest decimal that reads back as the same value (`0.5`, `1.0`, `0.01`).
pub fn format_coefficient(v: f64) -> String {
    if v.fract() == 0.0 && v.abs() < 1e15 {
        format!("{v:.1}")
    } else {
        format!("{v}")
    }
}

pub fn render(template: &str, values: &[(&str, &str)]) -> Result<String, PromptError> {
    render_named("<inline>", template, values)
}

fn render_named(name: &str, template: &str, values: &[(&str, &str)]) -> Result<String, PromptError> {
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    let mut offset = 0;
    let stray = |brace, offset| PromptError::StrayBrace { template: name.to_string(), brace, offset };
    while let Some(pos) = rest.find(['{', '}']) {
        out.push_str(&rest[..pos]);
        let tail = &rest[pos..];
        if tail.starts_with("{{") {
            out.push('{');
            rest = &tail[2..];
            offset += pos + 2;
        } else if tail.starts_with("}}") {
            out.push('}');
            rest = &tail[2..];
            offset += pos + 2;
        } else if tail.starts_with('}') {
            return Err(stray('}', offset + pos));
        } else {
            let close = tail.find('}').ok_or_else(|| stray('{', offset + pos))?;
            let key = &tail[1..close];
            if key.is_empty() || !key.chars().all(|c| c.is_ascii_alphanumeric() || c == '_') {
                return Err(stray('{', offset + pos));
            }
            let value = values
                .iter()
                .find(|(k, _)| *k == key)
                .map(|(_, v)| *v)
                .ok_or_else(|| PromptError::MissingValue { template: name.to_string(), name: key.to_string() })?;
            out.push_str(value);
            rest = &tail[close + 1..];
            offset += pos + close + 1;
        }
    }
    out.push_str(rest);
    Ok(out)
}
