//! Stage 1: the five-step analysis chain and the optional translator.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{PdeTask, TaskId};
use crate::llm::{Conversation, Gateway, GenParams, LlmError, Purpose, Role};
use crate::prompts::{PromptError, PromptSet};

#[derive(Debug, Error, PartialEq)]
pub enum AnalysisError {
    #[error("response does not start with YES or NO: {0:?}")]
    Verdict(String),
    #[error("classification block could not be parsed ({reason}): {raw:?}")]
    Classification { reason: String, raw: String },
    #[error("translator input is empty")]
    EmptyInput,
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Llm(#[from] LlmError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    Yes,
    No,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Verdict {
    pub decision: Decision,
    pub rationale: String,
    pub raw_response: String,
}

impl Verdict {
    pub fn is_yes(&self) -> bool {
        self.decision == Decision::Yes
    }
}

fn is_markup(c: char) -> bool {
    c.is_whitespace() || matches!(c, '*' | '_' | '#' | '>' | '`' | '"' | '\'' | '[' | '(')
}

/// Reads the leading YES/NO token, ignoring case and surrounding markdown.
pub fn parse_verdict(text: &str) -> Result<Verdict, AnalysisError> {
    let body = text.trim_start_matches(is_markup);
    let lower = body.to_ascii_lowercase();
    let (decision, len) = if lower.starts_with("yes") {
        (Decision::Yes, 3)
    } else if lower.starts_with("no") {
        (Decision::No, 2)
    } else {
        return Err(AnalysisError::Verdict(text.to_string()));
    };
    if body[len..].chars().next().is_some_and(|c| c.is_alphanumeric()) {
        return Err(AnalysisError::Verdict(text.to_string()));
    }
    let rationale = body[len..]
        .trim_start_matches(|c: char| is_markup(c) || matches!(c, ':' | ',' | '.' | ';' | '-' | '\u{2014}' | '\u{2013}' | ')' | ']'))
        .trim_end()
        .to_string();
    Ok(Verdict { decision, rationale, raw_response: text.to_string() })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Linearity {
    Linear,
    QuasiLinear,
    NonLinear,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PdeType {
    Elliptic,
    Parabolic,
    Hyperbolic,
    Mixed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Homogeneity {
    Homogeneous,
    NonHomogeneous,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Classification {
    pub order: u32,
    pub linearity: Linearity,
    #[serde(rename = "type")]
    pub pde_type: PdeType,
    pub homogeneity: Homogeneity,
    pub domain_bc: String,
    pub special_properties: String,
    pub char_polynomial: Option<String>,
}

pub(crate) fn fenced_blocks(text: &str) -> Vec<(String, String)> {
    let mut out = Vec::new();
    let mut lines = text.lines();
    while let Some(line) = lines.next() {
        let t = line.trim_start();
        if let Some(tag) = t.strip_prefix("```") {
            let mut body = Vec::new();
            for inner in lines.by_ref() {
                if inner.trim_start().starts_with("```") {
                    break;
                }
                body.push(inner);
            }
            out.push((tag.trim().to_ascii_lowercase(), body.join("\n")));
        }
    }
    out
}

/// `key: value` pairs from the YAML-like block the classification prompt asks for,
/// including `|-` block scalars. Strict JSON objects are accepted as well.
fn loose_fields(block: &str) -> BTreeMap<String, String> {
    if let Ok(serde_json::Value::Object(map)) = serde_json::from_str::<serde_json::Value>(block) {
        return map
            .into_iter()
            .map(|(k, v)| (k, v.as_str().map(str::to_string).unwrap_or_else(|| v.to_string())))
            .collect();
    }
    let mut out = BTreeMap::new();
    let lines: Vec<&str> = block.lines().collect();
    let mut i = 0;
    while i < lines.len() {
        let line = lines[i].trim();
        i += 1;
        let Some((key, value)) = line.split_once(':') else { continue };
        let key = key.trim().trim_matches('"').to_string();
        if key.is_empty() || key.contains(' ') {
            continue;
        }
        let value = value.trim();
        if value.starts_with('|') || value.starts_with('>') {
            let mut body = Vec::new();
            while i < lines.len() && (lines[i].starts_with(' ') || lines[i].starts_with('\t') || lines[i].trim().is_empty()) {
                let t = lines[i].trim();
                if t == "}" || t == "}}" {
                    break;
                }
                body.push(t);
                i += 1;
            }
            out.insert(key, body.join("\n").trim().to_string());
        } else {
            let v = if value.starts_with('"') { value } else { value.split(" #").next().unwrap_or(value) };
            out.insert(key, v.trim().trim_end_matches(',').trim_matches('"').to_string());
        }
    }
    out
}

fn normalize(s: &str) -> String {
    s.to_ascii_lowercase().replace(['-', ' '], "_")
}

/// Lenient parse of a classification reply.
pub fn parse_classification(text: &str) -> Result<Classification, AnalysisError> {
    let fail = |reason: &str| AnalysisError::Classification { reason: reason.to_string(), raw: text.to_string() };
    let blocks = fenced_blocks(text);
    let block = blocks
        .iter()
        .find(|(tag, _)| tag == "json" || tag == "yaml")
        .or(blocks.first())
        .map(|(_, b)| b.as_str())
        .unwrap_or(text);
    let mut fields = loose_fields(block.trim());
    if !fields.contains_key("order") {
        fields = loose_fields(block.trim().trim_start_matches('{').trim_end_matches('}'));
    }
    let get = |k: &str| fields.get(k).map(String::as_str).ok_or_else(|| fail(&format!("missing '{k}'")));
    let order_text = get("order")?;
    let order = order_text
        .split(|c: char| !c.is_ascii_digit())
        .find(|s| !s.is_empty())
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| fail("order is not an integer"))?;
    let lin = normalize(get("linearity")?);
    let linearity = if lin.starts_with("quasi") {
        Linearity::QuasiLinear
    } else if lin.starts_with("non") {
        Linearity::NonLinear
    } else if lin.starts_with("linear") {
        Linearity::Linear
    } else {
        return Err(fail("unknown linearity"));
    };
    let ty = normalize(get("type")?);
    let pde_type = [
        ("mixed", PdeType::Mixed),
        ("elliptic", PdeType::Elliptic),
        ("parabolic", PdeType::Parabolic),
        ("hyperbolic", PdeType::Hyperbolic),
    ]
    .into_iter()
    .find(|(k, _)| ty.starts_with(k))
    .map(|(_, v)| v)
    .ok_or_else(|| fail("unknown type"))?;
    let hom = normalize(get("homogeneity")?);
    let homogeneity = if hom.starts_with("non") || hom.starts_with("in") {
        Homogeneity::NonHomogeneous
    } else if hom.starts_with("homogeneous") {
        Homogeneity::Homogeneous
    } else {
        return Err(fail("unknown homogeneity"));
    };
    let text_field = |k: &str| fields.get(k).cloned().unwrap_or_default();
    let char_polynomial = fields.get("char_polynomial").filter(|s| !s.is_empty()).cloned();
    Ok(Classification {
        order,
        linearity,
        pde_type,
        homogeneity,
        domain_bc: text_field("domain_bc"),
        special_properties: text_field("special_properties"),
        char_polynomial,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StabilityPlan {
    pub dt_bound_formula: String,
    pub scheme_recommendation: String,
    pub constraints: String,
    pub raw_response: String,
}

/// Structured fields when the reply carries them; otherwise the whole text becomes the
/// recommendation.
pub fn parse_stability(text: &str) -> StabilityPlan {
    let blocks = fenced_blocks(text);
    let fields = blocks.first().map(|(_, b)| loose_fields(b)).unwrap_or_default();
    let get = |k: &str| fields.get(k).cloned().unwrap_or_default();
    let mut plan = StabilityPlan {
        dt_bound_formula: get("dt_bound_formula"),
        scheme_recommendation: get("scheme_recommendation"),
        constraints: get("constraints"),
        raw_response: text.to_string(),
    };
    if plan.scheme_recommendation.is_empty() {
        plan.scheme_recommendation = text.trim().to_string();
    }
    plan
}

impl StabilityPlan {
    pub fn render(&self) -> String {
        format!(
            "dt bound: {}\nScheme: {}\nConstraints: {}",
            self.dt_bound_formula, self.scheme_recommendation, self.constraints
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Route {
    Analytical,
    Transform,
    Hybrid,
    Numerical,
}

impl Route {
    pub fn as_str(self) -> &'static str {
        match self {
            Route::Analytical => "analytical",
            Route::Transform => "transform",
            Route::Hybrid => "hybrid",
            Route::Numerical => "numerical",
        }
    }
}

/// Branch precedence: analytical, then transform, then hybrid, else numerical.
pub fn route_for(analytical: Decision, transformation: Option<Decision>, splitting: Option<Decision>) -> Route {
    match (analytical, transformation, splitting) {
        (Decision::Yes, _, _) => Route::Analytical,
        (_, Some(Decision::Yes), _) => Route::Transform,
        (_, _, Some(Decision::Yes)) => Route::Hybrid,
        _ => Route::Numerical,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub task_id: TaskId,
    pub classification: Classification,
    pub classification_raw: String,
    pub analytical: Verdict,
    pub transformation: Option<Verdict>,
    pub splitting: Option<Verdict>,
    pub stability: Option<StabilityPlan>,
    pub route: Route,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelChoice {
    pub model_id: String,
    #[serde(default)]
    pub params: GenParams,
}

impl ModelChoice {
    pub fn new(model_id: &str) -> Self {
        ModelChoice { model_id: model_id.to_string(), params: GenParams::default() }
    }

    pub fn conversation(&self) -> Conversation {
        Conversation::new(self.model_id.clone(), self.params)
    }
}

fn ask(
    gateway: &mut Gateway,
    conv: &mut Conversation,
    purpose: Purpose,
    prompt: String,
) -> Result<String, AnalysisError> {
    conv.push(Role::User, prompt);
    Ok(gateway.exchange(conv, purpose)?)
}

fn ask_verdict(
    gateway: &mut Gateway,
    conv: &mut Conversation,
    purpose: Purpose,
    prompt: String,
) -> Result<Verdict, AnalysisError> {
    parse_verdict(&ask(gateway, conv, purpose, prompt)?)
}

/// Runs classification, the three route checks (stopping at the first YES) and, for the
/// hybrid and numerical routes, the stability analysis, all in one conversation.
/// `preamble` (e.g. a prior run's report) is prepended to the first prompt.
pub fn run_analysis(
    task: &PdeTask,
    gateway: &mut Gateway,
    prompts: &PromptSet,
    model: &ModelChoice,
    preamble: Option<&str>,
) -> Result<AnalysisReport, AnalysisError> {
    let description = prompts.describe(task)?;
    let desc = [("pde_description", description.as_str())];
    let mut conv = model.conversation().system(prompts.get("system")?);

    let mut first = prompts.render("classification", &desc)?;
    if let Some(p) = preamble {
        first = format!("{p}\n\n{first}");
    }
    let raw = ask(gateway, &mut conv, Purpose::AnalysisClassify, first)?;
    let (classification, classification_raw) = match parse_classification(&raw) {
        Ok(c) => (c, raw),
        Err(_) => {
            let retry = ask(gateway, &mut conv, Purpose::AnalysisClassify, prompts.render("classification_repair", &[])?)?;
            (parse_classification(&retry)?, retry)
        }
    };

    let analytical = ask_verdict(gateway, &mut conv, Purpose::AnalysisAnalytical, prompts.render("analytical_check", &desc)?)?;
    let mut transformation = None;
    let mut splitting = None;
    if !analytical.is_yes() {
        let t = ask_verdict(gateway, &mut conv, Purpose::AnalysisTransform, prompts.render("transformation_check", &desc)?)?;
        if !t.is_yes() {
            splitting =
                Some(ask_verdict(gateway, &mut conv, Purpose::AnalysisSplitting, prompts.render("splitting_check", &desc)?)?);
        }
        transformation = Some(t);
    }
    let route = route_for(
        analytical.decision,
        transformation.as_ref().map(|v| v.decision),
        splitting.as_ref().map(|v| v.decision),
    );
    let stability = match route {
        Route::Hybrid | Route::Numerical => Some(parse_stability(&ask(
            gateway,
            &mut conv,
            Purpose::AnalysisStability,
            prompts.render("stability", &desc)?,
        )?)),
        _ => None,
    };
    Ok(AnalysisReport {
        task_id: task.task_id(),
        classification,
        classification_raw,
        analytical,
        transformation,
        splitting,
        stability,
        route,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "outcome", content = "text")]
pub enum TranslateOutcome {
    Template(String),
    NeedsClarification(String),
}

pub const CLARIFICATION_MARKER: &str = "NEEDS_CLARIFICATION";

/// Turns free text into a structured description, or reports what is missing.
pub fn translate_description(
    free_text: &str,
    gateway: &mut Gateway,
    prompts: &PromptSet,
    model: &ModelChoice,
    example: &PdeTask,
) -> Result<TranslateOutcome, AnalysisError> {
    if free_text.trim().is_empty() {
        return Err(AnalysisError::EmptyInput);
    }
    let example_description = prompts.describe(example)?;
    let prompt = prompts.render("translator", &[("example_description", &example_description), ("free_text", free_text)])?;
    let mut conv = model.conversation().system(prompts.get("system")?).user(prompt);
    let reply = gateway.exchange(&mut conv, Purpose::Translate)?;
    let trimmed = reply.trim_start();
    Ok(match trimmed.strip_prefix(CLARIFICATION_MARKER) {
        Some(rest) => TranslateOutcome::NeedsClarification(rest.trim().to_string()),
        None => TranslateOutcome::Template(reply.trim().to_string()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn verdict_examples() {
        let v = parse_verdict("YES \u{2014} closed form exists via separation").unwrap();
        assert_eq!(v.decision, Decision::Yes);
        assert_eq!(v.rationale, "closed form exists via separation");
        assert_eq!(parse_verdict("no, the nonlinearity prevents it").unwrap().decision, Decision::No);
        let v = parse_verdict("**YES**\nThe Cole-Hopf transform").unwrap();
        assert_eq!(v.decision, Decision::Yes);
        assert_eq!(v.rationale, "The Cole-Hopf transform");
        assert!(parse_verdict("Maybe").is_err());
        assert!(parse_verdict("Nothing is known").is_err());
        assert!(parse_verdict("").is_err());
    }

    #[test]
    fn route_precedence() {
        use Decision::*;
        assert_eq!(route_for(Yes, Some(Yes), Some(Yes)), Route::Analytical);
        assert_eq!(route_for(No, Some(Yes), Some(Yes)), Route::Transform);
        assert_eq!(route_for(No, Some(No), Some(Yes)), Route::Hybrid);
        assert_eq!(route_for(No, Some(No), Some(No)), Route::Numerical);
        assert_eq!(route_for(No, None, None), Route::Numerical);
    }

    const YAMLISH: &str = "Here you go.\n```json\n{\norder:               2\nlinearity:           \"non-linear\"\ntype:                \"parabolic\"  # second derivative in x\nhomogeneity:         \"homogeneous\"\ndomain_bc: |-\n  x in (0,1), periodic.\n  t in (0, T].\nspecial_properties: |-\n  Fisher-KPP; logistic reaction.\nchar_polynomial: |-\n  xi^2 = 0\n  }\n```\n";

    #[test]
    fn yaml_like_classification() {
        let c = parse_classification(YAMLISH).unwrap();
        assert_eq!(c.order, 2);
        assert_eq!(c.linearity, Linearity::NonLinear);
        assert_eq!(c.pde_type, PdeType::Parabolic);
        assert_eq!(c.homogeneity, Homogeneity::Homogeneous);
        assert_eq!(c.domain_bc, "x in (0,1), periodic.\nt in (0, T].");
        assert_eq!(c.char_polynomial.as_deref(), Some("xi^2 = 0"));
    }

    #[test]
    fn strict_json_classification() {
        let text = r#"```json
{"order": 1, "linearity": "linear", "type": "hyperbolic", "homogeneity": "homogeneous", "domain_bc": "periodic", "special_properties": "transport"}
```"#;
        let c = parse_classification(text).unwrap();
        assert_eq!((c.order, c.pde_type, c.char_polynomial), (1, PdeType::Hyperbolic, None));
    }

    #[test]
    fn classification_roundtrips_through_json() {
        let c = parse_classification(YAMLISH).unwrap();
        let back: Classification = serde_json::from_str(&serde_json::to_string(&c).unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn garbage_classification_fails() {
        assert!(parse_classification("I think it is a nice PDE.").is_err());
    }

    #[test]
    fn stability_parse_fallback() {
        let p = parse_stability("dt <= dx^2 / (2 nu)");
        assert_eq!(p.scheme_recommendation, "dt <= dx^2 / (2 nu)");
        let p = parse_stability("```json\n{\"dt_bound_formula\": \"0.25*dx**2/nu\", \"scheme_recommendation\": \"Strang\", \"constraints\": \"u in [0,1]\"}\n```");
        assert_eq!(p.dt_bound_formula, "0.25*dx**2/nu");
    }
}
