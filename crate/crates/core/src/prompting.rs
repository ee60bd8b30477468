//! Prompt rendering and response parsing.
//!
//! Templates are plain text with `{placeholder}` fields (`{{` and `}}` for
//! literal braces) split into `# Role`, `# Profile`, `# Requirement` and an
//! optional `# Response Format` section. Responses are JSON-like objects
//! keyed by candidate name, the abstain option and `Reason`.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::population::AgentProfile;

/// Key the model uses for the third option.
pub const OTHER_KEY: &str = "vote for another candidate or not vote at all";
pub const REASON_KEY: &str = "Reason";

const SIMPLEX_BAND: (f64, f64) = (0.95, 1.05);
// Sums this close to one are float noise from decimal literals, not drift.
const EXACT_SUM_TOLERANCE: f64 = 1e-12;

const SCENARIO_FIELDS: [&str; 4] = ["election_name", "candidate_dem", "candidate_rep", "context_sentence"];
const STATE_FIELD: &str = "state";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PromptError {
    #[error("unbound placeholder {{{0}}}")]
    UnboundPlaceholder(String),
    #[error("template error: {0}")]
    Template(String),
    #[error("invalid scenario: {0}")]
    InvalidScenario(String),
    #[error("malformed response: {0}")]
    MalformedResponse(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Scenario {
    pub election_name: String,
    pub candidate_dem: String,
    pub candidate_rep: String,
    pub context_sentence: String,
}

impl Scenario {
    pub fn new(
        election_name: impl Into<String>,
        candidate_dem: impl Into<String>,
        candidate_rep: impl Into<String>,
        context_sentence: impl Into<String>,
    ) -> Result<Self, PromptError> {
        let scenario = Self {
            election_name: election_name.into(),
            candidate_dem: candidate_dem.into(),
            candidate_rep: candidate_rep.into(),
            context_sentence: context_sentence.into(),
        };
        scenario.validate()?;
        Ok(scenario)
    }

    /// Scenario whose context sentence names both candidates in the
    /// standard "In the ..., X is the Republican candidate, ..." form.
    pub fn two_candidate(
        election_name: impl Into<String>,
        candidate_dem: impl Into<String>,
        candidate_rep: impl Into<String>,
    ) -> Result<Self, PromptError> {
        let (election, dem, rep) = (election_name.into(), candidate_dem.into(), candidate_rep.into());
        let context =
            format!("In the {election}, {rep} is the Republican candidate, and {dem} is the Democratic candidate.");
        Self::new(election, dem, rep, context)
    }

    pub fn validate(&self) -> Result<(), PromptError> {
        let dem = self.candidate_dem.trim();
        let rep = self.candidate_rep.trim();
        if dem.is_empty() || rep.is_empty() {
            return Err(PromptError::InvalidScenario("candidate names must be non-empty".into()));
        }
        if dem.eq_ignore_ascii_case(rep) {
            return Err(PromptError::InvalidScenario("candidate names must differ".into()));
        }
        let reserved = [OTHER_KEY, REASON_KEY];
        if reserved.iter().any(|k| k.eq_ignore_ascii_case(dem) || k.eq_ignore_ascii_case(rep)) {
            return Err(PromptError::InvalidScenario("candidate name collides with a response key".into()));
        }
        Ok(())
    }

    fn field(&self, name: &str) -> Option<&str> {
        match name {
            "election_name" => Some(&self.election_name),
            "candidate_dem" => Some(&self.candidate_dem),
            "candidate_rep" => Some(&self.candidate_rep),
            "context_sentence" => Some(&self.context_sentence),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Piece {
    Text(String),
    Field(String),
}

fn tokenize(template: &str) -> Result<Vec<Piece>, PromptError> {
    let mut pieces = Vec::new();
    let mut text = String::new();
    let mut chars = template.chars().peekable();
    while let Some(c) = chars.next() {
        match c {
            '{' if chars.peek() == Some(&'{') => {
                chars.next();
                text.push('{');
            }
            '}' if chars.peek() == Some(&'}') => {
                chars.next();
                text.push('}');
            }
            '{' => {
                let mut name = String::new();
                loop {
                    match chars.next() {
                        Some('}') => break,
                        Some(ch) if ch.is_ascii_alphanumeric() || ch == '_' => name.push(ch),
                        Some(ch) => {
                            return Err(PromptError::Template(format!("invalid character {ch:?} in placeholder")))
                        }
                        None => return Err(PromptError::Template("unclosed placeholder".into())),
                    }
                }
                if name.is_empty() {
                    return Err(PromptError::Template("empty placeholder".into()));
                }
                if !text.is_empty() {
                    pieces.push(Piece::Text(std::mem::take(&mut text)));
                }
                pieces.push(Piece::Field(name));
            }
            '}' => return Err(PromptError::Template("unmatched `}`".into())),
            other => text.push(other),
        }
    }
    if !text.is_empty() {
        pieces.push(Piece::Text(text));
    }
    Ok(pieces)
}

fn fields_of(section: &str) -> Result<Vec<String>, PromptError> {
    Ok(tokenize(section)?
        .into_iter()
        .filter_map(|p| match p {
            Piece::Field(name) => Some(name),
            Piece::Text(_) => None,
        })
        .collect())
}

/// The four prompt sections, each holding its own heading line.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    pub role_section: String,
    pub profile_section: String,
    pub requirement_section: String,
    pub response_format_section: Option<String>,
}

const HEADINGS: [&str; 4] = ["# Role", "# Profile", "# Requirement", "# Response Format"];

impl PromptTemplate {
    /// Splits a template file on its section headings.
    pub fn parse(text: &str) -> Result<Self, PromptError> {
        let mut starts = Vec::new();
        let mut offset = 0;
        for line in text.split_inclusive('\n') {
            let trimmed = line.trim_end();
            if let Some(index) = HEADINGS.iter().position(|h| *h == trimmed) {
                starts.push((index, offset));
            }
            offset += line.len();
        }
        let order: Vec<usize> = starts.iter().map(|(i, _)| *i).collect();
        if order != [0, 1, 2] && order != [0, 1, 2, 3] {
            return Err(PromptError::Template(
                "expected sections # Role, # Profile, # Requirement [, # Response Format] in order".into(),
            ));
        }
        if starts[0].1 != 0 {
            return Err(PromptError::Template("text before # Role".into()));
        }
        let mut sections: Vec<String> = Vec::with_capacity(starts.len());
        for (k, (_, start)) in starts.iter().enumerate() {
            let end = starts.get(k + 1).map(|(_, s)| *s).unwrap_or(text.len());
            sections.push(text[*start..end].to_string());
        }
        let template = Self {
            role_section: sections[0].clone(),
            profile_section: sections[1].clone(),
            requirement_section: sections[2].clone(),
            response_format_section: sections.get(3).cloned(),
        };
        template.placeholders()?;
        Ok(template)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&self.role_section);
        out.push_str(&self.profile_section);
        out.push_str(&self.requirement_section);
        if let Some(format) = &self.response_format_section {
            out.push_str(format);
        }
        out
    }

    pub fn has_reason_field(&self) -> bool {
        self.response_format_section.as_deref().is_some_and(|s| s.contains(REASON_KEY))
    }

    /// Every placeholder name used anywhere in the template.
    pub fn placeholders(&self) -> Result<BTreeSet<String>, PromptError> {
        Ok(fields_of(&self.to_text())?.into_iter().collect())
    }

    /// Placeholders that refer to profile variables (not state, not scenario).
    pub fn variable_placeholders(&self) -> Result<BTreeSet<String>, PromptError> {
        Ok(self
            .placeholders()?
            .into_iter()
            .filter(|name| name != STATE_FIELD && !SCENARIO_FIELDS.contains(&name.as_str()))
            .collect())
    }

    /// Drops profile lines that mention a variable outside `enabled`.
    pub fn restricted_to(&self, enabled: &[String]) -> Result<Self, PromptError> {
        let mut profile = String::with_capacity(self.profile_section.len());
        for line in self.profile_section.split_inclusive('\n') {
            let keep = fields_of(line)?
                .iter()
                .all(|name| name == STATE_FIELD || SCENARIO_FIELDS.contains(&name.as_str()) || enabled.contains(name));
            if keep {
                profile.push_str(line);
            }
        }
        Ok(Self { profile_section: profile, ..self.clone() })
    }

    /// Checks that the template's variable placeholders are exactly `variables`.
    pub fn check_covers(&self, variables: &[String]) -> Result<(), PromptError> {
        let used = self.variable_placeholders()?;
        let wanted: BTreeSet<String> = variables.iter().cloned().collect();
        if let Some(missing) = wanted.difference(&used).next() {
            return Err(PromptError::Template(format!("template has no placeholder for variable {missing:?}")));
        }
        if let Some(extra) = used.difference(&wanted).next() {
            return Err(PromptError::UnboundPlaceholder(extra.clone()));
        }
        Ok(())
    }
}

/// Fills `template` with the agent's profile and the scenario.
pub fn render_prompt(
    profile: &AgentProfile,
    scenario: &Scenario,
    template: &PromptTemplate,
) -> Result<String, PromptError> {
    let mut out = String::new();
    for piece in tokenize(&template.to_text())? {
        match piece {
            Piece::Text(text) => out.push_str(&text),
            Piece::Field(name) => {
                let value = if name == STATE_FIELD {
                    Some(profile.state.as_str())
                } else {
                    scenario.field(&name).or_else(|| profile.attributes.get(&name).map(String::as_str))
                };
                match value {
                    Some(value) => out.push_str(value),
                    None => return Err(PromptError::UnboundPlaceholder(name)),
                }
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VoteResponse {
    pub p_dem: f64,
    pub p_rep: f64,
    pub p_other: f64,
    pub reason: String,
    pub renormalized: bool,
}

impl VoteResponse {
    /// Serializes in the response-format layout: Republican candidate,
    /// Democratic candidate, abstain option, reason; one key per line.
    pub fn to_response_text(&self, scenario: &Scenario) -> String {
        let key = |s: &str| serde_json::to_string(s).expect("string serializes");
        let num = |x: f64| serde_json::to_string(&x).expect("finite probability");
        format!(
            "{{\n{}: {},\n{}: {},\n{}: {},\n{}: {}\n}}",
            key(&scenario.candidate_rep),
            num(self.p_rep),
            key(&scenario.candidate_dem),
            num(self.p_dem),
            key(OTHER_KEY),
            num(self.p_other),
            key(REASON_KEY),
            key(&self.reason),
        )
    }

    pub fn sum(&self) -> f64 {
        self.p_dem + self.p_rep + self.p_other
    }
}

/// Returns the first balanced `{...}` span, honoring quoted strings.
fn first_object(raw: &str) -> Option<&str> {
    let bytes = raw.as_bytes();
    for (start, _) in raw.match_indices('{') {
        let mut depth = 0usize;
        let mut quote: Option<u8> = None;
        let mut escaped = false;
        for (offset, &b) in bytes[start..].iter().enumerate() {
            if let Some(q) = quote {
                if escaped {
                    escaped = false;
                } else if b == b'\\' {
                    escaped = true;
                } else if b == q {
                    quote = None;
                }
                continue;
            }
            match b {
                b'"' => quote = Some(b'"'),
                b'{' => depth += 1,
                b'}' => {
                    depth -= 1;
                    if depth == 0 {
                        return Some(&raw[start..=start + offset]);
                    }
                }
                _ => {}
            }
        }
    }
    None
}

#[derive(Debug, Clone, PartialEq)]
enum LooseValue {
    Number(f64),
    Text(String),
    Other,
}

/// Parses a flat object whose strings may use single quotes, typographic
/// quotes or trailing commas. Only used when strict JSON fails.
fn parse_loose_object(text: &str) -> Option<Vec<(String, LooseValue)>> {
    let normalized: String = text
        .chars()
        .map(|c| match c {
            '\u{201c}' | '\u{201d}' => '"',
            '\u{2018}' | '\u{2019}' => '\'',
            other => other,
        })
        .collect();
    let chars: Vec<char> = normalized.chars().collect();
    let mut pos = 0;
    let skip_ws = |pos: &mut usize| {
        while *pos < chars.len() && chars[*pos].is_whitespace() {
            *pos += 1;
        }
    };
    // A quoted string ends at its quote char when what follows is a
    // structural character, so apostrophes inside 'I'm' survive.
    let read_string = |pos: &mut usize, terminators: &[char]| -> Option<String> {
        let quote = chars[*pos];
        *pos += 1;
        let mut out = String::new();
        while *pos < chars.len() {
            let c = chars[*pos];
            if c == '\\' && *pos + 1 < chars.len() {
                let next = chars[*pos + 1];
                out.push(match next {
                    'n' => '\n',
                    't' => '\t',
                    other => other,
                });
                *pos += 2;
                continue;
            }
            if c == quote {
                let mut look = *pos + 1;
                while look < chars.len() && chars[look].is_whitespace() {
                    look += 1;
                }
                if look >= chars.len() || terminators.contains(&chars[look]) {
                    *pos += 1;
                    return Some(out);
                }
            }
            out.push(c);
            *pos += 1;
        }
        None
    };

    skip_ws(&mut pos);
    if chars.get(pos) != Some(&'{') {
        return None;
    }
    pos += 1;
    let mut fields = Vec::new();
    loop {
        skip_ws(&mut pos);
        match chars.get(pos) {
            Some('}') => return Some(fields),
            Some(',') => {
                pos += 1;
                continue;
            }
            Some('"') | Some('\'') => {}
            _ => return None,
        }
        let key = read_string(&mut pos, &[':'])?;
        skip_ws(&mut pos);
        if chars.get(pos) != Some(&':') {
            return None;
        }
        pos += 1;
        skip_ws(&mut pos);
        let value = match chars.get(pos)? {
            '"' | '\'' => LooseValue::Text(read_string(&mut pos, &[',', '}'])?),
            _ => {
                let start = pos;
                while pos < chars.len() && chars[pos] != ',' && chars[pos] != '}' {
                    pos += 1;
                }
                let token: String = chars[start..pos].iter().collect();
                match token.trim().parse::<f64>() {
                    Ok(x) => LooseValue::Number(x),
                    Err(_) => LooseValue::Other,
                }
            }
        };
        fields.push((key, value));
    }
}

fn strict_object(text: &str) -> Option<Vec<(String, LooseValue)>> {
    let value: serde_json::Value = serde_json::from_str(text).ok()?;
    let object = value.as_object()?;
    Some(
        object
            .iter()
            .map(|(k, v)| {
                let v = match v {
                    serde_json::Value::Number(n) => n.as_f64().map_or(LooseValue::Other, LooseValue::Number),
                    serde_json::Value::String(s) => LooseValue::Text(s.clone()),
                    _ => LooseValue::Other,
                };
                (k.clone(), v)
            })
            .collect(),
    )
}

fn probability(key: &str, value: &LooseValue) -> Result<f64, PromptError> {
    let malformed = |why: String| PromptError::MalformedResponse(why);
    let x = match value {
        LooseValue::Number(x) => *x,
        LooseValue::Text(s) => {
            let s = s.trim();
            match s.strip_suffix('%') {
                Some(pct) => pct.trim().parse::<f64>().map(|p| p / 100.0),
                None => s.parse::<f64>(),
            }
            .map_err(|_| malformed(format!("{key:?} is not a probability: {s:?}")))?
        }
        LooseValue::Other => return Err(malformed(format!("{key:?} is not a number"))),
    };
    if !x.is_finite() {
        return Err(malformed(format!("{key:?} is not finite")));
    }
    if x < 0.0 {
        return Err(malformed(format!("{key:?} is negative ({x})")));
    }
    Ok(x)
}

/// Extracts a [`VoteResponse`] from raw model output.
///
/// Takes the first balanced-brace object in `raw`; keys are matched
/// case-insensitively against the scenario's candidates, the abstain key and
/// `Reason`. Sums within [0.95, 1.05] are rescaled to one.
pub fn parse_response(raw: &str, scenario: &Scenario) -> Result<VoteResponse, PromptError> {
    let malformed = |why: &str| PromptError::MalformedResponse(why.to_string());
    let object = first_object(raw).ok_or_else(|| malformed("no JSON object found"))?;
    let fields = strict_object(object)
        .or_else(|| parse_loose_object(object))
        .ok_or_else(|| malformed("object does not parse"))?;

    let matches = |key: &str, name: &str| key.trim().eq_ignore_ascii_case(name.trim());
    let find = |name: &str| fields.iter().find(|(k, _)| matches(k, name)).map(|(_, v)| v);

    let p_dem = probability(
        &scenario.candidate_dem,
        find(&scenario.candidate_dem).ok_or_else(|| malformed("missing Democratic candidate field"))?,
    )?;
    let p_rep = probability(
        &scenario.candidate_rep,
        find(&scenario.candidate_rep).ok_or_else(|| malformed("missing Republican candidate field"))?,
    )?;
    let p_other = probability(OTHER_KEY, find(OTHER_KEY).ok_or_else(|| malformed("missing abstain field"))?)?;
    let reason = match find(REASON_KEY) {
        Some(LooseValue::Text(text)) => text.clone(),
        Some(_) => return Err(malformed("Reason is not text")),
        None => String::new(),
    };

    let sum = p_dem + p_rep + p_other;
    if !(SIMPLEX_BAND.0..=SIMPLEX_BAND.1).contains(&sum) {
        return Err(PromptError::MalformedResponse(format!(
            "probabilities sum to {sum}, outside [{}, {}]",
            SIMPLEX_BAND.0, SIMPLEX_BAND.1
        )));
    }
    let mut response = VoteResponse { p_dem, p_rep, p_other, reason, renormalized: false };
    if (sum - 1.0).abs() > EXACT_SUM_TOLERANCE {
        response.p_dem /= sum;
        response.p_rep /= sum;
        response.p_other /= sum;
        response.renormalized = true;
    }
    Ok(response)
}

/// Prefix of `reason` up to and including the first `.`, `!` or `?` that is
/// followed by whitespace or the end of the text.
pub fn first_sentence(reason: &str) -> &str {
    let mut chars = reason.char_indices().peekable();
    while let Some((index, c)) = chars.next() {
        if matches!(c, '.' | '!' | '?') {
            match chars.peek() {
                None => return reason,
                Some((_, next)) if next.is_whitespace() => return &reason[..index + c.len_utf8()],
                _ => {}
            }
        }
    }
    reason
}

/// What remains of `reason` once its first sentence is removed.
pub fn after_first_sentence(reason: &str) -> &str {
    &reason[first_sentence(reason).len()..]
}
