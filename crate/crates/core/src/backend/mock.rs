use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{prompt_digest, BackendError, QueryRecord, QueryRequest};
use crate::digest::derive_seed;
use crate::population::AgentProfile;
use crate::prompting::{Scenario, VoteResponse};

/// Fixture file for the scripted mock: raw responses keyed by prompt digest,
/// with an optional fallback for prompts not listed.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScriptedFixtures {
    #[serde(default)]
    pub responses: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub default: Option<String>,
}

impl ScriptedFixtures {
    pub fn load(path: &Path) -> Result<Self, BackendError> {
        let text =
            std::fs::read_to_string(path).map_err(|e| BackendError::Config(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| BackendError::Config(format!("{}: {e}", path.display())))
    }
}

#[derive(Debug, Clone)]
pub struct ScriptedMock {
    fixtures: ScriptedFixtures,
    model_id: String,
}

impl ScriptedMock {
    pub fn new(fixtures: ScriptedFixtures, model_id: &str) -> Self {
        Self { fixtures, model_id: model_id.to_string() }
    }

    pub fn model_id(&self) -> &str {
        &self.model_id
    }

    pub fn query(&self, prompt: &str) -> Result<QueryRecord, BackendError> {
        let digest = prompt_digest(prompt);
        let raw_text = self
            .fixtures
            .responses
            .get(&digest)
            .or(self.fixtures.default.as_ref())
            .cloned()
            .ok_or_else(|| BackendError::MissingFixture(digest.clone()))?;
        Ok(QueryRecord { prompt_digest: digest, raw_text, model_id: self.model_id.clone(), latency: 0.0, attempt: 0 })
    }
}

/// Parameters of the parametric mock.
///
/// The Democratic two-party lean of an agent is
/// `logistic(base + state_base[state] + sum of offsets[variable][category])`,
/// perturbed by a uniform draw in `[-jitter, jitter]` and clamped to [0, 1].
/// A variable with no offset table adds nothing; a category missing from a
/// variable's table is an error. The reason names the attribute with the
/// largest absolute offset with probability `|offset| / (1 + |offset|)`.
/// The abstain probability is uniform in `[other_min, other_max]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParametricWeights {
    #[serde(default)]
    pub base: f64,
    #[serde(default)]
    pub state_base: BTreeMap<String, f64>,
    #[serde(default)]
    pub offsets: BTreeMap<String, BTreeMap<String, f64>>,
    #[serde(default)]
    pub jitter: f64,
    #[serde(default)]
    pub other_min: f64,
    #[serde(default)]
    pub other_max: f64,
    #[serde(default)]
    pub seed: u64,
}

impl ParametricWeights {
    /// Logit of the Democratic lean for `profile`.
    pub fn logit(&self, profile: &AgentProfile) -> Result<f64, BackendError> {
        let mut logit = self.base;
        if !self.state_base.is_empty() {
            logit += self
                .state_base
                .get(&profile.state)
                .ok_or_else(|| BackendError::MissingWeight(format!("state {:?}", profile.state)))?;
        }
        for (variable, category) in &profile.attributes {
            // variables without an offset table are neutral
            let Some(by_category) = self.offsets.get(variable) else { continue };
            logit += by_category
                .get(category)
                .ok_or_else(|| BackendError::MissingWeight(format!("{variable}={category:?}")))?;
        }
        Ok(logit)
    }

    fn validate(&self) -> Result<(), BackendError> {
        let ok =
            self.jitter >= 0.0 && 0.0 <= self.other_min && self.other_min <= self.other_max && self.other_max < 1.0;
        if ok {
            Ok(())
        } else {
            Err(BackendError::Config("parametric mock needs jitter >= 0 and 0 <= other_min <= other_max < 1".into()))
        }
    }
}

pub fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn reason_text(profile: &AgentProfile, weights: &ParametricWeights, mention_draw: f64) -> String {
    let mut text = format!("I am a voter in {}", profile.state);
    if !profile.attributes.is_empty() {
        let listing: Vec<String> =
            profile.attributes.iter().map(|(variable, category)| format!("{variable} {category}")).collect();
        text.push_str(" with ");
        text.push_str(&listing.join(", "));
    }
    text.push('.');
    let strongest = profile
        .attributes
        .iter()
        .filter_map(|(variable, category)| {
            let offset = weights.offsets.get(variable)?.get(category)?;
            Some((variable, category, *offset))
        })
        .fold(None::<(&String, &String, f64)>, |best, item| match best {
            Some(b) if b.2.abs() >= item.2.abs() => Some(b),
            _ => Some(item),
        });
    match strongest {
        Some((variable, category, offset)) if mention_draw < offset.abs() / (1.0 + offset.abs()) => {
            text.push_str(&format!(" My {variable} ({category}) weighs most in this prediction."))
        }
        _ => text.push_str(" No single part of my background decides this for me."),
    }
    text
}

/// Synthesizes one response in the response-format layout.
///
/// Identical `(profile, weights, seed)` always give identical text.
pub fn parametric_mock_response(
    profile: &AgentProfile,
    weights: &ParametricWeights,
    scenario: &Scenario,
    seed: u64,
) -> Result<String, BackendError> {
    weights.validate()?;
    let logit = weights.logit(profile)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shake: f64 = rng.random_range(-1.0..=1.0);
    let share: f64 = rng.random();
    let mention: f64 = rng.random();
    let lean = (logistic(logit) + weights.jitter * shake).clamp(0.0, 1.0);
    let p_other = weights.other_min + (weights.other_max - weights.other_min) * share;
    let response = VoteResponse {
        p_dem: (1.0 - p_other) * lean,
        p_rep: (1.0 - p_other) * (1.0 - lean),
        p_other,
        reason: reason_text(profile, weights, mention),
        renormalized: false,
    };
    Ok(response.to_response_text(scenario))
}

#[derive(Debug, Clone)]
pub struct ParametricMock {
    weights: ParametricWeights,
    scenario: Scenario,
    model_id: String,
}

impl ParametricMock {
    pub fn new(weights: ParametricWeights, scenario: Scenario, model_id: &str) -> Self {
        Self { weights, scenario, model_id: model_id.to_string() }
    }

    pub fn model_id(&self) -> &str {
        &self.model_id
    }

    /// Per-query seed: the weights' seed mixed with state, agent and round.
    pub fn query_seed(&self, profile: &AgentProfile, round_index: u32) -> u64 {
        derive_seed(self.weights.seed, &[&profile.state, &profile.agent_id.to_string(), &round_index.to_string()])
    }

    pub fn query(&self, request: &QueryRequest<'_>) -> Result<QueryRecord, BackendError> {
        let started = Instant::now();
        let seed = self.query_seed(request.profile, request.round_index);
        let raw_text = parametric_mock_response(request.profile, &self.weights, &self.scenario, seed)?;
        Ok(QueryRecord {
            prompt_digest: prompt_digest(request.prompt),
            raw_text,
            model_id: self.model_id.clone(),
            latency: started.elapsed().as_secs_f64(),
            attempt: 0,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prompting::parse_response;

    fn scenario() -> Scenario {
        Scenario::two_candidate("2020 presidential election", "Joe Biden", "Donald Trump").unwrap()
    }

    fn profile(id: u64, race: &str) -> AgentProfile {
        AgentProfile {
            agent_id: id,
            state: "Ohio".into(),
            attributes: [("race".to_string(), race.to_string())].into_iter().collect(),
        }
    }

    fn zero_weights() -> ParametricWeights {
        ParametricWeights {
            base: 0.0,
            state_base: BTreeMap::new(),
            offsets: [("race".to_string(), [("A".to_string(), 0.0), ("B".to_string(), 0.0)].into_iter().collect())]
                .into_iter()
                .collect(),
            jitter: 0.0,
            other_min: 0.0,
            other_max: 0.0,
            seed: 0,
        }
    }

    #[test]
    fn zero_offsets_give_even_split() {
        let text = parametric_mock_response(&profile(0, "A"), &zero_weights(), &scenario(), 5).unwrap();
        let r = parse_response(&text, &scenario()).unwrap();
        assert_eq!((r.p_dem, r.p_rep, r.p_other), (0.5, 0.5, 0.0));
        assert!(!r.renormalized);
    }

    #[test]
    fn missing_weight_is_reported() {
        let err = parametric_mock_response(&profile(0, "C"), &zero_weights(), &scenario(), 5).unwrap_err();
        assert!(matches!(err, BackendError::MissingWeight(_)));
        let mut weights = zero_weights();
        weights.state_base.insert("Texas".into(), 0.3);
        let err = parametric_mock_response(&profile(0, "A"), &weights, &scenario(), 5).unwrap_err();
        assert!(matches!(err, BackendError::MissingWeight(_)));
    }

    #[test]
    fn variables_without_offsets_are_neutral() {
        let mut p = profile(0, "A");
        p.attributes.insert("sex".into(), "Male".into());
        assert_eq!(zero_weights().logit(&p).unwrap(), 0.0);
    }

    #[test]
    fn seeds_change_jitter_not_expectation() {
        let mut weights = zero_weights();
        weights.jitter = 0.1;
        weights.other_max = 0.1;
        let p = profile(0, "A");
        let a = parametric_mock_response(&p, &weights, &scenario(), 1).unwrap();
        let b = parametric_mock_response(&p, &weights, &scenario(), 2).unwrap();
        assert_ne!(a, b);
        assert_eq!(a, parametric_mock_response(&p, &weights, &scenario(), 1).unwrap());
        let r = parse_response(&a, &scenario()).unwrap();
        assert!((r.sum() - 1.0).abs() < 1e-9);
        assert!(r.p_other <= 0.1);
    }

    #[test]
    fn reason_mentions_strongest_variable_after_first_sentence() {
        let mut weights = zero_weights();
        weights.offsets.get_mut("race").unwrap().insert("A".into(), -0.4);
        let text = reason_text(&profile(0, "A"), &weights, 0.1);
        let rest = crate::prompting::after_first_sentence(&text);
        assert!(rest.contains("My race (A)"), "{text}");
        // 0.4 / 1.4 < 0.5, so this draw stays silent
        let text = reason_text(&profile(0, "A"), &weights, 0.5);
        assert!(!crate::prompting::after_first_sentence(&text).contains("race"), "{text}");
    }

    #[test]
    fn mention_rate_follows_offset() {
        let mut weights = zero_weights();
        weights.offsets.get_mut("race").unwrap().insert("A".into(), 1.0);
        let hits = (0..4000u64)
            .filter(|&seed| {
                let text = parametric_mock_response(&profile(0, "A"), &weights, &scenario(), seed).unwrap();
                text.contains("My race")
            })
            .count();
        let rate = hits as f64 / 4000.0;
        assert!((rate - 0.5).abs() < 0.03, "{rate}");
    }

    #[test]
    fn scripted_lookup_and_fallback() {
        let mut fixtures = ScriptedFixtures::default();
        fixtures.responses.insert(prompt_digest("hello"), "fixture".into());
        let mock = ScriptedMock::new(fixtures.clone(), "m");
        assert_eq!(mock.query("hello").unwrap().raw_text, "fixture");
        assert_eq!(mock.query("hello").unwrap(), mock.query("hello").unwrap());
        assert!(matches!(mock.query("other"), Err(BackendError::MissingFixture(_))));
        fixtures.default = Some("fallback".into());
        let mock = ScriptedMock::new(fixtures, "m");
        assert_eq!(mock.query("other").unwrap().raw_text, "fallback");
    }
}
