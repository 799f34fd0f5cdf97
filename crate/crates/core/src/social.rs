//! Relationship and scenario generation for subject–observer pairs.

use std::fmt;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::backend::{
    ChatBackend, ChatRequest, Message, RequestKind, RequestMeta, MAX_OUTPUT_GENERATION,
    TEMPERATURE_SIMULATION,
};
use crate::persona::{AgentProfile, BigFiveDim};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum RelationContext {
    Family,
    Friend,
    Workplace,
}

impl RelationContext {
    pub const ALL: [RelationContext; 3] = [
        RelationContext::Family,
        RelationContext::Friend,
        RelationContext::Workplace,
    ];

    /// Word used in the relation prompt ("Generate 5 diverse family relations").
    pub fn prompt_word(self) -> &'static str {
        match self {
            RelationContext::Family => "family",
            RelationContext::Friend => "friend",
            RelationContext::Workplace => "workplace",
        }
    }
}

impl fmt::Display for RelationContext {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            RelationContext::Family => "Family",
            RelationContext::Friend => "Friend",
            RelationContext::Workplace => "Workplace",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for RelationContext {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        RelationContext::ALL
            .into_iter()
            .find(|c| c.prompt_word().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::Config(format!("unknown relation context `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Relationship {
    pub subject_id: String,
    pub observer_id: String,
    pub context: RelationContext,
    /// Full sentence with both names, e.g. "Ethan and Jacob are coworkers."
    pub description: String,
    /// The part after "are", e.g. "coworkers".
    pub relation: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Scenario {
    pub scenario_id: String,
    pub subject_id: String,
    pub observer_id: String,
    /// 1-based position among the pair's scenarios.
    pub index: usize,
    pub description: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub probed_dimension: Option<BigFiveDim>,
}

pub fn relation_prompt(
    subject: &AgentProfile,
    observer: &AgentProfile,
    context: RelationContext,
    candidates: usize,
) -> String {
    format!(
        "The following are the profiles of two persons X and Y and their relationships:\n\
         X: {}\n\
         Y: {}\n\
         \n\
         Generate {candidates} diverse {} relations between X and Y. The generated relations must be in the following format:\n\
         \"X and Y are ...\"",
        subject.card(),
        observer.card(),
        context.prompt_word()
    )
}

pub fn scenario_prompt(
    subject: &AgentProfile,
    observer: &AgentProfile,
    relationship: &Relationship,
    k: usize,
) -> String {
    format!(
        "The following are the profiles of two persons X and Y and their relationships:\n\
         X: {}\n\
         Y: {}\n\
         relationship: X and Y are {}\n\
         \n\
         Generate {k} diverse daily life scenarios in which X and Y interact. The scenarios must follow the rules below:\n\
         1. The scenario should depict a concrete situation where we can observe X's personality.\n\
         2. DO NOT make presumptions about X's personality in the scenario.\n\
         3. Generate a short text description of the scenario. For each scenario, also provide which of the Big 5 dimensions it assesses.",
        subject.card(),
        observer.card(),
        relationship.relation
    )
}

fn relation_line_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^(.+?) and (.+?) are (.+)$").expect("valid regex"))
}

fn strip_list_marker(line: &str) -> &str {
    static RE: OnceLock<Regex> = OnceLock::new();
    let re = RE.get_or_init(|| {
        Regex::new(r"^\s*(?:[-*•]+|\d+[.)]|#+)?\s*").expect("valid regex")
    });
    let rest = &line[re.find(line).map_or(0, |m| m.end())..];
    rest.trim_matches(|c: char| c == '"' || c == '“' || c == '”' || c == '*' || c.is_whitespace())
}

/// Parses the first "X and Y are …" line (with letters or names) from a
/// relation-generation reply.
pub fn parse_relationship(
    raw: &str,
    subject: &AgentProfile,
    observer: &AgentProfile,
    context: RelationContext,
) -> Result<Relationship> {
    let is_party = |s: &str, letter: &str, name: &str| s == letter || s.eq_ignore_ascii_case(name);
    for line in raw.lines() {
        let line = strip_list_marker(line);
        let Some(caps) = relation_line_re().captures(line) else {
            continue;
        };
        let (a, b) = (caps[1].trim(), caps[2].trim());
        let names_of = |s: &str| {
            if is_party(s, "X", &subject.name) {
                Some(subject.name.as_str())
            } else if is_party(s, "Y", &observer.name) {
                Some(observer.name.as_str())
            } else {
                None
            }
        };
        let (Some(first), Some(second)) = (names_of(a), names_of(b)) else {
            continue;
        };
        if first == second && subject.name != observer.name {
            continue;
        }
        let relation = caps[3]
            .trim()
            .trim_end_matches(['"', '”', '.', ' '])
            .trim()
            .to_string();
        if relation.is_empty() || relation.chars().all(|c| c == '.' || c == '…') {
            continue;
        }
        return Ok(Relationship {
            subject_id: subject.agent_id.clone(),
            observer_id: observer.agent_id.clone(),
            context,
            description: format!("{first} and {second} are {relation}."),
            relation,
        });
    }
    Err(Error::parse("no \"X and Y are ...\" line in relation output", raw))
}

pub fn generate_relationship(
    subject: &AgentProfile,
    observer: &AgentProfile,
    context: RelationContext,
    candidates: usize,
    backend: &dyn ChatBackend,
) -> Result<Relationship> {
    subject.validate()?;
    observer.validate()?;
    let request = ChatRequest::new(
        "",
        vec![Message::counterpart(relation_prompt(
            subject, observer, context, candidates,
        ))],
    )
    .temperature(TEMPERATURE_SIMULATION)
    .max_output(MAX_OUTPUT_GENERATION)
    .meta(RequestMeta {
        kind: RequestKind::Relationship,
        entity: format!("{}/{}", subject.agent_id, observer.agent_id),
        context: Some(context),
        speaker: Some(subject.name.clone()),
        partner: Some(observer.name.clone()),
        count: candidates,
        ..Default::default()
    });
    let raw = backend.complete(&request)?;
    parse_relationship(&raw, subject, observer, context)
}

/// A parsed scenario block before ids are attached.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScenarioBlock {
    pub description: String,
    pub probed_dimension: Option<BigFiveDim>,
}

fn block_start_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"^\s*[*#]*\s*(?:(?i:scenario)\s+\d+\s*[:.)\-]|\d+[.)])\s*(?:\*\*)?\s*(.*)$")
            .expect("valid regex")
    })
}

fn tag_line_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(
            r"(?i)^\s*[-*•]*\s*\**\s*(?:big\s*(?:5|five)\s*)?(?:personality\s*)?(?:dimension|trait)s?(?:\s*assessed)?\s*\**\s*[:\-–]",
        )
        .expect("valid regex")
    })
}

fn inline_tag_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\s*\(([^()]{1,60})\)\s*$").expect("valid regex"))
}

/// Splits generator output into numbered scenario blocks.
///
/// Accepts `1.`, `1)` and `Scenario 1:` markers. A line labelled
/// "dimension"/"trait", or a trailing parenthetical naming a trait, becomes
/// the block's probed dimension; other lines form the description.
pub fn parse_scenarios(raw: &str) -> Vec<ScenarioBlock> {
    let mut blocks: Vec<Vec<&str>> = Vec::new();
    for line in raw.lines() {
        if let Some(caps) = block_start_re().captures(line) {
            blocks.push(vec![caps.get(1).map_or("", |m| m.as_str())]);
        } else if let Some(current) = blocks.last_mut() {
            current.push(line);
        }
    }
    blocks
        .into_iter()
        .filter_map(|lines| {
            let mut dimension = None;
            let mut desc: Vec<String> = Vec::new();
            for line in lines {
                let trimmed = line.trim();
                if trimmed.is_empty() {
                    continue;
                }
                if tag_line_re().is_match(trimmed) {
                    dimension = dimension.or_else(|| BigFiveDim::find_in(trimmed));
                    continue;
                }
                desc.push(trimmed.trim_matches('*').trim().to_string());
            }
            let mut description = desc.join(" ");
            if dimension.is_none() {
                if let Some(caps) = inline_tag_re().captures(&description) {
                    if let Some(dim) = BigFiveDim::find_in(&caps[1]) {
                        dimension = Some(dim);
                        let cut = caps.get(0).expect("whole match").start();
                        description.truncate(cut);
                    }
                }
            }
            let description = description.trim().to_string();
            (!description.is_empty()).then_some(ScenarioBlock {
                description,
                probed_dimension: dimension,
            })
        })
        .collect()
}

/// Canonical text form of scenario blocks; [`parse_scenarios`] reads it back.
pub fn serialize_scenarios(blocks: &[ScenarioBlock]) -> String {
    let mut out = String::new();
    for (i, b) in blocks.iter().enumerate() {
        out.push_str(&format!("{}. {}\n", i + 1, b.description));
        if let Some(dim) = b.probed_dimension {
            out.push_str(&format!("Big 5 dimension: {}\n", dim.name()));
        }
        out.push('\n');
    }
    out
}

pub fn generate_scenarios(
    subject: &AgentProfile,
    observer: &AgentProfile,
    relationship: &Relationship,
    k: usize,
    backend: &dyn ChatBackend,
) -> Result<Vec<Scenario>> {
    if k == 0 {
        return Err(Error::Usage("k must be at least 1".into()));
    }
    let request = ChatRequest::new(
        "",
        vec![Message::counterpart(scenario_prompt(
            subject,
            observer,
            relationship,
            k,
        ))],
    )
    .temperature(TEMPERATURE_SIMULATION)
    .max_output(MAX_OUTPUT_GENERATION)
    .meta(RequestMeta {
        kind: RequestKind::Scenarios,
        entity: format!("{}/{}", subject.agent_id, observer.agent_id),
        context: Some(relationship.context),
        speaker: Some(subject.name.clone()),
        partner: Some(observer.name.clone()),
        count: k,
        ..Default::default()
    });
    let raw = backend.complete(&request)?;
    let blocks = parse_scenarios(&raw);
    if blocks.len() < k {
        return Err(Error::PartialParse {
            expected: k,
            got: blocks.len(),
            raw,
        });
    }
    Ok(blocks
        .into_iter()
        .take(k)
        .enumerate()
        .map(|(i, b)| Scenario {
            scenario_id: format!("{}-c{}", observer.agent_id, i + 1),
            subject_id: subject.agent_id.clone(),
            observer_id: observer.agent_id.clone(),
            index: i + 1,
            description: b.description,
            probed_dimension: b.probed_dimension,
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{BackendError, MockBackend, MockSpec};
    use crate::persona::{Gender, LatentPersonality, Role};
    use proptest::prelude::*;

    struct Fixed(&'static str);

    impl ChatBackend for Fixed {
        fn complete(&self, _: &ChatRequest) -> std::result::Result<String, BackendError> {
            Ok(self.0.to_string())
        }
        fn model_name(&self) -> &str {
            "fixed"
        }
    }

    fn ethan() -> AgentProfile {
        AgentProfile {
            agent_id: "s0001".into(),
            name: "Ethan".into(),
            age: 29,
            gender: Gender::Male,
            role: Role::Subject,
            latent: Some(LatentPersonality::new([1, 4, 2, 1, 2]).unwrap()),
        }
    }

    fn jacob() -> AgentProfile {
        AgentProfile {
            agent_id: "s0001-o11".into(),
            name: "Jacob".into(),
            age: 52,
            gender: Gender::Male,
            role: Role::Observer,
            latent: None,
        }
    }

    fn mentorship() -> Relationship {
        Relationship {
            subject_id: "s0001".into(),
            observer_id: "s0001-o11".into(),
            context: RelationContext::Workplace,
            description: "Ethan and Jacob are mentee and mentor at the same firm.".into(),
            relation: "mentee and mentor at the same firm".into(),
        }
    }

    #[test]
    fn relation_prompt_text() {
        let p = relation_prompt(&ethan(), &jacob(), RelationContext::Workplace, 5);
        assert_eq!(
            p,
            "The following are the profiles of two persons X and Y and their relationships:\n\
             X: {name: Ethan, age: 29, gender: male}\n\
             Y: {name: Jacob, age: 52, gender: male}\n\n\
             Generate 5 diverse workplace relations between X and Y. The generated relations must be in the following format:\n\
             \"X and Y are ...\""
        );
    }

    #[test]
    fn relation_pass_through() {
        let r = generate_relationship(
            &ethan(),
            &jacob(),
            RelationContext::Friend,
            3,
            &Fixed("X and Y are neighbors"),
        )
        .unwrap();
        assert_eq!(r.description, "Ethan and Jacob are neighbors.");
        assert_eq!(r.relation, "neighbors");
        assert_eq!(r.context, RelationContext::Friend);
    }

    #[test]
    fn relation_with_names_and_list_markers() {
        let raw = "Sure! Here are the relations:\n1. \"Ethan and Jacob are mentee and mentor at a law firm.\"\n2. \"X and Y are rivals\"";
        let r = parse_relationship(raw, &ethan(), &jacob(), RelationContext::Workplace).unwrap();
        assert_eq!(r.relation, "mentee and mentor at a law firm");
        assert!(r.description.contains("Ethan") && r.description.contains("Jacob"));
    }

    #[test]
    fn relation_without_are_clause_is_parse_error() {
        let err = generate_relationship(
            &ethan(),
            &jacob(),
            RelationContext::Family,
            1,
            &Fixed("They know each other from somewhere."),
        )
        .unwrap_err();
        match err {
            Error::Parse { raw, .. } => assert_eq!(raw, "They know each other from somewhere."),
            other => panic!("{other:?}"),
        }
        // a header line naming other parties does not count
        let raw = "The relations between X and Y are as follows:";
        assert!(parse_relationship(raw, &ethan(), &jacob(), RelationContext::Family).is_err());
    }

    #[test]
    fn scenario_prompt_carries_rules() {
        let p = scenario_prompt(&ethan(), &jacob(), &mentorship(), 5);
        assert!(p.contains("Generate 5 diverse daily life scenarios in which X and Y interact."));
        assert!(p.contains("2. DO NOT make presumptions about X's personality in the scenario."));
        assert!(p.contains("relationship: X and Y are mentee and mentor at the same firm\n"));
    }

    // Hand-written fixture: three marker styles, tag lines in several forms.
    const FIXTURE: &str = "Here are five scenarios:\n\
        1. Jacob is faced with a difficult decision regarding project resources and seeks Ethan's opinion.\n\
        Big 5 dimension: Agreeableness\n\
        \n\
        2) Ethan is asked to present at the team meeting on short notice.\n\
        - Dimension: Extraversion\n\
        \n\
        Scenario 3: Jacob proposes a new, untested tool for the project.\n\
        Trait assessed: OPENNESS\n\
        **Scenario 4:** Ethan has to meet a deadline while Jacob is away.\n\
        **Big Five dimension:** conscientiousness\n\
        5. A client criticises Ethan's work in front of Jacob. (Neuroticism)\n";

    #[test]
    fn fixture_blocks_all_tagged() {
        let blocks = parse_scenarios(FIXTURE);
        let dims: Vec<Option<BigFiveDim>> = blocks.iter().map(|b| b.probed_dimension).collect();
        assert_eq!(
            dims,
            vec![
                Some(BigFiveDim::Agreeableness),
                Some(BigFiveDim::Extraversion),
                Some(BigFiveDim::Openness),
                Some(BigFiveDim::Conscientiousness),
                Some(BigFiveDim::Neuroticism),
            ]
        );
        assert_eq!(
            blocks[0].description,
            "Jacob is faced with a difficult decision regarding project resources and seeks Ethan's opinion."
        );
        assert_eq!(blocks[4].description, "A client criticises Ethan's work in front of Jacob.");
        assert_eq!(blocks[3].description, "Ethan has to meet a deadline while Jacob is away.");
    }

    #[test]
    fn generate_takes_first_k_and_sets_ids() {
        let s = generate_scenarios(&ethan(), &jacob(), &mentorship(), 3, &Fixed(FIXTURE)).unwrap();
        assert_eq!(s.len(), 3);
        assert_eq!(s[2].index, 3);
        assert_eq!(s[0].scenario_id, "s0001-o11-c1");
        assert_eq!(s[1].probed_dimension, Some(BigFiveDim::Extraversion));
    }

    #[test]
    fn single_block() {
        let s = generate_scenarios(
            &ethan(),
            &jacob(),
            &mentorship(),
            1,
            &Fixed("1. They cook dinner together."),
        )
        .unwrap();
        assert_eq!(s.len(), 1);
        assert_eq!(s[0].probed_dimension, None);
    }

    #[test]
    fn too_few_blocks_is_partial_parse() {
        let err = generate_scenarios(&ethan(), &jacob(), &mentorship(), 6, &Fixed(FIXTURE)).unwrap_err();
        assert!(matches!(err, Error::PartialParse { expected: 6, got: 5, .. }));
    }

    #[test]
    fn mock_generation_parses() {
        let mock = MockBackend::new(MockSpec::default());
        for ctx in RelationContext::ALL {
            let r = generate_relationship(&ethan(), &jacob(), ctx, 5, &mock).unwrap();
            let s = generate_scenarios(&ethan(), &jacob(), &r, 5, &mock).unwrap();
            assert!(s.iter().all(|x| x.probed_dimension.is_some()));
        }
    }

    proptest! {
        #[test]
        fn scenario_round_trip(
            descs in proptest::collection::vec("[A-Z][a-z]{1,8}( [a-z]{1,8}){0,10}\\.", 1..8),
            tags in proptest::collection::vec(proptest::option::of(0usize..5), 8),
        ) {
            let blocks: Vec<ScenarioBlock> = descs
                .iter()
                .zip(&tags)
                .map(|(d, t)| ScenarioBlock {
                    description: d.clone(),
                    probed_dimension: t.map(|i| BigFiveDim::ALL[i]),
                })
                .collect();
            let parsed = parse_scenarios(&serialize_scenarios(&blocks));
            prop_assert_eq!(&parsed, &blocks);
            let again = parse_scenarios(&serialize_scenarios(&parsed));
            prop_assert_eq!(again, parsed);
        }
    }
}
