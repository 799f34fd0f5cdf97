//! Questionnaire administration and scoring.
//!
//! Answers are always stored in canonical orientation (5 = very accurate),
//! whatever scale wording the prompt used, so scoring never needs to know
//! the prompt variant.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::backend::{
    ChatBackend, ChatRequest, ItemRef, Message, RequestKind, RequestMeta, MAX_OUTPUT_BATCH,
    MAX_OUTPUT_ITEM, TEMPERATURE_QUESTIONNAIRE,
};
use crate::dialogue::{render_transcript, DialogueTranscript};
use crate::persona::{AgentProfile, BigFiveDim, InstructionVariant, PerDim, Role};
use crate::social::RelationContext;
use crate::{Error, Result};

const IPIP50_CSV: &str = include_str!("../data/ipip50.csv");

pub const RETRY_PROMPT: &str = "Please answer using EXACTLY one of the following: 1, 2, 3, 4, or 5";
pub const DEFAULT_MAX_RETRIES: u32 = 3;
/// A dimension with more than this fraction of items missing is unscoreable.
pub const DEFAULT_MAX_MISSING_FRACTION: f64 = 0.2;
/// Substring that identifies the reversed Likert wording.
pub const REVERSED_SCALE_MARKER: &str = "1 = \"very accurate\"";

const SCALE: &str = "(where 1 = \"very inaccurate\", 2 = \"moderately inaccurate\", 3 = \"neither accurate nor inaccurate\", 4 = \"moderately accurate\", and 5 = \"very accurate\")";
const SCALE_REVERSED: &str = "(where 1 = \"very accurate\", 2 = \"moderately accurate\", 3 = \"neither accurate nor inaccurate\", 4 = \"moderately inaccurate\", and 5 = \"very inaccurate\")";
const EXACT: &str = "Please answer using EXACTLY one of the following:  1, 2, 3, 4, or 5.";
const BATCH_FORMAT: &str = "Answer with one line per statement in the format \"<number>. <rating>\", using EXACTLY one of the following for each rating: 1, 2, 3, 4, or 5.";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Keyed {
    #[serde(rename = "+")]
    Positive,
    #[serde(rename = "-")]
    Negative,
}

impl Keyed {
    /// Maps an answer to its trait-aligned value; negative items reverse as `6 - a`.
    pub fn effective(self, answer: u8) -> u8 {
        match self {
            Keyed::Positive => answer,
            Keyed::Negative => 6 - answer,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuestionnaireItem {
    pub item_id: u32,
    pub text: String,
    pub dimension: BigFiveDim,
    pub keyed: Keyed,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Questionnaire {
    items: Vec<QuestionnaireItem>,
    refs: Vec<ItemRef>,
}

#[derive(Debug, Deserialize)]
struct ItemRow {
    item_id: u32,
    text: String,
    dimension: String,
    key: String,
}

impl Questionnaire {
    pub fn new(mut items: Vec<QuestionnaireItem>) -> Result<Self> {
        items.sort_by_key(|i| i.item_id);
        for (pos, item) in items.iter().enumerate() {
            if item.item_id as usize != pos + 1 {
                return Err(Error::Config(format!(
                    "questionnaire item ids must be contiguous from 1; found {} at position {}",
                    item.item_id,
                    pos + 1
                )));
            }
            if item.text.trim().is_empty() {
                return Err(Error::Config(format!("item {} has no text", item.item_id)));
            }
        }
        for dim in BigFiveDim::ALL {
            if !items.iter().any(|i| i.dimension == dim) {
                return Err(Error::Config(format!("questionnaire has no {dim} items")));
            }
        }
        let mut seen = PerDim([0usize; 5]);
        let refs = items
            .iter()
            .map(|item| {
                let ordinal = seen[item.dimension];
                seen[item.dimension] += 1;
                ItemRef {
                    item_id: item.item_id,
                    dimension: item.dimension,
                    keyed: item.keyed,
                    ordinal,
                    dim_count: 0,
                }
            })
            .collect::<Vec<_>>()
            .into_iter()
            .map(|mut r| {
                r.dim_count = seen[r.dimension];
                r
            })
            .collect();
        Ok(Questionnaire { items, refs })
    }

    /// The 50-item IPIP Big-Five factor markers with their scoring key.
    pub fn ipip50() -> Self {
        Self::parse(IPIP50_CSV.as_bytes(), Path::new("<builtin ipip50.csv>"))
            .expect("builtin ipip50.csv is valid")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&bytes[..], path)
    }

    fn parse(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut reader = csv::Reader::from_reader(bytes);
        let mut items = Vec::new();
        for row in reader.deserialize::<ItemRow>() {
            let row = row.map_err(|source| Error::Csv {
                path: path.into(),
                source,
            })?;
            let dimension = BigFiveDim::from_code(&row.dimension).ok_or_else(|| {
                Error::Config(format!("{}: unknown dimension `{}`", path.display(), row.dimension))
            })?;
            let keyed = match row.key.trim() {
                "+" => Keyed::Positive,
                "-" | "−" => Keyed::Negative,
                other => {
                    return Err(Error::Config(format!(
                        "{}: item {} has key `{other}`, expected + or -",
                        path.display(),
                        row.item_id
                    )))
                }
            };
            items.push(QuestionnaireItem {
                item_id: row.item_id,
                text: row.text.trim().trim_end_matches('.').to_string(),
                dimension,
                keyed,
            });
        }
        Self::new(items)
    }

    pub fn items(&self) -> &[QuestionnaireItem] {
        &self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn item(&self, item_id: u32) -> Option<&QuestionnaireItem> {
        self.items.get((item_id as usize).checked_sub(1)?)
    }

    fn item_ref(&self, item_id: u32) -> ItemRef {
        self.refs[item_id as usize - 1]
    }

    /// (positive, negative) item counts for a dimension.
    pub fn key_counts(&self, dim: BigFiveDim) -> (usize, usize) {
        self.items
            .iter()
            .filter(|i| i.dimension == dim)
            .fold((0, 0), |(p, n), i| match i.keyed {
                Keyed::Positive => (p + 1, n),
                Keyed::Negative => (p, n + 1),
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PromptVariant {
    #[default]
    Default,
    Neutral,
    Reversed,
    Batch,
}

impl PromptVariant {
    pub fn instruction(self) -> InstructionVariant {
        match self {
            PromptVariant::Neutral => InstructionVariant::Neutral,
            _ => InstructionVariant::Default,
        }
    }

    pub fn reversed(self) -> bool {
        self == PromptVariant::Reversed
    }

    pub fn batch(self) -> bool {
        self == PromptVariant::Batch
    }
}

impl std::str::FromStr for PromptVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "default" => Ok(PromptVariant::Default),
            "neutral" => Ok(PromptVariant::Neutral),
            "reversed" => Ok(PromptVariant::Reversed),
            "batch" => Ok(PromptVariant::Batch),
            other => Err(Error::Config(format!("unknown prompt variant `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", content = "id", rename_all = "lowercase")]
pub enum Rater {
    #[serde(rename = "self")]
    SelfReport,
    Observer(String),
    Human(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnswerSheet {
    pub rater: Rater,
    pub subject_id: String,
    /// Canonical answers in `1..=5`; `None` is MISSING.
    pub answers: BTreeMap<u32, Option<u8>>,
    pub variant: PromptVariant,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub context: Option<RelationContext>,
    /// Re-prompts issued because a reply had no usable digit.
    #[serde(default)]
    pub retries: u32,
    /// Oldest dialogues dropped to fit the prompt budget.
    #[serde(default)]
    pub truncated_scenarios: usize,
}

impl AnswerSheet {
    pub fn missing(&self) -> usize {
        self.answers.values().filter(|a| a.is_none()).count()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatingVector {
    pub subject_id: String,
    pub rater: Rater,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub context: Option<RelationContext>,
    pub scores: PerDim<f64>,
}

/// First standalone digit 1–5: not part of a longer number or a decimal.
pub fn parse_answer(reply: &str) -> Option<u8> {
    standalone_digits(reply).next()
}

fn standalone_digits(s: &str) -> impl Iterator<Item = u8> + '_ {
    let b = s.as_bytes();
    let is_digit = move |i: usize| b.get(i).is_some_and(u8::is_ascii_digit);
    (0..b.len()).filter_map(move |i| {
        let c = b[i];
        if !(b'1'..=b'5').contains(&c) {
            return None;
        }
        let before_ok = i == 0 || !(is_digit(i - 1) || (b[i - 1] == b'.' && i >= 2 && is_digit(i - 2)));
        let after_ok = !(is_digit(i + 1) || (b.get(i + 1) == Some(&b'.') && is_digit(i + 2)));
        (before_ok && after_ok).then_some(c - b'0')
    })
}

/// Parses `<number>. <rating>` lines; the rating is the last standalone
/// digit 1–5 after the number. The first line for a number wins.
pub fn parse_batch(reply: &str) -> BTreeMap<u32, u8> {
    static RE: OnceLock<Regex> = OnceLock::new();
    let re = RE.get_or_init(|| {
        Regex::new(r"^\s*[*#-]*\s*(?i:item\s*)?(\d+)\s*[.:)\-]\s*(.*)$").expect("valid regex")
    });
    let mut out = BTreeMap::new();
    for line in reply.lines() {
        let Some(caps) = re.captures(line) else {
            continue;
        };
        let Ok(number) = caps[1].parse::<u32>() else {
            continue;
        };
        if let Some(a) = standalone_digits(&caps[2]).last() {
            out.entry(number).or_insert(a);
        }
    }
    out
}

fn scale(reversed: bool) -> &'static str {
    if reversed {
        SCALE_REVERSED
    } else {
        SCALE
    }
}

pub fn self_item_prompt(subject_instruction: &str, statement: &str, reversed: bool) -> String {
    format!(
        "{subject_instruction}\n\nEvaluate the following statement:\n{statement}.\nRate how accurately this describes you on a scale from 1 to 5 {}. {EXACT}",
        scale(reversed)
    )
}

pub fn observer_item_prompt(
    observer_instruction: &str,
    subject_name: &str,
    dialogues: &str,
    statement: &str,
    reversed: bool,
) -> String {
    format!(
        "{observer_instruction}\nThe following are some dialogues between you and {subject_name}:\n{dialogues}\n\nEvaluate the following statement:\n{statement}.\n\nRate how accurately this describes {subject_name} on a scale from 1 to 5 {}. {EXACT}",
        scale(reversed)
    )
}

fn numbered_statements(q: &Questionnaire) -> String {
    q.items()
        .iter()
        .map(|i| format!("{}. {}.", i.item_id, i.text))
        .collect::<Vec<_>>()
        .join("\n")
}

pub fn self_batch_prompt(subject_instruction: &str, q: &Questionnaire, reversed: bool) -> String {
    format!(
        "{subject_instruction}\n\nEvaluate the following statements:\n{}\n\nRate how accurately each statement describes you on a scale from 1 to 5 {}. {BATCH_FORMAT}",
        numbered_statements(q),
        scale(reversed)
    )
}

pub fn observer_batch_prompt(
    observer_instruction: &str,
    subject_name: &str,
    dialogues: &str,
    q: &Questionnaire,
    reversed: bool,
) -> String {
    format!(
        "{observer_instruction}\nThe following are some dialogues between you and {subject_name}:\n{dialogues}\n\nEvaluate the following statements:\n{}\n\nRate how accurately each statement describes {subject_name} on a scale from 1 to 5 {}. {BATCH_FORMAT}",
        numbered_statements(q),
        scale(reversed)
    )
}

/// Everything needed to administer one sheet.
struct Administration<'a> {
    questionnaire: &'a Questionnaire,
    backend: &'a dyn ChatBackend,
    variant: PromptVariant,
    max_retries: u32,
    meta: RequestMeta,
}

impl Administration<'_> {
    fn canonical(&self, parsed: u8) -> u8 {
        if self.variant.reversed() {
            6 - parsed
        } else {
            parsed
        }
    }

    fn request(&self, prompt: String, kind: RequestKind, items: Vec<ItemRef>) -> ChatRequest {
        let max_output = match kind {
            RequestKind::QuestionnaireBatch => MAX_OUTPUT_BATCH,
            _ => MAX_OUTPUT_ITEM,
        };
        ChatRequest::new("", vec![Message::counterpart(prompt)])
            .temperature(TEMPERATURE_QUESTIONNAIRE)
            .max_output(max_output)
            .meta(RequestMeta {
                kind,
                items,
                ..self.meta.clone()
            })
    }

    fn per_item(&self, prompt_for: impl Fn(&str) -> String) -> Result<(BTreeMap<u32, Option<u8>>, u32)> {
        let mut answers = BTreeMap::new();
        let mut retries = 0;
        for item in self.questionnaire.items() {
            let mut request = self.request(
                prompt_for(&item.text),
                RequestKind::QuestionnaireItem,
                vec![self.questionnaire.item_ref(item.item_id)],
            );
            let mut answer = None;
            for attempt in 0..=self.max_retries {
                let reply = self.backend.complete(&request)?;
                if let Some(a) = parse_answer(&reply) {
                    answer = Some(self.canonical(a));
                    break;
                }
                if attempt < self.max_retries {
                    retries += 1;
                    request.messages.push(Message::agent(reply));
                    request.messages.push(Message::counterpart(RETRY_PROMPT));
                }
            }
            answers.insert(item.item_id, answer);
        }
        Ok((answers, retries))
    }

    fn batch(&self, prompt: String) -> Result<(BTreeMap<u32, Option<u8>>, u32)> {
        let q = self.questionnaire;
        let refs = q.items().iter().map(|i| q.item_ref(i.item_id)).collect();
        let mut request = self.request(prompt, RequestKind::QuestionnaireBatch, refs);
        let mut answers: BTreeMap<u32, Option<u8>> =
            q.items().iter().map(|i| (i.item_id, None)).collect();
        let mut retries = 0;
        for attempt in 0..=self.max_retries {
            let reply = self.backend.complete(&request)?;
            for (number, a) in parse_batch(&reply) {
                if let Some(slot @ None) = answers.get_mut(&number) {
                    *slot = Some(self.canonical(a));
                }
            }
            let missing: Vec<String> = answers
                .iter()
                .filter(|(_, a)| a.is_none())
                .map(|(id, _)| id.to_string())
                .collect();
            if missing.is_empty() || attempt == self.max_retries {
                break;
            }
            retries += 1;
            request.messages.push(Message::agent(reply));
            request.messages.push(Message::counterpart(format!(
                "{RETRY_PROMPT} for each of these statements: {}. Give one line per statement in the format \"<number>. <rating>\".",
                missing.join(", ")
            )));
        }
        Ok((answers, retries))
    }
}

pub fn administer_self(
    subject: &AgentProfile,
    subject_instruction: &str,
    questionnaire: &Questionnaire,
    backend: &dyn ChatBackend,
    variant: PromptVariant,
    max_retries: u32,
) -> Result<AnswerSheet> {
    if subject.role != Role::Subject || subject.latent.is_none() {
        return Err(Error::Usage(format!(
            "{} has no personality instruction to self-report from",
            subject.agent_id
        )));
    }
    let admin = Administration {
        questionnaire,
        backend,
        variant,
        max_retries,
        meta: RequestMeta {
            entity: subject.agent_id.clone(),
            persona: subject.latent,
            ..Default::default()
        },
    };
    let reversed = variant.reversed();
    let (answers, retries) = if variant.batch() {
        admin.batch(self_batch_prompt(subject_instruction, questionnaire, false))?
    } else {
        admin.per_item(|s| self_item_prompt(subject_instruction, s, reversed))?
    };
    Ok(AnswerSheet {
        rater: Rater::SelfReport,
        subject_id: subject.agent_id.clone(),
        answers,
        variant,
        context: None,
        retries,
        truncated_scenarios: 0,
    })
}

/// Renders dialogues with `--- Scenario i ---` separators, in scenario order.
pub fn render_dialogues(
    transcripts: &[&DialogueTranscript],
    subject_name: &str,
    observer_name: &str,
) -> String {
    transcripts
        .iter()
        .enumerate()
        .map(|(i, t)| {
            format!(
                "--- Scenario {} ---\n{}",
                i + 1,
                render_transcript(t, subject_name, observer_name)
            )
        })
        .collect::<Vec<_>>()
        .join("\n")
}

pub struct ObserverAssessment<'a> {
    pub observer: &'a AgentProfile,
    pub observer_instruction: &'a str,
    pub subject: &'a AgentProfile,
    pub context: Option<RelationContext>,
    pub transcripts: &'a [DialogueTranscript],
    /// Character budget for one prompt; oldest dialogues are dropped first.
    pub max_prompt_chars: usize,
}

pub fn administer_observer(
    a: &ObserverAssessment<'_>,
    questionnaire: &Questionnaire,
    backend: &dyn ChatBackend,
    variant: PromptVariant,
    max_retries: u32,
) -> Result<AnswerSheet> {
    if a.transcripts.is_empty() {
        return Err(Error::Usage(format!(
            "{} has no dialogues with {} to rate from",
            a.observer.agent_id, a.subject.agent_id
        )));
    }
    if let Some(t) = a
        .transcripts
        .iter()
        .find(|t| t.observer_id != a.observer.agent_id || t.subject_id != a.subject.agent_id)
    {
        return Err(Error::Usage(format!(
            "transcript {} does not belong to pair ({}, {})",
            t.scenario_id, a.subject.agent_id, a.observer.agent_id
        )));
    }
    let mut ordered: Vec<&DialogueTranscript> = a.transcripts.iter().collect();
    ordered.sort_by_key(|t| t.scenario_index);

    let reversed = variant.reversed();
    let longest = questionnaire
        .items()
        .iter()
        .map(|i| i.text.as_str())
        .max_by_key(|s| s.len())
        .unwrap_or("");
    let build = |dialogues: &str| {
        if variant.batch() {
            observer_batch_prompt(a.observer_instruction, &a.subject.name, dialogues, questionnaire, reversed)
        } else {
            observer_item_prompt(a.observer_instruction, &a.subject.name, dialogues, longest, reversed)
        }
    };
    let mut truncated = 0;
    let mut dialogues = render_dialogues(&ordered, &a.subject.name, &a.observer.name);
    while ordered.len() > 1 && build(&dialogues).chars().count() > a.max_prompt_chars {
        ordered.remove(0);
        truncated += 1;
        dialogues = render_dialogues(&ordered, &a.subject.name, &a.observer.name);
    }

    let admin = Administration {
        questionnaire,
        backend,
        variant,
        max_retries,
        meta: RequestMeta {
            entity: a.observer.agent_id.clone(),
            context: a.context,
            ..Default::default()
        },
    };
    let (answers, retries) = if variant.batch() {
        admin.batch(build(&dialogues))?
    } else {
        admin.per_item(|s| {
            observer_item_prompt(a.observer_instruction, &a.subject.name, &dialogues, s, reversed)
        })?
    };
    Ok(AnswerSheet {
        rater: Rater::Observer(a.observer.agent_id.clone()),
        subject_id: a.subject.agent_id.clone(),
        answers,
        variant,
        context: a.context,
        retries,
        truncated_scenarios: truncated,
    })
}

/// Keyed mean per dimension over the answered items.
pub fn score(
    sheet: &AnswerSheet,
    questionnaire: &Questionnaire,
    max_missing_fraction: f64,
) -> Result<RatingVector> {
    let mut sums = PerDim([0.0f64; 5]);
    let mut present = PerDim([0usize; 5]);
    let mut total = PerDim([0usize; 5]);
    for item in questionnaire.items() {
        total[item.dimension] += 1;
        match sheet.answers.get(&item.item_id).copied().flatten() {
            Some(a) if (1..=5).contains(&a) => {
                sums[item.dimension] += f64::from(item.keyed.effective(a));
                present[item.dimension] += 1;
            }
            Some(a) => {
                return Err(Error::Usage(format!(
                    "{}: item {} has answer {a} outside 1..=5",
                    sheet.subject_id, item.item_id
                )))
            }
            None => {}
        }
    }
    for dim in BigFiveDim::ALL {
        let missing = total[dim] - present[dim];
        if present[dim] == 0 || missing as f64 > max_missing_fraction * total[dim] as f64 {
            return Err(Error::Unscoreable {
                subject_id: sheet.subject_id.clone(),
                dimension: dim,
            });
        }
    }
    Ok(RatingVector {
        subject_id: sheet.subject_id.clone(),
        rater: sheet.rater.clone(),
        context: sheet.context,
        scores: PerDim::from_fn(|d| sums[d] / present[d] as f64),
    })
}

#[derive(Debug, Deserialize)]
struct AnswerRow {
    item_id: u32,
    answer: Option<String>,
}

/// Reads a human answer file (`item_id,answer`; blank answer = MISSING).
pub fn load_answer_csv(
    path: &Path,
    rater_id: &str,
    subject_id: &str,
    questionnaire: &Questionnaire,
) -> Result<AnswerSheet> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::Reader::from_reader(&bytes[..]);
    let mut answers: BTreeMap<u32, Option<u8>> =
        questionnaire.items().iter().map(|i| (i.item_id, None)).collect();
    let mut seen = HashSet::new();
    for row in reader.deserialize::<AnswerRow>() {
        let row = row.map_err(|source| Error::Csv {
            path: path.into(),
            source,
        })?;
        if !answers.contains_key(&row.item_id) || !seen.insert(row.item_id) {
            return Err(Error::Config(format!(
                "{}: unknown or repeated item {}",
                path.display(),
                row.item_id
            )));
        }
        let value = match row.answer.as_deref().map(str::trim) {
            None | Some("") => None,
            Some(s) => match s.parse::<u8>() {
                Ok(a) if (1..=5).contains(&a) => Some(a),
                _ => {
                    return Err(Error::Config(format!(
                        "{}: item {} answer `{s}` is not 1-5",
                        path.display(),
                        row.item_id
                    )))
                }
            },
        };
        answers.insert(row.item_id, value);
    }
    Ok(AnswerSheet {
        rater: Rater::Human(rater_id.to_string()),
        subject_id: subject_id.to_string(),
        answers,
        variant: PromptVariant::Default,
        context: None,
        retries: 0,
        truncated_scenarios: 0,
    })
}
