//! Deterministic offline backend.
//!
//! Replies are a pure function of the mock seed and the request. The mock
//! sees a latent personality only when a request is made on the subject's
//! behalf. Subject utterances carry a cue tag such as
//! `<<OPE=4 CON=2 EXT=5 AGR=1 NEU=3>>`; an observer rater reads the cue tags
//! out of the dialogues in its prompt, so what observers know about a
//! subject flows through the transcripts.
//!
//! A rater maps a level `L` to a target score `1 + 0.8 (L - 1)`, adds seeded
//! Gaussian noise fixed per (rater, dimension), clamps to `[1, 5]`, and
//! spreads the target over the dimension's items so their keyed mean lands
//! within 0.05 of it.

use std::collections::BTreeMap;

use rand_distr::{Distribution, StandardNormal};
use regex::Regex;
use serde::{Deserialize, Serialize};

use super::{BackendError, ChatBackend, ChatRequest, ItemRef, RequestKind, RequestMeta};
use crate::assess::{Keyed, REVERSED_SCALE_MARKER};
use crate::persona::{BigFiveDim, LatentPersonality};
use crate::seed;
use crate::social::RelationContext;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockSpec {
    pub seed: u64,
    /// Standard deviation of each observer's per-dimension rating offset.
    pub observer_noise: f64,
    /// Standard deviation of the self-report offset.
    pub self_noise: f64,
    /// 1-based turn from which both agents ask to end the dialogue.
    pub end_turn: usize,
    /// Additive rating bias for observers in a relation context.
    pub context_bias: Vec<(RelationContext, BigFiveDim, f64)>,
    pub model_name: String,
}

impl Default for MockSpec {
    fn default() -> Self {
        MockSpec {
            seed: 0,
            observer_noise: 0.0,
            self_noise: 0.0,
            end_turn: 4,
            context_bias: Vec::new(),
            model_name: "mock".into(),
        }
    }
}

pub struct MockBackend {
    spec: MockSpec,
    cue: Regex,
}

impl MockBackend {
    pub fn new(spec: MockSpec) -> Self {
        MockBackend {
            spec,
            cue: Regex::new(r"(OPE|CON|EXT|AGR|NEU)=([1-6])").expect("valid regex"),
        }
    }

    pub fn spec(&self) -> &MockSpec {
        &self.spec
    }

    /// Target score for a level under the noise-free map.
    pub fn level_score(level: f64) -> f64 {
        1.0 + 0.8 * (level - 1.0)
    }

    pub fn cue_tag(latent: &LatentPersonality) -> String {
        let parts: Vec<String> = BigFiveDim::ALL
            .iter()
            .map(|d| format!("{}={}", d.code(), latent.level(*d)))
            .collect();
        format!("<<{}>>", parts.join(" "))
    }

    fn gaussian(&self, stage: &str, entity: &str, dim: BigFiveDim) -> f64 {
        let mut rng = seed::derived_rng(self.spec.seed, stage, &format!("{entity}/{}", dim.code()));
        StandardNormal.sample(&mut rng)
    }

    /// Mean cue level for `dim` across the prompt, if any cue is present.
    fn observed_level(&self, text: &str, dim: BigFiveDim) -> Option<f64> {
        let levels: Vec<f64> = self
            .cue
            .captures_iter(text)
            .filter(|c| &c[1] == dim.code())
            .filter_map(|c| c[2].parse::<f64>().ok())
            .collect();
        if levels.is_empty() {
            None
        } else {
            Some(levels.iter().sum::<f64>() / levels.len() as f64)
        }
    }

    fn target(&self, meta: &RequestMeta, text: &str, dim: BigFiveDim) -> f64 {
        let value = match meta.persona {
            Some(p) => {
                Self::level_score(p.level(dim) as f64)
                    + self.spec.self_noise * self.gaussian("mock-self", &meta.entity, dim)
            }
            None => match self.observed_level(text, dim) {
                Some(level) => {
                    let bias: f64 = self
                        .spec
                        .context_bias
                        .iter()
                        .filter(|(c, d, _)| Some(*c) == meta.context && *d == dim)
                        .map(|(_, _, b)| b)
                        .sum();
                    Self::level_score(level)
                        + bias
                        + self.spec.observer_noise
                            * self.gaussian("mock-observer", &meta.entity, dim)
                }
                None => 3.0,
            },
        };
        value.clamp(1.0, 5.0)
    }

    fn answer(&self, meta: &RequestMeta, text: &str, item: &ItemRef) -> u8 {
        let target = self.target(meta, text, item.dimension);
        let count = item.dim_count.max(1) as f64;
        let dither = (item.ordinal as f64 + 0.5) / count;
        let canonical = (target + dither).floor().clamp(1.0, 5.0) as u8;
        let keyed = match item.keyed {
            Keyed::Positive => canonical,
            Keyed::Negative => 6 - canonical,
        };
        if text.contains(REVERSED_SCALE_MARKER) {
            6 - keyed
        } else {
            keyed
        }
    }

    fn dialogue_turn(&self, req: &ChatRequest) -> String {
        let meta = &req.meta;
        let turn = req.messages.len() + 1;
        let partner = meta.partner.as_deref().unwrap_or("there");
        let body = match meta.persona {
            Some(latent) => {
                let dim = BigFiveDim::ALL[turn % 5];
                let level = latent.level(dim);
                let tone = match level {
                    1 | 2 => "honestly, that is not really my thing",
                    3 | 4 => "I can see it either way",
                    _ => "I am all in on that",
                };
                format!(
                    "Well, {partner}, {tone}. {}",
                    Self::cue_tag(&latent)
                )
            }
            None if turn == 1 => {
                format!("Hey {partner}, I hope you're doing well. Can we talk about something?")
            }
            None => format!("I see. Tell me more about how you would handle it, {partner}."),
        };
        let end = turn >= self.spec.end_turn;
        format!("{body}\n{}", if end { "[END]" } else { "[CONTINUE]" })
    }

    fn relationship(&self, meta: &RequestMeta) -> String {
        let relations: &[&str] = match meta.context.unwrap_or(RelationContext::Friend) {
            RelationContext::Family => &[
                "cousins who grew up in the same town",
                "siblings who share a family business",
                "in-laws who see each other at holidays",
                "relatives reconnecting after years apart",
            ],
            RelationContext::Friend => &[
                "college classmates who stayed close",
                "neighbors who became close friends",
                "teammates in a weekend running club",
                "old friends from high school",
            ],
            RelationContext::Workplace => &[
                "mentor and mentee at the same company",
                "coworkers on the same product team",
                "a manager and a direct report",
                "colleagues sharing an office",
            ],
        };
        let start = seed::derive(self.spec.seed, "mock-relation", &meta.entity) as usize;
        let x = meta.speaker.as_deref().unwrap_or("X");
        let y = meta.partner.as_deref().unwrap_or("Y");
        let n = meta.count.max(1);
        let mut out = String::from("Here are some possible relations:\n");
        for i in 0..n {
            let rel = relations[(start + i) % relations.len()];
            out.push_str(&format!("{}. \"{x} and {y} are {rel}.\"\n", i + 1));
        }
        out
    }

    fn scenarios(&self, meta: &RequestMeta) -> String {
        const TEMPLATES: [(&str, BigFiveDim); 10] = [
            ("{y} invites {x} to try an unfamiliar art exhibition on a free afternoon.", BigFiveDim::Openness),
            ("{x} and {y} must plan a weekend trip with a tight budget and a deadline for bookings.", BigFiveDim::Conscientiousness),
            ("{y} brings {x} to a crowded party where {x} knows almost nobody.", BigFiveDim::Extraversion),
            ("{y} asks {x} for help moving apartments on the same day {x} had other plans.", BigFiveDim::Agreeableness),
            ("{x} receives unexpected criticism in front of {y} and they talk about it afterwards.", BigFiveDim::Neuroticism),
            ("{y} proposes an unconventional solution to a shared problem and asks {x} for an opinion.", BigFiveDim::Openness),
            ("{x} promised {y} to finish a shared task but the deadline is tomorrow.", BigFiveDim::Conscientiousness),
            ("{y} suggests that {x} give a short toast at a group dinner.", BigFiveDim::Extraversion),
            ("{x} and {y} disagree about how to split a bill after dinner.", BigFiveDim::Agreeableness),
            ("{x} is waiting with {y} for important news that is running late.", BigFiveDim::Neuroticism),
        ];
        let start = seed::derive(self.spec.seed, "mock-scenario", &meta.entity) as usize;
        let x = meta.speaker.as_deref().unwrap_or("X");
        let y = meta.partner.as_deref().unwrap_or("Y");
        let mut out = String::new();
        for i in 0..meta.count.max(1) {
            let (template, dim) = TEMPLATES[(start + i) % TEMPLATES.len()];
            let text = template.replace("{x}", x).replace("{y}", y);
            out.push_str(&format!("{}. {text}\nBig 5 dimension: {}\n\n", i + 1, dim.name()));
        }
        out
    }
}

impl ChatBackend for MockBackend {
    fn complete(&self, req: &ChatRequest) -> Result<String, BackendError> {
        let meta = &req.meta;
        match meta.kind {
            RequestKind::Unspecified => Err(BackendError::UnknownRequestKind),
            RequestKind::Relationship => Ok(self.relationship(meta)),
            RequestKind::Scenarios => Ok(self.scenarios(meta)),
            RequestKind::DialogueTurn => Ok(self.dialogue_turn(req)),
            RequestKind::QuestionnaireItem => {
                let item = meta.items.first().ok_or(BackendError::UnknownRequestKind)?;
                Ok(self.answer(meta, &req.full_text(), item).to_string())
            }
            RequestKind::QuestionnaireBatch => {
                let text = req.full_text();
                let mut answers = BTreeMap::new();
                for item in &meta.items {
                    answers.insert(item.item_id, self.answer(meta, &text, item));
                }
                Ok(answers
                    .iter()
                    .map(|(id, a)| format!("{id}. {a}"))
                    .collect::<Vec<_>>()
                    .join("\n"))
            }
        }
    }

    fn model_name(&self) -> &str {
        &self.spec.model_name
    }
}
