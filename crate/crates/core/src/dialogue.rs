//! Turn-by-turn subject–observer conversation for one scenario.
//!
//! The observer speaks first and the two agents alternate. Each reply ends
//! with a line that is exactly `[CONTINUE]` or `[END]`; the dialogue stops
//! as soon as two consecutive turns ask to end, or at the turn cap.

use serde::{Deserialize, Serialize};

use crate::backend::{
    BackendError, ChatBackend, ChatRequest, Message, RequestKind, RequestMeta, MAX_OUTPUT_DIALOGUE,
    TEMPERATURE_SIMULATION,
};
use crate::persona::{AgentProfile, LatentPersonality, Role};
use crate::social::{Relationship, Scenario};
use crate::{Error, Result};

pub const CONTINUE_MARKER: &str = "[CONTINUE]";
pub const END_MARKER: &str = "[END]";
pub const DEFAULT_MAX_TURNS: usize = 20;
/// Extra generations allowed when a reply is empty and does not end.
const EMPTY_REPLY_RETRIES: usize = 3;

const END_PROTOCOL: &str = "End every reply with a final line that is exactly [CONTINUE] if you want to keep talking, or [END] if you think the conversation is over or you wish to leave it.";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Speaker {
    Subject,
    Observer,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub speaker: Speaker,
    pub text: String,
    pub wants_end: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    MutualEnd,
    TurnCap,
    BackendError,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DialogueTranscript {
    pub scenario_id: String,
    pub subject_id: String,
    pub observer_id: String,
    pub scenario_index: usize,
    pub turns: Vec<Turn>,
    pub termination: Termination,
    pub turn_count: usize,
    /// Replies that lacked the end-signal line or were empty.
    pub protocol_violations: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub model: String,
    pub seed: u64,
}

impl DialogueTranscript {
    /// Checks the structural invariants: observer first, strict alternation,
    /// the termination label agreeing with the final turns, and the cap.
    pub fn check(&self, max_turns: usize) -> Result<()> {
        let fail = |why: &str| Err(Error::Usage(format!("{}: {why}", self.scenario_id)));
        if self.turn_count != self.turns.len() || self.turn_count > max_turns {
            return fail("turn count mismatch");
        }
        for (i, t) in self.turns.iter().enumerate() {
            let expected = if i % 2 == 0 { Speaker::Observer } else { Speaker::Subject };
            if t.speaker != expected {
                return fail("speakers do not alternate from the observer");
            }
            if t.text.is_empty() && !t.wants_end {
                return fail("empty utterance without end signal");
            }
        }
        let n = self.turns.len();
        let ends_pair = |i: usize| self.turns[i].wants_end && self.turns[i + 1].wants_end;
        let final_pair = n >= 2 && ends_pair(n - 2);
        if (self.termination == Termination::MutualEnd) != final_pair {
            return fail("termination label disagrees with final turns");
        }
        if n >= 3 && (0..n - 2).any(ends_pair) {
            return fail("dialogue continued past a mutual end");
        }
        Ok(())
    }
}

/// One side of a dialogue with its persona preamble (basic profile, plus
/// personality markers for the subject).
#[derive(Debug, Clone, Copy)]
pub struct DialogueAgent<'a> {
    pub profile: &'a AgentProfile,
    pub preamble: &'a str,
}

impl DialogueAgent<'_> {
    fn persona(&self) -> Option<LatentPersonality> {
        match self.profile.role {
            Role::Subject => self.profile.latent,
            Role::Observer => None,
        }
    }
}

pub fn simulation_instruction(
    preamble: &str,
    partner_name: &str,
    relation: &str,
    scenario: &str,
) -> String {
    format!(
        "{preamble}\n\nYou and {partner_name} (the user) are {relation}.\nYour task is to have a conversation with {partner_name} based on the following scenario:{scenario}\n\n{END_PROTOCOL}"
    )
}

/// Splits a reply into (utterance, wants_end, marker_present).
pub fn parse_reply(raw: &str) -> (String, bool, bool) {
    let trimmed = raw.trim_end();
    for (marker, end) in [(END_MARKER, true), (CONTINUE_MARKER, false)] {
        if let Some(body) = trimmed.strip_suffix(marker) {
            return (body.trim().to_string(), end, true);
        }
    }
    (trimmed.trim().to_string(), false, false)
}

fn history_for(speaker: Speaker, turns: &[Turn]) -> Vec<Message> {
    turns
        .iter()
        .map(|t| {
            if t.speaker == speaker {
                let marker = if t.wants_end { END_MARKER } else { CONTINUE_MARKER };
                if t.text.is_empty() {
                    Message::agent(marker)
                } else {
                    Message::agent(format!("{}\n{marker}", t.text))
                }
            } else {
                Message::counterpart(t.text.clone())
            }
        })
        .collect()
}

pub fn simulate_dialogue(
    subject: DialogueAgent<'_>,
    observer: DialogueAgent<'_>,
    relationship: &Relationship,
    scenario: &Scenario,
    backend: &dyn ChatBackend,
    max_turns: usize,
    seed: u64,
) -> Result<DialogueTranscript> {
    if max_turns < 2 {
        return Err(Error::Usage("max_turns must be at least 2".into()));
    }
    if subject.profile.role != Role::Subject || observer.profile.role != Role::Observer {
        return Err(Error::Usage("dialogue needs one subject and one observer".into()));
    }
    let subject_system = simulation_instruction(
        subject.preamble,
        &observer.profile.name,
        &relationship.relation,
        &scenario.description,
    );
    let observer_system = simulation_instruction(
        observer.preamble,
        &subject.profile.name,
        &relationship.relation,
        &scenario.description,
    );

    let mut turns: Vec<Turn> = Vec::new();
    let mut violations = 0;
    let mut termination = Termination::TurnCap;
    let mut error = None;

    'dialogue: while turns.len() < max_turns {
        let speaker = if turns.len().is_multiple_of(2) {
            Speaker::Observer
        } else {
            Speaker::Subject
        };
        let (agent, partner, system) = match speaker {
            Speaker::Observer => (observer, subject, &observer_system),
            Speaker::Subject => (subject, observer, &subject_system),
        };
        let mut request = ChatRequest::new(system.clone(), history_for(speaker, &turns))
            .temperature(TEMPERATURE_SIMULATION)
            .max_output(MAX_OUTPUT_DIALOGUE)
            .meta(RequestMeta {
                kind: RequestKind::DialogueTurn,
                entity: format!("{}/{}", scenario.scenario_id, agent.profile.agent_id),
                persona: agent.persona(),
                context: Some(relationship.context),
                speaker: Some(agent.profile.name.clone()),
                partner: Some(partner.profile.name.clone()),
                ..Default::default()
            });
        let mut accepted = None;
        for _ in 0..=EMPTY_REPLY_RETRIES {
            let raw = match backend.complete(&request) {
                Ok(raw) => raw,
                Err(e @ (BackendError::Auth { .. } | BackendError::Config(_) | BackendError::UnknownRequestKind)) => {
                    return Err(e.into())
                }
                Err(e) => {
                    termination = Termination::BackendError;
                    error = Some(e.to_string());
                    break 'dialogue;
                }
            };
            let (text, wants_end, marked) = parse_reply(&raw);
            if !marked {
                violations += 1;
            }
            if text.is_empty() && !wants_end {
                if marked {
                    violations += 1;
                }
                request.messages.push(Message::agent(raw));
                request
                    .messages
                    .push(Message::counterpart(format!("Please reply to {}. {END_PROTOCOL}", partner.profile.name)));
                continue;
            }
            accepted = Some(Turn {
                speaker,
                text,
                wants_end,
            });
            break;
        }
        let Some(turn) = accepted else {
            termination = Termination::BackendError;
            error = Some("agent kept returning empty replies".into());
            break;
        };
        turns.push(turn);
        let n = turns.len();
        if n >= 2 && turns[n - 1].wants_end && turns[n - 2].wants_end {
            termination = Termination::MutualEnd;
            break;
        }
    }

    Ok(DialogueTranscript {
        scenario_id: scenario.scenario_id.clone(),
        subject_id: subject.profile.agent_id.clone(),
        observer_id: observer.profile.agent_id.clone(),
        scenario_index: scenario.index,
        turn_count: turns.len(),
        turns,
        termination,
        protocol_violations: violations,
        error,
        model: backend.model_name().to_string(),
        seed,
    })
}

/// Renders a transcript as `Name: utterance` lines.
pub fn render_transcript(t: &DialogueTranscript, subject_name: &str, observer_name: &str) -> String {
    t.turns
        .iter()
        .filter(|turn| !turn.text.is_empty())
        .map(|turn| {
            let name = match turn.speaker {
                Speaker::Subject => subject_name,
                Speaker::Observer => observer_name,
            };
            format!("{name}: {}", turn.text)
        })
        .collect::<Vec<_>>()
        .join("\n")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{BackendError, MockBackend, MockSpec};
    use crate::persona::Gender;
    use crate::social::RelationContext;
    use std::sync::Mutex;

    /// Replies from a fixed script, one entry per generation.
    struct Scripted {
        replies: Mutex<std::vec::IntoIter<std::result::Result<String, ()>>>,
    }

    impl Scripted {
        fn new(replies: Vec<std::result::Result<&str, ()>>) -> Self {
            let v: Vec<_> = replies.into_iter().map(|r| r.map(str::to_string)).collect();
            Scripted {
                replies: Mutex::new(v.into_iter()),
            }
        }
    }

    impl ChatBackend for Scripted {
        fn complete(&self, _: &ChatRequest) -> std::result::Result<String, BackendError> {
            match self.replies.lock().unwrap().next() {
                Some(Ok(s)) => Ok(s),
                _ => Err(BackendError::Transport {
                    attempts: 1,
                    message: "script exhausted".into(),
                }),
            }
        }
        fn model_name(&self) -> &str {
            "scripted"
        }
    }

    fn profiles() -> (AgentProfile, AgentProfile) {
        (
            AgentProfile {
                agent_id: "s0001".into(),
                name: "Ethan".into(),
                age: 29,
                gender: Gender::Male,
                role: Role::Subject,
                latent: Some(LatentPersonality::new([1, 4, 2, 1, 2]).unwrap()),
            },
            AgentProfile {
                agent_id: "s0001-o11".into(),
                name: "Jacob".into(),
                age: 52,
                gender: Gender::Male,
                role: Role::Observer,
                latent: None,
            },
        )
    }

    fn setting() -> (Relationship, Scenario) {
        (
            Relationship {
                subject_id: "s0001".into(),
                observer_id: "s0001-o11".into(),
                context: RelationContext::Workplace,
                description: "Ethan and Jacob are mentee and mentor.".into(),
                relation: "mentee and mentor".into(),
            },
            Scenario {
                scenario_id: "s0001-o11-c1".into(),
                subject_id: "s0001".into(),
                observer_id: "s0001-o11".into(),
                index: 1,
                description: "Jacob is faced with a difficult decision regarding project resources and seeks Ethan's opinion.".into(),
                probed_dimension: None,
            },
        )
    }

    fn run(backend: &dyn ChatBackend, max_turns: usize) -> DialogueTranscript {
        let (s, o) = profiles();
        let (r, sc) = setting();
        simulate_dialogue(
            DialogueAgent { profile: &s, preamble: "Your name is Ethan." },
            DialogueAgent { profile: &o, preamble: "Your name is Jacob." },
            &r,
            &sc,
            backend,
            max_turns,
            1,
        )
        .unwrap()
    }

    #[test]
    fn reply_parsing() {
        assert_eq!(parse_reply("Hi there.\n[END]"), ("Hi there.".into(), true, true));
        assert_eq!(parse_reply("Hi.\n[CONTINUE]\n"), ("Hi.".into(), false, true));
        assert_eq!(parse_reply("Hi."), ("Hi.".into(), false, false));
        assert_eq!(parse_reply("[END]"), ("".into(), true, true));
    }

    #[test]
    fn mutual_end_on_turns_three_and_four() {
        let b = Scripted::new(vec![
            Ok("a\n[CONTINUE]"),
            Ok("b\n[CONTINUE]"),
            Ok("c\n[END]"),
            Ok("d\n[END]"),
        ]);
        let t = run(&b, 20);
        assert_eq!(t.turn_count, 4);
        assert_eq!(t.termination, Termination::MutualEnd);
        t.check(20).unwrap();
    }

    #[test]
    fn single_end_does_not_stop() {
        let b = Scripted::new(vec![
            Ok("a\n[END]"),
            Ok("b\n[CONTINUE]"),
            Ok("c\n[END]"),
            Ok("d\n[END]"),
        ]);
        let t = run(&b, 20);
        assert_eq!(t.turn_count, 4);
        assert_eq!(t.termination, Termination::MutualEnd);
    }

    #[test]
    fn turn_cap() {
        let b = Scripted::new(vec![Ok("x\n[CONTINUE]"); 10]);
        let t = run(&b, 6);
        assert_eq!(t.turn_count, 6);
        assert_eq!(t.termination, Termination::TurnCap);
        t.check(6).unwrap();
    }

    #[test]
    fn missing_marker_counts_as_continue() {
        let b = Scripted::new(vec![Ok("hello"), Ok("hi"), Ok("bye\n[END]"), Ok("bye\n[END]")]);
        let t = run(&b, 20);
        assert_eq!(t.protocol_violations, 2);
        assert!(!t.turns[0].wants_end);
        assert_eq!(t.turn_count, 4);
    }

    #[test]
    fn backend_failure_keeps_turns_so_far() {
        let b = Scripted::new(vec![Ok("a\n[CONTINUE]"), Ok("b\n[CONTINUE]"), Err(())]);
        let t = run(&b, 20);
        assert_eq!(t.termination, Termination::BackendError);
        assert_eq!(t.turn_count, 2);
        assert!(t.error.is_some());
    }

    #[test]
    fn empty_reply_is_regenerated() {
        let b = Scripted::new(vec![Ok("[CONTINUE]"), Ok("Hey\n[END]"), Ok("ok\n[END]")]);
        let t = run(&b, 20);
        assert_eq!(t.turns[0].text, "Hey");
        assert_eq!(t.turn_count, 2);
        assert_eq!(t.protocol_violations, 1);
    }

    #[test]
    fn mock_dialogue_is_deterministic_and_well_formed() {
        let mock = MockBackend::new(MockSpec::default());
        let a = run(&mock, 20);
        let b = run(&mock, 20);
        assert_eq!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&b).unwrap()
        );
        assert_eq!(a.termination, Termination::MutualEnd);
        assert_eq!(a.turn_count, 5);
        assert!(a.turns[0].text.starts_with("Hey Ethan"));
        a.check(20).unwrap();
    }

    #[test]
    fn instruction_template() {
        let text = simulation_instruction("P", "Jacob", "coworkers", "They meet.");
        assert!(text.starts_with(
            "P\n\nYou and Jacob (the user) are coworkers.\nYour task is to have a conversation with Jacob based on the following scenario:They meet."
        ));
        assert!(text.ends_with(END_PROTOCOL));
    }

    #[test]
    fn rendering_uses_names() {
        let mock = MockBackend::new(MockSpec::default());
        let t = run(&mock, 20);
        let text = render_transcript(&t, "Ethan", "Jacob");
        let first = text.lines().next().unwrap();
        assert!(first.starts_with("Jacob: Hey Ethan"));
        assert_eq!(text.lines().count(), 5);
    }
}
