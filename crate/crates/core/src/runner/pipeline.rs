use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};

use log::{info, warn};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::config::{BackendKind, RunConfig};
use super::manifest::{hash_file, now, RunManifest, Stage, StageRecord, StageStatus};
use super::report;
use super::store::{read_jsonl, to_jsonl, write_atomic, PartialLog};
use crate::assess::{self, AnswerSheet, ObserverAssessment, Questionnaire, Rater, RatingVector};
use crate::backend::{BackendError, ChatBackend, MockBackend, MockSpec, OpenAiClient};
use crate::dialogue::{simulate_dialogue, DialogueAgent, DialogueTranscript, Termination};
use crate::exec::Executor;
use crate::persona::{
    default_names, generate_profile, generate_profile_with_latent, load_names, render_observer_instruction,
    render_subject_instruction, sample_latent, AgentProfile, MarkerLexicon, NameEntry, PersonaMarkers, Role,
};
use crate::seed::{self, sha256_hex};
use crate::social::{generate_relationship, generate_scenarios, RelationContext, Relationship, Scenario};
use crate::stats;
use crate::{Error, Result};

pub const SUBJECTS: &str = "profiles/subjects.jsonl";
pub const OBSERVERS: &str = "profiles/observers.jsonl";
pub const RELATIONS: &str = "relations/relations.jsonl";
pub const SCENARIOS: &str = "scenarios/scenarios.jsonl";
pub const DIALOGUES: &str = "dialogues/dialogues.jsonl";
pub const SELF_SHEETS: &str = "sheets/self.jsonl";
pub const OBSERVER_SHEETS: &str = "sheets/observer.jsonl";
pub const SELF_SCORES: &str = "scores/self.jsonl";
pub const OBSERVER_SCORES: &str = "scores/observer.jsonl";
pub const AGGREGATED: &str = "scores/aggregated.jsonl";
pub const EXCLUDED: &str = "scores/excluded.jsonl";
pub const HUMAN_SHEETS: &str = "human/sheets.jsonl";
pub const HUMAN_SCORES: &str = "human/scores.jsonl";

/// Relative path and content of each file a stage produces.
pub type Artifacts = Vec<(String, Vec<u8>)>;

pub fn subject_id(index: usize) -> String {
    format!("s{:04}", index + 1)
}

pub fn observer_id(subject_id: &str, index: usize) -> String {
    format!("{subject_id}-o{:02}", index + 1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectRecord {
    pub profile: AgentProfile,
    pub markers: PersonaMarkers,
    pub instruction: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObserverRecord {
    pub profile: AgentProfile,
    pub subject_id: String,
    pub context: RelationContext,
    pub instruction: String,
}

/// A sheet left out of the analysis because it could not be scored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Exclusion {
    pub rater: Rater,
    pub subject_id: String,
    pub reason: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageOutcome {
    Ran,
    Skipped,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ImportSummary {
    pub sheets: usize,
    pub scored: usize,
}

pub fn mock_spec(config: &RunConfig) -> MockSpec {
    MockSpec {
        seed: seed::derive(config.seed, "mock", "backend"),
        observer_noise: config.mock.observer_noise,
        self_noise: config.mock.self_noise,
        end_turn: config.mock.end_turn,
        context_bias: config.mock.context_bias.clone(),
        model_name: "mock".into(),
    }
}

pub fn build_backend(config: &RunConfig) -> Result<Arc<dyn ChatBackend>> {
    Ok(match config.backend {
        BackendKind::Mock => Arc::new(MockBackend::new(mock_spec(config))),
        BackendKind::OpenAi => Arc::new(OpenAiClient::from_env(config.api.clone())?),
    })
}

fn by_id<T>(items: &[T], id: impl Fn(&T) -> &str) -> HashMap<&str, &T> {
    items.iter().map(|t| (id(t), t)).collect()
}

fn lookup<'a, T>(map: &HashMap<&str, &'a T>, id: &str, what: &str) -> Result<&'a T> {
    map.get(id)
        .copied()
        .ok_or_else(|| Error::Config(format!("no {what} record for `{id}`; the run directory is inconsistent")))
}

pub struct Pipeline {
    config: RunConfig,
    root: PathBuf,
    backend: Arc<dyn ChatBackend>,
    exec: Executor,
    questionnaire: Questionnaire,
    names: Vec<NameEntry>,
    lexicon: MarkerLexicon,
    manifest: RunManifest,
    progress: Mutex<Option<(usize, usize)>>,
}

impl Pipeline {
    pub fn open(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let backend = build_backend(&config)?;
        Self::with_backend(config, backend)
    }

    pub fn with_backend(config: RunConfig, backend: Arc<dyn ChatBackend>) -> Result<Self> {
        config.validate()?;
        let questionnaire = match &config.questionnaire {
            Some(p) => Questionnaire::load(p)?,
            None => Questionnaire::ipip50(),
        };
        let names = match &config.names {
            Some(p) => load_names(p)?,
            None => default_names(),
        };
        let lexicon = match &config.markers {
            Some(p) => MarkerLexicon::load(p)?,
            None => MarkerLexicon::builtin(),
        };
        let hash_json = |v: &dyn erased::Json| sha256_hex(&v.json());
        let input_hashes: BTreeMap<String, String> = [
            ("markers".to_string(), hash_json(&lexicon.entries().to_vec())),
            ("names".to_string(), hash_json(&names)),
            ("questionnaire".to_string(), hash_json(&questionnaire.items().to_vec())),
        ]
        .into();
        let config_hash = fingerprint(&config, &input_hashes);

        let root = config.output.clone();
        let manifest = match RunManifest::load(&root)? {
            Some(mut m) => {
                if m.config_hash != config_hash {
                    return Err(Error::RefuseResume(describe_mismatch(&m, &config, &input_hashes)));
                }
                m.config = config.clone();
                m
            }
            None => {
                let occupied = root.exists()
                    && std::fs::read_dir(&root)
                        .map_err(|e| Error::io(&root, e))?
                        .next()
                        .is_some();
                if occupied {
                    return Err(Error::RefuseResume(format!(
                        "{} is not empty and has no manifest; choose a fresh output directory",
                        root.display()
                    )));
                }
                RunManifest::new(config.clone(), config_hash, input_hashes)
            }
        };
        let exec = Executor::new(config.exec_mode, config.threads);
        let mut pipeline = Pipeline {
            config,
            root,
            backend,
            exec,
            questionnaire,
            names,
            lexicon,
            manifest,
            progress: Mutex::new(None),
        };
        pipeline.manifest.save(&pipeline.root)?;
        write_atomic(&pipeline.root.join("config.txt"), pipeline.config.to_text().as_bytes())?;
        Ok(pipeline)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn manifest(&self) -> &RunManifest {
        &self.manifest
    }

    pub fn questionnaire(&self) -> &Questionnaire {
        &self.questionnaire
    }

    fn stage_inputs(&self, stage: Stage) -> BTreeMap<String, String> {
        let mut inputs = BTreeMap::new();
        inputs.insert("config".to_string(), self.manifest.config_hash.clone());
        for up in stage.upstream() {
            if let Some(r) = self.manifest.stages.get(up) {
                inputs.extend(r.artifacts.iter().map(|(k, v)| (k.clone(), v.clone())));
            }
        }
        let c = &self.config;
        match stage {
            Stage::Scores => {
                inputs.insert("param:max_missing_fraction".into(), c.max_missing_fraction.to_string());
            }
            Stage::Stats | Stage::Report => {
                inputs.insert("param:resamples".into(), c.resamples.to_string());
                inputs.insert("param:bonferroni".into(), c.bonferroni.to_string());
                if stage == Stage::Stats {
                    if let Some(h) = hash_file(&self.root.join(HUMAN_SCORES)) {
                        inputs.insert(HUMAN_SCORES.into(), h);
                    }
                }
            }
            _ => {}
        }
        inputs
    }

    /// Complete, hash-verified and computed from the current upstream artifacts.
    pub fn is_fresh(&self, stage: Stage) -> bool {
        self.manifest.verified(&self.root, stage)
            && self.manifest.stages[&stage].inputs == self.stage_inputs(stage)
    }

    pub fn run(&mut self) -> Result<Vec<(Stage, StageOutcome)>> {
        self.run_stages(&Stage::ALL)
    }

    /// Runs `targets` in order, skipping fresh stages. Stale stages upstream
    /// of the targets are an error rather than silently recomputed.
    pub fn run_stages(&mut self, targets: &[Stage]) -> Result<Vec<(Stage, StageOutcome)>> {
        let Some(&last) = targets.iter().max() else {
            return Ok(Vec::new());
        };
        let mut outcomes = Vec::new();
        for stage in Stage::ALL.into_iter().filter(|s| *s <= last) {
            if self.is_fresh(stage) {
                info!("stage {stage}: up to date");
                outcomes.push((stage, StageOutcome::Skipped));
                continue;
            }
            if !targets.contains(&stage) {
                return Err(Error::MissingStage {
                    stage: stage.name().into(),
                    detail: format!("its outputs are missing or out of date; run the {stage} stage first"),
                });
            }
            self.execute(stage)?;
            outcomes.push((stage, StageOutcome::Ran));
        }
        Ok(outcomes)
    }

    fn execute(&mut self, stage: Stage) -> Result<()> {
        let inputs = self.stage_inputs(stage);
        let tag = sha256_hex(format!("{inputs:?}").as_bytes())[..16].to_string();
        *self.progress.lock().unwrap_or_else(|p| p.into_inner()) = None;
        info!("stage {stage}: running");
        let result = match stage {
            Stage::Profiles => self.profiles(),
            Stage::Relations => self.relations(&tag),
            Stage::Scenarios => self.scenarios(&tag),
            Stage::Dialogues => self.dialogues(&tag),
            Stage::Sheets => self.sheets(&tag),
            Stage::Scores => self.scores(),
            Stage::Stats => self.stats(),
            Stage::Report => self.report(),
        };
        let progress = self.progress.lock().unwrap_or_else(|p| p.into_inner()).take();
        match result {
            Ok(artifacts) => {
                let mut hashes = BTreeMap::new();
                for (rel, bytes) in &artifacts {
                    write_atomic(&self.root.join(rel), bytes)?;
                    hashes.insert(rel.clone(), sha256_hex(bytes));
                }
                let (done, total) = progress.unwrap_or((1, 1));
                self.manifest.stages.insert(
                    stage,
                    StageRecord {
                        status: StageStatus::Complete,
                        units_done: done,
                        units_total: total,
                        inputs,
                        artifacts: hashes,
                        updated_at: now(),
                    },
                );
                self.manifest.save(&self.root)
            }
            Err(e) => {
                match progress {
                    Some((done, total)) => {
                        self.manifest.stages.insert(
                            stage,
                            StageRecord {
                                status: StageStatus::Partial,
                                units_done: done,
                                units_total: total,
                                inputs,
                                artifacts: BTreeMap::new(),
                                updated_at: now(),
                            },
                        );
                    }
                    None => {
                        self.manifest.stages.remove(&stage);
                    }
                }
                self.manifest.save(&self.root)?;
                Err(e)
            }
        }
    }

    fn load<T: DeserializeOwned>(&self, rel: &str, stage: Stage) -> Result<Vec<T>> {
        let path = self.root.join(rel);
        if !path.exists() {
            return Err(Error::MissingStage {
                stage: stage.name().into(),
                detail: format!("{} is missing", path.display()),
            });
        }
        read_jsonl(&path)
    }

    /// Maps `work` over `units` with per-unit checkpoints. Finished units are
    /// reused on resume; after a backend failure no new units start.
    fn run_units<U, T, K, W>(&self, stage: Stage, tag: &str, units: &[U], key: K, work: W) -> Result<Vec<T>>
    where
        U: Sync,
        T: Serialize + DeserializeOwned + Clone + Send + Sync,
        K: Fn(&U) -> String + Sync + Send,
        W: Fn(&U) -> Result<T> + Sync + Send,
    {
        let log = PartialLog::<T>::open(&self.root.join(stage.name()), tag)?;
        if !log.is_empty() {
            info!("stage {stage}: resuming with {} of {} units done", log.len(), units.len());
        }
        let stop = AtomicBool::new(false);
        let results: Vec<Option<Result<T>>> = self.exec.map(units, |u| {
            let k = key(u);
            if let Some(v) = log.get(&k) {
                return Some(Ok(v));
            }
            if stop.load(Ordering::Relaxed) {
                return None;
            }
            let r = work(u).and_then(|v| log.record(&k, &v).map(|()| v));
            if matches!(r, Err(Error::Backend(_))) {
                stop.store(true, Ordering::Relaxed);
            }
            Some(r)
        });
        let total = units.len();
        let done = results.iter().filter(|r| matches!(r, Some(Ok(_)))).count();
        *self.progress.lock().unwrap_or_else(|p| p.into_inner()) = Some((done, total));
        let mut values = Vec::with_capacity(total);
        let mut first_error = None;
        let mut failed = 0;
        for r in results {
            match r {
                Some(Ok(v)) => values.push(v),
                Some(Err(e)) => {
                    failed += 1;
                    first_error.get_or_insert(e);
                }
                None => {}
            }
        }
        if let Some(e) = first_error {
            warn!("stage {stage}: {failed} of {total} units failed and {done} are saved; rerun to resume");
            return Err(e);
        }
        log.finish()?;
        Ok(values)
    }

    fn with_retries<T>(&self, what: &str, id: &str, f: impl Fn() -> Result<T>) -> Result<T> {
        let mut attempt = 0;
        loop {
            match f() {
                Err(e @ (Error::Parse { .. } | Error::PartialParse { .. }))
                    if attempt < self.config.generation_retries =>
                {
                    warn!("{what} for {id}: {e}; asking again");
                    attempt += 1;
                }
                other => return other,
            }
        }
    }

    fn context_of(&self, observer_index: usize) -> RelationContext {
        let [family, friend, _] = self.config.observers_per_context;
        if observer_index < family {
            RelationContext::Family
        } else if observer_index < family + friend {
            RelationContext::Friend
        } else {
            RelationContext::Workplace
        }
    }

    fn subject(&self, index: usize) -> Result<SubjectRecord> {
        let c = &self.config;
        let sid = subject_id(index);
        let latent = sample_latent(c.seed, index, c.latent_sampling);
        let profile =
            generate_profile_with_latent(seed::derive(c.seed, "profile", &sid), &sid, &self.names, latent)?;
        let markers =
            PersonaMarkers::for_latent(&self.lexicon, &latent, c.m_markers, seed::derive(c.seed, "markers", &sid))?;
        let rendered = render_subject_instruction(&profile, &markers, c.variant.instruction())?;
        Ok(SubjectRecord {
            profile,
            markers,
            instruction: rendered.text,
            warnings: rendered.warnings,
        })
    }

    fn observer(&self, subject: &SubjectRecord, index: usize) -> Result<ObserverRecord> {
        let c = &self.config;
        let oid = observer_id(&subject.profile.agent_id, index);
        // Redraw on a name clash with the subject so transcripts stay readable.
        let mut attempt = 0;
        let profile = loop {
            let entity = if attempt == 0 { oid.clone() } else { format!("{oid}#{attempt}") };
            let p = generate_profile(seed::derive(c.seed, "profile", &entity), &oid, Role::Observer, &self.names)?;
            if p.name != subject.profile.name || attempt >= 16 {
                break p;
            }
            attempt += 1;
        };
        let instruction = render_observer_instruction(&profile, c.variant.instruction());
        Ok(ObserverRecord {
            profile,
            subject_id: subject.profile.agent_id.clone(),
            context: self.context_of(index),
            instruction,
        })
    }

    fn profiles(&self) -> Result<Artifacts> {
        let indices: Vec<usize> = (0..self.config.n_subjects).collect();
        let subjects = self.exec.try_map(&indices, |&i| self.subject(i))?;
        for s in &subjects {
            for w in &s.warnings {
                warn!("{}: {w}", s.profile.agent_id);
            }
        }
        let units: Vec<(&SubjectRecord, usize)> = subjects
            .iter()
            .flat_map(|s| (0..self.config.total_observers()).map(move |j| (s, j)))
            .collect();
        let observers = self.exec.try_map(&units, |(s, j)| self.observer(s, *j))?;
        Ok(vec![
            (SUBJECTS.into(), to_jsonl(&subjects)),
            (OBSERVERS.into(), to_jsonl(&observers)),
        ])
    }

    fn relations(&self, tag: &str) -> Result<Artifacts> {
        let subjects: Vec<SubjectRecord> = self.load(SUBJECTS, Stage::Profiles)?;
        let observers: Vec<ObserverRecord> = self.load(OBSERVERS, Stage::Profiles)?;
        let subject_map = by_id(&subjects, |s| &s.profile.agent_id);
        let relations = self.run_units(
            Stage::Relations,
            tag,
            &observers,
            |o| o.profile.agent_id.clone(),
            |o| {
                let s = lookup(&subject_map, &o.subject_id, "subject")?;
                self.with_retries("relationship", &o.profile.agent_id, || {
                    generate_relationship(
                        &s.profile,
                        &o.profile,
                        o.context,
                        self.config.relation_candidates,
                        &*self.backend,
                    )
                })
            },
        )?;
        Ok(vec![(RELATIONS.into(), to_jsonl(&relations))])
    }

    fn scenarios(&self, tag: &str) -> Result<Artifacts> {
        let subjects: Vec<SubjectRecord> = self.load(SUBJECTS, Stage::Profiles)?;
        let observers: Vec<ObserverRecord> = self.load(OBSERVERS, Stage::Profiles)?;
        let relations: Vec<Relationship> = self.load(RELATIONS, Stage::Relations)?;
        let subject_map = by_id(&subjects, |s| &s.profile.agent_id);
        let observer_map = by_id(&observers, |o| &o.profile.agent_id);
        let sets: Vec<Vec<Scenario>> = self.run_units(
            Stage::Scenarios,
            tag,
            &relations,
            |r| r.observer_id.clone(),
            |r| {
                let s = lookup(&subject_map, &r.subject_id, "subject")?;
                let o = lookup(&observer_map, &r.observer_id, "observer")?;
                self.with_retries("scenarios", &r.observer_id, || {
                    generate_scenarios(&s.profile, &o.profile, r, self.config.k_scenarios, &*self.backend)
                })
            },
        )?;
        let scenarios: Vec<Scenario> = sets.into_iter().flatten().collect();
        Ok(vec![(SCENARIOS.into(), to_jsonl(&scenarios))])
    }

    fn dialogues(&self, tag: &str) -> Result<Artifacts> {
        let subjects: Vec<SubjectRecord> = self.load(SUBJECTS, Stage::Profiles)?;
        let observers: Vec<ObserverRecord> = self.load(OBSERVERS, Stage::Profiles)?;
        let relations: Vec<Relationship> = self.load(RELATIONS, Stage::Relations)?;
        let scenarios: Vec<Scenario> = self.load(SCENARIOS, Stage::Scenarios)?;
        let subject_map = by_id(&subjects, |s| &s.profile.agent_id);
        let observer_map = by_id(&observers, |o| &o.profile.agent_id);
        let relation_map = by_id(&relations, |r| &r.observer_id);
        let transcripts: Vec<DialogueTranscript> = self.run_units(
            Stage::Dialogues,
            tag,
            &scenarios,
            |sc| sc.scenario_id.clone(),
            |sc| {
                let s = lookup(&subject_map, &sc.subject_id, "subject")?;
                let o = lookup(&observer_map, &sc.observer_id, "observer")?;
                let r = lookup(&relation_map, &sc.observer_id, "relationship")?;
                simulate_dialogue(
                    DialogueAgent {
                        profile: &s.profile,
                        preamble: &s.instruction,
                    },
                    DialogueAgent {
                        profile: &o.profile,
                        preamble: &o.instruction,
                    },
                    r,
                    sc,
                    &*self.backend,
                    self.config.max_turns,
                    seed::derive(self.config.seed, "dialogue", &sc.scenario_id),
                )
                .and_then(|t| {
                    // Not checkpointed, so a rerun retries the whole dialogue.
                    if t.termination == Termination::BackendError {
                        return Err(Error::Backend(BackendError::Transport {
                            attempts: 0,
                            message: format!(
                                "dialogue {} stopped after {} turns: {}",
                                t.scenario_id,
                                t.turn_count,
                                t.error.as_deref().unwrap_or("backend error")
                            ),
                        }));
                    }
                    Ok(t)
                })
            },
        )?;
        Ok(vec![(DIALOGUES.into(), to_jsonl(&transcripts))])
    }

    fn sheets(&self, tag: &str) -> Result<Artifacts> {
        enum Unit<'a> {
            SelfReport(&'a SubjectRecord),
            Observer(&'a ObserverRecord),
        }
        let subjects: Vec<SubjectRecord> = self.load(SUBJECTS, Stage::Profiles)?;
        let observers: Vec<ObserverRecord> = self.load(OBSERVERS, Stage::Profiles)?;
        let transcripts: Vec<DialogueTranscript> = self.load(DIALOGUES, Stage::Dialogues)?;
        let subject_map = by_id(&subjects, |s| &s.profile.agent_id);
        let mut by_observer: HashMap<&str, Vec<DialogueTranscript>> = HashMap::new();
        for t in &transcripts {
            by_observer.entry(t.observer_id.as_str()).or_default().push(t.clone());
        }
        let units: Vec<Unit> = subjects
            .iter()
            .map(Unit::SelfReport)
            .chain(observers.iter().map(Unit::Observer))
            .collect();
        let c = &self.config;
        let sheets: Vec<AnswerSheet> = self.run_units(
            Stage::Sheets,
            tag,
            &units,
            |u| match u {
                Unit::SelfReport(s) => format!("self/{}", s.profile.agent_id),
                Unit::Observer(o) => format!("observer/{}", o.profile.agent_id),
            },
            |u| match u {
                Unit::SelfReport(s) => assess::administer_self(
                    &s.profile,
                    &s.instruction,
                    &self.questionnaire,
                    &*self.backend,
                    c.variant,
                    c.item_retries,
                ),
                Unit::Observer(o) => {
                    let s = lookup(&subject_map, &o.subject_id, "subject")?;
                    let ts = by_observer.get(o.profile.agent_id.as_str()).map_or(&[][..], Vec::as_slice);
                    assess::administer_observer(
                        &ObserverAssessment {
                            observer: &o.profile,
                            observer_instruction: &o.instruction,
                            subject: &s.profile,
                            context: Some(o.context),
                            transcripts: ts,
                            max_prompt_chars: c.max_prompt_chars,
                        },
                        &self.questionnaire,
                        &*self.backend,
                        c.variant,
                        c.item_retries,
                    )
                }
            },
        )?;
        let (self_sheets, observer_sheets): (Vec<_>, Vec<_>) =
            sheets.into_iter().partition(|s| s.rater == Rater::SelfReport);
        for s in observer_sheets.iter().filter(|s| s.truncated_scenarios > 0) {
            warn!(
                "{:?}: dropped {} oldest dialogues to fit max_prompt_chars",
                s.rater, s.truncated_scenarios
            );
        }
        Ok(vec![
            (SELF_SHEETS.into(), to_jsonl(&self_sheets)),
            (OBSERVER_SHEETS.into(), to_jsonl(&observer_sheets)),
        ])
    }

    fn score_sheets(&self, sheets: &[AnswerSheet], excluded: &mut Vec<Exclusion>) -> Result<Vec<RatingVector>> {
        let mut out = Vec::with_capacity(sheets.len());
        for sheet in sheets {
            match assess::score(sheet, &self.questionnaire, self.config.max_missing_fraction) {
                Ok(v) => out.push(v),
                Err(Error::Unscoreable { subject_id, dimension }) => {
                    warn!("{:?} on {subject_id}: {dimension} unscoreable; sheet excluded", sheet.rater);
                    excluded.push(Exclusion {
                        rater: sheet.rater.clone(),
                        subject_id,
                        reason: format!(
                            "more than {}% of {} items missing",
                            self.config.max_missing_fraction * 100.0,
                            dimension.code()
                        ),
                    });
                }
                Err(e) => return Err(e),
            }
        }
        Ok(out)
    }

    fn scores(&self) -> Result<Artifacts> {
        let self_sheets: Vec<AnswerSheet> = self.load(SELF_SHEETS, Stage::Sheets)?;
        let observer_sheets: Vec<AnswerSheet> = self.load(OBSERVER_SHEETS, Stage::Sheets)?;
        let mut excluded = Vec::new();
        let self_scores = self.score_sheets(&self_sheets, &mut excluded)?;
        let observer_scores = self.score_sheets(&observer_sheets, &mut excluded)?;
        let mut grouped: BTreeMap<&str, Vec<RatingVector>> = BTreeMap::new();
        for v in &observer_scores {
            grouped.entry(v.subject_id.as_str()).or_default().push(v.clone());
        }
        let aggregated = grouped
            .values()
            .map(|vs| stats::aggregate(vs, None))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        Ok(vec![
            (SELF_SCORES.into(), to_jsonl(&self_scores)),
            (OBSERVER_SCORES.into(), to_jsonl(&observer_scores)),
            (AGGREGATED.into(), to_jsonl(&aggregated)),
            (EXCLUDED.into(), to_jsonl(&excluded)),
        ])
    }

    fn stats(&self) -> Result<Artifacts> {
        let human_path = self.root.join(HUMAN_SCORES);
        let inputs = report::StatsInputs {
            subjects: self.load(SUBJECTS, Stage::Profiles)?,
            self_scores: self.load(SELF_SCORES, Stage::Scores)?,
            observer_scores: self.load(OBSERVER_SCORES, Stage::Scores)?,
            human_scores: if human_path.exists() { read_jsonl(&human_path)? } else { Vec::new() },
        };
        report::stats_tables(&inputs, &self.config, &self.exec)
    }

    fn report(&self) -> Result<Artifacts> {
        let summary = report::summary(
            &self.root,
            &self.config,
            &self.load::<DialogueTranscript>(DIALOGUES, Stage::Dialogues)?,
            &self.load::<AnswerSheet>(OBSERVER_SHEETS, Stage::Sheets)?,
            &self.load::<Exclusion>(EXCLUDED, Stage::Scores)?,
        )?;
        Ok(vec![(report::SUMMARY.into(), summary.into_bytes())])
    }

    /// Reads human answer files listed in a pairing CSV
    /// (`rater_id,subject_id,path`, paths relative to the CSV) and stores
    /// their sheets and scores for the next stats run.
    pub fn import_human(&mut self, pairing: &Path) -> Result<ImportSummary> {
        #[derive(Deserialize)]
        struct Row {
            rater_id: String,
            subject_id: String,
            path: PathBuf,
        }
        if !self.is_fresh(Stage::Profiles) {
            return Err(Error::MissingStage {
                stage: Stage::Profiles.name().into(),
                detail: "human ratings are matched against generated subjects".into(),
            });
        }
        let subjects: Vec<SubjectRecord> = self.load(SUBJECTS, Stage::Profiles)?;
        let known: HashSet<&str> = subjects.iter().map(|s| s.profile.agent_id.as_str()).collect();
        let base = pairing.parent().unwrap_or(Path::new("."));
        let bytes = std::fs::read(pairing).map_err(|e| Error::io(pairing, e))?;
        let mut reader = csv::Reader::from_reader(&bytes[..]);
        let mut sheets = Vec::new();
        let mut seen = HashSet::new();
        for row in reader.deserialize::<Row>() {
            let row = row.map_err(|source| Error::Csv {
                path: pairing.into(),
                source,
            })?;
            if !known.contains(row.subject_id.as_str()) {
                return Err(Error::Config(format!(
                    "{}: subject `{}` is not part of this run",
                    pairing.display(),
                    row.subject_id
                )));
            }
            if !seen.insert((row.rater_id.clone(), row.subject_id.clone())) {
                return Err(Error::Config(format!(
                    "{}: rater `{}` rates `{}` twice",
                    pairing.display(),
                    row.rater_id,
                    row.subject_id
                )));
            }
            let path = if row.path.is_absolute() { row.path } else { base.join(row.path) };
            sheets.push(assess::load_answer_csv(&path, &row.rater_id, &row.subject_id, &self.questionnaire)?);
        }
        if sheets.is_empty() {
            return Err(Error::Config(format!("{} lists no answer files", pairing.display())));
        }
        let mut excluded = Vec::new();
        let scores = self.score_sheets(&sheets, &mut excluded)?;
        write_atomic(&self.root.join(HUMAN_SHEETS), &to_jsonl(&sheets))?;
        write_atomic(&self.root.join(HUMAN_SCORES), &to_jsonl(&scores))?;
        Ok(ImportSummary {
            sheets: sheets.len(),
            scored: scores.len(),
        })
    }
}

mod erased {
    pub trait Json {
        fn json(&self) -> Vec<u8>;
    }

    impl<T: serde::Serialize> Json for T {
        fn json(&self) -> Vec<u8> {
            serde_json::to_vec(self).expect("inputs serialize")
        }
    }
}

fn fingerprint(config: &RunConfig, input_hashes: &BTreeMap<String, String>) -> String {
    let mut text = String::new();
    for (k, v) in config.generation_entries() {
        text.push_str(&format!("{k}={v}\n"));
    }
    for (k, v) in input_hashes {
        text.push_str(&format!("input:{k}={v}\n"));
    }
    sha256_hex(text.as_bytes())
}

fn describe_mismatch(old: &RunManifest, new: &RunConfig, input_hashes: &BTreeMap<String, String>) -> String {
    let before: BTreeMap<_, _> = old.config.generation_entries().into_iter().collect();
    let mut diffs: Vec<String> = new
        .generation_entries()
        .into_iter()
        .filter(|(k, v)| before.get(k) != Some(v))
        .map(|(k, v)| format!("{k}: {} -> {v}", before.get(k).map_or("?", |s| s.as_str())))
        .collect();
    for (k, v) in input_hashes {
        if old.input_hashes.get(k) != Some(v) {
            diffs.push(format!("{k} file content changed"));
        }
    }
    format!(
        "{} was produced with different settings ({}); use a new output directory",
        old.config.output.display(),
        if diffs.is_empty() { "unknown difference".to_string() } else { diffs.join(", ") }
    )
}
