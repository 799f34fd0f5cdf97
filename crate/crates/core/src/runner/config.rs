//! Run configuration and its flat `key = value` file format.
//!
//! The same keys are accepted in config files and as CLI overrides, so
//! [`RunConfig::set`] is the single place a setting is parsed.

use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::assess::{PromptVariant, DEFAULT_MAX_MISSING_FRACTION, DEFAULT_MAX_RETRIES};
use crate::backend::{BackendConfig, MockSpec, RetryPolicy, DEFAULT_API_KEY_ENV};
use crate::dialogue::DEFAULT_MAX_TURNS;
use crate::exec::ExecMode;
use crate::persona::{BigFiveDim, LatentSampling};
use crate::social::RelationContext;
use crate::stats::DEFAULT_RESAMPLES;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    #[default]
    Mock,
    OpenAi,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockSettings {
    pub observer_noise: f64,
    pub self_noise: f64,
    pub end_turn: usize,
    pub context_bias: Vec<(RelationContext, BigFiveDim, f64)>,
}

impl Default for MockSettings {
    fn default() -> Self {
        let spec = MockSpec::default();
        MockSettings {
            observer_noise: spec.observer_noise,
            self_noise: spec.self_noise,
            end_turn: spec.end_turn,
            context_bias: spec.context_bias,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub n_subjects: usize,
    /// Observers per subject in Family, Friend, Workplace order.
    pub observers_per_context: [usize; 3],
    pub k_scenarios: usize,
    pub m_markers: usize,
    pub questionnaire: Option<PathBuf>,
    pub names: Option<PathBuf>,
    pub markers: Option<PathBuf>,
    pub variant: PromptVariant,
    pub latent_sampling: LatentSampling,
    pub relation_candidates: usize,
    pub max_turns: usize,
    pub item_retries: u32,
    pub generation_retries: u32,
    pub max_missing_fraction: f64,
    pub max_prompt_chars: usize,
    pub resamples: usize,
    pub bonferroni: bool,
    pub seed: u64,
    pub threads: Option<usize>,
    pub exec_mode: ExecMode,
    pub output: PathBuf,
    pub backend: BackendKind,
    pub api: BackendConfig,
    pub mock: MockSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            n_subjects: 100,
            observers_per_context: [5, 5, 5],
            k_scenarios: 5,
            m_markers: 3,
            questionnaire: None,
            names: None,
            markers: None,
            variant: PromptVariant::Default,
            latent_sampling: LatentSampling::Balanced,
            relation_candidates: 5,
            max_turns: DEFAULT_MAX_TURNS,
            item_retries: DEFAULT_MAX_RETRIES,
            generation_retries: 3,
            max_missing_fraction: DEFAULT_MAX_MISSING_FRACTION,
            max_prompt_chars: 300_000,
            resamples: DEFAULT_RESAMPLES,
            bonferroni: false,
            seed: 0,
            threads: None,
            exec_mode: ExecMode::Parallel,
            output: PathBuf::from("runs/default"),
            backend: BackendKind::Mock,
            api: BackendConfig::default(),
            mock: MockSettings::default(),
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse `{value}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.to_ascii_lowercase().as_str() {
        "true" | "yes" | "1" | "on" => Ok(true),
        "false" | "no" | "0" | "off" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected true or false, got `{value}`"))),
    }
}

fn optional_path(value: &str) -> Option<PathBuf> {
    if value.is_empty() || value == "builtin" {
        None
    } else {
        Some(PathBuf::from(value))
    }
}

/// `context:DIM:bias` entries separated by `;`, e.g. `workplace:CON:0.5`.
fn parse_context_bias(value: &str) -> Result<Vec<(RelationContext, BigFiveDim, f64)>> {
    value
        .split(';')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|entry| {
            let parts: Vec<&str> = entry.split(':').map(str::trim).collect();
            let [ctx, dim, bias] = parts[..] else {
                return Err(Error::Config(format!(
                    "mock_context_bias: `{entry}` is not context:DIM:bias"
                )));
            };
            let dim = BigFiveDim::from_code(dim)
                .ok_or_else(|| Error::Config(format!("mock_context_bias: unknown dimension `{dim}`")))?;
            Ok((ctx.parse()?, dim, parse("mock_context_bias", bias)?))
        })
        .collect()
}

fn format_context_bias(entries: &[(RelationContext, BigFiveDim, f64)]) -> String {
    entries
        .iter()
        .map(|(c, d, b)| format!("{}:{}:{b}", c.prompt_word(), d.code()))
        .collect::<Vec<_>>()
        .join(";")
}

fn path_string(p: &Option<PathBuf>) -> String {
    p.as_ref().map_or_else(|| "builtin".to_string(), |p| p.display().to_string())
}

impl RunConfig {
    pub fn total_observers(&self) -> usize {
        self.observers_per_context.iter().sum()
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.trim().replace('-', "_");
        let value = value.trim();
        let k = key.as_str();
        match k {
            "n_subjects" => self.n_subjects = parse(k, value)?,
            "observers_family" => self.observers_per_context[0] = parse(k, value)?,
            "observers_friend" => self.observers_per_context[1] = parse(k, value)?,
            "observers_workplace" => self.observers_per_context[2] = parse(k, value)?,
            "observers_per_context" => self.observers_per_context = [parse(k, value)?; 3],
            "k_scenarios" => self.k_scenarios = parse(k, value)?,
            "m_markers" => self.m_markers = parse(k, value)?,
            "questionnaire" => self.questionnaire = optional_path(value),
            "names" => self.names = optional_path(value),
            "markers" => self.markers = optional_path(value),
            "variant" => self.variant = parse(k, value)?,
            "latent_sampling" => {
                self.latent_sampling = match value {
                    "balanced" => LatentSampling::Balanced,
                    "uniform" => LatentSampling::Uniform,
                    _ => return Err(Error::Config(format!("latent_sampling: expected balanced or uniform, got `{value}`"))),
                }
            }
            "relation_candidates" => self.relation_candidates = parse(k, value)?,
            "max_turns" => self.max_turns = parse(k, value)?,
            "item_retries" => self.item_retries = parse(k, value)?,
            "generation_retries" => self.generation_retries = parse(k, value)?,
            "max_missing_fraction" => self.max_missing_fraction = parse(k, value)?,
            "max_prompt_chars" => self.max_prompt_chars = parse(k, value)?,
            "resamples" => self.resamples = parse(k, value)?,
            "bonferroni" => self.bonferroni = parse_bool(k, value)?,
            "seed" => self.seed = parse(k, value)?,
            "threads" => {
                self.threads = match value {
                    "" | "auto" => None,
                    v => Some(parse(k, v)?),
                }
            }
            "exec_mode" => {
                self.exec_mode = match value {
                    "parallel" => ExecMode::Parallel,
                    "sequential" => ExecMode::Sequential,
                    _ => return Err(Error::Config(format!("exec_mode: expected parallel or sequential, got `{value}`"))),
                }
            }
            "output" => self.output = PathBuf::from(value),
            "backend" => {
                self.backend = match value {
                    "mock" => BackendKind::Mock,
                    "openai" => BackendKind::OpenAi,
                    _ => return Err(Error::Config(format!("backend: expected mock or openai, got `{value}`"))),
                }
            }
            "endpoint" => self.api.endpoint = value.to_string(),
            "model" => self.api.model_name = value.to_string(),
            "api_key_env" => self.api.api_key_env = value.to_string(),
            "requests_per_minute" => self.api.requests_per_minute = parse(k, value)?,
            "max_attempts" => self.api.retry.max_attempts = parse(k, value)?,
            "initial_backoff_ms" => self.api.retry.initial_backoff = Duration::from_millis(parse(k, value)?),
            "max_backoff_ms" => self.api.retry.max_backoff = Duration::from_millis(parse(k, value)?),
            "timeout_secs" => self.api.timeout = Duration::from_secs(parse(k, value)?),
            "mock_observer_noise" => self.mock.observer_noise = parse(k, value)?,
            "mock_self_noise" => self.mock.self_noise = parse(k, value)?,
            "mock_end_turn" => self.mock.end_turn = parse(k, value)?,
            "mock_context_bias" => self.mock.context_bias = parse_context_bias(value)?,
            "api_key" | "openai_api_key" | "token" => {
                return Err(Error::Config(format!(
                    "`{k}` cannot be set in configuration; put the key in the environment variable named by api_key_env (default {DEFAULT_API_KEY_ENV})"
                )))
            }
            _ => return Err(Error::Config(format!("unknown setting `{k}`"))),
        }
        Ok(())
    }

    /// Parses `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("{origin}:{}: expected `key = value`", n + 1))
            })?;
            self.set(key, value)
                .map_err(|e| Error::Config(format!("{origin}:{}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        self.apply_text(&text, &path.display().to_string())
    }

    /// Every setting as `(key, value)` in a fixed order; parses back via [`RunConfig::set`].
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let retry: &RetryPolicy = &self.api.retry;
        vec![
            ("n_subjects", self.n_subjects.to_string()),
            ("observers_family", self.observers_per_context[0].to_string()),
            ("observers_friend", self.observers_per_context[1].to_string()),
            ("observers_workplace", self.observers_per_context[2].to_string()),
            ("k_scenarios", self.k_scenarios.to_string()),
            ("m_markers", self.m_markers.to_string()),
            ("questionnaire", path_string(&self.questionnaire)),
            ("names", path_string(&self.names)),
            ("markers", path_string(&self.markers)),
            ("variant", format!("{:?}", self.variant).to_lowercase()),
            (
                "latent_sampling",
                match self.latent_sampling {
                    LatentSampling::Uniform => "uniform".into(),
                    _ => "balanced".into(),
                },
            ),
            ("relation_candidates", self.relation_candidates.to_string()),
            ("max_turns", self.max_turns.to_string()),
            ("item_retries", self.item_retries.to_string()),
            ("generation_retries", self.generation_retries.to_string()),
            ("max_missing_fraction", self.max_missing_fraction.to_string()),
            ("max_prompt_chars", self.max_prompt_chars.to_string()),
            ("resamples", self.resamples.to_string()),
            ("bonferroni", self.bonferroni.to_string()),
            ("seed", self.seed.to_string()),
            ("threads", self.threads.map_or_else(|| "auto".into(), |t| t.to_string())),
            (
                "exec_mode",
                match self.exec_mode {
                    ExecMode::Parallel => "parallel".into(),
                    ExecMode::Sequential => "sequential".into(),
                },
            ),
            ("output", self.output.display().to_string()),
            (
                "backend",
                match self.backend {
                    BackendKind::Mock => "mock".into(),
                    BackendKind::OpenAi => "openai".into(),
                },
            ),
            ("endpoint", self.api.endpoint.clone()),
            ("model", self.api.model_name.clone()),
            ("api_key_env", self.api.api_key_env.clone()),
            ("requests_per_minute", self.api.requests_per_minute.to_string()),
            ("max_attempts", retry.max_attempts.to_string()),
            ("initial_backoff_ms", retry.initial_backoff.as_millis().to_string()),
            ("max_backoff_ms", retry.max_backoff.as_millis().to_string()),
            ("timeout_secs", self.api.timeout.as_secs().to_string()),
            ("mock_observer_noise", self.mock.observer_noise.to_string()),
            ("mock_self_noise", self.mock.self_noise.to_string()),
            ("mock_end_turn", self.mock.end_turn.to_string()),
            ("mock_context_bias", format_context_bias(&self.mock.context_bias)),
        ]
    }

    pub fn to_text(&self) -> String {
        self.entries()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    /// Settings that change generated artifacts. Resuming with different
    /// values is refused. Analysis-only and transport settings are left out.
    pub fn generation_entries(&self) -> Vec<(&'static str, String)> {
        const EXCLUDED: [&str; 12] = [
            "max_missing_fraction",
            "resamples",
            "bonferroni",
            "threads",
            "exec_mode",
            "output",
            "api_key_env",
            "requests_per_minute",
            "max_attempts",
            "initial_backoff_ms",
            "max_backoff_ms",
            "timeout_secs",
        ];
        let mut entries = self.entries();
        entries.retain(|(k, _)| !EXCLUDED.contains(k));
        if self.backend == BackendKind::OpenAi {
            entries.retain(|(k, _)| !k.starts_with("mock_"));
        }
        entries
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_subjects", self.n_subjects),
            ("observers_family", self.observers_per_context[0]),
            ("observers_friend", self.observers_per_context[1]),
            ("observers_workplace", self.observers_per_context[2]),
            ("k_scenarios", self.k_scenarios),
            ("m_markers", self.m_markers),
            ("relation_candidates", self.relation_candidates),
            ("resamples", self.resamples),
            ("max_prompt_chars", self.max_prompt_chars),
        ];
        for (key, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{key} must be at least 1")));
            }
        }
        if self.max_turns < 2 {
            return Err(Error::Config("max_turns must be at least 2".into()));
        }
        if !(0.0..=1.0).contains(&self.max_missing_fraction) {
            return Err(Error::Config("max_missing_fraction must be within [0, 1]".into()));
        }
        if self.threads == Some(0) {
            return Err(Error::Config("threads must be at least 1".into()));
        }
        if self.mock.observer_noise < 0.0 || self.mock.self_noise < 0.0 {
            return Err(Error::Config("mock noise must be non-negative".into()));
        }
        if self.backend == BackendKind::OpenAi {
            self.api
                .validate()
                .map_err(|e| Error::Config(e.to_string()))?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_the_study_design() {
        let c = RunConfig::default();
        assert_eq!(c.n_subjects, 100);
        assert_eq!(c.total_observers(), 15);
        assert_eq!(c.k_scenarios, 5);
        assert_eq!(c.m_markers, 3);
        c.validate().unwrap();
    }

    #[test]
    fn text_round_trip() {
        let mut c = RunConfig::default();
        c.apply_text(
            "# small run\nn_subjects = 7\nobservers_workplace=2\nvariant = reversed\nmock_context_bias = workplace:CON:0.5; family:AGR:-0.25\nthreads = 3\n",
            "test",
        )
        .unwrap();
        assert_eq!(c.n_subjects, 7);
        assert_eq!(c.observers_per_context, [5, 5, 2]);
        assert_eq!(c.variant, PromptVariant::Reversed);
        assert_eq!(c.mock.context_bias.len(), 2);
        let mut back = RunConfig::default();
        back.apply_text(&c.to_text(), "snapshot").unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn later_settings_override_earlier_ones() {
        let mut c = RunConfig::default();
        c.apply_text("seed = 1\n", "file").unwrap();
        c.set("seed", "9").unwrap();
        assert_eq!(c.seed, 9);
    }

    #[test]
    fn api_keys_are_rejected() {
        let mut c = RunConfig::default();
        let err = c.apply_text("api_key = sk-123\n", "file").unwrap_err();
        assert!(err.to_string().contains("environment variable"));
    }

    #[test]
    fn invalid_values() {
        let mut c = RunConfig::default();
        assert!(c.set("bogus", "1").is_err());
        assert!(c.set("n_subjects", "many").is_err());
        assert!(c.apply_text("n_subjects 5", "f").is_err());
        c.set("k_scenarios", "0").unwrap();
        assert!(c.validate().is_err());
    }

    #[test]
    fn transport_settings_do_not_change_generation_fingerprint() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.set("threads", "4").unwrap();
        b.set("resamples", "10").unwrap();
        b.set("output", "elsewhere").unwrap();
        assert_eq!(a.generation_entries(), b.generation_entries());
        b.set("k_scenarios", "2").unwrap();
        assert_ne!(a.generation_entries(), b.generation_entries());
    }
}
