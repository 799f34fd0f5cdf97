//! Agent profiles, latent Big Five levels and marker-based persona text.

use std::fmt;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::{seed, Error, Result};

const NAMES_CSV: &str = include_str!("../data/names.csv");
const MARKERS_CSV: &str = include_str!("../data/markers.csv");

pub const MIN_AGE: u32 = 15;
pub const MAX_AGE: u32 = 80;
pub const MIN_LEVEL: u8 = 1;
pub const MAX_LEVEL: u8 = 6;

/// The five Big Five dimensions in canonical order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum BigFiveDim {
    #[serde(rename = "OPE")]
    Openness,
    #[serde(rename = "CON")]
    Conscientiousness,
    #[serde(rename = "EXT")]
    Extraversion,
    #[serde(rename = "AGR")]
    Agreeableness,
    #[serde(rename = "NEU")]
    Neuroticism,
}

impl BigFiveDim {
    pub const ALL: [BigFiveDim; 5] = [
        BigFiveDim::Openness,
        BigFiveDim::Conscientiousness,
        BigFiveDim::Extraversion,
        BigFiveDim::Agreeableness,
        BigFiveDim::Neuroticism,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(index: usize) -> Option<Self> {
        Self::ALL.get(index).copied()
    }

    pub fn code(self) -> &'static str {
        match self {
            BigFiveDim::Openness => "OPE",
            BigFiveDim::Conscientiousness => "CON",
            BigFiveDim::Extraversion => "EXT",
            BigFiveDim::Agreeableness => "AGR",
            BigFiveDim::Neuroticism => "NEU",
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            BigFiveDim::Openness => "Openness",
            BigFiveDim::Conscientiousness => "Conscientiousness",
            BigFiveDim::Extraversion => "Extraversion",
            BigFiveDim::Agreeableness => "Agreeableness",
            BigFiveDim::Neuroticism => "Neuroticism",
        }
    }

    pub fn from_code(code: &str) -> Option<Self> {
        let code = code.trim();
        Self::ALL
            .into_iter()
            .find(|d| d.code().eq_ignore_ascii_case(code))
    }

    /// Finds the first trait named in free text, case-insensitively.
    ///
    /// Recognises the full trait names, common stems ("extroversion",
    /// "agreeable") and "emotional stability" as the neuroticism pole.
    pub fn find_in(text: &str) -> Option<Self> {
        const STEMS: [(&str, BigFiveDim); 10] = [
            ("openness", BigFiveDim::Openness),
            ("open to experience", BigFiveDim::Openness),
            ("conscientious", BigFiveDim::Conscientiousness),
            ("extraversion", BigFiveDim::Extraversion),
            ("extroversion", BigFiveDim::Extraversion),
            ("agreeable", BigFiveDim::Agreeableness),
            ("neurotic", BigFiveDim::Neuroticism),
            ("emotional stability", BigFiveDim::Neuroticism),
            ("extravert", BigFiveDim::Extraversion),
            ("extrovert", BigFiveDim::Extraversion),
        ];
        let lower = text.to_lowercase();
        STEMS
            .iter()
            .filter_map(|(stem, dim)| lower.find(stem).map(|pos| (pos, *dim)))
            .min_by_key(|(pos, _)| *pos)
            .map(|(_, dim)| dim)
    }
}

impl fmt::Display for BigFiveDim {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

/// One value per Big Five dimension, serialized as a map keyed by dimension code.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PerDim<T>(pub [T; 5]);

impl<T> PerDim<T> {
    pub fn from_fn(mut f: impl FnMut(BigFiveDim) -> T) -> Self {
        PerDim(BigFiveDim::ALL.map(&mut f))
    }

    pub fn iter(&self) -> impl Iterator<Item = (BigFiveDim, &T)> {
        BigFiveDim::ALL.into_iter().zip(self.0.iter())
    }

    pub fn map<U>(&self, mut f: impl FnMut(BigFiveDim, &T) -> U) -> PerDim<U> {
        PerDim::from_fn(|d| f(d, &self.0[d.index()]))
    }
}

impl<T> std::ops::Index<BigFiveDim> for PerDim<T> {
    type Output = T;

    fn index(&self, dim: BigFiveDim) -> &T {
        &self.0[dim.index()]
    }
}

impl<T> std::ops::IndexMut<BigFiveDim> for PerDim<T> {
    fn index_mut(&mut self, dim: BigFiveDim) -> &mut T {
        &mut self.0[dim.index()]
    }
}

#[derive(Serialize, Deserialize)]
#[allow(non_snake_case)]
struct PerDimRepr<T> {
    OPE: T,
    CON: T,
    EXT: T,
    AGR: T,
    NEU: T,
}

impl<T: Serialize + Clone> Serialize for PerDim<T> {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let [ope, con, ext, agr, neu] = self.0.clone();
        PerDimRepr {
            OPE: ope,
            CON: con,
            EXT: ext,
            AGR: agr,
            NEU: neu,
        }
        .serialize(s)
    }
}

impl<'de, T: Deserialize<'de>> Deserialize<'de> for PerDim<T> {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let r = PerDimRepr::<T>::deserialize(d)?;
        Ok(PerDim([r.OPE, r.CON, r.EXT, r.AGR, r.NEU]))
    }
}

/// Integer trait strengths, one per dimension, each in `1..=6`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "[u8; 5]", into = "[u8; 5]")]
pub struct LatentPersonality([u8; 5]);

impl LatentPersonality {
    pub fn new(levels: [u8; 5]) -> Result<Self> {
        if let Some(bad) = levels
            .iter()
            .find(|&&l| !(MIN_LEVEL..=MAX_LEVEL).contains(&l))
        {
            return Err(Error::Config(format!(
                "latent level {bad} outside [{MIN_LEVEL}, {MAX_LEVEL}]"
            )));
        }
        Ok(LatentPersonality(levels))
    }

    pub fn uniform(level: u8) -> Result<Self> {
        Self::new([level; 5])
    }

    pub fn level(&self, dim: BigFiveDim) -> u8 {
        self.0[dim.index()]
    }

    pub fn levels(&self) -> [u8; 5] {
        self.0
    }
}

impl TryFrom<[u8; 5]> for LatentPersonality {
    type Error = Error;

    fn try_from(levels: [u8; 5]) -> Result<Self> {
        LatentPersonality::new(levels)
    }
}

impl From<LatentPersonality> for [u8; 5] {
    fn from(p: LatentPersonality) -> Self {
        p.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Gender {
    Male,
    Female,
}

impl Gender {
    pub fn as_str(self) -> &'static str {
        match self {
            Gender::Male => "male",
            Gender::Female => "female",
        }
    }
}

impl std::str::FromStr for Gender {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "male" | "m" => Ok(Gender::Male),
            "female" | "f" => Ok(Gender::Female),
            other => Err(Error::Config(format!("unknown gender `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Subject,
    Observer,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgentProfile {
    pub agent_id: String,
    pub name: String,
    pub age: u32,
    pub gender: Gender,
    pub role: Role,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latent: Option<LatentPersonality>,
}

impl AgentProfile {
    /// Compact card used inside generation prompts: `{name: Ethan, age: 29, gender: male}`.
    pub fn card(&self) -> String {
        format!(
            "{{name: {}, age: {}, gender: {}}}",
            self.name,
            self.age,
            self.gender.as_str()
        )
    }

    pub fn validate(&self) -> Result<()> {
        if !(MIN_AGE..=MAX_AGE).contains(&self.age) {
            return Err(Error::Config(format!(
                "{}: age {} outside [{MIN_AGE}, {MAX_AGE}]",
                self.agent_id, self.age
            )));
        }
        match (self.role, self.latent) {
            (Role::Subject, None) => Err(Error::Config(format!(
                "{}: subject without latent personality",
                self.agent_id
            ))),
            (Role::Observer, Some(_)) => Err(Error::Config(format!(
                "{}: observer with latent personality",
                self.agent_id
            ))),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NameEntry {
    pub name: String,
    pub gender: Gender,
}

#[derive(Debug, Deserialize)]
struct NameRow {
    name: String,
    gender: String,
}

/// The shipped 100-entry name list (top 50 per gender).
pub fn default_names() -> Vec<NameEntry> {
    parse_names(NAMES_CSV.as_bytes(), Path::new("<builtin names.csv>"))
        .expect("builtin names.csv is valid")
}

pub fn load_names(path: &Path) -> Result<Vec<NameEntry>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_names(&bytes[..], path)
}

fn parse_names(bytes: &[u8], path: &Path) -> Result<Vec<NameEntry>> {
    let mut reader = csv::Reader::from_reader(bytes);
    let mut out = Vec::new();
    for row in reader.deserialize::<NameRow>() {
        let row = row.map_err(|source| Error::Csv {
            path: path.into(),
            source,
        })?;
        out.push(NameEntry {
            name: row.name.trim().to_string(),
            gender: row.gender.parse()?,
        });
    }
    if out.is_empty() {
        return Err(Error::Config(format!("{}: empty name list", path.display())));
    }
    Ok(out)
}

/// How subject latent levels are drawn across a population.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LatentSampling {
    /// Each consecutive block of six subjects covers every level once per
    /// dimension, shuffled independently per dimension.
    #[default]
    Balanced,
    Uniform,
    Fixed(LatentPersonality),
}

/// Latent levels for the subject at `index` (0-based) in a population.
pub fn sample_latent(master_seed: u64, index: usize, mode: LatentSampling) -> LatentPersonality {
    match mode {
        LatentSampling::Fixed(p) => p,
        LatentSampling::Uniform => {
            let mut rng = seed::derived_rng(master_seed, "latent", &index.to_string());
            uniform_latent(&mut rng)
        }
        LatentSampling::Balanced => {
            let span = usize::from(MAX_LEVEL);
            let block = index / span;
            let mut levels = [0u8; 5];
            for dim in BigFiveDim::ALL {
                let mut perm: Vec<u8> = (MIN_LEVEL..=MAX_LEVEL).collect();
                let mut rng = seed::derived_rng(
                    master_seed,
                    "latent-balanced",
                    &format!("{block}/{}", dim.code()),
                );
                perm.shuffle(&mut rng);
                levels[dim.index()] = perm[index % span];
            }
            LatentPersonality(levels)
        }
    }
}

fn uniform_latent<R: Rng>(rng: &mut R) -> LatentPersonality {
    let mut levels = [0u8; 5];
    for l in &mut levels {
        *l = rng.gen_range(MIN_LEVEL..=MAX_LEVEL);
    }
    LatentPersonality(levels)
}

/// Draws a random profile. Subjects get uniformly drawn latent levels;
/// see [`generate_profile_with_latent`] to supply them.
pub fn generate_profile(
    rng_seed: u64,
    agent_id: &str,
    role: Role,
    names: &[NameEntry],
) -> Result<AgentProfile> {
    let latent = match role {
        Role::Subject => Some(uniform_latent(&mut seed::derived_rng(
            rng_seed, "latent", agent_id,
        ))),
        Role::Observer => None,
    };
    build_profile(rng_seed, agent_id, role, names, latent)
}

pub fn generate_profile_with_latent(
    rng_seed: u64,
    agent_id: &str,
    names: &[NameEntry],
    latent: LatentPersonality,
) -> Result<AgentProfile> {
    build_profile(rng_seed, agent_id, Role::Subject, names, Some(latent))
}

fn build_profile(
    rng_seed: u64,
    agent_id: &str,
    role: Role,
    names: &[NameEntry],
    latent: Option<LatentPersonality>,
) -> Result<AgentProfile> {
    if names.is_empty() {
        return Err(Error::Config("name list is empty".into()));
    }
    let mut rng = seed::rng(rng_seed);
    let entry = &names[rng.gen_range(0..names.len())];
    let age = rng.gen_range(MIN_AGE..=MAX_AGE);
    Ok(AgentProfile {
        agent_id: agent_id.to_string(),
        name: entry.name.clone(),
        age,
        gender: entry.gender,
        role,
        latent,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MarkerPair {
    pub dimension: BigFiveDim,
    pub low: String,
    pub high: String,
}

impl MarkerPair {
    /// 1 "very low", 2 "low", 3 "a bit low", 4 "a bit high", 5 "high", 6 "very high".
    pub fn phrase(&self, level: u8) -> Result<String> {
        let phrase = match level {
            1 => format!("very {}", self.low),
            2 => self.low.clone(),
            3 => format!("a bit {}", self.low),
            4 => format!("a bit {}", self.high),
            5 => self.high.clone(),
            6 => format!("very {}", self.high),
            other => {
                return Err(Error::Config(format!(
                    "marker level {other} outside [{MIN_LEVEL}, {MAX_LEVEL}]"
                )))
            }
        };
        Ok(phrase)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MarkerLexicon {
    entries: Vec<MarkerPair>,
}

#[derive(Debug, Deserialize)]
struct MarkerRow {
    dimension: String,
    low: String,
    high: String,
}

impl MarkerLexicon {
    pub fn new(entries: Vec<MarkerPair>) -> Result<Self> {
        for dim in BigFiveDim::ALL {
            let pairs: Vec<&MarkerPair> = entries.iter().filter(|e| e.dimension == dim).collect();
            if pairs.is_empty() {
                return Err(Error::Config(format!("marker lexicon has no entries for {dim}")));
            }
            for (i, a) in pairs.iter().enumerate() {
                if a.low.trim().is_empty() || a.high.trim().is_empty() {
                    return Err(Error::Config(format!("empty marker adjective under {dim}")));
                }
                for b in &pairs[i + 1..] {
                    if a.low == b.low || a.high == b.high {
                        return Err(Error::Config(format!(
                            "duplicate marker adjective under {dim}: {}/{}",
                            a.low, a.high
                        )));
                    }
                }
            }
        }
        Ok(MarkerLexicon { entries })
    }

    /// The shipped 70-pair bipolar adjective lexicon.
    pub fn builtin() -> Self {
        Self::parse(MARKERS_CSV.as_bytes(), Path::new("<builtin markers.csv>"))
            .expect("builtin markers.csv is valid")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&bytes[..], path)
    }

    fn parse(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut reader = csv::Reader::from_reader(bytes);
        let mut entries = Vec::new();
        for row in reader.deserialize::<MarkerRow>() {
            let row = row.map_err(|source| Error::Csv {
                path: path.into(),
                source,
            })?;
            let dimension = BigFiveDim::from_code(&row.dimension).ok_or_else(|| {
                Error::Config(format!("{}: unknown dimension `{}`", path.display(), row.dimension))
            })?;
            entries.push(MarkerPair {
                dimension,
                low: row.low.trim().to_string(),
                high: row.high.trim().to_string(),
            });
        }
        Self::new(entries)
    }

    pub fn entries(&self) -> &[MarkerPair] {
        &self.entries
    }

    pub fn for_dim(&self, dim: BigFiveDim) -> impl Iterator<Item = &MarkerPair> {
        self.entries.iter().filter(move |e| e.dimension == dim)
    }
}

/// Picks `m` distinct adjective pairs for `dim` and renders them at `level`.
pub fn markers_for_level(
    lexicon: &MarkerLexicon,
    dim: BigFiveDim,
    level: u8,
    m: usize,
    rng_seed: u64,
) -> Result<Vec<String>> {
    let pairs: Vec<&MarkerPair> = lexicon.for_dim(dim).collect();
    if pairs.len() < m {
        return Err(Error::Config(format!(
            "marker lexicon has {} entries for {dim}, {m} requested",
            pairs.len()
        )));
    }
    let mut rng = seed::rng(rng_seed);
    pairs
        .choose_multiple(&mut rng, m)
        .map(|pair| pair.phrase(level))
        .collect()
}

/// Marker phrases for every dimension, in canonical dimension order.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PersonaMarkers(pub [Vec<String>; 5]);

impl PersonaMarkers {
    pub fn for_latent(
        lexicon: &MarkerLexicon,
        latent: &LatentPersonality,
        m: usize,
        rng_seed: u64,
    ) -> Result<Self> {
        let mut out: [Vec<String>; 5] = Default::default();
        for dim in BigFiveDim::ALL {
            let dim_seed = seed::derive(rng_seed, "markers", dim.code());
            out[dim.index()] = markers_for_level(lexicon, dim, latent.level(dim), m, dim_seed)?;
        }
        Ok(PersonaMarkers(out))
    }

    pub fn is_empty(&self) -> bool {
        self.0.iter().all(Vec::is_empty)
    }

    pub fn joined(&self) -> String {
        self.0
            .iter()
            .flatten()
            .map(String::as_str)
            .collect::<Vec<_>>()
            .join(", ")
    }
}

/// Wording of the agent instructions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InstructionVariant {
    #[default]
    Default,
    Neutral,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubjectInstruction {
    pub text: String,
    pub warnings: Vec<String>,
}

pub fn render_subject_instruction(
    profile: &AgentProfile,
    markers: &PersonaMarkers,
    variant: InstructionVariant,
) -> Result<SubjectInstruction> {
    if profile.role != Role::Subject {
        return Err(Error::Usage(format!(
            "{} is not a subject; observers carry no personality instruction",
            profile.agent_id
        )));
    }
    let mut warnings = Vec::new();
    if markers.is_empty() {
        warnings.push(format!("{}: personality marker slot is empty", profile.agent_id));
    }
    let joined = markers.joined();
    let text = match variant {
        InstructionVariant::Default => format!(
            "Your name is {}. You are a {}-year-old {}.\n\nYou have the following personality:\n{}.\nMake sure to reflect your personality traits in your response.",
            profile.name,
            profile.age,
            profile.gender.as_str(),
            joined
        ),
        InstructionVariant::Neutral => format!(
            "Imagine you are a {}-year-old {} named {} who have the following personality: \n{}.\nMake sure to reflect your personality traits in your response.",
            profile.age,
            profile.gender.as_str(),
            profile.name,
            joined
        ),
    };
    Ok(SubjectInstruction { text, warnings })
}

pub fn render_observer_instruction(profile: &AgentProfile, variant: InstructionVariant) -> String {
    match variant {
        InstructionVariant::Default => format!(
            "Your name is {}. You are a {}-year-old {}.",
            profile.name,
            profile.age,
            profile.gender.as_str()
        ),
        InstructionVariant::Neutral => format!(
            "Imagine you are a {}-year-old {} named {}.",
            profile.age,
            profile.gender.as_str(),
            profile.name
        ),
    }
}
