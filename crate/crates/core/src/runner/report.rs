//! Statistics tables and the plain-text run summary.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use super::config::RunConfig;
use super::pipeline::{Artifacts, Exclusion, SubjectRecord};
use crate::assess::{AnswerSheet, Rater, RatingVector};
use crate::dialogue::{DialogueTranscript, Termination};
use crate::exec::Executor;
use crate::persona::{BigFiveDim, PerDim};
use crate::seed;
use crate::social::RelationContext;
use crate::stats::{self, AggregatedReport, LatentScores, SubjectObservations, SIGNIFICANCE};
use crate::{Error, Result};

pub const CORRELATIONS: &str = "stats/correlations.csv";
pub const DEVIATION: &str = "stats/deviation.csv";
pub const CONVERGENCE: &str = "stats/convergence.csv";
pub const CONTEXT_DEVIATION: &str = "stats/context_deviation.csv";
pub const CONTEXT_PAIRS: &str = "stats/context_pairs.csv";
pub const LATENT_LEVELS: &str = "stats/latent_levels.csv";
pub const HUMAN_AGREEMENT: &str = "stats/human_agreement.csv";
pub const SUBJECT_SCORES: &str = "stats/subject_scores.csv";
pub const SUMMARY: &str = "report/summary.txt";

const DIMS: [&str; 5] = ["OPE", "CON", "EXT", "AGR", "NEU"];

/// Fixed six-decimal rendering; NaN is `NA`.
pub fn num(x: f64) -> String {
    if x.is_nan() {
        "NA".into()
    } else if x.is_infinite() {
        if x > 0.0 { "inf".into() } else { "-inf".into() }
    } else {
        let s = format!("{x:.6}");
        if s == "-0.000000" { "0.000000".into() } else { s }
    }
}

pub fn parse_num(s: &str) -> Option<f64> {
    match s.trim() {
        "NA" => Some(f64::NAN),
        "inf" => Some(f64::INFINITY),
        "-inf" => Some(f64::NEG_INFINITY),
        other => other.parse().ok(),
    }
}

fn csv_bytes(header: &[&str], rows: &[Vec<String>]) -> Vec<u8> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).expect("in-memory csv");
    for r in rows {
        w.write_record(r).expect("in-memory csv");
    }
    w.into_inner().expect("in-memory csv")
}

fn with_dims(lead: &[&'static str]) -> Vec<&'static str> {
    lead.iter().copied().chain(DIMS).collect()
}

fn dim_cells(v: &PerDim<f64>) -> impl Iterator<Item = String> + '_ {
    BigFiveDim::ALL.into_iter().map(move |d| num(v[d]))
}

/// A CSV file as header names plus rows keyed by header.
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<HashMap<String, String>>,
}

impl Table {
    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let mut r = csv::Reader::from_reader(&bytes[..]);
        let csv_err = |source| Error::Csv {
            path: path.into(),
            source,
        };
        let header: Vec<String> = r.headers().map_err(csv_err)?.iter().map(String::from).collect();
        let mut rows = Vec::new();
        for rec in r.records() {
            let rec = rec.map_err(csv_err)?;
            rows.push(header.iter().cloned().zip(rec.iter().map(String::from)).collect());
        }
        Ok(Table { header, rows })
    }

    pub fn find(&self, column: &str, value: &str) -> Option<&HashMap<String, String>> {
        self.rows.iter().find(|r| r.get(column).map(String::as_str) == Some(value))
    }
}

fn cell(row: &HashMap<String, String>, col: &str) -> f64 {
    row.get(col).and_then(|s| parse_num(s)).unwrap_or(f64::NAN)
}

pub struct StatsInputs {
    pub subjects: Vec<SubjectRecord>,
    pub self_scores: Vec<RatingVector>,
    pub observer_scores: Vec<RatingVector>,
    pub human_scores: Vec<RatingVector>,
}

fn mean_of(subject_id: &str, vs: &[&RatingVector]) -> AggregatedReport {
    let n = vs.len();
    AggregatedReport {
        subject_id: subject_id.into(),
        scores: PerDim::from_fn(|d| stats::mean(&vs.iter().map(|v| v.scores[d]).collect::<Vec<_>>())),
        n_observers: n,
        context: None,
    }
}

pub fn stats_tables(inputs: &StatsInputs, config: &RunConfig, exec: &Executor) -> Result<Artifacts> {
    let self_by: HashMap<&str, &RatingVector> =
        inputs.self_scores.iter().map(|v| (v.subject_id.as_str(), v)).collect();
    let mut obs_by: HashMap<&str, Vec<RatingVector>> = HashMap::new();
    for v in &inputs.observer_scores {
        obs_by.entry(v.subject_id.as_str()).or_default().push(v.clone());
    }
    for vs in obs_by.values_mut() {
        vs.sort_by(|a, b| rater_id(&a.rater).cmp(rater_id(&b.rater)));
    }
    let mut human_by: BTreeMap<&str, Vec<&RatingVector>> = BTreeMap::new();
    for v in &inputs.human_scores {
        human_by.entry(v.subject_id.as_str()).or_default().push(v);
    }

    let latent_of = |s: &SubjectRecord| {
        s.profile
            .latent
            .ok_or_else(|| Error::Config(format!("subject {} has no latent levels", s.profile.agent_id)))
    };

    // Analysed subjects: a scoreable self-report and at least one observer.
    let included: Vec<&SubjectRecord> = inputs
        .subjects
        .iter()
        .filter(|s| {
            let id = s.profile.agent_id.as_str();
            self_by.contains_key(id) && obs_by.contains_key(id)
        })
        .collect();
    let ids: Vec<&str> = included.iter().map(|s| s.profile.agent_id.as_str()).collect();
    let latent = included
        .iter()
        .map(|s| Ok(LatentScores::new(&s.profile.agent_id, &latent_of(s)?)))
        .collect::<Result<Vec<_>>>()?;
    let selfs: Vec<RatingVector> = ids.iter().map(|id| self_by[id].clone()).collect();
    let multi = ids
        .iter()
        .map(|id| stats::aggregate(&obs_by[id], None))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let human: Vec<AggregatedReport> = human_by
        .iter()
        .filter(|(id, _)| ids.contains(id))
        .map(|(id, vs)| mean_of(id, vs))
        .collect();

    let mut out: Artifacts = Vec::new();

    let mut rows = Vec::new();
    let mut corr_row = |label: &str, (rho, n): (PerDim<f64>, usize)| {
        rows.push([label.to_string(), n.to_string()].into_iter().chain(dim_cells(&rho)).collect());
    };
    corr_row("latent-self", stats::correlations(&latent, &selfs)?);
    corr_row("latent-observer", stats::correlations(&latent, &multi)?);
    corr_row("self-observer", stats::correlations(&selfs, &multi)?);
    let human_self = (!human.is_empty()).then(|| stats::human_agreement(&human, &selfs)).transpose()?;
    let human_obs = (!human.is_empty()).then(|| stats::human_agreement(&human, &multi)).transpose()?;
    let nan = PerDim([f64::NAN; 5]);
    corr_row("human-self", human_self.as_ref().map_or((nan, 0), |h| (h.rho, h.n)));
    corr_row("human-observer", human_obs.as_ref().map_or((nan, 0), |h| (h.rho, h.n)));
    out.push((CORRELATIONS.into(), csv_bytes(&with_dims(&["comparison", "n"]), &rows)));

    let deviation = match stats::deviation_table(&multi, &selfs) {
        Ok(t) => t,
        Err(stats::StatsError::Empty) => Vec::new(),
        Err(e) => return Err(e.into()),
    };
    let rows: Vec<Vec<String>> = deviation
        .iter()
        .map(|r| [r.label.clone(), r.n.to_string()].into_iter().chain(dim_cells(&r.values)).collect())
        .collect();
    out.push((DEVIATION.into(), csv_bytes(&with_dims(&["statistic", "n"]), &rows)));

    let mut rows = Vec::new();
    if included.len() >= 2 {
        let observations = included
            .iter()
            .map(|s| {
                let id = s.profile.agent_id.as_str();
                Ok(SubjectObservations {
                    subject_id: id.into(),
                    latent: latent_of(s)?,
                    self_scores: self_by[id].scores,
                    observers: obs_by[id].iter().map(|v| v.scores).collect(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let n_max = observations.iter().map(|o| o.observers.len()).min().unwrap_or(0);
        let curve = stats::convergence_curve(
            &observations,
            n_max,
            config.resamples,
            seed::derive(config.seed, "convergence", "curve"),
            exec,
        )?;
        for p in curve {
            rows.push(vec![p.dimension.code().into(), p.n.to_string(), num(p.rho_latent), num(p.rho_self)]);
        }
    }
    out.push((CONVERGENCE.into(), csv_bytes(&["dimension", "n", "rho_latent", "rho_self"], &rows)));

    // Context analysis needs observers from every context for a subject.
    let full: Vec<RatingVector> = selfs
        .iter()
        .filter(|s| {
            let have = &obs_by[s.subject_id.as_str()];
            RelationContext::ALL.iter().all(|c| have.iter().any(|v| v.context == Some(*c)))
        })
        .cloned()
        .collect();
    let mut dev_rows = Vec::new();
    let mut pair_rows = Vec::new();
    if !full.is_empty() {
        let observers: Vec<RatingVector> = full
            .iter()
            .flat_map(|s| obs_by[s.subject_id.as_str()].iter().cloned())
            .collect();
        let b = stats::context_breakdown(&observers, &full, config.bonferroni)?;
        for d in &b.deviations {
            let x = &d.deviation;
            dev_rows.push(vec![
                format!("{:?}", d.context).to_lowercase(),
                d.dimension.code().into(),
                x.n.to_string(),
                num(x.mean),
                num(x.min),
                num(x.q1),
                num(x.median),
                num(x.q3),
                num(x.max),
            ]);
        }
        for p in &b.pairs {
            pair_rows.push(vec![
                format!("{:?}", p.a).to_lowercase(),
                format!("{:?}", p.b).to_lowercase(),
                p.dimension.code().into(),
                full.len().to_string(),
                num(p.mean_diff),
                num(p.t),
                num(p.df),
                num(p.p),
                num(p.p_adjusted),
                p.significant.to_string(),
            ]);
        }
    }
    out.push((
        CONTEXT_DEVIATION.into(),
        csv_bytes(&["context", "dimension", "n", "mean", "min", "q1", "median", "q3", "max"], &dev_rows),
    ));
    out.push((
        CONTEXT_PAIRS.into(),
        csv_bytes(
            &["context_a", "context_b", "dimension", "n", "mean_diff", "t", "df", "p", "p_adjusted", "significant"],
            &pair_rows,
        ),
    ));

    let rows: Vec<Vec<String>> = stats::level_profile(&latent, &multi, &selfs)?
        .iter()
        .map(|l| {
            let o = &l.observer;
            vec![
                l.dimension.code().into(),
                l.level.to_string(),
                o.n.to_string(),
                num(o.mean),
                num(o.min),
                num(o.q1),
                num(o.median),
                num(o.q3),
                num(o.max),
                num(l.self_mean),
            ]
        })
        .collect();
    out.push((
        LATENT_LEVELS.into(),
        csv_bytes(
            &[
                "dimension",
                "level",
                "n",
                "observer_mean",
                "observer_min",
                "observer_q1",
                "observer_median",
                "observer_q3",
                "observer_max",
                "self_mean",
            ],
            &rows,
        ),
    ));

    let mut header = vec!["metric".to_string(), "model".into(), "n".into()];
    for d in DIMS {
        header.push(format!("{d}_self"));
        header.push(format!("{d}_observer"));
    }
    let mut rows = Vec::new();
    if let (Some(hs), Some(ho)) = (&human_self, &human_obs) {
        let model = if config.backend == super::config::BackendKind::Mock { "mock" } else { &config.api.model_name };
        for (metric, s, o) in [("mean_abs_diff", &hs.mean_abs_diff, &ho.mean_abs_diff), ("spearman", &hs.rho, &ho.rho)] {
            let mut r = vec![metric.to_string(), model.to_string(), hs.n.to_string()];
            for d in BigFiveDim::ALL {
                r.push(num(s[d]));
                r.push(num(o[d]));
            }
            rows.push(r);
        }
    }
    let header_refs: Vec<&str> = header.iter().map(String::as_str).collect();
    out.push((HUMAN_AGREEMENT.into(), csv_bytes(&header_refs, &rows)));

    let mut rows = Vec::new();
    for s in &inputs.subjects {
        let id = s.profile.agent_id.as_str();
        let mut push = |source: String, n: usize, v: &PerDim<f64>| {
            rows.push([id.to_string(), source, n.to_string()].into_iter().chain(dim_cells(v)).collect());
        };
        push("latent".into(), 0, &LatentScores::new(id, &latent_of(s)?).scores);
        if let Some(v) = self_by.get(id) {
            push("self".into(), 1, &v.scores);
        }
        if let Some(vs) = obs_by.get(id) {
            let a = stats::aggregate(vs, None)?;
            push("observer".into(), a.n_observers, &a.scores);
            for ctx in RelationContext::ALL {
                if let Ok(a) = stats::aggregate(vs, Some(ctx)) {
                    push(format!("observer:{}", format!("{ctx:?}").to_lowercase()), a.n_observers, &a.scores);
                }
            }
        }
        if let Some(vs) = human_by.get(id) {
            let a = mean_of(id, vs);
            push("human".into(), a.n_observers, &a.scores);
        }
    }
    out.push((SUBJECT_SCORES.into(), csv_bytes(&with_dims(&["subject_id", "source", "n_raters"]), &rows)));

    Ok(out)
}

fn rater_id(r: &Rater) -> &str {
    match r {
        Rater::SelfReport => "",
        Rater::Observer(id) | Rater::Human(id) => id,
    }
}

fn fmt2(x: f64) -> String {
    if x.is_nan() {
        "NA".into()
    } else {
        let s = format!("{x:.2}");
        if s == "-0.00" { "0.00".into() } else { s }
    }
}

fn dim_header(out: &mut String, label_width: usize) {
    let _ = write!(out, "{:label_width$}", "");
    for d in DIMS {
        let _ = write!(out, "{d:>8}");
    }
    out.push('\n');
}

fn dim_line(out: &mut String, label: &str, label_width: usize, cells: impl IntoIterator<Item = String>) {
    let _ = write!(out, "{label:label_width$}");
    for c in cells {
        let _ = write!(out, "{c:>8}");
    }
    out.push('\n');
}

fn row_values(row: &HashMap<String, String>) -> PerDim<f64> {
    PerDim::from_fn(|d| cell(row, d.code()))
}

/// Human-readable summary of a finished run: correlation, deviation,
/// context and convergence tables. Contains no timestamps or paths so
/// identical runs give identical bytes.
pub fn summary(
    root: &Path,
    config: &RunConfig,
    dialogues: &[DialogueTranscript],
    observer_sheets: &[AnswerSheet],
    excluded: &[Exclusion],
) -> Result<String> {
    let read = |rel: &str| {
        let path = root.join(rel);
        if !path.exists() {
            return Err(Error::MissingStage {
                stage: "stats".into(),
                detail: format!("{} is missing", path.display()),
            });
        }
        Table::read(&path)
    };
    let correlations = read(CORRELATIONS)?;
    let deviation = read(DEVIATION)?;
    let convergence = read(CONVERGENCE)?;
    let context = read(CONTEXT_DEVIATION)?;
    let pairs = read(CONTEXT_PAIRS)?;
    let human = read(HUMAN_AGREEMENT)?;

    let mut s = String::new();
    let [fam, fri, work] = config.observers_per_context;
    let model = match config.backend {
        super::config::BackendKind::Mock => "mock".to_string(),
        super::config::BackendKind::OpenAi => config.api.model_name.clone(),
    };
    let analysed = correlations.find("comparison", "latent-self").map_or(0.0, |r| cell(r, "n"));
    let _ = writeln!(s, "Multi-observer Big Five assessment");
    let _ = writeln!(s);
    let variant = format!("{:?}", config.variant).to_lowercase();
    let _ = writeln!(s, "model: {model}   prompt variant: {variant}   seed: {}", config.seed);
    let _ = writeln!(s, "subjects: {} ({analysed} analysed)", config.n_subjects);
    let _ = writeln!(
        s,
        "observers per subject: {} (family {fam}, friend {fri}, workplace {work})",
        config.total_observers()
    );
    let _ = writeln!(s, "scenarios per observer: {}", config.k_scenarios);

    let count = |t: Termination| dialogues.iter().filter(|d| d.termination == t).count();
    let turns: usize = dialogues.iter().map(|d| d.turn_count).sum();
    let violations: usize = dialogues.iter().map(|d| d.protocol_violations).sum();
    let _ = writeln!(
        s,
        "dialogues: {} (mutual end {}, turn cap {}, backend error {}), mean turns {}, protocol violations {violations}",
        dialogues.len(),
        count(Termination::MutualEnd),
        count(Termination::TurnCap),
        count(Termination::BackendError),
        fmt2(turns as f64 / dialogues.len().max(1) as f64),
    );
    let truncated = observer_sheets.iter().filter(|x| x.truncated_scenarios > 0).count();
    let retries: u32 = observer_sheets.iter().map(|x| x.retries).sum();
    let _ = writeln!(
        s,
        "observer sheets: {} ({truncated} with truncated dialogue history, {retries} item re-prompts)",
        observer_sheets.len()
    );
    let _ = writeln!(s, "excluded sheets: {}", excluded.len());
    for e in excluded {
        let who = match &e.rater {
            Rater::SelfReport => "self-report".to_string(),
            Rater::Observer(id) => format!("observer {id}"),
            Rater::Human(id) => format!("human {id}"),
        };
        let _ = writeln!(s, "  {who} on {}: {}", e.subject_id, e.reason);
    }

    let _ = writeln!(s, "\nSpearman's rank correlations");
    dim_header(&mut s, 20);
    for (label, show) in [
        ("latent-self", true),
        ("latent-observer", true),
        ("self-observer", true),
        ("human-self", !human.rows.is_empty()),
        ("human-observer", !human.rows.is_empty()),
    ] {
        if let (true, Some(r)) = (show, correlations.find("comparison", label)) {
            dim_line(&mut s, label, 20, dim_cells2(&row_values(r)));
        }
    }

    let n = deviation.rows.first().map_or(0.0, |r| cell(r, "n"));
    let _ = writeln!(s, "\nSelf/observer deviation (observer minus self), n = {n}");
    dim_header(&mut s, 20);
    if let (Some(dev), Some(p)) = (deviation.find("statistic", "mean_deviation"), deviation.find("statistic", "p")) {
        let (dev, p) = (row_values(dev), row_values(p));
        let cells = BigFiveDim::ALL.map(|d| {
            let star = if p[d] < SIGNIFICANCE { "*" } else { "" };
            format!("{}{star}", fmt2(dev[d]))
        });
        dim_line(&mut s, "Mean Deviation", 20, cells);
    }
    for (stat, label) in [("cohens_d", "Cohen's d (LLM)"), ("t", "t"), ("p", "p")] {
        if let Some(r) = deviation.find("statistic", stat) {
            let v = row_values(r);
            let cells = if stat == "p" {
                BigFiveDim::ALL.map(|d| if v[d].is_nan() { "NA".into() } else { format!("{:.4}", v[d]) }).to_vec()
            } else {
                dim_cells2(&v)
            };
            dim_line(&mut s, label, 20, cells);
        }
    }
    let _ = writeln!(s, "* p < {SIGNIFICANCE} (paired t-test)");

    if !context.rows.is_empty() {
        let _ = writeln!(s, "\nMean deviation by relationship context");
        dim_header(&mut s, 20);
        for ctx in RelationContext::ALL {
            let name = format!("{ctx:?}").to_lowercase();
            let cells = BigFiveDim::ALL.map(|d| {
                context
                    .rows
                    .iter()
                    .find(|r| r["context"] == name && r["dimension"] == d.code())
                    .map_or("NA".into(), |r| fmt2(cell(r, "mean")))
            });
            dim_line(&mut s, &format!("{ctx:?}"), 20, cells);
        }
        let adj = if config.bonferroni { ", Bonferroni x3" } else { "" };
        let _ = writeln!(s, "Significant context differences (p < {SIGNIFICANCE}{adj}):");
        let sig: Vec<_> = pairs.rows.iter().filter(|r| r["significant"] == "true").collect();
        if sig.is_empty() {
            let _ = writeln!(s, "  none");
        }
        for r in sig {
            let _ = writeln!(
                s,
                "  {} vs {} on {}: mean difference {}, p = {:.4}",
                r["context_a"],
                r["context_b"],
                r["dimension"],
                fmt2(cell(r, "mean_diff")),
                cell(r, "p_adjusted")
            );
        }
    }

    if !convergence.rows.is_empty() {
        let _ = writeln!(
            s,
            "\nMean Spearman rho by number of observers ({} resamples per point)",
            config.resamples
        );
        for (col, title) in [("rho_latent", "against latent levels"), ("rho_self", "against self-reports")] {
            let _ = writeln!(s, "{title}");
            let _ = write!(s, "{:>4}", "n");
            for d in DIMS {
                let _ = write!(s, "{d:>8}");
            }
            s.push('\n');
            let mut ns: Vec<usize> = convergence.rows.iter().filter_map(|r| r["n"].parse().ok()).collect();
            ns.sort_unstable();
            ns.dedup();
            for n in ns {
                let _ = write!(s, "{n:>4}");
                for d in DIMS {
                    let v = convergence
                        .rows
                        .iter()
                        .find(|r| r["dimension"] == d && r["n"] == n.to_string())
                        .map_or(f64::NAN, |r| cell(r, col));
                    let _ = write!(s, "{:>8}", fmt2(v));
                }
                s.push('\n');
            }
        }
    }

    if !human.rows.is_empty() {
        let _ = writeln!(s, "\nAgreement with human ratings");
        let _ = write!(s, "{:20}", "");
        for d in DIMS {
            let _ = write!(s, "{:>16}", format!("{d} self/obs"));
        }
        s.push('\n');
        for (metric, label) in [("mean_abs_diff", "mean |difference|"), ("spearman", "Spearman")] {
            if let Some(r) = human.find("metric", metric) {
                let _ = write!(s, "{label:20}");
                for d in DIMS {
                    let pair = format!(
                        "{:.3} / {:.3}",
                        cell(r, &format!("{d}_self")),
                        cell(r, &format!("{d}_observer"))
                    );
                    let _ = write!(s, "{pair:>16}");
                }
                s.push('\n');
            }
        }
    }
    Ok(s)
}

fn dim_cells2(v: &PerDim<f64>) -> Vec<String> {
    BigFiveDim::ALL.iter().map(|d| fmt2(v[*d])).collect()
}
