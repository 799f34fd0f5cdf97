//! Aggregation and the analysis suite.
//!
//! Deviations are always observer minus self. Undefined statistics (constant
//! inputs, too few subjects) surface as [`StatsError`] from the primitive
//! functions and as NaN cells in the report tables.

use std::collections::{BTreeMap, HashMap};

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::assess::{Rater, RatingVector};
use crate::exec::Executor;
use crate::persona::{BigFiveDim, LatentPersonality, PerDim};
use crate::seed;
use crate::social::RelationContext;

pub const DEFAULT_RESAMPLES: usize = 200;
pub const SIGNIFICANCE: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum StatsError {
    #[error("no observations")]
    Empty,
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("need at least {min} observations, got {n}")]
    TooFew { n: usize, min: usize },
    #[error("correlation undefined: an input is constant")]
    ConstantInput,
    #[error("degenerate variance: standard deviation is zero")]
    DegenerateVariance,
    #[error("pairing error: {0}")]
    Pairing(String),
    #[error("no {0} observers for subject {1}")]
    MissingContext(RelationContext, String),
    #[error("subject {subject_id} has {have} observer reports, need {need}")]
    InsufficientObservers {
        subject_id: String,
        have: usize,
        need: usize,
    },
    #[error("non-finite value in input")]
    NonFinite,
}

type Result<T> = std::result::Result<T, StatsError>;

fn check_finite(xs: &[f64]) -> Result<()> {
    if xs.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(StatsError::NonFinite)
    }
}

/// Shifted by the first element, so a constant sample gives back that
/// constant exactly.
pub fn mean(xs: &[f64]) -> f64 {
    let Some(&x0) = xs.first() else {
        return f64::NAN;
    };
    x0 + xs.iter().map(|x| x - x0).sum::<f64>() / xs.len() as f64
}

/// Sample variance with the n - 1 denominator.
pub fn sample_variance(xs: &[f64]) -> f64 {
    let m = mean(xs);
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() as f64 - 1.0)
}

/// 1-based ranks; tied values share the average of their positions.
pub fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(StatsError::LengthMismatch {
            left: x.len(),
            right: y.len(),
        });
    }
    if x.len() < 2 {
        return Err(StatsError::TooFew { n: x.len(), min: 2 });
    }
    check_finite(x)?;
    check_finite(y)?;
    let (mx, my) = (mean(x), mean(y));
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(StatsError::ConstantInput);
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Spearman's rho: Pearson correlation of average ranks.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(StatsError::LengthMismatch {
            left: x.len(),
            right: y.len(),
        });
    }
    check_finite(x)?;
    check_finite(y)?;
    pearson(&average_ranks(x), &average_ranks(y))
}

const LANCZOS: [f64; 9] = [
    0.999_999_999_999_809_9,
    676.520_368_121_885_1,
    -1_259.139_216_722_402_8,
    771.323_428_777_653_1,
    -176.615_029_162_140_6,
    12.507_343_278_686_905,
    -0.138_571_095_265_720_12,
    9.984_369_578_019_572e-6,
    1.505_632_735_149_311_6e-7,
];

/// Natural log of the gamma function for x > 0.
pub fn ln_gamma(x: f64) -> f64 {
    if x < 0.5 {
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = LANCZOS[0];
    let t = x + 7.5;
    for (i, c) in LANCZOS.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

/// Continued fraction for the incomplete beta function (modified Lentz).
fn beta_cf(a: f64, b: f64, x: f64) -> f64 {
    const TINY: f64 = 1e-300;
    const EPS: f64 = 1e-16;
    let qab = a + b;
    let qap = a + 1.0;
    let qam = a - 1.0;
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=10_000 {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < EPS {
            break;
        }
    }
    h
}

/// Regularized incomplete beta function I_x(a, b).
pub fn reg_inc_beta(a: f64, b: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_front =
        ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln();
    if x < (a + 1.0) / (a + b + 2.0) {
        ln_front.exp() * beta_cf(a, b, x) / a
    } else {
        1.0 - ln_front.exp() * beta_cf(b, a, 1.0 - x) / b
    }
}

/// Two-tailed p-value of Student's t with `df` degrees of freedom.
pub fn student_t_two_tailed(t: f64, df: f64) -> f64 {
    if t.is_nan() {
        return f64::NAN;
    }
    if t.is_infinite() {
        return 0.0;
    }
    reg_inc_beta(df / 2.0, 0.5, df / (df + t * t)).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairedT {
    pub n: usize,
    pub mean: f64,
    pub sd: f64,
    pub t: f64,
    pub df: f64,
    pub p: f64,
}

/// One-sample t-test of paired differences against zero.
pub fn paired_t(diffs: &[f64]) -> Result<PairedT> {
    if diffs.len() < 2 {
        return Err(StatsError::TooFew {
            n: diffs.len(),
            min: 2,
        });
    }
    check_finite(diffs)?;
    let n = diffs.len();
    let m = mean(diffs);
    let sd = sample_variance(diffs).sqrt();
    if sd == 0.0 {
        return Err(StatsError::DegenerateVariance);
    }
    let t = m / (sd / (n as f64).sqrt());
    let df = (n - 1) as f64;
    Ok(PairedT {
        n,
        mean: m,
        sd,
        t,
        df,
        p: student_t_two_tailed(t, df),
    })
}

/// Cohen's d with the pooled sample standard deviation.
pub fn cohens_d(a: &[f64], b: &[f64]) -> Result<f64> {
    for g in [a, b] {
        if g.len() < 2 {
            return Err(StatsError::TooFew { n: g.len(), min: 2 });
        }
        check_finite(g)?;
    }
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let pooled =
        (((na - 1.0) * sample_variance(a) + (nb - 1.0) * sample_variance(b)) / (na + nb - 2.0)).sqrt();
    if pooled == 0.0 {
        return Err(StatsError::DegenerateVariance);
    }
    Ok((mean(a) - mean(b)) / pooled)
}

/// Sample quantile with linear interpolation between order statistics
/// (R's type 7). `sorted` must be ascending and non-empty.
pub fn quantile(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Anything carrying one score vector for one subject.
pub trait Scored {
    fn subject_id(&self) -> &str;
    fn scores(&self) -> &PerDim<f64>;
}

impl Scored for RatingVector {
    fn subject_id(&self) -> &str {
        &self.subject_id
    }
    fn scores(&self) -> &PerDim<f64> {
        &self.scores
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregatedReport {
    pub subject_id: String,
    pub scores: PerDim<f64>,
    pub n_observers: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub context: Option<RelationContext>,
}

impl Scored for AggregatedReport {
    fn subject_id(&self) -> &str {
        &self.subject_id
    }
    fn scores(&self) -> &PerDim<f64> {
        &self.scores
    }
}

fn mean_scores<'a>(vectors: impl Iterator<Item = &'a PerDim<f64>>) -> (PerDim<f64>, usize) {
    let vs: Vec<&PerDim<f64>> = vectors.collect();
    let m = PerDim::from_fn(|dim| mean(&vs.iter().map(|v| v[dim]).collect::<Vec<_>>()));
    (m, vs.len())
}

/// Mean observer vector for one subject, optionally restricted to one context.
pub fn aggregate(
    reports: &[RatingVector],
    context_filter: Option<RelationContext>,
) -> Result<AggregatedReport> {
    let first = reports.first().ok_or(StatsError::Empty)?;
    for r in reports {
        if r.subject_id != first.subject_id {
            return Err(StatsError::Pairing(format!(
                "reports for {} and {} cannot be aggregated together",
                first.subject_id, r.subject_id
            )));
        }
        if !matches!(r.rater, Rater::Observer(_)) {
            return Err(StatsError::Pairing(format!(
                "only observer reports aggregate; got {:?} for {}",
                r.rater, r.subject_id
            )));
        }
    }
    let selected: Vec<&RatingVector> = reports
        .iter()
        .filter(|r| context_filter.is_none() || r.context == context_filter)
        .collect();
    if selected.is_empty() {
        return Err(match context_filter {
            Some(c) => StatsError::MissingContext(c, first.subject_id.clone()),
            None => StatsError::Empty,
        });
    }
    let (scores, n) = mean_scores(selected.iter().map(|r| &r.scores));
    Ok(AggregatedReport {
        subject_id: first.subject_id.clone(),
        scores,
        n_observers: n,
        context: context_filter,
    })
}

/// Pairs two score lists by subject id, in the order of `left`.
pub fn pair_by_subject<'a, A: Scored, B: Scored>(
    left: &'a [A],
    right: &'a [B],
) -> Result<Vec<(&'a PerDim<f64>, &'a PerDim<f64>)>> {
    if left.len() != right.len() {
        return Err(StatsError::Pairing(format!(
            "{} subjects on one side, {} on the other",
            left.len(),
            right.len()
        )));
    }
    let mut by_id: HashMap<&str, &PerDim<f64>> = HashMap::with_capacity(right.len());
    for r in right {
        if by_id.insert(r.subject_id(), r.scores()).is_some() {
            return Err(StatsError::Pairing(format!("subject {} appears twice", r.subject_id())));
        }
    }
    left.iter()
        .map(|l| {
            by_id
                .get(l.subject_id())
                .map(|r| (l.scores(), *r))
                .ok_or_else(|| StatsError::Pairing(format!("subject {} has no partner", l.subject_id())))
        })
        .collect()
}

fn column(pairs: &[(&PerDim<f64>, &PerDim<f64>)], dim: BigFiveDim) -> (Vec<f64>, Vec<f64>) {
    pairs.iter().map(|(a, b)| (a[dim], b[dim])).unzip()
}

/// Per-dimension mean of (aggregated observer - self) over subjects.
pub fn mean_deviation(multi: &[AggregatedReport], self_reports: &[RatingVector]) -> Result<PerDim<f64>> {
    let pairs = pair_by_subject(multi, self_reports)?;
    if pairs.is_empty() {
        return Err(StatsError::Empty);
    }
    Ok(PerDim::from_fn(|dim| {
        let (m, s) = column(&pairs, dim);
        let diffs: Vec<f64> = m.iter().zip(&s).map(|(a, b)| a - b).collect();
        mean(&diffs)
    }))
}

/// One labelled row of per-dimension statistics; NaN marks an undefined cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatResult {
    pub label: String,
    pub values: PerDim<f64>,
    pub n: usize,
}

impl StatResult {
    fn new(label: &str, values: PerDim<f64>, n: usize) -> Self {
        StatResult {
            label: label.to_string(),
            values,
            n,
        }
    }
}

/// Self/observer deviation table: mean deviation, paired t, df, p and Cohen's d.
pub fn deviation_table(multi: &[AggregatedReport], self_reports: &[RatingVector]) -> Result<Vec<StatResult>> {
    let pairs = pair_by_subject(multi, self_reports)?;
    if pairs.is_empty() {
        return Err(StatsError::Empty);
    }
    let n = pairs.len();
    let mut dev = PerDim([f64::NAN; 5]);
    let mut t = PerDim([f64::NAN; 5]);
    let mut df = PerDim([f64::NAN; 5]);
    let mut p = PerDim([f64::NAN; 5]);
    let mut d = PerDim([f64::NAN; 5]);
    for dim in BigFiveDim::ALL {
        let (m, s) = column(&pairs, dim);
        let diffs: Vec<f64> = m.iter().zip(&s).map(|(a, b)| a - b).collect();
        dev[dim] = mean(&diffs);
        if let Ok(r) = paired_t(&diffs) {
            t[dim] = r.t;
            df[dim] = r.df;
            p[dim] = r.p;
        }
        if let Ok(v) = cohens_d(&m, &s) {
            d[dim] = v;
        }
    }
    Ok(vec![
        StatResult::new("mean_deviation", dev, n),
        StatResult::new("t", t, n),
        StatResult::new("df", df, n),
        StatResult::new("p", p, n),
        StatResult::new("cohens_d", d, n),
    ])
}

/// Spearman rho per dimension between two paired score lists; NaN where undefined.
pub fn correlations<A: Scored, B: Scored>(left: &[A], right: &[B]) -> Result<(PerDim<f64>, usize)> {
    let pairs = pair_by_subject(left, right)?;
    Ok((
        PerDim::from_fn(|dim| {
            let (a, b) = column(&pairs, dim);
            spearman(&a, &b).unwrap_or(f64::NAN)
        }),
        pairs.len(),
    ))
}

/// Latent levels as a score vector, so they pair like any other rating.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentScores {
    pub subject_id: String,
    pub scores: PerDim<f64>,
}

impl LatentScores {
    pub fn new(subject_id: impl Into<String>, latent: &LatentPersonality) -> Self {
        LatentScores {
            subject_id: subject_id.into(),
            scores: PerDim::from_fn(|d| f64::from(latent.level(d))),
        }
    }
}

impl Scored for LatentScores {
    fn subject_id(&self) -> &str {
        &self.subject_id
    }
    fn scores(&self) -> &PerDim<f64> {
        &self.scores
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HumanAgreement {
    pub mean_abs_diff: PerDim<f64>,
    pub rho: PerDim<f64>,
    pub n: usize,
}

/// Mean |human - machine| and Spearman rho per dimension, paired by subject.
pub fn human_agreement<H: Scored, M: Scored>(human: &[H], machine: &[M]) -> Result<HumanAgreement> {
    if human.is_empty() {
        return Err(StatsError::Empty);
    }
    let mut by_id: HashMap<&str, &PerDim<f64>> = HashMap::new();
    for m in machine {
        by_id.insert(m.subject_id(), m.scores());
    }
    let pairs: Vec<(&PerDim<f64>, &PerDim<f64>)> = human
        .iter()
        .map(|h| {
            by_id
                .get(h.subject_id())
                .map(|m| (h.scores(), *m))
                .ok_or_else(|| StatsError::Pairing(format!("no machine rating for subject {}", h.subject_id())))
        })
        .collect::<Result<_>>()?;
    let n = pairs.len();
    Ok(HumanAgreement {
        mean_abs_diff: PerDim::from_fn(|dim| {
            pairs.iter().map(|(h, m)| (h[dim] - m[dim]).abs()).sum::<f64>() / n as f64
        }),
        rho: PerDim::from_fn(|dim| {
            let (h, m) = column(&pairs, dim);
            spearman(&h, &m).unwrap_or(f64::NAN)
        }),
        n,
    })
}

/// Everything the convergence analysis needs about one subject.
#[derive(Debug, Clone, PartialEq)]
pub struct SubjectObservations {
    pub subject_id: String,
    pub latent: LatentPersonality,
    pub self_scores: PerDim<f64>,
    /// Observer vectors in a stable order (by observer id).
    pub observers: Vec<PerDim<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConvergencePoint {
    pub dimension: BigFiveDim,
    pub n: usize,
    pub rho_latent: f64,
    pub rho_self: f64,
    /// Resamples where rho was defined; the means average only those.
    pub defined_latent: usize,
    pub defined_self: usize,
}

/// Mean Spearman rho against latent levels and self-reports when each
/// subject's score is the mean of `n` randomly drawn observers.
pub fn convergence_curve(
    subjects: &[SubjectObservations],
    n_max: usize,
    resamples: usize,
    rng_seed: u64,
    exec: &Executor,
) -> Result<Vec<ConvergencePoint>> {
    if subjects.len() < 2 {
        return Err(StatsError::TooFew {
            n: subjects.len(),
            min: 2,
        });
    }
    if n_max == 0 || resamples == 0 {
        return Err(StatsError::TooFew { n: 0, min: 1 });
    }
    for s in subjects {
        if s.observers.len() < n_max {
            return Err(StatsError::InsufficientObservers {
                subject_id: s.subject_id.clone(),
                have: s.observers.len(),
                need: n_max,
            });
        }
    }
    let latent: Vec<PerDim<f64>> = subjects
        .iter()
        .map(|s| PerDim::from_fn(|d| f64::from(s.latent.level(d))))
        .collect();
    let units: Vec<(usize, usize)> = (1..=n_max)
        .flat_map(|n| (0..resamples).map(move |r| (n, r)))
        .collect();

    let rhos: Vec<[(f64, f64); 5]> = exec.map(&units, |&(n, r)| {
        let mut rng = seed::derived_rng(rng_seed, "convergence", &format!("n{n}/r{r}"));
        let aggregated: Vec<PerDim<f64>> = subjects
            .iter()
            .map(|s| {
                let mut picked = index::sample(&mut rng, s.observers.len(), n).into_vec();
                picked.sort_unstable();
                mean_scores(picked.iter().map(|&i| &s.observers[i])).0
            })
            .collect();
        BigFiveDim::ALL.map(|dim| {
            let agg: Vec<f64> = aggregated.iter().map(|a| a[dim]).collect();
            let lat: Vec<f64> = latent.iter().map(|l| l[dim]).collect();
            let slf: Vec<f64> = subjects.iter().map(|s| s.self_scores[dim]).collect();
            (
                spearman(&lat, &agg).unwrap_or(f64::NAN),
                spearman(&slf, &agg).unwrap_or(f64::NAN),
            )
        })
    });

    let mut out = Vec::with_capacity(5 * n_max);
    for dim in BigFiveDim::ALL {
        for n in 1..=n_max {
            let slice = &rhos[(n - 1) * resamples..n * resamples];
            let (rl, dl) = nan_mean(slice.iter().map(|r| r[dim.index()].0));
            let (rs, ds) = nan_mean(slice.iter().map(|r| r[dim.index()].1));
            out.push(ConvergencePoint {
                dimension: dim,
                n,
                rho_latent: rl,
                rho_self: rs,
                defined_latent: dl,
                defined_self: ds,
            });
        }
    }
    Ok(out)
}

fn nan_mean(xs: impl Iterator<Item = f64>) -> (f64, usize) {
    let (sum, n) = xs
        .filter(|x| !x.is_nan())
        .fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        (f64::NAN, 0)
    } else {
        (sum / n as f64, n)
    }
}

/// Five-number summary plus mean of a sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Distribution {
    pub n: usize,
    pub mean: f64,
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
}

impl Distribution {
    pub fn of(xs: &[f64]) -> Result<Self> {
        if xs.is_empty() {
            return Err(StatsError::Empty);
        }
        check_finite(xs)?;
        let mut sorted = xs.to_vec();
        sorted.sort_by(f64::total_cmp);
        Ok(Distribution {
            n: xs.len(),
            mean: mean(xs),
            min: sorted[0],
            q1: quantile(&sorted, 0.25),
            median: quantile(&sorted, 0.5),
            q3: quantile(&sorted, 0.75),
            max: sorted[sorted.len() - 1],
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContextDeviation {
    pub context: RelationContext,
    pub dimension: BigFiveDim,
    pub deviation: Distribution,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContextPair {
    pub a: RelationContext,
    pub b: RelationContext,
    pub dimension: BigFiveDim,
    /// Mean over subjects of (deviation in `a` - deviation in `b`).
    pub mean_diff: f64,
    pub t: f64,
    pub df: f64,
    pub p: f64,
    /// p after the optional Bonferroni factor, capped at 1.
    pub p_adjusted: f64,
    pub significant: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextBreakdown {
    pub deviations: Vec<ContextDeviation>,
    pub pairs: Vec<ContextPair>,
}

/// Paired t where identical samples give p = 1 and a constant nonzero
/// shift gives p = 0, instead of a degenerate-variance error.
fn paired_t_total(diffs: &[f64]) -> Result<PairedT> {
    match paired_t(diffs) {
        Err(StatsError::DegenerateVariance) => {
            let m = mean(diffs);
            let df = (diffs.len() - 1) as f64;
            let (t, p) = if m == 0.0 { (0.0, 1.0) } else { (m.signum() * f64::INFINITY, 0.0) };
            Ok(PairedT {
                n: diffs.len(),
                mean: m,
                sd: 0.0,
                t,
                df,
                p,
            })
        }
        other => other,
    }
}

/// Per-context deviation distributions and pairwise context comparisons.
///
/// `observer_reports` holds every observer vector (any subject, any
/// context); each subject must have observers in all three contexts.
pub fn context_breakdown(
    observer_reports: &[RatingVector],
    self_reports: &[RatingVector],
    bonferroni: bool,
) -> Result<ContextBreakdown> {
    if self_reports.is_empty() {
        return Err(StatsError::Empty);
    }
    let mut by_subject: BTreeMap<&str, Vec<RatingVector>> = BTreeMap::new();
    for r in observer_reports {
        by_subject.entry(r.subject_id.as_str()).or_default().push(r.clone());
    }
    // dev[context][subject] in self_reports order
    let mut dev: Vec<Vec<PerDim<f64>>> = Vec::with_capacity(3);
    for ctx in RelationContext::ALL {
        let mut per_subject = Vec::with_capacity(self_reports.len());
        for s in self_reports {
            let reports = by_subject
                .get(s.subject_id.as_str())
                .ok_or_else(|| StatsError::MissingContext(ctx, s.subject_id.clone()))?;
            let agg = aggregate(reports, Some(ctx))?;
            per_subject.push(PerDim::from_fn(|d| agg.scores[d] - s.scores[d]));
        }
        dev.push(per_subject);
    }

    let mut deviations = Vec::new();
    for (ci, ctx) in RelationContext::ALL.into_iter().enumerate() {
        for dim in BigFiveDim::ALL {
            let xs: Vec<f64> = dev[ci].iter().map(|v| v[dim]).collect();
            deviations.push(ContextDeviation {
                context: ctx,
                dimension: dim,
                deviation: Distribution::of(&xs)?,
            });
        }
    }

    let factor = if bonferroni { 3.0 } else { 1.0 };
    let mut pairs = Vec::new();
    for (ia, ib) in [(0, 1), (0, 2), (1, 2)] {
        for dim in BigFiveDim::ALL {
            let diffs: Vec<f64> = dev[ia]
                .iter()
                .zip(&dev[ib])
                .map(|(a, b)| a[dim] - b[dim])
                .collect();
            let (mean_diff, t, df, p) = match paired_t_total(&diffs) {
                Ok(r) => (r.mean, r.t, r.df, r.p),
                Err(_) => (mean(&diffs), f64::NAN, f64::NAN, f64::NAN),
            };
            let p_adjusted = (p * factor).min(1.0);
            pairs.push(ContextPair {
                a: RelationContext::ALL[ia],
                b: RelationContext::ALL[ib],
                dimension: dim,
                mean_diff,
                t,
                df,
                p,
                p_adjusted,
                significant: p_adjusted < SIGNIFICANCE,
            });
        }
    }
    Ok(ContextBreakdown { deviations, pairs })
}

/// Observer and self score distributions per latent level.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LevelProfile {
    pub dimension: BigFiveDim,
    pub level: u8,
    pub observer: Distribution,
    pub self_mean: f64,
}

pub fn level_profile(
    latent: &[LatentScores],
    multi: &[AggregatedReport],
    self_reports: &[RatingVector],
) -> Result<Vec<LevelProfile>> {
    let obs = pair_by_subject(latent, multi)?;
    let slf = pair_by_subject(latent, self_reports)?;
    let mut out = Vec::new();
    for dim in BigFiveDim::ALL {
        for level in 1..=6u8 {
            let pick = |pairs: &[(&PerDim<f64>, &PerDim<f64>)]| -> Vec<f64> {
                pairs
                    .iter()
                    .filter(|(l, _)| l[dim] == f64::from(level))
                    .map(|(_, v)| v[dim])
                    .collect()
            };
            let o = pick(&obs);
            if o.is_empty() {
                continue;
            }
            out.push(LevelProfile {
                dimension: dim,
                level,
                observer: Distribution::of(&o)?,
                self_mean: mean(&pick(&slf)),
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn obs(subject: &str, id: &str, ctx: Option<RelationContext>, scores: [f64; 5]) -> RatingVector {
        RatingVector {
            subject_id: subject.into(),
            rater: Rater::Observer(id.into()),
            context: ctx,
            scores: PerDim(scores),
        }
    }

    fn selfr(subject: &str, scores: [f64; 5]) -> RatingVector {
        RatingVector {
            subject_id: subject.into(),
            rater: Rater::SelfReport,
            context: None,
            scores: PerDim(scores),
        }
    }

    fn agg(subject: &str, scores: [f64; 5]) -> AggregatedReport {
        AggregatedReport {
            subject_id: subject.into(),
            scores: PerDim(scores),
            n_observers: 1,
            context: None,
        }
    }

    #[test]
    fn spearman_known_values() {
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap(), 1.0);
        assert!((spearman(&[1.0, 2.0, 3.0], &[3.0, 1.0, 2.0]).unwrap() + 0.5).abs() < 1e-12);
        let r = spearman(&[1.0, 2.0, 2.0, 3.0], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert!((r - 0.9487).abs() < 1e-4, "{r}");
        assert_eq!(spearman(&[1.0, 1.0], &[1.0, 2.0]), Err(StatsError::ConstantInput));
        assert!(matches!(spearman(&[1.0], &[1.0, 2.0]), Err(StatsError::LengthMismatch { .. })));
    }

    #[test]
    fn average_ranks_share_ties() {
        assert_eq!(average_ranks(&[10.0, 20.0, 20.0, 5.0]), vec![2.0, 3.5, 3.5, 1.0]);
    }

    #[test]
    fn paired_t_known_values() {
        let r = paired_t(&[1.0, 2.0, 3.0]).unwrap();
        assert!((r.t - 3.4641).abs() < 1e-4);
        assert_eq!(r.df, 2.0);
        assert!((r.p - 0.0742).abs() < 1e-3, "{}", r.p);
        let r = paired_t(&[-1.0, 1.0]).unwrap();
        assert_eq!(r.t, 0.0);
        assert_eq!(r.p, 1.0);
        assert_eq!(paired_t(&[2.0, 2.0]), Err(StatsError::DegenerateVariance));
        assert!(matches!(paired_t(&[2.0]), Err(StatsError::TooFew { .. })));
    }

    #[test]
    fn t_distribution_table_values() {
        // two-tailed critical values from standard t tables
        for (t, df, p) in [(12.706, 1.0, 0.05), (2.228, 10.0, 0.05), (2.845, 20.0, 0.01), (1.96, 1e6, 0.05)] {
            assert!((student_t_two_tailed(t, df) - p).abs() < 2e-4, "t={t} df={df}");
        }
    }

    #[test]
    fn ln_gamma_integers() {
        let mut fact = 1.0f64;
        for n in 1..20 {
            assert!((ln_gamma(n as f64) - fact.ln()).abs() < 1e-12, "{n}");
            fact *= n as f64;
        }
        assert!((ln_gamma(0.5) - std::f64::consts::PI.sqrt().ln()).abs() < 1e-13);
    }

    #[test]
    fn cohens_d_known_values() {
        assert!((cohens_d(&[2.0, 3.0, 4.0], &[1.0, 2.0, 3.0]).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(cohens_d(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(cohens_d(&[1.0, 1.0], &[2.0, 2.0]), Err(StatsError::DegenerateVariance));
    }

    #[test]
    fn aggregate_examples() {
        let two = [obs("s", "a", None, [3.0; 5]), obs("s", "b", None, [4.0; 5])];
        assert_eq!(aggregate(&two, None).unwrap().scores[BigFiveDim::Agreeableness], 3.5);
        let one = [obs("s", "a", None, [1.0, 2.0, 3.0, 4.0, 5.0])];
        let a = aggregate(&one, None).unwrap();
        assert_eq!(a.scores, one[0].scores);
        assert_eq!(a.n_observers, 1);
        let three = [
            obs("s", "a", None, [2.0; 5]),
            obs("s", "b", None, [3.0; 5]),
            obs("s", "c", None, [4.0; 5]),
        ];
        assert_eq!(aggregate(&three, None).unwrap().scores[BigFiveDim::Conscientiousness], 3.0);
        assert_eq!(aggregate(&[], None), Err(StatsError::Empty));
    }

    #[test]
    fn aggregate_filters_context() {
        let r = [
            obs("s", "a", Some(RelationContext::Family), [2.0; 5]),
            obs("s", "b", Some(RelationContext::Workplace), [4.0; 5]),
        ];
        let w = aggregate(&r, Some(RelationContext::Workplace)).unwrap();
        assert_eq!(w.scores.0, [4.0; 5]);
        assert!(matches!(
            aggregate(&r, Some(RelationContext::Friend)),
            Err(StatsError::MissingContext(RelationContext::Friend, _))
        ));
    }

    #[test]
    fn aggregate_rejects_mixed_subjects_and_self_reports() {
        assert!(aggregate(&[obs("s", "a", None, [2.0; 5]), obs("t", "b", None, [2.0; 5])], None).is_err());
        assert!(aggregate(&[selfr("s", [2.0; 5])], None).is_err());
    }

    #[test]
    fn mean_deviation_examples() {
        let multi = [agg("a", [4.0; 5]), agg("b", [4.0; 5])];
        let selfs = [selfr("b", [3.0; 5]), selfr("a", [3.0; 5])];
        assert_eq!(mean_deviation(&multi, &selfs).unwrap()[BigFiveDim::Agreeableness], 1.0);
        let same = [selfr("a", [4.0; 5]), selfr("b", [4.0; 5])];
        assert_eq!(mean_deviation(&multi, &same).unwrap().0, [0.0; 5]);
        assert!(matches!(
            mean_deviation(&multi, &[selfr("a", [1.0; 5]), selfr("c", [1.0; 5])]),
            Err(StatsError::Pairing(_))
        ));
    }

    #[test]
    fn deviation_table_rows() {
        let multi = [agg("a", [4.0, 3.0, 3.0, 3.0, 3.0]), agg("b", [5.0, 3.0, 3.0, 3.0, 3.0]), agg("c", [3.0, 3.0, 3.0, 3.0, 3.0])];
        let selfs = [selfr("a", [3.0; 5]), selfr("b", [3.0; 5]), selfr("c", [2.0; 5])];
        let rows = deviation_table(&multi, &selfs).unwrap();
        let labels: Vec<&str> = rows.iter().map(|r| r.label.as_str()).collect();
        assert_eq!(labels, ["mean_deviation", "t", "df", "p", "cohens_d"]);
        assert_eq!(rows[0].values[BigFiveDim::Openness], 4.0 / 3.0);
        // OPE diffs [1, 2, 1]: mean 4/3, sd 1/sqrt(3)
        assert!((rows[1].values[BigFiveDim::Openness] - 4.0).abs() < 1e-12);
        // CON diffs [0, 0, 1] -> defined; EXT identical -> t undefined
        assert!(rows[1].values[BigFiveDim::Conscientiousness].is_finite());
        assert!(rows[4].values[BigFiveDim::Extraversion].is_finite());
        let multi_const = [agg("a", [3.0; 5]), agg("b", [3.0; 5]), agg("c", [3.0; 5])];
        let self_const = [selfr("a", [3.0; 5]), selfr("b", [3.0; 5]), selfr("c", [3.0; 5])];
        let rows = deviation_table(&multi_const, &self_const).unwrap();
        assert!(rows[1].values.0.iter().all(|v| v.is_nan()));
        assert!(rows[4].values.0.iter().all(|v| v.is_nan()));
    }

    #[test]
    fn human_agreement_examples() {
        let h = [selfr("a", [3.0, 3.0, 1.0, 3.0, 3.0]), selfr("b", [3.0, 3.0, 2.0, 3.0, 3.0])];
        let m = [selfr("a", [3.0, 3.0, 2.0, 3.0, 3.0]), selfr("b", [3.0, 3.0, 4.0, 3.0, 3.0])];
        let r = human_agreement(&h, &m).unwrap();
        assert_eq!(r.mean_abs_diff[BigFiveDim::Extraversion], 1.5);
        assert_eq!(r.rho[BigFiveDim::Extraversion], 1.0);
        assert!(r.rho[BigFiveDim::Openness].is_nan());
        let same = human_agreement(&m, &m).unwrap();
        assert_eq!(same.mean_abs_diff.0, [0.0; 5]);
        assert!(human_agreement(&h, &m[..1]).is_err());
    }

    #[test]
    fn quantile_type7() {
        let xs = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(quantile(&xs, 0.5), 2.5);
        assert_eq!(quantile(&xs, 0.25), 1.75);
        assert_eq!(quantile(&xs, 1.0), 4.0);
        assert_eq!(quantile(&[7.0], 0.3), 7.0);
    }

    fn ctx_fixture(shift: f64) -> (Vec<RatingVector>, Vec<RatingVector>) {
        let mut observers = Vec::new();
        let mut selfs = Vec::new();
        for s in 0..6 {
            let sid = format!("s{s}");
            let base = 2.0 + (s as f64) * 0.3;
            selfs.push(selfr(&sid, [base; 5]));
            for (ci, ctx) in RelationContext::ALL.into_iter().enumerate() {
                let mut v = [base + 0.1 * (s % 3) as f64; 5];
                if ctx == RelationContext::Workplace {
                    v[BigFiveDim::Conscientiousness.index()] += shift;
                }
                observers.push(obs(&sid, &format!("{sid}-o{ci}"), Some(ctx), v));
            }
        }
        (observers, selfs)
    }

    #[test]
    fn identical_contexts_have_p_one() {
        let (o, s) = ctx_fixture(0.0);
        let b = context_breakdown(&o, &s, false).unwrap();
        assert_eq!(b.pairs.len(), 15);
        assert!(b.pairs.iter().all(|p| p.p == 1.0 && !p.significant));
        assert_eq!(b.deviations.len(), 15);
        for dim in BigFiveDim::ALL {
            let ds: Vec<f64> = b.deviations.iter().filter(|d| d.dimension == dim).map(|d| d.deviation.mean).collect();
            assert!(ds.windows(2).all(|w| w[0] == w[1]));
        }
    }

    #[test]
    fn workplace_shift_flags_conscientiousness() {
        let (o, s) = ctx_fixture(0.5);
        let b = context_breakdown(&o, &s, true).unwrap();
        let fam_work = b
            .pairs
            .iter()
            .find(|p| p.a == RelationContext::Family && p.b == RelationContext::Workplace && p.dimension == BigFiveDim::Conscientiousness)
            .unwrap();
        assert!((fam_work.mean_diff + 0.5).abs() < 1e-12);
        assert!(fam_work.significant);
        assert!(fam_work.p < 1e-6);
    }

    #[test]
    fn missing_context_is_an_error() {
        let (mut o, s) = ctx_fixture(0.0);
        o.retain(|r| !(r.subject_id == "s2" && r.context == Some(RelationContext::Friend)));
        assert!(matches!(
            context_breakdown(&o, &s, false),
            Err(StatsError::MissingContext(RelationContext::Friend, _))
        ));
    }

    fn conv_subjects() -> Vec<SubjectObservations> {
        (0..6u8)
            .map(|i| {
                let latent = LatentPersonality::new([i + 1; 5]).unwrap();
                let base = 1.0 + 0.8 * i as f64;
                SubjectObservations {
                    subject_id: format!("s{i}"),
                    latent,
                    self_scores: PerDim([base; 5]),
                    observers: (0..4).map(|j| PerDim([base + 0.05 * j as f64; 5])).collect(),
                }
            })
            .collect()
    }

    #[test]
    fn noise_free_convergence_is_flat_at_one() {
        let curve = convergence_curve(&conv_subjects(), 4, 5, 1, &Executor::sequential()).unwrap();
        assert_eq!(curve.len(), 20);
        assert!(curve.iter().all(|p| p.rho_latent == 1.0 && p.rho_self == 1.0));
    }

    #[test]
    fn full_subset_matches_full_aggregate() {
        let subjects = conv_subjects();
        let curve = convergence_curve(&subjects, 4, 1, 9, &Executor::sequential()).unwrap();
        let full: Vec<f64> = subjects.iter().map(|s| mean_scores(s.observers.iter()).0[BigFiveDim::Openness]).collect();
        let lat: Vec<f64> = subjects.iter().map(|s| f64::from(s.latent.level(BigFiveDim::Openness))).collect();
        let p = curve.iter().find(|p| p.dimension == BigFiveDim::Openness && p.n == 4).unwrap();
        assert_eq!(p.rho_latent, spearman(&lat, &full).unwrap());
    }

    #[test]
    fn convergence_requires_enough_observers() {
        assert!(matches!(
            convergence_curve(&conv_subjects(), 5, 1, 0, &Executor::sequential()),
            Err(StatsError::InsufficientObservers { need: 5, .. })
        ));
    }

    fn sample(max: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(prop_oneof![(1u8..=4).prop_map(f64::from), -10.0f64..10.0], 3..max)
    }

    proptest! {
        #[test]
        fn spearman_is_bounded_and_symmetric(pairs in prop::collection::vec((-5.0f64..5.0, 1u8..=4), 3..30)) {
            let x: Vec<f64> = pairs.iter().map(|p| p.0).collect();
            let y: Vec<f64> = pairs.iter().map(|p| f64::from(p.1)).collect();
            if let Ok(r) = spearman(&x, &y) {
                prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&r));
                prop_assert!((r - spearman(&y, &x).unwrap()).abs() < 1e-12);
                let cubed: Vec<f64> = x.iter().map(|v| v.powi(3) + 7.0).collect();
                prop_assert!((r - spearman(&cubed, &y).unwrap()).abs() < 1e-12);
            }
        }

        #[test]
        fn ranks_sum_to_triangular_number(xs in sample(40)) {
            let n = xs.len() as f64;
            let total: f64 = average_ranks(&xs).iter().sum();
            prop_assert!((total - n * (n + 1.0) / 2.0).abs() < 1e-9);
        }

        #[test]
        fn cohens_d_is_antisymmetric_and_shift_invariant(a in sample(20), b in sample(20), shift in -3.0f64..3.0) {
            if let Ok(d) = cohens_d(&a, &b) {
                prop_assert!((d + cohens_d(&b, &a).unwrap()).abs() < 1e-9);
                let a2: Vec<f64> = a.iter().map(|v| v + shift).collect();
                let b2: Vec<f64> = b.iter().map(|v| v + shift).collect();
                prop_assert!((d - cohens_d(&a2, &b2).unwrap()).abs() < 1e-9);
            }
        }

        #[test]
        fn paired_t_sign_follows_mean_and_p_is_a_probability(d in sample(30)) {
            if let Ok(t) = paired_t(&d) {
                prop_assert!((0.0..=1.0).contains(&t.p));
                prop_assert_eq!(t.t > 0.0, t.mean > 0.0);
                let negated: Vec<f64> = d.iter().map(|v| -v).collect();
                prop_assert!((paired_t(&negated).unwrap().p - t.p).abs() < 1e-12);
            }
        }

        #[test]
        fn shifted_mean_of_constant_is_exact(x in -1e6f64..1e6, n in 1usize..50) {
            prop_assert_eq!(mean(&vec![x; n]), x);
        }
    }
}
