//! Brute-force reference implementations, written without reusing the
//! library's statistics code.

use observa_core::assess::{AnswerSheet, Keyed, PromptVariant, Questionnaire, Rater};
use observa_core::BigFiveDim;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use statrs::function::gamma::ln_gamma;
use std::collections::BTreeMap;

/// Rank of each element: 1 + number smaller + half the number of other equal ones.
pub fn naive_ranks(xs: &[f64]) -> Vec<f64> {
    xs.iter()
        .map(|x| {
            let below = xs.iter().filter(|y| *y < x).count() as f64;
            let equal = xs.iter().filter(|y| *y == x).count() as f64;
            1.0 + below + (equal - 1.0) / 2.0
        })
        .collect()
}

/// Spearman rho from the textbook Pearson formula on naive ranks; None when a
/// side is constant.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    let (rx, ry) = (naive_ranks(x), naive_ranks(y));
    let n = x.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    (vx > 0.0 && vy > 0.0).then(|| cov / (vx.sqrt() * vy.sqrt()))
}

fn t_density(x: f64, df: f64) -> f64 {
    let log_c = ln_gamma((df + 1.0) / 2.0) - ln_gamma(df / 2.0) - 0.5 * (df * std::f64::consts::PI).ln();
    (log_c - (df + 1.0) / 2.0 * (1.0 + x * x / df).ln()).exp()
}

fn simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64) -> f64 {
    (b - a) / 6.0 * (f(a) + 4.0 * f((a + b) / 2.0) + f(b))
}

fn adaptive(f: &dyn Fn(f64) -> f64, a: f64, b: f64, whole: f64, eps: f64, depth: u32) -> f64 {
    let m = (a + b) / 2.0;
    let (left, right) = (simpson(f, a, m), simpson(f, m, b));
    if depth == 0 || (left + right - whole).abs() <= 15.0 * eps {
        return left + right + (left + right - whole) / 15.0;
    }
    adaptive(f, a, m, left, eps / 2.0, depth - 1) + adaptive(f, m, b, right, eps / 2.0, depth - 1)
}

pub fn integrate(f: &dyn Fn(f64) -> f64, a: f64, b: f64) -> f64 {
    adaptive(f, a, b, simpson(f, a, b), 1e-14, 60)
}

/// Two-tailed p-value by numerically integrating the t density.
pub fn t_two_tailed(t: f64, df: f64) -> f64 {
    let t = t.abs();
    if t <= 1.0 {
        1.0 - 2.0 * integrate(&|x| t_density(x, df), 0.0, t)
    } else {
        // Upper tail with x = t / u, u in (0, 1].
        let tail = integrate(
            &|u: f64| if u == 0.0 { 0.0 } else { t_density(t / u, df) * t / (u * u) },
            0.0,
            1.0,
        );
        2.0 * tail
    }
}

pub struct PairedOracle {
    pub t: f64,
    pub df: f64,
    pub p: f64,
}

pub fn paired_t(diffs: &[f64]) -> Option<PairedOracle> {
    let n = diffs.len() as f64;
    let m = diffs.iter().sum::<f64>() / n;
    let ss: f64 = diffs.iter().map(|d| (d - m).powi(2)).sum();
    let sd = (ss / (n - 1.0)).sqrt();
    if sd == 0.0 {
        return None;
    }
    let t = m / (sd / n.sqrt());
    Some(PairedOracle {
        t,
        df: n - 1.0,
        p: t_two_tailed(t, n - 1.0),
    })
}

pub fn cohens_d(a: &[f64], b: &[f64]) -> Option<f64> {
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let ma = a.iter().sum::<f64>() / na;
    let mb = b.iter().sum::<f64>() / nb;
    let ssa: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let ssb: f64 = b.iter().map(|x| (x - mb).powi(2)).sum();
    let pooled = ((ssa + ssb) / (na + nb - 2.0)).sqrt();
    (pooled > 0.0).then(|| (ma - mb) / pooled)
}

/// Random sample of length `n`; every other instance draws from a handful
/// of integers so ties dominate.
pub fn sample(rng: &mut ChaCha8Rng, n: usize, tie_heavy: bool) -> Vec<f64> {
    if tie_heavy {
        (0..n).map(|_| f64::from(rng.gen_range(1..=4))).collect()
    } else {
        let normal = Normal::new(0.0, 2.0).unwrap();
        (0..n).map(|_| normal.sample(rng)).collect()
    }
}

/// Keyed mean per dimension computed straight from the item table.
pub fn keyed_means(answers: &BTreeMap<u32, Option<u8>>, q: &Questionnaire) -> [f64; 5] {
    let mut out = [0.0; 5];
    for dim in BigFiveDim::ALL {
        let mut total = 0.0;
        let mut count = 0.0;
        for item in q.items().iter().filter(|i| i.dimension == dim) {
            if let Some(Some(a)) = answers.get(&item.item_id) {
                let v = match item.keyed {
                    Keyed::Positive => f64::from(*a),
                    Keyed::Negative => 6.0 - f64::from(*a),
                };
                total += v;
                count += 1.0;
            }
        }
        out[dim.index()] = total / count;
    }
    out
}

pub fn missing_per_dim(answers: &BTreeMap<u32, Option<u8>>, q: &Questionnaire) -> [usize; 5] {
    let mut out = [0; 5];
    for item in q.items() {
        if !matches!(answers.get(&item.item_id), Some(Some(_))) {
            out[item.dimension.index()] += 1;
        }
    }
    out
}

/// Self-report sheet with uniform answers, each item MISSING with probability `missing`.
pub fn random_sheet(rng: &mut ChaCha8Rng, q: &Questionnaire, missing: f64) -> AnswerSheet {
    let answers: BTreeMap<u32, Option<u8>> = q
        .items()
        .iter()
        .map(|i| (i.item_id, (!rng.gen_bool(missing)).then(|| rng.gen_range(1..=5))))
        .collect();
    AnswerSheet {
        rater: Rater::SelfReport,
        subject_id: "s0001".into(),
        answers,
        variant: PromptVariant::Default,
        context: None,
        retries: 0,
        truncated_scenarios: 0,
    }
}
