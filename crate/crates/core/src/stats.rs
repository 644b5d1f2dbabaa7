//! Descriptive statistics, inter-rater agreement and the rank-sum test.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum StatsError {
    #[error("empty sample")]
    EmptySample,
    #[error("ratings need at least 2 subjects and 2 raters (got {n} x {k})")]
    TooFewRatings { n: usize, k: usize },
    #[error("ragged rating matrix: row {row} has {got} values, expected {expected}")]
    RaggedMatrix { row: usize, got: usize, expected: usize },
    #[error("non-finite value in input")]
    NonFinite,
    #[error("zero between-subject variance; ICC is undefined")]
    DegenerateVariance,
    #[error("exact rank-sum distribution requested for tied data")]
    ExactWithTies,
    #[error("rater {0} has {1} values, expected {2}")]
    MisalignedRater(String, usize, usize),
}

/// Linear interpolation between order statistics at 1-based rank
/// `p * (n - 1) + 1`. `sorted` must be ascending and non-empty.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    debug_assert!(n > 0);
    let h = p * (n - 1) as f64;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    let frac = h - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Descriptive {
    pub n: usize,
    pub mean: f64,
    /// Sample standard deviation (n - 1 denominator); 0 for a singleton.
    pub sd: f64,
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
    pub iqr: f64,
}

pub fn descriptive(xs: &[f64]) -> Result<Descriptive, StatsError> {
    if xs.is_empty() {
        return Err(StatsError::EmptySample);
    }
    if xs.iter().any(|x| !x.is_finite()) {
        return Err(StatsError::NonFinite);
    }
    let n = xs.len();
    let mean = xs.iter().sum::<f64>() / n as f64;
    let sd = if n > 1 {
        (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    } else {
        0.0
    };
    let mut sorted = xs.to_vec();
    sorted.sort_by(f64::total_cmp);
    let q1 = quantile_sorted(&sorted, 0.25);
    let q3 = quantile_sorted(&sorted, 0.75);
    Ok(Descriptive {
        n,
        mean,
        sd,
        median: quantile_sorted(&sorted, 0.5),
        q1,
        q3,
        iqr: q3 - q1,
    })
}

/// Subjects in rows, raters in columns.
#[derive(Debug, Clone, PartialEq)]
pub struct RatingMatrix {
    n: usize,
    k: usize,
    data: Vec<f64>,
}

impl RatingMatrix {
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self, StatsError> {
        let n = rows.len();
        let k = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(n * k);
        for (i, row) in rows.iter().enumerate() {
            let row = row.as_ref();
            if row.len() != k {
                return Err(StatsError::RaggedMatrix { row: i, got: row.len(), expected: k });
            }
            data.extend_from_slice(row);
        }
        Self::new(n, k, data)
    }

    /// One column per rater; all columns must share a length.
    pub fn from_columns<C: AsRef<[f64]>>(cols: &[C]) -> Result<Self, StatsError> {
        let k = cols.len();
        let n = cols.first().map_or(0, |c| c.as_ref().len());
        let mut data = vec![0.0; n * k];
        for (j, col) in cols.iter().enumerate() {
            let col = col.as_ref();
            if col.len() != n {
                return Err(StatsError::RaggedMatrix { row: j, got: col.len(), expected: n });
            }
            for (i, &v) in col.iter().enumerate() {
                data[i * k + j] = v;
            }
        }
        Self::new(n, k, data)
    }

    fn new(n: usize, k: usize, data: Vec<f64>) -> Result<Self, StatsError> {
        if n < 2 || k < 2 {
            return Err(StatsError::TooFewRatings { n, k });
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(StatsError::NonFinite);
        }
        Ok(RatingMatrix { n, k, data })
    }

    pub fn n_subjects(&self) -> usize {
        self.n
    }

    pub fn k_raters(&self) -> usize {
        self.k
    }

    pub fn get(&self, subject: usize, rater: usize) -> f64 {
        self.data[subject * self.k + rater]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum IccModel {
    /// Two-way random effects, absolute agreement, single measures.
    #[serde(rename = "ICC(A,1)")]
    TwoWayRandomAbsoluteSingle,
}

impl fmt::Display for IccModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("ICC(A,1) two-way random, absolute agreement, single measures")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IccResult {
    pub icc: f64,
    pub n_subjects: usize,
    pub k_raters: usize,
    pub model: IccModel,
}

pub fn icc_a1(ratings: &RatingMatrix) -> Result<IccResult, StatsError> {
    let (n, k) = (ratings.n, ratings.k);
    let (nf, kf) = (n as f64, k as f64);
    let grand = ratings.data.iter().sum::<f64>() / (nf * kf);

    let row_means: Vec<f64> = ratings
        .data
        .chunks_exact(k)
        .map(|row| row.iter().sum::<f64>() / kf)
        .collect();
    let col_means: Vec<f64> = (0..k)
        .map(|j| (0..n).map(|i| ratings.get(i, j)).sum::<f64>() / nf)
        .collect();

    let ss_rows = kf * row_means.iter().map(|m| (m - grand).powi(2)).sum::<f64>();
    let ss_cols = nf * col_means.iter().map(|m| (m - grand).powi(2)).sum::<f64>();
    let ss_total: f64 = ratings.data.iter().map(|x| (x - grand).powi(2)).sum();
    let ss_err = (ss_total - ss_rows - ss_cols).max(0.0);

    // Residual rounding from the grand mean is ~eps^2 * x^2 per cell.
    let scale: f64 = ratings.data.iter().map(|x| x * x).sum();
    if ss_rows <= 1e-20 * scale || ss_total == 0.0 {
        return Err(StatsError::DegenerateVariance);
    }

    let ms_rows = ss_rows / (nf - 1.0);
    let ms_cols = ss_cols / (kf - 1.0);
    let ms_err = ss_err / ((nf - 1.0) * (kf - 1.0));
    let denom = ms_rows + (kf - 1.0) * ms_err + (kf / nf) * (ms_cols - ms_err);
    if denom <= 0.0 {
        return Err(StatsError::DegenerateVariance);
    }
    Ok(IccResult {
        icc: (ms_rows - ms_err) / denom,
        n_subjects: n,
        k_raters: k,
        model: IccModel::TwoWayRandomAbsoluteSingle,
    })
}

/// Symmetric pairwise ICC(A,1) matrix. Cells whose pair has zero
/// between-subject variance are `None`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IccMatrix {
    pub raters: Vec<String>,
    pub cells: Vec<Vec<Option<f64>>>,
}

impl IccMatrix {
    pub fn get(&self, a: &str, b: &str) -> Option<Option<f64>> {
        let i = self.raters.iter().position(|r| r == a)?;
        let j = self.raters.iter().position(|r| r == b)?;
        Some(self.cells[i][j])
    }

    /// Heatmap rows `(rater_a, rater_b, icc)` for every ordered pair.
    pub fn rows(&self) -> impl Iterator<Item = (&str, &str, Option<f64>)> + '_ {
        self.raters.iter().enumerate().flat_map(move |(i, a)| {
            self.raters
                .iter()
                .enumerate()
                .map(move |(j, b)| (a.as_str(), b.as_str(), self.cells[i][j]))
        })
    }
}

pub fn icc_matrix(raters: &BTreeMap<String, Vec<f64>>) -> Result<IccMatrix, StatsError> {
    let names: Vec<String> = raters.keys().cloned().collect();
    if names.len() < 2 {
        return Err(StatsError::TooFewRatings { n: 0, k: names.len() });
    }
    let len = raters[&names[0]].len();
    for (name, values) in raters {
        if values.len() != len {
            return Err(StatsError::MisalignedRater(name.clone(), values.len(), len));
        }
    }
    let m = names.len();
    let mut cells = vec![vec![None; m]; m];
    for i in 0..m {
        cells[i][i] = Some(1.0);
        for j in i + 1..m {
            let pair = RatingMatrix::from_columns(&[&raters[&names[i]], &raters[&names[j]]])?;
            let value = match icc_a1(&pair) {
                Ok(r) => Some(r.icc),
                Err(StatsError::DegenerateVariance) => None,
                Err(e) => return Err(e),
            };
            cells[i][j] = value;
            cells[j][i] = value;
        }
    }
    Ok(IccMatrix { raters: names, cells })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum RankSumMethod {
    NormalApprox,
    Exact,
}

/// How to pick between the exact distribution and the normal approximation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MethodChoice {
    /// Exact when the smaller sample has at most [`EXACT_MAX_SMALLER`]
    /// values and there are no ties.
    #[default]
    Auto,
    Exact,
    NormalApprox,
}

pub const EXACT_MAX_SMALLER: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankSumResult {
    /// Mann-Whitney U of the first sample.
    pub u_statistic: f64,
    pub z_value: f64,
    pub p_two_sided: f64,
    pub n1: usize,
    pub n2: usize,
    pub tie_correction_applied: bool,
    pub method: RankSumMethod,
}

/// Mid-ranks (1-based) of `values`, plus the tie-group sizes.
pub fn mid_ranks(values: &[f64]) -> (Vec<f64>, Vec<usize>) {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut ties = Vec::new();
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && values[order[j]] == values[order[i]] {
            j += 1;
        }
        let rank = (i + j + 1) as f64 / 2.0;
        for &idx in &order[i..j] {
            ranks[idx] = rank;
        }
        if j - i > 1 {
            ties.push(j - i);
        }
        i = j;
    }
    (ranks, ties)
}

/// Number of `m`-subsets of `{1..=n}` with each possible element sum,
/// indexed by `sum - m(m+1)/2` (the U value).
fn rank_sum_counts(m: usize, n: usize) -> Vec<f64> {
    // ways[j][s] = number of j-subsets of the ranks seen so far summing to s
    let max_sum = (n * (n + 1)) / 2;
    let mut ways = vec![vec![0.0f64; max_sum + 1]; m + 1];
    ways[0][0] = 1.0;
    for r in 1..=n {
        for j in (1..=m.min(r)).rev() {
            for s in (r..=max_sum).rev() {
                ways[j][s] += ways[j - 1][s - r];
            }
        }
    }
    let offset = m * (m + 1) / 2;
    let u_max = m * (n - m);
    ways[m][offset..=offset + u_max].to_vec()
}

fn exact_two_sided(u: f64, n1: usize, n2: usize) -> f64 {
    let counts = rank_sum_counts(n1, n1 + n2);
    let total: f64 = counts.iter().sum();
    let u = u.round() as usize;
    let lower: f64 = counts[..=u].iter().sum::<f64>() / total;
    let upper: f64 = counts[u..].iter().sum::<f64>() / total;
    (2.0 * lower.min(upper)).min(1.0)
}

pub fn wilcoxon_rank_sum(a: &[f64], b: &[f64]) -> Result<RankSumResult, StatsError> {
    wilcoxon_rank_sum_with(a, b, MethodChoice::Auto)
}

pub fn wilcoxon_rank_sum_with(
    a: &[f64],
    b: &[f64],
    choice: MethodChoice,
) -> Result<RankSumResult, StatsError> {
    if a.is_empty() || b.is_empty() {
        return Err(StatsError::EmptySample);
    }
    if a.iter().chain(b).any(|x| !x.is_finite()) {
        return Err(StatsError::NonFinite);
    }
    let (n1, n2) = (a.len(), b.len());
    let pooled: Vec<f64> = a.iter().chain(b).copied().collect();
    let (ranks, ties) = mid_ranks(&pooled);
    let r1: f64 = ranks[..n1].iter().sum();
    let u = r1 - (n1 * (n1 + 1)) as f64 / 2.0;

    let (n1f, n2f) = (n1 as f64, n2 as f64);
    let nf = n1f + n2f;
    let mu = n1f * n2f / 2.0;
    let tie_term: f64 = ties.iter().map(|&t| (t * t * t - t) as f64).sum();
    let var = n1f * n2f / 12.0 * ((nf + 1.0) - tie_term / (nf * (nf - 1.0)));
    let sd = var.max(0.0).sqrt();
    let shifted = (u - mu).abs() - 0.5;
    let z = if sd > 0.0 && shifted > 0.0 { (u - mu).signum() * shifted / sd } else { 0.0 };

    let method = match choice {
        MethodChoice::Exact if !ties.is_empty() => return Err(StatsError::ExactWithTies),
        MethodChoice::Exact => RankSumMethod::Exact,
        MethodChoice::NormalApprox => RankSumMethod::NormalApprox,
        MethodChoice::Auto if ties.is_empty() && n1.min(n2) <= EXACT_MAX_SMALLER => {
            RankSumMethod::Exact
        }
        MethodChoice::Auto => RankSumMethod::NormalApprox,
    };

    let p = match method {
        RankSumMethod::Exact => exact_two_sided(u, n1, n2),
        RankSumMethod::NormalApprox => {
            let normal = Normal::standard();
            (2.0 * normal.sf(z.abs())).min(1.0)
        }
    };
    Ok(RankSumResult {
        u_statistic: u,
        z_value: z,
        p_two_sided: p.clamp(0.0, 1.0),
        n1,
        n2,
        tie_correction_applied: !ties.is_empty() && method == RankSumMethod::NormalApprox,
        method,
    })
}
