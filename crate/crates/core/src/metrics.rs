//! Statistics for judging scenario sets against reference data.

use scengan_autodiff::Tensor;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error("autocorrelation is undefined for a constant series")]
    ConstantSeries,
    #[error("series of length {len} is too short for lag {max_lag} (need at least max_lag + 2)")]
    TooShort { len: usize, max_lag: usize },
    #[error("empty sample")]
    Empty,
    #[error("shape mismatch: {0}")]
    Shape(String),
}

/// `R(h) = Σ_{i<n−h} (s_i−μ)(s_{i+h}−μ) / Σ_i (s_i−μ)²` for `h = 0..=max_lag`,
/// with `μ` the mean of the whole series.
pub fn autocorrelation(series: &[f64], max_lag: usize) -> Result<Vec<f64>, MetricError> {
    let n = series.len();
    if n < max_lag + 2 {
        return Err(MetricError::TooShort { len: n, max_lag });
    }
    if series.iter().all(|&v| v == series[0]) {
        return Err(MetricError::ConstantSeries);
    }
    let mu = series.iter().sum::<f64>() / n as f64;
    let c: Vec<f64> = series.iter().map(|v| v - mu).collect();
    let denom: f64 = c.iter().map(|v| v * v).sum();
    if denom == 0.0 {
        return Err(MetricError::ConstantSeries);
    }
    Ok((0..=max_lag)
        .map(|h| c[..n - h].iter().zip(&c[h..]).map(|(a, b)| a * b).sum::<f64>() / denom)
        .collect())
}

fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return None;
    }
    Some((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

/// Each site's values pooled over samples and time, from `[n, K, T]`.
pub fn pooled_sites(samples: &Tensor) -> Result<Vec<Vec<f64>>, MetricError> {
    let &[n, k, t] = samples.shape() else {
        return Err(MetricError::Shape(format!("expected [n, K, T], got {:?}", samples.shape())));
    };
    if n * t == 0 {
        return Err(MetricError::Empty);
    }
    let d = samples.data();
    Ok((0..k)
        .map(|site| (0..n).flat_map(|s| d[(s * k + site) * t..(s * k + site + 1) * t].iter().copied()).collect())
        .collect())
}

/// Pearson correlation between sites. Entries involving a constant site
/// are `None`; the matrix is symmetric with a unit diagonal otherwise.
pub fn cross_site_correlation(samples: &Tensor) -> Result<Vec<Vec<Option<f64>>>, MetricError> {
    let sites = pooled_sites(samples)?;
    let k = sites.len();
    let constant: Vec<bool> = sites.iter().map(|s| s.iter().all(|&v| v == s[0])).collect();
    let mut m = vec![vec![None; k]; k];
    for i in 0..k {
        if constant[i] {
            continue;
        }
        m[i][i] = Some(1.0);
        for j in i + 1..k {
            if !constant[j] {
                let r = pearson(&sites[i], &sites[j]);
                m[i][j] = r;
                m[j][i] = r;
            }
        }
    }
    Ok(m)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CdfRow {
    pub x: f64,
    pub real: f64,
    pub generated: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CdfComparison {
    pub ks: f64,
    pub table: Vec<CdfRow>,
}

pub const CDF_GRID_POINTS: usize = 101;

fn sorted(v: &[f64]) -> Vec<f64> {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    s
}

fn ecdf(sorted: &[f64], x: f64) -> f64 {
    sorted.partition_point(|&v| v <= x) as f64 / sorted.len() as f64
}

/// Two-sample Kolmogorov–Smirnov distance plus both empirical CDFs on an
/// even grid spanning the pooled range.
pub fn cdf_compare(real: &[f64], generated: &[f64]) -> Result<CdfComparison, MetricError> {
    if real.is_empty() || generated.is_empty() {
        return Err(MetricError::Empty);
    }
    let a = sorted(real);
    let b = sorted(generated);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j, mut ks) = (0usize, 0usize, 0.0f64);
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        ks = ks.max((i as f64 / na - j as f64 / nb).abs());
    }
    let lo = a[0].min(b[0]);
    let hi = a[a.len() - 1].max(b[b.len() - 1]);
    let table = (0..CDF_GRID_POINTS)
        .map(|g| {
            let x = if g + 1 == CDF_GRID_POINTS {
                hi
            } else {
                lo + (hi - lo) * g as f64 / (CDF_GRID_POINTS - 1) as f64
            };
            CdfRow {
                x,
                real: ecdf(&a, x),
                generated: ecdf(&b, x),
            }
        })
        .collect();
    Ok(CdfComparison { ks, table })
}

/// Fraction of cells where the realization lies within the per-cell
/// min/max envelope of the scenarios.
pub fn interval_coverage(scenarios: &[Tensor], realization: &Tensor) -> Result<f64, MetricError> {
    if scenarios.is_empty() || realization.numel() == 0 {
        return Err(MetricError::Empty);
    }
    for s in scenarios {
        if s.shape() != realization.shape() {
            return Err(MetricError::Shape(format!(
                "scenario {:?} vs realization {:?}",
                s.shape(),
                realization.shape()
            )));
        }
    }
    let (lo, hi) = envelope(scenarios);
    let inside = realization
        .data()
        .iter()
        .enumerate()
        .filter(|&(c, &r)| lo[c] <= r && r <= hi[c])
        .count();
    Ok(inside as f64 / realization.numel() as f64)
}

/// Per-cell minimum and maximum over a non-empty set of equal-shape tensors.
pub fn envelope(set: &[Tensor]) -> (Vec<f64>, Vec<f64>) {
    let mut lo = set[0].data().to_vec();
    let mut hi = lo.clone();
    for s in &set[1..] {
        for (c, &v) in s.data().iter().enumerate() {
            lo[c] = lo[c].min(v);
            hi[c] = hi[c].max(v);
        }
    }
    (lo, hi)
}

/// Mean over cells of the (population) standard deviation across the set.
pub fn mean_cell_std(set: &[Tensor]) -> f64 {
    let n = set.len() as f64;
    let cells = set[0].numel();
    let mut total = 0.0;
    for c in 0..cells {
        let m = set.iter().map(|s| s.data()[c]).sum::<f64>() / n;
        let v = set.iter().map(|s| (s.data()[c] - m).powi(2)).sum::<f64>() / n;
        total += v.sqrt();
    }
    total / cells as f64
}

/// Largest absolute entrywise difference over entries defined in both.
pub fn max_abs_difference(a: &[Vec<Option<f64>>], b: &[Vec<f64>]) -> Option<f64> {
    let mut worst: Option<f64> = None;
    for (ra, rb) in a.iter().zip(b) {
        for (x, y) in ra.iter().zip(rb) {
            if let Some(x) = x {
                let d = (x - y).abs();
                worst = Some(worst.map_or(d, |w| w.max(d)));
            }
        }
    }
    worst
}

pub fn frobenius_distance(a: &[Vec<Option<f64>>], b: &[Vec<Option<f64>>]) -> Option<f64> {
    let mut s = 0.0;
    for (ra, rb) in a.iter().zip(b) {
        for (x, y) in ra.iter().zip(rb) {
            s += (x.as_ref()? - y.as_ref()?).powi(2);
        }
    }
    Some(s.sqrt())
}

/// Per site, whether the realization's autocorrelation at lags `1..=max_lag`
/// lies inside the min/max envelope of the scenarios' autocorrelations.
/// Constant scenario series are left out of the envelope; a site whose
/// realization is constant, or whose scenarios are all constant, is `None`.
pub fn autocorrelation_containment(
    scenarios: &[Tensor],
    realization: &Tensor,
    max_lag: usize,
) -> Result<Vec<Option<Vec<bool>>>, MetricError> {
    if scenarios.is_empty() {
        return Err(MetricError::Empty);
    }
    let shape = realization.shape();
    if shape.len() != 2 || scenarios.iter().any(|s| s.shape() != shape) {
        return Err(MetricError::Shape(format!("realization {:?} vs scenarios {:?}", shape, scenarios[0].shape())));
    }
    let t = shape[1];
    let row = |m: &Tensor, k: usize| m.data()[k * t..(k + 1) * t].to_vec();
    let mut out = Vec::with_capacity(shape[0]);
    for k in 0..shape[0] {
        let real = match autocorrelation(&row(realization, k), max_lag) {
            Ok(r) => r,
            Err(MetricError::ConstantSeries) => {
                out.push(None);
                continue;
            }
            Err(e) => return Err(e),
        };
        let curves: Vec<Vec<f64>> =
            scenarios.iter().filter_map(|s| autocorrelation(&row(s, k), max_lag).ok()).collect();
        if curves.is_empty() {
            out.push(None);
            continue;
        }
        let hits = (1..=max_lag)
            .map(|h| {
                let lo = curves.iter().map(|c| c[h]).fold(f64::INFINITY, f64::min);
                let hi = curves.iter().map(|c| c[h]).fold(f64::NEG_INFINITY, f64::max);
                lo <= real[h] && real[h] <= hi
            })
            .collect();
        out.push(Some(hits));
    }
    Ok(out)
}

/// Number of contained lags, averaged over the sites where it is defined.
pub fn mean_lags_contained(containment: &[Option<Vec<bool>>]) -> Option<f64> {
    let counts: Vec<usize> = containment.iter().flatten().map(|h| h.iter().filter(|&&b| b).count()).collect();
    (!counts.is_empty()).then(|| counts.iter().sum::<usize>() as f64 / counts.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AutocorrelationCurve {
    pub label: String,
    pub site: usize,
    /// `None` when the series is constant.
    pub values: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub scenario_set: String,
    pub reference: String,
    pub max_lag: usize,
    pub autocorrelation: Vec<AutocorrelationCurve>,
    pub correlation_reference: Vec<Vec<Option<f64>>>,
    pub correlation_generated: Vec<Vec<Option<f64>>>,
    pub correlation_frobenius: Option<f64>,
    pub ground_truth_correlation: Option<Vec<Vec<f64>>>,
    pub ground_truth_max_abs_difference: Option<f64>,
    pub ks_per_site: Vec<f64>,
    pub coverage: Option<f64>,
    /// Per site and lag `1..=max_lag`, whether the realization lies in the scenario envelope.
    pub autocorrelation_containment: Option<Vec<Option<Vec<bool>>>>,
    pub mean_lags_contained: Option<f64>,
}
