//! Geometry of the shared projection space: two-component PCA, paired and
//! within/between-modality cosine metrics, and a rule-based verdict on how
//! the two modalities relate over training.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffmath::{dot, norm, Tensor};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AnalysisError {
    #[error("PCA needs at least 3 points, got {0}")]
    TooFewPoints(usize),
    #[error("PCA needs at least 2 dimensions, got {0}")]
    TooFewDims(usize),
    #[error("need at least 2 usable pairs, got {0}")]
    TooFewRows(usize),
    #[error("text projections {text:?} and graph projections {graph:?} differ in shape")]
    ShapeMismatch { text: Vec<usize>, graph: Vec<usize> },
    #[error("regime verdict needs at least 3 epochs, got {0}")]
    TooFewEpochs(usize),
    #[error("non-finite value in input")]
    NonFinite,
}

/// Paired projections of a fixed probe batch at one epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RepresentationSnapshot {
    pub epoch: usize,
    pub run_id: String,
    #[serde(with = "nested_rows")]
    pub z_text: Tensor,
    #[serde(with = "nested_rows")]
    pub z_graph: Tensor,
}

/// Matrices as arrays of rows on disk.
mod nested_rows {
    use serde::{de::Error, Deserialize, Deserializer, Serializer};

    use crate::diffmath::Tensor;

    pub fn serialize<S: Serializer>(t: &Tensor, s: S) -> Result<S::Ok, S::Error> {
        s.collect_seq(t.to_rows())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Tensor, D::Error> {
        let rows = Vec::<Vec<f64>>::deserialize(d)?;
        Tensor::from_rows(&rows).map_err(D::Error::custom)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignmentMetrics {
    pub paired_cos: f64,
    pub within_text: f64,
    pub within_graph: f64,
    pub between: f64,
}

impl AlignmentMetrics {
    pub fn within_mean(&self) -> f64 {
        0.5 * (self.within_text + self.within_graph)
    }

    /// Between-modality distance relative to the mean within-modality distance.
    pub fn ratio(&self) -> f64 {
        self.between / self.within_mean()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Pca {
    /// `[M × 2]` coordinates of the centered points on the top two components.
    pub projected: Tensor,
    pub explained_ratio: (f64, f64),
    pub components: [Vec<f64>; 2],
    pub eigenvalues: (f64, f64),
    /// Set when every point coincides; everything else is then zero.
    pub degenerate: bool,
}

/// Top-two principal components of `points` (`[M × p]`).
pub fn pca2(points: &Tensor) -> Result<Pca, AnalysisError> {
    if points.rank() != 2 {
        return Err(AnalysisError::TooFewDims(points.cols()));
    }
    let (m, p) = (points.rows(), points.cols());
    if m < 3 {
        return Err(AnalysisError::TooFewPoints(m));
    }
    if p < 2 {
        return Err(AnalysisError::TooFewDims(p));
    }
    if !points.is_finite() {
        return Err(AnalysisError::NonFinite);
    }
    let mut mean = vec![0.0; p];
    for i in 0..m {
        for (acc, x) in mean.iter_mut().zip(points.row(i)) {
            *acc += x;
        }
    }
    mean.iter_mut().for_each(|v| *v /= m as f64);
    let centered: Vec<Vec<f64>> = (0..m)
        .map(|i| {
            points
                .row(i)
                .iter()
                .zip(&mean)
                .map(|(x, mu)| x - mu)
                .collect()
        })
        .collect();

    let mut cov = vec![0.0; p * p];
    for row in &centered {
        for a in 0..p {
            for b in a..p {
                cov[a * p + b] += row[a] * row[b];
            }
        }
    }
    for a in 0..p {
        for b in a..p {
            cov[a * p + b] /= (m - 1) as f64;
            cov[b * p + a] = cov[a * p + b];
        }
    }

    let (values, vectors) = symmetric_eigen(&cov, p);
    let total: f64 = values.iter().map(|v| v.max(0.0)).sum();
    if total <= 0.0 {
        return Ok(Pca {
            projected: Tensor::zeros(&[m, 2]),
            explained_ratio: (0.0, 0.0),
            components: [vec![0.0; p], vec![0.0; p]],
            eigenvalues: (0.0, 0.0),
            degenerate: true,
        });
    }
    let components = [orient(vectors[0].clone()), orient(vectors[1].clone())];
    let mut projected = Vec::with_capacity(m * 2);
    for row in &centered {
        projected.push(dot(row, &components[0]));
        projected.push(dot(row, &components[1]));
    }
    let (l1, l2) = (values[0].max(0.0), values[1].max(0.0));
    Ok(Pca {
        projected: Tensor::matrix(m, 2, projected).expect("m > 0"),
        explained_ratio: (l1 / total, l2 / total),
        components,
        eigenvalues: (l1, l2),
        degenerate: false,
    })
}

/// PCA over the union of both modalities: text rows first, then graph rows.
pub fn pca_snapshot(s: &RepresentationSnapshot) -> Result<Pca, AnalysisError> {
    check_pair_shapes(s)?;
    let mut rows = s.z_text.to_rows();
    rows.extend(s.z_graph.to_rows());
    let joint = Tensor::from_rows(&rows).map_err(|_| AnalysisError::TooFewPoints(rows.len()))?;
    pca2(&joint)
}

/// Flips `v` so its largest-magnitude coordinate is positive.
fn orient(mut v: Vec<f64>) -> Vec<f64> {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if x.abs() > v[best].abs() {
            best = i;
        }
    }
    if v[best] < 0.0 {
        v.iter_mut().for_each(|x| *x = -*x);
    }
    v
}

/// Cyclic Jacobi eigendecomposition of a symmetric `n × n` matrix (row-major).
/// Returns eigenvalues in descending order with matching unit eigenvectors.
pub fn symmetric_eigen(matrix: &[f64], n: usize) -> (Vec<f64>, Vec<Vec<f64>>) {
    assert_eq!(matrix.len(), n * n, "matrix must be n × n");
    let mut a = matrix.to_vec();
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    let scale: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let tol = 1e-15 * scale.max(f64::MIN_POSITIVE);

    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i * n + j] * a[i * n + j])
            .sum::<f64>()
            .sqrt();
        if off <= tol {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p * n + q];
                if apq.abs() <= f64::MIN_POSITIVE {
                    continue;
                }
                let theta = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[k * n + p];
                    let akq = a[k * n + q];
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p * n + k];
                    let aqk = a[q * n + k];
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[j * n + j].total_cmp(&a[i * n + i]));
    let values = order.iter().map(|&i| a[i * n + i]).collect();
    let vectors = order
        .iter()
        .map(|&i| (0..n).map(|k| v[k * n + i]).collect())
        .collect();
    (values, vectors)
}

fn check_pair_shapes(s: &RepresentationSnapshot) -> Result<(), AnalysisError> {
    if s.z_text.shape() != s.z_graph.shape() || s.z_text.rank() != 2 {
        return Err(AnalysisError::ShapeMismatch {
            text: s.z_text.shape().to_vec(),
            graph: s.z_graph.shape().to_vec(),
        });
    }
    Ok(())
}

/// Paired cosine plus mean cosine distances within and between modalities.
///
/// Pairs with a zero-norm member on either side are dropped (with a warning).
/// `between` averages over all `N²` text/graph combinations, matched pairs
/// included; within-modality averages run over unordered distinct pairs.
pub fn alignment_metrics(s: &RepresentationSnapshot) -> Result<AlignmentMetrics, AnalysisError> {
    check_pair_shapes(s)?;
    if !s.z_text.is_finite() || !s.z_graph.is_finite() {
        return Err(AnalysisError::NonFinite);
    }
    let mut text = Vec::new();
    let mut graph = Vec::new();
    for i in 0..s.z_text.rows() {
        let (t, g) = (s.z_text.row(i), s.z_graph.row(i));
        let (nt, ng) = (norm(t), norm(g));
        if nt < 1e-12 || ng < 1e-12 {
            log::warn!("snapshot row {i} has a zero-norm projection, excluded from metrics");
            continue;
        }
        text.push(t.iter().map(|x| x / nt).collect::<Vec<_>>());
        graph.push(g.iter().map(|x| x / ng).collect::<Vec<_>>());
    }
    let n = text.len();
    if n < 2 {
        return Err(AnalysisError::TooFewRows(n));
    }
    let paired_cos = text.iter().zip(&graph).map(|(t, g)| dot(t, g)).sum::<f64>() / n as f64;
    let within = |rows: &[Vec<f64>]| {
        let mut acc = 0.0;
        for i in 0..n {
            for j in i + 1..n {
                acc += 1.0 - dot(&rows[i], &rows[j]);
            }
        }
        acc / (n * (n - 1) / 2) as f64
    };
    let mut between = 0.0;
    for t in &text {
        for g in &graph {
            between += 1.0 - dot(t, g);
        }
    }
    Ok(AlignmentMetrics {
        paired_cos,
        within_text: within(&text),
        within_graph: within(&graph),
        between: between / (n * n) as f64,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Regime {
    Complementarity,
    Partial,
    Complete,
}

impl Regime {
    pub fn as_str(self) -> &'static str {
        match self {
            Regime::Complementarity => "complementarity",
            Regime::Partial => "partial",
            Regime::Complete => "complete",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegimeThresholds {
    /// Final ratio must be within `1 + eps_align` for complete alignment.
    pub eps_align: f64,
    /// Every ratio must be at least `1 + eps_comp` for complementarity.
    pub eps_comp: f64,
    /// A series counts as rising when its fitted change over the run
    /// exceeds this fraction of its mean.
    pub eps_trend: f64,
}

impl Default for RegimeThresholds {
    fn default() -> Self {
        Self {
            eps_align: 0.15,
            eps_comp: 0.25,
            eps_trend: 0.05,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegimeVerdict {
    pub regime: Regime,
    pub final_ratio: f64,
    pub ratio_slope: f64,
    pub within_slope: f64,
    pub between_slope: f64,
    pub ratios: Vec<f64>,
}

/// Least-squares slope of `ys` against `0, 1, …`.
pub fn ls_slope(ys: &[f64]) -> f64 {
    let n = ys.len() as f64;
    if ys.len() < 2 {
        return 0.0;
    }
    let mx = (n - 1.0) / 2.0;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for (i, y) in ys.iter().enumerate() {
        let dx = i as f64 - mx;
        sxy += dx * (y - my);
        sxx += dx * dx;
    }
    sxy / sxx
}

fn rising(ys: &[f64], eps: f64) -> bool {
    let mean = ys.iter().sum::<f64>() / ys.len() as f64;
    ls_slope(ys) * (ys.len() - 1) as f64 > eps * mean.abs()
}

/// Classifies a metric trajectory with `r_e = between / mean(within)`:
///
/// * complete: final `r ≤ 1 + eps_align`, `r` trends down and the between
///   distance is not rising;
/// * complementarity: every `r ≥ 1 + eps_comp` and between and within
///   distances are not both rising;
/// * partial: anything else.
///
/// "Rising" means the least-squares rise over the run exceeds `eps_trend`
/// times the series mean.
pub fn regime_verdict(
    trajectory: &[AlignmentMetrics],
    th: &RegimeThresholds,
) -> Result<RegimeVerdict, AnalysisError> {
    if trajectory.len() < 3 {
        return Err(AnalysisError::TooFewEpochs(trajectory.len()));
    }
    let ratios: Vec<f64> = trajectory.iter().map(AlignmentMetrics::ratio).collect();
    if ratios.iter().any(|r| !r.is_finite()) {
        return Err(AnalysisError::NonFinite);
    }
    let within: Vec<f64> = trajectory
        .iter()
        .map(AlignmentMetrics::within_mean)
        .collect();
    let between: Vec<f64> = trajectory.iter().map(|m| m.between).collect();
    let final_ratio = *ratios.last().expect("non-empty");
    let ratio_slope = ls_slope(&ratios);

    let between_rising = rising(&between, th.eps_trend);
    let co_rising = between_rising && rising(&within, th.eps_trend);
    let regime = if final_ratio <= 1.0 + th.eps_align && ratio_slope < 0.0 && !between_rising {
        Regime::Complete
    } else if ratios.iter().all(|&r| r >= 1.0 + th.eps_comp) && !co_rising {
        Regime::Complementarity
    } else {
        Regime::Partial
    };
    Ok(RegimeVerdict {
        regime,
        final_ratio,
        ratio_slope,
        within_slope: ls_slope(&within),
        between_slope: ls_slope(&between),
        ratios,
    })
}
