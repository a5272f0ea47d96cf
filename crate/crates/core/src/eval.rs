//! Metrics, score containers, seed aggregation and the 2D grid export.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use numcore::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const SIMPLEX_TOL: f64 = 1e-6;

/// Per-input scores. Every score is an uncertainty: higher means less sure.
#[derive(Debug, Clone, PartialEq)]
pub struct UncertaintyScores {
    pub predicted_label: Vec<usize>,
    pub aleatoric: Option<Vec<f64>>,
    pub epistemic: Option<Vec<f64>>,
    pub predictive: Vec<f64>,
    /// Predictive class probabilities, `N×C`.
    pub probs: Tensor,
}

impl UncertaintyScores {
    pub fn len(&self) -> usize {
        self.predictive.len()
    }

    pub fn is_empty(&self) -> bool {
        self.predictive.is_empty()
    }

    pub fn get(&self, kind: ScoreKind) -> Option<&[f64]> {
        match kind {
            ScoreKind::Aleatoric => self.aleatoric.as_deref(),
            ScoreKind::Epistemic => self.epistemic.as_deref(),
            ScoreKind::Predictive => Some(&self.predictive),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreKind {
    Aleatoric,
    Epistemic,
    Predictive,
}

impl ScoreKind {
    pub const ALL: [ScoreKind; 3] = [ScoreKind::Aleatoric, ScoreKind::Epistemic, ScoreKind::Predictive];

    pub fn name(self) -> &'static str {
        match self {
            ScoreKind::Aleatoric => "aleatoric",
            ScoreKind::Epistemic => "epistemic",
            ScoreKind::Predictive => "predictive",
        }
    }
}

/// Shannon entropy (nats) of every row of a probability matrix.
pub fn entropy_rows(probs: &Tensor) -> Vec<f64> {
    let n = probs.shape()[0];
    (0..n).map(|i| -probs.row(i).iter().filter(|&&p| p > 0.0).map(|p| p * p.ln()).sum::<f64>()).collect()
}

/// First index of the row maximum.
pub fn argmax_rows(t: &Tensor) -> Vec<usize> {
    let n = t.shape()[0];
    (0..n)
        .map(|i| {
            let row = t.row(i);
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

pub fn accuracy(pred: &[usize], truth: &[usize]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::Shape(format!("{} predictions for {} labels", pred.len(), truth.len())));
    }
    if pred.is_empty() {
        return Err(Error::Shape("accuracy of an empty set".into()));
    }
    let hits = pred.iter().zip(truth).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / pred.len() as f64)
}

/// Mean over samples of `Σ_c (p_c − 1[y = c])²`.
pub fn brier(probs: &Tensor, truth: &[usize]) -> Result<f64> {
    let (n, c) = probs.dims2()?;
    if n != truth.len() || n == 0 {
        return Err(Error::Shape(format!("{n} probability rows for {} labels", truth.len())));
    }
    let mut total = 0.0;
    for (i, &y) in truth.iter().enumerate() {
        if y >= c {
            return Err(Error::Shape(format!("label {y} with {c} classes")));
        }
        let row = probs.row(i);
        let s: f64 = row.iter().sum();
        if (s - 1.0).abs() > SIMPLEX_TOL || row.iter().any(|&p| p < -SIMPLEX_TOL) {
            return Err(Error::Num(numcore::Error::Domain(format!("row {i} is not on the simplex (sum {s})"))));
        }
        total += row
            .iter()
            .enumerate()
            .map(|(j, &p)| {
                let t = if j == y { 1.0 } else { 0.0 };
                (p - t) * (p - t)
            })
            .sum::<f64>();
    }
    Ok(total / n as f64)
}

/// Probability that a random OOD score exceeds a random ID score, ties
/// counted as one half (Mann–Whitney U over average ranks).
pub fn auroc(id: &[f64], ood: &[f64]) -> Result<f64> {
    if id.is_empty() || ood.is_empty() {
        return Err(Error::Shape("AUROC needs at least one ID and one OOD score".into()));
    }
    if id.iter().chain(ood).any(|v| !v.is_finite()) {
        return Err(Error::Num(numcore::Error::Domain("non-finite uncertainty score".into())));
    }
    let mut all: Vec<(f64, bool)> = id.iter().map(|&v| (v, false)).chain(ood.iter().map(|&v| (v, true))).collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j + 1 < all.len() && all[j + 1].0 == all[i].0 {
            j += 1;
        }
        // ranks are 1-based; a tie block shares its average rank
        let avg = (i + j + 2) as f64 / 2.0;
        rank_sum += avg * all[i..=j].iter().filter(|e| e.1).count() as f64;
        i = j + 1;
    }
    let m = ood.len() as f64;
    let u = rank_sum - m * (m + 1.0) / 2.0;
    Ok(u / (m * id.len() as f64))
}

/// One metric value of one seed, i.e. one row of a results CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricValue {
    pub metric: String,
    pub dataset: String,
    pub value: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SeedReport {
    pub seed: u64,
    pub values: Vec<MetricValue>,
}

impl SeedReport {
    pub fn new(seed: u64) -> Self {
        Self { seed, values: Vec::new() }
    }

    pub fn push(&mut self, metric: impl Into<String>, dataset: impl Into<String>, value: f64) {
        self.values.push(MetricValue { metric: metric.into(), dataset: dataset.into(), value });
    }

    pub fn get(&self, metric: &str, dataset: &str) -> Option<f64> {
        self.values.iter().find(|v| v.metric == metric && v.dataset == dataset).map(|v| v.value)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    /// Sample standard deviation; absent with a single seed.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub std: Option<f64>,
    pub n: usize,
}

impl Summary {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = (n >= 2).then(|| {
            let ss: f64 = values.iter().map(|v| (v - mean) * (v - mean)).sum();
            (ss / (n - 1) as f64).sqrt()
        });
        Self { mean, std, n }
    }

    /// Table rendering with two decimals, e.g. `71.12 ± 0.18`.
    pub fn format(&self, scale: f64) -> String {
        match self.std {
            Some(s) => format!("{:.2} ± {:.2}", self.mean * scale, s * scale),
            None => format!("{:.2}", self.mean * scale),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub metric: String,
    pub dataset: String,
    #[serde(flatten)]
    pub summary: Summary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub seeds: Vec<u64>,
    pub metrics: Vec<MetricSummary>,
}

impl MetricReport {
    pub fn get(&self, metric: &str, dataset: &str) -> Option<&Summary> {
        self.metrics.iter().find(|m| m.metric == metric && m.dataset == dataset).map(|m| &m.summary)
    }
}

/// Mean and sample std of every (metric, dataset) pair across seeds.
pub fn aggregate(reports: &[SeedReport]) -> Result<MetricReport> {
    if reports.is_empty() {
        return Err(Error::Config("nothing to aggregate".into()));
    }
    let mut groups: BTreeMap<(String, String), Vec<f64>> = BTreeMap::new();
    for r in reports {
        for v in &r.values {
            groups.entry((v.metric.clone(), v.dataset.clone())).or_default().push(v.value);
        }
    }
    Ok(MetricReport {
        seeds: reports.iter().map(|r| r.seed).collect(),
        metrics: groups
            .into_iter()
            .map(|((metric, dataset), vals)| MetricSummary { metric, dataset, summary: Summary::of(&vals) })
            .collect(),
    })
}

/// Latent collapse ratio var(z·v_⊥)/var(z·v_∥) over the probe codes `z`.
///
/// `v_∥` is the unit difference of the two class means of `train_z`; `v_⊥`
/// is the top principal axis of `z` after projecting `v_∥` out. Values near
/// zero mean the encoder keeps only the discriminative direction.
pub fn collapse_ratio(z: &Tensor, train_z: &Tensor, labels: &[usize]) -> Result<f64> {
    let (n, h) = train_z.dims2()?;
    let (g, hz) = z.dims2()?;
    if hz != h || labels.len() != n || g < 2 {
        return Err(Error::Shape(format!(
            "collapse ratio over {g}x{hz} probes, {n}x{h} codes, {} labels",
            labels.len()
        )));
    }
    let mut sums = [vec![0.0; h], vec![0.0; h]];
    let mut counts = [0usize; 2];
    for (i, &y) in labels.iter().enumerate() {
        if y > 1 {
            return Err(Error::Shape("collapse ratio needs binary labels".into()));
        }
        counts[y] += 1;
        for (s, v) in sums[y].iter_mut().zip(train_z.row(i)) {
            *s += v;
        }
    }
    if counts.contains(&0) {
        return Err(Error::Shape("collapse ratio needs both classes".into()));
    }
    let mut par: Vec<f64> = (0..h).map(|j| sums[1][j] / counts[1] as f64 - sums[0][j] / counts[0] as f64).collect();
    let norm = par.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !(norm > 0.0) {
        return Err(Error::Num(numcore::Error::Domain("class means coincide".into())));
    }
    par.iter_mut().for_each(|v| *v /= norm);

    let mean: Vec<f64> = (0..h).map(|j| (0..g).map(|i| z.get2(i, j)).sum::<f64>() / g as f64).collect();
    let mut var_par = 0.0;
    let mut perp = vec![0.0; g * h];
    for i in 0..g {
        let row = &mut perp[i * h..(i + 1) * h];
        for (j, r) in row.iter_mut().enumerate() {
            *r = z.get2(i, j) - mean[j];
        }
        let p: f64 = row.iter().zip(&par).map(|(a, b)| a * b).sum();
        var_par += p * p;
        row.iter_mut().zip(&par).for_each(|(r, b)| *r -= p * b);
    }
    var_par /= g as f64;
    let cov = Tensor::new(vec![g, h], perp)?;
    let cov = cov.transpose()?.matmul(&cov)?.scale(1.0 / g as f64);
    Ok(top_eigenvalue(&cov) / var_par)
}

/// Largest eigenvalue of a symmetric PSD matrix by power iteration.
fn top_eigenvalue(a: &Tensor) -> f64 {
    let h = a.shape()[0];
    // start off every axis so no eigenvector is missed by symmetry
    let mut v: Vec<f64> = (0..h).map(|i| 1.0 + (i as f64 * 0.618).fract()).collect();
    let mut lambda = 0.0;
    for _ in 0..10_000 {
        let w: Vec<f64> = (0..h).map(|i| (0..h).map(|j| a.get2(i, j) * v[j]).sum()).collect();
        let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        let done = (norm - lambda).abs() <= 1e-12 * norm;
        lambda = norm;
        v = w.into_iter().map(|x| x / norm).collect();
        if done {
            break;
        }
    }
    lambda
}

/// Row-major scalar field over a square 2D lattice (x varies fastest).
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    pub extent: [f64; 2],
    pub resolution: usize,
    pub values: Vec<f64>,
}

impl Grid {
    /// CSV: a metadata header line, then one row of `resolution` values per y.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "x_min,x_max,y_min,y_max,resolution")?;
        let [lo, hi] = self.extent;
        writeln!(f, "{lo},{hi},{lo},{hi},{}", self.resolution)?;
        for row in self.values.chunks(self.resolution) {
            let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            writeln!(f, "{}", line.join(","))?;
        }
        f.flush()?;
        Ok(())
    }
}
