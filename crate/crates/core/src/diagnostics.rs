//! Accuracy metrics, collapse diagnostics and compression baselines.

use std::io::Write;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::basis::BasisSet;
use crate::error::{Error, Result};
use crate::kmeans::{self, Clustering};
use crate::matrix::Matrix;
use crate::nn::{dot, ParamVector};
use crate::rng::StreamRng;

/// Test accuracy with each sample weighted by the client's training label
/// distribution `P_m(y)`.
pub fn personalized_accuracy(predictions: &[usize], labels: &[usize], label_dist: &[f64]) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(Error::mismatch("predictions", labels.len(), predictions.len()));
    }
    let classes = label_dist.len();
    let mut hits = vec![0u64; classes];
    let mut counts = vec![0u64; classes];
    for (&p, &y) in predictions.iter().zip(labels) {
        if y >= classes {
            return Err(Error::mismatch("label distribution", y + 1, classes));
        }
        counts[y] += 1;
        if p == y {
            hits[y] += 1;
        }
    }
    // scaling by the largest weight keeps constant weights at exactly 1, so
    // the uniform case reduces to the plain ratio of integer counts
    let top = label_dist.iter().copied().fold(0.0, f64::max);
    let mut hit = 0.0;
    let mut total = 0.0;
    if top > 0.0 {
        for y in 0..classes {
            let w = label_dist[y] / top;
            hit += w * hits[y] as f64;
            total += w * counts[y] as f64;
        }
    }
    if total <= 0.0 {
        return Err(Error::ZeroWeight);
    }
    Ok(hit / total)
}

/// Plain fraction of correct predictions.
pub fn global_accuracy(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(Error::mismatch("predictions", labels.len(), predictions.len()));
    }
    if labels.is_empty() {
        return Err(Error::EmptyDataset("no test samples".into()));
    }
    let hits = predictions.iter().zip(labels).filter(|(p, y)| p == y).count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Mean cosine similarity over unordered pairs of non-major bases.
pub fn mean_pairwise_cosine(set: &BasisSet) -> Result<f64> {
    mean_pairwise_cosine_of(set.bases())
}

pub fn mean_pairwise_cosine_of(vectors: &[ParamVector]) -> Result<f64> {
    if vectors.len() < 2 {
        return Err(Error::Config("pairwise cosine needs at least two bases".into()));
    }
    let norms: Vec<f64> = vectors.iter().map(ParamVector::norm).collect();
    if let Some(i) = norms.iter().position(|&n| n == 0.0) {
        return Err(Error::ZeroNorm(i));
    }
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..vectors.len() {
        for j in i + 1..vectors.len() {
            let c = vectors[i].dot(&vectors[j]) / (norms[i] * norms[j]);
            total += c.clamp(-1.0, 1.0);
            pairs += 1;
        }
    }
    Ok(total / pairs as f64)
}

/// Mean over blocks of the Shannon entropy (nats) of each coefficient row.
pub fn alpha_entropy(coefficients: &Matrix) -> f64 {
    if coefficients.rows() == 0 {
        return 0.0;
    }
    let total: f64 = coefficients
        .iter_rows()
        .map(|row| {
            row.iter()
                .filter(|&&a| a > 0.0)
                .map(|&a| -a * a.ln())
                .sum::<f64>()
        })
        .sum();
    // clamp rounding excursions outside [0, ln K]
    let k = coefficients.cols().max(1) as f64;
    (total / coefficients.rows() as f64).clamp(0.0, k.ln())
}

/// Accuracy summary over a set of clients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub personalized: Vec<f64>,
    pub global: Vec<f64>,
    pub mean_personalized: f64,
    pub mean_global: f64,
    /// `|last - best|` when an epoch curve was evaluated.
    pub last_best_gap: Option<f64>,
}

impl EvalReport {
    pub fn new(personalized: Vec<f64>, global: Vec<f64>) -> EvalReport {
        let mean = |v: &[f64]| if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 };
        EvalReport {
            mean_personalized: mean(&personalized),
            mean_global: mean(&global),
            personalized,
            global,
            last_best_gap: None,
        }
    }
}

/// Last-epoch and validation-selected accuracies of one fine-tuning curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LastBest {
    pub last: f64,
    pub best: f64,
    pub best_epoch: usize,
    pub delta: f64,
}

/// `test[e]` and `val[e]` are accuracies after `e` epochs (index 0 is the
/// starting point). The best epoch maximizes validation accuracy, earliest
/// on ties; its test accuracy is reported as `best`.
pub fn last_best(test: &[f64], val: &[f64]) -> Result<LastBest> {
    if test.is_empty() || test.len() != val.len() {
        return Err(Error::mismatch("accuracy curve", test.len().max(1), val.len()));
    }
    let mut best_epoch = 0;
    for (e, &v) in val.iter().enumerate() {
        if v > val[best_epoch] {
            best_epoch = e;
        }
    }
    let last = *test.last().unwrap();
    let best = test[best_epoch];
    Ok(LastBest {
        last,
        best,
        best_epoch,
        delta: (last - best).abs(),
    })
}

/// Reconstruction of a set of models from their top principal components.
#[derive(Debug, Clone)]
pub struct PcaCompression {
    pub reconstructed: Vec<ParamVector>,
    /// Fraction of total variance kept by the top `k` components.
    pub explained_variance: f64,
    /// Eigenvalues of the centered Gram matrix, descending.
    pub eigenvalues: Vec<f64>,
}

/// PCA over the flattened models through the `M × M` Gram matrix of the
/// centered data, so the cost is independent of the parameter count.
///
/// With `X` the centered data and `X Xᵀ = U Λ Uᵀ`, the top-`k` reconstruction
/// is `mean + U_k U_kᵀ X`.
pub fn pca_compress(models: &[ParamVector], k: usize) -> Result<PcaCompression> {
    let m = models.len();
    if k == 0 || k > m {
        return Err(Error::Config(format!("PCA needs 1 <= k <= {m}, got {k}")));
    }
    for p in &models[1..] {
        models[0].check_same_shape(p)?;
    }
    let dim = models[0].len();
    let mut mean = vec![0.0; dim];
    for p in models {
        for (a, v) in mean.iter_mut().zip(p.values()) {
            *a += v;
        }
    }
    mean.iter_mut().for_each(|a| *a /= m as f64);
    let centered: Vec<Vec<f64>> = models
        .iter()
        .map(|p| p.values().iter().zip(&mean).map(|(v, mu)| v - mu).collect())
        .collect();
    let gram = DMatrix::from_fn(m, m, |i, j| dot(&centered[i], &centered[j]));
    let eig = SymmetricEigen::new(gram);
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let eigenvalues: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i].max(0.0)).collect();
    let total: f64 = eigenvalues.iter().sum();
    let kept: f64 = eigenvalues[..k].iter().sum();

    // projector P = U_k U_kᵀ in sample space
    let mut proj = DMatrix::<f64>::zeros(m, m);
    for &i in &order[..k] {
        let u = eig.eigenvectors.column(i);
        proj += u * u.transpose();
    }
    let reconstructed = (0..m)
        .map(|i| {
            let mut values = mean.clone();
            for (j, c) in centered.iter().enumerate() {
                let w = proj[(i, j)];
                if w != 0.0 {
                    for (o, v) in values.iter_mut().zip(c) {
                        *o += w * v;
                    }
                }
            }
            ParamVector::new(values, models[0].block_spec().clone())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PcaCompression {
        reconstructed,
        explained_variance: if total > 0.0 { (kept / total).clamp(0.0, 1.0) } else { 1.0 },
        eigenvalues,
    })
}

/// Replace every model by the centroid of its k-means cluster.
pub fn kmeans_compress(models: &[ParamVector], k: usize, rng: &mut StreamRng) -> Result<(Clustering, Vec<ParamVector>)> {
    for p in models.iter().skip(1) {
        models[0].check_same_shape(p)?;
    }
    let points: Vec<&[f64]> = models.iter().map(ParamVector::values).collect();
    let clustering = kmeans::kmeans(&points, k, rng)?;
    let replaced = clustering
        .assignments
        .iter()
        .map(|&a| ParamVector::new(clustering.centroids[a].clone(), models[0].block_spec().clone()))
        .collect::<Result<Vec<_>>>()?;
    Ok((clustering, replaced))
}

/// Adjusted Rand index between two labelings.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> f64 {
    assert_eq!(a.len(), b.len());
    let n = a.len();
    let ka = a.iter().max().map_or(0, |m| m + 1);
    let kb = b.iter().max().map_or(0, |m| m + 1);
    let mut table = vec![vec![0u64; kb]; ka];
    for (&x, &y) in a.iter().zip(b) {
        table[x][y] += 1;
    }
    let c2 = |v: u64| (v * v.saturating_sub(1)) as f64 / 2.0;
    let sum_cells: f64 = table.iter().flatten().map(|&v| c2(v)).sum();
    let sum_a: f64 = table.iter().map(|r| c2(r.iter().sum())).sum();
    let sum_b: f64 = (0..kb).map(|j| c2(table.iter().map(|r| r[j]).sum())).sum();
    let total = c2(n as u64);
    let expected = sum_a * sum_b / total;
    let max = 0.5 * (sum_a + sum_b);
    if max == expected {
        return 1.0;
    }
    (sum_cells - expected) / (max - expected)
}

/// Coefficients learned by one client.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientCoefficients {
    pub client_id: usize,
    pub domain: String,
    pub coefficients: Matrix,
}

/// One CSV row per (client, block, basis): `client_id,domain,block,basis,coefficient`.
pub fn coefficient_heatmap_export<W: Write>(clients: &[ClientCoefficients], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["client_id", "domain", "block", "basis", "coefficient"])?;
    for c in clients {
        for b in 0..c.coefficients.rows() {
            for k in 0..c.coefficients.cols() {
                w.write_record([
                    c.client_id.to_string(),
                    c.domain.clone(),
                    b.to_string(),
                    k.to_string(),
                    format!("{:.16e}", c.coefficients.get(b, k)),
                ])?;
            }
        }
    }
    w.flush().map_err(|e| Error::io("coefficient export", e))?;
    Ok(())
}

/// Inverse of [`coefficient_heatmap_export`].
pub fn coefficient_heatmap_import<R: std::io::Read>(reader: R) -> Result<Vec<ClientCoefficients>> {
    #[derive(Deserialize)]
    struct Row {
        client_id: usize,
        domain: String,
        block: usize,
        basis: usize,
        coefficient: f64,
    }
    let mut rows = Vec::new();
    for r in csv::Reader::from_reader(reader).deserialize() {
        let r: Row = r?;
        rows.push(r);
    }
    let mut out: Vec<ClientCoefficients> = Vec::new();
    let mut i = 0;
    while i < rows.len() {
        let id = rows[i].client_id;
        let end = rows[i..].iter().position(|r| r.client_id != id).map_or(rows.len(), |p| i + p);
        let group = &rows[i..end];
        let nb = group.iter().map(|r| r.block).max().unwrap() + 1;
        let k = group.iter().map(|r| r.basis).max().unwrap() + 1;
        let mut m = Matrix::zeros(nb, k);
        for r in group {
            m.set(r.block, r.basis, r.coefficient);
        }
        out.push(ClientCoefficients {
            client_id: id,
            domain: group[0].domain.clone(),
            coefficients: m,
        });
        i = end;
    }
    Ok(out)
}
