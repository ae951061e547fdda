//! Benchmark construction for personalized federated learning.
//!
//! A labelled table with a domain column is turned into clients as follows:
//!
//! 1. rows are grouped by domain;
//! 2. each domain is split into train / new / validation / test parts, with
//!    validation and test class-balanced and shared by every client of the
//!    domain;
//! 3. the train and new parts are each partitioned across clients with
//!    class-wise Dirichlet sampling;
//! 4. each client records its empirical training label distribution
//!    `P_m(y)`, which later reweights the shared test set.
//!
//! Because the test set is class-balanced, reweighting it by `P_m(y)` gives
//! an evaluation distribution equal to the client's training distribution.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Batch;
use crate::rng::{RngSeed, StreamRng};

/// Labelled feature table with a domain annotation per row.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub dim: usize,
    pub classes: usize,
    pub features: Vec<f64>,
    pub labels: Vec<usize>,
    pub domains: Vec<String>,
}

impl Table {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.features[r * self.dim..(r + 1) * self.dim]
    }

    /// Domain names in order of first appearance.
    pub fn domain_names(&self) -> Vec<String> {
        let mut names: Vec<String> = Vec::new();
        for d in &self.domains {
            if !names.iter().any(|n| n == d) {
                names.push(d.clone());
            }
        }
        names
    }

    /// Concatenate domain datasets in order; their row ids are rewritten to
    /// match the table.
    pub fn from_domains(domains: &mut [DomainDataset]) -> Result<Table> {
        let first = domains
            .first()
            .ok_or_else(|| Error::EmptyDataset("no domains".into()))?;
        let dim = first.dim;
        let classes = domains.iter().map(|d| d.classes).max().unwrap_or(0);
        let mut t = Table {
            dim,
            classes,
            features: Vec::new(),
            labels: Vec::new(),
            domains: Vec::new(),
        };
        for d in domains.iter_mut() {
            if d.dim != dim {
                return Err(Error::mismatch(format!("domain {} features", d.domain_id), dim, d.dim));
            }
            let start = t.labels.len();
            d.rows = (start..start + d.labels.len()).collect();
            t.features.extend_from_slice(&d.features);
            t.labels.extend_from_slice(&d.labels);
            t.domains
                .extend(std::iter::repeat_n(d.domain_id.clone(), d.labels.len()));
        }
        Ok(t)
    }

    /// CSV with header `f0..f{d-1},label,domain`.
    pub fn read_csv<R: Read>(reader: R) -> Result<Table> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
        let headers = rdr.headers()?.clone();
        let find = |name: &str| {
            headers
                .iter()
                .position(|h| h.trim() == name)
                .ok_or_else(|| Error::MissingColumn(name.into()))
        };
        let label_col = find("label")?;
        let domain_col = find("domain")?;
        let mut feature_cols = Vec::new();
        while let Some(c) = headers.iter().position(|h| h.trim() == format!("f{}", feature_cols.len())) {
            feature_cols.push(c);
        }
        if feature_cols.is_empty() {
            return Err(Error::MissingColumn("f0".into()));
        }
        let dim = feature_cols.len();
        let mut t = Table {
            dim,
            classes: 0,
            features: Vec::new(),
            labels: Vec::new(),
            domains: Vec::new(),
        };
        for (line, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let field = |c: usize| rec.get(c).unwrap_or("").trim();
            for &c in &feature_cols {
                let v: f64 = field(c).parse().map_err(|_| {
                    Error::Format(format!("row {line}: bad feature value `{}`", field(c)))
                })?;
                if !v.is_finite() {
                    return Err(Error::Format(format!("row {line}: non-finite feature")));
                }
                t.features.push(v);
            }
            let y: usize = field(label_col)
                .parse()
                .map_err(|_| Error::Format(format!("row {line}: bad label `{}`", field(label_col))))?;
            t.labels.push(y);
            t.domains.push(field(domain_col).to_string());
        }
        if t.is_empty() {
            return Err(Error::EmptyDataset("CSV has no rows".into()));
        }
        t.classes = t.labels.iter().max().map_or(0, |m| m + 1).max(2);
        Ok(t)
    }

    pub fn read_csv_path(path: &Path) -> Result<Table> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Table::read_csv(std::io::BufReader::new(f))
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header: Vec<String> = (0..self.dim).map(|i| format!("f{i}")).collect();
        header.push("label".into());
        header.push("domain".into());
        w.write_record(&header)?;
        for r in 0..self.len() {
            let mut rec: Vec<String> = self.row(r).iter().map(|v| format!("{v:.16e}")).collect();
            rec.push(self.labels[r].to_string());
            rec.push(self.domains[r].clone());
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::io("csv output", e))?;
        Ok(())
    }
}

/// Rows of a single domain.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainDataset {
    pub domain_id: String,
    pub dim: usize,
    pub classes: usize,
    /// Row-major features, one row per sample.
    pub features: Vec<f64>,
    pub labels: Vec<usize>,
    /// Row index of each sample in the source table.
    pub rows: Vec<usize>,
}

impl DomainDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Group table rows by domain, in order of first appearance.
pub fn separate_domains(table: &Table) -> Vec<DomainDataset> {
    table
        .domain_names()
        .into_iter()
        .map(|name| {
            let rows: Vec<usize> = (0..table.len()).filter(|&r| table.domains[r] == name).collect();
            let mut features = Vec::with_capacity(rows.len() * table.dim);
            for &r in &rows {
                features.extend_from_slice(table.row(r));
            }
            DomainDataset {
                domain_id: name,
                dim: table.dim,
                classes: table.classes,
                features,
                labels: rows.iter().map(|&r| table.labels[r]).collect(),
                rows,
            }
        })
        .collect()
}

/// Fractions of each domain sent to train / new / validation / test.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Fractions {
    pub train: f64,
    pub new: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for Fractions {
    fn default() -> Self {
        Fractions {
            train: 0.6,
            new: 0.2,
            val: 0.05,
            test: 0.15,
        }
    }
}

impl Fractions {
    pub fn validate(&self) -> Result<()> {
        let parts = [self.train, self.new, self.val, self.test];
        if parts.iter().any(|&f| !(f > 0.0)) {
            return Err(Error::Config("split fractions must be positive".into()));
        }
        if (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config("split fractions must sum to 1".into()));
        }
        Ok(())
    }
}

/// Positions (into a [`DomainDataset`]) of each part of a domain split.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DomainSplit {
    pub train: Vec<usize>,
    pub new: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Split one domain; validation and test hold `⌊fraction · n / C⌋` samples of
/// every class present in the domain.
pub fn split_domain(ds: &DomainDataset, fractions: Fractions, rng: &mut StreamRng) -> Result<DomainSplit> {
    fractions.validate()?;
    let n = ds.len();
    if n == 0 {
        return Err(Error::EmptyDataset(format!("domain {}", ds.domain_id)));
    }
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &y) in ds.labels.iter().enumerate() {
        by_class.entry(y).or_default().push(i);
    }
    let present = by_class.len();
    let per_class = |f: f64| (f * n as f64 / present as f64).floor() as usize;
    let (test_pc, val_pc) = (per_class(fractions.test), per_class(fractions.val));

    let mut split = DomainSplit {
        train: Vec::new(),
        new: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    let mut rest = Vec::new();
    for (&class, members) in by_class.iter_mut() {
        if members.len() < test_pc + val_pc {
            return Err(Error::ClassTooSmall {
                class,
                available: members.len(),
                required: test_pc + val_pc,
            });
        }
        members.shuffle(rng);
        split.test.extend_from_slice(&members[..test_pc]);
        split.val.extend_from_slice(&members[test_pc..test_pc + val_pc]);
        rest.extend_from_slice(&members[test_pc + val_pc..]);
    }
    rest.sort_unstable();
    rest.shuffle(rng);
    let n_new = ((fractions.new * n as f64).floor() as usize).min(rest.len());
    split.new = rest[..n_new].to_vec();
    split.train = rest[n_new..].to_vec();
    for part in [&mut split.train, &mut split.new, &mut split.val, &mut split.test] {
        part.sort_unstable();
    }
    Ok(split)
}

const MAX_PARTITION_ATTEMPTS: usize = 100;

fn sample_dirichlet(beta: f64, m: usize, rng: &mut StreamRng) -> Result<Vec<f64>> {
    let gamma = Gamma::new(beta, 1.0).map_err(|e| Error::Config(format!("Dirichlet concentration: {e}")))?;
    loop {
        let draws: Vec<f64> = (0..m).map(|_| gamma.sample(rng)).collect();
        let total: f64 = draws.iter().sum();
        if total > 0.0 && total.is_finite() {
            return Ok(draws.into_iter().map(|g| g / total).collect());
        }
    }
}

fn sample_categorical(p: &[f64], rng: &mut StreamRng) -> usize {
    let mut u: f64 = rng.random();
    for (i, &pi) in p.iter().enumerate() {
        if u < pi {
            return i;
        }
        u -= pi;
    }
    // rounding residue: last client with non-zero mass
    p.iter().rposition(|&pi| pi > 0.0).unwrap_or(p.len() - 1)
}

/// Class-wise Dirichlet partition of `indices` (with matching `labels`)
/// into `clients` non-empty sets.
///
/// For every class a proportion vector `p ~ Dir(β·1)` is drawn and each of
/// that class's samples is assigned to a client drawn from `p`. Partitions
/// with an empty client are redrawn, up to 100 attempts.
pub fn dirichlet_partition(
    indices: &[usize],
    labels: &[usize],
    clients: usize,
    beta: f64,
    rng: &mut StreamRng,
) -> Result<Vec<Vec<usize>>> {
    if clients == 0 {
        return Err(Error::Config("need at least one client".into()));
    }
    if !(beta > 0.0) {
        return Err(Error::Config(format!("Dirichlet concentration must be positive, got {beta}")));
    }
    if indices.len() != labels.len() {
        return Err(Error::mismatch("partition labels", indices.len(), labels.len()));
    }
    if indices.len() < clients {
        return Err(Error::Partition(format!(
            "{} samples cannot fill {clients} clients",
            indices.len()
        )));
    }
    if clients == 1 {
        return Ok(vec![indices.to_vec()]);
    }
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (&i, &y) in indices.iter().zip(labels) {
        by_class.entry(y).or_default().push(i);
    }
    for _ in 0..MAX_PARTITION_ATTEMPTS {
        let mut parts = vec![Vec::new(); clients];
        for members in by_class.values() {
            let p = sample_dirichlet(beta, clients, rng)?;
            for &i in members {
                parts[sample_categorical(&p, rng)].push(i);
            }
        }
        if parts.iter().all(|p| !p.is_empty()) {
            for p in &mut parts {
                p.sort_unstable();
            }
            return Ok(parts);
        }
    }
    Err(Error::Partition(format!(
        "no partition into {clients} non-empty clients after {MAX_PARTITION_ATTEMPTS} attempts"
    )))
}

/// Empirical label frequencies over `classes`.
pub fn label_distribution(labels: impl IntoIterator<Item = usize>, classes: usize) -> Vec<f64> {
    let mut counts = vec![0usize; classes];
    let mut n = 0usize;
    for y in labels {
        counts[y] += 1;
        n += 1;
    }
    if n == 0 {
        return vec![0.0; classes];
    }
    counts.into_iter().map(|c| c as f64 / n as f64).collect()
}

/// L1 distance between two label distributions, in `[0, 2]`.
pub fn label_discrepancy(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::mismatch("label distribution", p.len(), q.len()));
    }
    Ok(p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum())
}

/// Class distribution of a test set once each sample is weighted by `P_m(y)`.
pub fn reweighted_distribution(p: &[f64], test_labels: &[usize]) -> Vec<f64> {
    let mut w = vec![0.0; p.len()];
    for &y in test_labels {
        w[y] += p[y];
    }
    let total: f64 = w.iter().sum();
    if total > 0.0 {
        w.iter_mut().for_each(|v| *v /= total);
    }
    w
}

/// Parameters of the synthetic multi-domain generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub domains: usize,
    pub classes: usize,
    pub samples_per_domain: usize,
    pub dim: usize,
    /// Strength of the per-domain rotation and offset.
    pub domain_shift: f64,
    /// Standard deviation of the class means.
    pub class_separation: f64,
    /// Standard deviation of the isotropic sample noise.
    pub noise: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            domains: 4,
            classes: 7,
            samples_per_domain: 1000,
            dim: 16,
            domain_shift: 1.5,
            class_separation: 1.0,
            noise: 1.0,
        }
    }
}

fn standard_normal(rng: &mut StreamRng) -> f64 {
    StandardNormal.sample(rng)
}

/// Cayley transform `(I - A)^{-1} (I + A)` of a random skew-symmetric `A`
/// scaled by `shift`: an exact rotation that is the identity at `shift = 0`.
fn random_rotation(dim: usize, shift: f64, rng: &mut StreamRng) -> DMatrix<f64> {
    let g = DMatrix::from_fn(dim, dim, |_, _| standard_normal(rng));
    let skew = (&g - g.transpose()) * (0.5 * shift / (dim as f64).sqrt());
    let eye = DMatrix::<f64>::identity(dim, dim);
    let lhs = &eye - &skew;
    let rhs = &eye + &skew;
    lhs.lu().solve(&rhs).expect("I - A is invertible for skew-symmetric A")
}

/// Gaussian class clusters whose means are rotated and offset per domain.
///
/// Class means are drawn once; domain `d` maps every mean through its own
/// rotation and adds its own offset, both scaled by `domain_shift`. Labels
/// cycle through the classes so every domain is class-balanced.
pub fn make_synthetic_multidomain(cfg: &SyntheticConfig, seed: RngSeed) -> Result<Vec<DomainDataset>> {
    if cfg.domains == 0 || cfg.classes < 2 || cfg.samples_per_domain == 0 || cfg.dim == 0 {
        return Err(Error::Config("synthetic generator sizes must be positive (classes >= 2)".into()));
    }
    if !(cfg.noise > 0.0) || !(cfg.class_separation > 0.0) || cfg.domain_shift < 0.0 {
        return Err(Error::Config("synthetic generator scales must be positive".into()));
    }
    let mut rng = seed.stream("synthetic-means", &[]);
    let means: Vec<Vec<f64>> = (0..cfg.classes)
        .map(|_| (0..cfg.dim).map(|_| cfg.class_separation * standard_normal(&mut rng)).collect())
        .collect();
    let mut out = Vec::with_capacity(cfg.domains);
    for d in 0..cfg.domains {
        let mut rng = seed.stream("synthetic-domain", &[d as u64]);
        let rot = random_rotation(cfg.dim, cfg.domain_shift, &mut rng);
        let offset: Vec<f64> = (0..cfg.dim)
            .map(|_| cfg.domain_shift * standard_normal(&mut rng))
            .collect();
        let shifted: Vec<Vec<f64>> = means
            .iter()
            .map(|m| {
                let v = &rot * nalgebra::DVector::from_column_slice(m);
                v.iter().zip(&offset).map(|(a, b)| a + b).collect()
            })
            .collect();
        let mut labels: Vec<usize> = (0..cfg.samples_per_domain).map(|i| i % cfg.classes).collect();
        labels.shuffle(&mut rng);
        let mut features = Vec::with_capacity(cfg.samples_per_domain * cfg.dim);
        for &y in &labels {
            for &mu in &shifted[y] {
                features.push(mu + cfg.noise * standard_normal(&mut rng));
            }
        }
        out.push(DomainDataset {
            domain_id: format!("domain{d}"),
            dim: cfg.dim,
            classes: cfg.classes,
            features,
            labels,
            rows: Vec::new(),
        });
    }
    // row ids follow concatenation order
    let mut start = 0;
    for d in &mut out {
        d.rows = (start..start + d.len()).collect();
        start += d.len();
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    pub participating_per_domain: usize,
    pub new_per_domain: usize,
    /// Dirichlet concentration for class skew.
    pub beta: f64,
    pub fractions: Fractions,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            participating_per_domain: 20,
            new_per_domain: 10,
            beta: 0.3,
            fractions: Fractions::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Participating,
    New,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientEntry {
    pub id: usize,
    pub role: Role,
    pub domain: String,
    /// Table row indices of the client's training samples.
    pub train: Vec<usize>,
    pub label_distribution: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainEntry {
    pub domain: String,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Everything needed to rebuild clients and evaluation sets from a table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub classes: usize,
    pub clients: Vec<ClientEntry>,
    pub domains: Vec<DomainEntry>,
}

impl Manifest {
    pub fn participating(&self) -> impl Iterator<Item = &ClientEntry> {
        self.clients.iter().filter(|c| c.role == Role::Participating)
    }

    pub fn new_clients(&self) -> impl Iterator<Item = &ClientEntry> {
        self.clients.iter().filter(|c| c.role == Role::New)
    }

    pub fn domain(&self, name: &str) -> Option<&DomainEntry> {
        self.domains.iter().find(|d| d.domain == name)
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(s: &str) -> Result<Manifest> {
        Ok(serde_json::from_str(s)?)
    }
}

/// Run the whole construction over `table`.
pub fn build_pflbed(table: &Table, cfg: &BenchConfig, seed: RngSeed) -> Result<Manifest> {
    if cfg.participating_per_domain == 0 {
        return Err(Error::Config("need at least one participating client per domain".into()));
    }
    let mut clients = Vec::new();
    let mut domains = Vec::new();
    for (d, ds) in separate_domains(table).iter().enumerate() {
        let split = split_domain(ds, cfg.fractions, &mut seed.stream("split", &[d as u64]))?;
        let to_rows = |pos: &[usize]| pos.iter().map(|&p| ds.rows[p]).collect::<Vec<_>>();
        let groups = [
            (Role::Participating, &split.train, cfg.participating_per_domain, 0u64),
            (Role::New, &split.new, cfg.new_per_domain, 1u64),
        ];
        for (role, part, count, stream) in groups {
            if count == 0 {
                continue;
            }
            let labels: Vec<usize> = part.iter().map(|&p| ds.labels[p]).collect();
            let mut rng = seed.stream("partition", &[d as u64, stream]);
            for members in dirichlet_partition(part, &labels, count, cfg.beta, &mut rng)? {
                clients.push(ClientEntry {
                    id: clients.len(),
                    role,
                    domain: ds.domain_id.clone(),
                    label_distribution: label_distribution(
                        members.iter().map(|&p| ds.labels[p]),
                        table.classes,
                    ),
                    train: to_rows(&members),
                });
            }
        }
        domains.push(DomainEntry {
            domain: ds.domain_id.clone(),
            val: to_rows(&split.val),
            test: to_rows(&split.test),
        });
    }
    Ok(Manifest {
        classes: table.classes,
        clients,
        domains,
    })
}

/// Mean label L1 discrepancy between the two halves of a random 50/50
/// split of every participating client's own data: the per-client
/// evaluation protocol this construction avoids.
pub fn naive_split_discrepancy(table: &Table, manifest: &Manifest, seed: RngSeed) -> f64 {
    let mut total = 0.0;
    let mut count = 0usize;
    for c in manifest.participating() {
        if c.train.len() < 2 {
            continue;
        }
        let mut rows = c.train.clone();
        rows.shuffle(&mut seed.stream("naive-split", &[c.id as u64]));
        let (a, b) = rows.split_at(rows.len() / 2);
        let pa = label_distribution(a.iter().map(|&r| table.labels[r]), manifest.classes);
        let pb = label_distribution(b.iter().map(|&r| table.labels[r]), manifest.classes);
        total += label_discrepancy(&pa, &pb).expect("same class count");
        count += 1;
    }
    if count == 0 {
        0.0
    } else {
        total / count as f64
    }
}

/// A client's training data pulled out of the table.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientDataset {
    pub id: usize,
    pub domain: String,
    pub dim: usize,
    pub features: Vec<f64>,
    pub labels: Vec<usize>,
    pub label_distribution: Vec<f64>,
}

impl ClientDataset {
    pub fn from_rows(table: &Table, id: usize, domain: &str, rows: &[usize]) -> ClientDataset {
        let mut features = Vec::with_capacity(rows.len() * table.dim);
        for &r in rows {
            features.extend_from_slice(table.row(r));
        }
        let labels: Vec<usize> = rows.iter().map(|&r| table.labels[r]).collect();
        ClientDataset {
            id,
            domain: domain.to_string(),
            dim: table.dim,
            label_distribution: label_distribution(labels.iter().copied(), table.classes),
            features,
            labels,
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn batch(&self, positions: &[usize]) -> Result<Batch> {
        Batch::gather(&self.features, &self.labels, self.dim, positions)
    }

    pub fn full_batch(&self) -> Result<Batch> {
        Batch::new(self.features.clone(), self.labels.clone(), self.dim)
    }

    /// First `⌈fraction · n⌉` samples of a seeded shuffle (at least one).
    /// The label distribution is recomputed for the subset.
    pub fn subsample(&self, fraction: f64, classes: usize, rng: &mut StreamRng) -> ClientDataset {
        let n = self.len();
        self.subsample_to(((fraction * n as f64).ceil() as usize).max(1), classes, rng)
    }

    /// Random subset of at most `keep` samples with its distribution recomputed.
    pub fn subsample_to(&self, keep: usize, classes: usize, rng: &mut StreamRng) -> ClientDataset {
        let n = self.len();
        let keep = keep.min(n);
        let mut pos: Vec<usize> = (0..n).collect();
        pos.shuffle(rng);
        pos.truncate(keep);
        pos.sort_unstable();
        let mut features = Vec::with_capacity(keep * self.dim);
        for &p in &pos {
            features.extend_from_slice(&self.features[p * self.dim..(p + 1) * self.dim]);
        }
        let labels: Vec<usize> = pos.iter().map(|&p| self.labels[p]).collect();
        ClientDataset {
            id: self.id,
            domain: self.domain.clone(),
            dim: self.dim,
            label_distribution: label_distribution(labels.iter().copied(), classes),
            features,
            labels,
        }
    }
}

/// A shared per-domain evaluation set.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalSet {
    pub features: Vec<f64>,
    pub labels: Vec<usize>,
}

impl EvalSet {
    pub fn from_rows(table: &Table, rows: &[usize]) -> EvalSet {
        let mut features = Vec::with_capacity(rows.len() * table.dim);
        for &r in rows {
            features.extend_from_slice(table.row(r));
        }
        EvalSet {
            features,
            labels: rows.iter().map(|&r| table.labels[r]).collect(),
        }
    }
}

/// Clients and evaluation sets materialized from a manifest.
#[derive(Debug, Clone)]
pub struct Benchmark {
    pub classes: usize,
    pub dim: usize,
    pub participating: Vec<ClientDataset>,
    pub new: Vec<ClientDataset>,
    pub val: BTreeMap<String, EvalSet>,
    pub test: BTreeMap<String, EvalSet>,
}

impl Benchmark {
    pub fn materialize(table: &Table, manifest: &Manifest) -> Result<Benchmark> {
        let check = |rows: &[usize]| -> Result<()> {
            match rows.iter().find(|&&r| r >= table.len()) {
                Some(&r) => Err(Error::Format(format!("manifest row {r} beyond table of {}", table.len()))),
                None => Ok(()),
            }
        };
        let mut participating = Vec::new();
        let mut new = Vec::new();
        for c in &manifest.clients {
            check(&c.train)?;
            if manifest.domain(&c.domain).is_none() {
                return Err(Error::Format(format!("client {} references unknown domain {}", c.id, c.domain)));
            }
            let mut ds = ClientDataset::from_rows(table, c.id, &c.domain, &c.train);
            ds.label_distribution = c.label_distribution.clone();
            match c.role {
                Role::Participating => participating.push(ds),
                Role::New => new.push(ds),
            }
        }
        let mut val = BTreeMap::new();
        let mut test = BTreeMap::new();
        for d in &manifest.domains {
            check(&d.val)?;
            check(&d.test)?;
            val.insert(d.domain.clone(), EvalSet::from_rows(table, &d.val));
            test.insert(d.domain.clone(), EvalSet::from_rows(table, &d.test));
        }
        Ok(Benchmark {
            classes: manifest.classes,
            dim: table.dim,
            participating,
            new,
            val,
            test,
        })
    }
}
