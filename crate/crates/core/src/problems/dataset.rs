//! Local datasets: CSV ingestion, synthetic generation and label-skewed
//! Dirichlet partitioning across clients.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};

use crate::error::{Result, ZofedError};

const MAX_CSV_BYTES: u64 = 2 * 1024 * 1024 * 1024;
const PARTITION_RETRIES: usize = 100;

/// Feature rows in `[0, 1]` with `+-1` labels and the raw class of each row.
#[derive(Clone, Debug, PartialEq)]
pub struct LocalDataset {
    features: Vec<f64>,
    n_features: usize,
    labels: Vec<f64>,
    classes: Vec<usize>,
}

impl LocalDataset {
    /// `features` is row-major with `labels.len()` rows.
    pub fn new(features: Vec<f64>, n_features: usize, labels: Vec<f64>, classes: Vec<usize>) -> Result<Self> {
        if labels.is_empty() {
            return Err(ZofedError::config("dataset needs at least one row"));
        }
        if n_features == 0 || features.len() != labels.len() * n_features || classes.len() != labels.len() {
            return Err(ZofedError::config("dataset shape mismatch"));
        }
        if let Some(i) = labels.iter().position(|&l| l != 1.0 && l != -1.0) {
            return Err(ZofedError::config(format!("label at row {i} is not +-1")));
        }
        if let Some(i) = features.iter().position(|v| !v.is_finite()) {
            return Err(ZofedError::config(format!("non-finite feature at row {}", i / n_features)));
        }
        Ok(Self {
            features,
            n_features,
            labels,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.n_features..(i + 1) * self.n_features]
    }

    pub fn label(&self, i: usize) -> f64 {
        self.labels[i]
    }

    pub fn labels(&self) -> &[f64] {
        &self.labels
    }

    pub fn class(&self, i: usize) -> usize {
        self.classes[i]
    }

    pub fn classes(&self) -> &[usize] {
        &self.classes
    }

    pub fn num_classes(&self) -> usize {
        self.classes.iter().max().map_or(0, |c| c + 1)
    }

    /// Rows at `indices`, in the given order.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let mut features = Vec::with_capacity(indices.len() * self.n_features);
        for &i in indices {
            features.extend_from_slice(self.row(i));
        }
        Self::new(
            features,
            self.n_features,
            indices.iter().map(|&i| self.labels[i]).collect(),
            indices.iter().map(|&i| self.classes[i]).collect(),
        )
    }

    /// Random split into `(first, rest)` with `round(fraction * len)` rows in `first`.
    pub fn split<R: Rng + ?Sized>(&self, fraction: f64, rng: &mut R) -> Result<(Self, Self)> {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(rng);
        let cut = ((fraction * self.len() as f64).round() as usize).clamp(1, self.len() - 1);
        let (a, b) = idx.split_at(cut);
        let (mut a, mut b) = (a.to_vec(), b.to_vec());
        a.sort_unstable();
        b.sort_unstable();
        Ok((self.subset(&a)?, self.subset(&b)?))
    }
}

/// How raw label strings map to `+-1`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum LabelRule {
    /// Exactly two distinct labels; the smaller maps to `-1`.
    Binary,
    /// The named label maps to `+1`, every other label to `-1`.
    Positive(String),
}

/// The mapping applied during ingestion, ordered by raw class index.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelMapping {
    pub entries: Vec<(String, f64)>,
}

fn sort_raw_labels(labels: &mut [String]) {
    let numeric: Option<Vec<f64>> = labels.iter().map(|l| l.trim().parse::<f64>().ok()).collect();
    if numeric.is_some() {
        labels.sort_by(|a, b| {
            let (x, y) = (a.trim().parse::<f64>().unwrap(), b.trim().parse::<f64>().unwrap());
            x.total_cmp(&y)
        });
    } else {
        labels.sort();
    }
}

/// Min-max scales each column into `[0, 1]`; constant columns become 0.
pub fn min_max_scale(features: &mut [f64], n_features: usize) {
    if n_features == 0 {
        return;
    }
    for j in 0..n_features {
        let col = features.iter().skip(j).step_by(n_features);
        let (lo, hi) = col.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        let range = hi - lo;
        for v in features.iter_mut().skip(j).step_by(n_features) {
            *v = if range > 0.0 { (*v - lo) / range } else { 0.0 };
        }
    }
}

/// Loads a comma-separated file with a header row. Every column except
/// `label_column` is a feature.
pub fn load_csv_dataset(path: &Path, label_column: &str, rule: &LabelRule) -> Result<(LocalDataset, LabelMapping)> {
    let ingest = |row: Option<usize>, message: String| ZofedError::Ingestion { row, message };
    let meta = std::fs::metadata(path).map_err(|e| ingest(None, format!("{}: {e}", path.display())))?;
    if meta.len() > MAX_CSV_BYTES {
        return Err(ingest(None, format!("{} exceeds the 2 GiB limit", path.display())));
    }
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| ingest(None, e.to_string()))?;
    let headers = reader.headers().map_err(|e| ingest(Some(1), e.to_string()))?.clone();
    let label_idx = headers
        .iter()
        .position(|h| h.trim() == label_column)
        .ok_or_else(|| ingest(Some(1), format!("label column `{label_column}` not in header")))?;
    let n_features = headers.len() - 1;
    if n_features == 0 {
        return Err(ingest(Some(1), "no feature columns".into()));
    }

    let mut features = Vec::new();
    let mut raw = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map(|p| p.line() as usize);
            ingest(line, e.to_string())
        })?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        if record.len() != headers.len() {
            return Err(ingest(Some(line), format!("expected {} fields, got {}", headers.len(), record.len())));
        }
        for (j, field) in record.iter().enumerate() {
            if j == label_idx {
                raw.push(field.trim().to_string());
                continue;
            }
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|_| ingest(Some(line), format!("field `{}` is not a number", field)))?;
            if !v.is_finite() {
                return Err(ingest(Some(line), format!("non-finite feature `{field}`")));
            }
            features.push(v);
        }
    }
    if raw.is_empty() {
        return Err(ingest(None, "file has no data rows".into()));
    }

    let mut distinct: Vec<String> = raw.clone();
    distinct.sort();
    distinct.dedup();
    sort_raw_labels(&mut distinct);
    let class_of: BTreeMap<&str, usize> = distinct.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
    let sign_of = |class: usize| -> Result<f64> {
        match rule {
            LabelRule::Binary => {
                if distinct.len() != 2 {
                    return Err(ingest(
                        None,
                        format!("binary label rule needs exactly 2 labels, found {}", distinct.len()),
                    ));
                }
                Ok(if class == 0 { -1.0 } else { 1.0 })
            }
            LabelRule::Positive(p) => Ok(if distinct[class] == *p { 1.0 } else { -1.0 }),
        }
    };
    if let LabelRule::Positive(p) = rule {
        if !class_of.contains_key(p.as_str()) {
            return Err(ingest(None, format!("positive label `{p}` never occurs")));
        }
    }
    let classes: Vec<usize> = raw.iter().map(|r| class_of[r.as_str()]).collect();
    let labels = classes.iter().map(|&c| sign_of(c)).collect::<Result<Vec<_>>>()?;
    let mapping = LabelMapping {
        entries: distinct
            .iter()
            .enumerate()
            .map(|(c, s)| Ok((s.clone(), sign_of(c)?)))
            .collect::<Result<_>>()?,
    };
    min_max_scale(&mut features, n_features);
    Ok((LocalDataset::new(features, n_features, labels, classes)?, mapping))
}

/// Two Gaussian blobs with balanced `+-1` labels, scaled into `[0, 1]`.
pub fn synth_gaussian_blobs<R: Rng + ?Sized>(n_samples: usize, n_features: usize, rng: &mut R) -> Result<LocalDataset> {
    if n_samples < 2 || n_features == 0 {
        return Err(ZofedError::config("synthetic data needs n_samples >= 2 and n_features >= 1"));
    }
    let shift = 1.5 / (n_features as f64).sqrt();
    let mut features = Vec::with_capacity(n_samples * n_features);
    let mut labels = Vec::with_capacity(n_samples);
    let mut classes = Vec::with_capacity(n_samples);
    for i in 0..n_samples {
        let positive = i % 2 == 0;
        let center = if positive { shift } else { -shift };
        for _ in 0..n_features {
            let z: f64 = StandardNormal.sample(rng);
            features.push(center + z);
        }
        labels.push(if positive { 1.0 } else { -1.0 });
        classes.push(usize::from(positive));
    }
    min_max_scale(&mut features, n_features);
    LocalDataset::new(features, n_features, labels, classes)
}

/// Label-skewed non-iid split: per class, client shares are drawn from
/// `Dir(alpha 1_m)`. Retries until every client holds at least one row.
pub fn dirichlet_partition<R: Rng + ?Sized>(
    dataset: &LocalDataset,
    m: usize,
    alpha: f64,
    rng: &mut R,
) -> Result<Vec<LocalDataset>> {
    if m == 0 {
        return Err(ZofedError::config("partition needs m >= 1"));
    }
    if !(alpha > 0.0) || !alpha.is_finite() {
        return Err(ZofedError::config(format!("Dirichlet alpha must be > 0, got {alpha}")));
    }
    if dataset.len() < m {
        return Err(ZofedError::Partition(format!(
            "{} rows cannot cover {m} clients",
            dataset.len()
        )));
    }
    if m == 1 {
        return Ok(vec![dataset.clone()]);
    }
    let gamma = Gamma::new(alpha, 1.0).map_err(|e| ZofedError::config(e.to_string()))?;
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for i in 0..dataset.len() {
        by_class.entry(dataset.class(i)).or_default().push(i);
    }

    for _ in 0..PARTITION_RETRIES {
        let mut owners: Vec<Vec<usize>> = vec![Vec::new(); m];
        for members in by_class.values() {
            let mut members = members.clone();
            members.shuffle(rng);
            let mut shares: Vec<f64> = (0..m).map(|_| gamma.sample(rng)).collect();
            let total: f64 = shares.iter().sum();
            if !(total > 0.0) {
                shares = vec![1.0; m];
            }
            let total: f64 = shares.iter().sum();
            let n = members.len();
            let mut start = 0usize;
            let mut cum = 0.0;
            for (client, share) in shares.iter().enumerate() {
                cum += share / total;
                let end = if client + 1 == m { n } else { ((cum * n as f64).round() as usize).clamp(start, n) };
                owners[client].extend_from_slice(&members[start..end]);
                start = end;
            }
        }
        if owners.iter().all(|o| !o.is_empty()) {
            return owners
                .into_iter()
                .map(|mut o| {
                    o.sort_unstable();
                    dataset.subset(&o)
                })
                .collect();
        }
    }
    Err(ZofedError::Partition(format!(
        "could not give every one of {m} clients a row after {PARTITION_RETRIES} draws; \
         use a larger dataset or a larger alpha (got {alpha})"
    )))
}

/// Uniform random split into `m` nearly equal shards.
pub fn iid_partition<R: Rng + ?Sized>(dataset: &LocalDataset, m: usize, rng: &mut R) -> Result<Vec<LocalDataset>> {
    if m == 0 || dataset.len() < m {
        return Err(ZofedError::Partition(format!("{} rows cannot cover {m} clients", dataset.len())));
    }
    let mut idx: Vec<usize> = (0..dataset.len()).collect();
    idx.shuffle(rng);
    (0..m)
        .map(|c| {
            let lo = c * idx.len() / m;
            let hi = (c + 1) * idx.len() / m;
            let mut part = idx[lo..hi].to_vec();
            part.sort_unstable();
            dataset.subset(&part)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream_rng, Stream};
    use std::io::Write;

    fn rng() -> crate::rng::StreamRng {
        stream_rng(5, Stream::Init)
    }

    fn write_csv(body: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(body.as_bytes()).unwrap();
        f
    }

    #[test]
    fn csv_binary_labels_map_to_signs() {
        let f = write_csv("a,b,label\n1.0,5,0\n3.0,5,1\n");
        let (ds, mapping) = load_csv_dataset(f.path(), "label", &LabelRule::Binary).unwrap();
        assert_eq!(ds.labels(), &[-1.0, 1.0]);
        assert_eq!(mapping.entries, vec![("0".to_string(), -1.0), ("1".to_string(), 1.0)]);
        // column a scaled to [0,1]; constant column b becomes 0.
        assert_eq!(ds.row(0), &[0.0, 0.0]);
        assert_eq!(ds.row(1), &[1.0, 0.0]);
    }

    #[test]
    fn csv_errors_carry_row_numbers() {
        let f = write_csv("a,label\n1.0,0\nNaN,1\n");
        match load_csv_dataset(f.path(), "label", &LabelRule::Binary) {
            Err(ZofedError::Ingestion { row: Some(3), .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
        let f = write_csv("a,label\n1.0,0\nx,1\n");
        assert!(matches!(
            load_csv_dataset(f.path(), "label", &LabelRule::Binary),
            Err(ZofedError::Ingestion { row: Some(3), .. })
        ));
        let f = write_csv("a,label\n1.0,0\n2.0,1\n3.0,2\n");
        assert!(load_csv_dataset(f.path(), "label", &LabelRule::Binary).is_err());
        let (ds, _) = load_csv_dataset(f.path(), "label", &LabelRule::Positive("2".into())).unwrap();
        assert_eq!(ds.labels(), &[-1.0, -1.0, 1.0]);
        assert_eq!(ds.num_classes(), 3);
        assert!(load_csv_dataset(f.path(), "missing", &LabelRule::Binary).is_err());
    }

    #[test]
    fn synthetic_blobs_are_balanced() {
        let ds = synth_gaussian_blobs(100, 3, &mut rng()).unwrap();
        assert_eq!(ds.len(), 100);
        assert_eq!(ds.labels().iter().filter(|&&l| l > 0.0).count(), 50);
        assert!((0..ds.len()).all(|i| ds.row(i).iter().all(|v| (0.0..=1.0).contains(v))));
    }

    fn assert_partition(parts: &[LocalDataset], whole: &LocalDataset) {
        let total: usize = parts.iter().map(|p| p.len()).sum();
        assert_eq!(total, whole.len());
        // Rows are distinct in the synthetic data, so matching rows pins down indices.
        let mut seen: Vec<Vec<u64>> = parts
            .iter()
            .flat_map(|p| (0..p.len()).map(move |i| p.row(i).iter().map(|v| v.to_bits()).collect()))
            .collect();
        let mut all: Vec<Vec<u64>> = (0..whole.len())
            .map(|i| whole.row(i).iter().map(|v| v.to_bits()).collect())
            .collect();
        seen.sort();
        all.sort();
        assert_eq!(seen, all);
    }

    #[test]
    fn dirichlet_is_a_partition() {
        let ds = synth_gaussian_blobs(400, 2, &mut rng()).unwrap();
        for m in [1, 2, 5, 10] {
            for alpha in [0.1, 0.5, 5.0] {
                let parts = dirichlet_partition(&ds, m, alpha, &mut rng()).unwrap();
                assert_eq!(parts.len(), m);
                assert!(parts.iter().all(|p| !p.is_empty()));
                assert_partition(&parts, &ds);
            }
        }
        assert_eq!(dirichlet_partition(&ds, 1, 0.5, &mut rng()).unwrap()[0], ds);
    }

    #[test]
    fn large_alpha_is_nearly_uniform() {
        let ds = synth_gaussian_blobs(20_000, 1, &mut rng()).unwrap();
        let m = 4;
        let parts = dirichlet_partition(&ds, m, 1e6, &mut rng()).unwrap();
        for class in 0..2 {
            let class_total = ds.classes().iter().filter(|&&c| c == class).count() as f64;
            for p in &parts {
                let share = p.classes().iter().filter(|&&c| c == class).count() as f64 / class_total;
                assert!((share - 1.0 / m as f64).abs() < 0.01, "share {share}");
            }
        }
    }

    #[test]
    fn impossible_partition_reports_error() {
        let ds = synth_gaussian_blobs(4, 1, &mut rng()).unwrap();
        assert!(matches!(dirichlet_partition(&ds, 5, 0.5, &mut rng()), Err(ZofedError::Partition(_))));
        assert!(dirichlet_partition(&ds, 2, 0.0, &mut rng()).is_err());
    }
}
