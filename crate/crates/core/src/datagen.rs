//! Synthetic multi-class datasets with a controllable spurious correlation.
//!
//! Features are three concatenated blocks:
//!
//! - target block: `target_snr * onehot(label)` plus unit Gaussian noise —
//!   predictive in every split;
//! - bias block: `bias_snr * onehot(b)` plus unit Gaussian noise, where `b`
//!   equals the label with probability `bias_alignment` and is otherwise
//!   uniform over the wrong classes — predictive in-distribution only;
//! - noise block: unit Gaussian noise.
//!
//! The out-of-distribution split is always generated with alignment `1/k`, so
//! the bias block carries no information there.

use std::io::{BufRead, Write};

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Full description of a synthetic dataset; generation is a pure function of
/// this value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n_train: usize,
    pub n_id_test: usize,
    pub n_ood_test: usize,
    pub k: usize,
    pub d_target: usize,
    pub d_bias: usize,
    pub d_noise: usize,
    pub bias_alignment: f64,
    pub target_snr: f64,
    pub bias_snr: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_train: 20_000,
            n_id_test: 4_000,
            n_ood_test: 4_000,
            k: 3,
            d_target: 4,
            d_bias: 4,
            d_noise: 8,
            bias_alignment: 0.95,
            target_snr: 1.0,
            bias_snr: 2.0,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn feature_dim(&self) -> usize {
        self.d_target + self.d_bias + self.d_noise
    }

    pub fn validate(&self) -> Result<()> {
        if self.k < 2 {
            return Err(Error::Config(format!("k must be >= 2, got {}", self.k)));
        }
        if self.d_target < 1 {
            return Err(Error::Config("d_target must be >= 1".to_string()));
        }
        if self.d_bias < 1 {
            return Err(Error::Config("d_bias must be >= 1".to_string()));
        }
        // One-hot class codes need at least k slots per informative block.
        if self.d_target < self.k {
            return Err(Error::Config(format!(
                "d_target ({}) must be >= k ({})",
                self.d_target, self.k
            )));
        }
        if self.d_bias < self.k {
            return Err(Error::Config(format!(
                "d_bias ({}) must be >= k ({})",
                self.d_bias, self.k
            )));
        }
        if !(0.0..=1.0).contains(&self.bias_alignment) {
            return Err(Error::Config(format!(
                "bias_alignment must be in [0, 1], got {}",
                self.bias_alignment
            )));
        }
        if self.n_train == 0 || self.n_id_test == 0 || self.n_ood_test == 0 {
            return Err(Error::Config("split sizes must be positive".to_string()));
        }
        if self.target_snr <= 0.0 || self.bias_snr <= 0.0 {
            return Err(Error::Config("snr values must be positive".to_string()));
        }
        Ok(())
    }

    /// Stable hash of the spec, used as dataset provenance.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_string(self).expect("spec serializes");
        let digest = Sha256::digest(json.as_bytes());
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// One labeled example. `bias_aligned` is evaluation metadata: it records
/// whether the bias block encodes the true class and must only be read by
/// evaluation grouping, never by training code.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub features: Vec<f64>,
    pub label: usize,
    pub bias_aligned: bool,
}

/// An ordered collection of examples with fixed `k` and feature width.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    examples: Vec<Example>,
    k: usize,
    feature_dim: usize,
    fingerprint: String,
    /// False for datasets loaded without alignment flags; group partitioning
    /// is then unavailable.
    flagged: bool,
}

impl Dataset {
    pub fn new(examples: Vec<Example>, k: usize, fingerprint: String) -> Result<Self> {
        Self::build(examples, k, fingerprint, true)
    }

    fn build(examples: Vec<Example>, k: usize, fingerprint: String, flagged: bool) -> Result<Self> {
        if k < 2 {
            return Err(Error::Config(format!("k must be >= 2, got {k}")));
        }
        if examples.is_empty() {
            return Err(Error::Config("dataset has no examples".to_string()));
        }
        let feature_dim = examples[0].features.len();
        for (i, ex) in examples.iter().enumerate() {
            if ex.label >= k {
                return Err(Error::Label(format!(
                    "example {i} has label {} but k = {k}",
                    ex.label
                )));
            }
            if ex.features.len() != feature_dim {
                return Err(Error::InputShape(format!(
                    "example {i} has {} features, expected {feature_dim}",
                    ex.features.len()
                )));
            }
        }
        Ok(Self {
            examples,
            k,
            feature_dim,
            fingerprint,
            flagged,
        })
    }

    pub fn examples(&self) -> &[Example] {
        &self.examples
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    pub fn has_flags(&self) -> bool {
        self.flagged
    }

    /// Number of examples per class.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.k];
        for ex in &self.examples {
            counts[ex.label] += 1;
        }
        counts
    }
}

/// The three splits produced by [`generate`].
#[derive(Debug, Clone)]
pub struct DatasetBundle {
    pub train: Dataset,
    pub id_test: Dataset,
    pub ood_test: Dataset,
}

/// Generates train / in-distribution test / out-of-distribution test splits.
/// Fully deterministic in `spec`.
pub fn generate(spec: &SyntheticSpec) -> Result<DatasetBundle> {
    spec.validate()?;
    let mut master = ChaCha8Rng::seed_from_u64(spec.seed);
    let seeds = [master.next_u64(), master.next_u64(), master.next_u64()];
    let base = spec.fingerprint();
    let ood_alignment = 1.0 / spec.k as f64;

    let train = generate_split(
        spec,
        spec.n_train,
        spec.bias_alignment,
        seeds[0],
        format!("{base}-train"),
    )?;
    let id_test = generate_split(
        spec,
        spec.n_id_test,
        spec.bias_alignment,
        seeds[1],
        format!("{base}-id"),
    )?;
    let ood_test = generate_split(
        spec,
        spec.n_ood_test,
        ood_alignment,
        seeds[2],
        format!("{base}-ood"),
    )?;
    Ok(DatasetBundle {
        train,
        id_test,
        ood_test,
    })
}

fn generate_split(
    spec: &SyntheticSpec,
    n: usize,
    alignment: f64,
    seed: u64,
    fingerprint: String,
) -> Result<Dataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dim = spec.feature_dim();
    let mut examples = Vec::with_capacity(n);
    for _ in 0..n {
        let label = rng.random_range(0..spec.k);
        let aligned = rng.random_bool(alignment);
        let bias_class = if aligned {
            label
        } else {
            // Uniform over the k-1 wrong classes.
            let mut c = rng.random_range(0..spec.k - 1);
            if c >= label {
                c += 1;
            }
            c
        };

        let mut features = Vec::with_capacity(dim);
        for j in 0..spec.d_target {
            let signal = if j == label { spec.target_snr } else { 0.0 };
            let noise: f64 = rng.sample(StandardNormal);
            features.push(signal + noise);
        }
        for j in 0..spec.d_bias {
            let signal = if j == bias_class { spec.bias_snr } else { 0.0 };
            let noise: f64 = rng.sample(StandardNormal);
            features.push(signal + noise);
        }
        for _ in 0..spec.d_noise {
            let noise: f64 = rng.sample(StandardNormal);
            features.push(noise);
        }
        examples.push(Example {
            features,
            label,
            bias_aligned: bias_class == label,
        });
    }
    Dataset::new(examples, spec.k, fingerprint)
}

/// Index lists for the biased / bias-conflicting groups.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupPartition {
    pub biased: Vec<usize>,
    pub bias_conflicting: Vec<usize>,
}

/// Partitions a dataset by its alignment flags.
pub fn group_partition(ds: &Dataset) -> Result<GroupPartition> {
    if !ds.has_flags() {
        return Err(Error::UnsupportedDataset(
            "dataset carries no bias-alignment flags".to_string(),
        ));
    }
    let mut biased = Vec::new();
    let mut bias_conflicting = Vec::new();
    for (i, ex) in ds.examples().iter().enumerate() {
        if ex.bias_aligned {
            biased.push(i);
        } else {
            bias_conflicting.push(i);
        }
    }
    Ok(GroupPartition {
        biased,
        bias_conflicting,
    })
}

/// Writes `f0..f{D-1},label,bias_aligned` rows; floats keep 17 significant
/// digits so a reload is bit-identical.
pub fn dump_csv<W: Write>(ds: &Dataset, mut w: W) -> Result<()> {
    let header: Vec<String> = (0..ds.feature_dim())
        .map(|i| format!("f{i}"))
        .chain(["label".to_string(), "bias_aligned".to_string()])
        .collect();
    writeln!(w, "{}", header.join(","))?;
    for ex in ds.examples() {
        for f in &ex.features {
            write!(w, "{f:.16e},")?;
        }
        writeln!(w, "{},{}", ex.label, u8::from(ex.bias_aligned))?;
    }
    Ok(())
}

/// Reads a dataset written by [`dump_csv`]. The `bias_aligned` column is
/// optional; without it the dataset loads unflagged and group metrics are
/// unavailable.
pub fn load_csv<R: BufRead>(r: R) -> Result<Dataset> {
    let mut lines = r.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Csv("empty file".to_string()))??;
    let cols: Vec<&str> = header.trim().split(',').collect();
    let flagged = cols.last() == Some(&"bias_aligned");
    let label_col = cols
        .iter()
        .position(|c| *c == "label")
        .ok_or_else(|| Error::Csv("missing 'label' column".to_string()))?;
    if !cols[..label_col].iter().enumerate().all(|(i, c)| {
        c.strip_prefix('f')
            .and_then(|s| s.parse::<usize>().ok())
            .is_some_and(|n| n == i)
    }) {
        return Err(Error::Csv(
            "feature columns must be f0..f{D-1} before 'label'".to_string(),
        ));
    }
    let dim = label_col;

    let mut hasher = Sha256::new();
    hasher.update(header.as_bytes());
    let mut examples = Vec::new();
    for (lineno, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        hasher.update(line.as_bytes());
        let fields: Vec<&str> = line.trim().split(',').collect();
        let expected = dim + 1 + usize::from(flagged);
        if fields.len() != expected {
            return Err(Error::Csv(format!(
                "line {}: expected {expected} fields, got {}",
                lineno + 2,
                fields.len()
            )));
        }
        let mut features = Vec::with_capacity(dim);
        for f in &fields[..dim] {
            features.push(
                f.parse::<f64>()
                    .map_err(|e| Error::Csv(format!("line {}: {e}", lineno + 2)))?,
            );
        }
        let label: usize = fields[dim]
            .parse()
            .map_err(|e| Error::Csv(format!("line {}: {e}", lineno + 2)))?;
        let bias_aligned = if flagged {
            match fields[dim + 1] {
                "0" | "false" => false,
                "1" | "true" => true,
                other => {
                    return Err(Error::Csv(format!(
                        "line {}: bad bias_aligned value {other:?}",
                        lineno + 2
                    )))
                }
            }
        } else {
            false
        };
        examples.push(Example {
            features,
            label,
            bias_aligned,
        });
    }
    if examples.is_empty() {
        return Err(Error::Csv("no data rows".to_string()));
    }
    let k = examples.iter().map(|e| e.label).max().unwrap() + 1;
    let digest = hasher.finalize();
    let fingerprint: String = digest[..8].iter().map(|b| format!("{b:02x}")).collect();
    Dataset::build(examples, k, fingerprint, flagged)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn binomial_3sigma(n: usize, p: f64) -> (f64, f64) {
        let mean = n as f64 * p;
        let sigma = (n as f64 * p * (1.0 - p)).sqrt();
        (mean, 3.0 * sigma)
    }

    #[test]
    fn chance_alignment_yields_chance_fraction() {
        let spec = SyntheticSpec {
            bias_alignment: 1.0 / 3.0,
            seed: 11,
            ..SyntheticSpec::default()
        };
        let ds = generate(&spec).unwrap().train;
        let aligned = ds.examples().iter().filter(|e| e.bias_aligned).count();
        let (mean, tol) = binomial_3sigma(ds.len(), 1.0 / 3.0);
        assert!(
            (aligned as f64 - mean).abs() <= tol,
            "aligned {aligned}, expected {mean} +- {tol}"
        );
    }

    #[test]
    fn full_alignment_marks_every_example() {
        let spec = SyntheticSpec {
            bias_alignment: 1.0,
            n_train: 500,
            n_id_test: 50,
            n_ood_test: 50,
            seed: 3,
            ..SyntheticSpec::default()
        };
        let ds = generate(&spec).unwrap().train;
        assert!(ds.examples().iter().all(|e| e.bias_aligned));
    }

    #[test]
    fn seeded_aligned_count_is_within_3_sigma() {
        let spec = SyntheticSpec {
            n_train: 10_000,
            seed: 7,
            ..SyntheticSpec::default()
        };
        assert_eq!(spec.k, 3);
        assert_eq!(spec.bias_alignment, 0.95);
        let ds = generate(&spec).unwrap().train;
        let aligned = ds.examples().iter().filter(|e| e.bias_aligned).count();
        let (mean, tol) = binomial_3sigma(10_000, 0.95);
        assert!(
            (aligned as f64 - mean).abs() <= tol,
            "aligned {aligned}, expected {mean} +- {tol}"
        );
    }

    #[test]
    fn ood_split_alignment_is_chance() {
        let spec = SyntheticSpec {
            seed: 19,
            ..SyntheticSpec::default()
        };
        let ds = generate(&spec).unwrap().ood_test;
        let aligned = ds.examples().iter().filter(|e| e.bias_aligned).count();
        let (mean, tol) = binomial_3sigma(ds.len(), 1.0 / 3.0);
        assert!(
            (aligned as f64 - mean).abs() <= tol,
            "aligned {aligned}, expected {mean} +- {tol}"
        );
    }

    #[test]
    fn generation_is_bit_identical() {
        let spec = SyntheticSpec {
            n_train: 300,
            n_id_test: 100,
            n_ood_test: 100,
            seed: 5,
            ..SyntheticSpec::default()
        };
        let a = generate(&spec).unwrap();
        let b = generate(&spec).unwrap();
        assert_eq!(a.train, b.train);
        assert_eq!(a.id_test, b.id_test);
        assert_eq!(a.ood_test, b.ood_test);
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let bad_k = SyntheticSpec {
            k: 1,
            ..SyntheticSpec::default()
        };
        assert!(matches!(generate(&bad_k), Err(Error::Config(_))));

        let bad_target = SyntheticSpec {
            d_target: 0,
            ..SyntheticSpec::default()
        };
        assert!(matches!(generate(&bad_target), Err(Error::Config(_))));

        let narrow_target = SyntheticSpec {
            k: 5,
            d_target: 3,
            d_bias: 5,
            ..SyntheticSpec::default()
        };
        assert!(matches!(generate(&narrow_target), Err(Error::Config(_))));
    }

    #[test]
    fn partition_covers_all_indices_once() {
        let spec = SyntheticSpec {
            n_train: 400,
            n_id_test: 50,
            n_ood_test: 50,
            seed: 23,
            ..SyntheticSpec::default()
        };
        let ds = generate(&spec).unwrap().train;
        let parts = group_partition(&ds).unwrap();
        let mut all: Vec<usize> = parts
            .biased
            .iter()
            .chain(parts.bias_conflicting.iter())
            .copied()
            .collect();
        all.sort_unstable();
        assert_eq!(all, (0..ds.len()).collect::<Vec<_>>());
    }

    #[test]
    fn partition_of_fully_aligned_dataset_has_empty_conflicting() {
        let spec = SyntheticSpec {
            bias_alignment: 1.0,
            n_train: 200,
            n_id_test: 50,
            n_ood_test: 50,
            seed: 2,
            ..SyntheticSpec::default()
        };
        let ds = generate(&spec).unwrap().train;
        let parts = group_partition(&ds).unwrap();
        assert!(parts.bias_conflicting.is_empty());
        assert_eq!(parts.biased.len(), 200);
    }

    #[test]
    fn partition_counts_match_generation_counts() {
        let spec = SyntheticSpec {
            seed: 7,
            ..SyntheticSpec::default()
        };
        let ds = generate(&spec).unwrap().train;
        let aligned = ds.examples().iter().filter(|e| e.bias_aligned).count();
        let parts = group_partition(&ds).unwrap();
        assert_eq!(parts.biased.len(), aligned);
        assert_eq!(parts.bias_conflicting.len(), ds.len() - aligned);
    }

    #[test]
    fn partition_requires_flags() {
        let csv = "f0,f1,label\n1.0,2.0,0\n3.0,4.0,1\n";
        let ds = load_csv(csv.as_bytes()).unwrap();
        assert!(!ds.has_flags());
        assert!(matches!(
            group_partition(&ds),
            Err(Error::UnsupportedDataset(_))
        ));
    }

    #[test]
    fn csv_round_trip_is_bit_identical() {
        let spec = SyntheticSpec {
            n_train: 120,
            n_id_test: 40,
            n_ood_test: 40,
            seed: 77,
            ..SyntheticSpec::default()
        };
        let ds = generate(&spec).unwrap().train;
        let mut buf = Vec::new();
        dump_csv(&ds, &mut buf).unwrap();
        let reloaded = load_csv(buf.as_slice()).unwrap();
        assert_eq!(reloaded.len(), ds.len());
        assert_eq!(reloaded.k(), ds.k());
        for (a, b) in ds.examples().iter().zip(reloaded.examples()) {
            assert_eq!(a.label, b.label);
            assert_eq!(a.bias_aligned, b.bias_aligned);
            assert_eq!(a.features, b.features, "floats must round-trip exactly");
        }
    }

    #[test]
    fn spec_fingerprint_tracks_content() {
        let a = SyntheticSpec::default();
        let mut b = SyntheticSpec::default();
        assert_eq!(a.fingerprint(), b.fingerprint());
        b.seed = 1;
        assert_ne!(a.fingerprint(), b.fingerprint());
    }
}
