//! One-vs-Rest decomposition and class-imbalance handling.
//!
//! `split_ovr` turns a k-class dataset into k binary views (target class vs
//! rest). OvR makes the negative side k-1 times larger than the positive
//! side; `apply_balance` mitigates that either with per-example weights
//! (lambda1 = (k-1)/k on positives, lambda2 = 1/k on negatives) or by
//! re-sampling the active index multiset.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::Dataset;
use crate::error::{Error, Result};
use crate::seeds;

/// Imbalance mitigation applied to a [`BinaryView`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BalanceKind {
    /// Per-example weights lambda1 = (k-1)/k (positives), lambda2 = 1/k (negatives).
    Reweight,
    /// Duplicate the minority side until both sides have equal counts.
    Oversample,
    /// Keep the minority side, sample the majority side down to match.
    Undersample,
    /// Leave the view untouched (weights 1, all indices active).
    None,
}

impl BalanceKind {
    pub const ALL: [BalanceKind; 4] = [
        BalanceKind::Reweight,
        BalanceKind::Oversample,
        BalanceKind::Undersample,
        BalanceKind::None,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            BalanceKind::Reweight => "reweight",
            BalanceKind::Oversample => "oversample",
            BalanceKind::Undersample => "undersample",
            BalanceKind::None => "none",
        }
    }
}

impl std::str::FromStr for BalanceKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "reweight" => Ok(BalanceKind::Reweight),
            "oversample" => Ok(BalanceKind::Oversample),
            "undersample" => Ok(BalanceKind::Undersample),
            "none" => Ok(BalanceKind::None),
            other => Err(Error::Config(format!(
                "unknown balance strategy {other:?} (expected reweight|oversample|undersample|none)"
            ))),
        }
    }
}

/// A balance kind plus the seed that drives its sampling strategies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BalanceStrategy {
    pub kind: BalanceKind,
    pub seed: u64,
}

impl BalanceStrategy {
    pub fn new(kind: BalanceKind, seed: u64) -> Self {
        Self { kind, seed }
    }
}

/// A binary projection of a multi-class dataset for one target class.
///
/// `binary_labels` and `weights` are indexed by source example; `active`
/// lists the (possibly re-sampled) source indices the view trains on.
#[derive(Debug, Clone)]
pub struct BinaryView<'a> {
    source: &'a Dataset,
    target_class: usize,
    binary_labels: Vec<bool>,
    weights: Vec<f64>,
    active: Vec<usize>,
}

impl<'a> BinaryView<'a> {
    pub fn source(&self) -> &'a Dataset {
        self.source
    }

    pub fn target_class(&self) -> usize {
        self.target_class
    }

    /// True iff the source label equals the target class.
    pub fn binary_label(&self, idx: usize) -> bool {
        self.binary_labels[idx]
    }

    pub fn weight(&self, idx: usize) -> f64 {
        self.weights[idx]
    }

    pub fn active_indices(&self) -> &[usize] {
        &self.active
    }

    pub fn active_positive_count(&self) -> usize {
        self.active
            .iter()
            .filter(|&&i| self.binary_labels[i])
            .count()
    }

    pub fn active_negative_count(&self) -> usize {
        self.active.len() - self.active_positive_count()
    }
}

/// Splits a dataset into k binary views, one per target class. Every source
/// example appears in every view.
pub fn split_ovr(ds: &Dataset) -> Vec<BinaryView<'_>> {
    (0..ds.k())
        .map(|target_class| {
            let binary_labels = ds
                .examples()
                .iter()
                .map(|ex| ex.label == target_class)
                .collect();
            BinaryView {
                source: ds,
                target_class,
                binary_labels,
                weights: vec![1.0; ds.len()],
                active: (0..ds.len()).collect(),
            }
        })
        .collect()
}

/// Applies an imbalance-mitigation strategy, producing a new view.
pub fn apply_balance<'a>(
    view: BinaryView<'a>,
    strategy: &BalanceStrategy,
) -> Result<BinaryView<'a>> {
    let positives: Vec<usize> = (0..view.source.len())
        .filter(|&i| view.binary_labels[i])
        .collect();
    let negatives: Vec<usize> = (0..view.source.len())
        .filter(|&i| !view.binary_labels[i])
        .collect();

    let all_active = || (0..view.source.len()).collect::<Vec<usize>>();
    let sampler_seed = seeds::derive(
        strategy.seed,
        &format!("balance/{}/{}", strategy.kind.as_str(), view.target_class),
    );

    let (weights, active) = match strategy.kind {
        BalanceKind::None => (vec![1.0; view.source.len()], all_active()),
        BalanceKind::Reweight => {
            let k = view.source.k() as f64;
            let lambda1 = (k - 1.0) / k;
            let lambda2 = 1.0 / k;
            let weights = view
                .binary_labels
                .iter()
                .map(|&pos| if pos { lambda1 } else { lambda2 })
                .collect();
            (weights, all_active())
        }
        BalanceKind::Oversample => {
            let (minority, majority) = if positives.len() <= negatives.len() {
                (&positives, &negatives)
            } else {
                (&negatives, &positives)
            };
            if minority.is_empty() {
                return Err(Error::DegenerateClass(format!(
                    "view for class {} has an empty side; cannot oversample",
                    view.target_class
                )));
            }
            let mut active = all_active();
            let deficit = majority.len() - minority.len();
            let copies = deficit / minority.len();
            let remainder = deficit % minority.len();
            for _ in 0..copies {
                active.extend_from_slice(minority);
            }
            if remainder > 0 {
                let mut rng = ChaCha8Rng::seed_from_u64(sampler_seed);
                let mut pool = minority.clone();
                pool.shuffle(&mut rng);
                active.extend_from_slice(&pool[..remainder]);
            }
            (vec![1.0; view.source.len()], active)
        }
        BalanceKind::Undersample => {
            if positives.is_empty() || negatives.is_empty() {
                return Err(Error::DegenerateClass(format!(
                    "view for class {} has an empty side; cannot undersample",
                    view.target_class
                )));
            }
            let (minority, majority) = if positives.len() <= negatives.len() {
                (&positives, &negatives)
            } else {
                (&negatives, &positives)
            };
            let mut rng = ChaCha8Rng::seed_from_u64(sampler_seed);
            let mut pool = majority.clone();
            pool.shuffle(&mut rng);
            let mut active: Vec<usize> = minority
                .iter()
                .chain(pool[..minority.len()].iter())
                .copied()
                .collect();
            active.sort_unstable();
            (vec![1.0; view.source.len()], active)
        }
    };

    Ok(BinaryView {
        source: view.source,
        target_class: view.target_class,
        binary_labels: view.binary_labels,
        weights,
        active,
    })
}
