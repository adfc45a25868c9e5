//! Group-wise evaluation, confidence histograms, run reports, and the
//! four-arm ablation suite.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::datagen::{group_partition, Dataset, DatasetBundle};
use crate::error::{Error, Result};
use crate::pipeline::{run_pipeline, PipelineArm, RunConfig};
use crate::scorer::Scorer;
use crate::training::{TrajectoryLog, TrajectoryPoint};

pub const HISTOGRAM_BINS: usize = 20;

/// Accuracy (percent) of a scorer on a dataset; prediction is the argmax of
/// the class distribution.
pub fn evaluate(scorer: &dyn Scorer, ds: &Dataset) -> Result<f64> {
    if ds.is_empty() {
        return Err(Error::UndefinedMetric(
            "accuracy of an empty split".to_string(),
        ));
    }
    let mut correct = 0usize;
    for ex in ds.examples() {
        let probs = scorer.class_probs(&ex.features)?;
        if argmax(&probs) == ex.label {
            correct += 1;
        }
    }
    Ok(100.0 * correct as f64 / ds.len() as f64)
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in xs.iter().enumerate() {
        if *v > xs[best] {
            best = i;
        }
    }
    best
}

/// Accuracy and mean true-class confidence of one example group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupStat {
    pub count: usize,
    pub accuracy: f64,
    pub mean_confidence: f64,
}

/// Metrics for the biased / bias-conflicting groups; a group that is empty
/// (or a dataset without flags) reports as absent rather than zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupMetrics {
    pub biased: Option<GroupStat>,
    pub bias_conflicting: Option<GroupStat>,
}

pub fn group_metrics(scorer: &dyn Scorer, ds: &Dataset) -> Result<GroupMetrics> {
    let parts = group_partition(ds)?;
    let stat = |idxs: &[usize]| -> Result<Option<GroupStat>> {
        if idxs.is_empty() {
            return Ok(None);
        }
        let mut correct = 0usize;
        let mut conf_sum = 0.0;
        for &i in idxs {
            let ex = &ds.examples()[i];
            let probs = scorer.class_probs(&ex.features)?;
            conf_sum += probs[ex.label];
            correct += usize::from(argmax(&probs) == ex.label);
        }
        let n = idxs.len() as f64;
        Ok(Some(GroupStat {
            count: idxs.len(),
            accuracy: 100.0 * correct as f64 / n,
            mean_confidence: conf_sum / n,
        }))
    };
    Ok(GroupMetrics {
        biased: stat(&parts.biased)?,
        bias_conflicting: stat(&parts.bias_conflicting)?,
    })
}

/// Fixed 20-bin histograms of true-class confidence per group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupHistograms {
    pub biased: Option<Vec<u64>>,
    pub bias_conflicting: Option<Vec<u64>>,
}

pub fn confidence_histograms(scorer: &dyn Scorer, ds: &Dataset) -> Result<GroupHistograms> {
    let parts = group_partition(ds)?;
    let hist = |idxs: &[usize]| -> Result<Option<Vec<u64>>> {
        if idxs.is_empty() {
            return Ok(None);
        }
        let mut bins = vec![0u64; HISTOGRAM_BINS];
        for &i in idxs {
            let ex = &ds.examples()[i];
            let c = scorer.class_probs(&ex.features)?[ex.label];
            let bin = ((c * HISTOGRAM_BINS as f64) as usize).min(HISTOGRAM_BINS - 1);
            bins[bin] += 1;
        }
        Ok(Some(bins))
    };
    Ok(GroupHistograms {
        biased: hist(&parts.biased)?,
        bias_conflicting: hist(&parts.bias_conflicting)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitScalar {
    pub train: f64,
    pub id_test: f64,
    pub ood_test: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitGroups {
    pub train: GroupMetrics,
    pub id_test: GroupMetrics,
    pub ood_test: GroupMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitHistograms {
    pub train: GroupHistograms,
    pub id_test: GroupHistograms,
    pub ood_test: GroupHistograms,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectories {
    pub auxiliary: Option<TrajectoryLog>,
    pub experts: Vec<TrajectoryLog>,
    pub main: TrajectoryLog,
}

/// Everything one pipeline run produces. Serializes to JSON with stable key
/// order (declaration order); `seconds` is the only non-deterministic field.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub run_id: String,
    pub arm: String,
    pub seed: u64,
    pub config_fingerprint: String,
    pub dataset_fingerprint: String,
    pub config: RunConfig,
    pub accuracy: SplitScalar,
    pub id_ood_gap: f64,
    pub groups: SplitGroups,
    pub histograms: SplitHistograms,
    pub trajectories: Trajectories,
    pub expert_steps: u64,
    pub seconds: f64,
}

pub const CSV_HEADER: &str = "run_id,seed,alpha,merge_rule,balance,dynamic_q,T,acc_id,acc_ood,gap,acc_biased,acc_conflicting,conf_biased,conf_conflicting,seconds";

pub const TRAJECTORY_CSV_HEADER: &str =
    "epoch,conf_biased,conf_conflicting,acc_biased,acc_conflicting";

fn opt4(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.4}")).unwrap_or_default()
}

fn opt6(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

impl RunReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// One flat summary row; the four group columns describe the OOD split.
    pub fn csv_row(&self) -> String {
        let ood = &self.groups.ood_test;
        format!(
            "{},{},{},{},{},{},{},{:.4},{:.4},{:.4},{},{},{},{},{:.3}",
            self.run_id,
            self.seed,
            self.config.alpha,
            self.config.merge_rule.as_str(),
            self.config.balance.as_str(),
            self.config.dynamic_q,
            self.expert_steps,
            self.accuracy.id_test,
            self.accuracy.ood_test,
            self.id_ood_gap,
            opt4(ood.biased.as_ref().map(|g| g.accuracy)),
            opt4(ood.bias_conflicting.as_ref().map(|g| g.accuracy)),
            opt6(ood.biased.as_ref().map(|g| g.mean_confidence)),
            opt6(ood.bias_conflicting.as_ref().map(|g| g.mean_confidence)),
            self.seconds,
        )
    }

    /// CSV dump of one trajectory log, columns as in
    /// [`TRAJECTORY_CSV_HEADER`]; absent groups leave empty cells.
    pub fn trajectory_csv(log: &TrajectoryLog) -> String {
        let mut out = String::from(TRAJECTORY_CSV_HEADER);
        out.push('\n');
        for TrajectoryPoint {
            epoch,
            conf_biased,
            conf_conflicting,
            acc_biased,
            acc_conflicting,
        } in &log.points
        {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                epoch,
                opt6(*conf_biased),
                opt6(*conf_conflicting),
                opt4(*acc_biased),
                opt4(*acc_conflicting),
            ));
        }
        out
    }
}

/// Mean and sample standard deviation of one metric across seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub mean: f64,
    pub std: f64,
}

fn summarize(values: &[f64]) -> MetricSummary {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() < 2 {
        0.0
    } else {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    };
    MetricSummary { mean, std }
}

/// Multi-seed aggregate of the headline metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub arm: String,
    pub n_runs: usize,
    pub metrics: BTreeMap<String, MetricSummary>,
}

pub fn aggregate(reports: &[RunReport]) -> Result<AggregateReport> {
    if reports.is_empty() {
        return Err(Error::UndefinedMetric(
            "aggregate of zero runs".to_string(),
        ));
    }
    let mut metrics = BTreeMap::new();
    let mut push = |name: &str, f: &dyn Fn(&RunReport) -> Option<f64>| {
        let values: Vec<f64> = reports.iter().filter_map(f).collect();
        if values.len() == reports.len() {
            metrics.insert(name.to_string(), summarize(&values));
        }
    };
    push("acc_train", &|r| Some(r.accuracy.train));
    push("acc_id", &|r| Some(r.accuracy.id_test));
    push("acc_ood", &|r| Some(r.accuracy.ood_test));
    push("gap", &|r| Some(r.id_ood_gap));
    push("acc_ood_biased", &|r| {
        r.groups.ood_test.biased.as_ref().map(|g| g.accuracy)
    });
    push("acc_ood_conflicting", &|r| {
        r.groups
            .ood_test
            .bias_conflicting
            .as_ref()
            .map(|g| g.accuracy)
    });
    push("conf_ood_biased", &|r| {
        r.groups.ood_test.biased.as_ref().map(|g| g.mean_confidence)
    });
    push("conf_ood_conflicting", &|r| {
        r.groups
            .ood_test
            .bias_conflicting
            .as_ref()
            .map(|g| g.mean_confidence)
    });
    push("seconds", &|r| Some(r.seconds));
    Ok(AggregateReport {
        arm: reports[0].arm.clone(),
        n_runs: reports.len(),
        metrics,
    })
}

/// Summary CSV row (run_id "mean") over a set of per-seed reports.
pub fn mean_csv_row(reports: &[RunReport]) -> Result<String> {
    let agg = aggregate(reports)?;
    let first = &reports[0];
    let get = |k: &str| agg.metrics.get(k).map(|m| m.mean);
    Ok(format!(
        "mean,,{},{},{},{},{},{:.4},{:.4},{:.4},{},{},{},{},{:.3}",
        first.config.alpha,
        first.config.merge_rule.as_str(),
        first.config.balance.as_str(),
        first.config.dynamic_q,
        first.expert_steps,
        get("acc_id").unwrap_or(f64::NAN),
        get("acc_ood").unwrap_or(f64::NAN),
        get("gap").unwrap_or(f64::NAN),
        opt4(get("acc_ood_biased")),
        opt4(get("acc_ood_conflicting")),
        opt6(get("conf_ood_biased")),
        opt6(get("conf_ood_conflicting")),
        get("seconds").unwrap_or(f64::NAN),
    ))
}

/// Runs the four ablation arms (full, no amplification, no OvR, neither) on a
/// shared dataset bundle with one seed.
pub fn ablation_suite(
    bundle: &DatasetBundle,
    config: &RunConfig,
    seed: u64,
) -> Result<Vec<RunReport>> {
    PipelineArm::ABLATION
        .iter()
        .map(|arm| run_pipeline(config, bundle, seed, *arm))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate, Example, SyntheticSpec};
    use crate::scorer::UniformScorer;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::collections::HashMap;
    use std::sync::Mutex;

    fn spec(seed: u64) -> SyntheticSpec {
        SyntheticSpec {
            n_train: 600,
            n_id_test: 200,
            n_ood_test: 200,
            seed,
            ..SyntheticSpec::default()
        }
    }

    /// Test-only oracle that looks labels up by feature bits.
    struct LabelLookup {
        k: usize,
        table: HashMap<Vec<u64>, usize>,
    }

    impl LabelLookup {
        fn for_dataset(ds: &Dataset) -> Self {
            let table = ds
                .examples()
                .iter()
                .map(|ex| {
                    let key: Vec<u64> = ex.features.iter().map(|f| f.to_bits()).collect();
                    (key, ex.label)
                })
                .collect();
            Self { k: ds.k(), table }
        }
    }

    impl Scorer for LabelLookup {
        fn num_classes(&self) -> usize {
            self.k
        }

        fn class_probs(&self, features: &[f64]) -> crate::error::Result<Vec<f64>> {
            let key: Vec<u64> = features.iter().map(|f| f.to_bits()).collect();
            let label = self.table[&key];
            let mut p = vec![0.0; self.k];
            p[label] = 1.0;
            Ok(p)
        }
    }

    /// Predicts a uniformly random class on every call.
    struct RandomScorer {
        k: usize,
        rng: Mutex<ChaCha8Rng>,
    }

    impl Scorer for RandomScorer {
        fn num_classes(&self) -> usize {
            self.k
        }

        fn class_probs(&self, _features: &[f64]) -> crate::error::Result<Vec<f64>> {
            let c = self.rng.lock().unwrap().random_range(0..self.k);
            let mut p = vec![0.0; self.k];
            p[c] = 1.0;
            Ok(p)
        }
    }

    #[test]
    fn oracle_scorer_scores_100() {
        let ds = generate(&spec(1)).unwrap().train;
        let oracle = LabelLookup::for_dataset(&ds);
        assert_eq!(evaluate(&oracle, &ds).unwrap(), 100.0);
    }

    #[test]
    fn random_scorer_scores_near_chance() {
        let spec = SyntheticSpec {
            n_train: 10_000,
            seed: 2,
            ..SyntheticSpec::default()
        };
        let ds = generate(&spec).unwrap().train;
        let scorer = RandomScorer {
            k: 3,
            rng: Mutex::new(ChaCha8Rng::seed_from_u64(7)),
        };
        let acc = evaluate(&scorer, &ds).unwrap();
        // 3 sigma of Bin(10000, 1/3), in accuracy points.
        let sigma = 100.0 * ((1.0 / 3.0) * (2.0 / 3.0) / 10_000.0_f64).sqrt();
        assert!(
            (acc - 100.0 / 3.0).abs() <= 3.0 * sigma,
            "accuracy {acc} not within 3 sigma of chance"
        );
    }

    #[test]
    fn evaluation_is_deterministic() {
        let bundle = generate(&spec(3)).unwrap();
        let model = crate::nn::MlpModel::new(
            &[bundle.train.feature_dim(), 8, 3],
            crate::nn::Activation::Relu,
            5,
        )
        .unwrap();
        let first = evaluate(&model, &bundle.id_test).unwrap();
        for _ in 0..9 {
            assert_eq!(evaluate(&model, &bundle.id_test).unwrap(), first);
        }
    }

    #[test]
    fn empty_split_is_undefined() {
        let ds = generate(&spec(4)).unwrap().train;
        let sub = Dataset::new(ds.examples()[..1].to_vec(), ds.k(), "one".into()).unwrap();
        // A 1-example dataset works; emptiness is rejected at construction,
        // so evaluate's own empty guard is exercised through group stats.
        assert!(evaluate(&UniformScorer { k: 3 }, &sub).is_ok());
        let ds_err = Dataset::new(vec![], 3, "empty".into());
        assert!(ds_err.is_err());
    }

    #[test]
    fn fully_aligned_split_has_no_conflicting_group() {
        let spec = SyntheticSpec {
            bias_alignment: 1.0,
            n_train: 300,
            n_id_test: 100,
            n_ood_test: 100,
            seed: 5,
            ..SyntheticSpec::default()
        };
        let ds = generate(&spec).unwrap().train;
        let gm = group_metrics(&UniformScorer { k: 3 }, &ds).unwrap();
        assert!(gm.bias_conflicting.is_none());
        assert!(gm.biased.is_some());
    }

    #[test]
    fn uniform_scorer_confidence_is_chance_in_both_groups() {
        let ds = generate(&spec(6)).unwrap().train;
        let gm = group_metrics(&UniformScorer { k: 3 }, &ds).unwrap();
        for stat in [gm.biased.unwrap(), gm.bias_conflicting.unwrap()] {
            assert!((stat.mean_confidence - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn whole_dataset_accuracy_is_group_weighted_mean() {
        let bundle = generate(&spec(7)).unwrap();
        let model = crate::nn::MlpModel::new(
            &[bundle.train.feature_dim(), 8, 3],
            crate::nn::Activation::Relu,
            11,
        )
        .unwrap();
        let total = evaluate(&model, &bundle.train).unwrap();
        let gm = group_metrics(&model, &bundle.train).unwrap();
        let b = gm.biased.unwrap();
        let c = gm.bias_conflicting.unwrap();
        let weighted = (b.accuracy * b.count as f64 + c.accuracy * c.count as f64)
            / (b.count + c.count) as f64;
        assert!((total - weighted).abs() < 1e-10);
    }

    #[test]
    fn histogram_of_constant_confidence_concentrates() {
        let ds = generate(&spec(8)).unwrap().train;
        let h = confidence_histograms(&UniformScorer { k: 3 }, &ds).unwrap();
        let parts = group_partition(&ds).unwrap();
        let biased = h.biased.unwrap();
        // 1/3 lands in bin 6 of 20.
        assert_eq!(biased[6], parts.biased.len() as u64);
        assert_eq!(biased.iter().sum::<u64>(), parts.biased.len() as u64);
    }

    #[test]
    fn histogram_counts_sum_to_group_sizes() {
        let bundle = generate(&spec(9)).unwrap();
        let model = crate::nn::MlpModel::new(
            &[bundle.train.feature_dim(), 8, 3],
            crate::nn::Activation::Relu,
            13,
        )
        .unwrap();
        let h = confidence_histograms(&model, &bundle.id_test).unwrap();
        let parts = group_partition(&bundle.id_test).unwrap();
        assert_eq!(
            h.biased.unwrap().iter().sum::<u64>(),
            parts.biased.len() as u64
        );
        assert_eq!(
            h.bias_conflicting.unwrap().iter().sum::<u64>(),
            parts.bias_conflicting.len() as u64
        );
    }

    #[test]
    fn group_metrics_need_flags() {
        let examples: Vec<Example> = (0..4)
            .map(|i| Example {
                features: vec![i as f64],
                label: i % 2,
                bias_aligned: false,
            })
            .collect();
        let mut ds = Dataset::new(examples, 2, "x".into()).unwrap();
        // Rebuild through CSV without the flag column to drop flags.
        let mut buf = Vec::new();
        crate::datagen::dump_csv(&ds, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let stripped: String = text
            .lines()
            .map(|l| {
                let cut = l.rfind(',').unwrap();
                format!("{}\n", &l[..cut])
            })
            .collect();
        ds = crate::datagen::load_csv(stripped.as_bytes()).unwrap();
        assert!(matches!(
            group_metrics(&UniformScorer { k: 2 }, &ds),
            Err(Error::UnsupportedDataset(_))
        ));
    }

    #[test]
    fn summarize_mean_and_sample_std() {
        let s = summarize(&[1.0, 2.0, 3.0]);
        assert!((s.mean - 2.0).abs() < 1e-12);
        assert!((s.std - 1.0).abs() < 1e-12);
        let single = summarize(&[5.0]);
        assert_eq!(single.std, 0.0);
    }
}
