//! End-to-end orchestration: dataset -> auxiliary -> bias experts -> main
//! model -> report, plus the ablation and baseline arms.

use std::fs::File;
use std::io::BufReader;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::datagen::{generate, load_csv, DatasetBundle, SyntheticSpec};
use crate::error::{Error, Result};
use crate::evalkit::{
    confidence_histograms, evaluate, group_metrics, RunReport, SplitGroups, SplitHistograms,
    SplitScalar, Trajectories,
};
use crate::ovr::BalanceKind;
use crate::scorer::{Scorer, UniformScorer};
use crate::training::{
    train_auxiliary, train_bias_experts, train_main, train_multiclass_auxiliary_ensemble,
    MergeRule, StopRule, TrainPlan, TrajectoryLog,
};

/// Where the run's data comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum DatasetSource {
    Synthetic {
        #[serde(flatten)]
        spec: SyntheticSpec,
    },
    /// CSV files in the `dump_csv` format.
    Csv {
        train: String,
        id_test: String,
        ood_test: String,
    },
}

/// Full experiment configuration. Every field has a default; a fully
/// defaulted config runs end to end in well under a minute.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetSource,
    pub aux_hidden: Vec<usize>,
    pub expert_hidden: Vec<usize>,
    pub main_hidden: Vec<usize>,
    pub epochs: usize,
    /// Expert-stage step budget T; overrides `epochs` for that stage only.
    pub expert_max_steps: Option<u64>,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub alpha: f64,
    pub balance: BalanceKind,
    pub merge_rule: MergeRule,
    pub dynamic_q: bool,
    pub ce_coeff: f64,
    pub poe_coeff: f64,
    pub seed: u64,
    pub n_seeds: usize,
    pub out_dir: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetSource::Synthetic {
                spec: SyntheticSpec::default(),
            },
            aux_hidden: vec![4],
            expert_hidden: vec![4],
            main_hidden: vec![64],
            epochs: 3,
            expert_max_steps: Some(6000),
            batch_size: 32,
            learning_rate: 3e-3,
            weight_decay: 0.01,
            alpha: 0.2,
            balance: BalanceKind::Reweight,
            merge_rule: MergeRule::Softmax,
            dynamic_q: false,
            ce_coeff: 0.3,
            poe_coeff: 1.0,
            seed: 0,
            n_seeds: 5,
            out_dir: "out".to_string(),
        }
    }
}

/// Named presets. The task-flavored ones carry only hyperparameters (alpha,
/// learning rate, class count) onto synthetic data; they make no fidelity
/// claim about the original corpora.
pub fn preset(name: &str) -> Result<RunConfig> {
    let with_k = |k: usize| DatasetSource::Synthetic {
        spec: SyntheticSpec {
            k,
            ..SyntheticSpec::default()
        },
    };
    match name {
        "default" => Ok(RunConfig::default()),
        "mnli-like" => Ok(RunConfig {
            dataset: with_k(3),
            alpha: 0.2,
            learning_rate: 3e-5,
            ..RunConfig::default()
        }),
        "fever-like" => Ok(RunConfig {
            dataset: with_k(3),
            alpha: 0.01,
            learning_rate: 2e-5,
            ..RunConfig::default()
        }),
        "qqp-like" => Ok(RunConfig {
            dataset: with_k(2),
            alpha: 0.3,
            learning_rate: 2e-5,
            ..RunConfig::default()
        }),
        other => Err(Error::Config(format!(
            "unknown preset {other:?} (expected default|mnli-like|fever-like|qqp-like)"
        ))),
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if let DatasetSource::Synthetic { spec } = &self.dataset {
            spec.validate()
                .map_err(|e| Error::Config(format!("dataset.{e}")))?;
        }
        if self.n_seeds == 0 {
            return Err(Error::Config("n_seeds must be >= 1".to_string()));
        }
        self.plan(self.seed).validate()
    }

    /// Stable hash of the experiment identity (everything except `out_dir`).
    pub fn fingerprint(&self) -> String {
        let mut value = serde_json::to_value(self).expect("config serializes");
        value.as_object_mut().unwrap().remove("out_dir");
        let digest = Sha256::digest(value.to_string().as_bytes());
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Training hyperparameters for one seed; `stop` covers the epoch-driven
    /// stages, the expert stage applies `expert_max_steps` on top.
    pub fn plan(&self, seed: u64) -> TrainPlan {
        TrainPlan {
            stop: StopRule::Epochs(self.epochs),
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            weight_decay: self.weight_decay,
            alpha: self.alpha,
            balance: self.balance,
            merge_rule: self.merge_rule,
            dynamic_q: self.dynamic_q,
            ce_coeff: self.ce_coeff,
            poe_coeff: self.poe_coeff,
            aux_hidden: self.aux_hidden.clone(),
            expert_hidden: self.expert_hidden.clone(),
            main_hidden: self.main_hidden.clone(),
            parallel_experts: true,
            seed,
        }
    }

    fn expert_stop(&self) -> StopRule {
        match self.expert_max_steps {
            Some(t) => StopRule::MaxSteps(t),
            None => StopRule::Epochs(self.epochs),
        }
    }

    /// The seeds of a multi-seed run: `seed, seed+1, ..`.
    pub fn seeds(&self) -> Vec<u64> {
        (0..self.n_seeds as u64).map(|i| self.seed + i).collect()
    }
}

/// Which variant of the pipeline to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PipelineArm {
    /// Auxiliary -> amplified OvR experts -> PoE main model.
    Full,
    /// Amplification disabled (alpha = 0), otherwise identical to `Full`.
    WithoutAmp,
    /// k multi-class auxiliaries (averaged softmax) replace the experts.
    WithoutOvr,
    /// A single multi-class auxiliary replaces the experts (plain PoE).
    WithoutBoth,
    /// Cross-entropy only; no expert signal at all.
    Erm,
}

impl PipelineArm {
    pub const ABLATION: [PipelineArm; 4] = [
        PipelineArm::Full,
        PipelineArm::WithoutAmp,
        PipelineArm::WithoutOvr,
        PipelineArm::WithoutBoth,
    ];

    pub fn tag(&self) -> &'static str {
        match self {
            PipelineArm::Full => "full",
            PipelineArm::WithoutAmp => "no_amp",
            PipelineArm::WithoutOvr => "no_ovr",
            PipelineArm::WithoutBoth => "no_both",
            PipelineArm::Erm => "erm",
        }
    }
}

/// Materializes the configured dataset bundle.
pub fn load_bundle(config: &RunConfig) -> Result<DatasetBundle> {
    match &config.dataset {
        DatasetSource::Synthetic { spec } => generate(spec),
        DatasetSource::Csv {
            train,
            id_test,
            ood_test,
        } => {
            let read = |path: &str| -> Result<crate::datagen::Dataset> {
                load_csv(BufReader::new(File::open(path)?))
            };
            Ok(DatasetBundle {
                train: read(train)?,
                id_test: read(id_test)?,
                ood_test: read(ood_test)?,
            })
        }
    }
}

fn steps_per_epoch(n: usize, batch_size: usize) -> u64 {
    (n.div_ceil(batch_size)) as u64
}

/// Runs one pipeline arm on a prepared bundle and evaluates the main model.
pub fn run_pipeline(
    config: &RunConfig,
    bundle: &DatasetBundle,
    seed: u64,
    arm: PipelineArm,
) -> Result<RunReport> {
    config.validate()?;
    let start = Instant::now();
    let ds = &bundle.train;
    let k = ds.k();

    let mut echo = config.clone();
    let mut plan = config.plan(seed);

    let mut auxiliary: Option<TrajectoryLog> = None;
    let mut expert_logs: Vec<TrajectoryLog> = Vec::new();
    let expert_steps;

    let main_out = match arm {
        PipelineArm::Full | PipelineArm::WithoutAmp => {
            if arm == PipelineArm::WithoutAmp {
                plan.alpha = 0.0;
                echo.alpha = 0.0;
            }
            let aux = train_auxiliary(ds, &plan)?;
            auxiliary = Some(aux.log);
            let expert_plan = TrainPlan {
                stop: config.expert_stop(),
                ..plan.clone()
            };
            let experts = train_bias_experts(ds, &aux.q, &expert_plan)?;
            expert_steps = experts.steps;
            expert_logs = experts.logs;
            train_main(ds, &experts.ensemble, &plan)?
        }
        PipelineArm::WithoutOvr | PipelineArm::WithoutBoth => {
            let members = if arm == PipelineArm::WithoutOvr { k } else { 1 };
            let member_plan = TrainPlan {
                stop: config.expert_stop(),
                ..plan.clone()
            };
            let ensemble = train_multiclass_auxiliary_ensemble(ds, &member_plan, members)?;
            expert_steps = match config.expert_stop() {
                StopRule::MaxSteps(t) => t,
                StopRule::Epochs(e) => e as u64 * steps_per_epoch(ds.len(), plan.batch_size),
            };
            train_main(ds, &ensemble, &plan)?
        }
        PipelineArm::Erm => {
            plan.ce_coeff = 1.0;
            plan.poe_coeff = 0.0;
            echo.ce_coeff = 1.0;
            echo.poe_coeff = 0.0;
            expert_steps = 0;
            train_main(ds, &UniformScorer { k }, &plan)?
        }
    };

    let model = &main_out.model;
    let eval_split = |split: &crate::datagen::Dataset| -> Result<(f64, _, _)> {
        Ok((
            evaluate(model as &dyn Scorer, split)?,
            group_metrics(model as &dyn Scorer, split)?,
            confidence_histograms(model as &dyn Scorer, split)?,
        ))
    };
    let (acc_train, g_train, h_train) = eval_split(&bundle.train)?;
    let (acc_id, g_id, h_id) = eval_split(&bundle.id_test)?;
    let (acc_ood, g_ood, h_ood) = eval_split(&bundle.ood_test)?;

    let config_fingerprint = config.fingerprint();
    let run_id = {
        let digest = Sha256::digest(format!("{config_fingerprint}/{seed}/{}", arm.tag()));
        let hex: String = digest[..6].iter().map(|b| format!("{b:02x}")).collect();
        format!("{}-{hex}", arm.tag())
    };

    Ok(RunReport {
        run_id,
        arm: arm.tag().to_string(),
        seed,
        config_fingerprint,
        dataset_fingerprint: bundle.train.fingerprint().to_string(),
        config: echo,
        accuracy: SplitScalar {
            train: acc_train,
            id_test: acc_id,
            ood_test: acc_ood,
        },
        id_ood_gap: acc_id - acc_ood,
        groups: SplitGroups {
            train: g_train,
            id_test: g_id,
            ood_test: g_ood,
        },
        histograms: SplitHistograms {
            train: h_train,
            id_test: h_id,
            ood_test: h_ood,
        },
        trajectories: Trajectories {
            auxiliary,
            experts: expert_logs,
            main: main_out.log,
        },
        expert_steps,
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// Runs one arm across all configured seeds (in parallel); reports come back
/// in seed order.
pub fn run_seeds(
    config: &RunConfig,
    bundle: &DatasetBundle,
    arm: PipelineArm,
) -> Result<Vec<RunReport>> {
    config
        .seeds()
        .par_iter()
        .map(|&seed| run_pipeline(config, bundle, seed, arm))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> RunConfig {
        RunConfig {
            dataset: DatasetSource::Synthetic {
                spec: SyntheticSpec {
                    n_train: 640,
                    n_id_test: 160,
                    n_ood_test: 160,
                    ..SyntheticSpec::default()
                },
            },
            epochs: 1,
            expert_max_steps: None,
            n_seeds: 1,
            ..RunConfig::default()
        }
    }

    #[test]
    fn default_config_is_valid() {
        RunConfig::default().validate().unwrap();
    }

    #[test]
    fn presets_parse_and_validate() {
        for name in ["default", "mnli-like", "fever-like", "qqp-like"] {
            preset(name).unwrap().validate().unwrap();
        }
        assert!(preset("nope").is_err());
    }

    #[test]
    fn config_json_round_trips() {
        let config = preset("qqp-like").unwrap();
        let json = serde_json::to_string(&config).unwrap();
        let back: RunConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(config, back);
    }

    #[test]
    fn fingerprint_ignores_out_dir_only() {
        let a = RunConfig::default();
        let mut b = RunConfig::default();
        b.out_dir = "elsewhere".to_string();
        assert_eq!(a.fingerprint(), b.fingerprint());
        b.alpha = 0.5;
        assert_ne!(a.fingerprint(), b.fingerprint());
    }

    #[test]
    fn full_arm_produces_complete_report() {
        let config = tiny_config();
        let bundle = load_bundle(&config).unwrap();
        let report = run_pipeline(&config, &bundle, 0, PipelineArm::Full).unwrap();
        assert_eq!(report.arm, "full");
        assert!(report.trajectories.auxiliary.is_some());
        assert_eq!(report.trajectories.experts.len(), 3);
        assert_eq!(report.id_ood_gap, report.accuracy.id_test - report.accuracy.ood_test);
        assert!(report.expert_steps > 0);
    }

    #[test]
    fn erm_arm_runs_without_experts() {
        let config = tiny_config();
        let bundle = load_bundle(&config).unwrap();
        let report = run_pipeline(&config, &bundle, 0, PipelineArm::Erm).unwrap();
        assert!(report.trajectories.auxiliary.is_none());
        assert!(report.trajectories.experts.is_empty());
        assert_eq!(report.config.poe_coeff, 0.0);
        assert_eq!(report.config.ce_coeff, 1.0);
    }

    #[test]
    fn without_amp_arm_records_alpha_zero() {
        let config = tiny_config();
        let bundle = load_bundle(&config).unwrap();
        let report = run_pipeline(&config, &bundle, 0, PipelineArm::WithoutAmp).unwrap();
        assert_eq!(report.config.alpha, 0.0);
    }

    #[test]
    fn reports_are_deterministic_modulo_seconds() {
        let config = tiny_config();
        let bundle = load_bundle(&config).unwrap();
        let mut a = run_pipeline(&config, &bundle, 3, PipelineArm::Full).unwrap();
        let mut b = run_pipeline(&config, &bundle, 3, PipelineArm::Full).unwrap();
        a.seconds = 0.0;
        b.seconds = 0.0;
        assert_eq!(a.to_json().unwrap(), b.to_json().unwrap());
    }

    #[test]
    fn expert_max_steps_caps_the_expert_stage() {
        let mut config = tiny_config();
        config.expert_max_steps = Some(5);
        let bundle = load_bundle(&config).unwrap();
        let report = run_pipeline(&config, &bundle, 0, PipelineArm::Full).unwrap();
        assert_eq!(report.expert_steps, 5);
    }

    #[test]
    fn unknown_config_fields_are_rejected() {
        let err = serde_json::from_str::<RunConfig>("{\"learning_rte\": 0.1}").unwrap_err();
        assert!(err.to_string().contains("learning_rte"));
    }
}
