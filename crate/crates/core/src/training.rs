//! Three-stage training pipeline: auxiliary model, per-class bias experts,
//! and the debiased main model, plus the multi-class ensemble used by the
//! "without OvR" ablation.
//!
//! Stages are strictly isolated: each trains its own freshly initialized
//! model(s), and upstream outputs (the confidence table, the frozen expert
//! ensemble) enter downstream losses as constants.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::datagen::{group_partition, Dataset};
use crate::error::{Error, Result};
use crate::losses::{
    balanced_subset_loss, main_loss, softmax, softmax_ce, ConfidenceTable, PROB_FLOOR,
};
use crate::nn::{Activation, GradientBuffer, MlpModel, OptimizerState};
use crate::ovr::{apply_balance, split_ovr, BalanceKind, BalanceStrategy, BinaryView};
use crate::scorer::Scorer;
use crate::seeds;

/// How the k single-logit expert outputs merge into one distribution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MergeRule {
    Softmax,
    Softplus,
}

impl MergeRule {
    pub fn as_str(&self) -> &'static str {
        match self {
            MergeRule::Softmax => "softmax",
            MergeRule::Softplus => "softplus",
        }
    }
}

impl std::str::FromStr for MergeRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "softmax" => Ok(MergeRule::Softmax),
            "softplus" => Ok(MergeRule::Softplus),
            other => Err(Error::Config(format!(
                "unknown merge rule {other:?} (expected softmax|softplus)"
            ))),
        }
    }
}

/// Stopping rule for one training stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StopRule {
    Epochs(usize),
    /// Fixed optimizer-step budget; epochs repeat until it is spent.
    MaxSteps(u64),
}

/// Hyperparameters for one pipeline run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainPlan {
    pub stop: StopRule,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// Amplification exponent for expert training; 0 disables amplification.
    pub alpha: f64,
    pub balance: BalanceKind,
    pub merge_rule: MergeRule,
    /// Recompute confidences each epoch from an auxiliary model co-trained
    /// alongside each expert, instead of a fixed pre-trained table.
    pub dynamic_q: bool,
    pub ce_coeff: f64,
    pub poe_coeff: f64,
    pub aux_hidden: Vec<usize>,
    pub expert_hidden: Vec<usize>,
    pub main_hidden: Vec<usize>,
    pub parallel_experts: bool,
    pub seed: u64,
}

impl Default for TrainPlan {
    fn default() -> Self {
        Self {
            stop: StopRule::Epochs(3),
            batch_size: 32,
            learning_rate: 3e-3,
            weight_decay: 0.01,
            alpha: 0.2,
            balance: BalanceKind::Reweight,
            merge_rule: MergeRule::Softmax,
            dynamic_q: false,
            ce_coeff: 0.3,
            poe_coeff: 1.0,
            aux_hidden: vec![4],
            expert_hidden: vec![4],
            main_hidden: vec![64],
            parallel_experts: true,
            seed: 0,
        }
    }
}

impl TrainPlan {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".to_string()));
        }
        if self.learning_rate <= 0.0 {
            return Err(Error::Config("learning_rate must be > 0".to_string()));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config("weight_decay must be >= 0".to_string()));
        }
        if self.alpha < 0.0 {
            return Err(Error::Config("alpha must be >= 0".to_string()));
        }
        if self.ce_coeff < 0.0 || self.poe_coeff < 0.0 {
            return Err(Error::Config("loss coefficients must be >= 0".to_string()));
        }
        for (name, dims) in [
            ("aux_hidden", &self.aux_hidden),
            ("expert_hidden", &self.expert_hidden),
            ("main_hidden", &self.main_hidden),
        ] {
            if dims.iter().any(|&d| d == 0) {
                return Err(Error::Config(format!("{name} entries must be >= 1")));
            }
        }
        Ok(())
    }

    fn dims(&self, input: usize, hidden: &[usize], output: usize) -> Vec<usize> {
        let mut dims = Vec::with_capacity(hidden.len() + 2);
        dims.push(input);
        dims.extend_from_slice(hidden);
        dims.push(output);
        dims
    }
}

/// One per-epoch record of group-wise confidence and accuracy. Fields are
/// `None` when the corresponding group is empty or flags are unavailable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryPoint {
    pub epoch: usize,
    pub conf_biased: Option<f64>,
    pub conf_conflicting: Option<f64>,
    pub acc_biased: Option<f64>,
    pub acc_conflicting: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryLog {
    pub points: Vec<TrajectoryPoint>,
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

/// Per-example confidence in the true label plus correctness, from which the
/// trajectory groups are aggregated.
fn group_point<F>(ds: &Dataset, epoch: usize, confidence_and_hit: F) -> Result<TrajectoryPoint>
where
    F: Fn(&[f64], usize) -> Result<(f64, bool)>,
{
    let partition = group_partition(ds).ok();
    let stats = |idxs: &[usize]| -> Result<(Option<f64>, Option<f64>)> {
        if idxs.is_empty() {
            return Ok((None, None));
        }
        let mut conf_sum = 0.0;
        let mut hits = 0usize;
        for &i in idxs {
            let ex = &ds.examples()[i];
            let (conf, hit) = confidence_and_hit(&ex.features, ex.label)?;
            conf_sum += conf;
            hits += usize::from(hit);
        }
        let n = idxs.len() as f64;
        Ok((Some(conf_sum / n), Some(100.0 * hits as f64 / n)))
    };

    let (conf_biased, acc_biased, conf_conflicting, acc_conflicting) = match &partition {
        Some(p) => {
            let (cb, ab) = stats(&p.biased)?;
            let (cc, ac) = stats(&p.bias_conflicting)?;
            (cb, ab, cc, ac)
        }
        None => (None, None, None, None),
    };
    Ok(TrajectoryPoint {
        epoch,
        conf_biased,
        conf_conflicting,
        acc_biased,
        acc_conflicting,
    })
}

fn multiclass_point(model: &MlpModel, ds: &Dataset, epoch: usize) -> Result<TrajectoryPoint> {
    group_point(ds, epoch, |features, label| {
        let probs = softmax(&model.forward(features)?);
        Ok((probs[label], argmax(&probs) == label))
    })
}

fn binary_point(
    expert: &MlpModel,
    ds: &Dataset,
    target_class: usize,
    epoch: usize,
) -> Result<TrajectoryPoint> {
    group_point(ds, epoch, |features, label| {
        let p = sigmoid(expert.forward(features)?[0]);
        let positive = label == target_class;
        let conf = if positive { p } else { 1.0 - p };
        Ok((conf, (p > 0.5) == positive))
    })
}

#[inline]
fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// One callback per batch, one per completed (or budget-truncated) epoch.
enum LoopEvent<'a> {
    Batch(&'a [usize]),
    EpochEnd(usize),
}

/// Drives epochs/steps for one stage over a shuffled index stream.
fn train_loop<F>(
    n: usize,
    stop: StopRule,
    batch_size: usize,
    shuffle_seed: u64,
    mut handle: F,
) -> Result<u64>
where
    F: FnMut(LoopEvent<'_>) -> Result<()>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(shuffle_seed);
    let mut steps: u64 = 0;
    let mut epoch = 0usize;
    loop {
        match stop {
            StopRule::Epochs(e) if epoch >= e => break,
            StopRule::MaxSteps(t) if steps >= t => break,
            _ => {}
        }
        epoch += 1;
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        for batch in order.chunks(batch_size) {
            if let StopRule::MaxSteps(t) = stop {
                if steps >= t {
                    break;
                }
            }
            handle(LoopEvent::Batch(batch))?;
            steps += 1;
        }
        handle(LoopEvent::EpochEnd(epoch))?;
    }
    Ok(steps)
}

/// Result of the auxiliary stage.
#[derive(Debug)]
pub struct AuxiliaryOutput {
    pub model: MlpModel,
    pub q: ConfidenceTable,
    pub log: TrajectoryLog,
    pub steps: u64,
}

/// Trains the intentionally biased auxiliary classifier with plain
/// cross-entropy and records the softmax probability of every training
/// example's true class.
pub fn train_auxiliary(ds: &Dataset, plan: &TrainPlan) -> Result<AuxiliaryOutput> {
    plan.validate()?;
    if ds.is_empty() {
        return Err(Error::Config("cannot train on an empty dataset".to_string()));
    }
    let dims = plan.dims(ds.feature_dim(), &plan.aux_hidden, ds.k());
    let mut model = MlpModel::new(&dims, Activation::Relu, seeds::derive(plan.seed, "aux/init"))?;
    let mut opt = OptimizerState::with_weight_decay(&model, plan.learning_rate, plan.weight_decay);
    let mut grads = GradientBuffer::zeros_like(&model);
    let mut log = TrajectoryLog::default();

    let steps = train_loop(
        ds.len(),
        plan.stop,
        plan.batch_size,
        seeds::derive(plan.seed, "aux/shuffle"),
        |event| match event {
            LoopEvent::Batch(batch) => {
                grads.zero();
                for &i in batch {
                    let ex = &ds.examples()[i];
                    let (logits, cache) = model.forward_cached(&ex.features)?;
                    let (_, upstream) = softmax_ce(&logits, ex.label)?;
                    model.backward_into(&cache, &upstream, &mut grads)?;
                }
                grads.scale(1.0 / batch.len() as f64);
                optimizer_step_checked(&mut model, &grads, &mut opt)
            }
            LoopEvent::EpochEnd(epoch) => {
                log.points.push(multiclass_point(&model, ds, epoch)?);
                Ok(())
            }
        },
    )?;

    let q = confidence_table(&model, ds)?;
    Ok(AuxiliaryOutput {
        model,
        q,
        log,
        steps,
    })
}

/// Softmax probability of the true class for every example in `ds`.
pub fn confidence_table(model: &MlpModel, ds: &Dataset) -> Result<ConfidenceTable> {
    let mut q = Vec::with_capacity(ds.len());
    for ex in ds.examples() {
        let probs = softmax(&model.forward(&ex.features)?);
        q.push(probs[ex.label]);
    }
    ConfidenceTable::new(q)
}

fn optimizer_step_checked(
    model: &mut MlpModel,
    grads: &GradientBuffer,
    opt: &mut OptimizerState,
) -> Result<()> {
    crate::nn::optimizer_step(model, grads, opt)
}

/// k frozen single-logit experts plus the rule merging them into a
/// k-class distribution.
#[derive(Debug, Clone)]
pub struct ExpertEnsemble {
    experts: Vec<MlpModel>,
    merge_rule: MergeRule,
}

impl ExpertEnsemble {
    pub fn new(experts: Vec<MlpModel>, merge_rule: MergeRule) -> Result<Self> {
        if experts.len() < 2 {
            return Err(Error::Config(format!(
                "an ensemble needs >= 2 experts, got {}",
                experts.len()
            )));
        }
        let input_dim = experts[0].input_dim();
        for (i, e) in experts.iter().enumerate() {
            if e.output_dim() != 1 {
                return Err(Error::Config(format!(
                    "expert {i} must emit a single logit, emits {}",
                    e.output_dim()
                )));
            }
            if e.input_dim() != input_dim {
                return Err(Error::Config(format!(
                    "expert {i} has input dim {}, expected {input_dim}",
                    e.input_dim()
                )));
            }
        }
        Ok(Self {
            experts,
            merge_rule,
        })
    }

    pub fn k(&self) -> usize {
        self.experts.len()
    }

    pub fn merge_rule(&self) -> MergeRule {
        self.merge_rule
    }

    pub fn experts(&self) -> &[MlpModel] {
        &self.experts
    }

    /// One raw logit per expert.
    pub fn raw_logits(&self, features: &[f64]) -> Result<Vec<f64>> {
        self.experts
            .iter()
            .map(|e| Ok(e.forward(features)?[0]))
            .collect()
    }

    pub fn param_fingerprint(&self) -> String {
        let mut hasher = Sha256::new();
        for e in &self.experts {
            hasher.update(e.param_fingerprint().as_bytes());
        }
        let digest = hasher.finalize();
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}

fn floor_normalize(mut p: Vec<f64>) -> Vec<f64> {
    for v in &mut p {
        if !(*v >= PROB_FLOOR) {
            *v = PROB_FLOOR;
        }
    }
    let sum: f64 = p.iter().sum();
    for v in &mut p {
        *v /= sum;
    }
    p
}

/// Merges expert logits into a strictly positive distribution that sums to 1.
pub fn merge_experts(ensemble: &ExpertEnsemble, features: &[f64]) -> Result<Vec<f64>> {
    let logits = ensemble.raw_logits(features)?;
    let p = match ensemble.merge_rule {
        MergeRule::Softmax => softmax(&logits),
        MergeRule::Softplus => {
            let sp: Vec<f64> = logits.iter().map(|&z| crate::losses::softplus(z)).collect();
            let sum: f64 = sp.iter().sum();
            if sum <= 0.0 {
                // softplus > 0 mathematically; reachable only via underflow
                vec![1.0 / logits.len() as f64; logits.len()]
            } else {
                sp.into_iter().map(|v| v / sum).collect()
            }
        }
    };
    Ok(floor_normalize(p))
}

impl Scorer for ExpertEnsemble {
    fn num_classes(&self) -> usize {
        self.k()
    }

    fn class_probs(&self, features: &[f64]) -> Result<Vec<f64>> {
        merge_experts(self, features)
    }
}

/// Result of the expert stage.
#[derive(Debug)]
pub struct ExpertOutput {
    pub ensemble: ExpertEnsemble,
    pub logs: Vec<TrajectoryLog>,
    /// Realized optimizer steps of the longest-trained expert.
    pub steps: u64,
}

/// Trains one bias expert per class on its balanced OvR view, minimizing the
/// confidence-amplified binary objective. The confidence table (or, with
/// `dynamic_q`, a per-expert co-trained auxiliary) is a constant input: no
/// gradient reaches whatever produced it.
pub fn train_bias_experts(
    ds: &Dataset,
    q: &ConfidenceTable,
    plan: &TrainPlan,
) -> Result<ExpertOutput> {
    plan.validate()?;
    if q.len() != ds.len() {
        return Err(Error::ConfidenceTable(format!(
            "table covers {} examples, dataset has {}",
            q.len(),
            ds.len()
        )));
    }
    if let Some(class) = ds.class_counts().iter().position(|&c| c == 0) {
        return Err(Error::DegenerateClass(format!(
            "class {class} has no examples"
        )));
    }

    let strategy = BalanceStrategy::new(plan.balance, seeds::derive(plan.seed, "balance"));
    let views: Vec<BinaryView<'_>> = split_ovr(ds)
        .into_iter()
        .map(|v| apply_balance(v, &strategy))
        .collect::<Result<_>>()?;

    let train_one = |(i, view): (usize, &BinaryView<'_>)| train_single_expert(ds, view, q, plan, i);
    let results: Vec<Result<(MlpModel, TrajectoryLog, u64)>> = if plan.parallel_experts {
        views.par_iter().enumerate().map(train_one).collect()
    } else {
        views.iter().enumerate().map(train_one).collect()
    };

    let mut experts = Vec::with_capacity(views.len());
    let mut logs = Vec::with_capacity(views.len());
    let mut steps = 0;
    for r in results {
        let (model, log, s) = r?;
        experts.push(model);
        logs.push(log);
        steps = steps.max(s);
    }
    Ok(ExpertOutput {
        ensemble: ExpertEnsemble::new(experts, plan.merge_rule)?,
        logs,
        steps,
    })
}

fn train_single_expert(
    ds: &Dataset,
    view: &BinaryView<'_>,
    static_q: &ConfidenceTable,
    plan: &TrainPlan,
    class: usize,
) -> Result<(MlpModel, TrajectoryLog, u64)> {
    let dims = plan.dims(ds.feature_dim(), &plan.expert_hidden, 1);
    let mut model = MlpModel::new(
        &dims,
        Activation::Relu,
        seeds::derive(plan.seed, &format!("expert{class}/init")),
    )?;
    let mut opt = OptimizerState::with_weight_decay(&model, plan.learning_rate, plan.weight_decay);
    let mut grads = GradientBuffer::zeros_like(&model);
    let mut log = TrajectoryLog::default();

    // Optional co-trained auxiliary for the dynamic-q schedule: one CE step
    // per expert step, with the confidence snapshot refreshed each epoch.
    let mut co_aux = if plan.dynamic_q {
        let aux_dims = plan.dims(ds.feature_dim(), &plan.aux_hidden, ds.k());
        let aux = MlpModel::new(
            &aux_dims,
            Activation::Relu,
            seeds::derive(plan.seed, &format!("expert{class}/dynq-aux/init")),
        )?;
        let aux_opt =
            OptimizerState::with_weight_decay(&aux, plan.learning_rate, plan.weight_decay);
        let aux_grads = GradientBuffer::zeros_like(&aux);
        Some((aux, aux_opt, aux_grads))
    } else {
        None
    };
    let mut q_epoch: Option<ConfidenceTable> = None;

    let active_len = view.active_indices().len();
    let steps = train_loop(
        active_len,
        plan.stop,
        plan.batch_size,
        // Shared per-stage stream: every expert shuffles with the same seed.
        seeds::derive(plan.seed, "experts/shuffle"),
        |event| match event {
            LoopEvent::Batch(positions) => {
                if plan.dynamic_q && q_epoch.is_none() {
                    let (aux, _, _) = co_aux.as_ref().unwrap();
                    q_epoch = Some(confidence_table(aux, ds)?);
                }
                let q = match &q_epoch {
                    Some(t) if plan.dynamic_q => t,
                    _ => static_q,
                };

                let mut logits = Vec::with_capacity(positions.len());
                let mut caches = Vec::with_capacity(positions.len());
                for &p in positions {
                    let idx = view.active_indices()[p];
                    let ex = &ds.examples()[idx];
                    let (l, cache) = model.forward_cached(&ex.features)?;
                    logits.push(l[0]);
                    caches.push(cache);
                }
                let (_, grad) = balanced_subset_loss(view, positions, &logits, q, plan.alpha)?;
                grads.zero();
                for (cache, g) in caches.iter().zip(grad.iter()) {
                    model.backward_into(cache, &[*g], &mut grads)?;
                }
                optimizer_step_checked(&mut model, &grads, &mut opt)?;

                if let Some((aux, aux_opt, aux_grads)) = co_aux.as_mut() {
                    aux_grads.zero();
                    for &p in positions {
                        let idx = view.active_indices()[p];
                        let ex = &ds.examples()[idx];
                        let (l, cache) = aux.forward_cached(&ex.features)?;
                        let (_, upstream) = softmax_ce(&l, ex.label)?;
                        aux.backward_into(&cache, &upstream, aux_grads)?;
                    }
                    aux_grads.scale(1.0 / positions.len() as f64);
                    optimizer_step_checked(aux, aux_grads, aux_opt)?;
                }
                Ok(())
            }
            LoopEvent::EpochEnd(epoch) => {
                q_epoch = None; // refresh the dynamic snapshot next epoch
                log.points.push(binary_point(&model, ds, class, epoch)?);
                Ok(())
            }
        },
    )?;
    Ok((model, log, steps))
}

/// Result of the main stage.
#[derive(Debug)]
pub struct MainOutput {
    pub model: MlpModel,
    pub log: TrajectoryLog,
    pub steps: u64,
}

/// Trains the debiased main model against a frozen bias scorer with the mixed
/// `ce_coeff * CE + poe_coeff * PoE` objective. Expert probabilities are
/// precomputed once; no gradient can reach the scorer.
pub fn train_main(ds: &Dataset, bias_scorer: &dyn Scorer, plan: &TrainPlan) -> Result<MainOutput> {
    plan.validate()?;
    if ds.is_empty() {
        return Err(Error::Config("cannot train on an empty dataset".to_string()));
    }
    if bias_scorer.num_classes() != ds.k() {
        return Err(Error::Config(format!(
            "bias scorer predicts {} classes, dataset has {}",
            bias_scorer.num_classes(),
            ds.k()
        )));
    }

    let p_b: Vec<Vec<f64>> = ds
        .examples()
        .iter()
        .map(|ex| bias_scorer.class_probs(&ex.features))
        .collect::<Result<_>>()?;

    let dims = plan.dims(ds.feature_dim(), &plan.main_hidden, ds.k());
    let mut model = MlpModel::new(
        &dims,
        Activation::Relu,
        seeds::derive(plan.seed, "main/init"),
    )?;
    let mut opt = OptimizerState::with_weight_decay(&model, plan.learning_rate, plan.weight_decay);
    let mut grads = GradientBuffer::zeros_like(&model);
    let mut log = TrajectoryLog::default();

    let steps = train_loop(
        ds.len(),
        plan.stop,
        plan.batch_size,
        seeds::derive(plan.seed, "main/shuffle"),
        |event| match event {
            LoopEvent::Batch(batch) => {
                grads.zero();
                for &i in batch {
                    let ex = &ds.examples()[i];
                    let (logits, cache) = model.forward_cached(&ex.features)?;
                    let (_, upstream) =
                        main_loss(&logits, &p_b[i], ex.label, plan.ce_coeff, plan.poe_coeff)?;
                    model.backward_into(&cache, &upstream, &mut grads)?;
                }
                grads.scale(1.0 / batch.len() as f64);
                optimizer_step_checked(&mut model, &grads, &mut opt)
            }
            LoopEvent::EpochEnd(epoch) => {
                log.points.push(multiclass_point(&model, ds, epoch)?);
                Ok(())
            }
        },
    )?;

    Ok(MainOutput { model, log, steps })
}

/// Ensemble of CE-trained multi-class auxiliaries; its averaged softmax plays
/// the expert-distribution role in the "without OvR" ablation.
#[derive(Debug, Clone)]
pub struct MulticlassEnsemble {
    members: Vec<MlpModel>,
}

impl MulticlassEnsemble {
    pub fn members(&self) -> &[MlpModel] {
        &self.members
    }

    pub fn param_fingerprint(&self) -> String {
        let mut hasher = Sha256::new();
        for m in &self.members {
            hasher.update(m.param_fingerprint().as_bytes());
        }
        let digest = hasher.finalize();
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}

impl Scorer for MulticlassEnsemble {
    fn num_classes(&self) -> usize {
        self.members[0].output_dim()
    }

    fn class_probs(&self, features: &[f64]) -> Result<Vec<f64>> {
        let k = self.num_classes();
        let mut avg = vec![0.0; k];
        for m in &self.members {
            let p = softmax(&m.forward(features)?);
            for (a, v) in avg.iter_mut().zip(p.iter()) {
                *a += v / self.members.len() as f64;
            }
        }
        Ok(floor_normalize(avg))
    }
}

/// Trains `members` independent multi-class auxiliaries with plain CE.
pub fn train_multiclass_auxiliary_ensemble(
    ds: &Dataset,
    plan: &TrainPlan,
    members: usize,
) -> Result<MulticlassEnsemble> {
    plan.validate()?;
    if members == 0 {
        return Err(Error::Config("ensemble needs >= 1 member".to_string()));
    }
    let trained: Vec<Result<MlpModel>> = (0..members)
        .into_par_iter()
        .map(|m| {
            let member_plan = TrainPlan {
                seed: seeds::derive(plan.seed, &format!("mcaux{m}")),
                ..plan.clone()
            };
            Ok(train_auxiliary(ds, &member_plan)?.model)
        })
        .collect();
    let members = trained.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(MulticlassEnsemble { members })
}

/// Mean expert confidence sigma(f_b^y(x)) over the given example indices,
/// where each example is scored by its own class's expert.
pub fn expert_true_class_confidence(
    ensemble: &ExpertEnsemble,
    ds: &Dataset,
    indices: &[usize],
) -> Result<f64> {
    if indices.is_empty() {
        return Err(Error::UndefinedMetric("empty index set".to_string()));
    }
    let mut sum = 0.0;
    for &i in indices {
        let ex = &ds.examples()[i];
        let logit = ensemble.experts[ex.label].forward(&ex.features)?[0];
        sum += sigmoid(logit);
    }
    Ok(sum / indices.len() as f64)
}

/// Mean probability assigned to the true class by a scorer over the given
/// example indices.
pub fn scorer_true_class_confidence(
    scorer: &dyn Scorer,
    ds: &Dataset,
    indices: &[usize],
) -> Result<f64> {
    if indices.is_empty() {
        return Err(Error::UndefinedMetric("empty index set".to_string()));
    }
    let mut sum = 0.0;
    for &i in indices {
        let ex = &ds.examples()[i];
        sum += scorer.class_probs(&ex.features)?[ex.label];
    }
    Ok(sum / indices.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate, SyntheticSpec};
    use crate::scorer::UniformScorer;
    use approx::assert_relative_eq;

    fn small_spec(seed: u64) -> SyntheticSpec {
        SyntheticSpec {
            n_train: 1200,
            n_id_test: 300,
            n_ood_test: 300,
            seed,
            ..SyntheticSpec::default()
        }
    }

    fn fast_plan(seed: u64) -> TrainPlan {
        TrainPlan {
            stop: StopRule::Epochs(2),
            seed,
            ..TrainPlan::default()
        }
    }

    #[test]
    fn auxiliary_is_more_confident_on_biased_group() {
        let bundle = generate(&small_spec(1)).unwrap();
        let out = train_auxiliary(&bundle.train, &fast_plan(1)).unwrap();
        let last = out.log.points.last().unwrap();
        let biased = last.conf_biased.unwrap();
        let conflicting = last.conf_conflicting.unwrap();
        assert!(
            biased > conflicting,
            "biased {biased} vs conflicting {conflicting}"
        );
    }

    #[test]
    fn untrained_auxiliary_confidence_is_near_chance() {
        let bundle = generate(&small_spec(2)).unwrap();
        let plan = TrainPlan {
            stop: StopRule::Epochs(0),
            ..fast_plan(2)
        };
        let out = train_auxiliary(&bundle.train, &plan).unwrap();
        assert_eq!(out.steps, 0);
        assert!(out.log.points.is_empty());
        let mean = out.q.values().iter().sum::<f64>() / out.q.len() as f64;
        assert!(
            (mean - 1.0 / 3.0).abs() < 0.05,
            "mean confidence {mean} not near 1/3"
        );
        assert!(out.q.values().iter().all(|&v| (0.05..0.8).contains(&v)));
    }

    #[test]
    fn auxiliary_training_is_deterministic() {
        let bundle = generate(&small_spec(3)).unwrap();
        let a = train_auxiliary(&bundle.train, &fast_plan(3)).unwrap();
        let b = train_auxiliary(&bundle.train, &fast_plan(3)).unwrap();
        assert_eq!(a.model.param_fingerprint(), b.model.param_fingerprint());
        assert_eq!(a.q.values(), b.q.values());
    }

    #[test]
    fn experts_specialize_in_biased_positives() {
        let bundle = generate(&small_spec(4)).unwrap();
        let plan = fast_plan(4);
        let aux = train_auxiliary(&bundle.train, &plan).unwrap();
        let out = train_bias_experts(&bundle.train, &aux.q, &plan).unwrap();

        let parts = group_partition(&bundle.train).unwrap();
        let biased = expert_true_class_confidence(&out.ensemble, &bundle.train, &parts.biased)
            .unwrap();
        let conflicting =
            expert_true_class_confidence(&out.ensemble, &bundle.train, &parts.bias_conflicting)
                .unwrap();
        assert!(
            biased > conflicting,
            "expert confidence: biased {biased} vs conflicting {conflicting}"
        );
    }

    #[test]
    fn experts_are_frozen_through_main_training() {
        let bundle = generate(&small_spec(5)).unwrap();
        let plan = fast_plan(5);
        let aux = train_auxiliary(&bundle.train, &plan).unwrap();
        let experts = train_bias_experts(&bundle.train, &aux.q, &plan).unwrap();
        let aux_before = aux.model.param_fingerprint();
        let experts_before = experts.ensemble.param_fingerprint();

        train_main(&bundle.train, &experts.ensemble, &plan).unwrap();

        assert_eq!(aux.model.param_fingerprint(), aux_before);
        assert_eq!(experts.ensemble.param_fingerprint(), experts_before);
    }

    #[test]
    fn parallel_and_serial_expert_training_agree() {
        let bundle = generate(&small_spec(6)).unwrap();
        let plan = fast_plan(6);
        let aux = train_auxiliary(&bundle.train, &plan).unwrap();
        let parallel = train_bias_experts(&bundle.train, &aux.q, &plan).unwrap();
        let serial_plan = TrainPlan {
            parallel_experts: false,
            ..plan
        };
        let serial = train_bias_experts(&bundle.train, &aux.q, &serial_plan).unwrap();
        assert_eq!(
            parallel.ensemble.param_fingerprint(),
            serial.ensemble.param_fingerprint()
        );
    }

    #[test]
    fn dynamic_q_mode_trains_and_is_deterministic() {
        let bundle = generate(&small_spec(7)).unwrap();
        let plan = TrainPlan {
            dynamic_q: true,
            stop: StopRule::Epochs(1),
            ..fast_plan(7)
        };
        let q = ConfidenceTable::uniform(bundle.train.len(), bundle.train.k());
        let a = train_bias_experts(&bundle.train, &q, &plan).unwrap();
        let b = train_bias_experts(&bundle.train, &q, &plan).unwrap();
        assert_eq!(
            a.ensemble.param_fingerprint(),
            b.ensemble.param_fingerprint()
        );
    }

    #[test]
    fn expert_training_rejects_short_confidence_table() {
        let bundle = generate(&small_spec(8)).unwrap();
        let q = ConfidenceTable::uniform(10, 3);
        let err = train_bias_experts(&bundle.train, &q, &fast_plan(8)).unwrap_err();
        assert!(matches!(err, Error::ConfidenceTable(_)));
    }

    #[test]
    fn merge_rules_agree_on_equal_logits() {
        let experts: Vec<MlpModel> = (0..3)
            .map(|_| MlpModel::zeros(&[2, 1], Activation::Relu).unwrap())
            .collect();
        for rule in [MergeRule::Softmax, MergeRule::Softplus] {
            let ensemble = ExpertEnsemble::new(experts.clone(), rule).unwrap();
            let p = merge_experts(&ensemble, &[0.3, -0.4]).unwrap();
            for v in &p {
                assert_relative_eq!(*v, 1.0 / 3.0, max_relative = 1e-12);
            }
        }
    }

    /// Builds a 3-expert ensemble with constant logits (2, 0, -2) via biases.
    fn fixed_logit_ensemble(rule: MergeRule) -> ExpertEnsemble {
        let experts: Vec<MlpModel> = [2.0, 0.0, -2.0]
            .iter()
            .map(|&b| {
                let mut m = MlpModel::zeros(&[2, 1], Activation::Relu).unwrap();
                m.set_bias(0, 0, b);
                m
            })
            .collect();
        ExpertEnsemble::new(experts, rule).unwrap()
    }

    #[test]
    fn softmax_merge_matches_scalar_oracle() {
        let ensemble = fixed_logit_ensemble(MergeRule::Softmax);
        let p = merge_experts(&ensemble, &[0.0, 0.0]).unwrap();
        // softmax(2, 0, -2)
        let e = [2.0_f64.exp(), 1.0, (-2.0_f64).exp()];
        let s: f64 = e.iter().sum();
        for (got, want) in p.iter().zip(e.iter().map(|v| v / s)) {
            assert_relative_eq!(*got, want, max_relative = 1e-12);
        }
        assert!((p[0] - 0.8668).abs() < 1e-4);
        assert!((p[1] - 0.1173).abs() < 1e-4);
        assert!((p[2] - 0.0159).abs() < 1e-4);
    }

    #[test]
    fn softplus_merge_matches_scalar_oracle() {
        let ensemble = fixed_logit_ensemble(MergeRule::Softplus);
        let p = merge_experts(&ensemble, &[0.0, 0.0]).unwrap();
        let sp = [
            (1.0_f64 + 2.0_f64.exp()).ln(),
            2.0_f64.ln(),
            (1.0_f64 + (-2.0_f64).exp()).ln(),
        ];
        assert!((sp[0] - 2.1269).abs() < 1e-4);
        assert!((sp[1] - 0.6931).abs() < 1e-4);
        assert!((sp[2] - 0.1269).abs() < 1e-4);
        let s: f64 = sp.iter().sum();
        for (got, want) in p.iter().zip(sp.iter().map(|v| v / s)) {
            assert_relative_eq!(*got, want, max_relative = 1e-12);
        }
    }

    #[test]
    fn merged_distribution_is_strictly_positive_and_normalized() {
        let ensemble = fixed_logit_ensemble(MergeRule::Softmax);
        let p = merge_experts(&ensemble, &[5.0, -3.0]).unwrap();
        assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        assert!(p.iter().all(|&v| v > 0.0));
    }

    #[test]
    fn main_training_with_uniform_stub_scales_plain_ce() {
        // With uniform expert output, 0.3*CE + 1.0*PoE == 1.3*CE per example.
        let logits = [0.8, -0.2, 0.1];
        let p_b = [1.0 / 3.0; 3];
        let (mixed, mixed_grad) = main_loss(&logits, &p_b, 1, 0.3, 1.0).unwrap();
        let (ce, ce_grad) = softmax_ce(&logits, 1).unwrap();
        assert_relative_eq!(mixed, 1.3 * ce, max_relative = 1e-12);
        for (m, c) in mixed_grad.iter().zip(ce_grad.iter()) {
            assert_relative_eq!(*m, 1.3 * c, max_relative = 1e-12);
        }
    }

    #[test]
    fn main_training_is_deterministic() {
        let bundle = generate(&small_spec(9)).unwrap();
        let plan = fast_plan(9);
        let stub = UniformScorer { k: 3 };
        let a = train_main(&bundle.train, &stub, &plan).unwrap();
        let b = train_main(&bundle.train, &stub, &plan).unwrap();
        assert_eq!(a.model.param_fingerprint(), b.model.param_fingerprint());
    }

    #[test]
    fn main_training_rejects_k_mismatch() {
        let bundle = generate(&small_spec(10)).unwrap();
        let stub = UniformScorer { k: 5 };
        let err = train_main(&bundle.train, &stub, &fast_plan(10)).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn singleton_multiclass_ensemble_matches_lone_auxiliary() {
        let bundle = generate(&small_spec(11)).unwrap();
        let plan = fast_plan(11);
        let ensemble = train_multiclass_auxiliary_ensemble(&bundle.train, &plan, 1).unwrap();
        let lone_plan = TrainPlan {
            seed: seeds::derive(plan.seed, "mcaux0"),
            ..plan
        };
        let lone = train_auxiliary(&bundle.train, &lone_plan).unwrap();
        let x = &bundle.train.examples()[0].features;
        let a = ensemble.class_probs(x).unwrap();
        let b = softmax(&lone.model.forward(x).unwrap());
        for (x, y) in a.iter().zip(b.iter()) {
            assert_relative_eq!(*x, *y, max_relative = 1e-9);
        }
    }

    #[test]
    fn multiclass_ensemble_outputs_a_distribution() {
        let bundle = generate(&small_spec(12)).unwrap();
        let ensemble =
            train_multiclass_auxiliary_ensemble(&bundle.train, &fast_plan(12), 3).unwrap();
        for ex in bundle.train.examples().iter().take(20) {
            let p = ensemble.class_probs(&ex.features).unwrap();
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert!(p.iter().all(|&v| v > 0.0));
        }
    }

    #[test]
    fn max_steps_stop_rule_is_exact() {
        let bundle = generate(&small_spec(13)).unwrap();
        let plan = TrainPlan {
            stop: StopRule::MaxSteps(17),
            ..fast_plan(13)
        };
        let out = train_auxiliary(&bundle.train, &plan).unwrap();
        assert_eq!(out.steps, 17);
    }

    #[test]
    fn trajectory_epochs_strictly_increase() {
        let bundle = generate(&small_spec(14)).unwrap();
        let plan = TrainPlan {
            stop: StopRule::Epochs(3),
            ..fast_plan(14)
        };
        let out = train_auxiliary(&bundle.train, &plan).unwrap();
        let epochs: Vec<usize> = out.log.points.iter().map(|p| p.epoch).collect();
        assert_eq!(epochs, vec![1, 2, 3]);
        for p in &out.log.points {
            for c in [p.conf_biased, p.conf_conflicting] {
                let c = c.unwrap();
                assert!((0.0..=1.0).contains(&c));
            }
        }
    }
}
