//! The two-phase training procedure: supervised pre-training of encoder and
//! classifier, then alternating rounds in which the adversary learns to
//! predict the protected attribute from the encoder output and the encoder
//! is pushed to make it guess uniformly while keeping target accuracy.
//!
//! The loop is single-writer with respect to parameters. Dev evaluation
//! between epochs fans out over the rayon pool read-only and is reduced in
//! a fixed order, so identical configs and seeds give bit-identical logs.

use std::fmt;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{encode_dataset, Dataset, EncodedExample, Vocabulary};
use crate::error::{Error, Result};
use crate::metrics::{audit, audit_cached, encode_cache, AuditReport, EVAL_CHUNK};
use crate::model::{
    backward, batch_ce, ce_dlogits, head_backward_batch, head_forward_batch, init_params,
    BatchLoss, LossSpec, ModelDims, ModelParams, ParamGroup,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum OptimizerKind {
    PlainSgd,
    AdaptiveMoment,
}

impl OptimizerKind {
    pub fn parse(s: &str) -> Result<OptimizerKind> {
        match s {
            "plain-sgd" => Ok(OptimizerKind::PlainSgd),
            "adaptive-moment" => Ok(OptimizerKind::AdaptiveMoment),
            other => Err(Error::validation(format!(
                "optimizer must be plain-sgd or adaptive-moment, got {other:?}"
            ))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            OptimizerKind::PlainSgd => "plain-sgd",
            OptimizerKind::AdaptiveMoment => "adaptive-moment",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CheckpointRule {
    /// Lowest mean dev FPR over the toxic classes for the protected group,
    /// ties broken by higher dev accuracy then by earlier epoch.
    LowestDevFpr,
    BestDevAccuracy,
}

impl CheckpointRule {
    pub fn parse(s: &str) -> Result<CheckpointRule> {
        match s {
            "lowest-dev-fpr" => Ok(CheckpointRule::LowestDevFpr),
            "best-dev-accuracy" => Ok(CheckpointRule::BestDevAccuracy),
            other => Err(Error::validation(format!(
                "checkpoint_rule must be lowest-dev-fpr or best-dev-accuracy, got {other:?}"
            ))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            CheckpointRule::LowestDevFpr => "lowest-dev-fpr",
            CheckpointRule::BestDevAccuracy => "best-dev-accuracy",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingConfig {
    /// Weight of the target-CE term in the demotion objective; the fooling
    /// term gets 1 - alpha.
    pub alpha: f64,
    pub rounds: usize,
    pub epochs_per_phase_per_round: usize,
    pub pretrain_max_epochs: usize,
    /// Pre-training stops early after this many epochs without a dev
    /// accuracy improvement.
    pub pretrain_patience: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub grad_clip_norm: Option<f64>,
    pub seed: u64,
    pub n_adversaries: usize,
    pub checkpoint_rule: CheckpointRule,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            alpha: 0.05,
            rounds: 10,
            epochs_per_phase_per_round: 2,
            pretrain_max_epochs: 20,
            pretrain_patience: 5,
            batch_size: 32,
            learning_rate: 1e-3,
            optimizer: OptimizerKind::AdaptiveMoment,
            grad_clip_norm: Some(5.0),
            seed: 2020,
            n_adversaries: 1,
            checkpoint_rule: CheckpointRule::LowestDevFpr,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::validation(format!("alpha = {} not in (0,1]", self.alpha)));
        }
        if self.rounds == 0 || self.epochs_per_phase_per_round == 0 {
            return Err(Error::validation("rounds and epochs_per_phase_per_round must be >= 1"));
        }
        if self.pretrain_max_epochs == 0 || self.batch_size == 0 {
            return Err(Error::validation("pretrain_max_epochs and batch_size must be >= 1"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::validation("learning_rate must be positive"));
        }
        if let Some(c) = self.grad_clip_norm {
            if !(c > 0.0) {
                return Err(Error::validation("grad_clip_norm must be positive or none"));
            }
        }
        if self.n_adversaries == 0 {
            return Err(Error::validation("n_adversaries must be >= 1"));
        }
        Ok(())
    }
}

/// Stable sub-seed derivation so that the phases draw independent streams.
pub fn derive_seed(base: u64, tag: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(base.to_le_bytes());
    hasher.update(tag.as_bytes());
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// First-order optimizer over one parameter group (a fixed list of flat
/// tensors). Adam keeps per-element moments; plain SGD keeps nothing.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, shapes: &[&[f64]]) -> Optimizer {
        let zeros: Vec<Vec<f64>> = shapes.iter().map(|s| vec![0.0; s.len()]).collect();
        Optimizer {
            kind,
            lr,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    /// One update step. `clip` rescales gradients so their global L2 norm
    /// does not exceed it.
    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]], clip: Option<f64>) {
        let scale = match clip {
            Some(c) => {
                let norm_sq: f64 = grads
                    .iter()
                    .map(|g| g.iter().map(|x| x * x).sum::<f64>())
                    .sum();
                let norm = norm_sq.sqrt();
                if norm > c {
                    c / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        match self.kind {
            OptimizerKind::PlainSgd => {
                for (p, g) in params.iter_mut().zip(grads) {
                    for (pv, gv) in p.iter_mut().zip(g.iter()) {
                        *pv -= self.lr * scale * gv;
                    }
                }
            }
            OptimizerKind::AdaptiveMoment => {
                self.t += 1;
                let bc1 = 1.0 - ADAM_BETA1.powi(self.t as i32);
                let bc2 = 1.0 - ADAM_BETA2.powi(self.t as i32);
                for ((p, g), (m, v)) in params
                    .iter_mut()
                    .zip(grads)
                    .zip(self.m.iter_mut().zip(self.v.iter_mut()))
                {
                    for i in 0..p.len() {
                        let gv = scale * g[i];
                        m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * gv;
                        v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * gv * gv;
                        let m_hat = m[i] / bc1;
                        let v_hat = v[i] / bc2;
                        p[i] -= self.lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
                    }
                }
            }
        }
    }
}

/// Optimizer state for every parameter group of a model.
#[derive(Debug, Clone)]
pub struct Optimizers {
    pub hc: Optimizer,
    pub adversaries: Vec<Optimizer>,
}

impl Optimizers {
    pub fn new(params: &ModelParams, cfg: &TrainingConfig) -> Optimizers {
        let hc = Optimizer::new(
            cfg.optimizer,
            cfg.learning_rate,
            &params.group_slices(ParamGroup::EncoderClassifier),
        );
        let adversaries = (0..params.n_adversaries())
            .map(|j| {
                Optimizer::new(
                    cfg.optimizer,
                    cfg.learning_rate,
                    &params.group_slices(ParamGroup::Adversary(j)),
                )
            })
            .collect();
        Optimizers { hc, adversaries }
    }
}

fn check_finite(loss: &BatchLoss, what: &str) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Numeric(format!(
            "non-finite loss during {what}: {loss:?}"
        )))
    }
}

/// One mini-batch step of the supervised objective: mean target CE,
/// gradients applied to encoder and classifier only.
pub fn pretrain_step(
    params: &mut ModelParams,
    opts: &mut Optimizers,
    batch: &[&EncodedExample],
    cfg: &TrainingConfig,
) -> Result<BatchLoss> {
    let (grads, loss) = backward(params, batch, &LossSpec::Pretrain)?;
    check_finite(&loss, "pre-training step")?;
    let gslices = grads.group_slices(ParamGroup::EncoderClassifier);
    opts.hc.step(
        &mut params.group_slices_mut(ParamGroup::EncoderClassifier),
        &gslices,
        cfg.grad_clip_norm,
    );
    Ok(loss)
}

/// One mini-batch step for the named adversary against the protected
/// labels; encoder and classifier stay untouched.
pub fn adversary_step(
    params: &mut ModelParams,
    opts: &mut Optimizers,
    batch: &[&EncodedExample],
    adversary_index: usize,
    cfg: &TrainingConfig,
) -> Result<BatchLoss> {
    if adversary_index >= params.n_adversaries() {
        return Err(Error::validation(format!(
            "adversary index {adversary_index} out of range"
        )));
    }
    let (grads, loss) = backward(params, batch, &LossSpec::AdversaryStep(adversary_index))?;
    check_finite(&loss, "adversary step")?;
    let group = ParamGroup::Adversary(adversary_index);
    let gslices = grads.group_slices(group);
    opts.adversaries[adversary_index].step(
        &mut params.group_slices_mut(group),
        &gslices,
        cfg.grad_clip_norm,
    );
    Ok(loss)
}

/// One mini-batch step of the demotion objective
/// alpha * CE + (1 - alpha) * mean uniform-target loss; gradients applied
/// to encoder and classifier only.
pub fn demotion_step(
    params: &mut ModelParams,
    opts: &mut Optimizers,
    batch: &[&EncodedExample],
    cfg: &TrainingConfig,
) -> Result<BatchLoss> {
    let (grads, loss) = backward(params, batch, &LossSpec::DemotionStep { alpha: cfg.alpha })?;
    check_finite(&loss, "demotion step")?;
    let gslices = grads.group_slices(ParamGroup::EncoderClassifier);
    opts.hc.step(
        &mut params.group_slices_mut(ParamGroup::EncoderClassifier),
        &gslices,
        cfg.grad_clip_norm,
    );
    Ok(loss)
}

/// Adversary update from cached encoder outputs: used inside adversary
/// phases, where the encoder is frozen and re-encoding every batch would be
/// wasted work. Updates every adversary on the batch; returns the mean CE.
fn adversary_step_cached(
    params: &mut ModelParams,
    opts: &mut Optimizers,
    h_batch: &Array2<f64>,
    golds: &[usize],
    cfg: &TrainingConfig,
) -> f64 {
    let k = params.n_adversaries();
    let mut ce_sum = 0.0;
    for j in 0..k {
        let trace = head_forward_batch(&params.adversaries[j], h_batch);
        ce_sum += batch_ce(&trace.p, golds);
        let dlogits = ce_dlogits(&trace.p, golds, 1.0);
        let mut grads = params.adversaries[j].zeros_like();
        head_backward_batch(
            &params.adversaries[j],
            &trace,
            h_batch,
            &dlogits,
            Some(&mut grads),
        );
        let gslices = grads.slices();
        opts.adversaries[j].step(
            &mut params.adversaries[j].slices_mut(),
            &gslices,
            cfg.grad_clip_norm,
        );
    }
    ce_sum / k as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    Pretrain,
    Adversary,
    Demotion,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tag = match self {
            Phase::Pretrain => "pretrain",
            Phase::Adversary => "adversary",
            Phase::Demotion => "demotion",
        };
        write!(f, "{tag}")
    }
}

/// One completed epoch: loss components, dev metrics, and the parameter
/// hashes that prove phase isolation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub phase: Phase,
    pub ce_target: Option<f64>,
    pub demotion_term: Option<f64>,
    pub adv_ce: Option<f64>,
    pub dev_acc: f64,
    pub dev_macro_f1: f64,
    /// (toxic class, group) -> dev FPR, ordered as the CSV columns.
    pub dev_fpr: Vec<((usize, usize), Option<f64>)>,
    pub adv_dev_acc: Option<f64>,
    pub hc_hash: String,
    pub adv_hashes: Vec<String>,
}

/// Per-epoch records of one training run, in epoch order.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainingLog {
    pub toxic_classes: Vec<usize>,
    pub k_z: usize,
    pub records: Vec<EpochRecord>,
}

impl TrainingLog {
    pub fn new(toxic_classes: Vec<usize>, k_z: usize) -> TrainingLog {
        TrainingLog {
            toxic_classes,
            k_z,
            records: Vec::new(),
        }
    }

    pub fn next_epoch(&self) -> usize {
        self.records.last().map(|r| r.epoch + 1).unwrap_or(1)
    }

    fn fpr_columns(&self) -> Vec<(usize, usize)> {
        let mut cols = Vec::new();
        for &c in &self.toxic_classes {
            for g in 0..self.k_z {
                cols.push((c, g));
            }
        }
        cols
    }

    pub fn csv_header(&self) -> String {
        let mut header =
            String::from("epoch,phase,ce_target,demotion_term,adv_ce,dev_acc,dev_macro_f1");
        for (c, g) in self.fpr_columns() {
            header.push_str(&format!(",dev_fpr_{c}_{g}"));
        }
        header.push_str(",adv_dev_acc");
        header
    }

    /// One row per epoch, columns fixed by [`TrainingLog::csv_header`];
    /// absent quantities stay empty. Floats print in shortest round-trip
    /// form, so identical runs give byte-identical files.
    pub fn to_csv(&self) -> String {
        let fmt_opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let mut out = self.csv_header();
        out.push('\n');
        for r in &self.records {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}",
                r.epoch,
                r.phase,
                fmt_opt(r.ce_target),
                fmt_opt(r.demotion_term),
                fmt_opt(r.adv_ce),
                r.dev_acc,
                r.dev_macro_f1
            ));
            for (col, val) in self.fpr_columns().iter().zip(&r.dev_fpr) {
                debug_assert_eq!(*col, val.0);
                out.push_str(&format!(",{}", fmt_opt(val.1)));
            }
            out.push_str(&format!(",{}\n", fmt_opt(r.adv_dev_acc)));
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn record(&self, epoch: usize) -> Option<&EpochRecord> {
        self.records.iter().find(|r| r.epoch == epoch)
    }
}

/// The checkpoint-selection scalar of one epoch record: mean dev FPR over
/// the toxic classes for the protected group (group 1). Undefined cells are
/// skipped; an epoch with no defined cell scores +inf.
pub fn selection_fpr(record: &EpochRecord) -> f64 {
    let vals: Vec<f64> = record
        .dev_fpr
        .iter()
        .filter(|((_, g), _)| *g == 1)
        .filter_map(|(_, v)| *v)
        .collect();
    if vals.is_empty() {
        f64::INFINITY
    } else {
        vals.iter().sum::<f64>() / vals.len() as f64
    }
}

#[derive(Clone, Copy)]
struct SelScore {
    fpr: f64,
    acc: f64,
}

fn sel_better(rule: CheckpointRule, cand: SelScore, best: SelScore) -> bool {
    match rule {
        CheckpointRule::LowestDevFpr => {
            cand.fpr < best.fpr || (cand.fpr == best.fpr && cand.acc > best.acc)
        }
        CheckpointRule::BestDevAccuracy => cand.acc > best.acc,
    }
}

fn epoch_record(
    epoch: usize,
    phase: Phase,
    loss: (Option<f64>, Option<f64>, Option<f64>),
    report: &AuditReport,
    params: &ModelParams,
) -> EpochRecord {
    EpochRecord {
        epoch,
        phase,
        ce_target: loss.0,
        demotion_term: loss.1,
        adv_ce: loss.2,
        dev_acc: report.accuracy,
        dev_macro_f1: report.macro_f1,
        dev_fpr: report
            .fpr
            .iter()
            .map(|e| ((e.class, e.group), e.value))
            .collect(),
        adv_dev_acc: report.adversary_dev_accuracy,
        hc_hash: params.group_hash(ParamGroup::EncoderClassifier),
        adv_hashes: (0..params.n_adversaries())
            .map(|j| params.group_hash(ParamGroup::Adversary(j)))
            .collect(),
    }
}

#[derive(Debug)]
pub struct PretrainOutcome {
    /// Checkpoint with the best dev accuracy: the starting point of the
    /// adversarial phase.
    pub best_acc: ModelParams,
    pub best_acc_epoch: usize,
    /// Checkpoint selected by the configured rule: the baseline model.
    pub by_rule: ModelParams,
    pub by_rule_epoch: usize,
    /// Parameters after the final epoch.
    pub final_params: ModelParams,
    pub steps: usize,
}

/// Phase one: mini-batch supervised training of encoder and classifier,
/// up to `pretrain_max_epochs` epochs with early stopping on dev accuracy.
/// Adversary parameters are never touched.
pub fn pretrain(
    init: &ModelParams,
    train: &[EncodedExample],
    dev: &[EncodedExample],
    cfg: &TrainingConfig,
    toxic_classes: &[usize],
    log: &mut TrainingLog,
) -> Result<PretrainOutcome> {
    cfg.validate()?;
    if train.is_empty() || dev.is_empty() {
        return Err(Error::validation("train and dev sets must be non-empty"));
    }
    let mut params = init.clone();
    let mut opts = Optimizers::new(&params, cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "pretrain"));

    let mut best_acc: Option<(f64, usize, ModelParams)> = None;
    let mut by_rule: Option<(SelScore, usize, ModelParams)> = None;
    let mut epochs_since_improvement = 0usize;
    let mut steps = 0usize;

    for _ in 0..cfg.pretrain_max_epochs {
        let epoch = log.next_epoch();
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng);
        let mut ce_sum = 0.0;
        let mut n_batches = 0usize;
        for batch_idx in order.chunks(cfg.batch_size) {
            let batch: Vec<&EncodedExample> = batch_idx.iter().map(|&i| &train[i]).collect();
            let loss = pretrain_step(&mut params, &mut opts, &batch, cfg)
                .map_err(|e| Error::Numeric(format!("pretrain epoch {epoch}: {e}")))?;
            ce_sum += loss.target_ce.unwrap();
            n_batches += 1;
            steps += 1;
        }
        let report = audit(&params, dev, toxic_classes, "dev", false)?;
        let record = epoch_record(
            epoch,
            Phase::Pretrain,
            (Some(ce_sum / n_batches as f64), None, None),
            &report,
            &params,
        );
        let score = SelScore {
            fpr: selection_fpr(&record),
            acc: report.accuracy,
        };
        log.records.push(record);

        if best_acc
            .as_ref()
            .map(|(a, _, _)| report.accuracy > *a)
            .unwrap_or(true)
        {
            best_acc = Some((report.accuracy, epoch, params.clone()));
            epochs_since_improvement = 0;
        } else {
            epochs_since_improvement += 1;
        }
        if by_rule
            .as_ref()
            .map(|(b, _, _)| sel_better(cfg.checkpoint_rule, score, *b))
            .unwrap_or(true)
        {
            by_rule = Some((score, epoch, params.clone()));
        }
        if epochs_since_improvement >= cfg.pretrain_patience {
            break;
        }
    }
    let (_, best_acc_epoch, best_acc) = best_acc.unwrap();
    let (_, by_rule_epoch, by_rule) = by_rule.unwrap();
    Ok(PretrainOutcome {
        best_acc,
        best_acc_epoch,
        by_rule,
        by_rule_epoch,
        final_params: params,
        steps,
    })
}

#[derive(Debug)]
pub struct AlternateOutcome {
    /// Parameters after the last round, including the final adversaries.
    pub final_params: ModelParams,
    /// Checkpoint selected by the configured rule over the alternation
    /// epochs.
    pub selected: ModelParams,
    pub selected_epoch: usize,
    pub steps: usize,
}

/// Phase two: for each round, `epochs_per_phase_per_round` epochs of
/// adversary training on the frozen encoder, then the same number of
/// epochs of demotion updates to encoder and classifier. Dev metrics are
/// logged after every epoch; the returned checkpoint is chosen by
/// `cfg.checkpoint_rule` over these epochs.
pub fn alternate(
    start: &ModelParams,
    train: &[EncodedExample],
    dev: &[EncodedExample],
    cfg: &TrainingConfig,
    toxic_classes: &[usize],
    log: &mut TrainingLog,
) -> Result<AlternateOutcome> {
    cfg.validate()?;
    if train.is_empty() || dev.is_empty() {
        return Err(Error::validation("train and dev sets must be non-empty"));
    }
    let mut params = start.clone();
    let mut opts = Optimizers::new(&params, cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "alternate"));
    let mut selected: Option<(SelScore, usize, ModelParams)> = None;
    let mut steps = 0usize;

    let train_golds: Vec<usize> = train.iter().map(|ex| ex.protected).collect();

    for _round in 0..cfg.rounds {
        // adversary phase: encoder frozen, so encode once per phase
        let train_cache = encode_cache(&params, train)?;
        let dev_cache = encode_cache(&params, dev)?;
        for _ in 0..cfg.epochs_per_phase_per_round {
            let epoch = log.next_epoch();
            let mut order: Vec<usize> = (0..train.len()).collect();
            order.shuffle(&mut rng);
            let mut ce_sum = 0.0;
            let mut n_batches = 0usize;
            for batch_idx in order.chunks(cfg.batch_size) {
                let h_batch = gather_columns(&train_cache, batch_idx);
                let golds: Vec<usize> = batch_idx.iter().map(|&i| train_golds[i]).collect();
                let ce = adversary_step_cached(&mut params, &mut opts, &h_batch, &golds, cfg);
                if !ce.is_finite() {
                    return Err(Error::Numeric(format!(
                        "non-finite adversary loss at epoch {epoch}"
                    )));
                }
                ce_sum += ce;
                n_batches += 1;
                steps += 1;
            }
            let report = audit_cached(&params, &dev_cache, dev, toxic_classes, "dev", true)?;
            let record = epoch_record(
                epoch,
                Phase::Adversary,
                (None, None, Some(ce_sum / n_batches as f64)),
                &report,
                &params,
            );
            let score = SelScore {
                fpr: selection_fpr(&record),
                acc: report.accuracy,
            };
            log.records.push(record);
            if selected
                .as_ref()
                .map(|(b, _, _)| sel_better(cfg.checkpoint_rule, score, *b))
                .unwrap_or(true)
            {
                selected = Some((score, epoch, params.clone()));
            }
        }

        // demotion phase: adversaries frozen
        for _ in 0..cfg.epochs_per_phase_per_round {
            let epoch = log.next_epoch();
            let mut order: Vec<usize> = (0..train.len()).collect();
            order.shuffle(&mut rng);
            let mut ce_sum = 0.0;
            let mut ut_sum = 0.0;
            let mut n_batches = 0usize;
            for batch_idx in order.chunks(cfg.batch_size) {
                let batch: Vec<&EncodedExample> = batch_idx.iter().map(|&i| &train[i]).collect();
                let loss = demotion_step(&mut params, &mut opts, &batch, cfg)
                    .map_err(|e| Error::Numeric(format!("demotion epoch {epoch}: {e}")))?;
                ce_sum += loss.target_ce.unwrap();
                ut_sum += loss.demotion_term.unwrap();
                n_batches += 1;
                steps += 1;
            }
            let report = audit(&params, dev, toxic_classes, "dev", true)?;
            let record = epoch_record(
                epoch,
                Phase::Demotion,
                (
                    Some(ce_sum / n_batches as f64),
                    Some(ut_sum / n_batches as f64),
                    None,
                ),
                &report,
                &params,
            );
            let score = SelScore {
                fpr: selection_fpr(&record),
                acc: report.accuracy,
            };
            log.records.push(record);
            if selected
                .as_ref()
                .map(|(b, _, _)| sel_better(cfg.checkpoint_rule, score, *b))
                .unwrap_or(true)
            {
                selected = Some((score, epoch, params.clone()));
            }
        }
    }
    let (_, selected_epoch, selected) = selected.unwrap();
    Ok(AlternateOutcome {
        final_params: params,
        selected,
        selected_epoch,
        steps,
    })
}

/// Gathers cache columns (chunked as EVAL_CHUNK) into one batch matrix.
fn gather_columns(cache: &[Array2<f64>], indices: &[usize]) -> Array2<f64> {
    let d = cache[0].nrows();
    let mut out = Array2::zeros((d, indices.len()));
    for (col, &i) in indices.iter().enumerate() {
        out.column_mut(col)
            .assign(&cache[i / EVAL_CHUNK].column(i % EVAL_CHUNK));
    }
    out
}

/// Trains the adversaries on a frozen encoder for a number of epochs and
/// returns their mean dev accuracy. This is the leakage measurement: how
/// much protected information a freshly fitted adversary can still read
/// out of the representations.
pub fn fit_adversary(
    params: &mut ModelParams,
    train: &[EncodedExample],
    dev: &[EncodedExample],
    cfg: &TrainingConfig,
    epochs: usize,
) -> Result<f64> {
    let mut opts = Optimizers::new(params, cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "fit-adversary"));
    let train_cache = encode_cache(params, train)?;
    let dev_cache = encode_cache(params, dev)?;
    let golds: Vec<usize> = train.iter().map(|ex| ex.protected).collect();
    for _ in 0..epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng);
        for batch_idx in order.chunks(cfg.batch_size) {
            let h_batch = gather_columns(&train_cache, batch_idx);
            let batch_golds: Vec<usize> = batch_idx.iter().map(|&i| golds[i]).collect();
            adversary_step_cached(params, &mut opts, &h_batch, &batch_golds, cfg);
        }
    }
    Ok(crate::metrics::adversary_leakage_cached(params, &dev_cache, dev).mean)
}

/// Everything the data and model side of an experiment needs beyond the
/// training schedule itself.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobConfig {
    pub training: TrainingConfig,
    pub d_emb: usize,
    pub d_h: usize,
    pub d_mlp: usize,
    pub k_y: usize,
    pub k_z: usize,
    pub toxic_classes: Vec<usize>,
    pub min_freq: usize,
    pub max_len: usize,
    pub posterior_threshold: f64,
}

impl Default for JobConfig {
    fn default() -> Self {
        JobConfig {
            training: TrainingConfig::default(),
            d_emb: 64,
            d_h: 64,
            d_mlp: 64,
            k_y: 2,
            k_z: 2,
            toxic_classes: vec![1],
            min_freq: 2,
            max_len: 64,
            posterior_threshold: 0.8,
        }
    }
}

impl JobConfig {
    pub fn validate(&self) -> Result<()> {
        self.training.validate()?;
        if self.toxic_classes.is_empty() {
            return Err(Error::validation("toxic_classes must be non-empty"));
        }
        for &c in &self.toxic_classes {
            if c == 0 || c >= self.k_y {
                return Err(Error::validation(format!("toxic class {c} out of range")));
            }
        }
        if self.min_freq == 0 || self.max_len == 0 {
            return Err(Error::validation("min_freq and max_len must be >= 1"));
        }
        if !(0.0..=1.0).contains(&self.posterior_threshold) {
            return Err(Error::validation("posterior_threshold must be in [0,1]"));
        }
        ModelDims {
            vocab_size: 2, // placeholder; real size known only after vocab build
            d_emb: self.d_emb,
            d_h: self.d_h,
            d_mlp: self.d_mlp,
            k_y: self.k_y,
            k_z: self.k_z,
        }
        .validate()
    }

    pub fn dims(&self, vocab_size: usize) -> ModelDims {
        ModelDims {
            vocab_size,
            d_emb: self.d_emb,
            d_h: self.d_h,
            d_mlp: self.d_mlp,
            k_y: self.k_y,
            k_z: self.k_z,
        }
    }
}

/// A trained model with its log and the epoch its checkpoint came from.
pub struct TrainedModel {
    pub params: ModelParams,
    pub selected_epoch: usize,
    pub log: TrainingLog,
}

pub struct ExperimentOutcome {
    pub vocab: Vocabulary,
    pub baseline: TrainedModel,
    pub demoted: TrainedModel,
    /// Test-set audits; the baseline has no trained adversary, so its
    /// report carries no leakage number.
    pub baseline_report: AuditReport,
    pub demoted_report: AuditReport,
    /// Content hash of the test split both models saw.
    pub test_hash: String,
}

/// Trains the baseline (pre-training only, checkpoint by the configured
/// rule) and the demoted model (the full two-phase procedure) on identical
/// data and seeds, then audits both on the same test split.
///
/// The two models share the pre-training trajectory: with identical seeds
/// the baseline's pre-training would replay the demoted model's exactly.
pub fn run_experiment(
    train_ds: &Dataset,
    dev_ds: &Dataset,
    test_ds: &Dataset,
    job: &JobConfig,
) -> Result<ExperimentOutcome> {
    job.validate()?;
    let cfg = &job.training;
    let vocab = Vocabulary::build(train_ds, job.min_freq)?;
    let train = encode_dataset(train_ds, &vocab, job.max_len);
    let dev = encode_dataset(dev_ds, &vocab, job.max_len);
    let test = encode_dataset(test_ds, &vocab, job.max_len);

    let dims = job.dims(vocab.len());
    let init = init_params(&dims, cfg.n_adversaries, derive_seed(cfg.seed, "init"))?;

    let mut pre_log = TrainingLog::new(job.toxic_classes.clone(), job.k_z);
    let pre = pretrain(&init, &train, &dev, cfg, &job.toxic_classes, &mut pre_log)?;

    let baseline = TrainedModel {
        params: pre.by_rule,
        selected_epoch: pre.by_rule_epoch,
        log: pre_log.clone(),
    };

    let mut demoted_log = pre_log;
    let alt = alternate(
        &pre.best_acc,
        &train,
        &dev,
        cfg,
        &job.toxic_classes,
        &mut demoted_log,
    )?;
    let demoted = TrainedModel {
        params: alt.selected,
        selected_epoch: alt.selected_epoch,
        log: demoted_log,
    };

    let baseline_report =
        audit(&baseline.params, &test, &job.toxic_classes, &test_ds.name, false)?;
    let demoted_report = audit(&demoted.params, &test, &job.toxic_classes, &test_ds.name, true)?;

    Ok(ExperimentOutcome {
        vocab,
        baseline,
        demoted,
        baseline_report,
        demoted_report,
        test_hash: test_ds.content_hash(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SyntheticSpec};
    use crate::model::objective;

    fn small_job(seed: u64) -> JobConfig {
        JobConfig {
            training: TrainingConfig {
                seed,
                ..Default::default()
            },
            d_emb: 16,
            d_h: 16,
            d_mlp: 16,
            ..Default::default()
        }
    }

    struct Fixture {
        vocab: Vocabulary,
        train: Vec<EncodedExample>,
        dev: Vec<EncodedExample>,
        job: JobConfig,
        init: ModelParams,
    }

    fn fixture(n: usize, marker_noise: f64, seed: u64) -> Fixture {
        let spec = SyntheticSpec {
            n_examples: n,
            marker_noise,
            seed,
            ..Default::default()
        };
        let ds = generate_synthetic(&spec).unwrap();
        let dev_ds = generate_synthetic(&SyntheticSpec {
            n_examples: n / 4,
            seed: seed + 1,
            ..spec
        })
        .unwrap();
        let job = small_job(seed);
        let vocab = Vocabulary::build(&ds, job.min_freq).unwrap();
        let train = encode_dataset(&ds, &vocab, job.max_len);
        let dev = encode_dataset(&dev_ds, &vocab, job.max_len);
        let dims = job.dims(vocab.len());
        let init = init_params(&dims, job.training.n_adversaries, seed).unwrap();
        Fixture {
            vocab,
            train,
            dev,
            job,
            init,
        }
    }

    #[test]
    fn pretrain_learns_separable_data_quickly() {
        let f = fixture(2400, 0.0, 3);
        let mut cfg = f.job.training.clone();
        cfg.pretrain_max_epochs = 5;
        let mut log = TrainingLog::new(f.job.toxic_classes.clone(), f.job.k_z);
        let out =
            pretrain(&f.init, &f.train, &f.dev, &cfg, &f.job.toxic_classes, &mut log).unwrap();
        let best = log
            .records
            .iter()
            .map(|r| r.dev_acc)
            .fold(f64::NEG_INFINITY, f64::max);
        assert!(best >= 0.99, "dev accuracy only reached {best}");
        assert!(out.steps >= log.records.len());
    }

    #[test]
    fn pretrain_never_touches_adversaries() {
        let f = fixture(300, 0.0, 4);
        let mut cfg = f.job.training.clone();
        cfg.pretrain_max_epochs = 2;
        let adv_before = f.init.group_hash(ParamGroup::Adversary(0));
        let mut log = TrainingLog::new(f.job.toxic_classes.clone(), f.job.k_z);
        let out =
            pretrain(&f.init, &f.train, &f.dev, &cfg, &f.job.toxic_classes, &mut log).unwrap();
        assert_eq!(out.final_params.group_hash(ParamGroup::Adversary(0)), adv_before);
        assert_eq!(out.best_acc.group_hash(ParamGroup::Adversary(0)), adv_before);
    }

    #[test]
    fn pretrain_loss_decreases_on_first_epochs() {
        for seed in [5, 6, 7] {
            let f = fixture(400, 0.0, seed);
            let mut cfg = f.job.training.clone();
            cfg.pretrain_max_epochs = 2;
            let mut log = TrainingLog::new(f.job.toxic_classes.clone(), f.job.k_z);
            pretrain(&f.init, &f.train, &f.dev, &cfg, &f.job.toxic_classes, &mut log).unwrap();
            let ce: Vec<f64> = log.records.iter().map(|r| r.ce_target.unwrap()).collect();
            assert!(ce[1] < ce[0], "seed {seed}: epoch CE went {} -> {}", ce[0], ce[1]);
        }
    }

    #[test]
    fn adversary_step_freezes_encoder_and_classifier() {
        let f = fixture(200, 0.0, 8);
        let mut params = f.init.clone();
        let mut opts = Optimizers::new(&params, &f.job.training);
        let hc_before = params.group_hash(ParamGroup::EncoderClassifier);
        let batch: Vec<&EncodedExample> = f.train.iter().take(16).collect();
        let loss = adversary_step(&mut params, &mut opts, &batch, 0, &f.job.training).unwrap();
        assert!(loss.adversary_ce.unwrap().is_finite());
        assert_eq!(params.group_hash(ParamGroup::EncoderClassifier), hc_before);
        assert!(adversary_step(&mut params, &mut opts, &batch, 5, &f.job.training).is_err());
    }

    #[test]
    fn adversary_fitting_recovers_leakage_after_pretraining() {
        // strong confound (q1 - q0 = 0.8): after supervised pre-training the
        // representations still carry the protected attribute
        let f = fixture(2000, 0.3, 9);
        let mut cfg = f.job.training.clone();
        cfg.pretrain_max_epochs = 4;
        cfg.pretrain_patience = 4;
        let mut log = TrainingLog::new(f.job.toxic_classes.clone(), f.job.k_z);
        let out =
            pretrain(&f.init, &f.train, &f.dev, &cfg, &f.job.toxic_classes, &mut log).unwrap();
        let mut params = out.best_acc;
        let leakage = fit_adversary(&mut params, &f.train, &f.dev, &cfg, 2).unwrap();
        assert!(leakage >= 0.75, "adversary only reached {leakage}");
    }

    #[test]
    fn adversary_loss_decreases_on_frozen_encoder() {
        let f = fixture(800, 0.0, 10);
        let mut params = f.init.clone();
        let mut opts = Optimizers::new(&params, &f.job.training);
        let cache = encode_cache(&params, &f.train).unwrap();
        let golds: Vec<usize> = f.train.iter().map(|e| e.protected).collect();
        let all: Vec<usize> = (0..f.train.len()).collect();
        let mut first = None;
        let mut last = 0.0;
        for batch_idx in all.chunks(f.job.training.batch_size) {
            let h = gather_columns(&cache, batch_idx);
            let g: Vec<usize> = batch_idx.iter().map(|&i| golds[i]).collect();
            last = adversary_step_cached(&mut params, &mut opts, &h, &g, &f.job.training);
            first.get_or_insert(last);
        }
        assert!(last < first.unwrap(), "adversary CE {} -> {last}", first.unwrap());
    }

    #[test]
    fn demotion_step_freezes_adversaries() {
        let f = fixture(200, 0.0, 11);
        let mut params = f.init.clone();
        let mut opts = Optimizers::new(&params, &f.job.training);
        let adv_before = params.group_hash(ParamGroup::Adversary(0));
        let batch: Vec<&EncodedExample> = f.train.iter().take(16).collect();
        let loss = demotion_step(&mut params, &mut opts, &batch, &f.job.training).unwrap();
        assert_eq!(params.group_hash(ParamGroup::Adversary(0)), adv_before);
        // the demotion term never goes below ln K_z
        assert!(loss.demotion_term.unwrap() >= (f.job.k_z as f64).ln() - 1e-12);
    }

    #[test]
    fn alpha_one_demotion_step_is_bitwise_a_pretrain_step() {
        let f = fixture(200, 0.0, 12);
        let batch: Vec<&EncodedExample> = f.train.iter().take(32).collect();

        let mut cfg = f.job.training.clone();
        cfg.alpha = 1.0;

        let mut p_pre = f.init.clone();
        let mut o_pre = Optimizers::new(&p_pre, &cfg);
        pretrain_step(&mut p_pre, &mut o_pre, &batch, &cfg).unwrap();

        let mut p_dem = f.init.clone();
        let mut o_dem = Optimizers::new(&p_dem, &cfg);
        demotion_step(&mut p_dem, &mut o_dem, &batch, &cfg).unwrap();

        assert_eq!(p_pre.content_hash(), p_dem.content_hash());

        // the objective itself is the same arithmetic identity
        let a = objective(&f.init, &batch, &LossSpec::Pretrain).unwrap();
        let b = objective(&f.init, &batch, &LossSpec::DemotionStep { alpha: 1.0 }).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn alternate_schedule_and_phase_isolation() {
        let f = fixture(320, 0.3, 13);
        let mut cfg = f.job.training.clone();
        cfg.rounds = 2;
        cfg.pretrain_max_epochs = 2;
        let mut log = TrainingLog::new(f.job.toxic_classes.clone(), f.job.k_z);
        let pre =
            pretrain(&f.init, &f.train, &f.dev, &cfg, &f.job.toxic_classes, &mut log).unwrap();
        let pre_epochs = log.records.len();
        let alt = alternate(&pre.best_acc, &f.train, &f.dev, &cfg, &f.job.toxic_classes, &mut log)
            .unwrap();

        // 2 rounds x (2 adversary + 2 demotion) epochs
        let alt_records = &log.records[pre_epochs..];
        assert_eq!(alt_records.len(), 8);
        let phases: Vec<Phase> = alt_records.iter().map(|r| r.phase).collect();
        assert_eq!(
            phases,
            vec![
                Phase::Adversary,
                Phase::Adversary,
                Phase::Demotion,
                Phase::Demotion,
                Phase::Adversary,
                Phase::Adversary,
                Phase::Demotion,
                Phase::Demotion
            ]
        );

        // steps per round = 2 * epochs_per_phase * ceil(N / batch)
        let per_epoch = f.train.len().div_ceil(cfg.batch_size);
        assert_eq!(alt.steps, cfg.rounds * 2 * cfg.epochs_per_phase_per_round * per_epoch);

        // phase isolation between consecutive epochs
        let start_hc = pre.best_acc.group_hash(ParamGroup::EncoderClassifier);
        let start_adv = pre.best_acc.group_hash(ParamGroup::Adversary(0));
        let mut prev_hc = start_hc;
        let mut prev_adv = start_adv;
        for r in alt_records {
            match r.phase {
                Phase::Adversary => {
                    assert_eq!(r.hc_hash, prev_hc, "H/C moved during an adversary epoch");
                    assert_ne!(r.adv_hashes[0], prev_adv);
                }
                Phase::Demotion => {
                    assert_eq!(r.adv_hashes[0], prev_adv, "D moved during a demotion epoch");
                    assert_ne!(r.hc_hash, prev_hc);
                }
                Phase::Pretrain => unreachable!(),
            }
            prev_hc = r.hc_hash.clone();
            prev_adv = r.adv_hashes[0].clone();
        }

        // selection contract: the selected epoch's FPR is the minimum
        let selected = log.record(alt.selected_epoch).unwrap();
        let min_fpr = alt_records
            .iter()
            .map(selection_fpr)
            .fold(f64::INFINITY, f64::min);
        assert_eq!(selection_fpr(selected), min_fpr);

        // demotion floor in the logs
        for r in alt_records {
            if let Some(d) = r.demotion_term {
                assert!(d >= (f.job.k_z as f64).ln() - 1e-12);
            }
        }
    }

    #[test]
    fn training_is_deterministic() {
        let run = || {
            let f = fixture(240, 0.3, 14);
            let mut cfg = f.job.training.clone();
            cfg.rounds = 1;
            cfg.pretrain_max_epochs = 2;
            let mut log = TrainingLog::new(f.job.toxic_classes.clone(), f.job.k_z);
            let pre =
                pretrain(&f.init, &f.train, &f.dev, &cfg, &f.job.toxic_classes, &mut log).unwrap();
            let alt =
                alternate(&pre.best_acc, &f.train, &f.dev, &cfg, &f.job.toxic_classes, &mut log)
                    .unwrap();
            (log.to_csv(), alt.selected.content_hash(), f.vocab.hash())
        };
        let a = run();
        let b = run();
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
        assert_eq!(a.2, b.2);
    }

    #[test]
    fn run_experiment_produces_comparable_reports() {
        let spec = SyntheticSpec {
            n_examples: 400,
            marker_noise: 0.3,
            seed: 21,
            ..Default::default()
        };
        let train = generate_synthetic(&spec).unwrap();
        let dev = generate_synthetic(&SyntheticSpec {
            n_examples: 120,
            seed: 22,
            ..spec.clone()
        })
        .unwrap();
        let test = generate_synthetic(&SyntheticSpec {
            n_examples: 120,
            q1: 0.5,
            q0: 0.5,
            seed: 23,
            ..spec
        })
        .unwrap();
        let mut job = small_job(24);
        job.training.rounds = 1;
        job.training.pretrain_max_epochs = 2;
        let out = run_experiment(&train, &dev, &test, &job).unwrap();

        // baseline log has no demotion entries at all
        assert!(out
            .baseline
            .log
            .records
            .iter()
            .all(|r| r.phase == Phase::Pretrain && r.demotion_term.is_none()));
        // both models audited on the identical test split
        assert_eq!(out.test_hash, test.content_hash());
        assert_eq!(out.baseline_report.n_examples, test.len());
        assert_eq!(out.demoted_report.n_examples, test.len());
        assert!(out.baseline_report.adversary_dev_accuracy.is_none());
        assert!(out.demoted_report.adversary_dev_accuracy.is_some());
        // demoted log = pretrain records + 1 round x 4 epochs
        assert_eq!(
            out.demoted.log.records.len(),
            out.baseline.log.records.len() + 4
        );
    }

    #[test]
    fn non_finite_loss_aborts_with_numeric_error() {
        // the clamped losses keep ordinary training finite even under
        // absurd learning rates, so the guard is exercised by injecting a
        // poisoned parameter directly
        let f = fixture(100, 0.0, 15);
        let mut params = f.init.clone();
        params.encoder.attn_v[0] = f64::NAN;
        let mut opts = Optimizers::new(&params, &f.job.training);
        let batch: Vec<&EncodedExample> = f.train.iter().take(8).collect();
        let err = pretrain_step(&mut params, &mut opts, &batch, &f.job.training).unwrap_err();
        assert!(matches!(err, Error::Numeric(_)), "got {err:?}");
        assert_eq!(err.exit_code(), 3);

        // the training loop reports the epoch in its diagnostic
        let mut log = TrainingLog::new(f.job.toxic_classes.clone(), f.job.k_z);
        let err = pretrain(&params, &f.train, &f.dev, &f.job.training, &f.job.toxic_classes, &mut log)
            .unwrap_err();
        assert!(err.to_string().contains("epoch 1"), "got {err}");
    }

    #[test]
    fn csv_has_documented_columns() {
        let log = TrainingLog::new(vec![1], 2);
        assert_eq!(
            log.csv_header(),
            "epoch,phase,ce_target,demotion_term,adv_ce,dev_acc,dev_macro_f1,dev_fpr_1_0,dev_fpr_1_1,adv_dev_acc"
        );
    }

    #[test]
    fn config_validation() {
        let cfg = TrainingConfig {
            alpha: 0.0,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
        let cfg = TrainingConfig {
            alpha: 1.0,
            ..Default::default()
        };
        assert!(cfg.validate().is_ok());
        let cfg = TrainingConfig {
            n_adversaries: 0,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
        assert!(OptimizerKind::parse("adaptive-moment").is_ok());
        assert!(OptimizerKind::parse("sgd").is_err());
        assert!(CheckpointRule::parse("lowest-dev-fpr").is_ok());
    }
}
