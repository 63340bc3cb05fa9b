//! Training: simultaneous reference/target batch feeding against the
//! composite loss `l = l_D + λ·l_C`, plain SGD with weight decay on the
//! trainable suffix, a fixed iteration budget, and per-iteration loss
//! logging.
//!
//! Two step variants exist. The two-branch step runs both batches through
//! the shared parameters and backpropagates the joint composite loss
//! once. The memory-efficient step runs two sequential passes on the
//! single core network, recording gradients per pass, and applies one
//! update from their weighted combination — with `match-joint` weighting
//! (`∇l_D + λ·∇l_C`) it follows the two-branch trajectory exactly; the
//! `paper-average` weighting `(1−λ)·∇l_D + λ·∇l_C` is also available.

use crate::data::{BatchStream, Dataset};
use crate::error::{Error, Result};
use crate::losses::{composite, compactness_loss, cross_entropy_loss, LossBundle};
use crate::model::Model;
use crate::tensor::{no_grad, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    TwoBranch,
    MemoryEfficient,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MemeffWeighting {
    /// `∇l_D + λ·∇l_C`: identical trajectory to the two-branch step.
    MatchJoint,
    /// `(1−λ)·∇l_D + λ·∇l_C`: the scaled-average reading.
    PaperAverage,
}

/// Where the compactness loss taps the target branch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CompactnessTap {
    /// The template feature at the end of `g_l` (default).
    Feature,
    /// The head logits.
    Logits,
}

/// What drives the update.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objective {
    /// The composite loss of both branches (default).
    Composite,
    /// Compactness only — equivalent to removing the reference branch.
    /// This is the trivial-solution regime: with nothing preserving
    /// descriptiveness, the learned filters drift toward constants.
    CompactnessOnly,
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub lambda: f64,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub iterations: usize,
    pub batch_size_target: usize,
    pub batch_size_reference: usize,
    pub seed: u64,
    pub variant: Variant,
    pub memeff_weighting: MemeffWeighting,
    pub compactness_tap: CompactnessTap,
    pub objective: Objective,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda: 0.1,
            learning_rate: 5e-5,
            weight_decay: 5e-4,
            iterations: 700,
            batch_size_target: 32,
            batch_size_reference: 32,
            seed: 0,
            variant: Variant::TwoBranch,
            memeff_weighting: MemeffWeighting::MatchJoint,
            compactness_tap: CompactnessTap::Feature,
            objective: Objective::Composite,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Invalid(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            // zero is allowed so a step can be probed as a pure evaluation
            return Err(Error::Invalid("learning rate must be >= 0".into()));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Invalid("weight decay must be >= 0".into()));
        }
        if self.batch_size_target < 2 {
            return Err(Error::Invalid(
                "target batches need n >= 2 (compactness is undefined for one row)".into(),
            ));
        }
        if self.batch_size_reference < 1 {
            return Err(Error::Invalid("reference batch size must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterationRecord {
    pub iteration: usize,
    /// Epoch index of the target stream (epochs follow the target dataset size).
    pub epoch: usize,
    pub l_d: f64,
    pub l_c: f64,
    pub l: f64,
}

#[derive(Debug, Clone, Default)]
pub struct TrainLog {
    pub records: Vec<IterationRecord>,
    pub lambda: f64,
}

impl TrainLog {
    /// CSV export: `# `-prefixed config echo and epoch markers, then one
    /// `iteration,l_D,l_C,l` row per iteration.
    pub fn to_csv(&self, config_echo: &str) -> String {
        let mut out = String::new();
        for line in config_echo.lines() {
            out.push_str("# ");
            out.push_str(line);
            out.push('\n');
        }
        out.push_str("iteration,l_D,l_C,l\n");
        let mut last_epoch = None;
        for r in &self.records {
            if last_epoch != Some(r.epoch) {
                out.push_str(&format!("# epoch {} starts at iteration {}\n", r.epoch, r.iteration));
                last_epoch = Some(r.epoch);
            }
            out.push_str(&format!("{},{},{},{}\n", r.iteration, r.l_d, r.l_c, r.l));
        }
        out
    }

    /// Trailing moving average of the composite loss; entry `i` averages
    /// the window ending at record `i`, defined once `window` records exist.
    pub fn moving_average(&self, window: usize) -> Vec<f64> {
        if window == 0 || self.records.len() < window {
            return Vec::new();
        }
        let l: Vec<f64> = self.records.iter().map(|r| r.l).collect();
        let mut out = Vec::with_capacity(l.len() - window + 1);
        for i in window..=l.len() {
            out.push(l[i - window..i].iter().sum::<f64>() / window as f64);
        }
        out
    }
}

/// One SGD update with weight decay over the given parameters:
/// `p ← p − lr·(∇p + wd·p)`. Parameters without gradients still decay.
fn sgd_update(model: &mut Model, names: &[String], lr: f64, wd: f64) -> Result<()> {
    for name in names {
        let param = model
            .param(name)
            .ok_or_else(|| Error::Invalid(format!("unknown parameter {name}")))?;
        let grad = param.grad();
        let data = param.data();
        let updated: Vec<f64> = match &grad {
            Some(g) => data
                .iter()
                .zip(g)
                .map(|(&p, &g)| p - lr * (g + wd * p))
                .collect(),
            None => data.iter().map(|&p| p - lr * wd * p).collect(),
        };
        if !updated.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite(format!("sgd update of {name}")));
        }
        let shape = param.shape().to_vec();
        model.set_param(name, Tensor::tracked(updated, &shape)?)?;
    }
    Ok(())
}

fn target_loss_tensor(model: &Model, tgt: &Tensor, tap: CompactnessTap) -> Result<Tensor> {
    let tapped = match tap {
        CompactnessTap::Feature => model.forward_features(tgt)?,
        CompactnessTap::Logits => model.forward_logits(tgt)?,
    };
    compactness_loss(&tapped)
}

/// One two-branch step: joint forward of both batches, one backward of
/// the composite loss, one SGD update of the trainable parameters.
pub fn train_step(
    model: &mut Model,
    ref_batch: (&Tensor, &[usize]),
    tgt_batch: &Tensor,
    cfg: &TrainConfig,
) -> Result<LossBundle> {
    cfg.validate()?;
    let names = model.trainable_param_names();
    let bundle = match cfg.objective {
        Objective::CompactnessOnly => {
            let comp = target_loss_tensor(model, tgt_batch, cfg.compactness_tap)?;
            comp.backward()?;
            // reference loss is reported for the log but plays no part
            let l_d = no_grad(|| -> Result<f64> {
                let logits = model.forward_logits(ref_batch.0)?;
                cross_entropy_loss(&logits, ref_batch.1)?.item()
            })?;
            composite(l_d, comp.item()?, cfg.lambda)?
        }
        Objective::Composite => {
            let ce = cross_entropy_loss(&model.forward_logits(ref_batch.0)?, ref_batch.1)?;
            if cfg.lambda == 0.0 {
                // degenerate composite: a plain cross-entropy step
                ce.backward()?;
                let l_c = no_grad(|| {
                    target_loss_tensor(model, tgt_batch, cfg.compactness_tap)?.item()
                })?;
                composite(ce.item()?, l_c, 0.0)?
            } else {
                let comp = target_loss_tensor(model, tgt_batch, cfg.compactness_tap)?;
                let loss = ce.add(&comp.scale(cfg.lambda)?)?;
                loss.backward()?;
                composite(ce.item()?, comp.item()?, cfg.lambda)?
            }
        }
    };
    sgd_update(model, &names, cfg.learning_rate, cfg.weight_decay)?;
    model.zero_grads();
    Ok(bundle)
}

/// Memory-efficient step: two sequential passes on the single core
/// network accumulate their gradients, then one update applies the
/// weighted combination selected by `cfg.memeff_weighting`.
pub fn train_step_memeff(
    model: &mut Model,
    ref_batch: (&Tensor, &[usize]),
    tgt_batch: &Tensor,
    cfg: &TrainConfig,
) -> Result<LossBundle> {
    cfg.validate()?;
    if cfg.objective == Objective::CompactnessOnly {
        // only one branch exists; the variants coincide
        return train_step(model, ref_batch, tgt_batch, cfg);
    }
    let names = model.trainable_param_names();
    let ce_weight = match cfg.memeff_weighting {
        MemeffWeighting::MatchJoint => 1.0,
        MemeffWeighting::PaperAverage => 1.0 - cfg.lambda,
    };

    // reference pass
    let l_d = if ce_weight == 0.0 {
        no_grad(|| -> Result<f64> {
            let logits = model.forward_logits(ref_batch.0)?;
            cross_entropy_loss(&logits, ref_batch.1)?.item()
        })?
    } else {
        let ce = cross_entropy_loss(&model.forward_logits(ref_batch.0)?, ref_batch.1)?;
        if ce_weight == 1.0 {
            ce.backward()?;
        } else {
            ce.scale(ce_weight)?.backward()?;
        }
        ce.item()?
    };

    // target pass, gradients accumulating on the shared parameters
    let l_c = if cfg.lambda == 0.0 {
        no_grad(|| target_loss_tensor(model, tgt_batch, cfg.compactness_tap)?.item())?
    } else {
        let comp = target_loss_tensor(model, tgt_batch, cfg.compactness_tap)?;
        comp.scale(cfg.lambda)?.backward()?;
        comp.item()?
    };

    sgd_update(model, &names, cfg.learning_rate, cfg.weight_decay)?;
    model.zero_grads();
    composite(l_d, l_c, cfg.lambda)
}

/// Fixed-budget DOC fine-tuning over seeded shuffled streams. The frozen
/// prefix never changes; epochs in the log follow the target stream.
pub fn train(
    model: &mut Model,
    ref_stream: &mut BatchStream<'_>,
    tgt_stream: &mut BatchStream<'_>,
    cfg: &TrainConfig,
) -> Result<TrainLog> {
    cfg.validate()?;
    let mut log = TrainLog {
        records: Vec::with_capacity(cfg.iterations),
        lambda: cfg.lambda,
    };
    for iteration in 0..cfg.iterations {
        let epoch = tgt_stream.epoch();
        let (ref_x, ref_y) = ref_stream.next_batch()?;
        let (tgt_x, _) = tgt_stream.next_batch()?;
        let step = match cfg.variant {
            Variant::TwoBranch => train_step,
            Variant::MemoryEfficient => train_step_memeff,
        };
        let bundle = step(model, (&ref_x, &ref_y), &tgt_x, cfg).map_err(|e| match e {
            Error::NonFinite(what) => {
                Error::NonFinite(format!("{what} (aborted at iteration {iteration})"))
            }
            other => other,
        })?;
        log.records.push(IterationRecord {
            iteration,
            epoch,
            l_d: bundle.descriptiveness,
            l_c: bundle.compactness,
            l: bundle.composite,
        });
    }
    Ok(log)
}

#[derive(Debug, Clone)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            epochs: 10,
            learning_rate: 5e-3,
            weight_decay: 5e-4,
            batch_size: 32,
            seed: 0,
        }
    }
}

/// Plain cross-entropy training of the *full* network on the reference
/// dataset; the result serves as the pre-trained initialization `W_0`
/// for DOC fine-tuning.
pub fn pretrain_reference(
    model: &mut Model,
    reference: &Dataset,
    cfg: &PretrainConfig,
) -> Result<TrainLog> {
    if reference.class_count() < 2 {
        return Err(Error::Invalid(
            "pretraining needs a multi-class reference dataset".into(),
        ));
    }
    if reference.class_count() != model.class_count() {
        return Err(Error::Invalid(format!(
            "model head has {} classes, reference dataset {}",
            model.class_count(),
            reference.class_count()
        )));
    }
    if !(cfg.learning_rate > 0.0) {
        return Err(Error::Invalid("learning rate must be positive".into()));
    }
    let all_names: Vec<String> = model.param_names().map(str::to_string).collect();
    let mut stream = BatchStream::new(reference, cfg.batch_size, 1, cfg.seed)?;
    let iterations = cfg.epochs * stream.batches_per_epoch();
    let mut log = TrainLog {
        records: Vec::with_capacity(iterations),
        lambda: 0.0,
    };
    for iteration in 0..iterations {
        let epoch = stream.epoch();
        let (x, y) = stream.next_batch()?;
        let ce = cross_entropy_loss(&model.forward_logits_unfrozen(&x)?, &y)?;
        ce.backward()?;
        let l_d = ce.item()?;
        sgd_update(model, &all_names, cfg.learning_rate, cfg.weight_decay)?;
        model.zero_grads();
        log.records.push(IterationRecord {
            iteration,
            epoch,
            l_d,
            l_c: 0.0,
            l: l_d,
        });
    }
    Ok(log)
}

/// Fraction of samples whose argmax logit matches the label.
pub fn classification_accuracy(model: &Model, dataset: &Dataset, batch: usize) -> Result<f64> {
    let mut correct = 0usize;
    no_grad(|| -> Result<()> {
        let indices: Vec<usize> = (0..dataset.len()).collect();
        for chunk in indices.chunks(batch.max(1)) {
            let (x, y) = dataset.batch(chunk)?;
            let logits = model.forward_logits(&x)?;
            let c = model.class_count();
            for (row, &label) in logits.data().chunks_exact(c).zip(&y) {
                let argmax = row
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite logits"))
                    .map(|(i, _)| i)
                    .expect("non-empty row");
                correct += usize::from(argmax == label);
            }
        }
        Ok(())
    })?;
    Ok(correct as f64 / dataset.len() as f64)
}

/// L2 norm of the trainable weight matrices (biases excluded): the
/// collapse diagnostic — near zero means the filters have gone constant.
pub fn trainable_weight_norm(model: &Model) -> f64 {
    let mut total = 0.0;
    for name in model.trainable_param_names() {
        if name.ends_with(".weight") {
            if let Some(p) = model.param(&name) {
                total += p.data().iter().map(|v| v * v).sum::<f64>();
            }
        }
    }
    total.sqrt()
}
