//! Run configuration, the training loop, and the experiment harnesses
//! (ablation, sweep, low-resource).

use std::str::FromStr;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attention::{Attenuation, FsaHeadState, WindowMode};
use crate::boundary::{span_targets, BoundaryDistribution, FuzzyConfig, SideMode, SpanAnnotation};
use crate::corpus::{self, CorpusSpec, Example, Split};
use crate::loss::{bce_boundary_loss, kl_fuzzy_loss, LossConfig};
use crate::metrics::{entity_f1, MetricRecord};
use crate::model::{decode_spans, Checkpoint, ModelConfig, SpanModel};
use crate::nn::{self, Visit};
use crate::optim::Adam;
use crate::{Error, Result};

/// Everything one run needs; the TOML config file mirrors this struct.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub fuzzy: FuzzyConfig<f64>,
    pub loss: LossConfig<f64>,
    /// Template for every attention head; `delta` is the initial value.
    pub fsa: FsaHeadState<f64>,
    pub window: WindowMode,
    /// Learning-rate multiplier for the per-head `delta` parameters, which
    /// take plain (non-Adam) gradient steps. The raw span gradient is tiny,
    /// on the order of 1e-5 once attention sharpens, hence the large scale.
    pub span_lr_scale: f64,
    /// Optimizer steps over which the KL weight ramps linearly from zero up
    /// to `loss.lambda`. Zero applies the full weight from the first step.
    pub lambda_warmup_steps: u64,
    pub corpus: CorpusSpec,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Dev evaluation cadence in optimizer steps.
    pub eval_every: usize,
    pub decode_threshold: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig {
                vocab_size: 32,
                model_width: 32,
                num_layers: 2,
                num_heads: 4,
                max_seq_len: 64,
                type_count: 2,
                fsa_enabled: true,
                fsl_enabled: true,
            },
            fuzzy: FuzzyConfig {
                sigma: 0.5,
                theta: 0.3,
                step: 0.3,
                side_mode: SideMode::BothSides,
            },
            loss: LossConfig::default(),
            // delta starts just below 1: at exactly 1 the mask is flat over
            // the whole window and the delta gradient vanishes identically.
            fsa: FsaHeadState::new(0.95, 30, 32, Attenuation::Linear)
                .expect("default head state is valid"),
            window: WindowMode::Backward,
            span_lr_scale: 20000.0,
            lambda_warmup_steps: 800,
            corpus: CorpusSpec::default(),
            epochs: 60,
            learning_rate: 1e-3,
            batch_size: 16,
            seed: 7,
            eval_every: 50,
            decode_threshold: 0.5,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        FuzzyConfig::new(
            self.fuzzy.sigma,
            self.fuzzy.theta,
            self.fuzzy.step,
            self.fuzzy.side_mode,
        )?;
        LossConfig::new(self.loss.lambda, self.loss.epsilon_floor)?;
        FsaHeadState::new(self.fsa.delta, self.fsa.l_span, self.fsa.d, self.fsa.variant)?;
        self.corpus.validate()?;
        if self.corpus.vocab_size > self.model.vocab_size {
            return Err(Error::InvalidConfig(format!(
                "corpus vocab {} exceeds model vocab {}",
                self.corpus.vocab_size, self.model.vocab_size
            )));
        }
        if self.corpus.type_count > self.model.type_count {
            return Err(Error::InvalidConfig(format!(
                "corpus has {} types but the model embeds {}",
                self.corpus.type_count, self.model.type_count
            )));
        }
        if self.corpus.seq_len_range.1 > self.model.max_seq_len {
            return Err(Error::InvalidConfig(format!(
                "corpus sequences up to {} exceed max_seq_len {}",
                self.corpus.seq_len_range.1, self.model.max_seq_len
            )));
        }
        if self.corpus.span_len_range.1 > self.fsa.l_span {
            return Err(Error::InvalidConfig(format!(
                "gold spans up to length {} cannot be decoded with l_span {}",
                self.corpus.span_len_range.1, self.fsa.l_span
            )));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.eval_every == 0 {
            return Err(Error::InvalidConfig(
                "epochs, batch_size, and eval_every must be positive".into(),
            ));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "learning rate must be finite and positive, got {}",
                self.learning_rate
            )));
        }
        if !(self.span_lr_scale > 0.0) || !self.span_lr_scale.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "span_lr_scale must be finite and positive, got {}",
                self.span_lr_scale
            )));
        }
        if !(self.decode_threshold > 0.0 && self.decode_threshold < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "decode_threshold must lie in (0, 1), got {}",
                self.decode_threshold
            )));
        }
        Ok(())
    }
}

/// Merges `over` into `base`, rejecting keys absent from `base`.
///
/// The base tree is serialized from a complete config, so every legal key
/// already exists in it; anything else is a typo.
fn merge_value(base: &mut toml::Value, over: toml::Value, path: &str) -> Result<()> {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (key, value) in o {
                let child = format!("{path}{}{key}", if path.is_empty() { "" } else { "." });
                match b.get_mut(&key) {
                    Some(slot) => merge_value(slot, value, &child)?,
                    None => {
                        return Err(Error::InvalidConfig(format!(
                            "unknown config key `{child}`"
                        )))
                    }
                }
            }
            Ok(())
        }
        (slot, value) => {
            *slot = value;
            Ok(())
        }
    }
}

/// Applies one `--set key=value` override onto the resolved tree.
fn apply_set(root: &mut toml::Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment.split_once('=').ok_or_else(|| {
        Error::InvalidArgument(format!("expected key=value, got `{assignment}`"))
    })?;
    let (key, raw) = (key.trim(), raw.trim());
    if key.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "empty key in `{assignment}`"
        )));
    }
    // A bare word like `step` is not a TOML literal; fall back to a string.
    let value = match toml::Table::from_str(&format!("v = {raw}")) {
        Ok(mut table) => table.remove("v").expect("assignment parsed"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let mut slot = root;
    let mut walked = String::new();
    for part in key.split('.') {
        if !walked.is_empty() {
            walked.push('.');
        }
        walked.push_str(part);
        slot = slot
            .as_table_mut()
            .and_then(|t| t.get_mut(part))
            .ok_or_else(|| Error::InvalidConfig(format!("unknown config key `{walked}`")))?;
    }
    *slot = value;
    Ok(())
}

/// Resolves a config from defaults, an optional TOML file body, and
/// `key=value` overrides, in increasing precedence.
///
/// Returns the config together with its fully resolved TOML rendering.
pub fn resolve_config(file: Option<&str>, sets: &[String]) -> Result<(RunConfig, String)> {
    let mut tree = toml::Value::try_from(RunConfig::default())
        .map_err(|e| Error::InvalidConfig(format!("default config did not serialize: {e}")))?;
    if let Some(body) = file {
        let parsed: toml::Value = body
            .parse()
            .map_err(|e| Error::InvalidConfig(format!("config file is not valid TOML: {e}")))?;
        merge_value(&mut tree, parsed, "")?;
    }
    for assignment in sets {
        apply_set(&mut tree, assignment)?;
    }
    let cfg: RunConfig = tree
        .clone()
        .try_into()
        .map_err(|e| Error::InvalidConfig(format!("config did not deserialize: {e}")))?;
    cfg.validate()?;
    let rendered = toml::to_string_pretty(&cfg)
        .map_err(|e| Error::InvalidConfig(format!("config did not render: {e}")))?;
    Ok((cfg, rendered))
}

/// One training unit: a sentence queried for a single span type.
#[derive(Debug, Clone)]
pub struct TrainItem {
    pub tokens: Vec<usize>,
    pub type_id: usize,
    pub gold: Vec<SpanAnnotation>,
    pub targets: Vec<(BoundaryDistribution<f64>, BoundaryDistribution<f64>)>,
}

/// Expands examples of one split into `(sentence, type)` items.
///
/// Types with no gold span still yield an item; the model must learn to
/// keep every boundary probability below threshold for those.
pub fn items_for_split(
    examples: &[Example],
    split: Split,
    type_count: usize,
    fuzzy: &FuzzyConfig<f64>,
) -> Result<Vec<TrainItem>> {
    let mut items = Vec::new();
    for ex in examples.iter().filter(|e| e.split == split) {
        for type_id in 0..type_count {
            let gold: Vec<SpanAnnotation> = ex
                .spans
                .iter()
                .filter(|s| s.type_id == type_id)
                .copied()
                .collect();
            let targets = gold
                .iter()
                .map(|s| span_targets(s, ex.tokens.len(), fuzzy))
                .collect::<Result<Vec<_>>>()?;
            items.push(TrainItem {
                tokens: ex.tokens.clone(),
                type_id,
                gold,
                targets,
            });
        }
    }
    Ok(items)
}

/// Result of one training run. `head_l` is the per-head effective span
/// length of the final (not dev-best) model; `best` holds the dev-best
/// parameters used for the test evaluation.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub records: Vec<MetricRecord>,
    pub steps: u64,
    pub best_step: u64,
    pub best_dev_f1: f64,
    pub test_precision: f64,
    pub test_recall: f64,
    pub test_f1: f64,
    pub head_l: Vec<f64>,
    pub best: Checkpoint<f64>,
}

/// Exact-match precision, recall, and F1 of a model over items.
pub fn evaluate(
    model: &SpanModel<f64>,
    items: &[TrainItem],
    threshold: f64,
    l_span: usize,
) -> Result<(f64, f64, f64)> {
    let mut preds = Vec::with_capacity(items.len());
    let mut refs = Vec::with_capacity(items.len());
    for item in items {
        // forward() emits token-space logits; gold spans index tokens.
        let (logits, _) = model.forward(&item.tokens, item.type_id)?;
        preds.push(decode_spans(&logits, threshold, l_span, item.type_id)?);
        refs.push(item.gold.clone());
    }
    entity_f1(&preds, &refs)
}

/// Trains on a freshly generated corpus; see [`train_on`].
pub fn train(cfg: &RunConfig) -> Result<TrainOutcome> {
    let examples = corpus::generate(&cfg.corpus)?;
    train_on(cfg, &examples)
}

/// Runs the full loop on the given corpus: mini-batch Adam, periodic dev
/// evaluation, dev-best checkpoint selection, and a final test evaluation
/// with the best parameters.
///
/// The batch loss averages the BCE term over items and the KL term over
/// every gold span in the batch; the KL term enters scaled by `lambda`
/// when `model.fsl_enabled` is set and is dropped entirely otherwise.
/// The scale ramps linearly over `lambda_warmup_steps` so the boundary
/// head settles on the hard targets before the distributional term starts
/// reshaping it. Logged `loss_fs` is always the raw unscaled KL.
pub fn train_on(cfg: &RunConfig, examples: &[Example]) -> Result<TrainOutcome> {
    cfg.validate()?;
    let type_count = cfg.model.type_count;
    let train_items = items_for_split(examples, Split::Train, type_count, &cfg.fuzzy)?;
    let dev_items = items_for_split(examples, Split::Dev, type_count, &cfg.fuzzy)?;
    let test_items = items_for_split(examples, Split::Test, type_count, &cfg.fuzzy)?;
    if train_items.is_empty() || dev_items.is_empty() || test_items.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "need all three splits populated, got {}/{}/{} items",
            train_items.len(),
            dev_items.len(),
            test_items.len()
        )));
    }

    let mut model = SpanModel::new(
        cfg.model,
        cfg.fsa.clone(),
        cfg.window,
        cfg.span_lr_scale,
        cfg.seed,
    )?;
    let mut opt = Adam::new(cfg.learning_rate)?;
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    shuffle_rng.set_stream(2);
    let lambda_full = if cfg.model.fsl_enabled {
        cfg.loss.lambda
    } else {
        0.0
    };

    let batches_per_epoch = train_items.len().div_ceil(cfg.batch_size) as u64;
    let total_steps = cfg.epochs as u64 * batches_per_epoch;
    let mut order: Vec<usize> = (0..train_items.len()).collect();
    let mut records: Vec<MetricRecord> = Vec::new();
    let mut best: Option<(f64, u64, Checkpoint<f64>)> = None;
    let (mut run_ori, mut run_fs, mut run_batches) = (0.0f64, 0.0f64, 0u64);
    let mut step = 0u64;

    for _ in 0..cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        for chunk in order.chunks(cfg.batch_size) {
            step += 1;
            let lambda = if cfg.lambda_warmup_steps > 0 {
                lambda_full * (step as f64 / cfg.lambda_warmup_steps as f64).min(1.0)
            } else {
                lambda_full
            };
            nn::zero_grads(&mut model);
            let inv_b = 1.0 / chunk.len() as f64;
            let total_pairs: usize = chunk.iter().map(|&i| train_items[i].targets.len()).sum();
            let (mut batch_ori, mut batch_fs) = (0.0f64, 0.0f64);
            for &i in chunk {
                let item = &train_items[i];
                let (logits, cache) = model.forward(&item.tokens, item.type_id)?;
                let (bce, bce_grad) = bce_boundary_loss(&logits, &item.gold)?;
                batch_ori += bce * inv_b;
                let mut d = logits.zero_like();
                d.start += &(&bce_grad.start * inv_b);
                d.end += &(&bce_grad.end * inv_b);
                if total_pairs > 0 {
                    let inv_t = 1.0 / total_pairs as f64;
                    for pair in &item.targets {
                        let (kl, kl_grad) =
                            kl_fuzzy_loss(&logits, pair, cfg.loss.epsilon_floor)?;
                        batch_fs += kl * inv_t;
                        if lambda > 0.0 {
                            d.start += &(&kl_grad.start * (lambda * inv_t));
                            d.end += &(&kl_grad.end * (lambda * inv_t));
                        }
                    }
                }
                model.backward(&cache, &d)?;
            }
            if !batch_ori.is_finite() || !batch_fs.is_finite() {
                return Err(Error::Diverged { step: step as usize });
            }
            opt.step(&mut model);
            model.clamp_deltas();
            run_ori += batch_ori;
            run_fs += batch_fs;
            run_batches += 1;

            if step % cfg.eval_every as u64 == 0 || step == total_steps {
                let (p, r, f1) =
                    evaluate(&model, &dev_items, cfg.decode_threshold, cfg.fsa.l_span)?;
                let denom = run_batches.max(1) as f64;
                records.push(MetricRecord {
                    step,
                    split: "dev".into(),
                    precision: p,
                    recall: r,
                    f1,
                    loss_ori: run_ori / denom,
                    loss_fs: run_fs / denom,
                    head_l: model.head_spans(),
                });
                (run_ori, run_fs, run_batches) = (0.0, 0.0, 0);
                if best.as_ref().is_none_or(|(b, _, _)| f1 > *b) {
                    best = Some((f1, step, Checkpoint::capture(&mut model)));
                }
            }
        }
    }

    let head_l = model.head_spans();
    let (best_dev_f1, best_step, best) = best.expect("at least one evaluation ran");
    let best_model = best.restore()?;
    let (tp, tr, tf1) = evaluate(&best_model, &test_items, cfg.decode_threshold, cfg.fsa.l_span)?;
    records.push(MetricRecord {
        step,
        split: "test".into(),
        precision: tp,
        recall: tr,
        f1: tf1,
        loss_ori: 0.0,
        loss_fs: 0.0,
        head_l: best_model.head_spans(),
    });
    Ok(TrainOutcome {
        records,
        steps: step,
        best_step,
        best_dev_f1,
        test_precision: tp,
        test_recall: tr,
        test_f1: tf1,
        head_l,
        best,
    })
}

/// First dev-record step whose F1 reaches `target`.
pub fn steps_to_reach(records: &[MetricRecord], target: f64) -> Option<u64> {
    records
        .iter()
        .find(|r| r.split == "dev" && r.f1 >= target)
        .map(|r| r.step)
}

/// The four ablation arms. FSL toggles the fuzzy loss term, FSA the
/// span-bounded attention layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arm {
    Baseline,
    Fsl,
    Fsa,
    Full,
}

impl Arm {
    pub const ALL: [Arm; 4] = [Arm::Baseline, Arm::Fsl, Arm::Fsa, Arm::Full];

    pub fn name(self) -> &'static str {
        match self {
            Arm::Baseline => "baseline",
            Arm::Fsl => "fsl",
            Arm::Fsa => "fsa",
            Arm::Full => "full",
        }
    }

    fn flags(self) -> (bool, bool) {
        match self {
            Arm::Baseline => (false, false),
            Arm::Fsl => (false, true),
            Arm::Fsa => (true, false),
            Arm::Full => (true, true),
        }
    }

    /// Applies this arm's feature switches onto a config.
    pub fn apply(self, cfg: &mut RunConfig) {
        let (fsa, fsl) = self.flags();
        cfg.model.fsa_enabled = fsa;
        cfg.model.fsl_enabled = fsl;
    }
}

impl std::fmt::Display for Arm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug)]
pub struct AblationRun {
    pub arm: Arm,
    pub seed: u64,
    pub outcome: TrainOutcome,
}

/// Trains all four arms for each seed on one shared corpus. The corpus
/// seed stays fixed so arms and seeds differ only in model init and
/// shuffling. Runs execute in parallel on the global rayon pool.
pub fn run_ablation(base: &RunConfig, seeds: &[u64]) -> Result<Vec<AblationRun>> {
    let examples = corpus::generate(&base.corpus)?;
    let jobs: Vec<(Arm, u64)> = seeds
        .iter()
        .flat_map(|&s| Arm::ALL.into_iter().map(move |a| (a, s)))
        .collect();
    jobs.into_par_iter()
        .map(|(arm, seed)| {
            let mut cfg = base.clone();
            arm.apply(&mut cfg);
            cfg.seed = seed;
            Ok(AblationRun {
                arm,
                seed,
                outcome: train_on(&cfg, &examples)?,
            })
        })
        .collect()
}

#[derive(Debug)]
pub struct SweepRun {
    pub axis: &'static str,
    pub setting: String,
    pub seed: u64,
    pub outcome: TrainOutcome,
}

/// One-factor-at-a-time sweep from `base` over the span window length,
/// the decay width, the attenuation variant, and the target side mode.
///
/// The variant axis runs every seed; the other axes use the first seed
/// only. Each cell regenerates its corpus from the (shared) corpus spec.
pub fn run_sweep(base: &RunConfig, seeds: &[u64]) -> Result<Vec<SweepRun>> {
    if seeds.is_empty() {
        return Err(Error::InvalidArgument("sweep needs at least one seed".into()));
    }
    let mut cells: Vec<(&'static str, String, RunConfig)> = Vec::new();
    for l_span in [16usize, 30, 48] {
        let mut cfg = base.clone();
        cfg.fsa.l_span = l_span;
        cells.push(("l_span", format!("l_span={l_span}"), cfg));
    }
    for d in [16usize, 32, 48] {
        let mut cfg = base.clone();
        cfg.fsa.d = d;
        cells.push(("d", format!("d={d}"), cfg));
    }
    for variant in [
        Attenuation::Linear,
        Attenuation::Step,
        Attenuation::GaussianTail,
    ] {
        let mut cfg = base.clone();
        cfg.fsa.variant = variant;
        cells.push(("variant", format!("variant={variant:?}"), cfg));
    }
    for side in [SideMode::BothSides, SideMode::StartOnly] {
        let mut cfg = base.clone();
        cfg.fuzzy.side_mode = side;
        cells.push(("side_mode", format!("side_mode={side:?}"), cfg));
    }
    let jobs: Vec<(&'static str, String, RunConfig, u64)> = cells
        .into_iter()
        .flat_map(|(axis, setting, cfg)| {
            let axis_seeds = if axis == "variant" { seeds } else { &seeds[..1] };
            axis_seeds
                .iter()
                .map(move |&s| (axis, setting.clone(), cfg.clone(), s))
                .collect::<Vec<_>>()
        })
        .collect();
    jobs.into_par_iter()
        .map(|(axis, setting, mut cfg, seed)| {
            cfg.seed = seed;
            Ok(SweepRun {
                axis,
                setting,
                seed,
                outcome: train(&cfg)?,
            })
        })
        .collect()
}

#[derive(Debug)]
pub struct LowResourceRun {
    pub fraction: f64,
    pub arm: Arm,
    pub seed: u64,
    pub outcome: TrainOutcome,
}

/// Trains baseline and full arms on nested train subsets of the base
/// corpus; dev and test splits stay complete. Callers choose the epoch
/// budget via `base.epochs`.
pub fn run_low_resource(
    base: &RunConfig,
    fractions: &[f64],
    seeds: &[u64],
) -> Result<Vec<LowResourceRun>> {
    let examples = corpus::generate(&base.corpus)?;
    let held_out: Vec<Example> = examples
        .iter()
        .filter(|e| e.split != Split::Train)
        .cloned()
        .collect();
    let subsets = corpus::split_low_resource(&examples, fractions, base.corpus.seed)?;
    let jobs: Vec<(f64, Vec<Example>, Arm, u64)> = subsets
        .into_iter()
        .flat_map(|(f, subset)| {
            let mut set = subset;
            set.extend(held_out.iter().cloned());
            seeds
                .iter()
                .flat_map(|&s| {
                    [Arm::Baseline, Arm::Full]
                        .into_iter()
                        .map(move |a| (f, a, s))
                })
                .map(|(f, a, s)| (f, set.clone(), a, s))
                .collect::<Vec<_>>()
        })
        .collect();
    jobs.into_par_iter()
        .map(|(fraction, set, arm, seed)| {
            let mut cfg = base.clone();
            arm.apply(&mut cfg);
            cfg.seed = seed;
            Ok(LowResourceRun {
                fraction,
                arm,
                seed,
                outcome: train_on(&cfg, &set)?,
            })
        })
        .collect()
}

/// Worst relative error between analytic and central-difference gradients
/// for one parameter group.
#[derive(Debug, Clone)]
pub struct GroupReport {
    pub name: String,
    pub checked: usize,
    pub max_rel_err: f64,
}

/// Checks analytic gradients of the combined batch loss against central
/// differences on `samples_per_group` coordinates of every group.
///
/// Delta coordinates are skipped when the effective length sits within
/// `0.05` of a mask kink (an integer offset for the Linear ramp ends) or
/// when the variant is Step, whose mask is piecewise constant in delta.
pub fn grad_check(cfg: &RunConfig, samples_per_group: usize, h: f64) -> Result<Vec<GroupReport>> {
    cfg.validate()?;
    let examples = corpus::generate(&cfg.corpus)?;
    let items = items_for_split(&examples, Split::Train, cfg.model.type_count, &cfg.fuzzy)?;
    let item = items
        .into_iter()
        .find(|it| !it.gold.is_empty())
        .ok_or_else(|| Error::InvalidArgument("no item with a gold span".into()))?;
    let mut model = SpanModel::new(
        cfg.model,
        cfg.fsa.clone(),
        cfg.window,
        cfg.span_lr_scale,
        cfg.seed,
    )?;
    let lambda = if cfg.model.fsl_enabled {
        cfg.loss.lambda
    } else {
        0.0
    };

    let loss_of = |m: &SpanModel<f64>| -> Result<f64> {
        let (logits, _) = m.forward(&item.tokens, item.type_id)?;
        let (bce, _) = bce_boundary_loss(&logits, &item.gold)?;
        let mut loss = bce;
        let inv_t = 1.0 / item.targets.len() as f64;
        for pair in &item.targets {
            let (kl, _) = kl_fuzzy_loss(&logits, pair, cfg.loss.epsilon_floor)?;
            loss += lambda * inv_t * kl;
        }
        Ok(loss)
    };

    // Analytic pass.
    nn::zero_grads(&mut model);
    let (logits, cache) = model.forward(&item.tokens, item.type_id)?;
    let (_, bce_grad) = bce_boundary_loss(&logits, &item.gold)?;
    let mut d = logits.zero_like();
    d.start += &bce_grad.start;
    d.end += &bce_grad.end;
    let inv_t = 1.0 / item.targets.len() as f64;
    for pair in &item.targets {
        let (_, kl_grad) = kl_fuzzy_loss(&logits, pair, cfg.loss.epsilon_floor)?;
        d.start += &(&kl_grad.start * (lambda * inv_t));
        d.end += &(&kl_grad.end * (lambda * inv_t));
    }
    model.backward(&cache, &d)?;
    let analytic = {
        let mut grads: Vec<(String, Vec<f64>)> = Vec::new();
        model.visit(&mut |p| grads.push((p.name.clone(), p.grad.to_vec())));
        grads
    };

    let mut params = nn::collect_params(&mut model);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
    let kink_margin = 0.05;
    let mut reports = Vec::with_capacity(analytic.len());
    for (name, grad) in analytic {
        let is_delta = name.contains(".delta");
        if is_delta && cfg.fsa.variant == Attenuation::Step {
            continue;
        }
        let len = grad.len();
        let mut indices: Vec<usize> = (0..len).collect();
        if len > samples_per_group {
            indices.shuffle(&mut rng);
            indices.truncate(samples_per_group);
            indices.sort_unstable();
        }
        let mut max_rel = 0.0f64;
        let mut checked = 0usize;
        for idx in indices {
            let original = params[&name][idx];
            if is_delta {
                let l = original * cfg.fsa.l_span as f64;
                let near_kink = (l - l.round()).abs() < kink_margin
                    || original < 2.0 * h
                    || original > 1.0 - 2.0 * h;
                if near_kink {
                    continue;
                }
            }
            let mut probe = |v: f64| -> Result<f64> {
                params.get_mut(&name).expect("group exists")[idx] = v;
                nn::load_params(&mut model, &params)?;
                loss_of(&model)
            };
            let up = probe(original + h)?;
            let down = probe(original - h)?;
            probe(original)?;
            let numeric = (up - down) / (2.0 * h);
            let a = grad[idx];
            let denom = a.abs().max(numeric.abs());
            let rel = if denom < 1e-10 {
                0.0
            } else {
                (a - numeric).abs() / denom
            };
            max_rel = max_rel.max(rel);
            checked += 1;
        }
        reports.push(GroupReport {
            name,
            checked,
            max_rel_err: max_rel,
        });
    }
    Ok(reports)
}
