//! SGD with classical momentum: exponential learning-rate decay, linear
//! per-epoch momentum increase, optional weight decay and gradient clipping.

use std::fs;
use std::path::Path;
use std::time::Instant;

use crate::corpus::{iterate_batches, TrainingExample};
use crate::error::{Error, Result};
use crate::model::{
    backward, first_non_finite, nll_loss, zip_params_apply, AttributeTable, FactoredTensorParams,
    Gradients,
};

/// Training hyperparameters. Readable from a flat `key=value` file; unknown
/// keys are rejected.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr0: f64,
    /// Per-epoch multiplicative factor in (0, 1].
    pub lr_decay: f64,
    pub momentum0: f64,
    pub momentum_max: f64,
    pub momentum_step: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub weight_decay: f64,
    /// Global-norm clip threshold; 0 disables clipping.
    pub grad_clip_norm: f64,
    /// Evaluate held-out data every this many epochs; 0 disables.
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr0: 0.1,
            lr_decay: 0.99,
            momentum0: 0.5,
            momentum_max: 0.9,
            momentum_step: 0.01,
            epochs: 10,
            batch_size: 16,
            seed: 0,
            weight_decay: 0.0,
            grad_clip_norm: 0.0,
            eval_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr0 <= 0.0 {
            return Err(Error::Config("lr0 must be > 0".into()));
        }
        if !(0.0 < self.lr_decay && self.lr_decay <= 1.0) {
            return Err(Error::Config("lr_decay must be in (0, 1]".into()));
        }
        if !(0.0..=1.0).contains(&self.momentum0)
            || self.momentum0 > self.momentum_max
            || self.momentum_max >= 1.0
        {
            return Err(Error::Config(
                "need 0 <= momentum0 <= momentum_max < 1".into(),
            ));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config("weight_decay must be >= 0".into()));
        }
        Ok(())
    }

    /// Parses `key=value` lines; `#` starts a comment. Unknown keys are
    /// rejected so typos do not silently train with defaults.
    pub fn from_kv_str(text: &str) -> Result<Self> {
        fn parse_val<T: std::str::FromStr>(value: &str, key: &str, line: usize) -> Result<T> {
            value
                .parse()
                .map_err(|_| Error::Config(format!("line {line}: bad value for {key}")))
        }
        let mut cfg = TrainConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value", i + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            let n = i + 1;
            match key {
                "lr0" => cfg.lr0 = parse_val(value, key, n)?,
                "lr_decay" => cfg.lr_decay = parse_val(value, key, n)?,
                "momentum0" => cfg.momentum0 = parse_val(value, key, n)?,
                "momentum_max" => cfg.momentum_max = parse_val(value, key, n)?,
                "momentum_step" => cfg.momentum_step = parse_val(value, key, n)?,
                "epochs" => cfg.epochs = parse_val(value, key, n)?,
                "batch_size" => cfg.batch_size = parse_val(value, key, n)?,
                "seed" => cfg.seed = parse_val(value, key, n)?,
                "weight_decay" => cfg.weight_decay = parse_val(value, key, n)?,
                "grad_clip_norm" => cfg.grad_clip_norm = parse_val(value, key, n)?,
                "eval_every" => cfg.eval_every = parse_val(value, key, n)?,
                _ => return Err(Error::Config(format!("unknown config key `{key}`"))),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_kv_file(path: &Path) -> Result<Self> {
        Self::from_kv_str(&fs::read_to_string(path)?)
    }
}

/// Learning rate and momentum at a given epoch:
/// `lr = lr0 * lr_decay^epoch`,
/// `momentum = min(momentum_max, momentum0 + epoch * momentum_step)`.
pub fn schedule(cfg: &TrainConfig, epoch: usize) -> (f64, f64) {
    let lr = cfg.lr0 * cfg.lr_decay.powi(epoch as i32);
    let momentum = (cfg.momentum0 + epoch as f64 * cfg.momentum_step).min(cfg.momentum_max);
    (lr, momentum)
}

/// Per-epoch training record.
#[derive(Debug, Clone)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean NLL over the training set after this epoch's updates.
    pub nll: f64,
    pub perplexity: f64,
    pub lr: f64,
    pub momentum: f64,
    pub wall_secs: f64,
    pub held_out_nll: Option<f64>,
}

#[derive(Debug, Clone, Default)]
pub struct TrainReport {
    pub epochs: Vec<EpochStats>,
}

impl TrainReport {
    pub fn final_nll(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.nll)
    }

    pub fn final_perplexity(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.perplexity)
    }
}

/// Momentum state carried across batches (and optionally persisted).
#[derive(Debug, Clone)]
pub struct TrainerState {
    pub epoch: usize,
    pub velocity: Gradients,
}

/// One momentum SGD step: `v <- m*v - lr*(g + wd*theta); theta <- theta + v`.
pub(crate) fn momentum_step(
    params: &mut FactoredTensorParams,
    table: &mut AttributeTable,
    grads: &Gradients,
    velocity: &mut Gradients,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) {
    zip_params_apply(params, table, grads, velocity, |theta, g, v| {
        *v = momentum * *v - lr * (g + weight_decay * *theta);
        *theta += *v;
    });
}

/// Trains in place over seeded shuffled batches. Per-epoch stats report the
/// full-pass mean NLL after that epoch's updates. Aborts with a diagnostic
/// naming the parameter group that first went non-finite.
pub fn train(
    params: &mut FactoredTensorParams,
    table: &mut AttributeTable,
    examples: &[TrainingExample],
    cfg: &TrainConfig,
    held_out: Option<&[TrainingExample]>,
    mut on_epoch: impl FnMut(&EpochStats),
) -> Result<TrainReport> {
    cfg.validate()?;
    if examples.is_empty() {
        return Err(Error::EmptyCorpus("no training examples"));
    }
    let mut velocity = Gradients::zeros(params, table);
    let mut report = TrainReport::default();
    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        let (lr, momentum) = schedule(cfg, epoch);
        for (batch_idx, batch) in
            iterate_batches(examples, cfg.batch_size, cfg.seed.wrapping_add(epoch as u64))
                .enumerate()
        {
            let (loss, mut grads) = backward(params, table, batch.into_iter())?;
            if !loss.is_finite() {
                let group =
                    first_non_finite(params, table).unwrap_or_else(|| "loss".to_string());
                return Err(Error::NonFinite {
                    group,
                    context: Some(format!("epoch {epoch}, batch {batch_idx}")),
                });
            }
            if cfg.grad_clip_norm > 0.0 {
                let norm = grads.global_norm();
                if norm > cfg.grad_clip_norm {
                    grads.scale(cfg.grad_clip_norm / norm);
                }
            }
            momentum_step(
                params,
                table,
                &grads,
                &mut velocity,
                lr,
                momentum,
                cfg.weight_decay,
            );
            if let Some(group) = first_non_finite(params, table) {
                return Err(Error::NonFinite {
                    group,
                    context: Some(format!("epoch {epoch}, batch {batch_idx}")),
                });
            }
        }
        let nll = nll_loss(params, table, examples.iter())?;
        let held_out_nll = match held_out {
            Some(h) if cfg.eval_every > 0 && (epoch + 1) % cfg.eval_every == 0 => {
                Some(evaluate(params, table, h)?.0)
            }
            _ => None,
        };
        let stats = EpochStats {
            epoch,
            nll,
            perplexity: nll.exp(),
            lr,
            momentum,
            wall_secs: start.elapsed().as_secs_f64(),
            held_out_nll,
        };
        on_epoch(&stats);
        report.epochs.push(stats);
    }
    Ok(report)
}

/// Mean NLL and perplexity over held-out examples. Never mutates parameters.
pub fn evaluate(
    params: &FactoredTensorParams,
    table: &AttributeTable,
    held_out: &[TrainingExample],
) -> Result<(f64, f64)> {
    if held_out.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let nll = nll_loss(params, table, held_out.iter())?;
    Ok((nll, nll.exp()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{
        build_language_registry, encode, AttributeRegistry, RawRecord,
    };
    use crate::model::{params_checksum, table_checksum, ModelDims};

    fn toy_setup(
        text: &str,
        context: usize,
        dims: ModelDims,
        seed: u64,
    ) -> (FactoredTensorParams, AttributeTable, Vec<TrainingExample>) {
        let records = [RawRecord::new("A", "en", text)];
        let langs = build_language_registry(&records, 1, 0).unwrap();
        let attrs = AttributeRegistry::build(["A"]);
        let corpus = encode(&records, &langs, &attrs, context).unwrap();
        let params = FactoredTensorParams::init(dims, &langs.vocab_sizes(), seed);
        let table = AttributeTable::init(dims.attr_dim, attrs.len(), true, seed ^ 1);
        (params, table, corpus.examples())
    }

    fn small_dims(context: usize) -> ModelDims {
        ModelDims {
            repr_dim: 6,
            factor_dim: 8,
            attr_dim: 3,
            context_size: context,
        }
    }

    #[test]
    fn schedule_arithmetic() {
        let cfg = TrainConfig {
            lr0: 0.1,
            lr_decay: 0.5,
            momentum0: 0.5,
            momentum_max: 0.9,
            momentum_step: 0.1,
            ..TrainConfig::default()
        };
        let (lr, m) = schedule(&cfg, 2);
        assert!((lr - 0.025).abs() < 1e-15);
        assert!((m - 0.7).abs() < 1e-15);
        let (lr0, m0) = schedule(&cfg, 0);
        assert_eq!(lr0, cfg.lr0);
        assert_eq!(m0, cfg.momentum0);
        let (_, capped) = schedule(&cfg, 10);
        assert_eq!(capped, 0.9);
    }

    #[test]
    fn config_file_parses_and_rejects_unknown_keys() {
        let cfg = TrainConfig::from_kv_str("lr0 = 0.2\nepochs=3 # fast\n\nseed=9\n").unwrap();
        assert_eq!(cfg.lr0, 0.2);
        assert_eq!(cfg.epochs, 3);
        assert_eq!(cfg.seed, 9);
        assert!(TrainConfig::from_kv_str("learning_rate=0.1").is_err());
        assert!(TrainConfig::from_kv_str("lr0=-1").is_err());
    }

    #[test]
    fn zero_lr_leaves_parameters_untouched() {
        let (mut params, mut table, examples) =
            toy_setup("a b c a b c a b", 2, small_dims(2), 5);
        let before = (params_checksum(&params), table_checksum(&table));
        // validate() requires lr0 > 0, so drive lr to zero through decay^1
        // with an lr0 so small every update underflows? No: use lr_decay=1
        // and lr0 normal but momentum/weight paths zeroed is not the
        // contract. Bypass validate by calling the step directly with lr=0.
        let grads = backward(&params, &table, examples.iter()).unwrap().1;
        let mut velocity = Gradients::zeros(&params, &table);
        for _ in 0..5 {
            momentum_step(&mut params, &mut table, &grads, &mut velocity, 0.0, 0.5, 0.0);
        }
        assert_eq!(before, (params_checksum(&params), table_checksum(&table)));
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let cfg = TrainConfig {
            epochs: 3,
            batch_size: 4,
            seed: 11,
            ..TrainConfig::default()
        };
        let run = || {
            let (mut params, mut table, examples) =
                toy_setup("a b c d a b c d a b", 2, small_dims(2), 5);
            train(&mut params, &mut table, &examples, &cfg, None, |_| {}).unwrap();
            (params_checksum(&params), table_checksum(&table))
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn one_step_matches_manual_momentum_update() {
        let (mut params, mut table, examples) = toy_setup("a b c", 1, small_dims(1), 7);
        let (lr, momentum, wd) = (0.05, 0.5, 0.01);
        let (_, grads) = backward(&params, &table, examples.iter()).unwrap();
        let expect = {
            let g = grads.repr_factors[(0, 0)];
            let theta = params.repr_factors[(0, 0)];
            let v = momentum * 0.0 - lr * (g + wd * theta);
            theta + v
        };
        let mut velocity = Gradients::zeros(&params, &table);
        momentum_step(&mut params, &mut table, &grads, &mut velocity, lr, momentum, wd);
        assert_eq!(params.repr_factors[(0, 0)], expect);
    }

    #[test]
    fn nll_shrinks_on_memorizable_corpus() {
        let text = "a b c ".repeat(60);
        let (mut params, mut table, examples) = toy_setup(text.trim(), 1, small_dims(1), 3);
        let cfg = TrainConfig {
            epochs: 50,
            batch_size: 16,
            lr0: 0.25,
            seed: 1,
            ..TrainConfig::default()
        };
        let report = train(&mut params, &mut table, &examples, &cfg, None, |_| {}).unwrap();
        let first = report.epochs.first().unwrap().nll;
        let last = report.epochs.last().unwrap().nll;
        assert!(
            last < 0.1 * first,
            "epoch-49 NLL {last} not below 10% of epoch-0 NLL {first}"
        );
    }

    #[test]
    fn weight_decay_shrinks_parameter_norm() {
        let norm_after = |wd: f64| {
            let (mut params, mut table, examples) =
                toy_setup("a b c d e a b c d e", 2, small_dims(2), 13);
            let cfg = TrainConfig {
                epochs: 5,
                batch_size: 4,
                weight_decay: wd,
                seed: 2,
                ..TrainConfig::default()
            };
            train(&mut params, &mut table, &examples, &cfg, None, |_| {}).unwrap();
            let mut sq = 0.0;
            sq += params.repr_factors.iter().map(|v| v * v).sum::<f64>();
            sq += params.attr_factors.iter().map(|v| v * v).sum::<f64>();
            sq += params.word_factors[0].iter().map(|v| v * v).sum::<f64>();
            for m in &params.context_mats {
                sq += m.iter().map(|v| v * v).sum::<f64>();
            }
            sq += params.bias[0].iter().map(|v| v * v).sum::<f64>();
            sq += table.columns.iter().map(|v| v * v).sum::<f64>();
            sq.sqrt()
        };
        assert!(norm_after(0.05) < norm_after(0.0));
    }

    #[test]
    fn evaluate_is_pure_and_matches_report() {
        let (mut params, mut table, examples) =
            toy_setup("a b c a b c a b c", 2, small_dims(2), 17);
        let cfg = TrainConfig {
            epochs: 4,
            batch_size: 8,
            seed: 3,
            ..TrainConfig::default()
        };
        let report = train(&mut params, &mut table, &examples, &cfg, None, |_| {}).unwrap();
        let before = (params_checksum(&params), table_checksum(&table));
        let (nll, ppl) = evaluate(&params, &table, &examples).unwrap();
        assert_eq!(before, (params_checksum(&params), table_checksum(&table)));
        assert!((nll - report.final_nll().unwrap()).abs() < 1e-12);
        assert!((ppl - nll.exp()).abs() < 1e-15);
        assert!(matches!(
            evaluate(&params, &table, &[]),
            Err(Error::EmptyBatch)
        ));
    }

    #[test]
    fn uniform_model_has_perplexity_v() {
        let dims = small_dims(2);
        let (mut params, table, examples) = toy_setup("a b c d e f g", 2, dims, 19);
        params.repr_factors.fill(0.0);
        params.attr_factors.fill(0.0);
        params.word_factors[0].fill(0.0);
        for m in &mut params.context_mats {
            m.fill(0.0);
        }
        params.bias[0].fill(0.0);
        let v = params.vocab_size(0) as f64;
        assert_eq!(v, 10.0); // 7 words + 3 specials
        let (_, ppl) = evaluate(&params, &table, &examples).unwrap();
        assert!((ppl - v).abs() < 1e-9);
    }

    #[test]
    fn poisoned_parameters_abort_with_group_name() {
        let (mut params, mut table, examples) = toy_setup("a b c a b", 2, small_dims(2), 23);
        params.repr_factors[(0, 0)] = f64::NAN;
        let cfg = TrainConfig {
            epochs: 1,
            ..TrainConfig::default()
        };
        match train(&mut params, &mut table, &examples, &cfg, None, |_| {}) {
            Err(Error::NonFinite { group, .. }) => assert_eq!(group, "repr_factors"),
            other => panic!("expected NonFinite error, got {other:?}"),
        }
    }
}
