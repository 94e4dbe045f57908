//! Mini-batch SGD on cross-entropy with weight decay, in two phases: heads
//! only over a frozen trunk, then end to end.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{Item, LabeledDataset, Split};
use crate::error::{Error, Result};
use crate::network::{Checkpoint, LayerParams, NetworkSpec};
use crate::tensor::{Element, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    HeadsOnly,
    EndToEnd,
}

impl Phase {
    /// Layers whose parameters this phase updates.
    pub fn update_mask(self, spec: &NetworkSpec) -> Vec<bool> {
        match self {
            Phase::HeadsOnly => spec.head_mask(),
            Phase::EndToEnd => spec.trainable_mask(),
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::HeadsOnly => "heads_only",
            Phase::EndToEnd => "end_to_end",
        })
    }
}

impl FromStr for Phase {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "heads_only" => Ok(Phase::HeadsOnly),
            "end_to_end" => Ok(Phase::EndToEnd),
            other => Err(Error::InvalidArgument(format!(
                "unknown phase {other:?} (expected heads_only or end_to_end)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub phase: Phase,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.05,
            weight_decay: 1e-4,
            epochs: 20,
            batch_size: 8,
            phase: Phase::EndToEnd,
            seed: 0,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "learning rate must be non-negative and finite, got {}",
                self.learning_rate
            )));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "weight decay must be non-negative and finite, got {}",
                self.weight_decay
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be positive".into()));
        }
        Ok(())
    }
}

/// Where training starts.
#[derive(Debug, Clone)]
pub enum Start {
    /// Glorot-initialise the architecture using the config seed.
    Fresh(NetworkSpec),
    Resume(Checkpoint),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub phase: Phase,
    /// Mean objective over the epoch's batches, measured before each step.
    pub loss: f64,
    /// Training-set accuracy after the epoch.
    pub accuracy: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<EpochLog>,
}

/// `−ln P(target) + λ·Σθ²` over every trainable parameter.
pub fn loss<E: Element>(probs: &Tensor<E>, target: usize, checkpoint: &Checkpoint<E>, weight_decay: f64) -> Result<f64> {
    let p = probs.data().get(target).ok_or(Error::IndexOutOfRange {
        what: "class",
        index: target,
        len: probs.len(),
    })?;
    let decay = if weight_decay == 0.0 {
        0.0
    } else {
        weight_decay * checkpoint.sum_squares_f64(&checkpoint.spec().trainable_mask())
    };
    Ok(-p.as_f64().ln() + decay)
}

pub fn train(dataset: &LabeledDataset, start: Start, config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    if dataset.split() != Split::Train {
        return Err(Error::InvalidArgument(format!(
            "training needs the train split, got {}",
            dataset.split()
        )));
    }
    if dataset.is_empty() {
        return Err(Error::EmptyInput("training dataset has no items".into()));
    }
    if config.batch_size > dataset.len() {
        return Err(Error::InvalidArgument(format!(
            "batch size {} exceeds dataset size {}",
            config.batch_size,
            dataset.len()
        )));
    }
    let mut checkpoint = match start {
        Start::Fresh(spec) => Checkpoint::init(spec, config.seed),
        Start::Resume(ck) => ck,
    };
    check_compatible(&checkpoint, dataset)?;
    if checkpoint.spec().class_names().is_empty() && dataset.class_count() == checkpoint.spec().class_count() {
        let spec = checkpoint.spec().clone().with_class_names(dataset.class_names().to_vec())?;
        checkpoint = Checkpoint::new(spec, checkpoint.params().to_vec())?;
    }

    let update = config.phase.update_mask(checkpoint.spec());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut log = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0;
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let batch: Vec<&Item> = chunk.iter().map(|&i| &dataset.items()[i]).collect();
            let loss = sgd_step(&mut checkpoint, &batch, &update, config)?;
            if !loss.is_finite() {
                return Err(Error::Divergence { epoch, batch: b, loss });
            }
            total += loss;
            batches += 1;
        }
        if !checkpoint.all_finite() {
            return Err(Error::Divergence {
                epoch,
                batch: batches,
                loss: f64::NAN,
            });
        }
        log.push(EpochLog {
            epoch,
            phase: config.phase,
            loss: total / batches as f64,
            accuracy: accuracy(&checkpoint, dataset.items())?,
        });
    }
    Ok(TrainOutcome { checkpoint, log })
}

/// One SGD step on `batch`; returns the batch objective before the step.
pub fn sgd_step(checkpoint: &mut Checkpoint, batch: &[&Item], update: &[bool], config: &TrainConfig) -> Result<f64> {
    let mut sum: Vec<Option<LayerParams>> = vec![None; update.len()];
    let mut data_loss = 0.0;
    for item in batch {
        let (probs, trace) = checkpoint.forward(&item.image)?;
        data_loss += loss(&probs, item.class, checkpoint, 0.0)?;
        let grads = checkpoint.backward_masked(&trace, item.class, update)?;
        for (acc, g) in sum.iter_mut().zip(grads.params) {
            let Some(g) = g else { continue };
            *acc = Some(match acc.take() {
                None => g,
                Some(a) => LayerParams {
                    weights: a.weights.add(&g.weights)?,
                    bias: a.bias.add(&g.bias)?,
                },
            });
        }
    }
    let n = batch.len() as f64;
    let decay = config.weight_decay;
    let objective = data_loss / n + decay * checkpoint.sum_squares_f64(&checkpoint.spec().trainable_mask());

    let lr = config.learning_rate as f32;
    let inv_n = (1.0 / n) as f32;
    let two_decay = (2.0 * decay) as f32;
    for (params, grad) in checkpoint.params_mut().iter_mut().zip(sum) {
        let (Some(p), Some(g)) = (params.as_mut(), grad) else { continue };
        for (theta, g) in [(&mut p.weights, g.weights), (&mut p.bias, g.bias)] {
            for (t, &gv) in theta.data_mut().iter_mut().zip(g.data()) {
                *t -= lr * (gv * inv_n + two_decay * *t);
            }
        }
    }
    Ok(objective)
}

/// Fraction of items whose argmax class (ties to the lowest index) matches
/// the label.
pub fn accuracy(checkpoint: &Checkpoint, items: &[Item]) -> Result<f64> {
    if items.is_empty() {
        return Err(Error::EmptyInput("no items to score".into()));
    }
    let mut correct = 0usize;
    for item in items {
        if checkpoint.predict(&item.image)?.argmax() == item.class {
            correct += 1;
        }
    }
    Ok(correct as f64 / items.len() as f64)
}

/// Accuracy on a held-out test split.
pub fn evaluate(checkpoint: &Checkpoint, dataset: &LabeledDataset) -> Result<f64> {
    if dataset.split() != Split::Test {
        return Err(Error::InvalidArgument(format!(
            "evaluation needs the test split, got {}",
            dataset.split()
        )));
    }
    if dataset.is_empty() {
        return Err(Error::EmptyInput("test dataset has no items".into()));
    }
    check_compatible(checkpoint, dataset)?;
    accuracy(checkpoint, dataset.items())
}

fn check_compatible(checkpoint: &Checkpoint, dataset: &LabeledDataset) -> Result<()> {
    let spec = checkpoint.spec();
    if let Some(item) = dataset.items().first() {
        item.image.expect_shape(&spec.input_shape()).map_err(|_| {
            Error::dim(format!(
                "dataset images are {:?} but the network expects {:?}",
                item.image.shape(),
                spec.input_shape()
            ))
        })?;
    }
    if dataset.class_count() > spec.class_count() {
        return Err(Error::dim(format!(
            "dataset has {} classes but the network outputs {}",
            dataset.class_count(),
            spec.class_count()
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::synthetic;
    use crate::network::LayerSpec;

    fn small_spec() -> NetworkSpec {
        "input c=1 h=16 w=16
         conv k=4 kh=3 kw=3 pad=1
         relu
         maxpool window=2
         flatten
         dense u=16 head
         relu
         dense u=4 head
         softmax"
            .parse()
            .unwrap()
    }

    #[test]
    fn loss_examples() {
        let spec = NetworkSpec::new([1, 1, 3], vec![LayerSpec::flatten(), LayerSpec::dense(17, 3), LayerSpec::softmax()]).unwrap();
        let ck = Checkpoint::<f64>::init(spec, 0);
        let onehot = Tensor::from_fn([17], |k| if k == 4 { 1.0 } else { 0.0 }).unwrap();
        assert_eq!(loss(&onehot, 4, &ck, 0.0).unwrap(), 0.0);
        let uniform = Tensor::full([17], 1.0 / 17.0).unwrap();
        let l = loss(&uniform, 0, &ck, 0.0).unwrap();
        assert!((l - 17f64.ln()).abs() < 1e-12);
        assert!((l - 2.833).abs() < 1e-3);
        assert!(matches!(loss(&uniform, 17, &ck, 0.0), Err(Error::IndexOutOfRange { .. })));
    }

    #[test]
    fn loss_weight_decay_matches_direct_sum() {
        let ck = Checkpoint::<f32>::init(small_spec(), 3);
        let mut by_hand = 0.0f64;
        for p in ck.params().iter().flatten() {
            for &v in p.weights.data().iter().chain(p.bias.data()) {
                by_hand += (v as f64) * (v as f64);
            }
        }
        let probs = Tensor::full([4], 0.25f32).unwrap();
        let lambda = 0.01;
        let l = loss(&probs, 1, &ck, lambda).unwrap();
        let expected = -(0.25f64.ln()) + lambda * by_hand;
        assert!((l - expected).abs() < 1e-12, "{l} vs {expected}");
    }

    #[test]
    fn zero_lr_and_decay_is_a_no_op() {
        let (train_set, _) = synthetic::four_class(0);
        let start = Checkpoint::init(small_spec(), 5);
        let config = TrainConfig {
            learning_rate: 0.0,
            weight_decay: 0.0,
            epochs: 3,
            batch_size: 8,
            phase: Phase::EndToEnd,
            seed: 1,
        };
        let out = train(&train_set, Start::Resume(start.clone()), &config).unwrap();
        assert_eq!(out.checkpoint.params(), start.params());
    }

    #[test]
    fn heads_only_leaves_trunk_bit_identical() {
        let (train_set, _) = synthetic::four_class(0);
        let start = Checkpoint::init(small_spec(), 5);
        let config = TrainConfig {
            epochs: 2,
            phase: Phase::HeadsOnly,
            ..TrainConfig::default()
        };
        let out = train(&train_set, Start::Resume(start.clone()), &config).unwrap();
        assert_eq!(out.checkpoint.layer_params(0), start.layer_params(0));
        assert_ne!(out.checkpoint.layer_params(4), start.layer_params(4));
        assert_ne!(out.checkpoint.layer_params(6), start.layer_params(6));
    }

    #[test]
    fn same_seed_same_bytes() {
        let (train_set, _) = synthetic::four_class(0);
        let config = TrainConfig {
            epochs: 2,
            seed: 11,
            ..TrainConfig::default()
        };
        let a = train(&train_set, Start::Fresh(small_spec()), &config).unwrap();
        let b = train(&train_set, Start::Fresh(small_spec()), &config).unwrap();
        assert_eq!(a.checkpoint.to_bytes(), b.checkpoint.to_bytes());
        assert_eq!(a.log, b.log);
    }

    #[test]
    fn rejects_bad_inputs() {
        let (train_set, test_set) = synthetic::four_class(0);
        let fresh = || Start::Fresh(small_spec());
        let too_big = TrainConfig { batch_size: 81, ..TrainConfig::default() };
        assert!(train(&train_set, fresh(), &too_big).is_err());
        assert!(train(&test_set, fresh(), &TrainConfig::default()).is_err());
        let empty = LabeledDataset::new(vec![], train_set.class_names().to_vec(), Split::Train).unwrap();
        assert!(matches!(train(&empty, fresh(), &TrainConfig::default()), Err(Error::EmptyInput(_))));
        let ck = Checkpoint::init(small_spec(), 0);
        assert!(evaluate(&ck, &train_set).is_err());
        let empty_test = LabeledDataset::new(vec![], vec![], Split::Test).unwrap();
        assert!(matches!(evaluate(&ck, &empty_test), Err(Error::EmptyInput(_))));
    }

    #[test]
    fn divergence_is_reported() {
        let (train_set, _) = synthetic::four_class(0);
        let config = TrainConfig {
            learning_rate: 1e30,
            epochs: 5,
            ..TrainConfig::default()
        };
        let err = train(&train_set, Start::Fresh(small_spec()), &config).unwrap_err();
        assert!(matches!(err, Error::Divergence { .. }), "{err}");
    }

    #[test]
    fn phase_parses() {
        assert_eq!("heads_only".parse::<Phase>().unwrap(), Phase::HeadsOnly);
        assert_eq!("end_to_end".parse::<Phase>().unwrap(), Phase::EndToEnd);
        assert!("both".parse::<Phase>().is_err());
        assert_eq!(Phase::HeadsOnly.to_string(), "heads_only");
    }
}
