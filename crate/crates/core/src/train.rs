//! Optimization loop: batched contrastive training with Adam.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{self, Dataset, Split};
use crate::encoder::{EncoderModel, ModelConfig};
use crate::eval::{evaluate_retrieval, EvalContext, RetrievalReport};
use crate::objective::contrastive_loss_graph;
use crate::optim::{adam_step, AdamConfig, AdamState};
use crate::tape::Tape;
use crate::{Error, Result, Tensor};

/// Fully resolved training configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub steps: usize,
    pub batch_size: usize,
    pub optim: AdamConfig,
    pub seed: u64,
    /// Evaluate on the validation split every this many steps; 0 disables.
    pub eval_every: usize,
    pub eval_ks: Vec<usize>,
    /// Number of generated pairs before splitting.
    pub n_pairs: usize,
    /// Fraction of the train split kept (nested subsets per `data_seed`).
    pub train_fraction: f64,
    pub data_seed: u64,
    /// Checkpoint file name within the run directory.
    pub checkpoint_name: String,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.batch_size < 2 {
            return Err(Error::Config(format!(
                "batch_size: contrastive training needs N >= 2, got {}",
                self.batch_size
            )));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "train_fraction: must be in (0, 1], got {}",
                self.train_fraction
            )));
        }
        if self.n_pairs < 1 {
            return Err(Error::Config("n_pairs: must be >= 1".into()));
        }
        if self.eval_ks.is_empty() || self.eval_ks.contains(&0) {
            return Err(Error::Config(format!(
                "eval_ks: must be nonempty positive integers, got {:?}",
                self.eval_ks
            )));
        }
        if self.model.vocab_size < data::VOCAB_SIZE {
            return Err(Error::Config(format!(
                "vocab_size: generator emits {} symbols, configured {}",
                data::VOCAB_SIZE,
                self.model.vocab_size
            )));
        }
        if self.model.max_seq_len < data::CAPTION_LEN {
            return Err(Error::Config(format!(
                "max_seq_len: captions are {} tokens, configured {}",
                data::CAPTION_LEN,
                self.model.max_seq_len
            )));
        }
        if self.model.image_size != data::IMAGE_SIZE || self.model.channels != data::CHANNELS {
            return Err(Error::Config(format!(
                "image dims: generator renders {}x{}x{}, configured {}x{}x{}",
                data::CHANNELS,
                data::IMAGE_SIZE,
                data::IMAGE_SIZE,
                self.model.channels,
                self.model.image_size,
                self.model.image_size
            )));
        }
        Ok(())
    }
}

/// Generate and subsample the corpus this config trains on.
pub fn prepare_dataset(config: &TrainConfig) -> Result<Dataset> {
    let dataset = data::generate_dataset(config.n_pairs, config.data_seed)?;
    data::subsample(&dataset, config.train_fraction, config.data_seed)
}

/// Trained model plus the per-step loss trace and any validation reports.
pub struct TrainOutcome {
    pub model: EncoderModel,
    pub loss_trace: Vec<f32>,
    /// `(step, I2T, T2I)` at each periodic validation evaluation.
    pub val_reports: Vec<(usize, RetrievalReport, RetrievalReport)>,
}

/// Run `steps` batched optimization steps. Deterministic for a fixed config:
/// batch order, initialization and arithmetic are all seeded and
/// single-threaded. A non-finite loss aborts with a divergence error.
pub fn train(config: &TrainConfig, dataset: &Dataset) -> Result<TrainOutcome> {
    train_with_hash(config, dataset, String::new())
}

/// `train` with a config hash carried into validation reports.
pub fn train_with_hash(
    config: &TrainConfig,
    dataset: &Dataset,
    config_hash: String,
) -> Result<TrainOutcome> {
    config.validate()?;
    let train_ids = dataset.split_ids(Split::Train);
    if train_ids.is_empty() {
        return Err(Error::Input("train: dataset has no training examples".into()));
    }
    if train_ids.len() < config.batch_size {
        return Err(Error::Config(format!(
            "batch_size {} exceeds training split of {}",
            config.batch_size,
            train_ids.len()
        )));
    }

    let mut model = EncoderModel::init(config.model.clone(), config.seed)?;
    let shapes: Vec<Vec<usize>> = {
        let mut shapes = Vec::new();
        model.params.visit(&mut |_, t| shapes.push(t.shape().to_vec()));
        shapes
    };
    let mut state = AdamState::new(&shapes);

    let mut schedule = BatchSchedule::new(train_ids, config.seed);
    let mut loss_trace = Vec::with_capacity(config.steps);
    let mut val_reports = Vec::new();

    for step in 0..config.steps {
        let batch_ids = schedule.next_batch(config.batch_size);
        let images: Vec<Tensor> = batch_ids
            .iter()
            .map(|&id| dataset.example(id).image.clone())
            .collect();
        let captions: Vec<&[u32]> = batch_ids
            .iter()
            .map(|&id| dataset.example(id).caption.as_slice())
            .collect();

        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        let z_images = bound.forward_images(&mut tape, &images)?;
        let z_texts = bound.forward_texts(&mut tape, &captions)?;
        let loss = contrastive_loss_graph(&mut tape, z_images, z_texts, bound.params.log_tau)?;
        let loss_value = tape.value(loss).item();
        if !loss_value.is_finite() {
            return Err(Error::Divergence {
                step,
                msg: format!("loss became {loss_value}"),
            });
        }
        loss_trace.push(loss_value);
        tape.backward(loss)?;

        // Collect gradients in visit order; parameters without a path to the
        // loss (e.g. unused vocabulary rows) get zeros.
        let mut grads: Vec<Tensor> = Vec::with_capacity(shapes.len());
        bound.params.visit(&mut |_, &id| {
            grads.push(match tape.grad(id) {
                Some(g) => g.clone(),
                None => Tensor::zeros(tape.value(id).shape().to_vec()),
            });
        });
        drop(tape);
        let mut params = model.params.fields_mut_in_order();
        adam_step(&mut params, &grads, &mut state, &config.optim)?;

        if config.eval_every > 0 && (step + 1) % config.eval_every == 0 {
            let val = dataset.split_examples(Split::Val);
            if !val.is_empty() {
                let ctx = EvalContext {
                    seed: config.seed,
                    config_hash: config_hash.clone(),
                    train_fraction: config.train_fraction,
                };
                let (i2t, t2i) = evaluate_retrieval(&model, &val, &config.eval_ks, &ctx)?;
                val_reports.push((step + 1, i2t, t2i));
            }
        }
    }

    Ok(TrainOutcome {
        model,
        loss_trace,
        val_reports,
    })
}

/// Epoch-shuffled batch scheduler: a fresh deterministic permutation per
/// epoch, full batches only.
struct BatchSchedule {
    ids: Vec<u64>,
    cursor: usize,
    epoch: u64,
    seed: u64,
}

impl BatchSchedule {
    fn new(ids: &[u64], seed: u64) -> Self {
        let mut s = Self {
            ids: ids.to_vec(),
            cursor: 0,
            epoch: 0,
            seed,
        };
        s.reshuffle();
        s
    }

    fn reshuffle(&mut self) {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ crate::data::splitmix64(self.epoch));
        self.ids.sort_unstable();
        self.ids.shuffle(&mut rng);
        self.epoch += 1;
        self.cursor = 0;
    }

    fn next_batch(&mut self, n: usize) -> Vec<u64> {
        if self.cursor + n > self.ids.len() {
            self.reshuffle();
        }
        let batch = self.ids[self.cursor..self.cursor + n].to_vec();
        self.cursor += n;
        batch
    }
}
