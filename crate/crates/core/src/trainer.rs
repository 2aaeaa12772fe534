//! Training loop: batches of masked slices, the noise-prediction loss,
//! Adam updates and the parameter EMA.
//!
//! All randomness of a run (batch indices, timesteps, noise) comes from a
//! single ChaCha generator whose position is part of every [`Checkpoint`],
//! so a resumed run continues the exact same stream.

use alloc::string::String;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::{normal_vec, training_loss_on_tape, ConditionedBatch};
use crate::error::{bail, Result};
use crate::nn::Tape;
use crate::optim::{AdamConfig, AdamState, EmaState};
use crate::schedule::{NoiseSchedule, ScheduleParams};
use crate::tensor::Tensor;
use crate::unet::{DenoiserModel, UNetConfig};
use crate::volume::{select_slices, MaskedCase};

/// Stream id of the data/noise generator; weight init uses stream 0.
const DATA_STREAM: u64 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub steps: u64,
    pub checkpoint_every: u64,
    pub ema_rate: f64,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { batch_size: 8, steps: 3000, checkpoint_every: 500, ema_rate: 0.9999, adam: AdamConfig::default(), seed: 0 }
    }
}

/// Training slices of side `size`, stored flat.
#[derive(Debug, Clone)]
pub struct SliceDataset {
    size: usize,
    x0: Vec<f32>,
    mask: Vec<f32>,
}

impl SliceDataset {
    pub fn new(size: usize) -> Self {
        Self { size, x0: Vec::new(), mask: Vec::new() }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn len(&self) -> usize {
        self.x0.len() / (self.size * self.size)
    }

    pub fn is_empty(&self) -> bool {
        self.x0.is_empty()
    }

    /// Add one ground-truth slice with its mask. The mask must be binary and non-empty.
    pub fn push(&mut self, x0: &[f32], mask: &[f32]) -> Result<()> {
        let plane = self.size * self.size;
        if x0.len() != plane || mask.len() != plane {
            bail!(Shape, "slice must hold {}x{} values", self.size, self.size);
        }
        if mask.iter().any(|&m| m != 0.0 && m != 1.0) || !mask.contains(&1.0) {
            bail!(Domain, "training mask must be binary and non-empty");
        }
        self.x0.extend_from_slice(x0);
        self.mask.extend_from_slice(mask);
        Ok(())
    }

    /// Every non-empty-mask axial slice of every case. Cases must carry
    /// ground truth and have `size × size` slices.
    pub fn from_cases<'a>(size: usize, cases: impl IntoIterator<Item = &'a MaskedCase>) -> Result<Self> {
        let mut ds = Self::new(size);
        for case in cases {
            let [_, h, w] = case.mask.dims();
            if h != size || w != size {
                bail!(Shape, "case slices are {}x{}, model expects {}x{}", h, w, size, size);
            }
            for s in select_slices(case) {
                let Some(gt) = s.ground_truth else { bail!(Domain, "training case without ground truth") };
                ds.push(&gt, &s.mask)?;
            }
        }
        Ok(ds)
    }

    /// Gather items into a batch; baselines are derived by voiding.
    pub fn batch(&self, indices: &[usize]) -> Result<ConditionedBatch> {
        let plane = self.size * self.size;
        let mut x0 = Vec::with_capacity(indices.len() * plane);
        let mut mask = Vec::with_capacity(indices.len() * plane);
        for &i in indices {
            x0.extend_from_slice(&self.x0[i * plane..(i + 1) * plane]);
            mask.extend_from_slice(&self.mask[i * plane..(i + 1) * plane]);
        }
        let shape = [indices.len(), 1, self.size, self.size];
        ConditionedBatch::from_ground_truth(Tensor::new(&shape, x0)?, Tensor::new(&shape, mask)?)
    }
}

/// Restorable position of the run's random stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    fn capture(seed: u64, rng: &ChaCha8Rng) -> Self {
        Self { seed, stream: rng.get_stream(), word_pos: rng.get_word_pos() }
    }

    fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

/// Everything needed to resume training or to sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub unet: UNetConfig,
    pub schedule: ScheduleParams,
    pub train: TrainConfig,
    pub step: u64,
    pub rng: RngState,
    pub param_names: Vec<String>,
    pub params: Vec<Tensor>,
    pub ema: Vec<Tensor>,
    pub adam_first_moment: Vec<Tensor>,
    pub adam_second_moment: Vec<Tensor>,
}

impl Checkpoint {
    /// The denoiser carrying the EMA weights, as used for sampling.
    pub fn ema_model(&self) -> Result<DenoiserModel> {
        DenoiserModel::build(&self.unet, self.train.seed)?.with_weights(&self.ema)
    }

    pub fn raw_model(&self) -> Result<DenoiserModel> {
        DenoiserModel::build(&self.unet, self.train.seed)?.with_weights(&self.params)
    }
}

/// Progress reported by [`Trainer::train`].
pub enum TrainEvent<'a> {
    Step { step: u64, loss: f32 },
    Checkpoint(&'a Checkpoint),
}

pub struct Trainer {
    model: DenoiserModel,
    schedule: NoiseSchedule,
    adam: AdamState,
    ema: EmaState,
    rng: ChaCha8Rng,
    config: TrainConfig,
}

impl Trainer {
    pub fn new(unet: &UNetConfig, schedule: ScheduleParams, config: TrainConfig) -> Result<Self> {
        if config.batch_size == 0 {
            bail!(Config, "batch_size must be positive");
        }
        let model = DenoiserModel::build(unet, config.seed)?;
        let adam = AdamState::new(config.adam, model.params());
        let ema = EmaState::new(config.ema_rate, model.params())?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(DATA_STREAM);
        Ok(Self { model, schedule: schedule.build()?, adam, ema, rng, config })
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let model = ckpt.raw_model()?;
        let names: Vec<&str> = model.params().iter().map(|p| p.name.as_str()).collect();
        if names.len() != ckpt.param_names.len() || names.iter().zip(&ckpt.param_names).any(|(a, b)| a != b) {
            bail!(Config, "checkpoint parameter manifest does not match its network config");
        }
        let n = ckpt.params.len();
        if ckpt.ema.len() != n || ckpt.adam_first_moment.len() != n || ckpt.adam_second_moment.len() != n {
            bail!(Shape, "checkpoint state vectors disagree in length");
        }
        let adam = AdamState {
            config: ckpt.train.adam,
            step_count: ckpt.step,
            first_moment: ckpt.adam_first_moment.clone(),
            second_moment: ckpt.adam_second_moment.clone(),
        };
        let ema = EmaState { rate: ckpt.train.ema_rate, shadow: ckpt.ema.clone() };
        Ok(Self {
            model,
            schedule: ckpt.schedule.build()?,
            adam,
            ema,
            rng: ckpt.rng.restore(),
            config: ckpt.train.clone(),
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn step_count(&self) -> u64 {
        self.adam.step_count
    }

    pub fn model(&self) -> &DenoiserModel {
        &self.model
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn ema_model(&self) -> Result<DenoiserModel> {
        self.model.with_weights(&self.ema.shadow)
    }

    /// One optimisation step; returns the batch loss before the update.
    pub fn step(&mut self, data: &SliceDataset) -> Result<f32> {
        if data.is_empty() {
            bail!(Config, "training dataset is empty");
        }
        if data.size() != self.model.config().image_size {
            bail!(Shape, "dataset slices are {0}x{0}, model expects {1}x{1}", data.size(), self.model.config().image_size);
        }
        let n = self.config.batch_size;
        let t_max = self.schedule.timesteps();
        let indices: Vec<usize> = (0..n).map(|_| self.rng.random_range(0..data.len())).collect();
        let ts: Vec<usize> = (0..n).map(|_| self.rng.random_range(1..=t_max)).collect();
        let s = data.size();
        let eps = Tensor::new(&[n, 1, s, s], normal_vec(&mut self.rng, n * s * s))?;
        let batch = data.batch(&indices)?;

        let mut tape = Tape::new();
        let loss = training_loss_on_tape(&self.model, &mut tape, &batch, &ts, &eps, &self.schedule)?;
        let value = tape.value(loss).item()?;
        tape.backward(loss, self.model.params_mut())?;
        self.adam.step(self.model.params_mut())?;
        self.ema.update(self.model.params())?;
        Ok(value)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let params = self.model.params();
        Checkpoint {
            unet: self.model.config().clone(),
            schedule: self.schedule.params(),
            train: self.config.clone(),
            step: self.step_count(),
            rng: RngState::capture(self.config.seed, &self.rng),
            param_names: params.iter().map(|p| p.name.clone()).collect(),
            params: params.values(),
            ema: self.ema.shadow.clone(),
            adam_first_moment: self.adam.first_moment.clone(),
            adam_second_moment: self.adam.second_moment.clone(),
        }
    }

    /// Run until `step_count` reaches `config.steps`, reporting every step
    /// and a checkpoint every `checkpoint_every` steps plus one at the end.
    pub fn train(&mut self, data: &SliceDataset, mut on_event: impl FnMut(TrainEvent<'_>) -> Result<()>) -> Result<()> {
        if data.is_empty() {
            bail!(Config, "training dataset is empty");
        }
        let mut last_saved = None;
        while self.step_count() < self.config.steps {
            let loss = self.step(data)?;
            let step = self.step_count();
            on_event(TrainEvent::Step { step, loss })?;
            if self.config.checkpoint_every > 0 && step % self.config.checkpoint_every == 0 {
                on_event(TrainEvent::Checkpoint(&self.checkpoint()))?;
                last_saved = Some(step);
            }
        }
        if last_saved != Some(self.step_count()) {
            on_event(TrainEvent::Checkpoint(&self.checkpoint()))?;
        }
        Ok(())
    }
}
