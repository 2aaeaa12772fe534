//! Conditional noise-prediction U-Net.
//!
//! Input is the channel concatenation `noisy ⊕ baseline ⊕ mask`
//! (`[N, 3, S, S]`); output is the predicted noise `[N, 1, S, S]`.
//!
//! Architecture: an input convolution, an encoder of residual blocks with
//! stride-2 downsampling between levels, a middle pair of residual blocks, and a
//! mirrored decoder whose blocks consume the encoder activations through
//! skip concatenation. Every residual block receives the timestep
//! embedding through a per-block projection. Attention blocks follow the
//! residual blocks at every spatial size listed in
//! [`UNetConfig::attention_resolutions`], the middle included. The final
//! convolution starts at zero.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::nn::{timestep_embedding_batch, AttentionBlock, Conv2d, GroupNorm, Linear, ParamStore, Tape, Var};
use crate::tensor::Tensor;

pub const INPUT_CHANNELS: usize = 3;
pub const OUTPUT_CHANNELS: usize = 1;
const MAX_PERIOD: f64 = 10_000.0;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UNetConfig {
    pub base_channels: usize,
    pub channel_multipliers: Vec<usize>,
    pub res_blocks_per_level: usize,
    pub attention_resolutions: Vec<usize>,
    pub heads: usize,
    pub time_embed_dim: usize,
    pub input_channels: usize,
    pub output_channels: usize,
    pub image_size: usize,
}

impl UNetConfig {
    /// Small CPU-trainable network exercising every block type.
    pub fn desk() -> Self {
        Self {
            base_channels: 32,
            channel_multipliers: alloc::vec![1, 2, 2],
            res_blocks_per_level: 1,
            attention_resolutions: alloc::vec![16],
            heads: 1,
            time_embed_dim: 128,
            input_channels: INPUT_CHANNELS,
            output_channels: OUTPUT_CHANNELS,
            image_size: 32,
        }
    }

    /// 224×224 slices, 128 base channels, one attention head at the 16×
    /// downsampled level (14×14). Multipliers and block counts follow the
    /// usual improved-DDPM layout; they are not tuned to any particular
    /// parameter count.
    pub fn full_scale() -> Self {
        Self {
            base_channels: 128,
            channel_multipliers: alloc::vec![1, 1, 2, 3, 4],
            res_blocks_per_level: 2,
            attention_resolutions: alloc::vec![224 / 16],
            heads: 1,
            time_embed_dim: 512,
            input_channels: INPUT_CHANNELS,
            output_channels: OUTPUT_CHANNELS,
            image_size: 224,
        }
    }

    /// Spatial sizes reached by the encoder, outermost first.
    pub fn resolutions(&self) -> Vec<usize> {
        (0..self.channel_multipliers.len()).map(|l| self.image_size >> l).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems: Vec<String> = Vec::new();
        if self.input_channels != INPUT_CHANNELS {
            problems.push(format!("input_channels must be {INPUT_CHANNELS}, got {}", self.input_channels));
        }
        if self.output_channels != OUTPUT_CHANNELS {
            problems.push(format!("output_channels must be {OUTPUT_CHANNELS}, got {}", self.output_channels));
        }
        if self.channel_multipliers.is_empty() || self.channel_multipliers.contains(&0) {
            problems.push("channel_multipliers must be non-empty and positive".into());
        }
        if self.base_channels == 0 || self.image_size == 0 {
            problems.push("base_channels and image_size must be positive".into());
        }
        let levels = self.channel_multipliers.len().max(1);
        let factor = 1usize << (levels - 1);
        if self.image_size % factor != 0 {
            problems.push(format!("image_size {} not divisible by 2^{}", self.image_size, levels - 1));
        }
        let reached = self.resolutions();
        for r in &self.attention_resolutions {
            if !reached.contains(r) {
                problems.push(format!("attention resolution {r} not in reached sizes {reached:?}"));
            }
        }
        if self.time_embed_dim == 0 {
            problems.push("time_embed_dim must be positive".into());
        }
        if self.base_channels % 2 != 0 {
            problems.push("base_channels must be even (sinusoidal embedding width)".into());
        }
        if self.heads == 0 {
            problems.push("heads must be positive".into());
        }
        for m in &self.channel_multipliers {
            let ch = self.base_channels * m;
            if ch >= crate::nn::GROUP_NORM_GROUPS && ch % crate::nn::GROUP_NORM_GROUPS != 0 {
                problems.push(format!("{ch} channels not divisible into group-norm groups"));
            }
            if self.heads > 0 && self.attention_resolutions.iter().any(|_| ch % self.heads != 0) {
                problems.push(format!("{} heads do not divide {ch} channels", self.heads));
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            bail!(Config, "{}", problems.join("; "))
        }
    }
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self::desk()
    }
}

#[derive(Debug, Clone)]
struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv2d,
    emb: Linear,
    norm2: GroupNorm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
}

impl ResBlock {
    fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, cin: usize, cout: usize, temb: usize) -> Result<Self> {
        Ok(Self {
            norm1: GroupNorm::new(store, &format!("{name}.norm1"), cin)?,
            conv1: Conv2d::new(store, rng, &format!("{name}.conv1"), cin, cout, 3, 1),
            emb: Linear::new(store, rng, &format!("{name}.emb"), temb, cout),
            norm2: GroupNorm::new(store, &format!("{name}.norm2"), cout)?,
            conv2: Conv2d::new(store, rng, &format!("{name}.conv2"), cout, cout, 3, 1),
            skip: (cin != cout).then(|| Conv2d::new(store, rng, &format!("{name}.skip"), cin, cout, 1, 1)),
        })
    }

    fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, emb: Var) -> Result<Var> {
        let h = self.norm1.forward(tape, store, x)?;
        let h = tape.silu(h);
        let h = self.conv1.forward(tape, store, h)?;
        let e = tape.silu(emb);
        let e = self.emb.forward(tape, store, e)?;
        let h = tape.add_channel_bias(h, e)?;
        let h = self.norm2.forward(tape, store, h)?;
        let h = tape.silu(h);
        let h = self.conv2.forward(tape, store, h)?;
        let skip = match &self.skip {
            Some(conv) => conv.forward(tape, store, x)?,
            None => x,
        };
        tape.add(skip, h)
    }
}

#[derive(Debug, Clone)]
enum Layer {
    Conv(Conv2d),
    Res(ResBlock),
    Attn(AttentionBlock),
    /// Nearest-neighbour 2× followed by a 3×3 convolution.
    Up(Conv2d),
}

impl Layer {
    fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, emb: Var) -> Result<Var> {
        match self {
            Layer::Conv(c) => c.forward(tape, store, x),
            Layer::Res(r) => r.forward(tape, store, x, emb),
            Layer::Attn(a) => a.forward(tape, store, x),
            Layer::Up(c) => {
                let u = tape.upsample2x(x)?;
                c.forward(tape, store, u)
            }
        }
    }
}

fn run(layers: &[Layer], tape: &mut Tape, store: &ParamStore, mut x: Var, emb: Var) -> Result<Var> {
    for l in layers {
        x = l.forward(tape, store, x, emb)?;
    }
    Ok(x)
}

/// Parameters plus the layer graph of the denoiser.
#[derive(Debug, Clone)]
pub struct DenoiserModel {
    config: UNetConfig,
    store: ParamStore,
    time_in: Linear,
    time_out: Linear,
    /// Each entry produces one skip activation.
    encoder: Vec<Vec<Layer>>,
    middle: Vec<Layer>,
    /// Each entry first concatenates one skip activation.
    decoder: Vec<Vec<Layer>>,
    out_norm: GroupNorm,
    out_conv: Conv2d,
}

impl DenoiserModel {
    /// Deterministic construction: same config and seed give bit-identical weights.
    pub fn build(config: &UNetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rng = &mut rng;
        let mut store = ParamStore::new();
        let s = &mut store;
        let base = config.base_channels;
        let temb = config.time_embed_dim;
        let time_in = Linear::new(s, rng, "time.in", base, temb);
        let time_out = Linear::new(s, rng, "time.out", temb, temb);

        let mut encoder: Vec<Vec<Layer>> =
            alloc::vec![alloc::vec![Layer::Conv(Conv2d::new(s, rng, "input", config.input_channels, base, 3, 1))]];
        let mut skip_channels = alloc::vec![base];
        let mut ch = base;
        let mut res = config.image_size;
        let levels = config.channel_multipliers.len();
        for (level, &mult) in config.channel_multipliers.iter().enumerate() {
            for i in 0..config.res_blocks_per_level {
                let name = format!("down.{level}.{i}");
                let mut block = alloc::vec![Layer::Res(ResBlock::new(s, rng, &name, ch, base * mult, temb)?)];
                ch = base * mult;
                if config.attention_resolutions.contains(&res) {
                    block.push(Layer::Attn(AttentionBlock::new(s, rng, &format!("{name}.attn"), ch, config.heads)?));
                }
                encoder.push(block);
                skip_channels.push(ch);
            }
            if level + 1 < levels {
                let conv = Conv2d::new(s, rng, &format!("down.{level}.downsample"), ch, ch, 3, 2);
                encoder.push(alloc::vec![Layer::Conv(conv)]);
                skip_channels.push(ch);
                res /= 2;
            }
        }

        let mut middle = alloc::vec![Layer::Res(ResBlock::new(s, rng, "mid.0", ch, ch, temb)?)];
        if config.attention_resolutions.contains(&res) {
            middle.push(Layer::Attn(AttentionBlock::new(s, rng, "mid.attn", ch, config.heads)?));
        }
        middle.push(Layer::Res(ResBlock::new(s, rng, "mid.1", ch, ch, temb)?));

        let mut decoder = Vec::new();
        for (level, &mult) in config.channel_multipliers.iter().enumerate().rev() {
            for i in 0..=config.res_blocks_per_level {
                let name = format!("up.{level}.{i}");
                let skip = skip_channels.pop().expect("one skip per decoder block");
                let mut block = alloc::vec![Layer::Res(ResBlock::new(s, rng, &name, ch + skip, base * mult, temb)?)];
                ch = base * mult;
                if config.attention_resolutions.contains(&res) {
                    block.push(Layer::Attn(AttentionBlock::new(s, rng, &format!("{name}.attn"), ch, config.heads)?));
                }
                if level > 0 && i == config.res_blocks_per_level {
                    block.push(Layer::Up(Conv2d::new(s, rng, &format!("up.{level}.upsample"), ch, ch, 3, 1)));
                    res *= 2;
                }
                decoder.push(block);
            }
        }
        debug_assert!(skip_channels.is_empty());

        let out_norm = GroupNorm::new(s, "out.norm", ch)?;
        let out_conv = Conv2d::zeroed(s, "out.conv", ch, config.output_channels, 3);
        Ok(Self { config: config.clone(), store, time_in, time_out, encoder, middle, decoder, out_norm, out_conv })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn num_parameters(&self) -> usize {
        self.store.num_scalars()
    }

    /// Copy of this model carrying different weights (e.g. the EMA shadow).
    pub fn with_weights(&self, values: &[Tensor]) -> Result<Self> {
        let mut m = self.clone();
        m.store.set_values(values)?;
        Ok(m)
    }

    /// Record one forward pass. `input` is `[N, 3, S, S]`, `timesteps` has
    /// one entry per batch item; the output is `[N, 1, S, S]`.
    pub fn forward(&self, tape: &mut Tape, input: Var, timesteps: &[usize]) -> Result<Var> {
        let (n, c, h, w) = tape.value(input).dims4()?;
        let size = self.config.image_size;
        if c != self.config.input_channels || h != size || w != size {
            bail!(Shape, "denoiser expects [N, {}, {size}, {size}], got {:?}", self.config.input_channels, tape.shape(input));
        }
        if timesteps.len() != n {
            bail!(Shape, "{} timesteps for a batch of {}", timesteps.len(), n);
        }
        let store = &self.store;
        let sinus = timestep_embedding_batch(timesteps, self.config.base_channels, MAX_PERIOD)?;
        let sinus = tape.constant(sinus);
        let emb = self.time_in.forward(tape, store, sinus)?;
        let emb = tape.silu(emb);
        let emb = self.time_out.forward(tape, store, emb)?;

        let mut skips = Vec::with_capacity(self.encoder.len());
        let mut x = input;
        for block in &self.encoder {
            x = run(block, tape, store, x, emb)?;
            skips.push(x);
        }
        x = run(&self.middle, tape, store, x, emb)?;
        for block in &self.decoder {
            let skip = skips.pop().expect("encoder and decoder are built symmetric");
            let cat = tape.concat(&[x, skip])?;
            x = run(block, tape, store, cat, emb)?;
        }
        let x = self.out_norm.forward(tape, store, x)?;
        let x = tape.silu(x);
        self.out_conv.forward(tape, store, x)
    }

    /// Untaped convenience forward.
    pub fn predict(&self, input: &Tensor, timesteps: &[usize]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let x = tape.constant(input.clone());
        let y = self.forward(&mut tape, x, timesteps)?;
        Ok(tape.value(y).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    pub(crate) fn tiny() -> UNetConfig {
        UNetConfig {
            base_channels: 4,
            channel_multipliers: alloc::vec![1, 2],
            res_blocks_per_level: 1,
            attention_resolutions: alloc::vec![4],
            heads: 1,
            time_embed_dim: 8,
            input_channels: 3,
            output_channels: 1,
            image_size: 8,
        }
    }

    fn random_input(n: usize, s: usize, seed: u64) -> Tensor {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(&[n, 3, s, s], |_| r.random_range(-1.0..1.0))
    }

    #[test]
    fn same_seed_same_weights() {
        let a = DenoiserModel::build(&tiny(), 5).unwrap();
        let b = DenoiserModel::build(&tiny(), 5).unwrap();
        for (p, q) in a.params().iter().zip(b.params().iter()) {
            assert_eq!(p.name, q.name);
            assert_eq!(p.value, q.value);
        }
        let c = DenoiserModel::build(&tiny(), 6).unwrap();
        assert_ne!(a.params().iter().next().unwrap().value, c.params().iter().next().unwrap().value);
    }

    #[test]
    fn fresh_model_predicts_zero() {
        let m = DenoiserModel::build(&tiny(), 1).unwrap();
        let y = m.predict(&random_input(2, 8, 3), &[1, 7]).unwrap();
        assert_eq!(y.shape(), &[2, 1, 8, 8]);
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rejects_wrong_input_shape() {
        let m = DenoiserModel::build(&tiny(), 1).unwrap();
        assert!(m.predict(&Tensor::zeros(&[1, 2, 8, 8]), &[1]).is_err());
        assert!(m.predict(&Tensor::zeros(&[1, 3, 16, 16]), &[1]).is_err());
        assert!(m.predict(&Tensor::zeros(&[2, 3, 8, 8]), &[1]).is_err());
    }

    #[test]
    fn config_validation_lists_violations() {
        let mut c = tiny();
        c.input_channels = 2;
        c.attention_resolutions = alloc::vec![3];
        let err = c.validate().unwrap_err();
        let msg = alloc::format!("{err}");
        assert!(msg.contains("input_channels"), "{msg}");
        assert!(msg.contains("attention resolution 3"), "{msg}");
        let mut c = tiny();
        c.image_size = 6;
        c.channel_multipliers = alloc::vec![1, 2, 2];
        assert!(c.validate().is_err());
    }

    #[test]
    fn full_scale_config_constructs() {
        let cfg = UNetConfig::full_scale();
        cfg.validate().unwrap();
        let m = DenoiserModel::build(&cfg, 0).unwrap();
        assert!(m.num_parameters() > 10_000_000);
    }
}
