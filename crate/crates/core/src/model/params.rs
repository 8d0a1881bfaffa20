use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Architecture and mode switches of the segmentation network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub height: usize,
    pub width: usize,
    /// Embedding channels `C`.
    pub channels: usize,
    /// Encoder downscale factor `s` (a power of two).
    pub downscale: usize,
    /// Latent dimension `L`.
    pub latent_dim: usize,
    /// Dropout probability used by the dropout baseline.
    pub dropout_p: f64,
    pub freeze_image_encoder: bool,
    pub freeze_decoder: bool,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            channels: 64,
            downscale: 8,
            latent_dim: 6,
            dropout_p: 0.5,
            freeze_image_encoder: false,
            freeze_decoder: false,
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    /// Small configuration used for gradient checking.
    pub fn tiny() -> Self {
        Self { height: 16, width: 16, channels: 8, latent_dim: 2, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.downscale;
        if s < 2 || !s.is_power_of_two() {
            return Err(Error::Validation(format!("downscale must be a power of two >= 2, got {s}")));
        }
        if self.height == 0 || self.width == 0 || self.height % s != 0 || self.width % s != 0 {
            return Err(Error::Validation(format!(
                "image {}x{} must be non-empty and divisible by downscale {s}",
                self.height, self.width
            )));
        }
        if self.channels % 2 != 0 || self.channels % s != 0 || self.channels < s {
            return Err(Error::Validation(format!(
                "channels {} must be even and a multiple of downscale {s}",
                self.channels
            )));
        }
        if self.latent_dim == 0 {
            return Err(Error::Validation("latent_dim must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::Validation(format!("dropout_p must be in [0, 1), got {}", self.dropout_p)));
        }
        Ok(())
    }

    pub fn stages(&self) -> usize {
        self.downscale.trailing_zeros() as usize
    }

    pub fn grid_h(&self) -> usize {
        self.height / self.downscale
    }

    pub fn grid_w(&self) -> usize {
        self.width / self.downscale
    }

    /// Channels of the upsampled mask features.
    pub fn mask_channels(&self) -> usize {
        self.channels / self.downscale
    }

    /// Encoder output channels after stage `i`.
    pub(crate) fn encoder_channels(&self, i: usize) -> usize {
        self.channels >> (self.stages() - 1 - i)
    }
}

/// Which part of the network a tensor belongs to. Used for freezing.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamGroup {
    ImageEncoder,
    PromptEncoder,
    Prior,
    Posterior,
    Projector,
    Decoder,
}

impl ParamGroup {
    pub fn of(name: &str) -> Option<Self> {
        let prefix = name.split('.').next()?;
        Some(match prefix {
            "encoder" => Self::ImageEncoder,
            "prompt" => Self::PromptEncoder,
            "prior" => Self::Prior,
            "posterior" => Self::Posterior,
            "projector" => Self::Projector,
            "decoder" => Self::Decoder,
            _ => return None,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub tensor: Tensor,
    /// `false` for fixed buffers such as the Fourier feature matrix.
    pub trainable: bool,
}

/// All tensors of the network plus its configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    config: ModelConfig,
    params: Vec<Param>,
    index: BTreeMap<String, usize>,
}

impl ModelParams {
    /// Freshly initialized network, deterministic in `config.init_seed`.
    pub fn init(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut b = Builder::new(config.init_seed);
        let c = config.channels;
        let l = config.latent_dim;

        let mut c_prev = 1;
        for i in 0..config.stages() {
            let c_out = config.encoder_channels(i);
            b.weight(&format!("encoder.conv{i}.w"), &[c_out, c_prev * 9], c_prev * 9, 1.0);
            b.zeros(&format!("encoder.conv{i}.b"), &[1, c_out]);
            c_prev = c_out;
        }
        b.weight("encoder.neck.w", &[c, c], c, 1.0);
        b.zeros("encoder.neck.b", &[1, c]);

        b.buffer_normal("prompt.pe_gaussian", &[2, c / 2], 1.0);
        b.linear("prompt.proj", c, c, 1.0);
        b.weight("prompt.corner0", &[1, c], 1, 0.5);
        b.weight("prompt.corner1", &[1, c], 1, 0.5);
        b.weight("prompt.no_mask", &[1, c], 1, 0.5);

        b.linear("prior.fc1", c, c, 1.0);
        b.linear("prior.fc2", c, 2 * l, 0.1);
        b.linear("posterior.pix", c + 1, c, 1.0);
        b.linear("posterior.fc1", c, c, 1.0);
        b.linear("posterior.fc2", c, 2 * l, 0.1);

        b.linear("projector.fc1", l, c, 1.0);
        b.zeros("projector.fc2.w", &[c, c]);
        b.zeros("projector.fc2.b", &[1, c]);

        b.weight("decoder.output_token", &[1, c], 1, 0.5);
        for blk in 0..DECODER_BLOCKS {
            for attn in ["self_attn", "t2i", "i2t"] {
                b.attention(&format!("decoder.block{blk}.{attn}"), c);
            }
            for n in 1..=4 {
                b.norm(&format!("decoder.block{blk}.norm{n}"), c);
            }
            b.linear(&format!("decoder.block{blk}.mlp.fc1"), c, 2 * c, 1.0);
            b.linear(&format!("decoder.block{blk}.mlp.fc2"), 2 * c, c, 1.0);
        }
        b.attention("decoder.final_attn", c);
        b.norm("decoder.final_norm", c);
        let mut c_up = c;
        for i in 0..config.stages() {
            b.weight(&format!("decoder.up{i}.w"), &[c_up, (c_up / 2) * 4], c_up, 1.0);
            b.zeros(&format!("decoder.up{i}.b"), &[1, c_up / 2]);
            c_up /= 2;
        }
        b.linear("decoder.hyper.fc1", c, c, 1.0);
        b.linear("decoder.hyper.fc2", c, config.mask_channels(), 1.0);

        Ok(Self::from_parts(config, b.params))
    }

    pub(crate) fn from_parts(config: ModelConfig, params: Vec<Param>) -> Self {
        let index = params.iter().enumerate().map(|(i, p)| (p.name.clone(), i)).collect();
        Self { config, params, index }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn config_mut(&mut self) -> &mut ModelConfig {
        &mut self.config
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index_of(name).map(|i| &self.params[i].tensor)
    }

    pub fn tensor_mut(&mut self, i: usize) -> &mut Tensor {
        &mut self.params[i].tensor
    }

    pub fn num_trainable(&self) -> usize {
        self.params.iter().filter(|p| p.trainable).map(|p| p.tensor.numel()).sum()
    }

    /// Whether the optimizer may update parameter `i` under the current config.
    pub fn is_updatable(&self, i: usize) -> bool {
        let p = &self.params[i];
        if !p.trainable {
            return false;
        }
        match ParamGroup::of(&p.name) {
            Some(ParamGroup::Decoder) => !self.config.freeze_decoder,
            Some(ParamGroup::ImageEncoder) => !self.config.freeze_image_encoder,
            _ => true,
        }
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|p| p.tensor.is_finite())
    }
}

pub(crate) const DECODER_BLOCKS: usize = 2;

struct Builder {
    rng: ChaCha8Rng,
    params: Vec<Param>,
}

impl Builder {
    fn new(seed: u64) -> Self {
        Self { rng: ChaCha8Rng::seed_from_u64(seed), params: Vec::new() }
    }

    fn push(&mut self, name: &str, shape: &[usize], data: Vec<f64>, trainable: bool) {
        let tensor = Tensor::new(shape.to_vec(), data).expect("builder shape");
        self.params.push(Param { name: name.to_string(), tensor, trainable });
    }

    /// LeCun-normal weight scaled by `gain`.
    fn weight(&mut self, name: &str, shape: &[usize], fan_in: usize, gain: f64) {
        let std = gain / (fan_in as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("positive std");
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| normal.sample(&mut self.rng)).collect();
        self.push(name, shape, data, true);
    }

    fn buffer_normal(&mut self, name: &str, shape: &[usize], std: f64) {
        let normal = Normal::new(0.0, std).expect("positive std");
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| normal.sample(&mut self.rng)).collect();
        self.push(name, shape, data, false);
    }

    fn zeros(&mut self, name: &str, shape: &[usize]) {
        let n = shape.iter().product();
        self.push(name, shape, vec![0.0; n], true);
    }

    fn ones(&mut self, name: &str, shape: &[usize]) {
        let n = shape.iter().product();
        self.push(name, shape, vec![1.0; n], true);
    }

    fn linear(&mut self, prefix: &str, d_in: usize, d_out: usize, gain: f64) {
        self.weight(&format!("{prefix}.w"), &[d_in, d_out], d_in, gain);
        self.zeros(&format!("{prefix}.b"), &[1, d_out]);
    }

    fn attention(&mut self, prefix: &str, c: usize) {
        for p in ["q", "k", "v", "o"] {
            self.linear(&format!("{prefix}.{p}"), c, c, 1.0);
        }
    }

    fn norm(&mut self, prefix: &str, c: usize) {
        self.ones(&format!("{prefix}.g"), &[1, c]);
        self.zeros(&format!("{prefix}.b"), &[1, c]);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_deterministic_and_finite() {
        let a = ModelParams::init(ModelConfig::default()).unwrap();
        let b = ModelParams::init(ModelConfig::default()).unwrap();
        assert_eq!(a, b);
        assert!(a.all_finite());
        let other = ModelParams::init(ModelConfig { init_seed: 1, ..ModelConfig::default() }).unwrap();
        assert_ne!(a, other);
    }

    #[test]
    fn projector_output_layer_starts_at_zero() {
        let p = ModelParams::init(ModelConfig::tiny()).unwrap();
        assert!(p.get("projector.fc2.w").unwrap().data().iter().all(|&v| v == 0.0));
        assert!(p.get("projector.fc2.b").unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn every_tensor_has_a_group() {
        let p = ModelParams::init(ModelConfig::tiny()).unwrap();
        for param in p.params() {
            assert!(ParamGroup::of(&param.name).is_some(), "{}", param.name);
        }
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let bad = [
            ModelConfig { downscale: 6, ..ModelConfig::default() },
            ModelConfig { height: 60, ..ModelConfig::default() },
            ModelConfig { channels: 4, ..ModelConfig::default() },
            ModelConfig { latent_dim: 0, ..ModelConfig::default() },
            ModelConfig { dropout_p: 1.0, ..ModelConfig::default() },
        ];
        for cfg in bad {
            assert!(ModelParams::init(cfg).is_err());
        }
    }

    #[test]
    fn freeze_flags_gate_updates() {
        let mut p = ModelParams::init(ModelConfig::tiny()).unwrap();
        let dec = p.index_of("decoder.hyper.fc1.w").unwrap();
        let enc = p.index_of("encoder.neck.w").unwrap();
        let pe = p.index_of("prompt.pe_gaussian").unwrap();
        assert!(p.is_updatable(dec) && p.is_updatable(enc) && !p.is_updatable(pe));
        p.config_mut().freeze_decoder = true;
        assert!(!p.is_updatable(dec) && p.is_updatable(enc));
    }
}
