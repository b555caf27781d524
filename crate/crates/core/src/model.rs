//! The full set of networks: codec, conditioning encoders and denoiser.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::codec::{Codec, CodecConfig};
use crate::conditioning::encoders::{BackgroundEncoder, IdentityEmbedder, PoseExtractor, ReferenceNet};
use crate::diffusion::schedule::{NoiseSchedule, ScheduleConfig};
use crate::diffusion::unet::{Denoiser, UNetDims, LEVELS};
use crate::error::{Error, Result};
use crate::nn::{checksum_hex, ParamStore};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Side of the square frames in pixels.
    pub image_size: usize,
    pub codec: CodecConfig,
    pub channels: [usize; LEVELS],
    pub heads: usize,
    pub time_dim: usize,
    pub pose_channels: usize,
    pub identity_tokens: usize,
    pub identity_dim: usize,
    /// Weight of the background-key term in decoding cross-attention.
    pub lambda: f64,
    pub schedule: ScheduleConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            codec: CodecConfig::default(),
            channels: [32, 48, 64],
            heads: 2,
            time_dim: 64,
            pose_channels: 16,
            identity_tokens: 4,
            identity_dim: 64,
            lambda: 1.0,
            schedule: ScheduleConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.codec.validate()?;
        let s = self.image_size;
        let lat_div = self.codec.scale_factor << (LEVELS - 1);
        if s == 0 || s % lat_div != 0 || s % 8 != 0 {
            return Err(Error::invalid(format!("image size {s} must be a positive multiple of {}", lat_div.max(8))));
        }
        if self.heads == 0 {
            return Err(Error::invalid("head count must be positive"));
        }
        if self.channels.iter().any(|&c| c == 0 || c % self.heads != 0) || self.pose_channels % self.heads != 0 {
            return Err(Error::invalid("channel widths must be positive multiples of the head count"));
        }
        if self.time_dim < 2 || self.time_dim % 2 != 0 {
            return Err(Error::invalid("time embedding width must be even"));
        }
        if self.identity_tokens == 0 || self.identity_dim == 0 {
            return Err(Error::invalid("identity embedding needs K >= 1 tokens of positive width"));
        }
        if !self.lambda.is_finite() {
            return Err(Error::invalid("lambda must be finite"));
        }
        self.schedule.build().map(|_| ())
    }

    pub fn latent_size(&self) -> usize {
        self.image_size / self.codec.scale_factor
    }

    pub fn dims(&self) -> UNetDims {
        UNetDims {
            latent_channels: self.codec.latent_channels,
            pose_channels: self.pose_channels,
            channels: self.channels,
            heads: self.heads,
            time_dim: self.time_dim,
            identity_dim: self.identity_dim,
        }
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        checksum_hex(&Sha256::digest(&json))
    }
}

#[derive(Debug, Clone)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub store: ParamStore<T>,
    pub pose: PoseExtractor,
    pub reference: ReferenceNet,
    pub background: BackgroundEncoder,
    pub identity: IdentityEmbedder,
    pub denoiser: Denoiser,
    pub codec: Codec<T>,
    pub schedule: NoiseSchedule,
    /// Last completed training phase (0 when untrained or base-trained).
    pub trained_phase: u8,
}

impl<T: Scalar> Model<T> {
    /// Fresh networks with a fresh (untrained) codec.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let codec = Codec::new(config.codec.clone(), seed ^ 0xc0dec)?;
        Self::with_codec(config, codec, seed)
    }

    /// Fresh networks around an existing codec. The reference network
    /// starts as a copy of the denoiser's down path.
    pub fn with_codec(config: ModelConfig, codec: Codec<T>, seed: u64) -> Result<Self> {
        config.validate()?;
        if codec.config != config.codec {
            return Err(Error::invalid("codec configuration differs from the model's"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let dims = config.dims();
        let denoiser = Denoiser::new(&mut store, dims, &mut rng);
        let reference = ReferenceNet::new(&mut store, dims, &mut rng);
        let pose = PoseExtractor::new(&mut store, config.codec.scale_factor, config.pose_channels, config.heads, &mut rng);
        let background = BackgroundEncoder::new(&mut store, dims, &mut rng);
        let identity = IdentityEmbedder::new(&mut store, config.identity_tokens, config.identity_dim, config.heads, &mut rng);
        store.copy_prefix("denoiser.", "reference.")?;
        let schedule = config.schedule.build()?;
        Ok(Self {
            config,
            store,
            pose,
            reference,
            background,
            identity,
            denoiser,
            codec,
            schedule,
            trained_phase: 0,
        })
    }

    pub fn lambda(&self) -> T {
        T::c(self.config.lambda)
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            store: self.store.cast(),
            pose: self.pose.clone(),
            reference: self.reference.clone(),
            background: self.background.clone(),
            identity: self.identity.clone(),
            denoiser: self.denoiser.clone(),
            codec: self.codec.cast(),
            schedule: self.schedule.clone(),
            trained_phase: self.trained_phase,
        }
    }
}
