use super::CycleGanError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GeneratorConfig {
    pub base_channels: usize,
    pub n_res_blocks: usize,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl GeneratorConfig {
    pub fn desk() -> Self {
        Self {
            base_channels: 16,
            n_res_blocks: 9,
            in_channels: 1,
            out_channels: 1,
        }
    }

    pub fn full() -> Self {
        Self {
            base_channels: 64,
            ..Self::desk()
        }
    }

    /// Entry conv and two downsampling convs, two per residual block, two
    /// upsampling convs and the exit conv.
    pub fn expected_conv_layers(&self) -> usize {
        3 + 2 * self.n_res_blocks + 3
    }
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self::desk()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DiscriminatorConfig {
    pub base_channels: usize,
    pub in_channels: usize,
}

impl DiscriminatorConfig {
    pub const CONV_LAYERS: usize = 5;

    pub fn desk() -> Self {
        Self {
            base_channels: 16,
            in_channels: 1,
        }
    }

    pub fn full() -> Self {
        Self {
            base_channels: 64,
            in_channels: 1,
        }
    }
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self::desk()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub lambda_cycle: f64,
    /// Multiplies `lambda_cycle`; 0 disables the identity term.
    pub lambda_identity: f64,
    pub pool_size: usize,
    pub seed: u64,
}

impl TrainConfig {
    pub fn desk() -> Self {
        Self {
            epochs: 60,
            lr: 2e-4,
            batch_size: 1,
            lambda_cycle: 10.0,
            lambda_identity: 0.0,
            pool_size: 50,
            seed: 0,
        }
    }

    pub fn full() -> Self {
        Self {
            epochs: 200,
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<(), CycleGanError> {
        if self.epochs == 0 || !self.epochs.is_multiple_of(2) {
            return Err(CycleGanError::BadConfig("epochs must be even and positive"));
        }
        if self.batch_size == 0 {
            return Err(CycleGanError::BadConfig("batch_size must be >= 1"));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(CycleGanError::BadConfig("lr must be finite and >= 0"));
        }
        if !(self.lambda_cycle >= 0.0 && self.lambda_identity >= 0.0) {
            return Err(CycleGanError::BadConfig("loss weights must be >= 0"));
        }
        Ok(())
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk()
    }
}
