//! Base forecasters mapping an input window `[B, m_in, 3]` to a scour-depth
//! forecast `[B, m_out]`.
//!
//! FLOP counts follow fixed per-layer formulas, counting one multiply and
//! one add per multiply-accumulate:
//! dense `2·in·out`, convolution `2·k_h·k_w·C_in·C_out·H_out·W_out`, and one
//! LSTM step `2·4h·(i + h)`. Elementwise work (activations, normalization,
//! the NLinear subtract/re-add) is not counted.

mod checkpoint;
mod cnn;
mod lstm;
mod nlinear;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use checkpoint::{Block, Checkpoint, CHECKPOINT_MAGIC};

use crate::autodiff::{AutodiffError, BatchStats, Tape, Tensor, Var};

/// Running-statistics momentum for batch normalization.
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("input shape {got:?} does not match expected {expected:?}")]
    Shape {
        got: Vec<usize>,
        expected: Vec<usize>,
    },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Architecture {
    NLinear,
    Lstm,
    Cnn,
}

impl Architecture {
    pub fn label(self) -> &'static str {
        match self {
            Self::NLinear => "nlinear",
            Self::Lstm => "lstm",
            Self::Cnn => "cnn",
        }
    }

    pub fn display_name(self) -> &'static str {
        match self {
            Self::NLinear => "NLinear",
            Self::Lstm => "LSTM",
            Self::Cnn => "CNN",
        }
    }

    pub fn from_label(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "nlinear" => Some(Self::NLinear),
            "lstm" => Some(Self::Lstm),
            "cnn" => Some(Self::Cnn),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelConfig {
    pub architecture: Architecture,
    pub m_in: usize,
    pub m_out: usize,
    pub n_features: usize,
    pub hidden: usize,
    pub cnn_channels: (usize, usize),
    pub cnn_kernel: usize,
    pub cnn_padding: usize,
}

impl ModelConfig {
    pub fn new(architecture: Architecture) -> Self {
        Self {
            architecture,
            m_in: 168,
            m_out: 168,
            n_features: 3,
            hidden: 128,
            cnn_channels: (128, 256),
            cnn_kernel: 5,
            cnn_padding: 2,
        }
    }

    /// Small configuration used by gradient checks.
    pub fn miniature(architecture: Architecture) -> Self {
        Self {
            m_in: 4,
            m_out: 3,
            hidden: 3,
            cnn_channels: (2, 3),
            cnn_kernel: 3,
            cnn_padding: 1,
            ..Self::new(architecture)
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::Config(m.into()));
        if self.m_in == 0 || self.m_out == 0 {
            return bad("m_in and m_out must be positive");
        }
        if self.n_features == 0 {
            return bad("n_features must be at least 1");
        }
        match self.architecture {
            Architecture::NLinear => {}
            Architecture::Lstm if self.hidden == 0 => return bad("hidden must be positive"),
            Architecture::Cnn => {
                let (c1, c2) = self.cnn_channels;
                if c1 == 0 || c2 == 0 || self.cnn_kernel == 0 {
                    return bad("cnn channels and kernel must be positive");
                }
                let (h, w) = self.cnn_feature_map();
                if h == 0 || w == 0 || self.m_in + 2 * self.cnn_padding < self.cnn_kernel {
                    return bad("cnn kernel does not fit the padded input");
                }
                let (h1, w1) = (
                    self.m_in + 2 * self.cnn_padding + 1 - self.cnn_kernel,
                    self.n_features + 2 * self.cnn_padding + 1 - self.cnn_kernel,
                );
                if h1 + 2 * self.cnn_padding < self.cnn_kernel
                    || w1 + 2 * self.cnn_padding < self.cnn_kernel
                {
                    return bad("cnn kernel does not fit the second layer");
                }
            }
            _ => {}
        }
        Ok(())
    }

    /// Height and width of the feature map after both convolutions.
    pub fn cnn_feature_map(&self) -> (usize, usize) {
        let out = |n: usize| (n + 2 * self.cnn_padding + 1).saturating_sub(self.cnn_kernel);
        (out(out(self.m_in)), out(out(self.n_features)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Init {
    Uniform(f64),
    Const(f64),
}

#[derive(Debug, Clone, PartialEq)]
struct ParamSpec {
    name: String,
    shape: Vec<usize>,
    trainable: bool,
    init: Init,
}

impl ParamSpec {
    fn uniform(name: &str, shape: &[usize], fan_in: usize) -> Self {
        Self {
            name: name.into(),
            shape: shape.to_vec(),
            trainable: true,
            init: Init::Uniform(1.0 / (fan_in as f64).sqrt()),
        }
    }

    fn constant(name: &str, shape: &[usize], value: f64, trainable: bool) -> Self {
        Self {
            name: name.into(),
            shape: shape.to_vec(),
            trainable,
            init: Init::Const(value),
        }
    }
}

fn specs(config: &ModelConfig) -> Vec<ParamSpec> {
    match config.architecture {
        Architecture::NLinear => nlinear::specs(config),
        Architecture::Lstm => lstm::specs(config),
        Architecture::Cnn => cnn::specs(config),
    }
}

/// Named tensor owned by a model. Non-trainable parameters hold running
/// statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub tensor: Tensor,
    pub trainable: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ForwardMode {
    Train,
    Inference,
}

/// Batch statistics observed during a train-mode forward pass, keyed by
/// the normalization layer prefix (e.g. `bn1`).
pub type LayerStats = Vec<(String, BatchStats)>;

/// Resolves parameters by name during a forward pass.
pub(crate) struct Lookup<'a> {
    params: &'a [Parameter],
    vars: Vec<Option<Var>>,
}

impl Lookup<'_> {
    pub(crate) fn var(&self, name: &str) -> Var {
        let i = self.index(name);
        self.vars[i].unwrap_or_else(|| panic!("parameter {name} is not trainable"))
    }

    pub(crate) fn data(&self, name: &str) -> &[f64] {
        self.params[self.index(name)].tensor.data()
    }

    fn index(&self, name: &str) -> usize {
        self.params
            .iter()
            .position(|p| p.name == name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Forecaster {
    config: ModelConfig,
    params: Vec<Parameter>,
}

impl Forecaster {
    /// Uniform ±1/√fan_in initialization drawn from a seeded stream.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = specs(&config)
            .into_iter()
            .map(|s| {
                let n: usize = s.shape.iter().product();
                let data = match s.init {
                    Init::Uniform(b) => (0..n).map(|_| rng.random_range(-b..=b)).collect(),
                    Init::Const(v) => vec![v; n],
                };
                Parameter {
                    name: s.name,
                    tensor: Tensor::new(s.shape, data).expect("spec shape"),
                    trainable: s.trainable,
                }
            })
            .collect();
        Ok(Self { config, params })
    }

    /// Every trainable value zero; normalization statistics at 0 mean and
    /// unit variance.
    pub fn zeros(config: ModelConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let params = specs(&config)
            .into_iter()
            .map(|s| {
                let v = match (s.trainable, s.init) {
                    (false, Init::Const(v)) => v,
                    _ => 0.0,
                };
                Parameter {
                    name: s.name,
                    tensor: Tensor::full(&s.shape, v),
                    trainable: s.trainable,
                }
            })
            .collect();
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn parameters(&self) -> &[Parameter] {
        &self.params
    }

    pub fn parameter(&self, name: &str) -> Option<&Parameter> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn parameter_mut(&mut self, name: &str) -> Option<&mut Parameter> {
        self.params.iter_mut().find(|p| p.name == name)
    }

    /// Trainable parameters as `(name, tensor)` in model order.
    pub fn trainable(&self) -> Vec<(String, Tensor)> {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| (p.name.clone(), p.tensor.clone()))
            .collect()
    }

    /// Replaces trainable tensors in model order.
    pub fn set_trainable(&mut self, values: &[Tensor]) -> Result<(), ModelError> {
        let slots: Vec<&mut Parameter> = self.params.iter_mut().filter(|p| p.trainable).collect();
        if slots.len() != values.len() {
            return Err(ModelError::Config(format!(
                "expected {} trainable tensors, got {}",
                slots.len(),
                values.len()
            )));
        }
        for (p, v) in slots.into_iter().zip(values) {
            if p.tensor.shape() != v.shape() {
                return Err(ModelError::Shape {
                    got: v.shape().to_vec(),
                    expected: p.tensor.shape().to_vec(),
                });
            }
            p.tensor = v.clone();
        }
        Ok(())
    }

    /// Total trainable scalar count, walking the parameter collection.
    pub fn count_parameters(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.tensor.len())
            .sum()
    }

    /// Trainable values of the LSTM gate matrices and biases, excluding the
    /// output head; zero for other architectures.
    pub fn count_recurrent_core(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.trainable && p.name.starts_with("lstm."))
            .map(|p| p.tensor.len())
            .sum()
    }

    pub fn estimate_flops(&self) -> u64 {
        estimate_flops(&self.config)
    }

    /// Records trainable parameters on `tape` as named leaves, in model order.
    pub fn record(&self, tape: &mut Tape) -> Vec<Var> {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| tape.param(p.name.clone(), p.tensor.clone()))
            .collect()
    }

    /// Forward pass with trainable parameters supplied as tape vars (in
    /// [`Forecaster::trainable`] order). `x` is `[B, m_in, n_features]`.
    pub fn forward_with(
        &self,
        tape: &mut Tape,
        trainable: &[Var],
        x: Var,
        mode: ForwardMode,
    ) -> Result<(Var, LayerStats), ModelError> {
        let c = &self.config;
        let shape = tape.shape(x).to_vec();
        if shape.len() != 3 || shape[1] != c.m_in || shape[2] != c.n_features || shape[0] == 0 {
            return Err(ModelError::Shape {
                got: shape,
                expected: vec![0, c.m_in, c.n_features],
            });
        }
        let mut it = trainable.iter();
        let vars = self
            .params
            .iter()
            .map(|p| {
                if p.trainable {
                    it.next().copied()
                } else {
                    None
                }
            })
            .collect();
        if trainable.len() != self.params.iter().filter(|p| p.trainable).count() {
            return Err(ModelError::Config("trainable var count mismatch".into()));
        }
        let lookup = Lookup {
            params: &self.params,
            vars,
        };
        match c.architecture {
            Architecture::NLinear => Ok((nlinear::forward(c, &lookup, tape, x)?, Vec::new())),
            Architecture::Lstm => Ok((lstm::forward(c, &lookup, tape, x)?, Vec::new())),
            Architecture::Cnn => cnn::forward(c, &lookup, tape, x, mode),
        }
    }

    /// Forward pass on a fresh tape; `x` is `[B · m_in · n_features]`.
    pub fn predict(&self, x: &[f64], batch: usize) -> Result<Vec<f64>, ModelError> {
        let mut tape = Tape::new();
        let vars = self.record(&mut tape);
        let xv = tape.constant(Tensor::new(
            vec![batch, self.config.m_in, self.config.n_features],
            x.to_vec(),
        )?);
        let (y, _) = self.forward_with(&mut tape, &vars, xv, ForwardMode::Inference)?;
        Ok(tape.value(y).data().to_vec())
    }

    /// Exponential moving update of normalization running statistics.
    pub fn update_running_stats(&mut self, stats: &LayerStats) {
        for (layer, s) in stats {
            for (suffix, batch) in [("running_mean", &s.mean), ("running_var", &s.var)] {
                if let Some(p) = self.parameter_mut(&format!("{layer}.{suffix}")) {
                    for (r, b) in p.tensor.data_mut().iter_mut().zip(batch) {
                        *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
                    }
                }
            }
        }
    }
}

pub fn dense_flops(inputs: usize, outputs: usize) -> u64 {
    2 * inputs as u64 * outputs as u64
}

pub fn conv_flops(
    kh: usize,
    kw: usize,
    c_in: usize,
    c_out: usize,
    h_out: usize,
    w_out: usize,
) -> u64 {
    2 * (kh * kw * c_in * c_out) as u64 * (h_out * w_out) as u64
}

pub fn lstm_step_flops(inputs: usize, hidden: usize) -> u64 {
    2 * 4 * hidden as u64 * (inputs + hidden) as u64
}

pub fn estimate_flops(c: &ModelConfig) -> u64 {
    match c.architecture {
        Architecture::NLinear => dense_flops(c.m_in, c.m_out),
        Architecture::Lstm => {
            c.m_in as u64 * lstm_step_flops(c.n_features, c.hidden)
                + dense_flops(c.m_in * c.hidden, c.m_out)
        }
        Architecture::Cnn => {
            let (c1, c2) = c.cnn_channels;
            let k = c.cnn_kernel;
            let out = |n: usize| n + 2 * c.cnn_padding + 1 - k;
            let (h1, w1) = (out(c.m_in), out(c.n_features));
            let (h2, w2) = (out(h1), out(w1));
            conv_flops(k, k, 1, c1, h1, w1)
                + conv_flops(k, k, c1, c2, h2, w2)
                + dense_flops(c2 * h2 * w2, c.m_out)
        }
    }
}
