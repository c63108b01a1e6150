//! Mask-conditioned U-Net with an optional normalization block at the
//! bottleneck.
//!
//! ```text
//! x = [composite RGB; mask]                         4 × S × S
//! encoder s = 0..stages:  conv3x3/2 + ReLU           base·2^s channels
//! bottleneck:             none | rain | srin         at S / 2^stages
//! decoder s = stages-1..0: upsample ×2, concat skip, conv3x3 + ReLU
//! head:                   conv3x3 -> 3, + composite, clamp to [0, 1]
//! output:                 head inside the mask, composite outside
//! ```
//!
//! The skip at decoder level `s` is the encoder output of stage `s - 1`, or the
//! network input for `s = 0`.

mod checkpoint;

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint};

use crate::imaging::{Image, ImageError, Mask};
use crate::norm::{self, SrinParams, NORM_EPS};
use crate::tensor::{Graph, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid network config: {0}")]
    Config(String),
    #[error("input is {got:?}, network expects {expected}×{expected}")]
    Size {
        expected: usize,
        got: (usize, usize),
    },
    #[error("checkpoint: bad magic {0:02x?}")]
    BadMagic(Vec<u8>),
    #[error("checkpoint tensor {index}: {reason}")]
    Tensor { index: usize, reason: String },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("checkpoint config {found} does not match expected {expected}")]
    ConfigMismatch {
        expected: UNetConfig,
        found: UNetConfig,
    },
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error(transparent)]
    Graph(#[from] TensorError),
    #[error(transparent)]
    Image(#[from] ImageError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum NormBlock {
    None,
    Rain,
    Srin,
}

impl NormBlock {
    pub const ALL: [NormBlock; 3] = [NormBlock::None, NormBlock::Rain, NormBlock::Srin];

    pub fn name(self) -> &'static str {
        match self {
            NormBlock::None => "none",
            NormBlock::Rain => "rain",
            NormBlock::Srin => "srin",
        }
    }

    fn code(self) -> u8 {
        self as u8
    }

    fn from_code(c: u8) -> Option<Self> {
        Self::ALL.get(c as usize).copied()
    }
}

impl fmt::Display for NormBlock {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for NormBlock {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Self::ALL
            .into_iter()
            .find(|b| b.name() == s)
            .ok_or_else(|| format!("unknown block {s:?}; expected none, rain or srin"))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct UNetConfig {
    /// Square input side; a power of two.
    pub size: usize,
    pub stages: usize,
    /// Channels of the first encoder stage; doubled per stage.
    pub base_channels: usize,
    pub block: NormBlock,
    /// Head predicts an offset added to the composite.
    pub residual: bool,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            size: 64,
            stages: 3,
            base_channels: 16,
            block: NormBlock::Srin,
            residual: true,
        }
    }
}

impl fmt::Display for UNetConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "size={} stages={} base={} block={} residual={}",
            self.size, self.stages, self.base_channels, self.block, self.residual
        )
    }
}

/// Network input channels: RGB plus mask.
pub const INPUT_CHANNELS: usize = 4;
/// Smallest accepted bottleneck side.
pub const MIN_BOTTLENECK: usize = 4;

impl UNetConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::Config(m));
        if !self.size.is_power_of_two() || self.size < 8 {
            return bad(format!("size {} is not a power of two >= 8", self.size));
        }
        if self.stages == 0 || self.stages > 8 {
            return bad(format!("stages {} outside 1..=8", self.stages));
        }
        if self.base_channels == 0 {
            return bad("base channels must be positive".into());
        }
        if self.size >> self.stages < MIN_BOTTLENECK {
            return bad(format!(
                "bottleneck {} below {MIN_BOTTLENECK}×{MIN_BOTTLENECK}",
                self.size >> self.stages
            ));
        }
        if self.base_channels.checked_shl(self.stages as u32).is_none() {
            return bad("channel width overflows".into());
        }
        Ok(())
    }

    pub fn bottleneck_size(&self) -> usize {
        self.size >> self.stages
    }

    /// Output channels of encoder stage `s`.
    pub fn encoder_channels(&self, s: usize) -> usize {
        self.base_channels << s
    }

    pub fn bottleneck_channels(&self) -> usize {
        self.encoder_channels(self.stages - 1)
    }

    /// `(in, out)` channels of the decoder conv at level `s`.
    fn decoder_io(&self, s: usize) -> (usize, usize) {
        let below = if s + 1 == self.stages {
            self.bottleneck_channels()
        } else {
            self.decoder_io(s + 1).1
        };
        let (skip, out) = if s == 0 {
            (INPUT_CHANNELS, self.base_channels)
        } else {
            (self.encoder_channels(s - 1), self.encoder_channels(s - 1))
        };
        (below + skip, out)
    }

    /// Shapes of every parameter tensor in enumeration order.
    pub fn parameter_shapes(&self) -> Vec<Vec<usize>> {
        let conv = |ci: usize, co: usize| [vec![co, ci, 3, 3], vec![co]];
        let mut shapes = Vec::new();
        for s in 0..self.stages {
            let ci = if s == 0 {
                INPUT_CHANNELS
            } else {
                self.encoder_channels(s - 1)
            };
            shapes.extend(conv(ci, self.encoder_channels(s)));
        }
        if self.block == NormBlock::Srin {
            let c = self.bottleneck_channels();
            for cin in [3, c, c, c, c] {
                shapes.push(vec![c, cin]);
                shapes.push(vec![c]);
            }
        }
        for s in (0..self.stages).rev() {
            let (ci, co) = self.decoder_io(s);
            shapes.extend(conv(ci, co));
        }
        shapes.extend(conv(self.decoder_io(0).1, 3));
        shapes
    }

    pub fn parameter_count(&self) -> usize {
        self.parameter_shapes()
            .iter()
            .map(|s| s.iter().product::<usize>())
            .sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvParams {
    /// `[C_out, C_in, 3, 3]`
    pub weight: Tensor,
    /// `[C_out]`
    pub bias: Tensor,
}

impl ConvParams {
    fn uniform<R: Rng>(cin: usize, cout: usize, rng: &mut R) -> Self {
        let a = (1.0 / (cin * 9) as f64).sqrt();
        let mut draw = |n: usize| (0..n).map(|_| rng.gen_range(-a..=a)).collect::<Vec<_>>();
        Self {
            weight: Tensor::raw(vec![cout, cin, 3, 3], draw(cout * cin * 9)),
            bias: Tensor::raw(vec![cout], draw(cout)),
        }
    }

    fn zeros(cin: usize, cout: usize) -> Self {
        Self {
            weight: Tensor::raw(vec![cout, cin, 3, 3], vec![0.0; cout * cin * 9]),
            bias: Tensor::raw(vec![cout], vec![0.0; cout]),
        }
    }
}

/// Recorded forward pass.
#[derive(Clone, Debug)]
pub struct Forward {
    /// Graph leaves of the parameters, in enumeration order.
    pub params: Vec<Var>,
    /// Composed `[3, H, W]` output.
    pub output: Var,
    /// The bottleneck block fell back to pass-through.
    pub degenerate: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorModel {
    config: UNetConfig,
    encoder: Vec<ConvParams>,
    srin: Option<SrinParams>,
    /// Deepest level first.
    decoder: Vec<ConvParams>,
    head: ConvParams,
    bypass_bottleneck: bool,
}

impl GeneratorModel {
    /// Encoder and decoder weights come from ChaCha stream 0 of `seed` and
    /// SRIN weights from stream 1, so models that differ only in `block` share
    /// every other weight. The head starts at zero.
    pub fn new(config: UNetConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(0);
        let encoder = (0..config.stages)
            .map(|s| {
                let ci = if s == 0 {
                    INPUT_CHANNELS
                } else {
                    config.encoder_channels(s - 1)
                };
                ConvParams::uniform(ci, config.encoder_channels(s), &mut rng)
            })
            .collect();
        let decoder = (0..config.stages)
            .rev()
            .map(|s| {
                let (ci, co) = config.decoder_io(s);
                ConvParams::uniform(ci, co, &mut rng)
            })
            .collect();
        let srin = (config.block == NormBlock::Srin).then(|| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            r.set_stream(1);
            SrinParams::init(config.bottleneck_channels(), &mut r)
        });
        Ok(Self {
            config,
            encoder,
            srin,
            decoder,
            head: ConvParams::zeros(config.decoder_io(0).1, 3),
            bypass_bottleneck: false,
        })
    }

    /// Builds a model from tensors in enumeration order.
    pub fn from_tensors(config: UNetConfig, tensors: Vec<Tensor>) -> Result<Self, ModelError> {
        let mut model = Self::new(config, 0)?;
        let shapes = config.parameter_shapes();
        if tensors.len() != shapes.len() {
            return Err(ModelError::Checkpoint(format!(
                "{} tensors, config needs {}",
                tensors.len(),
                shapes.len()
            )));
        }
        for (index, ((slot, t), want)) in model
            .tensors_mut()
            .into_iter()
            .zip(tensors)
            .zip(&shapes)
            .enumerate()
        {
            if t.shape() != want.as_slice() {
                return Err(ModelError::Tensor {
                    index,
                    reason: format!("shape {:?}, expected {want:?}", t.shape()),
                });
            }
            if !t.is_finite() {
                return Err(ModelError::Tensor {
                    index,
                    reason: "non-finite value".into(),
                });
            }
            *slot = t;
        }
        Ok(model)
    }

    pub fn config(&self) -> &UNetConfig {
        &self.config
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// Encoder (weight, bias per stage), SRIN (query, key, value, gamma,
    /// beta), decoder from the deepest level up, head.
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for c in &self.encoder {
            out.extend([&c.weight, &c.bias]);
        }
        if let Some(p) = &self.srin {
            out.extend(p.tensors());
        }
        for c in &self.decoder {
            out.extend([&c.weight, &c.bias]);
        }
        out.extend([&self.head.weight, &self.head.bias]);
        out
    }

    /// Names matching [`GeneratorModel::tensors`], e.g. `enc0.weight`,
    /// `srin.key.bias`, `dec2.weight`, `head.bias`.
    pub fn tensor_names(&self) -> Vec<String> {
        let wb = |p: String| [format!("{p}.weight"), format!("{p}.bias")];
        let mut out = Vec::new();
        for s in 0..self.config.stages {
            out.extend(wb(format!("enc{s}")));
        }
        if self.srin.is_some() {
            for p in ["query", "key", "value", "gamma", "beta"] {
                out.extend(wb(format!("srin.{p}")));
            }
        }
        for s in (0..self.config.stages).rev() {
            out.extend(wb(format!("dec{s}")));
        }
        out.extend(wb("head".into()));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for c in &mut self.encoder {
            out.extend([&mut c.weight, &mut c.bias]);
        }
        if let Some(p) = &mut self.srin {
            out.extend(p.tensors_mut());
        }
        for c in &mut self.decoder {
            out.extend([&mut c.weight, &mut c.bias]);
        }
        out.extend([&mut self.head.weight, &mut self.head.bias]);
        out
    }

    /// Replaces the bottleneck block with the identity, whatever `block` is.
    pub fn set_bypass_bottleneck(&mut self, on: bool) {
        self.bypass_bottleneck = on;
    }

    pub fn check_input(
        &self,
        composite: &Image,
        mask: &Mask,
        semantic: &Image,
    ) -> Result<(), ModelError> {
        let n = self.config.size;
        for got in [composite.dims(), mask.dims(), semantic.dims()] {
            if got != (n, n) {
                return Err(ModelError::Size { expected: n, got });
            }
        }
        Ok(())
    }

    /// Records the forward pass on `g` with every parameter as a leaf.
    pub fn forward(
        &self,
        g: &mut Graph,
        composite: &Image,
        mask: &Mask,
        semantic: &Image,
    ) -> Result<Forward, ModelError> {
        let params: Vec<Var> = self
            .tensors()
            .into_iter()
            .map(|t| g.param(t.clone()))
            .collect();
        self.forward_with(g, params, composite, mask, semantic)
    }

    /// Like [`GeneratorModel::forward`], but reads parameter values from
    /// existing graph nodes given in enumeration order.
    pub fn forward_with(
        &self,
        g: &mut Graph,
        params: Vec<Var>,
        composite: &Image,
        mask: &Mask,
        semantic: &Image,
    ) -> Result<Forward, ModelError> {
        self.check_input(composite, mask, semantic)?;
        if params.len() != self.tensors().len() {
            return Err(ModelError::Config(format!(
                "{} parameter nodes for {} tensors",
                params.len(),
                self.tensors().len()
            )));
        }
        let cfg = &self.config;
        let mut next = params.iter().copied();

        let mask_t = mask.to_tensor();
        let comp = g.constant(composite.to_chw());
        let m = g.constant(mask_t.clone());
        let input = g.concat_channels(comp, m)?;

        let mut skips = vec![input];
        let mut x = input;
        for _ in 0..cfg.stages {
            let (w, b) = pair(&mut next);
            let y = g.conv3x3(x, w, b, 2)?;
            x = g.relu(y);
            skips.push(x);
        }
        skips.pop();

        let srin_vars = (cfg.block == NormBlock::Srin)
            .then(|| norm::SrinVars::from_array(std::array::from_fn(|_| next.next().unwrap())));
        let side = cfg.bottleneck_size();
        let mut degenerate = false;
        if !self.bypass_bottleneck {
            let small = mask.resize_nearest(side, side);
            match cfg.block {
                NormBlock::None => {}
                NormBlock::Rain => {
                    let fg = small.count();
                    degenerate = fg == 0 || fg == side * side;
                    x = norm::rain_forward(g, x, &small, NORM_EPS)?;
                }
                NormBlock::Srin => {
                    let sem = g.constant(semantic.resize_nearest(side, side).to_chw());
                    let vars = srin_vars.expect("srin params registered");
                    let out = norm::srin_forward(g, x, &small, sem, &vars, NORM_EPS)?;
                    degenerate = out.degenerate;
                    x = out.output;
                }
            }
        }

        for skip in skips.into_iter().rev() {
            let (w, b) = pair(&mut next);
            let up = g.upsample2x(x)?;
            let cat = g.concat_channels(up, skip)?;
            let y = g.conv3x3(cat, w, b, 1)?;
            x = g.relu(y);
        }
        let (w, b) = pair(&mut next);
        let mut out = g.conv3x3(x, w, b, 1)?;
        if cfg.residual {
            out = g.add(out, comp)?;
        }
        let out = g.clamp01(out);
        let output = g.select(out, comp, &mask_t)?;
        Ok(Forward {
            params,
            output,
            degenerate,
        })
    }

    /// Harmonized image; background pixels are the composite's, bit for bit.
    pub fn harmonize(
        &self,
        composite: &Image,
        mask: &Mask,
        semantic: &Image,
    ) -> Result<Image, ModelError> {
        let mut g = Graph::new();
        let fwd = self.forward(&mut g, composite, mask, semantic)?;
        let out = Image::from_chw(g.value(fwd.output))?;
        Ok(crate::imaging::compose(&out, composite, mask)?)
    }
}

fn pair(it: &mut impl Iterator<Item = Var>) -> (Var, Var) {
    (it.next().unwrap(), it.next().unwrap())
}
