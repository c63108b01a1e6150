//! Region-restricted instance normalization, the global background re-dressing
//! baseline (RAIN) and semantic-guided region-aware normalization (SRIN).
//!
//! All blocks take a feature map `F[C, H, W]` and a binary foreground mask at
//! the same resolution, and never modify background sites.
//!
//! SRIN, with `N = H·W` and maps flattened to `[C, N]`:
//!
//! ```text
//! F̄      = (F - μ_fg) / sqrt(σ²_fg + ε)          at every site
//! Q      = h_q(M_s),  K = h_k(F̄),  V = h_v(F)     1×1 convolutions
//! R      = softmax_rows(Qᵀ K + mask)               mask = -1e9 on foreground key columns
//! P      = V Rᵀ                                    P[:, i] = Σ_j R[i, j] V[:, j]
//! γ, β   = ReLU(g_γ(P)) ⊙ M,  ReLU(g_β(P)) ⊙ M
//! Fⁿ     = γ ⊙ F̄ + β  on the foreground,  F  on the background
//! ```

use rand::Rng;

use crate::imaging::Mask;
use crate::tensor::{Graph, Tensor, TensorError, Var, MASK_LARGE};

/// Added to variances before taking a square root.
pub const NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct Conv1x1Params {
    /// `[C_out, C_in]`
    pub weight: Tensor,
    /// `[C_out]`
    pub bias: Tensor,
}

impl Conv1x1Params {
    pub fn zeros(cout: usize, cin: usize) -> Self {
        Self {
            weight: Tensor::raw(vec![cout, cin], vec![0.0; cout * cin]),
            bias: Tensor::raw(vec![cout], vec![0.0; cout]),
        }
    }

    /// Uniform in `[-a, a]` with `a = sqrt(1 / C_in)`.
    pub fn uniform<R: Rng>(cout: usize, cin: usize, rng: &mut R) -> Self {
        let a = (1.0 / cin as f64).sqrt();
        let mut draw = |n: usize| (0..n).map(|_| rng.gen_range(-a..=a)).collect::<Vec<_>>();
        Self {
            weight: Tensor::raw(vec![cout, cin], draw(cout * cin)),
            bias: Tensor::raw(vec![cout], draw(cout)),
        }
    }

    fn register(&self, g: &mut Graph) -> (Var, Var) {
        (g.param(self.weight.clone()), g.param(self.bias.clone()))
    }
}

/// The five 1×1 convolutions of an SRIN block with channel width `C`.
#[derive(Clone, Debug, PartialEq)]
pub struct SrinParams {
    /// `h_q: 3 -> C`
    pub query: Conv1x1Params,
    /// `h_k: C -> C`
    pub key: Conv1x1Params,
    /// `h_v: C -> C`
    pub value: Conv1x1Params,
    /// `g_γ: C -> C`
    pub gamma: Conv1x1Params,
    /// `g_β: C -> C`
    pub beta: Conv1x1Params,
}

impl SrinParams {
    pub fn init<R: Rng>(channels: usize, rng: &mut R) -> Self {
        Self {
            query: Conv1x1Params::uniform(channels, 3, rng),
            key: Conv1x1Params::uniform(channels, channels, rng),
            value: Conv1x1Params::uniform(channels, channels, rng),
            gamma: Conv1x1Params::uniform(channels, channels, rng),
            beta: Conv1x1Params::uniform(channels, channels, rng),
        }
    }

    pub fn channels(&self) -> usize {
        self.key.bias.len()
    }

    /// Query, key, value, gamma, beta; weight before bias.
    pub fn tensors(&self) -> [&Tensor; 10] {
        let c = [&self.query, &self.key, &self.value, &self.gamma, &self.beta];
        std::array::from_fn(|i| {
            if i % 2 == 0 {
                &c[i / 2].weight
            } else {
                &c[i / 2].bias
            }
        })
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 10] {
        let [q, k, v, gm, bt] = [
            &mut self.query,
            &mut self.key,
            &mut self.value,
            &mut self.gamma,
            &mut self.beta,
        ];
        [
            &mut q.weight,
            &mut q.bias,
            &mut k.weight,
            &mut k.bias,
            &mut v.weight,
            &mut v.bias,
            &mut gm.weight,
            &mut gm.bias,
            &mut bt.weight,
            &mut bt.bias,
        ]
    }

    pub fn register(&self, g: &mut Graph) -> SrinVars {
        SrinVars {
            query: self.query.register(g),
            key: self.key.register(g),
            value: self.value.register(g),
            gamma: self.gamma.register(g),
            beta: self.beta.register(g),
        }
    }
}

/// [`SrinParams`] recorded on a graph as `(weight, bias)` pairs.
#[derive(Clone, Copy, Debug)]
pub struct SrinVars {
    pub query: (Var, Var),
    pub key: (Var, Var),
    pub value: (Var, Var),
    pub gamma: (Var, Var),
    pub beta: (Var, Var),
}

impl SrinVars {
    /// Inverse of [`SrinVars::all`].
    pub fn from_array(v: [Var; 10]) -> Self {
        Self {
            query: (v[0], v[1]),
            key: (v[2], v[3]),
            value: (v[4], v[5]),
            gamma: (v[6], v[7]),
            beta: (v[8], v[9]),
        }
    }

    pub fn all(&self) -> [Var; 10] {
        let [q, k, v, g, b] = [self.query, self.key, self.value, self.gamma, self.beta];
        [q.0, q.1, k.0, k.1, v.0, v.1, g.0, g.1, b.0, b.1]
    }
}

#[derive(Clone, Copy, Debug)]
pub struct RegionNorm {
    /// `F̄`, defined at every site.
    pub normalized: Var,
    /// Foreground mean and standard deviation; absent when degenerate.
    pub mean: Option<Var>,
    pub std: Option<Var>,
    /// Empty foreground: `normalized` is `F` itself.
    pub degenerate: bool,
}

fn check_mask(g: &Graph, f: Var, mask: &Mask, op: &'static str) -> Result<Tensor, TensorError> {
    match *g.shape(f) {
        [_, h, w] if (h, w) == mask.dims() => Ok(mask.to_tensor()),
        ref s => Err(TensorError::Shape {
            op,
            lhs: s.to_vec(),
            rhs: vec![1, mask.height(), mask.width()],
        }),
    }
}

fn std_of(g: &mut Graph, var: Var, eps: f64) -> Var {
    let shifted = g.add_scalar(var, eps);
    g.sqrt(shifted)
}

/// Normalizes the whole map with statistics taken over foreground sites only.
pub fn region_instance_norm(
    g: &mut Graph,
    f: Var,
    mask: &Mask,
    eps: f64,
) -> Result<RegionNorm, TensorError> {
    let m = check_mask(g, f, mask, "region_instance_norm")?;
    let stats = g.masked_channel_stats(f, &m)?;
    if stats.count == 0 {
        return Ok(RegionNorm {
            normalized: f,
            mean: None,
            std: None,
            degenerate: true,
        });
    }
    let std = std_of(g, stats.var, eps);
    let normalized = g.channel_normalize(f, stats.mean, std)?;
    Ok(RegionNorm {
        normalized,
        mean: Some(stats.mean),
        std: Some(std),
        degenerate: false,
    })
}

/// Re-dresses normalized foreground features with the global background
/// statistics. Identity when either region is empty.
pub fn rain_forward(g: &mut Graph, f: Var, mask: &Mask, eps: f64) -> Result<Var, TensorError> {
    let m = check_mask(g, f, mask, "rain_forward")?;
    let fg = mask.count();
    if fg == 0 || fg == mask.bits().len() {
        return Ok(f);
    }
    let norm = region_instance_norm(g, f, mask, eps)?;
    let bg = g.masked_channel_stats(f, &mask.complement().to_tensor())?;
    let bg_std = std_of(g, bg.var, eps);
    let redressed = g.channel_affine(norm.normalized, bg_std, bg.mean)?;
    g.select(redressed, f, &m)
}

#[derive(Clone, Copy, Debug)]
pub struct SrinOutput {
    /// `Fⁿ`
    pub output: Var,
    /// `R[N, N]`; absent when degenerate.
    pub attention: Option<Var>,
    pub gamma: Option<Var>,
    pub beta: Option<Var>,
    /// Foreground or background empty at feature resolution; `output` is `F`.
    pub degenerate: bool,
}

/// Additive logit mask disabling every foreground key column.
pub fn background_key_mask(mask: &Mask) -> Tensor {
    let n = mask.bits().len();
    let row: Vec<f64> = mask
        .bits()
        .iter()
        .map(|&fg| if fg { -MASK_LARGE } else { 0.0 })
        .collect();
    Tensor::raw(vec![n, n], row.repeat(n))
}

/// `sem` is the `[3, H, W]` semantic map already resampled to the feature
/// resolution.
pub fn srin_forward(
    g: &mut Graph,
    f: Var,
    mask: &Mask,
    sem: Var,
    params: &SrinVars,
    eps: f64,
) -> Result<SrinOutput, TensorError> {
    let m = check_mask(g, f, mask, "srin_forward")?;
    let [c, h, w] = *g.shape(f) else {
        unreachable!("checked by check_mask")
    };
    if g.shape(sem) != [3, h, w] {
        return Err(TensorError::Shape {
            op: "srin_forward",
            lhs: g.shape(f).to_vec(),
            rhs: g.shape(sem).to_vec(),
        });
    }
    let fg = mask.count();
    if fg == 0 || fg == mask.bits().len() {
        return Ok(SrinOutput {
            output: f,
            attention: None,
            gamma: None,
            beta: None,
            degenerate: true,
        });
    }
    let n = h * w;
    let normalized = region_instance_norm(g, f, mask, eps)?.normalized;

    let q = g.conv1x1(sem, params.query.0, params.query.1)?;
    let k = g.conv1x1(normalized, params.key.0, params.key.1)?;
    let v = g.conv1x1(f, params.value.0, params.value.1)?;
    let q = g.reshape(q, &[c, n])?;
    let k = g.reshape(k, &[c, n])?;
    let v = g.reshape(v, &[c, n])?;

    let qt = g.transpose(q)?;
    let logits = g.matmul(qt, k)?;
    let attention = g.softmax_rows(logits, Some(&background_key_mask(mask)))?;

    let rt = g.transpose(attention)?;
    let attended = g.matmul(v, rt)?;
    let attended = g.reshape(attended, &[c, h, w])?;

    let gamma = g.conv1x1(attended, params.gamma.0, params.gamma.1)?;
    let gamma = g.relu(gamma);
    let gamma = g.mask_sites(gamma, &m)?;
    let beta = g.conv1x1(attended, params.beta.0, params.beta.1)?;
    let beta = g.relu(beta);
    let beta = g.mask_sites(beta, &m)?;

    let scaled = g.mul(gamma, normalized)?;
    let modulated = g.add(scaled, beta)?;
    let output = g.select(modulated, f, &m)?;
    Ok(SrinOutput {
        output,
        attention: Some(attention),
        gamma: Some(gamma),
        beta: Some(beta),
        degenerate: false,
    })
}
