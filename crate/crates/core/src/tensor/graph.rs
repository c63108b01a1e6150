use super::kernels;
use super::{Tensor, TensorError};

/// Additive logit offset used to disable attention entries.
pub const MASK_LARGE: f64 = 1e9;

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Per-channel statistics restricted to the sites of a binary mask.
///
/// When `count == 0` the `mean` and `var` nodes hold zeros and carry no
/// meaning; callers branch on `count`.
#[derive(Clone, Copy, Debug)]
pub struct MaskedStats {
    pub mean: Var,
    pub var: Var,
    pub count: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Reshape(Var),
    Transpose {
        x: Var,
        rows: usize,
        cols: usize,
    },
    Matmul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Sqrt(Var),
    Clamp01(Var),
    Conv1x1 {
        x: Var,
        w: Var,
        b: Var,
        cin: usize,
        cout: usize,
        n: usize,
    },
    Conv3x3 {
        x: Var,
        w: Var,
        b: Var,
        cols: Vec<f64>,
        stride: usize,
    },
    Upsample2x(Var),
    ConcatChannels(Var, Var),
    SoftmaxRows {
        x: Var,
        cols: usize,
    },
    MaskedMean {
        x: Var,
        mask: Vec<f64>,
        count: usize,
    },
    MaskedVar {
        x: Var,
        mask: Vec<f64>,
        count: usize,
    },
    ChannelNormalize {
        x: Var,
        mean: Var,
        std: Var,
    },
    ChannelAffine {
        x: Var,
        scale: Var,
        shift: Var,
    },
    MaskSites {
        x: Var,
        mask: Vec<f64>,
    },
    Select {
        on: Var,
        off: Var,
        mask: Vec<f64>,
    },
    Sum(Var),
    Mean(Var),
    L1 {
        a: Var,
        b: Var,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records operations in execution order; [`Graph::backward`] replays them in
/// exact reverse order.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.leaf(t, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t, false)
    }

    fn leaf(&mut self, mut t: Tensor, requires_grad: bool) -> Var {
        t.set_grad(None);
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient of the last [`Graph::backward`] loss with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    fn vals(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.values()
    }

    fn push(&mut self, shape: Vec<usize>, values: Vec<f64>, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value: Tensor::raw(shape, values),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), TensorError> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::Shape {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    fn chw(&self, op: &'static str, x: Var) -> Result<(usize, usize, usize), TensorError> {
        match *self.shape(x) {
            [c, h, w] => Ok((c, h, w)),
            ref s => Err(TensorError::Shape {
                op,
                lhs: s.to_vec(),
                rhs: vec![],
            }),
        }
    }

    fn site_mask(
        &self,
        op: &'static str,
        x: Var,
        mask: &Tensor,
    ) -> Result<(usize, Vec<f64>), TensorError> {
        let (c, h, w) = self.chw(op, x)?;
        let ms = mask.shape();
        let ok = ms == [1, h, w] || ms == [h, w];
        if !ok {
            return Err(TensorError::Shape {
                op,
                lhs: self.shape(x).to_vec(),
                rhs: ms.to_vec(),
            });
        }
        if let Some((index, &value)) = mask
            .values()
            .iter()
            .enumerate()
            .find(|(_, &v)| v != 0.0 && v != 1.0)
        {
            return Err(TensorError::NonBinaryMask { op, index, value });
        }
        Ok((c, mask.values().to_vec()))
    }

    // ---- structural ----

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let t = self.value(x).reshape(shape.to_vec())?;
        let (s, v) = (t.shape().to_vec(), t.into_values());
        Ok(self.push(s, v, Op::Reshape(x), &[x]))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var, TensorError> {
        let (rows, cols) = match *self.shape(x) {
            [r, c] => (r, c),
            ref s => {
                return Err(TensorError::Shape {
                    op: "transpose",
                    lhs: s.to_vec(),
                    rhs: vec![],
                })
            }
        };
        let out = kernels::transpose(self.vals(x), rows, cols);
        Ok(self.push(vec![cols, rows], out, Op::Transpose { x, rows, cols }, &[x]))
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ca, h, w) = self.chw("concat_channels", a)?;
        let (cb, hb, wb) = self.chw("concat_channels", b)?;
        if (h, w) != (hb, wb) {
            return Err(TensorError::Shape {
                op: "concat_channels",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let mut out = self.vals(a).to_vec();
        out.extend_from_slice(self.vals(b));
        Ok(self.push(vec![ca + cb, h, w], out, Op::ConcatChannels(a, b), &[a, b]))
    }

    /// Nearest-neighbour ×2 upsampling of a `[C, H, W]` map.
    pub fn upsample2x(&mut self, x: Var) -> Result<Var, TensorError> {
        let (c, h, w) = self.chw("upsample2x", x)?;
        let src = self.vals(x);
        let (oh, ow) = (2 * h, 2 * w);
        let mut out = vec![0.0; c * oh * ow];
        for ci in 0..c {
            for y in 0..oh {
                for xx in 0..ow {
                    out[(ci * oh + y) * ow + xx] = src[(ci * h + y / 2) * w + xx / 2];
                }
            }
        }
        Ok(self.push(vec![c, oh, ow], out, Op::Upsample2x(x), &[x]))
    }

    // ---- linear algebra ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (m, k, k2, n) = match (self.shape(a), self.shape(b)) {
            (&[m, k], &[k2, n]) => (m, k, k2, n),
            _ => (0, 0, 1, 0),
        };
        if k != k2 {
            return Err(TensorError::Shape {
                op: "matmul",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let out = kernels::matmul(self.vals(a), self.vals(b), m, k, n);
        Ok(self.push(vec![m, n], out, Op::Matmul { a, b, m, k, n }, &[a, b]))
    }

    /// Per-site linear map: `out[:, s] = w · x[:, s] + bias`.
    pub fn conv1x1(&mut self, x: Var, w: Var, bias: Var) -> Result<Var, TensorError> {
        let (cin, h, wd) = self.chw("conv1x1", x)?;
        let cout = match *self.shape(w) {
            [co, ci] if ci == cin && self.shape(bias) == [co] => co,
            _ => {
                return Err(TensorError::Shape {
                    op: "conv1x1",
                    lhs: self.shape(x).to_vec(),
                    rhs: self.shape(w).to_vec(),
                })
            }
        };
        let n = h * wd;
        let mut out = kernels::matmul(self.vals(w), self.vals(x), cout, cin, n);
        kernels::add_row_bias(&mut out, self.vals(bias), n);
        Ok(self.push(
            vec![cout, h, wd],
            out,
            Op::Conv1x1 {
                x,
                w,
                b: bias,
                cin,
                cout,
                n,
            },
            &[x, w, bias],
        ))
    }

    /// 3×3 cross-correlation with zero padding 1 and stride 1 or 2.
    pub fn conv3x3(
        &mut self,
        x: Var,
        w: Var,
        bias: Var,
        stride: usize,
    ) -> Result<Var, TensorError> {
        let (cin, h, wd) = self.chw("conv3x3", x)?;
        let cout = match *self.shape(w) {
            [co, ci, 3, 3]
                if ci == cin && self.shape(bias) == [co] && (1..=2).contains(&stride) =>
            {
                co
            }
            _ => {
                return Err(TensorError::Shape {
                    op: "conv3x3",
                    lhs: self.shape(x).to_vec(),
                    rhs: self.shape(w).to_vec(),
                })
            }
        };
        let (oh, ow) = (
            kernels::conv3x3_out(h, stride),
            kernels::conv3x3_out(wd, stride),
        );
        let cols = kernels::im2col(self.vals(x), cin, h, wd, stride);
        let mut out = kernels::matmul(self.vals(w), &cols, cout, cin * 9, oh * ow);
        kernels::add_row_bias(&mut out, self.vals(bias), oh * ow);
        Ok(self.push(
            vec![cout, oh, ow],
            out,
            Op::Conv3x3 {
                x,
                w,
                b: bias,
                cols,
                stride,
            },
            &[x, w, bias],
        ))
    }

    // ---- elementwise ----

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("add", a, b)?;
        let out = zip_map(self.vals(a), self.vals(b), |x, y| x + y);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("sub", a, b)?;
        let out = zip_map(self.vals(a), self.vals(b), |x, y| x - y);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("mul", a, b)?;
        let out = zip_map(self.vals(a), self.vals(b), |x, y| x * y);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let out = self.vals(x).iter().map(|v| v * s).collect();
        self.push(self.shape(x).to_vec(), out, Op::Scale(x, s), &[x])
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Var {
        let out = self.vals(x).iter().map(|v| v + s).collect();
        self.push(self.shape(x).to_vec(), out, Op::AddScalar(x), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.vals(x).iter().map(|&v| v.max(0.0)).collect();
        self.push(self.shape(x).to_vec(), out, Op::Relu(x), &[x])
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        let out = self.vals(x).iter().map(|v| v.sqrt()).collect();
        self.push(self.shape(x).to_vec(), out, Op::Sqrt(x), &[x])
    }

    /// Clamps into `[0, 1]`; the gradient passes where the input lies in the
    /// closed interval.
    pub fn clamp01(&mut self, x: Var) -> Var {
        let out = self.vals(x).iter().map(|v| v.clamp(0.0, 1.0)).collect();
        self.push(self.shape(x).to_vec(), out, Op::Clamp01(x), &[x])
    }

    // ---- attention ----

    /// Row-wise softmax of `[N, M]` logits with an optional additive mask.
    /// Mask entries are `0` (enabled) or negative (disabled, typically
    /// `-MASK_LARGE`); a row with every entry disabled is an error.
    pub fn softmax_rows(
        &mut self,
        logits: Var,
        additive_mask: Option<&Tensor>,
    ) -> Result<Var, TensorError> {
        let (rows, cols) = match *self.shape(logits) {
            [r, c] => (r, c),
            ref s => {
                return Err(TensorError::Shape {
                    op: "softmax_rows",
                    lhs: s.to_vec(),
                    rhs: vec![],
                })
            }
        };
        if let Some(m) = additive_mask {
            if m.shape() != [rows, cols] {
                return Err(TensorError::Shape {
                    op: "softmax_rows",
                    lhs: vec![rows, cols],
                    rhs: m.shape().to_vec(),
                });
            }
            for r in 0..rows {
                if m.values()[r * cols..(r + 1) * cols]
                    .iter()
                    .all(|&v| v < 0.0)
                {
                    return Err(TensorError::DegenerateAttention { row: r });
                }
            }
        }
        let x = self.vals(logits);
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = &mut out[r * cols..(r + 1) * cols];
            row.copy_from_slice(&x[r * cols..(r + 1) * cols]);
            if let Some(m) = additive_mask {
                for (v, &mv) in row.iter_mut().zip(&m.values()[r * cols..(r + 1) * cols]) {
                    *v += mv;
                }
            }
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            for v in row.iter_mut() {
                *v /= total;
            }
        }
        Ok(self.push(
            vec![rows, cols],
            out,
            Op::SoftmaxRows { x: logits, cols },
            &[logits],
        ))
    }

    // ---- normalization ----

    /// Per-channel mean and biased variance of `x[C, H, W]` over the sites
    /// where `mask[1, H, W]` is one.
    pub fn masked_channel_stats(
        &mut self,
        x: Var,
        mask: &Tensor,
    ) -> Result<MaskedStats, TensorError> {
        let (c, mvals) = self.site_mask("masked_channel_stats", x, mask)?;
        let n = mvals.len();
        let count = mvals.iter().filter(|&&m| m == 1.0).count();
        let xs = self.vals(x);
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        if count > 0 {
            let cnt = count as f64;
            for ci in 0..c {
                let plane = &xs[ci * n..(ci + 1) * n];
                let mu = plane
                    .iter()
                    .zip(&mvals)
                    .filter(|(_, &m)| m == 1.0)
                    .map(|(v, _)| v)
                    .sum::<f64>()
                    / cnt;
                let sq = plane
                    .iter()
                    .zip(&mvals)
                    .filter(|(_, &m)| m == 1.0)
                    .map(|(v, _)| (v - mu) * (v - mu))
                    .sum::<f64>();
                mean[ci] = mu;
                var[ci] = sq / cnt;
            }
        }
        let mean = self.push(
            vec![c],
            mean,
            Op::MaskedMean {
                x,
                mask: mvals.clone(),
                count,
            },
            &[x],
        );
        let var = self.push(
            vec![c],
            var,
            Op::MaskedVar {
                x,
                mask: mvals,
                count,
            },
            &[x],
        );
        Ok(MaskedStats { mean, var, count })
    }

    /// `(x[c, ·] - mean[c]) / std[c]` at every site.
    pub fn channel_normalize(&mut self, x: Var, mean: Var, std: Var) -> Result<Var, TensorError> {
        let (c, h, w) = self.chw("channel_normalize", x)?;
        self.check_channel_vec("channel_normalize", x, mean, c)?;
        self.check_channel_vec("channel_normalize", x, std, c)?;
        let n = h * w;
        let (xs, mu, sd) = (self.vals(x), self.vals(mean), self.vals(std));
        let mut out = vec![0.0; c * n];
        for ci in 0..c {
            for s in 0..n {
                out[ci * n + s] = (xs[ci * n + s] - mu[ci]) / sd[ci];
            }
        }
        Ok(self.push(
            vec![c, h, w],
            out,
            Op::ChannelNormalize { x, mean, std },
            &[x, mean, std],
        ))
    }

    /// `x[c, ·] * scale[c] + shift[c]` at every site.
    pub fn channel_affine(&mut self, x: Var, scale: Var, shift: Var) -> Result<Var, TensorError> {
        let (c, h, w) = self.chw("channel_affine", x)?;
        self.check_channel_vec("channel_affine", x, scale, c)?;
        self.check_channel_vec("channel_affine", x, shift, c)?;
        let n = h * w;
        let (xs, a, b) = (self.vals(x), self.vals(scale), self.vals(shift));
        let mut out = vec![0.0; c * n];
        for ci in 0..c {
            for s in 0..n {
                out[ci * n + s] = xs[ci * n + s] * a[ci] + b[ci];
            }
        }
        Ok(self.push(
            vec![c, h, w],
            out,
            Op::ChannelAffine { x, scale, shift },
            &[x, scale, shift],
        ))
    }

    fn check_channel_vec(
        &self,
        op: &'static str,
        x: Var,
        v: Var,
        c: usize,
    ) -> Result<(), TensorError> {
        if self.shape(v) != [c] {
            return Err(TensorError::Shape {
                op,
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(v).to_vec(),
            });
        }
        Ok(())
    }

    /// Zeroes every channel at sites where the binary mask is zero.
    pub fn mask_sites(&mut self, x: Var, mask: &Tensor) -> Result<Var, TensorError> {
        let (c, m) = self.site_mask("mask_sites", x, mask)?;
        let n = m.len();
        let xs = self.vals(x);
        let mut out = vec![0.0; c * n];
        for ci in 0..c {
            for s in 0..n {
                if m[s] == 1.0 {
                    out[ci * n + s] = xs[ci * n + s];
                }
            }
        }
        Ok(self.push(
            self.shape(x).to_vec(),
            out,
            Op::MaskSites { x, mask: m },
            &[x],
        ))
    }

    /// Takes `on` where the binary site mask is one and `off` elsewhere.
    /// Values are copied, never blended, so both regions are exact.
    pub fn select(&mut self, on: Var, off: Var, mask: &Tensor) -> Result<Var, TensorError> {
        self.same_shape("select", on, off)?;
        let (c, m) = self.site_mask("select", on, mask)?;
        let n = m.len();
        let (a, b) = (self.vals(on), self.vals(off));
        let mut out = vec![0.0; c * n];
        for ci in 0..c {
            for s in 0..n {
                let i = ci * n + s;
                out[i] = if m[s] == 1.0 { a[i] } else { b[i] };
            }
        }
        Ok(self.push(
            self.shape(on).to_vec(),
            out,
            Op::Select { on, off, mask: m },
            &[on, off],
        ))
    }

    // ---- reductions ----

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.vals(x).iter().sum();
        self.push(vec![1], vec![s], Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.vals(x);
        let s = v.iter().sum::<f64>() / v.len() as f64;
        self.push(vec![1], vec![s], Op::Mean(x), &[x])
    }

    /// Mean absolute difference; the subgradient at equality is zero.
    pub fn l1_loss(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("l1_loss", a, b)?;
        let (x, y) = (self.vals(a), self.vals(b));
        let s = x.iter().zip(y).map(|(p, q)| (p - q).abs()).sum::<f64>() / x.len() as f64;
        Ok(self.push(vec![1], vec![s], Op::L1 { a, b }, &[a, b]))
    }

    // ---- backward ----

    /// Reverse-mode sweep from a scalar `loss`. Gradients are stored on every
    /// node that depends on a [`Graph::param`] leaf and replace those of any
    /// earlier call.
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        if self.value(loss).len() != 1 {
            return Err(TensorError::NonScalarLoss(self.shape(loss).to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        for (node, g) in self.nodes.iter_mut().zip(grads) {
            node.value
                .set_grad(if node.requires_grad { g } else { None });
        }
        Ok(())
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let nodes = &self.nodes;
        let wants = |v: Var| nodes[v.0].requires_grad;
        let val = |v: Var| nodes[v.0].value.values();
        // Lazily allocated accumulator for an input's gradient.
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[v.0].requires_grad {
                return;
            }
            let buf = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.len()]);
            f(buf);
        };
        match node.op {
            Op::Leaf => {}
            Op::Reshape(x) => acc(x, &mut |d| add_into(d, g)),
            Op::Transpose { x, rows, cols } => {
                let gt = kernels::transpose(g, cols, rows);
                acc(x, &mut |d| add_into(d, &gt));
            }
            Op::Matmul { a, b, m, k, n } => {
                if wants(a) {
                    let bv = val(b);
                    acc(a, &mut |d| kernels::matmul_nt_acc(g, bv, d, m, k, n));
                }
                if wants(b) {
                    let av = val(a);
                    acc(b, &mut |d| kernels::matmul_tn_acc(av, g, d, m, k, n));
                }
            }
            Op::Add(a, b) => {
                acc(a, &mut |d| add_into(d, g));
                acc(b, &mut |d| add_into(d, g));
            }
            Op::Sub(a, b) => {
                acc(a, &mut |d| add_into(d, g));
                acc(b, &mut |d| d.iter_mut().zip(g).for_each(|(o, gv)| *o -= gv));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(a), val(b));
                acc(a, &mut |d| {
                    for ((o, gv), y) in d.iter_mut().zip(g).zip(bv) {
                        *o += gv * y;
                    }
                });
                acc(b, &mut |d| {
                    for ((o, gv), x) in d.iter_mut().zip(g).zip(av) {
                        *o += gv * x;
                    }
                });
            }
            Op::Scale(x, s) => acc(x, &mut |d| {
                d.iter_mut().zip(g).for_each(|(o, gv)| *o += gv * s)
            }),
            Op::AddScalar(x) => acc(x, &mut |d| add_into(d, g)),
            Op::Relu(x) => {
                let xv = val(x);
                acc(x, &mut |d| {
                    for ((o, gv), v) in d.iter_mut().zip(g).zip(xv) {
                        if *v > 0.0 {
                            *o += gv;
                        }
                    }
                });
            }
            Op::Sqrt(x) => {
                let yv = node.value.values();
                acc(x, &mut |d| {
                    for ((o, gv), y) in d.iter_mut().zip(g).zip(yv) {
                        *o += gv / (2.0 * y);
                    }
                });
            }
            Op::Clamp01(x) => {
                let xv = val(x);
                acc(x, &mut |d| {
                    for ((o, gv), v) in d.iter_mut().zip(g).zip(xv) {
                        if (0.0..=1.0).contains(v) {
                            *o += gv;
                        }
                    }
                });
            }
            Op::Conv1x1 {
                x,
                w,
                b,
                cin,
                cout,
                n,
            } => {
                if wants(w) {
                    let xv = val(x);
                    acc(w, &mut |d| kernels::matmul_nt_acc(g, xv, d, cout, cin, n));
                }
                if wants(x) {
                    let wv = val(w);
                    acc(x, &mut |d| kernels::matmul_tn_acc(wv, g, d, cout, cin, n));
                }
                acc(b, &mut |d| row_sums_into(d, g, n));
            }
            Op::Conv3x3 {
                x,
                w,
                b,
                ref cols,
                stride,
            } => {
                let (cin, h, wd) = match *nodes[x.0].value.shape() {
                    [c, h, w] => (c, h, w),
                    _ => unreachable!("conv3x3 input is rank 3"),
                };
                let cout = node.value.shape()[0];
                let np = node.value.len() / cout;
                if wants(w) {
                    acc(w, &mut |d| {
                        kernels::matmul_nt_acc(g, cols, d, cout, cin * 9, np)
                    });
                }
                if wants(x) {
                    let mut dcols = vec![0.0; cols.len()];
                    kernels::matmul_tn_acc(val(w), g, &mut dcols, cout, cin * 9, np);
                    acc(x, &mut |d| {
                        kernels::col2im_acc(&dcols, d, cin, h, wd, stride)
                    });
                }
                acc(b, &mut |d| row_sums_into(d, g, np));
            }
            Op::Upsample2x(x) => {
                let [c, oh, ow] = *node.value.shape() else {
                    unreachable!("upsample output is rank 3")
                };
                let (h, w) = (oh / 2, ow / 2);
                acc(x, &mut |d| {
                    for ci in 0..c {
                        for y in 0..oh {
                            for xx in 0..ow {
                                d[(ci * h + y / 2) * w + xx / 2] += g[(ci * oh + y) * ow + xx];
                            }
                        }
                    }
                });
            }
            Op::ConcatChannels(a, b) => {
                let split = nodes[a.0].value.len();
                acc(a, &mut |d| add_into(d, &g[..split]));
                acc(b, &mut |d| add_into(d, &g[split..]));
            }
            Op::SoftmaxRows { x, cols } => {
                let y = node.value.values();
                acc(x, &mut |d| {
                    for ((drow, grow), yrow) in d
                        .chunks_exact_mut(cols)
                        .zip(g.chunks_exact(cols))
                        .zip(y.chunks_exact(cols))
                    {
                        let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                        for ((o, gv), yv) in drow.iter_mut().zip(grow).zip(yrow) {
                            *o += yv * (gv - dot);
                        }
                    }
                });
            }
            Op::MaskedMean { x, ref mask, count } => {
                if count == 0 {
                    return;
                }
                let n = mask.len();
                let cnt = count as f64;
                acc(x, &mut |d| {
                    for (ci, gv) in g.iter().enumerate() {
                        for s in 0..n {
                            if mask[s] == 1.0 {
                                d[ci * n + s] += gv / cnt;
                            }
                        }
                    }
                });
            }
            Op::MaskedVar { x, ref mask, count } => {
                if count == 0 {
                    return;
                }
                let n = mask.len();
                let cnt = count as f64;
                let xv = val(x);
                acc(x, &mut |d| {
                    for (ci, gv) in g.iter().enumerate() {
                        let plane = &xv[ci * n..(ci + 1) * n];
                        let mu = plane
                            .iter()
                            .zip(mask)
                            .filter(|(_, &m)| m == 1.0)
                            .map(|(v, _)| v)
                            .sum::<f64>()
                            / cnt;
                        for s in 0..n {
                            if mask[s] == 1.0 {
                                d[ci * n + s] += gv * 2.0 * (plane[s] - mu) / cnt;
                            }
                        }
                    }
                });
            }
            Op::ChannelNormalize { x, mean, std } => {
                let c = nodes[mean.0].value.len();
                let n = node.value.len() / c;
                let (xv, mu, sd) = (val(x), val(mean), val(std));
                acc(x, &mut |d| {
                    for ci in 0..c {
                        for s in 0..n {
                            d[ci * n + s] += g[ci * n + s] / sd[ci];
                        }
                    }
                });
                acc(mean, &mut |d| {
                    for ci in 0..c {
                        let gs: f64 = g[ci * n..(ci + 1) * n].iter().sum();
                        d[ci] -= gs / sd[ci];
                    }
                });
                acc(std, &mut |d| {
                    for ci in 0..c {
                        let s: f64 = (0..n)
                            .map(|s| g[ci * n + s] * (xv[ci * n + s] - mu[ci]))
                            .sum();
                        d[ci] -= s / (sd[ci] * sd[ci]);
                    }
                });
            }
            Op::ChannelAffine { x, scale, shift } => {
                let c = nodes[scale.0].value.len();
                let n = node.value.len() / c;
                let (xv, a) = (val(x), val(scale));
                acc(x, &mut |d| {
                    for ci in 0..c {
                        for s in 0..n {
                            d[ci * n + s] += g[ci * n + s] * a[ci];
                        }
                    }
                });
                acc(scale, &mut |d| {
                    for ci in 0..c {
                        d[ci] += (0..n).map(|s| g[ci * n + s] * xv[ci * n + s]).sum::<f64>();
                    }
                });
                acc(shift, &mut |d| row_sums_into(d, g, n));
            }
            Op::MaskSites { x, ref mask } => {
                let n = mask.len();
                acc(x, &mut |d| {
                    for (i, (o, gv)) in d.iter_mut().zip(g).enumerate() {
                        if mask[i % n] == 1.0 {
                            *o += gv;
                        }
                    }
                });
            }
            Op::Select { on, off, ref mask } => {
                let n = mask.len();
                acc(on, &mut |d| {
                    for (i, (o, gv)) in d.iter_mut().zip(g).enumerate() {
                        if mask[i % n] == 1.0 {
                            *o += gv;
                        }
                    }
                });
                acc(off, &mut |d| {
                    for (i, (o, gv)) in d.iter_mut().zip(g).enumerate() {
                        if mask[i % n] != 1.0 {
                            *o += gv;
                        }
                    }
                });
            }
            Op::Sum(x) => acc(x, &mut |d| d.iter_mut().for_each(|o| *o += g[0])),
            Op::Mean(x) => {
                let n = nodes[x.0].value.len() as f64;
                acc(x, &mut |d| d.iter_mut().for_each(|o| *o += g[0] / n));
            }
            Op::L1 { a, b } => {
                let (av, bv) = (val(a), val(b));
                let scale = g[0] / av.len() as f64;
                let sign = |p: f64, q: f64| {
                    if p > q {
                        1.0
                    } else if p < q {
                        -1.0
                    } else {
                        0.0
                    }
                };
                acc(a, &mut |d| {
                    for (i, o) in d.iter_mut().enumerate() {
                        *o += scale * sign(av[i], bv[i]);
                    }
                });
                acc(b, &mut |d| {
                    for (i, o) in d.iter_mut().enumerate() {
                        *o -= scale * sign(av[i], bv[i]);
                    }
                });
            }
        }
    }
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

fn add_into(d: &mut [f64], g: &[f64]) {
    for (o, gv) in d.iter_mut().zip(g) {
        *o += gv;
    }
}

fn row_sums_into(d: &mut [f64], g: &[f64], n: usize) {
    for (o, row) in d.iter_mut().zip(g.chunks_exact(n)) {
        *o += row.iter().sum::<f64>();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), v.to_vec()).unwrap()
    }

    /// Naive i-j-k triple loop, kept independent of the kernel.
    fn naive_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0;
                for p in 0..k {
                    acc += a[i * k + p] * b[p * n + j];
                }
                out[i * n + j] = acc;
            }
        }
        out
    }

    #[test]
    fn matmul_examples() {
        let mut g = Graph::new();
        let i2 = g.constant(Tensor::eye(2).unwrap());
        let b = g.constant(t(&[2, 2], &[3.0, 4.0, 5.0, 6.0]));
        let out = g.matmul(i2, b).unwrap();
        assert_eq!(g.value(out).values(), &[3.0, 4.0, 5.0, 6.0]);

        let a = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = g.constant(t(&[2, 2], &[5.0, 6.0, 7.0, 8.0]));
        let out = g.matmul(a, b).unwrap();
        let oracle = naive_matmul(&[1.0, 2.0, 3.0, 4.0], &[5.0, 6.0, 7.0, 8.0], 2, 2, 2);
        assert_eq!(oracle, vec![19.0, 22.0, 43.0, 50.0]);
        assert_eq!(g.value(out).values(), oracle.as_slice());

        let z = g.constant(Tensor::zeros([2, 3]).unwrap());
        let b = g.constant(t(&[3, 2], &[1.0, -2.0, 3.0, 4.5, 5.0, 6.0]));
        let out = g.matmul(z, b).unwrap();
        assert!(g.value(out).values().iter().all(|&v| v == 0.0));
        assert_eq!(g.shape(out), &[2, 2]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros([2, 3]).unwrap());
        let b = g.constant(Tensor::zeros([2, 3]).unwrap());
        let err = g.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("matmul"), "{msg}");
    }

    #[test]
    fn conv1x1_examples() {
        let mut g = Graph::new();
        let x = g.constant(t(&[2, 1, 1], &[1.0, 2.0]));
        let w = g.constant(t(&[2, 2], &[1.0, 1.0, 2.0, 0.0]));
        let b = g.constant(t(&[2], &[0.0, 1.0]));
        let out = g.conv1x1(x, w, b).unwrap();
        // Per-pixel oracle: [1+2+0, 2*1+0*2+1].
        assert_eq!(g.value(out).values(), &[3.0, 3.0]);

        let xv: Vec<f64> = (0..12).map(|i| i as f64 * 0.5 - 2.0).collect();
        let x = g.constant(t(&[3, 2, 2], &xv));
        let w = g.constant(Tensor::eye(3).unwrap());
        let b = g.constant(Tensor::zeros([3]).unwrap());
        let out = g.conv1x1(x, w, b).unwrap();
        assert_eq!(g.value(out).values(), xv.as_slice());

        let w = g.constant(Tensor::zeros([2, 3]).unwrap());
        let b = g.constant(t(&[2], &[0.25, -1.5]));
        let out = g.conv1x1(x, w, b).unwrap();
        let v = g.value(out).values();
        assert!(v[..4].iter().all(|&x| x == 0.25) && v[4..].iter().all(|&x| x == -1.5));

        let bad = g.constant(Tensor::zeros([2, 2]).unwrap());
        assert!(matches!(
            g.conv1x1(x, bad, b),
            Err(TensorError::Shape { op: "conv1x1", .. })
        ));
    }

    #[test]
    fn conv3x3_examples() {
        let mut g = Graph::new();
        let xv: Vec<f64> = (0..2 * 9).map(|i| (i as f64).sin()).collect();
        let x = g.constant(t(&[2, 3, 3], &xv));
        let mut delta = vec![0.0; 2 * 2 * 9];
        delta[4] = 1.0; // out 0 <- in 0 centre
        delta[18 + 9 + 4] = 1.0; // out 1 <- in 1 centre
        let w = g.constant(t(&[2, 2, 3, 3], &delta));
        let b = g.constant(Tensor::zeros([2]).unwrap());
        let out = g.conv3x3(x, w, b, 1).unwrap();
        assert_eq!(g.value(out).values(), xv.as_slice());

        // Ones kernel over ones: count the in-bounds taps of each window.
        let x = g.constant(Tensor::full([1, 3, 3], 1.0).unwrap());
        let w = g.constant(Tensor::full([1, 1, 3, 3], 1.0).unwrap());
        let b = g.constant(Tensor::zeros([1]).unwrap());
        let out = g.conv3x3(x, w, b, 1).unwrap();
        let mut oracle = vec![0.0; 9];
        for (oy, ox) in (0..3).flat_map(|y| (0..3).map(move |x| (y, x))) {
            for (ky, kx) in (0..3i32).flat_map(|y| (0..3i32).map(move |x| (y, x))) {
                let (iy, ix) = (oy as i32 + ky - 1, ox as i32 + kx - 1);
                if (0..3).contains(&iy) && (0..3).contains(&ix) {
                    oracle[oy * 3 + ox] += 1.0;
                }
            }
        }
        assert_eq!(oracle, vec![4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0]);
        assert_eq!(g.value(out).values(), oracle.as_slice());

        let x = g.constant(Tensor::zeros([1, 4, 4]).unwrap());
        let out = g.conv3x3(x, w, b, 2).unwrap();
        assert_eq!(g.shape(out), &[1, 2, 2]);
        assert!(g.conv3x3(x, w, b, 3).is_err());
    }

    #[test]
    fn softmax_examples() {
        let mut g = Graph::new();
        let x = g.constant(t(&[2, 2], &[0.0, 0.0, 2f64.ln(), 0.0]));
        let y = g.softmax_rows(x, None).unwrap();
        let v = g.value(y).values();
        assert_eq!(&v[..2], &[0.5, 0.5]);
        assert!((v[2] - 2.0 / 3.0).abs() < 1e-15 && (v[3] - 1.0 / 3.0).abs() < 1e-15);

        let x = g.constant(t(&[1, 2], &[5.0, 7.0]));
        let m = t(&[1, 2], &[0.0, -MASK_LARGE]);
        let y = g.softmax_rows(x, Some(&m)).unwrap();
        let v = g.value(y).values();
        assert!((v[0] - 1.0).abs() < 1e-9 && v[1].abs() < 1e-9);

        let m = t(&[1, 2], &[-MASK_LARGE, -MASK_LARGE]);
        assert_eq!(
            g.softmax_rows(x, Some(&m)).unwrap_err(),
            TensorError::DegenerateAttention { row: 0 }
        );
    }

    #[test]
    fn masked_stats_examples() {
        let mut g = Graph::new();
        let x = g.constant(t(&[2, 1, 3], &[5.0, 5.0, -9.0, 1.0, 3.0, 100.0]));
        let m = t(&[1, 1, 3], &[1.0, 1.0, 0.0]);
        let s = g.masked_channel_stats(x, &m).unwrap();
        assert_eq!(s.count, 2);
        assert_eq!(g.value(s.mean).values(), &[5.0, 2.0]);
        assert_eq!(g.value(s.var).values(), &[0.0, 1.0]);

        let z = t(&[1, 1, 3], &[0.0; 3]);
        assert_eq!(g.masked_channel_stats(x, &z).unwrap().count, 0);

        let bad = t(&[1, 1, 3], &[0.5, 1.0, 0.0]);
        assert!(matches!(
            g.masked_channel_stats(x, &bad),
            Err(TensorError::NonBinaryMask { .. })
        ));
    }

    #[test]
    fn backward_accumulates_shared_inputs() {
        // f(x) = sum(x * x + x) => df/dx = 2x + 1
        let mut g = Graph::new();
        let x = g.param(t(&[3], &[1.0, -2.0, 0.5]));
        let sq = g.mul(x, x).unwrap();
        let y = g.add(sq, x).unwrap();
        let s = g.sum(y);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[3.0, -3.0, 2.0]);
        assert!(g.backward(y).is_err());
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new();
        let x = g.param(t(&[2], &[1.0, 2.0]));
        let c = g.constant(t(&[2], &[3.0, 4.0]));
        let y = g.mul(x, c).unwrap();
        let s = g.sum(y);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[3.0, 4.0]);
        assert!(g.grad(c).is_none());
    }

    #[test]
    fn l1_subgradient_is_zero_at_equality() {
        let mut g = Graph::new();
        let a = g.param(t(&[4], &[0.0, 0.0, 3.0, -1.0]));
        let b = g.constant(Tensor::zeros([4]).unwrap());
        let l = g.l1_loss(a, b).unwrap();
        assert_eq!(g.value(l).values(), &[1.0]);
        g.backward(l).unwrap();
        assert_eq!(g.grad(a).unwrap(), &[0.0, 0.0, 0.25, -0.25]);
    }
}
