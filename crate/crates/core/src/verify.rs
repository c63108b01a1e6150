//! Self-check suites: central-difference gradient checks for every
//! differentiable graph operation and the blocks built from them, plus exact
//! invariants of the normalization blocks and the network.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::generator::{GeneratorModel, ModelError, NormBlock, UNetConfig};
use crate::imaging::{compose, Image, Mask};
use crate::norm::{self, SrinParams, SrinVars, NORM_EPS};
use crate::synthdata::{generate_sample, GenConfig};
use crate::tensor::{grad_check, Graph, Tensor, TensorError, Var};

/// Finite-difference step used by the suites.
pub const STEP: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckOutcome {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl fmt::Display for CheckOutcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tag = if self.passed { "ok  " } else { "FAIL" };
        write!(f, "{tag} {:<24} {}", self.name, self.detail)
    }
}

struct Rand(ChaCha8Rng);

impl Rand {
    fn new(seed: u64) -> Self {
        Self(ChaCha8Rng::seed_from_u64(seed))
    }

    fn uniform(&mut self, shape: &[usize], lo: f64, hi: f64) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| self.0.gen_range(lo..hi)).collect()).unwrap()
    }

    /// Values in `±[gap, 1]`, away from the kink at 0.
    fn signed_away(&mut self, shape: &[usize], gap: f64) -> Tensor {
        let n = shape.iter().product();
        let v = (0..n)
            .map(|_| {
                let m = self.0.gen_range(gap..1.0);
                if self.0.gen_bool(0.5) {
                    m
                } else {
                    -m
                }
            })
            .collect();
        Tensor::new(shape, v).unwrap()
    }

    fn mask(&mut self, h: usize, w: usize) -> Mask {
        let mut bits: Vec<bool> = (0..h * w).map(|_| self.0.gen_bool(0.4)).collect();
        bits[0] = true;
        bits[h * w - 1] = false;
        Mask::new(h, w, bits).unwrap()
    }
}

/// Contracts `x` with fixed pseudo-random weights so every output entry
/// reaches the loss with a distinct coefficient.
fn probe(g: &mut Graph, x: Var) -> Result<Var, TensorError> {
    let shape = g.shape(x).to_vec();
    let n: usize = shape.iter().product();
    let w = (0..n)
        .map(|i| 0.5 + ((i * 7919) % 101) as f64 / 101.0)
        .collect();
    let w = g.constant(Tensor::new(shape, w)?);
    let p = g.mul(x, w)?;
    Ok(g.sum(p))
}

type Case = (
    &'static str,
    Vec<Tensor>,
    Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var, TensorError>>,
);

fn op_cases() -> Vec<Case> {
    let mut r = Rand::new(0x9e37);
    let mask = r.mask(3, 4);
    let mask_t = mask.to_tensor();
    let mut cases: Vec<Case> = Vec::new();
    macro_rules! case {
        ($name:expr, [$($t:expr),*], $f:expr) => {
            cases.push(($name, vec![$($t),*], Box::new($f)))
        };
    }
    case!(
        "matmul",
        [r.uniform(&[3, 4], -1.0, 1.0), r.uniform(&[4, 2], -1.0, 1.0)],
        |g, x| {
            let y = g.matmul(x[0], x[1])?;
            probe(g, y)
        }
    );
    case!("transpose", [r.uniform(&[3, 5], -1.0, 1.0)], |g, x| {
        let y = g.transpose(x[0])?;
        probe(g, y)
    });
    case!("reshape", [r.uniform(&[2, 6], -1.0, 1.0)], |g, x| {
        let y = g.reshape(x[0], &[3, 2, 2])?;
        probe(g, y)
    });
    case!(
        "add",
        [r.uniform(&[2, 3], -1.0, 1.0), r.uniform(&[2, 3], -1.0, 1.0)],
        |g, x| {
            let y = g.add(x[0], x[1])?;
            probe(g, y)
        }
    );
    case!(
        "sub",
        [r.uniform(&[2, 3], -1.0, 1.0), r.uniform(&[2, 3], -1.0, 1.0)],
        |g, x| {
            let y = g.sub(x[0], x[1])?;
            probe(g, y)
        }
    );
    case!(
        "mul",
        [r.uniform(&[2, 3], -1.0, 1.0), r.uniform(&[2, 3], -1.0, 1.0)],
        |g, x| {
            let y = g.mul(x[0], x[1])?;
            probe(g, y)
        }
    );
    case!("scale", [r.uniform(&[4], -1.0, 1.0)], |g, x| {
        let y = g.scale(x[0], -1.7);
        probe(g, y)
    });
    case!("add_scalar", [r.uniform(&[4], -1.0, 1.0)], |g, x| {
        let y = g.add_scalar(x[0], 0.3);
        probe(g, y)
    });
    case!("relu", [r.signed_away(&[10], 0.05)], |g, x| {
        let y = g.relu(x[0]);
        probe(g, y)
    });
    case!("sqrt", [r.uniform(&[6], 0.5, 2.0)], |g, x| {
        let y = g.sqrt(x[0]);
        probe(g, y)
    });
    case!(
        "clamp01",
        [r.uniform(&[4], 0.1, 0.9), r.uniform(&[4], 1.1, 2.0)],
        |g, x| {
            let a = g.clamp01(x[0]);
            let b = g.clamp01(x[1]);
            let s = g.add(a, b)?;
            probe(g, s)
        }
    );
    case!(
        "conv1x1",
        [
            r.uniform(&[3, 2, 3], -1.0, 1.0),
            r.uniform(&[4, 3], -1.0, 1.0),
            r.uniform(&[4], -1.0, 1.0)
        ],
        |g, x| {
            let y = g.conv1x1(x[0], x[1], x[2])?;
            probe(g, y)
        }
    );
    for (name, stride) in [("conv3x3", 1), ("conv3x3_stride2", 2)] {
        let inputs = vec![
            r.uniform(&[2, 5, 4], -1.0, 1.0),
            r.uniform(&[3, 2, 3, 3], -1.0, 1.0),
            r.uniform(&[3], -1.0, 1.0),
        ];
        cases.push((
            name,
            inputs,
            Box::new(move |g: &mut Graph, x: &[Var]| {
                let y = g.conv3x3(x[0], x[1], x[2], stride)?;
                probe(g, y)
            }),
        ));
    }
    case!("upsample2x", [r.uniform(&[2, 2, 3], -1.0, 1.0)], |g, x| {
        let y = g.upsample2x(x[0])?;
        probe(g, y)
    });
    case!(
        "concat_channels",
        [
            r.uniform(&[1, 2, 2], -1.0, 1.0),
            r.uniform(&[2, 2, 2], -1.0, 1.0)
        ],
        |g, x| {
            let y = g.concat_channels(x[0], x[1])?;
            probe(g, y)
        }
    );
    case!("softmax_rows", [r.uniform(&[3, 4], -2.0, 2.0)], |g, x| {
        let y = g.softmax_rows(x[0], None)?;
        probe(g, y)
    });
    let logit_mask = Tensor::new(
        [3, 4],
        (0..12)
            .map(|i| if i % 4 == 1 { -1e9 } else { 0.0 })
            .collect(),
    )
    .unwrap();
    cases.push((
        "softmax_rows_masked",
        vec![r.uniform(&[3, 4], -2.0, 2.0)],
        Box::new(move |g: &mut Graph, x: &[Var]| {
            let y = g.softmax_rows(x[0], Some(&logit_mask))?;
            probe(g, y)
        }),
    ));
    {
        let m = mask_t.clone();
        cases.push((
            "masked_channel_stats",
            vec![r.uniform(&[2, 3, 4], -1.0, 1.0)],
            Box::new(move |g: &mut Graph, x: &[Var]| {
                let s = g.masked_channel_stats(x[0], &m)?;
                let a = probe(g, s.mean)?;
                let b = probe(g, s.var)?;
                g.add(a, b)
            }),
        ));
    }
    case!(
        "channel_normalize",
        [
            r.uniform(&[2, 2, 3], -1.0, 1.0),
            r.uniform(&[2], -1.0, 1.0),
            r.uniform(&[2], 0.5, 2.0)
        ],
        |g, x| {
            let y = g.channel_normalize(x[0], x[1], x[2])?;
            probe(g, y)
        }
    );
    case!(
        "channel_affine",
        [
            r.uniform(&[2, 2, 3], -1.0, 1.0),
            r.uniform(&[2], -1.0, 1.0),
            r.uniform(&[2], -1.0, 1.0)
        ],
        |g, x| {
            let y = g.channel_affine(x[0], x[1], x[2])?;
            probe(g, y)
        }
    );
    {
        let m = mask_t.clone();
        cases.push((
            "mask_sites",
            vec![r.uniform(&[2, 3, 4], -1.0, 1.0)],
            Box::new(move |g: &mut Graph, x: &[Var]| {
                let y = g.mask_sites(x[0], &m)?;
                probe(g, y)
            }),
        ));
    }
    {
        let m = mask_t.clone();
        cases.push((
            "select",
            vec![
                r.uniform(&[2, 3, 4], -1.0, 1.0),
                r.uniform(&[2, 3, 4], -1.0, 1.0),
            ],
            Box::new(move |g: &mut Graph, x: &[Var]| {
                let y = g.select(x[0], x[1], &m)?;
                probe(g, y)
            }),
        ));
    }
    case!("sum", [r.uniform(&[5], -1.0, 1.0)], |g, x| Ok(g.sum(x[0])));
    case!("mean", [r.uniform(&[2, 3], -1.0, 1.0)], |g, x| Ok(
        g.mean(x[0])
    ));
    {
        let a = r.uniform(&[8], -1.0, 1.0);
        let offset = r.signed_away(&[8], 0.05);
        let b = Tensor::new(
            [8],
            a.values()
                .iter()
                .zip(offset.values())
                .map(|(x, d)| x + d)
                .collect(),
        )
        .unwrap();
        case!("l1_loss", [a, b], |g, x| g.l1_loss(x[0], x[1]));
    }
    {
        let m = mask.clone();
        cases.push((
            "region_instance_norm",
            vec![r.uniform(&[2, 3, 4], -1.0, 1.0)],
            Box::new(move |g: &mut Graph, x: &[Var]| {
                let y = norm::region_instance_norm(g, x[0], &m, NORM_EPS)?.normalized;
                probe(g, y)
            }),
        ));
    }
    {
        let m = mask.clone();
        cases.push((
            "rain_forward",
            vec![r.uniform(&[2, 3, 4], -1.0, 1.0)],
            Box::new(move |g: &mut Graph, x: &[Var]| {
                let y = norm::rain_forward(g, x[0], &m, NORM_EPS)?;
                probe(g, y)
            }),
        ));
    }
    {
        let m = mask.clone();
        let sem = r.uniform(&[3, 3, 4], 0.0, 1.0);
        let params = SrinParams::init(2, &mut r.0);
        let mut inputs = vec![r.uniform(&[2, 3, 4], -1.0, 1.0)];
        inputs.extend(params.tensors().into_iter().cloned());
        cases.push((
            "srin_forward",
            inputs,
            Box::new(move |g: &mut Graph, x: &[Var]| {
                let s = g.constant(sem.clone());
                let vars = SrinVars::from_array(std::array::from_fn(|i| x[i + 1]));
                let y = norm::srin_forward(g, x[0], &m, s, &vars, NORM_EPS)?.output;
                probe(g, y)
            }),
        ));
    }
    cases
}

/// The size-16, one-stage, four-channel SRIN network with a random head,
/// scored by L1 against the real image of a synthetic sample.
pub fn tiny_network_check(tol: f64) -> Result<CheckOutcome, ModelError> {
    let cfg = UNetConfig {
        size: 16,
        stages: 1,
        base_channels: 4,
        block: NormBlock::Srin,
        residual: true,
    };
    let mut model = GeneratorModel::new(cfg, 17)?;
    let mut r = Rand::new(18);
    let n = model.tensors().len();
    for t in model.tensors_mut().into_iter().skip(n - 2) {
        let fresh = r.uniform(t.shape(), -0.2, 0.2);
        *t = fresh;
    }
    let sample = generate_sample(
        &GenConfig {
            size: 16,
            fg_ratio: (0.2, 0.4),
            ..GenConfig::default()
        },
        3,
    )
    .map_err(|e| ModelError::Config(e.to_string()))?;
    let reference = sample.real.to_chw();
    let inputs: Vec<Tensor> = model.tensors().into_iter().cloned().collect();
    let report = grad_check(
        "unet",
        |g, xs| {
            let fwd = model
                .forward_with(
                    g,
                    xs.to_vec(),
                    &sample.composite,
                    &sample.mask,
                    &sample.semantic,
                )
                .map_err(|e| match e {
                    ModelError::Graph(t) => t,
                    e => unreachable!("inputs are prevalidated: {e}"),
                })?;
            let target = g.constant(reference.clone());
            g.l1_loss(fwd.output, target)
        },
        &inputs,
        STEP,
        tol,
    );
    Ok(outcome_of("unet_tiny", report))
}

fn outcome_of(
    name: &str,
    report: Result<crate::tensor::GradCheckReport, crate::tensor::GradCheckError>,
) -> CheckOutcome {
    match report {
        Ok(r) => CheckOutcome {
            name: name.to_string(),
            passed: r.pass,
            detail: format!("max_rel_err={:.3e} coords={}", r.max_rel_err, r.coords),
        },
        Err(e) => CheckOutcome {
            name: name.to_string(),
            passed: false,
            detail: e.to_string(),
        },
    }
}

/// Gradient checks of every graph operation, the normalization blocks and
/// the tiny network.
pub fn gradient_suite(tol: f64) -> Vec<CheckOutcome> {
    let mut out: Vec<CheckOutcome> = op_cases()
        .into_iter()
        .map(|(name, inputs, f)| outcome_of(name, grad_check(name, f, &inputs, STEP, tol)))
        .collect();
    out.push(tiny_network_check(tol).unwrap_or_else(|e| CheckOutcome {
        name: "unet_tiny".into(),
        passed: false,
        detail: e.to_string(),
    }));
    out
}

fn check(name: &str, passed: bool, detail: impl Into<String>) -> CheckOutcome {
    CheckOutcome {
        name: name.into(),
        passed,
        detail: detail.into(),
    }
}

/// Exact invariants over seeded random instances.
pub fn invariant_suite(instances: usize) -> Vec<CheckOutcome> {
    let mut out = Vec::new();
    let mut r = Rand::new(0x51ab);
    let (mut passthrough, mut rows, mut modulation) = (true, true, true);
    let mut worst_row = 0.0f64;
    for _ in 0..instances {
        let c = r.0.gen_range(1..=3);
        let side = r.0.gen_range(2..=4);
        let n = side * side;
        let mask = r.mask(side, side);
        let f = r.uniform(&[c, side, side], -2.0, 2.0);
        let sem = r.uniform(&[3, side, side], 0.0, 1.0);
        let params = SrinParams::init(c, &mut r.0);
        let mut g = Graph::new();
        let fv = g.constant(f.clone());
        let sv = g.constant(sem);
        let vars = params.register(&mut g);
        let res = match norm::srin_forward(&mut g, fv, &mask, sv, &vars, NORM_EPS) {
            Ok(res) => res,
            Err(e) => {
                out.push(check("srin_forward", false, e.to_string()));
                return out;
            }
        };
        let o = g.value(res.output).values();
        for i in 0..c * n {
            if !mask.bits()[i % n] && o[i].to_bits() != f.values()[i].to_bits() {
                passthrough = false;
            }
        }
        let att = g
            .value(res.attention.expect("both regions present"))
            .values();
        for i in 0..n {
            let row = &att[i * n..(i + 1) * n];
            worst_row = worst_row.max((row.iter().sum::<f64>() - 1.0).abs());
            if (0..n).any(|j| mask.bits()[j] && row[j] != 0.0) {
                rows = false;
            }
        }
        for v in [res.gamma, res.beta].into_iter().flatten() {
            for (i, &x) in g.value(v).values().iter().enumerate() {
                if x < 0.0 || (!mask.bits()[i % n] && x != 0.0) {
                    modulation = false;
                }
            }
        }
    }
    out.push(check(
        "srin_background",
        passthrough,
        format!("{instances} instances, background equals input bit for bit"),
    ));
    out.push(check(
        "attention_rows",
        rows && worst_row <= 1e-9,
        format!("max |row sum - 1| = {worst_row:.2e}, foreground keys zero = {rows}"),
    ));
    out.push(check(
        "modulation_sign",
        modulation,
        "gamma, beta >= 0 and zero off the mask",
    ));

    let cfg = UNetConfig {
        size: 32,
        stages: 2,
        base_channels: 4,
        block: NormBlock::Srin,
        residual: true,
    };
    let net = (|| -> Result<(bool, bool, bool), ModelError> {
        let mut model = GeneratorModel::new(cfg, 5)?;
        let sample = generate_sample(
            &GenConfig {
                size: 32,
                ..GenConfig::default()
            },
            0,
        )
        .map_err(|e| ModelError::Config(e.to_string()))?;
        let zero_head =
            model.harmonize(&sample.composite, &sample.mask, &sample.semantic)? == sample.composite;
        let n = model.tensors().len();
        for t in model.tensors_mut().into_iter().skip(n - 2) {
            *t = r.uniform(t.shape(), -0.5, 0.5);
        }
        let h = model.harmonize(&sample.composite, &sample.mask, &sample.semantic)?;
        let background = compose(&h, &sample.composite, &sample.mask)? == h
            && h.data()
                .chunks(3)
                .zip(sample.composite.data().chunks(3))
                .zip(sample.mask.bits())
                .all(|((a, b), &m)| m || a == b);
        let empty = Mask::filled(32, 32, false).unwrap();
        let all_zero =
            model.harmonize(&sample.composite, &empty, &sample.semantic)? == sample.composite;
        Ok((zero_head, background, all_zero))
    })();
    match net {
        Ok((zero_head, background, all_zero)) => {
            out.push(check(
                "zero_head_identity",
                zero_head,
                "output == composite",
            ));
            out.push(check(
                "network_background",
                background,
                "mask-0 pixels == composite",
            ));
            out.push(check(
                "empty_mask_identity",
                all_zero,
                "output == composite",
            ));
        }
        Err(e) => out.push(check("network", false, e.to_string())),
    }
    let img = Image::filled(2, 2, [0.25, 0.5, 0.75]).unwrap();
    out.push(check(
        "compose_identity",
        compose(&img, &img, &Mask::filled(2, 2, true).unwrap()).ok() == Some(img),
        "compose(x, x, m) == x",
    ));
    out
}
