//! End-to-end acceptance checks. Each test prints one `PASS`/`FAIL` line to
//! stderr (bypassing output capture) before asserting, and all of them take
//! a shared lock so that the timed checks are not measured while another one
//! competes for the CPU.

use std::io::Write;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use harmlab::btrank::{bt_fit, PairwiseWins, DEFAULT_MAX_ITER, DEFAULT_TOL};
use harmlab::generator::{
    decode_checkpoint, encode_checkpoint, GeneratorModel, NormBlock, UNetConfig,
};
use harmlab::imaging::{
    decode_pgm, decode_ppm, encode_pgm, encode_ppm, metrics, Image, Mask, DEFAULT_PSNR_CAP,
};
use harmlab::norm::{srin_forward, SrinParams, NORM_EPS};
use harmlab::synthdata::{generate_dataset, GenConfig};
use harmlab::tensor::{Graph, Tensor};
use harmlab::trainer::{evaluate, train_on, TrainConfig};
use harmlab::verify::gradient_suite;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

static SERIAL: Mutex<()> = Mutex::new(());

fn report(id: &str, passed: bool, detail: &str) {
    let tag = if passed { "PASS" } else { "FAIL" };
    let _ = writeln!(std::io::stderr(), "{id} {tag} {detail}");
    assert!(passed, "{id}: {detail}");
}

fn serial() -> std::sync::MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

struct Instance {
    f: Tensor,
    sem: Tensor,
    mask: Mask,
    params: SrinParams,
}

/// Random block inputs with C ≤ 3 and H = W ≤ 4, both regions non-empty.
fn instance(rng: &mut ChaCha8Rng) -> Instance {
    let c = rng.gen_range(1..=3);
    let side = rng.gen_range(2..=4);
    let n = side * side;
    let mut bits: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.4)).collect();
    let a = rng.gen_range(0..n);
    let mut b = rng.gen_range(0..n - 1);
    if b >= a {
        b += 1;
    }
    bits[a] = true;
    bits[b] = false;
    let f = (0..c * n).map(|_| rng.gen_range(-3.0..3.0)).collect();
    let sem = (0..3 * n).map(|_| rng.gen_range(0.0..1.0)).collect();
    Instance {
        f: Tensor::new([c, side, side], f).unwrap(),
        sem: Tensor::new([3, side, side], sem).unwrap(),
        mask: Mask::new(side, side, bits).unwrap(),
        params: SrinParams::init(c, rng),
    }
}

struct BlockRun {
    output: Vec<f64>,
    attention: Vec<f64>,
}

fn run_block(x: &Instance) -> BlockRun {
    let mut g = Graph::new();
    let f = g.constant(x.f.clone());
    let sem = g.constant(x.sem.clone());
    let vars = x.params.register(&mut g);
    let out = srin_forward(&mut g, f, &x.mask, sem, &vars, NORM_EPS).unwrap();
    BlockRun {
        output: g.value(out.output).values().to_vec(),
        attention: g.value(out.attention.unwrap()).values().to_vec(),
    }
}

/// Site-major scalar evaluation of the block, written from its definition.
fn oracle(x: &Instance) -> Vec<f64> {
    let c = x.f.shape()[0];
    let n = x.mask.bits().len();
    let fg = |s: usize| x.mask.bits()[s];
    let feat: Vec<Vec<f64>> = (0..n)
        .map(|s| (0..c).map(|k| x.f.values()[k * n + s]).collect())
        .collect();
    let sem: Vec<Vec<f64>> = (0..n)
        .map(|s| (0..3).map(|k| x.sem.values()[k * n + s]).collect())
        .collect();

    let fg_count = (0..n).filter(|&s| fg(s)).count() as f64;
    let mut norm = vec![vec![0.0; c]; n];
    for k in 0..c {
        let mut sum = 0.0;
        for s in (0..n).filter(|&s| fg(s)) {
            sum += feat[s][k];
        }
        let mean = sum / fg_count;
        let mut sq = 0.0;
        for s in (0..n).filter(|&s| fg(s)) {
            sq += (feat[s][k] - mean) * (feat[s][k] - mean);
        }
        let std = (sq / fg_count + NORM_EPS).sqrt();
        for s in 0..n {
            norm[s][k] = (feat[s][k] - mean) / std;
        }
    }

    let apply = |w: &Tensor, b: &Tensor, v: &[f64]| -> Vec<f64> {
        let cin = v.len();
        (0..c)
            .map(|o| {
                b.values()[o]
                    + (0..cin)
                        .map(|i| w.values()[o * cin + i] * v[i])
                        .sum::<f64>()
            })
            .collect()
    };
    let p = &x.params;
    let q: Vec<Vec<f64>> = sem
        .iter()
        .map(|v| apply(&p.query.weight, &p.query.bias, v))
        .collect();
    let key: Vec<Vec<f64>> = norm
        .iter()
        .map(|v| apply(&p.key.weight, &p.key.bias, v))
        .collect();
    let val: Vec<Vec<f64>> = feat
        .iter()
        .map(|v| apply(&p.value.weight, &p.value.bias, v))
        .collect();

    let mut out = feat.clone();
    for i in (0..n).filter(|&i| fg(i)) {
        let bg: Vec<usize> = (0..n).filter(|&j| !fg(j)).collect();
        let scores: Vec<f64> = bg
            .iter()
            .map(|&j| (0..c).map(|k| q[i][k] * key[j][k]).sum())
            .collect();
        let top = scores.iter().cloned().fold(f64::MIN, f64::max);
        let weights: Vec<f64> = scores.iter().map(|s| (s - top).exp()).collect();
        let z: f64 = weights.iter().sum();
        let mut attended = vec![0.0; c];
        for (&j, w) in bg.iter().zip(&weights) {
            for k in 0..c {
                attended[k] += w / z * val[j][k];
            }
        }
        let gamma = apply(&p.gamma.weight, &p.gamma.bias, &attended);
        let beta = apply(&p.beta.weight, &p.beta.bias, &attended);
        for k in 0..c {
            out[i][k] = gamma[k].max(0.0) * norm[i][k] + beta[k].max(0.0);
        }
    }
    (0..c * n).map(|idx| out[idx % n][idx / n]).collect()
}

#[test]
fn a1_gradient_suite() {
    let _guard = serial();
    let start = Instant::now();
    let results = gradient_suite(1e-4);
    let elapsed = start.elapsed();
    let failed: Vec<String> = results
        .iter()
        .filter(|r| !r.passed)
        .map(|r| r.to_string())
        .collect();
    let detail = format!(
        "{} checks, {} failed, {:.1}s{}",
        results.len(),
        failed.len(),
        elapsed.as_secs_f64(),
        failed.iter().map(|f| format!("; {f}")).collect::<String>()
    );
    report(
        "A1",
        failed.is_empty() && elapsed < Duration::from_secs(60),
        &detail,
    );
}

#[test]
fn a2_overfit() {
    let _guard = serial();
    let start = Instant::now();
    let data = GenConfig {
        size: 64,
        ..GenConfig::default()
    };
    let train = generate_dataset(&data, 0, 8, 1).unwrap();
    let cfg = TrainConfig {
        steps: 2000,
        network: UNetConfig {
            size: 64,
            block: NormBlock::Srin,
            ..UNetConfig::default()
        },
        ..TrainConfig::default()
    };
    let out = train_on(&cfg, &train, &[], |_| {}).unwrap();
    let psnr = evaluate(&out.model, &train, 1).unwrap().overall.psnr;
    let elapsed = start.elapsed();
    report(
        "A2",
        psnr >= 35.0 && elapsed < Duration::from_secs(600),
        &format!(
            "train PSNR {psnr:.2} dB after 2000 steps, {:.0}s",
            elapsed.as_secs_f64()
        ),
    );
}

const ABLATION_SIZE: usize = 32;
const ABLATION_STAGES: usize = 1;
const ABLATION_BASE: usize = 8;
const ABLATION_STEPS: usize = 6000;

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

#[test]
fn a3_ablation_direction() {
    let _guard = serial();
    let mut mse = [Vec::new(), Vec::new(), Vec::new()];
    let mut srin_le_rain = 0;
    let mut lines = Vec::new();
    for seed in 0..5u64 {
        let data = GenConfig {
            size: ABLATION_SIZE,
            seed: 1000 + seed,
            ..GenConfig::default()
        };
        let train = generate_dataset(&data, 0, 256, 1).unwrap();
        let test = generate_dataset(&data, 100_000, 64, 1).unwrap();
        let mut row = [0.0; 3];
        for (b, block) in NormBlock::ALL.into_iter().enumerate() {
            let cfg = TrainConfig {
                steps: ABLATION_STEPS,
                seed,
                network: UNetConfig {
                    size: ABLATION_SIZE,
                    stages: ABLATION_STAGES,
                    base_channels: ABLATION_BASE,
                    block,
                    residual: true,
                },
                ..TrainConfig::default()
            };
            let out = train_on(&cfg, &train, &[], |_| {}).unwrap();
            row[b] = evaluate(&out.model, &test, 1).unwrap().overall.mse;
            mse[b].push(row[b]);
        }
        if row[2] <= row[1] {
            srin_le_rain += 1;
        }
        lines.push(format!(
            "seed {seed}: none {:.2} rain {:.2} srin {:.2}",
            row[0], row[1], row[2]
        ));
    }
    let [none, rain, srin] = mse.map(median);
    let _ = writeln!(std::io::stderr(), "A3 detail: {}", lines.join("; "));
    report(
        "A3",
        srin < none && srin_le_rain >= 3,
        &format!(
            "median test MSE none {none:.2} rain {rain:.2} srin {srin:.2}; srin <= rain in {srin_le_rain}/5 seeds"
        ),
    );
}

#[test]
fn a4_oracle_equivalence() {
    let _guard = serial();
    let mut rng = ChaCha8Rng::seed_from_u64(0xa4);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let x = instance(&mut rng);
        let got = run_block(&x).output;
        let want = oracle(&x);
        for (a, b) in got.iter().zip(&want) {
            worst = worst.max((a - b).abs());
        }
    }
    report(
        "A4",
        worst <= 1e-10,
        &format!("100 instances, max abs diff {worst:.3e}"),
    );
}

fn tiny_model(block: NormBlock, seed: u64) -> GeneratorModel {
    let cfg = UNetConfig {
        size: 16,
        stages: 2,
        base_channels: 4,
        block,
        residual: true,
    };
    let mut model = GeneratorModel::new(cfg, seed).unwrap();
    // a non-zero head so the foreground actually changes
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for t in model.tensors_mut() {
        for v in t.values_mut() {
            *v += rng.gen_range(-0.05..0.05);
        }
    }
    model
}

#[test]
fn a5_exact_invariants() {
    let _guard = serial();
    let mut failures = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0xa5);

    for _ in 0..100 {
        let x = instance(&mut rng);
        let out = run_block(&x).output;
        let n = x.mask.bits().len();
        let moved = (0..out.len())
            .any(|i| !x.mask.bits()[i % n] && out[i].to_bits() != x.f.values()[i].to_bits());
        if moved {
            failures.push("block background changed");
            break;
        }
    }

    let data = GenConfig {
        size: 16,
        ..GenConfig::default()
    };
    let samples = generate_dataset(&data, 0, 6, 1).unwrap();
    for block in NormBlock::ALL {
        let model = tiny_model(block, 3);
        for s in &samples {
            let h = model.harmonize(&s.composite, &s.mask, &s.semantic).unwrap();
            let mut fg_changed = false;
            for (site, &fg) in s.mask.bits().iter().enumerate() {
                let a = &h.data()[site * 3..site * 3 + 3];
                let b = &s.composite.data()[site * 3..site * 3 + 3];
                if fg {
                    fg_changed |= a != b;
                } else if a.iter().zip(b).any(|(p, q)| p.to_bits() != q.to_bits()) {
                    failures.push("model background differs from composite");
                }
            }
            if !fg_changed {
                failures.push("model left the foreground untouched");
            }
            let empty = Mask::filled(16, 16, false).unwrap();
            let h = model.harmonize(&s.composite, &empty, &s.semantic).unwrap();
            if h.data()
                .iter()
                .zip(s.composite.data())
                .any(|(p, q)| p.to_bits() != q.to_bits())
            {
                failures.push("empty mask did not reproduce the composite");
            }
        }
    }

    for _ in 0..20 {
        let (h, w) = (rng.gen_range(1..20), rng.gen_range(1..20));
        let bytes: Vec<u8> = (0..h * w * 3).map(|_| rng.gen()).collect();
        let img = Image::from_bytes(h, w, &bytes).unwrap();
        let back = decode_ppm(&encode_ppm(&img)).unwrap();
        if back.to_bytes() != bytes || encode_ppm(&back) != encode_ppm(&img) {
            failures.push("PPM roundtrip");
        }
        let mask = Mask::new(h, w, (0..h * w).map(|_| rng.gen_bool(0.5)).collect()).unwrap();
        if decode_pgm(&encode_pgm(&mask)).unwrap() != mask {
            failures.push("PGM roundtrip");
        }
    }

    for block in NormBlock::ALL {
        let model = tiny_model(block, 9);
        let bytes = encode_checkpoint(&model);
        let back = decode_checkpoint(&bytes, Some(model.config())).unwrap();
        let same = model.tensors().iter().zip(back.tensors()).all(|(a, b)| {
            a.shape() == b.shape()
                && a.values()
                    .iter()
                    .zip(b.values())
                    .all(|(p, q)| p.to_bits() == q.to_bits())
        });
        if !same || encode_checkpoint(&back) != bytes {
            failures.push("checkpoint roundtrip");
        }
    }

    if generate_dataset(&data, 0, 6, 1).unwrap() != samples {
        failures.push("dataset generation not reproducible");
    }
    let run = || {
        let cfg = TrainConfig {
            steps: 30,
            seed: 4,
            network: UNetConfig {
                size: 16,
                stages: 2,
                base_channels: 4,
                block: NormBlock::Srin,
                residual: true,
            },
            ..TrainConfig::default()
        };
        let out = train_on(&cfg, &samples, &[], |_| {}).unwrap();
        let losses: Vec<u64> = out.history.iter().map(|r| r.loss.to_bits()).collect();
        (losses, encode_checkpoint(&out.model))
    };
    if run() != run() {
        failures.push("fixed-seed training not bit-identical");
    }

    failures.dedup();
    let detail = if failures.is_empty() {
        "block and model background, empty mask, PPM/PGM, checkpoint, seeded runs all exact"
            .to_string()
    } else {
        failures.join("; ")
    };
    report("A5", failures.is_empty(), &detail);
}

#[test]
fn a6_metric_oracle() {
    let _guard = serial();
    let mut rng = ChaCha8Rng::seed_from_u64(0xa6);
    let (h, w) = (12, 10);
    let base: Vec<u8> = (0..h * w * 3).map(|_| rng.gen_range(0..=239)).collect();
    let shifted: Vec<u8> = base.iter().map(|b| b + 16).collect();
    let reference = Image::from_bytes(h, w, &base).unwrap();
    let offset = Image::from_bytes(h, w, &shifted).unwrap();
    let full = Mask::filled(h, w, true).unwrap();
    let r = metrics(&offset, &reference, &full, DEFAULT_PSNR_CAP).unwrap();
    let expected_psnr = 10.0 * (255.0f64 * 255.0 / 256.0).log10();
    let uniform_ok = (r.mse - 256.0).abs() < 1e-9
        && (r.psnr - 24.0494).abs() <= 1e-3
        && (r.psnr - expected_psnr).abs() < 1e-9;

    let mut worst = 0.0f64;
    for _ in 0..100 {
        let mask = Mask::new(h, w, (0..h * w).map(|_| rng.gen_bool(0.3)).collect()).unwrap();
        if mask.count() == 0 {
            continue;
        }
        let mut bytes = base.clone();
        for (site, &fg) in mask.bits().iter().enumerate() {
            if fg {
                for c in 0..3 {
                    bytes[site * 3 + c] = rng.gen();
                }
            }
        }
        let harmonized = Image::from_bytes(h, w, &bytes).unwrap();
        let r = metrics(&harmonized, &reference, &mask, DEFAULT_PSNR_CAP).unwrap();
        let product = r.fmse.unwrap() * r.fg_ratio;
        if r.mse > 0.0 {
            worst = worst.max((r.mse - product).abs() / r.mse);
        }
    }
    report(
        "A6",
        uniform_ok && worst <= 1e-12,
        &format!(
            "offset image mse {:.6} psnr {:.6}; max relative |mse - fmse*ratio| {worst:.2e}",
            r.mse, r.psnr
        ),
    );
}

fn fit(wins: Vec<Vec<u64>>) -> Vec<f64> {
    let labels = (0..wins.len()).map(|i| format!("m{i}")).collect();
    let data = PairwiseWins::new(labels, wins).unwrap();
    bt_fit(&data, DEFAULT_TOL, DEFAULT_MAX_ITER).unwrap().scores
}

#[test]
fn a7_bradley_terry() {
    let _guard = serial();
    let mut rng = ChaCha8Rng::seed_from_u64(0xa7);
    let (mut closed, mut scaling, mut total) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..50 {
        let (a, b) = (rng.gen_range(1..50u64), rng.gen_range(1..50u64));
        let s = fit(vec![vec![0, a], vec![b, 0]]);
        let p = a as f64 / (a + b) as f64;
        closed = closed.max((s[0] - p).abs()).max((s[1] - (1.0 - p)).abs());

        let n = rng.gen_range(3..7);
        let wins: Vec<Vec<u64>> = (0..n)
            .map(|i| {
                (0..n)
                    .map(|j| if i == j { 0 } else { rng.gen_range(1..20) })
                    .collect()
            })
            .collect();
        let k = rng.gen_range(2..9);
        let scaled = wins
            .iter()
            .map(|r| r.iter().map(|w| w * k).collect())
            .collect();
        let s1 = fit(wins);
        let s2 = fit(scaled);
        for (x, y) in s1.iter().zip(&s2) {
            scaling = scaling.max((x - y).abs());
        }
        total = total.max((s1.iter().sum::<f64>() - 1.0).abs());
    }
    report(
        "A7",
        closed <= 1e-10 && scaling <= 1e-10 && total <= 1e-12,
        &format!("closed-form err {closed:.2e}, scaling err {scaling:.2e}, |sum-1| {total:.2e}"),
    );
}

#[test]
fn a8_attention_contracts() {
    let _guard = serial();
    let mut rng = ChaCha8Rng::seed_from_u64(0xa8);
    let (mut worst_row, mut leaked) = (0.0f64, 0usize);
    for _ in 0..100 {
        let x = instance(&mut rng);
        let att = run_block(&x).attention;
        let n = x.mask.bits().len();
        for i in 0..n {
            let row = &att[i * n..(i + 1) * n];
            worst_row = worst_row.max((row.iter().sum::<f64>() - 1.0).abs());
            leaked += (0..n)
                .filter(|&j| x.mask.bits()[j] && row[j] != 0.0)
                .count();
        }
    }
    report(
        "A8",
        worst_row <= 1e-9 && leaked == 0,
        &format!("100 instances, max |row sum - 1| {worst_row:.2e}, non-zero foreground-key weights {leaked}"),
    );
}
