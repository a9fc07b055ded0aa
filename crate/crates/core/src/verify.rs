//! Self-verification suites: implementation-versus-oracle comparisons,
//! finite-difference gradient checks and property checks, each reporting a
//! per-case discrepancy next to its tolerance.

use std::fmt;

use num_rational::Ratio;
use serde::Serialize;

use crate::conv::{conv3d_forward, conv3d_naive, ConvSpec};
use crate::densenet::{ArchConfig, EkgNet};
use crate::error::{Error, Result};
use crate::expert::{dynamic_conv_per_sample_oracle, ExpertConv};
use crate::gradcheck::{check_function, check_params, probe_loss, GradCheck};
use crate::hsi::{pad_and_extract, stratified_split, HsiCube, Split, SplitRatios};
use crate::mapping::{MappingConfig, MappingNetwork};
use crate::metrics::{metrics, ConfusionMatrix};
use crate::nn::{BatchNorm, Linear};
use crate::params::{ParamId, ParamKind, ParamStore, Session};
use crate::rng::{derive_seed, SeededRng};
use crate::scalar::Scalar;
use crate::tensor::{kernels, Tensor};

/// Tolerance of layer-level gradient checks (relative error).
pub const LAYER_GRAD_TOL: f64 = 1e-4;
/// Tolerance of the whole-model gradient check (relative error).
pub const MODEL_GRAD_TOL: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Suite {
    ConvOracle,
    DynamicOracle,
    GradCheck,
    SoftmaxProperties,
    MetricsOracle,
    SplitProperties,
}

impl Suite {
    pub const ALL: [Suite; 6] = [
        Suite::ConvOracle,
        Suite::DynamicOracle,
        Suite::GradCheck,
        Suite::SoftmaxProperties,
        Suite::MetricsOracle,
        Suite::SplitProperties,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Suite::ConvOracle => "conv-oracle",
            Suite::DynamicOracle => "dynamic-oracle",
            Suite::GradCheck => "grad-check",
            Suite::SoftmaxProperties => "softmax-properties",
            Suite::MetricsOracle => "metrics-oracle",
            Suite::SplitProperties => "split-properties",
        }
    }

    pub fn parse(s: &str) -> Result<Suite> {
        Suite::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| {
                let names: Vec<_> = Suite::ALL.iter().map(|x| x.name()).collect();
                Error::config(
                    "suite",
                    format!("unknown suite `{s}`; expected one of {}", names.join(", ")),
                )
            })
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One checked case: `discrepancy ≤ tolerance` means pass.
#[derive(Debug, Clone, Serialize)]
pub struct CaseReport {
    /// Human-readable case description including the inputs needed to rerun it.
    pub case: String,
    pub discrepancy: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl CaseReport {
    fn new(case: impl Into<String>, discrepancy: f64, tolerance: f64) -> Self {
        CaseReport {
            case: case.into(),
            discrepancy,
            tolerance,
            passed: discrepancy <= tolerance,
        }
    }

    fn flag(case: impl Into<String>, ok: bool) -> Self {
        Self::new(case, if ok { 0.0 } else { 1.0 }, 0.0)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SuiteReport {
    pub suite: Suite,
    pub cases: Vec<CaseReport>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.cases.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &CaseReport> {
        self.cases.iter().filter(|c| !c.passed)
    }

    /// Largest discrepancy over the suite's cases.
    pub fn worst(&self) -> f64 {
        self.cases.iter().map(|c| c.discrepancy).fold(0.0, f64::max)
    }
}

pub fn run_suite(suite: Suite, seed: u64) -> Result<SuiteReport> {
    let seed = derive_seed(seed, suite.name());
    let cases = match suite {
        Suite::ConvOracle => conv_oracle(seed)?,
        Suite::DynamicOracle => dynamic_oracle(seed, 50)?,
        Suite::GradCheck => grad_checks(seed)?,
        Suite::SoftmaxProperties => softmax_properties(seed, 100)?,
        Suite::MetricsOracle => metrics_oracle(seed, 20)?,
        Suite::SplitProperties => split_properties(seed)?,
    };
    Ok(SuiteReport { suite, cases })
}

/// Tensor of i.i.d. uniform values in `[lo, hi)`.
pub fn uniform_tensor<T: Scalar>(
    shape: &[usize],
    lo: f64,
    hi: f64,
    rng: &mut SeededRng,
) -> Tensor<T> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| T::from_f64(rng.uniform(lo, hi))).collect();
    Tensor::new(shape.to_vec(), data).expect("positive extents")
}

/// Overwrites a stored tensor's values in place, keeping its gradient slot.
fn fill_uniform<T: Scalar>(
    store: &mut ParamStore<T>,
    id: ParamId,
    lo: f64,
    hi: f64,
    rng: &mut SeededRng,
) -> Result<()> {
    for v in store.get_mut(id)?.data_mut() {
        *v = T::from_f64(rng.uniform(lo, hi));
    }
    Ok(())
}

fn pick<T: Copy>(rng: &mut SeededRng, items: &[T]) -> T {
    items[rng.index(items.len())]
}

/// Random grouped convolutions (stride, padding and dilation included)
/// against the seven-loop reference, in both precisions.
fn conv_oracle(seed: u64) -> Result<Vec<CaseReport>> {
    let mut rng = SeededRng::new(seed);
    let mut out = Vec::new();
    for draw in 0..24 {
        let groups = pick(&mut rng, &[1, 2, 4]);
        let cin = groups * (1 + rng.index(2));
        let cout = groups * (1 + rng.index(2));
        let size = pick(&mut rng, &[1, 3]);
        let spec = ConvSpec::new(cin, cout, size)
            .groups(groups)
            .stride(1 + rng.index(2))
            .padding(rng.index(2))
            .dilation(1 + rng.index(2));
        let batch = 1 + rng.index(2);
        let ext: Vec<usize> = (0..3).map(|_| 5 + rng.index(3)).collect();
        let xs = [batch, cin, ext[0], ext[1], ext[2]];
        let x: Tensor<f64> = uniform_tensor(&xs, -1.0, 1.0, &mut rng);
        let w: Tensor<f64> = uniform_tensor(&spec.weight_shape(), -1.0, 1.0, &mut rng);
        let b: Tensor<f64> = uniform_tensor(&[cout], -1.0, 1.0, &mut rng);
        let desc = format!("draw {draw}: x {xs:?}, {spec:?}, seed {seed}");
        let fast = conv3d_forward(&x, &w, Some(&b), &spec)?;
        let slow = conv3d_naive(&x, &w, Some(&b), &spec)?;
        out.push(CaseReport::new(
            format!("f64 {desc}"),
            fast.max_abs_diff(&slow)?,
            1e-10,
        ));
        let (x32, w32, b32) = (x.cast::<f32>(), w.cast::<f32>(), b.cast::<f32>());
        let fast = conv3d_forward(&x32, &w32, Some(&b32), &spec)?;
        let slow = conv3d_naive(&x32, &w32, Some(&b32), &spec)?;
        out.push(CaseReport::new(
            format!("f32 {desc}"),
            fast.max_abs_diff(&slow)?,
            1e-5,
        ));
    }
    Ok(out)
}

/// One randomized dynamic-convolution draw: the batch-merged grouped
/// implementation versus the per-sample reference.
fn dynamic_case<T: Scalar>(
    batch: usize,
    experts: usize,
    groups: usize,
    size: usize,
    seed: u64,
) -> Result<f64> {
    let mut rng = SeededRng::new(seed);
    let spec = ConvSpec::new(2 * groups, 2 * groups, size)
        .groups(groups)
        .padding(size / 2);
    let mut store = ParamStore::<T>::new();
    let layer = ExpertConv::new(
        &mut store,
        "dyn",
        spec,
        experts,
        true,
        &MappingConfig::default(),
        &mut rng,
    )?;
    layer.init_expert_kernels(&mut store, seed)?;
    let bias = layer.bias.expect("layer built with bias");
    fill_uniform(&mut store, bias, -0.5, 0.5, &mut rng)?;
    let x: Tensor<T> = uniform_tensor(&[batch, spec.in_channels, 4, 5, 3], -1.0, 1.0, &mut rng);
    let raw: Tensor<f64> = uniform_tensor(&[batch, experts], -2.0, 2.0, &mut rng);
    let alpha = kernels::softmax_with_temperature(raw.data(), raw.shape(), 1.0, 1)?;
    let alpha = Tensor::new(
        vec![batch, experts],
        alpha.iter().map(|&v| T::from_f64(v)).collect(),
    )?;
    let oracle = dynamic_conv_per_sample_oracle(
        &x,
        &alpha,
        store.get(layer.weight)?,
        Some(store.get(bias)?),
        &spec,
    )?;
    let mut sess = Session::new(&mut store, false);
    let xv = sess.input(x);
    let av = sess.input(alpha);
    let y = layer.forward_with_alpha(&mut sess, xv, av)?;
    sess.value(y)?.max_abs_diff(&oracle)
}

fn dynamic_oracle(seed: u64, draws: usize) -> Result<Vec<CaseReport>> {
    let mut rng = SeededRng::new(seed);
    let mut out = Vec::with_capacity(2 * draws);
    for draw in 0..draws {
        let batch = 1 + rng.index(4);
        let experts = pick(&mut rng, &[1, 2, 4]);
        let groups = pick(&mut rng, &[1, 2, 4]);
        let size = pick(&mut rng, &[1, 3]);
        let s = derive_seed(seed, &format!("draw{draw}"));
        let desc = format!("B={batch} K={experts} G={groups} S={size} seed={s}");
        out.push(CaseReport::new(
            format!("f64 {desc}"),
            dynamic_case::<f64>(batch, experts, groups, size, s)?,
            1e-10,
        ));
        out.push(CaseReport::new(
            format!("f32 {desc}"),
            dynamic_case::<f32>(batch, experts, groups, size, s)?,
            1e-5,
        ));
    }
    Ok(out)
}

fn grad_cases(layer: &str, checks: Vec<GradCheck>, tol: f64) -> Vec<CaseReport> {
    checks
        .into_iter()
        .map(|c| {
            CaseReport::new(
                format!("{layer}: {} ({} elements)", c.name, c.elements),
                c.rel_err,
                tol,
            )
        })
        .collect()
}

/// Registers `x` as a trainable entry so the gradient check also covers the
/// layer input.
fn input_param(store: &mut ParamStore<f64>, x: Tensor<f64>) -> Result<ParamId> {
    store.register("input", x, ParamKind::Trainable)
}

/// Central finite differences for every layer type.
pub fn layer_grad_checks(seed: u64) -> Result<Vec<CaseReport>> {
    let mut rng = SeededRng::new(seed);
    let mut out = Vec::new();

    let x: Tensor<f64> = uniform_tensor(&[2, 3, 2, 2, 3], -2.0, 2.0, &mut rng);
    let probe = derive_seed(seed, "probe");
    out.extend(grad_cases(
        "gelu",
        check_function(&[x], |t, v| {
            let y = t.gelu(v[0])?;
            probe_loss(t, y, probe)
        })?,
        LAYER_GRAD_TOL,
    ));

    let x: Tensor<f64> = uniform_tensor(&[3, 2, 2, 3, 2], -1.5, 1.5, &mut rng);
    let gamma: Tensor<f64> = uniform_tensor(&[2], 0.5, 1.5, &mut rng);
    let beta: Tensor<f64> = uniform_tensor(&[2], -0.5, 0.5, &mut rng);
    out.extend(grad_cases(
        "batch-norm",
        check_function(&[x, gamma, beta], |t, v| {
            let (mut rm, mut rv) = (vec![0.0; 2], vec![1.0; 2]);
            let y = t.batch_norm(v[0], v[1], v[2], (&mut rm, &mut rv), true)?;
            probe_loss(t, y, probe)
        })?,
        LAYER_GRAD_TOL,
    ));

    for (label, spec) in [
        ("conv3d", ConvSpec::new(4, 4, 3).padding(1).groups(2)),
        (
            "conv3d strided",
            ConvSpec::new(2, 3, 3).stride(2).padding(1),
        ),
        ("conv3d pointwise", ConvSpec::new(3, 2, 1)),
    ] {
        let x: Tensor<f64> = uniform_tensor(&[2, spec.in_channels, 3, 4, 3], -1.0, 1.0, &mut rng);
        let w: Tensor<f64> = uniform_tensor(&spec.weight_shape(), -0.5, 0.5, &mut rng);
        let b: Tensor<f64> = uniform_tensor(&[spec.out_channels], -0.5, 0.5, &mut rng);
        out.extend(grad_cases(
            label,
            check_function(&[x, w, b], |t, v| {
                let y = t.conv3d(v[0], v[1], Some(v[2]), &spec)?;
                probe_loss(t, y, probe)
            })?,
            LAYER_GRAD_TOL,
        ));
    }

    // Dynamic convolution through its mapping network (attention path included).
    let mut store = ParamStore::<f64>::new();
    let spec = ConvSpec::new(4, 4, 3).padding(1).groups(2);
    let layer = ExpertConv::new(
        &mut store,
        "dyn",
        spec,
        3,
        true,
        &MappingConfig::default(),
        &mut rng,
    )?;
    layer.init_expert_kernels(&mut store, seed)?;
    // A low temperature keeps the attention weights far from uniform.
    layer.mapping.set_tau(&mut store, 1.0)?;
    let bias = layer.bias.expect("layer built with bias");
    fill_uniform(&mut store, bias, -0.5, 0.5, &mut rng)?;
    let input = input_param(
        &mut store,
        uniform_tensor(&[3, 4, 3, 3, 2], -1.0, 1.0, &mut rng),
    )?;
    let ids = store.trainable_ids();
    out.extend(grad_cases(
        "dynamic conv",
        check_params(&mut store, &ids, |sess| {
            let x = sess.param(input)?;
            let y = layer.forward(sess, x)?;
            probe_loss(&mut sess.tape, y, probe)
        })?,
        LAYER_GRAD_TOL,
    ));

    let mut store = ParamStore::<f64>::new();
    let net = MappingNetwork::new(&mut store, "map", 6, 4, &MappingConfig::default(), &mut rng)?;
    net.set_tau(&mut store, 1.0)?;
    let input = input_param(
        &mut store,
        uniform_tensor(&[4, 6, 2, 2, 2], -1.0, 1.0, &mut rng),
    )?;
    let ids = store.trainable_ids();
    out.extend(grad_cases(
        "mapping network",
        check_params(&mut store, &ids, |sess| {
            let x = sess.param(input)?;
            let a = net.attention(sess, x)?;
            probe_loss(&mut sess.tape, a, probe)
        })?,
        LAYER_GRAD_TOL,
    ));

    let mut store = ParamStore::<f64>::new();
    let bn = BatchNorm::new(&mut store, "bn", 3)?;
    let head = Linear::new(&mut store, "fc", 3, 4, &mut rng)?;
    fill_uniform(&mut store, head.bias, -0.5, 0.5, &mut rng)?;
    let input = input_param(
        &mut store,
        uniform_tensor(&[3, 3, 2, 2, 2], -1.0, 1.0, &mut rng),
    )?;
    let ids = store.trainable_ids();
    out.extend(grad_cases(
        "classification head",
        check_params(&mut store, &ids, |sess| {
            let x = sess.param(input)?;
            let h = bn.forward(sess, x)?;
            let h = sess.tape.gelu(h)?;
            let h = sess.tape.adaptive_avg_pool3d_to_unit(h)?;
            let h = sess.tape.reshape(h, &[3, 3])?;
            let logits = head.forward(sess, h)?;
            sess.tape.cross_entropy(logits, &[0, 3, 1])
        })?,
        LAYER_GRAD_TOL,
    ));
    Ok(out)
}

/// The smallest full model: one dense layer per stage, `k0 = 2`, two groups,
/// a `6×5×5` input block.
pub fn micro_model_config() -> ArchConfig {
    let mut cfg = ArchConfig::new(vec![1, 1], 2, 3, 5, 6);
    cfg.groups = 2;
    cfg.experts = 2;
    cfg
}

/// Cross-entropy gradient of every trainable parameter of the micro model.
pub fn model_grad_check(seed: u64) -> Result<Vec<CaseReport>> {
    let cfg = micro_model_config();
    let mut store = ParamStore::<f64>::new();
    let model = EkgNet::build(&cfg, &mut store, seed)?;
    model.update_temperature(&mut store, cfg.mapping.schedule.anneal_epochs)?;
    let mut rng = SeededRng::stream(seed, "model-grad");
    // Non-zero biases so that every bias path carries signal.
    for id in store.trainable_ids() {
        if store.name(id)?.ends_with(".bias") {
            fill_uniform(&mut store, id, -0.3, 0.3, &mut rng)?;
        }
    }
    let x: Tensor<f64> = uniform_tensor(
        &[3, 1, cfg.bands, cfg.block_size, cfg.block_size],
        -1.0,
        1.0,
        &mut rng,
    );
    let targets = [0usize, 2, 1];
    let ids = store.trainable_ids();
    let checks = check_params(&mut store, &ids, |sess| {
        let xv = sess.input(x.clone());
        let logits = model.forward(sess, xv)?;
        sess.tape.cross_entropy(logits, &targets)
    })?;
    Ok(grad_cases("micro model", checks, MODEL_GRAD_TOL))
}

fn grad_checks(seed: u64) -> Result<Vec<CaseReport>> {
    let mut out = layer_grad_checks(seed)?;
    out.extend(model_grad_check(seed)?);
    Ok(out)
}

/// Row sums, argmax invariance and monotone flattening over temperatures.
fn softmax_properties(seed: u64, vectors: usize) -> Result<Vec<CaseReport>> {
    const TAUS: [f64; 7] = [0.25, 0.5, 1.0, 2.0, 5.0, 10.0, 30.0];
    let mut rng = SeededRng::new(seed);
    let (mut sum_err, mut sum_err32) = (0.0f64, 0.0f64);
    let (mut argmax_ok, mut monotone_ok) = (true, true);
    let mut failing = Vec::new();
    for v in 0..vectors {
        let k = 2 + rng.index(7);
        let logits: Vec<f64> = (0..k).map(|_| 3.0 * rng.normal()).collect();
        let l32: Vec<f32> = logits.iter().map(|&x| x as f32).collect();
        let am = crate::metrics::argmax_rows(&logits, k)[0];
        let mut prev_max = f64::INFINITY;
        for tau in TAUS {
            let p = kernels::softmax_with_temperature(&logits, &[1, k], tau, 1)?;
            let p32 = kernels::softmax_with_temperature(&l32, &[1, k], tau, 1)?;
            sum_err = sum_err.max((p.iter().sum::<f64>() - 1.0).abs());
            sum_err32 = sum_err32.max((p32.iter().map(|&x| x as f64).sum::<f64>() - 1.0).abs());
            if crate::metrics::argmax_rows(&p, k)[0] != am {
                argmax_ok = false;
                failing.push(format!("vector {v} τ={tau}: argmax moved"));
            }
            let m = p.iter().copied().fold(0.0, f64::max);
            if m > prev_max + 1e-15 {
                monotone_ok = false;
                failing.push(format!("vector {v} τ={tau}: max weight grew"));
            }
            prev_max = m;
        }
    }
    let tail = if failing.is_empty() {
        String::new()
    } else {
        format!(" [{}]", failing.join("; "))
    };
    Ok(vec![
        CaseReport::new(
            format!(
                "row sums (f64), {vectors} vectors × {} τ, seed {seed}",
                TAUS.len()
            ),
            sum_err,
            1e-6,
        ),
        CaseReport::new(
            format!(
                "row sums (f32), {vectors} vectors × {} τ, seed {seed}",
                TAUS.len()
            ),
            sum_err32,
            1e-6,
        ),
        CaseReport::flag(format!("argmax invariant to τ{tail}"), argmax_ok),
        CaseReport::flag(format!("max weight non-increasing in τ{tail}"), monotone_ok),
    ])
}

/// Exact rational OA, AA and κ of a confusion matrix.
pub fn exact_metrics(cm: &ConfusionMatrix) -> (f64, f64, f64) {
    let c = cm.classes();
    let n = cm.total() as i128;
    let get = |r: usize, q: usize| cm.get(r, q) as i128;
    let trace: i128 = (0..c).map(|i| get(i, i)).sum();
    let rows: Vec<i128> = (0..c).map(|i| (0..c).map(|j| get(i, j)).sum()).collect();
    let cols: Vec<i128> = (0..c).map(|j| (0..c).map(|i| get(i, j)).sum()).collect();
    let po = Ratio::new(trace, n);
    let present: Vec<usize> = (0..c).filter(|&i| rows[i] > 0).collect();
    let aa = present.iter().fold(Ratio::from_integer(0), |acc, &i| {
        acc + Ratio::new(get(i, i), rows[i])
    }) / Ratio::from_integer(present.len() as i128);
    let pe = (0..c).fold(Ratio::from_integer(0), |acc, i| {
        acc + Ratio::new(rows[i] * cols[i], n * n)
    });
    let one = Ratio::from_integer(1);
    let kappa = if pe == one {
        if po == one {
            one
        } else {
            Ratio::from_integer(0)
        }
    } else {
        (po - pe) / (one - pe)
    };
    let f = |r: Ratio<i128>| *r.numer() as f64 / *r.denom() as f64;
    (f(po), f(aa), f(kappa))
}

/// Random confusion matrix with up to `max_classes` classes.
pub fn random_confusion(rng: &mut SeededRng, max_classes: usize) -> ConfusionMatrix {
    let c = 2 + rng.index(max_classes - 1);
    let counts = (0..c * c)
        .map(|i| {
            let diag = i % (c + 1) == 0;
            rng.index(if diag { 60 } else { 15 }) as u64
        })
        .collect();
    let mut cm = ConfusionMatrix::from_counts(c, counts).expect("square");
    if cm.total() == 0 {
        cm.add(0, 0).expect("in range");
    }
    cm
}

fn metrics_oracle(seed: u64, matrices: usize) -> Result<Vec<CaseReport>> {
    let mut rng = SeededRng::new(seed);
    let mut out = Vec::new();
    for i in 0..matrices {
        let cm = random_confusion(&mut rng, 6);
        let m = metrics(&cm)?;
        let (oa, aa, kappa) = exact_metrics(&cm);
        let diff = (m.oa - oa)
            .abs()
            .max((m.aa - aa).abs())
            .max((m.kappa - kappa).abs());
        out.push(CaseReport::new(
            format!("matrix {i} {:?}", cm.counts()),
            diff,
            1e-12,
        ));
    }
    let diag = ConfusionMatrix::from_counts(3, vec![7, 0, 0, 0, 3, 0, 0, 0, 11])?;
    let m = metrics(&diag)?;
    out.push(CaseReport::flag(
        "diagonal matrix gives (1, 1, 1)",
        (m.oa, m.aa, m.kappa) == (1.0, 1.0, 1.0),
    ));
    Ok(out)
}

/// A `rows × cols` cube whose classes occupy `per_class` consecutive pixels each.
fn blocky_cube(classes: usize, per_class: usize, cols: usize) -> Result<HsiCube> {
    let pixels = classes * per_class;
    let rows = pixels.div_ceil(cols);
    let labels: Vec<u16> = (0..rows * cols)
        .map(|i| {
            if i < pixels {
                (1 + i / per_class) as u16
            } else {
                0
            }
        })
        .collect();
    let data = (0..rows * cols * 2).map(|i| (i % 17) as f32).collect();
    HsiCube::new("split-check", rows, cols, 2, data, labels)
}

fn split_properties(seed: u64) -> Result<Vec<CaseReport>> {
    let mut out = Vec::new();
    let ratios = SplitRatios([6, 1, 3]);
    let ds = pad_and_extract(&blocky_cube(3, 100, 20)?, 3)?;
    let a = stratified_split(&ds, ratios, seed)?;
    let b = stratified_split(&ds, ratios, seed)?;
    let other = stratified_split(&ds, ratios, seed ^ 0x9e37_79b9)?;
    for class in 0..3 {
        let counts: Vec<usize> = [Split::Train, Split::Val, Split::Test]
            .iter()
            .map(|&s| {
                a.indices(s)
                    .iter()
                    .filter(|&&i| ds.patches[i].class == class)
                    .count()
            })
            .collect();
        let miss = counts
            .iter()
            .zip([60, 10, 30])
            .map(|(&g, w)| g.abs_diff(w))
            .sum::<usize>();
        out.push(CaseReport::new(
            format!("class {class} of 100 → 60/10/30 (got {counts:?}), seed {seed}"),
            miss as f64,
            0.0,
        ));
    }
    let mut seen = vec![0usize; ds.len()];
    for s in [Split::Train, Split::Val, Split::Test] {
        for i in a.indices(s) {
            seen[i] += 1;
        }
    }
    out.push(CaseReport::flag(
        "splits are disjoint and cover every labelled pixel",
        seen.iter().all(|&n| n == 1),
    ));
    out.push(CaseReport::flag(
        "equal seeds give equal partitions",
        a.partition == b.partition,
    ));
    out.push(CaseReport::flag(
        "different seeds give different partitions",
        a.partition != other.partition,
    ));
    let seven = stratified_split(&pad_and_extract(&blocky_cube(1, 7, 7)?, 1)?, ratios, seed)?;
    let counts = [Split::Train, Split::Val, Split::Test].map(|s| seven.indices(s).len());
    out.push(CaseReport::flag(
        format!("class of 7 → 4/1/2 (got {counts:?})"),
        counts == [4, 1, 2],
    ));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_names_roundtrip() {
        for s in Suite::ALL {
            assert_eq!(Suite::parse(s.name()).unwrap(), s);
        }
        assert!(Suite::parse("conv").is_err());
    }

    #[test]
    fn fast_suites_pass() {
        for s in [
            Suite::ConvOracle,
            Suite::SoftmaxProperties,
            Suite::MetricsOracle,
            Suite::SplitProperties,
        ] {
            let r = run_suite(s, 3).unwrap();
            assert!(r.passed(), "{s}: {:?}", r.failures().collect::<Vec<_>>());
        }
    }

    #[test]
    fn exact_metrics_reference_values() {
        let cm = ConfusionMatrix::from_counts(2, vec![45, 5, 10, 40]).unwrap();
        let (oa, aa, kappa) = exact_metrics(&cm);
        assert_eq!(oa, 0.85);
        assert_eq!(aa, 0.85);
        assert_eq!(kappa, 0.7);
    }
}
