//! Central finite-difference checks of every differentiable op and of the
//! full model with frozen channel graphs.
//!
//! Each case reduces the op output `y` to `L = Σ (y − t)²` for a fixed random
//! target `t`. The analytic gradient comes from the tape; the numeric one is
//! `(L(x+h) − L(x−h)) / ((x+h) − (x−h))` with `L` accumulated in f64. When an
//! estimate disagrees, it is recomputed with `h/4`; if the two estimates
//! disagree with each other the perturbation crossed a ReLU or max kink and
//! the element is counted as skipped instead of failed.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::network::{ModelConfig, Network};
use crate::scc::{self, EdgeVariant, FeatureGraph, SccConfig, SccMode};
use crate::tensor::{Tape, Tensor, Var};

/// Denominator floor of the relative error.
pub const REL_FLOOR: f64 = 1e-2;
/// Largest tolerated fraction of kink-skipped elements per case.
pub const MAX_SKIP_FRACTION: f64 = 0.05;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub checked: usize,
    pub skipped: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

fn sq_loss(y: &Tensor, t: &Tensor) -> f64 {
    y.data()
        .iter()
        .zip(t.data())
        .map(|(&a, &b)| (a as f64 - b as f64).powi(2))
        .sum()
}

/// Tracks per-element outcomes of one case.
struct Tally {
    checked: usize,
    skipped: usize,
    max_rel: f64,
    failed: bool,
    tol: f64,
}

impl Tally {
    fn new(tol: f64) -> Self {
        Self {
            checked: 0,
            skipped: 0,
            max_rel: 0.0,
            failed: false,
            tol,
        }
    }

    /// `fd(h)` returns the numeric derivative for step `h`. The loss is
    /// piecewise quadratic in any single input, so away from kinks every
    /// step gives the same central difference; a mismatch is retried with
    /// smaller steps, and estimates that keep moving mean a kink was crossed.
    fn element(&mut self, analytic: f64, h: f32, mut fd: impl FnMut(f32) -> f64) {
        self.checked += 1;
        let mut estimates = Vec::with_capacity(3);
        for step in [h, h / 4.0, h / 16.0] {
            let n = fd(step);
            let e = rel_error(analytic, n);
            if e <= self.tol {
                self.max_rel = self.max_rel.max(e);
                return;
            }
            estimates.push(n);
        }
        let stable = estimates.windows(2).all(|w| rel_error(w[0], w[1]) <= self.tol);
        if stable {
            self.max_rel = self.max_rel.max(rel_error(analytic, estimates[0]));
            self.failed = true;
        } else {
            self.skipped += 1;
        }
    }

    fn finish(self, name: &str) -> CheckResult {
        let too_many_skips = self.skipped as f64 > MAX_SKIP_FRACTION * self.checked as f64;
        CheckResult {
            name: name.to_string(),
            checked: self.checked,
            skipped: self.skipped,
            max_rel_error: self.max_rel,
            passed: !self.failed && !too_many_skips && self.checked > 0,
        }
    }
}

type Build = dyn for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>;

/// One op under test and the inputs it is differentiated at.
pub struct OpCase {
    pub name: String,
    pub inputs: Vec<Tensor>,
    pub h: f32,
    build: Box<Build>,
}

impl OpCase {
    pub fn new(
        name: impl Into<String>,
        inputs: Vec<Tensor>,
        h: f32,
        build: impl for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>> + 'static,
    ) -> Self {
        Self {
            name: name.into(),
            inputs,
            h,
            build: Box::new(build),
        }
    }

    fn eval(&self, inputs: &[Tensor]) -> Result<Tensor> {
        let tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let y = (self.build)(&tape, &vars)?;
        let v = y.value();
        Ok((*v).clone())
    }

    /// Check at most `max_elems` elements per input, chosen with `seed`.
    pub fn run(&self, tol: f64, max_elems: usize, seed: u64) -> Result<CheckResult> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let y0 = self.eval(&self.inputs)?;
        let target = random_tensor(&mut rng, y0.shape(), 1.0);
        let tape = Tape::new();
        let vars: Vec<Var> = self.inputs.iter().map(|t| tape.variable(t.clone())).collect();
        let y = (self.build)(&tape, &vars)?;
        let t = tape.constant(target.clone());
        y.mse(t)?.backward()?;
        let grads: Vec<Tensor> = vars
            .iter()
            .map(|v| v.grad().unwrap_or_else(|| Tensor::zeros(&v.shape())))
            .collect();

        let mut tally = Tally::new(tol);
        for (which, input) in self.inputs.iter().enumerate() {
            let n = input.numel();
            let picks: Vec<usize> = if n <= max_elems {
                (0..n).collect()
            } else {
                sample(&mut rng, n, max_elems).into_vec()
            };
            for idx in picks {
                let analytic = grads[which].data()[idx] as f64;
                let mut fd = |h: f32| -> f64 {
                    let mut xs = self.inputs.clone();
                    let x = input.data()[idx];
                    let (xp, xm) = (x + h, x - h);
                    xs[which].data_mut()[idx] = xp;
                    let lp = sq_loss(&self.eval(&xs).expect("perturbed eval"), &target);
                    xs[which].data_mut()[idx] = xm;
                    let lm = sq_loss(&self.eval(&xs).expect("perturbed eval"), &target);
                    (lp - lm) / (xp - xm) as f64
                };
                tally.element(analytic, self.h, &mut fd);
            }
        }
        Ok(tally.finish(&self.name))
    }
}

pub fn random_tensor<R: Rng>(rng: &mut R, shape: &[usize], scale: f32) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-scale..=scale)).collect()).expect("shape")
}

/// Uniform values kept at least `margin` away from zero.
fn away_from_zero<R: Rng>(rng: &mut R, shape: &[usize], margin: f32) -> Tensor {
    let mut t = random_tensor(rng, shape, 1.0);
    for v in t.data_mut() {
        *v = v.signum() * (v.abs() + margin);
    }
    t
}

/// Distinct values on a grid with spacing `gap`, in random order.
fn well_separated<R: Rng>(rng: &mut R, shape: &[usize], gap: f32) -> Tensor {
    let n: usize = shape.iter().product();
    let mut idx: Vec<usize> = (0..n).collect();
    rand::seq::SliceRandom::shuffle(&mut idx[..], rng);
    let data = idx.iter().map(|&i| (i as f32 - n as f32 / 2.0) * gap).collect();
    Tensor::new(shape, data).expect("shape")
}

/// The op-level cases, seeded from `seed`.
pub fn op_cases(seed: u64) -> Vec<OpCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = &mut rng;
    let mut cases = vec![
        OpCase::new(
            "conv2d k3 s1 p1",
            vec![random_tensor(r, &[2, 3, 6, 6], 1.0), random_tensor(r, &[4, 3, 3, 3], 0.5), random_tensor(r, &[4], 0.5)],
            1e-1,
            |_, v| v[0].conv2d(v[1], v[2], 1, 1),
        ),
        OpCase::new(
            "conv2d k4 s2 p1",
            vec![random_tensor(r, &[2, 2, 8, 8], 1.0), random_tensor(r, &[3, 2, 4, 4], 0.5), random_tensor(r, &[3], 0.5)],
            1e-1,
            |_, v| v[0].conv2d(v[1], v[2], 2, 1),
        ),
        OpCase::new(
            "deconv2d k4 s2 p1",
            vec![random_tensor(r, &[2, 3, 4, 4], 1.0), random_tensor(r, &[3, 2, 4, 4], 0.5), random_tensor(r, &[2], 0.5)],
            1e-1,
            |_, v| v[0].deconv2d(v[1], v[2], 2, 1),
        ),
        OpCase::new(
            "deconv2d k2 s2 p0",
            vec![random_tensor(r, &[1, 2, 3, 3], 1.0), random_tensor(r, &[2, 3, 2, 2], 0.5), random_tensor(r, &[3], 0.5)],
            1e-1,
            |_, v| v[0].deconv2d(v[1], v[2], 2, 0),
        ),
        OpCase::new("relu", vec![away_from_zero(r, &[3, 4, 5], 0.05)], 1e-3, |_, v| Ok(v[0].relu())),
        OpCase::new(
            "mse",
            vec![random_tensor(r, &[2, 3, 4], 1.0), random_tensor(r, &[2, 3, 4], 1.0)],
            1e-1,
            |_, v| v[0].mse(v[1]),
        ),
        OpCase::new("max_aggregate", vec![well_separated(r, &[4, 3, 5], 0.05)], 1e-3, |_, v| {
            scc::max_aggregate(v[0])
        }),
        OpCase::new("reduce_max axis 2", vec![well_separated(r, &[2, 3, 4, 2], 0.05)], 1e-3, |_, v| {
            v[0].reduce_max(2)
        }),
        OpCase::new(
            "matmul",
            vec![random_tensor(r, &[3, 4], 1.0), random_tensor(r, &[4, 5], 1.0)],
            1e-1,
            |_, v| v[0].matmul(v[1]),
        ),
        OpCase::new(
            "add sub scale reshape sum",
            vec![random_tensor(r, &[2, 6], 1.0), random_tensor(r, &[2, 6], 1.0)],
            1e-1,
            |_, v| Ok(v[0].add(v[1])?.sub(v[1].scale(0.5))?.reshape(&[3, 4])?.scale(1.5).sum()),
        ),
    ];
    for mode in [SccMode::Dense, SccMode::Pointwise] {
        for variant in EdgeVariant::ALL {
            cases.push(edge_conv_case(r, mode, variant));
        }
    }
    cases
}

fn edge_conv_case<R: Rng>(rng: &mut R, mode: SccMode, variant: EdgeVariant) -> OpCase {
    let (b, n, l, k) = (2, 6, 5, 2);
    let filters = 3;
    let features = random_tensor(rng, &[b, n, l], 1.0);
    let graphs: Vec<FeatureGraph> = (0..b)
        .map(|s| scc::graph_of(&features.index_outer(s), k).expect("graph"))
        .collect();
    let wshape: Vec<usize> = match mode {
        SccMode::Dense => vec![filters, l],
        SccMode::Pointwise => vec![filters],
    };
    let phi = random_tensor(rng, &wshape, 1.0);
    let omega = random_tensor(rng, &wshape, 1.0);
    OpCase::new(
        format!("edge_conv {mode} {variant}"),
        vec![features, phi, omega],
        1e-2,
        move |_, v| {
            let refs: Vec<&FeatureGraph> = graphs.iter().collect();
            scc::edge_conv_batch(v[0], &refs, v[1], v[2], mode, variant)
        },
    )
}

/// Small models used for the end-to-end check (16×16 input).
pub fn model_configs() -> Vec<(String, ModelConfig)> {
    let base = ModelConfig {
        input_size: 16,
        encoder_channels: vec![4, 8],
        deconv_layers: 2,
        deconv_channels: 6,
        num_maps: 3,
        scc: SccConfig {
            k: 2,
            ..Default::default()
        },
        scc_dense_max: 0,
        init_seed: 11,
        ..Default::default()
    };
    let dense = ModelConfig {
        encoder_channels: vec![4, 8, 8],
        scc: SccConfig {
            mode: SccMode::Dense,
            k: 2,
            ..Default::default()
        },
        ..base.clone()
    };
    vec![("model pointwise".into(), base), ("model dense".into(), dense)]
}

/// Straightforward f64 re-implementation of the model forward with frozen
/// graphs. Finite differences taken through it are free of f32 rounding,
/// which would otherwise swamp the tolerance on a multi-layer network.
struct Reference<'a> {
    config: &'a ModelConfig,
    graphs: &'a [Vec<FeatureGraph>],
}

fn conv_ref(x: &[f64], (c_in, h, w): (usize, usize, usize), wt: &[f64], b: &[f64], k: usize, s: usize, p: usize) -> (Vec<f64>, usize, usize) {
    let c_out = b.len();
    let (oh, ow) = ((h + 2 * p - k) / s + 1, (w + 2 * p - k) / s + 1);
    let mut out = vec![0.0; c_out * oh * ow];
    for o in 0..c_out {
        for y in 0..oh {
            for xx in 0..ow {
                let mut acc = b[o];
                for c in 0..c_in {
                    for ky in 0..k {
                        for kx in 0..k {
                            let (iy, ix) = ((y * s + ky) as isize - p as isize, (xx * s + kx) as isize - p as isize);
                            if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                acc += wt[((o * c_in + c) * k + ky) * k + kx] * x[(c * h + iy as usize) * w + ix as usize];
                            }
                        }
                    }
                }
                out[(o * oh + y) * ow + xx] = acc;
            }
        }
    }
    (out, oh, ow)
}

fn deconv_ref(x: &[f64], (c_in, h, w): (usize, usize, usize), wt: &[f64], b: &[f64], k: usize, s: usize, p: usize) -> (Vec<f64>, usize, usize) {
    let c_out = b.len();
    let (oh, ow) = ((h - 1) * s + k - 2 * p, (w - 1) * s + k - 2 * p);
    let mut out = vec![0.0; c_out * oh * ow];
    for o in 0..c_out {
        out[o * oh * ow..(o + 1) * oh * ow].fill(b[o]);
    }
    for c in 0..c_in {
        for y in 0..h {
            for xx in 0..w {
                let v = x[(c * h + y) * w + xx];
                for o in 0..c_out {
                    for ky in 0..k {
                        for kx in 0..k {
                            let (oy, ox) = ((y * s + ky) as isize - p as isize, (xx * s + kx) as isize - p as isize);
                            if oy >= 0 && ox >= 0 && (oy as usize) < oh && (ox as usize) < ow {
                                out[(o * oh + oy as usize) * ow + ox as usize] += wt[((c * c_out + o) * k + ky) * k + kx] * v;
                            }
                        }
                    }
                }
            }
        }
    }
    (out, oh, ow)
}

fn scc_ref(f: &[f64], n: usize, l: usize, graph: &FeatureGraph, phi: &[f64], omega: &[f64], config: &SccConfig) -> Vec<f64> {
    let (ci, cj, use_phi) = match config.variant {
        EdgeVariant::Both => (-1.0, 1.0, 1.0),
        EdgeVariant::ConcatRaw => (0.0, 1.0, 1.0),
        EdgeVariant::LocalOnly => (-1.0, 1.0, 0.0),
    };
    let mut out = vec![f64::NEG_INFINITY; n * l];
    for i in 0..n {
        let fi = &f[i * l..(i + 1) * l];
        for &j in &graph.neighbors[i] {
            let fj = &f[j * l..(j + 1) * l];
            for q in 0..l {
                let e = match config.mode {
                    // K = L filters, one per output position
                    SccMode::Dense => (0..l)
                        .map(|x| use_phi * phi[q * l + x] * fi[x] + omega[q * l + x] * (ci * fi[x] + cj * fj[x]))
                        .sum::<f64>(),
                    SccMode::Pointwise => use_phi * phi[0] * fi[q] + omega[0] * (ci * fi[q] + cj * fj[q]),
                };
                out[i * l + q] = out[i * l + q].max(e.max(0.0));
            }
        }
    }
    out
}

impl Reference<'_> {
    /// `Σ (y − t)²` over the batch for parameters `params` (network order).
    fn loss(&self, params: &[Vec<f64>], images: &[f64], target: &[f64]) -> f64 {
        self.heatmaps(params, images).iter().zip(target).map(|(y, t)| (y - t).powi(2)).sum()
    }

    fn heatmaps(&self, params: &[Vec<f64>], images: &[f64]) -> Vec<f64> {
        let cfg = self.config;
        let plane = cfg.input_channels * cfg.input_size * cfg.input_size;
        let batch = images.len() / plane;
        let (ek, dk) = (cfg.encoder_kernel, cfg.deconv_kernel);
        let mut out = Vec::new();
        for b in 0..batch {
            let mut next = params.iter();
            let mut x = images[b * plane..(b + 1) * plane].to_vec();
            let mut dims = (cfg.input_channels, cfg.input_size, cfg.input_size);
            for _ in &cfg.encoder_channels {
                let (w, bias) = (next.next().unwrap(), next.next().unwrap());
                let (y, h, wd) = conv_ref(&x, dims, w, bias, ek, 2, (ek - 2) / 2);
                x = y.into_iter().map(|v| v.max(0.0)).collect();
                dims = (bias.len(), h, wd);
            }
            for (level, m) in cfg.scc_sizes().into_iter().enumerate() {
                let (w, bias) = (next.next().unwrap(), next.next().unwrap());
                let (y, h, wd) = deconv_ref(&x, dims, w, bias, dk, 2, (dk - 2) / 2);
                x = y.into_iter().map(|v| v.max(0.0)).collect();
                dims = (bias.len(), h, wd);
                if cfg.scc_enabled {
                    let (phi, omega) = (next.next().unwrap(), next.next().unwrap());
                    x = scc_ref(&x, dims.0, m * m, &self.graphs[level][b], phi, omega, &cfg.scc_at(m));
                }
            }
            let (w, bias) = (next.next().unwrap(), next.next().unwrap());
            let (y, _, _) = conv_ref(&x, dims, w, bias, 1, 1, 0);
            out.extend(y);
        }
        out
    }
}

/// Largest tolerated gap between the f32 forward and the f64 reference,
/// relative to the largest heatmap magnitude.
pub const FORWARD_TOL: f64 = 1e-4;

/// Gradient of the squared-error loss w.r.t. every parameter element of a
/// perturbed freshly initialised model, SCC graphs frozen at the unperturbed
/// input. The numeric side runs through an f64 reference forward, which
/// must itself agree with the f32 forward.
pub fn check_model(name: &str, config: ModelConfig, tol: f64, max_elems: usize, seed: u64) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut net = Network::new(config.clone())?;
    // pointwise SCC starts as an identity; perturb it so φ and ω matter
    for p in net.params_mut() {
        if p.name.ends_with(".phi") || p.name.ends_with(".omega") || p.name.ends_with(".bias") {
            for v in p.value.data_mut() {
                *v += rng.random_range(-0.2..=0.2);
            }
        }
    }
    let images = Tensor::new(
        &[2, config.input_channels, config.input_size, config.input_size],
        (0..2 * config.input_channels * config.input_size * config.input_size)
            .map(|_| rng.random_range(0.0..=1.0))
            .collect(),
    )?;
    let graphs = {
        let tape = Tape::new();
        let pass = net.forward(&tape, tape.constant(images.clone()), false, None)?;
        pass.graphs
    };
    let hm = config.heatmap_size();
    let target = random_tensor(&mut rng, &[2, config.num_maps, hm, hm], 0.2);

    let tape = Tape::new();
    let pass = net.forward(&tape, tape.constant(images.clone()), true, Some(&graphs))?;
    let y32 = pass.heatmaps.value();
    pass.heatmaps.mse(tape.constant(target.clone()))?.backward()?;
    net.zero_grad();
    net.accumulate_grads(&pass);

    let reference = Reference { config: &config, graphs: &graphs };
    let widen = |t: &Tensor| -> Vec<f64> { t.data().iter().map(|&v| v as f64).collect() };
    let (x64, t64) = (widen(&images), widen(&target));
    let mut params: Vec<Vec<f64>> = net.params().iter().map(|p| widen(&p.value)).collect();

    let y64 = reference.heatmaps(&params, &x64);
    let scale = y64.iter().fold(1e-6f64, |m, v| m.max(v.abs()));
    let gap = y32.data().iter().zip(&y64).fold(0.0f64, |m, (&a, b)| m.max((a as f64 - b).abs())) / scale;

    let mut tally = Tally::new(tol);
    for pi in 0..params.len() {
        let numel = params[pi].len();
        let grad = net.params()[pi].grad.clone();
        let picks: Vec<usize> = if numel <= max_elems {
            (0..numel).collect()
        } else {
            sample(&mut rng, numel, max_elems).into_vec()
        };
        for idx in picks {
            let analytic = grad.data()[idx] as f64;
            let x = params[pi][idx];
            let fd = |h: f32| -> f64 {
                let h = h as f64;
                params[pi][idx] = x + h;
                let lp = reference.loss(&params, &x64, &t64);
                params[pi][idx] = x - h;
                let lm = reference.loss(&params, &x64, &t64);
                params[pi][idx] = x;
                (lp - lm) / (2.0 * h)
            };
            tally.element(analytic, MODEL_STEP, fd);
        }
    }
    let mut result = tally.finish(name);
    if gap > FORWARD_TOL {
        result.passed = false;
        result.max_rel_error = result.max_rel_error.max(gap);
    }
    Ok(result)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scope {
    Ops,
    Model,
    All,
}

/// Base finite-difference step for model parameters.
pub const MODEL_STEP: f32 = 1e-5;

/// Elements checked per tensor.
pub const MAX_ELEMS: usize = 256;

pub fn run_suite(scope: Scope, tol: f64, seed: u64) -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    if scope != Scope::Model {
        for case in op_cases(seed) {
            out.push(case.run(tol, MAX_ELEMS, seed)?);
        }
    }
    if scope != Scope::Ops {
        for (name, cfg) in model_configs() {
            out.push(check_model(&name, cfg, tol, MAX_ELEMS, seed)?);
        }
    }
    Ok(out)
}
