//! Adam training loop, evaluation schedule and the ablation grid.

use std::fmt::Write as _;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{self, Entry};
use crate::error::{Error, Result};
use crate::heatmap::{encode, heatmap_loss};
use crate::metrics::{evaluate, Report};
use crate::network::{ModelConfig, Network};
use crate::scc::EdgeVariant;
use crate::synth::{Dataset, Sample};
use crate::tensor::{Parameter, Tape, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f32,
    pub batch_size: usize,
    pub beta1: f32,
    pub beta2: f32,
    pub epsilon: f32,
    pub epochs: usize,
    /// Evaluate every this many epochs; 0 disables evaluation.
    pub eval_every: usize,
    /// Stop after this many evaluations without a better eval ICC.
    pub patience: usize,
    /// Restore the parameters of the best evaluation at the end.
    pub keep_best: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 5e-4,
            batch_size: 32,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            epochs: 30,
            eval_every: 1,
            patience: 10,
            keep_best: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning_rate must be non-negative, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::Config("epsilon must be positive".into()));
        }
        Ok(())
    }

    pub fn apply(&mut self, key: &str, value: &str) -> Result<bool> {
        use config::{parse_bool, parse_value};
        match key {
            "learning_rate" => self.learning_rate = parse_value(key, value)?,
            "batch_size" => self.batch_size = parse_value(key, value)?,
            "beta1" => self.beta1 = parse_value(key, value)?,
            "beta2" => self.beta2 = parse_value(key, value)?,
            "epsilon" => self.epsilon = parse_value(key, value)?,
            "epochs" => self.epochs = parse_value(key, value)?,
            "eval_every" => self.eval_every = parse_value(key, value)?,
            "patience" => self.patience = parse_value(key, value)?,
            "keep_best" => self.keep_best = parse_bool(key, value)?,
            "seed" => self.seed = parse_value(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn to_pairs(&self) -> Vec<(String, String)> {
        [
            ("learning_rate", self.learning_rate.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("beta1", self.beta1.to_string()),
            ("beta2", self.beta2.to_string()),
            ("epsilon", self.epsilon.to_string()),
            ("epochs", self.epochs.to_string()),
            ("eval_every", self.eval_every.to_string()),
            ("patience", self.patience.to_string()),
            ("keep_best", if self.keep_best { "on" } else { "off" }.to_string()),
            ("seed", self.seed.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }
}

/// Model and training settings read from one `key=value` file.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    /// Unknown keys are rejected. Unless `init_seed` is given, the model is
    /// initialised from `seed`.
    pub fn from_entries(entries: &[Entry]) -> Result<Self> {
        let mut rc = RunConfig::default();
        let mut init_seed_set = false;
        for e in entries {
            init_seed_set |= e.key == "init_seed";
            if !rc.model.apply(&e.key, &e.value)? && !rc.train.apply(&e.key, &e.value)? {
                return Err(Error::Config(format!("line {}: unknown key {:?}", e.line, e.key)));
            }
        }
        if !init_seed_set {
            rc.model.init_seed = rc.train.seed;
        }
        rc.validate()?;
        Ok(rc)
    }

    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        Self::from_entries(&config::parse_kv(text, origin)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()
    }

    pub fn render(&self) -> String {
        config::render_kv(self.model.to_pairs().into_iter().chain(self.train.to_pairs()))
    }
}

/// One Adam update of `p` from its accumulated gradient.
pub fn adam_step(p: &mut Parameter, cfg: &TrainConfig) {
    let st = &mut p.adam;
    st.step += 1;
    let t = st.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let values = p.value.data_mut();
    for (i, &g) in p.grad.data().iter().enumerate() {
        let m = cfg.beta1 * st.first_moment[i] + (1.0 - cfg.beta1) * g;
        let v = cfg.beta2 * st.second_moment[i] + (1.0 - cfg.beta2) * g * g;
        st.first_moment[i] = m;
        st.second_moment[i] = v;
        let update = (m / bc1) / ((v / bc2).sqrt() + cfg.epsilon);
        values[i] -= cfg.learning_rate * update;
    }
}

/// Stack images and ground-truth heatmaps for a batch of samples.
pub fn batch_tensors(samples: &[&Sample], model: &ModelConfig) -> Result<(Tensor, Tensor)> {
    let hm = model.heatmap_size();
    let images: Vec<Tensor> = samples.iter().map(|s| s.image.clone()).collect();
    let targets = samples
        .iter()
        .map(|s| Ok(encode(&s.annotations_at(hm), model.sigma, hm, hm)?.maps))
        .collect::<Result<Vec<_>>>()?;
    Ok((Tensor::stack(&images)?, Tensor::stack(&targets)?))
}

fn check_data(net: &Network, samples: &[Sample]) -> Result<()> {
    let cfg = net.config();
    for s in samples.iter().take(1) {
        let shape = s.image.shape();
        if shape != [cfg.input_channels, cfg.input_size, cfg.input_size] {
            return Err(Error::Config(format!(
                "images are {shape:?} but the model expects {}×{}×{}",
                cfg.input_channels, cfg.input_size, cfg.input_size
            )));
        }
        let maps: usize = s.annotations.iter().map(|a| a.locations.len()).sum();
        if maps != cfg.num_maps {
            return Err(Error::Config(format!(
                "dataset has {maps} AU locations but num_maps={}",
                cfg.num_maps
            )));
        }
    }
    Ok(())
}

/// Mean heatmap loss per sample over a batch; gradients land in `net`.
pub fn train_step(net: &mut Network, images: Tensor, targets: Tensor, cfg: &TrainConfig) -> Result<f32> {
    let b = images.shape()[0];
    let loss_value;
    {
        let tape = Tape::new();
        let x = tape.constant(images);
        let pass = net.forward(&tape, x, true, None)?;
        let truth = tape.constant(targets);
        let loss = heatmap_loss(pass.heatmaps, truth)?.scale(1.0 / b as f32);
        loss_value = loss.value().item();
        if !loss_value.is_finite() {
            return Ok(loss_value);
        }
        loss.backward()?;
        net.zero_grad();
        net.accumulate_grads(&pass);
    }
    for p in net.params_mut() {
        adam_step(p, cfg);
    }
    Ok(loss_value)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub eval: Option<(f64, f64)>,
}

pub const LOSS_CURVE_HEADER: &str = "epoch,train_loss,eval_icc_avg,eval_mae_avg";

pub fn loss_curve_csv(curve: &[EpochRecord]) -> String {
    let mut s = format!("{LOSS_CURVE_HEADER}\n");
    for r in curve {
        match r.eval {
            Some((icc, mae)) => writeln!(s, "{},{},{},{}", r.epoch, r.train_loss, icc, mae),
            None => writeln!(s, "{},{},,", r.epoch, r.train_loss),
        }
        .unwrap();
    }
    s
}

pub struct TrainOutcome {
    pub network: Network,
    pub curve: Vec<EpochRecord>,
    /// Epoch whose parameters were kept (last epoch without `keep_best`).
    pub best_epoch: usize,
    pub best_report: Option<Report>,
    pub stopped_early: bool,
}

fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    order.shuffle(&mut rng);
    order
}

/// Train on `train`, evaluating on `eval` on schedule. `observer` sees every
/// epoch record as it is produced.
pub fn train(
    mut net: Network,
    train: &[Sample],
    eval: &[Sample],
    cfg: &TrainConfig,
    observer: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    check_data(&net, train)?;
    check_data(&net, eval)?;
    let evaluating = cfg.eval_every > 0 && !eval.is_empty();
    let mut curve = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, Network, Report)> = None;
    let mut stale = 0;
    let mut stopped_early = false;
    for epoch in 1..=cfg.epochs {
        let order = epoch_order(train.len(), cfg.seed, epoch);
        let mut total = 0.0f64;
        for (bi, idx) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&Sample> = idx.iter().map(|&i| &train[i]).collect();
            let (images, targets) = batch_tensors(&batch, net.config())?;
            let loss = train_step(&mut net, images, targets, cfg)?;
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch, batch: bi });
            }
            total += loss as f64 * batch.len() as f64;
        }
        let mut record = EpochRecord {
            epoch,
            train_loss: total / train.len() as f64,
            eval: None,
        };
        if evaluating && epoch % cfg.eval_every == 0 {
            let report = evaluate(&net, eval)?;
            record.eval = Some((report.avg_icc, report.avg_mae));
            if best.as_ref().is_none_or(|b| report.avg_icc > b.0) {
                best = Some((report.avg_icc, epoch, net.clone(), report));
                stale = 0;
            } else {
                stale += 1;
            }
        }
        observer(&record);
        curve.push(record);
        if evaluating && stale >= cfg.patience {
            stopped_early = true;
            break;
        }
    }
    let last_epoch = curve.last().map_or(0, |r| r.epoch);
    let (network, best_epoch, best_report) = match best {
        Some((_, e, n, r)) if cfg.keep_best => (n, e, Some(r)),
        Some((_, _, _, r)) => (net, last_epoch, Some(r)),
        None => (net, last_epoch, None),
    };
    Ok(TrainOutcome {
        network,
        curve,
        best_epoch,
        best_report,
        stopped_early,
    })
}

/// Axes of the ablation grid; every combination becomes one cell.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationGrid {
    pub scc: Vec<bool>,
    pub deconv_layers: Vec<usize>,
    pub variants: Vec<EdgeVariant>,
    pub k: Vec<usize>,
    pub seeds: Vec<u64>,
    pub base: RunConfig,
}

impl AblationGrid {
    /// Grid file: the axis keys `scc`, `deconv_layers`, `edge_variant`, `k`
    /// and `seeds` take comma-separated lists; any other run-config key sets
    /// the base configuration shared by all cells.
    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let entries = config::parse_kv(text, origin)?;
        let base_cfg = RunConfig::default();
        let mut grid = AblationGrid {
            scc: vec![base_cfg.model.scc_enabled],
            deconv_layers: vec![base_cfg.model.deconv_layers],
            variants: vec![base_cfg.model.scc.variant],
            k: vec![base_cfg.model.scc.k],
            seeds: vec![base_cfg.train.seed],
            base: base_cfg,
        };
        let mut base = Vec::new();
        for e in entries {
            let (k, v) = (e.key.as_str(), e.value.as_str());
            match k {
                "scc" => {
                    grid.scc = v
                        .split(',')
                        .map(|s| config::parse_bool(k, s.trim()))
                        .collect::<Result<_>>()?
                }
                "deconv_layers" => grid.deconv_layers = config::parse_list(k, v)?,
                "edge_variant" => grid.variants = config::parse_list(k, v)?,
                "k" | "scc_k" => grid.k = config::parse_list(k, v)?,
                "seeds" | "seed" => grid.seeds = config::parse_list(k, v)?,
                _ => base.push(e),
            }
        }
        grid.base = RunConfig::from_entries(&base)?;
        if grid.cells().is_empty() {
            return Err(Error::Config("ablation grid has an empty axis".into()));
        }
        Ok(grid)
    }

    pub fn cells(&self) -> Vec<AblationCell> {
        let mut cells = Vec::new();
        for &seed in &self.seeds {
            for &dl in &self.deconv_layers {
                for &variant in &self.variants {
                    for &k in &self.k {
                        for &scc in &self.scc {
                            cells.push(AblationCell {
                                index: cells.len(),
                                scc,
                                deconv_layers: dl,
                                variant,
                                k,
                                seed,
                            });
                        }
                    }
                }
            }
        }
        cells
    }

    pub fn cell_config(&self, cell: &AblationCell) -> RunConfig {
        let mut rc = self.base.clone();
        rc.model.scc_enabled = cell.scc;
        rc.model.deconv_layers = cell.deconv_layers;
        rc.model.scc.variant = cell.variant;
        rc.model.scc.k = cell.k;
        rc.model.init_seed = cell.seed;
        rc.train.seed = cell.seed;
        rc
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AblationCell {
    pub index: usize,
    pub scc: bool,
    pub deconv_layers: usize,
    pub variant: EdgeVariant,
    pub k: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellSummary {
    pub avg_icc: f64,
    pub avg_mae: f64,
    pub final_train_loss: f64,
    pub epochs_run: usize,
}

#[derive(Debug, Clone)]
pub struct CellResult {
    pub cell: AblationCell,
    pub outcome: std::result::Result<CellSummary, String>,
}

pub const ABLATION_HEADER: &str =
    "cell,scc,deconv_layers,edge_variant,k,seed,status,avg_icc,avg_mae,final_train_loss,epochs";

pub fn ablation_csv(results: &[CellResult]) -> String {
    let mut s = format!("{ABLATION_HEADER}\n");
    for r in results {
        let c = &r.cell;
        let head = format!(
            "{},{},{},{},{},{}",
            c.index,
            if c.scc { "on" } else { "off" },
            c.deconv_layers,
            c.variant,
            c.k,
            c.seed
        );
        match &r.outcome {
            Ok(m) => writeln!(
                s,
                "{head},ok,{},{},{},{}",
                m.avg_icc, m.avg_mae, m.final_train_loss, m.epochs_run
            ),
            Err(e) => writeln!(s, "{head},error: {},,,,", e.replace(',', ";")),
        }
        .unwrap();
    }
    s
}

/// One paired comparison between two cells differing in a single axis.
#[derive(Debug, Clone, PartialEq)]
pub struct Delta {
    /// `scc_on_minus_off` or `dl3_minus_dl2`.
    pub kind: &'static str,
    pub plus: usize,
    pub minus: usize,
    pub delta_icc: f64,
    pub delta_mae: f64,
}

pub fn ablation_deltas(results: &[CellResult]) -> Vec<Delta> {
    let mut out = Vec::new();
    let ok = |r: &CellResult| r.outcome.as_ref().ok().cloned();
    for a in results {
        for b in results {
            let (ca, cb) = (&a.cell, &b.cell);
            let same_rest = ca.variant == cb.variant && ca.k == cb.k && ca.seed == cb.seed;
            let kind = if same_rest && ca.deconv_layers == cb.deconv_layers && ca.scc && !cb.scc {
                "scc_on_minus_off"
            } else if same_rest && ca.scc == cb.scc && ca.deconv_layers == 3 && cb.deconv_layers == 2 {
                "dl3_minus_dl2"
            } else {
                continue;
            };
            if let (Some(x), Some(y)) = (ok(a), ok(b)) {
                out.push(Delta {
                    kind,
                    plus: ca.index,
                    minus: cb.index,
                    delta_icc: x.avg_icc - y.avg_icc,
                    delta_mae: x.avg_mae - y.avg_mae,
                });
            }
        }
    }
    out
}

pub fn deltas_csv(deltas: &[Delta]) -> String {
    let mut s = String::from("kind,plus_cell,minus_cell,delta_icc,delta_mae\n");
    for d in deltas {
        writeln!(s, "{},{},{},{},{}", d.kind, d.plus, d.minus, d.delta_icc, d.delta_mae).unwrap();
    }
    s
}

/// Worker count: available cores, capped by `SCCH_THREADS` when set.
pub fn worker_threads() -> usize {
    let cores = std::thread::available_parallelism().map_or(1, |n| n.get());
    match std::env::var("SCCH_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        Some(cap) if cap >= 1 => cores.min(cap),
        _ => cores,
    }
}

fn run_cell(grid: &AblationGrid, cell: &AblationCell, data: &Dataset) -> Result<CellSummary> {
    let rc = grid.cell_config(cell);
    rc.validate()?;
    let net = Network::new(rc.model.clone())?;
    let out = train(net, &data.train, &data.test, &rc.train, &mut |_| {})?;
    let report = evaluate(&out.network, &data.test)?;
    Ok(CellSummary {
        avg_icc: report.avg_icc,
        avg_mae: report.avg_mae,
        final_train_loss: out.curve.last().map_or(f64::NAN, |r| r.train_loss),
        epochs_run: out.curve.len(),
    })
}

/// Train and evaluate every cell. Each cell is single-threaded; cells run on
/// up to `threads` workers. A failing cell is recorded, not fatal.
pub fn run_ablation(
    data: &Dataset,
    grid: &AblationGrid,
    threads: usize,
    observer: &(dyn Fn(&CellResult) + Sync),
) -> Vec<CellResult> {
    let cells = grid.cells();
    let next = AtomicUsize::new(0);
    let results = Mutex::new(Vec::with_capacity(cells.len()));
    std::thread::scope(|scope| {
        for _ in 0..threads.clamp(1, cells.len().max(1)) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(cell) = cells.get(i) else { break };
                let result = CellResult {
                    cell: *cell,
                    outcome: run_cell(grid, cell, data).map_err(|e| e.to_string()),
                };
                observer(&result);
                results.lock().unwrap().push(result);
            });
        }
    });
    let mut results = results.into_inner().unwrap();
    results.sort_by_key(|r| r.cell.index);
    results
}
