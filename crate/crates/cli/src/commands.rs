use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use scch_core::config::{self, Entry};
use scch_core::gradcheck::{self, Scope};
use scch_core::heatmap::dump_heatmaps;
use scch_core::metrics::evaluate;
use scch_core::pgm;
use scch_core::scc::{write_graph_trace, GRAPH_TRACE_HEADER};
use scch_core::synth::{Dataset, GenerateOptions, Roster, Split};
use scch_core::tensor::write_tensor;
use scch_core::trainer::{self, AblationGrid, RunConfig};
use scch_core::{Error, Network, Result, Tensor};

use crate::manifest::RunManifest;
use crate::DumpWhat;

pub enum Outcome {
    Success,
    CheckFailed,
}

/// Create `dir`, refusing to reuse a non-empty one unless `force`.
fn prepare_out(dir: &Path, force: bool) -> Result<()> {
    if let Ok(mut entries) = fs::read_dir(dir) {
        if entries.next().is_some() && !force {
            return Err(Error::Usage(format!(
                "{} exists and is not empty; pass --force to overwrite",
                dir.display()
            )));
        }
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_file(path: PathBuf, contents: impl AsRef<[u8]>) -> Result<PathBuf> {
    fs::write(&path, contents).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

pub fn generate(
    out: &Path,
    n_train: usize,
    n_test: usize,
    seed: u64,
    spec: Option<&Path>,
    image_size: usize,
    force: bool,
) -> Result<Outcome> {
    let (roster, source) = match spec {
        Some(p) => (Roster::load(p)?, p.display().to_string()),
        None => (Roster::default(), "default".to_string()),
    };
    let data = Dataset::generate(
        roster,
        GenerateOptions {
            n_train,
            n_test,
            image_size,
            seed,
        },
    )?;
    prepare_out(out, force)?;
    let mut m = RunManifest::start("generate");
    m.config_path(spec);
    m.seed(seed);
    m.setting("n_train", n_train);
    m.setting("n_test", n_test);
    m.setting("image_size", image_size);
    m.setting("spec_source", &source);
    m.setting("spec_hash", data.roster.spec_hash());
    let written = data.write(out, &source)?;
    m.artifact(out.join("manifest.txt"));
    m.artifact(out.join("roster.txt"));
    m.setting("files_written", written.len());
    m.write(out)?;
    eprintln!("wrote {n_train} train and {n_test} test samples to {}", out.display());
    Ok(Outcome::Success)
}

/// Config entries for a dataset: geometry keys inferred from the data come
/// first so the file can override them.
fn run_config(data: &Dataset, config_path: Option<&Path>, seed: Option<u64>) -> Result<RunConfig> {
    let mut entries = vec![
        Entry {
            key: "input_size".into(),
            value: data.image_size.to_string(),
            line: 0,
        },
        Entry {
            key: "num_maps".into(),
            value: data.roster.num_maps().to_string(),
            line: 0,
        },
    ];
    if let Some(p) = config_path {
        let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
        entries.extend(config::parse_kv(&text, &p.display().to_string())?);
    }
    if let Some(s) = seed {
        entries.push(Entry {
            key: "seed".into(),
            value: s.to_string(),
            line: 0,
        });
    }
    RunConfig::from_entries(&entries)
}

pub fn train(data_dir: &Path, config_path: Option<&Path>, out: &Path, seed: Option<u64>, force: bool) -> Result<Outcome> {
    let data = Dataset::load(data_dir)?;
    let rc = run_config(&data, config_path, seed)?;
    prepare_out(out, force)?;
    let mut m = RunManifest::start("train");
    m.config_path(config_path);
    m.seed(rc.train.seed);
    m.setting("data", data_dir.display());
    m.settings(rc.model.to_pairs().into_iter().chain(rc.train.to_pairs()));
    let cfg_path = write_file(out.join("config.txt"), rc.render())?;

    let net = Network::new(rc.model.clone())?;
    eprintln!(
        "training {} parameters on {} samples, evaluating on {}",
        net.num_parameters(),
        data.train.len(),
        data.test.len()
    );
    let outcome = trainer::train(net, &data.train, &data.test, &rc.train, &mut |r| match r.eval {
        Some((icc, mae)) => eprintln!("epoch {:>3}  loss {:.6}  icc {icc:.4}  mae {mae:.4}", r.epoch, r.train_loss),
        None => eprintln!("epoch {:>3}  loss {:.6}", r.epoch, r.train_loss),
    })?;
    let ckpt = out.join("checkpoint.scch");
    outcome.network.save(&ckpt)?;
    let curve = write_file(out.join("loss_curve.csv"), trainer::loss_curve_csv(&outcome.curve))?;
    m.artifact(cfg_path);
    m.artifact(ckpt);
    m.artifact(curve);
    if let Some(r) = &outcome.best_report {
        m.artifact(write_file(out.join("eval_report.jsonl"), r.to_jsonl())?);
        m.artifact(write_file(out.join("eval_report.csv"), r.to_csv())?);
        eprintln!(
            "kept epoch {}: avg icc {:.4}, avg mae {:.4}",
            outcome.best_epoch, r.avg_icc, r.avg_mae
        );
    }
    m.setting("best_epoch", outcome.best_epoch);
    m.setting("stopped_early", outcome.stopped_early);
    m.write(out)?;
    Ok(Outcome::Success)
}

pub fn eval(checkpoint: &Path, data_dir: &Path, split: Split, out: &Path, force: bool) -> Result<Outcome> {
    let net = Network::load(checkpoint)?;
    let data = Dataset::load(data_dir)?;
    let report = evaluate(&net, data.split(split))?;
    prepare_out(out, force)?;
    let mut m = RunManifest::start("eval");
    m.setting("checkpoint", checkpoint.display());
    m.setting("data", data_dir.display());
    m.setting("split", split.name());
    m.settings(net.config().to_pairs());
    m.artifact(write_file(out.join("report.jsonl"), report.to_jsonl())?);
    m.artifact(write_file(out.join("report.csv"), report.to_csv())?);
    m.write(out)?;
    print!("{}", report.to_csv());
    Ok(Outcome::Success)
}

pub fn gradcheck(scope: Scope, tol: f64, seed: u64, out: &Path, force: bool) -> Result<Outcome> {
    if !(tol > 0.0) {
        return Err(Error::Usage(format!("--tol must be positive, got {tol}")));
    }
    prepare_out(out, force)?;
    let results = gradcheck::run_suite(scope, tol, seed)?;
    let mut csv = String::from("check,checked,skipped,max_rel_error,passed\n");
    let mut failing = Vec::new();
    for r in &results {
        let status = if r.passed { "ok" } else { "FAIL" };
        println!(
            "{status:<4} {:<32} checked {:>5}  skipped {:>3}  max rel err {:.3e}",
            r.name, r.checked, r.skipped, r.max_rel_error
        );
        csv.push_str(&format!(
            "{},{},{},{},{}\n",
            r.name, r.checked, r.skipped, r.max_rel_error, r.passed
        ));
        if !r.passed {
            failing.push(r);
        }
    }
    let mut m = RunManifest::start("gradcheck");
    m.seed(seed);
    m.setting("tol", tol);
    m.setting("failures", failing.len());
    m.artifact(write_file(out.join("gradcheck.csv"), csv)?);
    m.write(out)?;
    if failing.is_empty() {
        return Ok(Outcome::Success);
    }
    for r in failing {
        eprintln!(
            "gradient check failed: {} (max relative error {:.3e}, {} of {} skipped)",
            r.name, r.max_rel_error, r.skipped, r.checked
        );
    }
    Ok(Outcome::CheckFailed)
}

pub fn ablate(data_dir: &Path, grid_path: &Path, out: &Path, force: bool) -> Result<Outcome> {
    let data = Dataset::load(data_dir)?;
    let text = fs::read_to_string(grid_path).map_err(|e| Error::io(grid_path, e))?;
    let mut geometry = format!("input_size={}\nnum_maps={}\n", data.image_size, data.roster.num_maps());
    geometry.push_str(&text);
    let grid = AblationGrid::parse(&geometry, &grid_path.display().to_string())?;
    prepare_out(out, force)?;
    let threads = trainer::worker_threads();
    let cells = grid.cells().len();
    eprintln!("{cells} cells on {threads} worker(s)");
    let results = trainer::run_ablation(&data, &grid, threads, &|r| match &r.outcome {
        Ok(s) => eprintln!("cell {:>3}: icc {:.4} mae {:.4}", r.cell.index, s.avg_icc, s.avg_mae),
        Err(e) => eprintln!("cell {:>3}: failed: {e}", r.cell.index),
    });
    let mut m = RunManifest::start("ablate");
    m.config_path(Some(grid_path));
    m.setting("data", data_dir.display());
    m.setting("cells", cells);
    m.setting("threads", threads);
    m.artifact(write_file(out.join("results.csv"), trainer::ablation_csv(&results))?);
    m.artifact(write_file(
        out.join("deltas.csv"),
        trainer::deltas_csv(&trainer::ablation_deltas(&results)),
    )?);
    m.write(out)?;
    Ok(Outcome::Success)
}

fn input_image(net: &Network, input: Option<&Path>) -> Result<Tensor> {
    let p = input.ok_or_else(|| Error::Usage("--input is required for this dump".into()))?;
    let img = pgm::read_image(p)?;
    let n = net.config().input_size;
    if img.shape() != [1, n, n] || net.config().input_channels != 1 {
        return Err(Error::Validation(format!(
            "{} is {:?}, the model expects {}×{n}×{n}",
            p.display(),
            img.shape(),
            net.config().input_channels
        )));
    }
    Ok(img)
}

pub fn dump(checkpoint: &Path, what: DumpWhat, input: Option<&Path>, out: &Path, force: bool) -> Result<Outcome> {
    let net = Network::load(checkpoint)?;
    let image = match what {
        DumpWhat::Weights => None,
        _ => Some(input_image(&net, input)?),
    };
    prepare_out(out, force)?;
    let mut m = RunManifest::start("dump");
    m.setting("checkpoint", checkpoint.display());
    m.setting("input", input.map_or("none".into(), |p| p.display().to_string()));
    match (what, image) {
        (DumpWhat::Weights, _) => {
            m.setting("what", "weights");
            let mut csv = String::from("channel,map,weight\n");
            for r in net.dump_pattern_weights() {
                csv.push_str(&format!("{},{},{}\n", r.channel, r.map, r.weight));
            }
            m.artifact(write_file(out.join("weights.csv"), csv)?);
        }
        (DumpWhat::Heatmaps, Some(img)) => {
            m.setting("what", "heatmaps");
            let s = img.shape().to_vec();
            let maps = net.predict(img.reshaped(&[1, s[0], s[1], s[2]])?)?;
            m.artifacts(dump_heatmaps(out, "heatmap", &maps.index_outer(0))?);
        }
        (DumpWhat::Responses, Some(img)) => {
            m.setting("what", "responses");
            let (resp, _) = net.channel_responses(&img)?;
            let path = out.join("responses.tnsr");
            write_tensor(&path, &resp)?;
            m.artifact(path);
            let (c, h, w) = (resp.shape()[0], resp.shape()[1], resp.shape()[2]);
            for j in 0..c {
                let plane = &resp.data()[j * h * w..(j + 1) * h * w];
                let p = out.join(format!("response_{j}.pgm"));
                pgm::write_pgm(&p, w, h, &pgm::scale_to_max(plane))?;
                m.artifact(p);
            }
        }
        (DumpWhat::Graph, Some(img)) => {
            m.setting("what", "graph");
            let (_, graphs) = net.channel_responses(&img)?;
            let path = out.join("graph.csv");
            let mut buf = Vec::new();
            writeln!(buf, "{GRAPH_TRACE_HEADER}").expect("in-memory write");
            for (layer, g) in graphs.iter().enumerate() {
                write_graph_trace(&mut buf, layer, g).expect("in-memory write");
            }
            m.artifact(write_file(path, buf)?);
            m.setting("scc_layers", graphs.len());
        }
        _ => unreachable!("input image loaded for every dump but weights"),
    }
    m.write(out)?;
    Ok(Outcome::Success)
}
