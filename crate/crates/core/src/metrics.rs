//! ICC(3,1) and MAE over per-AU intensity predictions.

use std::collections::BTreeMap;
use std::fmt;
use std::fmt::Write as _;

use serde_json::json;

use crate::error::{Error, Result};
use crate::heatmap::{decode_with, layout_of, HeatmapSet, MAX_INTENSITY};
use crate::network::Network;
use crate::synth::Sample;
use crate::tensor::Tensor;

/// ICC result; `Undefined` when every value in the table is identical.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Icc {
    Value(f64),
    Undefined,
}

impl Icc {
    pub fn value(self) -> Option<f64> {
        match self {
            Icc::Value(v) => Some(v),
            Icc::Undefined => None,
        }
    }

    /// Value used when averaging: undefined counts as no agreement.
    pub fn or_zero(self) -> f64 {
        self.value().unwrap_or(0.0)
    }
}

impl fmt::Display for Icc {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Icc::Value(v) => write!(f, "{v:.6}"),
            Icc::Undefined => f.write_str("undefined"),
        }
    }
}

fn check_pairs(labels: &[f64], predictions: &[f64], min: usize) -> Result<()> {
    if labels.len() != predictions.len() {
        return Err(Error::Metric(format!(
            "{} labels vs {} predictions",
            labels.len(),
            predictions.len()
        )));
    }
    if labels.len() < min {
        return Err(Error::Metric(format!("need at least {min} targets, got {}", labels.len())));
    }
    if labels.iter().chain(predictions).any(|v| !v.is_finite()) {
        return Err(Error::Metric("non-finite value in table".into()));
    }
    Ok(())
}

/// Two-way mixed, single-measure ICC with two judges:
/// `(BMS − EMS) / (BMS + EMS)`.
pub fn icc31(labels: &[f64], predictions: &[f64]) -> Result<Icc> {
    check_pairs(labels, predictions, 2)?;
    let n = labels.len() as f64;
    let k = 2.0;
    let grand = labels.iter().chain(predictions).sum::<f64>() / (n * k);
    let (mean_l, mean_p) = (
        labels.iter().sum::<f64>() / n,
        predictions.iter().sum::<f64>() / n,
    );
    let mut ss_rows = 0.0;
    let mut ss_err = 0.0;
    for (&a, &b) in labels.iter().zip(predictions) {
        let row = 0.5 * (a + b);
        ss_rows += k * (row - grand).powi(2);
        ss_err += (a - row - mean_l + grand).powi(2) + (b - row - mean_p + grand).powi(2);
    }
    let bms = ss_rows / (n - 1.0);
    let ems = ss_err / ((n - 1.0) * (k - 1.0));
    let denom = bms + (k - 1.0) * ems;
    if denom <= 0.0 {
        return Ok(Icc::Undefined);
    }
    Ok(Icc::Value(((bms - ems) / denom).clamp(-1.0, 1.0)))
}

pub fn mae(labels: &[f64], predictions: &[f64]) -> Result<f64> {
    check_pairs(labels, predictions, 1)?;
    Ok(labels.iter().zip(predictions).map(|(a, b)| (a - b).abs()).sum::<f64>() / labels.len() as f64)
}

/// Paired label / prediction lists per AU.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EvalTable {
    pub per_au: BTreeMap<usize, (Vec<f64>, Vec<f64>)>,
}

impl EvalTable {
    pub fn push(&mut self, au_id: usize, label: f64, prediction: f64) {
        let e = self.per_au.entry(au_id).or_default();
        e.0.push(label);
        e.1.push(prediction);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AuMetrics {
    pub au_id: usize,
    pub icc: Icc,
    pub mae: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub per_au: Vec<AuMetrics>,
    /// Unweighted mean over AUs; undefined ICCs count as 0.
    pub avg_icc: f64,
    pub avg_mae: f64,
}

impl Report {
    pub fn from_table(table: &EvalTable) -> Result<Self> {
        if table.per_au.is_empty() {
            return Err(Error::Metric("empty evaluation table".into()));
        }
        let per_au = table
            .per_au
            .iter()
            .map(|(&au_id, (l, p))| {
                Ok(AuMetrics {
                    au_id,
                    icc: icc31(l, p)?,
                    mae: mae(l, p)?,
                    count: l.len(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let n = per_au.len() as f64;
        Ok(Self {
            avg_icc: per_au.iter().map(|m| m.icc.or_zero()).sum::<f64>() / n,
            avg_mae: per_au.iter().map(|m| m.mae).sum::<f64>() / n,
            per_au,
        })
    }

    /// One JSON object per AU, then an `"avg"` record.
    pub fn to_jsonl(&self) -> String {
        let mut s = String::new();
        for m in &self.per_au {
            let rec = json!({
                "au": m.au_id,
                "icc": m.icc.value(),
                "icc_defined": m.icc.value().is_some(),
                "mae": m.mae,
                "n": m.count,
            });
            writeln!(s, "{rec}").unwrap();
        }
        writeln!(s, "{}", json!({"au": "avg", "icc": self.avg_icc, "mae": self.avg_mae})).unwrap();
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("au,icc,mae,n\n");
        for m in &self.per_au {
            writeln!(s, "{},{},{:.6},{}", m.au_id, m.icc, m.mae, m.count).unwrap();
        }
        writeln!(s, "avg,{:.6},{:.6},", self.avg_icc, self.avg_mae).unwrap();
        s
    }
}

/// Anything that turns samples into per-AU intensity estimates, in the
/// order of each sample's annotations.
pub trait Predictor {
    fn predict(&self, samples: &[Sample]) -> Result<Vec<Vec<f64>>>;
}

/// Returns the annotated intensities.
pub struct OraclePredictor;

impl Predictor for OraclePredictor {
    fn predict(&self, samples: &[Sample]) -> Result<Vec<Vec<f64>>> {
        Ok(samples
            .iter()
            .map(|s| s.annotations.iter().map(|a| a.intensity as f64).collect())
            .collect())
    }
}

/// Predicts the same intensity for every AU.
pub struct ConstantPredictor(pub f64);

impl Predictor for ConstantPredictor {
    fn predict(&self, samples: &[Sample]) -> Result<Vec<Vec<f64>>> {
        Ok(samples.iter().map(|s| vec![self.0; s.annotations.len()]).collect())
    }
}

const EVAL_BATCH: usize = 32;

/// Heatmap peaks decoded with the model's σ and peak mode, clamped to the
/// label range.
impl Predictor for Network {
    fn predict(&self, samples: &[Sample]) -> Result<Vec<Vec<f64>>> {
        let cfg = self.config();
        let mut out = Vec::with_capacity(samples.len());
        for chunk in samples.chunks(EVAL_BATCH) {
            let images: Vec<Tensor> = chunk.iter().map(|s| s.image.clone()).collect();
            let maps = self.predict(Tensor::stack(&images)?)?;
            for (i, s) in chunk.iter().enumerate() {
                let layout = layout_of(&s.annotations);
                let set = HeatmapSet::with_layout(maps.index_outer(i), cfg.sigma, &layout)?;
                let decoded = decode_with(&set, cfg.peak_mode);
                let by_id: BTreeMap<usize, f32> = decoded.iter().map(|d| (d.au_id, d.intensity)).collect();
                out.push(
                    s.annotations
                        .iter()
                        .map(|a| (by_id[&a.au_id] as f64).clamp(0.0, MAX_INTENSITY as f64))
                        .collect(),
                );
            }
        }
        Ok(out)
    }
}

pub fn evaluate<P: Predictor + ?Sized>(predictor: &P, samples: &[Sample]) -> Result<Report> {
    if samples.is_empty() {
        return Err(Error::Metric("cannot evaluate an empty dataset".into()));
    }
    let preds = predictor.predict(samples)?;
    let mut table = EvalTable::default();
    for (s, p) in samples.iter().zip(&preds) {
        if p.len() != s.annotations.len() {
            return Err(Error::Metric(format!(
                "{} predictions for {} AUs",
                p.len(),
                s.annotations.len()
            )));
        }
        for (a, &v) in s.annotations.iter().zip(p) {
            table.push(a.au_id, a.intensity as f64, v);
        }
    }
    Report::from_table(&table)
}
