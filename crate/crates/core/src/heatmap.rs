//! Gaussian ground-truth heatmaps and peak decoding.
//!
//! Every (AU, location) pair owns one map. A map for an AU of intensity `I`
//! centred at `c` holds `I / (2πσ²) · exp(−‖x − c‖² / (2σ²))` at pixel `x`,
//! so its peak is `I / (2πσ²)`. Decoding multiplies the peak back by `2πσ²`
//! unless [`PeakMode::Raw`] is requested.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::pgm;
use crate::tensor::{write_tensor, Tensor, Var};

/// Calibrated peaks below this are treated as an absent AU.
pub const EPSILON_ZERO: f32 = 1e-3;

pub const DEFAULT_SIGMA: f32 = 1.5;

pub const MAX_INTENSITY: u8 = 5;

/// A point in heatmap pixel units; `x` is the column, `y` the row.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Location {
    pub x: f32,
    pub y: f32,
}

impl Location {
    pub fn new(x: f32, y: f32) -> Self {
        Self { x, y }
    }

    pub fn scaled(self, factor: f32) -> Self {
        Self::new(self.x * factor, self.y * factor)
    }
}

/// One annotated AU instance.
#[derive(Debug, Clone, PartialEq)]
pub struct AUAnnotation {
    pub au_id: usize,
    pub locations: Vec<Location>,
    pub intensity: u8,
}

impl AUAnnotation {
    pub fn new(au_id: usize, locations: Vec<Location>, intensity: u8) -> Self {
        Self {
            au_id,
            locations,
            intensity,
        }
    }

    fn validate(&self, height: usize, width: usize) -> Result<()> {
        if self.intensity > MAX_INTENSITY {
            return Err(Error::Validation(format!(
                "AU {} has intensity {} outside 0..=5",
                self.au_id, self.intensity
            )));
        }
        if self.locations.is_empty() || self.locations.len() > 2 {
            return Err(Error::Validation(format!(
                "AU {} needs one or two locations, got {}",
                self.au_id,
                self.locations.len()
            )));
        }
        for loc in &self.locations {
            let inside = loc.x >= 0.0
                && loc.y >= 0.0
                && loc.x <= (width - 1) as f32
                && loc.y <= (height - 1) as f32;
            if !inside {
                return Err(Error::Validation(format!(
                    "AU {} location ({}, {}) outside {}x{} heatmap",
                    self.au_id, loc.x, loc.y, width, height
                )));
            }
        }
        Ok(())
    }
}

/// N response maps of size H×W and the σ they were built with.
#[derive(Debug, Clone, PartialEq)]
pub struct HeatmapSet {
    /// `N × H × W`.
    pub maps: Tensor,
    pub sigma: f32,
    /// au_id → indices into `maps`, in location order.
    pub location_index: BTreeMap<usize, Vec<usize>>,
}

impl HeatmapSet {
    pub fn num_maps(&self) -> usize {
        self.maps.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.maps.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.maps.shape()[2]
    }

    pub fn map(&self, i: usize) -> &[f32] {
        let plane = self.height() * self.width();
        &self.maps.data()[i * plane..(i + 1) * plane]
    }

    /// Wrap predicted maps with the layout used for the ground truth.
    pub fn with_layout(maps: Tensor, sigma: f32, layout: &BTreeMap<usize, Vec<usize>>) -> Result<Self> {
        if maps.rank() != 3 {
            return Err(Error::shape(
                "HeatmapSet",
                format!("maps must be N×H×W, got {:?}", maps.shape()),
            ));
        }
        let n = maps.shape()[0];
        let indexed = layout.values().flatten().count();
        if indexed != n || layout.values().flatten().any(|&i| i >= n) {
            return Err(Error::shape(
                "HeatmapSet",
                format!("layout indexes {indexed} maps but tensor holds {n}"),
            ));
        }
        Ok(Self {
            maps,
            sigma,
            location_index: layout.clone(),
        })
    }
}

/// Map layout implied by an annotation list: one map per (AU, location) in order.
pub fn layout_of(annotations: &[AUAnnotation]) -> BTreeMap<usize, Vec<usize>> {
    let mut layout = BTreeMap::new();
    let mut next = 0;
    for a in annotations {
        let idx: Vec<usize> = (next..next + a.locations.len()).collect();
        next += a.locations.len();
        layout.insert(a.au_id, idx);
    }
    layout
}

/// Gaussian value at squared pixel distance `d2`.
fn gaussian(intensity: f64, sigma: f64, d2: f64) -> f64 {
    intensity / (2.0 * PI * sigma * sigma) * (-d2 / (2.0 * sigma * sigma)).exp()
}

pub fn encode(annotations: &[AUAnnotation], sigma: f32, height: usize, width: usize) -> Result<HeatmapSet> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::Config(format!("sigma must be positive, got {sigma}")));
    }
    if height == 0 || width == 0 {
        return Err(Error::Config("heatmap extent must be positive".into()));
    }
    let mut seen = std::collections::BTreeSet::new();
    for a in annotations {
        a.validate(height, width)?;
        if !seen.insert(a.au_id) {
            return Err(Error::Validation(format!("AU {} annotated twice", a.au_id)));
        }
    }
    let n: usize = annotations.iter().map(|a| a.locations.len()).sum();
    if n == 0 {
        return Err(Error::Validation("no annotations to encode".into()));
    }
    let plane = height * width;
    let mut data = vec![0.0f32; n * plane];
    let s = sigma as f64;
    let mut m = 0;
    for a in annotations {
        for loc in &a.locations {
            if a.intensity > 0 {
                let map = &mut data[m * plane..(m + 1) * plane];
                let (cx, cy) = (loc.x as f64, loc.y as f64);
                for y in 0..height {
                    for x in 0..width {
                        let d2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
                        map[y * width + x] = gaussian(a.intensity as f64, s, d2) as f32;
                    }
                }
            }
            m += 1;
        }
    }
    Ok(HeatmapSet {
        maps: Tensor::new(&[n, height, width], data)?,
        sigma,
        location_index: layout_of(annotations),
    })
}

/// How a peak value is turned into an intensity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PeakMode {
    /// Multiply the peak by `2πσ²` so encode/decode round-trips.
    #[default]
    Calibrated,
    /// Report the raw maximum.
    Raw,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodedAu {
    pub au_id: usize,
    pub intensity: f32,
    /// Argmax of each map; empty when the AU is judged absent.
    pub locations: Vec<Location>,
}

/// Peak value and row-major argmax (lowest index wins ties).
pub fn peak(map: &[f32]) -> (f32, usize) {
    let mut best = (map[0], 0);
    for (i, &v) in map.iter().enumerate().skip(1) {
        if v > best.0 {
            best = (v, i);
        }
    }
    best
}

pub fn decode(set: &HeatmapSet) -> Vec<DecodedAu> {
    decode_with(set, PeakMode::Calibrated)
}

pub fn decode_with(set: &HeatmapSet, mode: PeakMode) -> Vec<DecodedAu> {
    let width = set.width();
    let scale = match mode {
        PeakMode::Calibrated => 2.0 * PI * (set.sigma as f64).powi(2),
        PeakMode::Raw => 1.0,
    };
    set.location_index
        .iter()
        .map(|(&au_id, maps)| {
            let peaks: Vec<(f32, usize)> = maps.iter().map(|&i| peak(set.map(i))).collect();
            let mean = peaks.iter().map(|&(p, _)| p as f64 * scale).sum::<f64>()
                / peaks.len().max(1) as f64;
            let intensity = mean as f32;
            let locations = if intensity < EPSILON_ZERO {
                Vec::new()
            } else {
                peaks
                    .iter()
                    .map(|&(_, i)| Location::new((i % width) as f32, (i / width) as f32))
                    .collect()
            };
            DecodedAu {
                au_id,
                intensity,
                locations,
            }
        })
        .collect()
}

/// Squared L2 distance summed over maps and pixels, differentiable in `pred`.
/// Accepts `N×H×W` or batched `B×N×H×W` operands of identical shape.
pub fn heatmap_loss<'t>(pred: Var<'t>, truth: Var<'t>) -> Result<Var<'t>> {
    let (ps, ts) = (pred.shape(), truth.shape());
    if ps != ts || !(ps.len() == 3 || ps.len() == 4) {
        return Err(Error::shape(
            "heatmap_loss",
            format!("prediction {ps:?} vs truth {ts:?}"),
        ));
    }
    pred.mse(truth)
}

/// Write `stem.tnsr` plus one `stem_<i>.pgm` rendering per map.
pub fn dump_heatmaps(dir: &Path, stem: &str, maps: &Tensor) -> Result<Vec<PathBuf>> {
    let shape = maps.shape();
    if shape.len() != 3 {
        return Err(Error::shape("dump_heatmaps", format!("{shape:?} is not N×H×W")));
    }
    let (n, h, w) = (shape[0], shape[1], shape[2]);
    let mut paths = Vec::with_capacity(n + 1);
    let tpath = dir.join(format!("{stem}.tnsr"));
    write_tensor(&tpath, maps)?;
    paths.push(tpath);
    for i in 0..n {
        let plane = &maps.data()[i * h * w..(i + 1) * h * w];
        let p = dir.join(format!("{stem}_{i}.pgm"));
        pgm::write_pgm(&p, w, h, &pgm::scale_to_max(plane))?;
        paths.push(p);
    }
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;

    fn single(au: usize, x: f32, y: f32, i: u8) -> AUAnnotation {
        AUAnnotation::new(au, vec![Location::new(x, y)], i)
    }

    #[test]
    fn peak_value_at_centre() {
        let set = encode(&[single(0, 5.0, 5.0, 5)], 1.0, 11, 11).unwrap();
        let v = set.map(0)[5 * 11 + 5];
        assert!((v - 0.795_775).abs() < 1e-6, "{v}");
    }

    #[test]
    fn unit_offset_value() {
        let set = encode(&[single(0, 5.0, 5.0, 5)], 1.0, 11, 11).unwrap();
        let expected = (5.0 / (2.0 * PI) * (-0.5f64).exp()) as f32;
        let v = set.map(0)[5 * 11 + 6];
        assert!((v - expected).abs() < 1e-7);
        assert!((v - 0.482_662).abs() < 1e-6);
    }

    #[test]
    fn zero_intensity_is_zero_map_and_decodes_absent() {
        let set = encode(&[single(2, 3.0, 4.0, 0)], 1.5, 8, 8).unwrap();
        assert!(set.maps.data().iter().all(|&v| v == 0.0));
        let d = decode(&set);
        assert_eq!(d[0].intensity, 0.0);
        assert!(d[0].locations.is_empty());
    }

    #[test]
    fn round_trip_example() {
        let set = encode(&[single(0, 10.0, 20.0, 3)], 1.5, 32, 32).unwrap();
        let d = decode(&set);
        assert!((d[0].intensity - 3.0).abs() < 1e-5);
        assert_eq!(d[0].locations, vec![Location::new(10.0, 20.0)]);
    }

    #[test]
    fn bilateral_average() {
        let sigma = 1.0f32;
        let scale = (2.0 * PI * (sigma as f64).powi(2)) as f32;
        let mut maps = Tensor::zeros(&[2, 4, 4]);
        maps.data_mut()[5] = 2.0 / scale;
        maps.data_mut()[16 + 10] = 4.0 / scale;
        let mut layout = BTreeMap::new();
        layout.insert(7, vec![0, 1]);
        let set = HeatmapSet::with_layout(maps, sigma, &layout).unwrap();
        let d = decode(&set);
        assert!((d[0].intensity - 3.0).abs() < 1e-5);
        assert_eq!(
            d[0].locations,
            vec![Location::new(1.0, 1.0), Location::new(2.0, 2.0)]
        );
    }

    #[test]
    fn raw_mode_reports_uncalibrated_peak() {
        let set = encode(&[single(0, 2.0, 2.0, 4)], 1.0, 5, 5).unwrap();
        let d = decode_with(&set, PeakMode::Raw);
        assert!((d[0].intensity - (4.0 / (2.0 * PI)) as f32).abs() < 1e-6);
    }

    #[test]
    fn argmax_ties_pick_lowest_index() {
        assert_eq!(peak(&[0.0, 3.0, 1.0, 3.0]), (3.0, 1));
    }

    #[test]
    fn out_of_bounds_names_annotation() {
        let err = encode(&[single(4, 8.0, 2.0, 1)], 1.0, 8, 8).unwrap_err();
        let msg = err.to_string();
        assert!(matches!(err, Error::Validation(_)));
        assert!(msg.contains("AU 4"), "{msg}");
    }

    #[test]
    fn loss_values() {
        let tape = Tape::new();
        let a = encode(&[single(0, 2.0, 2.0, 3)], 1.5, 6, 6).unwrap().maps;
        let mut b = a.clone();
        b.data_mut()[7] += 1.0;
        let pa = tape.variable(a.clone());
        let ta = tape.constant(a);
        assert_eq!(heatmap_loss(pa, ta).unwrap().value().item(), 0.0);
        let tb = tape.constant(b);
        assert!((heatmap_loss(pa, tb).unwrap().value().item() - 1.0).abs() < 1e-6);
        let bad = tape.constant(Tensor::zeros(&[1, 6, 5]));
        assert!(heatmap_loss(pa, bad).is_err());
    }

    #[test]
    fn falloff_and_symmetry() {
        let set = encode(&[single(0, 8.0, 8.0, 4)], 2.0, 17, 17).unwrap();
        let m = set.map(0);
        let at = |x: usize, y: usize| m[y * 17 + x];
        assert_eq!(at(11, 8), at(5, 8));
        assert_eq!(at(8, 11), at(8, 5));
        assert_eq!(at(11, 8), at(8, 11));
        for d in 0..8 {
            assert!(at(8 + d, 8) > at(8 + d + 1, 8));
        }
    }
}
