//! Procedural face-like images with coupled, imbalanced AU intensities.
//!
//! Every sample is a pure function of `(roster, image size, seed)`. A sample
//! seed is the dataset seed XOR a hash of the split and index, so samples can
//! be regenerated one at a time.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::config::{self, Entry};
use crate::error::{Error, Result};
use crate::heatmap::{AUAnnotation, Location, MAX_INTENSITY};
use crate::pgm;
use crate::tensor::Tensor;

pub const LEVELS: usize = MAX_INTENSITY as usize + 1;
pub const DEFAULT_MARGINALS: [f64; LEVELS] = [0.55, 0.20, 0.12, 0.07, 0.04, 0.02];
pub const DEFAULT_NOISE_STD: f32 = 0.02;
/// Largest template shift, in pixels at 64×64.
pub const MAX_JITTER: i32 = 2;
/// Base level at which an AU starts activating its partners.
pub const TRIGGER_LEVEL: u8 = 4;
/// Lowest level a partner is raised to when activated.
pub const ACTIVATED_FLOOR: u8 = 2;

/// The built-in six-AU roster.
pub const DEFAULT_ROSTER: &str = "\
# six synthetic AUs; coordinates are fractions of the image side
marginals=0.55,0.20,0.12,0.07,0.04,0.02
noise_std=0.02
au.0.locations=0.3125:0.28,0.6875:0.28
au.0.primitive=ridge
au.1.locations=0.3125:0.59,0.6875:0.59
au.1.primitive=blob
au.1.couplings=3:0.8
au.2.locations=0.5:0.47
au.2.primitive=blob
au.2.couplings=5:0.3
au.3.locations=0.5:0.72
au.3.primitive=ridge
au.3.couplings=1:0.8
au.4.locations=0.5:0.88
au.4.primitive=blob
au.5.locations=0.5:0.16
au.5.primitive=blob
au.5.couplings=2:0.3
";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Primitive {
    /// Round Gaussian bump.
    Blob,
    /// Horizontally elongated Gaussian bump.
    Ridge,
}

impl Primitive {
    fn name(self) -> &'static str {
        match self {
            Primitive::Blob => "blob",
            Primitive::Ridge => "ridge",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticAUSpec {
    pub au_id: usize,
    /// Canonical positions as `(x, y)` fractions of the image side.
    pub locations: Vec<(f32, f32)>,
    pub primitive: Primitive,
    /// Directed `(target au_id, strength)` edges.
    pub couplings: Vec<(usize, f32)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Roster {
    pub aus: Vec<SyntheticAUSpec>,
    pub marginals: [f64; LEVELS],
    pub noise_std: f32,
}

impl Default for Roster {
    fn default() -> Self {
        Self::parse(DEFAULT_ROSTER, "default roster").expect("built-in roster")
    }
}

impl Roster {
    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        Self::from_entries(&config::parse_kv(text, origin)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    fn from_entries(entries: &[Entry]) -> Result<Self> {
        let bad = |e: &Entry, m: &str| Error::Validation(format!("line {}: {}: {m}", e.line, e.key));
        let mut marginals = DEFAULT_MARGINALS;
        let mut noise_std = DEFAULT_NOISE_STD;
        let mut aus: Vec<SyntheticAUSpec> = Vec::new();
        for e in entries {
            match e.key.as_str() {
                "marginals" => {
                    let v: Vec<f64> = config::parse_list(&e.key, &e.value)?;
                    marginals = v.try_into().map_err(|_| bad(e, "expected six values"))?;
                }
                "noise_std" => noise_std = config::parse_value(&e.key, &e.value)?,
                key => {
                    let mut parts = key.splitn(3, '.');
                    let (Some("au"), Some(id), Some(field)) = (parts.next(), parts.next(), parts.next())
                    else {
                        return Err(bad(e, "unknown key"));
                    };
                    let id: usize = id.parse().map_err(|_| bad(e, "AU id is not an integer"))?;
                    let at = match aus.iter().position(|a| a.au_id == id) {
                        Some(i) => i,
                        None => {
                            aus.push(SyntheticAUSpec {
                                au_id: id,
                                locations: Vec::new(),
                                primitive: Primitive::Blob,
                                couplings: Vec::new(),
                            });
                            aus.len() - 1
                        }
                    };
                    let au = &mut aus[at];
                    match field {
                        "locations" => {
                            au.locations = e
                                .value
                                .split(',')
                                .map(|p| {
                                    let (x, y) = p.split_once(':').ok_or_else(|| bad(e, "expected x:y"))?;
                                    Ok((config::parse_value(key, x.trim())?, config::parse_value(key, y.trim())?))
                                })
                                .collect::<Result<_>>()?;
                        }
                        "primitive" => {
                            au.primitive = match e.value.as_str() {
                                "blob" => Primitive::Blob,
                                "ridge" => Primitive::Ridge,
                                _ => return Err(bad(e, "expected blob or ridge")),
                            }
                        }
                        "couplings" => {
                            au.couplings = e
                                .value
                                .split(',')
                                .filter(|p| !p.trim().is_empty())
                                .map(|p| {
                                    let (t, s) = p.split_once(':').ok_or_else(|| bad(e, "expected id:strength"))?;
                                    Ok((config::parse_value(key, t.trim())?, config::parse_value(key, s.trim())?))
                                })
                                .collect::<Result<_>>()?;
                        }
                        _ => return Err(bad(e, "unknown AU field")),
                    }
                }
            }
        }
        aus.sort_by_key(|a| a.au_id);
        let roster = Self {
            aus,
            marginals,
            noise_std,
        };
        roster.validate()?;
        Ok(roster)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Validation(m));
        if self.aus.is_empty() {
            return fail("roster has no AUs".into());
        }
        let ids: BTreeSet<usize> = self.aus.iter().map(|a| a.au_id).collect();
        if ids.len() != self.aus.len() {
            return fail("duplicate AU ids".into());
        }
        let total: f64 = self.marginals.iter().sum();
        if self.marginals.iter().any(|&p| !(p >= 0.0)) || (total - 1.0).abs() > 1e-6 {
            return fail(format!("marginals must be non-negative and sum to 1, got {total}"));
        }
        if !(self.noise_std >= 0.0) {
            return fail(format!("noise_std must be non-negative, got {}", self.noise_std));
        }
        for a in &self.aus {
            if a.locations.is_empty() || a.locations.len() > 2 {
                return fail(format!("AU {} needs one or two locations", a.au_id));
            }
            let margin = 0.1;
            if a
                .locations
                .iter()
                .any(|&(x, y)| !(margin..=1.0 - margin).contains(&x) || !(margin..=1.0 - margin).contains(&y))
            {
                return fail(format!("AU {} location outside [0.1, 0.9]", a.au_id));
            }
            for &(t, s) in &a.couplings {
                if t == a.au_id {
                    return fail(format!("AU {} is coupled to itself", a.au_id));
                }
                if !ids.contains(&t) {
                    return fail(format!("AU {} is coupled to unknown AU {t}", a.au_id));
                }
                if !(0.0..=1.0).contains(&s) {
                    return fail(format!("AU {} coupling strength {s} outside [0, 1]", a.au_id));
                }
            }
        }
        Ok(())
    }

    /// Canonical text form; the spec hash is taken over this.
    pub fn render(&self) -> String {
        let mut s = String::new();
        writeln!(s, "marginals={}", config::join_list(&self.marginals)).unwrap();
        writeln!(s, "noise_std={}", self.noise_std).unwrap();
        for a in &self.aus {
            let locs: Vec<String> = a.locations.iter().map(|(x, y)| format!("{x}:{y}")).collect();
            writeln!(s, "au.{}.locations={}", a.au_id, locs.join(",")).unwrap();
            writeln!(s, "au.{}.primitive={}", a.au_id, a.primitive.name()).unwrap();
            if !a.couplings.is_empty() {
                let c: Vec<String> = a.couplings.iter().map(|(t, w)| format!("{t}:{w}")).collect();
                writeln!(s, "au.{}.couplings={}", a.au_id, c.join(",")).unwrap();
            }
        }
        s
    }

    pub fn spec_hash(&self) -> String {
        let digest = Sha256::digest(self.render().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Total number of heatmaps (one per AU location).
    pub fn num_maps(&self) -> usize {
        self.aus.iter().map(|a| a.locations.len()).sum()
    }

    pub fn au_ids(&self) -> Vec<usize> {
        self.aus.iter().map(|a| a.au_id).collect()
    }

    pub fn with_noise(mut self, noise_std: f32) -> Self {
        self.noise_std = noise_std;
        self
    }
}

fn draw_level<R: Rng>(marginals: &[f64; LEVELS], rng: &mut R) -> u8 {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (level, &p) in marginals.iter().enumerate() {
        acc += p;
        if u < acc {
            return level as u8;
        }
    }
    MAX_INTENSITY
}

/// Independent base levels, then one coupling pass driven by the base levels.
pub fn sample_intensities<R: Rng>(roster: &Roster, rng: &mut R) -> Vec<u8> {
    let base: Vec<u8> = roster.aus.iter().map(|_| draw_level(&roster.marginals, rng)).collect();
    let mut levels = base.clone();
    for (a, spec) in roster.aus.iter().enumerate() {
        if base[a] < TRIGGER_LEVEL {
            continue;
        }
        for &(target, strength) in &spec.couplings {
            let b = roster.aus.iter().position(|s| s.au_id == target).expect("validated");
            if rng.random::<f32>() < strength {
                let draw = rng.random_range(ACTIVATED_FLOOR..=MAX_INTENSITY);
                levels[b] = levels[b].max(draw);
            }
        }
    }
    levels
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// `1 × H × W`, values `k / 255`.
    pub image: Tensor,
    /// One entry per roster AU, locations in image pixels.
    pub annotations: Vec<AUAnnotation>,
    pub seed: u64,
}

impl Sample {
    /// Annotations with locations rescaled to an `extent × extent` heatmap.
    pub fn annotations_at(&self, extent: usize) -> Vec<AUAnnotation> {
        let factor = extent as f32 / self.image.shape()[2] as f32;
        self.annotations
            .iter()
            .map(|a| AUAnnotation::new(a.au_id, a.locations.iter().map(|l| l.scaled(factor)).collect(), a.intensity))
            .collect()
    }
}

fn add_bump(img: &mut [f32], size: usize, cx: f32, cy: f32, sx: f32, sy: f32, amp: f32) {
    for y in 0..size {
        let dy = (y as f32 - cy) / sy;
        for x in 0..size {
            let dx = (x as f32 - cx) / sx;
            img[y * size + x] += amp * (-0.5 * (dx * dx + dy * dy)).exp();
        }
    }
}

fn template(size: usize, shift: (i32, i32)) -> Vec<f32> {
    let s = size as f32;
    let (cx, cy) = (0.5 * s + shift.0 as f32, 0.52 * s + shift.1 as f32);
    let (rx, ry) = (0.40 * s, 0.46 * s);
    let mut img = vec![0.08f32; size * size];
    for y in 0..size {
        for x in 0..size {
            let (dx, dy) = ((x as f32 - cx) / rx, (y as f32 - cy) / ry);
            if dx * dx + dy * dy <= 1.0 {
                img[y * size + x] = 0.40;
            }
        }
    }
    // eyes and mouth
    let unit = s / 64.0;
    for ex in [0.34, 0.66] {
        add_bump(&mut img, size, ex * s + shift.0 as f32, 0.40 * s + shift.1 as f32, 2.5 * unit, 1.5 * unit, -0.25);
    }
    add_bump(&mut img, size, cx, 0.80 * s + shift.1 as f32, 5.0 * unit, 1.0 * unit, -0.2);
    img
}

/// Pixel position of a canonical location after the template shift.
fn site(size: usize, (fx, fy): (f32, f32), shift: (i32, i32)) -> Location {
    let s = size as f32;
    Location::new((fx * s).round() + shift.0 as f32, (fy * s).round() + shift.1 as f32)
}

/// Draw the face, add one primitive per AU location and apply pixel noise.
pub fn render<R: Rng>(intensities: &[u8], roster: &Roster, size: usize, rng: &mut R) -> Result<(Tensor, Vec<AUAnnotation>)> {
    if size < 32 {
        return Err(Error::Config(format!("image size must be at least 32, got {size}")));
    }
    if intensities.len() != roster.aus.len() {
        return Err(Error::Validation(format!(
            "{} intensities for {} AUs",
            intensities.len(),
            roster.aus.len()
        )));
    }
    let jitter = ((MAX_JITTER as f32) * size as f32 / 64.0).round() as i32;
    let shift = (rng.random_range(-jitter..=jitter), rng.random_range(-jitter..=jitter));
    let mut img = template(size, shift);
    let unit = size as f32 / 64.0;
    let mut annotations = Vec::with_capacity(roster.aus.len());
    for (spec, &level) in roster.aus.iter().zip(intensities) {
        let locations: Vec<Location> = spec.locations.iter().map(|&l| site(size, l, shift)).collect();
        let amp = 0.5 * level as f32 / MAX_INTENSITY as f32;
        if level > 0 {
            let (sx, sy) = match spec.primitive {
                Primitive::Blob => (2.0 * unit, 2.0 * unit),
                Primitive::Ridge => (3.5 * unit, 1.5 * unit),
            };
            for l in &locations {
                add_bump(&mut img, size, l.x, l.y, sx, sy, amp);
            }
        }
        annotations.push(AUAnnotation::new(spec.au_id, locations, level));
    }
    if roster.noise_std > 0.0 {
        let normal = Normal::new(0.0f32, roster.noise_std).map_err(|e| Error::Config(e.to_string()))?;
        for v in &mut img {
            *v += normal.sample(rng);
        }
    }
    for v in &mut img {
        *v = quantize(*v) as f32 / 255.0;
    }
    Ok((Tensor::new(&[1, size, size], img)?, annotations))
}

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed of sample `index` in `split`; train and test streams never collide.
pub fn sample_seed(dataset_seed: u64, split: Split, index: usize) -> u64 {
    let tag = match split {
        Split::Train => 0,
        Split::Test => 1u64 << 63,
    };
    dataset_seed ^ splitmix64(tag | index as u64)
}

pub fn generate_sample(roster: &Roster, size: usize, seed: u64) -> Result<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let levels = sample_intensities(roster, &mut rng);
    let (image, annotations) = render(&levels, roster, size, &mut rng)?;
    Ok(Sample {
        image,
        annotations,
        seed,
    })
}

pub fn generate_split(roster: &Roster, size: usize, seed: u64, split: Split, count: usize) -> Result<Vec<Sample>> {
    (0..count)
        .map(|i| generate_sample(roster, size, sample_seed(seed, split, i)))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub roster: Roster,
    pub image_size: usize,
    pub seed: u64,
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GenerateOptions {
    pub n_train: usize,
    pub n_test: usize,
    pub image_size: usize,
    pub seed: u64,
}

impl Dataset {
    pub fn generate(roster: Roster, opts: GenerateOptions) -> Result<Self> {
        roster.validate()?;
        Ok(Self {
            train: generate_split(&roster, opts.image_size, opts.seed, Split::Train, opts.n_train)?,
            test: generate_split(&roster, opts.image_size, opts.seed, Split::Test, opts.n_test)?,
            roster,
            image_size: opts.image_size,
            seed: opts.seed,
        })
    }

    pub fn split(&self, split: Split) -> &[Sample] {
        match split {
            Split::Train => &self.train,
            Split::Test => &self.test,
        }
    }

    /// Write `roster.txt`, `manifest.txt` and per split a directory of PGM
    /// images plus `annotations.csv`. Returns the written paths.
    pub fn write(&self, dir: &Path, spec_source: &str) -> Result<Vec<PathBuf>> {
        let mut written = Vec::new();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for split in [Split::Train, Split::Test] {
            let sub = dir.join(split.name());
            fs::create_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
            let mut csv = String::from("image_id,au_id,loc_x,loc_y,intensity\n");
            for (i, s) in self.split(split).iter().enumerate() {
                let path = sub.join(format!("{i:06}.pgm"));
                let px: Vec<u8> = s.image.data().iter().map(|&v| quantize(v)).collect();
                pgm::write_pgm(&path, self.image_size, self.image_size, &px)?;
                written.push(path);
                for a in &s.annotations {
                    for l in &a.locations {
                        writeln!(csv, "{i},{},{},{},{}", a.au_id, l.x, l.y, a.intensity).unwrap();
                    }
                }
            }
            let path = sub.join("annotations.csv");
            fs::write(&path, csv).map_err(|e| Error::io(&path, e))?;
            written.push(path);
        }
        let roster_path = dir.join("roster.txt");
        fs::write(&roster_path, self.roster.render()).map_err(|e| Error::io(&roster_path, e))?;
        written.push(roster_path);
        let manifest = config::render_kv([
            ("format", "scch-dataset-1".to_string()),
            ("seed", self.seed.to_string()),
            ("image_size", self.image_size.to_string()),
            ("num_aus", self.roster.aus.len().to_string()),
            ("train.count", self.train.len().to_string()),
            ("test.count", self.test.len().to_string()),
            ("total", (self.train.len() + self.test.len()).to_string()),
            ("spec_source", spec_source.to_string()),
            ("spec_hash", self.roster.spec_hash()),
        ]);
        let path = dir.join("manifest.txt");
        fs::write(&path, manifest).map_err(|e| Error::io(&path, e))?;
        written.push(path);
        Ok(written)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let mpath = dir.join("manifest.txt");
        let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
        let origin = mpath.display().to_string();
        let entries = config::parse_kv(&text, &origin)?;
        let get = |k: &str| {
            entries
                .iter()
                .find(|e| e.key == k)
                .map(|e| e.value.clone())
                .ok_or_else(|| Error::parse(&origin, format!("missing {k}")))
        };
        let seed: u64 = config::parse_value("seed", &get("seed")?)?;
        let image_size: usize = config::parse_value("image_size", &get("image_size")?)?;
        let roster = Roster::load(&dir.join("roster.txt"))?;
        if roster.spec_hash() != get("spec_hash")? {
            return Err(Error::parse(&origin, "roster.txt does not match spec_hash"));
        }
        let mut splits = Vec::new();
        for split in [Split::Train, Split::Test] {
            let count: usize = config::parse_value("count", &get(&format!("{}.count", split.name()))?)?;
            splits.push(load_split(dir, &roster, split, count, image_size, seed)?);
        }
        let test = splits.pop().unwrap();
        let train = splits.pop().unwrap();
        Ok(Self {
            roster,
            image_size,
            seed,
            train,
            test,
        })
    }
}

fn load_split(dir: &Path, roster: &Roster, split: Split, count: usize, size: usize, seed: u64) -> Result<Vec<Sample>> {
    let sub = dir.join(split.name());
    let csv_path = sub.join("annotations.csv");
    let text = fs::read_to_string(&csv_path).map_err(|e| Error::io(&csv_path, e))?;
    let origin = csv_path.display().to_string();
    let mut per_image: Vec<Vec<AUAnnotation>> = vec![Vec::new(); count];
    for (n, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').map(str::trim).collect();
        let err = || Error::parse(&origin, format!("line {}: malformed row {line:?}", n + 1));
        if f.len() != 5 {
            return Err(err());
        }
        let image: usize = f[0].parse().map_err(|_| err())?;
        let au_id: usize = f[1].parse().map_err(|_| err())?;
        let loc = Location::new(f[2].parse().map_err(|_| err())?, f[3].parse().map_err(|_| err())?);
        let intensity: u8 = f[4].parse().map_err(|_| err())?;
        let anns = per_image.get_mut(image).ok_or_else(err)?;
        match anns.last_mut() {
            Some(a) if a.au_id == au_id => a.locations.push(loc),
            _ => anns.push(AUAnnotation::new(au_id, vec![loc], intensity)),
        }
    }
    let ids = roster.au_ids();
    let mut out = Vec::with_capacity(count);
    for (i, annotations) in per_image.into_iter().enumerate() {
        let got: Vec<usize> = annotations.iter().map(|a| a.au_id).collect();
        if got != ids {
            return Err(Error::parse(&origin, format!("image {i}: AUs {got:?}, roster has {ids:?}")));
        }
        let path = sub.join(format!("{i:06}.pgm"));
        let (w, h, px) = pgm::read_pgm(&path)?;
        if w != size || h != size {
            return Err(Error::parse(path.display().to_string(), format!("{w}x{h}, expected {size}x{size}")));
        }
        out.push(Sample {
            image: Tensor::new(&[1, size, size], px.iter().map(|&p| p as f32 / 255.0).collect())?,
            annotations,
            seed: sample_seed(seed, split, i),
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_roster_shape() {
        let r = Roster::default();
        assert_eq!(r.aus.len(), 6);
        assert_eq!(r.aus.iter().filter(|a| a.locations.len() == 2).count(), 2);
        assert_eq!(r.num_maps(), 8);
        assert_eq!(Roster::parse(&r.render(), "again").unwrap(), r);
    }

    #[test]
    fn invalid_rosters() {
        for text in [
            "au.0.locations=0.5:0.5\nau.0.couplings=0:0.5\n",
            "au.0.locations=0.5:0.5\nau.0.couplings=1:0.5\n",
            "au.0.locations=0.5:0.5\nau.1.locations=0.5:0.4\nau.0.couplings=1:1.5\n",
            "au.0.locations=0.5:0.5,0.4:0.4,0.3:0.3\n",
            "marginals=0.5,0.5,0.5,0,0,0\nau.0.locations=0.5:0.5\n",
            "colour=blue\n",
        ] {
            assert!(matches!(Roster::parse(text, "t"), Err(Error::Validation(_))), "{text}");
        }
    }

    #[test]
    fn forced_activation() {
        let r = Roster::parse(
            "au.0.locations=0.3:0.3\nau.0.couplings=1:1.0\nau.1.locations=0.6:0.6\n",
            "t",
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut hits = 0;
        for _ in 0..20_000 {
            let l = sample_intensities(&r, &mut rng);
            if l[0] >= 4 {
                hits += 1;
                assert!(l[1] >= 2);
            }
        }
        assert!(hits > 500);
    }

    #[test]
    fn seeds_are_disjoint_and_stable() {
        let a = sample_seed(7, Split::Train, 3);
        assert_eq!(a, sample_seed(7, Split::Train, 3));
        assert_ne!(a, sample_seed(7, Split::Test, 3));
        let r = Roster::default();
        assert_eq!(generate_sample(&r, 64, a).unwrap(), generate_sample(&r, 64, a).unwrap());
    }

    #[test]
    fn zero_levels_give_template_only() {
        let r = Roster::default().with_noise(0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (img, anns) = render(&[0; 6], &r, 64, &mut rng).unwrap();
        assert!(anns.iter().all(|a| a.intensity == 0));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let shift = (rng.random_range(-2..=2), rng.random_range(-2..=2));
        let expect: Vec<f32> = template(64, shift).iter().map(|&v| quantize(v) as f32 / 255.0).collect();
        assert_eq!(img.data(), &expect[..]);
    }

    #[test]
    fn image_size_guard() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(render(&[0; 6], &Roster::default(), 16, &mut rng).is_err());
    }
}
