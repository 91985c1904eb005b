//! Encoder / deconvolution / SCC heatmap regressor.
//!
//! A stack of stride-2 convolutions (ReLU) shrinks the image, `DL`
//! stride-2 transposed convolutions (ReLU) grow it back, each followed by an
//! SCC layer when enabled, and a 1×1 projection maps the last `C` feature
//! channels to `N` heatmaps: `h_i = Σ_j w_ji f_j + b_i`.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{self, Entry};
use crate::error::{Error, Result};
use crate::heatmap::{PeakMode, DEFAULT_SIGMA};
use crate::scc::{self, EdgeVariant, FeatureGraph, SccConfig, SccLayerParams, SccMode};
use crate::tensor::{read_tensor_from, write_tensor_to, Parameter, Tape, Tensor, Var};

pub const CHECKPOINT_MAGIC: &str = "SCCH1";

/// Largest flattened channel length that gets a dense SCC by default; 0
/// leaves every level on `scc.mode`.
pub const DEFAULT_DENSE_MAX: usize = 0;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub input_size: usize,
    pub input_channels: usize,
    pub encoder_channels: Vec<usize>,
    pub encoder_kernel: usize,
    pub deconv_layers: usize,
    pub deconv_channels: usize,
    pub deconv_kernel: usize,
    pub scc_enabled: bool,
    pub scc: SccConfig,
    /// SCC levels with at most this many positions per channel use dense
    /// edge functions; larger levels use `scc.mode`.
    pub scc_dense_max: usize,
    pub num_maps: usize,
    pub sigma: f32,
    pub peak_mode: PeakMode,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_size: 64,
            input_channels: 1,
            encoder_channels: vec![16, 32, 64],
            encoder_kernel: 4,
            deconv_layers: 3,
            deconv_channels: 32,
            deconv_kernel: 4,
            scc_enabled: true,
            scc: SccConfig::default(),
            scc_dense_max: DEFAULT_DENSE_MAX,
            num_maps: 8,
            sigma: DEFAULT_SIGMA,
            peak_mode: PeakMode::Calibrated,
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn bottleneck_size(&self) -> usize {
        self.input_size >> self.encoder_channels.len()
    }

    pub fn heatmap_size(&self) -> usize {
        self.bottleneck_size() << self.deconv_layers
    }

    /// Spatial extent seen by each SCC layer, in order.
    pub fn scc_sizes(&self) -> Vec<usize> {
        (1..=self.deconv_layers)
            .map(|d| self.bottleneck_size() << d)
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.input_channels == 0 || self.num_maps == 0 || self.deconv_channels == 0 {
            return fail("channel and map counts must be positive".into());
        }
        if self.encoder_channels.is_empty() || self.encoder_channels.contains(&0) {
            return fail("encoder_channels must list positive channel counts".into());
        }
        let down = 1usize << self.encoder_channels.len();
        if self.input_size == 0 || !self.input_size.is_multiple_of(down) {
            return fail(format!(
                "input_size {} is not divisible by 2^{}",
                self.input_size,
                self.encoder_channels.len()
            ));
        }
        if !(2..=3).contains(&self.deconv_layers) {
            return fail(format!("deconv_layers must be 2 or 3, got {}", self.deconv_layers));
        }
        let hm = self.heatmap_size();
        if hm > self.input_size || !self.input_size.is_multiple_of(hm) {
            return fail(format!(
                "heatmap size {hm} does not divide input size {}",
                self.input_size
            ));
        }
        for k in [self.encoder_kernel, self.deconv_kernel] {
            if k != 2 && k != 4 {
                return fail(format!("kernel size must be 2 or 4, got {k}"));
            }
        }
        if !(self.sigma > 0.0) {
            return fail(format!("sigma must be positive, got {}", self.sigma));
        }
        if self.scc_enabled {
            if self.scc.k == 0 || self.scc.k >= self.deconv_channels {
                return fail(format!(
                    "scc_k={} must lie in 1..{} (deconv_channels)",
                    self.scc.k, self.deconv_channels
                ));
            }
            for m in self.scc_sizes() {
                let l = m * m;
                let scc = self.scc_at(m);
                let f = scc.filters_for(l);
                let ok = match scc.mode {
                    SccMode::Dense => f == l,
                    SccMode::Pointwise => f == 1,
                };
                if !ok {
                    return fail(format!(
                        "{} SCC with K={f} cannot preserve {m}×{m} maps",
                        scc.mode
                    ));
                }
            }
        }
        Ok(())
    }

    /// Apply one config entry; `Ok(false)` if the key is not a model key.
    /// SCC settings for a level of `m×m` maps.
    pub fn scc_at(&self, m: usize) -> SccConfig {
        let mut c = self.scc;
        if m * m <= self.scc_dense_max {
            c.mode = SccMode::Dense;
        }
        c
    }

    pub fn apply(&mut self, key: &str, value: &str) -> Result<bool> {
        use config::{parse_bool, parse_list, parse_value};
        match key {
            "input_size" => self.input_size = parse_value(key, value)?,
            "input_channels" => self.input_channels = parse_value(key, value)?,
            "encoder_channels" => self.encoder_channels = parse_list(key, value)?,
            "encoder_kernel" => self.encoder_kernel = parse_value(key, value)?,
            "deconv_layers" => self.deconv_layers = parse_value(key, value)?,
            "deconv_channels" => self.deconv_channels = parse_value(key, value)?,
            "deconv_kernel" => self.deconv_kernel = parse_value(key, value)?,
            "scc" => self.scc_enabled = parse_bool(key, value)?,
            "scc_mode" => self.scc.mode = value.parse()?,
            "scc_dense_max" => self.scc_dense_max = parse_value(key, value)?,
            "scc_k" => self.scc.k = parse_value(key, value)?,
            "scc_filters" => {
                self.scc.filters = match value {
                    "auto" => None,
                    v => Some(parse_value(key, v)?),
                }
            }
            "edge_variant" => self.scc.variant = value.parse::<EdgeVariant>()?,
            "num_maps" => self.num_maps = parse_value(key, value)?,
            "sigma" => self.sigma = parse_value(key, value)?,
            "peak_mode" => {
                self.peak_mode = match value {
                    "calibrated" => PeakMode::Calibrated,
                    "raw" => PeakMode::Raw,
                    _ => return Err(Error::Config(format!("peak_mode: unknown {value:?}"))),
                }
            }
            "init_seed" => self.init_seed = parse_value(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let p = |k: &str, v: String| (k.to_string(), v);
        vec![
            p("input_size", self.input_size.to_string()),
            p("input_channels", self.input_channels.to_string()),
            p("encoder_channels", config::join_list(&self.encoder_channels)),
            p("encoder_kernel", self.encoder_kernel.to_string()),
            p("deconv_layers", self.deconv_layers.to_string()),
            p("deconv_channels", self.deconv_channels.to_string()),
            p("deconv_kernel", self.deconv_kernel.to_string()),
            p("scc", if self.scc_enabled { "on" } else { "off" }.to_string()),
            p("scc_mode", self.scc.mode.to_string()),
            p("scc_dense_max", self.scc_dense_max.to_string()),
            p("scc_k", self.scc.k.to_string()),
            p(
                "scc_filters",
                self.scc.filters.map_or("auto".to_string(), |f| f.to_string()),
            ),
            p("edge_variant", self.scc.variant.to_string()),
            p("num_maps", self.num_maps.to_string()),
            p("sigma", self.sigma.to_string()),
            p(
                "peak_mode",
                match self.peak_mode {
                    PeakMode::Calibrated => "calibrated",
                    PeakMode::Raw => "raw",
                }
                .to_string(),
            ),
            p("init_seed", self.init_seed.to_string()),
        ]
    }

    pub fn from_entries(entries: &[Entry]) -> Result<Self> {
        let mut cfg = Self::default();
        for e in entries {
            if !cfg.apply(&e.key, &e.value)? {
                return Err(Error::Config(format!(
                    "line {}: unknown model key {:?}",
                    e.line, e.key
                )));
            }
        }
        Ok(cfg)
    }
}

#[derive(Debug, Clone)]
struct ConvLayer {
    weight: Parameter,
    bias: Parameter,
    stride: usize,
    pad: usize,
}

fn glorot<R: Rng>(rng: &mut R, shape: &[usize], fan_in: usize, fan_out: usize) -> Tensor {
    let bound = (6.0 / (fan_in + fan_out) as f32).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
    Tensor::new(shape, data).expect("init shape")
}

/// Stride-2 geometry for kernel 2 (pad 0) or kernel 4 (pad 1).
fn pad_for(kernel: usize) -> usize {
    (kernel - 2) / 2
}

/// The 1×1 projection as a `C × N` weight matrix plus `N` biases.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionWeights {
    pub weights: Tensor,
    pub bias: Tensor,
}

/// One row of the pattern-weight table.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PatternWeight {
    pub channel: usize,
    pub map: usize,
    pub weight: f32,
}

#[derive(Debug, Clone)]
pub struct Network {
    config: ModelConfig,
    encoder: Vec<ConvLayer>,
    deconvs: Vec<ConvLayer>,
    scc: Vec<SccLayerParams>,
    projection: ConvLayer,
}

/// Everything recorded by one forward pass.
pub struct ForwardPass<'t> {
    /// `B × N × H × W`.
    pub heatmaps: Var<'t>,
    /// Last feature stack fed to the projection (`B × C × H × W`).
    pub features: Var<'t>,
    /// `graphs[layer][sample]`; empty when SCC is disabled.
    pub graphs: Vec<Vec<FeatureGraph>>,
    bindings: Vec<Var<'t>>,
}

impl Network {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let mut encoder = Vec::new();
        let mut c_in = config.input_channels;
        let ek = config.encoder_kernel;
        for (i, &c_out) in config.encoder_channels.iter().enumerate() {
            encoder.push(ConvLayer {
                weight: Parameter::new(
                    format!("encoder.{i}.weight"),
                    glorot(&mut rng, &[c_out, c_in, ek, ek], c_in * ek * ek, c_out * ek * ek),
                ),
                bias: Parameter::new(format!("encoder.{i}.bias"), Tensor::zeros(&[c_out])),
                stride: 2,
                pad: pad_for(ek),
            });
            c_in = c_out;
        }
        let dk = config.deconv_kernel;
        let c = config.deconv_channels;
        // a stride-2 transposed conv feeds each output pixel from (k/2)² taps per input channel
        let taps = (dk / 2) * (dk / 2);
        let mut deconvs = Vec::new();
        let mut scc_layers = Vec::new();
        for (i, m) in config.scc_sizes().into_iter().enumerate() {
            deconvs.push(ConvLayer {
                weight: Parameter::new(
                    format!("deconv.{i}.weight"),
                    glorot(&mut rng, &[c_in, c, dk, dk], c_in * taps, c * taps),
                ),
                bias: Parameter::new(format!("deconv.{i}.bias"), Tensor::zeros(&[c])),
                stride: 2,
                pad: pad_for(dk),
            });
            c_in = c;
            if config.scc_enabled {
                scc_layers.push(SccLayerParams::init(
                    &format!("scc.{i}"),
                    config.scc_at(m),
                    m * m,
                    &mut rng,
                )?);
            }
        }
        let n = config.num_maps;
        // zero, so an untrained network predicts empty heatmaps and the first
        // updates do not drive the hidden units below zero
        let projection = ConvLayer {
            weight: Parameter::new("projection.weight", Tensor::zeros(&[n, c, 1, 1])),
            bias: Parameter::new("projection.bias", Tensor::zeros(&[n])),
            stride: 1,
            pad: 0,
        };
        Ok(Self {
            config,
            encoder,
            deconvs,
            scc: scc_layers,
            projection,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// All parameters in a fixed order.
    pub fn params(&self) -> Vec<&Parameter> {
        let mut v = Vec::new();
        for l in &self.encoder {
            v.push(&l.weight);
            v.push(&l.bias);
        }
        for (i, l) in self.deconvs.iter().enumerate() {
            v.push(&l.weight);
            v.push(&l.bias);
            if let Some(s) = self.scc.get(i) {
                v.push(&s.phi);
                v.push(&s.omega);
            }
        }
        v.push(&self.projection.weight);
        v.push(&self.projection.bias);
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut v = Vec::new();
        let mut scc = self.scc.iter_mut();
        for l in &mut self.encoder {
            v.push(&mut l.weight);
            v.push(&mut l.bias);
        }
        for l in &mut self.deconvs {
            v.push(&mut l.weight);
            v.push(&mut l.bias);
            if let Some(s) = scc.next() {
                v.push(&mut s.phi);
                v.push(&mut s.omega);
            }
        }
        v.push(&mut self.projection.weight);
        v.push(&mut self.projection.bias);
        v
    }

    pub fn num_parameters(&self) -> usize {
        self.params().iter().map(|p| p.value.numel()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    /// Record a forward pass. With `trainable`, every parameter becomes a
    /// differentiable tape variable. `frozen` overrides the per-layer,
    /// per-sample channel graphs.
    pub fn forward<'t>(
        &self,
        tape: &'t Tape,
        images: Var<'t>,
        trainable: bool,
        frozen: Option<&[Vec<FeatureGraph>]>,
    ) -> Result<ForwardPass<'t>> {
        let s = images.shape();
        let cfg = &self.config;
        if s.len() != 4 || s[1] != cfg.input_channels || s[2] != cfg.input_size || s[3] != cfg.input_size {
            return Err(Error::shape(
                "Network::forward",
                format!(
                    "expected B×{}×{}×{}, got {s:?}",
                    cfg.input_channels, cfg.input_size, cfg.input_size
                ),
            ));
        }
        if let Some(f) = frozen {
            if f.len() != self.scc.len() {
                return Err(Error::Config(format!(
                    "{} frozen graph layers for {} SCC layers",
                    f.len(),
                    self.scc.len()
                )));
            }
        }
        let bindings: Vec<Var<'t>> = self
            .params()
            .into_iter()
            .map(|p| tape.leaf(p.value.clone(), trainable))
            .collect();
        let mut next = bindings.iter().copied();
        let mut take = || next.next().expect("binding order");

        let mut x = images;
        for l in &self.encoder {
            let (w, b) = (take(), take());
            x = x.conv2d(w, b, l.stride, l.pad)?.relu();
        }
        let mut graphs = Vec::new();
        for (i, l) in self.deconvs.iter().enumerate() {
            let (w, b) = (take(), take());
            x = x.deconv2d(w, b, l.stride, l.pad)?.relu();
            if let Some(layer) = self.scc.get(i) {
                let (phi, omega) = (take(), take());
                let out = scc::scc_forward_batch(
                    x,
                    phi,
                    omega,
                    &layer.config,
                    frozen.map(|f| f[i].as_slice()),
                )?;
                x = out.output;
                graphs.push(out.graphs);
            }
        }
        let features = x;
        let (w, b) = (take(), take());
        let heatmaps = features.conv2d(w, b, 1, 0)?;
        Ok(ForwardPass {
            heatmaps,
            features,
            graphs,
            bindings,
        })
    }

    /// Add the tape gradients of a trainable pass into the parameters.
    pub fn accumulate_grads(&mut self, pass: &ForwardPass<'_>) {
        let grads: Vec<Option<Tensor>> = pass.bindings.iter().map(|v| v.grad()).collect();
        for (p, g) in self.params_mut().into_iter().zip(grads) {
            if let Some(g) = g {
                p.accumulate_grad(g.data());
            }
        }
    }

    /// Heatmaps (`B×N×H×W`) for a batch of images, without gradients.
    pub fn predict(&self, images: Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let x = tape.constant(images);
        let pass = self.forward(&tape, x, false, None)?;
        let out = pass.heatmaps.value();
        Ok((*out).clone())
    }

    pub fn projection_weights(&self) -> ProjectionWeights {
        let w = &self.projection.weight.value;
        let (n, c) = (w.shape()[0], w.shape()[1]);
        let mut t = vec![0.0; c * n];
        for i in 0..n {
            for j in 0..c {
                t[j * n + i] = w.data()[i * c + j];
            }
        }
        ProjectionWeights {
            weights: Tensor::new(&[c, n], t).expect("C×N"),
            bias: self.projection.bias.value.clone(),
        }
    }

    /// The `C × N` projection weights as rows sorted by channel, then map.
    pub fn dump_pattern_weights(&self) -> Vec<PatternWeight> {
        let pw = self.projection_weights();
        let (c, n) = (pw.weights.shape()[0], pw.weights.shape()[1]);
        (0..c)
            .flat_map(|j| (0..n).map(move |i| (j, i)))
            .map(|(j, i)| PatternWeight {
                channel: j,
                map: i,
                weight: pw.weights.data()[j * n + i],
            })
            .collect()
    }

    /// Feature maps `C × H × W` entering the projection for one image
    /// (`C_in × H × W`), together with the graphs built on the way.
    pub fn channel_responses(&self, image: &Tensor) -> Result<(Tensor, Vec<FeatureGraph>)> {
        let s = image.shape();
        if s.len() != 3 {
            return Err(Error::shape("channel_responses", format!("expected C×H×W, got {s:?}")));
        }
        let tape = Tape::new();
        let x = tape.constant(image.reshaped(&[1, s[0], s[1], s[2]])?);
        let pass = self.forward(&tape, x, false, None)?;
        let f = pass.features.value();
        let fs = f.shape();
        let graphs = pass.graphs.into_iter().map(|mut g| g.remove(0)).collect();
        Ok((f.reshaped(&fs[1..])?, graphs))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        self.write_to(&mut w)
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(path, e))
    }

    /// `SCCH1` line, `key=value` header, blank line, then for each parameter
    /// a u32 LE name length, the UTF-8 name and a TNSR block.
    pub fn write_to<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        writeln!(w, "{CHECKPOINT_MAGIC}")?;
        writeln!(w, "# model configuration")?;
        w.write_all(config::render_kv(self.config.to_pairs()).as_bytes())?;
        writeln!(w, "parameters={}", self.params().len())?;
        writeln!(w)?;
        for p in self.params() {
            w.write_all(&(p.name.len() as u32).to_le_bytes())?;
            w.write_all(p.name.as_bytes())?;
            write_tensor_to(w, &p.value)?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(&mut BufReader::new(file), &path.display().to_string())
    }

    pub fn read_from<R: BufRead>(r: &mut R, origin: &str) -> Result<Self> {
        let io = |e: std::io::Error| Error::io(origin, e);
        let mut line = String::new();
        r.read_line(&mut line).map_err(io)?;
        if line.trim_end() != CHECKPOINT_MAGIC {
            return Err(Error::parse(origin, format!("not a checkpoint (magic {:?})", line.trim_end())));
        }
        let mut header = String::new();
        loop {
            line.clear();
            if r.read_line(&mut line).map_err(io)? == 0 {
                return Err(Error::parse(origin, "header not terminated"));
            }
            if line.trim().is_empty() {
                break;
            }
            header.push_str(&line);
        }
        let mut entries = config::parse_kv(&header, origin)?;
        let count_at = entries
            .iter()
            .position(|e| e.key == "parameters")
            .ok_or_else(|| Error::parse(origin, "missing parameters= line"))?;
        let count: usize = config::parse_value("parameters", &entries.remove(count_at).value)?;
        let config = ModelConfig::from_entries(&entries)?;
        let mut net = Network::new(config)?;
        if count != net.params().len() {
            return Err(Error::parse(
                origin,
                format!("checkpoint holds {count} tensors, model needs {}", net.params().len()),
            ));
        }
        for p in net.params_mut() {
            let mut len = [0u8; 4];
            r.read_exact(&mut len).map_err(io)?;
            let mut name = vec![0u8; u32::from_le_bytes(len) as usize];
            r.read_exact(&mut name).map_err(io)?;
            let name = String::from_utf8(name)
                .map_err(|_| Error::parse(origin, "tensor name is not UTF-8"))?;
            if name != p.name {
                return Err(Error::parse(origin, format!("expected tensor {}, found {name}", p.name)));
            }
            let t = read_tensor_from(r, origin)?;
            if t.shape() != p.value.shape() {
                return Err(Error::parse(
                    origin,
                    format!("{name}: shape {:?}, expected {:?}", t.shape(), p.value.shape()),
                ));
            }
            p.value = t;
        }
        Ok(net)
    }
}
