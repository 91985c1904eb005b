//! Semantic correspondence convolution over feature channels.
//!
//! Each channel of an `n × M × M` feature map is a graph node carrying the
//! flattened vector `f_i ∈ R^L`, `L = M²`. Every forward pass rebuilds a
//! k-nearest-neighbour graph from squared Euclidean channel distances, then
//! computes edge features `ReLU(φ_k·f_i + ω_k·(f_j − f_i))` on each edge and
//! takes the channel-wise maximum over a node's neighbours.
//!
//! Neighbour selection is piecewise constant, so gradients flow only through
//! the selected edges. Self-loops are never selected.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Parameter, Tape, Tensor, Var};

/// How the edge function is realised.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SccMode {
    /// `φ_k, ω_k ∈ R^L`, inner products over the whole flattened channel.
    Dense,
    /// Scalar `φ_k, ω_k` applied at every spatial position.
    Pointwise,
}

/// Which terms enter the edge function.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EdgeVariant {
    /// `φ·f_i + ω·(f_j − f_i)`
    Both,
    /// `φ·f_i + ω·f_j`
    ConcatRaw,
    /// `ω·(f_j − f_i)`
    LocalOnly,
}

impl fmt::Display for SccMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SccMode::Dense => "dense",
            SccMode::Pointwise => "pointwise",
        })
    }
}

impl FromStr for SccMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dense" => Ok(SccMode::Dense),
            "pointwise" => Ok(SccMode::Pointwise),
            _ => Err(Error::Config(format!("unknown SCC mode {s:?}"))),
        }
    }
}

impl fmt::Display for EdgeVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EdgeVariant::Both => "both",
            EdgeVariant::ConcatRaw => "concat_raw",
            EdgeVariant::LocalOnly => "local_only",
        })
    }
}

impl FromStr for EdgeVariant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "both" => Ok(EdgeVariant::Both),
            "concat_raw" => Ok(EdgeVariant::ConcatRaw),
            "local_only" => Ok(EdgeVariant::LocalOnly),
            _ => Err(Error::Config(format!("unknown edge variant {s:?}"))),
        }
    }
}

impl EdgeVariant {
    pub const ALL: [EdgeVariant; 3] = [EdgeVariant::Both, EdgeVariant::ConcatRaw, EdgeVariant::LocalOnly];

    /// (coefficient of f_i, coefficient of f_j) in the ω term, and whether φ is used.
    fn omega_coeffs(self) -> (f32, f32, bool) {
        match self {
            EdgeVariant::Both => (-1.0, 1.0, true),
            EdgeVariant::ConcatRaw => (0.0, 1.0, true),
            EdgeVariant::LocalOnly => (-1.0, 1.0, false),
        }
    }
}

/// Channel k-NN graph of one SCC layer for one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureGraph {
    pub n: usize,
    pub k: usize,
    /// `n × n` squared Euclidean distances.
    pub distances: Tensor,
    /// `neighbors[i]`: the k nearest other channels, ascending distance.
    pub neighbors: Vec<Vec<usize>>,
}

/// Row-major flattening of each `M × M` channel into a length-`M²` row.
pub fn flatten_channels(features: &Tensor) -> Result<Tensor> {
    let s = features.shape();
    if s.len() != 3 || s[1] != s[2] {
        return Err(Error::shape(
            "flatten_channels",
            format!("expected n×M×M, got {s:?}"),
        ));
    }
    features.reshaped(&[s[0], s[1] * s[2]])
}

pub fn unflatten_channels(flat: &Tensor) -> Result<Tensor> {
    let s = flat.shape();
    let m = (s.get(1).copied().unwrap_or(0) as f64).sqrt() as usize;
    if s.len() != 2 || m * m != s[1] {
        return Err(Error::shape(
            "unflatten_channels",
            format!("expected n×M² rows, got {s:?}"),
        ));
    }
    flat.reshaped(&[s[0], m, m])
}

/// `D[i][j] = ‖f_i − f_j‖²`, accumulated in f64; symmetric with zero diagonal.
pub fn pairwise_sq_distances(features: &Tensor) -> Result<Tensor> {
    let s = features.shape();
    if s.len() != 2 || s[0] < 2 {
        return Err(Error::shape(
            "pairwise_sq_distances",
            format!("need n×L with n >= 2, got {s:?}"),
        ));
    }
    Ok(sq_distances_raw(features.data(), s[0], s[1]))
}

fn sq_distances_raw(data: &[f32], n: usize, l: usize) -> Tensor {
    let mut d = vec![0.0f32; n * n];
    for i in 0..n {
        let fi = &data[i * l..(i + 1) * l];
        for j in i + 1..n {
            let fj = &data[j * l..(j + 1) * l];
            let s: f64 = fi
                .iter()
                .zip(fj)
                .map(|(&a, &b)| {
                    let t = a as f64 - b as f64;
                    t * t
                })
                .sum();
            d[i * n + j] = s as f32;
            d[j * n + i] = s as f32;
        }
    }
    Tensor::new(&[n, n], d).expect("n×n")
}

/// Select each row's k smallest off-diagonal entries (ties to the lower index).
pub fn build_knn_graph(distances: &Tensor, k: usize) -> Result<FeatureGraph> {
    let s = distances.shape();
    if s.len() != 2 || s[0] != s[1] {
        return Err(Error::shape(
            "build_knn_graph",
            format!("distance matrix must be square, got {s:?}"),
        ));
    }
    let n = s[0];
    if k == 0 || k >= n {
        return Err(Error::Config(format!(
            "neighbour count k={k} must lie in 1..={} for {n} channels",
            n.saturating_sub(1)
        )));
    }
    let d = distances.data();
    let mut neighbors = Vec::with_capacity(n);
    let mut cand: Vec<(f32, usize)> = Vec::with_capacity(n - 1);
    for i in 0..n {
        cand.clear();
        cand.extend((0..n).filter(|&j| j != i).map(|j| (d[i * n + j], j)));
        let order = |a: &(f32, usize), b: &(f32, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
        if k < cand.len() {
            cand.select_nth_unstable_by(k - 1, order);
            cand.truncate(k);
        }
        cand.sort_unstable_by(order);
        neighbors.push(cand.iter().map(|&(_, j)| j).collect());
    }
    Ok(FeatureGraph {
        n,
        k,
        distances: distances.clone(),
        neighbors,
    })
}

/// Distances and k-NN graph of an `n × L` feature matrix.
pub fn graph_of(features: &Tensor, k: usize) -> Result<FeatureGraph> {
    build_knn_graph(&pairwise_sq_distances(features)?, k)
}

/// Hyper-parameters of an SCC layer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SccConfig {
    pub mode: SccMode,
    /// Number of filters K; `None` picks the shape-preserving value
    /// (L for dense, 1 for pointwise).
    pub filters: Option<usize>,
    pub k: usize,
    pub variant: EdgeVariant,
}

impl Default for SccConfig {
    fn default() -> Self {
        Self {
            mode: SccMode::Pointwise,
            filters: None,
            k: 5,
            variant: EdgeVariant::Both,
        }
    }
}

impl SccConfig {
    pub fn filters_for(&self, l: usize) -> usize {
        self.filters.unwrap_or(match self.mode {
            SccMode::Dense => l,
            SccMode::Pointwise => 1,
        })
    }
}

/// Trainable weights Θ = (φ_1..φ_K, ω_1..ω_K) of one SCC layer.
#[derive(Debug, Clone)]
pub struct SccLayerParams {
    pub config: SccConfig,
    /// Flattened channel length this layer was built for.
    pub length: usize,
    pub phi: Parameter,
    pub omega: Parameter,
}

impl SccLayerParams {
    /// Dense banks are Glorot-uniform; pointwise banks start at φ = 1, ω = 0
    /// so a fresh layer passes non-negative features through unchanged.
    pub fn init<R: Rng>(name: &str, config: SccConfig, length: usize, rng: &mut R) -> Result<Self> {
        let filters = config.filters_for(length);
        if filters == 0 {
            return Err(Error::Config("SCC needs at least one filter".into()));
        }
        let (phi, omega) = match config.mode {
            SccMode::Dense => {
                let bound = (6.0 / (length + filters) as f32).sqrt();
                let mut draw = || {
                    let data = (0..filters * length)
                        .map(|_| rng.random_range(-bound..=bound))
                        .collect();
                    Tensor::new(&[filters, length], data)
                };
                (draw()?, draw()?)
            }
            // identity start; local-only has no φ term, so ω starts at one to keep edges live
            SccMode::Pointwise => match config.variant {
                EdgeVariant::LocalOnly => (Tensor::full(&[filters], 1.0), Tensor::full(&[filters], 1.0)),
                _ => (Tensor::full(&[filters], 1.0), Tensor::zeros(&[filters])),
            },
        };
        Ok(Self {
            config,
            length,
            phi: Parameter::new(format!("{name}.phi"), phi),
            omega: Parameter::new(format!("{name}.omega"), omega),
        })
    }

    pub fn filters(&self) -> usize {
        self.phi.value.shape()[0]
    }

    fn check(&self, l: usize) -> Result<()> {
        let k = self.filters();
        let expect: &[usize] = match self.config.mode {
            SccMode::Dense => &[k, l],
            SccMode::Pointwise => &[k],
        };
        if self.phi.value.shape() != expect || self.omega.value.shape() != expect {
            return Err(Error::Config(format!(
                "{} SCC weights {:?}/{:?} do not fit channel length {l}",
                self.config.mode,
                self.phi.value.shape(),
                self.omega.value.shape()
            )));
        }
        Ok(())
    }
}

struct EdgeConvBack {
    mode: SccMode,
    variant: EdgeVariant,
    neighbors: Vec<Vec<Vec<usize>>>,
    n: usize,
    l: usize,
    k: usize,
    filters: usize,
}

fn check_edge_inputs(f: &Tensor, graphs: &[&FeatureGraph], phi: &Tensor, omega: &Tensor, mode: SccMode) -> Result<(usize, usize, usize, usize, usize)> {
    let s = f.shape();
    if s.len() != 3 {
        return Err(Error::shape("edge_conv", format!("features must be B×n×L, got {s:?}")));
    }
    let (b, n, l) = (s[0], s[1], s[2]);
    if graphs.len() != b {
        return Err(Error::Config(format!("{} graphs for a batch of {b}", graphs.len())));
    }
    let k = graphs[0].k;
    for g in graphs {
        if g.n != n || g.k != k || g.neighbors.len() != n {
            return Err(Error::Config(format!(
                "graph over {} nodes (k={}) does not match {n} channels (k={k})",
                g.n, g.k
            )));
        }
    }
    if phi.shape() != omega.shape() {
        return Err(Error::Config(format!(
            "φ {:?} and ω {:?} differ in shape",
            phi.shape(),
            omega.shape()
        )));
    }
    let filters = phi.shape()[0];
    let ok = match mode {
        SccMode::Dense => phi.shape() == [filters, l],
        SccMode::Pointwise => phi.shape() == [filters],
    };
    if !ok {
        return Err(Error::Config(format!(
            "{mode} mode cannot use weights {:?} with channel length {l}",
            phi.shape()
        )));
    }
    Ok((b, n, l, k, filters))
}

/// Edge features for a batch. `features` is `B×n×L` and `graphs[b]` is the
/// graph of sample `b`. Output is `B×n×k×K` (dense) or `B×n×k×(K·L)`
/// (pointwise), slot `s` of node `i` holding the edge to `neighbors[i][s]`.
pub fn edge_conv_batch<'t>(
    features: Var<'t>,
    graphs: &[&FeatureGraph],
    phi: Var<'t>,
    omega: Var<'t>,
    mode: SccMode,
    variant: EdgeVariant,
) -> Result<Var<'t>> {
    let (fv, pv, ov) = (features.value(), phi.value(), omega.value());
    let (b, n, l, k, filters) = check_edge_inputs(&fv, graphs, &pv, &ov, mode)?;
    let (ci, cj, use_phi) = variant.omega_coeffs();
    let f = fv.data();
    let (phi_w, omega_w) = (pv.data(), ov.data());
    let width = match mode {
        SccMode::Dense => filters,
        SccMode::Pointwise => filters * l,
    };
    let mut out = vec![0.0f32; b * n * k * width];
    for s in 0..b {
        let fs = &f[s * n * l..(s + 1) * n * l];
        let nb = &graphs[s].neighbors;
        let os = &mut out[s * n * k * width..(s + 1) * n * k * width];
        match mode {
            SccMode::Dense => {
                let mut p = vec![0.0f32; n * filters];
                let mut q = vec![0.0f32; n * filters];
                crate::tensor::gemm_nt(n, l, filters, fs, phi_w, &mut p);
                crate::tensor::gemm_nt(n, l, filters, fs, omega_w, &mut q);
                for i in 0..n {
                    for (slot, &j) in nb[i].iter().enumerate() {
                        let e = &mut os[(i * k + slot) * filters..(i * k + slot + 1) * filters];
                        for c in 0..filters {
                            let g = if use_phi { p[i * filters + c] } else { 0.0 };
                            let v = g + cj * q[j * filters + c] + ci * q[i * filters + c];
                            e[c] = if v < 0.0 { 0.0 } else { v };
                        }
                    }
                }
            }
            SccMode::Pointwise => {
                for i in 0..n {
                    let fi = &fs[i * l..(i + 1) * l];
                    for (slot, &j) in nb[i].iter().enumerate() {
                        let fj = &fs[j * l..(j + 1) * l];
                        let e = &mut os[(i * k + slot) * width..(i * k + slot + 1) * width];
                        for c in 0..filters {
                            let a = if use_phi { phi_w[c] } else { 0.0 } + ci * omega_w[c];
                            let bj = cj * omega_w[c];
                            for (x, v) in e[c * l..(c + 1) * l].iter_mut().enumerate() {
                                let y = a * fi[x] + bj * fj[x];
                                *v = if y < 0.0 { 0.0 } else { y };
                            }
                        }
                    }
                }
            }
        }
    }
    let out = Tensor::new(&[b, n, k, width], out)?;
    let back = EdgeConvBack {
        mode,
        variant,
        neighbors: graphs.iter().map(|g| g.neighbors.clone()).collect(),
        n,
        l,
        k,
        filters,
    };
    Ok(features.tape().push(out, &[features, phi, omega], Box::new(back)))
}

impl crate::tensor::BackwardOp for EdgeConvBack {
    fn backward(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        grad_out: &[f32],
        needs: &[bool],
    ) -> Vec<Option<Vec<f32>>> {
        let (f, phi_t, omega_t) = (inputs[0].data(), inputs[1].data(), inputs[2].data());
        let (n, l, k, filters) = (self.n, self.l, self.k, self.filters);
        let (ci, cj, use_phi) = self.variant.omega_coeffs();
        let batch = self.neighbors.len();
        let mut gf = vec![0.0f32; f.len()];
        let mut gphi = vec![0.0f64; phi_t.len()];
        let mut gomega = vec![0.0f64; omega_t.len()];
        let out = output.data();
        match self.mode {
            SccMode::Dense => {
                let mut dp = vec![0.0f32; n * filters];
                let mut dq = vec![0.0f32; n * filters];
                let mut tmp = vec![0.0f32; filters * l];
                for s in 0..batch {
                    dp.fill(0.0);
                    dq.fill(0.0);
                    let base = s * n * k * filters;
                    for i in 0..n {
                        for (slot, &j) in self.neighbors[s][i].iter().enumerate() {
                            let off = base + (i * k + slot) * filters;
                            for c in 0..filters {
                                if out[off + c] > 0.0 {
                                    let g = grad_out[off + c];
                                    if use_phi {
                                        dp[i * filters + c] += g;
                                    }
                                    dq[j * filters + c] += cj * g;
                                    dq[i * filters + c] += ci * g;
                                }
                            }
                        }
                    }
                    let fs = &f[s * n * l..(s + 1) * n * l];
                    // dΦ += dPᵀ F, dΩ += dQᵀ F
                    crate::tensor::gemm_tn(filters, n, l, &dp, fs, &mut tmp);
                    gphi.iter_mut().zip(&tmp).for_each(|(a, &b)| *a += b as f64);
                    crate::tensor::gemm_tn(filters, n, l, &dq, fs, &mut tmp);
                    gomega.iter_mut().zip(&tmp).for_each(|(a, &b)| *a += b as f64);
                    // dF = dP Φ + dQ Ω
                    let gfs = &mut gf[s * n * l..(s + 1) * n * l];
                    crate::tensor::gemm_nn_acc(n, filters, l, &dp, phi_t, gfs);
                    crate::tensor::gemm_nn_acc(n, filters, l, &dq, omega_t, gfs);
                }
            }
            SccMode::Pointwise => {
                let width = filters * l;
                for s in 0..batch {
                    let fs = &f[s * n * l..(s + 1) * n * l];
                    let base = s * n * k * width;
                    for i in 0..n {
                        for (slot, &j) in self.neighbors[s][i].iter().enumerate() {
                            let off = base + (i * k + slot) * width;
                            for c in 0..filters {
                                let a = if use_phi { phi_t[c] } else { 0.0 } + ci * omega_t[c];
                                let bj = cj * omega_t[c];
                                let mut acc_phi = 0.0f64;
                                let mut acc_omega = 0.0f64;
                                for x in 0..l {
                                    let o = off + c * l + x;
                                    if out[o] <= 0.0 {
                                        continue;
                                    }
                                    let g = grad_out[o];
                                    let (fi, fj) = (fs[i * l + x], fs[j * l + x]);
                                    acc_phi += (g * fi) as f64;
                                    acc_omega += (g * (ci * fi + cj * fj)) as f64;
                                    gf[s * n * l + i * l + x] += g * a;
                                    gf[s * n * l + j * l + x] += g * bj;
                                }
                                if use_phi {
                                    gphi[c] += acc_phi;
                                }
                                gomega[c] += acc_omega;
                            }
                        }
                    }
                }
            }
        }
        vec![
            needs[0].then_some(gf),
            needs[1].then(|| gphi.into_iter().map(|v| v as f32).collect()),
            needs[2].then(|| gomega.into_iter().map(|v| v as f32).collect()),
        ]
    }
}

/// Edge features of a single `n × L` sample: `n×k×K` (dense) or
/// `n×k×K×L` (pointwise).
pub fn edge_conv<'t>(
    features: Var<'t>,
    graph: &FeatureGraph,
    phi: Var<'t>,
    omega: Var<'t>,
    mode: SccMode,
    variant: EdgeVariant,
) -> Result<Var<'t>> {
    let s = features.shape();
    if s.len() != 2 {
        return Err(Error::shape("edge_conv", format!("features must be n×L, got {s:?}")));
    }
    let (n, l) = (s[0], s[1]);
    let batched = features.reshape(&[1, n, l])?;
    let e = edge_conv_batch(batched, &[graph], phi, omega, mode, variant)?;
    let filters = phi.shape()[0];
    match mode {
        SccMode::Dense => e.reshape(&[n, graph.k, filters]),
        SccMode::Pointwise => e.reshape(&[n, graph.k, filters, l]),
    }
}

/// Channel-wise MAX over the neighbour-slot axis (axis 1) of `n×k×…` edges.
pub fn max_aggregate(edges: Var<'_>) -> Result<Var<'_>> {
    edges.reduce_max(1)
}

/// Result of one SCC layer application.
pub struct SccOutput<'t> {
    pub output: Var<'t>,
    pub graphs: Vec<FeatureGraph>,
}

/// Apply an SCC layer to `B×n×M×M` features, one graph per sample.
/// `frozen` replaces the freshly built graphs (used for gradient checks).
pub fn scc_forward_batch<'t>(
    features: Var<'t>,
    phi: Var<'t>,
    omega: Var<'t>,
    config: &SccConfig,
    frozen: Option<&[FeatureGraph]>,
) -> Result<SccOutput<'t>> {
    let s = features.shape();
    if s.len() != 4 || s[2] != s[3] {
        return Err(Error::shape("scc_forward", format!("expected B×n×M×M, got {s:?}")));
    }
    let (b, n, m) = (s[0], s[1], s[2]);
    let l = m * m;
    let filters = phi.shape()[0];
    let preserving = match config.mode {
        SccMode::Dense => filters == l,
        SccMode::Pointwise => filters == 1,
    };
    if !preserving {
        return Err(Error::Config(format!(
            "{} SCC with K={filters} cannot preserve {m}×{m} maps",
            config.mode
        )));
    }
    let flat = features.reshape(&[b, n, l])?;
    let graphs = match frozen {
        Some(g) => {
            if g.len() != b {
                return Err(Error::Config(format!("{} frozen graphs for batch {b}", g.len())));
            }
            g.to_vec()
        }
        None => {
            let v = flat.value();
            (0..b)
                .map(|i| build_knn_graph(&sq_distances_raw(&v.data()[i * n * l..(i + 1) * n * l], n, l), config.k))
                .collect::<Result<Vec<_>>>()?
        }
    };
    let refs: Vec<&FeatureGraph> = graphs.iter().collect();
    let edges = edge_conv_batch(flat, &refs, phi, omega, config.mode, config.variant)?;
    let output = edges.reduce_max(2)?.reshape(&[b, n, m, m])?;
    Ok(SccOutput { output, graphs })
}

/// Single-sample SCC: `n×M×M` in, `n×M×M` out, plus the graph it used.
pub fn scc_forward<'t>(
    tape: &'t Tape,
    features: Var<'t>,
    params: &SccLayerParams,
) -> Result<(Var<'t>, FeatureGraph, Var<'t>, Var<'t>)> {
    let s = features.shape();
    if s.len() != 3 {
        return Err(Error::shape("scc_forward", format!("expected n×M×M, got {s:?}")));
    }
    params.check(s[1] * s[2])?;
    let phi = tape.variable(params.phi.value.clone());
    let omega = tape.variable(params.omega.value.clone());
    let batched = features.reshape(&[1, s[0], s[1], s[2]])?;
    let mut out = scc_forward_batch(batched, phi, omega, &params.config, None)?;
    let y = out.output.reshape(&[s[0], s[1], s[2]])?;
    Ok((y, out.graphs.remove(0), phi, omega))
}

/// CSV rows `layer,node,rank,neighbor,squared_distance`.
pub fn write_graph_trace<W: Write>(w: &mut W, layer: usize, graph: &FeatureGraph) -> std::io::Result<()> {
    let d = graph.distances.data();
    for (node, nbrs) in graph.neighbors.iter().enumerate() {
        for (rank, &j) in nbrs.iter().enumerate() {
            writeln!(w, "{layer},{node},{rank},{j},{}", d[node * graph.n + j])?;
        }
    }
    Ok(())
}

pub const GRAPH_TRACE_HEADER: &str = "layer,node,rank,neighbor,squared_distance";

#[cfg(test)]
mod tests {
    use super::*;

    fn mat(n: usize, l: usize, data: &[f32]) -> Tensor {
        Tensor::new(&[n, l], data.to_vec()).unwrap()
    }

    #[test]
    fn flatten_is_row_major_and_invertible() {
        let x = Tensor::new(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let f = flatten_channels(&x).unwrap();
        assert_eq!(f.shape(), &[1, 4]);
        assert_eq!(f.data(), &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(unflatten_channels(&f).unwrap(), x);
        assert!(flatten_channels(&Tensor::zeros(&[2, 2, 3])).is_err());
    }

    #[test]
    fn three_four_five() {
        let d = pairwise_sq_distances(&mat(2, 2, &[0.0, 0.0, 3.0, 4.0])).unwrap();
        assert_eq!(d.data(), &[0.0, 25.0, 25.0, 0.0]);
    }

    #[test]
    fn points_on_a_line() {
        let d = pairwise_sq_distances(&mat(3, 1, &[0.0, 1.0, 5.0])).unwrap();
        let g = build_knn_graph(&d, 1).unwrap();
        assert_eq!(g.neighbors, vec![vec![1], vec![0], vec![1]]);
    }

    #[test]
    fn complete_graph_when_k_is_n_minus_one() {
        let d = pairwise_sq_distances(&mat(4, 1, &[0.0, 1.0, 3.0, 7.0])).unwrap();
        let g = build_knn_graph(&d, 3).unwrap();
        for (i, nb) in g.neighbors.iter().enumerate() {
            let mut s = nb.clone();
            s.sort();
            let all: Vec<usize> = (0..4).filter(|&j| j != i).collect();
            assert_eq!(s, all);
        }
    }

    #[test]
    fn ties_break_to_lower_index() {
        let d = pairwise_sq_distances(&mat(4, 1, &[0.0, 1.0, -1.0, 1.0])).unwrap();
        let g = build_knn_graph(&d, 2).unwrap();
        assert_eq!(g.neighbors[0], vec![1, 2]);
        assert_eq!(g.neighbors[1], vec![3, 0]);
    }

    #[test]
    fn k_out_of_range() {
        let d = pairwise_sq_distances(&mat(3, 1, &[0.0, 1.0, 2.0])).unwrap();
        assert!(matches!(build_knn_graph(&d, 0), Err(Error::Config(_))));
        assert!(matches!(build_knn_graph(&d, 3), Err(Error::Config(_))));
    }

    fn dense_single(fi: [f32; 2], fj: [f32; 2]) -> f32 {
        let tape = Tape::new();
        let f = tape.constant(mat(2, 2, &[fi[0], fi[1], fj[0], fj[1]]));
        let graph = graph_of(&f.value(), 1).unwrap();
        let phi = tape.constant(mat(1, 2, &[1.0, 0.0]));
        let omega = tape.constant(mat(1, 2, &[0.0, 1.0]));
        let e = edge_conv(f, &graph, phi, omega, SccMode::Dense, EdgeVariant::Both).unwrap();
        assert_eq!(e.shape(), vec![2, 1, 1]);
        e.value().data()[0]
    }

    #[test]
    fn hand_evaluated_edges() {
        assert_eq!(dense_single([2.0, 3.0], [4.0, 1.0]), 0.0);
        assert_eq!(dense_single([2.0, 3.0], [0.0, 10.0]), 9.0);
    }

    #[test]
    fn identical_neighbours_leave_global_term() {
        let tape = Tape::new();
        let f = tape.constant(mat(3, 2, &[1.0, -2.0, 1.0, -2.0, 1.0, -2.0]));
        let graph = graph_of(&f.value(), 2).unwrap();
        let phi = tape.constant(mat(2, 2, &[0.5, 0.25, -1.0, -1.0]));
        let omega = tape.constant(mat(2, 2, &[3.0, 3.0, 3.0, 3.0]));
        let e = edge_conv(f, &graph, phi, omega, SccMode::Dense, EdgeVariant::Both).unwrap();
        for row in e.value().data().chunks(2) {
            assert_eq!(row, &[0.0, 1.0]);
        }
    }

    #[test]
    fn max_aggregate_values() {
        let tape = Tape::new();
        let e = tape.variable(Tensor::new(&[1, 2, 1], vec![0.0, 9.0]).unwrap());
        let m = max_aggregate(e).unwrap();
        assert_eq!(m.value().data(), &[9.0]);
        m.sum().backward().unwrap();
        assert_eq!(e.grad().unwrap().data(), &[0.0, 1.0]);

        let single = tape.constant(Tensor::new(&[2, 1, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        assert_eq!(max_aggregate(single).unwrap().value().data(), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
    }

    #[test]
    fn shape_preservation_is_enforced() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::full(&[1, 3, 2, 2], 1.0));
        let phi = tape.constant(Tensor::full(&[2], 1.0));
        let omega = tape.constant(Tensor::zeros(&[2]));
        let err = scc_forward_batch(x, phi, omega, &SccConfig { k: 1, ..Default::default() }, None);
        assert!(matches!(err, Err(Error::Config(_))));
    }

    #[test]
    fn identical_channels_give_equal_outputs() {
        let tape = Tape::new();
        let chan = [0.5f32, -1.0, 2.0, 0.25];
        let data: Vec<f32> = (0..4).flat_map(|_| chan).collect();
        let x = tape.constant(Tensor::new(&[4, 2, 2], data).unwrap());
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(3);
        let params = SccLayerParams::init(
            "t",
            SccConfig { mode: SccMode::Dense, k: 2, ..Default::default() },
            4,
            &mut rng,
        )
        .unwrap();
        let (y, _, _, _) = scc_forward(&tape, x, &params).unwrap();
        let v = y.value();
        let first = &v.data()[..4];
        for c in 1..4 {
            assert_eq!(&v.data()[c * 4..(c + 1) * 4], first);
        }
        let phi = params.phi.value.data();
        for r in 0..4 {
            let dot: f32 = (0..4).map(|c| phi[r * 4 + c] * chan[c]).sum();
            assert!((first[r] - dot.max(0.0)).abs() < 1e-5);
        }
    }

    #[test]
    fn trace_rows() {
        let d = pairwise_sq_distances(&mat(3, 1, &[0.0, 1.0, 5.0])).unwrap();
        let g = build_knn_graph(&d, 2).unwrap();
        let mut buf = Vec::new();
        write_graph_trace(&mut buf, 0, &g).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 6);
        assert!(text.starts_with("0,0,0,1,1\n0,0,1,2,25\n"));
    }
}
