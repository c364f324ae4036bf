//! Trainable-parameter and memory accounting of adapter schemes over a set
//! of adapted layers.

use std::io::Write;

use super::config::parse_kv;
use crate::control::{adapted_layer_shapes, AdapterConfig};
use crate::denoiser::{init_base, UNetConfig};
use crate::error::{Error, Result};
use crate::kron_adapter::{memory_estimate, param_count};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerShape {
    pub name: String,
    pub k: usize,
    pub d: usize,
}

/// Adapted layers plus the settings of every compared scheme.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Manifest {
    pub layers: Vec<LayerShape>,
    pub adapter: AdapterConfig,
    pub lora_rank: usize,
    pub phm_n: usize,
    pub dtype_bytes: u64,
    /// Optimizer slots per parameter (2 for Adam moments).
    pub optimizer_slots: u64,
}

impl Manifest {
    /// Layers are kept sorted by name.
    pub fn new(mut layers: Vec<LayerShape>, adapter: AdapterConfig) -> Self {
        layers.sort_by(|a, b| a.name.cmp(&b.name));
        Self {
            layers,
            adapter,
            lora_rank: 4,
            phm_n: 4,
            dtype_bytes: 4,
            optimizer_slots: 2,
        }
    }

    /// `key = value` text: `layer.<name> = KxD` lines plus optional
    /// `adapter.*`, `lora.rank`, `phm.n`, `dtype_bytes` and
    /// `optimizer_slots` settings.
    pub fn parse(text: &str) -> Result<Self> {
        let map = parse_kv(text).map_err(|e| Error::Input(e.to_string()))?;
        let mut m = Manifest::new(Vec::new(), AdapterConfig::default());
        let mut layers = Vec::new();
        let num = |k: &str, v: &str| -> Result<usize> {
            v.parse()
                .map_err(|_| Error::Input(format!("manifest {k}: cannot parse {v:?}")))
        };
        for (k, v) in &map {
            if let Some(name) = k.strip_prefix("layer.") {
                let (a, b) = v
                    .split_once('x')
                    .ok_or_else(|| Error::Input(format!("manifest {k}: expected KxD, got {v:?}")))?;
                let (kk, dd) = (num(k, a.trim())?, num(k, b.trim())?);
                layers.push(LayerShape {
                    name: name.to_string(),
                    k: kk,
                    d: dd,
                });
                continue;
            }
            match k.as_str() {
                "adapter.p" => m.adapter.p = num(k, v)?,
                "adapter.q" => m.adapter.q = num(k, v)?,
                "adapter.r" => m.adapter.r = num(k, v)?,
                "adapter.n" => m.adapter.n = num(k, v)?,
                "adapter.share_slow" => {
                    m.adapter.share_slow = match v.as_str() {
                        "true" => true,
                        "false" => false,
                        _ => return Err(Error::Input(format!("manifest {k}: expected true/false"))),
                    }
                }
                "lora.rank" => m.lora_rank = num(k, v)?,
                "phm.n" => m.phm_n = num(k, v)?,
                "dtype_bytes" => m.dtype_bytes = num(k, v)? as u64,
                "optimizer_slots" => m.optimizer_slots = num(k, v)? as u64,
                _ => return Err(Error::Input(format!("manifest: unknown key {k:?}"))),
            }
        }
        if layers.is_empty() {
            return Err(Error::Input("manifest lists no layers".into()));
        }
        layers.sort_by(|a, b| a.name.cmp(&b.name));
        m.layers = layers;
        if m.lora_rank == 0 || m.phm_n == 0 {
            return Err(Error::Input("lora.rank and phm.n must be positive".into()));
        }
        Ok(m)
    }

    pub fn to_text(&self) -> String {
        let a = &self.adapter;
        let mut s = format!(
            "adapter.p = {}\nadapter.q = {}\nadapter.r = {}\nadapter.n = {}\nadapter.share_slow = {}\n\
             lora.rank = {}\nphm.n = {}\ndtype_bytes = {}\noptimizer_slots = {}\n",
            a.p, a.q, a.r, a.n, a.share_slow, self.lora_rank, self.phm_n, self.dtype_bytes, self.optimizer_slots
        );
        for l in &self.layers {
            s.push_str(&format!("layer.{} = {}x{}\n", l.name, l.k, l.d));
        }
        s
    }
}

/// Every adapted projection of the model built from `unet`.
pub fn toy_manifest(unet: &UNetConfig, adapter: AdapterConfig) -> Result<Manifest> {
    let store = init_base(unet, 0)?;
    let layers = adapted_layer_shapes(&store)?
        .into_iter()
        .map(|(name, k, d)| LayerShape { name, k, d })
        .collect();
    Ok(Manifest::new(layers, adapter))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BenchRow {
    pub scheme: &'static str,
    pub params: u64,
    pub memory_bytes: u64,
}

pub fn full_count(l: &LayerShape) -> u64 {
    (l.k * l.d) as u64
}

pub fn lora_count(l: &LayerShape, rank: usize) -> u64 {
    (rank * (l.k + l.d)) as u64
}

/// `n` rule matrices of n×n plus `k·d/n` block entries (rounded up).
pub fn phm_count(l: &LayerShape, n: usize) -> u64 {
    (n * n * n + (l.k * l.d).div_ceil(n)) as u64
}

pub fn kron_count(l: &LayerShape, a: &AdapterConfig) -> Result<u64> {
    let shape = a
        .shape_for(l.k, l.d)
        .map_err(|e| Error::Input(format!("layer {}: {e}", l.name)))?;
    Ok(param_count(&shape) as u64)
}

/// Counts and memory estimates for full fine-tuning, LoRA, PHM (per layer
/// and with rule matrices shared across layers) and the Kronecker adapter.
/// Fails if the Kronecker adapter is not strictly smaller than full.
pub fn bench_params(m: &Manifest) -> Result<Vec<BenchRow>> {
    if m.layers.is_empty() {
        return Err(Error::Input("manifest lists no layers".into()));
    }
    let n = m.phm_n;
    let mut counts = [0u64; 5];
    for l in &m.layers {
        if l.k == 0 || l.d == 0 {
            return Err(Error::Input(format!("layer {} has a zero extent", l.name)));
        }
        counts[0] += full_count(l);
        counts[1] += lora_count(l, m.lora_rank);
        counts[2] += phm_count(l, n);
        counts[3] += (l.k * l.d).div_ceil(n) as u64;
        counts[4] += kron_count(l, &m.adapter)?;
    }
    counts[3] += (n * n * n) as u64;
    if counts[4] >= counts[0] {
        return Err(Error::Parameter(format!(
            "Kronecker adapter count {} is not below full {}",
            counts[4], counts[0]
        )));
    }
    let names = ["full", "lora", "phm", "phm_shared", "kronlora"];
    Ok(names
        .into_iter()
        .zip(counts)
        .map(|(scheme, params)| BenchRow {
            scheme,
            params,
            memory_bytes: memory_estimate(params, m.dtype_bytes, m.optimizer_slots),
        })
        .collect())
}

pub fn write_bench_csv<W: Write>(mut w: W, rows: &[BenchRow]) -> Result<()> {
    writeln!(w, "scheme,params,memory_bytes")?;
    for r in rows {
        writeln!(w, "{},{},{}", r.scheme, r.params, r.memory_bytes)?;
    }
    Ok(())
}

/// Row of `scheme` in a report.
pub fn row<'a>(rows: &'a [BenchRow], scheme: &str) -> Option<&'a BenchRow> {
    rows.iter().find(|r| r.scheme == scheme)
}
