//! Denoising, per-segment attention supervision and masked noise losses.

use crate::denoiser::{AttentionRecord, AttnTrace};
use crate::error::{dim_err, Error, Result};
use crate::numerics::{Graph, Tensor, Var};

pub const DEFAULT_LAMBDA_CA: f64 = 0.01;
pub const DEFAULT_LAMBDA_MASK: f64 = 0.01;

/// Token positions `𝒯ⱼ` of one object and its ground-truth region.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentAnnotation {
    pub token_segment: Vec<usize>,
    /// H×W, binary.
    pub mask: Tensor,
}

impl SegmentAnnotation {
    pub fn new(token_segment: Vec<usize>, mask: Tensor) -> Result<Self> {
        if token_segment.is_empty() {
            return Err(Error::Input("segment token set is empty".into()));
        }
        mask.dims2()?;
        if !mask.data().iter().all(|&v| v == 0.0 || v == 1.0) {
            return Err(Error::Input("segment mask is not binary".into()));
        }
        Ok(Self { token_segment, mask })
    }
}

/// Mean squared difference over all elements.
pub fn ldm_loss(eps_hat: &Tensor, eps: &Tensor) -> Result<f64> {
    let mut g = Graph::new();
    let (a, b) = (g.constant(eps_hat.clone()), g.constant(eps.clone()));
    let l = ldm_graph(&mut g, a, b)?;
    Ok(g.value(l).data()[0])
}

pub fn ldm_graph(g: &mut Graph, eps_hat: Var, eps: Var) -> Result<Var> {
    let d = g.sub(eps_hat, eps)?;
    let sq = g.square(d);
    Ok(g.mean(sq))
}

/// Nearest-neighbour resize of an S×S mask: output `(i, j)` reads source
/// `(⌊i·S/H⌋, ⌊j·S/W⌋)`.
pub fn downsample_mask(mask: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let (sh, sw) = mask.dims2()?;
    let mut out = Vec::with_capacity(h * w);
    for i in 0..h {
        for j in 0..w {
            out.push(mask.at2(i * sh / h, j * sw / w));
        }
    }
    Tensor::new(&[h, w], out)
}

fn indicator(segment: &[usize], n: usize) -> Result<Tensor> {
    if segment.is_empty() {
        return Err(Error::Input("segment token set is empty".into()));
    }
    let mut ind = vec![0.0; n];
    for &i in segment {
        if i >= n {
            return Err(Error::Index(format!("token index {i} outside 0..{n}")));
        }
        ind[i] = 1.0;
    }
    Tensor::new(&[n, 1], ind)
}

/// `Aⱼˡ(s) = Σ_{i∈𝒯ⱼ} CAˡ[s, i]` for record `layer`, as an H×W map.
pub fn segment_attention_map(records: &[AttentionRecord], segment: &SegmentAnnotation, layer: usize) -> Result<Tensor> {
    if records.is_empty() {
        return Err(Error::Input("no attention records".into()));
    }
    let rec = records
        .get(layer)
        .ok_or_else(|| Error::Index(format!("layer {layer} outside 0..{}", records.len())))?;
    let (_, n) = rec.map.dims2()?;
    let ind = indicator(&segment.token_segment, n)?;
    let a = crate::numerics::matmul(&rec.map, &ind)?;
    a.into_reshape(&[rec.resolution.0, rec.resolution.1])
}

/// Per-layer, per-segment attention loss; see [`ca_graph`].
pub fn ca_loss(records: &[AttentionRecord], segments: &[SegmentAnnotation]) -> Result<f64> {
    let mut g = Graph::new();
    let traces: Vec<AttnTrace> = records
        .iter()
        .map(|r| AttnTrace {
            layer_id: r.layer_id.clone(),
            resolution: r.resolution,
            map: g.constant(r.map.clone()),
            branch: r.branch,
        })
        .collect();
    let l = ca_graph(&mut g, &traces, segments)?;
    Ok(g.value(l).data()[0])
}

/// For every segment and layer, the mean squared difference between the
/// segment's summed attention and its mask resized to the layer; averaged
/// over layers, then over segments.
pub fn ca_graph(g: &mut Graph, traces: &[AttnTrace], segments: &[SegmentAnnotation]) -> Result<Var> {
    if segments.is_empty() {
        return Err(Error::Input("ca_loss needs at least one segment".into()));
    }
    if traces.is_empty() {
        return Err(Error::Input("no attention records".into()));
    }
    let mut total: Option<Var> = None;
    for seg in segments {
        for tr in traces {
            let (hw, n) = g.value(tr.map).dims2()?;
            let (h, w) = tr.resolution;
            if h * w != hw {
                return Err(dim_err!("record {} has {hw} rows for {h}x{w}", tr.layer_id));
            }
            let ind = g.constant(indicator(&seg.token_segment, n)?);
            let a = g.matmul(tr.map, ind)?;
            let target = downsample_mask(&seg.mask, h, w)?.into_reshape(&[hw, 1])?;
            let target = g.constant(target);
            let d = g.sub(a, target)?;
            let sq = g.square(d);
            let m = g.mean(sq);
            total = Some(match total {
                None => m,
                Some(t) => g.add(t, m)?,
            });
        }
    }
    let total = total.expect("non-empty");
    Ok(g.scale(total, 1.0 / (segments.len() * traces.len()) as f64))
}

fn check_binary(m: &Tensor) -> Result<()> {
    if !m.data().iter().all(|&v| v == 0.0 || v == 1.0) {
        return Err(Error::Input("mask must be binary".into()));
    }
    Ok(())
}

/// Mask broadcast over the channels of a C×H×W tensor.
fn broadcast_mask(mask: &Tensor, c: usize) -> Result<Tensor> {
    let (h, w) = mask.dims2()?;
    let mut data = Vec::with_capacity(c * h * w);
    for _ in 0..c {
        data.extend_from_slice(mask.data());
    }
    Tensor::new(&[c, h, w], data)
}

/// Mean over all elements of `((eps_hat − eps) ⊙ M)²`.
pub fn mask_loss(eps_hat: &Tensor, eps: &Tensor, mask: &Tensor) -> Result<f64> {
    let mut g = Graph::new();
    let (a, b) = (g.constant(eps_hat.clone()), g.constant(eps.clone()));
    let l = mask_graph(&mut g, a, b, mask)?;
    Ok(g.value(l).data()[0])
}

pub fn mask_graph(g: &mut Graph, eps_hat: Var, eps: Var, mask: &Tensor) -> Result<Var> {
    check_binary(mask)?;
    let (c, h, w) = g.value(eps_hat).dims3()?;
    if mask.shape() != [h, w] {
        return Err(dim_err!("mask {:?} does not match {h}x{w}", mask.shape()));
    }
    let m = g.constant(broadcast_mask(mask, c)?);
    let d = g.sub(eps_hat, eps)?;
    let md = g.mul(d, m)?;
    let sq = g.square(md);
    Ok(g.mean(sq))
}

fn check_lambdas(lambda_ca: f64, lambda_mask: f64) -> Result<()> {
    if !(lambda_ca >= 0.0 && lambda_mask >= 0.0) {
        return Err(Error::Parameter(format!(
            "loss weights must be >= 0, got {lambda_ca}, {lambda_mask}"
        )));
    }
    Ok(())
}

/// `ldm + λ_ca·ca + λ_mask·mask`.
pub fn total_loss(ldm: f64, ca: f64, mask: f64, lambda_ca: f64, lambda_mask: f64) -> Result<f64> {
    check_lambdas(lambda_ca, lambda_mask)?;
    Ok(ldm + lambda_ca * ca + lambda_mask * mask)
}

/// Graph form of [`total_loss`]. Terms with a zero weight are left out of
/// the graph entirely.
pub fn total_graph(g: &mut Graph, ldm: Var, ca: Var, mask: Var, lambda_ca: f64, lambda_mask: f64) -> Result<Var> {
    check_lambdas(lambda_ca, lambda_mask)?;
    let mut total = ldm;
    for (term, lambda) in [(ca, lambda_ca), (mask, lambda_mask)] {
        if lambda > 0.0 {
            let s = g.scale(term, lambda);
            total = g.add(total, s)?;
        }
    }
    Ok(total)
}
