//! Sampling and controllability metrics.

use std::io::Write;

use crate::control::{controlled_eps, ConditionBundle, ConditionType, ModelConfig};
use crate::denoiser::{unet_forward, AttentionRecord, TokenSequence};
use crate::diffusion::{sample_loop, NoiseSchedule};
use crate::error::{Error, Result};
use crate::losses::segment_attention_map;
use crate::nn::ParamStore;
use crate::numerics::{ssim, Tensor};
use crate::par;
use crate::synthdata::{extract_edge, Color, DatasetRecord, CANVAS};

/// DDIM steps used when none are given.
pub const DEFAULT_EVAL_STEPS: usize = 50;

pub const EVAL_CSV_HEADER: &str = "record_id,seg_iou,edge_ssim,uncond_seg_iou,uncond_edge_ssim";

/// Largest deviations seen in attention maps, for the attention contract.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct AttnStats {
    pub maps: usize,
    /// max |Σ_i CA[s, i] − 1| over rows.
    pub max_row_err: f64,
    /// max over positions of Σ_j A_j(s) for the record's segments.
    pub max_segment_sum: f64,
}

impl AttnStats {
    pub fn observe(
        &mut self,
        records: &[AttentionRecord],
        segments: &[crate::losses::SegmentAnnotation],
    ) -> Result<()> {
        for (l, rec) in records.iter().enumerate() {
            let (rows, n) = rec.map.dims2()?;
            for r in 0..rows {
                let s: f64 = rec.map.data()[r * n..(r + 1) * n].iter().sum();
                self.max_row_err = self.max_row_err.max((s - 1.0).abs());
            }
            if !segments.is_empty() {
                let mut acc = Tensor::zeros(&[rec.resolution.0, rec.resolution.1]);
                for seg in segments {
                    acc.add_assign(&segment_attention_map(records, seg, l)?)?;
                }
                self.max_segment_sum = self.max_segment_sum.max(acc.data().iter().copied().fold(0.0, f64::max));
            }
            self.maps += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &AttnStats) {
        self.maps += other.maps;
        self.max_row_err = self.max_row_err.max(other.max_row_err);
        self.max_segment_sum = self.max_segment_sum.max(other.max_segment_sum);
    }
}

/// True when `store` carries a control branch.
pub fn has_control(store: &ParamStore) -> bool {
    store.contains("ctrl.conv_in.w")
}

/// One DDIM sample from seeded noise. Uses the control branch when the
/// store has one; `stats`, if given, sees every attention map.
#[allow(clippy::too_many_arguments)]
pub fn sample_image(
    store: &ParamStore,
    mcfg: &ModelConfig,
    sched: &NoiseSchedule,
    tokens: &TokenSequence,
    bundle: &ConditionBundle,
    steps: usize,
    seed: u64,
    mut stats: Option<(&mut AttnStats, &[crate::losses::SegmentAnnotation])>,
) -> Result<Tensor> {
    let cfg = &mcfg.unet;
    let shape = [cfg.image_channels, cfg.resolution, cfg.resolution];
    let control = has_control(store);
    if !control && !bundle.is_empty() {
        return Err(Error::Input(
            "checkpoint has no control branch for a condition bundle".into(),
        ));
    }
    sample_loop(
        |z, t| {
            let (eps, records) = if control {
                controlled_eps(store, mcfg, z, t, tokens, bundle)?
            } else {
                unet_forward(store, cfg, z, t, tokens, None)?
            };
            if let Some((st, segs)) = stats.as_mut() {
                st.observe(&records, segs)?;
            }
            Ok(eps)
        },
        &shape,
        sched,
        steps,
        seed,
    )
}

/// Per-pixel nearest colour among black and the three basis colours.
pub fn classify_colors(image: &Tensor) -> Result<Vec<Option<Color>>> {
    let (c, h, w) = image.dims3()?;
    if c != 3 {
        return Err(Error::Dimension(format!("expected an RGB image, got {c} channels")));
    }
    let d = image.data();
    let n = h * w;
    Ok((0..n)
        .map(|p| {
            let px = [d[p], d[n + p], d[2 * n + p]];
            let dist = |target: Option<usize>| -> f64 {
                (0..3)
                    .map(|ch| {
                        let want = if Some(ch) == target { 1.0 } else { 0.0 };
                        (px[ch] - want).powi(2)
                    })
                    .sum()
            };
            let mut best = (dist(None), None);
            for col in Color::ALL {
                let dd = dist(Some(col.channel()));
                if dd < best.0 {
                    best = (dd, Some(col));
                }
            }
            best.1
        })
        .collect())
}

fn segment_color(rec: &DatasetRecord, j: usize) -> Result<Color> {
    let seg = &rec.segments[j];
    let id = seg
        .token_segment
        .iter()
        .map(|&i| rec.tokens.ids().get(i).copied())
        .find_map(|id| id.and_then(|id| Color::ALL.into_iter().find(|c| c.token() == id)))
        .ok_or_else(|| Error::Input(format!("segment {j} names no colour")))?;
    Ok(id)
}

/// Mean over the colours in the prompt of the IoU between the union of
/// that colour's instance masks and the pixels classified as that colour.
pub fn seg_iou(image: &Tensor, rec: &DatasetRecord) -> Result<f64> {
    let classes = classify_colors(image)?;
    let mut ious = Vec::new();
    for col in Color::ALL {
        let mut truth = vec![false; CANVAS * CANVAS];
        let mut present = false;
        for (j, seg) in rec.segments.iter().enumerate() {
            if segment_color(rec, j)? == col {
                present = true;
                for (t, &m) in truth.iter_mut().zip(seg.mask.data()) {
                    *t |= m > 0.5;
                }
            }
        }
        if !present {
            continue;
        }
        let (mut inter, mut union) = (0usize, 0usize);
        for (&t, &c) in truth.iter().zip(&classes) {
            let p = c == Some(col);
            inter += usize::from(t && p);
            union += usize::from(t || p);
        }
        ious.push(if union == 0 { 1.0 } else { inter as f64 / union as f64 });
    }
    if ious.is_empty() {
        return Err(Error::Input("record has no segments".into()));
    }
    Ok(ious.iter().sum::<f64>() / ious.len() as f64)
}

/// SSIM between the edge map of `image` and the record's edge condition.
pub fn edge_ssim(image: &Tensor, rec: &DatasetRecord) -> Result<f64> {
    let cond = rec.bundle.restricted_to(&[ConditionType::Edge]).fused_input(CANVAS)?;
    let target = Tensor::new(&[CANVAS, CANVAS], cond.data()[..CANVAS * CANVAS].to_vec())?;
    let edges = extract_edge(image)?.into_reshape(&[CANVAS, CANVAS])?;
    ssim(&edges, &target)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalRow {
    pub record_id: usize,
    pub seg_iou: f64,
    pub edge_ssim: f64,
    pub uncond_seg_iou: f64,
    pub uncond_edge_ssim: f64,
}

impl EvalRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.record_id, self.seg_iou, self.edge_ssim, self.uncond_seg_iou, self.uncond_edge_ssim
        )
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub attention: AttnStats,
}

impl EvalReport {
    /// Column means `(seg_iou, edge_ssim, uncond_seg_iou, uncond_edge_ssim)`.
    pub fn means(&self) -> [f64; 4] {
        let n = self.rows.len().max(1) as f64;
        let mut m = [0.0; 4];
        for r in &self.rows {
            m[0] += r.seg_iou;
            m[1] += r.edge_ssim;
            m[2] += r.uncond_seg_iou;
            m[3] += r.uncond_edge_ssim;
        }
        m.map(|v| v / n)
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "{EVAL_CSV_HEADER}")?;
        for r in &self.rows {
            writeln!(w, "{}", r.to_csv())?;
        }
        Ok(())
    }
}

/// Samples the first `n` records with their condition bundle and with an
/// empty bundle from the same noise, and scores both. Records are
/// processed in parallel and reported in order.
pub fn evaluate(
    store: &ParamStore,
    mcfg: &ModelConfig,
    sched: &NoiseSchedule,
    records: &[DatasetRecord],
    n: usize,
    steps: usize,
) -> Result<EvalReport> {
    if n > records.len() {
        return Err(Error::Input(format!(
            "asked for {n} records, dataset has {}",
            records.len()
        )));
    }
    let control = has_control(store);
    let per = par::map_indexed(n, |i| -> Result<(EvalRow, AttnStats)> {
        let rec = &records[i];
        let mut stats = AttnStats::default();
        let bundle = if control {
            rec.bundle.clone()
        } else {
            ConditionBundle::empty()
        };
        let cond = sample_image(
            store,
            mcfg,
            sched,
            &rec.tokens,
            &bundle,
            steps,
            rec.seed,
            Some((&mut stats, &rec.segments)),
        )?;
        let uncond = sample_image(
            store,
            mcfg,
            sched,
            &rec.tokens,
            &ConditionBundle::empty(),
            steps,
            rec.seed,
            Some((&mut stats, &rec.segments)),
        )?;
        Ok((
            EvalRow {
                record_id: i,
                seg_iou: seg_iou(&cond, rec)?,
                edge_ssim: edge_ssim(&cond, rec)?,
                uncond_seg_iou: seg_iou(&uncond, rec)?,
                uncond_edge_ssim: edge_ssim(&uncond, rec)?,
            },
            stats,
        ))
    });
    let mut report = EvalReport::default();
    for r in per {
        let (row, stats) = r?;
        report.rows.push(row);
        report.attention.merge(&stats);
    }
    Ok(report)
}

/// Binary PPM (P6) encoding of a 3×H×W image in [0, 1].
pub fn ppm_bytes(image: &Tensor) -> Result<Vec<u8>> {
    let (c, h, w) = image.dims3()?;
    if c != 3 {
        return Err(Error::Dimension(format!("PPM needs 3 channels, got {c}")));
    }
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    let d = image.data();
    for p in 0..h * w {
        for ch in 0..3 {
            out.push((d[ch * h * w + p].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    Ok(out)
}
