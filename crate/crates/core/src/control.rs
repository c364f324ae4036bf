//! The trainable control branch: condition feature extraction, feature
//! denormalization, zero convolutions and a copied encoder whose
//! cross-attention projections carry Kronecker adapters.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::denoiser::{
    embed_conditioning, unet_graph, AttentionRecord, AttnAdapters, AttnTrace, Branch, Conditioning, TokenSequence,
    UNetConfig,
};
use crate::error::{dim_err, Error, Result};
use crate::kron_adapter::{init_factors, AdapterSet, FactorShape};
use crate::nn::{expect_chw, insert_factors, load_factors, Ctx, Init, ParamStore};
use crate::numerics::{conv2d, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ConditionType {
    Edge,
    Segmentation,
    Depth,
}

impl ConditionType {
    pub const ALL: [ConditionType; 3] = [Self::Edge, Self::Segmentation, Self::Depth];

    /// Channel of the fused input.
    pub fn channel(self) -> usize {
        match self {
            Self::Edge => 0,
            Self::Segmentation => 1,
            Self::Depth => 2,
        }
    }

    pub fn from_channel(c: usize) -> Result<Self> {
        Self::ALL
            .get(c)
            .copied()
            .ok_or_else(|| Error::Input(format!("unknown condition type {c}")))
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Edge => "edge",
            Self::Segmentation => "seg",
            Self::Depth => "depth",
        }
    }
}

/// One structural condition attached to one object.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionInstance {
    pub kind: ConditionType,
    /// 1×H×W in [0, 1].
    pub map: Tensor,
    /// H×W, binary.
    pub instance_mask: Tensor,
    pub token_segment: Vec<usize>,
    pub sparse: bool,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ConditionBundle {
    pub instances: Vec<ConditionInstance>,
}

fn is_binary(t: &Tensor) -> bool {
    t.data().iter().all(|&v| v == 0.0 || v == 1.0)
}

impl ConditionBundle {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn validate(&self, resolution: usize) -> Result<()> {
        for inst in &self.instances {
            expect_chw(&inst.map, 1, resolution, resolution, "condition map")?;
            if inst.instance_mask.shape() != [resolution, resolution] {
                return Err(dim_err!("instance mask {:?}", inst.instance_mask.shape()));
            }
            if !is_binary(&inst.instance_mask) {
                return Err(Error::Input("instance mask is not binary".into()));
            }
        }
        Ok(())
    }

    /// Only the instances of the given types.
    pub fn restricted_to(&self, kinds: &[ConditionType]) -> Self {
        Self {
            instances: self
                .instances
                .iter()
                .filter(|i| kinds.contains(&i.kind))
                .cloned()
                .collect(),
        }
    }

    pub fn kinds(&self) -> Vec<ConditionType> {
        let mut k: Vec<_> = self.instances.iter().map(|i| i.kind).collect();
        k.sort();
        k.dedup();
        k
    }

    /// 3×H×W input: per type, the elementwise max of that type's maps.
    pub fn fused_input(&self, resolution: usize) -> Result<Tensor> {
        self.validate(resolution)?;
        let hw = resolution * resolution;
        let mut out = Tensor::zeros(&[3, resolution, resolution]);
        for kind in ConditionType::ALL {
            let maps: Vec<Tensor> = self
                .instances
                .iter()
                .filter(|i| i.kind == kind)
                .map(|i| i.map.clone())
                .collect();
            if maps.is_empty() {
                continue;
            }
            let merged = merge_homogeneous(&maps)?;
            let c = kind.channel();
            out.data_mut()[c * hw..(c + 1) * hw].copy_from_slice(merged.data());
        }
        Ok(out)
    }
}

/// Elementwise max of same-type maps.
pub fn merge_homogeneous(maps: &[Tensor]) -> Result<Tensor> {
    let (first, rest) = maps
        .split_first()
        .ok_or_else(|| Error::Input("merge_homogeneous needs at least one map".into()))?;
    let mut out = first.clone();
    for m in rest {
        out = out.zip_map(m, f64::max)?;
    }
    Ok(out)
}

/// Union of `map > 0` over all instances; all ones if any instance is sparse.
pub fn build_union_mask(bundle: &ConditionBundle, resolution: usize) -> Result<Tensor> {
    bundle.validate(resolution)?;
    if bundle.instances.iter().any(|i| i.sparse) {
        return Ok(Tensor::ones(&[resolution, resolution]));
    }
    let mut mask = vec![0.0; resolution * resolution];
    for inst in &bundle.instances {
        for (m, &v) in mask.iter_mut().zip(inst.map.data()) {
            if v > 0.0 {
                *m = 1.0;
            }
        }
    }
    Tensor::new(&[resolution, resolution], mask)
}

/// Kronecker adapter settings shared by every adapted projection.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AdapterConfig {
    pub p: usize,
    pub q: usize,
    pub r: usize,
    pub n: usize,
    pub share_slow: bool,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        Self {
            p: 2,
            q: 2,
            r: 2,
            n: 2,
            share_slow: false,
        }
    }
}

impl AdapterConfig {
    pub fn shape_for(&self, k: usize, d: usize) -> Result<FactorShape> {
        FactorShape::for_weight(k, d, self.p, self.q, self.r, self.n, self.share_slow)
    }
}

/// Full model shape: base U-Net plus control adapters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ModelConfig {
    pub unet: UNetConfig,
    pub adapter: AdapterConfig,
}

/// Encoder levels of the control branch that carry cross-attention.
pub const CONTROL_ATTN_LEVELS: [usize; 2] = [1, 2];
const PROJECTIONS: [&str; 4] = ["q", "k", "v", "o"];

/// Identifiers of every adapted projection, e.g. `enc1.attn.q`.
pub fn adapted_layers() -> Vec<String> {
    CONTROL_ATTN_LEVELS
        .iter()
        .flat_map(|l| PROJECTIONS.iter().map(move |p| format!("enc{l}.attn.{p}")))
        .collect()
}

/// Frozen base weight adapted by `layer`.
pub fn frozen_weight_name(layer: &str) -> String {
    format!("base.{layer}")
}

/// `(layer, k, d)` of every adapted projection.
pub fn adapted_layer_shapes(store: &ParamStore) -> Result<Vec<(String, usize, usize)>> {
    adapted_layers()
        .into_iter()
        .map(|layer| {
            let (k, d) = store.require(&frozen_weight_name(&layer))?.dims2()?;
            Ok((layer, k, d))
        })
        .collect()
}

/// Adapter factor shapes keyed by layer, derived from the frozen weights.
pub fn adapter_shapes(store: &ParamStore, acfg: &AdapterConfig) -> Result<Vec<(String, FactorShape)>> {
    adapted_layer_shapes(store)?
        .into_iter()
        .map(|(layer, k, d)| Ok((layer, acfg.shape_for(k, d).map_err(|e| Error::Config(e.to_string()))?)))
        .collect()
}

/// Current adapter factors read back from the store.
pub fn adapter_set(store: &ParamStore, acfg: &AdapterConfig) -> Result<AdapterSet> {
    let mut set = AdapterSet::new();
    for (layer, shape) in adapter_shapes(store, acfg)? {
        set.insert(layer.clone(), load_factors(store, &layer, shape)?);
    }
    Ok(set)
}

const COPIED: [&str; 10] = [
    "conv_in",
    "enc0.",
    "down0",
    "enc1.conv",
    "enc1.temb",
    "enc1.skip",
    "down1",
    "enc2.conv",
    "enc2.temb",
    "enc2.skip",
];

/// Add a fresh control branch (`ctrl.*`) and adapters (`adapt.*`) to a
/// store holding base weights. Encoder convolutions are copied from the
/// base; every output path starts at exactly zero.
pub fn init_control(store: &mut ParamStore, mcfg: &ModelConfig, seed: u64) -> Result<()> {
    let cfg = &mcfg.unet;
    for name in COPIED {
        store.copy_prefix(&format!("base.{name}"), &format!("ctrl.{name}"));
    }
    if !store.contains("ctrl.conv_in.w") || !store.contains("ctrl.enc2.conv2.w") {
        return Err(Error::Config("base weights missing from store".into()));
    }
    // These convolutions feed an FDN, whose norm removes any per-channel
    // offset; their copied biases would never receive a gradient.
    for name in ["ctrl.conv_in.b", "ctrl.down0.b", "ctrl.down1.b"] {
        store.remove(name);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut fresh = ParamStore::new();
    let mut init = Init {
        rng: &mut rng,
        store: &mut fresh,
    };
    let ch = [cfg.channels(0), cfg.channels(1), cfg.channels(2)];
    init.conv("ctrl.hint.c0", cfg.image_channels, ch[0], 3, false);
    init.conv("ctrl.hint.c1", ch[0], ch[1], 3, false);
    init.conv("ctrl.hint.c2", ch[1], ch[2], 3, false);
    for (l, &c) in ch.iter().enumerate() {
        init.conv(&format!("ctrl.hint.h{l}"), c, c, 3, true);
        init.zero_conv(&format!("ctrl.fdn{l}.zero"), c, c);
        init.conv(&format!("ctrl.fdn{l}.phi"), c, c, 3, true);
        init.zero_conv(&format!("ctrl.out{l}"), c, c);
    }
    for (name, t) in fresh.into_inner() {
        store.insert(name, t);
    }
    for (i, (layer, shape)) in adapter_shapes(store, &mcfg.adapter)?.into_iter().enumerate() {
        let f = init_factors(shape, seed.wrapping_add(1 + i as u64))?;
        insert_factors(store, &layer, &f);
    }
    Ok(())
}

/// Per-level condition features h_r: a bias-free stride-2 trunk followed by
/// one biased 3×3 head per level.
pub fn extract_graph(ctx: &mut Ctx, fused: Var) -> Result<[Var; 3]> {
    let t0 = ctx.conv("ctrl.hint.c0", fused, 1)?;
    let t0 = ctx.silu(t0);
    let t1 = ctx.conv("ctrl.hint.c1", t0, 2)?;
    let t1 = ctx.silu(t1);
    let t2 = ctx.conv("ctrl.hint.c2", t1, 2)?;
    let t2 = ctx.silu(t2);
    Ok([
        ctx.conv("ctrl.hint.h0", t0, 1)?,
        ctx.conv("ctrl.hint.h1", t1, 1)?,
        ctx.conv("ctrl.hint.h2", t2, 1)?,
    ])
}

pub fn multi_scale_extract(store: &ParamStore, fused_input: &Tensor) -> Result<[Tensor; 3]> {
    let mut ctx = Ctx::frozen(store);
    let x = ctx.input(fused_input.clone());
    let fs = extract_graph(&mut ctx, x)?;
    Ok(fs.map(|v| ctx.value(v).clone()))
}

/// 1×1 convolution; with freshly initialised weights the output is zero.
pub fn zero_conv(w: &Tensor, b: &Tensor, features: &Tensor) -> Result<Tensor> {
    if w.shape().len() != 4 || w.shape()[2..] != [1, 1] {
        return Err(dim_err!("zero_conv expects a 1x1 kernel, got {:?}", w.shape()));
    }
    conv2d(features, w, 1, Some(b))
}

/// `norm(Z)·(1 + P) + P` with `P = Φ(zero(h))`.
pub fn fdn_graph(ctx: &mut Ctx, name: &str, z: Var, h: Var) -> Result<Var> {
    if ctx.g.shape(z)[1..] != ctx.g.shape(h)[1..] {
        return Err(dim_err!(
            "fdn spatial mismatch: {:?} vs {:?}",
            ctx.g.shape(z),
            ctx.g.shape(h)
        ));
    }
    let zc = ctx.conv(&format!("{name}.zero"), h, 1)?;
    let p = ctx.conv(&format!("{name}.phi"), zc, 1)?;
    let n = ctx.norm(z)?;
    let ones = ctx.input(Tensor::ones(ctx.g.shape(p)));
    let scale = ctx.g.add(ones, p)?;
    let m = ctx.g.mul(n, scale)?;
    ctx.g.add(m, p)
}

/// Plain-tensor FDN for control level `level` of `store`.
pub fn fdn(store: &ParamStore, level: usize, z: &Tensor, c: &Tensor) -> Result<Tensor> {
    let mut ctx = Ctx::frozen(store);
    let zv = ctx.input(z.clone());
    let cv = ctx.input(c.clone());
    let y = fdn_graph(&mut ctx, &format!("ctrl.fdn{level}"), zv, cv)?;
    Ok(ctx.value(y).clone())
}

fn bind_adapters(ctx: &mut Ctx, acfg: &AdapterConfig, level: usize) -> Result<AttnAdapters> {
    let mut get = |p: &str| -> Result<_> {
        let layer = format!("enc{level}.attn.{p}");
        let (k, d) = ctx.store().require(&frozen_weight_name(&layer))?.dims2()?;
        let shape = acfg.shape_for(k, d).map_err(|e| Error::Config(e.to_string()))?;
        ctx.factors(&layer, shape)
    };
    Ok(AttnAdapters {
        q: get("q")?,
        k: get("k")?,
        v: get("v")?,
        o: get("o")?,
    })
}

/// Control branch on the graph. Returns zero-conv residuals for levels
/// 0, 1, 2 and the branch's attention traces.
pub fn control_graph(
    ctx: &mut Ctx,
    mcfg: &ModelConfig,
    z: Var,
    cond: &Conditioning,
    fused: Var,
) -> Result<([Var; 3], Vec<AttnTrace>)> {
    let feats = extract_graph(ctx, fused)?;
    let ta = cond.temb_act;
    let mut traces = Vec::new();

    let x = ctx.conv("ctrl.conv_in", z, 1)?;
    let x = fdn_graph(ctx, "ctrl.fdn0", x, feats[0])?;
    let e0 = ctx.res_block("ctrl.enc0", x, ta)?;
    let r0 = ctx.conv("ctrl.out0", e0, 1)?;

    let x = ctx.conv("ctrl.down0", e0, 2)?;
    let x = fdn_graph(ctx, "ctrl.fdn1", x, feats[1])?;
    let x = ctx.res_block("ctrl.enc1", x, ta)?;
    let ad = bind_adapters(ctx, &mcfg.adapter, 1)?;
    let (e1, tr) = ctx.attention(
        "base.enc1.attn",
        x,
        cond.tokens,
        Some(&ad),
        "ctrl.enc1",
        Branch::Control,
    )?;
    traces.push(tr);
    let r1 = ctx.conv("ctrl.out1", e1, 1)?;

    let x = ctx.conv("ctrl.down1", e1, 2)?;
    let x = fdn_graph(ctx, "ctrl.fdn2", x, feats[2])?;
    let x = ctx.res_block("ctrl.enc2", x, ta)?;
    let ad = bind_adapters(ctx, &mcfg.adapter, 2)?;
    let (e2, tr) = ctx.attention(
        "base.enc2.attn",
        x,
        cond.tokens,
        Some(&ad),
        "ctrl.enc2",
        Branch::Control,
    )?;
    traces.push(tr);
    let r2 = ctx.conv("ctrl.out2", e2, 1)?;

    Ok(([r0, r1, r2], traces))
}

pub fn control_forward(
    store: &ParamStore,
    mcfg: &ModelConfig,
    z_t: &Tensor,
    t: usize,
    tokens: &TokenSequence,
    bundle: &ConditionBundle,
) -> Result<([Tensor; 3], Vec<AttentionRecord>)> {
    let mut ctx = Ctx::frozen(store);
    let cond = embed_conditioning(&mut ctx, &mcfg.unet, t, tokens)?;
    let z = ctx.input(z_t.clone());
    let fused = ctx.input(bundle.fused_input(mcfg.unet.resolution)?);
    let (res, traces) = control_graph(&mut ctx, mcfg, z, &cond, fused)?;
    let records = traces.iter().map(|tr| tr.to_record(&ctx.g)).collect();
    Ok((res.map(|v| ctx.value(v).clone()), records))
}

/// Outputs of one controlled forward on the graph.
pub struct ControlledPass {
    pub eps: Var,
    pub base_traces: Vec<AttnTrace>,
    pub control_traces: Vec<AttnTrace>,
    pub residuals: [Var; 3],
}

/// Base U-Net driven by the control branch's residuals.
pub fn controlled_graph(
    ctx: &mut Ctx,
    mcfg: &ModelConfig,
    z: Var,
    t: usize,
    tokens: &TokenSequence,
    bundle: &ConditionBundle,
) -> Result<ControlledPass> {
    let cond = embed_conditioning(ctx, &mcfg.unet, t, tokens)?;
    let fused = ctx.input(bundle.fused_input(mcfg.unet.resolution)?);
    let (residuals, control_traces) = control_graph(ctx, mcfg, z, &cond, fused)?;
    let (eps, base_traces) = unet_graph(ctx, &mcfg.unet, z, &cond, Some(residuals))?;
    Ok(ControlledPass {
        eps,
        base_traces,
        control_traces,
        residuals,
    })
}

/// Noise prediction of the full controlled model, plus every attention map.
pub fn controlled_eps(
    store: &ParamStore,
    mcfg: &ModelConfig,
    z_t: &Tensor,
    t: usize,
    tokens: &TokenSequence,
    bundle: &ConditionBundle,
) -> Result<(Tensor, Vec<AttentionRecord>)> {
    let mut ctx = Ctx::frozen(store);
    let z = ctx.input(z_t.clone());
    let pass = controlled_graph(&mut ctx, mcfg, z, t, tokens, bundle)?;
    let records = pass
        .base_traces
        .iter()
        .chain(&pass.control_traces)
        .map(|tr| tr.to_record(&ctx.g))
        .collect();
    Ok((ctx.value(pass.eps).clone(), records))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::{init_base, unet_forward};
    use crate::numerics::{channel_norm, grad_check};

    fn model(cfg: UNetConfig, seed: u64) -> (ModelConfig, ParamStore) {
        let mcfg = ModelConfig {
            unet: cfg,
            adapter: AdapterConfig::default(),
        };
        let mut store = init_base(&cfg, seed).unwrap();
        init_control(&mut store, &mcfg, seed + 100).unwrap();
        (mcfg, store)
    }

    fn square_instance(kind: ConditionType, lo: usize, hi: usize, value: f64) -> ConditionInstance {
        let mut map = Tensor::zeros(&[1, 16, 16]);
        let mut mask = Tensor::zeros(&[16, 16]);
        for y in lo..hi {
            for x in lo..hi {
                map.data_mut()[y * 16 + x] = value;
                mask.data_mut()[y * 16 + x] = 1.0;
            }
        }
        ConditionInstance {
            kind,
            map,
            instance_mask: mask,
            token_segment: vec![0, 1],
            sparse: false,
        }
    }

    fn bundle() -> ConditionBundle {
        ConditionBundle {
            instances: vec![
                square_instance(ConditionType::Segmentation, 2, 7, 1.0 / 3.0),
                square_instance(ConditionType::Depth, 2, 7, 0.5),
                square_instance(ConditionType::Segmentation, 9, 13, 2.0 / 3.0),
            ],
        }
    }

    #[test]
    fn merge_cases() {
        let a = square_instance(ConditionType::Edge, 0, 3, 1.0).map;
        let b = square_instance(ConditionType::Edge, 5, 8, 1.0).map;
        assert_eq!(merge_homogeneous(std::slice::from_ref(&a)).unwrap(), a);
        assert_eq!(merge_homogeneous(&[a.clone(), a.clone()]).unwrap(), a);
        let u = merge_homogeneous(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(u.sum(), a.sum() + b.sum());
        assert!(matches!(merge_homogeneous(&[]), Err(Error::Input(_))));
    }

    #[test]
    fn fused_input_channels() {
        let f = bundle().fused_input(16).unwrap();
        assert_eq!(f.shape(), &[3, 16, 16]);
        assert_eq!(f.data()[..256].iter().sum::<f64>(), 0.0);
        let seg = &f.data()[256..512];
        assert_eq!(seg[2 * 16 + 2], 1.0 / 3.0);
        assert_eq!(seg[10 * 16 + 10], 2.0 / 3.0);
        assert_eq!(f.data()[512 + 3 * 16 + 3], 0.5);
    }

    #[test]
    fn union_mask_cases() {
        let mut edge = square_instance(ConditionType::Edge, 0, 0, 1.0);
        for i in 0..12 {
            edge.map.data_mut()[i * 16 + 3] = 1.0;
        }
        let one = ConditionBundle {
            instances: vec![edge.clone()],
        };
        let m = build_union_mask(&one, 16).unwrap();
        assert_eq!(m.sum(), 12.0);
        assert_eq!(m.data()[5 * 16 + 3], 1.0);

        let mut sparse = edge;
        sparse.sparse = true;
        let mut b = bundle();
        b.instances.push(sparse);
        assert!(build_union_mask(&b, 16).unwrap().data().iter().all(|&v| v == 1.0));
        assert_eq!(build_union_mask(&ConditionBundle::empty(), 16).unwrap().sum(), 0.0);
    }

    #[test]
    fn union_mask_is_monotone() {
        let b = bundle();
        let mut prev = Tensor::zeros(&[16, 16]);
        for k in 1..=b.instances.len() {
            let part = ConditionBundle {
                instances: b.instances[..k].to_vec(),
            };
            let m = build_union_mask(&part, 16).unwrap();
            assert!(m.data().iter().all(|&v| v == 0.0 || v == 1.0));
            assert!(prev.data().iter().zip(m.data()).all(|(a, b)| a <= b));
            prev = m;
        }
    }

    #[test]
    fn extractor_on_zero_input_is_bias() {
        let (_, mut store) = model(UNetConfig::default(), 1);
        for l in 0..3 {
            let name = format!("ctrl.hint.h{l}.b");
            let c = store.get(&name).unwrap().numel();
            let bias = Tensor::new(&[c], (0..c).map(|i| i as f64 * 0.1).collect()).unwrap();
            store.insert(name, bias);
        }
        let fs = multi_scale_extract(&store, &Tensor::zeros(&[3, 16, 16])).unwrap();
        let want = [[16, 16, 16], [32, 8, 8], [64, 4, 4]];
        for (l, f) in fs.iter().enumerate() {
            assert_eq!(f.shape(), want[l]);
            let hw = want[l][1] * want[l][2];
            for (ch, plane) in f.data().chunks(hw).enumerate() {
                assert!(plane.iter().all(|&v| v == ch as f64 * 0.1));
            }
        }
    }

    #[test]
    fn zero_conv_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::randn(&[4, 5, 5], 1.0, &mut rng);
        let w = Tensor::zeros(&[4, 4, 1, 1]);
        let b = Tensor::zeros(&[4]);
        assert!(zero_conv(&w, &b, &x).unwrap().data().iter().all(|&v| v == 0.0));
        let eye = Tensor::identity(4).into_reshape(&[4, 4, 1, 1]).unwrap();
        assert!(zero_conv(&eye, &b, &x).unwrap().bitwise_eq(&x));
        assert!(zero_conv(&Tensor::zeros(&[4, 4, 3, 3]), &b, &x).is_err());

        // gradient reaches the zero weights when the upstream signal is nonzero
        let mut g = crate::numerics::Graph::new();
        let xv = g.constant(x);
        let wv = g.param(w);
        let bv = g.param(b);
        let y = g.conv2d(xv, wv, Some(bv), 1).unwrap();
        let sq = g.square(y);
        let l0 = g.sum(sq);
        let y2 = g.sum(y);
        let l = g.add(l0, y2).unwrap();
        let grads = g.backward(l).unwrap();
        assert!(grads.get(wv).unwrap().max_abs() > 0.0);
    }

    #[test]
    fn fdn_cases() {
        let (_, mut store) = model(UNetConfig::default(), 2);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let z = Tensor::randn(&[16, 16, 16], 1.0, &mut rng);
        let c = Tensor::randn(&[16, 16, 16], 1.0, &mut rng);
        let fresh = fdn(&store, 0, &z, &c).unwrap();
        assert!(fresh.bitwise_eq(&channel_norm(&z, crate::nn::NORM_EPS).unwrap()));

        store.insert("ctrl.fdn0.phi.w", Tensor::zeros(&[16, 16, 3, 3]));
        store.insert("ctrl.fdn0.phi.b", Tensor::full(&[16], -1.0));
        let forced = fdn(&store, 0, &z, &c).unwrap();
        assert!(forced.data().iter().all(|&v| v == -1.0));
        assert!(fdn(&store, 0, &z, &Tensor::zeros(&[16, 8, 8])).is_err());
    }

    #[test]
    fn fdn_phi_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let z = Tensor::randn(&[2, 4, 4], 1.0, &mut rng);
        let h = Tensor::randn(&[2, 4, 4], 1.0, &mut rng);
        let leaves = vec![
            Tensor::randn(&[2, 2, 1, 1], 0.5, &mut rng),
            Tensor::randn(&[2], 0.5, &mut rng),
            Tensor::randn(&[2, 2, 3, 3], 0.5, &mut rng),
            Tensor::randn(&[2], 0.5, &mut rng),
        ];
        let report = grad_check(&leaves, |g, v| {
            let hv = g.constant(h.clone());
            let zc = g.conv2d(hv, v[0], Some(v[1]), 1)?;
            let p = g.conv2d(zc, v[2], Some(v[3]), 1)?;
            let zv = g.constant(z.clone());
            let n = g.channel_norm(zv, crate::nn::NORM_EPS)?;
            let ones = g.constant(Tensor::ones(&[2, 4, 4]));
            let s = g.add(ones, p)?;
            let m = g.mul(n, s)?;
            let y = g.add(m, p)?;
            let sq = g.square(y);
            Ok(g.mean(sq))
        })
        .unwrap();
        assert!(report.max_rel_err <= 1e-4, "{report:?}");
    }

    fn tokens() -> TokenSequence {
        TokenSequence::new(vec![1, 4, 7, 2, 5]).unwrap()
    }

    #[test]
    fn fresh_branch_is_identity() {
        let (mcfg, store) = model(UNetConfig::default(), 3);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let z = Tensor::randn(&[3, 16, 16], 1.0, &mut rng);
        let (res, recs) = control_forward(&store, &mcfg, &z, 50, &tokens(), &bundle()).unwrap();
        for (l, r) in res.iter().enumerate() {
            assert_eq!(r.shape(), mcfg.unet.feature_shape(l));
            assert!(r.data().iter().all(|&v| v == 0.0));
        }
        assert_eq!(recs.len(), 2);
        assert!(recs.iter().all(|r| r.branch == Branch::Control));
        let (base, _) = unet_forward(&store, &mcfg.unet, &z, 50, &tokens(), None).unwrap();
        let (ctl, all) = controlled_eps(&store, &mcfg, &z, 50, &tokens(), &bundle()).unwrap();
        assert!(ctl.bitwise_eq(&base));
        assert_eq!(all.len(), 7);
    }

    #[test]
    fn adapter_set_matches_frozen_shapes() {
        let (mcfg, store) = model(UNetConfig::default(), 4);
        let set = adapter_set(&store, &mcfg.adapter).unwrap();
        assert_eq!(set.layers.len(), 8);
        set.check_against(|layer| store.get(&frozen_weight_name(layer)).map(|t| t.shape()))
            .unwrap();
        assert_eq!(set.param_count(), store.numel_with_prefix("adapt."));
    }

    #[test]
    fn init_control_requires_base() {
        let mut empty = ParamStore::new();
        assert!(matches!(
            init_control(&mut empty, &ModelConfig::default(), 0),
            Err(Error::Config(_))
        ));
    }
}
