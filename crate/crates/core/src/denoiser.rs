//! The base text-to-image denoiser: a three-level U-Net with single-head
//! cross-attention to token embeddings and additive control residuals.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{dim_err, Error, Result};
use crate::kron_adapter::{adapted_linear, FactorVars};
use crate::nn::{expect_chw, Ctx, Init, ParamStore};
use crate::numerics::{Graph, Tensor, Var};

pub const VOCAB_SIZE: usize = 24;
pub const MAX_TOKENS: usize = 8;
pub const PAD_ID: usize = 0;

/// Shape of the U-Net. Channel counts per level are `base_channels ×
/// multiplier`; spatial size halves per level.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct UNetConfig {
    pub image_channels: usize,
    pub resolution: usize,
    pub base_channels: usize,
    pub multipliers: [usize; 3],
    pub token_dim: usize,
    pub time_dim: usize,
    pub temb_dim: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            image_channels: 3,
            resolution: 16,
            base_channels: 16,
            multipliers: [1, 2, 4],
            token_dim: 32,
            time_dim: 32,
            temb_dim: 64,
        }
    }
}

impl UNetConfig {
    /// Narrow variant for finite-difference checks.
    pub fn tiny() -> Self {
        Self {
            base_channels: 2,
            token_dim: 4,
            time_dim: 4,
            temb_dim: 4,
            ..Self::default()
        }
    }

    pub fn channels(&self, level: usize) -> usize {
        self.base_channels * self.multipliers[level]
    }

    pub fn spatial(&self, level: usize) -> usize {
        self.resolution >> level
    }

    pub fn validate(&self) -> Result<()> {
        if !self.resolution.is_multiple_of(4) || self.resolution < 8 {
            return Err(Error::Config(format!(
                "resolution {} must be a multiple of 4, >= 8",
                self.resolution
            )));
        }
        if !self.time_dim.is_multiple_of(2) || self.time_dim == 0 {
            return Err(Error::Config(format!("time_dim {} must be even", self.time_dim)));
        }
        let fields = [self.image_channels, self.base_channels, self.token_dim, self.temb_dim];
        if fields.contains(&0) || self.multipliers.contains(&0) {
            return Err(Error::Config("zero-sized U-Net dimension".into()));
        }
        Ok(())
    }

    /// Shape of the level-`l` encoder feature (and residual).
    pub fn feature_shape(&self, level: usize) -> [usize; 3] {
        let s = self.spatial(level);
        [self.channels(level), s, s]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Branch {
    Base,
    Control,
}

/// Post-softmax cross-attention weights of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionRecord {
    pub layer_id: String,
    pub resolution: (usize, usize),
    /// (H·W)×N, one row per spatial position.
    pub map: Tensor,
    pub branch: Branch,
}

/// An attention map still attached to its graph.
#[derive(Debug, Clone)]
pub struct AttnTrace {
    pub layer_id: String,
    pub resolution: (usize, usize),
    pub map: Var,
    pub branch: Branch,
}

impl AttnTrace {
    pub fn to_record(&self, g: &Graph) -> AttentionRecord {
        AttentionRecord {
            layer_id: self.layer_id.clone(),
            resolution: self.resolution,
            map: g.value(self.map).clone(),
            branch: self.branch,
        }
    }
}

/// Prompt token ids. Always embedded padded to [`MAX_TOKENS`].
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TokenSequence {
    ids: Vec<usize>,
}

impl TokenSequence {
    pub fn new(ids: Vec<usize>) -> Result<Self> {
        if ids.len() > MAX_TOKENS {
            return Err(Error::Input(format!(
                "{} tokens exceed the limit of {MAX_TOKENS}",
                ids.len()
            )));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= VOCAB_SIZE) {
            return Err(Error::Input(format!(
                "token id {bad} outside vocabulary of {VOCAB_SIZE}"
            )));
        }
        Ok(Self { ids })
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn padded(&self) -> Vec<usize> {
        let mut ids = self.ids.clone();
        ids.resize(MAX_TOKENS, PAD_ID);
        ids
    }
}

/// Interleaved `sin, cos` pairs at frequencies `10000^(−i/(dim/2))`.
pub fn timestep_embedding(t: usize, dim: usize) -> Tensor {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = 10000f64.powf(-(i as f64) / half as f64);
        let arg = t as f64 * freq;
        out[2 * i] = arg.sin();
        out[2 * i + 1] = arg.cos();
    }
    Tensor::new(&[dim], out).expect("length matches")
}

/// Token table lookup plus positional embeddings for the padded sequence.
pub fn embed_tokens(store: &ParamStore, ids: &[usize]) -> Result<Tensor> {
    let mut ctx = Ctx::frozen(store);
    let v = token_embeddings(&mut ctx, ids)?;
    Ok(ctx.value(v).clone())
}

pub(crate) fn token_embeddings(ctx: &mut Ctx, ids: &[usize]) -> Result<Var> {
    if ids.is_empty() || ids.len() > MAX_TOKENS {
        return Err(Error::Input(format!(
            "token count {} outside 1..={MAX_TOKENS}",
            ids.len()
        )));
    }
    if let Some(&bad) = ids.iter().find(|&&i| i >= VOCAB_SIZE) {
        return Err(Error::Input(format!(
            "token id {bad} outside vocabulary of {VOCAB_SIZE}"
        )));
    }
    let table = ctx.p("base.tok.table")?;
    let pos = ctx.p("base.tok.pos")?;
    let e = ctx.g.gather_rows(table, ids)?;
    let positions: Vec<usize> = (0..ids.len()).collect();
    let p = ctx.g.gather_rows(pos, &positions)?;
    ctx.g.add(e, p)
}

/// Projection weights of one attention layer, each stored k×d.
#[derive(Debug, Clone)]
pub struct AttnParams {
    pub q: Var,
    pub k: Var,
    pub v: Var,
    pub o: Var,
}

/// Optional adapters for the four projections.
#[derive(Debug, Clone)]
pub struct AttnAdapters {
    pub q: FactorVars,
    pub k: FactorVars,
    pub v: FactorVars,
    pub o: FactorVars,
}

/// Single-head cross-attention with a residual connection. Returns the
/// updated features and the (H·W)×N attention map.
pub fn cross_attention_graph(
    g: &mut Graph,
    x: Var,
    tokens: Var,
    w: &AttnParams,
    adapters: Option<&AttnAdapters>,
) -> Result<(Var, Var)> {
    let (c, h, wd) = g.value(x).dims3()?;
    let (_, tdim) = g.value(tokens).dims2()?;
    let want = [(w.q, [c, c]), (w.k, [c, tdim]), (w.v, [c, tdim]), (w.o, [c, c])];
    for (v, shape) in want {
        if g.shape(v) != shape {
            return Err(dim_err!("attention weight {:?}, expected {shape:?}", g.shape(v)));
        }
    }
    let n = g.channel_norm(x, crate::nn::NORM_EPS)?;
    let flat = g.reshape(n, &[c, h * wd])?;
    let rows = g.transpose(flat)?;
    let q = adapted_linear(g, w.q, adapters.map(|a| &a.q), rows)?;
    let k = adapted_linear(g, w.k, adapters.map(|a| &a.k), tokens)?;
    let v = adapted_linear(g, w.v, adapters.map(|a| &a.v), tokens)?;
    let kt = g.transpose(k)?;
    let scores = g.matmul(q, kt)?;
    let scores = g.scale(scores, 1.0 / (c as f64).sqrt());
    let attn = g.softmax(scores);
    let mixed = g.matmul(attn, v)?;
    let out = adapted_linear(g, w.o, adapters.map(|a| &a.o), mixed)?;
    let out = g.transpose(out)?;
    let out = g.reshape(out, &[c, h, wd])?;
    let y = g.add(x, out)?;
    Ok((y, attn))
}

/// Plain-tensor cross-attention. `weights` holds q, k, v, o in that order.
pub fn cross_attention(
    x: &Tensor,
    tokens: &Tensor,
    weights: [&Tensor; 4],
    adapters: Option<[&crate::kron_adapter::KronLoRAFactors; 4]>,
) -> Result<(Tensor, AttentionRecord)> {
    let (_, h, w) = x.dims3()?;
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let tv = g.constant(tokens.clone());
    let [q, k, v, o] = weights.map(|t| g.constant(t.clone()));
    let params = AttnParams { q, k, v, o };
    let bound = adapters.map(|fs| {
        let [q, k, v, o] = fs.map(|f| FactorVars::bind(&mut g, f, false));
        AttnAdapters { q, k, v, o }
    });
    let (y, map) = cross_attention_graph(&mut g, xv, tv, &params, bound.as_ref())?;
    let record = AttentionRecord {
        layer_id: "attn".into(),
        resolution: (h, w),
        map: g.value(map).clone(),
        branch: if adapters.is_some() {
            Branch::Control
        } else {
            Branch::Base
        },
    };
    Ok((g.value(y).clone(), record))
}

impl Ctx<'_> {
    pub fn attn_params(&mut self, prefix: &str) -> Result<AttnParams> {
        Ok(AttnParams {
            q: self.p(&format!("{prefix}.q"))?,
            k: self.p(&format!("{prefix}.k"))?,
            v: self.p(&format!("{prefix}.v"))?,
            o: self.p(&format!("{prefix}.o"))?,
        })
    }

    /// Attention layer `prefix` with its trace labelled `layer_id`.
    pub fn attention(
        &mut self,
        prefix: &str,
        x: Var,
        tokens: Var,
        adapters: Option<&AttnAdapters>,
        layer_id: &str,
        branch: Branch,
    ) -> Result<(Var, AttnTrace)> {
        let w = self.attn_params(prefix)?;
        let (y, map) = cross_attention_graph(&mut self.g, x, tokens, &w, adapters)?;
        let s = self.g.shape(x);
        let trace = AttnTrace {
            layer_id: layer_id.to_string(),
            resolution: (s[1], s[2]),
            map,
            branch,
        };
        Ok((y, trace))
    }
}

/// Per-pass conditioning shared by the base and control branches.
#[derive(Debug, Clone, Copy)]
pub struct Conditioning {
    /// `silu(temb)`, 1×temb_dim.
    pub temb_act: Var,
    /// N×token_dim.
    pub tokens: Var,
}

pub fn embed_conditioning(ctx: &mut Ctx, cfg: &UNetConfig, t: usize, tokens: &TokenSequence) -> Result<Conditioning> {
    let sin = timestep_embedding(t, cfg.time_dim).into_reshape(&[1, cfg.time_dim])?;
    let sin = ctx.input(sin);
    let h = ctx.linear_row("base.time.fc1", sin)?;
    let h = ctx.silu(h);
    let temb = ctx.linear_row("base.time.fc2", h)?;
    let temb_act = ctx.silu(temb);
    let tokens = token_embeddings(ctx, &tokens.padded())?;
    Ok(Conditioning { temb_act, tokens })
}

/// Layer ids of the base cross-attention blocks, encoder to decoder.
pub const BASE_ATTN_LAYERS: [&str; 5] = ["base.enc1", "base.enc2", "base.mid", "base.dec2", "base.dec1"];

fn add_residual(ctx: &mut Ctx, h: Var, r: Option<Var>) -> Result<Var> {
    match r {
        Some(r) => {
            if ctx.g.shape(r) != ctx.g.shape(h) {
                return Err(dim_err!(
                    "control residual {:?} does not match feature {:?}",
                    ctx.g.shape(r),
                    ctx.g.shape(h)
                ));
            }
            ctx.g.add(h, r)
        }
        None => Ok(h),
    }
}

/// U-Net body on the graph. `residuals` are added to the encoder outputs
/// at levels 0, 1, 2 and so reach both the deeper encoder and the decoder.
pub fn unet_graph(
    ctx: &mut Ctx,
    cfg: &UNetConfig,
    z: Var,
    cond: &Conditioning,
    residuals: Option<[Var; 3]>,
) -> Result<(Var, Vec<AttnTrace>)> {
    let s = cfg.resolution;
    expect_chw(ctx.value(z), cfg.image_channels, s, s, "z_t")?;
    let r = |l: usize| residuals.map(|rs| rs[l]);
    let ta = cond.temb_act;
    let tok = cond.tokens;
    let mut traces = Vec::with_capacity(BASE_ATTN_LAYERS.len());

    let x = ctx.conv("base.conv_in", z, 1)?;
    let h0 = ctx.res_block("base.enc0", x, ta)?;
    let h0 = add_residual(ctx, h0, r(0))?;

    let x = ctx.conv("base.down0", h0, 2)?;
    let x = ctx.res_block("base.enc1", x, ta)?;
    let (h1, tr) = ctx.attention("base.enc1.attn", x, tok, None, "base.enc1", Branch::Base)?;
    traces.push(tr);
    let h1 = add_residual(ctx, h1, r(1))?;

    let x = ctx.conv("base.down1", h1, 2)?;
    let x = ctx.res_block("base.enc2", x, ta)?;
    let (h2, tr) = ctx.attention("base.enc2.attn", x, tok, None, "base.enc2", Branch::Base)?;
    traces.push(tr);
    let h2 = add_residual(ctx, h2, r(2))?;

    let x = ctx.res_block("base.mid", h2, ta)?;
    let (x, tr) = ctx.attention("base.mid.attn", x, tok, None, "base.mid", Branch::Base)?;
    traces.push(tr);

    let x = ctx.g.concat_channels(x, h2)?;
    let x = ctx.res_block("base.dec2", x, ta)?;
    let (x, tr) = ctx.attention("base.dec2.attn", x, tok, None, "base.dec2", Branch::Base)?;
    traces.push(tr);

    let x = ctx.g.upsample2x(x)?;
    let x = ctx.conv("base.up1", x, 1)?;
    let x = ctx.g.concat_channels(x, h1)?;
    let x = ctx.res_block("base.dec1", x, ta)?;
    let (x, tr) = ctx.attention("base.dec1.attn", x, tok, None, "base.dec1", Branch::Base)?;
    traces.push(tr);

    let x = ctx.g.upsample2x(x)?;
    let x = ctx.conv("base.up0", x, 1)?;
    let x = ctx.g.concat_channels(x, h0)?;
    let x = ctx.res_block("base.dec0", x, ta)?;

    let x = ctx.norm(x)?;
    let x = ctx.silu(x);
    let eps = ctx.conv("base.conv_out", x, 1)?;
    Ok((eps, traces))
}

/// Inference forward of the base model with optional control residuals.
pub fn unet_forward(
    store: &ParamStore,
    cfg: &UNetConfig,
    z_t: &Tensor,
    t: usize,
    tokens: &TokenSequence,
    residuals: Option<&[Tensor; 3]>,
) -> Result<(Tensor, Vec<AttentionRecord>)> {
    let mut ctx = Ctx::frozen(store);
    let cond = embed_conditioning(&mut ctx, cfg, t, tokens)?;
    let res = match residuals {
        Some(rs) => {
            for (l, r) in rs.iter().enumerate() {
                let [c, h, w] = cfg.feature_shape(l);
                expect_chw(r, c, h, w, "control residual")?;
            }
            Some(rs.clone().map(|r| ctx.input(r)))
        }
        None => None,
    };
    let z = ctx.input(z_t.clone());
    let (eps, traces) = unet_graph(&mut ctx, cfg, z, &cond, res)?;
    let records = traces.iter().map(|tr| tr.to_record(&ctx.g)).collect();
    Ok((ctx.value(eps).clone(), records))
}

/// Initial base weights under `base.*`.
pub fn init_base(cfg: &UNetConfig, seed: u64) -> Result<ParamStore> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let mut init = Init {
        rng: &mut rng,
        store: &mut store,
    };
    let (c0, c1, c2) = (cfg.channels(0), cfg.channels(1), cfg.channels(2));
    let (td, te) = (cfg.token_dim, cfg.temb_dim);

    init.linear("base.time.fc1", cfg.time_dim, te, true);
    init.linear("base.time.fc2", te, te, true);
    init.table("base.tok.table", VOCAB_SIZE, td, 1.0);
    init.table("base.tok.pos", MAX_TOKENS, td, 0.1);

    init.conv("base.conv_in", cfg.image_channels, c0, 3, true);
    init.res_block("base.enc0", c0, c0, te);
    init.conv("base.down0", c0, c1, 3, true);
    init.res_block("base.enc1", c1, c1, te);
    init_attention(&mut init, "base.enc1.attn", c1, td);
    init.conv("base.down1", c1, c2, 3, true);
    init.res_block("base.enc2", c2, c2, te);
    init_attention(&mut init, "base.enc2.attn", c2, td);
    init.res_block("base.mid", c2, c2, te);
    init_attention(&mut init, "base.mid.attn", c2, td);
    init.res_block("base.dec2", 2 * c2, c2, te);
    init_attention(&mut init, "base.dec2.attn", c2, td);
    init.conv("base.up1", c2, c1, 3, true);
    init.res_block("base.dec1", 2 * c1, c1, te);
    init_attention(&mut init, "base.dec1.attn", c1, td);
    init.conv("base.up0", c1, c0, 3, true);
    init.res_block("base.dec0", 2 * c0, c0, te);
    init.conv("base.conv_out", c0, cfg.image_channels, 3, true);
    Ok(store)
}

fn init_attention<R: rand::Rng>(init: &mut Init<R>, prefix: &str, c: usize, token_dim: usize) {
    let mut mat = |name: &str, k: usize, d: usize| {
        let std = 1.0 / (d as f64).sqrt();
        init.store
            .insert(format!("{prefix}.{name}"), Tensor::randn(&[k, d], std, init.rng));
    };
    mat("q", c, c);
    mat("k", c, token_dim);
    mat("v", c, token_dim);
    mat("o", c, c);
}
