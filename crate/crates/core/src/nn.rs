//! Named parameter storage and graph-building helpers shared by the base
//! U-Net and the control branch.

use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{dim_err, Error, Result};
use crate::kron_adapter::{FactorShape, FactorVars, KronLoRAFactors};
use crate::numerics::{Gradients, Graph, Tensor, Var};

pub const NORM_EPS: f64 = 1e-5;

/// Flat, ordered table of named tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| Error::Config(format!("missing parameter {name}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    /// Entries whose name starts with `prefix`.
    pub fn with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = (&'a String, &'a Tensor)> + 'a {
        self.tensors
            .range(prefix.to_string()..)
            .take_while(move |(k, _)| k.starts_with(prefix))
    }

    /// Scalar count over entries with `prefix`.
    pub fn numel_with_prefix(&self, prefix: &str) -> usize {
        self.with_prefix(prefix).map(|(_, t)| t.numel()).sum()
    }

    /// Order-sensitive FNV-1a hash over names, shapes and value bits of
    /// every entry under `prefix`.
    pub fn checksum(&self, prefix: &str) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= u64::from(b);
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        };
        for (name, t) in self.with_prefix(prefix) {
            eat(name.as_bytes());
            for &e in t.shape() {
                eat(&(e as u64).to_le_bytes());
            }
            for &v in t.data() {
                eat(&v.to_bits().to_le_bytes());
            }
        }
        h
    }

    /// Copy every `from*` entry to the same suffix under `to`.
    pub fn copy_prefix(&mut self, from: &str, to: &str) {
        let copies: Vec<(String, Tensor)> = self
            .with_prefix(from)
            .map(|(k, t)| (format!("{to}{}", &k[from.len()..]), t.clone()))
            .collect();
        self.tensors.extend(copies);
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        self.tensors.remove(name)
    }

    pub fn into_inner(self) -> BTreeMap<String, Tensor> {
        self.tensors
    }
}

impl FromIterator<(String, Tensor)> for ParamStore {
    fn from_iter<I: IntoIterator<Item = (String, Tensor)>>(iter: I) -> Self {
        Self {
            tensors: iter.into_iter().collect(),
        }
    }
}

/// Name of factor `kind` (`H`, `U` or `V`) index `i` of the adapter `layer`.
pub fn adapter_param(layer: &str, kind: char, i: usize) -> String {
    format!("adapt.{layer}.{kind}{i}")
}

/// Store every factor of `f` under `adapt.<layer>.*`.
pub fn insert_factors(store: &mut ParamStore, layer: &str, f: &KronLoRAFactors) {
    for (name, t) in f.named_tensors() {
        store.insert(format!("adapt.{layer}.{name}"), t.clone());
    }
}

/// Reassemble the factors of `layer` from the store.
pub fn load_factors(store: &ParamStore, layer: &str, shape: FactorShape) -> Result<KronLoRAFactors> {
    let get = |kind, i| store.require(&adapter_param(layer, kind, i)).cloned();
    let slow = (0..shape.slow_count()).map(|i| get('H', i)).collect::<Result<_>>()?;
    let fast_u = (0..shape.n).map(|i| get('U', i)).collect::<Result<_>>()?;
    let fast_v = (0..shape.n).map(|i| get('V', i)).collect::<Result<_>>()?;
    KronLoRAFactors::from_parts(shape, slow, fast_u, fast_v)
}

/// One forward pass: a graph plus lazily bound parameters. Names that start
/// with one of `trainable` become gradient-carrying leaves; everything else
/// is a constant.
pub struct Ctx<'a> {
    pub g: Graph,
    store: &'a ParamStore,
    trainable: &'a [&'a str],
    bound: BTreeMap<String, Var>,
}

impl<'a> Ctx<'a> {
    pub fn new(store: &'a ParamStore, trainable: &'a [&'a str]) -> Self {
        Self {
            g: Graph::new(),
            store,
            trainable,
            bound: BTreeMap::new(),
        }
    }

    /// Inference-only pass.
    pub fn frozen(store: &'a ParamStore) -> Self {
        Self::new(store, &[])
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    pub fn has(&self, name: &str) -> bool {
        self.store.contains(name)
    }

    /// Graph handle of parameter `name`.
    pub fn p(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let t = self.store.require(name)?.clone();
        let rg = self.trainable.iter().any(|pre| name.starts_with(pre));
        let v = self.g.leaf(t, rg);
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn input(&mut self, t: Tensor) -> Var {
        self.g.constant(t)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.g.value(v)
    }

    /// Bound graph handle for every factor of adapter `layer`.
    pub fn factors(&mut self, layer: &str, shape: FactorShape) -> Result<FactorVars> {
        let mut bind = |kind, count: usize| -> Result<Vec<Var>> {
            (0..count).map(|i| self.p(&adapter_param(layer, kind, i))).collect()
        };
        let slow = bind('H', shape.slow_count())?;
        let fast_u = bind('U', shape.n)?;
        let fast_v = bind('V', shape.n)?;
        Ok(FactorVars {
            shape,
            slow,
            fast_u,
            fast_v,
        })
    }

    /// Gradients of `loss` for every trainable parameter touched by this
    /// pass. Parameters the loss does not depend on get zeros.
    pub fn param_grads(&self, loss: Var) -> Result<BTreeMap<String, Tensor>> {
        let mut grads: Gradients = self.g.backward(loss)?;
        let mut out = BTreeMap::new();
        for (name, &v) in &self.bound {
            if !self.g.requires_grad(v) {
                continue;
            }
            let grad = grads.take(v).unwrap_or_else(|| Tensor::zeros(self.g.shape(v)));
            out.insert(name.clone(), grad);
        }
        Ok(out)
    }

    // ---- layers ----

    /// Padded 3×3 (or 1×1) convolution `name.w` with optional bias `name.b`.
    pub fn conv(&mut self, name: &str, x: Var, stride: usize) -> Result<Var> {
        let w = self.p(&format!("{name}.w"))?;
        let bname = format!("{name}.b");
        let b = if self.has(&bname) { Some(self.p(&bname)?) } else { None };
        self.g.conv2d(x, w, b, stride)
    }

    /// `x·Wᵀ + b` for a single row `x` (1×d) with `name.w` k×d and `name.b` 1×k.
    pub fn linear_row(&mut self, name: &str, x: Var) -> Result<Var> {
        let w = self.p(&format!("{name}.w"))?;
        let wt = self.g.transpose(w)?;
        let y = self.g.matmul(x, wt)?;
        let b = self.p(&format!("{name}.b"))?;
        self.g.add(y, b)
    }

    pub fn norm(&mut self, x: Var) -> Result<Var> {
        self.g.channel_norm(x, NORM_EPS)
    }

    pub fn silu(&mut self, x: Var) -> Var {
        self.g.silu(x)
    }

    /// Residual block: two norm-silu-conv stages, a per-channel time shift,
    /// and a 1×1 skip when channel counts differ.
    pub fn res_block(&mut self, name: &str, x: Var, temb_act: Var) -> Result<Var> {
        let h = self.norm(x)?;
        let h = self.silu(h);
        let h = self.conv(&format!("{name}.conv1"), h, 1)?;
        let tb = self.linear_row(&format!("{name}.temb"), temb_act)?;
        let c = self.g.shape(tb)[1];
        let tb = self.g.reshape(tb, &[c])?;
        // Shift after the norm; before it the mean subtraction would cancel
        // the shift exactly.
        let h = self.norm(h)?;
        let h = self.g.add_channel(h, tb)?;
        let h = self.silu(h);
        let h = self.conv(&format!("{name}.conv2"), h, 1)?;
        let skip_name = format!("{name}.skip");
        let skip = if self.has(&format!("{skip_name}.w")) {
            self.conv(&skip_name, x, 1)?
        } else {
            x
        };
        self.g.add(h, skip)
    }
}

/// Checks a tensor is `C×H×W` with the given extents.
pub fn expect_chw(t: &Tensor, c: usize, h: usize, w: usize, what: &str) -> Result<()> {
    if t.shape() != [c, h, w] {
        return Err(dim_err!("{what}: expected {c}x{h}x{w}, got {:?}", t.shape()));
    }
    Ok(())
}

/// Parameter initialisation helpers; weights are N(0, 1/fan_in).
pub struct Init<'r, R: Rng> {
    pub rng: &'r mut R,
    pub store: &'r mut ParamStore,
}

impl<R: Rng> Init<'_, R> {
    pub fn conv(&mut self, name: &str, c_in: usize, c_out: usize, kernel: usize, bias: bool) {
        let std = 1.0 / ((c_in * kernel * kernel) as f64).sqrt();
        let w = Tensor::randn(&[c_out, c_in, kernel, kernel], std, self.rng);
        self.store.insert(format!("{name}.w"), w);
        if bias {
            self.store.insert(format!("{name}.b"), Tensor::zeros(&[c_out]));
        }
    }

    /// 1×1 convolution with weights and bias exactly zero.
    pub fn zero_conv(&mut self, name: &str, c_in: usize, c_out: usize) {
        self.store
            .insert(format!("{name}.w"), Tensor::zeros(&[c_out, c_in, 1, 1]));
        self.store.insert(format!("{name}.b"), Tensor::zeros(&[c_out]));
    }

    pub fn linear(&mut self, name: &str, d_in: usize, d_out: usize, bias: bool) {
        let std = 1.0 / (d_in as f64).sqrt();
        self.store
            .insert(format!("{name}.w"), Tensor::randn(&[d_out, d_in], std, self.rng));
        if bias {
            self.store.insert(format!("{name}.b"), Tensor::zeros(&[1, d_out]));
        }
    }

    pub fn table(&mut self, name: &str, rows: usize, cols: usize, std: f64) {
        self.store
            .insert(name.to_string(), Tensor::randn(&[rows, cols], std, self.rng));
    }

    pub fn res_block(&mut self, name: &str, c_in: usize, c_out: usize, temb_dim: usize) {
        // No bias: the norm that follows would cancel it.
        self.conv(&format!("{name}.conv1"), c_in, c_out, 3, false);
        self.linear(&format!("{name}.temb"), temb_dim, c_out, true);
        self.conv(&format!("{name}.conv2"), c_out, c_out, 3, true);
        if c_in != c_out {
            self.conv(&format!("{name}.skip"), c_in, c_out, 1, true);
        }
    }
}
