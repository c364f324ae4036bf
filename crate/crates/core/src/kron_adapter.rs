//! Kronecker-factored low-rank weight updates.
//!
//! A frozen weight `W0` (k×d) is adapted by
//!
//! ```text
//! ΔW = Σᵢ Hᵢ ⊗ (uᵢ·vᵢ)        Hᵢ: p×q,  uᵢ: s×r,  vᵢ: r×t,  k = p·s,  d = q·t
//! ```
//!
//! The slow factors `Hᵢ` can be shared across all `n` terms. Application never
//! forms `ΔW`: for an input row `x`, each term contributes
//! `rowvec(Hᵢ · X · vᵢᵀ · uᵢᵀ)` with `X = reshape_rowmajor(x, q, t)`.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{dim_err, Error, Result};
use crate::numerics::{kron, matmul, Graph, Tensor, Var};

/// Standard deviation of the Gaussian initialisation of `H` and `u`.
pub const FACTOR_INIT_STD: f64 = 0.02;

/// Extents of one factorisation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FactorShape {
    pub p: usize,
    pub q: usize,
    pub s: usize,
    pub t: usize,
    pub r: usize,
    pub n: usize,
    pub share_slow: bool,
}

impl FactorShape {
    pub fn new(p: usize, q: usize, s: usize, t: usize, r: usize, n: usize, share_slow: bool) -> Result<Self> {
        let shape = Self {
            p,
            q,
            s,
            t,
            r,
            n,
            share_slow,
        };
        shape.validate()?;
        Ok(shape)
    }

    /// Factor shape adapting a k×d weight with a p×q slow factor.
    pub fn for_weight(k: usize, d: usize, p: usize, q: usize, r: usize, n: usize, share_slow: bool) -> Result<Self> {
        if p == 0 || q == 0 || !k.is_multiple_of(p) || !d.is_multiple_of(q) {
            return Err(Error::Parameter(format!(
                "weight {k}x{d} cannot be split by a {p}x{q} slow factor"
            )));
        }
        Self::new(p, q, k / p, d / q, r, n, share_slow)
    }

    pub fn validate(&self) -> Result<()> {
        let extents = [self.p, self.q, self.s, self.t, self.r, self.n];
        if extents.contains(&0) {
            return Err(Error::Parameter(format!("factor extents must be >= 1: {self:?}")));
        }
        Ok(())
    }

    /// Rows of the adapted weight.
    pub fn k(&self) -> usize {
        self.p * self.s
    }

    /// Columns of the adapted weight.
    pub fn d(&self) -> usize {
        self.q * self.t
    }

    pub fn slow_count(&self) -> usize {
        if self.share_slow {
            1
        } else {
            self.n
        }
    }
}

/// Trainable parameters of one factorisation.
pub fn param_count(shape: &FactorShape) -> usize {
    let fast = shape.r * (shape.s + shape.t);
    let slow = shape.p * shape.q;
    if shape.share_slow {
        slow + shape.n * fast
    } else {
        shape.n * (slow + fast)
    }
}

/// Training memory for `trainable_params`: weight, gradient and
/// `optimizer_state_multiplier` optimizer slots per parameter.
pub fn memory_estimate(trainable_params: u64, dtype_bytes: u64, optimizer_state_multiplier: u64) -> u64 {
    trainable_params * dtype_bytes * (2 + optimizer_state_multiplier)
}

/// The slow and fast factors of one adapted weight.
#[derive(Debug, Clone, PartialEq)]
pub struct KronLoRAFactors {
    pub shape: FactorShape,
    /// `n` matrices p×q, or one when `share_slow`.
    pub slow: Vec<Tensor>,
    /// `n` matrices s×r.
    pub fast_u: Vec<Tensor>,
    /// `n` matrices r×t.
    pub fast_v: Vec<Tensor>,
}

/// Fresh factors: `H`, `u` ~ N(0, 0.02²), `v = 0`, so `ΔW = 0` exactly.
pub fn init_factors(shape: FactorShape, seed: u64) -> Result<KronLoRAFactors> {
    shape.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let slow = (0..shape.slow_count())
        .map(|_| Tensor::randn(&[shape.p, shape.q], FACTOR_INIT_STD, &mut rng))
        .collect();
    let fast_u = (0..shape.n)
        .map(|_| Tensor::randn(&[shape.s, shape.r], FACTOR_INIT_STD, &mut rng))
        .collect();
    let fast_v = (0..shape.n).map(|_| Tensor::zeros(&[shape.r, shape.t])).collect();
    Ok(KronLoRAFactors {
        shape,
        slow,
        fast_u,
        fast_v,
    })
}

impl KronLoRAFactors {
    /// Build from explicit factors, checking every extent.
    pub fn from_parts(shape: FactorShape, slow: Vec<Tensor>, fast_u: Vec<Tensor>, fast_v: Vec<Tensor>) -> Result<Self> {
        shape.validate()?;
        let f = Self {
            shape,
            slow,
            fast_u,
            fast_v,
        };
        f.check()?;
        Ok(f)
    }

    fn check(&self) -> Result<()> {
        let sh = &self.shape;
        if self.slow.len() != sh.slow_count() || self.fast_u.len() != sh.n || self.fast_v.len() != sh.n {
            return Err(dim_err!("factor counts do not match {sh:?}"));
        }
        let bad = self.slow.iter().any(|h| h.shape() != [sh.p, sh.q])
            || self.fast_u.iter().any(|u| u.shape() != [sh.s, sh.r])
            || self.fast_v.iter().any(|v| v.shape() != [sh.r, sh.t]);
        if bad {
            return Err(dim_err!("factor extents do not match {sh:?}"));
        }
        Ok(())
    }

    /// Slow factor used by term `i`.
    pub fn slow_for(&self, i: usize) -> &Tensor {
        if self.shape.share_slow {
            &self.slow[0]
        } else {
            &self.slow[i]
        }
    }

    /// Literal `Σᵢ Hᵢ ⊗ (uᵢ·vᵢ)` as a dense k×d matrix.
    pub fn materialize_delta(&self) -> Result<Tensor> {
        let mut delta = Tensor::zeros(&[self.shape.k(), self.shape.d()]);
        for i in 0..self.shape.n {
            let block = matmul(&self.fast_u[i], &self.fast_v[i])?;
            delta.add_assign(&kron(self.slow_for(i), &block)?)?;
        }
        Ok(delta)
    }

    /// `ΔW·x` for a vector `x` of length d, evaluated factor by factor.
    pub fn apply_delta(&self, x: &Tensor) -> Result<Tensor> {
        let d = self.shape.d();
        if x.numel() != d {
            return Err(dim_err!("apply_delta expects length {d}, got {}", x.numel()));
        }
        let rows = x.reshape(&[1, d])?;
        let out = self.apply_delta_rows(&rows)?;
        out.into_reshape(&[self.shape.k()])
    }

    /// Row-wise `ΔW·xⱼ` for every row `xⱼ` of an m×d matrix; returns m×k.
    pub fn apply_delta_rows(&self, rows: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let vars = FactorVars::constants(&mut g, self);
        let x = g.constant(rows.clone());
        let y = vars.apply_rows(&mut g, x)?;
        Ok(g.value(y).clone())
    }

    /// Number of trainable scalars held.
    pub fn numel(&self) -> usize {
        self.slow
            .iter()
            .chain(&self.fast_u)
            .chain(&self.fast_v)
            .map(Tensor::numel)
            .sum()
    }

    /// Named tensors, e.g. `H0`, `U1`, `V1`.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, h) in self.slow.iter().enumerate() {
            out.push((format!("H{i}"), h));
        }
        for i in 0..self.shape.n {
            out.push((format!("U{i}"), &self.fast_u[i]));
            out.push((format!("V{i}"), &self.fast_v[i]));
        }
        out
    }
}

pub fn materialize_delta(f: &KronLoRAFactors) -> Result<Tensor> {
    f.materialize_delta()
}

pub fn apply_delta(f: &KronLoRAFactors, x: &Tensor) -> Result<Tensor> {
    f.apply_delta(x)
}

/// `w0·x + ΔW·x`.
///
/// `x` is either a vector of length d (result: length k) or an m×d matrix of
/// input rows (result: m×k).
pub fn adapted_matmul(w0: &Tensor, f: &KronLoRAFactors, x: &Tensor) -> Result<Tensor> {
    let (k, d) = w0.dims2()?;
    if (k, d) != (f.shape.k(), f.shape.d()) {
        return Err(dim_err!(
            "frozen weight {k}x{d} does not match factors {}x{}",
            f.shape.k(),
            f.shape.d()
        ));
    }
    let vector = x.rank() == 1;
    let rows = if vector { x.reshape(&[1, x.numel()])? } else { x.clone() };
    let mut g = Graph::new();
    let w = g.constant(w0.clone());
    let vars = FactorVars::constants(&mut g, f);
    let xr = g.constant(rows);
    let y = adapted_linear(&mut g, w, Some(&vars), xr)?;
    let y = g.value(y).clone();
    if vector {
        y.into_reshape(&[k])
    } else {
        Ok(y)
    }
}

/// Graph handles for one factorisation.
#[derive(Debug, Clone)]
pub struct FactorVars {
    pub shape: FactorShape,
    pub slow: Vec<Var>,
    pub fast_u: Vec<Var>,
    pub fast_v: Vec<Var>,
}

impl FactorVars {
    fn constants(g: &mut Graph, f: &KronLoRAFactors) -> Self {
        Self::bind(g, f, false)
    }

    /// Place every factor on the graph as a leaf.
    pub fn bind(g: &mut Graph, f: &KronLoRAFactors, trainable: bool) -> Self {
        let mut leaf = |t: &Tensor| g.leaf(t.clone(), trainable);
        Self {
            shape: f.shape,
            slow: f.slow.iter().map(&mut leaf).collect(),
            fast_u: f.fast_u.iter().map(&mut leaf).collect(),
            fast_v: f.fast_v.iter().map(&mut leaf).collect(),
        }
    }

    fn slow_for(&self, i: usize) -> Var {
        if self.shape.share_slow {
            self.slow[0]
        } else {
            self.slow[i]
        }
    }

    /// Row-wise `ΔW·xⱼ` on the graph for an m×d input; returns m×k.
    pub fn apply_rows(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let sh = self.shape;
        let (m, d) = g.value(x).dims2()?;
        if d != sh.d() {
            return Err(dim_err!("adapter expects rows of length {}, got {d}", sh.d()));
        }
        let xr = g.reshape(x, &[m * sh.q, sh.t])?;
        let mut acc: Option<Var> = None;
        for i in 0..sh.n {
            let vt = g.transpose(self.fast_v[i])?;
            let a = g.matmul(xr, vt)?; // (m·q)×r
            let ut = g.transpose(self.fast_u[i])?;
            let b = g.matmul(a, ut)?; // (m·q)×s
            let c = g.block_left_matmul(self.slow_for(i), b)?; // (m·p)×s
            let y = g.reshape(c, &[m, sh.k()])?;
            acc = Some(match acc {
                None => y,
                Some(prev) => g.add(prev, y)?,
            });
        }
        Ok(acc.expect("n >= 1"))
    }
}

/// `x·w0ᵀ (+ x·ΔWᵀ)` for input rows `x` (m×d), giving m×k.
pub fn adapted_linear(g: &mut Graph, w0: Var, adapter: Option<&FactorVars>, x: Var) -> Result<Var> {
    let wt = g.transpose(w0)?;
    let base = g.matmul(x, wt)?;
    match adapter {
        None => Ok(base),
        Some(f) => {
            let delta = f.apply_rows(g, x)?;
            g.add(base, delta)
        }
    }
}

/// Factorisations keyed by the identifier of the adapted layer.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdapterSet {
    pub layers: BTreeMap<String, KronLoRAFactors>,
}

impl AdapterSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, layer: impl Into<String>, factors: KronLoRAFactors) {
        self.layers.insert(layer.into(), factors);
    }

    pub fn get(&self, layer: &str) -> Option<&KronLoRAFactors> {
        self.layers.get(layer)
    }

    /// Check that each adapted layer's frozen weight has the adapter's k×d.
    pub fn check_against<'a>(&self, mut weight_shape: impl FnMut(&str) -> Option<&'a [usize]>) -> Result<()> {
        for (layer, f) in &self.layers {
            let want = [f.shape.k(), f.shape.d()];
            match weight_shape(layer) {
                Some(s) if s == want => {}
                Some(s) => {
                    return Err(dim_err!("layer {layer}: frozen weight {s:?}, adapter {want:?}"));
                }
                None => return Err(Error::Config(format!("no frozen weight for adapted layer {layer}"))),
            }
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.layers.values().map(|f| param_count(&f.shape)).sum()
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn random_factors(shape: FactorShape, seed: u64) -> KronLoRAFactors {
        let mut f = init_factors(shape, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xdead_beef);
        for v in &mut f.fast_v {
            *v = Tensor::randn(v.shape(), 1.0, &mut rng);
        }
        for u in &mut f.fast_u {
            *u = Tensor::randn(u.shape(), 1.0, &mut rng);
        }
        for h in &mut f.slow {
            *h = Tensor::randn(h.shape(), 1.0, &mut rng);
        }
        f
    }

    #[test]
    fn fresh_factors_are_zero_update() {
        for share in [false, true] {
            let shape = FactorShape::new(2, 3, 4, 2, 3, 2, share).unwrap();
            let f = init_factors(shape, 11).unwrap();
            let d = f.materialize_delta().unwrap();
            assert_eq!(d.shape(), &[8, 6]);
            assert!(d.data().iter().all(|&v| v == 0.0));
            let x = Tensor::ones(&[6]);
            assert!(f.apply_delta(&x).unwrap().data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let shape = FactorShape::new(2, 2, 3, 3, 1, 2, false).unwrap();
        let a = init_factors(shape, 5).unwrap();
        let b = init_factors(shape, 5).unwrap();
        assert!(a.slow.iter().zip(&b.slow).all(|(x, y)| x.bitwise_eq(y)));
        assert!(a.fast_u.iter().zip(&b.fast_u).all(|(x, y)| x.bitwise_eq(y)));
        let c = init_factors(shape, 6).unwrap();
        assert!(a.slow.iter().zip(&c.slow).any(|(x, y)| x != y));
    }

    #[test]
    fn hand_expansion() {
        let shape = FactorShape::new(1, 1, 2, 2, 1, 1, false).unwrap();
        let f = KronLoRAFactors::from_parts(
            shape,
            vec![Tensor::from_rows(&[&[1.0]])],
            vec![Tensor::from_rows(&[&[1.0], &[0.0]])],
            vec![Tensor::from_rows(&[&[2.0, 0.0]])],
        )
        .unwrap();
        assert_eq!(
            f.materialize_delta().unwrap(),
            Tensor::from_rows(&[&[2.0, 0.0], &[0.0, 0.0]])
        );
    }

    #[test]
    fn opposite_slow_factors_cancel() {
        let shape = FactorShape::new(2, 2, 2, 3, 2, 2, false).unwrap();
        let mut f = random_factors(shape, 3);
        f.slow[1] = f.slow[0].scale(-1.0);
        f.fast_u[1] = f.fast_u[0].clone();
        f.fast_v[1] = f.fast_v[0].clone();
        let d = f.materialize_delta().unwrap();
        assert!(d.max_abs() == 0.0, "{}", d.max_abs());
    }

    #[test]
    fn materialize_matches_kron_oracle() {
        let shape = FactorShape::new(3, 2, 2, 4, 2, 3, false).unwrap();
        let f = random_factors(shape, 8);
        let mut want = Tensor::zeros(&[6, 8]);
        for i in 0..3 {
            let uv = matmul(&f.fast_u[i], &f.fast_v[i]).unwrap();
            want.add_assign(&kron(&f.slow[i], &uv).unwrap()).unwrap();
        }
        assert!(f.materialize_delta().unwrap().max_abs_diff(&want).unwrap() <= 1e-12);
    }

    #[test]
    fn apply_is_linear() {
        let shape = FactorShape::new(2, 2, 3, 2, 2, 2, true).unwrap();
        let f = random_factors(shape, 9);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::randn(&[4], 1.0, &mut rng);
        let y = Tensor::randn(&[4], 1.0, &mut rng);
        let (a, b) = (0.7, -1.3);
        let lhs = f.apply_delta(&x.scale(a).add(&y.scale(b)).unwrap()).unwrap();
        let rhs = f
            .apply_delta(&x)
            .unwrap()
            .scale(a)
            .add(&f.apply_delta(&y).unwrap().scale(b))
            .unwrap();
        assert!(lhs.max_abs_diff(&rhs).unwrap() <= 1e-10);
    }

    #[test]
    fn apply_rejects_wrong_length() {
        let f = init_factors(FactorShape::new(2, 2, 2, 2, 1, 1, false).unwrap(), 0).unwrap();
        assert!(matches!(f.apply_delta(&Tensor::zeros(&[5])), Err(Error::Dimension(_))));
    }

    #[test]
    fn adapted_matmul_cases() {
        let shape = FactorShape::new(2, 2, 3, 2, 2, 2, false).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let w0 = Tensor::randn(&[6, 4], 1.0, &mut rng);
        let x = Tensor::randn(&[4], 1.0, &mut rng);
        let fresh = init_factors(shape, 2).unwrap();
        let base = matmul(&w0, &x.reshape(&[4, 1]).unwrap()).unwrap();
        let out = adapted_matmul(&w0, &fresh, &x).unwrap();
        assert!(out.reshape(&[6, 1]).unwrap().bitwise_eq(&base));

        let f = random_factors(shape, 12);
        let dense = w0.add(&f.materialize_delta().unwrap()).unwrap();
        let want = matmul(&dense, &x.reshape(&[4, 1]).unwrap()).unwrap();
        let got = adapted_matmul(&w0, &f, &x).unwrap();
        assert!(got.reshape(&[6, 1]).unwrap().max_abs_diff(&want).unwrap() <= 1e-11);

        let rows = Tensor::randn(&[3, 4], 1.0, &mut rng);
        let got = adapted_matmul(&w0, &f, &rows).unwrap();
        let want = matmul(&rows, &dense.transpose().unwrap()).unwrap();
        assert!(got.max_abs_diff(&want).unwrap() <= 1e-11);

        assert!(adapted_matmul(&Tensor::zeros(&[5, 4]), &f, &x).is_err());
    }

    #[test]
    fn frozen_base_receives_no_gradient() {
        let shape = FactorShape::new(2, 2, 2, 2, 1, 1, false).unwrap();
        let f = random_factors(shape, 1);
        let mut g = Graph::new();
        let w0 = g.constant(Tensor::ones(&[4, 4]));
        let fv = FactorVars::bind(&mut g, &f, true);
        let x = g.constant(Tensor::ones(&[2, 4]));
        let y = adapted_linear(&mut g, w0, Some(&fv), x).unwrap();
        let l = g.sum(y);
        let grads = g.backward(l).unwrap();
        assert!(grads.get(w0).is_none());
        assert!(grads.get(fv.fast_v[0]).is_some());
    }

    #[test]
    fn factor_gradients_match_finite_differences() {
        use crate::numerics::grad_check;
        for share in [false, true] {
            let shape = FactorShape::new(2, 3, 2, 2, 2, 2, share).unwrap();
            let f = random_factors(shape, 21);
            let mut rng = ChaCha8Rng::seed_from_u64(2);
            let x = Tensor::randn(&[3, 6], 1.0, &mut rng);
            let target = Tensor::randn(&[3, 4], 1.0, &mut rng);
            let mut leaves: Vec<Tensor> = f.slow.clone();
            leaves.extend(f.fast_u.iter().cloned());
            leaves.extend(f.fast_v.iter().cloned());
            let ns = shape.slow_count();
            let report = grad_check(&leaves, |g, v| {
                let fv = FactorVars {
                    shape,
                    slow: v[..ns].to_vec(),
                    fast_u: v[ns..ns + 2].to_vec(),
                    fast_v: v[ns + 2..].to_vec(),
                };
                let xv = g.constant(x.clone());
                let y = fv.apply_rows(g, xv)?;
                let t = g.constant(target.clone());
                let d = g.sub(y, t)?;
                let sq = g.square(d);
                Ok(g.mean(sq))
            })
            .unwrap();
            assert!(report.max_rel_err <= 1e-4, "{report:?}");
        }
    }

    #[test]
    fn param_count_cases() {
        for n in 1..=3 {
            let shared = FactorShape::new(2, 2, 3, 3, 1, n, true).unwrap();
            assert_eq!(param_count(&shared), 4 + 6 * n);
            let per = FactorShape::new(2, 2, 3, 3, 1, n, false).unwrap();
            assert_eq!(param_count(&per), 10 * n);
        }
        let big = FactorShape::for_weight(768, 768, 4, 4, 4, 4, true).unwrap();
        assert_eq!((big.s, big.t), (192, 192));
        assert_eq!(param_count(&big), 6160);
        assert!(param_count(&big) < 768 * 768);
    }

    #[test]
    fn numel_equals_param_count() {
        let shape = FactorShape::new(2, 3, 4, 5, 2, 3, false).unwrap();
        assert_eq!(init_factors(shape, 0).unwrap().numel(), param_count(&shape));
        let shape = FactorShape {
            share_slow: true,
            ..shape
        };
        assert_eq!(init_factors(shape, 0).unwrap().numel(), param_count(&shape));
    }

    #[test]
    fn memory_estimate_cases() {
        assert_eq!(memory_estimate(0, 4, 2), 0);
        assert_eq!(memory_estimate(1000, 4, 2), 16000);
        let shape = FactorShape::for_weight(64, 64, 2, 2, 2, 2, true).unwrap();
        assert!(memory_estimate(param_count(&shape) as u64, 4, 2) < memory_estimate(64 * 64, 4, 2));
    }

    #[test]
    fn adapter_set_checks_base_shapes() {
        let mut set = AdapterSet::new();
        let shape = FactorShape::for_weight(4, 6, 2, 2, 1, 1, false).unwrap();
        set.insert("layer.q", init_factors(shape, 0).unwrap());
        let good = [4usize, 6];
        let bad = [6usize, 4];
        assert!(set.check_against(|_| Some(&good[..])).is_ok());
        assert!(set.check_against(|_| Some(&bad[..])).is_err());
        assert!(set.check_against(|_| None).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(500))]

        #[test]
        fn shared_never_exceeds_per_term(p in 1usize..6, q in 1usize..6, s in 1usize..6,
                                         t in 1usize..6, r in 1usize..6, n in 1usize..6) {
            let shared = FactorShape::new(p, q, s, t, r, n, true).unwrap();
            let per = FactorShape { share_slow: false, ..shared };
            prop_assert!(param_count(&shared) <= param_count(&per));
        }

        #[test]
        fn factored_apply_matches_dense(p in 1usize..=4, q in 1usize..=4, s in 1usize..=4,
                                        t in 1usize..=4, r in 1usize..=4, n in 1usize..=3,
                                        share in any::<bool>(), seed in any::<u64>()) {
            let shape = FactorShape::new(p, q, s, t, r, n, share).unwrap();
            let f = random_factors(shape, seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
            let x = Tensor::randn(&[shape.d()], 1.0, &mut rng);
            let dense = matmul(&f.materialize_delta().unwrap(), &x.reshape(&[shape.d(), 1]).unwrap()).unwrap();
            let fast = f.apply_delta(&x).unwrap().into_reshape(&[shape.k(), 1]).unwrap();
            prop_assert!(fast.max_abs_diff(&dense).unwrap() <= 1e-10);
        }
    }
}
