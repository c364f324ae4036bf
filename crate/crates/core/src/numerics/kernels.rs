//! Raw numeric kernels over [`Tensor`]s.
//!
//! These are the non-differentiable forms; [`super::autograd`] reuses the
//! slice-level helpers for its forward and backward passes.

use crate::error::{dim_err, Error, Result};

use super::Tensor;

/// `c = op(a)·op(b) + beta·c` where `op(a)` is `m×k` and `op(b)` is `k×n`.
///
/// `a_t` / `b_t` say the operand is stored transposed.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(m: usize, k: usize, n: usize, a: &[f64], a_t: bool, b: &[f64], b_t: bool, c: &mut [f64], beta: f64) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above guarantee every strided access stays inside
    // the slices, and `c` does not alias `a` or `b` (distinct borrows).
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Matrix product of an `m×k` and a `k×n` matrix.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return Err(dim_err!("matmul inner dims differ: {m}x{k} · {k2}x{n}"));
    }
    let mut out = vec![0.0; m * n];
    gemm(m, k, n, a.data(), false, b.data(), false, &mut out, 0.0);
    Tensor::new(&[m, n], out)
}

/// Kronecker product: `out[i·s+k, j·t+l] = a[i,j]·b[k,l]`.
pub fn kron(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (p, q) = a.dims2()?;
    let (s, t) = b.dims2()?;
    let cols = q * t;
    let mut out = vec![0.0; p * s * cols];
    for i in 0..p {
        for j in 0..q {
            let aij = a.at2(i, j);
            for k in 0..s {
                let row = (i * s + k) * cols + j * t;
                for l in 0..t {
                    out[row + l] = aij * b.at2(k, l);
                }
            }
        }
    }
    Tensor::new(&[p * s, cols], out)
}

/// `kron(a, b)·x` without forming the Kronecker product.
///
/// With `X = reshape(x, q, t)` (row-major) this is `rowvec(a·X·bᵀ)`.
pub fn kron_matvec(a: &Tensor, b: &Tensor, x: &Tensor) -> Result<Tensor> {
    let (p, q) = a.dims2()?;
    let (s, t) = b.dims2()?;
    if x.numel() != q * t {
        return Err(dim_err!(
            "kron_matvec expects a vector of length {}, got {}",
            q * t,
            x.numel()
        ));
    }
    // X·bᵀ : q×s
    let mut xb = vec![0.0; q * s];
    gemm(q, t, s, x.data(), false, b.data(), true, &mut xb, 0.0);
    let mut y = vec![0.0; p * s];
    gemm(p, q, s, a.data(), false, &xb, false, &mut y, 0.0);
    Tensor::new(&[p * s], y)
}

/// Output spatial extent of a padded `kernel`×`kernel` convolution.
pub(crate) fn conv_out_extent(extent: usize, stride: usize) -> usize {
    (extent - 1) / stride + 1
}

/// Unfold `input` (C×H×W) into a `(C·k²) × (H'·W')` patch matrix.
pub(crate) fn im2col(input: &[f64], (c, h, w): (usize, usize, usize), kernel: usize, stride: usize) -> Vec<f64> {
    let pad = kernel / 2;
    let (ho, wo) = (conv_out_extent(h, stride), conv_out_extent(w, stride));
    let cols = ho * wo;
    let mut out = vec![0.0; c * kernel * kernel * cols];
    for ci in 0..c {
        let plane = &input[ci * h * w..(ci + 1) * h * w];
        for ky in 0..kernel {
            for kx in 0..kernel {
                let row = (ci * kernel + ky) * kernel + kx;
                let dst = &mut out[row * cols..(row + 1) * cols];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src_row = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[oy * wo + ox] = src_row[ix as usize];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Adjoint of [`im2col`]: scatter-add a patch matrix back onto C×H×W.
pub(crate) fn col2im(cols_data: &[f64], (c, h, w): (usize, usize, usize), kernel: usize, stride: usize) -> Vec<f64> {
    let pad = kernel / 2;
    let (ho, wo) = (conv_out_extent(h, stride), conv_out_extent(w, stride));
    let cols = ho * wo;
    let mut out = vec![0.0; c * h * w];
    for ci in 0..c {
        let plane = &mut out[ci * h * w..(ci + 1) * h * w];
        for ky in 0..kernel {
            for kx in 0..kernel {
                let row = (ci * kernel + ky) * kernel + kx;
                let src = &cols_data[row * cols..(row + 1) * cols];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            plane[iy as usize * w + ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
    out
}

pub(crate) struct ConvGeometry {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl ConvGeometry {
    pub fn out_shape(&self) -> [usize; 3] {
        [
            self.c_out,
            conv_out_extent(self.h, self.stride),
            conv_out_extent(self.w, self.stride),
        ]
    }
}

pub(crate) fn conv_geometry(
    input: &Tensor,
    kernels: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
) -> Result<ConvGeometry> {
    if stride != 1 && stride != 2 {
        return Err(Error::Parameter(format!("conv2d stride must be 1 or 2, got {stride}")));
    }
    let (c_in, h, w) = input.dims3()?;
    let (c_out, kc, kh, kw) = match kernels.shape() {
        &[a, b, c, d] => (a, b, c, d),
        s => return Err(dim_err!("conv2d kernels must be rank 4, got {s:?}")),
    };
    if kc != c_in {
        return Err(dim_err!("conv2d kernels expect {kc} channels, input has {c_in}"));
    }
    if kh != kw || (kh != 1 && kh != 3) {
        return Err(dim_err!("conv2d supports 1x1 and 3x3 kernels, got {kh}x{kw}"));
    }
    if h < kh || w < kw {
        return Err(dim_err!("conv2d input {h}x{w} smaller than kernel {kh}x{kw}"));
    }
    if let Some(b) = bias {
        if b.shape() != [c_out] {
            return Err(dim_err!("conv2d bias shape {:?}, expected [{c_out}]", b.shape()));
        }
    }
    Ok(ConvGeometry {
        c_in,
        h,
        w,
        c_out,
        kernel: kh,
        stride,
    })
}

/// Forward convolution on raw slices; returns `(output, patch matrix)`.
pub(crate) fn conv2d_raw(
    geo: &ConvGeometry,
    input: &[f64],
    kernels: &[f64],
    bias: Option<&[f64]>,
) -> (Vec<f64>, Vec<f64>) {
    let [_, ho, wo] = geo.out_shape();
    let p = ho * wo;
    let kdim = geo.c_in * geo.kernel * geo.kernel;
    let cols = if geo.kernel == 1 && geo.stride == 1 {
        input.to_vec()
    } else {
        im2col(input, (geo.c_in, geo.h, geo.w), geo.kernel, geo.stride)
    };
    let mut out = vec![0.0; geo.c_out * p];
    if let Some(b) = bias {
        for (co, row) in out.chunks_mut(p).enumerate() {
            row.fill(b[co]);
        }
    }
    gemm(geo.c_out, kdim, p, kernels, false, &cols, false, &mut out, 1.0);
    (out, cols)
}

/// 2-D convolution with zero padding `kernel/2`.
///
/// `input` is C_in×H×W, `kernels` C_out×C_in×k×k with k ∈ {1, 3}; the output
/// extent is `ceil(H/stride)`.
pub fn conv2d(input: &Tensor, kernels: &Tensor, stride: usize, bias: Option<&Tensor>) -> Result<Tensor> {
    let geo = conv_geometry(input, kernels, bias, stride)?;
    let (out, _) = conv2d_raw(&geo, input.data(), kernels.data(), bias.map(|b| b.data()));
    Tensor::new(&geo.out_shape(), out)
}

/// Per-channel normalization over spatial positions; returns the output and
/// the per-channel `1/sqrt(var + eps)`.
pub(crate) fn channel_norm_raw(z: &[f64], c: usize, hw: usize, eps: f64) -> (Vec<f64>, Vec<f64>) {
    let mut out = vec![0.0; c * hw];
    let mut inv_std = vec![0.0; c];
    for ch in 0..c {
        let x = &z[ch * hw..(ch + 1) * hw];
        let mean = x.iter().sum::<f64>() / hw as f64;
        let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / hw as f64;
        let inv = 1.0 / (var + eps).sqrt();
        inv_std[ch] = inv;
        for (o, v) in out[ch * hw..(ch + 1) * hw].iter_mut().zip(x) {
            *o = (v - mean) * inv;
        }
    }
    (out, inv_std)
}

/// Parameter-free instance normalization of a C×H×W tensor.
pub fn channel_norm(z: &Tensor, eps: f64) -> Result<Tensor> {
    let (c, h, w) = z.dims3()?;
    if h * w < 2 {
        return Err(dim_err!("channel_norm needs at least 2 spatial positions"));
    }
    let (out, _) = channel_norm_raw(z.data(), c, h * w, eps);
    Tensor::new(z.shape(), out)
}

pub(crate) fn softmax_rows_raw(x: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (src, dst) in x.chunks(n).zip(out.chunks_mut(n)) {
        let max = src.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let mut total = 0.0;
        for (d, &s) in dst.iter_mut().zip(src) {
            *d = (s - max).exp();
            total += *d;
        }
        for d in dst.iter_mut() {
            *d /= total;
        }
    }
    out
}

/// Softmax over the last axis, with max subtraction.
pub fn softmax_lastdim(x: &Tensor) -> Tensor {
    let n = *x.shape().last().expect("tensor rank >= 1");
    let out = softmax_rows_raw(x.data(), n);
    Tensor::new(x.shape(), out).expect("shape preserved")
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn matmul_oracle(a: &Tensor, b: &Tensor) -> Tensor {
        let (m, k) = a.dims2().unwrap();
        let (_, n) = b.dims2().unwrap();
        let mut out = Tensor::zeros(&[m, n]);
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0;
                for l in 0..k {
                    acc += a.at2(i, l) * b.at2(l, j);
                }
                out.set2(i, j, acc);
            }
        }
        out
    }

    fn conv_oracle(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize) -> Tensor {
        let (ci, h, wd) = x.dims3().unwrap();
        let co = w.shape()[0];
        let k = w.shape()[2];
        let pad = (k / 2) as isize;
        let ho = h.div_ceil(stride);
        let wo = wd.div_ceil(stride);
        let mut out = vec![0.0; co * ho * wo];
        for o in 0..co {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = b.data()[o];
                    for c in 0..ci {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * stride + ky) as isize - pad;
                                let ix = (ox * stride + kx) as isize - pad;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                    acc += w.data()[((o * ci + c) * k + ky) * k + kx]
                                        * x.data()[(c * h + iy as usize) * wd + ix as usize];
                                }
                            }
                        }
                    }
                    out[(o * ho + oy) * wo + ox] = acc;
                }
            }
        }
        Tensor::new(&[co, ho, wo], out).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_case() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = Tensor::randn(&[3, 4], 1.0, &mut rng);
        assert_eq!(matmul(&Tensor::identity(3), &b).unwrap(), b);
        let a = Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let ones = Tensor::from_rows(&[&[1.0], &[1.0]]);
        assert_eq!(matmul(&a, &ones).unwrap().data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = Tensor::randn(&[7, 5], 1.0, &mut rng);
        let b = Tensor::randn(&[5, 3], 1.0, &mut rng);
        let d = matmul(&a, &b).unwrap().max_abs_diff(&matmul_oracle(&a, &b)).unwrap();
        assert!(d <= 1e-12, "{d}");
    }

    #[test]
    fn matmul_rejects_mismatch() {
        let a = Tensor::zeros(&[2, 3]);
        assert!(matches!(matmul(&a, &a), Err(Error::Dimension(_))));
    }

    #[test]
    fn kron_cases() {
        let b = Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let k = kron(&Tensor::identity(2), &b).unwrap();
        let expect = Tensor::from_rows(&[
            &[1.0, 2.0, 0.0, 0.0],
            &[3.0, 4.0, 0.0, 0.0],
            &[0.0, 0.0, 1.0, 2.0],
            &[0.0, 0.0, 3.0, 4.0],
        ]);
        assert_eq!(k, expect);

        let a = Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let row = Tensor::from_rows(&[&[0.0, 5.0]]);
        let k = kron(&a, &row).unwrap();
        assert_eq!(k, Tensor::from_rows(&[&[0.0, 5.0, 0.0, 10.0], &[0.0, 15.0, 0.0, 20.0]]));

        let k = kron(&Tensor::zeros(&[3, 2]), &Tensor::zeros(&[4, 5])).unwrap();
        assert_eq!(k.shape(), &[12, 10]);
    }

    #[test]
    fn kron_matvec_cases() {
        let x = Tensor::new(&[6], (1..=6).map(f64::from).collect()).unwrap();
        let y = kron_matvec(&Tensor::identity(2), &Tensor::identity(3), &x).unwrap();
        assert_eq!(y, x);

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = Tensor::randn(&[2, 2], 1.0, &mut rng);
        let b = Tensor::randn(&[3, 3], 1.0, &mut rng);
        let x = Tensor::randn(&[6], 1.0, &mut rng);
        let dense = matmul(&kron(&a, &b).unwrap(), &x.reshape(&[6, 1]).unwrap()).unwrap();
        let fast = kron_matvec(&a, &b, &x).unwrap();
        assert!(fast.reshape(&[6, 1]).unwrap().max_abs_diff(&dense).unwrap() <= 1e-12);

        let z = kron_matvec(&Tensor::zeros(&[2, 2]), &b, &x).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));

        assert!(kron_matvec(&a, &b, &Tensor::zeros(&[8])).is_err());
    }

    #[test]
    fn conv_zero_identity_and_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::randn(&[2, 5, 6], 1.0, &mut rng);
        let zero = conv2d(&x, &Tensor::zeros(&[3, 2, 3, 3]), 1, Some(&Tensor::zeros(&[3]))).unwrap();
        assert!(zero.data().iter().all(|&v| v == 0.0));

        let mut ident = Tensor::zeros(&[2, 2, 3, 3]);
        ident.data_mut()[4] = 1.0; // out 0 <- in 0 centre
        ident.data_mut()[27 + 4] = 1.0; // out 1 <- in 1 centre
        assert_eq!(conv2d(&x, &ident, 1, None).unwrap(), x);

        for stride in [1, 2] {
            for k in [1, 3] {
                let w = Tensor::randn(&[3, 2, k, k], 1.0, &mut rng);
                let b = Tensor::randn(&[3], 1.0, &mut rng);
                let got = conv2d(&x, &w, stride, Some(&b)).unwrap();
                let want = conv_oracle(&x, &w, &b, stride);
                assert_eq!(got.shape(), want.shape());
                assert!(got.max_abs_diff(&want).unwrap() <= 1e-12);
            }
        }
        assert_eq!(
            conv2d(&x, &Tensor::zeros(&[1, 2, 3, 3]), 2, None).unwrap().shape(),
            &[1, 3, 3]
        );
    }

    #[test]
    fn conv_bad_stride() {
        let x = Tensor::zeros(&[1, 4, 4]);
        let w = Tensor::zeros(&[1, 1, 3, 3]);
        assert!(matches!(conv2d(&x, &w, 3, None), Err(Error::Parameter(_))));
    }

    #[test]
    fn channel_norm_properties() {
        let c = Tensor::full(&[1, 3, 3], 2.5);
        assert!(channel_norm(&c, 1e-5).unwrap().data().iter().all(|&v| v == 0.0));

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        // eps only vanishes from the moments when the variance dwarfs it
        let z = Tensor::randn(&[3, 4, 4], 100.0, &mut rng);
        let n = channel_norm(&z, 1e-5).unwrap();
        for ch in n.data().chunks(16) {
            let mean = ch.iter().sum::<f64>() / 16.0;
            let var = ch.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0;
            assert!(mean.abs() <= 1e-10);
            assert!((var - 1.0).abs() <= 1e-6, "{var}");
        }
        let shifted = z.map(|v| 3.0 * v - 7.0);
        let d = channel_norm(&shifted, 1e-5).unwrap().max_abs_diff(&n).unwrap();
        assert!(d <= 1e-8, "{d}");
    }

    #[test]
    fn softmax_cases() {
        let u = softmax_lastdim(&Tensor::full(&[4], 0.3));
        for &v in u.data() {
            assert!((v - 0.25).abs() < 1e-15);
        }
        let s = softmax_lastdim(&Tensor::new(&[2], vec![0.0, 3f64.ln()]).unwrap());
        assert!((s.data()[0] - 0.25).abs() < 1e-15 && (s.data()[1] - 0.75).abs() < 1e-15);

        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = Tensor::randn(&[5, 7], 3.0, &mut rng);
        let a = softmax_lastdim(&x);
        let b = softmax_lastdim(&x.map(|v| v + 123.0));
        assert!(a.max_abs_diff(&b).unwrap() <= 1e-12);
        for row in a.data().chunks(7) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
            assert!(row.iter().all(|&v| v > 0.0));
        }
    }

    mod props {
        use proptest::prelude::*;

        use super::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(200))]

            #[test]
            fn kron_matvec_matches_dense(p in 1usize..=6, q in 1usize..=6, s in 1usize..=6,
                                         t in 1usize..=6, seed in any::<u64>()) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let a = Tensor::randn(&[p, q], 1.0, &mut rng);
                let b = Tensor::randn(&[s, t], 1.0, &mut rng);
                let x = Tensor::randn(&[q * t], 1.0, &mut rng);
                let dense = matmul(&kron(&a, &b).unwrap(), &x.reshape(&[q * t, 1]).unwrap()).unwrap();
                let fast = kron_matvec(&a, &b, &x).unwrap().into_reshape(&[p * s, 1]).unwrap();
                prop_assert!(fast.max_abs_diff(&dense).unwrap() <= 1e-11);
            }

            #[test]
            fn kron_mixed_product(seed in any::<u64>()) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let m: Vec<Tensor> = (0..4).map(|_| Tensor::randn(&[2, 2], 1.0, &mut rng)).collect();
                let lhs = matmul(&kron(&m[0], &m[1]).unwrap(), &kron(&m[2], &m[3]).unwrap()).unwrap();
                let rhs = kron(&matmul(&m[0], &m[2]).unwrap(), &matmul(&m[1], &m[3]).unwrap()).unwrap();
                prop_assert!(lhs.max_abs_diff(&rhs).unwrap() <= 1e-10);
            }
        }
    }
}
