//! Numeric kernels shared by the tape and by standalone callers.
//!
//! The tape replays these exact functions when asked to re-execute a forward
//! pass, so every kernel must be deterministic: fixed loop order, sequential
//! reductions, no parallel accumulation.

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

// ── matrix products ─────────────────────────────────────────────────────

/// C[m,n] = A[m,k] · B[k,n]
pub fn matmul<E: Element>(a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
    let (m, k) = (a.rows(), a.cols());
    let (kb, n) = (b.rows(), b.cols());
    if k != kb {
        return Err(Error::shape("matmul", b.shape(), &[k, n]));
    }
    let mut out = vec![E::zero(); m * n];
    for i in 0..m {
        let arow = a.row(i);
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &aik) in arow.iter().enumerate() {
            let brow = b.row(p);
            for j in 0..n {
                orow[j] += aik * brow[j];
            }
        }
    }
    Tensor::from_vec(vec![m, n], out)
}

/// C[m,n] = A[m,k] · B[n,k]ᵀ  (row-by-row dot products)
pub fn matmul_nt<E: Element>(a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
    let (m, k) = (a.rows(), a.cols());
    let (n, kb) = (b.rows(), b.cols());
    if k != kb {
        return Err(Error::shape("matmul_nt", b.shape(), &[n, k]));
    }
    let mut out = vec![E::zero(); m * n];
    for i in 0..m {
        let arow = a.row(i);
        for j in 0..n {
            let brow = b.row(j);
            let mut acc = E::zero();
            for p in 0..k {
                acc += arow[p] * brow[p];
            }
            out[i * n + j] = acc;
        }
    }
    Tensor::from_vec(vec![m, n], out)
}

/// C[k,n] = A[m,k]ᵀ · B[m,n]
pub fn matmul_tn<E: Element>(a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
    let (m, k) = (a.rows(), a.cols());
    let (mb, n) = (b.rows(), b.cols());
    if m != mb {
        return Err(Error::shape("matmul_tn", b.shape(), &[m, n]));
    }
    let mut out = vec![E::zero(); k * n];
    for i in 0..m {
        let arow = a.row(i);
        let brow = b.row(i);
        for (p, &aip) in arow.iter().enumerate() {
            let orow = &mut out[p * n..(p + 1) * n];
            for j in 0..n {
                orow[j] += aip * brow[j];
            }
        }
    }
    Tensor::from_vec(vec![k, n], out)
}

pub fn transpose<E: Element>(a: &Tensor<E>) -> Tensor<E> {
    let (m, n) = (a.rows(), a.cols());
    let mut out = vec![E::zero(); m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a.at(i, j);
        }
    }
    Tensor::from_vec(vec![n, m], out).expect("transpose volume")
}

// ── softmax ─────────────────────────────────────────────────────────────

/// Row-wise softmax with max subtraction.
pub fn softmax_rows<E: Element>(logits: &Tensor<E>) -> Tensor<E> {
    let (r, c) = (logits.rows(), logits.cols());
    let mut out = vec![E::zero(); r * c];
    for i in 0..r {
        let row = logits.row(i);
        let mut m = row[0];
        for &x in &row[1..] {
            m = m.max(x);
        }
        let orow = &mut out[i * c..(i + 1) * c];
        let mut sum = E::zero();
        for (o, &x) in orow.iter_mut().zip(row) {
            *o = (x - m).exp();
            sum += *o;
        }
        for o in orow.iter_mut() {
            *o = *o / sum;
        }
    }
    Tensor::from_vec(vec![r, c], out).expect("softmax volume")
}

/// Row-wise softmax of `logits + mask`, where mask entries are either `0`
/// or `−∞`. Masked positions come out as exact `0.0` (because
/// `exp(−∞ − max) == 0` in IEEE arithmetic), and each row of the result
/// sums to 1. A row whose every position is masked is an error.
pub fn masked_softmax<E: Element>(logits: &Tensor<E>, mask: &Tensor<E>) -> Result<Tensor<E>> {
    if logits.shape() != mask.shape() {
        return Err(Error::shape("masked_softmax", mask.shape(), logits.shape()));
    }
    let (r, c) = (logits.rows(), logits.cols());
    let mut out = vec![E::zero(); r * c];
    for i in 0..r {
        let lrow = logits.row(i);
        let mrow = mask.row(i);
        // max over unmasked entries only
        let mut m = E::neg_infinity();
        for j in 0..c {
            let s = lrow[j] + mrow[j];
            if s.is_finite() {
                m = m.max(s);
            }
        }
        if !m.is_finite() {
            return Err(Error::AllMaskedRow { row: i });
        }
        let orow = &mut out[i * c..(i + 1) * c];
        let mut sum = E::zero();
        for j in 0..c {
            let e = ((lrow[j] + mrow[j]) - m).exp();
            orow[j] = e;
            sum += e;
        }
        for o in orow.iter_mut() {
            *o = *o / sum;
        }
    }
    Tensor::from_vec(vec![r, c], out)
}

// ── normalization / pointwise ───────────────────────────────────────────

/// v / ‖v‖₁. Errors with `ZeroMass` when the L1 norm vanishes.
pub fn l1_normalize<E: Element>(v: &Tensor<E>) -> Result<Tensor<E>> {
    let mut norm = E::zero();
    for &x in v.data() {
        norm += x.abs();
    }
    if !(norm > E::zero()) {
        return Err(Error::ZeroMass);
    }
    Ok(v.map(|x| x / norm))
}

#[inline]
pub fn sigmoid_scalar<E: Element>(x: E) -> E {
    // split on sign for numeric stability at large |x|
    if x >= E::zero() {
        E::one() / (E::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (E::one() + e)
    }
}

pub fn sigmoid<E: Element>(t: &Tensor<E>) -> Tensor<E> {
    t.map(sigmoid_scalar)
}

pub fn silu<E: Element>(t: &Tensor<E>) -> Tensor<E> {
    t.map(|x| x * sigmoid_scalar(x))
}

// ── layer norm ──────────────────────────────────────────────────────────

/// Per-row layer norm over the last axis: `y = γ·(x−μ)/√(σ²+ε) + β`.
/// Returns `(y, mean, rstd)`; the statistics are reused by the backward pass.
pub fn layernorm_forward<E: Element>(
    x: &Tensor<E>,
    gamma: &Tensor<E>,
    beta: &Tensor<E>,
    eps: E,
) -> (Tensor<E>, Vec<E>, Vec<E>) {
    let (r, c) = (x.rows(), x.cols());
    debug_assert_eq!(gamma.len(), c);
    debug_assert_eq!(beta.len(), c);
    let cn = E::from_f64(c as f64);
    let mut out = vec![E::zero(); r * c];
    let mut means = Vec::with_capacity(r);
    let mut rstds = Vec::with_capacity(r);
    for i in 0..r {
        let row = x.row(i);
        let mut mu = E::zero();
        for &v in row {
            mu += v;
        }
        mu = mu / cn;
        let mut var = E::zero();
        for &v in row {
            let d = v - mu;
            var += d * d;
        }
        var = var / cn;
        let rstd = E::one() / (var + eps).sqrt();
        let orow = &mut out[i * c..(i + 1) * c];
        for j in 0..c {
            orow[j] = gamma.data()[j] * ((row[j] - mu) * rstd) + beta.data()[j];
        }
        means.push(mu);
        rstds.push(rstd);
    }
    (Tensor::from_vec(vec![r, c], out).expect("layernorm volume"), means, rstds)
}

// ── 3×3 convolution (NCHW single image, zero padding 1) ────────────────

/// out[o,y,x] = bias[o] + Σ_{i,ky,kx} w[o,i,ky,kx] · in[i, y+ky−1, x+kx−1]
pub fn conv3x3_forward<E: Element>(
    input: &Tensor<E>,
    weight: &Tensor<E>,
    bias: &Tensor<E>,
    c_in: usize,
    c_out: usize,
    h: usize,
    w: usize,
) -> Tensor<E> {
    debug_assert_eq!(input.len(), c_in * h * w);
    debug_assert_eq!(weight.len(), c_out * c_in * 9);
    debug_assert_eq!(bias.len(), c_out);
    let mut out = vec![E::zero(); c_out * h * w];
    let idata = input.data();
    let wdata = weight.data();
    for o in 0..c_out {
        let b = bias.data()[o];
        for y in 0..h {
            for x in 0..w {
                let mut acc = b;
                for i in 0..c_in {
                    let wbase = (o * c_in + i) * 9;
                    let ibase = i * h * w;
                    for ky in 0..3usize {
                        let yy = y as isize + ky as isize - 1;
                        if yy < 0 || yy >= h as isize {
                            continue;
                        }
                        let irow = ibase + yy as usize * w;
                        for kx in 0..3usize {
                            let xx = x as isize + kx as isize - 1;
                            if xx < 0 || xx >= w as isize {
                                continue;
                            }
                            acc += wdata[wbase + ky * 3 + kx] * idata[irow + xx as usize];
                        }
                    }
                }
                out[(o * h + y) * w + x] = acc;
            }
        }
    }
    Tensor::from_vec(vec![c_out, h, w], out).expect("conv volume")
}

/// Gradients of `conv3x3_forward` w.r.t. input, weight, and bias.
pub fn conv3x3_backward<E: Element>(
    input: &Tensor<E>,
    weight: &Tensor<E>,
    grad_out: &[E],
    c_in: usize,
    c_out: usize,
    h: usize,
    w: usize,
) -> (Vec<E>, Vec<E>, Vec<E>) {
    let idata = input.data();
    let wdata = weight.data();
    let mut d_in = vec![E::zero(); c_in * h * w];
    let mut d_w = vec![E::zero(); c_out * c_in * 9];
    let mut d_b = vec![E::zero(); c_out];
    for o in 0..c_out {
        for y in 0..h {
            for x in 0..w {
                let g = grad_out[(o * h + y) * w + x];
                d_b[o] += g;
                for i in 0..c_in {
                    let wbase = (o * c_in + i) * 9;
                    let ibase = i * h * w;
                    for ky in 0..3usize {
                        let yy = y as isize + ky as isize - 1;
                        if yy < 0 || yy >= h as isize {
                            continue;
                        }
                        let irow = ibase + yy as usize * w;
                        for kx in 0..3usize {
                            let xx = x as isize + kx as isize - 1;
                            if xx < 0 || xx >= w as isize {
                                continue;
                            }
                            let xi = irow + xx as usize;
                            d_w[wbase + ky * 3 + kx] += g * idata[xi];
                            d_in[xi] += g * wdata[wbase + ky * 3 + kx];
                        }
                    }
                }
            }
        }
    }
    (d_in, d_w, d_b)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn softmax_of_zero_and_ln3() {
        let out = softmax_rows(&t(&[1, 2], &[0.0, 3.0f64.ln()]));
        assert!((out.at(0, 0) - 0.25).abs() < 1e-15);
        assert!((out.at(0, 1) - 0.75).abs() < 1e-15);
    }

    #[test]
    fn masked_softmax_matches_plain_softmax_under_zero_mask() {
        let logits = t(&[2, 3], &[0.3, -1.2, 2.0, 0.0, 0.5, -0.5]);
        let zero = Tensor::zeros(&[2, 3]);
        let a = masked_softmax(&logits, &zero).unwrap();
        let b = softmax_rows(&logits);
        // adding 0.0 is exact, so the two paths are bit-identical
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn masked_positions_are_exactly_zero_and_rows_renormalize() {
        let ninf = f64::NEG_INFINITY;
        let logits = t(&[1, 3], &[1.0, 5.0, 2.0]);
        let mask = t(&[1, 3], &[0.0, ninf, 0.0]);
        let out = masked_softmax(&logits, &mask).unwrap();
        assert_eq!(out.at(0, 1), 0.0);
        let sum: f64 = out.data().iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
        // the surviving entries renormalize over themselves
        let e0 = 1.0f64.exp();
        let e2 = 2.0f64.exp();
        assert!((out.at(0, 0) - e0 / (e0 + e2)).abs() < 1e-15);
    }

    #[test]
    fn fully_masked_row_is_an_error() {
        let ninf = f64::NEG_INFINITY;
        let logits = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let mask = t(&[2, 2], &[0.0, 0.0, ninf, ninf]);
        match masked_softmax(&logits, &mask) {
            Err(Error::AllMaskedRow { row }) => assert_eq!(row, 1),
            other => panic!("expected AllMaskedRow, got {other:?}"),
        }
    }

    #[test]
    fn l1_normalize_basic_and_zero_mass() {
        let out = l1_normalize(&t(&[2], &[1.0, 3.0])).unwrap();
        assert_eq!(out.data(), &[0.25, 0.75]);
        assert!(matches!(l1_normalize(&Tensor::<f64>::zeros(&[3])), Err(Error::ZeroMass)));
    }

    #[test]
    fn matmul_small_known_product() {
        let a = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let b = t(&[2, 2], &[5.0, 6.0, 7.0, 8.0]);
        assert_eq!(matmul(&a, &b).unwrap().data(), &[19.0, 22.0, 43.0, 50.0]);
        // A·Bᵀ and Aᵀ·B agree with explicit transpose + matmul
        let bt = transpose(&b);
        assert_eq!(matmul_nt(&a, &b).unwrap().data(), matmul(&a, &transpose(&b)).unwrap().data());
        assert_eq!(matmul_tn(&a, &b).unwrap().data(), matmul(&transpose(&a), &b).unwrap().data());
        let _ = bt;
    }

    #[test]
    fn conv3x3_identity_kernel_passes_input_through() {
        // single channel, kernel with 1 at the center
        let input = Tensor::from_fn(&[1, 4, 4], |i| i as f64 * 0.5 - 3.0);
        let mut wdata = vec![0.0; 9];
        wdata[4] = 1.0;
        let weight = t(&[1, 1, 3, 3], &wdata);
        let bias = Tensor::zeros(&[1]);
        let out = conv3x3_forward(&input, &weight, &bias, 1, 1, 4, 4);
        assert_eq!(out.data(), input.data());
    }

    #[test]
    fn conv3x3_counts_border_neighbors() {
        // all-ones input and all-ones kernel: interior pixels see 9 taps,
        // corners 4, edges 6
        let input = Tensor::filled(&[1, 3, 3], 1.0f64);
        let weight = Tensor::filled(&[1, 1, 3, 3], 1.0f64);
        let bias = Tensor::zeros(&[1]);
        let out = conv3x3_forward(&input, &weight, &bias, 1, 1, 3, 3);
        assert_eq!(out.data(), &[4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0]);
    }
}
