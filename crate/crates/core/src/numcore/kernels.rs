//! Forward and backward kernels.
//!
//! Every kernel exists at two levels: a slice-level pair used on hot paths by
//! the models, and a [`Tensor`]-level wrapper whose backward accumulates into
//! the `grad` buffers of its inputs. Backward passes always add (`+=`) so a
//! tensor used twice (tied embeddings) collects both contributions.

use crate::error::{shape_err, Result};
use crate::numcore::Tensor;

/// Layernorm epsilon, fixed and never rescaled by the parametrization.
pub const LAYERNORM_EPS: f64 = 1e-5;

/// `c = alpha * op(a) * op(b) + beta * c` for row-major buffers, where
/// `op(a)` is `m x k` and `op(b)` is `k x n`. With `trans_a`, `a` is stored
/// as `k x m`; with `trans_b`, `b` is stored as `n x k`.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert_eq!(a.len(), m * k, "gemm: lhs length");
    assert_eq!(b.len(), k * n, "gemm: rhs length");
    assert_eq!(c.len(), m * n, "gemm: output length");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if beta == 0.0 {
            c.fill(0.0);
        } else {
            c.iter_mut().for_each(|v| *v *= beta);
        }
        return;
    }
    let (rsa, csa) = if trans_a {
        (1, m as isize)
    } else {
        (k as isize, 1)
    };
    let (rsb, csb) = if trans_b {
        (1, k as isize)
    } else {
        (n as isize, 1)
    };
    // SAFETY: the asserts above guarantee every index dgemm touches through
    // these strides lies inside the three buffers, and `c` does not alias.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
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

// ---------------------------------------------------------------------------
// matmul

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return shape_err(format!("matmul inner dims {m}x{k} * {k2}x{n}"));
    }
    let mut out = Tensor::zeros(&[m, n]);
    gemm(
        m,
        k,
        n,
        1.0,
        a.data(),
        false,
        b.data(),
        false,
        0.0,
        out.data_mut(),
    );
    Ok(out)
}

/// Accumulates `grad_out * b^T` into `a.grad` and `a^T * grad_out` into `b.grad`.
pub fn matmul_backward(a: &mut Tensor, b: &mut Tensor, grad_out: &Tensor) -> Result<()> {
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 || grad_out.shape() != [m, n] {
        return shape_err("matmul_backward shapes disagree");
    }
    let g = grad_out.data();
    let bd = b.data().to_vec();
    gemm(m, n, k, 1.0, g, false, &bd, true, 1.0, a.grad_mut());
    let ad = a.data().to_vec();
    gemm(k, m, n, 1.0, &ad, true, g, false, 1.0, b.grad_mut());
    Ok(())
}

// ---------------------------------------------------------------------------
// pointwise activations

pub fn relu_fwd(x: &[f64], out: &mut [f64]) {
    for (o, &v) in out.iter_mut().zip(x) {
        *o = if v > 0.0 { v } else { 0.0 };
    }
}

pub fn relu_bwd(x: &[f64], grad_out: &[f64], grad_x: &mut [f64]) {
    for ((gx, &v), &g) in grad_x.iter_mut().zip(x).zip(grad_out) {
        if v > 0.0 {
            *gx += g;
        }
    }
}

pub fn tanh_fwd(x: &[f64], out: &mut [f64]) {
    for (o, &v) in out.iter_mut().zip(x) {
        *o = v.tanh();
    }
}

pub fn tanh_bwd(x: &[f64], grad_out: &[f64], grad_x: &mut [f64]) {
    for ((gx, &v), &g) in grad_x.iter_mut().zip(x).zip(grad_out) {
        let t = v.tanh();
        *gx += g * (1.0 - t * t);
    }
}

pub fn relu(x: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(x.shape());
    relu_fwd(x.data(), out.data_mut());
    out
}

pub fn relu_backward(x: &mut Tensor, grad_out: &Tensor) -> Result<()> {
    same_shape(x, grad_out)?;
    let (xd, gx) = x.data_and_grad_mut();
    relu_bwd(xd, grad_out.data(), gx);
    Ok(())
}

pub fn tanh(x: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(x.shape());
    tanh_fwd(x.data(), out.data_mut());
    out
}

pub fn tanh_backward(x: &mut Tensor, grad_out: &Tensor) -> Result<()> {
    same_shape(x, grad_out)?;
    let (xd, gx) = x.data_and_grad_mut();
    tanh_bwd(xd, grad_out.data(), gx);
    Ok(())
}

// ---------------------------------------------------------------------------
// bias

/// `x[r, :] += scale * b` for every row.
pub fn bias_add_fwd(x: &mut [f64], b: &[f64], scale: f64) {
    for row in x.chunks_exact_mut(b.len()) {
        for (v, &bv) in row.iter_mut().zip(b) {
            *v += scale * bv;
        }
    }
}

/// Column sums of `grad_out`, times `scale`, accumulated into `grad_b`.
pub fn bias_add_bwd(grad_out: &[f64], scale: f64, grad_b: &mut [f64]) {
    for row in grad_out.chunks_exact(grad_b.len()) {
        for (gb, &g) in grad_b.iter_mut().zip(row) {
            *gb += scale * g;
        }
    }
}

pub fn bias_add(x: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (_, d) = x.dims2()?;
    if b.shape() != [d] {
        return shape_err("bias length must equal the row width");
    }
    let mut out = x.clone();
    bias_add_fwd(out.data_mut(), b.data(), 1.0);
    Ok(out)
}

pub fn bias_add_backward(x: &mut Tensor, b: &mut Tensor, grad_out: &Tensor) -> Result<()> {
    same_shape(x, grad_out)?;
    for (gx, &g) in x.grad_mut().iter_mut().zip(grad_out.data()) {
        *gx += g;
    }
    bias_add_bwd(grad_out.data(), 1.0, b.grad_mut());
    Ok(())
}

// ---------------------------------------------------------------------------
// layernorm

/// Per-row statistics kept for the backward pass.
#[derive(Debug, Clone, Default)]
pub struct LayerNormCache {
    pub xhat: Vec<f64>,
    pub rstd: Vec<f64>,
}

/// Normalizes each row of width `d`, then applies `gain` and `bias`.
pub fn layernorm_fwd(
    x: &[f64],
    d: usize,
    gain: &[f64],
    bias: &[f64],
    out: &mut [f64],
) -> LayerNormCache {
    let rows = x.len() / d;
    let mut cache = LayerNormCache {
        xhat: vec![0.0; x.len()],
        rstd: vec![0.0; rows],
    };
    for r in 0..rows {
        let xr = &x[r * d..(r + 1) * d];
        let mean = xr.iter().sum::<f64>() / d as f64;
        let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let rstd = 1.0 / (var + LAYERNORM_EPS).sqrt();
        cache.rstd[r] = rstd;
        let xh = &mut cache.xhat[r * d..(r + 1) * d];
        let o = &mut out[r * d..(r + 1) * d];
        for j in 0..d {
            xh[j] = (xr[j] - mean) * rstd;
            o[j] = gain[j] * xh[j] + bias[j];
        }
    }
    cache
}

pub fn layernorm_bwd(
    cache: &LayerNormCache,
    d: usize,
    gain: &[f64],
    grad_out: &[f64],
    grad_x: &mut [f64],
    grad_gain: &mut [f64],
    grad_bias: &mut [f64],
) {
    let rows = cache.rstd.len();
    let inv_d = 1.0 / d as f64;
    for r in 0..rows {
        let xh = &cache.xhat[r * d..(r + 1) * d];
        let go = &grad_out[r * d..(r + 1) * d];
        let mut sum_g = 0.0;
        let mut sum_gx = 0.0;
        for j in 0..d {
            grad_gain[j] += go[j] * xh[j];
            grad_bias[j] += go[j];
            let g = go[j] * gain[j];
            sum_g += g;
            sum_gx += g * xh[j];
        }
        let rstd = cache.rstd[r];
        let gx = &mut grad_x[r * d..(r + 1) * d];
        for j in 0..d {
            let g = go[j] * gain[j];
            gx[j] += rstd * (g - inv_d * sum_g - xh[j] * inv_d * sum_gx);
        }
    }
}

/// Layernorm over the last axis of a matrix.
pub fn layernorm(x: &Tensor, gain: &Tensor, bias: &Tensor) -> Result<(Tensor, LayerNormCache)> {
    let (_, d) = x.dims2()?;
    if gain.shape() != [d] || bias.shape() != [d] {
        return shape_err("layernorm gain/bias must match the row width");
    }
    let mut out = Tensor::zeros(x.shape());
    let cache = layernorm_fwd(x.data(), d, gain.data(), bias.data(), out.data_mut());
    Ok((out, cache))
}

pub fn layernorm_backward(
    x: &mut Tensor,
    gain: &mut Tensor,
    bias: &mut Tensor,
    cache: &LayerNormCache,
    grad_out: &Tensor,
) -> Result<()> {
    same_shape(x, grad_out)?;
    let d = gain.numel();
    let gain_vals = gain.data().to_vec();
    let mut gg = vec![0.0; d];
    let mut gb = vec![0.0; d];
    layernorm_bwd(
        cache,
        d,
        &gain_vals,
        grad_out.data(),
        x.grad_mut(),
        &mut gg,
        &mut gb,
    );
    add_into(gain.grad_mut(), &gg);
    add_into(bias.grad_mut(), &gb);
    Ok(())
}

// ---------------------------------------------------------------------------
// embedding

/// Gathers rows of a `vocab x d` table.
pub fn embedding_fwd(table: &[f64], d: usize, ids: &[usize], scale: f64, out: &mut [f64]) {
    for (i, &id) in ids.iter().enumerate() {
        let src = &table[id * d..(id + 1) * d];
        for (o, &v) in out[i * d..(i + 1) * d].iter_mut().zip(src) {
            *o = scale * v;
        }
    }
}

pub fn embedding_bwd(
    ids: &[usize],
    d: usize,
    grad_out: &[f64],
    scale: f64,
    grad_table: &mut [f64],
) {
    for (i, &id) in ids.iter().enumerate() {
        let g = &grad_out[i * d..(i + 1) * d];
        for (gt, &gv) in grad_table[id * d..(id + 1) * d].iter_mut().zip(g) {
            *gt += scale * gv;
        }
    }
}

pub fn embedding_lookup(table: &Tensor, ids: &[usize]) -> Result<Tensor> {
    let (vocab, d) = table.dims2()?;
    if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
        return shape_err(format!("token id {bad} out of range for vocab {vocab}"));
    }
    let mut out = Tensor::zeros(&[ids.len().max(1), d]);
    if ids.is_empty() {
        return Ok(out);
    }
    embedding_fwd(table.data(), d, ids, 1.0, out.data_mut());
    Ok(out)
}

pub fn embedding_lookup_backward(
    table: &mut Tensor,
    ids: &[usize],
    grad_out: &Tensor,
) -> Result<()> {
    let (_, d) = table.dims2()?;
    if grad_out.shape() != [ids.len(), d] {
        return shape_err("embedding grad shape");
    }
    embedding_bwd(ids, d, grad_out.data(), 1.0, table.grad_mut());
    Ok(())
}

// ---------------------------------------------------------------------------
// softmax cross-entropy

/// Mean cross-entropy over rows of `logits` (`rows x k`). Returns the loss and
/// the row-wise softmax probabilities.
pub fn softmax_xent_fwd(logits: &[f64], k: usize, targets: &[usize]) -> (f64, Vec<f64>) {
    let rows = targets.len();
    let mut probs = vec![0.0; logits.len()];
    let mut total = 0.0;
    for r in 0..rows {
        let lr = &logits[r * k..(r + 1) * k];
        let max = lr.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let pr = &mut probs[r * k..(r + 1) * k];
        let mut z = 0.0;
        for (p, &l) in pr.iter_mut().zip(lr) {
            *p = (l - max).exp();
            z += *p;
        }
        for p in pr.iter_mut() {
            *p /= z;
        }
        total += z.ln() + max - lr[targets[r]];
    }
    (total / rows as f64, probs)
}

/// Gradient of the mean loss with respect to the logits, accumulated.
pub fn softmax_xent_bwd(
    probs: &[f64],
    k: usize,
    targets: &[usize],
    scale: f64,
    grad_logits: &mut [f64],
) {
    let rows = targets.len();
    let s = scale / rows as f64;
    for r in 0..rows {
        let pr = &probs[r * k..(r + 1) * k];
        let gr = &mut grad_logits[r * k..(r + 1) * k];
        for (g, &p) in gr.iter_mut().zip(pr) {
            *g += s * p;
        }
        gr[targets[r]] -= s;
    }
}

pub fn softmax_cross_entropy(logits: &Tensor, targets: &[usize]) -> Result<(f64, Vec<f64>)> {
    let (rows, k) = logits.dims2()?;
    if targets.len() != rows {
        return shape_err("one target per logit row");
    }
    if targets.iter().any(|&t| t >= k) {
        return shape_err("target class out of range");
    }
    Ok(softmax_xent_fwd(logits.data(), k, targets))
}

pub fn softmax_cross_entropy_backward(
    logits: &mut Tensor,
    probs: &[f64],
    targets: &[usize],
) -> Result<()> {
    let (rows, k) = logits.dims2()?;
    if targets.len() != rows || probs.len() != rows * k {
        return shape_err("softmax_cross_entropy_backward shapes");
    }
    softmax_xent_bwd(probs, k, targets, 1.0, logits.grad_mut());
    Ok(())
}

// ---------------------------------------------------------------------------
// scaled dot-product attention (single head)

/// Cached probabilities and raw logits of one attention head.
#[derive(Debug, Clone)]
pub struct AttentionCache {
    pub probs: Vec<f64>,
    pub logits: Vec<f64>,
}

/// `softmax(scale * q k^T) v` for one head; `q, k` are `t x d`, `v` is
/// `t x dv`. With `causal`, position `i` attends to `j <= i` only and masked
/// logits are stored as 0.
#[allow(clippy::too_many_arguments)]
pub fn attention_fwd(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    t: usize,
    d: usize,
    dv: usize,
    scale: f64,
    causal: bool,
    out: &mut [f64],
) -> AttentionCache {
    let mut logits = vec![0.0; t * t];
    gemm(t, d, t, scale, q, false, k, true, 0.0, &mut logits);
    let mut probs = vec![0.0; t * t];
    for i in 0..t {
        let limit = if causal { i + 1 } else { t };
        let row = &mut logits[i * t..(i + 1) * t];
        let max = row[..limit]
            .iter()
            .cloned()
            .fold(f64::NEG_INFINITY, f64::max);
        let pr = &mut probs[i * t..(i + 1) * t];
        let mut z = 0.0;
        for j in 0..limit {
            pr[j] = (row[j] - max).exp();
            z += pr[j];
        }
        for p in pr[..limit].iter_mut() {
            *p /= z;
        }
        for l in row[limit..].iter_mut() {
            *l = 0.0;
        }
    }
    gemm(t, t, dv, 1.0, &probs, false, v, false, 0.0, out);
    AttentionCache { probs, logits }
}

#[allow(clippy::too_many_arguments)]
pub fn attention_bwd(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    t: usize,
    d: usize,
    dv: usize,
    scale: f64,
    cache: &AttentionCache,
    grad_out: &[f64],
    grad_q: &mut [f64],
    grad_k: &mut [f64],
    grad_v: &mut [f64],
) {
    let p = &cache.probs;
    gemm(t, t, dv, 1.0, p, true, grad_out, false, 1.0, grad_v);
    let mut dp = vec![0.0; t * t];
    gemm(t, dv, t, 1.0, grad_out, false, v, true, 0.0, &mut dp);
    // ds = p * (dp - rowsum(dp * p)); masked entries have p = 0.
    for i in 0..t {
        let pr = &p[i * t..(i + 1) * t];
        let dr = &mut dp[i * t..(i + 1) * t];
        let dot: f64 = pr.iter().zip(dr.iter()).map(|(a, b)| a * b).sum();
        for (x, &pv) in dr.iter_mut().zip(pr) {
            *x = pv * (*x - dot);
        }
    }
    gemm(t, t, d, scale, &dp, false, k, false, 1.0, grad_q);
    gemm(t, t, d, scale, &dp, true, q, false, 1.0, grad_k);
}

/// Causal single-head attention on matrices `q, k: t x d`, `v: t x dv`.
pub fn scaled_dot_attention(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    logit_scale: f64,
) -> Result<(Tensor, AttentionCache)> {
    let (t, d) = q.dims2()?;
    let (tk, dk) = k.dims2()?;
    let (tv, dv) = v.dims2()?;
    if t != tk || t != tv || d != dk {
        return shape_err("attention q/k/v shapes disagree");
    }
    let mut out = Tensor::zeros(&[t, dv]);
    let cache = attention_fwd(
        q.data(),
        k.data(),
        v.data(),
        t,
        d,
        dv,
        logit_scale,
        true,
        out.data_mut(),
    );
    Ok((out, cache))
}

pub fn scaled_dot_attention_backward(
    q: &mut Tensor,
    k: &mut Tensor,
    v: &mut Tensor,
    logit_scale: f64,
    cache: &AttentionCache,
    grad_out: &Tensor,
) -> Result<()> {
    let (t, d) = q.dims2()?;
    let (_, dv) = v.dims2()?;
    if grad_out.shape() != [t, dv] {
        return shape_err("attention grad shape");
    }
    let (qd, kd, vd) = (q.data().to_vec(), k.data().to_vec(), v.data().to_vec());
    let mut gq = vec![0.0; t * d];
    let mut gk = vec![0.0; t * d];
    let mut gv = vec![0.0; t * dv];
    attention_bwd(
        &qd,
        &kd,
        &vd,
        t,
        d,
        dv,
        logit_scale,
        cache,
        grad_out.data(),
        &mut gq,
        &mut gk,
        &mut gv,
    );
    add_into(q.grad_mut(), &gq);
    add_into(k.grad_mut(), &gk);
    add_into(v.grad_mut(), &gv);
    Ok(())
}

// ---------------------------------------------------------------------------

pub fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn same_shape(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return shape_err(format!("shapes {:?} and {:?} differ", a.shape(), b.shape()));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_times_vector() {
        let eye = Tensor::from_fn(&[3, 3], |i| if i % 4 == 0 { 1.0 } else { 0.0 });
        let v = Tensor::new(&[3, 1], vec![1.5, -2.0, 0.25]).unwrap();
        assert_eq!(matmul(&eye, &v).unwrap().data(), v.data());
    }

    #[test]
    fn ones_row_times_ones_column_counts() {
        let n = 37;
        let row = Tensor::full(&[1, n], 1.0);
        let col = Tensor::full(&[n, 1], 1.0);
        assert_eq!(matmul(&row, &col).unwrap().data(), &[n as f64]);
    }

    #[test]
    fn matmul_rejects_mismatched_inner_dims() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[4, 2]);
        assert!(matches!(matmul(&a, &b), Err(crate::Error::Shape(_))));
    }

    #[test]
    fn gemm_transposes_match_naive() {
        let (m, k, n) = (3, 4, 5);
        let a: Vec<f64> = (0..m * k).map(|i| i as f64 * 0.5 - 2.0).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64).sin()).collect();
        let naive = |i: usize, j: usize| (0..k).map(|p| a[i * k + p] * b[p * n + j]).sum::<f64>();
        let mut at = vec![0.0; m * k];
        for i in 0..m {
            for p in 0..k {
                at[p * m + i] = a[i * k + p];
            }
        }
        let mut bt = vec![0.0; k * n];
        for p in 0..k {
            for j in 0..n {
                bt[j * k + p] = b[p * n + j];
            }
        }
        let mut c = vec![0.0; m * n];
        gemm(m, k, n, 1.0, &at, true, &bt, true, 0.0, &mut c);
        for i in 0..m {
            for j in 0..n {
                assert!((c[i * n + j] - naive(i, j)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn relu_backward_sign_rule() {
        let mut x = Tensor::new(&[2], vec![-1.0, 2.0]).unwrap();
        let up = Tensor::new(&[2], vec![1.0, 1.0]).unwrap();
        relu_backward(&mut x, &up).unwrap();
        assert_eq!(x.grad().unwrap(), &[0.0, 1.0]);
    }

    #[test]
    fn layernorm_of_constant_row_is_zero() {
        let x = Tensor::full(&[1, 6], 3.25);
        let gain = Tensor::full(&[6], 1.0);
        let bias = Tensor::zeros(&[6]);
        let (y, _) = layernorm(&x, &gain, &bias).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn uniform_logits_give_log_k() {
        for k in [2usize, 5, 10, 128] {
            let logits = Tensor::zeros(&[3, k]);
            let (loss, _) = softmax_cross_entropy(&logits, &[0, k - 1, k / 2]).unwrap();
            assert!((loss - (k as f64).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn embedding_rejects_out_of_range_ids() {
        let table = Tensor::zeros(&[4, 2]);
        assert!(embedding_lookup(&table, &[0, 4]).is_err());
    }

    #[test]
    fn causal_attention_first_row_copies_first_value() {
        let q = Tensor::from_fn(&[3, 2], |i| i as f64 * 0.3);
        let k = Tensor::from_fn(&[3, 2], |i| 1.0 - i as f64 * 0.2);
        let v = Tensor::from_fn(&[3, 2], |i| i as f64);
        let (out, cache) = scaled_dot_attention(&q, &k, &v, 0.5).unwrap();
        assert_eq!(&out.data()[..2], &v.data()[..2]);
        // masked logits are zeroed, probabilities of masked entries are zero
        assert_eq!(cache.logits[1], 0.0);
        assert_eq!(cache.probs[2], 0.0);
    }
}
