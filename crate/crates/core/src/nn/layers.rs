//! Layer primitives with explicit backward passes.
//!
//! Activations are row-major `[time x channels]`. Backward functions
//! accumulate into the supplied gradient buffers.

use crate::scalar::Scalar;

#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// `y = x W^T + b` for `x: [rows x in_dim]`, `w: [out_dim x in_dim]`.
pub fn linear<T: Scalar>(x: &[T], rows: usize, in_dim: usize, w: &[T], b: Option<&[T]>, out_dim: usize) -> Vec<T> {
    debug_assert_eq!(x.len(), rows * in_dim);
    debug_assert_eq!(w.len(), out_dim * in_dim);
    let mut y = match b {
        Some(b) => {
            let mut y = Vec::with_capacity(rows * out_dim);
            for _ in 0..rows {
                y.extend_from_slice(b);
            }
            y
        }
        None => vec![T::zero(); rows * out_dim],
    };
    let beta = if b.is_some() { T::one() } else { T::zero() };
    T::gemm(rows, in_dim, out_dim, T::one(), x, false, w, true, beta, &mut y);
    y
}

/// Backward of [`linear`].
#[allow(clippy::too_many_arguments)]
pub fn linear_backward<T: Scalar>(
    x: &[T],
    rows: usize,
    in_dim: usize,
    w: &[T],
    out_dim: usize,
    dy: &[T],
    dw: &mut [T],
    db: Option<&mut [T]>,
    dx: Option<&mut [T]>,
) {
    T::gemm(out_dim, rows, in_dim, T::one(), dy, true, x, false, T::one(), dw);
    if let Some(db) = db {
        for row in dy.chunks_exact(out_dim) {
            db.iter_mut().zip(row).for_each(|(g, &d)| *g = *g + d);
        }
    }
    if let Some(dx) = dx {
        T::gemm(rows, out_dim, in_dim, T::one(), dy, false, w, false, T::one(), dx);
    }
}

/// Weights of one GRU layer, gate order reset, update, candidate.
pub struct GruWeights<'a, T> {
    /// `[3H x in]`
    pub w_ih: &'a [T],
    /// `[3H x H]`
    pub w_hh: &'a [T],
    pub b_ih: &'a [T],
    pub b_hh: &'a [T],
}

pub struct GruGrads<'a, T> {
    pub w_ih: &'a mut [T],
    pub w_hh: &'a mut [T],
    pub b_ih: &'a mut [T],
    pub b_hh: &'a mut [T],
}

#[derive(Clone, Debug)]
pub struct GruCache<T> {
    steps: usize,
    hidden: usize,
    r: Vec<T>,
    z: Vec<T>,
    n: Vec<T>,
    /// Recurrent candidate pre-activation `W_hn h + b_hn`.
    ghn: Vec<T>,
    /// `h_{t-1}` for every step, starting from zeros.
    h_prev: Vec<T>,
}

/// Runs a unidirectional GRU from a zero state; returns all hidden states
/// `[steps x hidden]`.
pub fn gru_forward<T: Scalar>(
    x: &[T],
    steps: usize,
    in_dim: usize,
    hidden: usize,
    wts: &GruWeights<'_, T>,
) -> (Vec<T>, GruCache<T>) {
    let h3 = 3 * hidden;
    let gi = linear(x, steps, in_dim, wts.w_ih, Some(wts.b_ih), h3);
    let mut cache = GruCache {
        steps,
        hidden,
        r: vec![T::zero(); steps * hidden],
        z: vec![T::zero(); steps * hidden],
        n: vec![T::zero(); steps * hidden],
        ghn: vec![T::zero(); steps * hidden],
        h_prev: vec![T::zero(); steps * hidden],
    };
    let mut out = vec![T::zero(); steps * hidden];
    let mut h = vec![T::zero(); hidden];
    let mut gh = vec![T::zero(); h3];
    for t in 0..steps {
        gh.copy_from_slice(wts.b_hh);
        T::gemm(1, hidden, h3, T::one(), &h, false, wts.w_hh, true, T::one(), &mut gh);
        let gi_t = &gi[t * h3..(t + 1) * h3];
        let base = t * hidden;
        cache.h_prev[base..base + hidden].copy_from_slice(&h);
        for j in 0..hidden {
            let r = sigmoid(gi_t[j] + gh[j]);
            let z = sigmoid(gi_t[hidden + j] + gh[hidden + j]);
            let ghn = gh[2 * hidden + j];
            let n = (gi_t[2 * hidden + j] + r * ghn).tanh();
            let hn = (T::one() - z) * n + z * h[j];
            cache.r[base + j] = r;
            cache.z[base + j] = z;
            cache.n[base + j] = n;
            cache.ghn[base + j] = ghn;
            out[base + j] = hn;
        }
        h.copy_from_slice(&out[base..base + hidden]);
    }
    (out, cache)
}

/// Backpropagation through time for [`gru_forward`]. Returns `dL/dx`.
pub fn gru_backward<T: Scalar>(
    x: &[T],
    in_dim: usize,
    wts: &GruWeights<'_, T>,
    cache: &GruCache<T>,
    dh_all: &[T],
    grads: GruGrads<'_, T>,
) -> Vec<T> {
    let (steps, hidden) = (cache.steps, cache.hidden);
    let h3 = 3 * hidden;
    let mut dgi = vec![T::zero(); steps * h3];
    let mut dgh = vec![T::zero(); steps * h3];
    let mut dh = vec![T::zero(); hidden];
    let mut dh_next = vec![T::zero(); hidden];
    for t in (0..steps).rev() {
        let base = t * hidden;
        for j in 0..hidden {
            dh[j] = dh_all[base + j] + dh_next[j];
        }
        let gi_t = &mut dgi[t * h3..(t + 1) * h3];
        let gh_t = &mut dgh[t * h3..(t + 1) * h3];
        for j in 0..hidden {
            let (r, z, n) = (cache.r[base + j], cache.z[base + j], cache.n[base + j]);
            let hp = cache.h_prev[base + j];
            let dn = dh[j] * (T::one() - z);
            let dz = dh[j] * (hp - n);
            let dn_pre = dn * (T::one() - n * n);
            let dr_pre = dn_pre * cache.ghn[base + j] * r * (T::one() - r);
            let dz_pre = dz * z * (T::one() - z);
            gi_t[j] = dr_pre;
            gi_t[hidden + j] = dz_pre;
            gi_t[2 * hidden + j] = dn_pre;
            gh_t[j] = dr_pre;
            gh_t[hidden + j] = dz_pre;
            gh_t[2 * hidden + j] = dn_pre * r;
            dh_next[j] = dh[j] * z;
        }
        T::gemm(1, h3, hidden, T::one(), gh_t, false, wts.w_hh, false, T::one(), &mut dh_next);
    }
    linear_backward(&cache.h_prev, steps, hidden, wts.w_hh, h3, &dgh, grads.w_hh, Some(grads.b_hh), None);
    let mut dx = vec![T::zero(); steps * in_dim];
    linear_backward(x, steps, in_dim, wts.w_ih, h3, &dgi, grads.w_ih, Some(grads.b_ih), Some(&mut dx));
    dx
}

pub const GLN_EPS: f64 = 1e-8;

#[derive(Clone, Debug)]
pub struct GlnCache<T> {
    normalized: Vec<T>,
    inv_std: T,
}

/// Global layer norm over all of `[rows x channels]` with per-channel
/// gain and bias.
pub fn gln_forward<T: Scalar>(x: &[T], channels: usize, gamma: &[T], beta: &[T]) -> (Vec<T>, GlnCache<T>) {
    let count = T::from_usize_lossy(x.len());
    let mean = x.iter().copied().sum::<T>() / count;
    let var = x.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / count;
    let inv_std = T::one() / (var + T::from_f64_lossy(GLN_EPS)).sqrt();
    let normalized: Vec<T> = x.iter().map(|&v| (v - mean) * inv_std).collect();
    let mut y = Vec::with_capacity(x.len());
    for row in normalized.chunks_exact(channels) {
        y.extend(row.iter().zip(gamma).zip(beta).map(|((&n, &g), &b)| n * g + b));
    }
    (y, GlnCache { normalized, inv_std })
}

/// Backward of [`gln_forward`]; returns `dL/dx`.
pub fn gln_backward<T: Scalar>(
    cache: &GlnCache<T>,
    channels: usize,
    gamma: &[T],
    dy: &[T],
    dgamma: &mut [T],
    dbeta: &mut [T],
) -> Vec<T> {
    let mut dxhat = Vec::with_capacity(dy.len());
    for (drow, nrow) in dy.chunks_exact(channels).zip(cache.normalized.chunks_exact(channels)) {
        for c in 0..channels {
            dgamma[c] = dgamma[c] + drow[c] * nrow[c];
            dbeta[c] = dbeta[c] + drow[c];
            dxhat.push(drow[c] * gamma[c]);
        }
    }
    let count = T::from_usize_lossy(dy.len());
    let mean_d = dxhat.iter().copied().sum::<T>() / count;
    let mean_dn = dxhat.iter().zip(&cache.normalized).map(|(&d, &n)| d * n).sum::<T>() / count;
    dxhat
        .iter()
        .zip(&cache.normalized)
        .map(|(&d, &n)| cache.inv_std * (d - mean_d - n * mean_dn))
        .collect()
}

/// PReLU with a single shared slope.
pub fn prelu<T: Scalar>(x: &[T], alpha: T) -> Vec<T> {
    x.iter().map(|&v| if v > T::zero() { v } else { alpha * v }).collect()
}

/// Backward of [`prelu`]; returns `dL/dx` and adds to `dalpha`.
pub fn prelu_backward<T: Scalar>(x: &[T], alpha: T, dy: &[T], dalpha: &mut T) -> Vec<T> {
    let mut da = T::zero();
    let dx = x
        .iter()
        .zip(dy)
        .map(|(&v, &d)| {
            if v > T::zero() {
                d
            } else {
                da = da + v * d;
                alpha * d
            }
        })
        .collect();
    *dalpha = *dalpha + da;
    dx
}

/// Depthwise dilated convolution with zero "same" padding along time.
/// `w: [channels x kernel]`, odd `kernel`.
pub fn depthwise_conv<T: Scalar>(x: &[T], channels: usize, w: &[T], b: &[T], kernel: usize, dilation: usize) -> Vec<T> {
    let rows = x.len() / channels;
    let mut y = Vec::with_capacity(x.len());
    for _ in 0..rows {
        y.extend_from_slice(b);
    }
    let half = (kernel - 1) / 2;
    for k in 0..kernel {
        let shift = (k as isize - half as isize) * dilation as isize;
        for t in 0..rows {
            let src = t as isize + shift;
            if src < 0 || src >= rows as isize {
                continue;
            }
            let xs = &x[src as usize * channels..(src as usize + 1) * channels];
            let ys = &mut y[t * channels..(t + 1) * channels];
            for c in 0..channels {
                ys[c] = ys[c] + w[c * kernel + k] * xs[c];
            }
        }
    }
    y
}

/// Backward of [`depthwise_conv`]; returns `dL/dx`.
#[allow(clippy::too_many_arguments)]
pub fn depthwise_conv_backward<T: Scalar>(
    x: &[T],
    channels: usize,
    w: &[T],
    kernel: usize,
    dilation: usize,
    dy: &[T],
    dw: &mut [T],
    db: &mut [T],
) -> Vec<T> {
    let rows = x.len() / channels;
    let mut dx = vec![T::zero(); x.len()];
    for row in dy.chunks_exact(channels) {
        db.iter_mut().zip(row).for_each(|(g, &d)| *g = *g + d);
    }
    let half = (kernel - 1) / 2;
    for k in 0..kernel {
        let shift = (k as isize - half as isize) * dilation as isize;
        for t in 0..rows {
            let src = t as isize + shift;
            if src < 0 || src >= rows as isize {
                continue;
            }
            let s = src as usize * channels;
            let ds = &dy[t * channels..(t + 1) * channels];
            for c in 0..channels {
                dw[c * kernel + k] = dw[c * kernel + k] + x[s + c] * ds[c];
                dx[s + c] = dx[s + c] + w[c * kernel + k] * ds[c];
            }
        }
    }
    dx
}

#[cfg(test)]
pub(crate) mod gradcheck {
    /// Central difference derivative of `f` with respect to `x[i]`.
    pub fn numeric(x: &mut [f64], i: usize, f: &mut dyn FnMut(&[f64]) -> f64) -> f64 {
        let h = 1e-6 * (1.0 + x[i].abs());
        let orig = x[i];
        x[i] = orig + h;
        let up = f(x);
        x[i] = orig - h;
        let down = f(x);
        x[i] = orig;
        (up - down) / (2.0 * h)
    }

    pub fn assert_close(analytic: f64, numeric: f64, what: &str) {
        let tol = 1e-5 * (1.0 + analytic.abs().max(numeric.abs()));
        assert!((analytic - numeric).abs() < tol, "{what}: analytic {analytic} vs numeric {numeric}");
    }
}

#[cfg(test)]
mod tests {
    use super::gradcheck::*;
    use super::*;
    use crate::seed::rng_for;
    use rand::Rng;

    fn randv(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = rng_for(seed, &[]);
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    #[test]
    fn linear_matches_naive() {
        let (rows, i, o) = (3, 4, 5);
        let x = randv(rows * i, 1);
        let w = randv(o * i, 2);
        let b = randv(o, 3);
        let y = linear(&x, rows, i, &w, Some(&b), o);
        for r in 0..rows {
            for k in 0..o {
                let want = b[k] + (0..i).map(|j| x[r * i + j] * w[k * i + j]).sum::<f64>();
                assert!((y[r * o + k] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn linear_gradients() {
        let (rows, i, o) = (3, 4, 2);
        let mut x = randv(rows * i, 1);
        let mut w = randv(o * i, 2);
        let b = randv(o, 3);
        let proj = randv(rows * o, 4);
        let mut dw = vec![0.0; w.len()];
        let mut db = vec![0.0; o];
        let mut dx = vec![0.0; x.len()];
        linear_backward(&x, rows, i, &w, o, &proj, &mut dw, Some(&mut db), Some(&mut dx));
        let w0 = w.clone();
        for k in 0..x.len() {
            let n = numeric(&mut x, k, &mut |x| dot(&linear(x, rows, i, &w0, Some(&b), o), &proj));
            assert_close(dx[k], n, "dx");
        }
        let x0 = x.clone();
        for k in 0..w.len() {
            let n = numeric(&mut w, k, &mut |w| dot(&linear(&x0, rows, i, w, Some(&b), o), &proj));
            assert_close(dw[k], n, "dw");
        }
        let col: Vec<f64> = (0..o).map(|k| (0..rows).map(|r| proj[r * o + k]).sum()).collect();
        for k in 0..o {
            assert_close(db[k], col[k], "db");
        }
    }

    #[test]
    fn gru_gradients() {
        let (steps, i, h) = (5, 3, 4);
        let mut x = randv(steps * i, 10);
        let mut p = vec![randv(3 * h * i, 11), randv(3 * h * h, 12), randv(3 * h, 13), randv(3 * h, 14)];
        let proj = randv(steps * h, 15);
        let run = |x: &[f64], p: &[Vec<f64>]| {
            let w = GruWeights { w_ih: &p[0], w_hh: &p[1], b_ih: &p[2], b_hh: &p[3] };
            dot(&gru_forward(x, steps, i, h, &w).0, &proj)
        };
        let mut g: Vec<Vec<f64>> = p.iter().map(|v| vec![0.0; v.len()]).collect();
        let dx = {
            let w = GruWeights { w_ih: &p[0], w_hh: &p[1], b_ih: &p[2], b_hh: &p[3] };
            let (_, cache) = gru_forward(&x, steps, i, h, &w);
            let (a, rest) = g.split_at_mut(1);
            let (b, rest) = rest.split_at_mut(1);
            let (c, d) = rest.split_at_mut(1);
            gru_backward(&x, i, &w, &cache, &proj, GruGrads { w_ih: &mut a[0], w_hh: &mut b[0], b_ih: &mut c[0], b_hh: &mut d[0] })
        };
        let p0 = p.clone();
        for k in 0..x.len() {
            let n = numeric(&mut x, k, &mut |x| run(x, &p0));
            assert_close(dx[k], n, "dx");
        }
        let x0 = x.clone();
        for which in 0..4 {
            for k in 0..p[which].len() {
                let mut v = p[which].clone();
                let n = numeric(&mut v, k, &mut |v| {
                    let mut q = p.clone();
                    q[which] = v.to_vec();
                    run(&x0, &q)
                });
                assert_close(g[which][k], n, &format!("param {which}[{k}]"));
            }
            p[which] = p0[which].clone();
        }
    }

    #[test]
    fn gln_gradients_and_stats() {
        let c = 3;
        let mut x = randv(4 * c, 20);
        let gamma = randv(c, 21);
        let beta = randv(c, 22);
        let proj = randv(x.len(), 23);
        let (y, cache) = gln_forward(&x, c, &vec![1.0; c], &vec![0.0; c]);
        let mean: f64 = y.iter().sum::<f64>() / y.len() as f64;
        let var: f64 = y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / y.len() as f64;
        assert!(mean.abs() < 1e-12 && (var - 1.0).abs() < 1e-6);
        drop(cache);
        let (_, cache) = gln_forward(&x, c, &gamma, &beta);
        let mut dg = vec![0.0; c];
        let mut db = vec![0.0; c];
        let dx = gln_backward(&cache, c, &gamma, &proj, &mut dg, &mut db);
        for k in 0..x.len() {
            let n = numeric(&mut x, k, &mut |x| dot(&gln_forward(x, c, &gamma, &beta).0, &proj));
            assert_close(dx[k], n, "dx");
        }
        let mut g = gamma.clone();
        for k in 0..c {
            let n = numeric(&mut g, k, &mut |g| dot(&gln_forward(&x, c, g, &beta).0, &proj));
            assert_close(dg[k], n, "dgamma");
        }
    }

    #[test]
    fn prelu_and_depthwise_gradients() {
        let c = 3;
        let (kernel, dil) = (3, 2);
        let mut x = randv(7 * c, 30);
        let mut w = randv(c * kernel, 31);
        let b = randv(c, 32);
        let proj = randv(x.len(), 33);
        let mut dw = vec![0.0; w.len()];
        let mut db = vec![0.0; c];
        let dx = depthwise_conv_backward(&x, c, &w, kernel, dil, &proj, &mut dw, &mut db);
        let w0 = w.clone();
        for k in 0..x.len() {
            let n = numeric(&mut x, k, &mut |x| dot(&depthwise_conv(x, c, &w0, &b, kernel, dil), &proj));
            assert_close(dx[k], n, "dx");
        }
        for k in 0..w.len() {
            let n = numeric(&mut w, k, &mut |w| dot(&depthwise_conv(&x, c, w, &b, kernel, dil), &proj));
            assert_close(dw[k], n, "dw");
        }
        let mut da = 0.0;
        let alpha = 0.25;
        let dxp = prelu_backward(&x, alpha, &proj, &mut da);
        let mut a = [alpha];
        let n = numeric(&mut a, 0, &mut |a| dot(&prelu(&x, a[0]), &proj));
        assert_close(da, n, "dalpha");
        for k in 0..x.len() {
            let n = numeric(&mut x, k, &mut |x| dot(&prelu(x, alpha), &proj));
            assert_close(dxp[k], n, "prelu dx");
        }
    }
}
