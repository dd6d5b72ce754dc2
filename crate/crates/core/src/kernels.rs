//! Flat-slice numeric kernels behind the tape ops.
//!
//! Everything is plain f64 over row-major buffers. The matrix product uses an
//! (i, k, j) loop nest so the innermost loop runs contiguously over the output
//! row and auto-vectorizes; large products are split across rows with rayon,
//! which keeps results bit-deterministic (every output element is accumulated
//! in a fixed order by exactly one thread).

use rayon::prelude::*;

/// Work threshold (in multiply-adds) below which parallel dispatch is not
/// worth the overhead.
const PAR_FLOP_THRESHOLD: usize = 1 << 20;

/// C[m,n] = A[m,k] · B[k,n]
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let mut c = vec![0.0; m * n];
    if m * k * n >= PAR_FLOP_THRESHOLD && m > 1 {
        c.par_chunks_mut(n)
            .enumerate()
            .for_each(|(i, row)| matmul_row(&a[i * k..(i + 1) * k], b, n, row));
    } else {
        for i in 0..m {
            matmul_row(&a[i * k..(i + 1) * k], b, n, &mut c[i * n..(i + 1) * n]);
        }
    }
    c
}

#[inline]
fn matmul_row(a_row: &[f64], b: &[f64], n: usize, out: &mut [f64]) {
    for (kk, &aik) in a_row.iter().enumerate() {
        if aik == 0.0 {
            continue;
        }
        let b_row = &b[kk * n..(kk + 1) * n];
        for j in 0..n {
            out[j] += aik * b_row[j];
        }
    }
}

/// C[m,n] += A[m,k] · B[k,n], accumulating into an existing buffer.
pub fn matmul_acc(c: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m * k * n >= PAR_FLOP_THRESHOLD && m > 1 {
        c.par_chunks_mut(n)
            .enumerate()
            .for_each(|(i, row)| matmul_row(&a[i * k..(i + 1) * k], b, n, row));
    } else {
        for i in 0..m {
            matmul_row(&a[i * k..(i + 1) * k], b, n, &mut c[i * n..(i + 1) * n]);
        }
    }
}

/// C[m,k] = A[m,n] · B[k,n]ᵀ without materializing the transpose.
pub fn matmul_nt(a: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), m * n);
    debug_assert_eq!(b.len(), k * n);
    let mut c = vec![0.0; m * k];
    let run_row = |i: usize, out: &mut [f64]| {
        let a_row = &a[i * n..(i + 1) * n];
        for (kk, o) in out.iter_mut().enumerate() {
            let b_row = &b[kk * n..(kk + 1) * n];
            let mut acc = 0.0;
            for j in 0..n {
                acc += a_row[j] * b_row[j];
            }
            *o = acc;
        }
    };
    if m * n * k >= PAR_FLOP_THRESHOLD && m > 1 {
        c.par_chunks_mut(k)
            .enumerate()
            .for_each(|(i, out)| run_row(i, out));
    } else {
        for (i, out) in c.chunks_mut(k).enumerate() {
            run_row(i, out);
        }
    }
    c
}

/// C[k,n] = A[m,k]ᵀ · B[m,n] without materializing the transpose.
/// The output is small and hot; rows of A and B stream through once.
pub fn matmul_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    let mut c = vec![0.0; k * n];
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let b_row = &b[i * n..(i + 1) * n];
        for (kk, &aik) in a_row.iter().enumerate() {
            if aik == 0.0 {
                continue;
            }
            let c_row = &mut c[kk * n..(kk + 1) * n];
            for j in 0..n {
                c_row[j] += aik * b_row[j];
            }
        }
    }
    c
}

/// Elementwise unary map, parallel for large buffers.
pub fn unary_map(x: &[f64], f: impl Fn(f64) -> f64 + Sync) -> Vec<f64> {
    if x.len() >= 1 << 16 {
        x.par_iter().map(|&v| f(v)).collect()
    } else {
        x.iter().map(|&v| f(v)).collect()
    }
}

pub fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// y[N,Cout,H,W] = conv(x[N,Cin,H,W], w[Cout,Cin,kh,kw]), stride 1, zero
/// padding of (k-1)/2 so the spatial size is preserved. Odd kernels only.
pub fn conv2d_same(
    x: &[f64],
    w: &[f64],
    n: usize,
    cin: usize,
    h: usize,
    wd: usize,
    cout: usize,
    kh: usize,
    kw: usize,
) -> Vec<f64> {
    let ph = kh / 2;
    let pw = kw / 2;
    let mut y = vec![0.0; n * cout * h * wd];
    let work = n * cout * h * wd * cin * kh * kw;
    let run_one = |idx: usize, out: &mut [f64]| {
        // idx enumerates (sample, out-channel) pairs
        let s = idx / cout;
        let co = idx % cout;
        let x_s = &x[s * cin * h * wd..(s + 1) * cin * h * wd];
        let w_co = &w[co * cin * kh * kw..(co + 1) * cin * kh * kw];
        for oy in 0..h {
            for ox in 0..wd {
                let mut acc = 0.0;
                for ci in 0..cin {
                    let x_c = &x_s[ci * h * wd..(ci + 1) * h * wd];
                    let w_c = &w_co[ci * kh * kw..(ci + 1) * kh * kw];
                    for ky in 0..kh {
                        let iy = oy as isize + ky as isize - ph as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let x_row = &x_c[iy as usize * wd..(iy as usize + 1) * wd];
                        let w_row = &w_c[ky * kw..(ky + 1) * kw];
                        for kx in 0..kw {
                            let ix = ox as isize + kx as isize - pw as isize;
                            if ix < 0 || ix >= wd as isize {
                                continue;
                            }
                            acc += x_row[ix as usize] * w_row[kx];
                        }
                    }
                }
                out[oy * wd + ox] = acc;
            }
        }
    };
    if work >= PAR_FLOP_THRESHOLD {
        y.par_chunks_mut(h * wd)
            .enumerate()
            .for_each(|(idx, out)| run_one(idx, out));
    } else {
        for (idx, out) in y.chunks_mut(h * wd).enumerate() {
            run_one(idx, out);
        }
    }
    y
}

/// Gradient of `conv2d_same` w.r.t. the input.
pub fn conv2d_same_grad_x(
    dy: &[f64],
    w: &[f64],
    n: usize,
    cin: usize,
    h: usize,
    wd: usize,
    cout: usize,
    kh: usize,
    kw: usize,
) -> Vec<f64> {
    let ph = kh / 2;
    let pw = kw / 2;
    let mut dx = vec![0.0; n * cin * h * wd];
    let run_one = |idx: usize, out: &mut [f64]| {
        let s = idx / cin;
        let ci = idx % cin;
        let dy_s = &dy[s * cout * h * wd..(s + 1) * cout * h * wd];
        for iy in 0..h {
            for ix in 0..wd {
                let mut acc = 0.0;
                for co in 0..cout {
                    let dy_c = &dy_s[co * h * wd..(co + 1) * h * wd];
                    let w_c = &w[(co * cin + ci) * kh * kw..(co * cin + ci + 1) * kh * kw];
                    for ky in 0..kh {
                        let oy = iy as isize - (ky as isize - ph as isize);
                        if oy < 0 || oy >= h as isize {
                            continue;
                        }
                        for kx in 0..kw {
                            let ox = ix as isize - (kx as isize - pw as isize);
                            if ox < 0 || ox >= wd as isize {
                                continue;
                            }
                            acc += dy_c[oy as usize * wd + ox as usize] * w_c[ky * kw + kx];
                        }
                    }
                }
                out[iy * wd + ix] = acc;
            }
        }
    };
    let work = n * cin * h * wd * cout * kh * kw;
    if work >= PAR_FLOP_THRESHOLD {
        dx.par_chunks_mut(h * wd)
            .enumerate()
            .for_each(|(idx, out)| run_one(idx, out));
    } else {
        for (idx, out) in dx.chunks_mut(h * wd).enumerate() {
            run_one(idx, out);
        }
    }
    dx
}

/// Gradient of `conv2d_same` w.r.t. the kernel.
pub fn conv2d_same_grad_w(
    dy: &[f64],
    x: &[f64],
    n: usize,
    cin: usize,
    h: usize,
    wd: usize,
    cout: usize,
    kh: usize,
    kw: usize,
) -> Vec<f64> {
    let ph = kh / 2;
    let pw = kw / 2;
    let mut dw = vec![0.0; cout * cin * kh * kw];
    // Parallel over output channels: each (co, ci, ky, kx) cell is written by
    // exactly one task, accumulation order over samples is fixed.
    let run_one = |co: usize, out: &mut [f64]| {
        for s in 0..n {
            let x_s = &x[s * cin * h * wd..(s + 1) * cin * h * wd];
            let dy_c = &dy[(s * cout + co) * h * wd..(s * cout + co + 1) * h * wd];
            for ci in 0..cin {
                let x_c = &x_s[ci * h * wd..(ci + 1) * h * wd];
                for ky in 0..kh {
                    for kx in 0..kw {
                        let mut acc = 0.0;
                        for oy in 0..h {
                            let iy = oy as isize + ky as isize - ph as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let x_row = &x_c[iy as usize * wd..(iy as usize + 1) * wd];
                            let dy_row = &dy_c[oy * wd..(oy + 1) * wd];
                            for ox in 0..wd {
                                let ix = ox as isize + kx as isize - pw as isize;
                                if ix < 0 || ix >= wd as isize {
                                    continue;
                                }
                                acc += dy_row[ox] * x_row[ix as usize];
                            }
                        }
                        out[ci * kh * kw + ky * kw + kx] += acc;
                    }
                }
            }
        }
    };
    let work = n * cout * cin * kh * kw * h * wd;
    if work >= PAR_FLOP_THRESHOLD {
        dw.par_chunks_mut(cin * kh * kw)
            .enumerate()
            .for_each(|(co, out)| run_one(co, out));
    } else {
        for (co, out) in dw.chunks_mut(cin * kh * kw).enumerate() {
            run_one(co, out);
        }
    }
    dw
}

/// 2x2 average pooling with stride 2; spatial dims must be even.
pub fn avg_pool2(x: &[f64], n: usize, c: usize, h: usize, w: usize) -> Vec<f64> {
    let oh = h / 2;
    let ow = w / 2;
    let mut y = vec![0.0; n * c * oh * ow];
    for img in 0..n * c {
        let x_c = &x[img * h * w..(img + 1) * h * w];
        let y_c = &mut y[img * oh * ow..(img + 1) * oh * ow];
        for oy in 0..oh {
            for ox in 0..ow {
                let base = 2 * oy * w + 2 * ox;
                y_c[oy * ow + ox] = 0.25 * (x_c[base] + x_c[base + 1] + x_c[base + w] + x_c[base + w + 1]);
            }
        }
    }
    y
}

pub fn avg_pool2_grad(dy: &[f64], n: usize, c: usize, h: usize, w: usize) -> Vec<f64> {
    let oh = h / 2;
    let ow = w / 2;
    let mut dx = vec![0.0; n * c * h * w];
    for img in 0..n * c {
        let dy_c = &dy[img * oh * ow..(img + 1) * oh * ow];
        let dx_c = &mut dx[img * h * w..(img + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let g = 0.25 * dy_c[oy * ow + ox];
                let base = 2 * oy * w + 2 * ox;
                dx_c[base] += g;
                dx_c[base + 1] += g;
                dx_c[base + w] += g;
                dx_c[base + w + 1] += g;
            }
        }
    }
    dx
}
