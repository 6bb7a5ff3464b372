//! Convolution kernels via patch extraction (im2col) and register-blocked
//! GEMM micro-kernels, so the hot loops stream long contiguous rows and keep
//! four output accumulator blocks in registers.

use super::scalar::Real;

#[inline]
fn axpy<S: Real>(dst: &mut [S], a: S, src: &[S]) {
    for (d, &s) in dst.iter_mut().zip(src.iter()) {
        *d = s.fma(a, *d);
    }
}

#[inline]
fn dot<S: Real>(a: &[S], b: &[S]) -> S {
    let mut acc0 = S::zero();
    let mut acc1 = S::zero();
    let mut acc2 = S::zero();
    let mut acc3 = S::zero();
    let mut chunks_a = a.chunks_exact(4);
    let mut chunks_b = b.chunks_exact(4);
    for (ca, cb) in (&mut chunks_a).zip(&mut chunks_b) {
        acc0 = ca[0].fma(cb[0], acc0);
        acc1 = ca[1].fma(cb[1], acc1);
        acc2 = ca[2].fma(cb[2], acc2);
        acc3 = ca[3].fma(cb[3], acc3);
    }
    let mut acc = (acc0 + acc1) + (acc2 + acc3);
    for (&x, &y) in chunks_a.remainder().iter().zip(chunks_b.remainder().iter()) {
        acc += x * y;
    }
    acc
}

const JB: usize = 16;

/// out[oi, j] += sum_r a[oi, r] * b[r, j] for row-major [O,K] x [K,M];
/// processes four output rows against a JB-wide column block at a time, with
/// the four weights packed contiguously per r so the inner loop is pure FMA.
fn gemm_nn<S: Real>(out: &mut [S], a: &[S], b: &[S], o: usize, k: usize, m: usize) {
    let mut a4 = vec![S::zero(); 4 * k];
    let mut ob = 0;
    while ob + 4 <= o {
        for r in 0..k {
            for oi in 0..4 {
                a4[r * 4 + oi] = a[(ob + oi) * k + r];
            }
        }
        let mut jb = 0;
        while jb + JB <= m {
            let mut acc = [[S::zero(); JB]; 4];
            for (oi, accr) in acc.iter_mut().enumerate() {
                accr.copy_from_slice(&out[(ob + oi) * m + jb..(ob + oi) * m + jb + JB]);
            }
            for r in 0..k {
                let p: &[S; JB] = b[r * m + jb..r * m + jb + JB].try_into().unwrap();
                let w: &[S; 4] = a4[r * 4..r * 4 + 4].try_into().unwrap();
                for (oi, accr) in acc.iter_mut().enumerate() {
                    let wv = w[oi];
                    for l in 0..JB {
                        accr[l] = p[l].fma(wv, accr[l]);
                    }
                }
            }
            for (oi, accr) in acc.iter().enumerate() {
                out[(ob + oi) * m + jb..(ob + oi) * m + jb + JB].copy_from_slice(accr);
            }
            jb += JB;
        }
        if jb < m {
            for oi in 0..4 {
                let orow = (ob + oi) * m;
                for r in 0..k {
                    let w = a[(ob + oi) * k + r];
                    axpy(&mut out[orow + jb..orow + m], w, &b[r * m + jb..(r + 1) * m]);
                }
            }
        }
        ob += 4;
    }
    for oi in ob..o {
        let orow = &mut out[oi * m..(oi + 1) * m];
        for r in 0..k {
            axpy(orow, a[oi * k + r], &b[r * m..(r + 1) * m]);
        }
    }
}

/// c[oi, r] += dot(a[oi, :], b[r, :]) over the shared M axis, four b-rows at
/// a time with eight-lane accumulators.
fn gemm_nt<S: Real>(c: &mut [S], a: &[S], b: &[S], o: usize, k: usize, m: usize) {
    const L: usize = 8;
    for oi in 0..o {
        let arow = &a[oi * m..(oi + 1) * m];
        let crow = &mut c[oi * k..(oi + 1) * k];
        let mut r = 0;
        while r + 4 <= k {
            let b0 = &b[r * m..(r + 1) * m];
            let b1 = &b[(r + 1) * m..(r + 2) * m];
            let b2 = &b[(r + 2) * m..(r + 3) * m];
            let b3 = &b[(r + 3) * m..(r + 4) * m];
            let mut acc = [[S::zero(); L]; 4];
            let mut ia = arow.chunks_exact(L);
            let mut i0 = b0.chunks_exact(L);
            let mut i1 = b1.chunks_exact(L);
            let mut i2 = b2.chunks_exact(L);
            let mut i3 = b3.chunks_exact(L);
            loop {
                let (Some(ga), Some(c0), Some(c1), Some(c2), Some(c3)) =
                    (ia.next(), i0.next(), i1.next(), i2.next(), i3.next())
                else {
                    break;
                };
                let ga: &[S; L] = ga.try_into().unwrap();
                let c0: &[S; L] = c0.try_into().unwrap();
                let c1: &[S; L] = c1.try_into().unwrap();
                let c2: &[S; L] = c2.try_into().unwrap();
                let c3: &[S; L] = c3.try_into().unwrap();
                for l in 0..L {
                    acc[0][l] = ga[l].fma(c0[l], acc[0][l]);
                    acc[1][l] = ga[l].fma(c1[l], acc[1][l]);
                    acc[2][l] = ga[l].fma(c2[l], acc[2][l]);
                    acc[3][l] = ga[l].fma(c3[l], acc[3][l]);
                }
            }
            let mut sums = [S::zero(); 4];
            for (ri, accr) in acc.iter().enumerate() {
                for &v in accr {
                    sums[ri] += v;
                }
            }
            let tail = m - m % L;
            for j in tail..m {
                let g = arow[j];
                sums[0] = g.fma(b0[j], sums[0]);
                sums[1] = g.fma(b1[j], sums[1]);
                sums[2] = g.fma(b2[j], sums[2]);
                sums[3] = g.fma(b3[j], sums[3]);
            }
            for (ri, &sv) in sums.iter().enumerate() {
                crow[r + ri] += sv;
            }
            r += 4;
        }
        while r < k {
            crow[r] += dot(arow, &b[r * m..(r + 1) * m]);
            r += 1;
        }
    }
}

fn transpose<S: Real>(a: &[S], rows: usize, cols: usize) -> Vec<S> {
    let mut out = vec![S::zero(); a.len()];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

/// Patch matrix layout: K = C*kh*kw rows of M = oh*ow columns;
/// row (c,ki,kj), column (oy,ox) holds x[c, oy*s+ki-p, ox*s+kj-p] (0 outside).
#[allow(clippy::too_many_arguments)]
fn im2col<S: Real>(
    x: &[S],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    out: &mut [S],
) {
    let m = oh * ow;
    for ci in 0..c {
        let xc = &x[ci * h * w..(ci + 1) * h * w];
        for ki in 0..kh {
            for kj in 0..kw {
                let row = &mut out[((ci * kh + ki) * kw + kj) * m..((ci * kh + ki) * kw + kj + 1) * m];
                for oy in 0..oh {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    let dst = &mut row[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= h as isize {
                        dst.fill(S::zero());
                        continue;
                    }
                    let xrow = &xc[iy as usize * w..(iy as usize + 1) * w];
                    if stride == 1 {
                        // contiguous segment with zero ends
                        let shift = kj as isize - pad as isize;
                        let ox0 = (-shift).max(0) as usize;
                        let ox1 = ((w as isize - shift).min(ow as isize)).max(0) as usize;
                        dst[..ox0.min(ow)].fill(S::zero());
                        if ox1 > ox0 {
                            let ix0 = (ox0 as isize + shift) as usize;
                            dst[ox0..ox1].copy_from_slice(&xrow[ix0..ix0 + (ox1 - ox0)]);
                        }
                        if ox1 < ow {
                            dst[ox1..].fill(S::zero());
                        }
                    } else {
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * stride + kj) as isize - pad as isize;
                            *d = if ix >= 0 && ix < w as isize {
                                xrow[ix as usize]
                            } else {
                                S::zero()
                            };
                        }
                    }
                }
            }
        }
    }
}

/// Transpose of im2col: scatter-add patch rows back into the input layout.
#[allow(clippy::too_many_arguments)]
fn col2im<S: Real>(
    dpatch: &[S],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    dx: &mut [S],
) {
    let m = oh * ow;
    for ci in 0..c {
        let xc = &mut dx[ci * h * w..(ci + 1) * h * w];
        for ki in 0..kh {
            for kj in 0..kw {
                let row = &dpatch[((ci * kh + ki) * kw + kj) * m..((ci * kh + ki) * kw + kj + 1) * m];
                for oy in 0..oh {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &row[oy * ow..(oy + 1) * ow];
                    let xrow = &mut xc[iy as usize * w..(iy as usize + 1) * w];
                    if stride == 1 {
                        let shift = kj as isize - pad as isize;
                        let ox0 = (-shift).max(0) as usize;
                        let ox1 = ((w as isize - shift).min(ow as isize)).max(0) as usize;
                        if ox1 > ox0 {
                            let ix0 = (ox0 as isize + shift) as usize;
                            for (d, &s) in
                                xrow[ix0..ix0 + (ox1 - ox0)].iter_mut().zip(src[ox0..ox1].iter())
                            {
                                *d += s;
                            }
                        }
                    } else {
                        for (ox, &s) in src.iter().enumerate() {
                            let ix = (ox * stride + kj) as isize - pad as isize;
                            if ix >= 0 && ix < w as isize {
                                xrow[ix as usize] += s;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// True when the patch matrix would just be the input itself.
#[inline]
fn is_pointwise(kh: usize, kw: usize, stride: usize, pad: usize) -> bool {
    kh == 1 && kw == 1 && stride == 1 && pad == 0
}

#[allow(clippy::too_many_arguments)]
pub fn conv2d_fwd<S: Real>(
    x: &[S],
    xs: &[usize],
    wt: &[S],
    ws: &[usize],
    bias: &[S],
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Vec<S> {
    let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    let (o, kh, kw) = (ws[0], ws[2], ws[3]);
    let k = c * kh * kw;
    let m = oh * ow;
    let mut out = vec![S::zero(); n * o * m];
    let pointwise = is_pointwise(kh, kw, stride, pad);
    let mut scratch = if pointwise { Vec::new() } else { vec![S::zero(); k * m] };
    for ni in 0..n {
        let xn = &x[ni * c * h * w..(ni + 1) * c * h * w];
        let patches: &[S] = if pointwise {
            xn
        } else {
            im2col(xn, c, h, w, kh, kw, stride, pad, oh, ow, &mut scratch);
            &scratch
        };
        let on = &mut out[ni * o * m..(ni + 1) * o * m];
        for oi in 0..o {
            on[oi * m..(oi + 1) * m].fill(bias[oi]);
        }
        gemm_nn(on, wt, patches, o, k, m);
    }
    out
}

/// Returns (d_input, d_weight, d_bias).
#[allow(clippy::too_many_arguments)]
pub fn conv2d_bwd<S: Real>(
    gout: &[S],
    os: &[usize],
    x: &[S],
    xs: &[usize],
    wt: &[S],
    ws: &[usize],
    stride: usize,
    pad: usize,
) -> (Vec<S>, Vec<S>, Vec<S>) {
    let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    let (o, kh, kw) = (ws[0], ws[2], ws[3]);
    let (oh, ow) = (os[2], os[3]);
    let k = c * kh * kw;
    let m = oh * ow;
    let mut dx = vec![S::zero(); x.len()];
    let mut dw = vec![S::zero(); wt.len()];
    let mut db = vec![S::zero(); o];
    let pointwise = is_pointwise(kh, kw, stride, pad);
    let mut scratch = if pointwise { Vec::new() } else { vec![S::zero(); k * m] };
    let mut dpatch = vec![S::zero(); k * m];
    for ni in 0..n {
        let xn = &x[ni * c * h * w..(ni + 1) * c * h * w];
        let patches: &[S] = if pointwise {
            xn
        } else {
            im2col(xn, c, h, w, kh, kw, stride, pad, oh, ow, &mut scratch);
            &scratch
        };
        dpatch.fill(S::zero());
        let gn = &gout[ni * o * m..(ni + 1) * o * m];
        for oi in 0..o {
            let mut bacc = S::zero();
            for &g in &gn[oi * m..(oi + 1) * m] {
                bacc += g;
            }
            db[oi] += bacc;
        }
        gemm_nt(&mut dw, gn, patches, o, k, m);
        let wt_t = transpose(wt, o, k);
        gemm_nn(&mut dpatch, &wt_t, gn, k, o, m);
        let dxn = &mut dx[ni * c * h * w..(ni + 1) * c * h * w];
        if pointwise {
            for (d, &s) in dxn.iter_mut().zip(dpatch.iter()) {
                *d += s;
            }
        } else {
            col2im(&dpatch, c, h, w, kh, kw, stride, pad, oh, ow, dxn);
        }
    }
    (dx, dw, db)
}

/// 3-d patch rows: K = C*kd*kh*kw, M = od*oh*ow.
#[allow(clippy::too_many_arguments)]
fn im2col3<S: Real>(
    x: &[S],
    c: usize,
    d: usize,
    h: usize,
    w: usize,
    kd: usize,
    kh: usize,
    kw: usize,
    pad: usize,
    out: &mut [S],
) {
    let (od, oh, ow) = (d + 2 * pad + 1 - kd, h + 2 * pad + 1 - kh, w + 2 * pad + 1 - kw);
    let m = od * oh * ow;
    let mut r = 0;
    for ci in 0..c {
        let xc = &x[ci * d * h * w..(ci + 1) * d * h * w];
        for kz in 0..kd {
            for ki in 0..kh {
                for kj in 0..kw {
                    let row = &mut out[r * m..(r + 1) * m];
                    r += 1;
                    for oz in 0..od {
                        let iz = (oz + kz) as isize - pad as isize;
                        for oy in 0..oh {
                            let dst = &mut row[(oz * oh + oy) * ow..(oz * oh + oy + 1) * ow];
                            let iy = (oy + ki) as isize - pad as isize;
                            if iz < 0 || iz >= d as isize || iy < 0 || iy >= h as isize {
                                dst.fill(S::zero());
                                continue;
                            }
                            let xrow = &xc[(iz as usize * h + iy as usize) * w
                                ..(iz as usize * h + iy as usize + 1) * w];
                            let shift = kj as isize - pad as isize;
                            let ox0 = (-shift).max(0) as usize;
                            let ox1 = ((w as isize - shift).min(ow as isize)).max(0) as usize;
                            dst[..ox0.min(ow)].fill(S::zero());
                            if ox1 > ox0 {
                                let ix0 = (ox0 as isize + shift) as usize;
                                dst[ox0..ox1].copy_from_slice(&xrow[ix0..ix0 + (ox1 - ox0)]);
                            }
                            if ox1 < ow {
                                dst[ox1..].fill(S::zero());
                            }
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im3<S: Real>(
    dpatch: &[S],
    c: usize,
    d: usize,
    h: usize,
    w: usize,
    kd: usize,
    kh: usize,
    kw: usize,
    pad: usize,
    dx: &mut [S],
) {
    let (od, oh, ow) = (d + 2 * pad + 1 - kd, h + 2 * pad + 1 - kh, w + 2 * pad + 1 - kw);
    let m = od * oh * ow;
    let mut r = 0;
    for ci in 0..c {
        let xc = &mut dx[ci * d * h * w..(ci + 1) * d * h * w];
        for kz in 0..kd {
            for ki in 0..kh {
                for kj in 0..kw {
                    let row = &dpatch[r * m..(r + 1) * m];
                    r += 1;
                    for oz in 0..od {
                        let iz = (oz + kz) as isize - pad as isize;
                        if iz < 0 || iz >= d as isize {
                            continue;
                        }
                        for oy in 0..oh {
                            let iy = (oy + ki) as isize - pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let src = &row[(oz * oh + oy) * ow..(oz * oh + oy + 1) * ow];
                            let xrow = &mut xc[(iz as usize * h + iy as usize) * w
                                ..(iz as usize * h + iy as usize + 1) * w];
                            let shift = kj as isize - pad as isize;
                            let ox0 = (-shift).max(0) as usize;
                            let ox1 = ((w as isize - shift).min(ow as isize)).max(0) as usize;
                            if ox1 > ox0 {
                                let ix0 = (ox0 as isize + shift) as usize;
                                for (dv, &sv) in xrow[ix0..ix0 + (ox1 - ox0)]
                                    .iter_mut()
                                    .zip(src[ox0..ox1].iter())
                                {
                                    *dv += sv;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

pub fn conv3d_fwd<S: Real>(
    x: &[S],
    xs: &[usize],
    wt: &[S],
    ws: &[usize],
    bias: &[S],
    pad: usize,
) -> Vec<S> {
    let (c, d, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    let (o, kd, kh, kw) = (ws[0], ws[2], ws[3], ws[4]);
    let (od, oh, ow) = (d + 2 * pad + 1 - kd, h + 2 * pad + 1 - kh, w + 2 * pad + 1 - kw);
    let k = c * kd * kh * kw;
    let m = od * oh * ow;
    let mut patches = vec![S::zero(); k * m];
    im2col3(x, c, d, h, w, kd, kh, kw, pad, &mut patches);
    let mut out = vec![S::zero(); o * m];
    for oi in 0..o {
        out[oi * m..(oi + 1) * m].fill(bias[oi]);
    }
    gemm_nn(&mut out, wt, &patches, o, k, m);
    out
}

pub fn conv3d_bwd<S: Real>(
    gout: &[S],
    x: &[S],
    xs: &[usize],
    wt: &[S],
    ws: &[usize],
    pad: usize,
) -> (Vec<S>, Vec<S>, Vec<S>) {
    let (c, d, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    let (o, kd, kh, kw) = (ws[0], ws[2], ws[3], ws[4]);
    let (od, oh, ow) = (d + 2 * pad + 1 - kd, h + 2 * pad + 1 - kh, w + 2 * pad + 1 - kw);
    let k = c * kd * kh * kw;
    let m = od * oh * ow;
    let mut patches = vec![S::zero(); k * m];
    im2col3(x, c, d, h, w, kd, kh, kw, pad, &mut patches);
    let mut dx = vec![S::zero(); x.len()];
    let mut dw = vec![S::zero(); wt.len()];
    let mut db = vec![S::zero(); o];
    let mut dpatch = vec![S::zero(); k * m];
    for oi in 0..o {
        let mut bacc = S::zero();
        for &g in &gout[oi * m..(oi + 1) * m] {
            bacc += g;
        }
        db[oi] += bacc;
    }
    gemm_nt(&mut dw, gout, &patches, o, k, m);
    let wt_t = transpose(wt, o, k);
    gemm_nn(&mut dpatch, &wt_t, gout, k, o, m);
    col2im3(&dpatch, c, d, h, w, kd, kh, kw, pad, &mut dx);
    (dx, dw, db)
}
