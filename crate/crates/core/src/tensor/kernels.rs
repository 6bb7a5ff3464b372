//! Forward/backward kernels for everything that is not a convolution.

use super::scalar::Real;

#[inline]
pub fn sigmoid<S: Real>(x: S) -> S {
    S::one() / (S::one() + (-x).exp())
}

/// Elementwise binary op with scalar broadcasting (either side may have a
/// single element).
pub fn binary<S: Real>(a: &[S], b: &[S], f: impl Fn(S, S) -> S) -> Vec<S> {
    if a.len() == b.len() {
        a.iter().zip(b.iter()).map(|(&x, &y)| f(x, y)).collect()
    } else if b.len() == 1 {
        a.iter().map(|&x| f(x, b[0])).collect()
    } else {
        b.iter().map(|&y| f(a[0], y)).collect()
    }
}

/// Reduce an upstream gradient to the operand's element count: identity when
/// shapes match, signed total when the operand was a broadcast scalar.
pub fn reduce_to<S: Real>(g: &[S], n: usize, sign: S) -> Vec<S> {
    if n == g.len() {
        if sign == S::one() {
            g.to_vec()
        } else {
            g.iter().map(|&x| x * sign).collect()
        }
    } else {
        let mut acc = S::zero();
        for &x in g {
            acc += x;
        }
        vec![sign * acc]
    }
}

pub fn mul_bwd<S: Real>(g: &[S], a: &[S], b: &[S]) -> (Vec<S>, Vec<S>) {
    if a.len() == b.len() {
        let da = g.iter().zip(b.iter()).map(|(&g, &b)| g * b).collect();
        let db = g.iter().zip(a.iter()).map(|(&g, &a)| g * a).collect();
        (da, db)
    } else if b.len() == 1 {
        let da = g.iter().map(|&g| g * b[0]).collect();
        let mut acc = S::zero();
        for (&g, &a) in g.iter().zip(a.iter()) {
            acc += g * a;
        }
        (da, vec![acc])
    } else {
        let mut acc = S::zero();
        for (&g, &b) in g.iter().zip(b.iter()) {
            acc += g * b;
        }
        let db = g.iter().map(|&g| g * a[0]).collect();
        (vec![acc], db)
    }
}

pub fn div_bwd<S: Real>(g: &[S], a: &[S], b: &[S]) -> (Vec<S>, Vec<S>) {
    if a.len() == b.len() {
        let da = g.iter().zip(b.iter()).map(|(&g, &b)| g / b).collect();
        let db = g
            .iter()
            .zip(a.iter().zip(b.iter()))
            .map(|(&g, (&a, &b))| -g * a / (b * b))
            .collect();
        (da, db)
    } else if b.len() == 1 {
        let da = g.iter().map(|&g| g / b[0]).collect();
        let mut acc = S::zero();
        for (&g, &a) in g.iter().zip(a.iter()) {
            acc += -g * a / (b[0] * b[0]);
        }
        (da, vec![acc])
    } else {
        let mut acc = S::zero();
        for (&g, &b) in g.iter().zip(b.iter()) {
            acc += g / b;
        }
        let db = g.iter().zip(b.iter()).map(|(&g, &b)| -g * a[0] / (b * b)).collect();
        (vec![acc], db)
    }
}

pub fn mean_axis0<S: Real>(x: &[S], a: usize) -> Vec<S> {
    let m = x.len() / a;
    let mut out = vec![S::zero(); m];
    for ai in 0..a {
        let row = &x[ai * m..(ai + 1) * m];
        for (o, &v) in out.iter_mut().zip(row.iter()) {
            *o += v;
        }
    }
    let inv = S::one() / S::of_usize(a);
    for o in out.iter_mut() {
        *o *= inv;
    }
    out
}

pub fn mean_axis0_bwd<S: Real>(g: &[S], a: usize) -> Vec<S> {
    let inv = S::one() / S::of_usize(a);
    let mut out = vec![S::zero(); g.len() * a];
    for ai in 0..a {
        for (o, &gv) in out[ai * g.len()..(ai + 1) * g.len()].iter_mut().zip(g.iter()) {
            *o = gv * inv;
        }
    }
    out
}

/// Indices of the middle element(s) under a total order (value, then index).
fn median_positions<S: Real>(x: &[S]) -> (usize, Option<usize>) {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_unstable_by(|&i, &j| {
        x[i].partial_cmp(&x[j]).unwrap_or(std::cmp::Ordering::Equal).then(i.cmp(&j))
    });
    let n = x.len();
    if n % 2 == 1 {
        (idx[n / 2], None)
    } else {
        (idx[n / 2 - 1], Some(idx[n / 2]))
    }
}

pub fn median_value<S: Real>(x: &[S]) -> S {
    let (lo, hi) = median_positions(x);
    match hi {
        None => x[lo],
        Some(hi) => S::of(0.5) * (x[lo] + x[hi]),
    }
}

/// Median subgradient: the selected element gets the full gradient; for even
/// counts the two middle elements get half each.
pub fn median_bwd<S: Real>(x: &[S], g: S) -> Vec<S> {
    let mut out = vec![S::zero(); x.len()];
    let (lo, hi) = median_positions(x);
    match hi {
        None => out[lo] = g,
        Some(hi) => {
            out[lo] = S::of(0.5) * g;
            out[hi] = S::of(0.5) * g;
        }
    }
    out
}

pub fn soft_argmax<S: Real>(x: &[S], a: usize) -> Vec<S> {
    let m = x.len() / a;
    let mut out = vec![S::zero(); m];
    for j in 0..m {
        let mut mx = S::neg_infinity();
        for ai in 0..a {
            mx = mx.max(x[ai * m + j]);
        }
        let mut z = S::zero();
        let mut num = S::zero();
        for ai in 0..a {
            let e = (x[ai * m + j] - mx).exp();
            z += e;
            num += S::of_usize(ai) * e;
        }
        out[j] = num / z;
    }
    out
}

pub fn soft_argmax_bwd<S: Real>(x: &[S], a: usize, g: &[S]) -> Vec<S> {
    let m = x.len() / a;
    let mut out = vec![S::zero(); x.len()];
    for j in 0..m {
        let mut mx = S::neg_infinity();
        for ai in 0..a {
            mx = mx.max(x[ai * m + j]);
        }
        let mut z = S::zero();
        let mut num = S::zero();
        for ai in 0..a {
            let e = (x[ai * m + j] - mx).exp();
            z += e;
            num += S::of_usize(ai) * e;
        }
        let y = num / z;
        for ai in 0..a {
            let p = (x[ai * m + j] - mx).exp() / z;
            out[ai * m + j] = g[j] * p * (S::of_usize(ai) - y);
        }
    }
    out
}

/// align-corners-false source mapping with border clamping.
#[inline]
fn up_coord<S: Real>(dst: usize, scale: usize, size: usize) -> (usize, usize, S) {
    let src = (S::of_usize(dst) + S::of(0.5)) / S::of_usize(scale) - S::of(0.5);
    let i0 = src.floor();
    let f = src - i0;
    let i0 = i0.as_f32() as isize;
    let c0 = i0.clamp(0, size as isize - 1) as usize;
    let c1 = (i0 + 1).clamp(0, size as isize - 1) as usize;
    (c0, c1, f)
}

pub fn bilinear_up<S: Real>(x: &[S], outer: usize, h: usize, w: usize, scale: usize) -> Vec<S> {
    let (oh, ow) = (h * scale, w * scale);
    let xmap: Vec<(usize, usize, S)> = (0..ow).map(|i| up_coord(i, scale, w)).collect();
    let ymap: Vec<(usize, usize, S)> = (0..oh).map(|i| up_coord(i, scale, h)).collect();
    let mut out = vec![S::zero(); outer * oh * ow];
    for n in 0..outer {
        let xb = n * h * w;
        let ob = n * oh * ow;
        for (oy, &(y0, y1, fy)) in ymap.iter().enumerate() {
            let r0 = xb + y0 * w;
            let r1 = xb + y1 * w;
            let orow = ob + oy * ow;
            for (ox, &(x0, x1, fx)) in xmap.iter().enumerate() {
                let top = (S::one() - fx) * x[r0 + x0] + fx * x[r0 + x1];
                let bot = (S::one() - fx) * x[r1 + x0] + fx * x[r1 + x1];
                out[orow + ox] = (S::one() - fy) * top + fy * bot;
            }
        }
    }
    out
}

pub fn bilinear_up_bwd<S: Real>(g: &[S], outer: usize, h: usize, w: usize, scale: usize) -> Vec<S> {
    let (oh, ow) = (h * scale, w * scale);
    let xmap: Vec<(usize, usize, S)> = (0..ow).map(|i| up_coord(i, scale, w)).collect();
    let ymap: Vec<(usize, usize, S)> = (0..oh).map(|i| up_coord(i, scale, h)).collect();
    let mut out = vec![S::zero(); outer * h * w];
    for n in 0..outer {
        let xb = n * h * w;
        let ob = n * oh * ow;
        for (oy, &(y0, y1, fy)) in ymap.iter().enumerate() {
            let orow = ob + oy * ow;
            for (ox, &(x0, x1, fx)) in xmap.iter().enumerate() {
                let gv = g[orow + ox];
                out[xb + y0 * w + x0] += gv * (S::one() - fy) * (S::one() - fx);
                out[xb + y0 * w + x1] += gv * (S::one() - fy) * fx;
                out[xb + y1 * w + x0] += gv * fy * (S::one() - fx);
                out[xb + y1 * w + x1] += gv * fy * fx;
            }
        }
    }
    out
}

pub fn avgpool2<S: Real>(x: &[S], outer: usize, h: usize, w: usize) -> Vec<S> {
    let (oh, ow) = (h / 2, w / 2);
    let q = S::of(0.25);
    let mut out = vec![S::zero(); outer * oh * ow];
    for n in 0..outer {
        let xb = n * h * w;
        let ob = n * oh * ow;
        for oy in 0..oh {
            let r0 = xb + 2 * oy * w;
            let r1 = r0 + w;
            let orow = ob + oy * ow;
            for ox in 0..ow {
                out[orow + ox] =
                    q * (x[r0 + 2 * ox] + x[r0 + 2 * ox + 1] + x[r1 + 2 * ox] + x[r1 + 2 * ox + 1]);
            }
        }
    }
    out
}

pub fn avgpool2_bwd<S: Real>(g: &[S], outer: usize, h: usize, w: usize) -> Vec<S> {
    let (oh, ow) = (h / 2, w / 2);
    let q = S::of(0.25);
    let mut out = vec![S::zero(); outer * h * w];
    for n in 0..outer {
        let xb = n * h * w;
        let ob = n * oh * ow;
        for oy in 0..oh {
            let r0 = xb + 2 * oy * w;
            let r1 = r0 + w;
            let orow = ob + oy * ow;
            for ox in 0..ow {
                let gv = q * g[orow + ox];
                out[r0 + 2 * ox] += gv;
                out[r0 + 2 * ox + 1] += gv;
                out[r1 + 2 * ox] += gv;
                out[r1 + 2 * ox + 1] += gv;
            }
        }
    }
    out
}

pub fn pool_axis0<S: Real>(x: &[S], a: usize, inner: usize) -> Vec<S> {
    let oa = a / 2;
    let half = S::of(0.5);
    let mut out = vec![S::zero(); oa * inner];
    for ai in 0..oa {
        let r0 = 2 * ai * inner;
        let r1 = r0 + inner;
        let orow = ai * inner;
        for j in 0..inner {
            out[orow + j] = half * (x[r0 + j] + x[r1 + j]);
        }
    }
    out
}

pub fn pool_axis0_bwd<S: Real>(g: &[S], a: usize, inner: usize) -> Vec<S> {
    let oa = a / 2;
    let half = S::of(0.5);
    let mut out = vec![S::zero(); a * inner];
    for ai in 0..oa {
        let r0 = 2 * ai * inner;
        let r1 = r0 + inner;
        let grow = ai * inner;
        for j in 0..inner {
            let gv = half * g[grow + j];
            out[r0 + j] += gv;
            out[r1 + j] += gv;
        }
    }
    out
}

pub fn gather_h<S: Real>(x: &[S], xs: &[usize], coords: &[S]) -> Vec<S> {
    let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    let mut out = vec![S::zero(); x.len()];
    for ni in 0..n {
        for ci in 0..c {
            for hi in 0..h {
                let row = (ni * c + ci) * h * w + hi * w;
                let crow = (ni * h + hi) * w;
                for wi in 0..w {
                    let cx = coords[crow + wi];
                    let x0f = cx.floor();
                    let f = cx - x0f;
                    let x0 = x0f.as_f32() as isize;
                    let x1 = x0 + 1;
                    let mut acc = S::zero();
                    if x0 >= 0 && x0 < w as isize {
                        acc += (S::one() - f) * x[row + x0 as usize];
                    }
                    if x1 >= 0 && x1 < w as isize {
                        acc += f * x[row + x1 as usize];
                    }
                    out[row + wi] = acc;
                }
            }
        }
    }
    out
}

pub fn gather_h_bwd<S: Real>(g: &[S], x: &[S], xs: &[usize], coords: &[S]) -> (Vec<S>, Vec<S>) {
    let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    let mut dx = vec![S::zero(); x.len()];
    let mut dc = vec![S::zero(); coords.len()];
    for ni in 0..n {
        for ci in 0..c {
            for hi in 0..h {
                let row = (ni * c + ci) * h * w + hi * w;
                let crow = (ni * h + hi) * w;
                for wi in 0..w {
                    let cx = coords[crow + wi];
                    let x0f = cx.floor();
                    let f = cx - x0f;
                    let x0 = x0f.as_f32() as isize;
                    let x1 = x0 + 1;
                    let gv = g[row + wi];
                    let mut v0 = S::zero();
                    let mut v1 = S::zero();
                    if x0 >= 0 && x0 < w as isize {
                        v0 = x[row + x0 as usize];
                        dx[row + x0 as usize] += gv * (S::one() - f);
                    }
                    if x1 >= 0 && x1 < w as isize {
                        v1 = x[row + x1 as usize];
                        dx[row + x1 as usize] += gv * f;
                    }
                    dc[crow + wi] += gv * (v1 - v0);
                }
            }
        }
    }
    (dx, dc)
}

pub fn sample_offsets<S: Real>(v: &[S], vs: &[usize], coords: &[S], radius: usize) -> Vec<S> {
    let (a, h, w) = (vs[0], vs[1], vs[2]);
    let hw = h * w;
    let no = 2 * radius + 1;
    let mut out = vec![S::zero(); no * hw];
    for o in 0..no {
        let off = S::of_usize(o) - S::of_usize(radius);
        let ob = o * hw;
        for j in 0..hw {
            let p = coords[j] + off;
            let a0f = p.floor();
            let f = p - a0f;
            let a0 = a0f.as_f32() as isize;
            let a1 = a0 + 1;
            let mut acc = S::zero();
            if a0 >= 0 && a0 < a as isize {
                acc += (S::one() - f) * v[a0 as usize * hw + j];
            }
            if a1 >= 0 && a1 < a as isize {
                acc += f * v[a1 as usize * hw + j];
            }
            out[ob + j] = acc;
        }
    }
    out
}

pub fn sample_offsets_bwd<S: Real>(
    g: &[S],
    v: &[S],
    vs: &[usize],
    coords: &[S],
    radius: usize,
) -> (Vec<S>, Vec<S>) {
    let (a, h, w) = (vs[0], vs[1], vs[2]);
    let hw = h * w;
    let no = 2 * radius + 1;
    let mut dv = vec![S::zero(); v.len()];
    let mut dc = vec![S::zero(); coords.len()];
    for o in 0..no {
        let off = S::of_usize(o) - S::of_usize(radius);
        let ob = o * hw;
        for j in 0..hw {
            let p = coords[j] + off;
            let a0f = p.floor();
            let f = p - a0f;
            let a0 = a0f.as_f32() as isize;
            let a1 = a0 + 1;
            let gv = g[ob + j];
            let mut v0 = S::zero();
            let mut v1 = S::zero();
            if a0 >= 0 && a0 < a as isize {
                v0 = v[a0 as usize * hw + j];
                dv[a0 as usize * hw + j] += gv * (S::one() - f);
            }
            if a1 >= 0 && a1 < a as isize {
                v1 = v[a1 as usize * hw + j];
                dv[a1 as usize * hw + j] += gv * f;
            }
            dc[j] += gv * (v1 - v0);
        }
    }
    (dv, dc)
}

pub fn group_corr<S: Real>(fl: &[S], fr: &[S], fs: &[usize], groups: usize, max_d: usize) -> Vec<S> {
    let (c, h, w) = (fs[0], fs[1], fs[2]);
    let gs = c / groups;
    let scale = S::of_usize(groups) / S::of_usize(c);
    let mut out = vec![S::zero(); groups * max_d * h * w];
    for g in 0..groups {
        for d in 0..max_d.min(w) {
            for hi in 0..h {
                let orow = ((g * max_d + d) * h + hi) * w;
                for cl in 0..gs {
                    let ci = g * gs + cl;
                    let frow = (ci * h + hi) * w;
                    let dst = &mut out[orow + d..orow + w];
                    let l = &fl[frow + d..frow + w];
                    let r = &fr[frow..frow + w - d];
                    for ((o, &a), &b) in dst.iter_mut().zip(l.iter()).zip(r.iter()) {
                        *o += a * b;
                    }
                }
            }
        }
    }
    for o in out.iter_mut() {
        *o *= scale;
    }
    out
}

pub fn group_corr_bwd<S: Real>(
    g: &[S],
    fl: &[S],
    fr: &[S],
    fs: &[usize],
    groups: usize,
    max_d: usize,
) -> (Vec<S>, Vec<S>) {
    let (c, h, w) = (fs[0], fs[1], fs[2]);
    let gs = c / groups;
    let scale = S::of_usize(groups) / S::of_usize(c);
    let mut dl = vec![S::zero(); fl.len()];
    let mut dr = vec![S::zero(); fr.len()];
    for gi in 0..groups {
        for d in 0..max_d.min(w) {
            for hi in 0..h {
                let orow = ((gi * max_d + d) * h + hi) * w;
                for cl in 0..gs {
                    let ci = gi * gs + cl;
                    let frow = (ci * h + hi) * w;
                    for wi in d..w {
                        let gv = scale * g[orow + wi];
                        dl[frow + wi] += gv * fr[frow + wi - d];
                        dr[frow + wi - d] += gv * fl[frow + wi];
                    }
                }
            }
        }
    }
    (dl, dr)
}

/// Per-row [W,C] transposed copy of a [C,H,W] feature map's row `h`.
fn row_transpose<S: Real>(f: &[S], c: usize, h_total: usize, w: usize, h: usize, dst: &mut [S]) {
    for ci in 0..c {
        let row = (ci * h_total + h) * w;
        for wi in 0..w {
            dst[wi * c + ci] = f[row + wi];
        }
    }
}

pub fn allpair_corr<S: Real>(fl: &[S], fr: &[S], fs: &[usize]) -> Vec<S> {
    let (c, h, w) = (fs[0], fs[1], fs[2]);
    let mut out = vec![S::zero(); w * h * w];
    let mut lt = vec![S::zero(); w * c];
    let mut rt = vec![S::zero(); w * c];
    for hi in 0..h {
        row_transpose(fl, c, h, w, hi, &mut lt);
        row_transpose(fr, c, h, w, hi, &mut rt);
        for wp in 0..w {
            let rvec = &rt[wp * c..(wp + 1) * c];
            let orow = (wp * h + hi) * w;
            for wi in 0..w {
                let lvec = &lt[wi * c..(wi + 1) * c];
                let mut acc = S::zero();
                for (&a, &b) in lvec.iter().zip(rvec.iter()) {
                    acc += a * b;
                }
                out[orow + wi] = acc;
            }
        }
    }
    out
}

pub fn allpair_corr_bwd<S: Real>(g: &[S], fl: &[S], fr: &[S], fs: &[usize]) -> (Vec<S>, Vec<S>) {
    let (c, h, w) = (fs[0], fs[1], fs[2]);
    let mut dl = vec![S::zero(); fl.len()];
    let mut dr = vec![S::zero(); fr.len()];
    let mut lt = vec![S::zero(); w * c];
    let mut rt = vec![S::zero(); w * c];
    let mut dlt = vec![S::zero(); w * c];
    let mut drt = vec![S::zero(); w * c];
    for hi in 0..h {
        row_transpose(fl, c, h, w, hi, &mut lt);
        row_transpose(fr, c, h, w, hi, &mut rt);
        for v in dlt.iter_mut() {
            *v = S::zero();
        }
        for v in drt.iter_mut() {
            *v = S::zero();
        }
        for wp in 0..w {
            let rvec = &rt[wp * c..(wp + 1) * c];
            let orow = (wp * h + hi) * w;
            for wi in 0..w {
                let gv = g[orow + wi];
                if gv == S::zero() {
                    continue;
                }
                let lvec = &lt[wi * c..(wi + 1) * c];
                let dlvec = &mut dlt[wi * c..(wi + 1) * c];
                for (d, &r) in dlvec.iter_mut().zip(rvec.iter()) {
                    *d += gv * r;
                }
                let drvec = &mut drt[wp * c..(wp + 1) * c];
                for (d, &l) in drvec.iter_mut().zip(lvec.iter()) {
                    *d += gv * l;
                }
            }
        }
        for ci in 0..c {
            let row = (ci * h + hi) * w;
            for wi in 0..w {
                dl[row + wi] += dlt[wi * c + ci];
                dr[row + wi] += drt[wi * c + ci];
            }
        }
    }
    (dl, dr)
}

pub fn concat<S: Real>(parts: &[(&[S], usize)], outer: usize, inner: usize) -> Vec<S> {
    let total: usize = parts.iter().map(|(_, s)| s * inner).sum();
    let mut out = vec![S::zero(); outer * total];
    let mut dst = 0;
    for o in 0..outer {
        for (data, s) in parts {
            let chunk = s * inner;
            out[dst..dst + chunk].copy_from_slice(&data[o * chunk..(o + 1) * chunk]);
            dst += chunk;
        }
    }
    out
}

pub fn concat_bwd<S: Real>(g: &[S], sizes: &[usize], outer: usize, inner: usize) -> Vec<Vec<S>> {
    let mut grads: Vec<Vec<S>> = sizes.iter().map(|s| vec![S::zero(); outer * s * inner]).collect();
    let mut src = 0;
    for o in 0..outer {
        for (gi, s) in sizes.iter().enumerate() {
            let chunk = s * inner;
            grads[gi][o * chunk..(o + 1) * chunk].copy_from_slice(&g[src..src + chunk]);
            src += chunk;
        }
    }
    grads
}
