//! Dense convolution and pooling kernels.
//!
//! Every kernel uses one fixed summation order — (channel, kernel row,
//! kernel column) per output pixel — so results are reproducible bit for
//! bit regardless of how the work is scheduled. The optional multi-worker
//! path distributes whole output planes across scoped threads; each plane
//! is computed with the identical inner loop, so worker count never changes
//! a single bit of the result.

use super::Real;

/// Geometry of one strided, zero-padded convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dDims {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl Conv2dDims {
    pub fn compute(
        n: usize,
        cin: usize,
        h: usize,
        w: usize,
        cout: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        pad: usize,
    ) -> Option<Self> {
        if stride == 0 || kh == 0 || kw == 0 || h + 2 * pad < kh || w + 2 * pad < kw {
            return None;
        }
        Some(Conv2dDims {
            n,
            cin,
            h,
            w,
            cout,
            kh,
            kw,
            stride,
            pad,
            oh: (h + 2 * pad - kh) / stride + 1,
            ow: (w + 2 * pad - kw) / stride + 1,
        })
    }
}

#[inline]
fn xi(d: &Conv2dDims, n: usize, ci: usize, ih: usize, iw: usize) -> usize {
    ((n * d.cin + ci) * d.h + ih) * d.w + iw
}

#[inline]
fn wi(d: &Conv2dDims, co: usize, ci: usize, kh: usize, kw: usize) -> usize {
    ((co * d.cin + ci) * d.kh + kh) * d.kw + kw
}

fn conv2d_plane<T: Real>(
    x: &[T],
    w: &[T],
    bias: Option<&[T]>,
    d: &Conv2dDims,
    plane_idx: usize,
    out: &mut [T],
) {
    let n = plane_idx / d.cout;
    let co = plane_idx % d.cout;
    for oh in 0..d.oh {
        for ow in 0..d.ow {
            let mut acc = bias.map_or(T::zero(), |b| b[co]);
            for ci in 0..d.cin {
                for kh in 0..d.kh {
                    let ih = (oh * d.stride + kh) as isize - d.pad as isize;
                    if ih < 0 || ih as usize >= d.h {
                        continue;
                    }
                    for kw in 0..d.kw {
                        let iw = (ow * d.stride + kw) as isize - d.pad as isize;
                        if iw < 0 || iw as usize >= d.w {
                            continue;
                        }
                        acc += x[xi(d, n, ci, ih as usize, iw as usize)]
                            * w[wi(d, co, ci, kh, kw)];
                    }
                }
            }
            out[oh * d.ow + ow] = acc;
        }
    }
}

/// Distribute per-plane work over scoped threads. Planes are assigned
/// round-robin; each is produced by exactly one worker with the shared
/// fixed-order inner loop.
fn for_each_plane<T: Real, F>(out: &mut [T], plane_len: usize, workers: usize, f: F)
where
    F: Fn(usize, &mut [T]) + Sync,
{
    if workers <= 1 {
        for (pi, slice) in out.chunks_mut(plane_len).enumerate() {
            f(pi, slice);
        }
        return;
    }
    let mut buckets: Vec<Vec<(usize, &mut [T])>> = (0..workers).map(|_| Vec::new()).collect();
    for (pi, slice) in out.chunks_mut(plane_len).enumerate() {
        buckets[pi % workers].push((pi, slice));
    }
    std::thread::scope(|scope| {
        for bucket in buckets {
            let f = &f;
            scope.spawn(move || {
                for (pi, slice) in bucket {
                    f(pi, slice);
                }
            });
        }
    });
}

/// x: [n, cin, h, w]; w: [cout, cin, kh, kw]; bias: [cout];
/// out: [n, cout, oh, ow].
pub fn conv2d_forward<T: Real>(
    x: &[T],
    w: &[T],
    bias: Option<&[T]>,
    d: &Conv2dDims,
    out: &mut [T],
    workers: usize,
) {
    for_each_plane(out, d.oh * d.ow, workers, |pi, slice| {
        conv2d_plane(x, w, bias, d, pi, slice)
    });
}

/// Accumulate input/weight/bias gradients from the upstream gradient `go`
/// ([n, cout, oh, ow]). Pass `None` to skip a gradient. Serial, one fixed
/// scatter order.
pub fn conv2d_backward<T: Real>(
    x: &[T],
    w: &[T],
    go: &[T],
    d: &Conv2dDims,
    mut dx: Option<&mut [T]>,
    mut dw: Option<&mut [T]>,
    mut db: Option<&mut [T]>,
) {
    for n in 0..d.n {
        for co in 0..d.cout {
            for oh in 0..d.oh {
                for ow in 0..d.ow {
                    let g = go[((n * d.cout + co) * d.oh + oh) * d.ow + ow];
                    if let Some(db) = db.as_deref_mut() {
                        db[co] += g;
                    }
                    for ci in 0..d.cin {
                        for kh in 0..d.kh {
                            let ih = (oh * d.stride + kh) as isize - d.pad as isize;
                            if ih < 0 || ih as usize >= d.h {
                                continue;
                            }
                            for kw in 0..d.kw {
                                let iw = (ow * d.stride + kw) as isize - d.pad as isize;
                                if iw < 0 || iw as usize >= d.w {
                                    continue;
                                }
                                let xidx = xi(d, n, ci, ih as usize, iw as usize);
                                let widx = wi(d, co, ci, kh, kw);
                                if let Some(dx) = dx.as_deref_mut() {
                                    dx[xidx] += g * w[widx];
                                }
                                if let Some(dw) = dw.as_deref_mut() {
                                    dw[widx] += g * x[xidx];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Geometry of a stride-upsampling transposed convolution (zero padding).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TConv2dDims {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub oh: usize,
    pub ow: usize,
}

impl TConv2dDims {
    pub fn compute(
        n: usize,
        cin: usize,
        h: usize,
        w: usize,
        cout: usize,
        kh: usize,
        kw: usize,
        stride: usize,
    ) -> Option<Self> {
        if stride == 0 || kh == 0 || kw == 0 || h == 0 || w == 0 {
            return None;
        }
        Some(TConv2dDims {
            n,
            cin,
            h,
            w,
            cout,
            kh,
            kw,
            stride,
            oh: (h - 1) * stride + kh,
            ow: (w - 1) * stride + kw,
        })
    }
}

#[inline]
fn txi(d: &TConv2dDims, n: usize, ci: usize, ih: usize, iw: usize) -> usize {
    ((n * d.cin + ci) * d.h + ih) * d.w + iw
}

#[inline]
fn twi(d: &TConv2dDims, ci: usize, co: usize, kh: usize, kw: usize) -> usize {
    ((ci * d.cout + co) * d.kh + kh) * d.kw + kw
}

fn tconv2d_plane<T: Real>(
    x: &[T],
    w: &[T],
    bias: Option<&[T]>,
    d: &TConv2dDims,
    plane_idx: usize,
    out: &mut [T],
) {
    let n = plane_idx / d.cout;
    let co = plane_idx % d.cout;
    for oh in 0..d.oh {
        for ow in 0..d.ow {
            let mut acc = bias.map_or(T::zero(), |b| b[co]);
            for ci in 0..d.cin {
                for kh in 0..d.kh {
                    if kh > oh || (oh - kh) % d.stride != 0 {
                        continue;
                    }
                    let ih = (oh - kh) / d.stride;
                    if ih >= d.h {
                        continue;
                    }
                    for kw in 0..d.kw {
                        if kw > ow || (ow - kw) % d.stride != 0 {
                            continue;
                        }
                        let iw = (ow - kw) / d.stride;
                        if iw >= d.w {
                            continue;
                        }
                        acc += x[txi(d, n, ci, ih, iw)] * w[twi(d, ci, co, kh, kw)];
                    }
                }
            }
            out[oh * d.ow + ow] = acc;
        }
    }
}

/// x: [n, cin, h, w]; w: [cin, cout, kh, kw]; out: [n, cout, oh, ow] with
/// oh = (h−1)·stride + kh.
pub fn tconv2d_forward<T: Real>(
    x: &[T],
    w: &[T],
    bias: Option<&[T]>,
    d: &TConv2dDims,
    out: &mut [T],
    workers: usize,
) {
    for_each_plane(out, d.oh * d.ow, workers, |pi, slice| {
        tconv2d_plane(x, w, bias, d, pi, slice)
    });
}

pub fn tconv2d_backward<T: Real>(
    x: &[T],
    w: &[T],
    go: &[T],
    d: &TConv2dDims,
    mut dx: Option<&mut [T]>,
    mut dw: Option<&mut [T]>,
    mut db: Option<&mut [T]>,
) {
    // Scatter from the forward gather: every (input pixel, kernel tap)
    // pair feeds exactly one output pixel.
    for n in 0..d.n {
        for co in 0..d.cout {
            for oh in 0..d.oh {
                for ow in 0..d.ow {
                    let g = go[((n * d.cout + co) * d.oh + oh) * d.ow + ow];
                    if let Some(db) = db.as_deref_mut() {
                        db[co] += g;
                    }
                    for ci in 0..d.cin {
                        for kh in 0..d.kh {
                            if kh > oh || (oh - kh) % d.stride != 0 {
                                continue;
                            }
                            let ih = (oh - kh) / d.stride;
                            if ih >= d.h {
                                continue;
                            }
                            for kw in 0..d.kw {
                                if kw > ow || (ow - kw) % d.stride != 0 {
                                    continue;
                                }
                                let iw = (ow - kw) / d.stride;
                                if iw >= d.w {
                                    continue;
                                }
                                let xidx = txi(d, n, ci, ih, iw);
                                let widx = twi(d, ci, co, kh, kw);
                                if let Some(dx) = dx.as_deref_mut() {
                                    dx[xidx] += g * w[widx];
                                }
                                if let Some(dw) = dw.as_deref_mut() {
                                    dw[widx] += g * x[xidx];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Geometry of a max pooling window sweep (no padding, floor semantics).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Pool2dDims {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub oh: usize,
    pub ow: usize,
}

impl Pool2dDims {
    pub fn compute(n: usize, c: usize, h: usize, w: usize, k: usize, stride: usize) -> Option<Self> {
        if stride == 0 || k == 0 || h < k || w < k {
            return None;
        }
        Some(Pool2dDims {
            n,
            c,
            h,
            w,
            k,
            stride,
            oh: (h - k) / stride + 1,
            ow: (w - k) / stride + 1,
        })
    }
}

/// Max pooling; ties resolve to the first maximum in window scan order.
/// `argmax` receives the flat input index feeding each output element.
pub fn maxpool2d_forward<T: Real>(x: &[T], d: &Pool2dDims, out: &mut [T], argmax: &mut [usize]) {
    let mut o = 0usize;
    for n in 0..d.n {
        for c in 0..d.c {
            let base = (n * d.c + c) * d.h * d.w;
            for oh in 0..d.oh {
                for ow in 0..d.ow {
                    let mut best_idx = base + (oh * d.stride) * d.w + ow * d.stride;
                    let mut best = x[best_idx];
                    for kh in 0..d.k {
                        for kw in 0..d.k {
                            let idx = base + (oh * d.stride + kh) * d.w + (ow * d.stride + kw);
                            if x[idx] > best {
                                best = x[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    out[o] = best;
                    argmax[o] = best_idx;
                    o += 1;
                }
            }
        }
    }
}

pub fn maxpool2d_backward<T: Real>(go: &[T], argmax: &[usize], dx: &mut [T]) {
    for (g, idx) in go.iter().zip(argmax) {
        dx[*idx] += *g;
    }
}
