//! Forward/backward compute kernels on flat row-major buffers.
//!
//! Summation order inside every kernel is fixed; results never depend on the
//! number of worker threads.

use crate::tensor::Real;

/// `out[m×p] += a[m×k] · b[k×p]`
pub fn gemm_acc<T: Real>(m: usize, k: usize, p: usize, a: &[T], b: &[T], out: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * p);
    debug_assert_eq!(out.len(), m * p);
    for i in 0..m {
        let row = &mut out[i * p..(i + 1) * p];
        let a_row = &a[i * k..(i + 1) * k];
        for (r, &av) in a_row.iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            let b_row = &b[r * p..(r + 1) * p];
            for (o, &bv) in row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

/// `out[m×p] += a[m×k] · b[p×k]ᵀ`
pub fn gemm_a_bt_acc<T: Real>(m: usize, k: usize, p: usize, a: &[T], b: &[T], out: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), p * k);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..p {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = T::zero();
            for (&x, &y) in a_row.iter().zip(b_row) {
                acc += x * y;
            }
            out[i * p + j] += acc;
        }
    }
}

/// `out[k×p] += a[m×k]ᵀ · b[m×p]`
pub fn gemm_at_b_acc<T: Real>(m: usize, k: usize, p: usize, a: &[T], b: &[T], out: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * p);
    debug_assert_eq!(out.len(), k * p);
    for r in 0..m {
        let a_row = &a[r * k..(r + 1) * k];
        let b_row = &b[r * p..(r + 1) * p];
        for (i, &av) in a_row.iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            let o = &mut out[i * p..(i + 1) * p];
            for (x, &bv) in o.iter_mut().zip(b_row) {
                *x += av * bv;
            }
        }
    }
}

/// Geometry of a grouped, zero-padded, stride-1 cross-correlation over three
/// spatial axes. 2-D convolutions use a trailing axis of extent 1.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub groups: usize,
    pub input: [usize; 3],
    pub kernel: [usize; 3],
    pub padding: [usize; 3],
}

impl ConvGeometry {
    pub fn output(&self) -> [usize; 3] {
        [0, 1, 2].map(|a| self.input[a] + 2 * self.padding[a] + 1 - self.kernel[a])
    }

    fn in_per_group(&self) -> usize {
        self.in_channels / self.groups
    }

    fn out_per_group(&self) -> usize {
        self.out_channels / self.groups
    }

    /// Rows of the unfolded input for one group.
    fn patch_len(&self) -> usize {
        self.in_per_group() * self.kernel.iter().product::<usize>()
    }

    fn in_spatial(&self) -> usize {
        self.input.iter().product()
    }

    fn out_spatial(&self) -> usize {
        self.output().iter().product()
    }

    pub fn input_len(&self) -> usize {
        self.batch * self.in_channels * self.in_spatial()
    }

    pub fn output_len(&self) -> usize {
        self.batch * self.out_channels * self.out_spatial()
    }

    pub fn weight_len(&self) -> usize {
        self.out_channels * self.patch_len()
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == [1, 1, 1] && self.padding == [0, 0, 0]
    }
}

/// Unfold the channels of one group of one sample into `cols[patch_len × out_spatial]`.
fn im2col<T: Real>(g: &ConvGeometry, x: &[T], cols: &mut [T]) {
    let [h, w, d] = g.input;
    let [kh, kw, kd] = g.kernel;
    let [ph, pw, pd] = g.padding;
    let [oh, ow, od] = g.output();
    let cin = g.in_per_group();
    let out_sp = oh * ow * od;
    let mut row = 0;
    for c in 0..cin {
        let xc = &x[c * h * w * d..(c + 1) * h * w * d];
        for i in 0..kh {
            for j in 0..kw {
                for l in 0..kd {
                    let dst = &mut cols[row * out_sp..(row + 1) * out_sp];
                    for y in 0..oh {
                        let sy = y + i;
                        for z in 0..ow {
                            let sz = z + j;
                            let base = (y * ow + z) * od;
                            if sy < ph || sy >= h + ph || sz < pw || sz >= w + pw {
                                dst[base..base + od].fill(T::zero());
                                continue;
                            }
                            let src = &xc[((sy - ph) * w + (sz - pw)) * d..][..d];
                            for t in 0..od {
                                let st = t + l;
                                dst[base + t] = if st < pd || st >= d + pd {
                                    T::zero()
                                } else {
                                    src[st - pd]
                                };
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add `cols` back into `dx`.
fn col2im<T: Real>(g: &ConvGeometry, cols: &[T], dx: &mut [T]) {
    let [h, w, d] = g.input;
    let [kh, kw, kd] = g.kernel;
    let [ph, pw, pd] = g.padding;
    let [oh, ow, od] = g.output();
    let cin = g.in_per_group();
    let out_sp = oh * ow * od;
    let mut row = 0;
    for c in 0..cin {
        let xc = &mut dx[c * h * w * d..(c + 1) * h * w * d];
        for i in 0..kh {
            for j in 0..kw {
                for l in 0..kd {
                    let src = &cols[row * out_sp..(row + 1) * out_sp];
                    for y in 0..oh {
                        let sy = y + i;
                        if sy < ph || sy >= h + ph {
                            continue;
                        }
                        for z in 0..ow {
                            let sz = z + j;
                            if sz < pw || sz >= w + pw {
                                continue;
                            }
                            let base = (y * ow + z) * od;
                            let dst = &mut xc[((sy - ph) * w + (sz - pw)) * d..][..d];
                            for t in 0..od {
                                let st = t + l;
                                if st >= pd && st < d + pd {
                                    dst[st - pd] += src[base + t];
                                }
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Number of worker threads for batch-parallel kernels (`MFT_THREADS`, default 1).
pub fn worker_threads() -> usize {
    std::env::var("MFT_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n >= 1)
        .unwrap_or(1)
}

/// Run `f(sample, out_chunk)` for every sample, splitting samples across worker
/// threads. Each sample owns a disjoint output chunk, so the result is
/// independent of the thread count.
fn for_each_sample<T, F>(out: &mut [T], per_sample: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync,
{
    let n = if per_sample == 0 { 0 } else { out.len() / per_sample };
    let threads = worker_threads().min(n.max(1));
    if threads <= 1 {
        for (s, chunk) in out.chunks_mut(per_sample).enumerate() {
            f(s, chunk);
        }
        return;
    }
    let per_thread = n.div_ceil(threads);
    std::thread::scope(|scope| {
        for (t, block) in out.chunks_mut(per_thread * per_sample).enumerate() {
            let f = &f;
            scope.spawn(move || {
                for (i, chunk) in block.chunks_mut(per_sample).enumerate() {
                    f(t * per_thread + i, chunk);
                }
            });
        }
    });
}

pub fn conv_forward<T: Real>(g: &ConvGeometry, x: &[T], w: &[T], bias: Option<&[T]>) -> Vec<T> {
    let in_sample = g.in_channels * g.in_spatial();
    let out_sp = g.out_spatial();
    let out_sample = g.out_channels * out_sp;
    let (cin, cout, plen) = (g.in_per_group(), g.out_per_group(), g.patch_len());
    let mut out = vec![T::zero(); g.output_len()];
    for_each_sample(&mut out, out_sample, |s, y| {
        let xs = &x[s * in_sample..(s + 1) * in_sample];
        let mut cols = if g.is_pointwise() {
            Vec::new()
        } else {
            vec![T::zero(); plen * out_sp]
        };
        for grp in 0..g.groups {
            let xg = &xs[grp * cin * g.in_spatial()..(grp + 1) * cin * g.in_spatial()];
            let src: &[T] = if g.is_pointwise() {
                xg
            } else {
                im2col(g, xg, &mut cols);
                &cols
            };
            let wg = &w[grp * cout * plen..(grp + 1) * cout * plen];
            let yg = &mut y[grp * cout * out_sp..(grp + 1) * cout * out_sp];
            gemm_acc(cout, plen, out_sp, wg, src, yg);
        }
        if let Some(b) = bias {
            for (c, &bv) in b.iter().enumerate() {
                for v in &mut y[c * out_sp..(c + 1) * out_sp] {
                    *v += bv;
                }
            }
        }
    });
    out
}

pub struct ConvGrads<T> {
    pub dx: Vec<T>,
    pub dw: Vec<T>,
    pub db: Vec<T>,
}

pub fn conv_backward<T: Real>(g: &ConvGeometry, x: &[T], w: &[T], dy: &[T]) -> ConvGrads<T> {
    let in_sample = g.in_channels * g.in_spatial();
    let out_sp = g.out_spatial();
    let out_sample = g.out_channels * out_sp;
    let (cin, cout, plen) = (g.in_per_group(), g.out_per_group(), g.patch_len());
    let wlen = g.weight_len();

    // Per-sample [dx | dw] so that the weight reduction below runs in sample order.
    let stride = in_sample + wlen;
    let mut partial = vec![T::zero(); g.batch * stride];
    for_each_sample(&mut partial, stride, |s, buf| {
        let (dxs, dws) = buf.split_at_mut(in_sample);
        let xs = &x[s * in_sample..(s + 1) * in_sample];
        let dys = &dy[s * out_sample..(s + 1) * out_sample];
        let mut cols = vec![T::zero(); plen * out_sp];
        let mut dcols = vec![T::zero(); plen * out_sp];
        for grp in 0..g.groups {
            let gsp = cin * g.in_spatial();
            let xg = &xs[grp * gsp..(grp + 1) * gsp];
            let dyg = &dys[grp * cout * out_sp..(grp + 1) * cout * out_sp];
            let wg = &w[grp * cout * plen..(grp + 1) * cout * plen];
            let dwg = &mut dws[grp * cout * plen..(grp + 1) * cout * plen];
            let dxg = &mut dxs[grp * gsp..(grp + 1) * gsp];
            if g.is_pointwise() {
                gemm_a_bt_acc(cout, out_sp, plen, dyg, xg, dwg);
                gemm_at_b_acc(cout, plen, out_sp, wg, dyg, dxg);
            } else {
                im2col(g, xg, &mut cols);
                gemm_a_bt_acc(cout, out_sp, plen, dyg, &cols, dwg);
                dcols.fill(T::zero());
                gemm_at_b_acc(cout, plen, out_sp, wg, dyg, &mut dcols);
                col2im(g, &dcols, dxg);
            }
        }
    });

    let mut dx = Vec::with_capacity(g.input_len());
    let mut dw = vec![T::zero(); wlen];
    for buf in partial.chunks(stride) {
        dx.extend_from_slice(&buf[..in_sample]);
        for (a, &b) in dw.iter_mut().zip(&buf[in_sample..]) {
            *a += b;
        }
    }
    let mut db = vec![T::zero(); g.out_channels];
    for s in 0..g.batch {
        for (c, acc) in db.iter_mut().enumerate() {
            let start = s * out_sample + c * out_sp;
            for &v in &dy[start..start + out_sp] {
                *acc += v;
            }
        }
    }
    ConvGrads { dx, dw, db }
}

/// Permute axes: `out.shape[i] = shape[perm[i]]`.
pub fn permute<T: Real>(shape: &[usize], perm: &[usize], data: &[T]) -> Vec<T> {
    let in_strides = crate::tensor::strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let rank = shape.len();
    let mut out = Vec::with_capacity(data.len());
    if rank == 0 {
        out.extend_from_slice(data);
        return out;
    }
    let last = rank - 1;
    let mut idx = vec![0usize; rank];
    let mut offset = 0usize;
    let inner = out_shape[last];
    let inner_stride = src_strides[last];
    loop {
        for t in 0..inner {
            out.push(data[offset + t * inner_stride]);
        }
        // advance the outer multi-index
        let mut a = last;
        loop {
            if a == 0 {
                return out;
            }
            a -= 1;
            idx[a] += 1;
            offset += src_strides[a];
            if idx[a] < out_shape[a] {
                break;
            }
            offset -= src_strides[a] * idx[a];
            idx[a] = 0;
        }
    }
}

pub fn inverse_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// Flat source offsets of `src_shape` broadcast (right-aligned) to `out_shape`.
pub fn broadcast_index(src_shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let rank = out_shape.len();
    let pad = rank - src_shape.len();
    let src_strides = crate::tensor::strides(src_shape);
    let eff: Vec<usize> = (0..rank)
        .map(|a| {
            if a < pad || src_shape[a - pad] == 1 {
                0
            } else {
                src_strides[a - pad]
            }
        })
        .collect();
    let n: usize = out_shape.iter().product();
    let mut out = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    let mut offset = 0usize;
    for _ in 0..n {
        out.push(offset);
        for a in (0..rank).rev() {
            idx[a] += 1;
            offset += eff[a];
            if idx[a] < out_shape[a] {
                break;
            }
            offset -= eff[a] * idx[a];
            idx[a] = 0;
        }
    }
    out
}
