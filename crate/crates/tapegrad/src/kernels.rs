//! Pure array kernels. Every loop runs in a fixed order so results are
//! bit-identical across runs; nothing here is parallel.

/// Maps each axis of `tshape` to the matching stride of `sshape`
/// (right-aligned), 0 where the source axis is missing or has size 1.
/// None if the shapes are not broadcast-compatible.
fn expand_strides(sshape: &[usize], tshape: &[usize]) -> Option<Vec<usize>> {
    let r = sshape.len();
    let t = tshape.len();
    if r > t {
        return None;
    }
    let mut sstrides = vec![0usize; r];
    let mut acc = 1usize;
    for i in (0..r).rev() {
        sstrides[i] = acc;
        acc *= sshape[i];
    }
    let mut out = vec![0usize; t];
    for ti in 0..t {
        if ti < t - r {
            continue;
        }
        let si = ti - (t - r);
        if sshape[si] == tshape[ti] {
            out[ti] = if sshape[si] == 1 { 0 } else { sstrides[si] };
        } else if sshape[si] == 1 {
            out[ti] = 0;
        } else {
            return None;
        }
    }
    Some(out)
}

pub fn broadcast_to(src: &[f64], sshape: &[usize], tshape: &[usize]) -> Option<Vec<f64>> {
    let strides = expand_strides(sshape, tshape)?;
    let numel: usize = tshape.iter().product();
    let mut out = vec![0.0; numel];
    let rank = tshape.len();
    let mut idx = vec![0usize; rank];
    let mut soff = 0usize;
    for slot in out.iter_mut() {
        *slot = src[soff];
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            soff += strides[ax];
            if idx[ax] < tshape[ax] {
                break;
            }
            soff -= strides[ax] * tshape[ax];
            idx[ax] = 0;
        }
    }
    Some(out)
}

/// Sum `src` (shape `sshape`) down to `tshape`, the adjoint of broadcast_to.
pub fn sum_to(src: &[f64], sshape: &[usize], tshape: &[usize]) -> Option<Vec<f64>> {
    let strides = expand_strides(tshape, sshape)?;
    let tnumel: usize = tshape.iter().product();
    let mut out = vec![0.0; tnumel];
    let rank = sshape.len();
    let mut idx = vec![0usize; rank];
    let mut toff = 0usize;
    for &x in src.iter() {
        out[toff] += x;
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            toff += strides[ax];
            if idx[ax] < sshape[ax] {
                break;
            }
            toff -= strides[ax] * sshape[ax];
            idx[ax] = 0;
        }
    }
    Some(out)
}

/// (outer, axis, inner) factorization of a shape around one axis.
pub fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let n = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, n, inner)
}

pub fn sum_axis(src: &[f64], shape: &[usize], axis: usize) -> Vec<f64> {
    let (outer, n, inner) = axis_split(shape, axis);
    let mut out = vec![0.0; outer * inner];
    for o in 0..outer {
        for k in 0..n {
            let base = (o * n + k) * inner;
            let obase = o * inner;
            for i in 0..inner {
                out[obase + i] += src[base + i];
            }
        }
    }
    out
}

/// Max along `axis`; `mask` gets 1.0 at the first position attaining the max.
pub fn max_axis(src: &[f64], shape: &[usize], axis: usize) -> (Vec<f64>, Vec<f64>) {
    let (outer, n, inner) = axis_split(shape, axis);
    let mut out = vec![f64::NEG_INFINITY; outer * inner];
    let mut arg = vec![0usize; outer * inner];
    for o in 0..outer {
        for k in 0..n {
            let base = (o * n + k) * inner;
            let obase = o * inner;
            for i in 0..inner {
                if src[base + i] > out[obase + i] {
                    out[obase + i] = src[base + i];
                    arg[obase + i] = k;
                }
            }
        }
    }
    let mut mask = vec![0.0; src.len()];
    for o in 0..outer {
        for i in 0..inner {
            let k = arg[o * inner + i];
            mask[(o * n + k) * inner + i] = 1.0;
        }
    }
    (out, mask)
}

pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    out
}

pub fn transpose(src: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; src.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = src[r * cols + c];
        }
    }
    out
}

/// Concatenate blocks along `axis`. `shapes` must agree off-axis.
pub fn concat(parts: &[(&[f64], &[usize])], axis: usize) -> (Vec<usize>, Vec<f64>) {
    let first = parts[0].1;
    let mut oshape = first.to_vec();
    oshape[axis] = parts.iter().map(|(_, s)| s[axis]).sum();
    let (outer, _, inner) = axis_split(&oshape, axis);
    let total: usize = oshape.iter().product();
    let mut out = vec![0.0; total];
    let out_axis = oshape[axis];
    let mut offset = 0usize;
    for (data, shape) in parts {
        let len = shape[axis];
        for o in 0..outer {
            let src = &data[o * len * inner..(o + 1) * len * inner];
            let dst_base = (o * out_axis + offset) * inner;
            out[dst_base..dst_base + len * inner].copy_from_slice(src);
        }
        offset += len;
    }
    (oshape, out)
}

pub fn narrow(src: &[f64], shape: &[usize], axis: usize, start: usize, len: usize) -> Vec<f64> {
    let (outer, n, inner) = axis_split(shape, axis);
    let mut out = vec![0.0; outer * len * inner];
    for o in 0..outer {
        let sbase = (o * n + start) * inner;
        let dbase = o * len * inner;
        out[dbase..dbase + len * inner].copy_from_slice(&src[sbase..sbase + len * inner]);
    }
    out
}

pub fn pad_zero(src: &[f64], shape: &[usize], axis: usize, before: usize, after: usize) -> Vec<f64> {
    let (outer, n, inner) = axis_split(shape, axis);
    let n_out = before + n + after;
    let mut out = vec![0.0; outer * n_out * inner];
    for o in 0..outer {
        let dbase = (o * n_out + before) * inner;
        let sbase = o * n * inner;
        out[dbase..dbase + n * inner].copy_from_slice(&src[sbase..sbase + n * inner]);
    }
    out
}

pub fn gather_rows(src: &[f64], rows: usize, cols: usize, idx: &[usize]) -> Vec<f64> {
    debug_assert_eq!(src.len(), rows * cols);
    let mut out = vec![0.0; idx.len() * cols];
    for (r, &i) in idx.iter().enumerate() {
        out[r * cols..(r + 1) * cols].copy_from_slice(&src[i * cols..(i + 1) * cols]);
    }
    out
}

/// base + rows of src scattered at idx; duplicate indices accumulate in
/// source order, which fixes the floating-point reduction order.
pub fn scatter_add_rows(base: &[f64], cols: usize, idx: &[usize], src: &[f64]) -> Vec<f64> {
    let mut out = base.to_vec();
    for (r, &i) in idx.iter().enumerate() {
        let dst = &mut out[i * cols..(i + 1) * cols];
        let s = &src[r * cols..(r + 1) * cols];
        for c in 0..cols {
            dst[c] += s[c];
        }
    }
    out
}

/// Per-segment column-wise max; `mask` marks the first row attaining each max.
pub fn segment_max(src: &[f64], cols: usize, seg: &[usize], nseg: usize) -> (Vec<f64>, Vec<f64>) {
    let mut out = vec![f64::NEG_INFINITY; nseg * cols];
    let mut arg = vec![usize::MAX; nseg * cols];
    for (r, &s) in seg.iter().enumerate() {
        for c in 0..cols {
            let v = src[r * cols + c];
            if v > out[s * cols + c] {
                out[s * cols + c] = v;
                arg[s * cols + c] = r;
            }
        }
    }
    let mut mask = vec![0.0; src.len()];
    for s in 0..nseg {
        for c in 0..cols {
            let r = arg[s * cols + c];
            if r != usize::MAX {
                mask[r * cols + c] = 1.0;
            }
        }
    }
    (out, mask)
}

pub fn norm_rows(src: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows];
    for r in 0..rows {
        let mut acc = 0.0;
        for c in 0..cols {
            let x = src[r * cols + c];
            acc += x * x;
        }
        out[r] = acc.sqrt();
    }
    out
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
