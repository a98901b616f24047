//! Separable linear interpolation on 3D grids, half-pixel aligned
//! (`src = (dst + 0.5) * in / out - 0.5`, clamped at the borders).

use crate::volume::{numel, Shape3};

/// Two-tap linear weights for each output sample: `(lo, hi, t)` meaning
/// `(1 - t) * x[lo] + t * x[hi]`.
pub fn linear_taps(src_len: usize, dst_len: usize) -> Vec<(usize, usize, f64)> {
    let scale = src_len as f64 / dst_len as f64;
    (0..dst_len)
        .map(|i| {
            let x = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (src_len - 1) as f64);
            let lo = x.floor() as usize;
            let hi = (lo + 1).min(src_len - 1);
            (lo, hi, x - lo as f64)
        })
        .collect()
}

fn resize_axis(src: &[f64], shape: Shape3, axis: usize, out_len: usize) -> (Vec<f64>, Shape3) {
    let mut out_shape = shape;
    out_shape[axis] = out_len;
    let taps = linear_taps(shape[axis], out_len);
    let mut out = vec![0.0; numel(out_shape)];
    let src_strides = [shape[1] * shape[2], shape[2], 1];
    let dst_strides = [out_shape[1] * out_shape[2], out_shape[2], 1];
    for (j, o) in out.iter_mut().enumerate() {
        let coords = [
            j / dst_strides[0],
            (j / dst_strides[1]) % out_shape[1],
            j % out_shape[2],
        ];
        let (lo, hi, t) = taps[coords[axis]];
        let base: usize = (0..3)
            .filter(|&a| a != axis)
            .map(|a| coords[a] * src_strides[a])
            .sum();
        let a = src[base + lo * src_strides[axis]];
        let b = src[base + hi * src_strides[axis]];
        *o = if t == 0.0 { a } else { (1.0 - t) * a + t * b };
    }
    (out, out_shape)
}

/// Trilinear resize of an H-major grid. Output voxels are convex combinations
/// of input voxels, so the value range never grows.
pub fn resize_trilinear(data: &[f32], shape: Shape3, out: Shape3) -> Vec<f32> {
    if shape == out {
        return data.to_vec();
    }
    let mut cur: Vec<f64> = data.iter().map(|&x| x as f64).collect();
    let mut cur_shape = shape;
    for axis in 0..3 {
        if cur_shape[axis] != out[axis] {
            let (next, s) = resize_axis(&cur, cur_shape, axis, out[axis]);
            cur = next;
            cur_shape = s;
        }
    }
    cur.into_iter().map(|x| x as f32).collect()
}

/// Nearest-neighbour resize, used for label maps.
pub fn resize_nearest<T: Copy>(data: &[T], shape: Shape3, out: Shape3) -> Vec<T> {
    let pick = |src: usize, dst: usize, i: usize| {
        (((i as f64 + 0.5) * src as f64 / dst as f64).floor() as usize).min(src - 1)
    };
    let mut v = Vec::with_capacity(numel(out));
    for h in 0..out[0] {
        let sh = pick(shape[0], out[0], h);
        for w in 0..out[1] {
            let sw = pick(shape[1], out[1], w);
            for d in 0..out[2] {
                let sd = pick(shape[2], out[2], d);
                v.push(data[(sh * shape[1] + sw) * shape[2] + sd]);
            }
        }
    }
    v
}

/// Dense `[numel(dst), numel(src)]` row-major matrix whose product with a
/// grid-flattened table performs the same trilinear resize as
/// [`resize_trilinear`].
pub fn interp_matrix(src: Shape3, dst: Shape3) -> Vec<f64> {
    let axes: Vec<Vec<(usize, usize, f64)>> = (0..3).map(|a| linear_taps(src[a], dst[a])).collect();
    let (ps, pd) = (numel(src), numel(dst));
    let mut m = vec![0.0; pd * ps];
    let mut row = 0;
    for th in &axes[0] {
        for tw in &axes[1] {
            for td in &axes[2] {
                for (ih, wh) in [(th.0, 1.0 - th.2), (th.1, th.2)] {
                    for (iw, ww) in [(tw.0, 1.0 - tw.2), (tw.1, tw.2)] {
                        for (id, wd) in [(td.0, 1.0 - td.2), (td.1, td.2)] {
                            let col = (ih * src[1] + iw) * src[2] + id;
                            m[row * ps + col] += wh * ww * wd;
                        }
                    }
                }
                row += 1;
            }
        }
    }
    m
}
