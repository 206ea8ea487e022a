//! Raw kernels shared by the tape's forward and backward rules.

use super::Real;

/// Output extent of a strided window along one axis, `None` if non-positive.
pub fn window_extent(input: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    if stride == 0 || k == 0 || padded < k {
        return None;
    }
    Some((padded - k) / stride + 1)
}

/// Splits a shape around `axis` into `(outer, len, inner)`.
pub fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Dense `[m×k]·[k×n]` product into `out` (overwritten).
pub fn matmul<T: Real>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    T::gemm(
        m,
        k,
        n,
        T::one(),
        a,
        k as isize,
        1,
        b,
        n as isize,
        1,
        T::zero(),
        out,
        n as isize,
        1,
    );
}

/// Geometry of a 3D convolution over a `[c_in, D, H, W]` input.
#[derive(Debug, Clone, Copy)]
pub struct ConvGeom {
    pub c_in: usize,
    pub dims: [usize; 3],
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub out: [usize; 3],
}

impl ConvGeom {
    pub fn in_voxels(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn out_voxels(&self) -> usize {
        self.out.iter().product()
    }

    pub fn col_rows(&self) -> usize {
        self.c_in * self.k * self.k * self.k
    }

    pub fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Unfolds `x` into a `[c_in·k³, out_voxels]` patch matrix.
pub fn im2col<T: Real>(x: &[T], g: &ConvGeom, col: &mut [T]) {
    let [d, h, w] = g.dims;
    let [od, oh, ow] = g.out;
    let ov = g.out_voxels();
    let k = g.k;
    let (s, p) = (g.stride as isize, g.pad as isize);
    for c in 0..g.c_in {
        let xc = &x[c * d * h * w..(c + 1) * d * h * w];
        for kz in 0..k {
            for ky in 0..k {
                for kx in 0..k {
                    let row = ((c * k + kz) * k + ky) * k + kx;
                    let dst = &mut col[row * ov..(row + 1) * ov];
                    for oz in 0..od {
                        let iz = oz as isize * s + kz as isize - p;
                        for oy in 0..oh {
                            let iy = oy as isize * s + ky as isize - p;
                            let base = (oz * oh + oy) * ow;
                            if iz < 0 || iz >= d as isize || iy < 0 || iy >= h as isize {
                                dst[base..base + ow].fill(T::zero());
                                continue;
                            }
                            let src = (iz as usize * h + iy as usize) * w;
                            for ox in 0..ow {
                                let ix = ox as isize * s + kx as isize - p;
                                dst[base + ox] = if ix < 0 || ix >= w as isize {
                                    T::zero()
                                } else {
                                    xc[src + ix as usize]
                                };
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters patch gradients back onto the input.
pub fn col2im<T: Real>(col: &[T], g: &ConvGeom, dx: &mut [T]) {
    let [d, h, w] = g.dims;
    let [od, oh, ow] = g.out;
    let ov = g.out_voxels();
    let k = g.k;
    let (s, p) = (g.stride as isize, g.pad as isize);
    for c in 0..g.c_in {
        let xc = &mut dx[c * d * h * w..(c + 1) * d * h * w];
        for kz in 0..k {
            for ky in 0..k {
                for kx in 0..k {
                    let row = ((c * k + kz) * k + ky) * k + kx;
                    let src = &col[row * ov..(row + 1) * ov];
                    for oz in 0..od {
                        let iz = oz as isize * s + kz as isize - p;
                        if iz < 0 || iz >= d as isize {
                            continue;
                        }
                        for oy in 0..oh {
                            let iy = oy as isize * s + ky as isize - p;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let base = (oz * oh + oy) * ow;
                            let dst = (iz as usize * h + iy as usize) * w;
                            for ox in 0..ow {
                                let ix = ox as isize * s + kx as isize - p;
                                if ix >= 0 && ix < w as isize {
                                    xc[dst + ix as usize] += src[base + ox];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Numpy-style broadcast of two shapes.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// For every element of `out_shape`, the flat offset of the element of
/// `in_shape` it reads under broadcasting.
pub fn broadcast_offsets(in_shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let rank = out_shape.len();
    let lead = rank - in_shape.len();
    let mut strides = vec![0usize; rank];
    let mut acc = 1;
    for i in (0..in_shape.len()).rev() {
        strides[i + lead] = if in_shape[i] == 1 { 0 } else { acc };
        acc *= in_shape[i];
    }
    let total: usize = out_shape.iter().product();
    let mut offsets = Vec::with_capacity(total);
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..total {
        offsets.push(off);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            off += strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            off -= strides[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    offsets
}

/// Source index along one axis for nearest-neighbour resampling.
#[inline]
pub fn nearest_src(dst: usize, src_len: usize, dst_len: usize) -> usize {
    (dst * src_len) / dst_len
}
