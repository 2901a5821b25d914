//! Raw numeric kernels shared by forward and backward passes.

/// `c (+)= op(a) · op(b)` where `op(a)` is `m×k` and `op(b)` is `k×n`.
///
/// With `trans_a` the buffer `a` holds a `k×m` matrix; with `trans_b` the
/// buffer `b` holds an `n×k` matrix. All buffers are row-major.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
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
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: strides describe exactly the m×k, k×n and m×n extents checked above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
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

/// Unfolds a `cin×h×w` image into a `(cin·9)×(h·w)` patch matrix (3×3, pad 1).
pub(crate) fn im2col_3x3(x: &[f64], cin: usize, h: usize, w: usize) -> Vec<f64> {
    let hw = h * w;
    let mut cols = vec![0.0; cin * 9 * hw];
    for c in 0..cin {
        let plane = &x[c * hw..(c + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut cols[((c * 9) + ky * 3 + kx) * hw..][..hw];
                for oy in 0..h {
                    let iy = oy as isize + ky as isize - 1;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..w {
                        let ix = ox as isize + kx as isize - 1;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        row[oy * w + ox] = plane[iy as usize * w + ix as usize];
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col_3x3`]: scatters patch-matrix gradients back onto the image.
pub(crate) fn col2im_3x3(cols: &[f64], cin: usize, h: usize, w: usize) -> Vec<f64> {
    let hw = h * w;
    let mut x = vec![0.0; cin * hw];
    for c in 0..cin {
        let plane = &mut x[c * hw..(c + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &cols[((c * 9) + ky * 3 + kx) * hw..][..hw];
                for oy in 0..h {
                    let iy = oy as isize + ky as isize - 1;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..w {
                        let ix = ox as isize + kx as isize - 1;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        plane[iy as usize * w + ix as usize] += row[oy * w + ox];
                    }
                }
            }
        }
    }
    x
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// Numerically stable softmax of one slice, written into `out`.
pub(crate) fn softmax_into(x: &[f64], out: &mut [f64]) {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, &v) in out.iter_mut().zip(x) {
        *o = (v - max).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}
