use super::LayerParams;

const LANES: usize = 8;

/// Dot product with a fixed lane-split summation order so the compiler can
/// vectorize it; the order never depends on how many rows are processed.
#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; LANES];
    let ca = a.chunks_exact(LANES);
    let cb = b.chunks_exact(LANES);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for i in 0..LANES {
            acc[i] += x[i] * y[i];
        }
    }
    let mut s = ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7]));
    for (x, y) in ra.iter().zip(rb) {
        s += x * y;
    }
    s
}

/// `y += a * x`
#[inline]
pub(crate) fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    debug_assert_eq!(y.len(), x.len());
    for (yv, xv) in y.iter_mut().zip(x) {
        *yv += a * xv;
    }
}

/// `out[t] = act(W x[t] + b)` for `frames` row-major input rows.
pub(crate) fn affine_rows(layer: &LayerParams, x: &[f64], frames: usize, relu: bool) -> Vec<f64> {
    let (rows, cols) = (layer.rows, layer.cols);
    debug_assert_eq!(x.len(), frames * cols);
    let mut out = vec![0.0; frames * rows];
    for (xr, yr) in x.chunks_exact(cols).zip(out.chunks_exact_mut(rows)) {
        for (o, y) in yr.iter_mut().enumerate() {
            let z = layer.bias[o] + dot(layer.weight_row(o), xr);
            *y = if relu && z < 0.0 { 0.0 } else { z };
        }
    }
    out
}
