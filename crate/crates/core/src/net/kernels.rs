//! Sparse 3x3x3 convolution kernels over gathered rows.
//!
//! Rows are voxel-major (`rows x channels`). `idx` holds 27 input row indices
//! per output row, `NONE` for a zero input. Weights are laid out
//! `[tap][in][out]`. Common widths are monomorphised so the output row stays
//! in registers.

use super::{NONE, TAPS};

macro_rules! dispatch {
    ($hid:expr, $f:ident, $($arg:expr),*) => {
        match $hid {
            4 => $f::<4>($($arg),*),
            8 => $f::<8>($($arg),*),
            12 => $f::<12>($($arg),*),
            16 => $f::<16>($($arg),*),
            24 => $f::<24>($($arg),*),
            32 => $f::<32>($($arg),*),
            _ => $f::<0>($($arg),*),
        }
    };
}

/// `out[o] = b + sum over taps of input[idx[o, tap]] . w[tap]`.
pub(super) fn conv_forward(input: &[f64], cin: usize, idx: &[u32], w: &[f64], b: &[f64], out: &mut [f64]) {
    dispatch!(b.len(), forward_impl, input, cin, idx, w, b, out)
}

fn forward_impl<const H: usize>(input: &[f64], cin: usize, idx: &[u32], w: &[f64], b: &[f64], out: &mut [f64]) {
    let hid = b.len();
    if H == 0 {
        for (row, nb) in out.chunks_exact_mut(hid).zip(idx.chunks_exact(TAPS)) {
            row.copy_from_slice(b);
            for (tap, &u) in nb.iter().enumerate() {
                if u == NONE {
                    continue;
                }
                let xin = &input[u as usize * cin..(u as usize + 1) * cin];
                let wt = &w[tap * cin * hid..(tap + 1) * cin * hid];
                for (&xv, wrow) in xin.iter().zip(wt.chunks_exact(hid)) {
                    for (o, &wv) in row.iter_mut().zip(wrow) {
                        *o += xv * wv;
                    }
                }
            }
        }
        return;
    }
    for (row, nb) in out.chunks_exact_mut(H).zip(idx.chunks_exact(TAPS)) {
        let mut acc = [0.0; H];
        acc.copy_from_slice(b);
        for (tap, &u) in nb.iter().enumerate() {
            if u == NONE {
                continue;
            }
            let xin = &input[u as usize * cin..(u as usize + 1) * cin];
            let wt = &w[tap * cin * H..(tap + 1) * cin * H];
            for (&xv, wrow) in xin.iter().zip(wt.chunks_exact(H)) {
                let wrow: &[f64; H] = wrow.try_into().unwrap();
                for o in 0..H {
                    acc[o] += xv * wrow[o];
                }
            }
        }
        row.copy_from_slice(&acc);
    }
}

/// Accumulates weight, bias and (optionally) input gradients of
/// [`conv_forward`] given the output gradient `gout`.
#[allow(clippy::too_many_arguments)]
pub(super) fn conv_backward(
    input: &[f64],
    cin: usize,
    idx: &[u32],
    w: &[f64],
    gout: &[f64],
    gw: &mut [f64],
    gb: &mut [f64],
    gin: Option<&mut [f64]>,
) {
    dispatch!(gb.len(), backward_impl, input, cin, idx, w, gout, gw, gb, gin)
}

#[allow(clippy::too_many_arguments)]
fn backward_impl<const H: usize>(
    input: &[f64],
    cin: usize,
    idx: &[u32],
    w: &[f64],
    gout: &[f64],
    gw: &mut [f64],
    gb: &mut [f64],
    mut gin: Option<&mut [f64]>,
) {
    let hid = gb.len();
    for (g, nb) in gout.chunks_exact(hid).zip(idx.chunks_exact(TAPS)) {
        for (b, &gv) in gb.iter_mut().zip(g) {
            *b += gv;
        }
        for (tap, &u) in nb.iter().enumerate() {
            if u == NONE {
                continue;
            }
            let u = u as usize;
            let xin = &input[u * cin..(u + 1) * cin];
            let base = tap * cin * hid;
            let gwt = &mut gw[base..base + cin * hid];
            if H == 0 {
                for (&xv, gwrow) in xin.iter().zip(gwt.chunks_exact_mut(hid)) {
                    for (gwv, &gv) in gwrow.iter_mut().zip(g) {
                        *gwv += xv * gv;
                    }
                }
            } else {
                let g: &[f64; H] = g.try_into().unwrap();
                for (&xv, gwrow) in xin.iter().zip(gwt.chunks_exact_mut(H)) {
                    let gwrow: &mut [f64; H] = gwrow.try_into().unwrap();
                    for o in 0..H {
                        gwrow[o] += xv * g[o];
                    }
                }
            }
            if let Some(gin) = gin.as_deref_mut() {
                let wt = &w[base..base + cin * hid];
                let gx = &mut gin[u * cin..(u + 1) * cin];
                for (gxv, wrow) in gx.iter_mut().zip(wt.chunks_exact(hid)) {
                    *gxv += wrow.iter().zip(g).map(|(a, b)| a * b).sum::<f64>();
                }
            }
        }
    }
}
