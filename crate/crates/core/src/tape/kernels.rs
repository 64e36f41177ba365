//! Value-level compute kernels shared by the tape's forward and backward
//! passes. Keeping both passes on the same kernels makes replayed and
//! recorded evaluations bit-identical.

use crate::tensor::Tensor;

/// "Same" convolution in NHWC layout via im2col and a dense GEMM.
///
/// `x`: `(B, H, W, Cin)`, `k`: `(kh, kw, Cin, Cout)` with odd `kh`, `kw`.
/// The kernel tensor's row-major layout is already the `(kh*kw*Cin, Cout)`
/// matrix the GEMM needs, so only the patch matrix is materialized.
pub fn conv2d(x: &Tensor, k: &Tensor) -> Tensor {
    let [b, h, w, cin] = x.dims();
    let [kh, kw, kcin, cout] = k.dims();
    debug_assert_eq!(cin, kcin);
    let m = b * h * w;
    let kdim = kh * kw * cin;
    let mut out = vec![0.0f64; m * cout];
    // A 1x1 kernel is a plain channel mix; the input already is the patch
    // matrix.
    let patches;
    let a = if kh == 1 && kw == 1 {
        x.data()
    } else {
        patches = im2col(x, kh, kw);
        &patches[..]
    };
    unsafe {
        matrixmultiply::dgemm(
            m,
            kdim,
            cout,
            1.0,
            a.as_ptr(),
            kdim as isize,
            1,
            k.data().as_ptr(),
            cout as isize,
            1,
            0.0,
            out.as_mut_ptr(),
            cout as isize,
            1,
        );
    }
    Tensor::new([b, h, w, cout], out).expect("conv2d output shape")
}

/// Patch matrix of shape `(B*H*W, kh*kw*Cin)`; out-of-bounds taps are zero.
fn im2col(x: &Tensor, kh: usize, kw: usize) -> Vec<f64> {
    let [b, h, w, cin] = x.dims();
    let ph = kh / 2;
    let pw = kw / 2;
    let kdim = kh * kw * cin;
    let mut patches = vec![0.0f64; b * h * w * kdim];
    let data = x.data();
    for bi in 0..b {
        for y in 0..h {
            let row_base = (bi * h + y) * w;
            for dy in 0..kh {
                let sy = y as isize + dy as isize - ph as isize;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                let src_row = ((bi * h + sy as usize) * w) * cin;
                for xp in 0..w {
                    let dst_base = (row_base + xp) * kdim + dy * kw * cin;
                    for dx in 0..kw {
                        let sx = xp as isize + dx as isize - pw as isize;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        let src = src_row + sx as usize * cin;
                        let dst = dst_base + dx * cin;
                        patches[dst..dst + cin].copy_from_slice(&data[src..src + cin]);
                    }
                }
            }
        }
    }
    patches
}

/// Spatially flipped kernel with in/out channels transposed:
/// `out[dy, dx, co, ci] = k[kh-1-dy, kw-1-dx, ci, co]`.
///
/// Convolving an output cotangent with this kernel is the input-side
/// adjoint of [`conv2d`]; the map is an involution.
pub fn flip_transpose(k: &Tensor) -> Tensor {
    let [kh, kw, cin, cout] = k.dims();
    let mut out = vec![0.0f64; k.len()];
    let data = k.data();
    for dy in 0..kh {
        for dx in 0..kw {
            for ci in 0..cin {
                for co in 0..cout {
                    let src = ((dy * kw + dx) * cin + ci) * cout + co;
                    let dst = (((kh - 1 - dy) * kw + (kw - 1 - dx)) * cout + co) * cin + ci;
                    out[dst] = data[src];
                }
            }
        }
    }
    Tensor::new([kh, kw, cout, cin], out).expect("flip_transpose shape")
}

/// Kernel-side adjoint of [`conv2d`]: correlates the input with the output
/// cotangent, producing a `(kh, kw, Cin, Cout)` tensor. Computed as
/// `im2col(x)^T * g` with strided GEMM.
pub fn kernel_grad(x: &Tensor, g: &Tensor, kh: usize, kw: usize) -> Tensor {
    let [b, h, w, cin] = x.dims();
    let cout = g.dims()[3];
    let m = kh * kw * cin;
    let n = b * h * w;
    let patches;
    let a = if kh == 1 && kw == 1 {
        x.data()
    } else {
        patches = im2col(x, kh, kw);
        &patches[..]
    };
    let mut out = vec![0.0f64; m * cout];
    unsafe {
        matrixmultiply::dgemm(
            m,
            n,
            cout,
            1.0,
            a.as_ptr(),
            1,
            m as isize,
            g.data().as_ptr(),
            cout as isize,
            1,
            0.0,
            out.as_mut_ptr(),
            cout as isize,
            1,
        );
    }
    Tensor::new([kh, kw, cin, cout], out).expect("kernel_grad shape")
}

/// Overflow-safe softplus `ln(1 + e^x)`.
#[inline]
pub fn softplus(v: f64) -> f64 {
    if v > 0.0 {
        v + (-v).exp().ln_1p()
    } else {
        v.exp().ln_1p()
    }
}

/// Overflow-safe logistic sigmoid.
#[inline]
pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Per-channel sum over batch and spatial dimensions: `(B,H,W,C) -> (1,1,1,C)`.
pub fn channel_sum(x: &Tensor) -> Tensor {
    let c = x.dims()[3];
    let mut out = vec![0.0f64; c];
    for (i, &v) in x.data().iter().enumerate() {
        out[i % c] += v;
    }
    Tensor::new([1, 1, 1, c], out).expect("channel_sum shape")
}

/// Tile a `(1,1,1,C)` vector over every batch/spatial position of `like`.
pub fn broadcast_channels(v: &Tensor, like: [usize; 4]) -> Tensor {
    let c = like[3];
    let reps = like[0] * like[1] * like[2];
    let src = v.data();
    let mut out = Vec::with_capacity(reps * c);
    for _ in 0..reps {
        out.extend_from_slice(src);
    }
    Tensor::new(like, out).expect("broadcast_channels shape")
}

pub fn sum_all(x: &Tensor) -> Tensor {
    Tensor::scalar(x.data().iter().sum())
}

pub fn broadcast_all(s: f64, like: [usize; 4]) -> Tensor {
    Tensor::full(like, s)
}

/// Concatenate along channels; shapes must agree elsewhere.
pub fn concat_channels(a: &Tensor, b: &Tensor) -> Tensor {
    let [ba, h, w, ca] = a.dims();
    let cb = b.dims()[3];
    let mut out = Vec::with_capacity(a.len() + b.len());
    let (da, db) = (a.data(), b.data());
    for pos in 0..ba * h * w {
        out.extend_from_slice(&da[pos * ca..(pos + 1) * ca]);
        out.extend_from_slice(&db[pos * cb..(pos + 1) * cb]);
    }
    Tensor::new([ba, h, w, ca + cb], out).expect("concat_channels shape")
}

/// Channel slice `[from, to)`.
pub fn slice_channels(x: &Tensor, from: usize, to: usize) -> Tensor {
    let [b, h, w, c] = x.dims();
    let width = to - from;
    let mut out = Vec::with_capacity(b * h * w * width);
    let data = x.data();
    for pos in 0..b * h * w {
        out.extend_from_slice(&data[pos * c + from..pos * c + to]);
    }
    Tensor::new([b, h, w, width], out).expect("slice_channels shape")
}

/// Scatter `x` into a zero tensor with `total` channels, starting at `from`.
/// Adjoint of [`slice_channels`].
pub fn embed_channels(x: &Tensor, from: usize, total: usize) -> Tensor {
    let [b, h, w, c] = x.dims();
    let mut out = vec![0.0f64; b * h * w * total];
    let data = x.data();
    for pos in 0..b * h * w {
        out[pos * total + from..pos * total + from + c]
            .copy_from_slice(&data[pos * c..(pos + 1) * c]);
    }
    Tensor::new([b, h, w, total], out).expect("embed_channels shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_identity_on_1x1() {
        let x = Tensor::new([1, 1, 1, 1], vec![2.0]).unwrap();
        let k = Tensor::new([1, 1, 1, 1], vec![1.0]).unwrap();
        assert_eq!(conv2d(&x, &k).data(), &[2.0]);
    }

    #[test]
    fn conv_ones_4x4_with_3x3_box() {
        // Hand-computed dense convolution: interior taps count 9 neighbors,
        // edges 6, corners 4.
        let x = Tensor::ones([1, 4, 4, 1]);
        let k = Tensor::ones([3, 3, 1, 1]);
        let y = conv2d(&x, &k);
        assert_eq!(y.at(0, 1, 1, 0), 9.0);
        assert_eq!(y.at(0, 1, 2, 0), 9.0);
        assert_eq!(y.at(0, 0, 1, 0), 6.0);
        assert_eq!(y.at(0, 2, 0, 0), 6.0);
        assert_eq!(y.at(0, 0, 0, 0), 4.0);
        assert_eq!(y.at(0, 3, 3, 0), 4.0);
    }

    #[test]
    fn conv_zero_kernel_annihilates() {
        let x = Tensor::new([1, 3, 3, 2], (0..18).map(|v| v as f64).collect()).unwrap();
        let k = Tensor::zeros([3, 3, 2, 4]);
        let y = conv2d(&x, &k);
        assert_eq!(y.dims(), [1, 3, 3, 4]);
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv_matches_direct_loops() {
        // Independent direct-sum oracle over a small random-ish tensor.
        let x = Tensor::new([2, 3, 4, 2], (0..48).map(|v| (v as f64 * 0.37).sin()).collect()).unwrap();
        let k = Tensor::new([3, 3, 2, 3], (0..54).map(|v| (v as f64 * 0.11).cos()).collect()).unwrap();
        let y = conv2d(&x, &k);
        let [b, h, w, _] = x.dims();
        for bi in 0..b {
            for yy in 0..h {
                for xx in 0..w {
                    for co in 0..3 {
                        let mut acc = 0.0;
                        for dy in 0..3i64 {
                            for dx in 0..3i64 {
                                let sy = yy as i64 + dy - 1;
                                let sx = xx as i64 + dx - 1;
                                if sy < 0 || sy >= h as i64 || sx < 0 || sx >= w as i64 {
                                    continue;
                                }
                                for ci in 0..2 {
                                    acc += x.at(bi, sy as usize, sx as usize, ci)
                                        * k.at(dy as usize, dx as usize, ci, co);
                                }
                            }
                        }
                        let got = y.at(bi, yy, xx, co);
                        assert!((got - acc).abs() < 1e-12, "mismatch {got} vs {acc}");
                    }
                }
            }
        }
    }

    #[test]
    fn flip_transpose_is_involution() {
        let k = Tensor::new([3, 1, 2, 4], (0..24).map(|v| v as f64).collect()).unwrap();
        let back = flip_transpose(&flip_transpose(&k));
        assert_eq!(back.dims(), k.dims());
        assert_eq!(back.data(), k.data());
    }

    #[test]
    fn stable_pointwise_values() {
        assert!((softplus(0.0) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((sigmoid(0.0) - 0.5).abs() < 1e-15);
        assert!(softplus(800.0).is_finite());
        assert!(softplus(-800.0) >= 0.0);
        assert!((sigmoid(800.0) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn concat_slice_embed_agree() {
        let a = Tensor::new([1, 2, 2, 2], (0..8).map(|v| v as f64).collect()).unwrap();
        let b = Tensor::new([1, 2, 2, 3], (8..20).map(|v| v as f64).collect()).unwrap();
        let cat = concat_channels(&a, &b);
        assert_eq!(cat.dims(), [1, 2, 2, 5]);
        assert_eq!(slice_channels(&cat, 0, 2).data(), a.data());
        assert_eq!(slice_channels(&cat, 2, 5).data(), b.data());
        let emb = embed_channels(&a, 1, 4);
        assert_eq!(emb.at(0, 0, 0, 1), 0.0);
        assert_eq!(emb.at(0, 0, 0, 2), 1.0);
        assert_eq!(emb.at(0, 1, 1, 0), 0.0);
    }
}
