//! Convolutions as im2col + gemm, plus the fully-connected op. Single
//! threaded; the gemm (matrixmultiply via ndarray) dominates runtime.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, Array4, ArrayView2, ArrayView4, Ix1, Ix2, Ix4};

use super::{Graph, NodeId};

fn matmul(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Array2<f64> {
    let mut c = Array2::<f64>::zeros((a.nrows(), b.ncols()));
    general_mat_mul(1.0, &a, &b, 0.0, &mut c);
    c
}

#[derive(Clone, Copy)]
struct ConvGeom {
    b: usize,
    c_in: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn new(
        (b, c_in, h, w): (usize, usize, usize, usize),
        (kh, kw): (usize, usize),
        stride: usize,
        pad: usize,
    ) -> Self {
        assert!(stride >= 1);
        assert!(h + 2 * pad >= kh && w + 2 * pad >= kw, "kernel larger than padded input");
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (w + 2 * pad - kw) / stride + 1;
        ConvGeom { b, c_in, h, w, kh, kw, stride, pad, ho, wo }
    }
}

/// `[Cin*kh*kw, B*Ho*Wo]` patch matrix; out-of-range taps read zero.
fn im2col(x: &ArrayView4<f64>, g: &ConvGeom) -> Array2<f64> {
    let mut cols = Array2::<f64>::zeros((g.c_in * g.kh * g.kw, g.b * g.ho * g.wo));
    for bi in 0..g.b {
        for ci in 0..g.c_in {
            for di in 0..g.kh {
                for dj in 0..g.kw {
                    let row = (ci * g.kh + di) * g.kw + dj;
                    for ho in 0..g.ho {
                        let hi = (ho * g.stride + di) as isize - g.pad as isize;
                        if hi < 0 || hi >= g.h as isize {
                            continue;
                        }
                        let col_base = (bi * g.ho + ho) * g.wo;
                        for wo in 0..g.wo {
                            let wi = (wo * g.stride + dj) as isize - g.pad as isize;
                            if wi < 0 || wi >= g.w as isize {
                                continue;
                            }
                            cols[[row, col_base + wo]] =
                                x[[bi, ci, hi as usize, wi as usize]];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-adds patch columns back onto the image.
fn col2im_add(cols: &ArrayView2<f64>, g: &ConvGeom) -> Array4<f64> {
    let mut x = Array4::<f64>::zeros((g.b, g.c_in, g.h, g.w));
    for bi in 0..g.b {
        for ci in 0..g.c_in {
            for di in 0..g.kh {
                for dj in 0..g.kw {
                    let row = (ci * g.kh + di) * g.kw + dj;
                    for ho in 0..g.ho {
                        let hi = (ho * g.stride + di) as isize - g.pad as isize;
                        if hi < 0 || hi >= g.h as isize {
                            continue;
                        }
                        let col_base = (bi * g.ho + ho) * g.wo;
                        for wo in 0..g.wo {
                            let wi = (wo * g.stride + dj) as isize - g.pad as isize;
                            if wi < 0 || wi >= g.w as isize {
                                continue;
                            }
                            x[[bi, ci, hi as usize, wi as usize]] +=
                                cols[[row, col_base + wo]];
                        }
                    }
                }
            }
        }
    }
    x
}

/// `[C, B*H*W]` matrix view of a `[B, C, H, W]` tensor (copying).
fn bchw_to_cm(x: &ArrayView4<f64>) -> Array2<f64> {
    let (b, c, h, w) = x.dim();
    let perm = x.view().permuted_axes([1, 0, 2, 3]);
    perm.as_standard_layout()
        .to_owned()
        .into_shape_with_order((c, b * h * w))
        .expect("contiguous")
}

/// Inverse of [`bchw_to_cm`].
fn cm_to_bchw(m: &Array2<f64>, b: usize, h: usize, w: usize) -> Array4<f64> {
    let c = m.nrows();
    let r = m
        .view()
        .into_shape_with_order((c, b, h, w))
        .expect("contiguous")
        .permuted_axes([1, 0, 2, 3]);
    r.as_standard_layout().to_owned()
}

fn as4(v: &ndarray::ArrayD<f64>) -> ArrayView4<'_, f64> {
    v.view().into_dimensionality::<Ix4>().expect("expected a 4-d tensor")
}

/// 2-d convolution. `x [B, Cin, H, W]`, `w [Cout, Cin, kh, kw]`, `b [Cout]`.
pub fn conv2d(g: &mut Graph, x: NodeId, w: NodeId, bias: NodeId, stride: usize, pad: usize) -> NodeId {
    let xv = as4(g.value(x));
    let wv = as4(g.value(w));
    let (c_out, c_in, kh, kw) = wv.dim();
    assert_eq!(xv.dim().1, c_in, "conv2d input channels");
    let geom = ConvGeom::new(xv.dim(), (kh, kw), stride, pad);
    let cols = im2col(&xv, &geom);
    let w_mat = wv
        .into_shape_with_order((c_out, c_in * kh * kw))
        .expect("contiguous weights");
    let mut y_mat = matmul(w_mat, cols.view());
    let bv = g.value(bias).view().into_dimensionality::<Ix1>().expect("bias 1-d");
    assert_eq!(bv.len(), c_out);
    for (co, mut row) in y_mat.outer_iter_mut().enumerate() {
        row.mapv_inplace(|v| v + bv[co]);
    }
    let y = cm_to_bchw(&y_mat, geom.b, geom.ho, geom.wo);
    g.push_op(
        y.into_dyn(),
        vec![x, w, bias],
        Box::new(move |go, ins, rg| {
            let gv = as4(go);
            let g_mat = bchw_to_cm(&gv); // [Cout, B*Ho*Wo]
            let dw = rg[1].then(|| {
                matmul(g_mat.view(), cols.t())
                    .into_shape_with_order((c_out, c_in, kh, kw))
                    .expect("contiguous")
                    .into_dyn()
            });
            let db = rg[2].then(|| {
                Array1::from_iter(g_mat.outer_iter().map(|r| r.sum())).into_dyn()
            });
            let dx = rg[0].then(|| {
                let wv = as4(ins[1]);
                let w_mat = wv
                    .into_shape_with_order((c_out, c_in * kh * kw))
                    .expect("contiguous weights");
                let dcols = matmul(w_mat.t(), g_mat.view());
                col2im_add(&dcols.view(), &geom).into_dyn()
            });
            vec![dx, dw, db]
        }),
    )
}

/// 2-d transposed convolution. `x [B, Cin, H, W]`, `w [Cin, Cout, kh, kw]`.
/// Output side is `(H - 1) * stride + kh - 2 * pad`.
pub fn conv_transpose2d(
    g: &mut Graph,
    x: NodeId,
    w: NodeId,
    bias: NodeId,
    stride: usize,
    pad: usize,
) -> NodeId {
    let xv = as4(g.value(x));
    let wv = as4(g.value(w));
    let (c_in, c_out, kh, kw) = wv.dim();
    let (b, xc, h, w_in) = xv.dim();
    assert_eq!(xc, c_in, "conv_transpose2d input channels");
    let ho = (h - 1) * stride + kh - 2 * pad;
    let wo = (w_in - 1) * stride + kw - 2 * pad;
    // The output plays the role of the conv input in im2col geometry.
    let geom = ConvGeom::new((b, c_out, ho, wo), (kh, kw), stride, pad);
    assert_eq!((geom.ho, geom.wo), (h, w_in), "transposed conv geometry");
    let x_mat = bchw_to_cm(&xv); // [Cin, B*H*W]
    let w_mat = wv
        .into_shape_with_order((c_in, c_out * kh * kw))
        .expect("contiguous weights");
    let cols_y = matmul(w_mat.t(), x_mat.view()); // [Cout*kh*kw, B*H*W]
    let mut y = col2im_add(&cols_y.view(), &geom);
    let bv = g.value(bias).view().into_dimensionality::<Ix1>().expect("bias 1-d");
    assert_eq!(bv.len(), c_out);
    for bi in 0..b {
        for co in 0..c_out {
            y.slice_mut(ndarray::s![bi, co, .., ..])
                .mapv_inplace(|v| v + bv[co]);
        }
    }
    g.push_op(
        y.into_dyn(),
        vec![x, w, bias],
        Box::new(move |go, ins, rg| {
            let gv = as4(go);
            let cols_g = im2col(&gv, &geom); // [Cout*kh*kw, B*H*W]
            let dx = rg[0].then(|| {
                let wv = as4(ins[1]);
                let w_mat = wv
                    .into_shape_with_order((c_in, c_out * kh * kw))
                    .expect("contiguous weights");
                let dx_mat = matmul(w_mat, cols_g.view());
                cm_to_bchw(&dx_mat, b, h, w_in).into_dyn()
            });
            let dw = rg[1].then(|| {
                let xv = as4(ins[0]);
                let x_mat = bchw_to_cm(&xv);
                matmul(x_mat.view(), cols_g.t())
                    .into_shape_with_order((c_in, c_out, kh, kw))
                    .expect("contiguous")
                    .into_dyn()
            });
            let db = rg[2].then(|| {
                let mut db = Array1::<f64>::zeros(c_out);
                for bi in 0..b {
                    for co in 0..c_out {
                        db[co] += gv.slice(ndarray::s![bi, co, .., ..]).sum();
                    }
                }
                db.into_dyn()
            });
            vec![dx, dw, db]
        }),
    )
}

/// Fully connected: `x [B, In]`, `w [Out, In]`, `b [Out]` -> `[B, Out]`.
pub fn linear(g: &mut Graph, x: NodeId, w: NodeId, bias: NodeId) -> NodeId {
    let xv = g.value(x).view().into_dimensionality::<Ix2>().expect("linear input 2-d");
    let wv = g.value(w).view().into_dimensionality::<Ix2>().expect("linear weight 2-d");
    let (out_dim, in_dim) = wv.dim();
    assert_eq!(xv.dim().1, in_dim, "linear input width");
    let mut y = matmul(xv, wv.t());
    let bv = g.value(bias).view().into_dimensionality::<Ix1>().expect("bias 1-d");
    assert_eq!(bv.len(), out_dim);
    for mut row in y.outer_iter_mut() {
        row.zip_mut_with(&bv, |v, &b| *v += b);
    }
    g.push_op(
        y.into_dyn(),
        vec![x, w, bias],
        Box::new(move |go, ins, rg| {
            let gv = go.view().into_dimensionality::<Ix2>().expect("grad 2-d");
            let xv = ins[0].view().into_dimensionality::<Ix2>().expect("input 2-d");
            let wv = ins[1].view().into_dimensionality::<Ix2>().expect("weight 2-d");
            let dx = rg[0].then(|| matmul(gv.view(), wv.view()).into_dyn());
            let dw = rg[1].then(|| matmul(gv.t(), xv.view()).into_dyn());
            let db = rg[2].then(|| {
                let mut db = Array1::<f64>::zeros(out_dim);
                for row in gv.outer_iter() {
                    db.zip_mut_with(&row, |d, &v| *d += v);
                }
                db.into_dyn()
            });
            vec![dx, dw, db]
        }),
    )
}
