//! Differentiable tensor ops. Feature maps are `[B, C, H, W]`, row batches
//! `[B, D]`, scalars 0-dim. Every op validates shapes with assertions; the
//! networks layer converts config mismatches into typed errors before ops run.

use ndarray::{Array1, Array2, Array4, ArrayD, Axis, Ix1, Ix2, Ix4};

use super::{Graph, NodeId};

fn as4(v: &ArrayD<f64>) -> ndarray::ArrayView4<'_, f64> {
    v.view().into_dimensionality::<Ix4>().expect("expected a 4-d tensor")
}

fn as2(v: &ArrayD<f64>) -> ndarray::ArrayView2<'_, f64> {
    v.view().into_dimensionality::<Ix2>().expect("expected a 2-d tensor")
}

fn as1(v: &ArrayD<f64>) -> ndarray::ArrayView1<'_, f64> {
    v.view().into_dimensionality::<Ix1>().expect("expected a 1-d tensor")
}

pub fn add(g: &mut Graph, x: NodeId, y: NodeId) -> NodeId {
    let v = g.value(x) + g.value(y);
    g.push_op(
        v,
        vec![x, y],
        Box::new(|go, _, rg| {
            vec![
                rg[0].then(|| go.clone()),
                rg[1].then(|| go.clone()),
            ]
        }),
    )
}

pub fn sub(g: &mut Graph, x: NodeId, y: NodeId) -> NodeId {
    let v = g.value(x) - g.value(y);
    g.push_op(
        v,
        vec![x, y],
        Box::new(|go, _, rg| {
            vec![rg[0].then(|| go.clone()), rg[1].then(|| go.mapv(|v| -v))]
        }),
    )
}

pub fn mul(g: &mut Graph, x: NodeId, y: NodeId) -> NodeId {
    assert_eq!(g.value(x).shape(), g.value(y).shape());
    let v = g.value(x) * g.value(y);
    g.push_op(
        v,
        vec![x, y],
        Box::new(|go, ins, rg| {
            vec![rg[0].then(|| go * ins[1]), rg[1].then(|| go * ins[0])]
        }),
    )
}

pub fn scale(g: &mut Graph, x: NodeId, c: f64) -> NodeId {
    let v = g.value(x).mapv(|v| v * c);
    g.push_op(
        v,
        vec![x],
        Box::new(move |go, _, _| vec![Some(go.mapv(|v| v * c))]),
    )
}

pub fn add_scalar(g: &mut Graph, x: NodeId, c: f64) -> NodeId {
    let v = g.value(x).mapv(|v| v + c);
    g.push_op(v, vec![x], Box::new(|go, _, _| vec![Some(go.clone())]))
}

pub fn relu(g: &mut Graph, x: NodeId) -> NodeId {
    let v = g.value(x).mapv(|v| v.max(0.0));
    g.push_op(
        v,
        vec![x],
        Box::new(|go, ins, _| {
            let mut dx = go.clone();
            dx.zip_mut_with(ins[0], |d, &x| {
                if x <= 0.0 {
                    *d = 0.0;
                }
            });
            vec![Some(dx)]
        }),
    )
}

pub fn leaky_relu(g: &mut Graph, x: NodeId, slope: f64) -> NodeId {
    let v = g.value(x).mapv(|v| if v > 0.0 { v } else { slope * v });
    g.push_op(
        v,
        vec![x],
        Box::new(move |go, ins, _| {
            let mut dx = go.clone();
            dx.zip_mut_with(ins[0], |d, &x| {
                if x <= 0.0 {
                    *d *= slope;
                }
            });
            vec![Some(dx)]
        }),
    )
}

pub fn tanh(g: &mut Graph, x: NodeId) -> NodeId {
    let y = g.value(x).mapv(f64::tanh);
    let saved = y.clone();
    g.push_op(
        y,
        vec![x],
        Box::new(move |go, _, _| {
            let mut dx = go.clone();
            dx.zip_mut_with(&saved, |d, &y| *d *= 1.0 - y * y);
            vec![Some(dx)]
        }),
    )
}

pub fn sigmoid(g: &mut Graph, x: NodeId) -> NodeId {
    let y = g.value(x).mapv(|v| 1.0 / (1.0 + (-v).exp()));
    let saved = y.clone();
    g.push_op(
        y,
        vec![x],
        Box::new(move |go, _, _| {
            let mut dx = go.clone();
            dx.zip_mut_with(&saved, |d, &y| *d *= y * (1.0 - y));
            vec![Some(dx)]
        }),
    )
}

/// Per-sample, per-channel normalization over the spatial extent (no affine).
pub fn instance_norm(g: &mut Graph, x: NodeId, eps: f64) -> NodeId {
    let xv = as4(g.value(x));
    let (b, c, h, w) = xv.dim();
    let area = (h * w) as f64;
    let mut y = Array4::<f64>::zeros((b, c, h, w));
    let mut inv_std = Array2::<f64>::zeros((b, c));
    for bi in 0..b {
        for ci in 0..c {
            let plane = xv.index_axis(Axis(0), bi);
            let plane = plane.index_axis(Axis(0), ci);
            let mean = plane.sum() / area;
            let var = plane.fold(0.0, |acc, &v| acc + (v - mean) * (v - mean)) / area;
            let istd = 1.0 / (var + eps).sqrt();
            inv_std[[bi, ci]] = istd;
            let mut out = y.index_axis_mut(Axis(0), bi);
            let mut out = out.index_axis_mut(Axis(0), ci);
            out.zip_mut_with(&plane, |o, &v| *o = (v - mean) * istd);
        }
    }
    let saved_y = y.clone();
    g.push_op(
        y.into_dyn(),
        vec![x],
        Box::new(move |go, _, _| {
            let gv = as4(go);
            let mut dx = Array4::<f64>::zeros((b, c, h, w));
            for bi in 0..b {
                for ci in 0..c {
                    let gp = gv.index_axis(Axis(0), bi);
                    let gp = gp.index_axis(Axis(0), ci);
                    let yp = saved_y.index_axis(Axis(0), bi);
                    let yp = yp.index_axis(Axis(0), ci);
                    let g_mean = gp.sum() / area;
                    let gy_mean = gp
                        .iter()
                        .zip(yp.iter())
                        .map(|(&gi, &yi)| gi * yi)
                        .sum::<f64>()
                        / area;
                    let istd = inv_std[[bi, ci]];
                    let mut dp = dx.index_axis_mut(Axis(0), bi);
                    let mut dp = dp.index_axis_mut(Axis(0), ci);
                    for ((d, &gi), &yi) in dp.iter_mut().zip(gp.iter()).zip(yp.iter()) {
                        *d = istd * (gi - g_mean - yi * gy_mean);
                    }
                }
            }
            vec![Some(dx.into_dyn())]
        }),
    )
}

/// Nearest-neighbour 2x spatial upsampling.
pub fn upsample2x(g: &mut Graph, x: NodeId) -> NodeId {
    let xv = as4(g.value(x));
    let (b, c, h, w) = xv.dim();
    let mut y = Array4::<f64>::zeros((b, c, 2 * h, 2 * w));
    for bi in 0..b {
        for ci in 0..c {
            for hi in 0..h {
                for wi in 0..w {
                    let v = xv[[bi, ci, hi, wi]];
                    y[[bi, ci, 2 * hi, 2 * wi]] = v;
                    y[[bi, ci, 2 * hi, 2 * wi + 1]] = v;
                    y[[bi, ci, 2 * hi + 1, 2 * wi]] = v;
                    y[[bi, ci, 2 * hi + 1, 2 * wi + 1]] = v;
                }
            }
        }
    }
    g.push_op(
        y.into_dyn(),
        vec![x],
        Box::new(move |go, _, _| {
            let gv = as4(go);
            let mut dx = Array4::<f64>::zeros((b, c, h, w));
            for bi in 0..b {
                for ci in 0..c {
                    for hi in 0..h {
                        for wi in 0..w {
                            dx[[bi, ci, hi, wi]] = gv[[bi, ci, 2 * hi, 2 * wi]]
                                + gv[[bi, ci, 2 * hi, 2 * wi + 1]]
                                + gv[[bi, ci, 2 * hi + 1, 2 * wi]]
                                + gv[[bi, ci, 2 * hi + 1, 2 * wi + 1]];
                        }
                    }
                }
            }
            vec![Some(dx.into_dyn())]
        }),
    )
}

/// 2x2 average pooling (stride 2).
pub fn avg_pool2x(g: &mut Graph, x: NodeId) -> NodeId {
    let xv = as4(g.value(x));
    let (b, c, h, w) = xv.dim();
    assert!(h % 2 == 0 && w % 2 == 0, "avg_pool2x needs even spatial size");
    let (ho, wo) = (h / 2, w / 2);
    let mut y = Array4::<f64>::zeros((b, c, ho, wo));
    for bi in 0..b {
        for ci in 0..c {
            for hi in 0..ho {
                for wi in 0..wo {
                    y[[bi, ci, hi, wi]] = 0.25
                        * (xv[[bi, ci, 2 * hi, 2 * wi]]
                            + xv[[bi, ci, 2 * hi, 2 * wi + 1]]
                            + xv[[bi, ci, 2 * hi + 1, 2 * wi]]
                            + xv[[bi, ci, 2 * hi + 1, 2 * wi + 1]]);
                }
            }
        }
    }
    g.push_op(
        y.into_dyn(),
        vec![x],
        Box::new(move |go, _, _| {
            let gv = as4(go);
            let mut dx = Array4::<f64>::zeros((b, c, h, w));
            for bi in 0..b {
                for ci in 0..c {
                    for hi in 0..ho {
                        for wi in 0..wo {
                            let v = 0.25 * gv[[bi, ci, hi, wi]];
                            dx[[bi, ci, 2 * hi, 2 * wi]] = v;
                            dx[[bi, ci, 2 * hi, 2 * wi + 1]] = v;
                            dx[[bi, ci, 2 * hi + 1, 2 * wi]] = v;
                            dx[[bi, ci, 2 * hi + 1, 2 * wi + 1]] = v;
                        }
                    }
                }
            }
            vec![Some(dx.into_dyn())]
        }),
    )
}

/// Channel concatenation of equally sized feature maps.
pub fn concat_ch(g: &mut Graph, xs: &[NodeId]) -> NodeId {
    assert!(!xs.is_empty());
    let views: Vec<_> = xs.iter().map(|&x| as4(g.value(x))).collect();
    let (b, _, h, w) = views[0].dim();
    let chans: Vec<usize> = views.iter().map(|v| v.dim().1).collect();
    for v in &views {
        let (vb, _, vh, vw) = v.dim();
        assert_eq!((vb, vh, vw), (b, h, w), "concat_ch spatial mismatch");
    }
    let total: usize = chans.iter().sum();
    let mut y = Array4::<f64>::zeros((b, total, h, w));
    let mut off = 0;
    for v in &views {
        let c = v.dim().1;
        y.slice_mut(ndarray::s![.., off..off + c, .., ..]).assign(v);
        off += c;
    }
    g.push_op(
        y.into_dyn(),
        xs.to_vec(),
        Box::new(move |go, _, rg| {
            let gv = as4(go);
            let mut off = 0;
            let mut out = Vec::with_capacity(chans.len());
            for (i, &c) in chans.iter().enumerate() {
                let piece = rg[i].then(|| {
                    gv.slice(ndarray::s![.., off..off + c, .., ..])
                        .to_owned()
                        .into_dyn()
                });
                out.push(piece);
                off += c;
            }
            out
        }),
    )
}

/// `[B, C, H, W]` -> `[B, C*H*W]`.
pub fn flatten(g: &mut Graph, x: NodeId) -> NodeId {
    let xv = g.value(x);
    let shape = xv.shape().to_vec();
    let b = shape[0];
    let rest: usize = shape[1..].iter().product();
    let v = xv
        .to_owned()
        .into_shape_with_order((b, rest))
        .expect("standard layout")
        .into_dyn();
    g.push_op(
        v,
        vec![x],
        Box::new(move |go, _, _| {
            let dx = go
                .to_owned()
                .into_shape_with_order(shape.as_slice())
                .expect("standard layout");
            vec![Some(dx)]
        }),
    )
}

/// Mean over every element; returns a 0-dim node.
pub fn mean_all(g: &mut Graph, x: NodeId) -> NodeId {
    let xv = g.value(x);
    let n = xv.len() as f64;
    let m = xv.sum() / n;
    let shape = xv.raw_dim();
    let v = ArrayD::from_elem(ndarray::IxDyn(&[]), m);
    g.push_op(
        v,
        vec![x],
        Box::new(move |go, _, _| {
            let gs = go.iter().next().copied().unwrap_or(0.0);
            vec![Some(ArrayD::from_elem(shape.clone(), gs / n))]
        }),
    )
}

/// Multiply a feature map by a per-(batch, channel) scalar field `[B, C]`.
pub fn mul_chan(g: &mut Graph, x: NodeId, s: NodeId) -> NodeId {
    let xv = as4(g.value(x));
    let sv = as2(g.value(s));
    let (b, c, h, w) = xv.dim();
    assert_eq!(sv.dim(), (b, c), "mul_chan scale shape");
    let mut y = xv.to_owned();
    for bi in 0..b {
        for ci in 0..c {
            let f = sv[[bi, ci]];
            y.slice_mut(ndarray::s![bi, ci, .., ..]).mapv_inplace(|v| v * f);
        }
    }
    g.push_op(
        y.into_dyn(),
        vec![x, s],
        Box::new(move |go, ins, rg| {
            let gv = as4(go);
            let xv = as4(ins[0]);
            let sv = as2(ins[1]);
            let dx = rg[0].then(|| {
                let mut dx = gv.to_owned();
                for bi in 0..b {
                    for ci in 0..c {
                        let f = sv[[bi, ci]];
                        dx.slice_mut(ndarray::s![bi, ci, .., ..]).mapv_inplace(|v| v * f);
                    }
                }
                dx.into_dyn()
            });
            let ds = rg[1].then(|| {
                let mut ds = Array2::<f64>::zeros((b, c));
                for bi in 0..b {
                    for ci in 0..c {
                        let gp = gv.slice(ndarray::s![bi, ci, .., ..]);
                        let xp = xv.slice(ndarray::s![bi, ci, .., ..]);
                        ds[[bi, ci]] =
                            gp.iter().zip(xp.iter()).map(|(&a, &b)| a * b).sum();
                    }
                }
                ds.into_dyn()
            });
            let _ = (h, w);
            vec![dx, ds]
        }),
    )
}

/// Add a per-(batch, channel) scalar field `[B, C]` to a feature map.
pub fn add_chan(g: &mut Graph, x: NodeId, s: NodeId) -> NodeId {
    let xv = as4(g.value(x));
    let sv = as2(g.value(s));
    let (b, c, _, _) = xv.dim();
    assert_eq!(sv.dim(), (b, c), "add_chan shift shape");
    let mut y = xv.to_owned();
    for bi in 0..b {
        for ci in 0..c {
            let f = sv[[bi, ci]];
            y.slice_mut(ndarray::s![bi, ci, .., ..]).mapv_inplace(|v| v + f);
        }
    }
    g.push_op(
        y.into_dyn(),
        vec![x, s],
        Box::new(move |go, _, rg| {
            let gv = as4(go);
            let dx = rg[0].then(|| gv.to_owned().into_dyn());
            let ds = rg[1].then(|| {
                let mut ds = Array2::<f64>::zeros((b, c));
                for bi in 0..b {
                    for ci in 0..c {
                        ds[[bi, ci]] = gv.slice(ndarray::s![bi, ci, .., ..]).sum();
                    }
                }
                ds.into_dyn()
            });
            vec![dx, ds]
        }),
    )
}

/// Multiply `[B, C, H, W]` by a single-channel map `[B, 1, H, W]`.
pub fn mul_mask(g: &mut Graph, x: NodeId, m: NodeId) -> NodeId {
    let xv = as4(g.value(x));
    let mv = as4(g.value(m));
    let (b, c, h, w) = xv.dim();
    assert_eq!(mv.dim(), (b, 1, h, w), "mul_mask mask shape");
    let mut y = xv.to_owned();
    for bi in 0..b {
        for ci in 0..c {
            let mut plane = y.slice_mut(ndarray::s![bi, ci, .., ..]);
            plane.zip_mut_with(&mv.slice(ndarray::s![bi, 0, .., ..]), |p, &m| *p *= m);
        }
    }
    g.push_op(
        y.into_dyn(),
        vec![x, m],
        Box::new(move |go, ins, rg| {
            let gv = as4(go);
            let xv = as4(ins[0]);
            let mv = as4(ins[1]);
            let dx = rg[0].then(|| {
                let mut dx = gv.to_owned();
                for bi in 0..b {
                    for ci in 0..c {
                        let mut plane = dx.slice_mut(ndarray::s![bi, ci, .., ..]);
                        plane.zip_mut_with(&mv.slice(ndarray::s![bi, 0, .., ..]), |p, &m| {
                            *p *= m
                        });
                    }
                }
                dx.into_dyn()
            });
            let dm = rg[1].then(|| {
                let mut dm = Array4::<f64>::zeros((b, 1, h, w));
                for bi in 0..b {
                    for ci in 0..c {
                        let gp = gv.slice(ndarray::s![bi, ci, .., ..]);
                        let xp = xv.slice(ndarray::s![bi, ci, .., ..]);
                        let mut acc = dm.slice_mut(ndarray::s![bi, 0, .., ..]);
                        for ((a, &gi), &xi) in acc.iter_mut().zip(gp.iter()).zip(xp.iter()) {
                            *a += gi * xi;
                        }
                    }
                }
                dm.into_dyn()
            });
            vec![dx, dm]
        }),
    )
}

/// Multiply a feature map by a per-channel vector `[C]` (shared over batch).
pub fn mul_cvec(g: &mut Graph, x: NodeId, s: NodeId) -> NodeId {
    let xv = as4(g.value(x));
    let sv = as1(g.value(s));
    let (b, c, _, _) = xv.dim();
    assert_eq!(sv.len(), c, "mul_cvec channel count");
    let mut y = xv.to_owned();
    for bi in 0..b {
        for ci in 0..c {
            let f = sv[ci];
            y.slice_mut(ndarray::s![bi, ci, .., ..]).mapv_inplace(|v| v * f);
        }
    }
    g.push_op(
        y.into_dyn(),
        vec![x, s],
        Box::new(move |go, ins, rg| {
            let gv = as4(go);
            let xv = as4(ins[0]);
            let sv = as1(ins[1]);
            let dx = rg[0].then(|| {
                let mut dx = gv.to_owned();
                for bi in 0..b {
                    for ci in 0..c {
                        let f = sv[ci];
                        dx.slice_mut(ndarray::s![bi, ci, .., ..]).mapv_inplace(|v| v * f);
                    }
                }
                dx.into_dyn()
            });
            let ds = rg[1].then(|| {
                let mut ds = Array1::<f64>::zeros(c);
                for bi in 0..b {
                    for ci in 0..c {
                        let gp = gv.slice(ndarray::s![bi, ci, .., ..]);
                        let xp = xv.slice(ndarray::s![bi, ci, .., ..]);
                        ds[ci] += gp.iter().zip(xp.iter()).map(|(&a, &b)| a * b).sum::<f64>();
                    }
                }
                ds.into_dyn()
            });
            vec![dx, ds]
        }),
    )
}

/// Add a per-channel vector `[C]` to a feature map (shared over batch).
pub fn add_cvec(g: &mut Graph, x: NodeId, s: NodeId) -> NodeId {
    let xv = as4(g.value(x));
    let sv = as1(g.value(s));
    let (b, c, _, _) = xv.dim();
    assert_eq!(sv.len(), c, "add_cvec channel count");
    let mut y = xv.to_owned();
    for bi in 0..b {
        for ci in 0..c {
            let f = sv[ci];
            y.slice_mut(ndarray::s![bi, ci, .., ..]).mapv_inplace(|v| v + f);
        }
    }
    g.push_op(
        y.into_dyn(),
        vec![x, s],
        Box::new(move |go, _, rg| {
            let gv = as4(go);
            let dx = rg[0].then(|| gv.to_owned().into_dyn());
            let ds = rg[1].then(|| {
                let mut ds = Array1::<f64>::zeros(c);
                for bi in 0..b {
                    for ci in 0..c {
                        ds[ci] += gv.slice(ndarray::s![bi, ci, .., ..]).sum();
                    }
                }
                ds.into_dyn()
            });
            vec![dx, ds]
        }),
    )
}

const NORM_FLOOR: f64 = 1e-12;

/// Row-wise L2 normalization of `[B, D]`.
pub fn l2_normalize_rows(g: &mut Graph, x: NodeId) -> NodeId {
    let xv = as2(g.value(x));
    let (b, d) = xv.dim();
    let mut y = Array2::<f64>::zeros((b, d));
    let mut norms = Array1::<f64>::zeros(b);
    for bi in 0..b {
        let row = xv.row(bi);
        let n = row.dot(&row).sqrt().max(NORM_FLOOR);
        norms[bi] = n;
        y.row_mut(bi).assign(&row.mapv(|v| v / n));
    }
    let saved_y = y.clone();
    g.push_op(
        y.into_dyn(),
        vec![x],
        Box::new(move |go, _, _| {
            let gv = as2(go);
            let mut dx = Array2::<f64>::zeros((b, d));
            for bi in 0..b {
                let grow = gv.row(bi);
                let yrow = saved_y.row(bi);
                let dot = grow.dot(&yrow);
                let n = norms[bi];
                let mut drow = dx.row_mut(bi);
                for ((o, &gi), &yi) in drow.iter_mut().zip(grow.iter()).zip(yrow.iter()) {
                    *o = (gi - yi * dot) / n;
                }
            }
            vec![Some(dx.into_dyn())]
        }),
    )
}

/// Row-wise cosine similarity of two `[B, D]` batches -> `[B]`.
pub fn rowwise_cosine(g: &mut Graph, a: NodeId, b: NodeId) -> NodeId {
    let av = as2(g.value(a));
    let bv = as2(g.value(b));
    assert_eq!(av.dim(), bv.dim(), "rowwise_cosine shape mismatch");
    let (n, _) = av.dim();
    let mut out = Array1::<f64>::zeros(n);
    for i in 0..n {
        let (ar, br) = (av.row(i), bv.row(i));
        let na = ar.dot(&ar).sqrt().max(NORM_FLOOR);
        let nb = br.dot(&br).sqrt().max(NORM_FLOOR);
        out[i] = ar.dot(&br) / (na * nb);
    }
    g.push_op(
        out.into_dyn(),
        vec![a, b],
        Box::new(move |go, ins, rg| {
            let gv = as1(go);
            let av = as2(ins[0]);
            let bv = as2(ins[1]);
            let mut da = rg[0].then(|| Array2::<f64>::zeros(av.dim()));
            let mut db = rg[1].then(|| Array2::<f64>::zeros(bv.dim()));
            for i in 0..n {
                let (ar, br) = (av.row(i), bv.row(i));
                let na = ar.dot(&ar).sqrt().max(NORM_FLOOR);
                let nb = br.dot(&br).sqrt().max(NORM_FLOOR);
                let dot = ar.dot(&br);
                let c = dot / (na * nb);
                let gi = gv[i];
                if let Some(da) = da.as_mut() {
                    let mut row = da.row_mut(i);
                    for ((o, &bj), &aj) in row.iter_mut().zip(br.iter()).zip(ar.iter()) {
                        *o = gi * (bj / (na * nb) - c * aj / (na * na));
                    }
                }
                if let Some(db) = db.as_mut() {
                    let mut row = db.row_mut(i);
                    for ((o, &aj), &bj) in row.iter_mut().zip(ar.iter()).zip(br.iter()) {
                        *o = gi * (aj / (na * nb) - c * bj / (nb * nb));
                    }
                }
            }
            vec![da.map(|m| m.into_dyn()), db.map(|m| m.into_dyn())]
        }),
    )
}

/// Mean cross-entropy of `[B, K]` logits against integer class labels.
pub fn softmax_cross_entropy(g: &mut Graph, logits: NodeId, labels: &[usize]) -> NodeId {
    let lv = as2(g.value(logits));
    let (b, k) = lv.dim();
    assert_eq!(labels.len(), b);
    let mut probs = Array2::<f64>::zeros((b, k));
    let mut loss = 0.0;
    for bi in 0..b {
        let row = lv.row(bi);
        let maxv = row.fold(f64::NEG_INFINITY, |a, &v| a.max(v));
        let mut denom = 0.0;
        for &v in row.iter() {
            denom += (v - maxv).exp();
        }
        let lse = maxv + denom.ln();
        loss += lse - row[labels[bi]];
        for ki in 0..k {
            probs[[bi, ki]] = (row[ki] - maxv).exp() / denom;
        }
    }
    loss /= b as f64;
    let labels = labels.to_vec();
    let v = ArrayD::from_elem(ndarray::IxDyn(&[]), loss);
    g.push_op(
        v,
        vec![logits],
        Box::new(move |go, _, _| {
            let gs = go.iter().next().copied().unwrap_or(0.0);
            let mut dl = probs.clone();
            for (bi, &lab) in labels.iter().enumerate() {
                dl[[bi, lab]] -= 1.0;
            }
            dl.mapv_inplace(|v| v * gs / b as f64);
            vec![Some(dl.into_dyn())]
        }),
    )
}

/// Separable Gaussian window readout: contracts `[B, C, H, W]` against row
/// profiles `gy [G, H]` and column profiles `gx [G, W]`, then scales each of
/// the G*G windows by a fixed weight. Output `[B, C*G*G]`.
pub fn gaussian_grid_readout(
    g: &mut Graph,
    x: NodeId,
    gy: Array2<f64>,
    gx: Array2<f64>,
    window_weights: Array1<f64>,
) -> NodeId {
    let xv = as4(g.value(x));
    let (b, c, h, w) = xv.dim();
    let gn = gy.dim().0;
    assert_eq!(gy.dim().1, h);
    assert_eq!(gx.dim(), (gn, w));
    assert_eq!(window_weights.len(), gn * gn);
    let mut out = Array2::<f64>::zeros((b, c * gn * gn));
    for bi in 0..b {
        for ci in 0..c {
            let plane = xv.slice(ndarray::s![bi, ci, .., ..]);
            let t1 = gy.dot(&plane); // [G, W]
            let t2 = t1.dot(&gx.t()); // [G, G]
            for i in 0..gn {
                for j in 0..gn {
                    out[[bi, (ci * gn + i) * gn + j]] =
                        t2[[i, j]] * window_weights[i * gn + j];
                }
            }
        }
    }
    let (gy_b, gx_b, ww_b) = (gy, gx, window_weights);
    g.push_op(
        out.into_dyn(),
        vec![x],
        Box::new(move |go, _, _| {
            let gv = as2(go);
            let mut dx = Array4::<f64>::zeros((b, c, h, w));
            for bi in 0..b {
                for ci in 0..c {
                    let mut gmat = Array2::<f64>::zeros((gn, gn));
                    for i in 0..gn {
                        for j in 0..gn {
                            gmat[[i, j]] =
                                gv[[bi, (ci * gn + i) * gn + j]] * ww_b[i * gn + j];
                        }
                    }
                    // dX = gy^T . gmat . gx
                    let t = gy_b.t().dot(&gmat); // [H, G]
                    let dplane = t.dot(&gx_b); // [H, W]
                    dx.slice_mut(ndarray::s![bi, ci, .., ..]).assign(&dplane);
                }
            }
            vec![Some(dx.into_dyn())]
        }),
    )
}
