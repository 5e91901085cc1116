//! Forward ops and their backward closures.
//!
//! Broadcasting is deliberately restricted to the two mask shapes the fusion
//! modules need: a [B,C,1,1] channel mask or a [B,1,H,W] spatial mask over a
//! [B,C,H,W] map. Everything else must match exactly.

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolKind {
    Avg,
    Max,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChannelPoolKind {
    Mean,
    Max,
}

/// 2-D cross-correlation, NCHW input, [Cout,Cin,k,k] weight, square odd kernel.
pub fn conv2d(
    input: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    let (b, cin, h, w) = input.dims4("conv2d")?;
    let ws = weight.shape();
    if ws.len() != 4 {
        return Err(Error::shape("conv2d", format!("weight must be rank 4, got {ws:?}")));
    }
    let (cout, wcin, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
    if kh != kw || kh % 2 == 0 {
        return Err(Error::invalid("conv2d", format!("kernel must be square and odd, got {kh}x{kw}")));
    }
    if wcin != cin {
        return Err(Error::shape(
            "conv2d",
            format!("input has {cin} channels but weight expects {wcin}"),
        ));
    }
    if stride == 0 {
        return Err(Error::invalid("conv2d", "stride must be >= 1"));
    }
    if let Some(bt) = bias {
        if bt.shape() != vec![cout] {
            return Err(Error::shape(
                "conv2d",
                format!("bias shape {:?} does not match {cout} output channels", bt.shape()),
            ));
        }
    }
    let k = kh;
    if h + 2 * padding < k || w + 2 * padding < k {
        return Err(Error::shape(
            "conv2d",
            format!("kernel {k} larger than padded input {h}x{w} (pad {padding})"),
        ));
    }
    let oh = (h + 2 * padding - k) / stride + 1;
    let ow = (w + 2 * padding - k) / stride + 1;

    let mut out = vec![0.0; b * cout * oh * ow];
    input.with_data(|xv| {
        weight.with_data(|wv| {
            conv2d_forward_into(
                xv, wv, &mut out, b, cin, h, w, cout, k, stride, padding, oh, ow,
            );
        })
    });
    if let Some(bt) = bias {
        bt.with_data(|bv| {
            for bi in 0..b {
                for co in 0..cout {
                    let base = (bi * cout + co) * oh * ow;
                    let bval = bv[co];
                    for v in &mut out[base..base + oh * ow] {
                        *v += bval;
                    }
                }
            }
        });
    }

    let mut parents = vec![input.clone(), weight.clone()];
    let has_bias = bias.is_some();
    if let Some(bt) = bias {
        parents.push(bt.clone());
    }
    Ok(Tensor::from_op(
        vec![b, cout, oh, ow],
        out,
        parents,
        Box::new(move |g, _out, parents| {
            let (input, weight) = (&parents[0], &parents[1]);
            if input.needs_grad() {
                let mut gin = vec![0.0; b * cin * h * w];
                weight.with_data(|wv| {
                    conv2d_backward_input(
                        g, wv, &mut gin, b, cin, h, w, cout, k, stride, padding, oh, ow,
                    );
                });
                input.accum_grad_owned(gin);
            }
            if weight.needs_grad() {
                let mut gw = vec![0.0; cout * cin * k * k];
                input.with_data(|xv| {
                    conv2d_backward_weight(
                        g, xv, &mut gw, b, cin, h, w, cout, k, stride, padding, oh, ow,
                    );
                });
                weight.accum_grad_owned(gw);
            }
            if has_bias && parents[2].needs_grad() {
                let mut gb = vec![0.0; cout];
                for bi in 0..b {
                    for co in 0..cout {
                        let base = (bi * cout + co) * oh * ow;
                        gb[co] += g[base..base + oh * ow].iter().sum::<f64>();
                    }
                }
                parents[2].accum_grad_owned(gb);
            }
        }),
    ))
}

#[allow(clippy::too_many_arguments)]
fn conv2d_forward_into(
    x: &[f64],
    w: &[f64],
    out: &mut [f64],
    b: usize,
    cin: usize,
    h: usize,
    wd: usize,
    cout: usize,
    k: usize,
    stride: usize,
    padding: usize,
    oh: usize,
    ow: usize,
) {
    let pad = padding as isize;
    for bi in 0..b {
        for co in 0..cout {
            let out_base = (bi * cout + co) * oh * ow;
            for ci in 0..cin {
                let in_base = (bi * cin + ci) * h * wd;
                let w_base = (co * cin + ci) * k * k;
                for khi in 0..k {
                    for kwi in 0..k {
                        let wv = w[w_base + khi * k + kwi];
                        if wv == 0.0 {
                            continue;
                        }
                        for ohi in 0..oh {
                            let ih = (ohi * stride + khi) as isize - pad;
                            if ih < 0 || ih >= h as isize {
                                continue;
                            }
                            let in_row = in_base + ih as usize * wd;
                            let out_row = out_base + ohi * ow;
                            if stride == 1 {
                                let shift = kwi as isize - pad;
                                let lo = (-shift).max(0) as usize;
                                let hi = ow.min((wd as isize - shift).max(0) as usize);
                                if lo >= hi {
                                    continue;
                                }
                                let start = (in_row as isize + shift + lo as isize) as usize;
                                for (j, owi) in (lo..hi).enumerate() {
                                    out[out_row + owi] += wv * x[start + j];
                                }
                            } else {
                                for owi in 0..ow {
                                    let iw = (owi * stride + kwi) as isize - pad;
                                    if iw >= 0 && iw < wd as isize {
                                        out[out_row + owi] += wv * x[in_row + iw as usize];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv2d_backward_input(
    g: &[f64],
    w: &[f64],
    gin: &mut [f64],
    b: usize,
    cin: usize,
    h: usize,
    wd: usize,
    cout: usize,
    k: usize,
    stride: usize,
    padding: usize,
    oh: usize,
    ow: usize,
) {
    let pad = padding as isize;
    for bi in 0..b {
        for co in 0..cout {
            let out_base = (bi * cout + co) * oh * ow;
            for ci in 0..cin {
                let in_base = (bi * cin + ci) * h * wd;
                let w_base = (co * cin + ci) * k * k;
                for khi in 0..k {
                    for kwi in 0..k {
                        let wv = w[w_base + khi * k + kwi];
                        if wv == 0.0 {
                            continue;
                        }
                        for ohi in 0..oh {
                            let ih = (ohi * stride + khi) as isize - pad;
                            if ih < 0 || ih >= h as isize {
                                continue;
                            }
                            let in_row = in_base + ih as usize * wd;
                            let out_row = out_base + ohi * ow;
                            for owi in 0..ow {
                                let iw = (owi * stride + kwi) as isize - pad;
                                if iw >= 0 && iw < wd as isize {
                                    gin[in_row + iw as usize] += wv * g[out_row + owi];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv2d_backward_weight(
    g: &[f64],
    x: &[f64],
    gw: &mut [f64],
    b: usize,
    cin: usize,
    h: usize,
    wd: usize,
    cout: usize,
    k: usize,
    stride: usize,
    padding: usize,
    oh: usize,
    ow: usize,
) {
    let pad = padding as isize;
    for bi in 0..b {
        for co in 0..cout {
            let out_base = (bi * cout + co) * oh * ow;
            for ci in 0..cin {
                let in_base = (bi * cin + ci) * h * wd;
                let w_base = (co * cin + ci) * k * k;
                for khi in 0..k {
                    for kwi in 0..k {
                        let mut acc = 0.0;
                        for ohi in 0..oh {
                            let ih = (ohi * stride + khi) as isize - pad;
                            if ih < 0 || ih >= h as isize {
                                continue;
                            }
                            let in_row = in_base + ih as usize * wd;
                            let out_row = out_base + ohi * ow;
                            for owi in 0..ow {
                                let iw = (owi * stride + kwi) as isize - pad;
                                if iw >= 0 && iw < wd as isize {
                                    acc += x[in_row + iw as usize] * g[out_row + owi];
                                }
                            }
                        }
                        gw[w_base + khi * k + kwi] += acc;
                    }
                }
            }
        }
    }
}

/// Affine map: [B,Din] x [Dout,Din] (+ [Dout]) -> [B,Dout].
pub fn linear(input: &Tensor, weight: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let is = input.shape();
    let ws = weight.shape();
    if is.len() != 2 || ws.len() != 2 {
        return Err(Error::shape(
            "linear",
            format!("expected rank-2 input and weight, got {is:?} and {ws:?}"),
        ));
    }
    let (b, din) = (is[0], is[1]);
    let (dout, wdin) = (ws[0], ws[1]);
    if din != wdin {
        return Err(Error::shape(
            "linear",
            format!("input feature dim {din} does not match weight's {wdin}"),
        ));
    }
    if let Some(bt) = bias {
        if bt.shape() != vec![dout] {
            return Err(Error::shape(
                "linear",
                format!("bias shape {:?} does not match {dout} outputs", bt.shape()),
            ));
        }
    }
    let mut out = vec![0.0; b * dout];
    input.with_data(|xv| {
        weight.with_data(|wv| {
            for bi in 0..b {
                let xrow = &xv[bi * din..(bi + 1) * din];
                for o in 0..dout {
                    let wrow = &wv[o * din..(o + 1) * din];
                    let mut acc = 0.0;
                    for i in 0..din {
                        acc += xrow[i] * wrow[i];
                    }
                    out[bi * dout + o] = acc;
                }
            }
        })
    });
    if let Some(bt) = bias {
        bt.with_data(|bv| {
            for bi in 0..b {
                for o in 0..dout {
                    out[bi * dout + o] += bv[o];
                }
            }
        });
    }
    let mut parents = vec![input.clone(), weight.clone()];
    let has_bias = bias.is_some();
    if let Some(bt) = bias {
        parents.push(bt.clone());
    }
    Ok(Tensor::from_op(
        vec![b, dout],
        out,
        parents,
        Box::new(move |g, _out, parents| {
            let (input, weight) = (&parents[0], &parents[1]);
            if input.needs_grad() {
                let mut gin = vec![0.0; b * din];
                weight.with_data(|wv| {
                    for bi in 0..b {
                        for o in 0..dout {
                            let gv = g[bi * dout + o];
                            if gv == 0.0 {
                                continue;
                            }
                            let wrow = &wv[o * din..(o + 1) * din];
                            let grow = &mut gin[bi * din..(bi + 1) * din];
                            for i in 0..din {
                                grow[i] += gv * wrow[i];
                            }
                        }
                    }
                });
                input.accum_grad_owned(gin);
            }
            if weight.needs_grad() {
                let mut gw = vec![0.0; dout * din];
                input.with_data(|xv| {
                    for bi in 0..b {
                        let xrow = &xv[bi * din..(bi + 1) * din];
                        for o in 0..dout {
                            let gv = g[bi * dout + o];
                            if gv == 0.0 {
                                continue;
                            }
                            let grow = &mut gw[o * din..(o + 1) * din];
                            for i in 0..din {
                                grow[i] += gv * xrow[i];
                            }
                        }
                    }
                });
                weight.accum_grad_owned(gw);
            }
            if has_bias && parents[2].needs_grad() {
                let mut gb = vec![0.0; dout];
                for bi in 0..b {
                    for o in 0..dout {
                        gb[o] += g[bi * dout + o];
                    }
                }
                parents[2].accum_grad_owned(gb);
            }
        }),
    ))
}

/// Per-channel reduction over all spatial positions: [B,C,H,W] -> [B,C].
/// Max pooling routes its gradient to the first maximal element row-major.
pub fn global_pool(input: &Tensor, kind: PoolKind) -> Result<Tensor> {
    let (b, c, h, w) = input.dims4("global_pool")?;
    let hw = h * w;
    let mut out = vec![0.0; b * c];
    let mut argmax = vec![0usize; if kind == PoolKind::Max { b * c } else { 0 }];
    input.with_data(|xv| {
        for bc in 0..b * c {
            let plane = &xv[bc * hw..(bc + 1) * hw];
            match kind {
                PoolKind::Avg => out[bc] = plane.iter().sum::<f64>() / hw as f64,
                PoolKind::Max => {
                    let mut best = plane[0];
                    let mut idx = 0;
                    for (i, &v) in plane.iter().enumerate().skip(1) {
                        if v > best {
                            best = v;
                            idx = i;
                        }
                    }
                    out[bc] = best;
                    argmax[bc] = idx;
                }
            }
        }
    });
    Ok(Tensor::from_op(
        vec![b, c],
        out,
        vec![input.clone()],
        Box::new(move |g, _out, parents| {
            let input = &parents[0];
            if !input.needs_grad() {
                return;
            }
            let mut gin = vec![0.0; b * c * hw];
            match kind {
                PoolKind::Avg => {
                    let inv = 1.0 / hw as f64;
                    for bc in 0..b * c {
                        let gv = g[bc] * inv;
                        for v in &mut gin[bc * hw..(bc + 1) * hw] {
                            *v += gv;
                        }
                    }
                }
                PoolKind::Max => {
                    for bc in 0..b * c {
                        gin[bc * hw + argmax[bc]] += g[bc];
                    }
                }
            }
            input.accum_grad_owned(gin);
        }),
    ))
}

/// Reduction over channels: [B,C,H,W] -> [B,1,H,W].
pub fn channel_pool(input: &Tensor, kind: ChannelPoolKind) -> Result<Tensor> {
    let (b, c, h, w) = input.dims4("channel_pool")?;
    let hw = h * w;
    let mut out = vec![0.0; b * hw];
    let mut argmax = vec![0usize; if kind == ChannelPoolKind::Max { b * hw } else { 0 }];
    input.with_data(|xv| {
        for bi in 0..b {
            let base = bi * c * hw;
            for p in 0..hw {
                match kind {
                    ChannelPoolKind::Mean => {
                        let mut acc = 0.0;
                        for ci in 0..c {
                            acc += xv[base + ci * hw + p];
                        }
                        out[bi * hw + p] = acc / c as f64;
                    }
                    ChannelPoolKind::Max => {
                        let mut best = xv[base + p];
                        let mut idx = 0;
                        for ci in 1..c {
                            let v = xv[base + ci * hw + p];
                            if v > best {
                                best = v;
                                idx = ci;
                            }
                        }
                        out[bi * hw + p] = best;
                        argmax[bi * hw + p] = idx;
                    }
                }
            }
        }
    });
    Ok(Tensor::from_op(
        vec![b, 1, h, w],
        out,
        vec![input.clone()],
        Box::new(move |g, _out, parents| {
            let input = &parents[0];
            if !input.needs_grad() {
                return;
            }
            let mut gin = vec![0.0; b * c * hw];
            for bi in 0..b {
                let base = bi * c * hw;
                for p in 0..hw {
                    let gv = g[bi * hw + p];
                    match kind {
                        ChannelPoolKind::Mean => {
                            let share = gv / c as f64;
                            for ci in 0..c {
                                gin[base + ci * hw + p] += share;
                            }
                        }
                        ChannelPoolKind::Max => {
                            gin[base + argmax[bi * hw + p] * hw + p] += gv;
                        }
                    }
                }
            }
            input.accum_grad_owned(gin);
        }),
    ))
}

pub fn stable_sigmoid(x: f64) -> f64 {
    let y = if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    };
    // keep the output strictly inside (0,1) even where f64 saturates
    y.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0)
}

pub fn sigmoid(input: &Tensor) -> Tensor {
    let shape = input.shape();
    let out: Vec<f64> = input.with_data(|xv| xv.iter().map(|&x| stable_sigmoid(x)).collect());
    Tensor::from_op(
        shape,
        out,
        vec![input.clone()],
        Box::new(|g, out, parents| {
            let input = &parents[0];
            if !input.needs_grad() {
                return;
            }
            let gin: Vec<f64> = g
                .iter()
                .zip(out)
                .map(|(&gv, &y)| gv * y * (1.0 - y))
                .collect();
            input.accum_grad_owned(gin);
        }),
    )
}

pub fn relu(input: &Tensor) -> Tensor {
    let shape = input.shape();
    let out: Vec<f64> = input.with_data(|xv| xv.iter().map(|&x| x.max(0.0)).collect());
    Tensor::from_op(
        shape,
        out,
        vec![input.clone()],
        Box::new(|g, out, parents| {
            let input = &parents[0];
            if !input.needs_grad() {
                return;
            }
            let gin: Vec<f64> = g
                .iter()
                .zip(out)
                .map(|(&gv, &y)| if y > 0.0 { gv } else { 0.0 })
                .collect();
            input.accum_grad_owned(gin);
        }),
    )
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Broadcast {
    None,
    ChannelMask, // b is [B,C,1,1]
    SpatialMask, // b is [B,1,H,W]
}

fn broadcast_mode(a: &[usize], b: &[usize]) -> Result<Broadcast> {
    if a == b {
        return Ok(Broadcast::None);
    }
    if a.len() == 4 && b.len() == 4 && a[0] == b[0] {
        if b[1] == a[1] && b[2] == 1 && b[3] == 1 {
            return Ok(Broadcast::ChannelMask);
        }
        if b[1] == 1 && b[2] == a[2] && b[3] == a[3] {
            return Ok(Broadcast::SpatialMask);
        }
    }
    Err(Error::shape(
        "elementwise",
        format!("shapes {a:?} and {b:?} are neither equal nor mask-broadcastable"),
    ))
}

/// Iterates output flat index -> (a index, b index) under the mask broadcast.
fn for_each_pair(shape: &[usize], mode: Broadcast, mut f: impl FnMut(usize, usize)) {
    match mode {
        Broadcast::None => {
            let n: usize = shape.iter().product();
            for i in 0..n {
                f(i, i);
            }
        }
        Broadcast::ChannelMask => {
            let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
            let hw = h * w;
            for bc in 0..b * c {
                for p in 0..hw {
                    f(bc * hw + p, bc);
                }
            }
        }
        Broadcast::SpatialMask => {
            let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
            let hw = h * w;
            for bi in 0..b {
                for ci in 0..c {
                    let base = (bi * c + ci) * hw;
                    for p in 0..hw {
                        f(base + p, bi * hw + p);
                    }
                }
            }
        }
    }
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (sa, sb) = (a.shape(), b.shape());
    let mode = broadcast_mode(&sa, &sb)?;
    let n: usize = sa.iter().product();
    let mut out = vec![0.0; n];
    a.with_data(|av| {
        b.with_data(|bv| {
            for_each_pair(&sa, mode, |ia, ib| out[ia] = av[ia] + bv[ib]);
        })
    });
    let shape = sa.clone();
    let blen: usize = sb.iter().product();
    Ok(Tensor::from_op(
        sa.clone(),
        out,
        vec![a.clone(), b.clone()],
        Box::new(move |g, _out, parents| {
            if parents[0].needs_grad() {
                parents[0].accum_grad(g);
            }
            if parents[1].needs_grad() {
                let mut gb = vec![0.0; blen];
                for_each_pair(&shape, mode, |ia, ib| gb[ib] += g[ia]);
                parents[1].accum_grad_owned(gb);
            }
        }),
    ))
}

pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (sa, sb) = (a.shape(), b.shape());
    let mode = broadcast_mode(&sa, &sb)?;
    let n: usize = sa.iter().product();
    let mut out = vec![0.0; n];
    a.with_data(|av| {
        b.with_data(|bv| {
            for_each_pair(&sa, mode, |ia, ib| out[ia] = av[ia] * bv[ib]);
        })
    });
    let shape = sa.clone();
    let blen: usize = sb.iter().product();
    Ok(Tensor::from_op(
        sa.clone(),
        out,
        vec![a.clone(), b.clone()],
        Box::new(move |g, _out, parents| {
            let (a, b) = (&parents[0], &parents[1]);
            if a.needs_grad() {
                let mut ga = vec![0.0; g.len()];
                b.with_data(|bv| {
                    for_each_pair(&shape, mode, |ia, ib| ga[ia] = g[ia] * bv[ib]);
                });
                a.accum_grad_owned(ga);
            }
            if b.needs_grad() {
                let mut gb = vec![0.0; blen];
                a.with_data(|av| {
                    for_each_pair(&shape, mode, |ia, ib| gb[ib] += g[ia] * av[ia]);
                });
                b.accum_grad_owned(gb);
            }
        }),
    ))
}

/// [B,Ca,H,W] ++ [B,Cb,H,W] -> [B,Ca+Cb,H,W]; a's channels come first.
pub fn concat_channels(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (ba, ca, ha, wa) = a.dims4("concat_channels")?;
    let (bb, cb, hb, wb) = b.dims4("concat_channels")?;
    if ba != bb || ha != hb || wa != wb {
        return Err(Error::shape(
            "concat_channels",
            format!(
                "batch/spatial dims differ: [{ba},{ca},{ha},{wa}] vs [{bb},{cb},{hb},{wb}]"
            ),
        ));
    }
    let hw = ha * wa;
    let cc = ca + cb;
    let mut out = vec![0.0; ba * cc * hw];
    a.with_data(|av| {
        b.with_data(|bv| {
            for bi in 0..ba {
                let oa = bi * cc * hw;
                out[oa..oa + ca * hw].copy_from_slice(&av[bi * ca * hw..(bi + 1) * ca * hw]);
                out[oa + ca * hw..oa + cc * hw]
                    .copy_from_slice(&bv[bi * cb * hw..(bi + 1) * cb * hw]);
            }
        })
    });
    Ok(Tensor::from_op(
        vec![ba, cc, ha, wa],
        out,
        vec![a.clone(), b.clone()],
        Box::new(move |g, _out, parents| {
            if parents[0].needs_grad() {
                let mut ga = vec![0.0; ba * ca * hw];
                for bi in 0..ba {
                    let oa = bi * cc * hw;
                    ga[bi * ca * hw..(bi + 1) * ca * hw].copy_from_slice(&g[oa..oa + ca * hw]);
                }
                parents[0].accum_grad_owned(ga);
            }
            if parents[1].needs_grad() {
                let mut gb = vec![0.0; ba * cb * hw];
                for bi in 0..ba {
                    let oa = bi * cc * hw;
                    gb[bi * cb * hw..(bi + 1) * cb * hw]
                        .copy_from_slice(&g[oa + ca * hw..oa + cc * hw]);
                }
                parents[1].accum_grad_owned(gb);
            }
        }),
    ))
}

/// Channel slice [start, start+count) of a [B,C,H,W] tensor.
pub fn slice_channels(input: &Tensor, start: usize, count: usize) -> Result<Tensor> {
    let (b, c, h, w) = input.dims4("slice_channels")?;
    if start + count > c {
        return Err(Error::shape(
            "slice_channels",
            format!("range {start}..{} out of {c} channels", start + count),
        ));
    }
    let hw = h * w;
    let mut out = vec![0.0; b * count * hw];
    input.with_data(|xv| {
        for bi in 0..b {
            let src = (bi * c + start) * hw;
            out[bi * count * hw..(bi + 1) * count * hw]
                .copy_from_slice(&xv[src..src + count * hw]);
        }
    });
    Ok(Tensor::from_op(
        vec![b, count, h, w],
        out,
        vec![input.clone()],
        Box::new(move |g, _out, parents| {
            let input = &parents[0];
            if !input.needs_grad() {
                return;
            }
            let mut gin = vec![0.0; b * c * hw];
            for bi in 0..b {
                let dst = (bi * c + start) * hw;
                gin[dst..dst + count * hw]
                    .copy_from_slice(&g[bi * count * hw..(bi + 1) * count * hw]);
            }
            input.accum_grad_owned(gin);
        }),
    ))
}

/// 2x2 stride-2 max pooling; requires even spatial dims. Ties route the
/// gradient to the first maximal element in row-major window order.
pub fn maxpool2(input: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = input.dims4("maxpool2")?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::invalid(
            "maxpool2",
            format!("spatial dims must be even, got {h}x{w}"),
        ));
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0; b * c * oh * ow];
    let mut argmax = vec![0usize; b * c * oh * ow];
    input.with_data(|xv| {
        for bc in 0..b * c {
            let in_base = bc * h * w;
            let out_base = bc * oh * ow;
            for ohi in 0..oh {
                for owi in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_idx = 0;
                    for dh in 0..2 {
                        for dw in 0..2 {
                            let idx = in_base + (2 * ohi + dh) * w + 2 * owi + dw;
                            if xv[idx] > best {
                                best = xv[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    out[out_base + ohi * ow + owi] = best;
                    argmax[out_base + ohi * ow + owi] = best_idx;
                }
            }
        }
    });
    Ok(Tensor::from_op(
        vec![b, c, oh, ow],
        out,
        vec![input.clone()],
        Box::new(move |g, _out, parents| {
            let input = &parents[0];
            if !input.needs_grad() {
                return;
            }
            let mut gin = vec![0.0; b * c * h * w];
            for (i, &src) in argmax.iter().enumerate() {
                gin[src] += g[i];
            }
            input.accum_grad_owned(gin);
        }),
    ))
}

/// Nearest-neighbour 2x upsampling.
pub fn upsample_nearest2(input: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = input.dims4("upsample_nearest2")?;
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![0.0; b * c * oh * ow];
    input.with_data(|xv| {
        for bc in 0..b * c {
            let in_base = bc * h * w;
            let out_base = bc * oh * ow;
            for hi in 0..h {
                for wi in 0..w {
                    let v = xv[in_base + hi * w + wi];
                    let o = out_base + 2 * hi * ow + 2 * wi;
                    out[o] = v;
                    out[o + 1] = v;
                    out[o + ow] = v;
                    out[o + ow + 1] = v;
                }
            }
        }
    });
    Ok(Tensor::from_op(
        vec![b, c, oh, ow],
        out,
        vec![input.clone()],
        Box::new(move |g, _out, parents| {
            let input = &parents[0];
            if !input.needs_grad() {
                return;
            }
            let mut gin = vec![0.0; b * c * h * w];
            for bc in 0..b * c {
                let in_base = bc * h * w;
                let out_base = bc * oh * ow;
                for hi in 0..h {
                    for wi in 0..w {
                        let o = out_base + 2 * hi * ow + 2 * wi;
                        gin[in_base + hi * w + wi] += g[o] + g[o + 1] + g[o + ow] + g[o + ow + 1];
                    }
                }
            }
            input.accum_grad_owned(gin);
        }),
    ))
}

pub fn reshape(input: &Tensor, shape: Vec<usize>) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    if n != input.len() {
        return Err(Error::shape(
            "reshape",
            format!("cannot view {:?} as {shape:?}", input.shape()),
        ));
    }
    Ok(Tensor::from_op(
        shape,
        input.data(),
        vec![input.clone()],
        Box::new(|g, _out, parents| {
            if parents[0].needs_grad() {
                parents[0].accum_grad(g);
            }
        }),
    ))
}

pub fn sum_all(input: &Tensor) -> Tensor {
    let total = input.with_data(|xv| xv.iter().sum());
    let n = input.len();
    Tensor::from_op(
        vec![1],
        vec![total],
        vec![input.clone()],
        Box::new(move |g, _out, parents| {
            if parents[0].needs_grad() {
                parents[0].accum_grad_owned(vec![g[0]; n]);
            }
        }),
    )
}

pub fn scale(input: &Tensor, factor: f64) -> Tensor {
    let out: Vec<f64> = input.with_data(|xv| xv.iter().map(|v| v * factor).collect());
    Tensor::from_op(
        input.shape(),
        out,
        vec![input.clone()],
        Box::new(move |g, _out, parents| {
            if parents[0].needs_grad() {
                let gin: Vec<f64> = g.iter().map(|v| v * factor).collect();
                parents[0].accum_grad_owned(gin);
            }
        }),
    )
}

/// 1-D convolution along the channel axis of a [B,C] descriptor, zero padded
/// by k/2. Used by the ECA channel gate.
pub fn conv1d_channels(input: &Tensor, kernel: &Tensor) -> Result<Tensor> {
    let is = input.shape();
    let ks = kernel.shape();
    if is.len() != 2 || ks.len() != 1 {
        return Err(Error::shape(
            "conv1d_channels",
            format!("expected [B,C] input and [k] kernel, got {is:?} and {ks:?}"),
        ));
    }
    let (b, c) = (is[0], is[1]);
    let k = ks[0];
    if k % 2 == 0 {
        return Err(Error::invalid("conv1d_channels", format!("kernel width {k} must be odd")));
    }
    if k > c {
        return Err(Error::invalid(
            "conv1d_channels",
            format!("kernel width {k} exceeds {c} channels"),
        ));
    }
    let half = (k / 2) as isize;
    let mut out = vec![0.0; b * c];
    input.with_data(|xv| {
        kernel.with_data(|kv| {
            for bi in 0..b {
                let row = &xv[bi * c..(bi + 1) * c];
                for ci in 0..c {
                    let mut acc = 0.0;
                    for (j, &kvj) in kv.iter().enumerate() {
                        let src = ci as isize + j as isize - half;
                        if src >= 0 && src < c as isize {
                            acc += kvj * row[src as usize];
                        }
                    }
                    out[bi * c + ci] = acc;
                }
            }
        })
    });
    Ok(Tensor::from_op(
        vec![b, c],
        out,
        vec![input.clone(), kernel.clone()],
        Box::new(move |g, _out, parents| {
            let (input, kernel) = (&parents[0], &parents[1]);
            if input.needs_grad() {
                let mut gin = vec![0.0; b * c];
                kernel.with_data(|kv| {
                    for bi in 0..b {
                        for ci in 0..c {
                            let gv = g[bi * c + ci];
                            for (j, &kvj) in kv.iter().enumerate() {
                                let src = ci as isize + j as isize - half;
                                if src >= 0 && src < c as isize {
                                    gin[bi * c + src as usize] += gv * kvj;
                                }
                            }
                        }
                    }
                });
                input.accum_grad_owned(gin);
            }
            if kernel.needs_grad() {
                let mut gk = vec![0.0; k];
                input.with_data(|xv| {
                    for bi in 0..b {
                        let row = &xv[bi * c..(bi + 1) * c];
                        for ci in 0..c {
                            let gv = g[bi * c + ci];
                            for (j, gkj) in gk.iter_mut().enumerate() {
                                let src = ci as isize + j as isize - half;
                                if src >= 0 && src < c as isize {
                                    *gkj += gv * row[src as usize];
                                }
                            }
                        }
                    }
                });
                kernel.accum_grad_owned(gk);
            }
        }),
    ))
}

/// Mean cross-entropy of softmaxed logits [B,S] against integer labels.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let shape = logits.shape();
    if shape.len() != 2 {
        return Err(Error::shape(
            "softmax_cross_entropy",
            format!("expected [B,S] logits, got {shape:?}"),
        ));
    }
    let (b, s) = (shape[0], shape[1]);
    if labels.len() != b {
        return Err(Error::shape(
            "softmax_cross_entropy",
            format!("{} labels for batch of {b}", labels.len()),
        ));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= s) {
        return Err(Error::invalid(
            "softmax_cross_entropy",
            format!("label {bad} out of range for {s} classes"),
        ));
    }
    let mut probs = vec![0.0; b * s];
    let mut loss = 0.0;
    logits.with_data(|xv| {
        for bi in 0..b {
            let row = &xv[bi * s..(bi + 1) * s];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (j, &v) in row.iter().enumerate() {
                let e = (v - mx).exp();
                probs[bi * s + j] = e;
                z += e;
            }
            for p in &mut probs[bi * s..(bi + 1) * s] {
                *p /= z;
            }
            loss -= probs[bi * s + labels[bi]].ln();
        }
    });
    loss /= b as f64;
    let labels = labels.to_vec();
    Ok(Tensor::from_op(
        vec![1],
        vec![loss],
        vec![logits.clone()],
        Box::new(move |g, _out, parents| {
            let logits = &parents[0];
            if !logits.needs_grad() {
                return;
            }
            let scale = g[0] / b as f64;
            let mut gin = probs.clone();
            for (bi, &lbl) in labels.iter().enumerate() {
                gin[bi * s + lbl] -= 1.0;
            }
            for v in &mut gin {
                *v *= scale;
            }
            logits.accum_grad_owned(gin);
        }),
    ))
}

/// Softmax over the last axis of a [B,S] tensor (inference only, no grad).
pub fn softmax_rows(logits: &Tensor) -> Result<Vec<Vec<f64>>> {
    let shape = logits.shape();
    if shape.len() != 2 {
        return Err(Error::shape("softmax", format!("expected [B,S], got {shape:?}")));
    }
    let (b, s) = (shape[0], shape[1]);
    let mut out = Vec::with_capacity(b);
    logits.with_data(|xv| {
        for bi in 0..b {
            let row = &xv[bi * s..(bi + 1) * s];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = row.iter().map(|&v| (v - mx).exp()).collect();
            let z: f64 = exps.iter().sum();
            out.push(exps.iter().map(|e| e / z).collect());
        }
    });
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn rng(seed: u64) -> ChaCha20Rng {
        ChaCha20Rng::seed_from_u64(seed)
    }

    #[test]
    fn conv2d_scalar_product() {
        let x = Tensor::new(vec![1, 1, 1, 1], vec![3.0]);
        let w = Tensor::new(vec![1, 1, 1, 1], vec![2.0]);
        let b = Tensor::new(vec![1], vec![0.0]);
        let y = conv2d(&x, &w, Some(&b), 1, 0).unwrap();
        assert_eq!(y.data(), vec![6.0]);
    }

    #[test]
    fn conv2d_identity_kernel() {
        let mut r = rng(7);
        let x = Tensor::rand_uniform(vec![1, 1, 4, 4], -1.0, 1.0, &mut r);
        let mut k = vec![0.0; 9];
        k[4] = 1.0;
        let w = Tensor::new(vec![1, 1, 3, 3], k);
        let y = conv2d(&x, &w, None, 1, 1).unwrap();
        assert_eq!(y.data(), x.data());
    }

    /// Independent nested-loop convolution oracle.
    fn conv_oracle(
        x: &[f64],
        w: &[f64],
        (b, cin, h, wd): (usize, usize, usize, usize),
        (cout, k): (usize, usize),
        stride: usize,
        pad: usize,
    ) -> Vec<f64> {
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (wd + 2 * pad - k) / stride + 1;
        let mut out = vec![0.0; b * cout * oh * ow];
        for bi in 0..b {
            for co in 0..cout {
                for ohi in 0..oh {
                    for owi in 0..ow {
                        let mut acc = 0.0;
                        for ci in 0..cin {
                            for kh in 0..k {
                                for kw in 0..k {
                                    let ih = (ohi * stride + kh) as isize - pad as isize;
                                    let iw = (owi * stride + kw) as isize - pad as isize;
                                    if ih >= 0 && ih < h as isize && iw >= 0 && iw < wd as isize {
                                        acc += x[((bi * cin + ci) * h + ih as usize) * wd
                                            + iw as usize]
                                            * w[((co * cin + ci) * k + kh) * k + kw];
                                    }
                                }
                            }
                        }
                        out[((bi * cout + co) * oh + ohi) * ow + owi] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv2d_matches_loop_oracle() {
        let mut r = rng(11);
        for &(stride, pad) in &[(1usize, 0usize), (1, 1), (2, 1)] {
            let x = Tensor::rand_uniform(vec![2, 3, 4, 4], -1.0, 1.0, &mut r);
            let w = Tensor::rand_uniform(vec![2, 3, 3, 3], -1.0, 1.0, &mut r);
            let y = conv2d(&x, &w, None, stride, pad).unwrap();
            let oracle = conv_oracle(&x.data(), &w.data(), (2, 3, 4, 4), (2, 3), stride, pad);
            for (a, b) in y.data().iter().zip(&oracle) {
                assert!((a - b).abs() < 1e-12, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn conv2d_shape_errors_name_dimension() {
        let x = Tensor::zeros(vec![1, 2, 4, 4]);
        let w = Tensor::zeros(vec![1, 3, 3, 3]);
        let err = conv2d(&x, &w, None, 1, 1).unwrap_err();
        assert!(err.to_string().contains("2 channels"), "{err}");
    }

    #[test]
    fn linear_zero_and_identity() {
        let x = Tensor::new(vec![1, 2], vec![3.0, -1.0]);
        let w0 = Tensor::zeros(vec![2, 2]);
        let b0 = Tensor::zeros(vec![2]);
        assert_eq!(linear(&x, &w0, Some(&b0)).unwrap().data(), vec![0.0, 0.0]);
        let id = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]);
        assert_eq!(linear(&x, &id, None).unwrap().data(), x.data());
    }

    #[test]
    fn linear_matches_dot_oracle() {
        let mut r = rng(3);
        let x = Tensor::rand_uniform(vec![2, 3], -1.0, 1.0, &mut r);
        let w = Tensor::rand_uniform(vec![2, 3], -1.0, 1.0, &mut r);
        let b = Tensor::rand_uniform(vec![2], -1.0, 1.0, &mut r);
        let y = linear(&x, &w, Some(&b)).unwrap();
        let (xd, wd, bd) = (x.data(), w.data(), b.data());
        for bi in 0..2 {
            for o in 0..2 {
                let mut acc = bd[o];
                for i in 0..3 {
                    acc += xd[bi * 3 + i] * wd[o * 3 + i];
                }
                assert!((y.data()[bi * 2 + o] - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn global_pool_basics() {
        let x = Tensor::full(vec![1, 1, 3, 3], 5.0);
        assert_eq!(global_pool(&x, PoolKind::Avg).unwrap().data(), vec![5.0]);
        assert_eq!(global_pool(&x, PoolKind::Max).unwrap().data(), vec![5.0]);
        let y = Tensor::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(global_pool(&y, PoolKind::Avg).unwrap().data(), vec![2.5]);
        assert_eq!(global_pool(&y, PoolKind::Max).unwrap().data(), vec![4.0]);
    }

    #[test]
    fn global_pool_matches_reduction_oracle() {
        let mut r = rng(5);
        let x = Tensor::rand_uniform(vec![2, 3, 4, 5], -2.0, 2.0, &mut r);
        let avg = global_pool(&x, PoolKind::Avg).unwrap().data();
        let mx = global_pool(&x, PoolKind::Max).unwrap().data();
        let xd = x.data();
        for bc in 0..6 {
            let plane = &xd[bc * 20..(bc + 1) * 20];
            let want_avg: f64 = plane.iter().sum::<f64>() / 20.0;
            let want_max = plane.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            assert!((avg[bc] - want_avg).abs() < 1e-12);
            assert!((mx[bc] - want_max).abs() < 1e-12);
        }
    }

    #[test]
    fn channel_pool_basics() {
        let x = Tensor::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(channel_pool(&x, ChannelPoolKind::Mean).unwrap().data(), x.data());
        let y = Tensor::new(vec![1, 2, 1, 1], vec![2.0, 4.0]);
        assert_eq!(channel_pool(&y, ChannelPoolKind::Mean).unwrap().data(), vec![3.0]);
        assert_eq!(channel_pool(&y, ChannelPoolKind::Max).unwrap().data(), vec![4.0]);
    }

    #[test]
    fn channel_pool_matches_loop_oracle() {
        let mut r = rng(17);
        let x = Tensor::rand_uniform(vec![2, 4, 3, 3], -2.0, 2.0, &mut r);
        let mean = channel_pool(&x, ChannelPoolKind::Mean).unwrap().data();
        let mx = channel_pool(&x, ChannelPoolKind::Max).unwrap().data();
        let xd = x.data();
        for bi in 0..2 {
            for p in 0..9 {
                let vals: Vec<f64> = (0..4).map(|c| xd[(bi * 4 + c) * 9 + p]).collect();
                let want_mean: f64 = vals.iter().sum::<f64>() / 4.0;
                let want_max = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                assert!((mean[bi * 9 + p] - want_mean).abs() < 1e-12);
                assert!((mx[bi * 9 + p] - want_max).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn sigmoid_properties() {
        assert_eq!(sigmoid(&Tensor::scalar(0.0)).item(), 0.5);
        for &x in &[-5.0, -0.3, 0.7, 12.0] {
            let a = sigmoid(&Tensor::scalar(x)).item();
            let b = sigmoid(&Tensor::scalar(-x)).item();
            assert!((a + b - 1.0).abs() < 1e-12);
        }
        // strictly inside (0,1) even far past f64 saturation
        for &x in &[-1e4, -800.0, 800.0, 1e4] {
            let y = sigmoid(&Tensor::scalar(x)).item();
            assert!(y > 0.0 && y < 1.0, "sigmoid({x}) = {y}");
        }
    }

    #[test]
    fn sigmoid_derivative_at_zero() {
        let x = Tensor::scalar(0.0).requires_grad(true);
        let y = sigmoid(&x);
        y.backward().unwrap();
        assert!((x.grad().unwrap()[0] - 0.25).abs() < 1e-12);
    }

    #[test]
    fn elementwise_masks() {
        let mut r = rng(23);
        let x = Tensor::rand_uniform(vec![1, 2, 2, 2], -1.0, 1.0, &mut r);
        let half = Tensor::full(vec![1, 2, 1, 1], 0.5);
        let y = mul(&x, &half).unwrap();
        for (a, b) in y.data().iter().zip(x.data()) {
            assert!((a - 0.5 * b).abs() < 1e-15);
        }
        let zeros = Tensor::zeros(vec![1, 1, 2, 2]);
        let z = add(&x, &zeros).unwrap();
        assert_eq!(z.data(), x.data());
    }

    #[test]
    fn elementwise_rejects_bad_broadcast() {
        let a = Tensor::zeros(vec![1, 2, 2, 2]);
        let b = Tensor::zeros(vec![1, 3, 1, 1]);
        assert!(mul(&a, &b).is_err());
    }

    #[test]
    fn concat_slice_roundtrip_bit_exact() {
        let mut r = rng(31);
        let a = Tensor::rand_uniform(vec![2, 3, 2, 2], -1.0, 1.0, &mut r);
        let b = Tensor::rand_uniform(vec![2, 2, 2, 2], -1.0, 1.0, &mut r);
        let cat = concat_channels(&a, &b).unwrap();
        assert_eq!(slice_channels(&cat, 0, 3).unwrap().data(), a.data());
        assert_eq!(slice_channels(&cat, 3, 2).unwrap().data(), b.data());
    }

    #[test]
    fn concat_single_channels() {
        let a = Tensor::new(vec![1, 1, 1, 1], vec![1.0]);
        let b = Tensor::new(vec![1, 1, 1, 1], vec![2.0]);
        assert_eq!(concat_channels(&a, &b).unwrap().data(), vec![1.0, 2.0]);
    }

    #[test]
    fn pool_and_resize() {
        let x = Tensor::full(vec![1, 1, 2, 2], 3.0);
        assert_eq!(maxpool2(&x).unwrap().data(), vec![3.0]);
        let y = Tensor::new(vec![1, 1, 1, 1], vec![7.0]);
        assert_eq!(upsample_nearest2(&y).unwrap().data(), vec![7.0; 4]);
        let odd = Tensor::zeros(vec![1, 1, 3, 3]);
        assert!(maxpool2(&odd).is_err());
    }

    #[test]
    fn maxpool2_matches_loop_oracle() {
        let mut r = rng(41);
        let x = Tensor::rand_uniform(vec![1, 2, 4, 4], -1.0, 1.0, &mut r);
        let y = maxpool2(&x).unwrap().data();
        let xd = x.data();
        for c in 0..2 {
            for oh in 0..2 {
                for ow in 0..2 {
                    let mut want = f64::NEG_INFINITY;
                    for dh in 0..2 {
                        for dw in 0..2 {
                            want = want.max(xd[c * 16 + (2 * oh + dh) * 4 + 2 * ow + dw]);
                        }
                    }
                    assert_eq!(y[c * 4 + oh * 2 + ow], want);
                }
            }
        }
    }

    #[test]
    fn softmax_cross_entropy_uniform() {
        let logits = Tensor::zeros(vec![2, 4]);
        let loss = softmax_cross_entropy(&logits, &[1, 3]).unwrap();
        assert!((loss.item() - (4.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn conv1d_channels_pointwise() {
        let x = Tensor::new(vec![1, 3], vec![1.0, -2.0, 0.5]);
        let k = Tensor::new(vec![1], vec![3.0]);
        assert_eq!(conv1d_channels(&x, &k).unwrap().data(), vec![3.0, -6.0, 1.5]);
        let even = Tensor::new(vec![2], vec![1.0, 1.0]);
        assert!(conv1d_channels(&x, &even).is_err());
    }
}
