use alloc::{vec, vec::Vec};

use super::{softmax_into, DropoutMode, LayerSpec, Network};
use crate::linalg::{gemm, Op};

#[derive(Debug, Clone)]
pub(super) enum Aux {
    None,
    /// Per-element multiplier applied by a dropout layer (0/1 mask or `1 - rate`).
    Mask(Vec<f64>),
    Scale(f64),
    /// Flat input index chosen by each pooled output.
    Argmax(Vec<u32>),
}

pub(super) fn forward(net: &Network, i: usize, x: &[f64], batch: usize, mode: DropoutMode<'_>) -> (Vec<f64>, Aux) {
    let layer = net.layers[i];
    let in_shape = &net.shapes[i];
    let out_dim: usize = net.shapes[i + 1].iter().product();
    let params = &net.params[net.offsets[i]..net.offsets[i + 1]];
    match layer {
        LayerSpec::Dense { fan_in, fan_out } => {
            let (w, b) = params.split_at(fan_in * fan_out);
            let mut out = vec![0.0; batch * fan_out];
            for row in out.chunks_exact_mut(fan_out) {
                row.copy_from_slice(b);
            }
            gemm(batch, fan_in, fan_out, 1.0, x, Op::N, w, Op::T, 1.0, &mut out);
            (out, Aux::None)
        }
        LayerSpec::Relu => (x.iter().map(|&v| v.max(0.0)).collect(), Aux::None),
        LayerSpec::Softmax => {
            let mut out = vec![0.0; x.len()];
            for (zi, oi) in x.chunks_exact(out_dim).zip(out.chunks_exact_mut(out_dim)) {
                softmax_into(zi, oi);
            }
            (out, Aux::None)
        }
        LayerSpec::Dropout { rate } => {
            if rate == 0.0 {
                return (x.to_vec(), Aux::Scale(1.0));
            }
            let keep = 1.0 - rate;
            match mode {
                DropoutMode::Scale => (x.iter().map(|v| v * keep).collect(), Aux::Scale(keep)),
                DropoutMode::PerExample(rng) => {
                    let mask: Vec<f64> = (0..x.len())
                        .map(|_| if rng.bernoulli(rate) { 0.0 } else { 1.0 })
                        .collect();
                    (x.iter().zip(&mask).map(|(a, m)| a * m).collect(), Aux::Mask(mask))
                }
                DropoutMode::Shared(rng) => {
                    let unit: Vec<f64> = (0..out_dim)
                        .map(|_| if rng.bernoulli(rate) { 0.0 } else { 1.0 })
                        .collect();
                    let mut mask = Vec::with_capacity(x.len());
                    for _ in 0..batch {
                        mask.extend_from_slice(&unit);
                    }
                    (x.iter().zip(&mask).map(|(a, m)| a * m).collect(), Aux::Mask(mask))
                }
            }
        }
        LayerSpec::Conv2d {
            in_channels,
            out_channels,
            kernel_h,
            kernel_w,
        } => {
            let (h, w) = (in_shape[1], in_shape[2]);
            let (oh, ow) = (h - kernel_h + 1, w - kernel_w + 1);
            let k = in_channels * kernel_h * kernel_w;
            let p = oh * ow;
            let (wts, bias) = params.split_at(out_channels * k);
            let in_dim = in_channels * h * w;
            let mut cols = vec![0.0; k * p];
            let mut out = vec![0.0; batch * out_channels * p];
            for b in 0..batch {
                im2col(
                    &x[b * in_dim..(b + 1) * in_dim],
                    in_channels,
                    h,
                    w,
                    kernel_h,
                    kernel_w,
                    &mut cols,
                );
                let ob = &mut out[b * out_channels * p..(b + 1) * out_channels * p];
                for (c, plane) in ob.chunks_exact_mut(p).enumerate() {
                    plane.fill(bias[c]);
                }
                gemm(out_channels, k, p, 1.0, wts, Op::N, &cols, Op::N, 1.0, ob);
            }
            (out, Aux::None)
        }
        LayerSpec::MaxPool2d => {
            let (c, h, w) = (in_shape[0], in_shape[1], in_shape[2]);
            let (oh, ow) = (h / 2, w / 2);
            let in_dim = c * h * w;
            let mut out = Vec::with_capacity(batch * c * oh * ow);
            let mut arg = Vec::with_capacity(batch * c * oh * ow);
            for b in 0..batch {
                let xb = &x[b * in_dim..(b + 1) * in_dim];
                for ch in 0..c {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let mut best = usize::MAX;
                            let mut best_v = f64::NEG_INFINITY;
                            for dy in 0..2 {
                                for dx in 0..2 {
                                    let idx = (ch * h + 2 * oy + dy) * w + 2 * ox + dx;
                                    if xb[idx] > best_v || best == usize::MAX {
                                        best_v = xb[idx];
                                        best = idx;
                                    }
                                }
                            }
                            out.push(best_v);
                            arg.push((b * in_dim + best) as u32);
                        }
                    }
                }
            }
            (out, Aux::Argmax(arg))
        }
        LayerSpec::Flatten => (x.to_vec(), Aux::None),
    }
}

#[allow(clippy::too_many_arguments)]
pub(super) fn backward(
    net: &Network,
    i: usize,
    x: &[f64],
    y: &[f64],
    aux: &Aux,
    dy: &[f64],
    batch: usize,
    pgrad: Option<&mut [f64]>,
    need_input: bool,
) -> Vec<f64> {
    let layer = net.layers[i];
    let in_shape = &net.shapes[i];
    let out_dim: usize = net.shapes[i + 1].iter().product();
    let params = &net.params[net.offsets[i]..net.offsets[i + 1]];
    match layer {
        LayerSpec::Dense { fan_in, fan_out } => {
            let (w, _) = params.split_at(fan_in * fan_out);
            if let Some(g) = pgrad {
                let (gw, gb) = g.split_at_mut(fan_in * fan_out);
                gemm(fan_out, batch, fan_in, 1.0, dy, Op::T, x, Op::N, 1.0, gw);
                for row in dy.chunks_exact(fan_out) {
                    for (a, b) in gb.iter_mut().zip(row) {
                        *a += b;
                    }
                }
            }
            if !need_input {
                return Vec::new();
            }
            let mut dx = vec![0.0; batch * fan_in];
            gemm(batch, fan_out, fan_in, 1.0, dy, Op::N, w, Op::N, 0.0, &mut dx);
            dx
        }
        LayerSpec::Relu => x.iter().zip(dy).map(|(&a, &g)| if a > 0.0 { g } else { 0.0 }).collect(),
        LayerSpec::Softmax => {
            let mut dx = vec![0.0; dy.len()];
            for ((p, g), d) in y
                .chunks_exact(out_dim)
                .zip(dy.chunks_exact(out_dim))
                .zip(dx.chunks_exact_mut(out_dim))
            {
                let s: f64 = p.iter().zip(g).map(|(a, b)| a * b).sum();
                for ((di, pi), gi) in d.iter_mut().zip(p).zip(g) {
                    *di = pi * (gi - s);
                }
            }
            dx
        }
        LayerSpec::Dropout { .. } => match aux {
            Aux::Mask(m) => dy.iter().zip(m).map(|(g, m)| g * m).collect(),
            Aux::Scale(s) => dy.iter().map(|g| g * s).collect(),
            _ => unreachable!("dropout trace without mask"),
        },
        LayerSpec::Conv2d {
            in_channels,
            out_channels,
            kernel_h,
            kernel_w,
        } => {
            let (h, w) = (in_shape[1], in_shape[2]);
            let (oh, ow) = (h - kernel_h + 1, w - kernel_w + 1);
            let k = in_channels * kernel_h * kernel_w;
            let p = oh * ow;
            let in_dim = in_channels * h * w;
            let wts = &params[..out_channels * k];
            let mut cols = vec![0.0; k * p];
            let mut dcols = vec![0.0; k * p];
            let mut dx = if need_input {
                vec![0.0; batch * in_dim]
            } else {
                Vec::new()
            };
            let mut pgrad = pgrad;
            for b in 0..batch {
                let dyb = &dy[b * out_channels * p..(b + 1) * out_channels * p];
                if let Some(g) = pgrad.as_deref_mut() {
                    im2col(
                        &x[b * in_dim..(b + 1) * in_dim],
                        in_channels,
                        h,
                        w,
                        kernel_h,
                        kernel_w,
                        &mut cols,
                    );
                    let (gw, gb) = g.split_at_mut(out_channels * k);
                    gemm(out_channels, p, k, 1.0, dyb, Op::N, &cols, Op::T, 1.0, gw);
                    for (c, plane) in dyb.chunks_exact(p).enumerate() {
                        gb[c] += plane.iter().sum::<f64>();
                    }
                }
                if need_input {
                    gemm(k, out_channels, p, 1.0, wts, Op::T, dyb, Op::N, 0.0, &mut dcols);
                    col2im_add(
                        &dcols,
                        in_channels,
                        h,
                        w,
                        kernel_h,
                        kernel_w,
                        &mut dx[b * in_dim..(b + 1) * in_dim],
                    );
                }
            }
            dx
        }
        LayerSpec::MaxPool2d => {
            let Aux::Argmax(arg) = aux else {
                unreachable!("maxpool trace without argmax")
            };
            let mut dx = vec![0.0; x.len()];
            for (&idx, g) in arg.iter().zip(dy) {
                dx[idx as usize] += g;
            }
            dx
        }
        LayerSpec::Flatten => dy.to_vec(),
    }
}

fn im2col(x: &[f64], c: usize, h: usize, w: usize, kh: usize, kw: usize, cols: &mut [f64]) {
    let (oh, ow) = (h - kh + 1, w - kw + 1);
    let p = oh * ow;
    for ch in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let r = (ch * kh + ki) * kw + kj;
                let dst = &mut cols[r * p..(r + 1) * p];
                for oy in 0..oh {
                    let src = (ch * h + oy + ki) * w + kj;
                    dst[oy * ow..(oy + 1) * ow].copy_from_slice(&x[src..src + ow]);
                }
            }
        }
    }
}

fn col2im_add(cols: &[f64], c: usize, h: usize, w: usize, kh: usize, kw: usize, dx: &mut [f64]) {
    let (oh, ow) = (h - kh + 1, w - kw + 1);
    let p = oh * ow;
    for ch in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let r = (ch * kh + ki) * kw + kj;
                let src = &cols[r * p..(r + 1) * p];
                for oy in 0..oh {
                    let dst = (ch * h + oy + ki) * w + kj;
                    for (d, s) in dx[dst..dst + ow].iter_mut().zip(&src[oy * ow..(oy + 1) * ow]) {
                        *d += s;
                    }
                }
            }
        }
    }
}
