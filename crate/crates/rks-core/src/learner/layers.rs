//! Minimal dense tensor ops for the desk-scale feature net: same-padding
//! convolutions, ReLU, 2x2 max pooling, bilinear resizing and channel
//! concatenation, each with a hand-written backward pass.

/// A `channels x height x width` tensor stored pixel-major (interleaved
/// channels), matching the grid layout used elsewhere.
#[derive(Debug, Clone)]
pub struct Tensor {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(c: usize, h: usize, w: usize) -> Tensor {
        Tensor { c, h, w, data: vec![0.0; c * h * w] }
    }

    pub fn from_data(c: usize, h: usize, w: usize, data: Vec<f64>) -> Tensor {
        assert_eq!(data.len(), c * h * w);
        Tensor { c, h, w, data }
    }

    #[inline]
    pub fn at(&self, ci: usize, y: usize, x: usize) -> f64 {
        self.data[(y * self.w + x) * self.c + ci]
    }

    #[inline]
    pub fn at_mut(&mut self, ci: usize, y: usize, x: usize) -> &mut f64 {
        &mut self.data[(y * self.w + x) * self.c + ci]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Weight count of a `k x k` convolution (`k` odd) plus biases.
pub fn conv_param_count(ci: usize, co: usize, k: usize) -> usize {
    co * ci * k * k + co
}

/// Same-padding convolution; weights laid out `[co][ci][ky][kx]` followed
/// by `[co]` biases.
pub fn conv_forward(input: &Tensor, params: &[f64], ci: usize, co: usize, k: usize) -> Tensor {
    assert_eq!(input.c, ci);
    assert_eq!(params.len(), conv_param_count(ci, co, k));
    let (h, w) = (input.h, input.w);
    let half = (k / 2) as isize;
    let weights = &params[..co * ci * k * k];
    let biases = &params[co * ci * k * k..];
    let mut out = Tensor::zeros(co, h, w);
    for y in 0..h {
        for x in 0..w {
            let out_base = (y * w + x) * co;
            for o in 0..co {
                out.data[out_base + o] = biases[o];
            }
            for ky in 0..k {
                let sy = y as isize + ky as isize - half;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                for kx in 0..k {
                    let sx = x as isize + kx as isize - half;
                    if sx < 0 || sx >= w as isize {
                        continue;
                    }
                    let in_base = (sy as usize * w + sx as usize) * ci;
                    for o in 0..co {
                        let w_base = ((o * ci) * k + ky) * k + kx;
                        let mut acc = 0.0;
                        for i in 0..ci {
                            acc += weights[w_base + i * k * k] * input.data[in_base + i];
                        }
                        out.data[out_base + o] += acc;
                    }
                }
            }
        }
    }
    out
}

/// Backward pass of [`conv_forward`]; accumulates parameter gradients into
/// `grad_params` and returns the input gradient.
pub fn conv_backward(
    input: &Tensor,
    grad_out: &Tensor,
    params: &[f64],
    grad_params: &mut [f64],
    ci: usize,
    co: usize,
    k: usize,
) -> Tensor {
    assert_eq!(grad_out.c, co);
    let (h, w) = (input.h, input.w);
    let half = (k / 2) as isize;
    let weights = &params[..co * ci * k * k];
    let (grad_weights, grad_biases) = grad_params.split_at_mut(co * ci * k * k);
    let mut grad_in = Tensor::zeros(ci, h, w);
    for y in 0..h {
        for x in 0..w {
            let go_base = (y * w + x) * co;
            for o in 0..co {
                grad_biases[o] += grad_out.data[go_base + o];
            }
            for ky in 0..k {
                let sy = y as isize + ky as isize - half;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                for kx in 0..k {
                    let sx = x as isize + kx as isize - half;
                    if sx < 0 || sx >= w as isize {
                        continue;
                    }
                    let in_base = (sy as usize * w + sx as usize) * ci;
                    for o in 0..co {
                        let g = grad_out.data[go_base + o];
                        if g == 0.0 {
                            continue;
                        }
                        let w_base = ((o * ci) * k + ky) * k + kx;
                        for i in 0..ci {
                            grad_weights[w_base + i * k * k] += g * input.data[in_base + i];
                            grad_in.data[in_base + i] += g * weights[w_base + i * k * k];
                        }
                    }
                }
            }
        }
    }
    grad_in
}

pub fn relu_forward(input: &Tensor) -> Tensor {
    Tensor {
        c: input.c,
        h: input.h,
        w: input.w,
        data: input.data.iter().map(|&v| v.max(0.0)).collect(),
    }
}

/// `output` must be the forward ReLU output; gradients pass where it is
/// strictly positive.
pub fn relu_backward(output: &Tensor, grad_out: &Tensor) -> Tensor {
    Tensor {
        c: output.c,
        h: output.h,
        w: output.w,
        data: output
            .data
            .iter()
            .zip(&grad_out.data)
            .map(|(&o, &g)| if o > 0.0 { g } else { 0.0 })
            .collect(),
    }
}

/// 2x2 max pooling with stride 2 (dims must be even). Ties resolve to the
/// first maximum in scan order so the backward routing is deterministic.
pub fn maxpool2_forward(input: &Tensor) -> (Tensor, Vec<u32>) {
    assert!(input.h % 2 == 0 && input.w % 2 == 0);
    let (oh, ow) = (input.h / 2, input.w / 2);
    let mut out = Tensor::zeros(input.c, oh, ow);
    let mut argmax = vec![0u32; input.c * oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            for ci in 0..input.c {
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = 0u32;
                for dy in 0..2 {
                    for dx in 0..2 {
                        let (sy, sx) = (2 * y + dy, 2 * x + dx);
                        let v = input.at(ci, sy, sx);
                        if v > best {
                            best = v;
                            best_idx = ((sy * input.w + sx) * input.c + ci) as u32;
                        }
                    }
                }
                *out.at_mut(ci, y, x) = best;
                argmax[(y * ow + x) * input.c + ci] = best_idx;
            }
        }
    }
    (out, argmax)
}

pub fn maxpool2_backward(input_shape: (usize, usize, usize), argmax: &[u32], grad_out: &Tensor) -> Tensor {
    let (c, h, w) = input_shape;
    let mut grad_in = Tensor::zeros(c, h, w);
    for (i, &src) in argmax.iter().enumerate() {
        grad_in.data[src as usize] += grad_out.data[i];
    }
    grad_in
}

/// Bilinear resize (half-pixel-centre convention): output pixel `o` samples
/// the input at `(o + 0.5) * in/out - 0.5`, clamped to the border.
pub fn resize_bilinear_forward(input: &Tensor, oh: usize, ow: usize) -> Tensor {
    let mut out = Tensor::zeros(input.c, oh, ow);
    let sy = input.h as f64 / oh as f64;
    let sx = input.w as f64 / ow as f64;
    for y in 0..oh {
        let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (input.h - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(input.h - 1);
        let wy = fy - y0 as f64;
        for x in 0..ow {
            let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (input.w - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(input.w - 1);
            let wx = fx - x0 as f64;
            for ci in 0..input.c {
                let v = (1.0 - wy) * ((1.0 - wx) * input.at(ci, y0, x0) + wx * input.at(ci, y0, x1))
                    + wy * ((1.0 - wx) * input.at(ci, y1, x0) + wx * input.at(ci, y1, x1));
                *out.at_mut(ci, y, x) = v;
            }
        }
    }
    out
}

pub fn resize_bilinear_backward(input_shape: (usize, usize, usize), grad_out: &Tensor) -> Tensor {
    let (c, ih, iw) = input_shape;
    let (oh, ow) = (grad_out.h, grad_out.w);
    let mut grad_in = Tensor::zeros(c, ih, iw);
    let sy = ih as f64 / oh as f64;
    let sx = iw as f64 / ow as f64;
    for y in 0..oh {
        let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (ih - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(ih - 1);
        let wy = fy - y0 as f64;
        for x in 0..ow {
            let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (iw - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(iw - 1);
            let wx = fx - x0 as f64;
            for ci in 0..c {
                let g = grad_out.at(ci, y, x);
                *grad_in.at_mut(ci, y0, x0) += (1.0 - wy) * (1.0 - wx) * g;
                *grad_in.at_mut(ci, y0, x1) += (1.0 - wy) * wx * g;
                *grad_in.at_mut(ci, y1, x0) += wy * (1.0 - wx) * g;
                *grad_in.at_mut(ci, y1, x1) += wy * wx * g;
            }
        }
    }
    grad_in
}

/// Channel concatenation of same-sized tensors.
pub fn concat_channels(parts: &[&Tensor]) -> Tensor {
    let (h, w) = (parts[0].h, parts[0].w);
    let c: usize = parts.iter().map(|t| t.c).sum();
    let mut out = Tensor::zeros(c, h, w);
    for p in 0..h * w {
        let mut offset = 0;
        for part in parts {
            debug_assert!(part.h == h && part.w == w);
            let src = &part.data[p * part.c..(p + 1) * part.c];
            out.data[p * c + offset..p * c + offset + part.c].copy_from_slice(src);
            offset += part.c;
        }
    }
    out
}

/// Splits a concatenated gradient back into per-part gradients.
pub fn split_channels(grad: &Tensor, channel_counts: &[usize]) -> Vec<Tensor> {
    let (h, w) = (grad.h, grad.w);
    let mut parts: Vec<Tensor> = channel_counts.iter().map(|&c| Tensor::zeros(c, h, w)).collect();
    for p in 0..h * w {
        let mut offset = 0;
        for (part, &c) in parts.iter_mut().zip(channel_counts) {
            part.data[p * c..(p + 1) * c].copy_from_slice(&grad.data[p * grad.c + offset..p * grad.c + offset + c]);
            offset += c;
        }
    }
    parts
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(c: usize, h: usize, w: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_data(c, h, w, (0..c * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    fn fd_check(
        forward: impl Fn(&[f64], &Tensor) -> Tensor,
        params: &[f64],
        input: &Tensor,
        analytic_params: &[f64],
        analytic_input: &Tensor,
        upstream: &Tensor,
        probes_p: &[usize],
        probes_i: &[usize],
    ) {
        let h = 1e-6;
        let scalar = |p: &[f64], inp: &Tensor| -> f64 {
            let out = forward(p, inp);
            out.data.iter().zip(&upstream.data).map(|(a, b)| a * b).sum()
        };
        for &i in probes_p {
            let mut plus = params.to_vec();
            plus[i] += h;
            let mut minus = params.to_vec();
            minus[i] -= h;
            let fd = (scalar(&plus, input) - scalar(&minus, input)) / (2.0 * h);
            let tol = 1e-5 * fd.abs().max(analytic_params[i].abs()) + 1e-7;
            assert!((fd - analytic_params[i]).abs() < tol, "param {i}: {fd} vs {}", analytic_params[i]);
        }
        for &i in probes_i {
            let mut plus = input.clone();
            plus.data[i] += h;
            let mut minus = input.clone();
            minus.data[i] -= h;
            let fd = (scalar(params, &plus) - scalar(params, &minus)) / (2.0 * h);
            let tol = 1e-5 * fd.abs().max(analytic_input.data[i].abs()) + 1e-7;
            assert!((fd - analytic_input.data[i]).abs() < tol, "input {i}: {fd} vs {}", analytic_input.data[i]);
        }
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        let (ci, co, k) = (3usize, 4usize, 3usize);
        let input = random_tensor(ci, 6, 7, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let params: Vec<f64> = (0..conv_param_count(ci, co, k)).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let upstream = random_tensor(co, 6, 7, 3);
        let out = conv_forward(&input, &params, ci, co, k);
        let mut grad_params = vec![0.0; params.len()];
        let grad_in = conv_backward(&input, &upstream, &params, &mut grad_params, ci, co, k);
        assert_eq!(out.c, co);
        let probes_p: Vec<usize> = (0..10).map(|i| i * params.len() / 10).collect();
        let probes_i: Vec<usize> = (0..10).map(|i| i * input.data.len() / 10).collect();
        fd_check(
            |p, inp| conv_forward(inp, p, ci, co, k),
            &params,
            &input,
            &grad_params,
            &grad_in,
            &upstream,
            &probes_p,
            &probes_i,
        );
    }

    #[test]
    fn maxpool_routes_gradient_to_argmax() {
        let input = random_tensor(2, 4, 4, 5);
        let (out, argmax) = maxpool2_forward(&input);
        let upstream = random_tensor(2, 2, 2, 6);
        let grad_in = maxpool2_backward((2, 4, 4), &argmax, &upstream);
        // Sum preserved per channel.
        for ci in 0..2 {
            let sum_out: f64 = (0..4).map(|i| upstream.data[i * 2 + ci]).sum();
            let sum_in: f64 = grad_in.data.iter().skip(ci).step_by(2).sum();
            assert!((sum_out - sum_in).abs() < 1e-12);
        }
        // FD on a couple of coordinates.
        let h = 1e-6;
        for &i in &[0usize, 9, 17, 31] {
            let mut plus = input.clone();
            plus.data[i] += h;
            let mut minus = input.clone();
            minus.data[i] -= h;
            let f = |t: &Tensor| -> f64 {
                let (o, _) = maxpool2_forward(t);
                o.data.iter().zip(&upstream.data).map(|(a, b)| a * b).sum()
            };
            let fd = (f(&plus) - f(&minus)) / (2.0 * h);
            assert!((fd - grad_in.data[i]).abs() < 1e-6, "{fd} vs {}", grad_in.data[i]);
        }
        assert_eq!(out.h, 2);
    }

    #[test]
    fn resize_backward_is_adjoint() {
        let input = random_tensor(3, 5, 4, 7);
        let out = resize_bilinear_forward(&input, 10, 8);
        let upstream = random_tensor(3, 10, 8, 8);
        let grad_in = resize_bilinear_backward((3, 5, 4), &upstream);
        let lhs: f64 = out.data.iter().zip(&upstream.data).map(|(a, b)| a * b).sum();
        let rhs: f64 = input.data.iter().zip(&grad_in.data).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10, "{lhs} vs {rhs}");
    }

    #[test]
    fn resize_preserves_constant_fields() {
        let input = Tensor::from_data(1, 4, 4, vec![2.5; 16]);
        let out = resize_bilinear_forward(&input, 8, 8);
        assert!(out.data.iter().all(|v| (v - 2.5).abs() < 1e-12));
    }

    #[test]
    fn concat_split_roundtrip() {
        let a = random_tensor(2, 3, 3, 9);
        let b = random_tensor(3, 3, 3, 10);
        let cat = concat_channels(&[&a, &b]);
        assert_eq!(cat.c, 5);
        assert_eq!(cat.at(0, 1, 2), a.at(0, 1, 2));
        assert_eq!(cat.at(2, 1, 2), b.at(0, 1, 2));
        let parts = split_channels(&cat, &[2, 3]);
        assert_eq!(parts[0].data, a.data);
        assert_eq!(parts[1].data, b.data);
    }

    #[test]
    fn relu_masks_gradient()
    {
        let input = Tensor::from_data(1, 1, 4, vec![-1.0, 0.0, 0.5, 2.0]);
        let out = relu_forward(&input);
        assert_eq!(out.data, vec![0.0, 0.0, 0.5, 2.0]);
        let upstream = Tensor::from_data(1, 1, 4, vec![1.0, 1.0, 1.0, 1.0]);
        let grad = relu_backward(&out, &upstream);
        assert_eq!(grad.data, vec![0.0, 0.0, 1.0, 1.0]);
    }
}
