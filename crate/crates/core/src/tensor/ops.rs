use super::tape::{ConvGeom, Op};
use super::{Real, Tape, Tensor, TensorError, Var};
use crate::par;

const BN_EPS: f64 = 1e-5;

/// Splits a rank-3 `[C,H,W]` or rank-4 `[B,C,H,W]` shape into `(B, C, H, W, batched)`.
fn image_dims(
    op: &'static str,
    shape: &[usize],
) -> Result<(usize, usize, usize, usize, bool), TensorError> {
    match *shape {
        [c, h, w] => Ok((1, c, h, w, false)),
        [b, c, h, w] => Ok((b, c, h, w, true)),
        _ => Err(TensorError::shape(
            op,
            format!("expected [C,H,W] or [B,C,H,W], got {:?}", shape),
        )),
    }
}

fn with_batch(batched: bool, b: usize, rest: &[usize]) -> Vec<usize> {
    let mut s = Vec::with_capacity(rest.len() + 1);
    if batched {
        s.push(b);
    }
    s.extend_from_slice(rest);
    s
}

fn im2col<T: Real>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let p = g.out_len();
    for c in 0..g.c_in {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let out_row = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        out_row.fill(T::zero());
                        continue;
                    }
                    let src = &x[(c * g.h + iy as usize) * g.w..(c * g.h + iy as usize + 1) * g.w];
                    for (ox, o) in out_row.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *o = if ix < 0 || ix >= g.w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Real>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let p = g.out_len();
    for c in 0..g.c_in {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let base = (c * g.h + iy as usize) * g.w;
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dx[base + ix as usize] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

impl<T: Real> Tape<T> {
    /// 2-D cross-correlation. `input` is `[C_in,H,W]` or `[B,C_in,H,W]`,
    /// `kernel` is `[C_out,C_in,kH,kW]`, `bias` is `[C_out]`.
    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var, TensorError> {
        const OP: &str = "conv2d";
        if stride == 0 {
            return Err(TensorError::invalid(OP, "stride must be positive"));
        }
        let (batch, c_in, h, w, batched) = image_dims(OP, self.shape(input))?;
        let ks = self.shape(kernel).to_vec();
        let [c_out, kc, kh, kw] = ks[..] else {
            return Err(TensorError::shape(
                OP,
                format!("kernel must be rank 4, got {:?}", ks),
            ));
        };
        if kc != c_in {
            return Err(TensorError::shape(
                OP,
                format!("kernel expects {} input channels, input has {}", kc, c_in),
            ));
        }
        if kh == 0 || kw == 0 || kh > h + 2 * padding || kw > w + 2 * padding {
            return Err(TensorError::shape(
                OP,
                format!(
                    "kernel {}x{} does not fit padded input {}x{} (padding {})",
                    kh, kw, h, w, padding
                ),
            ));
        }
        if let Some(b) = bias {
            if self.shape(b) != [c_out] {
                return Err(TensorError::shape(
                    OP,
                    format!("bias must be [{}], got {:?}", c_out, self.shape(b)),
                ));
            }
        }
        let geom = ConvGeom {
            batch,
            c_in,
            h,
            w,
            c_out,
            kh,
            kw,
            stride,
            pad: padding,
            ho: (h + 2 * padding - kh) / stride + 1,
            wo: (w + 2 * padding - kw) / stride + 1,
        };
        let keep_cols = self.requires_grad(kernel);
        let x = self.value(input).data();
        let k = self.value(kernel).data();
        let bvals = bias.map(|b| self.value(b).data());
        let (kl, pl) = (geom.patch_len(), geom.out_len());
        let in_len = c_in * h * w;

        let per_sample = par::map_range(batch, |b| {
            let mut cols = vec![T::zero(); kl * pl];
            im2col(&x[b * in_len..(b + 1) * in_len], &geom, &mut cols);
            let mut out = vec![T::zero(); c_out * pl];
            if let Some(bv) = bvals {
                for (o, row) in out.chunks_mut(pl).enumerate() {
                    row.fill(bv[o]);
                }
            }
            T::gemm(
                c_out,
                kl,
                pl,
                T::one(),
                (k, kl as isize, 1),
                (&cols, pl as isize, 1),
                T::one(),
                (&mut out, pl as isize, 1),
            );
            (out, if keep_cols { cols } else { Vec::new() })
        });
        let mut out = Vec::with_capacity(batch * c_out * pl);
        let mut cols = Vec::with_capacity(if keep_cols { batch * kl * pl } else { 0 });
        for (o, c) in per_sample {
            out.extend_from_slice(&o);
            cols.extend_from_slice(&c);
        }
        let shape = with_batch(batched, batch, &[c_out, geom.ho, geom.wo]);
        let mut deps = vec![input, kernel];
        deps.extend(bias);
        let rg = self.any_grad(&deps);
        Ok(self.push(
            Tensor::new(shape, out)?,
            rg,
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
                cols,
            },
        ))
    }

    /// `weight · input + bias` for `input` of shape `[D_in]` or `[B,D_in]`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var, TensorError> {
        const OP: &str = "linear";
        let xs = self.shape(input).to_vec();
        let (batch, d_in, batched) = match xs[..] {
            [d] => (1, d, false),
            [b, d] => (b, d, true),
            _ => {
                return Err(TensorError::shape(
                    OP,
                    format!("input must be rank 1 or 2, got {:?}", xs),
                ))
            }
        };
        let ws = self.shape(weight).to_vec();
        let [d_out, wd] = ws[..] else {
            return Err(TensorError::shape(
                OP,
                format!("weight must be rank 2, got {:?}", ws),
            ));
        };
        if wd != d_in {
            return Err(TensorError::shape(
                OP,
                format!("weight is {}x{} but input has width {}", d_out, wd, d_in),
            ));
        }
        if self.shape(bias) != [d_out] {
            return Err(TensorError::shape(
                OP,
                format!("bias must be [{}], got {:?}", d_out, self.shape(bias)),
            ));
        }
        let bv = self.value(bias).data();
        let mut out: Vec<T> = (0..batch).flat_map(|_| bv.iter().copied()).collect();
        T::gemm(
            batch,
            d_in,
            d_out,
            T::one(),
            (self.value(input).data(), d_in as isize, 1),
            (self.value(weight).data(), 1, d_in as isize),
            T::one(),
            (&mut out, d_out as isize, 1),
        );
        let shape = with_batch(batched, batch, &[d_out]);
        let rg = self.any_grad(&[input, weight, bias]);
        Ok(self.push(
            Tensor::new(shape, out)?,
            rg,
            Op::Linear {
                input,
                weight,
                bias,
                batch,
            },
        ))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let x = self.value(input);
        let out = Tensor::new(
            x.shape().to_vec(),
            x.data()
                .iter()
                .map(|&v| if v > T::zero() { v } else { T::zero() })
                .collect(),
        )
        .expect("same shape");
        let rg = self.requires_grad(input);
        self.push(out, rg, Op::Relu { input })
    }

    /// Max pooling over `k×k` windows; padded positions never win.
    pub fn max_pool(
        &mut self,
        input: Var,
        k: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Var, TensorError> {
        const OP: &str = "max_pool";
        if k == 0 || stride == 0 {
            return Err(TensorError::invalid(
                OP,
                "window and stride must be positive",
            ));
        }
        if padding >= k {
            return Err(TensorError::invalid(
                OP,
                "padding must be smaller than the window",
            ));
        }
        let (batch, c, h, w, batched) = image_dims(OP, self.shape(input))?;
        if k > h + 2 * padding || k > w + 2 * padding {
            return Err(TensorError::shape(
                OP,
                format!("window {} larger than padded {}x{}", k, h, w),
            ));
        }
        let ho = (h + 2 * padding - k) / stride + 1;
        let wo = (w + 2 * padding - k) / stride + 1;
        let x = self.value(input).data();
        let planes = batch * c;
        let per_plane = par::map_range(planes, |pi| {
            let src = &x[pi * h * w..(pi + 1) * h * w];
            let mut vals = Vec::with_capacity(ho * wo);
            let mut idx = Vec::with_capacity(ho * wo);
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = T::neg_infinity();
                    let mut best_i = usize::MAX;
                    for ky in 0..k {
                        let iy = (oy * stride + ky) as isize - padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * stride + kx) as isize - padding as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let j = iy as usize * w + ix as usize;
                            // NaN-propagating comparison: a NaN wins so it is not silently dropped
                            if best_i == usize::MAX || src[j] > best || src[j].is_nan() {
                                best = src[j];
                                best_i = j;
                            }
                        }
                    }
                    vals.push(best);
                    idx.push((pi * h * w + best_i) as u32);
                }
            }
            (vals, idx)
        });
        let mut out = Vec::with_capacity(planes * ho * wo);
        let mut argmax = Vec::with_capacity(planes * ho * wo);
        for (v, i) in per_plane {
            out.extend_from_slice(&v);
            argmax.extend_from_slice(&i);
        }
        let rg = self.requires_grad(input);
        Ok(self.push(
            Tensor::new(with_batch(batched, batch, &[c, ho, wo]), out)?,
            rg,
            Op::MaxPool { input, argmax },
        ))
    }

    /// Softmax over every entry of the tensor jointly.
    pub fn softmax_flat(&mut self, input: Var) -> Var {
        let x = self.value(input);
        if !x.is_finite() {
            log::warn!("softmax_flat: non-finite input, output will contain NaN");
        }
        let probs = softmax(x.data());
        let out = Tensor::new(x.shape().to_vec(), probs).expect("same shape");
        let rg = self.requires_grad(input);
        self.push(out, rg, Op::SoftmaxFlat { input })
    }

    /// Per-channel expected normalized coordinates and expected activation
    /// under the channel's own softmax. `[.., C, H, W] -> [.., C, 3]`.
    pub fn spatialize(&mut self, input: Var) -> Result<Var, TensorError> {
        const OP: &str = "spatialize";
        let (batch, c, h, w, batched) = image_dims(OP, self.shape(input))?;
        if h == 0 || w == 0 {
            return Err(TensorError::shape(OP, "empty spatial grid"));
        }
        let x = self.value(input);
        if !x.is_finite() {
            log::warn!("spatialize: non-finite activations, output will contain NaN");
        }
        let x = x.data();
        let plane = h * w;
        let gx = grid_coords(w);
        let gy = grid_coords(h);
        let per_channel = par::map_range(batch * c, |ci| {
            let a = &x[ci * plane..(ci + 1) * plane];
            let p = softmax(a);
            let (mut fx, mut fy, mut fa) = (0.0f64, 0.0f64, 0.0f64);
            for y in 0..h {
                for xx in 0..w {
                    let pj = p[y * w + xx].as_f64();
                    fx += pj * gx[xx];
                    fy += pj * gy[y];
                    fa += pj * a[y * w + xx].as_f64();
                }
            }
            ([T::lit(fx), T::lit(fy), T::lit(fa)], p)
        });
        let mut out = Vec::with_capacity(batch * c * 3);
        let mut probs = Vec::with_capacity(batch * c * plane);
        for (f, p) in per_channel {
            out.extend_from_slice(&f);
            probs.extend_from_slice(&p);
        }
        let rg = self.requires_grad(input);
        Ok(self.push(
            Tensor::new(with_batch(batched, batch, &[c, 3]), out)?,
            rg,
            Op::Spatialize {
                input,
                probs,
                height: h,
                width: w,
            },
        ))
    }

    /// Sum of absolute differences; a scalar `[1]`.
    pub fn l1_loss(&mut self, pred: Var, target: Var) -> Result<Var, TensorError> {
        if self.shape(pred) != self.shape(target) {
            return Err(TensorError::shape(
                "l1_loss",
                format!("{:?} vs {:?}", self.shape(pred), self.shape(target)),
            ));
        }
        let s: f64 = self
            .value(pred)
            .data()
            .iter()
            .zip(self.value(target).data())
            .map(|(&p, &t)| (p - t).abs().as_f64())
            .sum();
        let rg = self.any_grad(&[pred, target]);
        Ok(self.push(Tensor::scalar(T::lit(s)), rg, Op::L1 { pred, target }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::shape(
                "add",
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let out = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, rg, Op::Add { a, b }))
    }

    pub fn scale(&mut self, input: Var, factor: T) -> Var {
        let x = self.value(input);
        let out = Tensor::new(
            x.shape().to_vec(),
            x.data().iter().map(|&v| v * factor).collect(),
        )
        .expect("same shape");
        let rg = self.requires_grad(input);
        self.push(out, rg, Op::Scale { input, factor })
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let out = self.value(input).clone().reshape(shape)?;
        let rg = self.requires_grad(input);
        Ok(self.push(out, rg, Op::Reshape { input }))
    }

    /// `Σ weights[i]·input[i]` as a scalar.
    pub fn weighted_sum(&mut self, input: Var, weights: Vec<T>) -> Result<Var, TensorError> {
        if weights.len() != self.value(input).numel() {
            return Err(TensorError::shape(
                "weighted_sum",
                format!(
                    "{} weights for {} elements",
                    weights.len(),
                    self.value(input).numel()
                ),
            ));
        }
        let s: f64 = self
            .value(input)
            .data()
            .iter()
            .zip(&weights)
            .map(|(&x, &w)| (x * w).as_f64())
            .sum();
        let rg = self.requires_grad(input);
        Ok(self.push(
            Tensor::scalar(T::lit(s)),
            rg,
            Op::WeightedSum { input, weights },
        ))
    }

    /// Batch normalization with batch statistics over `(B, H, W)` per channel.
    pub fn batch_norm(&mut self, input: Var, gamma: Var, beta: Var) -> Result<Var, TensorError> {
        const OP: &str = "batch_norm";
        let xs = self.shape(input).to_vec();
        let [b, c, h, w] = xs[..] else {
            return Err(TensorError::shape(
                OP,
                format!("input must be [B,C,H,W], got {:?}", xs),
            ));
        };
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(TensorError::shape(
                OP,
                format!("affine parameters must be [{}]", c),
            ));
        }
        let plane = h * w;
        let m = (b * plane) as f64;
        let x = self.value(input).data();
        let stats: Vec<(f64, f64)> = par::map_range(c, |ch| {
            let mut sum = 0.0;
            for bi in 0..b {
                let s = &x[(bi * c + ch) * plane..(bi * c + ch + 1) * plane];
                sum += s.iter().map(|v| v.as_f64()).sum::<f64>();
            }
            let mean = sum / m;
            let mut var = 0.0;
            for bi in 0..b {
                let s = &x[(bi * c + ch) * plane..(bi * c + ch + 1) * plane];
                var += s.iter().map(|v| (v.as_f64() - mean).powi(2)).sum::<f64>();
            }
            (mean, 1.0 / (var / m + BN_EPS).sqrt())
        });
        let g = self.value(gamma).data();
        let be = self.value(beta).data();
        let mut xhat = vec![T::zero(); x.len()];
        let mut out = vec![T::zero(); x.len()];
        for bi in 0..b {
            for (ch, &(mean, inv)) in stats.iter().enumerate() {
                let off = (bi * c + ch) * plane;
                for j in off..off + plane {
                    let xh = T::lit((x[j].as_f64() - mean) * inv);
                    xhat[j] = xh;
                    out[j] = g[ch] * xh + be[ch];
                }
            }
        }
        let inv_std = stats.iter().map(|&(_, inv)| T::lit(inv)).collect();
        let rg = self.any_grad(&[input, gamma, beta]);
        Ok(self.push(
            Tensor::new(xs.clone(), out)?,
            rg,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                channels: c,
                plane,
            },
        ))
    }

    /// Applies a 2×2 matrix `[[a,b],[c,d]]` to each row of a `[B,2]` input.
    pub fn row_transform(&mut self, input: Var, mats: Vec<[T; 4]>) -> Result<Var, TensorError> {
        let xs = self.shape(input).to_vec();
        if xs.len() != 2 || xs[1] != 2 || xs[0] != mats.len() {
            return Err(TensorError::shape(
                "row_transform",
                format!("input {:?} with {} matrices", xs, mats.len()),
            ));
        }
        let x = self.value(input).data();
        let mut out = Vec::with_capacity(x.len());
        for (row, m) in x.chunks(2).zip(&mats) {
            out.push(m[0] * row[0] + m[1] * row[1]);
            out.push(m[2] * row[0] + m[3] * row[1]);
        }
        let rg = self.requires_grad(input);
        Ok(self.push(Tensor::new(xs, out)?, rg, Op::RowTransform { input, mats }))
    }
}

/// Normalized pixel-center coordinates `(j + 1 - (n+1)/2) / (n/2)`, `j` 0-based.
pub(crate) fn grid_coords(n: usize) -> Vec<f64> {
    (0..n)
        .map(|j| (2.0 * j as f64 + 1.0 - n as f64) / n as f64)
        .collect()
}

pub(crate) fn softmax<T: Real>(a: &[T]) -> Vec<T> {
    let max = a.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.as_f64()));
    let exps: Vec<f64> = a.iter().map(|v| (v.as_f64() - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    if a.iter().any(|v| v.is_nan()) {
        return vec![T::nan(); a.len()];
    }
    exps.iter().map(|e| T::lit(e / sum)).collect()
}

fn acc<'g, T: Real>(
    tape: &Tape<T>,
    grads: &'g mut [Option<Vec<T>>],
    v: Var,
) -> Option<&'g mut Vec<T>> {
    if !tape.nodes[v.0].requires_grad {
        return None;
    }
    let n = tape.nodes[v.0].value.numel();
    Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); n]))
}

pub(super) fn backward<T: Real>(tape: &Tape<T>, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
    let node = &tape.nodes[i];
    match &node.op {
        Op::Leaf => {}
        Op::Conv2d {
            input,
            kernel,
            bias,
            geom,
            cols,
        } => conv_backward(tape, g, grads, *input, *kernel, *bias, geom, cols),
        Op::Linear {
            input,
            weight,
            bias,
            batch,
        } => {
            let x = tape.value(*input).data();
            let w = tape.value(*weight).data();
            let (d_out, d_in) = (tape.shape(*weight)[0], tape.shape(*weight)[1]);
            if let Some(dx) = acc(tape, grads, *input) {
                T::gemm(
                    *batch,
                    d_out,
                    d_in,
                    T::one(),
                    (g, d_out as isize, 1),
                    (w, d_in as isize, 1),
                    T::one(),
                    (dx, d_in as isize, 1),
                );
            }
            if let Some(dw) = acc(tape, grads, *weight) {
                T::gemm(
                    d_out,
                    *batch,
                    d_in,
                    T::one(),
                    (g, 1, d_out as isize),
                    (x, d_in as isize, 1),
                    T::one(),
                    (dw, d_in as isize, 1),
                );
            }
            if let Some(db) = acc(tape, grads, *bias) {
                for row in g.chunks(d_out) {
                    for (d, &v) in db.iter_mut().zip(row) {
                        *d += v;
                    }
                }
            }
        }
        Op::Relu { input } => {
            let y = node.value.data();
            if let Some(dx) = acc(tape, grads, *input) {
                for ((d, &gv), &yv) in dx.iter_mut().zip(g).zip(y) {
                    if yv > T::zero() {
                        *d += gv;
                    }
                }
            }
        }
        Op::MaxPool { input, argmax } => {
            if let Some(dx) = acc(tape, grads, *input) {
                for (&j, &gv) in argmax.iter().zip(g) {
                    dx[j as usize] += gv;
                }
            }
        }
        Op::SoftmaxFlat { input } => {
            let p = node.value.data();
            if let Some(dx) = acc(tape, grads, *input) {
                let dot: f64 = p.iter().zip(g).map(|(&pv, &gv)| (pv * gv).as_f64()).sum();
                for ((d, &pv), &gv) in dx.iter_mut().zip(p).zip(g) {
                    *d += T::lit(pv.as_f64() * (gv.as_f64() - dot));
                }
            }
        }
        Op::Spatialize {
            input,
            probs,
            height,
            width,
        } => {
            let (h, w) = (*height, *width);
            let plane = h * w;
            let a = tape.value(*input).data();
            let f = node.value.data();
            let gx = grid_coords(w);
            let gy = grid_coords(h);
            if let Some(dx) = acc(tape, grads, *input) {
                par::for_each_chunk_mut(dx, plane, |ci, d| {
                    let p = &probs[ci * plane..(ci + 1) * plane];
                    let av = &a[ci * plane..(ci + 1) * plane];
                    let (fx, fy, fa) = (
                        f[3 * ci].as_f64(),
                        f[3 * ci + 1].as_f64(),
                        f[3 * ci + 2].as_f64(),
                    );
                    let (gfx, gfy, gfa) = (
                        g[3 * ci].as_f64(),
                        g[3 * ci + 1].as_f64(),
                        g[3 * ci + 2].as_f64(),
                    );
                    for (y, &cy) in gy.iter().enumerate() {
                        for (x, &cx) in gx.iter().enumerate() {
                            let j = y * w + x;
                            let pj = p[j].as_f64();
                            let v = pj
                                * (gfx * (cx - fx)
                                    + gfy * (cy - fy)
                                    + gfa * (av[j].as_f64() - fa + 1.0));
                            d[j] += T::lit(v);
                        }
                    }
                });
            }
        }
        Op::L1 { pred, target } => {
            let p = tape.value(*pred).data();
            let t = tape.value(*target).data();
            let sign = |a: T, b: T| {
                if a > b {
                    T::one()
                } else if a < b {
                    -T::one()
                } else {
                    T::zero()
                }
            };
            if let Some(dp) = acc(tape, grads, *pred) {
                for ((d, &a), &b) in dp.iter_mut().zip(p).zip(t) {
                    *d += g[0] * sign(a, b);
                }
            }
            if let Some(dt) = acc(tape, grads, *target) {
                for ((d, &a), &b) in dt.iter_mut().zip(p).zip(t) {
                    *d -= g[0] * sign(a, b);
                }
            }
        }
        Op::Add { a, b } => {
            for v in [*a, *b] {
                if let Some(d) = acc(tape, grads, v) {
                    for (x, &gv) in d.iter_mut().zip(g) {
                        *x += gv;
                    }
                }
            }
        }
        Op::Scale { input, factor } => {
            if let Some(d) = acc(tape, grads, *input) {
                for (x, &gv) in d.iter_mut().zip(g) {
                    *x += gv * *factor;
                }
            }
        }
        Op::Reshape { input } => {
            if let Some(d) = acc(tape, grads, *input) {
                for (x, &gv) in d.iter_mut().zip(g) {
                    *x += gv;
                }
            }
        }
        Op::WeightedSum { input, weights } => {
            if let Some(d) = acc(tape, grads, *input) {
                for (x, &wv) in d.iter_mut().zip(weights) {
                    *x += g[0] * wv;
                }
            }
        }
        Op::BatchNorm {
            input,
            gamma,
            beta,
            xhat,
            inv_std,
            channels,
            plane,
        } => {
            let (c, plane) = (*channels, *plane);
            let b = xhat.len() / (c * plane);
            let m = (b * plane) as f64;
            let gam = tape.value(*gamma).data();
            // per-channel Σdy and Σdy·x̂
            let mut sdy = vec![0.0f64; c];
            let mut sdyx = vec![0.0f64; c];
            for bi in 0..b {
                for ch in 0..c {
                    let off = (bi * c + ch) * plane;
                    for j in off..off + plane {
                        sdy[ch] += g[j].as_f64();
                        sdyx[ch] += (g[j] * xhat[j]).as_f64();
                    }
                }
            }
            if let Some(dg) = acc(tape, grads, *gamma) {
                for ch in 0..c {
                    dg[ch] += T::lit(sdyx[ch]);
                }
            }
            if let Some(db) = acc(tape, grads, *beta) {
                for ch in 0..c {
                    db[ch] += T::lit(sdy[ch]);
                }
            }
            if let Some(dx) = acc(tape, grads, *input) {
                for bi in 0..b {
                    for ch in 0..c {
                        let off = (bi * c + ch) * plane;
                        let k = gam[ch].as_f64() * inv_std[ch].as_f64() / m;
                        for j in off..off + plane {
                            let v = k * (m * g[j].as_f64() - sdy[ch] - xhat[j].as_f64() * sdyx[ch]);
                            dx[j] += T::lit(v);
                        }
                    }
                }
            }
        }
        Op::RowTransform { input, mats } => {
            if let Some(d) = acc(tape, grads, *input) {
                for ((dr, gr), m) in d.chunks_mut(2).zip(g.chunks(2)).zip(mats) {
                    dr[0] += m[0] * gr[0] + m[2] * gr[1];
                    dr[1] += m[1] * gr[0] + m[3] * gr[1];
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv_backward<T: Real>(
    tape: &Tape<T>,
    g: &[T],
    grads: &mut [Option<Vec<T>>],
    input: Var,
    kernel: Var,
    bias: Option<Var>,
    geom: &ConvGeom,
    cols: &[T],
) {
    let (kl, pl) = (geom.patch_len(), geom.out_len());
    let c_out = geom.c_out;
    let in_len = geom.c_in * geom.h * geom.w;
    let out_len = c_out * pl;
    let need_dx = tape.requires_grad(input);
    let need_dk = tape.requires_grad(kernel);
    let k = tape.value(kernel).data();

    let per_sample = par::map_range(geom.batch, |b| {
        let gb = &g[b * out_len..(b + 1) * out_len];
        let dk = if need_dk {
            let mut dk = vec![T::zero(); c_out * kl];
            T::gemm(
                c_out,
                pl,
                kl,
                T::one(),
                (gb, pl as isize, 1),
                (&cols[b * kl * pl..(b + 1) * kl * pl], 1, pl as isize),
                T::zero(),
                (&mut dk, kl as isize, 1),
            );
            dk
        } else {
            Vec::new()
        };
        let dx = if need_dx {
            let mut dcols = vec![T::zero(); kl * pl];
            T::gemm(
                kl,
                c_out,
                pl,
                T::one(),
                (k, 1, kl as isize),
                (gb, pl as isize, 1),
                T::zero(),
                (&mut dcols, pl as isize, 1),
            );
            let mut dx = vec![T::zero(); in_len];
            col2im(&dcols, geom, &mut dx);
            dx
        } else {
            Vec::new()
        };
        (dk, dx)
    });

    if let Some(db) = bias.and_then(|bv| acc(tape, grads, bv)) {
        for b in 0..geom.batch {
            for (o, d) in db.iter_mut().enumerate() {
                let row = &g[b * out_len + o * pl..b * out_len + (o + 1) * pl];
                *d += T::lit(row.iter().map(|v| v.as_f64()).sum());
            }
        }
    }
    if let Some(dk) = acc(tape, grads, kernel) {
        for (part, _) in &per_sample {
            for (d, &v) in dk.iter_mut().zip(part) {
                *d += v;
            }
        }
    }
    if let Some(dx) = acc(tape, grads, input) {
        for (b, (_, part)) in per_sample.iter().enumerate() {
            for (d, &v) in dx[b * in_len..(b + 1) * in_len].iter_mut().zip(part) {
                *d += v;
            }
        }
    }
}
