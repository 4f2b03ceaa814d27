//! Forward and backward kernels for the individual layer kinds.
//!
//! Activations are channels-last: spatial tensors are `(batch, h, w, c)`,
//! flat ones `(batch, n)`. Convolution kernels are `(f, f, in, out)` and
//! dense weights `(in, out)`.

/// Geometry of a valid-padding convolution.
#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub h: usize,
    pub w: usize,
    pub cin: usize,
    pub cout: usize,
    pub f: usize,
    pub stride: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.h - self.f) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w - self.f) / self.stride + 1
    }
}

pub(crate) fn conv2d_forward(x: &[f64], kernel: &[f64], batch: usize, g: ConvGeom) -> Vec<f64> {
    let (ho, wo) = (g.out_h(), g.out_w());
    let mut out = vec![0.0; batch * ho * wo * g.cout];
    for b in 0..batch {
        for oy in 0..ho {
            for ox in 0..wo {
                let ob = ((b * ho + oy) * wo + ox) * g.cout;
                let acc = &mut out[ob..ob + g.cout];
                for f1 in 0..g.f {
                    for f2 in 0..g.f {
                        let ib = ((b * g.h + oy * g.stride + f1) * g.w + ox * g.stride + f2) * g.cin;
                        let kb = (f1 * g.f + f2) * g.cin * g.cout;
                        for i in 0..g.cin {
                            let xv = x[ib + i];
                            let krow = &kernel[kb + i * g.cout..kb + (i + 1) * g.cout];
                            for (a, &k) in acc.iter_mut().zip(krow) {
                                *a += xv * k;
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Returns `(dkernel, dx)`.
pub(crate) fn conv2d_backward(
    x: &[f64],
    kernel: &[f64],
    dout: &[f64],
    batch: usize,
    g: ConvGeom,
) -> (Vec<f64>, Vec<f64>) {
    let (ho, wo) = (g.out_h(), g.out_w());
    let mut dk = vec![0.0; kernel.len()];
    let mut dx = vec![0.0; x.len()];
    for b in 0..batch {
        for oy in 0..ho {
            for ox in 0..wo {
                let ob = ((b * ho + oy) * wo + ox) * g.cout;
                let d = &dout[ob..ob + g.cout];
                for f1 in 0..g.f {
                    for f2 in 0..g.f {
                        let ib = ((b * g.h + oy * g.stride + f1) * g.w + ox * g.stride + f2) * g.cin;
                        let kb = (f1 * g.f + f2) * g.cin * g.cout;
                        for i in 0..g.cin {
                            let xv = x[ib + i];
                            let r = kb + i * g.cout;
                            let krow = &kernel[r..r + g.cout];
                            let dkrow = &mut dk[r..r + g.cout];
                            let mut s = 0.0;
                            for o in 0..g.cout {
                                dkrow[o] += xv * d[o];
                                s += krow[o] * d[o];
                            }
                            dx[ib + i] += s;
                        }
                    }
                }
            }
        }
    }
    (dk, dx)
}

pub(crate) fn dense_forward(x: &[f64], w: &[f64], batch: usize, nin: usize, nout: usize) -> Vec<f64> {
    let mut out = vec![0.0; batch * nout];
    for b in 0..batch {
        let acc = &mut out[b * nout..(b + 1) * nout];
        for i in 0..nin {
            let xv = x[b * nin + i];
            for (a, &wv) in acc.iter_mut().zip(&w[i * nout..(i + 1) * nout]) {
                *a += xv * wv;
            }
        }
    }
    out
}

pub(crate) fn dense_backward(
    x: &[f64],
    w: &[f64],
    dout: &[f64],
    batch: usize,
    nin: usize,
    nout: usize,
) -> (Vec<f64>, Vec<f64>) {
    let mut dw = vec![0.0; w.len()];
    let mut dx = vec![0.0; x.len()];
    for b in 0..batch {
        let d = &dout[b * nout..(b + 1) * nout];
        for i in 0..nin {
            let xv = x[b * nin + i];
            let wrow = &w[i * nout..(i + 1) * nout];
            let dwrow = &mut dw[i * nout..(i + 1) * nout];
            let mut s = 0.0;
            for o in 0..nout {
                dwrow[o] += xv * d[o];
                s += wrow[o] * d[o];
            }
            dx[b * nin + i] = s;
        }
    }
    (dw, dx)
}

pub(crate) fn relu_forward(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect()
}

pub(crate) fn relu_backward(x: &[f64], dout: &[f64]) -> Vec<f64> {
    x.iter()
        .zip(dout)
        .map(|(&v, &d)| if v > 0.0 { d } else { 0.0 })
        .collect()
}

/// Non-overlapping `size x size` max pooling. Returns the pooled values and,
/// for every output element, the flat input index that won (first index on
/// ties).
pub(crate) fn maxpool_forward(
    x: &[f64],
    batch: usize,
    h: usize,
    w: usize,
    c: usize,
    size: usize,
) -> (Vec<f64>, Vec<usize>) {
    let (ho, wo) = (h / size, w / size);
    let mut out = Vec::with_capacity(batch * ho * wo * c);
    let mut arg = Vec::with_capacity(batch * ho * wo * c);
    for b in 0..batch {
        for oy in 0..ho {
            for ox in 0..wo {
                for ch in 0..c {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_idx = usize::MAX;
                    for dy in 0..size {
                        for dx in 0..size {
                            let idx = ((b * h + oy * size + dy) * w + ox * size + dx) * c + ch;
                            if best_idx == usize::MAX || x[idx] > best {
                                best = x[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    out.push(best);
                    arg.push(best_idx);
                }
            }
        }
    }
    (out, arg)
}

pub(crate) fn maxpool_backward(input_len: usize, argmax: &[usize], dout: &[f64]) -> Vec<f64> {
    let mut dx = vec![0.0; input_len];
    for (&i, &d) in argmax.iter().zip(dout) {
        dx[i] += d;
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn maxpool_ties_route_to_first_index() {
        let x = [1.0, 1.0, 1.0, 1.0];
        let (out, arg) = maxpool_forward(&x, 1, 2, 2, 1, 2);
        assert_eq!(out, vec![1.0]);
        assert_eq!(arg, vec![0]);
        let dx = maxpool_backward(4, &arg, &[3.0]);
        assert_eq!(dx, vec![3.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn relu_gradient_is_masked() {
        let x = [-1.0, 0.0, 2.0];
        assert_eq!(relu_forward(&x), vec![0.0, 0.0, 2.0]);
        assert_eq!(relu_backward(&x, &[5.0, 5.0, 5.0]), vec![0.0, 0.0, 5.0]);
    }

    #[test]
    fn conv_output_geometry() {
        let g = ConvGeom { h: 8, w: 7, cin: 1, cout: 1, f: 3, stride: 2 };
        assert_eq!((g.out_h(), g.out_w()), (3, 3));
    }
}
