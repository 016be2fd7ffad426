//! 2-D convolution and transposed convolution over `(channel, row, col)`
//! tensors, expressed through a single tap enumeration shared by the forward
//! pass, the backward pass and the lowering to a sparse affine map.

use crate::linalg::SparseMatrix;

#[derive(Debug, Clone, PartialEq)]
pub struct Conv {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_size: usize,
    pub stride: usize,
    pub padding: usize,
    /// Conv: `(out, in, k, k)`. Transposed conv: `(in, out, k, k)`.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Input and output spatial sizes of one convolution application.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Geometry {
    pub in_h: usize,
    pub in_w: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl Conv {
    pub fn weight_len(&self) -> usize {
        self.in_channels * self.out_channels * self.kernel_size * self.kernel_size
    }

    /// Output size of a forward convolution, `None` if the kernel does not fit.
    pub fn conv_output(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        let (k, s, p) = (self.kernel_size, self.stride, self.padding);
        let oh = (h + 2 * p).checked_sub(k)? / s + 1;
        let ow = (w + 2 * p).checked_sub(k)? / s + 1;
        Some((oh, ow))
    }

    /// Output size of a transposed convolution.
    pub fn transpose_output(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        let (k, s, p) = (self.kernel_size, self.stride, self.padding);
        let oh = ((h.checked_sub(1)?) * s + k).checked_sub(2 * p)?;
        let ow = ((w.checked_sub(1)?) * s + k).checked_sub(2 * p)?;
        (oh > 0 && ow > 0).then_some((oh, ow))
    }

    /// Calls `f(input_index, output_index, weight_index)` for every tap.
    #[inline]
    pub fn for_each_tap(&self, g: Geometry, transposed: bool, mut f: impl FnMut(usize, usize, usize)) {
        let (k, s) = (self.kernel_size, self.stride);
        let p = self.padding as isize;
        let (cin, cout) = (self.in_channels, self.out_channels);
        if !transposed {
            for co in 0..cout {
                for oy in 0..g.out_h {
                    for ox in 0..g.out_w {
                        let o = (co * g.out_h + oy) * g.out_w + ox;
                        for ci in 0..cin {
                            for ky in 0..k {
                                let iy = (oy * s + ky) as isize - p;
                                if iy < 0 || iy >= g.in_h as isize {
                                    continue;
                                }
                                for kx in 0..k {
                                    let ix = (ox * s + kx) as isize - p;
                                    if ix < 0 || ix >= g.in_w as isize {
                                        continue;
                                    }
                                    let i = (ci * g.in_h + iy as usize) * g.in_w + ix as usize;
                                    f(i, o, ((co * cin + ci) * k + ky) * k + kx);
                                }
                            }
                        }
                    }
                }
            }
        } else {
            for ci in 0..cin {
                for iy in 0..g.in_h {
                    for ix in 0..g.in_w {
                        let i = (ci * g.in_h + iy) * g.in_w + ix;
                        for co in 0..cout {
                            for ky in 0..k {
                                let oy = (iy * s + ky) as isize - p;
                                if oy < 0 || oy >= g.out_h as isize {
                                    continue;
                                }
                                for kx in 0..k {
                                    let ox = (ix * s + kx) as isize - p;
                                    if ox < 0 || ox >= g.out_w as isize {
                                        continue;
                                    }
                                    let o = (co * g.out_h + oy as usize) * g.out_w + ox as usize;
                                    f(i, o, ((ci * cout + co) * k + ky) * k + kx);
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    pub fn forward(&self, g: Geometry, transposed: bool, x: &[f64]) -> Vec<f64> {
        let plane = g.out_h * g.out_w;
        let mut out = vec![0.0; self.out_channels * plane];
        for (co, chunk) in out.chunks_mut(plane).enumerate() {
            chunk.fill(self.bias[co]);
        }
        let w = &self.weight;
        self.for_each_tap(g, transposed, |i, o, k| out[o] += w[k] * x[i]);
        out
    }

    /// Returns the input gradient; accumulates weight and bias gradients
    /// when `param_grads` is given.
    pub fn backward(
        &self,
        g: Geometry,
        transposed: bool,
        x: &[f64],
        grad_out: &[f64],
        param_grads: Option<(&mut [f64], &mut [f64])>,
    ) -> Vec<f64> {
        let mut gx = vec![0.0; x.len()];
        let w = &self.weight;
        match param_grads {
            Some((gw, gb)) => {
                let plane = g.out_h * g.out_w;
                for (co, chunk) in grad_out.chunks(plane).enumerate() {
                    gb[co] += chunk.iter().sum::<f64>();
                }
                self.for_each_tap(g, transposed, |i, o, k| {
                    gx[i] += w[k] * grad_out[o];
                    gw[k] += x[i] * grad_out[o];
                });
            }
            None => self.for_each_tap(g, transposed, |i, o, k| gx[i] += w[k] * grad_out[o]),
        }
        gx
    }

    /// The layer as `y = A x + b`.
    pub fn lower(&self, g: Geometry, transposed: bool) -> (SparseMatrix, Vec<f64>) {
        let n_in = self.in_channels * g.in_h * g.in_w;
        let plane = g.out_h * g.out_w;
        let n_out = self.out_channels * plane;
        let mut triplets = Vec::new();
        self.for_each_tap(g, transposed, |i, o, k| triplets.push((o, i, self.weight[k])));
        let bias = (0..n_out).map(|o| self.bias[o / plane]).collect();
        (SparseMatrix::from_triplets(n_out, n_in, triplets), bias)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn transposed_ones_match_scatter_add_oracle() {
        // 1 -> 1 channel, all-ones 4x4 kernel, stride 2, padding 1, 2x2 input of ones.
        let c = Conv {
            in_channels: 1,
            out_channels: 1,
            kernel_size: 4,
            stride: 2,
            padding: 1,
            weight: vec![1.0; 16],
            bias: vec![0.0],
        };
        let (oh, ow) = c.transpose_output(2, 2).unwrap();
        assert_eq!((oh, ow), (4, 4));
        let out = c.forward(Geometry { in_h: 2, in_w: 2, out_h: oh, out_w: ow }, true, &[1.0; 4]);
        // Oracle: scatter each input's 4x4 footprint into a 6x6 canvas, then crop the padding.
        let mut canvas = [[0.0f64; 6]; 6];
        for iy in 0..2 {
            for ix in 0..2 {
                for ky in 0..4 {
                    for kx in 0..4 {
                        canvas[iy * 2 + ky][ix * 2 + kx] += 1.0;
                    }
                }
            }
        }
        for y in 0..4 {
            for x in 0..4 {
                assert_eq!(out[y * 4 + x], canvas[y + 1][x + 1]);
            }
        }
        assert_eq!(out, vec![1.0, 2.0, 2.0, 1.0, 2.0, 4.0, 4.0, 2.0, 2.0, 4.0, 4.0, 2.0, 1.0, 2.0, 2.0, 1.0]);
    }

    #[test]
    fn conv_output_sizes() {
        let c = Conv {
            in_channels: 1,
            out_channels: 4,
            kernel_size: 4,
            stride: 2,
            padding: 1,
            weight: vec![0.0; 16 * 4],
            bias: vec![0.0; 4],
        };
        assert_eq!(c.conv_output(32, 32), Some((16, 16)));
        assert_eq!(c.conv_output(16, 16), Some((8, 8)));
        assert_eq!(c.transpose_output(4, 4), Some((8, 8)));
        assert_eq!(c.conv_output(1, 1), None);
    }

    #[test]
    fn lowering_matches_forward() {
        let c = Conv {
            in_channels: 2,
            out_channels: 3,
            kernel_size: 3,
            stride: 2,
            padding: 1,
            weight: (0..54).map(|i| (i as f64 * 0.37).sin()).collect(),
            bias: vec![0.1, -0.2, 0.3],
        };
        let x: Vec<f64> = (0..75).map(|i| (i as f64 * 0.11).cos()).collect();
        for transposed in [false, true] {
            let (oh, ow) = if transposed { c.transpose_output(5, 5) } else { c.conv_output(5, 5) }.unwrap();
            let (ci, co) = if transposed { (3, 2) } else { (2, 3) };
            let cc = Conv { in_channels: ci, out_channels: co, bias: vec![0.1, -0.2, 0.3][..co].to_vec(), ..c.clone() };
            let xx = &x[..ci * 25];
            let g = Geometry { in_h: 5, in_w: 5, out_h: oh, out_w: ow };
            let direct = cc.forward(g, transposed, xx);
            let (a, b) = cc.lower(g, transposed);
            let lowered: Vec<f64> = a.mul_vec(xx).iter().zip(&b).map(|(v, b)| v + b).collect();
            for (p, q) in direct.iter().zip(&lowered) {
                assert!((p - q).abs() < 1e-12);
            }
        }
    }
}
