//! Same-padded 2-D convolution via im2col + gemm.

use super::graph::{Graph, Var};
use super::kernels::gemm;
use super::Tensor;
use crate::error::{Error, Result};

pub(crate) struct ConvCache {
    input: Var,
    filters: Var,
    bias: Var,
    cols: Vec<f64>,
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    kh: usize,
    kw: usize,
}

struct Geometry {
    c_in: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
}

impl Geometry {
    fn rows(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    fn positions(&self) -> usize {
        self.h * self.w
    }

    /// Visits every (column row, output row y, source row sy, x-range) slab.
    fn for_each_span(&self, mut f: impl FnMut(usize, usize, usize, usize, usize, usize)) {
        let (ph, pw) = (self.kh / 2, self.kw / 2);
        for ci in 0..self.c_in {
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (ci * self.kh + ky) * self.kw + kx;
                    // x + kx - pw must land in 0..w
                    let x0 = pw.saturating_sub(kx);
                    let x1 = (self.w + pw).saturating_sub(kx).min(self.w);
                    if x0 >= x1 {
                        continue;
                    }
                    for y in 0..self.h {
                        let sy = y + ky;
                        if sy < ph || sy - ph >= self.h {
                            continue;
                        }
                        f(row, ci, y, sy - ph, x0, x1);
                    }
                }
            }
        }
    }

    fn im2col(&self, input: &[f64]) -> Vec<f64> {
        let hw = self.positions();
        let pw = self.kw / 2;
        let mut cols = vec![0.0; self.rows() * hw];
        self.for_each_span(|row, ci, y, sy, x0, x1| {
            let kx = row % self.kw;
            let dst = row * hw + y * self.w;
            let src = (ci * self.h + sy) * self.w;
            let sx0 = x0 + kx - pw;
            cols[dst + x0..dst + x1].copy_from_slice(&input[src + sx0..src + sx0 + (x1 - x0)]);
        });
        cols
    }

    fn col2im(&self, cols: &[f64]) -> Vec<f64> {
        let hw = self.positions();
        let pw = self.kw / 2;
        let mut out = vec![0.0; self.c_in * hw];
        self.for_each_span(|row, ci, y, sy, x0, x1| {
            let kx = row % self.kw;
            let src = row * hw + y * self.w;
            let dst = (ci * self.h + sy) * self.w;
            let sx0 = x0 + kx - pw;
            for (o, c) in out[dst + sx0..dst + sx0 + (x1 - x0)]
                .iter_mut()
                .zip(&cols[src + x0..src + x1])
            {
                *o += c;
            }
        });
        out
    }
}

pub(crate) fn forward(
    input: &Tensor,
    filters: &Tensor,
    bias: &Tensor,
    input_var: Var,
    filters_var: Var,
    bias_var: Var,
) -> Result<(Tensor, ConvCache)> {
    let (si, sf) = (input.shape(), filters.shape());
    if si.len() != 3 || sf.len() != 4 || sf[1] != si[0] || bias.shape() != [sf[0]] {
        return Err(Error::shape("conv2d", si, sf));
    }
    let (kh, kw) = (sf[2], sf[3]);
    if kh % 2 == 0 || kw % 2 == 0 {
        return Err(Error::Config(format!(
            "same padding needs odd kernel extents, got {kh}×{kw}"
        )));
    }
    let geo = Geometry {
        c_in: si[0],
        h: si[1],
        w: si[2],
        kh,
        kw,
    };
    let c_out = sf[0];
    let hw = geo.positions();
    let cols = geo.im2col(input.data());
    let mut out = vec![0.0; c_out * hw];
    for (o, b) in out.chunks_mut(hw).zip(bias.data()) {
        o.fill(*b);
    }
    gemm(filters.data(), false, &cols, false, c_out, geo.rows(), hw, &mut out, true);
    let t = Tensor::from_parts(vec![c_out, geo.h, geo.w], out);
    Ok((
        t,
        ConvCache {
            input: input_var,
            filters: filters_var,
            bias: bias_var,
            cols,
            c_in: geo.c_in,
            h: geo.h,
            w: geo.w,
            c_out,
            kh,
            kw,
        },
    ))
}

pub(crate) fn backward(c: &ConvCache, graph: &Graph, g: &Tensor) -> Vec<(Var, Tensor)> {
    let geo = Geometry {
        c_in: c.c_in,
        h: c.h,
        w: c.w,
        kh: c.kh,
        kw: c.kw,
    };
    let (k, hw) = (geo.rows(), geo.positions());
    let gd = g.data();
    let mut out = Vec::with_capacity(3);
    if graph.requires_grad(c.filters) {
        let mut df = vec![0.0; c.c_out * k];
        gemm(gd, false, &c.cols, true, c.c_out, hw, k, &mut df, false);
        out.push((c.filters, Tensor::from_parts(graph.shape(c.filters).to_vec(), df)));
    }
    if graph.requires_grad(c.bias) {
        let db = gd.chunks(hw).map(|r| r.iter().sum()).collect();
        out.push((c.bias, Tensor::from_parts(vec![c.c_out], db)));
    }
    if graph.requires_grad(c.input) {
        let mut dcols = vec![0.0; k * hw];
        gemm(
            graph.value(c.filters).data(),
            true,
            gd,
            false,
            k,
            c.c_out,
            hw,
            &mut dcols,
            false,
        );
        let di = geo.col2im(&dcols);
        out.push((c.input, Tensor::from_parts(vec![c.c_in, c.h, c.w], di)));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(input: &Tensor, filters: &Tensor, bias: &[f64]) -> Vec<f64> {
        let (ci, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
        let (co, kh, kw) = (filters.shape()[0], filters.shape()[2], filters.shape()[3]);
        let (ph, pw) = ((kh / 2) as isize, (kw / 2) as isize);
        let mut out = vec![0.0; co * h * w];
        for o in 0..co {
            for y in 0..h {
                for x in 0..w {
                    let mut s = bias[o];
                    for c in 0..ci {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let sy = y as isize + ky as isize - ph;
                                let sx = x as isize + kx as isize - pw;
                                if sy >= 0 && sy < h as isize && sx >= 0 && sx < w as isize {
                                    s += filters.at(&[o, c, ky, kx])
                                        * input.at(&[c, sy as usize, sx as usize]);
                                }
                            }
                        }
                    }
                    out[(o * h + y) * w + x] = s;
                }
            }
        }
        out
    }

    fn run(input: &Tensor, filters: &Tensor, bias: &[f64]) -> Result<Tensor> {
        let mut g = Graph::new();
        let i = g.constant(input.clone());
        let f = g.constant(filters.clone());
        let b = g.constant(Tensor::vector(bias.to_vec()));
        let o = g.conv2d(i, f, b)?;
        Ok(g.value(o).clone())
    }

    #[test]
    fn delta_kernel_is_identity() {
        let input = Tensor::new(&[1, 3, 4], (0..12).map(|x| x as f64 * 0.5 - 2.0).collect()).unwrap();
        let mut f = Tensor::zeros(&[1, 1, 3, 3]);
        f.set(&[0, 0, 1, 1], 1.0);
        let out = run(&input, &f, &[0.0]).unwrap();
        assert_eq!(out.data(), input.data());
    }

    #[test]
    fn ones_kernel_on_constant_input() {
        let c = 1.25;
        let input = Tensor::full(&[1, 5, 5], c);
        let f = Tensor::full(&[1, 1, 3, 3], 1.0);
        let out = run(&input, &f, &[0.0]).unwrap();
        for y in 1..4 {
            for x in 1..4 {
                assert_eq!(out.at(&[0, y, x]), 9.0 * c);
            }
        }
        // corners only see four cells
        assert_eq!(out.at(&[0, 0, 0]), 4.0 * c);
    }

    #[test]
    fn zero_input_gives_bias() {
        let out = run(&Tensor::zeros(&[2, 3, 3]), &Tensor::full(&[2, 2, 3, 1], 0.7), &[0.5, -1.0]).unwrap();
        assert!(out.data()[..9].iter().all(|&x| x == 0.5));
        assert!(out.data()[9..].iter().all(|&x| x == -1.0));
    }

    #[test]
    fn even_kernel_rejected() {
        let err = run(&Tensor::zeros(&[1, 3, 3]), &Tensor::zeros(&[1, 1, 2, 3]), &[0.0]).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn matches_naive_on_irregular_shapes() {
        let input = Tensor::new(&[2, 4, 7], (0..56).map(|i| ((i * 37 % 11) as f64) - 5.0).collect()).unwrap();
        let filters = Tensor::new(&[3, 2, 5, 3], (0..90).map(|i| ((i * 13 % 7) as f64) * 0.1 - 0.3).collect()).unwrap();
        let bias = [0.1, -0.2, 0.3];
        let got = run(&input, &filters, &bias).unwrap();
        for (a, b) in got.data().iter().zip(naive(&input, &filters, &bias)) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
