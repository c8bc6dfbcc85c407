//! 2-D and 3-D cross-correlation via im2col and a single gemm per sample.
//!
//! A 2-D convolution is the 3-D kernel with depth 1, so both share one code path.

use super::{gemm, MatRef, Real, Tensor};
use crate::error::{Error, Result};

/// Kernel, stride and zero-padding per spatial axis, ordered (depth, height, width).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub padding: [usize; 3],
}

impl ConvGeometry {
    pub fn new_2d(kernel: usize, stride: usize, padding: usize) -> Self {
        Self {
            kernel: [1, kernel, kernel],
            stride: [1, stride, stride],
            padding: [0, padding, padding],
        }
    }

    pub fn new_3d(kernel: [usize; 3], stride: [usize; 3], padding: [usize; 3]) -> Self {
        Self {
            kernel,
            stride,
            padding,
        }
    }

    /// Output extent per spatial axis, `floor((n + 2p − k)/s) + 1`, or `None` if degenerate.
    pub fn output_dims(&self, input: [usize; 3]) -> Option<[usize; 3]> {
        let mut out = [0; 3];
        for a in 0..3 {
            let padded = input[a] + 2 * self.padding[a];
            if padded < self.kernel[a] || self.stride[a] == 0 {
                return None;
            }
            out[a] = (padded - self.kernel[a]) / self.stride[a] + 1;
        }
        Some(out)
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == [1, 1, 1] && self.stride == [1, 1, 1] && self.padding == [0, 0, 0]
    }

    fn taps(&self) -> usize {
        self.kernel.iter().product()
    }
}

#[derive(Clone, Copy)]
struct Plan {
    geom: ConvGeometry,
    batch: usize,
    cin: usize,
    cout: usize,
    input: [usize; 3],
    output: [usize; 3],
}

impl Plan {
    fn k(&self) -> usize {
        self.cin * self.geom.taps()
    }
    fn p(&self) -> usize {
        self.output.iter().product()
    }
    fn in_len(&self) -> usize {
        self.cin * self.input.iter().product::<usize>()
    }

    /// Visits every (cols row, output position, input offset or None for padding).
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, Option<usize>)) {
        let [kd, kh, kw] = self.geom.kernel;
        let [sd, sh, sw] = self.geom.stride;
        let [pd, ph, pw] = self.geom.padding;
        let [id, ih, iw] = self.input;
        let [od, oh, ow] = self.output;
        let p = self.p();
        for ci in 0..self.cin {
            for kz in 0..kd {
                for ky in 0..kh {
                    for kx in 0..kw {
                        let row = ((ci * kd + kz) * kh + ky) * kw + kx;
                        let base = row * p;
                        for oz in 0..od {
                            let iz = (oz * sd + kz) as isize - pd as isize;
                            let z_ok = iz >= 0 && (iz as usize) < id;
                            for oy in 0..oh {
                                let iy = (oy * sh + ky) as isize - ph as isize;
                                let zy_ok = z_ok && iy >= 0 && (iy as usize) < ih;
                                let out_row = base + (oz * oh + oy) * ow;
                                if !zy_ok {
                                    for ox in 0..ow {
                                        f(row, out_row + ox, None);
                                    }
                                    continue;
                                }
                                let src_row = ((ci * id + iz as usize) * ih + iy as usize) * iw;
                                for ox in 0..ow {
                                    let ix = (ox * sw + kx) as isize - pw as isize;
                                    let src = (ix >= 0 && (ix as usize) < iw)
                                        .then(|| src_row + ix as usize);
                                    f(row, out_row + ox, src);
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    fn im2col<T: Real>(&self, x: &[T], cols: &mut [T]) {
        self.for_each_tap(|_, dst, src| {
            cols[dst] = match src {
                Some(s) => x[s],
                None => T::zero(),
            }
        });
    }

    fn col2im<T: Real>(&self, cols: &[T], gx: &mut [T]) {
        self.for_each_tap(|_, dst, src| {
            if let Some(s) = src {
                gx[s] += cols[dst];
            }
        });
    }
}

/// Normalizes `[N,C,H,W]` / `[N,C,D,H,W]` to (batch, channels, [D,H,W]).
fn spatial_of(shape: &[usize]) -> Option<(usize, usize, [usize; 3])> {
    match *shape {
        [n, c, h, w] => Some((n, c, [1, h, w])),
        [n, c, d, h, w] => Some((n, c, [d, h, w])),
        _ => None,
    }
}

impl<T: Real> Tensor<T> {
    /// Cross-correlation of `self` (`[N,Cin,H,W]` or `[N,Cin,D,H,W]`) with
    /// `weight` (`[Cout,Cin,kh,kw]` or `[Cout,Cin,kd,kh,kw]`) plus optional bias `[Cout]`.
    pub fn conv(&self, weight: &Tensor<T>, bias: Option<&Tensor<T>>, geom: ConvGeometry) -> Result<Self> {
        let (batch, cin, input) = spatial_of(self.shape())
            .ok_or_else(|| Error::shape("conv", format!("input {:?} is not 4-D or 5-D", self.shape())))?;
        let two_d = self.ndim() == 4;
        let (cout, wcin, wk) = match (weight.shape(), two_d) {
            (&[co, ci, kh, kw], true) => (co, ci, [1, kh, kw]),
            (&[co, ci, kd, kh, kw], false) => (co, ci, [kd, kh, kw]),
            (s, _) => {
                return Err(Error::shape(
                    "conv",
                    format!("weight {s:?} does not match input rank {}", self.ndim()),
                ))
            }
        };
        if wcin != cin {
            return Err(Error::shape("conv", format!("input has {cin} channels, weight expects {wcin}")));
        }
        if wk != geom.kernel {
            return Err(Error::shape("conv", format!("weight kernel {wk:?} vs geometry {:?}", geom.kernel)));
        }
        if let Some(b) = bias {
            if b.shape() != [cout] {
                return Err(Error::shape("conv", format!("bias {:?} for {cout} outputs", b.shape())));
            }
        }
        let output = geom.output_dims(input).ok_or_else(|| {
            Error::shape("conv", format!("input {input:?} too small for kernel {:?}", geom.kernel))
        })?;
        let plan = Plan {
            geom,
            batch,
            cin,
            cout,
            input,
            output,
        };
        let (k, p) = (plan.k(), plan.p());
        let in_len = plan.in_len();
        let x = self.values();
        let w = weight.values();
        let mut out = vec![T::zero(); batch * cout * p];
        let mut cols = if geom.is_pointwise() { Vec::new() } else { vec![T::zero(); k * p] };
        for n in 0..batch {
            let xn = &x[n * in_len..(n + 1) * in_len];
            let colsn: &[T] = if geom.is_pointwise() {
                xn
            } else {
                plan.im2col(xn, &mut cols);
                &cols
            };
            let on = &mut out[n * cout * p..(n + 1) * cout * p];
            gemm(MatRef::new(w, cout, k), MatRef::new(colsn, k, p), on, false);
            if let Some(b) = bias {
                for (co, row) in on.chunks_mut(p).enumerate() {
                    let bv = b.values()[co];
                    row.iter_mut().for_each(|v| *v += bv);
                }
            }
        }

        let mut shape = vec![batch, cout];
        if two_d {
            shape.extend_from_slice(&output[1..]);
        } else {
            shape.extend_from_slice(&output);
        }
        let mut parents = vec![self.clone(), weight.clone()];
        if let Some(b) = bias {
            parents.push(b.clone());
        }
        Ok(Tensor::from_op(
            if two_d { "conv2d" } else { "conv3d" },
            shape,
            out,
            parents,
            Box::new(move |_, g, parents| conv_backward(&plan, g, parents)),
        ))
    }
}

fn conv_backward<T: Real>(plan: &Plan, g: &[T], parents: &[Tensor<T>]) -> Vec<Option<Vec<T>>> {
    let (x, w) = (&parents[0], &parents[1]);
    let bias = parents.get(2);
    let (k, p, cout) = (plan.k(), plan.p(), plan.cout);
    let in_len = plan.in_len();
    let pointwise = plan.geom.is_pointwise();

    let mut gx = x.requires_grad().then(|| vec![T::zero(); plan.batch * in_len]);
    let mut gw = w.requires_grad().then(|| vec![T::zero(); cout * k]);
    let gb = bias.filter(|b| b.requires_grad()).map(|_| {
        let mut gb = vec![T::zero(); cout];
        for gn in g.chunks(cout * p) {
            for (co, row) in gn.chunks(p).enumerate() {
                gb[co] += row.iter().copied().sum();
            }
        }
        gb
    });

    let mut cols = if pointwise || gw.is_none() { Vec::new() } else { vec![T::zero(); k * p] };
    let mut gcols = if gx.is_some() && !pointwise { vec![T::zero(); k * p] } else { Vec::new() };
    for n in 0..plan.batch {
        let gn = &g[n * cout * p..(n + 1) * cout * p];
        let xn = &x.values()[n * in_len..(n + 1) * in_len];
        if let Some(gw) = gw.as_mut() {
            let colsn: &[T] = if pointwise {
                xn
            } else {
                plan.im2col(xn, &mut cols);
                &cols
            };
            gemm(MatRef::new(gn, cout, p), MatRef::transposed(colsn, p, k), gw, true);
        }
        if let Some(gx) = gx.as_mut() {
            let gxn = &mut gx[n * in_len..(n + 1) * in_len];
            if pointwise {
                gemm(MatRef::transposed(w.values(), k, cout), MatRef::new(gn, cout, p), gxn, false);
            } else {
                gemm(MatRef::transposed(w.values(), k, cout), MatRef::new(gn, cout, p), &mut gcols, false);
                plan.col2im(&gcols, gxn);
            }
        }
    }
    let mut grads = vec![gx, gw];
    if bias.is_some() {
        grads.push(gb);
    }
    grads
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct 6-loop convolution used as an independent reference.
    fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, geom: ConvGeometry) -> Vec<f64> {
        let (n, cin, [id, ih, iw]) = spatial_of(x.shape()).unwrap();
        let cout = w.shape()[0];
        let [od, oh, ow] = geom.output_dims([id, ih, iw]).unwrap();
        let [kd, kh, kw] = geom.kernel;
        let mut out = vec![0.0; n * cout * od * oh * ow];
        for b in 0..n {
            for co in 0..cout {
                for oz in 0..od {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let mut acc = 0.0;
                            for ci in 0..cin {
                                for kz in 0..kd {
                                    for ky in 0..kh {
                                        for kx in 0..kw {
                                            let iz = (oz * geom.stride[0] + kz) as isize - geom.padding[0] as isize;
                                            let iy = (oy * geom.stride[1] + ky) as isize - geom.padding[1] as isize;
                                            let ix = (ox * geom.stride[2] + kx) as isize - geom.padding[2] as isize;
                                            if iz < 0 || iy < 0 || ix < 0 || iz >= id as isize || iy >= ih as isize || ix >= iw as isize {
                                                continue;
                                            }
                                            let xi = (((b * cin + ci) * id + iz as usize) * ih + iy as usize) * iw + ix as usize;
                                            let wi = (((co * cin + ci) * kd + kz) * kh + ky) * kw + kx;
                                            acc += x.values()[xi] * w.values()[wi];
                                        }
                                    }
                                }
                            }
                            out[(((b * cout + co) * od + oz) * oh + oy) * ow + ox] = acc;
                        }
                    }
                }
            }
        }
        out
    }

    fn pseudo_random(n: usize, seed: u64) -> Vec<f64> {
        let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        (0..n)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
            })
            .collect()
    }

    #[test]
    fn matches_naive_reference_3d() {
        let geom = ConvGeometry::new_3d([3, 3, 2], [2, 1, 2], [1, 1, 0]);
        let x = Tensor::from_f64(&[2, 3, 5, 6, 7], &pseudo_random(2 * 3 * 5 * 6 * 7, 1)).unwrap();
        let w = Tensor::from_f64(&[4, 3, 3, 3, 2], &pseudo_random(4 * 3 * 18, 2)).unwrap();
        let got = x.conv(&w, None, geom).unwrap();
        let want = naive_conv(&x, &w, geom);
        assert_eq!(got.shape(), &[2, 4, 3, 6, 3]);
        for (a, b) in got.values().iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn pointwise_path_matches_naive() {
        let geom = ConvGeometry::new_2d(1, 1, 0);
        let x = Tensor::from_f64(&[2, 3, 4, 5], &pseudo_random(120, 3)).unwrap();
        let w = Tensor::from_f64(&[6, 3, 1, 1], &pseudo_random(18, 4)).unwrap();
        let got = x.conv(&w, None, geom).unwrap();
        let want = naive_conv(&x, &w, geom);
        for (a, b) in got.values().iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn degenerate_and_mismatched_inputs_fail() {
        let x = Tensor::<f64>::ones(&[1, 2, 2, 2]);
        let w = Tensor::<f64>::ones(&[1, 2, 5, 5]);
        assert!(x.conv(&w, None, ConvGeometry::new_2d(5, 1, 0)).is_err());
        let w = Tensor::<f64>::ones(&[1, 3, 1, 1]);
        assert!(x.conv(&w, None, ConvGeometry::new_2d(1, 1, 0)).is_err());
    }
}
