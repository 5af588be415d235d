//! Raw loops over row-major buffers. Every routine accumulates into `out`.

use crate::real::Real;

/// `out[m×n] += a[m×k] · b[k×n]`
pub fn mm_nn(a: &[Real], b: &[Real], m: usize, k: usize, n: usize, out: &mut [Real]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out[m×n] += a[m×k] · b[n×k]ᵀ`
pub fn mm_nt(a: &[Real], b: &[Real], m: usize, k: usize, n: usize, out: &mut [Real]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            out[i * n + j] += dot(arow, brow);
        }
    }
}

/// `out[k×n] += a[m×k]ᵀ · b[m×n]`
pub fn mm_tn(a: &[Real], b: &[Real], m: usize, k: usize, n: usize, out: &mut [Real]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

#[inline]
pub fn dot(a: &[Real], b: &[Real]) -> Real {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Geometry of an NHWC convolution with square stride and padding.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub in_c: usize,
    pub out_c: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeometry {
    pub fn out_h(&self) -> usize {
        (self.in_h + 2 * self.pad - self.kernel_h) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.in_w + 2 * self.pad - self.kernel_w) / self.stride + 1
    }

    /// Calls `f(out_offset, in_offset, weight_offset)` for every valid tap, with
    /// offsets pointing at the first channel of the respective row.
    #[inline]
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let (oh, ow) = (self.out_h(), self.out_w());
        for b in 0..self.batch {
            for oy in 0..oh {
                for ox in 0..ow {
                    let out_off = ((b * oh + oy) * ow + ox) * self.out_c;
                    for ky in 0..self.kernel_h {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy as usize >= self.in_h {
                            continue;
                        }
                        for kx in 0..self.kernel_w {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix < 0 || ix as usize >= self.in_w {
                                continue;
                            }
                            let in_off = ((b * self.in_h + iy as usize) * self.in_w + ix as usize) * self.in_c;
                            let w_off = (ky * self.kernel_w + kx) * self.in_c;
                            f(out_off, in_off, w_off);
                        }
                    }
                }
            }
        }
    }

    fn weight_stride(&self) -> usize {
        self.kernel_h * self.kernel_w * self.in_c
    }

    /// Weight layout is `[out_c, kernel_h, kernel_w, in_c]`.
    pub fn forward(&self, x: &[Real], w: &[Real], out: &mut [Real]) {
        let (cin, cout, ws) = (self.in_c, self.out_c, self.weight_stride());
        self.for_each_tap(|o, i, wo| {
            let xrow = &x[i..i + cin];
            for co in 0..cout {
                let wrow = &w[co * ws + wo..co * ws + wo + cin];
                out[o + co] += dot(wrow, xrow);
            }
        });
    }

    pub fn backward_input(&self, dout: &[Real], w: &[Real], dx: &mut [Real]) {
        let (cin, cout, ws) = (self.in_c, self.out_c, self.weight_stride());
        self.for_each_tap(|o, i, wo| {
            let dxrow = &mut dx[i..i + cin];
            for co in 0..cout {
                let g = dout[o + co];
                if g == 0.0 {
                    continue;
                }
                let wrow = &w[co * ws + wo..co * ws + wo + cin];
                for (d, &wv) in dxrow.iter_mut().zip(wrow) {
                    *d += g * wv;
                }
            }
        });
    }

    pub fn backward_weight(&self, dout: &[Real], x: &[Real], dw: &mut [Real]) {
        let (cin, cout, ws) = (self.in_c, self.out_c, self.weight_stride());
        self.for_each_tap(|o, i, wo| {
            let xrow = &x[i..i + cin];
            for co in 0..cout {
                let g = dout[o + co];
                if g == 0.0 {
                    continue;
                }
                let dwrow = &mut dw[co * ws + wo..co * ws + wo + cin];
                for (d, &xv) in dwrow.iter_mut().zip(xrow) {
                    *d += g * xv;
                }
            }
        });
    }
}
