//! Geometry and lowering helpers for 2-D convolution over `[C, H, W]` maps.

/// Shape bookkeeping for a square-kernel, same-padded convolution.
///
/// Padding is `kernel / 2` on every side, so for odd kernels the nominal
/// output extent along an axis of length `n` is `ceil(n / stride)`. The
/// output row count may be set explicitly; rows read outside the input are
/// zero.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub out_h: usize,
    pub out_w: usize,
}

pub fn same_out(n: usize, stride: usize) -> usize {
    n.div_ceil(stride)
}

impl ConvGeom {
    pub fn pad(&self) -> usize {
        self.kernel / 2
    }

    pub fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    pub fn out_pixels(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Lower the input into a `[Cin·k·k, Ho·Wo]` column matrix.
    pub fn im2col(&self, x: &[f64]) -> Vec<f64> {
        let k = self.kernel;
        let pad = self.pad() as isize;
        let s = self.stride as isize;
        let npix = self.out_pixels();
        let mut cols = vec![0.0; self.patch_len() * npix];
        for ci in 0..self.in_channels {
            let plane = &x[ci * self.in_h * self.in_w..(ci + 1) * self.in_h * self.in_w];
            for ki in 0..k {
                for kj in 0..k {
                    let row = (ci * k + ki) * k + kj;
                    let dst = &mut cols[row * npix..(row + 1) * npix];
                    for oh in 0..self.out_h {
                        let ih = oh as isize * s + ki as isize - pad;
                        if ih < 0 || ih >= self.in_h as isize {
                            continue;
                        }
                        let src = &plane[ih as usize * self.in_w..(ih as usize + 1) * self.in_w];
                        let drow = &mut dst[oh * self.out_w..(oh + 1) * self.out_w];
                        for (ow, d) in drow.iter_mut().enumerate() {
                            let iw = ow as isize * s + kj as isize - pad;
                            if iw >= 0 && iw < self.in_w as isize {
                                *d = src[iw as usize];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    /// Scatter-add a column-matrix gradient back onto the input layout.
    pub fn col2im(&self, cols: &[f64], dx: &mut [f64]) {
        let k = self.kernel;
        let pad = self.pad() as isize;
        let s = self.stride as isize;
        let npix = self.out_pixels();
        for ci in 0..self.in_channels {
            let plane = &mut dx[ci * self.in_h * self.in_w..(ci + 1) * self.in_h * self.in_w];
            for ki in 0..k {
                for kj in 0..k {
                    let row = (ci * k + ki) * k + kj;
                    let src = &cols[row * npix..(row + 1) * npix];
                    for oh in 0..self.out_h {
                        let ih = oh as isize * s + ki as isize - pad;
                        if ih < 0 || ih >= self.in_h as isize {
                            continue;
                        }
                        let drow = &mut plane[ih as usize * self.in_w..(ih as usize + 1) * self.in_w];
                        let srow = &src[oh * self.out_w..(oh + 1) * self.out_w];
                        for (ow, v) in srow.iter().enumerate() {
                            let iw = ow as isize * s + kj as isize - pad;
                            if iw >= 0 && iw < self.in_w as isize {
                                drow[iw as usize] += v;
                            }
                        }
                    }
                }
            }
        }
    }
}
