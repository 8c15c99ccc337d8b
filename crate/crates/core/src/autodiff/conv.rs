use super::{shape_err, Result, Scalar};

/// Output side length of a valid (unpadded) convolution.
pub fn conv2d_output_size(input: usize, kernel: usize, stride: usize) -> Option<usize> {
    if kernel == 0 || stride == 0 || kernel > input {
        return None;
    }
    Some((input - kernel) / stride + 1)
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn new(c_in: usize, h: usize, w: usize, k: usize, stride: usize) -> Result<Self> {
        let (Some(oh), Some(ow)) = (
            conv2d_output_size(h, k, stride),
            conv2d_output_size(w, k, stride),
        ) else {
            return shape_err(
                "conv2d",
                format!("kernel {k} stride {stride} does not fit {h}x{w}"),
            );
        };
        Ok(ConvGeom {
            c_in,
            h,
            w,
            k,
            stride,
            oh,
            ow,
        })
    }

    pub fn col_rows(&self) -> usize {
        self.c_in * self.k * self.k
    }

    pub fn col_cols(&self) -> usize {
        self.oh * self.ow
    }

    /// Unfolds one C×H×W image into a (C·k·k)×(oh·ow) matrix.
    pub fn im2col<T: Scalar>(&self, img: &[T], cols: &mut [T]) {
        let p = self.col_cols();
        for c in 0..self.c_in {
            let plane = &img[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ki in 0..self.k {
                for kj in 0..self.k {
                    let row = (c * self.k + ki) * self.k + kj;
                    let dst = &mut cols[row * p..(row + 1) * p];
                    for oi in 0..self.oh {
                        let src_row = (oi * self.stride + ki) * self.w + kj;
                        let d = &mut dst[oi * self.ow..(oi + 1) * self.ow];
                        if self.stride == 1 {
                            d.copy_from_slice(&plane[src_row..src_row + self.ow]);
                        } else {
                            for (oj, v) in d.iter_mut().enumerate() {
                                *v = plane[src_row + oj * self.stride];
                            }
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`Self::im2col`]: scatters column gradients back onto the image.
    pub fn col2im_add<T: Scalar>(&self, cols: &[T], img: &mut [T]) {
        let p = self.col_cols();
        for c in 0..self.c_in {
            let plane = &mut img[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ki in 0..self.k {
                for kj in 0..self.k {
                    let row = (c * self.k + ki) * self.k + kj;
                    let src = &cols[row * p..(row + 1) * p];
                    for oi in 0..self.oh {
                        let dst_row = (oi * self.stride + ki) * self.w + kj;
                        for oj in 0..self.ow {
                            plane[dst_row + oj * self.stride] =
                                plane[dst_row + oj * self.stride] + src[oi * self.ow + oj];
                        }
                    }
                }
            }
        }
    }
}
