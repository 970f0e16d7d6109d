use crate::scalar::Scalar;

/// Geometry of a strided 2-D correlation between an image `[c, h, w]` and a
/// `k x k` window, producing an `[oh, ow]` grid of patches.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    /// Geometry for a correlation over an `[c, h, w]` image. Returns `None`
    /// when the window does not fit.
    pub fn new(c: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize) -> Option<Self> {
        if stride == 0 || h + 2 * pad < k || w + 2 * pad < k {
            return None;
        }
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (w + 2 * pad - k) / stride + 1;
        Some(ConvGeom {
            c,
            h,
            w,
            k,
            stride,
            pad,
            oh,
            ow,
        })
    }

    pub fn patch_len(&self) -> usize {
        self.c * self.k * self.k
    }

    pub fn positions(&self) -> usize {
        self.oh * self.ow
    }

    pub fn image_len(&self) -> usize {
        self.c * self.h * self.w
    }

    /// Source pixel for window offset `(ki, kj)` at output position `(oy, ox)`.
    #[inline]
    fn source(&self, oy: usize, ox: usize, ki: usize, kj: usize) -> Option<(usize, usize)> {
        let y = (oy * self.stride + ki).checked_sub(self.pad)?;
        let x = (ox * self.stride + kj).checked_sub(self.pad)?;
        (y < self.h && x < self.w).then_some((y, x))
    }
}

/// Unfolds `img` (`[c, h, w]`) into `cols` (`[c*k*k, oh*ow]`).
pub fn im2col<T: Scalar>(img: &[T], g: &ConvGeom, cols: &mut [T]) {
    debug_assert_eq!(img.len(), g.image_len());
    debug_assert_eq!(cols.len(), g.patch_len() * g.positions());
    let positions = g.positions();
    for ch in 0..g.c {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (ch * g.k + ki) * g.k + kj;
                let out = &mut cols[row * positions..(row + 1) * positions];
                for oy in 0..g.oh {
                    for ox in 0..g.ow {
                        out[oy * g.ow + ox] = match g.source(oy, ox, ki, kj) {
                            Some((y, x)) => img[(ch * g.h + y) * g.w + x],
                            None => T::zero(),
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters `cols` back onto `img`, accumulating.
pub fn col2im<T: Scalar>(cols: &[T], g: &ConvGeom, img: &mut [T]) {
    debug_assert_eq!(img.len(), g.image_len());
    debug_assert_eq!(cols.len(), g.patch_len() * g.positions());
    let positions = g.positions();
    for ch in 0..g.c {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (ch * g.k + ki) * g.k + kj;
                let src = &cols[row * positions..(row + 1) * positions];
                for oy in 0..g.oh {
                    for ox in 0..g.ow {
                        if let Some((y, x)) = g.source(oy, ox, ki, kj) {
                            img[(ch * g.h + y) * g.w + x] += src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_padding_halves_even_sides() {
        let g = ConvGeom::new(1, 28, 28, 4, 2, 1).unwrap();
        assert_eq!((g.oh, g.ow), (14, 14));
        let g = ConvGeom::new(64, 14, 14, 4, 2, 1).unwrap();
        assert_eq!((g.oh, g.ow), (7, 7));
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), y> == <x, col2im(y)> for arbitrary x, y.
        let g = ConvGeom::new(2, 5, 6, 3, 2, 1).unwrap();
        let x: Vec<f64> = (0..g.image_len()).map(|i| (i as f64 * 0.3).sin()).collect();
        let y: Vec<f64> = (0..g.patch_len() * g.positions())
            .map(|i| (i as f64 * 0.7).cos())
            .collect();
        let mut cols = vec![0.0; y.len()];
        im2col(&x, &g, &mut cols);
        let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
        let mut img = vec![0.0; x.len()];
        col2im(&y, &g, &mut img);
        let rhs: f64 = img.iter().zip(&x).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }
}
