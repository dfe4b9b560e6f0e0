//! Bilinear sampling with zero outside the image, shared by warping and
//! deformable convolution.

use crate::tensor::Scalar;

/// Corner geometry of one sampling position.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Tap<T> {
    /// Top-left corner; `None` when every corner lies outside the image.
    origin: Option<(isize, isize)>,
    wy: T,
    wx: T,
    h: usize,
    w: usize,
}

impl<T: Scalar> Tap<T> {
    pub(crate) fn new(h: usize, w: usize, py: T, px: T) -> Self {
        let inside =
            py > -T::one() && py < T::from_usize(h).unwrap() && px > -T::one() && px < T::from_usize(w).unwrap();
        if !inside {
            return Self {
                origin: None,
                wy: T::zero(),
                wx: T::zero(),
                h,
                w,
            };
        }
        let y0 = py.floor();
        let x0 = px.floor();
        Self {
            origin: Some((y0.to_isize().unwrap(), x0.to_isize().unwrap())),
            wy: py - y0,
            wx: px - x0,
            h,
            w,
        }
    }

    /// Flat plane indices of the four corners (00, 01, 10, 11), `None`
    /// where out of bounds.
    #[inline]
    fn corners(&self) -> Option<[Option<usize>; 4]> {
        let (y0, x0) = self.origin?;
        let at = |y: isize, x: isize| {
            (y >= 0 && x >= 0 && (y as usize) < self.h && (x as usize) < self.w)
                .then(|| y as usize * self.w + x as usize)
        };
        Some([at(y0, x0), at(y0, x0 + 1), at(y0 + 1, x0), at(y0 + 1, x0 + 1)])
    }

    #[inline]
    fn weights(&self) -> [T; 4] {
        let (wy, wx) = (self.wy, self.wx);
        let (uy, ux) = (T::one() - wy, T::one() - wx);
        [uy * ux, uy * wx, wy * ux, wy * wx]
    }

    #[inline]
    fn values(&self, plane: &[T], corners: &[Option<usize>; 4]) -> [T; 4] {
        corners.map(|c| c.map_or(T::zero(), |i| plane[i]))
    }

    #[inline]
    pub(crate) fn sample(&self, plane: &[T]) -> T {
        let Some(corners) = self.corners() else {
            return T::zero();
        };
        let v = self.values(plane, &corners);
        let wt = self.weights();
        wt[0] * v[0] + wt[1] * v[1] + wt[2] * v[2] + wt[3] * v[3]
    }

    /// Spatial derivative `(d/dy, d/dx)` of the bilinear surface.
    #[inline]
    pub(crate) fn grad_pos(&self, plane: &[T]) -> (T, T) {
        let Some(corners) = self.corners() else {
            return (T::zero(), T::zero());
        };
        let v = self.values(plane, &corners);
        let (wy, wx) = (self.wy, self.wx);
        let dy = (T::one() - wx) * (v[2] - v[0]) + wx * (v[3] - v[1]);
        let dx = (T::one() - wy) * (v[1] - v[0]) + wy * (v[3] - v[2]);
        (dy, dx)
    }

    /// `plane[corner] += g * weight` for every in-bounds corner.
    #[inline]
    pub(crate) fn scatter(&self, plane: &mut [T], g: T) {
        let Some(corners) = self.corners() else {
            return;
        };
        for (c, wt) in corners.iter().zip(self.weights()) {
            if let Some(i) = c {
                plane[*i] = plane[*i] + g * wt;
            }
        }
    }
}
