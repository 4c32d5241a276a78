//! Dense row-major 2D maps.

use crate::error::{Error, Result};

/// A `width x height` row-major map; element `(u, v)` is column `u`, row `v`.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid<T> {
    width: usize,
    height: usize,
    data: Vec<T>,
}

impl<T: Clone> Grid<T> {
    pub fn new(width: usize, height: usize, fill: T) -> Self {
        Grid { width, height, data: vec![fill; width * height] }
    }
}

impl<T> Grid<T> {
    pub fn from_vec(width: usize, height: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::ShapeMismatch(format!(
                "{} elements for a {width}x{height} grid",
                data.len()
            )));
        }
        Ok(Grid { width, height, data })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for v in 0..height {
            for u in 0..width {
                data.push(f(u, v));
            }
        }
        Grid { width, height, data }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index_of(&self, u: usize, v: usize) -> usize {
        v * self.width + u
    }

    #[inline]
    pub fn get(&self, u: usize, v: usize) -> &T {
        &self.data[v * self.width + u]
    }

    #[inline]
    pub fn get_mut(&mut self, u: usize, v: usize) -> &mut T {
        &mut self.data[v * self.width + u]
    }

    #[inline]
    pub fn set(&mut self, u: usize, v: usize, value: T) {
        self.data[v * self.width + u] = value;
    }

    /// Checked access with signed coordinates.
    #[inline]
    pub fn try_get(&self, u: isize, v: isize) -> Option<&T> {
        if u < 0 || v < 0 || u as usize >= self.width || v as usize >= self.height {
            None
        } else {
            Some(&self.data[v as usize * self.width + u as usize])
        }
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn map<U>(&self, f: impl FnMut(&T) -> U) -> Grid<U> {
        Grid { width: self.width, height: self.height, data: self.data.iter().map(f).collect() }
    }

    /// Iterates `(u, v, &value)` in row-major order.
    pub fn iter_coords(&self) -> impl Iterator<Item = (usize, usize, &T)> {
        let w = self.width;
        self.data.iter().enumerate().map(move |(i, x)| (i % w, i / w, x))
    }

    pub fn same_shape<U>(&self, other: &Grid<U>) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub fn check_shape<U>(&self, other: &Grid<U>, what: &str) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::ShapeMismatch(format!(
                "{what}: {}x{} vs {}x{}",
                self.width, self.height, other.width, other.height
            )))
        }
    }
}

impl Grid<f64> {
    /// Bilinear sample at continuous pixel coordinates; samples outside the
    /// grid contribute zero.
    pub fn bilinear(&self, x: f64, y: f64) -> f64 {
        let x0 = x.floor();
        let y0 = y.floor();
        let ax = x - x0;
        let ay = y - y0;
        let (x0, y0) = (x0 as isize, y0 as isize);
        let at = |u: isize, v: isize| self.try_get(u, v).copied().unwrap_or(0.0);
        (1.0 - ay) * ((1.0 - ax) * at(x0, y0) + ax * at(x0 + 1, y0))
            + ay * ((1.0 - ax) * at(x0, y0 + 1) + ax * at(x0 + 1, y0 + 1))
    }

    /// Bilinear sample that only mixes samples accepted by `ok`; returns
    /// `None` if no accepted sample has positive weight.
    pub fn bilinear_where(&self, x: f64, y: f64, ok: impl Fn(f64) -> bool) -> Option<f64> {
        let x0 = x.floor();
        let y0 = y.floor();
        let ax = x - x0;
        let ay = y - y0;
        let (x0, y0) = (x0 as isize, y0 as isize);
        let mut acc = 0.0;
        let mut wsum = 0.0;
        for (du, dv, w) in [
            (0, 0, (1.0 - ax) * (1.0 - ay)),
            (1, 0, ax * (1.0 - ay)),
            (0, 1, (1.0 - ax) * ay),
            (1, 1, ax * ay),
        ] {
            if w <= 0.0 {
                continue;
            }
            if let Some(&s) = self.try_get(x0 + du, y0 + dv) {
                if ok(s) {
                    acc += w * s;
                    wsum += w;
                }
            }
        }
        (wsum > 0.0).then(|| acc / wsum)
    }

    /// Upsamples by an integer factor with bilinear interpolation between
    /// cell centers (edge cells clamp).
    pub fn upsample_bilinear(&self, factor: usize) -> Grid<f64> {
        let f = factor as f64;
        Grid::from_fn(self.width * factor, self.height * factor, |u, v| {
            let x = ((u as f64 + 0.5) / f - 0.5).clamp(0.0, (self.width - 1) as f64);
            let y = ((v as f64 + 0.5) / f - 0.5).clamp(0.0, (self.height - 1) as f64);
            self.bilinear(x, y)
        })
    }
}
