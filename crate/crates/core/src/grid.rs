//! Row-major 2D grids shared by images, depth maps, masks and label maps.

use serde::{Deserialize, Serialize};

/// A dense row-major `width × height` grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid<T> {
    width: usize,
    height: usize,
    data: Vec<T>,
}

impl<T: Clone> Grid<T> {
    pub fn filled(width: usize, height: usize, value: T) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }
}

impl<T> Grid<T> {
    /// Wraps `data`; returns `None` when the length does not match.
    pub fn from_vec(width: usize, height: usize, data: Vec<T>) -> Option<Self> {
        (data.len() == width * height).then_some(Self {
            width,
            height,
            data,
        })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self {
            width,
            height,
            data,
        }
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize) -> usize {
        y * self.width + x
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> &T {
        &self.data[y * self.width + x]
    }

    #[inline]
    pub fn get_mut(&mut self, x: usize, y: usize) -> &mut T {
        let w = self.width;
        &mut self.data[y * w + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, value: T) {
        let w = self.width;
        self.data[y * w + x] = value;
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn same_shape<U>(&self, other: &Grid<U>) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub fn map<U>(&self, f: impl Fn(&T) -> U) -> Grid<U> {
        Grid {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(f).collect(),
        }
    }

    /// 4-neighbours of `(x, y)` inside the grid.
    pub fn neighbors4(&self, x: usize, y: usize) -> impl Iterator<Item = (usize, usize)> {
        let (w, h) = (self.width, self.height);
        let cand = [
            (x.wrapping_sub(1), y),
            (x + 1, y),
            (x, y.wrapping_sub(1)),
            (x, y + 1),
        ];
        cand.into_iter().filter(move |&(cx, cy)| cx < w && cy < h)
    }
}

/// Binary mask; `true` marks membership.
pub type Mask = Grid<bool>;

/// Axis-aligned pixel rectangle `[x0, x1) × [y0, y1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PixelRect {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl PixelRect {
    pub fn width(&self) -> usize {
        self.x1.saturating_sub(self.x0)
    }

    pub fn height(&self) -> usize {
        self.y1.saturating_sub(self.y0)
    }

    pub fn area(&self) -> usize {
        self.width() * self.height()
    }

    pub fn is_empty(&self) -> bool {
        self.area() == 0
    }

    #[inline]
    pub fn contains(&self, x: usize, y: usize) -> bool {
        x >= self.x0 && x < self.x1 && y >= self.y0 && y < self.y1
    }

    /// Grows by `margin` on every side, clipped to `width × height`.
    pub fn expanded(&self, margin: usize, width: usize, height: usize) -> Self {
        Self {
            x0: self.x0.saturating_sub(margin),
            y0: self.y0.saturating_sub(margin),
            x1: (self.x1 + margin).min(width),
            y1: (self.y1 + margin).min(height),
        }
    }

    /// Continuous box `[x0, y0, x1, y1]`.
    pub fn to_box(&self) -> [f64; 4] {
        [self.x0 as f64, self.y0 as f64, self.x1 as f64, self.y1 as f64]
    }
}

/// Tight bounding rectangle of the `true` pixels, `None` for an empty mask.
pub fn mask_bbox(mask: &Mask) -> Option<PixelRect> {
    let mut rect: Option<PixelRect> = None;
    for y in 0..mask.height() {
        for x in 0..mask.width() {
            if *mask.get(x, y) {
                rect = Some(match rect {
                    None => PixelRect {
                        x0: x,
                        y0: y,
                        x1: x + 1,
                        y1: y + 1,
                    },
                    Some(r) => PixelRect {
                        x0: r.x0.min(x),
                        y0: r.y0.min(y),
                        x1: r.x1.max(x + 1),
                        y1: r.y1.max(y + 1),
                    },
                });
            }
        }
    }
    rect
}

/// Mask of all pixels within Chebyshev distance `radius` of a member pixel.
pub fn dilate(mask: &Mask, radius: usize) -> Mask {
    if radius == 0 {
        return mask.clone();
    }
    let (w, h) = (mask.width(), mask.height());
    // separable square dilation
    let mut horizontal = Grid::filled(w, h, false);
    for y in 0..h {
        for x in 0..w {
            if *mask.get(x, y) {
                let lo = x.saturating_sub(radius);
                let hi = (x + radius).min(w - 1);
                for xx in lo..=hi {
                    horizontal.set(xx, y, true);
                }
            }
        }
    }
    let mut out = Grid::filled(w, h, false);
    for y in 0..h {
        for x in 0..w {
            if *horizontal.get(x, y) {
                let lo = y.saturating_sub(radius);
                let hi = (y + radius).min(h - 1);
                for yy in lo..=hi {
                    out.set(x, yy, true);
                }
            }
        }
    }
    out
}

pub fn count_true(mask: &Mask) -> usize {
    mask.data().iter().filter(|&&b| b).count()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bbox_of_empty_mask_is_none() {
        let m = Grid::filled(4, 4, false);
        assert_eq!(mask_bbox(&m), None);
    }

    #[test]
    fn bbox_and_dilation() {
        let mut m = Grid::filled(6, 5, false);
        m.set(2, 1, true);
        m.set(3, 3, true);
        assert_eq!(
            mask_bbox(&m),
            Some(PixelRect {
                x0: 2,
                y0: 1,
                x1: 4,
                y1: 4
            })
        );
        let d = dilate(&m, 1);
        assert!(*d.get(1, 0));
        assert!(*d.get(4, 4));
        assert!(!*d.get(0, 0));
        assert!(!*d.get(5, 0));
    }

    #[test]
    fn neighbors_stay_inside() {
        let g = Grid::filled(3, 2, 0u8);
        let n: Vec<_> = g.neighbors4(0, 0).collect();
        assert_eq!(n, vec![(1, 0), (0, 1)]);
        assert_eq!(g.neighbors4(1, 1).count(), 3);
    }
}
