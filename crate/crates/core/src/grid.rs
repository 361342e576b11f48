//! Integer pixel grids for semantic labels and instance ids.

use crate::error::{ensure, Result};

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Grid<T> {
    h: usize,
    w: usize,
    data: Vec<T>,
}

/// Per-pixel class ids, 0 = background.
pub type LabelGrid = Grid<u8>;
/// Per-pixel instance ids, 0 = background.
pub type InstanceGrid = Grid<u32>;

impl<T: Copy + Default + PartialEq> Grid<T> {
    pub fn new(h: usize, w: usize) -> Self {
        Grid {
            h,
            w,
            data: vec![T::default(); h * w],
        }
    }

    pub fn from_vec(h: usize, w: usize, data: Vec<T>) -> Result<Self> {
        ensure!(
            data.len() == h * w,
            Shape,
            "grid {h}x{w} needs {} values, got {}",
            h * w,
            data.len()
        );
        Ok(Grid { h, w, data })
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.h, self.w)
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.w + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: T) {
        self.data[r * self.w + c] = v;
    }

    pub fn same_dims<U>(&self, other: &Grid<U>) -> bool {
        self.h == other.h && self.w == other.w
    }

    /// Count of non-default pixels.
    pub fn count_nonzero(&self) -> usize {
        let z = T::default();
        self.data.iter().filter(|&&v| v != z).count()
    }

    pub fn map<U: Copy + Default + PartialEq>(&self, f: impl Fn(T) -> U) -> Grid<U> {
        Grid {
            h: self.h,
            w: self.w,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// In-bounds 4-neighbours of `(r, c)`.
    pub fn neighbors4(&self, r: usize, c: usize) -> impl Iterator<Item = (usize, usize)> {
        let (h, w) = (self.h as isize, self.w as isize);
        [(-1isize, 0isize), (1, 0), (0, -1), (0, 1)]
            .into_iter()
            .map(move |(dr, dc)| (r as isize + dr, c as isize + dc))
            .filter(move |&(rr, cc)| rr >= 0 && cc >= 0 && rr < h && cc < w)
            .map(|(rr, cc)| (rr as usize, cc as usize))
    }

    /// In-bounds 8-neighbours of `(r, c)`.
    pub fn neighbors8(&self, r: usize, c: usize) -> impl Iterator<Item = (usize, usize)> {
        let (h, w) = (self.h as isize, self.w as isize);
        (-1isize..=1)
            .flat_map(|dr| (-1isize..=1).map(move |dc| (dr, dc)))
            .filter(|&(dr, dc)| dr != 0 || dc != 0)
            .map(move |(dr, dc)| (r as isize + dr, c as isize + dc))
            .filter(move |&(rr, cc)| rr >= 0 && cc >= 0 && rr < h && cc < w)
            .map(|(rr, cc)| (rr as usize, cc as usize))
    }
}

/// Labels 4-connected components of pixels where `mask` holds; returns the
/// component grid (0 = outside the mask) and the component count. Components
/// are numbered in raster order of their first pixel.
pub fn connected_components<T: Copy + Default + PartialEq>(
    grid: &Grid<T>,
    mask: impl Fn(T) -> bool,
    same: impl Fn(T, T) -> bool,
) -> (InstanceGrid, u32) {
    let (h, w) = grid.dims();
    let mut out = InstanceGrid::new(h, w);
    let mut next = 0u32;
    let mut stack = Vec::new();
    for r in 0..h {
        for c in 0..w {
            let v = grid.get(r, c);
            if !mask(v) || out.get(r, c) != 0 {
                continue;
            }
            next += 1;
            out.set(r, c, next);
            stack.push((r, c));
            while let Some((pr, pc)) = stack.pop() {
                let pv = grid.get(pr, pc);
                for (nr, nc) in grid.neighbors4(pr, pc) {
                    let nv = grid.get(nr, nc);
                    if out.get(nr, nc) == 0 && mask(nv) && same(pv, nv) {
                        out.set(nr, nc, next);
                        stack.push((nr, nc));
                    }
                }
            }
        }
    }
    (out, next)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn components_respect_class_boundaries() {
        let g = LabelGrid::from_vec(2, 4, vec![1, 1, 2, 0, 0, 1, 2, 2]).unwrap();
        let (cc, n) = connected_components(&g, |v| v > 0, |a, b| a == b);
        assert_eq!(n, 2);
        assert_eq!(cc.data(), &[1, 1, 2, 0, 0, 1, 2, 2]);
        let (_, n_fg) = connected_components(&g, |v| v > 0, |_, _| true);
        assert_eq!(n_fg, 1);
    }

    #[test]
    fn neighbor_counts() {
        let g: Grid<u8> = Grid::new(3, 3);
        assert_eq!(g.neighbors4(0, 0).count(), 2);
        assert_eq!(g.neighbors4(1, 1).count(), 4);
        assert_eq!(g.neighbors8(1, 1).count(), 8);
        assert_eq!(g.neighbors8(0, 2).count(), 3);
    }
}
