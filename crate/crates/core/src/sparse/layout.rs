//! Active-site bookkeeping for batches of sparse images and the gather
//! tables (rulebooks) derived from it.

use crate::tensor::{PoolBook, Rulebook, NO_NEIGHBOR};

/// Active sites of a batch of single-view images at one resolution.
///
/// Sites of image `i` occupy rows `offsets[i]..offsets[i + 1]` of any
/// feature matrix laid out against this layout.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SiteLayout {
    pub width: usize,
    pub height: usize,
    /// `(x, y)` = `(plane, cell)` of every site, image-major.
    pub coords: Vec<(u16, u16)>,
    pub offsets: Vec<usize>,
}

impl SiteLayout {
    pub fn new(width: usize, height: usize, images: &[Vec<(u16, u16)>]) -> Self {
        let mut coords = Vec::new();
        let mut offsets = vec![0];
        for img in images {
            coords.extend_from_slice(img);
            offsets.push(coords.len());
        }
        Self {
            width,
            height,
            coords,
            offsets,
        }
    }

    pub fn num_sites(&self) -> usize {
        self.coords.len()
    }

    pub fn num_images(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn image_sites(&self, i: usize) -> &[(u16, u16)] {
        &self.coords[self.offsets[i]..self.offsets[i + 1]]
    }

    /// Gather table for a `kh × kw` convolution evaluated at every active
    /// site and reading only active sites of the same image.
    pub fn submanifold_rulebook(&self, kh: usize, kw: usize) -> Rulebook {
        let mut scratch = vec![NO_NEIGHBOR; self.width * self.height];
        let n = self.num_sites();
        let taps = kh * kw;
        let mut neighbors = vec![NO_NEIGHBOR; n * taps];
        for img in 0..self.num_images() {
            let lo = self.offsets[img];
            for (r, &(x, y)) in self.image_sites(img).iter().enumerate() {
                scratch[y as usize * self.width + x as usize] = (lo + r) as u32;
            }
            for (r, &(x, y)) in self.image_sites(img).iter().enumerate() {
                let row = lo + r;
                for ky in 0..kh {
                    for kx in 0..kw {
                        let yy = y as isize + ky as isize - (kh / 2) as isize;
                        let xx = x as isize + kx as isize - (kw / 2) as isize;
                        if yy < 0 || xx < 0 || yy >= self.height as isize || xx >= self.width as isize {
                            continue;
                        }
                        neighbors[row * taps + ky * kw + kx] =
                            scratch[yy as usize * self.width + xx as usize];
                    }
                }
            }
            for &(x, y) in self.image_sites(img) {
                scratch[y as usize * self.width + x as usize] = NO_NEIGHBOR;
            }
        }
        Rulebook {
            n_in: n,
            n_out: n,
            kernel: taps,
            neighbors,
        }
    }

    /// Rulebook whose outputs are this layout's sites but whose inputs are
    /// rows of an extended matrix: the layout's own rows first, followed by
    /// one dense `height × width` grid (row = y·width + x) for each image in
    /// `dense_images`. Taps of sites belonging to a dense image read the
    /// grid at every in-bounds position, active or not.
    pub fn dense_input_rulebook(&self, kh: usize, kw: usize, dense_images: &[usize]) -> Rulebook {
        let mut book = self.submanifold_rulebook(kh, kw);
        let grid = self.width * self.height;
        let n = self.num_sites();
        for (slot, &img) in dense_images.iter().enumerate() {
            let base = n + slot * grid;
            for r in self.offsets[img]..self.offsets[img + 1] {
                let (x, y) = self.coords[r];
                for ky in 0..kh {
                    for kx in 0..kw {
                        let yy = y as isize + ky as isize - (kh / 2) as isize;
                        let xx = x as isize + kx as isize - (kw / 2) as isize;
                        let tap = r * book.kernel + ky * kw + kx;
                        book.neighbors[tap] = if yy < 0
                            || xx < 0
                            || yy >= self.height as isize
                            || xx >= self.width as isize
                        {
                            NO_NEIGHBOR
                        } else {
                            (base + yy as usize * self.width + xx as usize) as u32
                        };
                    }
                }
            }
        }
        book.n_in = n + dense_images.len() * grid;
        book
    }

    /// Coarsened layout where every site maps to `(x / stride, y / stride)`,
    /// plus the pooling groups. Output sites keep first-occurrence order.
    pub fn pooled(&self, stride: usize) -> (SiteLayout, PoolBook) {
        let w = self.width.div_ceil(stride);
        let h = self.height.div_ceil(stride);
        let mut scratch = vec![NO_NEIGHBOR; w * h];
        let mut images = Vec::with_capacity(self.num_images());
        let mut groups: Vec<Vec<u32>> = Vec::new();
        for img in 0..self.num_images() {
            let mut out = Vec::new();
            let base = groups.len();
            for r in self.offsets[img]..self.offsets[img + 1] {
                let (x, y) = self.coords[r];
                let (px, py) = (x as usize / stride, y as usize / stride);
                let cell = &mut scratch[py * w + px];
                if *cell == NO_NEIGHBOR {
                    *cell = (groups.len() - base) as u32;
                    out.push((px as u16, py as u16));
                    groups.push(Vec::new());
                }
                groups[base + *cell as usize].push(r as u32);
            }
            for &(px, py) in &out {
                scratch[py as usize * w + px as usize] = NO_NEIGHBOR;
            }
            images.push(out);
        }
        let mut offsets = vec![0];
        let mut members = Vec::with_capacity(self.num_sites());
        for g in groups {
            members.extend(g);
            offsets.push(members.len());
        }
        (
            SiteLayout::new(w, h, &images),
            PoolBook {
                n_in: self.num_sites(),
                offsets,
                members,
            },
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn isolated_site_sees_only_itself() {
        let layout = SiteLayout::new(10, 10, &[vec![(4, 4)]]);
        let book = layout.submanifold_rulebook(3, 3);
        let taps = book.taps(0);
        assert_eq!(taps[4], 0);
        assert_eq!(taps.iter().filter(|&&t| t != NO_NEIGHBOR).count(), 1);
    }

    #[test]
    fn images_do_not_leak_into_each_other() {
        let layout = SiteLayout::new(10, 10, &[vec![(4, 4)], vec![(5, 4)]]);
        let book = layout.submanifold_rulebook(3, 3);
        assert_eq!(book.taps(0).iter().filter(|&&t| t != NO_NEIGHBOR).count(), 1);
        assert_eq!(book.taps(1).iter().filter(|&&t| t != NO_NEIGHBOR).count(), 1);
    }

    #[test]
    fn pooling_groups_collisions() {
        let layout = SiteLayout::new(10, 10, &[vec![(5, 7), (4, 6), (0, 0)]]);
        let (out, book) = layout.pooled(2);
        assert_eq!(out.coords, vec![(2, 3), (0, 0)]);
        assert_eq!(book.group(0), &[0, 1]);
        assert_eq!(book.group(1), &[2]);
        assert_eq!((out.width, out.height), (5, 5));
    }

    #[test]
    fn dense_rulebook_reads_every_in_bounds_pixel() {
        let layout = SiteLayout::new(4, 3, &[vec![(0, 0)], vec![(2, 1)]]);
        let book = layout.dense_input_rulebook(3, 3, &[1]);
        assert_eq!(book.n_in, 2 + 12);
        // image 0 stays sparse
        assert_eq!(book.taps(0).iter().filter(|&&t| t != NO_NEIGHBOR).count(), 1);
        // image 1 reads all nine neighbours from the dense grid
        let t = book.taps(1);
        assert!(t.iter().all(|&x| x != NO_NEIGHBOR));
        assert_eq!(t[4], (2 + 4 + 2) as u32);
    }
}
