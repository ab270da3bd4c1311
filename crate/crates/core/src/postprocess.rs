//! Binary-mask cleanup: keep the largest 26-connected component, fill holes
//! that are not 6-connected to the border.

use std::collections::VecDeque;

use crate::error::Result;
use crate::volume::Volume;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask {
    dims: [usize; 3],
    bits: Vec<bool>,
}

impl BinaryMask {
    pub fn new(dims: [usize; 3], bits: Vec<bool>) -> Self {
        assert_eq!(bits.len(), dims.iter().product::<usize>(), "mask length does not match dims");
        BinaryMask { dims, bits }
    }

    pub fn empty(dims: [usize; 3]) -> Self {
        BinaryMask::new(dims, vec![false; dims.iter().product()])
    }

    /// Voxels with value `>= threshold` become foreground.
    pub fn from_volume(v: &Volume, threshold: f32) -> Self {
        BinaryMask::new(v.dims(), v.data().iter().map(|&x| x >= threshold).collect())
    }

    /// 0/1 values on the grid of `like`.
    pub fn to_volume(&self, like: &Volume) -> Result<Volume> {
        like.with_data(self.bits.iter().map(|&b| b as u8 as f32).collect())
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> bool {
        self.bits[x + self.dims[0] * (y + self.dims[1] * z)]
    }

    pub fn is_subset_of(&self, other: &BinaryMask) -> bool {
        self.bits.iter().zip(&other.bits).all(|(&a, &b)| !a || b)
    }
}

fn coords(i: usize, d: [usize; 3]) -> [usize; 3] {
    [i % d[0], (i / d[0]) % d[1], i / (d[0] * d[1])]
}

/// Calls `f` for each in-grid neighbour of voxel `i`; `full` selects the
/// 26-neighbourhood, otherwise the 6 face neighbours.
fn for_neighbours(i: usize, d: [usize; 3], full: bool, mut f: impl FnMut(usize)) {
    let c = coords(i, d);
    for dz in -1i64..=1 {
        for dy in -1i64..=1 {
            for dx in -1i64..=1 {
                let nonzero = (dx != 0) as u8 + (dy != 0) as u8 + (dz != 0) as u8;
                if nonzero == 0 || (!full && nonzero != 1) {
                    continue;
                }
                let (x, y, z) = (c[0] as i64 + dx, c[1] as i64 + dy, c[2] as i64 + dz);
                if x < 0 || y < 0 || z < 0 || x >= d[0] as i64 || y >= d[1] as i64 || z >= d[2] as i64 {
                    continue;
                }
                f(x as usize + d[0] * (y as usize + d[1] * z as usize));
            }
        }
    }
}

/// Keeps only the largest 26-connected foreground component. Components are
/// discovered in index order, so on a size tie the one containing the
/// lowest-index voxel wins.
pub fn largest_component(m: &BinaryMask) -> BinaryMask {
    let d = m.dims;
    let mut label = vec![0u32; m.len()];
    let mut best = (0u32, 0usize);
    let mut next = 0u32;
    let mut queue = VecDeque::new();
    for seed in 0..m.len() {
        if !m.bits[seed] || label[seed] != 0 {
            continue;
        }
        next += 1;
        label[seed] = next;
        queue.push_back(seed);
        let mut size = 0;
        while let Some(i) = queue.pop_front() {
            size += 1;
            for_neighbours(i, d, true, |j| {
                if m.bits[j] && label[j] == 0 {
                    label[j] = next;
                    queue.push_back(j);
                }
            });
        }
        if size > best.1 {
            best = (next, size);
        }
    }
    BinaryMask::new(d, label.iter().map(|&l| l != 0 && l == best.0).collect())
}

/// Background voxels not 6-connected to the grid border become foreground.
pub fn fill_holes(m: &BinaryMask) -> BinaryMask {
    let d = m.dims;
    let mut outside = vec![false; m.len()];
    let mut queue = VecDeque::new();
    for i in 0..m.len() {
        let c = coords(i, d);
        let border = (0..3).any(|a| c[a] == 0 || c[a] + 1 == d[a]);
        if border && !m.bits[i] {
            outside[i] = true;
            queue.push_back(i);
        }
    }
    while let Some(i) = queue.pop_front() {
        for_neighbours(i, d, false, |j| {
            if !m.bits[j] && !outside[j] {
                outside[j] = true;
                queue.push_back(j);
            }
        });
    }
    BinaryMask::new(d, outside.iter().map(|&o| !o).collect())
}

/// Largest component followed by hole filling.
pub fn clean(m: &BinaryMask) -> BinaryMask {
    fill_holes(&largest_component(m))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask_from(d: [usize; 3], on: &[[usize; 3]]) -> BinaryMask {
        let mut bits = vec![false; d.iter().product()];
        for p in on {
            bits[p[0] + d[0] * (p[1] + d[1] * p[2])] = true;
        }
        BinaryMask::new(d, bits)
    }

    #[test]
    fn bigger_blob_survives() {
        let d = [12, 6, 6];
        let mut on = vec![];
        for x in 0..5 {
            for y in 0..2 {
                on.push([x, y, 0]);
            }
        }
        on.extend([[9, 4, 4], [10, 4, 4], [10, 5, 5]]);
        let out = largest_component(&mask_from(d, &on));
        assert_eq!(out.count(), 10);
        assert!(!out.get(9, 4, 4));
    }

    #[test]
    fn diagonal_touch_is_connected() {
        let d = [4, 4, 4];
        let m = mask_from(d, &[[0, 0, 0], [1, 1, 1], [2, 2, 2]]);
        assert_eq!(largest_component(&m), m);
    }

    #[test]
    fn tie_goes_to_the_lowest_index_component() {
        let d = [8, 1, 1];
        let out = largest_component(&mask_from(d, &[[0, 0, 0], [5, 0, 0]]));
        assert!(out.get(0, 0, 0) && !out.get(5, 0, 0));
    }

    #[test]
    fn empty_stays_empty() {
        let m = BinaryMask::empty([3, 3, 3]);
        assert_eq!(largest_component(&m), m);
        assert_eq!(fill_holes(&m), m);
    }

    #[test]
    fn hollow_shell_becomes_solid() {
        let d = [9, 9, 9];
        let mut shell = vec![];
        let mut ball = vec![];
        for z in 0..9 {
            for y in 0..9 {
                for x in 0..9 {
                    let r = [x, y, z].iter().map(|&c| (c as i64 - 4).abs()).max().unwrap();
                    if r <= 3 {
                        ball.push([x, y, z]);
                    }
                    if r == 3 {
                        shell.push([x, y, z]);
                    }
                }
            }
        }
        assert_eq!(fill_holes(&mask_from(d, &shell)), mask_from(d, &ball));
    }

    #[test]
    fn cavity_with_a_tunnel_is_kept_open() {
        let d = [7, 7, 7];
        let mut on = vec![];
        for z in 1..6 {
            for y in 1..6 {
                for x in 1..6 {
                    let inner = (2..5).contains(&x) && (2..5).contains(&y) && (2..5).contains(&z);
                    let tunnel = x == 3 && y == 3 && z == 5;
                    if !inner && !tunnel {
                        on.push([x, y, z]);
                    }
                }
            }
        }
        let m = mask_from(d, &on);
        assert_eq!(fill_holes(&m), m);
    }
}
