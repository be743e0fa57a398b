use super::coords::{Coord, CoordSet};

/// Kernel offsets of a cubic kernel, in lexicographic `(dx, dy, dz)` order.
pub fn kernel_offsets(extent: usize) -> Vec<Coord> {
    let r = (extent / 2) as i32;
    let mut out = Vec::with_capacity(extent.pow(3));
    for dx in -r..=r {
        for dy in -r..=r {
            for dz in -r..=r {
                out.push([dx, dy, dz]);
            }
        }
    }
    out
}

/// For each kernel offset, the `(input_row, output_row)` pairs it connects.
#[derive(Clone, Debug, PartialEq)]
pub struct KernelMap {
    extent: usize,
    pairs: Vec<Vec<(u32, u32)>>,
    in_rows: usize,
    out_rows: usize,
}

impl KernelMap {
    pub fn extent(&self) -> usize {
        self.extent
    }

    /// Number of kernel offsets `S`.
    pub fn volume(&self) -> usize {
        self.pairs.len()
    }

    pub fn pairs(&self) -> &[Vec<(u32, u32)>] {
        &self.pairs
    }

    pub fn in_rows(&self) -> usize {
        self.in_rows
    }

    pub fn out_rows(&self) -> usize {
        self.out_rows
    }

    pub fn pair_count(&self) -> usize {
        self.pairs.iter().map(Vec::len).sum()
    }

    /// Index of the zero offset.
    pub fn center(&self) -> usize {
        self.pairs.len() / 2
    }
}

/// Pairs input voxel `i` with output voxel `j` under offset `o` whenever
/// `inp[i] = out[j] + o · inp.stride`.
///
/// The same map serves a strided convolution (`inp` fine, `out` coarse) and,
/// read backwards, the transposed convolution that returns to `inp`.
pub fn build_kernel_map(inp: &CoordSet, out: &CoordSet, extent: usize) -> KernelMap {
    let offsets = kernel_offsets(extent);
    let step = inp.stride();
    let mut pairs = vec![Vec::new(); offsets.len()];
    for (j, c) in out.coords().iter().enumerate() {
        for (s, o) in offsets.iter().enumerate() {
            let q = [c[0] + o[0] * step, c[1] + o[1] * step, c[2] + o[2] * step];
            if let Some(i) = inp.find(q) {
                pairs[s].push((i as u32, j as u32));
            }
        }
    }
    KernelMap {
        extent,
        pairs,
        in_rows: inp.len(),
        out_rows: out.len(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn isolated_voxel_has_only_center_pair() {
        let set = CoordSet::new(1, vec![[4, 4, 4]]).unwrap();
        let map = build_kernel_map(&set, &set, 3);
        assert_eq!(map.volume(), 27);
        assert_eq!(map.pair_count(), 1);
        assert_eq!(map.pairs()[map.center()], vec![(0, 0)]);
    }

    #[test]
    fn two_neighbours_on_x() {
        let set = CoordSet::new(1, vec![[0, 0, 0], [1, 0, 0]]).unwrap();
        let map = build_kernel_map(&set, &set, 3);
        let offs = kernel_offsets(3);
        let plus_x = offs.iter().position(|o| *o == [1, 0, 0]).unwrap();
        let minus_x = offs.iter().position(|o| *o == [-1, 0, 0]).unwrap();
        assert_eq!(map.pairs()[map.center()], vec![(0, 0), (1, 1)]);
        // output 0 reads input 1 through +x, output 1 reads input 0 through -x
        assert_eq!(map.pairs()[plus_x], vec![(1, 0)]);
        assert_eq!(map.pairs()[minus_x], vec![(0, 1)]);
        assert_eq!(map.pair_count(), 4);
    }

    fn brute_force(inp: &CoordSet, out: &CoordSet, extent: usize) -> Vec<Vec<(u32, u32)>> {
        let offs = kernel_offsets(extent);
        let mut pairs = vec![Vec::new(); offs.len()];
        for (s, o) in offs.iter().enumerate() {
            for (j, c) in out.coords().iter().enumerate() {
                for (i, p) in inp.coords().iter().enumerate() {
                    let st = inp.stride();
                    if (0..3).all(|d| p[d] == c[d] + o[d] * st) {
                        pairs[s].push((i as u32, j as u32));
                    }
                }
            }
        }
        pairs
    }

    #[test]
    fn matches_brute_force_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for trial in 0..5 {
            let coords: Vec<Coord> = (0..60)
                .map(|_| {
                    [
                        rng.random_range(-4..5),
                        rng.random_range(-4..5),
                        rng.random_range(-4..5),
                    ]
                })
                .collect();
            let fine = CoordSet::new(1, coords).unwrap();
            let same = build_kernel_map(&fine, &fine, 3);
            assert_eq!(
                same.pairs(),
                brute_force(&fine, &fine, 3).as_slice(),
                "trial {trial}"
            );
            let coarse = fine.downsample();
            let down = build_kernel_map(&fine, &coarse, 3);
            assert_eq!(down.pairs(), brute_force(&fine, &coarse, 3).as_slice());
        }
    }
}
