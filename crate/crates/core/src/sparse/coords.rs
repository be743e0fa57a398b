use crate::error::{Error, Result};

/// Integer voxel coordinate.
pub type Coord = [i32; 3];

const EMPTY: u32 = u32::MAX;

/// Sorted, duplicate-free voxel coordinates at one tensor stride, with an
/// open-addressing hash index for O(1) expected lookup.
#[derive(Clone, Debug)]
pub struct CoordSet {
    stride: i32,
    coords: Vec<Coord>,
    table: Vec<u32>,
    mask: usize,
}

impl PartialEq for CoordSet {
    fn eq(&self, other: &Self) -> bool {
        self.stride == other.stride && self.coords == other.coords
    }
}

fn hash(c: Coord, stride: i32) -> u64 {
    // splitmix64 finalizer over the packed key
    let mut h = (c[0] as u32 as u64)
        ^ ((c[1] as u32 as u64) << 21).rotate_left(7)
        ^ ((c[2] as u32 as u64) << 42).rotate_left(13)
        ^ ((stride as u64) << 59);
    h = (h ^ (h >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    h = (h ^ (h >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    h ^ (h >> 31)
}

impl CoordSet {
    /// Deduplicates and lexicographically sorts `coords`.
    pub fn new(stride: i32, mut coords: Vec<Coord>) -> Result<Self> {
        if stride <= 0 || (stride & (stride - 1)) != 0 {
            return Err(Error::contract(format!("stride {stride} is not a power of two")));
        }
        if let Some(bad) = coords
            .iter()
            .find(|c| c.iter().any(|v| v.rem_euclid(stride) != 0))
        {
            return Err(Error::contract(format!(
                "coordinate {bad:?} not divisible by stride {stride}"
            )));
        }
        coords.sort_unstable();
        coords.dedup();
        Ok(Self::from_sorted(stride, coords))
    }

    fn from_sorted(stride: i32, coords: Vec<Coord>) -> Self {
        let cap = (coords.len() * 2).next_power_of_two().max(8);
        let mask = cap - 1;
        let mut table = vec![EMPTY; cap];
        for (row, &c) in coords.iter().enumerate() {
            let mut slot = hash(c, stride) as usize & mask;
            while table[slot] != EMPTY {
                slot = (slot + 1) & mask;
            }
            table[slot] = row as u32;
        }
        Self {
            stride,
            coords,
            table,
            mask,
        }
    }

    pub fn stride(&self) -> i32 {
        self.stride
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn coords(&self) -> &[Coord] {
        &self.coords
    }

    pub fn get(&self, row: usize) -> Coord {
        self.coords[row]
    }

    /// Row holding `c`, if present.
    pub fn find(&self, c: Coord) -> Option<usize> {
        let mut slot = hash(c, self.stride) as usize & self.mask;
        loop {
            let row = self.table[slot];
            if row == EMPTY {
                return None;
            }
            if self.coords[row as usize] == c {
                return Some(row as usize);
            }
            slot = (slot + 1) & self.mask;
        }
    }

    /// Coordinates of a stride-2 convolution output: unique
    /// `floor(c / 2s) · 2s`.
    pub fn downsample(&self) -> CoordSet {
        let step = self.stride * 2;
        let mut out: Vec<Coord> = self
            .coords
            .iter()
            .map(|c| c.map(|v| v.div_euclid(step) * step))
            .collect();
        out.sort_unstable();
        out.dedup();
        Self::from_sorted(step, out)
    }

    /// Row of the voxel at this set's stride that contains the finer
    /// coordinate `c`.
    pub fn find_containing(&self, c: Coord) -> Option<usize> {
        self.find(c.map(|v| v.div_euclid(self.stride) * self.stride))
    }
}
