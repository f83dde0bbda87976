//! Open-addressing hash index from voxel coordinates to storage rows.
//!
//! The hash is a splitmix64-style mix of the three coordinates and the
//! scale; collisions resolve by linear probing. Lookup behavior is the
//! contract, the hash itself is not.

use super::VoxelCoord;

#[derive(Clone, Debug)]
pub struct CoordIndex {
    slots: Vec<Option<(VoxelCoord, u32)>>,
    mask: u64,
    len: usize,
    scale: u32,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn mix(c: VoxelCoord, scale: u32) -> u64 {
    let mut h = splitmix64(c.x as u64 ^ u64::from(scale).wrapping_mul(0x517c_c1b7_2722_0a95));
    h = splitmix64(h ^ c.y as u64);
    splitmix64(h ^ c.z as u64)
}

impl CoordIndex {
    /// Builds the index over unique coordinates; later duplicates are
    /// silently dropped (the resulting `len` exposes this to callers that
    /// need to assert uniqueness).
    pub fn build(coords: &[VoxelCoord], scale: u32) -> Self {
        let capacity = (coords.len().max(1) * 2).next_power_of_two();
        let mut index = Self {
            slots: vec![None; capacity],
            mask: capacity as u64 - 1,
            len: 0,
            scale,
        };
        for (row, &c) in coords.iter().enumerate() {
            index.insert(c, row as u32);
        }
        index
    }

    fn insert(&mut self, c: VoxelCoord, row: u32) {
        let mut slot = (mix(c, self.scale) & self.mask) as usize;
        loop {
            match &self.slots[slot] {
                None => {
                    self.slots[slot] = Some((c, row));
                    self.len += 1;
                    return;
                }
                Some((existing, _)) if *existing == c => return,
                _ => slot = (slot + 1) & self.mask as usize,
            }
        }
    }

    pub fn get(&self, c: VoxelCoord) -> Option<usize> {
        let mut slot = (mix(c, self.scale) & self.mask) as usize;
        loop {
            match &self.slots[slot] {
                None => return None,
                Some((existing, row)) if *existing == c => return Some(*row as usize),
                _ => slot = (slot + 1) & self.mask as usize,
            }
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}
