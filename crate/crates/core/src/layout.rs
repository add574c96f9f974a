//! Bijective linearization between (t, m, n) grid coordinates and stream
//! positions. The temporal axis is never interleaved: each timestep is
//! traversed by the same spatial curve and timesteps are concatenated in
//! increasing t. Z-order pads each axis to the next power of two, computes
//! Morton codes on the padded grid, and skips cells outside the real grid,
//! which keeps the map a bijection for any M x N.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::field::{Dims, Field, Precision};

/// Spatial traversal order within a timestep.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayoutKind {
    ZOrder,
    RowMajor,
    ColMajor,
}

impl LayoutKind {
    pub fn code(self) -> u8 {
        match self {
            LayoutKind::ZOrder => 0,
            LayoutKind::RowMajor => 1,
            LayoutKind::ColMajor => 2,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(LayoutKind::ZOrder),
            1 => Ok(LayoutKind::RowMajor),
            2 => Ok(LayoutKind::ColMajor),
            _ => Err(Error::BadArchiveField("unknown layout code")),
        }
    }

    pub fn parse(name: &str) -> Option<LayoutKind> {
        match name {
            "zorder" => Some(LayoutKind::ZOrder),
            "row" => Some(LayoutKind::RowMajor),
            "col" => Some(LayoutKind::ColMajor),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            LayoutKind::ZOrder => "zorder",
            LayoutKind::RowMajor => "row",
            LayoutKind::ColMajor => "col",
        }
    }

    pub const ALL: [LayoutKind; 3] = [
        LayoutKind::ZOrder,
        LayoutKind::RowMajor,
        LayoutKind::ColMajor,
    ];
}

/// Spread the 32 bits of x so bit i lands at even position 2i.
fn part_1_by_1(x: u32) -> u64 {
    let mut x = x as u64;
    x = (x | (x << 16)) & 0x0000_FFFF_0000_FFFF;
    x = (x | (x << 8)) & 0x00FF_00FF_00FF_00FF;
    x = (x | (x << 4)) & 0x0F0F_0F0F_0F0F_0F0F;
    x = (x | (x << 2)) & 0x3333_3333_3333_3333;
    x = (x | (x << 1)) & 0x5555_5555_5555_5555;
    x
}

/// Inverse of part_1_by_1: gather the even-position bits of x.
fn compact_1_by_1(x: u64) -> u32 {
    let mut x = x & 0x5555_5555_5555_5555;
    x = (x | (x >> 1)) & 0x3333_3333_3333_3333;
    x = (x | (x >> 2)) & 0x0F0F_0F0F_0F0F_0F0F;
    x = (x | (x >> 4)) & 0x00FF_00FF_00FF_00FF;
    x = (x | (x >> 8)) & 0x0000_FFFF_0000_FFFF;
    x = (x | (x >> 16)) & 0x0000_0000_FFFF_FFFF;
    x as u32
}

/// Morton code with the column index n in the low interleave lane:
/// code = ...m1 n1 m0 n0. Total over the full u32 x u32 coordinate space.
pub fn morton_encode(m: u32, n: u32) -> u64 {
    (part_1_by_1(m) << 1) | part_1_by_1(n)
}

/// Inverse of `morton_encode`.
pub fn morton_decode(code: u64) -> (u32, u32) {
    (compact_1_by_1(code >> 1), compact_1_by_1(code))
}

/// Per-timestep permutation between curve positions and spatial cells.
/// Derived from (dims, kind), never serialized.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LinearIndexMap {
    dims: Dims,
    kind: LayoutKind,
    /// curve position s -> row-major cell index m*N + n
    cell_of_pos: Vec<u32>,
    /// row-major cell index -> curve position s
    pos_of_cell: Vec<u32>,
}

impl LinearIndexMap {
    pub fn new(dims: Dims, kind: LayoutKind) -> LinearIndexMap {
        let (m_len, n_len) = (dims.m as usize, dims.n as usize);
        let spatial = m_len * n_len;
        let mut cell_of_pos: Vec<u32> = match kind {
            LayoutKind::RowMajor => (0..spatial as u32).collect(),
            LayoutKind::ColMajor => {
                let mut v = Vec::with_capacity(spatial);
                for n in 0..n_len {
                    for m in 0..m_len {
                        v.push((m * n_len + n) as u32);
                    }
                }
                v
            }
            LayoutKind::ZOrder => {
                let mut cells: Vec<u32> = (0..spatial as u32).collect();
                cells.sort_by_key(|&cell| {
                    let m = cell / dims.n;
                    let n = cell % dims.n;
                    morton_encode(m, n)
                });
                cells
            }
        };
        // RowMajor identity needs no sort; make the inverse in one pass.
        let mut pos_of_cell = alloc::vec![0u32; spatial];
        for (pos, &cell) in cell_of_pos.iter().enumerate() {
            pos_of_cell[cell as usize] = pos as u32;
        }
        cell_of_pos.shrink_to_fit();
        LinearIndexMap {
            dims,
            kind,
            cell_of_pos,
            pos_of_cell,
        }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn kind(&self) -> LayoutKind {
        self.kind
    }

    /// Grid coordinate visited at stream position p.
    pub fn coord(&self, p: u64) -> Result<(u32, u32, u32)> {
        let len = self.dims.len();
        if p >= len {
            return Err(Error::PositionOutOfRange { pos: p, len });
        }
        let spatial = self.dims.spatial();
        let t = (p / spatial) as u32;
        let cell = self.cell_of_pos[(p % spatial) as usize];
        Ok((cell / self.dims.n, cell % self.dims.n, t))
    }

    /// Stream position visiting grid coordinate (x=m, y=n, t).
    pub fn position(&self, x: u32, y: u32, t: u32) -> Result<u64> {
        if x >= self.dims.m || y >= self.dims.n || t >= self.dims.t {
            return Err(Error::CoordOutOfGrid { x, y, t });
        }
        let cell = x as u64 * self.dims.n as u64 + y as u64;
        Ok(t as u64 * self.dims.spatial() + self.pos_of_cell[cell as usize] as u64)
    }

    /// Curve position within a timestep for a row-major cell index.
    pub fn pos_of_cell(&self, cell: u32) -> u32 {
        self.pos_of_cell[cell as usize]
    }

    /// Row-major cell index at a curve position within a timestep.
    pub fn cell_of_pos(&self, pos: u32) -> u32 {
        self.cell_of_pos[pos as usize]
    }
}

/// One (x, y, t) grid coordinate attached to a stream position.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Coord {
    pub x: u32,
    pub y: u32,
    pub t: u32,
}

/// Field samples reordered to stream order, with the coordinate of every
/// stream position.
pub fn flatten(field: &Field, kind: LayoutKind) -> (Vec<f64>, Vec<Coord>, LinearIndexMap) {
    let dims = field.dims();
    let map = LinearIndexMap::new(dims, kind);
    let spatial = dims.spatial() as usize;
    let mut samples = Vec::with_capacity(dims.len() as usize);
    let mut coords = Vec::with_capacity(dims.len() as usize);
    let values = field.values();
    for t in 0..dims.t {
        let base = t as usize * spatial;
        for s in 0..spatial {
            let cell = map.cell_of_pos[s] as usize;
            samples.push(values[base + cell]);
            coords.push(Coord {
                x: (cell as u32) / dims.n,
                y: (cell as u32) % dims.n,
                t,
            });
        }
    }
    (samples, coords, map)
}

/// The coordinate of every stream position, without needing a field in
/// hand. Matches the coords `flatten` emits exactly.
pub fn stream_coords(dims: Dims, kind: LayoutKind) -> Vec<Coord> {
    let map = LinearIndexMap::new(dims, kind);
    let spatial = dims.spatial() as usize;
    let mut coords = Vec::with_capacity(dims.len() as usize);
    for t in 0..dims.t {
        for s in 0..spatial {
            let cell = map.cell_of_pos[s];
            coords.push(Coord {
                x: cell / dims.n,
                y: cell % dims.n,
                t,
            });
        }
    }
    coords
}

/// Inverse of `flatten`: scatter stream-order samples back to row-major
/// storage. The samples' length must match dims exactly.
pub fn unflatten(
    samples: &[f64],
    dims: Dims,
    kind: LayoutKind,
    precision: Precision,
) -> Result<Field> {
    if samples.len() as u64 != dims.len() {
        return Err(Error::SampleCountMismatch {
            expected: dims.len(),
            actual: samples.len() as u64,
        });
    }
    let map = LinearIndexMap::new(dims, kind);
    let spatial = dims.spatial() as usize;
    let mut values = alloc::vec![0.0f64; samples.len()];
    for t in 0..dims.t as usize {
        let base = t * spatial;
        for s in 0..spatial {
            values[base + map.cell_of_pos[s] as usize] = samples[base + s];
        }
    }
    Field::new(dims, precision, values)
}

/// Mean Chebyshev distance between consecutively visited cells within a
/// timestep. Diagnostic for the locality claim behind the Z-order default.
pub fn mean_chebyshev_step(dims: Dims, kind: LayoutKind) -> f64 {
    let map = LinearIndexMap::new(dims, kind);
    let spatial = dims.spatial() as usize;
    if spatial < 2 {
        return 0.0;
    }
    let mut total = 0u64;
    for s in 1..spatial {
        let a = map.cell_of_pos[s - 1];
        let b = map.cell_of_pos[s];
        let (am, an) = (a / dims.n, a % dims.n);
        let (bm, bn) = (b / dims.n, b % dims.n);
        let dm = am.abs_diff(bm);
        let dn = an.abs_diff(bn);
        total += dm.max(dn) as u64;
    }
    total as f64 / (spatial - 1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::{gen_synthetic, SyntheticKind};

    fn dims(t: u32, m: u32, n: u32) -> Dims {
        Dims::new(t, m, n).unwrap()
    }

    /// Bit-by-bit reference for the interleave, independent of the
    /// mask-shift implementation under test.
    fn morton_reference(m: u32, n: u32) -> u64 {
        let mut code = 0u64;
        for b in 0..32 {
            code |= (((n >> b) & 1) as u64) << (2 * b);
            code |= (((m >> b) & 1) as u64) << (2 * b + 1);
        }
        code
    }

    #[test]
    fn morton_matches_bitwise_reference() {
        for m in 0..64 {
            for n in 0..64 {
                assert_eq!(morton_encode(m, n), morton_reference(m, n));
            }
        }
        for &(m, n) in &[(0, u32::MAX), (u32::MAX, 0), (u32::MAX, u32::MAX), (123456789, 987654321)] {
            assert_eq!(morton_encode(m, n), morton_reference(m, n));
            assert_eq!(morton_decode(morton_encode(m, n)), (m, n));
        }
    }

    #[test]
    fn morton_2x2_visit_order() {
        // (0,0),(0,1),(1,0),(1,1) <-> codes 0,1,2,3 with the column bit low.
        assert_eq!(morton_encode(0, 0), 0);
        assert_eq!(morton_encode(0, 1), 1);
        assert_eq!(morton_encode(1, 0), 2);
        assert_eq!(morton_encode(1, 1), 3);
        let map = LinearIndexMap::new(dims(1, 2, 2), LayoutKind::ZOrder);
        let order: Vec<(u32, u32, u32)> = (0..4).map(|p| map.coord(p).unwrap()).collect();
        assert_eq!(order, alloc::vec![(0, 0, 0), (0, 1, 0), (1, 0, 0), (1, 1, 0)]);
    }

    #[test]
    fn zorder_3x3_is_sorted_padded_enumeration() {
        // Oracle: enumerate the padded 4x4 grid, keep in-grid cells, sort by
        // Morton code computed bit by bit.
        let mut oracle: Vec<(u64, u32, u32)> = Vec::new();
        for m in 0..3u32 {
            for n in 0..3u32 {
                oracle.push((morton_reference(m, n), m, n));
            }
        }
        oracle.sort();
        let map = LinearIndexMap::new(dims(1, 3, 3), LayoutKind::ZOrder);
        for (pos, &(_, m, n)) in oracle.iter().enumerate() {
            assert_eq!(map.coord(pos as u64).unwrap(), (m, n, 0));
        }
    }

    #[test]
    fn one_by_one_grid_is_identity_for_all_kinds() {
        for kind in LayoutKind::ALL {
            let map = LinearIndexMap::new(dims(1, 1, 1), kind);
            assert_eq!(map.coord(0).unwrap(), (0, 0, 0));
            assert_eq!(map.position(0, 0, 0).unwrap(), 0);
        }
    }

    #[test]
    fn bijectivity_exhaustive_small_grids() {
        for t in 1..=3u32 {
            for m in 1..=9u32 {
                for n in 1..=9u32 {
                    for kind in LayoutKind::ALL {
                        let d = dims(t, m, n);
                        let map = LinearIndexMap::new(d, kind);
                        let mut seen = alloc::vec![false; d.len() as usize];
                        for p in 0..d.len() {
                            let (x, y, tt) = map.coord(p).unwrap();
                            let idx = (tt as u64 * d.spatial()
                                + x as u64 * d.n as u64
                                + y as u64) as usize;
                            assert!(!seen[idx], "cell visited twice");
                            seen[idx] = true;
                            assert_eq!(map.position(x, y, tt).unwrap(), p);
                        }
                        assert!(seen.iter().all(|&s| s));
                    }
                }
            }
        }
    }

    #[test]
    fn flatten_unflatten_round_trip() {
        let f = gen_synthetic(SyntheticKind::WhiteNoise, dims(2, 4, 4), 11);
        for kind in LayoutKind::ALL {
            let (samples, coords, _) = flatten(&f, kind);
            assert_eq!(samples.len() as u64, f.dims().len());
            assert_eq!(coords.len(), samples.len());
            let g = unflatten(&samples, f.dims(), kind, f.precision()).unwrap();
            assert_eq!(f.values(), g.values());
        }
    }

    #[test]
    fn row_major_flatten_is_a_reshape() {
        let f = gen_synthetic(SyntheticKind::WhiteNoise, dims(2, 3, 5), 4);
        let (samples, coords, _) = flatten(&f, LayoutKind::RowMajor);
        assert_eq!(samples, f.values());
        assert_eq!(coords[0], Coord { x: 0, y: 0, t: 0 });
        assert_eq!(coords[5], Coord { x: 1, y: 0, t: 0 });
        assert_eq!(coords[15], Coord { x: 0, y: 0, t: 1 });
    }

    #[test]
    fn unflatten_rejects_wrong_length() {
        let err = unflatten(&[0.0; 7], dims(1, 2, 4), LayoutKind::ZOrder, Precision::F64)
            .unwrap_err();
        assert!(matches!(err, Error::SampleCountMismatch { .. }));
    }

    #[test]
    fn coords_match_flatten_order_under_zorder() {
        let f = gen_synthetic(SyntheticKind::SmoothAdvection, dims(3, 5, 7), 2);
        let (samples, coords, map) = flatten(&f, LayoutKind::ZOrder);
        for (p, c) in coords.iter().enumerate() {
            assert_eq!(map.coord(p as u64).unwrap(), (c.x, c.y, c.t));
            assert_eq!(samples[p], f.value_at(c.t, c.x, c.y));
        }
    }

    #[test]
    fn zorder_locality_beats_row_major() {
        for (m, n) in [(16, 16), (17, 33), (8, 8), (64, 64), (9, 24)] {
            let d = dims(1, m, n);
            let z = mean_chebyshev_step(d, LayoutKind::ZOrder);
            let r = mean_chebyshev_step(d, LayoutKind::RowMajor);
            assert!(z <= r, "{}x{}: zorder {} vs row {}", m, n, z, r);
        }
    }
}
