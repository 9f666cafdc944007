use std::collections::BTreeSet;

use crate::error::{Error, Result};
use crate::geometry::Point3;

/// Breadth-first occupancy code over the unit cube.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OctreeCode {
    pub depth: u8,
    /// One byte per occupied internal node; bit `b` marks child octant `b`
    /// where `b = 4x + 2y + z` over the child's upper/lower halves.
    pub bytes: Vec<u8>,
}

impl OctreeCode {
    /// Depth header byte followed by the occupancy bytes.
    pub fn to_dump(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.bytes.len() + 1);
        out.push(self.depth);
        out.extend_from_slice(&self.bytes);
        out
    }

    pub fn from_dump(dump: &[u8]) -> Result<Self> {
        let (&depth, bytes) = dump.split_first().ok_or(Error::Parse {
            line: 0,
            message: "empty octree dump".into(),
        })?;
        let code = OctreeCode {
            depth,
            bytes: bytes.to_vec(),
        };
        octree_decode(&code)?;
        Ok(code)
    }

    pub fn bit_len(&self) -> usize {
        self.bytes.len() * 8
    }
}

fn cell_of(p: &Point3, depth: u8) -> [u32; 3] {
    let side = 1u64 << depth;
    p.map(|x| ((x * side as f64).floor() as u64).min(side - 1) as u32)
}

/// Half-open cells `[lo, hi)`, with the top face of the cube folded into
/// the last cell.
pub fn octree_encode(points: &[Point3], depth: u8) -> Result<OctreeCode> {
    if !(1..=21).contains(&depth) {
        return Err(Error::invalid(format!(
            "octree depth must lie in 1..=21, got {depth}"
        )));
    }
    if points.is_empty() {
        return Err(Error::invalid("cannot encode an empty cloud"));
    }
    if let Some(p) = points
        .iter()
        .find(|p| p.iter().any(|x| !(0.0..=1.0).contains(x)))
    {
        return Err(Error::invalid(format!(
            "point {p:?} lies outside the unit cube"
        )));
    }
    let leaves: BTreeSet<[u32; 3]> = points.iter().map(|p| cell_of(p, depth)).collect();
    let mut bytes = Vec::new();
    // occupied nodes at the current level, in breadth-first order
    let mut level: Vec<[u32; 3]> = vec![[0, 0, 0]];
    for d in 0..depth {
        let shift = depth - d - 1;
        let mut next = Vec::new();
        for node in &level {
            let mut byte = 0u8;
            for b in 0..8u32 {
                let child = [
                    node[0] * 2 + (b >> 2 & 1),
                    node[1] * 2 + (b >> 1 & 1),
                    node[2] * 2 + (b & 1),
                ];
                let lo = child.map(|c| c << shift);
                let hi = child.map(|c| ((c + 1) << shift) - 1);
                if leaves
                    .range(lo..=[hi[0], u32::MAX, u32::MAX])
                    .any(|l| (0..3).all(|a| l[a] >= lo[a] && l[a] <= hi[a]))
                {
                    byte |= 1 << b;
                    next.push(child);
                }
            }
            bytes.push(byte);
        }
        level = next;
    }
    Ok(OctreeCode { depth, bytes })
}

/// One point per occupied leaf, at its cell center, in breadth-first order.
pub fn octree_decode(code: &OctreeCode) -> Result<Vec<Point3>> {
    if code.depth == 0 || code.depth > 21 {
        return Err(Error::Parse {
            line: 0,
            message: format!("invalid octree depth {}", code.depth),
        });
    }
    let mut pos = 0;
    let mut level: Vec<[u32; 3]> = vec![[0, 0, 0]];
    for _ in 0..code.depth {
        let mut next = Vec::new();
        for node in &level {
            let byte = *code.bytes.get(pos).ok_or(Error::Parse {
                line: pos + 1,
                message: "truncated occupancy stream".into(),
            })?;
            if byte == 0 {
                return Err(Error::Parse {
                    line: pos + 1,
                    message: "occupied node without children".into(),
                });
            }
            pos += 1;
            for b in 0..8u32 {
                if byte >> b & 1 == 1 {
                    next.push([
                        node[0] * 2 + (b >> 2 & 1),
                        node[1] * 2 + (b >> 1 & 1),
                        node[2] * 2 + (b & 1),
                    ]);
                }
            }
        }
        level = next;
    }
    if pos != code.bytes.len() {
        return Err(Error::Parse {
            line: pos + 1,
            message: "trailing bytes after the last level".into(),
        });
    }
    let side = (1u64 << code.depth) as f64;
    Ok(level
        .into_iter()
        .map(|c| c.map(|i| (i as f64 + 0.5) / side))
        .collect())
}
