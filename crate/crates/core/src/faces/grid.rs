//! Rank grid geometry: coordinates, the 26 neighbor offsets and the
//! per-rank surface layout.

use std::fmt;

use crate::error::SimError;
use crate::simcore::Rank;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Kind {
    Face,
    Edge,
    Corner,
}

impl fmt::Display for Kind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Kind::Face => "face",
            Kind::Edge => "edge",
            Kind::Corner => "corner",
        })
    }
}

/// Bytes a rank sends across one face, edge or corner of its block.
pub fn message_size(kind: Kind, n: usize, s: usize) -> usize {
    match kind {
        Kind::Face => n * n * s,
        Kind::Edge => n * s,
        Kind::Corner => s,
    }
}

/// A nonzero offset in {-1, 0, 1}^3.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Offset {
    pub dx: i8,
    pub dy: i8,
    pub dz: i8,
}

impl Offset {
    /// All 26 offsets in lexicographic (dx, dy, dz) order.
    pub fn all() -> impl Iterator<Item = Offset> {
        (0..27)
            .filter(|&i| i != 13)
            .map(|i| Offset {
                dx: (i / 9) as i8 - 1,
                dy: (i / 3 % 3) as i8 - 1,
                dz: (i % 3) as i8 - 1,
            })
    }

    /// Position in `all()`, 0..26.
    pub fn index(self) -> usize {
        let i = (self.dx + 1) as usize * 9 + (self.dy + 1) as usize * 3 + (self.dz + 1) as usize;
        if i > 13 {
            i - 1
        } else {
            i
        }
    }

    pub fn from_index(i: usize) -> Offset {
        Offset::all().nth(i).expect("offset index out of range")
    }

    pub fn neg(self) -> Offset {
        Offset {
            dx: -self.dx,
            dy: -self.dy,
            dz: -self.dz,
        }
    }

    pub fn kind(self) -> Kind {
        match [self.dx, self.dy, self.dz].iter().filter(|&&d| d != 0).count() {
            1 => Kind::Face,
            2 => Kind::Edge,
            _ => Kind::Corner,
        }
    }
}

impl fmt::Display for Offset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{},{})", self.dx, self.dy, self.dz)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Neighbor {
    pub offset: Offset,
    pub rank: Rank,
    pub kind: Kind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct GridSpec {
    pub px: usize,
    pub py: usize,
    pub pz: usize,
    pub ranks_per_node: usize,
    /// Points per block edge.
    pub n: usize,
    /// Bytes per point.
    pub s: usize,
    /// Wrap neighbors around the grid boundary.
    pub periodic: bool,
}

impl GridSpec {
    pub fn new(px: usize, py: usize, pz: usize) -> Self {
        GridSpec {
            px,
            py,
            pz,
            ranks_per_node: px * py * pz,
            n: 8,
            s: 8,
            periodic: false,
        }
    }

    pub fn with_ranks_per_node(mut self, k: usize) -> Self {
        self.ranks_per_node = k;
        self
    }

    pub fn ranks(&self) -> usize {
        self.px * self.py * self.pz
    }

    pub fn dims(&self) -> [usize; 3] {
        [self.px, self.py, self.pz]
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if self.dims().contains(&0) || self.ranks_per_node == 0 || self.n == 0 || self.s == 0 {
            return Err(SimError::Config(format!(
                "grid {self} needs positive dims, ranks_per_node, n and s"
            )));
        }
        if self.periodic && self.dims().iter().any(|&d| d < 3) {
            return Err(SimError::Config(format!(
                "periodic grid {self} needs every dimension >= 3"
            )));
        }
        Ok(())
    }

    /// x varies fastest.
    pub fn coords(&self, r: Rank) -> [usize; 3] {
        [r % self.px, r / self.px % self.py, r / (self.px * self.py)]
    }

    pub fn rank_at(&self, c: [usize; 3]) -> Rank {
        c[0] + self.px * (c[1] + self.py * c[2])
    }

    pub fn node_of(&self, r: Rank) -> usize {
        r / self.ranks_per_node
    }

    /// Rank at `offset` from `r`, if it exists.
    pub fn neighbor(&self, r: Rank, offset: Offset) -> Option<Rank> {
        let c = self.coords(r);
        let dims = self.dims();
        let mut out = [0; 3];
        for (k, d) in [offset.dx, offset.dy, offset.dz].into_iter().enumerate() {
            let v = c[k] as isize + d as isize;
            let dim = dims[k] as isize;
            out[k] = if (0..dim).contains(&v) {
                v as usize
            } else if self.periodic {
                v.rem_euclid(dim) as usize
            } else {
                return None;
            };
        }
        Some(self.rank_at(out))
    }

    pub fn neighbors(&self, r: Rank) -> Vec<Neighbor> {
        Offset::all()
            .filter_map(|offset| {
                self.neighbor(r, offset).map(|rank| Neighbor {
                    offset,
                    rank,
                    kind: offset.kind(),
                })
            })
            .collect()
    }

    pub fn piece_size(&self, offset: Offset) -> usize {
        message_size(offset.kind(), self.n, self.s)
    }

    /// Byte offset of each piece within a rank's 26-piece surface buffer.
    pub fn layout(&self) -> Layout {
        let mut starts = [0; 27];
        for (i, o) in Offset::all().enumerate() {
            starts[i + 1] = starts[i] + self.piece_size(o);
        }
        Layout { starts }
    }
}

impl fmt::Display for GridSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.px, self.py, self.pz)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Layout {
    starts: [usize; 27],
}

impl Layout {
    pub fn offset(&self, o: Offset) -> usize {
        self.starts[o.index()]
    }

    pub fn len(&self, o: Offset) -> usize {
        let i = o.index();
        self.starts[i + 1] - self.starts[i]
    }

    pub fn total(&self) -> usize {
        self.starts[26]
    }
}

/// Parses `PxQxR`.
pub fn parse_dims(s: &str) -> Result<(usize, usize, usize), String> {
    let parts: Vec<&str> = s.trim().split('x').collect();
    if parts.len() != 3 {
        return Err(format!("grid must have 3 dimensions like 2x2x2, got `{s}`"));
    }
    let mut d = [0; 3];
    for (slot, p) in d.iter_mut().zip(&parts) {
        *slot = p
            .trim()
            .parse()
            .ok()
            .filter(|&v: &usize| v > 0)
            .ok_or_else(|| format!("grid dimension `{p}` is not a positive integer"))?;
    }
    Ok((d[0], d[1], d[2]))
}
