//! Ring geometry and the contiguous arcs that label the swap basis.
//!
//! Sites are `0..L`, edges are `(i, i+1 mod L)`. An [`Arc`] is a run of consecutive
//! sites; the empty arc and the full ring are the two sinks of the second-moment
//! dynamics. Arcs are indexed by length, then start:
//!
//! ```text
//! index 0                  -> ∅
//! index 1 + (len-1)*L + s  -> {s, s+1, ..., s+len-1}   for 1 <= len <= L-1
//! index L(L-1)+1           -> V
//! ```

use std::collections::VecDeque;
use std::fmt;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ChainGeometry {
    sites: usize,
    local_dim: usize,
}

/// A contiguous run of ring sites, stored in canonical form.
///
/// `len == 0` is the empty set and `len == L` the full ring; both carry `start == 0`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Arc {
    start: usize,
    len: usize,
}

impl Arc {
    pub fn empty() -> Self {
        Arc { start: 0, len: 0 }
    }

    pub fn start(&self) -> usize {
        self.start
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn contains(&self, geom: &ChainGeometry, site: usize) -> bool {
        (site + geom.sites - self.start) % geom.sites < self.len
    }

    pub fn is_sink(&self, geom: &ChainGeometry) -> bool {
        self.len == 0 || self.len == geom.sites
    }

    pub fn sites<'a>(&'a self, geom: &'a ChainGeometry) -> impl Iterator<Item = usize> + 'a {
        (0..self.len).map(move |k| (self.start + k) % geom.sites)
    }

    pub fn label(&self, geom: &ChainGeometry) -> String {
        ArcLabel { arc: *self, geom: *geom }.to_string()
    }
}

struct ArcLabel {
    arc: Arc,
    geom: ChainGeometry,
}

impl fmt::Display for ArcLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.arc.len == 0 {
            return f.write_str("∅");
        }
        if self.arc.len == self.geom.sites {
            return f.write_str("V");
        }
        f.write_str("{")?;
        for (k, s) in self.arc.sites(&self.geom).enumerate() {
            if k > 0 {
                f.write_str(",")?;
            }
            write!(f, "{s}")?;
        }
        f.write_str("}")
    }
}

impl ChainGeometry {
    pub fn new(sites: usize, local_dim: usize) -> Result<Self> {
        if sites < 3 {
            return Err(Error::Geometry(format!("need at least 3 sites, got {sites}")));
        }
        if local_dim < 2 {
            return Err(Error::Geometry(format!("local dimension must be at least 2, got {local_dim}")));
        }
        Ok(ChainGeometry { sites, local_dim })
    }

    pub fn sites(&self) -> usize {
        self.sites
    }

    pub fn local_dim(&self) -> usize {
        self.local_dim
    }

    /// `d^L`, if it fits in a `usize`.
    pub fn hilbert_dim(&self) -> Option<usize> {
        (0..self.sites).try_fold(1usize, |acc, _| acc.checked_mul(self.local_dim))
    }

    /// `L(L-1)+2`.
    pub fn num_arcs(&self) -> usize {
        self.sites * (self.sites - 1) + 2
    }

    /// The edge `(i, i+1 mod L)`.
    pub fn edge(&self, index: usize) -> (usize, usize) {
        (index, (index + 1) % self.sites)
    }

    /// Ring distance between two sites.
    pub fn distance(&self, p: usize, q: usize) -> usize {
        let diff = p.abs_diff(q) % self.sites;
        diff.min(self.sites - diff)
    }

    pub fn full(&self) -> Arc {
        Arc { start: 0, len: self.sites }
    }

    /// Canonical arc of `len` sites beginning at `start`.
    pub fn arc(&self, start: usize, len: usize) -> Result<Arc> {
        if start >= self.sites {
            return Err(Error::InvalidArgument(format!("arc start {start} outside ring of {} sites", self.sites)));
        }
        if len > self.sites {
            return Err(Error::InvalidArgument(format!("arc length {len} exceeds ring size {}", self.sites)));
        }
        Ok(self.canonical(start, len))
    }

    fn canonical(&self, start: usize, len: usize) -> Arc {
        if len == 0 || len == self.sites {
            Arc { start: 0, len }
        } else {
            Arc { start: start % self.sites, len }
        }
    }

    /// Every contiguous arc, ordered by length and then start.
    pub fn arcs(&self) -> Vec<Arc> {
        (0..self.num_arcs()).map(|i| self.arc_at(i)).collect()
    }

    pub fn arc_index(&self, arc: &Arc) -> usize {
        match arc.len {
            0 => 0,
            l if l == self.sites => self.num_arcs() - 1,
            l => 1 + (l - 1) * self.sites + arc.start,
        }
    }

    pub fn arc_at(&self, index: usize) -> Arc {
        assert!(index < self.num_arcs(), "arc index {index} out of range");
        if index == 0 {
            Arc::empty()
        } else if index == self.num_arcs() - 1 {
            self.full()
        } else {
            let k = index - 1;
            Arc { start: k % self.sites, len: k / self.sites + 1 }
        }
    }

    /// The two arcs `{p-1, p}` and `{p, p+1}` where the swap expansion is seeded.
    pub fn fiducials(&self, p: usize) -> (Arc, Arc) {
        let left = self.canonical((p + self.sites - 1) % self.sites, 2);
        let right = self.canonical(p % self.sites, 2);
        (left, right)
    }

    /// One-step moves of a non-sink arc, in the order grow-left, grow-right,
    /// shrink-left, shrink-right. Coinciding results are listed with multiplicity.
    pub fn derived_neighbors(&self, arc: &Arc) -> Result<[Arc; 4]> {
        if arc.is_sink(self) {
            return Err(Error::InvalidArgument(format!("sink arc {} has no off-diagonal moves", arc.label(self))));
        }
        let l = self.sites;
        Ok([
            self.canonical((arc.start + l - 1) % l, arc.len + 1),
            self.canonical(arc.start, arc.len + 1),
            self.canonical((arc.start + 1) % l, arc.len - 1),
            self.canonical(arc.start, arc.len - 1),
        ])
    }

    /// Breadth-first distances from `from` to every arc (by arc index).
    ///
    /// Sinks are reachable but have no outgoing moves, so no path passes through them.
    pub fn derived_distances_from(&self, from: &Arc) -> Vec<Option<usize>> {
        let mut dist = vec![None; self.num_arcs()];
        let mut queue = VecDeque::new();
        dist[self.arc_index(from)] = Some(0);
        queue.push_back(*from);
        while let Some(arc) = queue.pop_front() {
            if arc.is_sink(self) {
                continue;
            }
            let next = dist[self.arc_index(&arc)].map(|d| d + 1);
            for nb in self.derived_neighbors(&arc).expect("non-sink arc") {
                let slot = &mut dist[self.arc_index(&nb)];
                if slot.is_none() {
                    *slot = next;
                    queue.push_back(nb);
                }
            }
        }
        dist
    }

    /// Graph distance from `a` to `b` in the derived arc graph; `None` if unreachable.
    pub fn derived_distance(&self, a: &Arc, b: &Arc) -> Option<usize> {
        self.derived_distances_from(a)[self.arc_index(b)]
    }
}
