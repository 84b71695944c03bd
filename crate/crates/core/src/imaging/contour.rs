//! Ordered contour chains from thin edge maps.

use std::collections::VecDeque;

use super::components::{connected_components, Connectivity, Region};
use super::image::BinaryMask;

/// Ordered 8-connected pixel chain.
///
/// `closed` holds exactly when the chain's pixels enclose at least one
/// 4-connected pocket that cannot reach the outside of the image. Closed
/// chains are outer boundary traces (first and last points are 8-neighbours);
/// open chains run from one extremity to the other.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Contour {
    pub points: Vec<(usize, usize)>,
    pub closed: bool,
}

impl Contour {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn centroid(&self) -> (f64, f64) {
        let n = self.points.len().max(1) as f64;
        let (sx, sy) = self
            .points
            .iter()
            .fold((0.0, 0.0), |(a, b), &(x, y)| (a + x as f64, b + y as f64));
        (sx / n, sy / n)
    }

    /// Chain pixels plus every pixel they enclose.
    pub fn filled(&self, width: usize, height: usize) -> BinaryMask {
        let mut wall = BinaryMask::new(width, height);
        for &(x, y) in &self.points {
            wall.set(x, y, true);
        }
        let outside = outside_of(&wall);
        BinaryMask::from_fn(width, height, |x, y| !outside.get(x, y))
    }
}

#[cfg(test)]
pub(crate) fn are_8_neighbors(a: (usize, usize), b: (usize, usize)) -> bool {
    a != b && a.0.abs_diff(b.0) <= 1 && a.1.abs_diff(b.1) <= 1
}

/// Pixels 4-reachable from beyond the image border without crossing `wall`.
fn outside_of(wall: &BinaryMask) -> BinaryMask {
    let (w, h) = (wall.width(), wall.height());
    let mut seen = BinaryMask::new(w, h);
    let mut queue = VecDeque::new();
    let push = |x: usize, y: usize, seen: &mut BinaryMask, q: &mut VecDeque<(usize, usize)>| {
        if !wall.get(x, y) && !seen.get(x, y) {
            seen.set(x, y, true);
            q.push_back((x, y));
        }
    };
    for x in 0..w {
        push(x, 0, &mut seen, &mut queue);
        push(x, h - 1, &mut seen, &mut queue);
    }
    for y in 0..h {
        push(0, y, &mut seen, &mut queue);
        push(w - 1, y, &mut seen, &mut queue);
    }
    while let Some((x, y)) = queue.pop_front() {
        for (dx, dy) in [(1i64, 0i64), (-1, 0), (0, 1), (0, -1)] {
            let (nx, ny) = (x as i64 + dx, y as i64 + dy);
            if nx >= 0 && ny >= 0 && nx < w as i64 && ny < h as i64 {
                push(nx as usize, ny as usize, &mut seen, &mut queue);
            }
        }
    }
    seen
}

/// Splits an edge map into 8-connected pieces and orders each into a chain.
pub fn trace_contours(edges: &BinaryMask) -> Vec<Contour> {
    let labels = connected_components(edges, Connectivity::Eight);
    labels
        .regions
        .iter()
        .map(|region| {
            let local = LocalPatch::new(region);
            if local.encloses_pocket() {
                Contour {
                    points: local.moore_trace(),
                    closed: true,
                }
            } else {
                Contour {
                    points: local.longest_path(),
                    closed: false,
                }
            }
        })
        .collect()
}

/// A region copied into its bounding box padded by one pixel, so the padding
/// ring stands in for "outside the image".
struct LocalPatch {
    x0: i64,
    y0: i64,
    w: usize,
    h: usize,
    on: Vec<bool>,
    first: (usize, usize),
}

const RING: [(i64, i64); 8] = [(-1, 0), (-1, -1), (0, -1), (1, -1), (1, 0), (1, 1), (0, 1), (-1, 1)];

impl LocalPatch {
    fn new(region: &Region) -> Self {
        let x0 = region.bbox.x_min as i64 - 1;
        let y0 = region.bbox.y_min as i64 - 1;
        let w = region.bbox.width() + 2;
        let h = region.bbox.height() + 2;
        let mut on = vec![false; w * h];
        for &(x, y) in &region.pixels {
            on[(y as i64 - y0) as usize * w + (x as i64 - x0) as usize] = true;
        }
        let first = region.pixels[0];
        Self {
            x0,
            y0,
            w,
            h,
            on,
            first: ((first.0 as i64 - x0) as usize, (first.1 as i64 - y0) as usize),
        }
    }

    #[inline]
    fn at(&self, x: i64, y: i64) -> bool {
        x >= 0 && y >= 0 && x < self.w as i64 && y < self.h as i64 && self.on[y as usize * self.w + x as usize]
    }

    fn global(&self, p: (usize, usize)) -> (usize, usize) {
        ((p.0 as i64 + self.x0) as usize, (p.1 as i64 + self.y0) as usize)
    }

    fn encloses_pocket(&self) -> bool {
        let mut seen = vec![false; self.w * self.h];
        let mut queue = VecDeque::new();
        // The padding ring is all background and connected around the patch.
        seen[0] = true;
        queue.push_back((0i64, 0i64));
        let mut reached = 1usize;
        while let Some((x, y)) = queue.pop_front() {
            for (dx, dy) in [(1i64, 0i64), (-1, 0), (0, 1), (0, -1)] {
                let (nx, ny) = (x + dx, y + dy);
                if nx < 0 || ny < 0 || nx >= self.w as i64 || ny >= self.h as i64 {
                    continue;
                }
                let i = ny as usize * self.w + nx as usize;
                if !self.on[i] && !seen[i] {
                    seen[i] = true;
                    reached += 1;
                    queue.push_back((nx, ny));
                }
            }
        }
        let background = self.on.iter().filter(|&&b| !b).count();
        reached < background
    }

    /// One Moore step: scan the 8 neighbours of `c` clockwise, starting after
    /// the backtrack cell `b`. Returns the next pixel and its backtrack cell.
    fn moore_step(&self, c: (i64, i64), b: (i64, i64)) -> Option<((i64, i64), (i64, i64))> {
        let d0 = RING
            .iter()
            .position(|&(dx, dy)| (c.0 + dx, c.1 + dy) == b)
            .expect("backtrack cell is a neighbour");
        (1..=8).find_map(|k| {
            let d = (d0 + k) % 8;
            let p = (c.0 + RING[d].0, c.1 + RING[d].1);
            self.at(p.0, p.1).then(|| {
                let e = (d0 + k - 1) % 8;
                (p, (c.0 + RING[e].0, c.1 + RING[e].1))
            })
        })
    }

    /// Moore-neighbour trace of the outer boundary from the raster-first
    /// pixel, with Jacob's stopping criterion.
    fn moore_trace(&self) -> Vec<(usize, usize)> {
        let start = (self.first.0 as i64, self.first.1 as i64);
        // The raster-first pixel always has background to its west.
        let west = (start.0 - 1, start.1);
        let mut chain = vec![start];
        let Some(first) = self.moore_step(start, west) else {
            return vec![self.global(self.first)];
        };
        let (mut c, mut b) = first;
        chain.push(c);
        let limit = 8 * self.on.len();
        for _ in 0..limit {
            let Some(next) = self.moore_step(c, b) else {
                break;
            };
            if c == start && next == first {
                break;
            }
            (c, b) = next;
            chain.push(c);
        }
        if chain.len() > 1 && chain.last() == Some(&start) {
            chain.pop();
        }
        chain
            .into_iter()
            .map(|(x, y)| self.global((x as usize, y as usize)))
            .collect()
    }

    /// Shortest 8-connected path between the two extremities found by a
    /// double breadth-first sweep.
    fn longest_path(&self) -> Vec<(usize, usize)> {
        let bfs = |from: (usize, usize)| -> (Vec<usize>, (usize, usize)) {
            let mut parent = vec![usize::MAX; self.w * self.h];
            let s = from.1 * self.w + from.0;
            parent[s] = s;
            let mut queue = VecDeque::from([from]);
            let mut last = from;
            while let Some((x, y)) = queue.pop_front() {
                last = (x, y);
                for &(dx, dy) in &RING {
                    let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                    if self.at(nx, ny) {
                        let i = ny as usize * self.w + nx as usize;
                        if parent[i] == usize::MAX {
                            parent[i] = y * self.w + x;
                            queue.push_back((nx as usize, ny as usize));
                        }
                    }
                }
            }
            (parent, last)
        };
        let (_, a) = bfs(self.first);
        let (parent, b) = bfs(a);
        let mut path = Vec::new();
        let mut i = b.1 * self.w + b.0;
        loop {
            path.push(self.global((i % self.w, i / self.w)));
            let p = parent[i];
            if p == i {
                break;
            }
            i = p;
        }
        path
    }
}
