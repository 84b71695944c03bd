//! Two-pass connected-component labeling.

use super::image::BinaryMask;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Connectivity {
    Four,
    #[default]
    Eight,
}

/// Inclusive pixel bounding box.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BoundingBox {
    pub x_min: usize,
    pub y_min: usize,
    pub x_max: usize,
    pub y_max: usize,
}

impl BoundingBox {
    pub fn width(&self) -> usize {
        self.x_max - self.x_min + 1
    }

    pub fn height(&self) -> usize {
        self.y_max - self.y_min + 1
    }
}

/// One labeled region.
#[derive(Debug, Clone, PartialEq)]
pub struct Region {
    pub label: u32,
    pub area: usize,
    pub bbox: BoundingBox,
    pub centroid: (f64, f64),
    /// Member pixels in raster order.
    pub pixels: Vec<(usize, usize)>,
}

/// Label map plus per-region statistics. Labels are `1..=K`, assigned in
/// raster order of each region's first pixel; 0 is background.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledRegions {
    pub width: usize,
    pub height: usize,
    pub labels: Vec<u32>,
    pub regions: Vec<Region>,
}

impl LabeledRegions {
    #[inline]
    pub fn label_at(&self, x: usize, y: usize) -> u32 {
        self.labels[y * self.width + x]
    }

    pub fn len(&self) -> usize {
        self.regions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.regions.is_empty()
    }

    pub fn region_mask(&self, label: u32) -> BinaryMask {
        BinaryMask::from_fn(self.width, self.height, |x, y| self.label_at(x, y) == label)
    }
}

fn find(parent: &mut [u32], mut x: u32) -> u32 {
    while parent[x as usize] != x {
        let p = parent[x as usize];
        parent[x as usize] = parent[p as usize];
        x = p;
    }
    x
}

fn unite(parent: &mut [u32], a: u32, b: u32) {
    let ra = find(parent, a);
    let rb = find(parent, b);
    if ra != rb {
        // Keep the smaller provisional label as root.
        let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
        parent[hi as usize] = lo;
    }
}

pub fn connected_components(mask: &BinaryMask, connectivity: Connectivity) -> LabeledRegions {
    let (w, h) = (mask.width(), mask.height());
    let mut provisional = vec![0u32; w * h];
    let mut parent: Vec<u32> = vec![0];

    let backward: &[(i64, i64)] = match connectivity {
        Connectivity::Four => &[(-1, 0), (0, -1)],
        Connectivity::Eight => &[(-1, 0), (-1, -1), (0, -1), (1, -1)],
    };

    for y in 0..h {
        for x in 0..w {
            if !mask.get(x, y) {
                continue;
            }
            let mut current = 0u32;
            for &(dx, dy) in backward {
                let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                if nx < 0 || ny < 0 || nx >= w as i64 {
                    continue;
                }
                let l = provisional[ny as usize * w + nx as usize];
                if l == 0 {
                    continue;
                }
                if current == 0 {
                    current = l;
                } else if current != l {
                    unite(&mut parent, current, l);
                }
            }
            if current == 0 {
                current = parent.len() as u32;
                parent.push(current);
            }
            provisional[y * w + x] = current;
        }
    }

    // Second pass: resolve roots and renumber in raster order of first pixel.
    let mut final_of_root = vec![0u32; parent.len()];
    let mut labels = vec![0u32; w * h];
    let mut regions: Vec<Region> = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let p = provisional[y * w + x];
            if p == 0 {
                continue;
            }
            let root = find(&mut parent, p) as usize;
            if final_of_root[root] == 0 {
                regions.push(Region {
                    label: regions.len() as u32 + 1,
                    area: 0,
                    bbox: BoundingBox {
                        x_min: x,
                        y_min: y,
                        x_max: x,
                        y_max: y,
                    },
                    centroid: (0.0, 0.0),
                    pixels: Vec::new(),
                });
                final_of_root[root] = regions.len() as u32;
            }
            let label = final_of_root[root];
            labels[y * w + x] = label;
            let r = &mut regions[label as usize - 1];
            r.area += 1;
            r.bbox.x_min = r.bbox.x_min.min(x);
            r.bbox.x_max = r.bbox.x_max.max(x);
            r.bbox.y_max = r.bbox.y_max.max(y);
            r.centroid.0 += x as f64;
            r.centroid.1 += y as f64;
            r.pixels.push((x, y));
        }
    }
    for r in &mut regions {
        r.centroid.0 /= r.area as f64;
        r.centroid.1 /= r.area as f64;
    }

    LabeledRegions {
        width: w,
        height: h,
        labels,
        regions,
    }
}
