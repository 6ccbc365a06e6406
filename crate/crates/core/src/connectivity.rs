//! Connected-component counting on binary frames (two-pass union-find).

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Connectivity {
    Four,
    #[default]
    Eight,
}

struct DisjointSet {
    parent: Vec<u32>,
}

impl DisjointSet {
    fn with_capacity(n: usize) -> Self {
        Self {
            parent: Vec::with_capacity(n),
        }
    }

    fn make(&mut self) -> u32 {
        let id = self.parent.len() as u32;
        self.parent.push(id);
        id
    }

    fn find(&mut self, mut x: u32) -> u32 {
        while self.parent[x as usize] != x {
            let next = self.parent[x as usize];
            self.parent[x as usize] = self.parent[next as usize];
            x = next;
        }
        x
    }

    fn union(&mut self, a: u32, b: u32) -> u32 {
        let (ra, rb) = (self.find(a), self.find(b));
        let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
        self.parent[hi as usize] = lo;
        lo
    }
}

/// Labels the foreground of a row-major `rows x cols` frame.
///
/// Returns per-pixel labels (0 = background, components numbered from 1 in
/// raster order of their first pixel) and the number of components.
pub fn label_components(
    frame: &[u8],
    rows: usize,
    cols: usize,
    connectivity: Connectivity,
) -> (Vec<u32>, usize) {
    assert_eq!(frame.len(), rows * cols, "frame length does not match shape");
    const NONE: u32 = u32::MAX;
    let mut provisional = vec![NONE; frame.len()];
    let mut sets = DisjointSet::with_capacity(64);

    for m in 0..rows {
        for n in 0..cols {
            let i = m * cols + n;
            if frame[i] == 0 {
                continue;
            }
            let mut label = NONE;
            let mut visit = |j: usize, label: &mut u32| {
                let l = provisional[j];
                if l != NONE {
                    *label = if *label == NONE { l } else { sets.union(*label, l) };
                }
            };
            if n > 0 {
                visit(i - 1, &mut label);
            }
            if m > 0 {
                visit(i - cols, &mut label);
                if connectivity == Connectivity::Eight {
                    if n > 0 {
                        visit(i - cols - 1, &mut label);
                    }
                    if n + 1 < cols {
                        visit(i - cols + 1, &mut label);
                    }
                }
            }
            provisional[i] = if label == NONE { sets.make() } else { label };
        }
    }

    let mut dense = vec![0u32; sets.parent.len()];
    let mut next = 0u32;
    let labels = provisional
        .iter()
        .map(|&l| {
            if l == NONE {
                return 0;
            }
            let root = sets.find(l) as usize;
            if dense[root] == 0 {
                next += 1;
                dense[root] = next;
            }
            dense[root]
        })
        .collect();
    (labels, next as usize)
}

/// Number of connected foreground components in a frame.
pub fn count_components(frame: &[u8], rows: usize, cols: usize, connectivity: Connectivity) -> usize {
    label_components(frame, rows, cols, connectivity).1
}
