//! Automatic scribble generation: connected components, thinning, spur
//! pruning.

use std::collections::VecDeque;

use ndarray::{Array2, ArrayView2};

use crate::error::Result;
use crate::losses::ScribbleMap;

/// Skeleton branches shorter than this many pixels are removed.
pub const MIN_SPUR_LEN: usize = 5;

const NEIGHBOURS: [(isize, isize); 8] = [(-1, 0), (-1, 1), (0, 1), (1, 1), (1, 0), (1, -1), (0, -1), (-1, -1)];

fn at(mask: &Array2<bool>, y: isize, x: isize) -> bool {
    let (h, w) = mask.dim();
    y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w && mask[[y as usize, x as usize]]
}

/// A pixel whose set neighbours form a single arc of at most three.
fn is_endpoint(mask: &Array2<bool>, y: usize, x: usize) -> bool {
    let p: Vec<bool> = NEIGHBOURS
        .iter()
        .map(|(dy, dx)| at(mask, y as isize + dy, x as isize + dx))
        .collect();
    let count = p.iter().filter(|&&v| v).count();
    let arcs = (0..8).filter(|&i| !p[i] && p[(i + 1) % 8]).count();
    count == 0 || (count <= 3 && arcs == 1)
}

/// 8-connected components of `mask`, largest first (ties by first pixel in
/// raster order).
pub fn connected_components(mask: ArrayView2<bool>) -> Vec<Vec<(usize, usize)>> {
    let (h, w) = mask.dim();
    let mut seen = Array2::from_elem((h, w), false);
    let mut comps = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if !mask[[y, x]] || seen[[y, x]] {
                continue;
            }
            let mut comp = Vec::new();
            let mut queue = VecDeque::from([(y, x)]);
            seen[[y, x]] = true;
            while let Some((cy, cx)) = queue.pop_front() {
                comp.push((cy, cx));
                for (dy, dx) in NEIGHBOURS {
                    let (ny, nx) = (cy as isize + dy, cx as isize + dx);
                    if ny < 0 || nx < 0 || ny as usize >= h || nx as usize >= w {
                        continue;
                    }
                    let (ny, nx) = (ny as usize, nx as usize);
                    if mask[[ny, nx]] && !seen[[ny, nx]] {
                        seen[[ny, nx]] = true;
                        queue.push_back((ny, nx));
                    }
                }
            }
            comps.push(comp);
        }
    }
    comps.sort_by(|a, b| b.len().cmp(&a.len()));
    comps
}

/// Zhang-Suen thinning. Pixels outside the image count as background.
pub fn thin(mask: &Array2<bool>) -> Array2<bool> {
    let mut m = mask.clone();
    let (h, w) = m.dim();
    loop {
        let mut changed = false;
        for pass in 0..2 {
            let mut remove = Vec::new();
            for y in 0..h {
                for x in 0..w {
                    if !m[[y, x]] {
                        continue;
                    }
                    let p: Vec<bool> = NEIGHBOURS
                        .iter()
                        .map(|(dy, dx)| at(&m, y as isize + dy, x as isize + dx))
                        .collect();
                    let b = p.iter().filter(|&&v| v).count();
                    if !(2..=6).contains(&b) {
                        continue;
                    }
                    let a = (0..8).filter(|&i| !p[i] && p[(i + 1) % 8]).count();
                    if a != 1 {
                        continue;
                    }
                    // p[0]=N, p[2]=E, p[4]=S, p[6]=W
                    let ok = if pass == 0 {
                        !(p[0] && p[2] && p[4]) && !(p[2] && p[4] && p[6])
                    } else {
                        !(p[0] && p[2] && p[6]) && !(p[0] && p[4] && p[6])
                    };
                    if ok {
                        remove.push((y, x));
                    }
                }
            }
            changed |= !remove.is_empty();
            for (y, x) in remove {
                m[[y, x]] = false;
            }
        }
        if !changed {
            return m;
        }
    }
}

/// Morphological pruning: strips endpoints `min_len - 1` times, then
/// regrows the surviving ends along the original skeleton by the same
/// amount, which removes spurs shorter than `min_len`. A skeleton that
/// would vanish entirely is returned unchanged.
pub fn prune_spurs(skeleton: &Array2<bool>, min_len: usize) -> Array2<bool> {
    let (h, w) = skeleton.dim();
    let steps = min_len.saturating_sub(1);
    let endpoints = |m: &Array2<bool>| -> Vec<(usize, usize)> {
        m.indexed_iter()
            .filter(|&((y, x), &on)| on && is_endpoint(m, y, x))
            .map(|(p, _)| p)
            .collect()
    };
    let mut core = skeleton.clone();
    for _ in 0..steps {
        for (y, x) in endpoints(&core) {
            core[[y, x]] = false;
        }
    }
    if !core.iter().any(|&v| v) {
        return skeleton.clone();
    }
    let mut grown = Array2::from_elem((h, w), false);
    for (y, x) in endpoints(&core) {
        grown[[y, x]] = true;
    }
    for _ in 0..steps {
        let prev = grown.clone();
        for ((y, x), on) in grown.indexed_iter_mut() {
            if *on || !skeleton[[y, x]] {
                continue;
            }
            *on = NEIGHBOURS
                .iter()
                .any(|(dy, dx)| at(&prev, y as isize + dy, x as isize + dx));
        }
    }
    core.zip_mut_with(&grown, |c, &g| *c |= g);
    core
}

/// Pixel of `comp` closest to its centroid.
fn central_pixel(comp: &[(usize, usize)]) -> (usize, usize) {
    let n = comp.len() as f64;
    let cy = comp.iter().map(|p| p.0 as f64).sum::<f64>() / n;
    let cx = comp.iter().map(|p| p.1 as f64).sum::<f64>() / n;
    *comp
        .iter()
        .min_by(|a, b| {
            let da = (a.0 as f64 - cy).powi(2) + (a.1 as f64 - cx).powi(2);
            let db = (b.0 as f64 - cy).powi(2) + (b.1 as f64 - cx).powi(2);
            da.total_cmp(&db)
        })
        .expect("component is nonempty")
}

/// Scribbles from a dense label map: for every class, the skeletons of its
/// two largest connected components. Other pixels are unknown.
pub fn synth_scribble(dense: ArrayView2<u32>, num_classes: usize) -> Result<ScribbleMap> {
    let (h, w) = dense.dim();
    let mut labels = vec![num_classes as u32; h * w];
    for c in 0..num_classes as u32 {
        let mask = dense.mapv(|v| v == c);
        for comp in connected_components(mask.view()).into_iter().take(2) {
            let mut region = Array2::from_elem((h, w), false);
            for &(y, x) in &comp {
                region[[y, x]] = true;
            }
            let skel = prune_spurs(&thin(&region), MIN_SPUR_LEN);
            let mut any = false;
            for ((y, x), &on) in skel.indexed_iter() {
                if on {
                    labels[y * w + x] = c;
                    any = true;
                }
            }
            if !any {
                let (y, x) = central_pixel(&comp);
                labels[y * w + x] = c;
            }
        }
    }
    ScribbleMap::new(labels, h, w, num_classes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn components_are_sorted_by_size() {
        let mut m = Array2::from_elem((6, 6), false);
        m[[0, 0]] = true;
        for y in 3..6 {
            for x in 3..6 {
                m[[y, x]] = true;
            }
        }
        let comps = connected_components(m.view());
        assert_eq!(comps.len(), 2);
        assert_eq!(comps[0].len(), 9);
        assert_eq!(comps[1].len(), 1);
    }

    #[test]
    fn diagonal_pixels_are_connected() {
        let mut m = Array2::from_elem((3, 3), false);
        m[[0, 0]] = true;
        m[[1, 1]] = true;
        assert_eq!(connected_components(m.view()).len(), 1);
    }

    #[test]
    fn thinning_a_bar_leaves_a_line() {
        let mut m = Array2::from_elem((7, 20), false);
        for y in 2..5 {
            for x in 2..18 {
                m[[y, x]] = true;
            }
        }
        let t = thin(&m);
        let n = t.iter().filter(|&&v| v).count();
        assert!(n > 5 && n < 20, "{n}");
        for ((y, x), &on) in t.indexed_iter() {
            if on {
                assert!(m[[y, x]]);
            }
        }
    }

    #[test]
    fn short_spur_is_pruned() {
        let mut s = Array2::from_elem((11, 20), false);
        for x in 0..20 {
            s[[5, x]] = true;
        }
        for y in 2..5 {
            s[[y, 10]] = true;
        }
        let p = prune_spurs(&s, MIN_SPUR_LEN);
        assert!(!p[[2, 10]] && !p[[4, 10]]);
        assert!(p[[5, 10]]);
    }

    #[test]
    fn background_only_map() {
        let dense = Array2::<u32>::zeros((16, 16));
        let s = synth_scribble(dense.view(), 4).unwrap();
        assert!(s.labels.iter().all(|&v| v == 0 || v == 4));
        assert!(s.annotated_count() > 0);
    }
}
