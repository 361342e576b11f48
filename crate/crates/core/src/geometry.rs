//! Structure maps, instance edges, the stage-2 semantic condition and
//! marker-controlled watershed.

use std::cmp::Reverse;
use std::collections::BinaryHeap;

use crate::dataset::check_instance_consistency;
use crate::error::{ensure, Result};
use crate::field::Field;
use crate::grid::{connected_components, Grid, InstanceGrid, LabelGrid};

/// Marker threshold on the energy map.
pub const TAU_MARKER: f32 = 0.4;
/// Smallest marker component kept, in pixels.
pub const MIN_MARKER: usize = 4;
/// Per-pixel offset drop that maps to full boundary energy.
pub const ENERGY_SCALE: f32 = 0.4;

/// `[H, W, 3]`: foreground sign, horizontal and vertical centroid offsets.
pub fn make_structure_map(label: &LabelGrid, instance: &InstanceGrid) -> Result<Field> {
    check_instance_consistency(label, instance)?;
    let (h, w) = label.dims();
    let n = instance.data().iter().copied().max().unwrap_or(0) as usize;
    let mut sum = vec![(0.0f64, 0.0f64, 0usize); n + 1];
    for r in 0..h {
        for c in 0..w {
            let id = instance.get(r, c) as usize;
            sum[id].0 += r as f64;
            sum[id].1 += c as f64;
            sum[id].2 += 1;
        }
    }
    let cent: Vec<(f64, f64)> = sum
        .iter()
        .map(|&(sr, sc, k)| if k == 0 { (0.0, 0.0) } else { (sr / k as f64, sc / k as f64) })
        .collect();
    let mut span = vec![(0.0f64, 0.0f64); n + 1];
    for r in 0..h {
        for c in 0..w {
            let id = instance.get(r, c) as usize;
            if id > 0 {
                span[id].0 = span[id].0.max((c as f64 - cent[id].1).abs());
                span[id].1 = span[id].1.max((r as f64 - cent[id].0).abs());
            }
        }
    }
    let mut out = Vec::with_capacity(h * w * 3);
    for r in 0..h {
        for c in 0..w {
            let id = instance.get(r, c) as usize;
            if id == 0 {
                out.extend([-1.0, 0.0, 0.0]);
            } else {
                let sx = if span[id].0 > 0.0 { span[id].0 } else { 1.0 };
                let sy = if span[id].1 > 0.0 { span[id].1 } else { 1.0 };
                let hx = ((c as f64 - cent[id].1) / sx).clamp(-1.0, 1.0);
                let vy = ((r as f64 - cent[id].0) / sy).clamp(-1.0, 1.0);
                out.extend([1.0, hx as f32, vy as f32]);
            }
        }
    }
    Field::new(vec![h, w, 3], out)
}

/// `[H, W]` with 1 on instance pixels bordering another id or the image edge.
pub fn instance_edge_map(instance: &InstanceGrid) -> Field {
    let (h, w) = instance.dims();
    let mut out = vec![0.0f32; h * w];
    for r in 0..h {
        for c in 0..w {
            let id = instance.get(r, c);
            if id == 0 {
                continue;
            }
            let border = r == 0 || c == 0 || r + 1 == h || c + 1 == w;
            if border || instance.neighbors4(r, c).any(|(rr, cc)| instance.get(rr, cc) != id) {
                out[r * w + c] = 1.0;
            }
        }
    }
    Field::new(vec![h, w], out).expect("binary values")
}

/// `[H, W, K+3]`: one-hot labels, the two offset channels, the edge map.
pub fn assemble_semantic_condition(label: &LabelGrid, instance: &InstanceGrid, k: usize) -> Result<Field> {
    for &l in label.data() {
        ensure!((l as usize) < k, Invalid, "label id {l} >= K={k}");
    }
    let sm = make_structure_map(label, instance)?;
    let edge = instance_edge_map(instance);
    let (h, w) = label.dims();
    let mut out = Vec::with_capacity(h * w * (k + 3));
    for p in 0..h * w {
        let l = label.data()[p] as usize;
        out.extend((0..k).map(|i| (i == l) as u8 as f32));
        out.push(sm.data()[p * 3 + 1]);
        out.push(sm.data()[p * 3 + 2]);
        out.push(edge.data()[p]);
    }
    Field::new(vec![h, w, k + 3], out)
}

/// Signed 3×3 Sobel derivative (scaled to a per-pixel slope) with edge replication.
fn sobel(ch: &[f32], h: usize, w: usize, along_x: bool) -> Vec<f32> {
    let at = |r: isize, c: isize| {
        let r = r.clamp(0, h as isize - 1) as usize;
        let c = c.clamp(0, w as isize - 1) as usize;
        ch[r * w + c]
    };
    let mut out = vec![0.0f32; h * w];
    for r in 0..h as isize {
        for c in 0..w as isize {
            let mut g = 0.0;
            for (d, wt) in [(-1isize, 1.0f32), (0, 2.0), (1, 1.0)] {
                g += if along_x {
                    wt * (at(r + d, c + 1) - at(r + d, c - 1))
                } else {
                    wt * (at(r + 1, c + d) - at(r - 1, c + d))
                };
            }
            out[r as usize * w + c as usize] = g / 8.0;
        }
    }
    out
}

/// Boundary energy in `[0, 1]`.
///
/// Inside an instance the offsets increase along their own axis; at instance
/// boundaries they drop. Only the decreasing part of each derivative counts,
/// so small nuclei with steep interiors are not mistaken for boundaries. The
/// drop per pixel is divided by [`ENERGY_SCALE`] and saturates at 1.
pub fn boundary_energy(sm: &Field) -> Result<Vec<f32>> {
    let s = sm.shape();
    ensure!(s.len() == 3 && s[2] == 3, Shape, "structure map must be [H, W, 3], got {:?}", s);
    let (h, w) = (s[0], s[1]);
    let hx: Vec<f32> = sm.rows().map(|r| r[1]).collect();
    let vy: Vec<f32> = sm.rows().map(|r| r[2]).collect();
    let gx = sobel(&hx, h, w, true);
    let gy = sobel(&vy, h, w, false);
    let mut e: Vec<f32> = gx.iter().zip(&gy).map(|(&a, &b)| (-a).max(-b).max(0.0)).collect();
    e.iter_mut().for_each(|v| *v = (*v / ENERGY_SCALE).min(1.0));
    Ok(e)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Extraction {
    pub instance: InstanceGrid,
    /// Class of instance `i + 1`.
    pub classes: Vec<u8>,
    /// Set when the foreground was non-empty but no instance survived.
    pub no_markers: bool,
}

/// Watershed instances from a structure map; classes by majority vote of `label`.
pub fn extract_instances(sm: &Field, label: &LabelGrid) -> Result<Extraction> {
    let (h, w) = label.dims();
    ensure!(sm.shape() == [h, w, 3], Shape, "structure map {:?} vs label {h}x{w}", sm.shape());
    let energy = boundary_energy(sm)?;
    let fg: Vec<bool> = sm.rows().map(|r| r[0] > 0.0).collect();
    let fg_grid = Grid::from_vec(h, w, fg.iter().map(|&b| b as u8).collect())?;
    let (fg_cc, n_fg) = connected_components(&fg_grid, |v| v > 0, |_, _| true);
    let cand = Grid::from_vec(
        h,
        w,
        (0..h * w).map(|p| (fg[p] && energy[p] < TAU_MARKER) as u8).collect(),
    )?;
    let (mk, n_mk) = connected_components(&cand, |v| v > 0, |_, _| true);
    let mut size = vec![0usize; n_mk as usize + 1];
    for &m in mk.data() {
        size[m as usize] += 1;
    }
    // Renumber surviving markers in raster order.
    let mut remap = vec![0u32; n_mk as usize + 1];
    let mut basins = 0u32;
    let mut lab = vec![0u32; h * w];
    for p in 0..h * w {
        let m = mk.data()[p] as usize;
        if m > 0 && size[m] >= MIN_MARKER {
            if remap[m] == 0 {
                basins += 1;
                remap[m] = basins;
            }
            lab[p] = remap[m];
        }
    }
    // Foreground components without a marker are seeded at their lowest-energy pixel.
    let mut has = vec![false; n_fg as usize + 1];
    for p in 0..h * w {
        if lab[p] > 0 {
            has[fg_cc.data()[p] as usize] = true;
        }
    }
    let mut seed: Vec<Option<usize>> = vec![None; n_fg as usize + 1];
    for p in 0..h * w {
        let c = fg_cc.data()[p] as usize;
        if c > 0 && !has[c] && seed[c].is_none_or(|q| energy[p] < energy[q]) {
            seed[c] = Some(p);
        }
    }
    for p in seed.into_iter().flatten() {
        basins += 1;
        lab[p] = basins;
    }
    // Priority flood over 4-neighbours, ordered by (energy, insertion, pixel).
    let mut heap = BinaryHeap::new();
    let mut counter = 0u64;
    let push = |heap: &mut BinaryHeap<_>, counter: &mut u64, p: usize, from: u32| {
        heap.push(Reverse((energy[p].to_bits(), *counter, p, from)));
        *counter += 1;
    };
    for p in 0..h * w {
        if lab[p] > 0 {
            for (r, c) in fg_grid.neighbors4(p / w, p % w) {
                let q = r * w + c;
                if fg[q] && lab[q] == 0 {
                    push(&mut heap, &mut counter, q, lab[p]);
                }
            }
        }
    }
    while let Some(Reverse((_, _, p, from))) = heap.pop() {
        if lab[p] != 0 {
            continue;
        }
        lab[p] = from;
        for (r, c) in fg_grid.neighbors4(p / w, p % w) {
            let q = r * w + c;
            if fg[q] && lab[q] == 0 {
                push(&mut heap, &mut counter, q, from);
            }
        }
    }
    // Majority vote over nucleus classes; instances with no nucleus votes are dropped.
    let k = label.data().iter().copied().max().unwrap_or(0) as usize + 1;
    let mut votes = vec![vec![0usize; k]; basins as usize + 1];
    for p in 0..h * w {
        if lab[p] > 0 {
            votes[lab[p] as usize][label.data()[p] as usize] += 1;
        }
    }
    let mut keep = vec![0u32; basins as usize + 1];
    let mut classes = Vec::new();
    for b in 1..=basins as usize {
        let mut best = 0usize;
        for c in 1..k {
            if votes[b][c] > 0 && (best == 0 || votes[b][c] > votes[b][best]) {
                best = c;
            }
        }
        if best > 0 {
            classes.push(best as u8);
            keep[b] = classes.len() as u32;
        }
    }
    let inst: Vec<u32> = lab.iter().map(|&b| keep[b as usize]).collect();
    let no_markers = fg.iter().any(|&f| f) && classes.is_empty();
    Ok(Extraction {
        instance: InstanceGrid::from_vec(h, w, inst)?,
        classes,
        no_markers,
    })
}

/// Label grid that agrees with an extraction: each instance painted with its class.
pub fn reconcile_label(ex: &Extraction) -> LabelGrid {
    ex.instance
        .map(|id| if id == 0 { 0u8 } else { ex.classes[id as usize - 1] })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(h: usize, w: usize, v: &[u32]) -> InstanceGrid {
        InstanceGrid::from_vec(h, w, v.to_vec()).unwrap()
    }

    fn labels_of(inst: &InstanceGrid) -> LabelGrid {
        inst.map(|v| (v > 0) as u8)
    }

    #[test]
    fn single_pixel_and_bar() {
        let inst = grid(3, 3, &[0, 0, 0, 0, 1, 0, 0, 0, 0]);
        let sm = make_structure_map(&labels_of(&inst), &inst).unwrap();
        assert_eq!(sm.row(4), &[1.0, 0.0, 0.0]);
        assert_eq!(sm.row(0), &[-1.0, 0.0, 0.0]);
        let bar = grid(1, 3, &[1, 1, 1]);
        let sm = make_structure_map(&labels_of(&bar), &bar).unwrap();
        let hx: Vec<f32> = sm.rows().map(|r| r[1]).collect();
        assert_eq!(hx, vec![-1.0, 0.0, 1.0]);
        assert!(sm.rows().all(|r| r[2] == 0.0));
    }

    #[test]
    fn edge_cases() {
        let one = grid(3, 3, &[0, 0, 0, 0, 1, 0, 0, 0, 0]);
        assert_eq!(instance_edge_map(&one).data()[4], 1.0);
        let mut v = vec![0u32; 25];
        for r in 1..4 {
            for c in 1..4 {
                v[r * 5 + c] = 1;
            }
        }
        let e = instance_edge_map(&grid(5, 5, &v));
        assert_eq!(e.data().iter().sum::<f32>(), 8.0);
        assert_eq!(e.data()[12], 0.0);
        let full = grid(3, 3, &[1; 9]);
        assert_eq!(instance_edge_map(&full).data()[4], 0.0);
        assert_eq!(instance_edge_map(&full).data()[0], 1.0);
    }

    #[test]
    fn semantic_condition_layout() {
        let inst = grid(2, 3, &[0, 0, 0, 0, 0, 0]);
        let cs = assemble_semantic_condition(&labels_of(&inst), &inst, 5).unwrap();
        assert_eq!(cs.shape(), &[2, 3, 8]);
        for r in cs.rows() {
            assert_eq!(r, &[1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        }
        let lab = LabelGrid::from_vec(1, 2, vec![0, 7]).unwrap();
        assert!(assemble_semantic_condition(&lab, &grid(1, 2, &[0, 1]), 4).is_err());
    }

    #[test]
    fn disjoint_blobs_are_two_instances() {
        let mut v = vec![0u32; 100];
        for r in 1..5 {
            for c in 1..5 {
                v[r * 10 + c] = 1;
                v[(r + 5) * 10 + c + 5] = 2;
            }
        }
        let inst = grid(10, 10, &v);
        let lab = inst.map(|i| if i == 2 { 3u8 } else { i as u8 });
        let sm = make_structure_map(&lab, &inst).unwrap();
        let ex = extract_instances(&sm, &lab).unwrap();
        assert_eq!(ex.instance, inst);
        assert_eq!(ex.classes, vec![1, 3]);
        assert_eq!(reconcile_label(&ex), lab);
    }

    #[test]
    fn empty_foreground() {
        let inst = grid(4, 4, &[0; 16]);
        let sm = make_structure_map(&labels_of(&inst), &inst).unwrap();
        let ex = extract_instances(&sm, &labels_of(&inst)).unwrap();
        assert!(ex.instance.data().iter().all(|&v| v == 0));
        assert!(ex.classes.is_empty() && !ex.no_markers);
    }

    #[test]
    fn touching_squares_are_split() {
        let mut v = vec![0u32; 12 * 14];
        for r in 3..9 {
            for c in 1..7 {
                v[r * 14 + c] = 1;
            }
            for c in 7..13 {
                v[r * 14 + c] = 2;
            }
        }
        let inst = grid(12, 14, &v);
        let lab = labels_of(&inst);
        let sm = make_structure_map(&lab, &inst).unwrap();
        let ex = extract_instances(&sm, &lab).unwrap();
        assert_eq!(ex.instance, inst);
    }
}
