use nucleosynth::conditioning::Bucket;
use nucleosynth::dataset::{check_instance_consistency, Vocabulary};
use nucleosynth::geometry::{assemble_semantic_condition, extract_instances, instance_edge_map, make_structure_map};
use nucleosynth::metrics::{aji, dice, foreground};
use nucleosynth::toydata::{generate_samples, DataMix, GenConfig};
use nucleosynth::{InstanceGrid, LabelGrid, RandomStream};
use proptest::prelude::*;

/// Random non-overlapping rectangles on an `n × n` grid, with 1-pixel gaps
/// unless `touch` is set.
fn rect_grid(n: usize, rects: &[(usize, usize, usize, usize, u8)], touch: bool) -> (LabelGrid, InstanceGrid) {
    let mut label = LabelGrid::new(n, n);
    let mut inst = InstanceGrid::new(n, n);
    let mut next = 1u32;
    for &(r0, c0, hh, ww, cls) in rects {
        let (r1, c1) = ((r0 + hh).min(n), (c0 + ww).min(n));
        let pad = if touch { 0 } else { 1 };
        let free = (r0.saturating_sub(pad)..(r1 + pad).min(n))
            .all(|r| (c0.saturating_sub(pad)..(c1 + pad).min(n)).all(|c| inst.get(r, c) == 0));
        if !free || r1 <= r0 || c1 <= c0 {
            continue;
        }
        for r in r0..r1 {
            for c in c0..c1 {
                inst.set(r, c, next);
                label.set(r, c, cls);
            }
        }
        next += 1;
    }
    (label, inst)
}

fn rects() -> impl Strategy<Value = Vec<(usize, usize, usize, usize, u8)>> {
    prop::collection::vec((0usize..9, 0usize..9, 1usize..5, 1usize..5, 1u8..4), 1..6)
}

proptest! {
    #[test]
    fn offsets_match_per_instance_recomputation(rs in rects()) {
        let (label, inst) = rect_grid(9, &rs, true);
        let sm = make_structure_map(&label, &inst).unwrap();
        let ids: Vec<u32> = {
            let mut v: Vec<u32> = inst.data().to_vec();
            v.sort_unstable();
            v.dedup();
            v
        };
        for &id in ids.iter().filter(|&&i| i > 0) {
            let pix: Vec<(f64, f64)> = (0..81)
                .filter(|&p| inst.data()[p] == id)
                .map(|p| ((p / 9) as f64, (p % 9) as f64))
                .collect();
            let cr = pix.iter().map(|p| p.0).sum::<f64>() / pix.len() as f64;
            let cc = pix.iter().map(|p| p.1).sum::<f64>() / pix.len() as f64;
            let mx = pix.iter().map(|p| (p.1 - cc).abs()).fold(0.0, f64::max);
            let my = pix.iter().map(|p| (p.0 - cr).abs()).fold(0.0, f64::max);
            for &(r, c) in &pix {
                let px = r as usize * 9 + c as usize;
                let hx = (c - cc) / if mx > 0.0 { mx } else { 1.0 };
                let vy = (r - cr) / if my > 0.0 { my } else { 1.0 };
                prop_assert!((sm.data()[px * 3 + 1] as f64 - hx).abs() < 1e-6);
                prop_assert!((sm.data()[px * 3 + 2] as f64 - vy).abs() < 1e-6);
                prop_assert_eq!(sm.data()[px * 3], 1.0);
            }
        }
        for p in 0..81 {
            if inst.data()[p] == 0 {
                prop_assert_eq!(&sm.data()[p * 3..p * 3 + 3], &[-1.0, 0.0, 0.0]);
            }
        }
    }

    #[test]
    fn edges_match_neighbour_scan(rs in rects()) {
        let (_, inst) = rect_grid(9, &rs, true);
        let e = instance_edge_map(&inst);
        for r in 0..9i32 {
            for c in 0..9i32 {
                let id = inst.get(r as usize, c as usize);
                let mut edge = false;
                if id > 0 {
                    for (dr, dc) in [(-1, 0), (1, 0), (0, -1), (0, 1)] {
                        let (rr, cc) = (r + dr, c + dc);
                        edge |= !(0..9).contains(&rr) || !(0..9).contains(&cc) || inst.get(rr as usize, cc as usize) != id;
                    }
                }
                prop_assert_eq!(e.data()[(r * 9 + c) as usize], edge as u8 as f32);
            }
        }
    }

    #[test]
    fn semantic_condition_inverts_to_label(rs in rects(), k in 4usize..7) {
        let (label, inst) = rect_grid(9, &rs, true);
        let cs = assemble_semantic_condition(&label, &inst, k).unwrap();
        prop_assert_eq!(cs.shape(), &[9, 9, k + 3]);
        for (p, row) in cs.rows().enumerate() {
            prop_assert_eq!(row[..k].iter().sum::<f32>(), 1.0);
            let arg = row[..k].iter().position(|&v| v == 1.0).unwrap();
            prop_assert_eq!(arg as u8, label.data()[p]);
        }
    }

    #[test]
    fn separated_instances_are_counted_exactly(rs in rects()) {
        let (label, inst) = rect_grid(12, &rs, false);
        let sm = make_structure_map(&label, &inst).unwrap();
        let ex = extract_instances(&sm, &label).unwrap();
        check_instance_consistency(&label, &ex.instance).unwrap();
        let count = |g: &InstanceGrid| {
            let mut v: Vec<u32> = g.data().iter().copied().filter(|&i| i > 0).collect();
            v.sort_unstable();
            v.dedup();
            v.len()
        };
        prop_assert_eq!(count(&ex.instance), count(&inst));
        prop_assert_eq!(aji(&inst, &ex.instance).unwrap(), 1.0);
    }
}

#[test]
fn touching_contact_rows_are_edges_on_both_sides() {
    let (_, inst) = rect_grid(8, &[(1, 1, 3, 3, 1), (4, 1, 3, 3, 2)], true);
    let e = instance_edge_map(&inst);
    for c in 1..4 {
        assert_eq!(e.data()[3 * 8 + c], 1.0);
        assert_eq!(e.data()[4 * 8 + c], 1.0);
    }
    assert_eq!(e.data()[2 * 8 + 2], 0.0);
    assert_eq!(e.data()[5 * 8 + 2], 0.0);
}

#[test]
fn watershed_recovers_generator_instances() {
    let vocab = Vocabulary::default();
    let mix = DataMix { cluster_prob: 0.5, ..DataMix::default() };
    let samples = generate_samples(&GenConfig::default(), 200, &mix, &vocab, &RandomStream::new(2024)).unwrap();
    let (mut a, mut d) = (0.0, 0.0);
    for s in &samples {
        let sm = make_structure_map(&s.label, &s.instance).unwrap();
        let ex = extract_instances(&sm, &s.label).unwrap();
        check_instance_consistency(&s.label, &ex.instance).unwrap();
        a += aji(&s.instance, &ex.instance).unwrap();
        d += dice(&foreground(&s.instance), &foreground(&ex.instance)).unwrap();
    }
    let n = samples.len() as f64;
    assert!(a / n >= 0.85, "mean AJI {}", a / n);
    assert!(d / n >= 0.95, "mean Dice {}", d / n);
    let _ = Bucket::ALL;
}
