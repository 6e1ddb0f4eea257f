use std::collections::BTreeSet;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use lcpred_core::features::{
    balance_dataset, center_positions, mirror_row, resample_segment, FeatureRow, Provenance, Sample, N_FEATURES,
    N_STEPS,
};
use lcpred_core::frenet::{FrenetConfig, FrenetConverter, FrenetState};
use lcpred_core::lanes::{LaneKind, LaneSpec};
use lcpred_core::refpath::ReferencePath;
use lcpred_core::scene::{assign_neighbors, Longitudinal, SceneVehicle, Slot, RAMP_LATERAL_LIMIT};
use lcpred_core::segment::{
    cut_lc_segment, lk_candidates, sample_lk_segment, FrameMask, LcDirection, LcInstant,
};
use lcpred_core::{DirectionLanes, Label, SegmentParams, Side};

fn row_strategy() -> impl Strategy<Value = FeatureRow<f64>> {
    prop::array::uniform32(-1e3..1e3f64).prop_flat_map(|head| {
        prop::array::uniform4(-1e3..1e3f64).prop_map(move |tail| {
            let mut r = [0.0; N_FEATURES];
            r[..32].copy_from_slice(&head);
            r[32..].copy_from_slice(&tail);
            r
        })
    })
}

fn neumaier(values: impl Iterator<Item = f64>) -> f64 {
    let (mut sum, mut comp) = (0.0f64, 0.0f64);
    for v in values {
        let t = sum + v;
        comp += if sum.abs() >= v.abs() { (sum - t) + v } else { (v - t) + sum };
        sum = t;
    }
    sum + comp
}

fn sample_of(rows: Vec<FeatureRow<f64>>, label: Label) -> Sample<f64> {
    Sample { rows, label, dataset_tag: "t".into(), provenance: Provenance { track_id: 1, start_frame: 0, end_frame: 49 } }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn mirroring_is_a_bitwise_involution(rows in prop::collection::vec(row_strategy(), N_STEPS), k in 0usize..3) {
        let s = sample_of(rows, Label::from_index(k).unwrap());
        let back = s.mirrored().mirrored();
        prop_assert_eq!(back.label, s.label);
        for (a, b) in back.rows.iter().zip(&s.rows) {
            prop_assert!(a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        prop_assert_eq!(s.mirrored().label.mirrored(), s.label);
    }

    #[test]
    fn mirroring_maps_left_slots_to_right(row in row_strategy()) {
        let m = mirror_row(&row);
        for slot in Slot::ALL {
            let (src, dst) = (4 + 4 * slot.index(), 4 + 4 * slot.mirrored().index());
            prop_assert_eq!(m[dst], -row[src]);
            prop_assert_eq!(m[dst + 1], row[src + 1]);
        }
    }

    #[test]
    fn centered_positions_have_zero_mean(rows in prop::collection::vec(row_strategy(), N_STEPS), shift in -1e3..1e3f64) {
        let mut rows: Vec<FeatureRow<f64>> = rows.into_iter().map(|mut r| { r[0] += shift; r[1] -= shift; r }).collect();
        let before: Vec<FeatureRow<f64>> = rows.clone();
        center_positions(&mut rows);
        for c in 0..2 {
            let mean = neumaier(rows.iter().map(|r| r[c])) / rows.len() as f64;
            prop_assert!(mean.abs() < 1e-12, "column {c} mean {mean}");
        }
        for (a, b) in rows.iter().zip(&before) {
            prop_assert_eq!(&a[2..], &b[2..]);
        }
    }

    #[test]
    fn resampling_reproduces_linear_signals(n_in in 2usize..200, a in -50.0..50.0f64, b in -5.0..5.0f64) {
        let rows: Vec<FeatureRow<f64>> = (0..n_in).map(|i| [a + b * i as f64; N_FEATURES]).collect();
        let out = resample_segment(&rows, N_STEPS).unwrap();
        prop_assert_eq!(out.len(), N_STEPS);
        prop_assert_eq!(out[0], rows[0]);
        prop_assert_eq!(out[N_STEPS - 1], rows[n_in - 1]);
        for (k, r) in out.iter().enumerate() {
            let t = k as f64 * (n_in - 1) as f64 / (N_STEPS - 1) as f64;
            let expect = a + b * t;
            prop_assert!((r[7] - expect).abs() <= 1e-9 * (1.0 + expect.abs()), "row {k}: {} vs {expect}", r[7]);
        }
    }

    #[test]
    fn balancing_draws_exact_counts_without_repeats(lk in 10usize..60, llc in 5usize..30, rlc in 5usize..30, seed in any::<u64>()) {
        let mut samples = Vec::new();
        let mut id = 0;
        for (label, n) in [(Label::Lk, lk), (Label::Llc, llc), (Label::Rlc, rlc)] {
            for _ in 0..n {
                let mut s = sample_of(vec![[0.0; N_FEATURES]; N_STEPS], label);
                s.provenance.track_id = id;
                id += 1;
                samples.push(s);
            }
        }
        let per = llc.min(rlc).min(lk / 2);
        let out = balance_dataset(&samples, per, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let count = |l: Label| out.iter().filter(|s| s.label == l).count();
        prop_assert_eq!(count(Label::Llc), per);
        prop_assert_eq!(count(Label::Rlc), per);
        prop_assert_eq!(count(Label::Lk), 2 * per);
        let ids: BTreeSet<String> = out.iter().map(Sample::id).collect();
        prop_assert_eq!(ids.len(), out.len());
        prop_assert!(balance_dataset(&samples, llc.max(rlc) + 1, &mut ChaCha8Rng::seed_from_u64(seed)).is_err());
    }
}

fn rotate(p: [f64; 2], phi: f64, t: [f64; 2]) -> [f64; 2] {
    let (s, c) = phi.sin_cos();
    [c * p[0] - s * p[1] + t[0], s * p[0] + c * p[1] + t[1]]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn frenet_states_are_invariant_under_rigid_motion(
        amp in 0.0..3.0f64,
        wavelength in 200.0..600.0f64,
        phi in -3.1..3.1f64,
        tx in -500.0..500.0f64,
        ty in -500.0..500.0f64,
        x in 40.0..160.0f64,
        off in -6.0..6.0f64,
        speed in 5.0..40.0f64,
        heading in -0.3..0.3f64,
    ) {
        let pts: Vec<[f64; 2]> = (0..201)
            .map(|i| {
                let u = i as f64;
                [u, amp * (std::f64::consts::TAU * u / wavelength).sin()]
            })
            .collect();
        let moved: Vec<[f64; 2]> = pts.iter().map(|p| rotate(*p, phi, [tx, ty])).collect();
        let cfg = FrenetConfig::default();
        let a = FrenetConverter::new(ReferencePath::from_points(pts, "a").unwrap(), cfg);
        let b = FrenetConverter::new(ReferencePath::from_points(moved, "a").unwrap(), cfg);
        let pos = [x, amp * (std::f64::consts::TAU * x / wavelength).sin() + off];
        let vel = [speed * heading.cos(), speed * heading.sin()];
        let sa: FrenetState<f64> = a.convert(pos, vel, heading).unwrap();
        let sb = b.convert(rotate(pos, phi, [tx, ty]), rotate(vel, phi, [0.0, 0.0]), heading + phi).unwrap();
        prop_assert_eq!(sa.ref_index, sb.ref_index);
        prop_assert_eq!(sa.gated, sb.gated);
        for (u, v) in [(sa.s, sb.s), (sa.l, sb.l), (sa.s_dot, sb.s_dot), (sa.l_dot, sb.l_dot)] {
            prop_assert!((u - v).abs() < 1e-9, "{u} vs {v}");
        }
    }
}

fn three_lanes() -> DirectionLanes {
    DirectionLanes {
        lanes: vec![
            LaneSpec { id: 1, center: -1.875, kind: LaneKind::Mainline },
            LaneSpec { id: 2, center: -5.625, kind: LaneKind::Mainline },
            LaneSpec { id: 3, center: -9.375, kind: LaneKind::Mainline },
            LaneSpec { id: 4, center: -13.125, kind: LaneKind::OnRamp },
        ],
        svm_lanes: vec![1, 9],
        lanelets: Default::default(),
        bbox: None,
    }
}

/// Slot of `cand` by direct geometry: lane index by nearest center within
/// half a lane, side by comparing lane centers of adjacent lanes.
fn oracle_slot(lanes: &DirectionLanes, target: &SceneVehicle<f64>, cand: &SceneVehicle<f64>) -> Option<Slot> {
    let lane_of = |l: f64| {
        lanes.lanes.iter().position(|x| (l - x.center).abs() <= 1.875)
    };
    if cand.on_ramp && (cand.state.l - target.state.l).abs() > RAMP_LATERAL_LIMIT {
        return None;
    }
    let (ti, ci) = (lane_of(target.state.l)?, lane_of(cand.state.l)?);
    let side = match ci as i64 - ti as i64 {
        0 => Side::Same,
        1 | -1 if lanes.lanes[ci].center > lanes.lanes[ti].center => Side::Left,
        1 | -1 => Side::Right,
        _ => return None,
    };
    let (t0, t1) = (target.state.s - target.length / 2.0, target.state.s + target.length / 2.0);
    let (c0, c1) = (cand.state.s - cand.length / 2.0, cand.state.s + cand.length / 2.0);
    let lon = if c0 <= t1 && t0 <= c1 {
        Longitudinal::Alongside
    } else if cand.state.s > target.state.s {
        Longitudinal::Preceding
    } else {
        Longitudinal::Following
    };
    Slot::ALL.into_iter().find(|s| s.side() == side && s.longitudinal() == lon)
}

fn away_from_edges(l: f64) -> f64 {
    let r = (l / 3.75).fract().abs();
    if r < 0.01 || r > 0.99 { l - 0.1 } else { l }
}

fn vehicle_strategy() -> impl Strategy<Value = (f64, f64, f64, bool)> {
    (-60.0..60.0f64, -15.0..0.0f64, 4.0..16.0f64, prop::bool::weighted(0.1))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn neighbor_slots_match_brute_force(
        target_l in -11.0..-0.5f64,
        others in prop::collection::vec(vehicle_strategy(), 0..25),
    ) {
        let lanes = three_lanes();
        let mk = |id, s, l, len, ramp| SceneVehicle {
            track_id: id,
            state: FrenetState { s, l, ..FrenetState::default() },
            length: len,
            on_ramp: ramp,
        };
        let target_l = away_from_edges(target_l);
        let mut vehicles = vec![mk(0, 0.0, target_l, 4.5, false)];
        for (i, (s, l, len, ramp)) in others.iter().enumerate() {
            // Keep lateral positions away from band edges so the oracle's
            // nearest-center rule and the band rule agree.
            let l = away_from_edges(*l);
            vehicles.push(mk(i as u32 + 1, *s, l, *len, *ramp));
        }
        let scene = assign_neighbors(7, &vehicles, 0, &lanes);
        let target = &vehicles[0];
        let mut expect: [Option<(f64, u32)>; 8] = [None; 8];
        let mut alongside = [0usize; 2];
        for cand in &vehicles[1..] {
            let Some(slot) = oracle_slot(&lanes, target, cand) else { continue };
            if slot == Slot::La { alongside[0] += 1; }
            if slot == Slot::Ra { alongside[1] += 1; }
            let key = ((cand.state.s - target.state.s).abs(), cand.track_id);
            let e = &mut expect[slot.index()];
            if e.is_none_or(|cur| key < cur) {
                *e = Some(key);
            }
        }
        if lanes.band_index(target_l).is_none() {
            prop_assert!(!scene.is_valid());
        } else {
            for slot in Slot::ALL {
                prop_assert_eq!(scene.neighbor(slot).map(|n| n.track_id), expect[slot.index()].map(|e| e.1), "slot {:?}", slot);
            }
            prop_assert_eq!(scene.alongside_counts, alongside);
        }
    }
}

fn random_mask(len: usize, holes: &[(usize, usize)]) -> FrameMask {
    let mut mask = vec![true; len];
    for &(start, width) in holes {
        for m in mask.iter_mut().skip(start).take(width) {
            *m = false;
        }
    }
    FrameMask { first_frame: 100, mask }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn emitted_segments_are_admissible(
        len in 60usize..600,
        holes in prop::collection::vec((0usize..600, 1usize..20), 0..4),
        lc in prop::collection::vec((0usize..600, any::<bool>()), 0..4),
        freq in prop::sample::select(vec![25.0, 30.0]),
        seed in any::<u64>(),
    ) {
        let mask = random_mask(len, &holes);
        let mut frames: Vec<u32> = lc.iter().map(|(f, _)| 100 + (*f % len) as u32).collect();
        frames.sort_unstable();
        frames.dedup();
        let instants: Vec<LcInstant> = frames
            .iter()
            .zip(&lc)
            .map(|(&frame, (_, left))| LcInstant { track_id: 5, frame, direction: if *left { LcDirection::Left } else { LcDirection::Right } })
            .collect();
        let params = SegmentParams::default();
        let n = (params.delta_t_o * freq).round() as u32;
        let max_pred = (params.delta_t_p_max * freq).round() as u32;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for inst in &instants {
            if let Some(seg) = cut_lc_segment(inst, &instants, &mask, freq, &params, "x", &mut rng) {
                let dt = seg.prediction_time.unwrap();
                prop_assert!((0.0..=params.delta_t_p_max).contains(&dt));
                prop_assert_eq!(seg.end_frame, inst.frame - (dt * freq).round() as u32);
                prop_assert_eq!(seg.frame_count() as u32, n);
                prop_assert!(mask.window_ok(seg.start_frame, seg.end_frame));
                prop_assert!(instants.iter().all(|o| o.frame == inst.frame || !seg.contains(o.frame)));
                prop_assert_eq!(seg.label, inst.direction.label());
            }
        }
        // Exhaustive enumeration of lane-keeping windows.
        let mut brute = Vec::new();
        for k in 0..len {
            let start = 100 + k as u32;
            let end = start + n - 1;
            let inside = (start..=end).all(|f| mask.get(f));
            let clean = instants.iter().all(|i| !(start <= i.frame && i.frame <= end) && !(i.frame > end && i.frame - end <= max_pred));
            if inside && clean {
                brute.push(start);
            }
        }
        prop_assert_eq!(lk_candidates(&instants, &mask, freq, &params), brute.clone());
        let lk = sample_lk_segment(5, &instants, &mask, freq, &params, "x", &mut rng);
        prop_assert_eq!(lk.is_some(), !brute.is_empty());
        if let Some(seg) = lk {
            prop_assert!(brute.contains(&seg.start_frame));
            prop_assert_eq!(seg.label, Label::Lk);
            prop_assert_eq!(seg.frame_count() as u32, n);
        }
    }
}
