//! Property tests over the tensor engine and the unfold/fold machinery.

use hprn_core::model::{apply_unfold, fold_reorder, unfold_order};
use hprn_core::slic::LabelMap;
use hprn_core::tensor::{Shape, Tensor};

use proptest::prelude::*;

proptest! {
    #[test]
    fn reshape_round_trip_is_bit_exact(
        c in 1usize..5,
        h in 1usize..6,
        w in 1usize..6,
        seed in 0u64..1000,
    ) {
        let n = c * h * w;
        let vals: Vec<f64> = (0..n).map(|i| ((i as u64 ^ seed) as f64 * 0.377).sin()).collect();
        let x = Tensor::from_vec(Shape::chw(c, h, w), vals.clone()).unwrap();
        let back = x
            .reshape(Shape::of(&[n])).unwrap()
            .reshape(Shape::of(&[c, h * w])).unwrap()
            .reshape(Shape::chw(c, h, w)).unwrap();
        prop_assert_eq!(back.to_vec(), vals);
    }

    #[test]
    fn permute_inverse_is_bit_exact(
        d0 in 1usize..4,
        d1 in 1usize..4,
        d2 in 1usize..4,
        d3 in 1usize..4,
        perm_choice in 0usize..24,
    ) {
        let perms: Vec<Vec<usize>> = {
            // All permutations of 0..4 in lexicographic order.
            let mut out = Vec::new();
            let mut items = [0usize, 1, 2, 3];
            permutations(&mut items, 0, &mut out);
            out
        };
        let perm = &perms[perm_choice % perms.len()];
        let dims = [d0, d1, d2, d3];
        let n: usize = dims.iter().product();
        let vals: Vec<f64> = (0..n).map(|i| i as f64).collect();
        let x = Tensor::from_vec(Shape::of(&dims), vals.clone()).unwrap();
        let mut inv = vec![0usize; 4];
        for (i, &p) in perm.iter().enumerate() {
            inv[p] = i;
        }
        let back = x.permute(perm).unwrap().permute(&inv).unwrap();
        prop_assert_eq!(back.to_vec(), vals);
    }

    #[test]
    fn softmax_lanes_sum_to_one(
        rows in 1usize..6,
        cols in 1usize..6,
        seed in 0u64..1000,
        axis in 0usize..2,
    ) {
        let vals: Vec<f64> = (0..rows * cols)
            .map(|i| (((i as u64).wrapping_mul(seed + 1) % 97) as f64 - 48.0) / 7.0)
            .collect();
        let x = Tensor::from_vec(Shape::of(&[rows, cols]), vals).unwrap();
        let y = x.softmax(axis).unwrap();
        let sums = y.sum_axis(axis).unwrap();
        for s in sums.to_vec() {
            prop_assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn unfold_fold_round_trip_exact(
        h in 1usize..7,
        w in 1usize..7,
        n_labels in 1u32..5,
        groups_pick in 1usize..8,
        seed in 0u64..10_000,
    ) {
        let hw = h * w;
        let groups = (groups_pick % hw).max(1).min(hw);
        let labels: Vec<u32> = (0..hw)
            .map(|p| ((p as u64).wrapping_mul(seed | 1) % n_labels as u64) as u32)
            .collect();
        let lm = LabelMap::new(h, w, labels, n_labels as usize).unwrap();
        let perm = unfold_order(&lm, groups).unwrap();

        // Structural checks: fill slots duplicate existing pixels, each
        // pixel has exactly one primary slot.
        prop_assert_eq!(perm.slot_to_pixel.len(), perm.groups * perm.group_len);
        let mut seen = vec![false; hw];
        for &p in &perm.slot_to_pixel[..hw] {
            prop_assert!(!seen[p]);
            seen[p] = true;
        }
        prop_assert!(seen.iter().all(|&s| s));

        let vals: Vec<f64> = (0..2 * hw).map(|i| (i as f64 * 0.7).cos()).collect();
        let feat = Tensor::from_vec(Shape::chw(2, h, w), vals.clone()).unwrap();
        let grouped = apply_unfold(&feat, &perm).unwrap();
        let back = fold_reorder(&grouped, &perm, h, w).unwrap();
        prop_assert_eq!(back.to_vec(), vals);
    }

    #[test]
    fn backward_is_additive_over_graph_sums(
        n in 1usize..6,
        seed in 0u64..1000,
    ) {
        let vals: Vec<f64> = (0..n).map(|i| (((i as u64 + seed) % 13) as f64 - 6.0) / 3.0).collect();
        let w1 = Tensor::parameter(Shape::of(&[n]), vals.clone()).unwrap();
        let l1 = w1.mul(&w1).unwrap().sum_all();
        let l2 = w1.scale(3.0).sum_all();
        l1.backward().unwrap();
        l2.backward().unwrap();
        let separate = w1.grad_vec();

        let w2 = Tensor::parameter(Shape::of(&[n]), vals).unwrap();
        let joint = w2.mul(&w2).unwrap().sum_all().add(&w2.scale(3.0).sum_all()).unwrap();
        joint.backward().unwrap();
        // Accumulation order differs between the two routes, so equality
        // holds to rounding, not bitwise.
        for (a, b) in separate.iter().zip(w2.grad_vec()) {
            prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
        }
    }
}

fn permutations(items: &mut [usize; 4], k: usize, out: &mut Vec<Vec<usize>>) {
    if k == 4 {
        out.push(items.to_vec());
        return;
    }
    for i in k..4 {
        items.swap(k, i);
        permutations(items, k + 1, out);
        items.swap(k, i);
    }
}
