//! Roots of the monotone piecewise-linear map a ↦ Σ_j (a − t_j)₊ w_j.
//!
//! Both the QOT row/column subproblems and the ψ equation reduce to finding
//! the unique a with Σ_j (a − t_j)₊ w_j = target for positive weights and a
//! positive target. Two exact routes are provided:
//!
//! * [`root_by_sort`]: sort thresholds (stably, by value then index), scan
//!   prefix sums, and read off the active segment.
//! * [`root_by_newton`]: Newton's method on the convex piecewise-linear
//!   function. Every iterate after the first lies right of the root, the
//!   active set only shrinks, and the iteration stops when two consecutive
//!   active sets coincide. The last iterate is then the exact root of the
//!   linear piece, so no tolerance is involved.

/// Scratch buffers reused across calls.
#[derive(Default, Debug, Clone)]
pub struct SortScratch {
    order: Vec<u32>,
}

/// Exact root by sorting. `t` and `w` must have the same nonzero length.
pub fn root_by_sort(t: &[f64], w: &[f64], target: f64, scratch: &mut SortScratch) -> f64 {
    debug_assert_eq!(t.len(), w.len());
    debug_assert!(target > 0.0);
    let order = &mut scratch.order;
    order.clear();
    order.extend(0..t.len() as u32);
    order.sort_unstable_by(|&a, &b| {
        t[a as usize].total_cmp(&t[b as usize]).then(a.cmp(&b))
    });
    let (mut sw, mut swt) = (0.0, 0.0);
    for (k, &j) in order.iter().enumerate() {
        let j = j as usize;
        sw += w[j];
        swt += w[j] * t[j];
        let root = (target + swt) / sw;
        let next = match order.get(k + 1) {
            Some(&n) => t[n as usize],
            None => f64::INFINITY,
        };
        if root <= next {
            return root;
        }
    }
    unreachable!("the last segment always contains the root")
}

/// Exact root by active-set Newton from `start`. Returns `None` when the
/// iteration cannot make progress (empty active set at a left start) or does
/// not settle within the step cap; callers then fall back to [`root_by_sort`].
pub fn root_by_newton(t: &[f64], w: &[f64], target: f64, start: f64) -> Option<f64> {
    let mut a = start;
    let mut prev_count = usize::MAX;
    for _ in 0..64 {
        let (mut count, mut sw, mut swt) = (0usize, 0.0, 0.0);
        for (tj, wj) in t.iter().zip(w) {
            if *tj < a {
                count += 1;
                sw += wj;
                swt += wj * tj;
            }
        }
        if count == prev_count {
            return Some(a);
        }
        if count == 0 {
            return None;
        }
        prev_count = count;
        a = (target + swt) / sw;
    }
    None
}

#[derive(Default, Debug, Clone)]
pub struct CutoffScratch {
    sub_t: Vec<f64>,
    sub_w: Vec<f64>,
    sort: SortScratch,
}

/// Exact root over a long threshold list, sorting only the thresholds below
/// a cutoff that doubles until it brackets the root. `hint` is a guess of the
/// root. Returns the root and the smallest threshold.
pub fn root_with_cutoff(t: &[f64], w: &[f64], target: f64, hint: f64, s: &mut CutoffScratch) -> (f64, f64) {
    let tmin = t.iter().cloned().fold(f64::INFINITY, f64::min);
    let wsum: f64 = w.iter().sum();
    // the root is at least tmin + target/Σw
    let mut tau = (target / wsum).max(hint - tmin).max(f64::MIN_POSITIVE);
    loop {
        let cut = tmin + tau;
        s.sub_t.clear();
        s.sub_w.clear();
        let mut f = 0.0;
        for (tj, wj) in t.iter().zip(w) {
            if *tj < cut {
                s.sub_t.push(*tj);
                s.sub_w.push(*wj);
                f += (cut - tj) * wj;
            }
        }
        if f >= target {
            return (root_by_sort(&s.sub_t, &s.sub_w, target, &mut s.sort), tmin);
        }
        tau *= 2.0;
    }
}

/// Value of Σ_j (a − t_j)₊ w_j.
pub fn truncated_sum(t: &[f64], w: &[f64], a: f64) -> f64 {
    t.iter().zip(w).map(|(tj, wj)| (a - tj).max(0.0) * wj).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn single_threshold() {
        let mut s = SortScratch::default();
        assert_eq!(root_by_sort(&[1.0], &[2.0], 4.0, &mut s), 3.0);
    }

    #[test]
    fn two_thresholds_hand_case() {
        // (a-0)*1 + (a-1)*1 = 3 -> a = 2; only first active would give a = 3 > 1.
        let mut s = SortScratch::default();
        let r = root_by_sort(&[1.0, 0.0], &[1.0, 1.0], 3.0, &mut s);
        assert!((r - 2.0).abs() < 1e-15);
        // small target keeps only the lower threshold active
        let r = root_by_sort(&[1.0, 0.0], &[1.0, 1.0], 0.5, &mut s);
        assert!((r - 0.5).abs() < 1e-15);
        assert_eq!(root_by_newton(&[1.0, 0.0], &[1.0, 1.0], 0.5, 5.0), Some(0.5));
    }

    #[test]
    fn ties_are_harmless() {
        let mut s = SortScratch::default();
        let r = root_by_sort(&[0.5, 0.5, 0.5], &[1.0, 1.0, 1.0], 0.3, &mut s);
        assert!((r - 0.6).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn sort_and_newton_agree(
            t in prop::collection::vec(-3.0f64..3.0, 1..60),
            wseed in prop::collection::vec(0.01f64..2.0, 60),
            target in 0.001f64..5.0,
            offset in -2.0f64..6.0,
        ) {
            let w = &wseed[..t.len()];
            let mut s = SortScratch::default();
            let exact = root_by_sort(&t, w, target, &mut s);
            let f = truncated_sum(&t, w, exact);
            prop_assert!((f - target).abs() <= 1e-10 * (1.0 + target));
            if let Some(r) = root_by_newton(&t, w, target, exact + offset) {
                prop_assert!((r - exact).abs() <= 1e-11 * (1.0 + exact.abs()));
            }
            // started from the right, Newton always settles
            let right = t.iter().cloned().fold(f64::NEG_INFINITY, f64::max) + target / w.iter().sum::<f64>() + 1.0;
            let r = root_by_newton(&t, w, target, right).unwrap();
            prop_assert!((r - exact).abs() <= 1e-11 * (1.0 + exact.abs()));
            let mut cs = CutoffScratch::default();
            let (c, _) = root_with_cutoff(&t, w, target, exact - offset, &mut cs);
            prop_assert!((c - exact).abs() <= 1e-12 * (1.0 + exact.abs()));
        }

        #[test]
        fn root_is_monotone_in_target(
            t in prop::collection::vec(-1.0f64..1.0, 1..30),
            target in 0.01f64..2.0,
        ) {
            let w = vec![1.0 / t.len() as f64; t.len()];
            let mut s = SortScratch::default();
            let a = root_by_sort(&t, &w, target, &mut s);
            let b = root_by_sort(&t, &w, 2.0 * target, &mut s);
            prop_assert!(b > a);
        }
    }
}
