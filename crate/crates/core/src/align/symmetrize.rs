use std::collections::BTreeSet;

use super::Link;

const NEIGHBORS: [(isize, isize); 8] = [(-1, 0), (0, -1), (1, 0), (0, 1), (-1, -1), (-1, 1), (1, -1), (1, 1)];

/// Condition under which the final pass adds a directional link.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum FinalRule {
    /// Add when either endpoint is still unaligned (Moses `grow-diag-final`).
    #[default]
    Either,
    /// Add only when both endpoints are unaligned (`grow-diag-final-and`).
    Both,
}

struct State {
    links: BTreeSet<Link>,
    src_aligned: Vec<bool>,
    tgt_aligned: Vec<bool>,
}

impl State {
    fn add(&mut self, (s, t): Link) {
        self.links.insert((s, t));
        self.src_aligned[s] = true;
        self.tgt_aligned[t] = true;
    }
}

/// Symmetrizes directional alignments. Both inputs are `(src, tgt)` links;
/// out-of-range links are ignored. Output is sorted.
pub fn grow_diag_final(forward: &[Link], reverse: &[Link], src_len: usize, tgt_len: usize, rule: FinalRule) -> Vec<Link> {
    let in_range = |&&(s, t): &&Link| s < src_len && t < tgt_len;
    let fwd: BTreeSet<Link> = forward.iter().filter(in_range).copied().collect();
    let rev: BTreeSet<Link> = reverse.iter().filter(in_range).copied().collect();
    let union: BTreeSet<Link> = fwd.union(&rev).copied().collect();

    let mut st = State {
        links: BTreeSet::new(),
        src_aligned: vec![false; src_len],
        tgt_aligned: vec![false; tgt_len],
    };
    for &l in fwd.intersection(&rev) {
        st.add(l);
    }

    // grow-diag
    loop {
        let mut added = false;
        for s in 0..src_len {
            for t in 0..tgt_len {
                if !st.links.contains(&(s, t)) {
                    continue;
                }
                for (ds, dt) in NEIGHBORS {
                    let (ns, nt) = (s as isize + ds, t as isize + dt);
                    if ns < 0 || nt < 0 || ns as usize >= src_len || nt as usize >= tgt_len {
                        continue;
                    }
                    let n = (ns as usize, nt as usize);
                    if (!st.src_aligned[n.0] || !st.tgt_aligned[n.1]) && union.contains(&n) && !st.links.contains(&n) {
                        st.add(n);
                        added = true;
                    }
                }
            }
        }
        if !added {
            break;
        }
    }

    for dir in [&fwd, &rev] {
        for &(s, t) in dir {
            let open = match rule {
                FinalRule::Either => !st.src_aligned[s] || !st.tgt_aligned[t],
                FinalRule::Both => !st.src_aligned[s] && !st.tgt_aligned[t],
            };
            if open {
                st.add((s, t));
            }
        }
    }
    st.links.into_iter().collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn agreeing_directions_are_a_fixed_point() {
        let l = vec![(0, 1), (1, 0), (2, 2)];
        assert_eq!(grow_diag_final(&l, &l, 3, 3, FinalRule::Either), l);
    }

    #[test]
    fn diagonal_growth_from_intersection() {
        let got = grow_diag_final(&[(0, 0), (1, 1)], &[(0, 0)], 2, 2, FinalRule::Either);
        assert_eq!(got, vec![(0, 0), (1, 1)]);
    }

    #[test]
    fn final_rules_differ_on_half_aligned_points() {
        // (3,0) is not adjacent to any grown point; source 3 is free but
        // target 0 is already aligned.
        let fwd = [(0, 0), (1, 1), (3, 0)];
        let rev = [(0, 0), (1, 1)];
        let either = grow_diag_final(&fwd, &rev, 4, 3, FinalRule::Either);
        let both = grow_diag_final(&fwd, &rev, 4, 3, FinalRule::Both);
        assert!(either.contains(&(3, 0)));
        assert!(!both.contains(&(3, 0)));
    }

    #[test]
    fn final_pass_takes_forward_links_first() {
        // Target 0 is free; forward proposes (1,0), reverse proposes (2,0).
        // Under the both-unaligned rule only the first one processed survives.
        let got = grow_diag_final(&[(1, 0)], &[(2, 0)], 4, 1, FinalRule::Both);
        assert_eq!(got, vec![(1, 0)]);
    }

    fn links(max: usize) -> impl Strategy<Value = Vec<Link>> {
        proptest::collection::vec((0..max, 0..max), 0..10)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]
        #[test]
        fn between_intersection_and_union(f in links(6), r in links(6), either in any::<bool>()) {
            let rule = if either { FinalRule::Either } else { FinalRule::Both };
            let got: BTreeSet<Link> = grow_diag_final(&f, &r, 6, 6, rule).into_iter().collect();
            let fs: BTreeSet<Link> = f.iter().copied().collect();
            let rs: BTreeSet<Link> = r.iter().copied().collect();
            prop_assert!(fs.intersection(&rs).all(|l| got.contains(l)));
            prop_assert!(got.iter().all(|l| fs.contains(l) || rs.contains(l)));
        }

        #[test]
        fn input_order_does_not_matter(f in links(5), r in links(5)) {
            let mut f2 = f.clone();
            f2.reverse();
            let mut r2 = r.clone();
            r2.reverse();
            prop_assert_eq!(
                grow_diag_final(&f, &r, 5, 5, FinalRule::Either),
                grow_diag_final(&f2, &r2, 5, 5, FinalRule::Either)
            );
        }
    }
}
