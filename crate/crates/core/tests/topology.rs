use proptest::prelude::*;
use wagma::topology::{binomial_children, compute_groups, mixing_reachable, peer, phase_masks};
use wagma::GroupingParams;

fn shape() -> impl Strategy<Value = (usize, usize)> {
    (0u32..=10).prop_flat_map(|lp| (Just(1usize << lp), (0..=lp).prop_map(|ls| 1usize << ls)))
}

/// Components of the graph joining ranks that differ in one mask bit.
fn components(p: usize, masks: &[usize]) -> Vec<Vec<usize>> {
    let mut parent: Vec<usize> = (0..p).collect();
    fn find(parent: &mut [usize], x: usize) -> usize {
        if parent[x] != x {
            let r = find(parent, parent[x]);
            parent[x] = r;
        }
        parent[x]
    }
    for &m in masks {
        for a in 0..p {
            let (x, y) = (find(&mut parent, a), find(&mut parent, a ^ m));
            parent[x.max(y)] = x.min(y);
        }
    }
    let mut out: Vec<Vec<usize>> = vec![Vec::new(); p];
    for a in 0..p {
        let r = find(&mut parent, a);
        out[r].push(a);
    }
    out.retain(|g| !g.is_empty());
    out
}

proptest! {
    #[test]
    fn groups_partition_ranks((p, s) in shape(), t in 0u64..10_000) {
        let params = GroupingParams::new(p, s, t).unwrap();
        let part = compute_groups(params);
        prop_assert!(part.check(p, s).is_ok());
        prop_assert_eq!(&part.groups, &components(p, &phase_masks(params).masks));
        for (i, g) in part.groups.iter().enumerate() {
            for &r in g {
                prop_assert_eq!(part.group_of(r), Some(i));
            }
        }
    }

    #[test]
    fn masks_are_distinct_single_bits((p, s) in shape(), t in 0u64..10_000) {
        let masks = phase_masks(GroupingParams::new(p, s, t).unwrap()).masks;
        prop_assert_eq!(masks.len(), s.trailing_zeros() as usize);
        let mut seen = 0usize;
        for m in masks {
            prop_assert!(m.is_power_of_two() && m < p);
            prop_assert_eq!(seen & m, 0);
            seen |= m;
        }
    }

    #[test]
    fn groups_are_periodic((p, s) in shape(), t in 0u64..1000) {
        let lp = p.trailing_zeros() as u64;
        prop_assume!(lp > 0);
        let a = compute_groups(GroupingParams::new(p, s, t).unwrap()).groups;
        let b = compute_groups(GroupingParams::new(p, s, t + lp).unwrap()).groups;
        prop_assert_eq!(a, b);
    }

    #[test]
    fn peer_is_an_involution(lp in 1u32..=10, rank in 0usize..1024, bit in 0u32..10) {
        let p = 1usize << lp;
        let rank = rank % p;
        let mask = 1usize << (bit % lp);
        let q = peer(rank, mask, p).unwrap();
        prop_assert_ne!(q, rank);
        prop_assert_eq!(peer(q, mask, p).unwrap(), rank);
    }

    #[test]
    fn binomial_tree_reaches_everyone_once(lp in 0u32..=10, root in 0usize..1024) {
        let p = 1usize << lp;
        let root = root % p;
        let mut reached = vec![0u32; p];
        reached[root] = 1;
        let mut frontier = vec![root];
        let mut depth = 0;
        while !frontier.is_empty() {
            let mut next = Vec::new();
            for r in frontier {
                for c in binomial_children(root, r, p) {
                    reached[c] += 1;
                    next.push(c);
                }
            }
            frontier = next;
            depth += 1;
        }
        prop_assert!(reached.iter().all(|&n| n == 1));
        prop_assert!(depth <= lp as usize + 1);
    }

    #[test]
    fn log_p_iterations_mix(lp in 1u32..=9, ls in 1u32..=9, t in 0u64..1000) {
        let ls = ls.min(lp);
        let params = GroupingParams::new(1 << lp, 1 << ls, t).unwrap();
        prop_assert!(mixing_reachable(params, t, lp as u64).unwrap());
    }
}

#[test]
fn singleton_groups_never_mix() {
    let params = GroupingParams::new(8, 1, 0).unwrap();
    assert!(!mixing_reachable(params, 0, 100).unwrap());
    assert!(mixing_reachable(GroupingParams::new(1, 1, 0).unwrap(), 0, 1).unwrap());
}

#[test]
fn invalid_shapes_are_rejected() {
    assert!(GroupingParams::new(6, 2, 0).is_err());
    assert!(GroupingParams::new(8, 3, 0).is_err());
    assert!(GroupingParams::new(8, 16, 0).is_err());
    assert!(GroupingParams::new(0, 1, 0).is_err());
}
