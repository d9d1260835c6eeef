use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::Vec3;

/// Assigns every contact point to its nearest joint (ties go to the lowest
/// joint index). Returns `(groups, mask)` where `groups[i]` lists indices
/// into `contact_points` and `mask[i]` marks non-empty groups.
pub fn group_contacts(contact_points: &[Vec3], joints: &[Vec3], n: usize) -> Result<(Vec<Vec<usize>>, Vec<bool>)> {
    if n != joints.len() {
        return Err(Error::Config(format!("one group per joint required: N = {n}, J = {}", joints.len())));
    }
    let mut groups = vec![Vec::new(); n];
    for (i, p) in contact_points.iter().enumerate() {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (j, q) in joints.iter().enumerate() {
            let d = (p - q).norm_squared();
            if d < best_d {
                best_d = d;
                best = j;
            }
        }
        if n > 0 {
            groups[best].push(i);
        }
    }
    let mask = groups.iter().map(|g| !g.is_empty()).collect();
    Ok((groups, mask))
}

/// Skeleton-only contact definition: a joint is in contact when it lies
/// within `radius` of the object, and its group holds the single nearest
/// object point.
pub fn nearest_joint_contacts(object_points: &[Vec3], joints: &[Vec3], radius: f64) -> (Vec<Vec<usize>>, Vec<bool>) {
    let groups: Vec<Vec<usize>> = joints
        .iter()
        .map(|j| {
            let nearest = object_points
                .iter()
                .enumerate()
                .map(|(i, p)| (i, (p - j).norm()))
                .fold(None, |acc: Option<(usize, f64)>, (i, d)| match acc {
                    Some((_, bd)) if bd <= d => acc,
                    _ => Some((i, d)),
                });
            match nearest {
                Some((i, d)) if d <= radius => vec![i],
                _ => Vec::new(),
            }
        })
        .collect();
    let mask = groups.iter().map(|g| !g.is_empty()).collect();
    (groups, mask)
}

/// Picks `k` members of each non-empty group: a uniform subset when the
/// group is large enough, uniform draws with replacement otherwise. Empty
/// groups yield empty subsets.
pub fn sample_contact_subsets(groups: &[Vec<usize>], k: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if k == 0 {
        return Err(Error::Config("contact subset size must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(groups
        .iter()
        .map(|g| {
            if g.is_empty() {
                Vec::new()
            } else if g.len() >= k {
                let mut picked = index::sample(&mut rng, g.len(), k).into_vec();
                picked.sort_unstable();
                picked.into_iter().map(|i| g[i]).collect()
            } else {
                (0..k).map(|_| g[rng.random_range(0..g.len())]).collect()
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{prop_assert_eq, proptest};

    fn joints() -> Vec<Vec3> {
        (0..6).map(|j| Vec3::new(j as f64, 0.0, 0.0)).collect()
    }

    #[test]
    fn point_on_joint_goes_to_that_joint() {
        let (g, m) = group_contacts(&[Vec3::new(3.0, 0.0, 0.0)], &joints(), 6).unwrap();
        assert_eq!(g[3], vec![0]);
        assert_eq!(m, vec![false, false, false, true, false, false]);
    }

    #[test]
    fn ties_break_to_lowest_index() {
        let mut js = joints();
        js[2] = Vec3::new(0.0, 10.0, 1.0);
        js[5] = Vec3::new(0.0, 10.0, -1.0);
        let (g, _) = group_contacts(&[Vec3::new(0.0, 10.0, 0.0)], &js, 6).unwrap();
        assert_eq!(g[2], vec![0]);
        assert!(g[5].is_empty());
    }

    #[test]
    fn empty_contacts_give_zero_mask() {
        let (g, m) = group_contacts(&[], &joints(), 6).unwrap();
        assert!(g.iter().all(Vec::is_empty));
        assert!(m.iter().all(|&b| !b));
        assert!(group_contacts(&[], &joints(), 5).is_err());
    }

    #[test]
    fn matches_exhaustive_nearest_search() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let js: Vec<Vec3> = (0..21).map(|_| Vec3::from_fn(|_, _| rng.random_range(-1.0..1.0))).collect();
        let pts: Vec<Vec3> = (0..100).map(|_| Vec3::from_fn(|_, _| rng.random_range(-1.0..1.0))).collect();
        let (g, _) = group_contacts(&pts, &js, 21).unwrap();
        for (i, p) in pts.iter().enumerate() {
            let dists: Vec<f64> = js.iter().map(|q| ((p.x - q.x).powi(2) + (p.y - q.y).powi(2) + (p.z - q.z).powi(2)).sqrt()).collect();
            let min = dists.iter().cloned().fold(f64::INFINITY, f64::min);
            let expect = dists.iter().position(|&d| d == min).unwrap();
            assert!(g[expect].contains(&i));
        }
    }

    #[test]
    fn subset_sampling_rules() {
        let groups = vec![vec![7], vec![], vec![1, 2, 3, 4, 5, 6]];
        let s = sample_contact_subsets(&groups, 4, 9).unwrap();
        assert_eq!(s[0], vec![7, 7, 7, 7]);
        assert!(s[1].is_empty());
        assert_eq!(s[2].len(), 4);
        assert!(s[2].iter().all(|i| groups[2].contains(i)));
        let mut dedup = s[2].clone();
        dedup.dedup();
        assert_eq!(dedup.len(), 4, "large groups sample without replacement");
        assert_eq!(s, sample_contact_subsets(&groups, 4, 9).unwrap());
        assert!(sample_contact_subsets(&groups, 0, 9).is_err());
    }

    #[test]
    fn nearest_joint_mode() {
        let obj = vec![Vec3::new(0.0, 0.0, 0.05), Vec3::new(5.0, 0.0, 0.0)];
        let (g, m) = nearest_joint_contacts(&obj, &joints(), 0.1);
        assert_eq!(g[0], vec![0]);
        assert_eq!(g[5], vec![1]);
        assert_eq!(m, vec![true, false, false, false, false, true]);
    }

    proptest! {
        #[test]
        fn grouping_is_a_partition(seed in 0u64..1000, n_pts in 0usize..60) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let js: Vec<Vec3> = (0..8).map(|_| Vec3::from_fn(|_, _| rng.random_range(-1.0..1.0))).collect();
            let pts: Vec<Vec3> = (0..n_pts).map(|_| Vec3::from_fn(|_, _| rng.random_range(-1.0..1.0))).collect();
            let (g, m) = group_contacts(&pts, &js, 8).unwrap();
            let mut all: Vec<usize> = g.iter().flatten().copied().collect();
            all.sort_unstable();
            prop_assert_eq!(all, (0..n_pts).collect::<Vec<_>>());
            for (grp, flag) in g.iter().zip(&m) {
                prop_assert_eq!(!grp.is_empty(), *flag);
            }
        }
    }
}
