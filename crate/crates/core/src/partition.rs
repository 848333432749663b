//! Window partitioning and tri-directional dynamic subset construction.
//!
//! Sparse voxels are grouped into non-overlapping cubic windows; inside a
//! window they are re-sorted along each anatomical plane's normal axis and
//! chunked into runs of at most `tau_cap` voxels. Attention cost then scales
//! with the subset sizes instead of the full window population.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nonvoid::SparseVoxelSet;

/// Anatomical plane of a directional pass; sorting runs along the plane's
/// normal axis (XY -> Z, YZ -> X, XZ -> Y).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    /// Transverse plane; sort along Z.
    Xy,
    /// Sagittal plane; sort along X.
    Yz,
    /// Coronal plane; sort along Y.
    Xz,
}

impl Direction {
    pub const ALL: [Direction; 3] = [Direction::Xy, Direction::Xz, Direction::Yz];

    /// Deterministic sort key: the direction axis first, the remaining axes
    /// in descending canonical order, id last. For XY (sort Z) this is
    /// (z, y, x, id), so ties inside a slice are broken row by row.
    fn sort_key(&self, coord: [usize; 3], id: u64) -> (usize, usize, usize, u64) {
        let [x, y, z] = coord;
        match self {
            Direction::Xy => (z, y, x, id),
            Direction::Yz => (x, z, y, id),
            Direction::Xz => (y, z, x, id),
        }
    }
}

/// One window's members, stored as row indices into the source voxel set,
/// presorted by voxel id.
#[derive(Clone, Debug)]
pub struct WindowInfo {
    pub index: [usize; 3],
    pub rows: Vec<usize>,
}

impl WindowInfo {
    pub fn phi(&self) -> usize {
        self.rows.len()
    }
}

/// Disjoint cubic windows covering all voxels; empty windows are never
/// materialized.
#[derive(Clone, Debug)]
pub struct WindowPartition {
    pub t: usize,
    windows: BTreeMap<[usize; 3], Vec<usize>>,
}

impl WindowPartition {
    pub fn window_count(&self) -> usize {
        self.windows.len()
    }

    /// Windows in ascending index order, members sorted by id.
    pub fn iter(&self) -> impl Iterator<Item = WindowInfo> + '_ {
        self.windows.iter().map(|(&index, rows)| WindowInfo {
            index,
            rows: rows.clone(),
        })
    }

    pub fn occupancies(&self) -> Vec<usize> {
        self.windows.values().map(|v| v.len()).collect()
    }
}

/// Assign voxel (x,y,z) to window (x/t, y/t, z/t).
pub fn partition_windows(voxels: &SparseVoxelSet, t: usize) -> Result<WindowPartition> {
    if t == 0 {
        return Err(Error::InvalidConfig("window size t must be >= 1".into()));
    }
    let mut windows: BTreeMap<[usize; 3], Vec<(u64, usize)>> = BTreeMap::new();
    for (row, (&coord, &id)) in voxels.coords.iter().zip(&voxels.ids).enumerate() {
        let key = [coord[0] / t, coord[1] / t, coord[2] / t];
        windows.entry(key).or_default().push((id, row));
    }
    // Member order inside a window is fixed by id, so the partition is
    // independent of the voxel set's storage order.
    let windows = windows
        .into_iter()
        .map(|(k, mut members)| {
            members.sort_unstable();
            (k, members.into_iter().map(|(_, row)| row).collect())
        })
        .collect();
    Ok(WindowPartition { t, windows })
}

/// Number of subsets a window of `phi` voxels splits into:
/// `floor(phi/tau) + [phi mod tau > 0]`.
pub fn subset_count(phi: usize, tau_cap: usize) -> usize {
    debug_assert!(phi >= 1 && tau_cap >= 1);
    phi / tau_cap + usize::from(phi % tau_cap > 0)
}

/// Ordered subsets of one window for one directional pass.
#[derive(Clone, Debug)]
pub struct DirectionalSubsets {
    pub direction: Direction,
    pub capacity: usize,
    /// Each inner list holds row indices into the source voxel set, in the
    /// direction's sort order; all runs are full except possibly the last.
    pub subsets: Vec<Vec<usize>>,
}

/// Sort a window's members along the direction axis and chunk them into
/// `subset_count` consecutive runs of `tau_cap`.
pub fn axis_partition(
    voxels: &SparseVoxelSet,
    window: &WindowInfo,
    direction: Direction,
    tau_cap: usize,
) -> Result<DirectionalSubsets> {
    if window.rows.is_empty() {
        return Err(Error::InvalidConfig("axis_partition on empty window".into()));
    }
    if tau_cap == 0 {
        return Err(Error::InvalidConfig("tau_cap must be >= 1".into()));
    }
    let mut order: Vec<usize> = window.rows.clone();
    order.sort_unstable_by_key(|&row| direction.sort_key(voxels.coords[row], voxels.ids[row]));
    let subsets = order.chunks(tau_cap).map(|c| c.to_vec()).collect();
    Ok(DirectionalSubsets {
        direction,
        capacity: tau_cap,
        subsets,
    })
}

/// Counting mode for [`attention_pair_count`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairCountMode {
    /// Full self-attention inside each window: sum of phi^2.
    Dense3d,
    /// Tri-directional dynamic subsets: sum over directions and subsets of
    /// the squared subset sizes.
    TriDirectional,
}

/// Exact query-key pair count over a partition.
pub fn attention_pair_count(
    voxels: &SparseVoxelSet,
    partition: &WindowPartition,
    tau_cap: usize,
    mode: PairCountMode,
) -> Result<u64> {
    let mut pairs: u64 = 0;
    for window in partition.iter() {
        match mode {
            PairCountMode::Dense3d => {
                pairs += (window.phi() as u64).pow(2);
            }
            PairCountMode::TriDirectional => {
                for direction in Direction::ALL {
                    let subsets = axis_partition(voxels, &window, direction, tau_cap)?;
                    for s in &subsets.subsets {
                        pairs += (s.len() as u64).pow(2);
                    }
                }
            }
        }
    }
    Ok(pairs)
}

/// Pair-count report for the complexity comparison, serializable as JSON.
#[derive(Clone, Debug, Serialize)]
pub struct PairCountReport {
    pub window_size: usize,
    pub tau_cap: usize,
    pub windows: usize,
    pub voxels: usize,
    pub dense3d_pairs: u64,
    pub tri_directional_pairs: u64,
    pub reduction_factor: f64,
}

pub fn pair_count_report(
    voxels: &SparseVoxelSet,
    t: usize,
    tau_cap: usize,
) -> Result<PairCountReport> {
    let partition = partition_windows(voxels, t)?;
    let dense = attention_pair_count(voxels, &partition, tau_cap, PairCountMode::Dense3d)?;
    let tri = attention_pair_count(voxels, &partition, tau_cap, PairCountMode::TriDirectional)?;
    Ok(PairCountReport {
        window_size: t,
        tau_cap,
        windows: partition.window_count(),
        voxels: voxels.len(),
        dense3d_pairs: dense,
        tri_directional_pairs: tri,
        reduction_factor: if tri > 0 {
            dense as f64 / tri as f64
        } else {
            f64::INFINITY
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    /// Voxel set with unit features; ids follow the given order.
    fn set_from_coords(extents: [usize; 3], coords: Vec<[usize; 3]>) -> SparseVoxelSet {
        let phi = coords.len();
        SparseVoxelSet {
            extents,
            ids: (0..phi as u64).collect(),
            features: Tensor::from_vec(vec![phi, 1], vec![1.0; phi]).unwrap(),
            coords,
        }
    }

    fn saturated_window(t: usize) -> SparseVoxelSet {
        let mut coords = Vec::with_capacity(t * t * t);
        for x in 0..t {
            for y in 0..t {
                for z in 0..t {
                    coords.push([x, y, z]);
                }
            }
        }
        set_from_coords([t, t, t], coords)
    }

    #[test]
    fn all_voxels_in_one_cube_is_one_window() {
        let set = set_from_coords([4, 4, 4], vec![[0, 0, 0], [1, 2, 3], [3, 3, 3]]);
        let p = partition_windows(&set, 4).unwrap();
        assert_eq!(p.window_count(), 1);
    }

    #[test]
    fn empty_set_has_zero_windows() {
        let set = set_from_coords([4, 4, 4], vec![]);
        let p = partition_windows(&set, 2).unwrap();
        assert_eq!(p.window_count(), 0);
        assert_eq!(
            attention_pair_count(&set, &p, 4, PairCountMode::Dense3d).unwrap(),
            0
        );
        assert_eq!(
            attention_pair_count(&set, &p, 4, PairCountMode::TriDirectional).unwrap(),
            0
        );
    }

    #[test]
    fn eight_corners_make_eight_singleton_windows() {
        let mut coords = Vec::new();
        for &x in &[0usize, 3] {
            for &y in &[0usize, 3] {
                for &z in &[0usize, 3] {
                    coords.push([x, y, z]);
                }
            }
        }
        let set = set_from_coords([4, 4, 4], coords);
        let p = partition_windows(&set, 2).unwrap();
        assert_eq!(p.window_count(), 8);
        assert!(p.occupancies().iter().all(|&phi| phi == 1));
    }

    #[test]
    fn subset_count_examples() {
        assert_eq!(subset_count(10, 4), 3);
        assert_eq!(subset_count(8, 4), 2);
        assert_eq!(subset_count(1, 64), 1);
    }

    #[test]
    fn subset_count_is_ceiling_division_exhaustively() {
        for phi in 1..=1000usize {
            for tau in 1..=64usize {
                assert_eq!(subset_count(phi, tau), phi.div_ceil(tau), "phi={phi} tau={tau}");
            }
        }
    }

    #[test]
    fn five_distinct_z_values_chunk_as_2_2_1() {
        let coords = vec![[0, 0, 4], [0, 0, 2], [0, 0, 0], [0, 0, 3], [0, 0, 1]];
        let set = set_from_coords([5, 5, 5], coords);
        let p = partition_windows(&set, 5).unwrap();
        let window = p.iter().next().unwrap();
        let subsets = axis_partition(&set, &window, Direction::Xy, 2).unwrap();
        let sizes: Vec<usize> = subsets.subsets.iter().map(|s| s.len()).collect();
        assert_eq!(sizes, vec![2, 2, 1]);
        // Ascending z across the concatenation.
        let zs: Vec<usize> = subsets
            .subsets
            .iter()
            .flatten()
            .map(|&row| set.coords[row][2])
            .collect();
        assert_eq!(zs, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn shared_z_ties_break_by_y_then_x_then_id() {
        let coords = vec![[1, 0, 2], [0, 0, 2], [0, 1, 2], [1, 1, 2]];
        let set = set_from_coords([4, 4, 4], coords);
        let p = partition_windows(&set, 4).unwrap();
        let window = p.iter().next().unwrap();
        let subsets = axis_partition(&set, &window, Direction::Xy, 4).unwrap();
        let order: Vec<[usize; 3]> = subsets.subsets[0]
            .iter()
            .map(|&row| set.coords[row])
            .collect();
        assert_eq!(
            order,
            vec![[0, 0, 2], [1, 0, 2], [0, 1, 2], [1, 1, 2]],
            "(y, x) ordering within the shared-z slice"
        );
    }

    #[test]
    fn small_window_is_a_single_subset() {
        let set = set_from_coords([4, 4, 4], vec![[0, 1, 0], [1, 0, 0], [0, 0, 1]]);
        let p = partition_windows(&set, 4).unwrap();
        let window = p.iter().next().unwrap();
        let subsets = axis_partition(&set, &window, Direction::Yz, 64).unwrap();
        assert_eq!(subsets.subsets.len(), 1);
        assert_eq!(subsets.subsets[0].len(), 3);
    }

    #[test]
    fn directional_subsets_cover_and_never_exceed_capacity() {
        let set = saturated_window(4);
        let p = partition_windows(&set, 4).unwrap();
        let window = p.iter().next().unwrap();
        for direction in Direction::ALL {
            let subsets = axis_partition(&set, &window, direction, 7).unwrap();
            let mut all: Vec<usize> = subsets.subsets.iter().flatten().cloned().collect();
            // Full runs except possibly the last.
            for (i, s) in subsets.subsets.iter().enumerate() {
                if i + 1 < subsets.subsets.len() {
                    assert_eq!(s.len(), 7);
                } else {
                    assert!(s.len() <= 7 && !s.is_empty());
                }
            }
            all.sort_unstable();
            let mut expected = window.rows.clone();
            expected.sort_unstable();
            assert_eq!(all, expected, "subsets must cover the window exactly");
        }
    }

    #[test]
    fn saturated_window_pair_counts_match_closed_forms() {
        for t in [2usize, 4] {
            let set = saturated_window(t);
            let tau = t * t;
            let report = pair_count_report(&set, t, tau).unwrap();
            let n = (t * t * t) as u64;
            assert_eq!(report.dense3d_pairs, n * n);
            // Three directions, t full plane-slices of tau^2 pairs each.
            assert_eq!(report.tri_directional_pairs, 3 * t as u64 * (tau as u64).pow(2));
            assert_eq!(report.reduction_factor, t as f64 / 3.0);
        }
    }

    #[test]
    fn one_full_subset_costs_three_phi_squared_tri_directionally() {
        let set = saturated_window(2);
        let tau = 8;
        let p = partition_windows(&set, 2).unwrap();
        let dense = attention_pair_count(&set, &p, tau, PairCountMode::Dense3d).unwrap();
        let tri = attention_pair_count(&set, &p, tau, PairCountMode::TriDirectional).unwrap();
        assert_eq!(dense, 64);
        assert_eq!(tri, 3 * 64);
    }

    #[test]
    fn tri_directional_count_respects_the_capacity_bound() {
        // sum over subsets of |Z|^2 <= ceil(phi/tau) * tau^2 per direction.
        let set = set_from_coords(
            [8, 8, 8],
            vec![
                [0, 0, 0],
                [0, 1, 0],
                [1, 1, 1],
                [2, 2, 2],
                [3, 0, 1],
                [0, 3, 2],
                [3, 3, 3],
            ],
        );
        let p = partition_windows(&set, 4).unwrap();
        let tau = 3;
        let tri = attention_pair_count(&set, &p, tau, PairCountMode::TriDirectional).unwrap();
        let bound: u64 = 3 * p
            .occupancies()
            .iter()
            .map(|&phi| (phi.div_ceil(tau) * tau * tau) as u64)
            .sum::<u64>();
        assert!(tri <= bound);
    }

    #[test]
    fn partition_is_invariant_to_storage_order() {
        let coords = vec![[0, 0, 0], [1, 1, 1], [2, 2, 2], [3, 3, 3], [0, 3, 1]];
        let ids = [4u64, 2, 0, 3, 1];
        let build = |perm: &[usize]| -> SparseVoxelSet {
            SparseVoxelSet {
                extents: [4, 4, 4],
                coords: perm.iter().map(|&i| coords[i]).collect(),
                ids: perm.iter().map(|&i| ids[i]).collect(),
                features: Tensor::from_vec(vec![5, 1], vec![1.0; 5]).unwrap(),
            }
        };
        let a = build(&[0, 1, 2, 3, 4]);
        let b = build(&[3, 0, 4, 2, 1]);
        let pa = partition_windows(&a, 2).unwrap();
        let pb = partition_windows(&b, 2).unwrap();
        // Compare per-window member id lists.
        let ids_of = |set: &SparseVoxelSet, p: &WindowPartition| -> Vec<Vec<u64>> {
            p.iter()
                .map(|w| w.rows.iter().map(|&r| set.ids[r]).collect())
                .collect()
        };
        assert_eq!(ids_of(&a, &pa), ids_of(&b, &pb));
        // Same for the directional orderings.
        for direction in Direction::ALL {
            let wa = pa.iter().next().unwrap();
            let wb = pb.iter().next().unwrap();
            let sa = axis_partition(&a, &wa, direction, 2).unwrap();
            let sb = axis_partition(&b, &wb, direction, 2).unwrap();
            let ia: Vec<Vec<u64>> = sa
                .subsets
                .iter()
                .map(|s| s.iter().map(|&r| a.ids[r]).collect())
                .collect();
            let ib: Vec<Vec<u64>> = sb
                .subsets
                .iter()
                .map(|s| s.iter().map(|&r| b.ids[r]).collect())
                .collect();
            assert_eq!(ia, ib);
        }
    }
}
