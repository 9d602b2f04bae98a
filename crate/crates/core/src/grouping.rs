//! Non-local structure: sliding-window full-band block extraction, seeded
//! k-means++ clustering of blocks into tensor groups, and weighted
//! aggregation of denoised groups back into an MSI.

use std::cmp::Ordering;

use rand::prelude::*;
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;

use crate::error::{LtdlError, Result};
use crate::tensor::{Matrix, Tensor3};

/// A multi-spectral image: an `L x W x H` cube (two spatial modes, one
/// spectral mode). Clean data lives in `[0, 1]`; noisy inputs may exceed that
/// range, so clamping happens only on export.
#[derive(Debug, Clone, PartialEq)]
pub struct Msi {
    pub cube: Tensor3,
}

impl Msi {
    pub fn new(cube: Tensor3) -> Self {
        Self { cube }
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        self.cube.dims()
    }

    /// Copy with all entries clamped to `[0, 1]`, for export of clean or
    /// denoised cubes.
    pub fn clamped_to_unit(&self) -> Msi {
        Msi::new(self.cube.map(|v| v.clamp(0.0, 1.0)))
    }
}

/// Overlapping full-band blocks of an MSI. Each block is a
/// `(d_l * d_w) x H` matrix whose rows enumerate the window's spatial
/// positions (image row index fastest, matching the tensor layout) and whose
/// columns are spectral bands.
#[derive(Debug, Clone)]
pub struct BlockGrid {
    pub d_l: usize,
    pub d_w: usize,
    pub p_l: usize,
    pub p_w: usize,
    /// Image dimensions the blocks were extracted from.
    pub dims: (usize, usize, usize),
    /// Top-left window anchors, row-major over the anchor lattice.
    pub positions: Vec<(usize, usize)>,
    pub blocks: Vec<Matrix>,
}

impl BlockGrid {
    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }
}

/// One cluster of blocks stacked along mode 3 into a
/// `(d_l * d_w) x H x s_k` tensor.
#[derive(Debug, Clone)]
pub struct TensorGroup {
    pub x: Tensor3,
    /// Block indices of the members, ascending.
    pub member_ids: Vec<usize>,
}

/// Anchor offsets `{0, p, 2p, ...}` plus the edge-snapped last position
/// `len - d`, so borders are covered without padding.
fn anchors(len: usize, d: usize, p: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let last = len - d;
    let mut a = 0;
    while a + d <= len {
        out.push(a);
        a += p;
    }
    if *out.last().expect("at least one anchor") != last {
        out.push(last);
    }
    out
}

/// Extracts every overlapping full-band block of the sampling window.
pub fn extract_blocks(msi: &Msi, d_l: usize, d_w: usize, p_l: usize, p_w: usize) -> Result<BlockGrid> {
    let (l, w, h) = msi.dims();
    if d_l == 0 || d_w == 0 || d_l > l || d_w > w {
        return Err(LtdlError::Argument(format!(
            "window {d_l}x{d_w} does not fit a {l}x{w} image"
        )));
    }
    if p_l == 0 || p_w == 0 || p_l > d_l || p_w > d_w {
        return Err(LtdlError::Argument(format!(
            "steps ({p_l}, {p_w}) must lie in [1, window size] so every pixel is covered"
        )));
    }
    let rows = anchors(l, d_l, p_l);
    let cols = anchors(w, d_w, p_w);
    let mut positions = Vec::with_capacity(rows.len() * cols.len());
    let mut blocks = Vec::with_capacity(rows.len() * cols.len());
    for &r0 in &rows {
        for &c0 in &cols {
            let mut m = Matrix::zeros(d_l * d_w, h);
            for b in 0..h {
                for j in 0..d_w {
                    for i in 0..d_l {
                        m[(i + d_l * j, b)] = msi.cube.get(r0 + i, c0 + j, b);
                    }
                }
            }
            positions.push((r0, c0));
            blocks.push(m);
        }
    }
    Ok(BlockGrid {
        d_l,
        d_w,
        p_l,
        p_w,
        dims: (l, w, h),
        positions,
        blocks,
    })
}

/// Content-based ordering of the blocks (lexicographic over the flattened
/// data). All randomized choices below walk this ordering, which makes the
/// clustering invariant to block-order permutations up to label renaming.
fn canonical_order(blocks: &[Matrix]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..blocks.len()).collect();
    idx.sort_by(|&a, &b| {
        for (p, q) in blocks[a].as_slice().iter().zip(blocks[b].as_slice()) {
            match p.total_cmp(q) {
                Ordering::Equal => continue,
                other => return other,
            }
        }
        Ordering::Equal
    });
    idx
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// k-means++ seeding followed by Lloyd iterations on the flattened blocks
/// (Euclidean distance). Deterministic for a fixed seed; empty clusters are
/// re-seeded from the point farthest from its assigned center.
pub fn cluster_blocks(grid: &BlockGrid, k: usize, seed: u64, max_iter: usize) -> Result<Vec<usize>> {
    let s = grid.len();
    if k == 0 || k > s {
        return Err(LtdlError::Argument(format!(
            "cluster count {k} must lie in [1, {s}]"
        )));
    }
    let feats: Vec<&[f64]> = grid.blocks.iter().map(|b| b.as_slice()).collect();
    let order = canonical_order(&grid.blocks);
    let mut rng = ChaCha12Rng::seed_from_u64(seed);

    // Seeding: first center uniform over the canonical ordering, then
    // D^2-weighted draws walking the same ordering.
    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(k);
    centers.push(feats[order[rng.random_range(0..s)]].to_vec());
    let mut d2: Vec<f64> = feats.iter().map(|f| dist2(f, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = order.iter().map(|&i| d2[i]).sum();
        let pick = if total > 0.0 {
            let u = rng.random::<f64>() * total;
            let mut cum = 0.0;
            let mut chosen = order[0];
            for &i in &order {
                cum += d2[i];
                if cum >= u && d2[i] > 0.0 {
                    chosen = i;
                    break;
                }
            }
            chosen
        } else {
            // All remaining points coincide with existing centers; any
            // unpicked point keeps clusters non-empty after Lloyd's fix-up.
            *order
                .iter()
                .find(|&&i| centers.iter().all(|c| dist2(feats[i], c) > 0.0))
                .unwrap_or(&order[0])
        };
        centers.push(feats[pick].to_vec());
        for i in 0..s {
            let d = dist2(feats[i], centers.last().unwrap());
            if d < d2[i] {
                d2[i] = d;
            }
        }
    }

    let assign_all = |centers: &[Vec<f64>]| -> Vec<usize> {
        feats
            .par_iter()
            .map(|f| {
                let mut best = 0usize;
                let mut best_d = f64::INFINITY;
                for (j, c) in centers.iter().enumerate() {
                    let d = dist2(f, c);
                    if d < best_d {
                        best_d = d;
                        best = j;
                    }
                }
                best
            })
            .collect()
    };

    let mut assignments = assign_all(&centers);
    for _ in 0..max_iter.max(1) {
        // Re-seed empty clusters from the farthest point.
        let mut counts = vec![0usize; k];
        for &a in &assignments {
            counts[a] += 1;
        }
        for j in 0..k {
            if counts[j] > 0 {
                continue;
            }
            let mut far = order[0];
            let mut far_d = -1.0;
            for &i in &order {
                let d = dist2(feats[i], &centers[assignments[i]]);
                if d > far_d && counts[assignments[i]] > 1 {
                    far_d = d;
                    far = i;
                }
            }
            counts[assignments[far]] -= 1;
            assignments[far] = j;
            counts[j] = 1;
            centers[j] = feats[far].to_vec();
        }

        // Means accumulated in canonical order, so sums are bit-identical
        // under block permutations.
        let dim = feats[0].len();
        let mut sums = vec![vec![0.0f64; dim]; k];
        for &i in &order {
            let a = assignments[i];
            for (acc, v) in sums[a].iter_mut().zip(feats[i]) {
                *acc += v;
            }
        }
        for j in 0..k {
            if counts[j] > 0 {
                let inv = 1.0 / counts[j] as f64;
                for v in sums[j].iter_mut() {
                    *v *= inv;
                }
                centers[j] = std::mem::take(&mut sums[j]);
            }
        }

        let next = assign_all(&centers);
        if next == assignments {
            break;
        }
        assignments = next;
    }

    // Final fix-up in case the last assignment step emptied a cluster.
    let mut counts = vec![0usize; k];
    for &a in &assignments {
        counts[a] += 1;
    }
    for j in 0..k {
        if counts[j] == 0 {
            let mut far = order[0];
            let mut far_d = -1.0;
            for &i in &order {
                let d = dist2(feats[i], &centers[assignments[i]]);
                if d > far_d && counts[assignments[i]] > 1 {
                    far_d = d;
                    far = i;
                }
            }
            counts[assignments[far]] -= 1;
            assignments[far] = j;
            counts[j] = 1;
        }
    }
    Ok(assignments)
}

/// Default cluster count: about 50 blocks per group.
pub fn suggested_clusters(total_blocks: usize) -> usize {
    ((total_blocks as f64 / 50.0).round() as usize).max(1)
}

/// Stacks each cluster's blocks along mode 3, preserving ascending block
/// order. Labels that are never used produce no group.
pub fn form_groups(grid: &BlockGrid, assignments: &[usize]) -> Result<Vec<TensorGroup>> {
    let s = grid.len();
    if assignments.len() != s {
        return Err(LtdlError::Argument(format!(
            "assignments length {} does not match block count {s}",
            assignments.len()
        )));
    }
    if let Some(&bad) = assignments.iter().find(|&&a| a >= s) {
        return Err(LtdlError::Argument(format!(
            "label {bad} out of range (S = {s})"
        )));
    }
    let max_label = *assignments.iter().max().expect("non-empty");
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); max_label + 1];
    for (i, &a) in assignments.iter().enumerate() {
        members[a].push(i);
    }
    let (_, _, h) = grid.dims;
    let rows = grid.d_l * grid.d_w;
    let mut groups = Vec::new();
    for ids in members.into_iter().filter(|m| !m.is_empty()) {
        let mut x = Tensor3::zeros((rows, h, ids.len()));
        for (slot, &block_id) in ids.iter().enumerate() {
            x.set_mode3_slice(slot, &grid.blocks[block_id]);
        }
        groups.push(TensorGroup { x, member_ids: ids });
    }
    Ok(groups)
}

/// Averages (denoised) group slices back into an image: every pixel/band is
/// the uniform mean of all block contributions covering it. The summation
/// order is fixed (groups in order, members in order) so runs reproduce
/// bit-identically.
pub fn aggregate(groups: &[TensorGroup], grid: &BlockGrid, dims: (usize, usize, usize)) -> Result<Msi> {
    let (l, w, h) = dims;
    if dims != grid.dims {
        return Err(LtdlError::Shape(format!(
            "target dims {dims:?} do not match the grid's image dims {:?}",
            grid.dims
        )));
    }
    let s = grid.len();
    let mut seen = vec![false; s];
    let mut acc = Tensor3::zeros(dims);
    let mut coverage = vec![0.0f64; l * w];
    for g in groups {
        let (rows, bands, s_k) = g.x.dims();
        if rows != grid.d_l * grid.d_w || bands != h || s_k != g.member_ids.len() {
            return Err(LtdlError::Shape(format!(
                "group tensor dims {:?} inconsistent with grid window {}x{} and {} members",
                g.x.dims(),
                grid.d_l,
                grid.d_w,
                g.member_ids.len()
            )));
        }
        for (slot, &block_id) in g.member_ids.iter().enumerate() {
            if block_id >= s || seen[block_id] {
                return Err(LtdlError::Argument(format!(
                    "block {block_id} is missing from the grid or covered twice"
                )));
            }
            seen[block_id] = true;
            let (r0, c0) = grid.positions[block_id];
            for b in 0..h {
                for j in 0..grid.d_w {
                    for i in 0..grid.d_l {
                        let v = g.x.get(i + grid.d_l * j, b, slot);
                        let cur = acc.get(r0 + i, c0 + j, b);
                        acc.set(r0 + i, c0 + j, b, cur + v);
                    }
                }
            }
            for j in 0..grid.d_w {
                for i in 0..grid.d_l {
                    coverage[(r0 + i) + l * (c0 + j)] += 1.0;
                }
            }
        }
    }
    if !seen.iter().all(|&v| v) {
        return Err(LtdlError::Argument("groups do not cover every block".into()));
    }
    let mut out = Tensor3::zeros(dims);
    for b in 0..h {
        for j in 0..w {
            for i in 0..l {
                let cov = coverage[i + l * j];
                if cov < 1.0 {
                    return Err(LtdlError::Internal(format!(
                        "pixel ({i}, {j}) covered by no window"
                    )));
                }
                out.set(i, j, b, acc.get(i, j, b) / cov);
            }
        }
    }
    Ok(Msi::new(out))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_msi(dims: (usize, usize, usize), seed: u64) -> Msi {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        Msi::new(Tensor3::from_fn(dims, |_, _, _| rng.random_range(0.0..1.0)))
    }

    /// Partition of block positions implied by an assignment, as a sorted
    /// set-of-sets, for label-renaming-insensitive comparison.
    fn partition_by_position(grid: &BlockGrid, assignments: &[usize]) -> Vec<Vec<(usize, usize)>> {
        let k = assignments.iter().max().unwrap() + 1;
        let mut parts: Vec<Vec<(usize, usize)>> = vec![Vec::new(); k];
        for (i, &a) in assignments.iter().enumerate() {
            parts[a].push(grid.positions[i]);
        }
        let mut parts: Vec<Vec<(usize, usize)>> =
            parts.into_iter().filter(|p| !p.is_empty()).collect();
        for p in parts.iter_mut() {
            p.sort();
        }
        parts.sort();
        parts
    }

    #[test]
    fn single_window_covers_whole_image() {
        let msi = random_msi((7, 7, 3), 1);
        let grid = extract_blocks(&msi, 7, 7, 3, 3).unwrap();
        assert_eq!(grid.len(), 1);
        assert_eq!(grid.positions, vec![(0, 0)]);
    }

    #[test]
    fn anchors_snap_to_the_border() {
        // Hand-derived: with L = W = 10, d = 7, p = 3 the anchor offsets are
        // {0, 3} per axis, giving 4 blocks.
        let msi = random_msi((10, 10, 2), 2);
        let grid = extract_blocks(&msi, 7, 7, 3, 3).unwrap();
        assert_eq!(grid.len(), 4);
        assert_eq!(grid.positions, vec![(0, 0), (0, 3), (3, 0), (3, 3)]);
    }

    #[test]
    fn block_entries_follow_the_layout() {
        let msi = random_msi((5, 6, 3), 3);
        let grid = extract_blocks(&msi, 3, 2, 2, 2).unwrap();
        let (r0, c0) = grid.positions[1];
        let block = &grid.blocks[1];
        for b in 0..3 {
            for j in 0..2 {
                for i in 0..3 {
                    assert_eq!(block[(i + 3 * j, b)], msi.cube.get(r0 + i, c0 + j, b));
                }
            }
        }
    }

    #[test]
    fn window_or_step_violations_are_errors() {
        let msi = random_msi((5, 5, 2), 4);
        assert!(matches!(
            extract_blocks(&msi, 6, 3, 1, 1),
            Err(LtdlError::Argument(_))
        ));
        assert!(matches!(
            extract_blocks(&msi, 3, 3, 4, 1),
            Err(LtdlError::Argument(_))
        ));
        assert!(matches!(
            extract_blocks(&msi, 3, 3, 0, 1),
            Err(LtdlError::Argument(_))
        ));
    }

    #[test]
    fn extract_group_aggregate_is_identity() {
        let msi = random_msi((12, 11, 5), 5);
        let grid = extract_blocks(&msi, 4, 4, 3, 3).unwrap();
        let assignments = cluster_blocks(&grid, 3, 7, 50).unwrap();
        let groups = form_groups(&grid, &assignments).unwrap();
        let back = aggregate(&groups, &grid, msi.dims()).unwrap();
        let diff = back.cube.lin_comb(1.0, &msi.cube, -1.0).unwrap().frobenius();
        assert!(diff < 1e-12, "roundtrip error {diff}");
    }

    #[test]
    fn cluster_extremes() {
        let msi = random_msi((10, 10, 2), 6);
        let grid = extract_blocks(&msi, 7, 7, 3, 3).unwrap();
        let s = grid.len();

        let one = cluster_blocks(&grid, 1, 3, 20).unwrap();
        assert!(one.iter().all(|&a| a == 0));

        let own = cluster_blocks(&grid, s, 3, 20).unwrap();
        let mut sorted = own.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), s, "k = S must give singleton groups");

        assert!(matches!(
            cluster_blocks(&grid, s + 1, 3, 20),
            Err(LtdlError::Argument(_))
        ));
    }

    #[test]
    fn cluster_separates_distinct_populations() {
        // Two well-separated populations: block means 0 and 10, sigma 0.01.
        let mut rng = ChaCha12Rng::seed_from_u64(8);
        let msi = Msi::new(Tensor3::from_fn((4, 20, 2), |_, j, _| {
            let base = if (j / 4) % 2 == 0 { 0.0 } else { 10.0 };
            base + 0.01 * rng.random_range(-1.0..1.0)
        }));
        let grid = extract_blocks(&msi, 4, 4, 4, 4).unwrap();
        assert_eq!(grid.len(), 5);
        let assignments = cluster_blocks(&grid, 2, 11, 50).unwrap();
        // Blocks at anchors 0, 8, 16 share a population; 4, 12 the other.
        assert_eq!(assignments[0], assignments[2]);
        assert_eq!(assignments[2], assignments[4]);
        assert_eq!(assignments[1], assignments[3]);
        assert_ne!(assignments[0], assignments[1]);
    }

    #[test]
    fn cluster_is_deterministic_and_permutation_invariant() {
        let msi = random_msi((13, 13, 3), 9);
        let grid = extract_blocks(&msi, 4, 4, 3, 3).unwrap();
        let a1 = cluster_blocks(&grid, 4, 99, 50).unwrap();
        let a2 = cluster_blocks(&grid, 4, 99, 50).unwrap();
        assert_eq!(a1, a2);

        let mut permuted = grid.clone();
        let mut order: Vec<usize> = (0..grid.len()).collect();
        let mut rng = ChaCha12Rng::seed_from_u64(123);
        order.shuffle(&mut rng);
        permuted.positions = order.iter().map(|&i| grid.positions[i]).collect();
        permuted.blocks = order.iter().map(|&i| grid.blocks[i].clone()).collect();
        let a3 = cluster_blocks(&permuted, 4, 99, 50).unwrap();
        assert_eq!(
            partition_by_position(&grid, &a1),
            partition_by_position(&permuted, &a3)
        );
    }

    #[test]
    fn form_groups_single_block() {
        let msi = random_msi((7, 7, 4), 10);
        let grid = extract_blocks(&msi, 7, 7, 3, 3).unwrap();
        let groups = form_groups(&grid, &[0]).unwrap();
        assert_eq!(groups.len(), 1);
        assert_eq!(groups[0].x.dims(), (49, 4, 1));
    }

    #[test]
    fn group_slices_recover_member_blocks() {
        let msi = random_msi((10, 10, 3), 11);
        let grid = extract_blocks(&msi, 7, 7, 3, 3).unwrap();
        let assignments = vec![1, 0, 1, 0];
        let groups = form_groups(&grid, &assignments).unwrap();
        let total: usize = groups.iter().map(|g| g.member_ids.len()).sum();
        assert_eq!(total, grid.len());
        for g in &groups {
            for (slot, &id) in g.member_ids.iter().enumerate() {
                assert_eq!(g.x.mode3_slice(slot), grid.blocks[id]);
            }
            assert!(g.member_ids.windows(2).all(|w| w[0] < w[1]));
        }
    }

    #[test]
    fn group_sizes_partition_all_blocks() {
        let msi = random_msi((13, 10, 2), 12);
        let grid = extract_blocks(&msi, 4, 4, 3, 3).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(13);
        let assignments: Vec<usize> = (0..grid.len()).map(|_| rng.random_range(0..5)).collect();
        let groups = form_groups(&grid, &assignments).unwrap();
        let total: usize = groups.iter().map(|g| g.member_ids.len()).sum();
        assert_eq!(total, grid.len());
    }

    #[test]
    fn out_of_range_label_is_error() {
        let msi = random_msi((10, 10, 2), 14);
        let grid = extract_blocks(&msi, 7, 7, 3, 3).unwrap();
        let mut labels = vec![0; grid.len()];
        labels[1] = grid.len();
        assert!(matches!(
            form_groups(&grid, &labels),
            Err(LtdlError::Argument(_))
        ));
        assert!(matches!(
            form_groups(&grid, &[0]),
            Err(LtdlError::Argument(_))
        ));
    }

    #[test]
    fn aggregate_averages_overlap() {
        // Two horizontally overlapping windows with constant values 0 and 1:
        // the overlap must average to 0.5.
        let msi = Msi::new(Tensor3::zeros((7, 10, 2)));
        let grid = extract_blocks(&msi, 7, 7, 3, 3).unwrap();
        assert_eq!(grid.positions, vec![(0, 0), (0, 3)]);
        let mut groups = form_groups(&grid, &[0, 1]).unwrap();
        groups[0].x = groups[0].x.map(|_| 0.0);
        groups[1].x = groups[1].x.map(|_| 1.0);
        let out = aggregate(&groups, &grid, msi.dims()).unwrap();
        for b in 0..2 {
            for i in 0..7 {
                for j in 0..3 {
                    assert_eq!(out.cube.get(i, j, b), 0.0);
                }
                for j in 3..7 {
                    assert_eq!(out.cube.get(i, j, b), 0.5);
                }
                for j in 7..10 {
                    assert_eq!(out.cube.get(i, j, b), 1.0);
                }
            }
        }
    }

    #[test]
    fn aggregate_single_window_is_copy_back() {
        let msi = random_msi((7, 7, 3), 15);
        let grid = extract_blocks(&msi, 7, 7, 3, 3).unwrap();
        let groups = form_groups(&grid, &[0]).unwrap();
        let out = aggregate(&groups, &grid, msi.dims()).unwrap();
        assert_eq!(out.cube, msi.cube);
    }

    #[test]
    fn aggregate_rejects_incomplete_cover() {
        let msi = random_msi((10, 10, 2), 16);
        let grid = extract_blocks(&msi, 7, 7, 3, 3).unwrap();
        let groups = form_groups(&grid, &[0, 0, 0, 0]).unwrap();
        let err = aggregate(
            &[TensorGroup {
                x: groups[0].x.clone(),
                member_ids: vec![0, 1, 2],
            }],
            &grid,
            msi.dims(),
        );
        assert!(err.is_err());
    }

    #[test]
    fn suggested_clusters_scale() {
        assert_eq!(suggested_clusters(1), 1);
        assert_eq!(suggested_clusters(49), 1);
        assert_eq!(suggested_clusters(400), 8);
        assert_eq!(suggested_clusters(28900), 578);
    }
}
