use std::ops::Range;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum JobStatus {
    Pending,
    Done,
    Failed,
}

/// One unit of work: every image pair between two batch ranges.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TileJob {
    pub batch_a: Range<usize>,
    pub batch_b: Range<usize>,
    pub status: JobStatus,
}

impl TileJob {
    pub fn pairs(&self) -> usize {
        self.batch_a.len() * self.batch_b.len()
    }

    pub fn is_diagonal(&self) -> bool {
        self.batch_a == self.batch_b
    }
}

fn chunks(n: usize, tile: usize) -> Vec<Range<usize>> {
    (0..n)
        .step_by(tile)
        .map(|start| start..(start + tile).min(n))
        .collect()
}

/// Splits the pair grid into `tile x tile` jobs. In symmetric mode only jobs
/// on or above the block diagonal are emitted.
pub fn schedule_tiles(n_a: usize, n_b: usize, tile: usize, symmetric: bool) -> Vec<TileJob> {
    assert!(tile >= 1, "tile size must be at least 1");
    let rows = chunks(n_a, tile);
    let cols = chunks(n_b, tile);
    let mut jobs = Vec::new();
    for (ri, ra) in rows.iter().enumerate() {
        for (ci, rb) in cols.iter().enumerate() {
            if symmetric && ci < ri {
                continue;
            }
            jobs.push(TileJob {
                batch_a: ra.clone(),
                batch_b: rb.clone(),
                status: JobStatus::Pending,
            });
        }
    }
    jobs
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::HashSet;

    #[test]
    fn symmetric_triangle() {
        let jobs = schedule_tiles(4, 4, 2, true);
        let ranges: Vec<_> = jobs
            .iter()
            .map(|j| (j.batch_a.clone(), j.batch_b.clone()))
            .collect();
        assert_eq!(ranges, vec![(0..2, 0..2), (0..2, 2..4), (2..4, 2..4)]);
    }

    #[test]
    fn rectangular_grid() {
        let jobs = schedule_tiles(3, 2, 2, false);
        assert_eq!(jobs.len(), 2);
        assert_eq!(jobs[0].batch_a, 0..2);
        assert_eq!(jobs[1].batch_a, 2..3);
        assert!(jobs.iter().all(|j| j.batch_b == (0..2)));
    }

    proptest! {
        #[test]
        fn covers_every_pair_once(n_a in 1usize..30, n_b in 1usize..30, tile in 1usize..9, sym in any::<bool>()) {
            let n_b = if sym { n_a } else { n_b };
            let jobs = schedule_tiles(n_a, n_b, tile, sym);
            let mut seen = HashSet::new();
            let mut total = 0;
            for job in &jobs {
                prop_assert!(!job.batch_a.is_empty() && !job.batch_b.is_empty());
                if sym {
                    prop_assert!(job.batch_a.start <= job.batch_b.start);
                }
                for a in job.batch_a.clone() {
                    for b in job.batch_b.clone() {
                        let key = if sym { (a.min(b), a.max(b)) } else { (a, b) };
                        // Diagonal jobs hold both orders of a pair.
                        if !(sym && job.is_diagonal() && a > b) {
                            prop_assert!(seen.insert(key), "pair {:?} covered twice", key);
                        }
                    }
                }
                total += job.pairs();
            }
            if sym {
                prop_assert_eq!(seen.len(), n_a * (n_a + 1) / 2);
            } else {
                prop_assert_eq!(seen.len(), n_a * n_b);
                prop_assert_eq!(total, n_a * n_b);
            }
        }
    }
}
