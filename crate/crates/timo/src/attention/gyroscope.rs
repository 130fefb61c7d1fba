use crate::error::{Error, Result};

/// Per-query canonical key ordering for gyroscope attention: for a query
/// at `(t, x, y)`, first every position of the spatial plane at time `t`
/// in row-major order, then the same spatial position at the other
/// timestamps in ascending `t`. Every row has `T + Np² − 1` entries.
#[derive(Debug, Clone)]
pub struct GyroscopeIndexSet {
    t: usize,
    np: usize,
    /// `[N × U]`, row `p` holds the flat key indices for query `p`.
    idx: Vec<u32>,
}

impl GyroscopeIndexSet {
    pub fn build(t: usize, np: usize) -> Result<Self> {
        if t == 0 || np == 0 {
            return Err(Error::dim(format!(
                "gyroscope set needs T >= 1 and Np >= 1, got T={t}, Np={np}"
            )));
        }
        let plane = np * np;
        let n = t * plane;
        let u = t + plane - 1;
        let mut idx = Vec::with_capacity(n * u);
        for ti in 0..t {
            for r in 0..plane {
                for j in 0..plane {
                    idx.push((ti * plane + j) as u32);
                }
                for to in 0..t {
                    if to != ti {
                        idx.push((to * plane + r) as u32);
                    }
                }
            }
        }
        Ok(GyroscopeIndexSet { t, np, idx })
    }

    pub fn t(&self) -> usize {
        self.t
    }

    pub fn np(&self) -> usize {
        self.np
    }

    /// Keys per query: `T + Np² − 1`.
    pub fn set_size(&self) -> usize {
        self.t + self.np * self.np - 1
    }

    pub fn num_queries(&self) -> usize {
        self.t * self.np * self.np
    }

    /// Key indices for query `p` in canonical order.
    pub fn row(&self, p: usize) -> &[u32] {
        let u = self.set_size();
        &self.idx[p * u..(p + 1) * u]
    }

    /// Whether key `key` shares the query's temporal plane or spatial line.
    pub fn is_member(&self, query: usize, key: usize) -> bool {
        let plane = self.np * self.np;
        let (qt, qr) = (query / plane, query % plane);
        let (kt, kr) = (key / plane, key % plane);
        kt == qt || kr == qr
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spec_example_t3_np4() {
        // query at (x=1, y=2, z=0): 16 plane indices then (1,2,t) for t in {1,2}
        let g = GyroscopeIndexSet::build(3, 4).unwrap();
        let p = 0 * 16 + 1 * 4 + 2;
        let row = g.row(p);
        assert_eq!(row.len(), 18);
        let expect_plane: Vec<u32> = (0..16).collect();
        assert_eq!(&row[..16], expect_plane.as_slice());
        assert_eq!(&row[16..], &[16 + 6, 32 + 6]);
    }

    #[test]
    fn degenerate_t1_is_full_plane() {
        let g = GyroscopeIndexSet::build(1, 3).unwrap();
        for p in 0..9 {
            let row = g.row(p);
            assert_eq!(row.len(), 9);
            let sorted: Vec<u32> = (0..9).collect();
            assert_eq!(row, sorted.as_slice());
        }
    }

    #[test]
    fn degenerate_np1_is_full_line() {
        let g = GyroscopeIndexSet::build(5, 1).unwrap();
        // every row: self plane (just itself) then the other 4 timestamps
        for t in 0..5 {
            let row = g.row(t);
            assert_eq!(row.len(), 5);
            assert_eq!(row[0], t as u32);
            let mut others: Vec<u32> = (0..5).filter(|&x| x != t as u32).collect();
            others.sort_unstable();
            assert_eq!(&row[1..], others.as_slice());
        }
    }

    #[test]
    fn cardinality_membership_no_duplicates_exhaustive() {
        for t in 1..=8usize {
            for np in 1..=8usize {
                let g = GyroscopeIndexSet::build(t, np).unwrap();
                let n = g.num_queries();
                let u = g.set_size();
                assert_eq!(u, t + np * np - 1);
                for p in 0..n {
                    let row = g.row(p);
                    assert_eq!(row.len(), u);
                    let mut seen = vec![false; n];
                    let mut self_count = 0;
                    for &k in row {
                        assert!(!seen[k as usize], "duplicate key for query {p}");
                        seen[k as usize] = true;
                        assert!(g.is_member(p, k as usize));
                        if k as usize == p {
                            self_count += 1;
                        }
                    }
                    assert_eq!(self_count, 1, "query must appear exactly once");
                }
            }
        }
    }
}
