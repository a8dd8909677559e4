#![allow(dead_code)]

use edgefreq_core::budget::ResourceBudget;

pub fn two_device() -> ResourceBudget {
    ResourceBudget::with_default_gamma(10.0, 15.0, vec![2.0, 3.0]).unwrap()
}

pub fn three_device() -> ResourceBudget {
    ResourceBudget::with_default_gamma(10.0, 15.0, vec![2.0, 3.0, 5.0]).unwrap()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Gray-code Sobol sequence in up to four dimensions (Joe–Kuo direction
/// numbers), 32-bit resolution.
pub struct Sobol {
    dims: usize,
    directions: Vec<[u32; 32]>,
    state: Vec<u32>,
    index: u32,
}

impl Sobol {
    pub fn new(dims: usize) -> Self {
        // (s, a, m_1..m_s) for dimensions 2..=4; dimension 1 is van der Corput.
        const TABLE: [(usize, u32, &[u32]); 3] = [(1, 0, &[1]), (2, 1, &[1, 3]), (3, 1, &[1, 3, 1])];
        assert!((1..=4).contains(&dims), "only four dimensions are tabulated");
        let mut directions = Vec::with_capacity(dims);
        let mut first = [0u32; 32];
        for (k, v) in first.iter_mut().enumerate() {
            *v = 1 << (31 - k);
        }
        directions.push(first);
        for &(s, a, m) in TABLE.iter().take(dims - 1) {
            let mut v = [0u32; 32];
            for k in 0..32 {
                if k < s {
                    v[k] = m[k] << (31 - k);
                } else {
                    let mut x = v[k - s] ^ (v[k - s] >> s);
                    for j in 1..s {
                        if (a >> (s - 1 - j)) & 1 == 1 {
                            x ^= v[k - j];
                        }
                    }
                    v[k] = x;
                }
            }
            directions.push(v);
        }
        Sobol { dims, directions, state: vec![0; dims], index: 0 }
    }

    /// Next point in `[0, 1)^dims`; the origin is skipped.
    pub fn next_point(&mut self) -> Vec<f64> {
        let c = self.index.trailing_ones() as usize;
        self.index += 1;
        for d in 0..self.dims {
            self.state[d] ^= self.directions[d][c];
        }
        self.state.iter().map(|&s| s as f64 / 4_294_967_296.0).collect()
    }
}
