//! Linear-chain CRF arithmetic over a precomputed `n x L` emission matrix.
//!
//! A label sequence `y` scores
//! `start[y0] + Σ emit[i, yi] + Σ trans[yi, yi+1] + stop[y(n-1)]`.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};

/// Borrowed CRF potentials for one sentence.
#[derive(Clone, Copy, Debug)]
pub struct ScoreView<'a> {
    pub emissions: ArrayView2<'a, f64>,
    pub transitions: ArrayView2<'a, f64>,
    pub start: ArrayView1<'a, f64>,
    pub stop: ArrayView1<'a, f64>,
}

/// Expected feature counts under the CRF distribution.
#[derive(Clone, Debug)]
pub struct Marginals {
    /// `n x L` per-position label probabilities.
    pub unary: Array2<f64>,
    /// `L x L` expected transition counts summed over positions.
    pub pairwise: Array2<f64>,
    pub start: Array1<f64>,
    pub stop: Array1<f64>,
}

impl<'a> ScoreView<'a> {
    pub fn new(
        emissions: &'a Array2<f64>,
        transitions: &'a Array2<f64>,
        start: ArrayView1<'a, f64>,
        stop: ArrayView1<'a, f64>,
    ) -> Self {
        let labels = emissions.ncols();
        assert_eq!(transitions.dim(), (labels, labels));
        assert_eq!(start.len(), labels);
        assert_eq!(stop.len(), labels);
        ScoreView {
            emissions: emissions.view(),
            transitions: transitions.view(),
            start,
            stop,
        }
    }

    pub fn len(&self) -> usize {
        self.emissions.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn labels(&self) -> usize {
        self.emissions.ncols()
    }

    pub fn score(&self, tags: &[usize]) -> f64 {
        assert_eq!(tags.len(), self.len(), "tag count must equal sentence length");
        let Some((&first, _)) = tags.split_first() else {
            return 0.0;
        };
        let mut total = self.start[first] + self.stop[tags[tags.len() - 1]];
        for (i, &y) in tags.iter().enumerate() {
            total += self.emissions[[i, y]];
        }
        for pair in tags.windows(2) {
            total += self.transitions[[pair[0], pair[1]]];
        }
        total
    }

    /// `alpha[i, y]`: log-sum of all prefixes ending in `y` at `i`.
    fn forward(&self) -> Array2<f64> {
        let (n, l) = (self.len(), self.labels());
        let mut alpha = Array2::zeros((n, l));
        for y in 0..l {
            alpha[[0, y]] = self.start[y] + self.emissions[[0, y]];
        }
        let mut buf = vec![0.0; l];
        for i in 1..n {
            for y in 0..l {
                for (p, b) in buf.iter_mut().enumerate() {
                    *b = alpha[[i - 1, p]] + self.transitions[[p, y]];
                }
                alpha[[i, y]] = log_sum_exp(&buf) + self.emissions[[i, y]];
            }
        }
        alpha
    }

    /// `beta[i, y]`: log-sum of all suffixes after `i` given `y` at `i`.
    fn backward(&self) -> Array2<f64> {
        let (n, l) = (self.len(), self.labels());
        let mut beta = Array2::zeros((n, l));
        for y in 0..l {
            beta[[n - 1, y]] = self.stop[y];
        }
        let mut buf = vec![0.0; l];
        for i in (0..n - 1).rev() {
            for y in 0..l {
                for (q, b) in buf.iter_mut().enumerate() {
                    *b = self.transitions[[y, q]] + self.emissions[[i + 1, q]] + beta[[i + 1, q]];
                }
                beta[[i, y]] = log_sum_exp(&buf);
            }
        }
        beta
    }

    /// Log of the summed exponentiated score of every label sequence.
    pub fn log_partition(&self) -> f64 {
        assert!(!self.is_empty(), "CRF over an empty sentence");
        let alpha = self.forward();
        let last = alpha.nrows() - 1;
        let terms: Vec<f64> = (0..self.labels())
            .map(|y| alpha[[last, y]] + self.stop[y])
            .collect();
        log_sum_exp(&terms)
    }

    pub fn marginals(&self) -> Marginals {
        let (n, l) = (self.len(), self.labels());
        let alpha = self.forward();
        let beta = self.backward();
        let log_z = {
            let terms: Vec<f64> = (0..l).map(|y| alpha[[n - 1, y]] + self.stop[y]).collect();
            log_sum_exp(&terms)
        };
        let mut unary = Array2::zeros((n, l));
        for i in 0..n {
            for y in 0..l {
                unary[[i, y]] = (alpha[[i, y]] + beta[[i, y]] - log_z).exp();
            }
        }
        let mut pairwise = Array2::zeros((l, l));
        for i in 0..n.saturating_sub(1) {
            for p in 0..l {
                for q in 0..l {
                    pairwise[[p, q]] += (alpha[[i, p]]
                        + self.transitions[[p, q]]
                        + self.emissions[[i + 1, q]]
                        + beta[[i + 1, q]]
                        - log_z)
                        .exp();
                }
            }
        }
        let start = unary.row(0).to_owned();
        let stop = unary.row(n - 1).to_owned();
        Marginals {
            unary,
            pairwise,
            start,
            stop,
        }
    }

    /// Highest-scoring label sequence. Ties resolve toward the lower label
    /// index at every choice point.
    pub fn viterbi(&self) -> Vec<usize> {
        let (n, l) = (self.len(), self.labels());
        assert!(n > 0, "CRF over an empty sentence");
        let mut best = Array2::<f64>::zeros((n, l));
        let mut back = Array2::<usize>::zeros((n, l));
        for y in 0..l {
            best[[0, y]] = self.start[y] + self.emissions[[0, y]];
        }
        for i in 1..n {
            for y in 0..l {
                let (mut arg, mut top) = (0, f64::NEG_INFINITY);
                for p in 0..l {
                    let v = best[[i - 1, p]] + self.transitions[[p, y]];
                    if v > top {
                        top = v;
                        arg = p;
                    }
                }
                best[[i, y]] = top + self.emissions[[i, y]];
                back[[i, y]] = arg;
            }
        }
        let (mut y, mut top) = (0, f64::NEG_INFINITY);
        for q in 0..l {
            let v = best[[n - 1, q]] + self.stop[q];
            if v > top {
                top = v;
                y = q;
            }
        }
        let mut path = vec![0; n];
        path[n - 1] = y;
        for i in (1..n).rev() {
            y = back[[i, y]];
            path[i - 1] = y;
        }
        path
    }
}

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array1};

    fn zeros(n: usize) -> (Array2<f64>, Array2<f64>, Array1<f64>, Array1<f64>) {
        (
            Array2::zeros((n, 3)),
            Array2::zeros((3, 3)),
            Array1::zeros(3),
            Array1::zeros(3),
        )
    }

    #[test]
    fn uniform_partition() {
        for (n, expected) in [(1, 3f64.ln()), (2, 9f64.ln())] {
            let (e, t, a, b) = zeros(n);
            let v = ScoreView::new(&e, &t, a.view(), b.view());
            assert!((v.log_partition() - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_potentials_decode_to_first_label() {
        let (e, t, a, b) = zeros(4);
        let v = ScoreView::new(&e, &t, a.view(), b.view());
        assert_eq!(v.viterbi(), vec![0, 0, 0, 0]);
    }

    #[test]
    fn single_token_score() {
        let e = array![[1.0, 2.0, 3.0]];
        let (_, t, a, b) = zeros(1);
        let v = ScoreView::new(&e, &t, a.view(), b.view());
        assert_eq!(v.score(&[2]), 3.0);
        assert_eq!(v.viterbi(), vec![2]);
    }

    #[test]
    fn marginals_are_distributions() {
        let e = array![[0.1, -0.3, 0.8], [1.2, 0.0, -0.4], [0.3, 0.3, 0.1]];
        let t = array![[0.2, -0.1, 0.0], [0.5, 0.1, -0.7], [0.0, -1.0, 0.4]];
        let a = array![0.1, -0.2, 0.3];
        let b = array![-0.3, 0.2, 0.0];
        let v = ScoreView::new(&e, &t, a.view(), b.view());
        let m = v.marginals();
        for row in m.unary.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
        assert!((m.pairwise.sum() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn log_sum_exp_handles_large_values() {
        assert!((log_sum_exp(&[1000.0, 1000.0]) - (1000.0 + 2f64.ln())).abs() < 1e-9);
        assert_eq!(log_sum_exp(&[]), f64::NEG_INFINITY);
    }
}
