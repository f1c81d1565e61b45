//! The CRF dynamic programs against exhaustive enumeration of label paths.

use aspect_transfer::crf::{log_sum_exp, ScoreView};
use ndarray::{Array1, Array2};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const L: usize = 3;

fn paths(n: usize) -> Vec<Vec<usize>> {
    (0..L.pow(n as u32))
        .map(|mut code| {
            (0..n)
                .map(|_| {
                    let t = code % L;
                    code /= L;
                    t
                })
                .collect()
        })
        .collect()
}

struct Params {
    emissions: Array2<f64>,
    transitions: Array2<f64>,
    start: Array1<f64>,
    stop: Array1<f64>,
}

impl Params {
    fn random(n: usize, scale: f64, rng: &mut ChaCha8Rng) -> Self {
        let mut draw = |r, c| Array2::from_shape_fn((r, c), |_| rng.random_range(-scale..scale));
        let emissions = draw(n, L);
        let transitions = draw(L, L);
        let start = draw(1, L).row(0).to_owned();
        let stop = draw(1, L).row(0).to_owned();
        Params {
            emissions,
            transitions,
            start,
            stop,
        }
    }

    fn view(&self) -> ScoreView<'_> {
        ScoreView::new(&self.emissions, &self.transitions, self.start.view(), self.stop.view())
    }
}

/// Score written out directly, independent of `ScoreView::score`.
fn brute_score(p: &Params, y: &[usize]) -> f64 {
    let mut s = p.start[y[0]] + p.stop[y[y.len() - 1]];
    for (i, &t) in y.iter().enumerate() {
        s += p.emissions[[i, t]];
        if i > 0 {
            s += p.transitions[[y[i - 1], t]];
        }
    }
    s
}

#[test]
fn partition_and_viterbi_match_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for trial in 0..200 {
        let n = 1 + trial % 5;
        let p = Params::random(n, 3.0, &mut rng);
        let view = p.view();
        let all = paths(n);
        let scores: Vec<f64> = all.iter().map(|y| brute_score(&p, y)).collect();
        for (y, s) in all.iter().zip(&scores) {
            assert!((view.score(y) - s).abs() < 1e-12);
        }
        let log_z = log_sum_exp(&scores);
        assert!((view.log_partition() - log_z).abs() < 1e-9, "trial {trial}");

        // Lowest-index path among the maxima, as the decoder breaks ties.
        let best = (0..all.len())
            .fold(0, |b, i| if scores[i] > scores[b] { i } else { b });
        let decoded = view.viterbi();
        assert!((brute_score(&p, &decoded) - scores[best]).abs() < 1e-12);
        assert_eq!(decoded, all[best], "trial {trial}");
    }
}

#[test]
fn marginals_match_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for n in 1..=5 {
        let p = Params::random(n, 2.0, &mut rng);
        let all = paths(n);
        let scores: Vec<f64> = all.iter().map(|y| brute_score(&p, y)).collect();
        let log_z = log_sum_exp(&scores);
        let mut unary = Array2::<f64>::zeros((n, L));
        let mut pairwise = Array2::<f64>::zeros((L, L));
        for (y, s) in all.iter().zip(&scores) {
            let prob = (s - log_z).exp();
            for (i, &t) in y.iter().enumerate() {
                unary[[i, t]] += prob;
                if i > 0 {
                    pairwise[[y[i - 1], t]] += prob;
                }
            }
        }
        let m = p.view().marginals();
        for (a, b) in m.unary.iter().zip(&unary) {
            assert!((a - b).abs() < 1e-10);
        }
        for (a, b) in m.pairwise.iter().zip(&pairwise) {
            assert!((a - b).abs() < 1e-10);
        }
        for t in 0..L {
            assert!((m.start[t] - unary[[0, t]]).abs() < 1e-10);
            assert!((m.stop[t] - unary[[n - 1, t]]).abs() < 1e-10);
        }
    }
}

#[test]
fn all_zero_parameters_decode_to_lowest_label() {
    let p = Params {
        emissions: Array2::zeros((4, L)),
        transitions: Array2::zeros((L, L)),
        start: Array1::zeros(L),
        stop: Array1::zeros(L),
    };
    assert_eq!(p.view().viterbi(), vec![0; 4]);
    assert!((p.view().log_partition() - 4.0 * 3f64.ln()).abs() < 1e-12);
}

proptest! {
    #[test]
    fn partition_bounds_every_path(seed in any::<u64>(), n in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = Params::random(n, 10.0, &mut rng);
        let view = p.view();
        let log_z = view.log_partition();
        let best = view.score(&view.viterbi());
        // max ≤ log Z ≤ max + n log 3 for a 3-label chain.
        prop_assert!(best <= log_z + 1e-9);
        prop_assert!(log_z <= best + (n as f64) * 3f64.ln() + 1e-9);
        let m = view.marginals();
        for row in m.unary.rows() {
            prop_assert!((row.sum() - 1.0).abs() < 1e-9);
        }
    }
}
