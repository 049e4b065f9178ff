use std::collections::BTreeSet;

use proptest::prelude::*;
use uws::align::{oracle_alignment, segment_from_alignment, AlignmentMatrix};
use uws::corpus::{generate_synthetic, SyntheticSpec};
use uws::eval::{evaluate, Plane};
use uws::seq::{Segmentation, UnitSequence};

fn corpus(n: usize) -> Vec<Segmentation> {
    let spec = SyntheticSpec::new(5, 2, &["012", "34", "1403", "230", "4121"], n, 31);
    generate_synthetic(&spec).unwrap().gold_words
}

#[test]
fn noisy_oracle_recovers_most_boundaries() {
    let gold = corpus(200);
    let hyp: Vec<Segmentation> = gold
        .iter()
        .enumerate()
        .map(|(i, g)| {
            let m = oracle_alignment(g, g.words.len(), 0.2, i as u64).unwrap();
            segment_from_alignment(&g.units(), &m).unwrap()
        })
        .collect();
    let r = evaluate(&hyp, &gold, Plane::Time, 0.02).unwrap();
    assert!(r.boundary.fscore >= 0.9, "F = {}", r.boundary.fscore);
}

#[test]
fn noiseless_oracle_is_exact_and_one_column_gives_one_word() {
    for g in corpus(30) {
        let m = oracle_alignment(&g, g.words.len(), 0.0, 1).unwrap();
        assert_eq!(segment_from_alignment(&g.units(), &m).unwrap(), g);
        let one = oracle_alignment(&g, 1, 0.3, 1).unwrap();
        assert_eq!(
            segment_from_alignment(&g.units(), &one)
                .unwrap()
                .words
                .len(),
            1
        );
    }
}

fn matrix() -> impl Strategy<Value = (usize, usize, Vec<f64>)> {
    (1usize..10, 1usize..5)
        .prop_flat_map(|(r, c)| (Just(r), Just(c), prop::collection::vec(0.01f64..1.0, r * c)))
}

fn normalized(rows: usize, cols: usize, raw: &[f64]) -> AlignmentMatrix {
    let mut data = raw.to_vec();
    for r in data.chunks_mut(cols) {
        let s: f64 = r.iter().sum();
        r.iter_mut().for_each(|v| *v /= s);
    }
    AlignmentMatrix::new("p", rows, cols, data).unwrap()
}

proptest! {
    #[test]
    fn relabeling_target_words_keeps_boundaries((rows, cols, raw) in matrix(), shift in 0usize..5) {
        let units = UnitSequence::symbolic("p", &vec!["x"; rows]);
        let m = normalized(rows, cols, &raw);
        let perm: Vec<usize> = (0..cols).map(|j| (j + shift) % cols).collect();
        let mut data = vec![0.0; rows * cols];
        for i in 0..rows {
            for j in 0..cols {
                data[i * cols + perm[j]] = m.row(i)[j];
            }
        }
        let permuted = AlignmentMatrix::new("p", rows, cols, data).unwrap();
        let strict_peaks = (0..rows).all(|i| {
            let r = m.row(i);
            let best = r.iter().copied().fold(f64::MIN, f64::max);
            r.iter().filter(|&&v| v == best).count() == 1
        });
        prop_assume!(strict_peaks);
        let a = segment_from_alignment(&units, &m).unwrap();
        let b = segment_from_alignment(&units, &permuted).unwrap();
        prop_assert_eq!(a.boundary_flags(), b.boundary_flags());
    }

    #[test]
    fn words_follow_peak_runs((rows, cols, raw) in matrix()) {
        let units = UnitSequence::symbolic("p", &vec!["x"; rows]);
        let m = normalized(rows, cols, &raw);
        let seg = segment_from_alignment(&units, &m).unwrap();
        let peaks = m.peaks();
        let runs = 1 + peaks.windows(2).filter(|w| w[0] != w[1]).count();
        prop_assert_eq!(seg.words.len(), runs);
        prop_assert!(seg.words.len() <= rows);
        prop_assert_eq!(&seg.units(), &units);
        let mut monotone = peaks.clone();
        monotone.sort();
        let distinct = monotone.iter().collect::<BTreeSet<_>>().len();
        let sorted_matrix: Vec<f64> = monotone
            .iter()
            .flat_map(|&p| (0..cols).map(move |j| if j == p { 1.0 } else { 0.0 }))
            .collect();
        let sorted_seg = segment_from_alignment(&units, &AlignmentMatrix::new("p", rows, cols, sorted_matrix).unwrap()).unwrap();
        prop_assert!(sorted_seg.words.len() <= rows.min(distinct));
    }
}
