//! The D/C/I scores of a correlation table and the digit-transition
//! overlap/coverage metrics, on hand-made inputs.

use rivae::probe::{
    dci, overlap_coverage, pair_column, transition_row, CorrelationTable, TransitionTable,
};

fn main() -> rivae::Result<()> {
    // each latent tracks one factor
    let clean = CorrelationTable::new(vec![vec![0.95, 0.05], vec![0.10, 0.90]])?;
    // both latents mix both factors
    let mixed = CorrelationTable::new(vec![vec![0.6, 0.5], vec![0.5, 0.6]])?;
    for (name, t) in [("clean", &clean), ("mixed", &mixed)] {
        let s = dci(t, 10.0);
        println!(
            "{name}: D {:.4}  C {:.4}  I {:.4}",
            s.disentanglement, s.completeness, s.informativeness
        );
    }

    let seq = [2, 2, 2, 3, 8, 8, 9, 3, 2, 2, 2];
    let row = transition_row(&seq);
    let marked: Vec<String> = (0..10)
        .flat_map(|a| (a + 1..10).map(move |b| (a, b)))
        .filter(|&(a, b)| row[pair_column(a, b)] > 0.0)
        .map(|(a, b)| format!("{a}-{b}"))
        .collect();
    println!("traversal {seq:?} marks {marked:?}");

    let other = transition_row(&[1, 4, 7, 4, 1]);
    let table = TransitionTable {
        t: vec![row, other],
    };
    let (overlap, coverage) = overlap_coverage(&table)?;
    println!(
        "overlap {overlap:.5} (max {:.5})  coverage {coverage:.4}",
        1.0 / 45.0
    );
    Ok(())
}
