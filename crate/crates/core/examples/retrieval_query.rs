//! Trains a RIVAE on Synth, embeds a search set of test `x2` items once and
//! answers a few single `x1` queries against it, then runs the full
//! every-item-is-a-query protocol in both scoring modes.
//!
//!     cargo run --release --example retrieval_query -- [epochs]

use rivae::cli::{train, AnyModel, ModelKind, RunConfig};
use rivae::datagen::{synth_generate, DatasetKind};
use rivae::numkit::Rng;
use rivae::retrieval::{evaluate, rank_of, score_query, ScoreMode, SearchDb};

fn main() -> rivae::Result<()> {
    let epochs: usize = std::env::args()
        .nth(1)
        .map_or(600, |s| s.parse().expect("epochs"));
    let mut cfg = RunConfig::defaults(DatasetKind::Synth, ModelKind::Rivae).synth_calibrated();
    cfg.schedule.epochs = epochs;
    cfg.schedule.decay_epochs.retain(|&d| d < epochs);
    let data = synth_generate(&cfg.synth_spec())?;
    let AnyModel::Rivae(model) = train(&cfg, &data, None, |_, _| Ok(()))?.model else {
        unreachable!()
    };

    let test = &data.test;
    let mut rng = Rng::new(42);
    let items = rng.sample_indices(test.len(), 1000);
    let db = SearchDb::build(&model, &test.x2, items.clone())?;
    let factors = test.factors.as_ref().expect("synth has factors");
    for q in 0..3 {
        let scores = score_query(
            &model,
            test.x1.row(items[q]),
            &db,
            ScoreMode::Mean,
            &mut rng,
        )?;
        let mut order: Vec<usize> = (0..db.len()).collect();
        order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
        println!(
            "query {} (shared factors {:.2?}): true partner ranked {}",
            items[q],
            &factors.row(items[q])[..2],
            rank_of(&scores, q)
        );
        for &j in &order[..3] {
            println!(
                "   db {:4}  score {:12.1}  shared factors {:.2?}",
                items[j],
                scores[j],
                &factors.row(items[j])[..2]
            );
        }
    }

    for mode in [ScoreMode::Sample, ScoreMode::Mean] {
        let rep = evaluate(&model, test, 1000, 10, mode, &Rng::new(7))?;
        println!(
            "{mode:?}: R@1 {:.3}  R@5 {:.3}  R@10 {:.3}  Med-R {:.1}",
            rep.recall(1),
            rep.recall(5),
            rep.recall(10),
            rep.med_r
        );
    }
    Ok(())
}
