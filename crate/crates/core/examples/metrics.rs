//! Object- and point-level metrics on hand-made scores, plus mean ranking
//! across methods.

use mc4ad::metrics::{
    aupr, auroc, evaluate_scores, mean_rank, CategoryScores, PointPooling, SampleScores,
};

fn sample(object: f64, points: &[f64], mask: &[u8]) -> SampleScores {
    SampleScores {
        object_score: object,
        point_scores: points.to_vec(),
        mask: Some(mask.to_vec()),
        label: u8::from(mask.contains(&1)),
    }
}

fn main() -> mc4ad::error::Result<()> {
    let scores = [0.9, 0.8, 0.7, 0.3, 0.2, 0.1];
    let labels = [1, 1, 0, 1, 0, 0];
    println!("auroc {:.4}", auroc(&scores, &labels)?);
    println!("aupr  {:.4}", aupr(&scores, &labels)?);

    let cats = vec![
        CategoryScores {
            name: "bottle".into(),
            samples: vec![
                sample(0.2, &[0.1, 0.2, 0.1], &[0, 0, 0]),
                sample(0.9, &[0.1, 0.9, 0.8], &[0, 1, 1]),
                sample(0.4, &[0.4, 0.1, 0.3], &[1, 0, 0]),
            ],
            scoring_seconds: 0.01,
        },
        CategoryScores {
            name: "gear".into(),
            samples: vec![
                sample(0.1, &[0.1, 0.1], &[0, 0]),
                sample(0.6, &[0.6, 0.2], &[1, 0]),
            ],
            scoring_seconds: 0.02,
        },
    ];
    for pooling in [PointPooling::Category, PointPooling::Sample] {
        let r = evaluate_scores(&cats, pooling)?;
        println!("\npooling {pooling:?}");
        print!("{}", r.to_csv());
    }

    // Rows are categories, columns methods.
    let table = vec![vec![0.9, 0.8, 0.7], vec![0.6, 0.6, 0.9]];
    println!("\nmean rank per method {:?}", mean_rank(&table)?);
    Ok(())
}
