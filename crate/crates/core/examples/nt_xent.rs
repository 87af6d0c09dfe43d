//! NT-Xent on a batch where positives agree and on one where they do not.

use mvitime::contrastive::{interleaved_pairing, nt_xent_loss, similarity_matrix, EmbeddingBatch};
use mvitime::rng::seeded;
use rand::Rng;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut rng = seeded(0);
    let (pairs, d, t) = (4, 16, 0.5);
    let anchors: Vec<Vec<f64>> = (0..pairs)
        .map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();
    let mut aligned = Vec::new();
    let mut random = Vec::new();
    for a in &anchors {
        aligned.push(a.clone());
        aligned.push(a.iter().map(|v| v + rng.random_range(-0.05..0.05)).collect());
        random.push(a.clone());
        random.push((0..d).map(|_| rng.random_range(-1.0..1.0)).collect());
    }
    let pairing = interleaved_pairing(2 * pairs);
    for (name, rows) in [("aligned", &aligned), ("random", &random)] {
        let batch = EmbeddingBatch::from_rows(rows, pairing.clone())?;
        let out = nt_xent_loss(&batch, t)?;
        let grad_norm = out.grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        println!("{name:>8}: loss {:.4}  |grad| {grad_norm:.4}", out.loss);
    }
    println!("chance level log(2B-1) = {:.4}", ((2 * pairs - 1) as f64).ln());

    let s = similarity_matrix(&EmbeddingBatch::from_rows(&aligned, pairing)?)?;
    println!("cosine similarities of the aligned batch:");
    for row in s.chunks(2 * pairs) {
        println!("  {}", row.iter().map(|v| format!("{v:5.2}")).collect::<Vec<_>>().join(" "));
    }
    Ok(())
}
