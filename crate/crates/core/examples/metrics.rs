//! Confusion matrix, per-class metrics and a heatmap image from label lists.
//!
//! cargo run --example metrics -- [heatmap.png]

use mvitime::eval::{heatmap_png, metrics, render_metrics, ConfusionMatrix};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let png = std::env::args().nth(1).unwrap_or_else(|| "confusion.png".into());
    // W, S1, S2, S3, REM as 0..5; S1 is the usual weak class
    let reference = [0, 0, 0, 0, 1, 1, 1, 2, 2, 2, 2, 2, 2, 3, 3, 3, 4, 4, 4, 4];
    let predicted = [0, 0, 0, 1, 2, 1, 4, 2, 2, 2, 2, 3, 2, 3, 3, 2, 4, 4, 1, 4];
    let cm = ConfusionMatrix::from_labels(&predicted, &reference)?;
    let m = metrics(&cm)?;
    print!("{}", render_metrics(&cm, &m));
    print!("{}", cm.to_csv());
    heatmap_png(&cm, png.as_ref(), 48)?;
    println!("heatmap written to {png}");
    Ok(())
}
