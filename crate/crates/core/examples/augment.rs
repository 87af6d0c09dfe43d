//! Cropping and Permutation views of one synthetic epoch.

use mvitime::augment::{make_views, resize_linear, split_points, segments, AugmentConfig};
use mvitime::ingest::SleepStage;
use mvitime::rng::seeded;
use mvitime::synthetic::{synthetic_epoch, SyntheticSpec};

fn sparkline(x: &[f32]) -> String {
    let bars = ['▁', '▂', '▃', '▄', '▅', '▆', '▇', '█'];
    let (lo, hi) = x.iter().fold((f32::MAX, f32::MIN), |(l, h), &v| (l.min(v), h.max(v)));
    x.iter()
        .step_by((x.len() / 60).max(1))
        .map(|&v| bars[(((v - lo) / (hi - lo + 1e-9)) * 7.0).round() as usize])
        .collect()
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let spec = SyntheticSpec {
        epoch_len: 300,
        noise: 0.05,
        ..Default::default()
    };
    let mut rng = seeded(3);
    let x = synthetic_epoch(SleepStage::S2, &spec, &mut rng);

    let cuts = split_points(x.len(), 4, &mut rng)?;
    println!("4 segments: {:?}", segments(x.len(), &cuts));
    let stretched = resize_linear(&x[cuts[0]..cuts[1]], x.len());
    println!("second segment stretched back to {} samples", stretched.len());

    let views = make_views(0, &x, &AugmentConfig::default(), &mut rng)?;
    println!("original  {}", sparkline(&x));
    println!("cropped   {}", sparkline(&views.view_a));
    println!("permuted  {}", sparkline(&views.view_b));
    Ok(())
}
