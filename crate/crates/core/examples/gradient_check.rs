//! Finite-difference check of a MobileViT block's gradients.

use mvitime::model::layers::mobilevit_block;
use mvitime::model::{Activation, BlockConfig, Bound, ModelConfig, ModelError, Mvitime};
use mvitime::nn::gradcheck::check_gradients;
use mvitime::nn::Tensor;
use mvitime::rng::seeded;
use rand::Rng;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let model = Mvitime::<f64>::init(ModelConfig::tiny(64), 1)?;
    let (i, depth, heads, patch, channels) = model
        .config()
        .blocks
        .iter()
        .enumerate()
        .find_map(|(i, b)| match *b {
            BlockConfig::Mvit { depth, heads, patch_size, channels, .. } => Some((i, depth, heads, patch_size, channels)),
            BlockConfig::Mv2 { .. } => None,
        })
        .ok_or("no MobileViT block")?;
    let prefix = format!("blocks.{i}");
    let tokens = model.config().token_counts()[0];
    let mut rng = seeded(2);
    let (names, mut inputs): (Vec<String>, Vec<Tensor<f64>>) = model
        .specs()
        .iter()
        .zip(model.params())
        .filter(|(s, _)| s.name.starts_with(&format!("{prefix}.")))
        .map(|(s, p)| (s.name.clone(), p.clone()))
        .unzip();
    let n = tokens * patch;
    let x = Tensor::new([2, channels, n], (0..2 * channels * n).map(|_| rng.random_range(-1.0..1.0)).collect())?;
    inputs.insert(0, x);
    let w = Tensor::new([2, channels, n], (0..2 * channels * n).map(|_| rng.random_range(-1.0..1.0)).collect())?;
    let report = check_gradients(&inputs, 1e-5, Some(16), &mut rng, |g, v| {
        let b = Bound::from_vars(names.clone(), &v[1..]);
        let y = mobilevit_block(g, &b, &prefix, v[0], depth, heads, patch, Activation::Silu)?;
        g.weighted_sum(y, &w).map_err(ModelError::from)
    })?;
    let worst = match report.worst_input {
        0 => "input",
        i => names[i - 1].as_str(),
    };
    println!(
        "{prefix}: {} tensors, {} coordinates checked, worst relative error {:.2e} ({worst})",
        inputs.len(),
        report.coordinates_checked,
        report.max_rel_error,
    );
    Ok(())
}
