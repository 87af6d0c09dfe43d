//! Per-block output shapes and parameter counts of the XS and tiny layouts.
//!
//! cargo run --example model_shapes -- [input length]

use mvitime::model::{parameter_count, BlockConfig, ModelConfig, Mvitime};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let len = std::env::args().nth(1).map_or(Ok(3000), |s| s.parse())?;
    for (name, config) in [("xs", ModelConfig::xs(len)), ("tiny", ModelConfig::tiny(len))] {
        config.validate()?;
        let traced = Mvitime::<f32>::init(config.clone(), 0)?.traced_shapes(2)?;
        assert_eq!(traced, config.shapes());
        println!("{name}: {} parameters, {} features", parameter_count(&config)?, config.feature_dim());
        println!("  stem        -> {:?}", traced[0]);
        for (b, shape) in config.blocks.iter().zip(&traced[1..]) {
            let kind = match b {
                BlockConfig::Mv2 { stride, .. } => format!("MV2 s{stride}"),
                BlockConfig::Mvit { depth, .. } => format!("MobileViT x{depth}"),
            };
            println!("  {kind:<11} -> {shape:?}");
        }
    }
    Ok(())
}
