use rand::Rng;

use crate::graph::{LayerKind, ModelGraph};
use crate::params::{Param, ParamRole, ParamStore};
use crate::rng::seeded;

/// Xavier-uniform weights, zero biases, identity batch norm and the layer's
/// initial L2 scale. Tensors are drawn in graph order from one seeded stream.
pub fn xavier_init(graph: &ModelGraph, seed: u64) -> ParamStore {
    let mut rng = seeded(seed);
    let mut store = ParamStore::new();
    for layer in graph.layers() {
        for spec in layer.param_specs() {
            let n = spec.numel();
            let data = match spec.role {
                ParamRole::ConvWeight { fan_in, fan_out } => {
                    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                    (0..n).map(|_| rng.gen_range(-limit..limit) as f32).collect()
                }
                ParamRole::ConvBias | ParamRole::BnBeta | ParamRole::BnRunningMean => vec![0.0; n],
                ParamRole::BnGamma | ParamRole::BnRunningVar => vec![1.0; n],
                ParamRole::L2Scale => {
                    let scale = match layer.kind {
                        LayerKind::L2Norm { initial_scale, .. } => initial_scale,
                        _ => 1.0,
                    };
                    vec![scale; n]
                }
            };
            store.insert(spec.name.clone(), Param { dims: spec.dims.clone(), data });
        }
    }
    store
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{build_fire_ssd, AblationFlags, FireSsdConfig};

    #[test]
    fn deterministic_and_complete() {
        let g = build_fire_ssd(&FireSsdConfig::default(), AblationFlags::BASELINE).unwrap();
        let a = xavier_init(&g, 7);
        assert_eq!(a, xavier_init(&g, 7));
        assert_ne!(a, xavier_init(&g, 8));
        a.check_against(&g.param_specs()).unwrap();
        assert!(a.data("conv17.bias").unwrap().iter().all(|&v| v == 0.0));
        assert!(a.data("fire8_l2norm.scale").unwrap().iter().all(|&v| v == 20.0));
    }

    #[test]
    fn conv17_variance() {
        let g = build_fire_ssd(&FireSsdConfig::default(), AblationFlags::FULL).unwrap();
        let s = xavier_init(&g, 1);
        let w = s.data("conv17.weight").unwrap();
        let mean = w.iter().map(|&v| v as f64).sum::<f64>() / w.len() as f64;
        let var = w.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / w.len() as f64;
        let expect = 2.0 / (512.0 * 9.0 * 2.0);
        assert!((var / expect - 1.0).abs() < 0.05, "{var} vs {expect}");
        let gamma = s.data("fire8_ndm_bn.gamma").unwrap();
        assert!(gamma.iter().all(|&v| v == 1.0));
    }
}
